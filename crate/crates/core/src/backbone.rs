//! The full feature extractor: stem, patch embedding, three VSS stages with
//! downsampling, multi-level feature aggregation (MSAA for shallow/mid
//! levels, channel aggregation for the deepest), and a top-down refinement
//! decoder that returns stride-1 features at input resolution.
//!
//! Optical and SAR branches use independent weight sets under the `"opt"`
//! and `"sar"` parameter prefixes.

use crate::conv::{conv2d, crop2d, pad_to_multiple, upsample_bilinear, PadMode};
use crate::params::{init_conv, init_uniform, ones, zeros, Binding, ParamSet};
use crate::ssm::{init_vss_params, vss_block_t};
use crate::tensor::{as3, Graph, Tensor};
use ndarray::{Array2, Array3};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("image {h}x{w} smaller than stem kernel {k}")]
    ImageTooSmall { h: usize, w: usize, k: usize },
    #[error("unknown modality tag {0}")]
    UnknownModality(String),
    #[error("expected a 4-level pyramid, got {0}")]
    WrongLevelCount(usize),
}

/// Channel-split fractions used by MSAA, fixed at 3/8, 1/2, 1/8.
pub const MSAA_SPLIT: (usize, usize, usize) = (3, 4, 1); // eighths

/// Encoder/decoder hyperparameters.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct BackboneConfig {
    pub stem_kernel: usize,
    pub stem_channels: usize,
    pub patch_size: usize,
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    pub decoder_channels: usize,
    /// States per channel in each S6 operator.
    pub state_dim: usize,
    /// Tie the four scan-direction parameter sets (equivariance tests).
    pub tie_directions: bool,
    /// Apply the aggregation modules; disabled by the ablation harness.
    pub mfa_enabled: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            stem_kernel: 7,
            stem_channels: 16,
            patch_size: 4,
            stage_channels: vec![96, 192, 384],
            blocks_per_stage: 2,
            decoder_channels: 64,
            state_dim: 8,
            tie_directions: false,
            mfa_enabled: true,
        }
    }
}

impl BackboneConfig {
    /// Desk-scale preset: [16, 32, 64] channels, one block per stage.
    pub fn tiny() -> Self {
        BackboneConfig {
            stage_channels: vec![16, 32, 64],
            blocks_per_stage: 1,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), BackboneError> {
        if self.stage_channels.len() != 3 {
            return Err(BackboneError::InvalidConfig(
                "need exactly 3 stage channel counts".into(),
            ));
        }
        if !self.stage_channels.windows(2).all(|w| w[0] < w[1]) {
            return Err(BackboneError::InvalidConfig(
                "stage channels must be strictly increasing".into(),
            ));
        }
        if self.stage_channels.iter().any(|c| c % 8 != 0) {
            return Err(BackboneError::InvalidConfig(
                "stage channels must be divisible by 8 for the MSAA split".into(),
            ));
        }
        if self.patch_size < 1 || self.blocks_per_stage < 1 || self.decoder_channels < 1 {
            return Err(BackboneError::InvalidConfig("zero-sized field".into()));
        }
        Ok(())
    }

    /// Smallest multiple every input side is padded to so that all encoder
    /// levels stay integral (patch embed + two downsamplings).
    pub fn pad_multiple(&self) -> usize {
        self.patch_size * 4
    }

    /// Channel count of each pyramid level.
    pub fn level_channels(&self) -> [usize; 4] {
        [
            self.stage_channels[0],
            self.stage_channels[0],
            self.stage_channels[1],
            self.stage_channels[2],
        ]
    }
}

/// Which modality branch a weight set belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    Optical,
    Sar,
}

impl Modality {
    pub fn tag(self) -> &'static str {
        match self {
            Modality::Optical => "opt",
            Modality::Sar => "sar",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self, BackboneError> {
        match tag {
            "opt" | "optical" => Ok(Modality::Optical),
            "sar" => Ok(Modality::Sar),
            other => Err(BackboneError::UnknownModality(other.to_string())),
        }
    }
}

/// A (C, H, W) feature map with pyramid metadata. `level` counts
/// downsamplings past the patch embedding, so `stride = P * 2^level`.
#[derive(Clone, Debug)]
pub struct FeatureMap {
    pub data: Array3<f64>,
    pub level: usize,
    pub stride: usize,
}

/// The four encoder outputs F'_0..F'_3.
#[derive(Clone, Debug)]
pub struct PyramidFeatures {
    pub levels: Vec<FeatureMap>,
}

/// Downsample count of each pyramid entry (the first two share level 0).
pub const LEVEL_OF_ENTRY: [usize; 4] = [0, 0, 1, 2];

// ---------------------------------------------------------------------------
// Tape forward pieces
// ---------------------------------------------------------------------------

fn norm_relu(x: &Tensor, bind: &Binding, prefix: &str) -> Tensor {
    x.norm2d(
        &bind.get(&format!("{prefix}.g")),
        &bind.get(&format!("{prefix}.b")),
        1e-5,
    )
    .relu()
}

/// Stride-1 stem convolution with norm and activation.
pub fn stem_t(img: &Tensor, bind: &Binding, m: &str) -> Tensor {
    let w = bind.get(&format!("{m}.stem.conv.w"));
    let k = w.shape()[2];
    let y = conv2d(
        img,
        &w,
        Some(&bind.get(&format!("{m}.stem.conv.b"))),
        1,
        (k / 2, k / 2),
        1,
        PadMode::Reflect,
    );
    norm_relu(&y, bind, &format!("{m}.stem.norm"))
}

/// Non-overlapping PxP patches linearly projected to the first stage width.
pub fn patch_embed_t(x: &Tensor, bind: &Binding, m: &str, p: usize) -> Tensor {
    conv2d(
        x,
        &bind.get(&format!("{m}.patch.w")),
        Some(&bind.get(&format!("{m}.patch.b"))),
        p,
        (0, 0),
        1,
        PadMode::Zero,
    )
}

fn downsample_t(x: &Tensor, bind: &Binding, m: &str, s: usize) -> Tensor {
    let y = conv2d(
        x,
        &bind.get(&format!("{m}.down{s}.conv.w")),
        Some(&bind.get(&format!("{m}.down{s}.conv.b"))),
        2,
        (1, 1),
        1,
        PadMode::Reflect,
    );
    norm_relu(&y, bind, &format!("{m}.down{s}.norm"))
}

/// Full encoder: returns the four pyramid tensors.
pub fn encode_t(img: &Tensor, bind: &Binding, m: &str, cfg: &BackboneConfig) -> Vec<Tensor> {
    let f0 = patch_embed_t(&stem_t(img, bind, m), bind, m, cfg.patch_size);
    let mut levels = vec![f0.clone()];
    let mut x = f0;
    for s in 0..3 {
        for b in 0..cfg.blocks_per_stage {
            x = vss_block_t(
                &x,
                bind,
                &format!("{m}.stage{s}.block{b}"),
                cfg.tie_directions,
            );
        }
        levels.push(x.clone());
        if s < 2 {
            x = downsample_t(&x, bind, m, s);
        }
    }
    levels
}

/// Channel sizes of the three MSAA slices for width `c`.
pub fn msaa_split_sizes(c: usize) -> (usize, usize, usize) {
    (
        c * MSAA_SPLIT.0 / 8,
        c * MSAA_SPLIT.1 / 8,
        c * MSAA_SPLIT.2 / 8,
    )
}

/// Multi-scale adaptive aggregation:
///
/// ```text
/// Y  = Conv1(ReLU(BN(Conv3(f))))
/// Y' = GELU(Y + alpha (Y - GAP(Y)))
/// Yb = DWConv5(Y')
/// Z' = Cat(DWConv5(Yb[:3C/8]), DWConv7(Yb[3C/8:7C/8]), Yb[7C/8:])
/// Zb = SiLU(Conv1(Z')) * SiLU(Conv1(Y'))
/// out = f + Conv1(Zb)
/// ```
pub fn msaa_t(f: &Tensor, bind: &Binding, p: &str) -> Tensor {
    let c = as3(&f.value()).dim().0;
    assert_eq!(c % 8, 0, "MSAA needs channels divisible by 8");
    let y = conv2d(
        f,
        &bind.get(&format!("{p}.conv3.w")),
        Some(&bind.get(&format!("{p}.conv3.b"))),
        1,
        (1, 1),
        1,
        PadMode::Reflect,
    );
    let y = norm_relu(&y, bind, &format!("{p}.norm"));
    let y = conv2d(
        &y,
        &bind.get(&format!("{p}.conv1a.w")),
        Some(&bind.get(&format!("{p}.conv1a.b"))),
        1,
        (0, 0),
        1,
        PadMode::Reflect,
    );
    let alpha = bind.get(&format!("{p}.alpha")).reshape(&[c, 1, 1]);
    let centered = y.sub(&y.mean_spatial());
    let yp = y.add(&alpha.mul(&centered)).gelu();
    let yb = conv2d(
        &yp,
        &bind.get(&format!("{p}.dw5.w")),
        Some(&bind.get(&format!("{p}.dw5.b"))),
        1,
        (2, 2),
        c,
        PadMode::Reflect,
    );
    let (c1, c2, _c3) = msaa_split_sizes(c);
    let s1 = yb.slice_channels(0, c1);
    let s2 = yb.slice_channels(c1, c1 + c2);
    let s3 = yb.slice_channels(c1 + c2, c);
    let s1 = conv2d(
        &s1,
        &bind.get(&format!("{p}.dw5b.w")),
        Some(&bind.get(&format!("{p}.dw5b.b"))),
        1,
        (2, 2),
        c1,
        PadMode::Reflect,
    );
    let s2 = conv2d(
        &s2,
        &bind.get(&format!("{p}.dw7.w")),
        Some(&bind.get(&format!("{p}.dw7.b"))),
        1,
        (3, 3),
        c2,
        PadMode::Reflect,
    );
    let zp = Tensor::concat_channels(&[s1, s2, s3]);
    let gate_z = conv2d(
        &zp,
        &bind.get(&format!("{p}.gate_z.w")),
        Some(&bind.get(&format!("{p}.gate_z.b"))),
        1,
        (0, 0),
        1,
        PadMode::Reflect,
    )
    .silu();
    let gate_y = conv2d(
        &yp,
        &bind.get(&format!("{p}.gate_y.w")),
        Some(&bind.get(&format!("{p}.gate_y.b"))),
        1,
        (0, 0),
        1,
        PadMode::Reflect,
    )
    .silu();
    let zb = gate_z.mul(&gate_y);
    let out = conv2d(
        &zb,
        &bind.get(&format!("{p}.out.w")),
        Some(&bind.get(&format!("{p}.out.b"))),
        1,
        (0, 0),
        1,
        PadMode::Reflect,
    );
    f.add(&out)
}

/// Channel aggregation for the deepest level:
///
/// ```text
/// Y  = Conv1(ReLU(BN(Conv3(f))))
/// Yb = GELU(DWConv3(Y))
/// Z' = Yb + (Yb - beta GELU(Conv1(Yb)))
/// out = f + Conv1(Z')
/// ```
pub fn channel_aggregation_t(f: &Tensor, bind: &Binding, p: &str) -> Tensor {
    let c = as3(&f.value()).dim().0;
    let y = conv2d(
        f,
        &bind.get(&format!("{p}.conv3.w")),
        Some(&bind.get(&format!("{p}.conv3.b"))),
        1,
        (1, 1),
        1,
        PadMode::Reflect,
    );
    let y = norm_relu(&y, bind, &format!("{p}.norm"));
    let y = conv2d(
        &y,
        &bind.get(&format!("{p}.conv1a.w")),
        Some(&bind.get(&format!("{p}.conv1a.b"))),
        1,
        (0, 0),
        1,
        PadMode::Reflect,
    );
    let yb = conv2d(
        &y,
        &bind.get(&format!("{p}.dw3.w")),
        Some(&bind.get(&format!("{p}.dw3.b"))),
        1,
        (1, 1),
        c,
        PadMode::Reflect,
    )
    .gelu();
    let beta = bind.get(&format!("{p}.beta")).reshape(&[c, 1, 1]);
    let mid = conv2d(
        &yb,
        &bind.get(&format!("{p}.mid.w")),
        Some(&bind.get(&format!("{p}.mid.b"))),
        1,
        (0, 0),
        1,
        PadMode::Reflect,
    )
    .gelu();
    let zp = yb.add(&yb.sub(&beta.mul(&mid)));
    let out = conv2d(
        &zp,
        &bind.get(&format!("{p}.out.w")),
        Some(&bind.get(&format!("{p}.out.b"))),
        1,
        (0, 0),
        1,
        PadMode::Reflect,
    );
    f.add(&out)
}

/// MSAA on the three shallow/mid levels, channel aggregation on the deepest.
pub fn mfa_dispatch_t(levels: &[Tensor], bind: &Binding, m: &str) -> Vec<Tensor> {
    assert_eq!(levels.len(), 4, "expected a 4-level pyramid");
    let mut out = Vec::with_capacity(4);
    for (i, f) in levels.iter().enumerate() {
        if i < 3 {
            out.push(msaa_t(f, bind, &format!("{m}.msaa{i}")));
        } else {
            out.push(channel_aggregation_t(f, bind, &format!("{m}.ca")));
        }
    }
    out
}

/// Top-down refinement: upsample the deeper feature, concatenate with the
/// next-shallower aggregated level, fuse; finally project and upsample to
/// the requested stride-1 resolution.
pub fn refine_decoder_t(
    zs: &[Tensor],
    bind: &Binding,
    m: &str,
    out_h: usize,
    out_w: usize,
) -> Tensor {
    assert!(!zs.is_empty());
    let mut x = zs[zs.len() - 1].clone();
    for i in (0..zs.len() - 1).rev() {
        let (_, th, tw) = as3(&zs[i].value()).dim();
        let (_, xh, xw) = as3(&x.value()).dim();
        if (xh, xw) != (th, tw) {
            x = upsample_bilinear(&x, th, tw);
        }
        let cat = Tensor::concat_channels(&[x, zs[i].clone()]);
        let y = conv2d(
            &cat,
            &bind.get(&format!("{m}.dec.fuse{i}.conv.w")),
            Some(&bind.get(&format!("{m}.dec.fuse{i}.conv.b"))),
            1,
            (1, 1),
            1,
            PadMode::Reflect,
        );
        x = norm_relu(&y, bind, &format!("{m}.dec.fuse{i}.norm"));
    }
    let x = conv2d(
        &x,
        &bind.get(&format!("{m}.dec.proj.w")),
        Some(&bind.get(&format!("{m}.dec.proj.b"))),
        1,
        (0, 0),
        1,
        PadMode::Reflect,
    );
    upsample_bilinear(&x, out_h, out_w)
}

/// Whole pipeline on the tape: pad, encode, aggregate, refine, crop back to
/// the original resolution.
pub fn extract_features_t(
    image: &Array2<f64>,
    bind: &Binding,
    modality: Modality,
    cfg: &BackboneConfig,
) -> Tensor {
    let (h, w) = image.dim();
    let padded = pad_to_multiple(image, cfg.pad_multiple());
    let (ph, pw) = padded.dim();
    let g = bind.graph();
    let img_t = g.constant(
        padded
            .into_shape_with_order(ndarray::IxDyn(&[1, ph, pw]))
            .unwrap(),
    );
    let m = modality.tag();
    let levels = encode_t(&img_t, bind, m, cfg);
    let zs = if cfg.mfa_enabled {
        mfa_dispatch_t(&levels, bind, m)
    } else {
        levels
    };
    let full = refine_decoder_t(&zs, bind, m, ph, pw);
    crop2d(&full, 0, 0, h, w)
}

// ---------------------------------------------------------------------------
// Plain-array wrappers
// ---------------------------------------------------------------------------

fn map_of(t: &Tensor, level: usize, patch: usize) -> FeatureMap {
    FeatureMap {
        data: as3(&t.value()),
        level,
        stride: patch << level,
    }
}

/// Encoder pyramid on plain arrays.
pub fn encode(
    image: &Array2<f64>,
    ps: &ParamSet,
    modality: Modality,
    cfg: &BackboneConfig,
) -> PyramidFeatures {
    let g = Graph::new_no_grad();
    let bind = Binding::new(&g, ps);
    let padded = pad_to_multiple(image, cfg.pad_multiple());
    let (ph, pw) = padded.dim();
    let img_t = g.constant(
        padded
            .into_shape_with_order(ndarray::IxDyn(&[1, ph, pw]))
            .unwrap(),
    );
    let levels = encode_t(&img_t, &bind, modality.tag(), cfg);
    PyramidFeatures {
        levels: levels
            .iter()
            .zip(LEVEL_OF_ENTRY.iter())
            .map(|(t, &lv)| map_of(t, lv, cfg.patch_size))
            .collect(),
    }
}

/// Full feature extraction on plain arrays; deterministic given weights.
pub fn extract_features(
    image: &Array2<f64>,
    ps: &ParamSet,
    modality: Modality,
    cfg: &BackboneConfig,
) -> FeatureMap {
    let g = Graph::new_no_grad();
    let bind = Binding::new(&g, ps);
    let t = extract_features_t(image, &bind, modality, cfg);
    FeatureMap {
        data: as3(&t.value()),
        level: 0,
        stride: 1,
    }
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

fn init_msaa_params(ps: &mut ParamSet, p: &str, c: usize, rng: &mut ChaCha12Rng) {
    ps.insert(&format!("{p}.conv3.w"), init_conv(c, c, 3, 3, rng));
    ps.insert(&format!("{p}.conv3.b"), zeros(&[c]));
    ps.insert(&format!("{p}.norm.g"), ones(&[c]));
    ps.insert(&format!("{p}.norm.b"), zeros(&[c]));
    ps.insert(&format!("{p}.conv1a.w"), init_conv(c, c, 1, 1, rng));
    ps.insert(&format!("{p}.conv1a.b"), zeros(&[c]));
    ps.insert(&format!("{p}.alpha"), zeros(&[c]));
    ps.insert(&format!("{p}.dw5.w"), init_conv(c, 1, 5, 5, rng));
    ps.insert(&format!("{p}.dw5.b"), zeros(&[c]));
    let (c1, c2, _) = msaa_split_sizes(c);
    ps.insert(&format!("{p}.dw5b.w"), init_conv(c1, 1, 5, 5, rng));
    ps.insert(&format!("{p}.dw5b.b"), zeros(&[c1]));
    ps.insert(&format!("{p}.dw7.w"), init_conv(c2, 1, 7, 7, rng));
    ps.insert(&format!("{p}.dw7.b"), zeros(&[c2]));
    ps.insert(&format!("{p}.gate_z.w"), init_conv(c, c, 1, 1, rng));
    ps.insert(&format!("{p}.gate_z.b"), zeros(&[c]));
    ps.insert(&format!("{p}.gate_y.w"), init_conv(c, c, 1, 1, rng));
    ps.insert(&format!("{p}.gate_y.b"), zeros(&[c]));
    ps.insert(&format!("{p}.out.w"), zeros(&[c, c, 1, 1]));
    ps.insert(&format!("{p}.out.b"), zeros(&[c]));
}

fn init_ca_params(ps: &mut ParamSet, p: &str, c: usize, rng: &mut ChaCha12Rng) {
    ps.insert(&format!("{p}.conv3.w"), init_conv(c, c, 3, 3, rng));
    ps.insert(&format!("{p}.conv3.b"), zeros(&[c]));
    ps.insert(&format!("{p}.norm.g"), ones(&[c]));
    ps.insert(&format!("{p}.norm.b"), zeros(&[c]));
    ps.insert(&format!("{p}.conv1a.w"), init_conv(c, c, 1, 1, rng));
    ps.insert(&format!("{p}.conv1a.b"), zeros(&[c]));
    ps.insert(&format!("{p}.dw3.w"), init_conv(c, 1, 3, 3, rng));
    ps.insert(&format!("{p}.dw3.b"), zeros(&[c]));
    ps.insert(&format!("{p}.beta"), zeros(&[c]));
    ps.insert(&format!("{p}.mid.w"), init_conv(c, c, 1, 1, rng));
    ps.insert(&format!("{p}.mid.b"), zeros(&[c]));
    ps.insert(&format!("{p}.out.w"), zeros(&[c, c, 1, 1]));
    ps.insert(&format!("{p}.out.b"), zeros(&[c]));
}

/// Create all parameters of one modality branch under prefix `m`.
pub fn init_backbone_params(
    ps: &mut ParamSet,
    m: &str,
    cfg: &BackboneConfig,
    rng: &mut ChaCha12Rng,
) {
    cfg.validate().expect("invalid backbone config");
    let k = cfg.stem_kernel;
    let cs = cfg.stem_channels;
    ps.insert(&format!("{m}.stem.conv.w"), init_conv(cs, 1, k, k, rng));
    ps.insert(&format!("{m}.stem.conv.b"), zeros(&[cs]));
    ps.insert(&format!("{m}.stem.norm.g"), ones(&[cs]));
    ps.insert(&format!("{m}.stem.norm.b"), zeros(&[cs]));
    let p = cfg.patch_size;
    let c0 = cfg.stage_channels[0];
    ps.insert(
        &format!("{m}.patch.w"),
        init_uniform(&[c0, cs, p, p], cs * p * p, rng),
    );
    ps.insert(&format!("{m}.patch.b"), zeros(&[c0]));
    for s in 0..3 {
        let c = cfg.stage_channels[s];
        for b in 0..cfg.blocks_per_stage {
            init_vss_params(ps, &format!("{m}.stage{s}.block{b}"), c, cfg.state_dim, rng);
        }
        if s < 2 {
            let cn = cfg.stage_channels[s + 1];
            ps.insert(&format!("{m}.down{s}.conv.w"), init_conv(cn, c, 3, 3, rng));
            ps.insert(&format!("{m}.down{s}.conv.b"), zeros(&[cn]));
            ps.insert(&format!("{m}.down{s}.norm.g"), ones(&[cn]));
            ps.insert(&format!("{m}.down{s}.norm.b"), zeros(&[cn]));
        }
    }
    let lc = cfg.level_channels();
    for i in 0..3 {
        init_msaa_params(ps, &format!("{m}.msaa{i}"), lc[i], rng);
    }
    init_ca_params(ps, &format!("{m}.ca"), lc[3], rng);
    // decoder fusions target levels 2, 1, 0
    for i in (0..3).rev() {
        let c_deep = lc[i + 1];
        let c_tgt = lc[i];
        ps.insert(
            &format!("{m}.dec.fuse{i}.conv.w"),
            init_conv(c_tgt, c_deep + c_tgt, 3, 3, rng),
        );
        ps.insert(&format!("{m}.dec.fuse{i}.conv.b"), zeros(&[c_tgt]));
        ps.insert(&format!("{m}.dec.fuse{i}.norm.g"), ones(&[c_tgt]));
        ps.insert(&format!("{m}.dec.fuse{i}.norm.b"), zeros(&[c_tgt]));
    }
    ps.insert(
        &format!("{m}.dec.proj.w"),
        init_conv(cfg.decoder_channels, lc[0], 1, 1, rng),
    );
    ps.insert(&format!("{m}.dec.proj.b"), zeros(&[cfg.decoder_channels]));
}
