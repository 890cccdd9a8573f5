//! Multi-expert feature learning: a pool of invertible geometric transforms,
//! per-expert residual heads, inverse-warp recalibration, and a learnable
//! soft router that fuses all expert branches.
//!
//! Expert 0 always carries the identity transform, so the plain pipeline is
//! in the span of the fusion. Homographies are stored in normalized [0,1]
//! coordinates and pixelized per image size, letting one pool serve both the
//! template and the reference branch.

use crate::backbone::{extract_features_t, BackboneConfig, Modality};
use crate::conv::{conv2d, warp_array, warp_bilinear, ExactPerm, PadMode};
use crate::params::{init_conv, ones, zeros, Binding, ParamSet};
use crate::tensor::{as3, Tensor};
use nalgebra::{DMatrix, DVector, Matrix3};
use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MeflError {
    #[error("homography is singular")]
    SingularHomography,
    #[error("need at least one expert")]
    EmptyPool,
    #[error("pool size {pool} does not match expert count {experts}")]
    PoolSizeMismatch { pool: usize, experts: usize },
}

/// Transform kinds the pool may draw from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    HFlip,
    VFlip,
    Rot90,
    Rot180,
    Rot270,
    Rotation,
    Homography,
}

impl TransformKind {
    pub fn is_exact(self) -> bool {
        !matches!(self, TransformKind::Rotation | TransformKind::Homography)
    }
}

/// An invertible geometric transform. Exact kinds are pure index
/// permutations; the rest resample bilinearly with reflected borders.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum TransformSpec {
    Identity,
    HFlip,
    VFlip,
    Rot90,
    Rot180,
    Rot270,
    Rotation { degrees: f64 },
    /// Source-to-dest projective map over normalized [0,1]^2 coordinates,
    /// scaled so the bottom-right entry is 1.
    Homography { matrix: [[f64; 3]; 3] },
}

fn normalize_h(m: [[f64; 3]; 3]) -> Result<[[f64; 3]; 3], MeflError> {
    let s = m[2][2];
    if s.abs() < 1e-12 {
        return Err(MeflError::SingularHomography);
    }
    let mut out = m;
    for row in &mut out {
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    Ok(out)
}

fn invert3(m: &[[f64; 3]; 3]) -> Result<[[f64; 3]; 3], MeflError> {
    let nm = Matrix3::new(
        m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2],
    );
    let inv = nm.try_inverse().ok_or(MeflError::SingularHomography)?;
    Ok([
        [inv[(0, 0)], inv[(0, 1)], inv[(0, 2)]],
        [inv[(1, 0)], inv[(1, 1)], inv[(1, 2)]],
        [inv[(2, 0)], inv[(2, 1)], inv[(2, 2)]],
    ])
}

impl TransformSpec {
    /// Exact transforms round-trip bit-exactly.
    pub fn is_exact(&self) -> bool {
        !matches!(
            self,
            TransformSpec::Rotation { .. } | TransformSpec::Homography { .. }
        )
    }

    pub fn inverse(&self) -> TransformSpec {
        match self {
            TransformSpec::Identity => TransformSpec::Identity,
            TransformSpec::HFlip => TransformSpec::HFlip,
            TransformSpec::VFlip => TransformSpec::VFlip,
            TransformSpec::Rot90 => TransformSpec::Rot270,
            TransformSpec::Rot180 => TransformSpec::Rot180,
            TransformSpec::Rot270 => TransformSpec::Rot90,
            TransformSpec::Rotation { degrees } => TransformSpec::Rotation { degrees: -degrees },
            TransformSpec::Homography { matrix } => TransformSpec::Homography {
                matrix: normalize_h(invert3(matrix).expect("stored homography invertible"))
                    .expect("stored homography invertible"),
            },
        }
    }

    fn exact_perm(&self) -> Option<ExactPerm> {
        match self {
            TransformSpec::HFlip => Some(ExactPerm::HFlip),
            TransformSpec::VFlip => Some(ExactPerm::VFlip),
            TransformSpec::Rot90 => Some(ExactPerm::Rot90),
            TransformSpec::Rot180 => Some(ExactPerm::Rot180),
            TransformSpec::Rot270 => Some(ExactPerm::Rot270),
            _ => None,
        }
    }

    /// Dest-to-src pixel map used when applying this transform to an
    /// (h, w) grid by resampling.
    fn dest_to_src_pixel(&self, h: usize, w: usize) -> Result<[[f64; 3]; 3], MeflError> {
        match self {
            TransformSpec::Rotation { degrees } => {
                let th = degrees.to_radians();
                let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
                // inverse rotation about the center
                let (c, s) = (th.cos(), th.sin());
                Ok([
                    [c, s, cx - c * cx - s * cy],
                    [-s, c, cy + s * cx - c * cy],
                    [0.0, 0.0, 1.0],
                ])
            }
            TransformSpec::Homography { matrix } => {
                // pixelize: P = S H S^-1 with S = diag(w-1, h-1, 1); sample
                // from the inverse
                let sx = (w as f64 - 1.0).max(1.0);
                let sy = (h as f64 - 1.0).max(1.0);
                let hinv = invert3(matrix)?;
                let mut p = [[0.0; 3]; 3];
                let scale = [sx, sy, 1.0];
                for r in 0..3 {
                    for c in 0..3 {
                        p[r][c] = hinv[r][c] * scale[r] / scale[c];
                    }
                }
                Ok(p)
            }
            _ => unreachable!("exact transforms use index permutations"),
        }
    }
}

/// Warp an image by `t`. Exact kinds permute; rotation and homography
/// resample bilinearly with reflected borders. Spatial dims are preserved
/// except that quarter-turns on non-square inputs swap height and width.
pub fn apply_transform(image: &Array2<f64>, t: &TransformSpec) -> Result<Array2<f64>, MeflError> {
    let (h, w) = image.dim();
    match t {
        TransformSpec::Identity => Ok(image.clone()),
        spec if spec.is_exact() => {
            let x = image
                .clone()
                .into_shape_with_order((1, h, w))
                .unwrap();
            let y = spec.exact_perm().unwrap().apply_array(&x);
            let (_, oh, ow) = y.dim();
            Ok(y.into_shape_with_order((oh, ow)).unwrap())
        }
        spec => {
            let m = spec.dest_to_src_pixel(h, w)?;
            let x = image
                .clone()
                .into_shape_with_order((1, h, w))
                .unwrap();
            let y = warp_array(&x, &m);
            Ok(y.into_shape_with_order((h, w)).unwrap())
        }
    }
}

/// Apply `t.inverse()` to a feature map's spatial grid, channelwise.
pub fn inverse_warp_features(f: &Array3<f64>, t: &TransformSpec) -> Result<Array3<f64>, MeflError> {
    match t {
        TransformSpec::Identity => Ok(f.clone()),
        spec if spec.is_exact() => Ok(spec.exact_perm().unwrap().inverse().apply_array(f)),
        spec => {
            let (_, h, w) = f.dim();
            // dest-to-src of the inverse transform is the forward map
            let m = spec.inverse().dest_to_src_pixel(h, w)?;
            Ok(warp_array(f, &m))
        }
    }
}

/// Tape version of [`inverse_warp_features`].
pub fn inverse_warp_features_t(f: &Tensor, t: &TransformSpec) -> Tensor {
    match t {
        TransformSpec::Identity => f.mul_scalar(1.0),
        spec if spec.is_exact() => spec.exact_perm().unwrap().inverse().apply_tensor(f),
        spec => {
            let (_, h, w) = as3(&f.value()).dim();
            let m = spec
                .inverse()
                .dest_to_src_pixel(h, w)
                .expect("stored homography invertible");
            warp_bilinear(f, &m)
        }
    }
}

/// Softmax routing weights, computed with max subtraction.
pub fn soft_router_weights(alpha: &Array1<f64>) -> Array1<f64> {
    let max = alpha.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e = alpha.mapv(|x| (x - max).exp());
    let sum = e.sum();
    e.mapv(|x| x / sum)
}

/// How expert branches are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    SoftRouter,
    Uniform,
    /// Evaluation-harness mode: renormalized softmax over the two largest
    /// router logits, remaining experts skipped.
    SparseTop2,
}

/// Pool construction and routing knobs.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MeflConfig {
    pub n_experts: usize,
    pub kinds: Vec<TransformKind>,
    pub rotation_max_deg: f64,
    /// Corner jitter bound as a fraction of the image side.
    pub homography_jitter: f64,
    pub eval_pool_seed: u64,
    pub fusion: Fusion,
}

impl Default for MeflConfig {
    fn default() -> Self {
        MeflConfig {
            n_experts: 4,
            kinds: vec![
                TransformKind::HFlip,
                TransformKind::VFlip,
                TransformKind::Rot90,
                TransformKind::Rot180,
                TransformKind::Rot270,
                TransformKind::Rotation,
                TransformKind::Homography,
            ],
            rotation_max_deg: 30.0,
            homography_jitter: 0.05,
            eval_pool_seed: 0,
            fusion: Fusion::SoftRouter,
        }
    }
}

fn sample_spec(kind: TransformKind, cfg: &MeflConfig, rng: &mut ChaCha12Rng) -> TransformSpec {
    match kind {
        TransformKind::HFlip => TransformSpec::HFlip,
        TransformKind::VFlip => TransformSpec::VFlip,
        TransformKind::Rot90 => TransformSpec::Rot90,
        TransformKind::Rot180 => TransformSpec::Rot180,
        TransformKind::Rot270 => TransformSpec::Rot270,
        TransformKind::Rotation => TransformSpec::Rotation {
            degrees: rng.gen_range(-cfg.rotation_max_deg..=cfg.rotation_max_deg),
        },
        TransformKind::Homography => {
            let j = cfg.homography_jitter;
            let src = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)];
            let dst: Vec<(f64, f64)> = src
                .iter()
                .map(|&(x, y)| (x + rng.gen_range(-j..=j), y + rng.gen_range(-j..=j)))
                .collect();
            let m = homography_from_corners(&src, &dst).expect("small jitter is invertible");
            TransformSpec::Homography { matrix: m }
        }
    }
}

/// Direct linear transform from four point correspondences.
pub fn homography_from_corners(
    src: &[(f64, f64); 4],
    dst: &[(f64, f64)],
) -> Result<[[f64; 3]; 3], MeflError> {
    let mut a = DMatrix::<f64>::zeros(8, 8);
    let mut b = DVector::<f64>::zeros(8);
    for (i, (&(x, y), &(xp, yp))) in src.iter().zip(dst.iter()).enumerate() {
        a[(2 * i, 0)] = x;
        a[(2 * i, 1)] = y;
        a[(2 * i, 2)] = 1.0;
        a[(2 * i, 6)] = -x * xp;
        a[(2 * i, 7)] = -y * xp;
        b[2 * i] = xp;
        a[(2 * i + 1, 3)] = x;
        a[(2 * i + 1, 4)] = y;
        a[(2 * i + 1, 5)] = 1.0;
        a[(2 * i + 1, 6)] = -x * yp;
        a[(2 * i + 1, 7)] = -y * yp;
        b[2 * i + 1] = yp;
    }
    let sol = a
        .lu()
        .solve(&b)
        .ok_or(MeflError::SingularHomography)?;
    normalize_h([
        [sol[0], sol[1], sol[2]],
        [sol[3], sol[4], sol[5]],
        [sol[6], sol[7], 1.0],
    ])
}

/// Training pool: identity at index 0, the rest sampled from the configured
/// kinds. Resampled per batch.
pub fn build_transform_pool(
    n_experts: usize,
    rng: &mut ChaCha12Rng,
    cfg: &MeflConfig,
) -> Result<Vec<TransformSpec>, MeflError> {
    if n_experts < 1 {
        return Err(MeflError::EmptyPool);
    }
    let mut pool = vec![TransformSpec::Identity];
    for _ in 1..n_experts {
        if cfg.kinds.is_empty() {
            pool.push(TransformSpec::Identity);
        } else {
            let kind = cfg.kinds[rng.gen_range(0..cfg.kinds.len())];
            pool.push(sample_spec(kind, cfg, rng));
        }
    }
    Ok(pool)
}

/// Evaluation pool: identity plus exact transforms only, frozen under the
/// configured seed for determinism.
pub fn eval_transform_pool(cfg: &MeflConfig) -> Vec<TransformSpec> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut exact: Vec<TransformSpec> = cfg
        .kinds
        .iter()
        .filter(|k| k.is_exact())
        .map(|k| match k {
            TransformKind::HFlip => TransformSpec::HFlip,
            TransformKind::VFlip => TransformSpec::VFlip,
            TransformKind::Rot90 => TransformSpec::Rot90,
            TransformKind::Rot180 => TransformSpec::Rot180,
            TransformKind::Rot270 => TransformSpec::Rot270,
            _ => unreachable!(),
        })
        .collect();
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.eval_pool_seed);
    exact.shuffle(&mut rng);
    let mut pool = vec![TransformSpec::Identity];
    let mut i = 0;
    while pool.len() < cfg.n_experts {
        if exact.is_empty() {
            pool.push(TransformSpec::Identity);
        } else {
            pool.push(exact[i % exact.len()].clone());
            i += 1;
        }
    }
    pool
}

/// Residual expert head: 3x3 conv, norm, activation, zero-initialized 1x1
/// projection back onto the trunk.
pub fn expert_head_t(x: &Tensor, bind: &Binding, p: &str) -> Tensor {
    let y = conv2d(
        x,
        &bind.get(&format!("{p}.conv3.w")),
        Some(&bind.get(&format!("{p}.conv3.b"))),
        1,
        (1, 1),
        1,
        PadMode::Reflect,
    );
    let y = y
        .norm2d(
            &bind.get(&format!("{p}.norm.g")),
            &bind.get(&format!("{p}.norm.b")),
            1e-5,
        )
        .relu();
    let y = conv2d(
        &y,
        &bind.get(&format!("{p}.out.w")),
        Some(&bind.get(&format!("{p}.out.b"))),
        1,
        (0, 0),
        1,
        PadMode::Reflect,
    );
    x.add(&y)
}

/// Per-expert scalar fusion weights as tape tensors (shape [1] each).
/// Experts with a `None` weight are skipped entirely (sparse mode).
pub fn router_weights_t(bind: &Binding, fusion: Fusion, n: usize) -> Vec<Option<Tensor>> {
    match fusion {
        Fusion::SoftRouter => {
            let w = bind.get("mefl.router.alpha").softmax();
            (0..n).map(|i| Some(w.gather(&[i]))).collect()
        }
        Fusion::Uniform => {
            let g = bind.graph();
            (0..n)
                .map(|_| {
                    Some(g.constant(ndarray::ArrayD::from_elem(
                        ndarray::IxDyn(&[1]),
                        1.0 / n as f64,
                    )))
                })
                .collect()
        }
        Fusion::SparseTop2 => {
            let alpha = bind.get("mefl.router.alpha");
            let av = crate::tensor::as1(&alpha.value());
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&i, &j| av[j].partial_cmp(&av[i]).unwrap().then(i.cmp(&j)));
            let keep = &idx[..2.min(n)];
            let w2 = alpha.gather(keep).softmax();
            let mut out: Vec<Option<Tensor>> = vec![None; n];
            for (k, &i) in keep.iter().enumerate() {
                out[i] = Some(w2.gather(&[k]));
            }
            out
        }
    }
}

/// Convex fusion of recalibrated expert features.
pub fn fuse_features_t(feats: &[Tensor], weights: &[Option<Tensor>]) -> Tensor {
    assert_eq!(feats.len(), weights.len());
    let mut acc: Option<Tensor> = None;
    for (f, w) in feats.iter().zip(weights.iter()) {
        if let Some(w) = w {
            let term = f.mul(w);
            acc = Some(match acc {
                Some(a) => a.add(&term),
                None => term,
            });
        }
    }
    acc.expect("at least one active expert")
}

/// Full multi-expert forward for one image: warp, extract, expert head,
/// recalibrate, fuse.
pub fn mefl_forward_t(
    image: &Array2<f64>,
    bind: &Binding,
    modality: Modality,
    bb: &BackboneConfig,
    pool: &[TransformSpec],
    fusion: Fusion,
) -> Result<Tensor, MeflError> {
    let n = pool.len();
    if n == 0 {
        return Err(MeflError::EmptyPool);
    }
    let weights = router_weights_t(bind, fusion, n);
    let mut branches = Vec::with_capacity(n);
    for (i, spec) in pool.iter().enumerate() {
        if weights[i].is_none() {
            // sparse mode skips the branch; placeholder keeps indices aligned
            branches.push(None);
            continue;
        }
        let warped = apply_transform(image, spec)?;
        let feats = extract_features_t(&warped, bind, modality, bb);
        let expert = expert_head_t(&feats, bind, &format!("mefl.expert{i}"));
        branches.push(Some(inverse_warp_features_t(&expert, spec)));
    }
    let active: Vec<Tensor> = branches.iter().flatten().cloned().collect();
    let active_w: Vec<Option<Tensor>> = weights.into_iter().flatten().map(Some).collect();
    Ok(fuse_features_t(&active, &active_w))
}

/// Router and expert-head parameters. Heads are shared across modalities.
pub fn init_mefl_params(
    ps: &mut ParamSet,
    n_experts: usize,
    feat_channels: usize,
    rng: &mut ChaCha12Rng,
) {
    ps.insert("mefl.router.alpha", zeros(&[n_experts]));
    let c = feat_channels;
    for n in 0..n_experts {
        let p = format!("mefl.expert{n}");
        ps.insert(&format!("{p}.conv3.w"), init_conv(c, c, 3, 3, rng));
        ps.insert(&format!("{p}.conv3.b"), zeros(&[c]));
        ps.insert(&format!("{p}.norm.g"), ones(&[c]));
        ps.insert(&format!("{p}.norm.b"), zeros(&[c]));
        // zero projection: a fresh head is the identity
        ps.insert(&format!("{p}.out.w"), zeros(&[c, c, 1, 1]));
        ps.insert(&format!("{p}.out.b"), zeros(&[c]));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{extract_features, init_backbone_params};
    use crate::tensor::Graph;
    use ndarray::{ArrayD, IxDyn};
    use rand::SeedableRng;

    fn smooth_image(h: usize, w: usize) -> Array2<f64> {
        Array2::from_shape_fn((h, w), |(r, c)| {
            let x = c as f64 / w as f64;
            let y = r as f64 / h as f64;
            0.5 + 0.3 * (2.0 * std::f64::consts::PI * x).sin() * (std::f64::consts::PI * y).cos()
                + 0.1 * (3.0 * x + 2.0 * y)
        })
    }

    fn psnr(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        let mse = (a - b).mapv(|v| v * v).mean().unwrap();
        10.0 * (1.0 / mse).log10()
    }

    #[test]
    fn pool_construction() {
        let cfg = MeflConfig::default();
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let p1 = build_transform_pool(1, &mut rng, &cfg).unwrap();
        assert_eq!(p1, vec![TransformSpec::Identity]);

        assert!(matches!(
            build_transform_pool(0, &mut rng, &cfg),
            Err(MeflError::EmptyPool)
        ));

        let exact_cfg = MeflConfig {
            kinds: vec![
                TransformKind::HFlip,
                TransformKind::VFlip,
                TransformKind::Rot90,
                TransformKind::Rot180,
                TransformKind::Rot270,
            ],
            ..MeflConfig::default()
        };
        let mut rng_a = ChaCha12Rng::seed_from_u64(7);
        let mut rng_b = ChaCha12Rng::seed_from_u64(7);
        let pa = build_transform_pool(4, &mut rng_a, &exact_cfg).unwrap();
        let pb = build_transform_pool(4, &mut rng_b, &exact_cfg).unwrap();
        assert_eq!(pa, pb, "seed replay must reproduce the pool");
        assert!(pa.iter().all(|t| t.is_exact()));
        assert_eq!(pa[0], TransformSpec::Identity);
        assert_eq!(
            pa.iter().filter(|t| **t == TransformSpec::Identity).count(),
            1
        );

        let def = build_transform_pool(4, &mut rng, &cfg).unwrap();
        assert_eq!(def[0], TransformSpec::Identity);
    }

    #[test]
    fn eval_pool_frozen_and_exact() {
        let cfg = MeflConfig {
            n_experts: 4,
            ..MeflConfig::default()
        };
        let a = eval_transform_pool(&cfg);
        let b = eval_transform_pool(&cfg);
        assert_eq!(a, b);
        assert_eq!(a[0], TransformSpec::Identity);
        assert!(a.iter().all(|t| t.is_exact()));
    }

    #[test]
    fn transforms_identity_and_involution() {
        let img = smooth_image(16, 16);
        let id = apply_transform(&img, &TransformSpec::Identity).unwrap();
        assert_eq!(id, img);

        let once = apply_transform(&img, &TransformSpec::HFlip).unwrap();
        let twice = apply_transform(&once, &TransformSpec::HFlip).unwrap();
        assert_eq!(twice, img, "hflip must be a bit-exact involution");
    }

    #[test]
    fn rotation_roundtrip_psnr() {
        let img = smooth_image(64, 64);
        let fwd = apply_transform(&img, &TransformSpec::Rotation { degrees: 30.0 }).unwrap();
        let back = apply_transform(&fwd, &TransformSpec::Rotation { degrees: -30.0 }).unwrap();
        // compare away from the borders where reflection padding dominates
        let inner = ndarray::s![8..56, 8..56];
        let p = psnr(&img.slice(inner).to_owned(), &back.slice(inner).to_owned());
        assert!(p >= 30.0, "rotation roundtrip PSNR {p:.1} dB");
    }

    #[test]
    fn inverse_warp_exact_roundtrips() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        use rand::Rng;
        let f = Array3::from_shape_fn((3, 8, 8), |_| rng.gen_range(-1.0..1.0));
        for spec in [
            TransformSpec::Identity,
            TransformSpec::HFlip,
            TransformSpec::VFlip,
            TransformSpec::Rot90,
            TransformSpec::Rot180,
            TransformSpec::Rot270,
        ] {
            // inverse-warp the result of the forward warp on the grid
            let warped = match &spec {
                TransformSpec::Identity => f.clone(),
                s => s.exact_perm().unwrap().apply_array(&f),
            };
            let back = inverse_warp_features(&warped, &spec).unwrap();
            assert_eq!(back, f, "{spec:?}");
        }
    }

    #[test]
    fn inverse_warp_homography_roundtrip_error() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let cfg = MeflConfig::default();
        let spec = sample_spec(TransformKind::Homography, &cfg, &mut rng);
        let img = smooth_image(64, 64);
        let f = img
            .clone()
            .into_shape_with_order((1, 64, 64))
            .unwrap();
        let warped = match &spec {
            TransformSpec::Homography { .. } => {
                let m = spec.dest_to_src_pixel(64, 64).unwrap();
                warp_array(&f, &m)
            }
            _ => unreachable!(),
        };
        let back = inverse_warp_features(&warped, &spec).unwrap();
        let num = (&back - &f).mapv(|v| v * v).sum().sqrt();
        let den = f.mapv(|v| v * v).sum().sqrt();
        assert!(num / den <= 0.05, "roundtrip rel L2 {}", num / den);
    }

    #[test]
    fn inverse_of_inverse_is_identity() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let cfg = MeflConfig::default();
        for kind in [
            TransformKind::HFlip,
            TransformKind::Rot90,
            TransformKind::Rotation,
            TransformKind::Homography,
        ] {
            let t = sample_spec(kind, &cfg, &mut rng);
            let tt = t.inverse().inverse();
            match (&t, &tt) {
                (
                    TransformSpec::Homography { matrix: a },
                    TransformSpec::Homography { matrix: b },
                ) => {
                    for r in 0..3 {
                        for c in 0..3 {
                            assert!((a[r][c] - b[r][c]).abs() < 1e-9);
                        }
                    }
                }
                _ => assert_eq!(t, tt),
            }
        }
    }

    #[test]
    fn homography_normalized() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let cfg = MeflConfig::default();
        for _ in 0..10 {
            if let TransformSpec::Homography { matrix } =
                sample_spec(TransformKind::Homography, &cfg, &mut rng)
            {
                assert!((matrix[2][2] - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn router_weights_properties() {
        let w = soft_router_weights(&ndarray::arr1(&[3.0, 3.0, 3.0, 3.0]));
        for v in w.iter() {
            assert!((v - 0.25).abs() < 1e-15);
        }

        let w = soft_router_weights(&ndarray::arr1(&[
            1.0f64.ln(),
            2.0f64.ln(),
            3.0f64.ln(),
            4.0f64.ln(),
        ]));
        let expect = [0.1, 0.2, 0.3, 0.4];
        for (v, e) in w.iter().zip(expect.iter()) {
            assert!((v - e).abs() < 1e-12);
        }

        let a = ndarray::arr1(&[0.3, -1.2, 0.9]);
        let w1 = soft_router_weights(&a);
        let w2 = soft_router_weights(&a.mapv(|x| x + 1000.0));
        for (x, y) in w1.iter().zip(w2.iter()) {
            // the +1000 itself rounds the logits, so compare at ulp scale
            assert!((x - y).abs() <= 1e-13, "shift invariance: {x} vs {y}");
        }
        assert!(w1.iter().sum::<f64>() - 1.0 < 1e-12);
        assert!(w1.iter().all(|&v| v > 0.0));
        // argmax(w) = argmax(alpha)
        let am = |v: &Array1<f64>| {
            v.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0
        };
        assert_eq!(am(&w1), am(&a.to_owned()));
    }

    fn tiny_setup(n_experts: usize, seed: u64) -> (BackboneConfig, ParamSet) {
        let bb = BackboneConfig {
            stem_channels: 4,
            patch_size: 2,
            stage_channels: vec![8, 16, 24],
            blocks_per_stage: 1,
            decoder_channels: 8,
            state_dim: 3,
            ..Default::default()
        };
        let mut ps = ParamSet::new();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        init_backbone_params(&mut ps, "opt", &bb, &mut rng);
        init_backbone_params(&mut ps, "sar", &bb, &mut rng);
        init_mefl_params(&mut ps, n_experts, bb.decoder_channels, &mut rng);
        (bb, ps)
    }

    #[test]
    fn degenerate_single_identity_expert_equals_backbone() {
        let (bb, ps) = tiny_setup(1, 10);
        let img = smooth_image(16, 16);
        let pool = vec![TransformSpec::Identity];
        let g = Graph::new_no_grad();
        let bind = Binding::new(&g, &ps);
        let out = mefl_forward_t(&img, &bind, Modality::Optical, &bb, &pool, Fusion::SoftRouter)
            .unwrap();
        let plain = extract_features(&img, &ps, Modality::Optical, &bb);
        assert_eq!(
            as3(&out.value()),
            plain.data,
            "identity expert with zeroed head must equal the plain backbone bit-exactly"
        );
    }

    #[test]
    fn saturated_softmax_selects_single_branch() {
        let (bb, mut ps) = tiny_setup(2, 11);
        ps.set("mefl.router.alpha", {
            let mut a = ArrayD::zeros(IxDyn(&[2]));
            a[[1]] = -50.0;
            a
        });
        let img = smooth_image(16, 16);
        let pool = vec![TransformSpec::Identity, TransformSpec::HFlip];
        let g = Graph::new_no_grad();
        let bind = Binding::new(&g, &ps);
        let fused = mefl_forward_t(&img, &bind, Modality::Optical, &bb, &pool, Fusion::SoftRouter)
            .unwrap();
        let plain = extract_features(&img, &ps, Modality::Optical, &bb);
        let num = (&as3(&fused.value()) - &plain.data)
            .mapv(|v| v * v)
            .sum()
            .sqrt();
        let den = plain.data.mapv(|v| v * v).sum().sqrt();
        assert!(num / den <= 1e-8, "rel err {}", num / den);
    }

    #[test]
    fn constant_image_constant_output() {
        let (bb, ps) = tiny_setup(4, 12);
        let img = Array2::from_elem((16, 16), 0.42);
        let pool = vec![
            TransformSpec::Identity,
            TransformSpec::HFlip,
            TransformSpec::Rot180,
            TransformSpec::VFlip,
        ];
        let g = Graph::new_no_grad();
        let bind = Binding::new(&g, &ps);
        let out = mefl_forward_t(&img, &bind, Modality::Sar, &bb, &pool, Fusion::SoftRouter)
            .unwrap();
        let v = as3(&out.value());
        // spatial variance per channel should be ~0
        for ch in v.axis_iter(ndarray::Axis(0)) {
            let mu = ch.mean().unwrap();
            let var = ch.mapv(|x| (x - mu) * (x - mu)).mean().unwrap();
            assert!(var < 1e-20, "spatial variance {var}");
        }
    }

    #[test]
    fn fusion_is_linear_in_features() {
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        use rand::Rng;
        let g = Graph::new_no_grad();
        let mk = |rng: &mut ChaCha12Rng| {
            g.leaf(ArrayD::from_shape_fn(IxDyn(&[2, 3, 3]), |_| {
                rng.gen_range(-1.0..1.0)
            }))
        };
        let f1 = [mk(&mut rng), mk(&mut rng)];
        let f2 = [mk(&mut rng), mk(&mut rng)];
        let w = [
            Some(g.constant(ArrayD::from_elem(IxDyn(&[1]), 0.3))),
            Some(g.constant(ArrayD::from_elem(IxDyn(&[1]), 0.7))),
        ];
        let sum = [f1[0].add(&f2[0]), f1[1].add(&f2[1])];
        let lhs = fuse_features_t(&sum, &w);
        let rhs = fuse_features_t(&f1, &w).add(&fuse_features_t(&f2, &w));
        let diff = (&lhs.value() - &rhs.value())
            .mapv(f64::abs)
            .iter()
            .cloned()
            .fold(0.0, f64::max);
        assert!(diff < 1e-12, "superposition violated: {diff}");
    }

    #[test]
    fn uniform_fusion_equals_soft_router_with_equal_alpha() {
        let (bb, ps) = tiny_setup(2, 14);
        // alpha is zero-initialized (equal) already
        let img = smooth_image(16, 16);
        let pool = vec![TransformSpec::Identity, TransformSpec::HFlip];
        let g = Graph::new_no_grad();
        let bind = Binding::new(&g, &ps);
        let soft = mefl_forward_t(&img, &bind, Modality::Optical, &bb, &pool, Fusion::SoftRouter)
            .unwrap();
        let g2 = Graph::new_no_grad();
        let bind2 = Binding::new(&g2, &ps);
        let unif = mefl_forward_t(&img, &bind2, Modality::Optical, &bb, &pool, Fusion::Uniform)
            .unwrap();
        assert_eq!(soft.value(), unif.value());
    }

    #[test]
    fn sparse_top2_keeps_two_experts() {
        let (bb, mut ps) = tiny_setup(4, 15);
        ps.set("mefl.router.alpha", {
            let mut a = ArrayD::zeros(IxDyn(&[4]));
            a[[1]] = 2.0;
            a[[3]] = 1.0;
            a
        });
        let g = Graph::new();
        let bind = Binding::new(&g, &ps);
        let w = router_weights_t(&bind, Fusion::SparseTop2, 4);
        assert!(w[0].is_none() && w[2].is_none());
        let w1 = w[1].as_ref().unwrap().scalar();
        let w3 = w[3].as_ref().unwrap().scalar();
        assert!((w1 + w3 - 1.0).abs() < 1e-12);
        assert!(w1 > w3);
        let _ = bb;
    }

    #[test]
    fn mefl_gradients_flow_to_router_and_heads() {
        let (bb, ps) = tiny_setup(2, 16);
        let img = smooth_image(8, 8);
        let pool = vec![TransformSpec::Identity, TransformSpec::HFlip];
        let g = Graph::new();
        let bind = Binding::new(&g, &ps);
        let out = mefl_forward_t(&img, &bind, Modality::Optical, &bb, &pool, Fusion::SoftRouter)
            .unwrap();
        let loss = out.mul(&out).sum_all();
        let grads = g.backward(&loss);
        let gmap = bind.collect_grads(&grads);
        let alpha_g = gmap.get("mefl.router.alpha").unwrap();
        assert!(alpha_g.iter().any(|&v| v != 0.0), "router gets gradient");
        for n in 0..2 {
            let head_g = gmap.get(&format!("mefl.expert{n}.out.w")).unwrap();
            assert!(
                head_g.iter().any(|&v| v != 0.0),
                "expert {n} head gets gradient"
            );
        }
    }
}
