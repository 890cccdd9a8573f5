//! Dataset ingestion and synthesis.
//!
//! Real data enters through a JSON-lines manifest of optical/SAR pairs.
//! The synthetic generator renders smooth-shaded geometric scenes as the
//! optical image and derives a pseudo-SAR counterpart by edge emphasis and
//! multiplicative gamma speckle: a nonlinear intensity relation over shared
//! geometry, solvable but not trivial for raw-intensity correlation.

use image::GenericImageView;
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("manifest not found: {0}")]
    MissingFile(PathBuf),
    #[error("malformed manifest record at line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("duplicate pair_id {0}")]
    DuplicatePairId(String),
    #[error("pair {pair_id}: path does not resolve: {path}")]
    DanglingPath { pair_id: String, path: PathBuf },
    #[error("pair {pair_id}: {reason}")]
    BadImage { pair_id: String, reason: String },
    #[error("template {t} larger than source {h}x{w}")]
    TemplateTooLarge { t: usize, h: usize, w: usize },
    #[error("gt offset ({r}, {c}) out of bounds for {ho}x{wo} reference, {hs}x{ws} template")]
    GtOutOfBounds {
        r: usize,
        c: usize,
        ho: usize,
        wo: usize,
        hs: usize,
        ws: usize,
    },
    #[error("noise variance must be in [0, 100], got {0}")]
    BadVariance(f64),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// One co-registered pair: optical reference, SAR template (or full SAR
/// scene when no ground truth is attached), and the template's top-left
/// offset when known.
#[derive(Clone, Debug)]
pub struct ImagePair {
    pub pair_id: String,
    /// Grayscale reference in [0, 1].
    pub optical: Array2<f64>,
    /// Grayscale template (or full co-registered scene) in [0, 1].
    pub sar: Array2<f64>,
    pub gt_offset: Option<(usize, usize)>,
}

impl ImagePair {
    pub fn validate(&self) -> Result<(), DataError> {
        if let Some((r, c)) = self.gt_offset {
            let (ho, wo) = self.optical.dim();
            let (hs, ws) = self.sar.dim();
            if hs > ho || ws > wo || r > ho - hs || c > wo - ws {
                return Err(DataError::GtOutOfBounds {
                    r,
                    c,
                    ho,
                    wo,
                    hs,
                    ws,
                });
            }
        }
        Ok(())
    }
}

/// One manifest line.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub pair_id: String,
    pub optical_path: String,
    pub sar_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_row: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_col: Option<usize>,
}

/// Validated manifest with deterministic record order (file order).
#[derive(Clone, Debug)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
    pub root: PathBuf,
}

/// Parse and validate a JSON-lines manifest. Paths resolve relative to the
/// manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Manifest, DataError> {
    if !path.exists() {
        return Err(DataError::MissingFile(path.to_path_buf()));
    }
    let root = path
        .parent()
        .map(|p| p.to_path_buf())
        .unwrap_or_else(|| PathBuf::from("."));
    let text = std::fs::read_to_string(path)?;
    let mut records = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord =
            serde_json::from_str(line).map_err(|e| DataError::MalformedRecord {
                line: i + 1,
                reason: e.to_string(),
            })?;
        if rec.gt_row.is_some() != rec.gt_col.is_some() {
            return Err(DataError::MalformedRecord {
                line: i + 1,
                reason: format!("pair {}: gt_row and gt_col must come together", rec.pair_id),
            });
        }
        if !seen.insert(rec.pair_id.clone()) {
            return Err(DataError::DuplicatePairId(rec.pair_id));
        }
        for p in [&rec.optical_path, &rec.sar_path] {
            let full = root.join(p);
            if !full.exists() {
                return Err(DataError::DanglingPath {
                    pair_id: rec.pair_id.clone(),
                    path: full,
                });
            }
        }
        records.push(rec);
    }
    Ok(Manifest { records, root })
}

impl Manifest {
    pub fn load_pair(&self, rec: &ManifestRecord) -> Result<ImagePair, DataError> {
        let optical = load_image(&self.root.join(&rec.optical_path)).map_err(|e| {
            DataError::BadImage {
                pair_id: rec.pair_id.clone(),
                reason: e.to_string(),
            }
        })?;
        let sar = load_image(&self.root.join(&rec.sar_path)).map_err(|e| DataError::BadImage {
            pair_id: rec.pair_id.clone(),
            reason: e.to_string(),
        })?;
        let pair = ImagePair {
            pair_id: rec.pair_id.clone(),
            optical,
            sar,
            gt_offset: rec.gt_row.map(|r| (r, rec.gt_col.unwrap())),
        };
        pair.validate()?;
        Ok(pair)
    }

    pub fn load_all(&self) -> Result<Vec<ImagePair>, DataError> {
        self.records.iter().map(|r| self.load_pair(r)).collect()
    }
}

/// Load an 8- or 16-bit grayscale PNG/TIFF, normalized to [0, 1].
pub fn load_image(path: &Path) -> Result<Array2<f64>, String> {
    let img = image::open(path).map_err(|e| e.to_string())?;
    let (w, h) = img.dimensions();
    let gray = img.to_luma16();
    Ok(Array2::from_shape_fn(
        (h as usize, w as usize),
        |(r, c)| gray.get_pixel(c as u32, r as u32).0[0] as f64 / 65535.0,
    ))
}

/// Write a [0, 1] image as 16-bit grayscale PNG.
pub fn save_image(path: &Path, img: &Array2<f64>) -> Result<(), String> {
    let (h, w) = img.dim();
    let mut buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(w as u32, h as u32);
    for r in 0..h {
        for c in 0..w {
            let v = (img[[r, c]].clamp(0.0, 1.0) * 65535.0).round() as u16;
            buf.put_pixel(c as u32, r as u32, image::Luma([v]));
        }
    }
    buf.save(path).map_err(|e| e.to_string())
}

/// Deterministic RNG derived from a seed and a stream of context labels.
/// Parallel and serial consumers derive identical randomness.
pub fn derive_rng(seed: u64, parts: &[&str]) -> ChaCha12Rng {
    use rand::SeedableRng;
    let mut h = seed ^ 0x9e3779b97f4a7c15;
    for part in parts {
        for &b in part.as_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0xff51afd7ed558ccd);
            h ^= h >> 33;
        }
        h = h.wrapping_add(0x9e3779b97f4a7c15);
    }
    ChaCha12Rng::seed_from_u64(h)
}

/// Uniform-random template crop; the returned offset is the ground truth.
pub fn crop_template(
    sar_full: &Array2<f64>,
    template_size: usize,
    rng: &mut ChaCha12Rng,
) -> Result<(Array2<f64>, (usize, usize)), DataError> {
    let (h, w) = sar_full.dim();
    if template_size > h || template_size > w {
        return Err(DataError::TemplateTooLarge {
            t: template_size,
            h,
            w,
        });
    }
    let r = rng.gen_range(0..=h - template_size);
    let c = rng.gen_range(0..=w - template_size);
    let t = sar_full
        .slice(ndarray::s![r..r + template_size, c..c + template_size])
        .to_owned();
    Ok((t, (r, c)))
}

/// Synthetic-scene knobs.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SynthConfig {
    pub image_size: usize,
    pub template_size: usize,
    pub n_shapes: usize,
    /// Looks of the multiplicative gamma speckle model.
    pub speckle_looks: u32,
    /// Weight of the gradient-magnitude term in the pseudo-SAR mix.
    pub edge_gain: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            image_size: 64,
            template_size: 48,
            n_shapes: 6,
            speckle_looks: 4,
            edge_gain: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.template_size >= self.image_size {
            return Err(DataError::TemplateTooLarge {
                t: self.template_size,
                h: self.image_size,
                w: self.image_size,
            });
        }
        Ok(())
    }
}

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn box_blur(img: &Array2<f64>) -> Array2<f64> {
    let (h, w) = img.dim();
    let ref_idx = |i: i64, n: usize| crate::conv::reflect_idx(i, n as i64);
    let mut out = Array2::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    acc += img[[ref_idx(r as i64 + dr, h), ref_idx(c as i64 + dc, w)]];
                }
            }
            out[[r, c]] = acc / 9.0;
        }
    }
    out
}

/// Render the noiseless optical scene: a shaded gradient background with
/// random ellipses and convex polygons, lightly blurred.
fn render_optical(cfg: &SynthConfig, rng: &mut ChaCha12Rng) -> Array2<f64> {
    let n = cfg.image_size;
    let nf = n as f64;
    let (a, bx, by) = (
        rng.gen_range(0.2..0.6),
        rng.gen_range(-0.3..0.3),
        rng.gen_range(-0.3..0.3),
    );
    let mut img = Array2::from_shape_fn((n, n), |(r, c)| {
        a + bx * (c as f64 / nf) + by * (r as f64 / nf)
    });
    for _ in 0..cfg.n_shapes {
        let intensity = rng.gen_range(-0.45..0.45);
        if rng.gen_bool(0.5) {
            // rotated ellipse
            let cx = rng.gen_range(0.1 * nf..0.9 * nf);
            let cy = rng.gen_range(0.1 * nf..0.9 * nf);
            let ax = rng.gen_range(0.08 * nf..0.3 * nf);
            let ay = rng.gen_range(0.08 * nf..0.3 * nf);
            let th = rng.gen_range(0.0..std::f64::consts::PI);
            let (st, ct) = th.sin_cos();
            for r in 0..n {
                for c in 0..n {
                    let dx = c as f64 - cx;
                    let dy = r as f64 - cy;
                    let u = (ct * dx + st * dy) / ax;
                    let v = (-st * dx + ct * dy) / ay;
                    let rad = (u * u + v * v).sqrt();
                    let cov = 1.0 - smoothstep(0.92, 1.08, rad);
                    img[[r, c]] += intensity * cov;
                }
            }
        } else {
            // convex polygon around a center
            let cx = rng.gen_range(0.15 * nf..0.85 * nf);
            let cy = rng.gen_range(0.15 * nf..0.85 * nf);
            let k = rng.gen_range(3..=5usize);
            let rad = rng.gen_range(0.1 * nf..0.28 * nf);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let verts: Vec<(f64, f64)> = (0..k)
                .map(|i| {
                    let ang = phase + std::f64::consts::TAU * i as f64 / k as f64;
                    let rr = rad * rng.gen_range(0.7..1.0);
                    (cx + rr * ang.cos(), cy + rr * ang.sin())
                })
                .collect();
            for r in 0..n {
                for c in 0..n {
                    // signed distance to the convex hull: max over edges
                    let mut d = f64::NEG_INFINITY;
                    for i in 0..k {
                        let (x1, y1) = verts[i];
                        let (x2, y2) = verts[(i + 1) % k];
                        let (ex, ey) = (x2 - x1, y2 - y1);
                        let len = (ex * ex + ey * ey).sqrt().max(1e-9);
                        // outward normal for counter-clockwise winding
                        let (nx, ny) = (ey / len, -ex / len);
                        d = d.max(nx * (c as f64 - x1) + ny * (r as f64 - y1));
                    }
                    let cov = 1.0 - smoothstep(-0.8, 0.8, d);
                    img[[r, c]] += intensity * cov;
                }
            }
        }
    }
    let img = box_blur(&img);
    // normalize to [0.05, 0.95]
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in img.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = (hi - lo).max(1e-9);
    img.mapv(|v| 0.05 + 0.9 * (v - lo) / span)
}

/// Central-difference gradient magnitude, normalized to unit maximum.
fn edge_map(img: &Array2<f64>) -> Array2<f64> {
    let (h, w) = img.dim();
    let mut g = Array2::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let rp = (r + 1).min(h - 1);
            let rm = r.saturating_sub(1);
            let cp = (c + 1).min(w - 1);
            let cm = c.saturating_sub(1);
            let gy = (img[[rp, c]] - img[[rm, c]]) * 0.5;
            let gx = (img[[r, cp]] - img[[r, cm]]) * 0.5;
            g[[r, c]] = (gx * gx + gy * gy).sqrt();
        }
    }
    let max = g.iter().cloned().fold(0.0f64, f64::max).max(1e-9);
    g.mapv(|v| v / max)
}

/// Noiseless pseudo-SAR: intensity/edge mix before speckle.
pub fn sar_clean(optical: &Array2<f64>, edge_gain: f64) -> Array2<f64> {
    let edges = edge_map(optical);
    let denom = 1.0 + edge_gain;
    ndarray::Zip::from(optical)
        .and(&edges)
        .map_collect(|&o, &e| ((o + edge_gain * e) / denom).clamp(0.0, 1.0))
}

/// Multiplicative L-look gamma speckle (shape = looks, scale = 1/looks).
fn apply_speckle(img: &Array2<f64>, looks: u32, rng: &mut ChaCha12Rng) -> Array2<f64> {
    let gamma = Gamma::new(looks as f64, 1.0 / looks as f64).expect("positive looks");
    img.mapv(|v| (v * gamma.sample(rng)).clamp(0.0, 1.0))
}

/// Generate one synthetic pair. Returns the pair (optical reference +
/// cropped SAR template + ground truth) and the full SAR scene the template
/// was cut from.
pub fn synth_pair(
    cfg: &SynthConfig,
    rng: &mut ChaCha12Rng,
    pair_id: &str,
) -> Result<(ImagePair, Array2<f64>), DataError> {
    cfg.validate()?;
    let optical = render_optical(cfg, rng);
    let clean = sar_clean(&optical, cfg.edge_gain);
    let sar_full = apply_speckle(&clean, cfg.speckle_looks, rng);
    let (template, gt) = crop_template(&sar_full, cfg.template_size, rng)?;
    let pair = ImagePair {
        pair_id: pair_id.to_string(),
        optical,
        sar: template,
        gt_offset: Some(gt),
    };
    pair.validate()?;
    Ok((pair, sar_full))
}

/// Additive zero-mean Gaussian noise with variance expressed as a percent
/// of the unit dynamic range, clipped back to [0, 1].
pub fn add_gaussian_noise(
    image: &Array2<f64>,
    variance_pct: f64,
    rng: &mut ChaCha12Rng,
) -> Result<Array2<f64>, DataError> {
    if !(0.0..=100.0).contains(&variance_pct) {
        return Err(DataError::BadVariance(variance_pct));
    }
    if variance_pct == 0.0 {
        return Ok(image.clone());
    }
    let normal = Normal::new(0.0, (variance_pct / 100.0).sqrt()).unwrap();
    Ok(image.mapv(|v| (v + normal.sample(rng)).clamp(0.0, 1.0)))
}
