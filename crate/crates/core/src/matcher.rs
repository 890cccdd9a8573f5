//! Convolution-based similarity search and the three training losses.
//!
//! The template feature map is slid over the reference feature map as a
//! correlation kernel:
//!
//! ```text
//! F[i,j]   = sum_c sum_k sum_l F_S[c,k,l] * F_O[c,i+k,j+l]
//! Sim[i,j] = F[i,j] / (||F_S||_2 * ||F_O||_2)
//! ```
//!
//! The default normalization divides by the two global norms, which bounds
//! every score to [-1, 1]; `WindowNorm` divides by the per-window reference
//! norm instead (true normalized cross-correlation). A frequency-domain
//! path cross-checks the direct computation.

use crate::tensor::{as2, as3, Tensor};
use ndarray::{Array2, Array3};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MatcherError {
    #[error("channel counts differ: template {0}, reference {1}")]
    ChannelMismatch(usize, usize),
    #[error("template {th}x{tw} larger than reference {rh}x{rw}")]
    TemplateTooLarge {
        th: usize,
        tw: usize,
        rh: usize,
        rw: usize,
    },
    #[error("degenerate input: zero-norm {0} features")]
    ZeroNorm(&'static str),
    #[error("ground truth ({0}, {1}) outside the similarity map")]
    GtOutOfBounds(usize, usize),
    #[error("similarity map is empty")]
    EmptyMap,
}

/// Normalized similarity scores plus the geometry they came from.
#[derive(Clone, Debug)]
pub struct SimilarityMap {
    pub scores: Array2<f64>,
    pub template_dims: (usize, usize),
    pub reference_dims: (usize, usize),
}

/// Peak location and, when ground truth is known, its L2 error in pixels.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MatchResult {
    pub predicted: (usize, usize),
    pub score: f64,
    pub l2_error: Option<f64>,
}

/// Loss hyperparameters.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct LossConfig {
    /// Side of the square positive region around the ground truth.
    pub pos_region: usize,
    /// Number of highest-scoring negatives aggregated into S_neg.
    pub k_neg: usize,
    /// Number of soft-label positions used by the fine loss.
    pub k_fine: usize,
    pub gaussian_sigma: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    /// Use only the single highest negative instead of the top-k mean.
    pub single_max_neg: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            pos_region: 7,
            k_neg: 49,
            k_fine: 9,
            gaussian_sigma: 1.0,
            gamma1: 1.0,
            gamma2: 1.0,
            single_max_neg: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.pos_region % 2 == 0 {
            return Err("pos_region must be odd".into());
        }
        if self.k_neg < 1 || self.k_fine < 1 {
            return Err("k values must be >= 1".into());
        }
        if self.gaussian_sigma <= 0.0 {
            return Err("gaussian_sigma must be positive".into());
        }
        Ok(())
    }
}

/// Similarity normalization mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityMode {
    /// Divide by the product of global L2 norms.
    Global,
    /// Divide by the template norm times each window's norm.
    WindowNorm,
}

// ---------------------------------------------------------------------------
// Correlation kernels
// ---------------------------------------------------------------------------

/// Valid cross-correlation of (C, Hs, Ws) against (C, Ho, Wo).
pub fn corr_valid(fs: &Array3<f64>, fo: &Array3<f64>) -> Array2<f64> {
    let (c, hs, ws) = fs.dim();
    let (_, ho, wo) = fo.dim();
    let (hm, wm) = (ho - hs + 1, wo - ws + 1);
    let mut out = Array2::<f64>::zeros((hm, wm));
    for ci in 0..c {
        let fsp = fs.index_axis(ndarray::Axis(0), ci);
        let fop = fo.index_axis(ndarray::Axis(0), ci);
        let fos = fop.to_slice().unwrap();
        for k in 0..hs {
            let trow = fsp.row(k);
            let ts = trow.to_slice().unwrap();
            for i in 0..hm {
                let orow = &fos[(i + k) * wo..(i + k + 1) * wo];
                let orow_out = out.row_mut(i);
                let os = orow_out.into_slice().unwrap();
                for (j, o) in os.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    let win = &orow[j..j + ws];
                    for (a, b) in ts.iter().zip(win.iter()) {
                        acc += a * b;
                    }
                    *o += acc;
                }
            }
        }
    }
    out
}

fn fft2(
    data: &mut [Complex<f64>],
    h: usize,
    w: usize,
    planner: &mut FftPlanner<f64>,
    inverse: bool,
) {
    let dir = if inverse {
        rustfft::FftDirection::Inverse
    } else {
        rustfft::FftDirection::Forward
    };
    let row_fft = planner.plan_fft(w, dir);
    for r in 0..h {
        row_fft.process(&mut data[r * w..(r + 1) * w]);
    }
    let col_fft = planner.plan_fft(h, dir);
    let mut col = vec![Complex::default(); h];
    for cidx in 0..w {
        for r in 0..h {
            col[r] = data[r * w + cidx];
        }
        col_fft.process(&mut col);
        for r in 0..h {
            data[r * w + cidx] = col[r];
        }
    }
}

/// Frequency-domain valid cross-correlation; matches [`corr_valid`].
pub fn corr_valid_fft(fs: &Array3<f64>, fo: &Array3<f64>) -> Array2<f64> {
    let (c, hs, ws) = fs.dim();
    let (_, ho, wo) = fo.dim();
    let (hm, wm) = (ho - hs + 1, wo - ws + 1);
    let mut planner = FftPlanner::new();
    let mut out = Array2::<f64>::zeros((hm, wm));
    let n = ho * wo;
    let scale = 1.0 / n as f64;
    for ci in 0..c {
        let mut a: Vec<Complex<f64>> = fo
            .index_axis(ndarray::Axis(0), ci)
            .iter()
            .map(|&v| Complex::new(v, 0.0))
            .collect();
        let mut b = vec![Complex::default(); n];
        for k in 0..hs {
            for l in 0..ws {
                b[k * wo + l] = Complex::new(fs[[ci, k, l]], 0.0);
            }
        }
        fft2(&mut a, ho, wo, &mut planner, false);
        fft2(&mut b, ho, wo, &mut planner, false);
        for (x, y) in a.iter_mut().zip(b.iter()) {
            *x *= y.conj();
        }
        fft2(&mut a, ho, wo, &mut planner, true);
        for i in 0..hm {
            for j in 0..wm {
                out[[i, j]] += a[i * wo + j].re * scale;
            }
        }
    }
    out
}

fn l2_norm(x: &Array3<f64>) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Per-window L2 norms of the reference over all channels (integral image).
fn window_norms(fo: &Array3<f64>, hs: usize, ws: usize) -> Array2<f64> {
    let (c, ho, wo) = fo.dim();
    let mut sq = Array2::<f64>::zeros((ho + 1, wo + 1));
    for r in 0..ho {
        for x in 0..wo {
            let mut s = 0.0;
            for ci in 0..c {
                s += fo[[ci, r, x]] * fo[[ci, r, x]];
            }
            sq[[r + 1, x + 1]] = s + sq[[r, x + 1]] + sq[[r + 1, x]] - sq[[r, x]];
        }
    }
    let (hm, wm) = (ho - hs + 1, wo - ws + 1);
    Array2::from_shape_fn((hm, wm), |(i, j)| {
        let s = sq[[i + hs, j + ws]] - sq[[i, j + ws]] - sq[[i + hs, j]] + sq[[i, j]];
        s.max(0.0).sqrt()
    })
}

fn check_dims(fs: &Array3<f64>, fo: &Array3<f64>) -> Result<(), MatcherError> {
    let (cs, hs, ws) = fs.dim();
    let (co, ho, wo) = fo.dim();
    if cs != co {
        return Err(MatcherError::ChannelMismatch(cs, co));
    }
    if hs > ho || ws > wo {
        return Err(MatcherError::TemplateTooLarge {
            th: hs,
            tw: ws,
            rh: ho,
            rw: wo,
        });
    }
    Ok(())
}

/// Normalized similarity map between template and reference features.
pub fn similarity_map(
    fs: &Array3<f64>,
    fo: &Array3<f64>,
    mode: SimilarityMode,
) -> Result<SimilarityMap, MatcherError> {
    similarity_map_impl(fs, fo, mode, false)
}

/// Same scores via the frequency-domain correlation.
pub fn similarity_map_fft(
    fs: &Array3<f64>,
    fo: &Array3<f64>,
    mode: SimilarityMode,
) -> Result<SimilarityMap, MatcherError> {
    similarity_map_impl(fs, fo, mode, true)
}

fn similarity_map_impl(
    fs: &Array3<f64>,
    fo: &Array3<f64>,
    mode: SimilarityMode,
    use_fft: bool,
) -> Result<SimilarityMap, MatcherError> {
    check_dims(fs, fo)?;
    let (_, hs, ws) = fs.dim();
    let (_, ho, wo) = fo.dim();
    let ns = l2_norm(fs);
    if ns == 0.0 {
        return Err(MatcherError::ZeroNorm("template"));
    }
    let corr = if use_fft {
        corr_valid_fft(fs, fo)
    } else {
        corr_valid(fs, fo)
    };
    let scores = match mode {
        SimilarityMode::Global => {
            let no = l2_norm(fo);
            if no == 0.0 {
                return Err(MatcherError::ZeroNorm("reference"));
            }
            corr.mapv(|v| v / (ns * no))
        }
        SimilarityMode::WindowNorm => {
            let wn = window_norms(fo, hs, ws);
            let mut s = corr;
            ndarray::Zip::from(&mut s).and(&wn).for_each(|v, &n| {
                *v = if n <= 1e-12 { 0.0 } else { *v / (ns * n) };
            });
            s
        }
    };
    Ok(SimilarityMap {
        scores,
        template_dims: (hs, ws),
        reference_dims: (ho, wo),
    })
}

/// Global argmax with smallest-row-major-index tie-breaking.
pub fn locate_peak(sim: &SimilarityMap) -> Result<MatchResult, MatcherError> {
    let (h, w) = sim.scores.dim();
    if h == 0 || w == 0 {
        return Err(MatcherError::EmptyMap);
    }
    let mut best = f64::NEG_INFINITY;
    let mut at = (0usize, 0usize);
    for i in 0..h {
        for j in 0..w {
            let v = sim.scores[[i, j]];
            if v > best {
                best = v;
                at = (i, j);
            }
        }
    }
    Ok(MatchResult {
        predicted: at,
        score: best,
        l2_error: None,
    })
}

/// Gaussian soft label with unit peak at the ground-truth cell.
pub fn gaussian_soft_label(
    gt: (usize, usize),
    dims: (usize, usize),
    sigma: f64,
) -> Result<Array2<f64>, MatcherError> {
    if gt.0 >= dims.0 || gt.1 >= dims.1 {
        return Err(MatcherError::GtOutOfBounds(gt.0, gt.1));
    }
    let s2 = 2.0 * sigma * sigma;
    Ok(Array2::from_shape_fn(dims, |(i, j)| {
        let di = i as f64 - gt.0 as f64;
        let dj = j as f64 - gt.1 as f64;
        (-(di * di + dj * dj) / s2).exp()
    }))
}

/// Cells of the positive window around `gt`, clipped at the borders.
pub fn positive_window(
    gt: (usize, usize),
    dims: (usize, usize),
    pos_region: usize,
) -> Vec<(usize, usize)> {
    let r = pos_region / 2;
    let r0 = gt.0.saturating_sub(r);
    let r1 = (gt.0 + r).min(dims.0 - 1);
    let c0 = gt.1.saturating_sub(r);
    let c1 = (gt.1 + r).min(dims.1 - 1);
    let mut cells = Vec::new();
    for i in r0..=r1 {
        for j in c0..=c1 {
            cells.push((i, j));
        }
    }
    cells
}

fn flat(cells: &[(usize, usize)], w: usize) -> Vec<usize> {
    cells.iter().map(|&(r, c)| r * w + c).collect()
}

fn check_gt(sim_dims: (usize, usize), gt: (usize, usize)) -> Result<(), MatcherError> {
    if gt.0 >= sim_dims.0 || gt.1 >= sim_dims.1 {
        return Err(MatcherError::GtOutOfBounds(gt.0, gt.1));
    }
    Ok(())
}

/// Indices of the top-k negatives (cells outside the positive window),
/// highest score first, ties broken by row-major index.
fn top_negative_indices(
    scores: &Array2<f64>,
    window: &[(usize, usize)],
    k: usize,
) -> Vec<usize> {
    let (h, w) = scores.dim();
    let mut in_window = vec![false; h * w];
    for &(r, c) in window {
        in_window[r * w + c] = true;
    }
    let flat_scores = scores.as_slice().unwrap();
    let mut neg: Vec<usize> = (0..h * w).filter(|&i| !in_window[i]).collect();
    neg.sort_by(|&a, &b| {
        flat_scores[b]
            .partial_cmp(&flat_scores[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    neg.truncate(k);
    neg
}

// ---------------------------------------------------------------------------
// Losses (tape)
// ---------------------------------------------------------------------------

/// `L_m = (S_neg + 1)^2 + (1 - S_pos)^2` with S_pos the positive-window mean
/// and S_neg the mean of the top-k negatives (or the single maximum when
/// configured). Maps with no negative cells drop the negative term.
pub fn matching_loss_t(
    sim: &Tensor,
    gt: (usize, usize),
    cfg: &LossConfig,
) -> Result<Tensor, MatcherError> {
    let scores = as2(&sim.value());
    let dims = scores.dim();
    check_gt(dims, gt)?;
    let window = positive_window(gt, dims, cfg.pos_region);
    let s_pos = sim.gather(&flat(&window, dims.1)).mean_all();
    let pos_term = s_pos.neg().add_scalar(1.0);
    let pos_term = pos_term.mul(&pos_term);
    let k = if cfg.single_max_neg { 1 } else { cfg.k_neg };
    let neg_idx = top_negative_indices(&scores, &window, k);
    if neg_idx.is_empty() {
        return Ok(pos_term);
    }
    let s_neg = sim.gather(&neg_idx).mean_all();
    let neg_term = s_neg.add_scalar(1.0);
    let neg_term = neg_term.mul(&neg_term);
    Ok(neg_term.add(&pos_term))
}

/// `L_fine`: mean squared difference between the Gaussian soft label and the
/// similarity at the k' highest-label positions inside the positive window.
pub fn fine_similarity_loss_t(
    sim: &Tensor,
    gt: (usize, usize),
    cfg: &LossConfig,
) -> Result<Tensor, MatcherError> {
    let scores = as2(&sim.value());
    let dims = scores.dim();
    check_gt(dims, gt)?;
    let g = gaussian_soft_label(gt, dims, cfg.gaussian_sigma)?;
    let window = positive_window(gt, dims, cfg.pos_region);
    let mut cells = window;
    cells.sort_by(|a, b| {
        g[[b.0, b.1]]
            .partial_cmp(&g[[a.0, a.1]])
            .unwrap()
            .then((a.0 * dims.1 + a.1).cmp(&(b.0 * dims.1 + b.1)))
    });
    cells.truncate(cfg.k_fine.min(cells.len()));
    let idx = flat(&cells, dims.1);
    let graph = sim.graph();
    let labels = graph.constant(
        ndarray::Array1::from_iter(cells.iter().map(|&(r, c)| g[[r, c]])).into_dyn(),
    );
    let picked = sim.gather(&idx);
    let diff = labels.sub(&picked);
    Ok(diff.mul(&diff).mean_all())
}

/// `L_peak = 2 - (max(S) - mean(S))`.
pub fn peak_loss_t(sim: &Tensor) -> Tensor {
    sim.max_all().sub(&sim.mean_all()).neg().add_scalar(2.0)
}

/// `L_final = L_m + gamma1 L_fine + gamma2 L_peak`.
pub fn total_loss_t(
    sim: &Tensor,
    gt: (usize, usize),
    cfg: &LossConfig,
) -> Result<Tensor, MatcherError> {
    let lm = matching_loss_t(sim, gt, cfg)?;
    let lf = fine_similarity_loss_t(sim, gt, cfg)?;
    let lp = peak_loss_t(sim);
    Ok(lm.add(&lf.mul_scalar(cfg.gamma1)).add(&lp.mul_scalar(cfg.gamma2)))
}

// ---------------------------------------------------------------------------
// Losses (plain-array wrappers)
// ---------------------------------------------------------------------------

fn eval_loss(
    sim: &SimilarityMap,
    f: impl Fn(&Tensor) -> Result<Tensor, MatcherError>,
) -> Result<f64, MatcherError> {
    let g = crate::tensor::Graph::new_no_grad();
    let t = g.leaf(sim.scores.clone().into_dyn());
    Ok(f(&t)?.scalar())
}

pub fn matching_loss(
    sim: &SimilarityMap,
    gt: (usize, usize),
    cfg: &LossConfig,
) -> Result<f64, MatcherError> {
    eval_loss(sim, |t| matching_loss_t(t, gt, cfg))
}

pub fn fine_similarity_loss(
    sim: &SimilarityMap,
    gt: (usize, usize),
    cfg: &LossConfig,
) -> Result<f64, MatcherError> {
    eval_loss(sim, |t| fine_similarity_loss_t(t, gt, cfg))
}

pub fn peak_loss(sim: &SimilarityMap) -> f64 {
    eval_loss(sim, |t| Ok(peak_loss_t(t))).unwrap()
}

pub fn total_loss(
    sim: &SimilarityMap,
    gt: (usize, usize),
    cfg: &LossConfig,
) -> Result<f64, MatcherError> {
    eval_loss(sim, |t| total_loss_t(t, gt, cfg))
}

// ---------------------------------------------------------------------------
// Tape similarity
// ---------------------------------------------------------------------------

/// Valid cross-correlation as a tape op.
pub fn corr_op(fs: &Tensor, fo: &Tensor) -> Tensor {
    let g = fs.graph();
    let fsv = as3(&fs.value());
    let fov = as3(&fo.value());
    check_dims(&fsv, &fov).expect("correlation shape mismatch");
    let out = corr_valid(&fsv, &fov).into_dyn();
    if !g.grad_enabled() {
        return g.push_nograd(out);
    }
    let (c, hs, ws) = fsv.dim();
    let (_, ho, wo) = fov.dim();
    let hm = ho - hs + 1;
    let (ifs, ifo) = (fs.id(), fo.id());
    g.push_op(
        out,
        Box::new(move |gout, _vals, grads| {
            let gv = as2(gout);
            let mut dfs = Array3::<f64>::zeros((c, hs, ws));
            let mut dfo = Array3::<f64>::zeros((c, ho, wo));
            for ci in 0..c {
                for i in 0..hm {
                    let grow = gv.row(i);
                    let gs = grow.to_slice().unwrap();
                    for k in 0..hs {
                        // dFS[c,k,l] += sum_j g[i,j] * FO[c,i+k,j+l]
                        let fo_row = fov.index_axis(ndarray::Axis(0), ci);
                        let fo_row = fo_row.row(i + k);
                        let fos = fo_row.to_slice().unwrap();
                        {
                            let mut dfs_row = dfs.slice_mut(ndarray::s![ci, k, ..]);
                            let ds = dfs_row.as_slice_mut().unwrap();
                            for (l, d) in ds.iter_mut().enumerate() {
                                let mut acc = 0.0;
                                for (j, gj) in gs.iter().enumerate() {
                                    acc += gj * fos[l + j];
                                }
                                *d += acc;
                            }
                        }
                        // dFO[c,i+k,j+l] += g[i,j] * FS[c,k,l]
                        let fs_row = fsv.index_axis(ndarray::Axis(0), ci);
                        let fs_row = fs_row.row(k);
                        let fss = fs_row.to_slice().unwrap();
                        let mut dfo_row = dfo.slice_mut(ndarray::s![ci, i + k, ..]);
                        let dos = dfo_row.as_slice_mut().unwrap();
                        for (j, gj) in gs.iter().enumerate() {
                            for (l, f) in fss.iter().enumerate() {
                                dos[j + l] += gj * f;
                            }
                        }
                    }
                }
            }
            crate::tensor::acc_grad(grads, ifs, dfs.into_dyn());
            crate::tensor::acc_grad(grads, ifo, dfo.into_dyn());
        }),
    )
}

/// Global-norm similarity map on the tape; gradients flow into both feature
/// maps, including through the norms.
pub fn similarity_map_t(fs: &Tensor, fo: &Tensor) -> Tensor {
    let corr = corr_op(fs, fo);
    let ns = fs.mul(fs).sum_all().sqrt();
    let no = fo.mul(fo).sum_all().sqrt();
    assert!(
        ns.scalar() > 0.0 && no.scalar() > 0.0,
        "zero-norm features in similarity"
    );
    corr.mul(&ns.mul(&no).recip())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::test_util::finite_diff_check;
    use crate::tensor::Graph;
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn rand3(c: usize, h: usize, w: usize, rng: &mut ChaCha12Rng) -> Array3<f64> {
        Array3::from_shape_fn((c, h, w), |_| rng.gen_range(-1.0..1.0))
    }

    /// Literal transcription of the similarity sums.
    fn sim_oracle(fs: &Array3<f64>, fo: &Array3<f64>) -> Array2<f64> {
        let (c, hs, ws) = fs.dim();
        let (_, ho, wo) = fo.dim();
        let mut f = Array2::<f64>::zeros((ho - hs + 1, wo - ws + 1));
        for i in 0..ho - hs + 1 {
            for j in 0..wo - ws + 1 {
                let mut acc = 0.0;
                for ci in 0..c {
                    for k in 0..hs {
                        for l in 0..ws {
                            acc += fs[[ci, k, l]] * fo[[ci, i + k, j + l]];
                        }
                    }
                }
                f[[i, j]] = acc;
            }
        }
        let ns = fs.iter().map(|v| v * v).sum::<f64>().sqrt();
        let no = fo.iter().map(|v| v * v).sum::<f64>().sqrt();
        f.mapv(|v| v / (ns * no))
    }

    #[test]
    fn identical_inputs_score_one() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let fs = rand3(4, 5, 5, &mut rng);
        let sim = similarity_map(&fs, &fs, SimilarityMode::Global).unwrap();
        assert_eq!(sim.scores.dim(), (1, 1));
        assert!((sim.scores[[0, 0]] - 1.0).abs() < 2e-15);
    }

    #[test]
    fn map_dimension_arithmetic() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let fs = rand3(8, 5, 5, &mut rng);
        let fo = rand3(8, 12, 12, &mut rng);
        let sim = similarity_map(&fs, &fo, SimilarityMode::Global).unwrap();
        assert_eq!(sim.scores.dim(), (8, 8));
        assert_eq!(sim.template_dims, (5, 5));
        assert_eq!(sim.reference_dims, (12, 12));
    }

    #[test]
    fn direct_matches_oracle_and_fft() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for _ in 0..20 {
            let c = rng.gen_range(1..=8);
            let hs = rng.gen_range(1..=6);
            let ws = rng.gen_range(1..=6);
            let ho = rng.gen_range(hs..=14);
            let wo = rng.gen_range(ws..=14);
            let fs = rand3(c, hs, ws, &mut rng);
            let fo = rand3(c, ho, wo, &mut rng);
            let got = similarity_map(&fs, &fo, SimilarityMode::Global).unwrap();
            let want = sim_oracle(&fs, &fo);
            let denom = want.mapv(f64::abs).iter().cloned().fold(0.0, f64::max).max(1e-12);
            let d1 = (&got.scores - &want)
                .mapv(f64::abs)
                .iter()
                .cloned()
                .fold(0.0, f64::max);
            assert!(d1 / denom <= 1e-6, "direct vs oracle rel {}", d1 / denom);

            let fft = similarity_map_fft(&fs, &fo, SimilarityMode::Global).unwrap();
            let d2 = (&fft.scores - &got.scores)
                .mapv(f64::abs)
                .iter()
                .cloned()
                .fold(0.0, f64::max);
            assert!(d2 / denom <= 1e-5, "fft vs direct rel {}", d2 / denom);
        }
    }

    #[test]
    fn scores_bounded_and_scale_invariant() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let fs = rand3(3, 4, 4, &mut rng);
        let fo = rand3(3, 9, 9, &mut rng);
        let sim = similarity_map(&fs, &fo, SimilarityMode::Global).unwrap();
        assert!(sim.scores.iter().all(|&v| (-1.0 - 1e-12..=1.0 + 1e-12).contains(&v)));

        let sim2 = similarity_map(
            &fs.mapv(|v| v * 7.5),
            &fo.mapv(|v| v * 0.03),
            SimilarityMode::Global,
        )
        .unwrap();
        let d = (&sim.scores - &sim2.scores)
            .mapv(f64::abs)
            .iter()
            .cloned()
            .fold(0.0, f64::max);
        assert!(d < 1e-12, "cosine identity violated: {d}");
        assert_eq!(
            locate_peak(&sim).unwrap().predicted,
            locate_peak(&sim2).unwrap().predicted
        );
    }

    #[test]
    fn shift_covariance() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let fs = rand3(2, 3, 3, &mut rng);
        for (r, c) in [(0usize, 0usize), (2, 5), (4, 1)] {
            let mut fo = Array3::<f64>::zeros((2, 8, 9));
            fo.slice_mut(ndarray::s![.., r..r + 3, c..c + 3]).assign(&fs);
            let sim = similarity_map(&fs, &fo, SimilarityMode::Global).unwrap();
            assert_eq!(locate_peak(&sim).unwrap().predicted, (r, c));
        }
    }

    #[test]
    fn zero_norm_inputs_rejected() {
        let z = Array3::<f64>::zeros((1, 2, 2));
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let x = rand3(1, 4, 4, &mut rng);
        assert!(matches!(
            similarity_map(&z, &x, SimilarityMode::Global),
            Err(MatcherError::ZeroNorm("template"))
        ));
        let t = rand3(1, 2, 2, &mut rng);
        let zref = Array3::<f64>::zeros((1, 4, 4));
        assert!(matches!(
            similarity_map(&t, &zref, SimilarityMode::Global),
            Err(MatcherError::ZeroNorm("reference"))
        ));
    }

    #[test]
    fn window_norm_mode_peaks_at_cut() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let fo = rand3(2, 10, 10, &mut rng);
        let fs = fo.slice(ndarray::s![.., 3..7, 2..6]).to_owned();
        let sim = similarity_map(&fs, &fo, SimilarityMode::WindowNorm).unwrap();
        let peak = locate_peak(&sim).unwrap();
        assert_eq!(peak.predicted, (3, 2));
        assert!((peak.score - 1.0).abs() < 1e-12);
    }

    #[test]
    fn channel_mismatch_and_oversize_rejected() {
        let a = Array3::<f64>::zeros((2, 4, 4));
        let b = Array3::<f64>::zeros((3, 8, 8));
        assert!(matches!(
            similarity_map(&a, &b, SimilarityMode::Global),
            Err(MatcherError::ChannelMismatch(2, 3))
        ));
        let big = Array3::<f64>::ones((2, 9, 9));
        let small = Array3::<f64>::ones((2, 4, 4));
        assert!(matches!(
            similarity_map(&big, &small, SimilarityMode::Global),
            Err(MatcherError::TemplateTooLarge { .. })
        ));
    }

    #[test]
    fn locate_peak_cases() {
        let mut m = Array2::<f64>::zeros((6, 8));
        m[[3, 5]] = 1.0;
        let sim = SimilarityMap {
            scores: m,
            template_dims: (1, 1),
            reference_dims: (6, 8),
        };
        assert_eq!(locate_peak(&sim).unwrap().predicted, (3, 5));

        let flat = SimilarityMap {
            scores: Array2::from_elem((4, 4), 0.25),
            template_dims: (1, 1),
            reference_dims: (4, 4),
        };
        assert_eq!(locate_peak(&flat).unwrap().predicted, (0, 0));

        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let m = Array2::from_shape_fn((7, 9), |_| rng.gen_range(-1.0..1.0));
        let sim = SimilarityMap {
            scores: m.clone(),
            template_dims: (1, 1),
            reference_dims: (7, 9),
        };
        // exhaustive-scan oracle
        let mut best = (0, 0);
        for i in 0..7 {
            for j in 0..9 {
                if m[[i, j]] > m[[best.0, best.1]] {
                    best = (i, j);
                }
            }
        }
        assert_eq!(locate_peak(&sim).unwrap().predicted, best);
    }

    #[test]
    fn gaussian_label_values_and_symmetry() {
        let g = gaussian_soft_label((4, 4), (9, 9), 1.0).unwrap();
        assert_eq!(g[[4, 4]], 1.0);
        assert!((g[[5, 4]] - (-0.5f64).exp()).abs() < 1e-15);
        assert!((g[[4, 3]] - (-0.5f64).exp()).abs() < 1e-15);
        // sum over a symmetric window is invariant under 90-degree rotation
        let win: f64 = (2..=6)
            .flat_map(|i| (2..=6).map(move |j| (i, j)))
            .map(|(i, j)| g[[i, j]])
            .sum();
        let rot: f64 = (2..=6i64)
            .flat_map(|i| (2..=6i64).map(move |j| (i, j)))
            .map(|(i, j)| g[[(4 + (j - 4)) as usize, (4 - (i - 4)) as usize]])
            .sum();
        assert!((win - rot).abs() < 1e-12);

        assert!(matches!(
            gaussian_soft_label((9, 0), (9, 9), 1.0),
            Err(MatcherError::GtOutOfBounds(9, 0))
        ));
    }

    fn sim_of(scores: Array2<f64>) -> SimilarityMap {
        let d = scores.dim();
        SimilarityMap {
            scores,
            template_dims: (1, 1),
            reference_dims: d,
        }
    }

    #[test]
    fn matching_loss_analytic_cases() {
        let cfg = LossConfig::default();
        // perfect map: window of ones, negatives at -1
        let mut m = Array2::from_elem((17, 17), -1.0);
        for (r, c) in positive_window((8, 8), (17, 17), 7) {
            m[[r, c]] = 1.0;
        }
        let l = matching_loss(&sim_of(m), (8, 8), &cfg).unwrap();
        assert_eq!(l, 0.0);

        // all-zero map: L = (0+1)^2 + (1-0)^2 = 2
        let l = matching_loss(&sim_of(Array2::zeros((17, 17))), (8, 8), &cfg).unwrap();
        assert_eq!(l, 2.0);
    }

    #[test]
    fn matching_loss_matches_full_sort_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        for _ in 0..10 {
            let h = rng.gen_range(8..=17);
            let w = rng.gen_range(8..=17);
            let gt = (rng.gen_range(0..h), rng.gen_range(0..w));
            let m = Array2::from_shape_fn((h, w), |_| rng.gen_range(-1.0..1.0));
            let cfg = LossConfig::default();
            let got = matching_loss(&sim_of(m.clone()), gt, &cfg).unwrap();

            // independent recomputation with an explicit full sort
            let win = positive_window(gt, (h, w), cfg.pos_region);
            let s_pos: f64 =
                win.iter().map(|&(r, c)| m[[r, c]]).sum::<f64>() / win.len() as f64;
            let mut negs: Vec<f64> = (0..h)
                .flat_map(|r| (0..w).map(move |c| (r, c)))
                .filter(|p| !win.contains(p))
                .map(|(r, c)| m[[r, c]])
                .collect();
            negs.sort_by(|a, b| b.partial_cmp(a).unwrap());
            negs.truncate(cfg.k_neg);
            let s_neg: f64 = negs.iter().sum::<f64>() / negs.len() as f64;
            let want = (s_neg + 1.0) * (s_neg + 1.0) + (1.0 - s_pos) * (1.0 - s_pos);
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn matching_loss_clips_at_borders() {
        let cfg = LossConfig::default();
        let m = Array2::from_elem((5, 5), 0.3);
        // gt at the corner: window clipped, never an error
        let l = matching_loss(&sim_of(m), (0, 0), &cfg).unwrap();
        assert!(l.is_finite());
    }

    #[test]
    fn fine_loss_cases_and_oracle() {
        let cfg = LossConfig::default();
        let g = gaussian_soft_label((8, 8), (17, 17), 1.0).unwrap();
        // sim equal to the label -> zero loss
        let l = fine_similarity_loss(&sim_of(g.clone()), (8, 8), &cfg).unwrap();
        assert_eq!(l, 0.0);

        // all-zero sim: closed form from the Gaussian values; for sigma=1
        // the top-9 label cells are the 3x3 block around gt
        let l = fine_similarity_loss(&sim_of(Array2::zeros((17, 17))), (8, 8), &cfg).unwrap();
        let want = (1.0 + 4.0 * (-0.5f64).exp().powi(2) + 4.0 * (-1.0f64).exp().powi(2)) / 9.0;
        assert!((l - want).abs() < 1e-12, "{l} vs {want}");

        // random sim vs explicit-sort oracle
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let m = Array2::from_shape_fn((17, 17), |_| rng.gen_range(-1.0..1.0));
        let got = fine_similarity_loss(&sim_of(m.clone()), (8, 8), &cfg).unwrap();
        let mut cells = positive_window((8, 8), (17, 17), cfg.pos_region);
        cells.sort_by(|a, b| {
            g[[b.0, b.1]]
                .partial_cmp(&g[[a.0, a.1]])
                .unwrap()
                .then((a.0 * 17 + a.1).cmp(&(b.0 * 17 + b.1)))
        });
        cells.truncate(9);
        let want: f64 = cells
            .iter()
            .map(|&(r, c)| (g[[r, c]] - m[[r, c]]).powi(2))
            .sum::<f64>()
            / 9.0;
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn peak_loss_cases() {
        // constant map: max = mean -> 2
        assert_eq!(peak_loss(&sim_of(Array2::from_elem((5, 5), 0.7))), 2.0);

        // 3x3 single peak: 2 - (1 + 7/9) = 2/9
        let mut m = Array2::from_elem((3, 3), -1.0);
        m[[1, 1]] = 1.0;
        let l = peak_loss(&sim_of(m));
        let want = 2.0 - (1.0 - (1.0 - 8.0) / 9.0);
        assert_eq!(l, want);
        assert!((l - 2.0 / 9.0).abs() < 1e-15);

        // random map in [-1, 1]: loss within [0, 2]
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        for _ in 0..20 {
            let m = Array2::from_shape_fn((6, 6), |_| rng.gen_range(-1.0..1.0));
            let l = peak_loss(&sim_of(m));
            assert!((0.0..=2.0).contains(&l));
        }

        // adding a constant leaves the loss unchanged (max and mean shift equally)
        let m = Array2::from_shape_fn((6, 6), |_| rng.gen_range(-1.0..1.0));
        let l1 = peak_loss(&sim_of(m.clone()));
        let l2 = peak_loss(&sim_of(m.mapv(|v| v + 0.25)));
        assert!((l1 - l2).abs() < 1e-12);
    }

    #[test]
    fn total_loss_composition() {
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        let m = Array2::from_shape_fn((17, 17), |_| rng.gen_range(-1.0..1.0));
        let cfg0 = LossConfig {
            gamma1: 0.0,
            gamma2: 0.0,
            ..Default::default()
        };
        let t = total_loss(&sim_of(m.clone()), (8, 8), &cfg0).unwrap();
        let lm = matching_loss(&sim_of(m.clone()), (8, 8), &cfg0).unwrap();
        assert_eq!(t, lm);

        // near-perfect unimodal map on a large grid: saturated window, -1
        // negatives; matching loss vanishes, the other terms stay small
        let mut perfect = Array2::from_elem((33, 33), -1.0);
        for (r, c) in positive_window((16, 16), (33, 33), 7) {
            perfect[[r, c]] = 1.0;
        }
        let cfg = LossConfig::default();
        let lm = matching_loss(&sim_of(perfect.clone()), (16, 16), &cfg).unwrap();
        let lf = fine_similarity_loss(&sim_of(perfect.clone()), (16, 16), &cfg).unwrap();
        let lp = peak_loss(&sim_of(perfect));
        assert!(lm < 1e-12, "L_m {lm}");
        assert!(lf < 0.3, "L_fine {lf}");
        assert!(lp < 0.15, "L_peak {lp}");
    }

    #[test]
    fn loss_gradients() {
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let m = ArrayD::from_shape_fn(IxDyn(&[9, 9]), |_| rng.gen_range(-0.9..0.9));
        let cfg = LossConfig::default();
        for which in 0..3 {
            let cfg = cfg.clone();
            let rel = finite_diff_check(&[m.clone()], move |_g, xs| match which {
                0 => matching_loss_t(&xs[0], (4, 4), &cfg).unwrap(),
                1 => fine_similarity_loss_t(&xs[0], (4, 4), &cfg).unwrap(),
                _ => peak_loss_t(&xs[0]),
            });
            assert!(rel < 1e-3, "loss {which} grad rel {rel}");
        }
        let cfg2 = LossConfig::default();
        let rel = finite_diff_check(&[m], move |_g, xs| {
            total_loss_t(&xs[0], (4, 4), &cfg2).unwrap()
        });
        assert!(rel < 1e-3, "total loss grad rel {rel}");
    }

    #[test]
    fn similarity_tape_matches_plain_and_grads() {
        let mut rng = ChaCha12Rng::seed_from_u64(14);
        let fs = rand3(2, 3, 3, &mut rng);
        let fo = rand3(2, 6, 7, &mut rng);
        let plain = similarity_map(&fs, &fo, SimilarityMode::Global).unwrap();
        let g = Graph::new_no_grad();
        let st = similarity_map_t(&g.leaf(fs.clone().into_dyn()), &g.leaf(fo.clone().into_dyn()));
        let d = (&as2(&st.value()) - &plain.scores)
            .mapv(f64::abs)
            .iter()
            .cloned()
            .fold(0.0, f64::max);
        assert!(d < 1e-14);

        let rel = finite_diff_check(&[fs.into_dyn(), fo.into_dyn()], |_g, xs| {
            let sim = similarity_map_t(&xs[0], &xs[1]);
            sim.mul(&sim).sum_all()
        });
        assert!(rel < 1e-6, "similarity grad rel {rel}");
    }

    #[test]
    fn single_max_negative_flag() {
        let mut rng = ChaCha12Rng::seed_from_u64(15);
        let m = Array2::from_shape_fn((11, 11), |_| rng.gen_range(-1.0..1.0));
        let cfg = LossConfig {
            single_max_neg: true,
            ..Default::default()
        };
        let got = matching_loss(&sim_of(m.clone()), (5, 5), &cfg).unwrap();
        let win = positive_window((5, 5), (11, 11), cfg.pos_region);
        let s_pos: f64 = win.iter().map(|&(r, c)| m[[r, c]]).sum::<f64>() / win.len() as f64;
        let s_neg = (0..11)
            .flat_map(|r| (0..11).map(move |c| (r, c)))
            .filter(|p| !win.contains(p))
            .map(|(r, c)| m[[r, c]])
            .fold(f64::NEG_INFINITY, f64::max);
        let want = (s_neg + 1.0).powi(2) + (1.0 - s_pos).powi(2);
        assert!((got - want).abs() < 1e-12);
    }
}
