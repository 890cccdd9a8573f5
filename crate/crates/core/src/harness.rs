//! Training loop, evaluation metrics, the NCC baseline, robustness and
//! ablation sweeps, and report files.
//!
//! Every stream of training randomness (shuffles, crops, transform pools,
//! noise fields) is a pure function of the base seed and the loop counters,
//! so interrupted runs resume bit-identically from a checkpoint and
//! parallel execution cannot change results.

use crate::backbone::{init_backbone_params, Modality};
use crate::checkpoint::{AdamMeta, Checkpoint, CheckpointError, CheckpointMeta, FORMAT_VERSION};
use crate::config::PipelineConfig;
use crate::data::{
    add_gaussian_noise, crop_template, derive_rng, save_image, synth_pair, DataError, ImagePair,
    ManifestRecord, SynthConfig,
};
use crate::matcher::{
    corr_valid, locate_peak, similarity_map, total_loss_t, MatchResult, MatcherError,
    SimilarityMap, SimilarityMode,
};
use crate::mefl::{
    build_transform_pool, eval_transform_pool, init_mefl_params, mefl_forward_t, Fusion,
    MeflError, TransformSpec,
};
use crate::params::{add_grads, AdamW, Binding, ParamSet};
use crate::plot::{line_chart, Series};
use crate::tensor::{as3, Graph};
use ndarray::{Array2, ArrayD};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("empty dataset")]
    EmptyDataset,
    #[error("pair {0} is missing ground truth")]
    MissingGt(String),
    #[error("non-finite loss at epoch {epoch}, step {step}; diagnostics: {diagnostics}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        diagnostics: String,
    },
    #[error(transparent)]
    Mefl(#[from] MeflError),
    #[error(transparent)]
    Matcher(#[from] MatcherError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, HarnessError>;

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

/// Configuration plus its parameter set.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: PipelineConfig,
    pub params: ParamSet,
}

impl Model {
    /// Fresh model with seed-deterministic initialization.
    pub fn init(cfg: PipelineConfig) -> Model {
        let mut params = ParamSet::new();
        let mut rng = derive_rng(cfg.seed, &["init"]);
        init_backbone_params(&mut params, "opt", &cfg.backbone, &mut rng);
        init_backbone_params(&mut params, "sar", &cfg.backbone, &mut rng);
        init_mefl_params(
            &mut params,
            cfg.mefl.n_experts,
            cfg.backbone.decoder_channels,
            &mut rng,
        );
        Model { cfg, params }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Model {
        Model {
            cfg: ck.meta.config.clone(),
            params: ck.params.clone(),
        }
    }

    /// Frozen evaluation-time transform pool.
    pub fn eval_pool(&self) -> Vec<TransformSpec> {
        eval_transform_pool(&self.cfg.mefl)
    }

    /// Fused features for both branches under a given pool (no gradients).
    fn fused_features(
        &self,
        pair: &ImagePair,
        pool: &[TransformSpec],
    ) -> Result<(ndarray::Array3<f64>, ndarray::Array3<f64>)> {
        let g = Graph::new_no_grad();
        let bind = Binding::new(&g, &self.params);
        let fs = mefl_forward_t(
            &pair.sar,
            &bind,
            Modality::Sar,
            &self.cfg.backbone,
            pool,
            self.cfg.mefl.fusion,
        )?;
        let fo = mefl_forward_t(
            &pair.optical,
            &bind,
            Modality::Optical,
            &self.cfg.backbone,
            pool,
            self.cfg.mefl.fusion,
        )?;
        Ok((as3(&fs.value()), as3(&fo.value())))
    }

    /// Full match path: fused features, similarity, peak.
    pub fn match_pair(&self, pair: &ImagePair) -> Result<(MatchResult, SimilarityMap)> {
        let pool = self.eval_pool();
        let (fs, fo) = self.fused_features(pair, &pool)?;
        let sim = similarity_map(&fs, &fo, SimilarityMode::Global)?;
        let mut res = locate_peak(&sim)?;
        if let Some((gr, gc)) = pair.gt_offset {
            res.l2_error = Some(l2_dist(res.predicted, (gr, gc)));
        }
        Ok((res, sim))
    }
}

fn l2_dist(a: (usize, usize), b: (usize, usize)) -> f64 {
    let dr = a.0 as f64 - b.0 as f64;
    let dc = a.1 as f64 - b.1 as f64;
    (dr * dr + dc * dc).sqrt()
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// State returned by [`train`].
#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub optimizer: AdamW,
    /// Mean batch loss per optimizer step, in order.
    pub step_losses: Vec<f64>,
    pub epoch_mean_losses: Vec<f64>,
    /// Held-out reports taken at epoch ends, keyed by completed epoch.
    pub eval_history: Vec<(usize, EvalReport)>,
    pub completed_epochs: u64,
    pub total_steps: u64,
}

impl TrainOutcome {
    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            meta: CheckpointMeta {
                format_version: FORMAT_VERSION,
                config: self.model.cfg.clone(),
                epoch: self.completed_epochs,
                step: self.total_steps,
                base_seed: self.model.cfg.seed,
                adam: AdamMeta {
                    lr: self.optimizer.lr,
                    beta1: self.optimizer.beta1,
                    beta2: self.optimizer.beta2,
                    eps: self.optimizer.eps,
                    weight_decay: self.optimizer.weight_decay,
                    step_count: self.optimizer.step_count,
                },
            },
            params: self.model.params.clone(),
            opt_m: self.optimizer.m.clone(),
            opt_v: self.optimizer.v.clone(),
        }
    }
}

/// Pick the training template for one slot: fixed pairs are used as-is,
/// full co-registered scenes are cropped afresh each step.
fn slot_template(
    pair: &ImagePair,
    template_size: usize,
    seed: u64,
    epoch: usize,
    step: usize,
    slot: usize,
) -> Result<(Array2<f64>, (usize, usize))> {
    let croppable = pair.sar.dim() == pair.optical.dim();
    if croppable {
        let mut rng = derive_rng(
            seed,
            &["crop", &epoch.to_string(), &step.to_string(), &slot.to_string()],
        );
        Ok(crop_template(&pair.sar, template_size, &mut rng)?)
    } else {
        let gt = pair
            .gt_offset
            .ok_or_else(|| HarnessError::MissingGt(pair.pair_id.clone()))?;
        Ok((pair.sar.clone(), gt))
    }
}

/// Loss and parameter gradients for one pair.
fn pair_loss_and_grads(
    params: &ParamSet,
    cfg: &PipelineConfig,
    optical: &Array2<f64>,
    template: &Array2<f64>,
    gt: (usize, usize),
    pool: &[TransformSpec],
) -> Result<(f64, BTreeMap<String, ArrayD<f64>>)> {
    let g = Graph::new();
    let bind = Binding::new(&g, params);
    let fs = mefl_forward_t(
        template,
        &bind,
        Modality::Sar,
        &cfg.backbone,
        pool,
        cfg.mefl.fusion,
    )?;
    let fo = mefl_forward_t(
        optical,
        &bind,
        Modality::Optical,
        &cfg.backbone,
        pool,
        cfg.mefl.fusion,
    )?;
    let sim = crate::matcher::similarity_map_t(&fs, &fo);
    let loss = total_loss_t(&sim, gt, &cfg.loss)?;
    let value = loss.scalar();
    if !value.is_finite() {
        // caller attaches context and dumps the batch
        return Ok((value, BTreeMap::new()));
    }
    let grads = g.backward(&loss);
    Ok((value, bind.collect_grads(&grads)))
}

/// Train from scratch.
pub fn train(
    cfg: &PipelineConfig,
    train_pairs: &[ImagePair],
    eval_pairs: Option<&[ImagePair]>,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let model = Model::init(cfg.clone());
    let optimizer = AdamW::new(cfg.train.lr, cfg.train.weight_decay);
    train_loop(model, optimizer, 0, train_pairs, eval_pairs, out_dir)
}

/// Continue training from a checkpoint; replays the trajectory the fresh
/// run would have taken.
pub fn train_resume(
    ck: &Checkpoint,
    train_pairs: &[ImagePair],
    eval_pairs: Option<&[ImagePair]>,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let model = Model::from_checkpoint(ck);
    let optimizer = ck.optimizer();
    train_loop(
        model,
        optimizer,
        ck.meta.epoch as usize,
        train_pairs,
        eval_pairs,
        out_dir,
    )
}

fn train_loop(
    mut model: Model,
    mut optimizer: AdamW,
    start_epoch: usize,
    train_pairs: &[ImagePair],
    eval_pairs: Option<&[ImagePair]>,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    if train_pairs.is_empty() {
        return Err(HarnessError::EmptyDataset);
    }
    let cfg = model.cfg.clone();
    let seed = cfg.seed;
    let mut step_losses = Vec::new();
    let mut epoch_mean_losses = Vec::new();
    let mut eval_history = Vec::new();
    let mut total_steps = optimizer.step_count;
    let mut completed = start_epoch as u64;

    'epochs: for epoch in start_epoch..cfg.train.epochs {
        use rand::seq::SliceRandom;
        let mut order: Vec<usize> = (0..train_pairs.len()).collect();
        order.shuffle(&mut derive_rng(seed, &["order", &epoch.to_string()]));

        let mut epoch_losses = Vec::new();
        for (step, batch) in order.chunks(cfg.train.batch_size).enumerate() {
            let pool = build_transform_pool(
                cfg.mefl.n_experts,
                &mut derive_rng(seed, &["pool", &epoch.to_string(), &step.to_string()]),
                &cfg.mefl,
            )?;

            let slots: Vec<(usize, &ImagePair)> =
                batch.iter().map(|&i| &train_pairs[i]).enumerate().collect();
            let results: Vec<Result<(f64, BTreeMap<String, ArrayD<f64>>, Array2<f64>, (usize, usize), usize)>> = slots
                .par_iter()
                .map(|(slot, pair)| {
                    let (template, gt) =
                        slot_template(pair, cfg.train.template_size, seed, epoch, step, *slot)?;
                    let (loss, grads) = pair_loss_and_grads(
                        &model.params,
                        &cfg,
                        &pair.optical,
                        &template,
                        gt,
                        &pool,
                    )?;
                    Ok((loss, grads, template, gt, *slot))
                })
                .collect();

            let mut batch_loss = 0.0;
            let mut acc: BTreeMap<String, ArrayD<f64>> = BTreeMap::new();
            for res in results {
                let (loss, grads, template, gt, slot) = res?;
                if !loss.is_finite() {
                    let diag = dump_diagnostics(
                        out_dir,
                        epoch,
                        step,
                        slot,
                        &train_pairs[batch[slot]],
                        &template,
                        gt,
                    );
                    return Err(HarnessError::NonFiniteLoss {
                        epoch,
                        step,
                        diagnostics: diag,
                    });
                }
                batch_loss += loss;
                add_grads(&mut acc, &grads);
            }
            let inv = 1.0 / batch.len() as f64;
            for g in acc.values_mut() {
                g.mapv_inplace(|v| v * inv);
            }
            optimizer.step(&mut model.params, &acc);
            total_steps += 1;
            batch_loss *= inv;
            step_losses.push(batch_loss);
            epoch_losses.push(batch_loss);

            if cfg.train.eval_every > 0 && total_steps % cfg.train.eval_every as u64 == 0 {
                if let Some(pairs) = eval_pairs {
                    let report = evaluate(&model, pairs, &[1, 2, 3, 5])?;
                    eval_history.push((epoch, report));
                }
            }
        }
        completed = epoch as u64 + 1;
        epoch_mean_losses.push(epoch_losses.iter().sum::<f64>() / epoch_losses.len() as f64);

        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir)?;
            let outcome_view = TrainOutcome {
                model: model.clone(),
                optimizer: optimizer.clone(),
                step_losses: step_losses.clone(),
                epoch_mean_losses: epoch_mean_losses.clone(),
                eval_history: Vec::new(),
                completed_epochs: completed,
                total_steps,
            };
            outcome_view
                .to_checkpoint()
                .save(&dir.join(format!("checkpoint_epoch_{}.ckpt", completed)))?;
        }

        if let Some(pairs) = eval_pairs {
            let report = evaluate(&model, pairs, &[1, 2, 3, 5])?;
            let cmr1 = report.cmr.get(&1).copied().unwrap_or(0.0);
            eval_history.push((epoch, report));
            if let Some(target) = cfg.train.early_stop_cmr1 {
                if cmr1 >= target {
                    break 'epochs;
                }
            }
        }
    }

    let outcome = TrainOutcome {
        model,
        optimizer,
        step_losses,
        epoch_mean_losses,
        eval_history,
        completed_epochs: completed,
        total_steps,
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        outcome.to_checkpoint().save(&dir.join("model.ckpt"))?;
    }
    Ok(outcome)
}

fn dump_diagnostics(
    out_dir: Option<&Path>,
    epoch: usize,
    step: usize,
    slot: usize,
    pair: &ImagePair,
    template: &Array2<f64>,
    gt: (usize, usize),
) -> String {
    let Some(dir) = out_dir else {
        return format!("pair {} (no out dir to dump into)", pair.pair_id);
    };
    let diag = dir.join(format!("diagnostics_e{epoch}_s{step}"));
    let _ = std::fs::create_dir_all(&diag);
    let _ = crate::arrayio::save_array(
        &diag.join(format!("slot{slot}_optical.parr")),
        &pair.optical.clone().into_dyn(),
        crate::arrayio::Dtype::F64,
    );
    let _ = crate::arrayio::save_array(
        &diag.join(format!("slot{slot}_template.parr")),
        &template.clone().into_dyn(),
        crate::arrayio::Dtype::F64,
    );
    let _ = std::fs::write(
        diag.join(format!("slot{slot}_info.txt")),
        format!("pair_id: {}\ngt: {:?}\n", pair.pair_id, gt),
    );
    diag.display().to_string()
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Outcome for one evaluated pair.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct PairOutcome {
    pub pair_id: String,
    pub predicted: (usize, usize),
    pub score: f64,
    pub l2: f64,
}

/// Aggregated evaluation metrics.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub mean_l2: f64,
    /// Correct-matching rate per integer threshold.
    pub cmr: BTreeMap<u32, f64>,
    /// Mean wall time of the full match path per pair.
    pub wall_time_ms: f64,
    pub per_pair: Vec<PairOutcome>,
}

/// Evaluate an arbitrary predictor. The predictor sees the pair but the L2
/// error and CMR are computed here, after it has committed to a location.
pub fn evaluate_with<F>(predict: F, pairs: &[ImagePair], thresholds: &[u32]) -> Result<EvalReport>
where
    F: Fn(&ImagePair) -> Result<MatchResult> + Sync,
{
    if pairs.is_empty() {
        return Err(HarnessError::EmptyDataset);
    }
    for p in pairs {
        if p.gt_offset.is_none() {
            return Err(HarnessError::MissingGt(p.pair_id.clone()));
        }
    }
    let outcomes: Vec<Result<(PairOutcome, f64)>> = pairs
        .par_iter()
        .map(|pair| {
            let t0 = Instant::now();
            let res = predict(pair)?;
            let ms = t0.elapsed().as_secs_f64() * 1e3;
            let gt = pair.gt_offset.unwrap();
            Ok((
                PairOutcome {
                    pair_id: pair.pair_id.clone(),
                    predicted: res.predicted,
                    score: res.score,
                    l2: l2_dist(res.predicted, gt),
                },
                ms,
            ))
        })
        .collect();
    let mut per_pair = Vec::with_capacity(pairs.len());
    let mut total_ms = 0.0;
    for o in outcomes {
        let (p, ms) = o?;
        total_ms += ms;
        per_pair.push(p);
    }
    let n = per_pair.len() as f64;
    let mean_l2 = per_pair.iter().map(|p| p.l2).sum::<f64>() / n;
    let mut cmr = BTreeMap::new();
    for &t in thresholds {
        let hits = per_pair.iter().filter(|p| p.l2 <= t as f64).count();
        cmr.insert(t, hits as f64 / n);
    }
    Ok(EvalReport {
        mean_l2,
        cmr,
        wall_time_ms: total_ms / n,
        per_pair,
    })
}

/// Evaluate the learned model over a dataset with ground truth.
pub fn evaluate(model: &Model, pairs: &[ImagePair], thresholds: &[u32]) -> Result<EvalReport> {
    evaluate_with(
        |pair| model.match_pair(pair).map(|(res, _)| res),
        pairs,
        thresholds,
    )
}

// ---------------------------------------------------------------------------
// NCC baseline
// ---------------------------------------------------------------------------

/// Mean-subtracted normalized cross-correlation on raw intensities.
/// Zero-variance windows score 0.
pub fn ncc_baseline(pair: &ImagePair) -> Result<MatchResult> {
    let (hs, ws) = pair.sar.dim();
    let (ho, wo) = pair.optical.dim();
    if hs > ho || ws > wo {
        return Err(HarnessError::Matcher(MatcherError::TemplateTooLarge {
            th: hs,
            tw: ws,
            rh: ho,
            rw: wo,
        }));
    }
    let tmean = pair.sar.mean().unwrap();
    let tc = pair.sar.mapv(|v| v - tmean);
    let nt = tc.iter().map(|v| v * v).sum::<f64>().sqrt();
    let (hm, wm) = (ho - hs + 1, wo - ws + 1);
    let mut scores = Array2::<f64>::zeros((hm, wm));
    if nt > 1e-12 {
        let t3 = tc.clone().into_shape_with_order((1, hs, ws)).unwrap();
        let o3 = pair
            .optical
            .clone()
            .into_shape_with_order((1, ho, wo))
            .unwrap();
        let num = corr_valid(&t3, &o3);
        // integral images for window sums and squared sums
        let mut s1 = Array2::<f64>::zeros((ho + 1, wo + 1));
        let mut s2 = Array2::<f64>::zeros((ho + 1, wo + 1));
        for r in 0..ho {
            for c in 0..wo {
                let v = pair.optical[[r, c]];
                s1[[r + 1, c + 1]] = v + s1[[r, c + 1]] + s1[[r + 1, c]] - s1[[r, c]];
                s2[[r + 1, c + 1]] = v * v + s2[[r, c + 1]] + s2[[r + 1, c]] - s2[[r, c]];
            }
        }
        let area = (hs * ws) as f64;
        for i in 0..hm {
            for j in 0..wm {
                let sum = s1[[i + hs, j + ws]] - s1[[i, j + ws]] - s1[[i + hs, j]] + s1[[i, j]];
                let sq = s2[[i + hs, j + ws]] - s2[[i, j + ws]] - s2[[i + hs, j]] + s2[[i, j]];
                let var_term = (sq - sum * sum / area).max(0.0).sqrt();
                scores[[i, j]] = if var_term > 1e-12 {
                    num[[i, j]] / (nt * var_term)
                } else {
                    0.0
                };
            }
        }
    }
    let sim = SimilarityMap {
        scores,
        template_dims: (hs, ws),
        reference_dims: (ho, wo),
    };
    let mut res = locate_peak(&sim)?;
    if let Some(gt) = pair.gt_offset {
        res.l2_error = Some(l2_dist(res.predicted, gt));
    }
    Ok(res)
}

// ---------------------------------------------------------------------------
// Robustness sweep
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub variance_pct: f64,
    pub mean_l2: f64,
    pub cmr1: f64,
    pub cmr3: f64,
}

/// Evaluate under additive Gaussian noise on the optical images at each
/// variance; persists a CSV table and a line plot.
pub fn robustness_sweep(
    model: &Model,
    pairs: &[ImagePair],
    variances: &[f64],
    noise_seed: u64,
    out_dir: &Path,
) -> Result<Vec<RobustnessRow>> {
    std::fs::create_dir_all(out_dir)?;
    let mut rows = Vec::new();
    for &var in variances {
        let noisy: Vec<ImagePair> = pairs
            .iter()
            .map(|p| {
                let mut rng =
                    derive_rng(noise_seed, &["noise", &format!("{var}"), &p.pair_id]);
                Ok(ImagePair {
                    optical: add_gaussian_noise(&p.optical, var, &mut rng)?,
                    ..p.clone()
                })
            })
            .collect::<Result<_>>()?;
        let report = evaluate(model, &noisy, &[1, 2, 3, 5])?;
        rows.push(RobustnessRow {
            variance_pct: var,
            mean_l2: report.mean_l2,
            cmr1: report.cmr[&1],
            cmr3: report.cmr[&3],
        });
    }
    let mut csv = String::from("variance_pct,mean_l2,cmr1,cmr3\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{:.6},{:.6},{:.6}\n",
            r.variance_pct, r.mean_l2, r.cmr1, r.cmr3
        ));
    }
    std::fs::write(out_dir.join("robustness.csv"), csv)?;
    line_chart(
        &out_dir.join("robustness.svg"),
        "Noise robustness",
        "noise variance (% of unit range)",
        "CMR",
        &[
            Series {
                name: "CMR(1)".into(),
                points: rows.iter().map(|r| (r.variance_pct, r.cmr1)).collect(),
            },
            Series {
                name: "CMR(3)".into(),
                points: rows.iter().map(|r| (r.variance_pct, r.cmr3)).collect(),
            },
        ],
    )?;
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Ablation suite
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub mefl: bool,
    pub mfa: bool,
    pub n_experts: usize,
    pub fusion: String,
    pub mean_l2: f64,
    pub cmr: BTreeMap<u32, f64>,
}

/// Train and evaluate the desk-scale ablation grid: module on/off rows,
/// the expert-count sweep, and the fusion-mode comparison. Report only; no
/// ordering is asserted anywhere.
pub fn ablation_suite(
    base: &PipelineConfig,
    train_pairs: &[ImagePair],
    eval_pairs: &[ImagePair],
    out_dir: &Path,
) -> Result<Vec<AblationRow>> {
    std::fs::create_dir_all(out_dir)?;
    let cells: Vec<(&str, bool, usize, Fusion)> = vec![
        ("base", false, 1, Fusion::SoftRouter),
        ("mfa_only", true, 1, Fusion::SoftRouter),
        ("mefl_only", false, 4, Fusion::SoftRouter),
        ("mfa_mefl_2", true, 2, Fusion::SoftRouter),
        ("mfa_mefl_3", true, 3, Fusion::SoftRouter),
        ("mfa_mefl_4", true, 4, Fusion::SoftRouter),
        ("mfa_mefl_4_uniform", true, 4, Fusion::Uniform),
        ("mfa_mefl_4_sparse2", true, 4, Fusion::SparseTop2),
    ];
    let mut rows = Vec::new();
    for (name, mfa, n_experts, fusion) in cells {
        let mut cfg = base.clone();
        cfg.backbone.mfa_enabled = mfa;
        cfg.mefl.n_experts = n_experts;
        cfg.mefl.fusion = fusion;
        let outcome = train(&cfg, train_pairs, None, None)?;
        let report = evaluate(&outcome.model, eval_pairs, &[1, 2, 3, 5])?;
        rows.push(AblationRow {
            name: name.to_string(),
            mefl: n_experts > 1,
            mfa,
            n_experts,
            fusion: format!("{fusion:?}"),
            mean_l2: report.mean_l2,
            cmr: report.cmr,
        });
    }
    let json = serde_json::to_string_pretty(&rows).expect("rows serialize");
    std::fs::write(out_dir.join("ablation.json"), json + "\n")?;
    let mut md = String::from(
        "| cell | MFA | experts | fusion | mean L2 | CMR(1) | CMR(2) | CMR(3) | CMR(5) |\n|---|---|---|---|---|---|---|---|---|\n",
    );
    for r in &rows {
        md.push_str(&format!(
            "| {} | {} | {} | {} | {:.3} | {:.3} | {:.3} | {:.3} | {:.3} |\n",
            r.name,
            if r.mfa { "on" } else { "off" },
            r.n_experts,
            r.fusion,
            r.mean_l2,
            r.cmr[&1],
            r.cmr[&2],
            r.cmr[&3],
            r.cmr[&5]
        ));
    }
    std::fs::write(out_dir.join("ablation.md"), md)?;
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

/// Top-level machine-readable metrics document.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsDoc {
    pub schema_version: u32,
    pub reports: BTreeMap<String, EvalReport>,
}

/// Write metrics.json, report.md, and the CMR curve (plus optional loss and
/// robustness plots). Returns the emitted paths.
pub fn report(
    named: &[(String, EvalReport)],
    out_dir: &Path,
    loss_history: Option<&[f64]>,
    robustness: Option<&[RobustnessRow]>,
) -> Result<Vec<PathBuf>> {
    if named.is_empty() {
        return Err(HarnessError::EmptyDataset);
    }
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();

    let doc = MetricsDoc {
        schema_version: 1,
        reports: named.iter().cloned().collect(),
    };
    let json_path = out_dir.join("metrics.json");
    let json = serde_json::to_string_pretty(&doc).expect("metrics serialize");
    std::fs::write(&json_path, json + "\n")?;
    written.push(json_path);

    // markdown summary
    let mut md = String::from("# Evaluation report\n\n");
    md.push_str("| report | mean L2 | ");
    let thresholds: Vec<u32> = named[0].1.cmr.keys().copied().collect();
    for t in &thresholds {
        md.push_str(&format!("CMR({t}) | "));
    }
    md.push_str("ms/pair |\n|---|---|");
    for _ in &thresholds {
        md.push_str("---|");
    }
    md.push_str("---|\n");
    for (name, r) in named {
        md.push_str(&format!("| {name} | {:.4} | ", r.mean_l2));
        for t in &thresholds {
            md.push_str(&format!("{:.4} | ", r.cmr.get(t).copied().unwrap_or(f64::NAN)));
        }
        md.push_str(&format!("{:.2} |\n", r.wall_time_ms));
    }
    if named.len() > 1 {
        // per-pair comparison aligned on the union of pair ids
        let mut ids: Vec<String> = named
            .iter()
            .flat_map(|(_, r)| r.per_pair.iter().map(|p| p.pair_id.clone()))
            .collect();
        ids.sort();
        ids.dedup();
        md.push_str("\n## Per-pair L2\n\n| pair |");
        for (name, _) in named {
            md.push_str(&format!(" {name} |"));
        }
        md.push_str("\n|---|");
        for _ in named {
            md.push_str("---|");
        }
        md.push('\n');
        for id in &ids {
            md.push_str(&format!("| {id} |"));
            for (_, r) in named {
                match r.per_pair.iter().find(|p| &p.pair_id == id) {
                    Some(p) => md.push_str(&format!(" {:.2} |", p.l2)),
                    None => md.push_str(" - |"),
                }
            }
            md.push('\n');
        }
    }
    let md_path = out_dir.join("report.md");
    std::fs::write(&md_path, md)?;
    written.push(md_path);

    let cmr_series: Vec<Series> = named
        .iter()
        .map(|(name, r)| Series {
            name: name.clone(),
            points: r.cmr.iter().map(|(&t, &v)| (t as f64, v)).collect(),
        })
        .collect();
    let cmr_path = out_dir.join("cmr_curve.svg");
    line_chart(&cmr_path, "CMR vs threshold", "T (pixels)", "CMR", &cmr_series)?;
    written.push(cmr_path);

    if let Some(losses) = loss_history {
        let p = out_dir.join("loss_curve.svg");
        line_chart(
            &p,
            "Training loss",
            "step",
            "batch loss",
            &[Series {
                name: "loss".into(),
                points: losses
                    .iter()
                    .enumerate()
                    .map(|(i, &l)| (i as f64, l))
                    .collect(),
            }],
        )?;
        written.push(p);
    }
    if let Some(rows) = robustness {
        let p = out_dir.join("robustness.svg");
        line_chart(
            &p,
            "Noise robustness",
            "noise variance (%)",
            "CMR",
            &[
                Series {
                    name: "CMR(1)".into(),
                    points: rows.iter().map(|r| (r.variance_pct, r.cmr1)).collect(),
                },
                Series {
                    name: "CMR(3)".into(),
                    points: rows.iter().map(|r| (r.variance_pct, r.cmr3)).collect(),
                },
            ],
        )?;
        written.push(p);
    }
    Ok(written)
}

// ---------------------------------------------------------------------------
// Synthetic corpora
// ---------------------------------------------------------------------------

/// Generate an in-memory corpus. `fixed_templates` yields evaluation-style
/// pairs (cropped template plus ground truth); otherwise the pairs carry the
/// full co-registered SAR scene for per-step cropping.
pub fn synth_corpus(
    cfg: &SynthConfig,
    n: usize,
    split: &str,
    fixed_templates: bool,
) -> Result<Vec<ImagePair>> {
    (0..n)
        .map(|i| {
            let pair_id = format!("{split}_{i:04}");
            let mut rng = derive_rng(cfg.seed, &["pair", split, &i.to_string()]);
            let (pair, sar_full) = synth_pair(cfg, &mut rng, &pair_id)?;
            if fixed_templates {
                Ok(pair)
            } else {
                Ok(ImagePair {
                    pair_id,
                    optical: pair.optical,
                    sar: sar_full,
                    gt_offset: None,
                })
            }
        })
        .collect()
}

/// Write a synthetic corpus to disk: `train/` holds full co-registered
/// scenes without ground truth, `test/` holds fixed templates with their
/// offsets. Each split gets a `manifest.jsonl`.
pub fn write_synth_corpus(
    cfg: &SynthConfig,
    n_train: usize,
    n_test: usize,
    out_dir: &Path,
) -> Result<(PathBuf, PathBuf)> {
    use std::io::Write;
    let mut manifests = Vec::new();
    for (split, n, fixed) in [("train", n_train, false), ("test", n_test, true)] {
        let dir = out_dir.join(split);
        std::fs::create_dir_all(&dir)?;
        let pairs = synth_corpus(cfg, n, split, fixed)?;
        let mpath = dir.join("manifest.jsonl");
        let mut f = std::io::BufWriter::new(std::fs::File::create(&mpath)?);
        for p in &pairs {
            let opt_name = format!("{}_optical.png", p.pair_id);
            let sar_name = format!("{}_sar.png", p.pair_id);
            save_image(&dir.join(&opt_name), &p.optical)
                .map_err(|e| HarnessError::Data(DataError::BadImage {
                    pair_id: p.pair_id.clone(),
                    reason: e,
                }))?;
            save_image(&dir.join(&sar_name), &p.sar)
                .map_err(|e| HarnessError::Data(DataError::BadImage {
                    pair_id: p.pair_id.clone(),
                    reason: e,
                }))?;
            let rec = ManifestRecord {
                pair_id: p.pair_id.clone(),
                optical_path: opt_name,
                sar_path: sar_name,
                gt_row: p.gt_offset.map(|g| g.0),
                gt_col: p.gt_offset.map(|g| g.1),
            };
            writeln!(f, "{}", serde_json::to_string(&rec).expect("record serializes"))?;
        }
        manifests.push(mpath);
    }
    Ok((manifests.remove(0), manifests.remove(0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::mefl::MeflConfig;

    /// Micro config for fast full-path tests.
    fn micro_cfg() -> PipelineConfig {
        PipelineConfig {
            seed: 1,
            backbone: BackboneConfig {
                stem_channels: 4,
                patch_size: 2,
                stage_channels: vec![8, 16, 24],
                blocks_per_stage: 1,
                decoder_channels: 8,
                state_dim: 3,
                ..Default::default()
            },
            mefl: MeflConfig {
                n_experts: 2,
                ..Default::default()
            },
            data: SynthConfig {
                image_size: 16,
                template_size: 12,
                n_shapes: 3,
                ..Default::default()
            },
            train: crate::config::TrainConfig {
                batch_size: 2,
                epochs: 2,
                template_size: 12,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn lr_zero_step_leaves_params_bit_identical() {
        let mut cfg = micro_cfg();
        cfg.train.lr = 1e-30; // config validation requires lr > 0
        cfg.train.epochs = 1;
        let pairs = synth_corpus(&cfg.data, 2, "t", false).unwrap();
        let fresh = Model::init(cfg.clone());
        let mut zero = cfg.clone();
        zero.train.epochs = 1;
        let outcome = {
            // drive one step with an actually-zero optimizer
            let model = Model::init(zero.clone());
            let optimizer = AdamW::new(0.0, 0.0);
            train_loop(model, optimizer, 0, &pairs, None, None).unwrap()
        };
        for (k, v) in fresh.params.iter() {
            assert_eq!(outcome.model.params.get(k), v, "param {k} changed");
        }
        assert!(outcome.step_losses.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn training_step_changes_params_and_is_deterministic() {
        let cfg = micro_cfg();
        let pairs = synth_corpus(&cfg.data, 2, "t", false).unwrap();
        let a = train(&cfg, &pairs, None, None).unwrap();
        let b = train(&cfg, &pairs, None, None).unwrap();
        assert_eq!(a.step_losses, b.step_losses, "bit-deterministic training");
        for (k, v) in a.model.params.iter() {
            assert_eq!(b.model.params.get(k), v);
        }
        let fresh = Model::init(cfg);
        let moved = a
            .model
            .params
            .iter()
            .any(|(k, v)| fresh.params.get(k) != v);
        assert!(moved, "training must move parameters");
    }

    #[test]
    fn resume_replays_trajectory() {
        let cfg = micro_cfg();
        let pairs = synth_corpus(&cfg.data, 4, "t", false).unwrap();
        let full = train(&cfg, &pairs, None, None).unwrap();

        let mut one = cfg.clone();
        one.train.epochs = 1;
        let first = train(&one, &pairs, None, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let ckpath = dir.path().join("e1.ckpt");
        let mut ck = first.to_checkpoint();
        ck.meta.config.train.epochs = cfg.train.epochs;
        ck.save(&ckpath).unwrap();
        let loaded = Checkpoint::load(&ckpath).unwrap();
        let resumed = train_resume(&loaded, &pairs, None, None).unwrap();

        let mut replay = first.step_losses.clone();
        replay.extend(&resumed.step_losses);
        assert_eq!(
            replay, full.step_losses,
            "resumed trajectory must match the uninterrupted run bit-for-bit"
        );
        for (k, v) in full.model.params.iter() {
            assert_eq!(resumed.model.params.get(k), v, "param {k}");
        }
    }

    #[test]
    fn evaluate_oracle_and_forced_offset_stubs() {
        let cfg = micro_cfg();
        let pairs = synth_corpus(&cfg.data, 6, "e", true).unwrap();
        // oracle stub: predictions equal to ground truth
        let r = evaluate_with(
            |p| {
                Ok(MatchResult {
                    predicted: p.gt_offset.unwrap(),
                    score: 1.0,
                    l2_error: None,
                })
            },
            &pairs,
            &[1, 2, 3, 5],
        )
        .unwrap();
        assert_eq!(r.mean_l2, 0.0);
        for (_, v) in r.cmr.iter() {
            assert_eq!(*v, 1.0);
        }

        // forced offset (0, 2): CMR(1) = 0, CMR(2) = 1, mean L2 = 2
        let shifted: Vec<ImagePair> = pairs
            .iter()
            .map(|p| {
                let gt = p.gt_offset.unwrap();
                ImagePair {
                    gt_offset: Some((gt.0, gt.1 + 2)),
                    ..p.clone()
                }
            })
            .collect();
        let r = evaluate_with(
            |p| {
                let gt = p.gt_offset.unwrap();
                Ok(MatchResult {
                    predicted: (gt.0, gt.1 - 2),
                    score: 1.0,
                    l2_error: None,
                })
            },
            &shifted,
            &[1, 2, 3, 5],
        )
        .unwrap();
        assert_eq!(r.cmr[&1], 0.0);
        assert_eq!(r.cmr[&2], 1.0);
        assert_eq!(r.mean_l2, 2.0);
        // monotone CMR
        let vals: Vec<f64> = r.cmr.values().copied().collect();
        assert!(vals.windows(2).all(|w| w[0] <= w[1]));

        // missing gt rejected by pair id
        let mut nogt = pairs.clone();
        nogt[3].gt_offset = None;
        match evaluate_with(
            |_| {
                Ok(MatchResult {
                    predicted: (0, 0),
                    score: 0.0,
                    l2_error: None,
                })
            },
            &nogt,
            &[1],
        ) {
            Err(HarnessError::MissingGt(id)) => assert_eq!(id, "e_0003"),
            other => panic!("expected MissingGt, got {other:?}"),
        }
    }

    #[test]
    fn random_predictor_matches_closed_form_cmr() {
        // uniform gt and uniform predictions on an 8x8 offset grid: the
        // probability of L2 <= 1 is 288/4096
        let n = 3000;
        let pairs: Vec<ImagePair> = (0..n)
            .map(|i| {
                let mut rng = derive_rng(77, &["mc", &i.to_string()]);
                use rand::Rng;
                ImagePair {
                    pair_id: format!("mc{i}"),
                    optical: Array2::zeros((10, 10)),
                    sar: Array2::zeros((3, 3)),
                    gt_offset: Some((rng.gen_range(0..8), rng.gen_range(0..8))),
                }
            })
            .collect();
        let r = evaluate_with(
            |p| {
                let mut rng = derive_rng(78, &["pred", &p.pair_id]);
                use rand::Rng;
                Ok(MatchResult {
                    predicted: (rng.gen_range(0..8), rng.gen_range(0..8)),
                    score: 0.0,
                    l2_error: None,
                })
            },
            &pairs,
            &[1],
        )
        .unwrap();
        let p_closed = 288.0 / 4096.0;
        let se = (p_closed * (1.0 - p_closed) / n as f64).sqrt();
        assert!(
            (r.cmr[&1] - p_closed).abs() < 4.0 * se,
            "cmr {} vs closed form {p_closed}",
            r.cmr[&1]
        );
    }

    #[test]
    fn evaluation_leaves_weights_untouched() {
        let cfg = micro_cfg();
        let pairs = synth_corpus(&cfg.data, 2, "w", true).unwrap();
        let model = Model::init(cfg);
        let before = model.params.content_hash();
        let _ = evaluate(&model, &pairs, &[1, 3]).unwrap();
        assert_eq!(model.params.content_hash(), before);
    }

    #[test]
    fn ncc_baseline_cases() {
        // template cut from the reference: argmax at the cut, score ~ 1
        let mut rng = derive_rng(5, &["ncc"]);
        use rand::Rng;
        let optical = Array2::from_shape_fn((20, 20), |_| rng.gen_range(0.0..1.0));
        let template = optical.slice(ndarray::s![4..12, 6..14]).to_owned();
        let pair = ImagePair {
            pair_id: "cut".into(),
            optical: optical.clone(),
            sar: template,
            gt_offset: Some((4, 6)),
        };
        let res = ncc_baseline(&pair).unwrap();
        assert_eq!(res.predicted, (4, 6));
        assert!((res.score - 1.0).abs() < 1e-9);
        assert_eq!(res.l2_error, Some(0.0));

        // constant reference: all-zero scores, tie-break (0, 0)
        let pair = ImagePair {
            pair_id: "flat".into(),
            optical: Array2::from_elem((12, 12), 0.5),
            sar: Array2::from_shape_fn((4, 4), |_| rng.gen_range(0.0..1.0)),
            gt_offset: None,
        };
        let res = ncc_baseline(&pair).unwrap();
        assert_eq!(res.predicted, (0, 0));
        assert_eq!(res.score, 0.0);
    }

    #[test]
    fn ncc_baseline_band_on_noiseless_corpus() {
        let cfg = SynthConfig::default();
        let pairs = synth_corpus(&cfg, 100, "band", true).unwrap();
        let r = evaluate_with(ncc_baseline, &pairs, &[2]).unwrap();
        let rate = r.cmr[&2];
        assert!(
            (0.60..=0.95).contains(&rate),
            "raw-intensity NCC success rate {rate:.2} outside the solvable-but-nontrivial band"
        );
    }

    #[test]
    fn nonfinite_loss_aborts_with_diagnostics() {
        let cfg = micro_cfg();
        let pairs = synth_corpus(&cfg.data, 2, "n", false).unwrap();
        let mut model = Model::init(cfg.clone());
        // poison one weight
        let mut bad = model.params.get("opt.stem.conv.w").clone();
        bad[[0, 0, 0, 0]] = f64::NAN;
        model.params.set("opt.stem.conv.w", bad);
        let dir = tempfile::tempdir().unwrap();
        let err = train_loop(
            model,
            AdamW::new(cfg.train.lr, 0.0),
            0,
            &pairs,
            None,
            Some(dir.path()),
        )
        .unwrap_err();
        match err {
            HarnessError::NonFiniteLoss { diagnostics, .. } => {
                assert!(std::path::Path::new(&diagnostics).exists());
                let entries: Vec<_> = std::fs::read_dir(&diagnostics).unwrap().collect();
                assert!(!entries.is_empty(), "diagnostic dump should contain files");
            }
            other => panic!("expected NonFiniteLoss, got {other:?}"),
        }
    }

    #[test]
    fn report_files_emitted() {
        let dir = tempfile::tempdir().unwrap();
        let fake = EvalReport {
            mean_l2: 1.5,
            cmr: [(1, 0.5), (2, 0.7), (3, 0.8), (5, 0.9)].into_iter().collect(),
            wall_time_ms: 10.0,
            per_pair: vec![PairOutcome {
                pair_id: "p0".into(),
                predicted: (1, 2),
                score: 0.8,
                l2: 1.5,
            }],
        };
        let written = report(
            &[("eval".to_string(), fake.clone())],
            dir.path(),
            Some(&[2.0, 1.5, 1.0]),
            None,
        )
        .unwrap();
        assert!(written.iter().any(|p| p.ends_with("metrics.json")));
        assert!(written.iter().any(|p| p.ends_with("report.md")));
        assert!(written.iter().any(|p| p.ends_with("cmr_curve.svg")));
        assert!(written.iter().any(|p| p.ends_with("loss_curve.svg")));
        for p in &written {
            assert!(p.exists());
        }

        // two reports: the markdown aligns pairs across columns
        let written = report(
            &[("a".to_string(), fake.clone()), ("b".to_string(), fake)],
            dir.path(),
            None,
            None,
        )
        .unwrap();
        let md = std::fs::read_to_string(written.iter().find(|p| p.ends_with("report.md")).unwrap())
            .unwrap();
        assert!(md.contains("Per-pair"));
        assert!(md.contains("p0"));
    }
}
