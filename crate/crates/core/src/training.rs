//! Losses and training loops for the three stages: representation
//! pretraining, teacher-forced location pretraining, and joint REINFORCE +
//! classification training.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    cell_step_on_tape, mean_logits, mixed_features, select_index, unroll_batch, CellState, GlimpseTrace, SelectMode,
};
use crate::autodiff::{Tape, Var};
use crate::data::{rng_stream, Dataset, DatasetFile};
use crate::error::{Error, Result};
use crate::model::{init_location, set_input_stats, Geometry, Location, ModelConfig};
use crate::optim::{adam_step, cosine_lr, sgd_nesterov_step, Optimizer, OptimizerState};
use crate::params::{BnMode, Ctx, ParameterSet, Role, BN_MOMENTUM};
use crate::representation::{log_geometric_mean_probs, represent, ReprOutput};
use crate::tensor::{argmax, Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// L2 weight on θ.
    pub lambda_repr: f64,
    /// L2 weight on η during joint training.
    pub nu_loc: f64,
    /// L2 weight on η during location pretraining.
    pub nu_pretrain: f64,
    pub t_pretrain: usize,
    pub t_joint: usize,
    pub samples: usize,
    pub lr_repr: f64,
    pub lr_pretrain: f64,
    pub lr_joint: f64,
    pub batch_size: usize,
    pub epochs_repr: usize,
    pub epochs_pretrain: usize,
    pub epochs_joint: usize,
    pub warmup_epochs: usize,
    pub momentum: f64,
    pub optimizer: Optimizer,
    pub seed: u64,
    /// Maximum random translation in pixels applied to training images; 0 disables.
    pub random_crop: usize,
    /// Let the REINFORCE term reach θ through the policy.
    pub reinforce_into_theta: bool,
    /// Batch statistics (rather than running averages) while sampling in stage 3.
    pub policy_batch_stats: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_repr: 8e-5,
            nu_loc: 8e-5,
            nu_pretrain: 0.0,
            t_pretrain: 6,
            t_joint: 6,
            samples: 2,
            lr_repr: 0.1,
            lr_pretrain: 0.02,
            lr_joint: 0.01,
            batch_size: 128,
            epochs_repr: 50,
            epochs_pretrain: 50,
            epochs_joint: 50,
            warmup_epochs: 5,
            momentum: 0.9,
            optimizer: Optimizer::Sgd,
            seed: 0,
            random_crop: 0,
            reinforce_into_theta: true,
            policy_batch_stats: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, geom: &Geometry) -> Result<()> {
        let l = geom.locations();
        if self.samples == 0 {
            return Err(Error::Config("samples must be at least 1".into()));
        }
        for (name, t) in [("t_pretrain", self.t_pretrain), ("t_joint", self.t_joint)] {
            if t == 0 || t > l {
                return Err(Error::Config(format!("{name} = {t} must lie in 1..={l}")));
            }
        }
        for (name, v) in [
            ("lr_repr", self.lr_repr),
            ("lr_pretrain", self.lr_pretrain),
            ("lr_joint", self.lr_joint),
        ] {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        Ok(())
    }
}

/// Mean negative log-likelihood of `labels` under row log-probabilities `[N, C]`.
pub fn nll<T: Real>(tape: &mut Tape<T>, log_probs: Var, labels: &[usize]) -> Result<Var> {
    let s = tape.shape(log_probs).to_vec();
    let [n, c] = s[..] else {
        return Err(Error::shape("nll", &s, &[labels.len()]));
    };
    if labels.len() != n {
        return Err(Error::shape("nll", &s, &[labels.len()]));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::LabelOutOfRange { label: bad, classes: c });
    }
    let flat = tape.reshape(log_probs, &[n * c])?;
    let idx: Vec<usize> = labels.iter().enumerate().map(|(i, &y)| i * c + y).collect();
    let picked = tape.select_rows(flat, &idx)?;
    let total = tape.sum(picked);
    Ok(tape.scale(total, T::lit(-1.0 / n as f64)))
}

fn add_opt<T: Real>(tape: &mut Tape<T>, a: Var, b: Option<Var>) -> Result<Var> {
    match b {
        Some(b) => tape.add(a, b),
        None => Ok(a),
    }
}

/// Outputs of the representation loss.
#[derive(Clone, Copy, Debug)]
pub struct ReprLoss {
    pub loss: Var,
    /// Data term without regularization.
    pub nll: Var,
    /// `[B, C]` renormalized class log-probabilities.
    pub log_probs: Var,
}

/// Representation loss over all grid locations: per-location log-softmax,
/// averaged over locations, renormalized, negative target log-probability,
/// batch mean, plus `(λ/2)·Σθ²`.
pub fn loss_representation<T: Real>(
    ctx: &mut Ctx<'_, T>,
    cfg: &ModelConfig,
    images: Var,
    labels: &[usize],
    lambda: f64,
    mode: BnMode,
) -> Result<ReprLoss> {
    let geom = cfg.geometry()?;
    let out = represent(ctx, cfg, &geom, images, mode)?;
    let b = ctx.tape.shape(images)[0];
    let lg = ctx.tape.reshape(out.logits, &[b, geom.locations(), cfg.num_classes])?;
    representation_loss_from_logits(ctx, lg, labels, lambda)
}

/// The representation loss given per-location logits `[B, L, C]`.
pub fn representation_loss_from_logits<T: Real>(
    ctx: &mut Ctx<'_, T>,
    logits: Var,
    labels: &[usize],
    lambda: f64,
) -> Result<ReprLoss> {
    let log_probs = log_geometric_mean_probs(&mut ctx.tape, logits)?;
    let data = nll(&mut ctx.tape, log_probs, labels)?;
    let reg = ctx.l2(Role::Representation, lambda)?;
    let loss = add_opt(&mut ctx.tape, data, reg)?;
    Ok(ReprLoss {
        loss,
        nll: data,
        log_probs,
    })
}

/// Grid location indices sorted by descending per-location maximum logit,
/// ties to the lowest row-major index. `logits` is `[L, C]` row-major.
pub fn rank_by_max_logit<T: Real>(logits: &[T], classes: usize) -> Vec<usize> {
    let maxes: Vec<T> = logits
        .chunks_exact(classes)
        .map(|row| row.iter().copied().fold(T::neg_infinity(), T::max))
        .collect();
    let mut order: Vec<usize> = (0..maxes.len()).collect();
    order.sort_by(|&a, &b| {
        maxes[b]
            .partial_cmp(&maxes[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// The first `t` locations of a `[h, w, C]` logits grid in descending order
/// of maximum logit.
pub fn sorted_location_targets<T: Real>(logits: &Tensor<T>, t: usize) -> Result<Vec<Location>> {
    let s = logits.shape();
    let [h, w, c] = s[..] else {
        return Err(Error::shape("sorted_location_targets", s, &[0, 0, 0]));
    };
    if t > h * w {
        return Err(Error::TooManyGlimpses {
            requested: t,
            available: h * w,
        });
    }
    Ok(rank_by_max_logit(logits.data(), c)
        .into_iter()
        .take(t)
        .map(|i| (i / w, i % w))
        .collect())
}

/// Outputs of the teacher-forced location loss.
#[derive(Clone, Debug)]
pub struct LocationLoss {
    pub loss: Var,
    /// `-Σ_t log π(target_t)`, batch mean.
    pub nll: Var,
    /// Per-example count of steps whose policy argmax was the target.
    pub hits: Vec<usize>,
}

/// Teacher-forced location loss: at every step the state is advanced with
/// the target location regardless of the policy.
/// `loss = mean_b(-Σ_t log π(target_t | X, C^{t-1})) + (ν/2)·Ση²`.
pub fn loss_location_pretrain<T: Real>(
    ctx: &mut Ctx<'_, T>,
    cfg: &ModelConfig,
    out: &ReprOutput,
    targets: &[Vec<usize>],
    nu: f64,
    mode: BnMode,
) -> Result<LocationLoss> {
    let geom = cfg.geometry()?;
    let l = geom.locations();
    let f = mixed_features(ctx, cfg, out, mode, false)?;
    let b = ctx.tape.shape(f)[0];
    if targets.len() != b {
        return Err(Error::InvalidArgument(format!(
            "{} target lists for a batch of {b}",
            targets.len()
        )));
    }
    let steps = targets.first().map_or(0, |t| t.len());
    if targets.iter().any(|t| t.len() != steps) || steps == 0 {
        return Err(Error::InvalidArgument("target lists must share a positive length".into()));
    }
    let query = ctx.param("loc.cell.query")?;
    let mut states = vec![CellState::for_geometry(&geom); b];
    let mut hits = vec![0usize; b];
    let mut total: Option<Var> = None;
    for t in 0..steps {
        let step = cell_step_on_tape(&mut ctx.tape, f, query, &states)?;
        let lp = ctx.tape.value(step.log_policy).data().to_vec();
        let flat = ctx.tape.reshape(step.log_policy, &[b * l])?;
        let idx: Vec<usize> = (0..b).map(|i| i * l + targets[i][t]).collect();
        let picked = ctx.tape.select_rows(flat, &idx)?;
        let s = ctx.tape.sum(picked);
        total = Some(add_opt(&mut ctx.tape, s, total)?);
        for i in 0..b {
            if argmax(&lp[i * l..(i + 1) * l]) == targets[i][t] {
                hits[i] += 1;
            }
            states[i].visit(geom.location(targets[i][t]))?;
        }
    }
    let data = ctx.tape.scale(total.unwrap(), T::lit(-1.0 / b as f64));
    let reg = ctx.l2(Role::Location, nu)?;
    let loss = add_opt(&mut ctx.tape, data, reg)?;
    Ok(LocationLoss { loss, nll: data, hits })
}

/// Sampled trajectories for a minibatch. Row `b * samples + s` holds
/// sample `s` of example `b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryBatch {
    pub samples: usize,
    pub traces: Vec<GlimpseTrace>,
    pub rewards: Vec<u8>,
    /// Mean of all rewards in the minibatch.
    pub baseline: f64,
}

impl TrajectoryBatch {
    pub fn mean_reward(&self) -> f64 {
        self.baseline
    }
}

/// Where stage-3 glimpse locations come from.
pub enum TrajectorySource<'r> {
    /// Draw from the policy with one generator per example; draws are made
    /// in order of step, then sample.
    Sample(&'r mut [ChaCha8Rng]),
    /// Replay fixed locations and rewards (for gradient checks).
    Frozen(&'r TrajectoryBatch),
}

#[derive(Clone, Copy, Debug)]
pub struct JointSettings {
    pub lambda: f64,
    pub nu: f64,
    pub samples: usize,
    pub glimpses: usize,
    pub reinforce_into_theta: bool,
    pub repr_mode: BnMode,
    pub loc_mode: BnMode,
}

#[derive(Clone, Debug)]
pub struct JointLoss {
    pub loss: Var,
    pub reinforce: Var,
    pub classification: Var,
    pub batch: TrajectoryBatch,
}

/// Joint objective:
///
/// ```text
/// -Σ_s (Σ_t log π(l_s^t)) (r_s - b)                REINFORCE, per example
/// -log softmax_c(mean_t log softmax(logits at l_s^t))[y]   per trajectory
/// ```
///
/// The REINFORCE term is summed over samples, the classification term is
/// averaged over samples; both are averaged over the batch. L2 terms on θ
/// and η are added.
pub fn loss_joint<T: Real>(
    ctx: &mut Ctx<'_, T>,
    cfg: &ModelConfig,
    images: Var,
    labels: &[usize],
    settings: &JointSettings,
    source: TrajectorySource<'_>,
) -> Result<JointLoss> {
    let geom = cfg.geometry()?;
    let (l, c) = (geom.locations(), cfg.num_classes);
    let b = ctx.tape.shape(images)[0];
    let (s_count, t_count) = (settings.samples, settings.glimpses);
    if s_count == 0 {
        return Err(Error::InvalidArgument("at least one sample per example".into()));
    }
    if t_count == 0 || t_count > l {
        return Err(Error::TooManyGlimpses {
            requested: t_count,
            available: l,
        });
    }
    if labels.len() != b {
        return Err(Error::InvalidArgument(format!("{} labels for a batch of {b}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::LabelOutOfRange { label: bad, classes: c });
    }
    let rows = b * s_count;
    if let TrajectorySource::Frozen(fixed) = &source {
        if fixed.traces.len() != rows || fixed.rewards.len() != rows || fixed.samples != s_count {
            return Err(Error::InvalidArgument("frozen trajectories do not match the batch".into()));
        }
    }

    let out = represent(ctx, cfg, &geom, images, settings.repr_mode)?;
    let f = mixed_features(ctx, cfg, &out, settings.loc_mode, !settings.reinforce_into_theta)?;
    let replicate: Vec<usize> = (0..rows).map(|r| r / s_count).collect();
    let fs = ctx.tape.select_rows(f, &replicate)?;
    let query = ctx.param("loc.cell.query")?;
    let logits_flat = ctx.tape.reshape(out.logits, &[b * l, c])?;
    let logits_val = ctx.tape.value(logits_flat).clone();

    let mut states = vec![CellState::for_geometry(&geom); rows];
    let mut chosen: Vec<Vec<usize>> = vec![Vec::with_capacity(t_count); rows];
    let mut step_logp: Vec<Vec<f64>> = vec![Vec::with_capacity(t_count); rows];
    let mut logp_sum: Option<Var> = None;
    let mut source = source;
    for t in 0..t_count {
        let step = cell_step_on_tape(&mut ctx.tape, fs, query, &states)?;
        let lp = ctx.tape.value(step.log_policy).data().to_vec();
        let mut idx = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &lp[r * l..(r + 1) * l];
            let pick = match &mut source {
                TrajectorySource::Sample(gens) => {
                    let probs: Vec<f64> = row.iter().map(|v| v.to_f64().unwrap().exp()).collect();
                    select_index(&probs, SelectMode::Sample, &mut gens[r / s_count])
                }
                TrajectorySource::Frozen(fixed) => {
                    let loc = *fixed.traces[r].locations.get(t).ok_or_else(|| {
                        Error::InvalidArgument("frozen trajectory shorter than the glimpse count".into())
                    })?;
                    geom.index(loc)
                }
            };
            states[r].visit(geom.location(pick))?;
            chosen[r].push(pick);
            step_logp[r].push(row[pick].to_f64().unwrap());
            idx.push(r * l + pick);
        }
        let flat = ctx.tape.reshape(step.log_policy, &[rows * l])?;
        let picked = ctx.tape.select_rows(flat, &idx)?;
        logp_sum = Some(add_opt(&mut ctx.tape, picked, logp_sum)?);
    }
    let logp_sum = logp_sum.unwrap();

    let gather: Vec<usize> = (0..rows)
        .flat_map(|r| chosen[r].iter().map(move |&i| (r / s_count) * l + i).collect::<Vec<_>>())
        .collect();
    let picked_logits = ctx.tape.select_rows(logits_flat, &gather)?;
    let picked_logits = ctx.tape.reshape(picked_logits, &[rows, t_count, c])?;

    let mut traces = Vec::with_capacity(rows);
    let mut rewards = Vec::with_capacity(rows);
    for r in 0..rows {
        let per_step_logits: Vec<Vec<f64>> = gather[r * t_count..(r + 1) * t_count]
            .iter()
            .map(|&g| logits_val.data()[g * c..(g + 1) * c].iter().map(|v| v.to_f64().unwrap()).collect())
            .collect();
        let averaged_logits = mean_logits(&per_step_logits);
        let reward = match &source {
            TrajectorySource::Sample(_) => u8::from(argmax(&averaged_logits) == labels[r / s_count]),
            TrajectorySource::Frozen(fixed) => fixed.rewards[r],
        };
        rewards.push(reward);
        traces.push(GlimpseTrace {
            locations: chosen[r].iter().map(|&i| geom.location(i)).collect(),
            per_step_logits,
            averaged_logits,
            per_step_log_probs: step_logp[r].clone(),
            reward: Some(reward),
        });
    }
    let baseline = rewards.iter().map(|&r| r as f64).sum::<f64>() / rows as f64;

    let adv = Tensor::new(&[rows], rewards.iter().map(|&r| T::lit(r as f64 - baseline)).collect())?;
    let adv = ctx.constant(adv);
    let weighted = ctx.tape.mul(logp_sum, adv)?;
    let weighted = ctx.tape.sum(weighted);
    let reinforce = ctx.tape.scale(weighted, T::lit(-1.0 / b as f64));

    let class_lp = log_geometric_mean_probs(&mut ctx.tape, picked_logits)?;
    let row_labels: Vec<usize> = (0..rows).map(|r| labels[r / s_count]).collect();
    let classification = nll(&mut ctx.tape, class_lp, &row_labels)?;

    let total = ctx.tape.add(reinforce, classification)?;
    let reg_repr = ctx.l2(Role::Representation, settings.lambda)?;
    let total = add_opt(&mut ctx.tape, total, reg_repr)?;
    let reg_loc = ctx.l2(Role::Location, settings.nu)?;
    let loss = add_opt(&mut ctx.tape, total, reg_loc)?;
    Ok(JointLoss {
        loss,
        reinforce,
        classification,
        batch: TrajectoryBatch {
            samples: s_count,
            traces,
            rewards,
            baseline,
        },
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Representation,
    Location,
    Joint,
    /// The full-image occlusion classifier; not one of the three stages.
    Judge,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::Representation => 1,
            Stage::Location => 2,
            Stage::Joint => 3,
            Stage::Judge => 0,
        }
    }

    /// CLI subcommand that produces this stage's checkpoint.
    pub fn command(self) -> &'static str {
        match self {
            Stage::Representation => "train-rep",
            Stage::Location => "pretrain-loc",
            Stage::Joint => "train-joint",
            Stage::Judge => "occlude-eval",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub stage: u8,
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f64,
}

pub const METRICS_HEADER: &str = "stage,epoch,split,loss,accuracy,lr";

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{:.6},{:.6},{:.6e}",
            r.stage, r.epoch, r.split, r.loss, r.accuracy, r.lr
        );
    }
    out
}

#[derive(Clone, Debug)]
pub struct StageOutcome {
    pub params: ParameterSet<f32>,
    pub metrics: Vec<MetricRow>,
}

/// What one minibatch contributes to the update and the epoch metrics.
pub(crate) struct BatchResult {
    pub(crate) grads: std::collections::BTreeMap<String, Tensor<f32>>,
    pub(crate) bn_updates: Vec<crate::params::BnUpdate<f32>>,
    pub(crate) loss: f64,
    pub(crate) correct: f64,
    pub(crate) count: usize,
}

/// Shuffled minibatches for one epoch. A trailing batch of one example is
/// dropped because batch norm needs two rows.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, stage: Stage, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng_stream(seed, 0x5348_5546, stage.number() as u64, epoch as u64);
    order.shuffle(&mut rng);
    order
        .chunks(batch_size.max(2))
        .filter(|c| c.len() >= 2)
        .map(|c| c.to_vec())
        .collect()
}

/// Shifts an `[H, W, C]` image by `(dy, dx)` pixels, filling with zeros.
pub fn translate(pixels: &[f32], h: usize, w: usize, c: usize, dy: isize, dx: isize) -> Vec<f32> {
    let mut out = vec![0f32; pixels.len()];
    for y in 0..h as isize {
        let sy = y - dy;
        if sy < 0 || sy >= h as isize {
            continue;
        }
        for x in 0..w as isize {
            let sx = x - dx;
            if sx < 0 || sx >= w as isize {
                continue;
            }
            let dst = (y as usize * w + x as usize) * c;
            let src = (sy as usize * w + sx as usize) * c;
            out[dst..dst + c].copy_from_slice(&pixels[src..src + c]);
        }
    }
    out
}

/// A training minibatch, randomly translated when `random_crop > 0`.
pub(crate) fn train_images(ds: &Dataset, idx: &[usize], tc: &TrainConfig, stage: Stage, epoch: usize) -> Tensor<f32> {
    if tc.random_crop == 0 {
        return ds.batch(idx);
    }
    let m = tc.random_crop as i64;
    let mut data = Vec::with_capacity(idx.len() * ds.image_len());
    for &i in idx {
        let mut rng = rng_stream(tc.seed, 0x4352_4f50 + stage.number() as u64, epoch as u64, i as u64);
        let dy = rng.random_range(-m..=m) as isize;
        let dx = rng.random_range(-m..=m) as isize;
        data.extend(translate(ds.pixels(i), ds.height, ds.width, ds.channels, dy, dx));
    }
    Tensor::new(&[idx.len(), ds.height, ds.width, ds.channels], data).unwrap()
}

pub(crate) fn chunks(n: usize, size: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..n).step_by(size).map(move |s| (s..(s + size).min(n)).collect())
}

fn check_finite(loss: f64, stage: Stage, epoch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("stage {} loss at epoch {epoch}", stage.number())))
    }
}

/// Epoch driver shared by all stages: cosine schedule with warmup, Nesterov
/// SGD or Adam, running-stat updates, and one train and one dev metrics row per epoch.
pub(crate) fn train_loop<B, D>(
    params: &mut ParameterSet<f32>,
    n: usize,
    tc: &TrainConfig,
    stage: Stage,
    epochs: usize,
    base_lr: f64,
    mut batch_fn: B,
    mut dev_fn: D,
) -> Result<Vec<MetricRow>>
where
    B: FnMut(&ParameterSet<f32>, &[usize], usize) -> Result<BatchResult>,
    D: FnMut(&ParameterSet<f32>) -> Result<(f64, f64)>,
{
    let per_epoch = epoch_batches(n, tc.batch_size, tc.seed, stage, 0).len().max(1);
    let total = per_epoch * epochs;
    let warmup = (per_epoch * tc.warmup_epochs).min(total.saturating_sub(1));
    let mut opt = OptimizerState::new();
    let mut step = 0usize;
    let mut rows = Vec::with_capacity(2 * epochs);
    for epoch in 0..epochs {
        let (mut loss_sum, mut correct, mut count, mut seen) = (0.0, 0.0, 0usize, 0usize);
        let mut lr = 0.0;
        for idx in epoch_batches(n, tc.batch_size, tc.seed, stage, epoch) {
            lr = cosine_lr(step, total, warmup, base_lr);
            let res = batch_fn(params, &idx, epoch)?;
            check_finite(res.loss, stage, epoch)?;
            match tc.optimizer {
                Optimizer::Sgd => sgd_nesterov_step(params, &res.grads, lr as f32, tc.momentum as f32, &mut opt)?,
                Optimizer::Adam => adam_step(params, &res.grads, lr as f32, &mut opt)?,
            }
            params.apply_bn_updates(&res.bn_updates, BN_MOMENTUM as f32)?;
            loss_sum += res.loss * idx.len() as f64;
            seen += idx.len();
            correct += res.correct;
            count += res.count;
            step += 1;
        }
        rows.push(MetricRow {
            stage: stage.number(),
            epoch,
            split: "train".into(),
            loss: loss_sum / seen.max(1) as f64,
            accuracy: correct / count.max(1) as f64,
            lr,
        });
        let (dev_loss, dev_acc) = dev_fn(params)?;
        check_finite(dev_loss, stage, epoch)?;
        rows.push(MetricRow {
            stage: stage.number(),
            epoch,
            split: "dev".into(),
            loss: dev_loss,
            accuracy: dev_acc,
            lr,
        });
    }
    Ok(rows)
}

pub(crate) fn count_correct(log_probs: &Tensor<f32>, labels: &[usize]) -> f64 {
    let c = log_probs.shape()[1];
    log_probs
        .data()
        .chunks_exact(c)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count() as f64
}

const EVAL_CHUNK: usize = 100;

/// Infer-mode representation loss and full-grid accuracy over a dataset.
pub fn evaluate_representation(
    params: &ParameterSet<f32>,
    cfg: &ModelConfig,
    ds: &Dataset,
    lambda: f64,
) -> Result<(f64, f64)> {
    let (mut loss, mut correct) = (0.0, 0.0);
    for idx in chunks(ds.len(), EVAL_CHUNK) {
        let labels = ds.labels_of(&idx);
        let mut ctx = Ctx::inference(params);
        let x = ctx.constant(ds.batch(&idx));
        let r = loss_representation(&mut ctx, cfg, x, &labels, lambda, BnMode::Infer)?;
        loss += ctx.tape.value(r.loss).data()[0] as f64 * idx.len() as f64;
        correct += count_correct(ctx.tape.value(r.log_probs), &labels);
    }
    let n = ds.len().max(1) as f64;
    Ok((loss / n, correct / n))
}

/// Representation network pretraining from random initialization.
pub fn train_representation(
    data: &DatasetFile,
    cfg: &ModelConfig,
    tc: &TrainConfig,
) -> Result<StageOutcome> {
    let geom = cfg.geometry()?;
    tc.validate(&geom)?;
    let mut params = crate::model::init_representation(cfg, tc.seed);
    let (mean, std) = data.train.pixel_stats();
    set_input_stats(&mut params, mean, std);
    let train = &data.train;
    let metrics = train_loop(
        &mut params,
        train.len(),
        tc,
        Stage::Representation,
        tc.epochs_repr,
        tc.lr_repr,
        |p, idx, epoch| {
            let labels = train.labels_of(idx);
            let mut ctx = Ctx::new(p, true, false);
            let x = ctx.constant(train_images(train, idx, tc, Stage::Representation, epoch));
            let r = loss_representation(&mut ctx, cfg, x, &labels, tc.lambda_repr, BnMode::Train)?;
            let g = ctx.tape.backward(r.loss)?;
            Ok(BatchResult {
                grads: ctx.gradients(&g),
                loss: ctx.tape.value(r.loss).data()[0] as f64,
                correct: count_correct(ctx.tape.value(r.log_probs), &labels),
                count: idx.len(),
                bn_updates: std::mem::take(&mut ctx.bn_updates),
            })
        },
        |p| evaluate_representation(p, cfg, &data.dev, tc.lambda_repr),
    )?;
    Ok(StageOutcome { params, metrics })
}

/// Frozen representation outputs for a whole dataset, plus every image's
/// locations ranked by maximum logit.
pub struct CachedRepr {
    pub repr: Vec<f32>,
    pub what: Vec<f32>,
    pub ranked: Vec<Vec<usize>>,
}

pub fn cache_representation(params: &ParameterSet<f32>, cfg: &ModelConfig, ds: &Dataset) -> Result<CachedRepr> {
    let geom = cfg.geometry()?;
    let l = geom.locations();
    let mut cache = CachedRepr {
        repr: Vec::with_capacity(ds.len() * l * cfg.d_repr),
        what: Vec::with_capacity(ds.len() * l * cfg.d_what),
        ranked: Vec::with_capacity(ds.len()),
    };
    for idx in chunks(ds.len(), EVAL_CHUNK) {
        let mut ctx = Ctx::inference(params);
        let x = ctx.constant(ds.batch(&idx));
        let out = represent(&mut ctx, cfg, &geom, x, BnMode::Infer)?;
        cache.repr.extend_from_slice(ctx.tape.value(out.repr).data());
        cache.what.extend_from_slice(ctx.tape.value(out.what).data());
        for row in ctx.tape.value(out.logits).data().chunks_exact(l * cfg.num_classes) {
            cache.ranked.push(rank_by_max_logit(row, cfg.num_classes));
        }
    }
    Ok(cache)
}

impl CachedRepr {
    fn gather(src: &[f32], idx: &[usize], per: usize, shape: [usize; 3]) -> Tensor<f32> {
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend_from_slice(&src[i * per..(i + 1) * per]);
        }
        Tensor::new(&[idx.len(), shape[0], shape[1], shape[2]], data).unwrap()
    }

    /// Representation outputs for `idx` bound as constants on `ctx`.
    pub fn bind(&self, ctx: &mut Ctx<'_, f32>, cfg: &ModelConfig, geom: &Geometry, idx: &[usize]) -> ReprOutput {
        let (h, w) = (geom.grid_h, geom.grid_w);
        let repr = Self::gather(&self.repr, idx, h * w * cfg.d_repr, [h, w, cfg.d_repr]);
        let what = Self::gather(&self.what, idx, h * w * cfg.d_what, [h, w, cfg.d_what]);
        let repr = ctx.constant(repr);
        let what = ctx.constant(what);
        ReprOutput {
            repr,
            what,
            logits: what,
        }
    }

    pub fn targets(&self, idx: &[usize], t: usize) -> Vec<Vec<usize>> {
        idx.iter().map(|&i| self.ranked[i][..t].to_vec()).collect()
    }
}

/// Teacher-forced location loss and per-step target hit rate on a cache.
pub fn evaluate_location(
    params: &ParameterSet<f32>,
    cfg: &ModelConfig,
    cache: &CachedRepr,
    n: usize,
    t: usize,
    nu: f64,
) -> Result<(f64, f64)> {
    let geom = cfg.geometry()?;
    let (mut loss, mut hits) = (0.0, 0usize);
    for idx in chunks(n, EVAL_CHUNK) {
        let mut ctx = Ctx::inference(params);
        let out = cache.bind(&mut ctx, cfg, &geom, &idx);
        let r = loss_location_pretrain(&mut ctx, cfg, &out, &cache.targets(&idx, t), nu, BnMode::Infer)?;
        loss += ctx.tape.value(r.loss).data()[0] as f64 * idx.len() as f64;
        hits += r.hits.iter().sum::<usize>();
    }
    Ok((loss / n.max(1) as f64, hits as f64 / (n * t).max(1) as f64))
}

fn missing(stage: Stage) -> Error {
    Error::MissingCheckpoint {
        path: format!("stage {} parameters", stage.number()),
        stage: stage.command(),
    }
}

/// Location pretraining on top of frozen stage-1 parameters.
pub fn pretrain_location(
    data: &DatasetFile,
    cfg: &ModelConfig,
    tc: &TrainConfig,
    stage1: &ParameterSet<f32>,
) -> Result<StageOutcome> {
    let geom = cfg.geometry()?;
    tc.validate(&geom)?;
    if stage1.count(Role::Representation) == 0 {
        return Err(missing(Stage::Representation));
    }
    let mut params = stage1.clone();
    params.merge_prefix(&init_location(cfg, tc.seed), "loc.");
    let train_cache = cache_representation(&params, cfg, &data.train)?;
    let dev_cache = cache_representation(&params, cfg, &data.dev)?;
    let t = tc.t_pretrain;
    let metrics = train_loop(
        &mut params,
        data.train.len(),
        tc,
        Stage::Location,
        tc.epochs_pretrain,
        tc.lr_pretrain,
        |p, idx, _| {
            let mut ctx = Ctx::new(p, false, true);
            let out = train_cache.bind(&mut ctx, cfg, &geom, idx);
            let r = loss_location_pretrain(&mut ctx, cfg, &out, &train_cache.targets(idx, t), tc.nu_pretrain, BnMode::Train)?;
            let g = ctx.tape.backward(r.loss)?;
            Ok(BatchResult {
                grads: ctx.gradients(&g),
                loss: ctx.tape.value(r.loss).data()[0] as f64,
                correct: r.hits.iter().sum::<usize>() as f64,
                count: idx.len() * t,
                bn_updates: std::mem::take(&mut ctx.bn_updates),
            })
        },
        |p| evaluate_location(p, cfg, &dev_cache, data.dev.len(), t, tc.nu_pretrain),
    )?;
    Ok(StageOutcome { params, metrics })
}

/// `-log` of the renormalized geometric mean of class probabilities over a
/// trace's glimpses, at `label`.
pub fn trace_nll(trace: &GlimpseTrace, label: usize) -> f64 {
    let c = trace.averaged_logits.len();
    let mut avg = vec![0.0; c];
    for row in &trace.per_step_logits {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        avg.iter_mut().zip(row).for_each(|(a, v)| *a += (v - lse) / trace.len() as f64);
    }
    let m = avg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + avg.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - avg[label]
}

/// Argmax-policy accuracy (raw-logit averaging) and trajectory loss over a
/// dataset with `glimpses` glimpses.
pub fn evaluate_joint(
    params: &ParameterSet<f32>,
    cfg: &ModelConfig,
    ds: &Dataset,
    glimpses: usize,
) -> Result<(f64, f64)> {
    let (mut loss, mut correct) = (0.0, 0usize);
    let mut no_rng: Vec<ChaCha8Rng> = Vec::new();
    for idx in chunks(ds.len(), EVAL_CHUNK) {
        let traces = unroll_batch(params, cfg, &ds.batch(&idx), glimpses, SelectMode::Argmax, &mut no_rng)?;
        for (tr, &i) in traces.iter().zip(&idx) {
            let y = ds.labels[i] as usize;
            loss += trace_nll(tr, y);
            correct += usize::from(tr.prediction() == y);
        }
    }
    let n = ds.len().max(1) as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Joint-training starting point that skips location pretraining: stage-1
/// parameters plus freshly initialized location parameters.
pub fn init_without_pretraining(stage1: &ParameterSet<f32>, cfg: &ModelConfig, seed: u64) -> ParameterSet<f32> {
    let mut p = stage1.clone();
    p.merge_prefix(&init_location(cfg, seed), "loc.");
    p
}

pub fn joint_settings(tc: &TrainConfig) -> JointSettings {
    let mode = if tc.policy_batch_stats { BnMode::Train } else { BnMode::Infer };
    JointSettings {
        lambda: tc.lambda_repr,
        nu: tc.nu_loc,
        samples: tc.samples,
        glimpses: tc.t_joint,
        reinforce_into_theta: tc.reinforce_into_theta,
        repr_mode: mode,
        loc_mode: mode,
    }
}

/// Joint training of θ and η from `init`, which must hold location
/// parameters (normally the stage-2 output).
pub fn train_joint(
    data: &DatasetFile,
    cfg: &ModelConfig,
    tc: &TrainConfig,
    init: &ParameterSet<f32>,
) -> Result<StageOutcome> {
    let geom = cfg.geometry()?;
    tc.validate(&geom)?;
    if init.count(Role::Representation) == 0 {
        return Err(missing(Stage::Representation));
    }
    if init.count(Role::Location) == 0 {
        return Err(missing(Stage::Location));
    }
    let mut params = init.clone();
    let train = &data.train;
    let settings = joint_settings(tc);
    let metrics = train_loop(
        &mut params,
        train.len(),
        tc,
        Stage::Joint,
        tc.epochs_joint,
        tc.lr_joint,
        |p, idx, epoch| {
            let labels = train.labels_of(idx);
            let mut rngs: Vec<ChaCha8Rng> = idx
                .iter()
                .map(|&i| rng_stream(tc.seed, 0x4a4f_494e, epoch as u64, i as u64))
                .collect();
            let mut ctx = Ctx::new(p, true, true);
            let x = ctx.constant(train_images(train, idx, tc, Stage::Joint, epoch));
            let r = loss_joint(&mut ctx, cfg, x, &labels, &settings, TrajectorySource::Sample(&mut rngs))?;
            let g = ctx.tape.backward(r.loss)?;
            Ok(BatchResult {
                grads: ctx.gradients(&g),
                loss: ctx.tape.value(r.loss).data()[0] as f64,
                correct: r.batch.rewards.iter().map(|&v| v as f64).sum(),
                count: r.batch.rewards.len(),
                bn_updates: std::mem::take(&mut ctx.bn_updates),
            })
        },
        |p| evaluate_joint(p, cfg, &data.dev, tc.t_joint),
    )?;
    Ok(StageOutcome { params, metrics })
}

/// Runs one stage. Stages 2 and 3 need the previous stage's parameters.
pub fn run_stage(
    stage: Stage,
    data: &DatasetFile,
    cfg: &ModelConfig,
    tc: &TrainConfig,
    previous: Option<&ParameterSet<f32>>,
) -> Result<StageOutcome> {
    match stage {
        Stage::Representation => train_representation(data, cfg, tc),
        Stage::Location => pretrain_location(data, cfg, tc, previous.ok_or_else(|| missing(Stage::Representation))?),
        Stage::Joint => train_joint(data, cfg, tc, previous.ok_or_else(|| missing(Stage::Location))?),
        Stage::Judge => Err(Error::InvalidArgument("the occlusion classifier is not a training stage".into())),
    }
}
