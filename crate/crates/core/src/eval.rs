//! Policy evaluation: accuracy and coverage per glimpse count, occlusion
//! analysis with an independent full-image classifier, and PGD attacks.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attention::{unroll, unroll_batch, SelectMode};
use crate::autodiff::{ConvSpec, Padding, Var};
use crate::data::{rng_stream, Dataset, DatasetFile};
use crate::error::{Error, Result};
use crate::model::{Geometry, Location, ModelConfig};
use crate::params::{BnMode, Ctx, ParameterSet};
use crate::policies::{policy_random, policy_sobel, PolicyKind, SobelStat};
use crate::representation::{grid_logits, logits_at_windows};
use crate::tensor::{argmax, Tensor};
use crate::optim::Optimizer;
use crate::training::{
    chunks, count_correct, nll, rank_by_max_logit, train_loop, BatchResult, MetricRow, Stage, TrainConfig,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub k_values: Vec<usize>,
    /// Number of test images evaluated (the first ones of the split).
    pub eval_images: usize,
    pub judge_epochs: usize,
    /// Adam learning rate for the judge.
    pub judge_lr: f64,
    pub judge_batch: usize,
    /// Extra generated images added to the judge's training set.
    pub judge_extra: usize,
    pub pgd_images: usize,
    pub pgd_eps: f64,
    pub pgd_step: f64,
    pub pgd_iters: usize,
    pub coverage_tolerance: f64,
    pub trace_images: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k_values: vec![1, 2, 3, 4, 5, 6, 8, 10, 12],
            eval_images: 500,
            judge_epochs: 8,
            judge_lr: 0.01,
            judge_batch: 32,
            judge_extra: 6000,
            pgd_images: 100,
            pgd_eps: 2.0 / 255.0,
            pgd_step: 0.5 / 255.0,
            pgd_iters: 300,
            coverage_tolerance: 0.02,
            trace_images: 20,
        }
    }
}

fn check_distinct(locations: &[Location]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for &loc in locations {
        if !seen.insert(loc) {
            return Err(Error::DuplicateLocation(loc.0, loc.1));
        }
    }
    Ok(())
}

/// Mean of the `[h, w, C]` grid logits at `locations`.
pub fn mean_logits_at(grid: &Tensor<f32>, locations: &[Location]) -> Result<Vec<f64>> {
    let [h, w, c] = grid.shape()[..] else {
        return Err(Error::InvalidArgument(format!("expected [h, w, C] logits, got {:?}", grid.shape())));
    };
    if locations.is_empty() {
        return Err(Error::InvalidArgument("no locations".into()));
    }
    check_distinct(locations)?;
    let mut mean = vec![0.0; c];
    for &(i, j) in locations {
        if i >= h || j >= w {
            return Err(Error::InvalidArgument(format!("location ({i}, {j}) outside {h}x{w} grid")));
        }
        let row = &grid.data()[(i * w + j) * c..(i * w + j + 1) * c];
        mean.iter_mut().zip(row).for_each(|(m, &v)| *m += v as f64);
    }
    mean.iter_mut().for_each(|m| *m /= locations.len() as f64);
    Ok(mean)
}

/// Argmax of the mean logits at `locations`; class ties go to the lowest index.
pub fn classify_with_locations(grid: &Tensor<f32>, locations: &[Location]) -> Result<usize> {
    Ok(argmax(&mean_logits_at(grid, locations)?))
}

/// Whether `label` is among the `k` highest scores (ties to lower index).
pub fn in_top_k(scores: &[f64], label: usize, k: usize) -> bool {
    crate::policies::rank_descending(scores).iter().take(k).any(|&i| i == label)
}

fn pixel_mask(locations: &[Location], rf: usize, stride: usize, dims: (usize, usize)) -> Vec<bool> {
    let (hh, ww) = dims;
    let mut mask = vec![false; hh * ww];
    for &(i, j) in locations {
        let (top, left) = (i * stride, j * stride);
        for y in top..(top + rf).min(hh) {
            mask[y * ww + left..y * ww + (left + rf).min(ww)].iter_mut().for_each(|m| *m = true);
        }
    }
    mask
}

/// Fraction of image pixels inside the union of the attended patches.
pub fn coverage(locations: &[Location], rf: usize, stride: usize, dims: (usize, usize)) -> f64 {
    let mask = pixel_mask(locations, rf, stride, dims);
    mask.iter().filter(|&&m| m).count() as f64 / mask.len() as f64
}

/// Sets every pixel in the union of attended patches to 0.
pub fn occlude(image: &Tensor<f32>, locations: &[Location], rf: usize, stride: usize) -> Tensor<f32> {
    let s = image.shape();
    let (hh, ww, c) = (s[0], s[1], s[2]);
    let mask = pixel_mask(locations, rf, stride, (hh, ww));
    let mut out = image.clone();
    for (p, &m) in mask.iter().enumerate() {
        if m {
            out.data_mut()[p * c..(p + 1) * c].iter_mut().for_each(|v| *v = 0.0);
        }
    }
    out
}

/// Output width and stride of each judge convolution.
const JUDGE_LAYERS: [(usize, usize); 4] = [(16, 2), (32, 2), (64, 2), (64, 1)];

/// Full-image CNN: three 3x3 stride-2 convs with batch norm and ReLU, global
/// average pooling, and a linear classifier.
pub fn init_judge(cfg: &ModelConfig, seed: u64) -> ParameterSet<f32> {
    let mut rng = rng_stream(seed, 0x4a55_4447, 0, 0);
    let mut p = ParameterSet::new();
    p.insert("input.mean", Tensor::zeros(&[1]));
    p.insert("input.std", Tensor::full(&[1], 1.0));
    let mut cin = cfg.channels;
    for (n, &(cout, _)) in JUDGE_LAYERS.iter().enumerate() {
        let std = (2.0 / (9 * cin) as f64).sqrt();
        p.insert(
            format!("judge.conv{}.kernel", n + 1),
            Tensor::from_fn(&[3, 3, cin, cout], |_| (normal(&mut rng) * std) as f32),
        );
        p.insert(format!("judge.bn{}.scale", n + 1), Tensor::full(&[cout], 1.0));
        p.insert(format!("judge.bn{}.shift", n + 1), Tensor::zeros(&[cout]));
        p.insert(format!("judge.bn{}.running_mean", n + 1), Tensor::zeros(&[cout]));
        p.insert(format!("judge.bn{}.running_var", n + 1), Tensor::full(&[cout], 1.0));
        cin = cout;
    }
    let std = (1.0 / (2 * cin) as f64).sqrt();
    p.insert(
        "judge.fc.weight",
        Tensor::from_fn(&[2 * cin, cfg.num_classes], |_| (normal(&mut rng) * std) as f32),
    );
    p.insert("judge.fc.bias", Tensor::zeros(&[cfg.num_classes]));
    p
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Judge class log-probabilities `[B, C]` for NHWC `images`.
pub fn judge_log_probs(ctx: &mut Ctx<'_, f32>, images: Var, mode: BnMode) -> Result<Var> {
    let mean = ctx.params().get("input.mean")?.data()[0];
    let std = ctx.params().get("input.std")?.data()[0];
    let x = ctx.tape.add_scalar(images, -mean);
    let mut x = ctx.tape.scale(x, 1.0 / std);
    for (n, &(_, stride)) in (1..).zip(&JUDGE_LAYERS) {
        let spec = ConvSpec {
            stride,
            dilation: 1,
            padding: Padding::Same,
        };
        let k = ctx.param(&format!("judge.conv{n}.kernel"))?;
        x = ctx.tape.conv2d(x, k, spec)?;
        x = ctx.batch_norm(x, &format!("judge.bn{n}"), mode)?;
        x = ctx.tape.relu(x);
    }
    let s = ctx.tape.shape(x).to_vec();
    let x = ctx.tape.reshape(x, &[s[0], s[1] * s[2], s[3]])?;
    let mean = ctx.tape.mean_axis(x, 1)?;
    let max = ctx.tape.max_axis(x, 1)?;
    let x = ctx.tape.concat_last(mean, max)?;
    let w = ctx.param("judge.fc.weight")?;
    let b = ctx.param("judge.fc.bias")?;
    let logits = ctx.tape.linear(x, w, Some(b))?;
    ctx.tape.log_softmax(logits, 1)
}

/// Judge predictions for a batch `[B, H, W, c]`.
pub fn judge_predict(params: &ParameterSet<f32>, images: &Tensor<f32>) -> Result<Vec<usize>> {
    let mut ctx = Ctx::inference(params);
    let x = ctx.constant(images.clone());
    let lp = judge_log_probs(&mut ctx, x, BnMode::Infer)?;
    let v = ctx.tape.value(lp);
    let c = v.shape()[1];
    Ok(v.data().chunks_exact(c).map(argmax).collect())
}

fn judge_accuracy(params: &ParameterSet<f32>, ds: &Dataset) -> Result<(f64, f64)> {
    let (mut loss, mut correct) = (0.0, 0.0);
    for idx in chunks(ds.len(), 100) {
        let labels = ds.labels_of(&idx);
        let mut ctx = Ctx::inference(params);
        let x = ctx.constant(ds.batch(&idx));
        let lp = judge_log_probs(&mut ctx, x, BnMode::Infer)?;
        let l = nll(&mut ctx.tape, lp, &labels)?;
        loss += ctx.tape.value(l).data()[0] as f64 * idx.len() as f64;
        correct += count_correct(ctx.tape.value(lp), &labels);
    }
    let n = ds.len().max(1) as f64;
    Ok((loss / n, correct / n))
}

#[derive(Clone, Debug)]
pub struct JudgeOutcome {
    pub params: ParameterSet<f32>,
    pub metrics: Vec<MetricRow>,
    pub dev_accuracy: f64,
}

/// Trains the occlusion classifier on unoccluded training images.
pub fn train_occlusion_classifier(
    data: &DatasetFile,
    cfg: &ModelConfig,
    ec: &EvalConfig,
    seed: u64,
) -> Result<JudgeOutcome> {
    let mut params = init_judge(cfg, seed);
    let (mean, std) = data.train.pixel_stats();
    crate::model::set_input_stats(&mut params, mean, std);
    let tc = TrainConfig {
        batch_size: ec.judge_batch,
        warmup_epochs: 1.min(ec.judge_epochs.saturating_sub(1)),
        optimizer: Optimizer::Adam,
        seed,
        ..TrainConfig::default()
    };
    let train = &data.train;
    let metrics = train_loop(
        &mut params,
        train.len(),
        &tc,
        Stage::Judge,
        ec.judge_epochs,
        ec.judge_lr,
        |p, idx, _| {
            let labels = train.labels_of(idx);
            let mut ctx = Ctx::new(p, true, false);
            let x = ctx.constant(train.batch(idx));
            let lp = judge_log_probs(&mut ctx, x, BnMode::Train)?;
            let l = nll(&mut ctx.tape, lp, &labels)?;
            let g = ctx.tape.backward(l)?;
            Ok(BatchResult {
                grads: ctx.gradients(&g),
                loss: ctx.tape.value(l).data()[0] as f64,
                correct: count_correct(ctx.tape.value(lp), &labels),
                count: idx.len(),
                bn_updates: std::mem::take(&mut ctx.bn_updates),
            })
        },
        |p| judge_accuracy(p, &data.dev),
    )?;
    let dev_accuracy = judge_accuracy(&params, &data.dev)?.1;
    Ok(JudgeOutcome {
        params,
        metrics,
        dev_accuracy,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub policy: String,
    pub k: usize,
    pub top1: f64,
    pub top5: f64,
    pub coverage: f64,
    pub occluded_top1: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub seed: u64,
    pub config_hash: String,
    pub images: usize,
}

pub const EVAL_HEADER: &str = "policy,K,top1,top5,coverage,occluded_top1";

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(EVAL_HEADER);
        out.push('\n');
        for r in &self.rows {
            let occ = r.occluded_top1.map(|v| format!("{v:.6}")).unwrap_or_default();
            let _ = writeln!(out, "{},{},{:.6},{:.6},{:.6},{}", r.policy, r.k, r.top1, r.top5, r.coverage, occ);
        }
        out
    }

    pub fn row(&self, policy: PolicyKind, k: usize) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.policy == policy.name() && r.k == k)
    }

    pub fn policy_rows(&self, policy: PolicyKind) -> Vec<EvalRow> {
        self.rows.iter().filter(|r| r.policy == policy.name()).cloned().collect()
    }
}

/// Parameters a policy evaluation may need.
pub struct EvalModels<'a> {
    pub cfg: &'a ModelConfig,
    /// Representation network used by the engineered policies.
    pub baseline: &'a ParameterSet<f32>,
    /// Jointly trained model, required for the saccader policy.
    pub saccader: Option<&'a ParameterSet<f32>>,
    /// Occlusion classifier; when present, occluded accuracy is reported.
    pub judge: Option<&'a ParameterSet<f32>>,
}

/// Per-image logits grids `[h, w, C]` in infer mode.
pub fn logits_grids(params: &ParameterSet<f32>, cfg: &ModelConfig, ds: &Dataset, n: usize) -> Result<Vec<Tensor<f32>>> {
    let geom = cfg.geometry()?;
    let mut out = Vec::with_capacity(n);
    for idx in chunks(n, 100) {
        let lg = grid_logits(params, cfg, &ds.batch(&idx))?;
        let per = geom.locations() * cfg.num_classes;
        for row in lg.data().chunks_exact(per) {
            out.push(Tensor::new(&[geom.grid_h, geom.grid_w, cfg.num_classes], row.to_vec())?);
        }
    }
    Ok(out)
}

/// Glimpse sequences of length `k` for the first `n` images of `ds`.
pub fn policy_locations(
    kind: PolicyKind,
    models: &EvalModels<'_>,
    ds: &Dataset,
    n: usize,
    k: usize,
    seed: u64,
    grids: &[Tensor<f32>],
) -> Result<Vec<Vec<Location>>> {
    let cfg = models.cfg;
    let geom = cfg.geometry()?;
    if k > geom.locations() {
        return Err(Error::TooManyGlimpses {
            requested: k,
            available: geom.locations(),
        });
    }
    match kind {
        PolicyKind::Saccader => {
            let params = models.saccader.ok_or_else(|| Error::MissingCheckpoint {
                path: "stage 3 parameters".into(),
                stage: Stage::Joint.command(),
            })?;
            let mut out = Vec::with_capacity(n);
            let mut none: Vec<ChaCha8Rng> = Vec::new();
            for idx in chunks(n, 100) {
                for tr in unroll_batch(params, cfg, &ds.batch(&idx), k, SelectMode::Argmax, &mut none)? {
                    out.push(tr.locations);
                }
            }
            Ok(out)
        }
        PolicyKind::Random => (0..n)
            .map(|i| {
                let mut rng = rng_stream(seed, 0x5241_4e44, i as u64, 0);
                policy_random((geom.grid_h, geom.grid_w), k, &mut rng)
            })
            .collect(),
        PolicyKind::OrderedLogits => Ok(grids[..n]
            .iter()
            .map(|g| {
                rank_by_max_logit(g.data(), cfg.num_classes)
                    .into_iter()
                    .take(k)
                    .map(|i| geom.location(i))
                    .collect()
            })
            .collect()),
        PolicyKind::SobelMean | PolicyKind::SobelVar => {
            let stat = if kind == PolicyKind::SobelMean {
                SobelStat::Mean
            } else {
                SobelStat::Variance
            };
            (0..n).map(|i| policy_sobel(&ds.image(i), cfg.rf, cfg.stride, k, stat)).collect()
        }
    }
}

/// Accuracy, top-5, coverage, and (with a judge) occluded accuracy per `K`
/// for one policy over the first `n` images of `ds`.
pub fn eval_policy(
    kind: PolicyKind,
    models: &EvalModels<'_>,
    ds: &Dataset,
    n: usize,
    k_values: &[usize],
    seed: u64,
) -> Result<Vec<EvalRow>> {
    let cfg = models.cfg;
    let geom = cfg.geometry()?;
    let n = n.min(ds.len());
    let k_max = k_values.iter().copied().max().unwrap_or(0);
    if k_values.contains(&0) {
        return Err(Error::InvalidArgument("glimpse counts must be positive".into()));
    }
    let scoring = match kind {
        PolicyKind::Saccader => models.saccader.ok_or_else(|| Error::MissingCheckpoint {
            path: "stage 3 parameters".into(),
            stage: Stage::Joint.command(),
        })?,
        _ => models.baseline,
    };
    let grids = logits_grids(scoring, cfg, ds, n)?;
    let locs = policy_locations(kind, models, ds, n, k_max, seed, &grids)?;
    let mut rows = Vec::with_capacity(k_values.len());
    for &k in k_values {
        let (mut top1, mut top5, mut cov) = (0usize, 0usize, 0.0);
        for i in 0..n {
            let y = ds.labels[i] as usize;
            let mean = mean_logits_at(&grids[i], &locs[i][..k])?;
            top1 += usize::from(argmax(&mean) == y);
            top5 += usize::from(in_top_k(&mean, y, 5));
            cov += coverage(&locs[i][..k], cfg.rf, cfg.stride, (geom.height, geom.width));
        }
        let occluded_top1 = match models.judge {
            Some(judge) => Some(occluded_accuracy(judge, cfg, ds, &locs, k)?),
            None => None,
        };
        rows.push(EvalRow {
            policy: kind.name().into(),
            k,
            top1: top1 as f64 / n as f64,
            top5: top5 as f64 / n as f64,
            coverage: cov / n as f64,
            occluded_top1,
        });
    }
    Ok(rows)
}

fn occluded_accuracy(
    judge: &ParameterSet<f32>,
    cfg: &ModelConfig,
    ds: &Dataset,
    locs: &[Vec<Location>],
    k: usize,
) -> Result<f64> {
    let mut correct = 0usize;
    for idx in chunks(locs.len(), 100) {
        let mut data = Vec::with_capacity(idx.len() * ds.image_len());
        for &i in &idx {
            let take = k.min(locs[i].len());
            data.extend(occlude(&ds.image(i), &locs[i][..take], cfg.rf, cfg.stride).into_data());
        }
        let batch = Tensor::new(&[idx.len(), ds.height, ds.width, ds.channels], data)?;
        let preds = judge_predict(judge, &batch)?;
        correct += preds.iter().zip(&idx).filter(|(&p, &i)| p == ds.labels[i] as usize).count();
    }
    Ok(correct as f64 / locs.len().max(1) as f64)
}

/// Evaluates every policy in `kinds` and assembles a report.
pub fn evaluate(
    kinds: &[PolicyKind],
    models: &EvalModels<'_>,
    ds: &Dataset,
    ec: &EvalConfig,
    seed: u64,
    config_hash: &str,
) -> Result<EvalReport> {
    let mut rows = Vec::new();
    for &kind in kinds {
        rows.extend(eval_policy(kind, models, ds, ec.eval_images, &ec.k_values, seed)?);
    }
    Ok(EvalReport {
        rows,
        seed,
        config_hash: config_hash.into(),
        images: ec.eval_images.min(ds.len()),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageMatch {
    pub coverage: f64,
    pub top1: f64,
    /// Glimpse count of the matched row; `None` when interpolated.
    pub k: Option<usize>,
}

/// Accuracy of `rows` at coverage `target`: the best row within `tol`, or
/// linear interpolation between the nearest rows below and above.
pub fn match_coverage(target: f64, rows: &[EvalRow], tol: f64) -> Option<CoverageMatch> {
    let best = rows
        .iter()
        .filter(|r| (r.coverage - target).abs() <= tol)
        .max_by(|a, b| a.top1.partial_cmp(&b.top1).unwrap().then(b.k.cmp(&a.k)));
    if let Some(r) = best {
        return Some(CoverageMatch {
            coverage: r.coverage,
            top1: r.top1,
            k: Some(r.k),
        });
    }
    let below = rows
        .iter()
        .filter(|r| r.coverage < target)
        .max_by(|a, b| a.coverage.partial_cmp(&b.coverage).unwrap())?;
    let above = rows
        .iter()
        .filter(|r| r.coverage > target)
        .min_by(|a, b| a.coverage.partial_cmp(&b.coverage).unwrap())?;
    let f = (target - below.coverage) / (above.coverage - below.coverage);
    Some(CoverageMatch {
        coverage: target,
        top1: below.top1 + f * (above.top1 - below.top1),
        k: None,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OcclusionResult {
    pub clean_top1: f64,
    pub saccader_occluded_top1: f64,
    pub random_occluded_top1: f64,
    pub saccader_coverage: f64,
    pub random_coverage: f64,
}

impl OcclusionResult {
    /// Extra accuracy drop from occluding Saccader locations rather than
    /// equal-coverage random locations.
    pub fn relevance_gap(&self) -> f64 {
        self.random_occluded_top1 - self.saccader_occluded_top1
    }
}

/// Occludes the `k` Saccader glimpses of each image and, separately, random
/// locations added one at a time until they cover at least as many pixels,
/// then scores both with the judge.
pub fn occlusion_experiment(
    models: &EvalModels<'_>,
    ds: &Dataset,
    n: usize,
    k: usize,
    seed: u64,
) -> Result<OcclusionResult> {
    let cfg = models.cfg;
    let geom = cfg.geometry()?;
    let judge = models.judge.ok_or_else(|| Error::MissingCheckpoint {
        path: "occlusion classifier".into(),
        stage: Stage::Judge.command(),
    })?;
    let n = n.min(ds.len());
    let sacc = policy_locations(PolicyKind::Saccader, models, ds, n, k, seed, &[])?;
    let dims = (geom.height, geom.width);
    let mut random = Vec::with_capacity(n);
    let (mut cov_s, mut cov_r) = (0.0, 0.0);
    for (i, s) in sacc.iter().enumerate() {
        let target = coverage(s, cfg.rf, cfg.stride, dims);
        let mut rng = rng_stream(seed, 0x4f43_4352, i as u64, 0);
        let order = policy_random((geom.grid_h, geom.grid_w), geom.locations(), &mut rng)?;
        let mut chosen = Vec::new();
        for loc in order {
            chosen.push(loc);
            if coverage(&chosen, cfg.rf, cfg.stride, dims) >= target {
                break;
            }
        }
        cov_s += target;
        cov_r += coverage(&chosen, cfg.rf, cfg.stride, dims);
        random.push(chosen);
    }
    let lens: Vec<usize> = random.iter().map(|r| r.len()).collect();
    let max_len = lens.iter().copied().max().unwrap_or(0);
    let clean = judge_accuracy(judge, &ds.take(n))?.1;
    Ok(OcclusionResult {
        clean_top1: clean,
        saccader_occluded_top1: occluded_accuracy(judge, cfg, ds, &sacc, k)?,
        random_occluded_top1: occluded_accuracy(judge, cfg, ds, &random, max_len)?,
        saccader_coverage: cov_s / n as f64,
        random_coverage: cov_r / n as f64,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PgdConfig {
    pub eps: f64,
    pub step: f64,
    pub max_iters: usize,
}

impl Default for PgdConfig {
    fn default() -> Self {
        Self {
            eps: 2.0 / 255.0,
            step: 0.5 / 255.0,
            max_iters: 300,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PgdOutcome {
    pub clean: Tensor<f32>,
    pub adversarial: Tensor<f32>,
    pub iterations: usize,
    pub prediction: usize,
    pub clean_prediction: usize,
}

impl PgdOutcome {
    pub fn linf(&self) -> f64 {
        self.clean
            .data()
            .iter()
            .zip(self.adversarial.data())
            .map(|(&a, &b)| (a as f64 - b as f64).abs())
            .fold(0.0, f64::max)
    }
}

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Projected sign-gradient ascent on the loss returned by `model`, which maps
/// an image to its prediction and the gradient of the cross-entropy at
/// `label` with respect to the image. Pixels are clipped to `[0, 1]` first;
/// every iterate stays in the `eps` ∞-ball around the clipped image and in
/// `[0, 1]`. Stops as soon as the prediction differs from `label`.
pub fn pgd_attack<F>(image: &Tensor<f32>, label: usize, classes: usize, pgd: &PgdConfig, mut model: F) -> Result<PgdOutcome>
where
    F: FnMut(&Tensor<f32>) -> Result<(usize, Tensor<f32>)>,
{
    if label >= classes {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    let clean = image.map(|v| v.clamp(0.0, 1.0));
    let eps = pgd.eps as f32;
    let step = pgd.step as f32;
    let lo: Vec<f32> = clean.data().iter().map(|&v| (v - eps).max(0.0)).collect();
    let hi: Vec<f32> = clean.data().iter().map(|&v| (v + eps).min(1.0)).collect();
    let mut x = clean.clone();
    let mut iterations = 0;
    let (clean_prediction, mut grad) = model(&x)?;
    let mut prediction = clean_prediction;
    while iterations < pgd.max_iters && prediction == label {
        if grad.shape() != x.shape() {
            return Err(Error::shape("pgd_attack", grad.shape(), x.shape()));
        }
        for (((v, &g), &l), &h) in x.data_mut().iter_mut().zip(grad.data()).zip(&lo).zip(&hi) {
            *v = (*v + step * sign(g)).clamp(l, h);
        }
        iterations += 1;
        let (p, g) = model(&x)?;
        prediction = p;
        grad = g;
    }
    Ok(PgdOutcome {
        clean,
        adversarial: x,
        iterations,
        prediction,
        clean_prediction,
    })
}

/// Saccader prediction for `image` and the input gradient of the
/// cross-entropy of its averaged glimpse logits. Glimpse locations come from
/// an argmax unroll and are held fixed for the gradient.
pub fn saccader_input_gradient(
    params: &ParameterSet<f32>,
    cfg: &ModelConfig,
    image: &Tensor<f32>,
    label: usize,
    glimpses: usize,
) -> Result<(usize, Tensor<f32>)> {
    let geom: Geometry = cfg.geometry()?;
    let mut none = rng_stream(0, 0, 0, 0);
    let trace = unroll(params, cfg, image, glimpses, SelectMode::Argmax, &mut none)?;
    let s = image.shape().to_vec();
    let mut ctx = Ctx::inference(params);
    let x = ctx.tape.leaf(image.clone().reshape(&[1, s[0], s[1], s[2]])?, true);
    let windows: Vec<_> = trace
        .locations
        .iter()
        .map(|&loc| {
            let (top, left) = geom.window(loc);
            (0, top, left)
        })
        .collect();
    let logits = logits_at_windows(&mut ctx, cfg, x, &windows, BnMode::Infer)?;
    let logits = ctx.tape.reshape(logits, &[1, glimpses, cfg.num_classes])?;
    let mean = ctx.tape.mean_axis(logits, 1)?;
    let lp = ctx.tape.log_softmax(mean, 1)?;
    let loss = nll(&mut ctx.tape, lp, &[label])?;
    let grads = ctx.tape.backward(loss)?;
    Ok((trace.prediction(), grads.wrt(x).reshape(&s)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PgdReport {
    pub images: usize,
    pub clean_top1: f64,
    pub adversarial_top1: f64,
    pub max_linf: f64,
    pub mean_iterations: f64,
}

/// Attacks the first `n` images of `ds`.
pub fn evaluate_pgd(
    params: &ParameterSet<f32>,
    cfg: &ModelConfig,
    ds: &Dataset,
    n: usize,
    glimpses: usize,
    pgd: &PgdConfig,
) -> Result<PgdReport> {
    let n = n.min(ds.len());
    let (mut clean, mut adv, mut linf, mut iters) = (0usize, 0usize, 0.0f64, 0usize);
    for i in 0..n {
        let y = ds.labels[i] as usize;
        let out = pgd_attack(&ds.image(i), y, cfg.num_classes, pgd, |x| {
            saccader_input_gradient(params, cfg, x, y, glimpses)
        })?;
        clean += usize::from(out.clean_prediction == y);
        adv += usize::from(out.prediction == y);
        linf = linf.max(out.linf());
        iters += out.iterations;
    }
    Ok(PgdReport {
        images: n,
        clean_top1: clean as f64 / n.max(1) as f64,
        adversarial_top1: adv as f64 / n.max(1) as f64,
        max_linf: linf,
        mean_iterations: iters as f64 / n.max(1) as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adjacent_desk_patches_cover_345_of_3969() {
        let c = coverage(&[(3, 2), (3, 3)], 15, 8, (63, 63));
        assert!((c - 345.0 / 3969.0).abs() < 1e-12);
    }

    #[test]
    fn large_image_patch_coverage() {
        let c = coverage(&[(0, 0)], 77, 8, (224, 224));
        assert!((c - 0.1182).abs() < 1e-4, "{c}");
    }

    #[test]
    fn full_grid_covers_everything() {
        let all: Vec<Location> = (0..7).flat_map(|i| (0..7).map(move |j| (i, j))).collect();
        assert_eq!(coverage(&all, 15, 8, (63, 63)), 1.0);
        let img = Tensor::<f32>::full(&[63, 63, 1], 0.7);
        assert!(occlude(&img, &all, 15, 8).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn occlusion_of_one_patch_zeroes_rf_squared() {
        let img = Tensor::<f32>::full(&[63, 63, 1], 0.7);
        let o = occlude(&img, &[(2, 3)], 15, 8);
        assert_eq!(o.data().iter().filter(|&&v| v == 0.0).count(), 225);
        assert_eq!(occlude(&img, &[], 15, 8), img);
    }

    #[test]
    fn duplicates_rejected() {
        let g = Tensor::<f32>::zeros(&[2, 2, 3]);
        assert!(matches!(
            classify_with_locations(&g, &[(0, 1), (0, 1)]),
            Err(Error::DuplicateLocation(0, 1))
        ));
    }

    #[test]
    fn match_prefers_best_within_tolerance() {
        let row = |k, cov, acc| EvalRow {
            policy: "ordered_logits".into(),
            k,
            top1: acc,
            top5: 1.0,
            coverage: cov,
            occluded_top1: None,
        };
        let rows = vec![row(1, 0.05, 0.5), row(2, 0.10, 0.7), row(3, 0.11, 0.8), row(4, 0.20, 0.9)];
        let m = match_coverage(0.105, &rows, 0.02).unwrap();
        assert_eq!(m.k, Some(3));
        let m = match_coverage(0.155, &rows, 0.02).unwrap();
        assert_eq!(m.k, None);
        assert!((m.top1 - (0.8 + 0.5 * 0.1)).abs() < 1e-12);
    }

    #[test]
    fn zero_iterations_returns_clipped_image() {
        let img = Tensor::<f32>::from_fn(&[4, 4, 1], |i| i as f32 / 8.0 - 0.5);
        let pgd = PgdConfig {
            max_iters: 0,
            ..Default::default()
        };
        let out = pgd_attack(&img, 0, 2, &pgd, |x| Ok((0, Tensor::full(x.shape(), 1.0)))).unwrap();
        assert_eq!(out.adversarial, img.map(|v| v.clamp(0.0, 1.0)));
        assert!(pgd_attack(&img, 2, 2, &pgd, |x| Ok((0, Tensor::full(x.shape(), 1.0)))).is_err());
    }
}
