//! Independent reference computations shared by the focused tests and the
//! acceptance suite. Each check returns a short summary or a failure message.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use saccader::attention::{cell_step, select_location, CellState, SelectMode};
use saccader::data::rng_stream;
use saccader::gradcheck::grad_check;
use saccader::model::ModelConfig;
use saccader::params::{BnMode, Ctx, ParameterSet, Role};
use saccader::representation::represent;
use saccader::training::{
    loss_joint, loss_location_pretrain, loss_representation, representation_loss_from_logits, JointSettings,
    TrajectoryBatch, TrajectorySource,
};
use saccader::Tensor;

use super::{images, model_f64, small_config, softmax, tiny_config};

pub type Grads = BTreeMap<String, Tensor<f64>>;
pub type Check = Result<String, String>;

pub struct CellOracle {
    pub g_tilde: Vec<f64>,
    pub h: Vec<f64>,
    pub h_tilde: Vec<f64>,
    pub r_tilde: Vec<f64>,
}

/// Step-by-step evaluation of the cell equations in 64-bit.
pub fn cell_oracle(f: &[f64], l: usize, d: usize, visited: &[bool], a: &[f64]) -> CellOracle {
    let mask = |i: usize| if visited[i] { 1e5 } else { 0.0 };
    let g: Vec<f64> = (0..l)
        .map(|i| (0..d).map(|p| f[i * d + p] * a[p]).sum::<f64>() / (d as f64).sqrt() - mask(i))
        .collect();
    let g_tilde = softmax(&g);
    let h: Vec<f64> = (0..d).map(|k| (0..l).map(|i| f[i * d + k] * g_tilde[i]).sum()).collect();
    let h_tilde = softmax(&h);
    let r: Vec<f64> = (0..l)
        .map(|i| (0..d).map(|k| f[i * d + k] * h_tilde[k]).sum::<f64>() - mask(i))
        .collect();
    CellOracle {
        g_tilde,
        h,
        h_tilde,
        r_tilde: softmax(&r),
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn random_state(rng: &mut ChaCha8Rng, h: usize, w: usize) -> CellState {
    let mut s = CellState::new(h, w);
    let visits = rng.random_range(0..h * w);
    for _ in 0..visits {
        let loc = (rng.random_range(0..h), rng.random_range(0..w));
        if !s.is_visited(loc) {
            s.visit(loc).unwrap();
        }
    }
    s
}

/// Random 2x2 to 5x5 instances against the oracle: every intermediate to
/// `1e-6`, the policy summing to one within `1e-5`, visited mass at most `1e-20`.
pub fn check_cell_instances(n: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst, mut worst_sum, mut worst_mass) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..n {
        let (h, w, d) = (rng.random_range(2..6), rng.random_range(2..6), rng.random_range(1..6));
        let l = h * w;
        let f = Tensor::from_fn(&[h, w, d], |_| rng.random_range(-3.0..3.0));
        let a = Tensor::from_fn(&[d], |_| rng.random_range(-2.0..2.0));
        let state = random_state(&mut rng, h, w);
        let visited: Vec<bool> = (0..l).map(|i| state.is_visited((i / w, i % w))).collect();
        let want = cell_oracle(f.data(), l, d, &visited, a.data());
        let got = cell_step(&f, &state, &a).map_err(|e| e.to_string())?;
        for (x, y) in [
            (got.r_tilde.data(), &want.r_tilde),
            (got.g_tilde.data(), &want.g_tilde),
            (got.h_vec.data(), &want.h),
            (got.h_tilde.data(), &want.h_tilde),
        ] {
            worst = worst.max(max_abs_diff(x, y));
        }
        if got.r_tilde.data().iter().any(|&p| p < 0.0) {
            return Err("negative probability".into());
        }
        worst_sum = worst_sum.max((got.r_tilde.data().iter().sum::<f64>() - 1.0).abs());
        let mass: f64 = (0..l).filter(|&i| visited[i]).map(|i| got.r_tilde.data()[i]).sum();
        worst_mass = worst_mass.max(mass);
    }
    let msg = format!("max |diff| {worst:.1e}, max |sum-1| {worst_sum:.1e}, max visited mass {worst_mass:.1e}");
    if worst <= 1e-6 && worst_sum <= 1e-5 && worst_mass <= 1e-20 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

/// Full unrolls (alternating sampled and argmax selection) over every grid
/// location, failing on any revisit.
pub fn check_no_revisits(unrolls: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for n in 0..unrolls {
        let (h, w, d) = (rng.random_range(1..5), rng.random_range(2..5), rng.random_range(1..4));
        let f = Tensor::from_fn(&[h, w, d], |_| rng.random_range(-5.0..5.0));
        let a = Tensor::from_fn(&[d], |_| rng.random_range(-5.0..5.0));
        let mode = if n % 2 == 0 { SelectMode::Sample } else { SelectMode::Argmax };
        let mut s = CellState::new(h, w);
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..h * w {
            let p = cell_step(&f, &s, &a).map_err(|e| e.to_string())?;
            if (p.r_tilde.data().iter().sum::<f64>() - 1.0).abs() > 1e-5 {
                return Err(format!("unroll {n}: policy does not sum to one"));
            }
            let loc = select_location(&p, mode, &mut rng);
            if !seen.insert(loc) {
                return Err(format!("unroll {n}: revisited {loc:?}"));
            }
            s = s.update(loc).map_err(|e| e.to_string())?;
        }
        if cell_step(&f, &s, &a).is_ok() {
            return Err(format!("unroll {n}: exhausted grid still produced a policy"));
        }
    }
    Ok(format!("{unrolls} unrolls, no revisits"))
}

/// `-log( Π_l p_l(y)^(1/L) / Σ_c Π_l p_l(c)^(1/L) )` computed from products.
pub fn product_oracle(logits: &[Vec<f64>], label: usize) -> f64 {
    let l = logits.len() as f64;
    let c = logits[0].len();
    let probs: Vec<Vec<f64>> = logits.iter().map(|z| softmax(z)).collect();
    let geo: Vec<f64> = (0..c).map(|k| probs.iter().map(|p| p[k]).product::<f64>().powf(1.0 / l)).collect();
    -(geo[label] / geo.iter().sum::<f64>()).ln()
}

pub fn loss_from_logits(logits: &Tensor<f64>, labels: &[usize]) -> f64 {
    let p = ParameterSet::<f64>::new();
    let mut ctx = Ctx::inference(&p);
    let v = ctx.constant(logits.clone());
    let out = representation_loss_from_logits(&mut ctx, v, labels, 0.0).unwrap();
    ctx.tape.value(out.loss).data()[0]
}

/// The representation loss against the product quotient on random toys, to `1e-6`.
pub fn check_representation_loss(n: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..n {
        let (b, l, c) = (rng.random_range(1..4), rng.random_range(1..6), rng.random_range(2..5));
        let t = Tensor::from_fn(&[b, l, c], |_| rng.random_range(-4.0..4.0));
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..c)).collect();
        let want: f64 = (0..b)
            .map(|i| {
                let rows: Vec<Vec<f64>> =
                    (0..l).map(|j| t.data()[(i * l + j) * c..(i * l + j + 1) * c].to_vec()).collect();
                product_oracle(&rows, labels[i])
            })
            .sum::<f64>()
            / b as f64;
        worst = worst.max((loss_from_logits(&t, &labels) - want).abs());
    }
    let msg = format!("{n} toys, max |diff| {worst:.1e}");
    if worst <= 1e-6 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

pub fn repr_loss(p: &ParameterSet<f64>, cfg: &ModelConfig, imgs: &Tensor<f64>, labels: &[usize], mode: BnMode) -> saccader::Result<(f64, Grads)> {
    let mut ctx = Ctx::new(p, true, false);
    let x = ctx.constant(imgs.clone());
    let out = loss_representation(&mut ctx, cfg, x, labels, 0.05, mode)?;
    let g = ctx.tape.backward(out.loss)?;
    Ok((ctx.tape.value(out.loss).data()[0], ctx.gradients(&g)))
}

pub fn location_loss(p: &ParameterSet<f64>, cfg: &ModelConfig, imgs: &Tensor<f64>, targets: &[Vec<usize>], nu: f64) -> (f64, f64, Grads) {
    let geom = cfg.geometry().unwrap();
    let mut ctx = Ctx::new(p, false, true);
    let x = ctx.constant(imgs.clone());
    let out = represent(&mut ctx, cfg, &geom, x, BnMode::Infer).unwrap();
    let l = loss_location_pretrain(&mut ctx, cfg, &out, targets, nu, BnMode::Infer).unwrap();
    let g = ctx.tape.backward(l.loss).unwrap();
    (ctx.tape.value(l.loss).data()[0], ctx.tape.value(l.nll).data()[0], ctx.gradients(&g))
}

pub fn settings(samples: usize, glimpses: usize, lambda: f64, nu: f64, mode: BnMode) -> JointSettings {
    JointSettings {
        lambda,
        nu,
        samples,
        glimpses,
        reinforce_into_theta: true,
        repr_mode: mode,
        loc_mode: mode,
    }
}

pub struct JointOut {
    pub loss: f64,
    pub reinforce: f64,
    pub classification: f64,
    pub batch: TrajectoryBatch,
    pub grads: Grads,
    pub reinforce_grads: Grads,
}

pub fn joint(p: &ParameterSet<f64>, cfg: &ModelConfig, imgs: &Tensor<f64>, labels: &[usize], s: &JointSettings, source: TrajectorySource<'_>) -> JointOut {
    let mut ctx = Ctx::new(p, true, true);
    let x = ctx.constant(imgs.clone());
    let out = loss_joint(&mut ctx, cfg, x, labels, s, source).unwrap();
    let g = ctx.tape.backward(out.loss).unwrap();
    let gr = ctx.tape.backward(out.reinforce).unwrap();
    JointOut {
        loss: ctx.tape.value(out.loss).data()[0],
        reinforce: ctx.tape.value(out.reinforce).data()[0],
        classification: ctx.tape.value(out.classification).data()[0],
        batch: out.batch,
        grads: ctx.gradients(&g),
        reinforce_grads: ctx.gradients(&gr),
    }
}

pub fn sampled(p: &ParameterSet<f64>, cfg: &ModelConfig, imgs: &Tensor<f64>, labels: &[usize], s: &JointSettings, seed: u64) -> JointOut {
    let mut gens: Vec<ChaCha8Rng> = (0..labels.len()).map(|i| rng_stream(seed, 1, i as u64, 0)).collect();
    joint(p, cfg, imgs, labels, s, TrajectorySource::Sample(&mut gens))
}

/// Central finite differences for the representation loss (both batch-norm
/// modes), the location pretraining loss, and the joint loss with frozen
/// sampled locations (both modes). Returns the worst relative error.
pub fn check_gradients(tol: f64) -> Check {
    let mut worst: Vec<(String, f64)> = Vec::new();
    let err = |e: saccader::Error| e.to_string();

    let cfg = tiny_config();
    let p = model_f64(&cfg, 10);
    let imgs = images(&cfg, 3, 16);
    let names = p.names_with_role(Role::Representation);
    for mode in [BnMode::Train, BnMode::Infer] {
        let f = |q: &ParameterSet<f64>| repr_loss(q, &cfg, &imgs, &[0, 2, 1], mode);
        let r = grad_check(f, &p, &names, 1e-5, 10, 1).map_err(err)?;
        worst.push((format!("representation/{mode:?}"), r.max_rel_error));
    }

    let cfg = small_config();
    let p = model_f64(&cfg, 43);
    let imgs = images(&cfg, 2, 44);
    let targets = vec![vec![3, 1, 7], vec![0, 8, 4]];
    let names = p.names_with_role(Role::Location);
    let f = |q: &ParameterSet<f64>| {
        let (l, _, g) = location_loss(q, &cfg, &imgs, &targets, 0.02);
        Ok((l, g))
    };
    let r = grad_check(f, &p, &names, 1e-5, 10, 3).map_err(err)?;
    worst.push(("location".into(), r.max_rel_error));

    let cfg = tiny_config();
    let p = model_f64(&cfg, 49);
    let imgs = images(&cfg, 3, 50);
    let labels = [0, 1, 2];
    let mut names = p.names_with_role(Role::Representation);
    names.extend(p.names_with_role(Role::Location));
    for mode in [BnMode::Infer, BnMode::Train] {
        let s = settings(2, 2, 0.03, 0.02, mode);
        let mut frozen = sampled(&p, &cfg, &imgs, &labels, &s, 9).batch;
        // mixed rewards so the policy term is active
        frozen.rewards = vec![1, 0, 0, 1, 1, 0];
        let f = |q: &ParameterSet<f64>| {
            let out = joint(q, &cfg, &imgs, &labels, &s, TrajectorySource::Frozen(&frozen));
            Ok((out.loss, out.grads))
        };
        let r = grad_check(f, &p, &names, 1e-5, 10, 4).map_err(err)?;
        worst.push((format!("joint/{mode:?}"), r.max_rel_error));
    }
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    let msg = worst.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
    if max <= tol {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn flatten(g: &Grads, names: &[String]) -> Vec<f64> {
    names.iter().flat_map(|n| g.get(n).map(|t| t.data().to_vec()).unwrap_or_default()).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// On a 2x2 grid with one glimpse and two samples per image, compares the
/// Monte-Carlo mean of the policy-gradient estimator with exact enumeration
/// of all sample pairs, projected on the exact direction and a random one,
/// within 3 standard errors. The enumeration is itself checked against the
/// true gradient `-Σ_l π(l) ∇log π(l) r(l)` built from the teacher-forced
/// location loss, which must be invariant to a constant baseline.
pub fn check_reinforce_unbiased(parameterizations: usize, draws: usize) -> Check {
    let cfg = tiny_config();
    let img = images(&cfg, 1, 60);
    let s = settings(2, 1, 0.0, 0.0, BnMode::Infer);
    let geom = cfg.geometry().unwrap();
    let mut checked = 0;
    let mut seed = 0;
    let mut worst_z = 0.0f64;
    while checked < parameterizations {
        seed += 1;
        let p = model_f64(&cfg, 100 + seed);
        let mut names = p.names_with_role(Role::Representation);
        names.extend(p.names_with_role(Role::Location));

        let probe = sampled(&p, &cfg, &img, &[0], &settings(1, 1, 0.0, 0.0, BnMode::Infer), 0);
        let label = probe.batch.traces[0].prediction();
        let mut pi = [0.0; 4];
        let mut rew = [0.0; 4];
        let mut score: Vec<Vec<f64>> = Vec::new();
        for l in 0..4 {
            let mut ctx = Ctx::new(&p, true, true);
            let x = ctx.constant(img.clone());
            let out = represent(&mut ctx, &cfg, &geom, x, BnMode::Infer).unwrap();
            let ll = loss_location_pretrain(&mut ctx, &cfg, &out, &[vec![l]], 0.0, BnMode::Infer).unwrap();
            pi[l] = (-ctx.tape.value(ll.loss).data()[0]).exp();
            let g = ctx.tape.backward(ll.loss).unwrap();
            score.push(flatten(&ctx.gradients(&g), &names).iter().map(|v| -v).collect());
            let lg = ctx.tape.value(out.logits).data()[l * 3..l * 3 + 3].to_vec();
            rew[l] = f64::from(saccader::tensor::argmax(&lg) == label);
        }
        if rew.iter().all(|&r| r == rew[0]) {
            continue;
        }
        checked += 1;
        let dim = score[0].len();
        let rel = |a: f64, b: f64| (a - b).abs() <= 1e-9 * (1.0 + b.abs());

        let truth: Vec<f64> = (0..dim).map(|k| -(0..4).map(|l| pi[l] * score[l][k] * rew[l]).sum::<f64>()).collect();
        for c in [0.3, 1.0, -2.0] {
            for k in 0..dim {
                let shifted = -(0..4).map(|l| pi[l] * score[l][k] * (rew[l] - c)).sum::<f64>();
                if !rel(shifted, truth[k]) {
                    return Err(format!("parameterization {seed}: baseline {c} changes the expected gradient"));
                }
            }
        }

        let mut exact = vec![0.0; dim];
        for l1 in 0..4 {
            for l2 in 0..4 {
                let mut traces = probe.batch.traces.clone();
                traces.push(traces[0].clone());
                traces[0].locations = vec![geom.location(l1)];
                traces[1].locations = vec![geom.location(l2)];
                let frozen = TrajectoryBatch {
                    samples: 2,
                    traces,
                    rewards: vec![rew[l1] as u8, rew[l2] as u8],
                    baseline: 0.0,
                };
                let out = joint(&p, &cfg, &img, &[label], &s, TrajectorySource::Frozen(&frozen));
                let g = flatten(&out.reinforce_grads, &names);
                exact.iter_mut().zip(&g).for_each(|(e, v)| *e += pi[l1] * pi[l2] * v);
            }
        }
        if (0..dim).any(|k| !rel(exact[k], truth[k])) {
            return Err(format!("parameterization {seed}: enumeration differs from the policy gradient"));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dirs = [exact.clone(), (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>()];
        let mut sums = [0.0f64; 2];
        let mut sq = [0.0f64; 2];
        for n in 0..draws {
            let mut gens = vec![rng_stream(seed, 0x4d43, n as u64, 0)];
            let out = joint(&p, &cfg, &img, &[label], &s, TrajectorySource::Sample(&mut gens));
            let g = flatten(&out.reinforce_grads, &names);
            for (k, d) in dirs.iter().enumerate() {
                let v = dot(&g, d);
                sums[k] += v;
                sq[k] += v * v;
            }
        }
        for (k, d) in dirs.iter().enumerate() {
            let mean = sums[k] / draws as f64;
            let var = (sq[k] / draws as f64 - mean * mean).max(0.0);
            let se = (var / draws as f64).sqrt();
            let want = dot(&exact, d);
            let z = (mean - want).abs() / se.max(1e-300);
            worst_z = worst_z.max(z);
            if (mean - want).abs() > 3.0 * se + 1e-12 {
                return Err(format!("parameterization {seed}, direction {k}: {mean:.6e} vs {want:.6e} ({z:.2} SE)"));
            }
        }
    }
    Ok(format!("{parameterizations} parameterizations x {draws} draws, max deviation {worst_z:.2} SE"))
}
