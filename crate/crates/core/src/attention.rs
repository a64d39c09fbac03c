//! The "where" pathway, feature mixing, and the attention cell that turns
//! mixed features into a sequence of non-repeating glimpse locations.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvSpec, Tape, Var};
use crate::error::{Error, Result};
use crate::model::{Geometry, Location, ModelConfig};
use crate::params::{BnMode, Ctx, ParameterSet};
use crate::representation::{represent, ReprOutput};
use crate::tensor::{argmax, Real, Tensor};

/// Penalty that removes visited locations from both spatial softmaxes.
pub const MASK_PENALTY: f64 = 1e5;

/// Attention network: 1x1, 3x3 dilation-2, 1x1, 3x3 dilation-2, each with
/// batch norm and ReLU, same padding. `[B, h, w, d_repr] -> [B, h, w, d_where]`.
pub fn where_net<T: Real>(ctx: &mut Ctx<'_, T>, repr: Var, mode: BnMode) -> Result<Var> {
    let layers = [
        ("loc.where1.kernel", "loc.wbn1", ConvSpec::same()),
        ("loc.where2.kernel", "loc.wbn2", ConvSpec::dilated(2)),
        ("loc.where3.kernel", "loc.wbn3", ConvSpec::same()),
        ("loc.where4.kernel", "loc.wbn4", ConvSpec::dilated(2)),
    ];
    let mut x = repr;
    for (kernel, bn, spec) in layers {
        let k = ctx.param(kernel)?;
        x = ctx.tape.conv2d(x, k, spec)?;
        x = ctx.batch_norm(x, bn, mode)?;
        x = ctx.tape.relu(x);
    }
    Ok(x)
}

/// Linear 1x1 mixing of concatenated what/where features.
pub fn mix_features<T: Real>(ctx: &mut Ctx<'_, T>, what: Var, where_: Var) -> Result<Var> {
    let sw = ctx.tape.shape(what).to_vec();
    let sr = ctx.tape.shape(where_).to_vec();
    if sw[..sw.len() - 1] != sr[..sr.len() - 1] {
        return Err(Error::shape("mix_features", &sw, &sr));
    }
    let both = ctx.tape.concat_last(what, where_)?;
    let w = ctx.param("loc.mix.weight")?;
    let b = ctx.param("loc.mix.bias")?;
    ctx.tape.linear(both, w, Some(b))
}

/// Mixed features `F` as `[B, L, d]` from representation outputs. With
/// `detach_repr` the location path sees the representation as constants.
pub fn mixed_features<T: Real>(
    ctx: &mut Ctx<'_, T>,
    cfg: &ModelConfig,
    out: &ReprOutput,
    mode: BnMode,
    detach_repr: bool,
) -> Result<Var> {
    let (repr, what) = if detach_repr {
        (ctx.tape.detach(out.repr), ctx.tape.detach(out.what))
    } else {
        (out.repr, out.what)
    };
    let wr = where_net(ctx, repr, mode)?;
    let f = mix_features(ctx, what, wr)?;
    let s = ctx.tape.shape(f).to_vec();
    ctx.tape.reshape(f, &[s[0], s[1] * s[2], cfg.d_mix])
}

/// Binary memory of visited grid locations.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CellState {
    h: usize,
    w: usize,
    visited: Vec<bool>,
    count: usize,
}

impl CellState {
    pub fn new(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            visited: vec![false; h * w],
            count: 0,
        }
    }

    pub fn for_geometry(geom: &Geometry) -> Self {
        Self::new(geom.grid_h, geom.grid_w)
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn visited_count(&self) -> usize {
        self.count
    }

    pub fn is_full(&self) -> bool {
        self.count == self.visited.len()
    }

    pub fn is_visited(&self, loc: Location) -> bool {
        self.visited[loc.0 * self.w + loc.1]
    }

    /// Marks `loc` visited in place.
    pub fn visit(&mut self, loc: Location) -> Result<()> {
        if loc.0 >= self.h || loc.1 >= self.w {
            return Err(Error::InvalidArgument(format!(
                "location {loc:?} outside {}x{} grid",
                self.h, self.w
            )));
        }
        let i = loc.0 * self.w + loc.1;
        if self.visited[i] {
            return Err(Error::Revisit(loc.0, loc.1));
        }
        self.visited[i] = true;
        self.count += 1;
        Ok(())
    }

    /// Returns the state with `loc` marked visited.
    pub fn update(&self, loc: Location) -> Result<Self> {
        let mut next = self.clone();
        next.visit(loc)?;
        Ok(next)
    }

    /// `C` as a `[h, w]` 0/1 tensor.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::new(
            &[self.h, self.w],
            self.visited.iter().map(|&v| if v { T::one() } else { T::zero() }).collect(),
        )
        .unwrap()
    }

    fn penalty<T: Real>(&self) -> impl Iterator<Item = T> + '_ {
        let p = T::lit(-MASK_PENALTY);
        self.visited.iter().map(move |&v| if v { p } else { T::zero() })
    }
}

/// Tape handles for one batched cell step. Shapes: `g`, `g_tilde`, `r`,
/// `log_policy` are `[B, L]`; `h`, `h_tilde` are `[B, d]`.
#[derive(Clone, Copy, Debug)]
pub struct CellVars {
    pub g: Var,
    pub g_tilde: Var,
    pub h: Var,
    pub h_tilde: Var,
    pub r: Var,
    pub log_policy: Var,
}

/// One step of the attention cell for a batch of feature maps `f`
/// (`[B, L, d]`) with one state per row:
///
/// ```text
/// G  = F·a / sqrt(d) - 1e5·C      G~ = softmax_L(G)
/// h  = Σ_L F · G~                 h~ = softmax_d(h)
/// R  = F·h~ - 1e5·C               π  = softmax_L(R)
/// ```
pub fn cell_step_on_tape<T: Real>(
    tape: &mut Tape<T>,
    f: Var,
    query: Var,
    states: &[CellState],
) -> Result<CellVars> {
    let fs = tape.shape(f).to_vec();
    let [b, l, d] = fs[..] else {
        return Err(Error::shape("cell_step", &fs, tape.shape(query)));
    };
    if tape.shape(query) != [d] {
        return Err(Error::shape("cell_step query", &fs, tape.shape(query)));
    }
    if states.len() != b {
        return Err(Error::InvalidArgument(format!(
            "{} cell states for a batch of {b}",
            states.len()
        )));
    }
    for s in states {
        if s.visited.len() != l {
            return Err(Error::shape("cell_step state", &[s.h, s.w], &fs));
        }
        if s.is_full() {
            return Err(Error::Exhausted(l));
        }
    }
    let mask_data: Vec<T> = states.iter().flat_map(|s| s.penalty::<T>()).collect();
    let mask = tape.constant(Tensor::new(&[b, l], mask_data)?);

    let flat = tape.reshape(f, &[b * l, d])?;
    let a = tape.reshape(query, &[d, 1])?;
    let g = tape.matmul(flat, a)?;
    let g = tape.scale(g, T::one() / T::from_usize(d).unwrap().sqrt());
    let g = tape.reshape(g, &[b, l])?;
    let g = tape.add(g, mask)?;
    let g_tilde = tape.softmax(g, 1)?;

    let gt = tape.reshape(g_tilde, &[b, 1, l])?;
    let h = tape.bmm(gt, f)?;
    let h = tape.reshape(h, &[b, d])?;
    let h_tilde = tape.softmax(h, 1)?;

    let ht = tape.reshape(h_tilde, &[b, d, 1])?;
    let r = tape.bmm(f, ht)?;
    let r = tape.reshape(r, &[b, l])?;
    let r = tape.add(r, mask)?;
    let log_policy = tape.log_softmax(r, 1)?;
    Ok(CellVars {
        g,
        g_tilde,
        h,
        h_tilde,
        r,
        log_policy,
    })
}

/// The policy over glimpse locations for one example, with intermediates.
#[derive(Clone, Debug)]
pub struct PolicyDistribution<T: Real> {
    /// `[h, w]`
    pub r_tilde: Tensor<T>,
    pub log_r_tilde: Tensor<T>,
    pub g: Tensor<T>,
    pub g_tilde: Tensor<T>,
    /// `[d]`
    pub h_vec: Tensor<T>,
    pub h_tilde: Tensor<T>,
}

impl<T: Real> PolicyDistribution<T> {
    pub fn dims(&self) -> (usize, usize) {
        (self.r_tilde.shape()[0], self.r_tilde.shape()[1])
    }
}

/// Single-example cell step on plain tensors: `f` is `[h, w, d]`.
pub fn cell_step<T: Real>(
    f: &Tensor<T>,
    state: &CellState,
    query: &Tensor<T>,
) -> Result<PolicyDistribution<T>> {
    let [h, w, d] = f.shape()[..] else {
        return Err(Error::shape("cell_step", f.shape(), query.shape()));
    };
    if state.dims() != (h, w) {
        return Err(Error::shape("cell_step state", &[state.h, state.w], &[h, w]));
    }
    let mut tape = Tape::new();
    let fv = tape.constant(f.clone().reshape(&[1, h * w, d])?);
    let a = tape.constant(query.clone());
    let vars = cell_step_on_tape(&mut tape, fv, a, std::slice::from_ref(state))?;
    let grid = |v: Var| tape.value(v).clone().reshape(&[h, w]);
    let vec = |v: Var| tape.value(v).clone().reshape(&[d]);
    let log_r_tilde = grid(vars.log_policy)?;
    Ok(PolicyDistribution {
        r_tilde: log_r_tilde.map(|v| v.exp()),
        log_r_tilde,
        g: grid(vars.g)?,
        g_tilde: grid(vars.g_tilde)?,
        h_vec: vec(vars.h)?,
        h_tilde: vec(vars.h_tilde)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SelectMode {
    /// Most probable location; ties go to the lowest row-major index.
    Argmax,
    /// Draw from the categorical distribution.
    Sample,
}

/// Picks an index from a probability vector.
pub fn select_index<T: Real, R: Rng + ?Sized>(probs: &[T], mode: SelectMode, rng: &mut R) -> usize {
    match mode {
        SelectMode::Argmax => argmax(probs),
        SelectMode::Sample => {
            let weights = probs.iter().map(|p| p.to_f64().unwrap_or(0.0).max(0.0));
            match WeightedIndex::new(weights) {
                Ok(dist) => dist.sample(rng),
                Err(_) => argmax(probs),
            }
        }
    }
}

pub fn select_location<T: Real, R: Rng + ?Sized>(
    p: &PolicyDistribution<T>,
    mode: SelectMode,
    rng: &mut R,
) -> Location {
    let (_, w) = p.dims();
    let i = select_index(p.r_tilde.data(), mode, rng);
    (i / w, i % w)
}

/// Record of one unrolled glimpse sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlimpseTrace {
    pub locations: Vec<Location>,
    /// Logits extracted at each chosen location.
    pub per_step_logits: Vec<Vec<f64>>,
    /// Arithmetic mean of `per_step_logits`.
    pub averaged_logits: Vec<f64>,
    /// `log π(l_t)` at each chosen location.
    pub per_step_log_probs: Vec<f64>,
    pub reward: Option<u8>,
}

impl GlimpseTrace {
    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    pub fn prediction(&self) -> usize {
        argmax(&self.averaged_logits)
    }

    /// Prediction from the mean of the first `t` extracted logit vectors.
    pub fn prediction_after(&self, t: usize) -> usize {
        let c = self.averaged_logits.len();
        let mut mean = vec![0.0; c];
        for row in &self.per_step_logits[..t] {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v / t as f64);
        }
        argmax(&mean)
    }
}

/// Arithmetic mean of per-step logit vectors.
pub fn mean_logits(rows: &[Vec<f64>]) -> Vec<f64> {
    let c = rows[0].len();
    let mut mean = vec![0.0; c];
    for row in rows {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= rows.len() as f64);
    mean
}

/// Infer-mode unroll of a batch of images `[B, H, W, c]`. `rngs` supplies
/// one generator per image and is only consulted in sample mode.
pub fn unroll_batch<T: Real, R: Rng>(
    params: &ParameterSet<T>,
    cfg: &ModelConfig,
    images: &Tensor<T>,
    glimpses: usize,
    mode: SelectMode,
    rngs: &mut [R],
) -> Result<Vec<GlimpseTrace>> {
    let geom = cfg.geometry()?;
    let l = geom.locations();
    if glimpses > l {
        return Err(Error::TooManyGlimpses {
            requested: glimpses,
            available: l,
        });
    }
    let batch = images.shape()[0];
    if mode == SelectMode::Sample && rngs.len() < batch {
        return Err(Error::InvalidArgument(format!(
            "{} generators for a batch of {batch}",
            rngs.len()
        )));
    }
    let mut ctx = Ctx::inference(params);
    let x = ctx.constant(images.clone());
    let out = represent(&mut ctx, cfg, &geom, x, BnMode::Infer)?;
    let f = mixed_features(&mut ctx, cfg, &out, BnMode::Infer, false)?;
    let query = ctx.param("loc.cell.query")?;
    let logits = ctx.tape.value(out.logits).clone();
    let c = cfg.num_classes;

    let mut states = vec![CellState::for_geometry(&geom); batch];
    let mut traces: Vec<GlimpseTrace> = (0..batch)
        .map(|_| GlimpseTrace {
            locations: Vec::with_capacity(glimpses),
            per_step_logits: Vec::with_capacity(glimpses),
            averaged_logits: Vec::new(),
            per_step_log_probs: Vec::with_capacity(glimpses),
            reward: None,
        })
        .collect();
    for _ in 0..glimpses {
        let step = cell_step_on_tape(&mut ctx.tape, f, query, &states)?;
        let logp = ctx.tape.value(step.log_policy).data().to_vec();
        for b in 0..batch {
            let row = &logp[b * l..(b + 1) * l];
            let probs: Vec<f64> = row.iter().map(|v| v.to_f64().unwrap().exp()).collect();
            let idx = match mode {
                SelectMode::Argmax => argmax(row),
                SelectMode::Sample => select_index(&probs, mode, &mut rngs[b]),
            };
            let loc = geom.location(idx);
            states[b].visit(loc)?;
            let start = (b * l + idx) * c;
            let tr = &mut traces[b];
            tr.locations.push(loc);
            tr.per_step_logits.push(
                logits.data()[start..start + c]
                    .iter()
                    .map(|v| v.to_f64().unwrap())
                    .collect(),
            );
            tr.per_step_log_probs.push(row[idx].to_f64().unwrap());
        }
    }
    for tr in &mut traces {
        if glimpses > 0 {
            tr.averaged_logits = mean_logits(&tr.per_step_logits);
        }
    }
    Ok(traces)
}

/// Unroll for a single `[H, W, c]` image.
pub fn unroll<T: Real, R: Rng>(
    params: &ParameterSet<T>,
    cfg: &ModelConfig,
    image: &Tensor<T>,
    glimpses: usize,
    mode: SelectMode,
    rng: &mut R,
) -> Result<GlimpseTrace> {
    let s = image.shape();
    let batch = image.clone().reshape(&[1, s[0], s[1], s[2]])?;
    let mut traces = unroll_batch(params, cfg, &batch, glimpses, mode, std::slice::from_mut(rng))?;
    Ok(traces.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn update_marks_one_location() {
        let s = CellState::new(3, 3);
        let s1 = s.update((0, 0)).unwrap();
        assert_eq!(s1.visited_count(), 1);
        let t = s1.to_tensor::<f32>();
        assert_eq!(t.sum(), 1.0);
        assert_eq!(t.at(&[0, 0]), 1.0);
        assert!(matches!(s1.update((0, 0)), Err(Error::Revisit(0, 0))));
    }

    #[test]
    fn visiting_everything_fills_state() {
        let mut s = CellState::new(2, 3);
        for i in 0..2 {
            for j in 0..3 {
                s.visit((i, j)).unwrap();
            }
        }
        assert!(s.is_full());
        assert_eq!(s.to_tensor::<f64>().sum(), 6.0);
    }

    #[test]
    fn exhausted_state_is_rejected() {
        let mut s = CellState::new(1, 2);
        s.visit((0, 0)).unwrap();
        s.visit((0, 1)).unwrap();
        let f = Tensor::<f64>::zeros(&[1, 2, 3]);
        let a = Tensor::<f64>::zeros(&[3]);
        assert!(matches!(cell_step(&f, &s, &a), Err(Error::Exhausted(2))));
    }

    #[test]
    fn masking_forces_last_free_location() {
        let f = Tensor::<f64>::from_fn(&[3, 3, 4], |i| (i as f64 * 1.7).sin() * 10.0);
        let a = Tensor::<f64>::from_fn(&[4], |i| i as f64 - 1.0);
        let mut s = CellState::new(3, 3);
        for idx in 0..9 {
            if idx != 5 {
                s.visit((idx / 3, idx % 3)).unwrap();
            }
        }
        let p = cell_step(&f, &s, &a).unwrap();
        assert!(p.r_tilde.at(&[1, 2]) >= 1.0 - 1e-6);
    }

    #[test]
    fn identical_features_give_uniform_policy() {
        let f = Tensor::<f64>::from_fn(&[2, 3, 5], |i| (i % 5) as f64 * 0.3);
        let a = Tensor::<f64>::from_fn(&[5], |i| i as f64);
        let p = cell_step(&f, &CellState::new(2, 3), &a).unwrap();
        for &v in p.r_tilde.data() {
            assert!((v - 1.0 / 6.0).abs() < 1e-6);
        }
    }

    #[test]
    fn select_one_hot_and_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let one_hot = [0.0f64, 0.0, 1.0, 0.0];
        assert_eq!(select_index(&one_hot, SelectMode::Argmax, &mut rng), 2);
        for _ in 0..20 {
            assert_eq!(select_index(&one_hot, SelectMode::Sample, &mut rng), 2);
        }
        let tie = [0.1f64, 0.4, 0.1, 0.4];
        assert_eq!(select_index(&tie, SelectMode::Argmax, &mut rng), 1);
    }

    #[test]
    fn prediction_after_prefix() {
        let tr = GlimpseTrace {
            locations: vec![(0, 0), (0, 1)],
            per_step_logits: vec![vec![1.0, 0.0], vec![0.0, 3.0]],
            averaged_logits: vec![0.5, 1.5],
            per_step_log_probs: vec![-1.0, -1.0],
            reward: None,
        };
        assert_eq!(tr.prediction_after(1), 0);
        assert_eq!(tr.prediction_after(2), 1);
        assert_eq!(tr.prediction(), 1);
    }
}
