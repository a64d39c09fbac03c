//! Restricted receptive-field classifier: a shared encoder applied to every
//! patch of the location grid, followed by the "what" and logits heads.

use crate::autodiff::{ConvSpec, Tape, Var, Window};
use crate::error::{Error, Result};
use crate::model::{Geometry, Location, ModelConfig};
use crate::params::{BnMode, Ctx, ParameterSet};
use crate::tensor::{Real, Tensor};

/// Every patch of an image laid out on the location grid.
#[derive(Clone, Debug)]
pub struct PatchGrid<T: Real> {
    /// `[h, w, rf, rf, channels]`
    pub patches: Tensor<T>,
    pub rf: usize,
    pub stride: usize,
    pub image_dims: (usize, usize),
}

impl<T: Real> PatchGrid<T> {
    pub fn grid_dims(&self) -> (usize, usize) {
        (self.patches.shape()[0], self.patches.shape()[1])
    }

    /// The patch at `loc` as `[rf, rf, channels]`.
    pub fn patch(&self, loc: Location) -> Tensor<T> {
        let s = self.patches.shape();
        let n = s[2] * s[3] * s[4];
        let start = (loc.0 * s[1] + loc.1) * n;
        Tensor::new(&s[2..], self.patches.data()[start..start + n].to_vec()).unwrap()
    }
}

/// Cuts `image` (`[H, W, c]`) into the patch grid. No normalization.
pub fn extract_patch_grid<T: Real>(image: &Tensor<T>, rf: usize, stride: usize) -> Result<PatchGrid<T>> {
    let [hh, ww, c] = image.shape()[..] else {
        return Err(Error::InvalidArgument(format!(
            "expected an [H, W, c] image, got {:?}",
            image.shape()
        )));
    };
    let geom = Geometry::new(hh, ww, rf, stride)?;
    let mut data = Vec::with_capacity(geom.locations() * rf * rf * c);
    for loc in geom.all_locations() {
        let (top, left) = geom.window(loc);
        for y in top..top + rf {
            let start = (y * ww + left) * c;
            data.extend_from_slice(&image.data()[start..start + rf * c]);
        }
    }
    Ok(PatchGrid {
        patches: Tensor::new(&[geom.grid_h, geom.grid_w, rf, rf, c], data)?,
        rf,
        stride,
        image_dims: (hh, ww),
    })
}

/// Tape outputs of the representation network, all `[B, h, w, ·]`.
#[derive(Clone, Copy, Debug)]
pub struct ReprOutput {
    pub repr: Var,
    pub what: Var,
    pub logits: Var,
}

/// `(x - mean) / std` with the stored input statistics.
fn normalize<T: Real>(ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
    let mean = ctx.params().get("input.mean")?.data()[0];
    let std = ctx.params().get("input.std")?.data()[0];
    let centered = ctx.tape.add_scalar(x, -mean);
    Ok(ctx.tape.scale(centered, T::one() / std))
}

/// Shared encoder over raw patches `[P, rf, rf, c]`, giving `[P, d_repr]`.
pub fn encode_patches<T: Real>(
    ctx: &mut Ctx<'_, T>,
    cfg: &ModelConfig,
    patches: Var,
    mode: BnMode,
) -> Result<Var> {
    let shape = ctx.tape.shape(patches).to_vec();
    if shape.len() != 4 || shape[1] != cfg.rf || shape[2] != cfg.rf || shape[3] != cfg.channels {
        return Err(Error::shape(
            "encode_patches",
            &shape,
            &[0, cfg.rf, cfg.rf, cfg.channels],
        ));
    }
    let p = shape[0];
    let x = normalize(ctx, patches)?;
    let k1 = ctx.param("repr.conv1.kernel")?;
    let x = ctx.tape.conv2d(x, k1, ConvSpec::valid(2))?;
    let x = ctx.batch_norm(x, "repr.bn1", mode)?;
    let x = ctx.tape.relu(x);
    let k2 = ctx.param("repr.conv2.kernel")?;
    let x = ctx.tape.conv2d(x, k2, ConvSpec::valid(2))?;
    let x = ctx.batch_norm(x, "repr.bn2", mode)?;
    let x = ctx.tape.relu(x);
    let k3 = ctx.param("repr.conv3.kernel")?;
    let x = ctx.tape.conv2d(x, k3, ConvSpec::valid(1))?;
    let s = ctx.tape.shape(x).to_vec();
    let x = ctx.tape.reshape(x, &[p, s[1] * s[2], cfg.d_repr])?;
    ctx.tape.mean_axis(x, 1)
}

/// Per-location `ReLU(x · W + b)`.
pub fn what_head<T: Real>(ctx: &mut Ctx<'_, T>, repr: Var) -> Result<Var> {
    let w = ctx.param("repr.what.weight")?;
    let b = ctx.param("repr.what.bias")?;
    let y = ctx.tape.linear(repr, w, Some(b))?;
    Ok(ctx.tape.relu(y))
}

/// Per-location affine map to class logits.
pub fn logits_head<T: Real>(ctx: &mut Ctx<'_, T>, what: Var) -> Result<Var> {
    let w = ctx.param("repr.logits.weight")?;
    let b = ctx.param("repr.logits.bias")?;
    ctx.tape.linear(what, w, Some(b))
}

/// Grid windows for a batch of `batch` images, row-major per image.
pub fn grid_windows(geom: &Geometry, batch: usize) -> Vec<Window> {
    let mut out = Vec::with_capacity(batch * geom.locations());
    for b in 0..batch {
        for loc in geom.all_locations() {
            let (top, left) = geom.window(loc);
            out.push((b, top, left));
        }
    }
    out
}

/// Full representation network over NHWC `images`.
pub fn represent<T: Real>(
    ctx: &mut Ctx<'_, T>,
    cfg: &ModelConfig,
    geom: &Geometry,
    images: Var,
    mode: BnMode,
) -> Result<ReprOutput> {
    let batch = ctx.tape.shape(images)[0];
    let windows = grid_windows(geom, batch);
    let patches = ctx.tape.patches(images, &windows, geom.rf)?;
    let repr = encode_patches(ctx, cfg, patches, mode)?;
    let what = what_head(ctx, repr)?;
    let logits = logits_head(ctx, what)?;
    let (h, w) = (geom.grid_h, geom.grid_w);
    Ok(ReprOutput {
        repr: ctx.tape.reshape(repr, &[batch, h, w, cfg.d_repr])?,
        what: ctx.tape.reshape(what, &[batch, h, w, cfg.d_what])?,
        logits: ctx.tape.reshape(logits, &[batch, h, w, cfg.num_classes])?,
    })
}

/// Class logits `[P, C]` for specific windows only.
pub fn logits_at_windows<T: Real>(
    ctx: &mut Ctx<'_, T>,
    cfg: &ModelConfig,
    images: Var,
    windows: &[Window],
    mode: BnMode,
) -> Result<Var> {
    let patches = ctx.tape.patches(images, windows, cfg.rf)?;
    let repr = encode_patches(ctx, cfg, patches, mode)?;
    let what = what_head(ctx, repr)?;
    logits_head(ctx, what)
}

/// Log of the normalized geometric mean of class probabilities over the
/// middle axis: `log_softmax(mean_l log_softmax(logits[b, l, :]))`.
/// `logits` is `[B, L, C]`; the result is `[B, C]`.
pub fn log_geometric_mean_probs<T: Real>(tape: &mut Tape<T>, logits: Var) -> Result<Var> {
    let lp = tape.log_softmax(logits, 2)?;
    let avg = tape.mean_axis(lp, 1)?;
    tape.log_softmax(avg, 1)
}

/// Infer-mode forward of a batch `[B, H, W, c]`, returning the grid logits
/// `[B, h, w, C]` as plain values.
pub fn grid_logits<T: Real>(
    params: &ParameterSet<T>,
    cfg: &ModelConfig,
    images: &Tensor<T>,
) -> Result<Tensor<T>> {
    let geom = cfg.geometry()?;
    let mut ctx = Ctx::inference(params);
    let x = ctx.constant(images.clone());
    let out = represent(&mut ctx, cfg, &geom, x, BnMode::Infer)?;
    Ok(ctx.tape.value(out.logits).clone())
}

/// Class probabilities from all grid locations of one `[H, W, c]` image:
/// per-location log-softmax, averaged, renormalized.
pub fn classify_full<T: Real>(
    params: &ParameterSet<T>,
    cfg: &ModelConfig,
    image: &Tensor<T>,
) -> Result<Vec<T>> {
    let s = image.shape();
    let batch = image.clone().reshape(&[1, s[0], s[1], s[2]])?;
    let logits = grid_logits(params, cfg, &batch)?;
    let l = logits.shape()[1] * logits.shape()[2];
    let mut tape = Tape::new();
    let x = tape.constant(logits.reshape(&[1, l, cfg.num_classes])?);
    let lp = log_geometric_mean_probs(&mut tape, x)?;
    Ok(tape.value(lp).data().iter().map(|v| v.exp()).collect())
}

/// Infer-mode encoder output for every patch of a grid, `[h, w, d_repr]`.
pub fn encode_patch_grid<T: Real>(
    params: &ParameterSet<T>,
    cfg: &ModelConfig,
    grid: &PatchGrid<T>,
) -> Result<Tensor<T>> {
    if grid.rf != cfg.rf {
        return Err(Error::InvalidArgument(format!(
            "patch size {} does not match encoder patch size {}",
            grid.rf, cfg.rf
        )));
    }
    let (h, w) = grid.grid_dims();
    let s = grid.patches.shape();
    let mut ctx = Ctx::inference(params);
    let p = ctx.constant(grid.patches.clone().reshape(&[h * w, s[2], s[3], s[4]])?);
    let r = encode_patches(&mut ctx, cfg, p, BnMode::Infer)?;
    ctx.tape.value(r).clone().reshape(&[h, w, cfg.d_repr])
}
