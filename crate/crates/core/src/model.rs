//! Model hyperparameters, patch-grid geometry, and weight initialization.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParameterSet;
use crate::tensor::{Real, Tensor};

/// `(row, column)` on the location grid.
pub type Location = (usize, usize);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub channels: usize,
    pub rf: usize,
    pub stride: usize,
    pub enc1: usize,
    pub enc2: usize,
    pub d_repr: usize,
    pub d_what: usize,
    pub where_hidden: usize,
    pub d_where: usize,
    pub d_mix: usize,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 63,
            channels: 1,
            rf: 15,
            stride: 8,
            enc1: 16,
            enc2: 32,
            d_repr: 64,
            d_what: 32,
            where_hidden: 48,
            d_where: 32,
            d_mix: 32,
            num_classes: 10,
        }
    }
}

impl ModelConfig {
    pub fn geometry(&self) -> Result<Geometry> {
        Geometry::new(self.image_size, self.image_size, self.rf, self.stride)
    }

    /// Spatial extent after each valid 3x3 encoder conv (strides 2, 2, 1).
    pub fn encoder_extents(&self) -> Result<[usize; 3]> {
        let after = |x: usize, s: usize| -> Result<usize> {
            if x < 3 {
                return Err(Error::InvalidArgument(format!(
                    "patch size {} too small for the 3-layer encoder",
                    self.rf
                )));
            }
            Ok((x - 3) / s + 1)
        };
        let a = after(self.rf, 2)?;
        let b = after(a, 2)?;
        let c = after(b, 1)?;
        Ok([a, b, c])
    }
}

/// How an `H x W` image tiles into `rf x rf` patches at a fixed stride.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometry {
    pub height: usize,
    pub width: usize,
    pub rf: usize,
    pub stride: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

fn nearest_valid(size: usize, rf: usize, stride: usize) -> usize {
    if size <= rf {
        return rf;
    }
    let steps = ((size - rf) as f64 / stride as f64).round() as usize;
    rf + steps * stride
}

impl Geometry {
    pub fn new(height: usize, width: usize, rf: usize, stride: usize) -> Result<Self> {
        if rf == 0 || stride == 0 {
            return Err(Error::InvalidArgument("rf and stride must be positive".into()));
        }
        for size in [height, width] {
            if rf > size || (size - rf) % stride != 0 {
                return Err(Error::Geometry {
                    size,
                    rf,
                    stride,
                    suggested: nearest_valid(size, rf, stride),
                });
            }
        }
        Ok(Self {
            height,
            width,
            rf,
            stride,
            grid_h: (height - rf) / stride + 1,
            grid_w: (width - rf) / stride + 1,
        })
    }

    pub fn locations(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// Top-left pixel of the patch at `loc`.
    pub fn window(&self, loc: Location) -> (usize, usize) {
        (loc.0 * self.stride, loc.1 * self.stride)
    }

    pub fn index(&self, loc: Location) -> usize {
        loc.0 * self.grid_w + loc.1
    }

    pub fn location(&self, index: usize) -> Location {
        (index / self.grid_w, index % self.grid_w)
    }

    pub fn contains(&self, loc: Location) -> bool {
        loc.0 < self.grid_h && loc.1 < self.grid_w
    }

    pub fn all_locations(&self) -> Vec<Location> {
        (0..self.locations()).map(|i| self.location(i)).collect()
    }
}

fn he_normal<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor<f32> {
    let std = (2.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| (rng.sample::<f64, _>(StandardNormal) * std) as f32)
}

fn insert_bn(p: &mut ParameterSet<f32>, prefix: &str, c: usize) {
    p.insert(format!("{prefix}.scale"), Tensor::full(&[c], 1.0));
    p.insert(format!("{prefix}.shift"), Tensor::zeros(&[c]));
    p.insert(format!("{prefix}.running_mean"), Tensor::zeros(&[c]));
    p.insert(format!("{prefix}.running_var"), Tensor::full(&[c], 1.0));
}

/// Representation network weights (θ) plus input normalization buffers.
pub fn init_representation(cfg: &ModelConfig, seed: u64) -> ParameterSet<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5245_5052);
    let mut p = ParameterSet::new();
    let c = cfg.channels;
    p.insert("input.mean", Tensor::zeros(&[1]));
    p.insert("input.std", Tensor::full(&[1], 1.0));
    p.insert("repr.conv1.kernel", he_normal(&mut rng, &[3, 3, c, cfg.enc1], 9 * c));
    insert_bn(&mut p, "repr.bn1", cfg.enc1);
    p.insert(
        "repr.conv2.kernel",
        he_normal(&mut rng, &[3, 3, cfg.enc1, cfg.enc2], 9 * cfg.enc1),
    );
    insert_bn(&mut p, "repr.bn2", cfg.enc2);
    p.insert(
        "repr.conv3.kernel",
        he_normal(&mut rng, &[3, 3, cfg.enc2, cfg.d_repr], 9 * cfg.enc2),
    );
    p.insert("repr.what.weight", he_normal(&mut rng, &[cfg.d_repr, cfg.d_what], cfg.d_repr));
    p.insert("repr.what.bias", Tensor::zeros(&[cfg.d_what]));
    let std = (1.0 / cfg.d_what as f64).sqrt();
    p.insert(
        "repr.logits.weight",
        Tensor::from_fn(&[cfg.d_what, cfg.num_classes], |_| {
            (rng.sample::<f64, _>(StandardNormal) * std) as f32
        }),
    );
    p.insert("repr.logits.bias", Tensor::zeros(&[cfg.num_classes]));
    p
}

/// Location network weights (η): attention network, mixing layer, query.
pub fn init_location(cfg: &ModelConfig, seed: u64) -> ParameterSet<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4c4f_4341);
    let mut p = ParameterSet::new();
    let h = cfg.where_hidden;
    p.insert("loc.where1.kernel", he_normal(&mut rng, &[1, 1, cfg.d_repr, h], cfg.d_repr));
    insert_bn(&mut p, "loc.wbn1", h);
    p.insert("loc.where2.kernel", he_normal(&mut rng, &[3, 3, h, h], 9 * h));
    insert_bn(&mut p, "loc.wbn2", h);
    p.insert("loc.where3.kernel", he_normal(&mut rng, &[1, 1, h, cfg.d_where], h));
    insert_bn(&mut p, "loc.wbn3", cfg.d_where);
    p.insert(
        "loc.where4.kernel",
        he_normal(&mut rng, &[3, 3, cfg.d_where, cfg.d_where], 9 * cfg.d_where),
    );
    insert_bn(&mut p, "loc.wbn4", cfg.d_where);
    let fan_in = cfg.d_what + cfg.d_where;
    let std = (1.0 / fan_in as f64).sqrt();
    p.insert(
        "loc.mix.weight",
        Tensor::from_fn(&[fan_in, cfg.d_mix], |_| {
            (rng.sample::<f64, _>(StandardNormal) * std) as f32
        }),
    );
    p.insert("loc.mix.bias", Tensor::zeros(&[cfg.d_mix]));
    p.insert(
        "loc.cell.query",
        Tensor::from_fn(&[cfg.d_mix], |_| rng.sample::<f64, _>(StandardNormal) as f32),
    );
    p
}

pub fn init_model(cfg: &ModelConfig, seed: u64) -> ParameterSet<f32> {
    let mut p = init_representation(cfg, seed);
    p.merge_prefix(&init_location(cfg, seed), "loc.");
    p
}

/// Sets the input normalization buffers from pixel statistics.
pub fn set_input_stats<T: Real>(params: &mut ParameterSet<T>, mean: f64, std: f64) {
    params.insert("input.mean", Tensor::scalar(T::lit(mean)));
    params.insert("input.std", Tensor::scalar(T::lit(std.max(1e-6))));
}
