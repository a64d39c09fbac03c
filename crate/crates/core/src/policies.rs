//! Engineered glimpse policies used as baselines: random, ordered logits,
//! and per-patch Sobel statistics.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Geometry, Location};
use crate::tensor::{Real, Tensor};
use crate::training::sorted_location_targets;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Saccader,
    Random,
    OrderedLogits,
    SobelMean,
    SobelVar,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 5] = [
        PolicyKind::Saccader,
        PolicyKind::Random,
        PolicyKind::OrderedLogits,
        PolicyKind::SobelMean,
        PolicyKind::SobelVar,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Saccader => "saccader",
            PolicyKind::Random => "random",
            PolicyKind::OrderedLogits => "ordered_logits",
            PolicyKind::SobelMean => "sobel_mean",
            PolicyKind::SobelVar => "sobel_var",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown policy {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicySpec {
    pub kind: PolicyKind,
    pub k: usize,
    pub seed: u64,
}

fn check_k(k: usize, available: usize) -> Result<()> {
    if k > available {
        return Err(Error::TooManyGlimpses {
            requested: k,
            available,
        });
    }
    Ok(())
}

/// `k` distinct grid locations drawn uniformly without replacement.
pub fn policy_random<R: Rng + ?Sized>(grid: (usize, usize), k: usize, rng: &mut R) -> Result<Vec<Location>> {
    let (h, w) = grid;
    check_k(k, h * w)?;
    Ok(sample(rng, h * w, k).into_iter().map(|i| (i / w, i % w)).collect())
}

/// Top `k` locations of a `[h, w, C]` logits grid by maximum class logit.
pub fn policy_ordered_logits<T: Real>(logits: &Tensor<T>, k: usize) -> Result<Vec<Location>> {
    sorted_location_targets(logits, k)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SobelStat {
    Mean,
    Variance,
}

/// Sobel gradient magnitude `sqrt(Gx² + Gy²)` per channel, edge padded,
/// averaged over channels. `image` is `[H, W, c]`; the result is `H·W`.
pub fn sobel_magnitude<T: Real>(image: &Tensor<T>) -> Result<Vec<f64>> {
    let [h, w, c] = image.shape()[..] else {
        return Err(Error::InvalidArgument(format!("expected [H, W, c], got {:?}", image.shape())));
    };
    const KX: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
    const KY: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];
    // border pixels are replicated so flat regions have zero gradient
    let px = |y: isize, x: isize, ch: usize| -> f64 {
        let y = y.clamp(0, h as isize - 1) as usize;
        let x = x.clamp(0, w as isize - 1) as usize;
        image.data()[(y * w + x) * c + ch].to_f64().unwrap()
    };
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for ch in 0..c {
                let (mut gx, mut gy) = (0.0, 0.0);
                for dy in 0..3 {
                    for dx in 0..3 {
                        let v = px(y as isize + dy as isize - 1, x as isize + dx as isize - 1, ch);
                        gx += KX[dy][dx] * v;
                        gy += KY[dy][dx] * v;
                    }
                }
                acc += (gx * gx + gy * gy).sqrt();
            }
            out[y * w + x] = acc / c as f64;
        }
    }
    Ok(out)
}

/// Per-location mean or population variance of `map` (`H·W`) over each
/// `rf x rf` window, row-major over the grid.
pub fn patch_statistics(map: &[f64], geom: &Geometry, stat: SobelStat) -> Vec<f64> {
    let n = (geom.rf * geom.rf) as f64;
    geom.all_locations()
        .into_iter()
        .map(|loc| {
            let (top, left) = geom.window(loc);
            let mut sum = 0.0;
            for y in top..top + geom.rf {
                sum += map[y * geom.width + left..y * geom.width + left + geom.rf].iter().sum::<f64>();
            }
            let mean = sum / n;
            match stat {
                SobelStat::Mean => mean,
                SobelStat::Variance => {
                    let mut ss = 0.0;
                    for y in top..top + geom.rf {
                        for &v in &map[y * geom.width + left..y * geom.width + left + geom.rf] {
                            ss += (v - mean) * (v - mean);
                        }
                    }
                    ss / n
                }
            }
        })
        .collect()
}

/// Indices sorted by descending score, ties to the lowest index.
pub fn rank_descending(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// Top `k` patches by the chosen Sobel statistic.
pub fn policy_sobel<T: Real>(
    image: &Tensor<T>,
    rf: usize,
    stride: usize,
    k: usize,
    stat: SobelStat,
) -> Result<Vec<Location>> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::InvalidArgument(format!("expected [H, W, c], got {s:?}")));
    }
    let geom = Geometry::new(s[0], s[1], rf, stride)?;
    check_k(k, geom.locations())?;
    let mag = sobel_magnitude(image)?;
    let scores = patch_statistics(&mag, &geom, stat);
    Ok(rank_descending(&scores)
        .into_iter()
        .take(k)
        .map(|i| geom.location(i))
        .collect())
}
