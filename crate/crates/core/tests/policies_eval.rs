use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use saccader::data::{generate_dataset, Dataset, DatasetFile, SyntheticSpec};
use saccader::error::Error;
use saccader::eval::*;
use saccader::model::{init_model, Geometry, Location, ModelConfig};
use saccader::policies::*;
use saccader::Tensor;

fn desk_data(n: usize, seed: u64) -> DatasetFile {
    generate_dataset(&SyntheticSpec {
        train: n,
        dev: n,
        test: n,
        seed,
        ..SyntheticSpec::default()
    })
    .unwrap()
}

fn random_image(h: usize, w: usize, c: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[h, w, c], |_| rng.random_range(0.0..1.0))
}

#[test]
fn random_policy_is_uniform_without_replacement() {
    let (draws, k, l) = (20_000usize, 6usize, 49usize);
    let mut any = vec![0usize; l];
    let mut first = vec![0usize; l];
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    for _ in 0..draws {
        let locs = policy_random((7, 7), k, &mut rng).unwrap();
        let mut idx: Vec<usize> = locs.iter().map(|&(i, j)| i * 7 + j).collect();
        first[idx[0]] += 1;
        idx.sort();
        idx.dedup();
        assert_eq!(idx.len(), k);
        idx.iter().for_each(|&i| any[i] += 1);
    }
    for (counts, p) in [(&any, k as f64 / l as f64), (&first, 1.0 / l as f64)] {
        let mean = draws as f64 * p;
        let sd = (draws as f64 * p * (1.0 - p)).sqrt();
        for &c in counts {
            assert!((c as f64 - mean).abs() < 5.0 * sd, "{c} vs {mean}");
        }
    }
}

#[test]
fn ordered_logits_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    for _ in 0..30 {
        let g = Tensor::<f64>::from_fn(&[4, 5, 3], |_| rng.random_range(-2.0..2.0));
        let mut scored: Vec<(f64, Location)> = (0..20)
            .map(|i| {
                let m = g.data()[i * 3..i * 3 + 3].iter().copied().fold(f64::MIN, f64::max);
                (m, (i / 5, i % 5))
            })
            .collect();
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        let want: Vec<Location> = scored.iter().take(7).map(|s| s.1).collect();
        assert_eq!(policy_ordered_logits(&g, 7).unwrap(), want);
    }
}

fn sobel_oracle(img: &Tensor<f64>) -> Vec<f64> {
    let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    // explicitly padded copy
    let mut pad = vec![0.0; (h + 2) * (w + 2) * c];
    for y in 0..h + 2 {
        for x in 0..w + 2 {
            let sy = y.saturating_sub(1).min(h - 1);
            let sx = x.saturating_sub(1).min(w - 1);
            for ch in 0..c {
                pad[(y * (w + 2) + x) * c + ch] = img.data()[(sy * w + sx) * c + ch];
            }
        }
    }
    let at3 = |y: usize, x: usize, ch: usize| pad[(y * (w + 2) + x) * c + ch];
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for ch in 0..c {
                let at = |y: usize, x: usize| at3(y, x, ch);
                let (py, px) = (y + 1, x + 1);
                let gx = (at(py - 1, px + 1) + 2.0 * at(py, px + 1) + at(py + 1, px + 1))
                    - (at(py - 1, px - 1) + 2.0 * at(py, px - 1) + at(py + 1, px - 1));
                let gy = (at(py + 1, px - 1) + 2.0 * at(py + 1, px) + at(py + 1, px + 1))
                    - (at(py - 1, px - 1) + 2.0 * at(py - 1, px) + at(py - 1, px + 1));
                acc += gx.hypot(gy);
            }
            out[y * w + x] = acc / c as f64;
        }
    }
    out
}

#[test]
fn sobel_policy_matches_per_patch_recomputation() {
    for (seed, c) in [(72u64, 1usize), (73, 3)] {
        let img = random_image(31, 31, c, seed);
        let mag = sobel_magnitude(&img).unwrap();
        let want = sobel_oracle(&img);
        for (a, b) in mag.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
        let geom = Geometry::new(31, 31, 15, 8).unwrap();
        for stat in [SobelStat::Mean, SobelStat::Variance] {
            let mut scored: Vec<(f64, Location)> = Vec::new();
            for i in 0..3 {
                for j in 0..3 {
                    let (mut s, mut s2) = (0.0, 0.0);
                    for y in i * 8..i * 8 + 15 {
                        for x in j * 8..j * 8 + 15 {
                            s += want[y * 31 + x];
                            s2 += want[y * 31 + x] * want[y * 31 + x];
                        }
                    }
                    let mean = s / 225.0;
                    let v = match stat {
                        SobelStat::Mean => mean,
                        SobelStat::Variance => s2 / 225.0 - mean * mean,
                    };
                    scored.push((v, (i, j)));
                }
            }
            let stats = patch_statistics(&mag, &geom, stat);
            for (a, b) in stats.iter().zip(&scored) {
                assert!((a - b.0).abs() < 1e-9);
            }
            scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
            let want_locs: Vec<Location> = scored.iter().take(4).map(|s| s.1).collect();
            assert_eq!(policy_sobel(&img, 15, 8, 4, stat).unwrap(), want_locs);
        }
    }
}

#[test]
fn sobel_flat_image_has_zero_magnitude_and_edges_win() {
    let flat = Tensor::<f64>::full(&[23, 23, 1], 0.4);
    assert!(sobel_magnitude(&flat).unwrap().iter().all(|&v| v.abs() < 1e-12));
    // a bright square entirely inside the bottom-right patch only
    let img = Tensor::<f64>::from_fn(&[23, 23, 1], |i| {
        let (y, x) = (i / 23, i % 23);
        if (17..20).contains(&y) && (17..20).contains(&x) {
            1.0
        } else {
            0.0
        }
    });
    assert_eq!(policy_sobel(&img, 15, 8, 1, SobelStat::Mean).unwrap(), vec![(1, 1)]);
    assert_eq!(policy_sobel(&img, 15, 8, 1, SobelStat::Variance).unwrap(), vec![(1, 1)]);
}

#[test]
fn glimpse_classification_is_the_mean_logit_argmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(74);
    for _ in 0..50 {
        let grid = Tensor::<f32>::from_fn(&[3, 3, 5], |_| rng.random_range(-3.0..3.0));
        let mut locs: Vec<Location> = (0..9).map(|i| (i / 3, i % 3)).collect();
        let k = rng.random_range(1..=9);
        let (picked, _) = locs.partial_shuffle(&mut rng, k);
        let picked = picked.to_vec();
        let mut sums = [0.0f64; 5];
        for &(i, j) in &picked {
            for (c, s) in sums.iter_mut().enumerate() {
                *s += grid.data()[(i * 3 + j) * 5 + c] as f64;
            }
        }
        let best = (0..5).fold(0, |b, c| if sums[c] > sums[b] { c } else { b });
        assert_eq!(classify_with_locations(&grid, &picked).unwrap(), best);
        let mut rev = picked.clone();
        rev.reverse();
        assert_eq!(classify_with_locations(&grid, &rev).unwrap(), best);
    }
    let g = Tensor::<f32>::zeros(&[2, 2, 3]);
    assert!(matches!(classify_with_locations(&g, &[(0, 1), (0, 1)]), Err(Error::DuplicateLocation(0, 1))));
}

#[test]
fn top_k_membership() {
    let s = [0.1, 0.5, 0.3, 0.5, -1.0, 2.0];
    assert!(in_top_k(&s, 5, 1));
    assert!(in_top_k(&s, 1, 2) && !in_top_k(&s, 3, 2));
    assert!(in_top_k(&s, 4, 6));
}

fn locations_strategy() -> impl Strategy<Value = Vec<Location>> {
    proptest::collection::btree_set((0usize..7, 0usize..7), 0..12).prop_map(|s| s.into_iter().collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn coverage_is_monotone_and_matches_occlusion(locs in locations_strategy(), extra in (0usize..7, 0usize..7)) {
        let c = coverage(&locs, 15, 8, (63, 63));
        prop_assert!((0.0..=1.0).contains(&c));
        prop_assert!(c <= locs.len() as f64 * 225.0 / 3969.0 + 1e-12);
        let mut more = locs.clone();
        if !more.contains(&extra) {
            more.push(extra);
        }
        prop_assert!(coverage(&more, 15, 8, (63, 63)) >= c);
        let ones = Tensor::<f32>::full(&[63, 63, 1], 1.0);
        let o = occlude(&ones, &locs, 15, 8);
        let zeros = o.data().iter().filter(|&&v| v == 0.0).count();
        prop_assert_eq!(zeros as f64 / 3969.0, c);
    }

    #[test]
    fn occlusion_is_idempotent(locs in locations_strategy(), seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = Tensor::<f32>::from_fn(&[63, 63, 2], |_| rng.random_range(0.0..1.0));
        let once = occlude(&img, &locs, 15, 8);
        prop_assert_eq!(occlude(&once, &locs, 15, 8), once.clone());
        // untouched pixels are unchanged
        for (a, b) in img.data().iter().zip(once.data()) {
            prop_assert!(*b == 0.0 || a == b);
        }
    }

    #[test]
    fn ordered_logits_prefixes_agree(seed in 0u64..1000, k in 1usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Tensor::<f64>::from_fn(&[3, 3, 4], |_| rng.random_range(-1.0..1.0));
        let long = policy_ordered_logits(&g, 9).unwrap();
        prop_assert_eq!(&policy_ordered_logits(&g, k).unwrap()[..], &long[..k]);
    }

    #[test]
    fn pgd_iterates_stay_in_ball_and_box(seed in 0u64..500, eps in 0.001f64..0.1, iters in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = Tensor::<f32>::from_fn(&[6, 6, 1], |_| rng.random_range(-0.1..1.1));
        let clipped: Vec<f32> = img.data().iter().map(|v| v.clamp(0.0, 1.0)).collect();
        let w: Vec<f32> = (0..36).map(|_| rng.random_range(-1.0..1.0)).collect();
        let pgd = PgdConfig { eps, step: eps / 3.0, max_iters: iters };
        let mut calls = 0;
        let out = pgd_attack(&img, 0, 2, &pgd, |x| {
            calls += 1;
            // the model never changes its mind, so every iteration runs
            let ok = x.data().iter().zip(&clipped).all(|(a, b)| (a - b).abs() <= eps as f32 + 1e-6 && (0.0..=1.0).contains(a));
            assert!(ok);
            Ok((0, Tensor::new(&[6, 6, 1], w.clone())?))
        }).unwrap();
        prop_assert_eq!(out.iterations, iters);
        prop_assert_eq!(calls, iters + 1);
        prop_assert!(out.linf() <= eps + 1e-6);
        prop_assert!(out.adversarial.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

/// Two-class linear model `z = W x`: the cross-entropy input gradient at
/// label 0 points along `w1 - w0`, so each sign step lowers the margin by
/// `step * |w1 - w0|_1` while no pixel is clipped.
#[test]
fn pgd_on_linear_classifier_closed_form() {
    let n = 16;
    let mut rng = ChaCha8Rng::seed_from_u64(75);
    let w0: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w1: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let d: Vec<f64> = w1.iter().zip(&w0).map(|(a, b)| a - b).collect();
    let l1: f64 = d.iter().map(|v| v.abs()).sum();
    let step = 0.5 / 255.0;
    let eps = 0.1;
    let img = Tensor::<f32>::full(&[4, 4, 1], 0.5);
    // bias so the clean margin is a known multiple of the per-step drop
    let margin = 3.5 * step * l1;
    let base: f64 = d.iter().map(|v| -v * 0.5).sum();
    let bias0 = margin - base;
    let model = |x: &Tensor<f32>| -> saccader::Result<(usize, Tensor<f32>)> {
        let z0: f64 = w0.iter().zip(x.data()).map(|(w, &v)| w * v as f64).sum::<f64>() + bias0;
        let z1: f64 = w1.iter().zip(x.data()).map(|(w, &v)| w * v as f64).sum();
        let p1 = 1.0 / (1.0 + (z0 - z1).exp());
        let g: Vec<f32> = d.iter().map(|v| (p1 * v) as f32).collect();
        Ok((usize::from(z1 > z0), Tensor::new(&[4, 4, 1], g)?))
    };
    let out = pgd_attack(&img, 0, 2, &PgdConfig { eps, step, max_iters: 100 }, model).unwrap();
    assert_eq!(out.clean_prediction, 0);
    assert_eq!(out.prediction, 1);
    assert_eq!(out.iterations, 4);
    for ((a, c), dv) in out.adversarial.data().iter().zip(out.clean.data()).zip(&d) {
        let want = 0.5 + 4.0 * step * dv.signum();
        assert!((*a as f64 - want).abs() < 1e-6);
        assert!((*a - c).abs() as f64 <= eps);
    }

    // a budget below one step's worth leaves the prediction intact
    let tight = PgdConfig { eps: step, step, max_iters: 100 };
    let out = pgd_attack(&img, 0, 2, &tight, model).unwrap();
    assert_eq!(out.prediction, 0);
    assert_eq!(out.iterations, 100);
    assert!((out.linf() - step).abs() < 1e-6);
    assert!(matches!(pgd_attack(&img, 2, 2, &tight, model), Err(Error::LabelOutOfRange { .. })));
}

#[test]
fn coverage_matching_prefers_close_rows_then_interpolates() {
    let row = |k: usize, coverage: f64, top1: f64| EvalRow {
        policy: "p".into(),
        k,
        top1,
        top5: 1.0,
        coverage,
        occluded_top1: None,
    };
    let rows = vec![row(1, 0.1, 0.5), row(2, 0.2, 0.6), row(3, 0.29, 0.7), row(4, 0.31, 0.8), row(5, 0.5, 0.9)];
    let m = match_coverage(0.3, &rows, 0.02).unwrap();
    assert_eq!((m.k, m.top1), (Some(4), 0.8));
    let m = match_coverage(0.4, &rows, 0.02).unwrap();
    assert_eq!(m.k, None);
    assert!((m.top1 - (0.8 + (0.09 / 0.19) * 0.1)).abs() < 1e-12);
    assert!(match_coverage(0.05, &rows, 0.02).is_none());
    assert!(match_coverage(0.9, &rows, 0.02).is_none());
}

fn models<'a>(cfg: &'a ModelConfig, p: &'a saccader::params::ParameterSet<f32>) -> EvalModels<'a> {
    EvalModels {
        cfg,
        baseline: p,
        saccader: Some(p),
        judge: None,
    }
}

#[test]
fn every_policy_reduces_to_the_grid_mean_at_full_coverage() {
    let cfg = ModelConfig::default();
    let p = init_model(&cfg, 76);
    let data = desk_data(24, 5);
    let m = models(&cfg, &p);
    let grids = logits_grids(&p, &cfg, &data.test, 24).unwrap();
    let all: Vec<Location> = (0..7).flat_map(|i| (0..7).map(move |j| (i, j))).collect();
    let want = (0..24)
        .filter(|&i| classify_with_locations(&grids[i], &all).unwrap() == data.test.labels[i] as usize)
        .count() as f64
        / 24.0;
    for kind in PolicyKind::ALL {
        let rows = eval_policy(kind, &m, &data.test, 24, &[1, 49], 3).unwrap();
        assert_eq!(rows[1].coverage, 1.0);
        assert!((rows[1].top1 - want).abs() < 1e-12, "{kind:?}");
        assert!(rows[0].coverage > 0.0 && rows[0].coverage < 1.0);
        assert!(rows.iter().all(|r| r.top5 >= r.top1));
    }
}

#[test]
fn report_schema_and_determinism() {
    let cfg = ModelConfig::default();
    let p = init_model(&cfg, 77);
    let data = desk_data(16, 6);
    let m = models(&cfg, &p);
    let ec = EvalConfig {
        eval_images: 16,
        k_values: vec![1, 2, 5],
        ..EvalConfig::default()
    };
    let a = evaluate(&PolicyKind::ALL, &m, &data.test, &ec, 9, "abc").unwrap();
    let b = evaluate(&PolicyKind::ALL, &m, &data.test, &ec, 9, "abc").unwrap();
    assert_eq!(a, b);
    let csv = a.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], EVAL_HEADER);
    assert_eq!(lines.len(), 1 + 5 * 3);
    for l in &lines[1..] {
        let f: Vec<&str> = l.split(',').collect();
        assert_eq!(f.len(), 6);
        assert!(f[5].is_empty());
        assert!(PolicyKind::parse(f[0]).is_ok());
    }
    assert_eq!(a.images, 16);
    assert!(a.row(PolicyKind::SobelVar, 5).is_some());
    // the random policy depends on the seed, the others do not
    let c = evaluate(&[PolicyKind::Random, PolicyKind::SobelMean], &m, &data.test, &ec, 10, "abc").unwrap();
    assert_eq!(c.row(PolicyKind::SobelMean, 2), a.row(PolicyKind::SobelMean, 2));
    assert!(eval_policy(PolicyKind::Random, &m, &data.test, 16, &[0], 1).is_err());
    assert!(matches!(
        eval_policy(PolicyKind::Random, &m, &data.test, 16, &[50], 1),
        Err(Error::TooManyGlimpses { .. })
    ));
}

#[test]
fn missing_models_are_reported() {
    let cfg = ModelConfig::default();
    let p = init_model(&cfg, 78);
    let data = desk_data(4, 7);
    let m = EvalModels {
        cfg: &cfg,
        baseline: &p,
        saccader: None,
        judge: None,
    };
    assert!(matches!(
        eval_policy(PolicyKind::Saccader, &m, &data.test, 4, &[2], 0),
        Err(Error::MissingCheckpoint { .. })
    ));
    let m = models(&cfg, &p);
    assert!(matches!(occlusion_experiment(&m, &data.test, 4, 2, 0), Err(Error::MissingCheckpoint { .. })));
}

fn small_judge(data: &DatasetFile, seed: u64) -> JudgeOutcome {
    let ec = EvalConfig {
        judge_epochs: 2,
        judge_batch: 16,
        ..EvalConfig::default()
    };
    train_occlusion_classifier(data, &ModelConfig::default(), &ec, seed).unwrap()
}

#[test]
fn judge_training_is_deterministic_and_blind_on_blank_images() {
    let data = desk_data(64, 8);
    let a = small_judge(&data, 4);
    let b = small_judge(&data, 4);
    assert_eq!(a.params, b.params);
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.metrics.len(), 4);

    // fully occluded inputs all look alike, so one class is predicted for all
    let blank = Tensor::<f32>::zeros(&[10, 63, 63, 1]);
    let preds = judge_predict(&a.params, &blank).unwrap();
    assert!(preds.iter().all(|&p| p == preds[0]));
    let cfg = ModelConfig::default();
    let m = EvalModels {
        judge: Some(&a.params),
        ..models(&cfg, &a.params)
    };
    let p = init_model(&cfg, 79);
    let m = EvalModels { baseline: &p, saccader: Some(&p), ..m };
    let rows = eval_policy(PolicyKind::Random, &m, &data.test, 64, &[49], 0).unwrap();
    let rate = data.test.labels.iter().filter(|&&y| y as usize == preds[0]).count() as f64 / 64.0;
    assert_eq!(rows[0].occluded_top1, Some(rate));
}

#[test]
fn random_occlusion_matches_saccader_coverage() {
    let data = desk_data(32, 9);
    let judge = small_judge(&data, 5);
    let cfg = ModelConfig::default();
    let p = init_model(&cfg, 80);
    let m = EvalModels {
        cfg: &cfg,
        baseline: &p,
        saccader: Some(&p),
        judge: Some(&judge.params),
    };
    for k in [1, 4] {
        let r = occlusion_experiment(&m, &data.test, 32, k, 1).unwrap();
        assert!(r.random_coverage >= r.saccader_coverage);
        // at most one extra patch beyond the target
        assert!(r.random_coverage <= r.saccader_coverage + 225.0 / 3969.0 + 1e-12);
        assert!((r.relevance_gap() - (r.random_occluded_top1 - r.saccader_occluded_top1)).abs() < 1e-15);
    }
}

#[test]
fn empty_dataset_shape() {
    let ds = Dataset::empty(63, 63, 1, 10);
    assert!(ds.is_empty());
}
