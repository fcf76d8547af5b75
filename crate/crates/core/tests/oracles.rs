//! Library results checked against independent reference computations.

use std::collections::BTreeSet;

use chrono::{Duration, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scenario_core::cluster::{calinski_harabasz, davies_bouldin, kmeans_fit, silhouette_score};
use scenario_core::features::{
    build_feature_matrix, extract_spectral, extract_statistical, mean_removed_dft, normalize_features, wrap_phase,
};
use scenario_core::metrics::compute_metrics;
use scenario_core::scenario::{
    evaluate_on_test, forecast_one_day, one_step_day, train_library, ExogenousDay, LibraryConfig,
};
use scenario_core::sr::{
    build_training_set, parse_expression, refit_constants, REFERENCE_COOLING_MODEL, REFERENCE_HEATING_MODEL,
};
use scenario_core::synth::{generate, SynthConfig};
use scenario_core::{
    Channel, ClusterModel, DayWindow, GpConfig, KMeansConfig, LagRef, Mode, ScenarioLibrary, ScenarioModel,
    SensorRecord, SpectralConfig,
};

fn snapshot(pairs: &[(LagRef, f64)]) -> std::collections::HashMap<LagRef, f64> {
    pairs.iter().copied().collect()
}

// Reference models, substituted by hand:
// 26 + 7.3e-5 * (26 - 23.49) * ((26 - 500) + 0.2614 * 0) = 25.9131494...
// 22 - 1.4e-4 * ((22 - 22) - 2.316) * (0.3573 * (0 - 10) + 20) = 22.0053263...
#[test]
fn reference_models_at_known_points() {
    let cooling = parse_expression(REFERENCE_COOLING_MODEL).unwrap();
    let v = cooling
        .evaluate(&snapshot(&[
            (LagRef::indoor(3), 26.0),
            (LagRef::power(3), 500.0),
            (LagRef::power(72), 0.0),
        ]))
        .unwrap();
    let by_hand = 26.0 + 0.000073 * (26.0 - 23.49) * ((26.0 - 500.0) + 0.2614 * 0.0);
    assert!((v - by_hand).abs() < 1e-12);
    assert!((v - 25.913149).abs() < 1e-6, "{v}");

    let heating = parse_expression(REFERENCE_HEATING_MODEL).unwrap();
    let v = heating
        .evaluate(&snapshot(&[
            (LagRef::indoor(3), 22.0),
            (LagRef::indoor(103), 22.0),
            (LagRef::power(3), 0.0),
            (LagRef::outdoor(36), 10.0),
            (LagRef::indoor(72), 20.0),
        ]))
        .unwrap();
    let by_hand = 22.0 - 0.00014 * ((22.0 - 22.0) - 2.316) * (0.3573 * (0.0 - 10.0) + 20.0);
    assert!((v - by_hand).abs() < 1e-12);
    assert!((v - 22.005326).abs() < 1e-6, "{v}");
}

#[test]
fn reference_models_fixed_points() {
    let cooling = parse_expression(REFERENCE_COOLING_MODEL).unwrap();
    for (p3, p72) in [(0.0, 0.0), (800.0, 1200.0), (-3.0, 7.5)] {
        let v = cooling
            .evaluate(&snapshot(&[
                (LagRef::indoor(3), 23.49),
                (LagRef::power(3), p3),
                (LagRef::power(72), p72),
            ]))
            .unwrap();
        assert_eq!(v, 23.49);
    }
    // Tin[t-3] - Tin[t-103] = 2.316 zeroes the correction term.
    let heating = parse_expression(REFERENCE_HEATING_MODEL).unwrap();
    let v = heating
        .evaluate(&snapshot(&[
            (LagRef::indoor(3), 2.316),
            (LagRef::indoor(103), 0.0),
            (LagRef::power(3), 400.0),
            (LagRef::outdoor(36), -5.0),
            (LagRef::indoor(72), 19.0),
        ]))
        .unwrap();
    assert_eq!(v, 2.316);
}

fn exhaustive_inertia(rows: &[Vec<f64>], k: usize) -> f64 {
    let n = rows.len();
    let mut best = f64::INFINITY;
    let mut labels = vec![0usize; n];
    loop {
        let mut sizes = vec![0usize; k];
        labels.iter().for_each(|&l| sizes[l] += 1);
        if sizes.iter().all(|&s| s > 0) {
            let mut total = 0.0;
            for c in 0..k {
                let members: Vec<&Vec<f64>> = rows
                    .iter()
                    .zip(&labels)
                    .filter(|(_, &l)| l == c)
                    .map(|(r, _)| r)
                    .collect();
                for d in 0..rows[0].len() {
                    let mean = members.iter().map(|r| r[d]).sum::<f64>() / members.len() as f64;
                    total += members.iter().map(|r| (r[d] - mean).powi(2)).sum::<f64>();
                }
            }
            best = best.min(total);
        }
        let mut i = 0;
        loop {
            if i == n {
                return best;
            }
            labels[i] += 1;
            if labels[i] < k {
                break;
            }
            labels[i] = 0;
            i += 1;
        }
    }
}

fn random_rows(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..dim).map(|_| rng.gen_range(-5.0..5.0)).collect())
        .collect()
}

#[test]
fn kmeans_reaches_exhaustive_optimum() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let config = KMeansConfig {
        max_iter: 300,
        n_restarts: 60,
    };
    for case in 0..30 {
        let n = rng.gen_range(4..=8);
        let k = 2 + case % 2;
        let dim = rng.gen_range(1..=3);
        let rows = random_rows(&mut rng, n, dim);
        let model = kmeans_fit(&rows, k, case as u64, &config).unwrap();
        let optimum = exhaustive_inertia(&rows, k);
        assert!(
            (model.inertia - optimum).abs() < 1e-9,
            "case {case}: {} vs {optimum}",
            model.inertia
        );
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn naive_silhouette(rows: &[Vec<f64>], labels: &[usize]) -> f64 {
    let n = rows.len();
    let mut total = 0.0;
    for i in 0..n {
        let own = labels.iter().filter(|&&l| l == labels[i]).count();
        if own == 1 {
            continue;
        }
        let a = (0..n)
            .filter(|&j| j != i && labels[j] == labels[i])
            .map(|j| dist(&rows[i], &rows[j]))
            .sum::<f64>()
            / (own - 1) as f64;
        let mut b = f64::INFINITY;
        for c in labels.iter().copied().collect::<BTreeSet<_>>() {
            if c == labels[i] {
                continue;
            }
            let members: Vec<usize> = (0..n).filter(|&j| labels[j] == c).collect();
            b = b.min(members.iter().map(|&j| dist(&rows[i], &rows[j])).sum::<f64>() / members.len() as f64);
        }
        if a.max(b) > 0.0 {
            total += (b - a) / a.max(b);
        }
    }
    total / n as f64
}

fn centroid(rows: &[Vec<f64>], labels: &[usize], c: usize) -> Vec<f64> {
    let members: Vec<&Vec<f64>> = rows
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == c)
        .map(|(r, _)| r)
        .collect();
    (0..rows[0].len())
        .map(|d| members.iter().map(|r| r[d]).sum::<f64>() / members.len() as f64)
        .collect()
}

fn naive_ch(rows: &[Vec<f64>], labels: &[usize], k: usize) -> f64 {
    let n = rows.len();
    let all: Vec<usize> = vec![0; n];
    let overall = centroid(rows, &all, 0);
    let (mut between, mut within) = (0.0, 0.0);
    for c in 0..k {
        let m = centroid(rows, labels, c);
        let size = labels.iter().filter(|&&l| l == c).count() as f64;
        between += size * dist(&m, &overall).powi(2);
        for (r, &l) in rows.iter().zip(labels) {
            if l == c {
                within += dist(r, &m).powi(2);
            }
        }
    }
    (between / (k - 1) as f64) / (within / (n - k) as f64)
}

fn naive_db(rows: &[Vec<f64>], labels: &[usize], k: usize) -> f64 {
    let cents: Vec<Vec<f64>> = (0..k).map(|c| centroid(rows, labels, c)).collect();
    let scatter: Vec<f64> = (0..k)
        .map(|c| {
            let d: Vec<f64> = rows
                .iter()
                .zip(labels)
                .filter(|(_, &l)| l == c)
                .map(|(r, _)| dist(r, &cents[c]))
                .collect();
            d.iter().sum::<f64>() / d.len() as f64
        })
        .collect();
    (0..k)
        .map(|i| {
            (0..k)
                .filter(|&j| j != i)
                .map(|j| (scatter[i] + scatter[j]) / dist(&cents[i], &cents[j]))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .sum::<f64>()
        / k as f64
}

#[test]
fn quality_indices_match_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for case in 0..30 {
        let n = rng.gen_range(4..=12);
        let k = 2 + case % 3;
        if k >= n {
            continue;
        }
        let dim = rng.gen_range(1..=4);
        let rows = random_rows(&mut rng, n, dim);
        // Every cluster non-empty: the first k rows seed the labels.
        let labels: Vec<usize> = (0..n).map(|i| if i < k { i } else { rng.gen_range(0..k) }).collect();
        let s = silhouette_score(&rows, &labels).unwrap();
        let ch = calinski_harabasz(&rows, &labels).unwrap();
        let db = davies_bouldin(&rows, &labels).unwrap();
        assert!((s - naive_silhouette(&rows, &labels)).abs() < 1e-9, "case {case}");
        assert!(
            (ch - naive_ch(&rows, &labels, k)).abs() < 1e-9 * ch.max(1.0),
            "case {case}"
        );
        assert!((db - naive_db(&rows, &labels, k)).abs() < 1e-9, "case {case}");
    }
}

#[test]
fn metrics_match_naive_formulas() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let n = rng.gen_range(1..300);
        let obs: Vec<f64> = (0..n).map(|_| rng.gen_range(-30.0..40.0)).collect();
        let pred: Vec<f64> = obs.iter().map(|o| o + rng.gen_range(-3.0..3.0)).collect();
        let r = compute_metrics(&obs, &pred).unwrap();
        let nf = n as f64;
        let mean = obs.iter().sum::<f64>() / nf;
        let mut sse = 0.0;
        let mut sst = 0.0;
        let mut sae = 0.0;
        let mut ape = 0.0;
        for i in 0..n {
            sse += (obs[i] - pred[i]).powi(2);
            sst += (obs[i] - mean).powi(2);
            sae += (obs[i] - pred[i]).abs();
            ape += ((obs[i] - pred[i]) / obs[i]).abs();
        }
        let r2 = if sst > 0.0 {
            1.0 - sse / sst
        } else if sse == 0.0 {
            1.0
        } else {
            0.0
        };
        assert!((r.mse - sse / nf).abs() < 1e-12);
        assert!((r.rmse - (sse / nf).sqrt()).abs() < 1e-12);
        assert!((r.mae - sae / nf).abs() < 1e-12);
        assert!((r.r2 - r2).abs() < 1e-12);
        assert!((r.mape.unwrap() - 100.0 * ape / nf).abs() < 1e-9 * (100.0 * ape / nf).max(1.0));
        assert!((r.rmse * r.rmse - r.mse).abs() < 1e-12 * r.mse.max(1.0));
        assert!(r.rmse >= r.mae);
    }
}

#[test]
fn constant_mean_predictor_scores_zero() {
    let obs = [1.0, 2.0, 4.0, 9.0];
    let mean = obs.iter().sum::<f64>() / 4.0;
    assert_eq!(compute_metrics(&obs, &[mean; 4]).unwrap().r2, 0.0);
}

fn direct_dft(x: &[f64]) -> Vec<(f64, f64)> {
    let w = x.len();
    let mean = x.iter().sum::<f64>() / w as f64;
    (0..w)
        .map(|k| {
            let mut re = 0.0;
            let mut im = 0.0;
            for (t, v) in x.iter().enumerate() {
                let angle = -2.0 * std::f64::consts::PI * (k * t % w) as f64 / w as f64;
                re += (v - mean) * angle.cos();
                im += (v - mean) * angle.sin();
            }
            (re, im)
        })
        .collect()
}

#[test]
fn spectrum_matches_direct_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for case in 0..50 {
        let w = 288;
        let x: Vec<f64> = (0..w)
            .map(|t| {
                let h = t as f64 / w as f64;
                20.0 + 3.0 * (2.0 * std::f64::consts::PI * h + case as f64).sin() + rng.gen_range(-1.0..1.0)
            })
            .collect();
        let fast = mean_removed_dft(&x);
        let slow = direct_dft(&x);
        for (f, (re, im)) in fast.iter().zip(&slow) {
            assert!((f.re - re).abs() < 1e-9 && (f.im - im).abs() < 1e-9, "case {case}");
        }
        let mean = x.iter().sum::<f64>() / w as f64;
        let energy: f64 = x.iter().map(|v| (v - mean).powi(2)).sum();
        let spectral: f64 = slow.iter().map(|(re, im)| re * re + im * im).sum::<f64>() / w as f64;
        assert!((energy - spectral).abs() < 1e-9 * energy.max(1.0));

        let s = extract_spectral(&x, 3).unwrap();
        for (h, harmonic) in s.harmonics.iter().enumerate() {
            let (re, im) = slow[h + 1];
            assert!((harmonic.real - re).abs() < 1e-9 && (harmonic.imag - im).abs() < 1e-9);
            assert!((harmonic.phase - im.atan2(re)).abs() < 1e-9);
        }
        let largest = slow[1..=w / 2].iter().map(|(re, im)| re.hypot(*im)).fold(0.0, f64::max);
        assert!((s.amplitude - 2.0 * largest / w as f64).abs() < 1e-9);
        let (d, _) = (2..=3)
            .map(|h| (h, slow[h].0.hypot(slow[h].1)))
            .fold((0, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        let expected = wrap_phase(slow[d].1.atan2(slow[d].0) - d as f64 * slow[1].1.atan2(slow[1].0));
        assert!((s.phase_offset - expected).abs() < 1e-9);
    }
}

#[test]
fn statistics_by_hand() {
    let s = extract_statistical(&[3.0, 1.0, 4.0, 1.0, 5.0, 9.0]).unwrap();
    assert_eq!((s.max, s.min, s.median), (9.0, 1.0, 3.5));
    let mean = 23.0 / 6.0;
    let var = [3.0, 1.0, 4.0, 1.0, 5.0, 9.0f64]
        .iter()
        .map(|v| (v - mean).powi(2))
        .sum::<f64>()
        / 6.0;
    assert!((s.mean - mean).abs() < 1e-12 && (s.variance - var).abs() < 1e-12 && (s.std - var.sqrt()).abs() < 1e-12);
    let flat = extract_spectral(&[5.0; 288], 3).unwrap();
    assert_eq!(flat.amplitude, 0.0);
    assert!(flat
        .harmonics
        .iter()
        .all(|h| h.real == 0.0 && h.imag == 0.0 && h.phase == 0.0));
}

fn day(date: NaiveDate, f: impl Fn(usize) -> (f64, f64, f64)) -> DayWindow {
    let start = date.and_hms_opt(0, 0, 0).unwrap();
    DayWindow {
        date,
        records: (0..288)
            .map(|i| {
                let (a, b, c) = f(i);
                SensorRecord {
                    timestamp: start + Duration::minutes(5 * i as i64),
                    indoor_temp: a,
                    outdoor_temp: b,
                    hvac_power: c,
                }
            })
            .collect(),
    }
}

fn date(n: i64) -> NaiveDate {
    NaiveDate::from_ymd_opt(2023, 3, 1).unwrap() + Duration::days(n)
}

#[test]
fn refit_matches_least_squares() {
    // Tin[t] = 0.9 Tin[t-1] + 2 from a cold start, relaxing toward 20.
    let mut tin = 100.0;
    let values: Vec<f64> = (0..576)
        .map(|_| {
            let v = tin;
            tin = 0.9 * tin + 2.0;
            v
        })
        .collect();
    let windows: Vec<DayWindow> = (0..2)
        .map(|d| day(date(d), |i| (values[d as usize * 288 + i], 0.0, 0.0)))
        .collect();
    let data = build_training_set(&windows, 1).unwrap();
    let expr = parse_expression("(+ (* 0.5 Tin[t-1]) 0.3)").unwrap();

    let x: Vec<f64> = (0..data.len())
        .map(|r| {
            use scenario_core::sr::LagSource;
            data.cursor(r).lagged(LagRef::indoor(1)).unwrap()
        })
        .collect();
    let y = data.targets();
    let n = x.len() as f64;
    let (sx, sy) = (x.iter().sum::<f64>(), y.iter().sum::<f64>());
    let sxx: f64 = x.iter().map(|v| v * v).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let a = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    let b = (sy - a * sx) / n;

    let fitted = refit_constants(&expr, &data);
    let c = fitted.constants();
    assert!(
        (c[0] - a).abs() < 1e-6 && (c[1] - b).abs() < 1e-6,
        "{c:?} vs ({a}, {b})"
    );
    assert!((c[0] - 0.9).abs() < 1e-6 && (c[1] - 2.0).abs() < 1e-6, "{c:?}");
    assert!(data.mse(&fitted) <= data.mse(&expr));
}

fn library(expr: &str, lag_budget: usize, windows: &[DayWindow]) -> ScenarioLibrary {
    let features = build_feature_matrix(windows, &SpectralConfig::default()).unwrap();
    let (z, normalization) = normalize_features(&features.values()).unwrap();
    let cluster: ClusterModel = kmeans_fit(&z, 1, 0, &KMeansConfig::default()).unwrap();
    ScenarioLibrary {
        mode: Mode::Cooling,
        interval_minutes: 5,
        lag_budget,
        spectral: SpectralConfig::default(),
        feature_names: features.names,
        normalization,
        cluster,
        cluster_dates: windows.iter().map(|w| w.date).collect(),
        quality: None,
        silhouette_curve: Vec::new(),
        models: vec![ScenarioModel {
            cluster_id: 0,
            expression: parse_expression(expr).unwrap(),
            training_mse: 0.0,
            trained_on: Vec::new(),
            untrainable: false,
        }],
    }
}

#[test]
fn rollout_equals_one_step_when_lags_exceed_a_day() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let windows: Vec<DayWindow> = (0..4)
        .map(|d| {
            let noise: Vec<f64> = (0..288 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            day(date(d), move |i| {
                (22.0 + noise[i], 30.0 + noise[288 + i], 1000.0 * noise[576 + i].abs())
            })
        })
        .collect();
    let expr = "(+ (* 0.6 Tin[t-288]) (+ (* 0.3 Tin[t-400]) (* 0.1 (- Tout[t-2] (* 0.001 P[t-1])))))";
    let lib = library(expr, 576, &windows);
    let model = parse_expression(expr).unwrap();

    let history = &windows[..3];
    let target = &windows[3];
    let rolled = forecast_one_day(&lib, history, &ExogenousDay::from_window(target)).unwrap();
    let stepped = one_step_day(&lib, history, target).unwrap();

    let all: Vec<&SensorRecord> = windows.iter().flat_map(|w| &w.records).collect();
    for (step, (r, s)) in rolled.entries.iter().zip(&stepped.entries).enumerate() {
        let t = 3 * 288 + step;
        let by_hand = 0.6 * all[t - 288].indoor_temp
            + (0.3 * all[t - 400].indoor_temp + 0.1 * (all[t - 2].outdoor_temp - 0.001 * all[t - 1].hvac_power));
        let env = snapshot(&[
            (LagRef::indoor(288), all[t - 288].indoor_temp),
            (LagRef::indoor(400), all[t - 400].indoor_temp),
            (LagRef::outdoor(2), all[t - 2].outdoor_temp),
            (LagRef::power(1), all[t - 1].hvac_power),
        ]);
        assert_eq!(r.predicted, model.evaluate(&env).unwrap());
        assert_eq!(r.predicted, s.predicted);
        assert!((r.predicted - by_hand).abs() < 1e-12);
    }
}

#[test]
fn cooling_reference_rollout_stays_flat() {
    let windows: Vec<DayWindow> = (0..4)
        .map(|d| day(date(d), |i| (23.49, 31.0 + (i % 7) as f64, 0.0)))
        .collect();
    let lib = library(REFERENCE_COOLING_MODEL, 288, &windows);
    let f = forecast_one_day(&lib, &windows[1..3], &ExogenousDay::from_window(&windows[3])).unwrap();
    assert_eq!(f.entries.len(), 288);
    assert!(f
        .entries
        .iter()
        .all(|e| e.predicted == 23.49 && e.abs_error == Some(0.0)));
}

#[test]
fn online_refit_tracks_injected_bias() {
    let windows: Vec<DayWindow> = (0..3)
        .map(|d| {
            day(date(d), move |i| {
                (22.0 + ((d as usize * 288 + i) as f64 * 0.05).sin(), 30.0, 0.0)
            })
        })
        .collect();
    let lib = library("(+ Tin[t-3] 0)", 288, &windows);
    let base = scenario_core::scenario::refit_online(&lib, 0, &windows).unwrap();
    let c0 = base.models[0].expression.constants()[0];

    // Targets shifted by +0.5 relative to their own lag-3 history.
    let mut biased = windows.clone();
    let flat: Vec<f64> = windows.iter().flat_map(|w| w.channel(Channel::IndoorTemp)).collect();
    let mut shifted = flat.clone();
    for t in 3..shifted.len() {
        shifted[t] = shifted[t - 3] + (flat[t] - flat[t - 3]) + 0.5;
    }
    for (t, r) in biased.iter_mut().flat_map(|w| w.records.iter_mut()).enumerate() {
        r.indoor_temp = shifted[t];
    }
    let moved = scenario_core::scenario::refit_online(&lib, 0, &biased).unwrap();
    let c1 = moved.models[0].expression.constants()[0];
    assert!(((c1 - c0) - 0.5).abs() < 1e-3, "{c0} -> {c1}");
    assert_eq!(lib.models[0].expression.constants()[0], 0.0);
}

#[test]
fn small_library_trains_and_evaluates() {
    let data = generate(&SynthConfig {
        days: 12,
        profiles: 2,
        ..SynthConfig::default()
    })
    .unwrap();
    let config = LibraryConfig {
        k_max: 4,
        gp: GpConfig {
            population: 60,
            generations: 5,
            ..GpConfig::default()
        },
        ..LibraryConfig::default()
    };
    let (lib, report) = train_library(&data.windows[..9], Mode::Cooling, &config).unwrap();
    assert_eq!(lib.k(), 2);
    assert_eq!(report.clusters.len(), 2);
    assert!(lib.models.iter().all(|m| !m.untrainable && m.training_mse.is_finite()));
    let again = train_library(&data.windows[..9], Mode::Cooling, &config).unwrap().0;
    assert_eq!(again, lib);

    let test_dates: Vec<NaiveDate> = data.windows[9..].iter().map(|w| w.date).collect();
    let eval = evaluate_on_test(&lib, &data.windows, &test_dates).unwrap();
    assert_eq!(eval.days.len(), 3);
    assert!(eval.one_step.rmse <= eval.rollout.rmse + 1e-9);
    assert!(eval.one_step.r2 > 0.5, "{:?}", eval.one_step);
}
