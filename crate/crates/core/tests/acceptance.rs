//! End-to-end acceptance checks. Every test prints one PASS/FAIL line.

use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use bsskit::consistency::{inconsistency_energy, project_consistent};
use bsskit::eval::{evaluate, symmetric_uncertainty, Db};
use bsskit::experiment::{self, ExperimentConfig};
use bsskit::linalg::{self, CMatrix};
use bsskit::mixture::{make_scene, write_scene, Scene, SceneManifest, SceneSpec, SourceKind};
use bsskit::nmf::{is_divergence, NmfModel};
use bsskit::separation::{
    self, ip_direction, ip_update, weighted_covariance, DemixingStack, Method, SeparationConfig, SeparationState,
};
use bsskit::stft::{window_len_from_ms, Spectrogram, StftEngine, WindowKind};
use bsskit::Complex;

type C = Complex<f64>;

const RATE: u32 = 8000;

fn verdict(n: usize, title: &str, passed: bool, detail: String) {
    println!("criterion {n:>2} [{}] {title}: {detail}", if passed { "PASS" } else { "FAIL" });
    assert!(passed, "criterion {n} failed: {detail}");
}

fn scene(seed: u64, seconds: usize) -> Scene {
    let spec = SceneSpec::near_anechoic(SourceKind::SpeechLike, seconds * RATE as usize, RATE);
    make_scene(&spec, seed).unwrap()
}

fn engine_ms(kind: WindowKind, ms: f64, div: usize) -> StftEngine<f64> {
    let q = window_len_from_ms(ms, RATE);
    StftEngine::new(kind, q, q / div).unwrap()
}

fn config(method: Method, iterations: usize, seed: u64) -> SeparationConfig {
    SeparationConfig {
        method,
        iterations,
        n_bases: 2,
        seed,
        ref_channel: 0,
        sample_rate: RATE,
        track_inconsistency: true,
    }
}

#[test]
fn c01_perfect_reconstruction_grid() {
    let started = Instant::now();
    let rate = 16000;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for kind in WindowKind::TABLE {
        for ms in experiment::GRID_WINDOW_LENGTHS_MS {
            let q = window_len_from_ms(ms, rate);
            for div in experiment::GRID_SHIFT_DIVISORS {
                let engine = StftEngine::<f64>::new(kind, q, q / div).unwrap();
                let x: Vec<f64> = (0..3 * rate as usize).map(|_| rng.sample(StandardNormal)).collect();
                let back = engine.inverse(&engine.forward(&x), x.len()).unwrap();
                let num: f64 = x.iter().zip(&back).map(|(a, b)| (a - b).powi(2)).sum();
                let den: f64 = x.iter().map(|a| a * a).sum();
                worst = worst.max((num / den).sqrt());
                count += 1;
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    verdict(
        1,
        "perfect reconstruction",
        count == 72 && worst < 1e-10 && secs < 30.0,
        format!("{count} configurations, worst relative error {worst:.2e}, {secs:.1} s"),
    );
}

#[test]
fn c02_consistency_projection() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_idem: f64 = 0.0;
    let mut worst_consistent: f64 = 0.0;
    let mut min_random = f64::INFINITY;
    for k in 0..100 {
        let kind = WindowKind::TABLE[k % 3];
        let q = [32, 64, 128, 256][k % 4];
        let div = [2, 4, 8, 16][(k / 4) % 4];
        let engine = StftEngine::<f64>::new(kind, q, q / div).unwrap();
        let len = rng.random_range(q..8 * q);

        let x: Vec<f64> = (0..len).map(|_| rng.sample(StandardNormal)).collect();
        let consistent = engine.forward(&x);
        worst_consistent = worst_consistent.max(inconsistency_energy(&engine, &consistent).unwrap() / consistent.energy());

        let g = engine.geometry(len);
        let data = Array2::from_shape_fn((g.bins(), g.frames), |_| {
            C::new(rng.sample(StandardNormal), rng.sample(StandardNormal))
        });
        let y = Spectrogram::from_array(data, g).unwrap();
        let once = project_consistent(&engine, &y).unwrap();
        let twice = project_consistent(&engine, &once).unwrap();
        worst_idem = worst_idem.max(((&once - &twice).energy() / once.energy()).sqrt());
        min_random = min_random.min(inconsistency_energy(&engine, &y).unwrap() / y.energy());
    }
    verdict(
        2,
        "consistency projection",
        worst_idem < 1e-10 && worst_consistent < 1e-20 && min_random > 0.0,
        format!(
            "100 spectrograms, idempotence error {worst_idem:.2e}, STFT-output inconsistency {worst_consistent:.2e}, random inconsistency >= {min_random:.2e}"
        ),
    );
}

#[test]
fn c03_monotone_likelihood() {
    let engine = engine_ms(WindowKind::Hann, 64.0, 4);
    let mut worst_rise: f64 = f64::NEG_INFINITY;
    let mut bp_decreased = 0;
    for seed in 0..20 {
        let x = engine.forward_all(&scene(100 + seed, 2).mixture);
        let out = separation::run(x.clone(), &engine, &config(Method::Ilrma, 100, seed)).unwrap();
        assert!(out.report.error.is_none());
        for w in out.report.nll.windows(2) {
            worst_rise = worst_rise.max((w[1] - w[0]) / w[0].abs());
        }
        let bp = separation::run(x, &engine, &config(Method::ConsistentIlrmaBp, 100, seed)).unwrap();
        if bp.report.nll[100] < bp.report.nll[0] {
            bp_decreased += 1;
        }
    }
    verdict(
        3,
        "monotone likelihood",
        worst_rise <= 1e-9 && bp_decreased == 20,
        format!("20 scenes, largest relative NLL step {worst_rise:.2e}; consistent-ilrma-bp final < initial in {bp_decreased}/20"),
    );
}

#[test]
fn c04_likelihood_preserving_rescale() {
    let engine = engine_ms(WindowKind::Hann, 32.0, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for k in 0..100 {
        let x = engine.forward_all(&scene(400 + k, 1).mixture);
        let method = if k % 2 == 0 { Method::ConsistentIlrmaBp } else { Method::Ilrma };
        let mut state = SeparationState::new(method, x, 2, k).unwrap();
        let mats = (0..state.demixing.bins())
            .map(|_| {
                let mut m = CMatrix::from_rows(&[
                    vec![C::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)); 2],
                    vec![C::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)); 2],
                ]);
                m[(0, 1)] = C::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                m.add_identity(1.5);
                m
            })
            .collect();
        state.demixing = DemixingStack::from_matrices(mats).unwrap();
        state.resynchronize().unwrap();
        for _ in 0..(k % 3) {
            state.update_source_models();
        }
        let before = state.negative_log_likelihood();
        let (coeffs, _) = state.back_project(0).unwrap();
        state.rescale(&coeffs).unwrap();
        let after = state.negative_log_likelihood();
        worst = worst.max((after - before).abs() / before.abs());
    }
    verdict(
        4,
        "likelihood-preserving rescale",
        worst < 1e-9,
        format!("100 states, largest relative NLL change {worst:.2e}"),
    );
}

#[test]
fn c05_inconsistency_ordering() {
    let engine = engine_ms(WindowKind::Hann, 512.0, 4);
    let mut wins = 0;
    let mut pairs = Vec::new();
    for seed in 0..10 {
        let x = engine.forward_all(&scene(500 + seed, 3).mixture);
        let last = |m| {
            let out = separation::run(x.clone(), &engine, &config(m, 100, seed)).unwrap();
            *out.report.inconsistency.last().unwrap()
        };
        let (ilrma, bp) = (last(Method::Ilrma), last(Method::ConsistentIlrmaBp));
        if bp < ilrma {
            wins += 1;
        }
        pairs.push(format!("{bp:.1e}<{ilrma:.1e}"));
    }
    verdict(
        5,
        "inconsistency ordering",
        wins >= 9,
        format!("consistent-ilrma-bp below ilrma in {wins}/10 scenes ({})", pairs.join(" ")),
    );
}

#[test]
fn c06_separation_quality() {
    let rate = 16000;
    let q = window_len_from_ms(128.0, rate);
    let engine = StftEngine::<f64>::new(WindowKind::Hann, q, q / 4).unwrap();
    let spec = SceneSpec::near_anechoic(SourceKind::SpeechLike, 5 * rate as usize, rate);
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    for seed in 0..10 {
        let sc = make_scene(&spec, 600 + seed).unwrap();
        for m in Method::ALL {
            let mut cfg = config(m, 100, seed);
            cfg.sample_rate = rate;
            let (est, out) = separation::separate_signal(&sc.mixture, &engine, &cfg).unwrap();
            assert!(out.report.error.is_none());
            let scores = evaluate(est.channels(), sc.images.channels(), sc.mixture.channel(0), 512).unwrap();
            let low = scores.delta_sdr.iter().map(|d| d.as_f64()).fold(f64::INFINITY, f64::min);
            let w = worst.entry(m.name()).or_insert(f64::INFINITY);
            *w = w.min(low);
        }
    }
    let all_ok = worst.values().all(|&v| v >= 10.0);

    // Exact inverse of an instantaneous mixture through STFT, demixing,
    // back projection, inverse STFT and scoring.
    let mut spec = spec.clone();
    spec.ir_taps = 1;
    spec.max_delay = 0;
    let sc = make_scene(&spec, 7).unwrap();
    let a = CMatrix::from_real(&[&[sc.irs[0][0][0], sc.irs[0][1][0]], &[sc.irs[1][0][0], sc.irs[1][1][0]]]);
    let inv = linalg::inverse(&a).unwrap();
    let mut state = SeparationState::new(Method::Ilrma, engine.forward_all(&sc.mixture), 2, 0).unwrap();
    state.demixing = DemixingStack::from_matrices(vec![inv; state.demixing.bins()]).unwrap();
    state.resynchronize().unwrap();
    let (_, images) = state.back_project(0).unwrap();
    let est = engine.inverse_all(&images, sc.mixture.len(), rate).unwrap();
    let exact = evaluate(est.channels(), sc.images.channels(), sc.mixture.channel(0), 512).unwrap();
    let infinite = exact.sdr.iter().all(|d| *d == Db::Infinite);

    let summary: Vec<String> = worst.iter().map(|(m, v)| format!("{m} {v:.1}")).collect();
    verdict(
        6,
        "desk-scale separation quality",
        all_ok && infinite,
        format!(
            "minimum per-source delta SDR over 10 scenes: {}; exact inverse SDR {:?}",
            summary.join(", "),
            exact.sdr
        ),
    );
}

#[test]
fn c07_nmf_updates() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst_rise: f64 = f64::NEG_INFINITY;
    let mut worst_fixed: f64 = 0.0;
    for _ in 0..100 {
        let (i, j, k) = (rng.random_range(1..=16), rng.random_range(1..=16), rng.random_range(1..=16));
        let mut model = NmfModel::<f64>::random(i, j, k, 1e-12, &mut rng).unwrap();
        let power = Array2::from_shape_fn((i, j), |_| rng.random_range(1e-3..5.0));
        let d0 = is_divergence(power.view(), model.variance().values().view());
        model.update_basis(power.view());
        let d1 = is_divergence(power.view(), model.variance().values().view());
        model.update_activation(power.view());
        let d2 = is_divergence(power.view(), model.variance().values().view());
        let scale = d0.abs().max(1e-12);
        worst_rise = worst_rise.max((d1 - d0) / scale).max((d2 - d1) / scale);

        let fixed = model.variance().values().clone();
        let before = model.clone();
        model.update(fixed.view());
        for (a, b) in model.basis().iter().zip(before.basis()).chain(model.activation().iter().zip(before.activation())) {
            worst_fixed = worst_fixed.max((a - b).abs() / b);
        }
    }
    verdict(
        7,
        "NMF updates",
        worst_rise <= 1e-12 && worst_fixed <= 1e-10,
        format!("100 instances, largest relative divergence step {worst_rise:.2e}, fixed-point drift {worst_fixed:.2e}"),
    );
}

#[test]
fn c08_ip_update_contract() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst_norm: f64 = 0.0;
    let mut worst_dir: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(2..=4);
        let frames: Vec<Vec<C>> = (0..4 * n)
            .map(|_| (0..n).map(|_| C::new(rng.sample(StandardNormal), rng.sample(StandardNormal))).collect())
            .collect();
        let r = Array1::from_shape_fn(4 * n, |_| rng.random_range(0.1..3.0));
        let u = weighted_covariance(&frames, r.view());
        let rows: Vec<Vec<C>> = (0..n)
            .map(|a| (0..n).map(|b| C::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)) + if a == b { 1.0 } else { 0.0 }).collect())
            .collect();
        let w = CMatrix::from_rows(&rows);
        let target = rng.random_range(0..n);
        let dir = ip_direction(&w, &u, target).unwrap();
        let residual = (&w * &u).mul_vec(&dir);
        for (k, z) in residual.iter().enumerate() {
            let expect = if k == target { 1.0 } else { 0.0 };
            worst_dir = worst_dir.max((z - C::new(expect, 0.0)).norm());
        }
        let v = ip_update(&w, &u, target).unwrap();
        worst_norm = worst_norm.max((linalg::quad_form(&v, &u).unwrap() - 1.0).abs());
    }
    verdict(
        8,
        "IP update contract",
        worst_norm < 1e-10 && worst_dir < 1e-10,
        format!("100 instances, |w^H U w - 1| <= {worst_norm:.2e}, |(WU)w - e_n| <= {worst_dir:.2e}"),
    );
}

#[test]
fn c09_symmetric_uncertainty() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = 1_000_000;
    let q1: Vec<f64> = (0..n).map(|_| rng.random()).collect();
    let q2: Vec<f64> = (0..n).map(|_| rng.random()).collect();
    let independent = symmetric_uncertainty(&q1, &q2, 100).unwrap();
    let identical = symmetric_uncertainty(&q1, &q1, 100).unwrap();
    verdict(
        9,
        "symmetric uncertainty",
        independent < 0.02 && identical > 0.999,
        format!("independent {independent:.5}, identical {identical:.6}"),
    );
}

#[test]
fn c10_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let mut manifest = SceneManifest::default();
    for k in 0..2 {
        let sc = scene(1000 + k, 1);
        manifest.scenes.push(write_scene(&sc, &format!("scene{k}"), dir.path()).unwrap());
    }
    let manifest_path = dir.path().join("scenes.json");
    manifest.write(&manifest_path).unwrap();

    let run = |threads: usize, out: &str| {
        let config = ExperimentConfig {
            methods: vec![Method::Ilrma, Method::ConsistentIlrmaBp, Method::ConsistentIvaBp],
            windows: vec![WindowKind::Hann],
            window_lengths_ms: vec![64.0],
            shift_divisors: vec![4],
            bases: BTreeMap::new(),
            default_bases: 2,
            iterations: 10,
            seeds: vec![1, 2],
            scenes: manifest_path.clone(),
            output_dir: dir.path().join(out),
            filter_len: 128,
            ref_channel: 0,
        };
        let result = experiment::run_experiment(&config, Some(threads)).unwrap();
        let reports: Vec<String> = result.reports.iter().map(|r| r.to_json().unwrap()).collect();
        let summary = std::fs::read(config.output_dir.join("summary.csv")).unwrap();
        (reports, summary)
    };
    let first = run(1, "a");
    let second = run(1, "b");
    let parallel = run(8, "c");
    let same_runs = first == second;
    let same_threads = first == parallel;
    verdict(
        10,
        "determinism",
        same_runs && same_threads,
        format!(
            "{} reports; repeat identical: {same_runs}; 1 vs 8 threads identical: {same_threads}",
            first.0.len()
        ),
    );
}
