//! Acceptance suite: one test per release criterion, each printing a
//! `[PASS]` line (run with `--nocapture` to see them).
//!
//! The expensive criteria (5, 6, 7) share one training run over the default
//! configuration, built lazily by whichever of them runs first.

use std::sync::OnceLock;
use std::time::Instant;

use stn_core::autodiff::Tape;
use stn_core::encoder::{self, EncoderConfig, EncoderParams, Image, TapedEmbedding};
use stn_core::episodic::{
    build_global_loss, build_local_loss, evaluate, gen_synthetic, meta_train, read_tensor_map,
    report_from_accuracies, sample_episode, smoothed, write_tensor_map, DatasetBundle, EvalOptions,
    GenSpec, RunConfig, TensorData, TensorMap, TrainOutput,
};
use stn_core::fusion::{classify, fuse_manual, FusionConfig};
use stn_core::metrics::{euclidean_sq, kl_gaussian, GaussianStats};
use stn_core::numerics::{cholesky, spd_solve, Matrix, Vector};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn random_spd(dim: usize, scale: f64, rng: &mut ChaCha8Rng) -> Matrix {
    let mut b = Matrix::zeros(dim, dim);
    for v in b.data_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    b.transpose()
        .matmul(&b)
        .scale(scale)
        .add(&Matrix::identity(dim).scale(0.5))
}

fn random_gaussian(dim: usize, mean_spread: f64, rng: &mut ChaCha8Rng) -> GaussianStats {
    GaussianStats {
        mu: Vector::from_vec(
            (0..dim)
                .map(|_| rng.random_range(-mean_spread..mean_spread))
                .collect(),
        ),
        sigma: random_spd(dim, 0.5, rng),
    }
}

/// Log-density of a Gaussian, through the same Cholesky kernels.
fn log_pdf(stats: &GaussianStats, factor: &Matrix, x: &[f64]) -> f64 {
    let c = stats.dim();
    let d: Vec<f64> = x.iter().zip(stats.mu.data()).map(|(a, b)| a - b).collect();
    let d_col = Matrix::from_vec(c, 1, d.clone());
    let y = stn_core::numerics::solve_with_factor(factor, &d_col);
    let mahal: f64 = d.iter().zip(y.data()).map(|(a, b)| a * b).sum();
    let logdet = stn_core::numerics::log_det_from_factor(factor);
    -0.5 * (c as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + mahal)
}

#[test]
fn criterion_1_kl_matches_monte_carlo() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let normal = rand_distr::StandardNormal;
    let draws = 1_000_000usize;
    for pair in 0..20 {
        let dim = pair % 3 + 1;
        let q = random_gaussian(dim, 1.0, &mut rng);
        let mut s = random_gaussian(dim, 1.0, &mut rng);
        // Keep the pair separated so the estimate's relative error is
        // dominated by the sampler, not by a near-zero divergence.
        s.mu = s.mu.add(&Vector::from_vec(vec![1.0; dim]));
        let closed = kl_gaussian(&q, &s).unwrap();
        let lq = cholesky(&q.sigma).unwrap();
        let ls = cholesky(&s.sigma).unwrap();
        let mut acc = 0.0;
        let mut x = vec![0.0f64; dim];
        for _ in 0..draws {
            for (i, xi) in x.iter_mut().enumerate() {
                *xi = q.mu[i];
            }
            for i in 0..dim {
                let z: f64 = rng.sample(normal);
                for (k, xk) in x.iter_mut().enumerate().skip(i) {
                    *xk += lq[(k, i)] * z;
                }
            }
            acc += log_pdf(&q, &lq, &x) - log_pdf(&s, &ls, &x);
        }
        let mc = acc / draws as f64;
        let rel = (closed - mc).abs() / mc.abs().max(1e-12);
        assert!(
            rel < 0.01,
            "pair {pair} (dim {dim}): closed {closed} vs mc {mc}, rel {rel}"
        );
    }
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 30.0, "monte carlo oracle took {elapsed:.1}s");
    println!("[PASS] criterion 1: KL matches 1e6-sample Monte Carlo within 1% on 20 pairs ({elapsed:.1}s)");
}

#[test]
fn criterion_2_kl_reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    for case in 0..100 {
        let dim = case % 6 + 1;
        // Equal covariances: KL reduces to half the Mahalanobis distance.
        let sigma = random_spd(dim, 1.0, &mut rng);
        let mu_q = Vector::from_vec((0..dim).map(|_| rng.random_range(-2.0..2.0)).collect());
        let mu_s = Vector::from_vec((0..dim).map(|_| rng.random_range(-2.0..2.0)).collect());
        let q = GaussianStats {
            mu: mu_q.clone(),
            sigma: sigma.clone(),
        };
        let s = GaussianStats {
            mu: mu_s.clone(),
            sigma: sigma.clone(),
        };
        let kl = kl_gaussian(&q, &s).unwrap();
        let d = mu_s.sub(&mu_q);
        let d_col = Matrix::from_vec(dim, 1, d.data().to_vec());
        let y = spd_solve(&sigma, &d_col).unwrap();
        let mahal: f64 = d.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        assert!(
            (kl - 0.5 * mahal).abs() < 1e-8,
            "case {case}: kl {kl} vs mahalanobis/2 {}",
            0.5 * mahal
        );

        // Identity covariances: KL reduces to half the squared mean shift.
        let qi = GaussianStats {
            mu: mu_q.clone(),
            sigma: Matrix::identity(dim),
        };
        let si = GaussianStats {
            mu: mu_s.clone(),
            sigma: Matrix::identity(dim),
        };
        let kl = kl_gaussian(&qi, &si).unwrap();
        let shift = euclidean_sq(&mu_q, &mu_s).unwrap();
        assert!(
            (kl - 0.5 * shift).abs() < 1e-8,
            "case {case}: kl {kl} vs shift/2 {}",
            0.5 * shift
        );
    }
    println!(
        "[PASS] criterion 2: Mahalanobis and mean-shift reductions hold within 1e-8 on 100 cases"
    );
}

#[test]
fn criterion_3_branch_loss_gradient_checks() {
    let start = Instant::now();
    let bundle = gen_synthetic(&GenSpec {
        classes: 12,
        per_class: 8,
        seed: 303,
    })
    .unwrap();
    let ds = &bundle.train;
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let episode = sample_episode(ds, 2, 1, 3, &mut rng).unwrap();
    let images: Vec<Image> = episode
        .support
        .iter()
        .chain(&episode.query)
        .map(|item| ds.image(item.image).clone())
        .collect();
    let labels: Vec<usize> = episode.query.iter().map(|q| q.class).collect();
    let config = EncoderConfig::default();
    let params = encoder::init_params(&config, 44).unwrap();
    let epsilon_scale = 1e-2;

    for branch in ["global", "local"] {
        let is_local = branch == "local";
        let loss = |tape: &mut Tape, embs: &[TapedEmbedding]| {
            let (s, q) = embs.split_at(2);
            if is_local {
                build_local_loss(tape, s, q, 2, &labels, epsilon_scale)
                    .map_err(encoder::EncoderError::from)
            } else {
                Ok(build_global_loss(tape, s, q, 2, &labels))
            }
        };
        let (_, grads) = encoder::grad(&params, &images, loss).unwrap();
        let eval = |p: &EncoderParams| {
            let mut tape = Tape::new();
            let nodes = encoder::stage_params(&mut tape, p);
            let embs: Vec<TapedEmbedding> = images
                .iter()
                .map(|img| encoder::forward(&mut tape, &nodes, &config, img).unwrap())
                .collect();
            let (s, q) = embs.split_at(2);
            let node = if is_local {
                build_local_loss(&mut tape, s, q, 2, &labels, epsilon_scale).unwrap()
            } else {
                build_global_loss(&mut tape, s, q, 2, &labels)
            };
            tape.scalar(node)
        };
        let mut coord_rng = ChaCha8Rng::seed_from_u64(55);
        let tensors = params.named_tensors();
        for sample in 0..50 {
            let t = coord_rng.random_range(0..tensors.len());
            let i = coord_rng.random_range(0..tensors[t].1.data().len());
            let h = 1e-5;
            let mut plus = params.clone();
            plus.named_tensors_mut()[t].1.data_mut()[i] += h;
            let mut minus = params.clone();
            minus.named_tensors_mut()[t].1.data_mut()[i] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let ad = grads.named_tensors()[t].1.data()[i];
            let denom = ad.abs().max(fd.abs()).max(1e-8);
            assert!(
                (ad - fd).abs() / denom < 1e-3,
                "{branch} sample {sample} (tensor {t}, coord {i}): ad {ad} vs fd {fd}"
            );
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 120.0, "gradient checks took {elapsed:.1}s");
    println!("[PASS] criterion 3: both branch-loss gradients match finite differences on 50 coordinates each ({elapsed:.1}s)");
}

#[test]
fn criterion_4_fusion_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let cfg = FusionConfig::default();
    for _ in 0..1000 {
        let n = rng.random_range(2..8);
        let dl: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..5.0)).collect();
        let dg: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..5.0)).collect();

        // Independent positive rescaling leaves the decision unchanged.
        let c1: f64 = rng.random_range(0.05..20.0);
        let c2: f64 = rng.random_range(0.05..20.0);
        let base = classify(&fuse_manual(&dl, &dg, &cfg).unwrap()).unwrap();
        let dls: Vec<f64> = dl.iter().map(|v| v * c1).collect();
        let dgs: Vec<f64> = dg.iter().map(|v| v * c2).collect();
        let scaled = classify(&fuse_manual(&dls, &dgs, &cfg).unwrap()).unwrap();
        assert_eq!(base, scaled);

        // Exact single-branch reductions at the endpoints.
        let argmin = |v: &[f64]| {
            let mut best = 0;
            for i in 1..v.len() {
                if v[i] < v[best] {
                    best = i;
                }
            }
            best
        };
        let at = |alpha: f64| FusionConfig {
            alpha,
            ..FusionConfig::default()
        };
        let only_global = classify(&fuse_manual(&dl, &dg, &at(0.0)).unwrap()).unwrap();
        assert_eq!(only_global, argmin(&dg));
        let only_local = classify(&fuse_manual(&dl, &dg, &at(1.0)).unwrap()).unwrap();
        assert_eq!(only_local, argmin(&dl));
    }
    println!("[PASS] criterion 4: scale invariance and endpoint reductions hold over 1000 fused decisions");
}

struct TrainedFixture {
    bundle: DatasetBundle,
    output: TrainOutput,
    run: RunConfig,
    train_seconds: f64,
}

static FIXTURE: OnceLock<TrainedFixture> = OnceLock::new();

fn fixture() -> &'static TrainedFixture {
    FIXTURE.get_or_init(|| {
        let bundle = gen_synthetic(&GenSpec::default()).expect("default synthetic dataset");
        let run = RunConfig::default();
        let start = Instant::now();
        let output = meta_train(&run, &bundle.train, &bundle.val).expect("meta-training");
        TrainedFixture {
            bundle,
            output,
            run,
            train_seconds: start.elapsed().as_secs_f64(),
        }
    })
}

fn eval_at_alpha(fx: &TrainedFixture, alpha: f64, tasks: usize, normalize: bool) -> f64 {
    let opts = EvalOptions {
        tasks,
        seed: 1000,
        fusion: FusionConfig {
            alpha,
            normalize,
            ..FusionConfig::default()
        },
        epsilon_scale: fx.run.epsilon_scale,
        ..EvalOptions::default()
    };
    evaluate(&fx.output.global, &fx.output.local, &fx.bundle.test, &opts)
        .expect("evaluation")
        .mean
}

#[test]
fn criterion_5_fusion_beats_both_single_branches() {
    let fx = fixture();
    let start = Instant::now();
    let fused = eval_at_alpha(fx, fx.run.fusion.alpha, 200, true);
    let global_only = eval_at_alpha(fx, 0.0, 200, true);
    let local_only = eval_at_alpha(fx, 1.0, 200, true);
    let total = fx.train_seconds + start.elapsed().as_secs_f64();
    assert!(
        fused >= global_only + 0.02,
        "fused {fused:.4} vs global-only {global_only:.4}"
    );
    assert!(
        fused >= local_only + 0.02,
        "fused {fused:.4} vs local-only {local_only:.4}"
    );
    assert!(total < 900.0, "train + eval took {total:.0}s");

    // Training health: both branch losses decrease on the smoothed curve.
    for (name, losses) in [
        ("global", fx.output.log.losses_global()),
        ("local", fx.output.log.losses_local()),
    ] {
        let sm = smoothed(&losses, 10);
        let first = sm[9];
        let mid = sm[sm.len() / 2];
        let last = *sm.last().unwrap();
        assert!(
            first > mid && mid > last,
            "{name} smoothed losses not decreasing: {first} -> {mid} -> {last}"
        );
    }
    println!(
        "[PASS] criterion 5: fused {fused:.4} beats global-only {global_only:.4} and local-only {local_only:.4} by >= 2pp; losses decrease; {total:.0}s total"
    );
}

#[test]
fn criterion_6_alpha_sweep_has_interior_maximum() {
    let fx = fixture();
    let mut results = Vec::new();
    for step in 1..=9 {
        let alpha = step as f64 * 0.1;
        results.push((alpha, eval_at_alpha(fx, alpha, 100, true)));
    }
    let best = results
        .iter()
        .enumerate()
        .max_by(|a, b| a.1 .1.partial_cmp(&b.1 .1).unwrap())
        .unwrap()
        .0;
    assert!(
        best != 0 && best != results.len() - 1,
        "sweep maximum at grid edge: {results:?}"
    );
    println!(
        "[PASS] criterion 6: alpha sweep peaks at interior point {:.1} (accuracy {:.4})",
        results[best].0, results[best].1
    );
}

#[test]
fn criterion_7_normalization_helps() {
    let fx = fixture();
    let with = eval_at_alpha(fx, fx.run.fusion.alpha, 200, true);
    let without = eval_at_alpha(fx, fx.run.fusion.alpha, 200, false);
    assert!(
        with > without,
        "normalized {with:.4} not above unnormalized {without:.4}"
    );
    println!("[PASS] criterion 7: normalization on {with:.4} > off {without:.4}");
}

#[test]
fn criterion_8_ci_formula_and_full_determinism() {
    // Closed-form two-point confidence interval.
    let report = report_from_accuracies(vec![0.6, 0.8]);
    assert!((report.mean - 0.7).abs() < 1e-12);
    assert!((report.ci95 - 0.196).abs() < 1e-3);

    // Identical seeds give byte-identical training and evaluation CSVs.
    let bundle = gen_synthetic(&GenSpec {
        classes: 20,
        per_class: 10,
        seed: 808,
    })
    .unwrap();
    let run = RunConfig {
        epochs: 2,
        episodes_per_epoch: 8,
        val_episodes: 4,
        encoder: EncoderConfig {
            embed_dim: 16,
            depth: 1,
            heads: 2,
            ..EncoderConfig::default()
        },
        seed: 99,
        ..RunConfig::default()
    };
    let opts = EvalOptions {
        tasks: 20,
        t_query: 4,
        seed: 7,
        ..EvalOptions::default()
    };
    let run_once = || {
        let out = meta_train(&run, &bundle.train, &bundle.val).unwrap();
        let report = evaluate(&out.global, &out.local, &bundle.test, &opts).unwrap();
        (out.log.to_csv(), report.to_csv(opts.n_way, opts.k_shot))
    };
    let (train_csv_a, eval_csv_a) = run_once();
    let (train_csv_b, eval_csv_b) = run_once();
    assert_eq!(train_csv_a.as_bytes(), train_csv_b.as_bytes());
    assert_eq!(eval_csv_a.as_bytes(), eval_csv_b.as_bytes());
    println!(
        "[PASS] criterion 8: CI closed form verified; train+eval CSVs byte-identical across runs"
    );
}

#[test]
fn criterion_9_format_robustness() {
    // Round-trips are bit-exact.
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let mut map = TensorMap::new();
    map.insert(
        "a".into(),
        TensorData::f64(vec![4, 3], (0..12).map(|_| rng.random()).collect()),
    );
    map.insert(
        "image".into(),
        TensorData::f32(vec![8, 8, 3], (0..192).map(|_| rng.random()).collect()),
    );
    let bytes = write_tensor_map(&map);
    assert_eq!(read_tensor_map(&bytes).unwrap(), map);

    let bundle = gen_synthetic(&GenSpec {
        classes: 10,
        per_class: 3,
        seed: 11,
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = stn_core::episodic::save_dataset(dir.path(), &bundle).unwrap();
    let back = stn_core::episodic::load_dataset(&manifest).unwrap();
    assert_eq!(bundle, back);

    // 500 truncations and 500 bitflips must all fail structurally, never
    // panic or succeed.
    for i in 0..500 {
        let len = rng.random_range(0..bytes.len());
        let r = read_tensor_map(&bytes[..len]);
        assert!(r.is_err(), "truncation {i} to {len} bytes accepted");
    }
    for i in 0..500 {
        let mut corrupted = bytes.clone();
        let byte = rng.random_range(0..corrupted.len());
        let bit = rng.random_range(0..8);
        corrupted[byte] ^= 1u8 << bit;
        let r = read_tensor_map(&corrupted);
        assert!(r.is_err(), "bitflip {i} at byte {byte} bit {bit} accepted");
    }
    println!("[PASS] criterion 9: formats round-trip bit-exactly; 1000 corruptions all rejected as structured errors");
}
