//! Frozen end-to-end checks, one test per guarantee the crate ships with.
//! Each test prints a single PASS line with its headline numbers so a full
//! run reads as a checklist; every tolerance and runtime budget is asserted,
//! not just reported.

use ndarray::Array2;
use ngplus::curvature::{build_subsampled, CurvatureState, Side};
use ngplus::direction::{
    block_diag_direction, dense_direction, sketch_gram, smw_direction, SketchConfig, SketchKind,
};
use ngplus::gradients::{batch_loss, FcLayer, PerSampleFactors};
use ngplus::harness::{
    gen_synthetic, run_task, AlgorithmKind, DampingKind, Dataset, LrKind, ModeKind, RunConfig,
    SyntheticSpec, Task,
};
use ngplus::linalg::{frobenius_norm, max_abs_diff};
use ngplus::online::{elliptical_potential_audit, run_regret, ExpConcaveStream};
use ngplus::optimizer::{NgPlusOptimizer, SgdMomentum};
use ngplus::Mat;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use std::time::{Duration, Instant};

fn random_mat(rng: &mut ChaCha20Rng, r: usize, c: usize) -> Mat {
    Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
}

fn random_factors(rng: &mut ChaCha20Rng, m: usize, n: usize, count: usize) -> Vec<PerSampleFactors> {
    (0..count)
        .map(|i| PerSampleFactors {
            g: random_mat(rng, m, 1),
            a: random_mat(rng, n, 1),
            sample_index: i,
        })
        .collect()
}

#[test]
fn c01_woodbury_fast_path_matches_the_dense_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha20Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for trial in 0..200 {
        let m = rng.gen_range(1..=64);
        let n = rng.gen_range(m..=128);
        let b = rng.gen_range(1..=32);
        let lambda = rng.gen_range(1e-3..=1.0);
        let factors = random_factors(&mut rng, m, n, b);
        let grad = random_mat(&mut rng, m, n);
        let gram = build_subsampled(&factors, Side::Left).unwrap();
        let state = CurvatureState::frozen(gram, Side::Left, lambda).unwrap();
        let dense = dense_direction(&grad, &state).unwrap();
        let fast = smw_direction(&grad, &factors, lambda).unwrap();
        let rel = frobenius_norm(&(&fast - &dense)) / frobenius_norm(&dense);
        worst = worst.max(rel);
        assert!(
            rel <= 1e-8,
            "trial {trial} (m={m} n={n} b={b} lambda={lambda:.4}): relative gap {rel:e}"
        );
    }
    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
    println!(
        "PASS c01: 200 Woodbury solves within 1e-8 of dense (worst {worst:.2e}) in {:.2}s",
        elapsed.as_secs_f64()
    );
}

#[test]
fn c02_block_solver_degenerates_to_dense_and_scalar_forms() {
    let start = Instant::now();
    let mut rng = ChaCha20Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    for trial in 0..50 {
        let m = rng.gen_range(2..=16);
        let n = rng.gen_range(2..=24);
        let lambda = rng.gen_range(1e-3..=1.0);
        let grad = random_mat(&mut rng, m, n);

        // One block is the plain dense solve over the gradient's own Gram,
        // and must agree bit for bit.
        let blocked = block_diag_direction(&grad, lambda, 1).unwrap();
        let state = CurvatureState::frozen(grad.dot(&grad.t()), Side::Left, lambda).unwrap();
        let dense = dense_direction(&grad, &state).unwrap();
        assert_eq!(
            max_abs_diff(&blocked, &dense),
            0.0,
            "trial {trial}: single-block path diverged from the dense solve"
        );

        // One row per block collapses to a scalar rescaling.
        let scalar = block_diag_direction(&grad, lambda, m).unwrap();
        for i in 0..m {
            let row_sq: f64 = grad.row(i).iter().map(|x| x * x).sum();
            for j in 0..n {
                let expected = -grad[[i, j]] / (lambda + row_sq);
                let err = (scalar[[i, j]] - expected).abs();
                worst = worst.max(err);
                assert!(err <= 1e-12, "trial {trial} entry ({i},{j}): off by {err:e}");
            }
        }
    }
    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(5), "took {elapsed:?}");
    println!(
        "PASS c02: 50 block instances, s=1 bit-identical, s=m scalar off by at most {worst:.2e}, in {:.2}s",
        elapsed.as_secs_f64()
    );
}

#[test]
fn c03_column_sketch_is_unbiased_and_concentrates() {
    let start = Instant::now();
    let mut rng = ChaCha20Rng::seed_from_u64(303);
    let grad = random_mat(&mut rng, 50, 50);
    let target = grad.dot(&grad.t());
    let target_norm = frobenius_norm(&target);

    let mut sum = Array2::<f64>::zeros((50, 50));
    let mut err_small = 0.0;
    for seed in 0..40_000u64 {
        let cfg = SketchConfig {
            q: 10,
            seed,
            kind: SketchKind::Iid,
        };
        sum = sum + sketch_gram(&grad, &cfg).unwrap();
        if seed + 1 == 10_000 {
            let mean = &sum / 10_000.0;
            err_small = frobenius_norm(&(&mean - &target)) / target_norm;
        }
    }
    let mean = &sum / 40_000.0;
    let err_large = frobenius_norm(&(&mean - &target)) / target_norm;

    assert!(
        err_small <= 0.02,
        "mean of 10^4 sketches off by {err_small:.4} relative Frobenius"
    );
    assert!(
        err_large <= 0.6 * err_small,
        "quadrupling the seeds shrank the error only from {err_small:.4} to {err_large:.4}"
    );
    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    println!(
        "PASS c03: sketch mean error {err_small:.4} at 10^4 seeds, {err_large:.4} at 4x10^4 (ratio {:.3}), in {:.2}s",
        err_large / err_small,
        elapsed.as_secs_f64()
    );
}

#[test]
fn c04_gradients_survive_the_finite_difference_audit() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::default();
    let outcome = run_task(Task::Gradcheck, &cfg, dir.path()).unwrap();
    assert!(
        outcome.passed,
        "gradient audit failed: {:?}",
        outcome.failures
    );
    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(30), "took {elapsed:?}");
    println!(
        "PASS c04: 10 random nets within 1e-5 of finite differences and 1e-10 of the dense gradient, in {:.2}s",
        elapsed.as_secs_f64()
    );
}

#[test]
fn c05_averaged_fisher_error_halves_when_samples_quadruple() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::default();
    let outcome = run_task(Task::GfimStudy, &cfg, dir.path()).unwrap();
    assert!(
        outcome.passed,
        "sampling study failed: {:?}",
        outcome.failures
    );
    assert!(
        dir.path().join("diff.csv").exists(),
        "difference matrix artifact missing"
    );
    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(300), "took {elapsed:?}");
    println!(
        "PASS c05: 200x200 study over 10 seeds, error at N=8000 at most 0.6x the error at N=2000, in {:.1}s",
        elapsed.as_secs_f64()
    );
}

fn convergence_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.dataset = ngplus::harness::DatasetKind::GaussianMixture;
    cfg.classes = 2;
    cfg.dims = 20;
    cfg.samples = 2500;
    cfg.batch_size = 32;
    cfg.lr = 0.5;
    cfg.lr_beta = 0.7;
    cfg.damping = 0.1;
    cfg.damping_schedule = DampingKind::Constant;
    cfg.freq = 10;
    cfg.iterations = 10_000;
    cfg.fit_at = 1_000;
    cfg.envelope_beta = 0.7;
    cfg
}

#[test]
fn c06_training_stays_inside_the_fitted_gradient_envelope() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let outcome = run_task(Task::Convergence, &convergence_config(), dir.path()).unwrap();
    assert!(
        outcome.passed,
        "convergence audit failed: {:?}",
        outcome.failures
    );
    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(120), "took {elapsed:?}");
    println!(
        "PASS c06: quadratic leg monotone and the 10^4-step running gradient mean sits inside the envelope fitted at 10^3, in {:.1}s",
        elapsed.as_secs_f64()
    );
}

#[test]
fn c07_online_regret_stays_under_the_logarithmic_bound() {
    let start = Instant::now();
    let mut worst_ratio = 0.0f64;
    for &n in &[1usize, 4] {
        for seed in 0..5u64 {
            let stream = ExpConcaveStream::random(4, n, 1.0, 10_000, seed).unwrap();
            let report = run_regret(&stream).unwrap();
            assert!(
                report.holds,
                "regret exceeded the bound for n={n} seed={seed}"
            );
            let burn = report.burn_in.expect("bound never rose above one");
            for t in burn - 1..10_000 {
                if report.bound[t] > 0.0 {
                    worst_ratio = worst_ratio.max(report.regret[t] / report.bound[t]);
                }
            }
        }
    }
    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(120), "took {elapsed:?}");
    println!(
        "PASS c07: regret under the log bound for n in {{1, 4}} over 5 seeds and 10^4 rounds (worst ratio {worst_ratio:.2}), in {:.2}s",
        elapsed.as_secs_f64()
    );
}

#[test]
fn c08_elliptical_potential_chain_holds_on_regret_histories() {
    let start = Instant::now();
    let mut worst_slack = f64::NEG_INFINITY;
    for &n in &[1usize, 4] {
        for seed in 0..5u64 {
            let stream = ExpConcaveStream::random(4, n, 1.0, 10_000, seed).unwrap();
            let report = run_regret(&stream).unwrap();
            // The learner seeds its Gram with eps = 2/(alpha D^2) = 2.
            let audit = elliptical_potential_audit(&report.grads, 2.0).unwrap();
            assert!(
                audit.lhs <= audit.rhs + 1e-8,
                "potential sum {} above the log-det ratio {} for n={n} seed={seed}",
                audit.lhs,
                audit.rhs
            );
            assert!(
                audit.rhs <= audit.cap + 1e-8,
                "log-det ratio {} above the worst-case cap {} for n={n} seed={seed}",
                audit.rhs,
                audit.cap
            );
            worst_slack = worst_slack.max(audit.lhs - audit.rhs).max(audit.rhs - audit.cap);
        }
    }
    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(120), "took {elapsed:?}");
    println!(
        "PASS c08: potential sum <= log-det ratio <= cap on all 10 histories (worst slack {worst_slack:.2e}), in {:.2}s",
        elapsed.as_secs_f64()
    );
}

/// The mixture task both trainers compete on: ill-conditioned inputs that
/// the input-side Gram whitens and plain gradient steps cannot.
fn contest_data(seed: u64) -> Dataset {
    gen_synthetic(
        &SyntheticSpec::GaussianMixture {
            classes: 3,
            dims: 10,
            samples: 3000,
            separation: 3.0,
            condition: 1000.0,
        },
        seed,
    )
    .unwrap()
}

fn contest_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = seed;
    cfg.hidden = vec![16];
    cfg.freq = 10;
    cfg.condition = 1000.0;
    cfg
}

fn tune_ngplus(cfg: &mut RunConfig) {
    cfg.algorithm = AlgorithmKind::NgPlus;
    cfg.lr = 0.3;
    cfg.lr_schedule = LrKind::Cosine;
    cfg.lr_floor = 0.01;
    cfg.damping = 0.01;
    cfg.damping_schedule = DampingKind::Constant;
    cfg.mode = ModeKind::Momentum;
    cfg.curvature_beta = 0.95;
}

/// Trains on the full dataset and returns the loss over all samples after
/// each epoch, replaying the same shuffle stream the task harness uses.
fn epoch_losses(cfg: &RunConfig, ds: &Dataset, epochs: usize) -> Vec<f64> {
    let all: Vec<usize> = (0..ds.len()).collect();
    let loss = ds.loss();
    let mut model: Vec<FcLayer> = cfg.build_model(ds.dim(), ds.out_dim()).unwrap();
    let ipe = all.len().div_ceil(cfg.batch_size);
    let full = ds.batch(&all);

    enum Driver {
        Ng(NgPlusOptimizer),
        Sgd(SgdMomentum),
    }
    let mut driver = match cfg.algorithm {
        AlgorithmKind::NgPlus => {
            Driver::Ng(NgPlusOptimizer::new(cfg.ngplus_config(), &model, ipe).unwrap())
        }
        _ => Driver::Sgd(
            SgdMomentum::new(cfg.lr_schedule(), cfg.momentum, cfg.weight_decay, &model, ipe)
                .unwrap(),
        ),
    };
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    rng.set_stream(4);
    let mut order = all.clone();
    let mut out = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = ds.batch(chunk);
            match &mut driver {
                Driver::Ng(o) => {
                    o.step(&mut model, &batch, loss).unwrap();
                }
                Driver::Sgd(o) => {
                    o.step(&mut model, &batch, loss).unwrap();
                }
            }
        }
        out.push(batch_loss(&model, &full, loss).unwrap());
    }
    out
}

#[test]
fn c09_preconditioned_training_dominates_tuned_sgd_epoch_for_epoch() {
    let start = Instant::now();
    // The baseline grid; 0.2 wins on final loss and is the tuned baseline,
    // but the dominance check is asserted against every member.
    let sgd_grid = [0.05, 0.1, 0.2, 0.4];
    let mut min_margin = f64::INFINITY;
    for seed in 0..3u64 {
        let ds = contest_data(seed);
        let mut ng_cfg = contest_config(seed);
        tune_ngplus(&mut ng_cfg);
        let ng = epoch_losses(&ng_cfg, &ds, 20);
        for &lr in &sgd_grid {
            let mut sgd_cfg = contest_config(seed);
            sgd_cfg.algorithm = AlgorithmKind::Sgd;
            sgd_cfg.lr = lr;
            let sgd = epoch_losses(&sgd_cfg, &ds, 20);
            for epoch in 1..20 {
                let margin = sgd[epoch] - ng[epoch];
                min_margin = min_margin.min(margin);
                assert!(
                    margin >= 0.0,
                    "seed {seed}, sgd lr {lr}, epoch {}: ng {} above sgd {}",
                    epoch + 1,
                    ng[epoch],
                    sgd[epoch]
                );
            }
        }
    }
    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(120), "took {elapsed:?}");
    println!(
        "PASS c09: trained loss at or under every tuned baseline from epoch 2 on, 3 seeds (min margin {min_margin:.4}), in {:.1}s",
        elapsed.as_secs_f64()
    );
}

fn metrics_bytes(task: Task, cfg: &RunConfig) -> Vec<u8> {
    let dir = tempfile::tempdir().unwrap();
    let outcome = run_task(task, cfg, dir.path()).unwrap();
    assert!(outcome.passed, "{:?} failed: {:?}", task, outcome.failures);
    std::fs::read(dir.path().join("metrics.csv")).unwrap()
}

#[test]
fn c10_tasks_rewrite_their_metrics_byte_for_byte() {
    let conv_cfg = convergence_config();
    let regret_cfg = RunConfig::default();
    let mut train_cfg = contest_config(0);
    tune_ngplus(&mut train_cfg);

    for (name, task, cfg) in [
        ("convergence", Task::Convergence, &conv_cfg),
        ("regret", Task::Regret, &regret_cfg),
        ("train", Task::Train, &train_cfg),
    ] {
        let first = metrics_bytes(task, cfg);
        let second = metrics_bytes(task, cfg);
        assert_eq!(first, second, "{name} metrics.csv changed between reruns");
        assert!(!first.is_empty(), "{name} wrote an empty metrics.csv");
    }
    println!("PASS c10: convergence, regret, and train reruns emit byte-identical metrics.csv");
}
