//! End-to-end acceptance checks: autodiff soundness, modulation identity,
//! desk-scale attribution quality, capacity and robustness trends, secrecy,
//! registry matching rates, the wavelet baseline, and determinism.
//!
//! Trained pipelines are shared across tests through lazy statics, so the
//! heavy runs happen once per test-binary invocation regardless of test
//! order or thread count.

use std::sync::OnceLock;

use wmfp_core::attacks::AttackKind;
use wmfp_core::codec::{modulate_weights, sample_fingerprint};
use wmfp_core::data::{generate, SyntheticSceneSpec};
use wmfp_core::dwt::{dwt_embed, dwt_extract};
use wmfp_core::eval::{
    apply_attack_image, attribution_accuracy, capacity_sweep, measure_accuracy, measure_quality,
    robustness_eval, secrecy_scenario2, EvalReport,
};
use wmfp_core::registry::{matching_monte_carlo, MatchResult, Registry};
use wmfp_core::tensor::gradcheck::standard_op_checks;
use wmfp_core::tensor::Tape;
use wmfp_core::train::{pretrain, psnr_between, train, Pipeline, TrainConfig};

// ---------------------------------------------------------------------------
// Shared configurations and lazily trained pipelines
// ---------------------------------------------------------------------------

/// Full-budget run used for the attribution and secrecy checks.
fn main_config(seed: u64) -> TrainConfig {
    TrainConfig {
        d_phi: 16,
        image_side: 32,
        batch_size: 16,
        iterations: 2000,
        pretrain_iterations: 800,
        learning_rate: 1e-3,
        lambda1: 0.0625,
        lambda2: 16.0,
        weight_decay: 0.05,
        log_interval: 500,
        seed,
        ..TrainConfig::default()
    }
}

/// Reduced, equal-budget run used for the capacity sweep and the
/// robust-vs-clean pair.
fn sweep_config(seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        ..main_config(seed)
    }
}

fn train_pipeline(cfg: &TrainConfig) -> Pipeline {
    let mut p = Pipeline::init(cfg);
    pretrain(&mut p, cfg).expect("pretraining failed");
    train(&mut p, cfg).expect("training failed");
    p
}

fn main_pipeline() -> &'static (TrainConfig, Pipeline) {
    static CELL: OnceLock<(TrainConfig, Pipeline)> = OnceLock::new();
    CELL.get_or_init(|| {
        let cfg = main_config(101);
        (cfg.clone(), train_pipeline(&cfg))
    })
}

fn attacker_pipeline() -> &'static (TrainConfig, Pipeline) {
    static CELL: OnceLock<(TrainConfig, Pipeline)> = OnceLock::new();
    CELL.get_or_init(|| {
        let cfg = main_config(202);
        (cfg.clone(), train_pipeline(&cfg))
    })
}

fn capacity_results() -> &'static (Vec<Pipeline>, EvalReport) {
    static CELL: OnceLock<(Vec<Pipeline>, EvalReport)> = OnceLock::new();
    CELL.get_or_init(|| {
        capacity_sweep(&[16, 32, 64], &sweep_config(303), 200).expect("capacity sweep failed")
    })
}

/// (clean, robust) pair at an identical budget; robust training draws the
/// combination transform (each component attack included with probability
/// one half) per batch item.
fn robust_pair() -> &'static (Pipeline, Pipeline) {
    static CELL: OnceLock<(Pipeline, Pipeline)> = OnceLock::new();
    CELL.get_or_init(|| {
        let clean_cfg = sweep_config(404);
        let robust_cfg = TrainConfig {
            robust: vec!["combination".into()],
            ..clean_cfg.clone()
        };
        (train_pipeline(&clean_cfg), train_pipeline(&robust_cfg))
    })
}

fn row_accuracy(report: &EvalReport, condition: &str) -> f64 {
    report
        .rows
        .iter()
        .find(|r| r.condition == condition)
        .unwrap_or_else(|| panic!("missing row {condition}"))
        .accuracy
}

// ---------------------------------------------------------------------------
// 1. Autodiff soundness
// ---------------------------------------------------------------------------

#[test]
fn gradients_match_finite_differences_on_every_op() {
    let t0 = std::time::Instant::now();
    let reports = standard_op_checks(1e-3, 1e-3).expect("gradient check suite failed");
    assert!(reports.len() >= 3 * 23, "only {} op/shape reports", reports.len());
    let mut worst = 0.0f64;
    for (name, rep) in &reports {
        assert!(rep.passed(), "{name}: max rel err {}", rep.max_rel_err());
        worst = worst.max(rep.max_rel_err());
    }
    let elapsed = t0.elapsed();
    assert!(elapsed.as_secs() < 60, "gradient checks took {elapsed:?}");
    println!(
        "[acceptance] autodiff soundness: {} checks, worst rel err {worst:.2e}, {elapsed:?} — PASS",
        reports.len()
    );
}

// ---------------------------------------------------------------------------
// 2. Modulation identity and elementwise arithmetic
// ---------------------------------------------------------------------------

#[test]
fn identity_style_makes_output_fingerprint_independent() {
    // Freshly initialized affine layers have zero weights and unit bias,
    // so every style vector is all-ones and modulation must be a no-op.
    let cfg = main_config(7);
    let p = Pipeline::init(&cfg);
    let scenes = SyntheticSceneSpec::new(9, cfg.image_side).unwrap();
    let x = generate(&scenes, 0);
    let base = p.generate(None, &x).unwrap();
    let mut max_diff = 0.0f32;
    for i in 0..50 {
        let phi = sample_fingerprint(cfg.d_phi, 1000 + i).unwrap();
        let out = p.generate(Some(&phi), &x).unwrap();
        for (a, b) in out.data.iter().zip(&base.data) {
            max_diff = max_diff.max((a - b).abs());
        }
    }
    assert!(max_diff < 1e-6, "identity modulation drifted by {max_diff}");

    // Elementwise oracle: scaling weights by a per-output-channel style
    // vector is exactly w[o, ..] * u[o].
    let mut tape = Tape::new();
    let w_data = vec![0.5f32, -1.25, 2.0, 0.75, -0.125, 3.5];
    let u_data = vec![1.5f32, -2.0];
    let w = tape.leaf(w_data.clone(), &[2, 3], false).unwrap();
    let u = tape.leaf(u_data.clone(), &[2, 1], false).unwrap();
    let m = modulate_weights(&mut tape, w, u).unwrap();
    let got = tape.data(m).to_vec();
    for o in 0..2 {
        for i in 0..3 {
            assert_eq!(got[o * 3 + i], w_data[o * 3 + i] * u_data[o]);
        }
    }
    println!("[acceptance] modulation identity: max diff {max_diff:.2e} over 50 fingerprints — PASS");
}

// ---------------------------------------------------------------------------
// 3. Desk-scale attribution
// ---------------------------------------------------------------------------

#[test]
fn trained_model_attributes_held_out_fingerprints_with_high_quality() {
    let t0 = std::time::Instant::now();
    let (cfg, p) = main_pipeline();
    let acc = measure_accuracy(p, 200, cfg.seed + 9000, None).unwrap();
    let (psnr, _) = measure_quality(p, 64, cfg.seed + 9000).unwrap();
    let elapsed = t0.elapsed();
    assert!(acc >= 0.95, "held-out bit accuracy {acc:.4} < 0.95");
    assert!(psnr >= 25.0, "modulated-vs-base output quality {psnr:.2} dB < 25 dB");
    assert!(elapsed.as_secs() <= 1800, "attribution run took {elapsed:?}");
    println!(
        "[acceptance] desk-scale attribution: acc={acc:.4} psnr={psnr:.2} dB in {elapsed:?} — PASS"
    );
}

// ---------------------------------------------------------------------------
// 4. Capacity trend
// ---------------------------------------------------------------------------

#[test]
fn accuracy_does_not_increase_with_fingerprint_length() {
    let (_, report) = capacity_results();
    let accs: Vec<f64> = report.rows.iter().map(|r| r.accuracy).collect();
    assert_eq!(accs.len(), 3);
    assert!(
        accs[0] >= accs[1] && accs[1] >= accs[2],
        "accuracy not non-increasing across lengths: {accs:?}"
    );
    assert!(
        accs[0] - accs[2] >= 0.0,
        "16-bit accuracy below 64-bit accuracy: {accs:?}"
    );
    println!("[acceptance] capacity trend: accuracies {accs:?} — PASS");
}

// ---------------------------------------------------------------------------
// 5. Robustness ordering
// ---------------------------------------------------------------------------

fn curve_is_non_increasing(report: &EvalReport, model: &str, kind: &str, labels: &[&str]) -> bool {
    let vals: Vec<f64> = labels
        .iter()
        .map(|l| row_accuracy(report, &format!("{model}/{kind}@{l}")))
        .collect();
    // one grid-point inversion allowed per curve for sampling noise
    let inversions = vals.windows(2).filter(|w| w[1] > w[0] + 1e-12).count();
    if inversions > 1 {
        eprintln!("{model}/{kind} curve {vals:?} has {inversions} inversions");
    }
    inversions <= 1
}

#[test]
fn robust_training_beats_clean_training_under_every_attack() {
    let (clean, robust) = robust_pair();
    let report = robustness_eval(clean, robust, 200, 515).unwrap();
    let families = [
        "crop", "rotation", "blur", "brightness", "noise", "erasing", "jpeg", "combination",
    ];
    for kind in families {
        let c = row_accuracy(&report, &format!("clean/{kind}@mid"));
        let r = row_accuracy(&report, &format!("robust/{kind}@mid"));
        assert!(
            r >= c,
            "robust accuracy {r:.4} below clean accuracy {c:.4} under {kind}"
        );
    }
    for model in ["clean", "robust"] {
        assert!(curve_is_non_increasing(&report, model, "blur", &["3", "5", "7"]));
        assert!(curve_is_non_increasing(&report, model, "noise", &["0.05", "0.1", "0.2"]));
        assert!(curve_is_non_increasing(&report, model, "jpeg", &["90", "80", "70", "60", "50"]));
    }
    println!("[acceptance] robustness ordering over 8 attack families — PASS");
}

// ---------------------------------------------------------------------------
// 6. Robustness/quality trade-off direction
// ---------------------------------------------------------------------------

#[test]
fn robust_training_costs_output_quality() {
    let (clean, robust) = robust_pair();
    let (_, clean_proxy) = measure_quality(clean, 64, 606).unwrap();
    let (_, robust_proxy) = measure_quality(robust, 64, 606).unwrap();
    assert!(
        robust_proxy > clean_proxy,
        "robust proxy {robust_proxy:.6} not strictly above clean proxy {clean_proxy:.6}"
    );
    println!(
        "[acceptance] quality trade-off: proxy clean={clean_proxy:.6} robust={robust_proxy:.6} — PASS"
    );
}

// ---------------------------------------------------------------------------
// 7. Secrecy against an independently trained decoder
// ---------------------------------------------------------------------------

#[test]
fn foreign_decoder_reads_nothing_from_an_independent_model() {
    let (cfg_a, original) = main_pipeline();
    let (cfg_b, attacker) = attacker_pipeline();
    let rep = secrecy_scenario2(original, cfg_a, attacker, cfg_b, 500, 707).unwrap();
    assert!(
        (0.4..=0.6).contains(&rep.cross_accuracy),
        "cross-model accuracy {:.4} outside the chance band",
        rep.cross_accuracy
    );
    assert!(
        rep.own_accuracy >= 0.95,
        "own clean accuracy {:.4} < 0.95",
        rep.own_accuracy
    );
    println!(
        "[acceptance] secrecy: cross={:.4} own={:.4} over {} images — PASS",
        rep.cross_accuracy, rep.own_accuracy, rep.samples
    );
}

// ---------------------------------------------------------------------------
// 8. Registry matching rates
// ---------------------------------------------------------------------------

#[test]
fn registry_identifies_noisy_fingerprints_and_rejects_unfingerprinted_images() {
    // 1024 users, 32-bit fingerprints, a 10% bit-error budget applied as
    // exactly floor(0.1 * 32) = 3 flipped bits per decode, threshold 8.
    let (correct, false_no_match) =
        matching_monte_carlo(1024, 32, 3, 8, 100_000, 808).unwrap();
    assert!(correct >= 0.99, "correct identification {correct:.4} < 0.99");
    assert!(false_no_match <= 0.01, "false no-match rate {false_no_match:.4} > 0.01");

    // Unfingerprinted output must not match anyone in a deployed registry.
    let (pipes, report) = capacity_results();
    let idx = report
        .rows
        .iter()
        .position(|r| r.condition == "d_phi=32")
        .expect("32-bit sweep entry missing");
    let p32 = &pipes[idx];
    let mut registry = Registry::default();
    for i in 0..16 {
        registry
            .register(&format!("user-{i:02}"), 32, [0u8; 32], 1_700_000_000 + i, 909)
            .unwrap();
    }
    let scenes = SyntheticSceneSpec::new(910, p32.image_side).unwrap();
    let mut no_match = 0usize;
    let n = 200usize;
    for i in 0..n {
        let x = generate(&scenes, i as u64);
        let img = p32.generate(None, &x).unwrap();
        if matches!(registry.identify(&img, p32, 8).unwrap(), MatchResult::NoMatch { .. }) {
            no_match += 1;
        }
    }
    let rate = no_match as f64 / n as f64;
    assert!(rate >= 0.99, "unfingerprinted no-match rate {rate:.4} < 0.99");
    println!(
        "[acceptance] registry matching: correct={correct:.4} false-no-match={false_no_match:.4} \
         base-no-match={rate:.4} — PASS"
    );
}

// ---------------------------------------------------------------------------
// 9. Wavelet/QIM baseline sanity
// ---------------------------------------------------------------------------

#[test]
fn wavelet_baseline_roundtrips_cleanly_and_degrades_under_jpeg() {
    let scenes = SyntheticSceneSpec::new(42, 32).unwrap();
    let step = 0.1f32;
    let d_phi = 32usize;
    let n = 50usize;
    let mut clean_sum = 0.0f64;
    let mut jpeg_sum = 0.0f64;
    for i in 0..n {
        let x = generate(&scenes, i as u64);
        let phi = sample_fingerprint(d_phi, 5000 + i as u64).unwrap();
        let marked = dwt_embed(&x, &phi, step).unwrap();
        let back = dwt_extract(&marked, d_phi, step).unwrap();
        clean_sum += attribution_accuracy(&phi, &back).unwrap();
        let spec = wmfp_core::attacks::AttackSpec::new(
            AttackKind::Jpeg { quality: 50 },
            6000 + i as u64,
        )
        .unwrap();
        let squeezed = apply_attack_image(&spec, &marked).unwrap();
        let noisy = dwt_extract(&squeezed, d_phi, step).unwrap();
        jpeg_sum += attribution_accuracy(&phi, &noisy).unwrap();
    }
    let clean_acc = clean_sum / n as f64;
    let jpeg_acc = jpeg_sum / n as f64;
    assert_eq!(clean_acc, 1.0, "clean round-trip accuracy {clean_acc}");
    assert!(
        jpeg_acc < clean_acc,
        "jpeg-50 accuracy {jpeg_acc} did not strictly decrease"
    );
    println!("[acceptance] wavelet baseline: clean={clean_acc} jpeg50={jpeg_acc:.4} — PASS");
}

// ---------------------------------------------------------------------------
// 10. Determinism
// ---------------------------------------------------------------------------

#[test]
fn identical_configs_and_seeds_reproduce_reports_bitwise() {
    // A reduced-budget configuration exercises the same training, evaluation,
    // matching, and baseline code paths as the full runs above; each pair of
    // runs must agree bitwise.
    let cfg = TrainConfig {
        d_phi: 8,
        image_side: 16,
        batch_size: 4,
        iterations: 40,
        pretrain_iterations: 20,
        learning_rate: 1e-3,
        lambda1: 0.0625,
        lambda2: 16.0,
        weight_decay: 0.05,
        log_interval: 10,
        seed: 1212,
        ..TrainConfig::default()
    };
    let run = |seed: u64| {
        let c = TrainConfig { seed, ..cfg.clone() };
        let mut p = Pipeline::init(&c);
        let pre = pretrain(&mut p, &c).unwrap();
        let fit = train(&mut p, &c).unwrap();
        (p, pre.to_lines(), fit.to_lines())
    };
    let (p1, pre1, fit1) = run(1212);
    let (p2, pre2, fit2) = run(1212);
    assert_eq!(pre1, pre2, "pretraining reports differ");
    assert_eq!(fit1, fit2, "training reports differ");
    assert_eq!(
        p1.to_model_file().digest(),
        p2.to_model_file().digest(),
        "final weights differ bitwise"
    );

    let rob1 = robustness_eval(&p1, &p2, 8, 33).unwrap().to_csv();
    let rob2 = robustness_eval(&p1, &p2, 8, 33).unwrap().to_csv();
    assert_eq!(rob1, rob2, "robustness reports differ");

    let mc1 = matching_monte_carlo(64, 16, 1, 4, 10_000, 44).unwrap();
    let mc2 = matching_monte_carlo(64, 16, 1, 4, 10_000, 44).unwrap();
    assert_eq!(mc1, mc2, "matching rates differ");

    let (cfg_b, pb, _, _) = {
        let c = TrainConfig { seed: 1313, ..cfg.clone() };
        let mut p = Pipeline::init(&c);
        pretrain(&mut p, &c).unwrap();
        let r = train(&mut p, &c).unwrap();
        (c, p, r.records.len(), 0)
    };
    let s1 = secrecy_scenario2(&p1, &cfg, &pb, &cfg_b, 32, 55).unwrap();
    let s2 = secrecy_scenario2(&p1, &cfg, &pb, &cfg_b, 32, 55).unwrap();
    assert_eq!(s1.cross_accuracy.to_bits(), s2.cross_accuracy.to_bits());
    assert_eq!(s1.own_accuracy.to_bits(), s2.own_accuracy.to_bits());

    let scenes = SyntheticSceneSpec::new(66, 16).unwrap();
    let x = generate(&scenes, 0);
    let phi = sample_fingerprint(8, 77).unwrap();
    let m1 = dwt_embed(&x, &phi, 0.1).unwrap();
    let m2 = dwt_embed(&x, &phi, 0.1).unwrap();
    assert_eq!(m1.data, m2.data, "wavelet embedding differs");
    assert!(psnr_between(&m1.data, &x.data).is_finite());
    println!("[acceptance] determinism: reports and weights reproduce bitwise — PASS");
}
