//! Evaluation harnesses: attribution accuracy, quality proxies, capacity
//! sweep, robustness curves, and both secrecy scenarios.

use crate::attacks::{apply, AttackKind, AttackSpec, BLUR_GRID, JPEG_GRID};
use crate::codec::{sample_fingerprint_with, Fingerprint};
use crate::data::{generate as scene, Image, SyntheticSceneSpec};
use crate::error::{Error, Result};
use crate::params::{ParamTensor, TensorKind};
use crate::rng::rng_for;
use crate::tensor::{Tape, Var};
use crate::train::{
    accumulate_grads, pretrain, psnr_between, scale_grads, train, AdamW, FeatureExtractor,
    Pipeline, TrainConfig,
};
use rand::Rng;
use std::collections::HashMap;
use std::fmt::Write as _;

/// Fraction of matching bits between two equal-length fingerprints.
pub fn attribution_accuracy(phi: &Fingerprint, phi_hat: &Fingerprint) -> Result<f64> {
    if phi.d_phi() != phi_hat.d_phi() {
        return Err(Error::InvalidArgument(format!(
            "fingerprint lengths differ: {} vs {}",
            phi.d_phi(),
            phi_hat.d_phi()
        )));
    }
    let same = phi
        .bits()
        .iter()
        .zip(phi_hat.bits())
        .filter(|(a, b)| a == b)
        .count();
    Ok(same as f64 / phi.d_phi() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub condition: String,
    pub accuracy: f64,
    pub psnr: f64,
    pub proxy: f64,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub experiment: String,
    pub seed: u64,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        for r in &self.rows {
            if !(0.0..=1.0).contains(&r.accuracy) {
                return Err(Error::InvalidArgument(format!(
                    "accuracy {} of condition {:?} outside [0,1]",
                    r.accuracy, r.condition
                )));
            }
            if r.samples == 0 {
                return Err(Error::InvalidArgument(format!(
                    "condition {:?} has zero samples",
                    r.condition
                )));
            }
        }
        Ok(())
    }

    /// CSV with a fixed header; infinite PSNR renders as "inf".
    pub fn to_csv(&self) -> String {
        let mut out = String::from("experiment,condition,accuracy,psnr,proxy,samples,seed\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                self.experiment, r.condition, r.accuracy, r.psnr, r.proxy, r.samples, self.seed
            );
        }
        out
    }

    /// Newline-delimited key=value records.
    pub fn to_lines(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            let _ = writeln!(
                out,
                "experiment={} condition={} accuracy={} psnr={} proxy={} samples={} seed={}",
                self.experiment, r.condition, r.accuracy, r.psnr, r.proxy, r.samples, self.seed
            );
        }
        out
    }
}

/// Run an attack on a plain image (no gradients).
pub fn apply_attack_image(spec: &AttackSpec, img: &Image) -> Result<Image> {
    let mut tape = Tape::new();
    let x = tape.leaf(img.data.clone(), &[1, 3, img.side, img.side], false)?;
    let y = apply(spec, &mut tape, x)?;
    Ok(Image::new(img.side, tape.data(y).to_vec()))
}

/// Mean PSNR and mean perceptual-proxy distance over paired image sets.
pub fn quality_metrics(x_ref: &[Image], x_fp: &[Image]) -> Result<(f64, f64)> {
    if x_ref.is_empty() || x_ref.len() != x_fp.len() {
        return Err(Error::InvalidArgument(format!(
            "paired sets required, got {} vs {}",
            x_ref.len(),
            x_fp.len()
        )));
    }
    let fe = FeatureExtractor::new();
    let mut psnr_sum = 0.0f64;
    let mut proxy_sum = 0.0f64;
    for (a, b) in x_ref.iter().zip(x_fp) {
        psnr_sum += psnr_between(&a.data, &b.data) as f64;
        let mut tape = Tape::new();
        let fv = fe.load(&mut tape)?;
        let av = tape.leaf(a.data.clone(), &[1, 3, a.side, a.side], false)?;
        let bv = tape.leaf(b.data.clone(), &[1, 3, b.side, b.side], false)?;
        let d = crate::train::loss_quality(&mut tape, &fe, &fv, av, bv)?;
        proxy_sum += tape.data(d)[0] as f64;
    }
    let n = x_ref.len() as f64;
    Ok((psnr_sum / n, proxy_sum / n))
}

/// Fixed mid-grid strength for each attack family.
pub fn mid_strength(kind: &str) -> Result<AttackKind> {
    Ok(match kind {
        "crop" => AttackKind::Crop { ratio: 0.10 },
        "rotation" => AttackKind::Rotation { degrees: 15.0 },
        "blur" => AttackKind::Blur { kernel: 5 },
        "brightness" => AttackKind::Brightness { delta: 0.15 },
        "noise" => AttackKind::Noise { sigma: 0.1 },
        "erasing" => AttackKind::Erasing { ratio: 0.10 },
        "jpeg" => AttackKind::Jpeg { quality: 70 },
        "combination" => AttackKind::Combination {
            parts: vec![
                mid_strength("crop")?,
                mid_strength("rotation")?,
                mid_strength("blur")?,
                mid_strength("brightness")?,
                mid_strength("noise")?,
                mid_strength("erasing")?,
                mid_strength("jpeg")?,
            ],
        },
        other => return Err(Error::Parse(format!("unknown attack kind {other:?}"))),
    })
}

/// Mean attribution accuracy of a pipeline over `n` fresh fingerprints on
/// fresh scenes, with an optional fixed-strength attack applied to each
/// generated image (randomness re-seeded per image).
pub fn measure_accuracy(
    pipeline: &Pipeline,
    n: usize,
    seed: u64,
    attack: Option<&AttackKind>,
) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidArgument("sample count must be > 0".into()));
    }
    let mut rng = rng_for(seed, "eval-fingerprints", &[]);
    let scenes = SyntheticSceneSpec::new(seed ^ 0x5eed, pipeline.image_side)?;
    let mut acc_sum = 0.0f64;
    for i in 0..n {
        let phi = sample_fingerprint_with(pipeline.d_phi, &mut rng)?;
        let x = scene(&scenes, i as u64);
        let mut out = pipeline.generate(Some(&phi), &x)?;
        if let Some(kind) = attack {
            let spec = AttackSpec::new(kind.clone(), seed.wrapping_add(i as u64))?;
            out = apply_attack_image(&spec, &out)?;
        }
        let dec = pipeline.decode_fingerprint(&out)?;
        acc_sum += attribution_accuracy(&phi, &dec)?;
    }
    Ok(acc_sum / n as f64)
}

/// Paired quality measurement: PSNR and proxy between unmodulated and
/// modulated outputs of one pipeline over `n` fresh fingerprints.
pub fn measure_quality(pipeline: &Pipeline, n: usize, seed: u64) -> Result<(f64, f64)> {
    let mut rng = rng_for(seed, "eval-fingerprints", &[]);
    let scenes = SyntheticSceneSpec::new(seed ^ 0x5eed, pipeline.image_side)?;
    let mut refs = Vec::with_capacity(n);
    let mut fps = Vec::with_capacity(n);
    for i in 0..n {
        let phi = sample_fingerprint_with(pipeline.d_phi, &mut rng)?;
        let x = scene(&scenes, i as u64);
        refs.push(pipeline.generate(None, &x)?);
        fps.push(pipeline.generate(Some(&phi), &x)?);
    }
    quality_metrics(&refs, &fps)
}

/// Train one pipeline per fingerprint length at an equal iteration budget
/// and report held-out accuracy per length. Returns the trained pipelines
/// alongside the report for reuse.
pub fn capacity_sweep(
    d_phis: &[usize],
    base: &TrainConfig,
    n_eval: usize,
) -> Result<(Vec<Pipeline>, EvalReport)> {
    let mut rows = Vec::new();
    let mut pipelines = Vec::new();
    for &d_phi in d_phis {
        if d_phi < 8 {
            return Err(Error::InvalidArgument(format!(
                "fingerprint length {d_phi} must be >= 8"
            )));
        }
        let cfg = TrainConfig {
            d_phi,
            ..base.clone()
        };
        cfg.validate()?;
        let mut p = Pipeline::init(&cfg);
        pretrain(&mut p, &cfg)?;
        train(&mut p, &cfg)?;
        let accuracy = measure_accuracy(&p, n_eval, cfg.seed.wrapping_add(1), None)?;
        let (psnr, proxy) = measure_quality(&p, n_eval.min(32), cfg.seed.wrapping_add(1))?;
        rows.push(EvalRow {
            condition: format!("d_phi={d_phi}"),
            accuracy,
            psnr,
            proxy,
            samples: n_eval,
        });
        pipelines.push(p);
    }
    let report = EvalReport {
        experiment: "capacity".into(),
        seed: base.seed,
        rows,
    };
    report.validate()?;
    Ok((pipelines, report))
}

/// Per-(model, attack, strength) accuracy for a non-robust and a robust
/// pipeline: every attack family at mid strength, plus strength curves
/// for blur, noise, and jpeg.
pub fn robustness_eval(
    clean: &Pipeline,
    robust: &Pipeline,
    n: usize,
    seed: u64,
) -> Result<EvalReport> {
    let families = [
        "crop",
        "rotation",
        "blur",
        "brightness",
        "noise",
        "erasing",
        "jpeg",
        "combination",
    ];
    let mut rows = Vec::new();
    for (model, p) in [("clean", clean), ("robust", robust)] {
        // identity point: clean accuracy
        rows.push(EvalRow {
            condition: format!("{model}/none"),
            accuracy: measure_accuracy(p, n, seed, None)?,
            psnr: f64::INFINITY,
            proxy: 0.0,
            samples: n,
        });
        for kind in families {
            let attack = mid_strength(kind)?;
            rows.push(EvalRow {
                condition: format!("{model}/{kind}@mid"),
                accuracy: measure_accuracy(p, n, seed, Some(&attack))?,
                psnr: f64::NAN,
                proxy: f64::NAN,
                samples: n,
            });
        }
        let mut curve = |kind: &str, attack: AttackKind, label: String| -> Result<()> {
            rows.push(EvalRow {
                condition: format!("{model}/{kind}@{label}"),
                accuracy: measure_accuracy(p, n, seed, Some(&attack))?,
                psnr: f64::NAN,
                proxy: f64::NAN,
                samples: n,
            });
            Ok(())
        };
        for k in BLUR_GRID {
            curve("blur", AttackKind::Blur { kernel: k }, format!("{k}"))?;
        }
        for sigma in [0.05f32, 0.1, 0.2] {
            curve("noise", AttackKind::Noise { sigma }, format!("{sigma}"))?;
        }
        for q in JPEG_GRID {
            curve("jpeg", AttackKind::Jpeg { quality: q }, format!("{q}"))?;
        }
    }
    let report = EvalReport {
        experiment: "robustness".into(),
        seed,
        rows,
    };
    Ok(report)
}

/// A small binary CNN that scores whether an image carries a fingerprint.
struct Detector {
    params: Vec<ParamTensor>,
    side: usize,
}

impl Detector {
    fn init(side: usize, seed: u64) -> Self {
        let mut rng = rng_for(seed, "detector-init", &[]);
        let params = vec![
            ParamTensor::he_normal("det.conv1.w", vec![8, 3, 3, 3], 27, TensorKind::Conv, &mut rng),
            ParamTensor::zeros("det.conv1.b", vec![8], TensorKind::Bias),
            ParamTensor::he_normal("det.conv2.w", vec![16, 8, 3, 3], 72, TensorKind::Conv, &mut rng),
            ParamTensor::zeros("det.conv2.b", vec![16], TensorKind::Bias),
            ParamTensor::he_normal("det.fc.w", vec![16, 1], 16, TensorKind::Dense, &mut rng),
            ParamTensor::zeros("det.fc.b", vec![1], TensorKind::Bias),
        ];
        Detector { params, side }
    }

    fn load(&self, tape: &mut Tape, requires_grad: bool) -> Result<Vec<(String, Var)>> {
        self.params
            .iter()
            .map(|p| Ok((p.name.clone(), p.to_var(tape, requires_grad)?)))
            .collect()
    }

    fn logit(&self, tape: &mut Tape, vars: &[(String, Var)], x: Var) -> Result<Var> {
        let mut h = tape.conv2d(x, vars[0].1, 2, 1)?;
        h = tape.bias_add(h, vars[1].1, 1)?;
        h = tape.leaky_relu(h, 0.2)?;
        h = tape.conv2d(h, vars[2].1, 2, 1)?;
        h = tape.bias_add(h, vars[3].1, 1)?;
        h = tape.leaky_relu(h, 0.2)?;
        let pooled = tape.avg_pool2d(h, self.side / 4)?;
        let flat = tape.reshape(pooled, &[1, 16])?;
        let fc = tape.matmul(flat, vars[4].1)?;
        tape.bias_add(fc, vars[5].1, 1)
    }

    fn score(&self, img: &Image) -> Result<f32> {
        let mut tape = Tape::new();
        let vars = self.load(&mut tape, false)?;
        let x = tape.leaf(img.data.clone(), &[1, 3, img.side, img.side], false)?;
        let l = self.logit(&mut tape, &vars, x)?;
        Ok(tape.data(l)[0])
    }

    fn accuracy(&self, set: &[(Image, f32)]) -> Result<f64> {
        let mut correct = 0usize;
        for (img, label) in set {
            let pred = if self.score(img)? > 0.0 { 1.0 } else { 0.0 };
            correct += (pred == *label) as usize;
        }
        Ok(correct as f64 / set.len() as f64)
    }

    fn train(&mut self, set: &[(Image, f32)], iterations: usize, batch: usize, seed: u64) -> Result<()> {
        let mut rng = rng_for(seed, "detector-train", &[]);
        let mut opt = AdamW::new(1e-3, 0.9, 0.999, 0.01);
        for _ in 0..iterations {
            let mut grads: HashMap<String, Vec<f32>> = HashMap::new();
            for _ in 0..batch {
                let (img, label) = &set[rng.gen_range(0..set.len())];
                let mut tape = Tape::new();
                let vars = self.load(&mut tape, true)?;
                let x = tape.leaf(img.data.clone(), &[1, 3, img.side, img.side], false)?;
                let logit = self.logit(&mut tape, &vars, x)?;
                let clamped = tape.clamp(logit, -15.0, 15.0)?;
                let target = tape.constant(vec![*label], &[1, 1])?;
                let loss = tape.bce_with_logits(clamped, target)?;
                tape.backward(loss)?;
                accumulate_grads(&tape, &vars, &mut grads)?;
            }
            scale_grads(&mut grads, 1.0 / batch as f32);
            let mut refs: Vec<&mut ParamTensor> = self.params.iter_mut().collect();
            opt.step(&mut refs, &grads)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Scenario1Report {
    /// Detector accuracy on its own training images from pipeline A.
    pub train_accuracy: f64,
    /// Detector accuracy transferred to pipeline B's images.
    pub transfer_accuracy: f64,
    /// Accuracy of a detector trained on shuffled labels (chance control).
    pub shuffled_accuracy: f64,
    pub samples_per_class: usize,
}

fn detection_set(pipeline: &Pipeline, per_class: usize, seed: u64) -> Result<Vec<(Image, f32)>> {
    let mut rng = rng_for(seed, "detector-data", &[]);
    let scenes = SyntheticSceneSpec::new(seed ^ 0xdead, pipeline.image_side)?;
    let mut set = Vec::with_capacity(2 * per_class);
    for i in 0..per_class {
        let x = scene(&scenes, i as u64);
        let phi = sample_fingerprint_with(pipeline.d_phi, &mut rng)?;
        set.push((pipeline.generate(Some(&phi), &x)?, 1.0));
        set.push((pipeline.generate(None, &x)?, 0.0));
    }
    Ok(set)
}

/// Train a binary fingerprint-presence detector on pipeline A's images
/// and measure how well it transfers to an independently trained
/// pipeline B, plus a shuffled-label chance control.
pub fn secrecy_scenario1(
    a: &Pipeline,
    b: &Pipeline,
    per_class: usize,
    detector_iterations: usize,
    seed: u64,
) -> Result<Scenario1Report> {
    if per_class < 500 {
        return Err(Error::InvalidArgument(format!(
            "need >= 500 samples per class, got {per_class}"
        )));
    }
    let train_set = detection_set(a, per_class, seed)?;
    let transfer_set = detection_set(b, per_class, seed.wrapping_add(1))?;

    let mut detector = Detector::init(a.image_side, seed);
    detector.train(&train_set, detector_iterations, 16, seed)?;
    let train_accuracy = detector.accuracy(&train_set)?;
    let transfer_accuracy = detector.accuracy(&transfer_set)?;

    // chance control: same budget, labels shuffled deterministically
    let mut shuffled = train_set.clone();
    let mut rng = rng_for(seed, "detector-shuffle", &[]);
    for i in 0..shuffled.len() {
        shuffled[i].1 = if rng.gen::<bool>() { 1.0 } else { 0.0 };
    }
    let mut control = Detector::init(a.image_side, seed.wrapping_add(2));
    control.train(&shuffled, detector_iterations, 16, seed.wrapping_add(2))?;
    // measured against the true labels on held-out-style fresh data
    let shuffled_accuracy = control.accuracy(&transfer_set)?;

    Ok(Scenario1Report {
        train_accuracy,
        transfer_accuracy,
        shuffled_accuracy,
        samples_per_class: per_class,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct Scenario2Report {
    /// Original F decoding the attacker pipeline's fingerprinted images.
    pub cross_accuracy: f64,
    /// Original F decoding its own pipeline's clean images (control).
    pub own_accuracy: f64,
    pub samples: usize,
}

/// Internal-attacker secrecy check: the attacker retrains the whole
/// system with the same config but a different seed; the original F
/// should decode the attacker's images at chance level.
pub fn secrecy_scenario2(
    original: &Pipeline,
    original_cfg: &TrainConfig,
    attacker: &Pipeline,
    attacker_cfg: &TrainConfig,
    n: usize,
    seed: u64,
) -> Result<Scenario2Report> {
    if original_cfg.seed == attacker_cfg.seed {
        return Err(Error::InvalidArgument(
            "attacker pipeline must use a different seed".into(),
        ));
    }
    let mut a = original_cfg.clone();
    let mut b = attacker_cfg.clone();
    a.seed = 0;
    b.seed = 0;
    if a.to_kv_text() != b.to_kv_text() {
        return Err(Error::InvalidArgument(
            "config mismatch between pipelines invalidates the scenario".into(),
        ));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("sample count must be > 0".into()));
    }
    let mut rng = rng_for(seed, "eval-fingerprints", &[]);
    let scenes = SyntheticSceneSpec::new(seed ^ 0x5eed, original.image_side)?;
    let mut cross = 0.0f64;
    for i in 0..n {
        let phi = sample_fingerprint_with(attacker.d_phi, &mut rng)?;
        let x = scene(&scenes, i as u64);
        let img = attacker.generate(Some(&phi), &x)?;
        let dec = original.decode_fingerprint(&img)?;
        cross += attribution_accuracy(&phi, &dec)?;
    }
    let own_accuracy = measure_accuracy(original, n, seed.wrapping_add(1), None)?;
    Ok(Scenario2Report {
        cross_accuracy: cross / n as f64,
        own_accuracy,
        samples: n,
    })
}

/// Half-width of the 4-sigma binomial band around chance accuracy for
/// n images at d_phi bits each.
pub fn chance_band(n: usize, d_phi: usize) -> f64 {
    4.0 * (0.25 / (n as f64 * d_phi as f64)).sqrt()
}
