//! `wmfp`: command-line front end wiring the fingerprinting pipeline into
//! the distributor workflow: train, stamp per-user models, generate,
//! decode, attack, evaluate, and identify users from images.

use clap::{Parser, Subcommand};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use wmfp_core::attacks::AttackSpec;
use wmfp_core::codec::Fingerprint;
use wmfp_core::data::{generate as scene, load_ppm, save_ppm, SyntheticSceneSpec};
use wmfp_core::error::Error as CoreError;
use wmfp_core::eval::{
    capacity_sweep, measure_accuracy, measure_quality, robustness_eval, secrecy_scenario1,
    secrecy_scenario2, EvalReport, EvalRow,
};
use wmfp_core::model::{concrete_style, stamp};
use wmfp_core::registry::{
    collision_report, default_threshold, matching_monte_carlo, MatchResult, Registry,
};
use wmfp_core::tensor::gradcheck::standard_op_checks;
use wmfp_core::train::{pretrain, train, Pipeline, TrainConfig};

#[derive(Debug)]
enum AppErrorClass {
    Usage,
    Config,
    Runtime,
}

struct AppError {
    class: AppErrorClass,
    detail: String,
}

type AppResult<T> = Result<T, AppError>;

fn usage(detail: impl Into<String>) -> AppError {
    AppError {
        class: AppErrorClass::Usage,
        detail: detail.into(),
    }
}

fn config_err(detail: impl Into<String>) -> AppError {
    AppError {
        class: AppErrorClass::Config,
        detail: detail.into(),
    }
}

fn runtime(detail: impl Into<String>) -> AppError {
    AppError {
        class: AppErrorClass::Runtime,
        detail: detail.into(),
    }
}

impl From<CoreError> for AppError {
    fn from(e: CoreError) -> Self {
        let class = match &e {
            CoreError::Config(_) => AppErrorClass::Config,
            _ => AppErrorClass::Runtime,
        };
        AppError {
            class,
            detail: e.to_string(),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "wmfp",
    about = "User-attributable generative-model fingerprinting via weight modulation",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Reconstruction-pretrain the encoder and unmodulated decoder
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        /// key=value config overrides
        #[arg(long = "set")]
        set: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Jointly train modulation and the fingerprint decoder
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set")]
        set: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Bake one user's fingerprint into the decoder weights and register it
    Stamp {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        registry: PathBuf,
        #[arg(long)]
        user: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// registration timestamp, UTC seconds
        #[arg(long, default_value_t = 0)]
        issued_at: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate images from a model file (stamped or with an explicit fingerprint)
    Generate {
        #[arg(long)]
        model: PathBuf,
        /// fingerprint as hex; omit for a stamped or unmodulated model
        #[arg(long)]
        fingerprint: Option<String>,
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode the fingerprint bits from an image
    Decode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// also print raw logits (diagnostics only)
        #[arg(long)]
        logits: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply a post-processing attack to an image
    Attack {
        /// attack spec, e.g. "noise:sigma=0.1,seed=7"
        #[arg(long)]
        spec: String,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy and quality metrics for a trained model
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 200)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one pipeline per fingerprint length and report accuracy
    Capacity {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set")]
        set: Vec<String>,
        /// comma-separated fingerprint lengths
        #[arg(long, default_value = "16,32,64")]
        d_phi: String,
        #[arg(long, default_value_t = 100)]
        samples: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attack-accuracy curves for a non-robust and a robust model
    RobustEval {
        #[arg(long)]
        clean: PathBuf,
        #[arg(long)]
        robust: PathBuf,
        #[arg(long, default_value_t = 200)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fingerprint secrecy scenarios (1: detector transfer, 2: internal attacker)
    Secrecy {
        #[arg(long)]
        scenario: u8,
        #[arg(long)]
        model_a: PathBuf,
        #[arg(long)]
        model_b: PathBuf,
        /// training configs of the two pipelines (scenario 2 only)
        #[arg(long)]
        config_a: Option<PathBuf>,
        #[arg(long)]
        config_b: Option<PathBuf>,
        #[arg(long, default_value_t = 500)]
        samples: usize,
        #[arg(long, default_value_t = 200)]
        detector_iterations: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Issue a fingerprint for a user and append it to the registry
    RegistryAdd {
        #[arg(long)]
        registry: PathBuf,
        #[arg(long)]
        user: String,
        #[arg(long, default_value_t = 32)]
        d_phi: usize,
        /// model file whose hash the record binds to
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        issued_at: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode an image and match it against the registry
    Identify {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        registry: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Hamming rejection threshold; default floor(d_phi / 4)
        #[arg(long)]
        tau: Option<u32>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Analytic vs Monte-Carlo collision and misattribution estimates
    CollisionReport {
        #[arg(long, default_value_t = 1024)]
        users: usize,
        #[arg(long, default_value_t = 32)]
        d_phi: usize,
        #[arg(long, default_value_t = 0.1)]
        error_rate: f64,
        #[arg(long, default_value_t = 100_000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference validation of every tape operation
    GradCheck {
        #[arg(long)]
        out: PathBuf,
    },
}

/// Collects written artifacts and renders the run manifest.
struct Manifest {
    subcommand: String,
    out_dir: PathBuf,
    seeds: Vec<(String, u64)>,
    config_snapshot: Option<String>,
    artifacts: Vec<(String, String)>,
}

impl Manifest {
    fn new(subcommand: &str, out_dir: &Path) -> AppResult<Self> {
        std::fs::create_dir_all(out_dir)
            .map_err(|e| runtime(format!("cannot create output directory {}: {e}", out_dir.display())))?;
        Ok(Manifest {
            subcommand: subcommand.to_string(),
            out_dir: out_dir.to_path_buf(),
            seeds: Vec::new(),
            config_snapshot: None,
            artifacts: Vec::new(),
        })
    }

    fn seed(&mut self, name: &str, value: u64) {
        self.seeds.push((name.to_string(), value));
    }

    fn snapshot(&mut self, config: &TrainConfig) {
        self.config_snapshot = Some(config.to_kv_text());
    }

    /// Write an artifact into the output directory and record its hash.
    fn write(&mut self, name: &str, bytes: &[u8]) -> AppResult<PathBuf> {
        let path = self.out_dir.join(name);
        std::fs::write(&path, bytes)
            .map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))?;
        self.record(name)?;
        Ok(path)
    }

    /// Record a file already written into the output directory.
    fn record(&mut self, name: &str) -> AppResult<()> {
        let path = self.out_dir.join(name);
        let bytes = std::fs::read(&path)
            .map_err(|e| runtime(format!("cannot hash {}: {e}", path.display())))?;
        self.artifacts.push((name.to_string(), hex_digest(&bytes)));
        Ok(())
    }

    fn finish(self) -> AppResult<()> {
        let mut text = format!("subcommand={}\n", self.subcommand);
        for (name, value) in &self.seeds {
            let _ = writeln!(text, "seed.{name}={value}");
        }
        if let Some(snap) = &self.config_snapshot {
            for line in snap.lines() {
                let _ = writeln!(text, "config.{line}");
            }
        }
        for (name, hash) in &self.artifacts {
            let _ = writeln!(text, "artifact={name} sha256={hash}");
        }
        let path = self.out_dir.join("manifest.txt");
        std::fs::write(&path, text)
            .map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))?;
        Ok(())
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(64);
    for b in Sha256::digest(bytes) {
        let _ = write!(s, "{b:02x}");
    }
    s
}

fn hex32(bytes: &[u8; 32]) -> String {
    let mut s = String::with_capacity(64);
    for b in bytes {
        let _ = write!(s, "{b:02x}");
    }
    s
}

/// Load a flat key=value config file and apply `--set key=value` overrides.
fn load_config(path: &Path, overrides: &[String]) -> AppResult<TrainConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| config_err(format!("cannot read config {}: {e}", path.display())))?;
    let mut kv: BTreeMap<String, String> = BTreeMap::new();
    for raw in text.lines() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| config_err(format!("config line {raw:?} is not key=value")))?;
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    for ov in overrides {
        let (k, v) = ov
            .split_once('=')
            .ok_or_else(|| usage(format!("override {ov:?} is not key=value")))?;
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    let merged: String = kv
        .iter()
        .map(|(k, v)| format!("{k}={v}\n"))
        .collect();
    let cfg = TrainConfig::from_kv_text(&merged).map_err(|e| config_err(e.to_string()))?;
    cfg.validate().map_err(|e| config_err(e.to_string()))?;
    Ok(cfg)
}

fn load_pipeline(path: &Path) -> AppResult<Pipeline> {
    Pipeline::load(path).map_err(AppError::from)
}

fn model_hash(path: &Path) -> AppResult<[u8; 32]> {
    Ok(wmfp_core::serialize::ModelFile::load(path)?.digest())
}

fn parse_fingerprint(hex: &str, d_phi: usize) -> AppResult<Fingerprint> {
    Fingerprint::from_hex(hex, d_phi).map_err(|e| usage(e.to_string()))
}

fn run(cmd: Command) -> AppResult<()> {
    match cmd {
        Command::Pretrain { config, set, out } => {
            let cfg = load_config(&config, &set)?;
            let mut manifest = Manifest::new("pretrain", &out)?;
            manifest.seed("global", cfg.seed);
            manifest.snapshot(&cfg);
            let mut pipeline = Pipeline::init(&cfg);
            let report = pretrain(&mut pipeline, &cfg)?;
            let model_path = manifest.out_dir.join("model.wmfp");
            pipeline.save(&model_path)?;
            manifest.record("model.wmfp")?;
            manifest.write("pretrain_report.txt", report.to_lines().as_bytes())?;
            manifest.finish()?;
            println!("pretrained model written to {}", model_path.display());
            Ok(())
        }
        Command::Train { config, set, out } => {
            let cfg = load_config(&config, &set)?;
            let mut manifest = Manifest::new("train", &out)?;
            manifest.seed("global", cfg.seed);
            manifest.snapshot(&cfg);
            let mut pipeline = Pipeline::init(&cfg);
            let pre = pretrain(&mut pipeline, &cfg)?;
            let report = train(&mut pipeline, &cfg)?;
            let model_path = manifest.out_dir.join("model.wmfp");
            pipeline.save(&model_path)?;
            manifest.record("model.wmfp")?;
            manifest.write("pretrain_report.txt", pre.to_lines().as_bytes())?;
            manifest.write("train_report.txt", report.to_lines().as_bytes())?;
            manifest.finish()?;
            if let Some(last) = report.records.last() {
                println!(
                    "trained model written to {} (bit_accuracy={} psnr={})",
                    model_path.display(),
                    last.bit_accuracy,
                    last.psnr
                );
            }
            Ok(())
        }
        Command::Stamp {
            model,
            registry,
            user,
            seed,
            issued_at,
            out,
        } => {
            let mut manifest = Manifest::new("stamp", &out)?;
            manifest.seed("global", seed);
            let mut pipeline = load_pipeline(&model)?;
            let hash = model_hash(&model)?;
            let mut reg = if registry.exists() {
                Registry::load(&registry)?
            } else {
                Registry::new()
            };
            let record = match reg.records.iter().find(|r| r.user_id == user) {
                Some(r) => r.clone(),
                None => {
                    let r = reg
                        .register(&user, pipeline.d_phi, hash, issued_at, seed)?
                        .clone();
                    Registry::append_record(&registry, &r)?;
                    r
                }
            };
            let style = concrete_style(&pipeline.mapping, &pipeline.affine, &record.fingerprint)?;
            let mut phi_hasher = Sha256::new();
            phi_hasher.update(record.fingerprint.bits());
            let baked = stamp(&pipeline.decoder, &style, phi_hasher.finalize().into())?;
            pipeline.decoder = baked.decoder;
            let mut file = pipeline.to_model_file();
            file.fingerprint_hash = Some(baked.fingerprint_hash);
            let name = format!("stamped-{user}.wmfp");
            let path = manifest.out_dir.join(&name);
            file.save(&path)?;
            manifest.record(&name)?;
            manifest.finish()?;
            println!(
                "stamped model for {user} written to {} (fingerprint {})",
                path.display(),
                record.fingerprint.to_hex()
            );
            Ok(())
        }
        Command::Generate {
            model,
            fingerprint,
            count,
            seed,
            out,
        } => {
            if count == 0 {
                return Err(usage("count must be > 0"));
            }
            let mut manifest = Manifest::new("generate", &out)?;
            manifest.seed("global", seed);
            let file = wmfp_core::serialize::ModelFile::load(&model)?;
            let stamped = file.fingerprint_hash.is_some();
            let pipeline = Pipeline::from_model_file(&file)?;
            let phi = match &fingerprint {
                Some(hex) => {
                    if stamped {
                        return Err(usage(
                            "model is already stamped; --fingerprint not allowed",
                        ));
                    }
                    Some(parse_fingerprint(hex, pipeline.d_phi)?)
                }
                None => None,
            };
            let scenes = SyntheticSceneSpec::new(seed, pipeline.image_side)
                .map_err(AppError::from)?;
            for i in 0..count {
                let x = scene(&scenes, i as u64);
                let img = pipeline.generate(phi.as_ref(), &x)?;
                let name = format!("image-{i:04}.ppm");
                save_ppm(&img, &manifest.out_dir.join(&name))?;
                manifest.record(&name)?;
            }
            manifest.finish()?;
            println!("{count} images written to {}", out.display());
            Ok(())
        }
        Command::Decode {
            model,
            image,
            logits,
            out,
        } => {
            let mut manifest = Manifest::new("decode", &out)?;
            let pipeline = load_pipeline(&model)?;
            let img = load_ppm(&image)?;
            let raw = wmfp_core::fpnet::decode_logits(&pipeline.fpnet, &img.data)?;
            let bits = wmfp_core::fpnet::bits_from_logits(&raw);
            let mut text = format!("fingerprint={}\n", bits.to_hex());
            if logits {
                let joined: Vec<String> = raw.iter().map(|v| v.to_string()).collect();
                let _ = writeln!(text, "logits={}", joined.join(","));
            }
            manifest.write("decode.txt", text.as_bytes())?;
            manifest.finish()?;
            print!("{text}");
            Ok(())
        }
        Command::Attack { spec, input, out } => {
            let spec = AttackSpec::parse(&spec).map_err(|e| config_err(e.to_string()))?;
            let mut manifest = Manifest::new("attack", &out)?;
            manifest.seed("attack", spec.seed);
            let img = load_ppm(&input)?;
            let attacked = wmfp_core::eval::apply_attack_image(&spec, &img)?;
            let path = manifest.out_dir.join("attacked.ppm");
            save_ppm(&attacked, &path)?;
            manifest.record("attacked.ppm")?;
            manifest.finish()?;
            println!("attacked image written to {}", path.display());
            Ok(())
        }
        Command::Eval {
            model,
            samples,
            seed,
            out,
        } => {
            let mut manifest = Manifest::new("eval", &out)?;
            manifest.seed("global", seed);
            let pipeline = load_pipeline(&model)?;
            let accuracy = measure_accuracy(&pipeline, samples, seed, None)?;
            let (psnr, proxy) = measure_quality(&pipeline, samples.min(64), seed)?;
            let report = EvalReport {
                experiment: "eval".into(),
                seed,
                rows: vec![EvalRow {
                    condition: "clean".into(),
                    accuracy,
                    psnr,
                    proxy,
                    samples,
                }],
            };
            report.validate()?;
            manifest.write("eval.csv", report.to_csv().as_bytes())?;
            manifest.finish()?;
            print!("{}", report.to_lines());
            Ok(())
        }
        Command::Capacity {
            config,
            set,
            d_phi,
            samples,
            out,
        } => {
            let cfg = load_config(&config, &set)?;
            let mut lengths = Vec::new();
            for part in d_phi.split(',') {
                lengths.push(
                    part.trim()
                        .parse::<usize>()
                        .map_err(|_| usage(format!("fingerprint length {part:?} is not an integer")))?,
                );
            }
            let mut manifest = Manifest::new("capacity", &out)?;
            manifest.seed("global", cfg.seed);
            manifest.snapshot(&cfg);
            let (_pipelines, report) = capacity_sweep(&lengths, &cfg, samples)?;
            manifest.write("capacity.csv", report.to_csv().as_bytes())?;
            manifest.finish()?;
            print!("{}", report.to_lines());
            Ok(())
        }
        Command::RobustEval {
            clean,
            robust,
            samples,
            seed,
            out,
        } => {
            let mut manifest = Manifest::new("robust-eval", &out)?;
            manifest.seed("global", seed);
            let clean_p = load_pipeline(&clean)?;
            let robust_p = load_pipeline(&robust)?;
            let report = robustness_eval(&clean_p, &robust_p, samples, seed)?;
            manifest.write("robustness.csv", report.to_csv().as_bytes())?;
            manifest.finish()?;
            print!("{}", report.to_lines());
            Ok(())
        }
        Command::Secrecy {
            scenario,
            model_a,
            model_b,
            config_a,
            config_b,
            samples,
            detector_iterations,
            seed,
            out,
        } => {
            let mut manifest = Manifest::new("secrecy", &out)?;
            manifest.seed("global", seed);
            let a = load_pipeline(&model_a)?;
            let b = load_pipeline(&model_b)?;
            let text = match scenario {
                1 => {
                    let rep = secrecy_scenario1(&a, &b, samples, detector_iterations, seed)?;
                    format!(
                        "scenario=1 train_accuracy={} transfer_accuracy={} shuffled_accuracy={} samples_per_class={}\n",
                        rep.train_accuracy,
                        rep.transfer_accuracy,
                        rep.shuffled_accuracy,
                        rep.samples_per_class
                    )
                }
                2 => {
                    let (ca, cb) = match (&config_a, &config_b) {
                        (Some(ca), Some(cb)) => (load_config(ca, &[])?, load_config(cb, &[])?),
                        _ => {
                            return Err(usage(
                                "scenario 2 requires --config-a and --config-b",
                            ))
                        }
                    };
                    let rep = secrecy_scenario2(&a, &ca, &b, &cb, samples, seed)?;
                    format!(
                        "scenario=2 cross_accuracy={} own_accuracy={} samples={}\n",
                        rep.cross_accuracy, rep.own_accuracy, rep.samples
                    )
                }
                other => return Err(usage(format!("unknown scenario {other}; expected 1 or 2"))),
            };
            manifest.write("secrecy.txt", text.as_bytes())?;
            manifest.finish()?;
            print!("{text}");
            Ok(())
        }
        Command::RegistryAdd {
            registry,
            user,
            d_phi,
            model,
            seed,
            issued_at,
            out,
        } => {
            let mut manifest = Manifest::new("registry-add", &out)?;
            manifest.seed("global", seed);
            let hash = model_hash(&model)?;
            let mut reg = if registry.exists() {
                Registry::load(&registry)?
            } else {
                Registry::new()
            };
            let record = reg.register(&user, d_phi, hash, issued_at, seed)?.clone();
            Registry::append_record(&registry, &record)?;
            let text = format!(
                "user={} fingerprint={} d_phi={} model_sha256={}\n",
                record.user_id,
                record.fingerprint.to_hex(),
                d_phi,
                hex32(&record.model_hash)
            );
            manifest.write("registration.txt", text.as_bytes())?;
            manifest.finish()?;
            print!("{text}");
            Ok(())
        }
        Command::Identify {
            model,
            registry,
            image,
            tau,
            out,
        } => {
            let mut manifest = Manifest::new("identify", &out)?;
            let pipeline = load_pipeline(&model)?;
            let reg = Registry::load(&registry)?;
            let img = load_ppm(&image)?;
            let tau = tau.unwrap_or_else(|| default_threshold(pipeline.d_phi));
            let result = reg.identify(&img, &pipeline, tau)?;
            let text = match result {
                MatchResult::Match {
                    user_id,
                    distance,
                    margin,
                } => format!(
                    "result=match user={user_id} distance={distance} margin={}\n",
                    margin.map_or("none".to_string(), |m| m.to_string())
                ),
                MatchResult::Ambiguous { user_ids, distance } => format!(
                    "result=ambiguous users={} distance={distance}\n",
                    user_ids.join("+")
                ),
                MatchResult::NoMatch { nearest_distance } => format!(
                    "result=no-match nearest_distance={}\n",
                    nearest_distance.map_or("none".to_string(), |d| d.to_string())
                ),
            };
            manifest.write("identify.txt", text.as_bytes())?;
            manifest.finish()?;
            print!("{text}");
            Ok(())
        }
        Command::CollisionReport {
            users,
            d_phi,
            error_rate,
            trials,
            seed,
            out,
        } => {
            let mut manifest = Manifest::new("collision-report", &out)?;
            manifest.seed("global", seed);
            let rep = collision_report(users, d_phi, error_rate, trials, seed)?;
            let flips = (error_rate * d_phi as f64).floor() as usize;
            let (correct, no_match) = matching_monte_carlo(
                users,
                d_phi,
                flips,
                default_threshold(d_phi),
                trials,
                seed,
            )?;
            let text = format!(
                "users={users} d_phi={d_phi} error_rate={error_rate} trials={trials}\n\
                 pairwise_collision={}\nmisattribution_analytic={}\nmisattribution_monte_carlo={}\n\
                 correct_identification={correct}\nfalse_no_match={no_match}\n",
                rep.pairwise_collision, rep.misattribution_analytic, rep.misattribution_monte_carlo
            );
            manifest.write("collision.txt", text.as_bytes())?;
            manifest.finish()?;
            print!("{text}");
            Ok(())
        }
        Command::GradCheck { out } => {
            let mut manifest = Manifest::new("grad-check", &out)?;
            let reports = standard_op_checks(1e-3, 1e-3)?;
            let mut text = String::new();
            let mut worst = 0.0f64;
            let mut failed = Vec::new();
            for (name, rep) in &reports {
                let _ = writeln!(
                    text,
                    "op={name} max_rel_err={} nondifferentiable={} passed={}",
                    rep.max_rel_err(),
                    rep.nondifferentiable_count(),
                    rep.passed()
                );
                worst = worst.max(rep.max_rel_err());
                if !rep.passed() {
                    failed.push(name.clone());
                }
            }
            let _ = writeln!(text, "max_rel_err={worst}");
            manifest.write("gradcheck.txt", text.as_bytes())?;
            manifest.finish()?;
            print!("{text}");
            if !failed.is_empty() {
                return Err(runtime(format!(
                    "gradient check failed for {}",
                    failed.join(",")
                )));
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            // help/version requests are not errors
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let detail = e.to_string().replace('\n', " ");
            eprintln!("error class=usage detail={:?}", detail.trim());
            return ExitCode::from(1);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (class, code) = match e.class {
                AppErrorClass::Usage => ("usage", 1),
                AppErrorClass::Config => ("config", 2),
                AppErrorClass::Runtime => ("runtime", 3),
            };
            eprintln!("error class={class} detail={:?}", e.detail);
            ExitCode::from(code)
        }
    }
}
