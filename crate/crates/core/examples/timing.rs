use wmfp_core::eval::{measure_quality, robustness_eval};
use wmfp_core::train::{pretrain, train, Pipeline, TrainConfig};

fn main_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        d_phi: 16,
        batch_size: 16,
        iterations: 2000,
        pretrain_iterations: 800,
        learning_rate: 1e-3,
        lambda1: 0.0625,
        lambda2: 16.0,
        weight_decay: 0.05,
        log_interval: 250,
        seed,
        ..TrainConfig::default()
    }
}

fn robust_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        lambda2: 2.0,
        weight_decay: 0.01,
        robust: [
            "crop",
            "rotation",
            "blur",
            "brightness",
            "noise",
            "erasing",
            "jpeg",
            "combination",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect(),
        ..main_cfg(seed)
    }
}

fn main() {
    let t0 = std::time::Instant::now();
    let clean_cfg = main_cfg(101);
    let mut clean = Pipeline::init(&clean_cfg);
    pretrain(&mut clean, &clean_cfg).unwrap();
    train(&mut clean, &clean_cfg).unwrap();
    let rcfg = robust_cfg(404);
    let mut robust = Pipeline::init(&rcfg);
    pretrain(&mut robust, &rcfg).unwrap();
    train(&mut robust, &rcfg).unwrap();
    eprintln!("pair trained in {:?}", t0.elapsed());

    let t0 = std::time::Instant::now();
    let rep = robustness_eval(&clean, &robust, 200, 515).unwrap();
    eprintln!("robustness ({:?}):\n{}", t0.elapsed(), rep.to_csv());
    let (_, cp) = measure_quality(&clean, 64, 606).unwrap();
    let (_, rp) = measure_quality(&robust, 64, 606).unwrap();
    eprintln!("proxy clean={cp:.6} robust={rp:.6}");
}
