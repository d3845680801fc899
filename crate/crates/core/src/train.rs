//! Joint fine-tuning of the modulation path (affine layers A, mapping
//! network M, image decoder D) and the fingerprint decoder F, plus the
//! reconstruction pretraining of the autoencoder. The encoder E is frozen
//! during fine-tuning.

use crate::attacks::{apply, sample_spec, AttackSpec};
use crate::codec::{
    compute_style, fingerprint_var, map_fingerprint, sample_fingerprint_with, AffineLayers,
    Fingerprint, MappingNet,
};
use crate::data::{generate, Image, SyntheticSceneSpec};
use crate::error::{Error, Result};
use crate::fpnet::{bits_from_logits, DecoderNetParams, DecoderNetVars};
use crate::model::{decode, encode, DecoderParams, DecoderVars, EncoderParams, Variant};
use crate::params::{index_by_name, ParamTensor, TensorKind};
use crate::rng::rng_for;
use crate::serialize::{meta_tensor, read_meta, ModelFile};
use crate::tensor::{Tape, Var};
use rand::Rng;
use std::collections::HashMap;
use std::path::Path;

/// Logits are clamped to this band before the bit loss for numerical
/// safety.
pub const LOGIT_CLAMP: f32 = 15.0;

const ATTACK_KINDS: [&str; 8] = [
    "crop",
    "rotation",
    "blur",
    "brightness",
    "noise",
    "erasing",
    "jpeg",
    "combination",
];

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub d_phi: usize,
    pub lambda1: f32,
    pub lambda2: f32,
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
    pub iterations: usize,
    pub pretrain_iterations: usize,
    pub seed: u64,
    pub variant: Variant,
    /// Attack kinds drawn per item during robust training; empty = clean.
    pub robust: Vec<String>,
    pub image_side: usize,
    pub dataset_size: u64,
    pub log_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            d_phi: 16,
            lambda1: 1.0,
            lambda2: 1.0,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            batch_size: 16,
            iterations: 2000,
            pretrain_iterations: 300,
            seed: 0,
            variant: Variant::All,
            robust: Vec::new(),
            image_side: 32,
            dataset_size: 512,
            log_interval: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda1 < 0.0 || self.lambda2 <= 0.0 {
            return Err(Error::Config(format!(
                "loss weights out of range: lambda1 {} (>= 0), lambda2 {} (> 0)",
                self.lambda1, self.lambda2
            )));
        }
        if self.iterations < 1 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.d_phi == 0 {
            return Err(Error::Config("d_phi must be >= 1".into()));
        }
        if self.image_side == 0 || self.image_side % 8 != 0 {
            return Err(Error::Config(format!(
                "image_side {} must be a positive multiple of 8",
                self.image_side
            )));
        }
        if self.dataset_size == 0 {
            return Err(Error::Config("dataset_size must be >= 1".into()));
        }
        if self.log_interval == 0 {
            return Err(Error::Config("log_interval must be >= 1".into()));
        }
        for k in &self.robust {
            if !ATTACK_KINDS.contains(&k.as_str()) {
                return Err(Error::Config(format!("unknown robust attack kind {k:?}")));
            }
        }
        Ok(())
    }

    /// Flat key=value text; `#` comments and blank lines ignored; unknown
    /// keys rejected.
    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got {raw:?}", lineno + 1))
            })?;
            let (k, v) = (k.trim(), v.trim());
            let bad = |what: &str| Error::Config(format!("line {}: {k}={v:?} is not {what}", lineno + 1));
            macro_rules! num {
                ($field:ident, $ty:ty, $what:expr) => {
                    cfg.$field = v.parse::<$ty>().map_err(|_| bad($what))?
                };
            }
            match k {
                "d_phi" => num!(d_phi, usize, "an integer"),
                "lambda1" => num!(lambda1, f32, "a number"),
                "lambda2" => num!(lambda2, f32, "a number"),
                "learning_rate" => num!(learning_rate, f32, "a number"),
                "beta1" => num!(beta1, f32, "a number"),
                "beta2" => num!(beta2, f32, "a number"),
                "weight_decay" => num!(weight_decay, f32, "a number"),
                "batch_size" => num!(batch_size, usize, "an integer"),
                "iterations" => num!(iterations, usize, "an integer"),
                "pretrain_iterations" => num!(pretrain_iterations, usize, "an integer"),
                "seed" => num!(seed, u64, "an integer"),
                "image_side" => num!(image_side, usize, "an integer"),
                "dataset_size" => num!(dataset_size, u64, "an integer"),
                "log_interval" => num!(log_interval, usize, "an integer"),
                "variant" => cfg.variant = Variant::parse(v)?,
                "robust" => {
                    cfg.robust = if v.is_empty() || v == "none" {
                        Vec::new()
                    } else {
                        v.split(',').map(|s| s.trim().to_string()).collect()
                    }
                }
                other => return Err(Error::Config(format!("unknown config key {other:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv_text(&self) -> String {
        let robust = if self.robust.is_empty() {
            "none".to_string()
        } else {
            self.robust.join(",")
        };
        format!(
            "d_phi={}\nlambda1={}\nlambda2={}\nlearning_rate={}\nbeta1={}\nbeta2={}\n\
             weight_decay={}\nbatch_size={}\niterations={}\npretrain_iterations={}\nseed={}\n\
             variant={}\nrobust={}\nimage_side={}\ndataset_size={}\nlog_interval={}\n",
            self.d_phi,
            self.lambda1,
            self.lambda2,
            self.learning_rate,
            self.beta1,
            self.beta2,
            self.weight_decay,
            self.batch_size,
            self.iterations,
            self.pretrain_iterations,
            self.seed,
            self.variant.as_str(),
            robust,
            self.image_side,
            self.dataset_size,
            self.log_interval
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainRecord {
    pub iteration: usize,
    pub loss_phi: f32,
    pub loss_quality: f32,
    pub bit_accuracy: f32,
    pub psnr: f32,
}

impl TrainRecord {
    pub fn to_line(&self) -> String {
        format!(
            "iteration={} loss_phi={} loss_quality={} bit_accuracy={} psnr={}",
            self.iteration, self.loss_phi, self.loss_quality, self.bit_accuracy, self.psnr
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub records: Vec<TrainRecord>,
}

impl TrainReport {
    pub fn to_lines(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&r.to_line());
            out.push('\n');
        }
        out
    }
}

/// AdamW with decoupled weight decay. Bias tensors are exempt from decay
/// (the affine biases start at 1 to realize identity modulation; decaying
/// them toward 0 would fight that anchor).
pub struct AdamW {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    t: i32,
    state: HashMap<String, (Vec<f32>, Vec<f32>)>,
}

impl AdamW {
    pub fn new(lr: f32, beta1: f32, beta2: f32, weight_decay: f32) -> Self {
        AdamW {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            t: 0,
            state: HashMap::new(),
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        AdamW::new(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.weight_decay)
    }

    pub fn step(
        &mut self,
        params: &mut [&mut ParamTensor],
        grads: &HashMap<String, Vec<f32>>,
    ) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for p in params.iter_mut() {
            let g = grads.get(&p.name).ok_or_else(|| {
                Error::InvalidArgument(format!("no gradient for parameter {}", p.name))
            })?;
            if g.len() != p.data.len() {
                return Err(Error::ShapeMismatch {
                    op: "adamw",
                    detail: format!("{}: grad len {} vs param len {}", p.name, g.len(), p.data.len()),
                });
            }
            let (m, v) = self
                .state
                .entry(p.name.clone())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            let decay = if p.kind == TensorKind::Bias {
                0.0
            } else {
                self.weight_decay
            };
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p.data[i] -= self.lr * (mh / (vh.sqrt() + self.eps) + decay * p.data[i]);
            }
        }
        Ok(())
    }
}

/// Fixed, randomly initialized, frozen 3-layer conv net whose activation
/// distances serve as the perceptual term of the quality loss.
pub struct FeatureExtractor {
    convs: Vec<(ParamTensor, ParamTensor, usize, usize)>,
}

pub struct FeatureVars {
    convs: Vec<(Var, Var, usize, usize)>,
}

impl Default for FeatureExtractor {
    fn default() -> Self {
        FeatureExtractor::new()
    }
}

impl FeatureExtractor {
    pub fn new() -> Self {
        let mut rng = rng_for(0, "quality-features", &[]);
        let widths = [(3usize, 8usize, 2usize), (8, 16, 2), (16, 16, 1)];
        let convs = widths
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout, stride))| {
                (
                    ParamTensor::he_normal(
                        format!("feat.conv{}.w", i + 1),
                        vec![cout, cin, 3, 3],
                        cin * 9,
                        TensorKind::Conv,
                        &mut rng,
                    ),
                    ParamTensor::zeros(format!("feat.conv{}.b", i + 1), vec![cout], TensorKind::Bias),
                    stride,
                    1,
                )
            })
            .collect();
        FeatureExtractor { convs }
    }

    pub fn load(&self, tape: &mut Tape) -> Result<FeatureVars> {
        let mut convs = Vec::with_capacity(self.convs.len());
        for (w, b, stride, pad) in &self.convs {
            convs.push((w.to_var(tape, false)?, b.to_var(tape, false)?, *stride, *pad));
        }
        Ok(FeatureVars { convs })
    }

    fn activations(&self, tape: &mut Tape, fv: &FeatureVars, x: Var) -> Result<Vec<Var>> {
        let mut h = x;
        let mut acts = Vec::with_capacity(fv.convs.len());
        for &(w, b, stride, pad) in &fv.convs {
            h = tape.conv2d(h, w, stride, pad)?;
            h = tape.bias_add(h, b, 1)?;
            h = tape.leaky_relu(h, 0.2)?;
            acts.push(h);
        }
        Ok(acts)
    }
}

/// Mean squared difference of two same-shaped tensors.
pub fn mse(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let d2 = tape.mul(d, d)?;
    tape.mean(d2)
}

/// Quality distance: pixel MSE plus the mean over layers of the feature
/// extractor's activation MSEs. Zero iff pixels (hence activations) match.
pub fn loss_quality(
    tape: &mut Tape,
    fe: &FeatureExtractor,
    fv: &FeatureVars,
    x: Var,
    xhat: Var,
) -> Result<Var> {
    let pixel = mse(tape, x, xhat)?;
    let ax = fe.activations(tape, fv, x)?;
    let ah = fe.activations(tape, fv, xhat)?;
    let mut feat: Option<Var> = None;
    let n = ax.len();
    for (a, b) in ax.into_iter().zip(ah) {
        let m = mse(tape, a, b)?;
        feat = Some(match feat {
            None => m,
            Some(f) => tape.add(f, m)?,
        });
    }
    let feat = tape.mul_scalar(feat.expect("nonempty extractor"), 1.0 / n as f32)?;
    tape.add(pixel, feat)
}

/// Negated-sum binary cross-entropy of the fingerprint bits given logits,
/// with logits clamped to ±LOGIT_CLAMP first.
pub fn bit_loss(tape: &mut Tape, logits: Var, phi: &Fingerprint) -> Result<Var> {
    let l = tape.clamp(logits, -LOGIT_CLAMP, LOGIT_CLAMP)?;
    let shape = tape.shape(l).to_vec();
    let target = tape.constant(phi.as_floats(), &shape)?;
    tape.bce_with_logits(l, target)
}

/// Fingerprint-reconstruction loss: decode with the fingerprint's style,
/// run F on the image, score the bits. Returns (loss, generated image).
pub fn loss_phi(
    tape: &mut Tape,
    fp: &DecoderNetVars,
    dec: &DecoderVars,
    style: &crate::codec::ModulationStyle,
    z: Var,
    phi: &Fingerprint,
) -> Result<(Var, Var)> {
    let xhat = decode(tape, dec, Some(style), z)?;
    let logits = crate::fpnet::decode_logits_var(tape, fp, xhat)?;
    Ok((bit_loss(tape, logits, phi)?, xhat))
}

/// Same as [`loss_phi`] with a differentiable post-processing transform
/// applied to the generated image before F sees it.
pub fn loss_robust(
    tape: &mut Tape,
    fp: &DecoderNetVars,
    dec: &DecoderVars,
    style: &crate::codec::ModulationStyle,
    z: Var,
    phi: &Fingerprint,
    attack: &AttackSpec,
) -> Result<(Var, Var)> {
    let xhat = decode(tape, dec, Some(style), z)?;
    let attacked = apply(attack, tape, xhat)?;
    let logits = crate::fpnet::decode_logits_var(tape, fp, attacked)?;
    Ok((bit_loss(tape, logits, phi)?, xhat))
}

/// The full set of networks: frozen encoder E, decoder D, mapping net M,
/// affine layers A, fingerprint decoder F.
#[derive(Clone)]
pub struct Pipeline {
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
    pub mapping: MappingNet,
    pub affine: AffineLayers,
    pub fpnet: DecoderNetParams,
    pub variant: Variant,
    pub d_phi: usize,
    pub image_side: usize,
}

impl Pipeline {
    pub fn init(cfg: &TrainConfig) -> Self {
        let mut rng = rng_for(cfg.seed, "init", &[]);
        let encoder = EncoderParams::init(&mut rng);
        let decoder = DecoderParams::init(cfg.variant, &mut rng);
        let mapping = MappingNet::init(cfg.d_phi, &mut rng);
        let affine = AffineLayers::init(&decoder.modulatable_channels(), 4 * cfg.d_phi);
        let fpnet = DecoderNetParams::init(cfg.d_phi, cfg.image_side, &mut rng);
        Pipeline {
            encoder,
            decoder,
            mapping,
            affine,
            fpnet,
            variant: cfg.variant,
            d_phi: cfg.d_phi,
            image_side: cfg.image_side,
        }
    }

    /// Parameters updated during fine-tuning: A, M, D, F. E is excluded.
    pub fn trainable(&self) -> Vec<&ParamTensor> {
        let mut out = self.affine.params();
        out.extend(self.mapping.params());
        out.extend(self.decoder.params());
        out.extend(self.fpnet.params());
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut ParamTensor> {
        let mut out = self.affine.params_mut();
        out.extend(self.mapping.params_mut());
        out.extend(self.decoder.params_mut());
        out.extend(self.fpnet.params_mut());
        out
    }

    pub fn all_params(&self) -> Vec<&ParamTensor> {
        let mut out = self.encoder.params();
        out.extend(self.trainable());
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_model_file().save(path)
    }

    pub fn to_model_file(&self) -> ModelFile {
        let mut tensors: Vec<ParamTensor> = self.all_params().into_iter().cloned().collect();
        tensors.push(meta_tensor(self.image_side, self.d_phi, self.variant.code() as u8));
        ModelFile::new(tensors, None)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = ModelFile::load(path)?;
        Pipeline::from_model_file(&file)
    }

    pub fn from_model_file(file: &ModelFile) -> Result<Self> {
        let mut map = index_by_name(file.tensors.clone());
        let meta = map
            .remove("meta")
            .ok_or_else(|| Error::Parse("model file is missing the meta tensor".into()))?;
        let (image_side, d_phi, variant_code) = read_meta(&meta)?;
        let variant = Variant::from_code(variant_code as u32)
            .ok_or_else(|| Error::Parse(format!("unknown variant code {variant_code}")))?;
        let cfg = TrainConfig {
            d_phi,
            image_side,
            variant,
            ..TrainConfig::default()
        };
        let mut p = Pipeline::init(&cfg);
        let mut all = p.encoder.params_mut();
        all.extend(p.affine.params_mut());
        all.extend(p.mapping.params_mut());
        all.extend(p.decoder.params_mut());
        all.extend(p.fpnet.params_mut());
        for t in all {
            let stored = map.remove(&t.name).ok_or_else(|| {
                Error::Parse(format!("model file is missing tensor {}", t.name))
            })?;
            if stored.shape != t.shape {
                return Err(Error::ShapeMismatch {
                    op: "pipeline-load",
                    detail: format!("{}: file {:?} vs expected {:?}", t.name, stored.shape, t.shape),
                });
            }
            t.data = stored.data;
        }
        if let Some(extra) = map.keys().next() {
            return Err(Error::Parse(format!("model file has unexpected tensor {extra:?}")));
        }
        Ok(p)
    }

    /// D(style(φ), E(x)) with no gradients; `None` runs the base decoder.
    pub fn generate(&self, phi: Option<&Fingerprint>, x: &Image) -> Result<Image> {
        let mut tape = Tape::new();
        let ev = self.encoder.load(&mut tape, false)?;
        let dv = self.decoder.load(&mut tape, false)?;
        let xv = tape.leaf(x.data.clone(), &[1, 3, x.side, x.side], false)?;
        let z = encode(&mut tape, &ev, xv)?;
        let out = match phi {
            None => decode(&mut tape, &dv, None, z)?,
            Some(phi) => {
                let mv = self.mapping.load(&mut tape, false)?;
                let av = self.affine.load(&mut tape, false)?;
                let pv = fingerprint_var(&mut tape, phi)?;
                let w = map_fingerprint(&mut tape, &mv, pv)?;
                let style = compute_style(&mut tape, &av, w)?;
                decode(&mut tape, &dv, Some(&style), z)?
            }
        };
        Ok(Image::new(x.side, tape.data(out).to_vec()))
    }

    pub fn decode_fingerprint(&self, image: &Image) -> Result<Fingerprint> {
        let logits = crate::fpnet::decode_logits(&self.fpnet, &image.data)?;
        Ok(bits_from_logits(&logits))
    }

    /// Mean held-out bit accuracy: fresh fingerprints through generate +
    /// decode against a fixed image set.
    pub fn bit_accuracy(&self, phis: &[Fingerprint], images: &[Image]) -> Result<f64> {
        let mut correct = 0usize;
        let mut total = 0usize;
        for (i, phi) in phis.iter().enumerate() {
            let x = &images[i % images.len()];
            let out = self.generate(Some(phi), x)?;
            let dec = self.decode_fingerprint(&out)?;
            correct += phi
                .bits()
                .iter()
                .zip(dec.bits())
                .filter(|(a, b)| a == b)
                .count();
            total += self.d_phi;
        }
        Ok(correct as f64 / total as f64)
    }
}

/// Bind a component's parameters onto a tape, recording (name, Var) pairs
/// for gradient collection. Relies on every `load` creating exactly one
/// leaf per tensor, in `params()` order.
fn bind_named<T>(
    tape: &mut Tape,
    named: &mut Vec<(String, Var)>,
    param_names: Vec<String>,
    load: impl FnOnce(&mut Tape) -> Result<T>,
) -> Result<T> {
    let start = tape.len();
    let vars = load(tape)?;
    debug_assert_eq!(tape.len(), start + param_names.len());
    for (i, name) in param_names.into_iter().enumerate() {
        named.push((name, Var(start + i)));
    }
    Ok(vars)
}

fn names(params: Vec<&ParamTensor>) -> Vec<String> {
    params.into_iter().map(|p| p.name.clone()).collect()
}

pub(crate) fn accumulate_grads(
    tape: &Tape,
    named: &[(String, Var)],
    grads: &mut HashMap<String, Vec<f32>>,
) -> Result<()> {
    for (name, var) in named {
        let g = tape.grad(*var).ok_or_else(|| {
            Error::InvalidArgument(format!("backward produced no gradient for {name}"))
        })?;
        match grads.get_mut(name) {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => {
                grads.insert(name.clone(), g.to_vec());
            }
        }
    }
    Ok(())
}

pub(crate) fn scale_grads(grads: &mut HashMap<String, Vec<f32>>, s: f32) {
    for g in grads.values_mut() {
        for v in g.iter_mut() {
            *v *= s;
        }
    }
}

/// Peak signal-to-noise ratio in dB for signals in [0,1]; +inf when equal.
pub fn psnr_between(a: &[f32], b: &[f32]) -> f32 {
    let mse: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| ((x - y) as f64).powi(2))
        .sum::<f64>()
        / a.len() as f64;
    if mse <= 0.0 {
        f32::INFINITY
    } else {
        (-10.0 * mse.log10()) as f32
    }
}

/// Reconstruction pretraining of E and the unmodulated D under the quality
/// metric. Mutates the pipeline's encoder and decoder in place.
pub fn pretrain(pipeline: &mut Pipeline, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let fe = FeatureExtractor::new();
    let mut opt = AdamW::from_config(cfg);
    let mut rng = rng_for(cfg.seed, "pretrain", &[]);
    let scene = SyntheticSceneSpec::new(cfg.seed, cfg.image_side)?;
    let eval_img = generate(&scene, cfg.dataset_size);
    let mut report = TrainReport::default();
    for it in 0..cfg.pretrain_iterations {
        let mut grads: HashMap<String, Vec<f32>> = HashMap::new();
        let mut loss_sum = 0.0f64;
        for _ in 0..cfg.batch_size {
            let x = generate(&scene, rng.gen_range(0..cfg.dataset_size));
            let mut tape = Tape::new();
            let mut named = Vec::new();
            let enc = &pipeline.encoder;
            let ev = bind_named(&mut tape, &mut named, names(enc.params()), |t| {
                enc.load(t, true)
            })?;
            let dec = &pipeline.decoder;
            let dv = bind_named(&mut tape, &mut named, names(dec.params()), |t| {
                dec.load(t, true)
            })?;
            let fv = fe.load(&mut tape)?;
            let xv = tape.leaf(x.data.clone(), &[1, 3, x.side, x.side], false)?;
            let z = encode(&mut tape, &ev, xv)?;
            let xhat = decode(&mut tape, &dv, None, z)?;
            let l = loss_quality(&mut tape, &fe, &fv, xv, xhat)?;
            let lv = tape.data(l)[0];
            if !lv.is_finite() {
                return Err(Error::Diverged(format!(
                    "pretrain iteration {it}: non-finite quality loss"
                )));
            }
            loss_sum += lv as f64;
            tape.backward(l)?;
            accumulate_grads(&tape, &named, &mut grads)?;
        }
        scale_grads(&mut grads, 1.0 / cfg.batch_size as f32);
        let mut params = pipeline.encoder.params_mut();
        params.extend(pipeline.decoder.params_mut());
        opt.step(&mut params, &grads)?;
        if (it + 1) % cfg.log_interval == 0 || it + 1 == cfg.pretrain_iterations {
            let recon = pipeline.generate(None, &eval_img)?;
            report.records.push(TrainRecord {
                iteration: it + 1,
                loss_phi: 0.0,
                loss_quality: (loss_sum / cfg.batch_size as f64) as f32,
                bit_accuracy: 0.0,
                psnr: psnr_between(&recon.data, &eval_img.data),
            });
        }
    }
    Ok(report)
}

/// Joint fine-tuning loop. Per item: fresh image and fingerprint, optional
/// per-item attack, total loss λ₁·L_φ + λ₂·L_quality, AdamW over
/// {A, M, D, F}. E is never updated.
pub fn train(pipeline: &mut Pipeline, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if pipeline.d_phi != cfg.d_phi
        || pipeline.image_side != cfg.image_side
        || pipeline.variant != cfg.variant
    {
        return Err(Error::Config(format!(
            "pipeline (d_phi={}, side={}, {}) does not match config (d_phi={}, side={}, {})",
            pipeline.d_phi,
            pipeline.image_side,
            pipeline.variant.as_str(),
            cfg.d_phi,
            cfg.image_side,
            cfg.variant.as_str()
        )));
    }
    let fe = FeatureExtractor::new();
    let mut opt = AdamW::from_config(cfg);
    let mut rng = rng_for(cfg.seed, "train", &[]);
    let mut phi_rng = rng_for(cfg.seed, "fingerprints", &[]);
    let scene = SyntheticSceneSpec::new(cfg.seed, cfg.image_side)?;
    let mut ho_rng = rng_for(cfg.seed, "heldout", &[]);
    let ho_phis: Vec<Fingerprint> = (0..24)
        .map(|_| sample_fingerprint_with(cfg.d_phi, &mut ho_rng))
        .collect::<Result<_>>()?;
    let ho_images: Vec<Image> = (0..4).map(|i| generate(&scene, cfg.dataset_size + i)).collect();
    let mut report = TrainReport::default();
    for it in 0..cfg.iterations {
        let mut grads: HashMap<String, Vec<f32>> = HashMap::new();
        let (mut lp_sum, mut lq_sum) = (0.0f64, 0.0f64);
        for _ in 0..cfg.batch_size {
            let x = generate(&scene, rng.gen_range(0..cfg.dataset_size));
            let phi = sample_fingerprint_with(cfg.d_phi, &mut phi_rng)?;
            let attack = if cfg.robust.is_empty() {
                None
            } else {
                let kind = &cfg.robust[rng.gen_range(0..cfg.robust.len())];
                Some(sample_spec(kind, rng.gen::<u64>())?)
            };
            let mut tape = Tape::new();
            let mut named = Vec::new();
            let enc = &pipeline.encoder;
            let ev = enc.load(&mut tape, false)?;
            let aff = &pipeline.affine;
            let av = bind_named(&mut tape, &mut named, names(aff.params()), |t| {
                aff.load(t, true)
            })?;
            let map = &pipeline.mapping;
            let mv = bind_named(&mut tape, &mut named, names(map.params()), |t| {
                map.load(t, true)
            })?;
            let dec = &pipeline.decoder;
            let dv = bind_named(&mut tape, &mut named, names(dec.params()), |t| {
                dec.load(t, true)
            })?;
            let fpn = &pipeline.fpnet;
            let fp = bind_named(&mut tape, &mut named, names(fpn.params()), |t| {
                fpn.load(t, true)
            })?;
            let fv = fe.load(&mut tape)?;
            let xv = tape.leaf(x.data.clone(), &[1, 3, x.side, x.side], false)?;
            let z = encode(&mut tape, &ev, xv)?;
            let pv = fingerprint_var(&mut tape, &phi)?;
            let wv = map_fingerprint(&mut tape, &mv, pv)?;
            let style = compute_style(&mut tape, &av, wv)?;
            let (lphi, xhat) = match &attack {
                None => loss_phi(&mut tape, &fp, &dv, &style, z, &phi)?,
                Some(a) => loss_robust(&mut tape, &fp, &dv, &style, z, &phi, a)?,
            };
            let lq = loss_quality(&mut tape, &fe, &fv, xv, xhat)?;
            let wp = tape.mul_scalar(lphi, cfg.lambda1)?;
            let wq = tape.mul_scalar(lq, cfg.lambda2)?;
            let total = tape.add(wp, wq)?;
            let tval = tape.data(total)[0];
            if !tval.is_finite() {
                return Err(Error::Diverged(format!(
                    "iteration {it}: non-finite total loss"
                )));
            }
            lp_sum += tape.data(lphi)[0] as f64;
            lq_sum += tape.data(lq)[0] as f64;
            tape.backward(total)?;
            accumulate_grads(&tape, &named, &mut grads)?;
        }
        scale_grads(&mut grads, 1.0 / cfg.batch_size as f32);
        opt.step(&mut pipeline.trainable_mut(), &grads)?;
        if (it + 1) % cfg.log_interval == 0 || it + 1 == cfg.iterations {
            let acc = pipeline.bit_accuracy(&ho_phis, &ho_images)? as f32;
            let modulated = pipeline.generate(Some(&ho_phis[0]), &ho_images[0])?;
            let base = pipeline.generate(None, &ho_images[0])?;
            report.records.push(TrainRecord {
                iteration: it + 1,
                loss_phi: (lp_sum / cfg.batch_size as f64) as f32,
                loss_quality: (lq_sum / cfg.batch_size as f64) as f32,
                bit_accuracy: acc,
                psnr: psnr_between(&modulated.data, &base.data),
            });
            // Only meaningful on real budgets; short smoke runs never leave chance.
            if cfg.lambda1 > 0.0 && cfg.iterations >= 200 && it + 1 > cfg.iterations / 2 && acc < 0.45
            {
                return Err(Error::Diverged(format!(
                    "iteration {}: held-out bit accuracy {acc} below 0.45 past half budget",
                    it + 1
                )));
            }
        }
    }
    Ok(report)
}
