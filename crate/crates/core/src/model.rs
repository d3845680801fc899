//! The desk-scale autoencoder: an encoder producing a latent at 1/4
//! resolution and a decoder whose flagged layers consume a modulation style,
//! plus weight baking (stamping) for deployment.

use crate::codec::ModulationStyle;
use crate::error::{Error, Result};
use crate::params::{ParamTensor, TensorKind};
use crate::tensor::{Tape, Var};
use rand_chacha::ChaCha8Rng;

pub const LEAKY_SLOPE: f32 = 0.2;
/// Latent channel count.
pub const LATENT_CHANNELS: usize = 8;

/// Which decoder layers carry modulation.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Variant {
    /// Modulate only the convolution layers.
    ConvOnly,
    /// Modulate convolution and channel-attention layers.
    All,
}

impl Variant {
    pub fn code(self) -> u32 {
        match self {
            Variant::ConvOnly => 0,
            Variant::All => 1,
        }
    }

    pub fn from_code(c: u32) -> Option<Self> {
        Some(match c {
            0 => Variant::ConvOnly,
            1 => Variant::All,
            _ => return None,
        })
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "conv-only" => Ok(Variant::ConvOnly),
            "all" => Ok(Variant::All),
            other => Err(Error::Config(format!(
                "unknown variant {other:?} (expected conv-only or all)"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::ConvOnly => "conv-only",
            Variant::All => "all",
        }
    }
}

#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub name: String,
    pub weight: ParamTensor, // (o, c, k, k)
    pub bias: ParamTensor,   // (o)
    pub stride: usize,
    pub pad: usize,
}

impl ConvLayer {
    fn init(
        name: &str,
        prefix: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        modulatable: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = in_ch * k * k;
        ConvLayer {
            name: name.to_string(),
            weight: ParamTensor::he_normal(
                format!("{prefix}.{name}.w"),
                vec![out_ch, in_ch, k, k],
                fan_in,
                TensorKind::Conv,
                rng,
            )
            .modulatable(modulatable),
            bias: ParamTensor::zeros(format!("{prefix}.{name}.b"), vec![out_ch], TensorKind::Bias),
            stride,
            pad,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape[0]
    }
}

/// Ordered conv stack mapping an image (3 x H x W in [0,1]) to a latent
/// (LATENT_CHANNELS x H/4 x W/4). Two stride-2 stages, one stride-1 stage.
#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub convs: Vec<ConvLayer>,
}

pub struct EncoderVars {
    convs: Vec<(Var, Var, usize, usize)>,
}

impl EncoderParams {
    pub fn init(rng: &mut ChaCha8Rng) -> Self {
        EncoderParams {
            convs: vec![
                ConvLayer::init("conv1", "enc", 3, 16, 3, 2, 1, false, rng),
                ConvLayer::init("conv2", "enc", 16, 32, 3, 2, 1, false, rng),
                ConvLayer::init("conv3", "enc", 32, LATENT_CHANNELS, 3, 1, 1, false, rng),
            ],
        }
    }

    pub fn params(&self) -> Vec<&ParamTensor> {
        self.convs.iter().flat_map(|c| [&c.weight, &c.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        self.convs
            .iter_mut()
            .flat_map(|c| [&mut c.weight, &mut c.bias])
            .collect()
    }

    pub fn load(&self, tape: &mut Tape, requires_grad: bool) -> Result<EncoderVars> {
        let mut convs = Vec::with_capacity(self.convs.len());
        for c in &self.convs {
            convs.push((
                c.weight.to_var(tape, requires_grad)?,
                c.bias.to_var(tape, requires_grad)?,
                c.stride,
                c.pad,
            ));
        }
        Ok(EncoderVars { convs })
    }
}

/// z = E(x). x must be (1, 3, H, W) with H, W multiples of 4, values in [0,1].
pub fn encode(tape: &mut Tape, enc: &EncoderVars, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 || s[1] != 3 || s[2] % 4 != 0 || s[3] % 4 != 0 {
        return Err(Error::ShapeMismatch {
            op: "encode",
            detail: format!("{s:?} must be (n,3,4a,4b)"),
        });
    }
    let mut h = x;
    let last = enc.convs.len() - 1;
    for (i, &(w, b, stride, pad)) in enc.convs.iter().enumerate() {
        h = tape.conv2d(h, w, stride, pad)?;
        h = tape.bias_add(h, b, 1)?;
        if i != last {
            h = tape.leaky_relu(h, LEAKY_SLOPE)?;
        }
    }
    Ok(h)
}

/// Squeeze-excite channel attention: pooled channel descriptor through two
/// dense layers, sigmoid gate scales the feature map channels.
#[derive(Clone, Debug)]
pub struct AttnLayer {
    pub name: String,
    pub fc1_w: ParamTensor, // (hidden, channels)
    pub fc1_b: ParamTensor,
    pub fc2_w: ParamTensor, // (channels, hidden), modulated in the `all` variant
    pub fc2_b: ParamTensor,
}

impl AttnLayer {
    fn init(name: &str, channels: usize, hidden: usize, modulatable: bool, rng: &mut ChaCha8Rng) -> Self {
        AttnLayer {
            name: name.to_string(),
            fc1_w: ParamTensor::he_normal(
                format!("dec.{name}.fc1w"),
                vec![hidden, channels],
                channels,
                TensorKind::Dense,
                rng,
            ),
            fc1_b: ParamTensor::zeros(format!("dec.{name}.fc1b"), vec![hidden], TensorKind::Bias),
            fc2_w: ParamTensor::he_normal(
                format!("dec.{name}.fc2w"),
                vec![channels, hidden],
                hidden,
                TensorKind::Dense,
                rng,
            )
            .modulatable(modulatable),
            fc2_b: ParamTensor::zeros(format!("dec.{name}.fc2b"), vec![channels], TensorKind::Bias),
        }
    }

    pub fn channels(&self) -> usize {
        self.fc2_w.shape[0]
    }
}

#[derive(Clone, Debug)]
pub enum DecoderLayer {
    Conv(ConvLayer),
    Upsample { name: String, factor: usize },
    Attention(AttnLayer),
}

impl DecoderLayer {
    pub fn name(&self) -> &str {
        match self {
            DecoderLayer::Conv(c) => &c.name,
            DecoderLayer::Upsample { name, .. } => name,
            DecoderLayer::Attention(a) => &a.name,
        }
    }

    pub fn modulatable(&self) -> bool {
        match self {
            DecoderLayer::Conv(c) => c.weight.modulatable,
            DecoderLayer::Upsample { .. } => false,
            DecoderLayer::Attention(a) => a.fc2_w.modulatable,
        }
    }

    /// Output-channel count of the modulated weight, when modulatable.
    pub fn modulated_channels(&self) -> Option<usize> {
        match self {
            DecoderLayer::Conv(c) if c.weight.modulatable => Some(c.out_channels()),
            DecoderLayer::Attention(a) if a.fc2_w.modulatable => Some(a.channels()),
            _ => None,
        }
    }
}

/// Ordered decoder: conv / upsample stages, one channel-attention layer, and
/// a final 3-channel conv with output clamped to [0,1].
#[derive(Clone, Debug)]
pub struct DecoderParams {
    pub layers: Vec<DecoderLayer>,
    pub variant: Variant,
}

pub enum DecoderLayerVars {
    Conv {
        name: String,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        modulatable: bool,
        is_output: bool,
    },
    Upsample {
        factor: usize,
    },
    Attention {
        name: String,
        fc1_w: Var,
        fc1_b: Var,
        fc2_w: Var,
        fc2_b: Var,
        modulatable: bool,
    },
}

pub struct DecoderVars {
    layers: Vec<DecoderLayerVars>,
}

impl DecoderParams {
    pub fn init(variant: Variant, rng: &mut ChaCha8Rng) -> Self {
        let attn_mod = variant == Variant::All;
        DecoderParams {
            layers: vec![
                DecoderLayer::Conv(ConvLayer::init("conv1", "dec", LATENT_CHANNELS, 32, 3, 1, 1, true, rng)),
                DecoderLayer::Upsample {
                    name: "up1".into(),
                    factor: 2,
                },
                DecoderLayer::Conv(ConvLayer::init("conv2", "dec", 32, 16, 3, 1, 1, true, rng)),
                DecoderLayer::Upsample {
                    name: "up2".into(),
                    factor: 2,
                },
                DecoderLayer::Conv(ConvLayer::init("conv3", "dec", 16, 16, 3, 1, 1, true, rng)),
                DecoderLayer::Attention(AttnLayer::init("attn", 16, 4, attn_mod, rng)),
                DecoderLayer::Conv(ConvLayer::init("out", "dec", 16, 3, 3, 1, 1, true, rng)),
            ],
            variant,
        }
    }

    /// (layer name, output-channel count) of every modulatable layer.
    pub fn modulatable_channels(&self) -> Vec<(String, usize)> {
        self.layers
            .iter()
            .filter_map(|l| l.modulated_channels().map(|c| (l.name().to_string(), c)))
            .collect()
    }

    pub fn params(&self) -> Vec<&ParamTensor> {
        let mut out = Vec::new();
        for l in &self.layers {
            match l {
                DecoderLayer::Conv(c) => out.extend([&c.weight, &c.bias]),
                DecoderLayer::Upsample { .. } => {}
                DecoderLayer::Attention(a) => {
                    out.extend([&a.fc1_w, &a.fc1_b, &a.fc2_w, &a.fc2_b])
                }
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        let mut out: Vec<&mut ParamTensor> = Vec::new();
        for l in &mut self.layers {
            match l {
                DecoderLayer::Conv(c) => out.extend([&mut c.weight, &mut c.bias]),
                DecoderLayer::Upsample { .. } => {}
                DecoderLayer::Attention(a) => out.extend([
                    &mut a.fc1_w,
                    &mut a.fc1_b,
                    &mut a.fc2_w,
                    &mut a.fc2_b,
                ]),
            }
        }
        out
    }

    pub fn load(&self, tape: &mut Tape, requires_grad: bool) -> Result<DecoderVars> {
        let n = self.layers.len();
        let mut layers = Vec::with_capacity(n);
        for (i, l) in self.layers.iter().enumerate() {
            layers.push(match l {
                DecoderLayer::Conv(c) => DecoderLayerVars::Conv {
                    name: c.name.clone(),
                    w: c.weight.to_var(tape, requires_grad)?,
                    b: c.bias.to_var(tape, requires_grad)?,
                    stride: c.stride,
                    pad: c.pad,
                    modulatable: c.weight.modulatable,
                    is_output: i == n - 1,
                },
                DecoderLayer::Upsample { factor, .. } => DecoderLayerVars::Upsample { factor: *factor },
                DecoderLayer::Attention(a) => DecoderLayerVars::Attention {
                    name: a.name.clone(),
                    fc1_w: a.fc1_w.to_var(tape, requires_grad)?,
                    fc1_b: a.fc1_b.to_var(tape, requires_grad)?,
                    fc2_w: a.fc2_w.to_var(tape, requires_grad)?,
                    fc2_b: a.fc2_b.to_var(tape, requires_grad)?,
                    modulatable: a.fc2_w.modulatable,
                },
            });
        }
        Ok(DecoderVars { layers })
    }
}

fn style_for(style: Option<&ModulationStyle>, name: &str) -> Result<Option<Var>> {
    match style {
        None => Ok(None),
        Some(s) => s.get(name).map(Some).ok_or_else(|| Error::ShapeMismatch {
            op: "decode",
            detail: format!("style is missing modulatable layer {name:?}"),
        }),
    }
}

/// x_hat = D(style, z). A `None` style runs the unmodulated base decoder.
/// Output has shape (n, 3, 4H, 4W) with values clamped to [0,1].
pub fn decode(
    tape: &mut Tape,
    dec: &DecoderVars,
    style: Option<&ModulationStyle>,
    z: Var,
) -> Result<Var> {
    let s = tape.shape(z).to_vec();
    if s.len() != 4 || s[1] != LATENT_CHANNELS {
        return Err(Error::ShapeMismatch {
            op: "decode",
            detail: format!("latent {s:?} must be (n,{LATENT_CHANNELS},h,w)"),
        });
    }
    let mut h = z;
    for l in &dec.layers {
        match l {
            DecoderLayerVars::Conv {
                name,
                w,
                b,
                stride,
                pad,
                modulatable,
                is_output,
            } => {
                let w_eff = if *modulatable {
                    match style_for(style, name)? {
                        Some(u) => crate::codec::modulate_weights(tape, *w, u)?,
                        None => *w,
                    }
                } else {
                    *w
                };
                h = tape.conv2d(h, w_eff, *stride, *pad)?;
                h = tape.bias_add(h, *b, 1)?;
                if *is_output {
                    h = tape.clamp(h, 0.0, 1.0)?;
                } else {
                    h = tape.leaky_relu(h, LEAKY_SLOPE)?;
                }
            }
            DecoderLayerVars::Upsample { factor } => {
                h = tape.nearest_upsample2d(h, *factor)?;
            }
            DecoderLayerVars::Attention {
                name,
                fc1_w,
                fc1_b,
                fc2_w,
                fc2_b,
                modulatable,
            } => {
                let hs = tape.shape(h).to_vec();
                if hs[2] != hs[3] {
                    return Err(Error::ShapeMismatch {
                        op: "decode",
                        detail: format!("attention needs square maps, got {hs:?}"),
                    });
                }
                let pooled = tape.avg_pool2d(h, hs[2])?; // (1,c,1,1)
                let col = tape.reshape(pooled, &[hs[1], 1])?;
                let a = tape.matmul(*fc1_w, col)?;
                let a = tape.bias_add(a, *fc1_b, 0)?;
                let a = tape.leaky_relu(a, LEAKY_SLOPE)?;
                let fc2_eff = if *modulatable {
                    match style_for(style, name)? {
                        Some(u) => crate::codec::modulate_weights(tape, *fc2_w, u)?,
                        None => *fc2_w,
                    }
                } else {
                    *fc2_w
                };
                let g = tape.matmul(fc2_eff, a)?;
                let g = tape.bias_add(g, *fc2_b, 0)?;
                let g = tape.sigmoid(g)?;
                let g = tape.reshape(g, &[hs[1]])?;
                h = tape.broadcast_scale(h, g, 1)?;
            }
        }
    }
    Ok(h)
}

/// A decoder with one user's modulation folded into its weights. Accepts
/// latent input only; carries no mapping-network or affine parameters.
#[derive(Clone, Debug)]
pub struct StampedDecoder {
    pub decoder: DecoderParams,
    pub fingerprint_hash: [u8; 32],
}

/// Fold a concrete style (plain per-layer vectors) into decoder weights.
pub fn stamp(
    dec: &DecoderParams,
    style: &[(String, Vec<f32>)],
    fingerprint_hash: [u8; 32],
) -> Result<StampedDecoder> {
    let mut baked = dec.clone();
    for layer in &mut baked.layers {
        let Some(d_j) = layer.modulated_channels() else {
            continue;
        };
        let name = layer.name().to_string();
        let u = style
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, u)| u)
            .ok_or_else(|| Error::ShapeMismatch {
                op: "stamp",
                detail: format!("style is missing modulatable layer {name:?}"),
            })?;
        if u.len() != d_j {
            return Err(Error::ShapeMismatch {
                op: "stamp",
                detail: format!("style for {name:?} has {} entries, layer has {d_j}", u.len()),
            });
        }
        let weight = match layer {
            DecoderLayer::Conv(c) => &mut c.weight,
            DecoderLayer::Attention(a) => &mut a.fc2_w,
            DecoderLayer::Upsample { .. } => unreachable!(),
        };
        let inner: usize = weight.shape[1..].iter().product();
        for (j, uj) in u.iter().enumerate() {
            for v in &mut weight.data[j * inner..(j + 1) * inner] {
                *v *= uj;
            }
        }
    }
    Ok(StampedDecoder {
        decoder: baked,
        fingerprint_hash,
    })
}

/// Evaluate a style to plain per-layer vectors for stamping or inspection.
pub fn concrete_style(
    mapping: &crate::codec::MappingNet,
    affine: &crate::codec::AffineLayers,
    phi: &crate::codec::Fingerprint,
) -> Result<Vec<(String, Vec<f32>)>> {
    let mut tape = Tape::new();
    let mv = mapping.load(&mut tape, false)?;
    let av = affine.load(&mut tape, false)?;
    let pv = crate::codec::fingerprint_var(&mut tape, phi)?;
    let w = crate::codec::map_fingerprint(&mut tape, &mv, pv)?;
    let style = crate::codec::compute_style(&mut tape, &av, w)?;
    Ok(style
        .per_layer
        .iter()
        .map(|(n, v)| (n.clone(), tape.data(*v).to_vec()))
        .collect())
}

/// Load a concrete style onto a tape (constants), e.g. for paired decoding.
pub fn style_to_tape(tape: &mut Tape, style: &[(String, Vec<f32>)]) -> Result<ModulationStyle> {
    let mut per_layer = Vec::with_capacity(style.len());
    for (n, u) in style {
        let v = tape.constant(u.clone(), &[u.len(), 1])?;
        per_layer.push((n.clone(), v));
    }
    Ok(ModulationStyle { per_layer })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{sample_fingerprint, AffineLayers, MappingNet};
    use crate::rng::rng_for;
    use rand::Rng;

    fn seeded_image(side: usize, seed: u64) -> Vec<f32> {
        let mut rng = rng_for(seed, "img", &[]);
        (0..3 * side * side).map(|_| rng.gen::<f32>()).collect()
    }

    #[test]
    fn encode_shapes_latent_quarter_resolution() {
        let mut rng = rng_for(1, "init", &[]);
        let enc = EncoderParams::init(&mut rng);
        let mut tape = Tape::new();
        let ev = enc.load(&mut tape, false).unwrap();
        let x = tape.constant(seeded_image(32, 2), &[1, 3, 32, 32]).unwrap();
        let z = encode(&mut tape, &ev, x).unwrap();
        assert_eq!(tape.shape(z), &[1, LATENT_CHANNELS, 8, 8]);
    }

    #[test]
    fn encode_rejects_bad_shape() {
        let mut rng = rng_for(1, "init", &[]);
        let enc = EncoderParams::init(&mut rng);
        let mut tape = Tape::new();
        let ev = enc.load(&mut tape, false).unwrap();
        let x = tape.constant(vec![0.0; 3 * 30 * 30], &[1, 3, 30, 30]).unwrap();
        assert!(encode(&mut tape, &ev, x).is_err());
    }

    #[test]
    fn encode_is_deterministic() {
        let mut rng = rng_for(1, "init", &[]);
        let enc = EncoderParams::init(&mut rng);
        let run = || {
            let mut tape = Tape::new();
            let ev = enc.load(&mut tape, false).unwrap();
            let x = tape.constant(seeded_image(16, 4), &[1, 3, 16, 16]).unwrap();
            let z = encode(&mut tape, &ev, x).unwrap();
            tape.data(z).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn zero_image_zero_bias_gives_zero_latent() {
        let mut rng = rng_for(1, "init", &[]);
        let enc = EncoderParams::init(&mut rng);
        let mut tape = Tape::new();
        let ev = enc.load(&mut tape, false).unwrap();
        let x = tape.constant(vec![0.0; 3 * 16 * 16], &[1, 3, 16, 16]).unwrap();
        let z = encode(&mut tape, &ev, x).unwrap();
        assert!(tape.data(z).iter().all(|&v| v == 0.0));
    }

    fn identity_codec(dec: &DecoderParams, d_phi: usize, seed: u64) -> (MappingNet, AffineLayers) {
        let mut rng = rng_for(seed, "codec", &[]);
        let mapping = MappingNet::init(d_phi, &mut rng);
        let affine = AffineLayers::init(&dec.modulatable_channels(), mapping.d_m());
        (mapping, affine)
    }

    #[test]
    fn identity_style_matches_unmodulated_decode() {
        let mut rng = rng_for(3, "init", &[]);
        let dec = DecoderParams::init(Variant::All, &mut rng);
        let (mapping, affine) = identity_codec(&dec, 16, 4);
        let z_data: Vec<f32> = {
            let mut r = rng_for(5, "z", &[]);
            (0..LATENT_CHANNELS * 16).map(|_| r.gen::<f32>() - 0.5).collect()
        };
        for seed in 0..50u64 {
            let phi = sample_fingerprint(16, seed).unwrap();
            let style = concrete_style(&mapping, &affine, &phi).unwrap();
            let mut tape = Tape::new();
            let dv = dec.load(&mut tape, false).unwrap();
            let z = tape.constant(z_data.clone(), &[1, LATENT_CHANNELS, 4, 4]).unwrap();
            let sv = style_to_tape(&mut tape, &style).unwrap();
            let modulated = decode(&mut tape, &dv, Some(&sv), z).unwrap();
            let base = decode(&mut tape, &dv, None, z).unwrap();
            let max = tape
                .data(modulated)
                .iter()
                .zip(tape.data(base))
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            assert!(max < 1e-6, "phi-dependent output at init: {max}");
        }
    }

    #[test]
    fn decoder_output_in_unit_range_and_image_shaped() {
        let mut rng = rng_for(9, "init", &[]);
        let dec = DecoderParams::init(Variant::ConvOnly, &mut rng);
        let mut tape = Tape::new();
        let dv = dec.load(&mut tape, false).unwrap();
        let mut r = rng_for(4, "z", &[]);
        let z_data: Vec<f32> = (0..LATENT_CHANNELS * 64).map(|_| 3.0 * (r.gen::<f32>() - 0.5)).collect();
        let z = tape.constant(z_data, &[1, LATENT_CHANNELS, 8, 8]).unwrap();
        let y = decode(&mut tape, &dv, None, z).unwrap();
        assert_eq!(tape.shape(y), &[1, 3, 32, 32]);
        assert!(tape.data(y).iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn stamp_all_ones_style_keeps_weights() {
        let mut rng = rng_for(11, "init", &[]);
        let dec = DecoderParams::init(Variant::All, &mut rng);
        let style: Vec<(String, Vec<f32>)> = dec
            .modulatable_channels()
            .into_iter()
            .map(|(n, c)| (n, vec![1.0; c]))
            .collect();
        let baked = stamp(&dec, &style, [0; 32]).unwrap();
        for (a, b) in baked.decoder.params().iter().zip(dec.params()) {
            assert_eq!(a.data, b.data, "layer {}", a.name);
        }
    }

    #[test]
    fn stamp_forward_equals_modulated_decode() {
        let mut rng = rng_for(13, "init", &[]);
        let dec = DecoderParams::init(Variant::All, &mut rng);
        let (mapping, affine) = {
            // non-identity codec so the style actually perturbs weights
            let mut r = rng_for(14, "codec", &[]);
            let mapping = MappingNet::init(8, &mut r);
            let mut affine = AffineLayers::init(&dec.modulatable_channels(), mapping.d_m());
            for p in affine.params_mut() {
                for v in p.data.iter_mut() {
                    *v += 0.05 * crate::params::gaussian(&mut r) as f32;
                }
            }
            (mapping, affine)
        };
        let phi = sample_fingerprint(8, 21).unwrap();
        let style = concrete_style(&mapping, &affine, &phi).unwrap();
        let baked = stamp(&dec, &style, phi.digest()).unwrap();
        let mut worst = 0.0f32;
        for zi in 0..100u64 {
            let mut r = rng_for(zi, "z-oracle", &[]);
            let z_data: Vec<f32> = (0..LATENT_CHANNELS * 16).map(|_| r.gen::<f32>() - 0.5).collect();

            let mut t1 = Tape::new();
            let dv = dec.load(&mut t1, false).unwrap();
            let z1 = t1.constant(z_data.clone(), &[1, LATENT_CHANNELS, 4, 4]).unwrap();
            let sv = style_to_tape(&mut t1, &style).unwrap();
            let a = decode(&mut t1, &dv, Some(&sv), z1).unwrap();

            let mut t2 = Tape::new();
            let bv = baked.decoder.load(&mut t2, false).unwrap();
            let z2 = t2.constant(z_data, &[1, LATENT_CHANNELS, 4, 4]).unwrap();
            let b = decode(&mut t2, &bv, None, z2).unwrap();

            for (x, y) in t1.data(a).iter().zip(t2.data(b)) {
                worst = worst.max((x - y).abs());
            }
        }
        assert!(worst < 1e-6, "stamped forward deviates by {worst}");
    }

    #[test]
    fn stamp_same_fingerprint_same_hash() {
        let phi = sample_fingerprint(16, 3).unwrap();
        assert_eq!(phi.digest(), phi.digest());
    }
}
