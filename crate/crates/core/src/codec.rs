//! Fingerprint sampling, the mapping network, per-layer affine transforms,
//! and the per-output-channel weight modulation rule.

use crate::error::{Error, Result};
use crate::params::{ParamTensor, TensorKind};
use crate::rng::rng_for;
use crate::tensor::{Tape, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Leaky-relu slope used inside the mapping network.
pub const MAPPING_SLOPE: f32 = 0.2;

/// A d_phi-length bit vector identifying one user.
#[derive(Clone, PartialEq, Eq, Debug, Hash)]
pub struct Fingerprint {
    bits: Vec<u8>,
}

impl Fingerprint {
    pub fn from_bits(bits: Vec<u8>) -> Result<Self> {
        if bits.is_empty() {
            return Err(Error::InvalidArgument("fingerprint must be non-empty".into()));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::InvalidArgument("fingerprint bits must be 0 or 1".into()));
        }
        Ok(Fingerprint { bits })
    }

    pub fn d_phi(&self) -> usize {
        self.bits.len()
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn as_floats(&self) -> Vec<f32> {
        self.bits.iter().map(|&b| b as f32).collect()
    }

    pub fn complement(&self) -> Fingerprint {
        Fingerprint {
            bits: self.bits.iter().map(|b| 1 - b).collect(),
        }
    }

    pub fn hamming(&self, other: &Fingerprint) -> Result<usize> {
        if self.d_phi() != other.d_phi() {
            return Err(Error::InvalidArgument(format!(
                "fingerprint length mismatch: {} vs {}",
                self.d_phi(),
                other.d_phi()
            )));
        }
        Ok(self
            .bits
            .iter()
            .zip(&other.bits)
            .filter(|(a, b)| a != b)
            .count())
    }

    /// Hex rendering, most-significant bit first, zero-padded at the front.
    pub fn to_hex(&self) -> String {
        let pad = (4 - self.bits.len() % 4) % 4;
        let mut out = String::new();
        let mut nibble = 0u8;
        let mut count = pad;
        for &b in &self.bits {
            nibble = (nibble << 1) | b;
            count += 1;
            if count == 4 {
                out.push(char::from_digit(nibble as u32, 16).unwrap());
                nibble = 0;
                count = 0;
            }
        }
        out
    }

    pub fn from_hex(s: &str, d_phi: usize) -> Result<Self> {
        let mut bits = Vec::with_capacity(s.len() * 4);
        for ch in s.chars() {
            let v = ch
                .to_digit(16)
                .ok_or_else(|| Error::Parse(format!("invalid hex digit {ch:?} in fingerprint")))?
                as u8;
            for k in (0..4).rev() {
                bits.push((v >> k) & 1);
            }
        }
        let pad = (4 - d_phi % 4) % 4;
        if bits.len() != d_phi + pad || bits[..pad].iter().any(|&b| b != 0) {
            return Err(Error::Parse(format!(
                "hex fingerprint {s:?} does not encode {d_phi} bits"
            )));
        }
        Fingerprint::from_bits(bits.split_off(pad))
    }

    /// SHA-256 digest of the canonical hex form.
    pub fn digest(&self) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(self.d_phi().to_le_bytes());
        h.update(self.to_hex().as_bytes());
        h.finalize().into()
    }
}

/// Bernoulli(0.5) fingerprint, deterministic per seed.
pub fn sample_fingerprint(d_phi: usize, seed: u64) -> Result<Fingerprint> {
    if d_phi == 0 {
        return Err(Error::InvalidArgument("d_phi must be at least 1".into()));
    }
    let mut rng = rng_for(seed, "fingerprint", &[]);
    sample_fingerprint_with(d_phi, &mut rng)
}

pub fn sample_fingerprint_with(d_phi: usize, rng: &mut ChaCha8Rng) -> Result<Fingerprint> {
    if d_phi == 0 {
        return Err(Error::InvalidArgument("d_phi must be at least 1".into()));
    }
    Fingerprint::from_bits((0..d_phi).map(|_| rng.gen::<bool>() as u8).collect())
}

/// Two fully connected layers taking d_phi bits to a d_M representation,
/// with d_M = 4 * d_phi.
#[derive(Clone, Debug)]
pub struct MappingNet {
    pub w1: ParamTensor,
    pub b1: ParamTensor,
    pub w2: ParamTensor,
    pub b2: ParamTensor,
}

pub struct MappingNetVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl MappingNet {
    pub fn d_phi(&self) -> usize {
        self.w1.shape[1]
    }

    pub fn d_m(&self) -> usize {
        self.w1.shape[0]
    }

    pub fn init(d_phi: usize, rng: &mut ChaCha8Rng) -> Self {
        let d_m = 4 * d_phi;
        MappingNet {
            w1: ParamTensor::he_normal("map.w1", vec![d_m, d_phi], d_phi, TensorKind::Dense, rng),
            b1: ParamTensor::zeros("map.b1", vec![d_m], TensorKind::Bias),
            w2: ParamTensor::he_normal("map.w2", vec![d_m, d_m], d_m, TensorKind::Dense, rng),
            b2: ParamTensor::zeros("map.b2", vec![d_m], TensorKind::Bias),
        }
    }

    pub fn params(&self) -> Vec<&ParamTensor> {
        vec![&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn load(&self, tape: &mut Tape, requires_grad: bool) -> Result<MappingNetVars> {
        Ok(MappingNetVars {
            w1: self.w1.to_var(tape, requires_grad)?,
            b1: self.b1.to_var(tape, requires_grad)?,
            w2: self.w2.to_var(tape, requires_grad)?,
            b2: self.b2.to_var(tape, requires_grad)?,
        })
    }
}

/// phi (as a (d_phi,1) column of {0,1} floats) -> (d_M,1) representation.
pub fn map_fingerprint(tape: &mut Tape, net: &MappingNetVars, phi: Var) -> Result<Var> {
    let d_phi = tape.shape(net.w1)[1];
    if tape.shape(phi) != [d_phi, 1] {
        return Err(Error::ShapeMismatch {
            op: "map_fingerprint",
            detail: format!("phi {:?} vs mapping input width {}", tape.shape(phi), d_phi),
        });
    }
    let h = tape.matmul(net.w1, phi)?;
    let h = tape.bias_add(h, net.b1, 0)?;
    let h = tape.leaky_relu(h, MAPPING_SLOPE)?;
    let y = tape.matmul(net.w2, h)?;
    tape.bias_add(y, net.b2, 0)
}

/// Load a fingerprint on the tape as a (d_phi,1) constant column.
pub fn fingerprint_var(tape: &mut Tape, phi: &Fingerprint) -> Result<Var> {
    tape.constant(phi.as_floats(), &[phi.d_phi(), 1])
}

/// One affine transform per modulatable decoder layer, keyed by layer name.
#[derive(Clone, Debug)]
pub struct AffineLayer {
    pub layer_name: String,
    pub weight: ParamTensor, // (d_j, d_M)
    pub bias: ParamTensor,   // (d_j), initialized to 1.0
}

#[derive(Clone, Debug, Default)]
pub struct AffineLayers {
    pub layers: Vec<AffineLayer>,
}

pub struct AffineVars {
    pub per_layer: Vec<(String, Var, Var)>,
}

impl AffineLayers {
    /// Identity initialization: zero weights, unit bias, so every style is
    /// all-ones at step 0 and the modulated decoder matches the base decoder.
    pub fn init(layer_channels: &[(String, usize)], d_m: usize) -> Self {
        let layers = layer_channels
            .iter()
            .map(|(name, d_j)| AffineLayer {
                layer_name: name.clone(),
                weight: ParamTensor::zeros(
                    format!("aff.{name}.w"),
                    vec![*d_j, d_m],
                    TensorKind::Dense,
                ),
                bias: ParamTensor::filled(format!("aff.{name}.b"), 1.0, vec![*d_j], TensorKind::Bias),
            })
            .collect();
        AffineLayers { layers }
    }

    pub fn params(&self) -> Vec<&ParamTensor> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn load(&self, tape: &mut Tape, requires_grad: bool) -> Result<AffineVars> {
        let mut per_layer = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            per_layer.push((
                l.layer_name.clone(),
                l.weight.to_var(tape, requires_grad)?,
                l.bias.to_var(tape, requires_grad)?,
            ));
        }
        Ok(AffineVars { per_layer })
    }
}

/// Per-layer scale vectors u, keyed by decoder layer name; each entry is a
/// (d_j, 1) column on the tape.
pub struct ModulationStyle {
    pub per_layer: Vec<(String, Var)>,
}

impl ModulationStyle {
    pub fn get(&self, layer: &str) -> Option<Var> {
        self.per_layer
            .iter()
            .find(|(n, _)| n == layer)
            .map(|(_, v)| *v)
    }
}

/// u_l = A_l(w) for every affine layer, from the (d_M,1) representation.
pub fn compute_style(tape: &mut Tape, affine: &AffineVars, w: Var) -> Result<ModulationStyle> {
    let mut per_layer = Vec::with_capacity(affine.per_layer.len());
    for (name, aw, ab) in &affine.per_layer {
        let u = tape.matmul(*aw, w)?;
        let u = tape.bias_add(u, *ab, 0)?;
        per_layer.push((name.clone(), u));
    }
    Ok(ModulationStyle { per_layer })
}

/// Scale every output-channel slice of W by the matching entry of u.
/// W is (o, ...) with o output channels; u is a length-o vector or (o,1).
pub fn modulate_weights(tape: &mut Tape, w: Var, u: Var) -> Result<Var> {
    let o = tape.shape(w)[0];
    if tape.data(u).len() != o {
        return Err(Error::ShapeMismatch {
            op: "modulate_weights",
            detail: format!(
                "scale of {} entries vs {} output channels",
                tape.data(u).len(),
                o
            ),
        });
    }
    let u_flat = if tape.shape(u).len() == 1 {
        u
    } else {
        tape.reshape(u, &[o])?
    };
    tape.broadcast_scale(w, u_flat, 0)
}
