//! The fingerprint decoding network: a small CNN mapping images back to
//! fingerprint logits, plus hard thresholding to bits.

use crate::codec::Fingerprint;
use crate::error::{Error, Result};
use crate::model::{ConvLayer, LEAKY_SLOPE};
use crate::params::{ParamTensor, TensorKind};
use crate::tensor::{kernels, Tape, Var};
use rand_chacha::ChaCha8Rng;

/// Four stride-2 conv blocks (3 -> 32 -> 64 -> 128 -> 128), global average
/// pool, one dense layer to d_phi logits.
#[derive(Clone, Debug)]
pub struct DecoderNetParams {
    pub convs: Vec<ConvLayer>,
    pub fc_w: ParamTensor, // (d_phi, 128)
    pub fc_b: ParamTensor, // (d_phi)
    pub resolution: usize,
}

pub struct DecoderNetVars {
    convs: Vec<(Var, Var, usize, usize)>,
    fc_w: Var,
    fc_b: Var,
}

impl DecoderNetParams {
    pub fn init(d_phi: usize, resolution: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut convs = Vec::new();
        let widths = [3usize, 32, 64, 128, 128];
        for i in 0..4 {
            convs.push(conv_block(i, widths[i], widths[i + 1], rng));
        }
        DecoderNetParams {
            convs,
            fc_w: ParamTensor::he_normal("fp.fc.w", vec![d_phi, 128], 128, TensorKind::Dense, rng),
            fc_b: ParamTensor::zeros("fp.fc.b", vec![d_phi], TensorKind::Bias),
            resolution,
        }
    }

    pub fn d_phi(&self) -> usize {
        self.fc_w.shape[0]
    }

    pub fn params(&self) -> Vec<&ParamTensor> {
        let mut out: Vec<&ParamTensor> = self
            .convs
            .iter()
            .flat_map(|c| [&c.weight, &c.bias])
            .collect();
        out.extend([&self.fc_w, &self.fc_b]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        let mut out: Vec<&mut ParamTensor> = self
            .convs
            .iter_mut()
            .flat_map(|c| [&mut c.weight, &mut c.bias])
            .collect();
        out.extend([&mut self.fc_w, &mut self.fc_b]);
        out
    }

    pub fn load(&self, tape: &mut Tape, requires_grad: bool) -> Result<DecoderNetVars> {
        let mut convs = Vec::with_capacity(self.convs.len());
        for c in &self.convs {
            convs.push((
                c.weight.to_var(tape, requires_grad)?,
                c.bias.to_var(tape, requires_grad)?,
                c.stride,
                c.pad,
            ));
        }
        Ok(DecoderNetVars {
            convs,
            fc_w: self.fc_w.to_var(tape, requires_grad)?,
            fc_b: self.fc_b.to_var(tape, requires_grad)?,
        })
    }

    fn check_resolution(&self, tape: &Tape, x: Var) -> Result<()> {
        let s = tape.shape(x);
        if s.len() != 4 || s[0] != 1 || s[1] != 3 || s[2] != self.resolution || s[3] != self.resolution
        {
            return Err(Error::ShapeMismatch {
                op: "decode_logits",
                detail: format!(
                    "{s:?} does not match training resolution (1,3,{r},{r})",
                    r = self.resolution
                ),
            });
        }
        Ok(())
    }
}

fn conv_block(i: usize, in_ch: usize, out_ch: usize, rng: &mut ChaCha8Rng) -> ConvLayer {
    ConvLayer {
        name: format!("conv{}", i + 1),
        weight: ParamTensor::he_normal(
            format!("fp.conv{}.w", i + 1),
            vec![out_ch, in_ch, 3, 3],
            in_ch * 9,
            TensorKind::Conv,
            rng,
        ),
        bias: ParamTensor::zeros(format!("fp.conv{}.b", i + 1), vec![out_ch], TensorKind::Bias),
        stride: 2,
        pad: 1,
    }
}

/// Raw logits (a (d_phi,1) column) for an image already on the tape.
///
/// The stack runs on a high-pass residual (input minus its 2x2 local mean)
/// rather than the raw image: fingerprint modulation lives in fine detail,
/// while scene content is mostly flat, so the residual has a far better
/// signal-to-content ratio.
pub fn decode_logits_var(tape: &mut Tape, net: &DecoderNetVars, x: Var) -> Result<Var> {
    let pooled = tape.avg_pool2d(x, 2)?;
    let coarse = tape.nearest_upsample2d(pooled, 2)?;
    let mut h = tape.sub(x, coarse)?;
    for &(w, b, stride, pad) in &net.convs {
        h = tape.conv2d(h, w, stride, pad)?;
        h = tape.bias_add(h, b, 1)?;
        h = tape.leaky_relu(h, LEAKY_SLOPE)?;
    }
    let s = tape.shape(h).to_vec();
    let pooled = tape.avg_pool2d(h, s[2])?;
    let col = tape.reshape(pooled, &[s[1], 1])?;
    let y = tape.matmul(net.fc_w, col)?;
    tape.bias_add(y, net.fc_b, 0)
}

/// Logits for a plain image buffer (1,3,res,res).
pub fn decode_logits(params: &DecoderNetParams, image: &[f32]) -> Result<Vec<f32>> {
    let r = params.resolution;
    let mut tape = Tape::new();
    let x = tape.constant(image.to_vec(), &[1, 3, r, r])?;
    params.check_resolution(&tape, x)?;
    let net = params.load(&mut tape, false)?;
    let y = decode_logits_var(&mut tape, &net, x)?;
    Ok(tape.data(y).to_vec())
}

/// Hard threshold: bit = 1 where sigmoid(logit) > 0.5 (ties resolve to 0).
pub fn bits_from_logits(logits: &[f32]) -> Fingerprint {
    Fingerprint::from_bits(
        logits
            .iter()
            .map(|&l| (kernels::sigmoid(l) > 0.5) as u8)
            .collect(),
    )
    .expect("logit vector is non-empty")
}

/// Estimated fingerprint for an image buffer.
pub fn decode_bits(params: &DecoderNetParams, image: &[f32]) -> Result<Fingerprint> {
    Ok(bits_from_logits(&decode_logits(params, image)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;
    use rand::Rng;

    fn net(d_phi: usize, res: usize, seed: u64) -> DecoderNetParams {
        let mut rng = rng_for(seed, "fpnet", &[]);
        DecoderNetParams::init(d_phi, res, &mut rng)
    }

    fn image(res: usize, seed: u64) -> Vec<f32> {
        let mut rng = rng_for(seed, "img", &[]);
        (0..3 * res * res).map(|_| rng.gen::<f32>()).collect()
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let mut n = net(8, 16, 1);
        for p in n.params_mut() {
            p.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let logits = decode_logits(&n, &image(16, 2)).unwrap();
        assert!(logits.iter().all(|&l| l == 0.0));
        // sigma -> 0.5 per bit; ties resolve to 0
        assert!(decode_bits(&n, &image(16, 2))
            .unwrap()
            .bits()
            .iter()
            .all(|&b| b == 0));
    }

    #[test]
    fn logits_deterministic() {
        let n = net(16, 16, 3);
        let img = image(16, 4);
        assert_eq!(
            decode_logits(&n, &img).unwrap(),
            decode_logits(&n, &img).unwrap()
        );
    }

    #[test]
    fn resolution_mismatch_rejected() {
        let n = net(16, 32, 5);
        assert!(decode_logits(&n, &image(16, 6)).is_err());
    }

    #[test]
    fn threshold_rule() {
        assert_eq!(bits_from_logits(&[3.0, -3.0]).bits(), &[1, 0]);
        assert_eq!(bits_from_logits(&[0.0, 0.0]).bits(), &[0, 0]);
    }

    #[test]
    fn threshold_sign_flip_flips_exactly_one_bit() {
        let logits = vec![1.2, -0.4, 2.0, -3.0];
        let base = bits_from_logits(&logits);
        for i in 0..logits.len() {
            let mut flipped = logits.clone();
            flipped[i] = -flipped[i];
            let got = bits_from_logits(&flipped);
            let diff = base.hamming(&got).unwrap();
            assert_eq!(diff, 1, "flipping logit {i} changed {diff} bits");
        }
    }

    #[test]
    fn threshold_invariant_to_positive_rescale() {
        let logits = vec![0.7, -1.1, 0.01, -0.02, 5.0];
        let base = bits_from_logits(&logits);
        for scale in [0.1f32, 2.0, 37.5] {
            let scaled: Vec<f32> = logits.iter().map(|l| l * scale).collect();
            assert_eq!(bits_from_logits(&scaled), base);
        }
    }

    #[test]
    fn single_block_matches_layer_by_layer_oracle() {
        // one conv block + pool + dense, recomputed with scalar loops
        let mut rng = rng_for(9, "oracle", &[]);
        let w: Vec<f32> = (0..4 * 3 * 3 * 3)
            .map(|_| crate::params::gaussian(&mut rng) as f32 * 0.2)
            .collect();
        let b: Vec<f32> = (0..4).map(|_| crate::params::gaussian(&mut rng) as f32 * 0.1).collect();
        let img = image(8, 10);

        // oracle: direct convolution stride 2 pad 1, leaky relu, mean pool, dense
        let (res, oc, ic) = (8usize, 4usize, 3usize);
        let or = res / 2;
        let mut feat = vec![0.0f64; oc * or * or];
        for o in 0..oc {
            for oy in 0..or {
                for ox in 0..or {
                    let mut s = b[o] as f64;
                    for c in 0..ic {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if iy < 0 || ix < 0 || iy >= res as isize || ix >= res as isize {
                                    continue;
                                }
                                s += (img[(c * res + iy as usize) * res + ix as usize]
                                    * w[((o * ic + c) * 3 + ky) * 3 + kx])
                                    as f64;
                            }
                        }
                    }
                    feat[(o * or + oy) * or + ox] = if s >= 0.0 { s } else { 0.2 * s };
                }
            }
        }
        let fcw: Vec<f32> = (0..2 * 4).map(|_| crate::params::gaussian(&mut rng) as f32).collect();
        let mut want = [0.0f64; 2];
        for i in 0..2 {
            for o in 0..oc {
                let mean: f64 =
                    feat[o * or * or..(o + 1) * or * or].iter().sum::<f64>() / (or * or) as f64;
                want[i] += fcw[i * 4 + o] as f64 * mean;
            }
        }

        let mut tape = Tape::new();
        let x = tape.constant(img, &[1, 3, 8, 8]).unwrap();
        let wv = tape.constant(w, &[4, 3, 3, 3]).unwrap();
        let bv = tape.constant(b, &[4]).unwrap();
        let h = tape.conv2d(x, wv, 2, 1).unwrap();
        let h = tape.bias_add(h, bv, 1).unwrap();
        let h = tape.leaky_relu(h, LEAKY_SLOPE).unwrap();
        let p = tape.avg_pool2d(h, 4).unwrap();
        let col = tape.reshape(p, &[4, 1]).unwrap();
        let fw = tape.constant(fcw, &[2, 4]).unwrap();
        let y = tape.matmul(fw, col).unwrap();
        for (got, wanted) in tape.data(y).iter().zip(&want) {
            assert!((*got as f64 - wanted).abs() < 1e-5, "{got} vs {wanted}");
        }
    }
}
