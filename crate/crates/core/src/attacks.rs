//! Differentiable image post-processing transforms, used both as
//! robust-training augmentations and as evaluation attacks. Every transform
//! preserves shape and the [0,1] range and is differentiable w.r.t. the
//! image (JPEG through straight-through rounding, erasing through a mask
//! that is constant w.r.t. the input).

use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::tensor::{SampleGrid, Tape, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::rc::Rc;

pub const CROP_GRID: [f32; 4] = [0.05, 0.10, 0.15, 0.20];
pub const ROTATION_MAX_DEG: f32 = 30.0;
pub const BLUR_GRID: [usize; 3] = [3, 5, 7];
pub const BRIGHTNESS_MAX: f32 = 0.3;
pub const NOISE_MAX_SIGMA: f32 = 0.2;
pub const ERASING_GRID: [f32; 4] = [0.05, 0.10, 0.15, 0.20];
/// Largest erasing ratio the apply contract accepts (diagnostic headroom
/// above the sampling grid).
pub const ERASING_MAX: f32 = 0.25;
pub const JPEG_GRID: [u32; 5] = [90, 80, 70, 60, 50];

/// One post-processing transform with its strength parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum AttackKind {
    Crop { ratio: f32 },
    Rotation { degrees: f32 },
    Blur { kernel: usize },
    Brightness { delta: f32 },
    Noise { sigma: f32 },
    Erasing { ratio: f32 },
    Jpeg { quality: u32 },
    Combination { parts: Vec<AttackKind> },
}

impl AttackKind {
    pub fn name(&self) -> &'static str {
        match self {
            AttackKind::Crop { .. } => "crop",
            AttackKind::Rotation { .. } => "rotation",
            AttackKind::Blur { .. } => "blur",
            AttackKind::Brightness { .. } => "brightness",
            AttackKind::Noise { .. } => "noise",
            AttackKind::Erasing { .. } => "erasing",
            AttackKind::Jpeg { .. } => "jpeg",
            AttackKind::Combination { .. } => "combination",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            AttackKind::Crop { ratio } => {
                if !CROP_GRID.iter().any(|g| (g - ratio).abs() < 1e-6) {
                    return Err(Error::AttackParameter(format!(
                        "crop ratio {ratio} not in {CROP_GRID:?}"
                    )));
                }
            }
            AttackKind::Rotation { degrees } => {
                if degrees.abs() >= ROTATION_MAX_DEG || !degrees.is_finite() {
                    return Err(Error::AttackParameter(format!(
                        "rotation degrees {degrees} outside (-{ROTATION_MAX_DEG}, {ROTATION_MAX_DEG})"
                    )));
                }
            }
            AttackKind::Blur { kernel } => {
                if !BLUR_GRID.contains(kernel) {
                    return Err(Error::AttackParameter(format!(
                        "blur kernel {kernel} not in {BLUR_GRID:?}"
                    )));
                }
            }
            AttackKind::Brightness { delta } => {
                if delta.abs() >= BRIGHTNESS_MAX || !delta.is_finite() {
                    return Err(Error::AttackParameter(format!(
                        "brightness delta {delta} outside (-{BRIGHTNESS_MAX}, {BRIGHTNESS_MAX})"
                    )));
                }
            }
            AttackKind::Noise { sigma } => {
                if !(0.0..=NOISE_MAX_SIGMA).contains(sigma) {
                    return Err(Error::AttackParameter(format!(
                        "noise sigma {sigma} outside [0, {NOISE_MAX_SIGMA}]"
                    )));
                }
            }
            AttackKind::Erasing { ratio } => {
                if !(*ratio > 0.0 && *ratio <= ERASING_MAX) {
                    return Err(Error::AttackParameter(format!(
                        "erasing ratio {ratio} outside (0, {ERASING_MAX}]"
                    )));
                }
            }
            AttackKind::Jpeg { quality } => {
                if !JPEG_GRID.contains(quality) {
                    return Err(Error::AttackParameter(format!(
                        "jpeg quality {quality} not in {JPEG_GRID:?}"
                    )));
                }
            }
            AttackKind::Combination { parts } => {
                for p in parts {
                    if matches!(p, AttackKind::Combination { .. }) {
                        return Err(Error::AttackParameter(
                            "combination cannot nest another combination".into(),
                        ));
                    }
                    p.validate()?;
                }
            }
        }
        Ok(())
    }
}

/// A transform identity plus the seed that fixes its random realization
/// (offsets, noise draws, erase position).
#[derive(Clone, Debug, PartialEq)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub seed: u64,
}

impl AttackSpec {
    pub fn new(kind: AttackKind, seed: u64) -> Result<Self> {
        kind.validate()?;
        Ok(AttackSpec { kind, seed })
    }

    /// Single-line text form `kind:key=value,key=value`.
    pub fn to_line(&self) -> String {
        let mut kv: Vec<String> = Vec::new();
        fn push_params(kind: &AttackKind, prefix: &str, kv: &mut Vec<String>) {
            match kind {
                AttackKind::Crop { ratio } => kv.push(format!("{prefix}ratio={ratio}")),
                AttackKind::Rotation { degrees } => kv.push(format!("{prefix}degrees={degrees}")),
                AttackKind::Blur { kernel } => kv.push(format!("{prefix}kernel={kernel}")),
                AttackKind::Brightness { delta } => kv.push(format!("{prefix}delta={delta}")),
                AttackKind::Noise { sigma } => kv.push(format!("{prefix}sigma={sigma}")),
                AttackKind::Erasing { ratio } => kv.push(format!("{prefix}ratio={ratio}")),
                AttackKind::Jpeg { quality } => kv.push(format!("{prefix}quality={quality}")),
                AttackKind::Combination { .. } => unreachable!("combinations do not nest"),
            }
        }
        match &self.kind {
            AttackKind::Combination { parts } => {
                let names: Vec<&str> = parts.iter().map(|p| p.name()).collect();
                kv.push(format!("parts={}", names.join("+")));
                for p in parts {
                    push_params(p, &format!("{}.", p.name()), &mut kv);
                }
            }
            other => push_params(other, "", &mut kv),
        }
        kv.push(format!("seed={}", self.seed));
        format!("{}:{}", self.kind.name(), kv.join(","))
    }

    pub fn parse(line: &str) -> Result<Self> {
        let (name, rest) = line
            .split_once(':')
            .ok_or_else(|| Error::Parse(format!("attack spec {line:?}: missing ':'")))?;
        let mut map = std::collections::HashMap::new();
        for item in rest.split(',').filter(|s| !s.is_empty()) {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("attack spec entry {item:?}: missing '='")))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let seed = match map.remove("seed") {
            Some(s) => s
                .parse::<u64>()
                .map_err(|_| Error::Parse(format!("attack seed {s:?} is not an integer")))?,
            None => 0,
        };
        fn get_f32(map: &mut std::collections::HashMap<String, String>, k: &str) -> Result<f32> {
            let v = map
                .remove(k)
                .ok_or_else(|| Error::Parse(format!("attack spec missing parameter {k:?}")))?;
            v.parse::<f32>()
                .map_err(|_| Error::Parse(format!("attack parameter {k}={v:?} is not a number")))
        }
        fn simple(
            name: &str,
            map: &mut std::collections::HashMap<String, String>,
            prefix: &str,
        ) -> Result<AttackKind> {
            let key = |k: &str| format!("{prefix}{k}");
            Ok(match name {
                "crop" => AttackKind::Crop {
                    ratio: get_f32(map, &key("ratio"))?,
                },
                "rotation" => AttackKind::Rotation {
                    degrees: get_f32(map, &key("degrees"))?,
                },
                "blur" => AttackKind::Blur {
                    kernel: get_f32(map, &key("kernel"))? as usize,
                },
                "brightness" => AttackKind::Brightness {
                    delta: get_f32(map, &key("delta"))?,
                },
                "noise" => AttackKind::Noise {
                    sigma: get_f32(map, &key("sigma"))?,
                },
                "erasing" => AttackKind::Erasing {
                    ratio: get_f32(map, &key("ratio"))?,
                },
                "jpeg" => AttackKind::Jpeg {
                    quality: get_f32(map, &key("quality"))? as u32,
                },
                other => return Err(Error::Parse(format!("unknown attack kind {other:?}"))),
            })
        }
        let kind = if name == "combination" {
            let parts_str = map
                .remove("parts")
                .ok_or_else(|| Error::Parse("combination spec missing parts=".into()))?;
            let mut parts = Vec::new();
            for p in parts_str.split('+').filter(|s| !s.is_empty()) {
                parts.push(simple(p, &mut map, &format!("{p}."))?);
            }
            AttackKind::Combination { parts }
        } else {
            simple(name, &mut map, "")?
        };
        if let Some(k) = map.keys().next() {
            return Err(Error::Parse(format!("attack spec has unknown key {k:?}")));
        }
        AttackSpec::new(kind, seed)
    }
}

/// Fixed application order inside a combination.
pub const COMBINATION_ORDER: [&str; 7] = [
    "crop",
    "rotation",
    "blur",
    "brightness",
    "noise",
    "erasing",
    "jpeg",
];

/// Draw strength parameters uniformly from the paper's grid for `kind`.
pub fn sample_spec(kind: &str, seed: u64) -> Result<AttackSpec> {
    let mut rng = rng_for(seed, "attack-sample", &[]);
    let kind = sample_kind(kind, &mut rng)?;
    AttackSpec::new(kind, seed)
}

fn sample_kind(kind: &str, rng: &mut ChaCha8Rng) -> Result<AttackKind> {
    Ok(match kind {
        "crop" => AttackKind::Crop {
            ratio: CROP_GRID[rng.gen_range(0..CROP_GRID.len())],
        },
        "rotation" => AttackKind::Rotation {
            degrees: rng.gen_range(-ROTATION_MAX_DEG..ROTATION_MAX_DEG),
        },
        "blur" => AttackKind::Blur {
            kernel: BLUR_GRID[rng.gen_range(0..BLUR_GRID.len())],
        },
        "brightness" => AttackKind::Brightness {
            delta: rng.gen_range(-BRIGHTNESS_MAX..BRIGHTNESS_MAX),
        },
        "noise" => AttackKind::Noise {
            sigma: rng.gen_range(0.0..=NOISE_MAX_SIGMA),
        },
        "erasing" => AttackKind::Erasing {
            ratio: ERASING_GRID[rng.gen_range(0..ERASING_GRID.len())],
        },
        "jpeg" => AttackKind::Jpeg {
            quality: JPEG_GRID[rng.gen_range(0..JPEG_GRID.len())],
        },
        "combination" => {
            let mut parts = Vec::new();
            for name in COMBINATION_ORDER {
                if rng.gen::<bool>() {
                    parts.push(sample_kind(name, rng)?);
                }
            }
            AttackKind::Combination { parts }
        }
        other => return Err(Error::Parse(format!("unknown attack kind {other:?}"))),
    })
}

/// Apply the attack to an image (1,3,H,W) on the tape. Shape-preserving,
/// output in [0,1], differentiable w.r.t. `x`.
pub fn apply(spec: &AttackSpec, tape: &mut Tape, x: Var) -> Result<Var> {
    spec.kind.validate()?;
    let s = tape.shape(x).to_vec();
    if s.len() != 4 || s[1] != 3 {
        return Err(Error::ShapeMismatch {
            op: "attack",
            detail: format!("{s:?} must be (1,3,h,w)"),
        });
    }
    let mut rng = rng_for(spec.seed, "attack-apply", &[]);
    apply_kind(&spec.kind, tape, x, &mut rng)
}

fn apply_kind(kind: &AttackKind, tape: &mut Tape, x: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (h, w) = (s[2], s[3]);
    match kind {
        AttackKind::Crop { ratio } => {
            let keep = (1.0 - ratio).sqrt();
            let wh = ((h as f32 * keep).round() as usize).clamp(1, h);
            let ww = ((w as f32 * keep).round() as usize).clamp(1, w);
            let oy = rng.gen_range(0..=(h - wh)) as f32;
            let ox = rng.gen_range(0..=(w - ww)) as f32;
            let grid = resize_grid(h, w, wh, ww, oy, ox);
            let y = tape.sample_bilinear(x, Rc::new(grid))?;
            tape.clamp(y, 0.0, 1.0)
        }
        AttackKind::Rotation { degrees } => {
            if *degrees == 0.0 {
                return Ok(x);
            }
            let theta = (*degrees as f64).to_radians();
            let (sin, cos) = (theta.sin(), theta.cos());
            let cy = (h as f64 - 1.0) / 2.0;
            let cx = (w as f64 - 1.0) / 2.0;
            let coords = (0..h * w).map(move |i| {
                let y = (i / w) as f64 - cy;
                let xx = (i % w) as f64 - cx;
                // inverse rotation maps output pixels to source pixels
                let sy = cos * y + sin * xx + cy;
                let sx = -sin * y + cos * xx + cx;
                (sy as f32, sx as f32)
            });
            let grid = SampleGrid::from_source_coords(h, w, h, w, coords);
            let y = tape.sample_bilinear(x, Rc::new(grid))?;
            tape.clamp(y, 0.0, 1.0)
        }
        AttackKind::Blur { kernel } => {
            let k = *kernel;
            let kern = gaussian_kernel(k);
            let kv = tape.constant(kern, &[1, 1, k, k])?;
            // depthwise: channels become batch items
            let xs = tape.reshape(x, &[3, 1, h, w])?;
            let y = tape.conv2d(xs, kv, 1, k / 2)?;
            let y = tape.reshape(y, &[1, 3, h, w])?;
            tape.clamp(y, 0.0, 1.0)
        }
        AttackKind::Brightness { delta } => {
            let y = tape.add_scalar(x, *delta)?;
            tape.clamp(y, 0.0, 1.0)
        }
        AttackKind::Noise { sigma } => {
            let n: Vec<f32> = (0..3 * h * w)
                .map(|_| (crate::params::gaussian(rng) * *sigma as f64) as f32)
                .collect();
            let nv = tape.constant(n, &[1, 3, h, w])?;
            let y = tape.add(x, nv)?;
            tape.clamp(y, 0.0, 1.0)
        }
        AttackKind::Erasing { ratio } => {
            let side = (ratio.sqrt() * h.min(w) as f32).round() as usize;
            let side = side.clamp(1, h.min(w));
            let oy = rng.gen_range(0..=(h - side));
            let ox = rng.gen_range(0..=(w - side));
            let mut mask = vec![1.0f32; 3 * h * w];
            for c in 0..3 {
                for y in oy..oy + side {
                    for x_ in ox..ox + side {
                        mask[(c * h + y) * w + x_] = 0.0;
                    }
                }
            }
            let mv = tape.constant(mask, &[1, 3, h, w])?;
            tape.mul(x, mv)
        }
        AttackKind::Jpeg { quality } => jpeg_surrogate(tape, x, *quality, true),
        AttackKind::Combination { parts } => {
            let mut y = x;
            for name in COMBINATION_ORDER {
                if let Some(p) = parts.iter().find(|p| p.name() == name) {
                    y = apply_kind(p, tape, y, rng)?;
                }
            }
            Ok(y)
        }
    }
}

/// Bilinear resize grid reading a window of size (wh, ww) at offset
/// (oy, ox) back to the full (h, w) resolution (align-corners).
fn resize_grid(h: usize, w: usize, wh: usize, ww: usize, oy: f32, ox: f32) -> SampleGrid {
    let sy_scale = if h > 1 { (wh - 1) as f32 / (h - 1) as f32 } else { 0.0 };
    let sx_scale = if w > 1 { (ww - 1) as f32 / (w - 1) as f32 } else { 0.0 };
    let coords = (0..h * w).map(move |i| {
        let y = (i / w) as f32;
        let x = (i % w) as f32;
        (oy + y * sy_scale, ox + x * sx_scale)
    });
    SampleGrid::from_source_coords(h, w, h, w, coords)
}

/// Normalized Gaussian kernel, sigma from the kernel size as in common
/// image libraries: 0.3*((k-1)/2 - 1) + 0.8.
fn gaussian_kernel(k: usize) -> Vec<f32> {
    let sigma = 0.3 * ((k as f64 - 1.0) / 2.0 - 1.0) + 0.8;
    let c = (k / 2) as f64;
    let mut out = Vec::with_capacity(k * k);
    let mut total = 0.0f64;
    for y in 0..k {
        for x in 0..k {
            let d2 = (y as f64 - c).powi(2) + (x as f64 - c).powi(2);
            let v = (-d2 / (2.0 * sigma * sigma)).exp();
            out.push(v);
            total += v;
        }
    }
    out.into_iter().map(|v| (v / total) as f32).collect()
}

const LUMA_QUANT: [f32; 64] = [
    16.0, 11.0, 10.0, 16.0, 24.0, 40.0, 51.0, 61.0, //
    12.0, 12.0, 14.0, 19.0, 26.0, 58.0, 60.0, 55.0, //
    14.0, 13.0, 16.0, 24.0, 40.0, 57.0, 69.0, 56.0, //
    14.0, 17.0, 22.0, 29.0, 51.0, 87.0, 80.0, 62.0, //
    18.0, 22.0, 37.0, 56.0, 68.0, 109.0, 103.0, 77.0, //
    24.0, 35.0, 55.0, 64.0, 81.0, 104.0, 113.0, 92.0, //
    49.0, 64.0, 78.0, 87.0, 103.0, 121.0, 120.0, 101.0, //
    72.0, 92.0, 95.0, 98.0, 112.0, 100.0, 103.0, 99.0,
];

const CHROMA_QUANT: [f32; 64] = [
    17.0, 18.0, 24.0, 47.0, 99.0, 99.0, 99.0, 99.0, //
    18.0, 21.0, 26.0, 66.0, 99.0, 99.0, 99.0, 99.0, //
    24.0, 26.0, 56.0, 99.0, 99.0, 99.0, 99.0, 99.0, //
    47.0, 66.0, 99.0, 99.0, 99.0, 99.0, 99.0, 99.0, //
    99.0, 99.0, 99.0, 99.0, 99.0, 99.0, 99.0, 99.0, //
    99.0, 99.0, 99.0, 99.0, 99.0, 99.0, 99.0, 99.0, //
    99.0, 99.0, 99.0, 99.0, 99.0, 99.0, 99.0, 99.0, //
    99.0, 99.0, 99.0, 99.0, 99.0, 99.0, 99.0, 99.0,
];

/// libjpeg quality scaling of a base table entry.
pub fn scaled_quant(base: f32, quality: u32) -> f32 {
    let scale = if quality < 50 {
        5000.0 / quality as f32
    } else {
        200.0 - 2.0 * quality as f32
    };
    ((base * scale + 50.0) / 100.0).floor().clamp(1.0, 255.0)
}

/// DC quantization step of the luminance table at `quality`.
pub fn luma_dc_step(quality: u32) -> f32 {
    scaled_quant(LUMA_QUANT[0], quality)
}

/// RGB -> YCbCr -> blockwise DCT -> quantize/round/dequantize -> inverse.
/// `rounding` off turns the surrogate into a (near-identity) linear path,
/// which is what the gradient checker exercises.
pub fn jpeg_surrogate(tape: &mut Tape, x: Var, quality: u32, rounding: bool) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (h, w) = (s[2], s[3]);
    if h % 8 != 0 || w % 8 != 0 {
        return Err(Error::ShapeMismatch {
            op: "jpeg",
            detail: format!("image {h}x{w} must be a multiple of 8"),
        });
    }
    // to 0..255 and YCbCr, level-shifted by -128
    let x255 = tape.mul_scalar(x, 255.0)?;
    #[rustfmt::skip]
    let fwd = vec![
        0.299f32, 0.587, 0.114,
        -0.168_736, -0.331_264, 0.5,
        0.5, -0.418_688, -0.081_312,
    ];
    let fwd_k = tape.constant(fwd, &[3, 3, 1, 1])?;
    let fwd_b = tape.constant(vec![-128.0, 0.0, 0.0], &[3])?;
    let ycc = tape.conv2d(x255, fwd_k, 1, 0)?;
    let ycc = tape.bias_add(ycc, fwd_b, 1)?;

    let coef = tape.block_dct8(ycc, false)?;

    // per-channel tiled quantization tables
    let mut qmul = Vec::with_capacity(3 * h * w);
    let mut qdmul = Vec::with_capacity(3 * h * w);
    for c in 0..3 {
        let base = if c == 0 { &LUMA_QUANT } else { &CHROMA_QUANT };
        for y in 0..h {
            for xx in 0..w {
                let q = scaled_quant(base[(y % 8) * 8 + xx % 8], quality);
                qmul.push(1.0 / q);
                qdmul.push(q);
            }
        }
    }
    let qm = tape.constant(qmul, &[1, 3, h, w])?;
    let qd = tape.constant(qdmul, &[1, 3, h, w])?;
    let mut q = tape.mul(coef, qm)?;
    if rounding {
        q = tape.round_ste(q)?;
    }
    let deq = tape.mul(q, qd)?;

    let ycc_back = tape.block_dct8(deq, true)?;
    #[rustfmt::skip]
    let inv = vec![
        1.0f32, 0.0, 1.402,
        1.0, -0.344_136, -0.714_136,
        1.0, 1.772, 0.0,
    ];
    let inv_k = tape.constant(inv, &[3, 3, 1, 1])?;
    let inv_b = tape.constant(vec![128.0, 128.0, 128.0], &[3])?;
    let rgb = tape.conv2d(ycc_back, inv_k, 1, 0)?;
    let rgb = tape.bias_add(rgb, inv_b, 1)?;
    let unit = tape.mul_scalar(rgb, 1.0 / 255.0)?;
    tape.clamp(unit, 0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, Image, SyntheticSceneSpec};
    use crate::tensor::gradcheck::grad_check;

    fn image_var(tape: &mut Tape, img: &Image, requires_grad: bool) -> Var {
        tape.leaf(img.data.clone(), &[1, 3, img.side, img.side], requires_grad)
            .unwrap()
    }

    fn scene(side: usize, i: u64) -> Image {
        generate(&SyntheticSceneSpec::new(5, side).unwrap(), i)
    }

    fn run(spec: &AttackSpec, img: &Image) -> Vec<f32> {
        let mut tape = Tape::new();
        let x = image_var(&mut tape, img, false);
        let y = apply(spec, &mut tape, x).unwrap();
        tape.data(y).to_vec()
    }

    #[test]
    fn brightness_zero_is_bitwise_identity() {
        let img = scene(16, 0);
        let spec = AttackSpec::new(AttackKind::Brightness { delta: 0.0 }, 1).unwrap();
        assert_eq!(run(&spec, &img), img.data);
    }

    #[test]
    fn noise_zero_is_identity() {
        let img = scene(16, 1);
        let spec = AttackSpec::new(AttackKind::Noise { sigma: 0.0 }, 2).unwrap();
        assert_eq!(run(&spec, &img), img.data);
    }

    #[test]
    fn rotation_zero_is_exact_identity() {
        let img = scene(16, 2);
        let spec = AttackSpec::new(AttackKind::Rotation { degrees: 0.0 }, 3).unwrap();
        assert_eq!(run(&spec, &img), img.data);
    }

    #[test]
    fn shape_and_range_preserved_for_every_kind() {
        let img = scene(16, 3);
        for kind in [
            "crop",
            "rotation",
            "blur",
            "brightness",
            "noise",
            "erasing",
            "jpeg",
            "combination",
        ] {
            let spec = sample_spec(kind, 17).unwrap();
            let out = run(&spec, &img);
            assert_eq!(out.len(), img.data.len(), "{kind}");
            assert!(
                out.iter().all(|&v| (0.0..=1.0).contains(&v)),
                "{kind} out of range"
            );
        }
    }

    #[test]
    fn constant_gray_jpeg_within_one_dc_step() {
        // constant blocks have only a DC coefficient, so the only loss is
        // from rounding the quantized DC term
        let img = Image::filled(16, 0.42);
        for quality in JPEG_GRID {
            let spec = AttackSpec::new(AttackKind::Jpeg { quality }, 0).unwrap();
            let out = run(&spec, &img);
            let tol = luma_dc_step(quality) / 255.0;
            let max = out
                .iter()
                .zip(&img.data)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            assert!(max <= tol, "quality {quality}: {max} > {tol}");
        }
    }

    #[test]
    fn erasing_quarter_mean_drop() {
        let img = Image::filled(32, 1.0);
        let spec = AttackSpec::new(AttackKind::Erasing { ratio: 0.25 }, 9).unwrap();
        let out = run(&spec, &img);
        let mean: f64 = out.iter().map(|&v| v as f64).sum::<f64>() / out.len() as f64;
        // 16x16 of a 32x32 image: exactly one quarter erased
        let erased = (0.25f32.sqrt() * 32.0).round().powi(2) / 1024.0;
        assert!((mean - (1.0 - erased as f64)).abs() < 1e-6, "mean {mean}");
    }

    #[test]
    fn out_of_grid_parameters_rejected_with_value() {
        let err = AttackSpec::new(AttackKind::Crop { ratio: 0.3 }, 0)
            .unwrap_err()
            .to_string();
        assert!(err.contains("0.3"), "{err}");
        assert!(AttackSpec::new(AttackKind::Jpeg { quality: 95 }, 0).is_err());
        assert!(AttackSpec::new(AttackKind::Blur { kernel: 4 }, 0).is_err());
        assert!(AttackSpec::new(AttackKind::Rotation { degrees: 31.0 }, 0).is_err());
        assert!(AttackSpec::new(AttackKind::Noise { sigma: 0.5 }, 0).is_err());
        assert!(AttackSpec::new(AttackKind::Erasing { ratio: 0.3 }, 0).is_err());
    }

    #[test]
    fn sample_spec_deterministic_and_on_grid() {
        for kind in ["crop", "blur", "jpeg", "erasing"] {
            let a = sample_spec(kind, 5).unwrap();
            let b = sample_spec(kind, 5).unwrap();
            assert_eq!(a, b);
            a.kind.validate().unwrap();
        }
        match sample_spec("blur", 123).unwrap().kind {
            AttackKind::Blur { kernel } => assert!(BLUR_GRID.contains(&kernel)),
            _ => unreachable!(),
        }
    }

    #[test]
    fn jpeg_quality_draw_frequencies_uniform() {
        let mut counts = std::collections::HashMap::new();
        let n = 10_000u64;
        for seed in 0..n {
            if let AttackKind::Jpeg { quality } = sample_spec("jpeg", seed).unwrap().kind {
                *counts.entry(quality).or_insert(0u64) += 1;
            }
        }
        for q in JPEG_GRID {
            let f = counts[&q] as f64 / n as f64;
            assert!((f - 0.2).abs() <= 0.02, "quality {q} frequency {f}");
        }
    }

    #[test]
    fn spec_line_roundtrip() {
        let specs = [
            sample_spec("crop", 3).unwrap(),
            sample_spec("rotation", 4).unwrap(),
            sample_spec("jpeg", 5).unwrap(),
            sample_spec("combination", 6).unwrap(),
        ];
        for s in specs {
            let line = s.to_line();
            let back = AttackSpec::parse(&line).unwrap();
            assert_eq!(back, s, "{line}");
        }
        assert!(AttackSpec::parse("noise:sigma=0.1,bogus=1").is_err());
        assert!(AttackSpec::parse("warp:x=1").is_err());
    }

    #[test]
    fn attacks_differentiable_wrt_image() {
        // small interior-valued image keeps clamps inactive
        let side = 16;
        let data: Vec<f32> = scene(side, 7)
            .data
            .iter()
            .map(|v| 0.25 + 0.5 * v)
            .collect();
        let kinds = [
            AttackKind::Crop { ratio: 0.1 },
            AttackKind::Rotation { degrees: 11.0 },
            AttackKind::Blur { kernel: 3 },
            AttackKind::Brightness { delta: 0.1 },
            AttackKind::Noise { sigma: 0.05 },
            AttackKind::Erasing { ratio: 0.1 },
        ];
        for kind in kinds {
            let spec = AttackSpec::new(kind, 11).unwrap();
            let mut tape = Tape::new();
            let x = tape.leaf(data.clone(), &[1, 3, side, side], true).unwrap();
            let y = apply(&spec, &mut tape, x).unwrap();
            let l = tape.mean(y).unwrap();
            let rep = grad_check(&mut tape, l, &[x], 1e-3, 1e-2).unwrap();
            assert!(
                rep.passed(),
                "{}: max rel err {}",
                spec.kind.name(),
                rep.max_rel_err()
            );
        }
        // jpeg: the linear path (rounding disabled) must pass; the full
        // path is straight-through by construction
        let mut tape = Tape::new();
        let x = tape.leaf(data.clone(), &[1, 3, side, side], true).unwrap();
        let y = jpeg_surrogate(&mut tape, x, 50, false).unwrap();
        let l = tape.mean(y).unwrap();
        let rep = grad_check(&mut tape, l, &[x], 1e-3, 1e-2).unwrap();
        assert!(rep.passed(), "jpeg linear path: {}", rep.max_rel_err());
    }

    #[test]
    fn jpeg_straight_through_gradient_flows() {
        let side = 16;
        let data = scene(side, 8).data;
        let mut tape = Tape::new();
        let x = tape.leaf(data, &[1, 3, side, side], true).unwrap();
        let spec = AttackSpec::new(AttackKind::Jpeg { quality: 50 }, 0).unwrap();
        let y = apply(&spec, &mut tape, x).unwrap();
        let l = tape.mean(y).unwrap();
        tape.backward(l).unwrap();
        let g = tape.grad(x).unwrap();
        assert!(g.iter().all(|v| v.is_finite()));
        assert!(g.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn monotone_degradation_for_blur_noise_jpeg() {
        let imgs: Vec<Image> = (0..4).map(|i| scene(16, 100 + i)).collect();
        let psnr_for = |spec: &AttackSpec| -> f64 {
            let mut total = 0.0;
            for img in &imgs {
                let out = run(spec, img);
                let mse: f64 = out
                    .iter()
                    .zip(&img.data)
                    .map(|(a, b)| ((a - b) as f64).powi(2))
                    .sum::<f64>()
                    / out.len() as f64;
                total += -10.0 * (mse.max(1e-12)).log10();
            }
            total / imgs.len() as f64
        };
        let blur: Vec<f64> = BLUR_GRID
            .iter()
            .map(|&k| psnr_for(&AttackSpec::new(AttackKind::Blur { kernel: k }, 1).unwrap()))
            .collect();
        assert!(blur[0] >= blur[1] && blur[1] >= blur[2], "{blur:?}");
        let noise: Vec<f64> = [0.05f32, 0.1, 0.2]
            .iter()
            .map(|&s| psnr_for(&AttackSpec::new(AttackKind::Noise { sigma: s }, 1).unwrap()))
            .collect();
        assert!(noise[0] >= noise[1] && noise[1] >= noise[2], "{noise:?}");
        let jpeg: Vec<f64> = JPEG_GRID
            .iter()
            .map(|&q| psnr_for(&AttackSpec::new(AttackKind::Jpeg { quality: q }, 1).unwrap()))
            .collect();
        for w in jpeg.windows(2) {
            assert!(w[0] >= w[1] - 1e-9, "{jpeg:?}");
        }
    }
}
