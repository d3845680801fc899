//! Deterministic synthetic scene generation and PPM image I/O.

use crate::error::{Error, Result};
use crate::rng::rng_for;
use rand::Rng;
use std::io::Read;
use std::path::Path;

/// An image in [0,1], channel-major (3 x side x side).
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub side: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(side: usize, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), 3 * side * side);
        Image { side, data }
    }

    pub fn filled(side: usize, v: f32) -> Self {
        Image::new(side, vec![v; 3 * side * side])
    }

    pub fn pixel(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.side + y) * self.side + x]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }
}

/// Recipe for one deterministic stream of synthetic scenes.
#[derive(Clone, Debug)]
pub struct SyntheticSceneSpec {
    pub seed: u64,
    pub side: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
}

impl SyntheticSceneSpec {
    pub fn new(seed: u64, side: usize) -> Result<Self> {
        if side % 4 != 0 || side == 0 {
            return Err(Error::InvalidArgument(format!(
                "image side {side} must be a positive multiple of 4"
            )));
        }
        Ok(SyntheticSceneSpec {
            seed,
            side,
            min_shapes: 1,
            max_shapes: 4,
        })
    }
}

/// Anti-aliased colored rectangles and circles on solid or gradient
/// backgrounds; a pure function of (spec, index).
pub fn generate(spec: &SyntheticSceneSpec, index: u64) -> Image {
    let mut rng = rng_for(spec.seed, "scene", &[index]);
    let side = spec.side;
    let mut img = vec![0.0f32; 3 * side * side];

    // background: solid, vertical gradient, or horizontal gradient
    let c0: [f32; 3] = [pal(&mut rng), pal(&mut rng), pal(&mut rng)];
    let c1: [f32; 3] = [pal(&mut rng), pal(&mut rng), pal(&mut rng)];
    let mode = rng.gen_range(0..3u32);
    for y in 0..side {
        for x in 0..side {
            let t = match mode {
                0 => 0.0,
                1 => y as f32 / (side - 1) as f32,
                _ => x as f32 / (side - 1) as f32,
            };
            for c in 0..3 {
                img[(c * side + y) * side + x] = c0[c] * (1.0 - t) + c1[c] * t;
            }
        }
    }

    let count = rng.gen_range(spec.min_shapes..=spec.max_shapes);
    for _ in 0..count {
        let color: [f32; 3] = [pal(&mut rng), pal(&mut rng), pal(&mut rng)];
        let is_circle = rng.gen::<bool>();
        if is_circle {
            let cx = rng.gen_range(0.0..side as f32);
            let cy = rng.gen_range(0.0..side as f32);
            let r = rng.gen_range(side as f32 * 0.1..side as f32 * 0.4);
            for y in 0..side {
                for x in 0..side {
                    let d = ((x as f32 + 0.5 - cx).powi(2) + (y as f32 + 0.5 - cy).powi(2)).sqrt();
                    // one-pixel anti-aliasing band at the rim
                    let cov = (r - d + 0.5).clamp(0.0, 1.0);
                    if cov > 0.0 {
                        for c in 0..3 {
                            let p = &mut img[(c * side + y) * side + x];
                            *p = *p * (1.0 - cov) + color[c] * cov;
                        }
                    }
                }
            }
        } else {
            let x0 = rng.gen_range(0.0..side as f32 * 0.8);
            let y0 = rng.gen_range(0.0..side as f32 * 0.8);
            let w = rng.gen_range(side as f32 * 0.1..side as f32 * 0.5);
            let h = rng.gen_range(side as f32 * 0.1..side as f32 * 0.5);
            for y in 0..side {
                for x in 0..side {
                    let covx = overlap(x as f32, x as f32 + 1.0, x0, x0 + w);
                    let covy = overlap(y as f32, y as f32 + 1.0, y0, y0 + h);
                    let cov = covx * covy;
                    if cov > 0.0 {
                        for c in 0..3 {
                            let p = &mut img[(c * side + y) * side + x];
                            *p = *p * (1.0 - cov) + color[c] * cov;
                        }
                    }
                }
            }
        }
    }
    Image::new(side, img)
}

fn pal(rng: &mut rand_chacha::ChaCha8Rng) -> f32 {
    rng.gen_range(0.05..0.95)
}

fn overlap(a0: f32, a1: f32, b0: f32, b1: f32) -> f32 {
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

/// Write binary PPM (P6, maxval 255).
pub fn save_ppm(img: &Image, path: &Path) -> Result<()> {
    let side = img.side;
    let mut buf = Vec::with_capacity(3 * side * side + 32);
    buf.extend_from_slice(format!("P6\n{side} {side}\n255\n").as_bytes());
    for y in 0..side {
        for x in 0..side {
            for c in 0..3 {
                let v = (img.pixel(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8;
                buf.push(v);
            }
        }
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Read binary PPM (P6, maxval must be 255), square images only.
pub fn load_ppm(path: &Path) -> Result<Image> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let p = path.display().to_string();
    let mut pos = 0usize;

    fn token(bytes: &[u8], pos: &mut usize, path: &str, field: &str) -> Result<(String, u64)> {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(Error::Malformed {
                path: path.to_string(),
                offset: start as u64,
                detail: format!("missing {field}"),
            });
        }
        Ok((
            String::from_utf8_lossy(&bytes[start..*pos]).into_owned(),
            start as u64,
        ))
    }

    let (magic, off) = token(&bytes, &mut pos, &p, "magic")?;
    if magic != "P6" {
        return Err(Error::Malformed {
            path: p,
            offset: off,
            detail: format!("magic {magic:?}, expected P6"),
        });
    }
    let parse_num = |t: (String, u64), field: &str| -> Result<(usize, u64)> {
        t.0.parse::<usize>()
            .map(|v| (v, t.1))
            .map_err(|_| Error::Malformed {
                path: path.display().to_string(),
                offset: t.1,
                detail: format!("{field} is not a number: {:?}", t.0),
            })
    };
    let (width, _) = parse_num(token(&bytes, &mut pos, &p, "width")?, "width")?;
    let (height, _) = parse_num(token(&bytes, &mut pos, &p, "height")?, "height")?;
    let (maxval, moff) = parse_num(token(&bytes, &mut pos, &p, "maxval")?, "maxval")?;
    if maxval != 255 {
        return Err(Error::Malformed {
            path: p,
            offset: moff,
            detail: format!("maxval {maxval} unsupported, expected 255"),
        });
    }
    if width != height {
        return Err(Error::Malformed {
            path: p,
            offset: 0,
            detail: format!("{width}x{height}: only square images supported"),
        });
    }
    pos += 1; // single whitespace after maxval
    let need = 3 * width * height;
    if bytes.len() < pos + need {
        return Err(Error::Malformed {
            path: p,
            offset: bytes.len() as u64,
            detail: format!("truncated pixel data: need {need} bytes from offset {pos}"),
        });
    }
    let mut data = vec![0.0f32; need];
    let side = width;
    for y in 0..side {
        for x in 0..side {
            for c in 0..3 {
                data[(c * side + y) * side + x] =
                    bytes[pos + (y * side + x) * 3 + c] as f32 / 255.0;
            }
        }
    }
    Ok(Image::new(side, data))
}
