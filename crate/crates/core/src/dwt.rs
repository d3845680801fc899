//! Classical watermarking baseline: one-level orthonormal Haar transform
//! of the luminance channel, with one fingerprint bit embedded per mid-band
//! (LH/HL) coefficient via quantization-index modulation (QIM).

use crate::codec::Fingerprint;
use crate::data::Image;
use crate::error::{Error, Result};

/// Default QIM step: 8 grey levels on the unit pixel scale.
pub const DEFAULT_STEP: f32 = 8.0 / 255.0;

fn luminance(img: &Image) -> Vec<f32> {
    let n = img.side * img.side;
    (0..n)
        .map(|i| {
            0.299 * img.data[i] + 0.587 * img.data[n + i] + 0.114 * img.data[2 * n + i]
        })
        .collect()
}

/// One-level 2D Haar split of a (side x side) plane into quadrant planes
/// (LL, LH, HL, HH), each (side/2 x side/2), orthonormal scaling.
fn haar_forward(y: &[f32], side: usize) -> [Vec<f32>; 4] {
    let h = side / 2;
    let mut out = [
        vec![0.0f32; h * h],
        vec![0.0f32; h * h],
        vec![0.0f32; h * h],
        vec![0.0f32; h * h],
    ];
    for by in 0..h {
        for bx in 0..h {
            let a = y[(2 * by) * side + 2 * bx];
            let b = y[(2 * by) * side + 2 * bx + 1];
            let c = y[(2 * by + 1) * side + 2 * bx];
            let d = y[(2 * by + 1) * side + 2 * bx + 1];
            let i = by * h + bx;
            out[0][i] = (a + b + c + d) / 2.0; // LL
            out[1][i] = (a + b - c - d) / 2.0; // LH (vertical detail)
            out[2][i] = (a - b + c - d) / 2.0; // HL (horizontal detail)
            out[3][i] = (a - b - c + d) / 2.0; // HH
        }
    }
    out
}

fn haar_inverse(planes: &[Vec<f32>; 4], side: usize) -> Vec<f32> {
    let h = side / 2;
    let mut y = vec![0.0f32; side * side];
    for by in 0..h {
        for bx in 0..h {
            let i = by * h + bx;
            let (ll, lh, hl, hh) = (planes[0][i], planes[1][i], planes[2][i], planes[3][i]);
            y[(2 * by) * side + 2 * bx] = (ll + lh + hl + hh) / 2.0;
            y[(2 * by) * side + 2 * bx + 1] = (ll + lh - hl - hh) / 2.0;
            y[(2 * by + 1) * side + 2 * bx] = (ll - lh + hl - hh) / 2.0;
            y[(2 * by + 1) * side + 2 * bx + 1] = (ll - lh - hl + hh) / 2.0;
        }
    }
    y
}

fn capacity(side: usize) -> usize {
    2 * (side / 2) * (side / 2)
}

/// QIM: snap the coefficient to the nearest point of the bit's offset
/// lattice {(k + 0.25)·step} for 0, {(k + 0.75)·step} for 1.
fn qim_embed(c: f32, bit: u8, step: f32) -> f32 {
    let offset = if bit == 1 { 0.75 } else { 0.25 };
    let k = (c / step - offset).round();
    (k + offset) * step
}

fn qim_extract(c: f32, step: f32) -> u8 {
    let f = (c / step).rem_euclid(1.0);
    (f >= 0.5) as u8
}

/// Embed the fingerprint into the image's luminance mid-band, one bit per
/// LH/HL coefficient (LH plane first, raster order). Chrominance is
/// preserved exactly; output clamped to [0,1].
pub fn dwt_embed(img: &Image, phi: &Fingerprint, step: f32) -> Result<Image> {
    if img.side % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "image side {} must be even",
            img.side
        )));
    }
    if step <= 0.0 {
        return Err(Error::InvalidArgument(format!("step {step} must be > 0")));
    }
    if phi.d_phi() > capacity(img.side) {
        return Err(Error::InvalidArgument(format!(
            "d_phi {} exceeds mid-band capacity {} at side {}",
            phi.d_phi(),
            capacity(img.side),
            img.side
        )));
    }
    let y = luminance(img);
    let mut planes = haar_forward(&y, img.side);
    let half = planes[1].len();
    for (i, &bit) in phi.bits().iter().enumerate() {
        let (plane, j) = if i < half { (1, i) } else { (2, i - half) };
        planes[plane][j] = qim_embed(planes[plane][j], bit, step);
    }
    let y_new = haar_inverse(&planes, img.side);
    // shift all three channels by the luminance delta; this leaves the
    // chrominance components unchanged
    let n = img.side * img.side;
    let mut data = img.data.clone();
    for i in 0..n {
        let delta = y_new[i] - y[i];
        for c in 0..3 {
            data[c * n + i] = (data[c * n + i] + delta).clamp(0.0, 1.0);
        }
    }
    Ok(Image::new(img.side, data))
}

/// Read `d_phi` bits back from the mid-band lattice offsets.
pub fn dwt_extract(img: &Image, d_phi: usize, step: f32) -> Result<Fingerprint> {
    if img.side % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "image side {} must be even",
            img.side
        )));
    }
    if d_phi == 0 || d_phi > capacity(img.side) {
        return Err(Error::InvalidArgument(format!(
            "d_phi {d_phi} outside 1..={}",
            capacity(img.side)
        )));
    }
    let planes = haar_forward(&luminance(img), img.side);
    let half = planes[1].len();
    let bits = (0..d_phi)
        .map(|i| {
            let (plane, j) = if i < half { (1, i) } else { (2, i - half) };
            qim_extract(planes[plane][j], step)
        })
        .collect();
    Fingerprint::from_bits(bits)
}
