//! Photometric losses and image metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorio::RgbImage;

const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;
pub const PSNR_CAP: f64 = 99.0;

fn check(a: &RgbImage, b: &RgbImage) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::DimensionMismatch {
            entry: "image".into(),
            expected: a.dims(),
            found: b.dims(),
        });
    }
    Ok(())
}

fn kernel() -> [f64; WINDOW] {
    let mut k = [0.0; WINDOW];
    let half = (WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable Gaussian filter with zero padding. Self-adjoint.
fn blur(plane: &[f64], w: usize, h: usize, k: &[f64; WINDOW]) -> Vec<f64> {
    let half = WINDOW as isize / 2;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let xx = x as isize + i as isize - half;
                if xx >= 0 && (xx as usize) < w {
                    s += kv * plane[y * w + xx as usize];
                }
            }
            tmp[y * w + x] = s;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let yy = y as isize + i as isize - half;
                if yy >= 0 && (yy as usize) < h {
                    s += kv * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = s;
        }
    }
    out
}

fn channel(img: &RgbImage, c: usize) -> Vec<f64> {
    img.data.iter().skip(c).step_by(3).copied().collect()
}

/// Mean SSIM and, if asked, its gradient with respect to `x`.
fn ssim_impl(x: &RgbImage, y: &RgbImage, want_grad: bool) -> (f64, Vec<f64>) {
    let (w, h) = x.dims();
    let n = (w * h * 3) as f64;
    let k = kernel();
    let mut total = 0.0;
    let mut grad = if want_grad { vec![0.0; x.data.len()] } else { Vec::new() };
    for c in 0..3 {
        let xs = channel(x, c);
        let ys = channel(y, c);
        let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
        let mx = blur(&xs, w, h, &k);
        let my = blur(&ys, w, h, &k);
        let mxx = blur(&sq(&xs, &xs), w, h, &k);
        let myy = blur(&sq(&ys, &ys), w, h, &k);
        let mxy = blur(&sq(&xs, &ys), w, h, &k);
        let mut g1 = vec![0.0; w * h];
        let mut g2 = vec![0.0; w * h];
        let mut g3 = vec![0.0; w * h];
        for i in 0..w * h {
            let (ux, uy) = (mx[i], my[i]);
            let a1 = 2.0 * ux * uy + C1;
            let a2 = 2.0 * (mxy[i] - ux * uy) + C2;
            let b1 = ux * ux + uy * uy + C1;
            let b2 = (mxx[i] - ux * ux) + (myy[i] - uy * uy) + C2;
            let s = a1 * a2 / (b1 * b2);
            total += s;
            if want_grad {
                let ds = 1.0 / n;
                g1[i] = ds * s * (2.0 * uy / a1 - 2.0 * uy / a2 - 2.0 * ux / b1 + 2.0 * ux / b2);
                g2[i] = -ds * s / b2;
                g3[i] = ds * 2.0 * s / a2;
            }
        }
        if want_grad {
            let b1 = blur(&g1, w, h, &k);
            let b2 = blur(&g2, w, h, &k);
            let b3 = blur(&g3, w, h, &k);
            for i in 0..w * h {
                grad[3 * i + c] = b1[i] + 2.0 * xs[i] * b2[i] + ys[i] * b3[i];
            }
        }
    }
    (total / n, grad)
}

pub fn ssim(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    check(a, b)?;
    Ok(ssim_impl(a, b, false).0)
}

/// `10 log10(1 / MSE)`, capped for identical images.
pub fn psnr(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    check(a, b)?;
    let mse = a.data.iter().zip(&b.data).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / a.data.len() as f64;
    if mse <= 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// `(1 - lambda) mean|x - y| + lambda (1 - SSIM) / 2` and its gradient with
/// respect to `rendered`.
pub fn image_loss(rendered: &RgbImage, target: &RgbImage, lambda: f64) -> Result<(f64, Vec<f64>)> {
    check(rendered, target)?;
    let n = rendered.data.len() as f64;
    let mut l1 = 0.0;
    let mut grad: Vec<f64> = rendered
        .data
        .iter()
        .zip(&target.data)
        .map(|(r, t)| {
            let d = r - t;
            l1 += d.abs();
            (1.0 - lambda) * d.signum() * if d == 0.0 { 0.0 } else { 1.0 } / n
        })
        .collect();
    let mut value = (1.0 - lambda) * l1 / n;
    if lambda > 0.0 {
        let (s, gs) = ssim_impl(rendered, target, true);
        value += lambda * (1.0 - s) / 2.0;
        for (g, d) in grad.iter_mut().zip(gs) {
            *g -= 0.5 * lambda * d;
        }
    }
    Ok((value, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub psnr: f64,
    pub ssim: f64,
    pub l1: f64,
}

pub fn metrics(a: &RgbImage, b: &RgbImage) -> Result<Metrics> {
    check(a, b)?;
    let l1 = a.data.iter().zip(&b.data).map(|(p, q)| (p - q).abs()).sum::<f64>() / a.data.len() as f64;
    Ok(Metrics {
        psnr: psnr(a, b)?,
        ssim: ssim(a, b)?,
        l1,
    })
}
