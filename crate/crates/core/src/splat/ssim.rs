use thiserror::Error;

use crate::raster::{gaussian_kernel, GrayImage, RgbImage};

const WINDOW: usize = 11;
const WINDOW_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SsimError {
    #[error("image dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
}

fn check(aw: usize, ah: usize, bw: usize, bh: usize) -> Result<(), SsimError> {
    if aw != bw || ah != bh {
        return Err(SsimError::DimensionMismatch(aw, ah, bw, bh));
    }
    Ok(())
}

/// Gaussian window truncated at the image border and renormalized there.
struct Window {
    k: Vec<f64>,
    nx: Vec<f64>,
    ny: Vec<f64>,
    w: usize,
    h: usize,
}

impl Window {
    fn new(w: usize, h: usize) -> Self {
        let k = gaussian_kernel(WINDOW, WINDOW_SIGMA);
        let norm = |n: usize| -> Vec<f64> {
            let r = (WINDOW / 2) as isize;
            (0..n as isize)
                .map(|p| {
                    (0..WINDOW as isize)
                        .filter(|t| {
                            let q = p + t - r;
                            q >= 0 && q < n as isize
                        })
                        .map(|t| k[t as usize])
                        .sum()
                })
                .collect()
        };
        Self {
            nx: norm(w),
            ny: norm(h),
            k,
            w,
            h,
        }
    }

    /// Zero-padded separable convolution with the unnormalized kernel.
    fn conv(&self, v: &[f64]) -> Vec<f64> {
        let (w, h) = (self.w, self.h);
        let r = (WINDOW / 2) as isize;
        let mut tmp = vec![0.0; w * h];
        for y in 0..h {
            let row = &v[y * w..(y + 1) * w];
            for x in 0..w {
                let mut acc = 0.0;
                for (t, kt) in self.k.iter().enumerate() {
                    let q = x as isize + t as isize - r;
                    if q >= 0 && (q as usize) < w {
                        acc += kt * row[q as usize];
                    }
                }
                tmp[y * w + x] = acc;
            }
        }
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (t, kt) in self.k.iter().enumerate() {
                    let q = y as isize + t as isize - r;
                    if q >= 0 && (q as usize) < h {
                        acc += kt * tmp[q as usize * w + x];
                    }
                }
                out[y * w + x] = acc;
            }
        }
        out
    }

    fn filter(&self, v: &[f64]) -> Vec<f64> {
        let mut out = self.conv(v);
        for y in 0..self.h {
            for x in 0..self.w {
                out[y * self.w + x] /= self.nx[x] * self.ny[y];
            }
        }
        out
    }

    fn adjoint(&self, g: &[f64]) -> Vec<f64> {
        let mut scaled = g.to_vec();
        for y in 0..self.h {
            for x in 0..self.w {
                scaled[y * self.w + x] /= self.nx[x] * self.ny[y];
            }
        }
        self.conv(&scaled)
    }
}

/// Mean SSIM of one channel and, optionally, its gradient w.r.t. `x`.
fn ssim_channel(win: &Window, x: &[f64], y: &[f64], want_grad: bool) -> (f64, Option<Vec<f64>>) {
    let n = x.len();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let mx = win.filter(x);
    let my = win.filter(y);
    let mxx = win.filter(&xx);
    let myy = win.filter(&yy);
    let mxy = win.filter(&xy);
    let mut total = 0.0;
    let mut g1 = vec![0.0; if want_grad { n } else { 0 }];
    let mut g2 = g1.clone();
    let mut g12 = g1.clone();
    for i in 0..n {
        let (ux, uy) = (mx[i], my[i]);
        let vx = mxx[i] - ux * ux;
        let vy = myy[i] - uy * uy;
        let cxy = mxy[i] - ux * uy;
        let a1 = 2.0 * ux * uy + C1;
        let a2 = 2.0 * cxy + C2;
        let b1 = ux * ux + uy * uy + C1;
        let b2 = vx + vy + C2;
        let s = (a1 * a2) / (b1 * b2);
        total += s;
        if want_grad {
            let ds_dmu = 2.0 * uy * a2 / (b1 * b2) - s * 2.0 * ux / b1;
            let ds_dcov = 2.0 * a1 / (b1 * b2);
            let ds_dvar = -s / b2;
            let inv_n = 1.0 / n as f64;
            g1[i] = inv_n * (ds_dmu - 2.0 * ux * ds_dvar - uy * ds_dcov);
            g2[i] = inv_n * ds_dvar;
            g12[i] = inv_n * ds_dcov;
        }
    }
    let mean = total / n as f64;
    if !want_grad {
        return (mean, None);
    }
    let a1 = win.adjoint(&g1);
    let a2 = win.adjoint(&g2);
    let a12 = win.adjoint(&g12);
    let grad = (0..n)
        .map(|i| a1[i] + 2.0 * x[i] * a2[i] + y[i] * a12[i])
        .collect();
    (mean, Some(grad))
}

pub fn ssim_gray(a: &GrayImage, b: &GrayImage) -> Result<f64, SsimError> {
    check(a.width, a.height, b.width, b.height)?;
    let win = Window::new(a.width, a.height);
    Ok(ssim_channel(&win, &a.data, &b.data, false).0)
}

/// Windowed SSIM averaged over the three channels.
pub fn ssim(a: &RgbImage, b: &RgbImage) -> Result<f64, SsimError> {
    check(a.width, a.height, b.width, b.height)?;
    let win = Window::new(a.width, a.height);
    let (ca, cb) = (a.channels(), b.channels());
    let s: f64 = (0..3)
        .map(|c| ssim_channel(&win, &ca[c].data, &cb[c].data, false).0)
        .sum();
    Ok(s / 3.0)
}

fn l1(a: &RgbImage, b: &RgbImage) -> f64 {
    let s: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(p, q)| (0..3).map(|c| (p[c] - q[c]).abs()).sum::<f64>())
        .sum();
    s / (3 * a.data.len()) as f64
}

/// `(1 - lambda) * mean|a - b| + lambda * (1 - ssim(a, b))`.
pub fn photometric_ssim_loss(rendered: &RgbImage, target: &RgbImage, lambda: f64) -> Result<f64, SsimError> {
    check(rendered.width, rendered.height, target.width, target.height)?;
    let l = l1(rendered, target);
    if lambda == 0.0 {
        return Ok(l);
    }
    Ok((1.0 - lambda) * l + lambda * (1.0 - ssim(rendered, target)?))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub photometric: f64,
    pub dynamic: f64,
    /// SSIM share inside the photometric term.
    pub ssim: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            photometric: 0.8,
            dynamic: 0.2,
            ssim: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub photometric: f64,
    pub dynamic: f64,
    /// `dL/dI_r` per pixel.
    pub image_grad: Vec<[f64; 3]>,
    /// `dL/d opacity` for each dynamic splat, in input order.
    pub opacity_grad: Vec<f64>,
}

/// `L = w_p * L_p-ssim + w_dyn * sum(alpha_i^2)` over the dynamic opacities.
pub fn total_loss(
    rendered: &RgbImage,
    target: &RgbImage,
    dynamic_opacity: &[f64],
    w: &LossWeights,
) -> Result<LossValue, SsimError> {
    check(rendered.width, rendered.height, target.width, target.height)?;
    let n = rendered.data.len();
    let inv = 1.0 / (3 * n) as f64;
    let l1v = l1(rendered, target);
    let mut grad: Vec<[f64; 3]> = rendered
        .data
        .iter()
        .zip(&target.data)
        .map(|(p, q)| {
            std::array::from_fn(|c| {
                let d = p[c] - q[c];
                let sgn = if d > 0.0 {
                    1.0
                } else if d < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                w.photometric * (1.0 - w.ssim) * inv * sgn
            })
        })
        .collect();
    let mut ssim_mean = 1.0;
    if w.ssim != 0.0 {
        let win = Window::new(rendered.width, rendered.height);
        let (ca, cb) = (rendered.channels(), target.channels());
        let mut s = 0.0;
        for c in 0..3 {
            let (v, g) = ssim_channel(&win, &ca[c].data, &cb[c].data, w.photometric != 0.0);
            s += v;
            if let Some(g) = g {
                for i in 0..n {
                    grad[i][c] -= w.photometric * w.ssim * g[i] / 3.0;
                }
            }
        }
        ssim_mean = s / 3.0;
    }
    let photometric = (1.0 - w.ssim) * l1v + w.ssim * (1.0 - ssim_mean);
    let dynamic: f64 = dynamic_opacity.iter().map(|a| a * a).sum();
    Ok(LossValue {
        total: w.photometric * photometric + w.dynamic * dynamic,
        photometric,
        dynamic,
        image_grad: grad,
        opacity_grad: dynamic_opacity.iter().map(|a| 2.0 * w.dynamic * a).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pattern(w: usize, h: usize) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| {
            let v = ((x * 7 + y * 13) % 17) as f64 / 16.0;
            [v, 1.0 - v, 0.5 * v]
        })
    }

    #[test]
    fn identical_images() {
        let a = pattern(20, 15);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        assert_eq!(photometric_ssim_loss(&a, &a, 0.2).unwrap(), 0.0);
        assert_eq!(photometric_ssim_loss(&a, &a, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn constant_images() {
        let a = GrayImage::filled(12, 12, 0.3);
        assert_eq!(ssim_gray(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn inverted_checkerboard_is_negative() {
        let a = GrayImage::from_fn(16, 16, |x, y| ((x + y) % 2) as f64);
        let b = GrayImage::from_fn(16, 16, |x, y| 1.0 - ((x + y) % 2) as f64);
        assert!(ssim_gray(&a, &b).unwrap() < 0.0);
    }

    #[test]
    fn constant_offset_is_pure_l1() {
        let a = RgbImage::filled(8, 8, [0.4; 3]);
        let b = RgbImage::filled(8, 8, [0.3; 3]);
        assert!((photometric_ssim_loss(&a, &b, 0.0).unwrap() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn dynamic_penalty_closed_form() {
        let a = pattern(8, 8);
        let l = total_loss(&a, &a, &[0.5], &LossWeights::default()).unwrap();
        assert!((l.total - 0.05).abs() < 1e-15);
        assert!((l.opacity_grad[0] - 0.2).abs() < 1e-15);
        let z = total_loss(&a, &a, &[0.0], &LossWeights::default()).unwrap();
        assert_eq!(z.total, 0.0);
    }

    #[test]
    fn dimension_mismatch() {
        assert!(ssim(&pattern(4, 4), &pattern(5, 4)).is_err());
    }

    #[test]
    fn ssim_gradient_matches_differences() {
        let win = Window::new(9, 7);
        let x: Vec<f64> = (0..63).map(|i| ((i * 37) % 11) as f64 / 10.0).collect();
        let y: Vec<f64> = (0..63).map(|i| ((i * 17) % 13) as f64 / 12.0).collect();
        let (_, g) = ssim_channel(&win, &x, &y, true);
        let g = g.unwrap();
        for i in [0, 5, 31, 62] {
            let mut xp = x.clone();
            xp[i] += 1e-6;
            let mut xm = x.clone();
            xm[i] -= 1e-6;
            let fd = (ssim_channel(&win, &xp, &y, false).0 - ssim_channel(&win, &xm, &y, false).0) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-6 * (1.0 + fd.abs()), "{i}: {fd} vs {}", g[i]);
        }
    }
}
