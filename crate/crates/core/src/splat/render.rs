use nalgebra::Vector3;

use crate::camera::{Camera, CameraPose};
use crate::par;
use crate::raster::{GrayImage, RgbImage};

use super::project::{backward_projection, project_gaussian, ScreenGaussian, ScreenGrad};
use super::ssim::{total_loss, LossValue, LossWeights, SsimError};
use super::{ShColor, Splat};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderOptions {
    /// Contributions with `alpha` below this are skipped; 0 disables truncation.
    pub alpha_threshold: f64,
    /// Stop compositing a pixel once transmittance drops below this.
    pub min_transmittance: f64,
    /// Rows per work unit.
    pub band_height: usize,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            alpha_threshold: 1e-4,
            min_transmittance: 1e-4,
            band_height: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedImage {
    pub rgb: RgbImage,
    pub depth: GrayImage,
    pub final_transmittance: GrayImage,
}

/// Splats plus a per-splat dynamic flag. Dynamic splats are left out of the
/// composited image and only feel the opacity penalty.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Scene {
    pub splats: Vec<Splat>,
    pub dynamic: Vec<bool>,
}

impl Scene {
    pub fn all_static(splats: Vec<Splat>) -> Self {
        let n = splats.len();
        Self {
            splats,
            dynamic: vec![false; n],
        }
    }

    pub fn static_splats(&self) -> Vec<Splat> {
        self.splats
            .iter()
            .zip(&self.dynamic)
            .filter(|(_, d)| !**d)
            .map(|(s, _)| *s)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SplatGrad {
    pub position: Vector3<f64>,
    /// `(w, x, y, z)`.
    pub rotation: [f64; 4],
    pub scale: Vector3<f64>,
    pub opacity: f64,
    pub color: [f64; 3],
    pub sh1: [[f64; 3]; 3],
}

struct Prepared {
    index: usize,
    sg: ScreenGaussian,
    opacity: f64,
    color: [f64; 3],
    dir: Vector3<f64>,
    dist: f64,
    /// Inclusive pixel bounds `(x0, x1, y0, y1)`, clipped to the image.
    bbox: [i64; 4],
}

fn prepare(splats: &[Splat], pose: &CameraPose, cam: &Camera, opts: &RenderOptions) -> Vec<Prepared> {
    let center = pose.center();
    let projected = par::map_range(splats.len(), |i| {
        let s = &splats[i];
        if !(s.opacity > opts.alpha_threshold) || s.opacity <= 0.0 {
            return None;
        }
        let sg = project_gaussian(s, pose, cam)?;
        let (w, h) = (cam.width as i64, cam.height as i64);
        let bbox = if opts.alpha_threshold > 0.0 {
            let tr = 0.5 * (sg.cov[(0, 0)] + sg.cov[(1, 1)]);
            let det = sg.cov.determinant();
            let lmax = tr + (tr * tr - det).max(0.0).sqrt();
            let r = (2.0 * (s.opacity / opts.alpha_threshold).ln() * lmax).sqrt();
            [
                ((sg.mean.x - r).ceil() as i64).max(0),
                ((sg.mean.x + r).floor() as i64).min(w - 1),
                ((sg.mean.y - r).ceil() as i64).max(0),
                ((sg.mean.y + r).floor() as i64).min(h - 1),
            ]
        } else {
            [0, w - 1, 0, h - 1]
        };
        if bbox[0] > bbox[1] || bbox[2] > bbox[3] {
            return None;
        }
        let off = s.position - center;
        let dist = off.norm();
        let dir = if dist > 0.0 { off / dist } else { Vector3::z() };
        Some(Prepared {
            index: i,
            sg,
            opacity: s.opacity,
            color: s.color.eval(&dir),
            dir,
            dist,
            bbox,
        })
    });
    let mut prep: Vec<Prepared> = projected.into_iter().flatten().collect();
    prep.sort_by(|a, b| {
        a.sg.depth
            .total_cmp(&b.sg.depth)
            .then(splats[a.index].id.cmp(&splats[b.index].id))
    });
    prep
}

/// Per-band candidate lists, each in global depth order.
fn band_lists(prep: &[Prepared], height: usize, band: usize) -> Vec<Vec<u32>> {
    let nb = height.div_ceil(band).max(1);
    let mut bands = vec![Vec::new(); nb];
    for (k, p) in prep.iter().enumerate() {
        let b0 = p.bbox[2] as usize / band;
        let b1 = p.bbox[3] as usize / band;
        for list in bands.iter_mut().take(b1 + 1).skip(b0) {
            list.push(k as u32);
        }
    }
    bands
}

struct Hit {
    local: usize,
    alpha: f64,
    g: f64,
    dx: f64,
    dy: f64,
}

/// Composite one pixel; `hits` receives the contributing splats front to back.
#[inline]
fn shade_pixel(
    list: &[u32],
    prep: &[Prepared],
    x: i64,
    y: i64,
    opts: &RenderOptions,
    mut hits: Option<&mut Vec<Hit>>,
) -> ([f64; 3], f64, f64) {
    let mut t = 1.0;
    let mut c = [0.0; 3];
    let mut d = 0.0;
    let (px, py) = (x as f64, y as f64);
    for (local, &k) in list.iter().enumerate() {
        let p = &prep[k as usize];
        if x < p.bbox[0] || x > p.bbox[1] || y < p.bbox[2] || y > p.bbox[3] {
            continue;
        }
        let dx = px - p.sg.mean.x;
        let dy = py - p.sg.mean.y;
        let [a, b, cc] = p.sg.conic;
        let power = -0.5 * (a * dx * dx + 2.0 * b * dx * dy + cc * dy * dy);
        let g = power.min(0.0).exp();
        let alpha = p.opacity * g;
        if alpha < opts.alpha_threshold || alpha <= 0.0 {
            continue;
        }
        let w = t * alpha;
        for ch in 0..3 {
            c[ch] += w * p.color[ch];
        }
        d += w * p.sg.depth;
        if let Some(h) = hits.as_deref_mut() {
            h.push(Hit {
                local,
                alpha,
                g,
                dx,
                dy,
            });
        }
        t *= 1.0 - alpha;
        if t < opts.min_transmittance {
            break;
        }
    }
    (c, d, t)
}

/// Front-to-back compositing of `splats` over a black background.
pub fn composite(splats: &[Splat], pose: &CameraPose, cam: &Camera, opts: &RenderOptions) -> RenderedImage {
    let (w, h) = (cam.width, cam.height);
    let band = opts.band_height.max(1);
    let prep = prepare(splats, pose, cam, opts);
    let bands = band_lists(&prep, h, band);
    let rows = par::map_range(bands.len(), |b| {
        let y0 = b * band;
        let y1 = (y0 + band).min(h);
        let mut out = Vec::with_capacity((y1 - y0) * w);
        for y in y0..y1 {
            for x in 0..w {
                out.push(shade_pixel(&bands[b], &prep, x as i64, y as i64, opts, None));
            }
        }
        out
    });
    let mut rgb = RgbImage::new(w, h);
    let mut depth = GrayImage::new(w, h);
    let mut trans = GrayImage::new(w, h);
    for (i, (c, d, t)) in rows.into_iter().flatten().enumerate() {
        rgb.data[i] = c;
        depth.data[i] = d;
        trans.data[i] = t;
    }
    RenderedImage {
        rgb,
        depth,
        final_transmittance: trans,
    }
}

/// Composite only the static splats of `scene`.
pub fn composite_scene(scene: &Scene, pose: &CameraPose, cam: &Camera, opts: &RenderOptions) -> RenderedImage {
    composite(&scene.static_splats(), pose, cam, opts)
}

/// Gradients of `L = total_loss` for every splat in `scene`.
///
/// Screen-space gradients are accumulated per row band and merged in band
/// order, so the result does not depend on thread scheduling.
pub fn backward_gradients(
    scene: &Scene,
    pose: &CameraPose,
    cam: &Camera,
    target: &RgbImage,
    weights: &LossWeights,
    opts: &RenderOptions,
) -> Result<(LossValue, Vec<SplatGrad>), SsimError> {
    let static_idx: Vec<usize> = (0..scene.splats.len()).filter(|&i| !scene.dynamic[i]).collect();
    let dyn_idx: Vec<usize> = (0..scene.splats.len()).filter(|&i| scene.dynamic[i]).collect();
    let statics: Vec<Splat> = static_idx.iter().map(|&i| scene.splats[i]).collect();
    let rendered = composite(&statics, pose, cam, opts);
    let dyn_opacity: Vec<f64> = dyn_idx.iter().map(|&i| scene.splats[i].opacity).collect();
    let loss = total_loss(&rendered.rgb, target, &dyn_opacity, weights)?;

    let (w, h) = (cam.width, cam.height);
    let band = opts.band_height.max(1);
    let prep = prepare(&statics, pose, cam, opts);
    let bands = band_lists(&prep, h, band);
    let grad_img = &loss.image_grad;
    let locals = par::map_range(bands.len(), |b| {
        let list = &bands[b];
        let mut acc = vec![ScreenGrad::default(); list.len()];
        let mut hits = Vec::new();
        let y0 = b * band;
        let y1 = (y0 + band).min(h);
        for y in y0..y1 {
            for x in 0..w {
                let gc = grad_img[y * w + x];
                if gc == [0.0; 3] {
                    continue;
                }
                hits.clear();
                let (_, _, _) = shade_pixel(list, &prep, x as i64, y as i64, opts, Some(&mut hits));
                let mut t_before = Vec::with_capacity(hits.len());
                let mut t = 1.0;
                for hit in &hits {
                    t_before.push(t);
                    t *= 1.0 - hit.alpha;
                }
                let mut behind = [0.0; 3];
                for (hit, &ti) in hits.iter().zip(&t_before).rev() {
                    let p = &prep[list[hit.local] as usize];
                    let g = &mut acc[hit.local];
                    let wgt = ti * hit.alpha;
                    let mut galpha = 0.0;
                    for ch in 0..3 {
                        galpha += gc[ch] * ti * (p.color[ch] - behind[ch]);
                        g.color[ch] += gc[ch] * wgt;
                    }
                    g.opacity += galpha * hit.g;
                    let gpow = galpha * hit.alpha;
                    let [a, bb, c] = p.sg.conic;
                    g.mean[0] += gpow * (a * hit.dx + bb * hit.dy);
                    g.mean[1] += gpow * (bb * hit.dx + c * hit.dy);
                    g.conic[0] += gpow * (-0.5 * hit.dx * hit.dx);
                    g.conic[1] += gpow * (-hit.dx * hit.dy);
                    g.conic[2] += gpow * (-0.5 * hit.dy * hit.dy);
                    for ch in 0..3 {
                        behind[ch] = hit.alpha * p.color[ch] + (1.0 - hit.alpha) * behind[ch];
                    }
                }
            }
        }
        acc
    });
    let mut screen = vec![ScreenGrad::default(); prep.len()];
    for (b, acc) in locals.iter().enumerate() {
        for (local, g) in acc.iter().enumerate() {
            screen[bands[b][local] as usize].add(g);
        }
    }

    let per_prep = par::map_range(prep.len(), |k| {
        let p = &prep[k];
        let s = &statics[p.index];
        let sg = &screen[k];
        let (gpos, grot, gscale) = backward_projection(s, pose, cam, &p.sg, sg);
        let mut out = SplatGrad {
            position: gpos,
            rotation: grot,
            scale: gscale,
            opacity: sg.opacity,
            color: sg.color,
            sh1: [[0.0; 3]; 3],
        };
        if let Some(sh) = &s.color.sh1 {
            let basis = ShColor::sh_basis(&p.dir);
            for k in 0..3 {
                for ch in 0..3 {
                    out.sh1[k][ch] = basis[k] * sg.color[ch];
                }
            }
            let dot = |k: usize| (0..3).map(|ch| sg.color[ch] * sh[k][ch]).sum::<f64>();
            let c1 = super::SH_C1;
            let gdir = Vector3::new(-c1 * dot(2), -c1 * dot(0), c1 * dot(1));
            let proj = gdir - p.dir * p.dir.dot(&gdir);
            out.position += proj / p.dist;
        }
        (p.index, out)
    });
    let mut grads = vec![SplatGrad::default(); scene.splats.len()];
    for (i, g) in per_prep {
        grads[static_idx[i]] = g;
    }
    for (k, &i) in dyn_idx.iter().enumerate() {
        grads[i].opacity = loss.opacity_grad[k];
    }
    Ok((loss, grads))
}
