//! Row-major float rasters and their image-file encodings.

use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("image i/o: {0}")]
    Image(#[from] image::ImageError),
    #[error("unsupported image extension for {0}")]
    Extension(String),
}

/// Three-channel image with values nominally in [0,1], stored `[r,g,b]` per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f64; 3]>,
}

/// Single-channel float image (grayscale intensities or depth in meters).
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, [0.0; 3])
    }

    pub fn filled(width: usize, height: usize, value: [f64; 3]) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: [f64; 3]) {
        self.data[y * self.width + x] = v;
    }

    pub fn same_dims(&self, other: &RgbImage) -> Result<(), RasterError> {
        if self.width != other.width || self.height != other.height {
            return Err(RasterError::DimensionMismatch(
                self.width,
                self.height,
                other.width,
                other.height,
            ));
        }
        Ok(())
    }

    /// Split into three single-channel planes.
    pub fn channels(&self) -> [GrayImage; 3] {
        std::array::from_fn(|c| GrayImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|p| p[c]).collect(),
        })
    }

    pub fn from_channels(ch: &[GrayImage; 3]) -> Self {
        let (w, h) = (ch[0].width, ch[0].height);
        Self {
            width: w,
            height: h,
            data: (0..w * h)
                .map(|i| [ch[0].data[i], ch[1].data[i], ch[2].data[i]])
                .collect(),
        }
    }

    /// Rec. 601 luma.
    pub fn to_gray(&self) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
                .collect(),
        }
    }

    /// Write as PNG (8-bit) or binary PPM, chosen by file extension.
    pub fn save(&self, path: &Path) -> Result<(), RasterError> {
        let mut buf = image::RgbImage::new(self.width as u32, self.height as u32);
        for (i, px) in buf.pixels_mut().enumerate() {
            let v = self.data[i];
            *px = image::Rgb(v.map(to_u8));
        }
        match ext(path).as_deref() {
            Some("png") => buf.save_with_format(path, image::ImageFormat::Png)?,
            Some("ppm") => buf.save_with_format(path, image::ImageFormat::Pnm)?,
            _ => return Err(RasterError::Extension(path.display().to_string())),
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, RasterError> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data = img
            .pixels()
            .map(|p| p.0.map(|c| c as f64 / 255.0))
            .collect();
        Ok(Self {
            width: w,
            height: h,
            data,
        })
    }
}

fn ext(path: &Path) -> Option<String> {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    fn get_clamped(&self, x: isize, y: isize) -> f64 {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.data[y * self.width + x]
    }

    /// Bilinear interpolation with clamp-to-edge addressing.
    pub fn sample(&self, x: f64, y: f64) -> f64 {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let (xi, yi) = (x0 as isize, y0 as isize);
        let a = self.get_clamped(xi, yi);
        let b = self.get_clamped(xi + 1, yi);
        let c = self.get_clamped(xi, yi + 1);
        let d = self.get_clamped(xi + 1, yi + 1);
        (1.0 - fy) * ((1.0 - fx) * a + fx * b) + fy * ((1.0 - fx) * c + fx * d)
    }

    /// Separable convolution with a symmetric odd-length kernel, clamp-to-edge borders.
    pub fn convolve_separable(&self, kernel: &[f64]) -> GrayImage {
        let r = (kernel.len() / 2) as isize;
        let (w, h) = (self.width, self.height);
        let mut tmp = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    acc += kv * self.get_clamped(x as isize + k as isize - r, y as isize);
                }
                tmp[y * w + x] = acc;
            }
        }
        let tmp = GrayImage {
            width: w,
            height: h,
            data: tmp,
        };
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    acc += kv * tmp.get_clamped(x as isize, y as isize + k as isize - r);
                }
                out[y * w + x] = acc;
            }
        }
        GrayImage {
            width: w,
            height: h,
            data: out,
        }
    }

    /// Keep even-indexed rows and columns; output is `ceil(w/2) x ceil(h/2)`.
    pub fn decimate(&self) -> GrayImage {
        let w = self.width.div_ceil(2);
        let h = self.height.div_ceil(2);
        GrayImage::from_fn(w, h, |x, y| self.get(2 * x, 2 * y))
    }

    /// Save as a 16-bit PNG with `value * scale` counts (TUM depth convention).
    pub fn save_u16_png(&self, path: &Path, scale: f64) -> Result<(), RasterError> {
        let mut buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(
            self.width as u32,
            self.height as u32,
        );
        for (i, px) in buf.pixels_mut().enumerate() {
            let v = (self.data[i] * scale).round().clamp(0.0, u16::MAX as f64);
            *px = image::Luma([v as u16]);
        }
        buf.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    /// Load a 16-bit PNG and divide counts by `scale`.
    pub fn load_u16_png(path: &Path, scale: f64) -> Result<Self, RasterError> {
        let img = image::open(path)?.to_luma16();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data = img.pixels().map(|p| p.0[0] as f64 / scale).collect();
        Ok(Self {
            width: w,
            height: h,
            data,
        })
    }
}

/// Normalized 1-D Gaussian kernel of odd `size`.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let mut k: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}
