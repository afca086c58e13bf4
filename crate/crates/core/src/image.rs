//! Grayscale image buffer shared by the generator, the data pipeline and the
//! models. Pixels are `f32` intensities in `[0, 1]`, stored row-major.

use std::path::Path;

use image::{GrayImage, Luma};

use crate::error::{Error, Result};

/// Working resolution of every image that enters the model.
pub const SIZE: usize = 128;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<f32>,
}

impl Image {
    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Image {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    /// A working-resolution image with every pixel set to `value`.
    pub fn constant(value: f32) -> Self {
        Self::filled(SIZE, SIZE, value)
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Image {
            width,
            height,
            pixels,
        }
    }

    pub fn from_pixels(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::Shape(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        Ok(Image {
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<f32> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.pixels[y * self.width + x] = v;
    }

    pub fn is_working_size(&self) -> bool {
        self.width == SIZE && self.height == SIZE
    }

    pub fn ensure_working_size(&self) -> Result<()> {
        if self.is_working_size() {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "expected a {SIZE}x{SIZE} image, got {}x{}",
                self.width, self.height
            )))
        }
    }

    pub fn clamp_unit(&mut self) {
        for p in &mut self.pixels {
            *p = p.clamp(0.0, 1.0);
        }
    }

    /// Per-pixel arithmetic mean of equally sized images.
    pub fn mean_of(images: &[Image]) -> Result<Image> {
        let first = images.first().ok_or(Error::Empty("image list"))?;
        let mut acc = vec![0.0f64; first.pixels.len()];
        for img in images {
            if img.width != first.width || img.height != first.height {
                return Err(Error::Shape(format!(
                    "cannot average {}x{} with {}x{}",
                    img.width, img.height, first.width, first.height
                )));
            }
            for (a, &p) in acc.iter_mut().zip(&img.pixels) {
                *a += p as f64;
            }
        }
        let n = images.len() as f64;
        Ok(Image {
            width: first.width,
            height: first.height,
            pixels: acc.into_iter().map(|a| (a / n) as f32).collect(),
        })
    }

    pub fn flip_horizontal(&self) -> Image {
        Image::from_fn(self.width, self.height, |x, y| {
            self.get(self.width - 1 - x, y)
        })
    }

    pub fn flip_vertical(&self) -> Image {
        Image::from_fn(self.width, self.height, |x, y| {
            self.get(x, self.height - 1 - y)
        })
    }

    /// Counter-clockwise rotation by `quarter_turns`·90°.
    pub fn rotate90(&self, quarter_turns: u32) -> Image {
        let mut out = self.clone();
        for _ in 0..quarter_turns % 4 {
            let src = &out;
            let (w, h) = (src.width, src.height);
            out = Image::from_fn(h, w, |x, y| src.get(w - 1 - y, x));
        }
        out
    }

    /// Bilinear resampling of the `crop_w`×`crop_h` window at `(x0, y0)` to
    /// `out_w`×`out_h`, using pixel-center alignment.
    pub fn resized_crop(
        &self,
        x0: usize,
        y0: usize,
        crop_w: usize,
        crop_h: usize,
        out_w: usize,
        out_h: usize,
    ) -> Image {
        assert!(x0 + crop_w <= self.width && y0 + crop_h <= self.height);
        let sx = crop_w as f32 / out_w as f32;
        let sy = crop_h as f32 / out_h as f32;
        Image::from_fn(out_w, out_h, |x, y| {
            let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (crop_w - 1) as f32);
            let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (crop_h - 1) as f32);
            let (ix, iy) = (fx.floor() as usize, fy.floor() as usize);
            let (tx, ty) = (fx - ix as f32, fy - iy as f32);
            let ix1 = (ix + 1).min(crop_w - 1);
            let iy1 = (iy + 1).min(crop_h - 1);
            let p = |cx: usize, cy: usize| self.get(x0 + cx, y0 + cy);
            let top = p(ix, iy) * (1.0 - tx) + p(ix1, iy) * tx;
            let bot = p(ix, iy1) * (1.0 - tx) + p(ix1, iy1) * tx;
            top * (1.0 - ty) + bot * ty
        })
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Image {
        assert!(x0 + w <= self.width && y0 + h <= self.height);
        Image::from_fn(w, h, |x, y| self.get(x0 + x, y0 + y))
    }

    /// Separable Gaussian blur with clamp-to-edge borders. `sigma <= 0` is a
    /// no-op.
    pub fn gaussian_blur(&self, sigma: f32) -> Image {
        if sigma <= 0.0 {
            return self.clone();
        }
        let kernel = gaussian_kernel(sigma);
        self.separable_filter(&kernel)
    }

    /// Mean filter over a `size`×`size` window with clamp-to-edge borders.
    pub fn box_blur(&self, size: usize) -> Image {
        if size <= 1 {
            return self.clone();
        }
        let kernel = vec![1.0 / size as f32; size];
        self.separable_filter(&kernel)
    }

    fn separable_filter(&self, kernel: &[f32]) -> Image {
        let r = (kernel.len() / 2) as isize;
        let (w, h) = (self.width as isize, self.height as isize);
        let mut tmp = vec![0.0f32; self.pixels.len()];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, &k) in kernel.iter().enumerate() {
                    let sx = (x + i as isize - r).clamp(0, w - 1);
                    acc += k * self.pixels[(y * w + sx) as usize];
                }
                tmp[(y * w + x) as usize] = acc;
            }
        }
        let mut out = vec![0.0f32; self.pixels.len()];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, &k) in kernel.iter().enumerate() {
                    let sy = (y + i as isize - r).clamp(0, h - 1);
                    acc += k * tmp[(sy * w + x) as usize];
                }
                out[(y * w + x) as usize] = acc;
            }
        }
        Image {
            width: self.width,
            height: self.height,
            pixels: out,
        }
    }

    /// 8-bit quantization used for PNG output: `round(p·255)`.
    pub fn to_gray8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_gray8(width: usize, height: usize, bytes: &[u8]) -> Result<Image> {
        Image::from_pixels(
            width,
            height,
            bytes.iter().map(|&b| b as f32 / 255.0).collect(),
        )
    }

    /// The image after a PNG round-trip.
    pub fn quantized(&self) -> Image {
        Image::from_gray8(self.width, self.height, &self.to_gray8()).expect("same dimensions")
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let buf = GrayImage::from_raw(self.width as u32, self.height as u32, self.to_gray8())
            .expect("buffer matches dimensions");
        buf.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Image> {
        let img = image::open(path)?.into_luma8();
        let (w, h) = img.dimensions();
        let bytes: Vec<u8> = img.pixels().map(|Luma([v])| *v).collect();
        Image::from_gray8(w as usize, h as usize, &bytes)
    }
}

fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> Image {
        Image::from_fn(SIZE, SIZE, |x, y| ((x * 7 + y * 13) % 256) as f32 / 255.0)
    }

    #[test]
    fn rotation_group_closes_after_four_turns() {
        let img = ramp();
        assert_eq!(img.rotate90(4), img);
        assert_eq!(img.rotate90(1).rotate90(3), img);
        assert_ne!(img.rotate90(1), img);
    }

    #[test]
    fn flips_are_involutions() {
        let img = ramp();
        assert_eq!(img.flip_horizontal().flip_horizontal(), img);
        assert_eq!(img.flip_vertical().flip_vertical(), img);
    }

    #[test]
    fn full_window_resize_is_identity() {
        let img = ramp();
        let out = img.resized_crop(0, 0, SIZE, SIZE, SIZE, SIZE);
        assert_eq!(out, img);
    }

    #[test]
    fn blur_preserves_constant_images() {
        let img = Image::constant(0.4);
        let b = img.gaussian_blur(1.3);
        assert!(b.pixels().iter().all(|&p| (p - 0.4).abs() < 1e-6));
        let m = img.box_blur(5);
        assert!(m.pixels().iter().all(|&p| (p - 0.4).abs() < 1e-6));
    }

    #[test]
    fn mean_of_rejects_empty_and_mismatched() {
        assert!(Image::mean_of(&[]).is_err());
        let a = Image::filled(4, 4, 0.0);
        let b = Image::filled(5, 4, 0.0);
        assert!(Image::mean_of(&[a, b]).is_err());
    }

    #[test]
    fn png_round_trip_matches_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let img = ramp();
        img.save_png(&path).unwrap();
        let back = Image::load_png(&path).unwrap();
        assert_eq!(back, img.quantized());
    }
}
