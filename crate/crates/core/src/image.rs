//! In-memory RGB images and scalar planes in `[0, 1]` floating point, plus
//! 8-bit file I/O.

use std::path::Path;

use image::{ColorType, ImageReader, RgbImage};

use crate::error::{Error, Result};

/// BT.601 luma weights.
pub const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

/// Interleaved H×W×3 image. Values are expected in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid(format!("image size {width}x{height} must be positive")));
        }
        if data.len() != width * height * 3 {
            return Err(Error::shape(width * height * 3, data.len()));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let data = std::iter::repeat(rgb).take(width * height).flatten().collect();
        Self { width, height, data }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn pixels(&self) -> impl Iterator<Item = [f32; 3]> + '_ {
        self.data.chunks_exact(3).map(|p| [p[0], p[1], p[2]])
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn clamped(&self) -> Self {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_dims(&self, other: &Image) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::shape(self.dims(), other.dims()));
        }
        Ok(())
    }

    pub fn luminance(&self) -> Plane {
        Plane {
            width: self.width,
            height: self.height,
            data: self
                .pixels()
                .map(|p| LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2])
                .collect(),
        }
    }

    /// Per-pixel minimum over channels.
    pub fn channel_min(&self) -> Plane {
        Plane {
            width: self.width,
            height: self.height,
            data: self.pixels().map(|p| p[0].min(p[1]).min(p[2])).collect(),
        }
    }

    /// Bilinear resampling with pixel-center alignment and edge clamping.
    pub fn resize_bilinear(&self, width: usize, height: usize) -> Image {
        if (width, height) == self.dims() {
            return self.clone();
        }
        let sx = self.width as f32 / width as f32;
        let sy = self.height as f32 / height as f32;
        let axis = |o: usize, scale: f32, len: usize| {
            let pos = ((o as f32 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, pos - i0 as f32)
        };
        Image::from_fn(width, height, |x, y| {
            let (x0, x1, fx) = axis(x, sx, self.width);
            let (y0, y1, fy) = axis(y, sy, self.height);
            let (a, b, c, d) = (self.pixel(x0, y0), self.pixel(x1, y0), self.pixel(x0, y1), self.pixel(x1, y1));
            std::array::from_fn(|ch| {
                let top = a[ch] + (b[ch] - a[ch]) * fx;
                let bottom = c[ch] + (d[ch] - c[ch]) * fx;
                top + (bottom - top) * fy
            })
        })
    }

    /// Rounds to 8 bits per channel.
    pub fn to_rgb8(&self) -> RgbImage {
        let bytes = self.data.iter().map(|&v| quantize(v)).collect();
        RgbImage::from_raw(self.width as u32, self.height as u32, bytes).expect("buffer size matches dimensions")
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        Self {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img.as_raw().iter().map(|&b| b as f32 / 255.0).collect(),
        }
    }

    /// The image after an 8-bit round trip.
    pub fn quantized(&self) -> Self {
        self.map(|v| quantize(v) as f32 / 255.0)
    }
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Single-channel H×W map.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Plane {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid(format!("plane size {width}x{height} must be positive")));
        }
        if data.len() != width * height {
            return Err(Error::shape(width * height, data.len()));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }
}

/// Decoded image plus a note when the file was not already 8-bit RGB.
pub struct Decoded {
    pub image: Image,
    pub conversion: Option<String>,
}

pub fn decode_image(path: &Path) -> Result<Decoded> {
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
    let color = img.color();
    let conversion = (color != ColorType::Rgb8).then(|| format!("{}: converted {color:?} to 8-bit RGB", path.display()));
    Ok(Decoded {
        image: Image::from_rgb8(&img.to_rgb8()),
        conversion,
    })
}

/// Reads an image as RGB, logging a warning if a conversion was needed.
pub fn load_image(path: &Path) -> Result<Image> {
    let decoded = decode_image(path)?;
    if let Some(note) = decoded.conversion {
        log::warn!("{note}");
    }
    Ok(decoded.image)
}

/// Writes an 8-bit RGB file; the format follows the extension.
pub fn save_image(path: &Path, image: &Image) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    image.to_rgb8().save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_identity_and_constant() {
        let img = Image::from_fn(5, 4, |x, y| [x as f32 / 5.0, y as f32 / 4.0, 0.5]);
        assert_eq!(img.resize_bilinear(5, 4), img);
        let flat = Image::filled(7, 3, [0.2, 0.4, 0.6]);
        let big = flat.resize_bilinear(16, 9);
        assert!(big.data().chunks(3).all(|p| (p[0] - 0.2).abs() < 1e-6 && (p[2] - 0.6).abs() < 1e-6));
    }

    #[test]
    fn downsample_by_two_averages_pairs() {
        let img = Image::from_fn(4, 1, |x, _| [x as f32, 0.0, 0.0]);
        let half = img.resize_bilinear(2, 1);
        assert_eq!(half.pixel(0, 0)[0], 0.5);
        assert_eq!(half.pixel(1, 0)[0], 2.5);
    }

    #[test]
    fn png_roundtrip_is_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let img = Image::from_fn(3, 2, |x, y| [x as f32 * 0.3, y as f32 * 0.7, 0.123]);
        save_image(&path, &img).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(back, img.quantized());
    }

    #[test]
    fn gray_input_is_converted_with_note() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.png");
        image::GrayImage::from_pixel(2, 2, image::Luma([128])).save(&path).unwrap();
        let decoded = decode_image(&path).unwrap();
        assert!(decoded.conversion.is_some());
        assert_eq!(decoded.image.pixel(1, 1), [128.0 / 255.0; 3]);
    }
}
