//! Planar floating point images and depth maps, with PNG conversion.

use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};

/// Channel-planar (CHW) image with values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::Shape(format!(
                "{channels}x{height}x{width} image needs {} values, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn rgb(width: usize, height: usize) -> Self {
        Self::filled(width, height, 3, 0.0)
    }

    pub fn gray(width: usize, height: usize) -> Self {
        Self::filled(width, height, 1, 0.0)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn plane_len(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, value: f64) {
        self.data[(c * self.height + y) * self.width + x] = value;
    }

    pub fn same_size(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn ensure_same_size(&self, other: &Image, what: &str) -> Result<()> {
        if self.same_size(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{what}: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )))
        }
    }

    pub fn mean_abs_diff(&self, other: &Image) -> f64 {
        let n = self.data.len().max(1) as f64;
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / n
    }

    /// Quantizes to 8 bits per channel, the resolution of the on-disk format.
    pub fn quantized(&self) -> Image {
        Image {
            data: self.data.iter().map(|&v| quantize_u8(v) as f64 / 255.0).collect(),
            ..self.clone()
        }
    }

    pub fn to_rgb8(&self) -> Result<ImageBuffer<Rgb<u8>, Vec<u8>>> {
        if self.channels != 3 {
            return Err(Error::Shape(format!(
                "expected 3 channels, got {}",
                self.channels
            )));
        }
        let plane = self.plane_len();
        let mut raw = Vec::with_capacity(plane * 3);
        for i in 0..plane {
            for c in 0..3 {
                raw.push(quantize_u8(self.data[c * plane + i]));
            }
        }
        Ok(ImageBuffer::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer length matches dimensions"))
    }

    pub fn from_rgb8(buf: &ImageBuffer<Rgb<u8>, Vec<u8>>) -> Self {
        let (w, h) = (buf.width() as usize, buf.height() as usize);
        let plane = w * h;
        let mut data = vec![0.0; plane * 3];
        for (i, px) in buf.pixels().enumerate() {
            for c in 0..3 {
                data[c * plane + i] = px[c] as f64 / 255.0;
            }
        }
        Self {
            width: w,
            height: h,
            channels: 3,
            data,
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()?
            .save(path)
            .map_err(|e| Error::decode(path, e))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::io(
                path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
            ));
        }
        let img = image::open(path).map_err(|e| Error::decode(path, e))?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }
}

fn quantize_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Per-pixel metric depth in meters.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::Shape(format!(
                "{width}x{height} depth map needs {} values, got {}",
                width * height,
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::Input(format!(
                "depth must be finite and non-negative, found {bad}"
            )));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn constant(width: usize, height: usize, meters: f64) -> Result<Self> {
        Self::new(width, height, vec![meters; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// Depth as stored on disk: whole millimeters, saturating at `u16::MAX`.
    pub fn to_millimeters(&self) -> Vec<u16> {
        self.values
            .iter()
            .map(|m| (m * 1000.0).round().clamp(0.0, u16::MAX as f64) as u16)
            .collect()
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, self.to_millimeters())
                .expect("buffer length matches dimensions");
        buf.save(path).map_err(|e| Error::decode(path, e))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::decode(path, e))?;
        let buf = img.to_luma16();
        let values = buf.pixels().map(|p| p[0] as f64 / 1000.0).collect();
        Self::new(buf.width() as usize, buf.height() as usize, values)
    }
}
