//! In-memory float images plus the two on-disk raster formats: 8-bit PNG
//! for color and a small binary format for float channels (depth,
//! transparency, evaluation counts).
//!
//! Float raster layout: a 16-byte header — 8-byte magic `"VFRASTR\0"`,
//! u32 width, u32 height, little-endian — followed by `width * height`
//! little-endian f32 values in row-major order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const RASTER_MAGIC: &[u8; 8] = b"VFRASTR\0";

/// RGB image with channels in [0,1], row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: u32,
    pub height: u32,
    data: Vec<[f64; 3]>,
}

impl Image {
    pub fn new(width: u32, height: u32) -> Image {
        Image {
            width,
            height,
            data: vec![[0.0; 3]; (width * height) as usize],
        }
    }

    pub fn filled(width: u32, height: u32, color: [f64; 3]) -> Image {
        Image {
            width,
            height,
            data: vec![color; (width * height) as usize],
        }
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> [f64; 3] {
        self.data[(y * self.width + x) as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, c: [f64; 3]) {
        self.data[(y * self.width + x) as usize] = c;
    }

    pub fn pixels(&self) -> &[[f64; 3]] {
        &self.data
    }

    pub fn pixels_mut(&mut self) -> &mut [[f64; 3]] {
        &mut self.data
    }

    pub fn same_size(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Writes 8-bit RGB PNG, rounding each channel.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(self.data.len() * 3);
        for px in &self.data {
            for &c in px {
                buf.push((c.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        let img = image::RgbImage::from_raw(self.width, self.height, buf)
            .expect("buffer sized to dimensions");
        img.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        let img = image::open(path)?.to_rgb8();
        let (width, height) = img.dimensions();
        let data = img
            .pixels()
            .map(|p| {
                [
                    p.0[0] as f64 / 255.0,
                    p.0[1] as f64 / 255.0,
                    p.0[2] as f64 / 255.0,
                ]
            })
            .collect();
        Ok(Image {
            width,
            height,
            data,
        })
    }
}

/// Single-channel float raster (depth, transparency, counters).
#[derive(Debug, Clone, PartialEq)]
pub struct FloatRaster {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f32>,
}

impl FloatRaster {
    pub fn new(width: u32, height: u32) -> FloatRaster {
        FloatRaster {
            width,
            height,
            data: vec![0.0; (width * height) as usize],
        }
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> f32 {
        self.data[(y * self.width + x) as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, v: f32) {
        self.data[(y * self.width + x) as usize] = v;
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::with_capacity(16 + self.data.len() * 4);
        out.extend_from_slice(RASTER_MAGIC);
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<FloatRaster> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() < 16 || &bytes[..8] != RASTER_MAGIC {
            return Err(Error::Dataset {
                path: path.to_path_buf(),
                detail: "not a float raster (bad magic)".into(),
            });
        }
        let width = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        let height = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
        let expect = 16 + (width as usize) * (height as usize) * 4;
        if bytes.len() != expect {
            return Err(Error::Dataset {
                path: path.to_path_buf(),
                detail: format!("raster payload is {} bytes, want {}", bytes.len(), expect),
            });
        }
        let data = bytes[16..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(FloatRaster {
            width,
            height,
            data,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_raster_round_trips() {
        let dir = tempdir();
        let mut r = FloatRaster::new(7, 3);
        for (i, v) in r.data.iter_mut().enumerate() {
            *v = (i as f32).sin() * 10.0;
        }
        let path = dir.join("t.raw");
        r.save(&path).unwrap();
        assert_eq!(FloatRaster::load(&path).unwrap(), r);
    }

    #[test]
    fn png_round_trip_within_quantization() {
        let dir = tempdir();
        let mut img = Image::new(5, 4);
        for (i, px) in img.pixels_mut().iter_mut().enumerate() {
            *px = [
                (i as f64 * 0.05) % 1.0,
                (i as f64 * 0.13) % 1.0,
                (i as f64 * 0.29) % 1.0,
            ];
        }
        let path = dir.join("t.png");
        img.save_png(&path).unwrap();
        let back = Image::load_png(&path).unwrap();
        for (a, b) in img.pixels().iter().zip(back.pixels()) {
            for i in 0..3 {
                assert!((a[i] - b[i]).abs() <= 0.5 / 255.0 + 1e-9);
            }
        }
    }

    #[test]
    fn truncated_raster_is_rejected() {
        let dir = tempdir();
        let mut r = FloatRaster::new(4, 4);
        r.data[5] = 2.5;
        let path = dir.join("t.raw");
        r.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(FloatRaster::load(&path).is_err());
    }

    fn tempdir() -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!(
            "voxelfield-raster-{}-{:?}",
            std::process::id(),
            std::thread::current().id()
        ));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }
}
