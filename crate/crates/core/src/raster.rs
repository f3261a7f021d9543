//! 8-bit RGB rasters and their PNG / binary-PPM codecs.

use std::path::Path;

use crate::{Error, Result};

const PNG_MAGIC: &[u8] = b"\x89PNG\r\n\x1a\n";

/// Row-major interleaved RGB, 8 bits per sample.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RasterImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RasterImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!(
                "raster dimensions must be positive, got {width}x{height}"
            )));
        }
        if data.len() != width * height * 3 {
            return Err(Error::InvalidArgument(format!(
                "raster {width}x{height} needs {} bytes, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    /// A raster filled with one color.
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        assert!(width > 0 && height > 0, "raster dimensions must be positive");
        let data = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// One row as an RGB byte slice.
    pub fn row(&self, y: usize) -> &[u8] {
        let stride = self.width * 3;
        &self.data[y * stride..(y + 1) * stride]
    }

    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<RasterImage> {
        if w == 0 || h == 0 || x + w > self.width || y + h > self.height {
            return Err(Error::OutOfBounds(format!(
                "crop ({x},{y},{w},{h}) of a {}x{} raster",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(w * h * 3);
        for row in y..y + h {
            let start = (row * self.width + x) * 3;
            data.extend_from_slice(&self.data[start..start + w * 3]);
        }
        Ok(RasterImage { width: w, height: h, data })
    }

    /// Box-mean downscale to `size`x`size`, rounded half up, appended to `out` in HWC order.
    ///
    /// The raster must be square with a side that is a multiple of `size`.
    pub fn box_downscale_into(&self, size: usize, out: &mut Vec<u8>) -> Result<()> {
        if self.width != self.height || size == 0 || self.width % size != 0 {
            return Err(Error::ShapeMismatch(format!(
                "cannot box-downscale a {}x{} tile to {size}x{size}",
                self.width, self.height
            )));
        }
        let f = self.width / size;
        if f == 1 {
            out.extend_from_slice(&self.data);
            return Ok(());
        }
        let area = (f * f) as u32;
        for oy in 0..size {
            for ox in 0..size {
                let mut sum = [0u32; 3];
                for dy in 0..f {
                    let row = self.row(oy * f + dy);
                    for dx in 0..f {
                        let i = (ox * f + dx) * 3;
                        sum[0] += u32::from(row[i]);
                        sum[1] += u32::from(row[i + 1]);
                        sum[2] += u32::from(row[i + 2]);
                    }
                }
                for s in sum {
                    out.push(((2 * s + area) / (2 * area)) as u8);
                }
            }
        }
        Ok(())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        save_png_bytes(path, self.width, self.height, image::ColorType::Rgb8, &self.data)
    }
}

pub(crate) fn save_png_bytes(
    path: &Path,
    width: usize,
    height: usize,
    color: image::ColorType,
    data: &[u8],
) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    image::save_buffer_with_format(
        path,
        data,
        width as u32,
        height as u32,
        color,
        image::ImageFormat::Png,
    )
    .map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image(other.to_string()),
    })
}

/// Loads a PNG or binary PPM (P6) as 8-bit RGB. Grayscale is replicated to three channels.
pub fn load_raster(path: &Path) -> Result<RasterImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_raster(&bytes).map_err(|e| match e {
        Error::Corrupt(msg) => Error::Corrupt(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn decode_raster(bytes: &[u8]) -> Result<RasterImage> {
    let format = if bytes.starts_with(PNG_MAGIC) {
        image::ImageFormat::Png
    } else if bytes.starts_with(b"P6") {
        image::ImageFormat::Pnm
    } else {
        return Err(Error::UnsupportedFormat(
            "expected PNG or binary PPM (P6)".to_string(),
        ));
    };
    let img = image::load_from_memory_with_format(bytes, format)
        .map_err(|e| Error::Corrupt(e.to_string()))?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    RasterImage::new(w as usize, h as usize, rgb.into_raw())
}

/// Loads an 8-bit image as single-channel luma (used for mask PNGs).
pub(crate) fn load_gray(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
        .map_err(|e| Error::Corrupt(format!("{}: {e}", path.display())))?;
    let g = img.to_luma8();
    let (w, h) = g.dimensions();
    Ok((w as usize, h as usize, g.into_raw()))
}
