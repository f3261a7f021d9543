//! Tiled image pyramids on disk.
//!
//! Layout: `<root>/manifest.json` plus `<root>/L<level>/<col>_<row>.png`.
//! Every stored tile is `tile_size` square; tiles on the right/bottom edge are
//! padded with white. Each level halves the previous one (ceil) using a 2x2
//! box mean until the larger side fits in a single tile.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::raster::{load_raster, RasterImage};
use crate::{Error, Exec, Result};

pub const DEFAULT_STORE_TILE: usize = 256;
const MIN_TILE: usize = 16;
const PAD: [u8; 3] = [255, 255, 255];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlideMeta {
    pub slide_id: String,
    pub patient_id: String,
    /// Micrometers per pixel at level 0.
    pub mpp_x: f64,
    pub mpp_y: f64,
    pub width: usize,
    pub height: usize,
}

impl SlideMeta {
    pub fn validate(&self) -> Result<()> {
        if self.slide_id.is_empty() {
            return Err(Error::InvalidArgument("slide_id is empty".into()));
        }
        if !(self.mpp_x > 0.0 && self.mpp_y > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "slide {}: mpp must be positive, got ({}, {})",
                self.slide_id, self.mpp_x, self.mpp_y
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidArgument(format!("slide {} has zero extent", self.slide_id)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelInfo {
    pub level: usize,
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TileStoreManifest {
    pub slide_meta: SlideMeta,
    pub tile_size: usize,
    pub levels: Vec<LevelInfo>,
    pub storage_path: PathBuf,
}

/// On-disk form of `manifest.json`.
#[derive(Serialize, Deserialize)]
struct ManifestFile {
    slide_id: String,
    patient_id: String,
    mpp_x: f64,
    mpp_y: f64,
    tile_size: usize,
    levels: Vec<LevelInfo>,
}

/// Level dimensions for a `width`x`height` base: halve (ceil) until max side <= tile_size.
pub fn level_dims(width: usize, height: usize, tile_size: usize) -> Vec<LevelInfo> {
    let mut levels = vec![LevelInfo { level: 0, width, height }];
    let (mut w, mut h) = (width, height);
    while w.max(h) > tile_size {
        w = w.div_ceil(2);
        h = h.div_ceil(2);
        levels.push(LevelInfo { level: levels.len(), width: w, height: h });
    }
    levels
}

/// Halves a raster: each output pixel is the mean of the existing pixels of its
/// 2x2 parent block, rounded half away from zero.
pub fn downsample_2x(img: &RasterImage) -> RasterImage {
    let (w, h) = (img.width(), img.height());
    let (ow, oh) = (w.div_ceil(2), h.div_ceil(2));
    let mut out = vec![0u8; ow * oh * 3];
    let src = img.data();
    for oy in 0..oh {
        for ox in 0..ow {
            let mut sum = [0u32; 3];
            let mut n = 0u32;
            for y in 2 * oy..(2 * oy + 2).min(h) {
                for x in 2 * ox..(2 * ox + 2).min(w) {
                    let i = (y * w + x) * 3;
                    sum[0] += u32::from(src[i]);
                    sum[1] += u32::from(src[i + 1]);
                    sum[2] += u32::from(src[i + 2]);
                    n += 1;
                }
            }
            let o = (oy * ow + ox) * 3;
            for c in 0..3 {
                out[o + c] = ((2 * sum[c] + n) / (2 * n)) as u8;
            }
        }
    }
    RasterImage::new(ow, oh, out).expect("downsampled dims are positive")
}

fn tile_path(root: &Path, level: usize, col: usize, row: usize) -> PathBuf {
    root.join(format!("L{level}")).join(format!("{col}_{row}.png"))
}

fn padded_tile(img: &RasterImage, col: usize, row: usize, ts: usize) -> RasterImage {
    let mut tile = RasterImage::filled(ts, ts, PAD);
    let x0 = col * ts;
    let y0 = row * ts;
    let w = ts.min(img.width() - x0);
    let h = ts.min(img.height() - y0);
    for dy in 0..h {
        let src = &img.row(y0 + dy)[x0 * 3..(x0 + w) * 3];
        tile.data_mut()[dy * ts * 3..dy * ts * 3 + w * 3].copy_from_slice(src);
    }
    tile
}

/// Writes every level of `img` as PNG tiles under `root` and returns the manifest.
pub fn build_pyramid(
    img: &RasterImage,
    meta: &SlideMeta,
    tile_size: usize,
    root: &Path,
    exec: Exec,
) -> Result<TileStoreManifest> {
    if tile_size < MIN_TILE {
        return Err(Error::InvalidArgument(format!(
            "store tile size must be >= {MIN_TILE}, got {tile_size}"
        )));
    }
    meta.validate()?;
    if (meta.width, meta.height) != (img.width(), img.height()) {
        return Err(Error::ShapeMismatch(format!(
            "slide {} metadata says {}x{} but raster is {}x{}",
            meta.slide_id,
            meta.width,
            meta.height,
            img.width(),
            img.height()
        )));
    }
    let levels = level_dims(img.width(), img.height(), tile_size);
    let mut current = img.clone();
    for info in &levels {
        if info.level > 0 {
            current = downsample_2x(&current);
        }
        let dir = root.join(format!("L{}", info.level));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let cols = info.width.div_ceil(tile_size);
        let rows = info.height.div_ceil(tile_size);
        let results = exec.map_range(cols * rows, |i| {
            let (col, row) = (i % cols, i / cols);
            padded_tile(&current, col, row, tile_size).save_png(&tile_path(root, info.level, col, row))
        });
        results.into_iter().collect::<Result<Vec<()>>>()?;
    }
    let manifest = TileStoreManifest {
        slide_meta: meta.clone(),
        tile_size,
        levels,
        storage_path: root.to_path_buf(),
    };
    manifest.write()?;
    Ok(manifest)
}

impl TileStoreManifest {
    fn write(&self) -> Result<()> {
        let file = ManifestFile {
            slide_id: self.slide_meta.slide_id.clone(),
            patient_id: self.slide_meta.patient_id.clone(),
            mpp_x: self.slide_meta.mpp_x,
            mpp_y: self.slide_meta.mpp_y,
            tile_size: self.tile_size,
            levels: self.levels.clone(),
        };
        let path = self.storage_path.join("manifest.json");
        let mut text = serde_json::to_string_pretty(&file)?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// Opens an existing store rooted at `root`.
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let file: ManifestFile = serde_json::from_str(&text)?;
        let base = file
            .levels
            .first()
            .copied()
            .ok_or_else(|| Error::Corrupt(format!("{}: no levels", path.display())))?;
        let manifest = TileStoreManifest {
            slide_meta: SlideMeta {
                slide_id: file.slide_id,
                patient_id: file.patient_id,
                mpp_x: file.mpp_x,
                mpp_y: file.mpp_y,
                width: base.width,
                height: base.height,
            },
            tile_size: file.tile_size,
            levels: file.levels,
            storage_path: root.to_path_buf(),
        };
        manifest.slide_meta.validate()?;
        Ok(manifest)
    }

    pub fn level(&self, level: usize) -> Result<LevelInfo> {
        self.levels.get(level).copied().ok_or_else(|| {
            Error::OutOfBounds(format!(
                "level {level} does not exist (store has {})",
                self.levels.len()
            ))
        })
    }

    /// Reads a rectangle of level-local pixels, assembling it from the stored tiles.
    pub fn read_region(&self, level: usize, x: usize, y: usize, w: usize, h: usize) -> Result<RasterImage> {
        let info = self.level(level)?;
        if w == 0 || h == 0 || x + w > info.width || y + h > info.height {
            return Err(Error::OutOfBounds(format!(
                "region ({x},{y},{w},{h}) outside level {level} extent {}x{}",
                info.width, info.height
            )));
        }
        let ts = self.tile_size;
        let mut out = RasterImage::filled(w, h, PAD);
        for row in y / ts..=(y + h - 1) / ts {
            for col in x / ts..=(x + w - 1) / ts {
                let path = tile_path(&self.storage_path, level, col, row);
                let tile = load_raster(&path)?;
                if tile.width() != ts || tile.height() != ts {
                    return Err(Error::Corrupt(format!(
                        "{}: expected {ts}x{ts} tile",
                        path.display()
                    )));
                }
                // Intersection of the tile with the requested rect, in level coords.
                let tx0 = (col * ts).max(x);
                let ty0 = (row * ts).max(y);
                let tx1 = ((col + 1) * ts).min(x + w);
                let ty1 = ((row + 1) * ts).min(y + h);
                for ly in ty0..ty1 {
                    let src = &tile.row(ly - row * ts)[(tx0 - col * ts) * 3..(tx1 - col * ts) * 3];
                    let dst_start = ((ly - y) * w + (tx0 - x)) * 3;
                    out.data_mut()[dst_start..dst_start + src.len()].copy_from_slice(src);
                }
            }
        }
        Ok(out)
    }

    /// The full raster of one level.
    pub fn read_level(&self, level: usize) -> Result<RasterImage> {
        let info = self.level(level)?;
        self.read_region(level, 0, 0, info.width, info.height)
    }
}
