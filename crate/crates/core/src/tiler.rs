//! Tile grid, background filtering, tile labels, and seeded sampling/splitting.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::annot::BinaryMask;
use crate::raster::RasterImage;
use crate::rng;
use crate::slide_store::SlideMeta;
use crate::{Error, Exec, Result};

pub const DEFAULT_TILE: usize = 256;

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TileCoord {
    pub slide_id: String,
    pub level: usize,
    pub col: usize,
    pub row: usize,
    pub x: usize,
    pub y: usize,
    pub size: usize,
}

impl TileCoord {
    pub fn new(slide_id: impl Into<String>, level: usize, col: usize, row: usize, size: usize) -> Self {
        Self { slide_id: slide_id.into(), level, col, row, x: col * size, y: row * size, size }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TileLabel {
    Cancer,
    Benign,
    Ambiguous,
    Background,
}

/// The two sampled classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassLabel {
    Cancer,
    Benign,
}

impl ClassLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            ClassLabel::Cancer => "cancer",
            ClassLabel::Benign => "benign",
        }
    }

    pub fn target(self) -> f32 {
        match self {
            ClassLabel::Cancer => 1.0,
            ClassLabel::Benign => 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TileRecord {
    pub coord: TileCoord,
    pub tissue_fraction: f64,
    pub cancer_fraction: f64,
    pub label: TileLabel,
}

impl TileRecord {
    /// Binary evaluation label (cancer fraction at or above the threshold).
    pub fn eval_label(&self, cancer_threshold: f64) -> bool {
        self.cancer_fraction >= cancer_threshold
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TissueThresholds {
    /// A pixel is white when its smallest channel is at least this value.
    pub white_min: u8,
    /// A tile is background when its white fraction exceeds this value.
    pub background_fraction: f64,
}

impl Default for TissueThresholds {
    fn default() -> Self {
        Self { white_min: 220, background_fraction: 0.80 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TissueCheck {
    pub is_background: bool,
    pub tissue_fraction: f64,
}

/// Non-overlapping `size` tiles covering the floor-cropped extent, row-major.
pub fn grid_tiles(slide_id: &str, level: usize, width: usize, height: usize, size: usize) -> Vec<TileCoord> {
    assert!(size >= 1, "tile size must be positive");
    let (cols, rows) = (width / size, height / size);
    if cols * rows == 0 {
        log::warn!("slide {slide_id}: {width}x{height} holds no full {size}px tile");
    }
    let mut out = Vec::with_capacity(cols * rows);
    for row in 0..rows {
        for col in 0..cols {
            out.push(TileCoord::new(slide_id, level, col, row, size));
        }
    }
    out
}

pub fn tissue_filter(patch: &RasterImage, thr: &TissueThresholds) -> TissueCheck {
    tissue_filter_rect(patch, 0, 0, patch.width(), patch.height(), thr)
}

/// [`tissue_filter`] on a sub-rectangle, without copying it out.
pub fn tissue_filter_rect(
    img: &RasterImage,
    x: usize,
    y: usize,
    w: usize,
    h: usize,
    thr: &TissueThresholds,
) -> TissueCheck {
    let mut white = 0usize;
    for row in y..y + h {
        let px = &img.row(row)[x * 3..(x + w) * 3];
        white += px
            .chunks_exact(3)
            .filter(|p| p[0].min(p[1]).min(p[2]) >= thr.white_min)
            .count();
    }
    let white_fraction = white as f64 / (w * h) as f64;
    TissueCheck {
        is_background: white_fraction > thr.background_fraction,
        tissue_fraction: 1.0 - white_fraction,
    }
}

/// Labels one tile from the mask; a background tissue check overrides the label.
pub fn label_tile(
    coord: &TileCoord,
    mask: &BinaryMask,
    tissue: TissueCheck,
    cancer_threshold: f64,
) -> Result<TileRecord> {
    if coord.x + coord.size > mask.width() || coord.y + coord.size > mask.height() {
        return Err(Error::OutOfBounds(format!(
            "tile ({},{}) of {} exceeds the {}x{} mask",
            coord.col,
            coord.row,
            coord.slide_id,
            mask.width(),
            mask.height()
        )));
    }
    let set = mask.count_rect(coord.x, coord.y, coord.size, coord.size);
    let cancer_fraction = set as f64 / (coord.size * coord.size) as f64;
    let label = if tissue.is_background {
        TileLabel::Background
    } else if cancer_fraction >= cancer_threshold {
        TileLabel::Cancer
    } else if set == 0 {
        TileLabel::Benign
    } else {
        TileLabel::Ambiguous
    };
    Ok(TileRecord { coord: coord.clone(), tissue_fraction: tissue.tissue_fraction, cancer_fraction, label })
}

/// Grid, filter and label every tile of one slide (level 0 of `img`).
pub fn label_slide(
    slide_id: &str,
    img: &RasterImage,
    mask: &BinaryMask,
    tile_size: usize,
    tissue: &TissueThresholds,
    cancer_threshold: f64,
    exec: Exec,
) -> Result<Vec<TileRecord>> {
    let grid = grid_tiles(slide_id, 0, img.width(), img.height(), tile_size);
    exec.map(&grid, |c| {
        let t = tissue_filter_rect(img, c.x, c.y, c.size, c.size, tissue);
        label_tile(c, mask, t, cancer_threshold)
    })
    .into_iter()
    .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub coord: TileCoord,
    pub label: ClassLabel,
    pub split: Option<Split>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleManifest {
    pub seed: u64,
    pub tile_size: usize,
    pub n_per_class: usize,
    pub entries: Vec<SampleEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestHeader {
    seed: u64,
    tile_size: usize,
    n_per_class: usize,
}

#[derive(Serialize, Deserialize)]
struct ManifestLine {
    slide: String,
    level: usize,
    col: usize,
    row: usize,
    label: ClassLabel,
    split: Split,
}

impl SampleManifest {
    /// Entry counts keyed by (split, class).
    pub fn counts(&self) -> BTreeMap<(Option<Split>, ClassLabel), usize> {
        let mut m = BTreeMap::new();
        for e in &self.entries {
            *m.entry((e.split, e.label)).or_insert(0) += 1;
        }
        m
    }

    pub fn count(&self, split: Split, label: ClassLabel) -> usize {
        self.entries.iter().filter(|e| e.split == Some(split) && e.label == label).count()
    }

    pub fn in_split(&self, split: Split) -> impl Iterator<Item = &SampleEntry> {
        self.entries.iter().filter(move |e| e.split == Some(split))
    }

    /// JSON lines: a header object followed by one object per entry.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&ManifestHeader {
            seed: self.seed,
            tile_size: self.tile_size,
            n_per_class: self.n_per_class,
        })?;
        out.push('\n');
        for e in &self.entries {
            let split = e.split.ok_or_else(|| {
                Error::InvalidArgument("cannot serialize a manifest with unsplit entries".into())
            })?;
            out.push_str(&serde_json::to_string(&ManifestLine {
                slide: e.coord.slide_id.clone(),
                level: e.coord.level,
                col: e.coord.col,
                row: e.coord.row,
                label: e.label,
                split,
            })?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: ManifestHeader = serde_json::from_str(
            lines.next().ok_or_else(|| Error::Corrupt("empty sample manifest".into()))?,
        )?;
        let entries = lines
            .map(|l| {
                let m: ManifestLine = serde_json::from_str(l)?;
                Ok(SampleEntry {
                    coord: TileCoord::new(m.slide, m.level, m.col, m.row, header.tile_size),
                    label: m.label,
                    split: Some(m.split),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { seed: header.seed, tile_size: header.tile_size, n_per_class: header.n_per_class, entries })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = self.to_jsonl()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(&text)
    }
}

fn draw(pool: &[&TileRecord], n: usize, seed: u64, purpose: &str, with_replacement: bool) -> Vec<TileCoord> {
    let mut rng = rng::stream(seed, purpose);
    if with_replacement {
        return (0..n).map(|_| pool[rng.random_range(0..pool.len())].coord.clone()).collect();
    }
    // Partial Fisher-Yates: the first n slots end up uniformly sampled without replacement.
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    for i in 0..n {
        let j = rng.random_range(i..idx.len());
        idx.swap(i, j);
    }
    idx[..n].iter().map(|&i| pool[i].coord.clone()).collect()
}

/// Draws exactly `n_per_class` cancer and benign tiles. Ambiguous and background tiles are never drawn.
pub fn sample_balanced(
    records: &[TileRecord],
    n_per_class: usize,
    seed: u64,
    with_replacement: bool,
) -> Result<SampleManifest> {
    let cancer: Vec<&TileRecord> = records.iter().filter(|r| r.label == TileLabel::Cancer).collect();
    let benign: Vec<&TileRecord> = records.iter().filter(|r| r.label == TileLabel::Benign).collect();
    for (class, pool) in [("cancer", &cancer), ("benign", &benign)] {
        let short = if with_replacement { pool.is_empty() && n_per_class > 0 } else { pool.len() < n_per_class };
        if short {
            return Err(Error::InsufficientPool { class: class.into(), needed: n_per_class, available: pool.len() });
        }
    }
    let tile_size = records.first().map_or(DEFAULT_TILE, |r| r.coord.size);
    let mut entries = Vec::with_capacity(2 * n_per_class);
    for (label, pool, purpose) in
        [(ClassLabel::Cancer, &cancer, "sample/cancer"), (ClassLabel::Benign, &benign, "sample/benign")]
    {
        entries.extend(
            draw(pool, n_per_class, seed, purpose, with_replacement)
                .into_iter()
                .map(|coord| SampleEntry { coord, label, split: None }),
        );
    }
    Ok(SampleManifest { seed, tile_size, n_per_class, entries })
}

/// Stratified train/val split: per class, `floor(ratio * n)` train and the rest val.
///
/// Entries that already carry a split are left untouched.
pub fn split_train_val(manifest: &SampleManifest, ratio: f64, seed: u64) -> Result<SampleManifest> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidArgument(format!("train/val ratio must be in (0,1), got {ratio}")));
    }
    let mut out = manifest.clone();
    let mut rng = rng::stream(seed, "split/val");
    let mut any = false;
    for class in [ClassLabel::Cancer, ClassLabel::Benign] {
        let mut idx: Vec<usize> = out
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.label == class && e.split.is_none())
            .map(|(i, _)| i)
            .collect();
        any |= !idx.is_empty();
        idx.shuffle(&mut rng);
        let n_train = (ratio * idx.len() as f64).floor() as usize;
        for (k, &i) in idx.iter().enumerate() {
            out.entries[i].split = Some(if k < n_train { Split::Train } else { Split::Val });
        }
    }
    if !any {
        return Err(Error::InvalidArgument("nothing to split: manifest has no unsplit entries".into()));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlideSplit {
    pub train_slides: Vec<SlideMeta>,
    pub test_slides: Vec<SlideMeta>,
}

/// Holds out about `n_test` slides, keeping every patient's slides on one side.
///
/// Patients are visited in seeded random order and moved to the test side
/// while that does not overshoot `n_test`.
pub fn split_slides(slides: &[SlideMeta], n_test: usize, seed: u64) -> Result<SlideSplit> {
    if n_test >= slides.len() && !(n_test == 0 && slides.is_empty()) {
        return Err(Error::InvalidArgument(format!(
            "n_test ({n_test}) must be smaller than the slide count ({})",
            slides.len()
        )));
    }
    let mut patients: Vec<&str> = Vec::new();
    for s in slides {
        if !patients.contains(&s.patient_id.as_str()) {
            patients.push(&s.patient_id);
        }
    }
    patients.shuffle(&mut rng::stream(seed, "split/slides"));
    let mut test_patients: Vec<&str> = Vec::new();
    let mut n = 0;
    for p in patients {
        let k = slides.iter().filter(|s| s.patient_id == p).count();
        if n + k <= n_test {
            test_patients.push(p);
            n += k;
        }
    }
    if n != n_test {
        log::warn!("patient grouping allows {n} test slides instead of {n_test}");
    }
    let (test, train): (Vec<_>, Vec<_>) =
        slides.iter().cloned().partition(|s| test_patients.contains(&s.patient_id.as_str()));
    Ok(SlideSplit { train_slides: train, test_slides: test })
}
