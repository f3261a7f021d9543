//! ROC-AUC (exact rank statistic and histogram-binned), probability maps,
//! slide evaluation and regime comparison.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::annot::BinaryMask;
use crate::nnet::{predict_dataset, Checkpoint, TileDataset};
use crate::raster::{save_png_bytes, RasterImage};
use crate::tiler::{grid_tiles, label_tile, tissue_filter_rect, TileCoord, TileLabel, TileRecord, TissueThresholds};
use crate::{Error, Exec, Result};

pub const DEFAULT_BINS: usize = 65_536;

/// Exact AUC: `(wins + ties / 2) / (P * N)` over all positive/negative pairs.
///
/// Sorting makes this O(n log n); counts stay integral until the final division.
pub fn auc_exact(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("NaN score".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let (mut neg_below, mut twice_num) = (0u128, 0u128);
    let (mut p_total, mut n_total) = (0u128, 0u128);
    let mut i = 0;
    while i < idx.len() {
        let s = scores[idx[i]];
        let (mut p, mut n) = (0u128, 0u128);
        while i < idx.len() && scores[idx[i]] == s {
            if labels[idx[i]] {
                p += 1;
            } else {
                n += 1;
            }
            i += 1;
        }
        twice_num += p * (2 * neg_below + n);
        neg_below += n;
        p_total += p;
        n_total += n;
    }
    if p_total == 0 || n_total == 0 {
        return Err(Error::UndefinedAuc(format!("{p_total} positives and {n_total} negatives")));
    }
    Ok(twice_num as f64 / (2 * p_total * n_total) as f64)
}

/// Per-bin positive and negative weights over `[0,1]`; bin `b` covers
/// `[b/B, (b+1)/B)` and the last bin is closed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassHistogram {
    pos: Vec<u64>,
    neg: Vec<u64>,
}

impl ClassHistogram {
    pub fn new(bins: usize) -> Self {
        assert!(bins > 0, "histogram needs at least one bin");
        Self { pos: vec![0; bins], neg: vec![0; bins] }
    }

    pub fn bins(&self) -> usize {
        self.pos.len()
    }

    /// Bin index of a score; scores are clamped to [0,1].
    pub fn bin_of(&self, score: f64) -> usize {
        let b = self.bins();
        let s = if score.is_nan() { 0.0 } else { score.clamp(0.0, 1.0) };
        ((s * b as f64).floor() as usize).min(b - 1)
    }

    pub fn add(&mut self, score: f64, positive: u64, negative: u64) {
        let b = self.bin_of(score);
        self.pos[b] += positive;
        self.neg[b] += negative;
    }

    pub fn merge(&mut self, other: &ClassHistogram) -> Result<()> {
        if other.bins() != self.bins() {
            return Err(Error::ShapeMismatch(format!("merging {} bins into {}", other.bins(), self.bins())));
        }
        for (a, b) in self.pos.iter_mut().zip(&other.pos) {
            *a += b;
        }
        for (a, b) in self.neg.iter_mut().zip(&other.neg) {
            *a += b;
        }
        Ok(())
    }

    pub fn total_pos(&self) -> u64 {
        self.pos.iter().sum()
    }

    pub fn total_neg(&self) -> u64 {
        self.neg.iter().sum()
    }
}

/// AUC from a histogram, ascending-bin accumulation with in-bin ties counted half.
pub fn auc_binned(hist: &ClassHistogram) -> Result<f64> {
    let (mut neg_below, mut twice_num) = (0u128, 0u128);
    for (&p, &n) in hist.pos.iter().zip(&hist.neg) {
        let (p, n) = (u128::from(p), u128::from(n));
        twice_num += p * (2 * neg_below + n);
        neg_below += n;
    }
    let (p, n) = (u128::from(hist.total_pos()), u128::from(hist.total_neg()));
    if p == 0 || n == 0 {
        return Err(Error::UndefinedAuc(format!("histogram has {p} positive and {n} negative weight")));
    }
    Ok(twice_num as f64 / (2 * p * n) as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredTile {
    pub coord: TileCoord,
    pub score: f64,
    pub eval_label: bool,
    pub cancer_pixels: u64,
    pub benign_pixels: u64,
}

/// Per-tile scores on the slide's tile grid; `None` marks unscored (background) tiles.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMap {
    pub slide_id: String,
    pub cols: usize,
    pub rows: usize,
    pub tile_size: usize,
    pub width: usize,
    pub height: usize,
    pub cells: Vec<Option<f64>>,
}

#[derive(Serialize)]
struct HeatmapSidecar<'a> {
    slide_id: &'a str,
    cols: usize,
    rows: usize,
    tile_size: usize,
    sentinel: Vec<[usize; 2]>,
}

impl ProbabilityMap {
    pub fn get(&self, col: usize, row: usize) -> Option<f64> {
        self.cells[row * self.cols + col]
    }

    /// 8-bit grayscale, one pixel per tile: `round(score * 255)`, sentinel 0.
    pub fn heatmap_pixels(&self) -> Vec<u8> {
        self.cells.iter().map(|c| c.map_or(0, |s| (s.clamp(0.0, 1.0) * 255.0).round() as u8)).collect()
    }

    /// Writes the heatmap PNG and a JSON sidecar listing sentinel cells as `[col,row]`.
    pub fn save_heatmap(&self, png: &Path, sidecar: &Path) -> Result<()> {
        if self.cols == 0 || self.rows == 0 {
            return Err(Error::Map(format!("slide {} has an empty tile grid", self.slide_id)));
        }
        save_png_bytes(png, self.cols, self.rows, image::ColorType::L8, &self.heatmap_pixels())?;
        let sentinel = (0..self.cells.len())
            .filter(|&i| self.cells[i].is_none())
            .map(|i| [i % self.cols, i / self.cols])
            .collect();
        let meta = HeatmapSidecar {
            slide_id: &self.slide_id,
            cols: self.cols,
            rows: self.rows,
            tile_size: self.tile_size,
            sentinel,
        };
        let mut text = serde_json::to_string_pretty(&meta)?;
        text.push('\n');
        std::fs::write(sidecar, text).map_err(|e| Error::io(sidecar, e))
    }
}

/// Places tile scores on a `cols x rows` grid.
pub fn build_probability_map(
    slide_id: &str,
    scored: &[ScoredTile],
    cols: usize,
    rows: usize,
    tile_size: usize,
) -> Result<ProbabilityMap> {
    let mut cells = vec![None; cols * rows];
    for t in scored {
        let (c, r) = (t.coord.col, t.coord.row);
        if c >= cols || r >= rows {
            return Err(Error::Map(format!("tile ({c},{r}) is off the {cols}x{rows} grid")));
        }
        let cell = &mut cells[r * cols + c];
        if cell.is_some() {
            return Err(Error::Map(format!("duplicate tile ({c},{r})")));
        }
        *cell = Some(t.score);
    }
    Ok(ProbabilityMap {
        slide_id: slide_id.to_string(),
        cols,
        rows,
        tile_size,
        width: cols * tile_size,
        height: rows * tile_size,
        cells,
    })
}

/// Pixel-level class histogram: every pixel inherits its tile's score.
///
/// Sentinel tiles are excluded (their pixel count is returned) unless
/// `include_background`, in which case they are scored 0.
pub fn pixel_histogram(
    map: &ProbabilityMap,
    mask: &BinaryMask,
    include_background: bool,
    bins: usize,
    exec: Exec,
) -> Result<(ClassHistogram, u64)> {
    if map.cols * map.tile_size > mask.width() || map.rows * map.tile_size > mask.height() {
        return Err(Error::Map(format!(
            "mask {}x{} does not cover the {}x{} tile span",
            mask.width(),
            mask.height(),
            map.cols * map.tile_size,
            map.rows * map.tile_size
        )));
    }
    let ts = map.tile_size;
    let area = (ts * ts) as u64;
    let parts = exec.map_range(map.rows, |r| {
        let mut h = ClassHistogram::new(bins);
        let mut excluded = 0u64;
        for c in 0..map.cols {
            let score = match map.get(c, r) {
                Some(s) => s,
                None if include_background => 0.0,
                None => {
                    excluded += area;
                    continue;
                }
            };
            let cancer = mask.count_rect(c * ts, r * ts, ts, ts);
            h.add(score, cancer, area - cancer);
        }
        (h, excluded)
    });
    let mut hist = ClassHistogram::new(bins);
    let mut excluded = 0;
    for (h, e) in parts {
        hist.merge(&h)?;
        excluded += e;
    }
    Ok((hist, excluded))
}

pub fn pixel_auc(map: &ProbabilityMap, mask: &BinaryMask) -> Result<f64> {
    if map.cells.iter().all(Option::is_none) {
        return Err(Error::UndefinedAuc(format!("slide {} has no scored tile", map.slide_id)));
    }
    let (hist, _) = pixel_histogram(map, mask, false, DEFAULT_BINS, Exec::Sequential)?;
    auc_binned(&hist)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Tile,
    Pixel,
}

impl Level {
    pub fn as_str(self) -> &'static str {
        match self {
            Level::Tile => "tile",
            Level::Pixel => "pixel",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AucRow {
    pub level: Level,
    /// Slide id, or `"overall"` for the pooled row.
    pub slide: String,
    /// `None` when the slide holds a single class.
    pub auc: Option<f64>,
    pub n_pos: u64,
    pub n_neg: u64,
    pub n_excluded: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AucReport {
    pub regime: String,
    pub rows: Vec<AucRow>,
}

pub const OVERALL: &str = "overall";

fn fmt_auc(a: Option<f64>) -> String {
    a.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"))
}

impl AucReport {
    pub fn overall(&self, level: Level) -> Option<f64> {
        self.rows.iter().find(|r| r.level == level && r.slide == OVERALL).and_then(|r| r.auc)
    }

    pub fn slide_rows(&self, level: Level) -> impl Iterator<Item = &AucRow> {
        self.rows.iter().filter(move |r| r.level == level && r.slide != OVERALL)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("level,regime,slide_id,auc,n_pos,n_neg,n_excluded\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.level.as_str(),
                self.regime,
                r.slide,
                fmt_auc(r.auc),
                r.n_pos,
                r.n_neg,
                r.n_excluded
            );
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub tile_size: usize,
    pub tissue: TissueThresholds,
    pub cancer_threshold: f64,
    pub include_background: bool,
    pub bins: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            tile_size: crate::tiler::DEFAULT_TILE,
            tissue: TissueThresholds::default(),
            cancer_threshold: 0.5,
            include_background: false,
            bins: DEFAULT_BINS,
        }
    }
}

/// A held-out slide: level-0 raster and its rasterized annotation mask.
pub struct EvalSlide {
    pub slide_id: String,
    pub image: RasterImage,
    pub mask: BinaryMask,
}

/// A slide reduced to what scoring needs: labeled grid plus model inputs for tissue tiles.
pub struct PreparedSlide {
    pub slide_id: String,
    pub cols: usize,
    pub rows: usize,
    pub records: Vec<TileRecord>,
    /// Inputs for the non-background records, in record order.
    pub inputs: TileDataset,
    pub mask: BinaryMask,
}

pub fn prepare_slide(slide: &EvalSlide, input_size: usize, cfg: &EvalConfig, exec: Exec) -> Result<PreparedSlide> {
    let ts = cfg.tile_size;
    let grid = grid_tiles(&slide.slide_id, 0, slide.image.width(), slide.image.height(), ts);
    let records: Vec<TileRecord> = exec
        .map(&grid, |c| {
            let t = tissue_filter_rect(&slide.image, c.x, c.y, ts, ts, &cfg.tissue);
            label_tile(c, &slide.mask, t, cfg.cancer_threshold)
        })
        .into_iter()
        .collect::<Result<_>>()?;
    let mut inputs = TileDataset::new(input_size);
    for r in records.iter().filter(|r| r.label != TileLabel::Background) {
        let tile = slide.image.crop(r.coord.x, r.coord.y, ts, ts)?;
        inputs.push_tile(&tile, if r.eval_label(cfg.cancer_threshold) { 1.0 } else { 0.0 })?;
    }
    if inputs.is_empty() {
        return Err(Error::InvalidArgument(format!("slide {} has no non-background tiles", slide.slide_id)));
    }
    Ok(PreparedSlide {
        slide_id: slide.slide_id.clone(),
        cols: slide.image.width() / ts,
        rows: slide.image.height() / ts,
        records,
        inputs,
        mask: slide.mask.clone(),
    })
}

/// Scored tiles of one slide: the model's outputs for its tissue tiles.
pub fn score_slide(ckpt: &Checkpoint, slide: &PreparedSlide, cfg: &EvalConfig, exec: Exec) -> Result<Vec<ScoredTile>> {
    let scores = predict_dataset(&ckpt.spec, &ckpt.params, &slide.inputs, exec)?;
    let ts = cfg.tile_size;
    let area = (ts * ts) as u64;
    Ok(slide
        .records
        .iter()
        .filter(|r| r.label != TileLabel::Background)
        .zip(scores)
        .map(|(r, s)| {
            let cancer = slide.mask.count_rect(r.coord.x, r.coord.y, ts, ts);
            ScoredTile {
                coord: r.coord.clone(),
                score: f64::from(s),
                eval_label: r.eval_label(cfg.cancer_threshold),
                cancer_pixels: cancer,
                benign_pixels: area - cancer,
            }
        })
        .collect())
}

pub struct SlideResult {
    pub slide_id: String,
    pub scored: Vec<ScoredTile>,
    pub background_tiles: u64,
    pub map: ProbabilityMap,
}

fn auc_or_warn(r: Result<f64>, what: &str) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedAuc(msg)) => {
            log::warn!("{what}: AUC undefined ({msg})");
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

/// Per-slide and pooled tile- and pixel-level AUCs.
pub fn build_report(regime: &str, slides: &[(SlideResult, &BinaryMask)], cfg: &EvalConfig, exec: Exec) -> Result<AucReport> {
    if slides.is_empty() {
        return Err(Error::InvalidArgument("evaluation needs at least one slide".into()));
    }
    let mut tile_rows = Vec::new();
    let mut pixel_rows = Vec::new();
    let (mut all_scores, mut all_labels) = (Vec::new(), Vec::new());
    let mut all_bg = 0u64;
    let mut pooled = ClassHistogram::new(cfg.bins);
    let mut pooled_excluded = 0u64;
    for (res, mask) in slides {
        let scores: Vec<f64> = res.scored.iter().map(|t| t.score).collect();
        let labels: Vec<bool> = res.scored.iter().map(|t| t.eval_label).collect();
        let n_pos = labels.iter().filter(|&&l| l).count() as u64;
        tile_rows.push(AucRow {
            level: Level::Tile,
            slide: res.slide_id.clone(),
            auc: auc_or_warn(auc_exact(&scores, &labels), &res.slide_id)?,
            n_pos,
            n_neg: labels.len() as u64 - n_pos,
            n_excluded: res.background_tiles,
        });
        all_scores.extend(scores);
        all_labels.extend(labels);
        all_bg += res.background_tiles;

        let (hist, excluded) = pixel_histogram(&res.map, mask, cfg.include_background, cfg.bins, exec)?;
        pixel_rows.push(AucRow {
            level: Level::Pixel,
            slide: res.slide_id.clone(),
            auc: auc_or_warn(auc_binned(&hist), &res.slide_id)?,
            n_pos: hist.total_pos(),
            n_neg: hist.total_neg(),
            n_excluded: excluded,
        });
        pooled.merge(&hist)?;
        pooled_excluded += excluded;
    }
    let n_pos = all_labels.iter().filter(|&&l| l).count() as u64;
    tile_rows.push(AucRow {
        level: Level::Tile,
        slide: OVERALL.into(),
        auc: auc_or_warn(auc_exact(&all_scores, &all_labels), "pooled tiles")?,
        n_pos,
        n_neg: all_labels.len() as u64 - n_pos,
        n_excluded: all_bg,
    });
    pixel_rows.push(AucRow {
        level: Level::Pixel,
        slide: OVERALL.into(),
        auc: auc_or_warn(auc_binned(&pooled), "pooled pixels")?,
        n_pos: pooled.total_pos(),
        n_neg: pooled.total_neg(),
        n_excluded: pooled_excluded,
    });
    tile_rows.extend(pixel_rows);
    Ok(AucReport { regime: regime.to_string(), rows: tile_rows })
}

/// Scores prepared slides with a checkpoint and builds the report plus probability maps.
pub fn evaluate_prepared(
    regime: &str,
    ckpt: &Checkpoint,
    slides: &[PreparedSlide],
    cfg: &EvalConfig,
    exec: Exec,
) -> Result<(AucReport, Vec<ProbabilityMap>)> {
    let mut results = Vec::with_capacity(slides.len());
    for s in slides {
        let scored = score_slide(ckpt, s, cfg, exec)?;
        let map = build_probability_map(&s.slide_id, &scored, s.cols, s.rows, cfg.tile_size)?;
        let background_tiles = (s.records.len() - scored.len()) as u64;
        results.push((SlideResult { slide_id: s.slide_id.clone(), scored, background_tiles, map }, &s.mask));
    }
    let report = build_report(regime, &results, cfg, exec)?;
    Ok((report, results.into_iter().map(|(r, _)| r.map).collect()))
}

/// End-to-end evaluation of a checkpoint on held-out slides.
pub fn evaluate_slides(
    regime: &str,
    ckpt: &Checkpoint,
    slides: &[EvalSlide],
    cfg: &EvalConfig,
    exec: Exec,
) -> Result<(AucReport, Vec<ProbabilityMap>)> {
    if slides.is_empty() {
        return Err(Error::InvalidArgument("evaluation needs at least one slide".into()));
    }
    let prepared = slides
        .iter()
        .map(|s| prepare_slide(s, ckpt.spec.input_size, cfg, exec))
        .collect::<Result<Vec<_>>>()?;
    evaluate_prepared(regime, ckpt, &prepared, cfg, exec)
}

/// Baseline regime names for the delta column.
pub const BASELINE_REGIMES: [&str; 2] = ["scratch", "none"];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RegimeRow {
    pub level: Level,
    pub regime: String,
    pub overall: Option<f64>,
    pub delta: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RegimeTable {
    pub baseline: Option<String>,
    pub rows: Vec<RegimeRow>,
}

impl RegimeTable {
    /// Regimes ordered by overall AUC, best first.
    pub fn ranking(&self, level: Level) -> Vec<String> {
        let mut rows: Vec<&RegimeRow> = self.rows.iter().filter(|r| r.level == level).collect();
        rows.sort_by(|a, b| b.overall.unwrap_or(f64::NEG_INFINITY).total_cmp(&a.overall.unwrap_or(f64::NEG_INFINITY)));
        rows.into_iter().map(|r| r.regime.clone()).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("level,regime,overall_auc,delta_vs_baseline\n");
        for r in &self.rows {
            let delta = r.delta.map_or_else(|| "NA".to_string(), |d| format!("{d:+.6}"));
            let _ = writeln!(s, "{},{},{},{}", r.level.as_str(), r.regime, fmt_auc(r.overall), delta);
        }
        s
    }
}

/// Overall AUCs per regime with deltas against the scratch baseline.
pub fn regime_report(reports: &[(String, AucReport)]) -> Result<RegimeTable> {
    if reports.len() < 2 {
        return Err(Error::InvalidArgument("regime comparison needs at least two regimes".into()));
    }
    let baseline = reports.iter().find(|(name, _)| BASELINE_REGIMES.contains(&name.as_str())).map(|(n, r)| (n.clone(), r));
    if baseline.is_none() {
        log::warn!("no scratch baseline among regimes; deltas omitted");
    }
    let mut rows = Vec::new();
    for level in [Level::Tile, Level::Pixel] {
        for (name, rep) in reports {
            let overall = rep.overall(level);
            let delta = match (&baseline, overall) {
                (Some((_, b)), Some(v)) => b.overall(level).map(|bv| v - bv),
                _ => None,
            };
            rows.push(RegimeRow { level, regime: name.clone(), overall, delta });
        }
    }
    Ok(RegimeTable { baseline: baseline.map(|(n, _)| n), rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tile(col: usize, row: usize, score: f64, cancer: u64, ts: usize) -> ScoredTile {
        let area = (ts * ts) as u64;
        ScoredTile {
            coord: TileCoord::new("s", 0, col, row, ts),
            score,
            eval_label: cancer * 2 >= area,
            cancer_pixels: cancer,
            benign_pixels: area - cancer,
        }
    }

    #[test]
    fn exact_examples() {
        assert_eq!(auc_exact(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(auc_exact(&[0.3; 6], &[true, false, true, false, false, true]).unwrap(), 0.5);
        assert_eq!(auc_exact(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap(), 0.75);
        assert!(matches!(auc_exact(&[0.1, 0.2], &[true, true]), Err(Error::UndefinedAuc(_))));
        assert!(auc_exact(&[0.1], &[true, false]).is_err());
    }

    #[test]
    fn binned_examples() {
        let mut h = ClassHistogram::new(16);
        h.add(0.5, 10, 7);
        assert_eq!(auc_binned(&h).unwrap(), 0.5);
        let mut h = ClassHistogram::new(16);
        h.add(1.0, 5, 0);
        h.add(0.0, 0, 9);
        assert_eq!(h.bin_of(1.0), 15);
        assert_eq!(auc_binned(&h).unwrap(), 1.0);
        assert!(auc_binned(&ClassHistogram::new(4)).is_err());
        assert!(ClassHistogram::new(4).merge(&ClassHistogram::new(8)).is_err());
    }

    #[test]
    fn map_construction() {
        let m = build_probability_map("s", &[], 2, 2, 4).unwrap();
        assert!(m.cells.iter().all(Option::is_none));
        let m = build_probability_map("s", &[tile(1, 0, 0.7, 0, 4)], 2, 2, 4).unwrap();
        assert_eq!(m.cells, vec![None, Some(0.7), None, None]);
        assert_eq!(m.heatmap_pixels(), vec![0, 179, 0, 0]);
        let dup = [tile(0, 0, 0.7, 0, 4), tile(0, 0, 0.2, 0, 4)];
        assert!(build_probability_map("s", &dup, 2, 2, 4).unwrap_err().to_string().contains("duplicate"));
        assert!(build_probability_map("s", &[tile(2, 0, 0.1, 0, 4)], 2, 2, 4).is_err());
    }

    #[test]
    fn pixel_auc_examples() {
        let ts = 4;
        let mut mask = BinaryMask::new(8, 4);
        for y in 0..2 {
            for x in 0..4 {
                mask.set(x, y, true);
            }
        }
        let m = build_probability_map("s", &[tile(0, 0, 0.6, 8, ts)], 2, 1, ts).unwrap();
        assert_eq!(pixel_auc(&m, &mask).unwrap(), 0.5);

        let mut mask = BinaryMask::new(8, 4);
        for y in 0..4 {
            for x in 0..4 {
                mask.set(x, y, true);
            }
        }
        let m = build_probability_map("s", &[tile(0, 0, 0.9, 16, ts), tile(1, 0, 0.1, 0, ts)], 2, 1, ts).unwrap();
        assert_eq!(pixel_auc(&m, &mask).unwrap(), 1.0);

        let empty = build_probability_map("s", &[], 2, 1, ts).unwrap();
        assert!(matches!(pixel_auc(&empty, &mask), Err(Error::UndefinedAuc(_))));
        let (_, excluded) = pixel_histogram(&m, &mask, false, 16, Exec::Sequential).unwrap();
        assert_eq!(excluded, 0);
        let one = build_probability_map("s", &[tile(0, 0, 0.9, 16, ts)], 2, 1, ts).unwrap();
        let (h, excluded) = pixel_histogram(&one, &mask, false, 16, Exec::Sequential).unwrap();
        assert_eq!((h.total_pos(), h.total_neg(), excluded), (16, 0, 16));
        let (h, excluded) = pixel_histogram(&one, &mask, true, 16, Exec::Sequential).unwrap();
        assert_eq!((h.total_pos(), h.total_neg(), excluded), (16, 16, 0));
    }

    fn report(regime: &str, tile_auc: f64, pixel_auc: f64) -> AucReport {
        let row = |level, auc| AucRow { level, slide: OVERALL.into(), auc: Some(auc), n_pos: 1, n_neg: 1, n_excluded: 0 };
        AucReport { regime: regime.into(), rows: vec![row(Level::Tile, tile_auc), row(Level::Pixel, pixel_auc)] }
    }

    #[test]
    fn regime_deltas_and_ranking() {
        let reps = vec![
            ("none".to_string(), report("none", 0.873, 0.879)),
            ("generic".to_string(), report("generic", 0.903, 0.916)),
            ("cross".to_string(), report("cross", 0.924, 0.936)),
        ];
        let t = regime_report(&reps).unwrap();
        let cross = t.rows.iter().find(|r| r.level == Level::Tile && r.regime == "cross").unwrap();
        assert!((cross.delta.unwrap() - 0.051).abs() < 1e-9);
        assert_eq!(t.ranking(Level::Tile), vec!["cross", "generic", "none"]);
        assert!(t.to_csv().contains("tile,cross,0.924000,+0.051000"));

        let same = vec![("scratch".to_string(), report("a", 0.8, 0.8)), ("b".to_string(), report("b", 0.8, 0.8))];
        assert!(regime_report(&same).unwrap().rows.iter().all(|r| r.delta == Some(0.0)));
        let no_base = vec![("a".to_string(), report("a", 0.8, 0.8)), ("b".to_string(), report("b", 0.9, 0.8))];
        assert!(regime_report(&no_base).unwrap().rows.iter().all(|r| r.delta.is_none()));
        assert!(regime_report(&reps[..1]).is_err());
    }

    #[test]
    fn csv_layout() {
        let r = report("scratch", 0.5, 0.75);
        let csv = r.to_csv();
        assert_eq!(
            csv,
            "level,regime,slide_id,auc,n_pos,n_neg,n_excluded\ntile,scratch,overall,0.500000,1,1,0\npixel,scratch,overall,0.750000,1,1,0\n"
        );
    }
}
