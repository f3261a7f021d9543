//! ASAP polygon annotations and their rasterized cancer masks.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::raster::{load_gray, save_png_bytes};
use crate::{Error, Exec, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolygonAnnotation {
    pub name: String,
    pub group: String,
    /// Level-0 pixel coordinates; the last vertex connects back to the first.
    pub vertices: Vec<(f64, f64)>,
}

impl PolygonAnnotation {
    pub fn new(name: impl Into<String>, group: impl Into<String>, vertices: Vec<(f64, f64)>) -> Result<Self> {
        let name = name.into();
        if vertices.len() < 3 {
            return Err(Error::Annotation(format!(
                "polygon '{name}' has {} vertices, need at least 3",
                vertices.len()
            )));
        }
        if vertices.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
            return Err(Error::Annotation(format!("polygon '{name}' has a non-finite vertex")));
        }
        Ok(Self { name, group: group.into(), vertices })
    }

    /// Shoelace signed area (positive for counter-clockwise in a y-up frame).
    pub fn signed_area(&self) -> f64 {
        let n = self.vertices.len();
        let mut s = 0.0;
        for i in 0..n {
            let (x0, y0) = self.vertices[i];
            let (x1, y1) = self.vertices[(i + 1) % n];
            s += x0 * y1 - x1 * y0;
        }
        s / 2.0
    }

    fn edges(&self) -> impl Iterator<Item = ((f64, f64), (f64, f64))> + '_ {
        let n = self.vertices.len();
        (0..n).map(move |i| (self.vertices[i], self.vertices[(i + 1) % n]))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSet {
    pub slide_id: String,
    pub polygons: Vec<PolygonAnnotation>,
}

impl AnnotationSet {
    pub fn new(slide_id: impl Into<String>, polygons: Vec<PolygonAnnotation>) -> Result<Self> {
        let slide_id = slide_id.into();
        if slide_id.is_empty() {
            return Err(Error::Annotation("annotation set has an empty slide_id".into()));
        }
        Ok(Self { slide_id, polygons })
    }

    /// Serializes as an ASAP XML document (polygons only).
    pub fn to_asap_xml(&self) -> String {
        let mut s = String::from("<?xml version=\"1.0\"?>\n<ASAP_Annotations>\n\t<Annotations>\n");
        for p in &self.polygons {
            let _ = writeln!(
                s,
                "\t\t<Annotation Name=\"{}\" Type=\"Polygon\" PartOfGroup=\"{}\" Color=\"#F4FA58\">",
                xml_escape(&p.name),
                xml_escape(&p.group)
            );
            s.push_str("\t\t\t<Coordinates>\n");
            for (i, (x, y)) in p.vertices.iter().enumerate() {
                let _ = writeln!(s, "\t\t\t\t<Coordinate Order=\"{i}\" X=\"{x}\" Y=\"{y}\" />");
            }
            s.push_str("\t\t\t</Coordinates>\n\t\t</Annotation>\n");
        }
        s.push_str("\t</Annotations>\n\t<AnnotationGroups />\n</ASAP_Annotations>\n");
        s
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Parses an ASAP annotation document.
///
/// `Polygon` annotations are kept as-is; `Spline` annotations are kept as the
/// polygon through their control points (with a warning). Other types are skipped.
pub fn parse_asap_xml(slide_id: &str, text: &str) -> Result<AnnotationSet> {
    let doc = roxmltree::Document::parse(text).map_err(|e| Error::Annotation(format!("malformed XML: {e}")))?;
    let mut polygons = Vec::new();
    for (idx, ann) in doc.descendants().filter(|n| n.has_tag_name("Annotation")).enumerate() {
        let name = ann.attribute("Name").map(str::to_string).unwrap_or_else(|| format!("Annotation {idx}"));
        let ty = ann.attribute("Type").unwrap_or("");
        match ty {
            "Polygon" => {}
            "Spline" => log::warn!("annotation '{name}': Spline treated as a polygon over its control points"),
            other => {
                log::warn!("annotation '{name}': skipping unsupported type '{other}'");
                continue;
            }
        }
        let group = ann.attribute("PartOfGroup").unwrap_or("None").to_string();
        let coords = ann
            .children()
            .find(|n| n.has_tag_name("Coordinates"))
            .ok_or_else(|| Error::Annotation(format!("annotation '{name}' has no <Coordinates>")))?;
        let mut pts: Vec<(f64, f64, f64)> = Vec::new();
        for c in coords.children().filter(|n| n.has_tag_name("Coordinate")) {
            let num = |attr: &str| -> Result<f64> {
                let raw = c.attribute(attr).ok_or_else(|| {
                    Error::Annotation(format!("annotation '{name}': coordinate missing {attr}"))
                })?;
                // ASAP files written under some locales use a decimal comma.
                raw.trim().replace(',', ".").parse::<f64>().map_err(|_| {
                    Error::Annotation(format!("annotation '{name}': non-numeric {attr}='{raw}'"))
                })
            };
            pts.push((num("Order")?, num("X")?, num("Y")?));
        }
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let vertices = pts.into_iter().map(|(_, x, y)| (x, y)).collect();
        polygons.push(PolygonAnnotation::new(name, group, vertices)?);
    }
    AnnotationSet::new(slide_id, polygons)
}

/// One bit per pixel, row-major, packed into 64-bit words.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    words: Vec<u64>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, words: vec![0; (width * height).div_ceil(64)] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        let i = y * self.width + x;
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        let i = y * self.width + x;
        if v {
            self.words[i / 64] |= 1 << (i % 64);
        } else {
            self.words[i / 64] &= !(1 << (i % 64));
        }
    }

    /// Toggles bits `[start, end)` of the flat bit index space.
    fn toggle_range(&mut self, start: usize, end: usize) {
        let mut i = start;
        while i < end {
            let w = i / 64;
            let lo = i % 64;
            let hi = (end - w * 64).min(64);
            let bits = if hi - lo == 64 { u64::MAX } else { ((1u64 << (hi - lo)) - 1) << lo };
            self.words[w] ^= bits;
            i = w * 64 + hi;
        }
    }

    fn count_range(&self, start: usize, end: usize) -> u64 {
        let mut n = 0u64;
        let mut i = start;
        while i < end {
            let w = i / 64;
            let lo = i % 64;
            let hi = (end - w * 64).min(64);
            let bits = if hi - lo == 64 { u64::MAX } else { ((1u64 << (hi - lo)) - 1) << lo };
            n += u64::from((self.words[w] & bits).count_ones());
            i = w * 64 + hi;
        }
        n
    }

    pub fn count_ones(&self) -> u64 {
        self.words.iter().map(|w| u64::from(w.count_ones())).sum()
    }

    /// Set bits inside the rectangle; the rectangle must lie within the mask.
    pub fn count_rect(&self, x: usize, y: usize, w: usize, h: usize) -> u64 {
        assert!(x + w <= self.width && y + h <= self.height, "rect outside mask");
        (y..y + h)
            .map(|row| {
                let base = row * self.width;
                self.count_range(base + x, base + x + w)
            })
            .sum()
    }

    /// Grayscale PNG: 0 = benign, 255 = cancer.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut px = Vec::with_capacity(self.width * self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                px.push(if self.get(x, y) { 255 } else { 0 });
            }
        }
        save_png_bytes(path, self.width, self.height, image::ColorType::L8, &px)
    }

    /// Reads a grayscale mask PNG; values >= 128 are set.
    pub fn load_png(path: &Path) -> Result<Self> {
        let (w, h, px) = load_gray(path)?;
        let mut m = BinaryMask::new(w, h);
        for (i, &v) in px.iter().enumerate() {
            if v >= 128 {
                m.words[i / 64] |= 1 << (i % 64);
            }
        }
        Ok(m)
    }
}

/// Sorted x-crossings of all polygon edges with the horizontal line `y`.
///
/// An edge crosses when `y` lies in `[min(y0,y1), max(y0,y1))`.
fn crossings(set: &AnnotationSet, y: f64, out: &mut Vec<f64>) {
    out.clear();
    for poly in &set.polygons {
        for ((x0, y0), (x1, y1)) in poly.edges() {
            if (y0 > y) != (y1 > y) {
                out.push(x0 + (y - y0) * (x1 - x0) / (y1 - y0));
            }
        }
    }
    out.sort_by(f64::total_cmp);
}

/// Column span `[lo, hi)` of pixel centers `i + 0.5` inside `[xa, xb)`, clipped to the width.
fn center_span(xa: f64, xb: f64, width: usize) -> (usize, usize) {
    let lo = (xa - 0.5).ceil().max(0.0);
    let hi = (xb - 0.5).ceil().max(0.0);
    let w = width as f64;
    (lo.min(w) as usize, hi.min(w) as usize)
}

/// Rasterizes the union of all polygons under the even-odd rule, sampling at pixel centers.
pub fn rasterize_mask(set: &AnnotationSet, width: usize, height: usize, exec: Exec) -> BinaryMask {
    let mut mask = BinaryMask::new(width, height);
    if set.polygons.is_empty() || width == 0 || height == 0 {
        return mask;
    }
    // Bounding rows of the annotation to skip empty bands.
    let (mut ymin, mut ymax) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in &set.polygons {
        for &(_, y) in &p.vertices {
            ymin = ymin.min(y);
            ymax = ymax.max(y);
        }
    }
    let row_lo = ((ymin - 0.5).floor().max(0.0) as usize).min(height);
    let row_hi = ((ymax + 0.5).ceil().max(0.0) as usize).min(height);
    const BAND: usize = 64;
    let bands = (row_hi - row_lo).div_ceil(BAND);
    let spans: Vec<Vec<(usize, usize, usize)>> = exec.map_range(bands, |b| {
        let mut xs = Vec::new();
        let mut out = Vec::new();
        for row in row_lo + b * BAND..(row_lo + (b + 1) * BAND).min(row_hi) {
            crossings(set, row as f64 + 0.5, &mut xs);
            for pair in xs.chunks_exact(2) {
                let (lo, hi) = center_span(pair[0], pair[1], width);
                if lo < hi {
                    out.push((row, lo, hi));
                }
            }
        }
        out
    });
    for (row, lo, hi) in spans.into_iter().flatten() {
        // Spans within one row are disjoint, so toggling equals setting.
        mask.toggle_range(row * width + lo, row * width + hi);
    }
    mask
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlideArea {
    pub slide_id: String,
    pub cancer_percent: f64,
    pub polygon_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AreaStats {
    pub per_slide: Vec<SlideArea>,
    pub min_percent: f64,
    pub mean_percent: f64,
    pub max_percent: f64,
    pub min_polygons: usize,
    pub max_polygons: usize,
}

impl std::fmt::Display for AreaStats {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "cancer area: min {:.1}%, mean {:.1}%, max {:.1}% over {} slides",
            self.min_percent,
            self.mean_percent,
            self.max_percent,
            self.per_slide.len()
        )?;
        write!(f, "polygon annotations per slide: min {}, max {}", self.min_polygons, self.max_polygons)
    }
}

/// Cohort cancer-area summary; the mean is unweighted across slides.
pub fn area_stats(masks: &[(String, &BinaryMask, usize)]) -> Result<AreaStats> {
    if masks.is_empty() {
        return Err(Error::InvalidArgument("area_stats needs at least one slide".into()));
    }
    let per_slide: Vec<SlideArea> = masks
        .iter()
        .map(|(id, m, n)| SlideArea {
            slide_id: id.clone(),
            cancer_percent: 100.0 * m.count_ones() as f64 / (m.width() * m.height()) as f64,
            polygon_count: *n,
        })
        .collect();
    let pct = per_slide.iter().map(|s| s.cancer_percent);
    Ok(AreaStats {
        min_percent: pct.clone().fold(f64::INFINITY, f64::min),
        max_percent: pct.clone().fold(f64::NEG_INFINITY, f64::max),
        mean_percent: pct.sum::<f64>() / per_slide.len() as f64,
        min_polygons: per_slide.iter().map(|s| s.polygon_count).min().unwrap_or(0),
        max_polygons: per_slide.iter().map(|s| s.polygon_count).max().unwrap_or(0),
        per_slide,
    })
}
