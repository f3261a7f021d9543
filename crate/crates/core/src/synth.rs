//! Deterministic synthetic slide cohorts with polygon ground truth.
//!
//! Each slide is an irregular tissue section on a near-white glass
//! background. Lesions are drawn as non-overlapping star polygons first and
//! rasterized second, so the emitted ASAP annotation and the painted texture
//! agree pixel for pixel. Three texture families are provided: blob clusters
//! (domain A), glands (domain B) and random geometric shapes (domain G, a
//! tissue-free corpus for generic pre-training).

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::annot::{rasterize_mask, AnnotationSet, BinaryMask, PolygonAnnotation};
use crate::raster::RasterImage;
use crate::rng::{self, StreamRng};
use crate::slide_store::SlideMeta;
use crate::{Error, Exec, Result};

pub const MIN_SIDE: usize = 512;
const MAX_LAYOUT_ATTEMPTS: u64 = 32;
const MAX_PLACEMENTS: usize = 4000;
const LESION_VERTICES: usize = 24;
const TISSUE_VERTICES: usize = 48;
const SYNTH_MPP: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Domain {
    A,
    B,
    G,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::A => "A",
            Domain::B => "B",
            Domain::G => "G",
        }
    }

    pub fn spec(self) -> DomainSpec {
        match self {
            Domain::A => DomainSpec::blobs(),
            Domain::B => DomainSpec::glands(),
            Domain::G => DomainSpec::shapes(),
        }
    }
}

impl std::str::FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" => Ok(Domain::A),
            "B" => Ok(Domain::B),
            "G" => Ok(Domain::G),
            _ => Err(Error::InvalidArgument(format!("unknown domain '{s}' (expected A, B or G)"))),
        }
    }
}

/// A stamped pattern. Densities are stamps per 1000 px of slide area;
/// stamps are clipped to the region they were placed in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Motif {
    Dots { radius: (f64, f64), density: f64, palette: Vec<[u8; 3]> },
    /// Dots grouped around random cluster centers.
    Clusters { radius: (f64, f64), spread: f64, per_cluster: usize, density: f64, palette: Vec<[u8; 3]> },
    Rings { radius: (f64, f64), thickness: (f64, f64), density: f64, palette: Vec<[u8; 3]>, lumen: [u8; 3] },
    Shapes { size: (f64, f64), density: f64, palette: Vec<[u8; 3]> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionStyle {
    pub base: [u8; 3],
    pub motifs: Vec<Motif>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub domain: Domain,
    pub background: [u8; 3],
    pub benign: RegionStyle,
    pub lesion: RegionStyle,
    /// Target cancer-area fraction range `[lo, hi]` of the whole slide.
    pub fraction: (f64, f64),
    /// Lesion radius range as a fraction of the shorter slide side.
    pub lesion_radius: (f64, f64),
    /// Per-slide multiplicative color jitter applied to tissue.
    pub stain_jitter: f64,
    /// Amplitudes of smooth and per-pixel intensity noise.
    pub smooth_noise: f64,
    pub pixel_noise: f64,
}

fn palette_colors(m: &Motif) -> &[[u8; 3]] {
    match m {
        Motif::Dots { palette, .. }
        | Motif::Clusters { palette, .. }
        | Motif::Rings { palette, .. }
        | Motif::Shapes { palette, .. } => palette,
    }
}

impl DomainSpec {
    /// Domain A: lilac tissue; lesions carry dense, clustered dark nuclei.
    pub fn blobs() -> Self {
        let nuclei = vec![[72, 38, 118], [88, 52, 136], [60, 34, 100]];
        Self {
            domain: Domain::A,
            background: [244, 242, 246],
            benign: RegionStyle {
                base: [226, 170, 204],
                motifs: vec![
                    Motif::Dots { radius: (1.5, 2.5), density: 1.0, palette: nuclei.clone() },
                    Motif::Clusters {
                        radius: (1.5, 2.5),
                        spread: 6.0,
                        per_cluster: 5,
                        density: 0.05,
                        palette: nuclei.clone(),
                    },
                ],
            },
            lesion: RegionStyle {
                base: [226, 170, 204],
                motifs: vec![
                    Motif::Dots { radius: (1.5, 2.5), density: 5.0, palette: nuclei.clone() },
                    Motif::Clusters { radius: (1.5, 2.5), spread: 6.0, per_cluster: 6, density: 0.6, palette: nuclei },
                ],
            },
            fraction: (0.02, 0.30),
            lesion_radius: (0.03, 0.08),
            stain_jitter: 0.15,
            smooth_noise: 14.0,
            pixel_noise: 10.0,
        }
    }

    /// Domain B: glands in stroma; lesions carry denser, faint nuclei.
    pub fn glands() -> Self {
        let nuclei = vec![[125, 78, 150], [135, 88, 160], [118, 72, 145]];
        let glands = Motif::Rings {
            radius: (8.0, 16.0),
            thickness: (2.0, 3.0),
            density: 0.5,
            palette: vec![[178, 120, 176], [190, 132, 186]],
            lumen: [240, 232, 238],
        };
        Self {
            domain: Domain::B,
            background: [245, 244, 242],
            benign: RegionStyle {
                base: [214, 152, 196],
                motifs: vec![glands.clone(), Motif::Dots { radius: (1.5, 2.5), density: 1.0, palette: nuclei.clone() }],
            },
            lesion: RegionStyle {
                base: [210, 150, 196],
                motifs: vec![
                    glands,
                    Motif::Dots { radius: (1.5, 2.5), density: 4.0, palette: nuclei.clone() },
                    Motif::Clusters { radius: (1.5, 2.5), spread: 6.0, per_cluster: 6, density: 0.4, palette: nuclei },
                ],
            },
            fraction: (0.02, 0.30),
            lesion_radius: (0.03, 0.08),
            stain_jitter: 0.15,
            smooth_noise: 14.0,
            pixel_noise: 10.0,
        }
    }

    /// Domain G: random non-tissue shapes; classes differ only by palette.
    pub fn shapes() -> Self {
        let shapes = |palette| Motif::Shapes { size: (4.0, 20.0), density: 1.5, palette };
        Self {
            domain: Domain::G,
            background: [246, 246, 246],
            benign: RegionStyle {
                base: [200, 200, 200],
                motifs: vec![shapes(vec![[150, 190, 150], [120, 160, 210], [90, 170, 190]])],
            },
            lesion: RegionStyle {
                base: [200, 200, 200],
                motifs: vec![shapes(vec![[210, 150, 120], [200, 200, 120], [200, 120, 150]])],
            },
            fraction: (0.02, 0.30),
            lesion_radius: (0.03, 0.08),
            stain_jitter: 0.08,
            smooth_noise: 14.0,
            pixel_noise: 10.0,
        }
    }

    pub fn with_fraction(mut self, lo: f64, hi: f64) -> Self {
        self.fraction = (lo, hi);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.fraction;
        if !(0.0 <= lo && lo < hi && hi <= 1.0) {
            return Err(Error::InvalidArgument(format!("cancer fraction range [{lo}, {hi}] must satisfy 0 <= lo < hi <= 1")));
        }
        let (rlo, rhi) = self.lesion_radius;
        if !(rlo > 0.0 && rlo <= rhi && rhi < 0.5) {
            return Err(Error::InvalidArgument(format!("lesion radius range [{rlo}, {rhi}] is invalid")));
        }
        for style in [&self.benign, &self.lesion] {
            let mut colors = vec![style.base];
            for m in &style.motifs {
                if palette_colors(m).is_empty() {
                    return Err(Error::InvalidArgument("motif palette is empty".into()));
                }
                colors.extend_from_slice(palette_colors(m));
            }
            if let Some(c) = colors.iter().find(|c| c.iter().min().copied().unwrap_or(0) >= 220) {
                return Err(Error::InvalidArgument(format!("palette color {c:?} is indistinguishable from background")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSlide {
    pub image: RasterImage,
    pub annotations: AnnotationSet,
    pub meta: SlideMeta,
    pub mask: BinaryMask,
}

impl SynthSlide {
    pub fn cancer_fraction(&self) -> f64 {
        self.mask.count_ones() as f64 / (self.mask.width() * self.mask.height()) as f64
    }
}

/// Star-shaped polygon with smoothed random radii, vertices in increasing angle.
fn star_polygon(rng: &mut StreamRng, cx: f64, cy: f64, r: f64, n: usize, wobble: f64) -> Vec<(f64, f64)> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    (0..n)
        .map(|i| {
            let s = (raw[(i + n - 1) % n] + 2.0 * raw[i] + raw[(i + 1) % n]) / 4.0;
            let rr = r * (1.0 + wobble * s);
            let a = phase + std::f64::consts::TAU * i as f64 / n as f64;
            (cx + rr * a.cos(), cy + rr * a.sin())
        })
        .collect()
}

fn polygon_area(v: &[(f64, f64)]) -> f64 {
    let n = v.len();
    (0..n).map(|i| v[i].0 * v[(i + 1) % n].1 - v[(i + 1) % n].0 * v[i].1).sum::<f64>() / 2.0
}

struct Layout {
    tissue: BinaryMask,
    lesions: Vec<PolygonAnnotation>,
    mask: BinaryMask,
}

fn layout(spec: &DomainSpec, rng: &mut StreamRng, slide_id: &str, w: usize, h: usize) -> Result<Option<Layout>> {
    let side = w.min(h) as f64;
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let tissue_poly = star_polygon(rng, cx, cy, 0.42 * side, TISSUE_VERTICES, 0.12);
    let tissue = rasterize_mask(
        &AnnotationSet::new(slide_id, vec![PolygonAnnotation::new("tissue", "tissue", tissue_poly)?])?,
        w,
        h,
        Exec::Sequential,
    );
    let (lo, hi) = spec.fraction;
    let target = lo + (hi - lo) * rng.random_range(0.1..0.85);
    let total = (w * h) as f64;
    let mut placed: Vec<(f64, f64, f64)> = Vec::new();
    let mut lesions = Vec::new();
    let mut area = 0.0;
    let mut tries = 0;
    while area / total < target {
        tries += 1;
        if tries > MAX_PLACEMENTS {
            return Ok(None);
        }
        let r = side * rng.random_range(spec.lesion_radius.0..=spec.lesion_radius.1);
        let x = rng.random_range(r * 1.3..w as f64 - r * 1.3);
        let y = rng.random_range(r * 1.3..h as f64 - r * 1.3);
        if !tissue.get(x as usize, y as usize) || placed.iter().any(|&(px, py, pr)| (px - x).hypot(py - y) < 1.3 * (pr + r)) {
            continue;
        }
        let verts = star_polygon(rng, x, y, r, LESION_VERTICES, 0.25);
        area += polygon_area(&verts);
        placed.push((x, y, r));
        lesions.push(PolygonAnnotation::new(format!("Annotation {}", lesions.len()), "tumor", verts)?);
    }
    let set = AnnotationSet::new(slide_id, lesions)?;
    let mask = rasterize_mask(&set, w, h, Exec::Sequential);
    let frac = mask.count_ones() as f64 / total;
    if frac < lo || frac > hi {
        return Ok(None);
    }
    Ok(Some(Layout { tissue, lesions: set.polygons, mask }))
}

/// Bilinear value noise in [-1, 1] with the given cell size.
fn value_noise(rng: &mut StreamRng, w: usize, h: usize, cell: usize) -> Vec<f32> {
    let gw = w / cell + 2;
    let gh = h / cell + 2;
    let grid: Vec<f32> = (0..gw * gh).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let mut out = vec![0f32; w * h];
    let inv = 1.0 / cell as f32;
    for y in 0..h {
        let gy = y / cell;
        let ty = (y % cell) as f32 * inv;
        for x in 0..w {
            let gx = x / cell;
            let tx = (x % cell) as f32 * inv;
            let g = |i: usize, j: usize| grid[j * gw + i];
            let top = g(gx, gy) * (1.0 - tx) + g(gx + 1, gy) * tx;
            let bot = g(gx, gy + 1) * (1.0 - tx) + g(gx + 1, gy + 1) * tx;
            out[y * w + x] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

const BACKGROUND: u8 = 0;
const BENIGN: u8 = 1;
const LESION: u8 = 2;

struct Canvas<'a> {
    w: usize,
    h: usize,
    rgb: Vec<[f32; 3]>,
    region: &'a [u8],
}

impl Canvas<'_> {
    fn paint_disc(&mut self, cx: f64, cy: f64, r: f64, color: [f32; 3], region: u8) {
        let (x0, x1) = ((cx - r).floor().max(0.0) as usize, ((cx + r).ceil() as usize).min(self.w - 1));
        let (y0, y1) = ((cy - r).floor().max(0.0) as usize, ((cy + r).ceil() as usize).min(self.h - 1));
        for y in y0..=y1 {
            for x in x0..=x1 {
                let d = (x as f64 + 0.5 - cx).hypot(y as f64 + 0.5 - cy);
                let i = y * self.w + x;
                if d <= r && self.region[i] == region {
                    self.rgb[i] = color;
                }
            }
        }
    }

    fn paint_ring(&mut self, cx: f64, cy: f64, r: f64, t: f64, color: [f32; 3], lumen: [f32; 3], region: u8) {
        let (x0, x1) = ((cx - r).floor().max(0.0) as usize, ((cx + r).ceil() as usize).min(self.w - 1));
        let (y0, y1) = ((cy - r).floor().max(0.0) as usize, ((cy + r).ceil() as usize).min(self.h - 1));
        for y in y0..=y1 {
            for x in x0..=x1 {
                let d = (x as f64 + 0.5 - cx).hypot(y as f64 + 0.5 - cy);
                let i = y * self.w + x;
                if d <= r && self.region[i] == region {
                    self.rgb[i] = if d >= r - t { color } else { lumen };
                }
            }
        }
    }

    /// Axis-aligned square or right triangle of side `s`.
    fn paint_shape(&mut self, cx: f64, cy: f64, s: f64, triangle: bool, color: [f32; 3], region: u8) {
        let (x0, y0) = (cx - s / 2.0, cy - s / 2.0);
        let (xa, xb) = (x0.floor().max(0.0) as usize, ((x0 + s).ceil() as usize).min(self.w - 1));
        let (ya, yb) = (y0.floor().max(0.0) as usize, ((y0 + s).ceil() as usize).min(self.h - 1));
        for y in ya..=yb {
            for x in xa..=xb {
                let (u, v) = (x as f64 + 0.5 - x0, y as f64 + 0.5 - y0);
                let inside = (0.0..=s).contains(&u) && (0.0..=s).contains(&v) && (!triangle || u <= v);
                let i = y * self.w + x;
                if inside && self.region[i] == region {
                    self.rgb[i] = color;
                }
            }
        }
    }
}

fn f32_color(c: [u8; 3]) -> [f32; 3] {
    [f32::from(c[0]), f32::from(c[1]), f32::from(c[2])]
}

fn pick(rng: &mut StreamRng, palette: &[[u8; 3]]) -> [f32; 3] {
    f32_color(palette[rng.random_range(0..palette.len())])
}

fn stamp_count(density: f64, w: usize, h: usize) -> usize {
    (density * (w * h) as f64 / 1000.0).round() as usize
}

fn paint_motifs(canvas: &mut Canvas<'_>, rng: &mut StreamRng, motifs: &[Motif], region: u8) {
    let (w, h) = (canvas.w, canvas.h);
    let inside = |canvas: &Canvas<'_>, x: f64, y: f64| canvas.region[y as usize * w + x as usize] == region;
    for m in motifs {
        match m {
            Motif::Dots { radius, density, palette } => {
                for _ in 0..stamp_count(*density, w, h) {
                    let (x, y) = (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64));
                    let r = rng.random_range(radius.0..=radius.1);
                    let c = pick(rng, palette);
                    if inside(canvas, x, y) {
                        canvas.paint_disc(x, y, r, c, region);
                    }
                }
            }
            Motif::Clusters { radius, spread, per_cluster, density, palette } => {
                for _ in 0..stamp_count(*density, w, h) {
                    let (x, y) = (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64));
                    let hit = inside(canvas, x, y);
                    for _ in 0..*per_cluster {
                        let dx = rng.random_range(-spread..=*spread);
                        let dy = rng.random_range(-spread..=*spread);
                        let r = rng.random_range(radius.0..=radius.1);
                        let c = pick(rng, palette);
                        if hit {
                            canvas.paint_disc(x + dx, y + dy, r, c, region);
                        }
                    }
                }
            }
            Motif::Rings { radius, thickness, density, palette, lumen } => {
                for _ in 0..stamp_count(*density, w, h) {
                    let (x, y) = (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64));
                    let r = rng.random_range(radius.0..=radius.1);
                    let t = rng.random_range(thickness.0..=thickness.1);
                    let c = pick(rng, palette);
                    if inside(canvas, x, y) {
                        canvas.paint_ring(x, y, r, t, c, f32_color(*lumen), region);
                    }
                }
            }
            Motif::Shapes { size, density, palette } => {
                for _ in 0..stamp_count(*density, w, h) {
                    let (x, y) = (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64));
                    let s = rng.random_range(size.0..=size.1);
                    let tri = rng.random_bool(0.5);
                    let c = pick(rng, palette);
                    if inside(canvas, x, y) {
                        canvas.paint_shape(x, y, s, tri, c, region);
                    }
                }
            }
        }
    }
}

fn render(spec: &DomainSpec, rng: &mut StreamRng, lay: &Layout, w: usize, h: usize) -> RasterImage {
    let region: Vec<u8> = (0..w * h)
        .map(|i| {
            let (x, y) = (i % w, i / w);
            if lay.mask.get(x, y) {
                LESION
            } else if lay.tissue.get(x, y) {
                BENIGN
            } else {
                BACKGROUND
            }
        })
        .collect();
    let smooth = value_noise(rng, w, h, 96);
    let base = [f32_color(spec.background), f32_color(spec.benign.base), f32_color(spec.lesion.base)];
    let rgb: Vec<[f32; 3]> = region
        .iter()
        .zip(&smooth)
        .map(|(&r, &n)| {
            let b = base[r as usize];
            let amp = if r == BACKGROUND { 0.0 } else { spec.smooth_noise as f32 * n };
            [b[0] + amp, b[1] + amp, b[2] + amp]
        })
        .collect();
    let mut canvas = Canvas { w, h, rgb, region: &region };
    paint_motifs(&mut canvas, rng, &spec.benign.motifs, BENIGN);
    paint_motifs(&mut canvas, rng, &spec.lesion.motifs, LESION);

    let j = spec.stain_jitter as f32;
    let stain: [f32; 3] = std::array::from_fn(|_| 1.0 + rng.random_range(-j..=j));
    let pn = spec.pixel_noise as f32;
    let mut data = Vec::with_capacity(w * h * 3);
    for (i, px) in canvas.rgb.iter().enumerate() {
        let tissue = region[i] != BACKGROUND;
        for c in 0..3 {
            let noise = if pn > 0.0 { rng.random_range(-pn..=pn) } else { 0.0 };
            let v = if tissue { px[c] * stain[c] + noise } else { px[c] + noise * 0.3 };
            data.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    RasterImage::new(w, h, data).expect("buffer sized from dimensions")
}

/// Generates one slide, deterministic in `(spec, seed, width, height)`.
pub fn gen_slide(spec: &DomainSpec, seed: u64, width: usize, height: usize) -> Result<SynthSlide> {
    gen_slide_named(spec, seed, width, height, &format!("{}-synth", spec.domain.as_str()), "P-synth")
}

fn gen_slide_named(
    spec: &DomainSpec,
    seed: u64,
    width: usize,
    height: usize,
    slide_id: &str,
    patient_id: &str,
) -> Result<SynthSlide> {
    spec.validate()?;
    if width < MIN_SIDE || height < MIN_SIDE {
        return Err(Error::InvalidArgument(format!("synthetic slides must be at least {MIN_SIDE}x{MIN_SIDE}, got {width}x{height}")));
    }
    for attempt in 0..MAX_LAYOUT_ATTEMPTS {
        let mut rng = rng::indexed_stream(seed, "synth/layout", attempt);
        let Some(lay) = layout(spec, &mut rng, slide_id, width, height)? else {
            continue;
        };
        let mut paint_rng = rng::stream(seed, "synth/paint");
        let image = render(spec, &mut paint_rng, &lay, width, height);
        let meta = SlideMeta {
            slide_id: slide_id.to_string(),
            patient_id: patient_id.to_string(),
            mpp_x: SYNTH_MPP,
            mpp_y: SYNTH_MPP,
            width,
            height,
        };
        return Ok(SynthSlide {
            image,
            annotations: AnnotationSet::new(slide_id, lay.lesions)?,
            meta,
            mask: lay.mask,
        });
    }
    Err(Error::InvalidArgument(format!(
        "could not reach a cancer fraction in [{}, {}] after {MAX_LAYOUT_ATTEMPTS} layouts",
        spec.fraction.0, spec.fraction.1
    )))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CohortEntry {
    pub id: String,
    pub patient: String,
    pub png: String,
    pub xml: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CohortManifest {
    pub seed: u64,
    pub domain: Domain,
    pub slides: Vec<CohortEntry>,
}

impl CohortManifest {
    pub const FILE: &'static str = "cohort.json";

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(Self::FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(Self::FILE);
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

pub fn slide_seed(seed: u64, domain: Domain, index: usize) -> u64 {
    rng::derive(seed, &format!("synth/{}/{index}", domain.as_str()))
}

fn cohort_entry(domain: Domain, index: usize) -> CohortEntry {
    let id = format!("{}{:03}", domain.as_str(), index);
    CohortEntry {
        patient: format!("patient-{id}"),
        png: format!("{id}.png"),
        xml: format!("{id}.xml"),
        id,
    }
}

fn gen_indexed(spec: &DomainSpec, seed: u64, index: usize, width: usize, height: usize) -> Result<SynthSlide> {
    let e = cohort_entry(spec.domain, index);
    gen_slide_named(spec, slide_seed(seed, spec.domain, index), width, height, &e.id, &e.patient)
}

/// Generates `n_slides` slides in memory together with their manifest.
pub fn gen_cohort(
    spec: &DomainSpec,
    n_slides: usize,
    seed: u64,
    width: usize,
    height: usize,
    exec: Exec,
) -> Result<(Vec<SynthSlide>, CohortManifest)> {
    if n_slides == 0 {
        return Err(Error::InvalidArgument("a cohort needs at least one slide".into()));
    }
    let slides = exec
        .map_range(n_slides, |i| gen_indexed(spec, seed, i, width, height))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let manifest = CohortManifest {
        seed,
        domain: spec.domain,
        slides: (0..n_slides).map(|i| cohort_entry(spec.domain, i)).collect(),
    };
    Ok((slides, manifest))
}

/// Generates a cohort straight to `dir` (PNG + ASAP XML per slide, then `cohort.json`),
/// holding at most one slide per worker in memory.
pub fn write_cohort(
    spec: &DomainSpec,
    n_slides: usize,
    seed: u64,
    width: usize,
    height: usize,
    dir: &Path,
    exec: Exec,
) -> Result<CohortManifest> {
    if n_slides == 0 {
        return Err(Error::InvalidArgument("a cohort needs at least one slide".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    exec.map_range(n_slides, |i| {
        let s = gen_indexed(spec, seed, i, width, height)?;
        let e = cohort_entry(spec.domain, i);
        s.image.save_png(&dir.join(&e.png))?;
        let xml = dir.join(&e.xml);
        std::fs::write(&xml, s.annotations.to_asap_xml()).map_err(|err| Error::io(&xml, err))
    })
    .into_iter()
    .collect::<Result<Vec<()>>>()?;
    let manifest = CohortManifest {
        seed,
        domain: spec.domain,
        slides: (0..n_slides).map(|i| cohort_entry(spec.domain, i)).collect(),
    };
    manifest.write(dir)?;
    Ok(manifest)
}

/// Mean HSV saturation of a patch, in [0, 1].
pub fn mean_saturation(img: &RasterImage) -> f64 {
    let mut sum = 0.0;
    for p in img.data().chunks_exact(3) {
        let max = p.iter().copied().max().unwrap_or(0);
        let min = p.iter().copied().min().unwrap_or(0);
        if max > 0 {
            sum += f64::from(max - min) / f64::from(max);
        }
    }
    sum / (img.width() * img.height()) as f64
}

/// Threshold on a scalar score that maximizes balanced accuracy (`score >= t` means positive).
pub fn fit_threshold(scores: &[f64], labels: &[bool]) -> f64 {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let p = labels.iter().filter(|&&l| l).count() as f64;
    let n = labels.len() as f64 - p;
    if p == 0.0 || n == 0.0 {
        return 0.5;
    }
    // Threshold at the lowest score: everything is predicted positive.
    let (mut tp, mut tn) = (p, 0.0);
    let mut best = (0.5, scores.get(idx.first().copied().unwrap_or(0)).copied().unwrap_or(0.0));
    let mut i = 0;
    while i < idx.len() {
        let s = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == s {
            if labels[idx[i]] {
                tp -= 1.0;
            } else {
                tn += 1.0;
            }
            i += 1;
        }
        let bal = 0.5 * (tp / p + tn / n);
        if bal > best.0 {
            best = (bal, idx.get(i).map_or(f64::INFINITY, |&j| scores[j]));
        }
    }
    best.1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slide_is_deterministic_and_consistent() {
        let spec = DomainSpec::glands();
        let a = gen_slide(&spec, 7, 512, 512).unwrap();
        let b = gen_slide(&spec, 7, 512, 512).unwrap();
        assert_eq!(a, b);
        let f = a.cancer_fraction();
        assert!((0.02..=0.30).contains(&f), "fraction {f}");
        assert!(a.annotations.polygons.iter().all(|p| p.vertices.len() >= 3 && p.signed_area() > 0.0));
        let re = rasterize_mask(&a.annotations, 512, 512, Exec::Sequential);
        assert_eq!(re, a.mask);
        assert_ne!(gen_slide(&spec, 8, 512, 512).unwrap().image, a.image);
    }

    #[test]
    fn margins_are_white() {
        let s = gen_slide(&DomainSpec::blobs(), 1, 512, 512).unwrap();
        let p = s.image.pixel(2, 2);
        assert!(p.iter().all(|&c| c >= 220), "{p:?}");
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(gen_slide(&DomainSpec::blobs(), 1, 256, 512).is_err());
        assert!(gen_slide(&DomainSpec::blobs().with_fraction(0.3, 0.2), 1, 512, 512).is_err());
        let mut spec = DomainSpec::blobs();
        spec.lesion.base = [230, 230, 230];
        assert!(spec.validate().is_err());
        assert!(gen_cohort(&DomainSpec::blobs(), 0, 1, 512, 512, Exec::Sequential).is_err());
    }

    #[test]
    fn cohort_ids() {
        let (slides, m) = gen_cohort(&DomainSpec::shapes(), 3, 5, 512, 512, Exec::Parallel).unwrap();
        assert_eq!(slides.len(), 3);
        let ids: std::collections::BTreeSet<_> = slides.iter().map(|s| s.meta.patient_id.clone()).collect();
        assert_eq!(ids.len(), 3);
        assert_eq!(m.slides[1].id, "G001");
        assert_eq!(slides[1].meta.slide_id, "G001");
    }

    #[test]
    fn threshold_fit() {
        let t = fit_threshold(&[0.1, 0.2, 0.3, 0.4], &[false, false, true, true]);
        assert_eq!(t, 0.3);
        assert_eq!(mean_saturation(&RasterImage::filled(2, 2, [200, 100, 100])), 0.5);
    }
}
