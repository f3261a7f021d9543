//! Brute-force oracles and generators shared by the integration tests.
#![allow(dead_code)]

use rand::Rng;
use slidexfer::annot::{AnnotationSet, BinaryMask, PolygonAnnotation};
use slidexfer::metrics::ProbabilityMap;

/// Probability that a random positive outscores a random negative, by pair counting.
pub fn brute_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let mut wins = 0.0;
    let mut pairs = 0u64;
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            pairs += 1;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    (pairs > 0).then(|| wins / pairs as f64)
}

/// Scores drawn from a coarse lattice so ties are frequent.
pub fn tied_instance<R: Rng>(r: &mut R, n: usize) -> (Vec<f64>, Vec<bool>) {
    let levels = r.random_range(2..=64u32);
    let scores = (0..n).map(|_| f64::from(r.random_range(0..levels)) / f64::from(levels)).collect();
    let labels = (0..n).map(|_| r.random_bool(0.4)).collect();
    (scores, labels)
}

/// Pixel-center even-odd test over every polygon of the set.
pub fn inside_even_odd(set: &AnnotationSet, px: f64, py: f64) -> bool {
    let mut inside = false;
    for p in &set.polygons {
        let v = &p.vertices;
        for i in 0..v.len() {
            let (ax, ay) = v[i];
            let (bx, by) = v[(i + 1) % v.len()];
            if (ay > py) != (by > py) {
                let x = ax + (py - ay) * (bx - ax) / (by - ay);
                if px < x {
                    inside = !inside;
                }
            }
        }
    }
    inside
}

pub fn oracle_mask(set: &AnnotationSet, w: usize, h: usize) -> Vec<bool> {
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            out.push(inside_even_odd(set, x as f64 + 0.5, y as f64 + 0.5));
        }
    }
    out
}

pub fn mask_bits(m: &BinaryMask) -> Vec<bool> {
    let mut out = Vec::with_capacity(m.width() * m.height());
    for y in 0..m.height() {
        for x in 0..m.width() {
            out.push(m.get(x, y));
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PolyKind {
    Convex,
    Concave,
    SelfIntersecting,
}

/// A random polygon of the given kind, roughly inside (and sometimes beyond) a `side`-sized grid.
pub fn random_polygon<R: Rng>(r: &mut R, kind: PolyKind, side: f64) -> Vec<(f64, f64)> {
    let cx = r.random_range(0.1 * side..0.9 * side);
    let cy = r.random_range(0.1 * side..0.9 * side);
    let radius = r.random_range(0.05 * side..0.6 * side);
    let n = r.random_range(3..=14usize);
    match kind {
        PolyKind::Convex => {
            let mut angles: Vec<f64> = (0..n).map(|_| r.random_range(0.0..std::f64::consts::TAU)).collect();
            angles.sort_by(f64::total_cmp);
            angles.iter().map(|a| (cx + radius * a.cos(), cy + radius * a.sin())).collect()
        }
        PolyKind::Concave => {
            let n = n.max(5);
            (0..n)
                .map(|i| {
                    let a = i as f64 / n as f64 * std::f64::consts::TAU + r.random_range(-0.2..0.2);
                    let rr = if i % 2 == 0 { radius } else { radius * r.random_range(0.2..0.7) };
                    (cx + rr * a.cos(), cy + rr * a.sin())
                })
                .collect()
        }
        PolyKind::SelfIntersecting => (0..n.max(4))
            .map(|_| (r.random_range(-0.1 * side..1.1 * side), r.random_range(-0.1 * side..1.1 * side)))
            .collect(),
    }
}

pub fn single_polygon_set(vertices: Vec<(f64, f64)>) -> AnnotationSet {
    AnnotationSet::new("s", vec![PolygonAnnotation::new("p", "cancer", vertices).unwrap()]).unwrap()
}

/// Per-pixel exact AUC over the tile span, skipping unscored tiles.
pub fn naive_pixel_auc(map: &ProbabilityMap, mask: &BinaryMask) -> slidexfer::Result<f64> {
    let ts = map.tile_size;
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for y in 0..map.rows * ts {
        for x in 0..map.cols * ts {
            if let Some(s) = map.get(x / ts, y / ts) {
                scores.push(s);
                labels.push(mask.get(x, y));
            }
        }
    }
    slidexfer::metrics::auc_exact(&scores, &labels)
}

/// A `cols x rows` map with lattice scores (so binning is lossless) and some sentinel cells.
pub fn random_map<R: Rng>(r: &mut R, cols: usize, rows: usize, ts: usize) -> (ProbabilityMap, BinaryMask) {
    let cells = (0..cols * rows)
        .map(|_| (!r.random_bool(0.15)).then(|| f64::from(r.random_range(0..=256u32)) / 256.0))
        .collect();
    let map = ProbabilityMap {
        slide_id: "m".into(),
        cols,
        rows,
        tile_size: ts,
        width: cols * ts,
        height: rows * ts,
        cells,
    };
    let mut mask = BinaryMask::new(cols * ts, rows * ts);
    let p = r.random_range(0.1..0.9);
    for y in 0..rows * ts {
        for x in 0..cols * ts {
            if r.random_bool(p) {
                mask.set(x, y, true);
            }
        }
    }
    (map, mask)
}

/// A desk-second config: two tiny cohorts, a 2-block net, two epochs.
pub fn small_config(root: &std::path::Path) -> serde_json::Value {
    serde_json::json!({
        "paths": { "data_root": root.join("data"), "output_root": root.join("out") },
        "tile_size": 32,
        "store_tile_size": 128,
        "sampling": { "n_per_class": 24, "seed": 5 },
        "split": { "train_val_ratio": 0.75, "n_test_slides": 1 },
        "model": { "input_size": 16, "conv_channels": [4, 8] },
        "training": { "epochs": 2, "batch_size": 16 },
        "synth": { "seed": 3, "width": 512, "height": 512, "cohorts": { "A": 2, "B": 4 }, "cancer_fraction": [0.15, 0.3] },
        "experiment": { "seeds": [1], "regimes": ["scratch", "cross"] },
        "parallel": false
    })
}

pub fn load_config(value: &serde_json::Value) -> slidexfer::pipeline::PipelineConfig {
    slidexfer::pipeline::PipelineConfig::from_json(&value.to_string(), std::path::Path::new(".")).unwrap()
}
