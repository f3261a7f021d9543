//! JSON-configured pipeline stages: synthesize, prepare, train, evaluate,
//! heatmap export and the multi-seed regime experiment.
//!
//! Relative paths in a config file resolve against the file's directory.
//! Every stage is a pure function of the config and its input files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::annot::{area_stats, parse_asap_xml, rasterize_mask, BinaryMask};
use crate::metrics::{
    evaluate_prepared, prepare_slide, regime_report, AucReport, EvalConfig, EvalSlide, Level, PreparedSlide,
    ProbabilityMap, DEFAULT_BINS, OVERALL,
};
use crate::nnet::{
    init_params, train, transfer_conv_weights, Checkpoint, EpochRecord, ModelSpec, Provenance, Selection, TileDataset,
    TrainConfig, DENSE_UNITS,
};
use crate::raster::load_raster;
use crate::slide_store::{build_pyramid, SlideMeta, TileStoreManifest, DEFAULT_STORE_TILE};
use crate::synth::{write_cohort, CohortManifest, Domain};
use crate::tiler::{
    label_slide, sample_balanced, split_slides, split_train_val, SampleManifest, Split, TileLabel, TileRecord,
    TissueThresholds, DEFAULT_TILE,
};
use crate::{par, rng, Error, Exec, Result};

const DEFAULT_MPP: f64 = 0.5;

fn cfg_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub data_root: PathBuf,
    pub output_root: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Thresholds {
    /// Minimum channel value of a white (glass) pixel.
    pub white: u16,
    /// White fraction above which a tile is background.
    pub background: f64,
    /// Cancer fraction at or above which a tile is labeled cancer.
    pub cancer_label: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { white: 220, background: 0.80, cancer_label: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sampling {
    pub n_per_class: usize,
    pub seed: u64,
    #[serde(default)]
    pub with_replacement: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub train_val_ratio: f64,
    pub n_test_slides: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { train_val_ratio: 0.8, n_test_slides: 6 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub input_size: usize,
    pub conv_channels: Vec<usize>,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let s = ModelSpec::default();
        Self { input_size: s.input_size, conv_channels: s.conv_channels, dropout: s.dropout_rate }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub epochs: u32,
    pub batch_size: usize,
    pub lr: f64,
    pub selection: Selection,
    pub freeze_conv: bool,
    /// Defaults to the sampling seed.
    pub seed: Option<u64>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self { epochs: t.epochs, batch_size: t.batch_size, lr: t.lr, selection: t.selection, freeze_conv: false, seed: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    #[serde(default = "default_side")]
    pub width: usize,
    #[serde(default = "default_side")]
    pub height: usize,
    #[serde(default = "default_cohorts")]
    pub cohorts: BTreeMap<Domain, usize>,
    #[serde(default = "default_fraction")]
    pub cancer_fraction: [f64; 2],
}

fn default_side() -> usize {
    2048
}

fn default_cohorts() -> BTreeMap<Domain, usize> {
    BTreeMap::from([(Domain::A, 20), (Domain::B, 16), (Domain::G, 20)])
}

fn default_fraction() -> [f64; 2] {
    [0.02, 0.30]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    /// Random initialization, trained on the target domain only.
    Scratch,
    /// Conv weights pre-trained on the generic shapes corpus.
    Generic,
    /// Conv weights pre-trained on the other cancer domain.
    Cross,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Scratch => "scratch",
            Regime::Generic => "generic",
            Regime::Cross => "cross",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub regimes: Vec<Regime>,
    /// Regime x seed cells run concurrently, at most this many at once.
    pub jobs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self { seeds: vec![1, 2, 3, 4, 5], regimes: vec![Regime::Scratch, Regime::Generic, Regime::Cross], jobs: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    pub include_background: bool,
    pub bins: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self { include_background: false, bins: DEFAULT_BINS }
    }
}

fn default_tile() -> usize {
    DEFAULT_TILE
}

fn default_store_tile() -> usize {
    DEFAULT_STORE_TILE
}

fn default_target() -> Domain {
    Domain::B
}

fn default_source() -> Domain {
    Domain::A
}

fn default_generic() -> Domain {
    Domain::G
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: Paths,
    #[serde(default = "default_tile")]
    pub tile_size: usize,
    #[serde(default = "default_store_tile")]
    pub store_tile_size: usize,
    #[serde(default)]
    pub thresholds: Thresholds,
    pub sampling: Sampling,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub synth: Option<SynthConfig>,
    #[serde(default)]
    pub experiment: ExperimentConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    #[serde(default = "default_target")]
    pub target_domain: Domain,
    #[serde(default = "default_source")]
    pub source_domain: Domain,
    #[serde(default = "default_generic")]
    pub generic_domain: Domain,
    /// Data-parallel stages (tiling, rasterization, inference) use worker threads.
    #[serde(default = "default_true")]
    pub parallel: bool,
}

impl PipelineConfig {
    /// Parses and validates a config document; relative paths resolve against `base`.
    pub fn from_json(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: PipelineConfig = serde_json::from_str(text).map_err(|e| cfg_err(e.to_string()))?;
        for p in [&mut cfg.paths.data_root, &mut cfg.paths.output_root] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| cfg_err(format!("cannot read config: {e}")))?;
        let base = path.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf);
        Self::from_json(&text, &base).map_err(|e| match e {
            Error::Config(m) => cfg_err(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Checks every field up front, so no stage fails on configuration after hours of compute.
    pub fn validate(&self) -> Result<()> {
        let t = &self.thresholds;
        if t.white > 255 {
            return Err(cfg_err(format!("thresholds.white must be in 0..=255, got {}", t.white)));
        }
        if !(0.0..=1.0).contains(&t.background) {
            return Err(cfg_err(format!("thresholds.background must be in [0,1], got {}", t.background)));
        }
        if !(t.cancer_label > 0.0 && t.cancer_label <= 1.0) {
            return Err(cfg_err(format!("thresholds.cancer_label must be in (0,1], got {}", t.cancer_label)));
        }
        if self.tile_size == 0 {
            return Err(cfg_err("tile_size must be positive"));
        }
        if self.store_tile_size < 16 {
            return Err(cfg_err(format!("store_tile_size must be >= 16, got {}", self.store_tile_size)));
        }
        if self.sampling.n_per_class == 0 {
            return Err(cfg_err("sampling.n_per_class must be positive"));
        }
        let r = self.split.train_val_ratio;
        if !(r > 0.0 && r < 1.0) {
            return Err(cfg_err(format!("split.train_val_ratio must be in (0,1), got {r}")));
        }
        let spec = self.model_spec();
        spec.validate().map_err(|e| cfg_err(format!("model: {e}")))?;
        if self.tile_size % spec.input_size != 0 {
            return Err(cfg_err(format!(
                "tile_size {} must be a multiple of model.input_size {}",
                self.tile_size, spec.input_size
            )));
        }
        let tr = &self.training;
        if tr.epochs == 0 || tr.batch_size == 0 {
            return Err(cfg_err("training.epochs and training.batch_size must be positive"));
        }
        if !(tr.lr.is_finite() && tr.lr > 0.0) {
            return Err(cfg_err(format!("training.lr must be positive, got {}", tr.lr)));
        }
        if let Some(s) = &self.synth {
            let [lo, hi] = s.cancer_fraction;
            if !(0.0 <= lo && lo < hi && hi <= 1.0) {
                return Err(cfg_err(format!("synth.cancer_fraction [{lo}, {hi}] must satisfy 0 <= lo < hi <= 1")));
            }
            if s.width < crate::synth::MIN_SIDE || s.height < crate::synth::MIN_SIDE {
                return Err(cfg_err(format!("synth.width and synth.height must be >= {}", crate::synth::MIN_SIDE)));
            }
            if s.cohorts.is_empty() || s.cohorts.values().any(|&n| n == 0) {
                return Err(cfg_err("synth.cohorts must list at least one domain, each with >= 1 slide"));
            }
        }
        let e = &self.experiment;
        if e.seeds.is_empty() || e.regimes.is_empty() {
            return Err(cfg_err("experiment.seeds and experiment.regimes must be non-empty"));
        }
        if e.jobs == 0 {
            return Err(cfg_err("experiment.jobs must be >= 1"));
        }
        if self.evaluation.bins == 0 {
            return Err(cfg_err("evaluation.bins must be positive"));
        }
        if self.target_domain == self.source_domain || self.target_domain == self.generic_domain {
            return Err(cfg_err("target_domain must differ from source_domain and generic_domain"));
        }
        Ok(())
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            input_size: self.model.input_size,
            conv_channels: self.model.conv_channels.clone(),
            dense_units: DENSE_UNITS.to_vec(),
            dropout_rate: self.model.dropout,
        }
    }

    pub fn exec(&self) -> Exec {
        if self.parallel {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }

    pub fn tissue(&self) -> TissueThresholds {
        TissueThresholds { white_min: self.thresholds.white as u8, background_fraction: self.thresholds.background }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            tile_size: self.tile_size,
            tissue: self.tissue(),
            cancer_threshold: self.thresholds.cancer_label,
            include_background: self.evaluation.include_background,
            bins: self.evaluation.bins,
        }
    }

    pub fn training_seed(&self) -> u64 {
        self.training.seed.unwrap_or(self.sampling.seed)
    }

    pub fn layout(&self) -> Layout {
        Layout { data_root: self.paths.data_root.clone(), output_root: self.paths.output_root.clone() }
    }
}

/// On-disk locations of every artifact.
#[derive(Clone, Debug)]
pub struct Layout {
    pub data_root: PathBuf,
    pub output_root: PathBuf,
}

impl Layout {
    pub fn cohort_dir(&self, d: Domain) -> PathBuf {
        self.data_root.join(d.as_str())
    }

    pub fn prepared_dir(&self, d: Domain) -> PathBuf {
        self.output_root.join("prepared").join(d.as_str())
    }

    pub fn store_dir(&self, d: Domain, slide: &str) -> PathBuf {
        self.prepared_dir(d).join("stores").join(slide)
    }

    pub fn mask_path(&self, d: Domain, slide: &str) -> PathBuf {
        self.prepared_dir(d).join("masks").join(format!("{slide}.png"))
    }

    pub fn samples_path(&self, d: Domain) -> PathBuf {
        self.prepared_dir(d).join("samples.jsonl")
    }

    pub fn tiles_path(&self, d: Domain) -> PathBuf {
        self.prepared_dir(d).join("tiles.jsonl")
    }

    pub fn slides_path(&self, d: Domain) -> PathBuf {
        self.prepared_dir(d).join("slides.json")
    }
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

/// Generates every configured synthetic cohort under `data_root/<domain>/`.
pub fn cmd_synth(cfg: &PipelineConfig) -> Result<Vec<CohortManifest>> {
    let s = cfg.synth.as_ref().ok_or_else(|| cfg_err("the synth section is required to generate cohorts"))?;
    let layout = cfg.layout();
    let mut out = Vec::new();
    for (&domain, &n) in &s.cohorts {
        let spec = domain.spec().with_fraction(s.cancer_fraction[0], s.cancer_fraction[1]);
        let dir = layout.cohort_dir(domain);
        log::info!("synthesizing {n} domain-{} slides into {}", domain.as_str(), dir.display());
        let m = write_cohort(&spec, n, s.seed, s.width, s.height, &dir, cfg.exec()).map_err(|e| e.in_stage("synth"))?;
        out.push(m);
    }
    Ok(out)
}

/// Which slides of a domain are held out for testing.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlidesFile {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

impl SlidesFile {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PreparedDomain {
    pub domain: Domain,
    pub slides: usize,
    pub test_slides: Vec<String>,
    pub label_counts: BTreeMap<String, usize>,
    pub sampled: usize,
}

fn label_name(l: TileLabel) -> &'static str {
    match l {
        TileLabel::Cancer => "cancer",
        TileLabel::Benign => "benign",
        TileLabel::Ambiguous => "ambiguous",
        TileLabel::Background => "background",
    }
}

/// Tile stores, masks, labeled tile index, slide split and sample manifest for one domain.
pub fn prepare_domain(cfg: &PipelineConfig, domain: Domain) -> Result<PreparedDomain> {
    let layout = cfg.layout();
    let exec = cfg.exec();
    let cohort_dir = layout.cohort_dir(domain);
    let cohort = CohortManifest::read(&cohort_dir).map_err(|e| e.in_stage("read cohort"))?;
    let out = layout.prepared_dir(domain);
    create_dir(&out.join("masks"))?;

    let mut metas = Vec::new();
    let mut records: BTreeMap<String, Vec<TileRecord>> = BTreeMap::new();
    let mut masks: Vec<(String, BinaryMask, usize)> = Vec::new();
    for e in &cohort.slides {
        let img = load_raster(&cohort_dir.join(&e.png)).map_err(|err| err.in_stage("load slide"))?;
        let meta = SlideMeta {
            slide_id: e.id.clone(),
            patient_id: e.patient.clone(),
            mpp_x: DEFAULT_MPP,
            mpp_y: DEFAULT_MPP,
            width: img.width(),
            height: img.height(),
        };
        build_pyramid(&img, &meta, cfg.store_tile_size, &layout.store_dir(domain, &e.id), exec)
            .map_err(|err| err.in_stage("build_pyramid"))?;
        let xml_path = cohort_dir.join(&e.xml);
        let xml = std::fs::read_to_string(&xml_path).map_err(|err| Error::io(&xml_path, err).in_stage("read annotations"))?;
        let set = parse_asap_xml(&e.id, &xml).map_err(|err| err.in_stage("parse_asap_xml"))?;
        let mask = rasterize_mask(&set, img.width(), img.height(), exec);
        mask.save_png(&layout.mask_path(domain, &e.id)).map_err(|err| err.in_stage("rasterize_mask"))?;
        let recs = label_slide(&e.id, &img, &mask, cfg.tile_size, &cfg.tissue(), cfg.thresholds.cancer_label, exec)
            .map_err(|err| err.in_stage("label tiles"))?;
        if recs.iter().all(|r| r.label == TileLabel::Background) {
            log::warn!("slide {} has no tissue tiles and contributes no samples", e.id);
        }
        masks.push((e.id.clone(), mask, set.polygons.len()));
        records.insert(e.id.clone(), recs);
        metas.push(meta);
    }

    let stats = area_stats(&masks.iter().map(|(id, m, n)| (id.clone(), m, *n)).collect::<Vec<_>>())?;
    log::info!("domain {}: {stats}", domain.as_str());
    write_json(&out.join("area_stats.json"), &stats)?;

    let n_test = if domain == cfg.target_domain { cfg.split.n_test_slides } else { 0 };
    let split = split_slides(&metas, n_test, cfg.sampling.seed).map_err(|e| e.in_stage("split_slides"))?;
    let slides = SlidesFile {
        train: split.train_slides.iter().map(|s| s.slide_id.clone()).collect(),
        test: split.test_slides.iter().map(|s| s.slide_id.clone()).collect(),
    };
    write_json(&layout.slides_path(domain), &slides)?;

    let mut index = String::new();
    let mut label_counts = BTreeMap::new();
    for recs in records.values() {
        for r in recs {
            index.push_str(&serde_json::to_string(r)?);
            index.push('\n');
            *label_counts.entry(label_name(r.label).to_string()).or_insert(0) += 1;
        }
    }
    write_text(&layout.tiles_path(domain), &index)?;

    let pool: Vec<TileRecord> = slides.train.iter().flat_map(|id| records[id].iter().cloned()).collect();
    let sampled = sample_balanced(&pool, cfg.sampling.n_per_class, cfg.sampling.seed, cfg.sampling.with_replacement)
        .map_err(|e| e.in_stage(&format!("sample_balanced (domain {})", domain.as_str())))?;
    let manifest =
        split_train_val(&sampled, cfg.split.train_val_ratio, cfg.sampling.seed).map_err(|e| e.in_stage("split_train_val"))?;
    manifest.write(&layout.samples_path(domain))?;
    Ok(PreparedDomain {
        domain,
        slides: metas.len(),
        test_slides: slides.test,
        label_counts,
        sampled: manifest.entries.len(),
    })
}

/// Prepares the target domain and whichever pre-training cohorts exist.
pub fn cmd_prepare(cfg: &PipelineConfig) -> Result<Vec<PreparedDomain>> {
    let layout = cfg.layout();
    let mut out = vec![prepare_domain(cfg, cfg.target_domain)?];
    for d in [cfg.source_domain, cfg.generic_domain] {
        if layout.cohort_dir(d).join(CohortManifest::FILE).exists() {
            out.push(prepare_domain(cfg, d)?);
        } else {
            log::info!("no domain-{} cohort under {}; skipping", d.as_str(), layout.data_root.display());
        }
    }
    Ok(out)
}

/// Train and validation tiles of a prepared domain, downscaled to the model input.
pub struct DomainData {
    pub domain: Domain,
    pub train: TileDataset,
    pub val: TileDataset,
}

pub fn load_domain_data(cfg: &PipelineConfig, domain: Domain) -> Result<DomainData> {
    let layout = cfg.layout();
    let manifest = SampleManifest::read(&layout.samples_path(domain)).map_err(|e| e.in_stage("read sample manifest"))?;
    let ts = manifest.tile_size;
    let input = cfg.model.input_size;
    if ts % input != 0 {
        return Err(cfg_err(format!("prepared tile size {ts} is not a multiple of model.input_size {input}")));
    }
    let mut by_slide: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, e) in manifest.entries.iter().enumerate() {
        by_slide.entry(e.coord.slide_id.as_str()).or_default().push(i);
    }
    let mut train_set = TileDataset::new(input);
    let mut val_set = TileDataset::new(input);
    for (slide, idx) in by_slide {
        let store = TileStoreManifest::open(&layout.store_dir(domain, slide))?;
        let img = store.read_level(0)?;
        for i in idx {
            let e = &manifest.entries[i];
            let tile = img.crop(e.coord.x, e.coord.y, ts, ts)?;
            match e.split {
                Some(Split::Train) => train_set.push_tile(&tile, e.label.target())?,
                Some(Split::Val) => val_set.push_tile(&tile, e.label.target())?,
                _ => {}
            }
        }
    }
    Ok(DomainData { domain, train: train_set, val: val_set })
}

fn train_config(cfg: &PipelineConfig, seed: u64, provenance: Provenance, source_digest: Option<String>) -> TrainConfig {
    TrainConfig {
        epochs: cfg.training.epochs,
        batch_size: cfg.training.batch_size,
        lr: cfg.training.lr,
        seed,
        selection: cfg.training.selection,
        provenance,
        source_digest,
        freeze_conv: cfg.training.freeze_conv,
    }
}

#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub checkpoint: Checkpoint,
    pub digest: String,
    pub path: PathBuf,
    pub history: Vec<EpochRecord>,
}

/// Trains on prepared data, from scratch or from a source checkpoint's conv weights,
/// and writes `checkpoint.bin` plus `history.json` into `out_dir`.
///
/// A diverged run still saves its best finite checkpoint before the error is returned.
pub fn train_model(
    cfg: &PipelineConfig,
    data: &DomainData,
    init: Option<&Checkpoint>,
    seed: u64,
    out_dir: &Path,
) -> Result<TrainedModel> {
    let spec = cfg.model_spec();
    let (params, provenance, source) = match init {
        None => {
            let p = if data.domain == cfg.target_domain { Provenance::Scratch } else { Provenance::Pretrain };
            (init_params(&spec, seed), p, None)
        }
        Some(src) => (transfer_conv_weights(src, &spec, seed)?, Provenance::Finetune, Some(src.digest()?)),
    };
    create_dir(out_dir)?;
    let path = out_dir.join("checkpoint.bin");
    let tc = train_config(cfg, seed, provenance, source);
    match train(&spec, params, &data.train, &data.val, &tc) {
        Ok(outcome) => {
            let digest = outcome.checkpoint.save(&path)?;
            write_json(&out_dir.join("history.json"), &outcome.history)?;
            log::info!(
                "trained {} on domain {} (seed {seed}): best epoch {} val loss {:.5}",
                provenance.as_str(),
                data.domain.as_str(),
                outcome.checkpoint.epoch,
                outcome.checkpoint.val_loss
            );
            Ok(TrainedModel { checkpoint: outcome.checkpoint, digest, path, history: outcome.history })
        }
        Err(Error::Diverged { epoch, checkpoint }) => {
            checkpoint.save(&path)?;
            Err(Error::Diverged { epoch, checkpoint })
        }
        Err(e) => Err(e),
    }
}

/// How `cmd_train` initializes the network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Init {
    Scratch,
    Checkpoint(PathBuf),
}

impl std::str::FromStr for Init {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(if s == "scratch" { Init::Scratch } else { Init::Checkpoint(PathBuf::from(s)) })
    }
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub domain: Option<Domain>,
    pub init: Init,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

pub fn cmd_train(cfg: &PipelineConfig, opts: &TrainOptions) -> Result<TrainedModel> {
    let domain = opts.domain.unwrap_or(cfg.target_domain);
    let seed = opts.seed.unwrap_or_else(|| cfg.training_seed());
    let src = match &opts.init {
        Init::Scratch => None,
        Init::Checkpoint(p) => Some(Checkpoint::load(p).map_err(|e| e.in_stage("load init checkpoint"))?),
    };
    let out = opts.out.clone().unwrap_or_else(|| {
        let tag = if src.is_some() { "finetune" } else { "scratch" };
        cfg.paths.output_root.join("train").join(format!("{}-{tag}-seed{seed}", domain.as_str()))
    });
    let data = load_domain_data(cfg, domain)?;
    train_model(cfg, &data, src.as_ref(), seed, &out)
}

/// Held-out target slides, gridded, filtered and reduced to model inputs once.
pub fn load_test_slides(cfg: &PipelineConfig, ids: Option<&[String]>) -> Result<Vec<PreparedSlide>> {
    let layout = cfg.layout();
    let d = cfg.target_domain;
    let owned;
    let ids = match ids {
        Some(ids) => ids,
        None => {
            owned = SlidesFile::read(&layout.slides_path(d)).map_err(|e| e.in_stage("read slide split"))?.test;
            &owned
        }
    };
    if ids.is_empty() {
        return Err(Error::InvalidArgument("no test slides to evaluate".into()));
    }
    let ecfg = cfg.eval_config();
    ids.iter()
        .map(|id| {
            let store = TileStoreManifest::open(&layout.store_dir(d, id))?;
            let image = store.read_level(0)?;
            let mask = BinaryMask::load_png(&layout.mask_path(d, id))?;
            let slide = EvalSlide { slide_id: id.clone(), image, mask };
            prepare_slide(&slide, cfg.model.input_size, &ecfg, cfg.exec())
        })
        .collect()
}

fn write_heatmaps(maps: &[ProbabilityMap], dir: &Path) -> Result<Vec<PathBuf>> {
    create_dir(dir)?;
    maps.iter()
        .map(|m| {
            let png = dir.join(format!("{}.png", m.slide_id));
            m.save_heatmap(&png, &dir.join(format!("{}.json", m.slide_id)))?;
            Ok(png)
        })
        .collect()
}

fn default_eval_dir(cfg: &PipelineConfig, kind: &str, ckpt: &Path) -> PathBuf {
    let stem = ckpt.parent().and_then(Path::file_name).or_else(|| ckpt.file_stem());
    let name = stem.map_or_else(|| "model".to_string(), |s| s.to_string_lossy().into_owned());
    cfg.paths.output_root.join(kind).join(name)
}

/// Scores the held-out slides: `report.csv` plus one heatmap per slide under `heatmaps/`.
pub fn cmd_evaluate(cfg: &PipelineConfig, checkpoint: &Path, regime: &str, out: Option<&Path>) -> Result<AucReport> {
    let ckpt = Checkpoint::load(checkpoint).map_err(|e| e.in_stage("load checkpoint"))?;
    let slides = load_test_slides(cfg, None)?;
    let (report, maps) = evaluate_prepared(regime, &ckpt, &slides, &cfg.eval_config(), cfg.exec())?;
    let out = out.map_or_else(|| default_eval_dir(cfg, "eval", checkpoint), Path::to_path_buf);
    create_dir(&out)?;
    report.write_csv(&out.join("report.csv"))?;
    write_heatmaps(&maps, &out.join("heatmaps"))?;
    Ok(report)
}

/// Probability-map PNGs (one pixel per tile) for the given target slides, or the test slides.
pub fn cmd_heatmap(cfg: &PipelineConfig, checkpoint: &Path, slides: Option<&[String]>, out: Option<&Path>) -> Result<Vec<PathBuf>> {
    let ckpt = Checkpoint::load(checkpoint).map_err(|e| e.in_stage("load checkpoint"))?;
    let prepared = load_test_slides(cfg, slides)?;
    let ecfg = cfg.eval_config();
    let maps = prepared
        .iter()
        .map(|s| {
            let scored = crate::metrics::score_slide(&ckpt, s, &ecfg, cfg.exec())?;
            crate::metrics::build_probability_map(&s.slide_id, &scored, s.cols, s.rows, ecfg.tile_size)
        })
        .collect::<Result<Vec<_>>>()?;
    let out = out.map_or_else(|| default_eval_dir(cfg, "heatmaps", checkpoint), Path::to_path_buf);
    write_heatmaps(&maps, &out)
}

/// One regime x seed cell of the experiment.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellResult {
    pub seed: u64,
    pub regime: Regime,
    pub report: Option<AucReport>,
    pub checkpoint_digest: Option<String>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentOutcome {
    pub test_slides: Vec<String>,
    pub cells: Vec<CellResult>,
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

impl ExperimentOutcome {
    pub fn cell(&self, seed: u64, regime: Regime) -> Option<&CellResult> {
        self.cells.iter().find(|c| c.seed == seed && c.regime == regime)
    }

    pub fn seeds(&self) -> Vec<u64> {
        let mut s: Vec<u64> = self.cells.iter().map(|c| c.seed).collect();
        s.dedup();
        s
    }

    pub fn overall(&self, seed: u64, regime: Regime, level: Level) -> Option<f64> {
        self.cell(seed, regime)?.report.as_ref()?.overall(level)
    }

    /// Per-seed `regime - scratch` overall AUC, for seeds where both cells succeeded.
    pub fn deltas(&self, regime: Regime, level: Level) -> Vec<(u64, f64)> {
        self.seeds()
            .into_iter()
            .filter_map(|s| Some((s, self.overall(s, regime, level)? - self.overall(s, Regime::Scratch, level)?)))
            .collect()
    }

    pub fn median_delta(&self, regime: Regime, level: Level) -> Option<f64> {
        median(self.deltas(regime, level).into_iter().map(|(_, d)| d).collect())
    }

    /// Seeds in which `a` scored at least as high as `b`.
    pub fn count_at_least(&self, a: Regime, b: Regime, level: Level) -> usize {
        self.seeds()
            .into_iter()
            .filter(|&s| matches!((self.overall(s, a, level), self.overall(s, b, level)), (Some(x), Some(y)) if x >= y))
            .count()
    }

    /// Per-seed and median rows: `level,regime,seed,<slides...>,overall,delta_vs_scratch`.
    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"));
        let fmt_delta = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x:+.6}"));
        let mut s = format!("level,regime,seed,{},overall,delta_vs_scratch\n", self.test_slides.join(","));
        let mut regimes: Vec<Regime> = self.cells.iter().map(|c| c.regime).collect();
        regimes.sort();
        regimes.dedup();
        for level in [Level::Tile, Level::Pixel] {
            for &regime in &regimes {
                let mut per_slide: Vec<Vec<f64>> = vec![Vec::new(); self.test_slides.len()];
                let mut overall = Vec::new();
                for seed in self.seeds() {
                    let rep = self.cell(seed, regime).and_then(|c| c.report.as_ref());
                    let slide_auc = |id: &str| {
                        rep.and_then(|r| r.rows.iter().find(|row| row.level == level && row.slide == id)).and_then(|row| row.auc)
                    };
                    let vals: Vec<Option<f64>> = self.test_slides.iter().map(|id| slide_auc(id)).collect();
                    for (acc, v) in per_slide.iter_mut().zip(&vals) {
                        acc.extend(*v);
                    }
                    let o = slide_auc(OVERALL);
                    overall.extend(o);
                    let delta = self.deltas(regime, level).into_iter().find(|(s, _)| *s == seed).map(|(_, d)| d);
                    let cols: Vec<String> = vals.into_iter().map(fmt).collect();
                    s.push_str(&format!(
                        "{},{},{seed},{},{},{}\n",
                        level.as_str(),
                        regime.as_str(),
                        cols.join(","),
                        fmt(o),
                        fmt_delta(delta)
                    ));
                }
                let cols: Vec<String> = per_slide.into_iter().map(|v| fmt(median(v))).collect();
                s.push_str(&format!(
                    "{},{},median,{},{},{}\n",
                    level.as_str(),
                    regime.as_str(),
                    cols.join(","),
                    fmt(median(overall)),
                    fmt_delta(self.median_delta(regime, level))
                ));
            }
        }
        s
    }
}

struct ExperimentInputs {
    target: DomainData,
    source: Option<DomainData>,
    generic: Option<DomainData>,
    test: Vec<PreparedSlide>,
}

fn run_cell(cfg: &PipelineConfig, inputs: &ExperimentInputs, seed: u64, regime: Regime, dir: &Path) -> Result<(AucReport, String)> {
    let pre_seed = rng::derive(seed, "pretrain");
    let model = match regime {
        Regime::Scratch => train_model(cfg, &inputs.target, None, seed, dir)?,
        Regime::Cross | Regime::Generic => {
            let (data, name) = if regime == Regime::Cross {
                (inputs.source.as_ref(), cfg.source_domain)
            } else {
                (inputs.generic.as_ref(), cfg.generic_domain)
            };
            let data = data.ok_or_else(|| {
                Error::InvalidArgument(format!("domain {} is not prepared; run prepare with its cohort", name.as_str()))
            })?;
            let pre = train_model(cfg, data, None, pre_seed, &dir.join("pretrain")).map_err(|e| e.in_stage("pretrain"))?;
            train_model(cfg, &inputs.target, Some(&pre.checkpoint), seed, dir).map_err(|e| e.in_stage("finetune"))?
        }
    };
    let (report, maps) = evaluate_prepared(regime.as_str(), &model.checkpoint, &inputs.test, &cfg.eval_config(), cfg.exec())?;
    report.write_csv(&dir.join("report.csv"))?;
    write_heatmaps(&maps, &dir.join("heatmaps"))?;
    Ok((report, model.digest))
}

/// Runs every regime x seed cell, each isolated under `experiment/seed<S>/<regime>/`,
/// and writes `results.csv`, `regimes_seed<S>.csv` and `summary.json`.
///
/// A failing cell is recorded and the remaining cells still run.
pub fn cmd_experiment(cfg: &PipelineConfig, jobs: Option<usize>, out: Option<&Path>) -> Result<ExperimentOutcome> {
    let layout = cfg.layout();
    let regimes = &cfg.experiment.regimes;
    let need = |r: Regime| regimes.contains(&r);
    let load_optional = |d: Domain, wanted: bool| -> Result<Option<DomainData>> {
        if wanted && layout.samples_path(d).exists() {
            load_domain_data(cfg, d).map(Some)
        } else {
            Ok(None)
        }
    };
    let inputs = ExperimentInputs {
        target: load_domain_data(cfg, cfg.target_domain)?,
        source: load_optional(cfg.source_domain, need(Regime::Cross))?,
        generic: load_optional(cfg.generic_domain, need(Regime::Generic))?,
        test: load_test_slides(cfg, None)?,
    };
    let out = out.map_or_else(|| cfg.paths.output_root.join("experiment"), Path::to_path_buf);
    let cells: Vec<(u64, Regime)> =
        cfg.experiment.seeds.iter().flat_map(|&s| regimes.iter().map(move |&r| (s, r))).collect();
    let jobs = jobs.unwrap_or(cfg.experiment.jobs).max(1);
    log::info!("experiment: {} cells, {jobs} at a time", cells.len());
    let run = |&(seed, regime): &(u64, Regime)| {
        let dir = out.join(format!("seed{seed}")).join(regime.as_str());
        match run_cell(cfg, &inputs, seed, regime, &dir) {
            Ok((report, digest)) => {
                log::info!(
                    "seed {seed} {}: tile AUC {:?}, pixel AUC {:?}",
                    regime.as_str(),
                    report.overall(Level::Tile),
                    report.overall(Level::Pixel)
                );
                CellResult { seed, regime, report: Some(report), checkpoint_digest: Some(digest), error: None }
            }
            Err(e) => {
                log::error!("seed {seed} {} failed: {e}", regime.as_str());
                CellResult { seed, regime, report: None, checkpoint_digest: None, error: Some(e.to_string()) }
            }
        }
    };
    let results = if jobs == 1 {
        cells.iter().map(run).collect()
    } else {
        par::with_jobs(jobs, || Exec::Parallel.map(&cells, run))
    };
    let outcome = ExperimentOutcome { test_slides: inputs.test.iter().map(|s| s.slide_id.clone()).collect(), cells: results };

    create_dir(&out)?;
    write_text(&out.join("results.csv"), &outcome.to_csv())?;
    for seed in outcome.seeds() {
        let reports: Vec<(String, AucReport)> = outcome
            .cells
            .iter()
            .filter(|c| c.seed == seed)
            .filter_map(|c| Some((c.regime.as_str().to_string(), c.report.clone()?)))
            .collect();
        if reports.len() >= 2 {
            let table = regime_report(&reports)?;
            write_text(&out.join(format!("regimes_seed{seed}.csv")), &table.to_csv())?;
        }
    }
    #[derive(Serialize)]
    struct Summary<'a> {
        median_delta_tile: BTreeMap<&'static str, Option<f64>>,
        median_delta_pixel: BTreeMap<&'static str, Option<f64>>,
        cross_at_least_generic_tile: usize,
        seeds: Vec<u64>,
        cells: &'a [CellResult],
    }
    let deltas = |level| {
        regimes
            .iter()
            .filter(|&&r| r != Regime::Scratch)
            .map(|&r| (r.as_str(), outcome.median_delta(r, level)))
            .collect()
    };
    write_json(
        &out.join("summary.json"),
        &Summary {
            median_delta_tile: deltas(Level::Tile),
            median_delta_pixel: deltas(Level::Pixel),
            cross_at_least_generic_tile: outcome.count_at_least(Regime::Cross, Regime::Generic, Level::Tile),
            seeds: outcome.seeds(),
            cells: &outcome.cells,
        },
    )?;
    Ok(outcome)
}
