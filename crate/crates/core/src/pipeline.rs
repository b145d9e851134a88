//! End-to-end orchestration: EDF recordings -> layout images -> balanced
//! corpus -> trained checkpoint -> evaluation reports.
//!
//! Every command writes a `run.json` listing the files it produced with their
//! SHA-256 hashes, so reruns can be compared byte for byte.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::edf::{crop, extract_epochs, parse_annotations, resample, select_channel, EdfFile, StageMap, TimeSeriesEpoch};
use crate::error::{Error, Result};
use crate::layout::{kamada_kawai, LayoutConfig};
use crate::metrics::{export_weight_distribution, EvalReport};
use crate::nn::{predict_logits, softmax, train, AttDiCnn, Checkpoint, ModelConfig, TrainConfig};
use crate::raster::{rasterize, FdlImage};
use crate::sampling::{
    minmax_normalize, smote_balance, stratified_kfold, stratified_split_indices, ImageDataset, Manifest, ManifestRow,
    SamplerConfig,
};
use crate::visibility::build_nvg_fast;

pub const MANIFEST_FILE: &str = "labels.csv";
pub const RUN_FILE: &str = "run.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const HISTORY_FILE: &str = "history.csv";
pub const REPORT_FILE: &str = "report.json";
pub const CONFUSION_FILE: &str = "confusion.csv";
pub const SWEEP_BATCH_SIZES: [usize; 6] = [32, 64, 128, 256, 512, 1024];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Edfx,
    Hmc,
    Nch,
    Custom,
}

impl Preset {
    pub fn default_channel(self) -> Option<&'static str> {
        match self {
            Preset::Edfx => Some("EEG Fpz-Cz"),
            Preset::Hmc | Preset::Nch => Some("EEG C3-M2"),
            Preset::Custom => None,
        }
    }

    pub fn stage_map(self) -> Option<StageMap> {
        match self {
            Preset::Edfx => Some(StageMap::edfx()),
            Preset::Hmc => Some(StageMap::hmc()),
            Preset::Nch => Some(StageMap::nch()),
            Preset::Custom => None,
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "edfx" => Ok(Preset::Edfx),
            "hmc" => Ok(Preset::Hmc),
            "nch" => Ok(Preset::Nch),
            "custom" => Ok(Preset::Custom),
            _ => Err(Error::config(format!("unknown preset {s:?}; expected edfx, hmc, nch or custom"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub preset: Preset,
    /// Overrides the preset's channel.
    pub channel: Option<String>,
    /// Overrides the preset's stage map; required for `custom`.
    pub stage_map: Option<StageMap>,
    pub epoch_s: f64,
    pub resample_hz: Option<f64>,
    /// Only the first `crop_s` seconds of each recording are used.
    pub crop_s: Option<f64>,
    pub layout: LayoutConfig,
    pub sampler: SamplerConfig,
    /// `n_classes` and `input_side` are taken from the data at train time.
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Conversion worker threads; `None` uses every logical core.
    pub jobs: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            preset: Preset::Edfx,
            channel: None,
            stage_map: None,
            epoch_s: 30.0,
            resample_hz: None,
            crop_s: None,
            layout: LayoutConfig::default(),
            sampler: SamplerConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            jobs: None,
        }
    }
}

impl PipelineConfig {
    pub fn preset(preset: Preset) -> Self {
        Self {
            preset,
            ..Self::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn channel(&self) -> Result<String> {
        self.channel
            .clone()
            .or_else(|| self.preset.default_channel().map(str::to_string))
            .ok_or_else(|| Error::config("custom preset needs an explicit channel"))
    }

    pub fn stage_map(&self) -> Result<StageMap> {
        let map = self
            .stage_map
            .clone()
            .or_else(|| self.preset.stage_map())
            .ok_or_else(|| Error::config("custom preset needs an explicit stage_map"))?;
        map.validate()?;
        Ok(map)
    }

    pub fn validate(&self) -> Result<()> {
        self.channel()?;
        self.stage_map()?;
        if !(self.epoch_s > 0.0 && self.epoch_s.is_finite()) {
            return Err(Error::config(format!("epoch_s must be positive, got {}", self.epoch_s)));
        }
        for (name, v) in [("resample_hz", self.resample_hz), ("crop_s", self.crop_s)] {
            if v.is_some_and(|v| !(v > 0.0 && v.is_finite())) {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.jobs == Some(0) {
            return Err(Error::config("jobs must be at least 1"));
        }
        self.layout.validate()?;
        self.sampler.validate()?;
        self.train.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    /// Relative to the run directory, `/`-separated.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: PipelineConfig,
    pub seeds: BTreeMap<String, u64>,
    pub files: Vec<FileRecord>,
    pub timings_s: BTreeMap<String, f64>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn relative(root: &Path, path: &Path) -> String {
    let rel = path.strip_prefix(root).unwrap_or(path);
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

impl RunManifest {
    fn new(command: &str, config: &PipelineConfig) -> Self {
        let seeds = BTreeMap::from([
            ("layout".to_string(), config.layout.seed),
            ("sampler".to_string(), config.sampler.seed),
            ("train".to_string(), config.train.seed),
        ]);
        Self {
            command: command.into(),
            config: config.clone(),
            seeds,
            files: Vec::new(),
            timings_s: BTreeMap::new(),
        }
    }

    fn add_file(&mut self, root: &Path, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path)?;
        self.files.push(FileRecord {
            path: relative(root, path),
            sha256: sha256_hex(&bytes),
            bytes: bytes.len() as u64,
        });
        Ok(())
    }

    fn finish(mut self, root: &Path) -> Result<Self> {
        self.files.sort_by(|a, b| a.path.cmp(&b.path));
        std::fs::write(root.join(RUN_FILE), serde_json::to_vec_pretty(&self)?)?;
        Ok(self)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    /// Recompute every listed hash under `root`.
    pub fn verify(&self, root: &Path) -> Result<()> {
        for f in &self.files {
            let actual = sha256_hex(&std::fs::read(root.join(&f.path))?);
            if actual != f.sha256 {
                return Err(Error::config(format!("hash mismatch for {}: {actual} != {}", f.path, f.sha256)));
            }
        }
        Ok(())
    }

    /// `(path, sha256)` pairs, the part of a run that must be reproducible.
    pub fn artifact_hashes(&self) -> Vec<(String, String)> {
        self.files.iter().map(|f| (f.path.clone(), f.sha256.clone())).collect()
    }
}

/// A signal file and where its sleep scoring comes from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Recording {
    pub signal: PathBuf,
    /// Separate annotation file; `None` uses annotations embedded in the signal file.
    pub annotations: Option<PathBuf>,
    pub source_id: String,
}

impl Recording {
    pub fn new(signal: PathBuf, annotations: Option<PathBuf>) -> Self {
        let source_id = signal
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "recording".into());
        Self {
            signal,
            annotations,
            source_id,
        }
    }
}

/// Whether an EDF file holds only annotation channels, from its header alone.
fn edf_is_annotation_only(path: &Path) -> Result<bool> {
    use std::io::Read;
    let mut f = std::fs::File::open(path)?;
    let mut fixed = [0u8; 256];
    f.read_exact(&mut fixed)?;
    let ns: usize = std::str::from_utf8(&fixed[252..256])
        .ok()
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| Error::EdfHeader {
            offset: 252,
            reason: "signal count is not a number".into(),
        })?;
    let mut labels = vec![0u8; 16 * ns];
    f.read_exact(&mut labels)?;
    Ok(ns > 0 && labels.chunks(16).all(|l| String::from_utf8_lossy(l).trim() == "EDF Annotations"))
}

fn common_prefix(a: &str, b: &str) -> usize {
    a.chars().zip(b.chars()).take_while(|(x, y)| x == y).count()
}

/// Pair every signal EDF in `dir` with the annotation file (hypnogram EDF+,
/// or a `.txt`/`.csv`/`.tsv` table) sharing the longest file-name prefix.
/// Recordings without a match fall back to embedded annotations.
pub fn discover_recordings(dir: &Path) -> Result<Vec<Recording>> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    entries.sort();
    let (mut signals, mut annotations) = (Vec::new(), Vec::new());
    for p in entries {
        let ext = p.extension().map(|e| e.to_string_lossy().to_lowercase()).unwrap_or_default();
        match ext.as_str() {
            "edf" | "rec" => match edf_is_annotation_only(&p) {
                Ok(true) => annotations.push(p),
                Ok(false) => signals.push(p),
                Err(e) => log::warn!("event=skip file={} error={e}", p.display()),
            },
            "txt" | "csv" | "tsv" => annotations.push(p),
            _ => {}
        }
    }
    let name = |p: &Path| p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(signals
        .into_iter()
        .map(|s| {
            let sname = name(&s);
            let best = annotations
                .iter()
                .map(|a| (common_prefix(&sname, &name(a)), a))
                .filter(|(n, _)| *n > 0)
                .max_by(|x, y| x.0.cmp(&y.0).then_with(|| y.1.cmp(x.1)));
            Recording::new(s, best.map(|(_, a)| a.clone()))
        })
        .collect())
}

fn load_epochs(rec: &Recording, config: &PipelineConfig, map: &StageMap) -> Result<Vec<TimeSeriesEpoch>> {
    let file = EdfFile::parse(&std::fs::read(&rec.signal)?)?;
    let mut signal = select_channel(&file.signals(), &config.channel()?)?;
    if let Some(s) = config.crop_s {
        signal = crop(&signal, s);
    }
    if let Some(hz) = config.resample_hz {
        signal = resample(&signal, hz)?;
    }
    let annotations = match &rec.annotations {
        Some(p) => parse_annotations(&std::fs::read(p)?)?,
        None => file.annotations()?,
    };
    extract_epochs(&signal, &annotations, config.epoch_s, map, &rec.source_id)
}

/// Normalized series -> natural visibility graph -> Kamada-Kawai layout -> image.
pub fn epoch_to_image(samples: &[f64], label: usize, layout: &LayoutConfig) -> Result<FdlImage> {
    let graph = build_nvg_fast(&minmax_normalize(samples))?;
    let result = kamada_kawai(&graph, layout)?;
    Ok(rasterize(&graph, &result.positions, label))
}

fn with_pool<R: Send>(jobs: Option<usize>, f: impl FnOnce() -> R + Send) -> Result<R> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(j) = jobs {
        b = b.num_threads(j);
    }
    let pool = b.build().map_err(|e| Error::config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

#[derive(Debug, Clone)]
pub struct ConvertSummary {
    pub manifest: Manifest,
    pub failures: Vec<(String, String)>,
    pub run: RunManifest,
}

/// Convert recordings into `<source>_<epoch>_<label>.pgm` images under
/// `out_dir/images` plus a `labels.csv` manifest. Recordings that fail are
/// logged and skipped; it is an error only if none succeed.
pub fn cmd_convert(config: &PipelineConfig, recordings: &[Recording], out_dir: &Path) -> Result<ConvertSummary> {
    config.validate()?;
    if recordings.is_empty() {
        return Err(Error::Empty("recordings"));
    }
    let started = Instant::now();
    let map = config.stage_map()?;
    let image_dir = out_dir.join("images");
    std::fs::create_dir_all(&image_dir)?;

    let (epochs, failures, images) = with_pool(config.jobs, || -> Result<_> {
        let loaded: Vec<Result<Vec<TimeSeriesEpoch>>> =
            recordings.par_iter().map(|r| load_epochs(r, config, &map)).collect();
        let mut epochs = Vec::new();
        let mut failures = Vec::new();
        for (rec, res) in recordings.iter().zip(loaded) {
            match res {
                Ok(e) => {
                    log::info!("event=recording source={} epochs={}", rec.source_id, e.len());
                    epochs.extend(e);
                }
                Err(err) => {
                    log::warn!("event=skip file={} error={err}", rec.signal.display());
                    failures.push((rec.signal.display().to_string(), err.to_string()));
                }
            }
        }
        let images: Vec<Result<FdlImage>> =
            epochs.par_iter().map(|e| epoch_to_image(&e.samples, e.stage, &config.layout)).collect();
        Ok((epochs, failures, images))
    })??;
    if failures.len() == recordings.len() {
        return Err(Error::config(format!("all {} recordings failed to convert", recordings.len())));
    }

    let mut run = RunManifest::new("convert", config);
    let mut rows = Vec::with_capacity(epochs.len());
    for (epoch, image) in epochs.iter().zip(images) {
        let image = image?;
        let rel = format!("images/{}_{}_{}.pgm", epoch.source_id, epoch.index, epoch.stage);
        let path = out_dir.join(&rel);
        image.write_pgm(&path)?;
        run.add_file(out_dir, &path)?;
        rows.push(ManifestRow {
            path: rel,
            label: epoch.stage,
            class_name: map.class_names[epoch.stage].clone(),
            source_id: epoch.source_id.clone(),
            synthetic: None,
        });
    }
    let manifest = Manifest {
        rows,
        root: out_dir.to_path_buf(),
    };
    let manifest_path = out_dir.join(MANIFEST_FILE);
    manifest.write(&manifest_path)?;
    run.add_file(out_dir, &manifest_path)?;
    run.timings_s.insert("convert".into(), started.elapsed().as_secs_f64());
    log::info!("event=convert images={} failures={}", manifest.rows.len(), failures.len());
    Ok(ConvertSummary {
        manifest,
        failures,
        run: run.finish(out_dir)?,
    })
}

#[derive(Debug, Clone)]
pub struct BalanceSummary {
    pub manifest: Manifest,
    pub synthetic: usize,
    pub run: RunManifest,
}

/// SMOTE-balance a manifest's images; originals are copied and synthetics
/// written alongside, flagged in the `synthetic` column.
pub fn cmd_balance(manifest_path: &Path, config: &PipelineConfig, out_dir: &Path) -> Result<BalanceSummary> {
    config.sampler.validate()?;
    let started = Instant::now();
    let input = Manifest::read(manifest_path)?;
    let dataset = input.load_dataset(config.sampler.seed)?;
    let balanced = smote_balance(&dataset, &config.sampler)?;
    let image_dir = out_dir.join("images");
    std::fs::create_dir_all(&image_dir)?;

    let mut run = RunManifest::new("balance", config);
    let mut rows = Vec::with_capacity(balanced.len());
    for (i, row) in input.rows.iter().enumerate() {
        let name = Path::new(&row.path).file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let rel = format!("images/{name}");
        let dst = out_dir.join(&rel);
        std::fs::copy(input.root.join(&row.path), &dst)?;
        run.add_file(out_dir, &dst)?;
        rows.push(ManifestRow {
            path: rel,
            synthetic: Some(row.synthetic.unwrap_or(false) || dataset.origins[i].is_synthetic()),
            ..row.clone()
        });
    }
    let names = &balanced.class_names;
    for (j, img) in balanced.images[dataset.len()..].iter().enumerate() {
        let rel = format!("images/synthetic_{j:06}_{}.pgm", img.label);
        let path = out_dir.join(&rel);
        img.write_pgm(&path)?;
        run.add_file(out_dir, &path)?;
        rows.push(ManifestRow {
            path: rel,
            label: img.label,
            class_name: names[img.label].clone(),
            source_id: "smote".into(),
            synthetic: Some(true),
        });
    }
    let synthetic = balanced.len() - dataset.len();
    let manifest = Manifest {
        rows,
        root: out_dir.to_path_buf(),
    };
    let manifest_path = out_dir.join(MANIFEST_FILE);
    manifest.write(&manifest_path)?;
    run.add_file(out_dir, &manifest_path)?;
    run.timings_s.insert("balance".into(), started.elapsed().as_secs_f64());
    log::info!("event=balance rows={} synthetic={synthetic}", manifest.rows.len());
    Ok(BalanceSummary {
        manifest,
        synthetic,
        run: run.finish(out_dir)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TrainOptions {
    /// Stratified k-fold (fold count from the sampler config) instead of a holdout split.
    pub kfold: bool,
    /// Split the whole manifest, synthetic rows included, as the original
    /// workflow does. Otherwise only original rows are split and SMOTE is
    /// applied to the training part alone.
    pub balance_before_split: bool,
}

#[derive(Debug, Clone)]
pub struct FoldResult {
    pub dir: PathBuf,
    pub report: EvalReport,
    pub best_epoch: usize,
    pub epochs_run: usize,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub folds: Vec<FoldResult>,
    pub run: RunManifest,
}

impl TrainSummary {
    pub fn mean_accuracy(&self) -> f64 {
        self.folds.iter().map(|f| f.report.accuracy).sum::<f64>() / self.folds.len() as f64
    }
}

fn is_original(r: &ManifestRow) -> bool {
    r.synthetic != Some(true)
}

/// Train/validation datasets for one split of `pool` (indices into `data`).
fn prepare_split(
    data: &ImageDataset,
    pool: &[usize],
    train_idx: &[usize],
    val_idx: &[usize],
    config: &PipelineConfig,
    balance_before_split: bool,
) -> Result<(ImageDataset, ImageDataset)> {
    let pick = |idx: &[usize]| data.subset(&idx.iter().map(|&i| pool[i]).collect::<Vec<_>>());
    let (train_set, val_set) = (pick(train_idx), pick(val_idx));
    if balance_before_split {
        return Ok((train_set, val_set));
    }
    Ok((smote_balance(&train_set, &config.sampler)?, val_set))
}

fn fit_and_save(
    train_set: &ImageDataset,
    val_set: &ImageDataset,
    config: &PipelineConfig,
    dir: &Path,
    run: &mut RunManifest,
    root: &Path,
) -> Result<FoldResult> {
    std::fs::create_dir_all(dir)?;
    let mut model_cfg = config.model.clone();
    model_cfg.n_classes = train_set.n_classes();
    model_cfg.input_side = train_set.images[0].side;
    let model = AttDiCnn::<f32>::new(model_cfg, config.train.seed)?;
    log::info!(
        "event=train_start dir={} train={} val={} params={}",
        dir.display(),
        train_set.len(),
        val_set.len(),
        model.param_count()
    );
    let outcome = train(model, train_set, val_set, &config.train)?;

    let ck = Checkpoint::new(
        &outcome.model,
        train_set.class_names.clone(),
        config.train.seed,
        outcome.best_epoch,
        Some(outcome.best_val_acc),
    )
    .with_optimizer(outcome.optimizer.clone());
    let ck_path = dir.join(CHECKPOINT_FILE);
    ck.save(&ck_path)?;
    let hist_path = dir.join(HISTORY_FILE);
    outcome.history.write_csv(std::fs::File::create(&hist_path)?)?;
    let report = evaluate_dataset(&outcome.model, val_set)?;
    let written = write_report(&report, dir)?;
    for p in [ck_path, hist_path].into_iter().chain(written) {
        run.add_file(root, &p)?;
    }
    Ok(FoldResult {
        dir: dir.to_path_buf(),
        report,
        best_epoch: outcome.best_epoch,
        epochs_run: outcome.history.records.len(),
    })
}

/// Train on a manifest. Holdout mode writes `model.ckpt`, `history.csv` and a
/// validation `report.json` into `out_dir`; k-fold mode writes one such set
/// per `fold<k>` subdirectory plus `kfold.json`.
pub fn cmd_train(manifest_path: &Path, config: &PipelineConfig, out_dir: &Path, opts: TrainOptions) -> Result<TrainSummary> {
    config.sampler.validate()?;
    config.train.validate()?;
    let started = Instant::now();
    let manifest = Manifest::read(manifest_path)?;
    let data = manifest.load_dataset(config.sampler.seed)?;
    let pool: Vec<usize> = (0..manifest.rows.len())
        .filter(|&i| opts.balance_before_split || is_original(&manifest.rows[i]))
        .collect();
    let labels: Vec<usize> = pool.iter().map(|&i| data.images[i].label).collect();
    std::fs::create_dir_all(out_dir)?;
    let mut run = RunManifest::new(if opts.kfold { "train-kfold" } else { "train" }, config);

    let mut folds = Vec::new();
    if opts.kfold {
        let splits = stratified_kfold(&labels, config.sampler.folds, config.sampler.seed)?;
        for (k, (tr, va)) in splits.iter().enumerate() {
            let (train_set, val_set) = prepare_split(&data, &pool, tr, va, config, opts.balance_before_split)?;
            folds.push(fit_and_save(&train_set, &val_set, config, &out_dir.join(format!("fold{k}")), &mut run, out_dir)?);
        }
        let accs: Vec<f64> = folds.iter().map(|f| f.report.accuracy).collect();
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        let sd = (accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / accs.len() as f64).sqrt();
        let summary = serde_json::json!({ "fold_accuracy": accs, "mean_accuracy": mean, "std_accuracy": sd });
        let path = out_dir.join("kfold.json");
        std::fs::write(&path, serde_json::to_vec_pretty(&summary)?)?;
        run.add_file(out_dir, &path)?;
    } else {
        let (tr, va) = stratified_split_indices(&labels, config.sampler.split_ratio, config.sampler.seed)?;
        let (train_set, val_set) = prepare_split(&data, &pool, &tr, &va, config, opts.balance_before_split)?;
        folds.push(fit_and_save(&train_set, &val_set, config, out_dir, &mut run, out_dir)?);
    }
    run.timings_s.insert("train".into(), started.elapsed().as_secs_f64());
    Ok(TrainSummary {
        folds,
        run: run.finish(out_dir)?,
    })
}

fn evaluate_dataset(model: &AttDiCnn<f32>, data: &ImageDataset) -> Result<EvalReport> {
    let logits = predict_logits(model, &data.images)?;
    let scores: Vec<Vec<f64>> = logits.iter().map(|z| softmax(z).iter().map(|&p| p as f64).collect()).collect();
    EvalReport::from_scores(&data.labels(), &scores, &data.class_names)
}

fn write_report(report: &EvalReport, dir: &Path) -> Result<Vec<PathBuf>> {
    let json = dir.join(REPORT_FILE);
    std::fs::write(&json, report.to_json()?)?;
    let csv = dir.join(CONFUSION_FILE);
    report.write_confusion_csv(std::fs::File::create(&csv)?)?;
    log::info!(
        "event=report dir={} n={} accuracy={:.4} kappa={:.4} macro_f1={:.4}",
        dir.display(),
        report.n_samples,
        report.accuracy,
        report.kappa,
        report.macro_f1
    );
    Ok(vec![json, csv])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalOn {
    /// Only rows not flagged synthetic.
    #[default]
    Original,
    /// Every row, synthetic ones included.
    Balanced,
}

impl std::str::FromStr for EvalOn {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "original" => Ok(EvalOn::Original),
            "balanced" => Ok(EvalOn::Balanced),
            _ => Err(Error::config(format!("--eval-on expects original or balanced, got {s:?}"))),
        }
    }
}

pub fn load_checkpoint(path: &Path) -> Result<(Checkpoint<f32>, AttDiCnn<f32>)> {
    let ck = Checkpoint::<f32>::load(path)?;
    let model = ck.model()?;
    Ok((ck, model))
}

fn check_classes(ck: &Checkpoint<f32>, manifest: &Manifest) -> Result<()> {
    let names = &ck.meta.class_names;
    let n = ck.meta.config.n_classes;
    for r in &manifest.rows {
        let named_differently = names.get(r.label).is_some_and(|name| name != &r.class_name);
        if r.label >= n || named_differently {
            return Err(Error::config(format!(
                "manifest class {} ({:?}) does not match the checkpoint's classes {names:?}",
                r.label, r.class_name
            )));
        }
    }
    Ok(())
}

/// Evaluate a checkpoint on a manifest; writes `report.json` and
/// `confusion.csv` into `out_dir` when given.
pub fn cmd_evaluate(checkpoint: &Path, manifest_path: &Path, eval_on: EvalOn, out_dir: Option<&Path>) -> Result<EvalReport> {
    let (ck, model) = load_checkpoint(checkpoint)?;
    let mut manifest = Manifest::read(manifest_path)?;
    check_classes(&ck, &manifest)?;
    if eval_on == EvalOn::Original {
        manifest.rows.retain(is_original);
    }
    if manifest.rows.is_empty() {
        return Err(Error::Empty("evaluation rows"));
    }
    let images = manifest.load_images()?;
    let mut class_names = ck.meta.class_names.clone();
    class_names.resize_with(ck.meta.config.n_classes, || String::from("?"));
    let data = ImageDataset::new(images, class_names, ck.meta.seed)?;
    let report = evaluate_dataset(&model, &data)?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        write_report(&report, dir)?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub class: usize,
    pub class_name: String,
    pub scores: Vec<f64>,
}

pub fn cmd_predict(checkpoint: &Path, image: &Path) -> Result<Prediction> {
    let (ck, model) = load_checkpoint(checkpoint)?;
    let img = FdlImage::read_pgm(image, 0)?;
    let probs = model.predict_proba(&img.pixels)?;
    let class = crate::nn::argmax(&probs);
    Ok(Prediction {
        class,
        class_name: ck.meta.class_names.get(class).cloned().unwrap_or_else(|| class.to_string()),
        scores: probs.iter().map(|&p| p as f64).collect(),
    })
}

/// Write the tagged block's values as `param,value` CSV; returns the row count.
pub fn cmd_export_weights(checkpoint: &Path, tag: &str, out: &Path) -> Result<usize> {
    let ck = Checkpoint::<f32>::load(checkpoint)?;
    export_weight_distribution(&ck, tag, std::fs::File::create(out)?)
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub batch_size: usize,
    pub report: EvalReport,
}

/// Holdout training once per batch size into `out_dir/b<size>`, then a
/// `sweep.csv` with one metrics row per size.
pub fn cmd_sweep(
    manifest_path: &Path,
    config: &PipelineConfig,
    out_dir: &Path,
    batch_sizes: &[usize],
    opts: TrainOptions,
) -> Result<Vec<SweepRow>> {
    if batch_sizes.is_empty() {
        return Err(Error::Empty("batch sizes"));
    }
    let mut rows = Vec::new();
    for &b in batch_sizes {
        let mut cfg = config.clone();
        cfg.train.batch_size = b;
        let summary = cmd_train(manifest_path, &cfg, &out_dir.join(format!("b{b}")), TrainOptions { kfold: false, ..opts })?;
        rows.push(SweepRow {
            batch_size: b,
            report: summary.folds[0].report.clone(),
        });
    }
    let mut w = csv::Writer::from_path(out_dir.join("sweep.csv"))?;
    w.write_record(["batch_size", "accuracy", "top2", "top3", "kappa", "auc", "precision", "recall", "macro_f1", "mae", "mse"])?;
    for r in &rows {
        let m = &r.report;
        let auc = m.auc_macro.map(|a| a.to_string()).unwrap_or_default();
        w.write_record([
            r.batch_size.to_string(),
            m.accuracy.to_string(),
            m.top2.to_string(),
            m.top3.to_string(),
            m.kappa.to_string(),
            auc,
            m.precision.to_string(),
            m.recall.to_string(),
            m.macro_f1.to_string(),
            m.mae.to_string(),
            m.mse.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(rows)
}
