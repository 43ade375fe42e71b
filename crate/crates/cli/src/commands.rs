use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use fpi_core::eval::{evaluate, load_eval_cases, save_scores, write_report};
use fpi_core::manifest::{pair_slices, DatasetManifest, ManifestEntry, Split, SplitFractions};
use fpi_core::nn::{init_model, load_checkpoint, save_checkpoint, Head, ModelParams};
use fpi_core::phantom::generate_corpus;
use fpi_core::rng::{mix_seed, SeededRng};
use fpi_core::scorer::{score_volume, ScoringConfig};
use fpi_core::synth::{export_samples, make_training_batch, AlphaMode};
use fpi_core::testbench::{build_testset, write_testset, TestSetIndex, TestbenchConfig};
use fpi_core::train::{swa_finetune, train, EpochRecord, TrainConfig};
use fpi_core::volume::{load_volume, normalize, save_volume, Volume};
use fpi_core::{Error, Result};

use crate::config::{ModelPreset, RunConfig};

/// Stream indices under the run seed. Small indices are taken by epochs
/// and corpus members.
const SPLIT_STREAM: u64 = 1 << 40;
const INIT_STREAM: u64 = (1 << 40) + 1;

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn phantom(count: usize, shape: [usize; 3], seed: u64, fractions: SplitFractions, out: &Path) -> Result<()> {
    if count == 0 {
        return Err(Error::InvalidArgument("phantom count must be at least 1".into()));
    }
    fractions.validate()?;
    let volumes = generate_corpus(seed, count, shape)?;
    let splits = fractions.assign(count, &mut SeededRng::new(mix_seed(seed, SPLIT_STREAM)))?;
    create_dir(&out.join("volumes"))?;
    let mut entries = Vec::with_capacity(count);
    for (v, split) in volumes.iter().zip(splits) {
        let rel = PathBuf::from("volumes").join(format!("{}.raw", v.id()));
        save_volume(v, &out.join(&rel))?;
        entries.push(ManifestEntry {
            id: v.id().to_string(),
            path: rel,
            split,
        });
    }
    let manifest = DatasetManifest::new(fractions, entries)?;
    let path = out.join("manifest.json");
    manifest.save(&path)?;
    let reloaded = DatasetManifest::load(&path)?;
    if reloaded.entries.len() != count {
        return Err(Error::InvalidData(format!("manifest {} did not round-trip", path.display())));
    }
    for e in &reloaded.entries {
        load_volume(&reloaded.resolve(e))?;
    }
    log::info!(
        "wrote {count} phantoms of shape {shape:?}: {} train, {} normal test, {} anomaly sources",
        reloaded.split(Split::Train).count(),
        reloaded.split(Split::TestNormal).count(),
        reloaded.split(Split::TestAnomalySource).count()
    );
    Ok(())
}

pub fn synth(manifest: &Path, mode: AlphaMode, seed: u64, count: usize, out: &Path) -> Result<()> {
    if count == 0 {
        return Err(Error::InvalidArgument("sample count must be at least 1".into()));
    }
    let m = DatasetManifest::load(manifest)?;
    let volumes = m.load_split(Split::Train)?;
    let mut pairs = pair_slices(&volumes, mix_seed(seed, 0))?;
    pairs.truncate(count);
    let samples = make_training_batch(&pairs, &SeededRng::new(seed), mode, count)?;
    let index = export_samples(&samples, seed, mode, out)?;
    if index.samples.len() != count {
        return Err(Error::InvalidData("sample export incomplete".into()));
    }
    log::info!("wrote {count} {mode} samples to {}", out.display());
    Ok(())
}

pub fn make_testset(manifest: &Path, seed: u64, config: &TestbenchConfig, out: &Path) -> Result<()> {
    let m = DatasetManifest::load(manifest)?;
    let sources = m.load_split(Split::TestAnomalySource)?;
    let normals = m.load_split(Split::TestNormal)?;
    let set = build_testset(&sources, &normals, &SeededRng::new(seed), config)?;
    if let Some(c) = set.cases.iter().find(|c| !c.mask.voxels().iter().any(|&v| v > 0.5)) {
        return Err(Error::InvalidData(format!("anomaly in {} covers no voxel", c.volume.id())));
    }
    write_testset(&set, seed, config, out)?;
    let index = TestSetIndex::load(out)?;
    let mut per_kind: BTreeMap<String, usize> = BTreeMap::new();
    for r in &index.records {
        let key = r.class.map_or("normal".to_string(), |c| c.to_string());
        *per_kind.entry(key).or_default() += 1;
    }
    for (kind, n) in &per_kind {
        log::info!("{kind}: {n}");
    }
    Ok(())
}

/// Flag values for a run; `None` falls back to the defaults.
#[derive(Debug, Clone, Default)]
pub struct RunFlags {
    pub manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub mode: Option<AlphaMode>,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub max_batches: Option<usize>,
    pub swa_epochs: Option<usize>,
    pub model: Option<ModelPreset>,
}

impl RunFlags {
    fn any_set(&self) -> bool {
        self.manifest.is_some()
            || self.out.is_some()
            || self.mode.is_some()
            || self.seed.is_some()
            || self.epochs.is_some()
            || self.batch_size.is_some()
            || self.learning_rate.is_some()
            || self.max_batches.is_some()
            || self.swa_epochs.is_some()
            || self.model.is_some()
    }
}

/// The config file when given (flags are then ignored), otherwise a config
/// assembled from flags.
pub fn resolve_run_config(config: Option<&Path>, flags: &RunFlags) -> Result<RunConfig> {
    if let Some(path) = config {
        if flags.any_set() {
            log::warn!("--config given; run flags are ignored");
        }
        return RunConfig::load(path);
    }
    let manifest = flags
        .manifest
        .clone()
        .ok_or_else(|| Error::InvalidArgument("--manifest or --config is required".into()))?;
    let out = flags
        .out
        .clone()
        .ok_or_else(|| Error::InvalidArgument("--out or --config is required".into()))?;
    let mode = flags.mode.unwrap_or(AlphaMode::Continuous);
    let mut train = TrainConfig::new(mode, flags.seed.unwrap_or(0));
    if let Some(e) = flags.epochs {
        train.epochs = e;
    }
    if let Some(b) = flags.batch_size {
        train.batch_size = b;
    }
    if let Some(lr) = flags.learning_rate {
        train.learning_rate = lr;
    }
    if let Some(e) = flags.swa_epochs {
        train.swa.epochs = e;
    }
    train.max_batches_per_epoch = flags.max_batches;
    let m = DatasetManifest::load(&manifest)?;
    let first = m
        .entries
        .first()
        .ok_or_else(|| Error::InvalidData(format!("manifest {} lists no volumes", manifest.display())))?;
    let shape = load_volume(&m.resolve(first))?.shape();
    let model = flags.model.unwrap_or(ModelPreset::Desk).build(shape[2], Head::for_mode(mode));
    let cfg = RunConfig {
        manifest,
        out,
        model,
        train,
        testbench: TestbenchConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn append_log(path: &Path, record: &EpochRecord) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let line = serde_json::to_string(record).map_err(|e| Error::json(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

fn save_verified(params: &ModelParams<f32>, path: &Path) -> Result<()> {
    save_checkpoint(params, path)?;
    if load_checkpoint(path)? != *params {
        return Err(Error::InvalidData(format!("checkpoint {} did not round-trip", path.display())));
    }
    Ok(())
}

fn start_log(path: &Path) -> Result<()> {
    fs::write(path, "").map_err(|e| Error::io(path, e))
}

pub fn train_cmd(cfg: &RunConfig) -> Result<()> {
    let m = DatasetManifest::load(&cfg.manifest)?;
    let volumes = m.load_split(Split::Train)?;
    create_dir(&cfg.out)?;
    cfg.save(&cfg.out.join("run_config.json"))?;
    let init = init_model(&cfg.model, &mut SeededRng::new(mix_seed(cfg.train.seed, INIT_STREAM)))?;
    let log_path = cfg.out.join("train_log.jsonl");
    start_log(&log_path)?;
    let mut log_err = None;
    let outcome = train(&volumes, init, &cfg.train, |rec, _| {
        if let Err(e) = append_log(&log_path, rec) {
            log_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_err {
        return Err(e);
    }
    save_verified(&outcome.params, &cfg.out.join("model.ckpt"))?;
    log::info!(
        "trained {} epochs on {} volumes; final loss {:.6}",
        cfg.train.epochs,
        volumes.len(),
        outcome.log.last().map_or(f64::NAN, |r| r.mean_loss)
    );
    Ok(())
}

pub fn swa_cmd(cfg: &RunConfig, checkpoint: &Path) -> Result<()> {
    let start = load_checkpoint(checkpoint)?;
    if start.config != cfg.model {
        return Err(Error::InvalidData(format!(
            "checkpoint {} was built for a different model configuration",
            checkpoint.display()
        )));
    }
    let m = DatasetManifest::load(&cfg.manifest)?;
    let volumes = m.load_split(Split::Train)?;
    let snap_dir = cfg.out.join("swa_snapshots");
    create_dir(&snap_dir)?;
    let log_path = cfg.out.join("swa_log.jsonl");
    start_log(&log_path)?;
    let outcome = swa_finetune(&volumes, start, &cfg.train, |k, p| {
        save_verified(p, &snap_dir.join(format!("snapshot_{k:02}.ckpt")))
    })?;
    for rec in &outcome.log {
        append_log(&log_path, rec)?;
    }
    save_verified(&outcome.averaged, &cfg.out.join("swa_mean.ckpt"))?;
    save_verified(&outcome.params, &cfg.out.join("swa.ckpt"))?;
    log::info!("averaged {} snapshots", outcome.snapshots.len());
    Ok(())
}

/// Volumes to score: every record of a test set directory, or every entry
/// of a dataset manifest (normalized).
fn scoring_inputs(volumes: &Path) -> Result<Vec<Volume>> {
    if volumes.is_dir() {
        let index = TestSetIndex::load(volumes)?;
        index
            .records
            .iter()
            .map(|r| Ok(index.load_volume(volumes, r)?.with_id(r.id.clone())))
            .collect()
    } else {
        let m = DatasetManifest::load(volumes)?;
        m.entries
            .iter()
            .map(|e| Ok(normalize(&load_volume(&m.resolve(e))?)?.with_id(e.id.clone())))
            .collect()
    }
}

pub fn score(checkpoint: &Path, volumes: &Path, config: &ScoringConfig, out: &Path) -> Result<()> {
    let params = load_checkpoint(checkpoint)?;
    let model_id = checkpoint
        .file_stem()
        .map_or("model".to_string(), |s| s.to_string_lossy().into_owned());
    let inputs = scoring_inputs(volumes)?;
    create_dir(out)?;
    for v in &inputs {
        let (map, record) = score_volume(&params, v, config, &model_id)?;
        save_scores(out, &map, &record)?;
    }
    log::info!("scored {} volumes with {}", inputs.len(), checkpoint.display());
    Ok(())
}

pub fn evaluate_cmd(testset: &Path, scores: &Path, out: &Path) -> Result<()> {
    let cases = load_eval_cases(testset, scores)?;
    let (report, curves) = evaluate(&cases)?;
    create_dir(out)?;
    write_report(out, &report, &curves)?;
    println!(
        "subject AP {:.4} AUROC {:.4} | pixel AP {:.4} AUROC {:.4} DICE {:.4} (threshold {:.4})",
        report.subject.ap,
        report.subject.auroc,
        report.pixel.ap,
        report.pixel.auroc,
        report.pixel.dice,
        report.pixel.dice_threshold
    );
    for k in &report.per_kind {
        println!("  {:<16} pixel AP {:.4} AUROC {:.4}", k.class.name(), k.pixel.ap, k.pixel.auroc);
    }
    Ok(())
}
