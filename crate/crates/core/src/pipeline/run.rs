use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::info;
use serde::{Deserialize, Serialize};

use super::checkpoint::{load_adapter, load_classifier, save_checkpoint, CheckpointMeta, Stage};
use super::config::{MaskSource, PipelineConfig};
use super::prepare::{
    load_samples, prepare_entries, read_prepared, split_entries, write_prepared, DatasetManifest, PreparedEntry,
};
use super::train::{masked_features, masking_heatmaps, train_classifier, train_heatmap, EncodedEntries, Trained};
use crate::adapter::{AdapterState, DecoderMode};
use crate::backbone::FrozenBackbone;
use crate::classifier::{predicted_class, ClassifierState};
use crate::data_schema::{load_dataset, read_json, save_sample, synth_corpus, GazeSample, Setting};
use crate::error::{Error, Result};
use crate::gazeprep::SplitName;
use crate::losses::LossWeights;
use crate::metrics::{area_ratio, evaluate, fixed, pct, AggregateMetrics, ClassOutcome, MetricsReport, Table};

/// Directory layout of one run under `out_dir`.
#[derive(Clone, Debug)]
pub struct Workspace {
    root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn prepared(&self) -> PathBuf {
        self.root.join("prepared")
    }

    pub fn stage(&self, stage: Stage) -> PathBuf {
        self.root.join(stage.as_str())
    }

    pub fn best(&self, stage: Stage) -> PathBuf {
        self.stage(stage).join("best")
    }

    pub fn last(&self, stage: Stage) -> PathBuf {
        self.stage(stage).join("final")
    }

    pub fn eval(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn ablation(&self, kind: Ablation) -> PathBuf {
        self.root.join("ablate").join(kind.as_str())
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("run_manifest.json")
    }
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, body: &str) -> Result<()> {
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// Record of the most recent completion of each stage.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub stages: BTreeMap<String, StageRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub config_hash: String,
    pub seed: u64,
    pub iterations: Option<usize>,
    pub best_iteration: Option<usize>,
    pub metrics: Option<AggregateMetrics>,
}

/// Adds `record` under `stage` and rewrites the manifest via a temporary
/// file and rename, so readers never see a partial document.
pub fn record_stage(ws: &Workspace, stage: &str, record: StageRecord) -> Result<RunManifest> {
    let path = ws.manifest();
    let mut manifest: RunManifest = if path.exists() {
        read_json(&path)?
    } else {
        RunManifest::default()
    };
    manifest.version = env!("CARGO_PKG_VERSION").to_string();
    manifest.stages.insert(stage.to_string(), record);
    create_dir(ws.root())?;
    let tmp = path.with_extension("json.tmp");
    let mut body = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&tmp, e))?;
    body.push('\n');
    write_text(&tmp, &body)?;
    std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

fn record(
    config: &PipelineConfig,
    iterations: Option<usize>,
    best: Option<usize>,
    metrics: Option<AggregateMetrics>,
) -> StageRecord {
    StageRecord {
        config_hash: config.hash(),
        seed: config.seed,
        iterations,
        best_iteration: best,
        metrics,
    }
}

fn data_dir(config: &PipelineConfig) -> PathBuf {
    config
        .data
        .dir
        .clone()
        .unwrap_or_else(|| Workspace::new(&config.out_dir).data())
}

/// Writes the seeded synthetic corpus to the data directory.
pub fn run_synth(config: &PipelineConfig) -> Result<PathBuf> {
    config.validate()?;
    let dir = data_dir(config);
    create_dir(&dir)?;
    let samples = synth_corpus(config.seed, config.data.synth_count, &config.synth);
    for s in &samples {
        save_sample(s, &dir)?;
    }
    info!("wrote {} synthetic studies to {}", samples.len(), dir.display());
    record_stage(
        &Workspace::new(&config.out_dir),
        "synth",
        record(config, None, None, None),
    )?;
    Ok(dir)
}

/// Studies from the data directory when it holds any, else generated in memory.
pub fn source_samples(config: &PipelineConfig) -> Result<Vec<GazeSample>> {
    let dir = data_dir(config);
    if dir.is_dir() {
        let samples = load_dataset(&dir)?;
        if !samples.is_empty() {
            return Ok(samples);
        }
    }
    if config.data.dir.is_some() {
        return Err(Error::Invalid(format!("{}: no studies found", dir.display())));
    }
    load_samples(config)
}

/// Builds and writes the prepared dataset for the configured setting.
pub fn run_gazeprep(config: &PipelineConfig) -> Result<DatasetManifest> {
    config.validate()?;
    let ws = Workspace::new(&config.out_dir);
    let samples = source_samples(config)?;
    let entries = prepare_entries(&samples, config, true)?;
    let manifest = write_prepared(&ws.prepared(), &entries, config)?;
    record_stage(&ws, "gazeprep", record(config, None, None, None))?;
    Ok(manifest)
}

fn load_prepared(config: &PipelineConfig) -> Result<Vec<PreparedEntry>> {
    let dir = Workspace::new(&config.out_dir).prepared();
    if !dir.join("manifest.json").exists() {
        return Err(Error::Invalid(format!(
            "{}: no prepared dataset; run gazeprep first",
            dir.display()
        )));
    }
    let (manifest, entries) = read_prepared(&dir)?;
    if manifest.train_size != config.data.train_size || manifest.setting != config.setting {
        return Err(Error::Config(format!(
            "prepared dataset is for setting {} at {} px, config asks for {} at {} px",
            manifest.setting, manifest.train_size, config.setting, config.data.train_size
        )));
    }
    Ok(entries)
}

fn save_trained<S>(
    ws: &Workspace,
    stage: Stage,
    config: &PipelineConfig,
    t: &Trained<S>,
    params: impl Fn(&S) -> &crate::nn::ParamStore,
) -> Result<CheckpointMeta> {
    let best = CheckpointMeta::new(stage, t.best_iteration, config, params(&t.best));
    save_checkpoint(&ws.best(stage), &best, params(&t.best))?;
    let last = CheckpointMeta::new(stage, t.iterations, config, params(&t.last));
    save_checkpoint(&ws.last(stage), &last, params(&t.last))?;
    write_text(&ws.stage(stage).join("train_log.jsonl"), &t.log.to_jsonl())?;
    Ok(best)
}

/// Stage 1 from the prepared dataset; writes best and final checkpoints.
pub fn run_train_heatmap(config: &PipelineConfig) -> Result<CheckpointMeta> {
    config.validate()?;
    let ws = Workspace::new(&config.out_dir);
    let entries = load_prepared(config)?;
    let backbone = FrozenBackbone::toy(config.backbone.clone())?;
    let trained = train_heatmap(
        config,
        &backbone,
        &split_entries(&entries, SplitName::Train),
        &split_entries(&entries, SplitName::Val),
    )?;
    let meta = save_trained(&ws, Stage::Heatmap, config, &trained, |s: &AdapterState| s.params())?;
    record_stage(
        &ws,
        "train-heatmap",
        record(config, Some(trained.iterations), Some(trained.best_iteration), None),
    )?;
    Ok(meta)
}

/// Features and labels of entries masked per `source`.
fn classifier_inputs(
    backbone: &FrozenBackbone,
    adapter: &AdapterState,
    entries: &[&PreparedEntry],
    source: MaskSource,
) -> Result<(Vec<ndarray::Array1<f64>>, Vec<usize>)> {
    let heatmaps = masking_heatmaps(backbone, Some(adapter), entries, source)?;
    let features = masked_features(backbone, entries, &heatmaps)?;
    Ok((features, entries.iter().map(|e| e.label).collect()))
}

/// Stage 2 on top of a fixed heatmap model.
pub fn fit_classifier(
    config: &PipelineConfig,
    backbone: &FrozenBackbone,
    adapter: &AdapterState,
    train: &[&PreparedEntry],
    val: &[&PreparedEntry],
) -> Result<Trained<ClassifierState>> {
    let source = config.classifier.mask_source;
    let (tf, tl) = classifier_inputs(backbone, adapter, train, source)?;
    let (vf, vl) = classifier_inputs(backbone, adapter, val, source)?;
    let ids: Vec<String> = train.iter().map(|e| e.id.clone()).collect();
    train_classifier(config, &tf, &tl, &ids, &vf, &vl, backbone.channels())
}

/// Stage 2 from the prepared dataset and the best stage-1 checkpoint.
pub fn run_train_classifier(config: &PipelineConfig) -> Result<CheckpointMeta> {
    config.validate()?;
    let ws = Workspace::new(&config.out_dir);
    let entries = load_prepared(config)?;
    let backbone = FrozenBackbone::toy(config.backbone.clone())?;
    let (_, adapter) = load_adapter(&ws.best(Stage::Heatmap), config, &backbone)?;
    let trained = fit_classifier(
        config,
        &backbone,
        &adapter,
        &split_entries(&entries, SplitName::Train),
        &split_entries(&entries, SplitName::Val),
    )?;
    let meta = save_trained(&ws, Stage::Classifier, config, &trained, |s: &ClassifierState| {
        s.params()
    })?;
    record_stage(
        &ws,
        "train-classifier",
        record(config, Some(trained.iterations), Some(trained.best_iteration), None),
    )?;
    Ok(meta)
}

/// Heatmap metrics of `adapter` on `entries`, plus accuracy when a head is given.
pub fn evaluate_entries(
    backbone: &FrozenBackbone,
    adapter: &AdapterState,
    head: Option<&ClassifierState>,
    entries: &[&PreparedEntry],
    mask_source: MaskSource,
) -> Result<MetricsReport> {
    let encoded = EncodedEntries::new(backbone, entries)?;
    let preds = encoded.predict(adapter)?;
    let gts = entries.iter().map(|e| (e.id.clone(), e.heatmap.clone())).collect();
    let mut outcomes = BTreeMap::new();
    if let Some(head) = head {
        let masks: Vec<_> = match mask_source {
            MaskSource::Predicted => entries.iter().map(|e| preds[&e.id].clone()).collect(),
            MaskSource::GroundTruth => entries.iter().map(|e| e.heatmap.clone()).collect(),
        };
        let features = masked_features(backbone, entries, &masks)?;
        for (e, f) in entries.iter().zip(&features) {
            let predicted = predicted_class(&head.classify_features(f)?);
            outcomes.insert(
                e.id.clone(),
                ClassOutcome {
                    label: e.label,
                    predicted,
                },
            );
        }
    }
    evaluate(&preds, &gts, &outcomes)
}

/// Test-split evaluation of the best checkpoints; writes `eval/`.
pub fn run_eval(config: &PipelineConfig) -> Result<MetricsReport> {
    config.validate()?;
    let ws = Workspace::new(&config.out_dir);
    let entries = load_prepared(config)?;
    let backbone = FrozenBackbone::toy(config.backbone.clone())?;
    let (hmeta, adapter) = load_adapter(&ws.best(Stage::Heatmap), config, &backbone)?;
    let (cmeta, head) = load_classifier(&ws.best(Stage::Classifier), config, &backbone)?;
    let test = split_entries(&entries, SplitName::Test);
    if test.is_empty() {
        return Err(Error::Invalid("test split is empty".into()));
    }
    let report = evaluate_entries(&backbone, &adapter, Some(&head), &test, config.classifier.mask_source)?
        .with_provenance("config_hash", config.hash())
        .with_provenance("setting", config.setting.to_string())
        .with_provenance("seed", config.seed.to_string())
        .with_provenance("heatmap_checkpoint", hmeta.param_checksum)
        .with_provenance("classifier_checkpoint", cmeta.param_checksum);
    let tables = [report.heatmap_table("Ours"), report.accuracy_table("Ours")];
    report.write(&ws.eval(), &tables)?;
    record_stage(&ws, "eval", record(config, None, None, Some(report.aggregate.clone())))?;
    Ok(report)
}

/// Full pipeline: data (synthetic unless `data.dir` is set), ground truth,
/// both training stages and evaluation.
pub fn run_pipeline(config: &PipelineConfig) -> Result<MetricsReport> {
    if config.data.dir.is_none() {
        run_synth(config)?;
    }
    run_gazeprep(config)?;
    run_train_heatmap(config)?;
    run_train_classifier(config)?;
    run_eval(config)
}

/// Comparative studies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Train and evaluate on each of C, L, R and M.
    PerSetting,
    /// L2 only, mask losses only, all three.
    Losses,
    /// Channel-mean decoder versus the scaling-vector decoder.
    Alpha,
    /// Classifier masked by ground-truth versus predicted heatmaps.
    GtMask,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::PerSetting,
        Ablation::Losses,
        Ablation::Alpha,
        Ablation::GtMask,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::PerSetting => "per_setting",
            Ablation::Losses => "losses",
            Ablation::Alpha => "alpha",
            Ablation::GtMask => "gt_mask",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == s.replace('-', "_"))
            .ok_or_else(|| {
                Error::Invalid(format!(
                    "unknown ablation {s:?}; expected per_setting, losses, alpha or gt_mask"
                ))
            })
    }
}

/// Table plus the per-variant reports behind it.
#[derive(Clone, Debug)]
pub struct AblationOutcome {
    pub table: Table,
    pub reports: Vec<(String, MetricsReport)>,
}

fn mark(on: bool) -> String {
    if on { "✓" } else { "✗" }.to_string()
}

/// Trains stage 1 on the train split of `entries` and evaluates the best
/// state on the test split.
fn heatmap_variant(
    config: &PipelineConfig,
    backbone: &FrozenBackbone,
    entries: &[PreparedEntry],
) -> Result<(AdapterState, MetricsReport)> {
    let test = split_entries(entries, SplitName::Test);
    let trained = train_heatmap(
        config,
        backbone,
        &split_entries(entries, SplitName::Train),
        &split_entries(entries, SplitName::Val),
    )?;
    let report = evaluate_entries(backbone, &trained.best, None, &test, MaskSource::Predicted)?;
    Ok((trained.best, report))
}

/// Runs one ablation in memory from the configured data source.
pub fn ablation(config: &PipelineConfig, kind: Ablation) -> Result<AblationOutcome> {
    config.validate()?;
    let samples = source_samples(config)?;
    let backbone = FrozenBackbone::toy(config.backbone.clone())?;
    let mut reports = Vec::new();
    let table = match kind {
        Ablation::PerSetting => {
            let mut t = Table::per_setting();
            for s in Setting::ALL {
                let cfg = PipelineConfig {
                    setting: s,
                    ..config.clone()
                };
                let entries = prepare_entries(&samples, &cfg, true)?;
                let (_, r) = heatmap_variant(&cfg, &backbone, &entries)?;
                let a = &r.aggregate;
                t.push(vec![
                    s.to_string(),
                    pct(a.fw_iou),
                    fixed(a.ssim, 4),
                    fixed(a.psnr, 2),
                    fixed(a.l1, 4),
                ]);
                reports.push((s.to_string(), r));
            }
            t
        }
        Ablation::Losses => {
            let entries = prepare_entries(&samples, config, true)?;
            let mut t = Table::losses();
            for (l2, ce, dice) in [(true, false, false), (false, true, true), (true, true, true)] {
                let w = |on: bool| if on { 1.0 } else { 0.0 };
                let mut cfg = config.clone();
                cfg.loss.weights = LossWeights::new(w(l2), w(ce), w(dice))?;
                let (_, r) = heatmap_variant(&cfg, &backbone, &entries)?;
                let a = &r.aggregate;
                t.push(vec![
                    mark(l2),
                    mark(ce),
                    mark(dice),
                    pct(a.fg_iou),
                    pct(a.fw_iou),
                    fixed(a.psnr, 2),
                    fixed(a.l2, 4),
                ]);
                reports.push((format!("l2={l2},ce={ce},dice={dice}"), r));
            }
            t
        }
        Ablation::Alpha => {
            let entries = prepare_entries(&samples, config, true)?;
            let mut t = Table::alpha();
            for (name, mode) in [
                ("w/o α", DecoderMode::ChannelMean),
                ("w/ α", DecoderMode::ScalingVector),
            ] {
                let mut cfg = config.clone();
                cfg.adapter.decoder = mode;
                let (_, r) = heatmap_variant(&cfg, &backbone, &entries)?;
                let a = &r.aggregate;
                t.push(vec![
                    name.to_string(),
                    pct(a.fw_iou),
                    fixed(a.ssim, 4),
                    fixed(a.psnr, 2),
                    fixed(a.l1, 4),
                ]);
                reports.push((name.to_string(), r));
            }
            t
        }
        Ablation::GtMask => {
            let mut t = Table::gt_mask();
            for s in Setting::ALL {
                let cfg = PipelineConfig {
                    setting: s,
                    ..config.clone()
                };
                let entries = prepare_entries(&samples, &cfg, true)?;
                let train = split_entries(&entries, SplitName::Train);
                let val = split_entries(&entries, SplitName::Val);
                let test = split_entries(&entries, SplitName::Test);
                let adapter = train_heatmap(&cfg, &backbone, &train, &val)?.best;
                for (name, source) in [
                    ("Ground truth", MaskSource::GroundTruth),
                    ("Ours", MaskSource::Predicted),
                ] {
                    let mut c = cfg.clone();
                    c.classifier.mask_source = source;
                    let head = fit_classifier(&c, &backbone, &adapter, &train, &val)?.best;
                    let r = evaluate_entries(&backbone, &adapter, Some(&head), &test, source)?;
                    let masks = masking_heatmaps(&backbone, Some(&adapter), &test, source)?;
                    let area = masks.iter().map(area_ratio).sum::<f64>() / masks.len().max(1) as f64;
                    let acc = r.aggregate.accuracy.unwrap_or(0.0);
                    t.push(vec![s.to_string(), name.to_string(), pct(area), pct(acc)]);
                    reports.push((format!("{s}/{name}"), r));
                }
            }
            t
        }
    };
    Ok(AblationOutcome { table, reports })
}

/// Runs an ablation and writes `ablate/<kind>/{table.txt, table.csv, reports.json}`.
pub fn run_ablation(config: &PipelineConfig, kind: Ablation) -> Result<AblationOutcome> {
    let outcome = ablation(config, kind)?;
    let ws = Workspace::new(&config.out_dir);
    let dir = ws.ablation(kind);
    create_dir(&dir)?;
    write_text(&dir.join("table.txt"), &outcome.table.render())?;
    write_text(&dir.join("table.csv"), &outcome.table.to_csv())?;
    let reports: BTreeMap<&str, &MetricsReport> = outcome.reports.iter().map(|(k, r)| (k.as_str(), r)).collect();
    let mut body = serde_json::to_string_pretty(&reports).expect("reports serialize");
    body.push('\n');
    write_text(&dir.join("reports.json"), &body)?;
    record_stage(&ws, &format!("ablate-{kind}"), record(config, None, None, None))?;
    Ok(outcome)
}
