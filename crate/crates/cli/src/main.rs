//! `gaze-focus`: stage-by-stage driver for the gaze-guided heatmap pipeline.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use gaze_focus::backbone::FrozenBackbone;
use gaze_focus::data_schema::Setting;
use gaze_focus::gazeprep::SplitName;
use gaze_focus::pipeline::{
    load_adapter, read_prepared, render_overlay, run_ablation, run_eval, run_gazeprep, run_synth, run_train_classifier,
    run_train_heatmap, Ablation, EncodedEntries, PipelineConfig, Stage, Workspace,
};

#[derive(Parser)]
#[command(
    name = "gaze-focus",
    version,
    about = "Gaze-guided heatmap prediction and masked classification"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration; defaults apply to every missing key.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory (overrides `out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Study directory (overrides `data.dir`).
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    /// Target setting: C, L, R or M.
    #[arg(long, global = true)]
    setting: Option<Setting>,
    /// Fixation kernel radius in source pixels.
    #[arg(long, global = true)]
    radius: Option<f64>,
    /// Keyword table (TOML) replacing the built-in one.
    #[arg(long, global = true)]
    keywords: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the seeded synthetic corpus.
    Synth,
    /// Build ground-truth heatmaps and the train/val/test split.
    Gazeprep,
    /// Train the heatmap adapter (stage 1).
    TrainHeatmap,
    /// Train the classifier head on masked images (stage 2).
    TrainClassifier,
    /// Evaluate the best checkpoints on the test split.
    Eval,
    /// Run a comparative study: per-setting, losses, alpha or gt-mask.
    Ablate { kind: Ablation },
    /// Write heatmap overlays for prepared entries.
    Render {
        /// Entry id; all test entries when omitted.
        #[arg(long)]
        id: Option<String>,
        /// Overlay the ground-truth heatmap instead of the prediction.
        #[arg(long)]
        ground_truth: bool,
    },
}

fn load_config(common: &Common) -> anyhow::Result<PipelineConfig> {
    let mut config = match &common.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.set_seed(seed);
    }
    if let Some(out) = &common.out {
        config.out_dir = out.clone();
    }
    if let Some(dir) = &common.data_dir {
        config.data.dir = Some(dir.clone());
    }
    if let Some(setting) = common.setting {
        config.setting = setting;
    }
    if let Some(radius) = common.radius {
        config.data.radius = radius;
    }
    if let Some(keywords) = &common.keywords {
        config.data.keywords = Some(keywords.clone());
    }
    config.validate()?;
    Ok(config)
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(value) = std::env::var("GAZE_FOCUS_THREADS") {
        let n: usize = value
            .parse()
            .with_context(|| format!("GAZE_FOCUS_THREADS={value} is not a thread count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn render(config: &PipelineConfig, id: Option<&str>, ground_truth: bool) -> anyhow::Result<()> {
    let ws = Workspace::new(&config.out_dir);
    let (_, entries) = read_prepared(&ws.prepared())?;
    let chosen: Vec<_> = match id {
        Some(id) => entries.iter().filter(|e| e.id == id).collect(),
        None => entries.iter().filter(|e| e.split == Some(SplitName::Test)).collect(),
    };
    if chosen.is_empty() {
        bail!("no prepared entry matches {}", id.unwrap_or("the test split"));
    }
    let out = ws.root().join("render");
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let preds = if ground_truth {
        None
    } else {
        let backbone = FrozenBackbone::toy(config.backbone.clone())?;
        let (_, adapter) = load_adapter(&ws.best(Stage::Heatmap), config, &backbone)?;
        Some(EncodedEntries::new(&backbone, &chosen)?.predict(&adapter)?)
    };
    for e in chosen {
        let heatmap = match &preds {
            Some(p) => &p[&e.id],
            None => &e.heatmap,
        };
        let path = out.join(format!("{}.png", e.id));
        render_overlay(&e.image, heatmap, &path)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    init_threads()?;
    let config = load_config(&cli.common)?;
    match cli.command {
        Command::Synth => {
            let dir = run_synth(&config)?;
            println!("{}", dir.display());
        }
        Command::Gazeprep => {
            let manifest = run_gazeprep(&config)?;
            println!("{}", serde_json::to_string(&manifest.counts)?);
        }
        Command::TrainHeatmap => {
            let meta = run_train_heatmap(&config)?;
            println!("{}", serde_json::to_string(&meta)?);
        }
        Command::TrainClassifier => {
            let meta = run_train_classifier(&config)?;
            println!("{}", serde_json::to_string(&meta)?);
        }
        Command::Eval => {
            let report = run_eval(&config)?;
            println!("{}", serde_json::to_string(&report.aggregate)?);
        }
        Command::Ablate { kind } => {
            let outcome = run_ablation(&config, kind)?;
            print!("{}", outcome.table.render());
        }
        Command::Render { id, ground_truth } => render(&config, id.as_deref(), ground_truth)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let kind = err
                .downcast_ref::<gaze_focus::Error>()
                .map_or("other", gaze_focus::Error::kind);
            let chain: Vec<String> = err.chain().map(ToString::to_string).collect();
            let record = serde_json::json!({ "error": kind, "message": chain.join(": ") });
            eprintln!("{record}");
            ExitCode::FAILURE
        }
    }
}
