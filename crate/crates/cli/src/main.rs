mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hcvc::data_model::{load_annotations, load_registry, HoiClassRegistry, SyntheticSceneConfig};
use hcvc::evaluation::{SplitSetting, SplitSizes};
use hcvc::fusion_decoder::Preset;
use hcvc::harness::{cmd_cues, cmd_eval, cmd_splits, cmd_synth, cmd_train, CueMode, HarnessError};

#[derive(Parser)]
#[command(name = "hcvc", version, about = "Cue-fused HOI detection: training, evaluation, cues and splits")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML or JSON run config.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set optimizer.lr=1e-3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Zero-shot setting: regular, rf_uc, nf_uc, uo or uv.
    #[arg(long)]
    split: Option<SplitSetting>,
    #[arg(long)]
    split_seed: Option<u64>,
    /// Cue source: fixture, cache or live.
    #[arg(long, value_parser = parse_cue_mode)]
    cue_mode: Option<CueMode>,
    #[arg(long)]
    cue_cache: Option<PathBuf>,
    #[arg(long)]
    cue_dir: Option<PathBuf>,
}

fn parse_cue_mode(s: &str) -> Result<CueMode, String> {
    serde_json::from_value(serde_json::Value::String(s.to_ascii_lowercase()))
        .map_err(|_| format!("unknown cue mode `{s}` (fixture, cache, live)"))
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint, loss curve and manifest.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, short, default_value = "runs/train")]
        out: PathBuf,
        /// Ablation preset: base, text_classifier, one_tower or multitower.
        #[arg(long)]
        preset: Option<Preset>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Evaluate on the training dataset afterwards (written to `<out>/eval`).
        #[arg(long)]
        eval: bool,
    },
    /// Evaluate a checkpoint and write results and PR curves.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, short, default_value = "runs/eval")]
        out: PathBuf,
        #[arg(long)]
        top_k: Option<usize>,
    },
    /// Generate or load cues for every image into the cache.
    Cues {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        endpoint: Option<String>,
    },
    /// Build a zero-shot split and write it as JSON.
    Splits {
        #[arg(long, default_value = "regular")]
        setting: SplitSetting,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// `hico` (bundled profile), `fixture`, or a registry/annotation JSON file.
        #[arg(long, default_value = "hico")]
        registry: String,
        #[arg(long, short)]
        out: Option<PathBuf>,
        #[arg(long)]
        unseen_classes: Option<usize>,
        #[arg(long)]
        unseen_objects: Option<usize>,
        #[arg(long)]
        unseen_verbs: Option<usize>,
    },
    /// Write a synthetic dataset as an annotation file.
    Synth {
        #[arg(long, default_value_t = 20)]
        images: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        grid: usize,
        #[arg(long, default_value_t = 0.3)]
        noise: f64,
        #[arg(long, short)]
        out: PathBuf,
        /// Also write one cue fixture file per image here.
        #[arg(long)]
        cue_dir: Option<PathBuf>,
    },
}

impl ConfigArgs {
    fn load(&self, extra: Vec<String>) -> Result<hcvc::harness::RunConfig, HarnessError> {
        let mut overrides = self.overrides.clone();
        overrides.extend(extra);
        let mut cfg = config::load_config(self.config.as_deref(), &overrides)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(s) = self.split {
            cfg.split = s;
        }
        if let Some(s) = self.split_seed {
            cfg.split_seed = s;
        }
        if let Some(m) = self.cue_mode {
            cfg.cues.mode = m;
        }
        if let Some(p) = &self.cue_cache {
            cfg.cues.cache = Some(p.clone());
        }
        if let Some(d) = &self.cue_dir {
            cfg.cues.dir = Some(d.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn load_split_registry(spec: &str) -> Result<HoiClassRegistry, HarnessError> {
    match spec {
        "hico" => Ok(HoiClassRegistry::hico_profile()),
        "fixture" => Ok(HoiClassRegistry::fixture()),
        path => {
            let p = Path::new(path);
            load_registry(p)
                .or_else(|_| load_annotations(p).map(|(r, _)| r))
                .map_err(|e| HarnessError::Data(e.to_string()))
        }
    }
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Train { cfg, out, preset, epochs, lr, batch_size, eval } => {
            let mut extra = Vec::new();
            if let Some(e) = epochs {
                extra.push(format!("optimizer.epochs={e}"));
            }
            if let Some(l) = lr {
                extra.push(format!("optimizer.lr={l:e}"));
            }
            if let Some(b) = batch_size {
                extra.push(format!("optimizer.batch_size={b}"));
            }
            let mut config = cfg.load(extra)?;
            if preset.is_some() {
                config.preset = preset;
            }
            let summary = cmd_train(&config, &out, |e| {
                let l = &e.loss;
                log::info!(
                    "epoch {:>4}  total {:.5}  l_b {:.5}  l_u {:.5}  l_o {:.5}  l_c {:.5}",
                    e.epoch,
                    l.total,
                    l.l_b,
                    l.l_u,
                    l.l_o,
                    l.l_c
                );
            })?;
            println!("cues: {}", serde_json::to_string(&summary.cue_stats).expect("stats serialize"));
            println!("checkpoint written to {}", summary.checkpoint.display());
            if eval {
                let r = cmd_eval(&config, &summary.checkpoint, &out.join("eval"))?;
                println!("{}", r.results.summary());
            }
        }
        Command::Eval { cfg, checkpoint, out, top_k } => {
            let extra = top_k.map(|k| format!("top_k={k}")).into_iter().collect();
            let config = cfg.load(extra)?;
            let r = cmd_eval(&config, &checkpoint, &out)?;
            println!("{}", r.results.summary());
            println!("results written to {}", out.display());
        }
        Command::Cues { cfg, endpoint } => {
            let extra = endpoint.map(|e| format!("cues.endpoint={}", serde_json::Value::String(e))).into_iter().collect();
            let config = cfg.load(extra)?;
            let report = cmd_cues(&config)?;
            let s = report.stats;
            println!("live {}  cache {}  fixture {}  failed {}", s.live, s.cache, s.fixture, s.failed);
            if !report.failures.is_empty() {
                for (id, e) in &report.failures {
                    eprintln!("{id}: {e}");
                }
                return Err(HarnessError::MissingCues(report.failures));
            }
        }
        Command::Splits { setting, seed, registry, out, unseen_classes, unseen_objects, unseen_verbs } => {
            let reg = load_split_registry(&registry)?;
            let d = SplitSizes::default();
            let sizes = SplitSizes {
                classes: unseen_classes.unwrap_or(d.classes),
                objects: unseen_objects.unwrap_or(d.objects),
                verbs: unseen_verbs.unwrap_or(d.verbs),
            };
            let spec = cmd_splits(setting, seed, sizes, &reg, out.as_deref())?;
            println!(
                "{}: {} seen, {} unseen classes ({} unseen objects, {} unseen verbs)",
                spec.setting,
                spec.seen.len(),
                spec.unseen.len(),
                spec.unseen_objects.len(),
                spec.unseen_verbs.len()
            );
        }
        Command::Synth { images, seed, grid, noise, out, cue_dir } => {
            let scenes = SyntheticSceneConfig { images, seed, grid, noise, ..Default::default() };
            let n = cmd_synth(&scenes, &out, cue_dir.as_deref())?;
            println!("{n} scenes written to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
