//! `glad` — configured experiment runner for gradient-regularized few-shot
//! adaptation on the synthetic dual-encoder benchmark.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use glad_core::bench::{export_samples_csv, generate_task, save_bundle};
use glad_core::harness::{
    apply_kv, emit_results, load_config, load_records, run_ablation_grid, run_experiment,
    EmitFormat, ExperimentConfig,
};

const CONFIG_KEYS: &str = "\
Configuration is a flat `key = value` file ('#' comments); --set overrides
file values. Keys:
  task.seed task.d_in task.n_pretrain_classes task.n_heldout
  task.pretrain_per_class task.n_base task.n_novel task.shots
  task.sigma_img task.sigma_txt task.test_per_class
  dims.hidden dims.d_embed
  lora.rank lora.gamma
  alignnet.hidden1 alignnet.hidden2 alignnet.renormalize
  gradreg.rho gradreg.alpha gradreg.delta gradreg.scope (global|per-tensor)
  loss.kl_weight loss.kl_direction (frozen-to-tuned|tuned-to-frozen)
  loss.temperature
  train.kind (sgd|sgd-momentum) train.base_lr train.momentum
  train.epochs train.batch_size
  pretrain.epochs pretrain.base_lr pretrain.momentum pretrain.batch_classes
  ablation.use_sam_only ablation.use_gradreg ablation.use_alignnet
  eval.alignnet_at_eval eval.probe_flatness eval.flatness_rho
  eval.flatness_trials eval.domain_shifts (kind:magnitude,...)
  eval.transfer_targets (seed,...)
  sam_as_fusion seeds (comma list)

Environment: GLAD_CACHE_DIR overrides the pretrained-backbone cache
directory (default <out>/backbone-cache).";

#[derive(Parser)]
#[command(
    name = "glad",
    about = "Gradient-regularized LoRA few-shot adaptation experiments",
    after_long_help = CONFIG_KEYS,
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key (repeatable), e.g. --set gradreg.alpha=0.5
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                load_config(path).with_context(|| format!("reading config {}", path.display()))?
            }
            None => ExperimentConfig::default(),
        };
        for item in &self.sets {
            let (key, value) = item
                .split_once('=')
                .with_context(|| format!("--set {item:?}: expected KEY=VALUE"))?;
            apply_kv(&mut cfg, key, value)?;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run one configured experiment: pretrain (or cached) → adapt → evaluate.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory for records, step logs, and the backbone cache.
        #[arg(long, default_value = "glad-out")]
        out: PathBuf,
        /// Also emit the record in these formats (comma list of json|csv|md).
        #[arg(long, value_delimiter = ',')]
        emit: Vec<String>,
    },
    /// Run the five-row component ablation grid (a–e) and emit a combined table.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "glad-out")]
        out: PathBuf,
    },
    /// Train per config, then measure the loss-increase flatness probe.
    ProbeFlatness {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "glad-out")]
        out: PathBuf,
        /// Probe radius (defaults to eval.flatness_rho).
        #[arg(long)]
        rho: Option<f64>,
        /// Probe directions per seed (defaults to eval.flatness_trials).
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Generate a synthetic task bundle file (plus optional CSV of samples).
    GenTask {
        #[command(flatten)]
        config: ConfigArgs,
        /// Bundle output path.
        #[arg(long)]
        out: PathBuf,
        /// Also export the labeled splits as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Re-emit saved run records as json, csv, or a markdown table.
    Emit {
        /// Run-record JSON files (single record or list per file).
        #[arg(long, required = true)]
        input: Vec<PathBuf>,
        /// json | csv | markdown-table
        #[arg(long)]
        format: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn emit_formats(names: &[String]) -> Result<Vec<EmitFormat>> {
    names
        .iter()
        .map(|n| n.parse::<EmitFormat>().map_err(Into::into))
        .collect()
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run { config, out, emit } => {
            let cfg = config.resolve()?;
            let record = run_experiment(&cfg, &out)?;
            for format in emit_formats(&emit)? {
                let ext = match format {
                    EmitFormat::Json => "json",
                    EmitFormat::Csv => "csv",
                    EmitFormat::MarkdownTable => "md",
                };
                let path = out.join(format!("results-{}.{ext}", record.config_hash));
                emit_results(std::slice::from_ref(&record), format, &path)?;
                println!("wrote {}", path.display());
            }
            match &record.median {
                Some(m) => {
                    let m = m.rounded();
                    println!(
                        "median over {} seed(s): base {:.2} novel {:.2} hm {:.2}",
                        record.per_seed.len(),
                        m.base_acc,
                        m.novel_acc,
                        m.hm
                    );
                }
                None => println!("all seeds failed"),
            }
            if record.failed {
                bail!(
                    "one or more seeds failed; see run-{}.json",
                    record.config_hash
                );
            }
            println!("record: run-{}.json", record.config_hash);
            Ok(())
        }
        Command::Ablate { config, out } => {
            let cfg = config.resolve()?;
            let records = run_ablation_grid(&cfg, &out)?;
            let table = out.join("ablation.md");
            emit_results(&records, EmitFormat::MarkdownTable, &table)?;
            emit_results(&records, EmitFormat::Csv, &out.join("ablation.csv"))?;
            emit_results(&records, EmitFormat::Json, &out.join("ablation.json"))?;
            println!("{}", std::fs::read_to_string(&table)?);
            println!("wrote {}", table.display());
            if records.iter().any(|r| r.failed) {
                bail!("one or more ablation rows failed; see ablation.json");
            }
            Ok(())
        }
        Command::ProbeFlatness {
            config,
            out,
            rho,
            trials,
        } => {
            let mut cfg = config.resolve()?;
            cfg.eval.probe_flatness = true;
            if let Some(rho) = rho {
                cfg.eval.flatness_rho = rho;
            }
            if let Some(trials) = trials {
                cfg.eval.flatness_trials = trials;
            }
            let record = run_experiment(&cfg, &out)?;
            for s in &record.per_seed {
                match s.metrics.as_ref().and_then(|m| m.flatness) {
                    Some(f) => println!("seed {}: flatness {f:.6e}", s.seed),
                    None => println!("seed {}: failed", s.seed),
                }
            }
            match record.median.as_ref().and_then(|m| m.flatness) {
                Some(f) => println!("median flatness: {f:.6e}"),
                None => bail!("no flatness measurements"),
            }
            println!("record: run-{}.json", record.config_hash);
            Ok(())
        }
        Command::GenTask { config, out, csv } => {
            let cfg = config.resolve()?;
            let bundle = generate_task(&cfg.task)?;
            save_bundle(&out, &bundle)?;
            println!(
                "wrote {} ({} train / {} base-test / {} novel-test samples)",
                out.display(),
                bundle.train.labels.len(),
                bundle.test_base.labels.len(),
                bundle.test_novel.labels.len()
            );
            if let Some(csv_path) = csv {
                export_samples_csv(&bundle, &csv_path)?;
                println!("wrote {}", csv_path.display());
            }
            Ok(())
        }
        Command::Emit { input, format, out } => {
            let format = format.parse::<EmitFormat>()?;
            let mut records = Vec::new();
            for path in &input {
                records.extend(
                    load_records(path).with_context(|| format!("reading {}", path.display()))?,
                );
            }
            emit_results(&records, format, &out)?;
            println!("wrote {} ({} records)", out.display(), records.len());
            Ok(())
        }
    }
}
