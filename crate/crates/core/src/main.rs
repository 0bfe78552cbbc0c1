use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use csrda::cycler::{
    parse_values, run_baseline, run_csrda, run_sweep, sweep_key, BaselineMode, ExperimentConfig,
    RunOutcome,
};
use csrda::metrics::{evaluate_set, report_json};
use csrda::synthgen::GenPlan;

#[derive(Parser)]
#[command(
    name = "csrda",
    version,
    about = "Cycling syn-to-real adaptation for camouflaged object segmentation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Full cycling adaptation.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Extra `key=value` overrides with dotted keys, e.g. `cls.tau=0.3`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Source-only or mean-teacher baseline.
    Baseline {
        #[arg(long, value_parser = ["source_only", "mean_teacher"])]
        mode: String,
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Writes toy datasets and `gen_manifest.json`.
    Gen {
        /// Generation plan; an optional `output_dir` key sets the destination.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides `output_dir` (default `data`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Scores a directory of predictions against ground-truth masks.
    Eval {
        #[arg(long)]
        pred_dir: PathBuf,
        #[arg(long)]
        gt_dir: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// One full run per value of a parameter; writes a CSV of final metrics.
    Sweep {
        /// `alpha`, `beta`, `delta`, `mu`, `tau`, `lambda`, `lr`, `epochs`,
        /// `cycles` or any dotted config key.
        #[arg(long)]
        param: String,
        /// `start:stop:step` (inclusive) or a comma list.
        #[arg(long)]
        values: String,
        #[arg(long)]
        config: PathBuf,
    },
}

fn load_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_yaml_file(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    for o in overrides {
        let Some((key, value)) = o.split_once('=') else {
            bail!("override `{o}` is not KEY=VALUE");
        };
        let value: serde_yaml::Value =
            serde_yaml::from_str(value).with_context(|| format!("value of `{key}`"))?;
        cfg = cfg.with_override(key, value)?;
    }
    Ok(cfg)
}

fn print_outcome(outcome: &RunOutcome, cfg: &ExperimentConfig) {
    for c in &outcome.cycles {
        if let Some(sel) = &c.selection {
            println!(
                "cycle {}: selected {} of {} loss-selected target samples, |labeled| = {}",
                c.cycle,
                sel.selected_ids.len(),
                sel.loss_selected_ids.len(),
                c.labeled_size
            );
        }
    }
    println!("{}", outcome.final_metrics);
    println!("artifacts in {}", cfg.paths.output_dir.display());
}

fn gen(config: Option<&Path>, out: Option<PathBuf>) -> Result<()> {
    let mut value = match config {
        Some(p) => {
            let text =
                std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_yaml::from_str::<serde_yaml::Value>(&text)?
        }
        None => serde_yaml::Value::Mapping(Default::default()),
    };
    let from_file = value
        .as_mapping_mut()
        .and_then(|m| m.remove("output_dir"))
        .map(serde_yaml::from_value::<PathBuf>)
        .transpose()?;
    let root = out.or(from_file).unwrap_or_else(|| PathBuf::from("data"));
    let plan: GenPlan = if value.is_null() {
        GenPlan::default()
    } else {
        serde_yaml::from_value(value)?
    };
    let sets = plan.write(&root)?;
    for ds in &sets {
        println!("{:>16}: {} samples", ds.name, ds.len());
    }
    println!("wrote {}", root.join("gen_manifest.json").display());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Run { config, overrides } => {
            let cfg = load_config(&config, &overrides)?;
            let outcome = run_csrda(&cfg)?;
            print_outcome(&outcome, &cfg);
        }
        Command::Baseline {
            mode,
            config,
            overrides,
        } => {
            let cfg = load_config(&config, &overrides)?;
            let outcome = run_baseline(&cfg, mode.parse::<BaselineMode>()?)?;
            print_outcome(&outcome, &cfg);
        }
        Command::Gen { config, out } => gen(config.as_deref(), out)?,
        Command::Eval {
            pred_dir,
            gt_dir,
            out,
        } => {
            let report = evaluate_set(&pred_dir, &gt_dir)?;
            println!("{report}");
            if let Some(out) = out {
                let json = report_json(&report, &pred_dir, &gt_dir);
                std::fs::write(&out, serde_json::to_vec_pretty(&json)?)
                    .with_context(|| format!("writing {}", out.display()))?;
            }
        }
        Command::Sweep {
            param,
            values,
            config,
        } => {
            let cfg = load_config(&config, &[])?;
            let values = parse_values(&values)?;
            let rows = run_sweep(&cfg, &param, &values)?;
            println!("{:>12} {:>9} {:>9}", sweep_key(&param), "S_alpha", "MAE");
            for r in rows {
                println!(
                    "{:>12} {:>9.4} {:>9.4}",
                    r.value, r.metrics.s_alpha, r.metrics.mae
                );
            }
            println!(
                "wrote {}",
                cfg.paths
                    .output_dir
                    .join(format!("sweep_{param}.csv"))
                    .display()
            );
        }
    }
    Ok(())
}
