use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use funlora::funlora::LayerStrategy;
use funlora::linalg::DEFAULT_RANK_TOL;
use funlora::runner::{
    cmd_analyze_rank, cmd_bounds, cmd_continual, cmd_importance, cmd_nfe_sweep, cmd_report, default_out_root,
    parse_config, RunConfig,
};

#[derive(Parser)]
#[command(name = "funlora", version, about = "Class-incremental flow matching with functional rank-1 adapters")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration (defaults apply when omitted).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding `run.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Number of consecutive seeds, overriding `run.seeds`.
    #[arg(long, global = true)]
    seeds: Option<usize>,
    /// Output directory [default: $FUNLORA_OUT/<command> or funlora-out/<command>].
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Zero all wall-time fields so reruns are byte-identical.
    #[arg(long, global = true)]
    canonical_json: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run the incremental pipeline and write metrics and checkpoints.
    Continual {
        /// Also run the reference bounds.
        #[arg(long)]
        bounds: bool,
    },
    /// Run only the reference bounds.
    Bounds,
    /// Numerical ranks of the adapter updates in a checkpoint.
    AnalyzeRank {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = DEFAULT_RANK_TOL)]
        rel_tol: f64,
        /// Directory of `task-<t>-epoch-<e>.json` snapshots for a rank series.
        #[arg(long)]
        per_epoch: Option<PathBuf>,
    },
    /// Per-layer importance of multiplicative adapters and a layer selection.
    Importance {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, conflicts_with_all = ["range", "threshold"])]
        top_k: Option<usize>,
        /// Inclusive layer positions, as FROM:TO.
        #[arg(long, conflicts_with = "threshold")]
        range: Option<String>,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Replay the classifier stages of a finished run over NFE budgets and
    /// resample factors.
    NfeSweep {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "rk4")]
        method: String,
        #[arg(long, value_delimiter = ',', required = true)]
        nfe: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "1")]
        resample: Vec<usize>,
    },
    /// Collect metrics and bounds files under a directory into one table.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut rc = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            parse_config(&text).with_context(|| format!("in {}", path.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        rc.seed = s;
    }
    if let Some(k) = common.seeds {
        rc.seeds = k;
    }
    rc.validate()?;
    Ok(rc)
}

fn out_dir(common: &Common, command: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| default_out_root(command))
}

fn strategy(top_k: Option<usize>, range: Option<&str>, threshold: Option<f64>) -> Result<LayerStrategy> {
    Ok(match (top_k, range, threshold) {
        (Some(k), None, None) => LayerStrategy::TopK { k },
        (None, Some(r), None) => {
            let (a, b) = r.split_once(':').context("range must look like FROM:TO")?;
            LayerStrategy::IndexRange { from: a.trim().parse()?, to: b.trim().parse()? }
        }
        (None, None, Some(tau)) => LayerStrategy::Threshold { tau },
        _ => bail!("give exactly one of --top-k, --range or --threshold"),
    })
}

fn done(out: &Path) {
    println!("wrote {}", out.display());
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let c = &cli.common;
    match &cli.command {
        Command::Continual { bounds } => {
            let mut rc = load_config(c)?;
            rc.bounds |= *bounds;
            let out = out_dir(c, "continual");
            let res = cmd_continual(&rc, &out, c.canonical_json)?;
            for m in &res.records {
                println!("seed {}: {} AA {:.2} AIA {:.2} LA {:.2} PPC {}", m.seed, m.method, m.aa, m.aia, m.la, m.ppc);
            }
            for (seed, b) in rc.seed_list().iter().zip(&res.bounds) {
                println!(
                    "seed {seed}: bounds LA multitask classifier {:.2}, multitask generative {:.2}, vanilla conditioning {:.2}",
                    b.multitask_classifier.la, b.multitask_generative.la, b.vanilla_conditioning.la
                );
            }
            if let Some(s) = &res.summary {
                println!("LA {:.2} ± {:.2} over {} seeds", s.la.mean, s.la.std, s.seeds.len());
            }
            done(&out);
        }
        Command::Bounds => {
            let rc = load_config(c)?;
            let out = out_dir(c, "bounds");
            for (seed, b) in rc.seed_list().iter().zip(cmd_bounds(&rc, &out, c.canonical_json)?) {
                println!(
                    "seed {seed}: multitask classifier {:.2}, multitask generative {:.2}, vanilla conditioning {:.2}",
                    b.multitask_classifier.la, b.multitask_generative.la, b.vanilla_conditioning.la
                );
            }
            done(&out);
        }
        Command::AnalyzeRank { checkpoint, rel_tol, per_epoch } => {
            let out = out_dir(c, "analyze-rank");
            let r = cmd_analyze_rank(checkpoint, *rel_tol, per_epoch.as_deref(), &out)?;
            println!("{} updates, max rank {}, mean of per-class max {:.2}", r.entries.len(), r.overall_max, r.max);
            done(&out);
        }
        Command::Importance { checkpoint, top_k, range, threshold } => {
            let out = out_dir(c, "importance");
            let (report, selected) = cmd_importance(checkpoint, strategy(*top_k, range.as_deref(), *threshold)?, &out)?;
            for l in &report.layers {
                println!("layer {}: {:.4} (std {:.4})", l.layer_index, l.mean, l.std);
            }
            println!("selected layers {selected:?}");
            done(&out);
        }
        Command::NfeSweep { checkpoint, method, nfe, resample } => {
            let rc = load_config(c)?;
            let out = out_dir(c, "nfe-sweep");
            for r in cmd_nfe_sweep(&rc, checkpoint, method, nfe, resample, rc.seed, &out, c.canonical_json)? {
                println!(
                    "{} nfe {} x{}: LA {:.2} ({:.2}s sampling)",
                    r.method, r.nfe, r.resample, r.la, r.sample_seconds
                );
            }
            done(&out);
        }
        Command::Report { dir } => {
            let out = out_dir(c, "report");
            let rows = cmd_report(dir, &out)?;
            for r in &rows {
                println!("{:<40} {:<32} seed {:>3}  LA {:.2}  AIA {:.2}", r.source, r.method, r.seed, r.la, r.aia);
            }
            done(&out);
        }
    }
    Ok(())
}
