use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::output::{io_err, OutDir, RunManifest};
use super::{Result, RunnerError};
use crate::flow::{nfe_budget_to_steps, Method, SolverConfig};
use crate::funlora::{
    importance_csv, importance_report, rank_csv, rank_report, select_layers, ImportanceReport, LayerStrategy,
    RankReport,
};
use crate::model::Checkpoint;
use crate::pipeline::{
    aa, bounds_runs, evaluate_stage, make_task_stream, run_algorithm1_observed, Bounds, MetricsRecord, Observer,
    PipelineError, SCHEMA_VERSION,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation (0 for a single value).
    pub std: f64,
}

impl Stat {
    fn of(v: &[f64]) -> Self {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let std =
            if v.len() > 1 { (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
        Self { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub method: String,
    pub seeds: Vec<u64>,
    pub la: Stat,
    pub aa: Stat,
    pub aia: Stat,
    pub multitask_classifier_la: Option<Stat>,
    pub multitask_generative_la: Option<Stat>,
    pub vanilla_conditioning_la: Option<Stat>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct BoundsFile {
    seed: u64,
    #[serde(flatten)]
    bounds: Bounds,
}

#[derive(Clone, Debug)]
pub struct ContinualResult {
    pub records: Vec<MetricsRecord>,
    pub bounds: Vec<Bounds>,
    pub summary: Option<Summary>,
    pub manifest: RunManifest,
}

fn seed_prefix(rc: &RunConfig, seed: u64) -> String {
    if rc.seeds == 1 {
        String::new()
    } else {
        format!("seed-{seed}/")
    }
}

fn accuracy_csv(m: &MetricsRecord) -> String {
    let mut s = String::from("task_index,A_t,AA_t\n");
    for t in &m.tasks {
        let _ = writeln!(s, "{},{},{}", t.task_index, t.a_t, t.aa_t);
    }
    s
}

fn bound_stat(bounds: &[Bounds], pick: impl Fn(&Bounds) -> f64) -> Option<Stat> {
    (!bounds.is_empty()).then(|| Stat::of(&bounds.iter().map(pick).collect::<Vec<_>>()))
}

fn summarize(method: String, seeds: Vec<u64>, records: &[MetricsRecord], bounds: &[Bounds]) -> Summary {
    let col = |f: fn(&MetricsRecord) -> f64| Stat::of(&records.iter().map(f).collect::<Vec<_>>());
    Summary {
        method,
        seeds,
        la: col(|m| m.la),
        aa: col(|m| m.aa),
        aia: col(|m| m.aia),
        multitask_classifier_la: bound_stat(bounds, |b| b.multitask_classifier.la),
        multitask_generative_la: bound_stat(bounds, |b| b.multitask_generative.la),
        vanilla_conditioning_la: bound_stat(bounds, |b| b.vanilla_conditioning.la),
    }
}

/// Runs the incremental pipeline for every configured seed (plus the
/// reference runs when `rc.bounds` is set) and writes metrics, accuracy
/// trajectories, per-task checkpoints and a manifest into `out`.
pub fn cmd_continual(rc: &RunConfig, out: &Path, canonical: bool) -> Result<ContinualResult> {
    rc.validate()?;
    let mut dir = OutDir::create(out, canonical)?;
    let mut records = Vec::new();
    let mut all_bounds = Vec::new();
    for seed in rc.seed_list() {
        let prefix = seed_prefix(rc, seed);
        let stream = make_task_stream(&rc.stream, seed)?;
        let clock = Instant::now();
        let output = {
            let mut snap =
                |t: usize, epoch: usize, net: &crate::model::VectorFieldNet| -> crate::pipeline::Result<()> {
                    let ck = Checkpoint::new(t, stream.tasks[t - 1].labels.clone(), net.clone());
                    let text = ck.to_json()?;
                    dir.write(&format!("{prefix}snapshots/task-{t}-epoch-{epoch}.json"), &text)
                        .map(|_| ())
                        .map_err(|e| PipelineError::Invalid(e.to_string()))
                };
            let observer = (rc.snapshot_every > 0).then_some((rc.snapshot_every, &mut snap as Observer<'_>));
            run_algorithm1_observed(&stream, &rc.experiment, seed, observer)?
        };
        dir.time(format!("seed {seed}: continual"), clock.elapsed().as_secs_f64());
        let metrics = if canonical { output.metrics.without_timings() } else { output.metrics.clone() };
        dir.write_json(&format!("{prefix}metrics.json"), &metrics)?;
        dir.write(&format!("{prefix}accuracy.csv"), &accuracy_csv(&metrics))?;
        for ck in &output.checkpoints {
            dir.write(&format!("{prefix}checkpoints/task-{}.json", ck.task_index), &ck.to_json()?)?;
        }
        records.push(metrics);
        if rc.bounds {
            let clock = Instant::now();
            let bounds = bounds_runs(&stream, &rc.experiment, seed)?;
            dir.time(format!("seed {seed}: bounds"), clock.elapsed().as_secs_f64());
            dir.write_json(&format!("{prefix}bounds.json"), &BoundsFile { seed, bounds: bounds.clone() })?;
            all_bounds.push(bounds);
        }
    }
    let summary =
        (rc.seeds > 1).then(|| summarize(rc.experiment.method_label(), rc.seed_list(), &records, &all_bounds));
    if let Some(s) = &summary {
        dir.write_json("summary.json", s)?;
    }
    let manifest = dir.finish("continual", Some(rc.hash()), rc.seed_list())?;
    Ok(ContinualResult { records, bounds: all_bounds, summary, manifest })
}

/// Reference runs only.
pub fn cmd_bounds(rc: &RunConfig, out: &Path, canonical: bool) -> Result<Vec<Bounds>> {
    rc.validate()?;
    let mut dir = OutDir::create(out, canonical)?;
    let mut all = Vec::new();
    for seed in rc.seed_list() {
        let stream = make_task_stream(&rc.stream, seed)?;
        let clock = Instant::now();
        let bounds = bounds_runs(&stream, &rc.experiment, seed)?;
        dir.time(format!("seed {seed}: bounds"), clock.elapsed().as_secs_f64());
        dir.write_json(&format!("{}bounds.json", seed_prefix(rc, seed)), &BoundsFile { seed, bounds: bounds.clone() })?;
        all.push(bounds);
    }
    if rc.seeds > 1 {
        let pick = |f: fn(&Bounds) -> f64| bound_stat(&all, f);
        let s = serde_json::json!({
            "seeds": rc.seed_list(),
            "multitask_classifier_la": pick(|b| b.multitask_classifier.la),
            "multitask_generative_la": pick(|b| b.multitask_generative.la),
            "vanilla_conditioning_la": pick(|b| b.vanilla_conditioning.la),
        });
        dir.write_json("summary.json", &s)?;
    }
    dir.finish("bounds", Some(rc.hash()), rc.seed_list())?;
    Ok(all)
}

fn empty_rank_report() -> RankReport {
    RankReport { entries: Vec::new(), per_class: Vec::new(), max: 0.0, mean: 0.0, overall_max: 0 }
}

fn checkpoint_ranks(ck: &Checkpoint, rel_tol: f64) -> Result<RankReport> {
    Ok(match ck.net.adapters() {
        Some(store) => rank_report(store, rel_tol)?,
        None => empty_rank_report(),
    })
}

/// `(task, epoch)` from a `task-<t>-epoch-<e>.json` file name.
fn snapshot_key(path: &Path) -> Option<(usize, usize)> {
    let stem = path.file_stem()?.to_str()?;
    let rest = stem.strip_prefix("task-")?;
    let (t, e) = rest.split_once("-epoch-")?;
    Some((t.parse().ok()?, e.parse().ok()?))
}

/// Ranks of every adapter update in a checkpoint, and optionally the
/// max/mean rank over a directory of training snapshots.
pub fn cmd_analyze_rank(checkpoint: &Path, rel_tol: f64, per_epoch: Option<&Path>, out: &Path) -> Result<RankReport> {
    let ck = Checkpoint::load(checkpoint)?;
    let report = checkpoint_ranks(&ck, rel_tol)?;
    let mut dir = OutDir::create(out, false)?;
    dir.write("ranks.csv", &rank_csv(&report.entries))?;
    let mut classes = String::from("class_label,max_rank,mean_rank\n");
    for c in &report.per_class {
        let _ = writeln!(classes, "{},{},{}", c.class_label, c.max, c.mean);
    }
    dir.write("rank_classes.csv", &classes)?;
    if let Some(snap_dir) = per_epoch {
        let mut snaps: Vec<((usize, usize), PathBuf)> = std::fs::read_dir(snap_dir)
            .map_err(|e| io_err(snap_dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter_map(|p| snapshot_key(&p).map(|k| (k, p)))
            .collect();
        snaps.sort();
        let mut series = String::from("task_index,epoch,max_rank,mean_rank\n");
        for ((t, epoch), path) in snaps {
            let ck = Checkpoint::load(&path)?;
            let r = checkpoint_ranks(&ck, rel_tol)?;
            let ranks: Vec<usize> =
                r.entries.iter().filter(|e| ck.task_classes.contains(&e.class_label)).map(|e| e.rank).collect();
            let max = ranks.iter().copied().max().unwrap_or(0);
            let mean = if ranks.is_empty() { 0.0 } else { ranks.iter().sum::<usize>() as f64 / ranks.len() as f64 };
            let _ = writeln!(series, "{t},{epoch},{max},{mean}");
        }
        dir.write("rank_series.csv", &series)?;
    }
    dir.finish("analyze-rank", None, Vec::new())?;
    Ok(report)
}

/// Per-layer importance and the layers picked by `strategy`, as layer
/// indices of the network.
pub fn cmd_importance(
    checkpoint: &Path,
    strategy: LayerStrategy,
    out: &Path,
) -> Result<(ImportanceReport, Vec<usize>)> {
    let ck = Checkpoint::load(checkpoint)?;
    let store = ck.net.adapters().ok_or_else(|| RunnerError::Invalid("checkpoint holds no adapters".into()))?;
    let report = importance_report(store)?;
    let positions = select_layers(&report.averages(), strategy)?;
    let selected: Vec<usize> = positions.iter().map(|&i| report.layers[i].layer_index).collect();
    let mut dir = OutDir::create(out, false)?;
    dir.write("importance.csv", &importance_csv(&report))?;
    let mut layers = String::from("layer_index,mean,std\n");
    for l in &report.layers {
        let _ = writeln!(layers, "{},{},{}", l.layer_index, l.mean, l.std);
    }
    dir.write("importance_layers.csv", &layers)?;
    dir.write_json("selected_layers.json", &selected)?;
    dir.notes.insert("strategy".into(), serde_json::to_value(strategy).expect("strategy serializes"));
    dir.notes.insert("selected_layers".into(), serde_json::to_value(&selected).expect("indices serialize"));
    dir.finish("importance", None, Vec::new())?;
    Ok((report, selected))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: String,
    pub nfe: usize,
    pub resample: usize,
    pub la: f64,
    pub realized_nfe: usize,
    pub sample_seconds: f64,
}

/// Replays every classifier stage of a finished run from its final
/// checkpoint, for each (NFE budget, resample factor) pair.
#[allow(clippy::too_many_arguments)]
pub fn cmd_nfe_sweep(
    rc: &RunConfig,
    checkpoint: &Path,
    method: &str,
    nfes: &[usize],
    factors: &[usize],
    seed: u64,
    out: &Path,
    canonical: bool,
) -> Result<Vec<SweepRow>> {
    let ck = Checkpoint::load(checkpoint)?;
    let stream = make_task_stream(&rc.stream, seed)?;
    if ck.task_index != stream.len() {
        return Err(RunnerError::Invalid(format!(
            "checkpoint is from task {}; the sweep needs the final one ({})",
            ck.task_index,
            stream.len()
        )));
    }
    let make = |steps: usize| match method {
        "euler" => Ok(Method::Euler { steps }),
        "rk4" => Ok(Method::Rk4 { steps }),
        other => Err(RunnerError::Invalid(format!("nfe sweeps take a fixed-step method (euler or rk4), got {other}"))),
    };
    let mut dir = OutDir::create(out, canonical)?;
    let mut rows = Vec::new();
    for &nfe in nfes {
        let steps = nfe_budget_to_steps(&make(1)?, nfe).map_err(|e| RunnerError::Invalid(e.to_string()))?;
        for &resample in factors {
            let mut cfg = rc.experiment.clone();
            cfg.solver = SolverConfig { method: make(steps)? };
            cfg.resample = resample;
            cfg.validate()?;
            let mut scores = Vec::new();
            let (mut realized, mut seconds) = (0, 0.0);
            for t in 1..=stream.len() {
                let s = evaluate_stage(&ck.net, &stream, t, &cfg, seed)?;
                scores.push(s.a_t);
                realized += s.nfe;
                seconds += s.sample_seconds;
            }
            rows.push(SweepRow {
                method: method.into(),
                nfe,
                resample,
                la: aa(&scores)?,
                realized_nfe: realized,
                sample_seconds: if canonical { 0.0 } else { seconds },
            });
        }
    }
    let mut csv = String::from("method,nfe,resample,la,realized_nfe,sample_seconds\n");
    for r in &rows {
        let _ = writeln!(csv, "{},{},{},{},{},{}", r.method, r.nfe, r.resample, r.la, r.realized_nfe, r.sample_seconds);
    }
    dir.write("nfe_sweep.csv", &csv)?;
    dir.time("sweep", rows.iter().map(|r| r.sample_seconds).sum());
    dir.finish("nfe-sweep", Some(rc.hash()), vec![seed])?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub source: String,
    pub method: String,
    pub seed: u64,
    pub aa: f64,
    pub aia: f64,
    pub la: f64,
}

fn collect_json(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> =
        std::fs::read_dir(dir).map_err(|e| io_err(dir, e))?.filter_map(|e| e.ok().map(|e| e.path())).collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_json(&p, out)?;
        } else if matches!(p.file_name().and_then(|n| n.to_str()), Some("metrics.json" | "bounds.json")) {
            out.push(p);
        }
    }
    Ok(())
}

/// Gathers every `metrics.json` and `bounds.json` under `input` into one
/// table plus a per-method summary.
pub fn cmd_report(input: &Path, out: &Path) -> Result<Vec<ReportRow>> {
    let mut files = Vec::new();
    collect_json(input, &mut files)?;
    let mut rows = Vec::new();
    for path in files {
        let text = std::fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        let source = path.strip_prefix(input).unwrap_or(&path).display().to_string();
        let parse_err = |e: serde_json::Error| RunnerError::Invalid(format!("{}: {e}", path.display()));
        if path.ends_with("metrics.json") {
            let m: MetricsRecord = serde_json::from_str(&text).map_err(parse_err)?;
            if m.schema_version != SCHEMA_VERSION {
                return Err(RunnerError::Invalid(format!(
                    "{}: schema {} is not {SCHEMA_VERSION}",
                    path.display(),
                    m.schema_version
                )));
            }
            rows.push(ReportRow { source, method: m.method, seed: m.seed, aa: m.aa, aia: m.aia, la: m.la });
        } else {
            let b: BoundsFile = serde_json::from_str(&text).map_err(parse_err)?;
            for (name, track) in [
                ("multitask_classifier", &b.bounds.multitask_classifier),
                ("multitask_generative", &b.bounds.multitask_generative),
                ("vanilla_conditioning", &b.bounds.vanilla_conditioning),
            ] {
                rows.push(ReportRow {
                    source: source.clone(),
                    method: name.into(),
                    seed: b.seed,
                    aa: track.aa,
                    aia: track.aia,
                    la: track.la,
                });
            }
        }
    }
    let mut dir = OutDir::create(out, false)?;
    let mut csv = String::from("source,method,seed,aa,aia,la\n");
    for r in &rows {
        let _ = writeln!(csv, "{},{},{},{},{},{}", r.source, r.method, r.seed, r.aa, r.aia, r.la);
    }
    dir.write("report.csv", &csv)?;
    let mut methods: Vec<&str> = rows.iter().map(|r| r.method.as_str()).collect();
    methods.sort_unstable();
    methods.dedup();
    let mut summary = String::from("method,runs,la_mean,la_std,aia_mean\n");
    for m in methods {
        let la: Vec<f64> = rows.iter().filter(|r| r.method == m).map(|r| r.la).collect();
        let aia: Vec<f64> = rows.iter().filter(|r| r.method == m).map(|r| r.aia).collect();
        let s = Stat::of(&la);
        let _ = writeln!(summary, "{m},{},{},{},{}", la.len(), s.mean, s.std, Stat::of(&aia).mean);
    }
    dir.write("report_summary.csv", &summary)?;
    dir.finish("report", None, Vec::new())?;
    Ok(rows)
}
