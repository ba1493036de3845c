use std::path::Path;

use funlora::funlora::LayerStrategy;
use funlora::linalg::DEFAULT_RANK_TOL;
use funlora::pipeline::{MetricsRecord, SCHEMA_VERSION};
use funlora::runner::{
    cmd_analyze_rank, cmd_continual, cmd_importance, cmd_nfe_sweep, cmd_report, parse_config, RunConfig, RunManifest,
    RunnerError,
};

const TINY: &str = r#"
[stream]
tasks = 3
train_per_class = 40
test_per_class = 12

[model]
hidden = 12
hidden_layers = 2

[adapter]
family = "cos"
p = 3

[task1]
epochs = 4
batch_size = 32
lr = 0.005
warmup_steps = 0
ema_start_epoch = 2

[incremental]
epochs = 3
batch_size = 32
ema_start_epoch = 1

[sampler]
method = "euler"
steps = 8

[classifier]
epochs = 3
"#;

fn tiny(extra: &str) -> RunConfig {
    parse_config(&format!("{TINY}\n{extra}")).unwrap()
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn manifest(dir: &Path) -> RunManifest {
    serde_json::from_str(&read(&dir.join("manifest.json"))).unwrap()
}

#[test]
fn continual_writes_listed_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let rc = tiny("");
    let res = cmd_continual(&rc, tmp.path(), false).unwrap();
    let m: MetricsRecord = serde_json::from_str(&read(&tmp.path().join("metrics.json"))).unwrap();
    assert_eq!(m.schema_version, SCHEMA_VERSION);
    assert_eq!(m.tasks.len(), 3);
    assert_eq!(m, res.records[0]);
    let csv = read(&tmp.path().join("accuracy.csv"));
    assert!(csv.starts_with("task_index,A_t,AA_t\n"));
    assert_eq!(csv.lines().count(), 4);

    let man = manifest(tmp.path());
    assert_eq!(man, res.manifest);
    assert_eq!(man.config_hash.as_deref(), Some(rc.hash().as_str()));
    for f in &man.outputs {
        assert!(tmp.path().join(f).is_file(), "{f}");
    }
    for t in 1..=3 {
        assert!(man.outputs.contains(&format!("checkpoints/task-{t}.json")));
    }
    assert!(man.wall_times.iter().any(|w| w.seconds > 0.0));
}

#[test]
fn several_seeds_get_their_own_directories() {
    let tmp = tempfile::tempdir().unwrap();
    let res = cmd_continual(&tiny("[run]\nseed = 7\nseeds = 3"), tmp.path(), true).unwrap();
    for s in [7, 8, 9] {
        assert!(tmp.path().join(format!("seed-{s}/metrics.json")).is_file());
    }
    let summary = res.summary.unwrap();
    assert_eq!(summary.seeds, vec![7, 8, 9]);
    let las: Vec<f64> = res.records.iter().map(|r| r.la).collect();
    assert!((summary.la.mean - las.iter().sum::<f64>() / 3.0).abs() < 1e-12);
    assert!(tmp.path().join("summary.json").is_file());
}

#[test]
fn canonical_reruns_are_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let rc = tiny("");
    cmd_continual(&rc, a.path(), true).unwrap();
    cmd_continual(&rc, b.path(), true).unwrap();
    for f in manifest(a.path()).outputs {
        assert_eq!(read(&a.path().join(&f)), read(&b.path().join(&f)), "{f}");
    }
}

#[test]
fn unwritable_output_is_an_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let blocker = tmp.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let err = cmd_continual(&tiny(""), &blocker.join("out"), true).unwrap_err();
    assert!(matches!(err, RunnerError::Io { .. }), "{err}");
}

#[test]
fn config_errors_name_the_key() {
    let err = parse_config("[adapter]\nfamliy = \"cos\"\n").unwrap_err().to_string();
    assert!(err.contains("adapter") && err.contains("famliy"), "{err}");
    let err = parse_config("[task1]\nepochs = \"many\"\n").unwrap_err().to_string();
    assert!(err.contains("task1.epochs"), "{err}");
    assert!(parse_config("[nonsense]\nx = 1\n").is_err());
    assert!(parse_config("[adapter]\nfamily = \"tan\"\n").is_err());
}

#[test]
fn config_hash_tracks_values_not_layout() {
    let a = parse_config("[adapter]\nfamily = \"cos\"\np = 4\n\n[run]\nseed = 1\n").unwrap();
    let b = parse_config("[run]\nseed = 1\n\n[adapter]\np = 4\nfamily = \"cos\"\n").unwrap();
    let c = parse_config("[run]\nseed = 1\n\n[adapter]\np = 5\nfamily = \"cos\"\n").unwrap();
    // Spelling out a default does not change the meaning.
    let d = parse_config("[adapter]\nfamily = \"cos\"\np = 4\ncombine = \"mul\"\n\n[run]\nseed = 1\n").unwrap();
    assert_eq!(a.hash(), b.hash());
    assert_eq!(a.hash(), d.hash());
    assert_ne!(a.hash(), c.hash());
}

#[test]
fn analysis_commands_read_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let run_dir = tmp.path().join("run");
    let rc = tiny("[run]\nsnapshot_every = 1\n");
    cmd_continual(&rc, &run_dir, true).unwrap();
    let last = run_dir.join("checkpoints/task-3.json");

    let ranks =
        cmd_analyze_rank(&last, DEFAULT_RANK_TOL, Some(&run_dir.join("snapshots")), &tmp.path().join("rank")).unwrap();
    // 4 adapted classes over the 2 hidden layers
    assert_eq!(ranks.entries.len(), 8);
    let series = read(&tmp.path().join("rank/rank_series.csv"));
    assert!(series.starts_with("task_index,epoch,max_rank,mean_rank\n"));
    assert_eq!(series.lines().count(), 1 + 2 * 3);

    let first = run_dir.join("checkpoints/task-1.json");
    cmd_analyze_rank(&first, DEFAULT_RANK_TOL, None, &tmp.path().join("rank1")).unwrap();
    assert_eq!(read(&tmp.path().join("rank1/ranks.csv")).lines().count(), 1);

    let (report, selected) = cmd_importance(&last, LayerStrategy::TopK { k: 1 }, &tmp.path().join("imp")).unwrap();
    assert_eq!(report.layers.len(), 2);
    assert_eq!(selected.len(), 1);
    assert_eq!(manifest(&tmp.path().join("imp")).notes["selected_layers"], serde_json::json!(selected));

    let rows = cmd_nfe_sweep(&rc, &last, "rk4", &[2, 4], &[1, 2], rc.seed, &tmp.path().join("sweep"), true).unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!(read(&tmp.path().join("sweep/nfe_sweep.csv")).lines().count(), 5);
    assert!(rows.iter().all(|r| r.realized_nfe > 0 && r.sample_seconds == 0.0));
    assert!(cmd_nfe_sweep(&rc, &last, "dopri5", &[4], &[1], rc.seed, &tmp.path().join("bad"), true).is_err());

    let report = cmd_report(&run_dir, &tmp.path().join("report")).unwrap();
    assert_eq!(report.len(), 1);
    assert!(tmp.path().join("report/report.csv").is_file());
}

#[test]
fn additive_stores_have_no_importance() {
    let tmp = tempfile::tempdir().unwrap();
    let text = TINY.replace("family = \"cos\"", "family = \"rshift\"\ncombine = \"add\"");
    let rc = parse_config(&text).unwrap();
    cmd_continual(&rc, tmp.path(), true).unwrap();
    assert!(cmd_importance(
        &tmp.path().join("checkpoints/task-2.json"),
        LayerStrategy::TopK { k: 1 },
        &tmp.path().join("imp")
    )
    .is_err());
}
