use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use modnorm::data::Dataset;
use modnorm::experiment::{
    cmd_gap, cmd_generate, cmd_report, cmd_train, gap_dir, load_dataset, read_summary, run_dir, summary_path,
    ExperimentConfig, NormSetup, Overrides,
};
use modnorm::model::{evaluate_retrieval, Model};
use tempfile::TempDir;

const TINY: &str = "\
[dataset]
num_identities = 8
images_per_identity_per_modality = 4
seed = 3

[model]
widths = 4,8
embedding_dim = 8
configurations = baseline,shared-both

[schedule]
epochs = 1
warmup_epochs = 0
decay =

[sampler]
p = 2
k = 2
test_fraction = 0.25

[experiment]
seeds = 0,1,2

[gap]
batches = 2
bins = 10
";

fn tiny(out: &Path, extra: &str) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::parse_str(&format!("{TINY}{extra}")).unwrap();
    cfg.apply(&Overrides {
        out_dir: Some(out.to_path_buf()),
        ..Default::default()
    })
    .unwrap();
    cfg
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    csv::Reader::from_path(path)
        .unwrap()
        .records()
        .map(|r| r.unwrap().iter().map(str::to_string).collect())
        .collect()
}

fn column(rows: &[Vec<String>], i: usize) -> Vec<f64> {
    rows.iter().map(|r| r[i].parse().unwrap()).collect()
}

fn files_under(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn generate_is_deterministic_and_round_trips() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    let nested = a.path().join("not/yet/there");
    let dir_a = cmd_generate(&tiny(&nested, "")).unwrap();
    let dir_b = cmd_generate(&tiny(b.path(), "")).unwrap();
    assert_eq!(files_under(&dir_a), files_under(&dir_b));

    let cfg = tiny(&nested, "");
    let loaded = Dataset::load(&dir_a, "dataset").unwrap();
    assert_eq!(loaded.spec(), &cfg.dataset);
    let fresh = Dataset::generate(&cfg.dataset).unwrap();
    let worst = loaded
        .images()
        .data()
        .iter()
        .zip(fresh.images().data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    assert!(worst <= 1e-5 * fresh.images().data().iter().fold(1.0f64, |m, v| m.max(v.abs())));
    assert_eq!(load_dataset(&cfg).unwrap(), loaded);

    let mut other = cfg.clone();
    other.dataset.rng_seed = 4;
    assert_eq!(load_dataset(&other).unwrap().spec().rng_seed, 4);
}

#[test]
fn zero_epoch_summary_is_the_untrained_evaluation() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny(tmp.path(), "");
    let mut cfg0 = cfg.clone();
    cfg0.schedule.total_epochs = 0;
    cfg0.seeds = vec![5];
    cfg0.setups = vec!["shared-both".parse().unwrap()];
    cmd_train(&cfg0).unwrap();

    let ds = load_dataset(&cfg0).unwrap();
    let (train_ids, test_ids) = ds.identity_split(cfg0.test_fraction).unwrap();
    let mut mc = cfg0.model_config(&cfg0.setups[0], 5);
    mc.num_classes = train_ids.len();
    let oracle = evaluate_retrieval(&Model::build(mc).unwrap(), &ds, &test_ids, cfg0.direction).unwrap();

    let rows = read_summary(&summary_path(&cfg0)).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].runs, 1);
    assert_eq!(rows[0].rank1_mean, oracle.rank1());
    assert_eq!(rows[0].map_mean, oracle.map);
    assert_eq!((rows[0].rank1_std, rows[0].map_std), (0.0, 0.0));
    let metrics = read_csv(&run_dir(&cfg0, &cfg0.setups[0], 5).join("metrics.csv"));
    assert!(metrics.is_empty());
}

#[test]
fn summary_matches_per_run_logs() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny(tmp.path(), "");
    let outcomes = cmd_train(&cfg).unwrap();
    assert_eq!(outcomes.len(), 6);
    let rows = read_summary(&summary_path(&cfg)).unwrap();
    assert_eq!(
        rows.iter().map(|r| r.configuration.as_str()).collect::<Vec<_>>(),
        ["baseline", "shared-both"]
    );
    for row in &rows {
        let setup: NormSetup = row.configuration.parse().unwrap();
        let last: Vec<Vec<String>> = cfg
            .seeds
            .iter()
            .map(|&s| read_csv(&run_dir(&cfg, &setup, s).join("metrics.csv")).pop().unwrap())
            .collect();
        let stats = |v: Vec<f64>| {
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            (mean, std)
        };
        let (r_mean, r_std) = stats(column(&last, 2));
        let (m_mean, m_std) = stats(column(&last, 3));
        assert_eq!(row.runs, 3);
        for (got, want) in [(row.rank1_mean, r_mean), (row.rank1_std, r_std), (row.map_mean, m_mean), (row.map_std, m_std)] {
            assert!((got - want).abs() <= 1e-9, "{got} vs {want}");
        }
    }

    let again = TempDir::new().unwrap();
    cmd_train(&tiny(again.path(), "")).unwrap();
    let strip = |dir: &Path| -> Vec<(PathBuf, Vec<u8>)> {
        files_under(dir).into_iter().filter(|(p, _)| !p.starts_with("dataset")).collect()
    };
    assert_eq!(strip(tmp.path()), strip(again.path()));
}

#[test]
fn gap_outputs_separate_bn_from_mbn() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny(tmp.path(), "");
    let outcome = cmd_gap(&cfg).unwrap();
    let dir = gap_dir(&cfg);

    let whole_bn = read_csv(&dir.join("whole_batch_bn.csv"));
    assert!(column(&whole_bn, 2).iter().all(|m| m.abs() <= 1e-6));
    let stats_bn = read_csv(&dir.join("batch_stats_bn.csv"));
    let stats_mbn = read_csv(&dir.join("batch_stats_mbn.csv"));
    let header = csv::Reader::from_path(dir.join("batch_stats_mbn.csv")).unwrap().headers().unwrap().clone();
    let mean_col = header.iter().position(|h| h == "mean").unwrap();
    assert!(column(&stats_mbn, mean_col).iter().all(|m| m.abs() <= 1e-6));
    assert!(column(&stats_bn, mean_col).iter().any(|m| m.abs() > 1e-3));
    let intra_raw = column(&read_csv(&dir.join("intra_raw.csv")), 1);
    assert!(intra_raw.iter().all(|&g| g > 0.0));

    for variant in ["raw", "bn", "mbn"] {
        for b in 0..2 {
            for tag in ["V", "I"] {
                let rows = read_csv(&dir.join(format!("hist_{variant}_batch{b}_{tag}.csv")));
                assert_eq!(rows.len(), 10);
                let total: f64 = column(&rows, rows[0].len() - 1).iter().sum();
                assert_eq!(total as usize, 2 * 2 * 8 * 8);
            }
        }
        assert!(dir.join(format!("inter_{variant}.csv")).exists());
    }
    assert_eq!(
        outcome.traces.iter().map(|(l, _)| l.as_str()).collect::<Vec<_>>(),
        ["baseline", "shared-both"]
    );
    let shared = read_csv(&dir.join("trace_shared-both.csv"));
    assert!(column(&shared, 1)[1..].iter().all(|&g| g <= 1e-6));

    let report = fs::read_to_string(cmd_report(&cfg).unwrap()).unwrap();
    assert!(report.contains("| stage | baseline | shared-both |"));
}

#[test]
fn unimodal_data_makes_bn_and_mbn_agree() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny(tmp.path(), "[dataset]\nmodality_offset_scale = 0\nintra_class_noise = 0\n");
    cmd_gap(&cfg).unwrap();
    let dir = gap_dir(&cfg);
    for file in ["intra", "batch_stats", "whole_batch"] {
        let bn = read_csv(&dir.join(format!("{file}_bn.csv")));
        let mbn = read_csv(&dir.join(format!("{file}_mbn.csv")));
        assert_eq!(bn.len(), mbn.len());
        for (rb, rm) in bn.iter().zip(&mbn) {
            for (a, b) in rb.iter().zip(rm) {
                match (a.parse::<f64>(), b.parse::<f64>()) {
                    (Ok(x), Ok(y)) => assert!((x - y).abs() <= 1e-6, "{file}: {x} vs {y}"),
                    _ => assert_eq!(a, b),
                }
            }
        }
    }
}

#[test]
fn gap_reads_a_trained_checkpoint() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = tiny(tmp.path(), "");
    cfg.seeds = vec![0];
    cfg.setups = vec!["mixed".parse().unwrap()];
    cmd_train(&cfg).unwrap();
    cfg.gap.checkpoint = Some(run_dir(&cfg, &cfg.setups[0], 0).join("checkpoint"));
    let outcome = cmd_gap(&cfg).unwrap();
    assert_eq!(outcome.traces[0].0, "checkpoint");
    assert!(gap_dir(&cfg).join("trace_checkpoint.csv").exists());
}

fn modnorm(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_modnorm"))
        .args(args)
        .env("MODNORM_THREADS", "1")
        .output()
        .unwrap()
}

#[test]
fn binary_end_to_end() {
    let tmp = TempDir::new().unwrap();
    let config = tmp.path().join("tiny.ini");
    fs::write(&config, TINY).unwrap();
    let out = tmp.path().join("out");
    let (c, o) = (config.to_str().unwrap(), out.to_str().unwrap());

    let gen = modnorm(&["generate", "--config", c, "--out", o, "--dataset-seed", "9"]);
    assert!(gen.status.success(), "{}", String::from_utf8_lossy(&gen.stderr));
    let manifest = fs::read_to_string(out.join("dataset/dataset.manifest")).unwrap();
    assert!(manifest.contains("seed = 9") || manifest.contains("seed=9"), "{manifest}");

    let train = modnorm(&[
        "train", "--config", c, "--out", o, "--seed", "1", "--seed", "2", "--norm-backbone", "mbn_shared",
    ]);
    assert!(train.status.success(), "{}", String::from_utf8_lossy(&train.stderr));
    let rows = read_csv(&out.join("summary.csv"));
    assert_eq!(rows.len(), 1);
    assert_eq!(&rows[0][1..4], ["mbn_shared", "bn", "2"]);

    assert!(modnorm(&["gap", "--config", c, "--out", o, "--post-affine"]).status.success());
    assert!(modnorm(&["report", "--config", c, "--out", o]).status.success());
    assert!(out.join("report.md").exists());
}

#[test]
fn binary_errors_are_machine_readable() {
    let tmp = TempDir::new().unwrap();
    let bad = tmp.path().join("bad.ini");
    fs::write(&bad, "[model]\nwidths = 4,8\nembedding_dim = 5\n").unwrap();
    let out = modnorm(&["train", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.lines().any(|l| l.starts_with("error kind=ConfigError message=")), "{stderr}");

    let empty = modnorm(&["report", "--out", tmp.path().join("nothing").to_str().unwrap()]);
    assert_eq!(empty.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&empty.stderr).contains("error kind=InsufficientData"));

    let usage = modnorm(&["train", "--seed", "x"]);
    assert_eq!(usage.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&usage.stderr).contains("error kind=UsageError"));
}

#[test]
fn shipped_config_lists_the_defaults() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.ini");
    assert_eq!(ExperimentConfig::load(&path).unwrap(), ExperimentConfig::default());
    assert_eq!(ExperimentConfig::parse_str("").unwrap(), ExperimentConfig::default());
}
