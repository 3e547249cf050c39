use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::{ExperimentConfig, NormSetup};
use crate::data::{Dataset, ModalityBatch, PkSampler};
use crate::error::{Error, Result};
use crate::gap::{
    self, csv_error, histogram_range, per_stage_gap_trace, write_batch_stats_csv, write_histogram_csv,
    write_intra_csv, write_trace_csv, GapReport,
};
use crate::model::{checkpoint, evaluate_retrieval, EpochMetrics, Model, TrainConfig, Trainer};
use crate::norm::{modality_indices, ModalityTag, NormConfig, NormKind, NormLayer};
use crate::tensor::{exact_sum, Tensor4};

pub const THREADS_ENV: &str = "MODNORM_THREADS";
const DATASET_STEM: &str = "dataset";

/// Worker pool sized by `MODNORM_THREADS` when set (0 or unset = rayon default).
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::Config(format!("{THREADS_ENV}=`{v}` is not a thread count")))?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn csv_file(path: &Path, header: &[&str]) -> Result<csv::Writer<BufWriter<File>>> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(header).map_err(csv_error)?;
    Ok(w)
}

fn record<I: IntoIterator<Item = String>>(w: &mut csv::Writer<impl Write>, fields: I) -> Result<()> {
    w.write_record(fields).map_err(csv_error)
}

/// Writes the dataset blob and manifest under `<out>/dataset/`.
pub fn cmd_generate(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = cfg.dataset_dir();
    Dataset::generate(&cfg.dataset)?.save(&dir, DATASET_STEM)?;
    info!("dataset written to {}", dir.display());
    Ok(dir)
}

/// The on-disk dataset for `cfg`, generated first when missing or stale.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let dir = cfg.dataset_dir();
    if dir.join(format!("{DATASET_STEM}.manifest")).exists() {
        let ds = Dataset::load(&dir, DATASET_STEM)?;
        if *ds.spec() == cfg.dataset {
            return Ok(ds);
        }
        info!("dataset on disk does not match the config; regenerating");
    }
    cmd_generate(cfg)?;
    Dataset::load(&dir, DATASET_STEM)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub setup: NormSetup,
    pub seed: u64,
    pub log: Vec<EpochMetrics>,
    /// Last epoch, or the untrained evaluation when no epochs ran.
    pub last: EpochMetrics,
}

pub fn run_dir(cfg: &ExperimentConfig, setup: &NormSetup, seed: u64) -> PathBuf {
    cfg.out_dir.join("runs").join(&setup.name).join(format!("seed{seed}"))
}

fn run_one(cfg: &ExperimentConfig, ds: &Dataset, setup: &NormSetup, seed: u64) -> Result<RunOutcome> {
    let (train_ids, test_ids) = ds.identity_split(cfg.test_fraction)?;
    let mut model_cfg = cfg.model_config(setup, seed);
    model_cfg.num_classes = train_ids.len();
    let mut trainer = Trainer::new(Model::build(model_cfg)?, train_ids)?;
    let train_cfg = TrainConfig {
        schedule: cfg.schedule.clone(),
        pk: cfg.sampler,
        direction: cfg.direction,
        seed,
    };
    let log = trainer.fit(ds, &test_ids, &train_cfg)?;
    let last = match log.last() {
        Some(&m) => m,
        None => {
            let r = evaluate_retrieval(trainer.model(), ds, &test_ids, cfg.direction)?;
            EpochMetrics {
                epoch: 0,
                loss: f64::NAN,
                rank1: r.rank1(),
                map: r.map,
            }
        }
    };

    let dir = run_dir(cfg, setup, seed);
    let mut w = csv_file(&dir.join("metrics.csv"), &["epoch", "loss", "rank1", "map"])?;
    for m in &log {
        record(
            &mut w,
            [m.epoch.to_string(), m.loss.to_string(), m.rank1.to_string(), m.map.to_string()],
        )?;
    }
    w.flush()?;
    checkpoint::save(trainer.model(), &dir, "checkpoint")?;
    info!(
        "{setup} seed {seed}: rank1 {:.4} mAP {:.4}",
        last.rank1, last.map
    );
    Ok(RunOutcome {
        setup: setup.clone(),
        seed,
        log,
        last,
    })
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = exact_sum(values.iter().copied()) / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let ss = exact_sum(values.iter().map(|v| (v - mean).powi(2)));
    (mean, (ss / (n - 1.0)).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub configuration: String,
    pub backbone: NormKind,
    pub head: NormKind,
    pub runs: usize,
    pub rank1_mean: f64,
    pub rank1_std: f64,
    pub map_mean: f64,
    pub map_std: f64,
}

pub const SUMMARY_HEADER: [&str; 8] = [
    "configuration",
    "backbone",
    "head",
    "runs",
    "rank1_mean",
    "rank1_std",
    "map_mean",
    "map_std",
];

/// One row per configuration, in first-seen order.
pub fn summarize(outcomes: &[RunOutcome]) -> Vec<SummaryRow> {
    let mut rows: Vec<SummaryRow> = Vec::new();
    let mut seen: Vec<&NormSetup> = Vec::new();
    for o in outcomes {
        if !seen.contains(&&o.setup) {
            seen.push(&o.setup);
        }
    }
    for setup in seen {
        let runs: Vec<&RunOutcome> = outcomes.iter().filter(|o| &o.setup == setup).collect();
        let r1: Vec<f64> = runs.iter().map(|o| o.last.rank1).collect();
        let map: Vec<f64> = runs.iter().map(|o| o.last.map).collect();
        let (rank1_mean, rank1_std) = mean_std(&r1);
        let (map_mean, map_std) = mean_std(&map);
        rows.push(SummaryRow {
            configuration: setup.name.clone(),
            backbone: setup.backbone,
            head: setup.head,
            runs: runs.len(),
            rank1_mean,
            rank1_std,
            map_mean,
            map_std,
        });
    }
    rows
}

pub fn summary_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join("summary.csv")
}

/// One run per (configuration, seed); writes per-run metrics and
/// checkpoints plus `summary.csv`.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<Vec<RunOutcome>> {
    cfg.validate()?;
    let ds = load_dataset(cfg)?;
    let jobs: Vec<(&NormSetup, u64)> = cfg
        .setups
        .iter()
        .flat_map(|s| cfg.seeds.iter().map(move |&seed| (s, seed)))
        .collect();
    let pool = thread_pool()?;
    let outcomes: Vec<RunOutcome> = pool.install(|| {
        jobs.par_iter()
            .map(|&(setup, seed)| run_one(cfg, &ds, setup, seed))
            .collect::<Result<_>>()
    })?;

    let mut w = csv_file(&summary_path(cfg), &SUMMARY_HEADER)?;
    for r in summarize(&outcomes) {
        record(
            &mut w,
            [
                r.configuration,
                r.backbone.to_string(),
                r.head.to_string(),
                r.runs.to_string(),
                r.rank1_mean.to_string(),
                r.rank1_std.to_string(),
                r.map_mean.to_string(),
                r.map_std.to_string(),
            ],
        )?;
    }
    w.flush()?;
    Ok(outcomes)
}

pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(csv_error)?;
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(csv_error)?;
        if rec.len() != SUMMARY_HEADER.len() {
            return Err(Error::format("summary csv", format!("row with {} fields", rec.len())));
        }
        let num = |i: usize| crate::data::parse::<f64>(&rec[i]);
        rows.push(SummaryRow {
            configuration: rec[0].to_string(),
            backbone: rec[1].parse()?,
            head: rec[2].parse()?,
            runs: crate::data::parse(&rec[3])?,
            rank1_mean: num(4)?,
            rank1_std: num(5)?,
            map_mean: num(6)?,
            map_std: num(7)?,
        });
    }
    Ok(rows)
}

/// Names of the whole-batch / per-modality normalizations compared by `gap`.
const GAP_VARIANTS: [(&str, Option<NormKind>); 3] =
    [("raw", None), ("bn", Some(NormKind::Bn)), ("mbn", Some(NormKind::MbnShared))];

#[derive(Debug, Clone)]
pub struct GapOutcome {
    /// `(variant, report)` for raw, whole-batch and per-modality normalized
    /// first-stage features.
    pub reports: Vec<(String, GapReport)>,
    /// `(label, trace)` per analyzed model.
    pub traces: Vec<(String, Vec<(String, f64)>)>,
    pub dir: PathBuf,
}

pub fn gap_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join("gap")
}

fn first_stage_features(model: &Model, batch: &ModalityBatch) -> Result<Tensor4> {
    model.convs()[0].forward(&batch.images)
}

/// Histogram, batch-statistics and per-stage gap CSVs.
pub fn cmd_gap(cfg: &ExperimentConfig) -> Result<GapOutcome> {
    cfg.validate()?;
    let ds = load_dataset(cfg)?;
    let seed = cfg.seeds[0];
    let sampler = PkSampler::new(cfg.sampler, (0..cfg.dataset.num_identities).collect())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batches: Vec<ModalityBatch> = (0..cfg.gap.batches)
        .map(|_| sampler.sample_batch(&ds, &mut rng))
        .collect::<Result<_>>()?;

    let models: Vec<(String, Model)> = match &cfg.gap.checkpoint {
        Some(path) => {
            let dir = path.parent().unwrap_or(Path::new("."));
            let stem = path
                .file_name()
                .and_then(|s| s.to_str())
                .ok_or_else(|| Error::Config(format!("bad checkpoint path {}", path.display())))?;
            vec![("checkpoint".into(), checkpoint::load(dir, stem)?)]
        }
        None => cfg
            .setups
            .iter()
            .map(|s| Ok((s.name.clone(), Model::build(cfg.model_config(s, seed))?)))
            .collect::<Result<_>>()?,
    };

    let dir = gap_dir(cfg);
    fs::create_dir_all(&dir)?;
    let feature_model = &models[0].1;
    let features: Vec<Tensor4> = batches
        .iter()
        .map(|b| first_stage_features(feature_model, b))
        .collect::<Result<_>>()?;
    let channels = features[0].dims().c;

    let mut reports = Vec::new();
    for (variant, kind) in GAP_VARIANTS {
        let outputs: Vec<Tensor4> = match kind {
            None => features.clone(),
            Some(kind) => {
                let layer = NormLayer::new(channels, NormConfig::new(kind))?;
                features
                    .iter()
                    .zip(&batches)
                    .map(|(f, b)| Ok(layer.normalize_train(f, &b.tags)?.1.normalized))
                    .collect::<Result<_>>()?
            }
        };
        let pairs: Vec<(&Tensor4, &[ModalityTag])> =
            outputs.iter().zip(&batches).map(|(o, b)| (o, &b.tags[..])).collect();
        let report = GapReport::from_batches(&pairs)?;

        for (b, (out, batch)) in outputs.iter().zip(&batches).enumerate() {
            let channel0 = |tag| -> Vec<f64> {
                modality_indices(&batch.tags, tag)
                    .into_iter()
                    .flat_map(|n| out.plane(n, 0).to_vec())
                    .collect()
            };
            let all: Vec<f64> = (0..batch.len()).flat_map(|n| out.plane(n, 0).to_vec()).collect();
            let range = gap::value_range(&all)?;
            for tag in ModalityTag::ALL {
                let hist = histogram_range(&channel0(tag), cfg.gap.bins, range)?;
                write_histogram_csv(create(&dir.join(format!("hist_{variant}_batch{b}_{tag}.csv")))?, &hist)?;
            }
        }

        let mut whole = csv_file(&dir.join(format!("whole_batch_{variant}.csv")), &["batch", "channel", "mean", "std"])?;
        for (b, out) in outputs.iter().enumerate() {
            let all: Vec<usize> = (0..out.dims().n).collect();
            let mean = out.channel_mean(&all)?;
            let var = out.channel_var(&all, &mean)?;
            for c in 0..channels {
                record(
                    &mut whole,
                    [b.to_string(), c.to_string(), mean[c].to_string(), var[c].sqrt().to_string()],
                )?;
            }
        }
        whole.flush()?;

        write_batch_stats_csv(
            create(&dir.join(format!("batch_stats_{variant}.csv")))?,
            &report.per_batch_modality_stats,
        )?;
        write_intra_csv(
            create(&dir.join(format!("intra_{variant}.csv")))?,
            &gap::IntraGap {
                mean_gap: report.per_channel_intra_gap.clone(),
                std_gap: report.per_channel_std_gap.clone(),
            },
        )?;
        if let Some(inter) = &report.inter_batch_dispersion {
            let mut w = csv_file(
                &dir.join(format!("inter_{variant}.csv")),
                &["modality", "channel", "mean_dispersion", "std_dispersion"],
            )?;
            for tag in ModalityTag::ALL {
                for c in 0..channels {
                    record(
                        &mut w,
                        [
                            tag.to_string(),
                            c.to_string(),
                            inter.mean_dispersion[tag.index()][c].to_string(),
                            inter.std_dispersion[tag.index()][c].to_string(),
                        ],
                    )?;
                }
            }
            w.flush()?;
        }
        reports.push((variant.to_string(), report));
    }

    let mut summary = csv_file(
        &dir.join("gap_summary.csv"),
        &["variant", "statistic", "min", "q1", "median", "q3", "max", "mean"],
    )?;
    for (variant, report) in &reports {
        for (stat, s) in [("mean_gap", &report.intra_gap_summary), ("std_gap", &report.std_gap_summary)] {
            record(
                &mut summary,
                [variant.clone(), stat.to_string()]
                    .into_iter()
                    .chain([s.min, s.q1, s.median, s.q3, s.max, s.mean].map(|v| v.to_string())),
            )?;
        }
    }
    summary.flush()?;

    let mut traces = Vec::new();
    for (label, model) in &models {
        let trace = per_stage_gap_trace(model, &batches[0], cfg.gap.tap)?;
        write_trace_csv(create(&dir.join(format!("trace_{label}.csv")))?, &trace)?;
        traces.push((label.clone(), trace));
    }
    info!("gap reports written to {}", dir.display());
    Ok(GapOutcome { reports, traces, dir })
}

/// Merges the summary CSV and per-stage traces into `report.md`.
pub fn cmd_report(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let mut md = String::from("# modnorm report\n");
    let summary = summary_path(cfg);
    let mut found = false;
    if summary.exists() {
        found = true;
        md.push_str("\n## Retrieval\n\n");
        md.push_str("| configuration | backbone | head | runs | rank-1 | mAP |\n");
        md.push_str("|---|---|---|---:|---:|---:|\n");
        for r in read_summary(&summary)? {
            md.push_str(&format!(
                "| {} | {} | {} | {} | {:.4} ± {:.4} | {:.4} ± {:.4} |\n",
                r.configuration, r.backbone, r.head, r.runs, r.rank1_mean, r.rank1_std, r.map_mean, r.map_std
            ));
        }
    }

    let dir = gap_dir(cfg);
    let mut traces: Vec<(String, Vec<(String, String)>)> = Vec::new();
    if dir.is_dir() {
        let mut names: Vec<String> = fs::read_dir(&dir)?
            .filter_map(|e| e.ok()?.file_name().into_string().ok())
            .filter(|n| n.starts_with("trace_") && n.ends_with(".csv"))
            .collect();
        names.sort();
        for name in names {
            let mut reader = csv::Reader::from_path(dir.join(&name)).map_err(csv_error)?;
            let rows = reader
                .records()
                .map(|r| {
                    let r = r.map_err(csv_error)?;
                    Ok((r[0].to_string(), r[1].to_string()))
                })
                .collect::<Result<Vec<_>>>()?;
            let label = name["trace_".len()..name.len() - ".csv".len()].to_string();
            traces.push((label, rows));
        }
    }
    if let Some((_, first)) = traces.first() {
        found = true;
        md.push_str("\n## Intra-batch modality gap per stage\n\n| stage |");
        for (label, _) in &traces {
            md.push_str(&format!(" {label} |"));
        }
        md.push_str("\n|---|");
        md.push_str(&"---:|".repeat(traces.len()));
        md.push('\n');
        for (i, (stage, _)) in first.iter().enumerate() {
            md.push_str(&format!("| {stage} |"));
            for (_, rows) in &traces {
                let v: f64 = crate::data::parse(&rows[i].1)?;
                md.push_str(&format!(" {v:.3e} |"));
            }
            md.push('\n');
        }
    }
    if !found {
        return Err(Error::InsufficientData(format!(
            "nothing to report under {}; run `train` or `gap` first",
            cfg.out_dir.display()
        )));
    }
    let path = cfg.out_dir.join("report.md");
    fs::write(&path, md)?;
    Ok(path)
}
