//! Distribution-gap statistics between modality sub-batches and across
//! mini-batches, histograms and per-stage traces.

use std::fmt::Display;
use std::io::Write;

use crate::data::ModalityBatch;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::norm::{modality_indices, ModalityTag};
use crate::tensor::{exact_sum, Tensor4};

/// Per-channel mean and biased standard deviation of one modality sub-batch.
pub fn modality_stats(x: &Tensor4, tags: &[ModalityTag], tag: ModalityTag) -> Result<(Vec<f64>, Vec<f64>)> {
    if tags.len() != x.dims().n {
        return Err(Error::Shape(format!("{} tags for {} samples", tags.len(), x.dims().n)));
    }
    let subset = modality_indices(tags, tag);
    if subset.is_empty() {
        return Err(Error::DegenerateSubset(format!("no {tag} samples in batch")));
    }
    let mean = x.channel_mean(&subset)?;
    let std = x.channel_var(&subset, &mean)?.into_iter().map(f64::sqrt).collect();
    Ok((mean, std))
}

/// Intra-mini-batch modality gap, per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct IntraGap {
    /// `|μ_V − μ_I|`
    pub mean_gap: Vec<f64>,
    /// `|σ_V − σ_I|`
    pub std_gap: Vec<f64>,
}

impl IntraGap {
    pub fn mean_over_channels(&self) -> f64 {
        exact_sum(self.mean_gap.iter().copied()) / self.mean_gap.len() as f64
    }
}

pub fn intra_batch_gap(x: &Tensor4, tags: &[ModalityTag]) -> Result<IntraGap> {
    let (mv, sv) = modality_stats(x, tags, ModalityTag::Visible)?;
    let (mi, si) = modality_stats(x, tags, ModalityTag::Infrared)?;
    Ok(IntraGap {
        mean_gap: mv.iter().zip(&mi).map(|(a, b)| (a - b).abs()).collect(),
        std_gap: sv.iter().zip(&si).map(|(a, b)| (a - b).abs()).collect(),
    })
}

/// Inter-mini-batch dispersion: for each modality (indexed by
/// [`ModalityTag::index`]) and channel, the biased standard deviation across
/// batches of the sub-batch mean and of the sub-batch std.
#[derive(Debug, Clone, PartialEq)]
pub struct InterGap {
    pub mean_dispersion: [Vec<f64>; 2],
    pub std_dispersion: [Vec<f64>; 2],
}

fn dispersion(rows: &[Vec<f64>]) -> Vec<f64> {
    let n = rows.len() as f64;
    (0..rows[0].len())
        .map(|c| {
            let mean = exact_sum(rows.iter().map(|r| r[c])) / n;
            (exact_sum(rows.iter().map(|r| (r[c] - mean).powi(2))) / n).sqrt()
        })
        .collect()
}

pub fn inter_batch_gap(batches: &[(&Tensor4, &[ModalityTag])]) -> Result<InterGap> {
    if batches.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "inter-batch dispersion needs at least 2 batches, got {}",
            batches.len()
        )));
    }
    let mut mean_dispersion: [Vec<f64>; 2] = Default::default();
    let mut std_dispersion: [Vec<f64>; 2] = Default::default();
    for tag in ModalityTag::ALL {
        let mut means = Vec::with_capacity(batches.len());
        let mut stds = Vec::with_capacity(batches.len());
        for (x, tags) in batches {
            let (m, s) = modality_stats(x, tags, tag)?;
            means.push(m);
            stds.push(s);
        }
        if means.iter().any(|m| m.len() != means[0].len()) {
            return Err(Error::Shape("batches differ in channel count".into()));
        }
        mean_dispersion[tag.index()] = dispersion(&means);
        std_dispersion[tag.index()] = dispersion(&stds);
    }
    Ok(InterGap {
        mean_dispersion,
        std_dispersion,
    })
}

/// Equal-width histogram over `[min, max]`; the last bin is closed.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    /// `counts.len() + 1` edges.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// `(min, max)` of a non-empty slice.
pub fn value_range(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::InsufficientData("histogram of no values".into()));
    }
    Ok(values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v))))
}

/// Histogram over the data's own range. A constant input yields one
/// zero-width bin holding every value.
pub fn histogram(values: &[f64], bins: usize) -> Result<Histogram> {
    histogram_range(values, bins, value_range(values)?)
}

/// Histogram over a fixed `[lo, hi]` that must contain every value.
pub fn histogram_range(values: &[f64], bins: usize, (lo, hi): (f64, f64)) -> Result<Histogram> {
    if values.is_empty() {
        return Err(Error::InsufficientData("histogram of no values".into()));
    }
    if bins == 0 {
        return Err(Error::Config("histogram needs at least one bin".into()));
    }
    if let Some(v) = values.iter().find(|v| !(lo..=hi).contains(*v)) {
        return Err(Error::Config(format!("value {v} outside histogram range [{lo}, {hi}]")));
    }
    if lo == hi {
        return Ok(Histogram {
            edges: vec![lo, hi],
            counts: vec![values.len()],
        });
    }
    let width = (hi - lo) / bins as f64;
    let mut edges: Vec<f64> = (0..bins).map(|i| lo + i as f64 * width).collect();
    edges.push(hi);
    let mut counts = vec![0usize; bins];
    for &v in values {
        // Start from the arithmetic guess, then settle against the stored edges.
        let mut b = (((v - lo) / width) as usize).min(bins - 1);
        while b > 0 && v < edges[b] {
            b -= 1;
        }
        while b + 1 < bins && v >= edges[b + 1] {
            b += 1;
        }
        counts[b] += 1;
    }
    Ok(Histogram { edges, counts })
}

/// Five-number summary plus mean; quartiles by linear interpolation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InsufficientData("summary of no values".into()));
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let pos = p * (sorted.len() - 1) as f64;
            let (i, frac) = (pos.floor() as usize, pos.fract());
            match sorted.get(i + 1) {
                Some(&next) if frac > 0.0 => sorted[i] + frac * (next - sorted[i]),
                _ => sorted[i],
            }
        };
        Ok(Self {
            min: sorted[0],
            q1: q(0.25),
            median: q(0.5),
            q3: q(0.75),
            max: sorted[sorted.len() - 1],
            mean: exact_sum(values.iter().copied()) / values.len() as f64,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchModalityStats {
    pub batch: usize,
    pub modality: ModalityTag,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Gap statistics over a set of analyzed mini-batches. The per-channel intra
/// gaps are averaged over batches.
#[derive(Debug, Clone, PartialEq)]
pub struct GapReport {
    pub per_channel_intra_gap: Vec<f64>,
    pub per_channel_std_gap: Vec<f64>,
    pub per_batch_modality_stats: Vec<BatchModalityStats>,
    /// `None` for a single batch.
    pub inter_batch_dispersion: Option<InterGap>,
    pub intra_gap_summary: Summary,
    pub std_gap_summary: Summary,
}

impl GapReport {
    pub fn from_batches(batches: &[(&Tensor4, &[ModalityTag])]) -> Result<Self> {
        if batches.is_empty() {
            return Err(Error::InsufficientData("no batches to analyze".into()));
        }
        let mut stats = Vec::with_capacity(2 * batches.len());
        let mut gaps = Vec::with_capacity(batches.len());
        for (b, (x, tags)) in batches.iter().enumerate() {
            gaps.push(intra_batch_gap(x, tags)?);
            for tag in ModalityTag::ALL {
                let (mean, std) = modality_stats(x, tags, tag)?;
                stats.push(BatchModalityStats {
                    batch: b,
                    modality: tag,
                    mean,
                    std,
                });
            }
        }
        let average = |pick: fn(&IntraGap) -> &Vec<f64>| -> Vec<f64> {
            (0..pick(&gaps[0]).len())
                .map(|c| exact_sum(gaps.iter().map(|g| pick(g)[c])) / gaps.len() as f64)
                .collect()
        };
        let intra = average(|g| &g.mean_gap);
        let std_gap = average(|g| &g.std_gap);
        let inter = if batches.len() >= 2 {
            Some(inter_batch_gap(batches)?)
        } else {
            None
        };
        Ok(Self {
            intra_gap_summary: Summary::of(&intra)?,
            std_gap_summary: Summary::of(&std_gap)?,
            per_channel_intra_gap: intra,
            per_channel_std_gap: std_gap,
            per_batch_modality_stats: stats,
            inter_batch_dispersion: inter,
        })
    }
}

/// Where activations are read around each normalization layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Tap {
    #[default]
    PreAffine,
    PostAffine,
}

/// Mean-over-channels intra-batch gap at the input, after each backbone norm
/// layer and after the head, from a training-mode forward pass.
pub fn per_stage_gap_trace(model: &Model, batch: &ModalityBatch, tap: Tap) -> Result<Vec<(String, f64)>> {
    let cache = model.forward_train(&batch.images, &batch.tags)?;
    let mut trace = vec![(
        "input".to_string(),
        intra_batch_gap(&batch.images, &batch.tags)?.mean_over_channels(),
    )];
    for (s, (nc, post)) in cache.norm_caches.iter().zip(&cache.norm_outputs).enumerate() {
        let x = match tap {
            Tap::PreAffine => &nc.normalized,
            Tap::PostAffine => post,
        };
        trace.push((
            format!("stage{}", s + 1),
            intra_batch_gap(x, &batch.tags)?.mean_over_channels(),
        ));
    }
    let head = match tap {
        Tap::PreAffine => cache.head_cache.normalized,
        Tap::PostAffine => cache.embeddings.into_tensor(),
    };
    trace.push(("head".into(), intra_batch_gap(&head, &batch.tags)?.mean_over_channels()));
    Ok(trace)
}

fn csv_writer<W: Write>(out: W, header: &[&str]) -> Result<csv::Writer<W>> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header).map_err(csv_error)?;
    Ok(w)
}

pub(crate) fn csv_error(e: csv::Error) -> Error {
    Error::format("csv", e.to_string())
}

fn row(w: &mut csv::Writer<impl Write>, fields: &[&dyn Display]) -> Result<()> {
    w.write_record(fields.iter().map(|f| f.to_string())).map_err(csv_error)
}

pub fn write_intra_csv(out: impl Write, gap: &IntraGap) -> Result<()> {
    let mut w = csv_writer(out, &["channel", "mean_gap", "std_gap"])?;
    for (c, (m, s)) in gap.mean_gap.iter().zip(&gap.std_gap).enumerate() {
        row(&mut w, &[&c, m, s])?;
    }
    Ok(w.flush()?)
}

pub fn write_batch_stats_csv(out: impl Write, stats: &[BatchModalityStats]) -> Result<()> {
    let mut w = csv_writer(out, &["batch", "modality", "channel", "mean", "std"])?;
    for s in stats {
        for (c, (m, sd)) in s.mean.iter().zip(&s.std).enumerate() {
            row(&mut w, &[&s.batch, &s.modality, &c, m, sd])?;
        }
    }
    Ok(w.flush()?)
}

pub fn write_trace_csv(out: impl Write, trace: &[(String, f64)]) -> Result<()> {
    let mut w = csv_writer(out, &["stage", "gap"])?;
    for (stage, gap) in trace {
        row(&mut w, &[stage, gap])?;
    }
    Ok(w.flush()?)
}

pub fn write_histogram_csv(out: impl Write, hist: &Histogram) -> Result<()> {
    let mut w = csv_writer(out, &["bin_left", "bin_right", "count"])?;
    for (i, count) in hist.counts.iter().enumerate() {
        row(&mut w, &[&hist.edges[i], &hist.edges[i + 1], count])?;
    }
    Ok(w.flush()?)
}
