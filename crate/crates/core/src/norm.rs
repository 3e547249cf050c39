//! Batch normalization (BN) and modality batch normalization (MBN).
//!
//! BN normalizes every channel over the whole mini-batch. MBN splits the
//! mini-batch into its visible and infrared sub-batches and normalizes each
//! one with its own statistics, keeping one pair of running statistics per
//! modality for inference. `MbnShared` applies one affine pair to both
//! modalities, `MbnSpecific` keeps a pair per modality.
//!
//! Variances are biased (denominator = element count) both for batch
//! normalization and for the running estimates.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{exact_sum, Tensor4};

/// Sensing modality of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModalityTag {
    Visible,
    Infrared,
}

impl ModalityTag {
    pub const ALL: [ModalityTag; 2] = [ModalityTag::Visible, ModalityTag::Infrared];

    pub fn index(self) -> usize {
        match self {
            ModalityTag::Visible => 0,
            ModalityTag::Infrared => 1,
        }
    }

    pub fn other(self) -> Self {
        match self {
            ModalityTag::Visible => ModalityTag::Infrared,
            ModalityTag::Infrared => ModalityTag::Visible,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModalityTag::Visible => "V",
            ModalityTag::Infrared => "I",
        }
    }
}

impl fmt::Display for ModalityTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModalityTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "V" | "v" | "visible" => Ok(ModalityTag::Visible),
            "I" | "i" | "infrared" => Ok(ModalityTag::Infrared),
            other => Err(Error::Config(format!("unknown modality `{other}`"))),
        }
    }
}

/// Indices of the samples carrying `tag`, ascending.
pub fn modality_indices(tags: &[ModalityTag], tag: ModalityTag) -> Vec<usize> {
    tags.iter()
        .enumerate()
        .filter(|(_, &t)| t == tag)
        .map(|(i, _)| i)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NormKind {
    Bn,
    MbnShared,
    MbnSpecific,
}

impl NormKind {
    pub const ALL: [NormKind; 3] = [NormKind::Bn, NormKind::MbnShared, NormKind::MbnSpecific];

    pub fn as_str(self) -> &'static str {
        match self {
            NormKind::Bn => "bn",
            NormKind::MbnShared => "mbn_shared",
            NormKind::MbnSpecific => "mbn_specific",
        }
    }

    pub fn is_modality_aware(self) -> bool {
        !matches!(self, NormKind::Bn)
    }

    /// Number of `(γ, β)` pairs the kind owns.
    pub fn affine_groups(self) -> usize {
        match self {
            NormKind::MbnSpecific => 2,
            _ => 1,
        }
    }

    /// Running statistics keys the kind maintains.
    pub fn stats_keys(self) -> &'static [StatsKey] {
        match self {
            NormKind::Bn => &[StatsKey::Batch],
            _ => &[
                StatsKey::Modality(ModalityTag::Visible),
                StatsKey::Modality(ModalityTag::Infrared),
            ],
        }
    }
}

impl fmt::Display for NormKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NormKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "bn" => Ok(NormKind::Bn),
            "mbn_shared" | "shared" => Ok(NormKind::MbnShared),
            "mbn_specific" | "specific" => Ok(NormKind::MbnSpecific),
            other => Err(Error::Config(format!("unknown norm kind `{other}`"))),
        }
    }
}

/// Key of one running-statistics slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StatsKey {
    /// The single slot of plain BN.
    Batch,
    Modality(ModalityTag),
}

impl StatsKey {
    pub fn as_str(self) -> &'static str {
        match self {
            StatsKey::Batch => "all",
            StatsKey::Modality(tag) => tag.as_str(),
        }
    }
}

impl FromStr for StatsKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(StatsKey::Batch),
            other => other.parse().map(StatsKey::Modality),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormConfig {
    pub kind: NormKind,
    pub eps: f64,
    /// Weight of the newest batch in the running averages.
    pub momentum: f64,
    pub affine_bias: bool,
}

impl NormConfig {
    pub const DEFAULT_EPS: f64 = 1e-5;
    pub const DEFAULT_MOMENTUM: f64 = 0.1;

    pub fn new(kind: NormKind) -> Self {
        Self {
            kind,
            eps: Self::DEFAULT_EPS,
            momentum: Self::DEFAULT_MOMENTUM,
            affine_bias: true,
        }
    }

    pub fn with_bias(mut self, enabled: bool) -> Self {
        self.affine_bias = enabled;
        self
    }

    pub fn with_eps(mut self, eps: f64) -> Self {
        self.eps = eps;
        self
    }

    pub fn with_momentum(mut self, momentum: f64) -> Self {
        self.momentum = momentum;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::Config(format!("epsilon must be > 0, got {}", self.eps)));
        }
        if !(self.momentum > 0.0 && self.momentum <= 1.0) {
            return Err(Error::Config(format!(
                "momentum must lie in (0, 1], got {}",
                self.momentum
            )));
        }
        Ok(())
    }
}

/// One per-channel `(γ, β)` pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl Affine {
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    fn initial(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

/// Intermediates of a training-mode forward pass needed by [`NormLayer::backward`].
#[derive(Debug, Clone)]
pub struct NormCache {
    /// Pre-affine normalized values `ẋ`.
    pub normalized: Tensor4,
    /// Normalization groups: key plus member sample indices.
    pub groups: Vec<(StatsKey, Vec<usize>)>,
    /// Batch mean per group, per channel.
    pub batch_mean: Vec<Vec<f64>>,
    /// Biased batch variance per group, per channel.
    pub batch_var: Vec<Vec<f64>>,
    /// `1 / sqrt(σ² + ε)` per group, per channel.
    pub inv_std: Vec<Vec<f64>>,
    /// Affine pair applied to each sample.
    pub affine_index: Vec<usize>,
}

/// Parameter gradients, one entry per affine pair.
#[derive(Debug, Clone, PartialEq)]
pub struct NormGrads {
    pub gamma: Vec<Vec<f64>>,
    pub beta: Vec<Vec<f64>>,
}

/// A BN / MBN layer: configuration, learnable affine parameters and running
/// statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct NormLayer {
    config: NormConfig,
    channels: usize,
    affine: Vec<Affine>,
    running: Vec<(StatsKey, RunningStats)>,
    steps: u64,
}

impl NormLayer {
    pub fn new(channels: usize, config: NormConfig) -> Result<Self> {
        config.validate()?;
        if channels == 0 {
            return Err(Error::Config("normalization layer needs at least one channel".into()));
        }
        Ok(Self {
            config,
            channels,
            affine: (0..config.kind.affine_groups())
                .map(|_| Affine::identity(channels))
                .collect(),
            running: config
                .kind
                .stats_keys()
                .iter()
                .map(|&k| (k, RunningStats::initial(channels)))
                .collect(),
            steps: 0,
        })
    }

    pub fn config(&self) -> &NormConfig {
        &self.config
    }

    pub fn kind(&self) -> NormKind {
        self.config.kind
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Number of training batches folded into the running statistics.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn affine(&self) -> &[Affine] {
        &self.affine
    }

    /// Mutable affine parameters. With the bias disabled, `β` is reset to zero
    /// on the next forward pass regardless of what is written here.
    pub fn affine_mut(&mut self) -> &mut [Affine] {
        &mut self.affine
    }

    /// Affine pair for a modality; `MbnSpecific` has one per modality.
    pub fn affine_for(&self, tag: ModalityTag) -> &Affine {
        &self.affine[self.affine_slot(tag)]
    }

    fn affine_slot(&self, tag: ModalityTag) -> usize {
        match self.config.kind {
            NormKind::MbnSpecific => tag.index(),
            _ => 0,
        }
    }

    pub fn running_stats(&self, key: StatsKey) -> Option<&RunningStats> {
        self.running.iter().find(|(k, _)| *k == key).map(|(_, s)| s)
    }

    pub fn running_stats_mut(&mut self, key: StatsKey) -> Option<&mut RunningStats> {
        self.running.iter_mut().find(|(k, _)| *k == key).map(|(_, s)| s)
    }

    pub fn running_entries(&self) -> &[(StatsKey, RunningStats)] {
        &self.running
    }

    fn stats_key_for(&self, tag: ModalityTag) -> StatsKey {
        match self.config.kind {
            NormKind::Bn => StatsKey::Batch,
            _ => StatsKey::Modality(tag),
        }
    }

    fn check_input(&self, x: &Tensor4, tags: &[ModalityTag]) -> Result<()> {
        let d = x.dims();
        if d.c != self.channels {
            return Err(Error::Shape(format!(
                "layer has {} channels, input {d}",
                self.channels
            )));
        }
        if tags.len() != d.n {
            return Err(Error::Shape(format!(
                "{} modality tags for a batch of {}",
                tags.len(),
                d.n
            )));
        }
        Ok(())
    }

    fn train_groups(
        &self,
        tags: &[ModalityTag],
        require_both: bool,
    ) -> Result<Vec<(StatsKey, Vec<usize>)>> {
        match self.config.kind {
            NormKind::Bn => Ok(vec![(StatsKey::Batch, (0..tags.len()).collect())]),
            _ => {
                let mut groups = Vec::with_capacity(2);
                for tag in ModalityTag::ALL {
                    let members = modality_indices(tags, tag);
                    if members.is_empty() {
                        if require_both {
                            return Err(Error::DegenerateSubset(format!(
                                "{} training batch has no {tag} samples",
                                self.config.kind
                            )));
                        }
                        continue;
                    }
                    groups.push((StatsKey::Modality(tag), members));
                }
                if groups.is_empty() {
                    return Err(Error::DegenerateSubset("empty training batch".into()));
                }
                Ok(groups)
            }
        }
    }

    /// Training-mode normalization without touching the running statistics.
    pub fn normalize_train(
        &self,
        x: &Tensor4,
        tags: &[ModalityTag],
    ) -> Result<(Tensor4, NormCache)> {
        self.check_input(x, tags)?;
        let groups = self.train_groups(tags, true)?;
        self.normalize_groups(x, tags, groups)
    }

    fn normalize_groups(
        &self,
        x: &Tensor4,
        tags: &[ModalityTag],
        groups: Vec<(StatsKey, Vec<usize>)>,
    ) -> Result<(Tensor4, NormCache)> {
        let hw = x.dims().spatial();
        let mut normalized = Tensor4::zeros(x.dims());
        let mut batch_mean = Vec::with_capacity(groups.len());
        let mut batch_var = Vec::with_capacity(groups.len());
        let mut inv_std = Vec::with_capacity(groups.len());

        for (key, members) in &groups {
            if members.len() * hw == 1 {
                log::warn!(
                    "normalization group {} holds a single value; output collapses to zero",
                    key.as_str()
                );
            }
            let mean = x.channel_mean(members)?;
            let var = x.channel_var(members, &mean)?;
            let inv: Vec<f64> = var
                .iter()
                .map(|v| 1.0 / (v + self.config.eps).sqrt())
                .collect();
            for &n in members {
                for c in 0..self.channels {
                    let (mu, s) = (mean[c], inv[c]);
                    let src = x.plane(n, c);
                    for (o, &v) in normalized.plane_mut(n, c).iter_mut().zip(src) {
                        *o = (v - mu) * s;
                    }
                }
            }
            batch_mean.push(mean);
            batch_var.push(var);
            inv_std.push(inv);
        }

        let affine_index: Vec<usize> = tags.iter().map(|&t| self.affine_slot(t)).collect();
        let y = self.apply_affine(&normalized, &affine_index);
        Ok((
            y,
            NormCache {
                normalized,
                groups,
                batch_mean,
                batch_var,
                inv_std,
                affine_index,
            },
        ))
    }

    fn apply_affine(&self, normalized: &Tensor4, affine_index: &[usize]) -> Tensor4 {
        let mut y = normalized.clone();
        for (n, &a) in affine_index.iter().enumerate() {
            let p = &self.affine[a];
            for c in 0..self.channels {
                let (g, b) = (p.gamma[c], self.beta(p, c));
                for v in y.plane_mut(n, c) {
                    *v = g * *v + b;
                }
            }
        }
        y
    }

    #[inline]
    fn beta(&self, p: &Affine, c: usize) -> f64 {
        if self.config.affine_bias {
            p.beta[c]
        } else {
            0.0
        }
    }

    /// Training-mode forward pass: normalizes each group with its batch
    /// statistics, applies the affine map and folds the batch statistics into
    /// the running averages.
    ///
    /// MBN kinds require both modalities in the batch.
    pub fn forward_train(
        &mut self,
        x: &Tensor4,
        tags: &[ModalityTag],
    ) -> Result<(Tensor4, NormCache)> {
        let out = self.normalize_train(x, tags)?;
        self.commit_batch_stats(&out.1)?;
        Ok(out)
    }

    /// Like [`forward_train`](Self::forward_train) but normalizes only the
    /// modalities present, so an MBN layer accepts a single-modality batch.
    /// Only the present modalities' running statistics move.
    pub fn forward_train_partial(
        &mut self,
        x: &Tensor4,
        tags: &[ModalityTag],
    ) -> Result<(Tensor4, NormCache)> {
        self.check_input(x, tags)?;
        let groups = self.train_groups(tags, false)?;
        let out = self.normalize_groups(x, tags, groups)?;
        self.commit_batch_stats(&out.1)?;
        Ok(out)
    }

    /// Folds the batch statistics recorded in `cache` into the running
    /// averages and counts one step.
    pub fn commit_batch_stats(&mut self, cache: &NormCache) -> Result<()> {
        for (i, (key, _)) in cache.groups.iter().enumerate() {
            self.update_running_stats(*key, &cache.batch_mean[i], &cache.batch_var[i])?;
        }
        self.steps += 1;
        Ok(())
    }

    /// `μ̄ ← (1−α)·μ̄ + α·μ_batch`, `σ̄² ← (1−α)·σ̄² + α·σ²_batch`.
    ///
    /// Does not advance the step counter; [`commit_batch_stats`](Self::commit_batch_stats)
    /// does that once per batch.
    pub fn update_running_stats(
        &mut self,
        key: StatsKey,
        batch_mean: &[f64],
        batch_var: &[f64],
    ) -> Result<()> {
        if batch_mean.len() != self.channels || batch_var.len() != self.channels {
            return Err(Error::Shape(format!(
                "batch statistics of length {}/{} for {} channels",
                batch_mean.len(),
                batch_var.len(),
                self.channels
            )));
        }
        let alpha = self.config.momentum;
        let kind = self.config.kind;
        let stats = self
            .running_stats_mut(key)
            .ok_or_else(|| Error::Config(format!("{kind} keeps no `{}` statistics", key.as_str())))?;
        for c in 0..batch_mean.len() {
            stats.mean[c] = (1.0 - alpha) * stats.mean[c] + alpha * batch_mean[c];
            stats.var[c] = ((1.0 - alpha) * stats.var[c] + alpha * batch_var[c]).max(0.0);
        }
        Ok(())
    }

    /// Inference-mode forward pass using the running statistics. Each output
    /// sample depends only on its own input and the stored state.
    ///
    /// MBN kinds route every sample through its modality's statistics and so
    /// need `tags`; BN ignores them.
    pub fn forward_eval(&self, x: &Tensor4, tags: Option<&[ModalityTag]>) -> Result<Tensor4> {
        let d = x.dims();
        if d.c != self.channels {
            return Err(Error::Shape(format!(
                "layer has {} channels, input {d}",
                self.channels
            )));
        }
        let tags: Vec<ModalityTag> = match tags {
            Some(t) => {
                if t.len() != d.n {
                    return Err(Error::Shape(format!(
                        "{} modality tags for a batch of {}",
                        t.len(),
                        d.n
                    )));
                }
                t.to_vec()
            }
            None if self.config.kind.is_modality_aware() => {
                return Err(Error::MissingModalityTag(0));
            }
            None => vec![ModalityTag::Visible; d.n],
        };

        let inv: Vec<(StatsKey, Vec<f64>)> = self
            .running
            .iter()
            .map(|(k, s)| {
                (
                    *k,
                    s.var
                        .iter()
                        .map(|v| 1.0 / (v + self.config.eps).sqrt())
                        .collect(),
                )
            })
            .collect();

        let mut y = Tensor4::zeros(d);
        for (n, &tag) in tags.iter().enumerate() {
            let key = self.stats_key_for(tag);
            let slot = self
                .running
                .iter()
                .position(|(k, _)| *k == key)
                .expect("stats key present for layer kind");
            let stats = &self.running[slot].1;
            let inv = &inv[slot].1;
            let p = &self.affine[self.affine_slot(tag)];
            for c in 0..self.channels {
                let (mu, s, g, b) = (stats.mean[c], inv[c], p.gamma[c], self.beta(p, c));
                let src = x.plane(n, c);
                for (o, &v) in y.plane_mut(n, c).iter_mut().zip(src) {
                    *o = g * ((v - mu) * s) + b;
                }
            }
        }
        Ok(y)
    }

    /// Analytic gradients of a training-mode forward pass, treating the batch
    /// mean and variance of every group as functions of its inputs.
    pub fn backward(&self, cache: &NormCache, grad_out: &Tensor4) -> Result<(Tensor4, NormGrads)> {
        let d = cache.normalized.dims();
        if grad_out.dims() != d {
            return Err(Error::Shape(format!(
                "gradient {} does not match cached forward {d}",
                grad_out.dims()
            )));
        }
        if d.c != self.channels || cache.affine_index.len() != d.n {
            return Err(Error::Shape("cache does not belong to this layer".into()));
        }
        let hw = d.spatial();
        let xhat = &cache.normalized;
        let groups = self.affine.len();

        let mut grads = NormGrads {
            gamma: vec![vec![0.0; self.channels]; groups],
            beta: vec![vec![0.0; self.channels]; groups],
        };
        for (a, (dg, db)) in grads.gamma.iter_mut().zip(grads.beta.iter_mut()).enumerate() {
            let members: Vec<usize> = (0..d.n).filter(|&n| cache.affine_index[n] == a).collect();
            if members.is_empty() {
                continue;
            }
            for c in 0..self.channels {
                dg[c] = exact_sum(members.iter().flat_map(|&n| {
                    grad_out
                        .plane(n, c)
                        .iter()
                        .zip(xhat.plane(n, c))
                        .map(|(g, x)| g * x)
                }));
                if self.config.affine_bias {
                    db[c] = exact_sum(
                        members
                            .iter()
                            .flat_map(|&n| grad_out.plane(n, c).iter().copied()),
                    );
                }
            }
        }

        let mut grad_in = Tensor4::zeros(d);
        for (gi, (_, members)) in cache.groups.iter().enumerate() {
            let count = (members.len() * hw) as f64;
            for c in 0..self.channels {
                let gamma_of = |n: usize| self.affine[cache.affine_index[n]].gamma[c];
                let mean_g = exact_sum(members.iter().flat_map(|&n| {
                    let g = gamma_of(n);
                    grad_out.plane(n, c).iter().map(move |v| v * g)
                })) / count;
                let mean_gx = exact_sum(members.iter().flat_map(|&n| {
                    let g = gamma_of(n);
                    grad_out
                        .plane(n, c)
                        .iter()
                        .zip(xhat.plane(n, c))
                        .map(move |(v, x)| v * g * x)
                })) / count;
                let s = cache.inv_std[gi][c];
                for &n in members {
                    let g = gamma_of(n);
                    let (dy, xh) = (grad_out.plane(n, c), xhat.plane(n, c));
                    for ((o, &v), &x) in grad_in.plane_mut(n, c).iter_mut().zip(dy).zip(xh) {
                        *o = s * (v * g - mean_g - x * mean_gx);
                    }
                }
            }
        }
        Ok((grad_in, grads))
    }

    /// Sets both modality pairs of an `MbnSpecific` layer to `(gamma, beta)`,
    /// making it compute exactly what an `MbnShared` layer with that pair does.
    pub fn tie_parameters(&mut self, gamma: &[f64], beta: &[f64]) -> Result<()> {
        if self.config.kind != NormKind::MbnSpecific {
            return Err(Error::Config(format!(
                "only mbn_specific layers can be tied, not {}",
                self.config.kind
            )));
        }
        if gamma.len() != self.channels || beta.len() != self.channels {
            return Err(Error::Shape("tied parameters have the wrong length".into()));
        }
        for p in &mut self.affine {
            p.gamma.copy_from_slice(gamma);
            p.beta.copy_from_slice(beta);
        }
        Ok(())
    }
}
