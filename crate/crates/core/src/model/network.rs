//! Toy convolutional re-identification network.
//!
//! `S` stages of (3×3 conv → norm → ReLU → 2×2 average pool), then global
//! average pooling and a bias-free head normalization layer whose output is
//! the embedding. A bias-free linear classifier over the training identities
//! is used by the losses only.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::layers::{avg_pool2, avg_pool2_backward, relu, relu_backward, Conv3x3};
use super::loss::LossConfig;
use super::optim::ParamSlot;
use crate::data::ModalityBatch;
use crate::error::{Error, Result};
use crate::norm::{ModalityTag, NormCache, NormConfig, NormGrads, NormKind, NormLayer, StatsKey};
use crate::tensor::{Dims4, Matrix, Tensor4};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// Input `(H, W)`; must halve cleanly once per stage.
    pub input_hw: (usize, usize),
    pub widths: Vec<usize>,
    /// Equal to the last stage width (the head normalizes pooled features).
    pub embedding_dim: usize,
    pub num_classes: usize,
    pub backbone_norm: NormKind,
    pub head_norm: NormKind,
    pub head_bias: bool,
    pub norm_eps: f64,
    pub norm_momentum: f64,
    pub loss: LossConfig,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 8,
            input_hw: (8, 8),
            widths: vec![16, 32, 64],
            embedding_dim: 64,
            num_classes: 24,
            backbone_norm: NormKind::Bn,
            head_norm: NormKind::Bn,
            head_bias: false,
            norm_eps: NormConfig::DEFAULT_EPS,
            norm_momentum: NormConfig::DEFAULT_MOMENTUM,
            loss: LossConfig::default(),
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) || self.in_channels == 0 {
            return Err(Error::Config("stage widths and input channels must be >= 1".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("classifier needs at least one class".into()));
        }
        let (mut h, mut w) = self.input_hw;
        for _ in &self.widths {
            if h == 0 || w == 0 || h % 2 != 0 || w % 2 != 0 {
                return Err(Error::Config(format!(
                    "input {:?} cannot be pooled {} times",
                    self.input_hw,
                    self.widths.len()
                )));
            }
            h /= 2;
            w /= 2;
        }
        let last = *self.widths.last().expect("non-empty widths");
        if self.embedding_dim != last {
            return Err(Error::Config(format!(
                "embedding_dim {} must equal the last stage width {last}",
                self.embedding_dim
            )));
        }
        self.norm_config(self.backbone_norm, true).validate()?;
        self.loss.validate()
    }

    fn norm_config(&self, kind: NormKind, bias: bool) -> NormConfig {
        NormConfig::new(kind)
            .with_eps(self.norm_eps)
            .with_momentum(self.norm_momentum)
            .with_bias(bias)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    convs: Vec<Conv3x3>,
    norms: Vec<NormLayer>,
    head: NormLayer,
    classifier: Matrix,
}

/// Everything a training forward pass keeps for the backward pass and for
/// activation taps.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub stage_inputs: Vec<Tensor4>,
    /// Conv outputs, i.e. the inputs of each backbone norm layer.
    pub conv_outputs: Vec<Tensor4>,
    pub norm_caches: Vec<NormCache>,
    /// Post-affine outputs of each backbone norm layer.
    pub norm_outputs: Vec<Tensor4>,
    pub pooled_dims: Dims4,
    pub head_cache: NormCache,
    pub embeddings: Matrix,
}

#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub convs: Vec<Vec<f64>>,
    pub norms: Vec<NormGrads>,
    pub head: NormGrads,
    pub classifier: Matrix,
}

/// Embeddings plus, in training mode, classifier logits.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub embeddings: Matrix,
    pub logits: Option<Matrix>,
}

/// A named view of one parameter or statistics tensor.
#[derive(Debug, PartialEq)]
pub struct NamedTensor<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: &'a [f64],
    pub norm_kind: Option<NormKind>,
    pub modality: Option<&'static str>,
    pub trainable: bool,
}

impl Model {
    /// Builds the network with deterministic initialization from
    /// `config.init_seed`.
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut convs = Vec::with_capacity(config.widths.len());
        let mut norms = Vec::with_capacity(config.widths.len());
        let mut in_c = config.in_channels;
        for &width in &config.widths {
            convs.push(Conv3x3::new(in_c, width, &mut rng));
            norms.push(NormLayer::new(width, config.norm_config(config.backbone_norm, true))?);
            in_c = width;
        }
        let head = NormLayer::new(
            config.embedding_dim,
            config.norm_config(config.head_norm, config.head_bias),
        )?;
        let classifier_data = (0..config.num_classes * config.embedding_dim)
            .map(|_| 0.01 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let classifier = Matrix::from_vec(config.num_classes, config.embedding_dim, classifier_data)?;
        Ok(Self {
            config,
            convs,
            norms,
            head,
            classifier,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn convs(&self) -> &[Conv3x3] {
        &self.convs
    }

    pub fn convs_mut(&mut self) -> &mut [Conv3x3] {
        &mut self.convs
    }

    pub fn norms(&self) -> &[NormLayer] {
        &self.norms
    }

    pub fn norms_mut(&mut self) -> &mut [NormLayer] {
        &mut self.norms
    }

    pub fn head(&self) -> &NormLayer {
        &self.head
    }

    pub fn head_mut(&mut self) -> &mut NormLayer {
        &mut self.head
    }

    pub fn classifier(&self) -> &Matrix {
        &self.classifier
    }

    pub fn classifier_mut(&mut self) -> &mut Matrix {
        &mut self.classifier
    }

    fn check_input(&self, x: &Tensor4) -> Result<()> {
        let d = x.dims();
        if (d.c, d.h, d.w) != (self.config.in_channels, self.config.input_hw.0, self.config.input_hw.1) {
            return Err(Error::Shape(format!(
                "model expects (N, {}, {}, {}) input, got {d}",
                self.config.in_channels, self.config.input_hw.0, self.config.input_hw.1
            )));
        }
        Ok(())
    }

    /// Training-mode forward pass with batch statistics. Pure: running
    /// statistics are only updated by [`commit_running_stats`](Self::commit_running_stats).
    pub fn forward_train(&self, x: &Tensor4, tags: &[ModalityTag]) -> Result<ForwardCache> {
        self.check_input(x)?;
        let stages = self.convs.len();
        let mut cache_inputs = Vec::with_capacity(stages);
        let mut conv_outputs = Vec::with_capacity(stages);
        let mut norm_caches = Vec::with_capacity(stages);
        let mut norm_outputs = Vec::with_capacity(stages);
        let mut h = x.clone();
        for (conv, norm) in self.convs.iter().zip(&self.norms) {
            let c = conv.forward(&h)?;
            let (y, nc) = norm.normalize_train(&c, tags)?;
            let next = avg_pool2(&relu(&y))?;
            cache_inputs.push(h);
            conv_outputs.push(c);
            norm_caches.push(nc);
            norm_outputs.push(y);
            h = next;
        }
        let pooled_dims = h.dims();
        let pooled = h.global_avg_pool()?.into_tensor();
        let (emb, head_cache) = self.head.normalize_train(&pooled, tags)?;
        Ok(ForwardCache {
            stage_inputs: cache_inputs,
            conv_outputs,
            norm_caches,
            norm_outputs,
            pooled_dims,
            head_cache,
            embeddings: Matrix::from(emb),
        })
    }

    /// Folds the batch statistics of a training forward pass into every norm
    /// layer's running averages.
    pub fn commit_running_stats(&mut self, cache: &ForwardCache) -> Result<()> {
        for (norm, nc) in self.norms.iter_mut().zip(&cache.norm_caches) {
            norm.commit_batch_stats(nc)?;
        }
        self.head.commit_batch_stats(&cache.head_cache)
    }

    /// Inference-mode embeddings from running statistics.
    pub fn forward_eval(&self, x: &Tensor4, tags: Option<&[ModalityTag]>) -> Result<Matrix> {
        self.check_input(x)?;
        let mut h = x.clone();
        for (conv, norm) in self.convs.iter().zip(&self.norms) {
            let c = conv.forward(&h)?;
            let y = norm.forward_eval(&c, tags)?;
            h = avg_pool2(&relu(&y))?;
        }
        let pooled = h.global_avg_pool()?.into_tensor();
        Ok(Matrix::from(self.head.forward_eval(&pooled, tags)?))
    }

    /// Embeds a batch. Training mode normalizes with batch statistics (without
    /// updating the running averages) and also returns classifier logits.
    pub fn embed(&self, batch: &ModalityBatch, mode: Mode) -> Result<Embedding> {
        match mode {
            Mode::Eval => Ok(Embedding {
                embeddings: self.forward_eval(&batch.images, Some(&batch.tags))?,
                logits: None,
            }),
            Mode::Train => {
                let cache = self.forward_train(&batch.images, &batch.tags)?;
                let logits = cache.embeddings.matmul_transposed(&self.classifier)?;
                Ok(Embedding {
                    embeddings: cache.embeddings,
                    logits: Some(logits),
                })
            }
        }
    }

    /// Back-propagates `dL/d(embeddings)` through the network. The classifier
    /// gradient is supplied by the loss and passed through unchanged.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_embeddings: &Matrix,
        grad_classifier: Matrix,
    ) -> Result<ModelGrads> {
        let d = cache.embeddings.rows();
        if grad_embeddings.rows() != d || grad_embeddings.cols() != self.config.embedding_dim {
            return Err(Error::Shape("embedding gradient shape mismatch".into()));
        }
        let (g_pooled, head) = self
            .head
            .backward(&cache.head_cache, &grad_embeddings.clone().into_tensor())?;

        // Global average pooling backward: spread evenly over H×W.
        let pd = cache.pooled_dims;
        let hw = pd.spatial() as f64;
        let mut g = Tensor4::zeros(pd);
        for n in 0..pd.n {
            for c in 0..pd.c {
                let v = g_pooled.get(n, c, 0, 0) / hw;
                g.plane_mut(n, c).fill(v);
            }
        }

        let stages = self.convs.len();
        let mut conv_grads = vec![Vec::new(); stages];
        let mut norm_grads = Vec::with_capacity(stages);
        for s in (0..stages).rev() {
            let y = &cache.norm_outputs[s];
            let g_relu = avg_pool2_backward(&g, y.dims());
            let g_norm = relu_backward(y, &g_relu);
            let (g_conv, ng) = self.norms[s].backward(&cache.norm_caches[s], &g_norm)?;
            let (g_in, gw) = self.convs[s].backward(&cache.stage_inputs[s], &g_conv)?;
            conv_grads[s] = gw;
            norm_grads.push(ng);
            g = g_in;
        }
        norm_grads.reverse();
        Ok(ModelGrads {
            convs: conv_grads,
            norms: norm_grads,
            head,
            classifier: grad_classifier,
        })
    }

    /// All tensors in checkpoint order: trainable parameters first (in the
    /// order [`trainable_slots`](Self::trainable_slots) and
    /// [`ModelGrads::flatten`] use), then running statistics.
    pub fn named_tensors(&self) -> Vec<NamedTensor<'_>> {
        let mut out = Vec::new();
        for (s, conv) in self.convs.iter().enumerate() {
            out.push(NamedTensor {
                name: format!("stage{}.conv.weight", s + 1),
                shape: vec![conv.out_channels, conv.in_channels, 3, 3],
                values: &conv.weight,
                norm_kind: None,
                modality: None,
                trainable: true,
            });
        }
        let layers: Vec<(String, &NormLayer)> = self
            .norms
            .iter()
            .enumerate()
            .map(|(s, n)| (format!("stage{}.norm", s + 1), n))
            .chain(std::iter::once(("head".to_string(), &self.head)))
            .collect();
        for (prefix, layer) in &layers {
            for (a, affine) in layer.affine().iter().enumerate() {
                let modality = affine_modality(layer.kind(), a);
                let suffix = modality.map(|m| format!(".{m}")).unwrap_or_default();
                for (what, values) in [("gamma", &affine.gamma), ("beta", &affine.beta)] {
                    out.push(NamedTensor {
                        name: format!("{prefix}.{what}{suffix}"),
                        shape: vec![values.len()],
                        values,
                        norm_kind: Some(layer.kind()),
                        modality,
                        trainable: true,
                    });
                }
            }
        }
        out.push(NamedTensor {
            name: "classifier.weight".into(),
            shape: vec![self.classifier.rows(), self.classifier.cols()],
            values: self.classifier.data(),
            norm_kind: None,
            modality: None,
            trainable: true,
        });
        for (prefix, layer) in &layers {
            for (key, stats) in layer.running_entries() {
                for (what, values) in [("running_mean", &stats.mean), ("running_var", &stats.var)] {
                    out.push(NamedTensor {
                        name: format!("{prefix}.{what}.{}", key.as_str()),
                        shape: vec![values.len()],
                        values,
                        norm_kind: Some(layer.kind()),
                        modality: Some(key.as_str()),
                        trainable: false,
                    });
                }
            }
        }
        out
    }

    /// Mutable access to the tensor named as in [`named_tensors`](Self::named_tensors).
    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        if name == "classifier.weight" {
            return Some(self.classifier.data_mut());
        }
        let (prefix, rest) = name.split_once('.')?;
        let layer = if prefix == "head" {
            &mut self.head
        } else {
            let s: usize = prefix.strip_prefix("stage")?.parse().ok()?;
            if let Some(r) = rest.strip_prefix("conv.") {
                if r != "weight" {
                    return None;
                }
                return Some(&mut self.convs.get_mut(s.checked_sub(1)?)?.weight);
            }
            let rest2 = rest.strip_prefix("norm.")?;
            let layer = self.norms.get_mut(s.checked_sub(1)?)?;
            return norm_tensor_mut(layer, rest2);
        };
        norm_tensor_mut(layer, rest)
    }

    /// Trainable parameters for the optimizer; normalization parameters are
    /// exempt from weight decay.
    pub fn trainable_slots(&mut self) -> Vec<ParamSlot<'_>> {
        let mut slots = Vec::new();
        for conv in &mut self.convs {
            slots.push(ParamSlot {
                values: &mut conv.weight,
                decay: true,
            });
        }
        for layer in self.norms.iter_mut().chain(std::iter::once(&mut self.head)) {
            for affine in layer.affine_mut() {
                slots.push(ParamSlot {
                    values: &mut affine.gamma,
                    decay: false,
                });
                slots.push(ParamSlot {
                    values: &mut affine.beta,
                    decay: false,
                });
            }
        }
        slots.push(ParamSlot {
            values: self.classifier.data_mut(),
            decay: true,
        });
        slots
    }
}

fn affine_modality(kind: NormKind, slot: usize) -> Option<&'static str> {
    match kind {
        NormKind::MbnSpecific => Some(ModalityTag::ALL[slot].as_str()),
        _ => None,
    }
}

fn norm_tensor_mut<'a>(layer: &'a mut NormLayer, rest: &str) -> Option<&'a mut [f64]> {
    let (what, key) = match rest.split_once('.') {
        Some((w, k)) => (w, Some(k)),
        None => (rest, None),
    };
    match what {
        "gamma" | "beta" => {
            let slot = match (layer.kind(), key) {
                (NormKind::MbnSpecific, Some(k)) => k.parse::<ModalityTag>().ok()?.index(),
                (NormKind::MbnSpecific, None) => return None,
                (_, None) => 0,
                (_, Some(_)) => return None,
            };
            let affine = layer.affine_mut().get_mut(slot)?;
            Some(if what == "gamma" {
                &mut affine.gamma
            } else {
                &mut affine.beta
            })
        }
        "running_mean" | "running_var" => {
            let key: StatsKey = key?.parse().ok()?;
            let stats = layer.running_stats_mut(key)?;
            Some(if what == "running_mean" {
                &mut stats.mean
            } else {
                &mut stats.var
            })
        }
        _ => None,
    }
}

impl ModelGrads {
    /// Gradients in [`Model::trainable_slots`] order.
    pub fn flatten(self) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = self.convs;
        for g in self.norms.into_iter().chain(std::iter::once(self.head)) {
            for (gamma, beta) in g.gamma.into_iter().zip(g.beta) {
                out.push(gamma);
                out.push(beta);
            }
        }
        out.push(self.classifier.data().to_vec());
        out
    }
}
