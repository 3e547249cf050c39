#![allow(dead_code)]

use modnorm::model::loss::compute_loss;
use modnorm::model::retrieval::RetrievalResult;
use modnorm::model::{LossConfig, LossKind, Model, ModelConfig};
use modnorm::norm::{ModalityTag, NormConfig, NormKind, NormLayer};
use modnorm::tensor::{Dims4, Matrix, Tensor4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const FD_STEP: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_tensor(dims: Dims4, rng: &mut impl Rng) -> Tensor4 {
    Tensor4::from_fn(dims, |_, _, _, _| rng.sample(StandardNormal))
}

pub fn normal_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

pub fn normal_vec(len: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..len).map(|_| rng.sample(StandardNormal)).collect()
}

/// Alternating V, I, V, I, ...
pub fn alternating_tags(n: usize) -> Vec<ModalityTag> {
    (0..n)
        .map(|i| if i % 2 == 0 { ModalityTag::Visible } else { ModalityTag::Infrared })
        .collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Relative error with a small absolute floor for components near zero.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Five-point central difference of `f` with respect to `values[i]`,
/// restoring it after. Truncation error is O(h⁴).
pub fn central_diff(values: &mut [f64], i: usize, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let orig = values[i];
    let mut at = |k: f64| {
        values[i] = orig + k * FD_STEP;
        f(values)
    };
    let (p2, p1, m1, m2) = (at(2.0), at(1.0), at(-1.0), at(-2.0));
    values[i] = orig;
    (-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * FD_STEP)
}

/// Checks every component of `analytic` against central differences of `f`
/// around `values`; returns the worst relative error.
pub fn check_gradient(values: &mut [f64], analytic: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    assert_eq!(values.len(), analytic.len());
    let mut worst: f64 = 0.0;
    for i in 0..values.len() {
        let numeric = central_diff(values, i, &mut f);
        worst = worst.max(rel_err(analytic[i], numeric));
    }
    worst
}

pub fn randomized_layer(kind: NormKind, bias: bool, channels: usize, seed: u64) -> NormLayer {
    let mut rng = rng(seed);
    let mut layer = NormLayer::new(channels, NormConfig::new(kind).with_bias(bias)).unwrap();
    for affine in layer.affine_mut() {
        for g in &mut affine.gamma {
            *g = 0.5 + rng.random::<f64>();
        }
        if bias {
            affine.beta = normal_vec(channels, &mut rng);
        }
    }
    layer
}

pub fn probe_loss(layer: &NormLayer, x: &Tensor4, tags: &[ModalityTag], w: &[f64]) -> f64 {
    let (y, _) = layer.normalize_train(x, tags).unwrap();
    dot(y.data(), w)
}

pub fn check_norm_layer(kind: NormKind, bias: bool, seed: u64) -> f64 {
    let dims = Dims4::new(4, 3, 2, 2);
    let mut r = rng(seed + 100);
    let x = normal_tensor(dims, &mut r);
    let w = normal_vec(dims.len(), &mut r);
    let tags = alternating_tags(4);
    let layer = randomized_layer(kind, bias, 3, seed);

    let (_, cache) = layer.normalize_train(&x, &tags).unwrap();
    let grad_out = Tensor4::from_vec(dims, w.clone()).unwrap();
    let (dx, grads) = layer.backward(&cache, &grad_out).unwrap();

    let mut worst = check_gradient(&mut x.data().to_vec(), dx.data(), |v| {
        probe_loss(&layer, &Tensor4::from_vec(dims, v.to_vec()).unwrap(), &tags, &w)
    });
    for g in 0..layer.affine().len() {
        let mut gamma = layer.affine()[g].gamma.clone();
        worst = worst.max(check_gradient(&mut gamma, &grads.gamma[g], |v| {
            let mut l = layer.clone();
            l.affine_mut()[g].gamma.copy_from_slice(v);
            probe_loss(&l, &x, &tags, &w)
        }));
        let mut beta = layer.affine()[g].beta.clone();
        worst = worst.max(check_gradient(&mut beta, &grads.beta[g], |v| {
            let mut l = layer.clone();
            l.affine_mut()[g].beta.copy_from_slice(v);
            probe_loss(&l, &x, &tags, &w)
        }));
        if !bias {
            assert!(grads.beta[g].iter().all(|&b| b == 0.0));
        }
    }
    worst
}

pub fn tiny_model(input: Dims4, widths: &[usize], backbone: NormKind, head: NormKind, loss: LossKind) -> Model {
    Model::build(ModelConfig {
        in_channels: input.c,
        input_hw: (input.h, input.w),
        widths: widths.to_vec(),
        embedding_dim: *widths.last().unwrap(),
        num_classes: 3,
        backbone_norm: backbone,
        head_norm: head,
        loss: LossConfig {
            kind: loss,
            ..Default::default()
        },
        init_seed: 5,
        ..Default::default()
    })
    .unwrap()
}

pub fn model_loss(model: &Model, x: &Tensor4, tags: &[ModalityTag], labels: &[usize]) -> f64 {
    let cache = model.forward_train(x, tags).unwrap();
    compute_loss(&model.config().loss, &cache.embeddings, model.classifier(), labels)
        .unwrap()
        .total
}

/// Worst relative finite-difference error of every trainable tensor.
pub fn model_gradient_errors(model: &Model, x: &Tensor4, tags: &[ModalityTag], labels: &[usize]) -> Vec<(String, f64)> {
    let cache = model.forward_train(x, tags).unwrap();
    let out = compute_loss(&model.config().loss, &cache.embeddings, model.classifier(), labels).unwrap();
    let grads = model
        .backward(&cache, &out.grad_embeddings, out.grad_classifier)
        .unwrap()
        .flatten();
    let names: Vec<String> = model
        .named_tensors()
        .into_iter()
        .filter(|t| t.trainable)
        .map(|t| t.name)
        .collect();
    assert_eq!(names.len(), grads.len());
    names
        .into_iter()
        .zip(&grads)
        .map(|(name, analytic)| {
            let mut probe = model.clone();
            let mut values = probe.tensor_mut(&name).unwrap().to_vec();
            let worst = check_gradient(&mut values, analytic, |v| {
                probe.tensor_mut(&name).unwrap().copy_from_slice(v);
                model_loss(&probe, x, tags, labels)
            });
            (name, worst)
        })
        .collect()
}

/// Exhaustive ranking: position of each gallery item counted directly.
pub fn retrieval_oracle(q: &Matrix, qid: &[usize], g: &Matrix, gid: &[usize]) -> RetrievalResult {
    let cosine = |a: &[f64], b: &[f64]| {
        let d = (dot(a, a) * dot(b, b)).sqrt();
        if d == 0.0 { 0.0 } else { dot(a, b) / d }
    };
    let mut first = Vec::new();
    let mut aps = Vec::new();
    for i in 0..q.rows() {
        let sims: Vec<f64> = (0..g.rows()).map(|j| cosine(q.row(i), g.row(j))).collect();
        let position = |j: usize| {
            (0..g.rows())
                .filter(|&k| sims[k] > sims[j] || (sims[k] == sims[j] && k < j))
                .count()
        };
        let mut hits: Vec<usize> = (0..g.rows()).filter(|&j| gid[j] == qid[i]).map(position).collect();
        hits.sort_unstable();
        first.push(hits[0]);
        let ap: f64 = hits.iter().enumerate().map(|(k, &p)| (k + 1) as f64 / (p + 1) as f64).sum::<f64>()
            / hits.len() as f64;
        aps.push(ap);
    }
    let n = q.rows() as f64;
    let cmc = (0..g.rows())
        .map(|r| first.iter().filter(|&&p| p <= r).count() as f64 / n)
        .collect();
    RetrievalResult {
        cmc,
        map: aps.iter().sum::<f64>() / n,
        per_query_ap: aps,
    }
}

pub fn random_retrieval_instance(seed: u64) -> (Matrix, Vec<usize>, Matrix, Vec<usize>) {
    let mut r = rng(seed);
    let ids = 4;
    let q = normal_matrix(6, 5, &mut r);
    let g = normal_matrix(20, 5, &mut r);
    let mut gid: Vec<usize> = (0..20).map(|j| j % ids).collect();
    gid.swap(0, r.random_range(0..20));
    let qid = (0..6).map(|_| r.random_range(0..ids)).collect();
    (q, qid, g, gid)
}

