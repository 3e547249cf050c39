//! Training losses with analytic gradients.
//!
//! * softmax cross-entropy on classifier logits,
//! * batch-hard triplet loss on Euclidean embedding distances,
//! * classification-form circle loss on cosine similarities between
//!   embeddings and class weight vectors.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossKind {
    Circle,
    SoftmaxTriplet,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Circle => "circle",
            LossKind::SoftmaxTriplet => "softmax_triplet",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace(['-', '+'], "_").as_str() {
            "circle" => Ok(LossKind::Circle),
            "softmax_triplet" | "softmax_plus_triplet" => Ok(LossKind::SoftmaxTriplet),
            other => Err(Error::Config(format!("unknown loss `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub kind: LossKind,
    pub triplet_margin: f64,
    pub circle_margin: f64,
    pub circle_scale: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::Circle,
            triplet_margin: 0.3,
            circle_margin: 0.25,
            circle_scale: 64.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.triplet_margin >= 0.0 && self.circle_margin >= 0.0 && self.circle_scale > 0.0) {
            return Err(Error::Config("loss margins must be >= 0 and scale > 0".into()));
        }
        Ok(())
    }
}

/// Value and gradients of the configured training loss.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub total: f64,
    /// Named components, e.g. `softmax` and `triplet`.
    pub parts: Vec<(&'static str, f64)>,
    pub grad_embeddings: Matrix,
    pub grad_classifier: Matrix,
}

/// Evaluates the configured loss on a batch of embeddings.
pub fn compute_loss(
    config: &LossConfig,
    embeddings: &Matrix,
    classifier: &Matrix,
    labels: &[usize],
) -> Result<LossOutput> {
    match config.kind {
        LossKind::Circle => {
            let (loss, grad_embeddings, grad_classifier) = circle_loss(
                embeddings,
                classifier,
                labels,
                config.circle_margin,
                config.circle_scale,
            )?;
            Ok(LossOutput {
                total: loss,
                parts: vec![("circle", loss)],
                grad_embeddings,
                grad_classifier,
            })
        }
        LossKind::SoftmaxTriplet => {
            let logits = embeddings.matmul_transposed(classifier)?;
            let (ce, d_logits) = softmax_loss(&logits, labels)?;
            let (tri, d_tri) = triplet_loss(embeddings, labels, config.triplet_margin)?;

            let mut grad_embeddings = d_tri;
            let mut grad_classifier = Matrix::zeros(classifier.rows(), classifier.cols());
            for n in 0..embeddings.rows() {
                for k in 0..classifier.rows() {
                    let g = d_logits.get(n, k);
                    if g == 0.0 {
                        continue;
                    }
                    for (e, &w) in grad_embeddings.row_mut(n).iter_mut().zip(classifier.row(k)) {
                        *e += g * w;
                    }
                    for (wg, &e) in grad_classifier.row_mut(k).iter_mut().zip(embeddings.row(n)) {
                        *wg += g * e;
                    }
                }
            }
            Ok(LossOutput {
                total: ce + tri,
                parts: vec![("softmax", ce), ("triplet", tri)],
                grad_embeddings,
                grad_classifier,
            })
        }
    }
}

fn check_labels(rows: usize, labels: &[usize], classes: Option<usize>) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::Shape(format!("{} labels for {rows} rows", labels.len())));
    }
    if let Some(classes) = classes {
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Shape(format!("label {bad} out of range for {classes} classes")));
        }
    }
    if rows == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    Ok(())
}

/// Mean cross-entropy; gradient `(softmax − onehot) / N`.
pub fn softmax_loss(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    check_labels(logits.rows(), labels, Some(logits.cols()))?;
    let n = logits.rows() as f64;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    let mut total = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - row[label];
        for (g, &v) in grad.row_mut(r).iter_mut().zip(row) {
            *g = (v - lse).exp() / n;
        }
        grad.row_mut(r)[label] -= 1.0 / n;
    }
    Ok((total / n, grad))
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Batch-hard triplet loss: for each anchor, the farthest positive and the
/// closest negative, `max(0, d_ap − d_an + margin)`, averaged over anchors
/// that have both. Ties resolve to the lowest index. The distance gradient at
/// zero distance is taken as zero.
pub fn triplet_loss(embeddings: &Matrix, labels: &[usize], margin: f64) -> Result<(f64, Matrix)> {
    check_labels(embeddings.rows(), labels, None)?;
    let rows = embeddings.rows();
    let first = labels[0];
    if labels.iter().all(|&l| l == first) {
        return Err(Error::DegenerateBatch("triplet loss needs two identities".into()));
    }

    let mut dist = vec![0.0; rows * rows];
    for i in 0..rows {
        for j in i + 1..rows {
            let d = euclidean(embeddings.row(i), embeddings.row(j));
            dist[i * rows + j] = d;
            dist[j * rows + i] = d;
        }
    }

    let mut triplets = Vec::with_capacity(rows);
    for a in 0..rows {
        let mut pos: Option<usize> = None;
        let mut neg: Option<usize> = None;
        for j in 0..rows {
            if j == a {
                continue;
            }
            let d = dist[a * rows + j];
            if labels[j] == labels[a] {
                if pos.is_none_or(|p| d > dist[a * rows + p]) {
                    pos = Some(j);
                }
            } else if neg.is_none_or(|q| d < dist[a * rows + q]) {
                neg = Some(j);
            }
        }
        if let (Some(p), Some(q)) = (pos, neg) {
            triplets.push((a, p, q));
        }
    }
    if triplets.is_empty() {
        return Err(Error::DegenerateBatch("no anchor has both a positive and a negative".into()));
    }

    let count = triplets.len() as f64;
    let mut total = 0.0;
    let mut grad = Matrix::zeros(rows, embeddings.cols());
    for &(a, p, q) in &triplets {
        let (dap, dan) = (dist[a * rows + p], dist[a * rows + q]);
        let value = dap - dan + margin;
        if value <= 0.0 {
            continue;
        }
        total += value;
        // d(dap)/d(e_a) = (e_a − e_p)/dap ; d(dan)/d(e_a) = (e_a − e_q)/dan
        let mut accumulate = |other: usize, d: f64, sign: f64| {
            if d == 0.0 {
                return;
            }
            let k = sign / (d * count);
            for c in 0..embeddings.cols() {
                let diff = embeddings.get(a, c) - embeddings.get(other, c);
                grad.row_mut(a)[c] += k * diff;
                grad.row_mut(other)[c] -= k * diff;
            }
        };
        accumulate(p, dap, 1.0);
        accumulate(q, dan, -1.0);
    }
    Ok((total / count, grad))
}

fn l2_normalize_rows(m: &Matrix, what: &str) -> Result<(Matrix, Vec<f64>)> {
    let mut out = m.clone();
    let mut norms = Vec::with_capacity(m.rows());
    for r in 0..m.rows() {
        let norm = m.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::Normalization(format!("{what} row {r}")));
        }
        for v in out.row_mut(r) {
            *v /= norm;
        }
        norms.push(norm);
    }
    Ok((out, norms))
}

/// Classification-form circle loss.
///
/// With `s_p` the cosine to the true class weight and `s_n` the cosines to
/// the others, the per-sample loss is
/// `log(1 + Σ_n exp(γ·α_n·(s_n − m)) · exp(−γ·α_p·(s_p − 1 + m)))`,
/// `α_p = [1 + m − s_p]₊`, `α_n = [s_n + m]₊`. The returned gradients
/// differentiate through `α_p` and `α_n` as well. Returns the batch mean and
/// its gradients with respect to the embeddings and the class weights.
pub fn circle_loss(
    embeddings: &Matrix,
    class_weights: &Matrix,
    labels: &[usize],
    margin: f64,
    scale: f64,
) -> Result<(f64, Matrix, Matrix)> {
    check_labels(embeddings.rows(), labels, Some(class_weights.rows()))?;
    if embeddings.cols() != class_weights.cols() {
        return Err(Error::Shape(format!(
            "embedding dim {} vs class weight dim {}",
            embeddings.cols(),
            class_weights.cols()
        )));
    }
    let (x_hat, x_norm) = l2_normalize_rows(embeddings, "embedding")?;
    let (w_hat, w_norm) = l2_normalize_rows(class_weights, "class weight")?;
    let cos = x_hat.matmul_transposed(&w_hat)?;
    let n = embeddings.rows() as f64;
    let classes = class_weights.rows();

    let mut total = 0.0;
    // dL/d cos
    let mut d_cos = Matrix::zeros(embeddings.rows(), classes);
    let mut logits = vec![0.0; classes];
    let mut d_logit_d_cos = vec![0.0; classes];
    for (r, &label) in labels.iter().enumerate() {
        for k in 0..classes {
            let s = cos.get(r, k);
            if k == label {
                let alpha = (1.0 + margin - s).max(0.0);
                logits[k] = scale * alpha * (s - (1.0 - margin));
                d_logit_d_cos[k] = if alpha > 0.0 { scale * 2.0 * (1.0 - s) } else { 0.0 };
            } else {
                let alpha = (s + margin).max(0.0);
                logits[k] = scale * alpha * (s - margin);
                d_logit_d_cos[k] = if alpha > 0.0 { scale * 2.0 * s } else { 0.0 };
            }
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logits.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - logits[label];
        for k in 0..classes {
            let p = (logits[k] - lse).exp();
            let d_logit = (p - if k == label { 1.0 } else { 0.0 }) / n;
            d_cos.set(r, k, d_logit * d_logit_d_cos[k]);
        }
    }

    // cos = x̂·ŵ ; ∂cos/∂x = (ŵ − cos·x̂)/‖x‖ ; ∂cos/∂w = (x̂ − cos·ŵ)/‖w‖
    let dim = embeddings.cols();
    let mut grad_x = Matrix::zeros(embeddings.rows(), dim);
    let mut grad_w = Matrix::zeros(classes, dim);
    for r in 0..embeddings.rows() {
        for k in 0..classes {
            let g = d_cos.get(r, k);
            if g == 0.0 {
                continue;
            }
            let c = cos.get(r, k);
            for j in 0..dim {
                let (xj, wj) = (x_hat.get(r, j), w_hat.get(k, j));
                grad_x.row_mut(r)[j] += g * (wj - c * xj) / x_norm[r];
                grad_w.row_mut(k)[j] += g * (xj - c * wj) / w_norm[k];
            }
        }
    }
    Ok((total / n, grad_x, grad_w))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_classes() {
        let logits = Matrix::zeros(3, 5);
        let (loss, grad) = softmax_loss(&logits, &[0, 3, 4]).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-14);
        let row_sums: Vec<f64> = (0..3).map(|r| grad.row(r).iter().sum()).collect();
        assert!(row_sums.iter().all(|s| s.abs() < 1e-15));
    }

    #[test]
    fn confident_logits_drive_loss_to_zero() {
        let mut prev = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0, 50.0] {
            let logits = Matrix::from_rows(&[vec![margin, 0.0, 0.0]]).unwrap();
            let (loss, _) = softmax_loss(&logits, &[0]).unwrap();
            assert!(loss < prev);
            prev = loss;
        }
        assert!(prev < 1e-20);
    }

    #[test]
    fn identical_embeddings_cost_the_margin() {
        let e = Matrix::from_rows(&vec![vec![0.5, -1.0, 2.0]; 4]).unwrap();
        let (loss, grad) = triplet_loss(&e, &[0, 0, 1, 1], 0.3).unwrap();
        assert!((loss - 0.3).abs() < 1e-15);
        assert!(grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn separated_clusters_cost_nothing() {
        let e = Matrix::from_rows(&[
            vec![0.0, 0.0],
            vec![0.1, 0.0],
            vec![10.0, 10.0],
            vec![10.0, 10.1],
        ])
        .unwrap();
        let (loss, grad) = triplet_loss(&e, &[0, 0, 1, 1], 0.3).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn triplet_needs_two_identities() {
        let e = Matrix::zeros(3, 2);
        assert!(matches!(
            triplet_loss(&e, &[1, 1, 1], 0.3),
            Err(Error::DegenerateBatch(_))
        ));
    }

    #[test]
    fn saturated_circle_loss_vanishes() {
        let w = Matrix::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        let x = Matrix::from_rows(&[vec![2.0, 0.0]]).unwrap();
        let mut prev = f64::INFINITY;
        for scale in [16.0, 64.0, 256.0, 1024.0] {
            let (loss, _, _) = circle_loss(&x, &w, &[0], 0.25, scale).unwrap();
            assert!(loss < prev);
            prev = loss;
        }
        assert!(prev < 1e-20);
    }

    #[test]
    fn circle_rejects_zero_vectors() {
        let w = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let x = Matrix::from_rows(&[vec![2.0, 1.0]]).unwrap();
        assert!(matches!(
            circle_loss(&x, &w, &[0], 0.25, 64.0),
            Err(Error::Normalization(_))
        ));
        assert!(matches!(
            circle_loss(&Matrix::zeros(1, 2), &Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap(), &[0], 0.25, 64.0),
            Err(Error::Normalization(_))
        ));
    }

    #[test]
    fn loss_kind_parsing() {
        assert_eq!("circle".parse::<LossKind>().unwrap(), LossKind::Circle);
        assert_eq!("softmax+triplet".parse::<LossKind>().unwrap(), LossKind::SoftmaxTriplet);
        assert!("hinge".parse::<LossKind>().is_err());
    }
}
