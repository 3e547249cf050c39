//! Cosine-similarity retrieval: CMC and mAP.

use std::cmp::Ordering;
use std::fmt;

use rayon::prelude::*;

use super::network::Model;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::norm::ModalityTag;
use crate::tensor::{exact_sum, Matrix};

/// Samples embedded per inference call.
const EVAL_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Direction {
    /// Infrared queries against a visible gallery.
    #[default]
    InfraredToVisible,
    VisibleToInfrared,
}

impl Direction {
    pub fn query_modality(self) -> ModalityTag {
        match self {
            Direction::InfraredToVisible => ModalityTag::Infrared,
            Direction::VisibleToInfrared => ModalityTag::Visible,
        }
    }

    pub fn gallery_modality(self) -> ModalityTag {
        self.query_modality().other()
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}->{}", self.query_modality(), self.gallery_modality())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    /// `cmc[r - 1]` is the rank-r match rate; one entry per gallery item.
    pub cmc: Vec<f64>,
    pub map: f64,
    pub per_query_ap: Vec<f64>,
}

impl RetrievalResult {
    /// Rank-r match rate, 1-based; ranks past the gallery size clamp to the last.
    pub fn rank(&self, r: usize) -> f64 {
        assert!(r >= 1, "ranks are 1-based");
        self.cmc[(r - 1).min(self.cmc.len() - 1)]
    }

    pub fn rank1(&self) -> f64 {
        self.rank(1)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    exact_sum(a.iter().zip(b).map(|(x, y)| x * y))
}

/// Cosine similarity; 0 when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let denom = (dot(a, a) * dot(b, b)).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        dot(a, b) / denom
    }
}

/// Gallery indices by descending cosine similarity to `query`, ties broken by
/// ascending index.
pub fn rank_gallery(query: &[f64], gallery: &Matrix) -> Vec<usize> {
    let sims: Vec<f64> = (0..gallery.rows()).map(|g| cosine(query, gallery.row(g))).collect();
    let mut order: Vec<usize> = (0..gallery.rows()).collect();
    order.sort_by(|&a, &b| {
        sims[b]
            .partial_cmp(&sims[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// CMC and mAP of a query set against a gallery, from embeddings and labels.
pub fn retrieval_metrics(
    queries: &Matrix,
    query_ids: &[usize],
    gallery: &Matrix,
    gallery_ids: &[usize],
) -> Result<RetrievalResult> {
    if queries.rows() != query_ids.len() || gallery.rows() != gallery_ids.len() {
        return Err(Error::Shape("label count differs from embedding rows".into()));
    }
    if queries.cols() != gallery.cols() {
        return Err(Error::Shape(format!(
            "query dim {} vs gallery dim {}",
            queries.cols(),
            gallery.cols()
        )));
    }
    if queries.rows() == 0 || gallery.rows() == 0 {
        return Err(Error::Protocol("empty query or gallery set".into()));
    }
    if let Some(&missing) = query_ids.iter().find(|id| !gallery_ids.contains(id)) {
        return Err(Error::Protocol(format!("query identity {missing} absent from gallery")));
    }

    let per_query: Vec<(usize, f64)> = (0..queries.rows())
        .into_par_iter()
        .map(|q| {
            let order = rank_gallery(queries.row(q), gallery);
            let mut first_hit = None;
            let mut hits = 0usize;
            let mut precision_sum = 0.0;
            for (pos, &g) in order.iter().enumerate() {
                if gallery_ids[g] == query_ids[q] {
                    hits += 1;
                    first_hit.get_or_insert(pos);
                    precision_sum += hits as f64 / (pos + 1) as f64;
                }
            }
            (first_hit.expect("identity checked above"), precision_sum / hits as f64)
        })
        .collect();

    let n = per_query.len() as f64;
    let mut first_hits = vec![0usize; gallery.rows()];
    for &(pos, _) in &per_query {
        first_hits[pos] += 1;
    }
    let mut cmc = Vec::with_capacity(gallery.rows());
    let mut cumulative = 0usize;
    for count in first_hits {
        cumulative += count;
        cmc.push(cumulative as f64 / n);
    }
    let per_query_ap: Vec<f64> = per_query.into_iter().map(|(_, ap)| ap).collect();
    let map = exact_sum(per_query_ap.iter().copied()) / n;
    Ok(RetrievalResult {
        cmc,
        map,
        per_query_ap,
    })
}

/// Inference-mode embeddings of every sample of `identities` in one modality,
/// identity-major, with their labels.
pub fn embed_modality(
    model: &Model,
    dataset: &Dataset,
    identities: &[usize],
    tag: ModalityTag,
) -> Result<(Matrix, Vec<usize>)> {
    let set = dataset.modality_set(identities, tag)?;
    let dim = model.config().embedding_dim;
    let mut data = Vec::with_capacity(set.len() * dim);
    for chunk in set.indices.chunks(EVAL_CHUNK) {
        let batch = dataset.batch(chunk)?;
        let emb = model.forward_eval(&batch.images, Some(&batch.tags))?;
        data.extend_from_slice(emb.data());
    }
    Ok((Matrix::from_vec(set.len(), dim, data)?, set.identities))
}

/// Cross-modality retrieval over the held-out identities.
pub fn evaluate_retrieval(
    model: &Model,
    dataset: &Dataset,
    identities: &[usize],
    direction: Direction,
) -> Result<RetrievalResult> {
    let (queries, query_ids) = embed_modality(model, dataset, identities, direction.query_modality())?;
    let (gallery, gallery_ids) = embed_modality(model, dataset, identities, direction.gallery_modality())?;
    retrieval_metrics(&queries, &query_ids, &gallery, &gallery_ids)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clone_gallery_is_perfect() {
        let q = Matrix::from_rows(&[vec![1.0, 0.2], vec![-0.3, 1.0], vec![0.5, -0.5]]).unwrap();
        let r = retrieval_metrics(&q, &[0, 1, 2], &q, &[0, 1, 2]).unwrap();
        assert_eq!(r.rank1(), 1.0);
        assert_eq!(r.map, 1.0);
        assert_eq!(r.cmc, vec![1.0; 3]);
    }

    #[test]
    fn orthogonal_single_match() {
        let g = Matrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        let q = Matrix::from_rows(&[vec![0.0, 0.0, 2.0], vec![3.0, 0.0, 0.0]]).unwrap();
        let r = retrieval_metrics(&q, &[2, 0], &g, &[0, 1, 2]).unwrap();
        assert_eq!(r.rank1(), 1.0);
    }

    #[test]
    fn hand_computed_ap() {
        // Query matches gallery 1 and 2; ranking is [0, 1, 3, 2].
        let g = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.9, 0.1], vec![-1.0, 0.0], vec![0.5, 0.5]]).unwrap();
        let q = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let r = retrieval_metrics(&q, &[7], &g, &[3, 7, 7, 4]).unwrap();
        assert_eq!(r.cmc, vec![0.0, 1.0, 1.0, 1.0]);
        let ap = (1.0 / 2.0 + 2.0 / 4.0) / 2.0;
        assert!((r.map - ap).abs() < 1e-15);
    }

    #[test]
    fn ties_break_by_gallery_index() {
        let g = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        assert_eq!(rank_gallery(&[2.0, 0.0], &g), vec![0, 1, 2]);
        assert_eq!(rank_gallery(&[0.0, 0.0], &g), vec![0, 1, 2]);
    }

    #[test]
    fn missing_identity_is_protocol_error() {
        let g = Matrix::from_rows(&[vec![1.0]]).unwrap();
        let err = retrieval_metrics(&g, &[1], &g, &[0]).unwrap_err();
        assert!(matches!(err, Error::Protocol(_)));
    }
}
