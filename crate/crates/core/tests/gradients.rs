mod common;

use common::*;
use modnorm::model::loss::{circle_loss, softmax_loss, triplet_loss};
use modnorm::model::LossKind;
use modnorm::norm::{modality_indices, ModalityTag, NormConfig, NormKind, NormLayer};
use modnorm::tensor::{Dims4, Matrix};

const NORM_TOL: f64 = 1e-4;
const MODEL_TOL: f64 = 1e-3;

#[test]
fn norm_layers_match_finite_differences() {
    for kind in NormKind::ALL {
        for bias in [true, false] {
            for seed in 0..3 {
                let worst = check_norm_layer(kind, bias, seed);
                assert!(worst < NORM_TOL, "{kind} bias={bias} seed={seed}: {worst:e}");
            }
        }
    }
}

#[test]
fn input_gradient_sums_to_zero_per_group() {
    let dims = Dims4::new(6, 2, 2, 2);
    let mut r = rng(3);
    let x = normal_tensor(dims, &mut r);
    let g = normal_tensor(dims, &mut r);
    let tags = alternating_tags(6);
    for kind in NormKind::ALL {
        let layer = randomized_layer(kind, true, 2, 11);
        let (_, cache) = layer.normalize_train(&x, &tags).unwrap();
        let (dx, _) = layer.backward(&cache, &g).unwrap();
        let groups: Vec<Vec<usize>> = if kind.is_modality_aware() {
            ModalityTag::ALL.iter().map(|&t| modality_indices(&tags, t)).collect()
        } else {
            vec![(0..6).collect()]
        };
        for group in groups {
            for c in 0..2 {
                let s: f64 = group.iter().flat_map(|&n| dx.plane(n, c).to_vec()).sum();
                assert!(s.abs() < 1e-12, "{kind} channel {c}: {s:e}");
            }
        }
    }
}

#[test]
fn tied_specific_gradients_sum_to_shared() {
    let dims = Dims4::new(4, 3, 2, 2);
    let mut r = rng(8);
    let x = normal_tensor(dims, &mut r);
    let g = normal_tensor(dims, &mut r);
    let tags = alternating_tags(4);
    let shared = randomized_layer(NormKind::MbnShared, true, 3, 21);
    let mut specific = NormLayer::new(3, NormConfig::new(NormKind::MbnSpecific)).unwrap();
    specific
        .tie_parameters(&shared.affine()[0].gamma, &shared.affine()[0].beta)
        .unwrap();

    let (_, cs) = shared.normalize_train(&x, &tags).unwrap();
    let (_, cp) = specific.normalize_train(&x, &tags).unwrap();
    let (dxs, gs) = shared.backward(&cs, &g).unwrap();
    let (dxp, gp) = specific.backward(&cp, &g).unwrap();
    assert_eq!(dxs, dxp);
    for c in 0..3 {
        assert!((gp.gamma[0][c] + gp.gamma[1][c] - gs.gamma[0][c]).abs() < 1e-12);
        assert!((gp.beta[0][c] + gp.beta[1][c] - gs.beta[0][c]).abs() < 1e-12);
    }
}

#[test]
fn softmax_gradient() {
    let mut r = rng(1);
    let logits = normal_matrix(5, 4, &mut r);
    let labels = [0, 3, 1, 1, 2];
    let (_, grad) = softmax_loss(&logits, &labels).unwrap();
    let worst = check_gradient(&mut logits.data().to_vec(), grad.data(), |v| {
        softmax_loss(&Matrix::from_vec(5, 4, v.to_vec()).unwrap(), &labels).unwrap().0
    });
    assert!(worst < NORM_TOL, "{worst:e}");
}

#[test]
fn triplet_gradient() {
    let mut r = rng(2);
    let emb = normal_matrix(8, 4, &mut r);
    let labels = [0, 0, 1, 1, 2, 2, 3, 3];
    let (_, grad) = triplet_loss(&emb, &labels, 0.3).unwrap();
    let worst = check_gradient(&mut emb.data().to_vec(), grad.data(), |v| {
        triplet_loss(&Matrix::from_vec(8, 4, v.to_vec()).unwrap(), &labels, 0.3)
            .unwrap()
            .0
    });
    assert!(worst < NORM_TOL, "{worst:e}");
}

#[test]
fn circle_gradient() {
    let mut r = rng(3);
    let emb = normal_matrix(6, 5, &mut r);
    let weights = normal_matrix(4, 5, &mut r);
    let labels = [0, 1, 2, 3, 0, 2];
    for (m, s) in [(0.25, 64.0), (0.4, 8.0)] {
        let (_, de, dw) = circle_loss(&emb, &weights, &labels, m, s).unwrap();
        let we = check_gradient(&mut emb.data().to_vec(), de.data(), |v| {
            circle_loss(&Matrix::from_vec(6, 5, v.to_vec()).unwrap(), &weights, &labels, m, s)
                .unwrap()
                .0
        });
        let ww = check_gradient(&mut weights.data().to_vec(), dw.data(), |v| {
            circle_loss(&emb, &Matrix::from_vec(4, 5, v.to_vec()).unwrap(), &labels, m, s)
                .unwrap()
                .0
        });
        assert!(we < NORM_TOL && ww < NORM_TOL, "m={m} s={s}: {we:e} {ww:e}");
    }
}

#[test]
fn end_to_end_model_gradient() {
    let mut r = rng(9);
    let x = normal_tensor(Dims4::new(8, 2, 4, 4), &mut r);
    let tags = alternating_tags(8);
    let labels = [0, 0, 1, 1, 2, 2, 0, 1];
    for (backbone, head, loss) in [
        (NormKind::Bn, NormKind::Bn, LossKind::Circle),
        (NormKind::MbnShared, NormKind::MbnShared, LossKind::SoftmaxTriplet),
        (NormKind::MbnShared, NormKind::MbnSpecific, LossKind::Circle),
        (NormKind::MbnSpecific, NormKind::Bn, LossKind::SoftmaxTriplet),
    ] {
        let model = tiny_model(x.dims(), &[3, 4], backbone, head, loss);
        for (name, worst) in model_gradient_errors(&model, &x, &tags, &labels) {
            assert!(worst < MODEL_TOL, "{backbone}/{head}/{loss:?} {name}: {worst:e}");
        }
    }
}
