use modnorm::model::loss::{circle_loss, compute_loss, softmax_loss, triplet_loss};
use modnorm::model::{LossConfig, LossKind};
use modnorm::tensor::Matrix;

fn main() -> modnorm::Result<()> {
    let emb = Matrix::from_rows(&[
        vec![1.0, 0.1, 0.0],
        vec![0.9, 0.2, 0.1],
        vec![0.0, 1.0, 0.2],
        vec![0.1, 0.8, 0.0],
    ])?;
    let labels = [0, 0, 1, 1];
    let classifier = Matrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]])?;

    let logits = emb.matmul_transposed(&classifier)?;
    println!("softmax  {:.4}", softmax_loss(&logits, &labels)?.0);
    println!("triplet  {:.4}", triplet_loss(&emb, &labels, 0.3)?.0);
    for scale in [8.0, 32.0, 64.0] {
        println!("circle s={scale:<4} {:.4}", circle_loss(&emb, &classifier, &labels, 0.25, scale)?.0);
    }

    for kind in [LossKind::SoftmaxTriplet, LossKind::Circle] {
        let out = compute_loss(&LossConfig { kind, ..Default::default() }, &emb, &classifier, &labels)?;
        println!("{}: total {:.4} parts {:?}", kind.as_str(), out.total, out.parts);
    }
    Ok(())
}
