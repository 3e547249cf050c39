use modnorm::model::retrieval::retrieval_metrics;
use modnorm::tensor::Matrix;

fn main() -> modnorm::Result<()> {
    let query = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]])?;
    let gallery = Matrix::from_rows(&[
        vec![0.9, 0.1],
        vec![0.7, 0.7],
        vec![0.1, 0.9],
        vec![-1.0, 0.2],
    ])?;
    let result = retrieval_metrics(&query, &[0, 1], &gallery, &[0, 1, 0, 1])?;
    println!("CMC {:?}", result.cmc);
    println!("rank-1 {:.3}  mAP {:.3}", result.rank1(), result.map);
    println!("per-query AP {:?}", result.per_query_ap);
    Ok(())
}
