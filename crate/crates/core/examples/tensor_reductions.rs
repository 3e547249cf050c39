use modnorm::tensor::{exact_sum, Dims4, Matrix, Tensor4};

fn main() -> modnorm::Result<()> {
    // Naive left-to-right summation loses the small terms; exact_sum does not.
    let values = [1e16, 1.0, -1e16, 1.0];
    println!("naive sum {}  exact sum {}", values.iter().sum::<f64>(), exact_sum(values));

    let x = Tensor4::from_fn(Dims4::new(4, 2, 3, 3), |n, c, h, w| (n + 2 * c) as f64 + 0.1 * (h * 3 + w) as f64);
    let all: Vec<usize> = (0..4).collect();
    let mean = x.channel_mean(&all)?;
    let var = x.channel_var(&all, &mean)?;
    println!("channel means {mean:?}");
    println!("channel variances {var:?}");
    println!("mean over samples 0 and 2 {:?}", x.channel_mean(&[0, 2])?);

    let pooled = x.global_avg_pool()?;
    println!("pooled {}x{}: first row {:?}", pooled.rows(), pooled.cols(), pooled.row(0));

    let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]])?;
    let b = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]])?;
    println!("a · bᵀ = {:?}", a.matmul_transposed(&b)?.data());
    Ok(())
}
