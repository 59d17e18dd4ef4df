//! Reverse-mode gradients on a small graph, compared with finite differences.
use ctc_s2ut::numerics::finite_diff::{central_diff, max_rel_error, STEP};
use ctc_s2ut::numerics::{Graph, ParamStore, Tensor};

fn objective(x: &Tensor, w: &Tensor) -> ctc_s2ut::Result<(f64, Tensor)> {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let xv = g.input(x.clone());
    let wv = g.constant(w.clone());
    let h = g.matmul(xv, wv)?;
    let h = g.gelu(h);
    let lp = g.log_softmax(h, 1)?;
    let loss = g.sum_all(lp);
    let value = g.value(loss).data()[0];
    let grads = g.backward(loss, Tensor::scalar(1.0))?;
    Ok((value, grads.wrt(xv).unwrap().clone()))
}

fn main() -> ctc_s2ut::Result<()> {
    let x = Tensor::from_rows(&[vec![0.3, -1.2, 0.5], vec![1.1, 0.4, -0.7]])?;
    let w = Tensor::from_rows(&[vec![0.2, -0.4], vec![0.9, 0.1], vec![-0.3, 0.6]])?;
    let (value, grad) = objective(&x, &w)?;
    let numeric = central_diff(
        |v| objective(&Tensor::new(x.shape(), v.to_vec()).unwrap(), &w).unwrap().0,
        x.data(),
        STEP,
    );
    println!("objective {value:.6}");
    println!("analytic {:.6?}", grad.data());
    println!("numeric  {numeric:.6?}");
    println!("max relative error {:.2e}", max_rel_error(grad.data(), &numeric));
    Ok(())
}
