// Reverse-mode autodiff on a tiny two-layer network, checked against
// central differences.
//
//   cargo run --example autograd

use attnlink::{Graph, Tensor};

fn loss_of(w1: &Tensor, w2: &Tensor, x: &Tensor) -> attnlink::Result<f64> {
    let g = Graph::new();
    let h = g.constant(x.clone()).matmul_t(g.constant(w1.clone()))?.relu();
    let y = h.matmul_t(g.constant(w2.clone()))?;
    Ok(y.mul(y)?.sum().value().item())
}

/// Returns the largest gap between analytic and numeric gradients.
pub fn run(_args: &[String]) -> attnlink::Result<f64> {
    let x = Tensor::from_rows(&[vec![0.5, -1.0, 2.0], vec![1.5, 0.25, -0.75]])?;
    let w1 = Tensor::from_rows(&[vec![0.1, 0.2, -0.3], vec![-0.4, 0.5, 0.6], vec![0.7, -0.8, 0.9], vec![0.3, 0.3, 0.3]])?;
    let w2 = Tensor::from_rows(&[vec![1.0, -1.0, 0.5, 0.25], vec![0.2, 0.4, -0.6, 0.8]])?;

    let g = Graph::new();
    let (p1, p2) = (g.param(w1.clone()), g.param(w2.clone()));
    let h = g.constant(x.clone()).matmul_t(p1)?.relu();
    let y = h.matmul_t(p2)?;
    let loss = y.mul(y)?.sum();
    g.backward(loss)?;
    println!("loss {:.6}  ({} graph nodes)", loss.value().item(), g.len());

    let step = 1e-6;
    let mut worst: f64 = 0.0;
    for (name, w, grad) in [("w1", &w1, g.grad(p1).unwrap()), ("w2", &w2, g.grad(p2).unwrap())] {
        for i in 0..w.len() {
            let mut up = w.clone();
            up.data_mut()[i] += step;
            let mut down = w.clone();
            down.data_mut()[i] -= step;
            let (lu, ld) = if name == "w1" {
                (loss_of(&up, &w2, &x)?, loss_of(&down, &w2, &x)?)
            } else {
                (loss_of(&w1, &up, &x)?, loss_of(&w1, &down, &x)?)
            };
            let numeric = (lu - ld) / (2.0 * step);
            worst = worst.max((numeric - grad.data()[i]).abs());
        }
        println!("d loss / d {name} = {:?}", grad.data());
    }
    println!("max |analytic - numeric| = {worst:.2e}");
    Ok(worst)
}

#[allow(dead_code)]
fn main() -> attnlink::Result<()> {
    run(&[]).map(|_| ())
}
