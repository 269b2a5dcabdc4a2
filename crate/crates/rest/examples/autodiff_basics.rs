//! Reverse-mode autodiff on the minimal tensor engine, checked against
//! central finite differences.
//!
//! Run with: cargo run --release --example autodiff_basics

use rest::gradcheck::{finite_diff, rel_err_norm};
use rest::rng::Rng;
use rest::tensor::Tensor;

fn main() -> rest::error::Result<()> {
    let mut rng = Rng::new(7);

    // A small composite: loss = mean((gelu(x W) - y)^2).
    let x = Tensor::randn(&[4, 6], &mut rng);
    let w = Tensor::randn(&[6, 3], &mut rng).scale(0.5).requiring_grad();
    let y = Tensor::randn(&[4, 3], &mut rng);

    let loss = x.matmul(&w)?.gelu().mse(&y)?;
    println!("loss = {:.6}", loss.item());

    loss.backward()?;
    let analytic = w.grad().expect("w requires grad");

    // Independent oracle: re-evaluate the forward pass with each weight
    // nudged; no backward rules involved.
    let numeric = finite_diff(
        |ws| {
            let wp = Tensor::from_vec(&[6, 3], ws.to_vec()).unwrap();
            x.matmul(&wp).unwrap().gelu().mse(&y).unwrap().item()
        },
        w.data(),
        1e-3,
    );

    let err = rel_err_norm(&analytic, &numeric);
    println!("relative error (norm) vs finite differences = {err:.2e}");
    assert!(err < 1e-2, "gradient mismatch");

    // Gradients accumulate across backward calls until zeroed.
    w.zero_grad();
    let l2 = x.matmul(&w)?.sum_all();
    l2.backward()?;
    println!("sum-of-output gradient row 0: {:?}", &w.grad().unwrap()[..3]);
    println!("ok");
    Ok(())
}
