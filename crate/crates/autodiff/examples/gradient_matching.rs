//! Differentiates a gradient-matching loss with respect to the input.
//!
//! A linear model `y = W x` with squared loss has a weight gradient that
//! depends on `x`. Matching that gradient against an observed one and
//! differentiating the mismatch back to `x` needs a derivative of a
//! derivative, which is what `Graph::derive` provides.

use autodiff::{finite_diff, max_rel_error, Bindings, Graph, Tensor};

fn main() -> autodiff::Result<()> {
    let mut g = Graph::new();
    let x = g.leaf("x", &[3, 1]);
    let w = g.constant(Tensor::new(vec![2, 3], vec![0.5, -1.0, 0.25, 1.5, 0.75, -0.5])?);
    let w_leaf = g.leaf("w", &[2, 3]);
    let target = g.constant(Tensor::new(vec![2, 1], vec![1.0, -1.0])?);

    // loss(w, x) = ||w x - t||^2, then its gradient in w.
    let wx = g.matmul(w_leaf, x)?;
    let r = g.sub(wx, target)?;
    let loss = g.dot(r, r)?;
    let grad_w = g.derive(loss, &[w_leaf])?[0];

    let truth = Tensor::new(vec![3, 1], vec![0.2, 0.9, 0.4])?;
    let w_val = g.const_value(w).unwrap().clone();
    let observed = g.eval(grad_w, &Bindings::new().with(w_leaf, &w_val).with(x, &truth))?;

    // mismatch(x) = ||grad_w(x) - observed||^2
    let obs = g.constant(observed);
    let diff = g.sub(grad_w, obs)?;
    let mismatch = g.dot(diff, diff)?;
    let dx = g.derive(mismatch, &[x])?[0];

    let guess = Tensor::new(vec![3, 1], vec![0.5, 0.5, 0.5])?;
    let base = Bindings::new().with(w_leaf, &w_val);
    let analytic = g.eval(dx, &base.clone().with(x, &guess))?;
    let numeric = finite_diff(|p| Ok(g.eval(mismatch, &base.clone().with(x, p))?.item()), &guess, 1e-6)?;
    println!("mismatch at guess  {:.6}", g.eval(mismatch, &base.clone().with(x, &guess))?.item());
    println!("d mismatch / dx    {:?}", analytic.data());
    println!("finite differences {:?}", numeric.data());
    println!("max rel error      {:.2e}", max_rel_error(&analytic, &numeric, 1e-8));

    // Plain gradient descent on x recovers the input. The mismatch is quartic
    // in x, so the step has to stay small.
    let mut cur = guess;
    for _ in 0..5000 {
        let d = g.eval(dx, &base.clone().with(x, &cur))?;
        cur = cur.zip_map(&d, |a, b| a - 0.005 * b)?;
    }
    println!("recovered x        {:?} (truth {:?})", cur.data(), truth.data());
    Ok(())
}
