//! Finite-difference check of the backward pass through a whole skip net.

use fcn::gradcheck::{check_gradient, random_tensor};
use fcn::{zoo, Net};

fn main() -> fcn::Result<()> {
    // zero-initialized score layers would hide every gradient below them
    let spec = zoo::fcn_skip2(3)?;
    let init = Net::<f64>::init(spec.clone(), 5)?;
    let params = init
        .params()
        .iter()
        .enumerate()
        .map(|(i, (k, v))| {
            let t = if init.is_learnable(k) {
                random_tensor(v.dims(), 100 + i as u64).map(|v| 0.3 * v)
            } else {
                v.clone()
            };
            (k.clone(), t)
        })
        .collect();
    let net = Net::with_params(spec, params)?;
    let x = random_tensor::<f64>([1, 3, 16, 16], 6);
    let mut tape = net.forward(&x)?;
    let r = random_tensor::<f64>(tape.output(0).dims(), 7);
    let grads = net.backward(&mut tape, &[("out", r.clone())])?;

    let objective = |x: &fcn::Tensor<f64>| net.forward(x).unwrap().output(0).dot(&r).unwrap();
    match check_gradient(&x, &grads.input, objective, 1e-6) {
        Ok(worst) => println!("input gradient: worst relative error {worst:.2e}"),
        Err(m) => println!(
            "input gradient mismatch at {}: {} vs {}",
            m.index, m.analytic, m.numeric
        ),
    }
    for (name, g) in &grads.params {
        println!(
            "  {name:<12} {:?} |g|max {:.3e}",
            g.dims(),
            g.data().iter().fold(0.0f64, |a, v| a.max(v.abs()))
        );
    }
    Ok(())
}
