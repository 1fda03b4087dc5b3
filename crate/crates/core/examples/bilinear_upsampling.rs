//! The fixed bilinear deconvolution: kernel weights and a 2x upsampled ramp.

use fcn::ops::{bilinear_weights, default_deconv_kernel};
use fcn::{Net, NetSpec, NodeSpec, Tensor};

fn main() -> fcn::Result<()> {
    for f in [2, 3, 4] {
        println!(
            "factor {f}: k = {}, weights {:?}",
            default_deconv_kernel(f),
            bilinear_weights(f)
        );
    }

    let spec = NetSpec::new(vec![
        NodeSpec::input("data", 1),
        NodeSpec::deconv("up", 2, 1, false, "data"),
    ])?;
    let net = Net::<f64>::init(spec, 0)?;
    let ramp = Tensor::from_fn([1, 1, 3, 4], |[_, _, _, x]| x as f64);
    let y = net.forward(&ramp)?.into_output(0);
    // interior rows interpolate; the outer ones fade in from the zero border
    let row: Vec<f64> = (0..y.width())
        .map(|x| y.at(0, 0, y.height() / 2, x))
        .collect();
    println!("ramp [0, 1, 2, 3] -> {row:?}");
    Ok(())
}
