//! Convolutionalize the toy classifier: same logits on a 16x16 patch, a
//! dense score map on anything larger.

use fcn::gradcheck::random_tensor;
use fcn::stitch::convolutionalized;
use fcn::{zoo, Net};

fn main() -> fcn::Result<()> {
    let classifier = Net::<f64>::init(zoo::build_toy_classifier(5)?, 1)?;
    let conv = convolutionalized(&classifier)?;

    let patch = random_tensor::<f64>([1, 3, zoo::PATCH, zoo::PATCH], 2);
    let a = classifier.forward(&patch)?.into_output(0);
    let b = conv.forward(&patch)?.into_output(0);
    println!(
        "native patch: logits {:?} vs {:?}, max diff {:e}",
        a.dims(),
        b.dims(),
        a.max_abs_diff(&b)?
    );

    let big = random_tensor::<f64>([1, 3, 64, 48], 3);
    let map = conv.forward(&big)?.into_output(0);
    println!("64x48 input -> score map {:?}", map.dims());
    if classifier.forward(&big).is_err() {
        println!("the fc classifier rejects the same input");
    }
    Ok(())
}
