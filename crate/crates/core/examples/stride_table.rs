//! Receptive field, stride and offset of the classic classifier stacks and
//! of every node of a zoo net.

use fcn::geom::{alexnet_stack, vgg16_stack};
use fcn::{zoo, GeomSummary, Net};

fn print_stack(name: &str, layers: &[fcn::LayerGeom]) {
    println!("{name}");
    let mut acc = GeomSummary::identity();
    for l in layers {
        acc = GeomSummary::chain(acc.layers().iter().chain(std::iter::once(l)));
        println!(
            "  {l:<18} rf {:>4}  stride {:>3}",
            acc.receptive_field(),
            acc.stride
        );
    }
}

fn main() -> fcn::Result<()> {
    print_stack("AlexNet-pattern", &alexnet_stack());
    print_stack("VGG16-pattern", &vgg16_stack());

    // fractional strides appear after upsampling
    let net = Net::<f32>::init(zoo::fcn_skip2(6)?, 0)?;
    println!("fcn-skip2");
    for node in net.spec().nodes() {
        let s = net.summary(&node.name).expect("summary");
        println!(
            "  {:<10} rf {:>5}  stride {:>4}  offset {:>5}",
            node.name,
            s.receptive_field(),
            s.stride,
            s.offset
        );
    }
    Ok(())
}
