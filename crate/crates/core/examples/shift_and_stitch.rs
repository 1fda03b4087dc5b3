//! Shift-and-stitch versus the filter-rarefied dense net on a small chain.

use fcn::gradcheck::random_tensor;
use fcn::stitch::{compare_stitch_dense, equivalent_dense_net, shift_and_stitch_reference};
use fcn::{Net, NetSpec, NodeSpec};

fn main() -> fcn::Result<()> {
    let spec = NetSpec::new(vec![
        NodeSpec::input("data", 1),
        NodeSpec::conv("c1", 3, 1, 0, 1, 2, "data"),
        NodeSpec::relu("r1", 2, "c1"),
        NodeSpec::pool("p1", 2, 2, 2, "r1"),
        NodeSpec::conv("c2", 2, 1, 0, 2, 1, "p1"),
        NodeSpec::pool("p2", 2, 2, 1, "c2"),
    ])?;
    let net = Net::<f32>::init(spec, 3)?;
    let x = random_tensor::<f32>([1, 1, 20, 20], 4);

    let coarse = net.forward(&x)?.into_output(0);
    let stitched = shift_and_stitch_reference(&net, &x, 4)?;
    println!(
        "coarse {:?}, stitched (16 shifted runs) {:?}",
        coarse.dims(),
        stitched.dims()
    );

    let dense = equivalent_dense_net(&net)?;
    for node in dense.spec().nodes() {
        println!(
            "  dense {:<4} k{} s{} dilation {}",
            node.name, node.kernel, node.stride, node.dilation
        );
    }
    let r = compare_stitch_dense(&net, &x)?;
    println!(
        "stride {}: {} cells compared, max diff {:e}",
        r.stride, r.compared, r.max_diff
    );
    Ok(())
}
