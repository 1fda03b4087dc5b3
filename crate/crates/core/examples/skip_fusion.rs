//! Grow the coarse net into skip x1 and skip x2 and show the crop offsets
//! that align each fusion.

use fcn::{zoo, NodeKind};

fn main() -> fcn::Result<()> {
    let mut spec = zoo::fcn_coarse(6)?;
    for pool in ["", "pool2", "pool1"] {
        if !pool.is_empty() {
            spec = zoo::attach_skip(&spec, pool)?;
            println!("attached skip on {pool}");
        }
        let net = fcn::Net::<f32>::init(spec.clone(), 0)?;
        for node in spec
            .nodes()
            .iter()
            .filter(|n| matches!(n.kind, NodeKind::Crop | NodeKind::Deconv | NodeKind::Sum))
        {
            let extra = match node.kind {
                NodeKind::Crop => format!("offset {:?}", net.crop_offset(&node.name)),
                NodeKind::Deconv => format!("x{}", node.stride),
                _ => String::new(),
            };
            println!(
                "  {:<12} {:?} <- {:?} {extra}",
                node.name, node.kind, node.inputs
            );
        }
        println!(
            "  input 32x32 -> output {:?}",
            net.extents(32).map(|e| e[e.len() - 1])
        );
    }
    Ok(())
}
