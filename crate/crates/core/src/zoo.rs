//! The toy model family.
//!
//! A small patch classifier with three stride-2 pooling stages (total stride
//! 8) is turned into a fully convolutional net and then extended with skip
//! stages:
//!
//! | toy net     | prediction stride | skip sources   |
//! |-------------|-------------------|----------------|
//! | `fcn-coarse`| 8                 |                |
//! | `fcn-skip1` | 4                 | `pool2`        |
//! | `fcn-skip2` | 2                 | `pool2, pool1` |
//!
//! Layer names are kept through every conversion so checkpoints carry over.

use crate::error::{Error, Result};
use crate::net::geometry;
use crate::spec::{Init, NetSpec, NodeKind, NodeSpec};

/// Input extent the classifier is trained on.
pub const PATCH: usize = 16;
/// Total stride of the classifier trunk.
pub const TRUNK_STRIDE: usize = 8;

const WIDTHS: [usize; 3] = [16, 32, 64];
const FC: usize = 128;

/// Patch classifier: three `conv 3x3 + relu + pool 2x2` stages, then fc6
/// (over the 2x2x64 map of a 16x16 patch), fc7 and the fc8 classifier.
pub fn build_toy_classifier(classes: usize) -> Result<NetSpec> {
    if classes < 2 {
        return Err(Error::Invalid(format!(
            "need at least 2 classes, got {classes}"
        )));
    }
    let mut nodes = vec![NodeSpec::input("data", 3)];
    let mut prev = "data".to_string();
    let mut ch = 3;
    for (i, &out) in WIDTHS.iter().enumerate() {
        let n = i + 1;
        nodes.push(NodeSpec::conv(&format!("conv{n}"), 3, 1, 1, ch, out, &prev));
        nodes.push(NodeSpec::relu(
            &format!("relu{n}"),
            out,
            &format!("conv{n}"),
        ));
        nodes.push(NodeSpec::pool(
            &format!("pool{n}"),
            2,
            2,
            out,
            &format!("relu{n}"),
        ));
        prev = format!("pool{n}");
        ch = out;
    }
    nodes.extend([
        NodeSpec::fc("fc6", PATCH / TRUNK_STRIDE, ch, FC, &prev),
        NodeSpec::relu("relu6", FC, "fc6"),
        NodeSpec::fc("fc7", 1, FC, FC, "relu6"),
        NodeSpec::relu("relu7", FC, "fc7"),
        NodeSpec::fc("fc8", 1, FC, classes, "relu7"),
    ]);
    NetSpec::new(nodes)
}

fn check_classifier(spec: &NetSpec) -> Result<()> {
    let ok = spec.is_chain()
        && ["fc6", "fc7", "fc8"].iter().all(|n| {
            spec.node(n)
                .is_some_and(|n| matches!(n.kind, NodeKind::Fc | NodeKind::Conv))
        })
        && spec.outputs()[0].name == "fc8";
    if ok {
        Ok(())
    } else {
        Err(Error::Topology(
            "not a toy classifier chain (fc6, fc7, fc8)".into(),
        ))
    }
}

/// Every fully connected layer becomes a stride-1 convolution with the same
/// parameters (the checkpoint reshapes on load).
pub fn convolutionalize(spec: &NetSpec) -> Result<NetSpec> {
    let nodes = spec
        .nodes()
        .iter()
        .map(|n| match n.kind {
            NodeKind::Fc => NodeSpec {
                kind: NodeKind::Conv,
                ..n.clone()
            },
            _ => n.clone(),
        })
        .collect();
    NetSpec::new(nodes)
}

/// Decapitated, convolutionalized classifier with a zero-initialized 1x1
/// score layer and a fixed bilinear upsampling back to the input.
pub fn convert_to_fcn(spec: &NetSpec, classes: usize) -> Result<NetSpec> {
    check_classifier(spec)?;
    let mut nodes: Vec<NodeSpec> = convolutionalize(spec)?.into_nodes();
    nodes.retain(|n| n.name != "fc8");
    let feat = nodes.last().expect("trunk").clone();
    nodes.push(
        NodeSpec::conv("score", 1, 1, 0, feat.out_ch, classes, &feat.name).with_init(Init::Zero),
    );
    nodes.push(NodeSpec::deconv(
        "up",
        TRUNK_STRIDE,
        classes,
        false,
        "score",
    ));
    nodes.push(NodeSpec::crop("out", classes, "up", "data"));
    NetSpec::new(nodes)
}

/// Add a skip stage fed by `pool`, halving the prediction stride.
///
/// The net must end in `pred -> up (fixed deconv) -> out (crop to data)`.
/// The new stage scores `pool` with a zero-initialized 1x1 conv, upsamples
/// `pred` 2x with a learnable bilinear-initialized deconv, crops, sums, and
/// upsamples the fused scores back to the input with a fixed deconv.
pub fn attach_skip(spec: &NetSpec, pool: &str) -> Result<NetSpec> {
    let out = spec
        .node("out")
        .filter(|n| n.kind == NodeKind::Crop)
        .ok_or_else(|| Error::Topology("net has no `out` crop".into()))?;
    let up = spec
        .node(&out.inputs[0])
        .filter(|n| n.kind == NodeKind::Deconv)
        .ok_or_else(|| Error::Topology("`out` is not fed by an upsampling layer".into()))?;
    let pred = up.inputs[0].clone();
    let source = spec
        .node(pool)
        .ok_or_else(|| Error::Graph(format!("no node `{pool}`")))?
        .clone();
    let (summaries, _) = geometry(spec)?;
    let s_pred = summaries[&pred].stride;
    let s_pool = summaries[pool].stride;
    if s_pool * 2 != s_pred {
        return Err(Error::Geometry(format!(
            "`{pool}` has stride {s_pool}, the skip needs half the prediction stride {s_pred}"
        )));
    }
    let classes = up.out_ch;
    let factor = s_pool
        .is_integer()
        .then(|| *s_pool.numer() as usize)
        .ok_or_else(|| Error::Geometry("fractional skip stride".into()))?;

    let mut nodes: Vec<NodeSpec> = spec
        .nodes()
        .iter()
        .filter(|n| n.name != "out" && n.name != up.name)
        .cloned()
        .collect();
    let score = format!("score_{pool}");
    let upsampled = format!("up_{pred}");
    nodes.push(NodeSpec::conv(&score, 1, 1, 0, source.out_ch, classes, pool).with_init(Init::Zero));
    nodes.push(NodeSpec::deconv(&upsampled, 2, classes, true, &pred));

    // crop the larger map onto the smaller; which one is larger follows from alignment
    let (trial_geom, _) = geometry(&NetSpec::new(nodes.clone())?)?;
    let offset = crate::geom::alignment_offset(&trial_geom[&score], &trial_geom[&upsampled])?;
    let (big, small) = if offset >= 0 {
        (&score, &upsampled)
    } else {
        (&upsampled, &score)
    };
    let cropped = format!("crop_{pool}");
    let fused = format!("fuse_{pool}");
    nodes.push(NodeSpec::crop(&cropped, classes, big, small));
    nodes.push(NodeSpec::sum(&fused, classes, small, &cropped));
    nodes.push(NodeSpec::deconv("up", factor, classes, false, &fused));
    nodes.push(NodeSpec::crop("out", classes, "up", "data"));
    NetSpec::new(nodes)
}

/// Coarse toy FCN, prediction stride 8.
pub fn fcn_coarse(classes: usize) -> Result<NetSpec> {
    convert_to_fcn(&build_toy_classifier(classes)?, classes)
}

/// One skip stage (`pool2`), prediction stride 4.
pub fn fcn_skip1(classes: usize) -> Result<NetSpec> {
    attach_skip(&fcn_coarse(classes)?, "pool2")
}

/// Two skip stages (`pool2`, then `pool1`), prediction stride 2.
pub fn fcn_skip2(classes: usize) -> Result<NetSpec> {
    attach_skip(&fcn_skip1(classes)?, "pool1")
}

/// Second output head on the node feeding the first head's upsampling
/// (`score` input for the coarse net): its own zero-initialized score layer,
/// fixed upsampling and crop, named `out_{name}`.
pub fn add_head(spec: &NetSpec, name: &str, classes: usize) -> Result<NetSpec> {
    let score = spec
        .node("score")
        .ok_or_else(|| Error::Topology("net has no `score` layer to branch from".into()))?;
    let feat = spec.node(&score.inputs[0]).expect("validated").clone();
    let (summaries, _) = geometry(spec)?;
    let stride = summaries[&feat.name]
        .integer_stride()
        .ok_or_else(|| Error::Geometry("fractional stride".into()))?;
    let mut nodes = spec.nodes().to_vec();
    let s = format!("score_{name}");
    let u = format!("up_{name}");
    nodes.push(NodeSpec::conv(&s, 1, 1, 0, feat.out_ch, classes, &feat.name).with_init(Init::Zero));
    nodes.push(NodeSpec::deconv(&u, stride, classes, false, &s));
    nodes.push(NodeSpec::crop(&format!("out_{name}"), classes, &u, "data"));
    NetSpec::new(nodes)
}

/// The zoo nets by file stem.
pub fn zoo_spec(name: &str, classes: usize) -> Result<NetSpec> {
    match name {
        "toy-classifier" => build_toy_classifier(classes),
        "fcn-coarse" => fcn_coarse(classes),
        "fcn-skip1" => fcn_skip1(classes),
        "fcn-skip2" => fcn_skip2(classes),
        "fcn-coarse-2head" => add_head(&fcn_coarse(classes)?, "fg", 2),
        _ => Err(Error::Invalid(format!("unknown zoo net `{name}`"))),
    }
}

pub const ZOO: [&str; 5] = [
    "toy-classifier",
    "fcn-coarse",
    "fcn-skip1",
    "fcn-skip2",
    "fcn-coarse-2head",
];

/// Class count the checked-in zoo files are generated for.
pub const ZOO_CLASSES: usize = 6;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::random_tensor;
    use crate::io::Checkpoint;
    use crate::net::Net;
    use crate::tensor::Tensor;

    fn stride_of(spec: &NetSpec, node: &str) -> usize {
        geometry(spec).unwrap().0[node].integer_stride().unwrap()
    }

    #[test]
    fn classifier_shape_and_stride() {
        let spec = build_toy_classifier(5).unwrap();
        assert_eq!(stride_of(&spec, "pool3"), 8);
        assert_eq!(stride_of(&spec, "pool2"), 4);
        assert_eq!(stride_of(&spec, "fc8"), 8);
        let net: Net<f32> = Net::init(spec, 1).unwrap();
        let y = net
            .forward(&Tensor::zeros([2, 3, PATCH, PATCH]))
            .unwrap()
            .into_output(0);
        assert_eq!(y.dims(), [2, 5, 1, 1]);
        assert!(build_toy_classifier(1).is_err());
    }

    #[test]
    fn same_seed_same_checkpoint() {
        let spec = build_toy_classifier(4).unwrap();
        let a: Net<f32> = Net::init(spec.clone(), 3).unwrap();
        let b: Net<f32> = Net::init(spec.clone(), 3).unwrap();
        let c: Net<f32> = Net::init(spec, 4).unwrap();
        assert_eq!(a.checkpoint(), b.checkpoint());
        assert_ne!(a.checkpoint(), c.checkpoint());
    }

    #[test]
    fn coarse_net_is_full_resolution_and_uniform() {
        let net: Net<f32> = Net::init(fcn_coarse(6).unwrap(), 0).unwrap();
        assert_eq!(net.crop_offset("out"), Some(0));
        let y = net
            .forward(&random_tensor([1, 3, 64, 64], 2))
            .unwrap()
            .into_output(0);
        assert_eq!(y.dims(), [1, 6, 64, 64]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn convert_rejects_other_nets() {
        assert!(convert_to_fcn(&fcn_coarse(3).unwrap(), 3).is_err());
    }

    #[test]
    fn skip_strides_and_offsets() {
        let s1 = fcn_skip1(6).unwrap();
        assert_eq!(stride_of(&s1, "fuse_pool2"), 4);
        let s2 = fcn_skip2(6).unwrap();
        assert_eq!(stride_of(&s2, "fuse_pool1"), 2);
        for spec in [s1, s2] {
            let net: Net<f32> = Net::init(spec, 0).unwrap();
            let y = net
                .forward(&Tensor::zeros([1, 3, 64, 48]))
                .unwrap()
                .into_output(0);
            assert_eq!(y.dims(), [1, 6, 64, 48]);
        }
        assert!(attach_skip(&fcn_coarse(6).unwrap(), "pool1").is_err());
    }

    #[test]
    fn attaching_preserves_output() {
        let coarse: Net<f64> = Net::init(fcn_coarse(4).unwrap(), 5).unwrap();
        // give the coarse score layer weights so the output is not trivially zero
        let mut ck: Checkpoint = coarse.checkpoint();
        ck.insert("score.w".into(), random_tensor([4, 128, 1, 1], 8));
        let coarse: Net<f64> = Net::transplant(coarse.spec().clone(), 5, &ck).unwrap();
        let skip: Net<f64> = Net::transplant(fcn_skip1(4).unwrap(), 5, &ck).unwrap();
        let x = random_tensor([1, 3, 32, 40], 9);
        let a = coarse.forward(&x).unwrap();
        let b = skip.forward(&x).unwrap();
        assert_eq!(a.output(0).dims(), b.output(0).dims());
        assert_eq!(a.value("score"), b.value("score"));
        // the zero skip score adds nothing at the fusion point
        assert_eq!(b.value("fuse_pool2"), b.value("up_score"));
        let up2 = crate::ops::deconv2d(
            a.value("score").unwrap(),
            skip.param("up_score.w").unwrap(),
            &skip.spec().node("up_score").unwrap().geom().unwrap(),
        )
        .unwrap();
        assert_eq!(b.value("up_score"), Some(&up2));
    }

    #[test]
    fn skip_score_receives_gradient() {
        let mut net: Net<f64> = Net::init(fcn_skip1(3).unwrap(), 1).unwrap();
        net.param_mut("score.w").unwrap().data_mut()[0] = 0.5;
        let x = random_tensor([1, 3, 32, 32], 2);
        let mut tape = net.forward(&x).unwrap();
        let seed = random_tensor(tape.output(0).dims(), 3);
        let g = net.backward(&mut tape, &[("out", seed)]).unwrap();
        assert!(g.params["score_pool2.w"].data().iter().any(|&v| v != 0.0));
        assert!(!g.params.contains_key("up.w"));
        assert!(g.params.contains_key("up_score.w"));
    }

    #[test]
    fn two_heads() {
        let spec = zoo_spec("fcn-coarse-2head", 5).unwrap();
        let outs: Vec<_> = spec.outputs().iter().map(|n| n.name.clone()).collect();
        assert_eq!(outs, ["out", "out_fg"]);
        assert_eq!(spec.classes(), 5);
    }

    #[test]
    fn zoo_files_match_generators() {
        let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../zoo");
        for name in ZOO {
            let text = std::fs::read_to_string(dir.join(format!("{name}.net"))).unwrap();
            let spec = NetSpec::parse(&text).unwrap();
            assert_eq!(spec, zoo_spec(name, ZOO_CLASSES).unwrap(), "{name}");
        }
    }
}
