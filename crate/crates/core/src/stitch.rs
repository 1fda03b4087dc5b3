//! Shift-and-stitch dense prediction and its filter-rarefaction equivalent.
//!
//! A chain with total stride `f` is run `f^2` times on copies of the input
//! shifted right by `x` and down by `y` (zero padding on the left and top),
//! and the coarse outputs are interlaced: run cell `j` lands at dense index
//! `f j - x`. The input is also zero-extended on the right and bottom so
//! that every dense index in `[0, H)` is produced by some run.
//!
//! [`equivalent_dense_net`] removes all subsampling instead, enlarging each
//! filter by the stride accumulated below it. Both index dense cells by the
//! same input coordinate, so they agree wherever the receptive field lies
//! inside the image.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::geom::rarefy_filter;
use crate::net::Net;
use crate::ops::convolutionalize_fc;
use crate::spec::{NetSpec, NodeKind, NodeSpec};
use crate::tensor::{Scalar, Tensor};

/// Total stride and receptive-field geometry `(K, S, P)` of a chain's output.
fn chain_geometry<T: Scalar>(net: &Net<T>) -> Result<(usize, usize, usize)> {
    let chain = net.spec().chain()?;
    let last = chain
        .last()
        .map_or(net.spec().input().name.as_str(), |n| n.name.as_str());
    let s = net.summary(last).expect("every node has a summary");
    let stride = s
        .integer_stride()
        .ok_or_else(|| Error::Geometry(format!("chain has fractional stride {}", s.stride)))?;
    Ok((
        s.kernel.to_integer() as usize,
        stride,
        s.offset.to_integer() as usize,
    ))
}

/// The same net with every fully connected layer run as a convolution, so
/// that it accepts inputs larger than its native size.
pub fn convolutionalized<T: Scalar>(net: &Net<T>) -> Result<Net<T>> {
    let mut params = net.params().clone();
    let nodes = net
        .spec()
        .nodes()
        .iter()
        .map(|n| {
            if n.kind != NodeKind::Fc {
                return Ok(n.clone());
            }
            let key = format!("{}.w", n.name);
            let w = convolutionalize_fc(&params[&key], n.in_ch, n.kernel, n.kernel)?;
            params.insert(key, w);
            Ok(NodeSpec {
                kind: NodeKind::Conv,
                ..n.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut conv = Net::with_params(NetSpec::new(nodes)?, params)?;
    for name in net.params().keys() {
        conv.set_learnable(name, net.is_learnable(name));
    }
    Ok(conv)
}

/// Dense output of `net` on `x` by `f^2` shifted runs. Output spatial extent
/// equals the input's. Fully connected layers are run as convolutions.
pub fn shift_and_stitch_reference<T: Scalar>(
    net: &Net<T>,
    x: &Tensor<T>,
    f: usize,
) -> Result<Tensor<T>> {
    let (k, stride, _) = chain_geometry(net)?;
    let converted;
    let net = if net.spec().nodes().iter().any(|n| n.kind == NodeKind::Fc) {
        converted = convolutionalized(net)?;
        &converted
    } else {
        net
    };
    if stride != f {
        return Err(Error::Geometry(format!(
            "net stride is {stride}, shift-and-stitch factor is {f}"
        )));
    }
    let [n, _, h, w] = x.dims();
    let classes = net.spec().classes();
    let mut dense = Tensor::zeros([n, classes, h, w]);
    let ext = k + f;
    for ys in 0..f {
        for xs in 0..f {
            let shifted = x.pad(ys, xs, ext, ext);
            let out = net.forward(&shifted)?.into_output(0);
            for oy in (0..h).filter(|o| (o + ys) % f == 0) {
                let jy = (oy + ys) / f;
                for ox in (0..w).filter(|o| (o + xs) % f == 0) {
                    let jx = (ox + xs) / f;
                    if jy >= out.height() || jx >= out.width() {
                        return Err(Error::Geometry(format!(
                            "shifted run ({xs}, {ys}) is too small to cover cell ({oy}, {ox})"
                        )));
                    }
                    for b in 0..n {
                        for c in 0..classes {
                            dense.set(b, c, oy, ox, out.at(b, c, jy, jx));
                        }
                    }
                }
            }
        }
    }
    Ok(dense)
}

/// The same chain with every stride set to 1: conv filters rarefied by the
/// accumulated stride below them, pools dilated by it, paddings scaled by it.
/// Fully connected layers become convolutions first.
pub fn equivalent_dense_net<T: Scalar>(net: &Net<T>) -> Result<Net<T>> {
    let chain = net.spec().chain()?;
    let mut nodes = vec![net.spec().input().clone()];
    let mut params = BTreeMap::new();
    let mut acc = 1usize;
    for node in chain {
        let mut dense = NodeSpec {
            stride: 1,
            pad: node.pad * acc,
            ..node.clone()
        };
        match node.kind {
            NodeKind::Conv | NodeKind::Fc => {
                let (w, b) = (
                    &net.params()[&format!("{}.w", node.name)],
                    &net.params()[&format!("{}.b", node.name)],
                );
                let w = if node.kind == NodeKind::Fc {
                    convolutionalize_fc(w, node.in_ch, node.kernel, node.kernel)?
                } else {
                    w.clone()
                };
                let w = rarefy_filter(&w, acc);
                dense.kind = NodeKind::Conv;
                dense.kernel = w.height();
                params.insert(format!("{}.w", node.name), w);
                params.insert(format!("{}.b", node.name), b.clone());
            }
            NodeKind::Pool => dense.dilation = node.dilation * acc,
            NodeKind::Relu | NodeKind::Dropout(_) => {}
            _ => {
                return Err(Error::Topology(format!(
                    "`{}` ({:?}) has no dense equivalent",
                    node.name, node.kind
                )))
            }
        }
        acc *= node.stride;
        nodes.push(dense);
    }
    let spec = NetSpec::new(nodes)?;
    let mut dense = Net::with_params(spec, params)?;
    for name in net.params().keys() {
        dense.set_learnable(name, net.is_learnable(name));
    }
    Ok(dense)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StitchReport {
    pub stride: usize,
    /// Largest absolute difference over compared cells.
    pub max_diff: f64,
    /// Dense cells (per channel and batch item) compared.
    pub compared: usize,
}

/// Run both dense procedures on `x` and compare them over the cells whose
/// receptive field lies inside the image.
pub fn compare_stitch_dense<T: Scalar>(net: &Net<T>, x: &Tensor<T>) -> Result<StitchReport> {
    let (k, stride, p) = chain_geometry(net)?;
    let stitched = shift_and_stitch_reference(net, x, stride)?;
    // the right/bottom extension only feeds cells outside the compared region
    let dense = equivalent_dense_net(net)?
        .forward(&x.pad(0, 0, k, k))?
        .into_output(0);
    let [n, c, h, w] = stitched.dims();
    // dense index o starts its window at input position o - p
    let rows = p..(h + p + 1).saturating_sub(k).min(h).min(dense.height());
    let cols = p..(w + p + 1).saturating_sub(k).min(w).min(dense.width());
    let mut max_diff = 0.0f64;
    let mut compared = 0;
    for b in 0..n {
        for ch in 0..c {
            for y in rows.clone() {
                for xx in cols.clone() {
                    let d = (stitched.at(b, ch, y, xx).as_f64() - dense.at(b, ch, y, xx).as_f64())
                        .abs();
                    max_diff = max_diff.max(d);
                    compared += 1;
                }
            }
        }
    }
    Ok(StitchReport {
        stride,
        max_diff,
        compared,
    })
}
