//! Net descriptions and their text format.
//!
//! One node per line:
//!
//! ```text
//! name kind k s p in_ch out_ch init learnable inputs...
//! ```
//!
//! `kind` is one of `input conv pool relu deconv crop sum dropout fc`; a pool
//! may carry a dilation as `pool:2` and a dropout its drop percentage as
//! `dropout:50`. For `deconv` the `s` column is the upsampling factor; for
//! `fc` the `k` column is the (square) spatial extent of its input. `init` is
//! `none`, `gauss`, `zero` or `bilinear`; `learnable` is `0` or `1`. A `crop`
//! takes the tensor to crop and the reference it is aligned to. Text after `#`
//! is ignored.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geom::LayerGeom;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeKind {
    Input,
    Conv,
    Pool,
    Relu,
    Deconv,
    Crop,
    Sum,
    /// Drop probability in percent.
    Dropout(u8),
    Fc,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    None,
    /// Zero-mean Gaussian with standard deviation `sqrt(2 / fan_in)`; biases zero.
    Gauss,
    Zero,
    Bilinear,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeSpec {
    pub name: String,
    pub kind: NodeKind,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub init: Init,
    pub learnable: bool,
    pub inputs: Vec<String>,
}

impl NodeSpec {
    pub fn new(name: &str, kind: NodeKind, in_ch: usize, out_ch: usize, inputs: &[&str]) -> Self {
        NodeSpec {
            name: name.to_string(),
            kind,
            kernel: 1,
            stride: 1,
            pad: 0,
            dilation: 1,
            in_ch,
            out_ch,
            init: Init::None,
            learnable: false,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn input(name: &str, channels: usize) -> Self {
        Self::new(name, NodeKind::Input, channels, channels, &[])
    }

    pub fn conv(
        name: &str,
        k: usize,
        s: usize,
        p: usize,
        in_ch: usize,
        out_ch: usize,
        from: &str,
    ) -> Self {
        NodeSpec {
            kernel: k,
            stride: s,
            pad: p,
            init: Init::Gauss,
            learnable: true,
            ..Self::new(name, NodeKind::Conv, in_ch, out_ch, &[from])
        }
    }

    pub fn pool(name: &str, k: usize, s: usize, channels: usize, from: &str) -> Self {
        NodeSpec {
            kernel: k,
            stride: s,
            ..Self::new(name, NodeKind::Pool, channels, channels, &[from])
        }
    }

    pub fn relu(name: &str, channels: usize, from: &str) -> Self {
        Self::new(name, NodeKind::Relu, channels, channels, &[from])
    }

    pub fn fc(name: &str, extent: usize, in_ch: usize, out_ch: usize, from: &str) -> Self {
        NodeSpec {
            kernel: extent,
            init: Init::Gauss,
            learnable: true,
            ..Self::new(name, NodeKind::Fc, in_ch, out_ch, &[from])
        }
    }

    /// Bilinear-initialized upsampling by `factor` with the default kernel size.
    pub fn deconv(name: &str, factor: usize, channels: usize, learnable: bool, from: &str) -> Self {
        NodeSpec {
            kernel: crate::ops::default_deconv_kernel(factor),
            stride: factor,
            init: Init::Bilinear,
            learnable,
            ..Self::new(name, NodeKind::Deconv, channels, channels, &[from])
        }
    }

    pub fn crop(name: &str, channels: usize, from: &str, reference: &str) -> Self {
        Self::new(name, NodeKind::Crop, channels, channels, &[from, reference])
    }

    pub fn sum(name: &str, channels: usize, a: &str, b: &str) -> Self {
        Self::new(name, NodeKind::Sum, channels, channels, &[a, b])
    }

    pub fn with_init(mut self, init: Init) -> Self {
        self.init = init;
        self
    }

    /// Geometry of a spatial layer; `None` for input, crop and sum nodes.
    pub fn geom(&self) -> Option<LayerGeom> {
        match self.kind {
            NodeKind::Conv => Some(LayerGeom::conv(self.kernel, self.stride, self.pad)),
            NodeKind::Fc => Some(LayerGeom::conv(self.kernel, 1, 0)),
            NodeKind::Pool => Some(
                LayerGeom::pool(self.kernel, self.stride, self.pad).with_dilation(self.dilation),
            ),
            NodeKind::Deconv => Some(LayerGeom::deconv(self.kernel, self.stride, self.pad)),
            NodeKind::Relu | NodeKind::Dropout(_) => Some(LayerGeom::elementwise()),
            NodeKind::Input | NodeKind::Crop | NodeKind::Sum => None,
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self.kind, NodeKind::Conv | NodeKind::Fc | NodeKind::Deconv)
    }

    /// Parameter names and dims owned by this node.
    pub fn params(&self) -> Vec<(String, [usize; 4])> {
        let (k, i, o) = (self.kernel, self.in_ch, self.out_ch);
        match self.kind {
            NodeKind::Conv => vec![
                (format!("{}.w", self.name), [o, i, k, k]),
                (format!("{}.b", self.name), [1, o, 1, 1]),
            ],
            NodeKind::Fc => vec![
                (format!("{}.w", self.name), [o, i * k * k, 1, 1]),
                (format!("{}.b", self.name), [1, o, 1, 1]),
            ],
            NodeKind::Deconv => vec![(format!("{}.w", self.name), [i, o, k, k])],
            _ => Vec::new(),
        }
    }

    pub fn kind_token(&self) -> String {
        match self.kind {
            NodeKind::Input => "input".into(),
            NodeKind::Conv => "conv".into(),
            NodeKind::Pool if self.dilation > 1 => format!("pool:{}", self.dilation),
            NodeKind::Pool => "pool".into(),
            NodeKind::Relu => "relu".into(),
            NodeKind::Deconv => "deconv".into(),
            NodeKind::Crop => "crop".into(),
            NodeKind::Sum => "sum".into(),
            NodeKind::Dropout(p) => format!("dropout:{p}"),
            NodeKind::Fc => "fc".into(),
        }
    }
}

impl fmt::Display for NodeSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let init = match self.init {
            Init::None => "none",
            Init::Gauss => "gauss",
            Init::Zero => "zero",
            Init::Bilinear => "bilinear",
        };
        write!(
            f,
            "{} {} {} {} {} {} {} {} {}",
            self.name,
            self.kind_token(),
            self.kernel,
            self.stride,
            self.pad,
            self.in_ch,
            self.out_ch,
            init,
            u8::from(self.learnable)
        )?;
        for i in &self.inputs {
            write!(f, " {i}")?;
        }
        Ok(())
    }
}

fn parse_line(line: &str) -> std::result::Result<NodeSpec, String> {
    let tok: Vec<&str> = line.split_whitespace().collect();
    if tok.len() < 9 {
        return Err(format!("expected at least 9 fields, found {}", tok.len()));
    }
    let num = |i: usize, what: &str| -> std::result::Result<usize, String> {
        tok[i]
            .parse()
            .map_err(|_| format!("{what} `{}` is not a nonnegative integer", tok[i]))
    };
    let (kind_name, arg) = match tok[1].split_once(':') {
        Some((k, a)) => (k, Some(a)),
        None => (tok[1], None),
    };
    let arg_num = |what: &str| -> std::result::Result<usize, String> {
        arg.ok_or_else(|| format!("{kind_name} needs a {what}"))?
            .parse()
            .map_err(|_| format!("bad {what} in `{}`", tok[1]))
    };
    let mut dilation = 1;
    let kind = match kind_name {
        "input" => NodeKind::Input,
        "conv" => NodeKind::Conv,
        "pool" => {
            if arg.is_some() {
                dilation = arg_num("dilation")?;
            }
            NodeKind::Pool
        }
        "relu" => NodeKind::Relu,
        "deconv" => NodeKind::Deconv,
        "crop" => NodeKind::Crop,
        "sum" => NodeKind::Sum,
        "dropout" => {
            let p = arg_num("drop percentage")?;
            if p >= 100 {
                return Err("drop percentage must be below 100".into());
            }
            NodeKind::Dropout(p as u8)
        }
        "fc" => NodeKind::Fc,
        other => return Err(format!("unknown kind `{other}`")),
    };
    if arg.is_some() && !matches!(kind, NodeKind::Pool | NodeKind::Dropout(_)) {
        return Err(format!("`{}` takes no argument", kind_name));
    }
    let init = match tok[7] {
        "none" => Init::None,
        "gauss" => Init::Gauss,
        "zero" => Init::Zero,
        "bilinear" => Init::Bilinear,
        other => return Err(format!("unknown init `{other}`")),
    };
    let learnable = match tok[8] {
        "0" => false,
        "1" => true,
        other => return Err(format!("learnable flag must be 0 or 1, found `{other}`")),
    };
    Ok(NodeSpec {
        name: tok[0].to_string(),
        kind,
        kernel: num(2, "k")?,
        stride: num(3, "s")?,
        pad: num(4, "p")?,
        dilation,
        in_ch: num(5, "in_ch")?,
        out_ch: num(6, "out_ch")?,
        init,
        learnable,
        inputs: tok[9..].iter().map(|s| s.to_string()).collect(),
    })
}

/// A validated net description.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetSpec {
    nodes: Vec<NodeSpec>,
    /// Node indices in evaluation order.
    order: Vec<usize>,
}

impl NetSpec {
    pub fn new(nodes: Vec<NodeSpec>) -> Result<Self> {
        let order = validate(&nodes)?;
        Ok(NetSpec { nodes, order })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut nodes = Vec::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let node =
                parse_line(line).map_err(|m| Error::Invalid(format!("line {}: {m}", ln + 1)))?;
            nodes.push(node);
        }
        Self::new(nodes)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::from(e).at(path))?;
        Self::parse(&text).map_err(|e| e.at(path))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# name kind k s p in_ch out_ch init learnable inputs...\n");
        for n in &self.nodes {
            s.push_str(&n.to_string());
            s.push('\n');
        }
        s
    }

    pub fn nodes(&self) -> &[NodeSpec] {
        &self.nodes
    }

    pub fn into_nodes(self) -> Vec<NodeSpec> {
        self.nodes
    }

    /// Nodes in a valid evaluation order.
    pub fn ordered(&self) -> impl Iterator<Item = &NodeSpec> {
        self.order.iter().map(|&i| &self.nodes[i])
    }

    pub fn node(&self, name: &str) -> Option<&NodeSpec> {
        self.nodes.iter().find(|n| n.name == name)
    }

    pub fn input(&self) -> &NodeSpec {
        self.nodes
            .iter()
            .find(|n| n.kind == NodeKind::Input)
            .expect("validated")
    }

    /// Nodes no other node consumes, in declaration order.
    pub fn outputs(&self) -> Vec<&NodeSpec> {
        let used: BTreeSet<&str> = self
            .nodes
            .iter()
            .flat_map(|n| n.inputs.iter().map(String::as_str))
            .collect();
        self.nodes
            .iter()
            .filter(|n| !used.contains(n.name.as_str()))
            .collect()
    }

    /// Class count: channels of the first output.
    pub fn classes(&self) -> usize {
        self.outputs()[0].out_ch
    }

    /// Whether the net is a single path from input to output.
    pub fn is_chain(&self) -> bool {
        self.nodes.iter().all(|n| n.inputs.len() <= 1) && self.outputs().len() == 1
    }

    /// The chain's nodes after the input, in order.
    pub fn chain(&self) -> Result<Vec<&NodeSpec>> {
        if !self.is_chain() {
            return Err(Error::Topology("net is not a linear chain".into()));
        }
        Ok(self
            .ordered()
            .filter(|n| n.kind != NodeKind::Input)
            .collect())
    }
}

fn validate(nodes: &[NodeSpec]) -> Result<Vec<usize>> {
    let mut index = BTreeMap::new();
    for (i, n) in nodes.iter().enumerate() {
        if n.name.is_empty() || n.name.contains(char::is_whitespace) {
            return Err(Error::Graph(format!("invalid node name `{}`", n.name)));
        }
        if index.insert(n.name.as_str(), i).is_some() {
            return Err(Error::Graph(format!("duplicate node `{}`", n.name)));
        }
    }
    let inputs = nodes.iter().filter(|n| n.kind == NodeKind::Input).count();
    if inputs != 1 {
        return Err(Error::Graph(format!(
            "expected exactly one input node, found {inputs}"
        )));
    }
    for n in nodes {
        let arity = match n.kind {
            NodeKind::Input => 0,
            NodeKind::Crop | NodeKind::Sum => 2,
            _ => 1,
        };
        if n.inputs.len() != arity {
            return Err(Error::node(
                &n.name,
                format!("takes {arity} inputs, found {}", n.inputs.len()),
            ));
        }
        for src in &n.inputs {
            let Some(&j) = index.get(src.as_str()) else {
                return Err(Error::node(
                    &n.name,
                    format!("dangling edge to unknown node `{src}`"),
                ));
            };
            let from = &nodes[j];
            let reference = n.kind == NodeKind::Crop && src == &n.inputs[1];
            if !reference && from.out_ch != n.in_ch {
                return Err(Error::node(
                    &n.name,
                    format!(
                        "expects {} channels but `{src}` produces {}",
                        n.in_ch, from.out_ch
                    ),
                ));
            }
        }
        if !matches!(n.kind, NodeKind::Conv | NodeKind::Fc | NodeKind::Deconv)
            && n.in_ch != n.out_ch
        {
            return Err(Error::node(&n.name, "channel count must be preserved"));
        }
        let pointwise = !matches!(
            n.kind,
            NodeKind::Conv | NodeKind::Pool | NodeKind::Deconv | NodeKind::Fc
        );
        let unit_step = n.kind == NodeKind::Fc;
        if (pointwise && (n.kernel, n.stride, n.pad) != (1, 1, 0))
            || (unit_step && (n.stride, n.pad) != (1, 0))
        {
            return Err(Error::node(
                &n.name,
                "geometry fields do not apply to this kind (use 1 1 0)",
            ));
        }
        if let Some(g) = n.geom() {
            g.validate()
                .map_err(|e| Error::node(&n.name, e.to_string()))?;
        }
        let wants_params = n.has_params();
        if !wants_params && (n.learnable || n.init != Init::None) {
            return Err(Error::node(
                &n.name,
                "has no parameters to initialize or learn",
            ));
        }
        if wants_params && n.init == Init::None {
            return Err(Error::node(&n.name, "needs an init policy"));
        }
        if n.init == Init::Bilinear && (n.kind != NodeKind::Deconv || n.in_ch != n.out_ch) {
            return Err(Error::node(
                &n.name,
                "bilinear init needs a channel-preserving deconv",
            ));
        }
    }
    // Kahn's algorithm; leftovers sit on a cycle
    let mut indegree: Vec<usize> = nodes.iter().map(|n| n.inputs.len()).collect();
    let mut consumers: Vec<Vec<usize>> = vec![Vec::new(); nodes.len()];
    for (i, n) in nodes.iter().enumerate() {
        for src in &n.inputs {
            consumers[index[src.as_str()]].push(i);
        }
    }
    let mut ready: Vec<usize> = (0..nodes.len())
        .filter(|&i| indegree[i] == 0)
        .rev()
        .collect();
    let mut order = Vec::with_capacity(nodes.len());
    while let Some(i) = ready.pop() {
        order.push(i);
        for &c in consumers[i].iter().rev() {
            indegree[c] -= 1;
            if indegree[c] == 0 {
                ready.push(c);
            }
        }
    }
    if order.len() != nodes.len() {
        let stuck: Vec<&str> = (0..nodes.len())
            .filter(|&i| indegree[i] > 0)
            .map(|i| nodes[i].name.as_str())
            .collect();
        return Err(Error::Graph(format!("cycle through {}", stuck.join(", "))));
    }
    Ok(order)
}

#[cfg(test)]
mod tests {
    use super::*;

    const TINY: &str = "\
# tiny net
data input 1 1 0 3 3 none 0
conv1 conv 3 1 1 3 4 gauss 1 data
relu1 relu 1 1 0 4 4 none 0 conv1   # trailing comment
pool1 pool:2 2 1 0 4 4 none 0 relu1
";

    #[test]
    fn parse_and_print_round_trip() {
        let spec = NetSpec::parse(TINY).unwrap();
        assert_eq!(spec.nodes().len(), 4);
        assert_eq!(spec.node("pool1").unwrap().dilation, 2);
        let again = NetSpec::parse(&spec.to_text()).unwrap();
        assert_eq!(again, spec);
        assert!(spec.is_chain());
        assert_eq!(spec.outputs()[0].name, "pool1");
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = NetSpec::parse("data input 1 1 0 3 3 none 0\nc conv 3 1 x 3 3 gauss 1 data\n")
            .unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        let err = NetSpec::parse("data input 1 1 0 3 3 none 0\nc warp 3 1 0 3 3 gauss 1 data\n")
            .unwrap_err();
        assert!(err.to_string().contains("unknown kind"), "{err}");
    }

    #[test]
    fn graph_errors() {
        let dangling = "data input 1 1 0 1 1 none 0\nr relu 1 1 0 1 1 none 0 nowhere\n";
        assert!(NetSpec::parse(dangling)
            .unwrap_err()
            .to_string()
            .contains("dangling"));
        let cycle = "data input 1 1 0 1 1 none 0\n\
                     a sum 1 1 0 1 1 none 0 data b\n\
                     b relu 1 1 0 1 1 none 0 a\n";
        assert!(NetSpec::parse(cycle)
            .unwrap_err()
            .to_string()
            .contains("cycle"));
        let channels = "data input 1 1 0 3 3 none 0\nc conv 3 1 1 2 4 gauss 1 data\n";
        assert!(NetSpec::parse(channels)
            .unwrap_err()
            .to_string()
            .contains("channels"));
        let two_inputs = "a input 1 1 0 1 1 none 0\nb input 1 1 0 1 1 none 0\n";
        assert!(NetSpec::parse(two_inputs).is_err());
        let bad_elementwise = "data input 1 1 0 1 1 none 0\nr relu 3 1 0 1 1 none 0 data\n";
        assert!(NetSpec::parse(bad_elementwise).is_err());
    }

    #[test]
    fn declaration_order_is_not_required() {
        let text = "r relu 1 1 0 1 1 none 0 data\ndata input 1 1 0 1 1 none 0\n";
        let spec = NetSpec::parse(text).unwrap();
        let order: Vec<_> = spec.ordered().map(|n| n.name.as_str()).collect();
        assert_eq!(order, ["data", "r"]);
    }
}
