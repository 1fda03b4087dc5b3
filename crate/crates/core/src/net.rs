//! Runtime nets: parameters, forward evaluation onto a tape, and backward.

use std::collections::{BTreeMap, BTreeSet};
use std::hash::{Hash, Hasher};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geom::{alignment_offset, compose, GeomSummary};
use crate::io::Checkpoint;
use crate::label::LabelMap;
use crate::ops;
use crate::spec::{Init, NetSpec, NodeKind, NodeSpec};
use crate::tensor::{Scalar, Tensor};

/// Stable 64-bit id for a parameter name (FNV-1a), used as an RNG stream.
pub(crate) fn name_stream(name: &str) -> u64 {
    struct Fnv(u64);
    impl Hasher for Fnv {
        fn finish(&self) -> u64 {
            self.0
        }
        fn write(&mut self, bytes: &[u8]) {
            for &b in bytes {
                self.0 ^= b as u64;
                self.0 = self.0.wrapping_mul(0x100_0000_01b3);
            }
        }
    }
    let mut h = Fnv(0xcbf2_9ce4_8422_2325);
    name.hash(&mut h);
    h.finish()
}

fn init_param<T: Scalar>(node: &NodeSpec, name: &str, dims: [usize; 4], seed: u64) -> Tensor<T> {
    let is_bias = name.ends_with(".b");
    match node.init {
        Init::Bilinear if !is_bias => crate::ops::bilinear_kernel(node.stride, node.in_ch),
        Init::Gauss if !is_bias => {
            let fan_in = node.in_ch * node.kernel * node.kernel;
            let std = (2.0 / fan_in as f64).sqrt();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(name_stream(name));
            let normal = Normal::new(0.0, std).expect("positive std");
            Tensor::from_fn(dims, |_| T::of_f64(normal.sample(&mut rng)))
        }
        _ => Tensor::zeros(dims),
    }
}

/// A net description with concrete parameters.
#[derive(Clone, Debug)]
pub struct Net<T: Scalar = f32> {
    spec: NetSpec,
    params: BTreeMap<String, Tensor<T>>,
    learnable: BTreeSet<String>,
    summaries: BTreeMap<String, GeomSummary>,
    crops: BTreeMap<String, usize>,
}

impl<T: Scalar> Net<T> {
    /// Fresh parameters from each node's init policy.
    pub fn init(spec: NetSpec, seed: u64) -> Result<Self> {
        Self::transplant(spec, seed, &Checkpoint::new())
    }

    /// Parameters copied from `source` where a same-named tensor with the
    /// same element count exists (reshaping, e.g. FC matrices into conv
    /// kernels); everything else comes from the init policy. A learnable
    /// parameter whose source has a different size is an error.
    pub fn transplant(spec: NetSpec, seed: u64, source: &Checkpoint) -> Result<Self> {
        let mut params = BTreeMap::new();
        let mut learnable = BTreeSet::new();
        for node in spec.nodes() {
            for (name, dims) in node.params() {
                let t = match source.get(&name) {
                    Some(src) if src.len() == dims.iter().product::<usize>() => {
                        src.cast::<T>().reshape(dims)?
                    }
                    // fixed layers (e.g. a final upsampling whose factor changed) are re-created
                    Some(_) if !node.learnable => init_param(node, &name, dims, seed),
                    Some(src) => {
                        return Err(Error::node(
                            &node.name,
                            format!("source `{name}` has dims {:?}, need {dims:?}", src.dims()),
                        ))
                    }
                    None => init_param(node, &name, dims, seed),
                };
                if node.learnable {
                    learnable.insert(name.clone());
                }
                params.insert(name, t);
            }
        }
        Self::assemble(spec, params, learnable)
    }

    /// Net over explicit parameters; every parameter the spec declares must be present.
    pub fn with_params(spec: NetSpec, params: BTreeMap<String, Tensor<T>>) -> Result<Self> {
        let mut learnable = BTreeSet::new();
        for node in spec.nodes() {
            for (name, dims) in node.params() {
                match params.get(&name) {
                    Some(t) if t.dims() == dims => {}
                    Some(t) => {
                        return Err(Error::node(
                            &node.name,
                            format!("`{name}` has dims {:?}, need {dims:?}", t.dims()),
                        ))
                    }
                    None => {
                        return Err(Error::node(
                            &node.name,
                            format!("missing parameter `{name}`"),
                        ))
                    }
                }
                if node.learnable {
                    learnable.insert(name);
                }
            }
        }
        Self::assemble(spec, params, learnable)
    }

    fn assemble(
        spec: NetSpec,
        params: BTreeMap<String, Tensor<T>>,
        learnable: BTreeSet<String>,
    ) -> Result<Self> {
        let (summaries, crops) = geometry(&spec)?;
        Ok(Net {
            spec,
            params,
            learnable,
            summaries,
            crops,
        })
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn is_learnable(&self, name: &str) -> bool {
        self.learnable.contains(name)
    }

    pub fn set_learnable(&mut self, name: &str, learnable: bool) {
        if self.params.contains_key(name) {
            if learnable {
                self.learnable.insert(name.to_string());
            } else {
                self.learnable.remove(name);
            }
        }
    }

    /// Freeze every parameter except those of the named nodes.
    pub fn train_only(&mut self, nodes: &[&str]) {
        let names: Vec<String> = self.params.keys().cloned().collect();
        for name in names {
            let owner = name.rsplit_once('.').map_or(name.as_str(), |(n, _)| n);
            self.set_learnable(&name, nodes.contains(&owner));
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Geometry of a node relative to the input.
    pub fn summary(&self, node: &str) -> Option<&GeomSummary> {
        self.summaries.get(node)
    }

    /// Leading cells a crop node drops on each spatial axis.
    pub fn crop_offset(&self, node: &str) -> Option<usize> {
        self.crops.get(node).copied()
    }

    pub fn cast<U: Scalar>(&self) -> Net<U> {
        Net {
            spec: self.spec.clone(),
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
            learnable: self.learnable.clone(),
            summaries: self.summaries.clone(),
            crops: self.crops.clone(),
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        self.params
            .iter()
            .map(|(k, v)| (k.clone(), v.cast()))
            .collect()
    }

    /// Spatial extent of every node (in spec order) for a square input of
    /// extent `h`, or `None` when some node would be empty or a crop or fusion
    /// would not fit.
    pub fn extents(&self, h: usize) -> Option<Vec<usize>> {
        let nodes = self.spec.nodes();
        let index: BTreeMap<&str, usize> = nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.name.as_str(), i))
            .collect();
        let mut ext = vec![0; nodes.len()];
        for node in self.spec.ordered() {
            let arg = |k: usize| ext[index[node.inputs[k].as_str()]];
            let e = match node.kind {
                NodeKind::Input => h,
                NodeKind::Fc => (arg(0) == node.kernel).then_some(1)?,
                NodeKind::Crop => {
                    let (big, reference) = (arg(0), arg(1));
                    (self.crops[&node.name] + reference <= big).then_some(reference)?
                }
                NodeKind::Sum => (arg(0) == arg(1)).then_some(arg(0))?,
                _ => node.geom().expect("layer").output_extent(arg(0))?,
            };
            ext[index[node.name.as_str()]] = e;
        }
        Some(ext)
    }

    /// Smallest extent `>= h` the net accepts with every full-resolution
    /// output at least `h` cells wide. Inputs are zero-extended to it on the right or bottom.
    pub fn fit_extent(&self, h: usize) -> Result<usize> {
        let step = self
            .summaries
            .values()
            .filter_map(GeomSummary::integer_stride)
            .fold(1, lcm);
        let outputs: Vec<usize> = self
            .spec
            .outputs()
            .iter()
            .filter(|o| self.summaries[&o.name].integer_stride() == Some(1))
            .map(|o| {
                self.spec
                    .nodes()
                    .iter()
                    .position(|n| n.name == o.name)
                    .expect("output")
            })
            .collect();
        let mut cand = h.max(1).div_ceil(step) * step;
        for _ in 0..64 {
            if let Some(ext) = self.extents(cand) {
                if outputs.iter().all(|&i| ext[i] >= h) {
                    return Ok(cand);
                }
            }
            cand += step;
        }
        Err(Error::Invalid(format!(
            "no input extent near {h} fits this net"
        )))
    }

    /// Forward on `x` zero-extended to [`fit_extent`](Self::fit_extent) on both axes.
    pub fn forward_fit(&self, x: &Tensor<T>) -> Result<Tape<T>> {
        let (h, w) = (self.fit_extent(x.height())?, self.fit_extent(x.width())?);
        self.forward(&x.pad(0, 0, h - x.height(), w - x.width()))
    }

    /// Inference-mode forward pass.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tape<T>> {
        self.run(x, None)
    }

    /// Training-mode forward pass: dropout masks are drawn from `rng`.
    pub fn forward_train(&self, x: &Tensor<T>, rng: &mut ChaCha8Rng) -> Result<Tape<T>> {
        self.run(x, Some(rng))
    }

    fn run(&self, x: &Tensor<T>, mut rng: Option<&mut ChaCha8Rng>) -> Result<Tape<T>> {
        let nodes = self.spec.nodes();
        let index: BTreeMap<&str, usize> = nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.name.as_str(), i))
            .collect();
        let mut values: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        let mut aux: Vec<Aux<T>> = (0..nodes.len()).map(|_| Aux::None).collect();
        for node in self.spec.ordered() {
            let i = index[node.name.as_str()];
            let arg = |k: usize| -> &Tensor<T> {
                values[index[node.inputs[k].as_str()]]
                    .as_ref()
                    .expect("topological order")
            };
            let wrap = |e: Error| Error::node(&node.name, e.to_string());
            let out = match node.kind {
                NodeKind::Input => {
                    if x.channels() != node.out_ch {
                        return Err(Error::node(
                            &node.name,
                            format!("expects {} channels, got {}", node.out_ch, x.channels()),
                        ));
                    }
                    x.clone()
                }
                NodeKind::Conv => {
                    let (w, b) = (self.p(node, "w"), self.p(node, "b"));
                    ops::conv2d(arg(0), w, Some(b), &node.geom().unwrap()).map_err(wrap)?
                }
                NodeKind::Fc => {
                    let a = arg(0);
                    if a.height() != node.kernel || a.width() != node.kernel {
                        return Err(Error::node(
                            &node.name,
                            format!(
                                "fully connected layer needs a {0}x{0} input, got {1}x{2}",
                                node.kernel,
                                a.height(),
                                a.width()
                            ),
                        ));
                    }
                    ops::fully_connected(a, self.p(node, "w"), Some(self.p(node, "b")))
                        .map_err(wrap)?
                }
                NodeKind::Pool => {
                    let (y, arg_idx) =
                        ops::max_pool2d(arg(0), &node.geom().unwrap()).map_err(wrap)?;
                    aux[i] = Aux::Argmax(arg_idx);
                    y
                }
                NodeKind::Relu => ops::relu(arg(0)),
                NodeKind::Deconv => {
                    ops::deconv2d(arg(0), self.p(node, "w"), &node.geom().unwrap()).map_err(wrap)?
                }
                NodeKind::Dropout(pct) => match rng.as_deref_mut() {
                    Some(rng) if pct > 0 => {
                        let keep = 1.0 - pct as f64 / 100.0;
                        let scale = T::of_f64(1.0 / keep);
                        let mask: Vec<T> = (0..arg(0).len())
                            .map(|_| {
                                if rng.random::<f64>() < keep {
                                    scale
                                } else {
                                    T::zero()
                                }
                            })
                            .collect();
                        let a = arg(0);
                        let data = a.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
                        aux[i] = Aux::Mask(mask);
                        Tensor::new(a.dims(), data)?
                    }
                    _ => arg(0).clone(),
                },
                NodeKind::Crop => {
                    let (big, reference) = (arg(0), arg(1));
                    let off = self.crops[&node.name];
                    big.crop(off, off, reference.height(), reference.width())
                        .map_err(wrap)?
                }
                NodeKind::Sum => ops::fuse_sum(arg(0), arg(1)).map_err(wrap)?,
            };
            values[i] = Some(out);
        }
        let outputs = self
            .spec
            .outputs()
            .iter()
            .map(|n| index[n.name.as_str()])
            .collect();
        Ok(Tape {
            names: nodes.iter().map(|n| n.name.clone()).collect(),
            values: values
                .into_iter()
                .map(|v| v.expect("every node evaluated"))
                .collect(),
            aux,
            outputs,
            consumed: false,
        })
    }

    fn p(&self, node: &NodeSpec, which: &str) -> &Tensor<T> {
        &self.params[&format!("{}.{which}", node.name)]
    }

    /// Per-pixel argmax of the first output, one map per batch item. The
    /// input is fitted as in [`forward_fit`](Self::forward_fit) and the maps
    /// are cut back to the input extent.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Vec<LabelMap>> {
        let tape = self.forward_fit(x)?;
        let y = tape.output(0);
        let (h, w) = (x.height().min(y.height()), x.width().min(y.width()));
        Ok(argmax_labels(&y.crop(0, 0, h, w)?))
    }
}

/// Channel argmax per pixel (first maximum wins).
pub fn argmax_labels<T: Scalar>(scores: &Tensor<T>) -> Vec<LabelMap> {
    let [n, c, h, w] = scores.dims();
    (0..n)
        .map(|b| {
            LabelMap::from_fn(h, w, |y, x| {
                let mut best = 0;
                for k in 1..c {
                    if scores.at(b, k, y, x) > scores.at(b, best, y, x) {
                        best = k;
                    }
                }
                best as u8
            })
        })
        .collect()
}

fn lcm(a: usize, b: usize) -> usize {
    let (mut x, mut y) = (a, b);
    while y != 0 {
        (x, y) = (y, x % y);
    }
    a / x * b
}

pub(crate) fn geometry(
    spec: &NetSpec,
) -> Result<(BTreeMap<String, GeomSummary>, BTreeMap<String, usize>)> {
    let mut summaries: BTreeMap<String, GeomSummary> = BTreeMap::new();
    let mut crops = BTreeMap::new();
    for node in spec.ordered() {
        let input = |k: usize| summaries[&node.inputs[k]].clone();
        let s = match node.kind {
            NodeKind::Input => GeomSummary::identity(),
            NodeKind::Crop => {
                let (big, reference) = (input(0), input(1));
                let off = alignment_offset(&big, &reference)
                    .map_err(|e| Error::node(&node.name, e.to_string()))?;
                if off < 0 {
                    return Err(Error::node(
                        &node.name,
                        "crop source lies inside its reference",
                    ));
                }
                crops.insert(node.name.clone(), off as usize);
                big.cropped(off)
            }
            NodeKind::Sum => {
                let (a, b) = (input(0), input(1));
                if a.stride != b.stride {
                    return Err(Error::node(
                        &node.name,
                        format!("fusion branches have strides {} and {}", a.stride, b.stride),
                    ));
                }
                if a.kernel >= b.kernel {
                    a
                } else {
                    b
                }
            }
            _ => compose(&node.geom().expect("layer").summary(), &input(0)),
        };
        summaries.insert(node.name.clone(), s);
    }
    Ok((summaries, crops))
}

enum Aux<T> {
    None,
    Argmax(Vec<usize>),
    Mask(Vec<T>),
}

/// Cached values of one forward pass. Backward consumes it once.
pub struct Tape<T: Scalar> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    aux: Vec<Aux<T>>,
    outputs: Vec<usize>,
    consumed: bool,
}

impl<T: Scalar> Tape<T> {
    /// The `i`-th output (in declaration order).
    pub fn output(&self, i: usize) -> &Tensor<T> {
        &self.values[self.outputs[i]]
    }

    pub fn output_names(&self) -> Vec<&str> {
        self.outputs
            .iter()
            .map(|&i| self.names[i].as_str())
            .collect()
    }

    /// Value computed at any node.
    pub fn value(&self, node: &str) -> Option<&Tensor<T>> {
        self.names
            .iter()
            .position(|n| n == node)
            .map(|i| &self.values[i])
    }

    pub fn into_output(mut self, i: usize) -> Tensor<T> {
        self.values.swap_remove(self.outputs[i])
    }
}

/// Gradients of every learnable parameter and of the input.
#[derive(Clone, Debug)]
pub struct Grads<T: Scalar> {
    pub params: BTreeMap<String, Tensor<T>>,
    pub input: Tensor<T>,
}

impl<T: Scalar> Grads<T> {
    pub fn add_assign(&mut self, other: &Grads<T>) -> Result<()> {
        for (k, g) in &other.params {
            match self.params.get_mut(k) {
                Some(mine) => mine.add_assign(g)?,
                None => {
                    self.params.insert(k.clone(), g.clone());
                }
            }
        }
        if self.input.dims() == other.input.dims() {
            self.input.add_assign(&other.input)?;
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) -> Result<()> {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

impl<T: Scalar> Net<T> {
    /// Backpropagate upstream gradients given per output node name. Outputs
    /// without a seed receive zero gradient.
    pub fn backward(&self, tape: &mut Tape<T>, seeds: &[(&str, Tensor<T>)]) -> Result<Grads<T>> {
        if tape.consumed {
            return Err(Error::BackwardTwice);
        }
        if tape.names.len() != self.spec.nodes().len() {
            return Err(Error::Graph("tape does not belong to this net".into()));
        }
        tape.consumed = true;
        let nodes = self.spec.nodes();
        let index: BTreeMap<&str, usize> = nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.name.as_str(), i))
            .collect();
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        for (name, g) in seeds {
            let &i = index
                .get(name)
                .ok_or_else(|| Error::Graph(format!("no node `{name}` to seed")))?;
            if g.dims() != tape.values[i].dims() {
                return Err(Error::node(
                    name,
                    format!(
                        "seed gradient {:?} vs value {:?}",
                        g.dims(),
                        tape.values[i].dims()
                    ),
                ));
            }
            accumulate(&mut grads[i], g.clone())?;
        }
        let mut param_grads = BTreeMap::new();
        let mut input_grad = None;
        let order: Vec<&NodeSpec> = self.spec.ordered().collect();
        for node in order.into_iter().rev() {
            let i = index[node.name.as_str()];
            let Some(gy) = grads[i].take() else { continue };
            let src = |k: usize| index[node.inputs[k].as_str()];
            let x = |k: usize| &tape.values[src(k)];
            let wrap = |e: Error| Error::node(&node.name, e.to_string());
            match node.kind {
                NodeKind::Input => input_grad = Some(gy),
                NodeKind::Conv | NodeKind::Fc => {
                    let w = self.p(node, "w");
                    let g = if node.kind == NodeKind::Conv {
                        ops::conv2d_backward(x(0), w, &node.geom().unwrap(), &gy)
                    } else {
                        ops::fully_connected_backward(x(0), w, &gy)
                    }
                    .map_err(wrap)?;
                    for (which, t) in [("w", g.weight), ("b", g.bias)] {
                        let name = format!("{}.{which}", node.name);
                        if self.learnable.contains(&name) {
                            param_grads.insert(name, t);
                        }
                    }
                    accumulate(&mut grads[src(0)], g.input)?;
                }
                NodeKind::Deconv => {
                    let g =
                        ops::deconv2d_backward(x(0), self.p(node, "w"), &node.geom().unwrap(), &gy)
                            .map_err(wrap)?;
                    let name = format!("{}.w", node.name);
                    if self.learnable.contains(&name) {
                        param_grads.insert(name, g.weight);
                    }
                    accumulate(&mut grads[src(0)], g.input)?;
                }
                NodeKind::Pool => {
                    let Aux::Argmax(arg) = &tape.aux[i] else {
                        return Err(Error::node(&node.name, "missing pooling switches"));
                    };
                    accumulate(
                        &mut grads[src(0)],
                        ops::max_pool2d_backward(x(0).dims(), arg, &gy),
                    )?;
                }
                NodeKind::Relu => accumulate(&mut grads[src(0)], ops::relu_backward(x(0), &gy))?,
                NodeKind::Dropout(_) => {
                    let g = match &tape.aux[i] {
                        Aux::Mask(m) => {
                            let data = gy.data().iter().zip(m).map(|(&g, &m)| g * m).collect();
                            Tensor::new(gy.dims(), data)?
                        }
                        _ => gy,
                    };
                    accumulate(&mut grads[src(0)], g)?;
                }
                NodeKind::Crop => {
                    let off = self.crops[&node.name];
                    accumulate(
                        &mut grads[src(0)],
                        ops::crop_backward(x(0).dims(), off, off, &gy),
                    )?;
                }
                NodeKind::Sum => {
                    accumulate(&mut grads[src(0)], gy.clone())?;
                    accumulate(&mut grads[src(1)], gy)?;
                }
            }
        }
        let input_dims = tape.values[index[self.spec.input().name.as_str()]].dims();
        Ok(Grads {
            params: param_grads,
            input: input_grad.unwrap_or_else(|| Tensor::zeros(input_dims)),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{random_tensor, relative_error, STEP};
    use crate::zoo;

    fn random_net(seed: u64) -> Net<f64> {
        let spec = zoo::fcn_skip2(3).unwrap();
        let base = Net::<f64>::init(spec.clone(), seed).unwrap();
        let params = base
            .params()
            .iter()
            .enumerate()
            .map(|(i, (k, t))| {
                (
                    k.clone(),
                    random_tensor::<f64>(t.dims(), seed + i as u64).map(|v| 0.3 * v),
                )
            })
            .collect();
        Net::with_params(spec, params).unwrap()
    }

    fn objective(net: &Net<f64>, x: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
        net.forward(x).unwrap().output(0).dot(r).unwrap()
    }

    #[test]
    fn backward_matches_finite_differences() {
        let net = random_net(11);
        let x = random_tensor::<f64>([1, 3, 16, 16], 5);
        let mut tape = net.forward(&x).unwrap();
        let r = random_tensor::<f64>(tape.output(0).dims(), 6);
        let g = net.backward(&mut tape, &[("out", r.clone())]).unwrap();
        let err = crate::gradcheck::check_gradient(&x, &g.input, |x| objective(&net, x, &r), 1e-5);
        assert!(err.is_ok(), "input: {}", err.unwrap_err());

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut checked = 0;
        for (name, grad) in &g.params {
            for _ in 0..4 {
                let i = rng.random_range(0..grad.len());
                let mut probe = net.clone();
                let v = net.param(name).unwrap().data()[i];
                probe.param_mut(name).unwrap().data_mut()[i] = v + STEP;
                let up = objective(&probe, &x, &r);
                probe.param_mut(name).unwrap().data_mut()[i] = v - STEP;
                let down = objective(&probe, &x, &r);
                let numeric = (up - down) / (2.0 * STEP);
                let e = relative_error(grad.data()[i], numeric);
                assert!(e < 1e-5, "{name}[{i}]: {} vs {numeric}", grad.data()[i]);
                checked += 1;
            }
        }
        // the fixed final upsampling has no gradient
        assert!(!g.params.contains_key("up.w"));
        assert!(checked > 40);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let net = random_net(2);
        let x = random_tensor::<f64>([1, 3, 16, 16], 3);
        let mut tape = net.forward(&x).unwrap();
        let seed = Tensor::zeros(tape.output(0).dims());
        net.backward(&mut tape, &[("out", seed.clone())]).unwrap();
        assert!(matches!(
            net.backward(&mut tape, &[("out", seed)]),
            Err(Error::BackwardTwice)
        ));
    }

    #[test]
    fn skip_net_output_matches_input_extent() {
        let net = random_net(4);
        let y = net
            .forward(&Tensor::zeros([2, 3, 16, 40]))
            .unwrap()
            .into_output(0);
        assert_eq!(y.dims(), [2, 3, 16, 40]);
        assert!(net.forward(&Tensor::zeros([1, 3, 21, 16])).is_err());
        for (h, w) in [(21, 34), (9, 40), (1, 1)] {
            let p = net.predict(&Tensor::zeros([1, 3, h, w])).unwrap();
            assert_eq!((p[0].height(), p[0].width()), (h, w));
            let (fh, fw) = (net.fit_extent(h).unwrap(), net.fit_extent(w).unwrap());
            assert!(fh % 8 == 0 && fw % 8 == 0 && fh >= 16);
        }
        assert_eq!(net.crop_offset("out"), Some(1));
    }

    #[test]
    fn f32_and_f64_agree() {
        let net = random_net(8);
        let x = random_tensor::<f64>([1, 3, 24, 24], 9);
        let a = net.forward(&x).unwrap().into_output(0);
        let b = net
            .cast::<f32>()
            .forward(&x.cast())
            .unwrap()
            .into_output(0)
            .cast::<f64>();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-4);
    }
}
