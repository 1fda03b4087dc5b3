//! SGD with momentum, the training configuration, and the training loop.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{foreground_labels, Sample};
use crate::error::{Error, Result};
use crate::label::LabelMap;
use crate::loss::{multi_head_loss, sample_mask, Head, Normalize};
use crate::metrics::{ConfusionMatrix, Metrics};
use crate::net::{argmax_labels, Net};
use crate::tensor::{Scalar, Tensor};

/// Learning-rate multiplier for biases.
pub const BIAS_LR_MULT: f64 = 2.0;

/// Momentum SGD state: one velocity per parameter plus per-parameter lr
/// multipliers (biases default to [`BIAS_LR_MULT`]).
#[derive(Clone, Debug)]
pub struct OptimState<T: Scalar> {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, Tensor<T>>,
    lr_mult: BTreeMap<String, f64>,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        OptimState {
            lr,
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
            lr_mult: BTreeMap::new(),
        }
    }

    pub fn set_lr_mult(&mut self, param: &str, mult: f64) {
        self.lr_mult.insert(param.to_string(), mult);
    }

    pub fn lr_mult(&self, param: &str) -> f64 {
        match self.lr_mult.get(param) {
            Some(&m) => m,
            None if is_bias(param) => BIAS_LR_MULT,
            None => 1.0,
        }
    }

    pub fn velocity(&self, param: &str) -> Option<&Tensor<T>> {
        self.velocity.get(param)
    }
}

fn is_bias(param: &str) -> bool {
    param.ends_with(".b")
}

/// One update of every learnable parameter:
/// `v <- mu v - lr_i (g + lambda theta)`, `theta <- theta + v`.
/// Biases are not decayed. A learnable parameter without a gradient is
/// treated as having a zero gradient.
pub fn sgd_step<T: Scalar>(
    net: &mut Net<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut OptimState<T>,
) -> Result<()> {
    let names: Vec<String> = net
        .params()
        .keys()
        .filter(|n| net.is_learnable(n))
        .cloned()
        .collect();
    for name in names {
        let lr = T::of_f64(state.lr * state.lr_mult(&name));
        let decay = T::of_f64(if is_bias(&name) {
            0.0
        } else {
            state.weight_decay
        });
        let mu = T::of_f64(state.momentum);
        let theta = net.param_mut(&name).expect("listed");
        let g = grads.get(&name);
        if let Some(g) = g {
            if g.dims() != theta.dims() {
                return Err(Error::Shape(format!(
                    "gradient of `{name}` is {:?}, parameter is {:?}",
                    g.dims(),
                    theta.dims()
                )));
            }
        }
        let v = state
            .velocity
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(theta.dims()));
        for (i, (t, vi)) in theta.data_mut().iter_mut().zip(v.data_mut()).enumerate() {
            let gi = g.map_or(T::zero(), |g| g.data()[i]);
            *vi = mu * *vi - lr * (gi + decay * *t);
            *t = *t + *vi;
        }
    }
    Ok(())
}

/// What a head is trained to predict.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadTarget {
    /// The sample's class labels.
    Classes,
    /// Foreground (any non-background class) against background.
    Foreground,
}

/// `node:target:weight`, e.g. `out:classes:1`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadSpec {
    pub node: String,
    pub target: HeadTarget,
    pub weight: f64,
}

impl FromStr for HeadSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let bad = || Error::Config(format!("head `{s}` is not node:classes|foreground:weight"));
        let [node, target, weight] = parts[..] else {
            return Err(bad());
        };
        let target = match target {
            "classes" => HeadTarget::Classes,
            "foreground" => HeadTarget::Foreground,
            _ => return Err(bad()),
        };
        let weight = weight.parse().map_err(|_| bad())?;
        Ok(HeadSpec {
            node: node.to_string(),
            target,
            weight,
        })
    }
}

impl std::fmt::Display for HeadSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let t = match self.target {
            HeadTarget::Classes => "classes",
            HeadTarget::Foreground => "foreground",
        };
        write!(f, "{}:{t}:{}", self.node, self.weight)
    }
}

/// Training configuration, read from `key = value` text.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Keep probability of the loss sampling mask.
    pub sample_p: f64,
    pub class_weights: Option<Vec<f64>>,
    /// Empty: the net's first output, trained on class labels.
    pub heads: Vec<HeadSpec>,
    pub init_checkpoint: Option<PathBuf>,
    /// Every learning rate is divided by this.
    pub lr_drop_factor: f64,
    pub normalize: Normalize,
    /// Stop after this many iterations (0: run every epoch in full).
    pub max_iterations: usize,
    /// Train only these nodes' parameters (empty: every learnable one).
    pub train_only: Vec<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 20,
            epochs: 1,
            sample_p: 1.0,
            class_weights: None,
            heads: Vec::new(),
            init_checkpoint: None,
            lr_drop_factor: 1.0,
            normalize: Normalize::Mean,
            max_iterations: 0,
            train_only: Vec::new(),
        }
    }
}

fn list<T: FromStr>(v: &str) -> std::result::Result<Vec<T>, T::Err> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect()
}

impl TrainConfig {
    pub const KEYS: [&'static str; 15] = [
        "seed",
        "rng",
        "lr",
        "momentum",
        "weight_decay",
        "batch_size",
        "epochs",
        "sample_p",
        "class_weights",
        "heads",
        "init_checkpoint",
        "lr_drop_factor",
        "normalize",
        "max_iterations",
        "train_only",
    ];

    /// Set one key from its text value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let bad = |what: &str| Error::Config(format!("`{key}`: expected {what}, got `{value}`"));
        match key {
            "seed" => self.seed = value.parse().map_err(|_| bad("an unsigned integer"))?,
            "rng" if value == "chacha8" => {}
            "rng" => return Err(bad("`chacha8`")),
            "lr" => self.lr = value.parse().map_err(|_| bad("a number"))?,
            "momentum" => self.momentum = value.parse().map_err(|_| bad("a number"))?,
            "weight_decay" => self.weight_decay = value.parse().map_err(|_| bad("a number"))?,
            "batch_size" => self.batch_size = value.parse().map_err(|_| bad("an integer"))?,
            "epochs" => self.epochs = value.parse().map_err(|_| bad("an integer"))?,
            "sample_p" => self.sample_p = value.parse().map_err(|_| bad("a number"))?,
            "class_weights" if value.is_empty() || value == "none" => self.class_weights = None,
            "class_weights" => {
                self.class_weights = Some(list(value).map_err(|_| bad("comma-separated numbers"))?)
            }
            "heads" => self.heads = list(value)?,
            "init_checkpoint" if value.is_empty() || value == "none" => self.init_checkpoint = None,
            "init_checkpoint" => self.init_checkpoint = Some(PathBuf::from(value)),
            "lr_drop_factor" => self.lr_drop_factor = value.parse().map_err(|_| bad("a number"))?,
            "normalize" => self.normalize = value.parse()?,
            "max_iterations" => {
                self.max_iterations = value.parse().map_err(|_| bad("an integer"))?
            }
            "train_only" => {
                self.train_only =
                    list(value).map_err(|_: std::convert::Infallible| bad("node names"))?
            }
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be a finite non-negative number");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return bad("weight_decay must be non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.sample_p > 0.0 && self.sample_p <= 1.0) {
            return bad("sample_p must be in (0, 1]");
        }
        if self.lr_drop_factor.is_nan() || self.lr_drop_factor <= 0.0 {
            return bad("lr_drop_factor must be positive");
        }
        if self
            .class_weights
            .as_ref()
            .is_some_and(|w| w.iter().any(|&v| v.is_nan() || v < 0.0))
        {
            return bad("class weights must be non-negative");
        }
        Ok(())
    }

    /// Parse `key = value` lines (`#` starts a comment) over the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", ln + 1)))?;
            cfg.set(k.trim(), v).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", ln + 1)),
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::from(e).at(path))?;
        Self::parse(&text).map_err(|e| e.at(path))
    }

    /// Every key with its resolved value; parses back to `self`.
    pub fn to_text(&self) -> String {
        let join = |v: &[String]| v.join(", ");
        let mut s = String::new();
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "rng = chacha8");
        let _ = writeln!(s, "lr = {}", self.lr);
        let _ = writeln!(s, "momentum = {}", self.momentum);
        let _ = writeln!(s, "weight_decay = {}", self.weight_decay);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "sample_p = {}", self.sample_p);
        let cw = self.class_weights.as_ref().map_or("none".to_string(), |w| {
            join(&w.iter().map(|v| v.to_string()).collect::<Vec<_>>())
        });
        let _ = writeln!(s, "class_weights = {cw}");
        let _ = writeln!(
            s,
            "heads = {}",
            join(&self.heads.iter().map(|h| h.to_string()).collect::<Vec<_>>())
        );
        let init = self
            .init_checkpoint
            .as_ref()
            .map_or("none".to_string(), |p| p.display().to_string());
        let _ = writeln!(s, "init_checkpoint = {init}");
        let _ = writeln!(s, "lr_drop_factor = {}", self.lr_drop_factor);
        let _ = writeln!(s, "normalize = {}", self.normalize);
        let _ = writeln!(s, "max_iterations = {}", self.max_iterations);
        let _ = writeln!(s, "train_only = {}", join(&self.train_only));
        s
    }

    /// Images per batch after scaling by `1 / sample_p`.
    pub fn images_per_batch(&self) -> usize {
        (self.batch_size as f64 / self.sample_p).ceil() as usize
    }
}

/// One line of the metrics history. Iteration rows carry the minibatch
/// loss; epoch rows the mean training loss and validation metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub iteration: usize,
    pub epoch: usize,
    pub loss: f64,
    pub metrics: Option<Metrics>,
}

pub const CSV_HEADER: &str = "iteration,epoch,loss,pixel_acc,mean_acc,mean_iu,fw_iu";

pub fn history_csv(rows: &[LogRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        let _ = write!(s, "{},{},{}", r.iteration, r.epoch, r.loss);
        match r.metrics {
            Some(m) => {
                let _ = writeln!(
                    s,
                    ",{},{},{},{}",
                    m.pixel_acc, m.mean_acc, m.mean_iu, m.fw_iu
                );
            }
            None => s.push_str(",,,,\n"),
        }
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub history: Vec<LogRow>,
    pub iterations: usize,
    /// Validation metrics after the last epoch (none without validation data).
    pub final_metrics: Option<Metrics>,
    /// Mean minibatch loss over the last epoch run.
    pub final_loss: f64,
    pub wall: Duration,
}

/// Streams derived from the master seed.
#[derive(Clone, Copy, Debug)]
pub enum Stream {
    Shuffle = 1,
    Mask = 2,
    Dropout = 3,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

fn targets_for(samples: &[&Sample], target: HeadTarget, h: usize, w: usize) -> Vec<LabelMap> {
    samples
        .iter()
        .map(|s| {
            let l = match target {
                HeadTarget::Classes => s.labels.clone(),
                HeadTarget::Foreground => foreground_labels(&s.labels),
            };
            l.pad_to(h, w)
        })
        .collect()
}

/// Stack images, zero-extended to the largest extent in the batch and then
/// to an extent the net accepts.
pub fn batch_images<T: Scalar>(net: &Net<T>, samples: &[&Sample]) -> Result<Tensor<T>> {
    let h = net.fit_extent(samples.iter().map(|s| s.image.height()).max().unwrap_or(0))?;
    let w = net.fit_extent(samples.iter().map(|s| s.image.width()).max().unwrap_or(0))?;
    let items: Vec<Tensor<T>> = samples
        .iter()
        .map(|s| {
            s.image
                .cast::<T>()
                .pad(0, 0, h - s.image.height(), w - s.image.width())
        })
        .collect();
    Tensor::stack(&items)
}

fn resolve_heads<T: Scalar>(net: &Net<T>, cfg: &TrainConfig) -> Result<Vec<HeadSpec>> {
    let heads = if cfg.heads.is_empty() {
        vec![HeadSpec {
            node: net.spec().outputs()[0].name.clone(),
            target: HeadTarget::Classes,
            weight: 1.0,
        }]
    } else {
        cfg.heads.clone()
    };
    for h in &heads {
        if net.spec().node(&h.node).is_none() {
            return Err(Error::Config(format!(
                "head `{}` is not a node of the net",
                h.node
            )));
        }
    }
    Ok(heads)
}

/// Minibatch SGD over `train` for `cfg.epochs` epochs, validating on `val`
/// after every epoch.
pub fn train<T: Scalar>(
    net: &mut Net<T>,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() && cfg.epochs > 0 {
        return Err(Error::Invalid("training set is empty".into()));
    }
    let start = Instant::now();
    let heads = resolve_heads(net, cfg)?;
    if !cfg.train_only.is_empty() {
        let nodes: Vec<&str> = cfg.train_only.iter().map(String::as_str).collect();
        net.train_only(&nodes);
    }
    let mut state = OptimState::new(cfg.lr / cfg.lr_drop_factor, cfg.momentum, cfg.weight_decay);
    let mut shuffle = stream_rng(cfg.seed, Stream::Shuffle);
    let mut masks = stream_rng(cfg.seed, Stream::Mask);
    let mut dropout = stream_rng(cfg.seed, Stream::Dropout);
    let per_batch = cfg.images_per_batch();
    let mut history = Vec::new();
    let mut iteration = 0;
    let mut final_metrics = None;
    let mut final_loss = f64::NAN;
    let mut order: Vec<usize> = (0..train.len()).collect();
    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle);
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(per_batch) {
            if cfg.max_iterations > 0 && iteration >= cfg.max_iterations {
                break;
            }
            let samples: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            let x = batch_images(net, &samples)?;
            let mut tape = net.forward_train(&x, &mut dropout)?;
            let outputs: Vec<Tensor<T>> = heads
                .iter()
                .map(|h| tape.value(&h.node).cloned().expect("head checked"))
                .collect();
            let [n, _, h, w] = outputs[0].dims();
            let targets: Vec<Vec<LabelMap>> = heads
                .iter()
                .map(|hd| targets_for(&samples, hd.target, h, w))
                .collect();
            let mask = if cfg.sample_p < 1.0 {
                Some(sample_mask(cfg.sample_p, [n, h, w], masks.random())?)
            } else {
                None
            };
            let head_refs: Vec<Head<'_, T>> = heads
                .iter()
                .zip(&outputs)
                .zip(&targets)
                .map(|((hd, scores), t)| Head {
                    scores,
                    targets: t,
                    class_weights: match hd.target {
                        HeadTarget::Classes => cfg.class_weights.as_deref(),
                        HeadTarget::Foreground => None,
                    },
                    weight: hd.weight,
                })
                .collect();
            let (report, grads) = multi_head_loss(&head_refs, mask.as_ref(), cfg.normalize)?;
            iteration += 1;
            if !report.loss.is_finite() {
                return Err(Error::Divergence { iteration });
            }
            let seeds: Vec<(&str, Tensor<T>)> =
                heads.iter().map(|h| h.node.as_str()).zip(grads).collect();
            let g = net.backward(&mut tape, &seeds)?;
            sgd_step(net, &g.params, &mut state)?;
            if net.params().values().any(|p| !p.is_finite()) {
                return Err(Error::Divergence { iteration });
            }
            history.push(LogRow {
                iteration,
                epoch,
                loss: report.loss,
                metrics: None,
            });
            loss_sum += report.loss;
            batches += 1;
        }
        if batches == 0 {
            break 'epochs;
        }
        final_loss = loss_sum / batches as f64;
        final_metrics = if val.is_empty() {
            None
        } else {
            Some(evaluate(net, val, &heads[0].node)?)
        };
        history.push(LogRow {
            iteration,
            epoch,
            loss: final_loss,
            metrics: final_metrics,
        });
    }
    Ok(TrainReport {
        history,
        iterations: iteration,
        final_metrics,
        final_loss,
        wall: start.elapsed(),
    })
}

/// Predicted label maps of `node`, one sample at a time.
pub fn predict_samples<T: Scalar>(
    net: &Net<T>,
    samples: &[Sample],
    node: &str,
) -> Result<Vec<LabelMap>> {
    samples
        .iter()
        .map(|s| {
            let tape = net.forward_fit(&s.image.cast())?;
            let out = tape
                .value(node)
                .ok_or_else(|| Error::Graph(format!("no node `{node}`")))?;
            let (h, w) = (
                s.labels.height().min(out.height()),
                s.labels.width().min(out.width()),
            );
            Ok(argmax_labels(&out.crop(0, 0, h, w)?).remove(0))
        })
        .collect()
}

/// Metrics of `node`'s predictions against the samples' labels.
pub fn evaluate<T: Scalar>(net: &Net<T>, samples: &[Sample], node: &str) -> Result<Metrics> {
    let classes = net
        .spec()
        .node(node)
        .ok_or_else(|| Error::Graph(format!("no node `{node}`")))?
        .out_ch;
    let mut cm = ConfusionMatrix::new(classes);
    for (pred, s) in predict_samples(net, samples, node)?.iter().zip(samples) {
        cm.accumulate(pred, &s.labels)?;
    }
    cm.metrics()
}
