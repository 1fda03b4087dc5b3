//! The `fcn` command line: data generation, training, evaluation, geometry
//! reports, the shift-and-stitch check and the upper-bound sweep.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numerical failure (divergence, equivalence check above tolerance).

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::data::{gen_synth_dataset_par, read_label_dir, read_split, write_split, Sample};
use crate::error::{Error, Result};
use crate::gradcheck::random_tensor;
use crate::io::{read_checkpoint, write_checkpoint};
use crate::label::LabelMap;
use crate::metrics::{iu_upper_bound_set, ConfusionMatrix, Metrics, Resample};
use crate::net::Net;
use crate::spec::NetSpec;
use crate::stitch::compare_stitch_dense;
use crate::tensor::Scalar;
use crate::train::{history_csv, train, TrainConfig};

/// Environment variable overriding the default output root `runs`.
pub const RUN_DIR_ENV: &str = "FCN_RUN_DIR";
/// Largest stitch-check difference that passes.
pub const STITCH_TOL: f64 = 1e-5;

#[derive(Parser, Debug)]
#[command(
    name = "fcn",
    version,
    about = "Fully convolutional networks at desk scale"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic segmentation dataset (train and val splits).
    GenData(GenDataArgs),
    /// Train a net with minibatch SGD.
    Train(TrainArgs),
    /// Score predicted label maps against ground truth.
    Eval(EvalArgs),
    /// Receptive field, stride and offset of every node of a net.
    Rf(RfArgs),
    /// Mean IU attainable at each downsampling factor of the ground truth.
    IuBound(IuBoundArgs),
    /// Compare shift-and-stitch with the rarefied dense net on random input.
    StitchCheck(StitchArgs),
    /// Write predicted label maps for a split.
    Predict(PredictArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Output directory [default: $FCN_RUN_DIR/synth or runs/synth]
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training images
    #[arg(long, default_value_t = 150)]
    count: usize,
    /// Validation images
    #[arg(long, default_value_t = 50)]
    val_count: usize,
    /// Image height and width (at least 32)
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Class count including background
    #[arg(long, default_value_t = 6)]
    classes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker threads
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Net description file
    #[arg(long)]
    net: PathBuf,
    /// Dataset directory (with train/ and optionally val/, or a single split)
    #[arg(long)]
    data: PathBuf,
    /// Run directory [default: $FCN_RUN_DIR/train or runs/train]
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training config (key = value); flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Images per batch before scaling by 1/sample-p
    #[arg(long)]
    batch: Option<usize>,
    /// Loss sampling keep probability
    #[arg(long)]
    sample_p: Option<f64>,
    /// Checkpoint to initialize from (same-named parameters are copied)
    #[arg(long)]
    init: Option<PathBuf>,
    /// Divide the learning rate by this factor
    #[arg(long)]
    lr_drop: Option<f64>,
    /// Train in double precision
    #[arg(long)]
    f64: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Ground-truth directory (a split, or a dataset with val/)
    #[arg(long)]
    data: PathBuf,
    /// Directory of predicted label maps (same file names as the truth)
    #[arg(long, conflicts_with = "net")]
    pred: Option<PathBuf>,
    /// Net to predict with instead of --pred (needs --init)
    #[arg(long, requires = "init")]
    net: Option<PathBuf>,
    /// Checkpoint of --net
    #[arg(long)]
    init: Option<PathBuf>,
    /// Class count [default: largest label seen + 1, or the net's]
    #[arg(long)]
    classes: Option<usize>,
    /// Worker threads for per-image prediction
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Print CSV instead of a table
    #[arg(long)]
    csv: bool,
}

#[derive(Args, Debug)]
struct RfArgs {
    /// Net description file
    #[arg(long)]
    net: PathBuf,
    /// Print CSV instead of a table
    #[arg(long)]
    csv: bool,
}

#[derive(Args, Debug)]
struct IuBoundArgs {
    /// Ground-truth directory (a split, or a dataset with val/)
    #[arg(long)]
    data: PathBuf,
    /// Downsampling factors
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
    factors: Vec<usize>,
    /// Majority-vote downsampling instead of nearest (top-left anchor)
    #[arg(long)]
    majority: bool,
    /// Class count [default: largest label seen + 1]
    #[arg(long)]
    classes: Option<usize>,
    /// Print CSV instead of a table
    #[arg(long)]
    csv: bool,
}

#[derive(Args, Debug)]
struct StitchArgs {
    /// Chain net description file
    #[arg(long)]
    net: PathBuf,
    /// Seed of the parameters and the random input
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Expected total stride (checked against the net)
    #[arg(long)]
    factor: Option<usize>,
    /// Input height and width
    #[arg(long, default_value_t = 48)]
    size: usize,
    /// Checkpoint to load instead of random parameters
    #[arg(long)]
    init: Option<PathBuf>,
    /// Compute in double precision
    #[arg(long)]
    f64: bool,
}

#[derive(Args, Debug)]
struct PredictArgs {
    /// Net description file
    #[arg(long)]
    net: PathBuf,
    /// Checkpoint of the net
    #[arg(long)]
    init: PathBuf,
    /// Split directory of images (or a dataset with val/)
    #[arg(long)]
    data: PathBuf,
    /// Output directory [default: $FCN_RUN_DIR/pred or runs/pred]
    #[arg(long)]
    out: Option<PathBuf>,
    /// Name of the output node [default: the first output]
    #[arg(long)]
    node: Option<String>,
    /// Worker threads
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

/// Failure of a subcommand, carrying its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: exit_code(&e),
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 1,
        message: message.into(),
    }
}

/// Exit code of an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::File { source, .. } => exit_code(source),
        Error::Config(_) | Error::Invalid(_) => 1,
        Error::Divergence { .. } => 3,
        _ => 2,
    }
}

/// Parse `args` (including the program name), run, print to `out`, and
/// return the exit code. Errors go to stderr.
pub fn run(args: impl IntoIterator<Item = OsString>, out: &mut dyn Write) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> std::result::Result<(), Failure> {
    match cmd {
        Command::GenData(a) => gen_data(a, out),
        Command::Train(a) => cmd_train(a, out),
        Command::Eval(a) => eval(a, out),
        Command::Rf(a) => rf(a, out),
        Command::IuBound(a) => iu_bound(a, out),
        Command::StitchCheck(a) => stitch_check(a, out),
        Command::Predict(a) => predict(a, out),
    }
}

/// Output root: `$FCN_RUN_DIR` if set, else `runs`.
pub fn run_root() -> PathBuf {
    std::env::var_os(RUN_DIR_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

fn emit(out: &mut dyn Write, text: &str) -> std::result::Result<(), Failure> {
    out.write_all(text.as_bytes())
        .map_err(|e| Failure::from(Error::from(e)))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::from(e).at(dir))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::from(e).at(path))
}

/// `dir/val` when it exists, else `dir`.
fn eval_split(dir: &Path) -> PathBuf {
    let val = dir.join("val");
    if val.is_dir() {
        val
    } else {
        dir.to_path_buf()
    }
}

fn gen_data(a: GenDataArgs, out: &mut dyn Write) -> std::result::Result<(), Failure> {
    let dir = a.out.unwrap_or_else(|| run_root().join("synth"));
    create_dir(&dir)?;
    let echo = format!(
        "count = {}\nval_count = {}\nsize = {}\nclasses = {}\nseed = {}\nrng = chacha8\n",
        a.count, a.val_count, a.size, a.classes, a.seed
    );
    write_file(&dir.join("gen.txt"), &echo)?;
    let train = gen_synth_dataset_par(a.count, a.size, a.size, a.classes, a.seed, a.threads)?;
    // validation images come from a disjoint seed stream
    let val = gen_synth_dataset_par(
        a.val_count,
        a.size,
        a.size,
        a.classes,
        a.seed ^ 0x7661_6c00,
        a.threads,
    )?;
    write_split(dir.join("train"), &train)?;
    write_split(dir.join("val"), &val)?;
    emit(
        out,
        &format!(
            "wrote {} train and {} val images to {}\n",
            train.len(),
            val.len(),
            dir.display()
        ),
    )
}

fn read_spec(path: &Path) -> Result<NetSpec> {
    NetSpec::read(path)
}

fn resolve_train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::read(p)?,
        None => TrainConfig::default(),
    };
    let flags: [(&str, Option<String>); 9] = [
        ("seed", a.seed.map(|v| v.to_string())),
        ("epochs", a.epochs.map(|v| v.to_string())),
        ("lr", a.lr.map(|v| v.to_string())),
        ("momentum", a.momentum.map(|v| v.to_string())),
        ("weight_decay", a.weight_decay.map(|v| v.to_string())),
        ("batch_size", a.batch.map(|v| v.to_string())),
        ("sample_p", a.sample_p.map(|v| v.to_string())),
        (
            "init_checkpoint",
            a.init.as_ref().map(|v| v.display().to_string()),
        ),
        ("lr_drop_factor", a.lr_drop.map(|v| v.to_string())),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            cfg.set(k, &v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(a: TrainArgs, out: &mut dyn Write) -> std::result::Result<(), Failure> {
    let cfg = resolve_train_config(&a)?;
    let spec = read_spec(&a.net)?;
    let dir = a.out.clone().unwrap_or_else(|| run_root().join("train"));
    create_dir(&dir)?;
    let echo = format!(
        "# net = {}\n# data = {}\n# precision = {}\n{}",
        a.net.display(),
        a.data.display(),
        if a.f64 { "f64" } else { "f32" },
        cfg.to_text()
    );
    write_file(&dir.join("config.txt"), &echo)?;

    let (train_dir, val_dir) = if a.data.join("train").is_dir() {
        (
            a.data.join("train"),
            Some(a.data.join("val")).filter(|v| v.is_dir()),
        )
    } else {
        (a.data.clone(), None)
    };
    let train_set = read_split(&train_dir)?;
    let val_set = match &val_dir {
        Some(v) => read_split(v)?,
        None => Vec::new(),
    };
    let ckpt = match &cfg.init_checkpoint {
        Some(p) => Some(read_checkpoint(p)?),
        None => None,
    };
    let summary = if a.f64 {
        run_training::<f64>(spec, ckpt, &train_set, &val_set, &cfg, &dir)?
    } else {
        run_training::<f32>(spec, ckpt, &train_set, &val_set, &cfg, &dir)?
    };
    emit(out, &summary)
}

fn run_training<T: Scalar>(
    spec: NetSpec,
    ckpt: Option<crate::io::Checkpoint>,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
    dir: &Path,
) -> Result<String> {
    let mut net = match &ckpt {
        Some(c) => Net::<T>::transplant(spec, cfg.seed, c)?,
        None => Net::<T>::init(spec, cfg.seed)?,
    };
    let report = train(&mut net, train_set, val_set, cfg)?;
    write_file(&dir.join("history.csv"), &history_csv(&report.history))?;
    let params = net.params();
    write_checkpoint(
        params.iter().map(|(k, v)| (k.as_str(), v)),
        dir.join("checkpoint.fcnz"),
    )?;
    let mut s = format!(
        "{} iterations, final loss {:.6}\n",
        report.iterations,
        if report.final_loss.is_finite() {
            report.final_loss
        } else {
            0.0
        }
    );
    if let Some(m) = report.final_metrics {
        let _ = writeln!(s, "val {m}");
    }
    let _ = writeln!(s, "wrote {}", dir.display());
    Ok(s)
}

fn metrics_text(m: &Metrics, csv: bool) -> String {
    if csv {
        format!(
            "pixel_acc,mean_acc,mean_iu,fw_iu\n{},{},{},{}\n",
            m.pixel_acc, m.mean_acc, m.mean_iu, m.fw_iu
        )
    } else {
        format!(
            "pixel acc  {:.6}\nmean acc   {:.6}\nmean IU    {:.6}\nfw IU      {:.6}\n",
            m.pixel_acc, m.mean_acc, m.mean_iu, m.fw_iu
        )
    }
}

fn class_count(maps: &[&LabelMap]) -> usize {
    maps.iter()
        .filter_map(|l| l.max_label())
        .max()
        .map_or(1, |m| m as usize + 1)
}

fn load_net<T: Scalar>(net: &Path, init: &Path) -> Result<Net<T>> {
    let spec = read_spec(net)?;
    let ckpt = read_checkpoint(init)?;
    Net::with_params(
        spec,
        ckpt.iter()
            .map(|(k, v)| (k.clone(), v.cast::<T>()))
            .collect(),
    )
}

fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Invalid(e.to_string()))
}

/// Per-image predictions of `node` (default: the first output).
fn predict_maps(
    net: &Net<f32>,
    samples: &[Sample],
    node: Option<&str>,
    threads: usize,
) -> Result<Vec<LabelMap>> {
    let node = node.map_or_else(|| net.spec().outputs()[0].name.clone(), str::to_string);
    if net.spec().node(&node).is_none() {
        return Err(Error::Invalid(format!("no node `{node}`")));
    }
    pool(threads)?.install(|| {
        samples
            .par_iter()
            .map(|s| {
                crate::train::predict_samples(net, std::slice::from_ref(s), &node)
                    .map(|mut v| v.remove(0))
            })
            .collect()
    })
}

fn eval(a: EvalArgs, out: &mut dyn Write) -> std::result::Result<(), Failure> {
    let truth_dir = eval_split(&a.data);
    let (truth, pred): (Vec<LabelMap>, Vec<LabelMap>) = match (&a.pred, &a.net) {
        (Some(pred_dir), None) => {
            let truth = read_label_dir(&truth_dir)?;
            let preds = read_label_dir(pred_dir)?;
            let mut by_name: std::collections::BTreeMap<String, LabelMap> =
                preds.into_iter().collect();
            let mut pairs = (Vec::new(), Vec::new());
            for (name, t) in truth {
                let p = by_name.remove(&name).ok_or_else(|| {
                    Error::Label(format!("no prediction for `{name}`")).at(pred_dir)
                })?;
                pairs.0.push(t);
                pairs.1.push(p);
            }
            pairs
        }
        (None, Some(net)) => {
            let net = load_net::<f32>(net, a.init.as_deref().expect("clap requires --init"))?;
            let samples = read_split(&truth_dir)?;
            let preds = predict_maps(&net, &samples, None, a.threads)?;
            (samples.into_iter().map(|s| s.labels).collect(), preds)
        }
        _ => return Err(usage("eval needs exactly one of --pred or --net")),
    };
    let classes = a
        .classes
        .unwrap_or_else(|| class_count(&truth.iter().chain(&pred).collect::<Vec<_>>()));
    let mut cm = ConfusionMatrix::new(classes);
    for (p, t) in pred.iter().zip(&truth) {
        cm.accumulate(p, t)?;
    }
    let m = cm.metrics()?;
    emit(out, &metrics_text(&m, a.csv))
}

fn fmt_ratio(r: &crate::geom::Rational) -> String {
    if r.is_integer() {
        r.numer().to_string()
    } else {
        format!("{}/{}", r.numer(), r.denom())
    }
}

fn rf(a: RfArgs, out: &mut dyn Write) -> std::result::Result<(), Failure> {
    let spec = read_spec(&a.net)?;
    let net = Net::<f32>::init(spec, 0).map_err(|e| e.at(&a.net))?;
    let mut rows = Vec::new();
    let mut total = crate::geom::Rational::from_integer(1);
    for node in net.spec().nodes() {
        let s = net.summary(&node.name).expect("every node has a summary");
        total = total.max(s.stride);
        rows.push([
            node.name.clone(),
            node.kind_token(),
            fmt_ratio(&s.kernel),
            fmt_ratio(&s.stride),
            fmt_ratio(&s.offset),
            net.crop_offset(&node.name)
                .map_or(String::new(), |c| c.to_string()),
        ]);
    }
    let header = ["node", "kind", "rf", "stride", "offset", "crop"];
    let mut text = String::new();
    if a.csv {
        let _ = writeln!(text, "{}", header.join(","));
        for r in &rows {
            let _ = writeln!(text, "{}", r.join(","));
        }
    } else {
        let widths: Vec<usize> = (0..header.len())
            .map(|i| {
                rows.iter()
                    .map(|r| r[i].len())
                    .chain([header[i].len()])
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let line = |cells: &[&str]| {
            cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:<w$}"))
                .collect::<Vec<_>>()
                .join("  ")
                .trim_end()
                .to_string()
        };
        let _ = writeln!(text, "{}", line(&header));
        for r in &rows {
            let _ = writeln!(
                text,
                "{}",
                line(&r.iter().map(String::as_str).collect::<Vec<_>>())
            );
        }
        for o in net.spec().outputs() {
            let _ = writeln!(
                text,
                "output {} stride {}",
                o.name,
                fmt_ratio(&net.summary(&o.name).unwrap().stride)
            );
        }
        let _ = writeln!(text, "total stride {}", fmt_ratio(&total));
    }
    emit(out, &text)
}

fn iu_bound(a: IuBoundArgs, out: &mut dyn Write) -> std::result::Result<(), Failure> {
    let dir = eval_split(&a.data);
    let truths: Vec<LabelMap> = read_label_dir(&dir)?.into_iter().map(|(_, l)| l).collect();
    if truths.is_empty() {
        return Err(Error::Invalid(format!("no label maps in {}", dir.display())).into());
    }
    let classes = a
        .classes
        .unwrap_or_else(|| class_count(&truths.iter().collect::<Vec<_>>()));
    let how = if a.majority {
        Resample::Majority
    } else {
        Resample::Nearest
    };
    let mut text = String::new();
    if a.csv {
        text.push_str("factor,pixel_acc,mean_acc,mean_iu,fw_iu\n");
    } else {
        text.push_str("factor  pixel acc  mean acc  mean IU   fw IU\n");
    }
    for &f in &a.factors {
        if f == 0 {
            return Err(usage("factors must be at least 1"));
        }
        let m = iu_upper_bound_set(&truths, f, classes, how)?;
        if a.csv {
            let _ = writeln!(
                text,
                "{f},{},{},{},{}",
                m.pixel_acc, m.mean_acc, m.mean_iu, m.fw_iu
            );
        } else {
            let _ = writeln!(
                text,
                "{f:<6}  {:<9.4}  {:<8.4}  {:<8.4}  {:.4}",
                m.pixel_acc, m.mean_acc, m.mean_iu, m.fw_iu
            );
        }
    }
    emit(out, &text)
}

fn stitch_check(a: StitchArgs, out: &mut dyn Write) -> std::result::Result<(), Failure> {
    let spec = read_spec(&a.net)?;
    let report = if a.f64 {
        stitch_report::<f64>(spec, &a)?
    } else {
        stitch_report::<f32>(spec, &a)?
    };
    if let Some(f) = a.factor {
        if f != report.stride {
            return Err(usage(format!(
                "net stride is {}, --factor asks for {f}",
                report.stride
            )));
        }
    }
    emit(
        out,
        &format!(
            "stride {}\ncompared {} cells\nmax abs difference {:e}\n",
            report.stride, report.compared, report.max_diff
        ),
    )?;
    if report.max_diff < STITCH_TOL {
        emit(out, "equivalent\n")
    } else {
        Err(Failure {
            code: 3,
            message: format!("difference {:e} exceeds {STITCH_TOL:e}", report.max_diff),
        })
    }
}

fn stitch_report<T: Scalar>(spec: NetSpec, a: &StitchArgs) -> Result<crate::stitch::StitchReport> {
    let net = match &a.init {
        Some(p) => Net::<T>::with_params(
            spec,
            read_checkpoint(p)?
                .iter()
                .map(|(k, v)| (k.clone(), v.cast::<T>()))
                .collect(),
        )?,
        None => {
            let base = Net::<T>::init(spec.clone(), a.seed)?;
            // random values everywhere so zero-initialized layers take part too,
            // scaled by 1/sqrt(fan-in) to keep activations near unit size
            let params = base
                .params()
                .iter()
                .enumerate()
                .map(|(i, (k, v))| {
                    let [_, a1, a2, a3] = v.dims();
                    let scale = T::of_f64(1.0 / ((a1 * a2 * a3) as f64).sqrt());
                    let t = random_tensor::<T>(v.dims(), a.seed.wrapping_add(i as u64 + 1))
                        .map(|x| x * scale);
                    (k.clone(), t)
                })
                .collect();
            Net::with_params(spec, params)?
        }
    };
    let channels = net.spec().input().out_ch;
    let x = random_tensor::<T>([1, channels, a.size, a.size], a.seed);
    let report = compare_stitch_dense(&net, &x)?;
    if report.compared == 0 {
        return Err(Error::Invalid(format!(
            "a {0}x{0} input has no cell whose receptive field lies inside it; raise --size",
            a.size
        )));
    }
    Ok(report)
}

fn predict(a: PredictArgs, out: &mut dyn Write) -> std::result::Result<(), Failure> {
    let net = load_net::<f32>(&a.net, &a.init)?;
    let split = eval_split(&a.data);
    let samples = read_split(&split)?;
    let names: Vec<String> = read_label_dir(&split)?
        .into_iter()
        .map(|(n, _)| n)
        .collect();
    let preds = predict_maps(&net, &samples, a.node.as_deref(), a.threads)?;
    let dir = a.out.unwrap_or_else(|| run_root().join("pred"));
    create_dir(&dir)?;
    for (name, p) in names.iter().zip(&preds) {
        p.write_pgm(dir.join(name))?;
    }
    emit(
        out,
        &format!("wrote {} label maps to {}\n", preds.len(), dir.display()),
    )
}
