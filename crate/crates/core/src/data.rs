//! Synthetic segmentation data: colored shapes over a textured background.
//!
//! Each image holds one to four non-overlapping rectangles and discs of
//! distinct classes, sized so that about a quarter of the pixels are
//! foreground, and often a thin two-pixel bar. Pixel colors are the class
//! color plus Gaussian noise (σ = 0.1), clipped to `[0, 1]`.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::io::{read_tensor, write_tensor};
use crate::label::LabelMap;
use crate::tensor::Tensor;

/// Class colors; class 0 is the background.
pub const PALETTE: [[f64; 3]; 16] = [
    [0.45, 0.45, 0.45],
    [0.90, 0.10, 0.10],
    [0.10, 0.75, 0.15],
    [0.15, 0.25, 0.95],
    [0.95, 0.85, 0.10],
    [0.85, 0.15, 0.85],
    [0.10, 0.85, 0.85],
    [0.95, 0.55, 0.10],
    [0.55, 0.25, 0.05],
    [0.05, 0.05, 0.05],
    [0.98, 0.98, 0.98],
    [0.55, 0.85, 0.55],
    [0.55, 0.55, 0.95],
    [0.95, 0.60, 0.65],
    [0.35, 0.05, 0.45],
    [0.20, 0.45, 0.30],
];

pub const NOISE_STD: f64 = 0.1;

/// An image (`1 x 3 x H x W`, values in `[0, 1]`) with its labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub labels: LabelMap,
    pub seed: u64,
}

fn check_params(h: usize, w: usize, classes: usize) -> Result<()> {
    if classes < 2 || classes > PALETTE.len() {
        return Err(Error::Invalid(format!(
            "class count {classes} outside 2..={}",
            PALETTE.len()
        )));
    }
    if h < 32 || w < 32 {
        return Err(Error::Invalid(format!(
            "images must be at least 32x32, got {h}x{w}"
        )));
    }
    Ok(())
}

#[derive(Clone, Copy)]
enum Shape {
    Rect {
        y0: usize,
        x0: usize,
        y1: usize,
        x1: usize,
    },
    Disc {
        cy: f64,
        cx: f64,
        r: f64,
    },
}

impl Shape {
    fn contains(&self, y: usize, x: usize) -> bool {
        match *self {
            Shape::Rect { y0, x0, y1, x1 } => (y0..y1).contains(&y) && (x0..x1).contains(&x),
            Shape::Disc { cy, cx, r } => {
                let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                dy * dy + dx * dx <= r * r
            }
        }
    }
}

/// One sample from its own seed.
pub fn gen_sample(h: usize, w: usize, classes: usize, seed: u64) -> Result<Sample> {
    check_params(h, w, classes)?;
    let colors: Vec<usize> = (0..classes).collect();
    gen_sample_colors(h, w, &colors, seed)
}

/// One sample whose class `c` is drawn in `PALETTE[colors[c]]`.
pub fn gen_sample_colors(h: usize, w: usize, colors: &[usize], seed: u64) -> Result<Sample> {
    check_params(h, w, colors.len())?;
    if let Some(&bad) = colors.iter().find(|&&c| c >= PALETTE.len()) {
        return Err(Error::Invalid(format!("palette has no color {bad}")));
    }
    let classes = colors.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = LabelMap::filled(h, w, 0);
    let area = (h * w) as f64;
    let coverage = rng.random_range(0.17..0.33);
    let objects = rng.random_range(1..=4usize).min(classes - 1);
    let mut pool: Vec<u8> = (1..classes as u8).collect();
    pool.shuffle(&mut rng);
    for (i, &class) in pool.iter().take(objects).enumerate() {
        let target = coverage * area / objects as f64;
        // the first object is sometimes a long thin bar
        let bar = i == 0 && rng.random_bool(0.5);
        for _attempt in 0..50 {
            let shape = if bar {
                let len = rng.random_range(h.min(w) / 2..h.min(w) - 2);
                let (bh, bw) = if rng.random_bool(0.5) {
                    (2, len)
                } else {
                    (len, 2)
                };
                let (y0, x0) = (rng.random_range(0..=h - bh), rng.random_range(0..=w - bw));
                Shape::Rect {
                    y0,
                    x0,
                    y1: y0 + bh,
                    x1: x0 + bw,
                }
            } else if rng.random_bool(0.5) {
                let aspect: f64 = rng.random_range(0.5..2.0);
                let bh = ((target * aspect).sqrt().round() as usize).clamp(3, h - 2);
                let bw = ((target / bh as f64).round() as usize).clamp(3, w - 2);
                let (y0, x0) = (rng.random_range(0..=h - bh), rng.random_range(0..=w - bw));
                Shape::Rect {
                    y0,
                    x0,
                    y1: y0 + bh,
                    x1: x0 + bw,
                }
            } else {
                let r = (target / PI).sqrt().clamp(2.0, h.min(w) as f64 / 2.0 - 1.0);
                let cy = rng.random_range(r..h as f64 - r);
                let cx = rng.random_range(r..w as f64 - r);
                Shape::Disc { cy, cx, r }
            };
            // keep a one-pixel background gap around existing objects
            let cells: Vec<(usize, usize)> = (0..h)
                .flat_map(|y| (0..w).map(move |x| (y, x)))
                .filter(|&(y, x)| shape.contains(y, x))
                .collect();
            let clear = cells.iter().all(|&(y, x)| {
                (y.saturating_sub(1)..(y + 2).min(h)).all(|yy| {
                    (x.saturating_sub(1)..(x + 2).min(w)).all(|xx| labels.get(yy, xx) == 0)
                })
            });
            if clear && !cells.is_empty() {
                for (y, x) in cells {
                    labels.set(y, x, class);
                }
                break;
            }
        }
    }
    let noise = Normal::new(0.0, NOISE_STD).expect("positive std");
    // background texture: a random low-frequency plaid
    let (fy, fx) = (rng.random_range(0.15..0.6), rng.random_range(0.15..0.6));
    let (py, px): (f64, f64) = (
        rng.random_range(0.0..2.0 * PI),
        rng.random_range(0.0..2.0 * PI),
    );
    let mut image = Tensor::zeros([1, 3, h, w]);
    for y in 0..h {
        for x in 0..w {
            let class = labels.get(y, x) as usize;
            let texture = if class == 0 {
                0.12 * ((fy * y as f64 + py).sin() * (fx * x as f64 + px).sin())
            } else {
                0.0
            };
            for (c, base) in PALETTE[colors[class]].iter().enumerate() {
                let v = base + texture + noise.sample(&mut rng);
                image.set(0, c, y, x, v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    Ok(Sample {
        image,
        labels,
        seed,
    })
}

/// Seed of the `i`-th sample of a dataset.
pub fn sample_seed(seed: u64, i: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64 + 1);
    rng.random()
}

/// `n` samples; sample `i` depends only on `(seed, i)`.
pub fn gen_synth_dataset(
    n: usize,
    h: usize,
    w: usize,
    classes: usize,
    seed: u64,
) -> Result<Vec<Sample>> {
    check_params(h, w, classes)?;
    (0..n)
        .map(|i| gen_sample(h, w, classes, sample_seed(seed, i)))
        .collect()
}

/// Same as [`gen_synth_dataset`], generated on `threads` worker threads.
pub fn gen_synth_dataset_par(
    n: usize,
    h: usize,
    w: usize,
    classes: usize,
    seed: u64,
    threads: usize,
) -> Result<Vec<Sample>> {
    use rayon::prelude::*;
    check_params(h, w, classes)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Invalid(e.to_string()))?;
    pool.install(|| {
        (0..n)
            .into_par_iter()
            .map(|i| gen_sample(h, w, classes, sample_seed(seed, i)))
            .collect()
    })
}

/// Foreground/background labels (ignore kept), a second target for two-head nets.
pub fn foreground_labels(labels: &LabelMap) -> LabelMap {
    LabelMap::from_fn(labels.height(), labels.width(), |y, x| {
        match labels.get(y, x) {
            0 => 0,
            crate::label::IGNORE => crate::label::IGNORE,
            _ => 1,
        }
    })
}

/// Random `size x size` crops labelled by the class of their center pixel
/// (the top-left of the middle four for even sizes).
pub fn center_patches(
    samples: &[Sample],
    size: usize,
    per_image: usize,
    seed: u64,
) -> Result<Vec<Sample>> {
    let c = (size.max(1) - 1) / 2;
    patches(samples, size, per_image, seed, |l| l.get(c, c))
}

/// Random `size x size` crops labelled by their most frequent foreground
/// class, or background when they hold none: a whole-patch label that says
/// what is present but not where.
pub fn dominant_patches(
    samples: &[Sample],
    size: usize,
    per_image: usize,
    seed: u64,
) -> Result<Vec<Sample>> {
    patches(samples, size, per_image, seed, |l| {
        let mut counts = [0usize; 256];
        for &v in l.labels() {
            counts[v as usize] += 1;
        }
        (1..crate::label::IGNORE as usize)
            .filter(|&c| counts[c] > 0)
            .max_by_key(|&c| (counts[c], std::cmp::Reverse(c)))
            .map_or(0, |c| c as u8)
    })
}

fn patches(
    samples: &[Sample],
    size: usize,
    per_image: usize,
    seed: u64,
    label: impl Fn(&LabelMap) -> u8,
) -> Result<Vec<Sample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(samples.len() * per_image);
    for s in samples {
        let (h, w) = (s.labels.height(), s.labels.width());
        if h < size || w < size {
            return Err(Error::Shape(format!(
                "{h}x{w} image is smaller than a {size} patch"
            )));
        }
        for _ in 0..per_image {
            let (y, x) = (
                rng.random_range(0..=h - size),
                rng.random_range(0..=w - size),
            );
            let window = LabelMap::from_fn(size, size, |dy, dx| s.labels.get(y + dy, x + dx));
            out.push(Sample {
                image: s.image.crop(y, x, size, size)?,
                labels: LabelMap::filled(1, 1, label(&window)),
                seed: s.seed,
            });
        }
    }
    Ok(out)
}

pub fn background_fraction(samples: &[Sample]) -> f64 {
    let (bg, total) = samples.iter().fold((0usize, 0usize), |(bg, t), s| {
        (
            bg + s.labels.labels().iter().filter(|&&l| l == 0).count(),
            t + s.labels.labels().len(),
        )
    });
    bg as f64 / total.max(1) as f64
}

/// `dir/NNNN.fcnt` images and `dir/NNNN.pgm` labels.
pub fn write_split(dir: impl AsRef<Path>, samples: &[Sample]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::from(e).at(dir))?;
    for (i, s) in samples.iter().enumerate() {
        write_tensor(&s.image, dir.join(format!("{i:04}.fcnt")))?;
        s.labels.write_pgm(dir.join(format!("{i:04}.pgm")))?;
    }
    Ok(())
}

/// Read a split written by [`write_split`]: every `*.fcnt` with its `.pgm`, in name order.
pub fn read_split(dir: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let dir = dir.as_ref();
    let mut images: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::from(e).at(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "fcnt"))
        .collect();
    images.sort();
    images
        .into_iter()
        .map(|p| {
            let image = read_tensor(&p)?;
            let labels = LabelMap::read_pgm(p.with_extension("pgm"))?;
            if image.dims() != [1, 3, labels.height(), labels.width()] {
                return Err(Error::Shape(format!(
                    "image {:?} does not match {}x{} labels",
                    image.dims(),
                    labels.height(),
                    labels.width()
                ))
                .at(&p));
            }
            Ok(Sample {
                image,
                labels,
                seed: 0,
            })
        })
        .collect()
}

/// Label maps of every `*.pgm` in `dir`, in name order, with their file names.
pub fn read_label_dir(dir: impl AsRef<Path>) -> Result<Vec<(String, LabelMap)>> {
    let dir = dir.as_ref();
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::from(e).at(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pgm"))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let name = p
                .file_name()
                .unwrap_or_default()
                .to_string_lossy()
                .into_owned();
            Ok((name, LabelMap::read_pgm(&p)?))
        })
        .collect()
}
