//! Per-pixel softmax cross-entropy, spatial loss sampling and multi-head losses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::label::{LabelMap, IGNORE};
use crate::tensor::{Scalar, Tensor};

/// How per-pixel terms are reduced to the scalar loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Normalize {
    /// Mean over contributing pixels.
    #[default]
    Mean,
    /// Plain sum.
    Sum,
}

impl std::str::FromStr for Normalize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Normalize::Mean),
            "sum" => Ok(Normalize::Sum),
            _ => Err(Error::Config(format!(
                "normalize must be `mean` or `sum`, got `{s}`"
            ))),
        }
    }
}

impl std::fmt::Display for Normalize {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Normalize::Mean => "mean",
            Normalize::Sum => "sum",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub loss: f64,
    /// `n x 1 x h x w` weighted per-pixel terms (zero where nothing contributes).
    pub pixel_loss: Tensor<f64>,
    /// Pixels that contributed: labelled, not ignored, kept by the mask.
    pub count: usize,
}

/// Bernoulli keep mask over the cells of a loss map.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleMask {
    pub p: f64,
    pub seed: u64,
    shape: [usize; 3],
    keep: Vec<bool>,
}

impl SampleMask {
    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn keeps(&self, b: usize, y: usize, x: usize) -> bool {
        let [_, h, w] = self.shape;
        self.keep[(b * h + y) * w + x]
    }

    pub fn kept(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }
}

/// I.i.d. Bernoulli(`p`) mask of shape `[n, h, w]`.
pub fn sample_mask(p: f64, shape: [usize; 3], seed: u64) -> Result<SampleMask> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::Invalid(format!(
            "sampling probability {p} outside (0, 1]"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = (0..shape.iter().product::<usize>())
        .map(|_| rng.random::<f64>() < p)
        .collect();
    Ok(SampleMask {
        p,
        seed,
        shape,
        keep,
    })
}

/// Softmax cross-entropy at every pixel of `scores` (`n x K x h x w`) against
/// one label map per batch item. Returns the loss and its gradient with
/// respect to the scores.
pub fn softmax_xent_spatial<T: Scalar>(
    scores: &Tensor<T>,
    targets: &[LabelMap],
    weights: Option<&[f64]>,
    mask: Option<&SampleMask>,
    normalize: Normalize,
) -> Result<(LossReport, Tensor<T>)> {
    let [n, k, h, w] = scores.dims();
    if targets.len() != n {
        return Err(Error::Shape(format!(
            "{} label maps for a batch of {n}",
            targets.len()
        )));
    }
    if let Some(t) = targets.iter().find(|t| (t.height(), t.width()) != (h, w)) {
        return Err(Error::Shape(format!(
            "scores are {h}x{w}, labels {}x{}",
            t.height(),
            t.width()
        )));
    }
    if let Some(m) = mask {
        if m.shape() != [n, h, w] {
            return Err(Error::Shape(format!(
                "mask {:?} vs scores {:?}",
                m.shape(),
                [n, h, w]
            )));
        }
    }
    if let Some(wts) = weights {
        if wts.len() != k {
            return Err(Error::Shape(format!(
                "{} class weights for {k} classes",
                wts.len()
            )));
        }
    }
    for t in targets {
        t.validate(k)?;
    }
    let plane = h * w;
    let mut pixel_loss = Tensor::<f64>::zeros([n, 1, h, w]);
    let mut grad = vec![0.0f64; scores.len()];
    let mut probs = vec![0.0f64; k];
    let mut count = 0usize;
    let data = scores.data();
    for (b, target) in targets.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                let t = target.get(y, x);
                if t == IGNORE || mask.is_some_and(|m| !m.keeps(b, y, x)) {
                    continue;
                }
                let t = t as usize;
                let at = |c: usize| (b * k + c) * plane + y * w + x;
                let max = (0..k)
                    .map(|c| data[at(c)].as_f64())
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for (c, pr) in probs.iter_mut().enumerate() {
                    *pr = (data[at(c)].as_f64() - max).exp();
                    z += *pr;
                }
                let wt = weights.map_or(1.0, |wts| wts[t]);
                let term = wt * (z.ln() + max - data[at(t)].as_f64());
                pixel_loss.data_mut()[b * plane + y * w + x] = term;
                for (c, pr) in probs.iter().enumerate() {
                    let onehot = if c == t { 1.0 } else { 0.0 };
                    grad[at(c)] = wt * (pr / z - onehot);
                }
                count += 1;
            }
        }
    }
    let total: f64 = pixel_loss.data().iter().sum();
    let scale = match normalize {
        Normalize::Sum => 1.0,
        Normalize::Mean if count > 0 => 1.0 / count as f64,
        Normalize::Mean => 0.0,
    };
    let grad = Tensor::new(
        scores.dims(),
        grad.into_iter().map(|g| T::of_f64(g * scale)).collect(),
    )?;
    Ok((
        LossReport {
            loss: total * scale,
            pixel_loss,
            count,
        },
        grad,
    ))
}

/// One prediction head: its scores, targets and loss weight.
pub struct Head<'a, T: Scalar> {
    pub scores: &'a Tensor<T>,
    pub targets: &'a [LabelMap],
    pub class_weights: Option<&'a [f64]>,
    pub weight: f64,
}

/// Weighted sum of the heads' losses, with one score gradient per head.
pub fn multi_head_loss<T: Scalar>(
    heads: &[Head<'_, T>],
    mask: Option<&SampleMask>,
    normalize: Normalize,
) -> Result<(LossReport, Vec<Tensor<T>>)> {
    let Some(first) = heads.first() else {
        return Err(Error::Invalid(
            "multi-head loss needs at least one head".into(),
        ));
    };
    let [n, _, h, w] = first.scores.dims();
    let mut total = LossReport {
        loss: 0.0,
        pixel_loss: Tensor::zeros([n, 1, h, w]),
        count: 0,
    };
    let mut grads = Vec::with_capacity(heads.len());
    for head in heads {
        let (r, mut g) = softmax_xent_spatial(
            head.scores,
            head.targets,
            head.class_weights,
            mask,
            normalize,
        )?;
        total.loss += head.weight * r.loss;
        total.count += r.count;
        let mut pl = r.pixel_loss;
        pl.scale(head.weight);
        total.pixel_loss.add_assign(&pl)?;
        g.scale(T::of_f64(head.weight));
        grads.push(g);
    }
    Ok((total, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradient, random_tensor};

    #[test]
    fn zero_scores_give_log_k() {
        for k in [2usize, 5, 21] {
            let s = Tensor::<f64>::zeros([1, k, 1, 1]);
            let t = LabelMap::filled(1, 1, 1);
            let (r, _) = softmax_xent_spatial(&s, &[t], None, None, Normalize::Mean).unwrap();
            assert!((r.loss - (k as f64).ln()).abs() < 1e-12);
            assert_eq!(r.count, 1);
        }
    }

    #[test]
    fn ignored_pixels_contribute_nothing() {
        let s = random_tensor::<f64>([2, 3, 2, 2], 1);
        let t = vec![LabelMap::filled(2, 2, IGNORE); 2];
        let (r, g) = softmax_xent_spatial(&s, &t, None, None, Normalize::Mean).unwrap();
        assert_eq!((r.loss, r.count), (0.0, 0));
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let s = random_tensor::<f64>([1, 3, 4, 4], 7);
        let t = LabelMap::from_fn(4, 4, |y, x| {
            if (y, x) == (1, 2) {
                IGNORE
            } else {
                ((y * 4 + x) % 3) as u8
            }
        });
        let wts = [0.5, 1.0, 2.0];
        for norm in [Normalize::Mean, Normalize::Sum] {
            let (_, g) =
                softmax_xent_spatial(&s, std::slice::from_ref(&t), Some(&wts), None, norm).unwrap();
            check_gradient(
                &s,
                &g,
                |s| {
                    softmax_xent_spatial(s, std::slice::from_ref(&t), Some(&wts), None, norm)
                        .unwrap()
                        .0
                        .loss
                },
                1e-6,
            )
            .unwrap();
        }
    }

    #[test]
    fn loss_is_sum_or_mean_of_pixel_map() {
        let s = random_tensor::<f64>([2, 4, 3, 3], 2);
        let t: Vec<LabelMap> = (0..2)
            .map(|b| LabelMap::from_fn(3, 3, |y, x| ((b + y + x) % 4) as u8))
            .collect();
        let m = sample_mask(0.5, [2, 3, 3], 3).unwrap();
        let (sum, _) = softmax_xent_spatial(&s, &t, None, Some(&m), Normalize::Sum).unwrap();
        let (mean, _) = softmax_xent_spatial(&s, &t, None, Some(&m), Normalize::Mean).unwrap();
        assert_eq!(sum.count, m.kept());
        let total: f64 = sum.pixel_loss.data().iter().sum();
        assert!((sum.loss - total).abs() < 1e-12);
        assert!((mean.loss - total / m.kept() as f64).abs() < 1e-12);
    }

    #[test]
    fn unit_class_weights_are_exact() {
        let s = random_tensor::<f32>([1, 3, 5, 5], 4);
        let t = [LabelMap::from_fn(5, 5, |y, x| ((y * x) % 3) as u8)];
        let a = softmax_xent_spatial(&s, &t, None, None, Normalize::Mean).unwrap();
        let b = softmax_xent_spatial(&s, &t, Some(&[1.0; 3]), None, Normalize::Mean).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shape_and_label_errors() {
        let s = Tensor::<f32>::zeros([1, 2, 3, 3]);
        assert!(softmax_xent_spatial(
            &s,
            &[LabelMap::filled(3, 4, 0)],
            None,
            None,
            Normalize::Mean
        )
        .is_err());
        assert!(softmax_xent_spatial(
            &s,
            &[LabelMap::filled(3, 3, 2)],
            None,
            None,
            Normalize::Mean
        )
        .is_err());
        assert!(softmax_xent_spatial(&s, &[], None, None, Normalize::Mean).is_err());
    }

    #[test]
    fn masks() {
        assert!(sample_mask(1.0, [1, 8, 8], 0)
            .unwrap()
            .keep
            .iter()
            .all(|&k| k));
        assert_eq!(
            sample_mask(0.4, [2, 5, 5], 9).unwrap(),
            sample_mask(0.4, [2, 5, 5], 9).unwrap()
        );
        assert!(sample_mask(0.0, [1, 1, 1], 0).is_err());
        assert!(sample_mask(1.5, [1, 1, 1], 0).is_err());
        let big = sample_mask(0.3, [1, 250, 400], 42).unwrap();
        let frac = big.kept() as f64 / big.len() as f64;
        assert!((frac - 0.3).abs() < 0.01, "{frac}");
    }

    #[test]
    fn heads_add_up() {
        let s = random_tensor::<f64>([1, 3, 2, 2], 5);
        let t = [LabelMap::from_fn(2, 2, |y, x| (y + x) as u8)];
        let head = || Head {
            scores: &s,
            targets: &t,
            class_weights: None,
            weight: 1.0,
        };
        let (single, _) = softmax_xent_spatial(&s, &t, None, None, Normalize::Mean).unwrap();
        let (one, g1) = multi_head_loss(&[head()], None, Normalize::Mean).unwrap();
        assert_eq!(one.loss, single.loss);
        let (two, g2) = multi_head_loss(&[head(), head()], None, Normalize::Mean).unwrap();
        assert_eq!(two.loss, 2.0 * single.loss);
        assert_eq!(g2[1], g1[0]);
        assert!(multi_head_loss::<f64>(&[], None, Normalize::Mean).is_err());
    }
}
