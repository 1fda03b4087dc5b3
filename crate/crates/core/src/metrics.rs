//! Confusion matrices, the four segmentation scores, and IU upper bounds from
//! resampled ground truth.

use std::fmt;

use crate::error::{Error, Result};
use crate::label::{LabelMap, IGNORE};

/// `counts[i * classes + j]` = pixels of true class `i` predicted as `j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub pixel_acc: f64,
    pub mean_acc: f64,
    pub mean_iu: f64,
    pub fw_iu: f64,
}

impl fmt::Display for Metrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "pixel acc {:.4}  mean acc {:.4}  mean IU {:.4}  f.w. IU {:.4}",
            self.pixel_acc, self.mean_acc, self.mean_iu, self.fw_iu
        )
    }
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    /// From a row-major `classes x classes` count table.
    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::Shape(format!(
                "{classes} classes need {} counts, got {}",
                classes * classes,
                counts.len()
            )));
        }
        Ok(ConfusionMatrix { classes, counts })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// Pixels of class `i` (`t_i`).
    pub fn class_total(&self, i: usize) -> u64 {
        self.counts[i * self.classes..(i + 1) * self.classes]
            .iter()
            .sum()
    }

    /// Pixels predicted as class `j`.
    pub fn predicted_total(&self, j: usize) -> u64 {
        (0..self.classes).map(|i| self.count(i, j)).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Count every non-ignore truth pixel at `(truth, pred)`.
    pub fn accumulate(&mut self, pred: &LabelMap, truth: &LabelMap) -> Result<()> {
        if (pred.height(), pred.width()) != (truth.height(), truth.width()) {
            return Err(Error::Shape(format!(
                "prediction {}x{} vs truth {}x{}",
                pred.height(),
                pred.width(),
                truth.height(),
                truth.width()
            )));
        }
        let k = self.classes;
        if let Some(p) = pred.labels().iter().find(|&&p| p as usize >= k) {
            return Err(Error::Label(format!("prediction {p} outside {k} classes")));
        }
        truth.validate(k)?;
        for (&p, &t) in pred.labels().iter().zip(truth.labels()) {
            if t != IGNORE {
                self.counts[t as usize * k + p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Shape(
                "confusion matrices of different class counts".into(),
            ));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Per-class IU; `None` for classes absent from the truth.
    pub fn class_iu(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|i| {
                let t = self.class_total(i);
                (t > 0).then(|| {
                    let nii = self.count(i, i);
                    nii as f64 / (t + self.predicted_total(i) - nii) as f64
                })
            })
            .collect()
    }

    /// Pixel accuracy, mean accuracy, mean IU and frequency-weighted IU.
    /// Classes absent from the truth are left out of the two means.
    pub fn metrics(&self) -> Result<Metrics> {
        let total = self.total();
        if total == 0 {
            return Err(Error::EmptyConfusion);
        }
        let mut correct = 0u64;
        let (mut acc_sum, mut iu_sum, mut fw_sum, mut present) = (0.0, 0.0, 0.0, 0usize);
        for (i, iu) in self.class_iu().into_iter().enumerate() {
            let nii = self.count(i, i);
            correct += nii;
            let Some(iu) = iu else { continue };
            let t = self.class_total(i) as f64;
            present += 1;
            acc_sum += nii as f64 / t;
            iu_sum += iu;
            fw_sum += t * iu;
        }
        Ok(Metrics {
            pixel_acc: correct as f64 / total as f64,
            mean_acc: acc_sum / present as f64,
            mean_iu: iu_sum / present as f64,
            fw_iu: fw_sum / total as f64,
        })
    }
}

/// How ground truth is reduced to the coarse grid for the IU bound.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Resample {
    /// Top-left pixel of each `f x f` block (first non-ignore pixel when the
    /// top-left one is ignored).
    #[default]
    Nearest,
    /// Most frequent non-ignore label in the block; ties go to the smaller label.
    Majority,
}

/// Downsample `truth` by `f` and upsample back by nearest neighbour: the best
/// prediction any model with output stride `f` could make.
pub fn resampled_truth(truth: &LabelMap, f: usize, how: Resample) -> Result<LabelMap> {
    let (h, w) = (truth.height(), truth.width());
    if f == 0 {
        return Err(Error::Invalid(
            "downsampling factor must be positive".into(),
        ));
    }
    if f > h && f > w {
        return Err(Error::Invalid(format!(
            "factor {f} exceeds both extents of a {h}x{w} map"
        )));
    }
    let (ch, cw) = (h.div_ceil(f), w.div_ceil(f));
    let mut coarse = vec![0u8; ch * cw];
    for cy in 0..ch {
        for cx in 0..cw {
            let block = (cy * f..((cy + 1) * f).min(h))
                .flat_map(|y| (cx * f..((cx + 1) * f).min(w)).map(move |x| (y, x)))
                .map(|(y, x)| truth.get(y, x))
                .filter(|&l| l != IGNORE);
            coarse[cy * cw + cx] = match how {
                Resample::Nearest => {
                    let mut block = block;
                    block.next().unwrap_or(0)
                }
                Resample::Majority => {
                    let mut hist = [0u32; 256];
                    for l in block {
                        hist[l as usize] += 1;
                    }
                    // max_by_key keeps the last maximum; scan from the top
                    (0..256usize)
                        .rev()
                        .max_by_key(|&l| hist[l])
                        .filter(|&l| hist[l] > 0)
                        .unwrap_or(0) as u8
                }
            };
        }
    }
    Ok(LabelMap::from_fn(h, w, |y, x| coarse[(y / f) * cw + x / f]))
}

/// Mean IU of the resampled truth against the truth itself.
pub fn iu_upper_bound(truth: &LabelMap, f: usize, classes: usize, how: Resample) -> Result<f64> {
    let mut cm = ConfusionMatrix::new(classes);
    cm.accumulate(&resampled_truth(truth, f, how)?, truth)?;
    Ok(cm.metrics()?.mean_iu)
}

/// Pooled bound over many maps: one confusion matrix for the whole set.
pub fn iu_upper_bound_set(
    truths: &[LabelMap],
    f: usize,
    classes: usize,
    how: Resample,
) -> Result<Metrics> {
    let mut cm = ConfusionMatrix::new(classes);
    for t in truths {
        cm.accumulate(&resampled_truth(t, f, how)?, t)?;
    }
    cm.metrics()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn hand_confusion_matrix() {
        let cm = ConfusionMatrix::from_counts(2, vec![3, 1, 2, 4]).unwrap();
        let m = cm.metrics().unwrap();
        assert!(close(m.pixel_acc, 0.7));
        assert!(close(m.mean_acc, (3.0 / 4.0 + 4.0 / 6.0) / 2.0));
        assert!(close(m.mean_iu, (3.0 / 6.0 + 4.0 / 7.0) / 2.0));
        assert!(close(
            m.fw_iu,
            (4.0 * (3.0 / 6.0) + 6.0 * (4.0 / 7.0)) / 10.0
        ));
    }

    #[test]
    fn accumulate_hand_case() {
        // truth/pred pairs realizing [[3,1],[2,4]]
        let truth = LabelMap::new(1, 10, vec![0, 0, 0, 0, 1, 1, 1, 1, 1, 1]).unwrap();
        let pred = LabelMap::new(1, 10, vec![0, 0, 0, 1, 0, 0, 1, 1, 1, 1]).unwrap();
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&pred, &truth).unwrap();
        assert_eq!(cm.counts(), &[3, 1, 2, 4]);
    }

    #[test]
    fn perfect_and_diagonal() {
        let truth = LabelMap::from_fn(4, 4, |y, x| ((y + x) % 3) as u8);
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&truth, &truth).unwrap();
        assert_eq!(cm.count(0, 1) + cm.count(1, 0) + cm.count(2, 0), 0);
        let m = cm.metrics().unwrap();
        assert_eq!(
            (m.pixel_acc, m.mean_acc, m.mean_iu, m.fw_iu),
            (1.0, 1.0, 1.0, 1.0)
        );
    }

    #[test]
    fn ignore_is_never_counted() {
        let truth = LabelMap::filled(3, 3, IGNORE);
        let pred = LabelMap::filled(3, 3, 1);
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&pred, &truth).unwrap();
        assert_eq!(cm.total(), 0);
        assert!(matches!(cm.metrics(), Err(Error::EmptyConfusion)));
    }

    #[test]
    fn single_present_class() {
        let truth = LabelMap::filled(2, 2, 1);
        let mut cm = ConfusionMatrix::new(4);
        cm.accumulate(&truth, &truth).unwrap();
        assert_eq!(cm.metrics().unwrap().mean_iu, 1.0);
    }

    #[test]
    fn accumulate_errors() {
        let mut cm = ConfusionMatrix::new(2);
        let a = LabelMap::filled(2, 2, 0);
        assert!(cm.accumulate(&LabelMap::filled(2, 3, 0), &a).is_err());
        assert!(cm.accumulate(&LabelMap::filled(2, 2, 2), &a).is_err());
        assert!(cm.accumulate(&a, &LabelMap::filled(2, 2, 5)).is_err());
    }

    #[test]
    fn bound_identity_and_checkerboard() {
        let board = LabelMap::from_fn(8, 8, |y, x| ((y + x) % 2) as u8);
        assert_eq!(
            iu_upper_bound(&board, 1, 2, Resample::Nearest).unwrap(),
            1.0
        );
        let mean_iu = iu_upper_bound(&board, 2, 2, Resample::Nearest).unwrap();
        assert!(close(mean_iu, 0.25), "{mean_iu}");
        assert!(iu_upper_bound(&board, 9, 2, Resample::Nearest).is_err());
    }

    #[test]
    fn majority_vote_blocks() {
        let m = LabelMap::new(2, 2, vec![1, 2, 2, IGNORE]).unwrap();
        let r = resampled_truth(&m, 2, Resample::Majority).unwrap();
        assert_eq!(r.labels(), &[2, 2, 2, 2]);
        let tie = LabelMap::new(1, 2, vec![3, 1]).unwrap();
        assert_eq!(
            resampled_truth(&tie, 2, Resample::Majority)
                .unwrap()
                .labels(),
            &[1, 1]
        );
        let top_left_ignored = LabelMap::new(1, 2, vec![IGNORE, 4]).unwrap();
        assert_eq!(
            resampled_truth(&top_left_ignored, 2, Resample::Nearest)
                .unwrap()
                .labels(),
            &[4, 4]
        );
    }

    fn arb_pair() -> impl Strategy<Value = (LabelMap, LabelMap)> {
        (1usize..8, 1usize..8).prop_flat_map(|(h, w)| {
            let n = h * w;
            (
                prop::collection::vec(0u8..4, n),
                prop::collection::vec(prop_oneof![0u8..4, Just(IGNORE)], n),
            )
                .prop_map(move |(p, t)| {
                    (
                        LabelMap::new(h, w, p).unwrap(),
                        LabelMap::new(h, w, t).unwrap(),
                    )
                })
        })
    }

    proptest! {
        #[test]
        fn metric_bounds((pred, truth) in arb_pair()) {
            let mut cm = ConfusionMatrix::new(4);
            cm.accumulate(&pred, &truth).unwrap();
            if cm.total() > 0 {
                let m = cm.metrics().unwrap();
                for v in [m.pixel_acc, m.mean_acc, m.mean_iu, m.fw_iu] {
                    prop_assert!((0.0..=1.0).contains(&v));
                }
                prop_assert!(m.pixel_acc >= m.fw_iu - 1e-12);
            }
        }

        #[test]
        fn class_permutation_invariance((pred, truth) in arb_pair(), perm in Just([0u8, 1, 2, 3]).prop_shuffle()) {
            let relabel = |m: &LabelMap| LabelMap::from_fn(m.height(), m.width(), |y, x| {
                let l = m.get(y, x);
                if l == IGNORE { l } else { perm[l as usize] }
            });
            let mut a = ConfusionMatrix::new(4);
            a.accumulate(&pred, &truth).unwrap();
            let mut b = ConfusionMatrix::new(4);
            b.accumulate(&relabel(&pred), &relabel(&truth)).unwrap();
            if a.total() > 0 {
                let (ma, mb) = (a.metrics().unwrap(), b.metrics().unwrap());
                prop_assert!((ma.pixel_acc - mb.pixel_acc).abs() < 1e-12);
                prop_assert!((ma.mean_acc - mb.mean_acc).abs() < 1e-12);
                prop_assert!((ma.mean_iu - mb.mean_iu).abs() < 1e-12);
                prop_assert!((ma.fw_iu - mb.fw_iu).abs() < 1e-12);
            }
        }

        #[test]
        fn accumulation_is_additive((pred, truth) in arb_pair(), cut in 0usize..8) {
            let h = pred.height();
            let cut = cut.min(h);
            let rows = |m: &LabelMap, lo: usize, hi: usize| {
                LabelMap::new(hi - lo, m.width(), m.labels()[lo * m.width()..hi * m.width()].to_vec()).unwrap()
            };
            let mut whole = ConfusionMatrix::new(4);
            whole.accumulate(&pred, &truth).unwrap();
            let mut parts = ConfusionMatrix::new(4);
            parts.accumulate(&rows(&pred, 0, cut), &rows(&truth, 0, cut)).unwrap();
            parts.accumulate(&rows(&pred, cut, h), &rows(&truth, cut, h)).unwrap();
            prop_assert_eq!(whole, parts);
        }

        #[test]
        fn bound_is_one_at_unit_factor_and_within_range(seed in any::<u64>()) {
            let m = blocky_map(seed);
            prop_assert_eq!(iu_upper_bound(&m, 1, 4, Resample::Nearest).unwrap(), 1.0);
            for f in [2, 4, 8] {
                for how in [Resample::Nearest, Resample::Majority] {
                    let v = iu_upper_bound(&m, f, 4, how).unwrap();
                    prop_assert!((0.0..=1.0).contains(&v));
                }
            }
        }
    }

    fn blocky_map(seed: u64) -> LabelMap {
        let mut s = seed;
        let mut next = || {
            s = s
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            (s >> 33) as usize
        };
        let mut m = LabelMap::filled(16, 16, 0);
        for _ in 0..3 {
            let (y, x, hh, ww, c) = (
                next() % 16,
                next() % 16,
                1 + next() % 8,
                1 + next() % 8,
                1 + next() % 3,
            );
            for yy in y..(y + hh).min(16) {
                for xx in x..(x + ww).min(16) {
                    m.set(yy, xx, c as u8);
                }
            }
        }
        m
    }

    // A single map need not have a monotone bound: a small class can be missed
    // at f=4 and then hit again by a coarser anchor at f=8.
    #[test]
    fn per_map_bound_is_not_monotone() {
        let m = blocky_map(7012893005890183480);
        let ius: Vec<f64> = [1, 2, 4, 8]
            .iter()
            .map(|&f| iu_upper_bound(&m, f, 4, Resample::Nearest).unwrap())
            .collect();
        assert_eq!(ius[0], 1.0);
        assert!(ius[3] > ius[2], "{ius:?}");
    }
}
