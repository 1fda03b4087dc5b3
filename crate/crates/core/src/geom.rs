//! Layer geometry algebra: kernel size, stride and offset of layer stacks.
//!
//! A layer (or stack) maps output cell `i` to the input window starting at
//! `stride * i - offset` and spanning `kernel` input cells. Composition follows
//! `f_ks . g_k's' = (f . g)_{k' + (k - 1) s', s s'}`; offsets compose as
//! `P = P_inner + S_inner * P_outer`. Upsampling layers have fractional stride
//! `1/f`, so all three quantities are exact rationals.

use std::fmt;

use num_rational::Ratio;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub type Rational = Ratio<i64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Conv,
    Pool,
    Deconv,
    Elementwise,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct LayerGeom {
    pub kind: LayerKind,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// Upsampling factor; 1 except for deconvolution.
    pub factor: usize,
    /// Spacing between kernel taps; only pools use values above 1 (the dense
    /// equivalent of a strided pool).
    pub dilation: usize,
}

impl LayerGeom {
    pub fn conv(kernel: usize, stride: usize, pad: usize) -> Self {
        LayerGeom {
            kind: LayerKind::Conv,
            kernel,
            stride,
            pad,
            factor: 1,
            dilation: 1,
        }
    }

    pub fn pool(kernel: usize, stride: usize, pad: usize) -> Self {
        LayerGeom {
            kind: LayerKind::Pool,
            ..Self::conv(kernel, stride, pad)
        }
    }

    pub fn deconv(kernel: usize, factor: usize, pad: usize) -> Self {
        LayerGeom {
            kind: LayerKind::Deconv,
            kernel,
            stride: 1,
            pad,
            factor,
            dilation: 1,
        }
    }

    pub fn elementwise() -> Self {
        LayerGeom {
            kind: LayerKind::Elementwise,
            ..Self::conv(1, 1, 0)
        }
    }

    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Geometry(m));
        if self.kernel == 0 || self.stride == 0 || self.factor == 0 || self.dilation == 0 {
            return bad(format!(
                "{self}: kernel, stride, factor and dilation must be positive"
            ));
        }
        match self.kind {
            LayerKind::Elementwise if (self.kernel, self.stride, self.pad) != (1, 1, 0) => {
                bad(format!("{self}: elementwise layers have k = s = 1, p = 0"))
            }
            LayerKind::Deconv if self.stride != 1 || self.dilation != 1 => {
                bad(format!("{self}: deconvolution is described by its factor"))
            }
            LayerKind::Deconv if 2 * self.pad >= self.kernel + self.factor => {
                bad(format!("{self}: padding too large for kernel"))
            }
            LayerKind::Conv | LayerKind::Pool | LayerKind::Elementwise if self.factor != 1 => {
                bad(format!("{self}: only deconvolution upsamples"))
            }
            _ => Ok(()),
        }
    }

    /// Input cells covered by one window, counting skipped taps.
    pub fn span(&self) -> usize {
        (self.kernel - 1) * self.dilation + 1
    }

    /// Spatial output extent for input extent `h`, or `None` when the layer
    /// produces no output cell.
    pub fn output_extent(&self, h: usize) -> Option<usize> {
        if h == 0 {
            return None;
        }
        match self.kind {
            LayerKind::Elementwise => Some(h),
            LayerKind::Conv | LayerKind::Pool => {
                let padded = h + 2 * self.pad;
                (padded >= self.span()).then(|| (padded - self.span()) / self.stride + 1)
            }
            LayerKind::Deconv => ((h - 1) * self.factor + self.kernel)
                .checked_sub(2 * self.pad)
                .filter(|&n| n > 0),
        }
    }

    pub fn summary(&self) -> GeomSummary {
        let r = |v: usize| Rational::from_integer(v as i64);
        let (kernel, stride, offset) = match self.kind {
            LayerKind::Deconv => {
                let f = self.factor as i64;
                (
                    Rational::new(self.kernel as i64 - 1, f) + 1,
                    Rational::new(1, f),
                    Rational::new(self.kernel as i64 - 1 - self.pad as i64, f),
                )
            }
            _ => (r(self.span()), r(self.stride), r(self.pad)),
        };
        GeomSummary {
            kernel,
            stride,
            offset,
            layers: vec![*self],
        }
    }

    /// Human-readable output-extent formula in terms of the input extent `h`.
    pub fn extent_formula(&self) -> String {
        match self.kind {
            LayerKind::Elementwise => "h".to_string(),
            LayerKind::Conv | LayerKind::Pool => {
                format!(
                    "floor((h + {} - {}) / {}) + 1",
                    2 * self.pad,
                    self.span(),
                    self.stride
                )
            }
            LayerKind::Deconv => {
                format!(
                    "(h - 1) * {} + {} - {}",
                    self.factor,
                    self.kernel,
                    2 * self.pad
                )
            }
        }
    }
}

impl fmt::Display for LayerGeom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            LayerKind::Deconv => {
                write!(f, "deconv k{} x{} p{}", self.kernel, self.factor, self.pad)
            }
            LayerKind::Elementwise => write!(f, "elementwise"),
            kind => {
                let name = if kind == LayerKind::Conv {
                    "conv"
                } else {
                    "pool"
                };
                write!(f, "{name} k{} s{} p{}", self.kernel, self.stride, self.pad)?;
                if self.dilation > 1 {
                    write!(f, " d{}", self.dilation)?;
                }
                Ok(())
            }
        }
    }
}

/// Composite geometry of a stack of layers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GeomSummary {
    pub kernel: Rational,
    pub stride: Rational,
    pub offset: Rational,
    layers: Vec<LayerGeom>,
}

impl Default for GeomSummary {
    fn default() -> Self {
        Self::identity()
    }
}

impl GeomSummary {
    pub fn identity() -> Self {
        GeomSummary {
            kernel: Rational::from_integer(1),
            stride: Rational::from_integer(1),
            offset: Rational::from_integer(0),
            layers: Vec::new(),
        }
    }

    /// Summary of `layers` applied first to last.
    pub fn chain<'a>(layers: impl IntoIterator<Item = &'a LayerGeom>) -> Self {
        layers
            .into_iter()
            .fold(Self::identity(), |acc, l| compose(&l.summary(), &acc))
    }

    /// Receptive field size of one output cell (the padding-free core).
    pub fn receptive_field(&self) -> Rational {
        self.kernel
    }

    pub fn layers(&self) -> &[LayerGeom] {
        &self.layers
    }

    /// Output extent for input extent `h`, applying each layer in turn.
    pub fn output_extent(&self, h: usize) -> Option<usize> {
        self.layers.iter().try_fold(h, |h, l| l.output_extent(h))
    }

    /// Input coordinate of the center of output cell `i`'s window.
    /// Even kernels put the center between the two middle cells.
    pub fn center(&self, i: i64) -> Rational {
        self.stride * i - self.offset + (self.kernel - 1) / 2
    }

    /// The same summary seen through a crop that drops `cells` leading cells.
    pub fn cropped(&self, cells: i64) -> Self {
        GeomSummary {
            offset: self.offset - self.stride * cells,
            ..self.clone()
        }
    }

    /// Integer stride, if this summary has one.
    pub fn integer_stride(&self) -> Option<usize> {
        self.stride
            .is_integer()
            .then(|| *self.stride.numer() as usize)
    }
}

/// Composite of applying `inner` first, then `outer`.
pub fn compose(outer: &GeomSummary, inner: &GeomSummary) -> GeomSummary {
    let mut layers = inner.layers.clone();
    layers.extend_from_slice(&outer.layers);
    GeomSummary {
        kernel: inner.kernel + (outer.kernel - 1) * inner.stride,
        stride: outer.stride * inner.stride,
        offset: inner.offset + inner.stride * outer.offset,
        layers,
    }
}

/// Number of leading cells to drop from `big` so its cells line up with
/// `reference` (equal centers in input coordinates). Both must share a stride.
pub fn alignment_offset(big: &GeomSummary, reference: &GeomSummary) -> Result<i64> {
    if big.stride != reference.stride {
        return Err(Error::Geometry(format!(
            "fusion branches have different strides ({} vs {})",
            big.stride, reference.stride
        )));
    }
    let shift = (reference.center(0) - big.center(0)) / big.stride;
    if !shift.is_integer() {
        return Err(Error::Geometry(format!(
            "fusion branches are misaligned by a fractional {shift} cells"
        )));
    }
    Ok(shift.to_integer())
}

/// Enlarge a `out x in x kh x kw` filter by `s`: the tap at `(i, j)` moves to
/// `(s i, s j)` and every other position is zero.
pub fn rarefy_filter<T: Scalar>(filter: &Tensor<T>, s: usize) -> Tensor<T> {
    assert!(s >= 1, "rarefaction factor must be positive");
    let [o, c, kh, kw] = filter.dims();
    let (rh, rw) = ((kh - 1) * s + 1, (kw - 1) * s + 1);
    Tensor::from_fn([o, c, rh, rw], |[a, b, y, x]| {
        if y % s == 0 && x % s == 0 {
            filter.at(a, b, y / s, x / s)
        } else {
            T::zero()
        }
    })
}

/// The AlexNet-pattern stack used for the FCN-AlexNet row of the receptive
/// field table (fc6 as a 6x6 conv, fc7 as 1x1).
pub fn alexnet_stack() -> Vec<LayerGeom> {
    let mut v = vec![
        LayerGeom::conv(11, 4, 0),
        LayerGeom::pool(3, 2, 0),
        LayerGeom::conv(5, 1, 2),
        LayerGeom::pool(3, 2, 0),
    ];
    v.extend([LayerGeom::conv(3, 1, 1); 3]);
    v.push(LayerGeom::pool(3, 2, 0));
    v.push(LayerGeom::conv(6, 1, 0));
    v.push(LayerGeom::conv(1, 1, 0));
    v
}

/// The VGG16-pattern stack: five conv blocks (2, 2, 3, 3, 3 convs) each ending
/// in a 2x2 pool, then fc6 as 7x7 and fc7 as 1x1.
pub fn vgg16_stack() -> Vec<LayerGeom> {
    let mut v = Vec::new();
    for convs in [2, 2, 3, 3, 3] {
        v.extend(std::iter::repeat_n(LayerGeom::conv(3, 1, 1), convs));
        v.push(LayerGeom::pool(2, 2, 0));
    }
    v.push(LayerGeom::conv(7, 1, 0));
    v.push(LayerGeom::conv(1, 1, 0));
    v
}
