//! Fully convolutional networks for dense prediction at desk scale.
//!
//! The crate covers the geometry of layer stacks ([`geom`]), differentiable
//! layers and DAG nets ([`ops`], [`net`]), the shift-and-stitch / filter
//! rarefaction equivalence ([`stitch`]), pixelwise training ([`train`]),
//! segmentation metrics ([`metrics`]) and a toy model zoo with a synthetic
//! dataset ([`zoo`], [`data`]).

pub mod cli;
pub mod data;
pub mod error;
pub mod geom;
pub mod gradcheck;
pub mod io;
pub mod label;
pub mod loss;
pub mod metrics;
pub mod net;
pub mod ops;
pub mod pipeline;
pub mod spec;
pub mod stitch;
pub mod tensor;
pub mod train;
pub mod zoo;

pub use error::{Error, Result};
pub use geom::{GeomSummary, LayerGeom, LayerKind};
pub use label::{LabelMap, IGNORE};
pub use net::{Grads, Net, Tape};
pub use spec::{NetSpec, NodeKind, NodeSpec};
pub use tensor::{Scalar, Tensor};
