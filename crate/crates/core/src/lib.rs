//! Core algorithms of the aquadet toolkit.
//!
//! * [`boxgeom`]: boxes, IoU, anchors, delta encoding, NMS.
//! * [`losses`]: classification and regression losses, gradient checking.
//! * [`assign`]: anchor labelling, proposal selection, RoI sampling.
//! * [`probfusion`]: objectness prior, marginal scores, boosting weights.
//! * [`dginvariance`]: mixup, SSMC, gradient-reversed domain loss, IRM.
//! * [`watermodel`]: underwater image formation, colour transfer, corruptions.
//! * [`evalkit`]: AP metrics, robustness sweeps, feature diagnostics.

pub mod assign;
pub mod boxgeom;
pub mod dginvariance;
mod error;
pub mod evalkit;
mod image;
pub mod losses;
pub mod probfusion;
pub mod watermodel;

pub use boxgeom::BBox;
pub use error::{Error, Result};
pub use image::Image;
