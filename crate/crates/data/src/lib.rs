//! Synthetic multi-domain detection data.
//!
//! * [`scene`]: procedural four-class scenes with visible-extent boxes.
//! * [`dataset`]: seven-domain dataset construction, manifest and loading.
//! * [`coco`]: COCO-style annotation reading and writing.
//! * [`pngio`]: 8-bit RGB PNG encoding and decoding.

pub mod coco;
pub mod dataset;
mod error;
mod fsutil;
pub mod pngio;
pub mod scene;

pub use error::{DataError, Result};
pub use fsutil::{derive_seed, sha256_hex, write_atomic};
