//! Alignment losses, toy acoustic/phoneme models, joint decoding and
//! mispronunciation scoring for the `mddkit` toolkit.

pub mod augment;
pub mod decode;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod grid;
pub mod losses;
pub mod models;
pub mod ot;
pub mod synth;
pub mod tags;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
pub use grid::PosteriorGrid;
pub use tags::{ErrorTags, ErrorType};
pub use vocab::Vocab;
