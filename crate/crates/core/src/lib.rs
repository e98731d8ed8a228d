//! Cochlear-token speech modelling: signal frontends, the WavCoch tokenizer,
//! the AuriStream token language model, cochleagram inversion and the
//! evaluation suite.

pub mod audio;
pub mod auristream;
pub mod cochlea;
pub mod corpus;
mod error;
pub mod evalsuite;
pub mod inversion;
pub mod params;
pub mod synth;
pub mod wavcoch;

pub use error::{CoreError, Result};
