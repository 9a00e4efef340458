//! Text-guided neural radiance fields.
//!
//! A scene is a small residual MLP over integrated positional features. It is
//! rendered by emission-absorption compositing, cropped and resized, scored by
//! a pluggable [`guidance::Scorer`], and updated with Adam. Every stage has a
//! hand-written reverse pass so the whole chain can be checked against finite
//! differences in `f64`.

pub mod analytic;
pub mod augment;
pub mod dataset;
pub mod encoding;
pub mod error;
pub mod eval;
pub mod field;
pub mod geometry;
pub mod guidance;
pub mod imageio;
pub mod objective;
pub mod optimize;
pub mod real;
pub mod render;
pub mod rng;

pub use error::{Error, Result};
pub use real::Real;

#[cfg(doctest)]
mod book {
    macro_rules! chapter {
        ($name:ident, $file:literal) => {
            #[doc = include_str!(concat!("../../../book/src/", $file))]
            pub struct $name;
        };
    }
    chapter!(Introduction, "introduction.md");
    chapter!(Rendering, "rendering.md");
    chapter!(Encoding, "encoding.md");
    chapter!(Field, "field.md");
    chapter!(Guidance, "guidance.md");
    chapter!(Objective, "objective.md");
    chapter!(Training, "training.md");
    chapter!(Evaluation, "evaluation.md");
    chapter!(Cli, "cli.md");
}
