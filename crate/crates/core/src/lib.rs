//! Text-guided speaking-style animation.
//!
//! Captions describing emotion and facial action units are encoded into a
//! style code by a frozen text backbone plus a residual adapter. An audio
//! encoder and a style-modulated decoder turn windowed audio features into
//! expression-parameter sequences. During training a video style encoder
//! guides the text path, a temporal patch discriminator and a pretrained
//! lip-sync discriminator shape the output, and a two-stage schedule moves
//! the decoder from video-derived to text-derived style codes.

pub mod animation;
pub mod annotation;
pub mod discriminators;
pub mod error;
pub mod losses;
pub mod matfile;
pub mod metrics;
pub mod nn;
pub mod seed;
pub mod synthdata;
pub mod tape;
pub mod textstyle;
pub mod trainer;
pub mod videostyle;

pub use error::{Error, Result};
