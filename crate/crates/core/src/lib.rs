//! Noise-to-box diffusion detection with a four-direction selective-scan
//! feature mixer, trained and evaluated on synthetic radar-like scenes.

pub mod error;
pub mod numerics;
pub mod ssm_scan;
pub mod attention;
pub mod mambasar;
pub mod diffusion;
pub mod evalkit;
pub mod detect_head;
pub mod synthdata;
pub mod gradsuite;
pub mod cli;

pub use error::{Error, Result};
pub use numerics::{Module, Param, Tape, Tensor, Var};
