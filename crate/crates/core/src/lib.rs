//! Core library for the polyvox training lab: a small, self-contained
//! implementation of joint speech-text training for multilingual TTS,
//! exercised end-to-end on procedurally generated micro-languages.
//!
//! Everything is f64 on CPU; all randomness is derived from explicit seeds
//! so every run (and every resumed run) is bit-for-bit reproducible.

pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod num;
pub mod rng;
pub mod textproc;
pub mod training;

pub use error::{Error, Result};
