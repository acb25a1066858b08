//! Turn a computational-experiment directory into a verified, portable
//! reproducibility package.
//!
//! The pipeline: ingest files into a [`store::Store`], infer languages and
//! dependencies, generate a Dockerfile, build and run it
//! through an [`engine::EngineDriver`], verify reproducibility by comparing
//! two runs, and export a package that rebuilds and reruns the experiment.

pub mod cli;
pub mod container;
pub mod deps;
pub mod digest;
pub mod engine;
pub mod error;
pub mod http;
pub mod language;
pub mod package;
pub mod runner;
pub mod service;
pub mod store;
pub mod verify;

pub use error::{Error, Result, Stage};
