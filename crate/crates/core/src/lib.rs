//! Width-sliceable neural networks.
//!
//! Every sliced layer divides its neurons (or channels) into ordered groups.
//! A single slice rate `r` selects the leading groups of every layer, so the
//! subnets of a model are nested: Subnet-`r_a` is contained in Subnet-`r_b`
//! whenever `r_a < r_b`. Training with [`trainer`] optimizes a scheduled
//! list of subnets per batch so all of them stay accurate; [`cost`] maps a
//! compute budget to a rate, [`incremental`] widens a cached small-subnet
//! result into a larger one, and [`applications`] holds the serving
//! simulator and the cascade-ranking harness.

pub mod applications;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod cost;
pub mod data;
pub mod error;
pub mod incremental;
pub mod model;
pub mod scheduler;
pub mod slicing;
pub mod tensor;
pub mod trainer;

pub use autodiff::{ParamId, ParamStore, Tape, Var};
pub use error::{Error, Result};
pub use model::{Batch, Inputs, LayerSpec, Model, ModelSpec};
pub use slicing::{GroupSpec, SliceRate};
pub use tensor::Tensor;
