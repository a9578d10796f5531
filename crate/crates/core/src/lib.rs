//! Map-visual trajectory reconstruction from cellular signaling.
//!
//! A synthetic world (road grid, towers, drivers) produces paired signaling traces and
//! GPS trajectories. Each pair is rendered as a conditioning image plus a progressive
//! drawing video; a small stochastic drawing policy is trained on those pairs with a
//! flow-matching regression and then refined by group-decoupled policy optimization
//! against three verifiable rewards. A classical filter/map-matching pipeline serves
//! as the engineered baseline.

pub mod baseline;
pub mod error;
pub mod experiment;
pub mod extract;
pub mod gdpo;
pub mod policy;
pub mod raster;
pub mod render;
pub mod rewards;
pub mod rng;
pub mod roadnet;
pub mod simdata;
pub mod world;

pub use error::{Error, Result};
