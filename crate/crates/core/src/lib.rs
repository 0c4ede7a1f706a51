//! Desk-scale laboratory for the implicit bias of adaptive optimizers under
//! data rotations, and for the EGOP and Shampoo constructions that restore
//! rotation equivariance.

pub mod analysis;
pub mod datagen;
pub mod egop;
pub mod error;
pub mod experiment;
pub mod io;
pub mod linalg;
pub mod loss;
pub mod model;
pub mod optim;
pub mod rng;
pub mod verify;

pub use error::{LabError, Result};
