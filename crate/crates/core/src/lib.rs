//! Model-based estimation of task-FMRI effects.
//!
//! Observations are fitted where they were actually sampled: each scan
//! cycle's voxel centres are mapped back through head motion into subject
//! space, and a kernel-weighted least-squares fit of the block-design signal
//! model is evaluated at arbitrary standard-space points. Subject fields are
//! then combined by random-effects meta-regression.

pub mod design;
pub mod fit;
pub mod geometry;
pub mod io;
pub mod lattice;
pub mod linalg;
pub mod meta;
pub mod phantom;
pub mod session;
pub mod stats;
pub mod weights;

pub use geometry::Point3;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Geometry(#[from] geometry::GeometryError),
    #[error(transparent)]
    Lattice(#[from] lattice::LatticeError),
    #[error(transparent)]
    Weight(#[from] weights::WeightError),
    #[error(transparent)]
    Design(#[from] design::DesignError),
    #[error(transparent)]
    Session(#[from] session::SessionError),
    #[error(transparent)]
    Fit(#[from] fit::FitError),
    #[error(transparent)]
    FitField(#[from] fit::FitFieldError),
    #[error(transparent)]
    Diagnostic(#[from] fit::DiagnosticError),
    #[error(transparent)]
    Meta(#[from] meta::MetaError),
    #[error(transparent)]
    Phantom(#[from] phantom::PhantomError),
    #[error(transparent)]
    MonteCarlo(#[from] phantom::McError),
    #[error(transparent)]
    Io(#[from] io::IoError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
