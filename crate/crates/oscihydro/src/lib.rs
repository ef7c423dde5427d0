//! Oscillating-pressure hydrodynamics for quantum dynamics.
//!
//! A quantum particle can be modelled as a compressible flow whose pressure
//! oscillates rapidly in time. Integrating that flow and averaging over the
//! fast cycles reproduces Schrödinger dynamics — no quantum potential is put
//! in by hand; it emerges from the averaging. This crate implements the whole
//! pipeline:
//!
//! * [`grid`], [`field`], [`calculus`] — lattice fields with spectral /
//!   4th-order derivatives and quadrature;
//! * [`schrodinger`] — reference quantum solvers (split-step and
//!   Crank–Nicolson, with optional minimal coupling) and the Madelung
//!   bridge between ψ and (ρ, S) in [`madelung`];
//! * [`quantum_potential`] — the quantum potential, its two-part split, the
//!   effective potentials, and the ponderomotive correspondence;
//! * [`hydro`] — the oscillation-resolving flow solver;
//! * [`averaging`] — cycle averages, fast/slow extraction, and the averaging
//!   identities that close the slow equations;
//! * [`trajectory`] — kinematic and Newtonian particle paths through the flow;
//! * [`pinball`] — the particle-ensemble ("pinball") picture with pulsating
//!   point sources, whose velocity moments recover the same hydrodynamics;
//! * [`action`] — action functionals and least-action residuals;
//! * [`scenario`], [`runner`] — config-file-driven experiments with manifests,
//!   backing the `oscihydro` CLI.
//!
//! The guide in `book/` walks through the physics chapter by chapter; its
//! code snippets compile as doc-tests via the [`guide`] module.

pub mod action;
pub mod averaging;
pub mod calculus;
pub mod constants;
pub mod error;
pub mod field;
pub mod grid;
pub mod guide;
pub mod hydro;
pub mod madelung;
pub mod pinball;
pub mod potential;
pub mod quantum_potential;
pub mod runner;
pub mod scenario;
pub mod schrodinger;
pub mod snapshot;
pub mod trajectory;

pub use constants::PhysicalConstants;
pub use error::{Error, Result};
pub use field::{ScalarField, VectorField, Wavefunction};
pub use grid::{Axis, Boundary, Grid};
