//! Numerical toolkit for partially hyperbolic diffeomorphisms on flat
//! 3-manifolds.
//!
//! The crate provides, at desk scale:
//!
//! * fundamental-domain charts for three flat 3-manifolds (the product
//!   torus, the mapping torus of a hyperbolic toral automorphism, and a
//!   skew quotient of `T^2 x R`), see [`chart`];
//! * a catalog of explicit diffeomorphisms on those manifolds together
//!   with a perturbation combinator, see [`systems`];
//! * cone fields, the cone criterion, numerical estimation of the
//!   invariant splitting and of the hyperbolicity rates, see [`cones`];
//! * integration of the invariant line fields into leaf arcs, local
//!   product-structure intersections and holonomy transports, see
//!   [`leaves`];
//! * graph-transform continuation of normally hyperbolic center leaves
//!   and complete center immersions, see [`graph_transform`];
//! * construction of leaf conjugacies with residual reporting, see
//!   [`conjugacy`];
//! * detection and analysis of discretized-Anosov-flow structure
//!   (displacement bounds, return-time recovery, plaque expansivity,
//!   compact periodic center leaves, ...), see [`daf`].

pub mod chart;
pub mod cones;
pub mod conjugacy;
pub mod daf;
pub mod error;
pub mod graph_transform;
pub mod leaves;
pub mod systems;

pub use chart::{ChartPoint, IntMat2, ManifoldDescriptor, ManifoldKind};
pub use error::{Error, Result};
pub use systems::DynamicalSystem;
