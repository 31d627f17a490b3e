//! CORD: distributed pose-graph optimization as a damped second-order
//! dynamical system on SE(3)^N.
//!
//! Modules:
//! - [`lie`]: SE(3)/se(3) kernel (generic over the scalar type)
//! - [`graph`]: pose-graph data model, g2o I/O, partitioning, synthetic worlds
//! - [`objective`]: PGO costs, gradients, and block Hessians
//! - [`dynamics`]: damped Euler-Poincare integrator and energy accounting
//! - [`dist`]: per-robot solver, packet network simulator, DJ baseline
//! - [`bench`]: experiment harness, reference solver, metrics, CLI

pub mod bench;
pub mod dist;
pub mod dynamics;
pub mod graph;
pub mod lie;
pub mod objective;

/// Concrete f64 pose used by the solver layers.
pub type Pose = lie::PoseT<f64>;
/// Body velocity (omega, v) as a flat 6-vector.
pub type Twist = nalgebra::Vector6<f64>;
