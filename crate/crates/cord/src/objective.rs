//! PGO cost formulations: edge residuals, total and per-robot costs,
//! analytic body-frame gradients, and per-robot block Hessians.
//!
//! Gradients and Hessians are taken with respect to body-frame (right)
//! increments `X * exp(eta^)`, matching the integrator's retraction.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector, Matrix4, Vector6};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::graph::{Edge, Partition, PoseGraph};
use crate::lie::{adjoint, hat, log_se3, se3_right_jacobian_inv, LieError};
use crate::Pose;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Geodesic,
    Chordal,
}

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("geodesic residual on edge ({u}, {v}): {source}")]
    Residual {
        u: usize,
        v: usize,
        #[source]
        source: LieError,
    },
    #[error("edge ({u}, {v}) needs neighbor pose for vertex {missing} but none was supplied")]
    MissingNeighbor { u: usize, v: usize, missing: usize },
}

/// Read access to the poses an evaluation needs: the robot's own block plus
/// whatever neighbor estimates it has (exact, cached, or predicted).
pub trait PoseView {
    fn pose(&self, vertex: usize) -> Option<&Pose>;
}

/// Global state as a slice of poses indexed by vertex.
impl PoseView for [Pose] {
    fn pose(&self, vertex: usize) -> Option<&Pose> {
        self.get(vertex)
    }
}

impl PoseView for Vec<Pose> {
    fn pose(&self, vertex: usize) -> Option<&Pose> {
        self.get(vertex)
    }
}

/// Neighbor estimates alone; a robot's own poses are resolved by its block.
impl PoseView for HashMap<usize, Pose> {
    fn pose(&self, vertex: usize) -> Option<&Pose> {
        self.get(&vertex)
    }
}

/// Own block stored densely plus a neighbor map; used by the robots.
pub struct SplitView<'a> {
    pub index_of_own: &'a HashMap<usize, usize>,
    pub own: &'a [Pose],
    pub neighbors: &'a HashMap<usize, Pose>,
}

impl PoseView for SplitView<'_> {
    fn pose(&self, vertex: usize) -> Option<&Pose> {
        if let Some(&i) = self.index_of_own.get(&vertex) {
            return Some(&self.own[i]);
        }
        self.neighbors.get(&vertex)
    }
}

/// Geodesic residual log(X_uv^-1 X_u^-1 X_v).
pub fn geodesic_residual(x_u: &Pose, x_v: &Pose, x_uv: &Pose) -> Result<Vector6<f64>, LieError> {
    log_se3(&x_uv.inverse().compose(&x_u.inverse()).compose(x_v))
}

/// Chordal residual X_u X_uv - X_v as a 4x4 homogeneous difference whose
/// bottom row is identically zero; only the top 3x4 block carries data.
pub fn chordal_residual(x_u: &Pose, x_v: &Pose, x_uv: &Pose) -> Matrix4<f64> {
    x_u.compose(x_uv).to_homogeneous() - x_v.to_homogeneous()
}

fn chordal_weight_sq(e: &Edge, r: &Matrix4<f64>) -> f64 {
    // tr(r Omega r^T) with Omega = blkdiag(w_R I3, w_t) acting on columns.
    let mut rot = 0.0;
    for j in 0..3 {
        rot += r.column(j).norm_squared();
    }
    e.w_rot * rot + e.w_trans * r.column(3).norm_squared()
}

pub fn edge_cost(metric: Metric, e: &Edge, x_u: &Pose, x_v: &Pose) -> Result<f64, ObjectiveError> {
    match metric {
        Metric::Geodesic => {
            let r = geodesic_residual(x_u, x_v, &e.measurement).map_err(|source| {
                ObjectiveError::Residual {
                    u: e.u,
                    v: e.v,
                    source,
                }
            })?;
            Ok((r.transpose() * e.info_geodesic * r)[0])
        }
        Metric::Chordal => {
            let r = chordal_residual(x_u, x_v, &e.measurement);
            Ok(chordal_weight_sq(e, &r))
        }
    }
}

/// Total chordal cost over all edges (infallible).
pub fn total_cost_chordal(graph: &PoseGraph, x: &[Pose]) -> f64 {
    graph
        .edges
        .iter()
        .map(|e| {
            let r = chordal_residual(&x[e.u], &x[e.v], &e.measurement);
            chordal_weight_sq(e, &r)
        })
        .sum()
}

/// Total cost over all edges. Geodesic can fail near the rotation cut locus.
pub fn total_cost(metric: Metric, graph: &PoseGraph, x: &[Pose]) -> Result<f64, ObjectiveError> {
    match metric {
        Metric::Chordal => Ok(total_cost_chordal(graph, x)),
        Metric::Geodesic => {
            let mut c = 0.0;
            for e in &graph.edges {
                c += edge_cost(metric, e, &x[e.u], &x[e.v])?;
            }
            Ok(c)
        }
    }
}

/// Per-edge contribution to the body-frame gradients of both endpoints:
/// (g_u, g_v) with cost = ||r||^2_Omega (no 1/2).
pub fn edge_gradient(
    metric: Metric,
    e: &Edge,
    x_u: &Pose,
    x_v: &Pose,
) -> Result<(Vector6<f64>, Vector6<f64>), ObjectiveError> {
    match metric {
        Metric::Geodesic => {
            let r = geodesic_residual(x_u, x_v, &e.measurement).map_err(|source| {
                ObjectiveError::Residual {
                    u: e.u,
                    v: e.v,
                    source,
                }
            })?;
            let jr_inv = se3_right_jacobian_inv(&r);
            let omega_r = e.info_geodesic * r;
            // J_v = Jr^-1(r); J_u = -Jr^-1(r) Ad(X_v^-1 X_u)
            let g_v = 2.0 * (jr_inv.transpose() * omega_r);
            let ad = adjoint(&x_v.inverse().compose(x_u));
            let g_u = -(ad.transpose() * g_v);
            Ok((g_u, g_v))
        }
        Metric::Chordal => {
            let r = chordal_residual(x_u, x_v, &e.measurement);
            let omega4 = chordal_omega4(e);
            // Euclidean gradients: dC/dT_u = 2 r Omega T_uv^T, dC/dT_v = -2 r Omega
            let gu_eucl = r * omega4 * e.measurement.to_homogeneous().transpose() * 2.0;
            let gv_eucl = r * omega4 * (-2.0);
            Ok((body_project(x_u, &gu_eucl), body_project(x_v, &gv_eucl)))
        }
    }
}

fn chordal_omega4(e: &Edge) -> Matrix4<f64> {
    let mut m = Matrix4::zeros();
    m[(0, 0)] = e.w_rot;
    m[(1, 1)] = e.w_rot;
    m[(2, 2)] = e.w_rot;
    m[(3, 3)] = e.w_trans;
    m
}

/// Project an ambient (Euclidean) gradient dC/dT onto the body frame via
/// P = T^T dC/dT and pairing against the se(3) generators.
fn body_project(x: &Pose, eucl: &Matrix4<f64>) -> Vector6<f64> {
    let p = x.to_homogeneous().transpose() * eucl;
    Vector6::new(
        p[(2, 1)] - p[(1, 2)],
        p[(0, 2)] - p[(2, 0)],
        p[(1, 0)] - p[(0, 1)],
        p[(0, 3)],
        p[(1, 3)],
        p[(2, 3)],
    )
}

/// Edge Jacobians of the residual with respect to body-frame increments of
/// each endpoint, plus the residual itself in a form ready for Gauss-Newton
/// assembly: returns (J_u, J_v, weight-matrix W) with per-edge Hessian
/// contribution 2 J^T W J and gradient 2 J^T W r.
struct EdgeLin {
    j_u: DMatrix<f64>,
    j_v: DMatrix<f64>,
    w: DMatrix<f64>,
}

fn edge_linearization(
    metric: Metric,
    e: &Edge,
    x_u: &Pose,
    x_v: &Pose,
) -> Result<EdgeLin, ObjectiveError> {
    match metric {
        Metric::Geodesic => {
            let r = geodesic_residual(x_u, x_v, &e.measurement).map_err(|source| {
                ObjectiveError::Residual {
                    u: e.u,
                    v: e.v,
                    source,
                }
            })?;
            let jr_inv = se3_right_jacobian_inv(&r);
            let j_v = jr_inv;
            let j_u = -(jr_inv * adjoint(&x_v.inverse().compose(x_u)));
            let mut w = DMatrix::zeros(6, 6);
            for i in 0..6 {
                for j in 0..6 {
                    w[(i, j)] = e.info_geodesic[(i, j)];
                }
            }
            Ok(EdgeLin {
                j_u: DMatrix::from_fn(6, 6, |i, j| j_u[(i, j)]),
                j_v: DMatrix::from_fn(6, 6, |i, j| j_v[(i, j)]),
                w,
            })
        }
        Metric::Chordal => {
            // residual flattened column-major over the top 3x4 block (12-vector),
            // diagonal weights (w_R x9, w_t x3).
            let tu = x_u.to_homogeneous();
            let tv = x_v.to_homogeneous();
            let tuv = e.measurement.to_homogeneous();
            let mut j_u = DMatrix::zeros(12, 6);
            let mut j_v = DMatrix::zeros(12, 6);
            for k in 0..6 {
                let mut basis = Vector6::zeros();
                basis[k] = 1.0;
                let gen = hat(&basis);
                let du = tu * gen * tuv;
                let dv = -(tv * gen);
                for col in 0..4 {
                    for row in 0..3 {
                        j_u[(col * 3 + row, k)] = du[(row, col)];
                        j_v[(col * 3 + row, k)] = dv[(row, col)];
                    }
                }
            }
            let mut w = DMatrix::zeros(12, 12);
            for i in 0..9 {
                w[(i, i)] = e.w_rot;
            }
            for i in 9..12 {
                w[(i, i)] = e.w_trans;
            }
            Ok(EdgeLin { j_u, j_v, w })
        }
    }
}

/// Which pose, if any, is anchored (gradient zeroed / Hessian pinned).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Anchor {
    None,
    Vertex(usize),
}

impl Anchor {
    pub fn is(&self, v: usize) -> bool {
        matches!(self, Anchor::Vertex(a) if *a == v)
    }
}

/// Body-frame gradient block of Eq-style local cost for robot `robot`:
/// intra edges contribute both endpoints, inter edges only the owned
/// endpoint, with neighbor poses treated as fixed. Stacked per owned pose in
/// the order of `partition.owned[robot]`.
pub fn gradient_block<V: PoseView>(
    metric: Metric,
    graph: &PoseGraph,
    partition: &Partition,
    robot: usize,
    view: &V,
    anchor: Anchor,
) -> Result<DVector<f64>, ObjectiveError> {
    let owned = &partition.owned[robot];
    let slot: HashMap<usize, usize> = owned.iter().enumerate().map(|(i, &v)| (v, i)).collect();
    let mut g = DVector::zeros(6 * owned.len());
    let mut add = |vertex: usize, contrib: Vector6<f64>| {
        let s = slot[&vertex];
        for i in 0..6 {
            g[6 * s + i] += contrib[i];
        }
    };
    let fetch = |vertex: usize, e: &Edge| -> Result<Pose, ObjectiveError> {
        view.pose(vertex)
            .cloned()
            .ok_or(ObjectiveError::MissingNeighbor {
                u: e.u,
                v: e.v,
                missing: vertex,
            })
    };
    for &ei in &partition.intra_edges[robot] {
        let e = &graph.edges[ei];
        let xu = fetch(e.u, e)?;
        let xv = fetch(e.v, e)?;
        let (gu, gv) = edge_gradient(metric, e, &xu, &xv)?;
        add(e.u, gu);
        add(e.v, gv);
    }
    let mut neighbor_ids: Vec<usize> = partition.inter_edges[robot].keys().copied().collect();
    neighbor_ids.sort_unstable();
    for j in neighbor_ids {
        for &ei in &partition.inter_edges[robot][&j] {
            let e = &graph.edges[ei];
            let xu = fetch(e.u, e)?;
            let xv = fetch(e.v, e)?;
            let (gu, gv) = edge_gradient(metric, e, &xu, &xv)?;
            if partition.robot_of[e.u] == robot {
                add(e.u, gu);
            } else {
                add(e.v, gv);
            }
        }
    }
    if let Anchor::Vertex(a) = anchor {
        if let Some(&s) = slot.get(&a) {
            for i in 0..6 {
                g[6 * s + i] = 0.0;
            }
        }
    }
    Ok(g)
}

/// Levenberg-Marquardt block Hessian for robot `robot`: 2 J^T Omega J + lambda I
/// over the robot's owned poses (intra edges contribute both diagonal blocks
/// and the 6x6 cross block; inter edges only the owned diagonal block).
/// The anchored pose's rows/columns are replaced by the identity.
pub fn hessian_block<V: PoseView>(
    metric: Metric,
    graph: &PoseGraph,
    partition: &Partition,
    robot: usize,
    view: &V,
    lambda: f64,
    anchor: Anchor,
) -> Result<DMatrix<f64>, ObjectiveError> {
    let owned = &partition.owned[robot];
    let slot: HashMap<usize, usize> = owned.iter().enumerate().map(|(i, &v)| (v, i)).collect();
    let n = 6 * owned.len();
    let mut h = DMatrix::zeros(n, n);
    let fetch = |vertex: usize, e: &Edge| -> Result<Pose, ObjectiveError> {
        view.pose(vertex)
            .cloned()
            .ok_or(ObjectiveError::MissingNeighbor {
                u: e.u,
                v: e.v,
                missing: vertex,
            })
    };
    let add_block = |h: &mut DMatrix<f64>, su: usize, sv: usize, block: &DMatrix<f64>| {
        for i in 0..6 {
            for j in 0..6 {
                h[(6 * su + i, 6 * sv + j)] += block[(i, j)];
            }
        }
    };
    for &ei in &partition.intra_edges[robot] {
        let e = &graph.edges[ei];
        let lin = edge_linearization(metric, e, &fetch(e.u, e)?, &fetch(e.v, e)?)?;
        let (su, sv) = (slot[&e.u], slot[&e.v]);
        let wj_u = &lin.w * &lin.j_u;
        let wj_v = &lin.w * &lin.j_v;
        add_block(&mut h, su, su, &(lin.j_u.transpose() * &wj_u * 2.0));
        add_block(&mut h, sv, sv, &(lin.j_v.transpose() * &wj_v * 2.0));
        let cross = lin.j_u.transpose() * &wj_v * 2.0;
        add_block(&mut h, su, sv, &cross);
        add_block(&mut h, sv, su, &cross.transpose());
    }
    for edges in partition.inter_edges[robot].values() {
        for &ei in edges {
            let e = &graph.edges[ei];
            let lin = edge_linearization(metric, e, &fetch(e.u, e)?, &fetch(e.v, e)?)?;
            if partition.robot_of[e.u] == robot {
                let su = slot[&e.u];
                add_block(
                    &mut h,
                    su,
                    su,
                    &(lin.j_u.transpose() * &lin.w * &lin.j_u * 2.0),
                );
            } else {
                let sv = slot[&e.v];
                add_block(
                    &mut h,
                    sv,
                    sv,
                    &(lin.j_v.transpose() * &lin.w * &lin.j_v * 2.0),
                );
            }
        }
    }
    for i in 0..n {
        h[(i, i)] += lambda;
    }
    if let Anchor::Vertex(a) = anchor {
        if let Some(&s) = slot.get(&a) {
            for k in 0..6 {
                let row = 6 * s + k;
                for j in 0..n {
                    h[(row, j)] = 0.0;
                    h[(j, row)] = 0.0;
                }
                h[(row, row)] = 1.0;
            }
        }
    }
    Ok(h)
}

/// Default LM regularizer: 1e-6 times the mean diagonal of the unregularized
/// Gauss-Newton block.
pub fn default_lambda<V: PoseView>(
    metric: Metric,
    graph: &PoseGraph,
    partition: &Partition,
    robot: usize,
    view: &V,
) -> Result<f64, ObjectiveError> {
    let h = hessian_block(metric, graph, partition, robot, view, 0.0, Anchor::None)?;
    let mean_diag = h.diagonal().sum() / h.nrows() as f64;
    Ok((1e-6 * mean_diag).max(1e-12))
}

/// Full centralized gradient stacked over every vertex (6N), assembled by
/// stacking per-robot gradient blocks.
pub fn full_gradient(
    metric: Metric,
    graph: &PoseGraph,
    partition: &Partition,
    x: &[Pose],
    anchor: Anchor,
) -> Result<DVector<f64>, ObjectiveError> {
    let n = graph.num_vertices();
    let mut g = DVector::zeros(6 * n);
    for r in 0..partition.num_robots() {
        let block = gradient_block(metric, graph, partition, r, &x.to_vec(), anchor)?;
        for (i, &v) in partition.owned[r].iter().enumerate() {
            for k in 0..6 {
                g[6 * v + k] = block[6 * i + k];
            }
        }
    }
    Ok(g)
}

/// Cost of the retracted state C(X exp(eta^)); eta stacked per vertex.
pub fn pullback_cost(
    metric: Metric,
    graph: &PoseGraph,
    x: &[Pose],
    eta: &DVector<f64>,
) -> Result<f64, ObjectiveError> {
    let retracted = retract(x, eta);
    total_cost(metric, graph, &retracted)
}

/// Per-pose retraction X_i * exp(eta_i^).
pub fn retract(x: &[Pose], eta: &DVector<f64>) -> Vec<Pose> {
    assert_eq!(eta.len(), 6 * x.len());
    x.iter()
        .enumerate()
        .map(|(i, p)| {
            let step = Vector6::from_fn(|k, _| eta[6 * i + k]);
            if step == Vector6::zeros() {
                p.clone()
            } else {
                p.compose(&crate::lie::exp_se3(&step))
            }
        })
        .collect()
}

/// Max-ratio Lipschitz estimate over a generic pullback evaluation;
/// `f(eta)` evaluates the pullback, `g0` is its gradient at zero.
pub fn lipschitz_ratio(
    f: &dyn Fn(&DVector<f64>) -> f64,
    g0: &DVector<f64>,
    dim: usize,
    trials: usize,
    radius: f64,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let f0 = f(&DVector::zeros(dim));
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let mut eta = DVector::from_fn(dim, |_, _| rng.gen_range(-1.0..1.0));
        let norm = eta.norm();
        if norm == 0.0 {
            continue;
        }
        let target: f64 = rng.gen_range(0.0..radius);
        eta *= target.max(1e-6) / norm;
        let ratio = 2.0 * (f(&eta) - f0 - g0.dot(&eta)) / eta.norm_squared();
        worst = worst.max(ratio);
    }
    worst
}

/// Estimate the pullback Lipschitz constant at state `x` by sampling
/// `trials` random tangent steps of norm up to `radius`; the max observed
/// curvature ratio is inflated by `safety_factor` and floored.
#[allow(clippy::too_many_arguments)]
pub fn estimate_lipschitz(
    metric: Metric,
    graph: &PoseGraph,
    partition: &Partition,
    x: &[Pose],
    trials: usize,
    radius: f64,
    safety_factor: f64,
    seed: u64,
) -> Result<f64, ObjectiveError> {
    let dim = 6 * graph.num_vertices();
    let g0 = full_gradient(metric, graph, partition, x, Anchor::None)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = |eta: &DVector<f64>| -> f64 {
        pullback_cost(metric, graph, x, eta).unwrap_or(f64::INFINITY)
    };
    let raw = lipschitz_ratio(&f, &g0, dim, trials, radius, &mut rng);
    Ok((safety_factor * raw).max(1e-8))
}
