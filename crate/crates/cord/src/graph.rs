//! Pose-graph data model, g2o ingestion, robot partitioning, and the
//! synthetic multi-robot grid-world generator.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix6, Vector3, Vector6};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::lie::{exp_se3, hat3};
use crate::Pose;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("i/o error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed {tag} record: {reason}")]
    Malformed {
        line: usize,
        tag: String,
        reason: String,
    },
    #[error("line {line}: duplicate vertex id {id}")]
    DuplicateVertex { line: usize, id: i64 },
    #[error("edge ({u}, {v}) references unknown vertex")]
    UnknownVertex { u: i64, v: i64 },
    #[error("self-loop edge at vertex {id}")]
    SelfLoop { id: i64 },
    #[error("graph is disconnected ({components} components)")]
    Disconnected { components: usize },
    #[error("information matrix on edge ({u}, {v}) is not symmetric positive-definite")]
    BadInformation { u: i64, v: i64 },
    #[error("invalid partition: {0}")]
    BadPartition(String),
}

/// Directed relative-pose measurement between two vertices.
#[derive(Clone, Debug)]
pub struct Edge {
    pub u: usize,
    pub v: usize,
    pub measurement: Pose,
    /// 6x6 information matrix in the (omega, v) twist ordering.
    pub info_geodesic: Matrix6<f64>,
    /// Scalar chordal weight on the rotation block.
    pub w_rot: f64,
    /// Scalar chordal weight on the translation column.
    pub w_trans: f64,
}

/// A connected 3D pose graph with initial poses.
#[derive(Clone, Debug)]
pub struct PoseGraph {
    /// Original vertex ids, sorted ascending; index in this Vec is the
    /// internal vertex index used everywhere else.
    pub ids: Vec<i64>,
    pub initial: Vec<Pose>,
    pub edges: Vec<Edge>,
}

impl PoseGraph {
    pub fn num_vertices(&self) -> usize {
        self.ids.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn check_connected(&self) -> Result<(), GraphError> {
        let n = self.num_vertices();
        if n <= 1 {
            return Ok(());
        }
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        for e in &self.edges {
            let (a, b) = (find(&mut parent, e.u), find(&mut parent, e.v));
            if a != b {
                parent[a] = b;
            }
        }
        let root = find(&mut parent, 0);
        let components = (0..n).filter(|&i| find(&mut parent, i) != root).count() + 1;
        if components > 1 {
            return Err(GraphError::Disconnected { components });
        }
        Ok(())
    }
}

/// Assignment of vertices to robots with intra/inter edge classification.
#[derive(Clone, Debug)]
pub struct Partition {
    /// vertex index -> robot id
    pub robot_of: Vec<usize>,
    /// per robot: owned vertex indices, ascending
    pub owned: Vec<Vec<usize>>,
    /// per robot: indices into graph.edges with both endpoints owned
    pub intra_edges: Vec<Vec<usize>>,
    /// per robot: neighbor robot id -> inter edge indices (each inter edge
    /// appears in both endpoint owners' views)
    pub inter_edges: Vec<HashMap<usize, Vec<usize>>>,
}

impl Partition {
    pub fn num_robots(&self) -> usize {
        self.owned.len()
    }

    /// Build the edge classification for an arbitrary vertex->robot map.
    pub fn from_assignment(
        graph: &PoseGraph,
        robot_of: Vec<usize>,
        robots: usize,
    ) -> Result<Self, GraphError> {
        if robot_of.len() != graph.num_vertices() {
            return Err(GraphError::BadPartition(
                "assignment length mismatch".into(),
            ));
        }
        if let Some(&r) = robot_of.iter().find(|&&r| r >= robots) {
            return Err(GraphError::BadPartition(format!(
                "robot id {r} out of range"
            )));
        }
        let mut owned = vec![Vec::new(); robots];
        for (v, &r) in robot_of.iter().enumerate() {
            owned[r].push(v);
        }
        let mut intra = vec![Vec::new(); robots];
        let mut inter: Vec<HashMap<usize, Vec<usize>>> = vec![HashMap::new(); robots];
        for (ei, e) in graph.edges.iter().enumerate() {
            let (ru, rv) = (robot_of[e.u], robot_of[e.v]);
            if ru == rv {
                intra[ru].push(ei);
            } else {
                inter[ru].entry(rv).or_default().push(ei);
                inter[rv].entry(ru).or_default().push(ei);
            }
        }
        Ok(Self {
            robot_of,
            owned,
            intra_edges: intra,
            inter_edges: inter,
        })
    }

    /// Neighbor robot ids of robot `r`, ascending.
    pub fn neighbors(&self, r: usize) -> Vec<usize> {
        let mut n: Vec<usize> = self.inter_edges[r].keys().copied().collect();
        n.sort_unstable();
        n
    }

    /// Vertices of robot `r` touched by at least one inter edge.
    pub fn boundary_vertices(&self, graph: &PoseGraph, r: usize) -> Vec<usize> {
        let mut out = Vec::new();
        for edges in self.inter_edges[r].values() {
            for &ei in edges {
                let e = &graph.edges[ei];
                let own = if self.robot_of[e.u] == r { e.u } else { e.v };
                out.push(own);
            }
        }
        out.sort_unstable();
        out.dedup();
        out
    }
}

/// Split vertices (sorted by id) into `robots` contiguous near-equal blocks.
pub fn partition_contiguous(graph: &PoseGraph, robots: usize) -> Result<Partition, GraphError> {
    let n = graph.num_vertices();
    if robots == 0 || robots > n {
        return Err(GraphError::BadPartition(format!(
            "robot count {robots} invalid for {n} vertices"
        )));
    }
    let base = n / robots;
    let rem = n % robots;
    let mut robot_of = vec![0usize; n];
    let mut idx = 0usize;
    for r in 0..robots {
        let size = base + usize::from(r < rem);
        for _ in 0..size {
            robot_of[idx] = r;
            idx += 1;
        }
    }
    Partition::from_assignment(graph, robot_of, robots)
}

/// Swap the translation-first 6x6 block convention of g2o into the
/// internal (omega, v) ordering (or back; the permutation is an involution).
fn swap_info_blocks(m: &Matrix6<f64>) -> Matrix6<f64> {
    let mut out = Matrix6::zeros();
    for i in 0..6 {
        for j in 0..6 {
            out[((i + 3) % 6, (j + 3) % 6)] = m[(i, j)];
        }
    }
    out
}

fn chordal_weights(info: &Matrix6<f64>) -> (f64, f64) {
    // info is in (omega, v) ordering here.
    let w_rot = (info[(0, 0)] + info[(1, 1)] + info[(2, 2)]) / 3.0;
    let w_trans = (info[(3, 3)] + info[(4, 4)] + info[(5, 5)]) / 3.0;
    (w_rot, w_trans)
}

fn spd_check(info: &Matrix6<f64>) -> bool {
    let sym_defect = (info - info.transpose()).norm();
    sym_defect <= 1e-9 * (1.0 + info.norm()) && info.cholesky().is_some()
}

/// Load the `VERTEX_SE3:QUAT` / `EDGE_SE3:QUAT` subset of the g2o text
/// format. `rotation_first` flips the assumed 6x6 information block order
/// for nonstandard files (standard g2o stores the translation block first).
pub fn load_g2o(path: &Path, rotation_first: bool) -> Result<PoseGraph, GraphError> {
    let text = std::fs::read_to_string(path).map_err(|source| GraphError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_g2o(&text, rotation_first)
}

pub fn parse_g2o(text: &str, rotation_first: bool) -> Result<PoseGraph, GraphError> {
    let mut vertices: Vec<(i64, Pose)> = Vec::new();
    let mut seen: HashMap<i64, usize> = HashMap::new();
    let mut raw_edges: Vec<(i64, i64, Pose, Matrix6<f64>, usize)> = Vec::new();

    for (lineno, line) in text.lines().enumerate() {
        let line_num = lineno + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut tok = line.split_whitespace();
        let tag = tok.next().unwrap();
        let rest: Vec<&str> = tok.collect();
        let parse_f = |s: &str, tag: &str| -> Result<f64, GraphError> {
            s.parse::<f64>().map_err(|_| GraphError::Malformed {
                line: line_num,
                tag: tag.to_string(),
                reason: format!("bad number `{s}`"),
            })
        };
        match tag {
            "VERTEX_SE3:QUAT" => {
                if rest.len() != 8 {
                    return Err(GraphError::Malformed {
                        line: line_num,
                        tag: tag.into(),
                        reason: format!("expected 8 fields, got {}", rest.len()),
                    });
                }
                let id: i64 = rest[0].parse().map_err(|_| GraphError::Malformed {
                    line: line_num,
                    tag: tag.into(),
                    reason: format!("bad vertex id `{}`", rest[0]),
                })?;
                if seen.contains_key(&id) {
                    return Err(GraphError::DuplicateVertex { line: line_num, id });
                }
                let f: Vec<f64> = rest[1..]
                    .iter()
                    .map(|s| parse_f(s, tag))
                    .collect::<Result<_, _>>()?;
                let pose =
                    Pose::from_quaternion(Vector3::new(f[0], f[1], f[2]), f[3], f[4], f[5], f[6]);
                seen.insert(id, vertices.len());
                vertices.push((id, pose));
            }
            "EDGE_SE3:QUAT" => {
                if rest.len() != 30 {
                    return Err(GraphError::Malformed {
                        line: line_num,
                        tag: tag.into(),
                        reason: format!("expected 30 fields, got {}", rest.len()),
                    });
                }
                let u: i64 = rest[0].parse().map_err(|_| GraphError::Malformed {
                    line: line_num,
                    tag: tag.into(),
                    reason: format!("bad vertex id `{}`", rest[0]),
                })?;
                let v: i64 = rest[1].parse().map_err(|_| GraphError::Malformed {
                    line: line_num,
                    tag: tag.into(),
                    reason: format!("bad vertex id `{}`", rest[1]),
                })?;
                let f: Vec<f64> = rest[2..]
                    .iter()
                    .map(|s| parse_f(s, tag))
                    .collect::<Result<_, _>>()?;
                let meas =
                    Pose::from_quaternion(Vector3::new(f[0], f[1], f[2]), f[3], f[4], f[5], f[6]);
                // 21 upper-triangular entries, row-major.
                let mut info = Matrix6::zeros();
                let mut k = 7;
                for i in 0..6 {
                    for j in i..6 {
                        info[(i, j)] = f[k];
                        info[(j, i)] = f[k];
                        k += 1;
                    }
                }
                if !rotation_first {
                    info = swap_info_blocks(&info);
                }
                raw_edges.push((u, v, meas, info, line_num));
            }
            _ => {
                eprintln!("warning: line {line_num}: skipping unknown tag `{tag}`");
            }
        }
    }

    // remap by ascending original id
    let mut order: Vec<usize> = (0..vertices.len()).collect();
    order.sort_by_key(|&i| vertices[i].0);
    let ids: Vec<i64> = order.iter().map(|&i| vertices[i].0).collect();
    let initial: Vec<Pose> = order.iter().map(|&i| vertices[i].1.clone()).collect();
    let index_of: HashMap<i64, usize> = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();

    let mut edges = Vec::with_capacity(raw_edges.len());
    for (u, v, meas, info, _line) in raw_edges {
        if u == v {
            return Err(GraphError::SelfLoop { id: u });
        }
        let (&ui, &vi) = match (index_of.get(&u), index_of.get(&v)) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(GraphError::UnknownVertex { u, v }),
        };
        if !spd_check(&info) {
            return Err(GraphError::BadInformation { u, v });
        }
        let (w_rot, w_trans) = chordal_weights(&info);
        edges.push(Edge {
            u: ui,
            v: vi,
            measurement: meas,
            info_geodesic: info,
            w_rot,
            w_trans,
        });
    }

    let graph = PoseGraph {
        ids,
        initial,
        edges,
    };
    graph.check_connected()?;
    Ok(graph)
}

/// Serialize back to the g2o subset read by [`parse_g2o`] (translation-first
/// information blocks).
pub fn write_g2o(graph: &PoseGraph) -> String {
    let mut out = String::new();
    for (i, pose) in graph.initial.iter().enumerate() {
        let q = nalgebra::UnitQuaternion::from_matrix(&pose.rotation);
        let q = q.quaternion();
        let t = &pose.translation;
        writeln!(
            out,
            "VERTEX_SE3:QUAT {} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e}",
            graph.ids[i], t[0], t[1], t[2], q.i, q.j, q.k, q.w
        )
        .unwrap();
    }
    for e in &graph.edges {
        let q = nalgebra::UnitQuaternion::from_matrix(&e.measurement.rotation);
        let q = q.quaternion();
        let t = &e.measurement.translation;
        let info = swap_info_blocks(&e.info_geodesic);
        write!(
            out,
            "EDGE_SE3:QUAT {} {} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e}",
            graph.ids[e.u], graph.ids[e.v], t[0], t[1], t[2], q.i, q.j, q.k, q.w
        )
        .unwrap();
        for i in 0..6 {
            for j in i..6 {
                write!(out, " {:.17e}", info[(i, j)]).unwrap();
            }
        }
        out.push('\n');
    }
    out
}

/// Per-edge-class measurement noise ranges; sigmas are sampled uniformly.
#[derive(Clone, Debug)]
pub struct NoiseSpec {
    /// translation sigma range in meters (intra-robot edges)
    pub intra_trans: (f64, f64),
    /// rotation sigma range in radians (intra-robot edges)
    pub intra_rot: (f64, f64),
    pub inter_trans: (f64, f64),
    pub inter_rot: (f64, f64),
}

impl NoiseSpec {
    /// Intra 0.05-0.15 m / 1-3 deg; inter 0.10-0.30 m / 3-10 deg.
    pub fn default_sim() -> Self {
        let deg = std::f64::consts::PI / 180.0;
        Self {
            intra_trans: (0.05, 0.15),
            intra_rot: (1.0 * deg, 3.0 * deg),
            inter_trans: (0.10, 0.30),
            inter_rot: (3.0 * deg, 10.0 * deg),
        }
    }

    pub fn zero() -> Self {
        Self {
            intra_trans: (0.0, 0.0),
            intra_rot: (0.0, 0.0),
            inter_trans: (0.0, 0.0),
            inter_rot: (0.0, 0.0),
        }
    }
}

#[derive(Clone, Debug)]
pub struct GridWorldConfig {
    pub robots: usize,
    /// nodes per axis of each robot's cubic grid trajectory
    pub side: usize,
    /// grid spacing in meters
    pub spacing: f64,
    /// candidate loop closures are node pairs within this radius
    pub loop_radius: f64,
    pub p_intra: f64,
    pub p_inter: f64,
    pub noise: NoiseSpec,
    pub seed: u64,
}

impl GridWorldConfig {
    pub fn default_sim(seed: u64) -> Self {
        Self {
            robots: 4,
            side: 5,
            spacing: 1.0,
            loop_radius: 1.4,
            p_intra: 0.2,
            p_inter: 0.3,
            noise: NoiseSpec::default_sim(),
            seed,
        }
    }
}

pub struct GridWorld {
    pub graph: PoseGraph,
    pub partition: Partition,
    pub ground_truth: Vec<Pose>,
}

fn sample_sigma(rng: &mut ChaCha8Rng, range: (f64, f64)) -> f64 {
    if range.1 <= range.0 {
        range.0
    } else {
        rng.gen_range(range.0..range.1)
    }
}

fn gaussian3(rng: &mut ChaCha8Rng, sigma: f64) -> Vector3<f64> {
    // Box-Muller; keeps the generator dependency-light and deterministic.
    let mut draw = || -> f64 {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    };
    Vector3::new(draw(), draw(), draw()) * sigma
}

/// Corrupt a true relative pose: rotation noise as a right-multiplied
/// exponential of a Gaussian axis-angle draw, translation noise additive in
/// the measurement frame.
fn corrupt(rel: &Pose, sigma_rot: f64, sigma_trans: f64, rng: &mut ChaCha8Rng) -> Pose {
    let drot = gaussian3(rng, sigma_rot);
    let dt = gaussian3(rng, sigma_trans);
    let noisy_rot =
        rel.rotation * exp_se3(&Vector6::new(drot[0], drot[1], drot[2], 0.0, 0.0, 0.0)).rotation;
    Pose::new(noisy_rot, rel.translation + dt)
}

fn edge_from_noise(
    u: usize,
    v: usize,
    truth: &[Pose],
    sigma_rot: f64,
    sigma_trans: f64,
    rng: &mut ChaCha8Rng,
) -> Edge {
    let rel = truth[u].inverse().compose(&truth[v]);
    let meas = corrupt(&rel, sigma_rot, sigma_trans, rng);
    let ir = if sigma_rot > 0.0 {
        1.0 / (sigma_rot * sigma_rot)
    } else {
        1.0
    };
    let it = if sigma_trans > 0.0 {
        1.0 / (sigma_trans * sigma_trans)
    } else {
        1.0
    };
    let mut info = Matrix6::zeros();
    for i in 0..3 {
        info[(i, i)] = ir;
        info[(i + 3, i + 3)] = it;
    }
    Edge {
        u,
        v,
        measurement: meas,
        info_geodesic: info,
        w_rot: ir,
        w_trans: it,
    }
}

/// Boustrophedon ordering through a cubic grid so consecutive trajectory
/// nodes are grid-adjacent.
fn snake_positions(side: usize, spacing: f64, origin: Vector3<f64>) -> Vec<Vector3<f64>> {
    let mut out = Vec::with_capacity(side * side * side);
    for z in 0..side {
        let ys: Vec<usize> = if z % 2 == 0 {
            (0..side).collect()
        } else {
            (0..side).rev().collect()
        };
        for (yi, &y) in ys.iter().enumerate() {
            let flip = (z % 2 == 0 && yi % 2 == 1) || (z % 2 == 1 && yi % 2 == 1);
            let xs: Vec<usize> = if flip {
                (0..side).rev().collect()
            } else {
                (0..side).collect()
            };
            for &x in &xs {
                out.push(origin + Vector3::new(x as f64, y as f64, z as f64) * spacing);
            }
        }
    }
    out
}

/// Generate the multi-robot grid-world scenario: each robot traces a cubic
/// grid trajectory, robots sit in a planar grid formation, odometry chains
/// each trajectory, and loop closures are sampled within `loop_radius`.
pub fn generate_grid_world(cfg: &GridWorldConfig) -> GridWorld {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let per_robot = cfg.side * cfg.side * cfg.side;
    let n = cfg.robots * per_robot;
    let formation = (cfg.robots as f64).sqrt().ceil() as usize;

    let mut truth: Vec<Pose> = Vec::with_capacity(n);
    let mut robot_of = Vec::with_capacity(n);
    for r in 0..cfg.robots {
        let origin = Vector3::new(
            (r % formation) as f64 * cfg.side as f64 * cfg.spacing,
            (r / formation) as f64 * cfg.side as f64 * cfg.spacing,
            0.0,
        );
        for p in snake_positions(cfg.side, cfg.spacing, origin) {
            truth.push(Pose::new(nalgebra::Matrix3::identity(), p));
            robot_of.push(r);
        }
    }

    let mut edges: Vec<Edge> = Vec::new();
    // odometry along each robot trajectory
    for r in 0..cfg.robots {
        let base = r * per_robot;
        for k in 0..per_robot - 1 {
            let s_rot = sample_sigma(&mut rng, cfg.noise.intra_rot);
            let s_t = sample_sigma(&mut rng, cfg.noise.intra_trans);
            edges.push(edge_from_noise(
                base + k,
                base + k + 1,
                &truth,
                s_rot,
                s_t,
                &mut rng,
            ));
        }
    }
    // loop closures within radius
    for u in 0..n {
        for v in (u + 1)..n {
            let same_robot = robot_of[u] == robot_of[v];
            if same_robot && v == u + 1 {
                continue; // odometry already links consecutive nodes
            }
            let dist = (truth[u].translation - truth[v].translation).norm();
            if dist > cfg.loop_radius {
                continue;
            }
            let (p, s_rot_range, s_t_range) = if same_robot {
                (cfg.p_intra, cfg.noise.intra_rot, cfg.noise.intra_trans)
            } else {
                (cfg.p_inter, cfg.noise.inter_rot, cfg.noise.inter_trans)
            };
            if rng.gen_range(0.0..1.0) >= p {
                continue;
            }
            let s_rot = sample_sigma(&mut rng, s_rot_range);
            let s_t = sample_sigma(&mut rng, s_t_range);
            edges.push(edge_from_noise(u, v, &truth, s_rot, s_t, &mut rng));
        }
    }

    // odometry-propagated initial guess from each robot's known start pose
    let mut initial = vec![Pose::identity(); n];
    for r in 0..cfg.robots {
        let base = r * per_robot;
        initial[base] = truth[base].clone();
        for k in 0..per_robot - 1 {
            // odometry edges were pushed in order, robot r's chain first
            let e = &edges[r * (per_robot - 1) + k];
            debug_assert_eq!((e.u, e.v), (base + k, base + k + 1));
            initial[base + k + 1] = initial[base + k].compose(&e.measurement);
        }
    }

    let graph = PoseGraph {
        ids: (0..n as i64).collect(),
        initial,
        edges,
    };
    let partition = Partition::from_assignment(&graph, robot_of, cfg.robots).unwrap();
    GridWorld {
        graph,
        partition,
        ground_truth: truth,
    }
}

#[allow(dead_code)]
fn _hat3_used(v: &Vector3<f64>) -> nalgebra::Matrix3<f64> {
    hat3(v)
}
