//! Distributed solver: per-robot state machines exchanging immutable
//! packets through a simulated lossy/delayed network, velocity-based
//! neighbor prediction, and the distributed-Jacobi baseline.
//!
//! Execution is lock-step: all robots step once per global round, delays
//! are expressed in rounds, and every run is a pure function of its seed.

use std::collections::HashMap;

use nalgebra::Vector6;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dynamics::{DynError, DynParams, RobotBlock, StepMode};
use crate::graph::{Partition, PoseGraph};
use crate::lie::exp_se3;
use crate::objective::{total_cost, Anchor, Metric};
use crate::{Pose, Twist};

/// Extrapolation horizon cap, as a multiple of dt.
pub const MAX_PREDICT_STEPS: f64 = 50.0;

#[derive(Debug, Error)]
pub enum DistError {
    #[error(transparent)]
    Dyn(#[from] DynError),
    #[error("invalid network config: {0}")]
    BadConfig(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regime {
    Synchronous,
    /// Packet sent at round k becomes readable at round k + D.
    ConstantDelay(usize),
    /// Per-packet uniform integer delay in [lo, hi].
    RandomDelay(usize, usize),
    /// One round-robin pair of neighboring robots exchanges fresh state per
    /// round; everyone else hears nothing.
    EdgeBased,
}

#[derive(Clone, Copy, Debug)]
pub struct NetConfig {
    pub regime: Regime,
    pub loss_prob: f64,
    pub seed: u64,
}

impl NetConfig {
    pub fn synchronous() -> Self {
        NetConfig {
            regime: Regime::Synchronous,
            loss_prob: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), DistError> {
        if !(0.0..1.0).contains(&self.loss_prob) {
            return Err(DistError::BadConfig(format!(
                "loss_prob {} not in [0,1)",
                self.loss_prob
            )));
        }
        if let Regime::RandomDelay(lo, hi) = self.regime {
            if lo < 1 || hi < lo {
                return Err(DistError::BadConfig(format!("bad delay range [{lo},{hi}]")));
            }
        }
        Ok(())
    }
}

/// Immutable snapshot of a sender's boundary poses and twists.
///
/// The carried state is stamped with the integer round it belongs to, so
/// staleness in rounds is exact; `tau` is the matching model time, kept for
/// reporting only (t0 + k_state * dt accumulates float error and must not
/// decide whether a prediction horizon is zero).
#[derive(Clone, Debug)]
pub struct Packet {
    pub sender: usize,
    /// Round index of the carried state.
    pub k_state: usize,
    /// Model time of the carried state.
    pub tau: f64,
    pub entries: Vec<(usize, Pose, Twist)>,
}

impl Packet {
    /// Serialized size in bytes with 32-bit floats: per entry a vertex id
    /// (4) plus pose quaternion+translation (7) and twist (6); header holds
    /// sender id and timestamp.
    pub fn wire_bytes(&self) -> usize {
        8 + self.entries.len() * (4 + 13 * 4)
    }
}

/// Extrapolate every entry by its own cached twist over dt_ahead:
/// X_hat = X exp((xi dt)^). dt_ahead = 0 returns cached poses exactly.
pub fn predict_packet(p: &Packet, dt_ahead: f64) -> Vec<(usize, Pose)> {
    p.entries
        .iter()
        .map(|(v, pose, xi)| {
            if dt_ahead == 0.0 || *xi == Vector6::zeros() {
                (*v, pose.clone())
            } else {
                (*v, pose.compose(&exp_se3(&(xi * dt_ahead))))
            }
        })
        .collect()
}

/// One robot: its block of the state plus a latest-packet-per-neighbor cache.
pub struct Robot {
    pub id: usize,
    pub block: RobotBlock,
    pub cache: HashMap<usize, Packet>,
    index_of_own: HashMap<usize, usize>,
}

impl Robot {
    /// Accept a packet if it is newer than what is cached for that sender.
    pub fn receive(&mut self, p: Packet) {
        match self.cache.get(&p.sender) {
            Some(old) if old.k_state >= p.k_state => {}
            _ => {
                self.cache.insert(p.sender, p);
            }
        }
    }

    /// Predicted neighbor poses at round `k_now`; a cache entry stamped with
    /// the current round extrapolates by exactly zero.
    pub fn neighbor_view(&self, k_now: usize, dt: f64, predict: bool) -> HashMap<usize, Pose> {
        let mut out = HashMap::new();
        let mut senders: Vec<&Packet> = self.cache.values().collect();
        senders.sort_unstable_by_key(|p| p.sender);
        for p in senders {
            let age = k_now.saturating_sub(p.k_state) as f64 * dt;
            let dt_ahead = if predict {
                age.min(MAX_PREDICT_STEPS * dt)
            } else {
                0.0
            };
            for (v, pose) in predict_packet(p, dt_ahead) {
                out.insert(v, pose);
            }
        }
        out
    }

    /// Staleness of the cache in rounds at round `k_now`.
    pub fn staleness(&self, k_now: usize) -> Vec<f64> {
        self.cache
            .values()
            .map(|p| k_now.saturating_sub(p.k_state) as f64)
            .collect()
    }

    /// Snapshot packet of this robot's boundary poses stamped with round
    /// `k_state` (model time `tau`).
    pub fn boundary_packet(
        &self,
        graph: &PoseGraph,
        partition: &Partition,
        k_state: usize,
        tau: f64,
    ) -> Packet {
        let entries = partition
            .boundary_vertices(graph, self.id)
            .into_iter()
            .map(|v| {
                let s = self.index_of_own[&v];
                let xi = Vector6::from_fn(|k, _| self.block.xi[6 * s + k]);
                (v, self.block.poses[s].clone(), xi)
            })
            .collect();
        Packet {
            sender: self.id,
            k_state,
            tau,
            entries,
        }
    }

    pub fn poses(&self) -> &[Pose] {
        &self.block.poses
    }
}

/// What each robot runs per round.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DistSolver {
    /// Second-order dynamics (Alg.-style semi-implicit step).
    Cord,
    /// Distributed Jacobi: X <- X exp(-(alpha H^-1 grad)^) against the
    /// block's frozen initial Hessian; no velocity, no prediction.
    Jacobi { alpha: f64 },
}

#[derive(Clone, Copy, Debug)]
pub struct DistConfig {
    pub metric: Metric,
    pub params: DynParams,
    pub net: NetConfig,
    pub solver: DistSolver,
    pub anchor: Anchor,
    /// Velocity-based neighbor prediction (ignored by Jacobi).
    pub predict: bool,
    pub max_iter: usize,
}

/// One diagnostic row per round, written by the harness from a global
/// snapshot the robots never see.
#[derive(Clone, Debug)]
pub struct RoundRow {
    pub round: usize,
    pub cost: f64,
    pub grad_inf: Vec<f64>,
    pub delivered: usize,
    pub dropped: usize,
    pub mean_staleness: f64,
}

pub fn write_rounds_csv(path: &std::path::Path, rows: &[RoundRow]) -> std::io::Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let robots = rows.first().map_or(0, |r| r.grad_inf.len());
    let grad_cols: Vec<String> = (0..robots).map(|i| format!("grad_inf_{i}")).collect();
    writeln!(
        f,
        "round,cost,{},delivered,dropped,mean_staleness",
        grad_cols.join(",")
    )?;
    for r in rows {
        let grads: Vec<String> = r.grad_inf.iter().map(|g| g.to_string()).collect();
        writeln!(
            f,
            "{},{},{},{},{},{}",
            r.round,
            r.cost,
            grads.join(","),
            r.delivered,
            r.dropped,
            r.mean_staleness
        )?;
    }
    Ok(())
}

pub struct DistResult {
    pub poses: Vec<Pose>,
    pub rows: Vec<RoundRow>,
    pub delivered: usize,
    pub dropped: usize,
    /// Bytes a robot would put on the wire per round, summed over robots.
    pub bytes_per_round: usize,
    pub max_staleness_rounds: f64,
}

struct Network {
    cfg: NetConfig,
    rng: ChaCha8Rng,
    /// (deliver_round, recipient, packet)
    inflight: Vec<(usize, usize, Packet)>,
    delivered: usize,
    dropped: usize,
}

impl Network {
    fn new(cfg: NetConfig) -> Self {
        Network {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg,
            inflight: Vec::new(),
            delivered: 0,
            dropped: 0,
        }
    }

    fn lost(&mut self) -> bool {
        self.cfg.loss_prob > 0.0 && self.rng.gen::<f64>() < self.cfg.loss_prob
    }

    /// Queue one packet to every recipient per the regime; `k_sent` is the
    /// round the send happens in.
    fn send(&mut self, packet: Packet, recipients: &[usize], k_sent: usize) {
        for &r in recipients {
            if self.lost() {
                self.dropped += 1;
                continue;
            }
            let deliver = match self.cfg.regime {
                Regime::Synchronous => k_sent + 1,
                Regime::ConstantDelay(d) => k_sent + d,
                Regime::RandomDelay(lo, hi) => k_sent + self.rng.gen_range(lo..=hi),
                Regime::EdgeBased => unreachable!("edge-based exchanges bypass the queue"),
            };
            self.inflight.push((deliver, r, packet.clone()));
        }
    }

    /// Pop every packet whose delivery round has arrived.
    fn collect(&mut self, k_now: usize) -> Vec<(usize, Packet)> {
        let mut out = Vec::new();
        let mut rest = Vec::with_capacity(self.inflight.len());
        for (deliver, r, p) in self.inflight.drain(..) {
            if deliver <= k_now {
                out.push((r, p));
            } else {
                rest.push((deliver, r, p));
            }
        }
        self.inflight = rest;
        self.delivered += out.len();
        // deterministic handoff order regardless of queue history
        out.sort_by_key(|(r, p)| (*r, p.sender, p.k_state));
        out
    }
}

/// Sorted robot pairs sharing at least one inter edge.
pub fn neighbor_pairs(partition: &Partition) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for r in 0..partition.num_robots() {
        for j in partition.neighbors(r) {
            if r < j {
                pairs.push((r, j));
            }
        }
    }
    pairs.sort_unstable();
    pairs
}

/// One robot's round: read cache, predict, step its block, and return the
/// packet it wants to broadcast. Locality is structural: the function sees
/// no global state.
#[allow(clippy::too_many_arguments)]
pub fn robot_step(
    robot: &mut Robot,
    graph: &PoseGraph,
    partition: &Partition,
    cfg: &DistConfig,
    k_now: usize,
    t_now: f64,
    dt: f64,
) -> Result<(f64, Packet), DistError> {
    let (mode, predict, step_dt) = match cfg.solver {
        DistSolver::Cord => (StepMode::Dynamics, cfg.predict, dt),
        DistSolver::Jacobi { alpha } => (StepMode::Preconditioned, false, alpha),
    };
    // own poses are resolved inside the block's step; only neighbor
    // estimates come through the view
    let neighbors = robot.neighbor_view(k_now, dt, predict);
    let stats = robot.block.step(
        cfg.metric,
        graph,
        partition,
        &neighbors,
        &cfg.params,
        cfg.anchor,
        mode,
        t_now,
        step_dt,
        false,
    )?;
    let packet = robot.boundary_packet(graph, partition, k_now + 1, t_now + dt);
    Ok((stats.grad_inf, packet))
}

fn build_robots(
    graph: &PoseGraph,
    partition: &Partition,
    cfg: &DistConfig,
) -> Result<Vec<Robot>, DistError> {
    // bootstrap: every cache populated by a zero-delay lossless exchange of
    // the initial boundary poses before round 0
    let mut bootstrap: Vec<Packet> = Vec::new();
    let t0 = cfg.params.t0;
    let x0 = &graph.initial;
    for r in 0..partition.num_robots() {
        let entries = partition
            .boundary_vertices(graph, r)
            .into_iter()
            .map(|v| (v, x0[v].clone(), Vector6::zeros()))
            .collect();
        bootstrap.push(Packet {
            sender: r,
            k_state: 0,
            tau: t0,
            entries,
        });
    }
    let mut robots = Vec::with_capacity(partition.num_robots());
    for r in 0..partition.num_robots() {
        let mut cache = HashMap::new();
        for j in partition.neighbors(r) {
            cache.insert(j, bootstrap[j].clone());
        }
        let index_of_own: HashMap<usize, usize> = partition.owned[r]
            .iter()
            .enumerate()
            .map(|(i, &v)| (v, i))
            .collect();
        let block = RobotBlock::new(
            cfg.metric,
            graph,
            partition,
            r,
            &x0.clone(),
            &cfg.params,
            cfg.anchor,
        )?;
        robots.push(Robot {
            id: r,
            block,
            cache,
            index_of_own,
        });
    }
    Ok(robots)
}

/// Drive all robots for `cfg.max_iter` lock-step rounds under the regime.
pub fn run_distributed(
    graph: &PoseGraph,
    partition: &Partition,
    cfg: &DistConfig,
) -> Result<DistResult, DistError> {
    cfg.net.validate()?;
    cfg.params.validate()?;
    let mut robots = build_robots(graph, partition, cfg)?;
    let mut net = Network::new(cfg.net);
    let pairs = neighbor_pairs(partition);
    let dt = cfg.params.dt;
    let t0 = cfg.params.t0;
    let mut rows = Vec::with_capacity(cfg.max_iter);
    let mut max_staleness: f64 = 0.0;
    let bytes_per_round = robots
        .iter()
        .map(|r| {
            r.boundary_packet(graph, partition, 0, t0).wire_bytes()
                * partition.neighbors(r.id).len()
        })
        .sum();
    for k in 0..cfg.max_iter {
        let t_now = t0 + k as f64 * dt;
        // delivery phase
        match cfg.net.regime {
            Regime::EdgeBased => {
                if !pairs.is_empty() {
                    let (a, b) = pairs[k % pairs.len()];
                    let pa = robots[a].boundary_packet(graph, partition, k, t_now);
                    let pb = robots[b].boundary_packet(graph, partition, k, t_now);
                    if !net.lost() {
                        net.delivered += 1;
                        robots[b].receive(pa);
                    } else {
                        net.dropped += 1;
                    }
                    if !net.lost() {
                        net.delivered += 1;
                        robots[a].receive(pb);
                    } else {
                        net.dropped += 1;
                    }
                }
            }
            _ => {
                for (recipient, packet) in net.collect(k) {
                    robots[recipient].receive(packet);
                }
            }
        }
        // step phase (Jacobi within the round: caches only change above)
        let mut grad_inf = Vec::with_capacity(robots.len());
        let mut staleness_sum = 0.0;
        let mut staleness_n = 0usize;
        let mut outgoing = Vec::with_capacity(robots.len());
        for robot in robots.iter_mut() {
            for s in robot.staleness(k) {
                max_staleness = max_staleness.max(s);
                staleness_sum += s;
                staleness_n += 1;
            }
            let (g, packet) = robot_step(robot, graph, partition, cfg, k, t_now, dt)?;
            grad_inf.push(g);
            outgoing.push(packet);
        }
        if cfg.net.regime != Regime::EdgeBased {
            for packet in outgoing {
                let recipients = partition.neighbors(packet.sender);
                net.send(packet, &recipients, k);
            }
        }
        let snapshot = stack_poses(&robots, partition, graph.num_vertices());
        rows.push(RoundRow {
            round: k + 1,
            cost: total_cost(cfg.metric, graph, &snapshot).map_err(DynError::from)?,
            grad_inf,
            delivered: net.delivered,
            dropped: net.dropped,
            mean_staleness: if staleness_n == 0 {
                0.0
            } else {
                staleness_sum / staleness_n as f64
            },
        });
    }
    Ok(DistResult {
        poses: stack_poses(&robots, partition, graph.num_vertices()),
        rows,
        delivered: net.delivered,
        dropped: net.dropped,
        bytes_per_round,
        max_staleness_rounds: max_staleness,
    })
}

fn stack_poses(robots: &[Robot], partition: &Partition, n: usize) -> Vec<Pose> {
    let mut x = vec![Pose::identity(); n];
    for robot in robots {
        for (i, &v) in partition.owned[robot.id].iter().enumerate() {
            x[v] = robot.block.poses[i].clone();
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::Solver;
    use crate::graph::{generate_grid_world, partition_contiguous, GridWorldConfig};
    use crate::objective::{full_gradient, gradient_block, hessian_block, retract};

    fn world(seed: u64, robots: usize) -> (PoseGraph, Partition) {
        let w = generate_grid_world(&GridWorldConfig {
            robots,
            side: 2,
            ..GridWorldConfig::default_sim(seed)
        });
        (w.graph, w.partition)
    }

    fn cord_cfg(net: NetConfig, dt: f64, iters: usize) -> DistConfig {
        DistConfig {
            metric: Metric::Chordal,
            params: DynParams {
                dt,
                ..DynParams::default()
            },
            net,
            solver: DistSolver::Cord,
            anchor: Anchor::Vertex(0),
            predict: true,
            max_iter: iters,
        }
    }

    #[test]
    fn prediction_at_zero_age_is_exact_clone() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pose = exp_se3(&Vector6::from_fn(|_, _| rng.gen_range(-1.0..1.0)));
        let xi = Vector6::from_fn(|_, _| rng.gen_range(-1.0..1.0));
        let p = Packet {
            sender: 0,
            k_state: 3,
            tau: 3.0,
            entries: vec![(7, pose.clone(), xi)],
        };
        let out = predict_packet(&p, 0.0);
        assert_eq!(out[0].1.to_homogeneous(), pose.to_homogeneous());
    }

    #[test]
    fn prediction_of_resting_neighbor_is_cached_pose() {
        let pose = exp_se3(&Vector6::new(0.1, 0.2, -0.3, 1.0, 0.0, 0.5));
        let p = Packet {
            sender: 1,
            k_state: 0,
            tau: 0.0,
            entries: vec![(2, pose.clone(), Vector6::zeros())],
        };
        for dt in [0.1, 1.0, 10.0] {
            let out = predict_packet(&p, dt);
            assert_eq!(out[0].1.to_homogeneous(), pose.to_homogeneous());
        }
    }

    #[test]
    fn prediction_of_constant_twist_neighbor_is_exact() {
        let xi = Vector6::new(0.05, -0.02, 0.08, 0.3, -0.1, 0.2);
        let dt = 0.1;
        let mut pose = exp_se3(&Vector6::new(0.2, 0.0, 0.1, 1.0, 2.0, 0.0));
        let cached = Packet {
            sender: 0,
            k_state: 0,
            tau: 0.0,
            entries: vec![(0, pose.clone(), xi)],
        };
        for _ in 0..5 {
            pose = pose.compose(&exp_se3(&(xi * dt)));
        }
        let predicted = &predict_packet(&cached, 5.0 * dt)[0].1;
        assert!((predicted.to_homogeneous() - pose.to_homogeneous()).norm() <= 1e-10);
    }

    #[test]
    fn prediction_horizon_is_clamped() {
        let xi = Vector6::new(0.0, 0.0, 0.0, 1.0, 0.0, 0.0);
        let p = Packet {
            sender: 0,
            k_state: 0,
            tau: 0.0,
            entries: vec![(0, Pose::identity(), xi)],
        };
        let mut robot_cache = HashMap::new();
        robot_cache.insert(0usize, p);
        let robot = Robot {
            id: 1,
            block: dummy_block(),
            cache: robot_cache,
            index_of_own: HashMap::new(),
        };
        let dt = 0.1;
        let capped = robot.neighbor_view(1_000_000, dt, true);
        // horizon capped at 50 dt = 5 model-seconds of translation
        assert!((capped[&0].translation[0] - 5.0).abs() < 1e-12);
    }

    fn dummy_block() -> RobotBlock {
        let graph = PoseGraph {
            ids: vec![0],
            initial: vec![Pose::identity()],
            edges: vec![],
        };
        let p = partition_contiguous(&graph, 1).unwrap();
        RobotBlock::new(
            Metric::Chordal,
            &graph,
            &p,
            0,
            &graph.initial,
            &DynParams::default(),
            Anchor::None,
        )
        .unwrap()
    }

    #[test]
    fn synchronous_run_equals_centralized_block_run() {
        let (graph, partition) = world(1, 3);
        let iters = 30;
        let cfg = cord_cfg(NetConfig::synchronous(), 0.2, iters);
        let dist = run_distributed(&graph, &partition, &cfg).unwrap();
        let mut central = Solver::new(
            cfg.metric,
            graph.clone(),
            partition.clone(),
            cfg.params,
            StepMode::Dynamics,
            cfg.anchor,
        )
        .unwrap();
        for _ in 0..iters {
            central.step().unwrap();
        }
        let cx = central.poses();
        let worst = dist
            .poses
            .iter()
            .zip(&cx)
            .map(|(a, b)| (a.to_homogeneous() - b.to_homogeneous()).norm())
            .fold(0.0f64, f64::max);
        assert!(
            worst <= 1e-12,
            "sync distributed deviates from centralized by {worst}"
        );
    }

    #[test]
    fn single_robot_matches_centralized_bit_exactly() {
        let (graph, _) = world(2, 2);
        let partition = partition_contiguous(&graph, 1).unwrap();
        let cfg = cord_cfg(NetConfig::synchronous(), 0.05, 25);
        let dist = run_distributed(&graph, &partition, &cfg).unwrap();
        let mut central = Solver::new(
            cfg.metric,
            graph.clone(),
            partition,
            cfg.params,
            StepMode::Dynamics,
            cfg.anchor,
        )
        .unwrap();
        for _ in 0..25 {
            central.step().unwrap();
        }
        for (a, b) in dist.poses.iter().zip(&central.poses()) {
            assert_eq!(a.to_homogeneous(), b.to_homogeneous());
        }
    }

    #[test]
    fn locality_update_blind_to_non_neighbor_perturbation() {
        // hand-built 6-pose chain split into 3 robots: 0-1 and 1-2 are
        // neighbors, 0-2 are not
        let mk_edge = |u: usize, v: usize| crate::graph::Edge {
            u,
            v,
            measurement: exp_se3(&Vector6::new(0.0, 0.0, 0.1, 1.0, 0.0, 0.0)),
            info_geodesic: nalgebra::Matrix6::identity(),
            w_rot: 1.0,
            w_trans: 1.0,
        };
        let mut initial = vec![Pose::identity()];
        for k in 1..6 {
            initial.push(
                initial[k - 1].compose(&exp_se3(&Vector6::new(0.0, 0.0, 0.12, 1.05, 0.02, 0.0))),
            );
        }
        let graph = PoseGraph {
            ids: (0..6).collect(),
            initial,
            edges: (0..5).map(|k| mk_edge(k, k + 1)).collect(),
        };
        let partition = partition_contiguous(&graph, 3).unwrap();
        assert!(
            !partition.neighbors(0).contains(&2),
            "need non-adjacent robots"
        );
        let run_first_round = |perturb: bool| -> Vec<Pose> {
            let mut g = graph.clone();
            if perturb {
                let v = partition.owned[2][1];
                g.initial[v] =
                    g.initial[v].compose(&exp_se3(&Vector6::new(0.1, 0.2, 0.3, 0.4, 0.5, 0.6)));
            }
            let cfg = cord_cfg(NetConfig::synchronous(), 0.05, 3);
            let mut robots = build_robots(&g, &partition, &cfg).unwrap();
            let (_, _) =
                robot_step(&mut robots[0], &g, &partition, &cfg, 0, cfg.params.t0, 0.05).unwrap();
            robots[0].block.poses.clone()
        };
        let a = run_first_round(false);
        let b = run_first_round(true);
        for (p, q) in a.iter().zip(&b) {
            assert_eq!(p.to_homogeneous(), q.to_homogeneous());
        }
    }

    #[test]
    fn constant_delay_delivery_timing() {
        let mut net = Network::new(NetConfig {
            regime: Regime::ConstantDelay(5),
            loss_prob: 0.0,
            seed: 0,
        });
        let p = Packet {
            sender: 0,
            k_state: 11,
            tau: 10.0,
            entries: vec![],
        };
        net.send(p, &[1], 10);
        assert!(net.collect(14).is_empty());
        let got = net.collect(15);
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].0, 1);
    }

    #[test]
    fn packet_loss_fraction_concentrates() {
        let mut net = Network::new(NetConfig {
            regime: Regime::Synchronous,
            loss_prob: 0.1,
            seed: 42,
        });
        for k in 0..10_000 {
            let p = Packet {
                sender: 0,
                k_state: k + 1,
                tau: k as f64,
                entries: vec![],
            };
            net.send(p, &[1], k);
        }
        let frac = net.dropped as f64 / 10_000.0;
        assert!((0.08..=0.12).contains(&frac), "drop fraction {frac}");
    }

    #[test]
    fn staleness_bounded_under_constant_delay() {
        let (graph, partition) = world(4, 3);
        let d = 4;
        let cfg = cord_cfg(
            NetConfig {
                regime: Regime::ConstantDelay(d),
                loss_prob: 0.0,
                seed: 1,
            },
            0.05,
            60,
        );
        let res = run_distributed(&graph, &partition, &cfg).unwrap();
        assert!(
            res.max_staleness_rounds <= (d + 1) as f64 + 1e-9,
            "staleness {} rounds under delay {d}",
            res.max_staleness_rounds
        );
        assert!(res.max_staleness_rounds >= (d - 1) as f64 - 1e-9);
    }

    #[test]
    fn runs_are_deterministic_per_seed() {
        let (graph, partition) = world(5, 3);
        let cfg = cord_cfg(
            NetConfig {
                regime: Regime::RandomDelay(1, 6),
                loss_prob: 0.2,
                seed: 7,
            },
            0.02,
            80,
        );
        let a = run_distributed(&graph, &partition, &cfg).unwrap();
        let b = run_distributed(&graph, &partition, &cfg).unwrap();
        assert!(a.rows.last().unwrap().cost.is_finite());
        for (p, q) in a.poses.iter().zip(&b.poses) {
            assert_eq!(p.to_homogeneous(), q.to_homogeneous());
        }
        assert_eq!(a.delivered, b.delivered);
        assert_eq!(a.dropped, b.dropped);
    }

    #[test]
    fn prediction_toggle_is_noop_at_zero_delay() {
        let (graph, partition) = world(6, 3);
        let mut cfg = cord_cfg(NetConfig::synchronous(), 0.05, 40);
        let with = run_distributed(&graph, &partition, &cfg).unwrap();
        cfg.predict = false;
        let without = run_distributed(&graph, &partition, &cfg).unwrap();
        for (p, q) in with.poses.iter().zip(&without.poses) {
            assert_eq!(p.to_homogeneous(), q.to_homogeneous());
        }
    }

    #[test]
    fn jacobi_zero_alpha_is_identity() {
        let (graph, partition) = world(7, 2);
        let mut cfg = cord_cfg(NetConfig::synchronous(), 0.2, 5);
        cfg.solver = DistSolver::Jacobi { alpha: 0.0 };
        let res = run_distributed(&graph, &partition, &cfg).unwrap();
        for (p, q) in res.poses.iter().zip(&graph.initial) {
            assert_eq!(p.to_homogeneous(), q.to_homogeneous());
        }
    }

    #[test]
    fn jacobi_single_robot_unit_alpha_is_one_lm_step() {
        let (graph, _) = world(8, 2);
        let partition = partition_contiguous(&graph, 1).unwrap();
        let mut cfg = cord_cfg(NetConfig::synchronous(), 1.0, 1);
        cfg.solver = DistSolver::Jacobi { alpha: 1.0 };
        let res = run_distributed(&graph, &partition, &cfg).unwrap();
        let x0 = &graph.initial;
        let g = gradient_block(cfg.metric, &graph, &partition, 0, x0, cfg.anchor).unwrap();
        // the baseline preconditions with the block's Hessian, whose
        // regularizer is floored for mass conditioning
        let h0 = hessian_block(cfg.metric, &graph, &partition, 0, x0, 0.0, cfg.anchor).unwrap();
        let lam = cfg
            .params
            .lambda
            .max(crate::dynamics::MASS_COND_FLOOR * h0.diagonal().sum() / h0.nrows() as f64);
        let h = hessian_block(cfg.metric, &graph, &partition, 0, x0, lam, cfg.anchor).unwrap();
        let direct = retract(x0, &(-(h.cholesky().unwrap().solve(&g))));
        for (p, q) in res.poses.iter().zip(&direct) {
            assert!((p.to_homogeneous() - q.to_homogeneous()).norm() <= 1e-12);
        }
    }

    #[test]
    fn edge_based_regime_updates_one_pair_per_round() {
        let (graph, partition) = world(9, 4);
        let pairs = neighbor_pairs(&partition);
        assert!(pairs.len() >= 2, "need several neighbor pairs");
        let cfg = cord_cfg(
            NetConfig {
                regime: Regime::EdgeBased,
                loss_prob: 0.0,
                seed: 0,
            },
            0.05,
            pairs.len() * 3,
        );
        let res = run_distributed(&graph, &partition, &cfg).unwrap();
        // exactly two packets per round, round-robin over pairs
        assert_eq!(res.delivered, 2 * cfg.max_iter);
        // the run still descends
        assert!(res.rows.last().unwrap().cost < res.rows.first().unwrap().cost);
    }

    #[test]
    fn round_log_schema_and_descent_under_sync() {
        let (graph, partition) = world(10, 2);
        let cfg = cord_cfg(NetConfig::synchronous(), 0.05, 50);
        let res = run_distributed(&graph, &partition, &cfg).unwrap();
        assert_eq!(res.rows.len(), 50);
        assert!(res.rows[49].cost < res.rows[0].cost);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rounds.csv");
        write_rounds_csv(&path, &res.rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let header = text.lines().next().unwrap();
        assert_eq!(
            header,
            "round,cost,grad_inf_0,grad_inf_1,delivered,dropped,mean_staleness"
        );
        assert_eq!(text.lines().count(), 51);
    }

    #[test]
    fn sync_gradients_match_full_gradient_at_round_zero() {
        let (graph, partition) = world(11, 3);
        let cfg = cord_cfg(NetConfig::synchronous(), 0.2, 1);
        let res = run_distributed(&graph, &partition, &cfg).unwrap();
        let g = full_gradient(cfg.metric, &graph, &partition, &graph.initial, cfg.anchor).unwrap();
        let reported = res.rows[0].grad_inf.iter().fold(0.0f64, |w, &x| w.max(x));
        assert!((reported - g.amax()).abs() <= 1e-12);
    }

    #[test]
    fn wire_bytes_accounting() {
        let p = Packet {
            sender: 0,
            k_state: 0,
            tau: 0.0,
            entries: vec![(1, Pose::identity(), Vector6::zeros()); 10],
        };
        // 8-byte header + 10 * (4 + 52)
        assert_eq!(p.wire_bytes(), 8 + 10 * 56);
    }

    #[test]
    fn bad_configs_rejected() {
        assert!(NetConfig {
            regime: Regime::RandomDelay(0, 5),
            loss_prob: 0.0,
            seed: 0
        }
        .validate()
        .is_err());
        assert!(NetConfig {
            regime: Regime::Synchronous,
            loss_prob: 1.0,
            seed: 0
        }
        .validate()
        .is_err());
    }

    #[test]
    fn delayed_run_with_prediction_survives_and_descends() {
        let (graph, partition) = world(12, 3);
        let cfg = DistConfig {
            metric: Metric::Chordal,
            params: DynParams {
                d: 5.0,
                m: 0.45,
                dt: 0.05,
                ..DynParams::default()
            },
            net: NetConfig {
                regime: Regime::ConstantDelay(7),
                loss_prob: 0.0,
                seed: 3,
            },
            solver: DistSolver::Cord,
            anchor: Anchor::Vertex(0),
            predict: true,
            max_iter: 400,
        };
        let res = run_distributed(&graph, &partition, &cfg).unwrap();
        let c0 = res.rows.first().unwrap().cost;
        let c1 = res.rows.last().unwrap().cost;
        assert!(c1.is_finite() && c1 < c0, "cost {c0} -> {c1}");
    }
}
