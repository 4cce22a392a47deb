//! Synchronous round loop for distributed subgradient methods.
//!
//! Every round `k` each node broadcasts, all messages are delivered, and only
//! then does any node update. In quantized mode a node sends the `b * d`-bit
//! codeword of `q_i(k)`; receivers rebuild the sender's interval from their own
//! copy of `q_j(k - 1)` and decode. The update is
//!
//! ```text
//! v_i    = x_i + (sum_j a_ij q_j - q_i) - alpha(k) g_i(x_i)
//! x_i'   = project(v_i)
//! R_i'   = q_i ± (gamma / 2) alpha(k)
//! q_i'   = Q(x_i' over R_i')
//! ```
//!
//! In unquantized mode the exact `x_j` are mixed instead. A [`Monitor`] checks
//! interval containment, the quantization error bound, the consensus bound
//! recursion, the averaging identity of the compensated update, and decode
//! symmetry after every round.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, dist, norm};
use crate::problems::{total_value, BoxSet, Objective};
use crate::quantizer::{
    adaptive_interval, check_bandwidth, compute_gamma, decode_centered, dequantize, interval_half_width, quantize,
    BitString, CodeWord, Message, MessageLogWriter, QuantGrid, MAX_BITS,
};
use crate::rng::{stream_rng, Stream};
use crate::topology::{Graph, MixingMatrix};

/// Spectra this close to one are treated as reducible or periodic.
pub const SPECTRAL_MARGIN: f64 = 1e-9;
/// Absolute slack on the quantization error bound.
pub const DELTA_BOUND_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    /// Adaptively quantized messages with error compensation.
    Qdsg,
    /// Exact messages.
    Dsg,
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Algorithm::Qdsg => "qdsg",
            Algorithm::Dsg => "dsg",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepSchedule {
    /// `1 / sqrt(k + 1)`
    InvSqrt,
    /// `scale / (k + 1)`
    InvLinear { scale: f64 },
}

impl StepSchedule {
    pub fn alpha(&self, k: usize) -> f64 {
        match *self {
            StepSchedule::InvSqrt => 1.0 / ((k + 1) as f64).sqrt(),
            StepSchedule::InvLinear { scale } => scale / (k + 1) as f64,
        }
    }

    /// Averaging rule that pairs with this schedule in the rate guarantees.
    pub fn default_averaging(&self) -> Averaging {
        match self {
            StepSchedule::InvSqrt => Averaging::Weighted,
            StepSchedule::InvLinear { .. } => Averaging::Plain,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// `sum alpha(t) x(t) / sum alpha(t)`
    Weighted,
    /// `sum x(t) / (k + 1)`
    Plain,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    pub algorithm: Algorithm,
    pub schedule: StepSchedule,
    pub averaging: Averaging,
    pub bits: u32,
    /// Seeds the shared initial grid point.
    pub seed: u64,
    /// Replaces the computed interval scale `gamma` when set.
    pub gamma_override: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeState {
    x: Vec<f64>,
    q: Vec<f64>,
    grid: QuantGrid,
    payload: BitString,
    z_num: Vec<f64>,
    z_den: f64,
    out_of_range_count: u64,
    /// Last value decoded from each neighbor, aligned with the adjacency list.
    peer_q: Vec<Vec<f64>>,
}

impl NodeState {
    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn q(&self) -> &[f64] {
        &self.q
    }

    /// Interval the current `q` was quantized over.
    pub fn grid(&self) -> &QuantGrid {
        &self.grid
    }

    /// Codeword this node broadcasts in the current round.
    pub fn payload(&self) -> &BitString {
        &self.payload
    }

    /// Quantization error `x - q`.
    pub fn delta(&self) -> Vec<f64> {
        self.x.iter().zip(&self.q).map(|(x, q)| x - q).collect()
    }

    pub fn output_average(&self) -> Vec<f64> {
        self.z_num.iter().map(|v| v / self.z_den).collect()
    }

    pub fn out_of_range_count(&self) -> u64 {
        self.out_of_range_count
    }
}

/// Cumulative invariant counters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Monitor {
    /// Node-rounds where `x_i(k+1)` fell outside `R_i(k+1)` before clamping.
    pub containment_violations: u64,
    /// Node-rounds where `||x_i - q_i||` exceeded `sqrt(d) gamma alpha / (2^b - 1)`.
    pub delta_violations: u64,
    /// Rounds where the consensus error exceeded the recursive bound.
    pub consensus_violations: u64,
    /// Decoded neighbor values that differ from the sender's own value.
    pub decode_mismatches: u64,
    pub max_compensation_error: f64,
    /// First round with `sigma2^k > alpha(k)`, if any.
    pub spectral_precondition_failure: Option<usize>,
    /// Current value of `S(k)`.
    pub consensus_bound: f64,
    delta_frobenius: f64,
}

/// What one call to [`Engine::step`] observed.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    /// Round just executed; the state is now at time `round + 1`.
    pub round: usize,
    pub alpha: f64,
    pub compensation_error: f64,
    pub containment_violations: usize,
    pub delta_max: f64,
    pub delta_bound: f64,
    pub delta_violations: usize,
    pub consensus_error: f64,
    pub consensus_bound: f64,
    pub consensus_violated: bool,
}

/// Next x, next q, interval, payload, and whether x left the interval.
type NodeUpdate = (Vec<f64>, Vec<f64>, QuantGrid, BitString, bool);

pub struct Engine {
    graph: Graph,
    mixing: MixingMatrix,
    objectives: Vec<Objective>,
    bx: BoxSet,
    config: EngineConfig,
    gamma: f64,
    lipschitz: f64,
    assumption2: bool,
    initial_grid: QuantGrid,
    nodes: Vec<NodeState>,
    round: usize,
    monitor: Monitor,
    bits_transmitted: u64,
    update_order: Vec<usize>,
    message_log: Option<MessageLogWriter<Box<dyn Write + Send>>>,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("config", &self.config)
            .field("round", &self.round)
            .field("gamma", &self.gamma)
            .field("monitor", &self.monitor)
            .finish_non_exhaustive()
    }
}

impl Engine {
    /// Checks the inputs against each other and puts every node on the same
    /// randomly chosen point of the initial grid over the box.
    pub fn new(
        graph: Graph,
        mixing: MixingMatrix,
        objectives: Vec<Objective>,
        bx: BoxSet,
        config: EngineConfig,
    ) -> Result<Self> {
        let n = graph.node_count();
        let d = bx.dim();
        if mixing.size() != n {
            return Err(Error::ConfigMismatch(format!(
                "mixing matrix is {}x{} but the graph has {n} nodes",
                mixing.size(),
                mixing.size()
            )));
        }
        if objectives.len() != n {
            return Err(Error::ConfigMismatch(format!(
                "{} objectives for {n} nodes",
                objectives.len()
            )));
        }
        if let Some(o) = objectives.iter().find(|o| o.dim() != d) {
            return Err(Error::ConfigMismatch(format!(
                "objective of dimension {} in a {d}-dimensional box",
                o.dim()
            )));
        }
        for i in 0..n {
            for j in 0..n {
                let adjacent = graph.neighbors(i).binary_search(&j).is_ok();
                if i != j && !adjacent && mixing.weight(i, j) != 0.0 {
                    return Err(Error::ConfigMismatch(format!("weight ({i}, {j}) is nonzero off the graph")));
                }
            }
        }
        if n > 1 && mixing.sigma2() >= 1.0 - SPECTRAL_MARGIN {
            return Err(Error::DegenerateSpectrum {
                sigma2: mixing.sigma2(),
            });
        }
        if !(1..=MAX_BITS).contains(&config.bits) {
            return Err(Error::validation("bits", format!("must be in 1..={MAX_BITS}")));
        }
        if let StepSchedule::InvLinear { scale } = config.schedule {
            if !(scale > 0.0 && scale.is_finite()) {
                return Err(Error::validation("scale", format!("must be positive, got {scale}")));
            }
        }

        let lipschitz: f64 = objectives.iter().map(Objective::lipschitz).sum();
        let gamma = match config.gamma_override {
            None => compute_gamma(lipschitz, mixing.sigma2())?,
            Some(g) if g > 0.0 && g.is_finite() => g,
            Some(g) => return Err(Error::validation("gamma", format!("must be positive and finite, got {g}"))),
        };
        let assumption2 = check_bandwidth(n, d, gamma, config.bits);
        let initial_grid = QuantGrid::new(bx.lower().to_vec(), bx.upper().to_vec(), config.bits)?;

        let mut rng = stream_rng(config.seed, Stream::Initialization);
        let start_index: Vec<u64> = (0..d)
            .map(|_| rng.gen_range(0..=initial_grid.max_index()))
            .collect();
        let start_cw = CodeWord::new(start_index, config.bits)?;
        let start = dequantize(&start_cw, &initial_grid)?;
        let payload = match config.algorithm {
            Algorithm::Qdsg => start_cw.pack(),
            Algorithm::Dsg => BitString::default(),
        };
        let (z_num, z_den) = match config.averaging {
            Averaging::Weighted => {
                let a0 = config.schedule.alpha(0);
                (start.iter().map(|v| a0 * v).collect::<Vec<_>>(), a0)
            }
            Averaging::Plain => (start.clone(), 1.0),
        };
        let nodes = (0..n)
            .map(|i| NodeState {
                x: start.clone(),
                q: start.clone(),
                grid: initial_grid.clone(),
                payload: payload.clone(),
                z_num: z_num.clone(),
                z_den,
                out_of_range_count: 0,
                peer_q: vec![start.clone(); graph.degree(i)],
            })
            .collect();

        Ok(Self {
            graph,
            mixing,
            objectives,
            bx,
            config,
            gamma,
            lipschitz,
            assumption2,
            initial_grid,
            nodes,
            round: 0,
            monitor: Monitor::default(),
            bits_transmitted: 0,
            update_order: (0..n).collect(),
            message_log: None,
        })
    }

    /// Records every broadcast codeword from now on.
    pub fn set_message_log(&mut self, out: Box<dyn Write + Send>) {
        self.message_log = Some(MessageLogWriter::new(out));
    }

    pub fn finish_message_log(&mut self) -> Result<()> {
        if let Some(log) = self.message_log.take() {
            log.into_inner()?;
        }
        Ok(())
    }

    /// Order in which nodes compute their updates within a round. Results do
    /// not depend on it.
    pub fn set_update_order(&mut self, order: Vec<usize>) -> Result<()> {
        let mut sorted = order.clone();
        sorted.sort_unstable();
        if sorted != (0..self.nodes.len()).collect::<Vec<_>>() {
            return Err(Error::ConfigMismatch("update order must be a permutation of the nodes".into()));
        }
        self.update_order = order;
        Ok(())
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn mixing(&self) -> &MixingMatrix {
        &self.mixing
    }

    pub fn objectives(&self) -> &[Objective] {
        &self.objectives
    }

    pub fn box_set(&self) -> &BoxSet {
        &self.bx
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn dim(&self) -> usize {
        self.bx.dim()
    }

    /// Current time `k`, i.e. rounds executed so far.
    pub fn round(&self) -> usize {
        self.round
    }

    pub fn nodes(&self) -> &[NodeState] {
        &self.nodes
    }

    pub fn node(&self, i: usize) -> &NodeState {
        &self.nodes[i]
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// `L = sum_i L_i`
    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub fn sigma2(&self) -> f64 {
        self.mixing.sigma2()
    }

    pub fn assumption2_satisfied(&self) -> bool {
        self.assumption2
    }

    pub fn initial_grid(&self) -> &QuantGrid {
        &self.initial_grid
    }

    pub fn monitor(&self) -> &Monitor {
        &self.monitor
    }

    pub fn bits_transmitted(&self) -> u64 {
        self.bits_transmitted
    }

    pub fn alpha(&self, k: usize) -> f64 {
        self.config.schedule.alpha(k)
    }

    /// `sqrt(d) gamma alpha(k) / (2^b - 1)`
    pub fn delta_bound(&self, k: usize) -> f64 {
        let levels = ((1u64 << self.config.bits) - 1) as f64;
        (self.dim() as f64).sqrt() * self.gamma * self.alpha(k) / levels
    }

    pub fn output_average(&self, node: usize) -> Vec<f64> {
        self.nodes[node].output_average()
    }

    /// Network average, accumulated as offsets from node 0 so identical
    /// iterates average to themselves exactly.
    pub fn mean_iterate(&self) -> Vec<f64> {
        let base = &self.nodes[0].x;
        let mut offset = vec![0.0; self.dim()];
        for node in &self.nodes[1..] {
            for ((o, x), b) in offset.iter_mut().zip(&node.x).zip(base) {
                *o += x - b;
            }
        }
        let n = self.nodes.len() as f64;
        base.iter().zip(&offset).map(|(b, o)| b + o / n).collect()
    }

    /// Frobenius norm of `X - 1 xbar^T`.
    pub fn consensus_error(&self) -> f64 {
        let mean = self.mean_iterate();
        self.nodes
            .iter()
            .map(|node| dist(&node.x, &mean).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// `max_i ||x_i - xbar||`
    pub fn max_deviation(&self) -> f64 {
        let mean = self.mean_iterate();
        self.nodes.iter().map(|node| dist(&node.x, &mean)).fold(0.0, f64::max)
    }

    pub fn max_delta(&self) -> f64 {
        self.nodes.iter().map(|n| norm(&n.delta())).fold(0.0, f64::max)
    }

    /// `f(z_i)` for every node.
    pub fn output_values(&self) -> Vec<f64> {
        self.nodes
            .iter()
            .map(|node| total_value(&self.objectives, &node.output_average()))
            .collect()
    }

    /// Runs round `k = self.round()` of the configured algorithm.
    pub fn step(&mut self) -> Result<RoundReport> {
        let k = self.round;
        if k == 0 {
            self.note_spectral_precondition(0);
        }
        let report = match self.config.algorithm {
            Algorithm::Qdsg => self.qdsg_round(k)?,
            Algorithm::Dsg => self.dsg_round(k),
        };
        self.round += 1;
        self.note_spectral_precondition(self.round);
        Ok(report)
    }

    fn note_spectral_precondition(&mut self, k: usize) {
        if self.monitor.spectral_precondition_failure.is_none()
            && self.sigma2().powf(k as f64) > self.alpha(k)
        {
            self.monitor.spectral_precondition_failure = Some(k);
        }
    }

    fn mix_order(&self, i: usize) -> impl Iterator<Item = (Option<usize>, usize)> + '_ {
        // (slot in adjacency list, node id), ascending by node id with i merged in.
        let neighbors = self.graph.neighbors(i);
        let split = neighbors.partition_point(|&j| j < i);
        neighbors[..split]
            .iter()
            .enumerate()
            .map(|(s, &j)| (Some(s), j))
            .chain(std::iter::once((None, i)))
            .chain(neighbors[split..].iter().enumerate().map(move |(s, &j)| (Some(split + s), j)))
    }

    fn qdsg_round(&mut self, k: usize) -> Result<RoundReport> {
        let n = self.nodes.len();
        let d = self.dim();
        let bits = self.config.bits;
        let alpha = self.alpha(k);

        if let Some(log) = self.message_log.as_mut() {
            for (j, node) in self.nodes.iter().enumerate() {
                log.write(&Message {
                    node: j as u32,
                    round: k as u32,
                    payload: node.payload.clone(),
                })?;
            }
        }
        self.bits_transmitted += (self.graph.directed_edge_count() * bits as usize * d) as u64;

        // Receive: each node decodes its neighbors' codewords over intervals it
        // rebuilds from its own record of their previous values.
        let half_prev = (k > 0).then(|| interval_half_width(self.gamma, self.alpha(k - 1)));
        let mut mixed = vec![vec![0.0; d]; n];
        let mut decoded = vec![0.0; d];
        let mut mismatches = 0;
        for &i in &self.update_order {
            let acc = &mut mixed[i];
            let mut own_added = false;
            for (s, &j) in self.graph.neighbors(i).iter().enumerate() {
                if !own_added && j > i {
                    axpy(self.mixing.weight(i, i), &self.nodes[i].q, acc);
                    own_added = true;
                }
                let payload = &self.nodes[j].payload;
                match half_prev {
                    None => {
                        let cw = CodeWord::unpack(payload, bits, d)?;
                        decoded = dequantize(&cw, &self.initial_grid)?;
                    }
                    Some(half) => decode_centered(payload, &self.nodes[i].peer_q[s], half, bits, &mut decoded)?,
                }
                if decoded != self.nodes[j].q {
                    mismatches += 1;
                }
                axpy(self.mixing.weight(i, j), &decoded, acc);
                self.nodes[i].peer_q[s].copy_from_slice(&decoded);
            }
            if !own_added {
                axpy(self.mixing.weight(i, i), &self.nodes[i].q, acc);
            }
        }
        self.monitor.decode_mismatches += mismatches;

        // Update: v_i = x_i + (mix_i - q_i) - alpha g_i.
        let mut pre_projection = vec![vec![0.0; d]; n];
        let mut grads = vec![vec![0.0; d]; n];
        for &i in &self.update_order {
            let node = &self.nodes[i];
            self.objectives[i].subgrad_into(&node.x, &mut grads[i]);
            let v = &mut pre_projection[i];
            for c in 0..d {
                v[c] = node.x[c] + (mixed[i][c] - node.q[c]) - alpha * grads[i][c];
            }
        }
        let compensation_error = self.compensation_error(&pre_projection, &grads, alpha);

        // Re-quantize over the shrunken interval centered at the old q.
        let mut containment = 0;
        let mut updated: Vec<Option<NodeUpdate>> = vec![None; n];
        for &i in &self.update_order {
            let x_next = self.bx.project(&pre_projection[i]);
            let grid = adaptive_interval(&self.nodes[i].q, self.gamma, alpha, bits);
            let outside = grid.outside_count(&x_next) > 0;
            let cw = quantize(&x_next, &grid);
            let q_next = dequantize(&cw, &grid)?;
            updated[i] = Some((x_next, q_next, grid, cw.pack(), outside));
        }
        let prev_delta = self.monitor.delta_frobenius;
        for (node, update) in self.nodes.iter_mut().zip(updated) {
            let (x, q, grid, payload, outside) = update.expect("every node updated");
            if outside {
                containment += 1;
                node.out_of_range_count += 1;
            }
            node.x = x;
            node.q = q;
            node.grid = grid;
            node.payload = payload;
        }
        self.monitor.containment_violations += containment as u64;
        self.accumulate_outputs(k + 1);
        Ok(self.finish_round(k, alpha, prev_delta, compensation_error, containment))
    }

    fn dsg_round(&mut self, k: usize) -> RoundReport {
        let n = self.nodes.len();
        let d = self.dim();
        let alpha = self.alpha(k);
        self.bits_transmitted += (self.graph.directed_edge_count() * 64 * d) as u64;

        let mut pre_projection = vec![vec![0.0; d]; n];
        let mut grads = vec![vec![0.0; d]; n];
        for &i in &self.update_order {
            let mut acc = vec![0.0; d];
            for (_, j) in self.mix_order(i) {
                axpy(self.mixing.weight(i, j), &self.nodes[j].x, &mut acc);
            }
            self.objectives[i].subgrad_into(&self.nodes[i].x, &mut grads[i]);
            axpy(-alpha, &grads[i], &mut acc);
            pre_projection[i] = acc;
        }
        let compensation_error = self.compensation_error(&pre_projection, &grads, alpha);
        for (node, v) in self.nodes.iter_mut().zip(&pre_projection) {
            node.x = self.bx.project(v);
            node.q.clone_from(&node.x);
        }
        self.accumulate_outputs(k + 1);
        self.finish_round(k, alpha, 0.0, compensation_error, 0)
    }

    /// Largest coordinate gap between `mean(v)` and `mean(x) - alpha/n sum g`.
    fn compensation_error(&self, pre_projection: &[Vec<f64>], grads: &[Vec<f64>], alpha: f64) -> f64 {
        let n = self.nodes.len() as f64;
        (0..self.dim())
            .map(|c| {
                let v_mean = pre_projection.iter().map(|v| v[c]).sum::<f64>() / n;
                let x_mean = self.nodes.iter().map(|node| node.x[c]).sum::<f64>() / n;
                let g_sum = grads.iter().map(|g| g[c]).sum::<f64>();
                (v_mean - (x_mean - alpha / n * g_sum)).abs()
            })
            .fold(0.0, f64::max)
    }

    fn accumulate_outputs(&mut self, t: usize) {
        let weight = match self.config.averaging {
            Averaging::Weighted => self.config.schedule.alpha(t),
            Averaging::Plain => 1.0,
        };
        for node in &mut self.nodes {
            axpy(weight, &node.x, &mut node.z_num);
            node.z_den += weight;
        }
    }

    /// Monitor checks on the state at time `k + 1`.
    fn finish_round(
        &mut self,
        k: usize,
        alpha: f64,
        prev_delta_frobenius: f64,
        compensation_error: f64,
        containment_violations: usize,
    ) -> RoundReport {
        let delta_norms: Vec<f64> = self.nodes.iter().map(|n| norm(&n.delta())).collect();
        let delta_max = delta_norms.iter().copied().fold(0.0, f64::max);
        let delta_bound = self.delta_bound(k + 1);
        let delta_violations = delta_norms
            .iter()
            .filter(|&&v| v > delta_bound + DELTA_BOUND_SLACK)
            .count();
        self.monitor.delta_violations += delta_violations as u64;
        self.monitor.delta_frobenius = delta_norms.iter().map(|v| v * v).sum::<f64>().sqrt();

        let bound = self.sigma2() * self.monitor.consensus_bound
            + 6.0 * prev_delta_frobenius
            + 3.0 * self.lipschitz * alpha;
        self.monitor.consensus_bound = bound;
        let consensus_error = self.consensus_error();
        let consensus_violated = consensus_error > bound * (1.0 + 1e-12) + 1e-12;
        if consensus_violated {
            self.monitor.consensus_violations += 1;
        }
        self.monitor.max_compensation_error = self.monitor.max_compensation_error.max(compensation_error);

        RoundReport {
            round: k,
            alpha,
            compensation_error,
            containment_violations,
            delta_max,
            delta_bound,
            delta_violations,
            consensus_error,
            consensus_bound: bound,
            consensus_violated,
        }
    }
}

/// When a run may end before its round budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StopRule {
    #[default]
    None,
    /// Stop once every node's relative gap is at most `tau`.
    RelativeGap { tau: f64 },
}

/// `(f - f*) / |f*|`, or the absolute gap when `|f*| < 1e-12`.
pub fn relative_gap(f: f64, f_star: f64) -> f64 {
    if f_star.abs() < 1e-12 {
        f - f_star
    } else {
        (f - f_star) / f_star.abs()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub rounds: usize,
    pub log_every: usize,
    pub f_star: f64,
    pub x_star: Option<Vec<f64>>,
    pub track_node: usize,
    pub stop: StopRule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub round: usize,
    pub alpha: f64,
    /// `f(z_track) - f*`
    pub gap: f64,
    /// `max_i f(z_i) - f*`
    pub worst_gap: f64,
    /// `||z_track - x*||^2`, NaN without a reference point.
    pub z_dist_sq: f64,
    pub max_deviation: f64,
    pub consensus_error: f64,
    pub consensus_bound: f64,
    pub delta_max: f64,
    pub delta_bound: f64,
    pub compensation_error: f64,
    pub containment_violations: u64,
    pub delta_violations: u64,
    pub consensus_violations: u64,
    pub bits_transmitted: u64,
}

impl MetricRow {
    pub const HEADER: [&'static str; 15] = [
        "round",
        "alpha",
        "gap",
        "worst_gap",
        "z_dist_sq",
        "max_deviation",
        "consensus_error",
        "consensus_bound",
        "delta_max",
        "delta_bound",
        "compensation_error",
        "containment_violations",
        "delta_violations",
        "consensus_violations",
        "bits_transmitted",
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub algorithm: Algorithm,
    pub rows: Vec<MetricRow>,
    pub rounds_executed: usize,
    pub gamma: f64,
    pub sigma2: f64,
    pub lipschitz: f64,
    pub bits: u32,
    pub f_star: f64,
    pub assumption2_satisfied: bool,
    /// Round at which every node first met the stop rule's target.
    pub iterations_to_target: Option<usize>,
    pub monitor: Monitor,
}

impl RunRecord {
    pub fn final_row(&self) -> &MetricRow {
        self.rows.last().expect("a run always logs round 0")
    }
}

fn snapshot(engine: &Engine, opts: &RunOptions, report: Option<&RoundReport>, values: &[f64]) -> MetricRow {
    let k = engine.round();
    let z = engine.output_average(opts.track_node);
    let z_dist_sq = opts.x_star.as_ref().map_or(f64::NAN, |xs| dist(&z, xs).powi(2));
    let monitor = engine.monitor();
    MetricRow {
        round: k,
        alpha: engine.alpha(k),
        gap: values[opts.track_node] - opts.f_star,
        worst_gap: values.iter().copied().fold(f64::NEG_INFINITY, f64::max) - opts.f_star,
        z_dist_sq,
        max_deviation: engine.max_deviation(),
        consensus_error: engine.consensus_error(),
        consensus_bound: monitor.consensus_bound,
        delta_max: report.map_or_else(|| engine.max_delta(), |r| r.delta_max),
        delta_bound: engine.delta_bound(k),
        compensation_error: report.map_or(0.0, |r| r.compensation_error),
        containment_violations: monitor.containment_violations,
        delta_violations: monitor.delta_violations,
        consensus_violations: monitor.consensus_violations,
        bits_transmitted: engine.bits_transmitted(),
    }
}

/// Drives `engine` for `opts.rounds` rounds (or until the stop rule fires),
/// logging at round 0, every `log_every` rounds, and at the last round.
pub fn run(engine: &mut Engine, opts: &RunOptions) -> Result<RunRecord> {
    if opts.log_every == 0 {
        return Err(Error::validation("log_every", "must be at least 1"));
    }
    if opts.track_node >= engine.node_count() {
        return Err(Error::validation("track_node", "must name an existing node"));
    }
    let target = match opts.stop {
        StopRule::None => None,
        StopRule::RelativeGap { tau } if tau > 0.0 => Some(tau),
        StopRule::RelativeGap { tau } => {
            return Err(Error::validation("stop", format!("tau must be positive, got {tau}")));
        }
    };
    let reached = |values: &[f64]| {
        target.is_some_and(|tau| {
            let worst = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            relative_gap(worst, opts.f_star) <= tau
        })
    };

    let mut rows = Vec::new();
    let mut iterations_to_target = None;
    let values = engine.output_values();
    rows.push(snapshot(engine, opts, None, &values));
    if reached(&values) {
        iterations_to_target = Some(0);
    }
    while iterations_to_target.is_none() && engine.round() < opts.rounds {
        let report = engine.step()?;
        let k = engine.round();
        let logged = k.is_multiple_of(opts.log_every) || k == opts.rounds;
        if logged || target.is_some() {
            let values = engine.output_values();
            let hit = reached(&values);
            if hit {
                iterations_to_target = Some(k);
            }
            if logged || hit {
                rows.push(snapshot(engine, opts, Some(&report), &values));
            }
        }
    }
    engine.finish_message_log()?;

    Ok(RunRecord {
        algorithm: engine.config().algorithm,
        rows,
        rounds_executed: engine.round(),
        gamma: engine.gamma(),
        sigma2: engine.sigma2(),
        lipschitz: engine.lipschitz(),
        bits: engine.config().bits,
        f_star: opts.f_star,
        assumption2_satisfied: engine.assumption2_satisfied(),
        iterations_to_target,
        monitor: engine.monitor().clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{build_objectives, generate_dataset, LossKind};
    use crate::topology::lazy_metropolis;

    fn engine(graph: Graph, kind: LossKind, algorithm: Algorithm, bits: u32) -> Engine {
        let n = graph.node_count();
        let bx = BoxSet::symmetric(2, 1.0).unwrap();
        let objs = build_objectives(&generate_dataset(n, 2, 3), kind, 0.0, &bx).unwrap();
        let mixing = lazy_metropolis(&graph).unwrap();
        let config = EngineConfig {
            algorithm,
            schedule: StepSchedule::InvSqrt,
            averaging: Averaging::Weighted,
            bits,
            seed: 5,
            gamma_override: None,
        };
        Engine::new(graph, mixing, objs, bx, config).unwrap()
    }

    #[test]
    fn schedules() {
        assert_eq!(StepSchedule::InvSqrt.alpha(0), 1.0);
        assert_eq!(StepSchedule::InvSqrt.alpha(3), 0.5);
        let lin = StepSchedule::InvLinear { scale: 10.0 };
        assert_eq!(lin.alpha(0), 10.0);
        assert_eq!(lin.alpha(4), 2.0);
        for k in 0..1000 {
            assert!(StepSchedule::InvSqrt.alpha(k + 1) <= StepSchedule::InvSqrt.alpha(k));
            assert!(lin.alpha(k + 1) <= lin.alpha(k));
        }
    }

    #[test]
    fn init_starts_in_consensus_on_a_grid_point() {
        let e = engine(Graph::complete(4).unwrap(), LossKind::Absolute, Algorithm::Qdsg, 6);
        let x0 = e.node(0).x().to_vec();
        for node in e.nodes() {
            assert_eq!(node.x(), node.q());
            assert_eq!(node.x(), x0.as_slice());
            assert!(node.delta().iter().all(|&v| v == 0.0));
            assert_eq!(node.output_average(), x0);
        }
        assert_eq!(e.consensus_error(), 0.0);
        let cw = quantize(&x0, e.initial_grid());
        assert_eq!(dequantize(&cw, e.initial_grid()).unwrap(), x0);
        assert_eq!(e.gamma(), compute_gamma(e.lipschitz(), e.sigma2()).unwrap());
    }

    #[test]
    fn init_rejects_mismatched_inputs() {
        let g = Graph::complete(3).unwrap();
        let bx = BoxSet::symmetric(2, 1.0).unwrap();
        let objs = build_objectives(&generate_dataset(2, 2, 0), LossKind::Absolute, 0.0, &bx).unwrap();
        let mixing = lazy_metropolis(&g).unwrap();
        let config = EngineConfig {
            algorithm: Algorithm::Qdsg,
            schedule: StepSchedule::InvSqrt,
            averaging: Averaging::Weighted,
            bits: 8,
            seed: 0,
            gamma_override: None,
        };
        let err = Engine::new(g.clone(), mixing.clone(), objs, bx.clone(), config.clone()).unwrap_err();
        assert!(matches!(err, Error::ConfigMismatch(_)));

        let objs = build_objectives(&generate_dataset(3, 2, 0), LossKind::Absolute, 0.0, &bx).unwrap();
        let identity = MixingMatrix::from_weights(nalgebra::DMatrix::identity(3, 3)).unwrap();
        let err = Engine::new(g, identity, objs, bx, config).unwrap_err();
        assert!(matches!(err, Error::DegenerateSpectrum { .. }));
    }

    fn config(algorithm: Algorithm, bits: u32) -> EngineConfig {
        EngineConfig {
            algorithm,
            schedule: StepSchedule::InvSqrt,
            averaging: Averaging::Weighted,
            bits,
            seed: 0,
            gamma_override: None,
        }
    }

    #[test]
    fn iterates_are_fixed_when_gradients_vanish() {
        let g = Graph::complete(3).unwrap();
        let bx = BoxSet::symmetric(2, 1.0).unwrap();
        let flat: Vec<_> = (0..3)
            .map(|_| Objective::new(LossKind::Quadratic, vec![0.0, 0.0], 0.0, 0.0, &bx).unwrap())
            .collect();
        let mut e = Engine::new(g.clone(), lazy_metropolis(&g).unwrap(), flat, bx, config(Algorithm::Qdsg, 3)).unwrap();
        let x0 = e.node(0).x().to_vec();
        for _ in 0..50 {
            e.step().unwrap();
            for node in e.nodes() {
                assert_eq!(node.x(), x0.as_slice());
            }
            assert_eq!(e.consensus_error(), 0.0);
        }
        assert_eq!(e.monitor().containment_violations, 0);
    }

    #[test]
    fn single_node_matches_centralized_subgradient() {
        let g = Graph::complete(1).unwrap();
        let bx = BoxSet::symmetric(3, 1.0).unwrap();
        let obj = build_objectives(&generate_dataset(1, 3, 9), LossKind::Absolute, 0.0, &bx).unwrap();
        let mut e = Engine::new(
            g.clone(),
            lazy_metropolis(&g).unwrap(),
            obj.clone(),
            bx.clone(),
            config(Algorithm::Qdsg, 10),
        )
        .unwrap();
        let mut x = e.node(0).x().to_vec();
        for k in 0..500 {
            let alpha = StepSchedule::InvSqrt.alpha(k);
            let g = obj[0].subgrad(&x);
            let v: Vec<f64> = x.iter().zip(&g).map(|(x, g)| x - alpha * g).collect();
            x = bx.project(&v);
            e.step().unwrap();
            assert_eq!(e.node(0).x(), x.as_slice());
        }
    }

    /// Nearest point of the `2^b` grid over `[lo, hi]` by exhaustive search.
    fn brute_quantize(x: f64, lo: f64, hi: f64, bits: u32) -> f64 {
        let top = (1u64 << bits) - 1;
        let step = (hi - lo) / top as f64;
        let clamped = x.clamp(lo, hi);
        let mut best = (f64::INFINITY, 0.0);
        for m in 0..=top {
            let p = if m == top { hi } else { (lo + m as f64 * step).min(hi) };
            let err = (p - clamped).abs();
            if err < best.0 {
                best = (err, p);
            }
        }
        best.1
    }

    fn hand_instance(algorithm: Algorithm, bits: u32) -> Engine {
        let g = Graph::complete(2).unwrap();
        let bx = BoxSet::symmetric(1, 1.0).unwrap();
        let objs = vec![
            Objective::new(LossKind::Quadratic, vec![0.8], 0.6, 0.0, &bx).unwrap(),
            Objective::new(LossKind::Quadratic, vec![-0.5], 0.2, 0.0, &bx).unwrap(),
        ];
        Engine::new(g.clone(), lazy_metropolis(&g).unwrap(), objs, bx, config(algorithm, bits)).unwrap()
    }

    #[test]
    fn two_nodes_follow_hand_rolled_recursion() {
        let bits = 16;
        let mut e = hand_instance(Algorithm::Qdsg, bits);
        // Lazy Metropolis on K2 is the all-halves matrix, so sigma2 = 0.
        assert_eq!(e.mixing().weight(0, 1), 0.5);
        assert_eq!(e.sigma2(), 0.0);
        let gamma = e.gamma();
        assert_eq!(gamma, 48.0 * (2.0 + e.lipschitz()));

        let (a, b) = ([0.8, -0.5], [0.6, 0.2]);
        let mut x = [e.node(0).x()[0], e.node(1).x()[0]];
        let mut q = x;
        for k in 0..40 {
            let alpha = 1.0 / ((k + 1) as f64).sqrt();
            let mut next = [0.0; 2];
            for i in 0..2 {
                let grad = 2.0 * a[i] * (a[i] * x[i] - b[i]);
                let mix = 0.5 * q[i] + 0.5 * q[1 - i];
                next[i] = (x[i] + (mix - q[i]) - alpha * grad).clamp(-1.0, 1.0);
            }
            let half = 0.5 * gamma * alpha;
            for i in 0..2 {
                q[i] = brute_quantize(next[i], q[i] - half, q[i] + half, bits);
            }
            x = next;
            e.step().unwrap();
            for i in 0..2 {
                assert!((e.node(i).x()[0] - x[i]).abs() <= 1e-12, "round {k} node {i}");
                assert!((e.node(i).q()[0] - q[i]).abs() <= 1e-12, "round {k} node {i}");
            }
        }
    }

    #[test]
    fn fine_quantization_tracks_exact_messages() {
        let mut fine = hand_instance(Algorithm::Qdsg, 52);
        let mut exact = hand_instance(Algorithm::Dsg, 52);
        for _ in 0..100 {
            fine.step().unwrap();
            exact.step().unwrap();
        }
        for (a, b) in fine.nodes().iter().zip(exact.nodes()) {
            assert!(dist(a.x(), b.x()) <= 1e-6);
        }
    }

    #[test]
    fn decoding_matches_senders_and_compensation_holds() {
        let g = crate::topology::generate_geometric_graph(12, 0.5, 1).unwrap();
        let mut e = engine(g, LossKind::Quadratic, Algorithm::Qdsg, 5);
        for _ in 0..300 {
            let r = e.step().unwrap();
            assert!(r.compensation_error <= 1e-10);
            assert!(!r.consensus_violated);
        }
        assert_eq!(e.monitor().decode_mismatches, 0);
        for node in e.nodes() {
            assert!(e.box_set().contains(node.x()));
            let cw = quantize(node.q(), node.grid());
            assert_eq!(dequantize(&cw, node.grid()).unwrap(), node.q());
        }
    }

    #[test]
    fn update_order_does_not_matter() {
        let g = crate::topology::generate_geometric_graph(10, 0.6, 2).unwrap();
        let mut a = engine(g.clone(), LossKind::Absolute, Algorithm::Qdsg, 4);
        let mut b = engine(g, LossKind::Absolute, Algorithm::Qdsg, 4);
        b.set_update_order((0..10).rev().collect()).unwrap();
        for _ in 0..200 {
            let ra = a.step().unwrap();
            let rb = b.step().unwrap();
            assert_eq!(ra, rb);
        }
        assert_eq!(a.nodes(), b.nodes());
        assert!(b.set_update_order(vec![0, 0, 1, 2, 3, 4, 5, 6, 7, 8]).is_err());
    }

    #[test]
    fn bits_accounting() {
        let g = Graph::path(4).unwrap();
        let directed = g.directed_edge_count() as u64;
        let mut e = engine(g, LossKind::Absolute, Algorithm::Qdsg, 7);
        for _ in 0..9 {
            e.step().unwrap();
        }
        assert_eq!(e.bits_transmitted(), 9 * directed * 7 * 2);
    }

    #[test]
    fn output_average_modes() {
        // Weighted with alpha = (1, 1/sqrt 2) and x = (0, 3): 3 (1/sqrt 2) / (1 + 1/sqrt 2).
        let a1 = StepSchedule::InvSqrt.alpha(1);
        let z = (0.0 * 1.0 + 3.0 * a1) / (1.0 + a1);
        assert!((z - 1.242_640_687).abs() < 1e-9);

        let g = Graph::complete(1).unwrap();
        let mut e = engine(g, LossKind::Quadratic, Algorithm::Dsg, 8);
        let x0 = e.node(0).x().to_vec();
        assert_eq!(e.output_average(0), x0);
        e.step().unwrap();
        let x1 = e.node(0).x().to_vec();
        let want: Vec<f64> = x0.iter().zip(&x1).map(|(p, q)| (p + a1 * q) / (1.0 + a1)).collect();
        for (got, want) in e.output_average(0).iter().zip(&want) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn run_logging_contract() {
        let g = Graph::complete(3).unwrap();
        for (rounds, every) in [(10, 3), (9, 3), (5, 1), (7, 10)] {
            let mut e = engine(g.clone(), LossKind::Absolute, Algorithm::Qdsg, 6);
            let rec = run(
                &mut e,
                &RunOptions {
                    rounds,
                    log_every: every,
                    f_star: 0.0,
                    x_star: None,
                    track_node: 0,
                    stop: StopRule::None,
                },
            )
            .unwrap();
            assert_eq!(rec.rows.len(), rounds.div_ceil(every) + 1);
            assert_eq!(rec.rows.last().unwrap().round, rounds);
            assert_eq!(rec.rounds_executed, rounds);
        }
    }

    #[test]
    fn relative_gap_guard() {
        assert_eq!(relative_gap(1.5, 1.0), 0.5);
        assert_eq!(relative_gap(1.5, -2.0), 1.75);
        assert_eq!(relative_gap(0.25, 0.0), 0.25);
    }
}
