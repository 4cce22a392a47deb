//! Experiment configuration, orchestration, and persistence.
//!
//! A run builds the graph, dataset, and mixing matrix from the config seed,
//! solves (or loads a cached) centralized reference, drives the engine, and
//! writes a metrics CSV plus a metadata JSON file next to it.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::engine::{run, Algorithm, Averaging, Engine, EngineConfig, MetricRow, Monitor, RunOptions, RunRecord, StepSchedule, StopRule};
use crate::error::{Error, Result};
use crate::problems::{build_objectives, generate_dataset, solve_reference, BoxSet, LossKind, Objective, ReferenceSolution, Sample};
use crate::quantizer::{bits_for_bandwidth, MAX_BITS};
use crate::topology::{generate_geometric_graph, lazy_metropolis, Graph, MixingMatrix};

/// Relative-gap target used by bit sweeps when the config sets none.
pub const DEFAULT_SWEEP_TAU: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    InvSqrt,
    InvLinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub n: usize,
    pub d: usize,
    /// Connection radius of the geometric graph in the unit square.
    pub radius: f64,
    pub seed: u64,
    pub loss: LossKind,
    /// Weight of the `lambda ||x||^2` term in every local objective.
    pub lambda: f64,
    pub algorithm: Algorithm,
    pub bits: u32,
    pub schedule: ScheduleKind,
    /// `a` in `alpha(k) = a / (k + 1)`; ignored by `inv_sqrt`.
    pub scale: f64,
    /// Output averaging; when unset, weighted for `inv_sqrt` and plain for
    /// `inv_linear`.
    pub averaging: Option<Averaging>,
    pub rounds: usize,
    pub log_every: usize,
    pub stop: StopRule,
    pub output_dir: PathBuf,
    /// File stem for this run's outputs; derived from the config when unset.
    pub run_name: Option<String>,
    /// The constraint set is `[-box_radius, box_radius]^d`.
    pub box_radius: f64,
    pub reference_tol: f64,
    /// Node whose output average is reported as `gap`.
    pub track_node: usize,
    /// Replaces the computed interval scale when set.
    pub gamma: Option<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            n: 100,
            d: 10,
            radius: 0.4,
            seed: 0,
            loss: LossKind::Quadratic,
            lambda: 0.0,
            algorithm: Algorithm::Qdsg,
            bits: 8,
            schedule: ScheduleKind::InvSqrt,
            scale: 1.0,
            averaging: None,
            rounds: 5000,
            log_every: 1,
            stop: StopRule::None,
            output_dir: PathBuf::from("out"),
            run_name: None,
            box_radius: 1.0,
            reference_tol: 1e-9,
            track_node: 0,
            gamma: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |field, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::validation(field, format!("must be positive and finite, got {v}")))
            }
        };
        for (field, v) in [("n", self.n), ("d", self.d), ("rounds", self.rounds), ("log_every", self.log_every)] {
            if v == 0 {
                return Err(Error::validation(field, "must be at least 1"));
            }
        }
        positive("radius", self.radius)?;
        positive("box_radius", self.box_radius)?;
        positive("reference_tol", self.reference_tol)?;
        if self.schedule == ScheduleKind::InvLinear {
            positive("scale", self.scale)?;
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::validation("lambda", format!("must be nonnegative, got {}", self.lambda)));
        }
        if !(1..=MAX_BITS).contains(&self.bits) {
            return Err(Error::validation("bits", format!("must be in 1..={MAX_BITS}, got {}", self.bits)));
        }
        if let StopRule::RelativeGap { tau } = self.stop {
            positive("stop", tau)?;
        }
        if self.track_node >= self.n {
            return Err(Error::validation("track_node", format!("must be below n = {}", self.n)));
        }
        if let Some(g) = self.gamma {
            positive("gamma", g)?;
        }
        if let Some(name) = &self.run_name {
            if name.is_empty() || name.contains(['/', '\\']) {
                return Err(Error::validation("run_name", "must be a nonempty file stem"));
            }
        }
        Ok(())
    }

    /// Builds and validates a config from a JSON object; absent keys take
    /// their defaults.
    pub fn from_value(value: Value) -> Result<Self> {
        let config: Self = serde_json::from_value(value)?;
        config.validate()?;
        Ok(config)
    }

    pub fn step_schedule(&self) -> StepSchedule {
        match self.schedule {
            ScheduleKind::InvSqrt => StepSchedule::InvSqrt,
            ScheduleKind::InvLinear => StepSchedule::InvLinear { scale: self.scale },
        }
    }

    pub fn averaging_mode(&self) -> Averaging {
        self.averaging.unwrap_or_else(|| self.step_schedule().default_averaging())
    }

    pub fn box_set(&self) -> Result<BoxSet> {
        BoxSet::symmetric(self.d, self.box_radius)
    }

    pub fn name(&self) -> String {
        self.run_name.clone().unwrap_or_else(|| match self.algorithm {
            Algorithm::Qdsg => format!("qdsg_{}_b{}", self.loss, self.bits),
            Algorithm::Dsg => format!("dsg_{}", self.loss),
        })
    }

    pub fn engine_config(&self) -> EngineConfig {
        EngineConfig {
            algorithm: self.algorithm,
            schedule: self.step_schedule(),
            averaging: self.averaging_mode(),
            bits: self.bits,
            seed: self.seed,
            gamma_override: self.gamma,
        }
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)?;
    let config: ExperimentConfig = serde_json::from_str(&text).map_err(|source| Error::Parse {
        path: path.to_path_buf(),
        source,
    })?;
    config.validate()?;
    Ok(config)
}

pub fn save_config(config: &ExperimentConfig, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut out, config)?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

/// Everything a run needs that is derived from the seed.
#[derive(Debug, Clone)]
pub struct Problem {
    pub graph: Graph,
    pub mixing: MixingMatrix,
    pub samples: Vec<Sample>,
    pub objectives: Vec<Objective>,
    pub bx: BoxSet,
}

pub fn build_problem(config: &ExperimentConfig) -> Result<Problem> {
    config.validate()?;
    let graph = generate_geometric_graph(config.n, config.radius, config.seed)?;
    let mixing = lazy_metropolis(&graph)?;
    let samples = generate_dataset(config.n, config.d, config.seed);
    let bx = config.box_set()?;
    let objectives = build_objectives(&samples, config.loss, config.lambda, &bx)?;
    Ok(Problem {
        graph,
        mixing,
        samples,
        objectives,
        bx,
    })
}

pub fn build_engine(config: &ExperimentConfig, problem: &Problem) -> Result<Engine> {
    Engine::new(
        problem.graph.clone(),
        problem.mixing.clone(),
        problem.objectives.clone(),
        problem.bx.clone(),
        config.engine_config(),
    )
}

/// Identity of a reference problem; the algorithm and its knobs do not matter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ReferenceKey {
    n: usize,
    d: usize,
    seed: u64,
    loss: LossKind,
    lambda: f64,
    box_radius: f64,
    tol: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CachedReference {
    key: ReferenceKey,
    solution: ReferenceSolution,
}

impl ReferenceKey {
    fn of(config: &ExperimentConfig) -> Self {
        Self {
            n: config.n,
            d: config.d,
            seed: config.seed,
            loss: config.loss,
            lambda: config.lambda,
            box_radius: config.box_radius,
            tol: config.reference_tol,
        }
    }

    fn file_name(&self) -> String {
        format!(
            "reference_{}_n{}_d{}_seed{}_lambda{}_box{}_tol{:e}.json",
            self.loss, self.n, self.d, self.seed, self.lambda, self.box_radius, self.tol
        )
    }
}

/// Solves the centralized problem for `config`, reusing the copy cached in
/// the output directory when one exists for the same problem.
pub fn reference(config: &ExperimentConfig, problem: &Problem) -> Result<ReferenceSolution> {
    let key = ReferenceKey::of(config);
    let path = config.output_dir.join(key.file_name());
    if let Ok(text) = fs::read_to_string(&path) {
        if let Ok(cached) = serde_json::from_str::<CachedReference>(&text) {
            if cached.key == key {
                return Ok(cached.solution);
            }
        }
    }
    let solution = solve_reference(&problem.objectives, &problem.bx, config.reference_tol)?;
    fs::create_dir_all(&config.output_dir)?;
    let cached = CachedReference { key, solution };
    fs::write(&path, serde_json::to_string_pretty(&cached)?)?;
    Ok(cached.solution)
}

/// Metadata written next to every metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub config: ExperimentConfig,
    pub n: usize,
    pub d: usize,
    pub bits: u32,
    pub gamma: f64,
    pub sigma2: f64,
    pub lipschitz: f64,
    pub f_star: f64,
    pub x_star: Vec<f64>,
    pub assumption2_satisfied: bool,
    pub edges: usize,
    pub rounds_executed: usize,
    pub iterations_to_target: Option<usize>,
    pub monitor: Monitor,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub record: RunRecord,
    pub metadata: RunMetadata,
    pub metrics_path: PathBuf,
    pub metadata_path: PathBuf,
}

fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_metrics_csv<W: Write>(rows: &[MetricRow], out: W) -> Result<()> {
    let mut out = BufWriter::new(out);
    writeln!(out, "{}", MetricRow::HEADER.join(","))?;
    for r in rows {
        let floats = [
            r.alpha,
            r.gap,
            r.worst_gap,
            r.z_dist_sq,
            r.max_deviation,
            r.consensus_error,
            r.consensus_bound,
            r.delta_max,
            r.delta_bound,
            r.compensation_error,
        ]
        .map(format_float)
        .join(",");
        writeln!(
            out,
            "{},{floats},{},{},{},{}",
            r.round, r.containment_violations, r.delta_violations, r.consensus_violations, r.bits_transmitted
        )?;
    }
    out.flush()?;
    Ok(())
}

/// Runs `config` against an already solved reference without touching disk.
pub fn simulate(config: &ExperimentConfig, problem: &Problem, reference: &ReferenceSolution) -> Result<RunRecord> {
    let mut engine = build_engine(config, problem)?;
    run(
        &mut engine,
        &RunOptions {
            rounds: config.rounds,
            log_every: config.log_every,
            f_star: reference.f_star,
            x_star: Some(reference.x_star.clone()),
            track_node: config.track_node,
            stop: config.stop,
        },
    )
}

fn persist(
    config: &ExperimentConfig,
    problem: &Problem,
    reference: &ReferenceSolution,
    record: RunRecord,
) -> Result<ExperimentOutput> {
    fs::create_dir_all(&config.output_dir)?;
    let name = config.name();
    let metrics_path = config.output_dir.join(format!("{name}.csv"));
    let metadata_path = config.output_dir.join(format!("{name}.json"));
    write_metrics_csv(&record.rows, File::create(&metrics_path)?)?;
    let metadata = RunMetadata {
        config: config.clone(),
        n: config.n,
        d: config.d,
        bits: record.bits,
        gamma: record.gamma,
        sigma2: record.sigma2,
        lipschitz: record.lipschitz,
        f_star: reference.f_star,
        x_star: reference.x_star.clone(),
        assumption2_satisfied: record.assumption2_satisfied,
        edges: problem.graph.edge_count(),
        rounds_executed: record.rounds_executed,
        iterations_to_target: record.iterations_to_target,
        monitor: record.monitor.clone(),
    };
    fs::write(&metadata_path, serde_json::to_string_pretty(&metadata)? + "\n")?;
    Ok(ExperimentOutput {
        record,
        metadata,
        metrics_path,
        metadata_path,
    })
}

/// One full run: build, solve the reference, simulate, and write the metrics
/// CSV and metadata JSON into the output directory.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    let problem = build_problem(config)?;
    let reference = reference(config, &problem)?;
    let record = simulate(config, &problem, &reference)?;
    persist(config, &problem, &reference, record)
}

/// Runs the quantized method and the exact-message baseline on the same
/// graph, data, and starting point.
pub fn compare_algorithms(config: &ExperimentConfig) -> Result<(ExperimentOutput, ExperimentOutput)> {
    let problem = build_problem(config)?;
    let reference = reference(config, &problem)?;
    let configs = [Algorithm::Qdsg, Algorithm::Dsg].map(|algorithm| ExperimentConfig {
        algorithm,
        run_name: None,
        ..config.clone()
    });
    let mut outputs = configs
        .par_iter()
        .map(|c| simulate(c, &problem, &reference))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .zip(&configs)
        .map(|(record, c)| persist(c, &problem, &reference, record))
        .collect::<Result<Vec<_>>>()?;
    let dsg = outputs.pop().expect("two runs");
    let qdsg = outputs.pop().expect("two runs");
    Ok((qdsg, dsg))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub bits: u32,
    /// Rounds until every node met the target, if it was met.
    pub iterations_to_target: Option<usize>,
    pub target_reached: bool,
    pub rounds_executed: usize,
    pub final_gap: f64,
    pub final_worst_gap: f64,
    pub assumption2_satisfied: bool,
    pub containment_violations: u64,
    pub delta_violations: u64,
    pub consensus_violations: u64,
    pub max_compensation_error: f64,
    pub bits_transmitted: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub tau: f64,
    pub f_star: f64,
    pub entries: Vec<SweepEntry>,
}

/// Runs the quantized method once per entry of `bit_list` (in parallel,
/// reported in list order) until the relative-gap target or the round cap.
/// A config without a stop rule gets `tau = 0.05`.
pub fn sweep_bits(config: &ExperimentConfig, bit_list: &[u32]) -> Result<SweepResult> {
    let tau = match config.stop {
        StopRule::RelativeGap { tau } => tau,
        StopRule::None => DEFAULT_SWEEP_TAU,
    };
    let configs = bit_list
        .iter()
        .map(|&bits| {
            let c = ExperimentConfig {
                algorithm: Algorithm::Qdsg,
                bits,
                stop: StopRule::RelativeGap { tau },
                run_name: None,
                ..config.clone()
            };
            c.validate().map(|_| c)
        })
        .collect::<Result<Vec<_>>>()?;
    if configs.is_empty() {
        return Ok(SweepResult {
            tau,
            f_star: f64::NAN,
            entries: Vec::new(),
        });
    }
    let problem = build_problem(config)?;
    let reference = reference(config, &problem)?;
    let records = configs
        .par_iter()
        .map(|c| simulate(c, &problem, &reference))
        .collect::<Result<Vec<_>>>()?;
    let mut entries = Vec::with_capacity(records.len());
    for (c, record) in configs.iter().zip(records) {
        let last = record.final_row().clone();
        let output = persist(c, &problem, &reference, record)?;
        let r = &output.record;
        entries.push(SweepEntry {
            bits: c.bits,
            iterations_to_target: r.iterations_to_target,
            target_reached: r.iterations_to_target.is_some(),
            rounds_executed: r.rounds_executed,
            final_gap: last.gap,
            final_worst_gap: last.worst_gap,
            assumption2_satisfied: r.assumption2_satisfied,
            containment_violations: r.monitor.containment_violations,
            delta_violations: r.monitor.delta_violations,
            consensus_violations: r.monitor.consensus_violations,
            max_compensation_error: r.monitor.max_compensation_error,
            bits_transmitted: last.bits_transmitted,
        });
    }
    Ok(SweepResult {
        tau,
        f_star: reference.f_star,
        entries,
    })
}

/// Writes one CSV per curve with columns `round, gap, consensus_error,
/// delta_bound, delta_max`. Files are named `<label>_curve.csv`.
pub fn emit_plot_data(records: &[(String, &RunRecord)], dir: &Path) -> Result<Vec<PathBuf>> {
    if records.is_empty() {
        return Err(Error::validation("records", "nothing to emit"));
    }
    fs::create_dir_all(dir)?;
    records
        .iter()
        .map(|(label, record)| {
            let path = dir.join(format!("{label}_curve.csv"));
            let mut out = BufWriter::new(File::create(&path)?);
            writeln!(out, "round,gap,consensus_error,delta_bound,delta_max")?;
            for r in &record.rows {
                writeln!(
                    out,
                    "{},{},{},{},{}",
                    r.round,
                    format_float(r.gap),
                    format_float(r.consensus_error),
                    format_float(r.delta_bound),
                    format_float(r.delta_max)
                )?;
            }
            out.flush()?;
            Ok(path)
        })
        .collect()
}

/// Outcome of a run in the regime where every monitored bound is guaranteed.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub bits: u32,
    pub gamma: f64,
    pub sigma2: f64,
    pub lipschitz: f64,
    pub record: RunRecord,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        let m = &self.record.monitor;
        self.record.assumption2_satisfied
            && m.containment_violations == 0
            && m.delta_violations == 0
            && m.consensus_violations == 0
            && m.decode_mismatches == 0
            && m.max_compensation_error <= 1e-10
    }
}

/// Runs the quantized method with the fewest bits that satisfy the bandwidth
/// condition for `config`'s problem, ignoring `config.bits`, and reports the
/// invariant monitor.
pub fn check_invariants(config: &ExperimentConfig) -> Result<CheckReport> {
    let problem = build_problem(config)?;
    let probe = build_engine(
        &ExperimentConfig {
            algorithm: Algorithm::Qdsg,
            ..config.clone()
        },
        &problem,
    )?;
    let (n, d, gamma) = (probe.node_count(), probe.dim(), probe.gamma());
    let bits = bits_for_bandwidth(n, d, gamma).ok_or_else(|| {
        Error::validation(
            "bits",
            format!("no width up to {MAX_BITS} bits satisfies the bandwidth condition for gamma = {gamma}"),
        )
    })?;
    let checked = ExperimentConfig {
        algorithm: Algorithm::Qdsg,
        bits,
        stop: StopRule::None,
        ..config.clone()
    };
    let mut engine = build_engine(&checked, &problem)?;
    let record = run(
        &mut engine,
        &RunOptions {
            rounds: checked.rounds,
            log_every: checked.log_every,
            f_star: 0.0,
            x_star: None,
            track_node: checked.track_node,
            stop: StopRule::None,
        },
    )?;
    Ok(CheckReport {
        bits,
        gamma,
        sigma2: probe.sigma2(),
        lipschitz: probe.lipschitz(),
        record,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn validation_names_the_field() {
        let cases: [(&str, ExperimentConfig); 6] = [
            ("bits", ExperimentConfig { bits: 0, ..Default::default() }),
            ("bits", ExperimentConfig { bits: 53, ..Default::default() }),
            ("n", ExperimentConfig { n: 0, ..Default::default() }),
            ("stop", ExperimentConfig { stop: StopRule::RelativeGap { tau: 0.0 }, ..Default::default() }),
            ("scale", ExperimentConfig { schedule: ScheduleKind::InvLinear, scale: -1.0, ..Default::default() }),
            ("track_node", ExperimentConfig { track_node: 100, ..Default::default() }),
        ];
        for (want, config) in cases {
            match config.validate() {
                Err(Error::Validation { field, .. }) => assert_eq!(field, want),
                other => panic!("expected validation error on {want}, got {other:?}"),
            }
        }
    }

    #[test]
    fn averaging_follows_schedule_unless_set() {
        let c = ExperimentConfig::default();
        assert_eq!(c.averaging_mode(), Averaging::Weighted);
        let c = ExperimentConfig {
            schedule: ScheduleKind::InvLinear,
            ..c
        };
        assert_eq!(c.averaging_mode(), Averaging::Plain);
        let c = ExperimentConfig {
            averaging: Some(Averaging::Weighted),
            ..c
        };
        assert_eq!(c.averaging_mode(), Averaging::Weighted);
    }

    #[test]
    fn run_names() {
        let c = ExperimentConfig::default();
        assert_eq!(c.name(), "qdsg_quadratic_b8");
        let c = ExperimentConfig {
            algorithm: Algorithm::Dsg,
            loss: LossKind::Absolute,
            ..c
        };
        assert_eq!(c.name(), "dsg_absolute");
    }

    #[test]
    fn csv_uses_full_precision() {
        let row = MetricRow {
            round: 3,
            alpha: 0.5,
            gap: 1.0 / 3.0,
            worst_gap: 1.0,
            z_dist_sq: f64::NAN,
            max_deviation: 0.0,
            consensus_error: 0.0,
            consensus_bound: 0.0,
            delta_max: 0.0,
            delta_bound: 0.0,
            compensation_error: 0.0,
            containment_violations: 1,
            delta_violations: 2,
            consensus_violations: 0,
            bits_transmitted: 99,
        };
        let mut buf = Vec::new();
        write_metrics_csv(&[row], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), MetricRow::HEADER.join(","));
        let fields: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(fields.len(), MetricRow::HEADER.len());
        assert_eq!(fields[0], "3");
        assert_eq!(fields[2], "3.3333333333333331e-1");
        assert_eq!(fields[2].parse::<f64>().unwrap(), 1.0 / 3.0);
        assert_eq!(fields[4], "NaN");
        assert_eq!(&fields[11..], ["1", "2", "0", "99"]);
    }
}
