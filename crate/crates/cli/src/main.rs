//! Command-line driver for single runs, baseline comparisons, bit sweeps,
//! reference solves, and the invariant check.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use qdsg::harness::{
    build_problem, check_invariants, compare_algorithms, emit_plot_data, reference, run_experiment, sweep_bits,
    ExperimentConfig,
};
use qdsg::Error;
use serde_json::{json, Map, Value};

#[derive(Debug, Parser)]
#[command(name = "qdsg", version, about = "Distributed subgradient experiments with quantized messages")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one experiment and write its metrics and metadata.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Also run the exact-message baseline on the same instance.
        #[arg(long)]
        compare: bool,
        /// Write per-curve plot data into `<output_dir>/plots`.
        #[arg(long)]
        plot_data: bool,
    },
    /// Count rounds to the relative-gap target for several bit widths.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// Bit widths to try.
        #[arg(long, value_delimiter = ',', default_value = "4,5,6,7,8,10,12")]
        bit_list: Vec<u32>,
    },
    /// Solve the centralized problem and cache the result.
    Reference {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Run with enough bits for the bandwidth condition and verify every
    /// monitored invariant.
    Check {
        #[command(flatten)]
        config: ConfigArgs,
    },
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// JSON config file; its keys override flags.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    radius: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// quadratic | absolute
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    lambda: Option<f64>,
    /// qdsg | dsg
    #[arg(long)]
    algorithm: Option<String>,
    #[arg(long)]
    bits: Option<u32>,
    /// inv_sqrt | inv_linear
    #[arg(long)]
    schedule: Option<String>,
    #[arg(long)]
    scale: Option<f64>,
    /// weighted | plain
    #[arg(long)]
    averaging: Option<String>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    log_every: Option<usize>,
    /// Stop once every node's relative gap is at most this value.
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long, env = "QDSG_OUT")]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    run_name: Option<String>,
    #[arg(long)]
    box_radius: Option<f64>,
    #[arg(long)]
    reference_tol: Option<f64>,
    #[arg(long)]
    track_node: Option<usize>,
    /// Override the computed interval scale.
    #[arg(long)]
    gamma: Option<f64>,
}

impl ConfigArgs {
    fn flags(&self) -> Map<String, Value> {
        let mut m = Map::new();
        let mut put = |key: &str, value: Option<Value>| {
            if let Some(v) = value {
                m.insert(key.to_owned(), v);
            }
        };
        put("n", self.n.map(Value::from));
        put("d", self.d.map(Value::from));
        put("radius", self.radius.map(Value::from));
        put("seed", self.seed.map(Value::from));
        put("loss", self.loss.clone().map(Value::from));
        put("lambda", self.lambda.map(Value::from));
        put("algorithm", self.algorithm.clone().map(Value::from));
        put("bits", self.bits.map(Value::from));
        put("schedule", self.schedule.clone().map(Value::from));
        put("scale", self.scale.map(Value::from));
        put("averaging", self.averaging.clone().map(Value::from));
        put("rounds", self.rounds.map(Value::from));
        put("log_every", self.log_every.map(Value::from));
        put("stop", self.tau.map(|tau| json!({"kind": "relative_gap", "tau": tau})));
        put("output_dir", self.output_dir.as_ref().map(|p| Value::from(p.to_string_lossy().into_owned())));
        put("run_name", self.run_name.clone().map(Value::from));
        put("box_radius", self.box_radius.map(Value::from));
        put("reference_tol", self.reference_tol.map(Value::from));
        put("track_node", self.track_node.map(Value::from));
        put("gamma", self.gamma.map(Value::from));
        m
    }

    /// Flags over defaults, then the config file over both.
    fn resolve(&self) -> Result<ExperimentConfig, Error> {
        let mut merged = self.flags();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)?;
            let file: Value = serde_json::from_str(&text).map_err(|source| Error::Parse {
                path: path.clone(),
                source,
            })?;
            let Value::Object(file) = file else {
                return Err(Error::Malformed(format!("{} must hold a JSON object", path.display())));
            };
            merged.extend(file);
        }
        ExperimentConfig::from_value(Value::Object(merged))
    }
}

enum Failure {
    Invalid(Error),
    Invariants,
    Other(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Validation { .. } | Error::Parse { .. } | Error::Json(_) | Error::Malformed(_) => Failure::Invalid(e),
            other => Failure::Other(other),
        }
    }
}

fn execute(command: Command) -> Result<(), Failure> {
    match command {
        Command::Run {
            config,
            compare,
            plot_data,
        } => {
            let config = config.resolve()?;
            let outputs = if compare {
                let (q, d) = compare_algorithms(&config)?;
                vec![q, d]
            } else {
                vec![run_experiment(&config)?]
            };
            for o in &outputs {
                let last = o.record.final_row();
                println!(
                    "{}: rounds={} gap={:.6e} worst_gap={:.6e} consensus={:.6e} gamma={:.6e} sigma2={:.6} assumption2={} violations(containment={}, delta={}, consensus={})",
                    o.metrics_path.display(),
                    o.record.rounds_executed,
                    last.gap,
                    last.worst_gap,
                    last.consensus_error,
                    o.record.gamma,
                    o.record.sigma2,
                    o.record.assumption2_satisfied,
                    last.containment_violations,
                    last.delta_violations,
                    last.consensus_violations,
                );
            }
            if plot_data {
                let curves: Vec<_> = outputs
                    .iter()
                    .map(|o| (o.metadata.config.name(), &o.record))
                    .collect();
                for path in emit_plot_data(&curves, &config.output_dir.join("plots"))? {
                    println!("{}", path.display());
                }
            }
        }
        Command::Sweep { config, bit_list } => {
            let config = config.resolve()?;
            let result = sweep_bits(&config, &bit_list)?;
            println!("bits,iterations_to_target,rounds_executed,final_worst_gap,containment_violations");
            for e in &result.entries {
                println!(
                    "{},{},{},{:.6e},{}",
                    e.bits,
                    e.iterations_to_target.map_or_else(|| "not_reached".to_owned(), |k| k.to_string()),
                    e.rounds_executed,
                    e.final_worst_gap,
                    e.containment_violations
                );
            }
            let path = config.output_dir.join("sweep.json");
            std::fs::write(&path, serde_json::to_string_pretty(&result).map_err(Error::from)? + "\n").map_err(Error::from)?;
            println!("{}", path.display());
        }
        Command::Reference { config } => {
            let config = config.resolve()?;
            let problem = build_problem(&config)?;
            let solution = reference(&config, &problem)?;
            println!("f_star={:.16e}", solution.f_star);
            println!("x_star={:?}", solution.x_star);
        }
        Command::Check { config } => {
            let config = config.resolve()?;
            let report = check_invariants(&config)?;
            let m = &report.record.monitor;
            println!(
                "bits={} gamma={:.6e} sigma2={:.6} L={:.6e} rounds={}",
                report.bits, report.gamma, report.sigma2, report.lipschitz, report.record.rounds_executed
            );
            println!(
                "containment={} delta={} consensus={} decode_mismatches={} max_compensation_error={:.3e}",
                m.containment_violations,
                m.delta_violations,
                m.consensus_violations,
                m.decode_mismatches,
                m.max_compensation_error
            );
            if let Some(k) = m.spectral_precondition_failure {
                println!("note: sigma2^k > alpha(k) first at k={k}");
            }
            if !report.passed() {
                println!("FAIL");
                return Err(Failure::Invariants);
            }
            println!("PASS");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Invariants) => ExitCode::from(3),
        Err(Failure::Other(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
