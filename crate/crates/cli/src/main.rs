//! `commoninfo`: synthetic distributions, solves, sweeps, clustering
//! evaluation and fusion from the command line.
//!
//! Every subcommand writes its outputs plus `config.json`, the fully resolved
//! configuration. Passing that file back through `--config` repeats the run.
//!
//! Exit codes: 0 success, 2 invalid input or configuration, 3 I/O failure,
//! 4 internal consistency failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use commoninfo::bipartite::{self, BipartiteConfig, Kappas};
use commoninfo::eval::{clustering_accuracy, DecodeMode};
use commoninfo::fusion::FusionRequest;
use commoninfo::metrics::{info_report, mutual_information};
use commoninfo::solver::write_run_records;
use commoninfo::sweep::{
    pareto_frontier, runtime_profile, run_sweep_with_threads, write_runtime_csv, write_sweep_csv,
    SolverKind, SweepConfig,
};
use commoninfo::synth::{build_joint, posterior_encoder, sample_dataset, LabeledDataset, SynthSpec};
use commoninfo::vi::{self, VIConfig};
use commoninfo::{marginalize, Encoder, Error, JointDist};

#[derive(Parser)]
#[command(name = "commoninfo", version, about = "Wyner common information solvers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a synthetic joint distribution and optionally sample from it.
    Gen(GenArgs),
    /// Run one solver on a joint distribution.
    Solve(SolveArgs),
    /// Sweep the solver knob over a grid with restarts.
    Sweep(SweepArgs),
    /// Score an encoder on a labeled dataset.
    ClusterEval(ClusterArgs),
    /// Fuse Gaussian or categorical experts.
    Fuse(FuseArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Preset {
    Invertible,
    NonInvertible,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum SolverArg {
    Bipartite,
    Vi,
}

impl From<SolverArg> for SolverKind {
    fn from(s: SolverArg) -> Self {
        match s {
            SolverArg::Bipartite => SolverKind::Bipartite,
            SolverArg::Vi => SolverKind::Vi,
        }
    }
}

#[derive(Args)]
struct Common {
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
    /// Resolved configuration from an earlier run; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    common: Common,
    /// SynthSpec JSON file.
    #[arg(long, conflicts_with = "preset")]
    spec: Option<PathBuf>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Number of sources for a preset.
    #[arg(long)]
    sources: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenConfig {
    spec: SynthSpec,
    samples: Option<usize>,
    seed: u64,
}

#[derive(Args)]
struct SolveArgs {
    #[command(flatten)]
    common: Common,
    /// JointDist JSON file.
    #[arg(long)]
    joint: Option<PathBuf>,
    #[arg(long, value_enum)]
    solver: Option<SolverArg>,
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    /// Latent alphabet size; defaults to the one in the joint file.
    #[arg(long)]
    z: Option<usize>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    restarts: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Variational solver: uniform mass mixed into the target.
    #[arg(long)]
    smoothing: Option<f64>,
    /// Record wall-clock times (breaks byte-identical reruns).
    #[arg(long)]
    timing: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SolveConfig {
    joint: PathBuf,
    solver: SolverArg,
    z: usize,
    /// Bipartite solver.
    kappa: Option<f64>,
    /// Variational solver.
    beta: Option<f64>,
    max_iters: usize,
    tol: f64,
    restarts: usize,
    seed: u64,
    smoothing: Option<f64>,
    patience: Option<usize>,
    stall_eps: Option<f64>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum)]
    solver: Option<SolverArg>,
    /// SynthSpec JSON file.
    #[arg(long, conflicts_with = "preset")]
    spec: Option<PathBuf>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long)]
    sources: Option<usize>,
    #[arg(long)]
    z: Option<usize>,
    #[arg(long)]
    restarts: Option<usize>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Size of the fresh labeled set scored per grid value.
    #[arg(long)]
    samples: Option<usize>,
    /// Comma-separated grid values.
    #[arg(long, value_delimiter = ',')]
    grid: Option<Vec<f64>>,
    #[arg(long)]
    smoothing: Option<f64>,
    /// Worker threads; results do not depend on it.
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Record wall-clock times (breaks byte-identical reruns).
    #[arg(long)]
    timing: bool,
    /// With --timing, also profile total sweep time over these |Z| values.
    #[arg(long, value_delimiter = ',', requires = "timing")]
    runtime_z: Option<Vec<usize>>,
}

#[derive(Args)]
struct ClusterArgs {
    #[command(flatten)]
    common: Common,
    /// Encoder JSON file.
    #[arg(long)]
    encoder: Option<PathBuf>,
    /// Labeled dataset CSV (`x1,...,xV,y`).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Number of classes; defaults to the encoder's |Z|.
    #[arg(long)]
    y: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Decode by argmax instead of sampling (diagnostic).
    #[arg(long)]
    argmax: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClusterConfig {
    encoder: PathBuf,
    data: PathBuf,
    y_cardinality: usize,
    seed: u64,
    mode: DecodeMode,
}

#[derive(Args)]
struct FuseArgs {
    #[command(flatten)]
    common: Common,
    /// FusionRequest JSON file.
    #[arg(long)]
    request: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FuseConfig {
    request: FusionRequest,
}

fn code_of(e: &Error) -> u8 {
    match e {
        Error::Io(_) => 3,
        Error::Consistency(_) => 4,
        _ => 2,
    }
}

fn read(path: &Path) -> Result<String, Error> {
    fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn write(dir: &Path, name: &str, bytes: impl AsRef<[u8]>) -> Result<(), Error> {
    let p = dir.join(name);
    fs::write(&p, bytes).map_err(|e| Error::Io(format!("{}: {e}", p.display())))
}

fn write_with<F>(dir: &Path, name: &str, f: F) -> Result<(), Error>
where
    F: FnOnce(&mut Vec<u8>) -> Result<(), Error>,
{
    let mut buf = Vec::new();
    f(&mut buf)?;
    write(dir, name, buf)
}

fn json<T: Serialize>(v: &T) -> Result<String, Error> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s)
}

fn load_config<T: DeserializeOwned>(common: &Common) -> Result<Option<T>, Error> {
    common
        .config
        .as_deref()
        .map(|p| {
            serde_json::from_str(&read(p)?)
                .map_err(|e| Error::Format(format!("{}: {e}", p.display())))
        })
        .transpose()
}

fn prepare_out(common: &Common) -> Result<(), Error> {
    fs::create_dir_all(&common.out)
        .map_err(|e| Error::Io(format!("{}: {e}", common.out.display())))
}

fn missing(flag: &str) -> Error {
    Error::InvalidArgument(format!("--{flag} is required (or give --config)"))
}

fn synth_from(
    spec: &Option<PathBuf>,
    preset: Option<Preset>,
    sources: Option<usize>,
    base: Option<SynthSpec>,
) -> Result<Option<SynthSpec>, Error> {
    let mut out = match (spec, preset) {
        (Some(p), _) => Some(SynthSpec::from_json(&read(p)?)?),
        (None, Some(Preset::Invertible)) => Some(SynthSpec::invertible(2)),
        (None, Some(Preset::NonInvertible)) => Some(SynthSpec::non_invertible(2)),
        (None, None) => base,
    };
    if let (Some(s), Some(v)) = (out.as_mut(), sources) {
        s.num_sources = v;
    }
    if let Some(s) = &out {
        s.validate()?;
    }
    Ok(out)
}

fn cmd_gen(a: GenArgs) -> Result<(), Error> {
    let base: Option<GenConfig> = load_config(&a.common)?;
    let spec = synth_from(&a.spec, a.preset, a.sources, base.as_ref().map(|b| b.spec.clone()))?
        .ok_or_else(|| missing("spec or --preset"))?;
    let cfg = GenConfig {
        spec,
        samples: a.samples.or(base.as_ref().and_then(|b| b.samples)),
        seed: a.seed.or(base.as_ref().map(|b| b.seed)).unwrap_or(0),
    };
    let joint = build_joint(&cfg.spec)?;
    let posterior = posterior_encoder(&cfg.spec)?;
    let data = cfg
        .samples
        .map(|n| sample_dataset(&cfg.spec, n, cfg.seed))
        .transpose()?;

    prepare_out(&a.common)?;
    write(&a.common.out, "joint.json", joint.to_json()? + "\n")?;
    write(&a.common.out, "posterior.json", posterior.to_json()? + "\n")?;
    if let Some(d) = &data {
        write_with(&a.common.out, "samples.csv", |b| d.write_csv(b))?;
    }
    write(&a.common.out, "config.json", json(&cfg)?)?;

    let pair = marginalize(&joint, &[0, 1])?;
    let h_y = (cfg.spec.y_cardinality as f64).log2();
    println!(
        "alphabets {:?}, |Y| = {}, H(Y) = {:.4} bits, I(X1;X2) = {:.4} bits",
        joint.spec().cardinalities(),
        cfg.spec.y_cardinality,
        h_y,
        mutual_information(&pair)?
    );
    Ok(())
}

fn cmd_solve(a: SolveArgs) -> Result<(), Error> {
    let base: Option<SolveConfig> = load_config(&a.common)?;
    let b = base.as_ref();
    let joint_path = a.joint.clone().or(b.map(|b| b.joint.clone())).ok_or_else(|| missing("joint"))?;
    let joint = JointDist::from_json(&read(&joint_path)?)?;
    let solver = a.solver.or(b.map(|b| b.solver)).ok_or_else(|| missing("solver"))?;
    let z = a.z.or(b.map(|b| b.z)).unwrap_or(joint.spec().z_cardinality());
    let joint = joint.with_z(z)?;
    let defaults = BipartiteConfig::default();
    let vi_defaults = VIConfig::new(1.0);
    let mut cfg = SolveConfig {
        joint: joint_path,
        solver,
        z,
        kappa: None,
        beta: None,
        max_iters: a.max_iters.or(b.map(|b| b.max_iters)).unwrap_or(defaults.max_iters),
        tol: a.tol.or(b.map(|b| b.tol)).unwrap_or(defaults.loss_tol),
        restarts: a.restarts.or(b.map(|b| b.restarts)).unwrap_or(defaults.restarts),
        seed: a.seed.or(b.map(|b| b.seed)).unwrap_or(0),
        smoothing: None,
        patience: None,
        stall_eps: None,
    };
    prepare_out(&a.common)?;
    let out = &a.common.out;
    match solver {
        SolverArg::Bipartite => {
            let splits = commoninfo::enumerate_bipartitions(joint.spec().num_sources())?.len();
            let kappa = a.kappa.or(b.and_then(|b| b.kappa)).unwrap_or(1.0 / splits as f64);
            cfg.kappa = Some(kappa);
            let bc = BipartiteConfig {
                kappas: Kappas::Shared(kappa),
                max_iters: cfg.max_iters,
                loss_tol: cfg.tol,
                restarts: cfg.restarts,
                seed: cfg.seed,
            };
            let sol = bipartite::solve(&joint, &bc)?;
            let report = info_report(&joint, &sol.encoder)?;
            write(out, "encoder.json", sol.encoder.to_json()? + "\n")?;
            write_with(out, "trace.csv", |w| sol.trace.write_csv(w))?;
            write_with(out, "restarts.csv", |w| write_run_records(w, &sol.records, "kappa", a.timing))?;
            write(out, "info.json", report.to_flat_json()? + "\n")?;
            print_report(&report, &sol.trace.terminated_by.to_string());
        }
        SolverArg::Vi => {
            let beta = a.beta.or(b.and_then(|b| b.beta)).unwrap_or(vi_defaults.beta);
            cfg.beta = Some(beta);
            cfg.smoothing = Some(a.smoothing.or(b.and_then(|b| b.smoothing)).unwrap_or(vi_defaults.smoothing));
            cfg.patience = Some(b.and_then(|b| b.patience).unwrap_or(vi_defaults.patience));
            cfg.stall_eps = Some(b.and_then(|b| b.stall_eps).unwrap_or(vi_defaults.stall_eps));
            let vc = VIConfig {
                beta,
                max_iters: cfg.max_iters,
                loss_tol: cfg.tol,
                restarts: cfg.restarts,
                seed: cfg.seed,
                patience: cfg.patience.expect("set above"),
                stall_eps: cfg.stall_eps.expect("set above"),
                smoothing: cfg.smoothing.expect("set above"),
            };
            let sol = vi::solve(&joint, &vc)?;
            let report = info_report(&joint, &sol.encoder)?;
            write(out, "encoder.json", sol.encoder.to_json()? + "\n")?;
            write(out, "params.json", sol.params.to_json()? + "\n")?;
            write_with(out, "trace.csv", |w| sol.trace.write_csv(w))?;
            write_with(out, "restarts.csv", |w| write_run_records(w, &sol.records, "beta", a.timing))?;
            write(out, "info.json", report.to_flat_json()? + "\n")?;
            print_report(&report, &sol.trace.terminated_by.to_string());
        }
    }
    write(out, "config.json", json(&cfg)?)
}

fn print_report(r: &commoninfo::metrics::InfoReport, how: &str) {
    println!(
        "I(Z;X^V) = {:.6} bits, sum of conditional MI = {:.6} bits ({how})",
        r.mi_z_xv, r.cond_mi_sum
    );
}

fn cmd_sweep(a: SweepArgs) -> Result<(), Error> {
    let base: Option<SweepConfig> = load_config(&a.common)?;
    let synth = synth_from(&a.spec, a.preset, a.sources, base.as_ref().map(|b| b.synth.clone()))?
        .ok_or_else(|| missing("spec or --preset"))?;
    let solver = a
        .solver
        .map(SolverKind::from)
        .or(base.as_ref().map(|b| b.solver))
        .ok_or_else(|| missing("solver"))?;
    let mut cfg = base.unwrap_or_else(|| SweepConfig::new(solver, synth.clone()));
    cfg.solver = solver;
    cfg.synth = synth;
    if let Some(z) = a.z {
        cfg.z_cardinality = Some(z);
    }
    if let Some(v) = a.restarts {
        cfg.restarts = v;
    }
    if let Some(v) = a.max_iters {
        cfg.max_iters = v;
    }
    if let Some(v) = a.tol {
        cfg.loss_tol = v;
    }
    if let Some(v) = a.seed {
        cfg.base_seed = v;
    }
    if let Some(v) = a.samples {
        cfg.accuracy_samples = v;
    }
    if let Some(v) = a.grid {
        cfg.grid = v;
    }
    if let Some(v) = a.smoothing {
        cfg.smoothing = v;
    }
    let cfg = cfg.resolved();
    cfg.validate()?;

    let outcome = run_sweep_with_threads(&cfg, a.threads)?;
    let frontier = pareto_frontier(&outcome.records)?;
    prepare_out(&a.common)?;
    let out = &a.common.out;
    write_with(out, "sweep.csv", |w| write_sweep_csv(w, &outcome.records, a.timing))?;
    write_with(out, "frontier.csv", |w| write_sweep_csv(w, &frontier, a.timing))?;
    if let Some(zs) = &a.runtime_z {
        let rows = runtime_profile(&cfg, zs)?;
        write_with(out, "runtime.csv", |w| write_runtime_csv(w, cfg.solver, &rows))?;
    }
    write(out, "config.json", json(&cfg)?)?;
    let top = &frontier[0];
    println!(
        "{} records; lowest conditional MI {:.6} bits at I(Z;X^V) = {:.6} bits",
        outcome.records.len(),
        top.cond_mi_sum,
        top.mi_z_xv
    );
    Ok(())
}

fn cmd_cluster_eval(a: ClusterArgs) -> Result<(), Error> {
    let base: Option<ClusterConfig> = load_config(&a.common)?;
    let b = base.as_ref();
    let enc_path = a.encoder.clone().or(b.map(|b| b.encoder.clone())).ok_or_else(|| missing("encoder"))?;
    let data_path = a.data.clone().or(b.map(|b| b.data.clone())).ok_or_else(|| missing("data"))?;
    let enc = Encoder::from_json(&read(&enc_path)?)?;
    let cfg = ClusterConfig {
        y_cardinality: a.y.or(b.map(|b| b.y_cardinality)).unwrap_or(enc.spec().z_cardinality()),
        seed: a.seed.or(b.map(|b| b.seed)).unwrap_or(0),
        mode: if a.argmax {
            DecodeMode::Argmax
        } else {
            b.map(|b| b.mode).unwrap_or_default()
        },
        encoder: enc_path,
        data: data_path,
    };
    let text = read(&cfg.data)?;
    let data = LabeledDataset::read_csv(text.as_bytes(), enc.spec(), cfg.y_cardinality)?;
    let result = clustering_accuracy(&enc, &data, cfg.seed, cfg.mode)?;
    prepare_out(&a.common)?;
    write(&a.common.out, "cluster.json", result.to_json()? + "\n")?;
    write(&a.common.out, "config.json", json(&cfg)?)?;
    println!("accuracy {:.4} on {} samples", result.accuracy, data.len());
    Ok(())
}

fn cmd_fuse(a: FuseArgs) -> Result<(), Error> {
    let base: Option<FuseConfig> = load_config(&a.common)?;
    let request = match (&a.request, base) {
        (Some(p), _) => serde_json::from_str::<FusionRequest>(&read(p)?)
            .map_err(|e| Error::Format(format!("{}: {e}", p.display())))?,
        (None, Some(b)) => b.request,
        (None, None) => return Err(missing("request")),
    };
    let cfg = FuseConfig {
        request: request.resolved(),
    };
    let result = cfg.request.run()?;
    prepare_out(&a.common)?;
    write(&a.common.out, "fused.json", json(&result)?)?;
    write(&a.common.out, "config.json", json(&cfg)?)?;
    println!("fused; result in {}", a.common.out.join("fused.json").display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let r = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Solve(a) => cmd_solve(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::ClusterEval(a) => cmd_cluster_eval(a),
        Command::Fuse(a) => cmd_fuse(a),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(code_of(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_by_error_kind() {
        assert_eq!(code_of(&Error::Io("x".into())), 3);
        assert_eq!(code_of(&Error::Consistency("x".into())), 4);
        assert_eq!(code_of(&Error::Format("x".into())), 2);
        assert_eq!(code_of(&Error::InvalidArgument("x".into())), 2);
        assert_eq!(code_of(&Error::FusionDegenerate { kappa_scale: 1.0 }), 2);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
