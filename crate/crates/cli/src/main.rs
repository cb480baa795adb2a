use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use mfa_core::nbody::{self, EndpointSampler, OptimizeOptions};
use mfa_core::ot_hjb::{self, FreeEndpointProblem};
use mfa_core::potentials::{self, AuditBox, PotentialSpec};
use mfa_core::relaxation::{self, RelaxOptions, VelocityGrid};
use mfa_core::vlasov::{self, VlasovOptions};
use mfa_core::{
    action, DiscreteStatistic, EndpointCoupling, MfaError, PathEnsemble, PhasePoint, TimeGrid,
};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Command {
    Optimize,
    Vlasov,
    Relax,
    Converge,
    Hjb,
    Audit,
}

#[derive(Debug, Parser)]
#[command(name = "mfa", version, about = "Mean-field action experiments")]
struct Cli {
    command: Command,
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridConfig {
    horizon: f64,
    steps: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PairConfig {
    x0: Vec<f64>,
    x_t: Vec<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CouplingConfig {
    pairs: Vec<PairConfig>,
    weights: Option<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AtomConfig {
    x: Vec<f64>,
    v: Vec<f64>,
    weight: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct VlasovConfig {
    #[serde(default)]
    options: VlasovOptions,
    #[serde(default = "default_bump_radius")]
    bump_min_radius: f64,
}

fn default_bump_radius() -> f64 {
    0.25
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RelaxConfig {
    grid: VelocityGrid,
    #[serde(default)]
    options: RelaxOptions,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConvergeConfig {
    sampler: EndpointSampler,
    particles: Vec<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AuditConfig {
    #[serde(rename = "box")]
    bx: AuditBox,
    #[serde(default = "default_samples")]
    samples: usize,
}

fn default_samples() -> usize {
    256
}

/// One JSON document per run; each command reads the sections it needs.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    psi: PotentialSpec,
    #[serde(default = "PotentialSpec::zero")]
    u: PotentialSpec,
    dim: Option<usize>,
    grid: Option<GridConfig>,
    seed: Option<u64>,
    coupling: Option<CouplingConfig>,
    initial: Option<Vec<AtomConfig>>,
    statistic: Option<Vec<AtomConfig>>,
    #[serde(default)]
    optimizer: OptimizeOptions,
    vlasov: Option<VlasovConfig>,
    relax: Option<RelaxConfig>,
    converge: Option<ConvergeConfig>,
    hjb: Option<FreeEndpointProblem>,
    audit: Option<AuditConfig>,
}

enum Failure {
    Config(String),
    Io(String),
    Core(MfaError),
}

impl From<MfaError> for Failure {
    fn from(e: MfaError) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Io(_) => 1,
            Failure::Core(e) if e.is_numerical() => 3,
            Failure::Core(_) => 2,
        }
    }

    fn report(&self) -> serde_json::Value {
        let (kind, message) = match self {
            Failure::Config(m) => ("config", m.clone()),
            Failure::Io(m) => ("io", m.clone()),
            Failure::Core(e) => (e.kind(), e.to_string()),
        };
        json!({ "error": { "kind": kind, "message": message } })
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

fn section<'a, T>(s: &'a Option<T>, name: &str, cmd: Command) -> Outcome<&'a T> {
    s.as_ref()
        .ok_or_else(|| Failure::Config(format!("`{name}` section is required by {cmd:?}")))
}

fn time_grid(cfg: &RunConfig, cmd: Command) -> Outcome<TimeGrid> {
    let g = section(&cfg.grid, "grid", cmd)?;
    Ok(TimeGrid::new(g.horizon, g.steps)?)
}

fn check_dim(cfg: &RunConfig, d: usize) -> Outcome<()> {
    match cfg.dim {
        Some(want) if want != d => Err(Failure::Config(format!(
            "config says dim {want} but the data has dim {d}"
        ))),
        _ => Ok(()),
    }
}

fn atoms(list: &[AtomConfig]) -> Outcome<DiscreteStatistic> {
    let pts = list
        .iter()
        .map(|a| PhasePoint::new(a.x.clone(), a.v.clone()))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(DiscreteStatistic::new(
        pts,
        list.iter().map(|a| a.weight).collect(),
    )?)
}

fn write_atomic(dir: &Path, name: &str, contents: &str) -> Outcome<()> {
    let io = |e: std::io::Error| Failure::Io(format!("{}: {e}", dir.join(name).display()));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(contents.as_bytes()).map_err(io)?;
    tmp.as_file().sync_all().map_err(io)?;
    tmp.persist(dir.join(name)).map_err(|e| io(e.error))?;
    Ok(())
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Outcome<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Failure::Io(e.to_string()))?;
    s.push('\n');
    write_atomic(dir, name, &s)
}

fn header(d: usize) -> String {
    let mut h = String::from("t,path_id,weight");
    for c in 0..d {
        write!(h, ",x{c}").unwrap();
    }
    for c in 0..d {
        write!(h, ",v{c}").unwrap();
    }
    h.push('\n');
    h
}

/// Node rows; v is the velocity of the following interval, and of the last
/// interval on the final node.
fn ensemble_csv(ens: &PathEnsemble) -> String {
    let grid = ens.grid();
    let m = grid.steps;
    let mut out = header(ens.dim());
    for (k, path) in ens.paths().iter().enumerate() {
        for (i, node) in path.iter().enumerate() {
            let v = ens.velocity(k, i.min(m - 1));
            write!(out, "{},{k},{}", grid.time(i), ens.weights()[k]).unwrap();
            for c in node.iter().chain(&v) {
                write!(out, ",{c}").unwrap();
            }
            out.push('\n');
        }
    }
    out
}

fn flow_csv(flow: &vlasov::CharacteristicFlow) -> String {
    let mut out = header(flow.f0.dim());
    let w = flow.weights();
    for k in 0..w.len() {
        for i in 0..=flow.grid.steps {
            write!(out, "{},{k},{}", flow.grid.time(i), w[k]).unwrap();
            for c in flow.x[i][k].iter().chain(&flow.v[i][k]) {
                write!(out, ",{c}").unwrap();
            }
            out.push('\n');
        }
    }
    out
}

fn cmd_optimize(cfg: &RunConfig, out: &Path) -> Outcome<()> {
    let cmd = Command::Optimize;
    let grid = time_grid(cfg, cmd)?;
    let c = section(&cfg.coupling, "coupling", cmd)?;
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = c
        .pairs
        .iter()
        .map(|p| (p.x0.clone(), p.x_t.clone()))
        .collect();
    let coupling = match &c.weights {
        Some(w) => EndpointCoupling::new(pairs, w.clone())?,
        None => EndpointCoupling::uniform(pairs)?,
    };
    check_dim(cfg, coupling.dim())?;
    let report = nbody::optimize(&coupling, grid, &cfg.psi, &cfg.u, &cfg.optimizer)?;
    let straight = PathEnsemble::straight(&coupling, grid)?;
    let straight_action = action::action(&straight, &cfg.psi, &cfg.u)?.total;
    let model = potentials::Model::new(&cfg.psi, &cfg.u, coupling.dim())?;
    let p = nbody::momentum(&model, &report.ensemble);
    let drift = p
        .iter()
        .flat_map(|q| q.iter().zip(&p[0]).map(|(a, b)| (a - b).abs()))
        .fold(0.0, f64::max);
    write_atomic(out, "trajectories.csv", &ensemble_csv(&report.ensemble))?;
    write_json(
        out,
        "report.json",
        &json!({
            "command": "optimize",
            "particles": coupling.len(),
            "dim": coupling.dim(),
            "grid": grid,
            "initial_action": report.initial_action,
            "final_action": report.final_action,
            "straight_line_action": straight_action,
            "iterations": report.iterations,
            "grad_norm": report.grad_norm,
            "el_residual": report.el_residual,
            "converged": report.converged,
            "momentum_drift": drift,
            "min_mean_pairwise_distance": nbody::min_mean_pairwise_distance(&report.ensemble),
            "straight_min_mean_pairwise_distance": nbody::min_mean_pairwise_distance(&straight),
            "tolerances": { "gtol": cfg.optimizer.gtol, "max_iter": cfg.optimizer.max_iter },
        }),
    )
}

fn cmd_vlasov(cfg: &RunConfig, out: &Path) -> Outcome<()> {
    let cmd = Command::Vlasov;
    let grid = time_grid(cfg, cmd)?;
    let f0 = atoms(section(&cfg.initial, "initial", cmd)?)?;
    check_dim(cfg, f0.dim())?;
    let vc = cfg.vlasov.as_ref();
    let opts = vc.map(|v| v.options).unwrap_or_default();
    let radius = vc.map_or(default_bump_radius(), |v| v.bump_min_radius);
    let flow = vlasov::dobrushin_solve(&f0, grid, &cfg.psi, &cfg.u, &opts)?;
    let weak = vlasov::weak_vlasov_residual(&flow, &vlasov::standard_bumps(&flow, radius))?;
    let w = flow.weights();
    let d = f0.dim();
    let total = |i: usize| -> Vec<f64> {
        (0..d)
            .map(|c| (0..w.len()).map(|k| w[k] * flow.p[i][k][c]).sum())
            .collect()
    };
    let p0 = total(0);
    let drift = (0..=grid.steps)
        .flat_map(|i| {
            total(i)
                .into_iter()
                .zip(p0.clone())
                .map(|(a, b)| (a - b).abs())
                .collect::<Vec<_>>()
        })
        .fold(0.0, f64::max);
    write_atomic(out, "trajectories.csv", &flow_csv(&flow))?;
    write_json(
        out,
        "report.json",
        &json!({
            "command": "vlasov",
            "atoms": w.len(),
            "dim": d,
            "grid": grid,
            "sub_horizons": flow.sub_horizons,
            "weak_residual": weak,
            "momentum_drift": drift,
            "velocity_recovery_defect": flow.recovery_defect()?,
            "tolerances": { "fptol": opts.fptol, "newton_tol": opts.newton_tol, "bump_min_radius": radius },
        }),
    )
}

fn cmd_relax(cfg: &RunConfig, out: &Path, seed: u64) -> Outcome<()> {
    let cmd = Command::Relax;
    let f = atoms(section(&cfg.statistic, "statistic", cmd)?)?;
    check_dim(cfg, f.dim())?;
    let rc = section(&cfg.relax, "relax", cmd)?;
    let opts = RelaxOptions { seed, ..rc.options };
    let report = relaxation::relax(&f, &cfg.psi, &cfg.u, &rc.grid, &opts)?;
    write_json(
        out,
        "report.json",
        &json!({ "command": "relax", "seed": seed, "result": report }),
    )
}

fn cmd_converge(cfg: &RunConfig, out: &Path, seed: u64) -> Outcome<()> {
    let cmd = Command::Converge;
    let grid = time_grid(cfg, cmd)?;
    let cc = section(&cfg.converge, "converge", cmd)?;
    check_dim(cfg, cc.sampler.dim())?;
    let table = nbody::convergence_experiment(
        &cc.sampler,
        &cc.particles,
        grid,
        &cfg.psi,
        &cfg.u,
        &cfg.optimizer,
        seed,
    )?;
    let mut csv = csv::Writer::from_writer(Vec::new());
    for row in &table.rows {
        csv.serialize(row).map_err(|e| Failure::Io(e.to_string()))?;
    }
    let bytes = csv.into_inner().map_err(|e| Failure::Io(e.to_string()))?;
    write_atomic(
        out,
        "convergence.csv",
        &String::from_utf8(bytes).expect("csv output is UTF-8"),
    )?;
    write_json(
        out,
        "report.json",
        &json!({ "command": "converge", "seed": seed, "grid": grid, "table": table }),
    )
}

fn cmd_hjb(cfg: &RunConfig, out: &Path) -> Outcome<()> {
    let cmd = Command::Hjb;
    let grid = time_grid(cfg, cmd)?;
    let problem = section(&cfg.hjb, "hjb", cmd)?;
    check_dim(cfg, 1)?;
    let sol = ot_hjb::solve_free_endpoint(problem, grid, &cfg.psi, &cfg.u, &cfg.optimizer)?;
    let hjb = ot_hjb::hjb_residual(&sol.field, &cfg.psi, &cfg.u)?;
    write_atomic(out, "field.csv", &sol.field.to_csv())?;
    write_atomic(out, "trajectories.csv", &ensemble_csv(&sol.ensemble))?;
    write_json(
        out,
        "report.json",
        &json!({
            "command": "hjb",
            "grid": grid,
            "pairing": sol.best,
            "exhaustive_pairing_search": sol.exhaustive,
            "pairings_tried": sol.tried.len(),
            "eulerian_action": sol.eulerian_action,
            "continuity_residual": sol.field.continuity_residual,
            "hjb": hjb,
        }),
    )
}

fn cmd_audit(cfg: &RunConfig, out: &Path, seed: u64) -> Outcome<()> {
    let ac = section(&cfg.audit, "audit", Command::Audit)?;
    check_dim(cfg, ac.bx.dim)?;
    let audit = potentials::audit_growth(&cfg.psi, &cfg.u, &ac.bx, ac.samples, seed)?;
    write_json(
        out,
        "report.json",
        &json!({ "command": "audit", "seed": seed, "box": ac.bx, "audit": audit }),
    )
}

fn threads() -> Outcome<()> {
    let Ok(raw) = std::env::var("MFA_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().ok().filter(|n| *n > 0).ok_or_else(|| {
        Failure::Config(format!(
            "MFA_THREADS must be a positive integer, got `{raw}`"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Config(e.to_string()))
}

fn run(cli: &Cli) -> Outcome<()> {
    threads()?;
    let text = fs::read_to_string(&cli.config)
        .map_err(|e| Failure::Config(format!("cannot read {}: {e}", cli.config.display())))?;
    let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Failure::Config(e.to_string()))?;
    fs::create_dir_all(&cli.out).map_err(|e| Failure::Io(format!("{}: {e}", cli.out.display())))?;
    let seed = cli.seed.or(cfg.seed).unwrap_or(0);
    match cli.command {
        Command::Optimize => cmd_optimize(&cfg, &cli.out),
        Command::Vlasov => cmd_vlasov(&cfg, &cli.out),
        Command::Relax => cmd_relax(&cfg, &cli.out, seed),
        Command::Converge => cmd_converge(&cfg, &cli.out, seed),
        Command::Hjb => cmd_hjb(&cfg, &cli.out),
        Command::Audit => cmd_audit(&cfg, &cli.out, seed),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let f = Failure::Config(e.to_string().trim_end().to_string());
            eprintln!("{}", f.report());
            return ExitCode::from(f.code());
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.report());
            ExitCode::from(f.code())
        }
    }
}
