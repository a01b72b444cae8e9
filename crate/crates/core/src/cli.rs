//! Command-line front end. A single JSON config carries the model constants at
//! top level plus optional per-command settings; every setting has a default.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::behavior::{run_and_classify, ClassificationResult, ClassifyOptions, Experiment};
use crate::equilibrium::{build_chain, solve_full_equilibrium, write_json, RightBc};
use crate::error::{Error, Result};
use crate::fbsim::{run, InitialData, RunOptions};
use crate::model::{basic_reproduction_number, eigen_condition, principal_eigenvalue, ModelParams};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_SOLVER: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "viralfront", version, about = "Viral spread with a free habitat boundary")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Suppress the JSON summary on standard output.
    #[arg(long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Integrate the free boundary problem.
    Simulate,
    /// Build the equilibrium chain (and optionally the full equilibrium).
    Equilibrium,
    /// Simulate and classify the long-time regime.
    Classify,
    /// Classify every point of a parameter grid.
    Sweep,
    /// Principal eigenvalue and the eigen predicate for given lengths.
    Eigen,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RightBcConfig {
    #[default]
    Zero,
    Chain,
}

/// One swept parameter: explicit `values`, or `points` equally spaced values on `[from, to]`.
#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
pub struct SweepAxis {
    pub param: String,
    #[serde(default)]
    pub values: Option<Vec<f64>>,
    #[serde(default)]
    pub from: Option<f64>,
    #[serde(default)]
    pub to: Option<f64>,
    #[serde(default)]
    pub points: Option<usize>,
}

impl SweepAxis {
    pub fn resolve(&self) -> Result<Vec<f64>> {
        let values = match (&self.values, self.from, self.to, self.points) {
            (Some(v), None, None, None) => v.clone(),
            (None, Some(from), Some(to), Some(points)) => match points {
                0 => Vec::new(),
                1 => vec![from],
                _ => (0..points)
                    .map(|i| from + (to - from) * i as f64 / (points - 1) as f64)
                    .collect(),
            },
            _ => {
                return Err(Error::Input(format!(
                    "axis `{}` needs either `values` or all of `from`, `to`, `points`",
                    self.param
                )))
            }
        };
        if values.is_empty() {
            return Err(Error::Input(format!("axis `{}` is empty", self.param)));
        }
        Ok(values)
    }
}

fn default_n() -> usize {
    2000
}
fn default_observers() -> usize {
    100
}
fn default_window() -> f64 {
    10.0
}
fn default_rtol() -> f64 {
    1e-6
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
pub struct RunConfig {
    #[serde(flatten)]
    pub params: ModelParams,
    /// End time; defaults to `200/min(c,q)` below threshold and `300/min(c,q)` above.
    #[serde(default)]
    pub t_end: Option<f64>,
    #[serde(default)]
    pub dt: Option<f64>,
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_observers")]
    pub observers: usize,
    #[serde(default)]
    pub snapshots: Vec<f64>,
    #[serde(default)]
    pub initial: InitialData,
    #[serde(default = "default_window")]
    pub window: f64,
    #[serde(default = "default_rtol")]
    pub rtol: f64,
    #[serde(default)]
    pub slack_rel: Option<f64>,
    #[serde(default)]
    pub slack_abs: Option<f64>,
    #[serde(default)]
    pub extinction_tol: Option<f64>,
    /// Also solve the full three-component equilibrium with this right boundary.
    #[serde(default)]
    pub full: Option<RightBcConfig>,
    #[serde(default)]
    pub sweep: Vec<SweepAxis>,
    #[serde(default)]
    pub l: Vec<f64>,
    #[serde(default)]
    pub eps: f64,
    /// Driving density for the eigen predicate; defaults to `θ/a`.
    #[serde(default)]
    pub beta: Option<f64>,
}

impl RunConfig {
    pub fn from_params(params: ModelParams) -> Self {
        let value = serde_json::to_value(params).expect("params serialize");
        serde_json::from_value(value).expect("defaults fill every other field")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Input(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Input(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate_allow_frozen_boundary()?;
        self.initial.validate()?;
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Input(format!("`{name}` must be positive, got {v}")))
            }
        };
        positive("window", self.window)?;
        positive("rtol", self.rtol)?;
        if let Some(t) = self.t_end {
            positive("t_end", t)?;
        }
        if let Some(dt) = self.dt {
            positive("dt", dt)?;
        }
        if self.n < 3 {
            return Err(Error::Input(format!("`n` must be at least 3, got {}", self.n)));
        }
        Ok(())
    }

    pub fn classify_options(&self) -> ClassifyOptions {
        let d = ClassifyOptions::default();
        ClassifyOptions {
            window: self.window,
            slack_rel: self.slack_rel.unwrap_or(d.slack_rel),
            slack_abs: self.slack_abs.unwrap_or(d.slack_abs),
            extinction_tol: self.extinction_tol.unwrap_or(d.extinction_tol),
            ..d
        }
    }

    pub fn experiment(&self) -> Experiment {
        Experiment {
            initial: self.initial.clone(),
            t_end: self.t_end,
            dt: self.dt,
            n: self.n,
            observers: self.observers,
            rtol: self.rtol,
            classify: self.classify_options(),
        }
    }
}

fn set_param(p: &mut ModelParams, name: &str, value: f64) -> Result<()> {
    let slot = match name {
        "theta" => &mut p.theta,
        "a" => &mut p.a,
        "b" => &mut p.b,
        "c" => &mut p.c,
        "k" => &mut p.k,
        "q" => &mut p.q,
        "d1" => &mut p.d1,
        "d2" => &mut p.d2,
        "d3" => &mut p.d3,
        "mu1" => &mut p.mu1,
        "mu2" => &mut p.mu2,
        "mu3" => &mut p.mu3,
        "h0" => &mut p.h0,
        other => return Err(Error::Input(format!("unknown sweep parameter `{other}`"))),
    };
    *slot = value;
    Ok(())
}

fn create_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Input(format!("output directory {}: {e}", dir.display())))
}

fn print_json<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("summary serializes"));
}

#[derive(Debug, Serialize)]
struct SimulateSummary {
    steps: usize,
    t_end: f64,
    h_end: f64,
    min_h_prime: f64,
    sup: [f64; 3],
    clipped_mass: f64,
}

pub fn cmd_simulate(cfg: &RunConfig, out: &Path, quiet: bool) -> Result<()> {
    create_out(out)?;
    let t_end = cfg.t_end.unwrap_or_else(|| crate::behavior::default_horizon(&cfg.params));
    let mut opts = RunOptions::uniform(t_end, cfg.n, cfg.observers.max(1));
    opts.dt = cfg.dt;
    opts.snapshots = cfg.snapshots.clone();
    let traj = run(&cfg.initial, &cfg.params, &opts)?;
    traj.write(out)?;
    if !quiet {
        let last = traj.final_record();
        print_json(&SimulateSummary {
            steps: traj.steps,
            t_end: last.t,
            h_end: last.h,
            min_h_prime: traj.min_h_prime,
            sup: last.sup,
            clipped_mass: traj.final_state.clipped,
        });
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct NoEquilibrium {
    #[serde(rename = "R0")]
    r0: f64,
    regime_hint: &'static str,
}

#[derive(Debug, Serialize)]
struct FullSummary {
    right_bc: RightBcConfig,
    farfield: Vec<f64>,
    converged_l: f64,
}

pub fn cmd_equilibrium(cfg: &RunConfig, out: &Path, quiet: bool) -> Result<()> {
    create_out(out)?;
    let p = &cfg.params;
    let r0 = basic_reproduction_number(p);
    if r0 <= 1.0 {
        let summary = NoEquilibrium {
            r0,
            regime_hint: "no positive solution",
        };
        write_json(&out.join("summary.json"), &summary)?;
        if !quiet {
            print_json(&summary);
        }
        return Ok(());
    }
    let chain = build_chain(p, cfg.window, cfg.rtol)?;
    chain.write(out, cfg.rtol)?;
    if let Some(bc) = cfg.full {
        let right = match bc {
            RightBcConfig::Zero => RightBc::Zero,
            RightBcConfig::Chain => RightBc::Chain,
        };
        let full = solve_full_equilibrium(p, cfg.window, cfg.rtol, right)?;
        full.profile
            .write_csv(BufWriter::new(File::create(out.join("full.csv"))?))?;
        write_json(
            &out.join("full_summary.json"),
            &FullSummary {
                right_bc: bc,
                farfield: full.farfield,
                converged_l: full.converged_l,
            },
        )?;
    }
    if !quiet {
        print_json(&chain.summary(cfg.rtol));
    }
    Ok(())
}

pub fn cmd_classify(cfg: &RunConfig, out: &Path, quiet: bool) -> Result<ClassificationResult> {
    create_out(out)?;
    let outcome = run_and_classify(&cfg.params, &cfg.experiment())?;
    outcome.trajectory.write(out)?;
    write_json(&out.join("classification.json"), &outcome.result)?;
    if !quiet {
        print_json(&outcome.result);
    }
    Ok(outcome.result)
}

/// One row of the sweep CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub params: ModelParams,
    pub result: std::result::Result<ClassificationResult, String>,
}

impl SweepRow {
    pub fn regime(&self) -> &str {
        match &self.result {
            Ok(r) => r.regime.as_str(),
            Err(_) => "Error",
        }
    }
}

/// Row-major cartesian product of the axes (last axis fastest).
pub fn sweep_points(base: &ModelParams, axes: &[SweepAxis]) -> Result<Vec<ModelParams>> {
    if axes.is_empty() {
        return Err(Error::Input("sweep needs at least one axis".into()));
    }
    let resolved: Vec<Vec<f64>> = axes.iter().map(SweepAxis::resolve).collect::<Result<_>>()?;
    let mut points = vec![*base];
    for (axis, values) in axes.iter().zip(&resolved) {
        let mut next = Vec::with_capacity(points.len() * values.len());
        for p in &points {
            for &v in values {
                let mut q = *p;
                set_param(&mut q, &axis.param, v)?;
                q.validate_allow_frozen_boundary()?;
                next.push(q);
            }
        }
        points = next;
    }
    Ok(points)
}

pub fn cmd_sweep(cfg: &RunConfig, out: &Path, quiet: bool) -> Result<Vec<SweepRow>> {
    create_out(out)?;
    let points = sweep_points(&cfg.params, &cfg.sweep)?;
    let exp = cfg.experiment();
    let rows: Vec<SweepRow> = points
        .par_iter()
        .map(|p| SweepRow {
            params: *p,
            result: run_and_classify(p, &exp)
                .map(|o| o.result)
                .map_err(|e| format!("{}: {e}", e.kind())),
        })
        .collect();
    let mut w = BufWriter::new(File::create(out.join("sweep.csv"))?);
    write_sweep_csv(&mut w, &rows)?;
    w.flush()?;
    if !quiet {
        let regimes: Vec<&str> = rows.iter().map(SweepRow::regime).collect();
        print_json(&serde_json::json!({ "points": rows.len(), "regimes": regimes }));
    }
    Ok(rows)
}

pub fn write_sweep_csv<W: Write>(mut w: W, rows: &[SweepRow]) -> std::io::Result<()> {
    writeln!(
        w,
        "theta,a,b,c,k,q,d1,d2,d3,mu1,mu2,mu3,h0,R0,persistence_condition,predicted,regime,worst_margin,quiescent,error"
    )?;
    for row in rows {
        for (_, v) in row.params.named_fields() {
            write!(w, "{v:.16e},")?;
        }
        write!(w, "{:.16e},", basic_reproduction_number(&row.params))?;
        match &row.result {
            Ok(r) => writeln!(
                w,
                "{},{},{},{:.16e},{},",
                r.persistence_condition,
                r.predicted.as_str(),
                r.regime.as_str(),
                r.worst_margin(),
                r.quiescent
            )?,
            Err(e) => writeln!(
                w,
                "{},{},Error,,,\"{}\"",
                crate::model::persistence_condition(&row.params),
                crate::behavior::predicted_regime(&row.params).as_str(),
                e.replace('"', "'")
            )?,
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EigenRow {
    pub l: f64,
    pub lambda1: f64,
    pub lambda1_l2: f64,
    pub condition: bool,
}

pub fn cmd_eigen(cfg: &RunConfig, out: &Path, quiet: bool) -> Result<Vec<EigenRow>> {
    if cfg.l.is_empty() {
        return Err(Error::Input("eigen needs a nonempty `l` list".into()));
    }
    let beta = cfg.beta.unwrap_or_else(|| cfg.params.virus_free_level());
    let rows = cfg
        .l
        .iter()
        .map(|&l| {
            let lambda1 = principal_eigenvalue(l)?;
            Ok(EigenRow {
                l,
                lambda1,
                lambda1_l2: lambda1 * l * l,
                condition: eigen_condition(&cfg.params, l, cfg.eps, beta)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    create_out(out)?;
    let mut w = BufWriter::new(File::create(out.join("eigen.csv"))?);
    writeln!(w, "l,lambda1,condition")?;
    for r in &rows {
        writeln!(w, "{:.16e},{:.16e},{}", r.l, r.lambda1, r.condition)?;
    }
    w.flush()?;
    if !quiet {
        print_json(&rows);
    }
    Ok(rows)
}

/// Exit code for an error: configuration problems are 2, solver failures 3.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidParameter { .. } | Error::Input(_) => EXIT_CONFIG,
        _ => EXIT_SOLVER,
    }
}

#[derive(Debug, Serialize)]
struct ErrorPayload<'a> {
    error: &'a str,
    message: String,
    exit_code: i32,
}

pub fn error_json(e: &Error) -> String {
    serde_json::to_string(&ErrorPayload {
        error: e.kind(),
        message: e.to_string(),
        exit_code: exit_code(e),
    })
    .expect("error payload serializes")
}

fn dispatch(cli: &Cli) -> Result<()> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Input("--config is required".into()))?;
    let cfg = RunConfig::load(path)?;
    match cli.command {
        Command::Simulate => cmd_simulate(&cfg, &cli.out, cli.quiet),
        Command::Equilibrium => cmd_equilibrium(&cfg, &cli.out, cli.quiet),
        Command::Classify => cmd_classify(&cfg, &cli.out, cli.quiet).map(|_| ()),
        Command::Sweep => cmd_sweep(&cfg, &cli.out, cli.quiet).map(|_| ()),
        Command::Eigen => cmd_eigen(&cfg, &cli.out, cli.quiet).map(|_| ()),
    }
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("{}", error_json(&e));
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(text: &str) -> RunConfig {
        RunConfig::parse(text).unwrap()
    }

    #[test]
    fn minimal_config_fills_defaults() {
        let c = cfg(r#"{"theta":1,"a":1,"b":2,"c":1,"k":1,"q":1}"#);
        assert_eq!(c.params, ModelParams::kinetic(1.0, 1.0, 2.0, 1.0, 1.0, 1.0));
        assert_eq!(c.n, 2000);
        assert_eq!(c.window, 10.0);
        assert_eq!(c.initial, InitialData::default());
        assert_eq!(RunConfig::from_params(c.params), c);
    }

    #[test]
    fn invalid_configs_are_config_errors() {
        for text in [
            r#"{"theta":-1,"a":1,"b":2,"c":1,"k":1,"q":1}"#,
            r#"{"theta":1,"a":1,"b":2,"c":1,"k":1}"#,
            r#"{"theta":1,"a":1,"b":2,"c":1,"k":1,"q":1,"n":2}"#,
            "not json",
        ] {
            let e = RunConfig::parse(text).unwrap_err();
            assert_eq!(exit_code(&e), EXIT_CONFIG, "{text}");
        }
    }

    #[test]
    fn sweep_axes_expand_row_major() {
        let base = ModelParams::kinetic(1.0, 1.0, 1.0, 1.0, 1.0, 1.0);
        let axes = vec![
            SweepAxis {
                param: "b".into(),
                values: Some(vec![1.0, 2.0]),
                from: None,
                to: None,
                points: None,
            },
            SweepAxis {
                param: "c".into(),
                values: None,
                from: Some(1.0),
                to: Some(3.0),
                points: Some(3),
            },
        ];
        let pts = sweep_points(&base, &axes).unwrap();
        let bc: Vec<(f64, f64)> = pts.iter().map(|p| (p.b, p.c)).collect();
        assert_eq!(bc, vec![(1.0, 1.0), (1.0, 2.0), (1.0, 3.0), (2.0, 1.0), (2.0, 2.0), (2.0, 3.0)]);
        let empty = SweepAxis {
            param: "b".into(),
            values: Some(vec![]),
            from: None,
            to: None,
            points: None,
        };
        assert!(matches!(sweep_points(&base, &[empty]), Err(Error::Input(_))));
        assert!(matches!(sweep_points(&base, &[]), Err(Error::Input(_))));
    }

    #[test]
    fn unknown_sweep_parameter_is_rejected() {
        let base = ModelParams::kinetic(1.0, 1.0, 1.0, 1.0, 1.0, 1.0);
        let axis = SweepAxis {
            param: "zeta".into(),
            values: Some(vec![1.0]),
            from: None,
            to: None,
            points: None,
        };
        assert_eq!(exit_code(&sweep_points(&base, &[axis]).unwrap_err()), EXIT_CONFIG);
    }

    #[test]
    fn error_payload_is_machine_readable() {
        let e = Error::AtTime {
            t: 0.0,
            source: Box::new(Error::StepSize { dt: 1.0, courant: 9.0 }),
        };
        let v: serde_json::Value = serde_json::from_str(&error_json(&e)).unwrap();
        assert_eq!(v["error"], "step_size");
        assert_eq!(v["exit_code"], 3);
    }

    #[test]
    fn eigen_rows_flip() {
        let c = cfg(r#"{"theta":1,"a":1,"b":2,"c":1,"k":1,"q":1,"l":[1,2,5,10,40]}"#);
        let dir = tempfile::tempdir().unwrap();
        let rows = cmd_eigen(&c, dir.path(), true).unwrap();
        assert!(!rows[0].condition);
        assert!(rows[4].condition);
        assert!(rows.iter().all(|r| (r.lambda1_l2 - std::f64::consts::PI.powi(2)).abs() < 1e-12));
    }
}
