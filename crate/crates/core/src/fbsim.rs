//! Time integration of the free boundary problem on `(0, h(t))` after the
//! change of variables `y = x/h(t)`:
//!
//! ```text
//! ∂t Uᵢ = (dᵢ/h²) ∂yy Uᵢ + (y h′/h) ∂y Uᵢ + fᵢ(U),   Uᵢ(t,0) = Uᵢ(t,1) = 0,
//! h′    = −Σ μᵢ (1/h) ∂y Uᵢ(t,1).
//! ```
//!
//! Each step treats diffusion implicitly and advection, reaction and the
//! boundary update explicitly.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::bvp::{interpolate, Grid, Profile};
use crate::error::{Error, Result};
use crate::linalg::solve_tridiagonal;
use crate::model::{homogeneous_fixed_point, ModelParams};

pub const DEFAULT_N: usize = 400;
pub const MAX_COURANT: f64 = 0.9;
pub const AUTO_COURANT: f64 = 0.5;
pub const MAX_AUTO_DT: f64 = 1e-2;
pub const CLIPPING_BUDGET: f64 = 1e-8;
const RETREAT_TOL: f64 = 1e-12;

/// Time, boundary position and normalized profiles on `y_j = j/(n+1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub t: f64,
    pub h: f64,
    pub u: [Vec<f64>; 3],
    /// Boundary speed used by the step that produced this state.
    pub h_prime: f64,
    /// Cumulative mass (`Σ|U|·dx`) removed by clipping.
    pub clipped: f64,
    /// Most negative value seen before clipping.
    pub min_before_clip: f64,
}

impl SimState {
    /// Interior node count.
    pub fn n(&self) -> usize {
        self.u[0].len() - 2
    }

    pub fn dy(&self) -> f64 {
        1.0 / (self.n() + 1) as f64
    }

    pub fn sup(&self, comp: usize) -> f64 {
        self.u[comp].iter().copied().fold(0.0, f64::max)
    }

    pub fn sups(&self) -> [f64; 3] {
        [self.sup(0), self.sup(1), self.sup(2)]
    }

    /// Stefan speed `−Σ μᵢ (1/h) ∂y Uᵢ(1)` with the one-sided three-point stencil.
    pub fn stefan_speed(&self, p: &ModelParams) -> f64 {
        let e = self.n() + 1;
        let dy = self.dy();
        self.u
            .iter()
            .zip(p.stefan())
            .map(|(c, mu)| {
                let slope = (3.0 * c[e] - 4.0 * c[e - 1] + c[e - 2]) / (2.0 * dy);
                -mu * slope / self.h
            })
            .sum()
    }

    /// Profiles in physical coordinates `x = y·h`.
    pub fn physical_profile(&self) -> Result<Profile> {
        Profile::new(Grid::new(self.h, self.n())?, self.u.to_vec())
    }

    /// Value of component `comp` at physical position `x`, zero outside `[0, h]`.
    pub fn value_at(&self, comp: usize, x: f64) -> f64 {
        if x < 0.0 || x > self.h {
            return 0.0;
        }
        interpolate(&self.u[comp], self.h * self.dy(), x)
    }
}

/// Initial densities on `[0, h0]`, zero at both ends.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialData {
    /// `amplitudeᵢ · sin(π x / h0)`.
    Bump { amplitudes: [f64; 3] },
    /// Uniformly spaced samples on `[0, h0]`, endpoints included.
    Sampled { values: [Vec<f64>; 3] },
}

impl Default for InitialData {
    fn default() -> Self {
        InitialData::Bump {
            amplitudes: [1.0, 1.0, 1.0],
        }
    }
}

impl InitialData {
    pub fn validate(&self) -> Result<()> {
        match self {
            InitialData::Bump { amplitudes } => {
                if amplitudes.iter().any(|a| !(*a >= 0.0) || !a.is_finite()) {
                    return Err(Error::Input("bump amplitudes must be finite and nonnegative".into()));
                }
            }
            InitialData::Sampled { values } => {
                for (i, c) in values.iter().enumerate() {
                    if c.len() < 3 {
                        return Err(Error::Input(format!("component {} needs at least 3 samples", i + 1)));
                    }
                    if c.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                        return Err(Error::Input(format!(
                            "component {} samples must be finite and nonnegative",
                            i + 1
                        )));
                    }
                    if c[0] != 0.0 || *c.last().unwrap() != 0.0 {
                        return Err(Error::Input(format!("component {} must vanish at both ends", i + 1)));
                    }
                }
            }
        }
        Ok(())
    }

    /// Initial state on `n` interior nodes at `t = 0`, `h = h0`.
    pub fn state(&self, p: &ModelParams, n: usize) -> Result<SimState> {
        self.validate()?;
        if n < 3 {
            return Err(Error::Input(format!("need at least 3 interior nodes, got {n}")));
        }
        let ys: Vec<f64> = (0..n + 2).map(|j| j as f64 / (n + 1) as f64).collect();
        let u: [Vec<f64>; 3] = std::array::from_fn(|i| {
            let mut c: Vec<f64> = match self {
                InitialData::Bump { amplitudes } => ys
                    .iter()
                    .map(|y| amplitudes[i] * (std::f64::consts::PI * y).sin())
                    .collect(),
                InitialData::Sampled { values } => {
                    let dy = 1.0 / (values[i].len() - 1) as f64;
                    ys.iter().map(|&y| interpolate(&values[i], dy, y)).collect()
                }
            };
            c[0] = 0.0;
            c[n + 1] = 0.0;
            c
        });
        let mut state = SimState {
            t: 0.0,
            h: p.h0,
            u,
            h_prime: 0.0,
            clipped: 0.0,
            min_before_clip: 0.0,
        };
        state.h_prime = state.stefan_speed(p);
        Ok(state)
    }

    pub fn sup(&self, comp: usize) -> f64 {
        match self {
            InitialData::Bump { amplitudes } => amplitudes[comp],
            InitialData::Sampled { values } => values[comp].iter().copied().fold(0.0, f64::max),
        }
    }
}

/// Courant number `|h′|·dt/(h·dy)` of the explicit advection term.
pub fn courant(state: &SimState, h_prime: f64, dt: f64) -> f64 {
    h_prime.abs() * dt / (state.h * state.dy())
}

/// Largest step allowed by the automatic controller.
pub fn auto_dt(state: &SimState, h_prime: f64) -> f64 {
    if h_prime.abs() > 0.0 {
        MAX_AUTO_DT.min(AUTO_COURANT * state.dy() * state.h / h_prime.abs())
    } else {
        MAX_AUTO_DT
    }
}

/// One IMEX step.
pub fn step(state: &SimState, p: &ModelParams, dt: f64) -> Result<SimState> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::Input(format!("time step {dt} must be positive")));
    }
    let h_prime = state.stefan_speed(p);
    if h_prime < -RETREAT_TOL {
        return Err(Error::BoundaryRetreat { h_prime });
    }
    let cfl = courant(state, h_prime, dt);
    if cfl > MAX_COURANT {
        return Err(Error::StepSize { dt, courant: cfl });
    }
    let n = state.n();
    let dy = state.dy();
    let h_new = state.h + dt * h_prime;
    let drift = h_prime / state.h;
    let [u1, u2, u3] = &state.u;
    let mut next: [Vec<f64>; 3] = Default::default();
    let mut min_before = state.min_before_clip;
    let mut clipped = state.clipped;
    for (i, d) in p.diffusivities().into_iter().enumerate() {
        let c = &state.u[i];
        let mut rhs = vec![0.0; n];
        for j in 1..=n {
            let y = j as f64 * dy;
            let advection = y * drift * (c[j + 1] - c[j - 1]) / (2.0 * dy);
            let reaction = match i {
                0 => p.f1(u1[j], u3[j]),
                1 => p.f2(u1[j], u2[j], u3[j]),
                _ => p.f3(u2[j], u3[j]),
            };
            rhs[j - 1] = c[j] + dt * (advection + reaction);
        }
        let r = dt * d / (h_new * h_new * dy * dy);
        solve_tridiagonal(&vec![-r; n], &vec![1.0 + 2.0 * r; n], &vec![-r; n], &mut rhs);
        let mut out = vec![0.0; n + 2];
        for (j, v) in rhs.into_iter().enumerate() {
            if v < 0.0 {
                min_before = min_before.min(v);
                clipped += -v * dy * h_new;
                out[j + 1] = 0.0;
            } else {
                out[j + 1] = v;
            }
        }
        next[i] = out;
    }
    Ok(SimState {
        t: state.t + dt,
        h: h_new,
        u: next,
        h_prime,
        clipped,
        min_before_clip: min_before,
    })
}

/// Values recorded at an observer time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Record {
    pub t: f64,
    pub h: f64,
    pub h_prime: f64,
    pub sup: [f64; 3],
}

#[derive(Debug, Clone)]
pub struct Snapshot {
    pub t: f64,
    pub profile: Profile,
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub t_end: f64,
    /// Fixed step; `None` picks `min(1e-2, 0.5·dy·h/|h′|)` every step.
    pub dt: Option<f64>,
    pub n: usize,
    /// Times at which a [`Record`] is taken; `t_end` is always recorded.
    pub observers: Vec<f64>,
    /// Times at which a physical-coordinate profile is kept.
    pub snapshots: Vec<f64>,
}

impl RunOptions {
    /// `count` equally spaced observers on `(0, t_end]`, no snapshots.
    pub fn uniform(t_end: f64, n: usize, count: usize) -> Self {
        Self {
            t_end,
            dt: None,
            n,
            observers: (1..=count).map(|i| t_end * i as f64 / count as f64).collect(),
            snapshots: Vec::new(),
        }
    }
}

/// Summary of a completed run.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub params: ModelParams,
    pub records: Vec<Record>,
    pub snapshots: Vec<Snapshot>,
    pub final_state: SimState,
    pub steps: usize,
    /// Smallest boundary speed over all accepted steps.
    pub min_h_prime: f64,
    /// Comparison bounds `C₁ = max(θ/a, ‖u₁₀‖)`, `C₂ = max(bC₁/c, ‖u₂₀‖)`, `C₃ = max(kC₂/q, ‖u₃₀‖)`.
    pub caps: [f64; 3],
}

impl Trajectory {
    pub fn final_record(&self) -> &Record {
        self.records.last().expect("a run records at least its end time")
    }

    /// `t,h,hprime,sup_u1,sup_u2,sup_u3` rows.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t,h,hprime,sup_u1,sup_u2,sup_u3")?;
        for r in &self.records {
            writeln!(
                w,
                "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
                r.t, r.h, r.h_prime, r.sup[0], r.sup[1], r.sup[2]
            )?;
        }
        Ok(())
    }

    /// Trajectory CSV, one CSV per snapshot and `manifest.json` in `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.write_csv(BufWriter::new(File::create(dir.join("trajectory.csv"))?))?;
        let mut entries = Vec::new();
        for (i, s) in self.snapshots.iter().enumerate() {
            let file = format!("snapshot_{i:04}.csv");
            s.profile.write_csv(BufWriter::new(File::create(dir.join(&file))?))?;
            entries.push(ManifestEntry {
                t: s.t,
                h: s.profile.grid().l(),
                file,
            });
        }
        let manifest = Manifest {
            trajectory: "trajectory.csv".into(),
            steps: self.steps,
            min_h_prime: self.min_h_prime,
            clipped_mass: self.final_state.clipped,
            caps: self.caps,
            snapshots: entries,
        };
        crate::equilibrium::write_json(&dir.join("manifest.json"), &manifest)
    }
}

#[derive(Debug, Serialize)]
struct ManifestEntry {
    t: f64,
    h: f64,
    file: String,
}

#[derive(Debug, Serialize)]
struct Manifest {
    trajectory: String,
    steps: usize,
    min_h_prime: f64,
    clipped_mass: f64,
    caps: [f64; 3],
    snapshots: Vec<ManifestEntry>,
}

pub fn comparison_caps(p: &ModelParams, initial: &InitialData) -> [f64; 3] {
    let c1 = p.virus_free_level().max(initial.sup(0));
    let c2 = (p.b * c1 / p.c).max(initial.sup(1));
    let c3 = (p.k * c2 / p.q).max(initial.sup(2));
    [c1, c2, c3]
}

/// Integrates to `t_end`, landing exactly on every observer and snapshot time.
pub fn run(initial: &InitialData, p: &ModelParams, opts: &RunOptions) -> Result<Trajectory> {
    p.validate_allow_frozen_boundary()?;
    if !(opts.t_end > 0.0) || !opts.t_end.is_finite() {
        return Err(Error::Input(format!("end time {} must be positive", opts.t_end)));
    }
    if let Some(dt) = opts.dt {
        if !(dt > 0.0) {
            return Err(Error::Input(format!("time step {dt} must be positive")));
        }
    }
    let mut stops: Vec<f64> = opts
        .observers
        .iter()
        .chain(&opts.snapshots)
        .copied()
        .filter(|t| *t > 0.0 && *t < opts.t_end)
        .chain([opts.t_end])
        .collect();
    stops.sort_by(f64::total_cmp);
    stops.dedup();
    let is_observer = |t: f64| t == opts.t_end || opts.observers.contains(&t);
    let is_snapshot = |t: f64| opts.snapshots.contains(&t);

    let mut state = initial.state(p, opts.n)?;
    let record = |s: &SimState| Record {
        t: s.t,
        h: s.h,
        h_prime: s.stefan_speed(p),
        sup: s.sups(),
    };
    let mut records = vec![record(&state)];
    let mut snapshots = Vec::new();
    if opts.snapshots.contains(&0.0) {
        snapshots.push(Snapshot {
            t: 0.0,
            profile: state.physical_profile()?,
        });
    }
    let mut steps = 0;
    let mut min_h_prime = f64::INFINITY;
    for stop in stops {
        while state.t < stop {
            let remaining = stop - state.t;
            let speed = state.stefan_speed(p);
            let dt = opts.dt.unwrap_or_else(|| auto_dt(&state, speed));
            let (dt, last) = if dt >= remaining * (1.0 - 1e-12) {
                (remaining, true)
            } else {
                (dt, false)
            };
            let at = state.t;
            state = step(&state, p, dt).map_err(|e| Error::AtTime { t: at, source: Box::new(e) })?;
            if last {
                state.t = stop;
            }
            steps += 1;
            min_h_prime = min_h_prime.min(state.h_prime);
            if state.clipped > CLIPPING_BUDGET {
                return Err(Error::AtTime {
                    t: state.t,
                    source: Box::new(Error::ClippingBudget { clipped: state.clipped }),
                });
            }
        }
        if is_observer(stop) {
            records.push(record(&state));
        }
        if is_snapshot(stop) {
            snapshots.push(Snapshot {
                t: stop,
                profile: state.physical_profile()?,
            });
        }
    }
    Ok(Trajectory {
        params: *p,
        records,
        snapshots,
        final_state: state,
        steps,
        min_h_prime,
        caps: comparison_caps(p, initial),
    })
}

/// State of the comparison ODE for (infected cells, virus).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OdeState {
    pub t: f64,
    pub z2: f64,
    pub z3: f64,
}

/// RK4 trajectory of `z₂′ = f₂(θ/a+ε, z₂, z₃)`, `z₃′ = f₃(z₂, z₃)` starting at `t0`.
#[derive(Debug, Clone)]
pub struct OdeTrajectory {
    pub rho: f64,
    pub states: Vec<OdeState>,
}

impl OdeTrajectory {
    pub fn last(&self) -> &OdeState {
        self.states.last().unwrap()
    }

    /// Linear interpolation at `t`, clamped to the integrated range.
    pub fn at(&self, t: f64) -> (f64, f64) {
        let s = &self.states;
        if t <= s[0].t {
            return (s[0].z2, s[0].z3);
        }
        let idx = s.partition_point(|st| st.t < t);
        if idx >= s.len() {
            let l = s.last().unwrap();
            return (l.z2, l.z3);
        }
        let (a, b) = (&s[idx - 1], &s[idx]);
        let w = (t - a.t) / (b.t - a.t);
        (a.z2 + w * (b.z2 - a.z2), a.z3 + w * (b.z3 - a.z3))
    }

    /// The homogeneous fixed point for the driving density, or the origin below threshold.
    pub fn expected_limit(&self, p: &ModelParams) -> (f64, f64) {
        homogeneous_fixed_point(p, self.rho).unwrap_or((0.0, 0.0))
    }
}

pub fn ode_comparison(p: &ModelParams, eps: f64, z0: (f64, f64), t0: f64, t_end: f64, dt: f64) -> Result<OdeTrajectory> {
    if !(z0.0 >= 0.0 && z0.1 >= 0.0) {
        return Err(Error::Input("comparison ODE needs nonnegative initial data".into()));
    }
    if !(dt > 0.0) || !(t_end >= t0) || !(eps >= 0.0) {
        return Err(Error::Input("comparison ODE needs dt > 0, eps >= 0 and t_end >= t0".into()));
    }
    let rho = p.virus_free_level() + eps;
    let rhs = |z2: f64, z3: f64| (p.f2(rho, z2, z3.max(0.0)), p.f3(z2, z3.max(0.0)));
    let mut states = vec![OdeState { t: t0, z2: z0.0, z3: z0.1 }];
    let (mut t, mut z2, mut z3) = (t0, z0.0, z0.1);
    while t < t_end {
        let h = dt.min(t_end - t);
        let k1 = rhs(z2, z3);
        let k2 = rhs(z2 + 0.5 * h * k1.0, z3 + 0.5 * h * k1.1);
        let k3 = rhs(z2 + 0.5 * h * k2.0, z3 + 0.5 * h * k2.1);
        let k4 = rhs(z2 + h * k3.0, z3 + h * k3.1);
        z2 += h / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0);
        z3 += h / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1);
        t = if t_end - t <= dt { t_end } else { t + h };
        states.push(OdeState { t, z2, z3 });
    }
    Ok(OdeTrajectory { rho, states })
}

/// First observer time with `sup u₁ < θ/a + ε`, with the record taken there.
pub fn alignment(p: &ModelParams, eps: f64, traj: &Trajectory) -> Option<Record> {
    let level = p.virus_free_level() + eps;
    traj.records.iter().find(|r| r.sup[0] < level).copied()
}

/// Comparison ODE from the alignment time with `z₀ = (C, C)`, `C` the larger of
/// the infected-cell and virus sup norms there.
pub fn comparison_from_alignment(p: &ModelParams, eps: f64, traj: &Trajectory, dt: f64) -> Result<Option<OdeTrajectory>> {
    let Some(rec) = alignment(p, eps, traj) else {
        return Ok(None);
    };
    let c = rec.sup[1].max(rec.sup[2]);
    let t_end = traj.final_record().t;
    ode_comparison(p, eps, (c, c), rec.t, t_end, dt).map(Some)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DominanceReport {
    pub t_align: Option<f64>,
    /// Largest `(sup u₂ − z₂)⁺` and `(sup u₃ − z₃)⁺` over observers at or after alignment.
    pub excess: [f64; 2],
    pub observations: usize,
    /// Whether the simulation starts below the ODE at alignment.
    pub ordered_at_start: bool,
    /// Alignment never happened.
    pub inconclusive: bool,
}

pub fn dominance_check(traj: &Trajectory, ode: Option<&OdeTrajectory>) -> DominanceReport {
    let Some(ode) = ode else {
        return DominanceReport {
            t_align: None,
            excess: [0.0; 2],
            observations: 0,
            ordered_at_start: false,
            inconclusive: true,
        };
    };
    let t0 = ode.states[0].t;
    let mut excess = [0.0f64; 2];
    let mut observations = 0;
    let mut ordered_at_start = true;
    for r in traj.records.iter().filter(|r| r.t >= t0) {
        let (z2, z3) = ode.at(r.t);
        let e = [(r.sup[1] - z2).max(0.0), (r.sup[2] - z3).max(0.0)];
        if observations == 0 {
            ordered_at_start = e[0] == 0.0 && e[1] == 0.0;
        }
        excess[0] = excess[0].max(e[0]);
        excess[1] = excess[1].max(e[1]);
        observations += 1;
    }
    DominanceReport {
        t_align: Some(t0),
        excess,
        observations,
        ordered_at_start,
        inconclusive: false,
    }
}
