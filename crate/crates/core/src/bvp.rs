//! Truncated two-point boundary value problems on `[0, l]`.
//!
//! Every problem has the form `−dᵢ·Uᵢ″ = fᵢ(x, U)` with `Uᵢ(0) = 0` and a
//! prescribed nonnegative value at `x = l`. Three couplings are supported:
//!
//! * [`Coupling::Scalar`]: uninfected cells alone, optionally under a
//!   prescribed virus density `w(x)`: `f = θ − aU − bU·w/(1+w)`.
//! * [`Coupling::PairGivenRho`]: infected cells and virus driven by a
//!   prescribed uninfected density `ρ(x)`.
//! * [`Coupling::FullTriple`]: the complete equilibrium system.
//!
//! The discretization is second-order central differences on a uniform grid.
//! Systems are solved by damped Newton iteration on the block-tridiagonal
//! Jacobian; the pair problem also has the alternating fixed-point map and a
//! monotone upper/lower iteration.

use std::io::Write;

use crate::error::{Error, Result};
use crate::linalg::{solve_tridiagonal, BlockTridiagonal};
use crate::model::ModelParams;

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_NEWTON_ITERS: usize = 50;
pub const DEFAULT_ALTERNATING_SWEEPS: usize = 200;
const MAX_STEP_HALVINGS: usize = 30;
const BRACKET_SLACK: f64 = 1e-10;

/// Uniform mesh on `[0, l]` with `n` interior nodes, `x_j = j·dx` for `j = 0..=n+1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    l: f64,
    n: usize,
}

impl Grid {
    pub fn new(l: f64, n: usize) -> Result<Self> {
        if !(l > 0.0) || !l.is_finite() {
            return Err(Error::Domain(format!("grid length {l} must be positive and finite")));
        }
        if n < 3 {
            return Err(Error::Domain(format!("grid needs at least 3 interior nodes, got {n}")));
        }
        Ok(Self { l, n })
    }

    /// Grid on `[0, l]` whose spacing is as close to `dx` as an integer cell count allows.
    pub fn with_spacing(l: f64, dx: f64) -> Result<Self> {
        if !(dx > 0.0) {
            return Err(Error::Domain(format!("grid spacing {dx} must be positive")));
        }
        let cells = (l / dx).round().max(4.0) as usize;
        Self::new(l, cells - 1)
    }

    pub fn l(&self) -> f64 {
        self.l
    }

    /// Interior node count.
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dx(&self) -> f64 {
        self.l / (self.n + 1) as f64
    }

    /// Total node count including both boundary nodes.
    pub fn len(&self) -> usize {
        self.n + 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn x(&self, j: usize) -> f64 {
        if j == self.n + 1 {
            self.l
        } else {
            j as f64 * self.dx()
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.len()).map(|j| self.x(j)).collect()
    }
}

/// Sampled values of one or more components on a [`Grid`], boundary nodes included.
#[derive(Debug, Clone, PartialEq)]
pub struct Profile {
    grid: Grid,
    values: Vec<Vec<f64>>,
}

impl Profile {
    pub fn new(grid: Grid, values: Vec<Vec<f64>>) -> Result<Self> {
        if values.is_empty() || values.len() > 3 {
            return Err(Error::Domain(format!(
                "profile must have 1 to 3 components, got {}",
                values.len()
            )));
        }
        for (i, comp) in values.iter().enumerate() {
            if comp.len() != grid.len() {
                return Err(Error::Domain(format!(
                    "component {i} has {} samples, grid has {} nodes",
                    comp.len(),
                    grid.len()
                )));
            }
            if let Some(j) = comp.iter().position(|v| !v.is_finite()) {
                return Err(Error::Domain(format!("component {i} is not finite at node {j}")));
            }
        }
        Ok(Self { grid, values })
    }

    pub fn from_fn(grid: Grid, comps: usize, f: impl Fn(usize, f64) -> f64) -> Result<Self> {
        let values = (0..comps)
            .map(|i| grid.nodes().into_iter().map(|x| f(i, x)).collect())
            .collect();
        Self::new(grid, values)
    }

    pub fn zeros(grid: Grid, comps: usize) -> Self {
        Self {
            grid,
            values: vec![vec![0.0; grid.len()]; comps],
        }
    }

    /// Constant interior values with the given Dirichlet data at both ends.
    pub fn plateau(grid: Grid, interior: &[f64], left: &[f64], right: &[f64]) -> Self {
        let values = interior
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let mut c = vec![v; grid.len()];
                c[0] = left[i];
                c[grid.n() + 1] = right[i];
                c
            })
            .collect();
        Self { grid, values }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn comps(&self) -> usize {
        self.values.len()
    }

    pub fn component(&self, i: usize) -> &[f64] {
        &self.values[i]
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn into_values(self) -> Vec<Vec<f64>> {
        self.values
    }

    /// Linear interpolation of component `comp` at `x`, clamped to the end values outside `[0, l]`.
    pub fn sample(&self, comp: usize, x: f64) -> f64 {
        interpolate(&self.values[comp], self.grid.dx(), x)
    }

    /// Restriction to the nodes in `[0, window]`.
    pub fn restrict(&self, window: f64) -> Result<Profile> {
        let dx = self.grid.dx();
        let last = ((window / dx) + 1e-9).floor() as usize;
        let last = last.min(self.grid.n() + 1);
        let grid = Grid::new(last as f64 * dx, last.saturating_sub(1))?;
        let values = self.values.iter().map(|c| c[..=last].to_vec()).collect();
        Ok(Profile { grid, values })
    }

    /// Componentwise max-norm distance to a profile on the same grid.
    pub fn max_abs_diff(&self, other: &Profile) -> f64 {
        assert_eq!(self.grid.len(), other.grid.len(), "profiles live on different grids");
        self.values
            .iter()
            .zip(&other.values)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.values
            .iter()
            .flatten()
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Smallest interior value over all components, with its (component, node).
    pub fn min_interior(&self) -> (f64, usize, usize) {
        let mut best = (f64::INFINITY, 0, 0);
        for (i, c) in self.values.iter().enumerate() {
            for (j, &v) in c.iter().enumerate().take(self.grid.n() + 1).skip(1) {
                if v < best.0 {
                    best = (v, i, j);
                }
            }
        }
        best
    }

    /// CSV with header `x,comp1[,comp2[,comp3]]` and 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let mut header = String::from("x");
        for i in 0..self.comps() {
            header.push_str(&format!(",comp{}", i + 1));
        }
        writeln!(w, "{header}")?;
        for j in 0..self.grid.len() {
            write!(w, "{:.16e}", self.grid.x(j))?;
            for c in &self.values {
                write!(w, ",{:.16e}", c[j])?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("csv output is ASCII")
    }
}

/// Linear interpolation on uniformly spaced samples starting at x = 0.
pub(crate) fn interpolate(samples: &[f64], dx: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return samples[0];
    }
    let s = x / dx;
    let j = s.floor() as usize;
    if j + 1 >= samples.len() {
        return *samples.last().unwrap();
    }
    let t = s - j as f64;
    samples[j] * (1.0 - t) + samples[j + 1] * t
}

/// Which kinetics the problem carries.
#[derive(Debug, Clone, PartialEq)]
pub enum Coupling {
    /// One component: `θ − aU − bU·w/(1+w)` with optional virus samples `w`.
    Scalar { virus: Option<Vec<f64>> },
    /// Two components (U₂, U₃) driven by uninfected-cell samples `ρ`.
    PairGivenRho { rho: Vec<f64> },
    /// All three components.
    FullTriple,
}

impl Coupling {
    pub fn comps(&self) -> usize {
        match self {
            Coupling::Scalar { .. } => 1,
            Coupling::PairGivenRho { .. } => 2,
            Coupling::FullTriple => 3,
        }
    }
}

/// A truncated boundary value problem. The left boundary value is always zero.
#[derive(Debug, Clone, PartialEq)]
pub struct BvpSpec {
    pub grid: Grid,
    pub params: ModelParams,
    pub diffusivities: Vec<f64>,
    pub right: Vec<f64>,
    pub coupling: Coupling,
}

impl BvpSpec {
    /// Uninfected-cell problem with diffusivity `d1`.
    pub fn scalar(params: ModelParams, grid: Grid, right: f64, virus: Option<Vec<f64>>) -> Result<Self> {
        let spec = Self {
            grid,
            params,
            diffusivities: vec![params.d1],
            right: vec![right],
            coupling: Coupling::Scalar { virus },
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn pair(params: ModelParams, grid: Grid, rho: Vec<f64>, right: [f64; 2]) -> Result<Self> {
        let spec = Self {
            grid,
            params,
            diffusivities: vec![params.d2, params.d3],
            right: right.to_vec(),
            coupling: Coupling::PairGivenRho { rho },
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn triple(params: ModelParams, grid: Grid, right: [f64; 3]) -> Result<Self> {
        let spec = Self {
            grid,
            params,
            diffusivities: params.diffusivities().to_vec(),
            right: right.to_vec(),
            coupling: Coupling::FullTriple,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn comps(&self) -> usize {
        self.coupling.comps()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.comps();
        if self.diffusivities.len() != m || self.right.len() != m {
            return Err(Error::Domain(format!(
                "expected {m} diffusivities and boundary values"
            )));
        }
        if self.diffusivities.iter().any(|d| !(*d > 0.0)) {
            return Err(Error::Domain("diffusivities must be positive".into()));
        }
        if self.right.iter().any(|r| !(*r >= 0.0) || !r.is_finite()) {
            return Err(Error::Domain("right boundary values must be finite and nonnegative".into()));
        }
        let coefficient = match &self.coupling {
            Coupling::Scalar { virus } => virus.as_ref(),
            Coupling::PairGivenRho { rho } => Some(rho),
            Coupling::FullTriple => None,
        };
        if let Some(c) = coefficient {
            if c.len() != self.grid.len() {
                return Err(Error::Domain(format!(
                    "coefficient has {} samples, grid has {} nodes",
                    c.len(),
                    self.grid.len()
                )));
            }
            if c.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                return Err(Error::Domain("coefficient samples must be finite and nonnegative".into()));
            }
        }
        Ok(())
    }

    fn check_boundary(&self, profile: &Profile) -> Result<()> {
        if profile.comps() != self.comps() || profile.grid().len() != self.grid.len() {
            return Err(Error::Precondition("profile does not match the problem shape".into()));
        }
        let last = self.grid.n() + 1;
        for i in 0..self.comps() {
            let c = profile.component(i);
            if c[0] != 0.0 || (c[last] - self.right[i]).abs() > 1e-12 * self.right[i].max(1.0) {
                return Err(Error::Precondition(format!(
                    "component {} does not carry the boundary data",
                    i + 1
                )));
            }
        }
        Ok(())
    }

    /// Constant caps `θ/a`, `bβ/c`, `bkβ/(cq)` (β the largest uninfected density)
    /// bounding every nonnegative solution; the default Newton start.
    pub fn upper_caps(&self) -> Vec<f64> {
        let p = &self.params;
        let beta_m = match &self.coupling {
            Coupling::PairGivenRho { rho } => rho.iter().copied().fold(0.0, f64::max),
            _ => p.virus_free_level(),
        };
        let caps = [
            p.virus_free_level(),
            p.b * beta_m / p.c,
            p.b * p.k * beta_m / (p.c * p.q),
        ];
        let caps: Vec<f64> = match self.coupling {
            Coupling::Scalar { .. } => vec![caps[0]],
            Coupling::PairGivenRho { .. } => vec![caps[1], caps[2]],
            Coupling::FullTriple => caps.to_vec(),
        };
        caps.iter()
            .zip(&self.right)
            .map(|(c, r)| c.max(*r))
            .collect()
    }

    /// Upper caps in the interior with the boundary data attached.
    pub fn default_initial(&self) -> Profile {
        let zeros = vec![0.0; self.comps()];
        Profile::plateau(self.grid, &self.upper_caps(), &zeros, &self.right)
    }
}

/// Saturating virus factor `w/(1+w)`, continued linearly for negative `w`
/// so Newton iterates that undershoot zero stay away from the pole at −1.
#[inline]
fn sat(w: f64) -> f64 {
    w / (1.0 + w.max(0.0))
}

#[inline]
fn sat_prime(w: f64) -> f64 {
    let s = 1.0 + w.max(0.0);
    1.0 / (s * s)
}

#[inline]
fn inv_sat(w: f64) -> f64 {
    1.0 / (1.0 + w.max(0.0))
}

#[inline]
fn inv_sat_prime(w: f64) -> f64 {
    if w > 0.0 {
        -1.0 / ((1.0 + w) * (1.0 + w))
    } else {
        0.0
    }
}

/// Kinetics and their Jacobian at node `j` for the local state `u`.
fn local_kinetics(spec: &BvpSpec, j: usize, u: &[f64; 3]) -> ([f64; 3], [[f64; 3]; 3]) {
    let p = &spec.params;
    let mut f = [0.0; 3];
    let mut jac = [[0.0; 3]; 3];
    match &spec.coupling {
        Coupling::Scalar { virus } => {
            let w = virus.as_ref().map_or(0.0, |v| v[j]);
            let loss = p.a + p.b * w / (1.0 + w);
            f[0] = p.theta - loss * u[0];
            jac[0][0] = -loss;
        }
        Coupling::PairGivenRho { rho } => {
            let r = rho[j];
            let (v, w) = (u[0], u[1]);
            f[0] = p.b * r * sat(w) - p.c * v;
            f[1] = p.k * v * inv_sat(w) - p.q * w;
            jac[0][0] = -p.c;
            jac[0][1] = p.b * r * sat_prime(w);
            jac[1][0] = p.k * inv_sat(w);
            jac[1][1] = p.k * v * inv_sat_prime(w) - p.q;
        }
        Coupling::FullTriple => {
            let (s, v, w) = (u[0], u[1], u[2]);
            let infection = p.b * s * sat(w);
            f[0] = p.theta - p.a * s - infection;
            f[1] = infection - p.c * v;
            f[2] = p.k * v * inv_sat(w) - p.q * w;
            jac[0][0] = -p.a - p.b * sat(w);
            jac[0][2] = -p.b * s * sat_prime(w);
            jac[1][0] = p.b * sat(w);
            jac[1][1] = -p.c;
            jac[1][2] = p.b * s * sat_prime(w);
            jac[2][1] = p.k * inv_sat(w);
            jac[2][2] = p.k * v * inv_sat_prime(w) - p.q;
        }
    }
    (f, jac)
}

fn local_state(values: &[Vec<f64>], j: usize) -> [f64; 3] {
    let mut u = [0.0; 3];
    for (i, c) in values.iter().enumerate() {
        u[i] = c[j];
    }
    u
}

/// Node-major residual `dᵢ·D²Uᵢ + fᵢ(U)` at interior nodes, and its max norm.
fn newton_residual(spec: &BvpSpec, values: &[Vec<f64>]) -> (Vec<f64>, f64) {
    let m = spec.comps();
    let n = spec.grid.n();
    let inv_dx2 = 1.0 / spec.grid.dx().powi(2);
    let mut r = vec![0.0; n * m];
    let mut norm = 0.0f64;
    for j in 1..=n {
        let u = local_state(values, j);
        let (f, _) = local_kinetics(spec, j, &u);
        for i in 0..m {
            let c = &values[i];
            let lap = (c[j - 1] - 2.0 * c[j] + c[j + 1]) * inv_dx2;
            let v = spec.diffusivities[i] * lap + f[i];
            r[(j - 1) * m + i] = v;
            norm = norm.max(v.abs());
        }
    }
    (r, norm)
}

fn newton_jacobian(spec: &BvpSpec, values: &[Vec<f64>]) -> BlockTridiagonal {
    let m = spec.comps();
    let n = spec.grid.n();
    let inv_dx2 = 1.0 / spec.grid.dx().powi(2);
    let mut a = BlockTridiagonal::zeros(m, n);
    for j in 1..=n {
        let u = local_state(values, j);
        let (_, jac) = local_kinetics(spec, j, &u);
        let row = j - 1;
        for i in 0..m {
            let d = spec.diffusivities[i] * inv_dx2;
            a.lower[row][i][i] = d;
            a.upper[row][i][i] = d;
            for c in 0..m {
                a.diag[row][i][c] = jac[i][c];
            }
            a.diag[row][i][i] -= 2.0 * d;
        }
    }
    a
}

/// Max-norm residual of `−dᵢUᵢ″ = fᵢ` evaluated straight from the model
/// kinetics, independent of the Newton linearization.
pub fn pde_residual(spec: &BvpSpec, profile: &Profile) -> f64 {
    let p = &spec.params;
    let dx = spec.grid.dx();
    let vals = profile.values();
    let mut worst = 0.0f64;
    for j in 1..=spec.grid.n() {
        let lap = |c: &[f64]| (c[j + 1] + c[j - 1] - 2.0 * c[j]) / (dx * dx);
        let pos = |c: &[f64]| c[j].max(0.0);
        let f: Vec<f64> = match &spec.coupling {
            Coupling::Scalar { virus } => {
                let w = virus.as_ref().map_or(0.0, |v| v[j]);
                vec![p.f1(vals[0][j], w)]
            }
            Coupling::PairGivenRho { rho } => vec![
                p.f2(rho[j], vals[0][j], pos(&vals[1])),
                p.f3(vals[0][j], pos(&vals[1])),
            ],
            Coupling::FullTriple => vec![
                p.f1(vals[0][j], pos(&vals[2])),
                p.f2(vals[0][j], vals[1][j], pos(&vals[2])),
                p.f3(vals[1][j], pos(&vals[2])),
            ],
        };
        for (i, fi) in f.iter().enumerate() {
            worst = worst.max((spec.diffusivities[i] * lap(&vals[i]) + fi).abs());
        }
    }
    worst
}

/// Zeroes tiny negative round-off at convergence; anything larger is a spurious root.
fn enforce_positivity(values: &mut [Vec<f64>], n: usize) -> Result<()> {
    let scale = values
        .iter()
        .flatten()
        .fold(1.0f64, |m, v| m.max(v.abs()));
    let slack = 1e-12 * scale;
    for (i, c) in values.iter_mut().enumerate() {
        for (j, v) in c.iter_mut().enumerate().take(n + 1).skip(1) {
            if *v < -slack {
                return Err(Error::Positivity {
                    comp: i,
                    node: j,
                    value: *v,
                });
            }
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    }
    Ok(())
}

/// Damped Newton iteration. Each accepted step strictly lowers the max-norm
/// residual; the step length is halved up to 30 times to achieve that.
pub fn solve_newton(spec: &BvpSpec, initial: &Profile, tol: f64, max_iter: usize) -> Result<Profile> {
    spec.validate()?;
    spec.check_boundary(initial)?;
    if !(tol > 0.0) {
        return Err(Error::Precondition(format!("tolerance {tol} must be positive")));
    }
    let m = spec.comps();
    let n = spec.grid.n();
    let mut values = initial.values().to_vec();
    let (mut r, mut norm) = newton_residual(spec, &values);
    for _ in 0..max_iter {
        if norm <= tol {
            break;
        }
        let jac = newton_jacobian(spec, &values);
        let rhs: Vec<f64> = r.iter().map(|v| -v).collect();
        let delta = jac.solve(&rhs).ok_or(Error::Iteration {
            iterations: 0,
            residual: norm,
        })?;
        let mut lambda = 1.0;
        let mut accepted = false;
        for _ in 0..=MAX_STEP_HALVINGS {
            let mut trial = values.clone();
            for j in 1..=n {
                for i in 0..m {
                    trial[i][j] += lambda * delta[(j - 1) * m + i];
                }
            }
            let (tr, tnorm) = newton_residual(spec, &trial);
            if tnorm < norm {
                values = trial;
                r = tr;
                norm = tnorm;
                accepted = true;
                break;
            }
            lambda *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if !(norm <= tol) {
        return Err(Error::Iteration {
            iterations: max_iter,
            residual: norm,
        });
    }
    enforce_positivity(&mut values, n)?;
    Profile::new(spec.grid, values)
}

/// Result of the alternating fixed-point iteration.
#[derive(Debug, Clone)]
pub struct AlternatingOutcome {
    pub profile: Profile,
    pub sweeps: usize,
    /// Largest interior (U₂, U₃) over every iterate, start included.
    pub peak: [f64; 2],
}

/// Smallest ζ meeting `bβ/(c(1+ζ)) < 1` and `k/(q(1+ζ)) < 1` (and ζ > 1), doubled.
pub fn default_zeta(p: &ModelParams, beta: f64) -> f64 {
    let lower = (p.b * beta / p.c - 1.0).max(p.k / p.q - 1.0).max(1.0);
    2.0 * lower
}

fn check_zeta(p: &ModelParams, beta: f64, zeta: f64) -> Result<()> {
    let first = p.b * beta / (p.c * (1.0 + zeta));
    let second = p.k / (p.q * (1.0 + zeta));
    if !(first < 1.0 && second < 1.0) {
        return Err(Error::Precondition(format!(
            "ζ = {zeta} too small: bβ/(c(1+ζ)) = {first:.4}, k/(q(1+ζ)) = {second:.4} must both be < 1"
        )));
    }
    Ok(())
}

/// Alternating map on the pair problem with `U₂(l) = U₃(l) = ζ`: solve the
/// infected-cell equation for the current virus, then the virus equation for
/// the new infected cells, starting from the constant upper solution ζ.
pub fn solve_alternating(spec: &BvpSpec, zeta: f64, tol: f64, max_iter: usize) -> Result<AlternatingOutcome> {
    let Coupling::PairGivenRho { rho } = &spec.coupling else {
        return Err(Error::Precondition("alternating map needs the pair problem".into()));
    };
    let beta = rho.iter().copied().fold(0.0, f64::max);
    check_zeta(&spec.params, beta, zeta)?;
    let mut spec = spec.clone();
    spec.right = vec![zeta, zeta];
    let start = Profile::plateau(spec.grid, &[zeta, zeta], &[0.0, 0.0], &[zeta, zeta]);
    solve_alternating_from(&spec, &start, tol, max_iter)
}

/// Alternating map from an arbitrary start carrying the boundary data of `spec`.
/// Starting from an upper solution the iterates decrease to the maximal solution.
/// Stops once the sweep increment or the residual drops to `tol`.
pub fn solve_alternating_from(
    spec: &BvpSpec,
    start: &Profile,
    tol: f64,
    max_iter: usize,
) -> Result<AlternatingOutcome> {
    spec.validate()?;
    let Coupling::PairGivenRho { rho } = &spec.coupling else {
        return Err(Error::Precondition("alternating map needs the pair problem".into()));
    };
    spec.check_boundary(start)?;
    let p = spec.params;
    let n = spec.grid.n();
    let inv_dx2 = 1.0 / spec.grid.dx().powi(2);
    let (d2, d3) = (spec.diffusivities[0] * inv_dx2, spec.diffusivities[1] * inv_dx2);
    let [mut u2, mut u3]: [Vec<f64>; 2] = start.values().to_vec().try_into().unwrap();
    let interior_max = |c: &[f64]| c[1..=n].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut peak = [interior_max(&u2), interior_max(&u3)];
    let mut last = f64::INFINITY;
    for sweep in 1..=max_iter {
        // infected cells: −d₂U₂″ + cU₂ = bρ·U₃/(1+U₃)
        let mut rhs: Vec<f64> = (1..=n).map(|j| p.b * rho[j] * sat(u3[j])).collect();
        rhs[n - 1] += d2 * spec.right[0];
        solve_tridiagonal(&vec![-d2; n], &vec![2.0 * d2 + p.c; n], &vec![-d2; n], &mut rhs);
        let mut next2 = vec![0.0; n + 2];
        next2[1..=n].copy_from_slice(&rhs);
        next2[n + 1] = spec.right[0];

        // virus: −d₃U₃″ + qU₃ = kU₂/(1+U₃), monotone in U₃, solved by Newton
        let mut next3 = u3.clone();
        next3[n + 1] = spec.right[1];
        for _ in 0..100 {
            let mut g = vec![0.0; n];
            let mut diag = vec![0.0; n];
            for j in 1..=n {
                let w = next3[j];
                g[j - 1] = -(d3 * (2.0 * w - next3[j - 1] - next3[j + 1]) + p.q * w
                    - p.k * next2[j] * inv_sat(w));
                diag[j - 1] = 2.0 * d3 + p.q - p.k * next2[j] * inv_sat_prime(w);
            }
            solve_tridiagonal(&vec![-d3; n], &diag, &vec![-d3; n], &mut g);
            let mut step = 0.0f64;
            for j in 1..=n {
                next3[j] += g[j - 1];
                step = step.max(g[j - 1].abs());
            }
            if step <= 1e-15 * interior_max(&next3).max(1.0) {
                break;
            }
        }

        let inc = next2
            .iter()
            .zip(&u2)
            .chain(next3.iter().zip(&u3))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        u2 = next2;
        u3 = next3;
        peak[0] = peak[0].max(interior_max(&u2));
        peak[1] = peak[1].max(interior_max(&u3));
        let profile = Profile::new(spec.grid, vec![u2.clone(), u3.clone()])?;
        last = inc;
        if inc <= tol || pde_residual(spec, &profile) <= tol {
            let mut values = profile.into_values();
            enforce_positivity(&mut values, n)?;
            return Ok(AlternatingOutcome {
                profile: Profile::new(spec.grid, values)?,
                sweeps: sweep,
                peak,
            });
        }
    }
    Err(Error::Iteration {
        iterations: max_iter,
        residual: last,
    })
}

/// Shift constants making each `fᵢ + Mᵢ·Uᵢ` nondecreasing in `Uᵢ` over the bracket.
fn monotone_shifts(spec: &BvpSpec, upper: &Profile) -> Vec<f64> {
    let p = &spec.params;
    let max_of = |i: usize| upper.component(i).iter().copied().fold(0.0, f64::max);
    match &spec.coupling {
        Coupling::Scalar { .. } => vec![p.a + p.b],
        Coupling::PairGivenRho { .. } => vec![p.c, p.q + p.k * max_of(0)],
        Coupling::FullTriple => vec![p.a + p.b, p.c, p.q + p.k * max_of(1)],
    }
}

/// Kinetics of component `i` at node `j`, with every other component taken from
/// `coupled` and component `i` itself from `own`.
fn mixed_rate(spec: &BvpSpec, i: usize, j: usize, own: &[f64; 3], coupled: &[f64; 3]) -> f64 {
    let p = &spec.params;
    match &spec.coupling {
        Coupling::Scalar { virus } => {
            let w = virus.as_ref().map_or(0.0, |v| v[j]);
            p.f1(own[0], w)
        }
        Coupling::PairGivenRho { rho } => match i {
            0 => p.f2(rho[j], own[0], coupled[1].max(0.0)),
            _ => p.f3(coupled[0], own[1].max(0.0)),
        },
        Coupling::FullTriple => match i {
            0 => p.f1(own[0], coupled[2].max(0.0)),
            1 => p.f2(coupled[0], own[1], coupled[2].max(0.0)),
            _ => p.f3(coupled[1], own[2].max(0.0)),
        },
    }
}

/// Coupled upper/lower monotone iteration under the mixed quasimonotone structure:
/// `f₁` decreases in U₃, `f₂` increases in U₁ and U₃, `f₃` increases in U₂.
///
/// Each sweep solves `−dᵢUᵢ″ + MᵢUᵢ = MᵢÛᵢ + fᵢ(Û)` for both bracket ends, where
/// for the upper end the increasing couplings read the old upper profile and
/// the decreasing ones the old lower profile (and symmetrically for the lower end).
pub fn monotone_bracket(
    spec: &BvpSpec,
    lower: &Profile,
    upper: &Profile,
    sweeps: usize,
) -> Result<(Profile, Profile)> {
    spec.validate()?;
    let m = spec.comps();
    let n = spec.grid.n();
    for prof in [lower, upper] {
        if prof.comps() != m || prof.grid().len() != spec.grid.len() {
            return Err(Error::Precondition("bracket does not match the problem shape".into()));
        }
    }
    for i in 0..m {
        for (j, (lo, up)) in lower.component(i).iter().zip(upper.component(i)).enumerate() {
            if lo > up {
                return Err(Error::Precondition(format!(
                    "lower exceeds upper in component {} at node {j}",
                    i + 1
                )));
            }
        }
    }
    // Couplings that decrease: only f₁ in U₃ for the full triple.
    let decreasing = |i: usize, c: usize| matches!(spec.coupling, Coupling::FullTriple) && i == 0 && c == 2;
    let shifts = monotone_shifts(spec, upper);
    let inv_dx2 = 1.0 / spec.grid.dx().powi(2);
    let mut lo = lower.values().to_vec();
    let mut up = upper.values().to_vec();
    for _ in 0..sweeps {
        let mut new_lo = lo.clone();
        let mut new_up = up.clone();
        for i in 0..m {
            let d = spec.diffusivities[i] * inv_dx2;
            let mi = shifts[i];
            for (target, own_src, upper_end) in [(&mut new_up, &up, true), (&mut new_lo, &lo, false)] {
                let mut rhs = vec![0.0; n];
                for j in 1..=n {
                    let own = local_state(own_src, j);
                    let mut coupled = [0.0; 3];
                    for c in 0..m {
                        let take_upper = upper_end != decreasing(i, c);
                        coupled[c] = if take_upper { up[c][j] } else { lo[c][j] };
                    }
                    rhs[j - 1] = mi * own[i] + mixed_rate(spec, i, j, &own, &coupled);
                }
                rhs[n - 1] += d * spec.right[i];
                solve_tridiagonal(&vec![-d; n], &vec![2.0 * d + mi; n], &vec![-d; n], &mut rhs);
                target[i][0] = 0.0;
                target[i][1..=n].copy_from_slice(&rhs);
                target[i][n + 1] = spec.right[i];
            }
        }
        for i in 0..m {
            for j in 0..spec.grid.len() {
                if new_lo[i][j] > new_up[i][j] + BRACKET_SLACK {
                    return Err(Error::Consistency(format!(
                        "bracket crossed in component {} at node {j}: {} > {}",
                        i + 1,
                        new_lo[i][j],
                        new_up[i][j]
                    )));
                }
            }
        }
        lo = new_lo;
        up = new_up;
    }
    Ok((Profile::new(spec.grid, lo)?, Profile::new(spec.grid, up)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

/// One-sided second-order three-point derivative of component `comp` at a boundary.
pub fn boundary_flux(profile: &Profile, side: Side, comp: usize) -> f64 {
    let c = profile.component(comp);
    let dx = profile.grid().dx();
    match side {
        Side::Left => (-3.0 * c[0] + 4.0 * c[1] - c[2]) / (2.0 * dx),
        Side::Right => {
            let e = c.len() - 1;
            (3.0 * c[e] - 4.0 * c[e - 1] + c[e - 2]) / (2.0 * dx)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{farfield_limits, ubar1_closed_form};
    use proptest::prelude::*;

    fn r0_two() -> ModelParams {
        ModelParams::kinetic(1.0, 1.0, 2.0, 1.0, 1.0, 1.0)
    }

    fn ubar1_samples(p: &ModelParams, grid: &Grid) -> Vec<f64> {
        grid.nodes().iter().map(|&x| ubar1_closed_form(p, p.d1, x)).collect()
    }

    fn scalar_error(n: usize) -> f64 {
        let p = ModelParams::kinetic(1.0, 1.0, 1.0, 1.0, 1.0, 1.0);
        let grid = Grid::new(10.0, n).unwrap();
        let right = ubar1_closed_form(&p, 1.0, 10.0);
        let spec = BvpSpec::scalar(p, grid, right, None).unwrap();
        let sol = solve_newton(&spec, &Profile::plateau(grid, &[0.0], &[0.0], &[right]), 1e-11, 50).unwrap();
        grid.nodes()
            .iter()
            .zip(sol.component(0))
            .map(|(&x, u)| (u - ubar1_closed_form(&p, 1.0, x)).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn grid_geometry() {
        let g = Grid::new(2.0, 3).unwrap();
        assert_eq!(g.dx(), 0.5);
        assert_eq!(g.nodes(), vec![0.0, 0.5, 1.0, 1.5, 2.0]);
        assert!(Grid::new(1.0, 2).is_err());
        assert!(Grid::new(0.0, 10).is_err());
        let g = Grid::with_spacing(40.0, 0.1).unwrap();
        assert_eq!(g.n(), 399);
        assert!((g.dx() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn scalar_logistic_matches_closed_form() {
        let p = ModelParams::kinetic(1.0, 1.0, 1.0, 1.0, 1.0, 1.0);
        let grid = Grid::new(40.0, 399).unwrap();
        let right = ubar1_closed_form(&p, 1.0, 40.0);
        let spec = BvpSpec::scalar(p, grid, right, None).unwrap();
        let zero = Profile::plateau(grid, &[0.0], &[0.0], &[right]);
        let sol = solve_newton(&spec, &zero, DEFAULT_TOL, DEFAULT_NEWTON_ITERS).unwrap();
        let dx = grid.dx();
        for (j, &x) in grid.nodes().iter().enumerate() {
            let exact = ubar1_closed_form(&p, 1.0, x);
            assert!((sol.component(0)[j] - exact).abs() <= dx * dx, "node {j}");
        }
        assert!(pde_residual(&spec, &sol) <= DEFAULT_TOL);
    }

    #[test]
    fn scalar_scheme_is_second_order() {
        let coarse = scalar_error(99);
        let fine = scalar_error(199);
        assert!(coarse / fine >= 3.5, "ratio {}", coarse / fine);
    }

    #[test]
    fn pair_without_source_collapses_to_zero() {
        let grid = Grid::new(20.0, 199).unwrap();
        let spec = BvpSpec::pair(r0_two(), grid, vec![0.0; grid.len()], [0.0, 0.0]).unwrap();
        let sol = solve_newton(&spec, &spec.default_initial(), DEFAULT_TOL, DEFAULT_NEWTON_ITERS).unwrap();
        assert!(sol.max_abs() <= 1e-9);
    }

    #[test]
    fn pair_plateau_approaches_farfield() {
        let p = r0_two();
        let grid = Grid::new(80.0, 799).unwrap();
        let spec = BvpSpec::pair(p, grid, ubar1_samples(&p, &grid), [0.0, 0.0]).unwrap();
        let sol = solve_newton(&spec, &spec.default_initial(), DEFAULT_TOL, DEFAULT_NEWTON_ITERS).unwrap();
        let (v, w) = farfield_limits(&p, 1.0).unwrap();
        let mid = grid.n() / 2;
        assert!((sol.component(0)[mid] - v).abs() < 1e-3 * v);
        assert!((sol.component(1)[mid] - w).abs() < 1e-3 * w);
        assert!(pde_residual(&spec, &sol) <= DEFAULT_TOL);
        // Hopf-type positivity at the fixed end
        assert!(boundary_flux(&sol, Side::Left, 0) > 0.0);
        assert!(boundary_flux(&sol, Side::Left, 1) > 0.0);
        assert!(boundary_flux(&sol, Side::Right, 0) < 0.0);
    }

    #[test]
    fn newton_rejects_bad_boundary_data() {
        let grid = Grid::new(10.0, 50).unwrap();
        let spec = BvpSpec::scalar(r0_two(), grid, 0.5, None).unwrap();
        let wrong = Profile::plateau(grid, &[0.2], &[0.0], &[0.0]);
        assert!(matches!(solve_newton(&spec, &wrong, 1e-10, 10), Err(Error::Precondition(_))));
    }

    #[test]
    fn newton_reports_nonconvergence() {
        let p = r0_two();
        let grid = Grid::new(80.0, 799).unwrap();
        let spec = BvpSpec::pair(p, grid, ubar1_samples(&p, &grid), [0.0, 0.0]).unwrap();
        match solve_newton(&spec, &spec.default_initial(), 1e-10, 1) {
            Err(Error::Iteration { iterations, residual }) => {
                assert_eq!(iterations, 1);
                assert!(residual > 1e-10);
            }
            other => panic!("expected iteration error, got {other:?}"),
        }
    }

    #[test]
    fn alternating_iterates_stay_below_zeta() {
        let p = r0_two();
        let grid = Grid::new(30.0, 299).unwrap();
        let beta = 1.0;
        let zeta = default_zeta(&p, beta);
        let spec = BvpSpec::pair(p, grid, vec![beta; grid.len()], [0.0, 0.0]).unwrap();
        let out = solve_alternating(&spec, zeta, 1e-10, 200).unwrap();
        assert!(out.peak[0] <= zeta && out.peak[1] <= zeta);
    }

    #[test]
    fn alternating_rejects_small_zeta() {
        let p = r0_two();
        let grid = Grid::new(30.0, 99).unwrap();
        let spec = BvpSpec::pair(p, grid, vec![1.0; grid.len()], [0.0, 0.0]).unwrap();
        // bβ/(c(1+ζ)) = 2/1.5 > 1
        assert!(matches!(solve_alternating(&spec, 0.5, 1e-10, 10), Err(Error::Precondition(_))));
    }

    #[test]
    fn alternating_without_source_is_zero_after_one_sweep() {
        let grid = Grid::new(20.0, 99).unwrap();
        let spec = BvpSpec::pair(r0_two(), grid, vec![0.0; grid.len()], [0.0, 0.0]).unwrap();
        let out = solve_alternating_from(&spec, &spec.default_initial(), 1e-10, 10).unwrap();
        assert_eq!(out.sweeps, 1);
        assert_eq!(out.profile.max_abs(), 0.0);
    }

    #[test]
    fn alternating_profile_is_monotone() {
        let p = r0_two();
        let grid = Grid::new(40.0, 399).unwrap();
        let spec = BvpSpec::pair(p, grid, ubar1_samples(&p, &grid), [0.0, 0.0]).unwrap();
        let out = solve_alternating(&spec, 10.0, 1e-10, 200).unwrap();
        for c in out.profile.values() {
            assert!(c.windows(2).all(|w| w[1] >= w[0]));
        }
    }

    #[test]
    fn bracket_fixes_exact_solution() {
        let p = r0_two();
        let grid = Grid::new(40.0, 199).unwrap();
        let spec = BvpSpec::pair(p, grid, ubar1_samples(&p, &grid), [0.0, 0.0]).unwrap();
        let sol = solve_newton(&spec, &spec.default_initial(), 1e-12, 50).unwrap();
        let (lo, up) = monotone_bracket(&spec, &sol, &sol, 5).unwrap();
        assert!(lo.max_abs_diff(&sol) < 1e-10);
        assert!(up.max_abs_diff(&sol) < 1e-10);
    }

    #[test]
    fn bracket_rejects_crossed_input() {
        let grid = Grid::new(10.0, 20).unwrap();
        let spec = BvpSpec::pair(r0_two(), grid, vec![1.0; grid.len()], [0.0, 0.0]).unwrap();
        let hi = spec.default_initial();
        let lo = Profile::zeros(grid, 2);
        assert!(matches!(monotone_bracket(&spec, &hi, &lo, 1), Err(Error::Precondition(_))));
    }

    #[test]
    fn bracket_from_caps_stays_inside_caps() {
        let p = r0_two();
        let grid = Grid::new(40.0, 199).unwrap();
        let spec = BvpSpec::pair(p, grid, ubar1_samples(&p, &grid), [0.0, 0.0]).unwrap();
        let caps = spec.upper_caps();
        let upper = spec.default_initial();
        let lower = Profile::zeros(grid, 2);
        let mut width = f64::INFINITY;
        let (mut lo, mut up) = (lower, upper);
        for _ in 0..10 {
            let (l2, u2) = monotone_bracket(&spec, &lo, &up, 1).unwrap();
            let w = l2.max_abs_diff(&u2);
            assert!(w <= width + 1e-12);
            width = w;
            lo = l2;
            up = u2;
        }
        for i in 0..2 {
            assert!(lo.component(i).iter().all(|v| *v >= 0.0));
            assert!(up.component(i).iter().all(|v| *v <= caps[i] + 1e-12));
        }
        let sol = solve_newton(&spec, &spec.default_initial(), 1e-10, 50).unwrap();
        for i in 0..2 {
            for j in 0..grid.len() {
                assert!(sol.component(i)[j] <= up.component(i)[j] + 1e-9);
                assert!(sol.component(i)[j] >= lo.component(i)[j] - 1e-9);
            }
        }
    }

    #[test]
    fn flux_is_exact_for_quadratics() {
        let grid = Grid::new(1.0, 9).unwrap();
        let lin = Profile::from_fn(grid, 1, |_, x| x).unwrap();
        assert!((boundary_flux(&lin, Side::Left, 0) - 1.0).abs() < 1e-12);
        assert!((boundary_flux(&lin, Side::Right, 0) - 1.0).abs() < 1e-12);
        let quad = Profile::from_fn(grid, 1, |_, x| x * x).unwrap();
        assert!(boundary_flux(&quad, Side::Left, 0).abs() < 1e-12);
        assert!((boundary_flux(&quad, Side::Right, 0) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn restrict_keeps_window_nodes() {
        let grid = Grid::new(40.0, 399).unwrap();
        let prof = Profile::from_fn(grid, 2, |i, x| x + i as f64).unwrap();
        let r = prof.restrict(10.0).unwrap();
        assert_eq!(r.grid().len(), 101);
        assert!((r.grid().l() - 10.0).abs() < 1e-12);
        assert_eq!(r.component(1)[100], prof.component(1)[100]);
    }

    #[test]
    fn csv_header_and_precision() {
        let grid = Grid::new(1.0, 3).unwrap();
        let prof = Profile::from_fn(grid, 2, |i, x| x / 3.0 + i as f64).unwrap();
        let csv = prof.to_csv_string();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("x,comp1,comp2"));
        for (j, line) in lines.enumerate() {
            let fields: Vec<f64> = line.split(',').map(|s| s.parse().unwrap()).collect();
            assert_eq!(fields[0], grid.x(j));
            assert_eq!(fields[1], prof.component(0)[j]);
            assert_eq!(fields[2], prof.component(1)[j]);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn larger_rho_never_lowers_solution(scale in 1.0..2.0f64, bump in 0.0..0.5f64) {
            let p = r0_two();
            let grid = Grid::new(30.0, 149).unwrap();
            let base = ubar1_samples(&p, &grid);
            let bigger: Vec<f64> = base.iter().map(|r| r * scale + bump * r.min(1.0)).collect();
            let s1 = BvpSpec::pair(p, grid, base, [0.0, 0.0]).unwrap();
            let s2 = BvpSpec::pair(p, grid, bigger, [0.0, 0.0]).unwrap();
            let a = solve_newton(&s1, &s1.default_initial(), 1e-11, 50).unwrap();
            let b = solve_newton(&s2, &s2.default_initial(), 1e-11, 50).unwrap();
            for i in 0..2 {
                for j in 0..grid.len() {
                    prop_assert!(b.component(i)[j] >= a.component(i)[j] - 1e-9);
                }
            }
        }

        #[test]
        fn residual_paths_agree(n in 20usize..120, amp in 0.1..2.0f64) {
            let p = r0_two();
            let grid = Grid::new(15.0, n).unwrap();
            let spec = BvpSpec::triple(p, grid, [0.0, 0.0, 0.0]).unwrap();
            let prof = Profile::from_fn(grid, 3, |i, x| {
                amp * (1.0 + i as f64) * (std::f64::consts::PI * x / 15.0).sin().max(0.0)
            }).unwrap();
            let (_, newton_norm) = newton_residual(&spec, prof.values());
            let independent = pde_residual(&spec, &prof);
            prop_assert!((newton_norm - independent).abs() <= 1e-9 * independent.max(1.0));
        }
    }

    #[test]
    fn solutions_grow_with_domain_length() {
        let p = r0_two();
        let solve = |l: f64| {
            let grid = Grid::with_spacing(l, 0.1).unwrap();
            let spec = BvpSpec::pair(p, grid, ubar1_samples(&p, &grid), [0.0, 0.0]).unwrap();
            solve_newton(&spec, &spec.default_initial(), 1e-11, 50).unwrap()
        };
        let short = solve(20.0);
        let long = solve(40.0);
        for i in 0..2 {
            for j in 0..short.grid().len() {
                assert!(long.component(i)[j] >= short.component(i)[j] - 1e-9);
            }
        }
    }
}
