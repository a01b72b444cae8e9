//! Half-line equilibria by domain continuation, and the four-link chain of
//! upper (`ol`) and lower (`ud`) equilibria bounding long-time behavior.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use serde::Serialize;

use crate::bvp::{self, BvpSpec, Coupling, Grid, Profile};
use crate::error::{Error, Result};
use crate::model::{
    basic_reproduction_number, farfield_limits, persistence_condition, udbar1_farfield, ModelParams,
};

/// Truncated solution restricted to a window, with its plateau value.
#[derive(Debug, Clone)]
pub struct HalfLineSolution {
    pub window: f64,
    /// Restriction of the converged truncated solution to `[0, window]`.
    pub profile: Profile,
    /// Restriction to `[0, converged_l/2]`, used to sample the solution as a coefficient.
    pub reach: Profile,
    pub farfield: Vec<f64>,
    pub converged_l: f64,
}

impl HalfLineSolution {
    /// Value at `x ≥ 0`, extended by the far-field constant beyond the reach.
    pub fn sample(&self, comp: usize, x: f64) -> f64 {
        if x >= self.reach.grid().l() {
            self.farfield[comp]
        } else {
            self.reach.sample(comp, x)
        }
    }

    pub fn samples_on(&self, comp: usize, grid: &Grid) -> Vec<f64> {
        grid.nodes().into_iter().map(|x| self.sample(comp, x)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContinuationOptions {
    /// Relative max-norm change of the window restriction that ends continuation.
    pub rtol: f64,
    pub l0: f64,
    pub l_max: f64,
    /// Interior nodes at `l0`; the spacing stays fixed as `l` doubles.
    pub n0: usize,
    pub newton_tol: f64,
}

impl ContinuationOptions {
    /// `l0 = max(40·√(max dᵢ / min(a, c, q)), 4·window)`, six doublings allowed, 400 nodes at `l0`.
    pub fn for_params(p: &ModelParams, window: f64, rtol: f64) -> Self {
        let l0 = default_l0(p, window);
        Self {
            rtol,
            l0,
            l_max: l0 * 64.0,
            n0: 400,
            newton_tol: bvp::DEFAULT_TOL,
        }
    }
}

pub fn default_l0(p: &ModelParams, window: f64) -> f64 {
    let dmax = p.d1.max(p.d2).max(p.d3);
    let rmin = p.a.min(p.c).min(p.q);
    (40.0 * (dmax / rmin).sqrt()).max(4.0 * window)
}

fn relative_change(new: &Profile, old: &Profile) -> f64 {
    new.max_abs_diff(old) / new.max_abs().max(f64::MIN_POSITIVE)
}

/// Mean over `[0.4·l, 0.6·l]`, far from both the fixed end and the truncation layer.
fn plateau_mean(profile: &Profile, comp: usize) -> f64 {
    let l = profile.grid().l();
    let (lo, hi) = (0.4 * l, 0.6 * l);
    let (sum, count) = profile
        .grid()
        .nodes()
        .iter()
        .zip(profile.component(comp))
        .filter(|(x, _)| **x >= lo && **x <= hi)
        .fold((0.0, 0usize), |(s, c), (_, v)| (s + v, c + 1));
    sum / count.max(1) as f64
}

fn check_pair_threshold(spec: &BvpSpec) -> Result<()> {
    if let Coupling::PairGivenRho { rho } = &spec.coupling {
        let p = &spec.params;
        let beta = rho.iter().copied().fold(0.0, f64::max);
        if p.b * p.k * beta <= p.c * p.q {
            return Err(Error::Threshold(format!(
                "bkβ = {:.6} does not exceed cq = {:.6}",
                p.b * p.k * beta,
                p.c * p.q
            )));
        }
    }
    Ok(())
}

/// Solves the truncated problem built by `template` at `l0, 2l0, 4l0, …` with a
/// fixed spacing chosen so the window edge is a grid node, until the window
/// restriction changes by less than `rtol` between doublings.
pub fn continue_to_halfline(
    template: &dyn Fn(Grid) -> Result<BvpSpec>,
    window: f64,
    opts: &ContinuationOptions,
) -> Result<HalfLineSolution> {
    if !(window > 0.0 && window < opts.l0 && opts.l0 <= opts.l_max) {
        return Err(Error::Precondition(format!(
            "need 0 < window < l0 <= l_max, got window = {window}, l0 = {}, l_max = {}",
            opts.l0, opts.l_max
        )));
    }
    let target = opts.l0 / (opts.n0 + 1) as f64;
    let window_cells = (window / target).ceil();
    let dx = window / window_cells;
    let mut l = opts.l0;
    let mut previous: Option<Profile> = None;
    loop {
        let cells = (l / dx).round() as usize;
        let grid = Grid::new(cells as f64 * dx, cells - 1)?;
        let spec = template(grid)?;
        check_pair_threshold(&spec)?;
        let solution = bvp::solve_newton(&spec, &spec.default_initial(), opts.newton_tol, bvp::DEFAULT_NEWTON_ITERS)?;
        let restricted = solution.restrict(window)?;
        let change = previous
            .as_ref()
            .map_or(f64::INFINITY, |old| relative_change(&restricted, old));
        if change < opts.rtol {
            let farfield = (0..solution.comps()).map(|i| plateau_mean(&solution, i)).collect();
            return Ok(HalfLineSolution {
                window,
                profile: restricted,
                reach: solution.restrict(0.5 * grid.l())?,
                farfield,
                converged_l: grid.l(),
            });
        }
        if 2.0 * l > opts.l_max * (1.0 + 1e-12) {
            return Err(Error::Continuation { l: grid.l(), change });
        }
        previous = Some(restricted);
        l *= 2.0;
    }
}

fn scalar_link(p: ModelParams, virus: Option<&HalfLineSolution>, window: f64, opts: &ContinuationOptions) -> Result<HalfLineSolution> {
    continue_to_halfline(
        &|grid| {
            let w = virus.map(|v| v.samples_on(1, &grid));
            BvpSpec::scalar(p, grid, 0.0, w)
        },
        window,
        opts,
    )
}

fn pair_link(p: ModelParams, rho: &HalfLineSolution, window: f64, opts: &ContinuationOptions) -> Result<HalfLineSolution> {
    continue_to_halfline(
        &|grid| BvpSpec::pair(p, grid, rho.samples_on(0, &grid), [0.0, 0.0]),
        window,
        opts,
    )
}

/// The upper (`ol`) and lower (`ud`) half-line equilibria on a common window.
#[derive(Debug, Clone)]
pub struct EquilibriumChain {
    pub params: ModelParams,
    pub r0: f64,
    pub persistence_condition: bool,
    /// Uninfected cells without infection loss.
    pub ol_u1: HalfLineSolution,
    /// Infected cells and virus driven by `ol_u1`.
    pub ol_u23: HalfLineSolution,
    /// Uninfected cells under the virus load of `ol_u23`.
    pub ud_u1: HalfLineSolution,
    /// Infected cells and virus driven by `ud_u1`; absent when the persistence condition fails.
    pub ud_u23: Option<HalfLineSolution>,
}

impl EquilibriumChain {
    pub fn is_complete(&self) -> bool {
        self.ud_u23.is_some()
    }

    pub fn window(&self) -> f64 {
        self.ol_u1.window
    }

    /// `ol` triple at node `j` of the window grid.
    pub fn upper_at(&self, j: usize) -> [f64; 3] {
        [
            self.ol_u1.profile.component(0)[j],
            self.ol_u23.profile.component(0)[j],
            self.ol_u23.profile.component(1)[j],
        ]
    }

    /// `ud` triple at node `j` of the window grid, if the chain is complete.
    pub fn lower_at(&self, j: usize) -> Option<[f64; 3]> {
        self.ud_u23.as_ref().map(|ud| {
            [
                self.ud_u1.profile.component(0)[j],
                ud.profile.component(0)[j],
                ud.profile.component(1)[j],
            ]
        })
    }

    /// `ol` value of component `comp` at arbitrary `x ≥ 0`.
    pub fn upper_sample(&self, comp: usize, x: f64) -> f64 {
        match comp {
            0 => self.ol_u1.sample(0, x),
            _ => self.ol_u23.sample(comp - 1, x),
        }
    }

    pub fn lower_sample(&self, comp: usize, x: f64) -> Option<f64> {
        let ud = self.ud_u23.as_ref()?;
        Some(match comp {
            0 => self.ud_u1.sample(0, x),
            _ => ud.sample(comp - 1, x),
        })
    }

    /// Whether `ud ≤ ol` (and, separately, `ol ≤ ud`) holds nodewise within `slack`.
    pub fn orderings(&self, slack: f64) -> (bool, bool) {
        let mut ud_le_ol = true;
        let mut ol_le_ud = true;
        for j in 0..self.ol_u1.profile.grid().len() {
            let up = self.upper_at(j);
            let lo = match self.lower_at(j) {
                Some(lo) => lo,
                None => [self.ud_u1.profile.component(0)[j], up[1], up[2]],
            };
            for i in 0..3 {
                ud_le_ol &= lo[i] <= up[i] + slack;
                ol_le_ud &= up[i] <= lo[i] + slack;
            }
        }
        (ud_le_ol, ol_le_ud)
    }

    pub fn summary(&self, rtol: f64) -> ChainSummary {
        let p = &self.params;
        let beta = p.virus_free_level();
        let mut oracle = Vec::new();
        if let Ok((v, w)) = farfield_limits(p, beta) {
            oracle.push(("ol_u23", vec![v, w], self.ol_u23.farfield.clone()));
        }
        if let Ok(u) = udbar1_farfield(p) {
            oracle.push(("ud_u1", vec![u], self.ud_u1.farfield.clone()));
            if let (Some(ud), Ok((v, w))) = (&self.ud_u23, farfield_limits(p, u)) {
                oracle.push(("ud_u23", vec![v, w], ud.farfield.clone()));
            }
        }
        let oracle_comparison = oracle
            .into_iter()
            .map(|(link, expected, measured)| {
                let rel = expected
                    .iter()
                    .zip(&measured)
                    .map(|(e, m)| ((m - e) / e).abs())
                    .fold(0.0, f64::max);
                OracleComparison {
                    link: link.into(),
                    expected,
                    measured,
                    max_relative_error: rel,
                }
            })
            .collect();
        let (ud_le_ol, ol_le_ud) = self.orderings(rtol);
        let mut links = vec![
            LinkSummary::new("ol_u1", &self.ol_u1),
            LinkSummary::new("ol_u23", &self.ol_u23),
            LinkSummary::new("ud_u1", &self.ud_u1),
        ];
        if let Some(ud) = &self.ud_u23 {
            links.push(LinkSummary::new("ud_u23", ud));
        }
        ChainSummary {
            r0: self.r0,
            persistence_condition: self.persistence_condition,
            complete: self.is_complete(),
            window: self.window(),
            rtol,
            links,
            oracle: oracle_comparison,
            ud_le_ol,
            ol_le_ud,
        }
    }

    /// One CSV per link and `summary.json` in `dir`.
    pub fn write(&self, dir: &Path, rtol: f64) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut links = vec![("ol_u1", &self.ol_u1), ("ol_u23", &self.ol_u23), ("ud_u1", &self.ud_u1)];
        if let Some(ud) = &self.ud_u23 {
            links.push(("ud_u23", ud));
        }
        for (name, link) in links {
            let file = File::create(dir.join(format!("{name}.csv")))?;
            link.profile.write_csv(BufWriter::new(file))?;
        }
        write_json(&dir.join("summary.json"), &self.summary(rtol))
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Input(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct LinkSummary {
    pub link: String,
    pub farfield: Vec<f64>,
    pub converged_l: f64,
}

impl LinkSummary {
    fn new(name: &str, s: &HalfLineSolution) -> Self {
        Self {
            link: name.into(),
            farfield: s.farfield.clone(),
            converged_l: s.converged_l,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleComparison {
    pub link: String,
    pub expected: Vec<f64>,
    pub measured: Vec<f64>,
    pub max_relative_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ChainSummary {
    #[serde(rename = "R0")]
    pub r0: f64,
    pub persistence_condition: bool,
    pub complete: bool,
    pub window: f64,
    pub rtol: f64,
    pub links: Vec<LinkSummary>,
    pub oracle: Vec<OracleComparison>,
    /// Nodewise `ud ≤ ol` within `rtol`, the ordering used for the long-time sandwich.
    pub ud_le_ol: bool,
    /// The reverse ordering, recorded for comparison.
    pub ol_le_ud: bool,
}

/// Builds `ol_u1 → ol_u23 → ud_u1 → ud_u23` on `[0, window]`.
pub fn build_chain(p: &ModelParams, window: f64, rtol: f64) -> Result<EquilibriumChain> {
    build_chain_with(p, window, &ContinuationOptions::for_params(p, window, rtol))
}

pub fn build_chain_with(p: &ModelParams, window: f64, opts: &ContinuationOptions) -> Result<EquilibriumChain> {
    p.validate()?;
    let r0 = basic_reproduction_number(p);
    if r0 <= 1.0 {
        return Err(Error::Threshold(format!("R0 = {r0} <= 1, no positive equilibrium")));
    }
    let ol_u1 = scalar_link(*p, None, window, opts)?;
    let ol_u23 = pair_link(*p, &ol_u1, window, opts)?;
    let ud_u1 = scalar_link(*p, Some(&ol_u23), window, opts)?;
    let persistence = persistence_condition(p);
    let ud_u23 = if persistence {
        Some(pair_link(*p, &ud_u1, window, opts)?)
    } else {
        None
    };
    Ok(EquilibriumChain {
        params: *p,
        r0,
        persistence_condition: persistence,
        ol_u1,
        ol_u23,
        ud_u1,
        ud_u23,
    })
}

/// Right boundary data for the full three-component truncated problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RightBc {
    Zero,
    /// The upper (`ol`) equilibrium evaluated at `x = l`.
    Chain,
}

/// Three-component half-line equilibrium by continuation.
///
/// Also accepts `R0 ≤ 1`, where the infected and virus components converge to zero.
pub fn solve_full_equilibrium(p: &ModelParams, window: f64, rtol: f64, right: RightBc) -> Result<HalfLineSolution> {
    solve_full_equilibrium_with(p, window, &ContinuationOptions::for_params(p, window, rtol), right)
}

pub fn solve_full_equilibrium_with(
    p: &ModelParams,
    window: f64,
    opts: &ContinuationOptions,
    right: RightBc,
) -> Result<HalfLineSolution> {
    p.validate()?;
    let upper = match right {
        RightBc::Zero => None,
        RightBc::Chain => {
            let ol_u1 = scalar_link(*p, None, window, opts)?;
            let ol_u23 = if basic_reproduction_number(p) > 1.0 {
                Some(pair_link(*p, &ol_u1, window, opts)?)
            } else {
                None
            };
            Some((ol_u1, ol_u23))
        }
    };
    continue_to_halfline(
        &|grid| {
            let data = match &upper {
                None => [0.0; 3],
                Some((u1, u23)) => {
                    let l = grid.l();
                    let (v, w) = u23.as_ref().map_or((0.0, 0.0), |s| (s.sample(0, l), s.sample(1, l)));
                    [u1.sample(0, l), v, w]
                }
            };
            BvpSpec::triple(*p, grid, data)
        },
        window,
        opts,
    )
}

/// Count of adjacent node pairs where component `comp` strictly decreases.
pub fn monotonicity_violations(profile: &Profile, comp: usize) -> usize {
    profile.component(comp).windows(2).filter(|w| w[1] < w[0]).count()
}
