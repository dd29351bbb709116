//! Coefficient system of the renormalized cubic NLS with Dirac-comb data.
//!
//! Writing `u(t,x) = Σ_k A_k(t) K_t(x − x_k)` with the free kernel `K_t`, the
//! coefficients obey
//!
//! ```text
//! i ∂t A_k = (κ/t) [ Σ_NR e^{−iΩ/(4t)} A_{j1} conj(A_{j2}) A_{j3} − (|A_k|² − μ_k) A_k ]
//! ```
//!
//! where the non-resonant sum runs over `x_k − x_{j1} + x_{j2} − x_{j3} = 0`
//! with `Ω = x_k² − x_{j1}² + x_{j2}² − x_{j3}² ≠ 0`, and `κ = −sign · c` with
//! `c = 1/(8π)` (analyst kernel) or `c = 1/2` (geometric kernel).
//! `μ_k = 0` for the sum-of-squares renormalization and `|α_k|²` in the
//! equal-modulus mode. Mass and momentum are exact quadratic invariants.

use std::collections::HashMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::dopri::{self, Settings};
use crate::{Complex64 as C, Error, Result};

const I: C = C { re: 0.0, im: 1.0 };

/// Kernel normalization, which fixes the coupling scale of the system.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Convention {
    /// Kernel `e^{i(x−k)²/4t}/√(4πit)`, coupling `1/(8π)`.
    Analyst,
    /// Kernel `e^{i(x−k)²/4t}/√t`, coupling `1/2`.
    Geometric,
}

impl Convention {
    pub fn scale(self) -> f64 {
        match self {
            Convention::Analyst => 1.0 / (8.0 * PI),
            Convention::Geometric => 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    RkAdaptive,
    IntegratingFactor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RenormMode {
    SumSq,
    EqualModulus,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub scheme: Scheme,
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub t_min: f64,
    pub t_max: f64,
    pub resonance_tol: f64,
    pub sign: i8,
    pub renorm_mode: RenormMode,
    pub convention: Convention,
    /// Extra integer sites added around an integer support.
    pub halo: usize,
    /// Largest phase advance (radians) of the fastest oscillation per step.
    pub osc_factor: f64,
    /// Number of log-spaced output times.
    pub n_output: usize,
    pub max_steps: usize,
    /// Keep every accepted step for dense output.
    pub keep_dense: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            scheme: Scheme::RkAdaptive,
            abs_tol: 1e-12,
            rel_tol: 1e-12,
            t_min: 1e-4,
            t_max: 1.0,
            resonance_tol: 1e-12,
            sign: -1,
            renorm_mode: RenormMode::SumSq,
            convention: Convention::Analyst,
            halo: 0,
            osc_factor: 1.0,
            n_output: 50,
            max_steps: 20_000_000,
            keep_dense: false,
        }
    }
}

impl SolverConfig {
    pub fn kappa(&self) -> f64 {
        -(self.sign as f64) * self.convention.scale()
    }

    pub fn validate(&self) -> Result<()> {
        if self.sign != 1 && self.sign != -1 {
            return Err(Error::InvalidInput(format!("sign must be ±1, got {}", self.sign)));
        }
        if !(self.abs_tol > 0.0 && self.rel_tol > 0.0) {
            return Err(Error::InvalidInput("tolerances must be positive".into()));
        }
        if !(self.osc_factor > 0.0) {
            return Err(Error::InvalidInput("osc_factor must be positive".into()));
        }
        if !(self.resonance_tol >= 0.0) {
            return Err(Error::InvalidInput("resonance_tol must be non-negative".into()));
        }
        Ok(())
    }
}

/// Snapshot of the truncated coefficient family.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientState {
    pub t: f64,
    pub locations: Vec<f64>,
    pub values: Vec<C>,
    pub m: f64,
    pub sign: i8,
    pub convention: Convention,
    pub renorm: RenormMode,
    /// Initial data `α_k`, needed for gauge changes.
    pub initial: Option<Vec<C>>,
}

impl CoefficientState {
    pub fn new(t: f64, data: &[(f64, C)], sign: i8, convention: Convention) -> Result<Self> {
        if !(t > 0.0) {
            return Err(Error::Domain(format!("t must be positive, got {t}")));
        }
        let (locations, values) = sorted_support(data)?;
        let m = values.iter().map(|v| v.norm_sqr()).sum();
        Ok(CoefficientState {
            t,
            locations,
            initial: Some(values.clone()),
            values,
            m,
            sign,
            convention,
            renorm: RenormMode::SumSq,
        })
    }

    pub fn value_at(&self, x: f64) -> Option<C> {
        self.locations.iter().position(|&l| l == x).map(|i| self.values[i])
    }

    pub fn kappa(&self) -> f64 {
        -(self.sign as f64) * self.convention.scale()
    }

    /// Gauge rates `γ_k` with `A_k = e^{iγ_k log√t} Ã_k`.
    fn gauge_rates(&self) -> Result<Vec<f64>> {
        let init = self
            .initial
            .as_ref()
            .ok_or_else(|| Error::InvalidState("state carries no initial moduli".into()))?;
        Ok(match self.renorm {
            RenormMode::SumSq => init.iter().map(|a| 2.0 * self.kappa() * a.norm_sqr()).collect(),
            RenormMode::EqualModulus => vec![0.0; init.len()],
        })
    }
}

fn sorted_support(data: &[(f64, C)]) -> Result<(Vec<f64>, Vec<C>)> {
    let mut v: Vec<(f64, C)> = data.to_vec();
    for (x, a) in &v {
        if !x.is_finite() || !a.re.is_finite() || !a.im.is_finite() {
            return Err(Error::InvalidInput(format!("non-finite datum at location {x}")));
        }
    }
    v.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    for w in v.windows(2) {
        if w[0].0 == w[1].0 {
            return Err(Error::InvalidInput(format!("duplicate location {}", w[0].0)));
        }
    }
    Ok(v.into_iter().unzip())
}

pub fn conserved_mass(state: &CoefficientState) -> f64 {
    state.values.iter().map(|v| v.norm_sqr()).sum()
}

pub fn conserved_momentum(state: &CoefficientState) -> f64 {
    state.locations.iter().zip(&state.values).map(|(x, v)| x * v.norm_sqr()).sum()
}

/// Classification of the index triples interacting with mode `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadrupleSplit {
    pub k: f64,
    pub nonresonant: Vec<(f64, f64, f64)>,
    pub resonant: Vec<(f64, f64, f64)>,
    pub resonant_note: String,
    /// Non-resonant triples with `|Ω| < 1` (non-integer supports only).
    pub near_resonant: Vec<(f64, f64, f64)>,
}

fn integer_lattice(locations: &[f64]) -> bool {
    locations.iter().all(|x| x.fract() == 0.0 && x.abs() < 1e12)
}

/// Finds the index of `x` in the sorted `locations`, exactly for integer
/// supports and up to a relative tolerance otherwise.
fn locate(locations: &[f64], x: f64, exact: bool) -> Option<usize> {
    let i = locations.partition_point(|&l| l < x);
    let tol = if exact { 0.0 } else { 1e-12 * (1.0 + x.abs()) };
    [i.wrapping_sub(1), i]
        .into_iter()
        .filter(|&j| j < locations.len())
        .find(|&j| (locations[j] - x).abs() <= tol)
}

struct Triple {
    j1: usize,
    j2: usize,
    j3: usize,
    omega: f64,
    resonant: bool,
}

fn triples(k: usize, locations: &[f64], resonance_tol: f64) -> Vec<Triple> {
    let exact = integer_lattice(locations);
    let xk = locations[k];
    let mut out = Vec::new();
    for (j1, &x1) in locations.iter().enumerate() {
        for (j2, &x2) in locations.iter().enumerate() {
            let Some(j3) = locate(locations, xk - x1 + x2, exact) else { continue };
            let (omega, resonant) = if exact {
                let w = 2 * ((xk - x1) as i64) * ((x1 - x2) as i64);
                (w as f64, w == 0)
            } else {
                let w = 2.0 * (xk - x1) * (x1 - x2);
                (w, w.abs() <= resonance_tol)
            };
            out.push(Triple { j1, j2, j3, omega, resonant });
        }
    }
    out
}

pub fn resonant_split(k: f64, locations: &[f64], resonance_tol: f64) -> Result<QuadrupleSplit> {
    if locations.is_empty() {
        return Err(Error::InvalidInput("empty support".into()));
    }
    let mut locs = locations.to_vec();
    locs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    locs.dedup();
    let ki = locs
        .iter()
        .position(|&l| l == k)
        .ok_or_else(|| Error::InvalidInput(format!("k = {k} is not in the support")))?;
    let mut split = QuadrupleSplit {
        k,
        nonresonant: Vec::new(),
        resonant: Vec::new(),
        resonant_note: "Res_k = {(k,j,j), (j,j,k)}: self-phase terms, removed by the \
                        renormalization except for −|A_k|²A_k"
            .into(),
        near_resonant: Vec::new(),
    };
    let exact = integer_lattice(&locs);
    for tr in triples(ki, &locs, resonance_tol) {
        let t = (locs[tr.j1], locs[tr.j2], locs[tr.j3]);
        if tr.resonant {
            split.resonant.push(t);
        } else {
            if !exact && tr.omega.abs() < 1.0 {
                split.near_resonant.push(t);
            }
            split.nonresonant.push(t);
        }
    }
    Ok(split)
}

#[derive(Clone, Copy)]
struct Term {
    j1: u32,
    j2: u32,
    j3: u32,
    quad: u32,
    pair: u32,
}

/// Compiled form of the coefficient system for fast right-hand sides.
pub(crate) struct System {
    pub locations: Vec<f64>,
    pub alphas: Vec<C>,
    pub kappa: f64,
    /// `μ_k` in the A-form self-interaction.
    mu: Vec<f64>,
    alpha_sq: Vec<f64>,
    pub gamma: Vec<f64>,
    offsets: Vec<usize>,
    terms: Vec<Term>,
    quads: Vec<f64>,
    pairs: Vec<(f64, f64)>,
    pub omega_max: f64,
    pub warnings: Vec<String>,
}

impl System {
    pub fn new(
        locations: &[f64],
        alphas: &[C],
        kappa: f64,
        renorm: RenormMode,
        resonance_tol: f64,
    ) -> System {
        let n = locations.len();
        let alpha_sq: Vec<f64> = alphas.iter().map(|a| a.norm_sqr()).collect();
        let (mu, gamma) = match renorm {
            RenormMode::SumSq => (vec![0.0; n], alpha_sq.iter().map(|a| 2.0 * kappa * a).collect()),
            RenormMode::EqualModulus => (alpha_sq.clone(), vec![0.0; n]),
        };
        let exact = integer_lattice(locations);
        let mut quad_ix: HashMap<u64, u32> = HashMap::new();
        let mut pair_ix: HashMap<(u64, u64), u32> = HashMap::new();
        let mut quads = Vec::new();
        let mut pairs = Vec::new();
        let mut terms = Vec::new();
        let mut offsets = vec![0];
        let mut near = 0usize;
        for k in 0..n {
            for tr in triples(k, locations, resonance_tol) {
                if tr.resonant {
                    continue;
                }
                if !exact && tr.omega.abs() < 1.0 {
                    near += 1;
                }
                let w = gamma[k] - gamma[tr.j1] + gamma[tr.j2] - gamma[tr.j3];
                let q = *quad_ix.entry(tr.omega.to_bits()).or_insert_with(|| {
                    quads.push(tr.omega);
                    (quads.len() - 1) as u32
                });
                let p = *pair_ix.entry((tr.omega.to_bits(), w.to_bits())).or_insert_with(|| {
                    pairs.push((tr.omega, w));
                    (pairs.len() - 1) as u32
                });
                terms.push(Term {
                    j1: tr.j1 as u32,
                    j2: tr.j2 as u32,
                    j3: tr.j3 as u32,
                    quad: q,
                    pair: p,
                });
            }
            offsets.push(terms.len());
        }
        let omega_max = quads.iter().fold(0.0f64, |m, w| m.max(w.abs()));
        let mut warnings = Vec::new();
        if near > 0 {
            warnings.push(format!("{near} near-resonant triples with |Ω| < 1"));
        }
        System {
            locations: locations.to_vec(),
            alphas: alphas.to_vec(),
            kappa,
            mu,
            alpha_sq,
            gamma,
            offsets,
            terms,
            quads,
            pairs,
            omega_max,
            warnings,
        }
    }

    pub fn n(&self) -> usize {
        self.locations.len()
    }

    pub fn nonresonant_count(&self) -> usize {
        self.terms.len()
    }

    /// `dA/dt` in the original variables.
    pub fn rhs_a(&self, t: f64, a: &[C], out: &mut [C], phase: &mut Vec<C>) {
        phase.clear();
        phase.extend(self.quads.iter().map(|w| C::from_polar(1.0, -w / (4.0 * t))));
        let c = -I * (self.kappa / t);
        for k in 0..self.n() {
            let mut s = C::new(0.0, 0.0);
            for tm in &self.terms[self.offsets[k]..self.offsets[k + 1]] {
                s += phase[tm.quad as usize]
                    * a[tm.j1 as usize]
                    * a[tm.j2 as usize].conj()
                    * a[tm.j3 as usize];
            }
            s -= a[k] * (a[k].norm_sqr() - self.mu[k]);
            out[k] = c * s;
        }
    }

    /// `dÃ/ds` for the gauge-removed variables in `s = 1/t`.
    pub fn rhs_tilde_s(&self, s: f64, a: &[C], out: &mut [C], phase: &mut Vec<C>) {
        phase.clear();
        let ls = 0.5 * s.ln();
        phase.extend(self.pairs.iter().map(|(w, g)| C::from_polar(1.0, -w * s / 4.0 + g * ls)));
        let c = I * (self.kappa / s);
        for k in 0..self.n() {
            let mut acc = C::new(0.0, 0.0);
            for tm in &self.terms[self.offsets[k]..self.offsets[k + 1]] {
                acc += phase[tm.pair as usize]
                    * a[tm.j1 as usize]
                    * a[tm.j2 as usize].conj()
                    * a[tm.j3 as usize];
            }
            acc -= a[k] * (a[k].norm_sqr() - self.alpha_sq[k]);
            out[k] = c * acc;
        }
    }

    /// Phase factor `e^{iγ_k log√t}` relating `A_k` and `Ã_k`.
    pub fn gauge(&self, k: usize, t: f64) -> C {
        C::from_polar(1.0, self.gamma[k] * 0.5 * t.ln())
    }

    /// Non-resonant forcing `g_k` evaluated on `Ã`, including the `κ/t`
    /// factor, split as amplitudes against `e^{−iΩ/(4t)}`: returns
    /// `(Ω, amplitude)` pairs per `k` into `out`.
    fn forcing_terms(&self, k: usize, t: f64, a: &[C], out: &mut Vec<(f64, C)>) {
        out.clear();
        let lt = 0.5 * t.ln();
        for tm in &self.terms[self.offsets[k]..self.offsets[k + 1]] {
            let (w, g) = self.pairs[tm.pair as usize];
            let amp = C::from_polar(self.kappa / t, -g * lt)
                * a[tm.j1 as usize]
                * a[tm.j2 as usize].conj()
                * a[tm.j3 as usize];
            out.push((w, amp));
        }
    }
}

pub fn rhs(state: &CoefficientState) -> Result<Vec<C>> {
    if !(state.t > 0.0) {
        return Err(Error::Domain(format!("t must be positive, got {}", state.t)));
    }
    let alphas = match &state.initial {
        Some(a) => a.clone(),
        None => state.values.clone(),
    };
    let sys = System::new(&state.locations, &alphas, state.kappa(), state.renorm, 1e-12);
    let mut out = vec![C::new(0.0, 0.0); sys.n()];
    let mut ph = Vec::new();
    sys.rhs_a(state.t, &state.values, &mut out, &mut ph);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GaugeDirection {
    ToTilde,
    FromTilde,
}

/// Applies `A_k = e^{iγ_k log√t} Ã_k` (or its inverse), with `γ_k = 2κ|α_k|²`;
/// in the analyst convention with sign −1 this is `|α_k|²/(4π)`.
pub fn gauge_transform(state: &CoefficientState, dir: GaugeDirection) -> Result<CoefficientState> {
    if !(state.t > 0.0) {
        return Err(Error::Domain(format!("t must be positive, got {}", state.t)));
    }
    let rates = state.gauge_rates()?;
    let mut out = state.clone();
    let lt = 0.5 * state.t.ln();
    for (v, g) in out.values.iter_mut().zip(&rates) {
        let ph = C::from_polar(1.0, g * lt);
        *v = match dir {
            GaugeDirection::FromTilde => *v * ph,
            GaugeDirection::ToTilde => *v / ph,
        };
    }
    Ok(out)
}

/// Accepted-step record for cubic Hermite interpolation in `t`.
#[derive(Debug, Clone, Default)]
pub struct DenseOutput {
    pub ts: Vec<f64>,
    pub ys: Vec<Vec<C>>,
    pub fs: Vec<Vec<C>>,
}

impl DenseOutput {
    pub fn eval(&self, t: f64) -> Result<Vec<C>> {
        let n = self.ts.len();
        if n == 0 || t < self.ts[0] || t > self.ts[n - 1] {
            return Err(Error::OutOfRange(format!(
                "t = {t} outside the dense-output window [{}, {}]",
                self.ts.first().copied().unwrap_or(f64::NAN),
                self.ts.last().copied().unwrap_or(f64::NAN)
            )));
        }
        let i = self.ts.partition_point(|&s| s <= t).clamp(1, n - 1) - 1;
        let (t0, t1) = (self.ts[i], self.ts[i + 1]);
        let h = t1 - t0;
        if h == 0.0 {
            return Ok(self.ys[i].clone());
        }
        let s = (t - t0) / h;
        let h00 = (1.0 + 2.0 * s) * (1.0 - s) * (1.0 - s);
        let h10 = s * (1.0 - s) * (1.0 - s);
        let h01 = s * s * (3.0 - 2.0 * s);
        let h11 = s * s * (s - 1.0);
        Ok((0..self.ys[i].len())
            .map(|k| {
                self.ys[i][k] * h00
                    + self.fs[i][k] * (h10 * h)
                    + self.ys[i + 1][k] * h01
                    + self.fs[i + 1][k] * (h11 * h)
            })
            .collect())
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct Diagnostics {
    pub mass: Vec<f64>,
    pub momentum: Vec<f64>,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
    pub h_min: f64,
    pub h_max: f64,
    /// Largest `|mass − mass₀| / mass₀` over all accepted steps.
    pub max_mass_drift: f64,
    /// Largest momentum change over all accepted steps, relative to
    /// `Σ |x_k| |α_k|²` (absolute when that vanishes).
    pub max_momentum_drift: f64,
    pub nonresonant_terms: usize,
    pub omega_max: f64,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct CoefficientTrajectory {
    pub grid: Vec<f64>,
    pub states: Vec<CoefficientState>,
    pub diagnostics: Diagnostics,
    pub dense: Option<DenseOutput>,
    pub t_min: f64,
}

impl CoefficientTrajectory {
    pub fn locations(&self) -> &[f64] {
        &self.states[0].locations
    }

    pub fn alphas(&self) -> &[C] {
        self.states[0].initial.as_deref().unwrap_or(&[])
    }

    /// Interpolated state; needs `keep_dense`.
    pub fn state_at(&self, t: f64) -> Result<CoefficientState> {
        let dense = self
            .dense
            .as_ref()
            .ok_or_else(|| Error::InvalidState("trajectory kept no dense output".into()))?;
        let mut s = self.states[0].clone();
        s.t = t;
        s.values = dense.eval(t)?;
        Ok(s)
    }
}

/// Geometric output grid of `n` points in `(t_min, t_max]`.
pub fn log_grid(t_min: f64, t_max: f64, n: usize) -> Vec<f64> {
    let n = n.max(1);
    let r = (t_max / t_min).ln() / n as f64;
    let mut g: Vec<f64> = (1..=n).map(|i| t_min * (r * i as f64).exp()).collect();
    g[n - 1] = t_max;
    g
}

/// Support of the run: the data plus `halo` integer sites on each side
/// (and in the gaps) for integer data.
fn expand_support(data: &[(f64, C)], halo: usize) -> Vec<(f64, C)> {
    let locs: Vec<f64> = data.iter().map(|d| d.0).collect();
    if halo == 0 || !integer_lattice(&locs) {
        return data.to_vec();
    }
    let lo = locs.iter().cloned().fold(f64::INFINITY, f64::min) as i64 - halo as i64;
    let hi = locs.iter().cloned().fold(f64::NEG_INFINITY, f64::max) as i64 + halo as i64;
    let mut out = data.to_vec();
    for j in lo..=hi {
        if !locs.contains(&(j as f64)) {
            out.push((j as f64, C::new(0.0, 0.0)));
        }
    }
    out
}

/// Renormalization constant for the chosen mode.
pub fn renormalization(alphas: &[C], mode: RenormMode) -> Result<f64> {
    let sq: Vec<f64> = alphas.iter().map(|a| a.norm_sqr()).filter(|&a| a > 0.0).collect();
    match mode {
        RenormMode::SumSq => Ok(sq.iter().sum()),
        RenormMode::EqualModulus => {
            let Some(&a2) = sq.first() else { return Ok(0.0) };
            if sq.iter().any(|&b| (b - a2).abs() > 1e-12 * a2) {
                return Err(Error::InvalidInput(
                    "equal_modulus renormalization needs equal nonzero moduli".into(),
                ));
            }
            Ok((sq.len() as f64 - 0.5) * a2)
        }
    }
}

/// Integrates the coefficient system from the leading-order state at
/// `t_min` (zero residual) to `t_max`, recording states on a log grid.
pub fn evolve(
    initial: &[(f64, C)],
    t_min: f64,
    t_max: f64,
    cfg: &SolverConfig,
) -> Result<CoefficientTrajectory> {
    if !(t_min > 0.0 && t_max > t_min && t_max.is_finite()) {
        return Err(Error::InvalidInput(format!("need 0 < t_min < t_max, got {t_min}, {t_max}")));
    }
    evolve_on_grid(initial, t_min, &log_grid(t_min, t_max, cfg.n_output), cfg)
}

pub fn evolve_on_grid(
    initial: &[(f64, C)],
    t_min: f64,
    grid: &[f64],
    cfg: &SolverConfig,
) -> Result<CoefficientTrajectory> {
    cfg.validate()?;
    if initial.is_empty() {
        return Err(Error::InvalidInput("empty support".into()));
    }
    if !(t_min > 0.0) {
        return Err(Error::InvalidInput(format!("t_min must be positive, got {t_min}")));
    }
    if grid.is_empty() || grid[0] <= t_min || grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidInput("output grid must increase within (t_min, t_max]".into()));
    }
    let (locations, alphas) = sorted_support(&expand_support(initial, cfg.halo))?;
    let m = renormalization(&alphas, cfg.renorm_mode)?;
    let sys = System::new(&locations, &alphas, cfg.kappa(), cfg.renorm_mode, cfg.resonance_tol);
    let n = sys.n();

    let mass0: f64 = alphas.iter().map(|a| a.norm_sqr()).sum();
    let mom0: f64 = locations.iter().zip(&alphas).map(|(x, a)| x * a.norm_sqr()).sum();
    let mom_scale: f64 = locations.iter().zip(&alphas).map(|(x, a)| x.abs() * a.norm_sqr()).sum();
    let mom_scale = if mom_scale > 0.0 { mom_scale } else { 1.0 };
    let mass_scale = if mass0 > 0.0 { mass0 } else { 1.0 };

    let template = CoefficientState {
        t: t_min,
        locations: locations.clone(),
        values: alphas.clone(),
        m,
        sign: cfg.sign,
        convention: cfg.convention,
        renorm: cfg.renorm_mode,
        initial: Some(alphas.clone()),
    };
    let mut diag = Diagnostics {
        nonresonant_terms: sys.nonresonant_count(),
        omega_max: sys.omega_max,
        warnings: sys.warnings.clone(),
        ..Default::default()
    };
    let mut states: Vec<Option<CoefficientState>> = vec![None; grid.len()];
    let mut dense = cfg.keep_dense.then(DenseOutput::default);
    let settings = Settings { atol: cfg.abs_tol, rtol: cfg.rel_tol, max_steps: cfg.max_steps };
    let mut max_mass: f64 = 0.0;
    let mut max_mom: f64 = 0.0;
    let mut track = |a: &[C]| {
        let ms: f64 = a.iter().map(|v| v.norm_sqr()).sum();
        let mo: f64 = locations.iter().zip(a).map(|(x, v)| x * v.norm_sqr()).sum();
        max_mass = max_mass.max((ms - mass0).abs() / mass_scale);
        max_mom = max_mom.max((mo - mom0).abs() / mom_scale);
    };
    let osc = cfg.osc_factor;
    let wmax = sys.omega_max;

    let stats = match cfg.scheme {
        Scheme::RkAdaptive => {
            let a0: Vec<C> = (0..n).map(|k| sys.gauge(k, t_min) * alphas[k]).collect();
            let mut ph = Vec::new();
            dopri::integrate(
                |t, y, out| sys.rhs_a(t, y, out, &mut ph),
                t_min,
                &a0,
                grid,
                &settings,
                |t| {
                    let b = if wmax > 0.0 { osc * 4.0 * t * t / wmax } else { f64::INFINITY };
                    b.min(0.5 * t)
                },
                |t, y, f| {
                    track(y);
                    if let Some(d) = dense.as_mut() {
                        d.ts.push(t);
                        d.ys.push(y.to_vec());
                        d.fs.push(f.to_vec());
                    }
                    Ok(())
                },
                |i, t, y| {
                    let mut s = template.clone();
                    s.t = t;
                    s.values = y.to_vec();
                    states[i] = Some(s);
                },
            )?
        }
        Scheme::IntegratingFactor => {
            let stops: Vec<f64> = grid.iter().map(|t| 1.0 / t).collect();
            let mut ph = Vec::new();
            let mut ph2 = Vec::new();
            let mut a = vec![C::new(0.0, 0.0); n];
            let mut f = vec![C::new(0.0, 0.0); n];
            dopri::integrate(
                |s, y, out| sys.rhs_tilde_s(s, y, out, &mut ph),
                1.0 / t_min,
                &alphas,
                &stops,
                &settings,
                |s| {
                    let b = if wmax > 0.0 { osc * 4.0 / wmax } else { f64::INFINITY };
                    b.min(0.5 * s)
                },
                |s, y, _| {
                    track(y);
                    if let Some(d) = dense.as_mut() {
                        let t = 1.0 / s;
                        for k in 0..n {
                            a[k] = sys.gauge(k, t) * y[k];
                        }
                        sys.rhs_a(t, &a, &mut f, &mut ph2);
                        d.ts.push(t);
                        d.ys.push(a.clone());
                        d.fs.push(f.clone());
                    }
                    Ok(())
                },
                |i, s, y| {
                    let t = 1.0 / s;
                    let mut st = template.clone();
                    st.t = t;
                    st.values = (0..n).map(|k| sys.gauge(k, t) * y[k]).collect();
                    states[i] = Some(st);
                },
            )?
        }
    };
    if let Some(d) = dense.as_mut() {
        if d.ts.first().is_some_and(|&a| d.ts.last().is_some_and(|&b| b < a)) {
            d.ts.reverse();
            d.ys.reverse();
            d.fs.reverse();
        }
    }
    let states: Vec<CoefficientState> = states.into_iter().map(|s| s.unwrap()).collect();
    diag.mass = states.iter().map(conserved_mass).collect();
    diag.momentum = states.iter().map(conserved_momentum).collect();
    diag.accepted_steps = stats.accepted;
    diag.rejected_steps = stats.rejected;
    diag.h_min = stats.h_min;
    diag.h_max = stats.h_max;
    diag.max_mass_drift = max_mass;
    diag.max_momentum_drift = max_mom;
    Ok(CoefficientTrajectory { grid: grid.to_vec(), states, diagnostics: diag, dense, t_min })
}

/// `∫_{s_lo}^{s_hi} (linear interpolant of a) · e^{−iλs} ds`.
fn filon_segment(lambda: f64, s_lo: f64, s_hi: f64, a_lo: C, a_hi: C) -> C {
    let d = s_hi - s_lo;
    let e_lo = C::from_polar(1.0, -lambda * s_lo);
    let e_hi = C::from_polar(1.0, -lambda * s_hi);
    if (lambda * d).abs() < 1e-3 {
        let mid = C::from_polar(1.0, -lambda * 0.5 * (s_lo + s_hi));
        return (a_lo * e_lo + (a_lo + a_hi) * mid * 2.0 + a_hi * e_hi) * (d / 6.0);
    }
    let mil = -I * lambda;
    let i0 = (e_hi - e_lo) / mil;
    let i1 = e_hi * d / mil - (e_hi - e_lo) / (mil * mil);
    a_lo * i0 + (a_hi - a_lo) * (i1 / d)
}

/// `∫_{s0}^{∞} a(s) e^{−iλs} ds` for `a ∝ 1/s`, by two integrations by parts.
fn filon_tail(lambda: f64, s0: f64, a0: C) -> C {
    if lambda == 0.0 {
        return C::new(0.0, 0.0);
    }
    let il = I * lambda;
    let e0 = C::from_polar(1.0, -lambda * s0);
    e0 * (a0 / il + (-a0 / s0) / (il * il))
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() || grid[0] <= 0.0 || grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidInput("grid must be increasing and positive".into()));
    }
    Ok(())
}

/// One application of the fixed-point map whose fixed point is the residual
/// `R_k = Ã_k − α_k` of the gauge-removed system:
///
/// `Φ_k(R)(t) = −i ∫₀ᵗ g_k dτ + 2iκ ∫₀ᵗ (∫₀^τ Im(g_k conj(α_k+R_k)) ds) (α_k+R_k)(τ) dτ/τ`
///
/// with `g_k` the non-resonant forcing (including `κ/τ`). Oscillatory
/// integrals use Filon quadrature in `s = 1/τ` with an asymptotic tail on
/// `(0, grid[0])`. `residual[k][i]` samples `R_k(grid[i])`, with `k` in the
/// sorted order of `alphas`.
pub fn picard_apply(
    residual: &[Vec<C>],
    alphas: &[(f64, C)],
    grid: &[f64],
    cfg: &SolverConfig,
) -> Result<Vec<Vec<C>>> {
    check_grid(grid)?;
    let (locations, a0) = sorted_support(alphas)?;
    if residual.len() != locations.len() || residual.iter().any(|r| r.len() != grid.len()) {
        return Err(Error::InvalidInput("residual samples do not match support × grid".into()));
    }
    if residual.iter().flatten().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::InvalidInput("non-finite residual sample".into()));
    }
    let sys = System::new(&locations, &a0, cfg.kappa(), cfg.renorm_mode, cfg.resonance_tol);
    Ok(picard_map(&sys, residual, grid))
}

fn picard_map(sys: &System, residual: &[Vec<C>], grid: &[f64]) -> Vec<Vec<C>> {
    let n = sys.n();
    let ng = grid.len();
    let tilde: Vec<Vec<C>> = (0..ng)
        .map(|i| (0..n).map(|k| sys.alphas[k] + residual[k][i]).collect())
        .collect();
    let s: Vec<f64> = grid.iter().map(|t| 1.0 / t).collect();
    let mut out = vec![vec![C::new(0.0, 0.0); ng]; n];
    let mut terms_i: Vec<Vec<(f64, C)>> = vec![Vec::new(); ng];
    for k in 0..n {
        for i in 0..ng {
            sys.forcing_terms(k, grid[i], &tilde[i], &mut terms_i[i]);
        }
        let nt = terms_i[0].len();
        if nt == 0 {
            continue;
        }
        // Integrand amplitudes against e^{−iλs} in s: a(s) = g_amp/s².
        let amp = |i: usize, j: usize| terms_i[i][j].1 / (s[i] * s[i]);
        let mut g_int = vec![C::new(0.0, 0.0); ng];
        let mut im_int = vec![0.0; ng];
        let mut g_acc = C::new(0.0, 0.0);
        let mut h_acc = C::new(0.0, 0.0);
        for j in 0..nt {
            let lam = terms_i[0][j].0 / 4.0;
            g_acc += filon_tail(lam, s[0], amp(0, j));
            h_acc += filon_tail(lam, s[0], amp(0, j) * tilde[0][k].conj());
        }
        g_int[0] = g_acc;
        im_int[0] = h_acc.im;
        for i in 1..ng {
            for j in 0..nt {
                let lam = terms_i[i][j].0 / 4.0;
                let (a_lo, a_hi) = (amp(i, j), amp(i - 1, j));
                g_acc += filon_segment(lam, s[i], s[i - 1], a_lo, a_hi);
                h_acc += filon_segment(
                    lam,
                    s[i],
                    s[i - 1],
                    a_lo * tilde[i][k].conj(),
                    a_hi * tilde[i - 1][k].conj(),
                );
            }
            g_int[i] = g_acc;
            im_int[i] = h_acc.im;
        }
        // Outer integral in log τ; the (0, grid[0]) piece is O(grid[0]).
        let mut o_acc = tilde[0][k] * im_int[0];
        let mut prev = tilde[0][k] * im_int[0];
        out[k][0] = -I * g_int[0] + I * (2.0 * sys.kappa) * o_acc;
        for i in 1..ng {
            let cur = tilde[i][k] * im_int[i];
            o_acc += (prev + cur) * (0.5 * (grid[i] / grid[i - 1]).ln());
            prev = cur;
            out[k][i] = -I * g_int[i] + I * (2.0 * sys.kappa) * o_acc;
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct PicardSolution {
    pub locations: Vec<f64>,
    pub grid: Vec<f64>,
    pub residual: Vec<Vec<C>>,
    pub iterations: usize,
    pub last_change: f64,
    /// Gauge rates for converting back to `A_k = e^{iγ_k log√t}(α_k + R_k)`.
    pub gamma: Vec<f64>,
    pub alphas: Vec<C>,
}

impl PicardSolution {
    /// `A_k` at grid index `i`.
    pub fn value(&self, k: usize, i: usize) -> C {
        let t = self.grid[i];
        C::from_polar(1.0, self.gamma[k] * 0.5 * t.ln()) * (self.alphas[k] + self.residual[k][i])
    }
}

/// Iterates [`picard_apply`] from `R = 0` until the sup-norm update drops
/// below `tol`.
pub fn picard_solve(
    alphas: &[(f64, C)],
    grid: &[f64],
    cfg: &SolverConfig,
    tol: f64,
    max_iter: usize,
) -> Result<PicardSolution> {
    check_grid(grid)?;
    let (locations, a0) = sorted_support(&expand_support(alphas, cfg.halo))?;
    let sys = System::new(&locations, &a0, cfg.kappa(), cfg.renorm_mode, cfg.resonance_tol);
    let mut r = vec![vec![C::new(0.0, 0.0); grid.len()]; sys.n()];
    let mut change = f64::INFINITY;
    let mut it = 0;
    while it < max_iter && change > tol {
        let next = picard_map(&sys, &r, grid);
        change = next
            .iter()
            .zip(&r)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).norm()))
            .fold(0.0, f64::max);
        r = next;
        it += 1;
    }
    if change > tol {
        return Err(Error::Convergence {
            last_t: grid[grid.len() - 1],
            msg: format!("Picard iteration stalled at update {change:e} after {it} sweeps"),
        });
    }
    Ok(PicardSolution {
        locations,
        grid: grid.to_vec(),
        residual: r,
        iterations: it,
        last_change: change,
        gamma: sys.gamma.clone(),
        alphas: a0,
    })
}
