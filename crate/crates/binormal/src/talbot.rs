//! Gauss sums and the free evolution of Dirac combs at rational times
//! `t_{p,q} = p/(2πq)`.
//!
//! For data `u0 = Σ α_k δ_k` with 2π-periodic symbol `û0(ξ) = Σ α_k e^{−ikξ}`,
//! the free evolution at `t_{p,q}` is the exact finite sum
//!
//! ```text
//! e^{it∆}u0(x) = (1/2p) Σ_{i<2p} G(−p, m_i, q) û0(ξ_i) e^{−itξ_i² + ixξ_i},
//! ξ_i = (π/p)(frac(qx) + i),   m_i = (⌊qx⌋ − i) mod q,
//! ```
//!
//! obtained by sampling the comb `Σ_k e^{−it(2πk)²} e^{2πiky}` (which lives
//! on `ℤ/q`) at `y = x − 2tξ`. When `û0` is supported in `|ξ| < π/(2p)`
//! modulo 2π at most one term survives: the one with `|ξ| = ξ_x`.

use std::f64::consts::PI;
use std::sync::Arc;

use crate::filament_field::FieldAnsatz;
use crate::nls_coeffs::CoefficientTrajectory;
use crate::{Complex64 as C, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RationalTime {
    pub p: u64,
    pub q: u64,
    pub reduced: (u64, u64),
    pub t: f64,
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl RationalTime {
    pub fn new(p: u64, q: u64) -> Result<Self> {
        if p == 0 || q == 0 {
            return Err(Error::Domain(format!("p and q must be positive, got {p}/{q}")));
        }
        if q % 2 == 0 {
            return Err(Error::Unsupported(format!("q = {q} is even; Gauss sums may vanish")));
        }
        let g = gcd(p, q);
        Ok(RationalTime { p, q, reduced: (p / g, q / g), t: p as f64 / (2.0 * PI * q as f64) })
    }
}

/// `G(−p, m, q) = Σ_{l<q} e^{2πi(−p l² + m l)/q}`, with the exponent reduced
/// exactly modulo `q`.
pub fn gauss_sum(p: i64, m: i64, q: i64) -> Result<C> {
    if q <= 0 {
        return Err(Error::Domain(format!("q must be positive, got {q}")));
    }
    let q128 = q as i128;
    let mut s = C::new(0.0, 0.0);
    for l in 0..q as i128 {
        let e = ((-(p as i128) * l * l + m as i128 * l) % q128 + q128) % q128;
        s += C::from_polar(1.0, 2.0 * PI * e as f64 / q as f64);
    }
    Ok(s)
}

/// `ξ_x = (πq/p) · dist(x, ℤ/q)`.
pub fn xi_x(x: f64, p: u64, q: u64) -> f64 {
    let y = x * q as f64;
    let d = (y - y.round()).abs() / q as f64;
    PI * q as f64 / p as f64 * d
}

/// 2π-periodic symbol `û0(ξ) = Σ α_k e^{−ikξ}`.
#[derive(Clone)]
pub struct PeriodicSymbol {
    pub coefficients: Vec<(i64, C)>,
    /// Smallest `r` with `û0` supported in `[−r, r]` mod 2π, when known.
    pub support_radius: Option<f64>,
    shape: Option<Arc<dyn Fn(f64) -> C + Send + Sync>>,
}

impl std::fmt::Debug for PeriodicSymbol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PeriodicSymbol")
            .field("coefficients", &self.coefficients.len())
            .field("support_radius", &self.support_radius)
            .finish()
    }
}

/// Smooth bump `exp(1 − 1/(1 − s²))` on `|s| < 1`, equal to 1 at 0.
pub fn smooth_window(s: f64) -> f64 {
    if s.abs() >= 1.0 {
        0.0
    } else {
        (1.0 - 1.0 / (1.0 - s * s)).exp()
    }
}

/// Default concentration bump `(1 − (2ξ)²)³` on `[−1/2, 1/2]`.
pub fn default_psi(xi: f64) -> f64 {
    if xi.abs() >= 0.5 {
        0.0
    } else {
        (1.0 - 4.0 * xi * xi).powi(3)
    }
}

/// Gauss–Legendre nodes and weights on `[−1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n {
        let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                let (mut p0, mut p1) = (1.0, z);
                for k in 2..=n {
                    let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                    p0 = p1;
                    p1 = p2;
                }
                let dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
                w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
                break;
            }
        }
        x[i] = z;
    }
    (x, w)
}

/// Composite Gauss–Legendre quadrature of `f` on `[a, b]`.
fn integrate_panels(f: impl Fn(f64) -> C, a: f64, b: f64, panels: usize) -> C {
    let (xs, ws) = gauss_legendre(10);
    let h = (b - a) / panels as f64;
    let mut s = C::new(0.0, 0.0);
    for p in 0..panels {
        let c = a + (p as f64 + 0.5) * h;
        for (x, w) in xs.iter().zip(&ws) {
            s += f(c + 0.5 * h * x) * (0.5 * h * w);
        }
    }
    s
}

impl PeriodicSymbol {
    /// Symbol of a finite Dirac sum; its support is the whole circle.
    pub fn from_coefficients(coefficients: Vec<(i64, C)>) -> Self {
        PeriodicSymbol { coefficients, support_radius: None, shape: None }
    }

    /// Symbol with a known closed form on `(−π, π]` supported in `[−r, r]`;
    /// the coefficients `α_k = (1/2π)∫ û0(ξ) e^{ikξ} dξ` are computed for
    /// `|k| ≤ k_max` by quadrature.
    pub fn from_shape(
        shape: Arc<dyn Fn(f64) -> C + Send + Sync>,
        radius: f64,
        k_max: usize,
    ) -> Result<Self> {
        if !(radius > 0.0 && radius <= PI) {
            return Err(Error::InvalidInput(format!("support radius {radius} not in (0, π]")));
        }
        let panels = (k_max as f64 * radius / 2.0).ceil().max(16.0) as usize;
        let coefficients = (-(k_max as i64)..=k_max as i64)
            .map(|k| {
                let f = |xi: f64| shape(xi) * C::from_polar(1.0, k as f64 * xi);
                (k, integrate_panels(f, -radius, radius, panels) / (2.0 * PI))
            })
            .collect();
        Ok(PeriodicSymbol { coefficients, support_radius: Some(radius), shape: Some(shape) })
    }

    /// A trigonometric polynomial `Σ_{k∈base} c_k e^{−ikξ}` multiplied by the
    /// smooth window of radius `r`, which makes the symbol compactly
    /// supported while keeping the modulation of the finite Dirac sum.
    pub fn windowed(base: &[(i64, C)], radius: f64, k_max: usize) -> Result<Self> {
        let base = base.to_vec();
        let shape = Arc::new(move |xi: f64| {
            let w = smooth_window(xi / radius);
            if w == 0.0 {
                return C::new(0.0, 0.0);
            }
            base.iter().map(|(k, c)| c * C::from_polar(1.0, -(*k as f64) * xi)).sum::<C>() * w
        });
        Self::from_shape(shape, radius, k_max)
    }

    /// `f^λ(ξ) = λ^β ψ(λξ)` for `ψ` supported in `[−1/2, 1/2]`.
    pub fn concentrated(
        psi: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
        beta: f64,
        lambda: f64,
        k_max: usize,
    ) -> Result<Self> {
        let amp = lambda.powf(beta);
        let shape = Arc::new(move |xi: f64| C::new(amp * psi(lambda * xi), 0.0));
        Self::from_shape(shape, 0.5 / lambda, k_max)
    }

    /// `û0(ξ)`, from the closed form when available.
    pub fn eval(&self, xi: f64) -> C {
        let r = (xi + PI).rem_euclid(2.0 * PI) - PI;
        match &self.shape {
            Some(f) => f(r),
            None => self
                .coefficients
                .iter()
                .map(|(k, a)| a * C::from_polar(1.0, -(*k as f64) * xi))
                .sum(),
        }
    }

    /// `α_0`.
    pub fn mean(&self) -> C {
        self.coefficients.iter().find(|(k, _)| *k == 0).map(|c| c.1).unwrap_or_default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TalbotValue {
    pub value: C,
    /// True when the support condition reduced the sum to a single term.
    pub single_term: bool,
}

/// `e^{it_{p,q}∆}u0(x)` through the Gauss-sum representation.
pub fn linear_talbot_value(sym: &PeriodicSymbol, p: u64, q: u64, x: f64) -> Result<TalbotValue> {
    let rt = RationalTime::new(p, q)?;
    let t = rt.t;
    let pf = p as f64;
    let y = x * q as f64;
    let j = y.floor();
    let frac = y - j;
    let ji = j as i64;
    let single = sym.support_radius.is_some_and(|r| r < PI / (2.0 * pf));
    let terms: Vec<i64> = if single {
        vec![if frac <= 0.5 { 0 } else { 2 * p as i64 - 1 }]
    } else {
        (0..2 * p as i64).collect()
    };
    let mut v = C::new(0.0, 0.0);
    for i in terms {
        let xi = PI / pf * (frac + i as f64);
        let f = sym.eval(xi);
        if f == C::new(0.0, 0.0) {
            continue;
        }
        let m = (ji - i).rem_euclid(q as i64);
        let g = gauss_sum(p as i64, m, q as i64)?;
        v += g * f * C::from_polar(1.0, -t * xi * xi + x * xi);
    }
    Ok(TalbotValue { value: v / (2.0 * pf), single_term: single })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Concentration {
    pub ratio: f64,
    pub numerator: f64,
    pub denominator: f64,
}

/// `|e^{it∆}u0^λ(0)| / |e^{it∆}α0^λ δ0(0)|` for `f^λ(ξ) = λ^β ψ(λξ)`.
pub fn concentration_ratio(
    psi: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    beta: f64,
    lambda: f64,
    p: u64,
    q: u64,
) -> Result<Concentration> {
    if !(lambda > p as f64) {
        return Err(Error::Domain(format!("need λ > p, got λ = {lambda}, p = {p}")));
    }
    let rt = RationalTime::new(p, q)?;
    let sym = PeriodicSymbol::concentrated(psi, beta, lambda, 0)?;
    let num = linear_talbot_value(&sym, p, q, 0.0)?.value.norm();
    let den = sym.mean().norm() / (4.0 * PI * rt.t).sqrt();
    Ok(Concentration { ratio: num / den, numerator: num, denominator: den })
}

/// Helper predicate `ε²√q log q < 1/2` under which the nonlinear evolution
/// stays close to the linear Talbot picture.
pub fn within_q_eps(eps: f64, q: u64) -> bool {
    eps * eps * (q as f64).sqrt() * (q as f64).ln() < 0.5
}

#[derive(Debug, Clone)]
pub struct TalbotScan {
    pub t: f64,
    pub xs: Vec<f64>,
    pub dist: Vec<f64>,
    pub abs_u: Vec<f64>,
    pub near: Vec<bool>,
    /// `max |u|` over samples at distance `> η/q` from `ℤ/q`.
    pub max_off_lattice: f64,
    /// `|u|` at the lattice points of the window.
    pub lattice_peaks: Vec<(f64, f64)>,
    /// Smallest lattice peak over `max_off_lattice`.
    pub contrast: f64,
}

/// Samples `|u(t_{p,q}, x)|` on `n` points of `[x_lo, x_hi]`.
pub fn scan_field(
    field: &FieldAnsatz,
    p: u64,
    q: u64,
    eta: f64,
    window: (f64, f64, usize),
) -> Result<TalbotScan> {
    let rt = RationalTime::new(p, q)?;
    let t = rt.t;
    if !((field.state.t - t).abs() <= 1e-12 * t) {
        return Err(Error::OutOfRange(format!(
            "field is at t = {}, not at t_pq = {t}",
            field.state.t
        )));
    }
    let (lo, hi, n) = window;
    if !(hi > lo) || n < 2 {
        return Err(Error::InvalidInput("empty scan window".into()));
    }
    let qf = q as f64;
    let mut s = TalbotScan {
        t,
        xs: Vec::with_capacity(n),
        dist: Vec::with_capacity(n),
        abs_u: Vec::with_capacity(n),
        near: Vec::with_capacity(n),
        max_off_lattice: 0.0,
        lattice_peaks: Vec::new(),
        contrast: 0.0,
    };
    for i in 0..n {
        let x = lo + (hi - lo) * i as f64 / (n - 1) as f64;
        let d = ((x * qf) - (x * qf).round()).abs() / qf;
        let a = field.u_and_ux(t, x).0.norm();
        let near = d <= eta / qf;
        if !near {
            s.max_off_lattice = s.max_off_lattice.max(a);
        }
        s.xs.push(x);
        s.dist.push(d);
        s.abs_u.push(a);
        s.near.push(near);
    }
    let first = (lo * qf).ceil() as i64;
    let last = (hi * qf).floor() as i64;
    for j in first..=last {
        let x = j as f64 / qf;
        s.lattice_peaks.push((x, field.u_and_ux(t, x).0.norm()));
    }
    let min_peak = s.lattice_peaks.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    s.contrast = if s.max_off_lattice > 0.0 { min_peak / s.max_off_lattice } else { f64::INFINITY };
    Ok(s)
}

/// Nonlinear Talbot diagnostics of a coefficient trajectory at `t_{p,q}`.
pub fn nonlinear_talbot_scan(
    traj: &CoefficientTrajectory,
    p: u64,
    q: u64,
    eta: f64,
    window: (f64, f64, usize),
) -> Result<TalbotScan> {
    let t = RationalTime::new(p, q)?.t;
    let state = if let Some(i) = traj.grid.iter().position(|g| (g - t).abs() <= 1e-12 * t) {
        let mut s = traj.states[i].clone();
        s.t = t;
        s
    } else if traj.dense.is_some() {
        traj.state_at(t)?
    } else {
        return Err(Error::OutOfRange(format!("t_pq = {t} is not on the trajectory grid")));
    };
    scan_field(&FieldAnsatz::new(state), p, q, eta, window)
}
