//! Filament function `u(t,x) = Σ_k A_k(t) K_t(x − x_k)` and the modulation
//! phase of the normal vector.
//!
//! Two kernel normalizations are supported: the analyst kernel
//! `e^{i(x−k)²/4t}/√(4πit)` (principal branch, `√i = e^{iπ/4}`) and the
//! geometric kernel `e^{i(x−k)²/4t}/√t`. They are related by scaling the data
//! by `√(4πi)`.

use std::f64::consts::PI;

use crate::nls_coeffs::{CoefficientState, CoefficientTrajectory, Convention, RenormMode};
use crate::{Complex64 as C, Error, Result};

pub type Normalization = Convention;

#[derive(Debug, Clone)]
pub struct FieldAnsatz {
    pub state: CoefficientState,
    pub normalization: Normalization,
}

impl FieldAnsatz {
    pub fn new(state: CoefficientState) -> Self {
        let normalization = state.convention;
        FieldAnsatz { state, normalization }
    }

    /// Builds the ansatz from the residual form
    /// `A_k = e^{iγ_k log√t}(α_k + R_k)` with `γ_k = −2·sign·c·|α_k|²`.
    pub fn from_residual_form(
        t: f64,
        data: &[(f64, C, C)],
        sign: i8,
        convention: Convention,
    ) -> Result<Self> {
        let pairs: Vec<(f64, C)> = data.iter().map(|d| (d.0, d.1)).collect();
        let mut state = CoefficientState::new(t, &pairs, sign, convention)?;
        let kappa = state.kappa();
        let lt = 0.5 * t.ln();
        for (i, x) in state.locations.clone().iter().enumerate() {
            let d = data.iter().find(|d| d.0 == *x).unwrap();
            state.values[i] = C::from_polar(1.0, 2.0 * kappa * d.1.norm_sqr() * lt) * (d.1 + d.2);
        }
        Ok(FieldAnsatz::new(state))
    }

    fn prefactor(&self, t: f64) -> C {
        match self.normalization {
            Convention::Analyst => C::from_polar(1.0 / (4.0 * PI * t).sqrt(), -PI / 4.0),
            Convention::Geometric => C::new(1.0 / t.sqrt(), 0.0),
        }
    }

    /// `(u, u_x)` at `(t, x)` with the stored coefficients; `t > 0` assumed.
    #[inline]
    pub fn u_and_ux(&self, t: f64, x: f64) -> (C, C) {
        let mut u = C::new(0.0, 0.0);
        let mut ux = C::new(0.0, 0.0);
        let q = 1.0 / (4.0 * t);
        for (xk, a) in self.state.locations.iter().zip(&self.state.values) {
            let d = x - xk;
            let term = a * C::from_polar(1.0, d * d * q);
            u += term;
            ux += term * C::new(0.0, d * 2.0 * q);
        }
        let p = self.prefactor(t);
        (u * p, ux * p)
    }

    /// Renormalization constant of the underlying state.
    pub fn m(&self) -> f64 {
        self.state.m
    }
}

fn check_t(t: f64) -> Result<()> {
    if t > 0.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("t must be positive, got {t}")))
    }
}

/// `u(t, x)` with the coefficients held at their stored values.
pub fn evaluate_u(f: &FieldAnsatz, t: f64, x: f64) -> Result<C> {
    check_t(t)?;
    Ok(f.u_and_ux(t, x).0)
}

/// `∂x u(t, x)`: each term carries the factor `i(x − x_k)/(2t)`.
pub fn evaluate_ux(f: &FieldAnsatz, t: f64, x: f64) -> Result<C> {
    check_t(t)?;
    Ok(f.u_and_ux(t, x).1)
}

pub fn evaluate_batch(f: &FieldAnsatz, points: &[(f64, f64)]) -> Result<Vec<C>> {
    points.iter().map(|&(t, x)| evaluate_u(f, t, x)).collect()
}

/// `Φ(t,x) = Σ_{x_j ≠ x} |α_j|² log(|x − x_j|/√t)`.
pub fn modulation_phase(alphas_sq: &[(f64, f64)], t: f64, x: f64) -> f64 {
    let st = t.sqrt();
    alphas_sq
        .iter()
        .filter(|(xj, a2)| *xj != x && *a2 != 0.0)
        .map(|(xj, a2)| a2 * ((x - xj).abs() / st).ln())
        .sum()
}

/// A time-dependent family of fields, as consumed by the frame integrators.
pub trait FieldSource {
    fn field_at(&self, t: f64) -> Result<FieldAnsatz>;
    /// Times for which `field_at` is available.
    fn window(&self) -> (f64, f64);
    fn locations(&self) -> Vec<f64>;
    fn alphas(&self) -> Vec<C>;
    fn convention(&self) -> Convention;
    fn sign(&self) -> i8;
    fn m(&self) -> f64 {
        self.alphas().iter().map(|a| a.norm_sqr()).sum()
    }
}

impl FieldSource for CoefficientTrajectory {
    fn field_at(&self, t: f64) -> Result<FieldAnsatz> {
        Ok(FieldAnsatz::new(self.state_at(t)?))
    }

    fn window(&self) -> (f64, f64) {
        match &self.dense {
            Some(d) if !d.ts.is_empty() => (d.ts[0], d.ts[d.ts.len() - 1]),
            _ => (f64::NAN, f64::NAN),
        }
    }

    fn locations(&self) -> Vec<f64> {
        CoefficientTrajectory::locations(self).to_vec()
    }

    fn alphas(&self) -> Vec<C> {
        CoefficientTrajectory::alphas(self).to_vec()
    }

    fn convention(&self) -> Convention {
        self.states[0].convention
    }

    fn sign(&self) -> i8 {
        self.states[0].sign
    }
}

/// Leading-order coefficients `A_k(t) = e^{iγ_k log√t} α_k`. Exact whenever
/// the non-resonant interaction vanishes (one corner, or two adjacent ones
/// without halo).
#[derive(Debug, Clone)]
pub struct LeadingOrder {
    pub data: Vec<(f64, C)>,
    pub sign: i8,
    pub convention: Convention,
}

impl FieldSource for LeadingOrder {
    fn field_at(&self, t: f64) -> Result<FieldAnsatz> {
        check_t(t)?;
        let mut state = CoefficientState::new(t, &self.data, self.sign, self.convention)?;
        state.renorm = RenormMode::SumSq;
        let kappa = state.kappa();
        let lt = 0.5 * t.ln();
        for v in state.values.iter_mut() {
            *v *= C::from_polar(1.0, 2.0 * kappa * v.norm_sqr() * lt);
        }
        Ok(FieldAnsatz::new(state))
    }

    fn window(&self) -> (f64, f64) {
        (0.0, f64::INFINITY)
    }

    fn locations(&self) -> Vec<f64> {
        let mut l: Vec<f64> = self.data.iter().map(|d| d.0).collect();
        l.sort_by(|a, b| a.partial_cmp(b).unwrap());
        l
    }

    fn alphas(&self) -> Vec<C> {
        let mut d = self.data.clone();
        d.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        d.into_iter().map(|d| d.1).collect()
    }

    fn convention(&self) -> Convention {
        self.convention
    }

    fn sign(&self) -> i8 {
        self.sign
    }
}
