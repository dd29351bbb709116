//! Polygonal lines as Dirac data and back.
//!
//! A corner at `x_n` with interior angle `θ_n` carries the amplitude
//! `|α_n| = √(−(2/π) log sin(θ_n/2))`. Between consecutive corners the
//! normalized wedges `W_n = T_{n−1} ∧ T_n / |·|` turn by the torsion angle
//! `τ_{n+1} ∈ [0, π]`, with `δ_{n+1} = sgn((W_n ∧ W_{n+1}) · T_n)`.
//!
//! The arguments are solved from `Arg α_0 = 0` by
//!
//! ```text
//! Arg α_{n+1} = Arg α_n + δ_{n+1} τ_{n+1} − φ_n + φ_{n+1} − (S_{n+1} − S_n),
//! S_n = Σ_{j≠n} |α_j|² log|x_n − x_j|,
//! ```
//!
//! where `φ_n = φ_{|α_n|}` is the self-similar wedge phase. For two corners
//! `S_1 − S_0 = (|α_0|² − |α_1|²) log|x_0 − x_1| = β_0`.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Rotation3};
use serde::{Deserialize, Serialize};

use crate::frame_flow::Frame;
use crate::self_similar::{alpha_from_angle, angle_from_alpha, corner_angle, PhiTable};
use crate::{Complex64 as C, Error, Result, Vec3};

/// Largest accepted interior angle before a warning is attached.
const NEAR_FLAT: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Corner {
    pub x: f64,
    pub theta: f64,
    #[serde(default)]
    pub tau: f64,
    #[serde(default = "plus")]
    pub delta: i8,
}

fn plus() -> i8 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolylineSpec {
    pub corners: Vec<Corner>,
}

impl PolylineSpec {
    /// Checks the invariants and returns warnings for accepted edge cases.
    pub fn validate(&self) -> Result<Vec<String>> {
        let mut warnings = Vec::new();
        if self.corners.is_empty() {
            return Err(Error::InvalidInput("polyline needs at least one corner".into()));
        }
        for (i, c) in self.corners.iter().enumerate() {
            if !(c.theta > 0.0 && c.theta < PI) {
                return Err(Error::Domain(format!(
                    "corner {i}: angle {} must lie strictly inside (0, π)",
                    c.theta
                )));
            }
            if c.theta > PI - NEAR_FLAT {
                warnings.push(format!("corner {i}: angle {} is within {NEAR_FLAT:e} of π", c.theta));
            }
            if !(0.0..=PI).contains(&c.tau) {
                return Err(Error::Domain(format!("corner {i}: torsion {} not in [0, π]", c.tau)));
            }
            if c.delta != 1 && c.delta != -1 {
                return Err(Error::InvalidInput(format!("corner {i}: delta must be +1 or −1")));
            }
            if !c.x.is_finite() {
                return Err(Error::InvalidInput(format!("corner {i}: location must be finite")));
            }
            if c.x.fract() != 0.0 {
                warnings.push(format!("corner {i}: location {} is not an integer", c.x));
            }
        }
        if self.corners[0].tau != 0.0 || self.corners[0].delta != 1 {
            return Err(Error::InvalidInput("corner 0 must have tau = 0 and delta = +1".into()));
        }
        if self.corners.windows(2).any(|w| w[1].x <= w[0].x) {
            return Err(Error::InvalidInput("corner locations must be strictly increasing".into()));
        }
        Ok(warnings)
    }

    /// `Σ (1 + |x_n|)⁶ |α_n|²`.
    pub fn weighted_norm(&self) -> Result<f64> {
        self.corners
            .iter()
            .map(|c| Ok((1.0 + c.x.abs()).powi(6) * alpha_from_angle(c.theta)?.powi(2)))
            .sum()
    }
}

/// Which phase differences enter the argument recursion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseCoupling {
    /// `S_{n+1} − S_n` over all corners.
    AllCorners,
    /// Only the pair `(n, n+1)`, i.e. `β_n`.
    Adjacent,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoefficientDesign {
    pub alphas: Vec<(f64, C)>,
    /// `β_n = (|α_n|² − |α_{n+1}|²) log|x_n − x_{n+1}|`.
    pub beta: Vec<f64>,
    pub phi_used: Vec<f64>,
    pub phi_error: Vec<f64>,
    /// `S_{n+1} − S_n` as used in the recursion.
    pub phase_steps: Vec<f64>,
    /// `cos τ_{n+1} + cos(φ_n − φ_{n+1} + β_n + Arg α_n − Arg α_{n+1})` for
    /// the solved arguments.
    pub alternate_identity: Vec<f64>,
    pub warnings: Vec<String>,
}

fn wrap(a: f64) -> f64 {
    a.rem_euclid(2.0 * PI)
}

/// Designs `α_{x_n}` for the polyline.
pub fn design_coefficients(
    spec: &PolylineSpec,
    table: &PhiTable,
    coupling: PhaseCoupling,
) -> Result<CoefficientDesign> {
    let warnings = spec.validate()?;
    let n = spec.corners.len();
    let mods: Vec<f64> = spec.corners.iter().map(|c| alpha_from_angle(c.theta)).collect::<Result<_>>()?;
    let mut phi = Vec::with_capacity(n);
    let mut phi_error = Vec::with_capacity(n);
    if n > 1 {
        for &a in &mods {
            let l = table.lookup(a)?;
            phi.push(l.phi);
            phi_error.push(l.error);
        }
    }
    let xs: Vec<f64> = spec.corners.iter().map(|c| c.x).collect();
    let s_of = |k: usize| -> f64 {
        (0..n).filter(|&j| j != k).map(|j| mods[j] * mods[j] * (xs[k] - xs[j]).abs().ln()).sum()
    };
    let mut beta = Vec::new();
    let mut steps = Vec::new();
    let mut args = vec![0.0; n];
    let mut alternate = Vec::new();
    for i in 0..n.saturating_sub(1) {
        let b = (mods[i] * mods[i] - mods[i + 1] * mods[i + 1]) * (xs[i] - xs[i + 1]).abs().ln();
        let ds = match coupling {
            PhaseCoupling::AllCorners => s_of(i + 1) - s_of(i),
            PhaseCoupling::Adjacent => b,
        };
        let c = &spec.corners[i + 1];
        args[i + 1] = wrap(args[i] + c.delta as f64 * c.tau - phi[i] + phi[i + 1] - ds);
        alternate.push(c.tau.cos() + (phi[i] - phi[i + 1] + b + args[i] - args[i + 1]).cos());
        beta.push(b);
        steps.push(ds);
    }
    let alphas = xs.iter().zip(&mods).zip(&args).map(|((x, m), a)| (*x, C::from_polar(*m, *a))).collect();
    Ok(CoefficientDesign {
        alphas,
        beta,
        phi_used: phi,
        phi_error,
        phase_steps: steps,
        alternate_identity: alternate,
        warnings,
    })
}

#[derive(Debug, Clone)]
pub struct Polyline {
    pub xs: Vec<f64>,
    pub vertices: Vec<Vec3>,
    /// `T_{−1}, T_0, …, T_{N−1}`: the tangent left of `x_0`, then the tangent
    /// right of each corner.
    pub tangents: Vec<Vec3>,
    pub warnings: Vec<String>,
}

impl Polyline {
    /// Arc-length parametrized point `χ0(x)`.
    pub fn eval(&self, x: f64) -> Vec3 {
        let i = self.xs.partition_point(|&c| c <= x);
        if i == 0 {
            self.vertices[0] + self.tangents[0] * (x - self.xs[0])
        } else {
            self.vertices[i - 1] + self.tangents[i] * (x - self.xs[i - 1])
        }
    }

    pub fn sample(&self, xs: &[f64]) -> Vec<Vec3> {
        xs.iter().map(|&x| self.eval(x)).collect()
    }

    /// Tangent on the open segment containing `x`.
    pub fn tangent_at(&self, x: f64) -> Vec3 {
        self.tangents[self.xs.partition_point(|&c| c <= x)]
    }
}

/// Builds the polyline with `χ0(x_0) = base_point` and `T_{−1} = base.t`;
/// the first corner turns towards `base.e1`, so `W_0 = base.e2`.
pub fn build_polyline(spec: &PolylineSpec, base: &Frame, base_point: Vec3) -> Result<Polyline> {
    let warnings = spec.validate()?;
    let mut tangents = vec![base.t];
    let mut w = base.e2;
    let mut vertices = vec![base_point];
    for (i, c) in spec.corners.iter().enumerate() {
        let turn = PI - c.theta;
        let prev = *tangents.last().unwrap();
        if i == 0 {
            tangents.push(prev * turn.cos() + base.e1 * turn.sin());
            continue;
        }
        w = w * c.tau.cos() + prev.cross(&w) * (c.delta as f64 * c.tau.sin());
        w = (w - prev * w.dot(&prev)).normalize();
        let next = prev * turn.cos() + w.cross(&prev) * turn.sin();
        let v = vertices[i - 1] + prev * (c.x - spec.corners[i - 1].x);
        vertices.push(v);
        tangents.push(next.normalize());
    }
    Ok(Polyline { xs: spec.corners.iter().map(|c| c.x).collect(), vertices, tangents, warnings })
}

#[derive(Debug, Clone)]
pub struct Extraction {
    pub spec: PolylineSpec,
    /// Corners whose wedges are (anti)parallel, so `δ` was set to `+`.
    pub planar_joints: Vec<usize>,
    pub notes: Vec<String>,
}

/// Recovers `(θ, τ, δ)` from segment tangents `T_{−1}, …, T_{N−1}` separated
/// at `locations` (`tangents.len() = locations.len() + 1`).
pub fn extract_spec_from_tangents(locations: &[f64], tangents: &[Vec3]) -> Result<Extraction> {
    if tangents.len() != locations.len() + 1 {
        return Err(Error::InvalidInput(format!(
            "expected {} tangents for {} boundaries, got {}",
            locations.len() + 1,
            locations.len(),
            tangents.len()
        )));
    }
    let ts: Vec<Vec3> = tangents
        .iter()
        .map(|t| {
            let n = t.norm();
            if n > 0.0 && n.is_finite() {
                Ok(t / n)
            } else {
                Err(Error::InvalidInput("tangents must be non-zero".into()))
            }
        })
        .collect::<Result<_>>()?;
    let mut corners = Vec::new();
    let mut notes = Vec::new();
    let mut planar = Vec::new();
    let mut last_wedge: Option<Vec3> = None;
    for (i, &x) in locations.iter().enumerate() {
        let (a, b) = (ts[i], ts[i + 1]);
        let cross = a.cross(&b);
        if cross.norm() < 1e-12 {
            if a.dot(&b) < 0.0 {
                return Err(Error::Domain(format!("boundary {i}: antiparallel tangents (θ = 0)")));
            }
            notes.push(format!("boundary {i} at x = {x}: parallel tangents, no corner"));
            continue;
        }
        let w = cross.normalize();
        let theta = corner_angle(&a, &b);
        let (tau, delta) = match last_wedge {
            None => (0.0, 1),
            Some(w0) => {
                let tau = w0.dot(&w).clamp(-1.0, 1.0).acos();
                let s = w0.cross(&w).dot(&a);
                if s.abs() < 1e-9 {
                    planar.push(corners.len());
                    (tau, 1)
                } else {
                    (tau, if s > 0.0 { 1 } else { -1 })
                }
            }
        };
        corners.push(Corner { x, theta, tau, delta });
        last_wedge = Some(w);
    }
    Ok(Extraction { spec: PolylineSpec { corners }, planar_joints: planar, notes })
}

#[derive(Debug, Clone)]
pub struct RigidFit {
    /// `b ≈ rotation · a + translation`.
    pub rotation: Rotation3<f64>,
    pub translation: Vec3,
    pub rms: f64,
    pub max: f64,
}

fn kabsch(h: Matrix3<f64>) -> Result<Rotation3<f64>> {
    let svd = h.svd(true, true);
    let (u, vt) = match (svd.u, svd.v_t) {
        (Some(u), Some(v)) => (u, v),
        _ => return Err(Error::Degenerate("SVD failed in rigid alignment".into())),
    };
    let d = (vt.transpose() * u.transpose()).determinant().signum();
    let r = vt.transpose() * Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, d)) * u.transpose();
    Ok(Rotation3::from_matrix_unchecked(r))
}

fn check_pairs(a: &[Vec3], b: &[Vec3]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::InvalidInput("point sets must have equal length".into()));
    }
    Ok(())
}

/// Proper rotation `R` minimizing `Σ |R a_i − b_i|²` and the RMS residual.
pub fn fit_rotation(a: &[Vec3], b: &[Vec3]) -> Result<(Rotation3<f64>, f64)> {
    check_pairs(a, b)?;
    if a.len() < 2 {
        return Err(Error::Degenerate("need at least two vectors to fix a rotation".into()));
    }
    let h: Matrix3<f64> = a.iter().zip(b).map(|(p, q)| p * q.transpose()).sum();
    let r = kabsch(h)?;
    let rms = (a.iter().zip(b).map(|(p, q)| (r * p - q).norm_squared()).sum::<f64>() / a.len() as f64).sqrt();
    Ok((r, rms))
}

/// Optimal rigid motion taking `a` onto `b` (orthogonal Procrustes with
/// translation).
pub fn compare_rigid(a: &[Vec3], b: &[Vec3]) -> Result<RigidFit> {
    check_pairs(a, b)?;
    let n = a.len();
    let ca: Vec3 = a.iter().sum::<Vec3>() / n.max(1) as f64;
    let cb: Vec3 = b.iter().sum::<Vec3>() / n.max(1) as f64;
    let da: Vec<Vec3> = a.iter().map(|p| p - ca).collect();
    let db: Vec<Vec3> = b.iter().map(|p| p - cb).collect();
    let scale = da.iter().map(|p| p.norm()).fold(0.0, f64::max).max(1e-300);
    let far = da.iter().cloned().max_by(|p, q| p.norm().partial_cmp(&q.norm()).unwrap()).unwrap_or_default();
    let spread = da.iter().map(|q| far.cross(q).norm()).fold(0.0, f64::max);
    if n < 3 || spread <= 1e-12 * scale * scale {
        return Err(Error::Degenerate("need at least three non-collinear points".into()));
    }
    let h: Matrix3<f64> = da.iter().zip(&db).map(|(p, q)| p * q.transpose()).sum();
    let rotation = kabsch(h)?;
    let translation = cb - rotation * ca;
    let res: Vec<f64> = a.iter().zip(b).map(|(p, q)| (rotation * p + translation - q).norm()).collect();
    let rms = (res.iter().map(|r| r * r).sum::<f64>() / n as f64).sqrt();
    Ok(RigidFit { rotation, translation, rms, max: res.iter().cloned().fold(0.0, f64::max) })
}

/// Inverse of [`design_coefficients`]: reads `(θ, τ, δ)` back from the
/// moduli and argument steps of the coefficients.
pub fn decode_coefficients(alphas: &[(f64, C)], table: &PhiTable) -> Result<PolylineSpec> {
    let mut data: Vec<(f64, C)> = alphas.iter().filter(|a| a.1.norm() > 0.0).copied().collect();
    data.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    if data.is_empty() {
        return Err(Error::InvalidInput("no non-zero coefficient to decode".into()));
    }
    let n = data.len();
    let mods: Vec<f64> = data.iter().map(|d| d.1.norm()).collect();
    let s_of = |k: usize| -> f64 {
        (0..n).filter(|&j| j != k).map(|j| mods[j] * mods[j] * (data[k].0 - data[j].0).abs().ln()).sum()
    };
    let mut corners = Vec::with_capacity(n);
    let mut prev_phi = 0.0;
    for k in 0..n {
        let theta = angle_from_alpha(mods[k])?;
        if k == 0 {
            if n > 1 {
                prev_phi = table.lookup(mods[0])?.phi;
            }
            corners.push(Corner { x: data[0].0, theta, tau: 0.0, delta: 1 });
            continue;
        }
        let phi = table.lookup(mods[k])?.phi;
        let step = data[k].1.arg() - data[k - 1].1.arg() + prev_phi - phi + s_of(k) - s_of(k - 1);
        let signed = (step + PI).rem_euclid(2.0 * PI) - PI;
        let delta = if signed < 0.0 { -1 } else { 1 };
        corners.push(Corner { x: data[k].0, theta, tau: signed.abs(), delta });
        prev_phi = phi;
    }
    Ok(PolylineSpec { corners })
}

/// The same polygon traversed backwards, parametrized by `−x`: corners at
/// `−x_n` in reverse order with unchanged `θ`, `τ` and `δ`.
pub fn reversed_spec(spec: &PolylineSpec) -> PolylineSpec {
    let n = spec.corners.len();
    let corners = (0..n)
        .map(|j| {
            let c = &spec.corners[n - 1 - j];
            let (tau, delta) = if j == 0 {
                (0.0, 1)
            } else {
                let t = &spec.corners[n - j];
                (t.tau, t.delta)
            };
            Corner { x: 0.0 - c.x, theta: c.theta, tau, delta }
        })
        .collect();
    PolylineSpec { corners }
}
