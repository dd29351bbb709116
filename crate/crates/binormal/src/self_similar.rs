//! Profile of the self-similar solution generated by a single Dirac mass.
//!
//! The profile frame solves `T' = Re(ū N)`, `N' = −u T` with
//! `u(x) = a e^{ix²/4}`, started from `T(0) = ê1`, `N(0) = ê2 + iê3`.
//! As `x → ±∞` the tangent converges to `A±` and the modulated normal
//! `e^{ia² log|x|} N(x)` to `B±`, both with `O(1/x)` oscillatory errors.
//!
//! With this initialization the reflection `P = diag(1, −1, −1)` gives
//! `T(−x) = P T(x)` and `N(−x) = −P N(x)`, so `A⁻ = P A⁺` and `B⁻ = −P B⁺`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::frame_flow::Frame;
use crate::{CVec3, Complex64 as C, Error, Result, Vec3};

/// `a = √(−(2/π) log sin(θ/2))` for the corner angle `θ ∈ (0, π)`.
pub fn alpha_from_angle(theta: f64) -> Result<f64> {
    if !(theta > 0.0 && theta <= PI) {
        return Err(Error::Domain(format!("corner angle {theta} not in (0, π)")));
    }
    Ok((-(2.0 / PI) * (theta / 2.0).sin().ln()).max(0.0).sqrt())
}

/// `θ = 2 arcsin(e^{−πa²/2})`.
pub fn angle_from_alpha(a: f64) -> Result<f64> {
    if !(a >= 0.0 && a.is_finite()) {
        return Err(Error::Domain(format!("amplitude {a} must be finite and non-negative")));
    }
    Ok(2.0 * (-PI * a * a / 2.0).exp().asin())
}

/// Interior angle of a corner with incoming direction `t_in` and outgoing
/// direction `t_out`: `π` minus the angle between the two tangents.
pub fn corner_angle(t_in: &Vec3, t_out: &Vec3) -> f64 {
    PI - t_in.angle(t_out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProfileConfig {
    /// Step control: `h = step_factor / (1 + a + |x|/2)`.
    pub step_factor: f64,
    /// Spacing of the stored samples.
    pub dx_out: f64,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        ProfileConfig { step_factor: 0.01, dx_out: 0.05 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProfileSample {
    pub x: f64,
    pub frame: Frame,
}

/// Average of `T` and `e^{ia² log|x|} N` over one Fresnel period
/// `x²/4 ∈ [x_end²/4 − 2π, x_end²/4]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Station {
    pub x_end: f64,
    pub x_center: f64,
    pub tangent: Vec3,
    pub normal: CVec3,
}

#[derive(Debug, Clone)]
pub struct SelfSimilarProfile {
    pub a: f64,
    pub x_max: f64,
    pub samples: Vec<ProfileSample>,
    /// Stations for `x > 0` and `x < 0` (the latter with negative `x_end`).
    pub stations_plus: Vec<Station>,
    pub stations_minus: Vec<Station>,
    pub max_drift: f64,
    pub asymptotics: Option<Asymptotics>,
    pub phi: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Asymptotics {
    pub a_plus: Vec3,
    pub a_minus: Vec3,
    pub b_plus: CVec3,
    pub b_minus: CVec3,
    /// Largest deviation from unit norm and mutual orthogonality among
    /// `A±, Re B±, Im B±`.
    pub frame_defect: f64,
    /// Change of the extrapolated limits when the station set is shifted by
    /// one octave towards smaller `|x|`.
    pub consistency: f64,
    pub warnings: Vec<String>,
}

impl Asymptotics {
    pub fn corner_angle(&self) -> f64 {
        corner_angle(&self.a_minus, &self.a_plus)
    }

    pub fn parity(&self) -> Parity {
        let p = |v: &Vec3| Vec3::new(v[0], -v[1], -v[2]);
        let pc = |v: &CVec3| CVec3::new(p(&v.re), p(&v.im));
        let neg = |v: &CVec3| CVec3::new(-v.re, -v.im);
        Parity {
            tangent: (self.a_minus - p(&self.a_plus)).norm(),
            normal_literal: (self.b_minus - pc(&self.b_plus)).norm(),
            normal_reflected: (self.b_minus - neg(&pc(&self.b_plus))).norm(),
        }
    }
}

/// Residuals of the reflection relations between the two ends.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Parity {
    /// `|A⁻ − P A⁺|`.
    pub tangent: f64,
    /// `|B⁻ − P B⁺|`.
    pub normal_literal: f64,
    /// `|B⁻ + P B⁺|`, the relation implied by `N(−x) = −P N(x)`.
    pub normal_reflected: f64,
}

#[inline]
pub(crate) fn space_derivative(u: C, f: &Frame) -> Frame {
    Frame { t: f.e1 * u.re + f.e2 * u.im, e1: -f.t * u.re, e2: -f.t * u.im }
}

#[inline]
pub(crate) fn rk4_space<F: Fn(f64) -> C>(u: &F, x: f64, h: f64, f: &Frame) -> Frame {
    let k1 = space_derivative(u(x), f);
    let k2 = space_derivative(u(x + 0.5 * h), &f.axpy(0.5 * h, &k1));
    let k3 = space_derivative(u(x + 0.5 * h), &f.axpy(0.5 * h, &k2));
    let k4 = space_derivative(u(x + h), &f.axpy(h, &k3));
    Frame {
        t: f.t + (k1.t + k2.t * 2.0 + k3.t * 2.0 + k4.t) * (h / 6.0),
        e1: f.e1 + (k1.e1 + k2.e1 * 2.0 + k3.e1 * 2.0 + k4.e1) * (h / 6.0),
        e2: f.e2 + (k1.e2 + k2.e2 * 2.0 + k3.e2 * 2.0 + k4.e2) * (h / 6.0),
    }
}

struct Accum {
    x_start: f64,
    x_end: f64,
    weight: f64,
    t: Vec3,
    n: CVec3,
    xw: f64,
}

/// Integrates the profile frame to `±x_max`, storing samples every
/// `dx_out` and Fresnel-period averages at stations `x_max / 2^j`.
pub fn solve_profile(a: f64, x_max: f64, cfg: &ProfileConfig) -> Result<SelfSimilarProfile> {
    if !(a.is_finite() && a >= 0.0) {
        return Err(Error::InvalidInput(format!("amplitude {a} must be finite and ≥ 0")));
    }
    if !(x_max > 0.0 && x_max.is_finite()) {
        return Err(Error::InvalidInput(format!("x_max must be positive, got {x_max}")));
    }
    let u = |x: f64| C::from_polar(a, x * x / 4.0);
    let mut ends: Vec<f64> = (0..6)
        .map(|j| x_max / 2f64.powi(j))
        .filter(|&x| x * x > 8.0 * PI + 1.0)
        .collect();
    ends.reverse();

    let mut samples_plus = Vec::new();
    let mut samples_minus = Vec::new();
    let mut stations = [Vec::new(), Vec::new()];
    let mut drift: f64 = 0.0;
    for (side, sgn) in [1.0f64, -1.0].into_iter().enumerate() {
        let mut accs: Vec<Accum> = ends
            .iter()
            .map(|&e| Accum {
                x_start: (e * e - 8.0 * PI).sqrt(),
                x_end: e,
                weight: 0.0,
                t: Vec3::zeros(),
                n: CVec3::default(),
                xw: 0.0,
            })
            .collect();
        let mut marks: Vec<f64> = accs.iter().flat_map(|c| [c.x_start, c.x_end]).collect();
        let n_out = (x_max / cfg.dx_out).floor() as usize;
        marks.extend((1..=n_out).map(|i| i as f64 * cfg.dx_out));
        marks.push(x_max);
        marks.sort_by(|p, q| p.partial_cmp(q).unwrap());
        marks.dedup();

        let mut f = Frame::canonical();
        let mut x = 0.0;
        let out = if side == 0 { &mut samples_plus } else { &mut samples_minus };
        out.push(ProfileSample { x: 0.0, frame: f });
        let modulated = |x: f64, f: &Frame| f.n().scale(C::from_polar(1.0, a * a * x.abs().ln()));
        for &mk in &marks {
            while x < mk {
                let h = (cfg.step_factor / (1.0 + a + x / 2.0)).min(mk - x);
                let h = if mk - x - h < 1e-12 { mk - x } else { h };
                let f0 = f;
                let x0 = x;
                let mut f1 = rk4_space(&|s: f64| u(sgn * s) * sgn, x, h, &f);
                drift = drift.max(f1.orthonormality_defect() / h);
                f1.reorthonormalize();
                f = f1;
                x = if mk - x - h <= 0.0 { mk } else { x + h };
                for c in accs.iter_mut() {
                    if x0 >= c.x_start - 1e-12 && x <= c.x_end + 1e-12 {
                        let (w0, w1) = (x0 / 2.0 * (x - x0) / 2.0, x / 2.0 * (x - x0) / 2.0);
                        c.weight += w0 + w1;
                        c.t += f0.t * w0 + f.t * w1;
                        c.n = c.n + modulated(x0, &f0).scale(C::new(w0, 0.0))
                            + modulated(x, &f).scale(C::new(w1, 0.0));
                        c.xw += x0 * w0 + x * w1;
                    }
                }
            }
            if (mk / cfg.dx_out - (mk / cfg.dx_out).round()).abs() < 1e-9 || mk == x_max {
                out.push(ProfileSample { x: mk, frame: f });
            }
        }
        stations[side] = accs
            .into_iter()
            .map(|c| {
                let w = c.weight;
                Station {
                    x_end: sgn * c.x_end,
                    x_center: sgn * c.xw / w,
                    tangent: c.t / w,
                    normal: CVec3::new(c.n.re / w, c.n.im / w),
                }
            })
            .collect();
    }
    // The minus side runs in s = −x with field −u(−s); its frames are the
    // frames at x = −s.
    let mut samples: Vec<ProfileSample> = samples_minus
        .into_iter()
        .skip(1)
        .map(|s| ProfileSample { x: -s.x, frame: s.frame })
        .collect();
    samples.reverse();
    samples.extend(samples_plus);
    let [sp, sm] = stations;
    Ok(SelfSimilarProfile {
        a,
        x_max,
        samples,
        stations_plus: sp,
        stations_minus: sm,
        max_drift: drift,
        asymptotics: None,
        phi: None,
    })
}

/// Lagrange extrapolation to `1/x = 0` through three stations.
fn extrapolate<V>(st: &[&Station], get: impl Fn(&Station) -> V) -> V
where
    V: std::ops::Mul<f64, Output = V> + std::ops::Add<Output = V> + Copy,
{
    let u: Vec<f64> = st.iter().map(|s| 1.0 / s.x_center.abs()).collect();
    let mut acc: Option<V> = None;
    for i in 0..3 {
        let mut w = 1.0;
        for j in 0..3 {
            if j != i {
                w *= -u[j] / (u[i] - u[j]);
            }
        }
        let term = get(st[i]) * w;
        acc = Some(match acc {
            None => term,
            Some(a) => a + term,
        });
    }
    acc.unwrap()
}

impl std::ops::Mul<f64> for CVec3 {
    type Output = CVec3;
    fn mul(self, s: f64) -> CVec3 {
        CVec3::new(self.re * s, self.im * s)
    }
}

fn limits(stations: &[Station], x_window: f64) -> Option<(Vec3, CVec3, Vec3, CVec3)> {
    let usable: Vec<&Station> =
        stations.iter().filter(|s| s.x_end.abs() <= x_window * (1.0 + 1e-12)).collect();
    if usable.len() < 3 {
        return None;
    }
    let n = usable.len();
    let top = &usable[n - 3..];
    let t = extrapolate(top, |s| s.tangent);
    let b = extrapolate(top, |s| s.normal);
    let (t2, b2) = if n >= 4 {
        let lower = &usable[n - 4..n - 1];
        (extrapolate(lower, |s| s.tangent), extrapolate(lower, |s| s.normal))
    } else {
        (t, b)
    };
    Some((t, b, t2, b2))
}

/// Extrapolated `A±`, `B±` from the stations with `|x_end| ≤ x_window`.
pub fn extract_asymptotics(profile: &SelfSimilarProfile, x_window: f64) -> Result<Asymptotics> {
    let mut warnings = Vec::new();
    if x_window > profile.x_max * (1.0 + 1e-12) {
        warnings.push(format!(
            "window {x_window} exceeds the solved range {}; using {}",
            profile.x_max, profile.x_max
        ));
    }
    let xw = x_window.min(profile.x_max);
    let (Some(plus), Some(minus)) =
        (limits(&profile.stations_plus, xw), limits(&profile.stations_minus, xw))
    else {
        return Err(Error::InvalidInput(format!(
            "window {xw} holds fewer than three averaging stations"
        )));
    };
    let (a_plus, b_plus, a_plus2, b_plus2) = plus;
    let (a_minus, b_minus, a_minus2, b_minus2) = minus;
    let consistency = [
        (a_plus - a_plus2).norm(),
        (a_minus - a_minus2).norm(),
        (b_plus - b_plus2).norm(),
        (b_minus - b_minus2).norm(),
    ]
    .into_iter()
    .fold(0.0, f64::max);
    let mut defect: f64 = 0.0;
    for (a, b) in [(a_plus, b_plus), (a_minus, b_minus)] {
        let vs = [a, b.re, b.im];
        for i in 0..3 {
            defect = defect.max((vs[i].norm() - 1.0).abs());
            for j in i + 1..3 {
                defect = defect.max(vs[i].dot(&vs[j]).abs());
            }
        }
    }
    if defect > 1e-4 {
        warnings.push(format!("extrapolated frame defect {defect:e}; enlarge the window"));
    }
    Ok(Asymptotics {
        a_plus,
        a_minus,
        b_plus,
        b_minus,
        frame_defect: defect,
        consistency,
        warnings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhiReport {
    pub phi: f64,
    /// `|Re(e^{iφ}B⁺) − w|` with `w = A⁻∧A⁺/|A⁻∧A⁺|`.
    pub residual: f64,
    /// `|Re(e^{iφ}B⁻) − w|`, the companion identity at the other end.
    pub residual_minus: f64,
    /// `|−Re(e^{−iφ}B⁻) − w|`.
    pub residual_minus_conjugate: f64,
    /// φ obtained from `w = (0, −A3, A2)/√(1 − A1²)` built from `A⁺` alone.
    pub phi_explicit: f64,
}

fn solve_phi(w: &Vec3, b: &CVec3) -> f64 {
    // Re(e^{iφ}B) = cos φ Re B − sin φ Im B.
    (-w.dot(&b.im)).atan2(w.dot(&b.re)).rem_euclid(2.0 * PI)
}

/// The unique `φ ∈ [0, 2π)` with `A⁻∧A⁺/|A⁻∧A⁺| = Re(e^{iφ}B⁺)`.
pub fn phi_a(asy: &Asymptotics) -> Result<PhiReport> {
    let wedge = asy.a_minus.cross(&asy.a_plus);
    if wedge.norm() < 1e-9 {
        return Err(Error::UndefinedPhase("A⁻ and A⁺ are parallel (no corner)".into()));
    }
    let w = wedge / wedge.norm();
    let phi = solve_phi(&w, &asy.b_plus);
    let re = |b: &CVec3, p: f64| b.rotate(p).re;
    let residual = (re(&asy.b_plus, phi) - w).norm();
    let residual_minus = (re(&asy.b_minus, phi) - w).norm();
    let residual_minus_conjugate = (-re(&asy.b_minus, -phi) - w).norm();
    let ap = asy.a_plus;
    let we = Vec3::new(0.0, -ap[2], ap[1]) / (1.0 - ap[0] * ap[0]).sqrt();
    let phi_explicit = solve_phi(&we, &asy.b_plus);
    Ok(PhiReport { phi, residual, residual_minus, residual_minus_conjugate, phi_explicit })
}

impl SelfSimilarProfile {
    /// Solves, extracts the asymptotics at the full range and computes φ.
    pub fn compute(a: f64, x_max: f64, cfg: &ProfileConfig) -> Result<Self> {
        let mut p = solve_profile(a, x_max, cfg)?;
        let asy = extract_asymptotics(&p, x_max)?;
        p.phi = phi_a(&asy).ok().map(|r| r.phi);
        p.asymptotics = Some(asy);
        Ok(p)
    }
}

/// `φ_a` values for a set of amplitudes.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PhiTable {
    pub entries: Vec<(f64, f64)>,
    pub x_max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhiLookup {
    pub phi: f64,
    /// Estimated interpolation error (0 for tabulated amplitudes).
    pub error: f64,
}

impl PhiTable {
    pub fn compute(amplitudes: &[f64], x_max: f64, cfg: &ProfileConfig) -> Result<PhiTable> {
        let mut a: Vec<f64> = amplitudes.to_vec();
        a.sort_by(|p, q| p.partial_cmp(q).unwrap());
        a.dedup_by(|p, q| (*p - *q).abs() <= 1e-14);
        let mut entries = Vec::with_capacity(a.len());
        for &ai in &a {
            let p = solve_profile(ai, x_max, cfg)?;
            let asy = extract_asymptotics(&p, x_max)?;
            entries.push((ai, phi_a(&asy)?.phi));
        }
        Ok(PhiTable { entries, x_max })
    }

    pub fn lookup(&self, a: f64) -> Result<PhiLookup> {
        if let Some(e) = self.entries.iter().find(|e| (e.0 - a).abs() <= 1e-12 * (1.0 + a)) {
            return Ok(PhiLookup { phi: e.1, error: 0.0 });
        }
        let n = self.entries.len();
        if n < 2 || a < self.entries[0].0 || a > self.entries[n - 1].0 {
            return Err(Error::MissingProfile(format!("no φ entry covering a = {a}")));
        }
        let i = self.entries.partition_point(|e| e.0 < a).clamp(1, n - 1);
        let (a0, p0) = self.entries[i - 1];
        let (a1, mut p1) = self.entries[i];
        p1 = p0 + (p1 - p0 + PI).rem_euclid(2.0 * PI) - PI;
        let lin = p0 + (p1 - p0) * (a - a0) / (a1 - a0);
        let error = if n >= 3 {
            let j = if i + 1 < n { i + 1 } else { i - 2 };
            let (a2, mut p2) = self.entries[j];
            p2 = p0 + (p2 - p0 + PI).rem_euclid(2.0 * PI) - PI;
            let quad = p0 * (a - a1) * (a - a2) / ((a0 - a1) * (a0 - a2))
                + p1 * (a - a0) * (a - a2) / ((a1 - a0) * (a1 - a2))
                + p2 * (a - a0) * (a - a1) / ((a2 - a0) * (a2 - a1));
            (quad - lin).abs()
        } else {
            f64::INFINITY
        };
        Ok(PhiLookup { phi: lin.rem_euclid(2.0 * PI), error })
    }
}
