//! Parallel frames `(T, e1, e2)` along the filament and the curve `χ(t,x)`.
//!
//! With `N = e1 + i e2` the space and time laws are
//!
//! ```text
//! T_x = Re(v̄ N),   N_x = −v T,
//! T_t = Im(v̄_x N), N_t = −i v_x T + i(|v|²/2 − M/(2t)) N,
//! χ_t = Im(v̄ N) = T ∧ T_x,
//! ```
//!
//! where `v = e^{iM log√t} u` and `u` solves the renormalized equation
//! `i u_t + u_xx + ½(|u|² − 2M/t) u = 0` (geometric kernel, focusing sign).
//! The two laws commute exactly because `v` solves
//! `i v_t + v_xx + (|v|²/2 − M/(2t)) v = 0`; with `u` in place of `v` they
//! would not. The time law is integrated at `x = 0` from the anchor time,
//! then the space law at fixed `t`.

use std::f64::consts::PI;

use crate::filament_field::{modulation_phase, FieldAnsatz, FieldSource};
use crate::nls_coeffs::Convention;
use crate::polyline_codec::fit_rotation;
use crate::self_similar::SelfSimilarProfile;
use crate::{CVec3, Complex64 as C, Error, Result, Vec3};
use nalgebra::{Matrix3, Rotation3};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frame {
    pub t: Vec3,
    pub e1: Vec3,
    pub e2: Vec3,
}

impl Frame {
    pub fn canonical() -> Frame {
        Frame { t: Vec3::x(), e1: Vec3::y(), e2: Vec3::z() }
    }

    pub fn n(&self) -> CVec3 {
        CVec3::new(self.e1, self.e2)
    }

    pub fn axpy(&self, h: f64, d: &Frame) -> Frame {
        Frame { t: self.t + d.t * h, e1: self.e1 + d.e1 * h, e2: self.e2 + d.e2 * h }
    }

    /// Largest entry of `FᵀF − I` together with the handedness defect.
    pub fn orthonormality_defect(&self) -> f64 {
        let v = [self.t, self.e1, self.e2];
        let mut d: f64 = 0.0;
        for i in 0..3 {
            for j in i..3 {
                let target = if i == j { 1.0 } else { 0.0 };
                d = d.max((v[i].dot(&v[j]) - target).abs());
            }
        }
        d.max((self.e1.cross(&self.e2) - self.t).norm())
    }

    /// Gram–Schmidt with `e2 = T × e1`.
    pub fn reorthonormalize(&mut self) {
        self.t = self.t.normalize();
        self.e1 = (self.e1 - self.t * self.e1.dot(&self.t)).normalize();
        self.e2 = self.t.cross(&self.e1);
    }

    /// Rows `T, e1, e2` as a matrix.
    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::from_rows(&[self.t.transpose(), self.e1.transpose(), self.e2.transpose()])
    }

    pub fn rotated(&self, r: &Rotation3<f64>) -> Frame {
        Frame { t: r * self.t, e1: r * self.e1, e2: r * self.e2 }
    }

    /// Frame after `N ↦ e^{iθ} N`.
    pub fn with_normal_phase(&self, theta: f64) -> Frame {
        let n = self.n().rotate(theta);
        Frame { t: self.t, e1: n.re, e2: n.im }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchoredConstruction {
    pub p: Vec3,
    pub t0: f64,
    pub base_frame: Frame,
}

impl AnchoredConstruction {
    pub fn new(p: Vec3, t0: f64, base_frame: Frame) -> Result<Self> {
        if !(t0 > 0.0) {
            return Err(Error::InvalidInput(format!("anchor time must be positive, got {t0}")));
        }
        if base_frame.orthonormality_defect() > 1e-10 {
            return Err(Error::InvalidInput("base frame is not orthonormal and right-handed".into()));
        }
        Ok(AnchoredConstruction { p, t0, base_frame })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stepper {
    /// Classical RK4 with Gram–Schmidt after each step.
    Rk4,
    /// Midpoint rotation exponential (second order, exactly orthogonal).
    LieMidpoint,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrameConfig {
    pub stepper: Stepper,
    /// Largest phase advance per step of the fastest oscillation.
    pub phase_step: f64,
    /// Largest `h · |generator|` per step.
    pub amp_step: f64,
    /// Hard limit on the per-step orthonormality defect before correction.
    pub drift_limit: f64,
}

impl Default for FrameConfig {
    fn default() -> Self {
        FrameConfig { stepper: Stepper::Rk4, phase_step: 0.05, amp_step: 0.05, drift_limit: 1e-6 }
    }
}

#[derive(Debug, Clone)]
pub struct CurveState {
    pub t: f64,
    pub xs: Vec<f64>,
    pub points: Vec<Vec3>,
    pub frames: Vec<Frame>,
    /// Largest per-unit-parameter orthonormality drift before correction.
    pub max_drift: f64,
}

/// `v = e^{iM log√t} u` and `v_x` at `(t, x)`.
fn v_and_vx(f: &FieldAnsatz, m: f64, t: f64, x: f64) -> (C, C) {
    let (u, ux) = f.u_and_ux(t, x);
    let g = C::from_polar(1.0, m * 0.5 * t.ln());
    (u * g, ux * g)
}

fn check_source<S: FieldSource + ?Sized>(src: &S) -> Result<()> {
    if src.convention() != Convention::Geometric || src.sign() != 1 {
        return Err(Error::InvalidInput(
            "frame laws need coefficients in the geometric convention with sign +1".into(),
        ));
    }
    Ok(())
}

#[derive(Clone, Copy)]
struct TimeState {
    frame: Frame,
    chi: Vec3,
}

fn time_derivative(v: C, vx: C, m: f64, t: f64, s: &TimeState) -> TimeState {
    let f = &s.frame;
    let c = -0.5 * v.norm_sqr() + m / (2.0 * t);
    TimeState {
        frame: Frame {
            t: -f.e1 * vx.im + f.e2 * vx.re,
            e1: f.t * vx.im + f.e2 * c,
            e2: -f.t * vx.re - f.e1 * c,
        },
        chi: f.e2 * v.re - f.e1 * v.im,
    }
}

/// Rotation `exp(h Ω)` acting on the frame rows for the skew generator with
/// entries `(a, b, c)`: `T' = a e1 + b e2`, `e1' = −a T + c e2`,
/// `e2' = −b T − c e1`.
fn rotate_frame(f: &Frame, a: f64, b: f64, c: f64, h: f64) -> Frame {
    // Rows evolve as F' = K F with K skew; K = [[0,a,b],[-a,0,c],[-b,-c,0]].
    let k = Matrix3::new(0.0, a, b, -a, 0.0, c, -b, -c, 0.0) * h;
    let w = (a * a + b * b + c * c).sqrt() * h.abs();
    let e = if w < 1e-12 {
        Matrix3::identity() + k + k * k * 0.5
    } else {
        Matrix3::identity() + k * (w.sin() / w) + k * k * ((1.0 - w.cos()) / (w * w))
    };
    let m = e * f.matrix();
    Frame {
        t: m.row(0).transpose(),
        e1: m.row(1).transpose(),
        e2: m.row(2).transpose(),
    }
}

/// Sweeps the time law at `x = 0` through monotone target times.
pub struct TimeSweep<'a, S: FieldSource + ?Sized> {
    src: &'a S,
    cfg: FrameConfig,
    m: f64,
    lambda: f64,
    slope: f64,
    t: f64,
    state: TimeState,
    pub max_drift: f64,
    pub steps: usize,
}

impl<'a, S: FieldSource + ?Sized> TimeSweep<'a, S> {
    pub fn new(anchor: &AnchoredConstruction, src: &'a S, cfg: &FrameConfig) -> Result<Self> {
        check_source(src)?;
        let locs = src.locations();
        let alphas = src.alphas();
        let lambda = locs.iter().fold(0.0f64, |m, x| m.max(x * x));
        let slope = locs.iter().zip(&alphas).map(|(x, a)| x.abs() * a.norm()).sum::<f64>();
        Ok(TimeSweep {
            src,
            cfg: cfg.clone(),
            m: src.m(),
            lambda,
            slope,
            t: anchor.t0,
            state: TimeState { frame: anchor.base_frame, chi: anchor.p },
            max_drift: 0.0,
            steps: 0,
        })
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn frame(&self) -> Frame {
        self.state.frame
    }

    pub fn chi(&self) -> Vec3 {
        self.state.chi
    }

    fn step_bound(&self, t: f64) -> f64 {
        let mass: f64 = self.m;
        let rate = self.lambda / (4.0 * t * t)
            + self.slope / (2.0 * t.powf(1.5))
            + mass / t
            + mass.sqrt() / t.sqrt();
        let phase = self.cfg.phase_step.min(self.cfg.amp_step);
        let b = if rate > 0.0 { phase / rate } else { f64::INFINITY };
        b.min(0.05 * t)
    }

    fn eval(&self, t: f64) -> Result<(C, C)> {
        let f = self.src.field_at(t)?;
        Ok(v_and_vx(&f, self.m, t, 0.0))
    }

    /// Advances (forwards or backwards) to `target`.
    pub fn advance_to(&mut self, target: f64) -> Result<()> {
        if !(target > 0.0) {
            return Err(Error::Domain(format!("target time must be positive, got {target}")));
        }
        let (lo, hi) = self.src.window();
        if target < lo || target > hi {
            return Err(Error::OutOfRange(format!(
                "target time {target} outside the coefficient window [{lo}, {hi}]"
            )));
        }
        while self.t != target {
            let dir = if target > self.t { 1.0 } else { -1.0 };
            let mut h = self.step_bound(self.t).min(self.step_bound(target.min(self.t)));
            let rem = (target - self.t).abs();
            let lands = h >= rem * (1.0 - 1e-12);
            if lands {
                h = rem;
            }
            let hs = dir * h;
            let t0 = self.t;
            let t1 = if lands { target } else { t0 + hs };
            let next = match self.cfg.stepper {
                Stepper::Rk4 => self.rk4(t0, hs)?,
                Stepper::LieMidpoint => {
                    let tm = t0 + 0.5 * hs;
                    let (v, vx) = self.eval(tm)?;
                    let c = -0.5 * v.norm_sqr() + self.m / (2.0 * tm);
                    let s = &self.state;
                    let fr = rotate_frame(&s.frame, -vx.im, vx.re, c, hs);
                    // χ_t = Re v e2 − Im v e1 along the rotated midpoint frame.
                    let mid = rotate_frame(&s.frame, -vx.im, vx.re, c, 0.5 * hs);
                    TimeState { frame: fr, chi: s.chi + (mid.e2 * v.re - mid.e1 * v.im) * hs }
                }
            };
            let mut next = next;
            let d = next.frame.orthonormality_defect();
            if d > self.cfg.drift_limit {
                return Err(Error::Integration(format!(
                    "frame drift {d:e} at t = {t1} exceeds the limit {:e}",
                    self.cfg.drift_limit
                )));
            }
            self.max_drift = self.max_drift.max(d / h);
            next.frame.reorthonormalize();
            self.state = next;
            self.t = t1;
            self.steps += 1;
        }
        Ok(())
    }

    fn rk4(&self, t0: f64, h: f64) -> Result<TimeState> {
        let s0 = self.state;
        let add = |s: &TimeState, d: &TimeState, k: f64| TimeState {
            frame: s.frame.axpy(k, &d.frame),
            chi: s.chi + d.chi * k,
        };
        let (v, vx) = self.eval(t0)?;
        let k1 = time_derivative(v, vx, self.m, t0, &s0);
        let (v, vx) = self.eval(t0 + 0.5 * h)?;
        let k2 = time_derivative(v, vx, self.m, t0 + 0.5 * h, &add(&s0, &k1, 0.5 * h));
        let k3 = time_derivative(v, vx, self.m, t0 + 0.5 * h, &add(&s0, &k2, 0.5 * h));
        let (v, vx) = self.eval(t0 + h)?;
        let k4 = time_derivative(v, vx, self.m, t0 + h, &add(&s0, &k3, h));
        let comb = |a: Vec3, b: Vec3, c: Vec3, d: Vec3| (a + b * 2.0 + c * 2.0 + d) * (h / 6.0);
        Ok(TimeState {
            frame: Frame {
                t: s0.frame.t + comb(k1.frame.t, k2.frame.t, k3.frame.t, k4.frame.t),
                e1: s0.frame.e1 + comb(k1.frame.e1, k2.frame.e1, k3.frame.e1, k4.frame.e1),
                e2: s0.frame.e2 + comb(k1.frame.e2, k2.frame.e2, k3.frame.e2, k4.frame.e2),
            },
            chi: s0.chi + comb(k1.chi, k2.chi, k3.chi, k4.chi),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameAdvance {
    pub frame: Frame,
    /// `χ(t, 0)`.
    pub chi: Vec3,
    pub max_drift: f64,
    pub steps: usize,
}

/// Integrates the time law at `x = 0` from the anchor to `t_target`.
pub fn advance_frame_in_time<S: FieldSource + ?Sized>(
    anchor: &AnchoredConstruction,
    src: &S,
    t_target: f64,
    cfg: &FrameConfig,
) -> Result<FrameAdvance> {
    if !(t_target > 0.0) {
        return Err(Error::Domain(format!("t must be positive, got {t_target}")));
    }
    let mut sweep = TimeSweep::new(anchor, src, cfg)?;
    sweep.advance_to(t_target)?;
    Ok(FrameAdvance {
        frame: sweep.frame(),
        chi: sweep.chi(),
        max_drift: sweep.max_drift,
        steps: sweep.steps,
    })
}

/// Space law at fixed `t`, from `(frame_at_0, chi_at_0)` at `x = 0` to every
/// grid point (both directions).
pub fn integrate_frame_in_space(
    frame_at_0: &Frame,
    chi_at_0: Vec3,
    field: &FieldAnsatz,
    t: f64,
    xs: &[f64],
    cfg: &FrameConfig,
) -> Result<CurveState> {
    if !(t > 0.0) {
        return Err(Error::Domain(format!("t must be positive, got {t}")));
    }
    if xs.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidInput("grid must be strictly increasing".into()));
    }
    let m = field.m();
    let locs = field.state.locations.clone();
    let amp: f64 = field.state.values.iter().map(|v| v.norm()).sum::<f64>() / t.sqrt();
    let amp = match field.normalization {
        Convention::Geometric => amp,
        Convention::Analyst => amp / (4.0 * std::f64::consts::PI).sqrt(),
    };
    let g = C::from_polar(1.0, m * 0.5 * t.ln());
    let u = |x: f64| field.u_and_ux(t, x).0 * g;
    let step = |x: f64| {
        let dmax = locs.iter().fold(0.0f64, |d, l| d.max((x - l).abs()));
        let mut h = cfg.phase_step * 2.0 * t / dmax.max(1e-300);
        if amp > 0.0 {
            h = h.min(cfg.amp_step / amp);
        }
        h.min(0.05)
    };
    let mut frames = vec![Frame::canonical(); xs.len()];
    let mut points = vec![Vec3::zeros(); xs.len()];
    let mut max_drift: f64 = 0.0;
    let split = xs.partition_point(|&x| x < 0.0);
    for dir in [1.0f64, -1.0] {
        let idx: Vec<usize> =
            if dir > 0.0 { (split..xs.len()).collect() } else { (0..split).rev().collect() };
        let mut f = *frame_at_0;
        let mut chi = chi_at_0;
        let mut s = 0.0;
        let ud = |s: f64| u(dir * s) * dir;
        for i in idx {
            let target = dir * xs[i];
            while s < target {
                let mut h = step(dir * s).min(step(dir * (s + 0.5 * step(dir * s))));
                let lands = h >= (target - s) * (1.0 - 1e-12);
                if lands {
                    h = target - s;
                }
                let (nf, dchi) = match cfg.stepper {
                    Stepper::Rk4 => rk4_space_chi(&ud, s, h, &f),
                    Stepper::LieMidpoint => {
                        let um = ud(s + 0.5 * h);
                        let nf = rotate_frame(&f, um.re, um.im, 0.0, h);
                        let mid = rotate_frame(&f, um.re, um.im, 0.0, 0.5 * h);
                        (nf, mid.t * h)
                    }
                };
                let mut nf = nf;
                let d = nf.orthonormality_defect();
                if d > cfg.drift_limit {
                    return Err(Error::Integration(format!(
                        "frame drift {d:e} at x = {} exceeds the limit",
                        dir * s
                    )));
                }
                max_drift = max_drift.max(d / h);
                nf.reorthonormalize();
                f = nf;
                chi += dchi * dir;
                s = if lands { target } else { s + h };
            }
            frames[i] = f;
            points[i] = chi;
        }
    }
    Ok(CurveState { t, xs: xs.to_vec(), points, frames, max_drift })
}

/// RK4 step of the space law together with `χ' = T`; returns the new frame
/// and the increment of `χ` in the stepping variable.
fn rk4_space_chi<F: Fn(f64) -> C>(u: &F, x: f64, h: f64, f: &Frame) -> (Frame, Vec3) {
    use crate::self_similar::space_derivative as d;
    let k1 = d(u(x), f);
    let f2 = f.axpy(0.5 * h, &k1);
    let k2 = d(u(x + 0.5 * h), &f2);
    let f3 = f.axpy(0.5 * h, &k2);
    let k3 = d(u(x + 0.5 * h), &f3);
    let f4 = f.axpy(h, &k3);
    let k4 = d(u(x + h), &f4);
    let nf = Frame {
        t: f.t + (k1.t + k2.t * 2.0 + k3.t * 2.0 + k4.t) * (h / 6.0),
        e1: f.e1 + (k1.e1 + k2.e1 * 2.0 + k3.e1 * 2.0 + k4.e1) * (h / 6.0),
        e2: f.e2 + (k1.e2 + k2.e2 * 2.0 + k3.e2 * 2.0 + k4.e2) * (h / 6.0),
    };
    (nf, (f.t + f2.t * 2.0 + f3.t * 2.0 + f4.t) * (h / 6.0))
}

/// `χ(t, ·)` and frames on `xs` at a single time.
pub fn reconstruct_curve<S: FieldSource + ?Sized>(
    anchor: &AnchoredConstruction,
    src: &S,
    t: f64,
    xs: &[f64],
    cfg: &FrameConfig,
) -> Result<CurveState> {
    Ok(reconstruct_many(anchor, src, &[t], xs, cfg)?.remove(0))
}

/// Reconstructs at several times with a single time sweep; results follow
/// the order of `times`.
pub fn reconstruct_many<S: FieldSource + ?Sized>(
    anchor: &AnchoredConstruction,
    src: &S,
    times: &[f64],
    xs: &[f64],
    cfg: &FrameConfig,
) -> Result<Vec<CurveState>> {
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| {
        let da = (times[a] - anchor.t0).abs();
        let db = (times[b] - anchor.t0).abs();
        da.partial_cmp(&db).unwrap()
    });
    let mut out: Vec<Option<CurveState>> = vec![None; times.len()];
    let mut below = TimeSweep::new(anchor, src, cfg)?;
    let mut above = TimeSweep::new(anchor, src, cfg)?;
    for i in order {
        let t = times[i];
        let sw = if t <= anchor.t0 { &mut below } else { &mut above };
        sw.advance_to(t)?;
        let field = src.field_at(t)?;
        let mut c = integrate_frame_in_space(&sw.frame(), sw.chi(), &field, t, xs, cfg)?;
        c.max_drift = c.max_drift.max(sw.max_drift);
        out[i] = Some(c);
    }
    Ok(out.into_iter().map(|c| c.unwrap()).collect())
}

/// Frames and positions at the points `xs` for every time of `times`
/// (visited in the given order, which should be monotone).
fn sample_points<S: FieldSource + ?Sized>(
    anchor: &AnchoredConstruction,
    src: &S,
    times: &[f64],
    xs: &[f64],
    cfg: &FrameConfig,
) -> Result<Vec<CurveState>> {
    let mut sw = TimeSweep::new(anchor, src, cfg)?;
    let mut grid: Vec<f64> = xs.to_vec();
    if !grid.contains(&0.0) {
        grid.push(0.0);
    }
    grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut out = Vec::with_capacity(times.len());
    for &t in times {
        sw.advance_to(t)?;
        let field = src.field_at(t)?;
        out.push(integrate_frame_in_space(&sw.frame(), sw.chi(), &field, t, &grid, cfg)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceMethod {
    /// Mean over `[x − w, x + w]` at the smallest sampled time. The limit is
    /// constant on the segment while the remainder oscillates in `x` with
    /// frequency `|x − x_j|/(2t)`, so the window mean converges much faster
    /// than the pointwise value. `half_width = 0` selects half the distance
    /// to the nearest corner, capped at 0.25.
    SpaceWindow { half_width: f64 },
    /// Mean over the finest octave of samples, weighted uniformly in
    /// `s = 1/t` (the variable in which the remainder oscillates at fixed
    /// frequency). Needs dense sampling in `s`.
    TimeWindow,
}

impl Default for TraceMethod {
    fn default() -> Self {
        TraceMethod::SpaceWindow { half_width: 0.0 }
    }
}

#[derive(Debug, Clone)]
pub struct TraceResult<V> {
    pub limit: V,
    /// Fitted `ρ` in `|V(t, x) − limit| ≈ C t^ρ` from per-octave envelopes
    /// of the pointwise samples.
    pub rate: f64,
    /// True when the samples do not move (rate fit degenerate).
    pub exact: bool,
    /// Pointwise values `(t, V(t, x))`.
    pub samples: Vec<(f64, V)>,
    /// `(t̄, envelope)` per octave.
    pub envelope: Vec<(f64, f64)>,
    /// Window means per time (space-window method only).
    pub window_means: Vec<(f64, V)>,
    /// Change of the estimate between the two finest times or octaves.
    pub limit_change: f64,
}

pub trait Vector: Copy {
    fn zero() -> Self;
    fn add(&self, o: &Self) -> Self;
    fn scale(&self, s: f64) -> Self;
    fn dist(&self, o: &Self) -> f64;
}

impl Vector for Vec3 {
    fn zero() -> Self {
        Vec3::zeros()
    }
    fn add(&self, o: &Self) -> Self {
        self + o
    }
    fn scale(&self, s: f64) -> Self {
        self * s
    }
    fn dist(&self, o: &Self) -> f64 {
        (self - o).norm()
    }
}

impl Vector for CVec3 {
    fn zero() -> Self {
        CVec3::default()
    }
    fn add(&self, o: &Self) -> Self {
        *self + *o
    }
    fn scale(&self, s: f64) -> Self {
        *self * s
    }
    fn dist(&self, o: &Self) -> f64 {
        (*self - *o).norm()
    }
}

/// Mean weighted uniformly in `s = 1/t` over samples with `t ∈ [lo, hi]`.
fn s_mean<V: Vector>(samples: &[(f64, V)], lo: f64, hi: f64) -> Option<V> {
    let sel: Vec<&(f64, V)> = samples.iter().filter(|s| s.0 >= lo && s.0 <= hi).collect();
    if sel.len() < 2 {
        return None;
    }
    let mut acc = V::zero();
    let mut w = 0.0;
    for pair in sel.windows(2) {
        let ds = (1.0 / pair[0].0 - 1.0 / pair[1].0).abs();
        acc = acc.add(&pair[0].1.add(&pair[1].1).scale(0.5 * ds));
        w += ds;
    }
    Some(acc.scale(1.0 / w))
}

fn fit_rate<V: Vector>(samples: &[(f64, V)], limit: &V) -> (Vec<(f64, f64)>, f64) {
    let t_lo = samples.iter().map(|s| s.0).fold(f64::INFINITY, f64::min);
    let t_hi = samples.iter().map(|s| s.0).fold(0.0, f64::max);
    let mut envelope = Vec::new();
    let mut lo = t_lo;
    while lo < t_hi {
        let hi = (2.0 * lo).min(t_hi);
        let sel: Vec<&(f64, V)> = samples.iter().filter(|s| s.0 >= lo && s.0 <= hi).collect();
        if sel.len() >= 2 && hi > lo * 1.5 {
            let e = sel.iter().map(|s| s.1.dist(limit)).fold(0.0, f64::max);
            envelope.push(((lo * hi).sqrt(), e));
        }
        lo *= 2.0;
    }
    let rate = if envelope.len() >= 2 {
        let n = envelope.len() as f64;
        let (sx, sy, sxx, sxy) = envelope.iter().fold((0.0, 0.0, 0.0, 0.0), |a, (t, e)| {
            let (x, y) = (t.ln(), e.max(1e-300).ln());
            (a.0 + x, a.1 + y, a.2 + x * x, a.3 + x * y)
        });
        (n * sxy - sx * sy) / (n * sxx - sx * sx)
    } else {
        f64::NAN
    };
    (envelope, rate)
}

fn decreasing(ts: &[f64]) -> Result<()> {
    if ts.len() < 3 {
        return Err(Error::InvalidInput("need at least three sample times".into()));
    }
    if ts.windows(2).any(|w| w[1] >= w[0]) || ts[ts.len() - 1] <= 0.0 {
        return Err(Error::InvalidInput("sample times must decrease towards 0".into()));
    }
    Ok(())
}

fn trace<S, V, F>(
    src: &S,
    anchor: &AnchoredConstruction,
    x: f64,
    ts: &[f64],
    cfg: &FrameConfig,
    method: TraceMethod,
    value: F,
) -> Result<TraceResult<V>>
where
    S: FieldSource + ?Sized,
    V: Vector,
    F: Fn(&Frame, f64, f64) -> V,
{
    decreasing(ts)?;
    let locs = src.locations();
    let gap = locs.iter().map(|l| (x - l).abs()).fold(f64::INFINITY, f64::min);
    let mut grid = vec![x];
    let mut window = (0, 0);
    if let TraceMethod::SpaceWindow { half_width } = method {
        if gap == 0.0 {
            return Err(Error::InvalidInput(format!(
                "x = {x} lies on the Dirac support; use the time window"
            )));
        }
        let w = if half_width > 0.0 { half_width } else { (0.5 * gap).min(0.25) };
        if w >= gap {
            return Err(Error::InvalidInput(format!("window ±{w} around {x} reaches a corner")));
        }
        let t_min = ts[ts.len() - 1];
        let reach = locs.iter().map(|l| (x - l).abs() + w).fold(0.0, f64::max);
        let spacing = (4.0 * PI * t_min / reach.max(1e-12)) / 16.0;
        let n = ((2.0 * w / spacing).ceil() as usize).clamp(64, 400_000);
        grid = (0..=n).map(|i| x - w + 2.0 * w * i as f64 / n as f64).collect();
        grid.push(x);
        grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
        grid.dedup();
        window = (0, grid.len());
    }
    let curves = sample_points(anchor, src, ts, &grid, cfg)?;
    let mut samples = Vec::with_capacity(ts.len());
    let mut means = Vec::new();
    for c in &curves {
        let i = c.xs.iter().position(|&s| s == x).unwrap();
        samples.push((c.t, value(&c.frames[i], c.t, x)));
        if window.1 > 0 {
            let idx: Vec<usize> = (0..c.xs.len()).filter(|&j| c.xs[j] >= grid[0] && c.xs[j] <= grid[window.1 - 1]).collect();
            let mut acc = V::zero();
            let mut len = 0.0;
            for p in idx.windows(2) {
                let h = c.xs[p[1]] - c.xs[p[0]];
                let a = value(&c.frames[p[0]], c.t, c.xs[p[0]]);
                let b = value(&c.frames[p[1]], c.t, c.xs[p[1]]);
                acc = acc.add(&a.add(&b).scale(0.5 * h));
                len += h;
            }
            means.push((c.t, acc.scale(1.0 / len)));
        }
    }
    let spread = samples.iter().map(|s| s.1.dist(&samples[0].1)).fold(0.0, f64::max);
    if spread < 1e-13 {
        return Ok(TraceResult {
            limit: samples[0].1,
            rate: f64::NAN,
            exact: true,
            samples,
            envelope: Vec::new(),
            window_means: means,
            limit_change: 0.0,
        });
    }
    let t_lo = ts[ts.len() - 1];
    let (limit, limit_change) = match method {
        TraceMethod::SpaceWindow { .. } => {
            let k = means.len();
            (means[k - 1].1, means[k - 1].1.dist(&means[k - 2].1))
        }
        TraceMethod::TimeWindow => {
            let m0 = s_mean(&samples, t_lo, 2.0 * t_lo).unwrap_or(samples[samples.len() - 1].1);
            let change = s_mean(&samples, 2.0 * t_lo, 4.0 * t_lo).map_or(f64::NAN, |m1| m1.dist(&m0));
            (m0, change)
        }
    };
    let (envelope, rate) = fit_rate(&samples, &limit);
    Ok(TraceResult { limit, rate, exact: false, samples, envelope, window_means: means, limit_change })
}

/// Limit of `T(t, x)` as `t → 0` and its convergence exponent.
pub fn tangent_trace<S: FieldSource + ?Sized>(
    src: &S,
    anchor: &AnchoredConstruction,
    x: f64,
    t_sequence: &[f64],
    cfg: &FrameConfig,
    method: TraceMethod,
) -> Result<TraceResult<Vec3>> {
    trace(src, anchor, x, t_sequence, cfg, method, |f, _, _| f.t)
}

/// Limit of the modulated normal `e^{iΦ(t,x)} N(t, x)` as `t → 0`.
pub fn modulated_normal_trace<S: FieldSource + ?Sized>(
    src: &S,
    anchor: &AnchoredConstruction,
    x: f64,
    t_sequence: &[f64],
    cfg: &FrameConfig,
    method: TraceMethod,
) -> Result<TraceResult<CVec3>> {
    let sq: Vec<(f64, f64)> =
        src.locations().iter().zip(src.alphas()).map(|(l, a)| (*l, a.norm_sqr())).collect();
    trace(src, anchor, x, t_sequence, cfg, method, |f, t, y| {
        f.n().rotate(modulation_phase(&sq, t, y))
    })
}

/// `n` times from `t_max` down to `t_min`, geometrically spaced.
pub fn log_times(t_max: f64, t_min: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| t_max * (t_min / t_max).powf(i as f64 / (n - 1).max(1) as f64)).collect()
}

#[derive(Debug, Clone)]
pub struct SpiralFit {
    pub center: Vec3,
    pub v1: Vec3,
    pub v2: Vec3,
    /// `max_i |residual(t_i)|`.
    pub residual: f64,
    /// `max_i |residual(t_i)| / t_i`.
    pub residual_over_t: f64,
    pub orthogonality: f64,
    /// Least-squares fit `χ ≈ c + √t d` for comparison.
    pub line_direction: Vec3,
    pub line_residual_over_t: f64,
    /// True when the spiral basis is singular (`M log√t` constant on the grid).
    pub degenerate: bool,
    pub samples: Vec<(f64, Vec3)>,
}

fn least_squares(basis: &[Vec<f64>], ys: &[Vec3]) -> Option<(Vec<Vec3>, Vec<Vec3>)> {
    let k = basis.len();
    let n = ys.len();
    let mut a = nalgebra::DMatrix::<f64>::zeros(n, k);
    for (j, b) in basis.iter().enumerate() {
        for i in 0..n {
            a[(i, j)] = b[i];
        }
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    if svd.singular_values.min() < 1e-10 * smax {
        return None;
    }
    let mut coef = vec![Vec3::zeros(); k];
    let mut resid = vec![Vec3::zeros(); n];
    for c in 0..3 {
        let y = nalgebra::DVector::from_iterator(n, ys.iter().map(|v| v[c]));
        let sol = svd.solve(&y, 1e-14).ok()?;
        let r = &y - &a * &sol;
        for j in 0..k {
            coef[j][c] = sol[j];
        }
        for i in 0..n {
            resid[i][c] = r[i];
        }
    }
    Some((coef, resid))
}

/// Samples `χ(t, k)` and fits `χ(0,k) + √t (v1 sin(M log√t) + v2 cos(M log√t))`.
pub fn corner_trajectory<S: FieldSource + ?Sized>(
    src: &S,
    anchor: &AnchoredConstruction,
    k: f64,
    t_grid: &[f64],
    cfg: &FrameConfig,
) -> Result<SpiralFit> {
    let locs = src.locations();
    if !locs.contains(&k) {
        return Err(Error::InvalidInput(format!("k = {k} is not in the Dirac support")));
    }
    let mut ts = t_grid.to_vec();
    ts.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let curves = sample_points(anchor, src, &ts, &[k], cfg)?;
    let samples: Vec<(f64, Vec3)> = curves
        .iter()
        .map(|c| (c.t, c.points[c.xs.iter().position(|&s| s == k).unwrap()]))
        .collect();
    fit_spiral(samples, src.m())
}

pub fn fit_spiral(samples: Vec<(f64, Vec3)>, m: f64) -> Result<SpiralFit> {
    if samples.len() < 4 {
        return Err(Error::InvalidInput("need at least four samples".into()));
    }
    let ys: Vec<Vec3> = samples.iter().map(|s| s.1).collect();
    let ones: Vec<f64> = vec![1.0; samples.len()];
    let rt: Vec<f64> = samples.iter().map(|s| s.0.sqrt()).collect();
    let psi: Vec<f64> = samples.iter().map(|s| m * 0.5 * s.0.ln()).collect();
    let bs: Vec<f64> = rt.iter().zip(&psi).map(|(r, p)| r * p.sin()).collect();
    let bc: Vec<f64> = rt.iter().zip(&psi).map(|(r, p)| r * p.cos()).collect();
    let over_t = |res: &[Vec3]| {
        res.iter().zip(&samples).map(|(r, s)| r.norm() / s.0).fold(0.0, f64::max)
    };
    let (line, line_res) = least_squares(&[ones.clone(), rt.clone()], &ys)
        .ok_or_else(|| Error::Degenerate("time samples do not determine a line".into()))?;
    let line_direction = line[1];
    let line_residual_over_t = over_t(&line_res);
    match least_squares(&[ones, bs, bc], &ys) {
        Some((c, res)) => Ok(SpiralFit {
            center: c[0],
            v1: c[1],
            v2: c[2],
            residual: res.iter().map(|r| r.norm()).fold(0.0, f64::max),
            residual_over_t: over_t(&res),
            orthogonality: c[1].dot(&c[2]).abs(),
            line_direction,
            line_residual_over_t,
            degenerate: false,
            samples,
        }),
        None => Ok(SpiralFit {
            center: line[0],
            v1: Vec3::zeros(),
            v2: line_direction,
            residual: line_res.iter().map(|r| r.norm()).fold(0.0, f64::max),
            residual_over_t: line_residual_over_t,
            orthogonality: 0.0,
            line_direction,
            line_residual_over_t,
            degenerate: true,
            samples,
        }),
    }
}

#[derive(Debug, Clone)]
pub struct ProbeSample {
    pub t: f64,
    /// `T(t, k + x̃√t)` per `x̃`.
    pub tangents: Vec<Vec3>,
    /// `e^{i(|α_k|² − M) log√t} N(t, k + x̃√t)` per `x̃`; equals
    /// `e^{i|α_k|² log√t} N` on times with `e^{iM log√t} = 1`.
    pub normals: Vec<CVec3>,
    /// Rotation aligning the profile frame to `(T, e^{−i Arg α_k} N)`.
    pub rotation: Rotation3<f64>,
    pub residual: f64,
}

/// Times `t_n = exp(−4πn/M)` satisfying `e^{iM log√t_n} = 1`.
pub fn phase_locked_times(m: f64, n_first: u32, count: usize) -> Result<Vec<f64>> {
    if !(m > 0.0) {
        return Err(Error::InvalidInput("phase-locked times need M > 0".into()));
    }
    Ok((0..count).map(|i| (-4.0 * std::f64::consts::PI * (n_first as f64 + i as f64) / m).exp()).collect())
}

/// Frames near the corner `k` in the self-similar variable, aligned to the
/// single-corner profile of amplitude `|α_k|`.
pub fn selfsimilar_path_probe<S: FieldSource + ?Sized>(
    src: &S,
    anchor: &AnchoredConstruction,
    k: f64,
    xtilde: &[f64],
    t_n: &[f64],
    profile: &SelfSimilarProfile,
    cfg: &FrameConfig,
) -> Result<Vec<ProbeSample>> {
    let locs = src.locations();
    let ki = locs
        .iter()
        .position(|&l| l == k)
        .ok_or_else(|| Error::InvalidInput(format!("k = {k} is not in the Dirac support")))?;
    let alpha = src.alphas()[ki];
    if alpha.norm() == 0.0 {
        return Err(Error::InvalidInput(format!("α at {k} vanishes: no corner")));
    }
    if (alpha.norm() - profile.a).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!(
            "profile amplitude {} does not match |α_k| = {}",
            profile.a,
            alpha.norm()
        )));
    }
    let m = src.m();
    let mut ts = t_n.to_vec();
    ts.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut sw = TimeSweep::new(anchor, src, cfg)?;
    let mut out = Vec::new();
    let prof_frames: Vec<Frame> = xtilde.iter().map(|&x| profile_frame(profile, x)).collect::<Result<_>>()?;
    for &t in &ts {
        sw.advance_to(t)?;
        let field = src.field_at(t)?;
        let mut xs: Vec<f64> = xtilde.iter().map(|x| k + x * t.sqrt()).collect();
        xs.push(0.0);
        let mut order: Vec<usize> = (0..xs.len()).collect();
        order.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap());
        let sorted: Vec<f64> = order.iter().map(|&i| xs[i]).collect();
        let mut dedup = sorted.clone();
        dedup.dedup();
        let c = integrate_frame_in_space(&sw.frame(), sw.chi(), &field, t, &dedup, cfg)?;
        let at = |x: f64| c.frames[dedup.iter().position(|&s| s == x).unwrap()];
        let ph = (alpha.norm_sqr() - m) * 0.5 * t.ln();
        let mut tangents = Vec::new();
        let mut normals = Vec::new();
        let mut src_pts = Vec::new();
        let mut dst_pts = Vec::new();
        for (j, xt) in xtilde.iter().enumerate() {
            let f = at(k + xt * t.sqrt());
            let n = f.n().rotate(ph);
            tangents.push(f.t);
            normals.push(n);
            let nr = n.rotate(-alpha.arg());
            let pf = &prof_frames[j];
            src_pts.extend([pf.t, pf.e1, pf.e2]);
            dst_pts.extend([f.t, nr.re, nr.im]);
        }
        let (rotation, residual) = fit_rotation(&src_pts, &dst_pts)?;
        out.push(ProbeSample { t, tangents, normals, rotation, residual });
    }
    Ok(out)
}

/// Profile frame at `x`, linearly interpolated between stored samples and
/// re-orthonormalized.
pub fn profile_frame(profile: &SelfSimilarProfile, x: f64) -> Result<Frame> {
    let s = &profile.samples;
    if x < s[0].x || x > s[s.len() - 1].x {
        return Err(Error::OutOfRange(format!("x̃ = {x} outside the solved profile")));
    }
    let i = s.partition_point(|p| p.x <= x).clamp(1, s.len() - 1);
    let (a, b) = (&s[i - 1], &s[i]);
    let w = if b.x > a.x { (x - a.x) / (b.x - a.x) } else { 0.0 };
    let mut f = Frame {
        t: a.frame.t * (1.0 - w) + b.frame.t * w,
        e1: a.frame.e1 * (1.0 - w) + b.frame.e1 * w,
        e2: a.frame.e2 * (1.0 - w) + b.frame.e2 * w,
    };
    f.reorthonormalize();
    Ok(f)
}

/// Finite-difference residual `|χ_t − χ_x ∧ χ_xx|` at interior points of
/// three curves at times `t − dt, t, t + dt` on a common uniform grid.
pub fn binormal_residual(prev: &CurveState, mid: &CurveState, next: &CurveState) -> Result<f64> {
    let n = mid.xs.len();
    if n < 3 || prev.xs != mid.xs || next.xs != mid.xs {
        return Err(Error::InvalidInput("curves must share a grid of ≥ 3 points".into()));
    }
    let dt = 0.5 * (next.t - prev.t);
    let mut worst: f64 = 0.0;
    for i in 1..n - 1 {
        let h = mid.xs[i + 1] - mid.xs[i];
        let chi_t = (next.points[i] - prev.points[i]) / (2.0 * dt);
        let chi_x = (mid.points[i + 1] - mid.points[i - 1]) / (2.0 * h);
        let chi_xx = (mid.points[i + 1] - mid.points[i] * 2.0 + mid.points[i - 1]) / (h * h);
        worst = worst.max((chi_t - chi_x.cross(&chi_xx)).norm());
    }
    Ok(worst)
}
