use std::f64::consts::PI;

use binormal::filament_field::LeadingOrder;
use binormal::frame_flow::*;
use binormal::nls_coeffs::Convention;
use binormal::self_similar::{alpha_from_angle, SelfSimilarProfile, ProfileConfig};
use binormal::{Complex64 as C, Error, Vec3};
use nalgebra::{Rotation3, Unit};
use proptest::prelude::*;

fn c(re: f64, im: f64) -> C {
    C::new(re, im)
}

fn source(data: &[(f64, C)]) -> LeadingOrder {
    LeadingOrder { data: data.to_vec(), sign: 1, convention: Convention::Geometric }
}

fn anchor() -> AnchoredConstruction {
    AnchoredConstruction::new(Vec3::zeros(), 1.0, Frame::canonical()).unwrap()
}

fn grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

fn right_angle() -> f64 {
    alpha_from_angle(PI / 2.0).unwrap()
}

fn two_corners() -> LeadingOrder {
    let a = right_angle();
    source(&[(0.0, c(a, 0.0)), (1.0, c(-a, 0.0))])
}

#[test]
fn anchor_validation() {
    assert!(AnchoredConstruction::new(Vec3::zeros(), 0.0, Frame::canonical()).is_err());
    let bad = Frame { t: Vec3::x(), e1: Vec3::x(), e2: Vec3::z() };
    assert!(AnchoredConstruction::new(Vec3::zeros(), 1.0, bad).is_err());
    let left = Frame { t: Vec3::x(), e1: Vec3::y(), e2: -Vec3::z() };
    assert!(AnchoredConstruction::new(Vec3::zeros(), 1.0, left).is_err());
}

#[test]
fn analyst_coefficients_are_rejected() {
    let src = LeadingOrder { data: vec![(0.0, c(0.3, 0.0))], sign: -1, convention: Convention::Analyst };
    assert!(matches!(reconstruct_curve(&anchor(), &src, 0.1, &[0.0], &FrameConfig::default()), Err(Error::InvalidInput(_))));
}

#[test]
fn reorthonormalize_restores_the_frame() {
    let mut f = Frame { t: Vec3::new(1.0, 1e-3, 0.0), e1: Vec3::new(2e-3, 1.0, 1e-3), e2: Vec3::z() };
    f.reorthonormalize();
    assert!(f.orthonormality_defect() < 1e-14);
    let g = Frame::canonical().with_normal_phase(PI / 2.0);
    assert!((g.e1 + Vec3::z()).norm() < 1e-15 && (g.e2 - Vec3::y()).norm() < 1e-15);
}

#[test]
fn zero_field_gives_a_static_straight_line() {
    let src = source(&[(0.0, c(0.0, 0.0))]);
    let base = Frame { t: Vec3::new(0.0, 0.6, 0.8), e1: Vec3::x(), e2: Vec3::new(0.0, 0.8, -0.6) };
    let p = Vec3::new(1.0, -2.0, 0.5);
    let anchor = AnchoredConstruction::new(p, 0.5, base).unwrap();
    let xs = grid(-2.0, 2.0, 41);
    for t in [0.01, 0.5, 2.0] {
        let curve = reconstruct_curve(&anchor, &src, t, &xs, &FrameConfig::default()).unwrap();
        for (x, (pt, f)) in xs.iter().zip(curve.points.iter().zip(&curve.frames)) {
            assert!((pt - (p + base.t * *x)).norm() < 1e-12);
            assert!((f.t - base.t).norm() < 1e-14);
            assert!((f.e1 - base.e1).norm() < 1e-14);
        }
    }
}

#[test]
fn single_corner_frame_is_constant_in_time() {
    let src = source(&[(0.0, c(0.8, 0.0))]);
    let cfg = FrameConfig::default();
    let t0 = advance_frame_in_time(&anchor(), &src, 1.0, &cfg).unwrap().frame.t;
    for t in [0.5, 0.05, 1e-3, 3.0] {
        let f = advance_frame_in_time(&anchor(), &src, t, &cfg).unwrap();
        assert!((f.frame.t - t0).norm() < 1e-10, "t = {t}");
    }
}

#[test]
fn single_corner_curvature_and_torsion() {
    let a = 0.8;
    let t = 0.01;
    let src = source(&[(0.0, c(a, 0.0))]);
    let h = 1e-3;
    let xs = grid(-0.5, 0.5, 1001);
    let curve = reconstruct_curve(&anchor(), &src, t, &xs, &FrameConfig::default()).unwrap();
    for i in (2..xs.len() - 2).step_by(50) {
        let tm = curve.frames[i - 1].t;
        let t0 = curve.frames[i].t;
        let tp = curve.frames[i + 1].t;
        let tx = (tp - tm) / (2.0 * h);
        let txx = (tp - t0 * 2.0 + tm) / (h * h);
        let kappa = tx.norm();
        assert!((kappa - a / t.sqrt()).abs() < 1e-3 * a / t.sqrt(), "x = {}: {kappa}", xs[i]);
        let tau = t0.cross(&tx).dot(&txx) / (kappa * kappa);
        let expected = xs[i] / (2.0 * t);
        assert!((tau - expected).abs() < 1e-2 * (1.0 + expected.abs()), "x = {}: {tau} vs {expected}", xs[i]);
    }
}

#[test]
fn orthonormality_and_arclength() {
    let src = two_corners();
    let xs = grid(-1.0, 2.0, 301);
    let cfg = FrameConfig::default();
    for curve in reconstruct_many(&anchor(), &src, &[0.05, 0.003, 0.4], &xs, &cfg).unwrap() {
        assert!(curve.max_drift < 1e-7, "{}", curve.max_drift);
        for f in &curve.frames {
            assert!(f.orthonormality_defect() < 1e-14);
            assert!((f.t.norm() - 1.0).abs() < 1e-10);
        }
        // Chords of a unit-speed curve are never longer than the parameter step.
        for w in curve.points.windows(2) {
            assert!((w[1] - w[0]).norm() <= 0.01 + 1e-12);
        }
    }
}

#[test]
fn steppers_agree() {
    let src = two_corners();
    let xs = grid(-0.5, 1.5, 21);
    let rk = reconstruct_curve(&anchor(), &src, 0.05, &xs, &FrameConfig::default()).unwrap();
    let lie_cfg = FrameConfig { stepper: Stepper::LieMidpoint, phase_step: 0.01, amp_step: 0.01, ..Default::default() };
    let lie = reconstruct_curve(&anchor(), &src, 0.05, &xs, &lie_cfg).unwrap();
    for (p, q) in rk.points.iter().zip(&lie.points) {
        assert!((p - q).norm() < 1e-3, "{}", (p - q).norm());
    }
}

#[test]
fn constant_phase_does_not_change_the_tangent() {
    let a = right_angle();
    let phi = 0.7;
    let rot = C::from_polar(1.0, phi);
    let plain = two_corners();
    let turned = source(&[(0.0, c(a, 0.0) * rot), (1.0, c(-a, 0.0) * rot)]);
    let anchor2 = AnchoredConstruction::new(Vec3::zeros(), 1.0, Frame::canonical().with_normal_phase(phi)).unwrap();
    let xs = grid(-0.5, 1.5, 41);
    let cfg = FrameConfig::default();
    for t in [0.02, 0.3] {
        let u = reconstruct_curve(&anchor(), &plain, t, &xs, &cfg).unwrap();
        let v = reconstruct_curve(&anchor2, &turned, t, &xs, &cfg).unwrap();
        for (f, g) in u.frames.iter().zip(&v.frames) {
            assert!((f.t - g.t).norm() < 1e-10);
        }
    }
}

#[test]
fn finite_difference_flow_residuals() {
    // One corner: the field is an exact solution, so only discretization error remains.
    let src = source(&[(0.0, c(0.8, 0.0))]);
    let t = 0.2;
    let dt = 1e-4;
    let mut prev = f64::INFINITY;
    for h in [0.02, 0.01, 0.005] {
        let xs = grid(-0.6, 1.6, (2.2f64 / h).round() as usize + 1);
        let cs = reconstruct_many(&anchor(), &src, &[t - dt, t, t + dt], &xs, &FrameConfig::default()).unwrap();
        let r = binormal_residual(&cs[0], &cs[1], &cs[2]).unwrap();
        assert!(r < 5.0 * h * h, "h = {h}: {r}");
        assert!(r < prev / 3.0, "h = {h}: {r}");
        prev = r;
        // Schrödinger map: T_t = T ∧ T_xx.
        let mut worst: f64 = 0.0;
        for i in 1..xs.len() - 1 {
            let tt = (cs[2].frames[i].t - cs[0].frames[i].t) / (2.0 * dt);
            let f = &cs[1].frames;
            let txx = (f[i + 1].t - f[i].t * 2.0 + f[i - 1].t) / (h * h);
            worst = worst.max((tt - f[i].t.cross(&txx)).norm());
        }
        assert!(worst < 50.0 * h * h, "h = {h}: {worst}");
    }
    let c1 = reconstruct_curve(&anchor(), &src, t, &[0.0, 1.0], &FrameConfig::default()).unwrap();
    assert!(binormal_residual(&c1, &c1, &c1).is_err());
}

#[test]
fn continuity_in_time_near_zero() {
    let src = two_corners();
    let xs = grid(-0.5, 1.5, 81);
    let cs = reconstruct_many(&anchor(), &src, &[0.02, 0.01, 0.005, 0.0025], &xs, &FrameConfig::default()).unwrap();
    for w in cs.windows(2) {
        let d = w[0].points.iter().zip(&w[1].points).map(|(p, q)| (p - q).norm()).fold(0.0, f64::max);
        assert!(d < 2.0 * w[0].t.sqrt(), "t = {}: {d}", w[0].t);
    }
}

#[test]
fn zero_field_trace_is_exact() {
    let src = source(&[(0.0, c(0.0, 0.0))]);
    let r = tangent_trace(&src, &anchor(), 0.3, &log_times(0.1, 0.01, 5), &FrameConfig::default(), TraceMethod::default()).unwrap();
    assert!(r.exact);
    assert!((r.limit - Vec3::x()).norm() < 1e-14);
    let n = modulated_normal_trace(&src, &anchor(), 0.3, &log_times(0.1, 0.01, 5), &FrameConfig::default(), TraceMethod::default()).unwrap();
    assert!(n.exact);
    assert!((n.limit.re - Vec3::y()).norm() < 1e-14 && (n.limit.im - Vec3::z()).norm() < 1e-14);
}

#[test]
fn trace_input_checks() {
    let src = two_corners();
    let cfg = FrameConfig::default();
    assert!(tangent_trace(&src, &anchor(), 0.3, &[0.1, 0.2, 0.05], &cfg, TraceMethod::default()).is_err());
    assert!(tangent_trace(&src, &anchor(), 0.3, &[0.1, 0.05], &cfg, TraceMethod::default()).is_err());
    assert!(tangent_trace(&src, &anchor(), 1.0, &[0.1, 0.05, 0.02], &cfg, TraceMethod::default()).is_err());
    let wide = TraceMethod::SpaceWindow { half_width: 0.4 };
    assert!(tangent_trace(&src, &anchor(), 0.3, &[0.1, 0.05, 0.02], &cfg, wide).is_err());
}

#[test]
fn two_corner_traces_converge_at_the_square_root_rate() {
    let src = two_corners();
    let ts = log_times(1e-2, 1e-4, 60);
    let cfg = FrameConfig::default();
    let tr = tangent_trace(&src, &anchor(), 0.3, &ts, &cfg, TraceMethod::default()).unwrap();
    assert!(tr.rate >= 0.45, "{}", tr.rate);
    let nr = modulated_normal_trace(&src, &anchor(), 0.3, &ts, &cfg, TraceMethod::default()).unwrap();
    assert!(nr.rate >= 0.45, "{}", nr.rate);
    // On the corner itself, with the time-window estimate.
    let dense = log_times(0.05, 2e-4, 200);
    let corner = tangent_trace(&src, &anchor(), 1.0, &dense, &cfg, TraceMethod::TimeWindow).unwrap();
    assert!(corner.rate >= 0.45, "{}", corner.rate);
}

#[test]
fn modulated_normal_is_constant_between_corners() {
    let src = two_corners();
    let ts = log_times(0.02, 2e-4, 12);
    let cfg = FrameConfig::default();
    let lims: Vec<_> = [0.2, 0.45, 0.6]
        .iter()
        .map(|&x| modulated_normal_trace(&src, &anchor(), x, &ts, &cfg, TraceMethod::SpaceWindow { half_width: 0.1 }).unwrap().limit)
        .collect();
    for l in &lims[1..] {
        assert!((*l - lims[0]).norm() < 2e-2, "{}", (*l - lims[0]).norm());
    }
}

#[test]
fn single_corner_moves_on_a_line() {
    let src = source(&[(0.0, c(0.6, 0.0))]);
    let fit = corner_trajectory(&src, &anchor(), 0.0, &log_times(1e-2, 1e-4, 12), &FrameConfig::default()).unwrap();
    assert!(fit.line_residual_over_t < 1e-6, "{}", fit.line_residual_over_t);
    assert!(corner_trajectory(&src, &anchor(), 0.5, &[0.1, 0.01], &FrameConfig::default()).is_err());
}

#[test]
fn empty_corner_is_flagged_degenerate() {
    let src = source(&[(0.0, c(0.0, 0.0))]);
    let fit = corner_trajectory(&src, &anchor(), 0.0, &log_times(1e-2, 1e-4, 8), &FrameConfig::default()).unwrap();
    assert!(fit.degenerate);
    let first = fit.samples[0].1;
    assert!(fit.samples.iter().all(|s| (s.1 - first).norm() < 1e-14));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]
    #[test]
    fn spiral_fit_recovers_synthetic_spirals(
        v in proptest::collection::vec(-1.0f64..1.0, 9),
        m in 0.3f64..2.0,
    ) {
        let (c0, v1, v2) = (Vec3::new(v[0], v[1], v[2]), Vec3::new(v[3], v[4], v[5]), Vec3::new(v[6], v[7], v[8]));
        let samples: Vec<(f64, Vec3)> = log_times(1e-2, 1e-4, 20)
            .into_iter()
            .map(|t| {
                let p = m * 0.5 * t.ln();
                (t, c0 + (v1 * p.sin() + v2 * p.cos()) * t.sqrt())
            })
            .collect();
        let fit = fit_spiral(samples, m).unwrap();
        prop_assert!(!fit.degenerate);
        prop_assert!((fit.v1 - v1).norm() < 1e-8 && (fit.v2 - v2).norm() < 1e-8);
        prop_assert!(fit.residual < 1e-10);
    }
}

#[test]
fn phase_locked_times_cancel_the_phase() {
    let m = 0.7;
    for t in phase_locked_times(m, 1, 4).unwrap() {
        let z = C::from_polar(1.0, m * t.sqrt().ln());
        assert!((z - c(1.0, 0.0)).norm() < 1e-12);
    }
    assert!(phase_locked_times(0.0, 1, 3).is_err());
}

#[test]
fn single_corner_matches_its_profile() {
    let a = 0.6;
    let src = source(&[(0.0, c(a, 0.0))]);
    let profile = SelfSimilarProfile::compute(a, 40.0, &ProfileConfig::default()).unwrap();
    let xt = [-8.0, -2.0, 0.0, 1.0, 8.0];
    let ts = [0.1, 0.01, 1e-3];
    let probe = selfsimilar_path_probe(&src, &anchor(), 0.0, &xt, &ts, &profile, &FrameConfig::default()).unwrap();
    for s in &probe {
        assert!(s.residual < 1e-3, "{}", s.residual);
    }
    assert!(profile_frame(&profile, 50.0).is_err());
    let wrong = SelfSimilarProfile::compute(0.5, 40.0, &ProfileConfig::default()).unwrap();
    assert!(selfsimilar_path_probe(&src, &anchor(), 0.0, &xt, &ts, &wrong, &FrameConfig::default()).is_err());
}

#[test]
fn two_corner_probe_tightens_as_t_decreases() {
    let a = right_angle();
    let src = two_corners();
    let profile = SelfSimilarProfile::compute(a, 40.0, &ProfileConfig::default()).unwrap();
    let xt = [-8.0, -4.0, -1.0, 0.0, 1.0, 4.0, 8.0];
    let ts = [0.05, 0.0125, 0.003125];
    let probe = selfsimilar_path_probe(&src, &anchor(), 0.0, &xt, &ts, &profile, &FrameConfig::default()).unwrap();
    for w in probe.windows(2) {
        assert!(w[1].residual < w[0].residual, "{} then {}", w[0].residual, w[1].residual);
    }
    assert!(probe[2].residual < 0.1, "{}", probe[2].residual);
}

#[test]
fn rotations_commute_with_reconstruction() {
    let src = two_corners();
    let r = Rotation3::from_axis_angle(&Unit::new_normalize(Vec3::new(1.0, 2.0, -0.5)), 0.9);
    let base = Frame::canonical().rotated(&r);
    let turned = AnchoredConstruction::new(Vec3::zeros(), 1.0, base).unwrap();
    let xs = grid(-0.5, 1.5, 11);
    let u = reconstruct_curve(&anchor(), &src, 0.05, &xs, &FrameConfig::default()).unwrap();
    let v = reconstruct_curve(&turned, &src, 0.05, &xs, &FrameConfig::default()).unwrap();
    for (p, q) in u.points.iter().zip(&v.points) {
        assert!((r * p - q).norm() < 1e-10);
    }
}
