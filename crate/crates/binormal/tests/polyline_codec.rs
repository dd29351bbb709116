use std::f64::consts::PI;

use approx::assert_abs_diff_eq;
use binormal::frame_flow::Frame;
use binormal::polyline_codec::*;
use binormal::self_similar::{alpha_from_angle, angle_from_alpha, PhiTable, ProfileConfig};
use binormal::{Complex64 as C, Error, Vec3};
use nalgebra::{Rotation3, Unit};
use proptest::prelude::*;

fn corner(x: f64, theta: f64, tau: f64, delta: i8) -> Corner {
    Corner { x, theta, tau, delta }
}

fn spec(corners: &[Corner]) -> PolylineSpec {
    PolylineSpec { corners: corners.to_vec() }
}

fn table(thetas: &[f64]) -> PhiTable {
    let amps: Vec<f64> = thetas.iter().map(|&t| alpha_from_angle(t).unwrap()).collect();
    PhiTable::compute(&amps, 100.0, &ProfileConfig::default()).unwrap()
}

fn four_corners() -> PolylineSpec {
    spec(&[
        corner(-1.0, 1.2, 0.0, 1),
        corner(0.0, 2.0, 0.7, 1),
        corner(2.0, 0.9, 2.1, -1),
        corner(3.0, 1.6, 1.3, 1),
    ])
}

#[test]
fn single_right_angle_corner() {
    let d = design_coefficients(&spec(&[corner(0.0, PI / 2.0, 0.0, 1)]), &table(&[]), PhaseCoupling::AllCorners).unwrap();
    let (x, a) = d.alphas[0];
    assert_eq!(x, 0.0);
    assert_eq!(a.im, 0.0);
    assert_abs_diff_eq!(a.re, (2f64.ln() / PI).sqrt(), epsilon = 1e-15);
    assert_abs_diff_eq!(a.re, 0.46971, epsilon = 1e-5);
}

#[test]
fn equal_angles_give_zero_beta() {
    let s = spec(&[corner(0.0, 1.0, 0.0, 1), corner(1.0, 1.0, 0.5, 1), corner(2.0, 1.0, 0.3, -1)]);
    let d = design_coefficients(&s, &table(&[1.0]), PhaseCoupling::Adjacent).unwrap();
    assert!(d.beta.iter().all(|&b| b == 0.0));
}

#[test]
fn two_corner_argument_relation() {
    for (x1, tau, delta) in [(1.0, 0.0, 1), (1.0, PI, 1), (3.0, 1.1, -1), (2.0, 2.5, 1)] {
        let s = spec(&[corner(0.0, 1.3, 0.0, 1), corner(x1, 0.8, tau, delta)]);
        let tab = table(&[1.3, 0.8]);
        let d = design_coefficients(&s, &tab, PhaseCoupling::AllCorners).unwrap();
        let (a0, a1) = (d.alphas[0].1, d.alphas[1].1);
        assert_eq!(a0.arg(), 0.0);
        let beta = (a0.norm_sqr() - a1.norm_sqr()) * x1.ln();
        assert_abs_diff_eq!(d.beta[0], beta, epsilon = 1e-15);
        // Signed turn between the wedges: δτ = ΔArg + φ_0 − φ_1 + β.
        let turn = a1.arg() - a0.arg() + d.phi_used[0] - d.phi_used[1] + beta;
        let gap = (turn - delta as f64 * tau + PI).rem_euclid(2.0 * PI) - PI;
        assert!(gap.abs() < 1e-12, "τ = {tau}: {gap}");
        assert_abs_diff_eq!(tau.cos(), turn.cos(), epsilon = 1e-12);
        assert!(d.alternate_identity[0].is_finite());
    }
}

#[test]
fn modulus_law() {
    let s = four_corners();
    let d = design_coefficients(&s, &table(&[1.2, 2.0, 0.9, 1.6]), PhaseCoupling::AllCorners).unwrap();
    for (c, (x, a)) in s.corners.iter().zip(&d.alphas) {
        assert_eq!(c.x, *x);
        assert_abs_diff_eq!(angle_from_alpha(a.norm()).unwrap(), c.theta, epsilon = 1e-12);
    }
    assert_eq!(d.alphas[0].1.arg(), 0.0);
}

#[test]
fn near_flat_corner_warns_and_flat_corner_fails() {
    let w = spec(&[corner(0.0, PI - 1e-9, 0.0, 1)]).validate().unwrap();
    assert_eq!(w.len(), 1);
    assert!(matches!(spec(&[corner(0.0, PI, 0.0, 1)]).validate(), Err(Error::Domain(_))));
    assert!(build_polyline(&spec(&[corner(0.0, PI, 0.0, 1)]), &Frame::canonical(), Vec3::zeros()).is_err());
    assert!(spec(&[corner(0.0, 0.0, 0.0, 1)]).validate().is_err());
}

#[test]
fn spec_validation() {
    assert!(spec(&[]).validate().is_err());
    assert!(spec(&[corner(0.0, 1.0, 0.3, 1)]).validate().is_err());
    assert!(spec(&[corner(1.0, 1.0, 0.0, 1), corner(0.0, 1.0, 0.0, 1)]).validate().is_err());
    assert!(spec(&[corner(0.0, 1.0, 0.0, 1), corner(1.0, 1.0, 4.0, 1)]).validate().is_err());
    assert!(spec(&[corner(0.0, 1.0, 0.0, 1), corner(1.0, 1.0, 1.0, 0)]).validate().is_err());
    let w = spec(&[corner(0.0, 1.0, 0.0, 1), corner(1.5, 1.0, 1.0, 1)]).validate().unwrap();
    assert!(w.iter().any(|s| s.contains("not an integer")));
    let missing = design_coefficients(&four_corners(), &table(&[1.2]), PhaseCoupling::AllCorners);
    assert!(matches!(missing, Err(Error::MissingProfile(_))));
}

#[test]
fn planar_zigzag_stays_in_a_plane() {
    let s = spec(&[
        corner(0.0, 1.0, 0.0, 1),
        corner(1.0, 2.0, PI, 1),
        corner(2.0, 1.5, 0.0, 1),
        corner(4.0, 0.7, PI, 1),
    ]);
    let p = build_polyline(&s, &Frame::canonical(), Vec3::zeros()).unwrap();
    let normal = Vec3::z();
    for v in &p.vertices {
        assert!(v.dot(&normal).abs() < 1e-10);
    }
    for t in &p.tangents {
        assert!(t.dot(&normal).abs() < 1e-10);
    }
    let back = extract_spec_from_tangents(&p.xs, &p.tangents).unwrap();
    assert_eq!(back.planar_joints, vec![1, 2, 3]);
}

#[test]
fn build_then_extract_four_corners() {
    let s = four_corners();
    let p = build_polyline(&s, &Frame::canonical(), Vec3::new(1.0, 2.0, 3.0)).unwrap();
    assert_eq!(p.eval(-1.0), Vec3::new(1.0, 2.0, 3.0));
    assert!((p.eval(1.0) - p.vertices[1] - p.tangents[2]).norm() < 1e-14);
    let back = extract_spec_from_tangents(&p.xs, &p.tangents).unwrap().spec;
    for (a, b) in s.corners.iter().zip(&back.corners) {
        assert_eq!(a.x, b.x);
        assert_abs_diff_eq!(a.theta, b.theta, epsilon = 1e-8);
        assert_abs_diff_eq!(a.tau, b.tau, epsilon = 1e-8);
        assert_eq!(a.delta, b.delta);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn build_extract_roundtrip(
        thetas in proptest::collection::vec(0.2f64..3.0, 2..6),
        taus in proptest::collection::vec(0.05f64..3.09, 5),
        signs in proptest::collection::vec(any::<bool>(), 5),
    ) {
        let corners: Vec<Corner> = thetas.iter().enumerate().map(|(i, &th)| {
            if i == 0 { corner(0.0, th, 0.0, 1) } else { corner(i as f64, th, taus[i - 1], if signs[i - 1] { 1 } else { -1 }) }
        }).collect();
        let s = spec(&corners);
        let p = build_polyline(&s, &Frame::canonical(), Vec3::zeros()).unwrap();
        for t in &p.tangents {
            prop_assert!((t.norm() - 1.0).abs() < 1e-12);
        }
        let back = extract_spec_from_tangents(&p.xs, &p.tangents).unwrap().spec;
        prop_assert_eq!(back.corners.len(), corners.len());
        for (a, b) in corners.iter().zip(&back.corners) {
            prop_assert!((a.theta - b.theta).abs() < 1e-8);
            prop_assert!((a.tau - b.tau).abs() < 1e-8);
            prop_assert_eq!(a.delta, b.delta);
        }
    }
}

#[test]
fn identical_tangents_have_no_corner() {
    let t = Vec3::new(0.0, 0.6, 0.8);
    let e = extract_spec_from_tangents(&[0.0, 1.0], &[t, t, t]).unwrap();
    assert!(e.spec.corners.is_empty());
    assert_eq!(e.notes.len(), 2);
    assert!(extract_spec_from_tangents(&[0.0], &[t]).is_err());
    assert!(extract_spec_from_tangents(&[0.0], &[t, -t]).is_err());
}

#[test]
fn orthogonal_planar_tangents() {
    let e = extract_spec_from_tangents(&[0.0, 1.0], &[Vec3::x(), Vec3::y(), Vec3::x()]).unwrap();
    let c = &e.spec.corners;
    assert_abs_diff_eq!(c[0].theta, PI / 2.0, epsilon = 1e-15);
    assert_abs_diff_eq!(c[1].theta, PI / 2.0, epsilon = 1e-15);
    assert_abs_diff_eq!(c[1].tau, PI, epsilon = 1e-15);
    assert_eq!(e.planar_joints, vec![1]);
}

fn cloud() -> Vec<Vec3> {
    let p = build_polyline(&four_corners(), &Frame::canonical(), Vec3::zeros()).unwrap();
    p.sample(&(0..40).map(|i| -2.0 + 0.15 * i as f64).collect::<Vec<_>>())
}

#[test]
fn rigid_fit_of_identical_curves() {
    let a = cloud();
    let f = compare_rigid(&a, &a).unwrap();
    assert!((f.rotation.matrix() - nalgebra::Matrix3::identity()).norm() < 1e-12);
    assert!(f.translation.norm() < 1e-12);
    assert!(f.rms < 1e-12);
}

#[test]
fn rigid_fit_recovers_a_rotation() {
    let a = cloud();
    let r = Rotation3::from_axis_angle(&Unit::new_normalize(Vec3::new(-1.0, 0.3, 2.0)), 2.4);
    let shift = Vec3::new(0.5, -1.5, 4.0);
    let b: Vec<Vec3> = a.iter().map(|p| r * p + shift).collect();
    let f = compare_rigid(&a, &b).unwrap();
    assert!((f.rotation.matrix() - r.matrix()).norm() < 1e-10);
    assert!((f.translation - shift).norm() < 1e-10);
    assert!(f.max < 1e-10);
    let line: Vec<Vec3> = (0..5).map(|i| Vec3::x() * i as f64).collect();
    assert!(matches!(compare_rigid(&line, &line), Err(Error::Degenerate(_))));
}

#[test]
fn decode_inverts_design() {
    let s = four_corners();
    let tab = table(&[1.2, 2.0, 0.9, 1.6]);
    let d = design_coefficients(&s, &tab, PhaseCoupling::AllCorners).unwrap();
    let back = decode_coefficients(&d.alphas, &tab).unwrap();
    for (a, b) in s.corners.iter().zip(&back.corners) {
        assert_eq!(a.x, b.x);
        assert_abs_diff_eq!(a.theta, b.theta, epsilon = 1e-12);
        assert_abs_diff_eq!(a.tau, b.tau, epsilon = 1e-10);
        assert_eq!(a.delta, b.delta);
    }
    assert!(decode_coefficients(&[(0.0, C::new(0.0, 0.0))], &tab).is_err());
}

#[test]
fn reversal_is_an_involution() {
    let s = four_corners();
    let r = reversed_spec(&s);
    assert_eq!(r.corners[0].x, -3.0);
    assert!(r.validate().is_ok());
    assert_eq!(reversed_spec(&r), s);
    // The reversed polygon has the same extracted geometry read backwards.
    let p = build_polyline(&s, &Frame::canonical(), Vec3::zeros()).unwrap();
    let back: Vec<Vec3> = p.tangents.iter().rev().map(|t| -t).collect();
    let xs: Vec<f64> = p.xs.iter().rev().map(|x| -x).collect();
    let e = extract_spec_from_tangents(&xs, &back).unwrap().spec;
    for (a, b) in r.corners.iter().zip(&e.corners) {
        assert_abs_diff_eq!(a.theta, b.theta, epsilon = 1e-10);
        assert_abs_diff_eq!(a.tau, b.tau, epsilon = 1e-10);
        assert_eq!(a.delta, b.delta);
    }
}

#[test]
fn weighted_norm_of_one_corner() {
    let s = spec(&[corner(1.0, PI / 2.0, 0.0, 1)]);
    assert_abs_diff_eq!(s.weighted_norm().unwrap(), 64.0 * 2f64.ln() / PI, epsilon = 1e-12);
}
