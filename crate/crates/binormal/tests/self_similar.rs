use std::f64::consts::PI;

use approx::assert_abs_diff_eq;
use binormal::self_similar::*;
use binormal::{Error, Vec3};
use proptest::prelude::*;

fn cfg() -> ProfileConfig {
    ProfileConfig::default()
}

#[test]
fn straight_line_has_zero_amplitude() {
    assert_eq!(alpha_from_angle(PI).unwrap(), 0.0);
    assert_abs_diff_eq!(angle_from_alpha(0.0).unwrap(), PI, epsilon = 1e-15);
}

#[test]
fn sixty_degree_corner() {
    // sin(π/6) = 1/2, so a² = (2/π) log 2.
    let a = alpha_from_angle(PI / 3.0).unwrap();
    assert_abs_diff_eq!(a, (2.0 * 2f64.ln() / PI).sqrt(), epsilon = 1e-14);
    assert_abs_diff_eq!(a, 0.66428, epsilon = 1e-5);
}

#[test]
fn angle_amplitude_roundtrip() {
    for theta in [0.5, 1.5, 3.0] {
        let back = angle_from_alpha(alpha_from_angle(theta).unwrap()).unwrap();
        assert_abs_diff_eq!(back, theta, epsilon = 1e-12);
    }
}

#[test]
fn angle_domain_is_enforced() {
    assert!(matches!(alpha_from_angle(0.0), Err(Error::Domain(_))));
    assert!(alpha_from_angle(3.5).is_err());
    assert!(alpha_from_angle(f64::NAN).is_err());
    assert!(angle_from_alpha(-0.1).is_err());
    assert!(solve_profile(f64::INFINITY, 10.0, &cfg()).is_err());
    assert!(solve_profile(0.5, 0.0, &cfg()).is_err());
}

#[test]
fn corner_angle_of_orthogonal_directions() {
    let e1 = Vec3::x();
    let e2 = Vec3::y();
    assert_abs_diff_eq!(corner_angle(&e1, &e2), PI / 2.0, epsilon = 1e-15);
    assert_abs_diff_eq!(corner_angle(&e1, &e1), PI, epsilon = 1e-15);
}

#[test]
fn zero_amplitude_keeps_the_initial_frame() {
    let p = SelfSimilarProfile::compute(0.0, 40.0, &cfg()).unwrap();
    for s in &p.samples {
        assert_eq!(s.frame.t, Vec3::x());
        assert_eq!(s.frame.e1, Vec3::y());
        assert_eq!(s.frame.e2, Vec3::z());
    }
    let asy = p.asymptotics.unwrap();
    assert!((asy.a_plus - Vec3::x()).norm() < 1e-14);
    assert!((asy.a_minus - Vec3::x()).norm() < 1e-14);
    assert!((asy.b_plus.re - Vec3::y()).norm() < 1e-14);
    assert!((asy.b_minus.im - Vec3::z()).norm() < 1e-14);
    assert!(p.phi.is_none());
    assert!(matches!(phi_a(&asy), Err(Error::UndefinedPhase(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]
    #[test]
    fn profile_frame_stays_orthonormal(a in 0.0f64..1.5) {
        let p = solve_profile(a, 30.0, &cfg()).unwrap();
        prop_assert!(p.max_drift < 1e-8, "drift {}", p.max_drift);
        for s in &p.samples {
            prop_assert!(s.frame.orthonormality_defect() < 1e-10);
        }
    }
}

fn tangent_near(p: &SelfSimilarProfile, x: f64) -> Vec3 {
    p.samples.iter().min_by(|a, b| (a.x - x).abs().partial_cmp(&(b.x - x).abs()).unwrap()).unwrap().frame.t
}

#[test]
fn tangent_settles_like_one_over_x() {
    let p = solve_profile(0.5, 200.0, &cfg()).unwrap();
    let d: Vec<f64> = [20.0, 40.0, 80.0].iter().map(|&x| (tangent_near(&p, x) - tangent_near(&p, x / 2.0)).norm()).collect();
    for (x, v) in [20.0, 40.0, 80.0].iter().zip(&d) {
        assert!(v * x < 4.0, "X = {x}: {v}");
    }
    assert!(d[2] < d[0] / 2.0, "{d:?}");
}

#[test]
fn modulated_normal_converges_like_one_over_x() {
    let a = 0.5;
    let p = solve_profile(a, 200.0, &cfg()).unwrap();
    let b = extract_asymptotics(&p, 200.0).unwrap().b_plus;
    // Envelope of the deviation over [X, 1.25X] for X across a decade.
    let env = |x0: f64| {
        p.samples
            .iter()
            .filter(|s| s.x >= x0 && s.x <= 1.25 * x0)
            .map(|s| (s.frame.n().rotate(a * a * s.x.ln()) - b).norm())
            .fold(0.0, f64::max)
    };
    let xs = [8.0f64, 16.0, 32.0, 64.0, 128.0];
    let pts: Vec<(f64, f64)> = xs.iter().map(|&x| (x.ln(), env(x).ln())).collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let slope = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    assert!(-slope >= 0.8, "exponent {}", -slope);
}

#[test]
fn corner_angle_law_at_half() {
    let p = SelfSimilarProfile::compute(0.5, 200.0, &cfg()).unwrap();
    let theta = p.asymptotics.as_ref().unwrap().corner_angle();
    assert!((theta - 2.0 * (-PI / 8.0).exp().asin()).abs() < 5e-3);
}

#[test]
fn reflection_relations_hold() {
    let p = SelfSimilarProfile::compute(0.3, 200.0, &cfg()).unwrap();
    let par = p.asymptotics.as_ref().unwrap().parity();
    assert!(par.tangent < 1e-6, "{par:?}");
    assert!(par.normal_reflected < 1e-6, "{par:?}");
}

#[test]
fn extrapolation_is_consistent_across_windows() {
    let p = solve_profile(0.8, 400.0, &cfg()).unwrap();
    let a = extract_asymptotics(&p, 200.0).unwrap();
    let b = extract_asymptotics(&p, 400.0).unwrap();
    assert!((a.a_plus - b.a_plus).norm() < 1.0 / 200.0);
    assert!((a.b_minus - b.b_minus).norm() < 1.0 / 200.0);
    assert!(a.consistency < 1.0 / 100.0);
    assert!(a.frame_defect < 1e-4);
    let wide = extract_asymptotics(&p, 800.0).unwrap();
    assert!(!wide.warnings.is_empty());
}

#[test]
fn phi_identities_at_half() {
    let p = SelfSimilarProfile::compute(0.5, 200.0, &cfg()).unwrap();
    let r = phi_a(p.asymptotics.as_ref().unwrap()).unwrap();
    assert!(r.residual < 1e-6, "{r:?}");
    assert!(r.residual_minus < 1e-6, "{r:?}");
    assert!((r.phi - r.phi_explicit).abs() < 1e-8, "{r:?}");
    assert_eq!(p.phi, Some(r.phi));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]
    #[test]
    fn phi_is_in_range(a in 0.05f64..1.5) {
        let p = SelfSimilarProfile::compute(a, 50.0, &cfg()).unwrap();
        let phi = p.phi.unwrap();
        prop_assert!((0.0..2.0 * PI).contains(&phi));
    }
}

#[test]
fn phi_table_lookup() {
    let t = PhiTable::compute(&[0.4, 0.2, 0.3, 0.3], 100.0, &cfg()).unwrap();
    assert_eq!(t.entries.len(), 3);
    let exact = t.lookup(0.3).unwrap();
    assert_eq!(exact.error, 0.0);
    let mid = t.lookup(0.25).unwrap();
    assert!(mid.error.is_finite());
    let direct = SelfSimilarProfile::compute(0.25, 100.0, &cfg()).unwrap().phi.unwrap();
    let gap = (mid.phi - direct + PI).rem_euclid(2.0 * PI) - PI;
    assert!(gap.abs() < 5e-2, "{gap}");
    assert!(matches!(t.lookup(0.5), Err(Error::MissingProfile(_))));
}
