//! Dormand–Prince 5(4) for complex state vectors.
//!
//! Steps in either direction of the independent variable, lands exactly on
//! requested stop points and honours an externally supplied step bound
//! (used to resolve the fastest phase of the coefficient system).

use crate::{Complex64 as C, Error, Result};

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;

const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

pub(crate) struct Settings {
    pub atol: f64,
    pub rtol: f64,
    pub max_steps: usize,
}

#[derive(Debug, Clone, Default)]
pub(crate) struct StepStats {
    pub accepted: usize,
    pub rejected: usize,
    pub h_min: f64,
    pub h_max: f64,
}

/// Integrates `y' = f(x, y)` from `x0` through every point of `stops`
/// (monotone in the direction of travel). `bound(x)` caps `|h|`.
/// `on_step(x, y, f(x, y))` fires after every accepted step, `on_stop` at
/// each stop point.
pub(crate) fn integrate<F, B, S, P>(
    mut f: F,
    x0: f64,
    y0: &[C],
    stops: &[f64],
    settings: &Settings,
    bound: B,
    mut on_step: S,
    mut on_stop: P,
) -> Result<StepStats>
where
    F: FnMut(f64, &[C], &mut [C]),
    B: Fn(f64) -> f64,
    S: FnMut(f64, &[C], &[C]) -> Result<()>,
    P: FnMut(usize, f64, &[C]),
{
    let n = y0.len();
    let mut stats = StepStats { h_min: f64::INFINITY, ..Default::default() };
    if stops.is_empty() {
        return Ok(stats);
    }
    let dir = if stops[stops.len() - 1] >= x0 { 1.0 } else { -1.0 };
    let mut x = x0;
    let mut y = y0.to_vec();
    let mut k1 = vec![C::new(0.0, 0.0); n];
    f(x, &y, &mut k1);
    on_step(x, &y, &k1)?;
    let mut ks: Vec<Vec<C>> = (0..6).map(|_| vec![C::new(0.0, 0.0); n]).collect();
    let mut tmp = vec![C::new(0.0, 0.0); n];
    let mut ynew = vec![C::new(0.0, 0.0); n];
    let mut k7 = vec![C::new(0.0, 0.0); n];

    let total = (stops[stops.len() - 1] - x0).abs();
    let mut h = bound(x).min(total.max(1e-300) / 100.0).max(1e-300);
    let mut next = 0;
    while next < stops.len() && (stops[next] - x) * dir <= 0.0 {
        on_stop(next, x, &y);
        next += 1;
    }
    let mut steps = 0usize;
    while next < stops.len() {
        let target = stops[next];
        let hb = bound(x);
        let mut step = h.min(hb);
        let remaining = (target - x).abs();
        let mut lands = false;
        if step >= remaining {
            step = remaining;
            lands = true;
        } else if step > 0.5 * remaining {
            step = 0.5 * remaining;
        }
        let hs = dir * step;
        let scale_min = 1e-13 * x.abs().max(1e-300);
        if step < scale_min && !lands {
            return Err(Error::Convergence {
                last_t: x,
                msg: format!("step size underflow (h = {step:e})"),
            });
        }
        steps += 1;
        if steps > settings.max_steps {
            return Err(Error::Convergence {
                last_t: x,
                msg: format!("exceeded {} steps", settings.max_steps),
            });
        }

        for i in 0..n {
            tmp[i] = y[i] + k1[i] * (hs * A21);
        }
        f(x + C2 * hs, &tmp, &mut ks[1]);
        for i in 0..n {
            tmp[i] = y[i] + (k1[i] * A31 + ks[1][i] * A32) * hs;
        }
        f(x + C3 * hs, &tmp, &mut ks[2]);
        for i in 0..n {
            tmp[i] = y[i] + (k1[i] * A41 + ks[1][i] * A42 + ks[2][i] * A43) * hs;
        }
        f(x + C4 * hs, &tmp, &mut ks[3]);
        for i in 0..n {
            tmp[i] = y[i]
                + (k1[i] * A51 + ks[1][i] * A52 + ks[2][i] * A53 + ks[3][i] * A54) * hs;
        }
        f(x + C5 * hs, &tmp, &mut ks[4]);
        for i in 0..n {
            tmp[i] = y[i]
                + (k1[i] * A61 + ks[1][i] * A62 + ks[2][i] * A63 + ks[3][i] * A64 + ks[4][i] * A65)
                    * hs;
        }
        let xn = if lands { target } else { x + hs };
        f(xn, &tmp, &mut ks[5]);
        for i in 0..n {
            ynew[i] = y[i]
                + (k1[i] * B1 + ks[2][i] * B3 + ks[3][i] * B4 + ks[4][i] * B5 + ks[5][i] * B6) * hs;
        }
        f(xn, &ynew, &mut k7);
        let mut err = 0.0;
        for i in 0..n {
            let e = (k1[i] * E1 + ks[2][i] * E3 + ks[3][i] * E4 + ks[4][i] * E5 + ks[5][i] * E6
                + k7[i] * E7)
                * hs;
            let sc = settings.atol + settings.rtol * y[i].norm().max(ynew[i].norm());
            err += (e.norm() / sc).powi(2);
        }
        let err = (err / n.max(1) as f64).sqrt();
        if !err.is_finite() {
            return Err(Error::Convergence { last_t: x, msg: "non-finite state".into() });
        }
        if err <= 1.0 {
            x = xn;
            std::mem::swap(&mut y, &mut ynew);
            std::mem::swap(&mut k1, &mut k7);
            stats.accepted += 1;
            stats.h_min = stats.h_min.min(step);
            stats.h_max = stats.h_max.max(step);
            on_step(x, &y, &k1)?;
            if lands {
                on_stop(next, x, &y);
                next += 1;
            }
            let fac = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
            h = step * fac;
        } else {
            stats.rejected += 1;
            h = step * (0.9 * err.powf(-0.2)).clamp(0.1, 0.9);
        }
    }
    Ok(stats)
}
