//! Polygonal vortex filaments under the binormal flow.
//!
//! The filament function of a polygonal line with corners at `x_k` is the
//! solution of a renormalized cubic NLS with Dirac-comb data
//! `Σ α_k δ_{x_k}`. Its profile is carried by finitely many time-dependent
//! coefficients `A_k(t)` ([`nls_coeffs`]), turned into `u(t, x)` by
//! [`filament_field`], and into a curve by integrating parallel-frame laws
//! ([`frame_flow`]). [`polyline_codec`] maps polygon geometry to and from
//! coefficients, using the corner profiles of [`self_similar`].
//! [`talbot`] covers the rational-time (Talbot) behaviour of Dirac combs and
//! [`cli_io`] drives everything from configuration files.

pub mod cli_io;
pub mod error;
pub mod filament_field;
pub mod frame_flow;
pub mod nls_coeffs;
pub mod polyline_codec;
pub mod self_similar;
pub mod talbot;

mod dopri;

pub use error::{Error, Result};
pub use num_complex::Complex64;

pub type Vec3 = nalgebra::Vector3<f64>;

/// Complex 3-vector stored as real and imaginary parts.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CVec3 {
    pub re: Vec3,
    pub im: Vec3,
}

impl CVec3 {
    pub fn new(re: Vec3, im: Vec3) -> Self {
        CVec3 { re, im }
    }

    /// `e^{iφ} · self`.
    pub fn rotate(&self, phi: f64) -> CVec3 {
        let (s, c) = phi.sin_cos();
        CVec3 { re: self.re * c - self.im * s, im: self.re * s + self.im * c }
    }

    pub fn scale(&self, z: Complex64) -> CVec3 {
        CVec3 { re: self.re * z.re - self.im * z.im, im: self.re * z.im + self.im * z.re }
    }

    pub fn norm(&self) -> f64 {
        (self.re.norm_squared() + self.im.norm_squared()).sqrt()
    }

    pub fn component(&self, i: usize) -> Complex64 {
        Complex64::new(self.re[i], self.im[i])
    }
}

impl std::ops::Sub for CVec3 {
    type Output = CVec3;
    fn sub(self, o: CVec3) -> CVec3 {
        CVec3 { re: self.re - o.re, im: self.im - o.im }
    }
}

impl std::ops::Add for CVec3 {
    type Output = CVec3;
    fn add(self, o: CVec3) -> CVec3 {
        CVec3 { re: self.re + o.re, im: self.im + o.im }
    }
}
