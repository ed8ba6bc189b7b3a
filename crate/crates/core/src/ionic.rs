//! Cubic ionic current and the physical/rescaled potential map.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IonicParams {
    pub a2: f64,
    pub u1: f64,
    pub u2: f64,
    pub u3: f64,
    /// Surface-to-volume ratio, documentation only (time is rescaled with `nu = cm = 1`).
    pub nu: f64,
    pub cm: f64,
    /// Rescaling offset and scale in mV.
    pub alpha: f64,
    pub beta: f64,
}

impl Default for IonicParams {
    fn default() -> Self {
        Self {
            a2: 0.2,
            u1: 0.0,
            u2: 0.15,
            u3: 1.0,
            nu: 500.0,
            cm: 0.1,
            alpha: 85.0,
            beta: 125.0,
        }
    }
}

impl IonicParams {
    pub fn validate(&self) -> Result<()> {
        let vals = [self.a2, self.u1, self.u2, self.u3, self.alpha, self.beta];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("ionic parameters must be finite".into()));
        }
        if !(self.u1 < self.u2 && self.u2 < self.u3) {
            return Err(Error::Config("ionic roots must satisfy u1 < u2 < u3".into()));
        }
        if self.a2 <= 0.0 {
            return Err(Error::Config("ionic rate a2 must be positive".into()));
        }
        if self.beta <= 0.0 {
            return Err(Error::Config("rescaling beta must be positive".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn f(&self, u: f64) -> f64 {
        self.a2 * (u - self.u1) * (u - self.u2) * (u - self.u3)
    }

    #[inline]
    pub fn f_prime(&self, u: f64) -> f64 {
        let (a, b, c) = (u - self.u1, u - self.u2, u - self.u3);
        self.a2 * (a * b + b * c + a * c)
    }

    /// Critical points of the cubic, ascending.
    pub fn critical_points(&self) -> [f64; 2] {
        // f'/a2 = 3u^2 - 2 s1 u + s2
        let s1 = self.u1 + self.u2 + self.u3;
        let s2 = self.u1 * self.u2 + self.u2 * self.u3 + self.u1 * self.u3;
        let disc = (s1 * s1 - 3.0 * s2).sqrt();
        [(s1 - disc) / 3.0, (s1 + disc) / 3.0]
    }

    /// `max |f'|` over `[u1, u3]`.
    pub fn max_abs_f_prime(&self) -> f64 {
        let mid = (self.u1 + self.u2 + self.u3) / 3.0;
        [self.u1, self.u3, mid]
            .iter()
            .map(|&u| self.f_prime(u).abs())
            .fold(0.0, f64::max)
    }

    pub fn rescale(&self, u_mv: f64) -> f64 {
        (self.alpha + u_mv) / self.beta
    }

    pub fn unrescale(&self, u: f64) -> f64 {
        u * self.beta - self.alpha
    }

    /// Constants for `f(u) u >= c1 u^4 - c0`, valid for every real `u`.
    pub fn growth_bound(&self) -> (f64, f64) {
        // |p(u)| <= s1|u|^3 + s2 u^2 + s3|u| with p(u) = f(u)/a2 - u^3
        let s1 = (self.u1 + self.u2 + self.u3).abs();
        let s2 = (self.u1 * self.u2 + self.u2 * self.u3 + self.u1 * self.u3).abs();
        let s3 = (self.u1 * self.u2 * self.u3).abs();
        // for |u| >= r the lower-order terms are below u^4/6; inside, bound them by their max
        let c1 = self.a2 / 2.0;
        let r = (6.0 * (s1 + s2 + s3)).max(1.0);
        let c0 = self.a2 * (s1 * r.powi(3) + s2 * r * r + s3 * r);
        (c1, c0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn roots_and_midpoint() {
        let p = IonicParams::default();
        assert_eq!(p.f(0.0), 0.0);
        assert_eq!(p.f(1.0), 0.0);
        assert_eq!(p.f(0.15), 0.0);
        assert!((p.f(0.5) + 0.0175).abs() < 1e-15);
    }

    #[test]
    fn derivative_at_rest() {
        assert!((IonicParams::default().f_prime(0.0) - 0.03).abs() < 1e-15);
    }

    #[test]
    fn derivative_vanishes_at_critical_points() {
        let p = IonicParams::default();
        for u in p.critical_points() {
            assert!(p.f_prime(u).abs() < 1e-12);
        }
    }

    #[test]
    fn derivative_matches_central_difference() {
        let p = IonicParams::default();
        let h = 1e-5;
        for i in 0..100 {
            let u = -0.2 + 1.4 * (i as f64 + 0.37) / 100.0;
            let fd = (p.f(u + h) - p.f(u - h)) / (2.0 * h);
            let d = p.f_prime(u);
            assert!((fd - d).abs() <= 1e-6 * d.abs().max(1e-3), "u={u}");
        }
    }

    #[test]
    fn sign_pattern() {
        let p = IonicParams::default();
        for i in 1..1000 {
            let u = i as f64 / 1000.0;
            // sub-threshold potentials decay back to rest, supra-threshold ones grow
            if u < p.u2 - 1e-12 {
                assert!(p.f(u) > 0.0);
            } else if u > p.u2 + 1e-12 {
                assert!(p.f(u) < 0.0);
            }
        }
    }

    #[test]
    fn max_derivative_on_range() {
        let p = IonicParams::default();
        assert!((p.max_abs_f_prime() - 0.17).abs() < 1e-12);
        let sampled = (0..=10_000)
            .map(|i| p.f_prime(i as f64 / 10_000.0).abs())
            .fold(0.0, f64::max);
        assert!(sampled <= p.max_abs_f_prime() + 1e-12);
    }

    #[test]
    fn rescaling_anchors() {
        let p = IonicParams::default();
        assert!(p.rescale(-85.0).abs() < 1e-15);
        assert!((p.rescale(40.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn growth_bound_far_field() {
        let p = IonicParams::default();
        let (c1, c0) = p.growth_bound();
        for i in 0..200 {
            let u = 10.0 + i as f64 * 0.5;
            for s in [u, -u] {
                assert!(p.f(s) * s >= c1 * s.powi(4) - c0);
            }
        }
    }

    #[test]
    fn validation() {
        let mut p = IonicParams::default();
        assert!(p.validate().is_ok());
        p.u2 = 1.5;
        assert!(p.validate().is_err());
        let q = IonicParams { a2: 0.0, ..IonicParams::default() };
        assert!(q.validate().is_err());
    }

    proptest! {
        #[test]
        fn rescale_round_trip(u in -200.0f64..200.0) {
            let p = IonicParams::default();
            prop_assert!((p.unrescale(p.rescale(u)) - u).abs() <= 1e-12 * u.abs().max(1.0));
            let x = u / 100.0;
            prop_assert!((p.rescale(p.unrescale(x)) - x).abs() <= 1e-14 * x.abs().max(1.0));
        }

        #[test]
        fn growth_bound_everywhere(u in -50.0f64..50.0) {
            let p = IonicParams::default();
            let (c1, c0) = p.growth_bound();
            prop_assert!(p.f(u) * u >= c1 * u.powi(4) - c0);
        }
    }
}
