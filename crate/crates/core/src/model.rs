//! Model constants and the pointwise relations between boundary slope,
//! firing rate `N` and the dilated rate `Ñ = 1/(N + c)`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Physical constants of the network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub v_l: f64,
    pub v_r: f64,
    pub v_f: f64,
    pub mu0: f64,
    pub b: f64,
    pub a0: f64,
    pub a1: f64,
}

impl ModelParams {
    pub fn new(v_l: f64, v_r: f64, v_f: f64, mu0: f64, b: f64, a0: f64, a1: f64) -> Result<Self> {
        let p = ModelParams { v_l, v_r, v_f, mu0, b, a0, a1 };
        p.validate()?;
        Ok(p)
    }

    /// Convenience constructor from the combined drift `b0 = V_L + mu0`,
    /// placing `V_L` at `V_R`.
    pub fn with_b0(v_r: f64, v_f: f64, b0: f64, b: f64, a0: f64, a1: f64) -> Result<Self> {
        Self::new(v_r, v_r, v_f, b0 - v_r, b, a0, a1)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.v_l, self.v_r, self.v_f, self.mu0, self.b, self.a0, self.a1];
        if all.iter().any(|x| !x.is_finite()) {
            return Err(Error::Configuration("model parameters must be finite".into()));
        }
        if !(self.v_l <= self.v_r) {
            return Err(Error::Configuration(format!(
                "params.v_l = {} must not exceed params.v_r = {}",
                self.v_l, self.v_r
            )));
        }
        if !(self.v_r < self.v_f) {
            return Err(Error::Configuration(format!(
                "params.v_r = {} must be below params.v_f = {}",
                self.v_r, self.v_f
            )));
        }
        if !(self.a0 > 0.0) {
            return Err(Error::Configuration(format!("params.a0 = {} must be positive", self.a0)));
        }
        if !(self.a1 > 0.0) {
            return Err(Error::Configuration(format!("params.a1 = {} must be positive", self.a1)));
        }
        Ok(())
    }

    pub fn b0(&self) -> f64 {
        self.v_l + self.mu0
    }

    /// Distance between threshold and reset.
    pub fn gap(&self) -> f64 {
        self.v_f - self.v_r
    }

    /// The value of `c` that removes the `Ñ`-dependence of the diffusion.
    pub fn natural_c(&self) -> f64 {
        self.a0 / self.a1
    }
}

/// Dilation parameter `c` and the constants derived from it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DilationParams {
    pub c: f64,
    pub b0: f64,
    pub b_c: f64,
    pub a_c: f64,
    pub b_star: f64,
}

impl DilationParams {
    pub fn new(params: &ModelParams, c: f64) -> Result<Self> {
        if !(c > 0.0) || !c.is_finite() {
            return Err(Error::Configuration(format!("dil.c = {c} must be positive")));
        }
        let b0 = params.b0();
        // exact zero when c was produced as a0/a1
        let a_c = if c == params.a0 / params.a1 { 0.0 } else { params.a0 - c * params.a1 };
        Ok(DilationParams {
            c,
            b0,
            b_c: b0 - c * params.b,
            a_c,
            b_star: b0 - (params.a0 / params.a1) * params.b,
        })
    }

    pub fn natural(params: &ModelParams) -> Self {
        Self::new(params, params.natural_c()).expect("a0/a1 is positive")
    }

    /// Diffusivity `a_c Ñ + a1`.
    pub fn diffusivity(&self, params: &ModelParams, tn: f64) -> f64 {
        self.a_c * tn + params.a1
    }

    /// Drift `(-v + b_c) Ñ + b`.
    pub fn drift(&self, params: &ModelParams, tn: f64, v: f64) -> f64 {
        (-v + self.b_c) * tn + params.b
    }

    pub fn uses_natural_c(&self, params: &ModelParams) -> bool {
        self.a_c == 0.0 || (self.c - params.natural_c()).abs() <= 1e-14 * self.c
    }
}

/// Regime of the connectivity parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RegimeLabel {
    StronglyExcitatory,
    MildlyExcitatory,
    Inhibitory,
}

impl fmt::Display for RegimeLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            RegimeLabel::StronglyExcitatory => "strongly_excitatory",
            RegimeLabel::MildlyExcitatory => "mildly_excitatory",
            RegimeLabel::Inhibitory => "inhibitory",
        };
        f.write_str(s)
    }
}

/// A nonnegative rate that may be infinite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Rate {
    Finite(f64),
    Infinite,
}

impl Rate {
    pub fn is_infinite(&self) -> bool {
        matches!(self, Rate::Infinite)
    }

    pub fn finite(&self) -> Option<f64> {
        match self {
            Rate::Finite(x) => Some(*x),
            Rate::Infinite => None,
        }
    }

    /// Floating-point view, `f64::INFINITY` for the infinite value.
    pub fn to_f64(&self) -> f64 {
        self.finite().unwrap_or(f64::INFINITY)
    }
}

impl fmt::Display for Rate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rate::Finite(x) => write!(f, "{}", crate::fmt_f64(*x)),
            Rate::Infinite => f.write_str("inf"),
        }
    }
}

fn pos(x: f64) -> f64 {
    x.max(0.0)
}

fn check_slope(g: f64) -> Result<()> {
    if !(g >= 0.0) {
        return Err(Error::Precondition(format!("boundary slope g = {g} must be nonnegative")));
    }
    Ok(())
}

/// `N = a0 g / (1 - a1 g)`, infinite once `a1 g >= 1`.
pub fn firing_rate_from_slope(g: f64, params: &ModelParams) -> Result<Rate> {
    check_slope(g)?;
    let m = params.a1 * g;
    if m >= 1.0 {
        Ok(Rate::Infinite)
    } else {
        Ok(Rate::Finite(params.a0 * g / (1.0 - m)))
    }
}

/// `Ñ = (1 - a1 g)₊ / (a0 g + c (1 - a1 g)₊)`.
pub fn tilde_n_from_slope(g: f64, c: f64, params: &ModelParams) -> Result<f64> {
    check_slope(g)?;
    if !(c > 0.0) {
        return Err(Error::Precondition(format!("c = {c} must be positive")));
    }
    let q = pos(1.0 - params.a1 * g);
    if q == 0.0 {
        return Ok(0.0);
    }
    let tn = q / (params.a0 * g + c * q);
    Ok(tn.min(1.0 / c))
}

/// `Ñ` written through the flux `M = a1 g` with `c = a0/a1`.
pub fn tilde_n_from_m(m: f64, params: &ModelParams) -> Result<f64> {
    if !(m >= 0.0) {
        return Err(Error::Precondition(format!("boundary flux M = {m} must be nonnegative")));
    }
    let q = pos(1.0 - m);
    if q == 0.0 {
        return Ok(0.0);
    }
    Ok(params.a1 / params.a0 * q / (m + q))
}

/// `N = 1/Ñ - c`, infinite at `Ñ = 0`.
pub fn invert_tilde_n(tn: f64, c: f64) -> Result<Rate> {
    if !(c > 0.0) {
        return Err(Error::Precondition(format!("c = {c} must be positive")));
    }
    if !(tn >= 0.0 && tn <= 1.0 / c) {
        return Err(Error::Range(format!("Ñ = {tn} outside [0, 1/c = {}]", 1.0 / c)));
    }
    if tn == 0.0 {
        Ok(Rate::Infinite)
    } else {
        Ok(Rate::Finite((1.0 / tn - c).max(0.0)))
    }
}

pub fn classify_regime(params: &ModelParams) -> RegimeLabel {
    if params.b <= 0.0 {
        RegimeLabel::Inhibitory
    } else if params.b >= params.gap() {
        RegimeLabel::StronglyExcitatory
    } else {
        RegimeLabel::MildlyExcitatory
    }
}

/// Which drift assumptions hold for a parameter set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DriftReport {
    pub regime: RegimeLabel,
    /// `b0 - (a0/a1) b <= V_F`
    pub excitatory_drift: bool,
    /// `b0 <= V_F`
    pub inhibitory_drift: bool,
}

pub fn drift_hypothesis_check(params: &ModelParams) -> DriftReport {
    let b0 = params.b0();
    DriftReport {
        regime: classify_regime(params),
        excitatory_drift: b0 - params.a0 / params.a1 * params.b <= params.v_f,
        inhibitory_drift: b0 <= params.v_f,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(b: f64, a0: f64, a1: f64) -> ModelParams {
        ModelParams::with_b0(0.0, 1.0, 0.0, b, a0, a1).unwrap()
    }

    #[test]
    fn rate_from_slope() {
        let p = unit(0.5, 1.0, 1.0);
        assert_eq!(firing_rate_from_slope(0.0, &p).unwrap(), Rate::Finite(0.0));
        assert_eq!(firing_rate_from_slope(0.5, &p).unwrap(), Rate::Finite(1.0));
        assert_eq!(firing_rate_from_slope(1.0, &p).unwrap(), Rate::Infinite);
        assert!(firing_rate_from_slope(-0.1, &p).is_err());
    }

    #[test]
    fn dilated_rate() {
        let p = unit(0.5, 1.0, 1.0);
        assert_eq!(tilde_n_from_slope(0.0, 2.0, &p).unwrap(), 0.5);
        assert_eq!(tilde_n_from_slope(1.0, 1.0, &p).unwrap(), 0.0);
        assert_eq!(tilde_n_from_slope(3.0, 1.0, &p).unwrap(), 0.0);
        assert_eq!(tilde_n_from_slope(0.5, 1.0, &p).unwrap(), 0.5);
    }

    #[test]
    fn dilated_rate_from_flux() {
        let p = unit(0.5, 2.0, 1.0);
        assert_eq!(tilde_n_from_m(1.0, &p).unwrap(), 0.0);
        assert_eq!(tilde_n_from_m(0.0, &p).unwrap(), 0.5);
        assert_eq!(tilde_n_from_m(0.5, &p).unwrap(), 0.25);
        assert!(tilde_n_from_m(-1.0, &p).is_err());
    }

    #[test]
    fn inversion() {
        assert_eq!(invert_tilde_n(1.0, 1.0).unwrap(), Rate::Finite(0.0));
        assert_eq!(invert_tilde_n(0.5, 2.0).unwrap(), Rate::Finite(0.0));
        assert_eq!(invert_tilde_n(0.0, 1.0).unwrap(), Rate::Infinite);
        assert_eq!(invert_tilde_n(0.25, 1.0).unwrap(), Rate::Finite(3.0));
        assert!(invert_tilde_n(1.5, 1.0).is_err());
        assert!(invert_tilde_n(-0.1, 1.0).is_err());
    }

    #[test]
    fn regimes() {
        assert_eq!(classify_regime(&unit(1.5, 1.0, 1.0)), RegimeLabel::StronglyExcitatory);
        assert_eq!(classify_regime(&unit(0.9, 0.5, 1.0)), RegimeLabel::MildlyExcitatory);
        assert_eq!(classify_regime(&unit(0.0, 1.0, 1.0)), RegimeLabel::Inhibitory);
        assert_eq!(classify_regime(&unit(1.0, 1.0, 1.0)), RegimeLabel::StronglyExcitatory);
    }

    #[test]
    fn drift_hypotheses() {
        let r = drift_hypothesis_check(&unit(0.9, 0.5, 1.0));
        assert!(r.excitatory_drift && r.inhibitory_drift);
        let p = ModelParams::with_b0(0.0, 1.0, 3.0, -0.5, 1.0, 1.0).unwrap();
        assert!(!drift_hypothesis_check(&p).inhibitory_drift);
        let p = ModelParams::with_b0(0.0, 1.0, 0.0, -2.0, 1.0, 1.0).unwrap();
        assert!(drift_hypothesis_check(&p).inhibitory_drift);
    }

    #[test]
    fn derived_constants() {
        let p = unit(0.9, 0.5, 1.0);
        let d = DilationParams::natural(&p);
        assert_eq!(d.a_c, 0.0);
        assert_eq!(d.b_star, -0.45);
        let d1 = DilationParams::new(&p, 1.0).unwrap();
        assert_eq!(d1.a_c, -0.5);
        assert_eq!(d1.b_c, -0.9);
        assert!(DilationParams::new(&p, 0.0).is_err());
    }

    #[test]
    fn invalid_params() {
        assert!(ModelParams::new(0.5, 0.0, 1.0, 0.0, 1.0, 1.0, 1.0).is_err());
        assert!(ModelParams::new(0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0).is_err());
        assert!(ModelParams::new(0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0).is_err());
        assert!(ModelParams::new(0.0, 0.0, 1.0, 0.0, 1.0, 1.0, -1.0).is_err());
    }
}
