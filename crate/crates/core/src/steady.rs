//! Steady states of the limit equation
//! `p_τ + b p_v = a1 p_vv - a1 p_v(V_F) δ_{V_R}`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{boundary_slope, DensityProfile, Grid};
use crate::model::{classify_regime, ModelParams, RegimeLabel};
use crate::tridiag;

#[derive(Debug, Clone, PartialEq)]
pub struct SteadyState {
    pub profile: DensityProfile,
    /// Normalization constant, excitatory case only.
    pub z: Option<f64>,
    pub m_inf: f64,
    pub regime: RegimeLabel,
    pub normalized: bool,
    pub params: ModelParams,
}

#[derive(Debug, Clone, Serialize)]
pub struct SteadySummary {
    pub regime: String,
    #[serde(rename = "Z")]
    pub z: Option<f64>,
    #[serde(rename = "M_inf")]
    pub m_inf: f64,
    pub mass: f64,
    pub normalized: bool,
}

impl SteadyState {
    /// Closed-form value at `v`.
    pub fn density(&self, v: f64) -> f64 {
        steady_density(&self.params, v)
    }

    /// Closed-form derivative at `v` (right branch at the reset).
    pub fn derivative(&self, v: f64) -> f64 {
        steady_derivative(&self.params, v)
    }

    pub fn summary(&self) -> SteadySummary {
        SteadySummary {
            regime: self.regime.to_string(),
            z: self.z,
            m_inf: self.m_inf,
            mass: self.profile.mass(),
            normalized: self.normalized,
        }
    }
}

/// Closed-form steady density for any sign of `b` (unnormalized when `b <= 0`).
pub fn steady_density(p: &ModelParams, v: f64) -> f64 {
    let l = p.gap();
    if v >= p.v_f {
        return 0.0;
    }
    if p.b > 0.0 {
        let k = p.b / p.a1;
        if v <= p.v_r {
            (1.0 - (-k * l).exp()) / l * (k * (v - p.v_r)).exp()
        } else {
            -(k * (v - p.v_f)).exp_m1() / l
        }
    } else if p.b < 0.0 {
        let k = p.b / p.a1;
        if v <= p.v_r {
            -(k * l).exp_m1() * (k * (v - p.v_r)).exp()
        } else {
            (k * (v - p.v_r)).exp() - (k * l).exp()
        }
    } else if v <= p.v_r {
        l
    } else {
        p.v_f - v
    }
}

pub fn steady_derivative(p: &ModelParams, v: f64) -> f64 {
    let l = p.gap();
    if p.b > 0.0 {
        let k = p.b / p.a1;
        if v < p.v_r {
            (1.0 - (-k * l).exp()) / l * k * (k * (v - p.v_r)).exp()
        } else {
            -k * (k * (v - p.v_f)).exp() / l
        }
    } else if p.b < 0.0 {
        let k = p.b / p.a1;
        if v < p.v_r {
            -(k * l).exp_m1() * k * (k * (v - p.v_r)).exp()
        } else {
            k * (k * (v - p.v_r)).exp()
        }
    } else if v < p.v_r {
        0.0
    } else {
        -1.0
    }
}

fn sample(params: &ModelParams, grid: &Grid) -> DensityProfile {
    let mut values: Vec<f64> = (0..=grid.n).map(|i| steady_density(params, grid.node(i))).collect();
    values[grid.n] = 0.0;
    DensityProfile { grid: *grid, values }
}

pub fn steady_excitatory(params: &ModelParams, grid: &Grid) -> Result<SteadyState> {
    if !(params.b > 0.0) {
        return Err(Error::Regime(format!("excitatory steady state needs b > 0, got {}", params.b)));
    }
    let l = params.gap();
    Ok(SteadyState {
        profile: sample(params, grid),
        z: Some(l * (params.b / params.a1 * l).exp()),
        m_inf: params.b / l,
        regime: classify_regime(params),
        normalized: true,
        params: *params,
    })
}

pub fn steady_inhibitory(params: &ModelParams, grid: &Grid) -> Result<SteadyState> {
    if params.b > 0.0 {
        return Err(Error::Regime(format!("inhibitory steady state needs b <= 0, got {}", params.b)));
    }
    let m_inf = if params.b < 0.0 {
        -params.b * (params.b / params.a1 * params.gap()).exp()
    } else {
        params.a1
    };
    Ok(SteadyState {
        profile: sample(params, grid),
        z: None,
        m_inf,
        regime: RegimeLabel::Inhibitory,
        normalized: false,
        params: *params,
    })
}

/// Steady state of the regime matching `params.b`.
pub fn steady_state(params: &ModelParams, grid: &Grid) -> Result<SteadyState> {
    if params.b > 0.0 {
        steady_excitatory(params, grid)
    } else {
        steady_inhibitory(params, grid)
    }
}

/// Central-difference stationary solve with a unit source at the reset
/// node, normalized afterwards. Independent of the time stepper.
pub fn steady_numeric(params: &ModelParams, grid: &Grid) -> Result<DensityProfile> {
    if !(params.b > 0.0) {
        return Err(Error::Regime("numeric steady state needs b > 0".into()));
    }
    let h = grid.h;
    let m = grid.n - 1;
    let dd = params.a1 / (h * h);
    let cd = params.b / (2.0 * h);
    let lower = vec![dd + cd; m];
    let diag = vec![-2.0 * dd; m];
    let upper = vec![dd - cd; m];
    let mut rhs = vec![0.0; m];
    rhs[grid.i_reset - 1] = -1.0 / h;
    let x = tridiag::solve(&lower, &diag, &upper, &rhs)
        .ok_or_else(|| Error::Configuration("singular stationary system".into()))?;
    let mut values = vec![0.0; grid.len()];
    values[1..grid.n].copy_from_slice(&x);
    let p = DensityProfile { grid: *grid, values };
    let mass = p.mass();
    if !(mass > 0.0) || !mass.is_finite() {
        return Err(Error::Configuration("stationary system produced no mass".into()));
    }
    Ok(p.scaled(1.0 / mass))
}

/// Ratio `h = p/p∞`; the threshold node carries `ν`, the ratio of boundary slopes.
pub fn reference_ratio(p: &DensityProfile, s: &SteadyState) -> Result<Vec<f64>> {
    if !p.grid.same_as(&s.profile.grid) {
        return Err(Error::Configuration("profile and reference live on different grids".into()));
    }
    let n = p.grid.n;
    let mut h = vec![0.0; n + 1];
    for i in 1..n {
        let r = s.profile.values[i];
        if !(r > 0.0) {
            return Err(Error::Domain(format!("reference vanishes at interior node {i}")));
        }
        h[i] = p.values[i] / r;
    }
    let r0 = s.profile.values[0];
    h[0] = if r0 > 0.0 { p.values[0] / r0 } else { h[1] };
    let gp = crate::grid::boundary_slope_raw(p);
    let gs = boundary_slope(&s.profile)?;
    if !(gs > 0.0) {
        return Err(Error::Domain("reference has zero boundary slope".into()));
    }
    let nu = gp / gs;
    h[n] = nu;
    if n >= 3 {
        let raw = h[n - 1];
        if (raw - nu).abs() > 0.2 * nu.abs().max(1e-300) {
            h[n - 1] = 0.5 * (h[n - 2] + nu);
        }
    }
    Ok(h)
}
