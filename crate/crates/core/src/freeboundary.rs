//! Free-boundary form of the dilated problem.
//!
//! Voltages are shifted so the threshold sits at 0; `b0` and `V_R` are
//! shifted with them. With `β = exp(∫Ñ dτ)`, `s = ∫β² ã dτ` and
//! `p(v, τ) = β q(βv, s)`, the density solves a heat equation on a moving
//! half-line. `γ = β²` obeys `γ' = F(γ, M)` with `M(s) = -∂_y q(0, s)`,
//! and the boundaries move with the drift `D(s; M)`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::DensityProfile;
use crate::model::ModelParams;
use crate::solver::{interp, TauTrajectory};

fn check_c(c: f64) -> Result<()> {
    if !(c > 0.0) {
        return Err(Error::Precondition(format!("c = {c} must be positive")));
    }
    Ok(())
}

/// `Ñ(γ, M) = (1 − a1γM)₊ / (a0γM + c(1 − a1γM)₊)`.
pub fn tilde_n_gamma(gamma: f64, m: f64, params: &ModelParams, c: f64) -> Result<f64> {
    check_c(c)?;
    if !(gamma >= 1.0) {
        return Err(Error::Precondition(format!("γ = {gamma} below 1")));
    }
    if !(m >= 0.0) {
        return Err(Error::Precondition(format!("M = {m} negative")));
    }
    let q = (1.0 - params.a1 * gamma * m).max(0.0);
    if q == 0.0 {
        return Ok(0.0);
    }
    Ok((q / (params.a0 * gamma * m + c * q)).min(1.0 / c))
}

/// Upper bound of `F`.
pub fn f_bound(params: &ModelParams, c: f64) -> f64 {
    2.0 / params.a0.min(params.a1 * c)
}

/// Upper bound of `|D|`.
pub fn d_bound(params: &ModelParams, c: f64) -> f64 {
    let b0 = shifted_b0(params);
    (b0.abs() / c).max(params.b.abs()) / (params.a0 / c).min(params.a1)
}

/// Lipschitz constant of the boundaries.
pub fn lipschitz_constant(params: &ModelParams, c: f64) -> f64 {
    let b0 = shifted_b0(params);
    (b0.abs().max(params.b.abs() * c) + 1.0) / params.a0.min(params.a1 * c)
}

/// `b0` after moving the threshold to 0.
pub fn shifted_b0(params: &ModelParams) -> f64 {
    params.b0() - params.v_f
}

/// Reset potential after moving the threshold to 0.
pub fn shifted_v_r(params: &ModelParams) -> f64 {
    params.v_r - params.v_f
}

/// `F = 2Ñ / (a1 + (a0 − c a1) Ñ)`.
pub fn f_rhs(gamma: f64, m: f64, params: &ModelParams, c: f64) -> Result<f64> {
    let tn = tilde_n_gamma(gamma, m, params, c)?;
    let f = 2.0 * tn / (params.a1 + (params.a0 - c * params.a1) * tn);
    let bound = f_bound(params, c);
    if !(f >= 0.0 && f <= bound * (1.0 + 1e-12)) {
        return Err(Error::Invariant(format!("F = {f} outside [0, {bound}]")));
    }
    Ok(f)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GammaState {
    pub s: f64,
    pub gamma: f64,
    pub beta: f64,
    pub tn: f64,
    pub a_tilde: f64,
    pub mu_tilde: f64,
    pub d: f64,
}

impl GammaState {
    pub fn new(s: f64, gamma: f64, m: f64, params: &ModelParams, c: f64) -> Result<Self> {
        let tn = tilde_n_gamma(gamma, m, params, c)?;
        let a_tilde = tn * params.a0 + (1.0 - c * tn) * params.a1;
        let mu_tilde = tn * shifted_b0(params) + (1.0 - c * tn) * params.b;
        let beta = gamma.sqrt();
        Ok(GammaState { s, gamma, beta, tn, a_tilde, mu_tilde, d: mu_tilde / (beta * a_tilde) })
    }
}

/// `D = μ̃ / (β ã)` recomputed from the state.
pub fn drift_d(state: &GammaState, params: &ModelParams, c: f64) -> f64 {
    let tn = state.tn;
    let mu = tn * shifted_b0(params) + (1.0 - c * tn) * params.b;
    let a = tn * params.a0 + (1.0 - c * tn) * params.a1;
    mu / (state.beta * a)
}

/// RK4 for `γ' = F(γ, M(s))`, `γ(0) = 1`, with `M` linear between samples
/// and `substeps` RK4 steps per sample interval.
pub fn integrate_gamma_substeps(s: &[f64], m: &[f64], params: &ModelParams, c: f64, substeps: usize) -> Result<Vec<GammaState>> {
    check_c(c)?;
    if s.len() != m.len() || s.is_empty() {
        return Err(Error::Precondition("s and M series must be nonempty and of equal length".into()));
    }
    if m.iter().any(|x| !(*x >= 0.0)) {
        return Err(Error::Precondition("M must be nonnegative".into()));
    }
    let cbound = f_bound(params, c);
    let sub = substeps.max(1);
    let mut out = Vec::with_capacity(s.len());
    let mut gamma: f64 = 1.0;
    out.push(GammaState::new(s[0], gamma, m[0], params, c)?);
    for k in 1..s.len() {
        let (s0, s1) = (s[k - 1], s[k]);
        if !(s1 >= s0) {
            return Err(Error::Precondition("s samples must be nondecreasing".into()));
        }
        let hk = (s1 - s0) / sub as f64;
        let mm = |x: f64| {
            if s1 > s0 {
                m[k - 1] + (m[k] - m[k - 1]) * (x - s0) / (s1 - s0)
            } else {
                m[k]
            }
        };
        for j in 0..sub {
            let a = s0 + j as f64 * hk;
            // γ never drops below 1 because F >= 0; guard round-off only
            let f = |g: f64, x: f64| f_rhs(g.max(1.0), mm(x), params, c);
            let k1 = f(gamma, a)?;
            let k2 = f(gamma + 0.5 * hk * k1, a + 0.5 * hk)?;
            let k3 = f(gamma + 0.5 * hk * k2, a + 0.5 * hk)?;
            let k4 = f(gamma + hk * k3, a + hk)?;
            gamma += hk / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        let top = cbound * (s1 - s[0]) + 1.0;
        if !(gamma >= 1.0 && gamma <= top * (1.0 + 1e-10) + 1e-12) {
            return Err(Error::Invariant(format!("γ = {gamma} outside [1, {top}] at s = {s1}")));
        }
        out.push(GammaState::new(s1, gamma, m[k], params, c)?);
    }
    Ok(out)
}

pub fn integrate_gamma(s: &[f64], m: &[f64], params: &ModelParams, c: f64) -> Result<Vec<GammaState>> {
    integrate_gamma_substeps(s, m, params, c, 1)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundaryPath {
    pub s: Vec<f64>,
    pub ell: Vec<f64>,
    pub ell_r: Vec<f64>,
    pub ell_i: f64,
    /// Largest `(|Δℓ| + |Δℓ_R|) / Δs` over consecutive samples, which bounds
    /// the quotient over all pairs.
    pub lipschitz_max: f64,
    pub lipschitz_bound: f64,
}

/// `ℓ = ℓ_I − ∫D`, `ℓ_R = ℓ + V_R β` (shifted `V_R`), with the Lipschitz check.
pub fn boundaries(states: &[GammaState], ell_i: f64, params: &ModelParams, c: f64) -> Result<BoundaryPath> {
    let vr = shifted_v_r(params);
    let n = states.len();
    let mut s = Vec::with_capacity(n);
    let mut ell = Vec::with_capacity(n);
    let mut ell_r = Vec::with_capacity(n);
    let mut acc = 0.0;
    for k in 0..n {
        if k > 0 {
            acc += 0.5 * (states[k].s - states[k - 1].s) * (states[k].d + states[k - 1].d);
        }
        s.push(states[k].s);
        ell.push(ell_i - acc);
        ell_r.push(ell_i - acc + vr * states[k].beta);
    }
    let l = lipschitz_constant(params, c);
    let mut q: f64 = 0.0;
    for k in 1..n {
        let ds = s[k] - s[k - 1];
        if ds > 0.0 {
            q = q.max(((ell[k] - ell[k - 1]).abs() + (ell_r[k] - ell_r[k - 1]).abs()) / ds);
        }
    }
    if q > 2.0 * l * (1.0 + 1e-6) {
        return Err(Error::Invariant(format!("boundary Lipschitz quotient {q} exceeds 2L = {}", 2.0 * l)));
    }
    Ok(BoundaryPath { s, ell, ell_r, ell_i, lipschitz_max: q, lipschitz_bound: 2.0 * l })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransformCheck {
    pub beta_gap: f64,
    pub s: Vec<f64>,
    pub m: Vec<f64>,
    pub beta_direct: Vec<f64>,
    pub states: Vec<GammaState>,
    pub path: BoundaryPath,
    pub bounds_ok: bool,
}

impl TransformCheck {
    /// CSV with header `s,gamma,beta,D,ell,ell_R`, every `stride`-th sample.
    pub fn to_csv(&self, stride: usize) -> String {
        let mut out = String::from("s,gamma,beta,D,ell,ell_R\n");
        let n = self.states.len();
        for k in (0..n).filter(|k| k % stride.max(1) == 0 || *k + 1 == n) {
            let st = &self.states[k];
            let row = [st.s, st.gamma, st.beta, st.d, self.path.ell[k], self.path.ell_r[k]];
            let cells: Vec<String> = row.iter().map(|x| crate::fmt_f64(*x)).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

/// `S(τ) = ∫β²ã`, `β = exp(∫Ñ)` and `M(s) = g / β²` from a trajectory.
pub fn transform_series(traj: &TauTrajectory) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let params = &traj.params;
    let dil = &traj.dil;
    let n = traj.len();
    let mut log_beta = 0.0;
    let mut s = Vec::with_capacity(n);
    let mut m = Vec::with_capacity(n);
    let mut beta = Vec::with_capacity(n);
    let mut prev_w = 0.0;
    let mut acc = 0.0;
    for k in 0..n {
        if k > 0 {
            log_beta += 0.5 * (traj.tau[k] - traj.tau[k - 1]) * (traj.tilde_n[k] + traj.tilde_n[k - 1]);
        }
        let b = log_beta.exp();
        let w = b * b * dil.diffusivity(params, traj.tilde_n[k]);
        if k > 0 {
            acc += 0.5 * (traj.tau[k] - traj.tau[k - 1]) * (w + prev_w);
            if !(acc > *s.last().unwrap()) {
                return Err(Error::Integrity("S(τ) is not increasing".into()));
            }
        }
        prev_w = w;
        s.push(acc);
        m.push(traj.slope[k] / (b * b));
        beta.push(b);
    }
    Ok((s, m, beta))
}

/// Compares `√γ` obtained from the extracted `M(s)` with the direct `β`.
pub fn cross_check_transform(traj: &TauTrajectory) -> Result<TransformCheck> {
    let params = &traj.params;
    let c = traj.dil.c;
    let (s, m, beta_direct) = transform_series(traj)?;
    let states = integrate_gamma(&s, &m, params, c)?;
    let beta_gap = states.iter().zip(&beta_direct).map(|(st, b)| (st.beta - b).abs()).fold(0.0, f64::max);
    let fb = f_bound(params, c);
    let db = d_bound(params, c);
    let mut bounds_ok = true;
    for (st, mk) in states.iter().zip(&m) {
        let f = f_rhs(st.gamma, *mk, params, c)?;
        if f < 0.0 || f > fb * (1.0 + 1e-12) || st.d.abs() > db * (1.0 + 1e-12) {
            bounds_ok = false;
        }
        if st.gamma > fb * st.s + 1.0 + 1e-9 * st.gamma {
            bounds_ok = false;
        }
    }
    let path = boundaries(&states, 0.0, params, c)?;
    Ok(TransformCheck { beta_gap, s, m, beta_direct, states, path, bounds_ok })
}

/// Settings of the Volterra solver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VolterraConfig {
    /// Initial horizon in `s`.
    pub sigma: f64,
    /// Samples of `M` on `[0, sigma]`.
    pub s_nodes: usize,
    /// Quadrature nodes of the memory integrals.
    pub w_nodes: usize,
    pub tolerance: f64,
    pub max_iterations: usize,
    pub max_halvings: usize,
}

impl Default for VolterraConfig {
    fn default() -> Self {
        VolterraConfig { sigma: 0.5, s_nodes: 200, w_nodes: 400, tolerance: 1e-8, max_iterations: 100, max_halvings: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VolterraSolution {
    pub sigma: f64,
    pub s: Vec<f64>,
    pub m: Vec<f64>,
    pub iterations: usize,
    /// Ratios of successive max-norm increments of the accepted iteration.
    pub contraction: Vec<f64>,
    pub halvings: usize,
}

impl VolterraSolution {
    pub fn max_contraction(&self) -> f64 {
        self.contraction.iter().cloned().fold(0.0, f64::max)
    }
}

/// Piecewise-linear initial datum on `x <= ℓ_I`.
struct InitialData {
    x: Vec<f64>,
    slope: Vec<f64>,
}

impl InitialData {
    /// `−2 ∫ G(x, s, ξ, 0) u'(ξ) dξ`, exact for piecewise-linear `u`.
    fn term(&self, x: f64, s: f64) -> f64 {
        if s <= 0.0 {
            return -*self.slope.last().unwrap_or(&0.0);
        }
        let w = 2.0 * s.sqrt();
        let mut acc = 0.0;
        let mut prev = libm::erf((x - self.x[0]) / w);
        for (j, sl) in self.slope.iter().enumerate() {
            let next = libm::erf((x - self.x[j + 1]) / w);
            acc += sl * (prev - next);
            prev = next;
        }
        -acc
    }
}

/// One application of the Picard map.
fn picard(
    data: &InitialData,
    s: &[f64],
    m: &[f64],
    params: &ModelParams,
    c: f64,
    ell_i: f64,
    w_nodes: usize,
) -> Result<Vec<f64>> {
    let states = integrate_gamma_substeps(s, m, params, c, 4)?;
    let path = boundaries(&states, ell_i, params, c)?;
    let inv_sqrt_pi = 1.0 / std::f64::consts::PI.sqrt();
    let mut out = Vec::with_capacity(s.len());
    for (j, &sj) in s.iter().enumerate() {
        let ell_s = path.ell[j];
        let mut v = data.term(ell_s, sj);
        if sj > 0.0 {
            let wmax = sj.sqrt();
            let dw = wmax / w_nodes as f64;
            let mut acc = 0.0;
            for q in 0..=w_nodes {
                let w = q as f64 * dw;
                let weight = if q == 0 || q == w_nodes { 0.5 } else { 1.0 };
                let tau = (sj - w * w).max(0.0);
                let mt = interp(s, m, tau);
                let (own, reset) = if q == 0 {
                    (states[j].d, 0.0)
                } else {
                    let w2 = w * w;
                    let d1 = ell_s - interp(s, &path.ell, tau);
                    let d2 = ell_s - interp(s, &path.ell_r, tau);
                    let own = -(d1 / w2) * (-(d1 * d1) / (4.0 * w2)).exp();
                    let reset = (d2 / w2) * (-(d2 * d2) / (4.0 * w2)).exp();
                    (own, reset)
                };
                acc += weight * mt * (own + reset);
            }
            v += inv_sqrt_pi * acc * dw;
        }
        if !v.is_finite() {
            return Err(Error::Numerical(format!("non-finite Volterra integrand at s = {sj}")));
        }
        out.push(v.max(0.0));
    }
    Ok(out)
}

/// Picard iteration for `M(s)` from the heat-kernel representation, with
/// the horizon halved until successive increments shrink by at least half.
///
/// `u0` is the initial density in original voltages; it is shifted so that
/// the threshold maps to `ell_i`.
pub fn volterra_m(u0: &DensityProfile, ell_i: f64, params: &ModelParams, c: f64, cfg: &VolterraConfig) -> Result<VolterraSolution> {
    check_c(c)?;
    let grid = u0.grid;
    let x: Vec<f64> = (0..=grid.n).map(|i| grid.node(i) - params.v_f + ell_i).collect();
    let slope: Vec<f64> = (0..grid.n).map(|i| (u0.values[i + 1] - u0.values[i]) / (x[i + 1] - x[i])).collect();
    let data = InitialData { x, slope };
    let m0 = data.term(ell_i, 0.0).max(0.0);
    let mut sigma = cfg.sigma;
    for halvings in 0..=cfg.max_halvings {
        let s: Vec<f64> = (0..=cfg.s_nodes).map(|k| sigma * k as f64 / cfg.s_nodes as f64).collect();
        let mut m = vec![m0; s.len()];
        let mut ratios = Vec::new();
        let mut prev_diff: Option<f64> = None;
        let mut accepted = false;
        let mut iterations = 0;
        for it in 0..cfg.max_iterations {
            iterations = it + 1;
            let next = picard(&data, &s, &m, params, c, ell_i, cfg.w_nodes)?;
            let diff = next.iter().zip(&m).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            m = next;
            if let Some(pd) = prev_diff {
                // increments at round-off level carry no contraction information
                if pd > 1e-12 {
                    ratios.push(diff / pd);
                }
            }
            if ratios.last().is_some_and(|r| *r > 0.5) {
                break;
            }
            if diff <= cfg.tolerance {
                accepted = true;
                break;
            }
            prev_diff = Some(diff);
        }
        if accepted {
            return Ok(VolterraSolution { sigma, s, m, iterations, contraction: ratios, halvings });
        }
        sigma *= 0.5;
    }
    Err(Error::Horizon(format!("no contracting horizon after {} halvings", cfg.max_halvings)))
}
