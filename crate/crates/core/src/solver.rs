//! Time stepping of the dilated equation
//! `p_τ + ∂_v[((-v + b_c)Ñ + b) p] = (a_c Ñ + a1) p_vv + (a_c Ñ + a1) g δ_{V_R}`
//! and of its linear limit at `Ñ = 0`.
//!
//! Each step freezes `Ñ` at the slope of the incoming profile and then treats
//! the resulting linear operator implicitly. The reset source reinjects the
//! discrete outflux through the threshold face into the reset node, which
//! keeps the trapezoidal mass unchanged up to the leak through `v_min`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{boundary_slope, DensityProfile, Grid};
use crate::model::{tilde_n_from_slope, DilationParams, ModelParams};
use crate::tridiag;

/// Undershoot tolerated (and clamped) after a step.
pub const CLAMP_FLOOR: f64 = -1e-12;

/// Face-flux discretization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FluxScheme {
    /// Exponentially fitted drift-diffusion flux, fully implicit in `p`.
    ExponentialFitting,
    /// Explicit upwind drift followed by implicit diffusion; subject to a CFL bound.
    Upwind,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepperConfig {
    pub dtau: f64,
    pub scheme: FluxScheme,
    pub snapshot_stride: usize,
    pub blowup_epsilon: f64,
    pub horizon: f64,
}

impl StepperConfig {
    pub fn new(dtau: f64, horizon: f64) -> Self {
        StepperConfig {
            dtau,
            scheme: FluxScheme::ExponentialFitting,
            snapshot_stride: 100,
            blowup_epsilon: 1e-8,
            horizon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dtau > 0.0) || !self.dtau.is_finite() {
            return Err(Error::Configuration(format!("stepper.dtau = {} must be positive", self.dtau)));
        }
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return Err(Error::Configuration(format!("stepper.horizon = {} must be positive", self.horizon)));
        }
        if !(self.blowup_epsilon > 0.0 && self.blowup_epsilon <= 1e-4) {
            return Err(Error::Configuration(format!(
                "stepper.blowup_epsilon = {} outside (0, 1e-4]",
                self.blowup_epsilon
            )));
        }
        if self.snapshot_stride == 0 {
            return Err(Error::Configuration("stepper.snapshot_stride must be at least 1".into()));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        ((self.horizon / self.dtau).round() as usize).max(1)
    }
}

/// What one step did besides updating the profile.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepReport {
    pub tilde_n: f64,
    pub slope: f64,
    /// Most negative value seen before clamping.
    pub min_value: f64,
    pub clamped_mass: f64,
    /// Mass lost through the left boundary.
    pub leaked_mass: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub index: usize,
    pub tau: f64,
    pub profile: DensityProfile,
}

/// Record of a run in the dilated time.
#[derive(Debug, Clone, PartialEq)]
pub struct TauTrajectory {
    pub params: ModelParams,
    pub dil: DilationParams,
    pub grid: Grid,
    pub config: StepperConfig,
    /// `true` for runs of the limit equation.
    pub limit: bool,
    pub tau: Vec<f64>,
    pub tilde_n: Vec<f64>,
    /// Boundary flux `a1 g`.
    pub m: Vec<f64>,
    pub slope: Vec<f64>,
    pub mass: Vec<f64>,
    pub snapshots: Vec<Snapshot>,
    pub clamped_mass: f64,
    pub min_value: f64,
    pub leaked_mass: f64,
}

impl TauTrajectory {
    pub fn len(&self) -> usize {
        self.tau.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tau.is_empty()
    }

    pub fn snapshot_index(&self, index: usize) -> Option<&Snapshot> {
        self.snapshots
            .binary_search_by_key(&index, |s| s.index)
            .ok()
            .map(|k| &self.snapshots[k])
    }

    pub fn final_profile(&self) -> &DensityProfile {
        &self.snapshots.last().expect("trajectory has snapshots").profile
    }

    /// Linear interpolation between the snapshots bracketing `tau`, plus the
    /// distance from `tau` to the nearest snapshot.
    pub fn profile_at(&self, tau: f64) -> Result<(DensityProfile, f64)> {
        let snaps = &self.snapshots;
        let first = snaps.first().ok_or_else(|| Error::Resolution("no snapshots".into()))?;
        let last = snaps.last().unwrap();
        let tol = 1e-9 * self.config.dtau;
        if tau < first.tau - tol || tau > last.tau + tol {
            return Err(Error::Resolution(format!(
                "τ = {tau} outside the stored snapshots [{}, {}]",
                first.tau, last.tau
            )));
        }
        let k = snaps.partition_point(|s| s.tau <= tau);
        if k == 0 {
            return Ok((first.profile.clone(), (first.tau - tau).abs()));
        }
        let a = &snaps[k - 1];
        if k == snaps.len() || (a.tau - tau).abs() <= tol {
            return Ok((a.profile.clone(), (a.tau - tau).abs()));
        }
        let b = &snaps[k];
        let w = (tau - a.tau) / (b.tau - a.tau);
        let values = a
            .profile
            .values
            .iter()
            .zip(&b.profile.values)
            .map(|(x, y)| (1.0 - w) * x + w * y)
            .collect();
        let dist = (tau - a.tau).min(b.tau - tau);
        Ok((DensityProfile { grid: self.grid, values }, dist))
    }

    /// Linear interpolation of the `Ñ` series.
    pub fn tilde_n_at(&self, tau: f64) -> f64 {
        interp(&self.tau, &self.tilde_n, tau)
    }

    /// CSV with header `tau,tilde_n,M,mass`.
    pub fn series_csv(&self) -> String {
        let mut out = String::from("tau,tilde_n,M,mass\n");
        for k in 0..self.tau.len() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                crate::fmt_f64(self.tau[k]),
                crate::fmt_f64(self.tilde_n[k]),
                crate::fmt_f64(self.m[k]),
                crate::fmt_f64(self.mass[k])
            ));
        }
        out
    }
}

pub fn interp(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    let k = xs.partition_point(|&t| t <= x);
    if k == 0 {
        return ys[0];
    }
    if k == xs.len() {
        return ys[xs.len() - 1];
    }
    let w = (x - xs[k - 1]) / (xs[k] - xs[k - 1]);
    (1.0 - w) * ys[k - 1] + w * ys[k]
}

/// `x / (e^x - 1)`.
fn bernoulli(x: f64) -> f64 {
    if x.abs() < 1e-10 {
        1.0 - 0.5 * x
    } else {
        x / x.exp_m1()
    }
}

/// Reusable stepping workspace for one grid.
#[derive(Debug, Clone)]
pub struct Stepper {
    pub params: ModelParams,
    pub dil: DilationParams,
    pub grid: Grid,
    pub scheme: FluxScheme,
    /// Freeze `Ñ = 0` (limit equation).
    pub limit: bool,
    lower: Vec<f64>,
    diag: Vec<f64>,
    upper: Vec<f64>,
    rhs: Vec<f64>,
    z: Vec<f64>,
    work: Vec<f64>,
    alpha: Vec<f64>,
    beta: Vec<f64>,
}

impl Stepper {
    pub fn new(params: &ModelParams, dil: &DilationParams, grid: &Grid, scheme: FluxScheme, limit: bool) -> Self {
        let m = grid.n - 1;
        Stepper {
            params: *params,
            dil: *dil,
            grid: *grid,
            scheme,
            limit,
            lower: vec![0.0; m],
            diag: vec![0.0; m],
            upper: vec![0.0; m],
            rhs: vec![0.0; m],
            z: vec![0.0; m],
            work: vec![0.0; m],
            alpha: vec![0.0; grid.n],
            beta: vec![0.0; grid.n],
        }
    }

    /// Largest drift speed over the grid and the admissible range of `Ñ`.
    pub fn max_drift_speed(&self) -> f64 {
        let tns: &[f64] = if self.limit { &[0.0] } else { &[0.0, 1.0 / self.dil.c] };
        let mut s: f64 = 0.0;
        for &tn in tns {
            for v in [self.grid.v_min, self.grid.v_f] {
                s = s.max(self.dil.drift(&self.params, tn, v).abs());
            }
        }
        s
    }

    /// Rejects steps violating `dtau <= h / (2 max|u|)` for the upwind variant.
    pub fn check_cfl(&self, dtau: f64) -> Result<()> {
        if self.scheme == FluxScheme::Upwind {
            let u = self.max_drift_speed();
            if u > 0.0 && dtau > self.grid.h / (2.0 * u) {
                return Err(Error::Configuration(format!(
                    "stepper.dtau = {dtau} exceeds the upwind bound h/(2 max|u|) = {}",
                    self.grid.h / (2.0 * u)
                )));
            }
        }
        Ok(())
    }

    /// `Ñ` and `g` for the given profile.
    pub fn rate(&self, p: &DensityProfile) -> Result<(f64, f64)> {
        let g = boundary_slope(p)?;
        let tn = if self.limit { 0.0 } else { tilde_n_from_slope(g, self.dil.c, &self.params)? };
        Ok((tn, g))
    }

    /// Advances `p` by one step of size `dtau`.
    pub fn step(&mut self, p: &mut DensityProfile, dtau: f64) -> Result<StepReport> {
        if !p.grid.same_as(&self.grid) {
            return Err(Error::Configuration("profile grid differs from stepper grid".into()));
        }
        let (tn, g) = self.rate(p)?;
        let grid = self.grid;
        let n = grid.n;
        let h = grid.h;
        let r = dtau / h;
        let a = self.dil.diffusivity(&self.params, tn);
        let ir = grid.i_reset;
        let mut leaked = 0.0;

        // face coefficients: F_{i+1/2} = alpha_i p_i - beta_i p_{i+1}
        match self.scheme {
            FluxScheme::ExponentialFitting => {
                for i in 0..n {
                    let vf = grid.node(i) + 0.5 * h;
                    let u = self.dil.drift(&self.params, tn, vf);
                    let pe = u * h / a;
                    self.alpha[i] = a / h * bernoulli(-pe);
                    self.beta[i] = a / h * bernoulli(pe);
                }
                for j in 0..n - 1 {
                    self.rhs[j] = p.values[j + 1];
                }
            }
            FluxScheme::Upwind => {
                // explicit advective stage
                let mut flux = vec![0.0; n];
                for (i, f) in flux.iter_mut().enumerate() {
                    let vf = grid.node(i) + 0.5 * h;
                    let u = self.dil.drift(&self.params, tn, vf);
                    let left = p.values[i];
                    let right = p.values[i + 1];
                    *f = u.max(0.0) * left + u.min(0.0) * right;
                }
                flux[0] = flux[0].min(0.0);
                for j in 0..n - 1 {
                    let i = j + 1;
                    self.rhs[j] = p.values[i] - r * (flux[i] - flux[i - 1]);
                }
                self.rhs[ir - 1] += r * flux[n - 1].max(0.0);
                leaked -= dtau * flux[0];
                for i in 0..n {
                    self.alpha[i] = a / h;
                    self.beta[i] = a / h;
                }
            }
        }

        for j in 0..n - 1 {
            let i = j + 1;
            self.diag[j] = 1.0 + r * (self.alpha[i] + self.beta[i - 1]);
            self.lower[j] = -r * self.alpha[i - 1];
            self.upper[j] = -r * self.beta[i];
        }
        let reinject = -r * self.alpha[n - 1];
        let last = n - 2;
        let row = ir - 1;
        let ok = if row == last {
            self.diag[row] += reinject;
            tridiag::solve_in_place(&self.lower, &self.diag, &self.upper, &mut self.rhs, &mut self.work)
        } else {
            // Sherman–Morrison for the single off-band entry (row, last)
            let ok1 = tridiag::solve_in_place(&self.lower, &self.diag, &self.upper, &mut self.rhs, &mut self.work);
            self.z.iter_mut().for_each(|x| *x = 0.0);
            self.z[row] = reinject;
            let ok2 = tridiag::solve_in_place(&self.lower, &self.diag, &self.upper, &mut self.z, &mut self.work);
            let denom = 1.0 + self.z[last];
            if ok1 && ok2 && denom != 0.0 {
                let k = self.rhs[last] / denom;
                for j in 0..n - 1 {
                    self.rhs[j] -= k * self.z[j];
                }
                true
            } else {
                false
            }
        };
        if !ok {
            return Err(Error::Numerical("tridiagonal solve failed".into()));
        }

        let mut min_value: f64 = 0.0;
        let mut clamped = 0.0;
        for j in 0..n - 1 {
            let x = self.rhs[j];
            if x < 0.0 {
                min_value = min_value.min(x);
                if x < CLAMP_FLOOR {
                    return Err(Error::Integrity(format!(
                        "undershoot {x} at v = {}",
                        grid.node(j + 1)
                    )));
                }
                clamped += -x * h;
                p.values[j + 1] = 0.0;
            } else {
                p.values[j + 1] = x;
            }
        }
        p.values[0] = 0.0;
        p.values[n] = 0.0;
        leaked += dtau * self.beta[0] * p.values[1];
        Ok(StepReport { tilde_n: tn, slope: g, min_value, clamped_mass: clamped, leaked_mass: leaked })
    }
}

/// One step of the nonlinear dilated equation.
pub fn step_tau(
    p: &DensityProfile,
    params: &ModelParams,
    dil: &DilationParams,
    dtau: f64,
    scheme: FluxScheme,
) -> Result<DensityProfile> {
    let mut st = Stepper::new(params, dil, &p.grid, scheme, false);
    st.check_cfl(dtau)?;
    let mut q = p.clone();
    st.step(&mut q, dtau)?;
    Ok(q)
}

/// Observer called with `(step index, τ, profile, Ñ)` after recording each
/// state; returning `false` stops the run.
pub type Observer<'a> = dyn FnMut(usize, f64, &DensityProfile, f64) -> Result<bool> + 'a;

fn run(
    p0: &DensityProfile,
    params: &ModelParams,
    dil: &DilationParams,
    cfg: &StepperConfig,
    limit: bool,
    observer: &mut Observer<'_>,
) -> Result<TauTrajectory> {
    cfg.validate()?;
    let grid = p0.grid;
    let mut st = Stepper::new(params, dil, &grid, cfg.scheme, limit);
    st.check_cfl(cfg.dtau)?;
    let steps = cfg.steps();
    let eps = cfg.blowup_epsilon;
    let mut traj = TauTrajectory {
        params: *params,
        dil: *dil,
        grid,
        config: *cfg,
        limit,
        tau: Vec::with_capacity(steps + 1),
        tilde_n: Vec::with_capacity(steps + 1),
        m: Vec::with_capacity(steps + 1),
        slope: Vec::with_capacity(steps + 1),
        mass: Vec::with_capacity(steps + 1),
        snapshots: Vec::new(),
        clamped_mass: 0.0,
        min_value: 0.0,
        leaked_mass: 0.0,
    };
    let mut p = p0.clone();
    p.values[grid.n] = 0.0;
    let mut prev = p.clone();
    let mut prev_blow = false;
    for k in 0..=steps {
        let tau = k as f64 * cfg.dtau;
        let (tn, g) = st.rate(&p)?;
        let blow = tn <= eps;
        traj.tau.push(tau);
        traj.tilde_n.push(tn);
        traj.m.push(params.a1 * g);
        traj.slope.push(g);
        traj.mass.push(p.mass());
        if k > 0 && prev_blow && !blow && (k - 1) % cfg.snapshot_stride != 0 {
            let last_stored = traj.snapshots.last().map(|s| s.index);
            if last_stored != Some(k - 1) {
                traj.snapshots.push(Snapshot { index: k - 1, tau: (k - 1) as f64 * cfg.dtau, profile: prev.clone() });
            }
        }
        if k % cfg.snapshot_stride == 0 || k == steps || (blow && !prev_blow) {
            traj.snapshots.push(Snapshot { index: k, tau, profile: p.clone() });
        }
        prev_blow = blow;
        if !observer(k, tau, &p, tn)? {
            if traj.snapshots.last().map(|s| s.index) != Some(k) {
                traj.snapshots.push(Snapshot { index: k, tau, profile: p.clone() });
            }
            break;
        }
        if k == steps {
            break;
        }
        prev.values.copy_from_slice(&p.values);
        let rep = st.step(&mut p, cfg.dtau)?;
        traj.clamped_mass += rep.clamped_mass;
        traj.min_value = traj.min_value.min(rep.min_value);
        traj.leaked_mass += rep.leaked_mass;
    }
    Ok(traj)
}

/// Runs the dilated equation to the horizon.
pub fn run_tau(
    p0: &DensityProfile,
    params: &ModelParams,
    dil: &DilationParams,
    cfg: &StepperConfig,
) -> Result<TauTrajectory> {
    run(p0, params, dil, cfg, false, &mut |_, _, _, _| Ok(true))
}

pub fn run_tau_observed(
    p0: &DensityProfile,
    params: &ModelParams,
    dil: &DilationParams,
    cfg: &StepperConfig,
    observer: &mut Observer<'_>,
) -> Result<TauTrajectory> {
    run(p0, params, dil, cfg, false, observer)
}

/// Runs the limit equation (drift `b`, diffusivity `a1`).
pub fn run_limit_equation(p0: &DensityProfile, params: &ModelParams, cfg: &StepperConfig) -> Result<TauTrajectory> {
    run(p0, params, &DilationParams::natural(params), cfg, true, &mut |_, _, _, _| Ok(true))
}

pub fn run_limit_observed(
    p0: &DensityProfile,
    params: &ModelParams,
    cfg: &StepperConfig,
    observer: &mut Observer<'_>,
) -> Result<TauTrajectory> {
    run(p0, params, &DilationParams::natural(params), cfg, true, observer)
}

/// Jump of the diffusive flux across the reset minus the outflux at the
/// threshold, from one-sided differences.
pub fn flux_jump_residual(p: &DensityProfile, diffusivity: f64) -> f64 {
    let h = p.grid.h;
    let i = p.grid.i_reset;
    let n = p.grid.n;
    let v = &p.values;
    let right = (v[i + 1] - v[i]) / h;
    let left = (v[i] - v[i - 1]) / h;
    let out = (v[n] - v[n - 1]) / h;
    (-diffusivity * right + diffusivity * left) - (-diffusivity * out)
}
