//! Passage between the dilated time `τ` and the original time `t`.
//!
//! `t(τ) = ∫₀^τ Ñ` is nondecreasing; its generalized inverse picks the right
//! end of each preimage, so the reconstructed solution is càdlàg in `t` and
//! jumps where `Ñ` vanishes on an interval.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{boundary_slope, DensityProfile};
use crate::model::{invert_tilde_n, Rate};
use crate::solver::{run_limit_observed, StepperConfig, TauTrajectory};

#[derive(Debug, Clone, PartialEq)]
pub struct TimeMap {
    pub taus: Vec<f64>,
    pub ts: Vec<f64>,
}

impl TimeMap {
    /// Cumulative trapezoid of `tn` over `taus`.
    pub fn from_series(taus: &[f64], tn: &[f64]) -> Result<Self> {
        if taus.len() != tn.len() || taus.is_empty() {
            return Err(Error::Precondition("τ and Ñ series must be nonempty and of equal length".into()));
        }
        let mut ts = Vec::with_capacity(taus.len());
        ts.push(0.0);
        for k in 1..taus.len() {
            let dt = taus[k] - taus[k - 1];
            // repeated τ values encode jumps of Ñ exactly
            if !(dt >= 0.0) {
                return Err(Error::Precondition("τ samples must be nondecreasing".into()));
            }
            if tn[k] < 0.0 || tn[k - 1] < 0.0 {
                return Err(Error::Precondition("Ñ must be nonnegative".into()));
            }
            ts.push(ts[k - 1] + 0.5 * dt * (tn[k] + tn[k - 1]));
        }
        Ok(TimeMap { taus: taus.to_vec(), ts })
    }

    /// `t(τ)` by linear interpolation.
    pub fn t_at(&self, tau: f64) -> f64 {
        crate::solver::interp(&self.taus, &self.ts, tau)
    }

    pub fn total(&self) -> f64 {
        *self.ts.last().unwrap()
    }
}

pub fn forward_time(traj: &TauTrajectory) -> Result<TimeMap> {
    TimeMap::from_series(&traj.tau, &traj.tilde_n)
}

/// `sup{τ : t(τ) = t}`.
pub fn inverse_time(map: &TimeMap, t: f64) -> Result<f64> {
    let total = map.total();
    if !(t >= 0.0) || t >= total {
        return Err(Error::OutOfLifespan(format!("t = {t} outside [0, {total})")));
    }
    let k = map.ts.partition_point(|&x| x <= t) - 1;
    if map.ts[k] == t {
        return Ok(map.taus[k]);
    }
    let (t0, t1) = (map.ts[k], map.ts[k + 1]);
    let w = (t - t0) / (t1 - t0);
    Ok(map.taus[k] + w * (map.taus[k + 1] - map.taus[k]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum LifespanStatus {
    FiniteConverged,
    GrowingUndetermined,
}

/// `∫₀^horizon Ñ dτ` and whether the integral has visibly converged.
pub fn lifespan(map: &TimeMap) -> (f64, LifespanStatus) {
    let total = map.total();
    let start = map.taus[0];
    let end = *map.taus.last().unwrap();
    let tail = total - map.t_at(start + 0.9 * (end - start));
    let status = if tail <= 1e-8 {
        LifespanStatus::FiniteConverged
    } else {
        LifespanStatus::GrowingUndetermined
    };
    (total, status)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneralizedSample {
    pub t: f64,
    pub tau: f64,
    pub profile: DensityProfile,
    pub rate: Rate,
    /// Distance in τ to the nearest stored snapshot.
    pub snapshot_distance: f64,
    /// Set when no snapshot lies within one stride of `τ(t)`.
    pub resolution_warning: bool,
}

pub fn sample_generalized(traj: &TauTrajectory, map: &TimeMap, t: f64) -> Result<GeneralizedSample> {
    let tau = inverse_time(map, t)?;
    let (profile, dist) = traj.profile_at(tau)?;
    let tn = traj.tilde_n_at(tau).clamp(0.0, 1.0 / traj.dil.c);
    let stride = traj.config.snapshot_stride as f64 * traj.config.dtau;
    Ok(GeneralizedSample {
        t,
        tau,
        profile,
        rate: invert_tilde_n(tn, traj.dil.c)?,
        snapshot_distance: dist,
        resolution_warning: dist > stride,
    })
}

/// Series `t,N,mass` of the generalized solution on the τ samples.
pub fn t_series_csv(traj: &TauTrajectory, map: &TimeMap) -> Result<String> {
    let mut out = String::from("t,N,mass\n");
    for k in 0..traj.len() {
        let n = invert_tilde_n(traj.tilde_n[k].clamp(0.0, 1.0 / traj.dil.c), traj.dil.c)?;
        out.push_str(&format!(
            "{},{},{}\n",
            crate::fmt_f64(map.ts[k]),
            n,
            crate::fmt_f64(traj.mass[k])
        ));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BlowupEvent {
    pub tau1: f64,
    pub tau2: f64,
    pub t_star: f64,
    pub delta_tau: f64,
    pub terminated: bool,
    #[serde(skip)]
    pub i1: usize,
    #[serde(skip)]
    pub i2: usize,
}

/// Maximal runs of `Ñ <= eps`, merging runs less than three steps apart.
pub fn detect_blowups_series(taus: &[f64], tn: &[f64], eps: f64) -> Result<Vec<BlowupEvent>> {
    let map = TimeMap::from_series(taus, tn)?;
    let mut runs: Vec<(usize, usize)> = Vec::new();
    let mut k = 0;
    while k < tn.len() {
        if tn[k] <= eps {
            let start = k;
            while k + 1 < tn.len() && tn[k + 1] <= eps {
                k += 1;
            }
            match runs.last_mut() {
                Some(last) if start - last.1 < 3 => last.1 = k,
                _ => runs.push((start, k)),
            }
        }
        k += 1;
    }
    let last = tn.len() - 1;
    Ok(runs
        .into_iter()
        .map(|(a, b)| BlowupEvent {
            tau1: taus[a],
            tau2: taus[b],
            t_star: map.ts[a],
            delta_tau: taus[b] - taus[a],
            terminated: b != last,
            i1: a,
            i2: b,
        })
        .collect())
}

pub fn detect_blowups(traj: &TauTrajectory, eps: f64) -> Result<Vec<BlowupEvent>> {
    detect_blowups_series(&traj.tau, &traj.tilde_n, eps)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct JumpCheck {
    pub l1_gap: f64,
    /// `None` when the flux stays at or above one for the whole available horizon.
    pub delta_tau_independent: Option<f64>,
}

/// Restarts the limit equation from the profile at `τ₁`, finds the first
/// time its boundary flux drops below one, and compares it with the
/// trajectory profile at `τ₂`.
pub fn verify_jump(traj: &TauTrajectory, event: &BlowupEvent) -> Result<JumpCheck> {
    let s1 = traj
        .snapshot_index(event.i1)
        .ok_or_else(|| Error::Resolution(format!("no snapshot at τ₁ = {}", event.tau1)))?;
    let s2 = traj
        .snapshot_index(event.i2)
        .ok_or_else(|| Error::Resolution(format!("no snapshot at τ₂ = {}", event.tau2)))?;
    let dt = traj.config.dtau;
    let target = event.i2 - event.i1;
    let available = traj.tau.len() - 1 - event.i1;
    let mut cfg: StepperConfig = traj.config;
    cfg.horizon = (available.max(1)) as f64 * dt;
    cfg.snapshot_stride = usize::MAX / 2;
    let a1 = traj.params.a1;
    let mut first_below: Option<usize> = None;
    let mut at_target: Option<DensityProfile> = None;
    run_limit_observed(&s1.profile, &traj.params, &cfg, &mut |k, _tau, p, _tn| {
        if k == target {
            at_target = Some(p.clone());
        }
        if first_below.is_none() && a1 * boundary_slope(p)? < 1.0 {
            first_below = Some(k);
        }
        Ok(!(first_below.is_some() && k >= target))
    })?;
    let w = at_target.ok_or_else(|| Error::Resolution("limit run ended before τ₂".into()))?;
    Ok(JumpCheck {
        l1_gap: w.l1_distance(&s2.profile),
        delta_tau_independent: first_below.map(|k| k as f64 * dt),
    })
}
