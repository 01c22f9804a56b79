//! Truncated voltage grid and discrete densities.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::ModelParams;

pub const MIN_CELLS: usize = 16;

/// Uniform grid on `[v_min, v_f]` with the reset potential on a node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Grid {
    pub v_min: f64,
    pub v_f: f64,
    pub v_r: f64,
    pub n: usize,
    pub h: f64,
    pub i_reset: usize,
}

/// Knobs for [`build_grid_with`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GridSettings {
    pub n: usize,
    pub tail_tolerance: f64,
    /// Overrides the tail-based choice of the left end.
    pub v_min: Option<f64>,
    /// Multiplies the heuristic width used when `b <= 0`.
    pub inhibitory_widen: f64,
}

impl GridSettings {
    pub fn new(n: usize, tail_tolerance: f64) -> Self {
        GridSettings { n, tail_tolerance, v_min: None, inhibitory_widen: 1.0 }
    }
}

impl Grid {
    /// Grid with `m` cells between reset and threshold and `left` cells below the reset.
    pub fn from_cells(v_r: f64, v_f: f64, left: usize, m: usize) -> Result<Self> {
        let n = left + m;
        if n < MIN_CELLS {
            return Err(Error::Configuration(format!("grid.n = {n} below the minimum {MIN_CELLS}")));
        }
        if left == 0 || m < 2 {
            return Err(Error::Configuration(
                "grid needs nodes below the reset and at least two cells above it".into(),
            ));
        }
        if !(v_r < v_f) {
            return Err(Error::Configuration("reset must lie below threshold".into()));
        }
        let h = (v_f - v_r) / m as f64;
        Ok(Grid { v_min: v_r - left as f64 * h, v_f, v_r, n, h, i_reset: left })
    }

    /// Voltage at node `i`; the reset and threshold nodes are exact.
    pub fn node(&self, i: usize) -> f64 {
        if i == self.n {
            self.v_f
        } else {
            self.v_r + (i as f64 - self.i_reset as f64) * self.h
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.n).map(|i| self.node(i)).collect()
    }

    pub fn len(&self) -> usize {
        self.n + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Index of the node nearest to `v`.
    pub fn nearest(&self, v: f64) -> usize {
        let x = ((v - self.v_min) / self.h).round();
        x.clamp(0.0, self.n as f64) as usize
    }

    pub fn same_as(&self, other: &Grid) -> bool {
        self.n == other.n
            && self.i_reset == other.i_reset
            && self.h == other.h
            && self.v_r == other.v_r
            && self.v_f == other.v_f
    }
}

/// Left truncation point suggested by the tail of the reference profile.
pub fn tail_v_min(params: &ModelParams, tail_tolerance: f64, widen: f64) -> f64 {
    let log_tol = (1.0 / tail_tolerance).ln();
    if params.b > 0.0 {
        let k = params.b / params.a1;
        let l = params.gap();
        // left branch amplitude of the normalized steady state
        let amp = (1.0 - (-k * l).exp()) / l;
        params.v_r - (amp.max(1.0).ln() + log_tol) / k
    } else {
        let centre = params.v_r.min(params.b0());
        let spread = 2.0 * params.a0.max(params.a1) * log_tol;
        centre - widen * spread.sqrt().max(params.gap())
    }
}

pub fn build_grid(params: &ModelParams, n: usize, tail_tolerance: f64) -> Result<Grid> {
    build_grid_with(params, &GridSettings::new(n, tail_tolerance))
}

pub fn build_grid_with(params: &ModelParams, s: &GridSettings) -> Result<Grid> {
    if s.n < MIN_CELLS {
        return Err(Error::Precondition(format!("grid.n = {} below the minimum {MIN_CELLS}", s.n)));
    }
    if !(s.tail_tolerance > 0.0 && s.tail_tolerance <= 1e-3) {
        return Err(Error::Precondition(format!(
            "grid.tail_tolerance = {} outside (0, 1e-3]",
            s.tail_tolerance
        )));
    }
    if !(s.inhibitory_widen > 0.0) {
        return Err(Error::Configuration("grid.inhibitory_widen must be positive".into()));
    }
    let target = match s.v_min {
        Some(v) => v,
        None => tail_v_min(params, s.tail_tolerance, s.inhibitory_widen),
    };
    if !target.is_finite() || target >= params.v_r {
        return Err(Error::Configuration(format!(
            "grid.v_min = {target} must lie below the reset {}",
            params.v_r
        )));
    }
    let width = params.v_f - target;
    let m = ((s.n as f64) * params.gap() / width).floor() as usize;
    let m = m.max(2);
    if m >= s.n {
        return Err(Error::Configuration(format!(
            "grid.n = {} too small to place nodes below the reset",
            s.n
        )));
    }
    Grid::from_cells(params.v_r, params.v_f, s.n - m, m)
}

/// Density sampled on grid nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityProfile {
    pub grid: Grid,
    pub values: Vec<f64>,
}

impl DensityProfile {
    pub fn zeros(grid: Grid) -> Self {
        DensityProfile { grid, values: vec![0.0; grid.len()] }
    }

    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Configuration(format!(
                "profile has {} values, grid has {} nodes",
                values.len(),
                grid.len()
            )));
        }
        Ok(DensityProfile { grid, values })
    }

    pub fn mass(&self) -> f64 {
        total_mass(self)
    }

    pub fn scaled(&self, k: f64) -> Self {
        DensityProfile { grid: self.grid, values: self.values.iter().map(|x| x * k).collect() }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    /// Trapezoidal L¹ distance.
    pub fn l1_distance(&self, other: &Self) -> f64 {
        let d: Vec<f64> = self.values.iter().zip(&other.values).map(|(a, b)| (a - b).abs()).collect();
        trapezoid(&d, self.grid.h)
    }

    /// `v,p` CSV with 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("v,p\n");
        for (i, p) in self.values.iter().enumerate() {
            out.push_str(&crate::fmt_f64(self.grid.node(i)));
            out.push(',');
            out.push_str(&crate::fmt_f64(*p));
            out.push('\n');
        }
        out
    }
}

pub fn trapezoid(values: &[f64], h: f64) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let inner: f64 = values[1..values.len() - 1].iter().sum();
    h * (inner + 0.5 * (values[0] + values[values.len() - 1]))
}

pub fn total_mass(p: &DensityProfile) -> f64 {
    trapezoid(&p.values, p.grid.h)
}

/// Second-order one-sided `-p'(v_f)` without any sign handling.
pub fn boundary_slope_raw(p: &DensityProfile) -> f64 {
    let n = p.grid.n;
    let v = &p.values;
    (3.0 * -v[n] + 4.0 * v[n - 1] - v[n - 2]) / (2.0 * p.grid.h)
}

/// `g = -p'(v_f)` by the second-order one-sided stencil. Small negative
/// values are clamped to zero.
pub fn boundary_slope(p: &DensityProfile) -> Result<f64> {
    let g = boundary_slope_raw(p);
    if g < -1e-6 {
        return Err(Error::Integrity(format!(
            "boundary slope {g} is strongly negative; the profile near the threshold is under-resolved (refine grid.n)"
        )));
    }
    Ok(g.max(0.0))
}

pub fn project_function<F: Fn(f64) -> f64>(f: F, grid: &Grid, normalize: bool) -> Result<DensityProfile> {
    let mut values = Vec::with_capacity(grid.len());
    for i in 0..=grid.n {
        let v = grid.node(i);
        let x = f(v);
        if !(x >= 0.0) || !x.is_finite() {
            return Err(Error::Domain(format!("projected function is {x} at v = {v}")));
        }
        values.push(x);
    }
    values[grid.n] = 0.0;
    let mut p = DensityProfile { grid: *grid, values };
    if normalize {
        let m = p.mass();
        if !(m > 0.0) {
            return Err(Error::Domain("cannot normalize a profile with zero mass".into()));
        }
        p = p.scaled(1.0 / m);
    }
    Ok(p)
}

/// Normal density with the given centre and variance.
pub fn gaussian(center: f64, variance: f64) -> impl Fn(f64) -> f64 {
    let norm = 1.0 / (2.0 * std::f64::consts::PI * variance).sqrt();
    move |v| norm * (-(v - center).powi(2) / (2.0 * variance)).exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(b: f64) -> ModelParams {
        ModelParams::with_b0(0.0, 1.0, 0.0, b, 1.0, 1.0).unwrap()
    }

    #[test]
    fn reset_on_node() {
        let g = build_grid(&params(0.5), 1000, 1e-12).unwrap();
        assert_eq!(g.node(g.i_reset), 0.0);
        assert_eq!(g.node(g.n), 1.0);
        assert!(g.v_min <= -(1e12f64).ln() / 0.5);
        let k: f64 = 0.5;
        let pinf_left = (1.0 - (-k).exp()) * (k * g.v_min).exp();
        assert!(pinf_left < 1e-12);
    }

    #[test]
    fn minimum_cells_and_tolerance() {
        assert!(build_grid(&params(0.5), 16, 1e-3).is_ok());
        assert!(build_grid(&params(0.5), 15, 1e-3).is_err());
        assert!(build_grid(&params(0.5), 64, 0.5).is_err());
        assert!(build_grid(&params(-0.5), 64, 1e-6).is_ok());
    }

    #[test]
    fn v_min_override_must_be_left_of_reset() {
        let mut s = GridSettings::new(64, 1e-6);
        s.v_min = Some(0.5);
        assert!(build_grid_with(&params(0.5), &s).is_err());
        s.v_min = Some(-3.0);
        let g = build_grid_with(&params(0.5), &s).unwrap();
        assert!(g.v_min <= -3.0);
    }

    #[test]
    fn mass_of_constant() {
        let g = build_grid(&params(0.5), 256, 1e-6).unwrap();
        let w = g.v_f - g.v_min;
        let p = DensityProfile::new(g, vec![1.0 / w; g.len()]).unwrap();
        assert!((p.mass() - 1.0).abs() < 1e-14);
        assert_eq!(DensityProfile::zeros(g).mass(), 0.0);
    }

    #[test]
    fn slope_exact_for_low_degree() {
        let g = build_grid(&params(0.5), 128, 1e-6).unwrap();
        let lin = project_function(|v| 0.7 * (1.0 - v), &g, false).unwrap();
        assert!((boundary_slope(&lin).unwrap() - 0.7).abs() < 1e-12);
        let quad = project_function(|v| (1.0 - v).powi(2), &g, false).unwrap();
        assert!(boundary_slope(&quad).unwrap().abs() < 1e-12);
    }

    #[test]
    fn projection_rejects_negative() {
        let g = build_grid(&params(0.5), 64, 1e-6).unwrap();
        assert!(project_function(|v| v, &g, false).is_err());
        let z = project_function(|_| 0.0, &g, false).unwrap();
        assert!(z.values.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn gaussian_projection_unit_mass() {
        let p = params(1.5);
        let g = build_grid(&p, 512, 1e-9).unwrap();
        let prof = project_function(gaussian(-1.0, 0.17), &g, true).unwrap();
        assert!((prof.mass() - 1.0).abs() < 1e-14);
        assert_eq!(prof.values[g.n], 0.0);
    }
}
