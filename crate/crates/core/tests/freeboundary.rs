use nnlif::freeboundary::{cross_check_transform, volterra_m, VolterraConfig};
use nnlif::grid::{build_grid, DensityProfile};
use nnlif::model::{DilationParams, ModelParams};
use nnlif::solver::{StepperConfig, TauTrajectory};

fn params() -> ModelParams {
    ModelParams::with_b0(0.0, 1.0, 0.0, 0.9, 0.5, 1.0).unwrap()
}

/// Trajectory with prescribed constant `Ñ` and slope; profiles are irrelevant here.
fn synthetic(tn: f64, slope: f64, c: f64, steps: usize, dtau: f64) -> TauTrajectory {
    let p = params();
    let grid = build_grid(&p, 64, 1e-3).unwrap();
    let n = steps + 1;
    TauTrajectory {
        params: p,
        dil: DilationParams::new(&p, c).unwrap(),
        grid,
        config: StepperConfig::new(dtau, steps as f64 * dtau),
        limit: false,
        tau: (0..n).map(|k| k as f64 * dtau).collect(),
        tilde_n: vec![tn; n],
        m: vec![p.a1 * slope; n],
        slope: vec![slope; n],
        mass: vec![1.0; n],
        snapshots: vec![],
        clamped_mass: 0.0,
        min_value: 0.0,
        leaked_mass: 0.0,
    }
}

#[test]
fn frozen_rate_gives_unit_beta() {
    let chk = cross_check_transform(&synthetic(0.0, 2.0, 1.0, 200, 0.01)).unwrap();
    assert_eq!(chk.beta_gap, 0.0);
    assert!(chk.states.iter().all(|s| s.gamma == 1.0));
    assert!(chk.bounds_ok);
}

#[test]
fn maximal_rate_matches_closed_form() {
    let c = 2.0;
    let dtau = 1e-3;
    let chk = cross_check_transform(&synthetic(1.0 / c, 0.0, c, 1000, dtau)).unwrap();
    let p = params();
    for (k, st) in chk.states.iter().enumerate() {
        let tau = k as f64 * dtau;
        // β = e^{τ/c}, s = ∫ e^{2τ/c} a0/c dτ, γ = 1 + 2s/a0
        let beta = (tau / c).exp();
        let s = p.a0 / 2.0 * ((2.0 * tau / c).exp() - 1.0);
        assert!((chk.beta_direct[k] - beta).abs() <= 1e-6 * beta);
        assert!((chk.s[k] - s).abs() <= 1e-6 * (1.0 + s));
        assert!((st.gamma - (1.0 + 2.0 * chk.s[k] / p.a0)).abs() <= 1e-9 * st.gamma);
    }
    assert!(chk.beta_gap <= 1e-6);
}

#[test]
fn zero_datum_has_zero_flux() {
    let p = params();
    let grid = build_grid(&p, 128, 1e-6).unwrap();
    let u0 = DensityProfile::zeros(grid);
    let cfg = VolterraConfig { s_nodes: 40, w_nodes: 80, ..Default::default() };
    let sol = volterra_m(&u0, 0.0, &p, 1.0, &cfg).unwrap();
    assert!(sol.m.iter().all(|&m| m == 0.0));
}

#[test]
fn flux_at_zero_is_the_datum_slope() {
    let p = params();
    let grid = build_grid(&p, 512, 1e-9).unwrap();
    // linear near the threshold with slope 0.3
    let vals: Vec<f64> = (0..=grid.n).map(|i| 0.3 * (1.0 - grid.node(i)).min(1.0)).collect();
    let u0 = DensityProfile::new(grid, vals).unwrap();
    let cfg = VolterraConfig { s_nodes: 40, w_nodes: 80, sigma: 0.05, ..Default::default() };
    let sol = volterra_m(&u0, 0.0, &p, 1.0, &cfg).unwrap();
    assert!((sol.m[0] - 0.3).abs() < 1e-12);
}
