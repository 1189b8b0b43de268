use hpt_core::sde::{
    batch_multipliers, horizon_multipliers, invariance_grid, reference_invariance_config, simulate_rmspropw,
    DecayVariant, InvarianceTolerance, RmsPropWConfig,
};

#[test]
fn long_run_mean_reaches_stationary_point() {
    // Drift stationary point −g / (λσ) = (−0.2, 0.2).
    let cfg = RmsPropWConfig {
        steps: 4000,
        samples: 4000,
        ..reference_invariance_config(17)
    };
    let stats = simulate_rmspropw(&cfg).unwrap();
    let se = stats.standard_error();
    for (i, target) in [-0.2, 0.2].iter().enumerate() {
        assert!((stats.mean[i] - target).abs() < 4.0 * se[i], "{:?}", stats.mean);
    }
    // Discrete stationary variance η² / (1 − (1 − ηλ)²).
    let a: f64 = 1.0 - 0.02 * 0.5;
    let var = 0.02f64.powi(2) / (1.0 - a * a);
    for v in &stats.variance {
        assert!((v / var - 1.0).abs() < 0.1, "{v} vs {var}");
    }
}

#[test]
fn invariance_grid_behaves_as_expected() {
    let cases = invariance_grid(&reference_invariance_config(2024), &InvarianceTolerance::default()).unwrap();
    for c in &cases {
        eprintln!("{}: mean_z {:?} var_rel {:?}", c.name, c.comparison.mean_z, c.comparison.variance_rel);
        assert!(c.as_expected(), "{}", c.name);
        assert_eq!(c.reference.diverged, 0);
    }
    let scaled = &cases[0].scaled_config;
    assert_eq!((scaled.eta, scaled.lambda, scaled.sigma, scaled.steps), (0.04, 1.0, 5.0, 512));
    assert!(!cases[3].comparison.mean_ok);
}

#[test]
fn rule_examples() {
    let m = batch_multipliers(4.0, DecayVariant::AdamW).unwrap();
    assert_eq!((m.m_eta, m.m_lambda, m.m_eps, m.m_one_minus_beta, m.m_steps), (2.0, 2.0, 0.5, 4.0, 0.25));
    assert_eq!(batch_multipliers(4.0, DecayVariant::AdamLH).unwrap().m_lambda, 4.0);
    let h = horizon_multipliers(16.0).unwrap();
    assert_eq!((h.m_eta, h.m_one_minus_beta), (0.25, 1.0 / 16.0));
    assert!(batch_multipliers(0.0, DecayVariant::AdamW).is_err());
}
