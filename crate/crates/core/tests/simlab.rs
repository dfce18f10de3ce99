use rve_core::simlab::{
    generate_dataset, parse_config, run_experiment, CovariateGen, SimConfig, SimModel, StudySizes, VarianceGen, Variant,
};

fn variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
}

#[test]
fn unit_marginal_variance() {
    for model in [SimModel::Corr, SimModel::Hier] {
        let mut cfg = SimConfig::new(model, 10_000, 31);
        cfg.k = StudySizes::Fixed(10);
        cfg.variance = VarianceGen::Fixed(1.0);
        let ds = generate_dataset(&cfg, 0).unwrap();
        let es = ds.numeric("es").unwrap();
        assert_eq!(es.len(), 100_000);
        let v = variance(&es);
        assert!((v - 1.0).abs() < 0.03, "{model:?}: {v}");
    }
}

#[test]
fn marginal_variance_adds_components() {
    let mut cfg = SimConfig::new(SimModel::Hier, 20_000, 8);
    cfg.k = StudySizes::Fixed(5);
    cfg.tau_sq = 0.3;
    cfg.omega_sq = 0.2;
    cfg.variance = VarianceGen::Fixed(0.5);
    let es = generate_dataset(&cfg, 2).unwrap().numeric("es").unwrap();
    let v = variance(&es);
    assert!((v - 1.0).abs() < 0.03, "{v}");
}

#[test]
fn unit_rho_makes_study_effects_identical() {
    let mut cfg = SimConfig::new(SimModel::Corr, 500, 3);
    cfg.k = StudySizes::Fixed(2);
    cfg.rho = 1.0;
    cfg.tau_sq = 0.1;
    cfg.variance = VarianceGen::Fixed(0.2);
    let es = generate_dataset(&cfg, 0).unwrap().numeric("es").unwrap();
    let (a, b): (Vec<f64>, Vec<f64>) = es.chunks(2).map(|p| (p[0], p[1])).unzip();
    let (ma, mb) = (a.iter().sum::<f64>() / 500.0, b.iter().sum::<f64>() / 500.0);
    let cov: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / 499.0;
    let r = cov / (variance(&a) * variance(&b)).sqrt();
    assert!(r > 0.999_999, "{r}");
}

#[test]
fn moderate_rho_gives_matching_correlation() {
    let mut cfg = SimConfig::new(SimModel::Corr, 50_000, 19);
    cfg.k = StudySizes::Fixed(2);
    cfg.rho = 0.6;
    cfg.variance = VarianceGen::Fixed(1.0);
    let es = generate_dataset(&cfg, 0).unwrap().numeric("es").unwrap();
    let (a, b): (Vec<f64>, Vec<f64>) = es.chunks(2).map(|p| (p[0], p[1])).unzip();
    let cov: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>() / a.len() as f64;
    assert!((cov - 0.6).abs() < 0.02, "{cov}");
}

#[test]
fn dataset_bytes_are_reproducible() {
    let mut cfg = SimConfig::new(SimModel::Hier, 12, 2024);
    cfg.k = StudySizes::PerStudy(vec![1, 2, 3, 4, 5, 1, 2, 3, 4, 5, 2, 2]);
    cfg.covariate = CovariateGen::Skewed(0.2);
    cfg.beta = vec![0.1, 0.5];
    cfg.variance = VarianceGen::Uniform(0.01, 0.1);
    cfg.tau_sq = 0.05;
    cfg.omega_sq = 0.02;
    let a = generate_dataset(&cfg, 7).unwrap().to_csv_string();
    let b = generate_dataset(&cfg, 7).unwrap().to_csv_string();
    assert_eq!(a, b);
    assert_ne!(a, generate_dataset(&cfg, 8).unwrap().to_csv_string());
    assert_eq!(a.lines().next().unwrap(), "study,es,v,x");
    assert_eq!(a.lines().count(), 35);
}

#[test]
fn corr_singletons_recover_tau() {
    let mut cfg = SimConfig::new(SimModel::Corr, 1000, 555);
    cfg.k = StudySizes::Fixed(1);
    cfg.tau_sq = 0.1;
    cfg.variance = VarianceGen::Uniform(0.02, 0.08);
    cfg.replications = 100;
    cfg.variants = vec![Variant::Large];
    let report = run_experiment(&cfg).unwrap();
    let err = (report.mean_tau_sq - 0.1).abs() / 0.1;
    assert!(err < 0.05, "mean tau^2 {}", report.mean_tau_sq);
    assert!(report.mean_omega_sq.is_none());
}

#[test]
fn report_is_independent_of_thread_count() {
    let cfg = parse_config(
        "model = corr\nm = 15\nk = 2,3,4,2,3,4,2,3,4,2,3,4,2,3,4\nbeta = 0, 0.3\ncovariate = normal\n\
         tau_sq = 0.04\nrho = 0.5\nv = 0.02:0.08\nreplications = 64\nseed = 91\n",
    )
    .unwrap();
    let parallel = run_experiment(&cfg).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let serial = pool.install(|| run_experiment(&cfg).unwrap());
    assert_eq!(parallel.to_csv(), serial.to_csv());
    assert_eq!(parallel.coefficients, serial.coefficients);
    for c in &parallel.coefficients {
        assert!((0.0..=1.0).contains(&c.coverage));
    }
}

#[test]
fn large_variant_uses_m_minus_p_df() {
    let mut cfg = SimConfig::new(SimModel::Hier, 9, 1);
    cfg.replications = 10;
    cfg.covariate = CovariateGen::Balanced;
    cfg.beta = vec![0.0, 0.2];
    cfg.tau_sq = 0.02;
    let report = run_experiment(&cfg).unwrap();
    let large = report.get(Variant::Large, "x").unwrap();
    assert_eq!(large.mean_df, 7.0);
    let small = report.get(Variant::Small, "x").unwrap();
    assert!(small.mean_df < 7.0);
}

#[test]
fn invalid_configs_are_rejected() {
    for text in [
        "model = corr\nm = 10\n",
        "model = corr\nseed = 1\n",
        "model = corr\nm = 10\nseed = 1\nreplications = 0\n",
        "model = corr\nm = 10\nseed = 1\nrho = 1.5\n",
        "model = corr\nm = 10\nseed = 1\nv = -1\n",
        "model = corr\nm = 10\nseed = 1\nbogus = 3\n",
        "model = corr\nm = 3\nseed = 1\nk = 1,2\n",
    ] {
        assert!(parse_config(text).is_err(), "{text}");
    }
}
