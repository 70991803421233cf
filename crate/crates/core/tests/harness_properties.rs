use asymrls::decoupled::DistortionSpec;
use asymrls::harness::{generate_instance, run_experiment, trial_seed, InstanceConfig};
use asymrls::signal::{BlockSignalModel, ScalarPrior};

fn phi(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

fn benchmark(n: usize) -> InstanceConfig {
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/two_block.json")).unwrap();
    let mut cfg = InstanceConfig::from_json(&text).unwrap();
    cfg.n = n;
    cfg
}

#[test]
fn column_norms_concentrate() {
    let text = r#"{"n": 10000, "rho": 0.05, "matrix": {"model": "iid_gauss", "variance": "var-1/M"}, "sigma2": 0.0,
        "signal": {"blocks": [{"frac": 1.0, "prior": "bpsk"}]}, "penalty": {"blocks": [{"family": "l2_half"}]}}"#;
    let cfg = InstanceConfig::from_json(text).unwrap();
    let inst = generate_instance(&cfg, 5).unwrap();
    let m = cfg.m() as f64;
    let norms: Vec<f64> = inst.a.columns().into_iter().map(|c| c.dot(&c)).collect();
    let mean = norms.iter().sum::<f64>() / norms.len() as f64;
    assert!((mean - 1.0).abs() <= 3.0 * (2.0 / m).sqrt(), "mean {mean}");
    // each column norm is chi-square(M)/M; six standard deviations is far
    // beyond the expected maximum over 10^4 columns
    let worst = norms.iter().map(|v| (v - 1.0).abs()).fold(0.0, f64::max);
    assert!(worst <= 6.0 * (2.0 / m).sqrt(), "worst {worst}");
}

#[test]
fn sampled_signals_follow_their_laws() {
    let n = 40_000;
    let model = BlockSignalModel::from_fractions(
        n,
        &[(0.5, ScalarPrior::BernoulliGauss { mu: 0.2, variance: 2.0 }), (0.5, ScalarPrior::Bpsk)],
    )
    .unwrap();
    let x = model.sample_signal(9);
    let (sparse, bpsk): (Vec<_>, Vec<_>) = x.iter().enumerate().partition(|(i, _)| model.block_of(*i) == 0);
    let sparse: Vec<f64> = sparse.into_iter().map(|(_, &v)| v).collect();
    let bpsk: Vec<f64> = bpsk.into_iter().map(|(_, &v)| v).collect();

    // binomial counts within four standard deviations
    let k = sparse.len() as f64;
    let nonzero: Vec<f64> = sparse.iter().copied().filter(|&v| v != 0.0).collect();
    let sd = (k * 0.2 * 0.8).sqrt();
    assert!((nonzero.len() as f64 - 0.2 * k).abs() <= 4.0 * sd);
    let plus = bpsk.iter().filter(|&&v| v == 1.0).count() as f64;
    assert!(bpsk.iter().all(|&v| v.abs() == 1.0));
    assert!((plus - 0.5 * bpsk.len() as f64).abs() <= 4.0 * (bpsk.len() as f64 * 0.25).sqrt());

    // KS of the nonzero part against N(0, 2); 1.63 / sqrt(n) is the 1% level
    let mut s = nonzero.clone();
    s.sort_by(f64::total_cmp);
    let m = s.len() as f64;
    let ks = s
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let f = phi(v / 2f64.sqrt());
            (f - i as f64 / m).abs().max(((i + 1) as f64 / m - f).abs())
        })
        .fold(0.0, f64::max);
    assert!(ks <= 1.63 / m.sqrt(), "ks {ks}");
}

#[test]
fn experiments_are_reproducible() {
    let cfg = benchmark(128);
    let a = run_experiment(&cfg, 3, false).unwrap();
    let b = run_experiment(&cfg, 3, false).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    // later trials do not disturb earlier ones
    let c = run_experiment(&cfg, 5, false).unwrap();
    assert_eq!(a.records[..], c.records[..3]);
    assert_eq!(a.records[1].seed, trial_seed(cfg.seed, 1));
}

#[test]
fn huge_penalty_leaves_the_prior_energy() {
    let mut cfg = benchmark(2000);
    for b in &mut cfg.penalty.blocks {
        b.weight = 1e9;
    }
    let trials = 4;
    let s = run_experiment(&cfg, trials, false).unwrap();
    let (mu1, mu2) = (0.1, 0.4);
    let energy = 0.5 * (mu1 + mu2);
    // Var(x^2) per coordinate for Bernoulli-Gauss is 3 mu - mu^2
    let var = 0.5 * ((3.0 * mu1 - mu1 * mu1) + (3.0 * mu2 - mu2 * mu2));
    let se = (var / (cfg.n * trials) as f64).sqrt();
    let agg = &s.aggregate[0];
    assert!((agg.mean - energy).abs() <= 4.0 * se, "mean {} vs {energy}", agg.mean);
    assert!((agg.prediction.unwrap() - energy).abs() <= 1e-9);
}

// Mean over trials of |D_trial - D_predicted|. Pooling the trials first
// would let the Monte Carlo error of the mean dominate the comparison.
fn mean_gap(n: usize, trials: usize) -> f64 {
    let cfg = benchmark(n);
    let s = run_experiment(&cfg, trials, false).unwrap();
    let pred = s.aggregate[0].prediction.unwrap();
    assert!(s.records.iter().all(|r| r.error.is_none()));
    s.records.iter().map(|r| (r.distortions[0] - pred).abs()).sum::<f64>() / trials as f64
}

#[test]
fn replica_gap_shrinks_with_size() {
    let small = mean_gap(500, 20);
    let large = mean_gap(4000, 20);
    assert!(large <= small, "gap {large} at N=4000 vs {small} at N=500");
}

#[test]
fn distortion_specs_are_evaluated_per_coordinate() {
    let mut cfg = benchmark(256);
    cfg.distortions = vec![DistortionSpec::SquaredError, DistortionSpec::SupportError { threshold: 1e-9 }];
    let s = run_experiment(&cfg, 2, false).unwrap();
    for r in &s.records {
        assert_eq!(r.distortions.len(), 2);
        assert!(r.distortions.iter().all(|&d| d >= 0.0));
        assert!(r.distortions[1] <= 1.0);
    }
}
