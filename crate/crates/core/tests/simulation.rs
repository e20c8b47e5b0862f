use causal_qcd::centralization::{empirical_moment_check, post_change_moments};
use causal_qcd::detector::{run_episode, Detector, Environment, WindowEstimate};
use causal_qcd::divergence::{estimated_kl, kl_full};
use causal_qcd::experiment::{estimate_edd, generate_scenario, preset, McSettings};
use causal_qcd::rng::{data_rng, policy_rng, Purpose};
use causal_qcd::{
    compute_plan, CausalModel, ChangeSpec, DetectorConfig, Intervention, Policy, Variant,
};

fn case_one() -> CausalModel {
    CausalModel::from_rows(
        &[
            vec![0.0, 0.0, 0.0, 0.0],
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 0.0],
        ],
        &[1.0; 4],
        &[1.0; 4],
    )
    .unwrap()
}

#[test]
fn case_one_edge_change_sampling() {
    let base = case_one();
    let plan = compute_plan(&base, 0.1, 1.0).unwrap();
    let ch = ChangeSpec::edge(2, 1, 0.2);
    let mut rng = data_rng(11, Purpose::Trace, 0);
    let check =
        empirical_moment_check(&base, &ch, plan.intervention(1), 100_000, &mut rng).unwrap();
    assert!(check.max_z() < 4.0, "{check:?}");
}

#[test]
fn window_estimate_converges() {
    let base = case_one();
    let ch = ChangeSpec::edge(3, 2, 0.5);
    let iv = Intervention::on(2, 3.0);
    let target = post_change_moments(&base, &ch, iv).unwrap();
    let plan = causal_qcd::InterventionPlan::from_values(vec![0.0, 3.0, 0.0, 0.0]);
    let env = Environment::new(&base, &[ch], &plan).unwrap();
    let n = 10_000;
    let config = DetectorConfig::new(n, 1, 1e9, Variant::Multi, Policy::Adaptive);
    let mut det = Detector::new(4, config).unwrap();
    let mut rng = data_rng(3, Purpose::Trace, 0);
    let mut z = vec![0.0; 4];
    let mut y = Vec::new();
    for _ in 0..n {
        env.observe(2, &mut rng, &mut z, &mut y);
        det.step(2, &y).unwrap();
    }
    let WindowEstimate::Joint { moments, usable } = det.window_estimates(2) else {
        panic!("joint estimate expected");
    };
    assert!(usable);
    let nf = n as f64;
    for a in 0..3 {
        let se = (target.cov[(a, a)] / nf).sqrt();
        assert!((moments.mean[a] - target.mean[a]).abs() < 4.0 * se);
        for b in 0..3 {
            let c = &target.cov;
            let se = ((c[(a, a)] * c[(b, b)] + c[(a, b)] * c[(a, b)]) / nf).sqrt();
            assert!((moments.cov[(a, b)] - c[(a, b)]).abs() < 4.0 * se);
        }
    }
    let est = estimated_kl(&moments).unwrap();
    let exact = kl_full(&base, &ch, iv).unwrap();
    assert!((est - exact).abs() < 0.05, "{est} vs {exact}");
}

#[test]
fn adaptive_arms_settle_on_origin() {
    let spec = preset("sim-p4").unwrap();
    let sc = generate_scenario(&spec).unwrap();
    let origin = match sc.changes[0] {
        ChangeSpec::EdgeWeight { origin, .. } => origin,
        _ => unreachable!(),
    };
    let env = Environment::new(&sc.model, &sc.changes, &sc.plan).unwrap();
    for variant in [Variant::Max, Variant::Multi] {
        let config = DetectorConfig::new(1000, 100, f64::INFINITY, variant, Policy::Adaptive);
        let horizon = 6000;
        let mut drng = data_rng(1, Purpose::Trace, 0);
        let mut prng = policy_rng(1, Purpose::Trace, 0, 0);
        let run = run_episode(&env, &config, horizon, &mut drng, &mut prng).unwrap();
        let late: Vec<_> = run.trace[horizon / 2..]
            .iter()
            .filter(|s| !s.explored)
            .collect();
        let hits = late.iter().filter(|s| s.arm == origin).count();
        let frac = hits as f64 / late.len() as f64;
        assert!(frac >= 0.9, "{variant:?}: {frac}");
    }
}

#[test]
fn larger_changes_are_detected_sooner() {
    let spec = preset("sim-p4").unwrap();
    let sc = generate_scenario(&spec).unwrap();
    let config = sc.detector_config(4.0, Variant::Max, Policy::Adaptive);
    let mc = McSettings {
        n_runs: 200,
        seed: 2,
        workers: 0,
    };
    let small: Vec<ChangeSpec> = sc.changes.iter().map(|c| c.with_delta(0.1)).collect();
    let large: Vec<ChangeSpec> = sc.changes.iter().map(|c| c.with_delta(2.0)).collect();
    let a = estimate_edd(&sc.model, &small, &sc.plan, &config, 5000, mc).unwrap();
    let b = estimate_edd(&sc.model, &large, &sc.plan, &config, 5000, mc).unwrap();
    assert!(b.mean < a.mean, "{} vs {}", b.mean, a.mean);
}
