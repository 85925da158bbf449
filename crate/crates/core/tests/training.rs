use ceapg::apg::{self, ApgConfig};
use ceapg::dynamics::{EnvKind, EnvSpec};
use ceapg::harness;
use ceapg::policy::{self, PolicyArch};
use ceapg::seed;

#[test]
fn apg_improves_cartpole_on_most_seeds() {
    let spec = EnvSpec {
        horizon: 100,
        ..EnvSpec::cartpole()
    };
    let arch = PolicyArch::for_env(EnvKind::Cartpole, spec.u_max);
    let cfg = ApgConfig {
        epochs: 30,
        lr: 1e-3,
        ..ApgConfig::default()
    };
    let mut improved = 0;
    for s in 0..10u64 {
        let theta0 = policy::init_params(&arch, &mut seed::rng(s));
        let eval_seeds: Vec<u64> = (0..8).map(|k| seed::derive(1_000 + s, k)).collect();
        let before = apg::evaluate(&spec, &arch, &theta0, &eval_seeds).unwrap();
        let out = apg::apg_run(&spec, &arch, theta0, &cfg, s).unwrap();
        let after = apg::evaluate(&spec, &arch, &out.theta, &eval_seeds).unwrap();
        if after > before {
            improved += 1;
        }
    }
    assert!(improved >= 7, "only {improved}/10 seeds improved");
}

#[test]
fn rollout_gradient_matches_finite_differences() {
    let spec = EnvSpec {
        horizon: 50,
        ..EnvSpec::acrobot()
    };
    let arch = PolicyArch::for_env(EnvKind::Acrobot, spec.u_max);
    let rep = harness::cmd_gradcheck(&spec, &arch, &[11, 12, 13], 20).unwrap();
    assert!(rep.max_rel < 1e-4, "{:?}", rep.per_seed);
    rep.enforce().unwrap();
}
