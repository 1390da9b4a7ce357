use refine_core::advisor::{AdvisorClient, AdvisorPrompt, Backend, BackendError, CaseAnalysis, OracleBackend, OracleParams};
use refine_core::envs::{PongConfig, PongEnv};
use refine_core::eval::{evaluate, mean_std};
use refine_core::policy::{collect, train, Distribution, Head, InitScheme, NetSpec, NoGuidance, PolicyParams, PpoConfig, TrainConfig};
use refine_core::refine::{build_lookup, identify_episodes, refine, table_key, ActionLookupTable, RefineConfig, Variant};
use refine_core::{EnvKind, Environment, Purpose, RngStream, Trajectory};

fn setup(seed: u64) -> (PongEnv, PolicyParams) {
    let env = PongEnv::new(PongConfig::default());
    let spec = NetSpec { obs_dim: env.observation_dim(), hidden: 16, head: Head::for_space(&env.action_space()) };
    (env, PolicyParams::init(spec, InitScheme::Orthogonal, &mut RngStream::derive(seed, Purpose::Init, 0)))
}

fn oracle() -> OracleBackend {
    OracleBackend::new(EnvKind::Pong, OracleParams::default())
}

fn table(params: &PolicyParams, env: &mut PongEnv) -> ActionLookupTable {
    let trajs = collect(params, env, 20, 5).unwrap();
    let report = identify_episodes(&mut AdvisorClient::new(Box::new(oracle())), EnvKind::Pong, &trajs, 50).unwrap();
    let (t, _) = build_lookup(EnvKind::Pong, &report.annotations, &trajs, 0.05).unwrap();
    assert!(!t.is_empty());
    t
}

fn train_cfg() -> TrainConfig {
    TrainConfig { iterations: 3, steps_per_iter: 1024, ppo: PpoConfig::default() }
}

fn cfg(variant: Variant) -> RefineConfig {
    RefineConfig { variant, alpha: 0.5, train: train_cfg(), rebuild_every: None, ..RefineConfig::default() }
}

/// Answers like the oracle for the first `working` calls, then fails.
struct Breaking {
    inner: OracleBackend,
    working: usize,
    calls: usize,
}

impl Backend for Breaking {
    fn name(&self) -> &str {
        "breaking"
    }

    fn complete(&mut self, prompt: &AdvisorPrompt) -> Result<String, BackendError> {
        self.calls += 1;
        if self.calls > self.working {
            return Err(BackendError::Fatal("backend switched off".into()));
        }
        self.inner.complete(prompt)
    }
}

fn run_variant(variant: Variant, backend: Box<dyn Backend>, table: ActionLookupTable, seed: u64) -> (Vec<Trajectory>, Vec<String>) {
    let (mut env, params) = setup(1);
    let mut client = AdvisorClient::new(backend);
    let mut trajs = Vec::new();
    let out = refine(params, &mut env, table, Some(&mut client), CaseAnalysis::empty(0), &cfg(variant), seed, &mut |t| {
        trajs.push(t.clone())
    })
    .unwrap();
    (trajs, out.failures)
}

fn plain(seed: u64) -> (Vec<Trajectory>, PolicyParams) {
    let (mut env, params) = setup(1);
    let mut trajs = Vec::new();
    let out = train(params, &mut env, &mut NoGuidance, &train_cfg(), seed, &mut |t| trajs.push(t.clone())).unwrap();
    (trajs, out.params)
}

#[test]
fn overrides_and_shaping_only_at_matched_states() {
    let (mut env, params) = setup(1);
    let t = table(&params, &mut env);
    for variant in [Variant::A, Variant::R, Variant::RA] {
        let (trajs, failures) = run_variant(variant, Box::new(oracle()), t.clone(), 9);
        assert!(failures.is_empty());
        let (mut overrides, mut shaped) = (0, 0);
        for tr in trajs.iter().flat_map(|t| &t.transitions) {
            let matched = t.lookup(&table_key(EnvKind::Pong, &tr.state));
            if tr.executed_action != tr.policy_action {
                overrides += 1;
                assert!(variant.overrides_actions(), "{variant:?} overrode an action");
                assert_eq!(matched, Some(&tr.executed_action));
            }
            let diff = tr.shaped_reward - tr.env_reward;
            if diff != 0.0 {
                shaped += 1;
                assert!(variant.shapes_rewards(), "{variant:?} shaped a reward");
                assert!(matched.is_some());
            }
            assert!(diff.abs() <= 0.5 + 1e-12);
        }
        assert_eq!(overrides > 0, variant.overrides_actions(), "{variant:?}");
        assert_eq!(shaped > 0, variant.shapes_rewards(), "{variant:?}");
    }
}

#[test]
fn variant_lattice() {
    let (mut env, params) = setup(1);
    let t = table(&params, &mut env);
    let seed = 13;
    let (a, _) = run_variant(Variant::A, Box::new(oracle()), t.clone(), seed);
    assert!(a.iter().flat_map(|t| &t.transitions).all(|tr| tr.shaped_reward == tr.env_reward));

    // Before the first update, R acts exactly like plain PPO.
    let (r, _) = run_variant(Variant::R, Box::new(oracle()), t, seed);
    let (p, _) = plain(seed);
    let first_iter = |trajs: &[Trajectory]| {
        trajs.iter().flat_map(|t| &t.transitions).take(train_cfg().steps_per_iter).map(|tr| tr.executed_action.clone()).collect::<Vec<_>>()
    };
    assert_eq!(first_iter(&r), first_iter(&p));
    assert!(r.iter().flat_map(|t| &t.transitions).all(|tr| tr.executed_action == tr.policy_action));
}

#[test]
fn advisor_failing_from_the_start_is_plain_ppo() {
    let (mut env, params) = setup(1);
    let t = table(&params, &mut env);
    let seed = 17;
    let (trajs, failures) = run_variant(Variant::RA, Box::new(Breaking { inner: oracle(), working: 0, calls: 0 }), t, seed);
    assert_eq!(failures.len(), 1);
    let (p, _) = plain(seed);
    assert_eq!(trajs, p);
}

#[test]
fn advisor_failing_mid_run_reverts_to_ppo() {
    let (mut env, params) = setup(1);
    let t = table(&params, &mut env);
    let seed = 19;
    let (mut e, p) = setup(1);
    let mut client = AdvisorClient::new(Box::new(oracle()));
    refine(p, &mut e, t.clone(), Some(&mut client), CaseAnalysis::empty(0), &cfg(Variant::RA), seed, &mut |_| {}).unwrap();
    let calls = client.stats().backend_calls as usize;
    assert!(calls >= 4, "only {calls} queries");
    let working = calls / 2;
    let (trajs, failures) = run_variant(Variant::RA, Box::new(Breaking { inner: oracle(), working, calls: 0 }), t, seed);
    assert_eq!(failures.len(), 1, "{failures:?}");
    let all: Vec<_> = trajs.iter().flat_map(|t| &t.transitions).collect();
    assert_eq!(all.len(), train_cfg().iterations * train_cfg().steps_per_iter);
    let guided: Vec<usize> = all
        .iter()
        .enumerate()
        .filter(|(_, tr)| tr.executed_action != tr.policy_action || tr.shaped_reward != tr.env_reward)
        .map(|(i, _)| i)
        .collect();
    // At most one guided step per answered query, none after the failure.
    assert!(guided.len() <= working);
    let last = guided.last().copied().unwrap_or(0);
    assert!(last > 0 && all.len() - last > 100, "failure point {last} leaves nothing to test");
    assert!(all[last + 1..].iter().all(|tr| tr.executed_action == tr.policy_action && tr.shaped_reward == tr.env_reward));
}

#[test]
fn distributions_stay_valid_after_updates() {
    let (_, params) = setup(2);
    let mut env = PongEnv::new(PongConfig::default());
    let cfg = TrainConfig { iterations: 4, steps_per_iter: 512, ppo: PpoConfig { learning_rate: 3e-3, ..PpoConfig::default() } };
    let trained = train(params, &mut env, &mut NoGuidance, &cfg, 3, &mut |_| {}).unwrap().params;
    let mut rng = RngStream::derive(2, Purpose::Test, 0);
    for _ in 0..1000 {
        let obs: Vec<f64> = (0..trained.spec.obs_dim).map(|_| rng.uniform_range(-3.0, 3.0)).collect();
        let Distribution::Categorical { probs, .. } = trained.forward(&obs).unwrap().0 else { panic!() };
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(probs.iter().all(|p| (0.0..=1.0).contains(p)));
    }

    let mut hopper = refine_core::envs::HopperLiteEnv::new(Default::default());
    let spec = NetSpec { obs_dim: hopper.observation_dim(), hidden: 8, head: Head::for_space(&hopper.action_space()) };
    let p = PolicyParams::init(spec, InitScheme::Orthogonal, &mut RngStream::derive(4, Purpose::Init, 0));
    let trained = train(p, &mut hopper, &mut NoGuidance, &cfg, 4, &mut |_| {}).unwrap().params;
    for _ in 0..1000 {
        let obs: Vec<f64> = (0..trained.spec.obs_dim).map(|_| rng.uniform_range(-3.0, 3.0)).collect();
        let Distribution::Gaussian { mean, log_std } = trained.forward(&obs).unwrap().0 else { panic!() };
        assert!(mean.iter().all(|m| m.is_finite()));
        assert!(log_std.iter().all(|s| s.exp() > 0.0 && s.is_finite()));
    }
}

#[test]
fn evaluation_is_pure_and_statistics_exact() {
    let (mut env, params) = setup(6);
    let before = params.clone();
    let seeds = [3, 4, 5, 6];
    let result = evaluate(&params, &mut env, 7, &seeds, true).unwrap();
    assert_eq!(params, before);
    assert_eq!(evaluate(&params, &mut env, 7, &seeds, true).unwrap(), result);
    assert_eq!(result.per_seed.len(), seeds.len());

    // Two-pass reference from the raw returns.
    let means: Vec<f64> = result.per_seed.iter().map(|s| {
        assert_eq!(s.returns.len(), 7);
        s.returns.iter().sum::<f64>() / 7.0
    }).collect();
    let m = means.iter().sum::<f64>() / means.len() as f64;
    let sd = (means.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (means.len() - 1) as f64).sqrt();
    assert!((result.pooled_mean - m).abs() <= 1e-12);
    assert!((result.pooled_std - sd).abs() <= 1e-12);
    assert_eq!(mean_std(&means).0, result.pooled_mean);
}
