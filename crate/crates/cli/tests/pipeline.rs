use std::collections::BTreeMap;
use std::path::Path;

use refine_cli::cache::DiskCache;
use refine_cli::config::RunConfig;
use refine_cli::formats::read_trajectories;
use refine_cli::pipeline::{run_pipeline, Layout, Stage, StageStatus};
use refine_core::advisor::{AdvisorClient, OracleBackend, OracleParams};
use refine_core::refine::identify_episodes;
use refine_core::EnvKind;

fn tiny(dir: &Path) -> RunConfig {
    let mut c = RunConfig::default();
    c.paths.out_dir = dir.to_path_buf();
    c.seeds = vec![0, 1];
    c.net.hidden = 8;
    c.pretrain.iterations = 1;
    c.pretrain.steps_per_iter = 256;
    c.identify.rollout_episodes = 3;
    c.refine.iterations = 2;
    c.refine.steps_per_iter = 256;
    c.refine.log_transitions = true;
    c.eval.episodes = 5;
    c
}

/// Every file under `root` except the cache, stamps, the config echo and
/// the timing-bearing eval output.
fn snapshot(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
            if path.is_dir() {
                if rel != "cache" && rel != "stamps" {
                    stack.push(path);
                }
            } else if rel != "config.json" && !rel.ends_with("eval.json") {
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

/// JSON artifacts echo the config, whose `out_dir` differs between runs.
fn without_echo(name: &str, bytes: &[u8]) -> Vec<u8> {
    if !name.ends_with(".json") {
        return bytes.to_vec();
    }
    let mut v: serde_json::Value = serde_json::from_slice(bytes).unwrap();
    if let Some(obj) = v.as_object_mut() {
        obj.remove("config");
    }
    serde_json::to_vec(&v).unwrap()
}

#[test]
fn two_runs_produce_identical_artifacts() {
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_pipeline(&tiny(d1.path()), &Stage::ALL, false).unwrap();
    run_pipeline(&tiny(d2.path()), &Stage::ALL, false).unwrap();
    let (a, b) = (snapshot(d1.path()), snapshot(d2.path()));
    assert!(a.contains_key("reports/report.csv"));
    assert!(a.contains_key("trajectories/ra-s1.jsonl"));
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    for (k, v) in &a {
        assert!(without_echo(k, v) == without_echo(k, &b[k]), "{k} differs between runs");
    }
}

#[test]
fn rerun_with_changed_config_reruns_only_downstream() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny(dir.path());
    run_pipeline(&c, &Stage::ALL, false).unwrap();
    c.eval.episodes = 6;
    let out = run_pipeline(&c, &Stage::ALL, false).unwrap();
    let ran: Vec<Stage> = out.iter().filter(|o| o.status == StageStatus::Ran).map(|o| o.stage).collect();
    assert_eq!(ran, vec![Stage::Eval, Stage::Report]);
    let forced = run_pipeline(&c, &[Stage::Pretrain], true).unwrap();
    assert_eq!(forced[0].status, StageStatus::Ran);
}

#[test]
fn cached_identification_matches_uncached() {
    let dir = tempfile::tempdir().unwrap();
    let c = tiny(dir.path());
    run_pipeline(&c, &[Stage::Pretrain, Stage::Rollout], false).unwrap();
    let trajs = read_trajectories(&Layout::new(dir.path()).rollout(0), 500).unwrap().trajectories;
    let oracle = || Box::new(OracleBackend::new(EnvKind::Pong, OracleParams::default()));

    let plain = identify_episodes(&mut AdvisorClient::new(oracle()), EnvKind::Pong, &trajs, 50).unwrap();
    let cache_dir = dir.path().join("cache-test");
    let mut cold = AdvisorClient::new(oracle()).with_cache(Box::new(DiskCache::new(&cache_dir)));
    let first = identify_episodes(&mut cold, EnvKind::Pong, &trajs, 50).unwrap();
    let mut warm = AdvisorClient::new(oracle()).with_cache(Box::new(DiskCache::new(&cache_dir)));
    let second = identify_episodes(&mut warm, EnvKind::Pong, &trajs, 50).unwrap();

    assert_eq!(first, plain);
    assert_eq!(second, plain);
    assert!(cold.stats().backend_calls > 0);
    assert_eq!(warm.stats().backend_calls, 0);
    assert_eq!(warm.stats().cache_hits, cold.stats().queries);
}

#[test]
fn eval_stage_leaves_checkpoints_and_cache_alone() {
    let dir = tempfile::tempdir().unwrap();
    let c = tiny(dir.path());
    let upstream = [Stage::Pretrain, Stage::Rollout, Stage::Identify, Stage::Analyze, Stage::Refine];
    run_pipeline(&c, &upstream, false).unwrap();
    let before = snapshot(dir.path());
    let cache_before = std::fs::read_dir(c.cache_dir()).unwrap().count();
    run_pipeline(&c, &[Stage::Eval], false).unwrap();
    let mut after = snapshot(dir.path());
    after.retain(|k, _| !k.starts_with("reports/"));
    assert_eq!(before, after);
    assert_eq!(std::fs::read_dir(c.cache_dir()).unwrap().count(), cache_before);
}
