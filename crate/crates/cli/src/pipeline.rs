//! Stage runner: artifacts, dependency checks and content-hash skipping.
//!
//! Everything lives under `out_dir`:
//!
//! ```text
//! config.json                         config echo of the latest invocation
//! checkpoints/pretrained-s{seed}.json
//! checkpoints/{method}-s{seed}.json
//! trajectories/rollout-s{seed}.jsonl
//! trajectories/{method}-s{seed}.jsonl  only with refine.log_transitions
//! annotations/critical-s{seed}.jsonl
//! annotations/analysis-s{seed}.json
//! logs/{pretrain|method}-s{seed}.jsonl
//! logs/identify-s{seed}.json, logs/refine-s{seed}.json
//! reports/eval.json, report.csv, learning_curve.{csv,svg}, comparison.{json,txt}
//! stamps/{stage}.json
//! cache/<first2>/<hash>.json
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Duration, Instant};

use refine_core::advisor::{AdvisorClient, AdvisorError, CaseAnalysis, OracleBackend, QueryStats};
use refine_core::envs::make_env;
use refine_core::eval::{evaluate, EvalError, EvalResult};
use refine_core::policy::{
    collect, pretrain, train, Head, IterationLog, NetSpec, NoGuidance, PolicyError, PolicyParams, TrainError,
};
use refine_core::refine::{analyze_episodes, build_lookup, identify_episodes, merge_analyses, refine, RefineError};
use refine_core::{Environment, Purpose, RngStream, Trajectory};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cache::DiskCache;
use crate::config::{BackendKind, ConfigError, Method, RunConfig};
use crate::formats::{
    load_checkpoint, read_annotations, read_json, read_run_log, read_trajectories, save_checkpoint, write_annotations,
    write_json, write_run_log, write_trajectories, AnnotationSource, FormatError, TrajectoryWriter,
};
use crate::http::HttpBackend;
use crate::report::{emit_report, group_logs, LearningCurves};

/// Offset added to a run seed for the identification rollouts.
pub const ROLLOUT_SEED_OFFSET: u64 = 1000;
/// Offset added to a run seed for fine-tuning; every method shares it.
pub const REFINE_SEED_OFFSET: u64 = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Rollout,
    Identify,
    Analyze,
    Refine,
    Eval,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 7] =
        [Stage::Pretrain, Stage::Rollout, Stage::Identify, Stage::Analyze, Stage::Refine, Stage::Eval, Stage::Report];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Rollout => "rollout",
            Stage::Identify => "identify",
            Stage::Analyze => "analyze",
            Stage::Refine => "refine",
            Stage::Eval => "eval",
            Stage::Report => "report",
        }
    }

    /// Parses a comma-separated list; `all` selects every stage. The result
    /// is deduplicated and in canonical order.
    pub fn parse_list(list: &str) -> Result<Vec<Stage>, String> {
        let mut out = Vec::new();
        for part in list.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            if part == "all" {
                out.extend(Stage::ALL);
            } else {
                out.push(part.parse()?);
            }
        }
        if out.is_empty() {
            return Err("no stages given".into());
        }
        out.sort();
        out.dedup();
        Ok(out)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| format!("unknown stage `{s}` (expected one of pretrain, rollout, identify, analyze, refine, eval, report)"))
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{stage}: missing {path} (produced by the `{producer}` stage)")]
    MissingInput { stage: Stage, path: PathBuf, producer: Stage },
    #[error("advisor: {0}")]
    Advisor(#[from] AdvisorError),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("{0}")]
    Other(String),
}

impl PipelineError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::MissingInput { .. } => 3,
            PipelineError::Advisor(_) => 4,
            PipelineError::Numerical(_) => 5,
            PipelineError::Format(_) | PipelineError::Other(_) => 1,
        }
    }
}

impl From<TrainError> for PipelineError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Policy(p @ PolicyError::NonFiniteGradient { .. }) => PipelineError::Numerical(p.to_string()),
            TrainError::Config(field) => ConfigError::Invalid(format!("training field `{field}` is out of range")).into(),
            other => PipelineError::Other(other.to_string()),
        }
    }
}

impl From<EvalError> for PipelineError {
    fn from(e: EvalError) -> Self {
        PipelineError::Other(format!("evaluation: {e}"))
    }
}

impl From<RefineError> for PipelineError {
    fn from(e: RefineError) -> Self {
        match e {
            RefineError::Advisor(a) => a.into(),
            other => PipelineError::Other(other.to_string()),
        }
    }
}

/// File names under `out_dir`.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

fn slug(method: Method) -> String {
    method.label().to_ascii_lowercase()
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config_echo(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn pretrained(&self, seed: u64) -> PathBuf {
        self.root.join(format!("checkpoints/pretrained-s{seed}.json"))
    }

    pub fn checkpoint(&self, method: Method, seed: u64) -> PathBuf {
        self.root.join(format!("checkpoints/{}-s{seed}.json", slug(method)))
    }

    pub fn rollout(&self, seed: u64) -> PathBuf {
        self.root.join(format!("trajectories/rollout-s{seed}.jsonl"))
    }

    pub fn transitions(&self, method: Method, seed: u64) -> PathBuf {
        self.root.join(format!("trajectories/{}-s{seed}.jsonl", slug(method)))
    }

    pub fn annotations(&self, seed: u64) -> PathBuf {
        self.root.join(format!("annotations/critical-s{seed}.jsonl"))
    }

    pub fn analysis(&self, seed: u64) -> PathBuf {
        self.root.join(format!("annotations/analysis-s{seed}.json"))
    }

    pub fn pretrain_log(&self, seed: u64) -> PathBuf {
        self.root.join(format!("logs/pretrain-s{seed}.jsonl"))
    }

    pub fn run_log(&self, method: Method, seed: u64) -> PathBuf {
        self.root.join(format!("logs/{}-s{seed}.jsonl", slug(method)))
    }

    pub fn identify_report(&self, seed: u64) -> PathBuf {
        self.root.join(format!("logs/identify-s{seed}.json"))
    }

    pub fn refine_summary(&self, seed: u64) -> PathBuf {
        self.root.join(format!("logs/refine-s{seed}.json"))
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn eval(&self) -> PathBuf {
        self.reports().join("eval.json")
    }

    pub fn stamp(&self, stage: Stage) -> PathBuf {
        self.root.join(format!("stamps/{stage}.json"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisFile {
    pub config: Value,
    pub analyses: Vec<CaseAnalysis>,
    pub merged: CaseAnalysis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentifySummary {
    pub config: Value,
    pub trajectories: usize,
    pub annotations: usize,
    pub critical: usize,
    pub failed_windows: usize,
    pub warnings: Vec<String>,
    pub stats: QueryStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub table_len: usize,
    pub failures: Vec<String>,
    pub warnings: Vec<String>,
    pub final_mean_return: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineSummary {
    pub config: Value,
    pub initial_table_len: usize,
    pub build_warnings: Vec<String>,
    pub methods: Vec<MethodSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedResult {
    pub method: String,
    pub result: EvalResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalFile {
    pub config: Value,
    pub results: Vec<NamedResult>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Stamp {
    stage: Stage,
    fingerprint: String,
    /// Output path relative to `out_dir` -> sha256 of its bytes.
    outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageStatus {
    Ran,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageOutcome {
    pub stage: Stage,
    pub status: StageStatus,
    pub elapsed: Duration,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn file_hash(path: &Path) -> Option<String> {
    std::fs::read(path).ok().map(|b| sha256_hex(&b))
}

/// Builds the advisor client named by the config: backend, optional disk
/// cache under `cache_dir`, retry policy and a real sleeper.
pub fn make_client(config: &RunConfig) -> Result<AdvisorClient, PipelineError> {
    let backend: Box<dyn refine_core::advisor::Backend> = match config.advisor.backend {
        BackendKind::Oracle => Box::new(OracleBackend::new(config.env, config.advisor.oracle.clone())),
        BackendKind::Http => Box::new(
            HttpBackend::from_env(config.advisor.http.clone()).map_err(|e| PipelineError::Other(e.to_string()))?,
        ),
    };
    let mut client = AdvisorClient::new(backend)
        .with_retry(config.advisor.retry)
        .with_sleeper(Box::new(|ms| std::thread::sleep(Duration::from_millis(ms))));
    if config.advisor.cache {
        client = client.with_cache(Box::new(DiskCache::new(config.cache_dir())));
    }
    Ok(client)
}

struct Runner<'a> {
    config: &'a RunConfig,
    layout: Layout,
    echo: Value,
    client: Option<AdvisorClient>,
}

/// Runs `stages` in canonical order. A stage whose inputs, relevant config
/// and recorded outputs are unchanged since its last run is skipped unless
/// `force` is set.
pub fn run_pipeline(config: &RunConfig, stages: &[Stage], force: bool) -> Result<Vec<StageOutcome>, PipelineError> {
    config.validate()?;
    let mut stages = stages.to_vec();
    stages.sort();
    stages.dedup();
    let mut runner =
        Runner { config, layout: Layout::new(&config.paths.out_dir), echo: config.echo(), client: None };
    write_json(&runner.layout.config_echo(), &runner.echo)?;
    let mut out = Vec::with_capacity(stages.len());
    for stage in stages {
        let start = Instant::now();
        let inputs = runner.inputs(stage);
        for (path, producer) in &inputs {
            if !path.exists() {
                return Err(PipelineError::MissingInput { stage, path: path.clone(), producer: *producer });
            }
        }
        let fingerprint = runner.fingerprint(stage, &inputs);
        let status = if !force && runner.up_to_date(stage, &fingerprint) {
            log::info!("{stage}: up to date, skipped");
            StageStatus::Skipped
        } else {
            log::info!("{stage}: running");
            let outputs = runner.run(stage)?;
            runner.write_stamp(stage, fingerprint, &outputs)?;
            StageStatus::Ran
        };
        let elapsed = start.elapsed();
        log::info!("{stage}: {:?} in {:.1}s", status, elapsed.as_secs_f64());
        out.push(StageOutcome { stage, status, elapsed });
    }
    Ok(out)
}

impl Runner<'_> {
    fn seeds(&self) -> &[u64] {
        &self.config.seeds
    }

    fn env(&self) -> Box<dyn Environment + Send> {
        make_env(self.config.env, &self.config.pong, &self.config.hopper)
    }

    fn client(&mut self) -> Result<&mut AdvisorClient, PipelineError> {
        if self.client.is_none() {
            self.client = Some(make_client(self.config)?);
        }
        Ok(self.client.as_mut().expect("client was just built"))
    }

    fn source(&self) -> AnnotationSource {
        match self.config.advisor.backend {
            BackendKind::Oracle => AnnotationSource::Oracle,
            BackendKind::Http => AnnotationSource::Llm,
        }
    }

    fn eval_arms(&self) -> Vec<(String, Option<Method>)> {
        let mut arms = Vec::new();
        if self.config.eval.include_pretrained {
            arms.push(("pretrained".to_string(), None));
        }
        arms.extend(self.config.refine.methods.iter().map(|m| (m.label().to_string(), Some(*m))));
        arms
    }

    /// Files a stage reads, each with the stage that writes it.
    fn inputs(&self, stage: Stage) -> Vec<(PathBuf, Stage)> {
        let l = &self.layout;
        let mut v = Vec::new();
        for &s in self.seeds() {
            match stage {
                Stage::Pretrain => {}
                Stage::Rollout => v.push((l.pretrained(s), Stage::Pretrain)),
                Stage::Identify => v.push((l.rollout(s), Stage::Rollout)),
                Stage::Analyze => {
                    v.push((l.rollout(s), Stage::Rollout));
                    v.push((l.annotations(s), Stage::Identify));
                }
                Stage::Refine => {
                    v.push((l.pretrained(s), Stage::Pretrain));
                    v.push((l.rollout(s), Stage::Rollout));
                    v.push((l.annotations(s), Stage::Identify));
                    v.push((l.analysis(s), Stage::Analyze));
                }
                Stage::Eval => {
                    for (_, m) in self.eval_arms() {
                        match m {
                            None => v.push((l.pretrained(s), Stage::Pretrain)),
                            Some(m) => v.push((l.checkpoint(m, s), Stage::Refine)),
                        }
                    }
                }
                Stage::Report => {
                    for m in &self.config.refine.methods {
                        v.push((l.run_log(*m, s), Stage::Refine));
                    }
                }
            }
        }
        if stage == Stage::Report {
            v.insert(0, (l.eval(), Stage::Eval));
        }
        v
    }

    /// Config keys a stage's outputs depend on.
    fn relevant_config(&self, stage: Stage) -> Value {
        let c = self.config;
        let envs = json!({"env": c.env, "pong": c.pong, "hopper": c.hopper, "seeds": c.seeds});
        let advisor = json!({
            "backend": c.advisor.backend,
            "oracle": c.advisor.oracle,
            "endpoint": c.advisor.http.endpoint,
            "model": c.advisor.http.model,
            "temperature": c.advisor.http.temperature,
            "system_prompt": c.advisor.http.system_prompt,
        });
        match stage {
            Stage::Pretrain => json!({"envs": envs, "net": c.net, "ppo": c.ppo, "pretrain": c.pretrain}),
            Stage::Rollout => json!({"envs": envs, "rollout_episodes": c.identify.rollout_episodes}),
            Stage::Identify => json!({"envs": envs, "window": c.identify.window, "advisor": advisor}),
            Stage::Analyze => json!({"envs": envs, "analysis_episodes": c.identify.analysis_episodes, "advisor": advisor}),
            Stage::Refine => json!({
                "envs": envs, "ppo": c.ppo, "refine": c.refine, "window": c.identify.window, "advisor": advisor,
            }),
            Stage::Eval => json!({"envs": envs, "eval": c.eval, "methods": c.refine.methods}),
            Stage::Report => json!({"env": c.env, "report": c.report, "eval": c.eval, "methods": c.refine.methods}),
        }
    }

    fn fingerprint(&self, stage: Stage, inputs: &[(PathBuf, Stage)]) -> String {
        let hashes: BTreeMap<String, Option<String>> =
            inputs.iter().map(|(p, _)| (self.relative(p), file_hash(p))).collect();
        let doc = json!({"stage": stage, "config": self.relevant_config(stage), "inputs": hashes});
        sha256_hex(doc.to_string().as_bytes())
    }

    fn relative(&self, path: &Path) -> String {
        path.strip_prefix(&self.layout.root).unwrap_or(path).to_string_lossy().replace('\\', "/")
    }

    fn up_to_date(&self, stage: Stage, fingerprint: &str) -> bool {
        let Ok(stamp) = read_json::<Stamp>(&self.layout.stamp(stage)) else { return false };
        stamp.stage == stage
            && stamp.fingerprint == fingerprint
            && stamp.outputs.iter().all(|(rel, hash)| file_hash(&self.layout.root.join(rel)).as_deref() == Some(hash))
    }

    fn write_stamp(&self, stage: Stage, fingerprint: String, outputs: &[PathBuf]) -> Result<(), PipelineError> {
        let mut map = BTreeMap::new();
        for p in outputs {
            let hash = file_hash(p).ok_or_else(|| PipelineError::Other(format!("{stage} did not write {}", p.display())))?;
            map.insert(self.relative(p), hash);
        }
        write_json(&self.layout.stamp(stage), &Stamp { stage, fingerprint, outputs: map })?;
        Ok(())
    }

    fn run(&mut self, stage: Stage) -> Result<Vec<PathBuf>, PipelineError> {
        match stage {
            Stage::Pretrain => self.pretrain(),
            Stage::Rollout => self.rollout(),
            Stage::Identify => self.identify(),
            Stage::Analyze => self.analyze(),
            Stage::Refine => self.refine(),
            Stage::Eval => self.eval(),
            Stage::Report => self.report(),
        }
    }

    fn save(&self, path: &Path, params: &PolicyParams, seed: u64) -> Result<(), PipelineError> {
        if let Some(i) = params.data.iter().position(|x| !x.is_finite()) {
            return Err(PipelineError::Numerical(format!("parameter {i} is not finite; {} not written", path.display())));
        }
        save_checkpoint(path, params, seed, self.echo.clone())?;
        Ok(())
    }

    fn load(&self, path: &Path) -> Result<PolicyParams, PipelineError> {
        Ok(load_checkpoint(path)?.0)
    }

    fn trajectories(&self, seed: u64) -> Result<Vec<Trajectory>, PipelineError> {
        let max_steps = self.env().max_steps();
        let file = read_trajectories(&self.layout.rollout(seed), max_steps)?;
        if file.env != self.config.env {
            return Err(PipelineError::Other(format!(
                "{} holds {} trajectories but the config is for {}",
                self.layout.rollout(seed).display(),
                file.env,
                self.config.env
            )));
        }
        Ok(file.trajectories)
    }

    fn pretrain(&mut self) -> Result<Vec<PathBuf>, PipelineError> {
        let mut outputs = Vec::new();
        for &seed in self.seeds() {
            let mut env = self.env();
            let spec = NetSpec {
                obs_dim: env.observation_dim(),
                hidden: self.config.net.hidden,
                head: Head::for_space(&env.action_space()),
            };
            let init = PolicyParams::init(spec, self.config.net.init, &mut RngStream::derive(seed, Purpose::Init, 0));
            let out = pretrain(init, env.as_mut(), &self.config.pretrain_config(), seed)?;
            let (ckpt, log) = (self.layout.pretrained(seed), self.layout.pretrain_log(seed));
            self.save(&ckpt, &out.params, seed)?;
            write_run_log(&log, &out.log)?;
            log::info!("pretrain s{seed}: final mean return {:.3}", out.log.last().map_or(0.0, |l| l.mean_return));
            outputs.extend([ckpt, log]);
        }
        Ok(outputs)
    }

    fn rollout(&mut self) -> Result<Vec<PathBuf>, PipelineError> {
        let mut outputs = Vec::new();
        for &seed in self.seeds() {
            let params = self.load(&self.layout.pretrained(seed))?;
            let mut env = self.env();
            let trajs =
                collect(&params, env.as_mut(), self.config.identify.rollout_episodes, seed + ROLLOUT_SEED_OFFSET)?;
            let path = self.layout.rollout(seed);
            write_trajectories(&path, self.config.env, seed, &trajs)?;
            outputs.push(path);
        }
        Ok(outputs)
    }

    fn identify(&mut self) -> Result<Vec<PathBuf>, PipelineError> {
        let mut outputs = Vec::new();
        let (kind, window, source) = (self.config.env, self.config.identify.window, self.source());
        for &seed in &self.config.seeds {
            let trajs = self.trajectories(seed)?;
            let client = self.client()?;
            let before = client.stats();
            let report = identify_episodes(client, kind, &trajs, window)?;
            let stats = diff_stats(client.stats(), before);
            let path = self.layout.annotations(seed);
            write_annotations(&path, &report.annotations, source)?;
            let critical = report.annotations.iter().filter(|a| a.annotation.critical).count();
            if report.failed_windows > 0 {
                log::warn!("identify s{seed}: {} windows failed open", report.failed_windows);
            }
            let summary = IdentifySummary {
                config: self.echo.clone(),
                trajectories: trajs.len(),
                annotations: report.annotations.len(),
                critical,
                failed_windows: report.failed_windows,
                warnings: report.warnings,
                stats,
            };
            let summary_path = self.layout.identify_report(seed);
            write_json(&summary_path, &summary)?;
            log::info!("identify s{seed}: {critical} critical of {} annotated steps", summary.annotations);
            outputs.extend([path, summary_path]);
        }
        Ok(outputs)
    }

    fn analyze(&mut self) -> Result<Vec<PathBuf>, PipelineError> {
        let mut outputs = Vec::new();
        let (kind, count) = (self.config.env, self.config.identify.analysis_episodes);
        for &seed in &self.config.seeds {
            let trajs = self.trajectories(seed)?;
            let anns = read_annotations(&self.layout.annotations(seed), kind)?;
            let analyses = analyze_episodes(self.client()?, kind, &trajs, &anns, count)?;
            let merged = merge_analyses(&analyses);
            let path = self.layout.analysis(seed);
            write_json(&path, &AnalysisFile { config: self.echo.clone(), analyses, merged })?;
            outputs.push(path);
        }
        Ok(outputs)
    }

    fn refine(&mut self) -> Result<Vec<PathBuf>, PipelineError> {
        let mut outputs = Vec::new();
        let kind = self.config.env;
        for &seed in &self.config.seeds {
            let pretrained = self.load(&self.layout.pretrained(seed))?;
            let trajs = self.trajectories(seed)?;
            let anns = read_annotations(&self.layout.annotations(seed), kind)?;
            let analysis: AnalysisFile = read_json(&self.layout.analysis(seed))?;
            let (table, build_warnings) = build_lookup(kind, &anns, &trajs, self.config.refine.epsilon)?;
            log::info!("refine s{seed}: lookup table has {} entries", table.len());
            let mut summary = RefineSummary {
                config: self.echo.clone(),
                initial_table_len: table.len(),
                build_warnings,
                methods: Vec::new(),
            };
            for &method in &self.config.refine.methods {
                let mut env = self.env();
                let transitions = self.layout.transitions(method, seed);
                let mut writer = if self.config.refine.log_transitions {
                    Some(TrajectoryWriter::create(&transitions, kind, seed)?)
                } else {
                    None
                };
                let mut write_error = None;
                let mut observer = |t: &Trajectory| {
                    if let (Some(w), None) = (writer.as_mut(), write_error.as_ref()) {
                        write_error = w.write(t).err();
                    }
                };
                let train_seed = seed + REFINE_SEED_OFFSET;
                let (params, log, table_len, failures, warnings) = match method {
                    Method::Ppo => {
                        let finetune = self.config.finetune_config();
                        let out = train(pretrained.clone(), env.as_mut(), &mut NoGuidance, &finetune, train_seed, &mut observer)?;
                        (out.params, out.log, 0, Vec::new(), Vec::new())
                    }
                    Method::Refine(variant) => {
                        let rc = self.config.refine_config(variant);
                        let client = self.client()?;
                        let out = refine(
                            pretrained.clone(),
                            env.as_mut(),
                            table.clone(),
                            Some(client),
                            analysis.merged.clone(),
                            &rc,
                            train_seed,
                            &mut observer,
                        )?;
                        (out.params, out.log, out.table_len, out.failures, out.warnings)
                    }
                };
                if let Some(e) = write_error {
                    return Err(e.into());
                }
                if let Some(w) = writer {
                    w.finish()?;
                    outputs.push(transitions);
                }
                for f in &failures {
                    log::warn!("refine s{seed} {method}: {f}");
                }
                let (ckpt, log_path) = (self.layout.checkpoint(method, seed), self.layout.run_log(method, seed));
                self.save(&ckpt, &params, seed)?;
                write_run_log(&log_path, &log)?;
                let final_mean_return = log.last().map_or(0.0, |l| l.mean_return);
                log::info!("refine s{seed} {method}: final training return {final_mean_return:.3}");
                summary.methods.push(MethodSummary { method, table_len, failures, warnings, final_mean_return });
                outputs.extend([ckpt, log_path]);
            }
            let path = self.layout.refine_summary(seed);
            write_json(&path, &summary)?;
            outputs.push(path);
        }
        Ok(outputs)
    }

    fn eval(&mut self) -> Result<Vec<PathBuf>, PipelineError> {
        let mut results = Vec::new();
        for (name, method) in self.eval_arms() {
            let start = Instant::now();
            let mut per_seed = Vec::with_capacity(self.seeds().len());
            // One environment per seed; results are merged in seed order.
            let handles: Vec<Result<EvalResult, PipelineError>> = std::thread::scope(|scope| {
                let jobs: Vec<_> = self
                    .seeds()
                    .iter()
                    .map(|&seed| {
                        let path = match method {
                            None => self.layout.pretrained(seed),
                            Some(m) => self.layout.checkpoint(m, seed),
                        };
                        let mut env = self.env();
                        let (episodes, greedy) = (self.config.eval.episodes, self.config.eval.greedy);
                        scope.spawn(move || -> Result<EvalResult, PipelineError> {
                            let params = load_checkpoint(&path)?.0;
                            Ok(evaluate(&params, env.as_mut(), episodes, &[seed], greedy)?)
                        })
                    })
                    .collect();
                jobs.into_iter().map(|j| j.join().expect("evaluation thread panicked")).collect()
            });
            for r in handles {
                let r = r?;
                per_seed.extend(r.per_seed.into_iter().map(|s| (s.seed, s.returns)));
            }
            let mut result = EvalResult::from_returns(per_seed);
            result.duration_secs = Some(start.elapsed().as_secs_f64());
            log::info!("eval {name}: {}", result.display());
            results.push(NamedResult { method: name, result });
        }
        let path = self.layout.eval();
        write_json(&path, &EvalFile { config: self.echo.clone(), results })?;
        Ok(vec![path])
    }

    fn report(&mut self) -> Result<Vec<PathBuf>, PipelineError> {
        let eval: EvalFile = read_json(&self.layout.eval())?;
        let results: Vec<(String, EvalResult)> = eval.results.into_iter().map(|r| (r.method, r.result)).collect();
        if results.is_empty() {
            return Err(PipelineError::Other(format!("{} has no results", self.layout.eval().display())));
        }
        let mut logs: BTreeMap<(String, u64), Vec<IterationLog>> = BTreeMap::new();
        for &m in &self.config.refine.methods {
            for &s in self.seeds() {
                logs.insert((m.label().to_string(), s), read_run_log(&self.layout.run_log(m, s))?);
            }
        }
        let order: Vec<String> = self.config.refine.methods.iter().map(|m| m.label().to_string()).collect();
        let curves = LearningCurves::from_logs(&group_logs(logs, &order));
        let dir = self.layout.reports();
        let title = format!("{} fine-tuning", self.config.env);
        let (method, baseline) = (self.config.report.method.label(), self.config.report.baseline.label());
        let comparison = emit_report(&dir, &results, &curves, method, baseline, &title)?;
        let mut outputs: Vec<PathBuf> =
            ["report.csv", "learning_curve.csv", "learning_curve.svg"].iter().map(|f| dir.join(f)).collect();
        if comparison.is_some() {
            outputs.extend([dir.join("comparison.json"), dir.join("comparison.txt")]);
        } else {
            log::warn!("report: cannot compare {method} with {baseline}; comparison skipped");
        }
        Ok(outputs)
    }
}

fn diff_stats(after: QueryStats, before: QueryStats) -> QueryStats {
    QueryStats {
        queries: after.queries - before.queries,
        cache_hits: after.cache_hits - before.cache_hits,
        backend_calls: after.backend_calls - before.backend_calls,
        retries: after.retries - before.retries,
        requeries: after.requeries - before.requeries,
        fail_opens: after.fail_opens - before.fail_opens,
        cache_errors: after.cache_errors - before.cache_errors,
    }
}
