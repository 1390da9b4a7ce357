//! On-disk artifact formats: trajectory, annotation and run-log JSONL files,
//! JSON checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use refine_core::advisor::CriticalAnnotation;
use refine_core::envs::pong::{PongAction, ARITY};
use refine_core::envs::PongState;
use refine_core::mdp::{GridState, Span};
use refine_core::policy::{IterationLog, NetSpec, PolicyParams};
use refine_core::refine::EpisodeAnnotation;
use refine_core::{Action, EnvKind, State, TerminalReason, Trajectory, Transition};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Malformed { path: PathBuf, line: usize, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FormatError + '_ {
    move |source| FormatError::Io { path: path.into(), source }
}

fn malformed(path: &Path, line: usize, message: impl Into<String>) -> FormatError {
    FormatError::Malformed { path: path.into(), line, message: message.into() }
}

/// Writes `bytes` to a temporary file next to `path` and renames it into
/// place, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), FormatError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| FormatError::Io { path: path.into(), source: e.error })?;
    Ok(())
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>, FormatError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if !line.trim().is_empty() {
            out.push((i + 1, line));
        }
    }
    Ok(out)
}

// Actions and states.

/// Pong actions as their names, continuous actions as arrays.
pub fn action_to_json(action: &Action) -> Value {
    match action {
        Action::Discrete { index, arity } if *arity == ARITY => match PongAction::from_index(*index) {
            Some(a) => Value::String(a.name().into()),
            None => Value::from(*index),
        },
        Action::Discrete { index, .. } => Value::from(*index),
        Action::Continuous(v) => Value::from(v.clone()),
    }
}

pub fn action_from_json(kind: EnvKind, value: &Value) -> Result<Action, String> {
    match (kind, value) {
        (EnvKind::Pong, Value::String(s)) => {
            PongAction::parse(s).map(PongAction::to_action).ok_or_else(|| format!("unknown pong action {s:?}"))
        }
        (EnvKind::Pong, Value::Number(n)) => n
            .as_u64()
            .and_then(|i| PongAction::from_index(i as usize))
            .map(PongAction::to_action)
            .ok_or_else(|| format!("pong action index {n} out of range")),
        (EnvKind::HopperLite, Value::Array(items)) => items
            .iter()
            .map(|x| x.as_f64().ok_or_else(|| String::from("torque entries must be numbers")))
            .collect::<Result<Vec<_>, _>>()
            .map(Action::Continuous),
        _ => Err(format!("action {value} does not fit {kind}")),
    }
}

/// Inverse of [`State::flatten`] for the built-in environments.
pub fn state_from_flat(kind: EnvKind, flat: &[f64]) -> Result<State, String> {
    match kind {
        EnvKind::Pong => {
            if flat.len() != 16 {
                return Err(format!("pong state needs 16 numbers, got {}", flat.len()));
            }
            let mut ints = Vec::with_capacity(16);
            for &x in flat {
                if x.fract() != 0.0 || x.abs() > f64::from(i32::MAX) {
                    return Err(format!("pong state component {x} is not an integer"));
                }
                ints.push(x as i32);
            }
            let spans = ints[..12].chunks(4).map(|c| Span { min_x: c[0], max_x: c[1], min_y: c[2], max_y: c[3] }).collect();
            let grid = GridState { width: 80, height: 80, spans, aux: ints[12..].to_vec() };
            let state = PongState::from_grid(&grid).ok_or("not a pong state")?;
            Ok(state.to_state())
        }
        EnvKind::HopperLite => Ok(State::Vector(flat.to_vec())),
    }
}

// Trajectories.

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Meta {
    env: EnvKind,
    seed: u64,
    format_version: u32,
}

#[derive(Debug, Serialize, Deserialize)]
struct MetaLine {
    meta: Meta,
}

#[derive(Debug, Serialize, Deserialize)]
struct TransitionRow {
    episode: u64,
    t: usize,
    state: Vec<f64>,
    policy_action: Value,
    executed_action: Value,
    r_env: f64,
    r_shaped: f64,
    done: bool,
}

/// Streams trajectories to a JSONL file, one transition per line after a
/// meta header.
pub struct TrajectoryWriter {
    out: std::io::BufWriter<fs::File>,
    path: PathBuf,
}

impl TrajectoryWriter {
    pub fn create(path: &Path, env: EnvKind, seed: u64) -> Result<Self, FormatError> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let file = fs::File::create(path).map_err(io_err(path))?;
        let mut w = Self { out: std::io::BufWriter::new(file), path: path.into() };
        let meta = MetaLine { meta: Meta { env, seed, format_version: FORMAT_VERSION } };
        w.line(&meta)?;
        Ok(w)
    }

    fn line<T: Serialize>(&mut self, value: &T) -> Result<(), FormatError> {
        let text = serde_json::to_string(value).map_err(|e| malformed(&self.path, 0, e.to_string()))?;
        writeln!(self.out, "{text}").map_err(io_err(&self.path))
    }

    pub fn write(&mut self, traj: &Trajectory) -> Result<(), FormatError> {
        for tr in &traj.transitions {
            let row = TransitionRow {
                episode: traj.episode_id,
                t: tr.timestep,
                state: tr.state.flatten(),
                policy_action: action_to_json(&tr.policy_action),
                executed_action: action_to_json(&tr.executed_action),
                r_env: tr.env_reward,
                r_shaped: tr.shaped_reward,
                done: tr.done,
            };
            self.line(&row)?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<(), FormatError> {
        self.out.flush().map_err(io_err(&self.path))
    }
}

pub fn write_trajectories(path: &Path, env: EnvKind, seed: u64, trajs: &[Trajectory]) -> Result<(), FormatError> {
    let mut w = TrajectoryWriter::create(path, env, seed)?;
    for t in trajs {
        w.write(t)?;
    }
    w.finish()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryFile {
    pub env: EnvKind,
    pub seed: u64,
    pub trajectories: Vec<Trajectory>,
}

fn terminal_reason(kind: EnvKind, last: &Transition, max_steps: usize) -> Option<TerminalReason> {
    if !last.done {
        return None;
    }
    Some(match kind {
        EnvKind::Pong if last.env_reward > 0.0 => TerminalReason::Goal,
        EnvKind::Pong if last.env_reward < 0.0 => TerminalReason::Failure,
        EnvKind::HopperLite if last.timestep + 1 < max_steps => TerminalReason::Failure,
        _ => TerminalReason::StepLimit,
    })
}

/// Reads a trajectory file. The file does not carry episode reset seeds or
/// the state after an episode's last step: episode seeds read back as 0 and
/// the last transition's `next_state` repeats its `state`. Terminal reasons
/// are recovered from the final reward (Pong) or the step count
/// (hopper-lite, against `max_steps`).
pub fn read_trajectories(path: &Path, max_steps: usize) -> Result<TrajectoryFile, FormatError> {
    let lines = read_lines(path)?;
    let Some((first_no, first)) = lines.first() else {
        return Err(malformed(path, 1, "missing meta header"));
    };
    let meta: MetaLine = serde_json::from_str(first).map_err(|e| malformed(path, *first_no, e.to_string()))?;
    if meta.meta.format_version != FORMAT_VERSION {
        return Err(malformed(path, *first_no, format!("unsupported format_version {}", meta.meta.format_version)));
    }
    let kind = meta.meta.env;
    let mut trajectories: Vec<Trajectory> = Vec::new();
    for (no, line) in &lines[1..] {
        let row: TransitionRow = serde_json::from_str(line).map_err(|e| malformed(path, *no, e.to_string()))?;
        let state = state_from_flat(kind, &row.state).map_err(|m| malformed(path, *no, m))?;
        let policy_action = action_from_json(kind, &row.policy_action).map_err(|m| malformed(path, *no, m))?;
        let executed_action = action_from_json(kind, &row.executed_action).map_err(|m| malformed(path, *no, m))?;
        if trajectories.last().map_or(true, |t| t.episode_id != row.episode) {
            trajectories.push(Trajectory::new(row.episode, 0));
        }
        let traj = trajectories.last_mut().expect("just pushed");
        if let Some(prev) = traj.transitions.last_mut() {
            prev.next_state = state.clone();
        }
        traj.record(Transition {
            next_state: state.clone(),
            state,
            policy_action,
            executed_action,
            env_reward: row.r_env,
            shaped_reward: row.r_shaped,
            done: row.done,
            timestep: row.t,
        })
        .map_err(|e| malformed(path, *no, e.to_string()))?;
    }
    for t in &mut trajectories {
        t.terminal_reason = t.transitions.last().and_then(|last| terminal_reason(kind, last, max_steps));
    }
    Ok(TrajectoryFile { env: kind, seed: meta.meta.seed, trajectories })
}

// Annotations.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationSource {
    Llm,
    Oracle,
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationRow {
    episode: u64,
    t: usize,
    critical: bool,
    action: Value,
    explanation: String,
    source: AnnotationSource,
}

pub fn write_annotations(
    path: &Path,
    annotations: &[EpisodeAnnotation],
    source: AnnotationSource,
) -> Result<(), FormatError> {
    let mut text = String::new();
    for ea in annotations {
        let a = &ea.annotation;
        let row = AnnotationRow {
            episode: ea.episode,
            t: a.timeslot,
            critical: a.critical,
            action: a.corrected_action.as_ref().map_or(Value::Null, action_to_json),
            explanation: a.explanation.clone(),
            source,
        };
        text.push_str(&serde_json::to_string(&row).map_err(|e| malformed(path, 0, e.to_string()))?);
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

pub fn read_annotations(path: &Path, kind: EnvKind) -> Result<Vec<EpisodeAnnotation>, FormatError> {
    let mut out = Vec::new();
    for (no, line) in read_lines(path)? {
        let row: AnnotationRow = serde_json::from_str(&line).map_err(|e| malformed(path, no, e.to_string()))?;
        let corrected_action = match &row.action {
            Value::Null => None,
            v => Some(action_from_json(kind, v).map_err(|m| malformed(path, no, m))?),
        };
        out.push(EpisodeAnnotation {
            episode: row.episode,
            annotation: CriticalAnnotation {
                timeslot: row.t,
                critical: row.critical,
                corrected_action,
                explanation: row.explanation,
            },
        });
    }
    Ok(out)
}

// Run logs.

pub fn write_run_log(path: &Path, log: &[IterationLog]) -> Result<(), FormatError> {
    let mut text = String::new();
    for entry in log {
        text.push_str(&serde_json::to_string(entry).map_err(|e| malformed(path, 0, e.to_string()))?);
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

pub fn read_run_log(path: &Path) -> Result<Vec<IterationLog>, FormatError> {
    read_lines(path)?
        .into_iter()
        .map(|(no, line)| serde_json::from_str(&line).map_err(|e| malformed(path, no, e.to_string())))
        .collect()
}

// Checkpoints.

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    /// `[rows, cols]`.
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    /// Seed of the training run that produced the parameters.
    pub seed: u64,
    pub config: Value,
    pub spec: NetSpec,
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn new(params: &PolicyParams, seed: u64, config: Value) -> Self {
        let tensors = params
            .spec
            .blocks()
            .into_iter()
            .map(|b| Tensor { name: b.name.into(), shape: [b.rows, b.cols], data: params.data[b.range()].to_vec() })
            .collect();
        Self { format_version: FORMAT_VERSION, seed, config, spec: params.spec, tensors }
    }

    pub fn params(&self) -> Result<PolicyParams, String> {
        if self.format_version != FORMAT_VERSION {
            return Err(format!("unsupported format_version {}", self.format_version));
        }
        let mut params = PolicyParams::zeros(self.spec);
        let blocks = self.spec.blocks();
        if blocks.len() != self.tensors.len() {
            return Err(format!("expected {} tensors, found {}", blocks.len(), self.tensors.len()));
        }
        for (b, t) in blocks.iter().zip(&self.tensors) {
            if t.name != b.name || t.shape != [b.rows, b.cols] || t.data.len() != b.len() {
                return Err(format!("tensor `{}` {:?} does not match `{}` [{}, {}]", t.name, t.shape, b.name, b.rows, b.cols));
            }
            params.data[b.range()].copy_from_slice(&t.data);
        }
        Ok(params)
    }
}

pub fn save_checkpoint(path: &Path, params: &PolicyParams, seed: u64, config: Value) -> Result<(), FormatError> {
    if let Some(i) = params.data.iter().position(|x| !x.is_finite()) {
        return Err(malformed(path, 0, format!("parameter {i} ({}) is not finite", params.block_name(i))));
    }
    let ck = Checkpoint::new(params, seed, config);
    let mut text = serde_json::to_string_pretty(&ck).map_err(|e| malformed(path, 0, e.to_string()))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<(PolicyParams, Checkpoint), FormatError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| malformed(path, 1, e.to_string()))?;
    let params = ck.params().map_err(|m| malformed(path, 1, m))?;
    Ok((params, ck))
}

// Small JSON artifacts.

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), FormatError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| malformed(path, 0, e.to_string()))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, FormatError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| malformed(path, 1, e.to_string()))
}

/// Groups annotations by episode, keeping file order.
pub fn by_episode(annotations: &[EpisodeAnnotation]) -> BTreeMap<u64, Vec<&CriticalAnnotation>> {
    let mut out: BTreeMap<u64, Vec<&CriticalAnnotation>> = BTreeMap::new();
    for ea in annotations {
        out.entry(ea.episode).or_default().push(&ea.annotation);
    }
    out
}
