//! Lookup-table refinement: action override at matched critical states and
//! advisor reward mixing, layered on the PPO collection loop.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::advisor::{
    build_case_analysis_prompt, build_identification_prompt, build_reward_prompt, AdvisorClient, AdvisorError,
    CaseAnalysis, CriticalAnnotation,
};
use crate::envs::hopper::{idx, ACTION_DIM, STATE_DIM};
use crate::envs::pong::ARITY;
use crate::mdp::{Action, EnvKind, Environment, GridState, State, TerminalReason, Trajectory};
use crate::policy::train::{train, Advice, Guidance, GuidanceCounters, IterationLog, TrainConfig, TrainError};
use crate::policy::PolicyParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Action override only.
    A,
    /// Reward mixing only.
    R,
    /// Both.
    RA,
}

impl Variant {
    pub fn overrides_actions(self) -> bool {
        matches!(self, Variant::A | Variant::RA)
    }

    pub fn shapes_rewards(self) -> bool {
        matches!(self, Variant::R | Variant::RA)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::A => "A",
            Variant::R => "R",
            Variant::RA => "RA",
        }
    }
}

/// `r_env + alpha * r_llm` at critical states, `r_env` elsewhere.
pub fn mix_reward(r_env: f64, r_llm: f64, alpha: f64, is_critical: bool) -> f64 {
    if is_critical {
        r_env + alpha * r_llm
    } else {
        r_env
    }
}

/// The matched action under A and RA, the policy action otherwise.
pub fn choose_action(policy_action: &Action, matched: Option<&Action>, variant: Variant) -> Action {
    match matched {
        Some(a) if variant.overrides_actions() => a.clone(),
        _ => policy_action.clone(),
    }
}

/// Annotation tied to the episode it was made for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeAnnotation {
    pub episode: u64,
    pub annotation: CriticalAnnotation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LookupEntry {
    pub key: State,
    pub action: Action,
    /// (episode, timeslot) of the annotation that produced it.
    pub source: (u64, usize),
}

/// Critical states with suggested actions. Grid states match exactly;
/// vector states match within an L-infinity ball of radius `epsilon`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ActionLookupTable {
    pub epsilon: f64,
    entries: Vec<LookupEntry>,
    grid_index: BTreeMap<GridState, usize>,
}

/// Lookup key of a state: hopper-lite drops torso x, which only grows.
pub fn table_key(kind: EnvKind, state: &State) -> State {
    match (kind, state) {
        (EnvKind::HopperLite, State::Vector(v)) if v.len() == STATE_DIM => {
            let mut k = v.clone();
            k[idx::X] = 0.0;
            State::Vector(k)
        }
        _ => state.clone(),
    }
}

fn linf(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

impl ActionLookupTable {
    pub fn new(epsilon: f64) -> Self {
        Self { epsilon, entries: Vec::new(), grid_index: BTreeMap::new() }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[LookupEntry] {
        &self.entries
    }

    /// Adds an entry; an identical key is overwritten in place.
    pub fn insert(&mut self, key: State, action: Action, source: (u64, usize)) {
        let existing = match &key {
            State::Grid(g) => self.grid_index.get(g).copied(),
            State::Vector(v) => self.entries.iter().position(|e| e.key.as_vector() == Some(v.as_slice())),
        };
        match existing {
            Some(i) => {
                self.entries[i].action = action;
                self.entries[i].source = source;
            }
            None => {
                if let State::Grid(g) = &key {
                    self.grid_index.insert(g.clone(), self.entries.len());
                }
                self.entries.push(LookupEntry { key, action, source });
            }
        }
    }

    pub fn lookup(&self, key: &State) -> Option<&Action> {
        match key {
            State::Grid(g) => self.grid_index.get(g).map(|&i| &self.entries[i].action),
            State::Vector(v) => {
                let mut best: Option<(f64, usize)> = None;
                for (i, e) in self.entries.iter().enumerate() {
                    let Some(k) = e.key.as_vector() else { continue };
                    let d = linf(k, v);
                    if d <= self.epsilon && best.is_none_or(|(bd, _)| d < bd) {
                        best = Some((d, i));
                    }
                }
                best.map(|(_, i)| &self.entries[i].action)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RefineError {
    #[error("annotation for episode {episode} timeslot {timeslot} has no matching trajectory state")]
    Dangling { episode: u64, timeslot: usize },
    #[error("advisor: {0}")]
    Advisor(#[from] AdvisorError),
}

/// Validates a suggested action for `kind`. Discrete actions outside the
/// vocabulary are rejected; continuous ones are clamped.
fn sanitize_action(kind: EnvKind, action: &Action) -> Option<Action> {
    match (kind, action) {
        (EnvKind::Pong, Action::Discrete { index, .. }) if *index < ARITY => Some(Action::discrete(*index, ARITY)),
        (EnvKind::HopperLite, Action::Continuous(v)) if v.len() == ACTION_DIM && v.iter().all(|x| x.is_finite()) => {
            Some(Action::Continuous(v.iter().map(|x| x.clamp(-1.0, 1.0)).collect()))
        }
        _ => None,
    }
}

/// Builds the table from annotations, in order (later entries win).
/// Returns the table and warnings for ignored suggestions.
pub fn build_lookup(
    kind: EnvKind,
    annotations: &[EpisodeAnnotation],
    trajectories: &[Trajectory],
    epsilon: f64,
) -> Result<(ActionLookupTable, Vec<String>), RefineError> {
    let mut table = ActionLookupTable::new(epsilon);
    let warnings = extend_lookup(&mut table, kind, annotations, trajectories)?;
    Ok((table, warnings))
}

/// Merges more annotations into an existing table.
pub fn extend_lookup(
    table: &mut ActionLookupTable,
    kind: EnvKind,
    annotations: &[EpisodeAnnotation],
    trajectories: &[Trajectory],
) -> Result<Vec<String>, RefineError> {
    let by_id: BTreeMap<u64, &Trajectory> = trajectories.iter().map(|t| (t.episode_id, t)).collect();
    let mut warnings = Vec::new();
    for ea in annotations {
        let a = &ea.annotation;
        let state = by_id
            .get(&ea.episode)
            .and_then(|t| t.transitions.get(a.timeslot))
            .map(|tr| &tr.state)
            .ok_or(RefineError::Dangling { episode: ea.episode, timeslot: a.timeslot })?;
        if !a.critical {
            continue;
        }
        let Some(suggested) = &a.corrected_action else { continue };
        match sanitize_action(kind, suggested) {
            Some(action) => table.insert(table_key(kind, state), action, (ea.episode, a.timeslot)),
            None => warnings.push(format!(
                "episode {} timeslot {}: suggested action invalid for {kind}, ignored",
                ea.episode, a.timeslot
            )),
        }
    }
    Ok(warnings)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct IdentifyReport {
    pub annotations: Vec<EpisodeAnnotation>,
    pub warnings: Vec<String>,
    pub failed_windows: usize,
}

/// Runs identification over every trajectory in windows of at most `window`
/// steps.
pub fn identify_episodes(
    client: &mut AdvisorClient,
    kind: EnvKind,
    trajectories: &[Trajectory],
    window: usize,
) -> Result<IdentifyReport, AdvisorError> {
    let window = window.max(1);
    let mut report = IdentifyReport::default();
    for traj in trajectories {
        let mut begin = 0;
        while begin < traj.len() {
            let end = (begin + window).min(traj.len());
            let prompt = build_identification_prompt(kind, traj, begin, end)?;
            let out = client.identify(&prompt)?;
            if out.failed_open {
                report.failed_windows += 1;
            }
            report.warnings.extend(out.warnings);
            report
                .annotations
                .extend(out.annotations.into_iter().map(|annotation| EpisodeAnnotation { episode: traj.episode_id, annotation }));
            begin = end;
        }
    }
    Ok(report)
}

/// Case analyses of up to `count` finished episodes, preferring lost ones.
pub fn analyze_episodes(
    client: &mut AdvisorClient,
    kind: EnvKind,
    trajectories: &[Trajectory],
    annotations: &[EpisodeAnnotation],
    count: usize,
) -> Result<Vec<CaseAnalysis>, AdvisorError> {
    let finished: Vec<&Trajectory> = trajectories.iter().filter(|t| t.is_complete() && !t.is_empty()).collect();
    let lost = |t: &&Trajectory| t.terminal_reason == Some(TerminalReason::Failure);
    let mut chosen: Vec<&Trajectory> = finished.iter().copied().filter(lost).take(count).collect();
    if chosen.len() < count {
        chosen.extend(finished.iter().copied().filter(|t| !lost(t)).take(count - chosen.len()));
    }
    let mut out = Vec::with_capacity(chosen.len());
    for traj in chosen {
        let own: Vec<CriticalAnnotation> =
            annotations.iter().filter(|a| a.episode == traj.episode_id).map(|a| a.annotation.clone()).collect();
        let prompt = build_case_analysis_prompt(kind, traj, &own)?;
        out.push(client.case_analysis(&prompt)?);
    }
    Ok(out)
}

/// Joins several analyses into the single text embedded in reward prompts.
pub fn merge_analyses(analyses: &[CaseAnalysis]) -> CaseAnalysis {
    let mut text = String::new();
    for a in analyses.iter().filter(|a| !a.text.trim().is_empty()) {
        if !text.is_empty() {
            text.push_str("\n\n");
        }
        text.push_str(&format!("Episode {}:\n{}", a.episode_id, a.text.trim()));
    }
    CaseAnalysis { episode_id: analyses.first().map_or(0, |a| a.episode_id), text }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    pub variant: Variant,
    /// Shaping coefficient; ignored by variant A.
    pub alpha: f64,
    pub train: TrainConfig,
    /// Match radius for continuous states.
    pub epsilon: f64,
    /// Identification window length in steps.
    pub window: usize,
    /// Re-identify on fresh rollouts every this many iterations and merge the
    /// results into the table.
    pub rebuild_every: Option<usize>,
    /// Cap on reward queries per iteration; further matched states get no
    /// advisor reward.
    pub reward_budget: Option<u64>,
    pub seeds: Vec<u64>,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            variant: Variant::RA,
            alpha: 0.5,
            train: TrainConfig::default(),
            epsilon: 0.05,
            window: 50,
            rebuild_every: None,
            reward_budget: None,
            seeds: alloc::vec![0, 1, 2],
        }
    }
}

/// [`Guidance`] implementation backed by a lookup table and an advisor.
pub struct RefineGuide<'a> {
    kind: EnvKind,
    variant: Variant,
    alpha: f64,
    table: ActionLookupTable,
    client: Option<&'a mut AdvisorClient>,
    analysis: CaseAnalysis,
    window: usize,
    rebuild_every: Option<usize>,
    reward_budget: Option<u64>,
    used_budget: u64,
    matched: u64,
    disabled: bool,
    failures: Vec<String>,
    warnings: Vec<String>,
}

impl core::fmt::Debug for RefineGuide<'_> {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("RefineGuide")
            .field("variant", &self.variant)
            .field("alpha", &self.alpha)
            .field("table_len", &self.table.len())
            .field("disabled", &self.disabled)
            .finish()
    }
}

impl<'a> RefineGuide<'a> {
    pub fn new(
        kind: EnvKind,
        table: ActionLookupTable,
        client: Option<&'a mut AdvisorClient>,
        analysis: CaseAnalysis,
        config: &RefineConfig,
    ) -> Self {
        Self {
            kind,
            variant: config.variant,
            alpha: if config.variant == Variant::A { 0.0 } else { config.alpha },
            table,
            client,
            analysis,
            window: config.window,
            rebuild_every: config.rebuild_every,
            reward_budget: config.reward_budget,
            used_budget: 0,
            matched: 0,
            disabled: false,
            failures: Vec::new(),
            warnings: Vec::new(),
        }
    }

    pub fn table(&self) -> &ActionLookupTable {
        &self.table
    }

    /// Advisor failures; after the first one the guide treats every state as
    /// non-critical.
    pub fn failures(&self) -> &[String] {
        &self.failures
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    fn fail(&mut self, context: &str, err: AdvisorError) {
        self.disabled = true;
        self.failures.push(format!("{context}: {err}"));
    }

    fn reward_for(&mut self, episode: u64, timestep: usize, state: &State, executed: &Action) -> Option<f64> {
        if !self.variant.shapes_rewards() || self.disabled {
            return None;
        }
        if self.reward_budget.is_some_and(|b| self.used_budget >= b) {
            return None;
        }
        let client = self.client.as_mut()?;
        self.used_budget += 1;
        let prompt = build_reward_prompt(self.kind, episode, timestep, state, executed, &self.analysis);
        match client.reward(&prompt) {
            Ok(j) => j.map(|j| j.reward),
            Err(e) => {
                self.fail(&format!("reward query at episode {episode} timeslot {timestep}"), e);
                None
            }
        }
    }
}

impl Guidance for RefineGuide<'_> {
    fn advise(&mut self, episode: u64, timestep: usize, state: &State, policy_action: &Action) -> Advice {
        if self.disabled {
            return Advice::default();
        }
        let Some(matched) = self.table.lookup(&table_key(self.kind, state)).cloned() else {
            return Advice::default();
        };
        self.matched += 1;
        let executed = choose_action(policy_action, Some(&matched), self.variant);
        let llm_reward = self.reward_for(episode, timestep, state, &executed);
        if self.disabled {
            // The failure happened on this step: treat it as non-critical too.
            return Advice::default();
        }
        Advice { action: self.variant.overrides_actions().then_some(matched), llm_reward }
    }

    fn shape(&self, env_reward: f64, advice: &Advice) -> f64 {
        match advice.llm_reward {
            Some(r) => mix_reward(env_reward, r, self.alpha, true),
            None => env_reward,
        }
    }

    fn counters(&self) -> GuidanceCounters {
        let stats = self.client.as_ref().map(|c| c.stats()).unwrap_or_default();
        GuidanceCounters { matched_states: self.matched, advisor_queries: stats.queries, cache_hits: stats.cache_hits }
    }

    fn end_iteration(&mut self, iter: usize, trajectories: &[Trajectory]) {
        self.used_budget = 0;
        let Some(every) = self.rebuild_every.filter(|k| *k > 0) else { return };
        if self.disabled || (iter + 1) % every != 0 {
            return;
        }
        let Some(client) = self.client.as_mut() else { return };
        match identify_episodes(client, self.kind, trajectories, self.window) {
            Ok(report) => match extend_lookup(&mut self.table, self.kind, &report.annotations, trajectories) {
                Ok(w) => {
                    self.warnings.extend(report.warnings);
                    self.warnings.extend(w);
                }
                Err(e) => self.warnings.push(format!("rebuild after iteration {iter}: {e}")),
            },
            Err(e) => self.fail(&format!("identification after iteration {iter}"), e),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineOutcome {
    pub params: PolicyParams,
    pub log: Vec<IterationLog>,
    pub failures: Vec<String>,
    pub warnings: Vec<String>,
    pub table_len: usize,
}

/// Fine-tunes `checkpoint` with lookup-table guidance. Advisor failures are
/// recorded and switch the run to plain PPO from that step on.
#[allow(clippy::too_many_arguments)]
pub fn refine(
    checkpoint: PolicyParams,
    env: &mut dyn Environment,
    table: ActionLookupTable,
    client: Option<&mut AdvisorClient>,
    analysis: CaseAnalysis,
    config: &RefineConfig,
    seed: u64,
    observer: &mut dyn FnMut(&Trajectory),
) -> Result<RefineOutcome, TrainError> {
    let kind = env.kind();
    let mut guide = RefineGuide::new(kind, table, client, analysis, config);
    let out = train(checkpoint, env, &mut guide, &config.train, seed, observer)?;
    Ok(RefineOutcome {
        params: out.params,
        log: out.log,
        failures: guide.failures,
        warnings: guide.warnings,
        table_len: guide.table.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{PongAction, PongState};
    use crate::mdp::Transition;
    use alloc::vec;
    use proptest::prelude::*;

    #[test]
    fn mix_examples() {
        assert_eq!(mix_reward(1.0, 0.5, 0.5, true), 1.25);
        assert!((mix_reward(2.0, -1.0, 0.1, true) - 1.9).abs() < 1e-15);
        assert_eq!(mix_reward(1.0, 123.0, 7.0, false), 1.0);
    }

    #[test]
    fn choose_examples() {
        let left = PongAction::MoveLeft.to_action();
        let stay = PongAction::Stay.to_action();
        assert_eq!(choose_action(&stay, Some(&left), Variant::RA), left);
        assert_eq!(choose_action(&stay, Some(&left), Variant::A), left);
        assert_eq!(choose_action(&stay, Some(&left), Variant::R), stay);
        for v in [Variant::A, Variant::R, Variant::RA] {
            assert_eq!(choose_action(&stay, None, v), stay);
        }
    }

    fn ps(x: i32) -> PongState {
        PongState { our_min_x: x, opp_min_x: 36, ball_x: 40, ball_y: 40, vx: 1, vy: 2, our_score: 0, opp_score: 0 }
    }

    fn traj(states: &[PongState]) -> Trajectory {
        let mut t = Trajectory::new(0, 0);
        for (i, s) in states.iter().enumerate() {
            let a = PongAction::Stay.to_action();
            t.record(Transition {
                state: s.to_state(),
                policy_action: a.clone(),
                executed_action: a,
                env_reward: 0.0,
                shaped_reward: 0.0,
                next_state: s.to_state(),
                done: false,
                timestep: i,
            })
            .unwrap();
        }
        t
    }

    fn ann(t: usize, critical: bool, action: Option<PongAction>) -> EpisodeAnnotation {
        EpisodeAnnotation {
            episode: 0,
            annotation: CriticalAnnotation {
                timeslot: t,
                critical,
                corrected_action: action.map(PongAction::to_action),
                explanation: String::new(),
            },
        }
    }

    #[test]
    fn lookup_cardinality_and_exclusions() {
        let trajs = [traj(&[ps(10), ps(12), ps(14), ps(16)])];
        let anns = [
            ann(0, true, Some(PongAction::MoveLeft)),
            ann(1, true, Some(PongAction::Stay)),
            ann(2, true, Some(PongAction::MoveRight)),
            ann(3, false, None),
        ];
        let (t, _) = build_lookup(EnvKind::Pong, &anns, &trajs, 0.0).unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(t.lookup(&ps(12).to_state()), Some(&PongAction::Stay.to_action()));
        assert_eq!(t.lookup(&ps(16).to_state()), None);
        assert_eq!(t.lookup(&ps(18).to_state()), None);
        let (t, _) = build_lookup(EnvKind::Pong, &[ann(0, true, None)], &trajs, 0.0).unwrap();
        assert!(t.is_empty());
    }

    #[test]
    fn most_recent_wins() {
        let trajs = [traj(&[ps(10), ps(10)])];
        let anns = [ann(0, true, Some(PongAction::MoveLeft)), ann(1, true, Some(PongAction::Stay))];
        let (t, _) = build_lookup(EnvKind::Pong, &anns, &trajs, 0.0).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.lookup(&ps(10).to_state()), Some(&PongAction::Stay.to_action()));
    }

    #[test]
    fn dangling_rejected() {
        let trajs = [traj(&[ps(10)])];
        assert_eq!(
            build_lookup(EnvKind::Pong, &[ann(5, true, Some(PongAction::Stay))], &trajs, 0.0).unwrap_err(),
            RefineError::Dangling { episode: 0, timeslot: 5 }
        );
    }

    #[test]
    fn invalid_discrete_ignored() {
        let trajs = [traj(&[ps(10)])];
        let mut a = ann(0, true, None);
        a.annotation.corrected_action = Some(Action::discrete(7, 9));
        let (t, w) = build_lookup(EnvKind::Pong, &[a], &trajs, 0.0).unwrap();
        assert!(t.is_empty());
        assert_eq!(w.len(), 1);
    }

    #[test]
    fn zero_epsilon_is_exact() {
        let mut t = ActionLookupTable::new(0.0);
        t.insert(State::Vector(vec![0.1, 0.2]), Action::Continuous(vec![1.0]), (0, 0));
        assert!(t.lookup(&State::Vector(vec![0.1, 0.2])).is_some());
        assert!(t.lookup(&State::Vector(vec![0.1, 0.2 + 1e-12])).is_none());
    }

    proptest! {
        #[test]
        fn continuous_match_is_nearest(
            keys in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), 1..20),
            q in prop::collection::vec(-1.0f64..1.0, 3),
            eps in 0.0f64..0.5,
        ) {
            let mut t = ActionLookupTable::new(eps);
            for (i, k) in keys.iter().enumerate() {
                t.insert(State::Vector(k.clone()), Action::Continuous(vec![i as f64]), (0, i));
            }
            // Oracle: exhaustive scan over the stored entries.
            let mut want: Option<(f64, usize)> = None;
            for (i, e) in t.entries().iter().enumerate() {
                let d = linf(e.key.as_vector().unwrap(), &q);
                if d <= eps && want.map_or(true, |(bd, _)| d < bd) {
                    want = Some((d, i));
                }
            }
            let got = t.lookup(&State::Vector(q.clone()));
            prop_assert_eq!(got, want.map(|(_, i)| &t.entries()[i].action));
        }
    }
}
