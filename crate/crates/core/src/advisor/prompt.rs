//! Prompt templates and their rendering.
//!
//! Every prompt carries, in order: Background, Components, Agent objective,
//! an instructions section specific to the prompt kind, any supporting
//! material (trajectory, case analysis), and Output format.

use alloc::format;
use alloc::string::String;
use core::fmt::Write;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{AdvisorError, CaseAnalysis, CriticalAnnotation};
use crate::envs::describe::{describe_state, describe_state_action};
use crate::mdp::{Action, EnvKind, State, TerminalReason, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    Identification,
    CaseAnalysis,
    RewardGeneration,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdvisorPrompt {
    pub kind: PromptKind,
    pub env: EnvKind,
    pub episode_id: u64,
    /// Half-open timestep range the prompt covers.
    pub window: (usize, usize),
    pub rendered_text: String,
    /// Lower-case hex SHA-256 of `rendered_text`.
    pub content_hash: String,
}

impl AdvisorPrompt {
    fn new(kind: PromptKind, env: EnvKind, episode_id: u64, window: (usize, usize), rendered_text: String) -> Self {
        let content_hash = content_hash(&rendered_text);
        Self { kind, env, episode_id, window, rendered_text, content_hash }
    }

    /// Same prompt with extra text appended (and a fresh hash).
    pub fn with_suffix(&self, suffix: &str) -> Self {
        let mut text = self.rendered_text.clone();
        text.push_str(suffix);
        Self::new(self.kind, self.env, self.episode_id, self.window, text)
    }
}

pub fn content_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

pub const NO_PRIOR_ANALYSIS: &str = "No prior analysis is available.";

const PONG_HEADER: &str = "\
Background
A table-tennis game on an 80x80 grid. Each side moves a racket horizontally and must return the ball; \
the side that misses concedes the point. Winning a point is worth +1 and losing it -1. A match is played to 21 points.

Components
Both rackets are 8 cells wide and 2 rows tall and move only along x. A racket is written \
{min x, max x, min y, max y}. Ours occupies rows 70-71 and ranges from {0, 7, 70, 71} to {73, 80, 70, 71}; \
the opponent occupies rows 8-9 and ranges from {0, 7, 8, 9} to {73, 80, 8, 9}. The ball is a single cell {x, y} \
that moves by its velocity {vx, vy} every step and bounces off the side walls. A positive vy means the ball \
travels toward our racket. Our actions are stay, move left (x decreases by 2) and move right (x increases by 2).

Agent objective
A learning agent controls our racket. At every step it observes the state, chooses an action with its policy \
and receives the environment reward. Its aim is to win the match.

How to catch the ball
The ball is returned when it reaches row 69 at a column between our racket's min x and max x inclusive. \
For example, a ball arriving at {52, 69} is caught by any racket position from {45, 52, 70, 71} to {52, 59, 70, 71}.
";

const HOPPER_HEADER: &str = "\
Background
hopper-lite is a planar one-legged robot that should travel forward as fast as possible without falling. \
It is driven by three joint torques and simulated with a simplified integrator.

Components
State: 11 values, in order: torso x (m), torso height (m), torso pitch (rad), horizontal velocity (m/s), \
vertical velocity (m/s), pitch velocity (rad/s), hip angle (rad), hip angular velocity (rad/s), knee angle (rad), \
knee angular velocity (rad/s), ankle angle (rad).
Action: torques (hip, knee, ankle), each in [-1, 1].

Agent objective
Reward per step = horizontal velocity + 1.0 alive bonus - 0.001 * sum of squared torques. The episode ends when \
torso height drops below 0.7, when |pitch| exceeds 0.628 rad, or when any value stops being finite.
";

fn header(env: EnvKind) -> &'static str {
    match env {
        EnvKind::Pong => PONG_HEADER,
        EnvKind::HopperLite => HOPPER_HEADER,
    }
}

fn action_vocabulary(env: EnvKind) -> &'static str {
    match env {
        EnvKind::Pong => "stay, move left or move right",
        EnvKind::HopperLite => "torques (hip, knee, ankle) with each value in [-1, 1]",
    }
}

fn identification_instructions(env: EnvKind, episode: u64, begin: usize, end: usize) -> String {
    let last = end - 1;
    let focus = match env {
        EnvKind::Pong => {
            "(i) Decide for every timeslot whether it is critical, meaning the action chosen there changes whether \
our racket can reach and return the ball. While the ball travels toward the opponent our moves barely matter, so \
those steps are usually not critical.
(ii) Work out where the ball will arrive at our row from its position and velocity, and compare that with where \
the racket is heading."
        }
        EnvKind::HopperLite => {
            "(i) Decide for every timeslot whether it is critical, meaning the torques chosen there change the future \
return, in particular steps that push the robot toward a fall.
(ii) Use the height, pitch and their velocities to judge how each action moves the robot toward or away from \
the termination limits."
        }
    };
    format!(
        "Identification instructions
Below is episode {episode}, timeslots {begin} to {last}. Each line gives the state, the action taken and the reward received.
{focus}
(iii) For each critical timeslot, judge whether the action taken was appropriate. If it was not, give the action \
that should have been taken: {vocab}.
",
        vocab = action_vocabulary(env)
    )
}

fn identification_format(env: EnvKind, begin: usize, end: usize) -> String {
    let last = end - 1;
    let slot = match env {
        EnvKind::Pong => "<corrected action or <none>>",
        EnvKind::HopperLite => "<corrected torques (hip, knee, ankle) or <none>>",
    };
    format!(
        "Output format
Reply with one record per timeslot, in order, from timeslot {begin} to timeslot {last}:
{{timeslot <t>, <critical or not critical>, {slot}, <explanation>}}
Use <none> when the timeslot is not critical or when the action taken was already appropriate.
"
    )
}

/// Renders the identification prompt for `trajectory[begin..end]`.
pub fn build_identification_prompt(
    env: EnvKind,
    trajectory: &Trajectory,
    begin: usize,
    end: usize,
) -> Result<AdvisorPrompt, AdvisorError> {
    if begin >= end || end > trajectory.len() {
        return Err(AdvisorError::EmptyWindow { begin, end });
    }
    let mut text = String::from(header(env));
    text.push('\n');
    text.push_str(&identification_instructions(env, trajectory.episode_id, begin, end));
    text.push_str("\nTrajectory\n");
    for tr in &trajectory.transitions[begin..end] {
        text.push_str(&describe_state(env, tr).text);
        text.push('\n');
    }
    text.push('\n');
    text.push_str(&identification_format(env, begin, end));
    Ok(AdvisorPrompt::new(PromptKind::Identification, env, trajectory.episode_id, (begin, end), text))
}

fn outcome_words(env: EnvKind, reason: TerminalReason) -> (&'static str, &'static str) {
    match (env, reason) {
        (EnvKind::Pong, TerminalReason::Goal) => ("won", "effective actions"),
        (EnvKind::Pong, _) => ("lost", "failures"),
        (EnvKind::HopperLite, TerminalReason::Failure) => ("fell", "failures"),
        (EnvKind::HopperLite, _) => ("survived", "effective actions"),
    }
}

pub const ANALYSIS_INSTRUCTIONS: &str = "\
(i) Point out the critical timeslots, where our action decided the outcome.
(ii) Explain what went wrong: which actions left the agent out of position, too late, or heading toward failure.
(iii) Explain which actions at critical timeslots were effective, and how actions like them should be rewarded.
";

/// Renders the case-analysis prompt for a finished episode. The analysis
/// focus is "failures" for lost episodes and "effective actions" otherwise.
pub fn build_case_analysis_prompt(
    env: EnvKind,
    trajectory: &Trajectory,
    annotations: &[CriticalAnnotation],
) -> Result<AdvisorPrompt, AdvisorError> {
    let reason = trajectory.terminal_reason.ok_or(AdvisorError::IncompleteEpisode(trajectory.episode_id))?;
    if trajectory.is_empty() {
        return Err(AdvisorError::EmptyWindow { begin: 0, end: 0 });
    }
    let (outcome, focus) = outcome_words(env, reason);
    let mut text = String::from(header(env));
    let _ = write!(
        text,
        "\nAnalysis instructions\nBelow is the full trajectory of episode {}, which our agent {outcome}.\n{ANALYSIS_INSTRUCTIONS}Focus: {focus}\n",
        trajectory.episode_id
    );
    text.push_str("\nTrajectory\n");
    for tr in &trajectory.transitions {
        text.push_str(&describe_state(env, tr).text);
        text.push('\n');
    }
    let critical: alloc::vec::Vec<&CriticalAnnotation> = annotations.iter().filter(|a| a.critical).collect();
    if !critical.is_empty() {
        text.push_str("\nIdentified critical timeslots\n");
        for a in critical {
            let _ = write!(text, "timeslot {}: {}\n", a.timeslot, a.explanation);
        }
    }
    text.push_str(
        "\nOutput format
First list the critical timeslots as {timeslot <t>, critical}. Then give a detailed analysis answering each \
instruction above.
",
    );
    let len = trajectory.len();
    Ok(AdvisorPrompt::new(PromptKind::CaseAnalysis, env, trajectory.episode_id, (0, len), text))
}

/// Renders the reward prompt for the action taken at `timestep`.
pub fn build_reward_prompt(
    env: EnvKind,
    episode_id: u64,
    timestep: usize,
    state: &State,
    action: &Action,
    analysis: &CaseAnalysis,
) -> AdvisorPrompt {
    let guidance = match env {
        EnvKind::Pong => {
            "Actions that bring the racket toward the column where the ball will reach our row should get a \
positive reward; actions that move it away or lose time should get a negative reward. Infer the ball's path from \
its position and velocity."
        }
        EnvKind::HopperLite => {
            "Actions that keep the robot upright and moving forward should get a positive reward; actions that \
drive it toward a fall or waste return should get a negative reward."
        }
    };
    let mut text = String::from(header(env));
    let _ = write!(
        text,
        "\nGeneration instructions
Assign a reward between -1 and 1 to the action our agent took at timeslot {timestep} of episode {episode_id}, \
scaled by how much that action matters. {guidance}

Current step
{}

Case Analysis
{}

Output format
{{reward = <num>, analysis: <your analysis>}}
",
        describe_state_action(env, timestep, state, action),
        if analysis.text.trim().is_empty() { NO_PRIOR_ANALYSIS } else { analysis.text.trim() },
    );
    AdvisorPrompt::new(PromptKind::RewardGeneration, env, episode_id, (timestep, timestep + 1), text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{PongAction, PongState};
    use crate::mdp::Transition;

    fn pong_episode(steps: usize, reason: Option<TerminalReason>) -> Trajectory {
        let mut traj = Trajectory::new(7, 3);
        for t in 0..steps {
            let s = PongState { our_min_x: 36, opp_min_x: 36, ball_x: 40, ball_y: (t % 60) as i32, vx: 1, vy: 1, our_score: 0, opp_score: 0 };
            let a = PongAction::Stay.to_action();
            traj.record(Transition {
                state: s.to_state(),
                policy_action: a.clone(),
                executed_action: a,
                env_reward: 0.0,
                shaped_reward: 0.0,
                next_state: s.to_state(),
                done: false,
                timestep: t,
            })
            .unwrap();
        }
        traj.terminal_reason = reason;
        traj
    }

    fn section_order(text: &str, names: &[&str]) {
        let mut last = 0;
        for n in names {
            let pos = text.find(&format!("{n}\n")).unwrap_or_else(|| panic!("missing section {n}"));
            assert!(pos >= last, "section {n} out of order");
            last = pos;
        }
    }

    #[test]
    fn identification_sections() {
        let traj = pong_episode(60, None);
        let p = build_identification_prompt(EnvKind::Pong, &traj, 0, 50).unwrap();
        section_order(
            &p.rendered_text,
            &["Background", "Components", "Agent objective", "Identification instructions", "Trajectory", "Output format"],
        );
        assert!(p.rendered_text.contains("timeslot 0"));
        assert!(p.rendered_text.contains("timeslot 49:"));
        assert!(!p.rendered_text.contains("timeslot 50:"));
        let again = build_identification_prompt(EnvKind::Pong, &traj, 0, 50).unwrap();
        assert_eq!(p.content_hash, again.content_hash);
        assert_eq!(p.content_hash.len(), 64);
    }

    #[test]
    fn empty_window_rejected() {
        let traj = pong_episode(10, None);
        assert_eq!(
            build_identification_prompt(EnvKind::Pong, &traj, 5, 5),
            Err(AdvisorError::EmptyWindow { begin: 5, end: 5 })
        );
        assert!(build_identification_prompt(EnvKind::Pong, &traj, 5, 11).is_err());
    }

    #[test]
    fn case_analysis_branches() {
        let lost = pong_episode(5, Some(TerminalReason::Failure));
        let won = pong_episode(5, Some(TerminalReason::Goal));
        let a = build_case_analysis_prompt(EnvKind::Pong, &lost, &[]).unwrap();
        let b = build_case_analysis_prompt(EnvKind::Pong, &won, &[]).unwrap();
        assert!(a.rendered_text.contains(ANALYSIS_INSTRUCTIONS));
        assert!(b.rendered_text.contains(ANALYSIS_INSTRUCTIONS));
        assert!(a.rendered_text.contains("Focus: failures"));
        assert!(b.rendered_text.contains("Focus: effective actions"));
        section_order(&a.rendered_text, &["Background", "Components", "Agent objective", "Analysis instructions", "Output format"]);
        let open = pong_episode(5, None);
        assert_eq!(build_case_analysis_prompt(EnvKind::Pong, &open, &[]), Err(AdvisorError::IncompleteEpisode(7)));
    }

    #[test]
    fn reward_prompt_contents() {
        let traj = pong_episode(5, None);
        let tr = &traj.transitions[3];
        let analysis = CaseAnalysis { episode_id: 7, text: String::from("moved late at timeslot 2") };
        let p = build_reward_prompt(EnvKind::Pong, 7, 3, &tr.state, &tr.executed_action, &analysis);
        assert!(p.rendered_text.contains("timeslot 3"));
        assert!(p.rendered_text.contains("reward = <num>"));
        assert!(p.rendered_text.contains("moved late at timeslot 2"));
        section_order(
            &p.rendered_text,
            &["Background", "Components", "Agent objective", "Generation instructions", "Case Analysis", "Output format"],
        );
        let empty = build_reward_prompt(EnvKind::Pong, 7, 3, &tr.state, &tr.executed_action, &CaseAnalysis::empty(7));
        assert!(empty.rendered_text.contains(NO_PRIOR_ANALYSIS));
        let again = build_reward_prompt(EnvKind::Pong, 7, 3, &tr.state, &tr.executed_action, &CaseAnalysis::empty(7));
        assert_eq!(empty.content_hash, again.content_hash);
    }
}
