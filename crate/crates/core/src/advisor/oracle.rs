//! Deterministic scripted advisor.
//!
//! It reads the state lines out of the rendered prompt and answers in the
//! same grammar an LLM is asked for. On Pong it simulates the ball forward to
//! the column where it reaches our row and judges each action by whether it
//! brings the racket closer to covering that column. On hopper-lite it flags
//! states near the height or pitch limits and suggests a restoring torque.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use serde::{Deserialize, Serialize};

use super::client::{Backend, BackendError};
use super::grammar::{render_annotations, render_reward};
use super::prompt::{AdvisorPrompt, PromptKind};
use super::CriticalAnnotation;
use crate::envs::describe::{parse_hopper_line, parse_pong_line};
use crate::envs::hopper::{idx, MAX_PITCH, MIN_HEIGHT};
use crate::envs::pong::{advance_x, PongAction, PongState, MAX_MIN_X, OUR_CONTACT_Y, RACKET_WIDTH};
use crate::mdp::{Action, EnvKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleParams {
    /// Incoming-ball states at most this many steps from arrival are critical,
    /// as are states whose intercept is out of reach.
    pub critical_horizon: u32,
    /// Racket cells per move; must match the environment.
    pub move_step: i32,
    pub height_margin: f64,
    pub pitch_margin: f64,
    /// Torque suggestions are made when the cosine between the taken and the
    /// restoring torque falls below this.
    pub alignment_threshold: f64,
}

impl Default for OracleParams {
    fn default() -> Self {
        Self { critical_horizon: 12, move_step: 2, height_margin: 0.15, pitch_margin: 0.2, alignment_threshold: 0.5 }
    }
}

/// Column at which an incoming ball reaches our contact row, and the number
/// of steps until it does.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Intercept {
    pub column: i32,
    pub steps: u32,
}

/// `None` unless the ball moves toward our racket.
pub fn pong_intercept(state: &PongState) -> Option<Intercept> {
    if state.vy <= 0 {
        return None;
    }
    let (mut x, mut vx, mut y) = (state.ball_x, state.vx, state.ball_y);
    let mut steps = 0;
    loop {
        let (nx, nvx) = advance_x(x, vx);
        x = nx;
        vx = nvx;
        y += state.vy;
        steps += 1;
        if y >= OUR_CONTACT_Y {
            return Some(Intercept { column: x, steps });
        }
    }
}

/// Cells our racket must still travel before its span covers `column`.
pub fn covering_distance(min_x: i32, column: i32) -> i32 {
    let lo = (column - (RACKET_WIDTH - 1)).max(0);
    let hi = column.min(MAX_MIN_X);
    if min_x < lo {
        lo - min_x
    } else if min_x > hi {
        min_x - hi
    } else {
        0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PongJudgment {
    pub critical: bool,
    /// Best action by distance after the move; stay wins ties.
    pub best: PongAction,
    /// Set when the taken action is worse than `best` at a critical state
    /// from which the intercept is still reachable.
    pub corrected: Option<PongAction>,
    pub reward: f64,
    pub explanation: String,
}

fn distance_after(state: &PongState, action: PongAction, column: i32, step: i32) -> i32 {
    let min = (state.our_min_x + action.direction() * step).clamp(0, MAX_MIN_X);
    covering_distance(min, column)
}

pub fn judge_pong(state: &PongState, action: PongAction, params: &OracleParams) -> PongJudgment {
    let Some(hit) = pong_intercept(state) else {
        return PongJudgment {
            critical: false,
            best: action,
            corrected: None,
            reward: 0.0,
            explanation: String::from("ball moving toward the opponent, the move does not matter yet"),
        };
    };
    let step = params.move_step;
    let before = covering_distance(state.our_min_x, hit.column);
    let candidates = [PongAction::Stay, PongAction::MoveLeft, PongAction::MoveRight];
    let mut best = PongAction::Stay;
    let mut best_d = distance_after(state, best, hit.column, step);
    for a in &candidates[1..] {
        let d = distance_after(state, *a, hit.column, step);
        if d < best_d {
            best = *a;
            best_d = d;
        }
    }
    let taken = distance_after(state, action, hit.column, step);
    let improper = taken > best_d;
    let unreachable = i64::from(before) > i64::from(hit.steps) * i64::from(step);
    // Far from arrival a wrong move can still be undone, so only the last
    // `critical_horizon` steps count, plus states that are already lost.
    let critical = unreachable || hit.steps <= params.critical_horizon;
    let progress = before - taken;
    let reward = if progress != 0 {
        (f64::from(progress) / f64::from(step)).clamp(-1.0, 1.0)
    } else if taken == 0 {
        0.5
    } else {
        -0.5
    };
    let mut explanation = format!(
        "ball arrives at column {} in {} steps, racket needs {} more cells",
        hit.column, hit.steps, before
    );
    if improper {
        let _ = write!(explanation, "; {} leaves it {} cells away, {} leaves {}", action.name(), taken, best.name(), best_d);
    }
    PongJudgment {
        critical,
        best,
        corrected: if critical && improper && !unreachable { Some(best) } else { None },
        reward,
        explanation,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HopperJudgment {
    pub critical: bool,
    pub restoring: Vec<f64>,
    pub corrected: Option<Vec<f64>>,
    pub reward: f64,
    pub explanation: String,
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn judge_hopper(state: &[f64], action: &[f64], params: &OracleParams) -> HopperJudgment {
    let height = state[idx::HEIGHT];
    let pitch = state[idx::PITCH];
    let low = height < MIN_HEIGHT + params.height_margin;
    let tilted = pitch.abs() > MAX_PITCH - params.pitch_margin;
    let lean = sign(pitch + 0.5 * state[idx::PITCH_VEL]);
    let restoring = alloc::vec![
        if tilted { -0.5 * lean } else { 0.0 },
        if low { 1.0 } else { 0.0 },
        if tilted { -lean } else { 0.0 },
    ];
    let critical = low || tilted;
    let norm = |v: &[f64]| libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
    let (na, nr) = (norm(action), norm(&restoring));
    let cosine = if na > 0.0 && nr > 0.0 {
        action.iter().zip(&restoring).map(|(a, r)| a * r).sum::<f64>() / (na * nr)
    } else {
        0.0
    };
    let reward = if critical { cosine.clamp(-1.0, 1.0) } else { 0.0 };
    let corrected = if critical && nr > 0.0 && cosine < params.alignment_threshold { Some(restoring.clone()) } else { None };
    let explanation = if critical {
        format!("height {height:.3}, pitch {pitch:.3} near the limits; torque alignment {cosine:.2}")
    } else {
        String::from("height and pitch well inside the limits")
    };
    HopperJudgment { critical, restoring, corrected, reward, explanation }
}

/// A parsed prompt line: timestep, judgment as annotation, and reward.
fn judge_line(env: EnvKind, line: &str, params: &OracleParams) -> Option<(CriticalAnnotation, f64)> {
    match env {
        EnvKind::Pong => {
            let l = parse_pong_line(line)?;
            let j = judge_pong(&l.state, l.action?, params);
            Some((
                CriticalAnnotation {
                    timeslot: l.timestep,
                    critical: j.critical,
                    corrected_action: j.corrected.map(PongAction::to_action),
                    explanation: j.explanation,
                },
                j.reward,
            ))
        }
        EnvKind::HopperLite => {
            let l = parse_hopper_line(line)?;
            let action = l.action?;
            if l.state.len() != crate::envs::hopper::STATE_DIM {
                return None;
            }
            let j = judge_hopper(&l.state, &action, params);
            Some((
                CriticalAnnotation {
                    timeslot: l.timestep,
                    critical: j.critical,
                    corrected_action: j.corrected.map(Action::Continuous),
                    explanation: j.explanation,
                },
                j.reward,
            ))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleBackend {
    pub env: EnvKind,
    pub params: OracleParams,
}

impl OracleBackend {
    pub fn new(env: EnvKind, params: OracleParams) -> Self {
        Self { env, params }
    }

    fn judged_lines(&self, prompt: &AdvisorPrompt) -> Vec<(CriticalAnnotation, f64)> {
        let (begin, end) = prompt.window;
        prompt
            .rendered_text
            .lines()
            .filter(|l| l.starts_with("timeslot "))
            .filter_map(|l| judge_line(self.env, l, &self.params))
            .filter(|(a, _)| a.timeslot >= begin && a.timeslot < end)
            .collect()
    }

    pub fn respond(&self, prompt: &AdvisorPrompt) -> Result<String, BackendError> {
        if prompt.env != self.env {
            return Err(BackendError::UnsupportedEnv(prompt.env));
        }
        let judged = self.judged_lines(prompt);
        match prompt.kind {
            PromptKind::Identification => {
                let list: Vec<CriticalAnnotation> = judged.into_iter().map(|(a, _)| a).collect();
                Ok(render_annotations(&list))
            }
            PromptKind::CaseAnalysis => {
                let mut out = String::new();
                let mut improper = Vec::new();
                let mut effective = Vec::new();
                for (a, r) in &judged {
                    if a.critical {
                        let _ = writeln!(out, "{{timeslot {}, critical}}", a.timeslot);
                        if a.corrected_action.is_some() {
                            improper.push(a.timeslot);
                        } else if *r > 0.0 {
                            effective.push(a.timeslot);
                        }
                    }
                }
                let _ = write!(
                    out,
                    "Critical timeslots: {}. Improper actions at {} critical timeslots{}. Effective actions at {} critical timeslots. \
                     Actions that close the distance to the arrival point deserve positive reward; actions that widen it deserve negative reward.",
                    judged.iter().filter(|(a, _)| a.critical).count(),
                    improper.len(),
                    match improper.first() {
                        Some(t) => format!(", first at timeslot {t}"),
                        None => String::new(),
                    },
                    effective.len(),
                );
                Ok(out)
            }
            PromptKind::RewardGeneration => match judged.first() {
                Some((a, r)) => Ok(render_reward(*r, &a.explanation)),
                None => Err(BackendError::Fatal(String::from("reward prompt has no readable state line"))),
            },
        }
    }
}

impl Backend for OracleBackend {
    fn name(&self) -> &str {
        "oracle"
    }

    fn complete(&mut self, prompt: &AdvisorPrompt) -> Result<String, BackendError> {
        self.respond(prompt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::advisor::grammar::{parse_identification, parse_reward};
    use crate::advisor::prompt::{build_identification_prompt, build_reward_prompt};
    use crate::advisor::CaseAnalysis;
    use crate::mdp::{Trajectory, Transition};

    fn st(our: i32, x: i32, y: i32, vx: i32, vy: i32) -> PongState {
        PongState { our_min_x: our, opp_min_x: 36, ball_x: x, ball_y: y, vx, vy, our_score: 0, opp_score: 0 }
    }

    #[test]
    fn intercept_matches_straight_line() {
        let hit = pong_intercept(&st(0, 52, 61, 0, 2)).unwrap();
        assert_eq!(hit, Intercept { column: 52, steps: 4 });
        assert!(pong_intercept(&st(0, 52, 61, 0, -2)).is_none());
    }

    #[test]
    fn covering_distance_examples() {
        assert_eq!(covering_distance(52, 52), 0);
        assert_eq!(covering_distance(45, 52), 0);
        assert_eq!(covering_distance(60, 52), 8);
        assert_eq!(covering_distance(40, 52), 5);
        assert_eq!(covering_distance(73, 80), 0);
    }

    #[test]
    fn outgoing_ball_never_critical() {
        for our in [0, 20, 60] {
            for a in [PongAction::Stay, PongAction::MoveLeft, PongAction::MoveRight] {
                assert!(!judge_pong(&st(our, 30, 40, 1, -2), a, &OracleParams::default()).critical);
            }
        }
    }

    #[test]
    fn wrong_direction_corrected() {
        // Intercept at 52; racket {60, 67} moving right drifts away.
        let j = judge_pong(&st(60, 52, 61, 0, 2), PongAction::MoveRight, &OracleParams::default());
        assert!(j.critical);
        assert_eq!(j.corrected, Some(PongAction::MoveLeft));
        assert!(j.reward < 0.0);
    }

    #[test]
    fn early_wrong_move_not_critical() {
        // Ball at row 21 moving 2 rows a step: 24 steps out, 8 cells to cover.
        let j = judge_pong(&st(60, 52, 21, 0, 2), PongAction::MoveRight, &OracleParams::default());
        assert!(!j.critical);
        assert_eq!(j.corrected, None);
        assert!(j.reward < 0.0);
    }

    #[test]
    fn lost_point_critical_without_suggestion() {
        let j = judge_pong(&st(0, 52, 65, 0, 2), PongAction::Stay, &OracleParams::default());
        assert!(j.critical);
        assert_eq!(j.corrected, None);
    }

    #[test]
    fn covered_and_staying() {
        let j = judge_pong(&st(48, 52, 61, 0, 2), PongAction::Stay, &OracleParams::default());
        assert!(j.critical);
        assert_eq!(j.corrected, None);
        assert!(j.reward > 0.0);
    }

    #[test]
    fn hopper_low_height_suggests_knee() {
        let mut s = alloc::vec![0.0; 11];
        s[idx::HEIGHT] = 0.75;
        let j = judge_hopper(&s, &[0.0, -1.0, 0.0], &OracleParams::default());
        assert!(j.critical);
        assert_eq!(j.corrected, Some(alloc::vec![0.0, 1.0, 0.0]));
        assert!(j.reward < 0.0);
        s[idx::HEIGHT] = 1.25;
        assert!(!judge_hopper(&s, &[0.0, -1.0, 0.0], &OracleParams::default()).critical);
    }

    fn pong_traj(states: &[(PongState, PongAction)]) -> Trajectory {
        let mut t = Trajectory::new(0, 0);
        for (i, (s, a)) in states.iter().enumerate() {
            t.record(Transition {
                state: s.to_state(),
                policy_action: a.to_action(),
                executed_action: a.to_action(),
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

    #[test]
    fn identification_response_parses() {
        let traj = pong_traj(&[
            (st(60, 52, 61, 0, 2), PongAction::MoveRight),
            (st(30, 30, 40, 1, -2), PongAction::Stay),
        ]);
        let p = build_identification_prompt(EnvKind::Pong, &traj, 0, 2).unwrap();
        let mut o = OracleBackend::new(EnvKind::Pong, OracleParams::default());
        let text = o.complete(&p).unwrap();
        let parsed = parse_identification(&text, (0, 2)).unwrap();
        assert_eq!(parsed.annotations.len(), 2);
        assert!(parsed.annotations[0].critical);
        assert_eq!(parsed.annotations[0].corrected_action, Some(PongAction::MoveLeft.to_action()));
        assert!(!parsed.annotations[1].critical);
    }

    #[test]
    fn reward_response_parses() {
        let s = st(48, 52, 61, 0, 2);
        let p = build_reward_prompt(EnvKind::Pong, 0, 9, &s.to_state(), &PongAction::Stay.to_action(), &CaseAnalysis::empty(0));
        let text = OracleBackend::new(EnvKind::Pong, OracleParams::default()).respond(&p).unwrap();
        assert_eq!(parse_reward(&text, 9).unwrap().reward, 0.5);
    }

    #[test]
    fn env_mismatch_unsupported() {
        let s = st(48, 52, 61, 0, 2);
        let p = build_reward_prompt(EnvKind::Pong, 0, 0, &s.to_state(), &PongAction::Stay.to_action(), &CaseAnalysis::empty(0));
        let mut o = OracleBackend::new(EnvKind::HopperLite, OracleParams::default());
        assert_eq!(o.complete(&p), Err(BackendError::UnsupportedEnv(EnvKind::Pong)));
    }
}
