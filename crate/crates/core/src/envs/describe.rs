//! State interpretation: fixed templates rendering transitions as text.
//!
//! Pong lines look like
//!
//! ```text
//! timeslot 4: our racket {36, 43, 70, 71}, opponent racket {38, 45, 8, 9}, ball {44, 48}, ball velocity {1, 2}, score {0, 0}, action move left, reward 0
//! ```
//!
//! hopper-lite lines list the eleven state fields with 4 decimals, then the
//! torque triple and the reward.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use crate::envs::hopper::{FIELD_LABELS, STATE_DIM};
use crate::envs::pong::{PongAction, PongState};
use crate::mdp::{Action, EnvKind, State, Transition};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateDescription {
    pub timestep: usize,
    pub text: String,
}

fn render_action(action: &Action) -> String {
    match action {
        Action::Discrete { index, .. } => PongAction::from_index(*index)
            .map(|a| String::from(a.name()))
            .unwrap_or_else(|| format!("action#{index}")),
        Action::Continuous(v) => render_vector(v),
    }
}

pub fn render_vector(v: &[f64]) -> String {
    let mut out = String::from("(");
    for (i, x) in v.iter().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        let _ = write!(out, "{x:.4}");
    }
    out.push(')');
    out
}

/// Renders the state part of a line, without action or reward.
pub fn describe_state_only(kind: EnvKind, timestep: usize, state: &State) -> String {
    let mut out = format!("timeslot {timestep}: ");
    match (kind, state) {
        (EnvKind::Pong, State::Grid(_)) => {
            if let Some(p) = PongState::from_state(state) {
                let o = p.our_racket();
                let q = p.opp_racket();
                let _ = write!(
                    out,
                    "our racket {{{}, {}, {}, {}}}, opponent racket {{{}, {}, {}, {}}}, ball {{{}, {}}}, ball velocity {{{}, {}}}, score {{{}, {}}}",
                    o.min_x, o.max_x, o.min_y, o.max_y, q.min_x, q.max_x, q.min_y, q.max_y,
                    p.ball_x, p.ball_y, p.vx, p.vy, p.our_score, p.opp_score
                );
            }
        }
        (_, State::Vector(v)) => {
            for (i, (label, x)) in FIELD_LABELS.iter().zip(v.iter()).enumerate() {
                if i > 0 {
                    out.push_str(", ");
                }
                let _ = write!(out, "{label} {x:.4}");
            }
        }
        (_, State::Grid(g)) => {
            let _ = write!(out, "{g:?}");
        }
    }
    out
}

/// Renders a state together with the action taken in it.
pub fn describe_state_action(kind: EnvKind, timestep: usize, state: &State, action: &Action) -> String {
    let mut out = describe_state_only(kind, timestep, state);
    let _ = write!(out, ", action {}", render_action(action));
    out
}

pub fn describe_state(kind: EnvKind, transition: &Transition) -> StateDescription {
    let mut text = describe_state_action(kind, transition.timestep, &transition.state, &transition.executed_action);
    match kind {
        EnvKind::Pong => {
            let _ = write!(text, ", reward {}", transition.env_reward as i64);
        }
        EnvKind::HopperLite => {
            let _ = write!(text, ", reward {:.4}", transition.env_reward);
        }
    }
    StateDescription { timestep: transition.timestep, text }
}

/// Numeric content of one Pong description line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PongLine {
    pub timestep: usize,
    pub state: PongState,
    pub action: Option<PongAction>,
    pub reward: Option<i64>,
}

fn take_after<'a>(s: &'a str, key: &str) -> Option<&'a str> {
    s.find(key).map(|i| &s[i + key.len()..])
}

fn brace_ints(s: &str) -> Option<(Vec<i64>, &str)> {
    let s = s.trim_start();
    let s = s.strip_prefix('{')?;
    let end = s.find('}')?;
    let nums = s[..end].split(',').map(|t| t.trim().parse::<i64>().ok()).collect::<Option<Vec<_>>>()?;
    Some((nums, &s[end + 1..]))
}

fn leading_uint(s: &str) -> Option<(usize, &str)> {
    let s = s.trim_start();
    let end = s.find(|c: char| !c.is_ascii_digit()).unwrap_or(s.len());
    if end == 0 {
        return None;
    }
    Some((s[..end].parse().ok()?, &s[end..]))
}

/// Parses a line produced by [`describe_state`] (or [`describe_state_action`]) for Pong.
pub fn parse_pong_line(line: &str) -> Option<PongLine> {
    let rest = take_after(line, "timeslot ")?;
    let (timestep, rest) = leading_uint(rest)?;
    let (ours, rest) = brace_ints(take_after(rest, "our racket")?)?;
    let (theirs, rest) = brace_ints(take_after(rest, "opponent racket")?)?;
    let (ball, rest) = brace_ints(take_after(rest, "ball")?)?;
    let (vel, rest) = brace_ints(take_after(rest, "ball velocity")?)?;
    let (score, rest) = brace_ints(take_after(rest, "score")?)?;
    if ours.len() != 4 || theirs.len() != 4 || ball.len() != 2 || vel.len() != 2 || score.len() != 2 {
        return None;
    }
    let state = PongState {
        our_min_x: i32::try_from(ours[0]).ok()?,
        opp_min_x: i32::try_from(theirs[0]).ok()?,
        ball_x: i32::try_from(ball[0]).ok()?,
        ball_y: i32::try_from(ball[1]).ok()?,
        vx: i32::try_from(vel[0]).ok()?,
        vy: i32::try_from(vel[1]).ok()?,
        our_score: u32::try_from(score[0]).ok()?,
        opp_score: u32::try_from(score[1]).ok()?,
    };
    let (action, rest) = match take_after(rest, ", action ") {
        Some(r) => {
            let end = r.find(',').unwrap_or(r.len());
            (Some(PongAction::parse(&r[..end])?), &r[end..])
        }
        None => (None, rest),
    };
    let reward = match take_after(rest, ", reward ") {
        Some(r) => {
            let r = r.trim();
            let end = r.find(|c: char| !(c.is_ascii_digit() || c == '-')).unwrap_or(r.len());
            Some(r[..end].parse().ok()?)
        }
        None => None,
    };
    Some(PongLine { timestep, state, action, reward })
}

#[derive(Debug, Clone, PartialEq)]
pub struct HopperLine {
    pub timestep: usize,
    pub state: Vec<f64>,
    pub action: Option<Vec<f64>>,
    pub reward: Option<f64>,
}

fn leading_float(s: &str) -> Option<(f64, &str)> {
    let s = s.trim_start();
    let end = s
        .find(|c: char| !(c.is_ascii_digit() || c == '-' || c == '+' || c == '.' || c == 'e' || c == 'E'))
        .unwrap_or(s.len());
    Some((s[..end].parse().ok()?, &s[end..]))
}

/// Parses a hopper-lite line; values carry the rendered 4-decimal precision.
pub fn parse_hopper_line(line: &str) -> Option<HopperLine> {
    let rest = take_after(line, "timeslot ")?;
    let (timestep, mut rest) = leading_uint(rest)?;
    let mut state = Vec::with_capacity(STATE_DIM);
    for label in FIELD_LABELS {
        // Labels are matched with a trailing space so "hip angle" does not
        // swallow "hip angular velocity".
        let key = format!("{label} ");
        let idx = rest.find(key.as_str())?;
        let (x, r) = leading_float(&rest[idx + key.len()..])?;
        state.push(x);
        rest = r;
    }
    let action = match take_after(rest, "action (") {
        Some(r) => {
            let end = r.find(')')?;
            let v = r[..end].split(',').map(|t| t.trim().parse::<f64>().ok()).collect::<Option<Vec<_>>>()?;
            rest = &r[end + 1..];
            Some(v)
        }
        None => None,
    };
    let reward = take_after(rest, "reward ").and_then(|r| leading_float(r)).map(|(x, _)| x);
    Some(HopperLine { timestep, state, action, reward })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::pong::PongAction;
    use alloc::vec;
    use proptest::prelude::*;

    fn pong_transition(t: usize, s: PongState, a: PongAction, r: f64) -> Transition {
        Transition {
            state: s.to_state(),
            policy_action: a.to_action(),
            executed_action: a.to_action(),
            env_reward: r,
            shaped_reward: r,
            next_state: s.to_state(),
            done: false,
            timestep: t,
        }
    }

    fn start() -> PongState {
        PongState { our_min_x: 36, opp_min_x: 36, ball_x: 40, ball_y: 40, vx: 1, vy: 2, our_score: 0, opp_score: 0 }
    }

    #[test]
    fn pong_template_exact() {
        let d = describe_state(EnvKind::Pong, &pong_transition(0, start(), PongAction::Stay, 0.0));
        assert_eq!(
            d.text,
            "timeslot 0: our racket {36, 43, 70, 71}, opponent racket {36, 43, 8, 9}, ball {40, 40}, \
             ball velocity {1, 2}, score {0, 0}, action stay, reward 0"
        );
        let again = describe_state(EnvKind::Pong, &pong_transition(0, start(), PongAction::Stay, 0.0));
        assert_eq!(d, again);
    }

    #[test]
    fn hopper_fields_in_order() {
        let v: Vec<f64> = (0..11).map(|i| i as f64 * 0.5).collect();
        let t = Transition {
            state: State::Vector(v.clone()),
            policy_action: Action::Continuous(vec![0.1, -0.2, 0.3]),
            executed_action: Action::Continuous(vec![0.1, -0.2, 0.3]),
            env_reward: 1.5,
            shaped_reward: 1.5,
            next_state: State::Vector(v.clone()),
            done: false,
            timestep: 3,
        };
        let d = describe_state(EnvKind::HopperLite, &t);
        let mut last = 0;
        for label in FIELD_LABELS {
            let pos = d.text.find(&format!("{label} ")).unwrap();
            assert!(pos >= last, "{label} out of order");
            last = pos;
        }
        assert!(d.text.starts_with("timeslot 3: torso x 0.0000, torso height 0.5000"));
        assert!(d.text.ends_with("action (0.1000, -0.2000, 0.3000), reward 1.5000"));
        let parsed = parse_hopper_line(&d.text).unwrap();
        assert_eq!(parsed.state, v);
        assert_eq!(parsed.action, Some(vec![0.1, -0.2, 0.3]));
        assert_eq!(parsed.reward, Some(1.5));
    }

    proptest! {
        #[test]
        fn pong_line_round_trip(t in 0usize..5000, our in 0i32..=73, opp in 0i32..=73,
                                x in 0i32..=80, y in 0i32..=80, vx in -2i32..=2, vy in -2i32..=2,
                                sc in 0u32..21, so in 0u32..21, a in 0usize..3, r in -1i64..=1) {
            let s = PongState { our_min_x: our, opp_min_x: opp, ball_x: x, ball_y: y, vx, vy, our_score: sc, opp_score: so };
            let act = PongAction::from_index(a).unwrap();
            let d = describe_state(EnvKind::Pong, &pong_transition(t, s, act, r as f64));
            let line = parse_pong_line(&d.text).unwrap();
            prop_assert_eq!(line, PongLine { timestep: t, state: s, action: Some(act), reward: Some(r) });
        }
    }
}
