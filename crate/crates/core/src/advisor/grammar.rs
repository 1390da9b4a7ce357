//! Response grammar.
//!
//! Identification records look like
//! `{timeslot 12, critical, move left, ball incoming}`; the third field may be
//! `<none>`, a Pong action word, or a bracketed torque vector, and may be left
//! out entirely. Reward responses carry `reward = <num>` somewhere in free
//! text, optionally followed by `analysis: <text>`.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::Write;

use super::{AdvisorError, CaseAnalysis, CriticalAnnotation, RewardJudgment};
use crate::envs::PongAction;
use crate::mdp::Action;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Identification {
    pub annotations: Vec<CriticalAnnotation>,
    pub warnings: Vec<String>,
}

fn render_action(action: &Option<Action>) -> String {
    match action {
        None => String::from("<none>"),
        Some(Action::Discrete { index, .. }) => PongAction::from_index(*index)
            .map(|a| String::from(a.name()))
            .unwrap_or_else(|| String::from("<none>")),
        Some(Action::Continuous(v)) => {
            let mut s = String::from("(");
            for (i, x) in v.iter().enumerate() {
                if i > 0 {
                    s.push_str(", ");
                }
                let _ = write!(s, "{x}");
            }
            s.push(')');
            s
        }
    }
}

/// Braces inside explanations would end the record early.
fn sanitize(text: &str) -> String {
    text.replace('{', "(").replace('}', ")")
}

pub fn render_annotation(a: &CriticalAnnotation) -> String {
    format!(
        "{{timeslot {}, {}, {}, {}}}",
        a.timeslot,
        if a.critical { "critical" } else { "not critical" },
        render_action(&a.corrected_action),
        sanitize(a.explanation.trim())
    )
}

/// One record per line.
pub fn render_annotations(annotations: &[CriticalAnnotation]) -> String {
    let mut out = String::new();
    for a in annotations {
        out.push_str(&render_annotation(a));
        out.push('\n');
    }
    out
}

fn matching_close(s: &str, open: char, close: char) -> Option<usize> {
    let mut depth = 0usize;
    for (i, c) in s.char_indices() {
        if c == open {
            depth += 1;
        } else if c == close {
            depth = depth.checked_sub(1)?;
            if depth == 0 {
                return Some(i);
            }
        }
    }
    None
}

fn strip_decoration(s: &str) -> String {
    s.trim().trim_matches(|c: char| matches!(c, '<' | '>' | '*' | '`' | '"' | '\'')).trim().to_ascii_lowercase()
}

fn parse_critical(field: &str) -> Option<bool> {
    match strip_decoration(field).as_str() {
        "critical" => Some(true),
        "not critical" | "not-critical" | "noncritical" | "non-critical" | "uncritical" => Some(false),
        _ => None,
    }
}

enum Slot {
    None,
    Action(Action),
}

fn parse_vector(inner: &str) -> Option<Vec<f64>> {
    let v = inner.split(',').map(|t| t.trim().parse::<f64>().ok()).collect::<Option<Vec<_>>>()?;
    if v.is_empty() || v.iter().any(|x| !x.is_finite()) {
        return None;
    }
    Some(v)
}

fn parse_slot(field: &str) -> Option<Slot> {
    let word = strip_decoration(field);
    match word.as_str() {
        "none" | "n/a" | "-" | "" => return Some(Slot::None),
        _ => {}
    }
    PongAction::parse(&word).map(|a| Slot::Action(a.to_action()))
}

/// Splits off the third field. Returns the slot and the remaining text, or
/// `None` when the field is not an action (it is then explanation text).
fn split_slot(rest: &str) -> Option<(Slot, &str)> {
    let trimmed = rest.trim_start();
    let first = trimmed.chars().next()?;
    if first == '(' || first == '[' {
        let close = if first == '(' { ')' } else { ']' };
        let end = matching_close(trimmed, first, close)?;
        let v = parse_vector(&trimmed[1..end])?;
        let after = trimmed[end + 1..].trim_start();
        let after = match after.strip_prefix(',') {
            Some(a) => a,
            None if after.is_empty() => after,
            None => return None,
        };
        return Some((Slot::Action(Action::Continuous(v)), after));
    }
    let (field, after) = match trimmed.find(',') {
        Some(i) => (&trimmed[..i], &trimmed[i + 1..]),
        None => (trimmed, ""),
    };
    parse_slot(field).map(|s| (s, after))
}

fn parse_record(body: &str) -> Option<(usize, bool, Option<Action>, String)> {
    let body = body.trim_start();
    let lower = body.get(..8)?.to_ascii_lowercase();
    if lower != "timeslot" && lower != "timestep" {
        return None;
    }
    let rest = body[8..].trim_start();
    let digits = rest.find(|c: char| !c.is_ascii_digit()).unwrap_or(rest.len());
    if digits == 0 {
        return None;
    }
    let t: usize = rest[..digits].parse().ok()?;
    let rest = rest[digits..].trim_start().strip_prefix(',')?;
    let (crit_field, rest) = match rest.find(',') {
        Some(i) => (&rest[..i], &rest[i + 1..]),
        None => (rest, ""),
    };
    let critical = parse_critical(crit_field)?;
    let (action, explanation) = match split_slot(rest) {
        Some((Slot::None, after)) => (None, after),
        Some((Slot::Action(a), after)) => (Some(a), after),
        None => (None, rest),
    };
    Some((t, critical, action, explanation.trim().to_string()))
}

/// Extracts all well-formed identification records. Records outside
/// `window` are dropped with a warning.
pub fn parse_identification(text: &str, window: (usize, usize)) -> Result<Identification, AdvisorError> {
    let mut out = Identification::default();
    let mut found = 0usize;
    let mut pos = 0usize;
    while let Some(off) = text[pos..].find('{') {
        let start = pos + off;
        let Some(close) = matching_close(&text[start..], '{', '}') else {
            pos = start + 1;
            continue;
        };
        let body = &text[start + 1..start + close];
        let Some((t, critical, mut action, explanation)) = parse_record(body) else {
            pos = start + 1;
            continue;
        };
        pos = start + close + 1;
        found += 1;
        if t < window.0 || t >= window.1 {
            out.warnings.push(format!("timeslot {t} outside window [{}, {}), dropped", window.0, window.1));
            continue;
        }
        if !critical && action.is_some() {
            out.warnings.push(format!("timeslot {t}: action on a non-critical record ignored"));
            action = None;
        }
        if let Some(Action::Continuous(v)) = &mut action {
            if v.iter().any(|x| !(-1.0..=1.0).contains(x)) {
                out.warnings.push(format!("timeslot {t}: corrected torques clamped to [-1, 1]"));
                v.iter_mut().for_each(|x| *x = x.clamp(-1.0, 1.0));
            }
        }
        out.annotations.push(CriticalAnnotation { timeslot: t, critical, corrected_action: action, explanation });
    }
    if found == 0 {
        return Err(AdvisorError::Parse);
    }
    Ok(out)
}

fn find_ci(haystack: &str, needle: &str, from: usize) -> Option<usize> {
    let h = haystack.as_bytes();
    let n = needle.as_bytes();
    if n.len() > h.len() {
        return None;
    }
    (from..=h.len() - n.len()).find(|&i| h[i..i + n.len()].eq_ignore_ascii_case(n))
}

fn skip_decoration(s: &str) -> &str {
    s.trim_start_matches(|c: char| c.is_whitespace() || matches!(c, '`' | '*' | '_'))
}

fn leading_number(s: &str) -> Option<f64> {
    let b = s.as_bytes();
    let mut i = 0;
    if i < b.len() && (b[i] == b'-' || b[i] == b'+') {
        i += 1;
    }
    let int_start = i;
    while i < b.len() && b[i].is_ascii_digit() {
        i += 1;
    }
    let mut digits = i - int_start;
    if i < b.len() && b[i] == b'.' {
        i += 1;
        let frac = i;
        while i < b.len() && b[i].is_ascii_digit() {
            i += 1;
        }
        digits += i - frac;
    }
    if digits == 0 {
        return None;
    }
    if i < b.len() && (b[i] == b'e' || b[i] == b'E') {
        let mut j = i + 1;
        if j < b.len() && (b[j] == b'-' || b[j] == b'+') {
            j += 1;
        }
        let exp = j;
        while j < b.len() && b[j].is_ascii_digit() {
            j += 1;
        }
        if j > exp {
            i = j;
        }
    }
    s[..i].parse::<f64>().ok().filter(|x| x.is_finite())
}

/// Extracts the first `reward = <num>` (also `reward: <num>`, with optional
/// markdown decoration) and the text after `analysis:`. Out-of-range values
/// are clamped to [-1, 1].
pub fn parse_reward(text: &str, timeslot: usize) -> Result<RewardJudgment, AdvisorError> {
    let mut from = 0;
    let mut value = None;
    while let Some(i) = find_ci(text, "reward", from) {
        from = i + 6;
        let rest = skip_decoration(&text[from..]);
        let Some(rest) = rest.strip_prefix('=').or_else(|| rest.strip_prefix(':')) else {
            continue;
        };
        if let Some(x) = leading_number(skip_decoration(rest)) {
            value = Some(x);
            break;
        }
    }
    let raw = value.ok_or(AdvisorError::MissingReward)?;
    let reward = raw.clamp(-1.0, 1.0);
    let clamped_from = if reward == raw { None } else { Some(raw) };

    let mut analysis = None;
    let mut from = 0;
    while let Some(i) = find_ci(text, "analysis", from) {
        from = i + 8;
        if let Some(rest) = skip_decoration(&text[from..]).strip_prefix(':') {
            analysis = Some(rest.trim().trim_end_matches('}').trim().to_string());
            break;
        }
    }
    let mut analysis = analysis.unwrap_or_else(|| text.trim().to_string());
    if analysis.is_empty() {
        analysis = String::from("no analysis given");
    }
    Ok(RewardJudgment { timeslot, reward, analysis, clamped_from })
}

pub fn render_reward(reward: f64, analysis: &str) -> String {
    format!("{{reward = {reward}, analysis: {}}}", sanitize(analysis.trim()))
}

/// A case analysis is the trimmed response; it must not be empty.
pub fn parse_case_analysis(text: &str, episode_id: u64) -> Result<CaseAnalysis, AdvisorError> {
    let text = text.trim();
    if text.is_empty() {
        return Err(AdvisorError::Parse);
    }
    Ok(CaseAnalysis { episode_id, text: text.to_string() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    #[test]
    fn critical_record_with_action() {
        let r = parse_identification("{timeslot 12, critical, move left, ball incoming}", (0, 50)).unwrap();
        assert_eq!(
            r.annotations,
            vec![CriticalAnnotation {
                timeslot: 12,
                critical: true,
                corrected_action: Some(PongAction::MoveLeft.to_action()),
                explanation: "ball incoming".into(),
            }]
        );
    }

    #[test]
    fn non_critical_none() {
        let r = parse_identification("{timeslot 5, not critical, <none>, free step}", (0, 50)).unwrap();
        assert_eq!(r.annotations[0], CriticalAnnotation {
            timeslot: 5,
            critical: false,
            corrected_action: None,
            explanation: "free step".into(),
        });
    }

    #[test]
    fn three_field_record_and_case() {
        let r = parse_identification("{Timeslot 3, CRITICAL, racket already aligned}", (0, 10)).unwrap();
        assert_eq!(r.annotations[0].corrected_action, None);
        assert_eq!(r.annotations[0].explanation, "racket already aligned");
    }

    #[test]
    fn garbled_is_parse_error() {
        assert_eq!(parse_identification("garbled text with no braces", (0, 10)), Err(AdvisorError::Parse));
        assert_eq!(parse_identification("{36, 43, 70, 71}", (0, 10)), Err(AdvisorError::Parse));
    }

    #[test]
    fn out_of_window_dropped() {
        let r = parse_identification("{timeslot 3, critical, stay, a} {timeslot 60, critical, stay, b}", (0, 50)).unwrap();
        assert_eq!(r.annotations.len(), 1);
        assert_eq!(r.warnings.len(), 1);
    }

    #[test]
    fn vector_slot_clamped() {
        let r = parse_identification("{timeslot 2, critical, (0.5, 1.5, -3), leaning}", (0, 10)).unwrap();
        assert_eq!(r.annotations[0].corrected_action, Some(Action::Continuous(vec![0.5, 1.0, -1.0])));
        assert_eq!(r.annotations[0].explanation, "leaning");
        assert_eq!(r.warnings.len(), 1);
    }

    #[test]
    fn nested_braces_in_explanation() {
        let r = parse_identification("{timeslot 4, critical, move right, ball at {52, 69}}", (0, 10)).unwrap();
        assert_eq!(r.annotations[0].explanation, "ball at {52, 69}");
    }

    #[test]
    fn reward_appendix_style() {
        let text = "First, the ball is moving away.\n**Reward Justification:** the move is harmful.\n\
                    **Final decision**:\n`reward` = -0.8\n\nThe action misaligns the racket.";
        let j = parse_reward(text, 4).unwrap();
        assert_eq!(j.reward, -0.8);
        assert_eq!(j.clamped_from, None);
        assert!(!j.analysis.is_empty());
    }

    #[test]
    fn reward_clamped() {
        let j = parse_reward("{reward = 1.5, analysis: x}", 0).unwrap();
        assert_eq!(j.reward, 1.0);
        assert_eq!(j.clamped_from, Some(1.5));
        assert_eq!(j.analysis, "x");
    }

    #[test]
    fn reward_missing() {
        assert_eq!(parse_reward("{analysis: no number}", 0), Err(AdvisorError::MissingReward));
        assert_eq!(parse_reward("reward = high", 0), Err(AdvisorError::MissingReward));
    }

    #[test]
    fn reward_round_trip() {
        let j = parse_reward(&render_reward(-0.25, "moved {away}"), 1).unwrap();
        assert_eq!(j.reward, -0.25);
        assert_eq!(j.analysis, "moved (away)");
    }

    fn annotation() -> impl Strategy<Value = CriticalAnnotation> {
        let action = prop_oneof![
            Just(None),
            (0usize..3).prop_map(|i| Some(PongAction::from_index(i).unwrap().to_action())),
            prop::collection::vec(-1.0f64..=1.0, 3).prop_map(|v| Some(Action::Continuous(v))),
        ];
        (0usize..1000, any::<bool>(), action, "[a-zA-Z0-9 ,.;:()<>'-]{0,40}").prop_map(|(t, c, a, e)| {
            CriticalAnnotation {
                timeslot: t,
                critical: c,
                corrected_action: if c { a } else { None },
                explanation: e.trim().to_string(),
            }
        })
    }

    proptest! {
        #[test]
        fn render_parse_identity(list in prop::collection::vec(annotation(), 1..8)) {
            let text = render_annotations(&list);
            let parsed = parse_identification(&text, (0, 1000)).unwrap();
            prop_assert_eq!(parsed.annotations, list);
        }

        #[test]
        fn parsers_total(bytes in prop::collection::vec(any::<u8>(), 0..200)) {
            let s = String::from_utf8_lossy(&bytes);
            let _ = parse_identification(&s, (0, 100));
            if let Ok(j) = parse_reward(&s, 0) {
                prop_assert!((-1.0..=1.0).contains(&j.reward));
            }
        }
    }
}
