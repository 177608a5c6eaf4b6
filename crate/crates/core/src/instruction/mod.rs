//! Human instructions: types, command lexicon, lifetime and the
//! spatial-aware instruction encoder.

pub mod encoder;
pub mod prompt;

use serde::{Deserialize, Serialize};

pub use encoder::{arrowing_features, fourier_pe, InstructionEncoder, SieConfig};
pub use prompt::render_visual_prompt;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum InstructionError {
    #[error("unknown command {phrase:?}; did you mean {suggestions:?}")]
    UnknownCommand { phrase: String, suggestions: Vec<String> },
    #[error("drafting needs at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("drafting point {index} ({u}, {v}) outside the unit square")]
    PointOutOfBounds { index: usize, u: f64, v: f64 },
    #[error("non-finite instruction value")]
    NonFinite,
}

/// The 16-entry texting lexicon.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    GoStraight,
    TurnLeft,
    TurnRight,
    SlowDown,
    SpeedUp,
    Stop,
    AvoidObstacle,
    KeepLeft,
    KeepRight,
    GoAroundLeft,
    GoAroundRight,
    MoveBackward,
    Wait,
    FollowTheSidewalk,
    VeerLeft,
    VeerRight,
}

impl Command {
    pub const ALL: [Command; 16] = [
        Command::GoStraight,
        Command::TurnLeft,
        Command::TurnRight,
        Command::SlowDown,
        Command::SpeedUp,
        Command::Stop,
        Command::AvoidObstacle,
        Command::KeepLeft,
        Command::KeepRight,
        Command::GoAroundLeft,
        Command::GoAroundRight,
        Command::MoveBackward,
        Command::Wait,
        Command::FollowTheSidewalk,
        Command::VeerLeft,
        Command::VeerRight,
    ];

    pub const COUNT: usize = 16;

    pub fn phrase(self) -> &'static str {
        match self {
            Command::GoStraight => "go straight",
            Command::TurnLeft => "turn left",
            Command::TurnRight => "turn right",
            Command::SlowDown => "slow down",
            Command::SpeedUp => "speed up",
            Command::Stop => "stop",
            Command::AvoidObstacle => "avoid obstacle",
            Command::KeepLeft => "keep left",
            Command::KeepRight => "keep right",
            Command::GoAroundLeft => "go around left",
            Command::GoAroundRight => "go around right",
            Command::MoveBackward => "move backward",
            Command::Wait => "wait",
            Command::FollowTheSidewalk => "follow the sidewalk",
            Command::VeerLeft => "veer left",
            Command::VeerRight => "veer right",
        }
    }

    pub fn index(self) -> usize {
        Command::ALL.iter().position(|&c| c == self).expect("listed")
    }

    pub fn from_index(i: usize) -> Option<Command> {
        Command::ALL.get(i).copied()
    }

    /// Case-folds, trims and collapses whitespace before lookup.
    pub fn parse(phrase: &str) -> Result<Command, InstructionError> {
        let norm = normalize_phrase(phrase);
        if let Some(c) = Command::ALL.iter().find(|c| c.phrase() == norm) {
            return Ok(*c);
        }
        let mut scored: Vec<(f64, &str)> = Command::ALL
            .iter()
            .map(|c| (strsim::normalized_levenshtein(&norm, c.phrase()), c.phrase()))
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0));
        Err(InstructionError::UnknownCommand {
            phrase: phrase.to_string(),
            suggestions: scored.iter().take(3).map(|(_, p)| p.to_string()).collect(),
        })
    }
}

pub fn normalize_phrase(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstructionKind {
    Texting,
    Drafting,
    Arrowing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum InstructionPayload {
    /// Canonical lexicon phrase.
    Texting(String),
    /// Normalized image points ordered along the stroke.
    Drafting(Vec<[f64; 2]>),
    /// Signed speed (m/s) and heading (rad, ego frame).
    Arrowing { v: f64, theta: f64 },
}

/// A timestamped instruction. Serializes as `{kind, issue_time, payload}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instruction {
    pub issue_time: f64,
    #[serde(flatten)]
    pub payload: InstructionPayload,
}

impl Instruction {
    pub fn texting(command: Command, issue_time: f64) -> Self {
        Self { issue_time, payload: InstructionPayload::Texting(command.phrase().to_string()) }
    }

    pub fn drafting(points: Vec<[f64; 2]>, issue_time: f64) -> Result<Self, InstructionError> {
        let ins = Self { issue_time, payload: InstructionPayload::Drafting(points) };
        ins.validate()?;
        Ok(ins)
    }

    pub fn arrowing(v: f64, theta: f64, issue_time: f64) -> Self {
        Self { issue_time, payload: InstructionPayload::Arrowing { v, theta } }
    }

    pub fn kind(&self) -> InstructionKind {
        match self.payload {
            InstructionPayload::Texting(_) => InstructionKind::Texting,
            InstructionPayload::Drafting(_) => InstructionKind::Drafting,
            InstructionPayload::Arrowing { .. } => InstructionKind::Arrowing,
        }
    }

    pub fn command(&self) -> Option<Command> {
        match &self.payload {
            InstructionPayload::Texting(p) => Command::parse(p).ok(),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), InstructionError> {
        if !self.issue_time.is_finite() {
            return Err(InstructionError::NonFinite);
        }
        match &self.payload {
            InstructionPayload::Texting(p) => Command::parse(p).map(|_| ()),
            InstructionPayload::Drafting(pts) => {
                if pts.len() < 2 {
                    return Err(InstructionError::TooFewPoints(pts.len()));
                }
                for (i, &[u, v]) in pts.iter().enumerate() {
                    if !(u.is_finite() && v.is_finite()) {
                        return Err(InstructionError::NonFinite);
                    }
                    if !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&v) {
                        return Err(InstructionError::PointOutOfBounds { index: i, u, v });
                    }
                }
                Ok(())
            }
            InstructionPayload::Arrowing { v, theta } => {
                if v.is_finite() && theta.is_finite() {
                    Ok(())
                } else {
                    Err(InstructionError::NonFinite)
                }
            }
        }
    }
}

/// The active instruction together with its maximum lifetime `t_star`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionState {
    pub active: Option<Instruction>,
    pub t_star: f64,
}

impl Default for InstructionState {
    fn default() -> Self {
        Self { active: None, t_star: 4.0 }
    }
}

impl InstructionState {
    pub fn set(&mut self, ins: Instruction) {
        self.active = Some(ins);
    }

    pub fn clear(&mut self) {
        self.active = None;
    }

    /// Drops the active instruction if it has outlived `t_star`. Returns
    /// whether something was cleared.
    pub fn clear_expired(&mut self, t_now: f64) -> bool {
        if self.active.is_some() && instruction_expired(t_now, self) {
            self.active = None;
            return true;
        }
        false
    }
}

/// True iff `t_now - t' > t_star`; vacuously true with nothing active.
pub fn instruction_expired(t_now: f64, state: &InstructionState) -> bool {
    match &state.active {
        None => true,
        Some(ins) => t_now - ins.issue_time > state.t_star,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn lexicon_lookup_and_normalization() {
        assert_eq!(Command::parse("go straight").unwrap(), Command::GoStraight);
        assert_eq!(Command::parse("  SLOW  DOWN ").unwrap(), Command::SlowDown);
        match Command::parse("fly upward") {
            Err(InstructionError::UnknownCommand { suggestions, .. }) => assert_eq!(suggestions.len(), 3),
            other => panic!("{other:?}"),
        }
        for (i, c) in Command::ALL.iter().enumerate() {
            assert_eq!(c.index(), i);
            assert_eq!(Command::parse(c.phrase()).unwrap(), *c);
        }
    }

    #[test]
    fn expiry_boundary() {
        let mut st = InstructionState { active: Some(Instruction::arrowing(1.0, 0.0, 0.0)), t_star: 4.0 };
        assert!(!instruction_expired(4.0, &st));
        assert!(instruction_expired(4.2, &st));
        st.clear();
        assert!(instruction_expired(0.0, &st));
    }

    #[test]
    fn wire_format() {
        let ins = Instruction::drafting(vec![[0.5, 0.9], [0.5, 0.6]], 1.5).unwrap();
        let j = serde_json::to_value(&ins).unwrap();
        assert_eq!(j["kind"], "drafting");
        assert_eq!(j["issue_time"], 1.5);
        assert_eq!(j["payload"][1][1], 0.6);
        let a = serde_json::to_value(Instruction::arrowing(-1.0, 0.2, 0.0)).unwrap();
        assert_eq!(a["payload"]["theta"], 0.2);
        let t: Instruction = serde_json::from_str(r#"{"kind":"texting","issue_time":0.0,"payload":"stop"}"#).unwrap();
        assert_eq!(t.command(), Some(Command::Stop));
        assert_eq!(serde_json::from_value::<Instruction>(j).unwrap(), ins);
    }

    #[test]
    fn drafting_bounds_rejected() {
        assert!(matches!(
            Instruction::drafting(vec![[1.2, 0.5], [0.5, 0.5]], 0.0),
            Err(InstructionError::PointOutOfBounds { index: 0, .. })
        ));
        assert!(matches!(Instruction::drafting(vec![[0.5, 0.5]], 0.0), Err(InstructionError::TooFewPoints(1))));
    }

    proptest! {
        #[test]
        fn expiry_is_monotone(t_issue in -10.0f64..10.0, t_star in 0.0f64..10.0, a in 0.0f64..20.0, b in 0.0f64..20.0) {
            let st = InstructionState { active: Some(Instruction::texting(Command::Stop, t_issue)), t_star };
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            if instruction_expired(t_issue + lo, &st) {
                prop_assert!(instruction_expired(t_issue + hi, &st));
            }
        }
    }
}
