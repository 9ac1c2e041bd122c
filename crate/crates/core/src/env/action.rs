use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Lateral {
    Stay,
    ChangeLeft,
    ChangeRight,
}

/// One of the ten tactical ego actions. Indices are stable:
///
/// | index | accel (m/s²) | lateral |
/// |-------|--------------|---------|
/// | 0–2   | −1, 0, +1    | stay    |
/// | 3–5   | −1, 0, +1    | left    |
/// | 6–8   | −1, 0, +1    | right   |
/// | 9     | −4           | stay    |
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EgoAction(u8);

impl EgoAction {
    pub const COUNT: usize = 10;
    pub const HARD_BRAKE: EgoAction = EgoAction(9);
    /// Action taken when no action is trusted: stay in lane, brake at −4 m/s².
    pub const FALLBACK: EgoAction = Self::HARD_BRAKE;

    pub fn from_index(index: usize) -> Option<Self> {
        (index < Self::COUNT).then_some(EgoAction(index as u8))
    }

    pub fn all() -> impl Iterator<Item = EgoAction> {
        (0..Self::COUNT as u8).map(EgoAction)
    }

    /// The action with the given command; `accel` must be −1, 0 or +1 unless
    /// it is the hard brake.
    pub fn compose(accel: f64, lateral: Lateral) -> Option<Self> {
        if accel == -4.0 {
            return (lateral == Lateral::Stay).then_some(Self::HARD_BRAKE);
        }
        let lon = [-1.0, 0.0, 1.0].iter().position(|&a| a == accel)?;
        let lat = match lateral {
            Lateral::Stay => 0,
            Lateral::ChangeLeft => 1,
            Lateral::ChangeRight => 2,
        };
        Some(EgoAction((lat * 3 + lon) as u8))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn acceleration(self) -> f64 {
        if self == Self::HARD_BRAKE {
            -4.0
        } else {
            [-1.0, 0.0, 1.0][self.index() % 3]
        }
    }

    pub fn lateral(self) -> Lateral {
        match self.0 {
            3..=5 => Lateral::ChangeLeft,
            6..=8 => Lateral::ChangeRight,
            _ => Lateral::Stay,
        }
    }
}

impl fmt::Display for EgoAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let lat = match self.lateral() {
            Lateral::Stay => "stay",
            Lateral::ChangeLeft => "left",
            Lateral::ChangeRight => "right",
        };
        write!(f, "{:+}/{lat}", self.acceleration())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ten_distinct_actions_round_trip() {
        let all: Vec<_> = EgoAction::all().collect();
        assert_eq!(all.len(), 10);
        for a in &all {
            assert_eq!(EgoAction::compose(a.acceleration(), a.lateral()), Some(*a));
            assert_eq!(EgoAction::from_index(a.index()), Some(*a));
        }
        assert_eq!(EgoAction::from_index(10), None);
        assert_eq!(EgoAction::compose(-4.0, Lateral::ChangeLeft), None);
    }

    #[test]
    fn fallback_is_hard_brake_in_lane() {
        assert_eq!(EgoAction::FALLBACK.acceleration(), -4.0);
        assert_eq!(EgoAction::FALLBACK.lateral(), Lateral::Stay);
        assert_eq!(EgoAction::FALLBACK.index(), 9);
    }
}
