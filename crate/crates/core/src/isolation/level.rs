use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Containment level of a deployment, ordered from least to most
/// restrictive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IsolationLevel {
    /// Ports open subject to the ordinary mediation rules.
    Standard = 1,
    /// Ports restricted by the console's active restriction set.
    Probation = 2,
    /// All ports revoked; model cores stay powered for introspection.
    Severed = 3,
    /// Every core powered down, cables reversibly disconnected.
    Offline = 4,
    /// Offline with damaged cables that need manual repair.
    Decapitation = 5,
    /// Site destroyed. Absorbing.
    Immolation = 6,
}

impl IsolationLevel {
    pub const ALL: [IsolationLevel; 6] = [
        IsolationLevel::Standard,
        IsolationLevel::Probation,
        IsolationLevel::Severed,
        IsolationLevel::Offline,
        IsolationLevel::Decapitation,
        IsolationLevel::Immolation,
    ];

    pub fn value(self) -> u8 {
        self as u8
    }

    pub fn from_value(v: u8) -> Option<Self> {
        Self::ALL.get(usize::from(v).checked_sub(1)?).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            IsolationLevel::Standard => "standard",
            IsolationLevel::Probation => "probation",
            IsolationLevel::Severed => "severed",
            IsolationLevel::Offline => "offline",
            IsolationLevel::Decapitation => "decapitation",
            IsolationLevel::Immolation => "immolation",
        }
    }

    /// Whether ports are revoked at this level.
    pub fn ports_revoked(self) -> bool {
        self >= IsolationLevel::Severed
    }

    /// Whether cores are powered at this level.
    pub fn cores_powered(self) -> bool {
        self <= IsolationLevel::Severed
    }
}

impl fmt::Display for IsolationLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for IsolationLevel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL.into_iter().find(|l| l.as_str().eq_ignore_ascii_case(s)).ok_or_else(|| format!("unknown isolation level {s:?}"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numbering_and_order() {
        for (i, l) in IsolationLevel::ALL.iter().enumerate() {
            assert_eq!(l.value() as usize, i + 1);
            assert_eq!(IsolationLevel::from_value(l.value()), Some(*l));
        }
        assert!(IsolationLevel::Standard < IsolationLevel::Immolation);
        assert_eq!(IsolationLevel::from_value(0), None);
        assert_eq!(IsolationLevel::from_value(7), None);
    }

    #[test]
    fn effects_partition() {
        for l in IsolationLevel::ALL {
            // Severed is the only level with revoked ports and powered cores.
            assert_eq!(l.ports_revoked() && l.cores_powered(), l == IsolationLevel::Severed);
        }
    }

    #[test]
    fn parses_names() {
        assert_eq!("Offline".parse::<IsolationLevel>(), Ok(IsolationLevel::Offline));
        assert!("bogus".parse::<IsolationLevel>().is_err());
    }
}
