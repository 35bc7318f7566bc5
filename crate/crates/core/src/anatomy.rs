//! Vertebra level vocabulary and the two spine sections the pipeline labels.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum VertebraLevel {
    C2,
    C3,
    C4,
    C5,
    C6,
    C7,
    T1,
    T12,
    L1,
    L2,
    L3,
    L4,
    L5,
    S1,
}

impl VertebraLevel {
    pub const ALL: [VertebraLevel; 14] = [
        Self::C2,
        Self::C3,
        Self::C4,
        Self::C5,
        Self::C6,
        Self::C7,
        Self::T1,
        Self::T12,
        Self::L1,
        Self::L2,
        Self::L3,
        Self::L4,
        Self::L5,
        Self::S1,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::C2 => "C2",
            Self::C3 => "C3",
            Self::C4 => "C4",
            Self::C5 => "C5",
            Self::C6 => "C6",
            Self::C7 => "C7",
            Self::T1 => "T1",
            Self::T12 => "T12",
            Self::L1 => "L1",
            Self::L2 => "L2",
            Self::L3 => "L3",
            Self::L4 => "L4",
            Self::L5 => "L5",
            Self::S1 => "S1",
        }
    }

    /// C2 and S1 terminate the spine sections.
    pub fn spine_end(self) -> Option<SpineEnd> {
        match self {
            Self::C2 => Some(SpineEnd::C2),
            Self::S1 => Some(SpineEnd::S1),
            _ => None,
        }
    }

    pub fn region(self) -> Region {
        if Region::Cervical.sequence().contains(&self) {
            Region::Cervical
        } else {
            Region::Lumbar
        }
    }
}

impl fmt::Display for VertebraLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnknownLevel(pub String);

impl FromStr for VertebraLevel {
    type Err = UnknownLevel;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| UnknownLevel(s.to_string()))
    }
}

/// The two terminal vertebrae recognised by the patch classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SpineEnd {
    C2,
    S1,
}

impl SpineEnd {
    pub fn level(self) -> VertebraLevel {
        match self {
            SpineEnd::C2 => VertebraLevel::C2,
            SpineEnd::S1 => VertebraLevel::S1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    #[default]
    Cervical,
    Lumbar,
}

impl Region {
    /// Levels of the section, superior to inferior.
    pub fn sequence(self) -> &'static [VertebraLevel] {
        use VertebraLevel::*;
        match self {
            Region::Cervical => &[C2, C3, C4, C5, C6, C7, T1],
            Region::Lumbar => &[T12, L1, L2, L3, L4, L5, S1],
        }
    }

    /// The spine-end vertebra anchoring this section's labels.
    pub fn anchor(self) -> SpineEnd {
        match self {
            Region::Cervical => SpineEnd::C2,
            Region::Lumbar => SpineEnd::S1,
        }
    }
}

impl FromStr for Region {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cervical" => Ok(Region::Cervical),
            "lumbar" => Ok(Region::Lumbar),
            other => Err(format!("unknown region '{other}'")),
        }
    }
}
