use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// One of the three content channels of a micro-video.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visual,
    Acoustic,
    Text,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Visual, Modality::Acoustic, Modality::Text];

    /// Wire code used by the feature-bundle format.
    pub fn code(self) -> u8 {
        match self {
            Modality::Visual => 0,
            Modality::Acoustic => 1,
            Modality::Text => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Modality::Visual),
            1 => Some(Modality::Acoustic),
            2 => Some(Modality::Text),
            _ => None,
        }
    }

    /// Position inside `[visual, acoustic, text]` arrays.
    pub fn index(self) -> usize {
        self.code() as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Visual => "visual",
            Modality::Acoustic => "acoustic",
            Modality::Text => "text",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "visual" | "v" => Ok(Modality::Visual),
            "acoustic" | "a" => Ok(Modality::Acoustic),
            "text" | "t" => Ok(Modality::Text),
            other => Err(format!("unknown modality `{other}`")),
        }
    }
}
