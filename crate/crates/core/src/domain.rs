use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Image domain: natural microscopy (or its pseudo-natural stand-in) versus
/// geometric synthetic renderings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Nat,
    Syn,
}

impl Domain {
    pub const ALL: [Domain; 2] = [Domain::Nat, Domain::Syn];

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Nat => "nat",
            Domain::Syn => "syn",
        }
    }

    pub fn index(self) -> usize {
        match self {
            Domain::Nat => 0,
            Domain::Syn => 1,
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "nat" => Ok(Domain::Nat),
            "syn" => Ok(Domain::Syn),
            other => Err(Error::InvalidInput(format!("unknown domain `{other}` (expected nat or syn)"))),
        }
    }
}
