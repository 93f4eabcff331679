use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Diagnosis of a slice or patient. COVID is the positive class throughout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "COVID")]
    Covid,
    #[serde(rename = "NonCOVID")]
    NonCovid,
}

impl Label {
    /// Model output index: 0 for non-COVID, 1 for COVID.
    pub fn class_index(self) -> usize {
        match self {
            Label::NonCovid => 0,
            Label::Covid => 1,
        }
    }

    pub fn from_class_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(Label::NonCovid),
            1 => Some(Label::Covid),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Covid => "COVID",
            Label::NonCovid => "NonCOVID",
        }
    }

    /// Folder-name spelling used in dataset trees.
    pub fn folder_name(self) -> &'static str {
        match self {
            Label::Covid => "covid",
            Label::NonCovid => "non-covid",
        }
    }

    pub fn is_covid(self) -> bool {
        self == Label::Covid
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown label `{0}` (expected COVID or NonCOVID)")]
pub struct ParseLabelError(pub String);

impl FromStr for Label {
    type Err = ParseLabelError;

    /// Case-insensitive; accepts `covid`, `noncovid`, `non-covid` and `non_covid`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "covid" | "covid-19" | "covid19" => Ok(Label::Covid),
            "noncovid" | "non-covid" | "non_covid" | "non-covid-19" => Ok(Label::NonCovid),
            _ => Err(ParseLabelError(s.to_string())),
        }
    }
}
