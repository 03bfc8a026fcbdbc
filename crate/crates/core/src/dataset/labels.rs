use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Obstruction grade as recorded by inspection operators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RawLabel {
    Clean,
    SlightlyDirty,
    Dirty,
    VeryDirty,
    Obstructed,
}

/// Modeling class: `VeryDirty` absorbs `Obstructed`. Ordered by severity so
/// neighboring classes differ by one index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergedLabel {
    Clean,
    SlightlyDirty,
    Dirty,
    VeryDirty,
}

impl RawLabel {
    pub const ALL: [RawLabel; 5] = [
        RawLabel::Clean,
        RawLabel::SlightlyDirty,
        RawLabel::Dirty,
        RawLabel::VeryDirty,
        RawLabel::Obstructed,
    ];

    pub fn merged(self) -> MergedLabel {
        match self {
            RawLabel::Clean => MergedLabel::Clean,
            RawLabel::SlightlyDirty => MergedLabel::SlightlyDirty,
            RawLabel::Dirty => MergedLabel::Dirty,
            RawLabel::VeryDirty | RawLabel::Obstructed => MergedLabel::VeryDirty,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RawLabel::Clean => "clean",
            RawLabel::SlightlyDirty => "slightly_dirty",
            RawLabel::Dirty => "dirty",
            RawLabel::VeryDirty => "very_dirty",
            RawLabel::Obstructed => "obstructed",
        }
    }
}

impl MergedLabel {
    pub const ALL: [MergedLabel; 4] = [
        MergedLabel::Clean,
        MergedLabel::SlightlyDirty,
        MergedLabel::Dirty,
        MergedLabel::VeryDirty,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MergedLabel::Clean => "clean",
            MergedLabel::SlightlyDirty => "slightly_dirty",
            MergedLabel::Dirty => "dirty",
            MergedLabel::VeryDirty => "very_dirty",
        }
    }
}

impl fmt::Display for RawLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for MergedLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown label `{0}`")]
pub struct UnknownLabel(pub String);

impl FromStr for RawLabel {
    type Err = UnknownLabel;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        RawLabel::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| UnknownLabel(s.to_string()))
    }
}

impl FromStr for MergedLabel {
    type Err = UnknownLabel;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MergedLabel::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| UnknownLabel(s.to_string()))
    }
}
