//! Categorical labels shared by every stage of the pipeline.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Number of emotion classes common to speech and song recordings.
pub const NUM_CLASSES: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Speech,
    Music,
}

impl Domain {
    pub const ALL: [Domain; 2] = [Domain::Speech, Domain::Music];

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Speech => "speech",
            Domain::Music => "music",
        }
    }

    pub(crate) fn code(self) -> u8 {
        self as u8
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn other(self) -> Self {
        match self {
            Domain::Speech => Domain::Music,
            Domain::Music => Domain::Speech,
        }
    }
}

/// The six emotions kept from the corpus. Discriminants double as class
/// indices and on-disk codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Emotion {
    Neutral,
    Calm,
    Happy,
    Sad,
    Angry,
    Fearful,
}

impl Emotion {
    pub const ALL: [Emotion; NUM_CLASSES] = [
        Emotion::Neutral,
        Emotion::Calm,
        Emotion::Happy,
        Emotion::Sad,
        Emotion::Angry,
        Emotion::Fearful,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Emotion::Neutral => "neutral",
            Emotion::Calm => "calm",
            Emotion::Happy => "happy",
            Emotion::Sad => "sad",
            Emotion::Angry => "angry",
            Emotion::Fearful => "fearful",
        }
    }
}

/// Recognition task. SER reads the speech domain, MER the music domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "SER", alias = "ser")]
    Ser,
    #[serde(rename = "MER", alias = "mer")]
    Mer,
}

impl Task {
    pub const ALL: [Task; 2] = [Task::Ser, Task::Mer];

    pub fn domain(self) -> Domain {
        match self {
            Task::Ser => Domain::Speech,
            Task::Mer => Domain::Music,
        }
    }

    pub fn other(self) -> Self {
        match self {
            Task::Ser => Task::Mer,
            Task::Mer => Task::Ser,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Ser => "SER",
            Task::Mer => "MER",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

macro_rules! display_and_parse {
    ($ty:ty, $what:literal) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                Self::ALL
                    .iter()
                    .copied()
                    .find(|v| v.as_str().eq_ignore_ascii_case(s))
                    .ok_or_else(|| Error::Validation(format!("unknown {} '{s}'", $what)))
            }
        }
    };
}

display_and_parse!(Domain, "domain");
display_and_parse!(Emotion, "emotion");
display_and_parse!(Task, "task");

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}
