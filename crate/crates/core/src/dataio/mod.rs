//! Dataset splits, annotation parsing, filtering, synthetic data and augmentation.

pub mod augment;
pub mod disk;
pub mod npy;
pub mod parse;
pub mod synth;

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::config::{AuPolicy, ExperimentConfig, ExprScheme};
use crate::error::{Error, Result};
use crate::types::{FrameRecord, Task, VideoSequence, EXPR_OTHER};

pub use augment::{augment, hflip, AugmentationConfig};
pub use parse::{parse_au_file, parse_expr_file, parse_va_file};
pub use synth::{generate_synthetic, SynthOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(SplitName::Train),
            "val" | "validation" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            other => Err(Error::config("split", format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Disk,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub name: SplitName,
    pub sequences: Vec<VideoSequence>,
    pub provenance: Provenance,
}

impl DatasetSplit {
    pub fn new(name: SplitName, sequences: Vec<VideoSequence>, provenance: Provenance) -> Result<Self> {
        let mut seen = HashSet::new();
        for s in &sequences {
            if !seen.insert(s.video_id.as_str()) {
                return Err(Error::validation(
                    "sequences.video_id",
                    format!("duplicate video id `{}`", s.video_id),
                ));
            }
        }
        Ok(Self {
            name,
            sequences,
            provenance,
        })
    }

    pub fn frames(&self) -> impl Iterator<Item = &FrameRecord> {
        self.sequences.iter().flat_map(|s| s.frames.iter())
    }

    pub fn n_frames(&self) -> usize {
        self.sequences.iter().map(VideoSequence::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.n_frames() == 0
    }
}

/// Which frames survive [`filter_split`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FilterPolicy {
    pub expr_scheme: ExprScheme,
    pub au_policy: AuPolicy,
}

impl From<&ExperimentConfig> for FilterPolicy {
    fn from(cfg: &ExperimentConfig) -> Self {
        Self {
            expr_scheme: cfg.expr_scheme,
            au_policy: cfg.au_policy,
        }
    }
}

fn keep(frame: &FrameRecord, task: Task, split: SplitName, policy: FilterPolicy) -> bool {
    match task {
        Task::Va => frame.va.is_some_and(|l| !l.is_sentinel()),
        Task::Expr => match frame.expr.and_then(|l| l.class()) {
            None => false,
            Some(EXPR_OTHER) => {
                !(policy.expr_scheme == ExprScheme::SevenByThreshold && split == SplitName::Train)
            }
            Some(_) => true,
        },
        Task::Au => match (&frame.aus, policy.au_policy) {
            (None, _) => false,
            (Some(a), AuPolicy::DropFrame) => !a.has_unannotated(),
            (Some(a), AuPolicy::MaskCells) => !a.fully_unannotated(),
        },
    }
}

/// Removes frames that carry no usable label for `task`. Surviving records are
/// untouched; sequences left empty are dropped.
pub fn filter_split(split: DatasetSplit, task: Task, policy: FilterPolicy) -> DatasetSplit {
    let name = split.name;
    let sequences = split
        .sequences
        .into_iter()
        .filter_map(|seq| {
            let frames: Vec<FrameRecord> = seq
                .frames
                .into_iter()
                .filter(|f| keep(f, task, name, policy))
                .collect();
            (!frames.is_empty()).then_some(VideoSequence {
                video_id: seq.video_id,
                frames,
            })
        })
        .collect();
    DatasetSplit {
        name,
        sequences,
        provenance: split.provenance,
    }
}
