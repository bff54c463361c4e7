//! Shared domain types, annotation sentinels and structural validation.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};

/// Sentinel written into VA annotation files for frames without a valid label.
pub const VA_SENTINEL: f64 = -5.0;

pub const N_AUS: usize = 12;
pub const N_EXPR_CLASSES: usize = 8;
/// Class index of the "other" expression category.
pub const EXPR_OTHER: usize = 7;

/// Canonical AU column order used by files, tensors and reports.
pub const AU_NAMES: [&str; N_AUS] = [
    "AU1", "AU2", "AU4", "AU6", "AU7", "AU10", "AU12", "AU15", "AU23", "AU24", "AU25", "AU26",
];

pub const EXPR_NAMES: [&str; N_EXPR_CLASSES] = [
    "Neutral",
    "Anger",
    "Disgust",
    "Fear",
    "Happiness",
    "Sadness",
    "Surprise",
    "Other",
];

/// Frame image, laid out height × width × channels with values in [0, 1].
pub type Image = Array3<f32>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "va", alias = "VA")]
    Va,
    #[serde(rename = "expr", alias = "EXPR")]
    Expr,
    #[serde(rename = "au", alias = "AU")]
    Au,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Va => "va",
            Task::Expr => "expr",
            Task::Au => "au",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "va" => Ok(Task::Va),
            "expr" => Ok(Task::Expr),
            "au" => Ok(Task::Au),
            other => Err(Error::config("task", format!("unknown task `{other}`"))),
        }
    }
}

/// A valence/arousal annotation as read from disk. May hold the −5 sentinel
/// until the split is filtered.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VaLabel {
    pub valence: f64,
    pub arousal: f64,
}

impl VaLabel {
    pub fn new(valence: f64, arousal: f64) -> Self {
        Self { valence, arousal }
    }

    pub fn sentinel() -> Self {
        Self::new(VA_SENTINEL, VA_SENTINEL)
    }

    pub fn is_sentinel(&self) -> bool {
        self.valence == VA_SENTINEL || self.arousal == VA_SENTINEL
    }

    pub fn polarity(&self) -> Result<PolarityLabel> {
        Ok(PolarityLabel {
            valence: polarity_of(self.valence)?,
            arousal: polarity_of(self.arousal)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Polarity {
    NegExtreme,
    Interior,
    PosExtreme,
}

impl Polarity {
    pub const ALL: [Polarity; 3] = [Polarity::NegExtreme, Polarity::Interior, Polarity::PosExtreme];

    /// Column of this class in a polarity logit/probability row.
    pub fn index(self) -> usize {
        match self {
            Polarity::NegExtreme => 0,
            Polarity::Interior => 1,
            Polarity::PosExtreme => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn is_extreme(self) -> bool {
        self != Polarity::Interior
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolarityLabel {
    pub valence: Polarity,
    pub arousal: Polarity,
}

/// Classifies an annotation value as exactly −1, exactly +1, or interior.
pub fn polarity_of(value: f64) -> Result<Polarity> {
    if !value.is_finite() || value.abs() > 1.0 {
        return Err(Error::Domain(format!(
            "polarity is defined on [-1, 1], got {value}"
        )));
    }
    Ok(if value == -1.0 {
        Polarity::NegExtreme
    } else if value == 1.0 {
        Polarity::PosExtreme
    } else {
        Polarity::Interior
    })
}

/// Expression annotation: −1 invalid, 0–6 basic expressions plus neutral, 7 other.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ExpressionLabel(i8);

impl ExpressionLabel {
    pub const INVALID: ExpressionLabel = ExpressionLabel(-1);

    pub fn new(value: i64) -> Result<Self> {
        if (-1..=7).contains(&value) {
            Ok(Self(value as i8))
        } else {
            Err(Error::Domain(format!(
                "expression label must be in -1..=7, got {value}"
            )))
        }
    }

    pub fn value(self) -> i8 {
        self.0
    }

    pub fn is_valid(self) -> bool {
        self.0 >= 0
    }

    /// Class index, `None` for the invalid marker.
    pub fn class(self) -> Option<usize> {
        (self.0 >= 0).then_some(self.0 as usize)
    }
}

/// Twelve AU annotations in [`AU_NAMES`] order; −1 marks an unannotated cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AuLabels([i8; N_AUS]);

impl AuLabels {
    pub fn new(values: [i8; N_AUS]) -> Result<Self> {
        if let Some(bad) = values.iter().find(|v| !(-1..=1).contains(*v)) {
            return Err(Error::Domain(format!("AU entries must be -1, 0 or 1, got {bad}")));
        }
        Ok(Self(values))
    }

    pub fn from_slice(values: &[i64]) -> Result<Self> {
        if values.len() != N_AUS {
            return Err(Error::Shape(format!(
                "AU vector needs {N_AUS} entries, got {}",
                values.len()
            )));
        }
        let mut out = [0i8; N_AUS];
        for (dst, &v) in out.iter_mut().zip(values) {
            if !(-1..=1).contains(&v) {
                return Err(Error::Domain(format!("AU entries must be -1, 0 or 1, got {v}")));
            }
            *dst = v as i8;
        }
        Ok(Self(out))
    }

    pub fn values(&self) -> &[i8; N_AUS] {
        &self.0
    }

    pub fn has_unannotated(&self) -> bool {
        self.0.contains(&-1)
    }

    pub fn fully_unannotated(&self) -> bool {
        self.0.iter().all(|&v| v == -1)
    }

    /// Per-cell inclusion mask: 1 where annotated.
    pub fn mask(&self) -> [f64; N_AUS] {
        self.0.map(|v| if v < 0 { 0.0 } else { 1.0 })
    }

    /// Binary targets with unannotated cells mapped to 0; pair with [`AuLabels::mask`].
    pub fn targets(&self) -> [f64; N_AUS] {
        self.0.map(|v| if v > 0 { 1.0 } else { 0.0 })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub video_id: String,
    pub frame_index: usize,
    pub image: Image,
    pub va: Option<VaLabel>,
    pub expr: Option<ExpressionLabel>,
    pub aus: Option<AuLabels>,
}

/// Checks every type invariant of a frame against the experiment config and
/// hands the record back untouched.
pub fn validate_frame(record: FrameRecord, config: &ExperimentConfig) -> Result<FrameRecord> {
    if record.video_id.is_empty() {
        return Err(Error::validation("video_id", "must be non-empty"));
    }
    if record.va.is_none() && record.expr.is_none() && record.aus.is_none() {
        return Err(Error::validation("annotations", "at least one task label required"));
    }
    let expected = (config.image_size, config.image_size, 3);
    if record.image.dim() != expected {
        return Err(Error::validation(
            "image",
            format!("shape {:?}, expected {:?}", record.image.dim(), expected),
        ));
    }
    if let Some(bad) = record
        .image
        .iter()
        .find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0)
    {
        return Err(Error::validation("image", format!("pixel {bad} outside [0, 1]")));
    }
    if let Some(va) = record.va {
        for (name, v) in [("va.valence", va.valence), ("va.arousal", va.arousal)] {
            if v == VA_SENTINEL {
                return Err(Error::validation(name, "sentinel -5 must be filtered out"));
            }
            if !v.is_finite() || v.abs() > 1.0 {
                return Err(Error::validation(name, format!("{v} outside [-1, 1]")));
            }
        }
    }
    // ExpressionLabel and AuLabels enforce their ranges at construction.
    Ok(record)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoSequence {
    pub video_id: String,
    pub frames: Vec<FrameRecord>,
}

impl VideoSequence {
    pub fn new(video_id: impl Into<String>, frames: Vec<FrameRecord>) -> Result<Self> {
        let video_id = video_id.into();
        if let Some(f) = frames.iter().find(|f| f.video_id != video_id) {
            return Err(Error::validation(
                "frames.video_id",
                format!("frame belongs to `{}`, sequence is `{video_id}`", f.video_id),
            ));
        }
        if frames.windows(2).any(|w| w[0].frame_index >= w[1].frame_index) {
            return Err(Error::validation(
                "frames.frame_index",
                "must be strictly increasing",
            ));
        }
        Ok(Self { video_id, frames })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Fused or per-backbone feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(pub Vec<f32>);

impl FeatureVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Prediction {
    Va {
        valence: f64,
        arousal: f64,
    },
    Expr {
        class: usize,
        probabilities: [f64; N_EXPR_CLASSES],
    },
    Au {
        probabilities: [f64; N_AUS],
        decisions: [u8; N_AUS],
    },
}

impl Prediction {
    pub fn task(&self) -> Task {
        match self {
            Prediction::Va { .. } => Task::Va,
            Prediction::Expr { .. } => Task::Expr,
            Prediction::Au { .. } => Task::Au,
        }
    }

    fn check(&self) -> Result<()> {
        match self {
            Prediction::Va { valence, arousal } => {
                if !(-1.0..=1.0).contains(valence) || !(-1.0..=1.0).contains(arousal) {
                    return Err(Error::validation("va", "prediction outside [-1, 1]"));
                }
            }
            Prediction::Expr {
                class,
                probabilities,
            } => {
                if *class >= N_EXPR_CLASSES {
                    return Err(Error::validation("expr.class", format!("{class} out of range")));
                }
                let sum: f64 = probabilities.iter().sum();
                if probabilities.iter().any(|p| !(0.0..=1.0).contains(p)) || (sum - 1.0).abs() > 1e-6 {
                    return Err(Error::validation(
                        "expr.probabilities",
                        format!("not a probability vector (sum {sum})"),
                    ));
                }
            }
            Prediction::Au {
                probabilities,
                decisions,
            } => {
                if probabilities.iter().any(|p| !(0.0..=1.0).contains(p)) {
                    return Err(Error::validation("au.probabilities", "outside [0, 1]"));
                }
                if decisions.iter().any(|&d| d > 1) {
                    return Err(Error::validation("au.decisions", "must be binary"));
                }
            }
        }
        Ok(())
    }
}

/// Per-frame predictions for one task, keyed and ordered by (video id, frame index).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub task: Task,
    #[serde(with = "entry_list")]
    entries: BTreeMap<(String, usize), Prediction>,
}

/// Serializes the keyed entries as an ordered list, since JSON maps need
/// string keys.
mod entry_list {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use super::Prediction;

    #[derive(Serialize, Deserialize)]
    struct Entry {
        video_id: String,
        frame_index: usize,
        prediction: Prediction,
    }

    pub fn serialize<S: Serializer>(map: &BTreeMap<(String, usize), Prediction>, s: S) -> Result<S::Ok, S::Error> {
        let list: Vec<Entry> = map
            .iter()
            .map(|((v, i), p)| Entry {
                video_id: v.clone(),
                frame_index: *i,
                prediction: p.clone(),
            })
            .collect();
        list.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<(String, usize), Prediction>, D::Error> {
        let list = Vec::<Entry>::deserialize(d)?;
        Ok(list
            .into_iter()
            .map(|e| ((e.video_id, e.frame_index), e.prediction))
            .collect())
    }
}

impl PredictionSet {
    pub fn new(task: Task) -> Self {
        Self {
            task,
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, video_id: &str, frame_index: usize, prediction: Prediction) -> Result<()> {
        if prediction.task() != self.task {
            return Err(Error::Shape(format!(
                "{} prediction inserted into a {} set",
                prediction.task(),
                self.task
            )));
        }
        prediction.check()?;
        let key = (video_id.to_string(), frame_index);
        if self.entries.contains_key(&key) {
            return Err(Error::validation(
                "entries",
                format!("duplicate prediction for {video_id}#{frame_index}"),
            ));
        }
        self.entries.insert(key, prediction);
        Ok(())
    }

    pub fn get(&self, video_id: &str, frame_index: usize) -> Option<&Prediction> {
        self.entries.get(&(video_id.to_string(), frame_index))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, usize, &Prediction)> {
        self.entries.iter().map(|((v, i), p)| (v.as_str(), *i, p))
    }

    /// Predictions grouped per video, frames in order.
    pub fn by_video(&self) -> BTreeMap<&str, Vec<(usize, &Prediction)>> {
        let mut out: BTreeMap<&str, Vec<(usize, &Prediction)>> = BTreeMap::new();
        for (v, i, p) in self.iter() {
            out.entry(v).or_default().push((i, p));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(va: Option<VaLabel>) -> FrameRecord {
        FrameRecord {
            video_id: "v".into(),
            frame_index: 0,
            image: Image::zeros((112, 112, 3)),
            va,
            expr: None,
            aus: None,
        }
    }

    #[test]
    fn polarity_examples() {
        assert_eq!(polarity_of(1.0).unwrap(), Polarity::PosExtreme);
        assert_eq!(polarity_of(0.0).unwrap(), Polarity::Interior);
        assert_eq!(polarity_of(-1.0).unwrap(), Polarity::NegExtreme);
        assert_eq!(polarity_of(0.999_999).unwrap(), Polarity::Interior);
        assert!(matches!(polarity_of(1.5), Err(Error::Domain(_))));
        assert!(polarity_of(f64::NAN).is_err());
    }

    #[test]
    fn validate_rejects_sentinel() {
        let cfg = ExperimentConfig::defaults(Task::Va);
        let err = validate_frame(frame(Some(VaLabel::sentinel())), &cfg).unwrap_err();
        assert!(matches!(err, Error::Validation { ref field, .. } if field == "va.valence"));
    }

    #[test]
    fn validate_identity_on_valid_record() {
        let cfg = ExperimentConfig::defaults(Task::Va);
        let rec = frame(Some(VaLabel::new(0.2, -0.4)));
        assert_eq!(validate_frame(rec.clone(), &cfg).unwrap(), rec);
    }

    #[test]
    fn validate_rejects_wrong_image_shape() {
        let cfg = ExperimentConfig::defaults(Task::Va);
        let mut rec = frame(Some(VaLabel::new(0.2, -0.4)));
        rec.image = Image::zeros((64, 64, 3));
        assert!(validate_frame(rec, &cfg).is_err());
    }

    #[test]
    fn au_vector_of_length_11_is_rejected() {
        let err = AuLabels::from_slice(&[0; 11]).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn sequence_requires_increasing_indices() {
        let mut a = frame(Some(VaLabel::new(0.0, 0.0)));
        let mut b = a.clone();
        a.frame_index = 3;
        b.frame_index = 3;
        assert!(VideoSequence::new("v", vec![a, b]).is_err());
    }

    #[test]
    fn prediction_set_rejects_bad_payloads() {
        let mut set = PredictionSet::new(Task::Expr);
        let mut probs = [0.0; N_EXPR_CLASSES];
        probs[0] = 0.9;
        let err = set.insert("v", 0, Prediction::Expr { class: 0, probabilities: probs });
        assert!(err.is_err());
        probs[1] = 0.1;
        set.insert("v", 0, Prediction::Expr { class: 0, probabilities: probs }).unwrap();
        assert!(set
            .insert("v", 0, Prediction::Expr { class: 0, probabilities: probs })
            .is_err());
        assert!(set.insert("v", 1, Prediction::Va { valence: 0.0, arousal: 0.0 }).is_err());
        let json = serde_json::to_string(&set).unwrap();
        assert_eq!(serde_json::from_str::<PredictionSet>(&json).unwrap(), set);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn polarity_partitions_the_interval(v in -1.0f64..=1.0) {
                let p = polarity_of(v).unwrap();
                prop_assert_eq!(p == Polarity::NegExtreme, v == -1.0);
                prop_assert_eq!(p == Polarity::PosExtreme, v == 1.0);
            }

            #[test]
            fn validate_is_idempotent(v in -1.0f64..=1.0, a in -1.0f64..=1.0) {
                let cfg = ExperimentConfig::defaults(Task::Va);
                let once = validate_frame(frame(Some(VaLabel::new(v, a))), &cfg).unwrap();
                let twice = validate_frame(once.clone(), &cfg).unwrap();
                prop_assert_eq!(once, twice);
            }
        }
    }
}
