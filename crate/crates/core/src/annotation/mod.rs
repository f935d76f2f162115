//! Prompt-style caption construction from action-unit intensities and
//! emotion-group labels.
//!
//! A caption follows `<subject> is <emotion> and speaks with <AU phrases>.`
//! where each AU phrase is `<body> <adverb> <action>`. Either clause may be
//! absent; a clip with neither gets `An expressionless <noun>.`

mod caption;
mod corpus;

pub use caption::{build_caption, neutral_sentence, parse_sentence, render_sentence, AuClause, Caption, DropConfig};
pub use corpus::{
    annotate_corpus, read_au_tables, read_records, write_au_tables_csv, write_records, AnnotationRecord,
    AuClauseRecord, CaptionRecord, ClipEmotion, EmotionFile,
};

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::Mat;

/// Upper bound of the AU intensity scale.
pub const AU_MAX: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AuLevel {
    None,
    Low,
    Mid,
    High,
}

impl AuLevel {
    pub const ACTIVE: [AuLevel; 3] = [AuLevel::Low, AuLevel::Mid, AuLevel::High];

    pub fn rank(self) -> i32 {
        self as i32
    }

    pub fn name(self) -> &'static str {
        match self {
            AuLevel::None => "none",
            AuLevel::Low => "low",
            AuLevel::Mid => "mid",
            AuLevel::High => "high",
        }
    }
}

impl fmt::Display for AuLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-frame AU intensities of one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct AuIntensityTable {
    clip_id: String,
    au_ids: Vec<String>,
    frames: Mat,
}

impl AuIntensityTable {
    pub fn new(clip_id: impl Into<String>, au_ids: Vec<String>, frames: Mat) -> Result<Self> {
        let clip_id = clip_id.into();
        if frames.nrows() == 0 {
            return Err(Error::NoFrames);
        }
        if frames.ncols() != au_ids.len() {
            return Err(Error::Shape(format!(
                "{clip_id}: {} AU columns but {} AU ids",
                frames.ncols(),
                au_ids.len()
            )));
        }
        let mut seen = au_ids.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != au_ids.len() {
            return Err(Error::Invalid(format!("{clip_id}: duplicate AU ids")));
        }
        if let Some(&bad) = frames.iter().find(|x| !(0.0..=AU_MAX).contains(*x)) {
            return Err(Error::IntensityRange(bad));
        }
        Ok(Self { clip_id, au_ids, frames })
    }

    pub fn clip_id(&self) -> &str {
        &self.clip_id
    }

    pub fn au_ids(&self) -> &[String] {
        &self.au_ids
    }

    pub fn frames(&self) -> &Mat {
        &self.frames
    }
}

/// Clip-level AU intensity: the mean of each AU column over frames.
pub fn average_au_intensity(table: &AuIntensityTable) -> Result<Vec<f64>> {
    let f = table.frames.nrows();
    if f == 0 {
        return Err(Error::NoFrames);
    }
    Ok(table
        .frames
        .columns()
        .into_iter()
        .map(|c| (c.sum() / f as f64).clamp(0.0, AU_MAX))
        .collect())
}

/// One row of the AU lookup table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuLookupEntry {
    pub au_id: String,
    pub body: String,
    pub action: String,
    /// Lower-exclusive band starts for low, mid and high. The first is also
    /// the activation floor.
    pub thresholds: [f64; 3],
    /// Adverb for low, mid and high; may be empty.
    pub adverbs: [String; 3],
}

impl AuLookupEntry {
    fn with_defaults(au_id: &str, body: &str, action: &str) -> Self {
        Self {
            au_id: au_id.into(),
            body: body.into(),
            action: action.into(),
            thresholds: [0.5, 1.5, 3.0],
            adverbs: ["slightly".into(), String::new(), "extremely".into()],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, mid, hi] = self.thresholds;
        if !(0.0 < lo && lo < mid && mid < hi && hi <= AU_MAX) {
            return Err(Error::Config(format!(
                "{}: thresholds must satisfy 0 < low < mid < high <= 5, got {:?}",
                self.au_id, self.thresholds
            )));
        }
        if self.body.trim().is_empty() || self.action.trim().is_empty() {
            return Err(Error::Config(format!("{}: empty body or action phrase", self.au_id)));
        }
        Ok(())
    }

    pub fn adverb(&self, level: AuLevel) -> Option<&str> {
        match level {
            AuLevel::None => None,
            AuLevel::Low => Some(&self.adverbs[0]),
            AuLevel::Mid => Some(&self.adverbs[1]),
            AuLevel::High => Some(&self.adverbs[2]),
        }
    }

    /// `<body> <adverb> <action>`, skipping an empty adverb.
    pub fn phrase(&self, level: AuLevel) -> Option<String> {
        let adv = self.adverb(level)?;
        Some(if adv.is_empty() {
            format!("{} {}", self.body, self.action)
        } else {
            format!("{} {} {}", self.body, adv, self.action)
        })
    }
}

/// Quantize a clip-level intensity into none/low/mid/high.
pub fn quantize_au_level(intensity: f64, entry: &AuLookupEntry) -> Result<AuLevel> {
    if !(0.0..=AU_MAX).contains(&intensity) {
        return Err(Error::IntensityRange(intensity));
    }
    let [lo, mid, hi] = entry.thresholds;
    Ok(if intensity <= lo {
        AuLevel::None
    } else if intensity <= mid {
        AuLevel::Low
    } else if intensity <= hi {
        AuLevel::Mid
    } else {
        AuLevel::High
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuLookup {
    pub entries: Vec<AuLookupEntry>,
}

impl Default for AuLookup {
    /// The eight DISFA action units.
    fn default() -> Self {
        let rows = [
            ("AU1", "inner brow", "raised"),
            ("AU2", "outer brow", "lifted"),
            ("AU4", "brow", "lowered"),
            ("AU6", "cheeks", "raised"),
            ("AU9", "nose", "wrinkled"),
            ("AU12", "lip corners", "pulled up"),
            ("AU25", "lips", "parted"),
            ("AU26", "jaw", "dropped"),
        ];
        Self { entries: rows.iter().map(|(a, b, c)| AuLookupEntry::with_defaults(a, b, c)).collect() }
    }
}

impl AuLookup {
    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeMap::new();
        for e in &self.entries {
            e.validate()?;
            if ids.insert(e.au_id.as_str(), ()).is_some() {
                return Err(Error::Config(format!("duplicate AU id {}", e.au_id)));
            }
        }
        Ok(())
    }

    pub fn get(&self, au_id: &str) -> Option<&AuLookupEntry> {
        self.entries.iter().find(|e| e.au_id == au_id)
    }

    pub fn au_ids(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.au_id.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Quantize a full intensity vector laid out in lookup order, keeping
    /// only activated AUs.
    pub fn activated_levels(&self, intensities: &[f64]) -> Result<Vec<(String, AuLevel)>> {
        if intensities.len() != self.entries.len() {
            return Err(Error::Shape(format!(
                "{} intensities for {} lookup entries",
                intensities.len(),
                self.entries.len()
            )));
        }
        let mut out = Vec::new();
        for (e, &x) in self.entries.iter().zip(intensities) {
            let level = quantize_au_level(x, e)?;
            if level != AuLevel::None {
                out.push((e.au_id.clone(), level));
            }
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let lookup: Self = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        lookup.validate()?;
        Ok(lookup)
    }
}

/// Emotion vocabulary and the labels shared by each emotion group
/// (category x intensity level).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmotionTable {
    pub vocabulary: Vec<String>,
    pub groups: BTreeMap<String, Vec<String>>,
}

impl EmotionTable {
    pub fn validate(&self) -> Result<()> {
        for (g, labels) in &self.groups {
            if labels.is_empty() {
                return Err(Error::Config(format!("emotion group {g} has no labels")));
            }
            if let Some(l) = labels.iter().find(|l| !self.vocabulary.contains(l)) {
                return Err(Error::Config(format!("label {l:?} of group {g} not in vocabulary")));
            }
        }
        Ok(())
    }

    pub fn labels(&self, group: &str) -> Option<&[String]> {
        self.groups.get(group).map(Vec::as_slice)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn au2() -> AuLookupEntry {
        AuLookup::default().get("AU2").unwrap().clone()
    }

    #[test]
    fn average_examples() {
        let t = AuIntensityTable::new("c", vec!["AU1".into()], array![[1.0], [2.0], [3.0]]).unwrap();
        assert_eq!(average_au_intensity(&t).unwrap(), vec![2.0]);

        let row = [0.3, 4.2, 1.1];
        let ids: Vec<String> = ["AU1", "AU2", "AU4"].iter().map(|s| s.to_string()).collect();
        let same = Mat::from_shape_fn((5, 3), |(_, j)| row[j]);
        let t = AuIntensityTable::new("c", ids.clone(), same).unwrap();
        let avg = average_au_intensity(&t).unwrap();
        for (a, b) in avg.iter().zip(row) {
            assert!((a - b).abs() < 1e-12);
        }

        let t = AuIntensityTable::new("c", ids, Mat::zeros((4, 3))).unwrap();
        assert_eq!(average_au_intensity(&t).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn empty_and_invalid_tables_rejected() {
        let err = AuIntensityTable::new("c", vec!["AU1".into()], Mat::zeros((0, 1))).unwrap_err();
        assert_eq!(err.to_string(), "no frames");
        assert!(AuIntensityTable::new("c", vec!["AU1".into()], array![[5.5]]).is_err());
        assert!(AuIntensityTable::new("c", vec!["AU1".into(), "AU1".into()], array![[1.0, 1.0]]).is_err());
    }

    #[test]
    fn quantize_examples() {
        let e = au2();
        assert_eq!(quantize_au_level(0.0, &e).unwrap(), AuLevel::None);
        assert_eq!(quantize_au_level(0.5, &e).unwrap(), AuLevel::None);
        assert_eq!(quantize_au_level(0.51, &e).unwrap(), AuLevel::Low);
        assert_eq!(quantize_au_level(1.5, &e).unwrap(), AuLevel::Low);
        assert_eq!(quantize_au_level(1.6, &e).unwrap(), AuLevel::Mid);
        assert_eq!(quantize_au_level(3.0, &e).unwrap(), AuLevel::Mid);
        assert_eq!(quantize_au_level(5.0, &e).unwrap(), AuLevel::High);
        assert!(matches!(quantize_au_level(5.01, &e), Err(Error::IntensityRange(_))));
        assert!(matches!(quantize_au_level(-0.1, &e), Err(Error::IntensityRange(_))));
    }

    #[test]
    fn lookup_validation() {
        AuLookup::default().validate().unwrap();
        let mut bad = AuLookup::default();
        bad.entries[0].thresholds = [1.0, 1.0, 3.0];
        assert!(bad.validate().is_err());
        let mut dup = AuLookup::default();
        dup.entries[1].au_id = "AU1".into();
        assert!(dup.validate().is_err());
    }

    #[test]
    fn phrases_follow_adverb_map() {
        let e = au2();
        assert_eq!(e.phrase(AuLevel::High).unwrap(), "outer brow extremely lifted");
        assert_eq!(e.phrase(AuLevel::Mid).unwrap(), "outer brow lifted");
        assert_eq!(e.phrase(AuLevel::Low).unwrap(), "outer brow slightly lifted");
        assert!(e.phrase(AuLevel::None).is_none());
    }

    proptest! {
        #[test]
        fn quantization_is_monotone(a in 0.0f64..=5.0, b in 0.0f64..=5.0) {
            let e = au2();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(quantize_au_level(lo, &e).unwrap() <= quantize_au_level(hi, &e).unwrap());
        }

        #[test]
        fn average_ignores_frame_order(
            rows in prop::collection::vec(prop::collection::vec(0.0f64..=5.0, 3), 1..12),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let ids: Vec<String> = ["AU1", "AU2", "AU4"].iter().map(|s| s.to_string()).collect();
            let to_mat = |rs: &[Vec<f64>]| Mat::from_shape_fn((rs.len(), 3), |(i, j)| rs[i][j]);
            let mut shuffled = rows.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let a = average_au_intensity(&AuIntensityTable::new("c", ids.clone(), to_mat(&rows)).unwrap()).unwrap();
            let b = average_au_intensity(&AuIntensityTable::new("c", ids, to_mat(&shuffled)).unwrap()).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
