use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The three input sources, in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModalityKind {
    Ehr,
    Text,
    Image,
}

impl ModalityKind {
    pub const ALL: [ModalityKind; 3] = [ModalityKind::Ehr, ModalityKind::Text, ModalityKind::Image];
    pub const COUNT: usize = 3;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn letter(self) -> char {
        match self {
            ModalityKind::Ehr => 'E',
            ModalityKind::Text => 'T',
            ModalityKind::Image => 'I',
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModalityKind::Ehr => "ehr",
            ModalityKind::Text => "text",
            ModalityKind::Image => "image",
        }
    }

    pub fn from_letter(c: char) -> Option<Self> {
        match c {
            'E' => Some(ModalityKind::Ehr),
            'T' => Some(ModalityKind::Text),
            'I' => Some(ModalityKind::Image),
            _ => None,
        }
    }
}

impl fmt::Display for ModalityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModalityKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ehr" | "e" => Ok(ModalityKind::Ehr),
            "text" | "t" => Ok(ModalityKind::Text),
            "image" | "i" => Ok(ModalityKind::Image),
            _ => Err(Error::Config(format!("unknown modality `{s}`"))),
        }
    }
}

/// A nonempty set of modalities, stored as a bitmask over canonical order.
///
/// The canonical key lists member letters in canonical order ("E", "ET",
/// "ETI", ...), so distinct subsets always have distinct keys.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct ModalityCombination(u8);

impl ModalityCombination {
    pub fn new(members: impl IntoIterator<Item = ModalityKind>) -> Result<Self> {
        let bits = members.into_iter().fold(0u8, |acc, m| acc | (1 << m.index()));
        if bits == 0 {
            return Err(Error::Config("modality combination must be nonempty".into()));
        }
        Ok(Self(bits))
    }

    pub fn from_mask(mask: [bool; 3]) -> Result<Self> {
        Self::new(ModalityKind::ALL.into_iter().filter(|m| mask[m.index()]))
    }

    pub fn complete() -> Self {
        Self(0b111)
    }

    pub fn contains(self, m: ModalityKind) -> bool {
        self.0 & (1 << m.index()) != 0
    }

    pub fn members(self) -> impl Iterator<Item = ModalityKind> {
        ModalityKind::ALL.into_iter().filter(move |m| self.contains(*m))
    }

    pub fn mask(self) -> [bool; 3] {
        ModalityKind::ALL.map(|m| self.contains(m))
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        false
    }

    pub fn key(self) -> String {
        self.members().map(ModalityKind::letter).collect()
    }

    /// Every nonempty subset, sorted by key.
    pub fn all() -> Vec<Self> {
        let mut v: Vec<Self> = (1u8..8).map(Self).collect();
        v.sort_by_key(|c| c.key());
        v
    }
}

impl PartialOrd for ModalityCombination {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for ModalityCombination {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.key().cmp(&other.key())
    }
}

impl fmt::Debug for ModalityCombination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ModalityCombination({})", self.key())
    }
}

impl fmt::Display for ModalityCombination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.key())
    }
}

impl FromStr for ModalityCombination {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut members = Vec::new();
        for c in s.chars() {
            members.push(
                ModalityKind::from_letter(c)
                    .ok_or_else(|| Error::Config(format!("bad combination key `{s}`")))?,
            );
        }
        let combo = Self::new(members)?;
        if combo.key() != s {
            return Err(Error::Config(format!(
                "combination key `{s}` is not canonical (expected `{}`)",
                combo.key()
            )));
        }
        Ok(combo)
    }
}

impl Serialize for ModalityCombination {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.key())
    }
}

impl<'de> Deserialize<'de> for ModalityCombination {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One admission-like record. Absent modalities are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub label: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ehr_static: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ehr_series: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_tokens: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_features: Option<Vec<f64>>,
}

impl Sample {
    pub fn has(&self, m: ModalityKind) -> bool {
        match m {
            ModalityKind::Ehr => self.ehr_static.is_some(),
            ModalityKind::Text => self.text_tokens.is_some(),
            ModalityKind::Image => self.image_features.is_some(),
        }
    }

    /// The availability pattern. Callers should [`validate`](Self::validate)
    /// first; an invalid sample with no modality reports an error here.
    pub fn combination(&self) -> Result<ModalityCombination> {
        ModalityCombination::new(ModalityKind::ALL.into_iter().filter(|m| self.has(*m)))
            .map_err(|_| self.invalid("no modality present"))
    }

    fn invalid(&self, reason: impl Into<String>) -> Error {
        Error::InvalidSample {
            id: self.id.clone(),
            reason: reason.into(),
        }
    }

    /// Checks the record-level invariants: label is binary, EHR parts are
    /// paired, at least one modality is present, token lists are nonempty
    /// and all reals are finite.
    pub fn validate(&self) -> Result<()> {
        if self.label > 1 {
            return Err(self.invalid(format!("label {} is not 0 or 1", self.label)));
        }
        if self.ehr_static.is_some() != self.ehr_series.is_some() {
            return Err(self.invalid("ehr_static and ehr_series must be present together"));
        }
        if matches!(&self.text_tokens, Some(t) if t.is_empty()) {
            return Err(self.invalid("text_tokens is empty"));
        }
        if let Some(series) = &self.ehr_series {
            if series.is_empty() {
                return Err(self.invalid("ehr_series has no time steps"));
            }
        }
        let finite = self.ehr_static.iter().flatten().all(|v| v.is_finite())
            && self.ehr_series.iter().flatten().flatten().all(|v| v.is_finite())
            && self.image_features.iter().flatten().all(|v| v.is_finite());
        if !finite {
            return Err(self.invalid("non-finite feature value"));
        }
        self.combination().map(|_| ())
    }

    /// A copy keeping only the modalities in `keep`; `None` when nothing
    /// would remain.
    pub fn restricted_to(&self, keep: ModalityCombination) -> Option<Sample> {
        let mut s = self.clone();
        if !keep.contains(ModalityKind::Ehr) {
            s.ehr_static = None;
            s.ehr_series = None;
        }
        if !keep.contains(ModalityKind::Text) {
            s.text_tokens = None;
        }
        if !keep.contains(ModalityKind::Image) {
            s.image_features = None;
        }
        s.combination().ok().map(|_| s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ModalityKind::*;

    #[test]
    fn keys_are_canonical_and_injective() {
        let all = ModalityCombination::all();
        let keys: Vec<String> = all.iter().map(|c| c.key()).collect();
        assert_eq!(keys, vec!["E", "EI", "ET", "ETI", "I", "T", "TI"]);
        let mut dedup = keys.clone();
        dedup.dedup();
        assert_eq!(dedup.len(), 7);
        let c = ModalityCombination::new([Image, Ehr]).unwrap();
        assert_eq!(c.key(), "EI");
        assert_eq!("EI".parse::<ModalityCombination>().unwrap(), c);
        assert!("IE".parse::<ModalityCombination>().is_err());
        assert!("".parse::<ModalityCombination>().is_err());
    }

    #[test]
    fn empty_combination_rejected() {
        assert!(ModalityCombination::new([]).is_err());
    }

    fn ehr_only() -> Sample {
        Sample {
            id: "a".into(),
            label: 1,
            ehr_static: Some(vec![0.0; 2]),
            ehr_series: Some(vec![vec![0.0; 3]; 4]),
            text_tokens: None,
            image_features: None,
        }
    }

    #[test]
    fn sample_invariants() {
        let s = ehr_only();
        s.validate().unwrap();
        assert_eq!(s.combination().unwrap().key(), "E");

        let mut unpaired = s.clone();
        unpaired.ehr_series = None;
        assert!(unpaired.validate().is_err());

        let mut nothing = s.clone();
        nothing.ehr_static = None;
        nothing.ehr_series = None;
        assert!(nothing.validate().is_err());

        let mut bad_label = s.clone();
        bad_label.label = 2;
        assert!(bad_label.validate().is_err());

        let mut nan = s;
        nan.ehr_static = Some(vec![f64::NAN, 0.0]);
        assert!(nan.validate().is_err());
    }

    #[test]
    fn restriction_drops_modalities() {
        let mut s = ehr_only();
        s.text_tokens = Some(vec![1, 2]);
        let t = s.restricted_to("T".parse().unwrap()).unwrap();
        assert_eq!(t.combination().unwrap().key(), "T");
        assert!(s.restricted_to("I".parse().unwrap()).is_none());
    }
}
