use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{AuLevel, AuLookup};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuClause {
    pub au: String,
    pub level: AuLevel,
    pub phrase: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Caption {
    pub subject: String,
    pub emotion_label: Option<String>,
    pub au_clauses: Vec<AuClause>,
    pub sentence: String,
}

impl Caption {
    /// Assemble a caption and render its sentence.
    pub fn new(subject: &str, emotion_label: Option<String>, au_clauses: Vec<AuClause>) -> Self {
        let sentence = render_sentence(subject, emotion_label.as_deref(), &au_clauses);
        Self { subject: subject.to_string(), emotion_label, au_clauses, sentence }
    }
}

/// Probabilities of omitting the emotion clause or the AU clause list.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropConfig {
    pub emotion: f64,
    pub au: f64,
}

impl DropConfig {
    pub const NONE: DropConfig = DropConfig { emotion: 0.0, au: 0.0 };

    pub fn validate(&self) -> Result<()> {
        let ok = |p: f64| (0.0..=1.0).contains(&p);
        if !ok(self.emotion) || !ok(self.au) || self.emotion + self.au > 1.0 {
            return Err(Error::Config(format!(
                "drop probabilities must lie in [0,1] and sum to at most 1, got ({}, {})",
                self.emotion, self.au
            )));
        }
        Ok(())
    }
}

/// `An expressionless <noun>.` for a subject such as `A man`.
pub fn neutral_sentence(subject: &str) -> String {
    let noun = subject
        .strip_prefix("An ")
        .or_else(|| subject.strip_prefix("A "))
        .or_else(|| subject.strip_prefix("The "))
        .unwrap_or(subject);
    format!("An expressionless {noun}.")
}

fn join_clauses(phrases: &[&str]) -> String {
    match phrases {
        [] => String::new(),
        [one] => (*one).to_string(),
        [init @ .., last] => format!("{} and {}", init.join(", "), last),
    }
}

pub fn render_sentence(subject: &str, emotion: Option<&str>, clauses: &[AuClause]) -> String {
    let phrases: Vec<&str> = clauses.iter().map(|c| c.phrase.as_str()).collect();
    match (emotion, phrases.is_empty()) {
        (None, true) => neutral_sentence(subject),
        (Some(e), true) => format!("{subject} is {e}."),
        (None, false) => format!("{subject} speaks with {}.", join_clauses(&phrases)),
        (Some(e), false) => format!("{subject} is {e} and speaks with {}.", join_clauses(&phrases)),
    }
}

/// Build one caption: pick an emotion label uniformly, render every
/// activated AU, then omit at most one of the two clauses according to
/// `drop`. A clause is never dropped when it is the only one present.
pub fn build_caption(
    subject: &str,
    emotion_labels: &[String],
    au_levels: &[(String, AuLevel)],
    lookup: &AuLookup,
    rng: &mut impl Rng,
    drop: DropConfig,
) -> Result<Caption> {
    if subject.trim().is_empty() {
        return Err(Error::Invalid("empty subject".into()));
    }
    drop.validate()?;

    let r: f64 = rng.random();
    let label = if emotion_labels.is_empty() {
        None
    } else {
        Some(emotion_labels[rng.random_range(0..emotion_labels.len())].clone())
    };

    let mut clauses = Vec::with_capacity(au_levels.len());
    for (au, level) in au_levels {
        let entry = lookup.get(au).ok_or_else(|| Error::Invalid(format!("AU {au} not in lookup")))?;
        let phrase = entry
            .phrase(*level)
            .ok_or_else(|| Error::Invalid(format!("AU {au} is not activated")))?;
        clauses.push(AuClause { au: au.clone(), level: *level, phrase });
    }

    let both = label.is_some() && !clauses.is_empty();
    let (label, clauses) = if both && r < drop.emotion {
        (None, clauses)
    } else if both && r < drop.emotion + drop.au {
        (label, Vec::new())
    } else {
        (label, clauses)
    };
    Ok(Caption::new(subject, label, clauses))
}

/// Inverse of [`render_sentence`] for sentences produced with `lookup`.
///
/// The neutral fallback only records the noun, so its subject comes back as
/// `A <noun>` / `An <noun>`.
pub fn parse_sentence(sentence: &str, lookup: &AuLookup) -> Result<Caption> {
    let bad = |why: &str| Error::Invalid(format!("cannot parse {sentence:?}: {why}"));
    let body = sentence.strip_suffix('.').ok_or_else(|| bad("missing final period"))?;

    if let Some(noun) = body.strip_prefix("An expressionless ") {
        let article = if noun.starts_with(['a', 'e', 'i', 'o', 'u']) { "An" } else { "A" };
        return Ok(Caption::new(&format!("{article} {noun}"), None, Vec::new()));
    }

    const SPEAKS: &str = " speaks with ";
    const AND_SPEAKS: &str = " and speaks with ";
    let (subject, emotion, au_part) = if let Some(i) = body.find(" is ") {
        let subject = &body[..i];
        let rest = &body[i + 4..];
        match rest.find(AND_SPEAKS) {
            Some(j) => (subject, Some(&rest[..j]), Some(&rest[j + AND_SPEAKS.len()..])),
            None => (subject, Some(rest), None),
        }
    } else if let Some(i) = body.find(SPEAKS) {
        (&body[..i], None, Some(&body[i + SPEAKS.len()..]))
    } else {
        return Err(bad("no emotion or AU clause"));
    };

    let mut clauses = Vec::new();
    if let Some(list) = au_part {
        let (head, last) = match list.rfind(" and ") {
            Some(k) => (&list[..k], Some(&list[k + 5..])),
            None => (list, None),
        };
        let mut parts: Vec<&str> = head.split(", ").collect();
        parts.extend(last);
        for part in parts {
            let clause = lookup
                .entries
                .iter()
                .find_map(|e| {
                    AuLevel::ACTIVE
                        .iter()
                        .find(|&&l| e.phrase(l).as_deref() == Some(part))
                        .map(|&l| AuClause { au: e.au_id.clone(), level: l, phrase: part.to_string() })
                })
                .ok_or_else(|| bad(&format!("unknown AU phrase {part:?}")))?;
            clauses.push(clause);
        }
    }
    Ok(Caption::new(subject, emotion.map(str::to_string), clauses))
}
