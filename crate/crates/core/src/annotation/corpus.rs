use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{average_au_intensity, build_caption, AuIntensityTable, AuLevel, AuLookup, DropConfig, EmotionTable};
use crate::error::{Error, Result};
use crate::seed::rng_for;
use crate::tape::Mat;

/// Emotion group and subject phrase assigned to one clip.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipEmotion {
    pub group: String,
    pub subject: String,
}

/// Contents of an emotion file: vocabulary, group labels and the group and
/// subject of every clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmotionFile {
    #[serde(flatten)]
    pub table: EmotionTable,
    pub clips: BTreeMap<String, ClipEmotion>,
}

impl EmotionFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let f: Self = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        f.table.validate()?;
        Ok(f)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("emotion file serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuClauseRecord {
    pub au: String,
    pub level: AuLevel,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub clip_id: String,
    pub sentence: String,
    pub subject: String,
    pub emotion_label: Option<String>,
    pub au_clauses: Vec<AuClauseRecord>,
}

/// One line of the caption file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AnnotationRecord {
    Caption(CaptionRecord),
    Error { clip_id: String, error: String },
}

impl AnnotationRecord {
    pub fn clip_id(&self) -> &str {
        match self {
            AnnotationRecord::Caption(c) => &c.clip_id,
            AnnotationRecord::Error { clip_id, .. } => clip_id,
        }
    }
}

fn annotate_one(
    table: &AuIntensityTable,
    emotions: &EmotionTable,
    clips: &BTreeMap<String, ClipEmotion>,
    lookup: &AuLookup,
    seed: u64,
    drop: DropConfig,
) -> Result<CaptionRecord> {
    let id = table.clip_id();
    let clip = clips.get(id).ok_or_else(|| Error::Invalid(format!("clip {id} has no emotion group")))?;
    let labels = emotions
        .labels(&clip.group)
        .ok_or_else(|| Error::Invalid(format!("emotion group {} not in table", clip.group)))?;

    let means = average_au_intensity(table)?;
    let mut levels = Vec::new();
    for entry in &lookup.entries {
        if let Some(col) = table.au_ids().iter().position(|a| *a == entry.au_id) {
            let level = super::quantize_au_level(means[col], entry)?;
            if level != AuLevel::None {
                levels.push((entry.au_id.clone(), level));
            }
        }
    }
    if let Some(unknown) = table.au_ids().iter().find(|a| lookup.get(a).is_none()) {
        return Err(Error::Invalid(format!("AU {unknown} not in lookup")));
    }

    let mut rng = rng_for(seed, &format!("caption/{id}"));
    let caption = build_caption(&clip.subject, labels, &levels, lookup, &mut rng, drop)?;
    Ok(CaptionRecord {
        clip_id: id.to_string(),
        sentence: caption.sentence,
        subject: caption.subject,
        emotion_label: caption.emotion_label,
        au_clauses: caption.au_clauses.into_iter().map(|c| AuClauseRecord { au: c.au, level: c.level }).collect(),
    })
}

/// Caption every clip. Failures are reported per record; output is sorted
/// by clip id and each clip's randomness is keyed on `(seed, clip_id)`.
pub fn annotate_corpus(
    tables: &[AuIntensityTable],
    emotions: &EmotionTable,
    clips: &BTreeMap<String, ClipEmotion>,
    lookup: &AuLookup,
    seed: u64,
    drop: DropConfig,
) -> Result<Vec<AnnotationRecord>> {
    emotions.validate()?;
    lookup.validate()?;
    drop.validate()?;
    let mut sorted: Vec<&AuIntensityTable> = tables.iter().collect();
    sorted.sort_by(|a, b| a.clip_id().cmp(b.clip_id()));
    Ok(sorted
        .into_iter()
        .map(|t| match annotate_one(t, emotions, clips, lookup, seed, drop) {
            Ok(rec) => AnnotationRecord::Caption(rec),
            Err(e) => AnnotationRecord::Error { clip_id: t.clip_id().to_string(), error: e.to_string() },
        })
        .collect())
}

pub fn write_records(path: &Path, records: &[AnnotationRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).expect("records serialize");
        out.push(b'\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

#[derive(Deserialize, Serialize)]
struct JsonTable {
    clip_id: String,
    au_ids: Vec<String>,
    frames: Vec<Vec<f64>>,
}

/// Read AU tables from CSV (`clip_id,frame_index,<AU columns>`) or from
/// JSON lines (`{"clip_id", "au_ids", "frames"}`), chosen by extension.
pub fn read_au_tables(path: &Path) -> Result<Vec<AuIntensityTable>> {
    let is_csv = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if is_csv {
        read_csv_tables(path)
    } else {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut out = Vec::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let t: JsonTable =
                serde_json::from_str(&line).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?;
            let rows = t.frames.len();
            let cols = t.au_ids.len();
            if t.frames.iter().any(|r| r.len() != cols) {
                return Err(Error::format(path, format!("line {}: ragged frame rows", i + 1)));
            }
            let m = Mat::from_shape_fn((rows, cols), |(r, c)| t.frames[r][c]);
            out.push(AuIntensityTable::new(t.clip_id, t.au_ids, m)?);
        }
        Ok(out)
    }
}

fn read_csv_tables(path: &Path) -> Result<Vec<AuIntensityTable>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let headers = rdr.headers().map_err(|e| Error::format(path, e.to_string()))?.clone();
    if headers.len() < 3 || &headers[0] != "clip_id" || &headers[1] != "frame_index" {
        return Err(Error::format(path, "header must start with clip_id,frame_index"));
    }
    let au_ids: Vec<String> = headers.iter().skip(2).map(str::to_string).collect();
    let mut by_clip: BTreeMap<String, Vec<(u64, Vec<f64>)>> = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::format(path, e.to_string()))?;
        let bad = |m: String| Error::format(path, format!("row {}: {m}", i + 2));
        let frame: u64 = rec[1].trim().parse().map_err(|e| bad(format!("frame_index: {e}")))?;
        let vals = rec
            .iter()
            .skip(2)
            .map(|v| v.trim().parse::<f64>().map_err(|e| bad(format!("{v:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        by_clip.entry(rec[0].to_string()).or_default().push((frame, vals));
    }
    by_clip
        .into_iter()
        .map(|(clip, mut rows)| {
            rows.sort_by_key(|r| r.0);
            let m = Mat::from_shape_fn((rows.len(), au_ids.len()), |(r, c)| rows[r].1[c]);
            AuIntensityTable::new(clip, au_ids.clone(), m)
        })
        .collect()
}

/// Write tables as CSV in the layout accepted by [`read_au_tables`].
pub fn write_au_tables_csv(path: &Path, tables: &[AuIntensityTable]) -> Result<()> {
    let Some(first) = tables.first() else {
        return Err(Error::Invalid("no AU tables to write".into()));
    };
    let mut out = String::from("clip_id,frame_index");
    for a in first.au_ids() {
        out.push(',');
        out.push_str(a);
    }
    out.push('\n');
    for t in tables {
        if t.au_ids() != first.au_ids() {
            return Err(Error::Invalid("AU tables disagree on AU columns".into()));
        }
        for (i, row) in t.frames().rows().into_iter().enumerate() {
            out.push_str(&format!("{},{}", t.clip_id(), i));
            for x in row {
                out.push_str(&format!(",{x}"));
            }
            out.push('\n');
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
