//! Procedural audio/expression corpus with known style structure.
//!
//! Each clip has a [`StyleSpec`] (emotion, intensity, target AU activation).
//! Expression channels are split into three blocks:
//!
//! * mouth channels: a fixed linear map of the current audio frame, scaled
//!   by a style-dependent gain (never phase-shifted);
//! * pseudo-AU channels, one per action unit: the inverse of the AU readout
//!   applied to the style's AU bias, plus slow noise;
//! * free channels: an emotion-specific offset plus slow noise.
//!
//! [`measure_au`] reads AU intensities back with a fixed affine map, which
//! closes the loop between captions, styles and generated sequences.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::annotation::{
    annotate_corpus, write_au_tables_csv, write_records, AnnotationRecord, AuIntensityTable, AuLevel, AuLookup,
    ClipEmotion, DropConfig, EmotionFile, EmotionTable, AU_MAX,
};
use crate::error::{Error, Result};
use crate::matfile;
use crate::seed::rng_for;
use crate::tape::Mat;

pub const EMOTIONS: [&str; 8] = ["neutral", "angry", "contempt", "disgusted", "fear", "happy", "sad", "surprised"];
pub const NEUTRAL: usize = 0;

/// Per-emotion AU activation at unit intensity scale, in DISFA order
/// (AU1, AU2, AU4, AU6, AU9, AU12, AU25, AU26).
const AU_PROTOTYPES: [[f64; 8]; 8] = [
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [0.0, 0.0, 3.4, 0.6, 1.2, 0.0, 1.0, 0.4],
    [0.0, 0.6, 0.8, 0.8, 0.0, 1.8, 0.4, 0.0],
    [0.0, 0.0, 1.8, 1.2, 3.2, 0.0, 1.2, 0.6],
    [2.8, 1.8, 1.8, 0.0, 0.0, 0.0, 2.2, 1.6],
    [0.0, 0.0, 0.0, 2.8, 0.0, 3.4, 2.0, 1.0],
    [2.6, 0.0, 2.2, 0.0, 0.0, 0.0, 0.4, 0.0],
    [3.0, 3.4, 0.0, 0.0, 0.0, 0.0, 2.2, 3.0],
];

const MOUTH_GAIN: [f64; 8] = [1.0, 1.2, 0.8, 0.9, 1.0, 1.1, 0.7, 1.25];

/// Free-channel offsets per emotion.
const FREE_OFFSETS: [[f64; 4]; 8] = [
    [0.0, 0.0, 0.0, 0.0],
    [0.4, -0.3, 0.2, 0.0],
    [-0.2, 0.3, 0.0, 0.2],
    [0.3, 0.0, -0.3, 0.2],
    [-0.3, -0.2, 0.3, -0.2],
    [0.2, 0.4, 0.0, -0.3],
    [-0.4, 0.0, -0.2, 0.1],
    [0.0, -0.4, 0.4, 0.3],
];

/// Mouth channels = MOUTH_MAP · audio frame (4 x 8, published constant).
const MOUTH_MAP: [[f64; 8]; 4] = [
    [0.50, 0.30, -0.20, 0.10, 0.00, 0.25, -0.10, 0.05],
    [-0.10, 0.45, 0.30, -0.25, 0.15, 0.00, 0.20, -0.05],
    [0.20, -0.15, 0.40, 0.35, -0.20, 0.10, 0.00, 0.15],
    [0.05, 0.20, -0.10, 0.30, 0.45, -0.25, 0.15, 0.10],
];

pub const INTENSITY_SCALE: [f64; 3] = [0.45, 0.8, 1.15];

/// Dimensions and channel layout of the synthetic world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub expr_dim: usize,
    pub audio_dim: usize,
    pub frames: usize,
    pub fps: f64,
    pub mouth_channels: std::ops::Range<usize>,
    pub au_channels: std::ops::Range<usize>,
    pub free_channels: std::ops::Range<usize>,
    /// `au = gain * channel_mean + intercept`, clipped to [0, 5].
    pub au_readout_gain: f64,
    pub au_readout_intercept: f64,
    /// Gaussian smoothing width (frames) of the audio features.
    pub audio_smoothing: f64,
    pub mouth_noise: f64,
    pub au_noise: f64,
    pub free_noise: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            expr_dim: 16,
            audio_dim: 8,
            frames: 64,
            fps: 25.0,
            mouth_channels: 0..4,
            au_channels: 4..12,
            free_channels: 12..16,
            au_readout_gain: 2.5,
            au_readout_intercept: 0.0,
            audio_smoothing: 1.5,
            mouth_noise: 0.02,
            au_noise: 0.08,
            free_noise: 0.1,
        }
    }
}

impl WorldConfig {
    pub fn num_aus(&self) -> usize {
        self.au_channels.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleSpec {
    pub emotion_id: usize,
    pub intensity_level: u8,
    pub au_bias: Vec<f64>,
}

impl StyleSpec {
    pub fn emotion(&self) -> &'static str {
        EMOTIONS[self.emotion_id]
    }

    /// Emotion group id such as `happy_2`; neutral has a single group.
    pub fn group(&self) -> String {
        if self.emotion_id == NEUTRAL {
            "neutral".into()
        } else {
            format!("{}_{}", self.emotion(), self.intensity_level)
        }
    }

    pub fn mouth_gain(&self) -> f64 {
        MOUTH_GAIN[self.emotion_id] * (0.85 + 0.1 * self.intensity_level as f64)
    }
}

/// Per-clip noise of the style sampler, kept separate so the same noise
/// can be combined with different emotions or intensities.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleNoise {
    pub scale: Vec<f64>,
    pub floor: Vec<f64>,
    pub idiosyncratic: Vec<f64>,
}

impl StyleNoise {
    pub fn sample(num_aus: usize, rng: &mut impl Rng) -> Self {
        let mut scale = Vec::with_capacity(num_aus);
        let mut floor = Vec::with_capacity(num_aus);
        let mut idiosyncratic = Vec::with_capacity(num_aus);
        for _ in 0..num_aus {
            let z: f64 = StandardNormal.sample(rng);
            scale.push(1.0 + 0.3 * z.clamp(-1.5, 1.5));
            floor.push(rng.random_range(0.0..0.35));
            let fire = rng.random::<f64>() < 0.15;
            let amount = rng.random_range(0.6..2.5);
            idiosyncratic.push(if fire { amount } else { 0.0 });
        }
        Self { scale, floor, idiosyncratic }
    }
}

/// Combine emotion, intensity and noise into a style. Neutral clips only
/// keep the sub-floor jitter, so none of their AUs activate.
pub fn compose_style(emotion_id: usize, intensity_level: u8, noise: &StyleNoise) -> StyleSpec {
    assert!(emotion_id < EMOTIONS.len() && (1..=3).contains(&intensity_level));
    let s = INTENSITY_SCALE[intensity_level as usize - 1];
    let proto = &AU_PROTOTYPES[emotion_id];
    let au_bias = (0..noise.scale.len())
        .map(|k| {
            let p = proto.get(k).copied().unwrap_or(0.0);
            let extra = if emotion_id == NEUTRAL { 0.0 } else { noise.idiosyncratic[k] };
            (p * s * noise.scale[k] + noise.floor[k] + extra).clamp(0.0, AU_MAX)
        })
        .collect();
    StyleSpec { emotion_id, intensity_level, au_bias }
}

pub fn sample_style(world: &WorldConfig, rng: &mut impl Rng) -> StyleSpec {
    let emotion_id = rng.random_range(0..EMOTIONS.len());
    let intensity_level = rng.random_range(1..=3u8);
    let noise = StyleNoise::sample(world.num_aus(), rng);
    compose_style(emotion_id, intensity_level, &noise)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm = k.iter().map(|x| x * x).sum::<f64>().sqrt();
    k.into_iter().map(|x| x / norm).collect()
}

/// `frames x channels` unit-variance Gaussian noise smoothed along time.
fn smooth_noise(frames: usize, channels: usize, sigma: f64, rng: &mut impl Rng) -> Mat {
    let kernel = gaussian_kernel(sigma);
    let pad = kernel.len() - 1;
    let raw = Mat::from_shape_simple_fn((frames + pad, channels), || StandardNormal.sample(rng));
    Mat::from_shape_fn((frames, channels), |(t, c)| kernel.iter().enumerate().map(|(i, w)| w * raw[[t + i, c]]).sum())
}

pub fn synth_audio(world: &WorldConfig, frames: usize, rng: &mut impl Rng) -> Result<Mat> {
    if frames < 1 {
        return Err(Error::Invalid("audio needs at least one frame".into()));
    }
    Ok(smooth_noise(frames, world.audio_dim, world.audio_smoothing, rng))
}

pub fn mouth_map() -> Mat {
    Mat::from_shape_fn((4, 8), |(i, j)| MOUTH_MAP[i][j])
}

pub fn render_expression(world: &WorldConfig, style: &StyleSpec, audio: &Mat, rng: &mut impl Rng) -> Result<Mat> {
    if audio.ncols() != world.audio_dim || audio.nrows() == 0 {
        return Err(Error::Shape(format!("audio must be Tx{}, got {:?}", world.audio_dim, audio.dim())));
    }
    if style.au_bias.len() != world.num_aus() {
        return Err(Error::Shape(format!("style has {} AUs, world has {}", style.au_bias.len(), world.num_aus())));
    }
    let t = audio.nrows();
    let mut expr = Mat::zeros((t, world.expr_dim));

    let mouth = audio.dot(&mouth_map().t()) * style.mouth_gain();
    let mouth_noise = smooth_noise(t, world.mouth_channels.len(), 1.0, rng) * world.mouth_noise;
    for (j, c) in world.mouth_channels.clone().enumerate() {
        for f in 0..t {
            expr[[f, c]] = mouth[[f, j]] + mouth_noise[[f, j]];
        }
    }

    let au_noise = smooth_noise(t, world.num_aus(), 3.0, rng) * world.au_noise;
    for (k, c) in world.au_channels.clone().enumerate() {
        let level = (style.au_bias[k] - world.au_readout_intercept) / world.au_readout_gain;
        for f in 0..t {
            expr[[f, c]] = level + au_noise[[f, k]];
        }
    }

    let free_noise = smooth_noise(t, world.free_channels.len(), 3.0, rng) * world.free_noise;
    let s = INTENSITY_SCALE[style.intensity_level as usize - 1];
    for (j, c) in world.free_channels.clone().enumerate() {
        let offset = FREE_OFFSETS[style.emotion_id].get(j).copied().unwrap_or(0.0) * s;
        for f in 0..t {
            expr[[f, c]] = offset + free_noise[[f, j]];
        }
    }
    Ok(expr)
}

/// Affine AU readout of the pseudo-AU channel means, clipped to [0, 5].
pub fn measure_au(world: &WorldConfig, expr: &Mat) -> Vec<f64> {
    let t = expr.nrows().max(1) as f64;
    world
        .au_channels
        .clone()
        .map(|c| {
            let mean = expr.column(c).sum() / t;
            (world.au_readout_gain * mean + world.au_readout_intercept).clamp(0.0, AU_MAX)
        })
        .collect()
}

/// The 16-label emotion vocabulary and the labels shared by each of the
/// 22 emotion groups.
pub fn emotion_table() -> EmotionTable {
    let vocabulary = [
        "calm", "annoyed", "angry", "furious", "scornful", "disgusted", "nervous", "scared", "terrified", "pleased",
        "happy", "ecstatic", "gloomy", "sad", "surprised", "astonished",
    ];
    let groups: [(&str, &[&str]); 22] = [
        ("neutral", &["calm"]),
        ("angry_1", &["annoyed"]),
        ("angry_2", &["angry", "annoyed"]),
        ("angry_3", &["furious", "angry"]),
        ("contempt_1", &["scornful"]),
        ("contempt_2", &["scornful", "annoyed"]),
        ("contempt_3", &["scornful", "disgusted"]),
        ("disgusted_1", &["disgusted"]),
        ("disgusted_2", &["disgusted", "scornful"]),
        ("disgusted_3", &["disgusted", "angry"]),
        ("fear_1", &["nervous"]),
        ("fear_2", &["scared", "nervous"]),
        ("fear_3", &["terrified", "scared"]),
        ("happy_1", &["pleased"]),
        ("happy_2", &["happy", "pleased"]),
        ("happy_3", &["ecstatic", "happy"]),
        ("sad_1", &["gloomy"]),
        ("sad_2", &["sad", "gloomy"]),
        ("sad_3", &["sad"]),
        ("surprised_1", &["surprised"]),
        ("surprised_2", &["surprised", "astonished"]),
        ("surprised_3", &["astonished"]),
    ];
    EmotionTable {
        vocabulary: vocabulary.iter().map(|s| s.to_string()).collect(),
        groups: groups.iter().map(|(g, ls)| (g.to_string(), ls.iter().map(|s| s.to_string()).collect())).collect(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One clip as listed in the corpus index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipMeta {
    pub clip_id: String,
    pub speaker_id: usize,
    pub split: Split,
    pub subject: String,
    pub emotion_group: String,
    pub style: StyleSpec,
    pub measured_au: Vec<f64>,
    pub au_levels: Vec<(String, AuLevel)>,
    pub audio: String,
    pub expression: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub meta: ClipMeta,
    pub audio: Mat,
    pub expression: Mat,
    /// Full caption (no clause dropped).
    pub sentence: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub world: WorldConfig,
    pub lookup: AuLookup,
    pub emotions: EmotionTable,
    pub samples: Vec<Sample>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.meta.split == split).collect()
    }

    pub fn labels_for(&self, sample: &Sample) -> &[String] {
        self.emotions.labels(&sample.meta.emotion_group).unwrap_or(&[])
    }
}

pub fn speaker_count(n_clips: usize) -> usize {
    (n_clips / 40).clamp(3, 48)
}

fn split_of(speaker: usize, n_speakers: usize) -> Split {
    let test = (n_speakers / 8).max(1);
    let val = (n_speakers / 16).max(1);
    if speaker >= n_speakers - test {
        Split::Test
    } else if speaker >= n_speakers - test - val {
        Split::Val
    } else {
        Split::Train
    }
}

/// Generate `n_clips` samples of `frames` frames. Speakers are assigned
/// round-robin and the train/val/test split is by speaker.
pub fn make_dataset(world: &WorldConfig, n_clips: usize, frames: usize, seed: u64) -> Result<Corpus> {
    if n_clips < 3 {
        return Err(Error::Invalid(format!("need at least 3 clips to split by speaker, got {n_clips}")));
    }
    let world = WorldConfig { frames, ..world.clone() };
    let lookup = AuLookup::default();
    if lookup.len() != world.num_aus() {
        return Err(Error::Config("AU lookup and world disagree on AU count".into()));
    }
    let emotions = emotion_table();
    let n_speakers = speaker_count(n_clips);

    let mut samples = Vec::with_capacity(n_clips);
    let mut tables = Vec::with_capacity(n_clips);
    let mut clips = BTreeMap::new();
    for i in 0..n_clips {
        let clip_id = format!("clip_{i:05}");
        let mut rng = rng_for(seed, &format!("clip/{clip_id}"));
        let style = sample_style(&world, &mut rng);
        let audio = synth_audio(&world, frames, &mut rng)?;
        let expression = render_expression(&world, &style, &audio, &mut rng)?;
        let measured_au = measure_au(&world, &expression);
        let au_levels = lookup.activated_levels(&measured_au)?;
        let speaker_id = i % n_speakers;
        let subject = if speaker_id % 2 == 0 { "A man" } else { "A woman" }.to_string();
        let table = AuIntensityTable::new(
            clip_id.clone(),
            lookup.au_ids(),
            Mat::from_shape_vec((1, measured_au.len()), measured_au.clone()).expect("row"),
        )?;
        tables.push(table);
        clips.insert(clip_id.clone(), ClipEmotion { group: style.group(), subject: subject.clone() });
        let meta = ClipMeta {
            audio: format!("clips/{clip_id}.audio.mat"),
            expression: format!("clips/{clip_id}.expr.mat"),
            clip_id,
            speaker_id,
            split: split_of(speaker_id, n_speakers),
            subject,
            emotion_group: style.group(),
            style,
            measured_au,
            au_levels,
        };
        samples.push(Sample { meta, audio, expression, sentence: String::new() });
    }

    let records = annotate_corpus(&tables, &emotions, &clips, &lookup, seed, DropConfig::NONE)?;
    for (sample, rec) in samples.iter_mut().zip(&records) {
        match rec {
            AnnotationRecord::Caption(c) if c.clip_id == sample.meta.clip_id => sample.sentence = c.sentence.clone(),
            other => return Err(Error::Invalid(format!("annotation failed for {}: {other:?}", sample.meta.clip_id))),
        }
    }
    Ok(Corpus { world, lookup, emotions, samples })
}

#[derive(Serialize, Deserialize)]
struct IndexLine {
    #[serde(flatten)]
    meta: ClipMeta,
    sentence: String,
}

/// Write the corpus directory: `index.jsonl`, `captions.jsonl`,
/// `emotions.json`, `lookup.json`, `au_tables.csv`, `world.json` and
/// per-clip matrix files under `clips/`. Returns every file written.
pub fn write_corpus(dir: &Path, corpus: &Corpus, seed: u64) -> Result<Vec<PathBuf>> {
    let clip_dir = dir.join("clips");
    std::fs::create_dir_all(&clip_dir).map_err(|e| Error::io(&clip_dir, e))?;
    let mut written = Vec::new();
    let mut put = |path: PathBuf, bytes: Vec<u8>| -> Result<()> {
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        written.push(path);
        Ok(())
    };

    let mut index = Vec::new();
    let mut tables = Vec::new();
    let mut clips = BTreeMap::new();
    for s in &corpus.samples {
        put(dir.join(&s.meta.audio), matfile::encode(&s.audio))?;
        put(dir.join(&s.meta.expression), matfile::encode(&s.expression))?;
        let line = IndexLine { meta: s.meta.clone(), sentence: s.sentence.clone() };
        serde_json::to_writer(&mut index, &line).expect("index serializes");
        index.push(b'\n');
        let row = Mat::from_shape_vec((1, s.meta.measured_au.len()), s.meta.measured_au.clone()).expect("row");
        tables.push(AuIntensityTable::new(s.meta.clip_id.clone(), corpus.lookup.au_ids(), row)?);
        clips.insert(
            s.meta.clip_id.clone(),
            ClipEmotion { group: s.meta.emotion_group.clone(), subject: s.meta.subject.clone() },
        );
    }
    put(dir.join("index.jsonl"), index)?;
    put(dir.join("world.json"), serde_json::to_vec_pretty(&corpus.world).expect("world serializes"))?;
    put(dir.join("lookup.json"), serde_json::to_vec_pretty(&corpus.lookup).expect("lookup serializes"))?;

    let emotion_file = EmotionFile { table: corpus.emotions.clone(), clips };
    let emotions_path = dir.join("emotions.json");
    emotion_file.save(&emotions_path)?;
    written.push(emotions_path);

    let tables_path = dir.join("au_tables.csv");
    write_au_tables_csv(&tables_path, &tables)?;
    written.push(tables_path);

    let records = annotate_corpus(
        &tables,
        &corpus.emotions,
        &emotion_file.clips,
        &corpus.lookup,
        seed,
        DropConfig::NONE,
    )?;
    let captions_path = dir.join("captions.jsonl");
    write_records(&captions_path, &records)?;
    written.push(captions_path);
    Ok(written)
}

pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let read_json = |name: &str| -> Result<String> {
        let p = dir.join(name);
        std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
    };
    let world_path = dir.join("world.json");
    let world: WorldConfig =
        serde_json::from_str(&read_json("world.json")?).map_err(|e| Error::format(&world_path, e.to_string()))?;
    let lookup = AuLookup::load(&dir.join("lookup.json"))?;
    let emotions = EmotionFile::load(&dir.join("emotions.json"))?.table;

    let index_path = dir.join("index.jsonl");
    let f = std::fs::File::open(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let mut samples = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&index_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: IndexLine = serde_json::from_str(&line)
            .map_err(|e| Error::format(&index_path, format!("line {}: {e}", i + 1)))?;
        let audio = matfile::read(&dir.join(&entry.meta.audio))?;
        let expression = matfile::read(&dir.join(&entry.meta.expression))?;
        if audio.nrows() != expression.nrows() {
            return Err(Error::format(&index_path, format!("{}: audio/expression length mismatch", entry.meta.clip_id)));
        }
        samples.push(Sample { meta: entry.meta, audio, expression, sentence: entry.sentence });
    }
    if samples.is_empty() {
        return Err(Error::format(&index_path, "corpus has no clips"));
    }
    Ok(Corpus { world, lookup, emotions, samples })
}
