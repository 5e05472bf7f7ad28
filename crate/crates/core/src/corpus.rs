//! Dialogue data model, the `ariign-corpus-v1` JSON-Lines format, a
//! controllable synthetic generator and whole-dialogue splitting.

use std::collections::BTreeSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Rng;
use crate::tensor::Matrix;

pub const CORPUS_SCHEMA: &str = "ariign-corpus-v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Audio,
    Visual,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Text, Modality::Audio, Modality::Visual];

    pub fn index(self) -> usize {
        match self {
            Modality::Text => 0,
            Modality::Audio => 1,
            Modality::Visual => 2,
        }
    }

    pub fn short(self) -> char {
        match self {
            Modality::Text => 't',
            Modality::Audio => 'a',
            Modality::Visual => 'v',
        }
    }

    pub fn from_short(c: char) -> Option<Self> {
        match c.to_ascii_lowercase() {
            't' => Some(Modality::Text),
            'a' => Some(Modality::Audio),
            'v' => Some(Modality::Visual),
            _ => None,
        }
    }

    /// The two modalities a generator for `self` reads from, in a fixed order.
    pub fn others(self) -> [Modality; 2] {
        match self {
            Modality::Text => [Modality::Audio, Modality::Visual],
            Modality::Audio => [Modality::Visual, Modality::Text],
            Modality::Visual => [Modality::Audio, Modality::Text],
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Modality::Text => "text",
            Modality::Audio => "audio",
            Modality::Visual => "visual",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub text: usize,
    pub audio: usize,
    pub visual: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Self {
            text: 100,
            audio: 100,
            visual: 512,
        }
    }
}

impl Dims {
    pub fn of(&self, m: Modality) -> usize {
        match m {
            Modality::Text => self.text,
            Modality::Audio => self.audio,
            Modality::Visual => self.visual,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub utt_id: String,
    pub speaker: String,
    pub label: usize,
    #[serde(rename = "text")]
    pub text_feat: Vec<f64>,
    #[serde(rename = "audio")]
    pub audio_feat: Vec<f64>,
    #[serde(rename = "visual")]
    pub visual_feat: Vec<f64>,
}

impl Utterance {
    pub fn features(&self, m: Modality) -> &[f64] {
        match m {
            Modality::Text => &self.text_feat,
            Modality::Audio => &self.audio_feat,
            Modality::Visual => &self.visual_feat,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dialogue {
    pub dialogue_id: String,
    pub utterances: Vec<Utterance>,
}

impl Dialogue {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// Speaker set in first-appearance order.
    pub fn speakers(&self) -> Vec<&str> {
        let mut seen = Vec::new();
        for u in &self.utterances {
            if !seen.contains(&u.speaker.as_str()) {
                seen.push(u.speaker.as_str());
            }
        }
        seen
    }

    /// Stacks one modality's feature vectors as a `T × D` matrix.
    pub fn feature_matrix(&self, m: Modality) -> Matrix {
        let rows: Vec<&[f64]> = self.utterances.iter().map(|u| u.features(m)).collect();
        Matrix::from_rows(&rows)
    }

    pub fn labels(&self) -> Vec<usize> {
        self.utterances.iter().map(|u| u.label).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusMeta {
    pub class_count: usize,
    pub class_names: Vec<String>,
    pub dims: Dims,
}

impl CorpusMeta {
    pub fn new(class_count: usize, dims: Dims) -> Self {
        Self {
            class_count,
            class_names: (0..class_count).map(|c| format!("class_{c}")).collect(),
            dims,
        }
    }

    fn validate(&self, line: usize) -> Result<()> {
        if self.class_count == 0 {
            return Err(parse_err(line, "class_count must be positive"));
        }
        if self.class_names.len() != self.class_count {
            return Err(parse_err(
                line,
                format!(
                    "class_names has {} entries for class_count {}",
                    self.class_names.len(),
                    self.class_count
                ),
            ));
        }
        if self.dims.text == 0 || self.dims.audio == 0 || self.dims.visual == 0 {
            return Err(parse_err(line, "dims must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub meta: CorpusMeta,
    pub dialogues: Vec<Dialogue>,
}

impl Corpus {
    pub fn utterance_count(&self) -> usize {
        self.dialogues.iter().map(Dialogue::len).sum()
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.meta.class_count];
        for u in self.dialogues.iter().flat_map(|d| &d.utterances) {
            h[u.label] += 1;
        }
        h
    }

    /// Checks every utterance and dialogue invariant; line numbers in errors
    /// are those the dialogue would have in a saved file.
    pub fn validate(&self) -> Result<()> {
        self.meta.validate(1)?;
        for (k, d) in self.dialogues.iter().enumerate() {
            validate_dialogue(&self.meta, d, k + 2)?;
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema: String,
    class_count: usize,
    class_names: Vec<String>,
    dims: Dims,
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn validate_dialogue(meta: &CorpusMeta, d: &Dialogue, line: usize) -> Result<()> {
    if d.utterances.is_empty() {
        return Err(parse_err(line, format!("dialogue {} has no utterances", d.dialogue_id)));
    }
    let mut ids = BTreeSet::new();
    for u in &d.utterances {
        if !ids.insert(u.utt_id.as_str()) {
            return Err(parse_err(
                line,
                format!("duplicate utt_id {} in dialogue {}", u.utt_id, d.dialogue_id),
            ));
        }
        if u.speaker.is_empty() {
            return Err(parse_err(line, format!("utterance {} has an empty speaker", u.utt_id)));
        }
        if u.label >= meta.class_count {
            return Err(Error::Label {
                line,
                label: u.label,
                class_count: meta.class_count,
            });
        }
        for m in Modality::ALL {
            let f = u.features(m);
            if f.len() != meta.dims.of(m) {
                return Err(Error::Dimension {
                    line,
                    field: format!("{}.{m}", u.utt_id),
                    expected: meta.dims.of(m),
                    got: f.len(),
                });
            }
            if f.iter().any(|v| !v.is_finite()) {
                return Err(parse_err(line, format!("{}.{m} has a non-finite value", u.utt_id)));
            }
        }
    }
    Ok(())
}

/// Reads an `ariign-corpus-v1` file, preserving dialogue order.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_corpus(BufReader::new(file)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub fn read_corpus(reader: impl BufRead) -> Result<Corpus> {
    let mut meta: Option<CorpusMeta> = None;
    let mut dialogues = Vec::new();
    for (k, line) in reader.lines().enumerate() {
        let lineno = k + 1;
        let line = line.map_err(|e| Error::io("<corpus>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        match &meta {
            None => {
                let h: Header =
                    serde_json::from_str(&line).map_err(|e| parse_err(lineno, format!("bad header: {e}")))?;
                if h.schema != CORPUS_SCHEMA {
                    return Err(parse_err(
                        lineno,
                        format!("unsupported schema {:?}, expected {CORPUS_SCHEMA:?}", h.schema),
                    ));
                }
                let m = CorpusMeta {
                    class_count: h.class_count,
                    class_names: h.class_names,
                    dims: h.dims,
                };
                m.validate(lineno)?;
                meta = Some(m);
            }
            Some(m) => {
                let d: Dialogue =
                    serde_json::from_str(&line).map_err(|e| parse_err(lineno, format!("bad dialogue: {e}")))?;
                validate_dialogue(m, &d, lineno)?;
                dialogues.push(d);
            }
        }
    }
    let meta = meta.ok_or_else(|| parse_err(1, "missing header line"))?;
    Ok(Corpus { meta, dialogues })
}

pub fn write_corpus(mut w: impl Write, corpus: &Corpus) -> Result<()> {
    let header = Header {
        schema: CORPUS_SCHEMA.to_string(),
        class_count: corpus.meta.class_count,
        class_names: corpus.meta.class_names.clone(),
        dims: corpus.meta.dims,
    };
    let io = |e| Error::io("<corpus>", e);
    let encode = |e: serde_json::Error| Error::Data(e.to_string());
    serde_json::to_writer(&mut w, &header).map_err(encode)?;
    w.write_all(b"\n").map_err(io)?;
    for d in &corpus.dialogues {
        serde_json::to_writer(&mut w, d).map_err(encode)?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn save_corpus(path: impl AsRef<Path>, corpus: &Corpus) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_corpus(BufWriter::new(file), corpus).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

/// Per-modality noise scale of the synthetic generator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityNoise {
    pub text: f64,
    pub audio: f64,
    pub visual: f64,
}

impl Default for ModalityNoise {
    fn default() -> Self {
        Self {
            text: 1.0,
            audio: 1.0,
            visual: 1.0,
        }
    }
}

impl ModalityNoise {
    pub fn of(&self, m: Modality) -> f64 {
        match m {
            Modality::Text => self.text,
            Modality::Audio => self.audio,
            Modality::Visual => self.visual,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub class_count: usize,
    pub dialogues: usize,
    pub utterances_per_dialogue: usize,
    pub speakers_per_dialogue: usize,
    pub dims: Dims,
    /// Class centers sit `separation · √2` apart in every modality.
    pub separation: f64,
    /// Standard deviation of the isotropic noise around each center.
    #[serde(default)]
    pub noise: ModalityNoise,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            class_count: 6,
            dialogues: 60,
            utterances_per_dialogue: 20,
            speakers_per_dialogue: 2,
            dims: Dims::default(),
            separation: 8.0,
            noise: ModalityNoise::default(),
            seed: 1,
        }
    }
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        let counts = [
            ("class_count", self.class_count),
            ("dialogues", self.dialogues),
            ("utterances_per_dialogue", self.utterances_per_dialogue),
            ("speakers_per_dialogue", self.speakers_per_dialogue),
            ("dims.text", self.dims.text),
            ("dims.audio", self.dims.audio),
            ("dims.visual", self.dims.visual),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Argument(format!("{name} must be at least 1")));
        }
        if !(self.separation.is_finite() && self.separation >= 0.0) {
            return Err(Error::Argument("separation must be finite and non-negative".into()));
        }
        for m in Modality::ALL {
            let s = self.noise.of(m);
            if !(s.is_finite() && s >= 0.0) {
                return Err(Error::Argument(format!("{m} noise must be finite and non-negative")));
            }
            if self.class_count > self.dims.of(m) {
                return Err(Error::Argument(format!(
                    "{} classes need at least as many {m} dimensions (have {})",
                    self.class_count,
                    self.dims.of(m)
                )));
            }
        }
        Ok(())
    }
}

/// `count` orthonormal rows in `R^dim`, by Gram-Schmidt on Gaussian draws.
fn random_orthonormal_rows(rng: &mut Rng, count: usize, dim: usize) -> Matrix {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(count);
    while rows.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        for r in &rows {
            let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(r).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            rows.push(v);
        }
    }
    Matrix::from_rows(&rows)
}

fn draw_centers(spec: &SyntheticSpec, rng: &mut Rng) -> [Matrix; 3] {
    Modality::ALL.map(|m| {
        let mut c = random_orthonormal_rows(rng, spec.class_count, spec.dims.of(m));
        c.scale_assign(spec.separation);
        c
    })
}

/// Class centers (`C × D_m`, indexed by [`Modality::index`]) used by
/// [`generate_synthetic`] for the same spec.
pub fn synthetic_centers(spec: &SyntheticSpec) -> Result<[Matrix; 3]> {
    spec.validate()?;
    let mut rng = Rng::seed_from_u64(spec.seed);
    Ok(draw_centers(spec, &mut rng))
}

/// Gaussian class clusters with unit-scale isotropic noise.
///
/// Each modality places its centers along its own random orthonormal
/// directions, so the modalities are heterogeneous while every pair of
/// centers stays `separation · √2` apart.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = Rng::seed_from_u64(spec.seed);
    let centers = draw_centers(spec, &mut rng);
    let mut dialogues = Vec::with_capacity(spec.dialogues);
    for d in 0..spec.dialogues {
        let dialogue_id = format!("d{d:04}");
        let mut utterances = Vec::with_capacity(spec.utterances_per_dialogue);
        for u in 0..spec.utterances_per_dialogue {
            let speaker = format!("P{}", rng.random_range(0..spec.speakers_per_dialogue) + 1);
            let label = rng.random_range(0..spec.class_count);
            let mut feats = Modality::ALL.map(|m| {
                let sigma = spec.noise.of(m);
                centers[m.index()]
                    .row(label)
                    .iter()
                    .map(|c| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        c + sigma * z
                    })
                    .collect::<Vec<f64>>()
            });
            utterances.push(Utterance {
                utt_id: format!("{dialogue_id}_u{u:03}"),
                speaker,
                label,
                text_feat: std::mem::take(&mut feats[0]),
                audio_feat: std::mem::take(&mut feats[1]),
                visual_feat: std::mem::take(&mut feats[2]),
            });
        }
        dialogues.push(Dialogue {
            dialogue_id,
            utterances,
        });
    }
    Ok(Corpus {
        meta: CorpusMeta::new(spec.class_count, spec.dims),
        dialogues,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Vec<Dialogue>,
    pub val: Vec<Dialogue>,
    pub test: Vec<Dialogue>,
}

/// Part sizes for `n` dialogues: floors first, then one leftover each to
/// the rounded-down parts in train, val, test order; with `n >= 3` an empty part takes one
/// dialogue from the largest.
pub fn split_sizes(n: usize, ratios: SplitRatios) -> Result<[usize; 3]> {
    let r = [ratios.train, ratios.val, ratios.test];
    if r.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
        return Err(Error::Split("ratios must be positive".into()));
    }
    if (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Split("ratios must sum to 1".into()));
    }
    if n < 3 {
        return Err(Error::Split(format!("need at least 3 dialogues to split, have {n}")));
    }
    let exact = r.map(|x| x * n as f64);
    let mut sizes = exact.map(|x| (x + 1e-9).floor() as usize);
    // Only parts that were rounded down take a leftover, so no part ends
    // up a whole dialogue away from its exact share.
    for k in 0..3 {
        if sizes.iter().sum::<usize>() < n && exact[k] - sizes[k] as f64 > 1e-9 {
            sizes[k] += 1;
        }
    }
    for part in 0..3 {
        if sizes[part] == 0 {
            let largest = (0..3).max_by_key(|&i| (sizes[i], std::cmp::Reverse(i))).unwrap_or(0);
            sizes[largest] -= 1;
            sizes[part] += 1;
        }
    }
    Ok(sizes)
}

/// Shuffles whole dialogues with `seed` and cuts them by [`split_sizes`].
pub fn split(corpus: &Corpus, ratios: SplitRatios, seed: u64) -> Result<Splits> {
    let n = corpus.dialogues.len();
    let [a, b, _] = split_sizes(n, ratios)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut Rng::seed_from_u64(seed));
    let take = |idx: &[usize]| -> Vec<Dialogue> { idx.iter().map(|&i| corpus.dialogues[i].clone()).collect() };
    Ok(Splits {
        train: take(&order[..a]),
        val: take(&order[a..a + b]),
        test: take(&order[a + b..]),
    })
}
