//! Clinical-interview dialogues, the transcript/corpus on-disk formats and a
//! deterministic synthetic corpus generator.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labeling::heuristic_label;
use crate::phq_items::{
    build_summary, severity_from_total, total_score, Assessment, Cause, Degree, ItemScores,
    PhqItem, SeverityLevel, StructuredSummary, SEVERITY_BANDS,
};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Parse { path: PathBuf, line: usize, reason: String },
    #[error("{path}:{line}: {reason}")]
    Validation { path: PathBuf, line: usize, reason: String },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid sample {id}: {reason}")]
    InvalidSample { id: String, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io { path: path.to_path_buf(), source }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Speaker {
    Interviewer,
    Participant,
}

impl Speaker {
    /// "Ellie" is the interviewer; anything spelled "participant" is the participant.
    pub fn from_label(label: &str) -> Option<Self> {
        let label = label.trim();
        if label.eq_ignore_ascii_case("ellie") {
            Some(Speaker::Interviewer)
        } else if label.eq_ignore_ascii_case("participant") {
            Some(Speaker::Participant)
        } else {
            None
        }
    }

    pub fn transcript_label(self) -> &'static str {
        match self {
            Speaker::Interviewer => "Ellie",
            Speaker::Participant => "Participant",
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Speaker::Interviewer => "Interviewer",
            Speaker::Participant => "Participant",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub index: usize,
    pub speaker: Speaker,
    pub text: String,
    pub start_time: f64,
    pub stop_time: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    Acoustic,
    Visual,
}

impl Modality {
    fn file_name(self) -> &'static str {
        match self {
            Modality::Acoustic => "acoustic.csv",
            Modality::Visual => "visual.csv",
        }
    }
}

/// A frame-by-feature matrix for one non-text modality.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub frames: Array2<f64>,
    pub modality: Modality,
    pub frame_rate: f64,
}

impl FeatureSequence {
    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }

    fn validate(&self) -> Result<(), String> {
        if self.frames.nrows() == 0 {
            return Err(format!("{:?} sequence has no frames", self.modality));
        }
        if self.frames.iter().any(|v| !v.is_finite()) {
            return Err(format!("{:?} sequence has non-finite entries", self.modality));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub severity: SeverityLevel,
    #[serde(default)]
    pub item_scores: Option<ItemScores>,
    pub summary: StructuredSummary,
    #[serde(default)]
    pub utterance_items: Option<Vec<PhqItem>>,
    /// Further reference summaries from other annotators, if any.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub additional_references: Vec<String>,
}

impl GroundTruth {
    /// All reference summary texts, primary annotation first.
    pub fn references(&self) -> Vec<&str> {
        std::iter::once(self.summary.rendered_text.as_str())
            .chain(self.additional_references.iter().map(String::as_str))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub dialogue: Vec<Utterance>,
    pub acoustic: Option<FeatureSequence>,
    pub visual: Option<FeatureSequence>,
    pub truth: GroundTruth,
}

impl Sample {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let fail = |reason: String| CorpusError::InvalidSample { id: self.id.clone(), reason };
        for (i, u) in self.dialogue.iter().enumerate() {
            if u.index != i {
                return Err(fail(format!("utterance index {} at position {i}", u.index)));
            }
            if u.text.trim().is_empty() {
                return Err(fail(format!("utterance {i} is empty")));
            }
            if u.stop_time.partial_cmp(&u.start_time).is_none_or(|o| o.is_lt()) {
                return Err(fail(format!("utterance {i} stops before it starts")));
            }
        }
        if !self.dialogue.iter().any(|u| u.speaker == Speaker::Participant) {
            return Err(fail("no participant utterance".into()));
        }
        for seq in [&self.acoustic, &self.visual].into_iter().flatten() {
            seq.validate().map_err(fail)?;
        }
        if let Some(scores) = &self.truth.item_scores {
            total_score(scores).map_err(|e| fail(e.to_string()))?;
        }
        if let Some(items) = &self.truth.utterance_items {
            if items.len() != self.dialogue.len() {
                return Err(fail("utterance_items length differs from dialogue".into()));
            }
        }
        Ok(())
    }

    pub fn participant_count(&self) -> usize {
        self.dialogue.iter().filter(|u| u.speaker == Speaker::Participant).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = CorpusError;
    fn from_str(s: &str) -> Result<Self, CorpusError> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(CorpusError::InvalidArgument(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub train: Vec<Sample>,
    pub dev: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    pub fn split_mut(&mut self, split: Split) -> &mut Vec<Sample> {
        match split {
            Split::Train => &mut self.train,
            Split::Dev => &mut self.dev,
            Split::Test => &mut self.test,
        }
    }

    pub fn samples(&self) -> impl Iterator<Item = &Sample> {
        self.train.iter().chain(&self.dev).chain(&self.test)
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let mut seen = HashSet::new();
        for sample in self.samples() {
            sample.validate()?;
            if !seen.insert(sample.id.as_str()) {
                return Err(CorpusError::InvalidSample {
                    id: sample.id.clone(),
                    reason: "duplicate id".into(),
                });
            }
        }
        Ok(())
    }
}

/// Split sizes of the source interview corpus.
pub const SOURCE_SPLIT: (usize, usize, usize) = (107, 35, 47);

pub fn split_counts(corpus: &Corpus) -> (usize, usize, usize) {
    (corpus.train.len(), corpus.dev.len(), corpus.test.len())
}

/// Apportions `count` samples in the 107:35:47 ratio by largest remainder; ties favour
/// train, then test, then dev.
pub fn apportion(count: usize) -> (usize, usize, usize) {
    let (a, b, c) = SOURCE_SPLIT;
    let whole = a + b + c;
    let weights = [a, c, b]; // train, test, dev
    let mut sizes = [0usize; 3];
    let mut remainders = [(0usize, 0usize); 3];
    for (k, &w) in weights.iter().enumerate() {
        sizes[k] = count * w / whole;
        remainders[k] = (count * w % whole, k);
    }
    let mut left = count - sizes.iter().sum::<usize>();
    remainders.sort_by(|x, y| y.0.cmp(&x.0).then(x.1.cmp(&y.1)));
    for &(_, k) in remainders.iter() {
        if left == 0 {
            break;
        }
        sizes[k] += 1;
        left -= 1;
    }
    (sizes[0], sizes[2], sizes[1])
}

const TRANSCRIPT_COLUMNS: [&str; 4] = ["start_time", "stop_time", "speaker", "value"];

/// Reads a tab-separated transcript with a `start_time stop_time speaker value` header.
pub fn load_transcript(path: &Path) -> Result<Vec<Utterance>, CorpusError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_transcript(&text, path)
}

pub fn parse_transcript(text: &str, path: &Path) -> Result<Vec<Utterance>, CorpusError> {
    let parse_err = |line: usize, reason: String| CorpusError::Parse { path: path.into(), line, reason };
    let mut lines = text.lines().enumerate();
    let Some((_, header)) = lines.next() else {
        return Err(parse_err(1, "missing header row".into()));
    };
    let names: Vec<&str> = header.split('\t').map(str::trim).collect();
    let mut cols = [0usize; 4];
    for (slot, want) in cols.iter_mut().zip(TRANSCRIPT_COLUMNS) {
        *slot = names
            .iter()
            .position(|n| *n == want)
            .ok_or_else(|| parse_err(1, format!("header lacks column `{want}`")))?;
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != names.len() {
            return Err(parse_err(
                line_no,
                format!("expected {} fields, found {}", names.len(), fields.len()),
            ));
        }
        let num = |c: usize, what: &str| {
            fields[c]
                .trim()
                .parse::<f64>()
                .map_err(|_| parse_err(line_no, format!("{what} `{}` is not a number", fields[c])))
        };
        let start_time = num(cols[0], "start_time")?;
        let stop_time = num(cols[1], "stop_time")?;
        let value = fields[cols[3]].trim();
        if value.is_empty() {
            continue;
        }
        let speaker = Speaker::from_label(fields[cols[2]]).ok_or_else(|| CorpusError::Validation {
            path: path.into(),
            line: line_no,
            reason: format!("unknown speaker `{}`", fields[cols[2]]),
        })?;
        if stop_time.partial_cmp(&start_time).is_none_or(|o| o.is_lt()) {
            return Err(CorpusError::Validation {
                path: path.into(),
                line: line_no,
                reason: format!("stop_time {stop_time} precedes start_time {start_time}"),
            });
        }
        out.push(Utterance { index: out.len(), speaker, text: value.to_string(), start_time, stop_time });
    }
    Ok(out)
}

pub fn render_transcript(dialogue: &[Utterance]) -> String {
    let mut s = TRANSCRIPT_COLUMNS.join("\t");
    s.push('\n');
    for u in dialogue {
        let text = u.text.replace(['\t', '\n', '\r'], " ");
        let _ = writeln!(s, "{}\t{}\t{}\t{}", u.start_time, u.stop_time, u.speaker.transcript_label(), text);
    }
    s
}

fn render_features(seq: &FeatureSequence) -> String {
    let mut s = (0..seq.dim()).map(|j| format!("f{j}")).collect::<Vec<_>>().join(",");
    s.push('\n');
    for row in seq.frames.rows() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

fn parse_features(text: &str, path: &Path, modality: Modality, frame_rate: f64) -> Result<FeatureSequence, CorpusError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| CorpusError::Parse {
        path: path.into(),
        line: 1,
        reason: "missing header row".into(),
    })?;
    let dim = header.split(',').count();
    let mut data = Vec::new();
    let mut rows = 0;
    for (i, line) in lines {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != dim {
            return Err(CorpusError::Parse {
                path: path.into(),
                line: i + 1,
                reason: format!("expected {dim} values, found {}", cells.len()),
            });
        }
        for c in cells {
            data.push(c.trim().parse::<f64>().map_err(|_| CorpusError::Parse {
                path: path.into(),
                line: i + 1,
                reason: format!("`{c}` is not a number"),
            })?);
        }
        rows += 1;
    }
    let frames = Array2::from_shape_vec((rows, dim), data).expect("shape checked per row");
    Ok(FeatureSequence { frames, modality, frame_rate })
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    acoustic_frame_rate: f64,
    visual_frame_rate: f64,
    splits: BTreeMap<Split, Vec<String>>,
}

pub const MANIFEST_FILE: &str = "corpus.json";

/// Writes `DIR/corpus.json` plus one directory per sample under `DIR/<split>/<id>/`.
pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<(), CorpusError> {
    corpus.validate()?;
    let rate = |m: Modality| {
        corpus
            .samples()
            .find_map(|s| match m {
                Modality::Acoustic => s.acoustic.as_ref(),
                Modality::Visual => s.visual.as_ref(),
            })
            .map(|f| f.frame_rate)
            .unwrap_or(0.0)
    };
    let manifest = Manifest {
        acoustic_frame_rate: rate(Modality::Acoustic),
        visual_frame_rate: rate(Modality::Visual),
        splits: Split::ALL
            .iter()
            .map(|&s| (s, corpus.split(s).iter().map(|x| x.id.clone()).collect()))
            .collect(),
    };
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&manifest_path, json).map_err(io_err(&manifest_path))?;
    for split in Split::ALL {
        for sample in corpus.split(split) {
            let sdir = dir.join(split.name()).join(&sample.id);
            fs::create_dir_all(&sdir).map_err(io_err(&sdir))?;
            let p = sdir.join("transcript.tsv");
            fs::write(&p, render_transcript(&sample.dialogue)).map_err(io_err(&p))?;
            for seq in [&sample.acoustic, &sample.visual].into_iter().flatten() {
                let p = sdir.join(seq.modality.file_name());
                fs::write(&p, render_features(seq)).map_err(io_err(&p))?;
            }
            let p = sdir.join("truth.json");
            let json = serde_json::to_string_pretty(&sample.truth).expect("truth serializes");
            fs::write(&p, json).map_err(io_err(&p))?;
        }
    }
    Ok(())
}

pub fn load_sample(dir: &Path, id: &str, acoustic_rate: f64, visual_rate: f64) -> Result<Sample, CorpusError> {
    let dialogue = load_transcript(&dir.join("transcript.tsv"))?;
    let read_seq = |m: Modality, rate: f64| -> Result<Option<FeatureSequence>, CorpusError> {
        let p = dir.join(m.file_name());
        if !p.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&p).map_err(io_err(&p))?;
        parse_features(&text, &p, m, rate).map(Some)
    };
    let acoustic = read_seq(Modality::Acoustic, acoustic_rate)?;
    let visual = read_seq(Modality::Visual, visual_rate)?;
    let p = dir.join("truth.json");
    let text = fs::read_to_string(&p).map_err(io_err(&p))?;
    let truth = serde_json::from_str(&text).map_err(|source| CorpusError::Json { path: p.clone(), source })?;
    let sample = Sample { id: id.to_string(), dialogue, acoustic, visual, truth };
    sample.validate()?;
    Ok(sample)
}

pub fn load_corpus(dir: &Path) -> Result<Corpus, CorpusError> {
    let p = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&p).map_err(io_err(&p))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|source| CorpusError::Json { path: p, source })?;
    let mut corpus = Corpus::default();
    for (split, ids) in &manifest.splits {
        for id in ids {
            let sdir = dir.join(split.name()).join(id);
            let sample = load_sample(&sdir, id, manifest.acoustic_frame_rate, manifest.visual_frame_rate)?;
            corpus.split_mut(*split).push(sample);
        }
    }
    corpus.validate()?;
    Ok(corpus)
}

/// Feature widths and rates of the synthetic corpus.
pub const SYNTHETIC_ACOUSTIC_DIM: usize = 16;
pub const SYNTHETIC_VISUAL_DIM: usize = 12;
pub const SYNTHETIC_ACOUSTIC_RATE: f64 = 10.0;
pub const SYNTHETIC_VISUAL_RATE: f64 = 5.0;
const SIGNAL_DIMS: usize = 4;
const SIGNAL_PER_SEVERITY: f64 = 0.5;

// Relative prevalence used when spreading a total over items; sleep and energy dominate.
const ITEM_WEIGHTS: [f64; 8] = [0.10, 0.12, 0.18, 0.17, 0.12, 0.13, 0.10, 0.08];

fn symptom_templates(item: PhqItem) -> [&'static str; 3] {
    match item {
        PhqItem::LackOfInterest => [
            "i have less interest in things i used to do",
            "i do not really enjoy my hobbies anymore",
            "nothing gives me any pleasure at all lately",
        ],
        PhqItem::FeelingDown => [
            "sometimes i feel a bit sad",
            "i have been feeling down most days",
            "i feel hopeless about everything",
        ],
        PhqItem::SleepingDisorder => [
            "sometimes i have trouble falling asleep",
            "i wake up at night and cannot sleep",
            "i barely sleep at all these days",
        ],
        PhqItem::LackOfEnergy => [
            "i get tired more easily than before",
            "i have very little energy during the day",
            "i feel exhausted all the time",
        ],
        PhqItem::AppetiteChanges => [
            "my appetite has changed a little",
            "i have been overeating lately",
            "i have no appetite and skip meals",
        ],
        PhqItem::LowSelfEsteem => [
            "sometimes i feel like a failure",
            "i often blame myself for things",
            "i feel worthless most of the time",
        ],
        PhqItem::ConcentrationProblem => [
            "i get distracted when i read",
            "it is hard to focus on my work",
            "i cannot concentrate on anything",
        ],
        PhqItem::PsychomotorChanges => [
            "i feel a little restless at times",
            "people say i seem slowed down",
            "i keep pacing around and cannot sit still",
        ],
        PhqItem::None => ["", "", ""],
    }
}

fn symptom_question(item: PhqItem) -> &'static str {
    match item {
        PhqItem::LackOfInterest => "what do you do for fun these days",
        PhqItem::FeelingDown => "how have you been feeling lately",
        PhqItem::SleepingDisorder => "how easy is it for you to get a good night's sleep",
        PhqItem::LackOfEnergy => "how are your energy levels",
        PhqItem::AppetiteChanges => "have you noticed any changes in your eating",
        PhqItem::LowSelfEsteem => "how do you feel about yourself",
        PhqItem::ConcentrationProblem => "how is your concentration",
        PhqItem::PsychomotorChanges => "have others noticed anything different about you",
        PhqItem::None => "",
    }
}

/// (cause phrase used in the summary, participant utterance that reveals it)
const CAUSES: &[(&str, &str)] = &[
    ("their current financial problems", "money has been really tight and the bills keep piling up"),
    ("the loss of their job", "i lost my job a few months ago"),
    ("work stress", "my boss puts a lot of pressure on me at work"),
    ("the breakup of a significant relationship", "my girlfriend and i broke up last year"),
    ("ongoing struggles with PTSD", "i still deal with ptsd from my time in the service"),
    ("lack of family support", "my family does not really support me"),
    ("relocation to a new city", "we had to move to a new city recently"),
    ("chronic pain from an old injury", "my back pain from an old injury never goes away"),
    ("loneliness", "i spend most of my time alone"),
    ("self-criticism", "i am very hard on myself"),
    ("the various challenges they will face after graduation", "i am worried about what comes after graduation"),
    ("legal troubles", "i have been dealing with a court case"),
    ("the death of a close friend", "a close friend of mine passed away"),
    ("caregiving responsibilities for a parent", "i take care of my mother every day"),
];

const SMALL_TALK: &[(&str, &str)] = &[
    ("where are you from originally", "i grew up in a small town up north"),
    ("what are you like when you are with friends", "i am pretty quiet but i like to listen"),
    ("what is your dream job", "i always wanted to be a carpenter"),
    ("how do you like living here", "it is alright the weather is nice"),
    ("tell me about your family", "my sister lives nearby with her kids"),
    ("what did you study in school", "i took some classes in accounting"),
    ("what is something you are proud of", "i helped my brother fix up his house"),
    ("do you travel a lot", "i used to travel a lot for my old job"),
];

struct DialogueBuilder {
    utterances: Vec<Utterance>,
    items: Vec<PhqItem>,
    clock: f64,
}

impl DialogueBuilder {
    fn push(&mut self, speaker: Speaker, text: &str, item: PhqItem) {
        let words = text.split_whitespace().count() as f64;
        let start = (self.clock * 100.0).round() / 100.0;
        let stop = ((self.clock + 0.5 + 0.35 * words) * 100.0).round() / 100.0;
        self.utterances.push(Utterance {
            index: self.utterances.len(),
            speaker,
            text: text.to_string(),
            start_time: start,
            stop_time: stop,
        });
        self.items.push(item);
        self.clock = stop + 0.4;
    }
}

fn draw_item_scores(rng: &mut ChaCha8Rng, severity: SeverityLevel) -> ItemScores {
    let (lo, hi) = SEVERITY_BANDS[severity.value() as usize];
    let total = rng.random_range(lo..=hi);
    let mut scores = [0u8; 8];
    for _ in 0..total {
        let open: Vec<usize> = (0..8).filter(|&k| scores[k] < 3).collect();
        let weight_sum: f64 = open.iter().map(|&k| ITEM_WEIGHTS[k]).sum();
        let mut pick = rng.random::<f64>() * weight_sum;
        let mut chosen = *open.last().unwrap();
        for &k in &open {
            pick -= ITEM_WEIGHTS[k];
            if pick < 0.0 {
                chosen = k;
                break;
            }
        }
        scores[chosen] += 1;
    }
    PhqItem::SYMPTOMS.iter().zip(scores).map(|(&i, s)| (i, s)).collect()
}

fn degree_for(rng: &mut ChaCha8Rng, score: u8) -> Degree {
    match score {
        1 => *[Degree::Occasional, Degree::Mild].choose(rng).unwrap(),
        2 => *[Degree::Moderate, Degree::Significant].choose(rng).unwrap(),
        _ => Degree::Severe,
    }
}

fn draw_features(rng: &mut ChaCha8Rng, modality: Modality, dim: usize, rate: f64, severity: SeverityLevel) -> FeatureSequence {
    let len = rng.random_range(20..=60);
    let offset = SIGNAL_PER_SEVERITY * severity.value() as f64;
    let frames = Array2::from_shape_fn((len, dim), |(_, j)| {
        let noise: f64 = StandardNormal.sample(rng);
        if j < SIGNAL_DIMS { noise + offset } else { noise }
    });
    FeatureSequence { frames, modality, frame_rate: rate }
}

fn synthetic_sample(rng: &mut ChaCha8Rng, id: String, severity: SeverityLevel) -> Sample {
    let item_scores = draw_item_scores(rng, severity);
    debug_assert_eq!(
        severity_from_total(total_score(&item_scores).unwrap() as u32).unwrap(),
        severity
    );
    let has_history = rng.random::<f64>() < [0.0, 0.2, 0.4, 0.6][severity.value() as usize];
    let cause_count = match severity.value() {
        0 => 0,
        s => rng.random_range(1..=(s as usize + 1).min(3)),
    };
    let causes: Vec<&(&str, &str)> = CAUSES.choose_multiple(rng, cause_count).collect();

    let mut b = DialogueBuilder { utterances: Vec::new(), items: Vec::new(), clock: 0.0 };
    b.push(Speaker::Interviewer, "hi i'm ellie thanks for coming in today", PhqItem::None);
    b.push(Speaker::Participant, "hello nice to meet you", PhqItem::None);
    let n_talk = rng.random_range(1..=3);
    let mut talk: Vec<&(&str, &str)> = SMALL_TALK.choose_multiple(rng, n_talk).collect();
    talk.shuffle(rng);
    for (q, a) in &talk {
        b.push(Speaker::Interviewer, q, PhqItem::None);
        b.push(Speaker::Participant, a, PhqItem::None);
    }
    b.push(Speaker::Interviewer, "have you been diagnosed with depression", PhqItem::None);
    let answer = if has_history { "yes i was diagnosed a few years ago" } else { "no never" };
    b.push(Speaker::Participant, answer, PhqItem::None);

    let mut symptoms: Vec<(PhqItem, u8)> = item_scores.iter().filter(|(_, &s)| s > 0).map(|(&i, &s)| (i, s)).collect();
    symptoms.shuffle(rng);
    for (item, score) in symptoms {
        b.push(Speaker::Interviewer, symptom_question(item), PhqItem::None);
        b.push(Speaker::Participant, symptom_templates(item)[score as usize - 1], item);
    }
    if !causes.is_empty() {
        b.push(Speaker::Interviewer, "what has been going on in your life recently", PhqItem::None);
        for (_, line) in &causes {
            b.push(Speaker::Participant, line, PhqItem::None);
        }
    }
    b.push(Speaker::Interviewer, "thanks for sharing your thoughts with me", PhqItem::None);
    b.push(Speaker::Participant, "thank you bye", PhqItem::None);

    let assessments: Vec<Assessment> = PhqItem::SYMPTOMS
        .iter()
        .filter_map(|&item| {
            let s = item_scores[&item];
            (s > 0).then(|| Assessment { item, degree: degree_for(rng, s) })
        })
        .collect();
    let causes: Vec<Cause> = causes.iter().map(|(phrase, _)| Cause::new(*phrase)).collect();
    let summary = build_summary(has_history, assessments, causes, severity).expect("generator emits valid summaries");

    let acoustic = draw_features(rng, Modality::Acoustic, SYNTHETIC_ACOUSTIC_DIM, SYNTHETIC_ACOUSTIC_RATE, severity);
    let visual = draw_features(rng, Modality::Visual, SYNTHETIC_VISUAL_DIM, SYNTHETIC_VISUAL_RATE, severity);
    Sample {
        id,
        dialogue: b.utterances,
        acoustic: Some(acoustic),
        visual: Some(visual),
        truth: GroundTruth {
            severity,
            item_scores: Some(item_scores),
            summary,
            utterance_items: Some(b.items),
            additional_references: Vec::new(),
        },
    }
}

/// Deterministic synthetic corpus: equal `(count, seed)` gives equal corpora.
pub fn generate_synthetic(count: usize, seed: u64) -> Result<Corpus, CorpusError> {
    if count < 4 {
        return Err(CorpusError::InvalidArgument(format!(
            "count must be at least 4 so every severity appears, got {count}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut severities: Vec<u8> = (0..count)
        .map(|i| if i < 4 { i as u8 } else { rng.random_range(0..4) })
        .collect();
    severities.shuffle(&mut rng);
    let samples: Vec<Sample> = severities
        .iter()
        .enumerate()
        .map(|(i, &s)| synthetic_sample(&mut rng, format!("synth{seed}_{i:04}"), SeverityLevel::new(s).unwrap()))
        .collect();
    let (n_train, n_dev, _) = apportion(count);
    let mut it = samples.into_iter();
    let train = it.by_ref().take(n_train).collect();
    let dev = it.by_ref().take(n_dev).collect();
    let test = it.collect();
    Ok(Corpus { train, dev, test })
}

/// Fraction of generator-injected symptom utterances that the lexicon labeler recovers.
pub fn heuristic_recovery_rate(corpus: &Corpus) -> f64 {
    let (mut hit, mut total) = (0usize, 0usize);
    for s in corpus.samples() {
        let Some(items) = &s.truth.utterance_items else { continue };
        for (u, &item) in s.dialogue.iter().zip(items) {
            if item != PhqItem::None {
                total += 1;
                hit += usize::from(heuristic_label(u) == item);
            }
        }
    }
    if total == 0 { 1.0 } else { hit as f64 / total as f64 }
}
