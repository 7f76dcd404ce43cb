//! Run configuration, the joint training loop, checkpointing, evaluation, ablations and
//! report rendering.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{generate_synthetic, load_corpus, Corpus, CorpusError, Modality, Sample, Speaker, Split, Utterance};
use crate::fusion::{check_finite, extract_features, ClipPolicy, FeatureSet, FusionConfig, FusionError, FusionModel, LossWeights, Streams};
use crate::labeling::heuristic_label;
use crate::metrics::{classification_scores, percent, ClassificationMode, ClassificationScores, GenerationScores, HashedEmbedder, MetricError, CONTROL, DEPRESSED};
use crate::nn::{AdamW, AdamWConfig, Mat, ParamId, ParamRecord, ParamStore, Tape};
use crate::phq_items::{PhqItem, SeverityLevel};
use crate::summarizer::{serialize_input, utterance_line, BackendConfig, Summarizer, SummarizerError, Vocab, EOS};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Summarizer(#[from] SummarizerError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("config file: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("non-finite {component} at step {step}; parameters from step {} are retained", .checkpoint.step)]
    NonFinite { step: usize, component: &'static str, checkpoint: Box<Checkpoint> },
}

type Result<T> = std::result::Result<T, HarnessError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub count: usize,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    Audio,
    Vision,
    #[serde(rename = "ic")]
    Ic,
    /// Never valid; parsed so that the request can be rejected with a clear message.
    Text,
}

impl Ablation {
    pub fn tag(self) -> &'static str {
        match self {
            Ablation::Audio => "-w/o Audio",
            Ablation::Vision => "-w/o Vision",
            Ablation::Ic => "-w/o IC",
            Ablation::Text => "-w/o Text",
        }
    }
}

impl FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "audio" => Ok(Ablation::Audio),
            "vision" => Ok(Ablation::Vision),
            "ic" => Ok(Ablation::Ic),
            "text" => Ok(Ablation::Text),
            other => Err(format!("unknown ablation {other:?}; expected audio, vision or ic")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Corpus directory; takes precedence over `synthetic`.
    pub corpus: Option<PathBuf>,
    pub synthetic: Option<SyntheticSpec>,
    pub epochs: usize,
    /// Stops training after this many optimiser steps even mid-epoch.
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    /// Evaluate every this many epochs; 0 evaluates only after training.
    pub eval_every: usize,
    pub eval_splits: Vec<Split>,
    /// Clip sequence lengths to bounds measured on the training split.
    pub clip: bool,
    pub drop: Vec<Ablation>,
    pub loss: LossWeights,
    pub backend: BackendConfig,
    pub fusion: FusionConfig,
    pub optimizer: AdamWConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            corpus: None,
            synthetic: Some(SyntheticSpec { count: 76, seed: 1 }),
            epochs: 10,
            max_steps: None,
            batch_size: 1,
            eval_every: 0,
            eval_splits: vec![Split::Dev, Split::Test],
            clip: true,
            drop: Vec::new(),
            loss: LossWeights::default(),
            backend: BackendConfig::default(),
            fusion: FusionConfig::default(),
            optimizer: AdamWConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    /// Reads and validates a config file; a relative corpus path is resolved against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut config: Self = toml::from_str(&std::fs::read_to_string(path)?)?;
        if let (Some(c), Some(dir)) = (&config.corpus, path.parent()) {
            if c.is_relative() {
                config.corpus = Some(dir.join(c));
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.corpus, &self.synthetic) {
            (Some(p), _) if !p.is_dir() => return Err(HarnessError::Config(format!("corpus directory {} does not exist", p.display()))),
            (None, None) => return Err(HarnessError::Config("set either corpus or synthetic".into())),
            _ => {}
        }
        if self.batch_size == 0 {
            return Err(HarnessError::Config("batch_size must be positive".into()));
        }
        if self.epochs == 0 && self.max_steps.is_none() {
            return Err(HarnessError::Config("epochs must be positive".into()));
        }
        if self.drop.contains(&Ablation::Text) {
            return Err(HarnessError::Config("the text stream cannot be dropped".into()));
        }
        self.loss.validate()?;
        self.fusion.validate()?;
        Ok(())
    }

    pub fn load_corpus(&self) -> Result<Corpus> {
        let corpus = match (&self.corpus, self.synthetic) {
            (Some(p), _) => load_corpus(p)?,
            (None, Some(s)) => generate_synthetic(s.count, s.seed)?,
            (None, None) => return Err(HarnessError::Config("set either corpus or synthetic".into())),
        };
        corpus.validate()?;
        Ok(corpus)
    }

    pub fn streams(&self) -> Streams {
        Streams { audio: !self.drop.contains(&Ablation::Audio), vision: !self.drop.contains(&Ablation::Vision) }
    }

    /// Loss weights after ablations: dropping IC zeroes α.
    pub fn effective_loss(&self) -> LossWeights {
        let mut w = self.loss;
        if self.drop.contains(&Ablation::Ic) {
            w.alpha = 0.0;
        }
        w
    }

    pub fn tags(&self) -> Vec<String> {
        let drop: BTreeSet<Ablation> = self.drop.iter().copied().collect();
        if drop.is_empty() {
            vec!["full".to_string()]
        } else {
            drop.into_iter().map(|a| a.tag().to_string()).collect()
        }
    }
}

/// Utterance labels for training: annotated ones when present, otherwise keyword labels.
pub fn utterance_labels(sample: &Sample) -> Vec<PhqItem> {
    match &sample.truth.utterance_items {
        Some(items) if items.len() == sample.dialogue.len() => items.clone(),
        _ => sample.dialogue.iter().map(heuristic_label).collect(),
    }
}

fn summary_ids(vocab: &Vocab, text: &str) -> Vec<usize> {
    let mut ids = vocab.encode_summary(text);
    ids.pop();
    ids
}

fn build_vocab(train: &[Sample]) -> Vocab {
    let probe = Utterance { index: 0, speaker: Speaker::Participant, text: String::new(), start_time: 0.0, stop_time: 0.0 };
    let mut texts: Vec<String> = (0..crate::phq_items::ITEM_CLASSES).map(|c| utterance_line(&probe, PhqItem::from_class_index(c).expect("class index"))).collect();
    texts.push(format!("{}:", Speaker::Interviewer.tag()));
    for s in train {
        let labels = utterance_labels(s);
        texts.extend(s.dialogue.iter().zip(&labels).map(|(u, &l)| utterance_line(u, l)));
        texts.push(s.truth.summary.rendered_text.clone());
    }
    Vocab::build(texts.iter().map(String::as_str))
}

/// Summarizer and fusion model sharing one parameter store.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: RunConfig,
    pub vocab: Vocab,
    pub clip: ClipPolicy,
    pub summarizer: Summarizer,
    pub fusion: FusionModel,
    pub store: ParamStore,
}

impl Model {
    /// Initialises a model whose vocabulary and clip bounds come from `train`.
    pub fn init(config: &RunConfig, train: &[Sample]) -> Result<Self> {
        if train.is_empty() {
            return Err(HarnessError::Config("training split is empty".into()));
        }
        let vocab = build_vocab(train);
        let clip = if config.clip {
            let lens: Vec<usize> = train.iter().map(|s| summary_ids(&vocab, &s.truth.summary.rendered_text).len()).collect();
            ClipPolicy::from_training(train, &lens)
        } else {
            ClipPolicy::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::default();
        let backend = BackendConfig { vocab_size: vocab.len(), ..config.backend.clone() };
        let summarizer = Summarizer::new(backend, &mut store, &mut rng)?;
        let fusion = FusionModel::new(config.fusion.clone(), config.streams(), vocab.len(), &mut store, &mut rng)?;
        Ok(Self { config: config.clone(), vocab, clip, summarizer, fusion, store })
    }

    pub fn fusion_params(&self) -> Vec<ParamId> {
        self.store.ids().filter(|&id| self.store.name(id).starts_with("fus.")).collect()
    }

    fn features(&self, sample: &Sample, text_ids: &[usize]) -> Result<FeatureSet> {
        Ok(extract_features(sample, text_ids, &self.config.fusion, self.fusion.streams, &self.clip, true)?)
    }

    /// Teacher-forced loss terms for one sample; zero-weighted terms are left out of
    /// the graph so their parameters receive no gradient.
    fn sample_losses(&self, t: &mut Tape, sample: &Sample, w: LossWeights) -> Result<(crate::nn::Var, StepTerms)> {
        let labels = utterance_labels(sample);
        let input = serialize_input(&sample.dialogue, &labels, &self.vocab, self.summarizer.config.max_input_tokens)?;
        let states = self.summarizer.encode(t, &input.ids)?;
        let mut parts = Vec::new();
        let mut terms = StepTerms::default();
        if w.alpha > 0.0 {
            let gold: Vec<usize> = labels[input.first_utterance..].iter().map(|l| l.class_index()).collect();
            let l = self.summarizer.ic_loss_var(t, states, &input.spans, &gold)?;
            terms.l_ic = Some(t.scalar(l));
            parts.push(t.scale(l, w.alpha));
        }
        let gold_ids = summary_ids(&self.vocab, &sample.truth.summary.rendered_text);
        if w.beta > 0.0 {
            let mut target = gold_ids.clone();
            target.push(EOS);
            let l = self.summarizer.ss_loss_var(t, states, &target)?;
            terms.l_ss = Some(t.scalar(l));
            parts.push(t.scale(l, w.beta));
        }
        if w.gamma > 0.0 {
            let feats = self.features(sample, &gold_ids)?;
            let l = self.fusion.sp_loss_var(t, &feats, sample.truth.severity)?;
            terms.l_sp = Some(t.scalar(l));
            parts.push(t.scale(l, w.gamma));
        }
        let total = t.sum(&parts);
        terms.total = t.scalar(total);
        Ok((total, terms))
    }

    /// Weighted total loss of one sample, evaluated without gradients.
    pub fn loss(&self, sample: &Sample) -> Result<f64> {
        let mut t = Tape::new(&self.store);
        Ok(self.sample_losses(&mut t, sample, self.config.effective_loss())?.1.total)
    }

    /// Total loss and its gradient for one sample.
    pub fn loss_and_grad(&self, sample: &Sample) -> Result<(f64, Vec<Option<Mat>>)> {
        let mut t = Tape::new(&self.store);
        let (root, terms) = self.sample_losses(&mut t, sample, self.config.effective_loss())?;
        Ok((terms.total, t.backward(root)))
    }

    /// Generated summary text and the ids fed to fusion.
    pub fn summarize(&self, sample: &Sample) -> Result<(String, Vec<usize>)> {
        let labels = utterance_labels(sample);
        let input = serialize_input(&sample.dialogue, &labels, &self.vocab, self.summarizer.config.max_input_tokens)?;
        let mut ids = self.summarizer.generate(&self.store, &input.ids)?;
        if ids.last() == Some(&EOS) {
            ids.pop();
        }
        let text = self.vocab.decode(&ids);
        if ids.is_empty() {
            // an immediate end-of-summary still gives fusion one token to attend over
            ids.push(EOS);
        }
        Ok((text, ids))
    }

    pub fn checkpoint(&self, step: usize) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            step,
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            clip: self.clip,
            summarizer: self.summarizer.clone(),
            fusion: self.fusion.clone(),
            params: self.store.to_records(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        if ck.version != CHECKPOINT_VERSION {
            return Err(HarnessError::Config(format!("checkpoint version {} is not supported", ck.version)));
        }
        let mut store = ParamStore::default();
        for r in &ck.params {
            let m = Mat::from_shape_vec((r.shape[0], r.shape[1]), r.data.clone()).map_err(|e| HarnessError::Config(format!("parameter {}: {e}", r.name)))?;
            store.add(r.name.clone(), m);
        }
        if ck.summarizer.config.vocab_size != ck.vocab.len() || ck.fusion.vocab_size != ck.vocab.len() {
            return Err(HarnessError::Config("checkpoint vocabulary does not match its models".into()));
        }
        Ok(Self { config: ck.config, vocab: ck.vocab, clip: ck.clip, summarizer: ck.summarizer, fusion: ck.fusion, store })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    /// Optimiser steps taken when the checkpoint was written.
    pub step: usize,
    pub config: RunConfig,
    pub vocab: Vocab,
    pub clip: ClipPolicy,
    pub summarizer: Summarizer,
    pub fusion: FusionModel,
    pub params: Vec<ParamRecord>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(f, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        Ok(serde_json::from_reader(f)?)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
struct StepTerms {
    l_ic: Option<f64>,
    l_ss: Option<f64>,
    l_sp: Option<f64>,
    total: f64,
}

/// Batch-mean loss terms of one optimiser step. Terms with zero weight are `None`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub l_ic: Option<f64>,
    pub l_ss: Option<f64>,
    pub l_sp: Option<f64>,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub steps: usize,
    pub l_ic: Option<f64>,
    pub l_ss: Option<f64>,
    pub l_sp: Option<f64>,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub gold: SeverityLevel,
    pub predicted: SeverityLevel,
    pub probs: [f64; 4],
    pub summary: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSection {
    pub split: Split,
    pub samples: usize,
    /// Per-sample best over all references, averaged.
    pub generation: GenerationScores,
    pub binary: ClassificationScores,
    pub per_class: ClassificationScores,
    /// Set when any sample lacked an enabled modality and a zero frame stood in.
    pub missing_modalities: bool,
    pub substituted: Vec<(String, Modality)>,
    pub predictions: Vec<Prediction>,
}

impl EvalSection {
    pub fn dep_f1(&self) -> f64 {
        self.binary.per_class_f1[DEPRESSED]
    }

    pub fn con_f1(&self) -> f64 {
        self.binary.per_class_f1[CONTROL]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub epoch: usize,
    pub sections: Vec<EvalSection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub tags: Vec<String>,
    pub seed: u64,
    pub steps: usize,
    pub epochs: Vec<EpochLoss>,
    pub evaluations: Vec<EvalPoint>,
}

impl RunReport {
    pub fn final_section(&self, split: Split) -> Option<&EvalSection> {
        self.evaluations.last()?.sections.iter().find(|s| s.split == split)
    }
}

pub struct TrainOutcome {
    pub report: RunReport,
    pub model: Model,
    pub steps: Vec<StepLog>,
}

/// Generates summaries, predicts severity from them and scores both.
pub fn evaluate_split(model: &Model, samples: &[Sample], split: Split) -> Result<EvalSection> {
    if samples.is_empty() {
        return Err(HarnessError::Config(format!("{} split is empty", split.name())));
    }
    let backend = HashedEmbedder::default();
    let mut gen = Vec::with_capacity(samples.len());
    let mut predictions = Vec::with_capacity(samples.len());
    let mut substituted = Vec::new();
    for s in samples {
        let (text, ids) = model.summarize(s)?;
        gen.push(GenerationScores::best_of(&s.truth.references(), &text, &backend)?);
        let feats = model.features(s, &ids)?;
        substituted.extend(feats.substituted.iter().map(|&m| (s.id.clone(), m)));
        let dist = model.fusion.predict(&model.store, &feats)?;
        predictions.push(Prediction { id: s.id.clone(), gold: s.truth.severity, predicted: dist.argmax(), probs: dist.probs, summary: text });
    }
    let pred: Vec<SeverityLevel> = predictions.iter().map(|p| p.predicted).collect();
    let gold: Vec<SeverityLevel> = predictions.iter().map(|p| p.gold).collect();
    Ok(EvalSection {
        split,
        samples: samples.len(),
        generation: GenerationScores::mean(&gen),
        binary: classification_scores(&pred, &gold, ClassificationMode::Binary)?,
        per_class: classification_scores(&pred, &gold, ClassificationMode::PerClass)?,
        missing_modalities: !substituted.is_empty(),
        substituted,
        predictions,
    })
}

/// Loads a checkpoint and evaluates it on one split of `corpus`.
pub fn evaluate(checkpoint: Checkpoint, corpus: &Corpus, split: Split) -> Result<EvalSection> {
    let model = Model::from_checkpoint(checkpoint)?;
    evaluate_split(&model, corpus.split(split), split)
}

fn mean_opt(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.collect::<Option<Vec<_>>>()?;
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn add_grads(acc: &mut Vec<Option<Mat>>, g: Vec<Option<Mat>>) {
    if acc.is_empty() {
        *acc = g;
        return;
    }
    for (a, g) in acc.iter_mut().zip(g) {
        match (a.as_mut(), g) {
            (Some(a), Some(g)) => *a += &g,
            (None, Some(g)) => *a = Some(g),
            _ => {}
        }
    }
}

/// Trains on `corpus.train` with a single AdamW over all parameters. Each step is the
/// batch mean of the weighted loss; `log` receives one JSON line per step.
pub fn train_model(mut model: Model, corpus: &Corpus, mut log: Option<&mut dyn Write>) -> Result<TrainOutcome> {
    let config = model.config.clone();
    config.validate()?;
    let w = config.effective_loss();
    let mut opt = AdamW::new(config.optimizer, &model.store);
    let mut order: Vec<usize> = (0..corpus.train.len()).collect();
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut evaluations = Vec::new();
    let max_steps = config.max_steps.unwrap_or(usize::MAX);
    let epoch_limit = if config.max_steps.is_some() && config.epochs == 0 { usize::MAX } else { config.epochs };
    let mut epoch = 0;
    while epoch < epoch_limit && steps.len() < max_steps {
        epoch += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(epoch as u64));
        order.shuffle(&mut rng);
        let first = steps.len();
        for batch in order.chunks(config.batch_size) {
            if steps.len() >= max_steps {
                break;
            }
            let step = steps.len() + 1;
            let mut grads = Vec::new();
            let mut terms = Vec::with_capacity(batch.len());
            for &i in batch {
                let sample = &corpus.train[i];
                let mut t = Tape::new(&model.store);
                let (root, tr) = model.sample_losses(&mut t, sample, w)?;
                for (name, v) in [("l_ic", tr.l_ic), ("l_ss", tr.l_ss), ("l_sp", tr.l_sp), ("total", Some(tr.total))] {
                    if let Some(v) = v {
                        if check_finite(name, v).is_err() {
                            return Err(HarnessError::NonFinite { step, component: name, checkpoint: Box::new(model.checkpoint(step - 1)) });
                        }
                    }
                }
                add_grads(&mut grads, t.backward(root));
                terms.push(tr);
            }
            let k = 1.0 / batch.len() as f64;
            for g in grads.iter_mut().flatten() {
                g.mapv_inplace(|x| x * k);
            }
            opt.step(&mut model.store, &grads);
            let entry = StepLog {
                step,
                epoch,
                l_ic: mean_opt(terms.iter().map(|t| t.l_ic)),
                l_ss: mean_opt(terms.iter().map(|t| t.l_ss)),
                l_sp: mean_opt(terms.iter().map(|t| t.l_sp)),
                total: terms.iter().map(|t| t.total).sum::<f64>() * k,
            };
            if let Some(out) = log.as_deref_mut() {
                serde_json::to_writer(&mut *out, &entry)?;
                out.write_all(b"\n")?;
            }
            steps.push(entry);
        }
        let done = &steps[first..];
        if !done.is_empty() {
            epochs.push(EpochLoss {
                epoch,
                steps: done.len(),
                l_ic: mean_opt(done.iter().map(|s| s.l_ic)),
                l_ss: mean_opt(done.iter().map(|s| s.l_ss)),
                l_sp: mean_opt(done.iter().map(|s| s.l_sp)),
                total: done.iter().map(|s| s.total).sum::<f64>() / done.len() as f64,
            });
        }
        let last = epoch == epoch_limit || steps.len() >= max_steps;
        if !last && config.eval_every > 0 && epoch % config.eval_every == 0 {
            evaluations.push(EvalPoint { epoch, sections: eval_sections(&model, corpus)? });
        }
    }
    evaluations.push(EvalPoint { epoch, sections: eval_sections(&model, corpus)? });
    let report = RunReport { tags: config.tags(), seed: config.seed, steps: steps.len(), epochs, evaluations };
    Ok(TrainOutcome { report, model, steps })
}

fn eval_sections(model: &Model, corpus: &Corpus) -> Result<Vec<EvalSection>> {
    model
        .config
        .eval_splits
        .iter()
        .filter(|&&s| !corpus.split(s).is_empty())
        .map(|&s| evaluate_split(model, corpus.split(s), s))
        .collect()
}

/// Initialises from `config` and trains on `corpus`.
pub fn train_on(config: &RunConfig, corpus: &Corpus, log: Option<&mut dyn Write>) -> Result<TrainOutcome> {
    config.validate()?;
    let model = Model::init(config, &corpus.train)?;
    train_model(model, corpus, log)
}

/// Loads the configured corpus and trains.
pub fn train(config: &RunConfig, log: Option<&mut dyn Write>) -> Result<TrainOutcome> {
    let corpus = config.load_corpus()?;
    train_on(config, &corpus, log)
}

/// Trains with the given streams or IC head removed.
pub fn ablate(config: &RunConfig, corpus: &Corpus, drop: &BTreeSet<Ablation>) -> Result<TrainOutcome> {
    if drop.is_empty() {
        return Err(HarnessError::Config("ablation needs at least one component to drop".into()));
    }
    if drop.contains(&Ablation::Text) {
        return Err(HarnessError::Config("the text stream cannot be dropped".into()));
    }
    let mut c = config.clone();
    c.drop = drop.iter().copied().collect();
    train_on(&c, corpus, None)
}

/// Trailing mean over `window` values ending at each position.
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window);
            values[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"))
}

/// Plain-text tables: loss curve, then generation and classification scores (×100).
pub fn render_report(report: &RunReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "run [{}] seed {} steps {}", report.tags.join(", "), report.seed, report.steps);
    if !report.epochs.is_empty() {
        let _ = writeln!(out, "\n{:>5} {:>6} {:>10} {:>10} {:>10} {:>10}", "epoch", "steps", "L_ic", "L_ss", "L_sp", "total");
        for e in &report.epochs {
            let _ = writeln!(
                out,
                "{:>5} {:>6} {:>10} {:>10} {:>10} {:>10.4}",
                e.epoch,
                e.steps,
                fmt_opt(e.l_ic),
                fmt_opt(e.l_ss),
                fmt_opt(e.l_sp),
                e.total
            );
        }
    }
    for point in &report.evaluations {
        let _ = writeln!(out, "\nevaluation after epoch {}", point.epoch);
        let _ = writeln!(
            out,
            "{:<6} {:>4} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}",
            "split", "n", "R-1", "R-2", "R-L", "BLEU", "Embed", "Dep", "Con", "Macro", "4-class"
        );
        for s in &point.sections {
            let g = s.generation.percent();
            let _ = writeln!(
                out,
                "{:<6} {:>4} {:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>8.2}{}",
                s.split.name(),
                s.samples,
                g.rouge1,
                g.rouge2,
                g.rouge_l,
                g.bleu,
                g.embed_score,
                percent(s.dep_f1()),
                percent(s.con_f1()),
                percent(s.binary.macro_f1),
                percent(s.per_class.macro_f1),
                if s.missing_modalities { "  (missing modalities zero-filled)" } else { "" }
            );
        }
    }
    out
}

/// JSON form of a report with every score scaled to ×100 and rounded to two decimals.
pub fn report_json(report: &RunReport) -> serde_json::Value {
    let mut v = serde_json::to_value(report).expect("report serialises");
    fn scale(v: &mut serde_json::Value, in_scores: bool) {
        match v {
            serde_json::Value::Object(map) => {
                for (k, child) in map.iter_mut() {
                    let scores = in_scores || matches!(k.as_str(), "generation" | "binary" | "per_class");
                    scale(child, scores && k != "predictions");
                }
            }
            serde_json::Value::Array(items) => items.iter_mut().for_each(|c| scale(c, in_scores)),
            serde_json::Value::Number(n) if in_scores => {
                if let Some(x) = n.as_f64() {
                    *v = serde_json::json!(percent(x));
                }
            }
            _ => {}
        }
    }
    scale(&mut v, false);
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> RunConfig {
        RunConfig {
            seed: 3,
            synthetic: Some(SyntheticSpec { count: 8, seed: 2 }),
            epochs: 1,
            max_steps: Some(3),
            eval_splits: vec![],
            backend: BackendConfig { hidden: 8, layers: 1, heads: 2, ffn: 16, max_input_tokens: 400, max_output_tokens: 8, ..Default::default() },
            fusion: FusionConfig { text_dim: 8, model_dim: 8, heads: 2, ffn: 16, mlp_hidden: 8, ..Default::default() },
            ..Default::default()
        }
    }

    #[test]
    fn config_parses_from_toml_and_rejects_unknown_keys() {
        let c = RunConfig::from_toml("seed = 5\nepochs = 2\ndrop = [\"audio\", \"ic\"]\n[synthetic]\ncount = 12\nseed = 4\n[loss]\nalpha = 0.5\n[backend]\ndecode = { beam = 3 }\n").unwrap();
        assert_eq!(c.seed, 5);
        assert_eq!(c.loss.alpha, 0.5);
        assert_eq!(c.effective_loss().alpha, 0.0);
        assert_eq!(c.streams(), Streams { audio: false, vision: true });
        assert_eq!(c.backend.decode, crate::summarizer::Decode::Beam(3));
        assert!(RunConfig::from_toml("sed = 5\n").is_err());
        assert!(RunConfig::from_toml("corpus = \"/definitely/not/here\"\n").is_err());
        assert!(RunConfig::from_toml("drop = [\"text\"]\n").is_err());
    }

    #[test]
    fn training_is_deterministic_and_writes_step_lines() {
        let c = tiny_config();
        let mut buf = Vec::new();
        let a = train(&c, Some(&mut buf)).unwrap();
        let b = train(&c, None).unwrap();
        assert_eq!(a.steps, b.steps);
        let lines: Vec<&str> = std::str::from_utf8(&buf).unwrap().lines().collect();
        assert_eq!(lines.len(), 3);
        let first: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
        for key in ["step", "l_ic", "l_ss", "l_sp", "total"] {
            assert!(first.get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn zero_gamma_leaves_fusion_untouched() {
        let mut c = tiny_config();
        c.loss.gamma = 0.0;
        let corpus = c.load_corpus().unwrap();
        let init = Model::init(&c, &corpus.train).unwrap();
        let out = train_model(init.clone(), &corpus, None).unwrap();
        for id in init.fusion_params() {
            assert_eq!(init.store.value(id), out.model.store.value(id), "{}", init.store.name(id));
        }
        assert!(out.steps.iter().all(|s| s.l_sp.is_none()));
    }

    #[test]
    fn non_finite_loss_names_the_component() {
        let c = tiny_config();
        let corpus = c.load_corpus().unwrap();
        let mut model = Model::init(&c, &corpus.train).unwrap();
        let id = model.store.find("fus.mlp.out.b").unwrap();
        model.store.value_mut(id).fill(f64::NAN);
        match train_model(model, &corpus, None) {
            Err(HarnessError::NonFinite { step, component, checkpoint }) => {
                assert_eq!((step, component, checkpoint.step), (1, "l_sp", 0));
            }
            other => panic!("expected a non-finite error, got {:?}", other.err()),
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_losses() {
        let c = tiny_config();
        let corpus = c.load_corpus().unwrap();
        let out = train_on(&c, &corpus, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        out.model.checkpoint(3).save(&path).unwrap();
        let back = Model::from_checkpoint(Checkpoint::load(&path).unwrap()).unwrap();
        let s = &corpus.train[0];
        assert_eq!(out.model.loss(s).unwrap(), back.loss(s).unwrap());
    }

    #[test]
    fn untrained_model_predicts_a_constant_level() {
        let c = tiny_config();
        let corpus = c.load_corpus().unwrap();
        let model = Model::init(&c, &corpus.train).unwrap();
        let sec = evaluate_split(&model, &corpus.test, Split::Test).unwrap();
        // the zero-initialised output layer gives a uniform distribution, which ties to level 0
        assert!(sec.predictions.iter().all(|p| p.predicted.value() == 0 && p.probs.iter().all(|&q| (q - 0.25).abs() < 1e-12)));
        let con = corpus.test.iter().filter(|s| !s.truth.severity.binary()).count() as f64;
        let n = corpus.test.len() as f64;
        let con_f1 = 2.0 * con / (n + con);
        assert!((sec.con_f1() - con_f1).abs() < 1e-12);
        assert_eq!(sec.dep_f1(), 0.0);
        assert!((sec.binary.macro_f1 - con_f1 / 2.0).abs() < 1e-12);
    }

    #[test]
    fn missing_modality_is_flagged() {
        let c = tiny_config();
        let mut corpus = c.load_corpus().unwrap();
        let model = Model::init(&c, &corpus.train).unwrap();
        corpus.test[0].visual = None;
        let sec = evaluate_split(&model, &corpus.test, Split::Test).unwrap();
        assert!(sec.missing_modalities);
        assert_eq!(sec.substituted, vec![(corpus.test[0].id.clone(), Modality::Visual)]);
    }

    #[test]
    fn ablation_arguments() {
        let c = tiny_config();
        let corpus = c.load_corpus().unwrap();
        assert!(ablate(&c, &corpus, &BTreeSet::new()).is_err());
        assert!(ablate(&c, &corpus, &[Ablation::Text].into()).is_err());
        let out = ablate(&c, &corpus, &[Ablation::Audio, Ablation::Vision].into()).unwrap();
        assert_eq!(out.model.fusion.streams, Streams::TEXT_ONLY);
        assert!(out.model.fusion.acoustic.is_none() && out.model.fusion.visual.is_none());
        assert_eq!(out.report.tags, vec!["-w/o Audio", "-w/o Vision"]);
        let out = ablate(&c, &corpus, &[Ablation::Ic].into()).unwrap();
        assert!(out.steps.iter().all(|s| s.l_ic.is_none()));
    }

    #[test]
    fn smoothing_is_a_trailing_mean() {
        assert_eq!(smoothed(&[1.0, 3.0, 5.0, 7.0], 2), vec![1.0, 2.0, 4.0, 6.0]);
    }

    #[test]
    fn report_scales_scores() {
        let c = RunConfig { eval_splits: vec![Split::Test], ..tiny_config() };
        let out = train(&c, None).unwrap();
        let text = render_report(&out.report);
        assert!(text.contains("Dep") && text.contains("Con") && text.contains("Macro"));
        let j = report_json(&out.report);
        let macro_f1 = j["evaluations"][0]["sections"][0]["binary"]["macro_f1"].as_f64().unwrap();
        let raw = out.report.final_section(Split::Test).unwrap().binary.macro_f1;
        assert_eq!(macro_f1, percent(raw));
    }
}
