//! Severity prediction from summary text fused with acoustic and visual streams:
//! per-modality self-attention encoders, text-anchored cross-modal layers, a pooled
//! MLP head, and the combined training objective.

use ndarray::{s, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Modality, Sample};
use crate::nn::tape::softmax_rows;
use crate::nn::{CrossLayer, EncoderLayer, Linear, Mat, ParamId, ParamStore, Tape, Var};
use crate::phq_items::SeverityLevel;

pub const SEVERITY_CLASSES: usize = 4;

#[derive(Debug, Error, PartialEq)]
pub enum FusionError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("loss component {component} is not finite ({value})")]
    NonFinite { component: &'static str, value: f64 },
}

type Result<T> = std::result::Result<T, FusionError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub text_dim: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ffn: usize,
    pub sat_acoustic_layers: usize,
    pub sat_visual_layers: usize,
    pub cmt_acoustic_layers: usize,
    pub cmt_visual_layers: usize,
    pub mlp_hidden: usize,
    pub acoustic_dim: usize,
    pub visual_dim: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            text_dim: 32,
            model_dim: 32,
            heads: 2,
            ffn: 64,
            sat_acoustic_layers: 1,
            sat_visual_layers: 3,
            cmt_acoustic_layers: 2,
            cmt_visual_layers: 2,
            mlp_hidden: 32,
            acoustic_dim: crate::corpus::SYNTHETIC_ACOUSTIC_DIM,
            visual_dim: crate::corpus::SYNTHETIC_VISUAL_DIM,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.text_dim, self.model_dim, self.heads, self.ffn, self.mlp_hidden, self.acoustic_dim, self.visual_dim];
        if dims.contains(&0) {
            return Err(FusionError::Config("fusion dimensions must be positive".into()));
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return Err(FusionError::Config(format!("model_dim {} is not divisible by heads {}", self.model_dim, self.heads)));
        }
        Ok(())
    }

    pub fn input_dim(&self, m: Modality) -> usize {
        match m {
            Modality::Acoustic => self.acoustic_dim,
            Modality::Visual => self.visual_dim,
        }
    }
}

/// Which non-text streams feed the severity head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Streams {
    pub audio: bool,
    pub vision: bool,
}

impl Streams {
    pub const FULL: Streams = Streams { audio: true, vision: true };
    pub const TEXT_ONLY: Streams = Streams { audio: false, vision: false };

    pub fn enabled(self, m: Modality) -> bool {
        match m {
            Modality::Acoustic => self.audio,
            Modality::Visual => self.vision,
        }
    }
}

/// Per-modality frame and text-length bounds; `None` leaves a sequence unclipped.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClipPolicy {
    pub text: Option<usize>,
    pub acoustic: Option<usize>,
    pub visual: Option<usize>,
}

/// `ceil(mean + 3·std)` of the lengths (population standard deviation), at least 1.
pub fn clip_bound(lengths: &[usize]) -> Option<usize> {
    if lengths.is_empty() {
        return None;
    }
    let n = lengths.len() as f64;
    let mean = lengths.iter().sum::<usize>() as f64 / n;
    let var = lengths.iter().map(|&l| (l as f64 - mean).powi(2)).sum::<f64>() / n;
    Some(((mean + 3.0 * var.sqrt()).ceil() as usize).max(1))
}

impl ClipPolicy {
    /// Bounds from training-split lengths. `text_lengths` are summary token counts.
    pub fn from_training(samples: &[Sample], text_lengths: &[usize]) -> Self {
        let lens = |m: Modality| -> Vec<usize> {
            samples
                .iter()
                .filter_map(|s| match m {
                    Modality::Acoustic => s.acoustic.as_ref(),
                    Modality::Visual => s.visual.as_ref(),
                })
                .map(|f| f.len())
                .collect()
        };
        Self { text: clip_bound(text_lengths), acoustic: clip_bound(&lens(Modality::Acoustic)), visual: clip_bound(&lens(Modality::Visual)) }
    }

    pub fn bound(&self, m: Modality) -> Option<usize> {
        match m {
            Modality::Acoustic => self.acoustic,
            Modality::Visual => self.visual,
        }
    }
}

fn clip_rows(m: &Mat, bound: Option<usize>) -> Mat {
    match bound {
        Some(b) if m.nrows() > b => m.slice(s![..b, ..]).to_owned(),
        _ => m.clone(),
    }
}

/// Inputs of one severity prediction after clipping.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    /// Summary token ids (no EOS).
    pub text_ids: Vec<usize>,
    pub acoustic: Option<Mat>,
    pub visual: Option<Mat>,
    /// Modalities replaced by a single all-zero frame because the sample lacked them.
    pub substituted: Vec<Modality>,
}

/// Collects the clipped text and feature matrices for the enabled streams. A missing
/// modality is an error unless `substitute_missing` is set, in which case a single zero
/// frame stands in and the substitution is recorded.
pub fn extract_features(
    sample: &Sample,
    summary_ids: &[usize],
    config: &FusionConfig,
    streams: Streams,
    clip: &ClipPolicy,
    substitute_missing: bool,
) -> Result<FeatureSet> {
    if summary_ids.is_empty() {
        return Err(FusionError::InvalidArgument("summary is empty".into()));
    }
    let mut text_ids = summary_ids.to_vec();
    if let Some(b) = clip.text {
        text_ids.truncate(b.max(1));
    }
    let mut substituted = Vec::new();
    let mut take = |m: Modality| -> Result<Option<Mat>> {
        if !streams.enabled(m) {
            return Ok(None);
        }
        let seq = match m {
            Modality::Acoustic => sample.acoustic.as_ref(),
            Modality::Visual => sample.visual.as_ref(),
        };
        match seq {
            Some(f) if f.dim() != config.input_dim(m) => Err(FusionError::Dimension(format!(
                "sample {} has {:?} width {}, model expects {}",
                sample.id,
                m,
                f.dim(),
                config.input_dim(m)
            ))),
            Some(f) => Ok(Some(clip_rows(&f.frames, clip.bound(m)))),
            None if substitute_missing => {
                substituted.push(m);
                Ok(Some(Array2::zeros((1, config.input_dim(m)))))
            }
            None => Err(FusionError::Config(format!("sample {} has no {:?} features and no extractor backend", sample.id, m))),
        }
    };
    let acoustic = take(Modality::Acoustic)?;
    let visual = take(Modality::Visual)?;
    Ok(FeatureSet { text_ids, acoustic, visual, substituted })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Branch {
    pub modality: Modality,
    pub input: Linear,
    pub sat: Vec<EncoderLayer>,
    pub cmt: Vec<CrossLayer>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FusionModel {
    pub config: FusionConfig,
    pub streams: Streams,
    pub vocab_size: usize,
    pub text_embed: ParamId,
    pub text_fc: Linear,
    pub acoustic: Option<Branch>,
    pub visual: Option<Branch>,
    pub mlp_hidden: Linear,
    pub mlp_out: Linear,
}

/// Probability vector over the four severity levels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SeverityDistribution {
    pub probs: [f64; SEVERITY_CLASSES],
}

impl SeverityDistribution {
    pub fn from_logits(logits: &[f64]) -> Self {
        let m = Array2::from_shape_vec((1, SEVERITY_CLASSES), logits.to_vec()).expect("four logits");
        let p = softmax_rows(&m);
        let mut probs = [0.0; SEVERITY_CLASSES];
        probs.iter_mut().zip(p.iter()).for_each(|(d, s)| *d = *s);
        Self { probs }
    }

    /// Most probable level; ties go to the lower level.
    pub fn argmax(&self) -> SeverityLevel {
        let mut best = 0;
        for k in 1..SEVERITY_CLASSES {
            if self.probs[k] > self.probs[best] {
                best = k;
            }
        }
        SeverityLevel::new(best as u8).expect("index below four")
    }
}

impl FusionModel {
    pub fn new<R: Rng>(config: FusionConfig, streams: Streams, vocab_size: usize, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if vocab_size == 0 {
            return Err(FusionError::Config("vocab_size must be positive".into()));
        }
        let d = config.model_dim;
        let text_embed = store.add_normal("fus.text_embed", vocab_size, config.text_dim, 1.0, rng);
        let text_fc = Linear::new(store, "fus.text_fc", config.text_dim, d, rng);
        let mut branch = |m: Modality, sat_layers: usize, cmt_layers: usize, tag: &str| Branch {
            modality: m,
            input: Linear::new(store, &format!("fus.{tag}.in"), config.input_dim(m), d, rng),
            sat: (0..sat_layers)
                .map(|i| EncoderLayer::new(store, &format!("fus.{tag}.sat{i}"), d, config.heads, config.ffn, rng))
                .collect(),
            cmt: (0..cmt_layers)
                .map(|i| CrossLayer::new(store, &format!("fus.{tag}.cmt{i}"), d, config.heads, config.ffn, rng))
                .collect(),
        };
        let acoustic = streams
            .audio
            .then(|| branch(Modality::Acoustic, config.sat_acoustic_layers, config.cmt_acoustic_layers, "a"));
        let visual = streams
            .vision
            .then(|| branch(Modality::Visual, config.sat_visual_layers, config.cmt_visual_layers, "v"));
        let pooled_streams = usize::from(streams.audio) + usize::from(streams.vision);
        let mlp_in = d * pooled_streams.max(1);
        let mlp_hidden = Linear::new(store, "fus.mlp.hidden", mlp_in, config.mlp_hidden, rng);
        let mlp_out = Linear::zeroed(store, "fus.mlp.out", config.mlp_hidden, SEVERITY_CLASSES);
        Ok(Self { config, streams, vocab_size, text_embed, text_fc, acoustic, visual, mlp_hidden, mlp_out })
    }

    pub fn branch(&self, m: Modality) -> Option<&Branch> {
        match m {
            Modality::Acoustic => self.acoustic.as_ref(),
            Modality::Visual => self.visual.as_ref(),
        }
    }

    pub fn sat_layers(&self, m: Modality) -> usize {
        self.branch(m).map_or(0, |b| b.sat.len())
    }

    pub fn cmt_layers(&self, m: Modality) -> usize {
        self.branch(m).map_or(0, |b| b.cmt.len())
    }

    /// Text states `l_t × d_t` looked up from the trainable embedding.
    pub fn text_features(&self, t: &mut Tape, ids: &[usize]) -> Result<Var> {
        if ids.is_empty() {
            return Err(FusionError::InvalidArgument("text is empty".into()));
        }
        if let Some(&id) = ids.iter().find(|&&id| id >= self.vocab_size) {
            return Err(FusionError::InvalidArgument(format!("token id {id} outside vocabulary of {}", self.vocab_size)));
        }
        let e = t.param(self.text_embed);
        Ok(t.gather(e, ids))
    }

    /// The projected text stream `H_t`.
    pub fn text_states(&self, t: &mut Tape, ids: &[usize]) -> Result<Var> {
        let x = self.text_features(t, ids)?;
        Ok(self.text_fc.forward(t, x))
    }

    /// Projects frames to the model dimension and applies the modality's self-attention stack.
    pub fn sat_encode(&self, t: &mut Tape, frames: Var, m: Modality) -> Result<Var> {
        let b = self.branch(m).ok_or_else(|| FusionError::InvalidArgument(format!("{m:?} stream is disabled")))?;
        let width = t.value(frames).ncols();
        if width != self.config.input_dim(m) {
            return Err(FusionError::Dimension(format!("{m:?} frames have width {width}, expected {}", self.config.input_dim(m))));
        }
        let mut x = b.input.forward(t, frames);
        for layer in &b.sat {
            x = layer.forward(t, x, None);
        }
        Ok(x)
    }

    /// Text-queried cross-modal stack; output has one row per text state.
    pub fn cmt_fuse(&self, t: &mut Tape, h_t: Var, h_m: Var, m: Modality) -> Result<Var> {
        let b = self.branch(m).ok_or_else(|| FusionError::InvalidArgument(format!("{m:?} stream is disabled")))?;
        let (dt, dm) = (t.value(h_t).ncols(), t.value(h_m).ncols());
        if dt != dm || dt != self.config.model_dim {
            return Err(FusionError::Dimension(format!("text width {dt}, {m:?} width {dm}, model {}", self.config.model_dim)));
        }
        let mut x = h_t;
        for layer in &b.cmt {
            x = layer.forward(t, x, h_m);
        }
        Ok(x)
    }

    /// Severity logits for one feature set.
    pub fn logits(&self, t: &mut Tape, feats: &FeatureSet) -> Result<Var> {
        let h_t = self.text_states(t, &feats.text_ids)?;
        let mut pooled = Vec::new();
        for (m, frames) in [(Modality::Acoustic, &feats.acoustic), (Modality::Visual, &feats.visual)] {
            if !self.streams.enabled(m) {
                continue;
            }
            let frames = frames.as_ref().ok_or_else(|| FusionError::Config(format!("{m:?} features missing")))?;
            let x = t.constant(frames.clone());
            let h_m = self.sat_encode(t, x, m)?;
            let fused = self.cmt_fuse(t, h_t, h_m, m)?;
            pooled.push(t.mean_rows(fused));
        }
        if pooled.is_empty() {
            pooled.push(t.mean_rows(h_t));
        }
        let cat = if pooled.len() == 1 { pooled[0] } else { t.concat_cols(&pooled) };
        let h = self.mlp_hidden.forward(t, cat);
        let h = t.gelu(h);
        Ok(self.mlp_out.forward(t, h))
    }

    pub fn sp_loss_var(&self, t: &mut Tape, feats: &FeatureSet, gold: SeverityLevel) -> Result<Var> {
        let logits = self.logits(t, feats)?;
        let lp = t.log_softmax_rows(logits);
        let picked = t.pick_sum(lp, &[gold.value() as usize]);
        Ok(t.scale(picked, -1.0))
    }

    pub fn predict(&self, store: &ParamStore, feats: &FeatureSet) -> Result<SeverityDistribution> {
        let mut t = Tape::new(store);
        let logits = self.logits(&mut t, feats)?;
        Ok(SeverityDistribution::from_logits(t.value(logits).as_slice().expect("contiguous row")))
    }

    pub fn head(&self, store: &ParamStore) -> SeverityMlp {
        SeverityMlp {
            w1: store.value(self.mlp_hidden.w).clone(),
            b1: store.value(self.mlp_hidden.b).clone(),
            w2: store.value(self.mlp_out.w).clone(),
            b2: store.value(self.mlp_out.b).clone(),
        }
    }
}

/// Weights of the two-layer severity head.
#[derive(Clone, Debug, PartialEq)]
pub struct SeverityMlp {
    pub w1: Mat,
    pub b1: Mat,
    pub w2: Mat,
    pub b2: Mat,
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (0.797_884_560_802_865_4 * (x + 0.044715 * x.powi(3))).tanh())
}

/// Mean-pools both fused streams over time, concatenates, and applies the MLP and softmax.
pub fn predict_severity(h_ta: &Mat, h_tv: &Mat, mlp: &SeverityMlp) -> Result<SeverityDistribution> {
    if h_ta.nrows() != h_tv.nrows() {
        return Err(FusionError::Dimension(format!("fused streams have {} and {} rows", h_ta.nrows(), h_tv.nrows())));
    }
    if h_ta.nrows() == 0 {
        return Err(FusionError::InvalidArgument("fused streams are empty".into()));
    }
    let pa = h_ta.mean_axis(Axis(0)).unwrap();
    let pv = h_tv.mean_axis(Axis(0)).unwrap();
    let x = ndarray::concatenate(Axis(0), &[pa.view(), pv.view()]).unwrap().insert_axis(Axis(0));
    if x.ncols() != mlp.w1.nrows() {
        return Err(FusionError::Dimension(format!("pooled width {} but head expects {}", x.ncols(), mlp.w1.nrows())));
    }
    let h = (x.dot(&mlp.w1) + &mlp.b1).mapv(gelu);
    let logits = h.dot(&mlp.w2) + &mlp.b2;
    Ok(SeverityDistribution::from_logits(logits.as_slice().unwrap()))
}

/// Mean cross-entropy of the gold level over a batch.
pub fn sp_loss(preds: &[SeverityDistribution], gold: &[SeverityLevel]) -> Result<f64> {
    if preds.len() != gold.len() || preds.is_empty() {
        return Err(FusionError::InvalidArgument(format!("{} predictions for {} labels", preds.len(), gold.len())));
    }
    let sum: f64 = preds.iter().zip(gold).map(|(p, g)| -p.probs[g.value() as usize].ln()).sum();
    Ok(sum / preds.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 1.0, gamma: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.alpha, self.beta, self.gamma];
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(FusionError::Config(format!("loss weights must be finite and non-negative, got {w:?}")));
        }
        if w.iter().all(|&x| x == 0.0) {
            return Err(FusionError::Config("loss weights are all zero".into()));
        }
        Ok(())
    }
}

pub fn check_finite(component: &'static str, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(FusionError::NonFinite { component, value })
    }
}

pub fn total_loss(l_ic: f64, l_ss: f64, l_sp: f64, w: LossWeights) -> Result<f64> {
    check_finite("l_ic", l_ic)?;
    check_finite("l_ss", l_ss)?;
    check_finite("l_sp", l_sp)?;
    Ok(w.alpha * l_ic + w.beta * l_ss + w.gamma * l_sp)
}
