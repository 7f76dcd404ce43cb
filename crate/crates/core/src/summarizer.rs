//! Dialogue encoder with a per-utterance item classifier and an autoregressive
//! summary decoder, plus the word-level vocabulary they share.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use ndarray::{s, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Utterance;
use crate::nn::tape::softmax_rows;
use crate::nn::{causal_mask, sinusoidal_positions, DecoderLayer, EncoderLayer, Linear, Mat, ParamId, ParamStore, Tape, Var};
use crate::phq_items::{PhqItem, ITEM_CLASSES};

pub const UNK: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const NEWLINE: usize = 3;
const SPECIALS: [&str; 4] = ["<unk>", "<bos>", "<eos>", "<nl>"];

/// Largest encoder input the backend accepts.
pub const MAX_INPUT_LIMIT: usize = 6000;

#[derive(Debug, Error)]
pub enum SummarizerError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid backend configuration: {0}")]
    Config(String),
    #[error("utterance {0} has an empty token span")]
    EmptySpan(usize),
    #[error("class id {0} is outside 0..{ITEM_CLASSES}")]
    InvalidClass(usize),
    #[error("token id {id} is outside a vocabulary of {size}")]
    TokenOutOfVocab { id: usize, size: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, SummarizerError>;

fn is_item_tag(s: &str) -> bool {
    s.strip_prefix("[ITEM=")
        .and_then(|r| r.strip_suffix(']'))
        .is_some_and(|code| !code.is_empty() && code.chars().all(|c| c.is_ascii_uppercase()))
}

/// Splits text into word runs (letters and digits, with inner apostrophes or hyphens),
/// `[ITEM=..]` tags, and single punctuation characters.
pub fn tokenize(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        if c == '[' {
            if let Some(len) = chars[i..].iter().position(|&c| c == ']') {
                let tag: String = chars[i..=i + len].iter().collect();
                if is_item_tag(&tag) {
                    out.push(tag);
                    i += len + 1;
                    continue;
                }
            }
        }
        if c.is_alphanumeric() {
            let start = i;
            while i < chars.len()
                && (chars[i].is_alphanumeric()
                    || ((chars[i] == '\'' || chars[i] == '-') && chars.get(i + 1).is_some_and(|n| n.is_alphanumeric())))
            {
                i += 1;
            }
            out.push(chars[start..i].iter().collect());
            continue;
        }
        out.push(c.to_string());
        i += 1;
    }
    out
}

/// Inverse of [`tokenize`] for text with single spaces and no space before punctuation.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for tok in tokens {
        let tok = tok.as_ref();
        let attach = matches!(tok, "," | "." | ";" | ":" | "?" | "!");
        if !out.is_empty() && !attach {
            out.push(' ');
        }
        out.push_str(tok);
    }
    out
}

/// Word-level vocabulary with four reserved ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    /// Specials, speaker tags, every item tag, then the sorted tokens of `texts`.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words = BTreeSet::new();
        for text in texts {
            words.extend(tokenize(text));
        }
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        for fixed in ["Interviewer", "Participant", ":"] {
            tokens.push(fixed.to_string());
        }
        for item in PhqItem::SYMPTOMS.iter().chain([&PhqItem::None]) {
            tokens.push(format!("[ITEM={}]", item.code()));
        }
        let mut seen: BTreeSet<String> = tokens.iter().cloned().collect();
        for w in words {
            if seen.insert(w.clone()) {
                tokens.push(w);
            }
        }
        Self::from(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or(SPECIALS[UNK])
    }

    pub fn encode_tokens<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    /// Summary text to decoder targets, terminated by EOS.
    pub fn encode_summary(&self, text: &str) -> Vec<usize> {
        let mut ids = self.encode_tokens(&tokenize(text));
        ids.push(EOS);
        ids
    }

    /// Ids to text, stopping at the first EOS and skipping other reserved ids.
    pub fn decode(&self, ids: &[usize]) -> String {
        let words: Vec<&str> = ids
            .iter()
            .take_while(|&&id| id != EOS)
            .filter(|&&id| id >= SPECIALS.len())
            .map(|&id| self.token(id))
            .collect();
        detokenize(&words)
    }

    /// One token per line.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()].iter().zip(SPECIALS).any(|(a, b)| a != b) {
            return Err(SummarizerError::InvalidArgument(format!("{} is not a vocabulary file", path.display())));
        }
        Ok(Self::from(tokens))
    }
}

pub fn utterance_line(u: &Utterance, label: PhqItem) -> String {
    format!("{}: {} [ITEM={}]", u.speaker.tag(), u.text, label.code())
}

/// Token-level encoder input with the token range of each retained utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct SerializedTokens {
    pub tokens: Vec<String>,
    /// `(start, end)` token range per retained utterance, end exclusive.
    pub spans: Vec<(usize, usize)>,
    /// Index of the first retained utterance; earlier ones were truncated away.
    pub first_utterance: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SerializedInput {
    pub ids: Vec<usize>,
    pub spans: Vec<(usize, usize)>,
    pub first_utterance: usize,
}

/// Renders each utterance as one tagged line, joined by a newline token. Whole
/// utterances are dropped from the front until the input fits in `max_tokens`; a single
/// utterance longer than the limit keeps its last `max_tokens` tokens.
pub fn serialize_tokens(dialogue: &[Utterance], labels: &[PhqItem], max_tokens: usize) -> Result<SerializedTokens> {
    if dialogue.is_empty() {
        return Err(SummarizerError::InvalidArgument("dialogue is empty".into()));
    }
    if labels.len() != dialogue.len() {
        return Err(SummarizerError::InvalidArgument(format!(
            "{} labels for {} utterances",
            labels.len(),
            dialogue.len()
        )));
    }
    if max_tokens == 0 {
        return Err(SummarizerError::InvalidArgument("max_tokens must be positive".into()));
    }
    let lines: Vec<Vec<String>> = dialogue.iter().zip(labels).map(|(u, &l)| tokenize(&utterance_line(u, l))).collect();
    let mut first = dialogue.len() - 1;
    let mut total = lines[first].len();
    while first > 0 && total + 1 + lines[first - 1].len() <= max_tokens {
        first -= 1;
        total += 1 + lines[first].len();
    }
    let mut tokens = Vec::with_capacity(total.min(max_tokens));
    let mut spans = Vec::with_capacity(dialogue.len() - first);
    for (k, line) in lines[first..].iter().enumerate() {
        if k > 0 {
            tokens.push(SPECIALS[NEWLINE].to_string());
        }
        let line = if line.len() > max_tokens { &line[line.len() - max_tokens..] } else { &line[..] };
        spans.push((tokens.len(), tokens.len() + line.len()));
        tokens.extend(line.iter().cloned());
    }
    Ok(SerializedTokens { tokens, spans, first_utterance: first })
}

pub fn serialize_input(dialogue: &[Utterance], labels: &[PhqItem], vocab: &Vocab, max_tokens: usize) -> Result<SerializedInput> {
    let st = serialize_tokens(dialogue, labels, max_tokens)?;
    Ok(SerializedInput { ids: vocab.encode_tokens(&st.tokens), spans: st.spans, first_utterance: st.first_utterance })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderStates {
    pub token_states: Mat,
    pub utterance_spans: Vec<(usize, usize)>,
}

impl EncoderStates {
    pub fn validate(&self) -> Result<()> {
        let mut prev_end = 0;
        for (i, &(start, end)) in self.utterance_spans.iter().enumerate() {
            if end <= start {
                return Err(SummarizerError::EmptySpan(i));
            }
            if start < prev_end || end > self.token_states.nrows() {
                return Err(SummarizerError::InvalidArgument(format!("span {i} ({start}, {end}) overlaps or is out of bounds")));
            }
            prev_end = end;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ItemClassifierHead {
    /// hidden × 9
    pub weight: Mat,
    /// 1 × 9
    pub bias: Mat,
}

/// Mean-pools each utterance span, applies the head and a softmax; one row per utterance.
pub fn classify_items(states: &EncoderStates, head: &ItemClassifierHead) -> Result<Mat> {
    states.validate()?;
    let h = states.token_states.ncols();
    let mut pooled = Array2::zeros((states.utterance_spans.len(), h));
    for (r, &(start, end)) in states.utterance_spans.iter().enumerate() {
        let mean = states.token_states.slice(s![start..end, ..]).mean_axis(Axis(0)).unwrap();
        pooled.row_mut(r).assign(&mean);
    }
    let logits = pooled.dot(&head.weight) + &head.bias;
    Ok(softmax_rows(&logits))
}

fn check_rows(probs: &Mat, targets: &[usize], classes: usize) -> Result<()> {
    if probs.nrows() != targets.len() {
        return Err(SummarizerError::InvalidArgument(format!("{} rows for {} targets", probs.nrows(), targets.len())));
    }
    if probs.ncols() != classes {
        return Err(SummarizerError::InvalidArgument(format!("{} columns, expected {classes}", probs.ncols())));
    }
    Ok(())
}

/// Summed negative log-likelihood of the gold item class per utterance.
pub fn ic_loss(probs: &Mat, gold: &[usize]) -> Result<f64> {
    check_rows(probs, gold, ITEM_CLASSES)?;
    gold.iter()
        .enumerate()
        .map(|(i, &g)| {
            if g >= ITEM_CLASSES {
                Err(SummarizerError::InvalidClass(g))
            } else {
                Ok(-probs[[i, g]].ln())
            }
        })
        .sum()
}

/// Teacher-forced summed negative log-likelihood of one target sequence, given the
/// decoder's next-token distributions (one row per target position).
pub fn ss_loss(probs: &Mat, target: &[usize]) -> Result<f64> {
    if target.is_empty() {
        return Err(SummarizerError::InvalidArgument("target is empty".into()));
    }
    let v = probs.ncols();
    check_rows(probs, target, v)?;
    target
        .iter()
        .enumerate()
        .map(|(i, &id)| {
            if id >= v {
                Err(SummarizerError::TokenOutOfVocab { id, size: v })
            } else {
                Ok(-probs[[i, id]].ln())
            }
        })
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decode {
    Greedy,
    Beam(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    /// Filled from the vocabulary when the model is built.
    pub vocab_size: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_input_tokens: usize,
    pub max_output_tokens: usize,
    pub decode: Decode,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            hidden: 64,
            layers: 2,
            heads: 4,
            ffn: 128,
            max_input_tokens: MAX_INPUT_LIMIT,
            max_output_tokens: 160,
            decode: Decode::Greedy,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(SummarizerError::Config(m));
        if self.vocab_size <= SPECIALS.len() {
            return fail(format!("vocab_size {} leaves no room for words", self.vocab_size));
        }
        if self.hidden == 0 || self.heads == 0 || self.ffn == 0 {
            return fail("hidden, heads and ffn must be positive".into());
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return fail(format!("hidden {} is not divisible by heads {}", self.hidden, self.heads));
        }
        if self.max_input_tokens == 0 || self.max_input_tokens > MAX_INPUT_LIMIT {
            return fail(format!("max_input_tokens must be in 1..={MAX_INPUT_LIMIT}"));
        }
        if self.max_output_tokens < 2 {
            return fail("max_output_tokens must allow at least one word and EOS".into());
        }
        if matches!(self.decode, Decode::Beam(0)) {
            return fail("beam width must be positive".into());
        }
        Ok(())
    }
}

/// Encoder–decoder with an item classification head on pooled utterance states.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Summarizer {
    pub config: BackendConfig,
    pub embed: ParamId,
    pub encoder: Vec<EncoderLayer>,
    pub decoder: Vec<DecoderLayer>,
    pub output: Linear,
    pub item_head: Linear,
}

impl Summarizer {
    pub fn new<R: Rng>(config: BackendConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (v, h, f) = (config.vocab_size, config.hidden, config.ffn);
        let embed = store.add_normal("sum.embed", v, h, 1.0, rng);
        let encoder = (0..config.layers)
            .map(|i| EncoderLayer::new(store, &format!("sum.enc{i}"), h, config.heads, f, rng))
            .collect();
        let decoder = (0..config.layers)
            .map(|i| DecoderLayer::new(store, &format!("sum.dec{i}"), h, config.heads, f, rng))
            .collect();
        let output = Linear::new(store, "sum.out", h, v, rng);
        let item_head = Linear::new(store, "sum.items", h, ITEM_CLASSES, rng);
        Ok(Self { config, embed, encoder, decoder, output, item_head })
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        match ids.iter().find(|&&id| id >= self.config.vocab_size) {
            Some(&id) => Err(SummarizerError::TokenOutOfVocab { id, size: self.config.vocab_size }),
            None => Ok(()),
        }
    }

    fn embed_positions(&self, t: &mut Tape, ids: &[usize]) -> Var {
        let e = t.param(self.embed);
        let x = t.gather(e, ids);
        let pos = sinusoidal_positions(ids.len(), self.config.hidden);
        t.add_const(x, &pos)
    }

    /// Token states, one row per input id.
    pub fn encode(&self, t: &mut Tape, ids: &[usize]) -> Result<Var> {
        if ids.is_empty() {
            return Err(SummarizerError::InvalidArgument("encoder input is empty".into()));
        }
        if ids.len() > self.config.max_input_tokens {
            return Err(SummarizerError::InvalidArgument(format!(
                "{} input tokens exceed the limit of {}; truncate before encoding",
                ids.len(),
                self.config.max_input_tokens
            )));
        }
        self.check_ids(ids)?;
        let mut x = self.embed_positions(t, ids);
        for layer in &self.encoder {
            x = layer.forward(t, x, None);
        }
        Ok(x)
    }

    /// Item-class logits, one row per span.
    pub fn item_logits(&self, t: &mut Tape, states: Var, spans: &[(usize, usize)]) -> Result<Var> {
        let n = t.value(states).nrows();
        let mut pooled = Vec::with_capacity(spans.len());
        for (i, &(start, end)) in spans.iter().enumerate() {
            if end <= start {
                return Err(SummarizerError::EmptySpan(i));
            }
            if end > n {
                return Err(SummarizerError::InvalidArgument(format!("span {i} ends past {n} tokens")));
            }
            let rows = t.slice_rows(states, start, end);
            pooled.push(t.mean_rows(rows));
        }
        if pooled.is_empty() {
            return Err(SummarizerError::InvalidArgument("no utterance spans".into()));
        }
        let stacked = t.concat_rows(&pooled);
        Ok(self.item_head.forward(t, stacked))
    }

    pub fn head(&self, store: &ParamStore) -> ItemClassifierHead {
        ItemClassifierHead { weight: store.value(self.item_head.w).clone(), bias: store.value(self.item_head.b).clone() }
    }

    fn cross_kv(&self, t: &mut Tape, memory: Var) -> Vec<(Var, Var)> {
        self.decoder.iter().map(|l| l.cross.project_memory(t, memory)).collect()
    }

    fn decode_states(&self, t: &mut Tape, kv: &[(Var, Var)], prefix: &[usize]) -> Var {
        let mut x = self.embed_positions(t, prefix);
        let mask = causal_mask(prefix.len());
        for (layer, &kv) in self.decoder.iter().zip(kv) {
            x = layer.forward_cached(t, x, kv, &mask);
        }
        x
    }

    /// Next-token logits for every position of `prefix` (which starts with BOS).
    pub fn decoder_logits(&self, t: &mut Tape, memory: Var, prefix: &[usize]) -> Result<Var> {
        self.check_ids(prefix)?;
        let kv = self.cross_kv(t, memory);
        let x = self.decode_states(t, &kv, prefix);
        Ok(self.output.forward(t, x))
    }

    /// Summed item-classification NLL on the tape.
    pub fn ic_loss_var(&self, t: &mut Tape, states: Var, spans: &[(usize, usize)], gold: &[usize]) -> Result<Var> {
        if spans.len() != gold.len() {
            return Err(SummarizerError::InvalidArgument(format!("{} spans for {} labels", spans.len(), gold.len())));
        }
        if let Some(&g) = gold.iter().find(|&&g| g >= ITEM_CLASSES) {
            return Err(SummarizerError::InvalidClass(g));
        }
        let logits = self.item_logits(t, states, spans)?;
        let lp = t.log_softmax_rows(logits);
        let picked = t.pick_sum(lp, gold);
        Ok(t.scale(picked, -1.0))
    }

    /// Teacher-forced summed NLL of `target` (which ends with EOS) on the tape.
    pub fn ss_loss_var(&self, t: &mut Tape, memory: Var, target: &[usize]) -> Result<Var> {
        if target.is_empty() {
            return Err(SummarizerError::InvalidArgument("target is empty".into()));
        }
        self.check_ids(target)?;
        let prefix: Vec<usize> = std::iter::once(BOS).chain(target[..target.len() - 1].iter().copied()).collect();
        let logits = self.decoder_logits(t, memory, &prefix)?;
        let lp = t.log_softmax_rows(logits);
        let picked = t.pick_sum(lp, target);
        Ok(t.scale(picked, -1.0))
    }

    /// Frozen-parameter encoder pass.
    pub fn encoder_states(&self, store: &ParamStore, input: &SerializedInput) -> Result<EncoderStates> {
        let mut t = Tape::new(store);
        let x = self.encode(&mut t, &input.ids)?;
        Ok(EncoderStates { token_states: t.value(x).clone(), utterance_spans: input.spans.clone() })
    }

    /// Summary token ids for the encoded input, ending with EOS.
    pub fn generate(&self, store: &ParamStore, input_ids: &[usize]) -> Result<Vec<usize>> {
        let (kv_values, limit) = {
            let mut t = Tape::new(store);
            let memory = self.encode(&mut t, input_ids)?;
            let kv = self.cross_kv(&mut t, memory);
            let values: Vec<(Mat, Mat)> = kv.iter().map(|&(k, v)| (t.value(k).clone(), t.value(v).clone())).collect();
            (values, self.config.max_output_tokens)
        };
        let next = |prefix: &[usize]| -> Vec<f64> {
            let mut t = Tape::new(store);
            let kv: Vec<(Var, Var)> = kv_values.iter().map(|(k, v)| (t.constant(k.clone()), t.constant(v.clone()))).collect();
            let x = self.decode_states(&mut t, &kv, prefix);
            let last = t.slice_rows(x, prefix.len() - 1, prefix.len());
            let logits = self.output.forward(&mut t, last);
            let lp = t.log_softmax_rows(logits);
            t.value(lp).row(0).to_vec()
        };
        let width = match self.config.decode {
            Decode::Greedy => 1,
            Decode::Beam(w) => w,
        };
        Ok(beam_search(next, width, limit))
    }
}

/// Ranks token ids by descending score, lower id first on ties.
fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..scores.len()).collect();
    ids.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    ids.truncate(k);
    ids
}

/// Beam search without length normalisation; width 1 is greedy decoding. The result
/// holds at most `limit` ids including the terminating EOS.
pub fn beam_search<F>(mut next: F, width: usize, limit: usize) -> Vec<usize>
where
    F: FnMut(&[usize]) -> Vec<f64>,
{
    #[derive(Clone)]
    struct Beam {
        ids: Vec<usize>,
        score: f64,
        done: bool,
    }
    let width = width.max(1);
    let mut beams = vec![Beam { ids: vec![BOS], score: 0.0, done: false }];
    while beams.iter().any(|b| !b.done) {
        let mut candidates = Vec::new();
        for b in &beams {
            if b.done {
                candidates.push(b.clone());
                continue;
            }
            // prefix holds BOS, so ids.len() - 1 generated tokens so far
            let generated = b.ids.len() - 1;
            if generated + 1 >= limit {
                let mut ids = b.ids.clone();
                ids.push(EOS);
                candidates.push(Beam { ids, score: b.score, done: true });
                continue;
            }
            let lp = next(&b.ids);
            for id in top_k(&lp, width) {
                let mut ids = b.ids.clone();
                ids.push(id);
                candidates.push(Beam { ids, score: b.score + lp[id], done: id == EOS });
            }
        }
        candidates.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.ids.cmp(&b.ids)));
        candidates.truncate(width);
        beams = candidates;
    }
    let best = beams.into_iter().next().expect("at least one beam");
    best.ids[1..].to_vec()
}
