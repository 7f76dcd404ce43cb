//! Training-free severity assessment by prompting: Standard, chain-of-thought and
//! item-by-item PHQ-8 scoring prompts, a rigid answer schema and its parser, and an
//! evaluation loop with mock clients for offline use.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;
use std::thread;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Sample, Speaker, Utterance};
use crate::llm::{invoke_with_retry, AuditLog, LlmClient, LlmError, ResponseCache, RetryPolicy};
use crate::metrics::{classification_scores, ClassificationMode, ClassificationScores, GenerationScores, TokenSimilarity};
use crate::phq_items::{severity_from_total, total_score, ItemScores, PhqItem, SeverityLevel, SEVERITY_BANDS};

pub const STANDARD_INSTRUCTION: &str = "Below is a clinical interview between an interviewer and a participant. \
Summarize the participant's PHQ-8 symptoms and their underlying causes, then predict the participant's \
depression severity as an integer from 0 (none) to 3 (severe).";

pub const COT_DIRECTIVE: &str = "Let's think step by step.";

/// Item-by-item scoring instruction, used verbatim.
pub const PHQCOT_INSTRUCTION: &str = "It is crucial for the participant\u{2019}s depression diagnosis, so please score and \
find the corresponding explanatory content in the conversation for each of the PHQ-8 questionnaire items sequentially \
(scores range from 0 to 3) and then summarize.";

pub const TARGET_MARKER: &str = "Transcript ID: ";

/// Share of failed samples above which a run is reported invalid.
pub const MAX_FAILURE_RATE: f64 = 0.2;

#[derive(Debug, Error, PartialEq)]
pub enum PhqCotError {
    #[error("invalid prompt spec: {0}")]
    Spec(String),
    #[error("transcript needs {needed} tokens but the budget is {budget} after digesting")]
    OverBudget { needed: usize, budget: usize },
    #[error("missing item lines for {}", .0.join(", "))]
    MissingItems(Vec<String>),
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("response has no SUMMARY block")]
    MissingSummary,
    #[error("response has no SEVERITY line")]
    MissingSeverity,
    #[error("empty response")]
    Empty,
}

type Result<T> = std::result::Result<T, PhqCotError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Standard,
    #[serde(rename = "cot")]
    CoT,
    #[serde(rename = "phqcot")]
    PhqCoT,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Standard => "standard",
            Strategy::CoT => "cot",
            Strategy::PhqCoT => "phqcot",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "standard" => Ok(Strategy::Standard),
            "cot" => Ok(Strategy::CoT),
            "phqcot" => Ok(Strategy::PhqCoT),
            other => Err(format!("unknown strategy {other:?}; expected standard, cot or phqcot")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Exemplar {
    pub id: String,
    pub digest: String,
    pub summary: String,
    pub severity: SeverityLevel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub strategy: Strategy,
    pub shots: usize,
    pub exemplars: Vec<Exemplar>,
}

type Pick = Box<dyn Fn(&Sample) -> bool>;

fn participant_digest(dialogue: &[Utterance]) -> String {
    dialogue
        .iter()
        .filter(|u| u.speaker == Speaker::Participant)
        .map(|u| format!("{}: {}", u.speaker.tag(), u.text))
        .collect::<Vec<_>>()
        .join("\n")
}

impl PromptSpec {
    pub fn zero_shot(strategy: Strategy) -> Self {
        Self { strategy, shots: 0, exemplars: Vec::new() }
    }

    /// Picks exemplars from `train`: either the samples named in `ids`, or the first
    /// samples (by id) meeting the shot requirement: one depressed and one control for
    /// two shots, one per severity level for four.
    pub fn with_exemplars(strategy: Strategy, shots: usize, train: &[Sample], ids: Option<&[String]>) -> Result<Self> {
        let chosen: Vec<&Sample> = match ids {
            Some(ids) => ids
                .iter()
                .map(|id| {
                    train
                        .iter()
                        .find(|s| &s.id == id)
                        .ok_or_else(|| PhqCotError::Spec(format!("exemplar {id} is not in the training split")))
                })
                .collect::<Result<_>>()?,
            None => {
                let mut sorted: Vec<&Sample> = train.iter().collect();
                sorted.sort_by(|a, b| a.id.cmp(&b.id));
                let wanted: Vec<Pick> = match shots {
                    0 => vec![],
                    2 => vec![Box::new(|s: &Sample| s.truth.severity.binary()), Box::new(|s: &Sample| !s.truth.severity.binary())],
                    4 => (0..4u8).map(|v| Box::new(move |s: &Sample| s.truth.severity.value() == v) as Pick).collect(),
                    n => return Err(PhqCotError::Spec(format!("shots must be 0, 2 or 4, got {n}"))),
                };
                wanted
                    .iter()
                    .map(|pred| {
                        sorted
                            .iter()
                            .copied()
                            .find(|s| pred(s))
                            .ok_or_else(|| PhqCotError::Spec("training split lacks a required exemplar severity".into()))
                    })
                    .collect::<Result<_>>()?
            }
        };
        let exemplars = chosen
            .into_iter()
            .map(|s| Exemplar {
                id: s.id.clone(),
                digest: participant_digest(&s.dialogue),
                summary: s.truth.summary.rendered_text.clone(),
                severity: s.truth.severity,
            })
            .collect();
        let spec = Self { strategy, shots, exemplars };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.shots, 0 | 2 | 4) {
            return Err(PhqCotError::Spec(format!("shots must be 0, 2 or 4, got {}", self.shots)));
        }
        if self.exemplars.len() != self.shots {
            return Err(PhqCotError::Spec(format!("{} exemplars for {} shots", self.exemplars.len(), self.shots)));
        }
        let mut sev: Vec<u8> = self.exemplars.iter().map(|e| e.severity.value()).collect();
        sev.sort_unstable();
        match self.shots {
            2 if self.exemplars.iter().filter(|e| e.severity.binary()).count() != 1 => {
                Err(PhqCotError::Spec("two-shot exemplars need one depressed and one control sample".into()))
            }
            4 if sev != [0, 1, 2, 3] => Err(PhqCotError::Spec("four-shot exemplars need one sample per severity level".into())),
            _ => Ok(()),
        }
    }
}

fn word_count(s: &str) -> usize {
    s.split_whitespace().count()
}

/// Transcript lines that fit in `budget` whitespace tokens. Interviewer turns are dropped
/// from the front first; if participant turns alone still exceed the budget it is an error.
pub fn digest_dialogue(dialogue: &[Utterance], budget: usize) -> Result<String> {
    let lines: Vec<String> = dialogue.iter().map(|u| format!("{}: {}", u.speaker.tag(), u.text)).collect();
    let mut keep = vec![true; lines.len()];
    let mut total: usize = lines.iter().map(|l| word_count(l)).sum();
    for (i, u) in dialogue.iter().enumerate() {
        if total <= budget {
            break;
        }
        if u.speaker == Speaker::Interviewer {
            keep[i] = false;
            total -= word_count(&lines[i]);
        }
    }
    if total > budget {
        return Err(PhqCotError::OverBudget { needed: total, budget });
    }
    Ok(lines.into_iter().zip(keep).filter(|(_, k)| *k).map(|(l, _)| l).collect::<Vec<_>>().join("\n"))
}

fn answer_format(strategy: Strategy) -> String {
    let mut s = String::from("Answer in exactly this format:\n");
    if strategy == Strategy::PhqCoT {
        for item in PhqItem::SYMPTOMS {
            s.push_str(&format!("ITEM {}: <score 0-3> | EVIDENCE: \"<quote from the conversation>\"\n", item.code()));
        }
        s.push_str("SUMMARY: <summary>\nTOTAL: <sum of the item scores>");
    } else {
        s.push_str("SUMMARY: <summary>\nSEVERITY: <0-3>");
    }
    s
}

/// Assembles the prompt: instruction, strategy additions, answer schema, exemplars in
/// their fixed order, then the target transcript digested to fit `budget` tokens.
pub fn build_prompt(sample: &Sample, spec: &PromptSpec, budget: usize) -> Result<String> {
    spec.validate()?;
    let mut head = String::from(STANDARD_INSTRUCTION);
    match spec.strategy {
        Strategy::Standard => {}
        Strategy::CoT => {
            head.push(' ');
            head.push_str(COT_DIRECTIVE);
        }
        Strategy::PhqCoT => {
            head.push(' ');
            head.push_str(PHQCOT_INSTRUCTION);
            head.push_str("\n\nPHQ-8 items:\n");
            for item in PhqItem::SYMPTOMS {
                head.push_str(&format!("- {} ({}): {}\n", item.code(), item.name(), item.description()));
            }
        }
    }
    head.push_str("\n\n");
    head.push_str(&answer_format(spec.strategy));
    if !spec.exemplars.is_empty() {
        head.push_str("\n\nEXAMPLES:");
        for (k, e) in spec.exemplars.iter().enumerate() {
            head.push_str(&format!(
                "\n\nExample {}\nTranscript:\n{}\nSUMMARY: {}\nSEVERITY: {}",
                k + 1,
                e.digest,
                e.summary,
                e.severity.value()
            ));
        }
    }
    let target_head = format!("\n\n{TARGET_MARKER}{}\nTranscript:\n", sample.id);
    let used = word_count(&head) + word_count(&target_head);
    let remaining = budget.saturating_sub(used);
    let transcript = digest_dialogue(&sample.dialogue, remaining)?;
    Ok(format!("{head}{target_head}{transcript}\n"))
}

/// Parsed item-by-item answer with locally recomputed total and severity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhqCotResponse {
    pub item_scores: ItemScores,
    pub evidence: BTreeMap<PhqItem, Vec<String>>,
    pub summary_text: String,
    pub total: u8,
    pub severity: SeverityLevel,
    /// Severity stated by the model, if any.
    pub claimed_severity: Option<SeverityLevel>,
    /// Total stated by the model, if any.
    pub claimed_total: Option<u32>,
    /// The model's own total or severity disagrees with the local conversion.
    pub discrepancy: bool,
}

fn quotes(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut rest = s;
    while let Some(start) = rest.find('"') {
        let Some(len) = rest[start + 1..].find('"') else { break };
        out.push(rest[start + 1..start + 1 + len].to_string());
        rest = &rest[start + 2 + len..];
    }
    out
}

struct RawAnswer {
    items: BTreeMap<PhqItem, (u8, Vec<String>)>,
    summary: Option<String>,
    total: Option<u32>,
    severity: Option<SeverityLevel>,
}

fn scan(raw: &str) -> Result<RawAnswer> {
    if raw.trim().is_empty() {
        return Err(PhqCotError::Empty);
    }
    let mut ans = RawAnswer { items: BTreeMap::new(), summary: None, total: None, severity: None };
    let mut in_summary = false;
    for (i, line) in raw.lines().enumerate() {
        let n = i + 1;
        let t = line.trim();
        let malformed = |reason: String| PhqCotError::Malformed { line: n, reason };
        if let Some(rest) = t.strip_prefix("ITEM ") {
            in_summary = false;
            let (code, rest) = rest.split_once(':').ok_or_else(|| malformed("item line lacks ':'".into()))?;
            let item = PhqItem::from_code(code.trim()).map_err(|e| malformed(e.to_string()))?;
            if item == PhqItem::None {
                return Err(malformed("NONE is not a questionnaire item".into()));
            }
            let (score, evidence) = match rest.split_once('|') {
                Some((s, e)) => (s.trim(), e.trim()),
                None => (rest.trim(), ""),
            };
            let score: u8 = score.parse().map_err(|_| malformed(format!("score {score:?} is not an integer")))?;
            if score > 3 {
                return Err(malformed(format!("score {score} is outside 0-3")));
            }
            let evidence = evidence.strip_prefix("EVIDENCE:").map(quotes).unwrap_or_default();
            ans.items.insert(item, (score, evidence));
        } else if let Some(rest) = t.strip_prefix("SUMMARY:") {
            in_summary = true;
            ans.summary = Some(rest.trim().to_string());
        } else if let Some(rest) = t.strip_prefix("TOTAL:") {
            in_summary = false;
            let v = rest.trim().parse().map_err(|_| malformed(format!("total {:?} is not an integer", rest.trim())))?;
            ans.total = Some(v);
        } else if let Some(rest) = t.strip_prefix("SEVERITY:") {
            in_summary = false;
            let v: u8 = rest.trim().parse().map_err(|_| malformed(format!("severity {:?} is not an integer", rest.trim())))?;
            ans.severity = Some(SeverityLevel::new(v).map_err(|e| malformed(e.to_string()))?);
        } else if in_summary && !t.is_empty() {
            let s = ans.summary.as_mut().expect("in summary block");
            if !s.is_empty() {
                s.push(' ');
            }
            s.push_str(t);
        }
    }
    Ok(ans)
}

/// Parses the item-by-item schema. The total and severity are recomputed from the item
/// scores; any severity or total the model states is only compared against them.
pub fn parse_response(raw: &str) -> Result<PhqCotResponse> {
    let ans = scan(raw)?;
    let missing: Vec<String> = PhqItem::SYMPTOMS
        .iter()
        .filter(|i| !ans.items.contains_key(i))
        .map(|i| i.code().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(PhqCotError::MissingItems(missing));
    }
    let summary_text = ans.summary.ok_or(PhqCotError::MissingSummary)?;
    let item_scores: ItemScores = ans.items.iter().map(|(&i, &(s, _))| (i, s)).collect();
    let evidence = ans.items.into_iter().map(|(i, (_, e))| (i, e)).collect();
    let total = total_score(&item_scores).expect("scores validated");
    let severity = severity_from_total(total as u32).expect("total within 0-24");
    let discrepancy = ans.severity.is_some_and(|c| c != severity) || ans.total.is_some_and(|t| t != total as u32);
    Ok(PhqCotResponse {
        item_scores,
        evidence,
        summary_text,
        total,
        severity,
        claimed_severity: ans.severity,
        claimed_total: ans.total,
        discrepancy,
    })
}

/// Summary and severity extracted from an answer under any strategy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParsedAnswer {
    pub summary: String,
    pub severity: SeverityLevel,
    pub items: Option<PhqCotResponse>,
}

pub fn parse_answer(raw: &str, strategy: Strategy) -> Result<ParsedAnswer> {
    if strategy == Strategy::PhqCoT {
        let r = parse_response(raw)?;
        return Ok(ParsedAnswer { summary: r.summary_text.clone(), severity: r.severity, items: Some(r) });
    }
    let ans = scan(raw)?;
    Ok(ParsedAnswer {
        summary: ans.summary.ok_or(PhqCotError::MissingSummary)?,
        severity: ans.severity.ok_or(PhqCotError::MissingSeverity)?,
        items: None,
    })
}

/// Writes an item-by-item answer in the schema [`parse_response`] reads.
pub fn emit_phqcot(scores: &ItemScores, evidence: &BTreeMap<PhqItem, Vec<String>>, summary: &str, claimed: Option<SeverityLevel>) -> String {
    let mut out = String::new();
    for item in PhqItem::SYMPTOMS {
        let quoted: Vec<String> = evidence.get(&item).into_iter().flatten().map(|q| format!("\"{q}\"")).collect();
        out.push_str(&format!("ITEM {}: {} | EVIDENCE: {}\n", item.code(), scores.get(&item).copied().unwrap_or(0), quoted.join("; ")));
    }
    out.push_str(&format!("SUMMARY: {summary}\n"));
    out.push_str(&format!("TOTAL: {}\n", scores.values().map(|&s| s as u32).sum::<u32>()));
    if let Some(s) = claimed {
        out.push_str(&format!("SEVERITY: {}\n", s.value()));
    }
    out
}

pub fn emit_standard(summary: &str, severity: SeverityLevel) -> String {
    format!("SUMMARY: {summary}\nSEVERITY: {}\n", severity.value())
}

fn target_id(prompt: &str) -> Option<&str> {
    let start = prompt.rfind(TARGET_MARKER)? + TARGET_MARKER.len();
    prompt[start..].lines().next().map(str::trim)
}

fn is_phqcot_prompt(prompt: &str) -> bool {
    prompt.contains(PHQCOT_INSTRUCTION)
}

/// Item scores consistent with a severity when a sample has none: the band minimum,
/// spread over items in questionnaire order.
fn fallback_scores(severity: SeverityLevel) -> ItemScores {
    let mut left = SEVERITY_BANDS[severity.value() as usize].0;
    PhqItem::SYMPTOMS
        .iter()
        .map(|&i| {
            let s = left.min(3);
            left -= s;
            (i, s)
        })
        .collect()
}

#[derive(Clone, Debug)]
struct Gold {
    summary: String,
    scores: ItemScores,
    severity: SeverityLevel,
}

fn gold_table(samples: &[Sample]) -> HashMap<String, Gold> {
    samples
        .iter()
        .map(|s| {
            let scores = s.truth.item_scores.clone().unwrap_or_else(|| fallback_scores(s.truth.severity));
            (s.id.clone(), Gold { summary: s.truth.summary.rendered_text.clone(), scores, severity: s.truth.severity })
        })
        .collect()
}

/// Answers every prompt with the gold summary and gold-consistent scores.
pub struct OracleClient {
    gold: HashMap<String, Gold>,
}

impl OracleClient {
    pub fn new(samples: &[Sample]) -> Self {
        Self { gold: gold_table(samples) }
    }
}

impl LlmClient for OracleClient {
    fn name(&self) -> &str {
        "mock-oracle"
    }

    fn invoke(&self, prompt: &str) -> std::result::Result<String, LlmError> {
        let id = target_id(prompt).ok_or_else(|| LlmError::Rejected("prompt has no transcript id".into()))?;
        let g = self.gold.get(id).ok_or_else(|| LlmError::Rejected(format!("unknown transcript {id}")))?;
        Ok(if is_phqcot_prompt(prompt) {
            emit_phqcot(&g.scores, &BTreeMap::new(), &g.summary, None)
        } else {
            emit_standard(&g.summary, g.severity)
        })
    }
}

/// Scores every item 0 regardless of the prompt.
pub struct ConstantZeroClient;

pub const NO_SYMPTOM_SUMMARY: &str = "The participant primarily experiences no notable depressive symptoms.";

impl LlmClient for ConstantZeroClient {
    fn name(&self) -> &str {
        "mock-zero"
    }

    fn invoke(&self, _prompt: &str) -> std::result::Result<String, LlmError> {
        let zeros: ItemScores = PhqItem::SYMPTOMS.iter().map(|&i| (i, 0)).collect();
        Ok(emit_phqcot(&zeros, &BTreeMap::new(), NO_SYMPTOM_SUMMARY, Some(SeverityLevel::new(0).unwrap())))
    }
}

/// Returns the gold item lines only when the prompt asks for item-by-item scoring;
/// otherwise it answers with the gold summary and severity 0.
pub struct ScriptedSchemaClient {
    gold: HashMap<String, Gold>,
}

impl ScriptedSchemaClient {
    pub fn new(samples: &[Sample]) -> Self {
        Self { gold: gold_table(samples) }
    }
}

impl LlmClient for ScriptedSchemaClient {
    fn name(&self) -> &str {
        "mock-scripted"
    }

    fn invoke(&self, prompt: &str) -> std::result::Result<String, LlmError> {
        let id = target_id(prompt).ok_or_else(|| LlmError::Rejected("prompt has no transcript id".into()))?;
        let g = self.gold.get(id).ok_or_else(|| LlmError::Rejected(format!("unknown transcript {id}")))?;
        Ok(if is_phqcot_prompt(prompt) {
            emit_phqcot(&g.scores, &BTreeMap::new(), &g.summary, None)
        } else {
            emit_standard(&g.summary, SeverityLevel::new(0).unwrap())
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub gold_severity: SeverityLevel,
    pub predicted_severity: Option<SeverityLevel>,
    pub summary: Option<String>,
    pub scores: Option<GenerationScores>,
    pub discrepancy: bool,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptReport {
    pub client: String,
    pub strategy: Strategy,
    pub shots: usize,
    pub samples: usize,
    pub failures: usize,
    pub valid: bool,
    /// Mean generation scores over successfully parsed samples.
    pub generation: Option<GenerationScores>,
    pub binary: Option<ClassificationScores>,
    pub per_class: Option<ClassificationScores>,
    pub records: Vec<SampleRecord>,
}

pub struct RunOptions<'a> {
    pub cache: Option<&'a ResponseCache>,
    pub audit: Option<&'a AuditLog>,
    pub retry: RetryPolicy,
    /// Upper bound on concurrent requests; the client's own limit also applies.
    pub parallelism: usize,
}

impl Default for RunOptions<'_> {
    fn default() -> Self {
        Self { cache: None, audit: None, retry: RetryPolicy::default(), parallelism: 4 }
    }
}

fn query(client: &dyn LlmClient, prompt: &str, opts: &RunOptions) -> std::result::Result<String, LlmError> {
    if let Some(hit) = opts.cache.and_then(|c| c.get(client.name(), prompt)) {
        return Ok(hit);
    }
    let result = invoke_with_retry(client, prompt, opts.retry);
    if let Some(a) = opts.audit {
        a.record(client.name(), "phqcot", prompt, &result);
    }
    if let (Some(c), Ok(text)) = (opts.cache, &result) {
        // a cache write failure only costs a future re-request
        let _ = c.put(client.name(), prompt, text);
    }
    result
}

fn evaluate_one(sample: &Sample, client: &dyn LlmClient, spec: &PromptSpec, opts: &RunOptions, backend: &dyn TokenSimilarity) -> SampleRecord {
    let mut rec = SampleRecord {
        id: sample.id.clone(),
        gold_severity: sample.truth.severity,
        predicted_severity: None,
        summary: None,
        scores: None,
        discrepancy: false,
        error: None,
    };
    let outcome = (|| -> std::result::Result<(), String> {
        let prompt = build_prompt(sample, spec, client.context_budget()).map_err(|e| e.to_string())?;
        let raw = query(client, &prompt, opts).map_err(|e| e.to_string())?;
        let ans = parse_answer(&raw, spec.strategy).map_err(|e| e.to_string())?;
        let scores = GenerationScores::best_of(&sample.truth.references(), &ans.summary, backend).map_err(|e| e.to_string())?;
        rec.discrepancy = ans.items.as_ref().is_some_and(|r| r.discrepancy);
        rec.predicted_severity = Some(ans.severity);
        rec.summary = Some(ans.summary);
        rec.scores = Some(scores);
        Ok(())
    })();
    rec.error = outcome.err();
    rec
}

/// Prompts, parses and scores every sample. Failures are recorded per sample and never
/// abort the run; more than [`MAX_FAILURE_RATE`] failures marks the report invalid.
pub fn run_evaluation(
    samples: &[Sample],
    client: &dyn LlmClient,
    spec: &PromptSpec,
    opts: &RunOptions,
    backend: &(dyn TokenSimilarity + Sync),
) -> Result<PromptReport> {
    spec.validate()?;
    let width = opts.parallelism.min(client.max_concurrency()).max(1);
    let mut records = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(width) {
        let done: Vec<SampleRecord> = thread::scope(|s| {
            let handles: Vec<_> = chunk.iter().map(|smp| s.spawn(move || evaluate_one(smp, client, spec, opts, backend))).collect();
            handles.into_iter().map(|h| h.join().expect("evaluation thread panicked")).collect()
        });
        records.extend(done);
    }
    let ok: Vec<&SampleRecord> = records.iter().filter(|r| r.error.is_none()).collect();
    let failures = records.len() - ok.len();
    let (generation, binary, per_class) = if ok.is_empty() {
        (None, None, None)
    } else {
        let gen: Vec<GenerationScores> = ok.iter().map(|r| r.scores.unwrap()).collect();
        let pred: Vec<SeverityLevel> = ok.iter().map(|r| r.predicted_severity.unwrap()).collect();
        let gold: Vec<SeverityLevel> = ok.iter().map(|r| r.gold_severity).collect();
        (
            Some(GenerationScores::mean(&gen)),
            classification_scores(&pred, &gold, ClassificationMode::Binary).ok(),
            classification_scores(&pred, &gold, ClassificationMode::PerClass).ok(),
        )
    };
    Ok(PromptReport {
        client: client.name().to_string(),
        strategy: spec.strategy,
        shots: spec.shots,
        samples: records.len(),
        failures,
        valid: !records.is_empty() && (failures as f64) <= MAX_FAILURE_RATE * records.len() as f64,
        generation,
        binary,
        per_class,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::generate_synthetic;
    use crate::metrics::HashedEmbedder;

    fn scores(pairs: &[(PhqItem, u8)]) -> ItemScores {
        let mut m: ItemScores = PhqItem::SYMPTOMS.iter().map(|&i| (i, 0)).collect();
        m.extend(pairs.iter().copied());
        m
    }

    #[test]
    fn phqcot_prompt_lists_every_item_description() {
        let c = generate_synthetic(8, 7).unwrap();
        let s = &c.test[0];
        let p = build_prompt(s, &PromptSpec::zero_shot(Strategy::PhqCoT), 100_000).unwrap();
        for item in PhqItem::SYMPTOMS {
            assert!(p.contains(item.description()), "{item:?}");
        }
        assert!(p.contains(PHQCOT_INSTRUCTION));
        assert!(!p.contains("EXAMPLES:"));
        assert_eq!(p, build_prompt(s, &PromptSpec::zero_shot(Strategy::PhqCoT), 100_000).unwrap());
        let cot = build_prompt(s, &PromptSpec::zero_shot(Strategy::CoT), 100_000).unwrap();
        assert!(cot.contains(COT_DIRECTIVE) && !cot.contains(PHQCOT_INSTRUCTION));
    }

    #[test]
    fn few_shot_exemplars_follow_the_severity_rules() {
        let c = generate_synthetic(40, 2).unwrap();
        let two = PromptSpec::with_exemplars(Strategy::Standard, 2, &c.train, None).unwrap();
        assert_eq!(two.exemplars.iter().filter(|e| e.severity.binary()).count(), 1);
        let four = PromptSpec::with_exemplars(Strategy::Standard, 4, &c.train, None).unwrap();
        let sev: Vec<u8> = four.exemplars.iter().map(|e| e.severity.value()).collect();
        assert_eq!(sev, vec![0, 1, 2, 3]);
        assert!(build_prompt(&c.test[0], &four, 100_000).unwrap().contains("Example 4"));
        assert!(PromptSpec::with_exemplars(Strategy::Standard, 3, &c.train, None).is_err());
    }

    #[test]
    fn over_budget_digests_interviewer_turns_first() {
        let c = generate_synthetic(8, 7).unwrap();
        let s = &c.test[0];
        let full = digest_dialogue(&s.dialogue, 100_000).unwrap();
        assert!(full.contains("Interviewer:"));
        let participant_words: usize =
            s.dialogue.iter().filter(|u| u.speaker == Speaker::Participant).map(|u| 1 + word_count(&u.text)).sum();
        let d = digest_dialogue(&s.dialogue, participant_words).unwrap();
        assert!(!d.contains("Interviewer:"));
        assert!(matches!(digest_dialogue(&s.dialogue, participant_words - 1), Err(PhqCotError::OverBudget { .. })));
    }

    #[test]
    fn conversion_is_local() {
        let zero = ConstantZeroClient.invoke("x").unwrap();
        let r = parse_response(&zero).unwrap();
        assert_eq!((r.total, r.severity.value()), (0, 0));
        let s = scores(&[(PhqItem::SleepingDisorder, 3), (PhqItem::LackOfEnergy, 3), (PhqItem::FeelingDown, 2), (PhqItem::AppetiteChanges, 2)]);
        let r = parse_response(&emit_phqcot(&s, &BTreeMap::new(), "x.", None)).unwrap();
        assert_eq!((r.total, r.severity.value()), (10, 2));
        let s = scores(&[(PhqItem::SleepingDisorder, 3), (PhqItem::LackOfEnergy, 1)]);
        let r = parse_response(&emit_phqcot(&s, &BTreeMap::new(), "x.", Some(SeverityLevel::new(3).unwrap()))).unwrap();
        assert_eq!(r.severity.value(), 0);
        assert!(r.discrepancy);
    }

    #[test]
    fn parse_errors_name_the_problem() {
        let s = scores(&[]);
        let text = emit_phqcot(&s, &BTreeMap::new(), "x.", None);
        let without: String = text.lines().filter(|l| !l.starts_with("ITEM SD") && !l.starts_with("ITEM PC")).collect::<Vec<_>>().join("\n");
        assert_eq!(parse_response(&without), Err(PhqCotError::MissingItems(vec!["SD".into(), "PC".into()])));
        let bad = text.replace("ITEM LOI: 0", "ITEM LOI: two");
        assert!(matches!(parse_response(&bad), Err(PhqCotError::Malformed { line: 1, .. })));
        assert_eq!(parse_response("  "), Err(PhqCotError::Empty));
    }

    #[test]
    fn evidence_and_multiline_summary_survive() {
        let s = scores(&[(PhqItem::SleepingDisorder, 2)]);
        let ev: BTreeMap<_, _> = [(PhqItem::SleepingDisorder, vec!["i barely sleep".to_string(), "up at night".to_string()])].into();
        let text = emit_phqcot(&s, &ev, "first part", None).replace("SUMMARY: first part\n", "SUMMARY: first part\nsecond part\n");
        let r = parse_response(&text).unwrap();
        assert_eq!(r.evidence[&PhqItem::SleepingDisorder], ev[&PhqItem::SleepingDisorder]);
        assert_eq!(r.summary_text, "first part second part");
    }

    #[test]
    fn oracle_run_is_perfect_and_deterministic() {
        let c = generate_synthetic(24, 5).unwrap();
        let client = OracleClient::new(&c.test);
        let spec = PromptSpec::zero_shot(Strategy::PhqCoT);
        let h = HashedEmbedder::default();
        let a = run_evaluation(&c.test, &client, &spec, &RunOptions::default(), &h).unwrap();
        assert!(a.valid);
        assert_eq!(a.failures, 0);
        assert!((a.generation.unwrap().rouge1 - 1.0).abs() < 1e-12);
        assert!((a.binary.as_ref().unwrap().macro_f1 - 1.0).abs() < 1e-12);
        let b = run_evaluation(&c.test, &client, &spec, &RunOptions::default(), &h).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn failures_are_recorded_and_invalidate_the_run() {
        let c = generate_synthetic(24, 5).unwrap();
        // the oracle only knows the first sample
        let client = OracleClient::new(&c.test[..1]);
        let r = run_evaluation(&c.test, &client, &PromptSpec::zero_shot(Strategy::Standard), &RunOptions { retry: RetryPolicy::immediate(1), ..Default::default() }, &HashedEmbedder::default()).unwrap();
        assert_eq!(r.failures, c.test.len() - 1);
        assert!(!r.valid);
        assert!(r.records[1].error.as_ref().unwrap().contains("unknown transcript"));
    }
}
