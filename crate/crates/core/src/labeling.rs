//! Per-utterance PHQ-8 item labels by majority vote over several LLM clients,
//! plus a deterministic lexicon labeler for offline use.

use std::collections::HashMap;
use std::thread;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Sample, Speaker, Utterance};
use crate::llm::{invoke_with_retry, AuditLog, LlmClient, LlmError, RetryPolicy};
use crate::phq_items::PhqItem;

#[derive(Debug, Error)]
pub enum LabelingError {
    #[error("no labeling clients configured")]
    NoClients,
    #[error("sample {0} has an empty dialogue")]
    EmptyDialogue(String),
    #[error("every client failed: {}", format_failures(.0))]
    AllClientsFailed(Vec<(String, LlmError)>),
}

fn format_failures(f: &[(String, LlmError)]) -> String {
    f.iter().map(|(c, e)| format!("{c}: {e}")).collect::<Vec<_>>().join("; ")
}

/// One label per utterance.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemLabelSequence {
    pub labels: Vec<PhqItem>,
}

impl ItemLabelSequence {
    pub fn all_none(n: usize) -> Self {
        Self { labels: vec![PhqItem::None; n] }
    }
}

const LEXICON: [(PhqItem, &[&str]); 8] = [
    (PhqItem::LackOfInterest, &["interest", "enjoy", "pleasure", "hobbies", "motivat"]),
    (PhqItem::FeelingDown, &["depressed", "hopeless", "feel down", "feeling down", "sad", "miserable"]),
    (PhqItem::SleepingDisorder, &["sleep", "asleep", "insomnia", "nightmare"]),
    (PhqItem::LackOfEnergy, &["tired", "energy", "exhausted", "fatigue", "drained"]),
    (PhqItem::AppetiteChanges, &["appetite", "eating", "overeat", "hungry", "weight"]),
    (PhqItem::LowSelfEsteem, &["failure", "worthless", "let my family down", "bad about myself", "blame myself"]),
    (PhqItem::ConcentrationProblem, &["concentrat", "focus", "distracted", "attention"]),
    (PhqItem::PsychomotorChanges, &["restless", "fidget", "slowed down", "sluggish", "pacing"]),
];

/// First item (questionnaire order) whose lexicon matches a word start in the text.
pub fn heuristic_label(utterance: &Utterance) -> PhqItem {
    let normalized: String = utterance
        .text
        .to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() || c == '\'' || c == '-' { c } else { ' ' })
        .collect();
    let padded = format!(" {} ", normalized.split_whitespace().collect::<Vec<_>>().join(" "));
    LEXICON
        .iter()
        .find(|(_, keys)| keys.iter().any(|k| padded.contains(&format!(" {k}"))))
        .map(|(item, _)| *item)
        .unwrap_or(PhqItem::None)
}

/// The dialogue as sent to labelers, with the byte range of each utterance's text.
pub struct DialogueDocument {
    pub text: String,
    pub ranges: Vec<(usize, usize)>,
}

impl DialogueDocument {
    pub fn new(dialogue: &[Utterance]) -> Self {
        let mut text = String::new();
        let mut ranges = Vec::with_capacity(dialogue.len());
        for (i, u) in dialogue.iter().enumerate() {
            if i > 0 {
                text.push('\n');
            }
            text.push_str(u.speaker.tag());
            text.push_str(": ");
            let start = text.len();
            text.push_str(&u.text);
            ranges.push((start, text.len()));
        }
        Self { text, ranges }
    }
}

pub const LABELING_INSTRUCTION: &str = "Read the interview below. For each of the eight PHQ-8 items, quote every \
passage in which the participant describes that symptom. Answer with one line per passage in the form \
CODE: \"verbatim quote\", using the codes LOI, FD, SD, LOE, AC, LSE, CP, PC. Quote the dialogue exactly. \
If no passage applies, answer NONE.";

pub fn labeling_prompt(sample: &Sample) -> String {
    let mut p = String::from(LABELING_INSTRUCTION);
    p.push_str("\n\nITEMS:\n");
    for item in PhqItem::SYMPTOMS {
        p.push_str(&format!("{} ({}): {}\n", item.code(), item.name(), item.description()));
    }
    p.push_str("\nDIALOGUE:\n");
    p.push_str(&DialogueDocument::new(&sample.dialogue).text);
    p.push('\n');
    p
}

/// Extracts `CODE: "quote"` lines; anything else is ignored.
pub fn parse_spans(response: &str) -> Vec<(PhqItem, String)> {
    response
        .lines()
        .filter_map(|line| {
            let (code, rest) = line.trim().split_once(':')?;
            let item = PhqItem::from_code(code).ok().filter(|i| *i != PhqItem::None)?;
            let rest = rest.trim();
            let quote = rest.strip_prefix('"')?.strip_suffix('"')?;
            (!quote.is_empty()).then(|| (item, quote.to_string()))
        })
        .collect()
}

/// Maps quoted spans onto utterances: an utterance takes the item with the largest
/// character overlap; ties go to the earlier item.
pub fn project_spans(dialogue: &[Utterance], spans: &[(PhqItem, String)]) -> Vec<PhqItem> {
    let doc = DialogueDocument::new(dialogue);
    let mut overlap: Vec<HashMap<PhqItem, usize>> = vec![HashMap::new(); dialogue.len()];
    for (item, quote) in spans {
        let Some(start) = doc.text.find(quote.as_str()) else { continue };
        let end = start + quote.len();
        for (k, &(a, b)) in doc.ranges.iter().enumerate() {
            let lo = a.max(start);
            let hi = b.min(end);
            if lo < hi {
                *overlap[k].entry(*item).or_default() += hi - lo;
            }
        }
    }
    overlap
        .into_iter()
        .map(|m| {
            m.into_iter()
                .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
                .map(|(item, _)| item)
                .unwrap_or(PhqItem::None)
        })
        .collect()
}

/// Strict-majority vote per utterance; no majority gives NONE. Interviewer turns are NONE.
pub fn vote(dialogue: &[Utterance], ballots: &[Vec<PhqItem>]) -> ItemLabelSequence {
    let labels = dialogue
        .iter()
        .enumerate()
        .map(|(k, u)| {
            if u.speaker == Speaker::Interviewer || ballots.is_empty() {
                return PhqItem::None;
            }
            let mut counts: HashMap<PhqItem, usize> = HashMap::new();
            for b in ballots {
                *counts.entry(b[k]).or_default() += 1;
            }
            counts
                .into_iter()
                .find(|&(_, c)| 2 * c > ballots.len())
                .map(|(item, _)| item)
                .unwrap_or(PhqItem::None)
        })
        .collect();
    ItemLabelSequence { labels }
}

pub struct Labeler<'a> {
    pub clients: Vec<&'a dyn LlmClient>,
    pub retry: RetryPolicy,
    pub audit: Option<&'a AuditLog>,
}

impl<'a> Labeler<'a> {
    pub fn new(clients: Vec<&'a dyn LlmClient>) -> Self {
        Self { clients, retry: RetryPolicy::default(), audit: None }
    }

    /// Queries every client concurrently and votes on the projected labels.
    pub fn label(&self, sample: &Sample) -> Result<ItemLabelSequence, LabelingError> {
        if self.clients.is_empty() {
            return Err(LabelingError::NoClients);
        }
        if sample.dialogue.is_empty() {
            return Err(LabelingError::EmptyDialogue(sample.id.clone()));
        }
        let prompt = labeling_prompt(sample);
        let results: Vec<Result<String, LlmError>> = thread::scope(|scope| {
            let handles: Vec<_> = self
                .clients
                .iter()
                .map(|&c| {
                    let prompt = &prompt;
                    scope.spawn(move || invoke_with_retry(c, prompt, self.retry))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("client thread panicked")).collect()
        });
        let mut ballots = Vec::new();
        let mut failures = Vec::new();
        for (client, result) in self.clients.iter().zip(results) {
            if let Some(log) = self.audit {
                log.record(client.name(), &format!("label:{}", sample.id), &prompt, &result);
            }
            match result {
                Ok(text) => ballots.push(project_spans(&sample.dialogue, &parse_spans(&text))),
                Err(e) => failures.push((client.name().to_string(), e)),
            }
        }
        if ballots.is_empty() {
            return Err(LabelingError::AllClientsFailed(failures));
        }
        Ok(vote(&sample.dialogue, &ballots))
    }

    /// Labels every sample, running up to the smallest client `max_concurrency` samples at once.
    pub fn label_all(&self, samples: &[Sample]) -> Vec<Result<ItemLabelSequence, LabelingError>> {
        let width = self.clients.iter().map(|c| c.max_concurrency()).min().unwrap_or(1).max(1);
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(width) {
            let part: Vec<_> = thread::scope(|scope| {
                let hs: Vec<_> = chunk.iter().map(|s| scope.spawn(move || self.label(s))).collect();
                hs.into_iter().map(|h| h.join().expect("labeling thread panicked")).collect()
            });
            out.extend(part);
        }
        out
    }
}

pub fn label_utterances(sample: &Sample, clients: &[&dyn LlmClient]) -> Result<ItemLabelSequence, LabelingError> {
    Labeler::new(clients.to_vec()).label(sample)
}

/// Offline client that answers labeling prompts with the lexicon labeler.
pub struct LexiconClient {
    name: String,
}

impl LexiconClient {
    pub fn new(name: impl Into<String>) -> Self {
        Self { name: name.into() }
    }
}

impl LlmClient for LexiconClient {
    fn name(&self) -> &str {
        &self.name
    }

    fn invoke(&self, prompt: &str) -> Result<String, LlmError> {
        let dialogue = prompt
            .split_once("\nDIALOGUE:\n")
            .map(|(_, d)| d)
            .ok_or_else(|| LlmError::Rejected("prompt has no DIALOGUE section".into()))?;
        let mut lines = Vec::new();
        for line in dialogue.lines() {
            let Some(text) = line.strip_prefix("Participant: ") else { continue };
            let u = Utterance { index: 0, speaker: Speaker::Participant, text: text.into(), start_time: 0.0, stop_time: 0.0 };
            let item = heuristic_label(&u);
            if item != PhqItem::None {
                lines.push(format!("{}: \"{}\"", item.code(), text));
            }
        }
        Ok(if lines.is_empty() { "NONE".into() } else { lines.join("\n") })
    }

    fn max_concurrency(&self) -> usize {
        4
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::generate_synthetic;

    fn utt(text: &str) -> Utterance {
        Utterance { index: 0, speaker: Speaker::Participant, text: text.into(), start_time: 0.0, stop_time: 1.0 }
    }

    struct Fixed(&'static str, String);
    impl LlmClient for Fixed {
        fn name(&self) -> &str {
            self.0
        }
        fn invoke(&self, _: &str) -> Result<String, LlmError> {
            Ok(self.1.clone())
        }
    }

    struct Broken;
    impl LlmClient for Broken {
        fn name(&self) -> &str {
            "broken"
        }
        fn invoke(&self, _: &str) -> Result<String, LlmError> {
            Err(LlmError::Transport("down".into()))
        }
    }

    fn sample() -> Sample {
        generate_synthetic(4, 3).unwrap().train.remove(0)
    }

    fn participant_index(s: &Sample) -> usize {
        s.dialogue.iter().position(|u| u.speaker == Speaker::Participant).unwrap()
    }

    #[test]
    fn heuristic_examples() {
        assert_eq!(heuristic_label(&utt("i have trouble falling asleep")), PhqItem::SleepingDisorder);
        assert_eq!(heuristic_label(&utt("how are you today")), PhqItem::None);
        assert_eq!(heuristic_label(&utt("people say i seem slowed down")), PhqItem::PsychomotorChanges);
    }

    #[test]
    fn unanimous_clients_win() {
        let s = sample();
        let k = participant_index(&s);
        let quote = format!("SD: \"{}\"", s.dialogue[k].text);
        let a = Fixed("a", quote.clone());
        let b = Fixed("b", quote.clone());
        let c = Fixed("c", quote);
        let labels = label_utterances(&s, &[&a, &b, &c]).unwrap();
        assert_eq!(labels.labels[k], PhqItem::SleepingDisorder);
        assert_eq!(labels.labels.len(), s.dialogue.len());
    }

    #[test]
    fn three_way_split_is_none() {
        let s = sample();
        let k = participant_index(&s);
        let t = &s.dialogue[k].text;
        let a = Fixed("a", format!("SD: \"{t}\""));
        let b = Fixed("b", format!("LOE: \"{t}\""));
        let c = Fixed("c", format!("FD: \"{t}\""));
        assert_eq!(label_utterances(&s, &[&a, &b, &c]).unwrap().labels[k], PhqItem::None);
    }

    #[test]
    fn single_client_is_its_own_majority() {
        let s = sample();
        let k = participant_index(&s);
        let a = Fixed("a", format!("AC: \"{}\"", s.dialogue[k].text));
        assert_eq!(label_utterances(&s, &[&a]).unwrap().labels[k], PhqItem::AppetiteChanges);
    }

    #[test]
    fn interviewer_turns_are_never_labeled() {
        let s = sample();
        let a = Fixed("a", format!("SD: \"{}\"", s.dialogue[0].text));
        assert_eq!(s.dialogue[0].speaker, Speaker::Interviewer);
        assert_eq!(label_utterances(&s, &[&a]).unwrap().labels[0], PhqItem::None);
    }

    #[test]
    fn failures_are_reported_per_client() {
        let s = sample();
        let mut labeler = Labeler::new(vec![&Broken as &dyn LlmClient, &Broken]);
        labeler.retry = RetryPolicy::immediate(2);
        match labeler.label(&s) {
            Err(LabelingError::AllClientsFailed(f)) => assert_eq!(f.len(), 2),
            other => panic!("unexpected {other:?}"),
        }
        let ok = Fixed("ok", "NONE".into());
        let mut labeler = Labeler::new(vec![&Broken as &dyn LlmClient, &ok]);
        labeler.retry = RetryPolicy::immediate(1);
        assert!(labeler.label(&s).is_ok());
    }

    #[test]
    fn longest_overlap_resolves_multiple_items() {
        let s = sample();
        let k = participant_index(&s);
        let text = &s.dialogue[k].text;
        let short: String = text.chars().take(3).collect();
        let spans = vec![(PhqItem::FeelingDown, short), (PhqItem::LackOfEnergy, text.clone())];
        assert_eq!(project_spans(&s.dialogue, &spans)[k], PhqItem::LackOfEnergy);
    }

    #[test]
    fn lexicon_client_matches_generator_bookkeeping() {
        let corpus = generate_synthetic(12, 9).unwrap();
        let client = LexiconClient::new("lex");
        for s in corpus.samples() {
            let labels = label_utterances(s, &[&client]).unwrap();
            assert_eq!(&labels.labels, s.truth.utterance_items.as_ref().unwrap());
        }
    }
}
