//! The PHQ-8 symptom ontology, score arithmetic and the four-part structured
//! symptom summary (history, assessments, causes, action plan).

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PhqError {
    #[error("score {score} for {item} is outside 0..=3")]
    ScoreOutOfRange { item: PhqItem, score: u8 },
    #[error("NONE is not a scored PHQ-8 item")]
    NoneScored,
    #[error("total {0} is outside 0..=24")]
    TotalOutOfRange(u32),
    #[error("severity {0} is outside 0..=3")]
    SeverityOutOfRange(u8),
    #[error("unknown PHQ item code `{0}`")]
    UnknownCode(String),
    #[error("action plan {plan:?} is inconsistent with severity {severity}")]
    InconsistentActionPlan { plan: ActionPlan, severity: u8 },
    #[error("assessments must be in PHQ order without duplicates and must not contain NONE")]
    InvalidAssessments,
    #[error("cause text must be non-empty and free of sentence punctuation: `{0}`")]
    InvalidCause(String),
}

/// One of the eight PHQ-8 symptom items, or `None` for utterances that carry no symptom.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PhqItem {
    #[serde(rename = "LOI")]
    LackOfInterest,
    #[serde(rename = "FD")]
    FeelingDown,
    #[serde(rename = "SD")]
    SleepingDisorder,
    #[serde(rename = "LOE")]
    LackOfEnergy,
    #[serde(rename = "AC")]
    AppetiteChanges,
    #[serde(rename = "LSE")]
    LowSelfEsteem,
    #[serde(rename = "CP")]
    ConcentrationProblem,
    #[serde(rename = "PC")]
    PsychomotorChanges,
    #[serde(rename = "NONE")]
    None,
}

/// Number of classes seen by the item classifier: eight symptoms plus NONE.
pub const ITEM_CLASSES: usize = 9;

impl PhqItem {
    /// The eight scored items in questionnaire order.
    pub const SYMPTOMS: [PhqItem; 8] = [
        PhqItem::LackOfInterest,
        PhqItem::FeelingDown,
        PhqItem::SleepingDisorder,
        PhqItem::LackOfEnergy,
        PhqItem::AppetiteChanges,
        PhqItem::LowSelfEsteem,
        PhqItem::ConcentrationProblem,
        PhqItem::PsychomotorChanges,
    ];

    pub fn code(self) -> &'static str {
        match self {
            PhqItem::LackOfInterest => "LOI",
            PhqItem::FeelingDown => "FD",
            PhqItem::SleepingDisorder => "SD",
            PhqItem::LackOfEnergy => "LOE",
            PhqItem::AppetiteChanges => "AC",
            PhqItem::LowSelfEsteem => "LSE",
            PhqItem::ConcentrationProblem => "CP",
            PhqItem::PsychomotorChanges => "PC",
            PhqItem::None => "NONE",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PhqItem::LackOfInterest => "Lack of Interest",
            PhqItem::FeelingDown => "Feeling Down",
            PhqItem::SleepingDisorder => "Sleeping Disorder",
            PhqItem::LackOfEnergy => "Lack of Energy",
            PhqItem::AppetiteChanges => "Appetite Changes",
            PhqItem::LowSelfEsteem => "Low Self Esteem",
            PhqItem::ConcentrationProblem => "Concentration Problem",
            PhqItem::PsychomotorChanges => "Psychomotor Changes",
            PhqItem::None => "None",
        }
    }

    /// Questionnaire wording of the item.
    pub fn description(self) -> &'static str {
        match self {
            PhqItem::LackOfInterest => "Little interest or pleasure in doing things.",
            PhqItem::FeelingDown => "Feeling down, depressed, or hopeless.",
            PhqItem::SleepingDisorder => {
                "Trouble falling or staying asleep, or sleeping too much."
            }
            PhqItem::LackOfEnergy => "Feeling tired or having little energy.",
            PhqItem::AppetiteChanges => "Poor appetite or overeating.",
            PhqItem::LowSelfEsteem => {
                "Feeling bad about yourself \u{2014} or that you are a failure or have let \
                 yourself or your family down."
            }
            PhqItem::ConcentrationProblem => {
                "Trouble concentrating on things, such as reading the newspaper or watching \
                 television."
            }
            PhqItem::PsychomotorChanges => {
                "Moving or speaking so slowly that other people could have noticed? Or the \
                 opposite \u{2014} being so fidgety or restless that you have been moving around \
                 a lot more than usual."
            }
            PhqItem::None => "No PHQ-8 symptom.",
        }
    }

    pub fn from_code(code: &str) -> Result<Self, PhqError> {
        match code.trim().to_ascii_uppercase().as_str() {
            "LOI" => Ok(PhqItem::LackOfInterest),
            "FD" => Ok(PhqItem::FeelingDown),
            "SD" => Ok(PhqItem::SleepingDisorder),
            "LOE" => Ok(PhqItem::LackOfEnergy),
            "AC" => Ok(PhqItem::AppetiteChanges),
            "LSE" => Ok(PhqItem::LowSelfEsteem),
            "CP" => Ok(PhqItem::ConcentrationProblem),
            "PC" => Ok(PhqItem::PsychomotorChanges),
            "NONE" => Ok(PhqItem::None),
            _ => Err(PhqError::UnknownCode(code.to_string())),
        }
    }

    /// Classifier index: symptoms 0..8 in questionnaire order, NONE is 8.
    pub fn class_index(self) -> usize {
        match self {
            PhqItem::None => 8,
            item => PhqItem::SYMPTOMS.iter().position(|s| *s == item).unwrap(),
        }
    }

    pub fn from_class_index(index: usize) -> Option<Self> {
        match index {
            0..=7 => Some(PhqItem::SYMPTOMS[index]),
            8 => Some(PhqItem::None),
            _ => None,
        }
    }
}

impl fmt::Display for PhqItem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

/// A validated 0..=3 item score.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemScore {
    pub item: PhqItem,
    pub score: u8,
}

impl ItemScore {
    pub fn new(item: PhqItem, score: u8) -> Result<Self, PhqError> {
        if item == PhqItem::None {
            return Err(PhqError::NoneScored);
        }
        if score > 3 {
            return Err(PhqError::ScoreOutOfRange { item, score });
        }
        Ok(Self { item, score })
    }
}

pub type ItemScores = BTreeMap<PhqItem, u8>;

/// Sum of the item scores; absent items count as zero.
pub fn total_score(scores: &ItemScores) -> Result<u8, PhqError> {
    let mut total = 0u8;
    for (&item, &score) in scores {
        total += ItemScore::new(item, score)?.score;
    }
    Ok(total)
}

/// Depression severity on the 0..=3 scale.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct SeverityLevel(u8);

impl SeverityLevel {
    pub const COUNT: usize = 4;

    pub fn new(value: u8) -> Result<Self, PhqError> {
        if value > 3 {
            return Err(PhqError::SeverityOutOfRange(value));
        }
        Ok(Self(value))
    }

    pub fn value(self) -> u8 {
        self.0
    }

    /// Depressed vs. control.
    pub fn binary(self) -> bool {
        self.0 >= 2
    }

    pub fn action_plan(self) -> ActionPlan {
        match self.0 {
            0 => ActionPlan::None,
            1 => ActionPlan::ConditionalReferral,
            _ => ActionPlan::Referral,
        }
    }

    pub fn all() -> [SeverityLevel; 4] {
        [Self(0), Self(1), Self(2), Self(3)]
    }
}

impl TryFrom<u8> for SeverityLevel {
    type Error = PhqError;
    fn try_from(v: u8) -> Result<Self, PhqError> {
        Self::new(v)
    }
}

impl From<SeverityLevel> for u8 {
    fn from(s: SeverityLevel) -> u8 {
        s.0
    }
}

impl fmt::Display for SeverityLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Inclusive upper bound of the total-score band for each severity.
pub const SEVERITY_BANDS: [(u8, u8); 4] = [(0, 4), (5, 9), (10, 14), (15, 24)];

/// Maps a PHQ-8 total onto severity with the 0-4 / 5-9 / 10-14 / 15-24 cut-points.
pub fn severity_from_total(total: u32) -> Result<SeverityLevel, PhqError> {
    SEVERITY_BANDS
        .iter()
        .position(|&(lo, hi)| (lo as u32..=hi as u32).contains(&total))
        .map(|i| SeverityLevel(i as u8))
        .ok_or(PhqError::TotalOutOfRange(total))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Degree {
    Occasional,
    Mild,
    Moderate,
    Significant,
    Severe,
}

impl Degree {
    pub const ALL: [Degree; 5] = [
        Degree::Occasional,
        Degree::Mild,
        Degree::Moderate,
        Degree::Significant,
        Degree::Severe,
    ];

    pub fn adverb(self) -> &'static str {
        match self {
            Degree::Occasional => "occasional",
            Degree::Mild => "mild",
            Degree::Moderate => "moderate",
            Degree::Significant => "significant",
            Degree::Severe => "severe",
        }
    }

    fn from_adverb(word: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|d| d.adverb() == word)
    }
}

/// Cause domains used to group underlying causes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CauseCategory {
    LifeEventsAndEnvironmentalAdaptation,
    EconomicAndCareerStress,
    HealthIssues,
    PersonalPsychologicalAndEmotionalRegulation,
    Others,
    Unspecified,
}

impl CauseCategory {
    pub fn label(self) -> &'static str {
        match self {
            CauseCategory::LifeEventsAndEnvironmentalAdaptation => {
                "Life Events and Environmental Adaptation"
            }
            CauseCategory::EconomicAndCareerStress => "Economic and Career Stress",
            CauseCategory::HealthIssues => "Health Issues",
            CauseCategory::PersonalPsychologicalAndEmotionalRegulation => {
                "Personal Psychological and Emotional Regulation"
            }
            CauseCategory::Others => "Others",
            CauseCategory::Unspecified => "Unspecified",
        }
    }
}

// Checked in order; the first category with a keyword hit wins.
const CAUSE_LEXICON: &[(CauseCategory, &[&str])] = &[
    (
        CauseCategory::EconomicAndCareerStress,
        &["financ", "job", "unemploy", "work", "career", "money", "debt", "bills"],
    ),
    (
        CauseCategory::HealthIssues,
        &["ptsd", "health", "illness", "injury", "pain", "treatment", "medical", "surgery"],
    ),
    (
        CauseCategory::LifeEventsAndEnvironmentalAdaptation,
        &[
            "relocat", "moving", "graduat", "breakup", "divorce", "death", "homeless", "living",
            "family", "relationship", "bereave", "loss of",
        ],
    ),
    (
        CauseCategory::PersonalPsychologicalAndEmotionalRegulation,
        &["self-critic", "stress", "anxiety", "lonel", "emotion", "anger", "perfection"],
    ),
    (CauseCategory::Others, &["legal", "military", "deployment", "school", "caregiv"]),
];

/// Lexicon lookup of a cause's domain; unmatched text is `Unspecified`.
pub fn classify_cause(text: &str) -> CauseCategory {
    let lower = text.to_lowercase();
    CAUSE_LEXICON
        .iter()
        .find(|(_, keys)| keys.iter().any(|k| lower.contains(k)))
        .map(|(c, _)| *c)
        .unwrap_or(CauseCategory::Unspecified)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cause {
    pub text: String,
    pub category: CauseCategory,
}

impl Cause {
    pub fn new(text: impl Into<String>) -> Self {
        let text = text.into();
        let category = classify_cause(&text);
        Self { text, category }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ActionPlan {
    None,
    ConditionalReferral,
    Referral,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assessment {
    pub item: PhqItem,
    pub degree: Degree,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuredSummary {
    pub has_history: bool,
    pub assessments: Vec<Assessment>,
    pub causes: Vec<Cause>,
    pub action_plan: ActionPlan,
    pub rendered_text: String,
}

impl StructuredSummary {
    /// Equality on the structured fields, ignoring `rendered_text`.
    pub fn same_structure(&self, other: &Self) -> bool {
        self.has_history == other.has_history
            && self.assessments == other.assessments
            && self.causes == other.causes
            && self.action_plan == other.action_plan
    }
}

const HISTORY: &str = "The participant reported a history of depression";
const SYMPTOM_LEADS: [&str; 2] = ["The participant primarily experiences ", "They currently experience "];
const NO_SYMPTOMS: &str = "no notable depressive symptoms";
const CAUSE_LEAD: &str = "These symptoms may be related to ";
const REFERRAL: &str =
    "It is advised that the participant seek further evaluation and treatment from a psychiatrist or psychologist";
const CONDITIONAL_REFERRAL: &str = "If symptoms persist or worsen, it is recommended that the participant seek further evaluation and treatment from a psychiatrist or psychologist";

/// Surface phrases per item; the first entry is what rendering emits.
fn item_phrases(item: PhqItem) -> &'static [&'static str] {
    match item {
        PhqItem::LackOfInterest => &[
            "lack of interest or pleasure",
            "lack of interest or pleasure in activities",
            "reduction of interest or pleasure",
            "decrease in interest or pleasure",
            "decrease in interest or pleasure in activities",
            "loss of interest or pleasure",
        ],
        PhqItem::FeelingDown => &[
            "feelings of depression or hopelessness",
            "feelings of depression and hopelessness",
            "feelings of hopelessness",
            "low mood",
        ],
        PhqItem::SleepingDisorder => &[
            "sleep issues",
            "sleep disturbances",
            "sleep problems",
            "sleeping difficulties",
        ],
        PhqItem::LackOfEnergy => &["low energy or fatigue", "fatigue", "low energy", "tiredness"],
        PhqItem::AppetiteChanges => &["appetite issues", "appetite disturbances", "appetite changes"],
        PhqItem::LowSelfEsteem => &["self-worth issues", "feelings of failure", "low self-esteem"],
        PhqItem::ConcentrationProblem => &[
            "concentration difficulties",
            "concentration problems",
            "difficulty concentrating",
        ],
        PhqItem::PsychomotorChanges => &[
            "psychomotor agitation",
            "psychomotor agitation or retardation",
            "psychomotor retardation",
            "restlessness",
        ],
        PhqItem::None => &[],
    }
}

fn assessment_phrase(a: &Assessment) -> String {
    let noun = item_phrases(a.item)[0];
    let adverb = a.degree.adverb();
    if a.item == PhqItem::LackOfInterest {
        let article = if adverb.starts_with(['a', 'e', 'i', 'o', 'u']) { "an" } else { "a" };
        format!("{article} {adverb} {noun}")
    } else {
        format!("{adverb} {noun}")
    }
}

fn join_list(parts: &[String]) -> String {
    match parts.len() {
        0 => String::new(),
        1 => parts[0].clone(),
        2 => format!("{} and {}", parts[0], parts[1]),
        n => format!("{}, and {}", parts[..n - 1].join(", "), parts[n - 1]),
    }
}

fn check_summary(summary: &StructuredSummary, severity: SeverityLevel) -> Result<(), PhqError> {
    if summary.action_plan != severity.action_plan() {
        return Err(PhqError::InconsistentActionPlan {
            plan: summary.action_plan,
            severity: severity.value(),
        });
    }
    let ordered = summary
        .assessments
        .windows(2)
        .all(|w| w[0].item.class_index() < w[1].item.class_index());
    if !ordered || summary.assessments.iter().any(|a| a.item == PhqItem::None) {
        return Err(PhqError::InvalidAssessments);
    }
    for cause in &summary.causes {
        let t = cause.text.trim();
        if t.is_empty() || t != cause.text || t.contains(['.', ',']) || t.contains(" and ") {
            return Err(PhqError::InvalidCause(cause.text.clone()));
        }
    }
    Ok(())
}

/// Renders the templated summary text.
pub fn render_summary(summary: &StructuredSummary, severity: SeverityLevel) -> Result<String, PhqError> {
    check_summary(summary, severity)?;
    let mut sentences = Vec::with_capacity(4);
    if summary.has_history {
        sentences.push(format!("{HISTORY}."));
    }
    let symptoms = if summary.assessments.is_empty() {
        NO_SYMPTOMS.to_string()
    } else {
        let phrases: Vec<String> = summary.assessments.iter().map(assessment_phrase).collect();
        join_list(&phrases)
    };
    sentences.push(format!("{}{symptoms}.", SYMPTOM_LEADS[0]));
    if !summary.causes.is_empty() {
        let causes: Vec<String> = summary.causes.iter().map(|c| c.text.clone()).collect();
        sentences.push(format!("{CAUSE_LEAD}{}.", join_list(&causes)));
    }
    match summary.action_plan {
        ActionPlan::Referral => sentences.push(format!("{REFERRAL}.")),
        ActionPlan::ConditionalReferral => sentences.push(format!("{CONDITIONAL_REFERRAL}.")),
        ActionPlan::None => {}
    }
    Ok(sentences.join(" "))
}

/// Builds a summary record with `rendered_text` filled from the template.
pub fn build_summary(
    has_history: bool,
    assessments: Vec<Assessment>,
    causes: Vec<Cause>,
    severity: SeverityLevel,
) -> Result<StructuredSummary, PhqError> {
    let mut summary = StructuredSummary {
        has_history,
        assessments,
        causes,
        action_plan: severity.action_plan(),
        rendered_text: String::new(),
    };
    summary.rendered_text = render_summary(&summary, severity)?;
    Ok(summary)
}

#[derive(Debug, Error, PartialEq)]
#[error("summary sentence {sentence}: {reason}")]
pub struct SummaryParseError {
    pub sentence: usize,
    pub reason: String,
}

fn split_sentences(text: &str) -> Vec<&str> {
    let text = text.trim();
    let mut out = Vec::new();
    let mut start = 0;
    let bytes = text.as_bytes();
    for (i, &b) in bytes.iter().enumerate() {
        if b == b'.' && (i + 1 == bytes.len() || bytes[i + 1] == b' ') {
            out.push(text[start..i].trim());
            start = i + 1;
        }
    }
    if start < text.len() && !text[start..].trim().is_empty() {
        // trailing sentence without a period
        out.push(text[start..].trim());
    }
    out
}

/// Parses one "degree + item" phrase at the head of `rest`, returning it and the remainder.
fn parse_assessment_head(rest: &str) -> Option<Vec<(Assessment, &str)>> {
    let body = rest
        .strip_prefix("a ")
        .or_else(|| rest.strip_prefix("an "))
        .unwrap_or(rest);
    let (adverb, tail) = body.split_once(' ')?;
    let degree = Degree::from_adverb(adverb)?;
    let mut candidates = Vec::new();
    for item in PhqItem::SYMPTOMS {
        for phrase in item_phrases(item) {
            if let Some(after) = tail.strip_prefix(phrase) {
                candidates.push((phrase.len(), Assessment { item, degree }, after));
            }
        }
    }
    // longest surface phrase first
    candidates.sort_by_key(|c| std::cmp::Reverse(c.0));
    Some(candidates.into_iter().map(|(_, a, r)| (a, r)).collect())
}

fn parse_assessment_list(text: &str) -> Option<Vec<Assessment>> {
    fn go(rest: &str, acc: &mut Vec<Assessment>) -> bool {
        let Some(options) = parse_assessment_head(rest) else {
            return false;
        };
        for (assessment, after) in options {
            acc.push(assessment);
            if after.is_empty() {
                return true;
            }
            for sep in [", and ", ", ", " and "] {
                if let Some(next) = after.strip_prefix(sep) {
                    if go(next, acc) {
                        return true;
                    }
                }
            }
            acc.pop();
        }
        false
    }
    let mut acc = Vec::new();
    go(text, &mut acc).then_some(acc)
}

fn split_causes(text: &str) -> Vec<String> {
    let parts: Vec<&str> = if text.contains(", ") {
        text.split(", ").collect()
    } else if let Some((a, b)) = text.split_once(" and ") {
        vec![a, b]
    } else {
        vec![text]
    };
    let last = parts.len() - 1;
    parts
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let p = p.trim();
            let p = if i == last && last > 0 { p.strip_prefix("and ").unwrap_or(p) } else { p };
            p.to_string()
        })
        .collect()
}

/// Inverse of [`render_summary`]. Extra clauses after the history statement and an
/// overview before ", including" are accepted and discarded.
pub fn parse_summary(text: &str) -> Result<StructuredSummary, SummaryParseError> {
    let sentences = split_sentences(text);
    let err = |sentence: usize, reason: &str| SummaryParseError { sentence, reason: reason.into() };
    if sentences.is_empty() {
        return Err(err(0, "empty summary"));
    }
    let mut idx = 0;
    let has_history = sentences[0].starts_with(HISTORY);
    if has_history {
        idx += 1;
    }
    let symptom_sentence = sentences
        .get(idx)
        .ok_or_else(|| err(idx, "missing symptom assessment"))?;
    let list = SYMPTOM_LEADS
        .iter()
        .find_map(|lead| symptom_sentence.strip_prefix(lead))
        .ok_or_else(|| err(idx, "expected a symptom assessment sentence"))?;
    let list = match list.split_once(", including ") {
        Some((_, items)) => items,
        None => list,
    };
    let assessments = if list == NO_SYMPTOMS {
        Vec::new()
    } else {
        parse_assessment_list(list).ok_or_else(|| err(idx, "unrecognised symptom phrase"))?
    };
    idx += 1;

    let mut causes = Vec::new();
    if let Some(rest) = sentences.get(idx).and_then(|s| s.strip_prefix(CAUSE_LEAD)) {
        causes = split_causes(rest).into_iter().map(Cause::new).collect();
        if causes.iter().any(|c| c.text.is_empty()) {
            return Err(err(idx, "empty cause"));
        }
        idx += 1;
    }

    let mut action_plan = ActionPlan::None;
    if let Some(&s) = sentences.get(idx) {
        action_plan = if s == REFERRAL {
            ActionPlan::Referral
        } else if s == CONDITIONAL_REFERRAL {
            ActionPlan::ConditionalReferral
        } else {
            return Err(err(idx, "expected an action plan sentence"));
        };
        idx += 1;
    }
    if idx != sentences.len() {
        return Err(err(idx, "unexpected trailing sentence"));
    }
    Ok(StructuredSummary {
        has_history,
        assessments,
        causes,
        action_plan,
        rendered_text: text.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const TRAIN_326: &str = "The participant primarily experiences occasional sleep issues and occasional low energy or fatigue.";

    #[test]
    fn total_score_examples() {
        let zeros: ItemScores = PhqItem::SYMPTOMS.iter().map(|&i| (i, 0)).collect();
        let threes: ItemScores = PhqItem::SYMPTOMS.iter().map(|&i| (i, 3)).collect();
        assert_eq!(total_score(&zeros), Ok(0));
        assert_eq!(total_score(&threes), Ok(24));
        let partial = ItemScores::from([(PhqItem::SleepingDisorder, 2), (PhqItem::LackOfEnergy, 1)]);
        assert_eq!(total_score(&partial), Ok(3));
        let bad = ItemScores::from([(PhqItem::SleepingDisorder, 4)]);
        assert!(matches!(total_score(&bad), Err(PhqError::ScoreOutOfRange { .. })));
        let none = ItemScores::from([(PhqItem::None, 1)]);
        assert_eq!(total_score(&none), Err(PhqError::NoneScored));
    }

    #[test]
    fn severity_examples() {
        let s0 = severity_from_total(0).unwrap();
        assert_eq!((s0.value(), s0.binary()), (0, false));
        let s10 = severity_from_total(10).unwrap();
        assert_eq!((s10.value(), s10.binary()), (2, true));
        let s24 = severity_from_total(24).unwrap();
        assert_eq!((s24.value(), s24.binary()), (3, true));
        assert_eq!(severity_from_total(25), Err(PhqError::TotalOutOfRange(25)));
    }

    #[test]
    fn class_indices_round_trip() {
        for i in 0..ITEM_CLASSES {
            assert_eq!(PhqItem::from_class_index(i).unwrap().class_index(), i);
        }
        assert_eq!(PhqItem::from_code("sd"), Ok(PhqItem::SleepingDisorder));
    }

    #[test]
    fn renders_occasional_symptoms_without_causes() {
        let summary = build_summary(
            false,
            vec![
                Assessment { item: PhqItem::SleepingDisorder, degree: Degree::Occasional },
                Assessment { item: PhqItem::LackOfEnergy, degree: Degree::Occasional },
            ],
            vec![],
            SeverityLevel::new(0).unwrap(),
        )
        .unwrap();
        assert_eq!(summary.rendered_text, TRAIN_326);
    }

    #[test]
    fn action_plan_wording_follows_severity() {
        for severity in SeverityLevel::all() {
            let s = build_summary(
                false,
                vec![Assessment { item: PhqItem::FeelingDown, degree: Degree::Mild }],
                vec![Cause::new("work stress")],
                severity,
            )
            .unwrap();
            let text = &s.rendered_text;
            assert_eq!(text.contains("psychiatrist or psychologist."), severity.value() >= 1);
            assert_eq!(text.contains("If symptoms persist or worsen"), severity.value() == 1);
        }
    }

    #[test]
    fn inconsistent_action_plan_is_rejected() {
        let mut s = build_summary(false, vec![], vec![], SeverityLevel::new(0).unwrap()).unwrap();
        s.action_plan = ActionPlan::Referral;
        assert!(matches!(
            render_summary(&s, SeverityLevel::new(1).unwrap()),
            Err(PhqError::InconsistentActionPlan { .. })
        ));
    }

    #[test]
    fn out_of_grammar_text_fails_with_sentence_index() {
        let e = parse_summary("The participant enjoys hiking.").unwrap_err();
        assert_eq!(e.sentence, 0);
        let e = parse_summary(&format!("{TRAIN_326} Something else.")).unwrap_err();
        assert_eq!(e.sentence, 1);
    }

    #[test]
    fn history_suffix_is_opaque() {
        let text = "The participant reported a history of depression and is currently undergoing treatment. The participant primarily experiences mild fatigue.";
        let s = parse_summary(text).unwrap();
        assert!(s.has_history);
        assert_eq!(s.assessments, vec![Assessment { item: PhqItem::LackOfEnergy, degree: Degree::Mild }]);
    }

    #[test]
    fn cause_categories() {
        assert_eq!(classify_cause("current financial problems"), CauseCategory::EconomicAndCareerStress);
        assert_eq!(classify_cause("ongoing struggles with PTSD"), CauseCategory::HealthIssues);
        assert_eq!(
            classify_cause("the various challenges they will face after graduation"),
            CauseCategory::LifeEventsAndEnvironmentalAdaptation
        );
        assert_eq!(classify_cause("something vague"), CauseCategory::Unspecified);
    }
}
