//! Generation metrics (ROUGE, BLEU, embedding similarity), classification scores and
//! Fleiss' kappa over IoU-clustered annotations.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::nn::Mat;
use crate::phq_items::SeverityLevel;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("embedding backend failed: {0}")]
    Backend(String),
}

type Result<T> = std::result::Result<T, MetricError>;

/// Lowercased whitespace tokens.
pub fn metric_tokens(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) }
}

/// Clipped n-gram match count together with both n-gram totals.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NgramOverlap {
    pub matched: usize,
    pub hypothesis_total: usize,
    pub reference_total: usize,
}

fn ngram_counts<S: AsRef<str> + Eq + std::hash::Hash>(tokens: &[S], n: usize) -> HashMap<&[S], usize> {
    let mut counts = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

pub fn ngram_overlap(reference: &[String], hypothesis: &[String], n: usize) -> NgramOverlap {
    let r = ngram_counts(reference, n);
    let h = ngram_counts(hypothesis, n);
    let matched = h.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum();
    NgramOverlap {
        matched,
        hypothesis_total: h.values().sum(),
        reference_total: r.values().sum(),
    }
}

/// Shared degenerate-case rule: both empty scores 1, one empty scores 0.
fn degenerate(reference: &[String], hypothesis: &[String]) -> Option<f64> {
    match (reference.is_empty(), hypothesis.is_empty()) {
        (true, true) => Some(1.0),
        (true, false) | (false, true) => Some(0.0),
        _ => None,
    }
}

/// ROUGE-N F1.
pub fn rouge_n(reference: &str, hypothesis: &str, n: usize) -> f64 {
    let (r, h) = (metric_tokens(reference), metric_tokens(hypothesis));
    if let Some(v) = degenerate(&r, &h) {
        return v;
    }
    let o = ngram_overlap(&r, &h, n);
    if o.hypothesis_total == 0 && o.reference_total == 0 {
        // both shorter than n
        return if r == h { 1.0 } else { 0.0 };
    }
    if o.hypothesis_total == 0 || o.reference_total == 0 {
        return 0.0;
    }
    f1(o.matched as f64 / o.hypothesis_total as f64, o.matched as f64 / o.reference_total as f64)
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F1 from the token longest common subsequence.
pub fn rouge_l(reference: &str, hypothesis: &str) -> f64 {
    let (r, h) = (metric_tokens(reference), metric_tokens(hypothesis));
    if let Some(v) = degenerate(&r, &h) {
        return v;
    }
    let l = lcs_len(&r, &h) as f64;
    f1(l / h.len() as f64, l / r.len() as f64)
}

/// Sentence BLEU-4: unsmoothed unigram precision, add-one smoothing for n ≥ 2, and the
/// brevity penalty `exp(1 - r/c)` when the hypothesis is shorter than the reference.
pub fn bleu(reference: &str, hypothesis: &str) -> f64 {
    let (r, h) = (metric_tokens(reference), metric_tokens(hypothesis));
    if let Some(v) = degenerate(&r, &h) {
        return v;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let o = ngram_overlap(&r, &h, n);
        let p = if n == 1 {
            if o.matched == 0 {
                return 0.0;
            }
            o.matched as f64 / o.hypothesis_total as f64
        } else {
            (o.matched as f64 + 1.0) / (o.hypothesis_total as f64 + 1.0)
        };
        log_sum += p.ln();
    }
    let (c, rl) = (h.len() as f64, r.len() as f64);
    let bp = if c > rl { 1.0 } else { (1.0 - rl / c).exp() };
    bp * (log_sum / 4.0).exp()
}

/// Token-to-token similarity backend for [`embed_score`].
pub trait TokenSimilarity {
    /// `reference.len() × hypothesis.len()` similarities in `[0, 1]`.
    fn similarity_matrix(&self, reference: &[String], hypothesis: &[String]) -> Result<Mat>;
}

/// Deterministic unit vectors seeded from a SHA-256 of the token.
#[derive(Clone, Debug)]
pub struct HashedEmbedder {
    pub dim: usize,
}

impl Default for HashedEmbedder {
    fn default() -> Self {
        Self { dim: 256 }
    }
}

impl HashedEmbedder {
    pub fn embed(&self, token: &str) -> Vec<f64> {
        let digest = Sha256::digest(token.as_bytes());
        let seed = u64::from_le_bytes(digest[..8].try_into().unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / norm).collect()
    }
}

impl TokenSimilarity for HashedEmbedder {
    fn similarity_matrix(&self, reference: &[String], hypothesis: &[String]) -> Result<Mat> {
        if self.dim == 0 {
            return Err(MetricError::Backend("embedding dimension is zero".into()));
        }
        let mut cache: HashMap<&str, Vec<f64>> = HashMap::new();
        for t in reference.iter().chain(hypothesis) {
            cache.entry(t.as_str()).or_insert_with(|| self.embed(t));
        }
        Ok(Array2::from_shape_fn((reference.len(), hypothesis.len()), |(i, j)| {
            let (a, b) = (&cache[reference[i].as_str()], &cache[hypothesis[j].as_str()]);
            a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>().clamp(0.0, 1.0)
        }))
    }
}

/// Similarity 1 for identical tokens, else 0.
#[derive(Clone, Copy, Debug, Default)]
pub struct ExactMatch;

impl TokenSimilarity for ExactMatch {
    fn similarity_matrix(&self, reference: &[String], hypothesis: &[String]) -> Result<Mat> {
        Ok(Array2::from_shape_fn((reference.len(), hypothesis.len()), |(i, j)| f64::from(u8::from(reference[i] == hypothesis[j]))))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmbedScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Greedy max-similarity matching: precision averages over hypothesis tokens, recall over
/// reference tokens.
pub fn embed_score(reference: &str, hypothesis: &str, backend: &dyn TokenSimilarity) -> Result<EmbedScore> {
    let (r, h) = (metric_tokens(reference), metric_tokens(hypothesis));
    if let Some(v) = degenerate(&r, &h) {
        return Ok(EmbedScore { precision: v, recall: v, f1: v });
    }
    let sim = backend.similarity_matrix(&r, &h)?;
    if sim.dim() != (r.len(), h.len()) {
        return Err(MetricError::Backend(format!("similarity matrix has shape {:?}", sim.dim())));
    }
    if sim.iter().any(|x| !x.is_finite()) {
        return Err(MetricError::Backend("non-finite similarity".into()));
    }
    let recall = sim.rows().into_iter().map(|row| row.iter().cloned().fold(0.0, f64::max)).sum::<f64>() / r.len() as f64;
    let precision = sim.columns().into_iter().map(|col| col.iter().cloned().fold(0.0, f64::max)).sum::<f64>() / h.len() as f64;
    Ok(EmbedScore { precision, recall, f1: f1(precision, recall) })
}

/// Generation metrics in `[0, 1]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GenerationScores {
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
    pub bleu: f64,
    pub embed_score: f64,
}

impl GenerationScores {
    pub fn score(reference: &str, hypothesis: &str, backend: &dyn TokenSimilarity) -> Result<Self> {
        Ok(Self {
            rouge1: rouge_n(reference, hypothesis, 1),
            rouge2: rouge_n(reference, hypothesis, 2),
            rouge_l: rouge_l(reference, hypothesis),
            bleu: bleu(reference, hypothesis),
            embed_score: embed_score(reference, hypothesis, backend)?.f1,
        })
    }

    /// Per-metric maximum over the available references.
    pub fn best_of<S: AsRef<str>>(references: &[S], hypothesis: &str, backend: &dyn TokenSimilarity) -> Result<Self> {
        if references.is_empty() {
            return Err(MetricError::InvalidArgument("no reference summaries".into()));
        }
        let mut best = Self { rouge1: f64::MIN, rouge2: f64::MIN, rouge_l: f64::MIN, bleu: f64::MIN, embed_score: f64::MIN };
        for r in references {
            let s = Self::score(r.as_ref(), hypothesis, backend)?;
            best.rouge1 = best.rouge1.max(s.rouge1);
            best.rouge2 = best.rouge2.max(s.rouge2);
            best.rouge_l = best.rouge_l.max(s.rouge_l);
            best.bleu = best.bleu.max(s.bleu);
            best.embed_score = best.embed_score.max(s.embed_score);
        }
        Ok(best)
    }

    pub fn mean(all: &[Self]) -> Self {
        if all.is_empty() {
            return Self::default();
        }
        let n = all.len() as f64;
        Self {
            rouge1: all.iter().map(|s| s.rouge1).sum::<f64>() / n,
            rouge2: all.iter().map(|s| s.rouge2).sum::<f64>() / n,
            rouge_l: all.iter().map(|s| s.rouge_l).sum::<f64>() / n,
            bleu: all.iter().map(|s| s.bleu).sum::<f64>() / n,
            embed_score: all.iter().map(|s| s.embed_score).sum::<f64>() / n,
        }
    }

    /// Percentages rounded to two decimals, as reported in tables.
    pub fn percent(&self) -> Self {
        Self {
            rouge1: percent(self.rouge1),
            rouge2: percent(self.rouge2),
            rouge_l: percent(self.rouge_l),
            bleu: percent(self.bleu),
            embed_score: percent(self.embed_score),
        }
    }
}

pub fn percent(x: f64) -> f64 {
    (x * 10_000.0).round() / 100.0
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClassificationMode {
    /// Depressed (severity ≥ 2) against control, macro-averaged over the two classes.
    Binary,
    /// The four severity levels, macro-averaged.
    PerClass,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationScores {
    pub precision: f64,
    pub recall: f64,
    pub macro_f1: f64,
    pub per_class_f1: BTreeMap<String, f64>,
}

pub const DEPRESSED: &str = "Dep";
pub const CONTROL: &str = "Con";

/// Macro precision, recall and F1 over `classes` labels; empty denominators score 0.
pub fn label_scores(pred: &[usize], gold: &[usize], names: &[&str]) -> Result<ClassificationScores> {
    if pred.len() != gold.len() {
        return Err(MetricError::InvalidArgument(format!("{} predictions for {} labels", pred.len(), gold.len())));
    }
    if pred.is_empty() {
        return Err(MetricError::InvalidArgument("no predictions".into()));
    }
    let k = names.len();
    if let Some(&bad) = pred.iter().chain(gold).find(|&&c| c >= k) {
        return Err(MetricError::InvalidArgument(format!("label {bad} outside {k} classes")));
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let (mut ps, mut rs, mut fs) = (0.0, 0.0, 0.0);
    let mut per_class_f1 = BTreeMap::new();
    for (c, name) in names.iter().enumerate() {
        let tp = pred.iter().zip(gold).filter(|&(&p, &g)| p == c && g == c).count();
        let predicted = pred.iter().filter(|&&p| p == c).count();
        let actual = gold.iter().filter(|&&g| g == c).count();
        let (p, r) = (ratio(tp, predicted), ratio(tp, actual));
        let f = f1(p, r);
        ps += p;
        rs += r;
        fs += f;
        per_class_f1.insert(name.to_string(), f);
    }
    let k = k as f64;
    Ok(ClassificationScores { precision: ps / k, recall: rs / k, macro_f1: fs / k, per_class_f1 })
}

pub fn classification_scores(pred: &[SeverityLevel], gold: &[SeverityLevel], mode: ClassificationMode) -> Result<ClassificationScores> {
    match mode {
        ClassificationMode::Binary => {
            let bin = |v: &[SeverityLevel]| v.iter().map(|s| if s.binary() { 0 } else { 1 }).collect::<Vec<_>>();
            label_scores(&bin(pred), &bin(gold), &[DEPRESSED, CONTROL])
        }
        ClassificationMode::PerClass => {
            let ids = |v: &[SeverityLevel]| v.iter().map(|s| s.value() as usize).collect::<Vec<_>>();
            label_scores(&ids(pred), &ids(gold), &["0", "1", "2", "3"])
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FleissKappa {
    pub p_bar: f64,
    pub p_e: f64,
    pub kappa: f64,
}

/// Fleiss' kappa of a subjects × categories count table with equal raters per subject.
/// When every rating falls in one category the chance term is 1 and kappa is 1.
pub fn fleiss_kappa(table: &[Vec<usize>]) -> Result<FleissKappa> {
    if table.is_empty() {
        return Err(MetricError::InvalidArgument("rating table is empty".into()));
    }
    let k = table[0].len();
    let n = table[0].iter().sum::<usize>();
    if n < 2 {
        return Err(MetricError::InvalidArgument("need at least two raters per subject".into()));
    }
    if table.iter().any(|row| row.len() != k || row.iter().sum::<usize>() != n) {
        return Err(MetricError::InvalidArgument("every subject needs the same categories and rater count".into()));
    }
    let subjects = table.len() as f64;
    let nf = n as f64;
    let p_bar = table
        .iter()
        .map(|row| (row.iter().map(|&c| (c * c) as f64).sum::<f64>() - nf) / (nf * (nf - 1.0)))
        .sum::<f64>()
        / subjects;
    let p_e: f64 = (0..k)
        .map(|j| {
            let pj = table.iter().map(|row| row[j]).sum::<usize>() as f64 / (subjects * nf);
            pj * pj
        })
        .sum();
    let kappa = if p_e >= 1.0 { 1.0 } else { (p_bar - p_e) / (1.0 - p_e) };
    Ok(FleissKappa { p_bar, p_e, kappa })
}

pub fn token_set(text: &str) -> BTreeSet<String> {
    metric_tokens(text).into_iter().collect()
}

/// Intersection over union of two token sets; any empty set scores 0.
pub fn iou(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let inter = a.intersection(b).count();
    inter as f64 / (a.len() + b.len() - inter) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgreementResult {
    pub kappa: f64,
    pub p_bar: f64,
    pub p_e: f64,
    /// Per-subject rater × rater IoU matrices.
    pub pairwise_iou: Vec<Vec<Vec<f64>>>,
    /// Per-subject counts of raters in the largest, second largest, … cluster.
    pub table: Vec<Vec<usize>>,
}

/// Sizes of the single-link clusters of raters whose pairwise IoU exceeds `threshold`,
/// largest first.
fn cluster_sizes(m: &[Vec<f64>], threshold: f64) -> Vec<usize> {
    let n = m.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for (i, row) in m.iter().enumerate() {
        for (j, &v) in row.iter().enumerate().skip(i + 1) {
            if v > threshold {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                parent[a] = b;
            }
        }
    }
    let mut sizes: BTreeMap<usize, usize> = BTreeMap::new();
    for i in 0..n {
        *sizes.entry(find(&mut parent, i)).or_insert(0) += 1;
    }
    let mut v: Vec<usize> = sizes.into_values().collect();
    v.sort_unstable_by(|a, b| b.cmp(a));
    v
}

/// Agreement of free-text annotations: `annotations[subject][rater]`. Raters are grouped
/// per subject by single-link IoU clustering and each rater is rated with the size rank
/// of its cluster, so the table depends only on cluster sizes and not on rater order.
pub fn fleiss_kappa_iou<S: AsRef<str>>(annotations: &[Vec<S>], threshold: f64) -> Result<AgreementResult> {
    if annotations.len() < 2 {
        return Err(MetricError::InvalidArgument("need at least two subjects".into()));
    }
    let raters = annotations[0].len();
    if raters < 2 || annotations.iter().any(|a| a.len() != raters) {
        return Err(MetricError::InvalidArgument("need the same number (at least two) of raters per subject".into()));
    }
    let mut pairwise_iou = Vec::with_capacity(annotations.len());
    let mut table = Vec::with_capacity(annotations.len());
    for subject in annotations {
        let sets: Vec<_> = subject.iter().map(|s| token_set(s.as_ref())).collect();
        let m: Vec<Vec<f64>> = (0..raters)
            .map(|i| (0..raters).map(|j| if i == j { 1.0 } else { iou(&sets[i], &sets[j]) }).collect())
            .collect();
        let mut row = cluster_sizes(&m, threshold);
        row.resize(raters, 0);
        table.push(row);
        pairwise_iou.push(m);
    }
    let fk = fleiss_kappa(&table)?;
    Ok(AgreementResult { kappa: fk.kappa, p_bar: fk.p_bar, p_e: fk.p_e, pairwise_iou, table })
}
