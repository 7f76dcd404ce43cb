//! Depression-screening toolkit: PHQ-8 item vocabulary, corpus handling, symptom
//! labeling, a structured-summary transformer, multimodal severity fusion, evaluation
//! metrics, structured LLM prompting and a training/evaluation harness.

pub mod corpus;
pub mod fusion;
pub mod harness;
pub mod labeling;
pub mod llm;
pub mod metrics;
pub mod nn;
pub mod phq_items;
pub mod phqcot;
pub mod summarizer;

pub use corpus::{Corpus, GroundTruth, Sample, Speaker, Split, Utterance};
pub use phq_items::{
    build_summary, parse_summary, render_summary, severity_from_total, ActionPlan, Assessment, Cause, Degree, ItemScores, PhqError,
    PhqItem, SeverityLevel, StructuredSummary,
};
pub use fusion::{LossWeights, SeverityDistribution, Streams};
pub use harness::{Ablation, Checkpoint, HarnessError, Model, RunConfig, RunReport};
pub use metrics::{ClassificationScores, GenerationScores};
pub use phqcot::{PromptSpec, Strategy};
