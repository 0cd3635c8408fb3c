//! Automatic evaluation: BLEU, n-gram perplexity, transfer accuracy,
//! G-score and representation probes.

pub mod bleu;
pub mod embed;
pub mod lm;
pub mod metrics;

pub use bleu::{bleu_corpus, bleu_lines};
pub use lm::{perplexity, KneserNeyLm, LanguageModel, UniformLm};
pub use metrics::{g_score, transfer_accuracy, MetricReport};
