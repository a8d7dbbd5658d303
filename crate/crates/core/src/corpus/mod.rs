//! Synthetic fictitious-biography QA corpus with entity-scoped
//! forget/retain/holdout splits, and its closed word-level vocabulary.

mod generate;
mod templates;
mod vocab;

#[cfg(test)]
mod tests;

pub use generate::{batches, generate_corpus, Corpus, GenConfig, QaRecord, Split, META_FILE, RECORDS_FILE, VOCAB_FILE};
pub use templates::{AttributeTemplates, TemplateSet};
pub use vocab::{normalize, Specials, Vocabulary};
