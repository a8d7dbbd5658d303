//! Tiny decoder-only transformer: parameters, teacher-forced scoring and
//! decoding.

mod arch;
mod decode;
mod model;
mod params;

#[cfg(test)]
mod tests;

pub use arch::ArchConfig;
pub use decode::{beam, decode, greedy_batch, sample, sample_batch, Decoded, Strategy};
pub use model::{
    argmax, forward_logits, head, hidden_packed, next_token_dist, next_token_logprobs,
    score_examples, sequence_logprob, teacher_forced, Example, ExampleScore, Logits, ModelVars,
    TeacherForced, TokenDistribution, TokenId, TokenSequence,
};
pub use params::{init_model, ParamStore};
