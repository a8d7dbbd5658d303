use serde::{Deserialize, Serialize};

use super::arch::ArchConfig;
use super::params::{layer_name, ParamStore};
use crate::autodiff::{Array, Graph, Var};
use crate::error::{Error, Result};
use crate::par;

pub type TokenId = u32;
pub type TokenSequence = Vec<TokenId>;

const LN_EPS: f64 = 1e-5;

/// A prompt/response pair scored under teacher forcing.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub prompt: TokenSequence,
    pub response: TokenSequence,
}

impl Example {
    pub fn new(prompt: TokenSequence, response: TokenSequence) -> Self {
        Self { prompt, response }
    }
}

/// Probability vector over the vocabulary at one position.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenDistribution {
    pub probs: Vec<f64>,
}

impl TokenDistribution {
    pub fn from_logits(logits: &[f64]) -> Self {
        let mut probs = vec![0.0; logits.len()];
        crate::autodiff::kernels::softmax_row(logits, &mut probs);
        Self { probs }
    }

    pub fn from_log_probs(logp: &[f64]) -> Self {
        Self {
            probs: logp.iter().map(|v| v.exp()).collect(),
        }
    }

    /// Highest-probability id; ties go to the lowest id.
    pub fn argmax(&self) -> TokenId {
        argmax(&self.probs) as TokenId
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// Index of the maximum; the first (lowest) index wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Logit matrix `[positions, V]` for one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Logits(pub Array);

impl Logits {
    pub fn values(&self) -> &Array {
        &self.0
    }

    pub fn distribution(&self, row: usize) -> TokenDistribution {
        TokenDistribution::from_logits(self.0.row(row))
    }
}

struct LayerVars {
    ln1_g: Var,
    ln1_b: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    bq: Var,
    bk: Var,
    bv: Var,
    bo: Var,
    ln2_g: Var,
    ln2_b: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

/// Graph leaves holding one [`ParamStore`].
pub struct ModelVars {
    pub arch: ArchConfig,
    tok_emb: Var,
    pos_emb: Var,
    layers: Vec<LayerVars>,
    lnf_g: Var,
    lnf_b: Var,
    head: Option<Var>,
    /// (name, leaf) in storage order.
    pub named: Vec<(String, Var)>,
}

impl ModelVars {
    pub fn leaves(&self) -> Vec<Var> {
        self.named.iter().map(|(_, v)| *v).collect()
    }

    pub fn leaf(&self, name: &str) -> Option<Var> {
        self.named.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

impl ParamStore {
    /// Registers every parameter as a graph leaf.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<ModelVars> {
        let mut named = Vec::with_capacity(self.entries.len());
        for (name, a) in &self.entries {
            named.push((name.clone(), g.leaf(a.clone(), trainable)));
        }
        let find = |n: &str| -> Result<Var> {
            named
                .iter()
                .find(|(k, _)| k == n)
                .map(|(_, v)| *v)
                .ok_or_else(|| Error::Data(format!("missing parameter `{n}`")))
        };
        let mut layers = Vec::with_capacity(self.arch.n_layers);
        for l in 0..self.arch.n_layers {
            let p = |part: &str| find(&layer_name(l, part));
            layers.push(LayerVars {
                ln1_g: p("ln1.gamma")?,
                ln1_b: p("ln1.beta")?,
                wq: p("attn.wq")?,
                wk: p("attn.wk")?,
                wv: p("attn.wv")?,
                wo: p("attn.wo")?,
                bq: p("attn.bq")?,
                bk: p("attn.bk")?,
                bv: p("attn.bv")?,
                bo: p("attn.bo")?,
                ln2_g: p("ln2.gamma")?,
                ln2_b: p("ln2.beta")?,
                w1: p("mlp.w1")?,
                b1: p("mlp.b1")?,
                w2: p("mlp.w2")?,
                b2: p("mlp.b2")?,
            });
        }
        Ok(ModelVars {
            arch: self.arch.clone(),
            tok_emb: find("tok_emb")?,
            pos_emb: find("pos_emb")?,
            layers,
            lnf_g: find("ln_f.gamma")?,
            lnf_b: find("ln_f.beta")?,
            head: if self.arch.tie_output_head {
                None
            } else {
                Some(find("head")?)
            },
            named,
        })
    }
}

fn check_tokens(arch: &ArchConfig, seq: &[TokenId]) -> Result<()> {
    if seq.len() > arch.context_len {
        return Err(Error::Length {
            len: seq.len(),
            context_len: arch.context_len,
        });
    }
    if let Some(&bad) = seq.iter().find(|&&t| t as usize >= arch.vocab_size) {
        return Err(Error::TokenOutOfRange {
            id: bad as usize,
            vocab_size: arch.vocab_size,
        });
    }
    Ok(())
}

/// Final hidden states `[T, d]` for packed sequences (rows stacked in order).
pub fn hidden_packed(g: &mut Graph, m: &ModelVars, seqs: &[&[TokenId]]) -> Result<Var> {
    let arch = &m.arch;
    if seqs.is_empty() || seqs.iter().any(|s| s.is_empty()) {
        return Err(Error::Contract("cannot run the model on an empty sequence".into()));
    }
    let mut ids = Vec::new();
    let mut pos = Vec::new();
    let mut segs = Vec::with_capacity(seqs.len());
    for s in seqs {
        check_tokens(arch, s)?;
        ids.extend(s.iter().map(|&t| t as usize));
        pos.extend(0..s.len());
        segs.push(s.len());
    }
    let tok = g.gather_rows(m.tok_emb, &ids)?;
    let pe = g.gather_rows(m.pos_emb, &pos)?;
    let mut x = g.add(tok, pe)?;
    for l in &m.layers {
        let h = g.layer_norm(x, l.ln1_g, l.ln1_b, LN_EPS)?;
        let q = g.matmul(h, l.wq)?;
        let q = g.add_row(q, l.bq)?;
        let k = g.matmul(h, l.wk)?;
        let k = g.add_row(k, l.bk)?;
        let v = g.matmul(h, l.wv)?;
        let v = g.add_row(v, l.bv)?;
        let a = g.causal_attention(q, k, v, &segs, arch.n_heads)?;
        let o = g.matmul(a, l.wo)?;
        let o = g.add_row(o, l.bo)?;
        x = g.add(x, o)?;
        let h = g.layer_norm(x, l.ln2_g, l.ln2_b, LN_EPS)?;
        let f = g.matmul(h, l.w1)?;
        let f = g.add_row(f, l.b1)?;
        let f = g.gelu(f);
        let f = g.matmul(f, l.w2)?;
        let f = g.add_row(f, l.b2)?;
        x = g.add(x, f)?;
    }
    g.layer_norm(x, m.lnf_g, m.lnf_b, LN_EPS)
}

/// Output logits for selected hidden rows.
pub fn head(g: &mut Graph, m: &ModelVars, hidden: Var) -> Result<Var> {
    match m.head {
        Some(w) => g.matmul(hidden, w),
        None => g.matmul_nt(hidden, m.tok_emb),
    }
}

/// Teacher-forced layout of a batch: response token `i` of example `b` is
/// predicted by packed row `rows[..]`.
#[derive(Clone, Debug)]
pub struct TeacherForced {
    /// Log-probabilities `[n_response_tokens, V]`, one row per response token.
    pub logp: Var,
    /// Logits of the same rows.
    pub logits: Var,
    /// Target id per row.
    pub targets: Vec<usize>,
    /// Response length per example (rows are grouped by example, in order).
    pub lens: Vec<usize>,
}

/// Scores every response token of every example in one packed graph.
///
/// Only the rows that predict response tokens pass through the output head.
pub fn teacher_forced(g: &mut Graph, m: &ModelVars, batch: &[Example]) -> Result<TeacherForced> {
    let mut seqs: Vec<Vec<TokenId>> = Vec::with_capacity(batch.len());
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    let mut lens = Vec::with_capacity(batch.len());
    let mut offset = 0;
    for ex in batch {
        if ex.prompt.is_empty() {
            return Err(Error::Contract("prompt must be non-empty".into()));
        }
        if ex.response.is_empty() {
            return Err(Error::Contract("response must be non-empty".into()));
        }
        let total = ex.prompt.len() + ex.response.len();
        if total > m.arch.context_len {
            return Err(Error::Length {
                len: total,
                context_len: m.arch.context_len,
            });
        }
        // the final response token is never an input
        let mut s = ex.prompt.clone();
        s.extend_from_slice(&ex.response[..ex.response.len() - 1]);
        for (i, &y) in ex.response.iter().enumerate() {
            rows.push(offset + ex.prompt.len() - 1 + i);
            targets.push(y as usize);
        }
        check_tokens(&m.arch, &ex.response)?;
        offset += s.len();
        lens.push(ex.response.len());
        seqs.push(s);
    }
    let refs: Vec<&[TokenId]> = seqs.iter().map(|s| s.as_slice()).collect();
    let hidden = hidden_packed(g, m, &refs)?;
    let picked = g.gather_rows(hidden, &rows)?;
    let logits = head(g, m, picked)?;
    let logp = g.log_softmax_rows(logits)?;
    Ok(TeacherForced {
        logp,
        logits,
        targets,
        lens,
    })
}

/// Logits for every position of one sequence.
pub fn forward_logits(params: &ParamStore, tokens: &[TokenId]) -> Result<Logits> {
    let mut g = Graph::new();
    let m = params.bind(&mut g, false)?;
    let h = hidden_packed(&mut g, &m, &[tokens])?;
    let z = head(&mut g, &m, h)?;
    Ok(Logits(g.value(z).clone()))
}

/// Per-token scores of one example under teacher forcing.
#[derive(Clone, Debug, PartialEq)]
pub struct ExampleScore {
    /// `log π(yᵢ | x, y<ᵢ)` per response token.
    pub token_logprobs: Vec<f64>,
    /// Whether the argmax at each position equals `yᵢ` (ties → lowest id).
    pub argmax_hits: Vec<bool>,
}

impl ExampleScore {
    pub fn total(&self) -> f64 {
        self.token_logprobs.iter().sum()
    }
}

const SCORE_CHUNK: usize = 32;

/// Teacher-forced scores for many examples, chunked over workers.
pub fn score_examples(params: &ParamStore, examples: &[Example]) -> Result<Vec<ExampleScore>> {
    let chunks: Vec<&[Example]> = examples.chunks(SCORE_CHUNK).collect();
    let scored = par::try_map(&chunks, |chunk| -> Result<Vec<ExampleScore>> {
        let mut g = Graph::new();
        let m = params.bind(&mut g, false)?;
        let tf = teacher_forced(&mut g, &m, chunk)?;
        let lp = g.value(tf.logp);
        let mut out = Vec::with_capacity(chunk.len());
        let mut row = 0;
        for &len in &tf.lens {
            let mut token_logprobs = Vec::with_capacity(len);
            let mut argmax_hits = Vec::with_capacity(len);
            for _ in 0..len {
                let r = lp.row(row);
                token_logprobs.push(r[tf.targets[row]]);
                argmax_hits.push(argmax(r) == tf.targets[row]);
                row += 1;
            }
            out.push(ExampleScore {
                token_logprobs,
                argmax_hits,
            });
        }
        Ok(out)
    })?;
    Ok(scored.into_iter().flatten().collect())
}

/// `Σᵢ log π(yᵢ | x, y<ᵢ)`; zero for an empty response.
pub fn sequence_logprob(params: &ParamStore, prompt: &[TokenId], response: &[TokenId]) -> Result<f64> {
    if prompt.is_empty() {
        return Err(Error::Contract("prompt must be non-empty".into()));
    }
    if response.is_empty() {
        check_tokens(&params.arch, prompt)?;
        return Ok(0.0);
    }
    let ex = Example::new(prompt.to_vec(), response.to_vec());
    Ok(score_examples(params, std::slice::from_ref(&ex))?[0].total())
}

/// Next-token log-probabilities after each prefix, batched in one graph.
pub fn next_token_logprobs(params: &ParamStore, prefixes: &[&[TokenId]]) -> Result<Vec<Vec<f64>>> {
    let mut g = Graph::new();
    let m = params.bind(&mut g, false)?;
    let h = hidden_packed(&mut g, &m, prefixes)?;
    let mut last = Vec::with_capacity(prefixes.len());
    let mut off = 0;
    for p in prefixes {
        off += p.len();
        last.push(off - 1);
    }
    let picked = g.gather_rows(h, &last)?;
    let z = head(&mut g, &m, picked)?;
    let lp = g.log_softmax_rows(z)?;
    let v = g.value(lp);
    Ok((0..prefixes.len()).map(|r| v.row(r).to_vec()).collect())
}

pub fn next_token_dist(params: &ParamStore, prefix: &[TokenId]) -> Result<TokenDistribution> {
    let lp = next_token_logprobs(params, &[prefix])?;
    Ok(TokenDistribution::from_log_probs(&lp[0]))
}
