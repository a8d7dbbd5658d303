use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::arch::ArchConfig;
use crate::autodiff::Array;
use crate::error::{Error, Result};

/// How a parameter is initialized.
#[derive(Clone, Copy, Debug)]
enum Init {
    /// N(0, std²)
    Normal(f64),
    Zeros,
    Ones,
}

/// Named parameter arrays of the language model.
///
/// Names and shapes are a deterministic function of the architecture;
/// cloning yields a value-independent snapshot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    pub arch: ArchConfig,
    pub seed: u64,
    #[serde(rename = "params")]
    pub entries: BTreeMap<String, Array>,
}

pub(crate) fn layer_name(layer: usize, part: &str) -> String {
    format!("layers.{layer}.{part}")
}

/// Parameter layout in initialization order.
fn layout(arch: &ArchConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (v, c, d, f) = (arch.vocab_size, arch.context_len, arch.d_model, arch.d_ff());
    let std_in = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
    let resid = 1.0 / ((2 * arch.n_layers.max(1)) as f64).sqrt();
    let mut out = vec![
        ("tok_emb".to_string(), vec![v, d], Init::Normal(std_in(d))),
        ("pos_emb".to_string(), vec![c, d], Init::Normal(std_in(d))),
    ];
    for l in 0..arch.n_layers {
        let mut push = |part: &str, shape: Vec<usize>, init: Init| {
            out.push((layer_name(l, part), shape, init));
        };
        push("ln1.gamma", vec![d], Init::Ones);
        push("ln1.beta", vec![d], Init::Zeros);
        for w in ["wq", "wk", "wv"] {
            push(&format!("attn.{w}"), vec![d, d], Init::Normal(std_in(d)));
        }
        push("attn.wo", vec![d, d], Init::Normal(std_in(d) * resid));
        for b in ["bq", "bk", "bv", "bo"] {
            push(&format!("attn.{b}"), vec![d], Init::Zeros);
        }
        push("ln2.gamma", vec![d], Init::Ones);
        push("ln2.beta", vec![d], Init::Zeros);
        push("mlp.w1", vec![d, f], Init::Normal(std_in(d)));
        push("mlp.b1", vec![f], Init::Zeros);
        push("mlp.w2", vec![f, d], Init::Normal(std_in(f) * resid));
        push("mlp.b2", vec![d], Init::Zeros);
    }
    out.push(("ln_f.gamma".into(), vec![d], Init::Ones));
    out.push(("ln_f.beta".into(), vec![d], Init::Zeros));
    if !arch.tie_output_head {
        out.push(("head".into(), vec![d, v], Init::Zeros));
    }
    out
}

/// Seeded scaled-normal initialization. The untied output head starts at
/// zero, so an untrained model predicts the uniform distribution.
pub fn init_model(arch: &ArchConfig, seed: u64) -> Result<ParamStore> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = BTreeMap::new();
    for (name, shape, init) in layout(arch) {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("positive std");
                (0..n).map(|_| dist.sample(&mut rng)).collect()
            }
        };
        entries.insert(name, Array::new(shape, data)?);
    }
    Ok(ParamStore {
        arch: arch.clone(),
        seed,
        entries,
    })
}

impl ParamStore {
    pub fn get(&self, name: &str) -> Result<&Array> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Data(format!("missing parameter `{name}`")))
    }

    pub fn param_count(&self) -> usize {
        self.entries.values().map(Array::len).sum()
    }

    /// Parameter names in storage order (also the flattening order).
    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for a in self.entries.values() {
            out.extend_from_slice(a.data());
        }
        out
    }

    /// Overwrite all values from a flat vector in [`ParamStore::flatten`] order.
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Dimension(format!(
                "flat vector of {} values for {} parameters",
                flat.len(),
                self.param_count()
            )));
        }
        let mut off = 0;
        for a in self.entries.values_mut() {
            let n = a.len();
            a.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Checks names and shapes against the architecture.
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        let expected = layout(&self.arch);
        if expected.len() != self.entries.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} parameters, architecture needs {}",
                self.entries.len(),
                expected.len()
            )));
        }
        for (name, shape, _) in expected {
            let a = self.get(&name)?;
            if a.shape() != shape.as_slice() {
                return Err(Error::Data(format!(
                    "parameter `{name}` has shape {:?}, expected {shape:?}",
                    a.shape()
                )));
            }
            if !a.is_finite() {
                return Err(Error::Data(format!("parameter `{name}` is not finite")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let store: ParamStore = serde_json::from_str(s)?;
        store.validate()?;
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}
