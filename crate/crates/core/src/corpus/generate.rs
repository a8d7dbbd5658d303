use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::templates::{fill, TemplateSet};
use super::vocab::Vocabulary;
use crate::error::{Error, Result};
use crate::lm::Example;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Forget,
    Retain,
    Holdout,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Forget, Split::Retain, Split::Holdout];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Forget => "forget",
            Split::Retain => "retain",
            Split::Holdout => "holdout",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QaRecord {
    pub id: String,
    pub split: Split,
    pub question: String,
    pub answer: String,
    pub paraphrases: Vec<String>,
    pub perturbed_answers: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub n_entities: usize,
    pub attributes_per_entity: usize,
    pub forget_fraction: f64,
    pub holdout_fraction: f64,
    pub n_paraphrases: usize,
    pub n_perturbed: usize,
    pub template_set: TemplateSet,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_entities: 200,
            attributes_per_entity: 2,
            forget_fraction: 0.1,
            holdout_fraction: 0.1,
            n_paraphrases: 2,
            n_perturbed: 3,
            template_set: TemplateSet::builtin(),
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        self.template_set.validate()?;
        if self.n_entities < 3 {
            return cfg(format!("n_entities must be ≥ 3, got {}", self.n_entities));
        }
        if !(self.forget_fraction > 0.0 && self.forget_fraction < 1.0) {
            return cfg(format!("forget_fraction must be in (0,1), got {}", self.forget_fraction));
        }
        if !(self.holdout_fraction >= 0.0 && self.forget_fraction + self.holdout_fraction < 1.0) {
            return cfg("holdout_fraction must be ≥ 0 and leave room for retain".into());
        }
        if self.n_perturbed < 3 {
            return cfg(format!("n_perturbed must be ≥ 3, got {}", self.n_perturbed));
        }
        let attrs = &self.template_set.attributes;
        if self.attributes_per_entity < 1 || self.attributes_per_entity > attrs.len() {
            return cfg(format!(
                "attributes_per_entity must be in 1..={}, got {}",
                attrs.len(),
                self.attributes_per_entity
            ));
        }
        for a in attrs {
            if self.n_paraphrases < 1 || self.n_paraphrases >= a.answers.len() {
                return cfg(format!(
                    "n_paraphrases must be in 1..{} for attribute {:?}",
                    a.answers.len(),
                    a.attribute
                ));
            }
            if self.n_perturbed >= a.values.len() {
                return cfg(format!(
                    "attribute {:?} has too few values for {} perturbations",
                    a.attribute, self.n_perturbed
                ));
            }
        }
        let ts = &self.template_set;
        if self.n_entities > ts.first_names.len() * ts.last_names.len() {
            return cfg("not enough distinct names for n_entities".into());
        }
        Ok(())
    }

    pub fn split_counts(&self) -> (usize, usize, usize) {
        let n = self.n_entities;
        let forget = ((n as f64 * self.forget_fraction).round() as usize).clamp(1, n - 2);
        let holdout = ((n as f64 * self.holdout_fraction).round() as usize).min(n - forget - 1);
        (forget, n - forget - holdout, holdout)
    }
}

/// Corpus records together with their vocabulary and generation settings.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub records: Vec<QaRecord>,
    pub vocab: Vocabulary,
    pub gen_config: GenConfig,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct CorpusMeta {
    gen_config: GenConfig,
    seed: u64,
}

pub const RECORDS_FILE: &str = "corpus.jsonl";
pub const VOCAB_FILE: &str = "vocab.json";
pub const META_FILE: &str = "corpus_meta.json";

/// Generates a corpus. Entities get distinct names; each entity receives
/// `attributes_per_entity` attributes and a single split.
pub fn generate_corpus(gen_config: &GenConfig, seed: u64) -> Result<Corpus> {
    gen_config.validate()?;
    let ts = &gen_config.template_set;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut names = BTreeSet::new();
    let mut ordered = Vec::with_capacity(gen_config.n_entities);
    while ordered.len() < gen_config.n_entities {
        let f = ts.first_names.choose(&mut rng).unwrap();
        let l = ts.last_names.choose(&mut rng).unwrap();
        let name = format!("{f} {l}");
        if names.insert(name.clone()) {
            ordered.push(name);
        }
    }

    let (n_forget, _, n_holdout) = gen_config.split_counts();
    let mut order: Vec<usize> = (0..gen_config.n_entities).collect();
    order.shuffle(&mut rng);
    let mut split_of = vec![Split::Retain; gen_config.n_entities];
    for &e in &order[..n_forget] {
        split_of[e] = Split::Forget;
    }
    for &e in &order[n_forget..n_forget + n_holdout] {
        split_of[e] = Split::Holdout;
    }

    let mut records = Vec::new();
    for (e, name) in ordered.iter().enumerate() {
        let mut attrs: Vec<usize> = (0..ts.attributes.len()).collect();
        attrs.shuffle(&mut rng);
        attrs.truncate(gen_config.attributes_per_entity);
        attrs.sort_unstable();
        for a in attrs {
            let at = &ts.attributes[a];
            let vi = rng.gen_range(0..at.values.len());
            let value = &at.values[vi];
            let ti = rng.gen_range(0..at.questions.len());
            let others: Vec<usize> = (0..at.answers.len()).filter(|&j| j != ti).collect();
            let paraphrases = others[..gen_config.n_paraphrases]
                .iter()
                .map(|&j| fill(&at.answers[j], name, value))
                .collect();
            let wrong: Vec<&String> = at
                .values
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != vi)
                .map(|(_, v)| v)
                .collect();
            let perturbed_answers = wrong
                .choose_multiple(&mut rng, gen_config.n_perturbed)
                .map(|w| fill(&at.answers[ti], name, w))
                .collect();
            records.push(QaRecord {
                id: format!("e{e:03}-{}", at.attribute),
                split: split_of[e],
                question: fill(&at.questions[ti], name, value),
                answer: fill(&at.answers[ti], name, value),
                paraphrases,
                perturbed_answers,
            });
        }
    }
    let vocab = vocab_for(&records)?;
    Ok(Corpus {
        records,
        vocab,
        gen_config: gen_config.clone(),
        seed,
    })
}

fn vocab_for(records: &[QaRecord]) -> Result<Vocabulary> {
    let mut words = BTreeSet::new();
    for r in records {
        for text in r.texts() {
            words.extend(text.split_whitespace());
        }
    }
    Vocabulary::from_words(words)
}

impl QaRecord {
    pub fn texts(&self) -> impl Iterator<Item = &str> {
        [self.question.as_str(), self.answer.as_str()]
            .into_iter()
            .chain(self.paraphrases.iter().map(|s| s.as_str()))
            .chain(self.perturbed_answers.iter().map(|s| s.as_str()))
    }
}

impl Corpus {
    pub fn split(&self, split: Split) -> Vec<&QaRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    /// Prompt/answer token pair of a record.
    pub fn example(&self, r: &QaRecord) -> Result<Example> {
        Ok(Example::new(
            self.vocab.encode_prompt(&r.question)?,
            self.vocab.encode(&r.answer)?,
        ))
    }

    pub fn examples(&self, records: &[&QaRecord]) -> Result<Vec<Example>> {
        records.iter().map(|r| self.example(r)).collect()
    }

    /// Checks that ids are unique and every text tokenizes.
    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        for r in &self.records {
            if !ids.insert(r.id.as_str()) {
                return Err(Error::Data(format!("duplicate record id {:?}", r.id)));
            }
            if r.paraphrases.is_empty() || r.perturbed_answers.len() < 3 {
                return Err(Error::Data(format!(
                    "record {:?} needs ≥ 1 paraphrase and ≥ 3 perturbed answers",
                    r.id
                )));
            }
            for t in r.texts() {
                self.vocab.words(t).map_err(|e| match e {
                    Error::UnknownWord(w) => Error::Data(format!(
                        "record {:?}: word {w:?} is not in the vocabulary",
                        r.id
                    )),
                    other => other,
                })?;
            }
        }
        for s in Split::ALL {
            if !self.records.iter().any(|r| r.split == s) && s != Split::Holdout {
                return Err(Error::Data(format!("corpus has no {s} records")));
            }
        }
        Ok(())
    }

    pub fn records_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Writes `corpus.jsonl`, `vocab.json` and `corpus_meta.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, body: &str| -> Result<()> {
            let p = dir.join(name);
            let mut f = std::fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
            f.write_all(body.as_bytes()).map_err(|e| Error::io(&p, e))
        };
        write(RECORDS_FILE, &self.records_jsonl()?)?;
        write(VOCAB_FILE, &self.vocab.to_json()?)?;
        let meta = CorpusMeta {
            gen_config: self.gen_config.clone(),
            seed: self.seed,
        };
        write(META_FILE, &serde_json::to_string_pretty(&meta)?)
    }

    /// Loads a corpus directory (or the `corpus.jsonl` path inside one).
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let dir = if path.is_dir() {
            path
        } else {
            path.parent().unwrap_or(Path::new("."))
        };
        let read = |name: &str| {
            let p = dir.join(name);
            std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
        };
        let mut records = Vec::new();
        for (i, line) in read(RECORDS_FILE)?.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            records.push(
                serde_json::from_str::<QaRecord>(line)
                    .map_err(|e| Error::Data(format!("{RECORDS_FILE} line {}: {e}", i + 1)))?,
            );
        }
        let vocab = Vocabulary::from_json(&read(VOCAB_FILE)?)?;
        let meta: CorpusMeta = serde_json::from_str(&read(META_FILE)?)
            .map_err(|e| Error::Data(format!("{META_FILE}: {e}")))?;
        let c = Corpus {
            records,
            vocab,
            gen_config: meta.gen_config,
            seed: meta.seed,
        };
        c.validate()?;
        Ok(c)
    }
}

/// Shuffled batches over the records of `splits`, keyed by `(seed, epoch)`.
/// The last partial batch is kept.
pub fn batches<'a>(
    corpus: &'a Corpus,
    splits: &[Split],
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Vec<&'a QaRecord>>> {
    if batch_size < 1 {
        return Err(Error::Config("batch_size must be ≥ 1".into()));
    }
    let mut pool: Vec<&QaRecord> = corpus
        .records
        .iter()
        .filter(|r| splits.contains(&r.split))
        .collect();
    if pool.is_empty() {
        return Err(Error::Data(format!("no records in splits {splits:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    pool.shuffle(&mut rng);
    Ok(pool.chunks(batch_size).map(|c| c.to_vec()).collect())
}
