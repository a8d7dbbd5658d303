use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{TokenId, TokenSequence};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Specials {
    pub bos: TokenId,
    pub eos: TokenId,
    pub pad: TokenId,
    pub sep: TokenId,
}

const SPECIAL_STRINGS: [&str; 4] = ["<bos>", "<eos>", "<pad>", "<sep>"];

/// Closed word-level vocabulary. Ids 0..4 are the specials, content tokens
/// follow in sorted order.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    id_of: HashMap<String, TokenId>,
    token_of: Vec<String>,
    pub specials: Specials,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    specials: Specials,
    tokens: Vec<String>,
}

/// Collapses runs of whitespace to single spaces.
pub fn normalize(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

impl Vocabulary {
    pub fn from_words<'a>(words: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let content: BTreeSet<&str> = words.into_iter().collect();
        let mut token_of: Vec<String> = SPECIAL_STRINGS.iter().map(|s| s.to_string()).collect();
        for w in content {
            if SPECIAL_STRINGS.contains(&w) {
                return Err(Error::Data(format!("content word {w:?} collides with a special")));
            }
            token_of.push(w.to_string());
        }
        Self::from_tokens(
            token_of,
            Specials {
                bos: 0,
                eos: 1,
                pad: 2,
                sep: 3,
            },
        )
    }

    fn from_tokens(token_of: Vec<String>, specials: Specials) -> Result<Self> {
        let mut id_of = HashMap::with_capacity(token_of.len());
        for (i, t) in token_of.iter().enumerate() {
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(Error::Data(format!("invalid token {t:?}")));
            }
            if id_of.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::Data(format!("duplicate token {t:?}")));
            }
        }
        let v = Vocabulary {
            id_of,
            token_of,
            specials,
        };
        let ids = [specials.bos, specials.eos, specials.pad, specials.sep];
        let distinct: BTreeSet<_> = ids.iter().collect();
        if distinct.len() != 4 || ids.iter().any(|&i| i as usize >= v.len()) {
            return Err(Error::Data("special ids must be distinct and in range".into()));
        }
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.token_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_of.is_empty()
    }

    pub fn id(&self, word: &str) -> Result<TokenId> {
        self.id_of
            .get(word)
            .copied()
            .ok_or_else(|| Error::UnknownWord(word.to_string()))
    }

    pub fn token(&self, id: TokenId) -> Result<&str> {
        self.token_of
            .get(id as usize)
            .map(|s| s.as_str())
            .ok_or(Error::TokenOutOfRange {
                id: id as usize,
                vocab_size: self.len(),
            })
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        let s = self.specials;
        id == s.bos || id == s.eos || id == s.pad || id == s.sep
    }

    /// Word ids of `text` without any special tokens.
    pub fn words(&self, text: &str) -> Result<TokenSequence> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    /// Word ids followed by eos.
    pub fn encode(&self, text: &str) -> Result<TokenSequence> {
        let mut ids = self.words(text)?;
        ids.push(self.specials.eos);
        Ok(ids)
    }

    /// `bos question sep`, the conditioning context for an answer.
    pub fn encode_prompt(&self, question: &str) -> Result<TokenSequence> {
        let mut ids = vec![self.specials.bos];
        ids.extend(self.words(question)?);
        ids.push(self.specials.sep);
        Ok(ids)
    }

    /// Joins non-special tokens with spaces, stopping at the first eos.
    pub fn decode_text(&self, tokens: &[TokenId]) -> Result<String> {
        let mut out = Vec::new();
        for &t in tokens {
            if t == self.specials.eos {
                break;
            }
            let w = self.token(t)?;
            if !self.is_special(t) {
                out.push(w);
            }
        }
        Ok(out.join(" "))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&VocabFile {
            specials: self.specials,
            tokens: self.token_of.clone(),
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: VocabFile = serde_json::from_str(s).map_err(|e| Error::Data(format!("vocab: {e}")))?;
        Self::from_tokens(f.tokens, f.specials)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}
