//! Word-level vocabulary with reserved padding, end-of-sequence and
//! separator tokens.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = usize;

pub const PAD: &str = "<pad>";
pub const EOS: &str = "</s>";
/// Separates the predicted label from the free-text rationale.
pub const SEP: &str = "explanation:";

pub const PAD_ID: TokenId = 0;
pub const EOS_ID: TokenId = 1;
pub const SEP_ID: TokenId = 2;

/// Bijective token <-> id mapping. Ids 0..3 are always PAD, EOS, SEP.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    /// Builds a vocabulary from arbitrary tokens; duplicates and reserved
    /// tokens in `words` are skipped, first occurrence wins.
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut vocab = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for reserved in [PAD, EOS, SEP] {
            vocab.push(reserved);
        }
        for w in words {
            vocab.push(w.as_ref());
        }
        vocab
    }

    fn push(&mut self, token: &str) {
        if !self.index.contains_key(token) {
            self.index.insert(token.to_string(), self.tokens.len());
            self.tokens.push(token.to_string());
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Result<TokenId> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| Error::Vocab(token.to_string()))
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<TokenId>> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    /// Ids outside the table decode to `<unk:ID>` rather than failing, since
    /// decoded ids always come from a model over this vocabulary.
    pub fn decode(&self, ids: &[TokenId]) -> Vec<String> {
        ids.iter()
            .map(|&id| match self.token(id) {
                Some(t) => t.to_string(),
                None => format!("<unk:{id}>"),
            })
            .collect()
    }
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 3 || tokens[0] != PAD || tokens[1] != EOS || tokens[2] != SEP {
            return Err(Error::Data(
                "vocabulary must start with the reserved tokens".into(),
            ));
        }
        let vocab = Vocab::new(tokens.iter().skip(3));
        if vocab.len() != tokens.len() {
            return Err(Error::Data("vocabulary contains duplicate tokens".into()));
        }
        Ok(vocab)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}
