use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenegen::{grammar_tokens, Catalog};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
const PAD_TOKEN: &str = "<pad>";
const UNK_TOKEN: &str = "<unk>";

/// Dense token ids; `<pad>` is 0 and `<unk>` is 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "VocabTokens", into = "VocabTokens")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabTokens {
    tokens: Vec<String>,
}

impl From<VocabTokens> for Vocabulary {
    fn from(v: VocabTokens) -> Self {
        let index = v
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self {
            tokens: v.tokens,
            index,
        }
    }
}

impl From<Vocabulary> for VocabTokens {
    fn from(v: Vocabulary) -> Self {
        Self { tokens: v.tokens }
    }
}

impl Vocabulary {
    pub fn from_tokens<I: IntoIterator<Item = String>>(words: I) -> Self {
        let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        for w in words {
            if !tokens.contains(&w) {
                tokens.push(w);
            }
        }
        VocabTokens { tokens }.into()
    }

    /// Every word the instruction grammar can produce for `catalog`.
    pub fn from_grammar(catalog: &Catalog) -> Self {
        Self::from_tokens(grammar_tokens(catalog))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Lowercase, split on anything that is not alphanumeric, map to ids.
pub fn tokenize(text: &str, vocab: &Vocabulary) -> Result<Vec<u32>> {
    let ids: Vec<u32> = text
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| vocab.id(&w.to_lowercase()))
        .collect();
    if ids.is_empty() {
        return Err(Error::Contract(format!(
            "instruction {text:?} contains no tokens"
        )));
    }
    Ok(ids)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grammar_words_are_known() {
        let v = Vocabulary::from_grammar(&Catalog::default());
        let ids = tokenize("Add a red square", &v).unwrap();
        assert_eq!(ids.len(), 4);
        assert!(ids.iter().all(|&i| i != UNK && i != PAD));
    }

    #[test]
    fn unknown_word_is_unk() {
        let v = Vocabulary::from_grammar(&Catalog::default());
        assert_eq!(tokenize("xyzzy", &v).unwrap(), vec![UNK]);
    }

    #[test]
    fn punctuation_splits_and_empty_is_rejected() {
        let v = Vocabulary::from_grammar(&Catalog::default());
        assert_eq!(
            tokenize("add, a RED square!", &v).unwrap(),
            tokenize("add a red square", &v).unwrap()
        );
        assert!(matches!(tokenize("  ?! ", &v), Err(Error::Contract(_))));
    }

    #[test]
    fn serde_round_trip_keeps_ids() {
        let v = Vocabulary::from_grammar(&Catalog::default());
        let back: Vocabulary = serde_json::from_str(&serde_json::to_string(&v).unwrap()).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.id("red"), v.id("red"));
        assert_eq!(back.token(PAD), Some("<pad>"));
    }
}
