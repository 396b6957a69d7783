//! Caption tokenization and the closed vocabulary of the toy text encoder.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

/// Reserved id for out-of-vocabulary tokens.
pub const UNK: usize = 0;
pub const UNK_TOKEN: &str = "<unk>";

/// Lowercases and splits on anything that is not alphanumeric.
pub fn tokenize(caption: &str) -> Vec<String> {
    caption
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.words
    }
}

impl Vocab {
    /// Vocabulary over the words of `captions`, sorted, after the reserved token.
    pub fn from_captions<I, T>(captions: I) -> Self
    where
        I: IntoIterator<Item = T>,
        T: AsRef<str>,
    {
        let set: BTreeSet<String> = captions
            .into_iter()
            .flat_map(|c| tokenize(c.as_ref()))
            .collect();
        let mut words = vec![UNK_TOKEN.to_string()];
        words.extend(set);
        words.into()
    }

    /// Template words of the synthetic corpus plus the default harmful lemmas.
    pub fn builtin() -> Self {
        let mut captions = crate::motion::synth::all_captions();
        captions.extend(crate::safety::LemmaList::default_list().entries());
        captions.push("a person waves friendly with the left hand and jumps".into());
        Self::from_captions(captions)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn encode(&self, caption: &str) -> Vec<usize> {
        tokenize(caption).iter().map(|t| self.id(t)).collect()
    }

    pub fn word(&self, id: usize) -> &str {
        self.words.get(id).map_or(UNK_TOKEN, String::as_str)
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.word(i)).collect::<Vec<_>>().join(" ")
    }
}
