//! Curated harmful lemma list and a closed-table lemmatizer.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use crate::error::Result;
use crate::text::tokenize;

const DEFAULT_LEMMAS: &[&str] = &[
    "punch", "kick", "hit", "strike", "stab", "shoot", "slap", "fight", "attack", "choke", "strangle", "kill",
    "murder", "shove", "headbutt", "elbow", "knee", "assault", "smash", "beat",
];

const DEFAULT_PHRASES: &[&str] = &[
    "throw a punch",
    "beat up",
    "knock out",
    "knock down",
    "hold a knife",
    "swing a sword",
    "pull the trigger",
];

/// Irregular forms mapped to their lemma.
const IRREGULAR: &[(&str, &str)] = &[
    ("threw", "throw"),
    ("thrown", "throw"),
    ("struck", "strike"),
    ("stricken", "strike"),
    ("shot", "shoot"),
    ("beaten", "beat"),
    ("fought", "fight"),
    ("held", "hold"),
    ("swung", "swing"),
    ("knelt", "kneel"),
];

/// Single-word lemmas plus multi-word phrases, phrases checked first and
/// longest first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LemmaList {
    lemmas: BTreeSet<String>,
    phrases: Vec<Vec<String>>,
    known: BTreeSet<String>,
    irregular: BTreeMap<String, String>,
}

impl Default for LemmaList {
    fn default() -> Self {
        Self::default_list()
    }
}

impl LemmaList {
    /// Builds a list from raw entries; each is tokenized and lemmatized.
    /// One-token entries become lemmas, longer ones phrases.
    pub fn new<I, T>(entries: I) -> Self
    where
        I: IntoIterator<Item = T>,
        T: AsRef<str>,
    {
        let raw: Vec<Vec<String>> = entries
            .into_iter()
            .map(|e| tokenize(e.as_ref()))
            .filter(|t| !t.is_empty())
            .collect();
        let irregular: BTreeMap<String, String> =
            IRREGULAR.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect();
        let mut known: BTreeSet<String> = raw.iter().flatten().cloned().collect();
        known.extend(irregular.values().cloned());
        let mut out = Self {
            lemmas: BTreeSet::new(),
            phrases: Vec::new(),
            known,
            irregular,
        };
        let lemmatized: Vec<Vec<String>> = raw.iter().map(|t| out.lemmatize_all(t)).collect();
        out.known.extend(lemmatized.iter().flatten().cloned());
        for tokens in lemmatized {
            if tokens.len() == 1 {
                out.lemmas.insert(tokens.into_iter().next().expect("one token"));
            } else if !out.phrases.contains(&tokens) {
                out.phrases.push(tokens);
            }
        }
        out.phrases.sort_by(|a, b| b.len().cmp(&a.len()));
        out
    }

    pub fn empty() -> Self {
        Self::new(std::iter::empty::<&str>())
    }

    /// The shipped list of violent action lemmas and phrases.
    pub fn default_list() -> Self {
        Self::new(DEFAULT_LEMMAS.iter().chain(DEFAULT_PHRASES))
    }

    /// One entry per line, phrases space-separated; blank lines and lines
    /// starting with `#` are skipped.
    pub fn parse(text: &str) -> Self {
        Self::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#')),
        )
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Ok(Self::parse(&fs::read_to_string(path)?))
    }

    pub fn lemmas(&self) -> impl Iterator<Item = &str> {
        self.lemmas.iter().map(String::as_str)
    }

    pub fn phrases(&self) -> &[Vec<String>] {
        &self.phrases
    }

    /// Every entry as text: lemmas, then phrases.
    pub fn entries(&self) -> Vec<String> {
        self.lemmas
            .iter()
            .cloned()
            .chain(self.phrases.iter().map(|p| p.join(" ")))
            .collect()
    }

    pub fn is_empty(&self) -> bool {
        self.lemmas.is_empty() && self.phrases.is_empty()
    }

    /// Maps an inflected token to a lemma the list knows, or returns it
    /// unchanged.
    pub fn lemmatize(&self, word: &str) -> String {
        if self.known.contains(word) {
            return word.to_string();
        }
        if let Some(l) = self.irregular.get(word) {
            return l.clone();
        }
        for cand in candidates(word) {
            if cand.len() >= 3 && self.known.contains(&cand) {
                return cand;
            }
        }
        word.to_string()
    }

    pub fn lemmatize_all(&self, tokens: &[String]) -> Vec<String> {
        tokens.iter().map(|t| self.lemmatize(t)).collect()
    }

    /// Matches at token `i`: the longest phrase first, then a single lemma.
    pub(crate) fn match_at(&self, lemmas: &[String], i: usize) -> Option<(String, usize)> {
        for p in &self.phrases {
            if lemmas[i..].starts_with(p) {
                return Some((p.join(" "), p.len()));
            }
        }
        self.lemmas.contains(&lemmas[i]).then(|| (lemmas[i].clone(), 1))
    }
}

fn candidates(word: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut push_stem = |stem: &str| {
        out.push(stem.to_string());
        out.push(format!("{stem}e"));
        let b = stem.as_bytes();
        if b.len() >= 2 && b[b.len() - 1] == b[b.len() - 2] {
            out.push(stem[..stem.len() - 1].to_string());
        }
    };
    if let Some(s) = word.strip_suffix("ing") {
        push_stem(s);
    }
    if let Some(s) = word.strip_suffix("ed") {
        push_stem(s);
    }
    if let Some(s) = word.strip_suffix("ies") {
        out.push(format!("{s}y"));
    }
    if let Some(s) = word.strip_suffix("es") {
        out.push(s.to_string());
    }
    if let Some(s) = word.strip_suffix('s') {
        out.push(s.to_string());
    }
    if let Some(s) = word.strip_suffix('d') {
        out.push(s.to_string());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inflections_reduce_to_lemmas() {
        let l = LemmaList::default_list();
        for (w, lemma) in [
            ("punches", "punch"),
            ("punched", "punch"),
            ("punching", "punch"),
            ("kicking", "kick"),
            ("kicks", "kick"),
            ("stabbing", "stab"),
            ("hitting", "hit"),
            ("striking", "strike"),
            ("struck", "strike"),
            ("threw", "throw"),
            ("throws", "throw"),
            ("strangled", "strangle"),
            ("waves", "waves"),
            ("as", "as"),
        ] {
            assert_eq!(l.lemmatize(w), lemma, "{w}");
        }
    }

    #[test]
    fn phrases_are_ordered_longest_first_and_parse_skips_comments() {
        let l = LemmaList::parse("# header\npunch\n\nthrow a punch\nbeat up\n");
        assert_eq!(l.lemmas().collect::<Vec<_>>(), ["punch"]);
        assert_eq!(l.phrases()[0], ["throw", "a", "punch"]);
        assert_eq!(l.entries().len(), 3);
        assert!(LemmaList::empty().is_empty());
    }
}
