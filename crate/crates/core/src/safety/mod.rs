//! Three-level toxicity classification, forget/retain partitioning and
//! level-routed caption rewriting.
//!
//! The rule backend lemmatizes a caption, matches phrases before single
//! lemmas, and grades by how many clauses carry a match: none is level 1,
//! at most half is level 2, more is level 3.

mod lemma;
mod remote;

use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusEntry, ToxicityLevel};
use crate::error::{Error, Result};
use crate::text::tokenize;

pub use lemma::LemmaList;
pub use remote::{RemoteAgent, AGENT_ENV, DEFAULT_TIMEOUT};

const CONJUNCTIONS: &[&str] = &["and", "then", "while", "but", "before", "after"];
const CLAUSE_PUNCT: &[char] = &[',', ';', '.', '!', '?', ':'];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Rules,
    Remote,
}

/// A matched lemma or phrase. `span` is a token range in the caption and
/// `clause` the clause it fell in; the remote backend reports neither.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Evidence {
    pub term: String,
    pub span: Option<(usize, usize)>,
    pub clause: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToxicityVerdict {
    pub level: ToxicityLevel,
    pub evidence: Vec<Evidence>,
    pub backend: Backend,
    /// Set when the remote backend failed and rules were used instead.
    pub warning: Option<String>,
}

/// Classification backend.
#[derive(Debug, Clone)]
pub enum Classifier {
    Rules(LemmaList),
    Remote(RemoteAgent),
}

impl Classifier {
    pub fn classify(&self, caption: &str) -> Result<ToxicityVerdict> {
        match self {
            Classifier::Rules(l) => rules_verdict(caption, l),
            Classifier::Remote(agent) => agent.classify(caption),
        }
    }
}

pub fn classify(caption: &str, backend: &Classifier) -> Result<ToxicityVerdict> {
    backend.classify(caption)
}

/// Tokens with the index of the clause each belongs to.
fn clauses(caption: &str) -> (Vec<String>, Vec<usize>, usize) {
    let mut tokens = Vec::new();
    let mut clause_of = Vec::new();
    let mut clause = 0;
    let mut open = false;
    for chunk in caption.split(CLAUSE_PUNCT) {
        for tok in tokenize(chunk) {
            if CONJUNCTIONS.contains(&tok.as_str()) {
                if open {
                    clause += 1;
                    open = false;
                }
                tokens.push(tok);
                clause_of.push(usize::MAX);
                continue;
            }
            tokens.push(tok);
            clause_of.push(clause);
            open = true;
        }
        if open {
            clause += 1;
            open = false;
        }
    }
    (tokens, clause_of, clause)
}

pub(crate) fn rules_verdict(caption: &str, lemmas: &LemmaList) -> Result<ToxicityVerdict> {
    let (tokens, clause_of, n_clauses) = clauses(caption);
    if tokens.is_empty() {
        return Err(Error::EmptyCondition);
    }
    let lem = lemmas.lemmatize_all(&tokens);
    let mut evidence = Vec::new();
    let mut i = 0;
    while i < lem.len() {
        match lemmas.match_at(&lem, i) {
            Some((term, len)) => {
                let clause = clause_of[i..i + len].iter().copied().find(|&c| c != usize::MAX);
                evidence.push(Evidence {
                    term,
                    span: Some((i, i + len)),
                    clause,
                });
                i += len;
            }
            None => i += 1,
        }
    }
    let mut hit: Vec<usize> = evidence.iter().filter_map(|e| e.clause).collect();
    hit.sort_unstable();
    hit.dedup();
    let level = if evidence.is_empty() {
        ToxicityLevel::Safe
    } else if 2 * hit.len() <= n_clauses.max(1) && !hit.is_empty() {
        ToxicityLevel::Risky
    } else {
        ToxicityLevel::Unsafe
    };
    Ok(ToxicityVerdict {
        level,
        evidence,
        backend: Backend::Rules,
        warning: None,
    })
}

/// Splits entries into (forget, retain): forget iff the caption has any
/// match. Both sides are sorted by id.
pub fn partition<'a, S>(
    corpus: &'a [CorpusEntry<S>],
    lemmas: &LemmaList,
) -> (Vec<&'a CorpusEntry<S>>, Vec<&'a CorpusEntry<S>>) {
    let (mut forget, mut retain): (Vec<_>, Vec<_>) = corpus.iter().partition(|e| {
        rules_verdict(&e.caption, lemmas)
            .map(|v| !v.evidence.is_empty())
            .unwrap_or(false)
    });
    forget.sort_by(|a, b| a.id.cmp(&b.id));
    retain.sort_by(|a, b| a.id.cmp(&b.id));
    (forget, retain)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewriteScope {
    /// Only the evidence spans change.
    Partial,
    /// The whole caption is replaced.
    Whole,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RewriteRequest<'a> {
    pub caption: &'a str,
    pub level: ToxicityLevel,
    pub scope: RewriteScope,
    /// Text to rewrite: the evidence spans, or the whole caption.
    pub targets: Vec<String>,
}

/// Something that turns a harmful caption into a benign one.
pub trait Rewriter {
    fn rewrite(&self, req: &RewriteRequest<'_>) -> Result<String>;
}

/// Offline rewriter replacing words from a fixed table.
#[derive(Debug, Clone, Default)]
pub struct SubstitutionRewriter {
    pub table: Vec<(String, String)>,
}

impl Rewriter for SubstitutionRewriter {
    fn rewrite(&self, req: &RewriteRequest<'_>) -> Result<String> {
        let words: Vec<String> = req
            .caption
            .split_whitespace()
            .map(|w| {
                self.table
                    .iter()
                    .find(|(from, _)| from.eq_ignore_ascii_case(w))
                    .map_or_else(|| w.to_string(), |(_, to)| to.clone())
            })
            .collect();
        Ok(words.join(" "))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewriteStatus {
    Passthrough,
    Rewritten,
    /// The client returned the caption unchanged.
    Ineffective,
    Failed,
}

/// Provenance of one dispatch, written as one manifest line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewriteRecord {
    pub original: String,
    pub level: ToxicityLevel,
    pub rewritten: String,
    pub status: RewriteStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Routes by level: level 1 passes through without a client call, level 2
/// asks for the evidence spans only, level 3 for the whole caption. A
/// client failure leaves the caption as is.
pub fn rewrite_dispatch(caption: &str, verdict: &ToxicityVerdict, client: &dyn Rewriter) -> RewriteRecord {
    let record = |rewritten: String, status, error| RewriteRecord {
        original: caption.to_string(),
        level: verdict.level,
        rewritten,
        status,
        error,
    };
    let (scope, targets) = match verdict.level {
        ToxicityLevel::Safe => return record(caption.to_string(), RewriteStatus::Passthrough, None),
        ToxicityLevel::Risky => {
            let tokens = tokenize(caption);
            let targets = verdict
                .evidence
                .iter()
                .map(|e| match e.span {
                    Some((a, b)) if b <= tokens.len() => tokens[a..b].join(" "),
                    _ => e.term.clone(),
                })
                .collect();
            (RewriteScope::Partial, targets)
        }
        ToxicityLevel::Unsafe => (RewriteScope::Whole, vec![caption.to_string()]),
    };
    let req = RewriteRequest {
        caption,
        level: verdict.level,
        scope,
        targets,
    };
    match client.rewrite(&req) {
        Ok(text) if text.trim() == caption.trim() => record(text, RewriteStatus::Ineffective, None),
        Ok(text) => record(text, RewriteStatus::Rewritten, None),
        Err(e) => record(caption.to_string(), RewriteStatus::Failed, Some(e.to_string())),
    }
}
