//! Weak labelling: page-gender pronouns and page aliases become mentions
//! of the page entity.

use std::collections::BTreeMap;

use crate::corpus::{tokenize, Corpus, Gender, Mention, Page, Sentence};
use crate::kb::StructuredKB;

pub const MALE_PRONOUNS: &[&str] = &["he", "him", "his", "himself"];
pub const FEMALE_PRONOUNS: &[&str] = &["she", "her", "hers", "herself"];

fn pronouns(g: Gender) -> &'static [&'static str] {
    match g {
        Gender::Male => MALE_PRONOUNS,
        Gender::Female => FEMALE_PRONOUNS,
        Gender::Other => &[],
    }
}

/// Single-token weak mentions for free pronoun tokens matching the page's
/// gender. Pages with no gender or `Other` get nothing.
pub fn pronoun_label(page: &Page, sentence: &Sentence) -> Vec<Mention> {
    let Some(lex) = page.gender.map(pronouns) else {
        return Vec::new();
    };
    sentence
        .tokens
        .iter()
        .enumerate()
        .filter(|(i, t)| lex.contains(&t.to_lowercase().as_str()) && sentence.is_free(*i, i + 1))
        .map(|(i, _)| Mention {
            start: i,
            end: i + 1,
            gold: page.page.clone(),
            weak: true,
        })
        .collect()
}

/// Case-insensitive, token-aligned matches of the page's aliases. Longer
/// aliases win; matches never overlap each other or existing mentions.
pub fn alias_label(page: &Page, sentence: &Sentence) -> Vec<Mention> {
    let mut aliases: Vec<Vec<String>> = page
        .aliases
        .iter()
        .map(|a| tokenize(a))
        .filter(|a| !a.is_empty())
        .collect();
    aliases.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));
    aliases.dedup();
    let toks: Vec<String> = sentence.tokens.iter().map(|t| t.to_lowercase()).collect();
    let mut taken: Vec<(usize, usize)> = sentence.mentions.iter().map(|m| (m.start, m.end)).collect();
    let mut out = Vec::new();
    for alias in &aliases {
        let n = alias.len();
        if n > toks.len() {
            continue;
        }
        for start in 0..=toks.len() - n {
            let end = start + n;
            if toks[start..end] != alias[..] || taken.iter().any(|&(s, e)| s < end && start < e) {
                continue;
            }
            taken.push((start, end));
            out.push(Mention {
                start,
                end,
                gold: page.page.clone(),
                weak: true,
            });
        }
    }
    out.sort_by_key(|m| m.start);
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeakStats {
    pub before: usize,
    pub after: usize,
    pub ratio: f64,
}

/// Applies alias then pronoun labelling to every sentence whose page is
/// known. Sentences whose page entity is missing from `kb` are left alone.
/// Mentions within a sentence end up sorted by span.
pub fn weak_label_corpus(corpus: &Corpus, pages: &[Page], kb: &StructuredKB) -> (Corpus, WeakStats) {
    let by_key: BTreeMap<&str, &Page> = pages.iter().map(|p| (p.page.as_str(), p)).collect();
    let mut out = corpus.clone();
    for s in &mut out.sentences {
        let Some(page) = s.page.as_deref().and_then(|k| by_key.get(k)).copied() else {
            continue;
        };
        if kb.id(&page.page).is_none() {
            continue;
        }
        let aliases = alias_label(page, s);
        if !aliases.is_empty() {
            s.mentions.extend(aliases);
            s.mentions.sort_by_key(|m| (m.start, m.end));
        }
        let prons = pronoun_label(page, s);
        if !prons.is_empty() {
            s.mentions.extend(prons);
            s.mentions.sort_by_key(|m| (m.start, m.end));
        }
    }
    let before = corpus.mention_count();
    let after = out.mention_count();
    let ratio = if before == 0 { 1.0 } else { after as f64 / before as f64 };
    (out, WeakStats { before, after, ratio })
}
