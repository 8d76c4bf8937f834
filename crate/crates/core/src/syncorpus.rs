//! Seeded synthetic knowledge base and corpus.
//!
//! Entities come in alias groups of `k_ambiguity` members with distinct
//! types and distinct relations, so a single structural cue always singles
//! out one candidate. Every sentence plants exactly one pattern:
//!
//! * affordance: a keyword tied to the gold entity's type,
//! * kg: a relation keyword plus a second mention the gold is linked to,
//! * consistency: three listed mentions whose only shared type is the gold
//!   type,
//! * memorization: a keyword tied to the gold entity itself.
//!
//! Unseen entities never carry a gold label in the training split; in dev
//! and test they appear only in the three structural patterns.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, CorpusError, Mention, Sentence};
use crate::kb::{EntityId, KbPaths, StructuredKB};
use crate::rng;

#[derive(Debug, Error)]
pub enum GenError {
    #[error("infeasible parameters: {0}")]
    Infeasible(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pattern {
    Affordance,
    Kg,
    Consistency,
    Memorization,
}

impl Pattern {
    pub const ALL: [Pattern; 4] = [
        Pattern::Affordance,
        Pattern::Kg,
        Pattern::Consistency,
        Pattern::Memorization,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Pattern::Affordance => "affordance",
            Pattern::Kg => "kg",
            Pattern::Consistency => "consistency",
            Pattern::Memorization => "memorization",
        }
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Pattern {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Pattern::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| format!("unknown pattern {s:?}"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatternMix {
    pub affordance: f64,
    pub kg: f64,
    pub consistency: f64,
    pub memorization: f64,
}

impl Default for PatternMix {
    fn default() -> Self {
        Self {
            affordance: 0.6,
            kg: 0.2,
            consistency: 0.1,
            memorization: 0.1,
        }
    }
}

impl PatternMix {
    pub fn get(&self, p: Pattern) -> f64 {
        match p {
            Pattern::Affordance => self.affordance,
            Pattern::Kg => self.kg,
            Pattern::Consistency => self.consistency,
            Pattern::Memorization => self.memorization,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    pub n_entities: usize,
    pub n_types: usize,
    pub n_relations: usize,
    pub n_sentences: usize,
    pub k_ambiguity: usize,
    pub zipf_exponent: f64,
    pub mix: PatternMix,
    pub unseen_fraction: f64,
    /// Share of sentences in the training split; the rest is halved into
    /// dev and test.
    pub train_fraction: f64,
    /// Chance that a structural dev/test sentence targets an unseen entity.
    pub unseen_target: f64,
    pub coarse_types: usize,
    pub seed: u64,
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            n_entities: 500,
            n_types: 20,
            n_relations: 10,
            n_sentences: 5000,
            k_ambiguity: 5,
            zipf_exponent: 1.0,
            mix: PatternMix::default(),
            unseen_fraction: 0.1,
            train_fraction: 0.8,
            unseen_target: 0.5,
            coarse_types: 6,
            seed: 7,
        }
    }
}

impl GenParams {
    pub fn validate(&self) -> Result<(), GenError> {
        let bad = |m: String| Err(GenError::Infeasible(m));
        let k = self.k_ambiguity;
        if k < 2 {
            return bad("k_ambiguity must be at least 2".into());
        }
        if k > self.n_entities {
            return bad(format!("k_ambiguity {k} exceeds n_entities {}", self.n_entities));
        }
        if !self.n_entities.is_multiple_of(k) {
            return bad(format!(
                "n_entities {} is not a multiple of k_ambiguity {k}",
                self.n_entities
            ));
        }
        if k > self.n_types {
            return bad(format!(
                "alias groups need {k} distinct types, only {} exist",
                self.n_types
            ));
        }
        if k > self.n_relations {
            return bad(format!(
                "alias groups need {k} distinct relations, only {} exist",
                self.n_relations
            ));
        }
        if self.n_entities / k < 3 {
            return bad("at least three alias groups are needed".into());
        }
        let total: f64 = Pattern::ALL.iter().map(|&p| self.mix.get(p)).sum();
        if (total - 1.0).abs() > 1e-9 || Pattern::ALL.iter().any(|&p| self.mix.get(p) < 0.0) {
            return bad("pattern mix must be non-negative and sum to 1".into());
        }
        if !(0.0..1.0).contains(&self.unseen_fraction) {
            return bad("unseen_fraction must be in [0, 1)".into());
        }
        if self.unseen_count() > self.n_entities / k {
            return bad("at most one unseen entity per alias group".into());
        }
        if !(0.0..=1.0).contains(&self.train_fraction) || !(0.0..=1.0).contains(&self.unseen_target) {
            return bad("fractions must be in [0, 1]".into());
        }
        if self.unseen_count() == 0 && self.unseen_target > 0.0 {
            return bad("unseen_target needs at least one unseen entity".into());
        }
        if self.coarse_types == 0 || !self.zipf_exponent.is_finite() || self.zipf_exponent < 0.0 {
            return bad("coarse_types must be positive and zipf_exponent non-negative".into());
        }
        Ok(())
    }

    pub fn unseen_count(&self) -> usize {
        (self.unseen_fraction * self.n_entities as f64).round() as usize
    }
}

/// Planted vocabularies; pairwise disjoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CueVocab {
    pub type_cues: Vec<Vec<String>>,
    pub relation_cues: Vec<Vec<String>>,
    pub entity_cues: Vec<String>,
    pub list_words: Vec<String>,
    pub filler: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynKb {
    pub keys: Vec<String>,
    pub groups: Vec<Vec<usize>>,
    pub group_of: Vec<usize>,
    /// Alias per group.
    pub aliases: Vec<String>,
    pub entity_type: Vec<u32>,
    pub coarse: Vec<u32>,
    /// `(subject, relation, object)`
    pub triples: Vec<(usize, u32, usize)>,
    pub prior: Vec<u64>,
    /// Sampling weight for gold labels.
    pub weight: Vec<f64>,
    pub unseen: Vec<bool>,
    pub cues: CueVocab,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnswerRow {
    pub sentence_id: u64,
    pub pattern: Pattern,
    pub gold_keys: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenManifest {
    pub params: GenParams,
    pub cues: CueVocab,
    pub pattern_counts: BTreeMap<String, usize>,
    pub split_sizes: BTreeMap<String, usize>,
    pub unseen_entities: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynCorpus {
    pub train: Corpus,
    pub dev: Corpus,
    pub test: Corpus,
    pub answers: Vec<AnswerRow>,
}

const FILLER: &[&str] = &[
    "the", "a", "was", "in", "with", "at", "of", "to", "on", "from", "by", "this", "that", "it", "is", "then", "when",
    "after", "before", "near", "very", "new", "old", "some", "many", "one", "two", "its", "their", "later",
];

const LIST_WORDS: &[&str] = &["or", "either", ","];
const TYPE_CUES: usize = 1;
const RELATION_CUES: usize = 1;

fn pseudo_word(rng: &mut ChaCha8Rng, used: &mut HashSet<String>) -> String {
    const C: &[u8] = b"bdfgklmnprstvz";
    const V: &[u8] = b"aeiou";
    loop {
        let syllables = rng.random_range(2..=3);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push(*C.choose(rng).expect("non-empty") as char);
            w.push(*V.choose(rng).expect("non-empty") as char);
        }
        if rng.random_bool(0.5) {
            w.push(*C.choose(rng).expect("non-empty") as char);
        }
        if used.insert(w.clone()) {
            return w;
        }
    }
}

pub fn generate_kb(params: &GenParams) -> Result<SynKb, GenError> {
    params.validate()?;
    let mut r = rng::stream(params.seed, "syncorpus.kb");
    let n = params.n_entities;
    let k = params.k_ambiguity;
    let n_groups = n / k;

    let mut used: HashSet<String> = FILLER.iter().chain(LIST_WORDS).map(|s| s.to_string()).collect();
    let cues = CueVocab {
        type_cues: (0..params.n_types)
            .map(|_| (0..TYPE_CUES).map(|_| pseudo_word(&mut r, &mut used)).collect())
            .collect(),
        relation_cues: (0..params.n_relations)
            .map(|_| (0..RELATION_CUES).map(|_| pseudo_word(&mut r, &mut used)).collect())
            .collect(),
        entity_cues: (0..n).map(|_| pseudo_word(&mut r, &mut used)).collect(),
        list_words: LIST_WORDS.iter().map(|s| s.to_string()).collect(),
        filler: FILLER.iter().map(|s| s.to_string()).collect(),
    };
    let aliases: Vec<String> = (0..n_groups)
        .map(|_| {
            if r.random_bool(0.3) {
                format!("{} {}", pseudo_word(&mut r, &mut used), pseudo_word(&mut r, &mut used))
            } else {
                pseudo_word(&mut r, &mut used)
            }
        })
        .collect();

    let keys: Vec<String> = (0..n).map(|i| format!("ent{i:04}")).collect();
    let groups: Vec<Vec<usize>> = (0..n_groups).map(|g| (g * k..(g + 1) * k).collect()).collect();
    let group_of: Vec<usize> = (0..n).map(|e| e / k).collect();

    // One relation per entity, fixed by its type, so that type and relation
    // together never single out an entity. Types within a group are chosen
    // with distinct relations.
    let n_rel = params.n_relations as u32;
    let mut entity_type = vec![0u32; n];
    for g in &groups {
        let mut types: Vec<u32> = (0..params.n_types as u32).collect();
        types.shuffle(&mut r);
        let mut picked: Vec<u32> = Vec::with_capacity(k);
        for t in types {
            if picked.len() < k && !picked.iter().any(|&p| p % n_rel == t % n_rel) {
                picked.push(t);
            }
        }
        for (&e, &t) in g.iter().zip(&picked) {
            entity_type[e] = t;
        }
    }
    let relation_of = |e: usize| entity_type[e] % n_rel;
    let coarse = entity_type.iter().map(|&t| t % params.coarse_types as u32).collect();

    let mut rank: Vec<usize> = (0..n).collect();
    rank.shuffle(&mut r);
    let weight: Vec<f64> = rank
        .iter()
        .map(|&rk| 1.0 / ((rk + 1) as f64).powf(params.zipf_exponent))
        .collect();
    let w_max = weight.iter().cloned().fold(0.0, f64::max);
    let prior: Vec<u64> = weight
        .iter()
        .map(|w| ((1000.0 * w / w_max).round() as u64).max(1))
        .collect();

    // Unseen entities: at most one per group and never the group's most
    // probable member.
    let mut unseen = vec![false; n];
    let mut order: Vec<usize> = (0..n_groups).collect();
    order.shuffle(&mut r);
    for &g in order.iter().take(params.unseen_count()) {
        let top = *groups[g]
            .iter()
            .max_by(|&&a, &&b| prior[a].cmp(&prior[b]).then(b.cmp(&a)))
            .expect("group");
        let rest: Vec<usize> = groups[g].iter().copied().filter(|&e| e != top).collect();
        unseen[*rest.choose(&mut r).expect("k >= 2")] = true;
    }

    // Objects are seen entities in other groups; each group pair carries
    // at most one edge so a linked pair is always unique.
    let seen: Vec<usize> = (0..n).filter(|&e| !unseen[e]).collect();
    let mut linked_groups: HashSet<(usize, usize)> = HashSet::new();
    let mut triples = Vec::new();
    for e in 0..n {
        for _ in 0..200 {
            let o = *seen.choose(&mut r).expect("seen entities");
            let (ga, gb) = (group_of[e].min(group_of[o]), group_of[e].max(group_of[o]));
            if ga != gb && linked_groups.insert((ga, gb)) {
                triples.push((e, relation_of(e), o));
                break;
            }
        }
    }

    Ok(SynKb {
        keys,
        groups,
        group_of,
        aliases,
        entity_type,
        coarse,
        triples,
        prior,
        weight,
        unseen,
        cues,
    })
}

impl SynKb {
    pub fn write(&self, dir: &Path) -> Result<(), GenError> {
        fs::create_dir_all(dir).map_err(|source| GenError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        let mut aliases = String::new();
        for (g, members) in self.groups.iter().enumerate() {
            for &e in members {
                aliases.push_str(&format!("{}\t{}\t{}\n", self.aliases[g], self.keys[e], self.prior[e]));
            }
        }
        let types: String = (0..self.keys.len())
            .map(|e| format!("{}\t{}\n", self.keys[e], self.entity_type[e]))
            .collect();
        let coarse: String = (0..self.keys.len())
            .map(|e| format!("{}\t{}\n", self.keys[e], self.coarse[e]))
            .collect();
        let relations: String = self
            .triples
            .iter()
            .map(|&(s, rel, o)| format!("{}\t{}\t{}\n", self.keys[s], rel, self.keys[o]))
            .collect();
        for (name, text) in [
            ("aliases.tsv", aliases),
            ("types.tsv", types),
            ("coarse.tsv", coarse),
            ("relations.tsv", relations),
        ] {
            write_file(&dir.join(name), &text)?;
        }
        Ok(())
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), GenError> {
    fs::write(path, text).map_err(|source| GenError::Io {
        path: path.display().to_string(),
        source,
    })
}

enum Chunk {
    Words(Vec<String>),
    Mention(String, usize),
    List(Vec<(String, usize)>),
}

/// Spreads `filler` words over the gaps between chunks.
fn assemble(
    r: &mut ChaCha8Rng,
    chunks: Vec<Chunk>,
    filler: &[String],
    keys: &[String],
    list_word: &str,
) -> (Vec<String>, Vec<Mention>) {
    let n_fill = r.random_range(3..=6);
    let mut gaps = vec![0usize; chunks.len() + 1];
    for _ in 0..n_fill {
        let g = r.random_range(0..gaps.len());
        gaps[g] += 1;
    }
    let mut tokens: Vec<String> = Vec::new();
    let mut mentions = Vec::new();
    let mut push_mention = |tokens: &mut Vec<String>, alias: &str, e: usize| {
        let start = tokens.len();
        tokens.extend(alias.split(' ').map(str::to_string));
        mentions.push(Mention::anchor(start, tokens.len(), &keys[e]));
    };
    for (i, c) in chunks.into_iter().enumerate() {
        for _ in 0..gaps[i] {
            tokens.push(filler.choose(r).expect("filler").clone());
        }
        match c {
            Chunk::Words(w) => tokens.extend(w),
            Chunk::Mention(alias, e) => push_mention(&mut tokens, &alias, e),
            Chunk::List(items) => {
                let last = items.len() - 1;
                for (j, (alias, e)) in items.into_iter().enumerate() {
                    if j == last {
                        tokens.push(list_word.to_string());
                    } else if j > 0 {
                        tokens.push(",".to_string());
                    }
                    push_mention(&mut tokens, &alias, e);
                }
            }
        }
    }
    for _ in 0..gaps[gaps.len() - 1] {
        tokens.push(filler.choose(r).expect("filler").clone());
    }
    (tokens, mentions)
}

struct Sampler<'a> {
    kb: &'a SynKb,
    seen_weighted: WeightedIndex<f64>,
    seen: Vec<usize>,
    unseen: Vec<usize>,
}

impl<'a> Sampler<'a> {
    fn new(kb: &'a SynKb) -> Result<Self, GenError> {
        let seen: Vec<usize> = (0..kb.keys.len()).filter(|&e| !kb.unseen[e]).collect();
        let seen_weighted = WeightedIndex::new(seen.iter().map(|&e| kb.weight[e]))
            .map_err(|e| GenError::Infeasible(format!("popularity weights: {e}")))?;
        let unseen = (0..kb.keys.len()).filter(|&e| kb.unseen[e]).collect();
        Ok(Self {
            kb,
            seen_weighted,
            seen,
            unseen,
        })
    }

    /// Popularity-weighted seen entity satisfying `ok`.
    fn seen_where(&self, r: &mut ChaCha8Rng, ok: impl Fn(usize) -> bool) -> Option<usize> {
        for _ in 0..2000 {
            let e = self.seen[self.seen_weighted.sample(r)];
            if ok(e) {
                return Some(e);
            }
        }
        let valid: Vec<usize> = self.seen.iter().copied().filter(|&e| ok(e)).collect();
        valid.choose(r).copied()
    }

    fn unseen_where(&self, r: &mut ChaCha8Rng, ok: impl Fn(usize) -> bool) -> Option<usize> {
        let valid: Vec<usize> = self.unseen.iter().copied().filter(|&e| ok(e)).collect();
        valid.choose(r).copied()
    }

    /// A triple of `e` whose object is seen and sits in another group.
    fn kg_partner(&self, r: &mut ChaCha8Rng, e: usize) -> Option<(u32, usize)> {
        let opts: Vec<(u32, usize)> = self
            .kb
            .triples
            .iter()
            .filter(|&&(s, _, o)| s == e && !self.kb.unseen[o] && self.kb.group_of[o] != self.kb.group_of[e])
            .map(|&(_, rel, o)| (rel, o))
            .collect();
        opts.choose(r).copied()
    }

    /// Two seen entities of `e`'s type from other groups such that the
    /// three groups share no other type. Prefers groups whose remaining
    /// types are pairwise disjoint.
    fn list_partners(&self, r: &mut ChaCha8Rng, e: usize) -> Option<(usize, usize)> {
        let kb = self.kb;
        let t = kb.entity_type[e];
        let mut pool: Vec<usize> = self
            .seen
            .iter()
            .copied()
            .filter(|&x| kb.entity_type[x] == t && kb.group_of[x] != kb.group_of[e])
            .collect();
        pool.shuffle(r);
        let types =
            |x: usize| -> BTreeSet<u32> { kb.groups[kb.group_of[x]].iter().map(|&m| kb.entity_type[m]).collect() };
        let te = types(e);
        let mut relaxed = None;
        for (i, &a) in pool.iter().enumerate() {
            let ta = types(a);
            for &b in &pool[i + 1..] {
                if kb.group_of[a] == kb.group_of[b] {
                    continue;
                }
                let tb = types(b);
                let shared_all = te.iter().filter(|x| ta.contains(x) && tb.contains(x)).count();
                if shared_all != 1 {
                    continue;
                }
                let pair = |x: &BTreeSet<u32>, y: &BTreeSet<u32>| x.intersection(y).count() == 1;
                if pair(&te, &ta) && pair(&te, &tb) && pair(&ta, &tb) {
                    return Some((a, b));
                }
                relaxed.get_or_insert((a, b));
            }
        }
        relaxed
    }
}

/// Generates train/dev/test splits and the answer key for `kb`.
pub fn generate_corpus(kb: &SynKb, params: &GenParams) -> Result<SynCorpus, GenError> {
    params.validate()?;
    let mut r = rng::stream(params.seed, "syncorpus.corpus");
    let n = params.n_sentences;
    let mut counts: Vec<usize> = Pattern::ALL
        .iter()
        .map(|&p| (params.mix.get(p) * n as f64).round() as usize)
        .collect();
    let assigned: usize = counts.iter().sum();
    // Largest share absorbs rounding so the total is exact.
    let big = (0..4)
        .max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a)))
        .expect("four");
    counts[big] = counts[big] + n - assigned;
    let mut patterns: Vec<Pattern> = Pattern::ALL
        .iter()
        .zip(&counts)
        .flat_map(|(&p, &c)| std::iter::repeat_n(p, c))
        .collect();
    patterns.truncate(n);
    patterns.shuffle(&mut r);

    let n_train = (params.train_fraction * n as f64).round() as usize;
    let n_dev = (n - n_train) / 2;
    let sampler = Sampler::new(kb)?;
    let cues = &kb.cues;
    let (mut train, mut dev, mut test) = (Vec::new(), Vec::new(), Vec::new());
    let mut answers = Vec::with_capacity(n);

    for (i, &pattern) in patterns.iter().enumerate() {
        let in_train = i < n_train;
        let target_unseen = !in_train && pattern != Pattern::Memorization && r.random_bool(params.unseen_target);
        let alias = |e: usize| kb.aliases[kb.group_of[e]].clone();
        let mut chunks = match pattern {
            Pattern::Affordance | Pattern::Memorization => {
                let e = if target_unseen {
                    sampler.unseen_where(&mut r, |_| true)
                } else {
                    sampler.seen_where(&mut r, |_| true)
                }
                .ok_or_else(|| GenError::Infeasible("no entity available".into()))?;
                let cue = if pattern == Pattern::Affordance {
                    cues.type_cues[kb.entity_type[e] as usize]
                        .choose(&mut r)
                        .expect("cues")
                        .clone()
                } else {
                    cues.entity_cues[e].clone()
                };
                let mut c = vec![Chunk::Mention(alias(e), e), Chunk::Words(vec![cue])];
                c.shuffle(&mut r);
                c
            }
            Pattern::Kg => {
                let ok = |e: usize| sampler.kb.triples.iter().any(|&(s, _, o)| s == e && !kb.unseen[o]);
                let e = if target_unseen {
                    sampler.unseen_where(&mut r, ok)
                } else {
                    sampler.seen_where(&mut r, ok)
                }
                .ok_or_else(|| GenError::Infeasible("no linked entity available".into()))?;
                let (rel, o) = sampler.kg_partner(&mut r, e).expect("checked above");
                let word = cues.relation_cues[rel as usize].choose(&mut r).expect("cues").clone();
                vec![
                    Chunk::Mention(alias(e), e),
                    Chunk::Words(vec![word]),
                    Chunk::Mention(alias(o), o),
                ]
            }
            Pattern::Consistency => {
                let mut found = None;
                for _ in 0..50 {
                    let e = if target_unseen {
                        sampler.unseen_where(&mut r, |_| true)
                    } else {
                        sampler.seen_where(&mut r, |_| true)
                    };
                    let Some(e) = e else { break };
                    if let Some((a, b)) = sampler.list_partners(&mut r, e) {
                        found = Some([e, a, b]);
                        break;
                    }
                }
                let mut items = found.ok_or_else(|| GenError::Infeasible("no consistent list found".into()))?;
                items.shuffle(&mut r);
                vec![Chunk::List(items.iter().map(|&e| (alias(e), e)).collect())]
            }
        };
        if chunks.is_empty() {
            chunks.push(Chunk::Words(Vec::new()));
        }
        let list_word = if r.random_bool(0.5) { "or" } else { "either" };
        let (tokens, mentions) = assemble(&mut r, chunks, &cues.filler, &kb.keys, list_word);
        let id = i as u64;
        answers.push(AnswerRow {
            sentence_id: id,
            pattern,
            gold_keys: mentions.iter().map(|m| m.gold.clone()).collect(),
        });
        let s = Sentence {
            id,
            page: None,
            tokens,
            mentions,
        };
        if in_train {
            train.push(s);
        } else if i < n_train + n_dev {
            dev.push(s);
        } else {
            test.push(s);
        }
    }
    Ok(SynCorpus {
        train: Corpus::new(train),
        dev: Corpus::new(dev),
        test: Corpus::new(test),
        answers,
    })
}

impl SynCorpus {
    pub fn write(&self, dir: &Path) -> Result<(), GenError> {
        fs::create_dir_all(dir).map_err(|source| GenError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        self.train.save(&dir.join("train.jsonl"))?;
        self.dev.save(&dir.join("dev.jsonl"))?;
        self.test.save(&dir.join("test.jsonl"))?;
        let key: String = self
            .answers
            .iter()
            .map(|a| format!("{}\t{}\t{}\n", a.sentence_id, a.pattern, a.gold_keys.join(",")))
            .collect();
        write_file(&dir.join("answer_key.tsv"), &key)
    }

    pub fn pattern_of(&self) -> BTreeMap<u64, Pattern> {
        self.answers.iter().map(|a| (a.sentence_id, a.pattern)).collect()
    }
}

/// Reads `answer_key.tsv`.
pub fn read_answer_key(path: &Path) -> Result<Vec<AnswerRow>, GenError> {
    let text = fs::read_to_string(path).map_err(|source| GenError::Io {
        path: path.display().to_string(),
        source,
    })?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            let f: Vec<&str> = l.split('\t').collect();
            let bad = || GenError::Infeasible(format!("{}:{}: malformed answer row", path.display(), i + 1));
            if f.len() != 3 {
                return Err(bad());
            }
            Ok(AnswerRow {
                sentence_id: f[0].parse().map_err(|_| bad())?,
                pattern: f[1].parse().map_err(|_| bad())?,
                gold_keys: f[2].split(',').filter(|s| !s.is_empty()).map(str::to_string).collect(),
            })
        })
        .collect()
}

/// Everything `gen-corpus` writes: `kb/` files, the three splits, the
/// answer key and `manifest.json`.
pub fn generate_all(params: &GenParams, dir: &Path) -> Result<(SynKb, SynCorpus), GenError> {
    let kb = generate_kb(params)?;
    let corpus = generate_corpus(&kb, params)?;
    kb.write(&dir.join("kb"))?;
    corpus.write(dir)?;
    let mut pattern_counts = BTreeMap::new();
    for a in &corpus.answers {
        *pattern_counts.entry(a.pattern.to_string()).or_insert(0) += 1;
    }
    let manifest = GenManifest {
        params: params.clone(),
        cues: kb.cues.clone(),
        pattern_counts,
        split_sizes: [
            ("train".to_string(), corpus.train.sentences.len()),
            ("dev".to_string(), corpus.dev.sentences.len()),
            ("test".to_string(), corpus.test.sentences.len()),
        ]
        .into(),
        unseen_entities: (0..kb.keys.len())
            .filter(|&e| kb.unseen[e])
            .map(|e| kb.keys[e].clone())
            .collect(),
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_file(&dir.join("manifest.json"), &(json + "\n"))?;
    Ok((kb, corpus))
}

pub fn kb_paths(dir: &Path) -> KbPaths {
    KbPaths::in_dir(&dir.join("kb"))
}

/// Resolves every mention of `s` using only the planted pattern, the
/// knowledge base and the cue tables. `None` marks a mention the rule
/// cannot pin down to exactly one candidate.
pub fn rule_oracle(s: &Sentence, pattern: Pattern, kb: &StructuredKB, cues: &CueVocab) -> Vec<Option<EntityId>> {
    let cands: Vec<Vec<EntityId>> = s
        .mentions
        .iter()
        .map(|m| {
            kb.candidates(&s.span_text(m.start, m.end), usize::MAX)
                .into_iter()
                .map(|c| c.0)
                .collect()
        })
        .collect();
    let unique = |v: Vec<EntityId>| if v.len() == 1 { Some(v[0]) } else { None };
    let has_type = |e: EntityId, ts: &BTreeSet<u32>| kb.types_of(e).iter().any(|t| ts.contains(t));
    match pattern {
        Pattern::Affordance => {
            let ts: BTreeSet<u32> = cues
                .type_cues
                .iter()
                .enumerate()
                .filter(|(_, ws)| ws.iter().any(|w| s.tokens.contains(w)))
                .map(|(t, _)| t as u32)
                .collect();
            cands
                .iter()
                .map(|c| unique(c.iter().copied().filter(|&e| has_type(e, &ts)).collect()))
                .collect()
        }
        Pattern::Memorization => {
            let named: BTreeSet<EntityId> = cues
                .entity_cues
                .iter()
                .enumerate()
                .filter(|(_, w)| s.tokens.contains(w))
                .filter_map(|(i, _)| kb.id(&format!("ent{i:04}")))
                .collect();
            cands
                .iter()
                .map(|c| unique(c.iter().copied().filter(|e| named.contains(e)).collect()))
                .collect()
        }
        Pattern::Kg => {
            let adj = kb.adjacencies.get(crate::kb::KG_ADJACENCY);
            let mut out = vec![None; cands.len()];
            let mut links = Vec::new();
            for i in 0..cands.len() {
                for j in i + 1..cands.len() {
                    for &a in &cands[i] {
                        for &b in &cands[j] {
                            if adj.is_some_and(|m| m.connected(a, b)) {
                                links.push((i, a, j, b));
                            }
                        }
                    }
                }
            }
            if links.len() == 1 {
                let (i, a, j, b) = links[0];
                out[i] = Some(a);
                out[j] = Some(b);
            }
            out
        }
        Pattern::Consistency => {
            let mut shared: Option<BTreeSet<u32>> = None;
            for c in &cands {
                let ts: BTreeSet<u32> = c.iter().flat_map(|&e| kb.types_of(e).iter().copied()).collect();
                shared = Some(match shared {
                    None => ts,
                    Some(prev) => prev.intersection(&ts).copied().collect(),
                });
            }
            let shared = shared.unwrap_or_default();
            if shared.len() != 1 {
                return vec![None; cands.len()];
            }
            cands
                .iter()
                .map(|c| unique(c.iter().copied().filter(|&e| has_type(e, &shared)).collect()))
                .collect()
        }
    }
}
