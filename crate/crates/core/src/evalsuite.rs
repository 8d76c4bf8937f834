//! Metrics, popularity and reasoning-pattern slices, keyword mining and
//! entity-table compression.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use rand::seq::IndexedRandom;
use thiserror::Error;

use crate::corpus::{Corpus, Sentence};
use crate::kb::{EntityId, StructuredKB, KG_ADJACENCY};
use crate::model::{MentionFilter, Model, ModelError};
use crate::numerics::Tensor;
use crate::rng;
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("inconsistent counts: {correct} correct, {extracted} extracted, {gold} gold")]
    Counts {
        correct: usize,
        extracted: usize,
        gold: usize,
    },
    #[error("type {0} has no training example")]
    NoExamples(u32),
    #[error("k_percent must be in (0, 100], got {0}")]
    KPercent(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Micro precision, recall and F1 from counts. A zero denominator makes
/// that metric zero.
pub fn micro_prf(n_correct: usize, n_extracted: usize, n_gold: usize) -> Result<Prf, EvalError> {
    if n_correct > n_extracted.min(n_gold) {
        return Err(EvalError::Counts {
            correct: n_correct,
            extracted: n_extracted,
            gold: n_gold,
        });
    }
    let div = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = div(n_correct, n_extracted);
    let recall = div(n_correct, n_gold);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(Prf { precision, recall, f1 })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Slice {
    Unseen,
    Tail,
    Torso,
    Head,
}

impl Slice {
    pub const ALL: [Slice; 4] = [Slice::Unseen, Slice::Tail, Slice::Torso, Slice::Head];

    pub fn as_str(self) -> &'static str {
        match self {
            Slice::Unseen => "unseen",
            Slice::Tail => "tail",
            Slice::Torso => "torso",
            Slice::Head => "head",
        }
    }
}

impl fmt::Display for Slice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub fn slice_assign(count: u64) -> Slice {
    match count {
        0 => Slice::Unseen,
        1..=10 => Slice::Tail,
        11..=1000 => Slice::Torso,
        _ => Slice::Head,
    }
}

/// A mention identified by sentence id and span.
pub type MentionKey = (u64, usize, usize);

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FilterStats {
    pub total: usize,
    pub kept: usize,
    /// Gold entity missing from the candidate list (or from the KB).
    pub dropped_gold_missing: usize,
    /// Only one candidate.
    pub dropped_single: usize,
}

/// Keeps mentions whose gold entity is a candidate and that have more than
/// one candidate.
pub fn eval_filter(corpus: &Corpus, kb: &StructuredKB, k: usize) -> (Vec<MentionKey>, FilterStats) {
    let mut stats = FilterStats::default();
    let mut kept = Vec::new();
    for s in &corpus.sentences {
        for m in &s.mentions {
            stats.total += 1;
            let cands = kb.candidates(&s.span_text(m.start, m.end), k);
            let gold = kb.id(&m.gold);
            if !gold.is_some_and(|g| cands.iter().any(|c| c.0 == g)) {
                stats.dropped_gold_missing += 1;
            } else if cands.len() < 2 {
                stats.dropped_single += 1;
            } else {
                kept.push((s.id, m.start, m.end));
            }
        }
    }
    stats.kept = kept.len();
    (kept, stats)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PatternSlice {
    Entity,
    Consistency,
    KgRelation,
    Affordance,
}

impl PatternSlice {
    pub const ALL: [PatternSlice; 4] = [
        PatternSlice::Entity,
        PatternSlice::Consistency,
        PatternSlice::KgRelation,
        PatternSlice::Affordance,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PatternSlice::Entity => "entity",
            PatternSlice::Consistency => "consistency",
            PatternSlice::KgRelation => "kg_relation",
            PatternSlice::Affordance => "affordance",
        }
    }
}

fn key(s: &Sentence, i: usize) -> MentionKey {
    let m = &s.mentions[i];
    (s.id, m.start, m.end)
}

/// Reasoning-pattern subsets of the mentions in `corpus`, plus coverage
/// (share of all mentions) per slice. `keywords` maps a type id to its
/// afforded keywords.
pub fn pattern_slices(
    corpus: &Corpus,
    kb: &StructuredKB,
    keywords: &BTreeMap<u32, Vec<String>>,
) -> (
    BTreeMap<PatternSlice, BTreeSet<MentionKey>>,
    BTreeMap<PatternSlice, f64>,
) {
    let mut out: BTreeMap<PatternSlice, BTreeSet<MentionKey>> =
        PatternSlice::ALL.iter().map(|&p| (p, BTreeSet::new())).collect();
    let kg = kb.adjacencies.get(KG_ADJACENCY);
    let mut total = 0usize;
    for s in &corpus.sentences {
        total += s.mentions.len();
        let mut order: Vec<usize> = (0..s.mentions.len()).collect();
        order.sort_by_key(|&i| (s.mentions[i].start, s.mentions[i].end));
        let golds: Vec<Option<EntityId>> = order.iter().map(|&i| kb.id(&s.mentions[i].gold)).collect();
        let tokens: BTreeSet<&str> = s.tokens.iter().map(String::as_str).collect();
        for (pos, &i) in order.iter().enumerate() {
            let Some(g) = golds[pos] else { continue };
            if kb.types_of(g).is_empty() && kb.relations_of(g).is_empty() {
                out.get_mut(&PatternSlice::Entity).expect("slice").insert(key(s, i));
            }
            let linked = golds
                .iter()
                .enumerate()
                .any(|(q, o)| q != pos && o.is_some_and(|o| o != g && kg.is_some_and(|a| a.connected(g, o))));
            if linked {
                out.get_mut(&PatternSlice::KgRelation).expect("slice").insert(key(s, i));
            }
            let afforded = kb.types_of(g).iter().any(|t| {
                keywords
                    .get(t)
                    .is_some_and(|ws| ws.iter().any(|w| tokens.contains(w.as_str())))
            });
            if afforded {
                out.get_mut(&PatternSlice::Affordance).expect("slice").insert(key(s, i));
            }
        }
        // Runs of three or more adjacent mentions with distinct golds and a
        // common type.
        for start in 0..order.len() {
            for end in start + 3..=order.len() {
                let run: Vec<EntityId> = golds[start..end].iter().flatten().copied().collect();
                if run.len() != end - start || run.iter().collect::<BTreeSet<_>>().len() != run.len() {
                    break;
                }
                let mut common: BTreeSet<u32> = kb.types_of(run[0]).iter().copied().collect();
                for e in &run[1..] {
                    let ts: BTreeSet<u32> = kb.types_of(*e).iter().copied().collect();
                    common = common.intersection(&ts).copied().collect();
                }
                if common.is_empty() {
                    break;
                }
                for &i in &order[start..end] {
                    out.get_mut(&PatternSlice::Consistency)
                        .expect("slice")
                        .insert(key(s, i));
                }
            }
        }
    }
    let coverage = out
        .iter()
        .map(|(&p, set)| {
            (
                p,
                if total == 0 {
                    0.0
                } else {
                    set.len() as f64 / total as f64
                },
            )
        })
        .collect();
    (out, coverage)
}

/// Top `n` tokens by tf-idf for sentences containing a gold mention of
/// type `type_id`. Tokens inside mention spans are excluded from the term
/// counts; `idf = ln((1 + N) / (1 + df)) + 1` over all sentences. Ties are
/// broken lexicographically.
pub fn affordance_keywords(
    corpus: &Corpus,
    kb: &StructuredKB,
    type_id: u32,
    n: usize,
) -> Result<Vec<(String, f64)>, EvalError> {
    let mut df: HashMap<&str, usize> = HashMap::new();
    for s in &corpus.sentences {
        let uniq: BTreeSet<&str> = s.tokens.iter().map(String::as_str).collect();
        for t in uniq {
            *df.entry(t).or_insert(0) += 1;
        }
    }
    let mut tf: HashMap<&str, usize> = HashMap::new();
    let mut examples = 0;
    for s in &corpus.sentences {
        let typed = s
            .mentions
            .iter()
            .any(|m| kb.id(&m.gold).is_some_and(|g| kb.types_of(g).contains(&type_id)));
        if !typed {
            continue;
        }
        examples += 1;
        for (i, t) in s.tokens.iter().enumerate() {
            if s.mentions.iter().any(|m| m.start <= i && i < m.end) {
                continue;
            }
            *tf.entry(t.as_str()).or_insert(0) += 1;
        }
    }
    if examples == 0 {
        return Err(EvalError::NoExamples(type_id));
    }
    let total = corpus.sentences.len() as f64;
    let mut scored: Vec<(String, f64)> = tf
        .into_iter()
        .map(|(t, c)| {
            let idf = ((1.0 + total) / (1.0 + df[t] as f64)).ln() + 1.0;
            (t.to_string(), c as f64 * idf)
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored.truncate(n);
    Ok(scored)
}

/// [`affordance_keywords`] for every type with at least one example.
pub fn type_keywords(corpus: &Corpus, kb: &StructuredKB, n: usize) -> BTreeMap<u32, Vec<String>> {
    (0..kb.type_vocab_size as u32)
        .filter_map(|t| {
            affordance_keywords(corpus, kb, t, n)
                .ok()
                .map(|ws| (t, ws.into_iter().map(|(w, _)| w).collect()))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompressionInfo {
    pub retained: usize,
    /// Entity whose learned row became the shared row, if any entity was
    /// dropped.
    pub shared_from: Option<EntityId>,
    /// `100 - k`
    pub ratio: f64,
}

/// Keeps the learned rows of the top `k_percent` of entities by training
/// popularity (ties by id) and points every other entity at a single row
/// copied from a seeded choice among zero-popularity entities.
pub fn compress_embeddings<T: Scalar>(
    model: &Model<T>,
    kb: &StructuredKB,
    k_percent: f64,
    seed: u64,
) -> Result<(Model<T>, CompressionInfo), EvalError> {
    if !(k_percent > 0.0 && k_percent <= 100.0) {
        return Err(EvalError::KPercent(k_percent));
    }
    let n = model.entity_rows.len();
    let ratio = 100.0 - k_percent;
    let keep = ((k_percent / 100.0) * n as f64 - 1e-9).ceil() as usize;
    if keep >= n {
        return Ok((
            model.clone(),
            CompressionInfo {
                retained: n,
                shared_from: None,
                ratio,
            },
        ));
    }
    let mut order: Vec<EntityId> = kb.entities().collect();
    order.sort_by(|&a, &b| kb.popularity(b).cmp(&kb.popularity(a)).then(a.cmp(&b)));
    let retained = &order[..keep];
    let zero_pop: Vec<EntityId> = order[keep..]
        .iter()
        .copied()
        .filter(|&e| kb.popularity(e) == 0)
        .collect();
    let pool = if zero_pop.is_empty() {
        order[keep..].to_vec()
    } else {
        zero_pop
    };
    let shared = *pool
        .choose(&mut rng::stream(seed, "compress"))
        .expect("dropped entities exist");

    let table = model.params.get(model.fusion.entity_table);
    let d = table.cols();
    let mut data = Vec::with_capacity((keep + 1) * d);
    let mut rows = vec![keep as u32; n];
    for (i, &e) in retained.iter().enumerate() {
        data.extend_from_slice(table.row(model.entity_rows[e.index()] as usize));
        rows[e.index()] = i as u32;
    }
    data.extend_from_slice(table.row(model.entity_rows[shared.index()] as usize));
    let mut out = model.clone();
    out.params.replace(
        out.fusion.entity_table,
        Tensor::new(vec![keep + 1, d], data).map_err(ModelError::from)?,
    );
    out.entity_rows = rows;
    out.dims.entity_rows = keep + 1;
    out.fusion.dims.entity_rows = keep + 1;
    Ok((
        out,
        CompressionInfo {
            retained: keep,
            shared_from: Some(shared),
            ratio,
        },
    ))
}

/// Outcome for one scored mention.
#[derive(Clone, Debug, PartialEq)]
pub struct Scored {
    pub key: MentionKey,
    pub gold: EntityId,
    pub predicted: EntityId,
    pub slice: Slice,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SliceMetrics {
    pub prf: Prf,
    pub n_mentions: usize,
    pub n_correct: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub filter: FilterStats,
    /// `None` when the slice is empty.
    pub blocks: BTreeMap<String, Option<SliceMetrics>>,
    pub mentions: Vec<Scored>,
}

/// Named order for the report: overall, popularity slices, then extra
/// slices alphabetically.
fn block_order(name: &str) -> (usize, String) {
    let rank = match name {
        "overall" => 0,
        "head" => 1,
        "torso" => 2,
        "tail" => 3,
        "unseen" => 4,
        _ => 5,
    };
    (rank, name.to_string())
}

impl EvalReport {
    pub fn metrics(&self, block: &str) -> Option<&SliceMetrics> {
        self.blocks.get(block).and_then(Option::as_ref)
    }

    /// One block per slice with `precision`, `recall`, `f1`, `n_mentions`.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "[filter]\ntotal={}\nkept={}\ndropped_gold_missing={}\ndropped_single_candidate={}\n",
            self.filter.total, self.filter.kept, self.filter.dropped_gold_missing, self.filter.dropped_single
        );
        let mut names: Vec<&String> = self.blocks.keys().collect();
        names.sort_by_key(|n| block_order(n));
        for name in names {
            out.push_str(&format!("\n[{name}]\n"));
            match &self.blocks[name] {
                Some(m) => out.push_str(&format!(
                    "precision={:.6}\nrecall={:.6}\nf1={:.6}\nn_mentions={}\n",
                    m.prf.precision, m.prf.recall, m.prf.f1, m.n_mentions
                )),
                None => out.push_str("n_mentions=0\nmetrics=absent\n"),
            }
        }
        out
    }
}

fn metrics_for<'a>(items: impl Iterator<Item = &'a Scored>) -> Option<SliceMetrics> {
    let (mut n, mut c) = (0, 0);
    for s in items {
        n += 1;
        c += usize::from(s.gold == s.predicted);
    }
    if n == 0 {
        return None;
    }
    Some(SliceMetrics {
        prf: micro_prf(c, n, n).expect("c <= n"),
        n_mentions: n,
        n_correct: c,
    })
}

/// Builds a report from scored mentions. `extra` adds named mention
/// subsets (pattern slices).
pub fn report(
    mentions: Vec<Scored>,
    filter: FilterStats,
    extra: &BTreeMap<String, BTreeSet<MentionKey>>,
) -> EvalReport {
    let mut blocks = BTreeMap::new();
    blocks.insert("overall".to_string(), metrics_for(mentions.iter()));
    for sl in Slice::ALL {
        blocks.insert(sl.to_string(), metrics_for(mentions.iter().filter(|m| m.slice == sl)));
    }
    for (name, set) in extra {
        blocks.insert(
            name.clone(),
            metrics_for(mentions.iter().filter(|m| set.contains(&m.key))),
        );
    }
    EvalReport {
        filter,
        blocks,
        mentions,
    }
}

/// Evaluates on anchor (non-weak) mentions that pass [`eval_filter`].
/// Slices use the popularity counts stored in `kb`.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    corpus: &Corpus,
    kb: &StructuredKB,
    extra: &BTreeMap<String, BTreeSet<MentionKey>>,
) -> Result<EvalReport, EvalError> {
    let (_, filter) = eval_filter(corpus, kb, model.config.candidates);
    let mut scored = Vec::new();
    for s in &corpus.sentences {
        let Some(inst) = model.prepare(s, kb, MentionFilter::Eval)? else {
            continue;
        };
        let preds = model.predict(&inst)?;
        for (m, p) in inst.mentions.iter().zip(preds) {
            if m.weak {
                continue;
            }
            let gold = m.gold.expect("eval filter keeps resolvable golds");
            scored.push(Scored {
                key: (s.id, m.start, m.end),
                gold,
                predicted: p,
                slice: slice_assign(kb.popularity(gold)),
            });
        }
    }
    Ok(report(scored, filter, extra))
}
