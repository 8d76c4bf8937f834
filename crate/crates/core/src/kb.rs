//! Knowledge base: entities, alias candidate map, type and relation
//! assignments, adjacency matrices and popularity counts.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::corpus::Corpus;

#[derive(Debug, Error)]
pub enum KbError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Malformed { path: PathBuf, line: usize, msg: String },
    #[error("{path}:{line}: unknown entity {key:?}")]
    UnknownEntity { path: PathBuf, line: usize, key: String },
    #[error("{path}:{line}: duplicate alias/entity pair ({alias:?}, {key:?})")]
    DuplicatePair {
        path: PathBuf,
        line: usize,
        alias: String,
        key: String,
    },
    #[error("corpus label refers to unknown entity {0:?}")]
    UnknownGold(String),
}

/// Dense entity index, assigned by sorted external key.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EntityId(pub u32);

impl EntityId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// Lowercased alias to candidates ordered by prior count (descending,
/// ties by ascending id).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CandidateMap {
    map: HashMap<String, Vec<(EntityId, u64)>>,
    max_alias_tokens: usize,
}

impl CandidateMap {
    pub fn get(&self, alias: &str) -> Option<&[(EntityId, u64)]> {
        self.map.get(alias).map(Vec::as_slice)
    }

    pub fn contains(&self, alias: &str) -> bool {
        self.map.contains_key(alias)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn aliases(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    /// Longest alias length in whitespace tokens.
    pub fn max_alias_tokens(&self) -> usize {
        self.max_alias_tokens
    }

    fn insert(&mut self, alias: String, id: EntityId, prior: u64) -> bool {
        let list = self.map.entry(alias.clone()).or_default();
        if list.iter().any(|(e, _)| *e == id) {
            return false;
        }
        list.push((id, prior));
        self.max_alias_tokens = self.max_alias_tokens.max(alias.split(' ').count());
        true
    }

    fn sort(&mut self) {
        for list in self.map.values_mut() {
            list.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        }
    }
}

/// Sparse symmetric non-negative weights over entity pairs, zero diagonal.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdjacencyMatrix {
    pub name: String,
    weights: BTreeMap<(u32, u32), f64>,
}

impl AdjacencyMatrix {
    pub fn new(name: &str) -> Self {
        Self {
            name: name.to_string(),
            weights: BTreeMap::new(),
        }
    }

    /// Sets a symmetric weight. Self-pairs and zero weights are ignored.
    pub fn set(&mut self, a: EntityId, b: EntityId, w: f64) {
        if a == b {
            return;
        }
        let key = (a.0.min(b.0), a.0.max(b.0));
        if w == 0.0 {
            self.weights.remove(&key);
        } else {
            self.weights.insert(key, w);
        }
    }

    pub fn weight(&self, a: EntityId, b: EntityId) -> f64 {
        if a == b {
            return 0.0;
        }
        let key = (a.0.min(b.0), a.0.max(b.0));
        self.weights.get(&key).copied().unwrap_or(0.0)
    }

    pub fn connected(&self, a: EntityId, b: EntityId) -> bool {
        self.weight(a, b) != 0.0
    }

    /// Number of stored (unordered) pairs.
    pub fn edge_count(&self) -> usize {
        self.weights.len()
    }

    pub fn edges(&self) -> impl Iterator<Item = (EntityId, EntityId, f64)> + '_ {
        self.weights.iter().map(|(&(a, b), &w)| (EntityId(a), EntityId(b), w))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LoadOptions {
    /// Cap on types kept per entity.
    pub max_types: usize,
    /// Cap on relations kept per entity.
    pub max_relations: usize,
    pub coarse_types: usize,
    /// Minimum vocabulary sizes; grown to fit the ids seen in the files.
    pub type_vocab: usize,
    pub relation_vocab: usize,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            max_types: 3,
            max_relations: 50,
            coarse_types: 6,
            type_vocab: 0,
            relation_vocab: 0,
        }
    }
}

/// Input files for [`load_kb`].
#[derive(Clone, Debug, Default)]
pub struct KbPaths {
    pub aliases: PathBuf,
    pub types: Option<PathBuf>,
    pub relations: Option<PathBuf>,
    pub coarse: Option<PathBuf>,
    pub adjacencies: Vec<PathBuf>,
}

impl KbPaths {
    /// Conventional file names inside one directory; optional files are
    /// used when present. Extra adjacencies are `*.adj.tsv`.
    pub fn in_dir(dir: &Path) -> Self {
        let opt = |name: &str| Some(dir.join(name)).filter(|p| p.exists());
        let mut adjacencies: Vec<PathBuf> = fs::read_dir(dir)
            .map(|rd| {
                rd.filter_map(Result::ok)
                    .map(|e| e.path())
                    .filter(|p| p.to_string_lossy().ends_with(".adj.tsv"))
                    .collect()
            })
            .unwrap_or_default();
        adjacencies.sort();
        Self {
            aliases: dir.join("aliases.tsv"),
            types: opt("types.tsv"),
            relations: opt("relations.tsv"),
            coarse: opt("coarse.tsv"),
            adjacencies,
        }
    }
}

/// Name of the adjacency built from relation triples.
pub const KG_ADJACENCY: &str = "kg";

#[derive(Clone, Debug, PartialEq)]
pub struct StructuredKB {
    keys: Vec<String>,
    key_index: HashMap<String, EntityId>,
    pub candidate_map: CandidateMap,
    types_of: Vec<Vec<u32>>,
    relations_of: Vec<Vec<u32>>,
    coarse_of: Vec<Option<u32>>,
    pub adjacencies: BTreeMap<String, AdjacencyMatrix>,
    popularity: Vec<u64>,
    pub type_vocab_size: usize,
    pub relation_vocab_size: usize,
    pub coarse_vocab_size: usize,
}

impl StructuredKB {
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn entities(&self) -> impl Iterator<Item = EntityId> {
        (0..self.keys.len() as u32).map(EntityId)
    }

    pub fn key(&self, e: EntityId) -> &str {
        &self.keys[e.index()]
    }

    pub fn id(&self, key: &str) -> Option<EntityId> {
        self.key_index.get(key).copied()
    }

    pub fn types_of(&self, e: EntityId) -> &[u32] {
        &self.types_of[e.index()]
    }

    pub fn relations_of(&self, e: EntityId) -> &[u32] {
        &self.relations_of[e.index()]
    }

    pub fn coarse_of(&self, e: EntityId) -> Option<u32> {
        self.coarse_of[e.index()]
    }

    pub fn popularity(&self, e: EntityId) -> u64 {
        self.popularity[e.index()]
    }

    pub fn popularity_counts(&self) -> &[u64] {
        &self.popularity
    }

    pub fn set_popularity(&mut self, counts: Vec<u64>) {
        assert_eq!(counts.len(), self.len(), "one count per entity");
        self.popularity = counts;
    }

    pub fn adjacency_names(&self) -> Vec<String> {
        self.adjacencies.keys().cloned().collect()
    }

    /// Top-`k` candidates for a mention by exact lowercase alias lookup.
    pub fn candidates(&self, mention_text: &str, k: usize) -> Vec<(EntityId, u64)> {
        let alias = normalize_alias(mention_text);
        self.candidate_map
            .get(&alias)
            .map(|list| list.iter().take(k).copied().collect())
            .unwrap_or_default()
    }

    /// Greedy n-gram mention detection: longest n first, left to right
    /// within a length, skipping spans that overlap accepted ones.
    pub fn extract_mentions(&self, tokens: &[String], max_ngram: usize) -> Vec<(usize, usize)> {
        let mut taken = vec![false; tokens.len()];
        let mut spans = Vec::new();
        for n in (1..=max_ngram.min(tokens.len())).rev() {
            for start in 0..=tokens.len() - n {
                let end = start + n;
                if taken[start..end].iter().any(|&t| t) {
                    continue;
                }
                let text = normalize_alias(&tokens[start..end].join(" "));
                if self.candidate_map.contains(&text) {
                    taken[start..end].iter_mut().for_each(|t| *t = true);
                    spans.push((start, end));
                }
            }
        }
        spans.sort_unstable();
        spans
    }

    /// Resolves every gold label in `corpus` to an id.
    pub fn resolve(&self, key: &str) -> Result<EntityId, KbError> {
        self.id(key).ok_or_else(|| KbError::UnknownGold(key.to_string()))
    }

    pub fn add_adjacency(&mut self, adj: AdjacencyMatrix) {
        self.adjacencies.insert(adj.name.clone(), adj);
    }

    /// Writes an adjacency as `key<TAB>key<TAB>weight` lines.
    pub fn write_adjacency(&self, adj: &AdjacencyMatrix, path: &Path) -> Result<(), KbError> {
        let io = |source| KbError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut out = Vec::new();
        for (a, b, w) in adj.edges() {
            writeln!(out, "{}\t{}\t{}", self.key(a), self.key(b), w).map_err(io)?;
        }
        fs::write(path, out).map_err(io)
    }
}

pub fn normalize_alias(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

fn read_rows(path: &Path, width: usize) -> Result<Vec<(usize, Vec<String>)>, KbError> {
    let text = fs::read_to_string(path).map_err(|source| KbError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<String> = line.split('\t').map(str::to_string).collect();
        if fields.len() != width {
            return Err(KbError::Malformed {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("expected {width} tab-separated fields, got {}", fields.len()),
            });
        }
        rows.push((i + 1, fields));
    }
    Ok(rows)
}

fn parse_num<N: std::str::FromStr>(path: &Path, line: usize, field: &str, what: &str) -> Result<N, KbError> {
    field.trim().parse().map_err(|_| KbError::Malformed {
        path: path.to_path_buf(),
        line,
        msg: format!("invalid {what} {field:?}"),
    })
}

/// Loads and indexes a knowledge base. The entity set is every key that
/// appears in the alias file.
pub fn load_kb(paths: &KbPaths, opts: &LoadOptions) -> Result<StructuredKB, KbError> {
    let alias_rows = read_rows(&paths.aliases, 3)?;
    let keys: BTreeSet<&str> = alias_rows.iter().map(|(_, f)| f[1].as_str()).collect();
    let keys: Vec<String> = keys.into_iter().map(str::to_string).collect();
    let key_index: HashMap<String, EntityId> = keys
        .iter()
        .enumerate()
        .map(|(i, k)| (k.clone(), EntityId(i as u32)))
        .collect();
    let n = keys.len();
    let lookup = |path: &Path, line: usize, key: &str| {
        key_index.get(key).copied().ok_or_else(|| KbError::UnknownEntity {
            path: path.to_path_buf(),
            line,
            key: key.to_string(),
        })
    };

    let mut candidate_map = CandidateMap::default();
    for (line, f) in &alias_rows {
        let prior: u64 = parse_num(&paths.aliases, *line, &f[2], "prior count")?;
        let id = lookup(&paths.aliases, *line, &f[1])?;
        let alias = normalize_alias(&f[0]);
        if alias.is_empty() {
            return Err(KbError::Malformed {
                path: paths.aliases.clone(),
                line: *line,
                msg: "empty alias".into(),
            });
        }
        if !candidate_map.insert(alias.clone(), id, prior) {
            return Err(KbError::DuplicatePair {
                path: paths.aliases.clone(),
                line: *line,
                alias,
                key: f[1].clone(),
            });
        }
    }
    candidate_map.sort();

    let mut types_of = vec![Vec::new(); n];
    let mut type_vocab_size = opts.type_vocab;
    if let Some(path) = &paths.types {
        for (line, f) in read_rows(path, 2)? {
            let id = lookup(path, line, &f[0])?;
            let t: u32 = parse_num(path, line, &f[1], "type id")?;
            type_vocab_size = type_vocab_size.max(t as usize + 1);
            let list: &mut Vec<u32> = &mut types_of[id.index()];
            if !list.contains(&t) && list.len() < opts.max_types {
                list.push(t);
            }
        }
    }

    let mut coarse_of = vec![None; n];
    if let Some(path) = &paths.coarse {
        for (line, f) in read_rows(path, 2)? {
            let id = lookup(path, line, &f[0])?;
            let c: u32 = parse_num(path, line, &f[1], "coarse type id")?;
            if c as usize >= opts.coarse_types {
                return Err(KbError::Malformed {
                    path: path.clone(),
                    line,
                    msg: format!("coarse type {c} outside 0..{}", opts.coarse_types),
                });
            }
            coarse_of[id.index()] = Some(c);
        }
    }

    let mut relations_of = vec![Vec::new(); n];
    let mut relation_vocab_size = opts.relation_vocab;
    let mut adjacencies = BTreeMap::new();
    if let Some(path) = &paths.relations {
        let mut kg = AdjacencyMatrix::new(KG_ADJACENCY);
        for (line, f) in read_rows(path, 3)? {
            let subject = lookup(path, line, &f[0])?;
            let r: u32 = parse_num(path, line, &f[1], "relation id")?;
            relation_vocab_size = relation_vocab_size.max(r as usize + 1);
            let list: &mut Vec<u32> = &mut relations_of[subject.index()];
            if !list.contains(&r) && list.len() < opts.max_relations {
                list.push(r);
            }
            if let Some(&object) = key_index.get(f[2].as_str()) {
                kg.set(subject, object, 1.0);
            }
        }
        adjacencies.insert(kg.name.clone(), kg);
    }

    for path in &paths.adjacencies {
        let name = path
            .file_name()
            .map(|s| {
                s.to_string_lossy()
                    .trim_end_matches(".tsv")
                    .trim_end_matches(".adj")
                    .to_string()
            })
            .unwrap_or_default();
        let mut adj = AdjacencyMatrix::new(&name);
        for (line, f) in read_rows(path, 3)? {
            let a = lookup(path, line, &f[0])?;
            let b = lookup(path, line, &f[1])?;
            let w: f64 = parse_num(path, line, &f[2], "weight")?;
            if !w.is_finite() || w < 0.0 {
                return Err(KbError::Malformed {
                    path: path.clone(),
                    line,
                    msg: format!("weight must be finite and non-negative, got {w}"),
                });
            }
            adj.set(a, b, w);
        }
        adjacencies.insert(name, adj);
    }

    Ok(StructuredKB {
        keys,
        key_index,
        candidate_map,
        types_of,
        relations_of,
        coarse_of,
        adjacencies,
        popularity: vec![0; n],
        type_vocab_size,
        relation_vocab_size,
        coarse_vocab_size: opts.coarse_types,
    })
}

/// Gold-label counts per entity over all (anchor and weak) mentions.
pub fn popularity_counts(corpus: &Corpus, kb: &StructuredKB) -> Result<Vec<u64>, KbError> {
    let mut counts = vec![0u64; kb.len()];
    for s in &corpus.sentences {
        for m in &s.mentions {
            counts[kb.resolve(&m.gold)?.index()] += 1;
        }
    }
    Ok(counts)
}

/// Log sentence co-occurrence counts; pairs seen together in fewer than
/// `threshold` sentences get weight zero.
pub fn build_cooccurrence_adjacency(
    corpus: &Corpus,
    kb: &StructuredKB,
    threshold: u64,
) -> Result<AdjacencyMatrix, KbError> {
    let mut counts: HashMap<(u32, u32), u64> = HashMap::new();
    for s in &corpus.sentences {
        let ents: BTreeSet<EntityId> = s
            .mentions
            .iter()
            .map(|m| kb.resolve(&m.gold))
            .collect::<Result<_, _>>()?;
        let ents: Vec<EntityId> = ents.into_iter().collect();
        for (i, a) in ents.iter().enumerate() {
            for b in &ents[i + 1..] {
                *counts.entry((a.0, b.0)).or_default() += 1;
            }
        }
    }
    let mut adj = AdjacencyMatrix::new("cooccurrence");
    for ((a, b), c) in counts {
        if c >= threshold.max(1) {
            adj.set(EntityId(a), EntityId(b), (c as f64).ln());
        }
    }
    Ok(adj)
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    /// Writes KB files into `dir` and returns their paths.
    pub fn write(dir: &Path, aliases: &str, types: &str, relations: &str, coarse: &str) -> KbPaths {
        fs::write(dir.join("aliases.tsv"), aliases).unwrap();
        fs::write(dir.join("types.tsv"), types).unwrap();
        fs::write(dir.join("relations.tsv"), relations).unwrap();
        fs::write(dir.join("coarse.tsv"), coarse).unwrap();
        KbPaths::in_dir(dir)
    }

    pub const ALIASES: &str =
        "apple\tapple_inc\t50\napple\tapple_fruit\t80\nbig apple\tnyc\t10\napple pie\tapple_fruit\t3\nnyc\tnyc\t20\n";
    pub const TYPES: &str = "apple_inc\t0\napple_fruit\t1\nnyc\t2\napple_inc\t3\n";
    pub const RELATIONS: &str = "apple_inc\t0\tnyc\nnyc\t1\tusa\n";
    pub const COARSE: &str = "apple_inc\t2\napple_fruit\t3\nnyc\t1\n";
}
