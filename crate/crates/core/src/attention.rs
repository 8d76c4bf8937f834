//! Candidate refinement: attention over words, over the other candidates
//! and over knowledge-graph neighbours, plus the final scorer.

use rand::Rng;

use crate::layers::{LayerNorm, Linear};
use crate::numerics::{Bound, Graph, NumericsError, ParamId, ParamStore, Tensor, Var};
use crate::scalar::Scalar;

/// Multi-head attention sublayer followed by a feed-forward sublayer, each
/// with a residual connection and a trailing layer norm.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ff1: Linear,
    pub ff2: Linear,
    pub ln1: LayerNorm,
    pub ln2: LayerNorm,
    pub heads: usize,
}

impl AttentionBlock {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        hidden: usize,
        ff_dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self, NumericsError> {
        if heads == 0 || !hidden.is_multiple_of(heads) {
            return Err(NumericsError::HeadsDoNotDivide { dim: hidden, heads });
        }
        Ok(Self {
            wq: Linear::new(store, &format!("{name}.q"), hidden, hidden, true, rng)?,
            wk: Linear::new(store, &format!("{name}.k"), hidden, hidden, true, rng)?,
            wv: Linear::new(store, &format!("{name}.v"), hidden, hidden, true, rng)?,
            wo: Linear::new(store, &format!("{name}.o"), hidden, hidden, true, rng)?,
            ff1: Linear::new(store, &format!("{name}.ff1"), hidden, ff_dim, true, rng)?,
            ff2: Linear::new(store, &format!("{name}.ff2"), ff_dim, hidden, true, rng)?,
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), hidden)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), hidden)?,
            heads,
        })
    }

    /// `queries` attend to `keyval`; rows of `keyval` with `key_mask[j] ==
    /// false` are ignored.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        queries: Var,
        keyval: Var,
        key_mask: Option<&[bool]>,
        dropout: f64,
    ) -> Result<Var, NumericsError> {
        let q = self.wq.apply(g, b, queries)?;
        let k = self.wk.apply(g, b, keyval)?;
        let v = self.wv.apply(g, b, keyval)?;
        let a = g.attention(q, k, v, self.heads, key_mask)?;
        let a = self.wo.apply(g, b, a)?;
        let a = g.dropout(a, dropout)?;
        let x = g.add(queries, a)?;
        let x = self.ln1.apply(g, b, x)?;
        let f = self.ff1.apply(g, b, x)?;
        let f = g.relu(f)?;
        let f = g.dropout(f, dropout)?;
        let f = self.ff2.apply(g, b, f)?;
        let y = g.add(x, f)?;
        self.ln2.apply(g, b, y)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = Vec::new();
        for l in [&self.wq, &self.wk, &self.wv, &self.wo, &self.ff1, &self.ff2] {
            v.extend(l.ids());
        }
        for n in [&self.ln1, &self.ln2] {
            v.push(n.gain);
            v.push(n.bias);
        }
        v
    }
}

/// Candidates (queries) attend to the sentence words.
pub fn phrase2ent<T: Scalar>(
    g: &mut Graph<T>,
    b: &Bound,
    block: &AttentionBlock,
    e: Var,
    words: Var,
    dropout: f64,
) -> Result<Var, NumericsError> {
    block.forward(g, b, e, words, None, dropout)
}

/// Candidates attend to each other; padded candidates are hidden as keys.
pub fn ent2ent<T: Scalar>(
    g: &mut Graph<T>,
    b: &Bound,
    block: &AttentionBlock,
    e: Var,
    cand_mask: &[bool],
    dropout: f64,
) -> Result<Var, NumericsError> {
    block.forward(g, b, e, e, Some(cand_mask), dropout)
}

/// `softmax(adj + w I) e + e`. Columns with `cand_mask[j] == false` get
/// zero weight.
pub fn kg2ent<T: Scalar>(
    g: &mut Graph<T>,
    e: Var,
    adj: Var,
    w: Var,
    cand_mask: Option<&[bool]>,
) -> Result<Var, NumericsError> {
    let logits = g.add_diag(adj, w)?;
    let mix = g.softmax(logits, cand_mask)?;
    let mixed = g.matmul(mix, e)?;
    g.add(mixed, e)
}

/// Within-mention pairs zeroed: `adj[i][j]` for candidates `i`, `j` of the
/// same mention is dropped so rival candidates cannot boost each other.
pub fn adjacency_slice(weights: impl Fn(usize, usize) -> f64, mention_of: &[usize]) -> Tensor<f64> {
    let n = mention_of.len();
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if mention_of[i] != mention_of[j] {
                data[i * n + j] = weights(i, j);
            }
        }
    }
    Tensor::new(vec![n, n], data).expect("square")
}

/// One refinement layer.
#[derive(Clone, Debug)]
pub struct KgLayer {
    pub phrase: AttentionBlock,
    pub ent: AttentionBlock,
    /// One self-weight per adjacency.
    pub kg_w: Vec<ParamId>,
}

impl KgLayer {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        hidden: usize,
        ff_dim: usize,
        heads: usize,
        adjacencies: &[String],
        rng: &mut R,
    ) -> Result<Self, NumericsError> {
        let phrase = AttentionBlock::new(store, &format!("{name}.phrase"), hidden, ff_dim, heads, rng)?;
        let ent = AttentionBlock::new(store, &format!("{name}.ent"), hidden, ff_dim, heads, rng)?;
        let kg_w = adjacencies
            .iter()
            .map(|a| store.insert(&format!("{name}.kg.{a}.w"), Tensor::scalar(T::zero()), true))
            .collect::<Result<_, _>>()?;
        Ok(Self { phrase, ent, kg_w })
    }
}

#[derive(Clone, Debug)]
pub struct LayerOutput {
    pub e_prime: Var,
    pub e_k: Vec<Var>,
    /// Mean of `e_k`, or `e_prime` when there are no adjacencies.
    pub e_k_avg: Var,
}

/// `E' = MHA(E, W) + MHA(E)`, then one graph-mixing pass per adjacency.
#[allow(clippy::too_many_arguments)]
pub fn layer_forward<T: Scalar>(
    g: &mut Graph<T>,
    b: &Bound,
    layer: &KgLayer,
    e: Var,
    words: Var,
    adjacencies: &[Var],
    cand_mask: &[bool],
    dropout: f64,
) -> Result<LayerOutput, NumericsError> {
    if adjacencies.len() != layer.kg_w.len() {
        return Err(NumericsError::ShapeMismatch {
            op: "layer_forward",
            left: vec![layer.kg_w.len()],
            right: vec![adjacencies.len()],
        });
    }
    let ep = phrase2ent(g, b, &layer.phrase, e, words, dropout)?;
    let ec = ent2ent(g, b, &layer.ent, e, cand_mask, dropout)?;
    let e_prime = g.add(ep, ec)?;
    let mut e_k = Vec::with_capacity(adjacencies.len());
    for (&adj, &w) in adjacencies.iter().zip(&layer.kg_w) {
        e_k.push(kg2ent(g, e_prime, adj, b[w], Some(cand_mask))?);
    }
    let e_k_avg = match e_k.len() {
        0 => e_prime,
        1 => e_k[0],
        n => {
            let mut acc = e_k[0];
            for &x in &e_k[1..] {
                acc = g.add(acc, x)?;
            }
            g.scale(acc, T::one() / T::lit(n as f64))?
        }
    };
    Ok(LayerOutput { e_prime, e_k, e_k_avg })
}

/// Elementwise max of `E' v` and every `E_k v`; shape `[n, 1]`.
pub fn score<T: Scalar>(g: &mut Graph<T>, out: &LayerOutput, v: Var) -> Result<Var, NumericsError> {
    let mut sources = vec![g.matmul(out.e_prime, v)?];
    for &ek in &out.e_k {
        sources.push(g.matmul(ek, v)?);
    }
    if sources.len() == 1 {
        return Ok(sources[0]);
    }
    g.max_of(&sources)
}

/// Column of the best unmasked candidate per row of `scores` (`[M, K]`);
/// ties go to the lowest column.
pub fn predict<T: Scalar>(scores: &Tensor<T>, cand_mask: &[bool]) -> Result<Vec<usize>, NumericsError> {
    let k = scores.cols();
    if cand_mask.len() != scores.numel() {
        return Err(NumericsError::ShapeMismatch {
            op: "predict",
            left: scores.shape().to_vec(),
            right: vec![cand_mask.len()],
        });
    }
    (0..scores.rows())
        .map(|m| {
            let row = scores.row(m);
            let mut best: Option<usize> = None;
            for c in 0..k {
                if cand_mask[m * k + c] && best.is_none_or(|bc| row[c] > row[bc]) {
                    best = Some(c);
                }
            }
            best.ok_or(NumericsError::AllMasked)
        })
        .collect()
}
