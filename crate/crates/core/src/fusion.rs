//! Candidate payloads: entity, type and relation embeddings fused by an
//! MLP, plus the mention type head and mention position offsets.

use rand::Rng;

use crate::encoder::sinusoidal_pe;
use crate::layers::{uniform, Linear, Mlp};
use crate::numerics::{Bound, Graph, NumericsError, ParamId, ParamStore, Tensor, Var};
use crate::scalar::Scalar;

/// `s_i = a . tanh(W x_i + b)`, weights `softmax(s)`, output `sum w_i x_i`.
#[derive(Clone, Debug)]
pub struct AddAttn {
    pub proj: Linear,
    pub a: ParamId,
}

impl AddAttn {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self, NumericsError> {
        let proj = Linear::new(store, &format!("{name}.proj"), dim, dim, true, rng)?;
        let a = store.insert(&format!("{name}.a"), crate::layers::xavier(rng, dim, 1), true)?;
        Ok(Self { proj, a })
    }

    /// Pools each row segment `offsets[s]..offsets[s + 1]` of `x` into one
    /// row.
    pub fn pool<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        x: Var,
        offsets: &[usize],
    ) -> Result<Var, NumericsError> {
        let h = self.proj.apply(g, b, x)?;
        let h = g.tanh(h)?;
        let s = g.matmul(h, b[self.a])?;
        let w = g.segment_softmax(s, offsets)?;
        g.segment_weighted_sum(x, w, offsets)
    }

    /// Pools a list of `[1, d]` (or `[d]`) vectors.
    pub fn add_attn<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, vectors: &[Var]) -> Result<Var, NumericsError> {
        if vectors.is_empty() {
            return Err(NumericsError::Empty { op: "add_attn" });
        }
        let rows = vectors
            .iter()
            .map(|&v| {
                let n = g.value(v).numel();
                g.reshape(v, vec![1, n])
            })
            .collect::<Result<Vec<_>, _>>()?;
        let x = g.concat_rows(&rows)?;
        self.pool(g, b, x, &[0, vectors.len()])
    }
}

/// Dimensions of the fusion stage.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionDims {
    pub entity_rows: usize,
    pub type_vocab: usize,
    pub relation_vocab: usize,
    pub coarse: usize,
    pub d_entity: usize,
    pub d_type: usize,
    pub d_relation: usize,
    pub d_coarse: usize,
    pub hidden: usize,
}

/// Which signals reach the payload MLP.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Signals {
    pub entity: bool,
    pub types: bool,
    pub relations: bool,
    pub type_prediction: bool,
}

#[derive(Clone, Debug)]
pub struct Fusion {
    pub dims: FusionDims,
    pub entity_table: ParamId,
    /// Last row is the NO-TYPE embedding.
    pub type_table: ParamId,
    /// Last row is the NO-RELATION embedding.
    pub relation_table: ParamId,
    pub coarse_table: ParamId,
    pub type_attn: AddAttn,
    pub relation_attn: AddAttn,
    pub type_head: Mlp,
    pub payload: Mlp,
    pub pe_proj: Linear,
    pub null_candidate: ParamId,
}

/// One real candidate slot.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotFeatures {
    /// Row of the entity table.
    pub entity_row: usize,
    /// Mention (row of the grid) this slot belongs to.
    pub mention: usize,
    pub types: Vec<u32>,
    pub relations: Vec<u32>,
}

pub struct EntityMatrix {
    /// `[M * K, H]`, row `m * K + c`.
    pub e: Var,
    /// `[M, C]` logits of the mention type head, when enabled.
    pub type_logits: Option<Var>,
}

fn segments(lists: impl Iterator<Item = Vec<usize>>, empty_row: usize) -> (Vec<usize>, Vec<usize>) {
    let mut idx = Vec::new();
    let mut offsets = vec![0];
    for l in lists {
        if l.is_empty() {
            idx.push(empty_row);
        } else {
            idx.extend(l);
        }
        offsets.push(idx.len());
    }
    (idx, offsets)
}

impl Fusion {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        dims: FusionDims,
        rng: &mut R,
    ) -> Result<Self, NumericsError> {
        // All entity rows start from one shared vector.
        let shared: Tensor<T> = uniform(rng, &[dims.d_entity], 0.1);
        let mut table = Vec::with_capacity(dims.entity_rows * dims.d_entity);
        for _ in 0..dims.entity_rows {
            table.extend_from_slice(shared.data());
        }
        let entity_table = store.insert(
            "entity.table",
            Tensor::new(vec![dims.entity_rows, dims.d_entity], table)?,
            true,
        )?;
        let type_table = store.insert(
            "type.table",
            uniform(rng, &[dims.type_vocab + 1, dims.d_type], 0.5),
            true,
        )?;
        let relation_table = store.insert(
            "relation.table",
            uniform(rng, &[dims.relation_vocab + 1, dims.d_relation], 0.5),
            true,
        )?;
        let coarse_table = store.insert("coarse.table", uniform(rng, &[dims.coarse, dims.d_coarse], 0.5), true)?;
        let type_attn = AddAttn::new(store, "type.attn", dims.d_type, rng)?;
        let relation_attn = AddAttn::new(store, "relation.attn", dims.d_relation, rng)?;
        let type_head = Mlp::new(store, "type.head", dims.hidden, dims.hidden, dims.coarse, rng)?;
        let d_in = dims.d_entity + dims.d_type + dims.d_coarse + dims.d_relation;
        let payload = Mlp::new(store, "payload", d_in, dims.hidden, dims.hidden, rng)?;
        let pe_proj = Linear::new(store, "mention_pe", 2 * dims.hidden, dims.hidden, false, rng)?;
        let null_candidate = store.insert("null_candidate", uniform(rng, &[1, dims.hidden], 0.1), true)?;
        Ok(Self {
            dims,
            entity_table,
            type_table,
            relation_table,
            coarse_table,
            type_attn,
            relation_attn,
            type_head,
            payload,
            pe_proj,
            null_candidate,
        })
    }

    /// Type aggregate per slot, `[n, D_t]`.
    pub fn aggregate_types<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        slots: &[SlotFeatures],
    ) -> Result<Var, NumericsError> {
        let (idx, offsets) = segments(
            slots.iter().map(|s| s.types.iter().map(|&t| t as usize).collect()),
            self.dims.type_vocab,
        );
        let x = g.gather_rows(b[self.type_table], &idx)?;
        self.type_attn.pool(g, b, x, &offsets)
    }

    /// Relation aggregate per slot, `[n, D_r]`.
    pub fn aggregate_relations<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        slots: &[SlotFeatures],
    ) -> Result<Var, NumericsError> {
        let (idx, offsets) = segments(
            slots.iter().map(|s| s.relations.iter().map(|&r| r as usize).collect()),
            self.dims.relation_vocab,
        );
        let x = g.gather_rows(b[self.relation_table], &idx)?;
        self.relation_attn.pool(g, b, x, &offsets)
    }

    /// Returns `(logits [M, C], t_hat [M, D_c])` for half-open spans over
    /// the rows of `words`.
    pub fn mention_type_predict<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        words: Var,
        spans: &[(usize, usize)],
        dropout: f64,
    ) -> Result<(Var, Var), NumericsError> {
        let n = g.value(words).rows();
        check_spans(spans, n)?;
        let first: Vec<usize> = spans.iter().map(|s| s.0).collect();
        let last: Vec<usize> = spans.iter().map(|s| s.1 - 1).collect();
        let f = g.gather_rows(words, &first)?;
        let l = g.gather_rows(words, &last)?;
        let m = g.add(f, l)?;
        let logits = self.type_head.apply(g, b, m, dropout)?;
        let probs = g.softmax(logits, None)?;
        let t_hat = g.matmul(probs, b[self.coarse_table])?;
        Ok((logits, t_hat))
    }

    /// `proj([pe(first); pe(last)])` per span, `[M, H]`.
    pub fn mention_position_encode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        spans: &[(usize, usize)],
    ) -> Result<Var, NumericsError> {
        let h = self.dims.hidden;
        let mut data = Vec::with_capacity(spans.len() * 2 * h);
        for &(s, e) in spans {
            if e <= s {
                return Err(NumericsError::BadSegments {
                    op: "mention_position_encode",
                });
            }
            for p in [s, e - 1] {
                let pe = sinusoidal_pe(p, h).map_err(|_| NumericsError::BadSegments {
                    op: "mention_position_encode",
                })?;
                data.extend(pe.into_iter().map(T::lit));
            }
        }
        let x = g.constant(Tensor::new(vec![spans.len(), 2 * h], data)?);
        self.pe_proj.apply(g, b, x)
    }

    /// Payload rows for real slots, `[n, H]`. `entity_mask[i]` zeroes the
    /// entity embedding of slot `i`; `t_hat` rows are per mention.
    pub fn entity_payload<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        slots: &[SlotFeatures],
        t_hat: Option<Var>,
        entity_mask: Option<&[bool]>,
        signals: Signals,
        dropout: f64,
    ) -> Result<Var, NumericsError> {
        let n = slots.len();
        let d = &self.dims;
        let zeros = |g: &mut Graph<T>, w: usize| g.constant(Tensor::zeros(&[n, w]));
        let u = if signals.entity {
            let rows: Vec<usize> = slots.iter().map(|s| s.entity_row).collect();
            let u = g.gather_rows(b[self.entity_table], &rows)?;
            match entity_mask {
                Some(m) => g.zero_rows(u, m)?,
                None => u,
            }
        } else {
            zeros(g, d.d_entity)
        };
        let t = if signals.types {
            self.aggregate_types(g, b, slots)?
        } else {
            zeros(g, d.d_type)
        };
        let th = match t_hat {
            Some(th) if signals.types && signals.type_prediction => {
                let idx: Vec<usize> = slots.iter().map(|s| s.mention).collect();
                g.gather_rows(th, &idx)?
            }
            _ => zeros(g, d.d_coarse),
        };
        let r = if signals.relations {
            self.aggregate_relations(g, b, slots)?
        } else {
            zeros(g, d.d_relation)
        };
        let x = g.concat_cols(&[u, t, th, r])?;
        self.payload.apply(g, b, x, dropout)
    }

    /// Assembles the `[M * K, H]` candidate matrix. `grid[m * k + c]` is the
    /// index into `slots` or `None` for padding.
    #[allow(clippy::too_many_arguments)]
    pub fn build_e<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        words: Var,
        spans: &[(usize, usize)],
        slots: &[SlotFeatures],
        grid: &[Option<usize>],
        entity_mask: Option<&[bool]>,
        signals: Signals,
        dropout: f64,
    ) -> Result<EntityMatrix, NumericsError> {
        let m = spans.len();
        if m == 0 || slots.is_empty() {
            return Err(NumericsError::Empty { op: "build_e" });
        }
        if !grid.len().is_multiple_of(m) {
            return Err(NumericsError::ShapeMismatch {
                op: "build_e",
                left: vec![m],
                right: vec![grid.len()],
            });
        }
        let k = grid.len() / m;
        let (type_logits, t_hat) = if signals.types && signals.type_prediction {
            let (l, t) = self.mention_type_predict(g, b, words, spans, dropout)?;
            (Some(l), Some(t))
        } else {
            (None, None)
        };
        let payload = self.entity_payload(g, b, slots, t_hat, entity_mask, signals, dropout)?;
        let all = g.concat_rows(&[payload, b[self.null_candidate]])?;
        let null = slots.len();
        let idx: Vec<usize> = grid.iter().map(|s| s.unwrap_or(null)).collect();
        let e = g.gather_rows(all, &idx)?;
        let pe = self.mention_position_encode(g, b, spans)?;
        let per_row: Vec<usize> = (0..m * k).map(|i| i / k).collect();
        let pe = g.gather_rows(pe, &per_row)?;
        let e = g.add(e, pe)?;
        Ok(EntityMatrix { e, type_logits })
    }
}

fn check_spans(spans: &[(usize, usize)], n: usize) -> Result<(), NumericsError> {
    for &(s, e) in spans {
        if s >= e || e > n {
            return Err(NumericsError::IndexOutOfRange {
                op: "mention span",
                index: e,
                len: n,
            });
        }
    }
    Ok(())
}
