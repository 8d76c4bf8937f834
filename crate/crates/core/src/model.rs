//! The full disambiguation model and the conversion of corpus sentences
//! into model inputs.

use thiserror::Error;

use crate::attention::{adjacency_slice, layer_forward, predict, score, AttentionBlock, KgLayer, LayerOutput};
use crate::corpus::Sentence;
use crate::encoder::{Encoder, EncoderError, Vocab};
use crate::fusion::{Fusion, FusionDims, Signals, SlotFeatures};
use crate::kb::{EntityId, StructuredKB};
use crate::layers::{uniform, xavier};
use crate::numerics::{Bound, Graph, NumericsError, ParamId, ParamStore, Tensor, Var};
use crate::rng;
use crate::scalar::Scalar;
use crate::trainer::config::{ConfigError, TrainConfig};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("sentence {0} has no mention with a gold candidate")]
    NoGold(u64),
    #[error("knowledge base has {kb} coarse types but the model is configured for {model}")]
    CoarseTypes { kb: usize, model: usize },
    #[error("model was built for {model} entities, knowledge base has {kb}")]
    EntityCount { kb: usize, model: usize },
}

/// Sizes that fix the parameter shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelDims {
    pub vocab: usize,
    pub entities: usize,
    pub entity_rows: usize,
    pub type_vocab: usize,
    pub relation_vocab: usize,
    pub adjacencies: Vec<String>,
}

impl ModelDims {
    pub fn from_kb(kb: &StructuredKB, vocab: &Vocab, cfg: &TrainConfig) -> Self {
        Self {
            vocab: vocab.len(),
            entities: kb.len(),
            entity_rows: kb.len(),
            type_vocab: kb.type_vocab_size,
            relation_vocab: kb.relation_vocab_size,
            adjacencies: if cfg.use_kg { kb.adjacency_names() } else { Vec::new() },
        }
    }
}

/// Which mentions of a sentence become model rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MentionFilter {
    /// Gold entity must be among the candidates.
    Train,
    /// Gold among the candidates and more than one candidate.
    Eval,
    /// Any mention with at least one candidate.
    All,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MentionInput {
    pub start: usize,
    pub end: usize,
    pub gold: Option<EntityId>,
    pub gold_col: Option<usize>,
    pub coarse: Option<u32>,
    pub weak: bool,
}

/// One sentence ready for the forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub sentence_id: u64,
    pub tokens: Vec<usize>,
    pub mentions: Vec<MentionInput>,
    pub k: usize,
    /// `grid[m * k + c]` indexes `slots`; `None` is padding.
    pub grid: Vec<Option<usize>>,
    pub slots: Vec<SlotFeatures>,
    pub slot_entities: Vec<EntityId>,
    /// One `[M*K, M*K]` slice per model adjacency.
    pub adjacencies: Vec<Tensor<f64>>,
}

impl Instance {
    pub fn cand_mask(&self) -> Vec<bool> {
        self.grid.iter().map(Option::is_some).collect()
    }

    pub fn spans(&self) -> Vec<(usize, usize)> {
        self.mentions.iter().map(|m| (m.start, m.end)).collect()
    }

    pub fn candidate(&self, m: usize, c: usize) -> Option<EntityId> {
        self.grid[m * self.k + c].map(|s| self.slot_entities[s])
    }
}

pub struct ForwardOut {
    /// `[M, K]`
    pub scores: Var,
    pub type_logits: Option<Var>,
    pub last: LayerOutput,
}

pub struct Losses {
    pub total: Var,
    pub dis: Var,
    pub type_loss: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    pub config: TrainConfig,
    pub dims: ModelDims,
    pub params: ParamStore<T>,
    pub vocab: Vocab,
    pub encoder: Encoder,
    pub fusion: Fusion,
    pub layers: Vec<KgLayer>,
    pub score_v: ParamId,
    /// Entity index to entity-table row.
    pub entity_rows: Vec<u32>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: TrainConfig, vocab: Vocab, kb: &StructuredKB) -> Result<Self, ModelError> {
        if kb.coarse_vocab_size > config.coarse_types {
            return Err(ModelError::CoarseTypes {
                kb: kb.coarse_vocab_size,
                model: config.coarse_types,
            });
        }
        let dims = ModelDims::from_kb(kb, &vocab, &config);
        let rows = (0..kb.len() as u32).collect();
        Self::with_dims(config, vocab, dims, rows)
    }

    /// Freshly initialised parameters for the given shapes.
    pub fn with_dims(
        config: TrainConfig,
        vocab: Vocab,
        dims: ModelDims,
        entity_rows: Vec<u32>,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let h = config.hidden;
        let mut r = rng::stream(config.seed, rng::INIT);
        let mut params = ParamStore::new();
        // Unit-variance token vectors, on the scale of the positional encoding.
        let token_table = params.insert("encoder.token", uniform(&mut r, &[dims.vocab, h], 3f64.sqrt()), true)?;
        let blocks = (0..config.encoder_layers)
            .map(|i| {
                AttentionBlock::new(
                    &mut params,
                    &format!("encoder.block{i}"),
                    h,
                    config.ff_dim,
                    config.heads,
                    &mut r,
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        let encoder = Encoder {
            token_table,
            blocks,
            hidden: h,
            max_len: config.max_sentence_len,
        };
        if config.freeze_encoder {
            params.set_trainable(token_table, false);
            for b in &encoder.blocks {
                for id in b.ids() {
                    params.set_trainable(id, false);
                }
            }
        }
        let fusion = Fusion::new(
            &mut params,
            FusionDims {
                entity_rows: dims.entity_rows,
                type_vocab: dims.type_vocab,
                relation_vocab: dims.relation_vocab,
                coarse: config.coarse_types,
                d_entity: config.d_entity,
                d_type: config.d_type,
                d_relation: config.d_relation,
                d_coarse: config.d_coarse,
                hidden: h,
            },
            &mut r,
        )?;
        let layers = (0..config.layers)
            .map(|l| {
                KgLayer::new(
                    &mut params,
                    &format!("layer{l}"),
                    h,
                    config.ff_dim,
                    config.heads,
                    &dims.adjacencies,
                    &mut r,
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        let score_v = params.insert("score.v", xavier(&mut r, h, 1), true)?;
        Ok(Self {
            config,
            dims,
            params,
            vocab,
            encoder,
            fusion,
            layers,
            score_v,
            entity_rows,
        })
    }

    pub fn signals(&self) -> Signals {
        Signals {
            entity: self.config.use_entity,
            types: self.config.use_type,
            relations: self.config.use_kg,
            type_prediction: self.config.type_prediction,
        }
    }

    /// Candidate generation and feature lookup for one sentence. `Ok(None)`
    /// when no mention survives `filter`.
    pub fn prepare(
        &self,
        sentence: &Sentence,
        kb: &StructuredKB,
        filter: MentionFilter,
    ) -> Result<Option<Instance>, ModelError> {
        if kb.len() != self.dims.entities {
            return Err(ModelError::EntityCount {
                kb: kb.len(),
                model: self.dims.entities,
            });
        }
        if sentence.tokens.len() > self.config.max_sentence_len {
            return Err(EncoderError::TooLong {
                len: sentence.tokens.len(),
                max: self.config.max_sentence_len,
            }
            .into());
        }
        let cfg = &self.config;
        let mut kept = Vec::new();
        for m in &sentence.mentions {
            if m.end > sentence.tokens.len() || m.start >= m.end {
                continue;
            }
            let cands = kb.candidates(&sentence.span_text(m.start, m.end), cfg.candidates);
            if cands.is_empty() {
                continue;
            }
            let gold = kb.id(&m.gold);
            let gold_col = gold.and_then(|g| cands.iter().position(|&(e, _)| e == g));
            let keep = match filter {
                MentionFilter::Train => gold_col.is_some(),
                MentionFilter::Eval => gold_col.is_some() && cands.len() > 1,
                MentionFilter::All => true,
            };
            if keep {
                let input = MentionInput {
                    start: m.start,
                    end: m.end,
                    gold,
                    gold_col,
                    coarse: gold.and_then(|g| kb.coarse_of(g)),
                    weak: m.weak,
                };
                kept.push((input, cands));
            }
        }
        if kept.is_empty() {
            return Ok(None);
        }
        let k = kept.iter().map(|(_, c)| c.len()).max().unwrap_or(1);
        let mut grid = vec![None; kept.len() * k];
        let mut slots = Vec::new();
        let mut slot_entities = Vec::new();
        for (mi, (_, cands)) in kept.iter().enumerate() {
            for (c, &(e, _)) in cands.iter().enumerate() {
                grid[mi * k + c] = Some(slots.len());
                slots.push(SlotFeatures {
                    entity_row: self.entity_rows[e.index()] as usize,
                    mention: mi,
                    types: kb.types_of(e).iter().take(cfg.max_types).copied().collect(),
                    relations: kb.relations_of(e).iter().take(cfg.max_relations).copied().collect(),
                });
                slot_entities.push(e);
            }
        }
        let mention_of: Vec<usize> = (0..grid.len()).map(|i| i / k).collect();
        let ent_at = |i: usize| grid[i].map(|s| slot_entities[s]);
        let adjacencies = self
            .dims
            .adjacencies
            .iter()
            .map(|name| {
                let adj = kb.adjacencies.get(name);
                adjacency_slice(
                    |i, j| match (adj, ent_at(i), ent_at(j)) {
                        (Some(a), Some(x), Some(y)) => a.weight(x, y),
                        _ => 0.0,
                    },
                    &mention_of,
                )
            })
            .collect();
        Ok(Some(Instance {
            sentence_id: sentence.id,
            tokens: self.vocab.encode(&sentence.tokens),
            mentions: kept.into_iter().map(|(m, _)| m).collect(),
            k,
            grid,
            slots,
            slot_entities,
            adjacencies,
        }))
    }

    /// Forward pass. `entity_mask[i]` zeroes the entity embedding of slot
    /// `i` (training only; pass `None` for evaluation).
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        inst: &Instance,
        entity_mask: Option<&[bool]>,
    ) -> Result<ForwardOut, ModelError> {
        let p = self.config.dropout;
        let words = self.encoder.encode(g, b, &inst.tokens, p)?;
        let spans = inst.spans();
        let em = self.fusion.build_e(
            g,
            b,
            words,
            &spans,
            &inst.slots,
            &inst.grid,
            entity_mask,
            self.signals(),
            p,
        )?;
        let mask = inst.cand_mask();
        let adj: Vec<Var> = inst.adjacencies.iter().map(|a| g.constant(a.cast())).collect();
        let mut e = em.e;
        let mut last = None;
        for layer in &self.layers {
            let out = layer_forward(g, b, layer, e, words, &adj, &mask, p)?;
            e = out.e_k_avg;
            last = Some(out);
        }
        let last = last.expect("at least one layer");
        let s = score(g, &last, b[self.score_v])?;
        let scores = g.reshape(s, vec![inst.mentions.len(), inst.k])?;
        Ok(ForwardOut {
            scores,
            type_logits: em.type_logits,
            last,
        })
    }

    /// Mean cross-entropy over mentions with a gold column, plus the mean
    /// coarse-type cross-entropy when the type head is active.
    pub fn loss(&self, g: &mut Graph<T>, inst: &Instance, out: &ForwardOut) -> Result<Losses, ModelError> {
        let gold: Vec<Option<usize>> = inst.mentions.iter().map(|m| m.gold_col).collect();
        let n = gold.iter().flatten().count();
        if n == 0 {
            return Err(ModelError::NoGold(inst.sentence_id));
        }
        let mask = inst.cand_mask();
        let sum = g.row_cross_entropy(out.scores, &gold, Some(&mask))?;
        let dis = g.scale(sum, T::one() / T::lit(n as f64))?;
        let type_loss = match out.type_logits {
            Some(logits) => {
                let coarse: Vec<Option<usize>> = inst
                    .mentions
                    .iter()
                    .map(|m| m.coarse.map(|c| c as usize).filter(|&c| c < self.config.coarse_types))
                    .collect();
                let nc = coarse.iter().flatten().count();
                if nc == 0 {
                    None
                } else {
                    let s = g.row_cross_entropy(logits, &coarse, None)?;
                    Some(g.scale(s, T::one() / T::lit(nc as f64))?)
                }
            }
            None => None,
        };
        let total = match type_loss {
            Some(t) => g.add(dis, t)?,
            None => dis,
        };
        Ok(Losses { total, dis, type_loss })
    }

    /// Evaluation-mode scores `[M, K]`.
    pub fn scores(&self, inst: &Instance) -> Result<Tensor<T>, ModelError> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g);
        let out = self.forward(&mut g, &b, inst, None)?;
        Ok(g.value(out.scores).clone())
    }

    /// Predicted entity per mention row of `inst`.
    pub fn predict(&self, inst: &Instance) -> Result<Vec<EntityId>, ModelError> {
        let s = self.scores(inst)?;
        let cols = predict(&s, &inst.cand_mask())?;
        Ok(cols
            .into_iter()
            .enumerate()
            .map(|(m, c)| inst.candidate(m, c).expect("unmasked column"))
            .collect())
    }

    /// Popularity of each real slot's entity.
    pub fn slot_counts(&self, inst: &Instance, kb: &StructuredKB) -> Vec<u64> {
        inst.slot_entities.iter().map(|&e| kb.popularity(e)).collect()
    }
}
