//! Contextual word matrix: trainable token embeddings plus sinusoidal
//! positions, optionally followed by self-attention blocks.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::attention::AttentionBlock;
use crate::corpus::Corpus;
use crate::numerics::{Bound, Graph, NumericsError, ParamId, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("positional encoding width must be even, got {0}")]
    OddDimension(usize),
    #[error("sentence of {len} tokens exceeds the maximum of {max}")]
    TooLong { len: usize, max: usize },
    #[error("{path}: {msg}")]
    VocabFile { path: String, msg: String },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub const PAD: usize = 0;
pub const UNK: usize = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        let tokens = vec!["<pad>".to_string(), "<unk>".to_string()];
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }
}

impl Vocab {
    /// Every token of the corpus (minimum frequency one), in order of
    /// first appearance.
    pub fn build(corpus: &Corpus) -> Self {
        let mut v = Self::default();
        for s in &corpus.sentences {
            for t in &s.tokens {
                v.add(t);
            }
        }
        v
    }

    pub fn add(&mut self, token: &str) -> usize {
        let token = token.to_lowercase();
        if let Some(&i) = self.index.get(&token) {
            return i;
        }
        self.tokens.push(token.clone());
        self.index.insert(token, self.tokens.len() - 1);
        self.tokens.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(&token.to_lowercase()).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let text: String = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| format!("{t}\t{i}\n"))
            .collect();
        fs::write(path, text)
    }

    pub fn load(path: &Path) -> Result<Self, EncoderError> {
        let err = |msg: String| EncoderError::VocabFile {
            path: path.display().to_string(),
            msg,
        };
        let text = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let mut tokens = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let (tok, id) = line
                .split_once('\t')
                .ok_or_else(|| err(format!("line {}: expected token<TAB>id", n + 1)))?;
            let id: usize = id.trim().parse().map_err(|_| err(format!("line {}: bad id", n + 1)))?;
            if id != tokens.len() {
                return Err(err(format!("line {}: ids must be dense and ordered", n + 1)));
            }
            tokens.push(tok.to_string());
        }
        if tokens.len() < 2 {
            return Err(err("missing special tokens".into()));
        }
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Ok(Self { tokens, index })
    }
}

/// `pe[2i] = sin(pos / 10000^(2i/dim))`, `pe[2i+1] = cos(...)`.
pub fn sinusoidal_pe(position: usize, dim: usize) -> Result<Vec<f64>, EncoderError> {
    if !dim.is_multiple_of(2) {
        return Err(EncoderError::OddDimension(dim));
    }
    let pos = position as f64;
    let mut pe = Vec::with_capacity(dim);
    for i in 0..dim / 2 {
        let angle = pos / 10000f64.powf((2 * i) as f64 / dim as f64);
        pe.push(angle.sin());
        pe.push(angle.cos());
    }
    Ok(pe)
}

/// Encoder parameters: the token table and optional attention blocks.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub token_table: ParamId,
    pub blocks: Vec<AttentionBlock>,
    pub hidden: usize,
    pub max_len: usize,
}

impl Encoder {
    /// Builds the word matrix `W` (`[n_tokens, hidden]`).
    pub fn encode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        token_ids: &[usize],
        dropout: f64,
    ) -> Result<Var, EncoderError> {
        if token_ids.len() > self.max_len {
            return Err(EncoderError::TooLong {
                len: token_ids.len(),
                max: self.max_len,
            });
        }
        let emb = g.gather_rows(b[self.token_table], token_ids)?;
        let mut pe = Vec::with_capacity(token_ids.len() * self.hidden);
        for i in 0..token_ids.len() {
            pe.extend(sinusoidal_pe(i, self.hidden)?.into_iter().map(T::lit));
        }
        let pe = g.constant(Tensor::new(vec![token_ids.len(), self.hidden], pe)?);
        let mut w = g.add(emb, pe)?;
        for block in &self.blocks {
            w = block.forward(g, b, w, w, None, dropout)?;
        }
        Ok(w)
    }
}
