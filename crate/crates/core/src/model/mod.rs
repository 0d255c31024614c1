//! Causal decoder-only transformer LM with an MoE feed-forward layer in
//! every block.

mod checkpoint;

pub use checkpoint::{
    load_checkpoint, restore_checkpoint, save_checkpoint, CheckpointData, CheckpointError,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::{ConfigError, ModelArchSpec};
use crate::moe::{LayerTrace, MoeError, MoeLayer, PoolReport};
use crate::params::{BoundParams, ParamBucket, ParamId, ParamSet};
use crate::tensor::{Element, Graph, TensorError, TensorId};

const INIT_STD: f64 = 0.02;
const RMS_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Moe(#[from] MoeError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("token id {id} out of range for vocab {vocab}")]
    TokenOutOfRange { id: u32, vocab: u64 },
    #[error("sequence length {seq} exceeds configured maximum {max}")]
    SequenceTooLong { seq: usize, max: usize },
    #[error("bad batch: {0}")]
    BatchShape(String),
}

/// A flattened (batch, seq) block of token ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub batch: usize,
    pub seq: usize,
    pub ids: Vec<u32>,
}

impl TokenBatch {
    pub fn new(batch: usize, seq: usize, ids: Vec<u32>) -> Result<Self, ModelError> {
        if ids.len() != batch * seq {
            return Err(ModelError::BatchShape(format!(
                "{} ids for a {batch}x{seq} batch",
                ids.len()
            )));
        }
        Ok(TokenBatch { batch, seq, ids })
    }

    pub fn from_rows(rows: &[Vec<u32>]) -> Result<Self, ModelError> {
        let batch = rows.len();
        let seq = rows.first().map(|r| r.len()).unwrap_or(0);
        if rows.iter().any(|r| r.len() != seq) {
            return Err(ModelError::BatchShape("ragged rows".to_string()));
        }
        Ok(TokenBatch {
            batch,
            seq,
            ids: rows.concat(),
        })
    }

    pub fn tokens(&self) -> usize {
        self.batch * self.seq
    }
}

/// Per-block parameter handles.
pub struct Block {
    pub norm_attn: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub norm_ffn: ParamId,
    pub moe: MoeLayer,
}

/// The assembled LM: structure, parameter store, and architecture.
pub struct TransformerLM<T: Element> {
    pub arch: ModelArchSpec,
    pub max_seq_len: usize,
    pub seed: u64,
    pub params: ParamSet<T>,
    pub token_embedding: ParamId,
    pub pos_embedding: ParamId,
    pub blocks: Vec<Block>,
    pub final_norm: ParamId,
    pub output_head: ParamId,
}

/// One full forward pass.
pub struct ForwardOutput {
    /// (batch * seq, vocab) next-token logits.
    pub logits: TensorId,
    /// Raw load-balancing loss summed over layers and pools.
    pub lb: Option<TensorId>,
    /// Raw z-loss summed over layers and pools.
    pub z: Option<TensorId>,
    /// Per layer, per pool reports.
    pub reports: Vec<Vec<PoolReport>>,
    /// Routing trace per layer, replayable via `forward_with_trace`.
    pub trace: Vec<LayerTrace>,
}

impl<T: Element> TransformerLM<T> {
    /// Deterministically initializes a model from the architecture and seed.
    ///
    /// Weights draw from N(0, 0.02^2); the attention output projection and
    /// every FFN down projection are scaled down by 1/sqrt(2 * layers).
    /// Norm gains start at one.
    pub fn build(arch: &ModelArchSpec, max_seq_len: usize, seed: u64) -> Result<Self, ModelError> {
        arch.validate()?;
        let d = arch.model_dim as usize;
        let v = arch.vocab as usize;
        let down_std = INIT_STD / (2.0 * arch.layers as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();

        let token_embedding = params.add_normal(
            "token_embedding",
            ParamBucket::Embedding,
            vec![v, d],
            INIT_STD,
            &mut rng,
        );
        let pos_embedding = params.add_normal(
            "pos_embedding",
            ParamBucket::Embedding,
            vec![max_seq_len, d],
            INIT_STD,
            &mut rng,
        );
        let mut blocks = Vec::with_capacity(arch.layers as usize);
        for li in 0..arch.layers {
            let prefix = format!("layer{li}");
            let norm_attn = params.add_filled(
                format!("{prefix}.norm_attn"),
                ParamBucket::NonEmbedding,
                vec![d],
                1.0,
            );
            let wq = params.add_normal(
                format!("{prefix}.wq"),
                ParamBucket::NonEmbedding,
                vec![d, d],
                INIT_STD,
                &mut rng,
            );
            let wk = params.add_normal(
                format!("{prefix}.wk"),
                ParamBucket::NonEmbedding,
                vec![d, d],
                INIT_STD,
                &mut rng,
            );
            let wv = params.add_normal(
                format!("{prefix}.wv"),
                ParamBucket::NonEmbedding,
                vec![d, d],
                INIT_STD,
                &mut rng,
            );
            let wo = params.add_normal(
                format!("{prefix}.wo"),
                ParamBucket::NonEmbedding,
                vec![d, d],
                down_std,
                &mut rng,
            );
            let norm_ffn = params.add_filled(
                format!("{prefix}.norm_ffn"),
                ParamBucket::NonEmbedding,
                vec![d],
                1.0,
            );
            let moe = MoeLayer::build(
                &arch.layer_spec,
                d,
                arch.dense_ffn_dim() as usize,
                INIT_STD,
                down_std,
                &mut params,
                &mut rng,
                &prefix,
            )?;
            blocks.push(Block {
                norm_attn,
                wq,
                wk,
                wv,
                wo,
                norm_ffn,
                moe,
            });
        }
        let final_norm = params.add_filled("final_norm", ParamBucket::NonEmbedding, vec![d], 1.0);
        let output_head = params.add_normal(
            "output_head",
            ParamBucket::Embedding,
            vec![d, v],
            INIT_STD,
            &mut rng,
        );
        Ok(TransformerLM {
            arch: arch.clone(),
            max_seq_len,
            seed,
            params,
            token_embedding,
            pos_embedding,
            blocks,
            final_norm,
            output_head,
        })
    }

    /// Instantiated parameter tallies (non-embedding, router, embedding).
    /// The embedding bucket holds `2 * vocab * d` plus the learned position
    /// table (`max_seq_len * d`).
    pub fn bucket_tally(&self) -> (u64, u64, u64) {
        self.params.bucket_tally()
    }

    pub fn forward(
        &self,
        graph: &mut Graph<T>,
        bound: &BoundParams,
        batch: &TokenBatch,
    ) -> Result<ForwardOutput, ModelError> {
        self.run(graph, bound, batch, None)
    }

    /// Forward with routing selections replayed from an earlier trace.
    pub fn forward_with_trace(
        &self,
        graph: &mut Graph<T>,
        bound: &BoundParams,
        batch: &TokenBatch,
        trace: &[LayerTrace],
    ) -> Result<ForwardOutput, ModelError> {
        if trace.len() != self.blocks.len() {
            return Err(ModelError::BatchShape(format!(
                "trace covers {} layers, model has {}",
                trace.len(),
                self.blocks.len()
            )));
        }
        self.run(graph, bound, batch, Some(trace))
    }

    fn run(
        &self,
        graph: &mut Graph<T>,
        bound: &BoundParams,
        batch: &TokenBatch,
        frozen: Option<&[LayerTrace]>,
    ) -> Result<ForwardOutput, ModelError> {
        if batch.seq > self.max_seq_len {
            return Err(ModelError::SequenceTooLong {
                seq: batch.seq,
                max: self.max_seq_len,
            });
        }
        for &id in &batch.ids {
            if u64::from(id) >= self.arch.vocab {
                return Err(ModelError::TokenOutOfRange {
                    id,
                    vocab: self.arch.vocab,
                });
            }
        }
        let heads = self.arch.heads as usize;
        let dh = self.arch.model_dim as usize / heads;

        let token_rows: Vec<usize> = batch.ids.iter().map(|&i| i as usize).collect();
        let pos_rows: Vec<usize> = (0..batch.tokens()).map(|i| i % batch.seq).collect();
        let tok = graph.gather_rows(bound.id(self.token_embedding), &token_rows)?;
        let pos = graph.gather_rows(bound.id(self.pos_embedding), &pos_rows)?;
        let mut h = graph.add(tok, pos)?;

        let mut lb: Option<TensorId> = None;
        let mut z: Option<TensorId> = None;
        let mut reports = Vec::with_capacity(self.blocks.len());
        let mut traces = Vec::with_capacity(self.blocks.len());

        for (li, block) in self.blocks.iter().enumerate() {
            let a = graph.rms_norm(h, bound.id(block.norm_attn), RMS_EPS)?;
            let q = graph.matmul(a, bound.id(block.wq))?;
            let k = graph.matmul(a, bound.id(block.wk))?;
            let v = graph.matmul(a, bound.id(block.wv))?;
            let qh = graph.split_heads(q, batch.batch, heads)?;
            let kh = graph.split_heads(k, batch.batch, heads)?;
            let vh = graph.split_heads(v, batch.batch, heads)?;
            let scores = graph.bmm(qh, kh, true)?;
            let scaled = graph.scale(scores, 1.0 / (dh as f64).sqrt());
            let attn = graph.causal_softmax(scaled)?;
            let ctx = graph.bmm(attn, vh, false)?;
            let merged = graph.merge_heads(ctx, batch.batch, heads)?;
            let attn_out = graph.matmul(merged, bound.id(block.wo))?;
            h = graph.add(h, attn_out)?;

            let f = graph.rms_norm(h, bound.id(block.norm_ffn), RMS_EPS)?;
            let moe_out = block
                .moe
                .forward(graph, bound, f, frozen.map(|t| &t[li]))?;
            h = graph.add(h, moe_out.output)?;

            if let Some(l) = moe_out.lb {
                lb = Some(match lb {
                    Some(acc) => graph.add(acc, l)?,
                    None => l,
                });
            }
            if let Some(zl) = moe_out.z {
                z = Some(match z {
                    Some(acc) => graph.add(acc, zl)?,
                    None => zl,
                });
            }
            reports.push(moe_out.reports);
            traces.push(moe_out.trace);
        }

        let f = graph.rms_norm(h, bound.id(self.final_norm), RMS_EPS)?;
        let logits = graph.matmul(f, bound.id(self.output_head))?;
        Ok(ForwardOutput {
            logits,
            lb,
            z,
            reports,
            trace: traces,
        })
    }
}
