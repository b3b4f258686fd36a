//! The universal representation transformer layer.
//!
//! Each head turns the support set into one query per class (from the
//! concatenated class mean) and one key per backbone and class (from that
//! backbone's class mean). Scaled dot products give per-class scores over
//! backbones, which are averaged over classes into a single score vector
//! `α` per head and task. A sample's adapted representation is the
//! concatenation over heads of `Σ_i α_i r_i(x)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, UrtError};
use crate::math::{axpy, dot, softmax, Matrix};
use crate::rng::UrtRng;
use crate::sampler::{set_representations, Episode, SetReps};
use crate::store::FeatureStore;

/// Structural ablations of the layer.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    None,
    /// Query weights pinned to zero; queries are the bias alone.
    NoWq,
    /// Key weights pinned to zero; keys are the bias alone.
    NoWk,
    /// Set representations replaced by zeros before the linear maps.
    NoSetrep,
    /// Head-diversity regularizer disabled.
    NoReg,
}

impl Ablation {
    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::NoWq => "no_wq",
            Ablation::NoWk => "no_wk",
            Ablation::NoSetrep => "no_setrep",
            Ablation::NoReg => "no_reg",
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = UrtError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Ablation::None),
            "no_wq" => Ok(Ablation::NoWq),
            "no_wk" => Ok(Ablation::NoWk),
            "no_setrep" => Ok(Ablation::NoSetrep),
            "no_reg" => Ok(Ablation::NoReg),
            other => Err(UrtError::Config(format!(
                "unknown ablation mode '{other}' (expected no_wq, no_wk, no_setrep or no_reg)"
            ))),
        }
    }
}

/// Query and key maps of one head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    /// `l × (m·d)`
    pub wq: Matrix,
    pub bq: Vec<f64>,
    /// `l × d`
    pub wk: Matrix,
    pub bk: Vec<f64>,
}

impl HeadParams {
    pub fn zeros(num_backbones: usize, dim: usize, key_dim: usize) -> Self {
        Self {
            wq: Matrix::zeros(key_dim, num_backbones * dim),
            bq: vec![0.0; key_dim],
            wk: Matrix::zeros(key_dim, dim),
            bk: vec![0.0; key_dim],
        }
    }

    /// Parameter blocks in canonical order: `wq, bq, wk, bk`.
    pub fn blocks(&self) -> [&[f64]; 4] {
        [self.wq.values(), &self.bq, self.wk.values(), &self.bk]
    }

    pub fn blocks_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.wq.values_mut(),
            &mut self.bq,
            self.wk.values_mut(),
            &mut self.bk,
        ]
    }

    fn check(&self, m: usize, d: usize, l: usize) -> Result<()> {
        let ok = self.wq.rows() == l
            && self.wq.cols() == m * d
            && self.bq.len() == l
            && self.wk.rows() == l
            && self.wk.cols() == d
            && self.bk.len() == l;
        if !ok {
            return Err(UrtError::Shape(format!(
                "head shapes wq {}x{}, bq {}, wk {}x{}, bk {} do not match m={m}, d={d}, l={l}",
                self.wq.rows(),
                self.wq.cols(),
                self.bq.len(),
                self.wk.rows(),
                self.wk.cols(),
                self.bk.len()
            )));
        }
        let finite = self.wq.is_finite()
            && self.wk.is_finite()
            && self.bq.iter().chain(&self.bk).all(|v| v.is_finite());
        if !finite {
            return Err(UrtError::Shape("head parameters contain non-finite values".into()));
        }
        Ok(())
    }
}

/// All trainable parameters of a multi-head layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UrtParams {
    pub num_backbones: usize,
    pub dim: usize,
    pub key_dim: usize,
    pub heads: Vec<HeadParams>,
    #[serde(default)]
    pub ablation: Ablation,
}

impl UrtParams {
    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads.is_empty() || self.num_backbones == 0 || self.dim == 0 || self.key_dim == 0 {
            return Err(UrtError::Shape(format!(
                "layer needs H, m, d, l >= 1, got H={}, m={}, d={}, l={}",
                self.heads.len(),
                self.num_backbones,
                self.dim,
                self.key_dim
            )));
        }
        for h in &self.heads {
            h.check(self.num_backbones, self.dim, self.key_dim)?;
        }
        Ok(())
    }

    /// Applies an ablation, zeroing any weights it pins.
    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        self.ablation = ablation;
        for head in &mut self.heads {
            match ablation {
                Ablation::NoWq => head.wq.values_mut().fill(0.0),
                Ablation::NoWk => head.wk.values_mut().fill(0.0),
                _ => {}
            }
        }
        self
    }

    /// Total number of scalar parameters.
    pub fn len(&self) -> usize {
        self.heads
            .iter()
            .map(|h| h.blocks().iter().map(|b| b.len()).sum::<usize>())
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Glorot-uniform weights, zero biases.
pub fn init_params(
    num_backbones: usize,
    dim: usize,
    key_dim: usize,
    num_heads: usize,
    rng: &mut UrtRng,
) -> Result<UrtParams> {
    if num_backbones == 0 || dim == 0 || key_dim == 0 || num_heads == 0 {
        return Err(UrtError::Config(format!(
            "layer dimensions must be >= 1, got m={num_backbones}, d={dim}, l={key_dim}, H={num_heads}"
        )));
    }
    let mut fill = |mat: &mut Matrix| {
        let bound = (6.0 / (mat.rows() + mat.cols()) as f64).sqrt();
        for v in mat.values_mut() {
            *v = rng.random_range(-bound..bound);
        }
    };
    let heads = (0..num_heads)
        .map(|_| {
            let mut head = HeadParams::zeros(num_backbones, dim, key_dim);
            fill(&mut head.wq);
            fill(&mut head.wk);
            head
        })
        .collect();
    Ok(UrtParams {
        num_backbones,
        dim,
        key_dim,
        heads,
        ablation: Ablation::None,
    })
}

/// Attention of one head over one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadAttention {
    /// `β_{i,c}`, backbones × classes.
    pub logits: Matrix,
    /// `α_{i,c}`, backbones × classes; columns sum to one.
    pub class_scores: Matrix,
    /// `α_i`, the class average of `class_scores`.
    pub scores: Vec<f64>,
    /// `q_c` per class.
    pub queries: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionResult {
    pub heads: Vec<HeadAttention>,
}

impl AttentionResult {
    /// Per-head scores stacked into an `H × m` matrix.
    pub fn score_matrix(&self) -> Matrix {
        let rows: Vec<Vec<f64>> = self.heads.iter().map(|h| h.scores.clone()).collect();
        Matrix::from_rows(&rows).expect("heads share m")
    }
}

/// Scaled dot-product attention of every head over the backbones.
pub fn attention(params: &UrtParams, set_reps: &SetReps) -> Result<AttentionResult> {
    params.validate()?;
    if set_reps.num_backbones() != params.num_backbones || set_reps.dim() != params.dim {
        return Err(UrtError::Shape(format!(
            "set representations have m={}, d={} but the layer expects m={}, d={}",
            set_reps.num_backbones(),
            set_reps.dim(),
            params.num_backbones,
            params.dim
        )));
    }
    let zeroed;
    let reps = if params.ablation == Ablation::NoSetrep {
        zeroed = set_reps.zeroed();
        &zeroed
    } else {
        set_reps
    };
    let m = params.num_backbones;
    let n = reps.num_classes();
    let inv_sqrt_l = 1.0 / (params.key_dim as f64).sqrt();

    let heads = params
        .heads
        .iter()
        .map(|head| {
            let mut logits = Matrix::zeros(m, n);
            let mut class_scores = Matrix::zeros(m, n);
            let mut scores = vec![0.0; m];
            let mut queries = Vec::with_capacity(n);
            for c in 0..n {
                let q = head.wq.affine(reps.universal(c), &head.bq);
                // q·(Wk s + bk) = (Wkᵀ q)·s + q·bk
                let projected = head.wk.transpose_mul(&q);
                let q_bias = dot(&q, &head.bk);
                // q·bk is the same for every backbone, so the softmax skips it;
                // that keeps α bitwise independent of bk.
                let shifted: Vec<f64> = (0..m)
                    .map(|i| dot(&projected, reps.backbone(c, i)) * inv_sqrt_l)
                    .collect();
                let alpha = softmax(&shifted);
                for i in 0..m {
                    logits.set(i, c, shifted[i] + q_bias * inv_sqrt_l);
                    class_scores.set(i, c, alpha[i]);
                }
                axpy(&mut scores, 1.0, &alpha);
                queries.push(q);
            }
            scores.iter_mut().for_each(|s| *s /= n as f64);
            HeadAttention {
                logits,
                class_scores,
                scores,
                queries,
            }
        })
        .collect();
    Ok(AttentionResult { heads })
}

/// Adapted representation of one sample: concatenation over heads of
/// `Σ_i α_i r_i(x)`, length `H·d`.
pub fn adapt(params: &UrtParams, attn: &AttentionResult, raw: &[&[f64]]) -> Result<Vec<f64>> {
    let d = params.dim;
    if raw.len() != params.num_backbones || raw.iter().any(|v| v.len() != d) {
        return Err(UrtError::Shape(format!(
            "adapt expects {} backbone vectors of length {d}",
            params.num_backbones
        )));
    }
    if attn.heads.len() != params.num_heads()
        || attn.heads.iter().any(|h| h.scores.len() != raw.len())
    {
        return Err(UrtError::Shape(
            "attention result does not match the layer".into(),
        ));
    }
    let mut out = Vec::with_capacity(attn.heads.len() * d);
    for head in &attn.heads {
        let mut phi = vec![0.0; d];
        for (alpha, r) in head.scores.iter().zip(raw) {
            axpy(&mut phi, *alpha, r);
        }
        out.extend_from_slice(&phi);
    }
    Ok(out)
}

/// Everything the forward pass computes for one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeEmbedding {
    pub set_reps: SetReps,
    pub attention: AttentionResult,
    /// `support[c][j]`, aligned with `episode.support`.
    pub support: Vec<Vec<Vec<f64>>>,
    /// `query[c][j]`, aligned with `episode.query`.
    pub query: Vec<Vec<Vec<f64>>>,
}

pub fn forward_episode(
    params: &UrtParams,
    store: &FeatureStore,
    episode: &Episode,
) -> Result<EpisodeEmbedding> {
    if store.num_backbones() != params.num_backbones || store.dim() != params.dim {
        return Err(UrtError::Shape(format!(
            "store has m={}, d={} but the layer expects m={}, d={}",
            store.num_backbones(),
            store.dim(),
            params.num_backbones,
            params.dim
        )));
    }
    let set_reps = set_representations(store, episode)?;
    let attention = attention(params, &set_reps)?;
    let embed = |groups: &[Vec<u64>]| -> Result<Vec<Vec<Vec<f64>>>> {
        groups
            .iter()
            .map(|ids| {
                ids.iter()
                    .map(|&id| adapt(params, &attention, &store.backbone_features(id)?))
                    .collect()
            })
            .collect()
    };
    let support = embed(&episode.support)?;
    let query = embed(&episode.query)?;
    Ok(EpisodeEmbedding {
        set_reps,
        attention,
        support,
        query,
    })
}
