//! Attention-based fusion of the branch outputs and final scoring.
//!
//! A context vector is projected from the query relation embedding, each
//! branch state is projected into the same attention space, and the branch
//! weights come from a temperature-scaled cosine softmax mixed with a
//! uniform distribution. The rescaled branch outputs are concatenated (or
//! summed) and scored by a two-layer feed-forward network. The mean weight
//! entropy is exposed for regularization.

use rand::Rng;

use crate::autodiff::{uniform_embedding, NodeId, ParamId, ParamStore, Tape, Tensor};
use crate::error::{Error, Result};
use crate::relnet::AffineParams;

/// Fusion ablation modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    /// Query-conditioned cosine attention, concatenated features.
    Full,
    /// Uniform branch weights, no attention computation.
    NoAttention,
    /// Context vector replaced by a learned constant.
    NoQuery,
    /// Branch keys replaced by learned per-branch constants.
    NoKey,
    /// Weighted sum of branch outputs instead of concatenation.
    SumInsteadOfConcat,
    /// Branches merged after every entity layer (driven by the model).
    EarlyFusion,
}

impl FusionMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "full" => Ok(FusionMode::Full),
            "no_attention" => Ok(FusionMode::NoAttention),
            "no_query" => Ok(FusionMode::NoQuery),
            "no_key" => Ok(FusionMode::NoKey),
            "sum" | "sum_instead_of_concat" => Ok(FusionMode::SumInsteadOfConcat),
            "early" | "early_fusion" => Ok(FusionMode::EarlyFusion),
            other => Err(Error::Config(format!("unknown fusion mode `{other}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::Full => "full",
            FusionMode::NoAttention => "no_attention",
            FusionMode::NoQuery => "no_query",
            FusionMode::NoKey => "no_key",
            FusionMode::SumInsteadOfConcat => "sum",
            FusionMode::EarlyFusion => "early",
        }
    }

    /// Branch features are summed rather than concatenated before scoring.
    pub fn sums_features(self) -> bool {
        matches!(self, FusionMode::SumInsteadOfConcat | FusionMode::EarlyFusion)
    }
}

/// Trainable fusion state plus its scalar hyperparameters.
#[derive(Debug, Clone)]
pub struct FusionParams {
    pub w_ctx: AffineParams,
    pub w_key: AffineParams,
    pub kappa: f64,
    pub lambda_mix: f64,
    pub attn_dropout: f64,
    pub psi_hidden: AffineParams,
    pub psi_out: AffineParams,
    /// Learned constant context, allocated only in `NoQuery` mode.
    pub ctx_const: Option<ParamId>,
    /// Learned per-branch constant keys, allocated only in `NoKey` mode.
    pub key_consts: Option<ParamId>,
    pub num_branches: usize,
    pub d_att: usize,
}

impl FusionParams {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        d: usize,
        d_att: usize,
        num_branches: usize,
        psi_input: usize,
        psi_hidden_width: usize,
        mode: FusionMode,
        kappa: f64,
        lambda_mix: f64,
        attn_dropout: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if num_branches == 0 {
            return Err(Error::Config("at least one branch is required".into()));
        }
        if kappa <= 0.0 {
            return Err(Error::Config(format!("kappa must be positive, got {kappa}")));
        }
        if !(0.0..=1.0).contains(&lambda_mix) {
            return Err(Error::Config(format!("lambda must lie in [0, 1], got {lambda_mix}")));
        }
        if !(0.0..1.0).contains(&attn_dropout) {
            return Err(Error::Config(format!(
                "attention dropout must lie in [0, 1), got {attn_dropout}"
            )));
        }
        let w_ctx = AffineParams::init_linear(store, "fusion.w_ctx", d, d_att, rng)?;
        let w_key = AffineParams::init_linear(store, "fusion.w_key", d, d_att, rng)?;
        let psi_hidden = AffineParams::init(store, "fusion.psi_hidden", psi_input, psi_hidden_width, rng)?;
        let psi_out = AffineParams::init(store, "fusion.psi_out", psi_hidden_width, 1, rng)?;
        let ctx_const = if mode == FusionMode::NoQuery {
            Some(store.add("fusion.ctx_const", uniform_embedding(1, d_att, rng))?)
        } else {
            None
        };
        let key_consts = if mode == FusionMode::NoKey {
            Some(store.add("fusion.key_consts", uniform_embedding(num_branches, d_att, rng))?)
        } else {
            None
        };
        Ok(Self {
            w_ctx,
            w_key,
            kappa,
            lambda_mix,
            attn_dropout,
            psi_hidden,
            psi_out,
            ctx_const,
            key_consts,
            num_branches,
            d_att,
        })
    }
}

/// Attention weights and their mean entropy for one set of branch states.
#[derive(Debug, Clone, Copy)]
pub struct AttentionOutput {
    /// `[n x K]` mixed weights, rows summing to one.
    pub weights: NodeId,
    /// Scalar mean row entropy.
    pub entropy: NodeId,
}

/// Compute branch attention weights for `n` entities.
///
/// All branch states must share the same shape `[n x d]`. `r_q_emb` is the
/// `[1 x d]` query relation embedding. Dropout draws from `rng` and is only
/// applied while `training` is set.
pub fn compute_attention(
    tape: &mut Tape,
    branch_states: &[NodeId],
    r_q_emb: NodeId,
    params: &FusionParams,
    mode: FusionMode,
    training: bool,
    rng: &mut impl Rng,
) -> Result<AttentionOutput> {
    let k = branch_states.len();
    if k == 0 {
        return Err(Error::Shape("attention over zero branches".into()));
    }
    if k != params.num_branches {
        return Err(Error::Shape(format!(
            "{k} branch states but fusion was built for {}",
            params.num_branches
        )));
    }
    let (n, d) = tape.value(branch_states[0]).shape();
    for &s in branch_states {
        if tape.value(s).shape() != (n, d) {
            return Err(Error::Shape("branch states disagree on shape".into()));
        }
    }

    if mode == FusionMode::NoAttention {
        let uniform = Tensor::from_vec(n, k, vec![1.0 / k as f64; n * k])?;
        let weights = tape.constant(uniform);
        let entropy = tape.entropy_mean(weights);
        return Ok(AttentionOutput { weights, entropy });
    }

    let context = match mode {
        FusionMode::NoQuery => {
            let id = params
                .ctx_const
                .ok_or_else(|| Error::State("no_query mode without a context constant".into()))?;
            let c = tape.param(id);
            tape.l2_normalize_rows(c)
        }
        _ => {
            let projected = params.w_ctx.apply(tape, r_q_emb)?;
            tape.l2_normalize_rows(projected)
        }
    };

    let logits = if mode == FusionMode::NoKey {
        let id = params
            .key_consts
            .ok_or_else(|| Error::State("no_key mode without key constants".into()))?;
        let keys = tape.param(id);
        let keys = tape.l2_normalize_rows(keys);
        let cos = tape.cosine_sim(keys, context)?; // [K x 1]
        let row = tape.transpose(cos); // [1 x K]
        tape.repeat_rows(row, n)?
    } else {
        let mut cols = Vec::with_capacity(k);
        for &state in branch_states {
            let projected = params.w_key.apply(tape, state)?;
            let keys = tape.l2_normalize_rows(projected);
            cols.push(tape.cosine_sim(keys, context)?);
        }
        tape.concat_cols(&cols)?
    };

    let scaled = tape.affine_scalar(logits, 1.0 / params.kappa, 0.0);
    let alpha = tape.softmax_rows(scaled);
    let lambda = params.lambda_mix;
    let mut weights = tape.affine_scalar(alpha, 1.0 - lambda, lambda / k as f64);
    if training && params.attn_dropout > 0.0 {
        weights = tape.dropout_renorm(weights, params.attn_dropout, rng)?;
    }
    let entropy = tape.entropy_mean(weights);
    Ok(AttentionOutput { weights, entropy })
}

/// Weight, combine, and score branch states.
///
/// `real_slice_widths`, when present, gives the per-branch column count to
/// keep (the re-part) before weighting; `None` keeps the full width.
pub fn fuse_and_score(
    tape: &mut Tape,
    att: &AttentionOutput,
    branch_states: &[NodeId],
    params: &FusionParams,
    mode: FusionMode,
    real_slice_widths: Option<&[usize]>,
) -> Result<NodeId> {
    let k = branch_states.len();
    if k == 0 {
        return Err(Error::Shape("fusion over zero branches".into()));
    }
    let mut scaled = Vec::with_capacity(k);
    for (i, &state) in branch_states.iter().enumerate() {
        let kept = match real_slice_widths {
            Some(widths) => tape.slice_cols(state, 0, widths[i])?,
            None => state,
        };
        let col = tape.slice_cols(att.weights, i, i + 1)?;
        scaled.push(tape.scale_rows(kept, col)?);
    }
    let fused = if mode.sums_features() {
        let mut acc = scaled[0];
        for &s in &scaled[1..] {
            acc = tape.add(acc, s).map_err(|_| {
                Error::Shape("summed fusion requires equal branch feature widths".into())
            })?;
        }
        acc
    } else {
        tape.concat_cols(&scaled)?
    };
    score_states(tape, fused, params)
}

/// Apply the two-layer scorer to already-fused features.
pub fn score_states(tape: &mut Tape, fused: NodeId, params: &FusionParams) -> Result<NodeId> {
    let hidden_pre = params.psi_hidden.apply(tape, fused).map_err(|e| {
        Error::Shape(format!("scorer input width mismatch for this fusion mode: {e}"))
    })?;
    let hidden = tape.relu(hidden_pre);
    params.psi_out.apply(tape, hidden)
}

/// Mean row entropy of a weight matrix, validating that each row is a
/// probability distribution.
pub fn entropy_regularizer(weights: &Tensor) -> Result<f64> {
    let (n, _) = weights.shape();
    let mut total = 0.0;
    for i in 0..n {
        let row = weights.row(i);
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Rejected(format!(
                "weight row {i} sums to {sum}, not 1"
            )));
        }
        for &w in row {
            if w > 0.0 {
                total -= w * w.ln();
            }
        }
    }
    Ok(total / n.max(1) as f64)
}
