//! Permutation-invariant linkset predictors.
//!
//! Two families share one interface:
//!
//! - **Attention score**: a shallow stack of multi-head self-attention
//!   layers; the prediction is the head-averaged softmax score matrix of a
//!   final scoring stage, so every node distributes a total budget of 1 over
//!   its candidates.
//! - **Graph Transformer**: node and edge embeddings updated jointly; each
//!   edge embedding gates the attention logit of its pair (one scalar per
//!   head), pre-softmax logits feed the edge update, and a sigmoid readout
//!   over the last edge embeddings predicts the adjacency.
//!
//! Either family can carry any conditioner. Predictions are symmetrized by
//! averaging with the transpose and the diagonal is zeroed.

#[cfg(test)]
mod tests;
pub mod train;
pub mod vae;

use serde::{Deserialize, Serialize};

use crate::conditioning::{
    feasibility_adjacency, laplacian_features, stats_features, CondState, Conditioner,
    ConditionerConfig, ConditionerMode,
};
use crate::error::{Error, Result};
use crate::graph::AdjMatrix;
use crate::solver::euclid;
use crate::tensor::{Binding, DTensor, Init, ParamSet, Tape, TensorId};

/// Edge input features for the Graph Transformer lift:
/// [euclidean distance, feasibility bit, edge state].
pub const EDGE_FEATS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    #[default]
    AttentionScore,
    GraphTransformer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub family: Family,
    /// Stack depth; defaults to 2 (attention score) or 6 (graph transformer).
    pub layers: Option<usize>,
    pub heads: usize,
    pub d_model: usize,
    /// Per-head projection width; defaults to d_model / heads.
    pub d_k: Option<usize>,
    /// Add the stack input to every block's node stream (GT).
    pub long_residuals: bool,
    /// Concatenate Laplacian positional encodings to the node inputs.
    pub laplacian_pe: bool,
    /// Score-head ablation: skip the softmax, squash raw logits instead.
    pub unnormalized_scores: bool,
    pub conditioner: ConditionerConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            family: Family::AttentionScore,
            layers: None,
            heads: 4,
            d_model: 32,
            d_k: None,
            long_residuals: true,
            laplacian_pe: false,
            unnormalized_scores: false,
            conditioner: ConditionerConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn layers(&self) -> usize {
        self.layers.unwrap_or(match self.family {
            Family::AttentionScore => 2,
            Family::GraphTransformer => 6,
        })
    }

    pub fn d_k(&self) -> usize {
        self.d_k.unwrap_or(self.d_model / self.heads)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers() == 0 {
            return Err(Error::Config("model needs at least one layer".into()));
        }
        if self.heads == 0 {
            return Err(Error::Config("model needs at least one head".into()));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.d_k() == 0 {
            return Err(Error::Config("d_k must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-instance inputs to a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardCtx<'a> {
    pub coords: &'a [[f64; 2]],
    /// Range constraint, for feasibility features and statistics.
    pub d: f64,
    /// Noisy edges (diffusion) or observed edges (VAE encoder).
    pub edge_state: Option<&'a AdjMatrix>,
    /// Normalized diffusion time in (0, 1].
    pub t_over_t: Option<f64>,
    /// Latent vector broadcast-concatenated to every node (VAE decoder).
    pub z: Option<&'a [f64]>,
}

impl<'a> ForwardCtx<'a> {
    pub fn plain(coords: &'a [[f64; 2]], d: f64) -> Self {
        ForwardCtx {
            coords,
            d,
            edge_state: None,
            t_over_t: None,
            z: None,
        }
    }
}

/// Result of one forward pass.
pub struct ForwardOut {
    /// Symmetric, zero-diagonal edge probabilities [n x n].
    pub probs: TensorId,
    /// Pre-symmetrization score matrix [n x n] (row-stochastic for the
    /// normalized attention-score family).
    pub presym: TensorId,
}

/// A family stack plus conditioner, usable as a supervised one-shot model, a
/// VAE decoder (latent input), or a diffusion denoiser (edge state + time).
#[derive(Clone, Debug)]
pub struct Predictor {
    pub config: ModelConfig,
    pub prefix: String,
    /// Latent input width appended to node features (VAE decoder).
    pub d_z: usize,
    pub time_conditioned: bool,
    cond: Conditioner,
}

impl Predictor {
    pub fn new(
        config: ModelConfig,
        prefix: impl Into<String>,
        d_z: usize,
        time_conditioned: bool,
    ) -> Result<Self> {
        config.validate()?;
        let prefix = prefix.into();
        let cond_layers = match config.family {
            // The last attention layer only scores; modulation applies to the
            // full blocks before it.
            Family::AttentionScore => config.layers() - 1,
            Family::GraphTransformer => config.layers(),
        };
        let cond = Conditioner::new(
            config.conditioner.clone(),
            format!("{prefix}cond/"),
            config.d_model,
            cond_layers,
            config.family == Family::GraphTransformer,
            time_conditioned,
        )?;
        Ok(Predictor {
            config,
            prefix,
            d_z,
            time_conditioned,
            cond,
        })
    }

    pub fn conditioner(&self) -> &Conditioner {
        &self.cond
    }

    fn d_in(&self) -> usize {
        let pe = if self.config.laplacian_pe {
            self.config.conditioner.num_eigen
        } else {
            0
        };
        2 + pe + self.d_z
    }

    fn p(&self, s: &str) -> String {
        format!("{}{}", self.prefix, s)
    }

    pub fn init_params(&self, params: &mut ParamSet, seed: u64) {
        let d = self.config.d_model;
        let dk = self.config.d_k();
        let heads = self.config.heads;
        params.get_or_init(&self.p("input/node/w"), &[self.d_in(), d], Init::Xavier, seed);
        params.get_or_init(&self.p("input/node/b"), &[d], Init::Zeros, seed);
        match self.config.family {
            Family::AttentionScore => {
                for l in 0..self.config.layers() - 1 {
                    for i in 0..heads {
                        for w in ["wq", "wk", "wv"] {
                            params.get_or_init(
                                &self.p(&format!("att/layer{l}/head{i}/{w}")),
                                &[d, dk],
                                Init::Xavier,
                                seed,
                            );
                        }
                    }
                    params.get_or_init(
                        &self.p(&format!("att/layer{l}/wo")),
                        &[heads * dk, d],
                        Init::Xavier,
                        seed,
                    );
                }
                for i in 0..heads {
                    for w in ["wq", "wk"] {
                        params.get_or_init(
                            &self.p(&format!("att/score/head{i}/{w}")),
                            &[d, dk],
                            Init::Xavier,
                            seed,
                        );
                    }
                }
            }
            Family::GraphTransformer => {
                params.get_or_init(&self.p("input/edge/w"), &[EDGE_FEATS, d], Init::Xavier, seed);
                params.get_or_init(&self.p("input/edge/b"), &[d], Init::Zeros, seed);
                for l in 0..self.config.layers() {
                    for i in 0..heads {
                        for w in ["wq", "wk", "wv"] {
                            params.get_or_init(
                                &self.p(&format!("gt/layer{l}/head{i}/{w}")),
                                &[d, dk],
                                Init::Xavier,
                                seed,
                            );
                        }
                        params.get_or_init(
                            &self.p(&format!("gt/layer{l}/head{i}/we_w")),
                            &[d, 1],
                            Init::Xavier,
                            seed,
                        );
                        params.get_or_init(
                            &self.p(&format!("gt/layer{l}/head{i}/we_b")),
                            &[1],
                            Init::Zeros,
                            seed,
                        );
                    }
                    params.get_or_init(
                        &self.p(&format!("gt/layer{l}/wo_h")),
                        &[heads * dk, d],
                        Init::Xavier,
                        seed,
                    );
                    params.get_or_init(
                        &self.p(&format!("gt/layer{l}/wo_e/w")),
                        &[heads, d],
                        Init::Xavier,
                        seed,
                    );
                    params.get_or_init(&self.p(&format!("gt/layer{l}/wo_e/b")), &[d], Init::Zeros, seed);
                    for ln in ["ln_h", "ln_e"] {
                        params.get_or_init(
                            &self.p(&format!("gt/layer{l}/{ln}/gain")),
                            &[d],
                            Init::Ones,
                            seed,
                        );
                        params.get_or_init(
                            &self.p(&format!("gt/layer{l}/{ln}/bias")),
                            &[d],
                            Init::Zeros,
                            seed,
                        );
                    }
                }
                params.get_or_init(&self.p("readout/edge/w"), &[d, 1], Init::Xavier, seed);
                params.get_or_init(&self.p("readout/edge/b"), &[1], Init::Zeros, seed);
            }
        }
        self.cond.init_params(params, seed);
    }

    /// Node input features: raw coordinates, then optional Laplacian
    /// positional encodings of the feasibility graph, then the latent.
    fn node_features(&self, ctx: &ForwardCtx) -> Result<DTensor> {
        let n = ctx.coords.len();
        let mut pe = None;
        if self.config.laplacian_pe {
            let p = self.config.conditioner.num_eigen;
            let adj = feasibility_adjacency(ctx.coords, ctx.d);
            let (_, vectors) = laplacian_features(&adj, p)?;
            pe = Some((p, vectors));
        }
        let z = match (self.d_z, ctx.z) {
            (0, _) => None,
            (dz, Some(z)) if z.len() == dz => Some(z),
            (dz, got) => {
                return Err(Error::Contract(format!(
                    "decoder expects a latent of length {dz}, got {:?}",
                    got.map(<[f64]>::len)
                )))
            }
        };
        let mut data = Vec::with_capacity(n * self.d_in());
        for (i, c) in ctx.coords.iter().enumerate() {
            data.push(c[0]);
            data.push(c[1]);
            if let Some((p, vectors)) = &pe {
                data.extend_from_slice(&vectors[i * p..(i + 1) * p]);
            }
            if let Some(z) = z {
                data.extend_from_slice(z);
            }
        }
        DTensor::new(vec![n, self.d_in()], data)
    }

    /// Edge input features, flattened row-major over all ordered pairs.
    fn edge_features(&self, ctx: &ForwardCtx) -> Result<DTensor> {
        let n = ctx.coords.len();
        let mut data = Vec::with_capacity(n * n * EDGE_FEATS);
        for i in 0..n {
            for j in 0..n {
                let dist = euclid(ctx.coords[i], ctx.coords[j]);
                data.push(dist);
                data.push(if dist <= ctx.d { 1.0 } else { 0.0 });
                data.push(match ctx.edge_state {
                    Some(adj) if i != j && adj.get(i, j) => 1.0,
                    _ => 0.0,
                });
            }
        }
        DTensor::new(vec![n * n, EDGE_FEATS], data)
    }

    fn side_inputs(&self, ctx: &ForwardCtx) -> Result<crate::conditioning::SideInputs> {
        let mut side = crate::conditioning::SideInputs::default();
        let mode = self.config.conditioner.mode;
        if matches!(mode, ConditionerMode::Stats | ConditionerMode::CamStats) {
            let density = ctx.edge_state.map(|adj| {
                let n = adj.n();
                let pairs = (n * (n - 1) / 2).max(1) as f64;
                adj.edge_count() as f64 / pairs
            });
            side.stats = Some(stats_features(ctx.coords, ctx.d, density, ctx.t_over_t));
        }
        if mode == ConditionerMode::Eigen {
            let adj = feasibility_adjacency(ctx.coords, ctx.d);
            let (values, _) = laplacian_features(&adj, self.config.conditioner.num_eigen)?;
            side.eigenvalues = Some(values);
        }
        if self.time_conditioned {
            side.t_over_t = Some(ctx.t_over_t.ok_or_else(|| {
                Error::Contract("time-conditioned predictor requires t_over_t".into())
            })?);
        }
        Ok(side)
    }

    pub fn forward(&self, tape: &mut Tape, binding: &Binding, ctx: &ForwardCtx) -> Result<ForwardOut> {
        self.forward_with_h0_extra(tape, binding, ctx, None)
    }

    /// Forward pass with an optional extra term added to the lifted node
    /// embeddings (the VAE routes its differentiable latent through here).
    pub fn forward_with_h0_extra(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        ctx: &ForwardCtx,
        extra_h0: Option<TensorId>,
    ) -> Result<ForwardOut> {
        let n = ctx.coords.len();
        if n == 0 {
            return Err(Error::Validation("empty instance".into()));
        }
        let side = self.side_inputs(ctx)?;
        let mut state = self.cond.begin(tape, binding, &side)?;

        let feats = self.node_features(ctx)?;
        let feats = tape.constant(feats);
        let w_in = binding.id(&self.p("input/node/w"));
        let b_in = binding.id(&self.p("input/node/b"));
        let mut h = tape.linear(feats, w_in, b_in)?;
        if let Some(extra) = extra_h0 {
            h = tape.add(h, extra)?;
        }
        h = self.cond.append_registers(tape, binding, h)?;

        match self.config.family {
            Family::AttentionScore => self.forward_attention(tape, binding, ctx, &mut state, h, n),
            Family::GraphTransformer => self.forward_gt(tape, binding, ctx, &mut state, h, n),
        }
    }

    fn forward_attention(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        _ctx: &ForwardCtx,
        state: &mut CondState,
        mut h: TensorId,
        n: usize,
    ) -> Result<ForwardOut> {
        let heads = self.config.heads;
        let scale = 1.0 / (self.config.d_k() as f64).sqrt();
        for l in 0..self.config.layers() - 1 {
            self.cond.advance(tape, binding, l, state, h, None)?;
            let mut outs = Vec::with_capacity(heads);
            for i in 0..heads {
                let wq = binding.id(&self.p(&format!("att/layer{l}/head{i}/wq")));
                let wk = binding.id(&self.p(&format!("att/layer{l}/head{i}/wk")));
                let wv = binding.id(&self.p(&format!("att/layer{l}/head{i}/wv")));
                let q = tape.matmul(h, wq)?;
                let k = tape.matmul(h, wk)?;
                let v = tape.matmul(h, wv)?;
                let kt = tape.transpose(k)?;
                let logits = tape.matmul(q, kt)?;
                let scaled = tape.scale(logits, scale);
                let weights = tape.softmax_rows(scaled)?;
                outs.push(tape.matmul(weights, v)?);
            }
            let cat = tape.concat_cols(&outs)?;
            let wo = binding.id(&self.p(&format!("att/layer{l}/wo")));
            h = tape.matmul(cat, wo)?;
            h = self.cond.modulate_nodes(tape, binding, l, state, h)?;
        }

        // Scoring stage: head-averaged attention scores over the last
        // embeddings are the prediction itself.
        let mut score_sum: Option<TensorId> = None;
        for i in 0..heads {
            let wq = binding.id(&self.p(&format!("att/score/head{i}/wq")));
            let wk = binding.id(&self.p(&format!("att/score/head{i}/wk")));
            let q = tape.matmul(h, wq)?;
            let k = tape.matmul(h, wk)?;
            let kt = tape.transpose(k)?;
            let logits = tape.matmul(q, kt)?;
            let scaled = tape.scale(logits, scale);
            let scores = if self.config.unnormalized_scores {
                scaled
            } else {
                tape.softmax_rows(scaled)?
            };
            score_sum = Some(match score_sum {
                Some(acc) => tape.add(acc, scores)?,
                None => scores,
            });
        }
        let mut scores = tape.scale(score_sum.expect("at least one head"), 1.0 / heads as f64);
        if self.config.unnormalized_scores {
            // Raw logit means are unbounded; squash into (0, 1).
            scores = tape.sigmoid(scores);
        }
        let scores = self.crop_scores(tape, scores, n)?;
        Ok(finish_prediction(tape, scores, n)?)
    }

    /// Drops register rows and columns from an extended score matrix.
    fn crop_scores(&self, tape: &mut Tape, scores: TensorId, n: usize) -> Result<TensorId> {
        if self.cond.num_registers() == 0 {
            return Ok(scores);
        }
        let rows = tape.slice_rows(scores, 0, n)?;
        let t = tape.transpose(rows)?;
        let cols = tape.slice_rows(t, 0, n)?;
        tape.transpose(cols)
    }

    fn forward_gt(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        ctx: &ForwardCtx,
        state: &mut CondState,
        h0: TensorId,
        n: usize,
    ) -> Result<ForwardOut> {
        let e_feats = self.edge_features(ctx)?;
        let e_feats = tape.constant(e_feats);
        let we_in = binding.id(&self.p("input/edge/w"));
        let be_in = binding.id(&self.p("input/edge/b"));
        let mut e = tape.linear(e_feats, we_in, be_in)?;
        e = self.cond.extend_edges_for_registers(tape, binding, e, n)?;

        let stack = GtStack {
            prefix: self.prefix.clone(),
            layers: self.config.layers(),
            heads: self.config.heads,
            d_k: self.config.d_k(),
            long_residuals: self.config.long_residuals,
        };
        let (_, e_last) = stack.forward(tape, binding, h0, e, Some((&self.cond, state)))?;
        let e_true = self.cond.strip_register_edges(tape, e_last, n)?;

        // Per-edge affine map to a logit, then sigmoid.
        let w_out = binding.id(&self.p("readout/edge/w"));
        let b_out = binding.id(&self.p("readout/edge/b"));
        let logits = tape.linear(e_true, w_out, b_out)?; // [n*n x 1]
        let probs_flat = tape.sigmoid(logits);
        let probs = tape.reshape(probs_flat, vec![n, n])?;
        Ok(finish_prediction(tape, probs, n)?)
    }
}

/// Symmetrizes a square score matrix by averaging with its transpose and
/// zeroing the diagonal.
pub fn finish_prediction(tape: &mut Tape, presym: TensorId, n: usize) -> Result<ForwardOut> {
    let t = tape.transpose(presym)?;
    let sum = tape.add(presym, t)?;
    let avg = tape.scale(sum, 0.5);
    let mut mask = vec![1.0; n * n];
    for i in 0..n {
        mask[i * n + i] = 0.0;
    }
    let mask = tape.constant(DTensor::new(vec![n, n], mask)?);
    let probs = tape.mul(avg, mask)?;
    Ok(ForwardOut { probs, presym })
}

/// A Graph Transformer block stack shared by the predictor and the VAE
/// encoder. The conditioner hook, when present, updates the token from each
/// block's input and modulates its output.
pub(crate) struct GtStack {
    pub prefix: String,
    pub layers: usize,
    pub heads: usize,
    pub d_k: usize,
    pub long_residuals: bool,
}

impl GtStack {
    pub fn forward(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        h0: TensorId,
        e0: TensorId,
        mut cond: Option<(&Conditioner, &mut CondState)>,
    ) -> Result<(TensorId, TensorId)> {
        let p = |s: String| format!("{}{}", self.prefix, s);
        let (m, _) = tape.value(h0).dims2()?;
        let scale = 1.0 / (self.d_k as f64).sqrt();
        let mut h = h0;
        let mut e = e0;
        for l in 0..self.layers {
            if let Some((cond, state)) = cond.as_mut() {
                cond.advance(tape, binding, l, state, h, Some(e))?;
            }
            let mut head_outs = Vec::with_capacity(self.heads);
            let mut head_logits = Vec::with_capacity(self.heads);
            for i in 0..self.heads {
                let wq = binding.id(&p(format!("gt/layer{l}/head{i}/wq")));
                let wk = binding.id(&p(format!("gt/layer{l}/head{i}/wk")));
                let wv = binding.id(&p(format!("gt/layer{l}/head{i}/wv")));
                let we_w = binding.id(&p(format!("gt/layer{l}/head{i}/we_w")));
                let we_b = binding.id(&p(format!("gt/layer{l}/head{i}/we_b")));
                let q = tape.matmul(h, wq)?;
                let k = tape.matmul(h, wk)?;
                let v = tape.matmul(h, wv)?;
                let kt = tape.transpose(k)?;
                let base = tape.matmul(q, kt)?;
                let base = tape.scale(base, scale);
                // One scalar gate per edge, applied multiplicatively.
                let gate_flat = tape.linear(e, we_w, we_b)?; // [m*m x 1]
                let gate = tape.reshape(gate_flat, vec![m, m])?;
                let logits = tape.mul(base, gate)?;
                let weights = tape.softmax_rows(logits)?;
                head_outs.push(tape.matmul(weights, v)?);
                head_logits.push(tape.reshape(logits, vec![m * m, 1])?);
            }
            let cat = tape.concat_cols(&head_outs)?;
            let wo_h = binding.id(&p(format!("gt/layer{l}/wo_h")));
            let node_update = tape.matmul(cat, wo_h)?;
            let mut summed = tape.add(h, node_update)?;
            if self.long_residuals && l > 0 {
                summed = tape.add(summed, h0)?;
            }
            let gain_h = binding.id(&p(format!("gt/layer{l}/ln_h/gain")));
            let bias_h = binding.id(&p(format!("gt/layer{l}/ln_h/bias")));
            let mut h_new = tape.layer_norm(summed, gain_h, bias_h)?;

            // Edge update from the pre-softmax logits of every head.
            let logit_cols = tape.concat_cols(&head_logits)?; // [m*m x heads]
            let wo_e_w = binding.id(&p(format!("gt/layer{l}/wo_e/w")));
            let wo_e_b = binding.id(&p(format!("gt/layer{l}/wo_e/b")));
            let e_update = tape.linear(logit_cols, wo_e_w, wo_e_b)?;
            let e_summed = tape.add(e, e_update)?;
            let gain_e = binding.id(&p(format!("gt/layer{l}/ln_e/gain")));
            let bias_e = binding.id(&p(format!("gt/layer{l}/ln_e/bias")));
            let mut e_new = tape.layer_norm(e_summed, gain_e, bias_e)?;

            if let Some((cond, state)) = cond.as_mut() {
                h_new = cond.modulate_nodes(tape, binding, l, state, h_new)?;
                e_new = cond.modulate_edges(tape, binding, l, state, e_new)?;
            }
            h = h_new;
            e = e_new;
        }
        Ok((h, e))
    }
}

/// Selects the strict upper triangle of an [n x n] matrix as a column vector
/// [n(n-1)/2 x 1], in row-major (i < j) order.
pub fn upper_triangle_column(tape: &mut Tape, matrix: TensorId, n: usize) -> Result<TensorId> {
    let count = n * (n - 1) / 2;
    let mut select = vec![0.0; count * n * n];
    let mut row = 0;
    for i in 0..n {
        for j in (i + 1)..n {
            select[row * n * n + i * n + j] = 1.0;
            row += 1;
        }
    }
    let select = tape.constant(DTensor::new(vec![count, n * n], select)?);
    let flat = tape.reshape(matrix, vec![n * n, 1])?;
    tape.matmul(select, flat)
}

/// Upper-triangle targets of a binary adjacency as a column tensor.
pub fn upper_triangle_targets(adj: &AdjMatrix) -> DTensor {
    let bits: Vec<f64> = adj
        .iter_upper()
        .map(|(_, _, b)| if b { 1.0 } else { 0.0 })
        .collect();
    let count = bits.len();
    DTensor::new(vec![count, 1], bits).expect("count matches")
}
