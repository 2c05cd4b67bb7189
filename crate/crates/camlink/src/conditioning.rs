//! Conditioning mechanisms: cross-attentive modulation (CAM) tokens, FiLM
//! heads, and the comparison conditioners (graph statistics, register tokens,
//! Laplacian spectra).
//!
//! A CAM token is a learnable vector that reads the whole graph through
//! cross-attention at every layer and emits the (gamma, beta) of a
//! feature-wise linear modulation applied to node (and edge) embeddings.
//! First-order tokens broadcast one (gamma, beta) pair to all nodes;
//! second-order tokens derive a per-node scalar affinity between each
//! embedding and the token, so different nodes undergo different modulations.
//!
//! All FiLM heads initialize to the identity (W = 0, b_gamma = 1,
//! b_beta = 0): a conditioned model starts as an exact copy of its baseline,
//! which isolates the effect of the mechanism during training.
//!
//! The cross-attention readout normalizes scores with a softmax by default.
//! An unnormalized variant (raw scaled dot products, no softmax) is kept
//! behind `normalized_cross_attention = false` for ablation.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::AdjMatrix;
use crate::solver::{euclid, feasibility_graph};
use crate::tensor::{Binding, DTensor, Init, ParamSet, Tape, TensorId};

/// Length of the graph-statistics feature vector.
pub const STATS_DIM: usize = 9;

/// Node-count normalizer for the statistics vector (the solver's exactness
/// region keeps instances well below this).
pub const MAX_NODES_NORM: f64 = 32.0;

/// Which conditioning mechanism a model carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ConditionerMode {
    #[default]
    None,
    /// First-order CAM token: one broadcast (gamma, beta) per layer.
    Cam,
    /// Second-order CAM token: per-node affinity-driven modulation.
    Cam2,
    /// Graph-statistics vector fed to the FiLM heads.
    Stats,
    /// Learnable dummy nodes appended to the attention stream.
    Registers,
    /// Smallest Laplacian eigenvalues fed to the FiLM heads.
    Eigen,
    /// CAM token concatenated with the statistics vector.
    CamStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConditionerConfig {
    pub mode: ConditionerMode,
    /// For edge-aware models: read edges with the token and modulate them too.
    pub attend_edges: bool,
    pub num_registers: usize,
    pub num_eigen: usize,
    /// Projection width of the second-order affinity.
    pub d_p: usize,
    /// Softmax inside the token's cross-attention readout.
    pub normalized_cross_attention: bool,
}

impl Default for ConditionerConfig {
    fn default() -> Self {
        ConditionerConfig {
            mode: ConditionerMode::None,
            attend_edges: true,
            num_registers: 4,
            num_eigen: 4,
            d_p: 16,
            normalized_cross_attention: true,
        }
    }
}

/// Per-instance conditioning context computed outside the tape.
#[derive(Clone, Debug, Default)]
pub struct SideInputs {
    pub stats: Option<Vec<f64>>,
    pub eigenvalues: Option<Vec<f64>>,
    pub t_over_t: Option<f64>,
}

/// Fixed-order graph statistics: node count, pairwise-distance moments,
/// feasibility density and degree spread, then the optional current edge
/// density and diffusion time (0 when absent).
pub fn stats_features(
    coords: &[[f64; 2]],
    d: f64,
    edge_density: Option<f64>,
    t_over_t: Option<f64>,
) -> Vec<f64> {
    let n = coords.len();
    let mut v = vec![0.0; STATS_DIM];
    v[0] = n as f64 / MAX_NODES_NORM;
    if n >= 2 {
        let mut dists = Vec::with_capacity(n * (n - 1) / 2);
        let mut feas_degree = vec![0usize; n];
        for i in 0..n {
            for j in (i + 1)..n {
                let len = euclid(coords[i], coords[j]);
                dists.push(len);
                if len <= d {
                    feas_degree[i] += 1;
                    feas_degree[j] += 1;
                }
            }
        }
        let pairs = dists.len() as f64;
        let mean = dists.iter().sum::<f64>() / pairs;
        let var = dists.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / pairs;
        let feasible = dists.iter().filter(|&&l| l <= d).count() as f64;
        let denom = (n - 1) as f64;
        v[1] = mean;
        v[2] = var.sqrt();
        v[3] = feasible / pairs;
        v[4] = feas_degree.iter().sum::<usize>() as f64 / n as f64 / denom;
        v[5] = *feas_degree.iter().min().unwrap() as f64 / denom;
        v[6] = *feas_degree.iter().max().unwrap() as f64 / denom;
    }
    v[7] = edge_density.unwrap_or(0.0);
    v[8] = t_over_t.unwrap_or(0.0);
    v
}

/// The p smallest eigenvalues of the combinatorial Laplacian D - A
/// (ascending) plus the matching eigenvectors as per-node positional
/// encodings (n x p, row-major). Each eigenvector's sign is fixed by making
/// its largest-magnitude entry positive.
pub fn laplacian_features(adj: &AdjMatrix, p: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = adj.n();
    if p > n {
        return Err(Error::Validation(format!(
            "requested {p} Laplacian eigenvalues but the graph has only {n} nodes"
        )));
    }
    let lap = DMatrix::<f64>::from_fn(n, n, |i, j| {
        if i == j {
            adj.degree(i) as f64
        } else if adj.get(i, j) {
            -1.0
        } else {
            0.0
        }
    });
    let eig = SymmetricEigen::new(lap);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[a]
            .partial_cmp(&eig.eigenvalues[b])
            .expect("finite eigenvalues")
    });
    let mut values = Vec::with_capacity(p);
    let mut pe = vec![0.0; n * p];
    for (slot, &col) in order.iter().take(p).enumerate() {
        values.push(eig.eigenvalues[col]);
        let vec_col = eig.eigenvectors.column(col);
        let mut max_idx = 0;
        for i in 1..n {
            if vec_col[i].abs() > vec_col[max_idx].abs() {
                max_idx = i;
            }
        }
        let sign = if vec_col[max_idx] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            pe[i * p + slot] = sign * vec_col[i];
        }
    }
    Ok((values, pe))
}

/// Feasibility graph of an instance as an adjacency matrix, the default
/// input for spectral conditioning at prediction time.
pub fn feasibility_adjacency(coords: &[[f64; 2]], d: f64) -> AdjMatrix {
    let mut adj = AdjMatrix::new(coords.len());
    for e in feasibility_graph(coords, d) {
        adj.set_sym(e.i, e.j, true);
    }
    adj
}

/// Live token state during one forward pass.
pub struct CondState {
    token: Option<TensorId>,
    stats_vec: Option<TensorId>,
    eigen_vec: Option<TensorId>,
    time_vec: Option<TensorId>,
}

/// A conditioner instance bound to a model: owns parameter layout, token
/// updates, and modulation application for a fixed number of layers.
#[derive(Clone, Debug)]
pub struct Conditioner {
    pub config: ConditionerConfig,
    prefix: String,
    d_model: usize,
    layers: usize,
    /// The model maintains edge embeddings (Graph Transformer family).
    has_edges: bool,
    /// Diffusion-time slot appended to the FiLM input.
    time_conditioned: bool,
}

impl Conditioner {
    pub fn new(
        config: ConditionerConfig,
        prefix: impl Into<String>,
        d_model: usize,
        layers: usize,
        has_edges: bool,
        time_conditioned: bool,
    ) -> Result<Self> {
        match config.mode {
            ConditionerMode::Cam2 if config.d_p == 0 => {
                return Err(Error::Config("cam2 requires d_p >= 1".into()))
            }
            ConditionerMode::Registers if config.num_registers == 0 => {
                return Err(Error::Config("registers mode requires num_registers >= 1".into()))
            }
            ConditionerMode::Eigen if config.num_eigen == 0 => {
                return Err(Error::Config("eigen mode requires num_eigen >= 1".into()))
            }
            _ => {}
        }
        Ok(Conditioner {
            config,
            prefix: prefix.into(),
            d_model,
            layers,
            has_edges,
            time_conditioned,
        })
    }

    fn uses_token(&self) -> bool {
        matches!(
            self.config.mode,
            ConditionerMode::Cam | ConditionerMode::Cam2 | ConditionerMode::CamStats
        )
    }

    fn attends_edges(&self) -> bool {
        self.uses_token() && self.has_edges && self.config.attend_edges
    }

    fn uses_stats(&self) -> bool {
        matches!(
            self.config.mode,
            ConditionerMode::Stats | ConditionerMode::CamStats
        )
    }

    /// Extra FiLM input column for the diffusion time. The statistics vector
    /// carries its own time slot, so stats-fed heads never get the extra one.
    fn time_slot(&self) -> usize {
        let stats_carries_time = self.uses_stats();
        if self.time_conditioned && !stats_carries_time {
            1
        } else {
            0
        }
    }

    /// Input width of the first-order FiLM heads; None when this mode applies
    /// no feature-wise modulation.
    fn film_in_dim(&self) -> Option<usize> {
        match self.config.mode {
            ConditionerMode::None | ConditionerMode::Registers => {
                if self.time_conditioned {
                    Some(1)
                } else {
                    None
                }
            }
            ConditionerMode::Cam => Some(self.d_model + self.time_slot()),
            ConditionerMode::Cam2 => Some(1 + self.time_slot()),
            ConditionerMode::Stats => Some(STATS_DIM),
            ConditionerMode::Eigen => Some(self.config.num_eigen + self.time_slot()),
            ConditionerMode::CamStats => Some(self.d_model + STATS_DIM),
        }
    }

    pub fn num_registers(&self) -> usize {
        if self.config.mode == ConditionerMode::Registers {
            self.config.num_registers
        } else {
            0
        }
    }

    pub fn init_params(&self, params: &mut ParamSet, seed: u64) {
        let d = self.d_model;
        let p = |s: &str| format!("{}{}", self.prefix, s);
        if self.uses_token() {
            params.get_or_init(&p("omega0"), &[1, d], Init::Xavier, seed);
            for l in 0..self.layers {
                params.get_or_init(&p(&format!("layer{l}/wq")), &[d, d], Init::Xavier, seed);
                params.get_or_init(&p(&format!("layer{l}/wk")), &[d, d], Init::Xavier, seed);
                params.get_or_init(&p(&format!("layer{l}/wv")), &[d, d], Init::Xavier, seed);
                params.get_or_init(&p(&format!("layer{l}/ln_gain")), &[d], Init::Ones, seed);
                params.get_or_init(&p(&format!("layer{l}/ln_bias")), &[d], Init::Zeros, seed);
                if self.attends_edges() {
                    params.get_or_init(&p(&format!("layer{l}/wk_e")), &[d, d], Init::Xavier, seed);
                    params.get_or_init(&p(&format!("layer{l}/wv_e")), &[d, d], Init::Xavier, seed);
                    params.get_or_init(
                        &p(&format!("layer{l}/ffn_w")),
                        &[2 * d, d],
                        Init::Xavier,
                        seed,
                    );
                    params.get_or_init(&p(&format!("layer{l}/ffn_b")), &[d], Init::Zeros, seed);
                }
            }
        }
        if self.config.mode == ConditionerMode::Cam2 {
            for l in 0..self.layers {
                params.get_or_init(
                    &p(&format!("layer{l}/aff_n/w_emb")),
                    &[d, self.config.d_p],
                    Init::Xavier,
                    seed,
                );
                params.get_or_init(
                    &p(&format!("layer{l}/aff_n/w_tok")),
                    &[d, self.config.d_p],
                    Init::Xavier,
                    seed,
                );
                if self.has_edges {
                    params.get_or_init(
                        &p(&format!("layer{l}/aff_e/w_emb")),
                        &[d, self.config.d_p],
                        Init::Xavier,
                        seed,
                    );
                    params.get_or_init(
                        &p(&format!("layer{l}/aff_e/w_tok")),
                        &[d, self.config.d_p],
                        Init::Xavier,
                        seed,
                    );
                }
            }
        }
        if let Some(in_dim) = self.film_in_dim() {
            for l in 0..self.layers {
                for stream in ["film_n", "film_e"] {
                    if stream == "film_e" && !self.has_edges {
                        continue;
                    }
                    let base = p(&format!("{stream}/layer{l}"));
                    params.get_or_init(&format!("{base}/wg"), &[in_dim, d], Init::Zeros, seed);
                    params.get_or_init(&format!("{base}/bg"), &[d], Init::Ones, seed);
                    params.get_or_init(&format!("{base}/wb"), &[in_dim, d], Init::Zeros, seed);
                    params.get_or_init(&format!("{base}/bb"), &[d], Init::Zeros, seed);
                }
            }
        }
        if self.config.mode == ConditionerMode::Registers {
            params.get_or_init(
                &p("registers"),
                &[self.config.num_registers, d],
                Init::Xavier,
                seed,
            );
            if self.has_edges {
                params.get_or_init(&p("reg_edge"), &[1, d], Init::Xavier, seed);
            }
        }
    }

    /// Starts one forward pass: loads the layer-0 token (omega_0) and turns
    /// the side inputs into tape constants.
    pub fn begin(&self, tape: &mut Tape, binding: &Binding, side: &SideInputs) -> Result<CondState> {
        let p = |s: &str| format!("{}{}", self.prefix, s);
        let token = if self.uses_token() {
            Some(binding.id(&p("omega0")))
        } else {
            None
        };
        let stats_vec = if self.uses_stats() {
            let stats = side.stats.as_ref().ok_or_else(|| {
                Error::Contract("stats conditioning requires SideInputs.stats".into())
            })?;
            if stats.len() != STATS_DIM {
                return Err(Error::Contract(format!(
                    "stats vector has length {}, expected {STATS_DIM}",
                    stats.len()
                )));
            }
            Some(tape.constant(DTensor::new(vec![1, STATS_DIM], stats.clone())?))
        } else {
            None
        };
        let eigen_vec = if self.config.mode == ConditionerMode::Eigen {
            let ev = side.eigenvalues.as_ref().ok_or_else(|| {
                Error::Contract("eigen conditioning requires SideInputs.eigenvalues".into())
            })?;
            if ev.len() != self.config.num_eigen {
                return Err(Error::Contract(format!(
                    "eigenvalue vector has length {}, expected {}",
                    ev.len(),
                    self.config.num_eigen
                )));
            }
            Some(tape.constant(DTensor::new(vec![1, ev.len()], ev.clone())?))
        } else {
            None
        };
        let time_vec = if self.time_conditioned {
            let t = side.t_over_t.ok_or_else(|| {
                Error::Contract("time-conditioned model requires SideInputs.t_over_t".into())
            })?;
            Some(tape.constant(DTensor::new(vec![1, 1], vec![t])?))
        } else {
            None
        };
        Ok(CondState {
            token,
            stats_vec,
            eigen_vec,
            time_vec,
        })
    }

    /// Updates the token by cross-attending the block's input embeddings
    /// (Layer `l`). A no-op for tokenless modes.
    pub fn advance(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        layer: usize,
        state: &mut CondState,
        nodes: TensorId,
        edges: Option<TensorId>,
    ) -> Result<()> {
        if !self.uses_token() {
            return Ok(());
        }
        let token = state.token.expect("token present in cam modes");
        let updated = if self.attends_edges() {
            let edges = edges.ok_or_else(|| {
                Error::Contract("attend_edges is set but no edge embeddings were given".into())
            })?;
            self.token_update_fused(tape, binding, layer, token, nodes, edges)?
        } else {
            self.token_update(tape, binding, layer, token, nodes)?
        };
        state.token = Some(updated);
        Ok(())
    }

    /// Single-head cross-attention readout plus residual and layer norm.
    fn token_update(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        layer: usize,
        token: TensorId,
        h: TensorId,
    ) -> Result<TensorId> {
        let read = self.cross_read(tape, binding, layer, token, h, "wk", "wv")?;
        self.token_norm(tape, binding, layer, token, read)
    }

    /// Node and edge readouts concatenated through a single linear layer,
    /// then residual and layer norm.
    fn token_update_fused(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        layer: usize,
        token: TensorId,
        h: TensorId,
        e: TensorId,
    ) -> Result<TensorId> {
        let p = |s: String| format!("{}{}", self.prefix, s);
        let read_n = self.cross_read(tape, binding, layer, token, h, "wk", "wv")?;
        let read_e = self.cross_read(tape, binding, layer, token, e, "wk_e", "wv_e")?;
        let cat = tape.concat_cols(&[read_n, read_e])?;
        let ffn_w = binding.id(&p(format!("layer{layer}/ffn_w")));
        let ffn_b = binding.id(&p(format!("layer{layer}/ffn_b")));
        let fused = tape.linear(cat, ffn_w, ffn_b)?;
        self.token_norm(tape, binding, layer, token, fused)
    }

    fn cross_read(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        layer: usize,
        token: TensorId,
        keys_src: TensorId,
        wk_name: &str,
        wv_name: &str,
    ) -> Result<TensorId> {
        let p = |s: String| format!("{}{}", self.prefix, s);
        let wq = binding.id(&p(format!("layer{layer}/wq")));
        let wk = binding.id(&p(format!("layer{layer}/{wk_name}")));
        let wv = binding.id(&p(format!("layer{layer}/{wv_name}")));
        let q = tape.matmul(token, wq)?; // [1 x d]
        let keys = tape.matmul(keys_src, wk)?; // [m x d]
        let values = tape.matmul(keys_src, wv)?; // [m x d]
        let keys_t = tape.transpose(keys)?;
        let logits = tape.matmul(q, keys_t)?; // [1 x m]
        let scaled = tape.scale(logits, 1.0 / (self.d_model as f64).sqrt());
        let weights = if self.config.normalized_cross_attention {
            tape.softmax_rows(scaled)?
        } else {
            scaled
        };
        tape.matmul(weights, values)
    }

    fn token_norm(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        layer: usize,
        token: TensorId,
        read: TensorId,
    ) -> Result<TensorId> {
        let p = |s: String| format!("{}{}", self.prefix, s);
        let summed = tape.add(read, token)?;
        let gain = binding.id(&p(format!("layer{layer}/ln_gain")));
        let bias = binding.id(&p(format!("layer{layer}/ln_bias")));
        tape.layer_norm(summed, gain, bias)
    }

    /// FiLM input for the broadcast (first-order) heads.
    fn cond_input(&self, tape: &mut Tape, state: &CondState) -> Result<Option<TensorId>> {
        let input = match self.config.mode {
            ConditionerMode::None | ConditionerMode::Registers => state.time_vec,
            ConditionerMode::Cam => {
                let token = state.token.expect("token present");
                match state.time_vec {
                    Some(t) => Some(tape.concat_cols(&[token, t])?),
                    None => Some(token),
                }
            }
            ConditionerMode::Cam2 => None, // handled per node
            ConditionerMode::Stats => state.stats_vec,
            ConditionerMode::Eigen => {
                let ev = state.eigen_vec.expect("eigenvalues present");
                match state.time_vec {
                    Some(t) => Some(tape.concat_cols(&[ev, t])?),
                    None => Some(ev),
                }
            }
            ConditionerMode::CamStats => {
                let token = state.token.expect("token present");
                let stats = state.stats_vec.expect("stats present");
                Some(tape.concat_cols(&[token, stats])?)
            }
        };
        Ok(input)
    }

    /// Applies this layer's modulation to node embeddings.
    pub fn modulate_nodes(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        layer: usize,
        state: &CondState,
        h: TensorId,
    ) -> Result<TensorId> {
        self.modulate(tape, binding, layer, state, h, "film_n", "aff_n")
    }

    /// Applies this layer's modulation to (flattened) edge embeddings.
    pub fn modulate_edges(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        layer: usize,
        state: &CondState,
        e: TensorId,
    ) -> Result<TensorId> {
        if !self.has_edges {
            return Ok(e);
        }
        self.modulate(tape, binding, layer, state, e, "film_e", "aff_e")
    }

    fn modulate(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        layer: usize,
        state: &CondState,
        x: TensorId,
        film_stream: &str,
        aff_stream: &str,
    ) -> Result<TensorId> {
        if self.film_in_dim().is_none() {
            return Ok(x);
        }
        let (rows, _) = tape.value(x).dims2()?;
        let p = |s: String| format!("{}{}", self.prefix, s);
        let base = p(format!("{film_stream}/layer{layer}"));
        let wg = binding.id(&format!("{base}/wg"));
        let bg = binding.id(&format!("{base}/bg"));
        let wb = binding.id(&format!("{base}/wb"));
        let bb = binding.id(&format!("{base}/bb"));

        let (gamma, beta) = if self.config.mode == ConditionerMode::Cam2 {
            // Per-row scalar affinity between each embedding and the token;
            // each row then gets its own (gamma, beta).
            let token = state.token.expect("token present");
            let w_emb = binding.id(&p(format!("layer{layer}/{aff_stream}/w_emb")));
            let w_tok = binding.id(&p(format!("layer{layer}/{aff_stream}/w_tok")));
            let projected = tape.matmul(x, w_emb)?; // [rows x d_p]
            let tok_proj = tape.matmul(token, w_tok)?; // [1 x d_p]
            let tok_col = tape.transpose(tok_proj)?; // [d_p x 1]
            let affinity = tape.matmul(projected, tok_col)?; // [rows x 1]
            let film_input = match state.time_vec {
                Some(t) => {
                    let t_col = tape.broadcast_rows(t, rows)?;
                    tape.concat_cols(&[affinity, t_col])?
                }
                None => affinity,
            };
            (
                tape.linear(film_input, wg, bg)?,
                tape.linear(film_input, wb, bb)?,
            )
        } else {
            // One shared (gamma, beta) pair broadcast to every row.
            let input = self
                .cond_input(tape, state)?
                .expect("film_in_dim is Some for this mode");
            let g_row = tape.linear(input, wg, bg)?;
            let b_row = tape.linear(input, wb, bb)?;
            (
                tape.broadcast_rows(g_row, rows)?,
                tape.broadcast_rows(b_row, rows)?,
            )
        };
        let scaled = tape.mul(gamma, x)?;
        tape.add(scaled, beta)
    }

    /// Appends the learnable register rows after the true nodes.
    pub fn append_registers(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        h: TensorId,
    ) -> Result<TensorId> {
        if self.num_registers() == 0 {
            return Ok(h);
        }
        let regs = binding.id(&format!("{}registers", self.prefix));
        tape.concat_rows(&[h, regs])
    }

    /// Drops register rows, keeping the first n (true node) rows.
    pub fn strip_registers(&self, tape: &mut Tape, h: TensorId, n: usize) -> Result<TensorId> {
        if self.num_registers() == 0 {
            return Ok(h);
        }
        tape.slice_rows(h, 0, n)
    }

    /// Extends flattened edge embeddings [n*n x d] to [(n+r)*(n+r) x d],
    /// filling every register-involving pair with the shared learnable
    /// register-edge embedding.
    pub fn extend_edges_for_registers(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        e: TensorId,
        n: usize,
    ) -> Result<TensorId> {
        let r = self.num_registers();
        if r == 0 {
            return Ok(e);
        }
        let m = n + r;
        // Constant selection matrix scattering true-pair rows into the
        // extended layout; register rows stay zero and take the shared
        // embedding through the mask below.
        let mut select = vec![0.0; (m * m) * (n * n)];
        let mut reg_mask = vec![1.0; m * m];
        for i in 0..n {
            for j in 0..n {
                select[(i * m + j) * (n * n) + (i * n + j)] = 1.0;
                reg_mask[i * m + j] = 0.0;
            }
        }
        let select = tape.constant(DTensor::new(vec![m * m, n * n], select)?);
        let scattered = tape.matmul(select, e)?; // [(m*m) x d]
        let reg_edge = binding.id(&format!("{}reg_edge", self.prefix));
        let reg_rows = tape.broadcast_rows(reg_edge, m * m)?;
        let mask = tape.constant(DTensor::new(vec![m * m, 1], reg_mask)?);
        let mask_wide = {
            let ones = tape.constant(DTensor::new(vec![1, self.d_model], vec![1.0; self.d_model])?);
            tape.matmul(mask, ones)?
        };
        let reg_part = tape.mul(reg_rows, mask_wide)?;
        tape.add(scattered, reg_part)
    }

    /// Keeps the true-pair rows of extended edge embeddings: inverse of
    /// `extend_edges_for_registers`.
    pub fn strip_register_edges(
        &self,
        tape: &mut Tape,
        e: TensorId,
        n: usize,
    ) -> Result<TensorId> {
        let r = self.num_registers();
        if r == 0 {
            return Ok(e);
        }
        let m = n + r;
        let mut select = vec![0.0; (n * n) * (m * m)];
        for i in 0..n {
            for j in 0..n {
                select[(i * n + j) * (m * m) + (i * m + j)] = 1.0;
            }
        }
        let select = tape.constant(DTensor::new(vec![n * n, m * m], select)?);
        tape.matmul(select, e)
    }
}
