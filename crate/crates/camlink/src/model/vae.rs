//! Node-conditioned variational autoencoder over linksets.
//!
//! The encoder is a small Graph Transformer over the labeled graph, mean
//! pooled into a latent Gaussian posterior. Decoding concatenates a latent
//! sample to every node's input features and runs an ordinary predictor, so
//! either family (with any conditioner) can decode. Training minimizes the
//! negative ELBO: reconstruction cross entropy over the strict upper
//! triangle plus the closed-form KL to the standard normal prior.

use rand::Rng;
use rand_distr::StandardNormal;

use super::{upper_triangle_column, upper_triangle_targets, ForwardCtx, GtStack, ModelConfig, Predictor};
use crate::error::Result;
use crate::solver::Instance;
use crate::tensor::{Binding, DTensor, Init, ParamSet, Tape, TensorId};

pub const BCE_EPS: f64 = 1e-7;

#[derive(Clone, Debug)]
pub struct VaeModel {
    pub d_z: usize,
    pub encoder_layers: usize,
    pub decoder: Predictor,
    d_model: usize,
    heads: usize,
    d_k: usize,
}

impl VaeModel {
    pub fn new(decoder_config: ModelConfig, d_z: usize, encoder_layers: usize) -> Result<Self> {
        let d_model = decoder_config.d_model;
        let heads = decoder_config.heads;
        let d_k = decoder_config.d_k();
        let decoder = Predictor::new(decoder_config, "vae/dec/", d_z, false)?;
        Ok(VaeModel {
            d_z,
            encoder_layers,
            decoder,
            d_model,
            heads,
            d_k,
        })
    }

    fn encoder_stack(&self) -> GtStack {
        GtStack {
            prefix: "vae/enc/".into(),
            layers: self.encoder_layers,
            heads: self.heads,
            d_k: self.d_k,
            long_residuals: false,
        }
    }

    pub fn init_params(&self, params: &mut ParamSet, seed: u64) {
        let d = self.d_model;
        params.get_or_init("vae/enc/input/node/w", &[2, d], Init::Xavier, seed);
        params.get_or_init("vae/enc/input/node/b", &[d], Init::Zeros, seed);
        params.get_or_init(
            "vae/enc/input/edge/w",
            &[super::EDGE_FEATS, d],
            Init::Xavier,
            seed,
        );
        params.get_or_init("vae/enc/input/edge/b", &[d], Init::Zeros, seed);
        for l in 0..self.encoder_layers {
            for i in 0..self.heads {
                for w in ["wq", "wk", "wv"] {
                    params.get_or_init(
                        &format!("vae/enc/gt/layer{l}/head{i}/{w}"),
                        &[d, self.d_k],
                        Init::Xavier,
                        seed,
                    );
                }
                params.get_or_init(
                    &format!("vae/enc/gt/layer{l}/head{i}/we_w"),
                    &[d, 1],
                    Init::Xavier,
                    seed,
                );
                params.get_or_init(
                    &format!("vae/enc/gt/layer{l}/head{i}/we_b"),
                    &[1],
                    Init::Zeros,
                    seed,
                );
            }
            params.get_or_init(
                &format!("vae/enc/gt/layer{l}/wo_h"),
                &[self.heads * self.d_k, d],
                Init::Xavier,
                seed,
            );
            params.get_or_init(
                &format!("vae/enc/gt/layer{l}/wo_e/w"),
                &[self.heads, d],
                Init::Xavier,
                seed,
            );
            params.get_or_init(&format!("vae/enc/gt/layer{l}/wo_e/b"), &[d], Init::Zeros, seed);
            for ln in ["ln_h", "ln_e"] {
                params.get_or_init(
                    &format!("vae/enc/gt/layer{l}/{ln}/gain"),
                    &[d],
                    Init::Ones,
                    seed,
                );
                params.get_or_init(
                    &format!("vae/enc/gt/layer{l}/{ln}/bias"),
                    &[d],
                    Init::Zeros,
                    seed,
                );
            }
        }
        params.get_or_init("vae/mu/w", &[d, self.d_z], Init::Xavier, seed);
        params.get_or_init("vae/mu/b", &[self.d_z], Init::Zeros, seed);
        params.get_or_init("vae/logvar/w", &[d, self.d_z], Init::Xavier, seed);
        params.get_or_init("vae/logvar/b", &[self.d_z], Init::Zeros, seed);
        self.decoder.init_params(params, seed);
    }

    /// Encodes a labeled graph into the posterior (mu, log sigma^2), each
    /// [1 x d_z]. The encoder sees the label through the edge-state feature.
    pub fn encode(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        instance: &Instance,
    ) -> Result<(TensorId, TensorId)> {
        let n = instance.n();
        let mut node_feats = Vec::with_capacity(n * 2);
        for c in &instance.coords {
            node_feats.extend_from_slice(c);
        }
        let node_feats = tape.constant(DTensor::new(vec![n, 2], node_feats)?);
        let w_in = binding.id("vae/enc/input/node/w");
        let b_in = binding.id("vae/enc/input/node/b");
        let h0 = tape.linear(node_feats, w_in, b_in)?;

        let mut edge_feats = Vec::with_capacity(n * n * super::EDGE_FEATS);
        for i in 0..n {
            for j in 0..n {
                let dist = crate::solver::euclid(instance.coords[i], instance.coords[j]);
                edge_feats.push(dist);
                edge_feats.push(if dist <= instance.d { 1.0 } else { 0.0 });
                edge_feats.push(if i != j && instance.label.get(i, j) { 1.0 } else { 0.0 });
            }
        }
        let edge_feats = tape.constant(DTensor::new(vec![n * n, super::EDGE_FEATS], edge_feats)?);
        let we = binding.id("vae/enc/input/edge/w");
        let be = binding.id("vae/enc/input/edge/b");
        let e0 = tape.linear(edge_feats, we, be)?;

        let (h, _) = self.encoder_stack().forward(tape, binding, h0, e0, None)?;
        let pooled = tape.mean_rows(h)?; // [1 x d]
        let mu = {
            let w = binding.id("vae/mu/w");
            let b = binding.id("vae/mu/b");
            tape.linear(pooled, w, b)?
        };
        let logvar = {
            let w = binding.id("vae/logvar/w");
            let b = binding.id("vae/logvar/b");
            tape.linear(pooled, w, b)?
        };
        Ok((mu, logvar))
    }

    /// Negative ELBO for one instance under a fixed reparameterization draw
    /// `eps` (standard normal, length d_z). Also returns the decoded
    /// probability matrix for logging.
    pub fn loss(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        instance: &Instance,
        eps: &[f64],
    ) -> Result<(TensorId, TensorId)> {
        let (mu, logvar) = self.encode(tape, binding, instance)?;
        // z = mu + exp(logvar / 2) * eps
        let half_logvar = tape.scale(logvar, 0.5);
        let sigma = tape.exp(half_logvar);
        let eps_t = tape.constant(DTensor::new(vec![1, self.d_z], eps.to_vec())?);
        let noise = tape.mul(sigma, eps_t)?;
        let z = tape.add(mu, noise)?;

        // Decode with the sampled latent as an extra node input. The latent
        // flows through the graph, so reconstruction gradients reach the
        // encoder via z.
        let probs = self.decode_with_latent(tape, binding, instance, z)?;
        let n = instance.n();
        let pred_ut = upper_triangle_column(tape, probs, n)?;
        let target_ut = tape.constant(upper_triangle_targets(&instance.label));
        let recon = tape.bce_loss(pred_ut, target_ut, BCE_EPS)?;

        // KL(N(mu, sigma^2) || N(0, I)) = -1/2 sum(1 + logvar - mu^2 - exp(logvar))
        let mu_sq = tape.mul(mu, mu)?;
        let var = tape.exp(logvar);
        let ones = tape.constant(DTensor::new(vec![1, self.d_z], vec![1.0; self.d_z])?);
        let t1 = tape.add(ones, logvar)?;
        let t2 = tape.sub(t1, mu_sq)?;
        let t3 = tape.sub(t2, var)?;
        let summed = tape.sum_all(t3);
        let kl = tape.scale(summed, -0.5);
        let loss = tape.add(recon, kl)?;
        Ok((loss, probs))
    }

    /// Runs the decoder with a latent that lives on the tape, keeping it
    /// differentiable. The input lift is affine, so [coords ++ z].W + b
    /// equals [coords ++ 0].W + b + z.Wz with Wz the latent block of the
    /// weight; the second term is added to the lifted embeddings.
    fn decode_with_latent(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        instance: &Instance,
        z: TensorId,
    ) -> Result<TensorId> {
        let n = instance.n();
        let w_in = binding.id("vae/dec/input/node/w");
        let zero_z = vec![0.0; self.d_z];
        let ctx = ForwardCtx {
            coords: &instance.coords,
            d: instance.d,
            edge_state: None,
            t_over_t: None,
            z: Some(&zero_z),
        };
        let pe_dim = if self.decoder.config.laplacian_pe {
            self.decoder.config.conditioner.num_eigen
        } else {
            0
        };
        let z_start = 2 + pe_dim;
        let w_z = tape.slice_rows(w_in, z_start, z_start + self.d_z)?;
        let z_contrib = tape.matmul(z, w_z)?; // [1 x d]
        let z_rows = tape.broadcast_rows(z_contrib, n)?;
        let out = self
            .decoder
            .forward_with_h0_extra(tape, binding, &ctx, Some(z_rows))?;
        Ok(out.probs)
    }

    /// Prior sampling: draws z ~ N(0, I) and decodes it for the given nodes.
    pub fn sample_latent(&self, rng: &mut impl Rng) -> Vec<f64> {
        (0..self.d_z).map(|_| rng.sample(StandardNormal)).collect()
    }

    /// Decodes a fixed latent for the given coordinates.
    pub fn decode(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        coords: &[[f64; 2]],
        d: f64,
        z: &[f64],
    ) -> Result<TensorId> {
        let ctx = ForwardCtx {
            coords,
            d,
            edge_state: None,
            t_over_t: None,
            z: Some(z),
        };
        Ok(self.decoder.forward(tape, binding, &ctx)?.probs)
    }
}
