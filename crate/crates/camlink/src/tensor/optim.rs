use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DTensor, Tape, TensorId};
use crate::error::{Error, Result};

/// A named model parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Weight initialization schemes.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    /// Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)), fans from shape.
    Xavier,
}

/// Ordered map from parameter path strings to tensors.
///
/// Initial values depend only on (seed, path), never on creation order, so
/// two models sharing a path prefix start from identical weights.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    order: Vec<String>,
    entries: HashMap<String, Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn contains(&self, path: &str) -> bool {
        self.entries.contains_key(path)
    }

    pub fn get(&self, path: &str) -> Option<&Param> {
        self.entries.get(path)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Param> {
        self.entries.get_mut(path)
    }

    pub fn insert(&mut self, path: impl Into<String>, param: Param) {
        let path = path.into();
        if !self.entries.contains_key(&path) {
            self.order.push(path.clone());
        }
        self.entries.insert(path, param);
    }

    /// Creates the parameter if absent, seeding its values from (seed, path).
    pub fn get_or_init(&mut self, path: &str, shape: &[usize], init: Init, seed: u64) -> &Param {
        if !self.entries.contains_key(path) {
            let numel: usize = shape.iter().product();
            let data = match init {
                Init::Zeros => vec![0.0; numel],
                Init::Ones => vec![1.0; numel],
                Init::Const(c) => vec![c; numel],
                Init::Xavier => {
                    let (fan_in, fan_out) = match shape {
                        [m, n] => (*m, *n),
                        [n] => (*n, *n),
                        other => {
                            let n: usize = other.iter().product();
                            (n, n)
                        }
                    };
                    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a64(path.as_bytes()));
                    (0..numel)
                        .map(|_| rng.random::<f64>() * 2.0 * bound - bound)
                        .collect()
                }
            };
            self.insert(
                path,
                Param {
                    shape: shape.to_vec(),
                    data,
                },
            );
        }
        &self.entries[path]
    }

    /// Paths in insertion order.
    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.order.iter().map(|s| s.as_str())
    }

    /// Inserts every parameter into the tape as a differentiable leaf.
    pub fn bind_all(&self, tape: &mut Tape) -> Binding {
        let mut ids = HashMap::new();
        for path in &self.order {
            let p = &self.entries[path];
            let t = DTensor::new(p.shape.clone(), p.data.clone()).expect("stored params are valid");
            ids.insert(path.clone(), tape.leaf(t));
        }
        Binding { ids }
    }
}

/// Map from parameter paths to their tape leaves for one forward pass.
pub struct Binding {
    ids: HashMap<String, TensorId>,
}

impl Binding {
    pub fn id(&self, path: &str) -> TensorId {
        *self
            .ids
            .get(path)
            .unwrap_or_else(|| panic!("parameter {path} not bound"))
    }

    /// Reads back gradients for every bound parameter after `backward`.
    pub fn grads(&self, tape: &Tape) -> Result<HashMap<String, Vec<f64>>> {
        let mut out = HashMap::new();
        for (path, &id) in &self.ids {
            let g = tape.grad(id).ok_or_else(|| {
                Error::Contract(format!("parameter {path} has no gradient; run backward first"))
            })?;
            out.insert(path.clone(), g.to_vec());
        }
        Ok(out)
    }
}

/// Accumulates per-parameter gradient sums across a batch.
#[derive(Default)]
pub struct GradAccumulator {
    sums: HashMap<String, Vec<f64>>,
    count: usize,
}

impl GradAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, grads: &HashMap<String, Vec<f64>>) {
        for (path, g) in grads {
            let slot = self
                .sums
                .entry(path.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            for (s, v) in slot.iter_mut().zip(g) {
                *s += v;
            }
        }
        self.count += 1;
    }

    /// Mean gradients over the accumulated batch.
    pub fn mean(mut self) -> HashMap<String, Vec<f64>> {
        let c = self.count.max(1) as f64;
        for g in self.sums.values_mut() {
            for v in g.iter_mut() {
                *v /= c;
            }
        }
        self.sums
    }
}

/// Decoupled weight-decay Adam with bias-corrected moments.
#[derive(Clone, Copy, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First/second-moment estimates, keyed by parameter path.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub step: u64,
    pub m: HashMap<String, Vec<f64>>,
    pub v: HashMap<String, Vec<f64>>,
}

impl AdamW {
    /// One update over every parameter in the set. Every parameter must have
    /// a gradient entry.
    pub fn step(
        &self,
        params: &mut ParamSet,
        grads: &HashMap<String, Vec<f64>>,
        state: &mut AdamState,
    ) -> Result<()> {
        state.step += 1;
        let t = state.step;
        let bc1 = 1.0 - self.beta1.powi(t as i32);
        let bc2 = 1.0 - self.beta2.powi(t as i32);
        let paths: Vec<String> = params.paths().map(String::from).collect();
        for path in paths {
            let g = grads.get(&path).ok_or_else(|| {
                Error::Contract(format!("adamw_step: no gradient for parameter {path}"))
            })?;
            let p = params.get_mut(&path).expect("path from iteration");
            if g.len() != p.data.len() {
                return Err(Error::Contract(format!(
                    "adamw_step: gradient length {} != parameter length {} for {path}",
                    g.len(),
                    p.data.len()
                )));
            }
            let m = state
                .m
                .entry(path.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let v = state
                .v
                .entry(path.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                let w = p.data[i];
                p.data[i] = w - self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * w);
            }
        }
        Ok(())
    }
}

pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf29ce484222325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grads_zero_decay_is_identity() {
        let mut params = ParamSet::new();
        params.get_or_init("w", &[2, 2], Init::Xavier, 7);
        let before = params.get("w").unwrap().data.clone();
        let grads: HashMap<String, Vec<f64>> = [("w".to_string(), vec![0.0; 4])].into();
        let opt = AdamW {
            weight_decay: 0.0,
            ..AdamW::default()
        };
        let mut state = AdamState::default();
        opt.step(&mut params, &grads, &mut state).unwrap();
        assert_eq!(params.get("w").unwrap().data, before);
    }

    #[test]
    fn lr_zero_is_identity_even_with_grads_and_decay() {
        let mut params = ParamSet::new();
        params.get_or_init("w", &[3], Init::Ones, 0);
        let grads: HashMap<String, Vec<f64>> = [("w".to_string(), vec![1.0, -2.0, 0.5])].into();
        let opt = AdamW {
            lr: 0.0,
            ..AdamW::default()
        };
        let mut state = AdamState::default();
        opt.step(&mut params, &grads, &mut state).unwrap();
        assert_eq!(params.get("w").unwrap().data, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn one_step_descends_quadratic() {
        // f(w) = w^2 from w=1, grad = 2w; one step with lr=0.1 must decrease f.
        let mut params = ParamSet::new();
        params.insert(
            "w",
            Param {
                shape: vec![1],
                data: vec![1.0],
            },
        );
        let grads: HashMap<String, Vec<f64>> = [("w".to_string(), vec![2.0])].into();
        let opt = AdamW {
            lr: 0.1,
            weight_decay: 0.0,
            ..AdamW::default()
        };
        let mut state = AdamState::default();
        opt.step(&mut params, &grads, &mut state).unwrap();
        let w = params.get("w").unwrap().data[0];
        assert!(w * w < 1.0, "f(w) did not decrease: w={w}");
    }

    #[test]
    fn converges_on_two_parameter_quadratic() {
        // f(w) = w0^2 + w1^2, minimum at 0; 200 steps reach |w| <= 1e-2.
        let mut params = ParamSet::new();
        params.insert(
            "w",
            Param {
                shape: vec![2],
                data: vec![1.0, -0.8],
            },
        );
        let opt = AdamW {
            lr: 0.05,
            weight_decay: 0.0,
            ..AdamW::default()
        };
        let mut state = AdamState::default();
        for _ in 0..200 {
            let w = params.get("w").unwrap().data.clone();
            let grads: HashMap<String, Vec<f64>> =
                [("w".to_string(), vec![2.0 * w[0], 2.0 * w[1]])].into();
            opt.step(&mut params, &grads, &mut state).unwrap();
        }
        let w = params.get("w").unwrap().data.clone();
        assert!(w[0].abs() <= 1e-2 && w[1].abs() <= 1e-2, "w = {w:?}");
    }

    #[test]
    fn missing_grad_is_a_contract_error() {
        let mut params = ParamSet::new();
        params.get_or_init("w", &[1], Init::Zeros, 0);
        let grads = HashMap::new();
        let mut state = AdamState::default();
        assert!(AdamW::default()
            .step(&mut params, &grads, &mut state)
            .is_err());
    }

    #[test]
    fn init_depends_on_path_not_creation_order() {
        let mut a = ParamSet::new();
        a.get_or_init("x", &[4], Init::Xavier, 1);
        a.get_or_init("y", &[4], Init::Xavier, 1);
        let mut b = ParamSet::new();
        b.get_or_init("y", &[4], Init::Xavier, 1);
        b.get_or_init("x", &[4], Init::Xavier, 1);
        assert_eq!(a.get("x"), b.get("x"));
        assert_eq!(a.get("y"), b.get("y"));
        assert_ne!(a.get("x"), a.get("y"));
    }
}
