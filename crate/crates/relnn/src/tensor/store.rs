//! Named parameter tensors, the current assignment, and the optimizer.
//!
//! Keys pair a name with the template-argument tuple of the instantiation
//! that introduced the parameter; identical keys alias one tensor, which is
//! what makes template sharing work.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Matrix;
use crate::error::{Error, Result, Stage};

/// One template argument: an integer or a string label.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ArgVal {
    Int(i64),
    Str(String),
}

impl fmt::Display for ArgVal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ArgVal::Int(i) => write!(f, "{}", i),
            ArgVal::Str(s) => write!(f, "'{}'", s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamKey {
    pub name: String,
    pub args: Vec<ArgVal>,
}

impl ParamKey {
    pub fn plain(name: impl Into<String>) -> ParamKey {
        ParamKey { name: name.into(), args: Vec::new() }
    }

    pub fn with_args(name: impl Into<String>, args: Vec<ArgVal>) -> ParamKey {
        ParamKey { name: name.into(), args }
    }
}

impl fmt::Display for ParamKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.name)?;
        if !self.args.is_empty() {
            write!(f, "<")?;
            for (i, a) in self.args.iter().enumerate() {
                if i > 0 {
                    write!(f, ",")?;
                }
                write!(f, "{}", a)?;
            }
            write!(f, ">")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone)]
pub struct Hyper {
    pub lr: f64,
    pub weight_decay: f64,
    pub kind: OptimKind,
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Matrix,
    pub v: Matrix,
    pub t: u64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Default)]
pub struct ParameterStore {
    params: BTreeMap<ParamKey, Matrix>,
    adam: BTreeMap<ParamKey, AdamState>,
}

impl ParameterStore {
    pub fn new() -> ParameterStore {
        ParameterStore::default()
    }

    /// Register a parameter if absent; returns whether it was newly created.
    /// Re-registering an existing key keeps the current value, so repeated
    /// lowering of a shared template argument tuple aliases one tensor.
    pub fn register(&mut self, key: ParamKey, init: impl FnOnce() -> Matrix) -> bool {
        if self.params.contains_key(&key) {
            return false;
        }
        self.params.insert(key, init());
        true
    }

    pub fn get(&self, key: &ParamKey) -> Option<&Matrix> {
        self.params.get(key)
    }

    pub fn set(&mut self, key: &ParamKey, value: Matrix) -> Result<()> {
        match self.params.get_mut(key) {
            Some(m) => {
                if m.shape() != value.shape() {
                    return Err(Error::new(
                        Stage::Fit,
                        format!("parameter {} shape mismatch on set", key),
                    ));
                }
                *m = value;
                Ok(())
            }
            None => Err(Error::new(Stage::Fit, format!("unknown parameter {}", key))),
        }
    }

    pub fn contains(&self, key: &ParamKey) -> bool {
        self.params.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &ParamKey> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// One optimizer step over the given gradients. Every gradient key must
    /// exist in the store; parameters without a gradient entry are untouched.
    pub fn optimizer_step(
        &mut self,
        grads: &BTreeMap<ParamKey, Matrix>,
        hyper: &Hyper,
    ) -> Result<()> {
        if hyper.lr <= 0.0 {
            return Err(Error::new(Stage::Fit, format!("learning rate must be positive, got {}", hyper.lr)));
        }
        for (key, g) in grads {
            let theta = self
                .params
                .get_mut(key)
                .ok_or_else(|| Error::new(Stage::Fit, format!("gradient for unknown parameter {}", key)))?;
            if theta.shape() != g.shape() {
                return Err(Error::new(
                    Stage::Fit,
                    format!("gradient shape mismatch for {}: {:?} vs {:?}", key, theta.shape(), g.shape()),
                ));
            }
            match hyper.kind {
                OptimKind::Sgd => {
                    for (t, gi) in theta.data.iter_mut().zip(&g.data) {
                        *t -= hyper.lr * (gi + hyper.weight_decay * *t);
                    }
                }
                OptimKind::Adam => {
                    let state = self.adam.entry(key.clone()).or_insert_with(|| AdamState {
                        m: Matrix::zeros(g.rows, g.cols),
                        v: Matrix::zeros(g.rows, g.cols),
                        t: 0,
                    });
                    state.t += 1;
                    let bc1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
                    let bc2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
                    for i in 0..theta.data.len() {
                        let gi = g.data[i];
                        state.m.data[i] = ADAM_BETA1 * state.m.data[i] + (1.0 - ADAM_BETA1) * gi;
                        state.v.data[i] = ADAM_BETA2 * state.v.data[i] + (1.0 - ADAM_BETA2) * gi * gi;
                        let m_hat = state.m.data[i] / bc1;
                        let v_hat = state.v.data[i] / bc2;
                        // Decay stays out of the moment estimates and enters
                        // as an additive term of the update.
                        theta.data[i] -= hyper.lr
                            * (m_hat / (v_hat.sqrt() + ADAM_EPS) + hyper.weight_decay * theta.data[i]);
                    }
                }
            }
        }
        Ok(())
    }

    /// Textual checkpoint; floats are written as raw bit patterns so the
    /// round-trip is exact.
    pub fn save_checkpoint(&self) -> String {
        let mut out = String::new();
        for (key, m) in &self.params {
            out.push_str(&format!("param\t{}\t{}", escape(&key.name), key.args.len()));
            for a in &key.args {
                match a {
                    ArgVal::Int(i) => out.push_str(&format!("\ti:{}", i)),
                    ArgVal::Str(s) => out.push_str(&format!("\ts:{}", escape(s))),
                }
            }
            out.push_str(&format!("\t{}\t{}\n", m.rows, m.cols));
            let words: Vec<String> = m.data.iter().map(|x| format!("{:016x}", x.to_bits())).collect();
            out.push_str(&words.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn load_checkpoint(text: &str) -> Result<ParameterStore> {
        let mut store = ParameterStore::new();
        let mut lines = text.lines();
        while let Some(header) = lines.next() {
            if header.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = header.split('\t').collect();
            if fields.len() < 5 || fields[0] != "param" {
                return Err(Error::data(format!("malformed checkpoint header: {}", header)));
            }
            let name = unescape(fields[1]);
            let nargs: usize = fields[2]
                .parse()
                .map_err(|_| Error::data("bad arg count in checkpoint"))?;
            if fields.len() != 5 + nargs {
                return Err(Error::data("checkpoint header field count mismatch"));
            }
            let mut args = Vec::with_capacity(nargs);
            for f in &fields[3..3 + nargs] {
                if let Some(i) = f.strip_prefix("i:") {
                    args.push(ArgVal::Int(i.parse().map_err(|_| Error::data("bad int arg"))?));
                } else if let Some(s) = f.strip_prefix("s:") {
                    args.push(ArgVal::Str(unescape(s)));
                } else {
                    return Err(Error::data(format!("bad checkpoint arg: {}", f)));
                }
            }
            let rows: usize = fields[3 + nargs].parse().map_err(|_| Error::data("bad rows"))?;
            let cols: usize = fields[4 + nargs].parse().map_err(|_| Error::data("bad cols"))?;
            let data_line = lines.next().ok_or_else(|| Error::data("truncated checkpoint"))?;
            let mut data = Vec::with_capacity(rows * cols);
            for w in data_line.split_whitespace() {
                let bits = u64::from_str_radix(w, 16).map_err(|_| Error::data("bad float bits"))?;
                data.push(f64::from_bits(bits));
            }
            if data.len() != rows * cols {
                return Err(Error::data("checkpoint data length mismatch"));
            }
            store.params.insert(ParamKey::with_args(name, args), Matrix::from_vec(rows, cols, data));
        }
        Ok(store)
    }
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('\t', "\\t").replace('\n', "\\n")
}

fn unescape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next() {
                Some('t') => out.push('\t'),
                Some('n') => out.push('\n'),
                Some('\\') => out.push('\\'),
                Some(other) => out.push(other),
                None => {}
            }
        } else {
            out.push(c);
        }
    }
    out
}

/// Deterministic per-key RNG stream: FNV-1a over the key display mixed with
/// the global seed. Independent of registration order and stable across
/// platforms.
pub fn seeded_rng(global_seed: u64, key: &ParamKey) -> ChaCha8Rng {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in key.to_string().bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    ChaCha8Rng::seed_from_u64(global_seed ^ h)
}

/// Standard normal sample via Box-Muller on the raw uniform stream.
pub fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = loop {
        let u: f64 = rng.gen();
        if u > 0.0 {
            break u;
        }
    };
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Gaussian matrix with entries N(0, sigma^2).
pub fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, sigma: f64) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    for x in m.data.iter_mut() {
        *x = gaussian(rng) * sigma;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{ReduceKind, Tape};

    #[test]
    fn sgd_step_matches_hand_values() {
        let mut store = ParameterStore::new();
        let k = ParamKey::plain("theta");
        store.register(k.clone(), || Matrix::scalar(1.0));
        let mut grads = BTreeMap::new();
        grads.insert(k.clone(), Matrix::scalar(2.0));
        store
            .optimizer_step(&grads, &Hyper { lr: 0.1, weight_decay: 0.0, kind: OptimKind::Sgd })
            .unwrap();
        assert!((store.get(&k).unwrap().get(0, 0) - 0.8).abs() < 1e-12);
    }

    #[test]
    fn sgd_weight_decay_shrinks_without_grad() {
        let mut store = ParameterStore::new();
        let k = ParamKey::plain("theta");
        store.register(k.clone(), || Matrix::scalar(1.0));
        let mut grads = BTreeMap::new();
        grads.insert(k.clone(), Matrix::scalar(0.0));
        store
            .optimizer_step(&grads, &Hyper { lr: 0.1, weight_decay: 0.5, kind: OptimKind::Sgd })
            .unwrap();
        assert!((store.get(&k).unwrap().get(0, 0) - 0.95).abs() < 1e-12);
    }

    #[test]
    fn adam_converges_on_quadratic() {
        // f(theta) = (theta - 3)^2, closed-form optimum at 3.
        let mut store = ParameterStore::new();
        let k = ParamKey::plain("theta");
        store.register(k.clone(), || Matrix::scalar(0.0));
        let hyper = Hyper { lr: 0.1, weight_decay: 0.0, kind: OptimKind::Adam };
        for _ in 0..200 {
            let mut tape = Tape::new();
            let p = tape.param(k.clone(), store.get(&k).unwrap().clone());
            let c = tape.constant(Matrix::scalar(-3.0));
            let diff = tape.add(p, c).unwrap();
            let sq = tape.mul_elementwise(diff, diff).unwrap();
            let loss = tape.reduce(sq, ReduceKind::Sum).unwrap();
            tape.backward(loss).unwrap();
            let (grads, _) = tape.leaf_grads();
            store.optimizer_step(&grads, &hyper).unwrap();
        }
        let theta = store.get(&k).unwrap().get(0, 0);
        assert!((theta - 3.0).abs() < 1e-2, "theta = {}", theta);
    }

    #[test]
    fn rejects_nonpositive_lr() {
        let mut store = ParameterStore::new();
        let k = ParamKey::plain("p");
        store.register(k.clone(), || Matrix::scalar(1.0));
        let mut grads = BTreeMap::new();
        grads.insert(k, Matrix::scalar(1.0));
        let res = store
            .optimizer_step(&grads, &Hyper { lr: 0.0, weight_decay: 0.0, kind: OptimKind::Sgd });
        assert!(res.is_err());
    }

    #[test]
    fn checkpoint_round_trips_exactly() {
        let mut store = ParameterStore::new();
        let k1 = ParamKey::with_args("W", vec![ArgVal::Int(3), ArgVal::Str("C3".into())]);
        let k2 = ParamKey::plain("odd\tname");
        store.register(k1.clone(), || {
            Matrix::from_rows(&[vec![0.1, 1.0 / 3.0], vec![-2.5e-17, f64::MIN_POSITIVE]])
        });
        store.register(k2.clone(), || Matrix::scalar(-0.0));
        let text = store.save_checkpoint();
        let back = ParameterStore::load_checkpoint(&text).unwrap();
        for k in [&k1, &k2] {
            let a = store.get(k).unwrap();
            let b = back.get(k).unwrap();
            assert_eq!(a.shape(), b.shape());
            for (x, y) in a.data.iter().zip(&b.data) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn seeded_init_is_deterministic_and_key_dependent() {
        let ka = ParamKey::plain("a");
        let kb = ParamKey::plain("b");
        let m1 = gaussian_matrix(&mut seeded_rng(7, &ka), 2, 3, 1.0);
        let m2 = gaussian_matrix(&mut seeded_rng(7, &ka), 2, 3, 1.0);
        let m3 = gaussian_matrix(&mut seeded_rng(7, &kb), 2, 3, 1.0);
        assert_eq!(m1, m2);
        assert_ne!(m1, m3);
    }
}
