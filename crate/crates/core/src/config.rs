//! Training configuration, presets and the flat `key = value` file format.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gnn::Activation;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Small dimensions for laptop-scale runs and tests.
    Desk,
    Full,
}

impl Preset {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "desk" => Some(Preset::Desk),
            "full" => Some(Preset::Full),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lambda_cl: f64,
    pub lambda_tucker: f64,
    pub lambda_reg: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub curvature: f64,
    /// KG embedding size.
    pub d: usize,
    /// GNN feature size.
    pub d_e: usize,
    /// Tucker core size.
    pub d_c: usize,
    /// SVD rank.
    pub k_s: usize,
    pub layers: usize,
    pub tau: f64,
    pub beta: f64,
    pub alpha_e: f64,
    pub w_s: f64,
    pub dropout: f64,
    pub activation: Activation,
    pub kg_pretrain_epochs: usize,
    pub kg_batch_size: usize,
    pub checkpoint_every: usize,
    /// When false the hyperbolic pathway is dropped and items are scored by inner product.
    pub use_hyperbolic: bool,
    /// Adds the Tucker score of `(user, interacts, item)` to the prediction.
    pub use_tucker_score: bool,
    pub tucker_normalize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::preset(Preset::Desk)
    }
}

const KEYS: &[&str] = &[
    "activation",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "alpha_e",
    "batch_size",
    "beta",
    "checkpoint_every",
    "curvature",
    "d",
    "d_c",
    "d_e",
    "dropout",
    "epochs",
    "k_s",
    "kg_batch_size",
    "kg_pretrain_epochs",
    "lambda_cl",
    "lambda_reg",
    "lambda_tucker",
    "layers",
    "learning_rate",
    "seed",
    "tau",
    "tucker_normalize",
    "use_hyperbolic",
    "use_tucker_score",
    "w_s",
];

impl TrainConfig {
    pub fn preset(p: Preset) -> Self {
        let desk = Self {
            lambda_cl: 0.1,
            lambda_tucker: 0.1,
            lambda_reg: 1e-5,
            learning_rate: 2e-4,
            batch_size: 128,
            epochs: 50,
            seed: 7,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            curvature: 1.0,
            d: 32,
            d_e: 32,
            d_c: 16,
            k_s: 32,
            layers: 3,
            tau: 0.2,
            beta: 1.0,
            alpha_e: 0.8,
            w_s: 0.5,
            dropout: 0.2,
            activation: Activation::LeakyRelu,
            kg_pretrain_epochs: 20,
            kg_batch_size: 256,
            checkpoint_every: 10,
            use_hyperbolic: true,
            use_tucker_score: false,
            tucker_normalize: true,
        };
        match p {
            Preset::Desk => desk,
            Preset::Full => Self {
                d: 64,
                d_e: 384,
                d_c: 64,
                k_s: 64,
                batch_size: 1024,
                kg_batch_size: 1024,
                ..desk
            },
        }
    }

    /// Every configurable key.
    pub fn keys() -> &'static [&'static str] {
        KEYS
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
        }
        fn flag(key: &str, value: &str) -> Result<bool> {
            match value {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => Err(Error::Config(format!("invalid boolean {value:?} for {key}"))),
            }
        }
        match key {
            "lambda_cl" => self.lambda_cl = num(key, value)?,
            "lambda_tucker" => self.lambda_tucker = num(key, value)?,
            "lambda_reg" => self.lambda_reg = num(key, value)?,
            "learning_rate" => self.learning_rate = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "adam_beta1" => self.adam_beta1 = num(key, value)?,
            "adam_beta2" => self.adam_beta2 = num(key, value)?,
            "adam_eps" => self.adam_eps = num(key, value)?,
            "curvature" => self.curvature = num(key, value)?,
            "d" => self.d = num(key, value)?,
            "d_e" => self.d_e = num(key, value)?,
            "d_c" => self.d_c = num(key, value)?,
            "k_s" => self.k_s = num(key, value)?,
            "layers" => self.layers = num(key, value)?,
            "tau" => self.tau = num(key, value)?,
            "beta" => self.beta = num(key, value)?,
            "alpha_e" => self.alpha_e = num(key, value)?,
            "w_s" => self.w_s = num(key, value)?,
            "dropout" => self.dropout = num(key, value)?,
            "activation" => {
                self.activation = Activation::parse(value)
                    .ok_or_else(|| Error::Config(format!("unknown activation {value:?}")))?
            }
            "kg_pretrain_epochs" => self.kg_pretrain_epochs = num(key, value)?,
            "kg_batch_size" => self.kg_batch_size = num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            "use_hyperbolic" => self.use_hyperbolic = flag(key, value)?,
            "use_tucker_score" => self.use_tucker_score = flag(key, value)?,
            "tucker_normalize" => self.tucker_normalize = flag(key, value)?,
            _ => return Err(Error::Config(format!("unknown configuration key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "lambda_cl" => self.lambda_cl.to_string(),
            "lambda_tucker" => self.lambda_tucker.to_string(),
            "lambda_reg" => self.lambda_reg.to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "epochs" => self.epochs.to_string(),
            "seed" => self.seed.to_string(),
            "adam_beta1" => self.adam_beta1.to_string(),
            "adam_beta2" => self.adam_beta2.to_string(),
            "adam_eps" => self.adam_eps.to_string(),
            "curvature" => self.curvature.to_string(),
            "d" => self.d.to_string(),
            "d_e" => self.d_e.to_string(),
            "d_c" => self.d_c.to_string(),
            "k_s" => self.k_s.to_string(),
            "layers" => self.layers.to_string(),
            "tau" => self.tau.to_string(),
            "beta" => self.beta.to_string(),
            "alpha_e" => self.alpha_e.to_string(),
            "w_s" => self.w_s.to_string(),
            "dropout" => self.dropout.to_string(),
            "activation" => self.activation.name().to_string(),
            "kg_pretrain_epochs" => self.kg_pretrain_epochs.to_string(),
            "kg_batch_size" => self.kg_batch_size.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "use_hyperbolic" => self.use_hyperbolic.to_string(),
            "use_tucker_score" => self.use_tucker_score.to_string(),
            "tucker_normalize" => self.tucker_normalize.to_string(),
            _ => return None,
        })
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: n + 1,
                message: "expected key = value".into(),
            })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text)
    }

    /// Sorted `key = value` lines; parsing them back reproduces `self`.
    pub fn to_text(&self) -> String {
        let map: BTreeMap<&str, String> = KEYS
            .iter()
            .map(|&k| (k, self.get(k).expect("listed key")))
            .collect();
        map.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// First eight bytes (little endian) of the SHA-256 of [`Self::to_text`].
    pub fn hash(&self) -> u64 {
        let digest = Sha256::digest(self.to_text().as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (k, v) in [
            ("lambda_cl", self.lambda_cl),
            ("lambda_tucker", self.lambda_tucker),
            ("lambda_reg", self.lambda_reg),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{k} must be a finite nonnegative number"));
            }
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be nonnegative".into());
        }
        for (k, v) in [("curvature", self.curvature), ("tau", self.tau)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{k} must be positive"));
            }
        }
        for (k, v) in [("alpha_e", self.alpha_e), ("w_s", self.w_s)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{k} must lie in [0, 1]"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam decay rates must lie in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive".into());
        }
        for (k, v) in [
            ("batch_size", self.batch_size),
            ("kg_batch_size", self.kg_batch_size),
            ("d", self.d),
            ("d_e", self.d_e),
            ("d_c", self.d_c),
            ("k_s", self.k_s),
            ("layers", self.layers),
        ] {
            if v == 0 {
                return bad(format!("{k} must be positive"));
            }
        }
        if self.d_c > self.d {
            return bad("d_c must not exceed d".into());
        }
        if !self.beta.is_finite() {
            return bad("beta must be finite".into());
        }
        Ok(())
    }
}
