//! Stage 1: train a domain probe on frozen features, compute the proxy
//! A-distance, and map it to the transfer ratio.
//!
//! The probe must see features from the *untrained* stage-2 extractor (or the
//! raw inputs); measuring distance on an adapted extractor would understate
//! the true discrepancy because adaptation itself shrinks it.

use std::path::Path;

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::data::{derive_seed, DomainDataset};
use crate::diffcore::Tape;
use crate::error::{Error, Result};
use crate::model::Network;

/// Where the probe's inputs come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    /// F(x) from the frozen, randomly initialized stage-2 extractor.
    #[default]
    FrozenInit,
    /// The inputs themselves, bypassing the extractor.
    RawInput,
}

/// Two-layer domain probe (feature_dim → 16 → 1) trained with plain SGD.
#[derive(Debug, Clone)]
pub struct DomainProbe {
    pub input_dim: usize,
    pub hidden: usize,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
    /// Set when the trained probe was worse than chance on held-out data and
    /// its decision was therefore complemented.
    pub complemented: bool,
}

/// Probe training hyperparameters. The optimizer is plain SGD.
#[derive(Debug, Clone, Copy)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub hidden: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { epochs: 10, learning_rate: 0.01, batch_size: 64, hidden: 16 }
    }
}

impl DomainProbe {
    fn init(input_dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = StdRng::seed_from_u64(seed);
        let mut uniform = |fan_in: usize, fan_out: usize| -> Vec<f64> {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            (0..fan_in * fan_out).map(|_| rng.gen_range(-a..a)).collect()
        };
        let w1 = uniform(input_dim, hidden);
        let w2 = uniform(hidden, 1);
        DomainProbe {
            input_dim,
            hidden,
            w1,
            b1: vec![0.0; hidden],
            w2,
            b2: vec![0.0],
            complemented: false,
        }
    }

    /// Raw domain logit for each row; complementation flips the sign.
    pub fn logits(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let d = self.input_dim;
        let h = self.hidden;
        let mut out = Vec::with_capacity(rows);
        for i in 0..rows {
            let row = &x[i * d..(i + 1) * d];
            let mut z = self.b2[0];
            for j in 0..h {
                let mut pre = self.b1[j];
                for (k, &xv) in row.iter().enumerate() {
                    pre += xv * self.w1[k * h + j];
                }
                z += pre.max(0.0) * self.w2[j];
            }
            out.push(if self.complemented { -z } else { z });
        }
        out
    }

    /// Predicted domain flags (1 = source). Logit 0 predicts target.
    pub fn predict(&self, x: &[f64], rows: usize) -> Vec<f64> {
        self.logits(x, rows)
            .into_iter()
            .map(|z| if z > 0.0 { 1.0 } else { 0.0 })
            .collect()
    }

    fn sgd_step(&mut self, x: &[f64], rows: usize, d_flags: &[f64], lr: f64) -> Result<f64> {
        let mut tape = Tape::new();
        let xs = tape.leaf(x.to_vec(), &[rows, self.input_dim])?;
        let w1 = tape.leaf(self.w1.clone(), &[self.input_dim, self.hidden])?;
        let b1 = tape.leaf(self.b1.clone(), &[self.hidden])?;
        let w2 = tape.leaf(self.w2.clone(), &[self.hidden, 1])?;
        let b2 = tape.leaf(self.b2.clone(), &[1])?;
        let h = tape.affine(xs, w1, b1)?;
        let h = tape.relu(h)?;
        let z = tape.affine(h, w2, b2)?;
        let loss = tape.bce_with_logit(z, d_flags)?;
        tape.backward(loss)?;
        for (param, node) in [
            (&mut self.w1, w1),
            (&mut self.b1, b1),
            (&mut self.w2, w2),
            (&mut self.b2, b2),
        ] {
            for (p, g) in param.iter_mut().zip(tape.grad(node)) {
                *p -= lr * g;
            }
        }
        Ok(tape.scalar(loss))
    }
}

/// Features each row of `data` through the frozen network (no updates occur).
pub fn frozen_features(net_init: &Network, data: &DomainDataset) -> Vec<f64> {
    net_init.features(&data.feature_matrix(), data.len())
}

/// Train a domain probe on an 80/20 seeded split of the two feature sets and
/// return it with its held-out error, clamped to 0.5 by complementing a
/// worse-than-chance probe.
pub fn train_probe(
    features_source: &[f64],
    features_target: &[f64],
    dim: usize,
    config: &ProbeConfig,
    seed: u64,
) -> Result<(DomainProbe, f64)> {
    if features_source.is_empty() || features_target.is_empty() {
        return Err(Error::config("probe needs nonempty feature sets for both domains"));
    }
    if features_source.len() % dim != 0 || features_target.len() % dim != 0 {
        return Err(Error::config("feature matrix length not divisible by dim"));
    }
    let ns = features_source.len() / dim;
    let nt = features_target.len() / dim;

    // Union with domain flags, shuffled once for the 80/20 split.
    let mut index: Vec<(usize, f64)> = (0..ns)
        .map(|i| (i, 1.0))
        .chain((0..nt).map(|i| (ns + i, 0.0)))
        .collect();
    let mut rng = StdRng::seed_from_u64(derive_seed(seed, 0x0B5E));
    index.shuffle(&mut rng);
    let n_train = (index.len() * 8) / 10;
    let fetch = |i: usize| -> &[f64] {
        if i < ns {
            &features_source[i * dim..(i + 1) * dim]
        } else {
            &features_target[(i - ns) * dim..(i - ns + 1) * dim]
        }
    };

    let mut probe = DomainProbe::init(dim, config.hidden, derive_seed(seed, 0x1217));
    let train = &index[..n_train];
    let held = &index[n_train..];

    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..config.epochs {
        let mut erng = StdRng::seed_from_u64(derive_seed(seed, 0xE60C + epoch as u64));
        order.shuffle(&mut erng);
        for chunk in order.chunks(config.batch_size) {
            let mut x = Vec::with_capacity(chunk.len() * dim);
            let mut d = Vec::with_capacity(chunk.len());
            for &j in chunk {
                x.extend_from_slice(fetch(train[j].0));
                d.push(train[j].1);
            }
            probe.sgd_step(&x, chunk.len(), &d, config.learning_rate)?;
        }
    }

    // Held-out misclassification rate.
    let mut wrong = 0usize;
    for &(i, d) in held {
        let pred = probe.predict(fetch(i), 1)[0];
        if pred != d {
            wrong += 1;
        }
    }
    let mut err = wrong as f64 / held.len() as f64;
    if err > 0.5 {
        // A worse-than-chance probe is replaced by its complement, matching
        // the minimum over the hypothesis class.
        probe.complemented = true;
        err = 1.0 - err;
    }
    Ok((probe, err))
}

/// d_A = 1 - 2 * err for err in [0, 0.5].
pub fn proxy_a_distance(err: f64) -> Result<f64> {
    if !(0.0..=0.5).contains(&err) {
        return Err(Error::config(format!("probe error must lie in [0, 0.5], got {err}")));
    }
    Ok(1.0 - 2.0 * err)
}

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// tau = max(M, 1 - sigma(d_A)^2) with the logistic sigma.
pub fn transfer_ratio(d_a: f64, m_floor: f64) -> Result<f64> {
    if !(0.0 < m_floor && m_floor < 1.0) {
        return Err(Error::config(format!("ratio floor M must lie in (0, 1), got {m_floor}")));
    }
    if !d_a.is_finite() || d_a < 0.0 {
        return Err(Error::config(format!("proxy A-distance must be nonnegative, got {d_a}")));
    }
    Ok((1.0 - logistic(d_a).powi(2)).max(m_floor))
}

/// Stage-1 result: probe error, proxy A-distance, transfer ratio, and the
/// provenance needed to reproduce them. Serialized as `ratio.json`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TransferRatioEstimate {
    pub err: f64,
    #[serde(rename = "d_A")]
    pub d_a: f64,
    pub tau: f64,
    #[serde(rename = "M")]
    pub m_floor: f64,
    #[serde(rename = "E_prime")]
    pub e_prime: usize,
    pub probe_seed: u64,
    pub feature_source: FeatureSource,
}

impl TransferRatioEstimate {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Run the full stage-1 estimate over two feature matrices.
pub fn estimate_transfer_ratio(
    features_source: &[f64],
    features_target: &[f64],
    dim: usize,
    config: &ProbeConfig,
    m_floor: f64,
    probe_seed: u64,
    feature_source: FeatureSource,
) -> Result<TransferRatioEstimate> {
    let (_, err) = train_probe(features_source, features_target, dim, config, probe_seed)?;
    let d_a = proxy_a_distance(err)?;
    let tau = transfer_ratio(d_a, m_floor)?;
    Ok(TransferRatioEstimate {
        err,
        d_a,
        tau,
        m_floor,
        e_prime: config.epochs,
        probe_seed,
        feature_source,
    })
}
