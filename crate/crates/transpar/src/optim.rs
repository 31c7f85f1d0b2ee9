//! The optimizer core: per-iteration importance scoring, per-module
//! partitioning into transferable/untransferable sets, and the two update
//! rules — gradient plus signed weight decay for transferable parameters,
//! decay toward zero (clamped, no sign flip) for untransferable ones.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModuleRole, Network, ParameterRegistry, ALL_ROLES};

/// Which signal ranks parameter importance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    /// |gradient * weight|
    #[default]
    Both,
    /// |weight|
    WeightOnly,
    /// |gradient|
    GradOnly,
}

/// When the transferable mask is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Recompute the partition every training iteration.
    #[default]
    Iterative,
    /// Compute the partition at the first iteration and reuse it.
    OneShotStart,
    /// Train with plain SGD; zero the untransferable weights once after
    /// training from the final iteration's scores.
    OneShotLast,
}

/// Update hyperparameters and partition policy for one training run.
#[derive(Debug, Clone)]
pub struct UpdateConfig {
    pub eta: f64,
    pub lambda: f64,
    pub criterion: Criterion,
    pub mode: MaskMode,
    pub tau: f64,
    /// Roles TransPar applies to; others get the plain signed-decay step.
    pub scope: Vec<ModuleRole>,
    /// Whether the domain discriminator is trained adversarially (its
    /// transferable count is then (1 - tau) * m).
    pub dd_adversarial: bool,
    /// Diagnostic override: treat every parameter as transferable, reducing
    /// the step to the signed-decay SGD baseline.
    pub force_full_mask: bool,
}

impl UpdateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) {
            return Err(Error::config(format!("learning rate must be positive, got {}", self.eta)));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::config(format!(
                "weight decay must be nonnegative, got {}",
                self.lambda
            )));
        }
        if !(0.0 < self.tau && self.tau <= 1.0) {
            return Err(Error::config(format!("tau must lie in (0, 1], got {}", self.tau)));
        }
        Ok(())
    }
}

/// Importance scores per the chosen criterion.
pub fn importance(weights: &[f64], grads: &[f64], criterion: Criterion) -> Result<Vec<f64>> {
    if weights.len() != grads.len() {
        return Err(Error::config(format!(
            "importance length mismatch: {} weights vs {} grads",
            weights.len(),
            grads.len()
        )));
    }
    Ok(match criterion {
        Criterion::Both => weights.iter().zip(grads).map(|(w, g)| (w * g).abs()).collect(),
        Criterion::WeightOnly => weights.iter().map(|w| w.abs()).collect(),
        Criterion::GradOnly => grads.iter().map(|g| g.abs()).collect(),
    })
}

/// Transferable count for a module: floor(tau * m) for the feature extractor
/// and source hypothesis, floor((1 - tau) * m) for an adversarial domain
/// discriminator, clamped to [1, m].
pub fn partition_count(m: usize, tau: f64, role: ModuleRole, adversarial: bool) -> usize {
    debug_assert!(m >= 1);
    let ratio = if role == ModuleRole::DomainDiscriminator && adversarial {
        1.0 - tau
    } else {
        tau
    };
    ((ratio * m as f64).floor() as usize).clamp(1, m)
}

/// Flag the `m_t` largest scores as transferable; ties break toward the
/// lower parameter index.
pub fn partition(scores: &[f64], m_t: usize) -> Result<Vec<bool>> {
    let m = scores.len();
    if !(1..=m).contains(&m_t) {
        return Err(Error::config(format!("m_t {m_t} out of range [1, {m}]")));
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_unstable_by(|&i, &j| {
        scores[j].partial_cmp(&scores[i]).expect("finite scores").then(i.cmp(&j))
    });
    let mut mask = vec![false; m];
    for &i in &order[..m_t] {
        mask[i] = true;
    }
    Ok(mask)
}

/// w' = w - eta * (g + lambda * sgn(w)), with sgn(0) = 0.
pub fn positive_update(w: f64, g: f64, eta: f64, lambda: f64) -> f64 {
    w - eta * (g + lambda * sgn(w))
}

/// w' = sgn(w) * max(0, |w| - eta * lambda): decay toward zero, clamped so
/// the sign never flips.
pub fn negative_update(w: f64, eta: f64, lambda: f64) -> f64 {
    sgn(w) * (w.abs() - eta * lambda).max(0.0)
}

fn sgn(w: f64) -> f64 {
    if w > 0.0 {
        1.0
    } else if w < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Plain signed-decay SGD over every trainable scalar (the baseline rule).
pub fn sgd_step(net: &mut Network, registry: &ParameterRegistry, eta: f64, lambda: f64) {
    for role in ALL_ROLES {
        let (mut w, g) = net.gather_role(registry, role);
        for (wi, gi) in w.iter_mut().zip(&g) {
            *wi = positive_update(*wi, *gi, eta, lambda);
        }
        net.scatter_role(registry, role, &w);
    }
}

/// Per-role mask statistics recorded each iteration.
#[derive(Debug, Clone, Serialize)]
pub struct RoleMaskStats {
    pub role: ModuleRole,
    pub m: usize,
    pub m_t: usize,
    /// Mean |w| over the untransferable set after the update (0 when empty).
    pub untransferable_mean_abs: f64,
}

/// Record of one optimizer step.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub iteration: u64,
    pub mode: MaskMode,
    pub stats: [RoleMaskStats; 3],
    /// Full per-role masks; populated only when mask capture is enabled.
    pub masks: Option<[Vec<bool>; 3]>,
}

/// Stateful TransPar optimizer. Holds the frozen mask for one-shot-start
/// mode and the iteration counter.
#[derive(Debug)]
pub struct TransParOptimizer {
    pub config: UpdateConfig,
    iteration: u64,
    frozen_masks: [Option<Vec<bool>>; 3],
    capture_masks: bool,
}

impl TransParOptimizer {
    pub fn new(config: UpdateConfig) -> Result<Self> {
        config.validate()?;
        Ok(TransParOptimizer {
            config,
            iteration: 0,
            frozen_masks: [None, None, None],
            capture_masks: false,
        })
    }

    /// Record full per-iteration masks in each [`StepRecord`].
    pub fn capture_masks(&mut self, on: bool) {
        self.capture_masks = on;
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    /// One optimizer step over freshly computed gradients: per role,
    /// score / count / partition, then positive updates on the transferable
    /// set and negative updates on the rest. Roles outside the scope (and
    /// all roles in one-shot-last mode) take the plain signed-decay step.
    pub fn step(&mut self, net: &mut Network, registry: &ParameterRegistry) -> Result<StepRecord> {
        self.iteration += 1;
        let cfg = self.config.clone();
        let mut stats = Vec::with_capacity(3);
        let mut masks: Vec<Vec<bool>> = Vec::with_capacity(3);

        for role in ALL_ROLES {
            let (mut w, g) = net.gather_role(registry, role);
            if w.iter().any(|v| !v.is_finite()) || g.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric(format!(
                    "non-finite parameter or gradient in {role:?} at iteration {}",
                    self.iteration
                )));
            }
            let m = w.len();
            let partitioned =
                cfg.scope.contains(&role) && cfg.mode != MaskMode::OneShotLast;

            let mask = if !partitioned {
                vec![true; m]
            } else {
                let m_t = if cfg.force_full_mask {
                    m
                } else {
                    partition_count(m, cfg.tau, role, cfg.dd_adversarial)
                };
                match cfg.mode {
                    MaskMode::Iterative => {
                        let scores = importance(&w, &g, cfg.criterion)?;
                        partition(&scores, m_t)?
                    }
                    MaskMode::OneShotStart => {
                        if self.frozen_masks[role.index()].is_none() {
                            let scores = importance(&w, &g, cfg.criterion)?;
                            self.frozen_masks[role.index()] = Some(partition(&scores, m_t)?);
                        }
                        self.frozen_masks[role.index()].clone().unwrap()
                    }
                    MaskMode::OneShotLast => unreachable!(),
                }
            };

            let mut decay_sum = 0.0;
            let mut decay_count = 0usize;
            for i in 0..m {
                if mask[i] {
                    w[i] = positive_update(w[i], g[i], cfg.eta, cfg.lambda);
                } else {
                    w[i] = negative_update(w[i], cfg.eta, cfg.lambda);
                    decay_sum += w[i].abs();
                    decay_count += 1;
                }
            }
            net.scatter_role(registry, role, &w);

            let m_t_actual = mask.iter().filter(|&&b| b).count();
            stats.push(RoleMaskStats {
                role,
                m,
                m_t: m_t_actual,
                untransferable_mean_abs: if decay_count > 0 {
                    decay_sum / decay_count as f64
                } else {
                    0.0
                },
            });
            masks.push(mask);
        }

        let stats: [RoleMaskStats; 3] = stats.try_into().expect("three roles");
        let masks: [Vec<bool>; 3] = masks.try_into().expect("three roles");
        Ok(StepRecord {
            iteration: self.iteration,
            mode: cfg.mode,
            stats,
            masks: self.capture_masks.then_some(masks),
        })
    }

    /// One-shot-last finalization: partition on the last-seen gradients and
    /// zero the untransferable weights of in-scope modules. No-op in other
    /// modes. Returns the applied masks per role.
    pub fn finalize(
        &mut self,
        net: &mut Network,
        registry: &ParameterRegistry,
    ) -> Result<Option<[Vec<bool>; 3]>> {
        if self.config.mode != MaskMode::OneShotLast {
            return Ok(None);
        }
        let cfg = self.config.clone();
        let mut out: Vec<Vec<bool>> = Vec::with_capacity(3);
        for role in ALL_ROLES {
            let (mut w, g) = net.gather_role(registry, role);
            let m = w.len();
            if !cfg.scope.contains(&role) {
                out.push(vec![true; m]);
                continue;
            }
            let m_t = if cfg.force_full_mask {
                m
            } else {
                partition_count(m, cfg.tau, role, cfg.dd_adversarial)
            };
            let scores = importance(&w, &g, cfg.criterion)?;
            let mask = partition(&scores, m_t)?;
            for i in 0..m {
                if !mask[i] {
                    w[i] = 0.0;
                }
            }
            net.scatter_role(registry, role, &w);
            out.push(mask);
        }
        Ok(Some(out.try_into().expect("three roles")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_network, NetConfig};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn importance_examples() {
        assert_eq!(importance(&[0.5], &[-0.2], Criterion::Both).unwrap(), vec![0.1]);
        assert_eq!(importance(&[0.0], &[3.0], Criterion::Both).unwrap(), vec![0.0]);
        let t = importance(&[1.0, -2.0, 0.1], &[0.1, 0.05, 3.0], Criterion::Both).unwrap();
        let expect = [0.1, 0.1, 0.30000000000000004];
        for (a, b) in t.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(importance(&[1.0], &[1.0, 2.0], Criterion::Both).is_err());
    }

    #[test]
    fn importance_variant_criteria() {
        let w = [1.0, -2.0, 0.1];
        let g = [0.1, 0.05, 3.0];
        assert_eq!(importance(&w, &g, Criterion::WeightOnly).unwrap(), vec![1.0, 2.0, 0.1]);
        assert_eq!(importance(&w, &g, Criterion::GradOnly).unwrap(), vec![0.1, 0.05, 3.0]);
    }

    #[test]
    fn partition_count_examples() {
        use ModuleRole::*;
        assert_eq!(partition_count(8, 0.75, FeatureExtractor, false), 6);
        assert_eq!(partition_count(100, 0.75, DomainDiscriminator, true), 25);
        assert_eq!(partition_count(10, 0.4655533546114770, FeatureExtractor, false), 4);
        assert_eq!(partition_count(3, 0.2, SourceHypothesis, false), 1);
        assert_eq!(partition_count(5, 1.0, FeatureExtractor, false), 5);
        // Adversarial discriminator at tau=1 clamps up to a single scalar.
        assert_eq!(partition_count(100, 1.0, DomainDiscriminator, true), 1);
        // Non-adversarial discriminator follows tau directly.
        assert_eq!(partition_count(100, 0.75, DomainDiscriminator, false), 75);
    }

    #[test]
    fn partition_examples_with_ties() {
        let mask = partition(&[0.1, 0.1, 0.3], 2).unwrap();
        assert_eq!(mask, vec![true, false, true]);
        let mask = partition(&[0.2, 0.5, 0.5], 3).unwrap();
        assert_eq!(mask, vec![true, true, true]);
        let mask = partition(&[1.0, 1.0, 1.0, 1.0], 2).unwrap();
        assert_eq!(mask, vec![true, true, false, false]);
        assert!(partition(&[1.0, 2.0], 0).is_err());
        assert!(partition(&[1.0, 2.0], 3).is_err());
    }

    #[test]
    fn partition_matches_brute_force_oracle() {
        // Exhaustive top-k by score with index tie-break, on random vectors.
        for trial in 0..1000u64 {
            let mut rng = StdRng::seed_from_u64(trial);
            let m = rng.gen_range(1..=50);
            let m_t = rng.gen_range(1..=m);
            // Coarse grid to force plenty of ties.
            let w: Vec<f64> = (0..m).map(|_| (rng.gen_range(-4i32..=4) as f64) * 0.25).collect();
            let g: Vec<f64> = (0..m).map(|_| (rng.gen_range(-4i32..=4) as f64) * 0.25).collect();
            let scores = importance(&w, &g, Criterion::Both).unwrap();

            let mut chosen: Vec<usize> = Vec::new();
            for _ in 0..m_t {
                let mut best: Option<usize> = None;
                for i in 0..m {
                    if chosen.contains(&i) {
                        continue;
                    }
                    best = match best {
                        None => Some(i),
                        Some(b) => {
                            if scores[i] > scores[b] {
                                Some(i)
                            } else {
                                Some(b)
                            }
                        }
                    };
                }
                chosen.push(best.unwrap());
            }
            let mut expect = vec![false; m];
            for i in chosen {
                expect[i] = true;
            }
            assert_eq!(partition(&scores, m_t).unwrap(), expect, "trial {trial}");
        }
    }

    #[test]
    fn positive_update_examples() {
        assert_eq!(positive_update(1.0, 0.5, 0.1, 0.01), 0.949);
        assert_eq!(positive_update(2.0, 0.5, 0.1, 0.0), 2.0 - 0.05);
        assert_eq!(positive_update(0.0, 0.0, 0.1, 0.01), 0.0);
    }

    #[test]
    fn negative_update_examples() {
        assert!((negative_update(0.05, 0.1, 0.01) - 0.049).abs() < 1e-15);
        assert_eq!(negative_update(0.0005, 0.1, 0.01), 0.0);
        assert!((negative_update(-0.05, 0.1, 0.01) + 0.049).abs() < 1e-15);
        assert_eq!(negative_update(0.0, 0.1, 0.01), 0.0);
    }

    #[test]
    fn negative_update_monotone_never_flips_sign() {
        let mut rng = StdRng::seed_from_u64(5);
        for _ in 0..1000 {
            let w: f64 = rng.gen_range(-2.0..2.0);
            let eta: f64 = rng.gen_range(0.0..1.0);
            let lambda: f64 = rng.gen_range(0.0..1.0);
            let w2 = negative_update(w, eta, lambda);
            assert!(w2.abs() <= w.abs());
            assert!(w2 == 0.0 || w2.signum() == w.signum());
        }
    }

    #[test]
    fn frozen_mask_decay_is_exact_on_dyadic_lattice() {
        // eta * lambda = 2^-13 and dyadic starting weights make every decay
        // step exact in floating point.
        let eta = 0.015625; // 2^-6
        let lambda = 0.0078125; // 2^-7
        let step = eta * lambda;
        let mut rng = StdRng::seed_from_u64(9);
        for _ in 0..200 {
            let k: i64 = rng.gen_range(-2000..2000);
            let w0 = k as f64 * step;
            let mut w = w0;
            for t in 1..=100u32 {
                w = negative_update(w, eta, lambda);
                let expect = sgn(w0) * (w0.abs() - t as f64 * step).max(0.0);
                assert_eq!(w, expect, "w0={w0} t={t}");
            }
        }
    }

    fn hand_config(tau: f64, mode: MaskMode) -> UpdateConfig {
        UpdateConfig {
            eta: 0.1,
            lambda: 0.01,
            criterion: Criterion::Both,
            mode,
            tau,
            scope: ALL_ROLES.to_vec(),
            dd_adversarial: true,
            force_full_mask: false,
        }
    }

    /// Two-scalar module worked by hand: T = [0.5, 0.005], m_t = 1, so index
    /// 0 takes the positive update and index 1 decays.
    #[test]
    fn hand_worked_two_scalar_module() {
        let w = [1.0, 0.01];
        let g = [0.5, 0.5];
        let scores = importance(&w, &g, Criterion::Both).unwrap();
        assert_eq!(scores, vec![0.5, 0.005]);
        let mask = partition(&scores, 1).unwrap();
        assert_eq!(mask, vec![true, false]);
        let w0 = positive_update(w[0], g[0], 0.1, 0.01);
        let w1 = negative_update(w[1], 0.1, 0.01);
        assert_eq!(w0, 0.949);
        assert!((w1 - 0.009).abs() < 1e-15);
    }

    #[test]
    fn forced_full_mask_step_equals_sgd_step() {
        let config = NetConfig { input_dim: 2, hidden: 8, classes: 2, disc_hidden: 4 };
        let mut net_a = init_network(&config, 3).unwrap();
        let mut net_b = net_a.clone();
        let registry = net_a.registry();
        // Plant some gradients.
        let mut rng = StdRng::seed_from_u64(4);
        for t in net_a.tensors_mut() {
            for g in &mut t.grad {
                *g = rng.gen_range(-0.5..0.5);
            }
        }
        for (ta, tb) in net_b.tensors_mut().iter_mut().zip(net_a.tensors()) {
            ta.grad.copy_from_slice(&tb.grad);
        }

        let mut cfg = hand_config(1.0, MaskMode::Iterative);
        cfg.force_full_mask = true;
        let mut opt = TransParOptimizer::new(cfg).unwrap();
        opt.step(&mut net_a, &registry).unwrap();
        sgd_step(&mut net_b, &registry, 0.1, 0.01);
        for (ta, tb) in net_a.tensors().iter().zip(net_b.tensors()) {
            for (a, b) in ta.data.iter().zip(&tb.data) {
                assert!((a - b).abs() <= 1e-12, "{} differs: {a} vs {b}", ta.name);
            }
        }
    }

    #[test]
    fn mask_cardinality_every_iteration() {
        let config = NetConfig { input_dim: 2, hidden: 8, classes: 2, disc_hidden: 4 };
        let mut net = init_network(&config, 1).unwrap();
        let registry = net.registry();
        let mut opt = TransParOptimizer::new(hand_config(0.6, MaskMode::Iterative)).unwrap();
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..20 {
            for t in net.tensors_mut() {
                for g in &mut t.grad {
                    *g = rng.gen_range(-0.5..0.5);
                }
            }
            let rec = opt.step(&mut net, &registry).unwrap();
            for s in &rec.stats {
                let expect =
                    partition_count(s.m, 0.6, s.role, s.role == ModuleRole::DomainDiscriminator);
                assert_eq!(s.m_t, expect, "role {:?}", s.role);
            }
        }
    }

    #[test]
    fn one_shot_start_freezes_first_mask() {
        let config = NetConfig { input_dim: 2, hidden: 6, classes: 2, disc_hidden: 3 };
        let mut net = init_network(&config, 2).unwrap();
        let registry = net.registry();
        let mut opt = TransParOptimizer::new(hand_config(0.5, MaskMode::OneShotStart)).unwrap();
        opt.capture_masks(true);
        let mut rng = StdRng::seed_from_u64(8);
        let mut first: Option<[Vec<bool>; 3]> = None;
        for _ in 0..10 {
            for t in net.tensors_mut() {
                for g in &mut t.grad {
                    *g = rng.gen_range(-0.5..0.5);
                }
            }
            let rec = opt.step(&mut net, &registry).unwrap();
            let masks = rec.masks.unwrap();
            match &first {
                None => first = Some(masks),
                Some(f) => assert_eq!(&masks, f),
            }
        }
    }

    #[test]
    fn one_shot_last_is_sgd_then_zeroing() {
        let config = NetConfig { input_dim: 2, hidden: 6, classes: 2, disc_hidden: 3 };
        let mut net = init_network(&config, 5).unwrap();
        let mut sgd_net = net.clone();
        let registry = net.registry();
        let mut opt = TransParOptimizer::new(hand_config(0.5, MaskMode::OneShotLast)).unwrap();
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..5 {
            for (ta, tb) in net.tensors_mut().iter_mut().zip(sgd_net.tensors_mut()) {
                for (ga, gb) in ta.grad.iter_mut().zip(&mut tb.grad) {
                    *ga = rng.gen_range(-0.5..0.5);
                    *gb = *ga;
                }
            }
            opt.step(&mut net, &registry).unwrap();
            sgd_step(&mut sgd_net, &registry, 0.1, 0.01);
        }
        // Identical to plain SGD during training.
        for (ta, tb) in net.tensors().iter().zip(sgd_net.tensors()) {
            assert_eq!(ta.data, tb.data);
        }
        // Finalize zeroes exactly m - m_t weights per role.
        let masks = opt.finalize(&mut net, &registry).unwrap().unwrap();
        for (role, mask) in ALL_ROLES.iter().zip(&masks) {
            let m = registry.count(*role);
            let m_t = partition_count(m, 0.5, *role, *role == ModuleRole::DomainDiscriminator);
            assert_eq!(mask.iter().filter(|&&b| b).count(), m_t);
            let (w, _) = net.gather_role(&registry, *role);
            let zeros = w.iter().filter(|&&v| v == 0.0).count();
            assert!(zeros >= m - m_t, "role {role:?}: {zeros} zeros < {}", m - m_t);
        }
    }

    #[test]
    fn masks_replay_from_logged_weights_and_grads() {
        let config = NetConfig { input_dim: 2, hidden: 8, classes: 2, disc_hidden: 4 };
        let mut net = init_network(&config, 13).unwrap();
        let registry = net.registry();
        let mut opt = TransParOptimizer::new(hand_config(0.55, MaskMode::Iterative)).unwrap();
        opt.capture_masks(true);
        let mut rng = StdRng::seed_from_u64(21);
        for _ in 0..15 {
            for t in net.tensors_mut() {
                for g in &mut t.grad {
                    *g = rng.gen_range(-0.5..0.5);
                }
            }
            // Log (w, g) before the step, then replay the partition.
            let logged: Vec<(Vec<f64>, Vec<f64>)> =
                ALL_ROLES.iter().map(|&r| net.gather_role(&registry, r)).collect();
            let rec = opt.step(&mut net, &registry).unwrap();
            let masks = rec.masks.unwrap();
            for (idx, role) in ALL_ROLES.iter().enumerate() {
                let (w, g) = &logged[idx];
                let scores = importance(w, g, Criterion::Both).unwrap();
                let m_t =
                    partition_count(w.len(), 0.55, *role, *role == ModuleRole::DomainDiscriminator);
                assert_eq!(partition(&scores, m_t).unwrap(), masks[idx]);
            }
        }
    }

    #[test]
    fn out_of_scope_roles_take_plain_sgd() {
        let config = NetConfig { input_dim: 2, hidden: 6, classes: 2, disc_hidden: 3 };
        let mut net = init_network(&config, 6).unwrap();
        let mut reference = net.clone();
        let registry = net.registry();
        let mut cfg = hand_config(0.3, MaskMode::Iterative);
        cfg.scope = vec![ModuleRole::FeatureExtractor];
        let mut opt = TransParOptimizer::new(cfg).unwrap();
        let mut rng = StdRng::seed_from_u64(14);
        for (ta, tb) in net.tensors_mut().iter_mut().zip(reference.tensors_mut()) {
            for (ga, gb) in ta.grad.iter_mut().zip(&mut tb.grad) {
                *ga = rng.gen_range(-0.5..0.5);
                *gb = *ga;
            }
        }
        opt.step(&mut net, &registry).unwrap();
        sgd_step(&mut reference, &registry, 0.1, 0.01);
        for (ta, tb) in net.tensors().iter().zip(reference.tensors()) {
            if ta.role == ModuleRole::FeatureExtractor {
                continue;
            }
            assert_eq!(ta.data, tb.data, "{} should follow plain SGD", ta.name);
        }
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        assert!(TransParOptimizer::new(UpdateConfig {
            eta: 0.0,
            ..hand_config(0.5, MaskMode::Iterative)
        })
        .is_err());
        assert!(TransParOptimizer::new(hand_config(0.0, MaskMode::Iterative)).is_err());
        assert!(TransParOptimizer::new(hand_config(1.5, MaskMode::Iterative)).is_err());
    }
}
