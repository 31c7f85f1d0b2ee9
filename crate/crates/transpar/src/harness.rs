//! End-to-end orchestration: the two-stage training pipeline, baselines, the
//! ablation suite over multiple seeds, and report emission.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    batches, derive_seed, generate, standardize, DomainDataset, ScenarioData, ShiftScenario,
};
use crate::diffcore::Tape;
use crate::discrepancy::{
    estimate_transfer_ratio, frozen_features, FeatureSource, ProbeConfig, TransferRatioEstimate,
};
use crate::error::{Error, Result};
use crate::model::{init_network, ForwardOpts, ModuleRole, NetConfig, Network};
use crate::optim::{
    sgd_step, Criterion, MaskMode, StepRecord, TransParOptimizer, UpdateConfig,
};

/// Training method for one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Source cross-entropy only; no adversarial or entropy terms.
    SourceOnly,
    /// Adversarial training with the signed-decay SGD baseline updates.
    Dann,
    /// Adversarial training with partitioned TransPar updates.
    #[default]
    TransparDann,
}

impl Method {
    pub fn id(self) -> &'static str {
        match self {
            Method::SourceOnly => "source_only",
            Method::Dann => "dann",
            Method::TransparDann => "transpar_dann",
        }
    }
}

/// Module scope labels as they appear in config files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScopeModule {
    #[serde(rename = "FE")]
    Fe,
    #[serde(rename = "SH")]
    Sh,
    #[serde(rename = "DD")]
    Dd,
}

impl ScopeModule {
    pub fn role(self) -> ModuleRole {
        match self {
            ScopeModule::Fe => ModuleRole::FeatureExtractor,
            ScopeModule::Sh => ModuleRole::SourceHypothesis,
            ScopeModule::Dd => ModuleRole::DomainDiscriminator,
        }
    }
}

fn default_eta() -> f64 {
    0.1
}
fn default_lambda() -> f64 {
    0.002
}
fn default_alpha() -> f64 {
    0.1
}
fn default_beta() -> f64 {
    1.0
}
fn default_batch_size() -> usize {
    64
}
fn default_epochs() -> usize {
    300
}
fn default_e_prime() -> usize {
    10
}
fn default_m_floor() -> f64 {
    0.1
}
fn default_scope() -> Vec<ScopeModule> {
    vec![ScopeModule::Fe, ScopeModule::Sh, ScopeModule::Dd]
}
fn default_true() -> bool {
    true
}

/// Full experiment configuration; the JSON config file mirrors these fields.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub scenario: ShiftScenario,
    pub seed: u64,
    #[serde(default)]
    pub net: NetConfig,
    #[serde(default)]
    pub method: Method,
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_e_prime")]
    pub e_prime: usize,
    #[serde(rename = "M", default = "default_m_floor")]
    pub m_floor: f64,
    #[serde(default)]
    pub criterion: Criterion,
    #[serde(default)]
    pub mode: MaskMode,
    #[serde(default = "default_scope")]
    pub scope: Vec<ScopeModule>,
    #[serde(default = "default_true")]
    pub entropy_enabled: bool,
    #[serde(default)]
    pub feature_source: FeatureSource,
    /// Stage-1 probe seed; defaults to the run seed.
    #[serde(default)]
    pub probe_seed: Option<u64>,
    #[serde(default = "default_true")]
    pub dd_adversarial: bool,
    /// Diagnostic: treat every parameter as transferable.
    #[serde(default)]
    pub force_full_mask: bool,
}

impl TrainConfig {
    pub fn new(scenario: ShiftScenario, seed: u64) -> Self {
        TrainConfig {
            scenario,
            seed,
            net: NetConfig::default(),
            method: Method::default(),
            eta: default_eta(),
            lambda: default_lambda(),
            alpha: default_alpha(),
            beta: default_beta(),
            batch_size: default_batch_size(),
            epochs: default_epochs(),
            e_prime: default_e_prime(),
            m_floor: default_m_floor(),
            criterion: Criterion::default(),
            mode: MaskMode::default(),
            scope: default_scope(),
            entropy_enabled: true,
            feature_source: FeatureSource::default(),
            probe_seed: None,
            dd_adversarial: true,
            force_full_mask: false,
        }
    }

    /// Default desk-scale scenario: two moons rotated 30 degrees.
    pub fn default_moons(seed: u64) -> Self {
        TrainConfig::new(
            ShiftScenario::TwoMoonsRotation {
                theta_deg: 30.0,
                noise: 0.1,
                n_source: 1000,
                n_target: 1000,
            },
            seed,
        )
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.net.validate()?;
        if !(self.eta > 0.0) {
            return Err(Error::config("eta must be positive"));
        }
        if self.lambda < 0.0 {
            return Err(Error::config("lambda must be nonnegative"));
        }
        if self.beta < 0.0 {
            return Err(Error::config("beta must be nonnegative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(0.0 < self.m_floor && self.m_floor < 1.0) {
            return Err(Error::config("M must lie in (0, 1)"));
        }
        if self.method == Method::TransparDann && self.scope.is_empty() {
            return Err(Error::config("transpar_dann needs a nonempty scope"));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn probe_seed(&self) -> u64 {
        self.probe_seed.unwrap_or(self.seed)
    }

    fn scope_roles(&self) -> Vec<ModuleRole> {
        self.scope.iter().map(|s| s.role()).collect()
    }

    fn forward_opts(&self) -> ForwardOpts {
        ForwardOpts {
            beta: self.beta,
            alpha: self.alpha,
            include_entropy: self.method == Method::TransparDann && self.entropy_enabled,
            include_domain: self.method != Method::SourceOnly,
        }
    }
}

/// One per-epoch record of the fixed metrics schema.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub epoch: usize,
    pub loss_src: f64,
    pub loss_ent: Option<f64>,
    pub loss_dom: Option<f64>,
    pub acc_src: f64,
    pub acc_tgt: f64,
    pub tau: f64,
    pub m_f: usize,
    pub m_f_t: usize,
    pub m_c: usize,
    pub m_c_t: usize,
    pub m_d: usize,
    pub m_d_t: usize,
    pub decay_norm_f: f64,
    pub decay_norm_c: f64,
    pub decay_norm_d: f64,
}

pub const METRICS_HEADER: &str = "run_id,epoch,loss_src,loss_ent,loss_dom,acc_src,acc_tgt,tau,\
m_f,m_f_t,m_c,m_c_t,m_d,m_d_t,decay_norm_f,decay_norm_c,decay_norm_d";

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsRow {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.run_id,
            self.epoch,
            self.loss_src,
            fmt_opt(self.loss_ent),
            fmt_opt(self.loss_dom),
            self.acc_src,
            self.acc_tgt,
            self.tau,
            self.m_f,
            self.m_f_t,
            self.m_c,
            self.m_c_t,
            self.m_d,
            self.m_d_t,
            self.decay_norm_f,
            self.decay_norm_c,
            self.decay_norm_d
        )
    }
}

/// Everything one training run produces.
#[derive(Debug)]
pub struct RunOutput {
    pub net: Network,
    pub rows: Vec<MetricsRow>,
    pub final_source_acc: f64,
    pub final_target_acc: f64,
    pub estimate: Option<TransferRatioEstimate>,
    /// Per-iteration mask records when capture was requested.
    pub mask_log: Vec<StepRecord>,
}

/// Stage 1: estimate the transfer ratio from a domain probe on frozen
/// features (or raw inputs) of the train splits.
pub fn run_stage1(config: &TrainConfig) -> Result<TransferRatioEstimate> {
    config.validate()?;
    let mut data = generate(&config.scenario, config.seed)?;
    standardize(&mut data)?;
    stage1_on(config, &data)
}

fn probe_config(config: &TrainConfig) -> ProbeConfig {
    ProbeConfig { epochs: config.e_prime, ..ProbeConfig::default() }
}

fn stage1_on(config: &TrainConfig, data: &ScenarioData) -> Result<TransferRatioEstimate> {
    let (fs, ft, dim) = match config.feature_source {
        FeatureSource::FrozenInit => {
            let net = init_network(&config.net, config.seed)?;
            (
                frozen_features(&net, &data.source_train),
                frozen_features(&net, &data.target_train),
                config.net.hidden,
            )
        }
        FeatureSource::RawInput => (
            data.source_train.feature_matrix(),
            data.target_train.feature_matrix(),
            config.net.input_dim,
        ),
    };
    estimate_transfer_ratio(
        &fs,
        &ft,
        dim,
        &probe_config(config),
        config.m_floor,
        config.probe_seed(),
        config.feature_source,
    )
}

/// Fraction of correct predictions on a labeled dataset.
pub fn evaluate(net: &Network, ds: &DomainDataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::config("cannot evaluate on an empty dataset"));
    }
    let preds = net.predict(&ds.feature_matrix(), ds.len());
    let labels = ds.labels();
    let correct = preds.iter().zip(&labels).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / ds.len() as f64)
}

/// Stage 2: train per the configured method and emit one metrics row per
/// epoch. `ratio` is required for `transpar_dann`.
pub fn run_stage2(
    config: &TrainConfig,
    ratio: Option<&TransferRatioEstimate>,
    run_id: &str,
    capture_masks: bool,
) -> Result<RunOutput> {
    config.validate()?;
    let mut data = generate(&config.scenario, config.seed)?;
    standardize(&mut data)?;

    let mut net = init_network(&config.net, config.seed)?;
    let registry = net.registry();
    let opts = config.forward_opts();

    let (mut optimizer, tau) = match config.method {
        Method::TransparDann => {
            let est = ratio.ok_or_else(|| {
                Error::config("method transpar_dann requires a transfer-ratio estimate")
            })?;
            let update = UpdateConfig {
                eta: config.eta,
                lambda: config.lambda,
                criterion: config.criterion,
                mode: config.mode,
                tau: est.tau,
                scope: config.scope_roles(),
                dd_adversarial: config.dd_adversarial,
                force_full_mask: config.force_full_mask,
            };
            let mut opt = TransParOptimizer::new(update)?;
            opt.capture_masks(capture_masks);
            (Some(opt), est.tau)
        }
        _ => (None, 1.0),
    };

    let mut rows = Vec::with_capacity(config.epochs);
    let mut mask_log = Vec::new();

    for epoch in 1..=config.epochs {
        let src_batches = batches(
            &data.source_train,
            config.batch_size,
            derive_seed(config.seed, 2 * epoch as u64),
        )?;
        let tgt_batches = batches(
            &data.target_train,
            config.batch_size,
            derive_seed(config.seed, 2 * epoch as u64 + 1),
        )?;
        // Lockstep pairing: the longer stream sets the epoch length and the
        // shorter one restarts within the epoch.
        let iters = src_batches.len().max(tgt_batches.len());

        let mut sum_src = 0.0;
        let mut sum_ent = 0.0;
        let mut sum_dom = 0.0;
        let mut last_record: Option<StepRecord> = None;
        for t in 0..iters {
            let sb = &src_batches[t % src_batches.len()];
            let tb = &tgt_batches[t % tgt_batches.len()];
            let mut tape = Tape::new();
            let out = net.forward_uda(&mut tape, sb, tb, &opts)?;
            net.backward_uda(&mut tape, &out)?;
            match optimizer.as_mut() {
                Some(opt) => {
                    let rec = opt.step(&mut net, &registry)?;
                    if capture_masks {
                        mask_log.push(rec.clone());
                    }
                    last_record = Some(rec);
                }
                None => sgd_step(&mut net, &registry, config.eta, config.lambda),
            }
            sum_src += out.loss_source;
            sum_ent += out.loss_entropy.unwrap_or(0.0);
            sum_dom += out.loss_domain.unwrap_or(0.0);
        }

        let acc_src = evaluate(&net, &data.source_test)?;
        let acc_tgt = evaluate(&net, &data.target_test)?;
        let n = iters as f64;
        let (mask_counts, decay_norms) = summarize_record(&registry, last_record.as_ref());
        rows.push(MetricsRow {
            run_id: run_id.to_string(),
            epoch,
            loss_src: sum_src / n,
            loss_ent: opts.include_entropy.then_some(sum_ent / n),
            loss_dom: opts.include_domain.then_some(sum_dom / n),
            acc_src,
            acc_tgt,
            tau,
            m_f: mask_counts[0].0,
            m_f_t: mask_counts[0].1,
            m_c: mask_counts[1].0,
            m_c_t: mask_counts[1].1,
            m_d: mask_counts[2].0,
            m_d_t: mask_counts[2].1,
            decay_norm_f: decay_norms[0],
            decay_norm_c: decay_norms[1],
            decay_norm_d: decay_norms[2],
        });
    }

    if let Some(opt) = optimizer.as_mut() {
        opt.finalize(&mut net, &registry)?;
    }

    // Target-train labels must never have been read during training.
    assert_eq!(
        data.target_train.label_read_count(),
        0,
        "target-train labels were read during training"
    );

    let final_source_acc = evaluate(&net, &data.source_test)?;
    let final_target_acc = evaluate(&net, &data.target_test)?;
    Ok(RunOutput {
        net,
        rows,
        final_source_acc,
        final_target_acc,
        estimate: ratio.cloned(),
        mask_log,
    })
}

type MaskCounts = [(usize, usize); 3];

fn summarize_record(
    registry: &crate::model::ParameterRegistry,
    record: Option<&StepRecord>,
) -> (MaskCounts, [f64; 3]) {
    use crate::model::ALL_ROLES;
    match record {
        Some(rec) => {
            let counts: Vec<(usize, usize)> = rec.stats.iter().map(|s| (s.m, s.m_t)).collect();
            let norms: Vec<f64> = rec.stats.iter().map(|s| s.untransferable_mean_abs).collect();
            (counts.try_into().unwrap(), norms.try_into().unwrap())
        }
        None => {
            let counts: Vec<(usize, usize)> = ALL_ROLES
                .iter()
                .map(|&r| {
                    let m = registry.count(r);
                    (m, m)
                })
                .collect();
            (counts.try_into().unwrap(), [0.0; 3])
        }
    }
}

/// Train one configured run end to end: stage 1 when the method needs it,
/// stage 2, and the post-training discrepancy measurement.
pub fn run_one(
    config: &TrainConfig,
    ratio: Option<&TransferRatioEstimate>,
    run_id: &str,
    capture_masks: bool,
) -> Result<(RunOutput, f64)> {
    let estimate = match (config.method, ratio) {
        (Method::TransparDann, None) => Some(run_stage1(config)?),
        (Method::TransparDann, Some(r)) => Some(r.clone()),
        _ => None,
    };
    let out = run_stage2(config, estimate.as_ref(), run_id, capture_masks)?;
    let adapted = adapted_proxy_distance(config, &out.net)?;
    Ok((out, adapted))
}

/// Proxy A-distance measured with a freshly trained probe on the *adapted*
/// extractor's features over the train splits.
pub fn adapted_proxy_distance(config: &TrainConfig, net: &Network) -> Result<f64> {
    let mut data = generate(&config.scenario, config.seed)?;
    standardize(&mut data)?;
    let fs = frozen_features(net, &data.source_train);
    let ft = frozen_features(net, &data.target_train);
    let est = estimate_transfer_ratio(
        &fs,
        &ft,
        config.net.hidden,
        &probe_config(config),
        config.m_floor,
        derive_seed(config.probe_seed(), 0xADA7),
        FeatureSource::FrozenInit,
    )?;
    Ok(est.d_a)
}

/// One suite cell: a named config variation of the base.
fn suite_cells(base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    let mut cells = Vec::new();
    let mut push = |id: &str, f: &dyn Fn(&mut TrainConfig)| {
        let mut cfg = base.clone();
        cfg.method = Method::TransparDann;
        cfg.criterion = Criterion::Both;
        cfg.mode = MaskMode::Iterative;
        cfg.scope = default_scope();
        cfg.entropy_enabled = true;
        f(&mut cfg);
        cells.push((id.to_string(), cfg));
    };

    push("source_only", &|c| c.method = Method::SourceOnly);
    push("dann", &|c| c.method = Method::Dann);

    // Scope grid (iterative, both-criterion).
    push("transpar_fe", &|c| c.scope = vec![ScopeModule::Fe]);
    push("transpar_sh", &|c| c.scope = vec![ScopeModule::Sh]);
    push("transpar_dd", &|c| c.scope = vec![ScopeModule::Dd]);
    push("transpar_fe_sh", &|c| c.scope = vec![ScopeModule::Fe, ScopeModule::Sh]);
    push("transpar_fe_dd", &|c| c.scope = vec![ScopeModule::Fe, ScopeModule::Dd]);
    push("transpar_fe_sh_noent", &|c| {
        c.scope = vec![ScopeModule::Fe, ScopeModule::Sh];
        c.entropy_enabled = false;
    });
    push("transpar_fe_sh_dd", &|c| c.scope = default_scope());

    // Update-rule grid (full scope).
    push("transpar_iterative", &|_| {});
    push("transpar_one_shot_start", &|c| c.mode = MaskMode::OneShotStart);
    push("transpar_one_shot_last", &|c| c.mode = MaskMode::OneShotLast);
    push("transpar_weight_only", &|c| c.criterion = Criterion::WeightOnly);
    push("transpar_grad_only", &|c| c.criterion = Criterion::GradOnly);
    push("transpar_both", &|_| {});

    cells
}

/// Canonical cell ids the suite always emits, in order.
pub fn suite_cell_ids() -> Vec<String> {
    suite_cells(&TrainConfig::default_moons(0))
        .into_iter()
        .map(|(id, _)| id)
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub final_source_acc: Option<f64>,
    pub final_target_acc: Option<f64>,
    pub tau: Option<f64>,
    pub adapted_d_a: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellReport {
    pub id: String,
    pub runs: Vec<RunSummary>,
    pub median_target_acc: Option<f64>,
    pub median_adapted_d_a: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteReport {
    pub format_version: u32,
    pub seeds: Vec<u64>,
    /// Stage-1 proxy A-distance on frozen-init features, one per seed.
    pub frozen_d_a: Vec<f64>,
    pub median_frozen_d_a: f64,
    pub cells: Vec<CellReport>,
}

/// Median of a nonempty slice (mean of the two middles for even lengths).
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

/// Run the full cell grid over the given seeds. Stage-1 estimates are
/// computed once per seed and reused by every TransPar cell. Individual run
/// failures are recorded and the suite continues.
pub fn run_suite(base: &TrainConfig, seeds: &[u64]) -> Result<(SuiteReport, Vec<MetricsRow>)> {
    if seeds.len() < 2 {
        return Err(Error::config("suite needs at least 2 seeds"));
    }
    base.validate()?;

    // Stage 1 per seed, shared across cells (the estimate is reusable).
    let estimates: Vec<Result<TransferRatioEstimate>> = seeds
        .par_iter()
        .map(|&seed| {
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.probe_seed = Some(seed);
            run_stage1(&cfg)
        })
        .collect();

    let cells = suite_cells(base);
    let jobs: Vec<(usize, usize)> = (0..cells.len())
        .flat_map(|c| (0..seeds.len()).map(move |s| (c, s)))
        .collect();

    struct JobResult {
        cell: usize,
        seed_idx: usize,
        summary: RunSummary,
        rows: Vec<MetricsRow>,
    }

    let results: Vec<JobResult> = jobs
        .par_iter()
        .map(|&(c, s)| {
            let (id, cell_cfg) = &cells[c];
            let seed = seeds[s];
            let mut cfg = cell_cfg.clone();
            cfg.seed = seed;
            cfg.probe_seed = Some(seed);
            let run_id = format!("{id}__s{seed}");
            let ratio = match (&cfg.method, &estimates[s]) {
                (Method::TransparDann, Ok(est)) => Some(est.clone()),
                (Method::TransparDann, Err(e)) => {
                    return JobResult {
                        cell: c,
                        seed_idx: s,
                        summary: RunSummary {
                            seed,
                            ok: false,
                            error: Some(format!("stage 1 failed: {e}")),
                            final_source_acc: None,
                            final_target_acc: None,
                            tau: None,
                            adapted_d_a: None,
                        },
                        rows: Vec::new(),
                    }
                }
                _ => None,
            };
            match run_one(&cfg, ratio.as_ref(), &run_id, false) {
                Ok((out, adapted)) => JobResult {
                    cell: c,
                    seed_idx: s,
                    summary: RunSummary {
                        seed,
                        ok: true,
                        error: None,
                        final_source_acc: Some(out.final_source_acc),
                        final_target_acc: Some(out.final_target_acc),
                        tau: out.estimate.as_ref().map(|e| e.tau),
                        adapted_d_a: Some(adapted),
                    },
                    rows: out.rows,
                },
                Err(e) => JobResult {
                    cell: c,
                    seed_idx: s,
                    summary: RunSummary {
                        seed,
                        ok: false,
                        error: Some(e.to_string()),
                        final_source_acc: None,
                        final_target_acc: None,
                        tau: None,
                        adapted_d_a: None,
                    },
                    rows: Vec::new(),
                },
            }
        })
        .collect();

    // Reassemble in deterministic (cell, seed) order.
    let mut summaries: Vec<Option<RunSummary>> = (0..cells.len() * seeds.len()).map(|_| None).collect();
    let mut all_rows: Vec<Vec<MetricsRow>> = vec![Vec::new(); cells.len() * seeds.len()];
    for r in results {
        all_rows[r.cell * seeds.len() + r.seed_idx] = r.rows;
        summaries[r.cell * seeds.len() + r.seed_idx] = Some(r.summary);
    }
    let mut final_cells = Vec::with_capacity(cells.len());
    for (c, (id, _)) in cells.iter().enumerate() {
        let runs: Vec<RunSummary> = (0..seeds.len())
            .map(|s| summaries[c * seeds.len() + s].take().expect("every job reported"))
            .collect();
        let accs: Vec<f64> = runs.iter().filter_map(|r| r.final_target_acc).collect();
        let das: Vec<f64> = runs.iter().filter_map(|r| r.adapted_d_a).collect();
        final_cells.push(CellReport {
            id: id.clone(),
            median_target_acc: median(&accs),
            median_adapted_d_a: median(&das),
            runs,
        });
    }

    let frozen: Vec<f64> = estimates
        .iter()
        .map(|e| e.as_ref().map(|est| est.d_a).unwrap_or(f64::NAN))
        .collect();
    let frozen_ok: Vec<f64> = frozen.iter().copied().filter(|v| v.is_finite()).collect();
    let report = SuiteReport {
        format_version: 1,
        seeds: seeds.to_vec(),
        median_frozen_d_a: median(&frozen_ok).unwrap_or(f64::NAN),
        frozen_d_a: frozen,
        cells: final_cells,
    };
    let rows = all_rows.into_iter().flatten().collect();
    Ok((report, rows))
}

/// Write `metrics.csv`, `suite.json`, and `summary.md` under `out_dir`.
pub fn emit_reports(report: &SuiteReport, rows: &[MetricsRow], out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::config(format!("cannot create {}: {e}", out_dir.display())))?;

    let mut csv = String::with_capacity(rows.len() * 96 + 128);
    csv.push_str(METRICS_HEADER);
    csv.push('\n');
    for row in rows {
        csv.push_str(&row.to_csv_line());
        csv.push('\n');
    }
    std::fs::write(out_dir.join("metrics.csv"), csv)?;

    std::fs::write(out_dir.join("suite.json"), serde_json::to_string_pretty(report)?)?;

    let mut md = String::new();
    md.push_str("# Suite summary\n\n");
    md.push_str(&format!(
        "Seeds: {:?}. Median frozen-init proxy A-distance: {:.4}.\n\n",
        report.seeds, report.median_frozen_d_a
    ));
    md.push_str("| cell | median target acc | median adapted d_A | failures |\n");
    md.push_str("|---|---|---|---|\n");
    for cell in &report.cells {
        let failures = cell.runs.iter().filter(|r| !r.ok).count();
        md.push_str(&format!(
            "| {} | {} | {} | {} |\n",
            cell.id,
            cell.median_target_acc.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
            cell.median_adapted_d_a.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
            failures
        ));
    }
    std::fs::write(out_dir.join("summary.md"), md)?;
    Ok(())
}
