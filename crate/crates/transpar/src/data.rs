//! Deterministic generators for labeled source / unlabeled target datasets
//! under named distribution-shift scenarios, plus splits and batch iteration.
//!
//! Target-train labels are stored (the test splits need them for evaluation)
//! but every label access goes through an accessor that counts reads, so a
//! training run can assert afterwards that it never touched them.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mix a base seed with a tag into an independent stream seed (splitmix64).
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    let mut z = base ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn flag(self) -> f64 {
        match self {
            Domain::Source => 1.0,
            Domain::Target => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Test => write!(f, "test"),
        }
    }
}

/// One observation: features, class index, domain flag.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: usize,
    pub d: Domain,
}

/// Named distribution-shift scenario with its generation parameters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ShiftScenario {
    /// Two interleaved half-circles; the target domain is the source
    /// distribution rotated by `theta_deg` about the origin.
    TwoMoonsRotation {
        theta_deg: f64,
        noise: f64,
        n_source: usize,
        n_target: usize,
    },
    /// Two isotropic Gaussian class blobs; target means are translated.
    GaussianTranslation {
        translation: [f64; 2],
        noise: f64,
        n_source: usize,
        n_target: usize,
    },
    /// Identical class-conditionals; target class proportions are resampled
    /// to `target_proportions` by quota (exact counts).
    TargetLabelShift {
        target_proportions: Vec<f64>,
        noise: f64,
        n_source: usize,
        n_target: usize,
    },
}

impl ShiftScenario {
    pub fn kind_name(&self) -> &'static str {
        match self {
            ShiftScenario::TwoMoonsRotation { .. } => "two_moons_rotation",
            ShiftScenario::GaussianTranslation { .. } => "gaussian_translation",
            ShiftScenario::TargetLabelShift { .. } => "target_label_shift",
        }
    }

    pub fn counts(&self) -> (usize, usize) {
        match *self {
            ShiftScenario::TwoMoonsRotation { n_source, n_target, .. }
            | ShiftScenario::GaussianTranslation { n_source, n_target, .. }
            | ShiftScenario::TargetLabelShift { n_source, n_target, .. } => (n_source, n_target),
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            ShiftScenario::TargetLabelShift { target_proportions, .. } => target_proportions.len(),
            _ => 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (ns, nt) = self.counts();
        if ns < 10 || nt < 10 {
            return Err(Error::config(format!(
                "scenario needs at least 10 samples per domain, got {ns}/{nt}"
            )));
        }
        match self {
            ShiftScenario::TwoMoonsRotation { theta_deg, noise, .. } => {
                if !(0.0..180.0).contains(theta_deg) {
                    return Err(Error::config(format!(
                        "rotation angle must be in [0, 180), got {theta_deg}"
                    )));
                }
                if !noise.is_finite() || *noise < 0.0 {
                    return Err(Error::config(format!("invalid noise {noise}")));
                }
            }
            ShiftScenario::GaussianTranslation { translation, noise, .. } => {
                if translation.iter().any(|t| !t.is_finite()) {
                    return Err(Error::config("non-finite translation"));
                }
                if !noise.is_finite() || *noise <= 0.0 {
                    return Err(Error::config(format!("invalid noise {noise}")));
                }
            }
            ShiftScenario::TargetLabelShift { target_proportions, noise, .. } => {
                if target_proportions.len() < 2 {
                    return Err(Error::config("need at least two class proportions"));
                }
                if target_proportions.iter().any(|p| !(0.0..=1.0).contains(p)) {
                    return Err(Error::config("class proportions must lie in [0, 1]"));
                }
                let sum: f64 = target_proportions.iter().sum();
                if (sum - 1.0).abs() > 1e-9 {
                    return Err(Error::config(format!(
                        "class proportions must sum to 1, got {sum}"
                    )));
                }
                if !noise.is_finite() || *noise <= 0.0 {
                    return Err(Error::config(format!("invalid noise {noise}")));
                }
            }
        }
        Ok(())
    }
}

/// A split of one domain's data, with a label-read guard.
#[derive(Debug)]
pub struct DomainDataset {
    samples: Vec<Sample>,
    pub domain: Domain,
    pub split: Split,
    pub scenario: String,
    pub seed: u64,
    label_reads: AtomicU64,
}

impl DomainDataset {
    fn new(samples: Vec<Sample>, domain: Domain, split: Split, scenario: &str, seed: u64) -> Self {
        debug_assert!(samples.iter().all(|s| s.d == domain));
        DomainDataset {
            samples,
            domain,
            split,
            scenario: scenario.to_string(),
            seed,
            label_reads: AtomicU64::new(0),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples.first().map_or(0, |s| s.x.len())
    }

    pub fn features(&self, i: usize) -> &[f64] {
        &self.samples[i].x
    }

    /// Row-major matrix of all features.
    pub fn feature_matrix(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len() * self.dim());
        for s in &self.samples {
            out.extend_from_slice(&s.x);
        }
        out
    }

    /// Class label of sample `i`. Every call is counted by the guard.
    pub fn label(&self, i: usize) -> usize {
        self.label_reads.fetch_add(1, Ordering::Relaxed);
        self.samples[i].y
    }

    /// All labels; counts one guarded read per sample.
    pub fn labels(&self) -> Vec<usize> {
        (0..self.len()).map(|i| self.label(i)).collect()
    }

    /// How many times labels have been read from this dataset.
    pub fn label_read_count(&self) -> u64 {
        self.label_reads.load(Ordering::Relaxed)
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    fn apply_affine(&mut self, mean: &[f64], denom: &[f64]) {
        for s in &mut self.samples {
            for (j, v) in s.x.iter_mut().enumerate() {
                *v = (*v - mean[j]) / denom[j];
            }
        }
    }
}

/// Train/test splits for both domains of one generated scenario.
#[derive(Debug)]
pub struct ScenarioData {
    pub source_train: DomainDataset,
    pub source_test: DomainDataset,
    pub target_train: DomainDataset,
    pub target_test: DomainDataset,
}

/// Class counts by largest-remainder quota so they sum to `n` exactly.
fn quota_counts(proportions: &[f64], n: usize) -> Vec<usize> {
    let mut counts: Vec<usize> = proportions.iter().map(|p| (p * n as f64).floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut remainders: Vec<(usize, f64)> = proportions
        .iter()
        .enumerate()
        .map(|(k, p)| (k, p * n as f64 - counts[k] as f64))
        .collect();
    // Largest remainder first; ties toward the lower class index.
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for (k, _) in remainders.into_iter().take(n - assigned) {
        counts[k] += 1;
    }
    counts
}

/// Where the two-moons complex center sits relative to the rotation origin.
const MOON_SHIFT: [f64; 2] = [0.0, 0.0];

fn rotate(p: [f64; 2], theta_rad: f64) -> [f64; 2] {
    let (s, c) = theta_rad.sin_cos();
    [c * p[0] - s * p[1], s * p[0] + c * p[1]]
}

/// Draw one domain's raw samples. Both domains consume an identically seeded
/// stream so that a zero-magnitude shift reproduces the source sample for
/// sample.
fn draw_domain(scenario: &ShiftScenario, seed: u64, domain: Domain) -> Vec<Sample> {
    let mut rng = StdRng::seed_from_u64(derive_seed(seed, 0xDA7A));
    let n = match domain {
        Domain::Source => scenario.counts().0,
        Domain::Target => scenario.counts().1,
    };
    match scenario {
        ShiftScenario::TwoMoonsRotation { theta_deg, noise, .. } => {
            let counts = quota_counts(&[0.5, 0.5], n);
            let theta = if domain == Domain::Target {
                theta_deg.to_radians()
            } else {
                0.0
            };
            let mut samples = Vec::with_capacity(n);
            for (y, &count) in counts.iter().enumerate() {
                for _ in 0..count {
                    let t = rng.gen_range(0.0..PI);
                    // Standard interleaved half-circles (upper arc around
                    // MOON_SHIFT, lower arc offset by (1, 0.5)), placed so the
                    // complex center sits MOON_SHIFT from the rotation origin.
                    let base = if y == 0 {
                        [t.cos() - 0.5 + MOON_SHIFT[0], t.sin() - 0.25 + MOON_SHIFT[1]]
                    } else {
                        [0.5 - t.cos() + MOON_SHIFT[0], 0.25 - t.sin() + MOON_SHIFT[1]]
                    };
                    let jitter = [gauss(&mut rng) * noise, gauss(&mut rng) * noise];
                    let p = rotate([base[0] + jitter[0], base[1] + jitter[1]], theta);
                    samples.push(Sample { x: p.to_vec(), y, d: domain });
                }
            }
            samples
        }
        ShiftScenario::GaussianTranslation { translation, noise, .. } => {
            let counts = quota_counts(&[0.5, 0.5], n);
            let shift = if domain == Domain::Target { *translation } else { [0.0, 0.0] };
            let mut samples = Vec::with_capacity(n);
            for (y, &count) in counts.iter().enumerate() {
                let center = if y == 0 { [-1.0, 0.0] } else { [1.0, 0.0] };
                for _ in 0..count {
                    let p = [
                        center[0] + shift[0] + gauss(&mut rng) * noise,
                        center[1] + shift[1] + gauss(&mut rng) * noise,
                    ];
                    samples.push(Sample { x: p.to_vec(), y, d: domain });
                }
            }
            samples
        }
        ShiftScenario::TargetLabelShift { target_proportions, noise, .. } => {
            let k = target_proportions.len();
            let proportions: Vec<f64> = match domain {
                Domain::Source => vec![1.0 / k as f64; k],
                Domain::Target => target_proportions.clone(),
            };
            let counts = quota_counts(&proportions, n);
            let mut samples = Vec::with_capacity(n);
            for (y, &count) in counts.iter().enumerate() {
                // Class centers evenly spaced on a circle of radius 1.5.
                let angle = 2.0 * PI * y as f64 / k as f64;
                let center = [1.5 * angle.cos(), 1.5 * angle.sin()];
                for _ in 0..count {
                    let p = [
                        center[0] + gauss(&mut rng) * noise,
                        center[1] + gauss(&mut rng) * noise,
                    ];
                    samples.push(Sample { x: p.to_vec(), y, d: domain });
                }
            }
            samples
        }
    }
}

/// Standard normal via Box-Muller; consumes exactly two uniforms per call.
fn gauss(rng: &mut StdRng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

/// Generate seeded train/test splits (80/20) for both domains.
pub fn generate(scenario: &ShiftScenario, seed: u64) -> Result<ScenarioData> {
    scenario.validate()?;
    let name = scenario.kind_name();
    let (src_train, src_test) = split_domain(draw_domain(scenario, seed, Domain::Source), seed);
    let (tgt_train, tgt_test) = split_domain(draw_domain(scenario, seed, Domain::Target), seed);
    Ok(ScenarioData {
        source_train: DomainDataset::new(src_train, Domain::Source, Split::Train, name, seed),
        source_test: DomainDataset::new(src_test, Domain::Source, Split::Test, name, seed),
        target_train: DomainDataset::new(tgt_train, Domain::Target, Split::Train, name, seed),
        target_test: DomainDataset::new(tgt_test, Domain::Target, Split::Test, name, seed),
    })
}

fn split_domain(mut samples: Vec<Sample>, seed: u64) -> (Vec<Sample>, Vec<Sample>) {
    let mut rng = StdRng::seed_from_u64(derive_seed(seed, 0x5917));
    samples.shuffle(&mut rng);
    let n_train = (samples.len() * 8) / 10;
    let test = samples.split_off(n_train);
    (samples, test)
}

/// Per-feature affine standardizer fitted on source-train statistics only.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub denom: Vec<f64>,
}

impl Standardizer {
    pub fn fit(source_train: &DomainDataset) -> Result<Self> {
        if source_train.is_empty() {
            return Err(Error::config("cannot standardize from an empty source-train split"));
        }
        let d = source_train.dim();
        let n = source_train.len() as f64;
        let mut mean = vec![0.0; d];
        for s in source_train.samples() {
            for (m, v) in mean.iter_mut().zip(&s.x) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for s in source_train.samples() {
            for (j, v) in s.x.iter().enumerate() {
                var[j] += (v - mean[j]).powi(2);
            }
        }
        let denom: Vec<f64> = var
            .iter()
            .map(|&v| {
                let std = (v / n).sqrt();
                // A zero-variance feature gets 1e-8 added so division is safe.
                if std > 1e-12 {
                    std
                } else {
                    std + 1e-8
                }
            })
            .collect();
        Ok(Standardizer { mean, denom })
    }

    pub fn apply(&self, ds: &mut DomainDataset) {
        ds.apply_affine(&self.mean, &self.denom);
    }
}

/// Standardize all four splits with source-train statistics.
pub fn standardize(data: &mut ScenarioData) -> Result<Standardizer> {
    let st = Standardizer::fit(&data.source_train)?;
    st.apply(&mut data.source_train);
    st.apply(&mut data.source_test);
    st.apply(&mut data.target_train);
    st.apply(&mut data.target_test);
    Ok(st)
}

/// One minibatch. `y` is populated only for source datasets.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Vec<f64>,
    pub rows: usize,
    pub dim: usize,
    pub y: Option<Vec<usize>>,
    pub d: Vec<f64>,
}

/// Seeded per-epoch shuffled batches; the final partial batch is included.
/// Source batches expose labels, target batches only features and the domain
/// flag.
pub fn batches(ds: &DomainDataset, batch_size: usize, epoch_seed: u64) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::config("batch_size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut rng = StdRng::seed_from_u64(epoch_seed);
    order.shuffle(&mut rng);
    let dim = ds.dim();
    let mut out = Vec::with_capacity(ds.len().div_ceil(batch_size));
    for chunk in order.chunks(batch_size) {
        let mut x = Vec::with_capacity(chunk.len() * dim);
        let mut y = Vec::with_capacity(chunk.len());
        for &i in chunk {
            x.extend_from_slice(ds.features(i));
            if ds.domain == Domain::Source {
                y.push(ds.label(i));
            }
        }
        out.push(Batch {
            x,
            rows: chunk.len(),
            dim,
            y: (ds.domain == Domain::Source).then_some(y),
            d: vec![ds.domain.flag(); chunk.len()],
        });
    }
    Ok(out)
}

/// Sidecar metadata written next to the CSV files.
#[derive(Debug, Serialize, Deserialize)]
pub struct DatasetMetadata {
    pub scenario: ShiftScenario,
    pub seed: u64,
    pub counts: DomainCounts,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DomainCounts {
    pub source_train: usize,
    pub source_test: usize,
    pub target_train: usize,
    pub target_test: usize,
}

/// Write `source.csv`, `target.csv`, and `metadata.json` under `dir`.
/// CSV schema: `x0,x1,y,d,split`, one file per domain, with a header row.
pub fn write_csv(data: &ScenarioData, scenario: &ShiftScenario, seed: u64, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let write_domain = |train: &DomainDataset, test: &DomainDataset, path: &Path| -> Result<()> {
        let mut out = String::from("x0,x1,y,d,split\n");
        for (ds, split) in [(train, Split::Train), (test, Split::Test)] {
            for i in 0..ds.len() {
                let x = ds.features(i);
                let y = ds.label(i);
                out.push_str(&format!(
                    "{},{},{},{},{}\n",
                    x[0],
                    x[1],
                    y,
                    ds.domain.flag() as u8,
                    split
                ));
            }
        }
        std::fs::write(path, out)?;
        Ok(())
    };
    write_domain(&data.source_train, &data.source_test, &dir.join("source.csv"))?;
    write_domain(&data.target_train, &data.target_test, &dir.join("target.csv"))?;
    let meta = DatasetMetadata {
        scenario: scenario.clone(),
        seed,
        counts: DomainCounts {
            source_train: data.source_train.len(),
            source_test: data.source_test.len(),
            target_train: data.target_train.len(),
            target_test: data.target_test.len(),
        },
    };
    std::fs::write(dir.join("metadata.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

/// Read a dataset directory written by [`write_csv`].
pub fn read_csv(dir: &Path) -> Result<ScenarioData> {
    let meta: DatasetMetadata =
        serde_json::from_str(&std::fs::read_to_string(dir.join("metadata.json"))?)?;
    let name = meta.scenario.kind_name();
    let read_domain = |path: &Path, domain: Domain| -> Result<(Vec<Sample>, Vec<Sample>)> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        if header != "x0,x1,y,d,split" {
            return Err(Error::config(format!("unexpected CSV header in {}", path.display())));
        }
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 5 {
                return Err(Error::config(format!(
                    "{}:{}: expected 5 fields",
                    path.display(),
                    lineno + 2
                )));
            }
            let parse = |s: &str| -> Result<f64> {
                s.parse::<f64>()
                    .map_err(|e| Error::config(format!("{}: bad float {s}: {e}", path.display())))
            };
            let sample = Sample {
                x: vec![parse(fields[0])?, parse(fields[1])?],
                y: fields[2]
                    .parse()
                    .map_err(|e| Error::config(format!("bad label {}: {e}", fields[2])))?,
                d: domain,
            };
            match fields[4] {
                "train" => train.push(sample),
                "test" => test.push(sample),
                other => return Err(Error::config(format!("unknown split {other}"))),
            }
        }
        Ok((train, test))
    };
    let (st, se) = read_domain(&dir.join("source.csv"), Domain::Source)?;
    let (tt, te) = read_domain(&dir.join("target.csv"), Domain::Target)?;
    Ok(ScenarioData {
        source_train: DomainDataset::new(st, Domain::Source, Split::Train, name, meta.seed),
        source_test: DomainDataset::new(se, Domain::Source, Split::Test, name, meta.seed),
        target_train: DomainDataset::new(tt, Domain::Target, Split::Train, name, meta.seed),
        target_test: DomainDataset::new(te, Domain::Target, Split::Test, name, meta.seed),
    })
}
