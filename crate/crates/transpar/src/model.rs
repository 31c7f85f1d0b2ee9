//! The three-module adaptation network: feature extractor F, source
//! hypothesis C, and domain discriminator D behind gradient reversal, with a
//! registry that tags every trainable scalar by module role.

use std::path::Path;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::diffcore::{NodeId, Tape};
use crate::error::{Error, Result};

/// Which module a trainable scalar belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModuleRole {
    FeatureExtractor,
    SourceHypothesis,
    DomainDiscriminator,
}

pub const ALL_ROLES: [ModuleRole; 3] = [
    ModuleRole::FeatureExtractor,
    ModuleRole::SourceHypothesis,
    ModuleRole::DomainDiscriminator,
];

impl ModuleRole {
    pub fn index(self) -> usize {
        match self {
            ModuleRole::FeatureExtractor => 0,
            ModuleRole::SourceHypothesis => 1,
            ModuleRole::DomainDiscriminator => 2,
        }
    }

    pub fn short_name(self) -> &'static str {
        match self {
            ModuleRole::FeatureExtractor => "FE",
            ModuleRole::SourceHypothesis => "SH",
            ModuleRole::DomainDiscriminator => "DD",
        }
    }
}

/// Network shape. Defaults match the desk-scale two-class setup.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NetConfig {
    #[serde(default = "default_input_dim")]
    pub input_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default = "default_disc_hidden")]
    pub disc_hidden: usize,
}

fn default_input_dim() -> usize {
    2
}
fn default_hidden() -> usize {
    64
}
fn default_classes() -> usize {
    2
}
fn default_disc_hidden() -> usize {
    16
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            input_dim: default_input_dim(),
            hidden: default_hidden(),
            classes: default_classes(),
            disc_hidden: default_disc_hidden(),
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden == 0 || self.classes < 2 || self.disc_hidden == 0 {
            return Err(Error::config(format!("invalid network dimensions: {self:?}")));
        }
        Ok(())
    }
}

/// One named parameter tensor with its current weights and last gradient.
#[derive(Debug, Clone)]
pub struct ParamTensor {
    pub name: &'static str,
    pub role: ModuleRole,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Vec<f64>,
}

impl ParamTensor {
    fn len(&self) -> usize {
        self.data.len()
    }
}

/// Feature extractor (input → h → h, ReLU), linear source hypothesis
/// (h → K), and domain discriminator (h → 16 → 1) behind gradient reversal.
#[derive(Debug, Clone)]
pub struct Network {
    pub config: NetConfig,
    pub init_seed: u64,
    tensors: Vec<ParamTensor>,
}

/// Glorot-uniform bound for a weight matrix of the given fan-in/out.
fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Build the network's parameter tensors in a fixed, role-grouped order.
/// Weights are Uniform(-a, a) with the Glorot bound; biases start at zero.
pub fn init_network(config: &NetConfig, seed: u64) -> Result<Network> {
    config.validate()?;
    let mut rng = StdRng::seed_from_u64(seed);
    let mut tensors = Vec::new();
    let layers: [(&'static str, &'static str, ModuleRole, usize, usize); 5] = [
        ("f1.w", "f1.b", ModuleRole::FeatureExtractor, config.input_dim, config.hidden),
        ("f2.w", "f2.b", ModuleRole::FeatureExtractor, config.hidden, config.hidden),
        ("c.w", "c.b", ModuleRole::SourceHypothesis, config.hidden, config.classes),
        ("d1.w", "d1.b", ModuleRole::DomainDiscriminator, config.hidden, config.disc_hidden),
        ("d2.w", "d2.b", ModuleRole::DomainDiscriminator, config.disc_hidden, 1),
    ];
    for (w_name, b_name, role, fan_in, fan_out) in layers {
        let a = glorot_bound(fan_in, fan_out);
        let w: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.gen_range(-a..a)).collect();
        tensors.push(ParamTensor {
            name: w_name,
            role,
            shape: vec![fan_in, fan_out],
            data: w,
            grad: vec![0.0; fan_in * fan_out],
        });
        tensors.push(ParamTensor {
            name: b_name,
            role,
            shape: vec![fan_out],
            data: vec![0.0; fan_out],
            grad: vec![0.0; fan_out],
        });
    }
    Ok(Network { config: config.clone(), init_seed: seed, tensors })
}

/// Stable enumeration of every trainable scalar: (param_id, role, tensor
/// name, flat index). Iteration order is tensor creation order, row-major
/// within a tensor, identical across runs with the same seed.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterRegistry {
    pub entries: Vec<RegistryEntry>,
    per_role: [Vec<(usize, usize)>; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistryEntry {
    pub param_id: usize,
    pub role: ModuleRole,
    pub tensor_name: &'static str,
    pub tensor_index: usize,
    pub flat_index: usize,
}

impl ParameterRegistry {
    /// Total scalar count for one role.
    pub fn count(&self, role: ModuleRole) -> usize {
        self.per_role[role.index()].len()
    }

    pub fn total(&self) -> usize {
        self.entries.len()
    }

    /// (tensor_index, flat_index) addresses for one role, in stable order.
    pub fn role_slots(&self, role: ModuleRole) -> &[(usize, usize)] {
        &self.per_role[role.index()]
    }
}

/// Ids of the network's parameter leaves on a freshly built tape, in tensor
/// order, plus the loss nodes of one adaptation forward pass.
#[derive(Debug)]
pub struct UdaOutputs {
    pub source_class_logits: NodeId,
    pub target_class_logits: Option<NodeId>,
    pub domain_logits: Option<NodeId>,
    pub loss_source: f64,
    pub loss_entropy: Option<f64>,
    pub loss_domain: Option<f64>,
    pub total: NodeId,
    pub total_value: f64,
    param_nodes: Vec<NodeId>,
}

/// Term selection for [`Network::forward_uda`].
#[derive(Debug, Clone, Copy)]
pub struct ForwardOpts {
    /// Gradient-reversal coefficient.
    pub beta: f64,
    /// Entropy weight; the entropy term enters the total as alpha * L_ent.
    pub alpha: f64,
    pub include_entropy: bool,
    pub include_domain: bool,
}

impl Network {
    pub fn tensors(&self) -> &[ParamTensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [ParamTensor] {
        &mut self.tensors
    }

    pub fn registry(&self) -> ParameterRegistry {
        let mut entries = Vec::new();
        let mut per_role: [Vec<(usize, usize)>; 3] = Default::default();
        for (ti, t) in self.tensors.iter().enumerate() {
            for fi in 0..t.len() {
                per_role[t.role.index()].push((ti, fi));
                entries.push(RegistryEntry {
                    param_id: entries.len(),
                    role: t.role,
                    tensor_name: t.name,
                    tensor_index: ti,
                    flat_index: fi,
                });
            }
        }
        ParameterRegistry { entries, per_role }
    }

    /// Copy one role's weights and last gradients into flat vectors, in
    /// registry order.
    pub fn gather_role(&self, registry: &ParameterRegistry, role: ModuleRole) -> (Vec<f64>, Vec<f64>) {
        let slots = registry.role_slots(role);
        let mut w = Vec::with_capacity(slots.len());
        let mut g = Vec::with_capacity(slots.len());
        for &(ti, fi) in slots {
            w.push(self.tensors[ti].data[fi]);
            g.push(self.tensors[ti].grad[fi]);
        }
        (w, g)
    }

    /// Write one role's weights back from a flat vector in registry order.
    pub fn scatter_role(&mut self, registry: &ParameterRegistry, role: ModuleRole, w: &[f64]) {
        let slots = registry.role_slots(role);
        debug_assert_eq!(slots.len(), w.len());
        for (&(ti, fi), &v) in slots.iter().zip(w) {
            self.tensors[ti].data[fi] = v;
        }
    }

    fn tensor(&self, name: &str) -> &ParamTensor {
        self.tensors.iter().find(|t| t.name == name).expect("tensor name")
    }

    fn leaf_all(&self, tape: &mut Tape) -> Result<Vec<NodeId>> {
        self.tensors
            .iter()
            .map(|t| {
                let shape: Vec<usize> = t.shape.clone();
                tape.leaf(t.data.clone(), &shape)
            })
            .collect()
    }

    /// F(x) on the tape: two ReLU affine layers.
    fn features_on_tape(&self, tape: &mut Tape, x: NodeId, p: &[NodeId]) -> Result<NodeId> {
        let h1 = tape.affine(x, p[0], p[1])?;
        let h1 = tape.relu(h1)?;
        let h2 = tape.affine(h1, p[2], p[3])?;
        tape.relu(h2)
    }

    /// Full adaptation forward pass over one source batch and one target
    /// batch; builds the tape and returns the recorded outputs.
    ///
    /// total = L_s + alpha * L_ent + L_d over the enabled terms, where L_s is
    /// softmax cross-entropy on C(F(source)), L_ent the prediction entropy on
    /// C(F(target)), and L_d binary cross-entropy on D(reversed F(x)) over
    /// both domains.
    pub fn forward_uda(
        &self,
        tape: &mut Tape,
        source: &Batch,
        target: &Batch,
        opts: &ForwardOpts,
    ) -> Result<UdaOutputs> {
        if source.rows == 0 || target.rows == 0 {
            return Err(Error::config("forward_uda needs nonempty batches"));
        }
        let labels = source
            .y
            .as_ref()
            .ok_or_else(|| Error::config("source batch has no labels"))?;
        let p = self.leaf_all(tape)?;
        let xs = tape.leaf(source.x.clone(), &[source.rows, source.dim])?;
        let xt = tape.leaf(target.x.clone(), &[target.rows, target.dim])?;

        let fs = self.features_on_tape(tape, xs, &p)?;
        let ft = self.features_on_tape(tape, xt, &p)?;

        let source_logits = tape.affine(fs, p[4], p[5])?;
        let loss_source = tape.softmax_cross_entropy(source_logits, labels)?;
        let mut total = loss_source;

        let mut target_logits = None;
        let mut loss_entropy = None;
        if opts.include_entropy {
            let tl = tape.affine(ft, p[4], p[5])?;
            let le = tape.entropy_loss(tl)?;
            let scaled = tape.scale(le, opts.alpha)?;
            total = tape.add(total, scaled)?;
            target_logits = Some(tl);
            loss_entropy = Some(tape.scalar(le));
        }

        let mut domain_logits = None;
        let mut loss_domain = None;
        if opts.include_domain {
            let all = tape.concat_rows(fs, ft)?;
            let rev = tape.gradient_reversal(all, opts.beta)?;
            let dh = tape.affine(rev, p[6], p[7])?;
            let dh = tape.relu(dh)?;
            let dl = tape.affine(dh, p[8], p[9])?;
            let mut d_flags = source.d.clone();
            d_flags.extend_from_slice(&target.d);
            let ld = tape.bce_with_logit(dl, &d_flags)?;
            total = tape.add(total, ld)?;
            domain_logits = Some(dl);
            loss_domain = Some(tape.scalar(ld));
        }

        Ok(UdaOutputs {
            source_class_logits: source_logits,
            target_class_logits: target_logits,
            domain_logits,
            loss_source: tape.scalar(loss_source),
            loss_entropy,
            loss_domain,
            total,
            total_value: tape.scalar(total),
            param_nodes: p,
        })
    }

    /// Run backward from the total loss and copy the parameter gradients out
    /// of the tape into the network's grad buffers.
    pub fn backward_uda(&mut self, tape: &mut Tape, outputs: &UdaOutputs) -> Result<()> {
        tape.backward(outputs.total)?;
        for (t, &node) in self.tensors.iter_mut().zip(&outputs.param_nodes) {
            t.grad.copy_from_slice(tape.grad(node));
        }
        Ok(())
    }

    /// Plain (tape-free) feature pass F(x) for an n x input_dim matrix.
    pub fn features(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let h1 = affine_relu(x, rows, self.config.input_dim, self.tensor("f1.w"), self.tensor("f1.b"));
        affine_relu(&h1, rows, self.config.hidden, self.tensor("f2.w"), self.tensor("f2.b"))
    }

    /// Plain class logits C(F(x)).
    pub fn class_logits(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let f = self.features(x, rows);
        affine_plain(&f, rows, self.config.hidden, self.tensor("c.w"), self.tensor("c.b"))
    }

    /// Argmax class predictions; ties break toward the lower class index.
    pub fn predict(&self, x: &[f64], rows: usize) -> Vec<usize> {
        let logits = self.class_logits(x, rows);
        let k = self.config.classes;
        (0..rows)
            .map(|i| {
                let row = &logits[i * k..(i + 1) * k];
                let mut best = 0;
                for (j, &v) in row.iter().enumerate().skip(1) {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }

    /// Checkpoint as versioned JSON grouped by module role.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let modules: Vec<CheckpointModule> = ALL_ROLES
            .iter()
            .map(|&role| CheckpointModule {
                role,
                tensors: self
                    .tensors
                    .iter()
                    .filter(|t| t.role == role)
                    .map(|t| CheckpointTensor {
                        name: t.name.to_string(),
                        shape: t.shape.clone(),
                        data: t.data.clone(),
                    })
                    .collect(),
            })
            .collect();
        let ckpt = Checkpoint {
            format_version: 1,
            config: self.config.clone(),
            init_seed: self.init_seed,
            modules,
        };
        std::fs::write(path, serde_json::to_string(&ckpt)?)?;
        Ok(())
    }

    /// Load a checkpoint, validating shapes against its stored config.
    pub fn load_checkpoint(path: &Path) -> Result<Network> {
        let ckpt: Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if ckpt.format_version != 1 {
            return Err(Error::config(format!(
                "unsupported checkpoint format_version {}",
                ckpt.format_version
            )));
        }
        let mut net = init_network(&ckpt.config, ckpt.init_seed)?;
        for module in &ckpt.modules {
            for ct in &module.tensors {
                let t = net
                    .tensors
                    .iter_mut()
                    .find(|t| t.name == ct.name)
                    .ok_or_else(|| Error::config(format!("unknown tensor {}", ct.name)))?;
                if t.shape != ct.shape || t.role != module.role {
                    return Err(Error::config(format!(
                        "tensor {} has shape {:?}/role {:?}, expected {:?}/{:?}",
                        ct.name, ct.shape, module.role, t.shape, t.role
                    )));
                }
                if ct.data.len() != t.data.len() {
                    return Err(Error::config(format!(
                        "tensor {} has {} values, expected {}",
                        ct.name,
                        ct.data.len(),
                        t.data.len()
                    )));
                }
                t.data.copy_from_slice(&ct.data);
            }
        }
        Ok(net)
    }
}

fn affine_relu(x: &[f64], rows: usize, dim: usize, w: &ParamTensor, b: &ParamTensor) -> Vec<f64> {
    let out = affine_plain(x, rows, dim, w, b);
    out.into_iter().map(|v| v.max(0.0)).collect()
}

fn affine_plain(x: &[f64], rows: usize, dim: usize, w: &ParamTensor, b: &ParamTensor) -> Vec<f64> {
    let h = w.shape[1];
    let mut out = vec![0.0; rows * h];
    for i in 0..rows {
        let orow = &mut out[i * h..(i + 1) * h];
        orow.copy_from_slice(&b.data);
        for k in 0..dim {
            let xv = x[i * dim + k];
            for (o, &wv) in orow.iter_mut().zip(&w.data[k * h..(k + 1) * h]) {
                *o += xv * wv;
            }
        }
    }
    out
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format_version: u32,
    config: NetConfig,
    init_seed: u64,
    modules: Vec<CheckpointModule>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointModule {
    role: ModuleRole,
    tensors: Vec<CheckpointTensor>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}
