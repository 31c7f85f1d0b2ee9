//! Minimal reverse-mode automatic differentiation.
//!
//! A [`Tape`] records a define-by-run computation as an append-only sequence
//! of nodes; creation order is the topological order, so the backward pass is
//! a single reverse sweep. Everything is 64-bit floats and the tape is
//! rebuilt for every forward pass. Any non-finite value produced during the
//! forward or backward pass aborts with [`Error::Numeric`].
//!
//! The op set is exactly what the adaptation objectives need: affine layers,
//! ReLU, softmax cross-entropy, entropy of the predictive distribution,
//! binary cross-entropy on logits, gradient reversal, plus row concatenation
//! and scalar add/scale for combining loss terms.

use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`]. Only valid for the tape that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// out = x @ w + b (b broadcast over rows)
    Affine { x: NodeId, w: NodeId, b: NodeId },
    Relu { x: NodeId },
    /// Mean over rows of -log softmax(logits)[label]; caches row softmax.
    SoftmaxCrossEntropy { logits: NodeId, labels: Vec<usize>, probs: Vec<f64> },
    /// Mean over rows of -sum_k p_k log p_k; caches softmax and row entropies.
    EntropyLoss { logits: NodeId, probs: Vec<f64>, row_entropy: Vec<f64> },
    /// Mean of -[d log sigma(z) + (1-d) log(1-sigma(z))].
    BceWithLogit { logits: NodeId, domains: Vec<f64> },
    /// Identity forward; backward multiplies the upstream gradient by -beta.
    GradientReversal { x: NodeId, beta: f64 },
    /// Row-wise concatenation of two matrices with equal column counts.
    ConcatRows { a: NodeId, b: NodeId },
    /// Elementwise sum of two same-shape nodes.
    Add { a: NodeId, b: NodeId },
    /// out = c * x
    Scale { x: NodeId, c: f64 },
}

/// One value in the computation record: data, shape, and accumulated grad.
#[derive(Debug)]
struct TensorNode {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Vec<f64>,
    op: Op,
}

impl TensorNode {
    fn len(&self) -> usize {
        self.data.len()
    }
}

/// Append-only record of a single forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<TensorNode>,
    leaf_ids: Vec<NodeId>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

fn sgn_free_sigmoid(z: f64) -> f64 {
    // Stable logistic: never exponentiates a positive argument.
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Ids of all leaves created on this tape, in creation order.
    pub fn leaf_ids(&self) -> &[NodeId] {
        &self.leaf_ids
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn grad(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].grad
    }

    /// Value of a single-element node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].len(), 1);
        self.nodes[id.0].data[0]
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Result<NodeId> {
        debug_assert_eq!(numel(&shape), data.len());
        if !all_finite(&data) {
            return Err(Error::numeric(format!(
                "non-finite value in forward pass at node {}",
                self.nodes.len()
            )));
        }
        let grad = vec![0.0; data.len()];
        let id = NodeId(self.nodes.len());
        self.nodes.push(TensorNode { shape, data, grad, op });
        Ok(id)
    }

    /// Insert a leaf (input or parameter). Data must be finite.
    pub fn leaf(&mut self, data: Vec<f64>, shape: &[usize]) -> Result<NodeId> {
        if numel(shape) != data.len() {
            return Err(Error::config(format!(
                "leaf shape {:?} does not match data length {}",
                shape,
                data.len()
            )));
        }
        let id = self.push(shape.to_vec(), data, Op::Leaf)?;
        self.leaf_ids.push(id);
        Ok(id)
    }

    fn matrix_dims(&self, id: NodeId) -> Result<(usize, usize)> {
        match self.shape(id) {
            [n, d] => Ok((*n, *d)),
            other => Err(Error::config(format!("expected a matrix, got shape {other:?}"))),
        }
    }

    /// out[i,j] = sum_k x[i,k] w[k,j] + b[j]
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, d) = self.matrix_dims(x)?;
        let (dw, h) = self.matrix_dims(w)?;
        let bh = self.nodes[b.0].len();
        if d != dw || self.shape(b).len() != 1 || bh != h {
            return Err(Error::config(format!(
                "affine shape mismatch: x {:?}, w {:?}, b {:?}",
                self.shape(x),
                self.shape(w),
                self.shape(b)
            )));
        }
        let xd = &self.nodes[x.0].data;
        let wd = &self.nodes[w.0].data;
        let bd = &self.nodes[b.0].data;
        let mut out = vec![0.0; n * h];
        for i in 0..n {
            let row = &xd[i * d..(i + 1) * d];
            let orow = &mut out[i * h..(i + 1) * h];
            orow.copy_from_slice(bd);
            for (k, &xv) in row.iter().enumerate() {
                let wrow = &wd[k * h..(k + 1) * h];
                for (o, &wv) in orow.iter_mut().zip(wrow) {
                    *o += xv * wv;
                }
            }
        }
        self.push(vec![n, h], out, Op::Affine { x, w, b })
    }

    /// Elementwise max(0, x). Subgradient at 0 is 0.
    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| v.max(0.0)).collect();
        self.push(self.shape(x).to_vec(), data, Op::Relu { x })
    }

    /// Mean over rows of -log softmax(logits)[label], max-subtraction stabilized.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (n, k) = self.matrix_dims(logits)?;
        if labels.len() != n {
            return Err(Error::config(format!(
                "{} labels for {} logit rows",
                labels.len(),
                n
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::config(format!("label {bad} out of range for {k} classes")));
        }
        let zd = &self.nodes[logits.0].data;
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for i in 0..n {
            let row = &zd[i * k..(i + 1) * k];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (j, &z) in row.iter().enumerate() {
                let e = (z - m).exp();
                probs[i * k + j] = e;
                denom += e;
            }
            for p in &mut probs[i * k..(i + 1) * k] {
                *p /= denom;
            }
            // -log softmax[y] = log(sum exp(z - m)) - (z_y - m)
            loss += denom.ln() - (row[labels[i]] - m);
        }
        loss /= n as f64;
        self.push(
            vec![1],
            vec![loss],
            Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs },
        )
    }

    /// Mean over rows of -sum_k p_k log p_k with p = softmax(logits), 0·log 0 := 0.
    pub fn entropy_loss(&mut self, logits: NodeId) -> Result<NodeId> {
        let (n, k) = self.matrix_dims(logits)?;
        if n == 0 {
            return Err(Error::config("entropy_loss on an empty batch"));
        }
        let zd = &self.nodes[logits.0].data;
        let mut probs = vec![0.0; n * k];
        let mut row_entropy = vec![0.0; n];
        let mut loss = 0.0;
        for i in 0..n {
            let row = &zd[i * k..(i + 1) * k];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (j, &z) in row.iter().enumerate() {
                let e = (z - m).exp();
                probs[i * k + j] = e;
                denom += e;
            }
            let mut h = 0.0;
            for p in &mut probs[i * k..(i + 1) * k] {
                *p /= denom;
                if *p > 0.0 {
                    h -= *p * p.ln();
                }
            }
            row_entropy[i] = h;
            loss += h;
        }
        loss /= n as f64;
        self.push(vec![1], vec![loss], Op::EntropyLoss { logits, probs, row_entropy })
    }

    /// Mean of -[d log sigma(z) + (1-d) log(1-sigma(z))] over an n x 1 logit column.
    pub fn bce_with_logit(&mut self, logits: NodeId, domains: &[f64]) -> Result<NodeId> {
        let (n, one) = self.matrix_dims(logits)?;
        if one != 1 || domains.len() != n {
            return Err(Error::config(format!(
                "bce_with_logit expects n x 1 logits and n domain labels, got {:?} and {}",
                self.shape(logits),
                domains.len()
            )));
        }
        if let Some(&bad) = domains.iter().find(|&&d| d != 0.0 && d != 1.0) {
            return Err(Error::config(format!("domain label {bad} is not 0 or 1")));
        }
        let zd = &self.nodes[logits.0].data;
        let mut loss = 0.0;
        for (&z, &d) in zd.iter().zip(domains) {
            // max(z,0) - d z + log(1 + exp(-|z|)) — the stable log-sum-exp form.
            loss += z.max(0.0) - d * z + (-z.abs()).exp().ln_1p();
        }
        loss /= n as f64;
        self.push(vec![1], vec![loss], Op::BceWithLogit { logits, domains: domains.to_vec() })
    }

    /// Identity forward; backward scales upstream gradient by -beta.
    pub fn gradient_reversal(&mut self, x: NodeId, beta: f64) -> Result<NodeId> {
        if !(beta >= 0.0) {
            return Err(Error::config(format!("gradient reversal requires beta >= 0, got {beta}")));
        }
        let data = self.nodes[x.0].data.clone();
        self.push(self.shape(x).to_vec(), data, Op::GradientReversal { x, beta })
    }

    /// Stack the rows of `a` on top of the rows of `b`.
    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (na, da) = self.matrix_dims(a)?;
        let (nb, db) = self.matrix_dims(b)?;
        if da != db {
            return Err(Error::config(format!(
                "concat_rows column mismatch: {da} vs {db}"
            )));
        }
        let mut data = Vec::with_capacity((na + nb) * da);
        data.extend_from_slice(&self.nodes[a.0].data);
        data.extend_from_slice(&self.nodes[b.0].data);
        self.push(vec![na + nb, da], data, Op::ConcatRows { a, b })
    }

    /// Elementwise a + b for same-shape nodes.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::config(format!(
                "add shape mismatch: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        self.push(self.shape(a).to_vec(), data, Op::Add { a, b })
    }

    /// c * x.
    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        if !c.is_finite() {
            return Err(Error::config(format!("scale by non-finite constant {c}")));
        }
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| c * v).collect();
        self.push(self.shape(x).to_vec(), data, Op::Scale { x, c })
    }

    /// Reverse sweep from a scalar root. Zeroes all gradients first, then
    /// stores exact reverse-mode derivatives into every node reachable from
    /// the root; unreachable nodes keep zero gradient.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        self.backward_impl(root, false)
    }

    /// Like [`Tape::backward`] but adds this pass's derivatives onto whatever
    /// gradients are already stored instead of overwriting them.
    pub fn backward_accumulate(&mut self, root: NodeId) -> Result<()> {
        self.backward_impl(root, true)
    }

    fn backward_impl(&mut self, root: NodeId, accumulate: bool) -> Result<()> {
        if self.nodes[root.0].len() != 1 {
            return Err(Error::config(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        // Adjoints for this pass live in a scratch buffer so repeated passes
        // never contaminate each other through interior nodes.
        let mut adj: Vec<Vec<f64>> = self.nodes.iter().map(|n| vec![0.0; n.len()]).collect();
        adj[root.0][0] = 1.0;

        for idx in (0..=root.0).rev() {
            if !all_finite(&adj[idx]) {
                return Err(Error::numeric(format!("non-finite gradient at node {idx}")));
            }
            self.propagate(idx, &mut adj);
        }

        for (node, a) in self.nodes.iter_mut().zip(adj) {
            if accumulate {
                for (g, v) in node.grad.iter_mut().zip(a) {
                    *g += v;
                }
            } else {
                node.grad = a;
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, adj: &mut [Vec<f64>]) {
        // The upstream adjoint is detached so parents (strictly earlier
        // indices) can be written without aliasing.
        let g = std::mem::take(&mut adj[idx]);
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let (n, d) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                let h = self.nodes[w.0].shape[1];
                let xd = &self.nodes[x.0].data;
                let wd = &self.nodes[w.0].data;
                // dx[i,k] += sum_j g[i,j] w[k,j]
                for i in 0..n {
                    for k in 0..d {
                        let mut acc = 0.0;
                        for j in 0..h {
                            acc += g[i * h + j] * wd[k * h + j];
                        }
                        adj[x.0][i * d + k] += acc;
                    }
                }
                // dw[k,j] += sum_i x[i,k] g[i,j]
                for i in 0..n {
                    for k in 0..d {
                        let xv = xd[i * d + k];
                        for j in 0..h {
                            adj[w.0][k * h + j] += xv * g[i * h + j];
                        }
                    }
                }
                // db[j] += sum_i g[i,j]
                for i in 0..n {
                    for j in 0..h {
                        adj[b.0][j] += g[i * h + j];
                    }
                }
            }
            Op::Relu { x } => {
                let xd = &self.nodes[x.0].data;
                for (k, (&xv, &gu)) in xd.iter().zip(&g).enumerate() {
                    if xv > 0.0 {
                        adj[x.0][k] += gu;
                    }
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let n = labels.len();
                let k = probs.len() / n;
                let scale = g[0] / n as f64;
                for i in 0..n {
                    for j in 0..k {
                        let onehot = if labels[i] == j { 1.0 } else { 0.0 };
                        adj[logits.0][i * k + j] += scale * (probs[i * k + j] - onehot);
                    }
                }
            }
            Op::EntropyLoss { logits, probs, row_entropy } => {
                let n = row_entropy.len();
                let k = probs.len() / n;
                let scale = g[0] / n as f64;
                // d h_i / d z_j = -p_j (log p_j + h_i), with p_j = 0 contributing 0.
                for i in 0..n {
                    for j in 0..k {
                        let p = probs[i * k + j];
                        if p > 0.0 {
                            adj[logits.0][i * k + j] += scale * (-p * (p.ln() + row_entropy[i]));
                        }
                    }
                }
            }
            Op::BceWithLogit { logits, domains } => {
                let n = domains.len();
                let scale = g[0] / n as f64;
                let zd = &self.nodes[logits.0].data;
                for (i, (&z, &d)) in zd.iter().zip(domains).enumerate() {
                    adj[logits.0][i] += scale * (sgn_free_sigmoid(z) - d);
                }
            }
            Op::GradientReversal { x, beta } => {
                for (gx, &gu) in adj[x.0].iter_mut().zip(&g) {
                    *gx += -beta * gu;
                }
            }
            Op::ConcatRows { a, b } => {
                let na = self.nodes[a.0].len();
                for (gx, &gu) in adj[a.0].iter_mut().zip(&g[..na]) {
                    *gx += gu;
                }
                for (gx, &gu) in adj[b.0].iter_mut().zip(&g[na..]) {
                    *gx += gu;
                }
            }
            Op::Add { a, b } => {
                for (gx, &gu) in adj[a.0].iter_mut().zip(&g) {
                    *gx += gu;
                }
                for (gx, &gu) in adj[b.0].iter_mut().zip(&g) {
                    *gx += gu;
                }
            }
            Op::Scale { x, c } => {
                for (gx, &gu) in adj[x.0].iter_mut().zip(&g) {
                    *gx += c * gu;
                }
            }
        }
        adj[idx] = g;
    }
}

/// Worst relative disagreement between analytic gradients and central finite
/// differences over every parameter scalar.
///
/// `eval` receives a candidate parameter vector and must return the loss and
/// the analytic gradient at that point (typically: rebuild the tape, run the
/// forward pass, call backward, collect leaf grads). The relative error for
/// each coordinate uses denominator max(|analytic|, |numeric|, 1e-8).
pub fn finite_difference_check<F>(mut eval: F, params: &[f64], eps: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(eps > 0.0) {
        return Err(Error::config(format!("finite difference step must be positive, got {eps}")));
    }
    let (_, analytic) = eval(params)?;
    if analytic.len() != params.len() {
        return Err(Error::config(format!(
            "analytic gradient length {} does not match {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    let mut worst = 0.0f64;
    let mut probe = params.to_vec();
    for i in 0..params.len() {
        probe[i] = params[i] + eps;
        let (lp, _) = eval(&probe)?;
        probe[i] = params[i] - eps;
        let (lm, _) = eval(&probe)?;
        probe[i] = params[i];
        let numeric = (lp - lm) / (2.0 * eps);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(worst)
}
