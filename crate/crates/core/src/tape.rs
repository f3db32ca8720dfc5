//! Reverse-mode automatic differentiation on a tape.
//!
//! Operations append nodes to a [`Tape`] in execution order, which is a
//! topological order by construction. [`Tape::backward`] walks the nodes in
//! reverse exactly once, accumulating gradients into every node that
//! requires them. A tape is rebuilt (or [`Tape::reset`]) per training step.

use crate::conv::{conv2d_backward_input, conv2d_backward_kernel, conv2d_forward, ConvDims};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a tensor recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

/// Whether batch statistics are computed (training) or running statistics
/// are applied as constants (evaluation).
#[derive(Debug, Clone)]
pub enum BnMode {
    Train,
    Eval { running_mean: Vec<f64>, running_var: Vec<f64> },
}

#[derive(Debug, Clone)]
struct BnSaved {
    mean: Vec<f64>,
    var: Vec<f64>,
    inv_std: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Affine { x: TensorId, mul: f64 },
    AddBias { x: TensorId, bias: TensorId },
    Relu { x: TensorId },
    Log { x: TensorId },
    ClampMin { x: TensorId, floor: f64 },
    Matmul { a: TensorId, b: TensorId },
    Reshape { x: TensorId },
    SoftmaxTemp { x: TensorId, tau: f64 },
    GlobalAvgPool { x: TensorId },
    SumAll { x: TensorId },
    MeanAll { x: TensorId },
    Conv2d { input: TensorId, kernel: TensorId, dims: ConvDims },
    BatchNorm { x: TensorId, gamma: TensorId, beta: TensorId, saved: BnSaved, train: bool },
    CrossEntropy { logits: TensorId, labels: Vec<usize>, probs: Vec<f64> },
}

struct Node {
    tensor: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    /// Drops all nodes but keeps the allocation for reuse.
    pub fn reset(&mut self) {
        self.nodes.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, tensor: Tensor, op: Op) -> TensorId {
        self.nodes.push(Node { tensor, op });
        TensorId(self.nodes.len() - 1)
    }

    fn requires(&self, id: TensorId) -> bool {
        self.nodes[id.0].tensor.requires_grad
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].tensor.shape
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].tensor.data
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].tensor.grad.as_deref()
    }

    /// Batch statistics captured by a training-mode batchnorm node, for
    /// updating a model's running estimates: `(mean, biased_var)`.
    pub fn bn_batch_stats(&self, id: TensorId) -> Option<(&[f64], &[f64])> {
        match &self.nodes[id.0].op {
            Op::BatchNorm { saved, train: true, .. } => Some((&saved.mean, &saved.var)),
            _ => None,
        }
    }

    // ─── graph construction ───

    /// Records a tensor as a leaf. Gradients accumulate into it only when
    /// `tensor.requires_grad` is set.
    pub fn leaf(&mut self, tensor: Tensor) -> TensorId {
        self.push(tensor, Op::Leaf)
    }

    /// Convenience leaf that never receives gradients.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<TensorId> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(t))
    }

    /// Leaf that participates in backward.
    pub fn variable(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<TensorId> {
        let mut t = Tensor::new(shape, data)?;
        t.requires_grad = true;
        Ok(self.leaf(t))
    }

    fn same_shape(&self, a: TensorId, b: TensorId, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape(a, b, "add operands differ")?;
        let data: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let mut t = Tensor::new(self.shape(a).to_vec(), data)?;
        t.requires_grad = self.requires(a) || self.requires(b);
        Ok(self.push(t, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape(a, b, "mul operands differ")?;
        let data: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let mut t = Tensor::new(self.shape(a).to_vec(), data)?;
        t.requires_grad = self.requires(a) || self.requires(b);
        Ok(self.push(t, Op::Mul { a, b }))
    }

    /// `mul * x + add`, elementwise with scalars.
    pub fn affine(&mut self, x: TensorId, mul: f64, add: f64) -> Result<TensorId> {
        let data: Vec<f64> = self.data(x).iter().map(|v| mul * v + add).collect();
        let mut t = Tensor::new(self.shape(x).to_vec(), data)?;
        t.requires_grad = self.requires(x);
        Ok(self.push(t, Op::Affine { x, mul }))
    }

    /// `[N,M] + [M]` row broadcast.
    pub fn add_bias(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId> {
        let xs = self.shape(x);
        let bs = self.shape(bias);
        if xs.len() != 2 || bs.len() != 1 || bs[0] != xs[1] {
            return Err(Error::Shape(format!("add_bias wants [N,M] + [M], got {xs:?} + {bs:?}")));
        }
        let m = xs[1];
        let bdata = self.data(bias);
        let data: Vec<f64> =
            self.data(x).iter().enumerate().map(|(i, v)| v + bdata[i % m]).collect();
        let mut t = Tensor::new(xs.to_vec(), data)?;
        t.requires_grad = self.requires(x) || self.requires(bias);
        Ok(self.push(t, Op::AddBias { x, bias }))
    }

    pub fn relu(&mut self, x: TensorId) -> Result<TensorId> {
        let data: Vec<f64> = self.data(x).iter().map(|v| v.max(0.0)).collect();
        let mut t = Tensor::new(self.shape(x).to_vec(), data)?;
        t.requires_grad = self.requires(x);
        Ok(self.push(t, Op::Relu { x }))
    }

    pub fn log(&mut self, x: TensorId) -> Result<TensorId> {
        if let Some(v) = self.data(x).iter().find(|v| **v <= 0.0) {
            return Err(Error::Domain(format!("log of non-positive value {v}")));
        }
        let data: Vec<f64> = self.data(x).iter().map(|v| v.ln()).collect();
        let mut t = Tensor::new(self.shape(x).to_vec(), data)?;
        t.requires_grad = self.requires(x);
        Ok(self.push(t, Op::Log { x }))
    }

    pub fn clamp_min(&mut self, x: TensorId, floor: f64) -> Result<TensorId> {
        let data: Vec<f64> = self.data(x).iter().map(|v| v.max(floor)).collect();
        let mut t = Tensor::new(self.shape(x).to_vec(), data)?;
        t.requires_grad = self.requires(x);
        Ok(self.push(t, Op::ClampMin { x, floor }))
    }

    /// `[N,K] . [K,M]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape(format!("matmul {sa:?} . {sb:?}")));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let (da, db) = (self.data(a), self.data(b));
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            for p in 0..k {
                let av = da[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &db[p * m..][..m];
                let orow = &mut data[i * m..][..m];
                for j in 0..m {
                    orow[j] += av * brow[j];
                }
            }
        }
        let mut t = Tensor::new(vec![n, m], data)?;
        t.requires_grad = self.requires(a) || self.requires(b);
        Ok(self.push(t, Op::Matmul { a, b }))
    }

    /// Reinterprets the buffer under a new shape of equal length.
    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let mut t = Tensor::new(shape, self.data(x).to_vec())?;
        t.requires_grad = self.requires(x);
        Ok(self.push(t, Op::Reshape { x }))
    }

    /// Row-wise temperature softmax over `[N,M]` with max subtraction.
    pub fn softmax_temp(&mut self, x: TensorId, tau: f64) -> Result<TensorId> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::Param(format!("softmax temperature must be > 0, got {tau}")));
        }
        let xs = self.shape(x);
        if xs.len() != 2 {
            return Err(Error::Shape(format!("softmax wants [N,M] logits, got {xs:?}")));
        }
        let (n, m) = (xs[0], xs[1]);
        let dx = self.data(x);
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            softmax_row(&dx[i * m..][..m], tau, &mut data[i * m..][..m]);
        }
        let mut t = Tensor::new(vec![n, m], data)?;
        t.requires_grad = self.requires(x);
        Ok(self.push(t, Op::SoftmaxTemp { x, tau }))
    }

    /// `[N,C,H,W] -> [N,C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: TensorId) -> Result<TensorId> {
        let xs = self.shape(x);
        if xs.len() != 4 {
            return Err(Error::Shape(format!("global_avg_pool wants [N,C,H,W], got {xs:?}")));
        }
        let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let dx = self.data(x);
        let mut data = vec![0.0; n * c];
        for i in 0..n * c {
            let s: f64 = dx[i * hw..][..hw].iter().sum();
            data[i] = s / hw as f64;
        }
        let mut t = Tensor::new(vec![n, c], data)?;
        t.requires_grad = self.requires(x);
        Ok(self.push(t, Op::GlobalAvgPool { x }))
    }

    pub fn sum_all(&mut self, x: TensorId) -> Result<TensorId> {
        let s: f64 = self.data(x).iter().sum();
        let mut t = Tensor::scalar(s);
        t.requires_grad = self.requires(x);
        Ok(self.push(t, Op::SumAll { x }))
    }

    pub fn mean_all(&mut self, x: TensorId) -> Result<TensorId> {
        let n = self.nodes[x.0].tensor.numel() as f64;
        let s: f64 = self.data(x).iter().sum();
        let mut t = Tensor::scalar(s / n);
        t.requires_grad = self.requires(x);
        Ok(self.push(t, Op::MeanAll { x }))
    }

    pub fn conv2d(
        &mut self,
        input: TensorId,
        kernel: TensorId,
        stride: usize,
        padding: usize,
    ) -> Result<TensorId> {
        let dims = ConvDims::new(self.shape(input), self.shape(kernel), stride, padding)?;
        let mut data = vec![0.0; dims.out_len()];
        conv2d_forward(&dims, self.data(input), self.data(kernel), &mut data);
        let mut t = Tensor::new(dims.out_shape(), data)?;
        t.requires_grad = self.requires(input) || self.requires(kernel);
        Ok(self.push(t, Op::Conv2d { input, kernel, dims }))
    }

    /// Batch normalization over the channel axis of `[N,C,H,W]` or `[N,C]`.
    pub fn batch_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
        mode: BnMode,
    ) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        let c = match xs.len() {
            2 => xs[1],
            4 => xs[1],
            _ => {
                return Err(Error::Shape(format!(
                    "batch_norm wants [N,C] or [N,C,H,W], got {xs:?}"
                )))
            }
        };
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::Shape(format!(
                "batch_norm scale/shift must be [{c}], got {:?}/{:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        if !(eps > 0.0) {
            return Err(Error::Param(format!("batch_norm eps must be > 0, got {eps}")));
        }
        let (n, hw) = (xs[0], xs.iter().skip(2).product::<usize>());
        let count = n * hw;
        let dx = self.data(x);

        let (mean, var, train) = match &mode {
            BnMode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for i in 0..n {
                        let base = (i * c + ch) * hw;
                        s += dx[base..][..hw].iter().sum::<f64>();
                    }
                    let m = s / count as f64;
                    let mut v = 0.0;
                    for i in 0..n {
                        let base = (i * c + ch) * hw;
                        v += dx[base..][..hw].iter().map(|x| (x - m) * (x - m)).sum::<f64>();
                    }
                    mean[ch] = m;
                    var[ch] = v / count as f64;
                }
                (mean, var, true)
            }
            BnMode::Eval { running_mean, running_var } => {
                if running_mean.len() != c || running_var.len() != c {
                    return Err(Error::Shape(format!(
                        "batch_norm running stats must have {c} channels"
                    )));
                }
                (running_mean.clone(), running_var.clone(), false)
            }
        };

        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (dg, db) = (self.data(gamma), self.data(beta));
        let mut data = vec![0.0; dx.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * hw;
                let (m, is, g, b) = (mean[ch], inv_std[ch], dg[ch], db[ch]);
                for j in 0..hw {
                    data[base + j] = (dx[base + j] - m) * is * g + b;
                }
            }
        }
        let mut t = Tensor::new(xs, data)?;
        t.requires_grad = self.requires(x) || self.requires(gamma) || self.requires(beta);
        let saved = BnSaved { mean, var, inv_std };
        Ok(self.push(t, Op::BatchNorm { x, gamma, beta, saved, train }))
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of
    /// the logits at temperature 1, computed via log-sum-exp.
    pub fn cross_entropy(&mut self, logits: TensorId, labels: &[usize]) -> Result<TensorId> {
        let xs = self.shape(logits);
        if xs.len() != 2 {
            return Err(Error::Shape(format!("cross_entropy wants [N,M] logits, got {xs:?}")));
        }
        let (n, m) = (xs[0], xs[1]);
        if labels.len() != n {
            return Err(Error::Shape(format!(
                "cross_entropy got {} labels for {n} rows",
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= m) {
            return Err(Error::Param(format!("label {bad} out of range for {m} classes")));
        }
        let dx = self.data(logits);
        let mut probs = vec![0.0; n * m];
        let mut loss = 0.0;
        for i in 0..n {
            let row = &dx[i * m..][..m];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for &v in row {
                denom += (v - max).exp();
            }
            let log_denom = denom.ln();
            loss -= row[labels[i]] - max - log_denom;
            for j in 0..m {
                probs[i * m + j] = (row[j] - max).exp() / denom;
            }
        }
        let mut t = Tensor::scalar(loss / n as f64);
        t.requires_grad = self.requires(logits);
        Ok(self.push(t, Op::CrossEntropy { logits, labels: labels.to_vec(), probs }))
    }

    // ─── backward ───

    /// Seeds `d(loss)/d(loss) = 1` and accumulates gradients into every
    /// reachable node that requires them. Repeated calls keep accumulating.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if !self.nodes[loss.0].tensor.is_scalar() {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.requires(loss) {
            return Ok(());
        }
        let mut pending: Vec<Option<Vec<f64>>> = Vec::new();
        pending.resize_with(loss.0 + 1, || None);
        pending[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(grad) = pending[i].take() else { continue };
            self.dispatch_backward(i, &grad, &mut pending);
            let slot = &mut self.nodes[i].tensor;
            match &mut slot.grad {
                Some(existing) => {
                    for (e, g) in existing.iter_mut().zip(&grad) {
                        *e += g;
                    }
                }
                None => slot.grad = Some(grad),
            }
        }
        Ok(())
    }

    fn accumulate(
        &self,
        pending: &mut [Option<Vec<f64>>],
        id: TensorId,
        contribution: impl FnOnce(&mut [f64]),
    ) {
        if !self.requires(id) {
            return;
        }
        let slot = pending[id.0].get_or_insert_with(|| vec![0.0; self.nodes[id.0].tensor.numel()]);
        contribution(slot);
    }

    fn dispatch_backward(&self, i: usize, grad: &[f64], pending: &mut [Option<Vec<f64>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                self.accumulate(pending, *a, |dst| {
                    for (d, g) in dst.iter_mut().zip(grad) {
                        *d += g;
                    }
                });
                self.accumulate(pending, *b, |dst| {
                    for (d, g) in dst.iter_mut().zip(grad) {
                        *d += g;
                    }
                });
            }
            Op::Mul { a, b } => {
                let (da, db) = (self.data(*a), self.data(*b));
                self.accumulate(pending, *a, |dst| {
                    for j in 0..dst.len() {
                        dst[j] += grad[j] * db[j];
                    }
                });
                self.accumulate(pending, *b, |dst| {
                    for j in 0..dst.len() {
                        dst[j] += grad[j] * da[j];
                    }
                });
            }
            Op::Affine { x, mul } => {
                self.accumulate(pending, *x, |dst| {
                    for (d, g) in dst.iter_mut().zip(grad) {
                        *d += mul * g;
                    }
                });
            }
            Op::AddBias { x, bias } => {
                let m = self.nodes[bias.0].tensor.numel();
                self.accumulate(pending, *x, |dst| {
                    for (d, g) in dst.iter_mut().zip(grad) {
                        *d += g;
                    }
                });
                self.accumulate(pending, *bias, |dst| {
                    for (j, g) in grad.iter().enumerate() {
                        dst[j % m] += g;
                    }
                });
            }
            Op::Relu { x } => {
                let dx = self.data(*x);
                self.accumulate(pending, *x, |dst| {
                    for j in 0..dst.len() {
                        if dx[j] > 0.0 {
                            dst[j] += grad[j];
                        }
                    }
                });
            }
            Op::Log { x } => {
                let dx = self.data(*x);
                self.accumulate(pending, *x, |dst| {
                    for j in 0..dst.len() {
                        dst[j] += grad[j] / dx[j];
                    }
                });
            }
            Op::ClampMin { x, floor } => {
                let dx = self.data(*x);
                self.accumulate(pending, *x, |dst| {
                    for j in 0..dst.len() {
                        if dx[j] > *floor {
                            dst[j] += grad[j];
                        }
                    }
                });
            }
            Op::Matmul { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (n, k, m) = (sa[0], sa[1], sb[1]);
                let (da, db) = (self.data(*a), self.data(*b));
                // dA = g . B^T
                self.accumulate(pending, *a, |dst| {
                    for i2 in 0..n {
                        for p in 0..k {
                            let mut acc = 0.0;
                            let grow = &grad[i2 * m..][..m];
                            let brow = &db[p * m..][..m];
                            for j in 0..m {
                                acc += grow[j] * brow[j];
                            }
                            dst[i2 * k + p] += acc;
                        }
                    }
                });
                // dB = A^T . g
                self.accumulate(pending, *b, |dst| {
                    for i2 in 0..n {
                        let grow = &grad[i2 * m..][..m];
                        for p in 0..k {
                            let av = da[i2 * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            let drow = &mut dst[p * m..][..m];
                            for j in 0..m {
                                drow[j] += av * grow[j];
                            }
                        }
                    }
                });
            }
            Op::Reshape { x } => {
                self.accumulate(pending, *x, |dst| {
                    for (d, g) in dst.iter_mut().zip(grad) {
                        *d += g;
                    }
                });
            }
            Op::SoftmaxTemp { x, tau } => {
                let y = &self.nodes[i].tensor;
                let m = y.shape[1];
                let ydata = &y.data;
                let tau = *tau;
                self.accumulate(pending, *x, |dst| {
                    for r in 0..ydata.len() / m {
                        let yrow = &ydata[r * m..][..m];
                        let grow = &grad[r * m..][..m];
                        let dot: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                        let drow = &mut dst[r * m..][..m];
                        for j in 0..m {
                            drow[j] += yrow[j] * (grow[j] - dot) / tau;
                        }
                    }
                });
            }
            Op::GlobalAvgPool { x } => {
                let xs = self.shape(*x);
                let hw = xs[2] * xs[3];
                let scale = 1.0 / hw as f64;
                self.accumulate(pending, *x, |dst| {
                    for (img, g) in grad.iter().enumerate() {
                        let base = img * hw;
                        let gv = g * scale;
                        for d in &mut dst[base..base + hw] {
                            *d += gv;
                        }
                    }
                });
            }
            Op::SumAll { x } => {
                let g = grad[0];
                self.accumulate(pending, *x, |dst| {
                    for d in dst.iter_mut() {
                        *d += g;
                    }
                });
            }
            Op::MeanAll { x } => {
                let n = self.nodes[x.0].tensor.numel() as f64;
                let g = grad[0] / n;
                self.accumulate(pending, *x, |dst| {
                    for d in dst.iter_mut() {
                        *d += g;
                    }
                });
            }
            Op::Conv2d { input, kernel, dims } => {
                let kd = self.data(*kernel);
                let id = self.data(*input);
                self.accumulate(pending, *input, |dst| {
                    conv2d_backward_input(dims, kd, grad, dst);
                });
                self.accumulate(pending, *kernel, |dst| {
                    conv2d_backward_kernel(dims, id, grad, dst);
                });
            }
            Op::BatchNorm { x, gamma, beta, saved, train, .. } => {
                let xs = self.shape(*x);
                let c = xs[1];
                let (n, hw) = (xs[0], xs.iter().skip(2).product::<usize>());
                let count = (n * hw) as f64;
                let dx = self.data(*x);
                let dgam = self.data(*gamma);
                // x_hat per element is recomputed from saved stats.
                let xhat = |idx: usize, ch: usize| (dx[idx] - saved.mean[ch]) * saved.inv_std[ch];

                self.accumulate(pending, *gamma, |dst| {
                    for i2 in 0..n {
                        for ch in 0..c {
                            let base = (i2 * c + ch) * hw;
                            let mut acc = 0.0;
                            for j in 0..hw {
                                acc += grad[base + j] * xhat(base + j, ch);
                            }
                            dst[ch] += acc;
                        }
                    }
                });
                self.accumulate(pending, *beta, |dst| {
                    for i2 in 0..n {
                        for ch in 0..c {
                            let base = (i2 * c + ch) * hw;
                            dst[ch] += grad[base..][..hw].iter().sum::<f64>();
                        }
                    }
                });
                if *train {
                    // Full backward through the batch statistics.
                    self.accumulate(pending, *x, |dst| {
                        for ch in 0..c {
                            let mut sum_g = 0.0;
                            let mut sum_gx = 0.0;
                            for i2 in 0..n {
                                let base = (i2 * c + ch) * hw;
                                for j in 0..hw {
                                    sum_g += grad[base + j];
                                    sum_gx += grad[base + j] * xhat(base + j, ch);
                                }
                            }
                            let scale = dgam[ch] * saved.inv_std[ch];
                            let mg = sum_g / count;
                            let mgx = sum_gx / count;
                            for i2 in 0..n {
                                let base = (i2 * c + ch) * hw;
                                for j in 0..hw {
                                    dst[base + j] +=
                                        scale * (grad[base + j] - mg - xhat(base + j, ch) * mgx);
                                }
                            }
                        }
                    });
                } else {
                    self.accumulate(pending, *x, |dst| {
                        for i2 in 0..n {
                            for ch in 0..c {
                                let base = (i2 * c + ch) * hw;
                                let scale = dgam[ch] * saved.inv_std[ch];
                                for j in 0..hw {
                                    dst[base + j] += scale * grad[base + j];
                                }
                            }
                        }
                    });
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let m = self.shape(*logits)[1];
                let n = labels.len() as f64;
                let g = grad[0] / n;
                self.accumulate(pending, *logits, |dst| {
                    for (r, &y) in labels.iter().enumerate() {
                        for j in 0..m {
                            let indicator = if j == y { 1.0 } else { 0.0 };
                            dst[r * m + j] += g * (probs[r * m + j] - indicator);
                        }
                    }
                });
            }
        }
    }
}

/// Temperature softmax of one row with max subtraction, shared by the tape
/// op and tape-free helpers so both produce identical bits.
pub fn softmax_row(row: &[f64], tau: f64, out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut denom = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        let e = ((v - max) / tau).exp();
        *o = e;
        denom += e;
    }
    for o in out.iter_mut() {
        *o /= denom;
    }
}
