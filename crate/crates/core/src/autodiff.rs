//! Reverse-mode differentiation through the time-unrolled network.
//!
//! The tape records the primitive operations the network needs (affine
//! combines, exponential-decay steps, the spiking membrane, and loss
//! reductions) together with the activations the backward pass needs.
//! Forward values are computed eagerly as nodes are appended, so the node
//! order is already topological.
//!
//! Spike emission is not differentiable; its local derivative is replaced
//! by a periodic exponential surrogate that peaks whenever the pre-spike
//! membrane sits at a positive multiple of the threshold. The subtractive
//! reset path is gradient-detached. With spiking disabled
//! ([`SpikeMode::Linear`]) the membrane passes through unchanged and the
//! whole network is exactly differentiable, which is what the finite-
//! difference harness checks against.

use crate::tensor::{GradMap, ParamId, ParamSet};
use crate::{Error, Result};

/// Surrogate-gradient shape parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurrogateParams {
    /// Spiking threshold.
    pub theta: f64,
    /// Learning-window width as a fraction of theta.
    pub window: f64,
}

impl SurrogateParams {
    pub fn new(theta: f64, window: f64) -> Result<Self> {
        if !(window > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "learning window must be positive, got {window}"
            )));
        }
        Ok(Self { theta, window })
    }
}

/// Periodic exponential surrogate derivative of the spike count with
/// respect to the pre-spike membrane: `exp(-d(v) / (theta * window))`,
/// where `d` is the distance to the nearest positive multiple of theta
/// for `v > theta/2` and `theta - v` below (a continuous extension that
/// keeps decaying as the membrane falls away from threshold).
pub fn surrogate_gradient(v_pre: f64, sp: &SurrogateParams) -> f64 {
    let theta = sp.theta;
    let d = if v_pre <= 0.5 * theta {
        theta - v_pre
    } else {
        let n = (v_pre / theta).round().max(1.0);
        (v_pre - n * theta).abs()
    };
    (-d / (theta * sp.window)).exp()
}

/// Dense f64 sequence value: `rows` channels over `cols` bins, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Seq {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Seq {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn scalar(v: f64) -> Self {
        Self { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeRef(usize);

/// Spiking-membrane behavior of a [`Tape::spike_membrane`] node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SpikeMode {
    /// Threshold crossing emits `floor(v/theta)` spikes with subtractive
    /// reset; backward uses the surrogate gradient.
    Threshold(SurrogateParams),
    /// Spiking disabled: the node outputs the membrane itself and is
    /// exactly differentiable.
    Linear,
}

enum Node {
    Input,
    Affine { w: ParamId, b: Option<ParamId>, x: NodeRef },
    ExpFilter { x: NodeRef, alpha: f64 },
    Add { a: NodeRef, b: NodeRef },
    Spike { x: NodeRef, alpha_v: f64, mode: SpikeMode, v_pre: Vec<f64> },
    PeakSelect { x: NodeRef, argmax: Vec<usize> },
    SoftmaxCrossEntropy { x: NodeRef, label: usize, probs: Vec<f64> },
    SumSquares { x: NodeRef },
    Sum { x: NodeRef },
    ActivityPenalty { spikes: Vec<NodeRef>, bins: usize, neurons: usize, excess: f64 },
    WeightedSum { a: NodeRef, b: NodeRef, wa: f64, wb: f64 },
}

/// Operation tape over one sample.
pub struct Tape<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
    vals: Vec<Seq>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Self { params, nodes: Vec::new(), vals: Vec::new() }
    }

    pub fn value(&self, node: NodeRef) -> &Seq {
        &self.vals[node.0]
    }

    /// Value of a scalar (1x1) node.
    pub fn scalar(&self, node: NodeRef) -> f64 {
        let s = &self.vals[node.0];
        debug_assert_eq!(s.data.len(), 1);
        s.data[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, node: Node, val: Seq) -> NodeRef {
        self.nodes.push(node);
        self.vals.push(val);
        NodeRef(self.nodes.len() - 1)
    }

    /// Leaf holding externally supplied data (e.g. an input raster).
    pub fn input(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<NodeRef> {
        if data.len() != rows * cols {
            return Err(Error::InvalidInput(format!(
                "input data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(self.push(Node::Input, Seq { rows, cols, data }))
    }

    /// Per-bin affine combine `out[.,t] = W x[.,t] + b`. Accumulation
    /// starts at the bias and walks input rows in order, matching the
    /// streaming simulator bit for bit.
    pub fn affine(&mut self, w: ParamId, b: Option<ParamId>, x: NodeRef) -> Result<NodeRef> {
        let wm = self.params.mat(w);
        let xs = &self.vals[x.0];
        if wm.cols() != xs.rows {
            return Err(Error::InvalidInput(format!(
                "affine: weight expects {} rows, input has {}",
                wm.cols(),
                xs.rows
            )));
        }
        if let Some(bid) = b {
            let bm = self.params.mat(bid);
            if bm.rows() != wm.rows() || bm.cols() != 1 {
                return Err(Error::InvalidInput(format!(
                    "affine: bias shape {}x{} does not match {} outputs",
                    bm.rows(),
                    bm.cols(),
                    wm.rows()
                )));
            }
        }
        let rows = wm.rows();
        let cols = xs.cols;
        let mut out = Seq::zeros(rows, cols);
        for r in 0..rows {
            let bias = b.map_or(0.0, |bid| self.params.mat(bid).data()[r] as f64);
            let orow = out.row_mut(r);
            for v in orow.iter_mut() {
                *v = bias;
            }
            for (i, &wv) in wm.row(r).iter().enumerate() {
                let wv = wv as f64;
                let xrow = xs.row(i);
                for (o, xv) in orow.iter_mut().zip(xrow) {
                    *o += wv * xv;
                }
            }
        }
        Ok(self.push(Node::Affine { w, b, x }, out))
    }

    /// Exponential-decay step along time: `y[t] = alpha*y[t-1] + x[t]`.
    pub fn exp_filter(&mut self, x: NodeRef, alpha: f64) -> NodeRef {
        let xs = &self.vals[x.0];
        let mut out = Seq::zeros(xs.rows, xs.cols);
        for r in 0..xs.rows {
            let mut acc = 0.0;
            let xrow = xs.row(r);
            let orow = out.row_mut(r);
            for (o, &v) in orow.iter_mut().zip(xrow) {
                acc = alpha * acc + v;
                *o = acc;
            }
        }
        self.push(Node::ExpFilter { x, alpha }, out)
    }

    /// Elementwise sum of two equal-shape sequences.
    pub fn add(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        let (sa, sb) = (&self.vals[a.0], &self.vals[b.0]);
        if sa.rows != sb.rows || sa.cols != sb.cols {
            return Err(Error::InvalidInput(format!(
                "add: shape {}x{} vs {}x{}",
                sa.rows, sa.cols, sb.rows, sb.cols
            )));
        }
        let mut out = Seq::zeros(sa.rows, sa.cols);
        for ((o, x), y) in out.data.iter_mut().zip(&sa.data).zip(&sb.data) {
            *o = x + y;
        }
        Ok(self.push(Node::Add { a, b }, out))
    }

    /// Spiking membrane over the synaptic current `x`: leaky integration
    /// with `alpha_v`, then `floor(v/theta)` spikes with subtractive reset
    /// (or membrane passthrough in [`SpikeMode::Linear`]).
    pub fn spike_membrane(
        &mut self,
        x: NodeRef,
        alpha_v: f64,
        mode: SpikeMode,
    ) -> Result<NodeRef> {
        let xs = &self.vals[x.0];
        let (rows, cols) = (xs.rows, xs.cols);
        let mut out = Seq::zeros(rows, cols);
        let mut v_pre = vec![0.0; rows * cols];
        for r in 0..rows {
            let xrow = xs.row(r);
            let orow = out.row_mut(r);
            let mut v_post = 0.0;
            for t in 0..cols {
                let v = alpha_v * v_post + xrow[t];
                if !v.is_finite() {
                    return Err(Error::Diverged(format!(
                        "membrane of row {r} at bin {t} is {v}"
                    )));
                }
                v_pre[r * cols + t] = v;
                match mode {
                    SpikeMode::Threshold(sp) => {
                        let s = crate::neuron::spikes_for(v, sp.theta);
                        orow[t] = s as f64;
                        v_post = crate::neuron::subtract_reset(v, s, sp.theta);
                    }
                    SpikeMode::Linear => {
                        orow[t] = v;
                        v_post = v;
                    }
                }
            }
        }
        Ok(self.push(Node::Spike { x, alpha_v, mode, v_pre }, out))
    }

    /// Per-row max and first argmax over time; output is `rows x 1`.
    pub fn peak_select(&mut self, x: NodeRef) -> Result<NodeRef> {
        let xs = &self.vals[x.0];
        if xs.cols == 0 {
            return Err(Error::InvalidInput("peak_select over an empty trace".into()));
        }
        let mut out = Seq::zeros(xs.rows, 1);
        let mut argmax = vec![0usize; xs.rows];
        for r in 0..xs.rows {
            let row = xs.row(r);
            let (mut bi, mut bv) = (0usize, row[0]);
            for (t, &v) in row.iter().enumerate().skip(1) {
                if v > bv {
                    bv = v;
                    bi = t;
                }
            }
            out.data[r] = bv;
            argmax[r] = bi;
        }
        Ok(self.push(Node::PeakSelect { x, argmax }, out))
    }

    /// Cross-entropy of softmax(logits) against `label`; `x` is `rows x 1`.
    pub fn softmax_cross_entropy(&mut self, x: NodeRef, label: usize) -> Result<NodeRef> {
        let xs = &self.vals[x.0];
        if xs.cols != 1 {
            return Err(Error::InvalidInput("logits must be a column".into()));
        }
        if label >= xs.rows {
            return Err(Error::InvalidInput(format!(
                "label {label} out of range for {} classes",
                xs.rows
            )));
        }
        let lse = crate::signal::log_sum_exp(&xs.data);
        let loss = lse - xs.data[label];
        let probs: Vec<f64> = xs.data.iter().map(|&v| (v - lse).exp()).collect();
        Ok(self.push(Node::SoftmaxCrossEntropy { x, label, probs }, Seq::scalar(loss)))
    }

    /// Scalar `sum(x^2)`.
    pub fn sum_squares(&mut self, x: NodeRef) -> NodeRef {
        let v: f64 = self.vals[x.0].data.iter().map(|&a| a * a).sum();
        self.push(Node::SumSquares { x }, Seq::scalar(v))
    }

    /// Scalar `sum(x)`.
    pub fn sum(&mut self, x: NodeRef) -> NodeRef {
        let v: f64 = self.vals[x.0].data.iter().sum();
        self.push(Node::Sum { x }, Seq::scalar(v))
    }

    /// Squared normalized excess-spike count over the given spike nodes:
    /// `(N_excess / (bins * neurons))^2`, where a bin with count N >= 2
    /// contributes N. Backward treats the step factor as constant.
    pub fn activity_penalty(&mut self, spikes: &[NodeRef], neurons: usize) -> Result<NodeRef> {
        if spikes.is_empty() || neurons == 0 {
            return Err(Error::InvalidInput(
                "activity penalty needs spike nodes and a population size".into(),
            ));
        }
        let bins = self.vals[spikes[0].0].cols;
        let mut excess = 0.0;
        for &s in spikes {
            let sv = &self.vals[s.0];
            if sv.cols != bins {
                return Err(Error::InvalidInput(
                    "activity penalty: spike nodes disagree on bin count".into(),
                ));
            }
            for &c in &sv.data {
                if c > 1.0 {
                    excess += c;
                }
            }
        }
        let ratio = excess / (bins as f64 * neurons as f64);
        Ok(self.push(
            Node::ActivityPenalty { spikes: spikes.to_vec(), bins, neurons, excess },
            Seq::scalar(ratio * ratio),
        ))
    }

    /// Scalar combine `wa*a + wb*b`.
    pub fn weighted_sum(&mut self, a: NodeRef, b: NodeRef, wa: f64, wb: f64) -> Result<NodeRef> {
        if self.vals[a.0].data.len() != 1 || self.vals[b.0].data.len() != 1 {
            return Err(Error::InvalidInput("weighted_sum expects scalars".into()));
        }
        let v = wa * self.scalar(a) + wb * self.scalar(b);
        Ok(self.push(Node::WeightedSum { a, b, wa, wb }, Seq::scalar(v)))
    }

    /// Reverse pass from a scalar loss node; returns a gradient for every
    /// parameter. Spike nodes use the surrogate as the local derivative of
    /// the count with respect to the pre-spike membrane; the reset
    /// subtraction contributes none.
    pub fn backward(&self, loss: NodeRef) -> Result<GradMap> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(Error::InvalidInput("backward over an unrecorded tape".into()));
        }
        let ls = &self.vals[loss.0];
        if ls.data.len() != 1 {
            return Err(Error::InvalidInput("loss node must be scalar".into()));
        }
        if !ls.data[0].is_finite() {
            return Err(Error::Diverged(format!("loss is {}", ls.data[0])));
        }

        let mut grads = self.params.zero_grads();
        let mut node_grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        node_grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let g = match node_grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[idx] {
                Node::Input => {}
                Node::Affine { w, b, x } => {
                    let xs = &self.vals[x.0];
                    let wm = self.params.mat(*w);
                    let (rows, cols) = (wm.rows(), xs.cols);
                    // dW[r,i] = sum_t g[r,t] * x[i,t]; db[r] = sum_t g[r,t]
                    {
                        let gw = grads.grad_mut(*w);
                        for r in 0..rows {
                            let grow = &g[r * cols..(r + 1) * cols];
                            for i in 0..xs.rows {
                                let xrow = xs.row(i);
                                let mut acc = 0.0;
                                for (gv, xv) in grow.iter().zip(xrow) {
                                    acc += gv * xv;
                                }
                                gw[r * xs.rows + i] += acc;
                            }
                        }
                    }
                    if let Some(bid) = b {
                        let gb = grads.grad_mut(*bid);
                        for r in 0..rows {
                            gb[r] += g[r * cols..(r + 1) * cols].iter().sum::<f64>();
                        }
                    }
                    // dx[i,t] += W^T g
                    let gx = node_grads[x.0]
                        .get_or_insert_with(|| vec![0.0; xs.data.len()]);
                    for r in 0..rows {
                        let grow = &g[r * cols..(r + 1) * cols];
                        for (i, &wv) in wm.row(r).iter().enumerate() {
                            let wv = wv as f64;
                            let gxrow = &mut gx[i * cols..(i + 1) * cols];
                            for (gxv, gv) in gxrow.iter_mut().zip(grow) {
                                *gxv += wv * gv;
                            }
                        }
                    }
                }
                Node::ExpFilter { x, alpha } => {
                    let xs = &self.vals[x.0];
                    let (rows, cols) = (xs.rows, xs.cols);
                    let gx = node_grads[x.0]
                        .get_or_insert_with(|| vec![0.0; xs.data.len()]);
                    for r in 0..rows {
                        let mut acc = 0.0;
                        for t in (0..cols).rev() {
                            acc = g[r * cols + t] + alpha * acc;
                            gx[r * cols + t] += acc;
                        }
                    }
                }
                Node::Add { a, b } => {
                    for &src in &[a, b] {
                        let n = self.vals[src.0].data.len();
                        let gs = node_grads[src.0].get_or_insert_with(|| vec![0.0; n]);
                        for (o, gv) in gs.iter_mut().zip(&g) {
                            *o += gv;
                        }
                    }
                }
                Node::Spike { x, alpha_v, mode, v_pre } => {
                    let xs = &self.vals[x.0];
                    let (rows, cols) = (xs.rows, xs.cols);
                    let gx = node_grads[x.0]
                        .get_or_insert_with(|| vec![0.0; xs.data.len()]);
                    for r in 0..rows {
                        let mut carry = 0.0;
                        for t in (0..cols).rev() {
                            let local = match mode {
                                SpikeMode::Threshold(sp) => {
                                    surrogate_gradient(v_pre[r * cols + t], sp)
                                }
                                SpikeMode::Linear => 1.0,
                            };
                            let dv = g[r * cols + t] * local + carry;
                            gx[r * cols + t] += dv;
                            carry = alpha_v * dv;
                        }
                    }
                }
                Node::PeakSelect { x, argmax } => {
                    let xs = &self.vals[x.0];
                    let cols = xs.cols;
                    let gx = node_grads[x.0]
                        .get_or_insert_with(|| vec![0.0; xs.data.len()]);
                    for (r, &t) in argmax.iter().enumerate() {
                        gx[r * cols + t] += g[r];
                    }
                }
                Node::SoftmaxCrossEntropy { x, label, probs } => {
                    let n = self.vals[x.0].data.len();
                    let gx = node_grads[x.0].get_or_insert_with(|| vec![0.0; n]);
                    for (r, gv) in gx.iter_mut().enumerate() {
                        let delta = if r == *label { 1.0 } else { 0.0 };
                        *gv += g[0] * (probs[r] - delta);
                    }
                }
                Node::SumSquares { x } => {
                    let xs = &self.vals[x.0];
                    let gx = node_grads[x.0]
                        .get_or_insert_with(|| vec![0.0; xs.data.len()]);
                    for (gv, &xv) in gx.iter_mut().zip(&xs.data) {
                        *gv += 2.0 * xv * g[0];
                    }
                }
                Node::Sum { x } => {
                    let n = self.vals[x.0].data.len();
                    let gx = node_grads[x.0].get_or_insert_with(|| vec![0.0; n]);
                    for gv in gx.iter_mut() {
                        *gv += g[0];
                    }
                }
                Node::ActivityPenalty { spikes, bins, neurons, excess } => {
                    let denom = *bins as f64 * *neurons as f64;
                    let coef = g[0] * 2.0 * (excess / denom) / denom;
                    for &s in spikes {
                        let sv = &self.vals[s.0];
                        let gs = node_grads[s.0]
                            .get_or_insert_with(|| vec![0.0; sv.data.len()]);
                        for (gv, &c) in gs.iter_mut().zip(&sv.data) {
                            if c > 1.0 {
                                *gv += coef;
                            }
                        }
                    }
                }
                Node::WeightedSum { a, b, wa, wb } => {
                    for (&src, &wt) in [a, b].iter().zip([wa, wb].iter()) {
                        let gs = node_grads[src.0].get_or_insert_with(|| vec![0.0; 1]);
                        gs[0] += wt * g[0];
                    }
                }
            }
        }
        Ok(grads)
    }
}

/// Result of a finite-difference comparison.
#[derive(Debug, Clone, Copy)]
pub struct FiniteDiffReport {
    /// Worst relative disagreement seen.
    pub max_rel_err: f64,
    /// Number of parameters checked.
    pub checked: usize,
}

/// Compare analytic gradients against central finite differences on a
/// random subset of parameters: a `fraction` of all scalars, but at least
/// `min_count`. Perturbations are applied in the f32 parameter storage and
/// the difference quotient uses the actually realized step, so the check
/// is exact (up to f64 rounding) whenever the loss is polynomial in each
/// parameter.
pub fn finite_diff_compare(
    params: &mut ParamSet,
    analytic: &GradMap,
    eps: f64,
    fraction: f64,
    min_count: usize,
    seed: u64,
    eval_loss: &mut dyn FnMut(&ParamSet) -> Result<f64>,
) -> Result<FiniteDiffReport> {
    if !(1e-6..=1e-2).contains(&eps) {
        return Err(Error::InvalidParameter(format!(
            "finite-difference step must be in [1e-6, 1e-2], got {eps}"
        )));
    }
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let total = params.total_scalars();
    let count = ((total as f64 * fraction).ceil() as usize)
        .max(min_count)
        .min(total);
    let mut flat: Vec<(usize, usize)> = (0..params.len())
        .flat_map(|p| (0..params.mat(ParamId(p)).len()).map(move |i| (p, i)))
        .collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    flat.shuffle(&mut rng);
    flat.truncate(count);

    let mut max_rel: f64 = 0.0;
    for (p, i) in flat {
        let id = ParamId(p);
        let orig = params.mat(id).data()[i];
        let plus = (orig as f64 + eps) as f32;
        let minus = (orig as f64 - eps) as f32;

        params.mat_mut(id).data_mut()[i] = plus;
        let lp = eval_loss(params)?;
        params.mat_mut(id).data_mut()[i] = minus;
        let lm = eval_loss(params)?;
        params.mat_mut(id).data_mut()[i] = orig;

        let h = plus as f64 - minus as f64;
        let fd = (lp - lm) / h;
        let an = analytic.grad(id)[i];
        let scale = an.abs().max(fd.abs());
        let rel = if scale > 1e-10 { (an - fd).abs() / scale } else { 0.0 };
        max_rel = max_rel.max(rel);
    }
    Ok(FiniteDiffReport { max_rel_err: max_rel, checked: count })
}
