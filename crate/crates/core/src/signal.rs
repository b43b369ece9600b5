//! Discrete-time signal primitives shared by the simulator, the training
//! engine and the audio frontend: exponential decay filters, response
//! kernels, causal convolution and a numerically stable softmax.
//!
//! Dynamics are discretized per bin with an exponential-Euler update,
//! `y[t] = e^(-1/tau) * y[t-1] + x[t]`, which is exact for impulse-train
//! inputs and matches the kernel-based simulation path bin for bin. Inputs
//! take effect in the bin they arrive (no one-bin transport delay).

use crate::{Error, Result};

/// Default bin width of the network simulation, in seconds.
pub const DEFAULT_DT: f64 = 0.01;

/// A real-valued sequence on a fixed time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    pub values: Vec<f64>,
    /// Bin width in seconds.
    pub dt: f64,
}

impl TimeSeries {
    pub fn new(values: Vec<f64>, dt: f64) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "bin width must be positive, got {dt}"
            )));
        }
        Ok(Self { values, dt })
    }

    /// Series of zeros with the default bin width.
    pub fn zeros(len: usize) -> Self {
        Self { values: vec![0.0; len], dt: DEFAULT_DT }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Which response a kernel models.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelKind {
    /// Synaptic current response, `e^(-t/tau_s)`.
    Synaptic,
    /// Membrane response, `e^(-t/tau_v)`.
    Membrane,
    /// Post-synaptic potential: synaptic and membrane kernels convolved.
    Psp,
    /// Subtractive reset response, `-theta * e^(-t/tau_v)`; taps are <= 0.
    Refractory,
}

/// A causal response kernel sampled at the bin width; `taps[0]` is the
/// t = 0 sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    pub taps: Vec<f64>,
    pub kind: KernelKind,
}

impl Kernel {
    pub fn new(taps: Vec<f64>, kind: KernelKind) -> Result<Self> {
        let ok = match kind {
            KernelKind::Refractory => taps.iter().all(|&t| t <= 0.0),
            _ => taps.iter().all(|&t| t >= 0.0),
        };
        if !ok {
            return Err(Error::InvalidParameter(format!(
                "kernel taps have the wrong sign for {kind:?}"
            )));
        }
        Ok(Self { taps, kind })
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }
}

/// Per-bin decay factor `alpha = e^(-1/tau)` of an exponential with time
/// constant `tau` bins.
pub fn decay_factor(tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "time constant must be positive, got {tau}"
        )));
    }
    Ok((-1.0 / tau).exp())
}

/// Default truncation length for exponential kernels: 40 time constants
/// leaves a tail below 1e-6 of the total mass.
pub fn default_kernel_length(tau_s: f64, tau_v: f64) -> usize {
    (40.0 * tau_s.max(tau_v)).ceil() as usize
}

/// Causal recursive exponential filter, `y[t] = alpha*y[t-1] + x[t]` with
/// `y[-1] = 0`. Equal to causal convolution with the kernel `alpha^t`.
pub fn exp_filter(x: &TimeSeries, tau: f64) -> Result<TimeSeries> {
    let alpha = decay_factor(tau)?;
    let mut values = Vec::with_capacity(x.len());
    let mut acc = 0.0;
    for &v in &x.values {
        acc = alpha * acc + v;
        values.push(acc);
    }
    Ok(TimeSeries { values, dt: x.dt })
}

/// Pure exponential kernel `alpha^t`, truncated at `length` taps.
pub fn exp_kernel(tau: f64, length: usize, kind: KernelKind) -> Result<Kernel> {
    if length == 0 {
        return Err(Error::InvalidParameter("kernel length must be >= 1".into()));
    }
    let alpha = decay_factor(tau)?;
    let mut taps = Vec::with_capacity(length);
    let mut a = 1.0;
    for _ in 0..length {
        taps.push(a);
        a *= alpha;
    }
    Kernel::new(taps, kind)
}

/// Post-synaptic potential kernel: the discrete causal convolution of the
/// synaptic and membrane exponential kernels, truncated at `length`. For
/// `tau_s == tau_v == tau` the taps are `(t+1) * alpha^t`.
pub fn psp_kernel(tau_s: f64, tau_v: f64, length: usize) -> Result<Kernel> {
    if length == 0 {
        return Err(Error::InvalidParameter("kernel length must be >= 1".into()));
    }
    let alpha_s = decay_factor(tau_s)?;
    let alpha_v = decay_factor(tau_v)?;
    // Run the impulse through both recursions; exact for any tap count.
    let mut taps = Vec::with_capacity(length);
    let mut syn = 1.0;
    let mut acc = 0.0;
    for t in 0..length {
        if t > 0 {
            syn *= alpha_s;
        }
        acc = alpha_v * acc + syn;
        taps.push(acc);
    }
    Kernel::new(taps, KernelKind::Psp)
}

/// Subtractive-reset kernel `-theta * e^(-t/tau_v)`.
pub fn refractory_kernel(theta: f64, tau_v: f64, length: usize) -> Result<Kernel> {
    if !(theta > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "threshold must be positive, got {theta}"
        )));
    }
    let base = exp_kernel(tau_v, length, KernelKind::Membrane)?;
    Kernel::new(
        base.taps.iter().map(|&t| -theta * t).collect(),
        KernelKind::Refractory,
    )
}

/// Causal convolution `y[t] = sum_u k[u] * x[t-u]`; output length equals
/// input length.
pub fn causal_convolve(x: &TimeSeries, k: &Kernel) -> Result<TimeSeries> {
    if k.is_empty() {
        return Err(Error::InvalidInput("empty kernel".into()));
    }
    let n = x.len();
    let mut values = vec![0.0; n];
    for (t, out) in values.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (u, &tap) in k.taps.iter().enumerate().take(t + 1) {
            acc += tap * x.values[t - u];
        }
        *out = acc;
    }
    Ok(TimeSeries { values, dt: x.dt })
}

/// Numerically stable softmax; entries are in (0, 1) and sum to 1.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::InvalidInput("softmax of an empty vector".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("softmax input must be finite".into()));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// log(sum(exp(logits))), shifted for stability.
pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}
