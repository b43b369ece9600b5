//! Leaky integrate-and-fire neurons with multi-spike subtractive reset.
//!
//! Two equivalent simulation paths are provided: a stateful path that
//! carries synaptic current and membrane potential per neuron, and a
//! kernel-based path that reconstructs the membrane as the sum of a
//! reset-free response and a subtractive-reset accumulator. Both use the
//! same per-bin update order (synaptic decay + inject, membrane decay +
//! integrate, spike + subtract), so they emit identical spike rasters.
//!
//! When the membrane reaches `N * theta` the neuron emits `N` spikes in
//! that bin and `N * theta` is subtracted, which keeps spike totals stable
//! under coarse simulation steps.

use crate::signal::decay_factor;
use crate::tensor::Mat;
use crate::{Error, Result};

/// Time constants (in bins) and threshold of one spiking layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeuronParams {
    /// Synaptic time constant, bins.
    pub tau_s: f64,
    /// Membrane time constant, bins.
    pub tau_v: f64,
    /// Spiking threshold; `f64::INFINITY` disables spiking.
    pub theta: f64,
}

impl NeuronParams {
    pub fn new(tau_s: f64, tau_v: f64, theta: f64) -> Result<Self> {
        if !(tau_s > 0.0) || !(tau_v > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "time constants must be positive, got tau_s={tau_s} tau_v={tau_v}"
            )));
        }
        if !(theta > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "threshold must be positive, got {theta}"
            )));
        }
        Ok(Self { tau_s, tau_v, theta })
    }

    pub fn alpha_s(&self) -> f64 {
        decay_factor(self.tau_s).expect("validated")
    }

    pub fn alpha_v(&self) -> f64 {
        decay_factor(self.tau_v).expect("validated")
    }
}

/// Per-neuron dynamic state of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerState {
    /// Synaptic currents.
    pub i_s: Vec<f64>,
    /// Membrane potentials (post-reset).
    pub v: Vec<f64>,
}

impl LayerState {
    pub fn new(width: usize) -> Self {
        Self { i_s: vec![0.0; width], v: vec![0.0; width] }
    }

    pub fn width(&self) -> usize {
        self.v.len()
    }
}

/// Spike counts per channel and time bin; multiple spikes per bin are
/// allowed.
#[derive(Debug, Clone, PartialEq)]
pub struct SpikeRaster {
    channels: usize,
    bins: usize,
    counts: Vec<u32>,
    /// Bin width in seconds.
    pub dt: f64,
}

impl SpikeRaster {
    pub fn zeros(channels: usize, bins: usize, dt: f64) -> Self {
        Self { channels, bins, counts: vec![0; channels * bins], dt }
    }

    pub fn from_counts(channels: usize, bins: usize, counts: Vec<u32>, dt: f64) -> Result<Self> {
        if counts.len() != channels * bins {
            return Err(Error::InvalidInput(format!(
                "raster data length {} does not match {channels}x{bins}",
                counts.len()
            )));
        }
        Ok(Self { channels, bins, counts, dt })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn count(&self, channel: usize, bin: usize) -> u32 {
        self.counts[channel * self.bins + bin]
    }

    pub fn set(&mut self, channel: usize, bin: usize, count: u32) {
        self.counts[channel * self.bins + bin] = count;
    }

    pub fn add(&mut self, channel: usize, bin: usize, count: u32) {
        self.counts[channel * self.bins + bin] += count;
    }

    pub fn channel(&self, c: usize) -> &[u32] {
        &self.counts[c * self.bins..(c + 1) * self.bins]
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    /// Spike counts of one bin across channels, into `out`.
    pub fn bin_into(&self, bin: usize, out: &mut [u32]) {
        debug_assert_eq!(out.len(), self.channels);
        for (c, o) in out.iter_mut().enumerate() {
            *o = self.counts[c * self.bins + bin];
        }
    }

    pub fn total_spikes(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }

    pub fn channel_totals(&self) -> Vec<u64> {
        (0..self.channels)
            .map(|c| self.channel(c).iter().map(|&x| x as u64).sum())
            .collect()
    }
}

/// Spike count emitted by a membrane at `v`: `floor(v / theta)` when
/// `v >= theta`, else 0.
#[inline]
pub fn spikes_for(v: f64, theta: f64) -> u32 {
    if v >= theta {
        (v / theta).floor() as u32
    } else {
        0
    }
}

/// Post-spike membrane after the subtractive reset. Guarded so an
/// infinite threshold (spiking disabled) never produces `0 * inf`.
#[inline]
pub fn subtract_reset(v: f64, spikes: u32, theta: f64) -> f64 {
    if spikes > 0 {
        v - spikes as f64 * theta
    } else {
        v
    }
}

/// One simulation bin of a layer: decay-and-inject the synapse, decay-and-
/// integrate the membrane, then spike with subtractive reset. Returns the
/// per-neuron spike counts.
pub fn lif_step(
    state: &mut LayerState,
    params: &NeuronParams,
    weighted_input: &[f64],
) -> Result<Vec<u32>> {
    if weighted_input.len() != state.width() {
        return Err(Error::InvalidInput(format!(
            "input width {} does not match layer width {}",
            weighted_input.len(),
            state.width()
        )));
    }
    let alpha_s = params.alpha_s();
    let alpha_v = params.alpha_v();
    let mut counts = vec![0u32; state.width()];
    for (n, count) in counts.iter_mut().enumerate() {
        let i_s = alpha_s * state.i_s[n] + weighted_input[n];
        let v_pre = alpha_v * state.v[n] + i_s;
        if !v_pre.is_finite() {
            return Err(Error::Diverged(format!(
                "membrane of neuron {n} is {v_pre}"
            )));
        }
        let s = spikes_for(v_pre, params.theta);
        state.i_s[n] = i_s;
        state.v[n] = subtract_reset(v_pre, s, params.theta);
        *count = s;
    }
    Ok(counts)
}

fn check_dims(weights: &Mat, input: &SpikeRaster) -> Result<()> {
    if weights.cols() != input.channels() {
        return Err(Error::InvalidInput(format!(
            "weight matrix expects {} input channels, raster has {}",
            weights.cols(),
            input.channels()
        )));
    }
    Ok(())
}

/// Stateful simulation of a full layer over a raster. Also returns the
/// pre-spike membrane trace, `[neuron x bins]` row-major.
pub fn simulate_layer_stateful_traced(
    weights: &Mat,
    params: &NeuronParams,
    input: &SpikeRaster,
) -> Result<(SpikeRaster, Vec<f64>)> {
    check_dims(weights, input)?;
    let width = weights.rows();
    let bins = input.bins();
    let mut state = LayerState::new(width);
    let mut out = SpikeRaster::zeros(width, bins, input.dt);
    let mut trace = vec![0.0; width * bins];
    let mut col = vec![0u32; input.channels()];
    let mut drive = vec![0.0; width];
    let alpha_s = params.alpha_s();
    let alpha_v = params.alpha_v();
    for t in 0..bins {
        input.bin_into(t, &mut col);
        for (n, d) in drive.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (w, &x) in weights.row(n).iter().zip(&col) {
                acc += *w as f64 * x as f64;
            }
            *d = acc;
        }
        for n in 0..width {
            let i_s = alpha_s * state.i_s[n] + drive[n];
            let v_pre = alpha_v * state.v[n] + i_s;
            if !v_pre.is_finite() {
                return Err(Error::Diverged(format!(
                    "membrane of neuron {n} at bin {t} is {v_pre}"
                )));
            }
            let s = spikes_for(v_pre, params.theta);
            state.i_s[n] = i_s;
            state.v[n] = subtract_reset(v_pre, s, params.theta);
            trace[n * bins + t] = v_pre;
            if s > 0 {
                out.set(n, t, s);
            }
        }
    }
    Ok((out, trace))
}

/// Stateful layer simulation; see [`simulate_layer_stateful_traced`].
pub fn simulate_layer_stateful(
    weights: &Mat,
    params: &NeuronParams,
    input: &SpikeRaster,
) -> Result<SpikeRaster> {
    simulate_layer_stateful_traced(weights, params, input).map(|(r, _)| r)
}

/// Kernel-formulation simulation: the membrane is the weighted response of
/// the inputs (synaptic and membrane kernels chained) plus a subtractive
/// reset term `-theta * e^(-t/tau_v)` driven by the neuron's own output.
/// Evaluated bin by bin because the reset needs past output spikes; the
/// chained recursions keep it exact with O(1) memory per bin.
pub fn simulate_layer_srm_traced(
    weights: &Mat,
    params: &NeuronParams,
    input: &SpikeRaster,
) -> Result<(SpikeRaster, Vec<f64>)> {
    check_dims(weights, input)?;
    let width = weights.rows();
    let bins = input.bins();
    let mut out = SpikeRaster::zeros(width, bins, input.dt);
    let mut trace = vec![0.0; width * bins];
    // syn: synaptic kernel state; free: reset-free membrane response;
    // reset: the accumulated subtractive-reset response (post-spike).
    let mut syn = vec![0.0; width];
    let mut free = vec![0.0; width];
    let mut reset = vec![0.0; width];
    let mut col = vec![0u32; input.channels()];
    let alpha_s = params.alpha_s();
    let alpha_v = params.alpha_v();
    for t in 0..bins {
        input.bin_into(t, &mut col);
        for n in 0..width {
            let mut acc = 0.0;
            for (w, &x) in weights.row(n).iter().zip(&col) {
                acc += *w as f64 * x as f64;
            }
            syn[n] = alpha_s * syn[n] + acc;
            free[n] = alpha_v * free[n] + syn[n];
            reset[n] *= alpha_v;
            let v_pre = free[n] + reset[n];
            if !v_pre.is_finite() {
                return Err(Error::Diverged(format!(
                    "membrane of neuron {n} at bin {t} is {v_pre}"
                )));
            }
            let s = spikes_for(v_pre, params.theta);
            if s > 0 {
                reset[n] -= s as f64 * params.theta;
            }
            trace[n * bins + t] = v_pre;
            if s > 0 {
                out.set(n, t, s);
            }
        }
    }
    Ok((out, trace))
}

/// Kernel-path layer simulation; see [`simulate_layer_srm_traced`].
pub fn simulate_layer_srm(
    weights: &Mat,
    params: &NeuronParams,
    input: &SpikeRaster,
) -> Result<SpikeRaster> {
    simulate_layer_srm_traced(weights, params, input).map(|(r, _)| r)
}
