//! The WaveSense network: an input projection into a spiking layer, a
//! stack of residual blocks whose first layer is driven through a fast and
//! a slow synapse, per-block skip projections summed into a shared hidden
//! spiking layer, and a non-spiking low-pass readout.
//!
//! Each block's slow synaptic time constant equals its dilation value in
//! bins, so the stack covers a geometric range of timescales without
//! buffering past activity: the only per-layer state is the synapse and
//! membrane values (k + 1 words per neuron versus the (k-1)*d + 1 samples
//! a buffered dilated convolution would keep).

use crate::autodiff::{NodeRef, SpikeMode, SurrogateParams, Tape};
use crate::neuron::{spikes_for, SpikeRaster};
use crate::signal::decay_factor;
use crate::tensor::{ParamId, ParamSet};
use crate::{Error, Result};

/// Architecture hyperparameters. Field names track the config-file keys;
/// `threshold`, `tau_v` and `tau_s` in files map to `theta`, `tau_v_base`
/// and `tau_s_base` here.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveSenseConfig {
    pub n_classes: usize,
    pub n_channels_in: usize,
    pub n_channels_res: usize,
    pub n_channels_skip: usize,
    pub n_hidden: usize,
    /// One residual block per entry; the value is the block's slow
    /// synaptic time constant in bins.
    pub dilations: Vec<u32>,
    /// Taps per temporal kernel; the spiking architecture uses 2 (one fast
    /// and one slow synapse).
    pub kernel_size: usize,
    pub theta: f64,
    pub learning_window: f64,
    pub tau_v_base: f64,
    pub tau_s_base: f64,
    pub weight_scaling: f64,
    pub bias: bool,
    /// Readout low-pass time constant in bins; defaults to the largest
    /// dilation.
    pub tau_lp: Option<f64>,
}

impl WaveSenseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_size != 2 {
            return Err(Error::Config(format!(
                "kernel_size must be 2 for the spiking architecture, got {}",
                self.kernel_size
            )));
        }
        if self.dilations.is_empty() {
            return Err(Error::Config("dilations must be non-empty".into()));
        }
        if self.dilations.iter().any(|&d| d < 1) {
            return Err(Error::Config("every dilation must be >= 1".into()));
        }
        for (name, v) in [
            ("n_classes", self.n_classes),
            ("n_channels_in", self.n_channels_in),
            ("n_channels_res", self.n_channels_res),
            ("n_channels_skip", self.n_channels_skip),
            ("n_hidden", self.n_hidden),
        ] {
            if v < 1 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        for (name, v) in [
            ("threshold", self.theta),
            ("learning_window", self.learning_window),
            ("tau_v", self.tau_v_base),
            ("tau_s", self.tau_s_base),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!(
                    "{name} must be positive and finite, got {v}"
                )));
            }
        }
        if !(self.weight_scaling >= 0.0) {
            return Err(Error::Config("weight_scaling must be >= 0".into()));
        }
        if let Some(lp) = self.tau_lp {
            if !(lp > 0.0) {
                return Err(Error::Config(format!("tau_lp must be positive, got {lp}")));
            }
        }
        Ok(())
    }

    pub fn effective_tau_lp(&self) -> f64 {
        self.tau_lp
            .unwrap_or_else(|| *self.dilations.iter().max().expect("non-empty") as f64)
    }

    /// 2-class keyword config: 12 blocks of dilations [2,4,8] x4.
    pub fn aloha() -> Self {
        Self {
            n_classes: 2,
            n_channels_in: 64,
            n_channels_res: 16,
            n_channels_skip: 32,
            n_hidden: 32,
            dilations: vec![2, 4, 8, 2, 4, 8, 2, 4, 8, 2, 4, 8],
            kernel_size: 2,
            theta: 1.0,
            learning_window: 0.3,
            tau_v_base: 2.0,
            tau_s_base: 2.0,
            weight_scaling: 0.5,
            bias: true,
            tau_lp: None,
        }
    }

    /// 2-class wake-phrase config: 8 blocks of dilations [2,4,8,16] x2.
    pub fn hey_snips() -> Self {
        Self {
            dilations: vec![2, 4, 8, 16, 2, 4, 8, 16],
            ..Self::aloha()
        }
    }

    /// 35-class command config: wider blocks, 12 dilations.
    pub fn speech_commands() -> Self {
        Self {
            n_classes: 35,
            n_channels_res: 32,
            n_channels_skip: 64,
            n_hidden: 128,
            dilations: vec![2, 4, 8, 16, 2, 4, 8, 16, 2, 4, 8, 16],
            ..Self::aloha()
        }
    }

    /// Canonical key=value text; also the checkpoint-embedded form whose
    /// FNV-1a hash identifies the config.
    pub fn to_config_text(&self) -> String {
        let dil: Vec<String> = self.dilations.iter().map(|d| d.to_string()).collect();
        let mut s = format!(
            "n_classes = {}\nn_channels_in = {}\nn_channels_res = {}\n\
             n_channels_skip = {}\nn_hidden = {}\ndilations = [{}]\n\
             threshold = {}\nlearning_window = {}\nkernel_size = {}\n\
             bias = {}\ntau_v = {}\ntau_s = {}\nweight_scaling = {}\n",
            self.n_classes,
            self.n_channels_in,
            self.n_channels_res,
            self.n_channels_skip,
            self.n_hidden,
            dil.join(", "),
            self.theta,
            self.learning_window,
            self.kernel_size,
            self.bias,
            self.tau_v_base,
            self.tau_s_base,
            self.weight_scaling,
        );
        if let Some(lp) = self.tau_lp {
            s.push_str(&format!("tau_lp = {lp}\n"));
        }
        s
    }

    pub fn hash64(&self) -> u64 {
        fnv1a(self.to_config_text().as_bytes())
    }

    /// Parse from key=value text. All table keys are required; `tau_lp`
    /// is optional; unknown keys are rejected.
    pub fn from_config_str(text: &str) -> Result<Self> {
        let pairs = parse_kv(text)?;
        let mut cfg = Self::aloha();
        cfg.tau_lp = None;
        let mut seen = std::collections::HashSet::new();
        for (line, key, value) in &pairs {
            if !cfg.apply_key(key, value).map_err(|e| Error::Parse {
                line: *line,
                msg: e.to_string(),
            })? {
                return Err(Error::Parse {
                    line: *line,
                    msg: format!("unknown key '{key}'"),
                });
            }
            seen.insert(key.clone());
        }
        for required in REQUIRED_CONFIG_KEYS {
            if !seen.contains(*required) {
                return Err(Error::Config(format!("missing key '{required}'")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply one key=value; Ok(false) when the key is not a network key.
    pub fn apply_key(&mut self, key: &str, value: &str) -> Result<bool> {
        let bad = |k: &str, v: &str| Error::Config(format!("bad value '{v}' for {k}"));
        match key {
            "n_classes" => self.n_classes = value.parse().map_err(|_| bad(key, value))?,
            "n_channels_in" => self.n_channels_in = value.parse().map_err(|_| bad(key, value))?,
            "n_channels_res" => {
                self.n_channels_res = value.parse().map_err(|_| bad(key, value))?
            }
            "n_channels_skip" => {
                self.n_channels_skip = value.parse().map_err(|_| bad(key, value))?
            }
            "n_hidden" => self.n_hidden = value.parse().map_err(|_| bad(key, value))?,
            "dilations" => self.dilations = parse_dilations(value)?,
            "threshold" => self.theta = value.parse().map_err(|_| bad(key, value))?,
            "learning_window" => {
                self.learning_window = value.parse().map_err(|_| bad(key, value))?
            }
            "kernel_size" => self.kernel_size = value.parse().map_err(|_| bad(key, value))?,
            "bias" => self.bias = value.parse().map_err(|_| bad(key, value))?,
            "tau_v" => self.tau_v_base = value.parse().map_err(|_| bad(key, value))?,
            "tau_s" => self.tau_s_base = value.parse().map_err(|_| bad(key, value))?,
            "weight_scaling" => {
                self.weight_scaling = value.parse().map_err(|_| bad(key, value))?
            }
            "tau_lp" => self.tau_lp = Some(value.parse().map_err(|_| bad(key, value))?),
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Keys a network config file must provide.
pub const REQUIRED_CONFIG_KEYS: &[&str] = &[
    "n_classes",
    "n_channels_in",
    "n_channels_res",
    "n_channels_skip",
    "n_hidden",
    "dilations",
    "threshold",
    "learning_window",
    "kernel_size",
    "bias",
    "tau_v",
    "tau_s",
    "weight_scaling",
];

/// Parse `key = value` lines; '#' starts a comment and blank lines are
/// skipped. Returns (line number, key, value) triples.
pub fn parse_kv(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or(Error::Parse {
            line: i + 1,
            msg: format!("expected 'key = value', got '{line}'"),
        })?;
        out.push((i + 1, key.trim().to_string(), value.trim().to_string()));
    }
    Ok(out)
}

fn parse_dilations(value: &str) -> Result<Vec<u32>> {
    let inner = value.trim().trim_start_matches('[').trim_end_matches(']');
    let mut out = Vec::new();
    for part in inner.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        out.push(part.parse().map_err(|_| {
            Error::Config(format!("bad dilation entry '{part}'"))
        })?);
    }
    if out.is_empty() {
        return Err(Error::Config("dilations must be non-empty".into()));
    }
    Ok(out)
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Readout trace: one real-valued low-pass channel per class.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputTrace {
    classes: usize,
    bins: usize,
    values: Vec<f64>,
    pub dt: f64,
}

impl OutputTrace {
    pub fn new(classes: usize, bins: usize, values: Vec<f64>, dt: f64) -> Result<Self> {
        if values.len() != classes * bins {
            return Err(Error::InvalidInput(format!(
                "trace data length {} does not match {classes}x{bins}",
                values.len()
            )));
        }
        Ok(Self { classes, bins, values, dt })
    }

    pub fn zeros(classes: usize, bins: usize, dt: f64) -> Self {
        Self { classes, bins, values: vec![0.0; classes * bins], dt }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn value(&self, class: usize, bin: usize) -> f64 {
        self.values[class * self.bins + bin]
    }

    pub fn channel(&self, class: usize) -> &[f64] {
        &self.values[class * self.bins..(class + 1) * self.bins]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub(crate) fn set(&mut self, class: usize, bin: usize, v: f64) {
        self.values[class * self.bins + bin] = v;
    }
}

/// Spiking activity of one layer over a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerActivity {
    pub name: String,
    pub neurons: usize,
    pub spikes: u64,
    /// Sum of per-bin counts N wherever N >= 2.
    pub excess: u64,
}

/// Per-layer spike totals of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct SpikeStats {
    pub bins: usize,
    pub layers: Vec<LayerActivity>,
}

impl SpikeStats {
    pub fn total_spikes(&self) -> u64 {
        self.layers.iter().map(|l| l.spikes).sum()
    }

    pub fn total_excess(&self) -> u64 {
        self.layers.iter().map(|l| l.excess).sum()
    }

    pub fn total_neurons(&self) -> usize {
        self.layers.iter().map(|l| l.neurons).sum()
    }

    /// Excess spikes per neuron per bin over the whole spiking population.
    pub fn mean_excess_per_neuron_bin(&self) -> f64 {
        let denom = (self.total_neurons() * self.bins) as f64;
        if denom == 0.0 {
            0.0
        } else {
            self.total_excess() as f64 / denom
        }
    }

    /// Mean spikes per neuron per bin, per layer.
    pub fn layer_rates(&self) -> Vec<(String, f64)> {
        self.layers
            .iter()
            .map(|l| {
                let denom = (l.neurons * self.bins) as f64;
                (l.name.clone(), if denom == 0.0 { 0.0 } else { l.spikes as f64 / denom })
            })
            .collect()
    }
}

struct BlockIds {
    fast_w: ParamId,
    fast_b: Option<ParamId>,
    slow_w: ParamId,
    slow_b: Option<ParamId>,
    res_w: ParamId,
    res_b: Option<ParamId>,
    skip_w: ParamId,
    skip_b: Option<ParamId>,
    /// Slow synapse decay; the fast synapse uses the base tau.
    alpha_slow: f64,
}

/// A built network: immutable architecture plus its parameter set.
pub struct Network {
    config: WaveSenseConfig,
    params: ParamSet,
    input_w: ParamId,
    input_b: Option<ParamId>,
    blocks: Vec<BlockIds>,
    hidden_w: ParamId,
    hidden_b: Option<ParamId>,
    readout_w: ParamId,
    readout_b: Option<ParamId>,
}

/// Carried state for streaming inference: synapse and membrane values per
/// spiking layer plus the readout accumulator. No past activations are
/// buffered.
#[derive(Debug, Clone, PartialEq)]
pub struct NetState {
    input_syn: Vec<f64>,
    input_v: Vec<f64>,
    blocks: Vec<BlockState>,
    hidden_syn: Vec<f64>,
    hidden_v: Vec<f64>,
    readout: Vec<f64>,
    // Scratch reused every bin.
    cur: Vec<u32>,
    skip_acc: Vec<u32>,
    drive: Vec<f64>,
    slow_drive: Vec<f64>,
    s1: Vec<u32>,
    s2: Vec<u32>,
    s3: Vec<u32>,
    s_h: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
struct BlockState {
    fast_syn: Vec<f64>,
    slow_syn: Vec<f64>,
    v1: Vec<f64>,
    res_syn: Vec<f64>,
    v2: Vec<f64>,
    skip_syn: Vec<f64>,
    v3: Vec<f64>,
}

/// Per-bin output of [`Network::step`].
#[derive(Debug, Clone)]
pub struct StepOutput {
    /// Readout value per class after this bin.
    pub readout: Vec<f64>,
    /// (spikes, excess) per spiking layer, in [`Network::layer_names`] order.
    pub layer_spikes: Vec<(u64, u64)>,
}

/// Everything the trainer needs from a differentiable forward pass.
pub struct TapeForward<'p> {
    pub tape: Tape<'p>,
    /// Readout trace node, `classes x bins`.
    pub trace: NodeRef,
    /// Spike-count node per spiking layer, in layer order.
    pub spike_nodes: Vec<NodeRef>,
}

impl Network {
    /// Build a network with freshly initialized weights.
    pub fn build(config: WaveSenseConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = crate::train::init_weights(&config, seed);
        Self::from_params(config, params)
    }

    /// Assemble a network around an existing parameter set (checkpoint
    /// restore). The set must contain exactly the tensors the config
    /// implies.
    pub fn from_params(config: WaveSenseConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let layout = crate::train::param_layout(&config);
        if layout.len() != params.len() {
            return Err(Error::Incompatible(format!(
                "parameter set has {} tensors, config implies {}",
                params.len(),
                layout.len()
            )));
        }
        for spec in &layout {
            let got = params.get(&spec.name).ok_or_else(|| {
                Error::Incompatible(format!("missing parameter '{}'", spec.name))
            })?;
            if got.rows() != spec.rows || got.cols() != spec.cols {
                return Err(Error::Incompatible(format!(
                    "parameter '{}' is {}x{}, config implies {}x{}",
                    spec.name,
                    got.rows(),
                    got.cols(),
                    spec.rows,
                    spec.cols
                )));
            }
        }
        let id = |name: &str| params.id(name).expect("checked above");
        let bias = config.bias;
        let opt = |name: &str| if bias { Some(id(name)) } else { None };
        let blocks = (0..config.dilations.len())
            .map(|i| BlockIds {
                fast_w: id(&format!("block{i}.fast.w")),
                fast_b: opt(&format!("block{i}.fast.b")),
                slow_w: id(&format!("block{i}.slow.w")),
                slow_b: opt(&format!("block{i}.slow.b")),
                res_w: id(&format!("block{i}.res.w")),
                res_b: opt(&format!("block{i}.res.b")),
                skip_w: id(&format!("block{i}.skip.w")),
                skip_b: opt(&format!("block{i}.skip.b")),
                alpha_slow: decay_factor(config.dilations[i] as f64).expect("validated"),
            })
            .collect();
        Ok(Self {
            input_w: id("input.w"),
            input_b: opt("input.b"),
            blocks,
            hidden_w: id("hidden.w"),
            hidden_b: opt("hidden.b"),
            readout_w: id("readout.w"),
            readout_b: opt("readout.b"),
            config,
            params,
        })
    }

    pub fn config(&self) -> &WaveSenseConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Replace the parameter values (shapes must match).
    pub fn set_params(&mut self, params: ParamSet) -> Result<()> {
        let rebuilt = Self::from_params(self.config.clone(), params)?;
        self.params = rebuilt.params;
        Ok(())
    }

    /// Names of the spiking layers, in simulation order.
    pub fn layer_names(&self) -> Vec<String> {
        let mut names = vec!["input".to_string()];
        for i in 0..self.blocks.len() {
            names.push(format!("block{i}.l1"));
            names.push(format!("block{i}.l2"));
            names.push(format!("block{i}.l3"));
        }
        names.push("hidden".to_string());
        names
    }

    /// Widths of the spiking layers, parallel to [`Self::layer_names`].
    pub fn layer_widths(&self) -> Vec<usize> {
        let c = &self.config;
        let mut widths = vec![c.n_channels_res];
        for _ in 0..self.blocks.len() {
            widths.push(c.n_channels_res);
            widths.push(c.n_channels_res);
            widths.push(c.n_channels_skip);
        }
        widths.push(c.n_hidden);
        widths
    }

    /// Total spiking neuron count (the population the activity
    /// regularizer normalizes by).
    pub fn n_spiking_neurons(&self) -> usize {
        self.layer_widths().iter().sum()
    }

    pub fn init_state(&self) -> NetState {
        let c = &self.config;
        NetState {
            input_syn: vec![0.0; c.n_channels_res],
            input_v: vec![0.0; c.n_channels_res],
            blocks: (0..self.blocks.len())
                .map(|_| BlockState {
                    fast_syn: vec![0.0; c.n_channels_res],
                    slow_syn: vec![0.0; c.n_channels_res],
                    v1: vec![0.0; c.n_channels_res],
                    res_syn: vec![0.0; c.n_channels_res],
                    v2: vec![0.0; c.n_channels_res],
                    skip_syn: vec![0.0; c.n_channels_skip],
                    v3: vec![0.0; c.n_channels_skip],
                })
                .collect(),
            hidden_syn: vec![0.0; c.n_hidden],
            hidden_v: vec![0.0; c.n_hidden],
            readout: vec![0.0; c.n_classes],
            cur: vec![0; c.n_channels_res],
            skip_acc: vec![0; c.n_channels_skip],
            drive: vec![0.0; c.n_channels_res.max(c.n_channels_skip).max(c.n_hidden)],
            slow_drive: vec![0.0; c.n_channels_res],
            s1: vec![0; c.n_channels_res],
            s2: vec![0; c.n_channels_res],
            s3: vec![0; c.n_channels_skip],
            s_h: vec![0; c.n_hidden],
        }
    }

    fn matvec_counts(
        &self,
        w: ParamId,
        b: Option<ParamId>,
        x: &[u32],
        out: &mut [f64],
    ) {
        let wm = self.params.mat(w);
        debug_assert_eq!(wm.cols(), x.len());
        for r in 0..wm.rows() {
            let mut acc = b.map_or(0.0, |bid| self.params.mat(bid).data()[r] as f64);
            for (wv, &xv) in wm.row(r).iter().zip(x) {
                acc += *wv as f64 * xv as f64;
            }
            out[r] = acc;
        }
    }

    /// Advance one bin: spiking layers update in feed-forward order, spike
    /// counts flow within the same bin, and the readout integrates the
    /// hidden spikes. `input_counts` is one raster column.
    pub fn step(&self, state: &mut NetState, input_counts: &[u32]) -> Result<StepOutput> {
        let c = &self.config;
        if input_counts.len() != c.n_channels_in {
            return Err(Error::InvalidInput(format!(
                "input has {} channels, network expects {}",
                input_counts.len(),
                c.n_channels_in
            )));
        }
        let alpha_s = decay_factor(c.tau_s_base).expect("validated");
        let alpha_v = decay_factor(c.tau_v_base).expect("validated");
        let alpha_lp = decay_factor(c.effective_tau_lp()).expect("validated");
        let theta = c.theta;
        let mut layer_spikes = Vec::with_capacity(2 + 3 * self.blocks.len());

        // Input projection into the first spiking layer.
        let res = c.n_channels_res;
        {
            let drive = &mut state.drive[..res];
            let wm = self.params.mat(self.input_w);
            for r in 0..res {
                let mut acc = self
                    .input_b
                    .map_or(0.0, |bid| self.params.mat(bid).data()[r] as f64);
                for (wv, &xv) in wm.row(r).iter().zip(input_counts) {
                    acc += *wv as f64 * xv as f64;
                }
                drive[r] = acc;
            }
            let (mut spikes, mut excess) = (0u64, 0u64);
            for n in 0..res {
                state.input_syn[n] = alpha_s * state.input_syn[n] + drive[n];
                let v = alpha_v * state.input_v[n] + state.input_syn[n];
                if !v.is_finite() {
                    return Err(Error::Diverged(format!("input-layer membrane is {v}")));
                }
                let s = spikes_for(v, theta);
                state.input_v[n] = v - s as f64 * theta;
                state.cur[n] = s;
                spikes += s as u64;
                if s >= 2 {
                    excess += s as u64;
                }
            }
            layer_spikes.push((spikes, excess));
        }

        for v in state.skip_acc.iter_mut() {
            *v = 0;
        }

        // Split the scratch out of `state` so the block loop can borrow
        // the block states mutably alongside it.
        let mut s1 = std::mem::take(&mut state.s1);
        let mut s2 = std::mem::take(&mut state.s2);
        let mut s3 = std::mem::take(&mut state.s3);
        let mut slow_drive = std::mem::take(&mut state.slow_drive);
        for (ids, bs) in self.blocks.iter().zip(state.blocks.iter_mut()) {
            // Layer 1: fast + slow synapses from the block input.
            self.matvec_counts(ids.fast_w, ids.fast_b, &state.cur, &mut state.drive[..res]);
            self.matvec_counts(ids.slow_w, ids.slow_b, &state.cur, &mut slow_drive);
            let (mut spikes, mut excess) = (0u64, 0u64);
            for n in 0..res {
                bs.fast_syn[n] = alpha_s * bs.fast_syn[n] + state.drive[n];
                bs.slow_syn[n] = ids.alpha_slow * bs.slow_syn[n] + slow_drive[n];
                let v = alpha_v * bs.v1[n] + (bs.fast_syn[n] + bs.slow_syn[n]);
                if !v.is_finite() {
                    return Err(Error::Diverged(format!("block membrane is {v}")));
                }
                let s = spikes_for(v, theta);
                bs.v1[n] = v - s as f64 * theta;
                s1[n] = s;
                spikes += s as u64;
                if s >= 2 {
                    excess += s as u64;
                }
            }
            layer_spikes.push((spikes, excess));

            // Layer 2: residual path.
            self.matvec_counts(ids.res_w, ids.res_b, &s1, &mut state.drive[..res]);
            let (mut spikes, mut excess) = (0u64, 0u64);
            for n in 0..res {
                bs.res_syn[n] = alpha_s * bs.res_syn[n] + state.drive[n];
                let v = alpha_v * bs.v2[n] + bs.res_syn[n];
                let s = spikes_for(v, theta);
                bs.v2[n] = v - s as f64 * theta;
                s2[n] = s;
                spikes += s as u64;
                if s >= 2 {
                    excess += s as u64;
                }
            }
            layer_spikes.push((spikes, excess));

            // Layer 3: skip path.
            let skip = c.n_channels_skip;
            self.matvec_counts(ids.skip_w, ids.skip_b, &s1, &mut state.drive[..skip]);
            let (mut spikes, mut excess) = (0u64, 0u64);
            for n in 0..skip {
                bs.skip_syn[n] = alpha_s * bs.skip_syn[n] + state.drive[n];
                let v = alpha_v * bs.v3[n] + bs.skip_syn[n];
                let s = spikes_for(v, theta);
                bs.v3[n] = v - s as f64 * theta;
                s3[n] = s;
                spikes += s as u64;
                if s >= 2 {
                    excess += s as u64;
                }
            }
            layer_spikes.push((spikes, excess));

            // Residual merge (count addition) and skip accumulation.
            for n in 0..res {
                state.cur[n] += s2[n];
            }
            for n in 0..skip {
                state.skip_acc[n] += s3[n];
            }
        }

        state.s1 = s1;
        state.s2 = s2;
        state.s3 = s3;
        state.slow_drive = slow_drive;

        // Hidden layer from the summed skip rasters.
        let hid = c.n_hidden;
        let mut s_h = std::mem::take(&mut state.s_h);
        self.matvec_counts(self.hidden_w, self.hidden_b, &state.skip_acc, &mut state.drive[..hid]);
        let (mut spikes, mut excess) = (0u64, 0u64);
        for n in 0..hid {
            state.hidden_syn[n] = alpha_s * state.hidden_syn[n] + state.drive[n];
            let v = alpha_v * state.hidden_v[n] + state.hidden_syn[n];
            if !v.is_finite() {
                return Err(Error::Diverged(format!("hidden membrane is {v}")));
            }
            let s = spikes_for(v, theta);
            state.hidden_v[n] = v - s as f64 * theta;
            s_h[n] = s;
            spikes += s as u64;
            if s >= 2 {
                excess += s as u64;
            }
        }
        layer_spikes.push((spikes, excess));

        // Non-spiking low-pass readout.
        let wm = self.params.mat(self.readout_w);
        let mut readout = vec![0.0; c.n_classes];
        for (r, out) in readout.iter_mut().enumerate() {
            let mut acc = self
                .readout_b
                .map_or(0.0, |bid| self.params.mat(bid).data()[r] as f64);
            for (wv, &xv) in wm.row(r).iter().zip(&s_h) {
                acc += *wv as f64 * xv as f64;
            }
            state.readout[r] = alpha_lp * state.readout[r] + acc;
            *out = state.readout[r];
        }
        state.s_h = s_h;
        Ok(StepOutput { readout, layer_spikes })
    }

    /// Run a full raster through the network. Identical, bin for bin, to
    /// driving [`Network::step`] incrementally; nothing buffers or windows
    /// past input anywhere.
    pub fn forward(&self, input: &SpikeRaster) -> Result<(OutputTrace, SpikeStats)> {
        let c = &self.config;
        if input.channels() != c.n_channels_in {
            return Err(Error::InvalidInput(format!(
                "input has {} channels, network expects {}",
                input.channels(),
                c.n_channels_in
            )));
        }
        let bins = input.bins();
        let mut state = self.init_state();
        let mut trace = OutputTrace::zeros(c.n_classes, bins, input.dt);
        let names = self.layer_names();
        let widths = self.layer_widths();
        let mut totals = vec![(0u64, 0u64); names.len()];
        let mut col = vec![0u32; c.n_channels_in];
        for t in 0..bins {
            input.bin_into(t, &mut col);
            let out = self.step(&mut state, &col)?;
            for (cls, &v) in out.readout.iter().enumerate() {
                trace.set(cls, t, v);
            }
            for (tot, &(s, e)) in totals.iter_mut().zip(&out.layer_spikes) {
                tot.0 += s;
                tot.1 += e;
            }
        }
        let layers = names
            .into_iter()
            .zip(widths)
            .zip(totals)
            .map(|((name, neurons), (spikes, excess))| LayerActivity {
                name,
                neurons,
                spikes,
                excess,
            })
            .collect();
        Ok((trace, SpikeStats { bins, layers }))
    }

    /// Differentiable forward pass over the tape. With `spiking` false the
    /// membranes pass through (exactly differentiable subthreshold mode).
    pub fn forward_tape<'a>(
        &'a self,
        input: &SpikeRaster,
        spiking: bool,
    ) -> Result<TapeForward<'a>> {
        let c = &self.config;
        if input.channels() != c.n_channels_in {
            return Err(Error::InvalidInput(format!(
                "input has {} channels, network expects {}",
                input.channels(),
                c.n_channels_in
            )));
        }
        let bins = input.bins();
        let alpha_s = decay_factor(c.tau_s_base).expect("validated");
        let alpha_v = decay_factor(c.tau_v_base).expect("validated");
        let alpha_lp = decay_factor(c.effective_tau_lp()).expect("validated");
        let mode = if spiking {
            SpikeMode::Threshold(SurrogateParams::new(c.theta, c.learning_window)?)
        } else {
            SpikeMode::Linear
        };

        let mut tape = Tape::new(&self.params);
        let mut data = vec![0.0f64; input.channels() * bins];
        for ch in 0..input.channels() {
            for (t, v) in input.channel(ch).iter().enumerate() {
                data[ch * bins + t] = *v as f64;
            }
        }
        let x = tape.input(input.channels(), bins, data)?;
        let mut spike_nodes = Vec::new();

        let drive = tape.affine(self.input_w, self.input_b, x)?;
        let syn = tape.exp_filter(drive, alpha_s);
        let s_in = tape.spike_membrane(syn, alpha_v, mode)?;
        spike_nodes.push(s_in);

        let mut cur = s_in;
        let mut skip_sum: Option<NodeRef> = None;
        for ids in &self.blocks {
            let fast_drive = tape.affine(ids.fast_w, ids.fast_b, cur)?;
            let fast = tape.exp_filter(fast_drive, alpha_s);
            let slow_drive = tape.affine(ids.slow_w, ids.slow_b, cur)?;
            let slow = tape.exp_filter(slow_drive, ids.alpha_slow);
            let total = tape.add(fast, slow)?;
            let s1 = tape.spike_membrane(total, alpha_v, mode)?;
            spike_nodes.push(s1);

            let res_drive = tape.affine(ids.res_w, ids.res_b, s1)?;
            let res_syn = tape.exp_filter(res_drive, alpha_s);
            let s2 = tape.spike_membrane(res_syn, alpha_v, mode)?;
            spike_nodes.push(s2);

            let skip_drive = tape.affine(ids.skip_w, ids.skip_b, s1)?;
            let skip_syn = tape.exp_filter(skip_drive, alpha_s);
            let s3 = tape.spike_membrane(skip_syn, alpha_v, mode)?;
            spike_nodes.push(s3);

            cur = tape.add(cur, s2)?;
            skip_sum = Some(match skip_sum {
                None => s3,
                Some(acc) => tape.add(acc, s3)?,
            });
        }

        let skip_sum = skip_sum.expect("at least one block");
        let hid_drive = tape.affine(self.hidden_w, self.hidden_b, skip_sum)?;
        let hid_syn = tape.exp_filter(hid_drive, alpha_s);
        let s_h = tape.spike_membrane(hid_syn, alpha_v, mode)?;
        spike_nodes.push(s_h);

        let out_drive = tape.affine(self.readout_w, self.readout_b, s_h)?;
        let trace = tape.exp_filter(out_drive, alpha_lp);

        Ok(TapeForward { tape, trace, spike_nodes })
    }

    /// Compare BPTT gradients against central finite differences on a
    /// random parameter subset (5% of scalars, at least `min_count`), under
    /// a quadratic loss on the readout trace. With `spiking` false (the
    /// guaranteed mode) the network is exactly differentiable; with
    /// `spiking` true the result is informational, since the surrogate is
    /// not the true derivative.
    pub fn finite_diff_check(
        &self,
        sample: &SpikeRaster,
        eps: f64,
        min_count: usize,
        spiking: bool,
        seed: u64,
    ) -> Result<crate::autodiff::FiniteDiffReport> {
        let analytic = {
            let fwd = self.forward_tape(sample, spiking)?;
            let mut tape = fwd.tape;
            let loss = tape.sum_squares(fwd.trace);
            tape.backward(loss)?
        };
        let mut params = self.params.clone();
        let config = self.config.clone();
        let mut eval = |p: &ParamSet| -> Result<f64> {
            let net = Network::from_params(config.clone(), p.clone())?;
            let fwd = net.forward_tape(sample, spiking)?;
            let mut tape = fwd.tape;
            let loss = tape.sum_squares(fwd.trace);
            Ok(tape.scalar(loss))
        };
        crate::autodiff::finite_diff_compare(
            &mut params,
            &analytic,
            eps,
            0.05,
            min_count,
            seed,
            &mut eval,
        )
    }
}

/// Effective history length of a config, in bins: 2.5 times the sum of the
/// slow synaptic time constants across blocks.
pub fn temporal_memory(config: &WaveSenseConfig) -> f64 {
    2.5 * config.dilations.iter().map(|&d| d as f64).sum::<f64>()
}

/// Per-layer memory comparison against a buffered dilated convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerFootprint {
    pub dilation: u32,
    /// Samples a buffered dilated convolution must keep: (k-1)*d + 1.
    pub buffered: u64,
    /// State words the synaptic realization keeps: k + 1.
    pub stateful: u64,
}

/// Buffer-versus-state footprint for every block of a config.
pub fn state_footprint(config: &WaveSenseConfig) -> Vec<LayerFootprint> {
    let k = config.kernel_size as u64;
    config
        .dilations
        .iter()
        .map(|&d| LayerFootprint {
            dilation: d,
            buffered: (k - 1) * d as u64 + 1,
            stateful: k + 1,
        })
        .collect()
}
