//! Clip classification and continuous-stream detection metrics: false
//! rejection rate (FRR) and false alarms per hour (FAPH), with threshold
//! sweeps to pick an operating point.
//!
//! Detection works directly on the low-pass readout trace, no softmax: a
//! detection fires when a class trace crosses the threshold upward,
//! subject to a per-class lockout.

use crate::net::{Network, OutputTrace};
use crate::neuron::SpikeRaster;
use crate::{Error, Result};

/// Default per-class lockout after a detection, seconds.
pub const DEFAULT_LOCKOUT_SECS: f64 = 1.0;
/// Default tolerance around a labeled keyword for matching, seconds.
pub const DEFAULT_MATCH_WINDOW_SECS: f64 = 0.75;

/// One threshold crossing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub class: usize,
    /// Seconds from the start of the stream.
    pub time: f64,
    /// Trace value at the crossing bin.
    pub value: f64,
}

/// Ground-truth keyword occurrence in a stream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StreamLabel {
    pub class: usize,
    pub start: f64,
    pub end: f64,
}

impl StreamLabel {
    pub fn new(class: usize, start: f64, end: f64) -> Result<Self> {
        if !(start < end) {
            return Err(Error::InvalidInput(format!(
                "label must have start < end, got {start}..{end}"
            )));
        }
        Ok(Self { class, start, end })
    }
}

/// Argmax class of the peak logits; ties break to the lowest index.
pub fn classify_clip(net: &Network, raster: &SpikeRaster) -> Result<usize> {
    let (trace, _) = net.forward(raster)?;
    let peaks = crate::loss::peak_logits(&trace)?;
    let mut best = 0usize;
    for (c, &v) in peaks.logits.iter().enumerate() {
        if v > peaks.logits[best] {
            best = c;
        }
    }
    Ok(best)
}

/// Upward-crossing detector over a ready trace. The trace is taken to be
/// zero before the first bin; a detection for class c is suppressed while
/// a previous detection of c lies within the preceding lockout window.
pub fn detect_on_trace(trace: &OutputTrace, threshold: f64, lockout_secs: f64) -> Vec<Detection> {
    let mut detections = Vec::new();
    let mut last_fire: Vec<Option<f64>> = vec![None; trace.classes()];
    for c in 0..trace.classes() {
        let row = trace.channel(c);
        let mut prev = 0.0;
        for (t, &v) in row.iter().enumerate() {
            let crossed = prev < threshold && v >= threshold;
            prev = v;
            if !crossed {
                continue;
            }
            let time = t as f64 * trace.dt;
            let free = match last_fire[c] {
                Some(last) => time - last >= lockout_secs,
                None => true,
            };
            if free {
                last_fire[c] = Some(time);
                detections.push(Detection { class: c, time, value: v });
            }
        }
    }
    detections.sort_by(|a, b| a.time.partial_cmp(&b.time).unwrap().then(a.class.cmp(&b.class)));
    detections
}

/// Incremental detection over a raster stream: the network state is
/// carried bin to bin and crossings are evaluated as each readout value is
/// produced.
pub fn stream_detect(
    net: &Network,
    stream: &SpikeRaster,
    threshold: f64,
    lockout_secs: f64,
) -> Result<Vec<Detection>> {
    if !threshold.is_finite() {
        return Err(Error::InvalidInput("threshold must be finite".into()));
    }
    if !(lockout_secs >= 0.0) {
        return Err(Error::InvalidInput("lockout must be >= 0".into()));
    }
    if stream.channels() != net.config().n_channels_in {
        return Err(Error::InvalidInput(format!(
            "stream has {} channels, network expects {}",
            stream.channels(),
            net.config().n_channels_in
        )));
    }
    let classes = net.config().n_classes;
    let mut state = net.init_state();
    let mut col = vec![0u32; stream.channels()];
    let mut prev = vec![0.0f64; classes];
    let mut last_fire: Vec<Option<f64>> = vec![None; classes];
    let mut detections = Vec::new();
    for t in 0..stream.bins() {
        stream.bin_into(t, &mut col);
        let out = net.step(&mut state, &col)?;
        let time = t as f64 * stream.dt;
        for (c, &v) in out.readout.iter().enumerate() {
            let crossed = prev[c] < threshold && v >= threshold;
            prev[c] = v;
            if !crossed {
                continue;
            }
            let free = match last_fire[c] {
                Some(last) => time - last >= lockout_secs,
                None => true,
            };
            if free {
                last_fire[c] = Some(time);
                detections.push(Detection { class: c, time, value: v });
            }
        }
    }
    Ok(detections)
}

/// FRR and FAPH counts for one stream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrrFaph {
    /// Missed keywords / total keywords.
    pub frr: f64,
    /// Unmatched detections per hour.
    pub faph: f64,
    pub misses: usize,
    pub false_alarms: usize,
    pub keywords: usize,
}

/// A keyword is hit when some detection of its class falls inside
/// [start - window, end + window]; every detection matching no label of
/// its class is a false alarm.
pub fn compute_frr_faph(
    detections: &[Detection],
    labels: &[StreamLabel],
    stream_hours: f64,
    match_window_secs: f64,
) -> Result<FrrFaph> {
    if !(stream_hours > 0.0) {
        return Err(Error::InvalidInput("stream duration must be positive".into()));
    }
    let hit = |l: &StreamLabel| {
        detections.iter().any(|d| {
            d.class == l.class
                && d.time >= l.start - match_window_secs
                && d.time <= l.end + match_window_secs
        })
    };
    let misses = labels.iter().filter(|l| !hit(l)).count();
    let false_alarms = detections
        .iter()
        .filter(|d| {
            !labels.iter().any(|l| {
                l.class == d.class
                    && d.time >= l.start - match_window_secs
                    && d.time <= l.end + match_window_secs
            })
        })
        .count();
    let frr = if labels.is_empty() { 0.0 } else { misses as f64 / labels.len() as f64 };
    Ok(FrrFaph {
        frr,
        faph: false_alarms as f64 / stream_hours,
        misses,
        false_alarms,
        keywords: labels.len(),
    })
}

/// One sweep sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub threshold: f64,
    pub frr: f64,
    pub faph: f64,
    pub detections: usize,
}

/// Sweep outcome: the best operating point at or under the FAPH target,
/// or the strictest threshold with a flag when nothing meets it.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub points: Vec<SweepPoint>,
    pub threshold: f64,
    pub frr: f64,
    /// False when no threshold met the FAPH target and the strictest
    /// point is reported instead.
    pub met_target: bool,
}

/// Evaluate a descending threshold grid over one stream and return the
/// lowest FRR among thresholds whose FAPH stays at or under the target.
/// The trace is computed once; detection re-runs per threshold.
pub fn threshold_sweep(
    net: &Network,
    stream: &SpikeRaster,
    labels: &[StreamLabel],
    grid: &[f64],
    target_faph: f64,
    lockout_secs: f64,
    match_window_secs: f64,
) -> Result<SweepResult> {
    if grid.is_empty() {
        return Err(Error::InvalidInput("threshold grid is empty".into()));
    }
    let (trace, _) = net.forward(stream)?;
    let stream_hours = stream.bins() as f64 * stream.dt / 3600.0;
    let mut thresholds: Vec<f64> = grid.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());

    let mut points = Vec::with_capacity(thresholds.len());
    for &thr in &thresholds {
        let detections = detect_on_trace(&trace, thr, lockout_secs);
        let m = compute_frr_faph(&detections, labels, stream_hours, match_window_secs)?;
        points.push(SweepPoint {
            threshold: thr,
            frr: m.frr,
            faph: m.faph,
            detections: detections.len(),
        });
    }
    let best = points
        .iter()
        .filter(|p| p.faph <= target_faph)
        .min_by(|a, b| a.frr.partial_cmp(&b.frr).unwrap());
    let result = match best {
        Some(p) => SweepResult {
            threshold: p.threshold,
            frr: p.frr,
            met_target: true,
            points,
        },
        None => {
            let strictest = points[0];
            SweepResult {
                threshold: strictest.threshold,
                frr: strictest.frr,
                met_target: false,
                points,
            }
        }
    };
    Ok(result)
}

/// Parse stream labels from tab-separated `class<TAB>start<TAB>end` lines.
pub fn load_stream_labels(path: &std::path::Path) -> Result<Vec<StreamLabel>> {
    let text = std::fs::read_to_string(path)?;
    let mut labels = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("expected class<TAB>start<TAB>end, got {} fields", fields.len()),
            });
        }
        let parse = |s: &str, what: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::Parse {
                line: i + 1,
                msg: format!("bad {what} '{s}'"),
            })
        };
        let class: usize = fields[0].parse().map_err(|_| Error::Parse {
            line: i + 1,
            msg: format!("bad class '{}'", fields[0]),
        })?;
        labels.push(StreamLabel::new(
            class,
            parse(fields[1], "start")?,
            parse(fields[2], "end")?,
        )?);
    }
    Ok(labels)
}
