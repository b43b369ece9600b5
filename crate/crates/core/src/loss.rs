//! Peak cross-entropy over readout traces plus spiking-activity
//! regularization.
//!
//! The classification loss reads each output channel only at its maximal
//! activation over the sample, which trains the traces for threshold-style
//! streaming detection. The regularizer penalizes the squared normalized
//! count of spikes beyond one per neuron-bin: a single spike per bin is
//! free, a bin with count N >= 2 contributes N.

use crate::net::OutputTrace;
use crate::neuron::SpikeRaster;
use crate::signal::log_sum_exp;
use crate::{Error, Result};

/// Default activity-regularizer weight.
pub const DEFAULT_ACTIVITY_WEIGHT: f64 = 0.01;

/// Per-class trace maxima and where they occur.
#[derive(Debug, Clone, PartialEq)]
pub struct PeakResult {
    pub logits: Vec<f64>,
    /// First bin attaining each class's maximum.
    pub peak_times: Vec<usize>,
}

/// Per-class max and argmax over the whole sample (earliest bin wins
/// ties).
pub fn peak_logits(trace: &OutputTrace) -> Result<PeakResult> {
    if trace.bins() == 0 || trace.classes() == 0 {
        return Err(Error::InvalidInput("peak_logits over an empty trace".into()));
    }
    let mut logits = Vec::with_capacity(trace.classes());
    let mut peak_times = Vec::with_capacity(trace.classes());
    for c in 0..trace.classes() {
        let row = trace.channel(c);
        let (mut bi, mut bv) = (0usize, row[0]);
        for (t, &v) in row.iter().enumerate().skip(1) {
            if v > bv {
                bv = v;
                bi = t;
            }
        }
        logits.push(bv);
        peak_times.push(bi);
    }
    Ok(PeakResult { logits, peak_times })
}

/// `-log(softmax(logits)[label])`, computed via a stable log-sum-exp.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::InvalidInput(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("logits must be finite".into()));
    }
    Ok(log_sum_exp(logits) - logits[label])
}

/// Total spikes beyond one per neuron-bin: a bin with count N contributes
/// N when N >= 2 and nothing otherwise, summed over all rasters.
pub fn activity_excess<'a>(rasters: impl IntoIterator<Item = &'a SpikeRaster>) -> u64 {
    rasters
        .into_iter()
        .flat_map(|r| r.counts().iter())
        .map(|&c| if c >= 2 { c as u64 } else { 0 })
        .sum()
}

/// Squared normalized excess: `(n_excess / (bins * n_neurons))^2`.
pub fn activity_loss(n_excess: u64, bins: usize, n_neurons: usize) -> Result<f64> {
    if bins == 0 || n_neurons == 0 {
        return Err(Error::InvalidParameter(
            "activity loss needs positive bins and population".into(),
        ));
    }
    let ratio = n_excess as f64 / (bins as f64 * n_neurons as f64);
    Ok(ratio * ratio)
}

/// Peak cross-entropy plus `alpha` times the activity regularizer over the
/// given spiking rasters. `n_neurons` is the total spiking population.
pub fn total_loss(
    trace: &OutputTrace,
    label: usize,
    rasters: &[&SpikeRaster],
    n_neurons: usize,
    alpha: f64,
) -> Result<f64> {
    if !(alpha >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "activity weight must be >= 0, got {alpha}"
        )));
    }
    let peaks = peak_logits(trace)?;
    let ce = cross_entropy(&peaks.logits, label)?;
    if alpha == 0.0 {
        return Ok(ce);
    }
    let excess = activity_excess(rasters.iter().copied());
    Ok(ce + alpha * activity_loss(excess, trace.bins(), n_neurons)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::DEFAULT_DT;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn trace(rows: Vec<Vec<f64>>) -> OutputTrace {
        let classes = rows.len();
        let bins = rows[0].len();
        OutputTrace::new(classes, bins, rows.concat(), DEFAULT_DT).unwrap()
    }

    #[test]
    fn peak_logits_hand_case() {
        let t = trace(vec![vec![1.0, 3.0, 2.0], vec![0.0, 0.0, 5.0]]);
        let p = peak_logits(&t).unwrap();
        assert_eq!(p.logits, vec![3.0, 5.0]);
        assert_eq!(p.peak_times, vec![1, 2]);
    }

    #[test]
    fn peak_logits_constant_trace_breaks_ties_early() {
        let t = trace(vec![vec![0.7; 5]]);
        let p = peak_logits(&t).unwrap();
        assert_eq!(p.logits, vec![0.7]);
        assert_eq!(p.peak_times, vec![0]);
    }

    #[test]
    fn peak_logits_lands_on_bump_maxima() {
        // Two channels with distinct bumps; the peak times are the bump
        // centers.
        let bump = |center: usize, bins: usize| -> Vec<f64> {
            (0..bins)
                .map(|t| (-((t as f64 - center as f64).powi(2)) / 8.0).exp())
                .collect()
        };
        let t = trace(vec![bump(10, 40), bump(25, 40)]);
        let p = peak_logits(&t).unwrap();
        assert_eq!(p.peak_times, vec![10, 25]);
    }

    #[test]
    fn peak_logits_rejects_empty() {
        assert!(peak_logits(&OutputTrace::zeros(2, 0, DEFAULT_DT)).is_err());
    }

    #[test]
    fn peak_logits_matches_brute_force_on_random_traces() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..1000 {
            let classes = rng.gen_range(1..6);
            let bins = rng.gen_range(1..50);
            let vals: Vec<f64> =
                (0..classes * bins).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let t = OutputTrace::new(classes, bins, vals, DEFAULT_DT).unwrap();
            let p = peak_logits(&t).unwrap();
            for c in 0..classes {
                let row = t.channel(c);
                let mut best = (0usize, row[0]);
                for (i, &v) in row.iter().enumerate() {
                    if v > best.1 {
                        best = (i, v);
                    }
                }
                assert_eq!(p.logits[c], best.1);
                assert_eq!(p.peak_times[c], best.0);
            }
        }
    }

    #[test]
    #[allow(clippy::approx_constant)] // 0.69315 is the frozen hand value
    fn cross_entropy_hand_values() {
        let ce = cross_entropy(&[0.0, 0.0], 0).unwrap();
        assert!((ce - 2.0f64.ln()).abs() < 1e-6);
        assert!((ce - 0.69315).abs() < 1e-5);

        let confident = cross_entropy(&[50.0, -50.0], 0).unwrap();
        assert!(confident < 1e-9);
        let wrong = cross_entropy(&[50.0, -50.0], 1).unwrap();
        assert!((wrong - 100.0).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_bounds_and_errors() {
        assert!(cross_entropy(&[1.0, 2.0], 5).is_err());
        assert!(cross_entropy(&[f64::NAN, 0.0], 0).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let logits: Vec<f64> = (0..4).map(|_| rng.gen_range(-10.0..10.0)).collect();
            let ce = cross_entropy(&logits, rng.gen_range(0..4)).unwrap();
            assert!(ce >= 0.0);
        }
    }

    fn raster_of(counts: &[u32]) -> SpikeRaster {
        SpikeRaster::from_counts(1, counts.len(), counts.to_vec(), DEFAULT_DT).unwrap()
    }

    #[test]
    fn activity_excess_hand_cases() {
        assert_eq!(activity_excess([&raster_of(&[0, 1, 2, 3])]), 5);
        assert_eq!(activity_excess([&raster_of(&[1, 1, 0, 1])]), 0);
        let all_twos = SpikeRaster::from_counts(10, 10, vec![2; 100], DEFAULT_DT).unwrap();
        assert_eq!(activity_excess([&all_twos]), 200);
    }

    #[test]
    fn activity_excess_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let counts: Vec<u32> = (0..60).map(|_| rng.gen_range(0..4)).collect();
        let base = activity_excess([&SpikeRaster::from_counts(6, 10, counts.clone(), DEFAULT_DT)
            .unwrap()]);
        use rand::seq::SliceRandom;
        let mut shuffled = counts;
        shuffled.shuffle(&mut rng);
        let perm = activity_excess([&SpikeRaster::from_counts(10, 6, shuffled, DEFAULT_DT)
            .unwrap()]);
        assert_eq!(base, perm);
    }

    #[test]
    fn activity_loss_hand_values() {
        assert!((activity_loss(5, 4, 1).unwrap() - 1.5625).abs() < 1e-12);
        assert_eq!(activity_loss(0, 10, 3).unwrap(), 0.0);
        assert_eq!(activity_loss(30, 10, 3).unwrap(), 1.0);
        assert!(activity_loss(1, 0, 3).is_err());
    }

    #[test]
    fn total_loss_composition() {
        let t = trace(vec![vec![0.0, 0.0, 0.0, 0.0], vec![0.0; 4]]);
        let raster = raster_of(&[0, 1, 2, 3]);
        // alpha = 0: cross-entropy alone.
        let base = total_loss(&t, 0, &[&raster], 1, 0.0).unwrap();
        assert!((base - 2.0f64.ln()).abs() < 1e-12);
        // CE = ln 2, L_act = 1.5625, alpha = 0.01 -> 0.70877.
        let combined = total_loss(&t, 0, &[&raster], 1, DEFAULT_ACTIVITY_WEIGHT).unwrap();
        assert!((combined - 0.70877).abs() < 1e-5);
        assert!((combined - (base + 0.01 * 1.5625)).abs() < 1e-12);
        assert!(total_loss(&t, 0, &[&raster], 1, -1.0).is_err());
    }
}
