//! Synthetic PPG: trains of systolic/diastolic Gaussian pulse pairs.
//!
//! Stress is modelled as a faster, less regular rhythm with less stable
//! pulse amplitudes.

use rand::Rng;
use rand_distr::StandardNormal;

use super::{Class, PpgSignal, SignalError, SAMPLE_RATE_HZ};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthParams {
    pub class: Class,
    pub duration_s: f64,
    pub mean_hr_bpm: f64,
    /// Standard deviation of the beat period, as a fraction of the mean period.
    pub hr_jitter_frac: f64,
    /// Standard deviation of per-beat amplitude, as a fraction of unit amplitude.
    pub amp_jitter_frac: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl SynthParams {
    /// Three-minute preset for one class.
    pub fn preset(class: Class, seed: u64) -> Self {
        match class {
            Class::NonStress => Self {
                class,
                duration_s: 180.0,
                mean_hr_bpm: 66.0,
                hr_jitter_frac: 0.02,
                amp_jitter_frac: 0.04,
                noise_std: 0.02,
                seed,
            },
            Class::Stress => Self {
                class,
                duration_s: 180.0,
                mean_hr_bpm: 96.0,
                hr_jitter_frac: 0.10,
                amp_jitter_frac: 0.20,
                noise_std: 0.02,
                seed,
            },
        }
    }

    /// Per-subject variant of the class preset: mean heart rate shifted by up
    /// to ±6 bpm.
    pub fn for_subject(class: Class, subject_id: u32, base_seed: u64) -> Self {
        let s = seed::derive_seed(base_seed, ((subject_id as u64) << 1) | class.index() as u64);
        let mut r = seed::rng(seed::derive_seed(s, 0));
        let mut p = Self::preset(class, seed::derive_seed(s, 1));
        p.mean_hr_bpm += r.random_range(-6.0..=6.0);
        p
    }

    fn validate(&self) -> Result<(), SignalError> {
        let bad = |msg: &str| Err(SignalError::InvalidSynth(msg.to_string()));
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return bad("duration_s must be positive");
        }
        if !(40.0..=180.0).contains(&self.mean_hr_bpm) {
            return bad("mean_hr_bpm must lie in [40, 180]");
        }
        if !(self.hr_jitter_frac >= 0.0 && self.amp_jitter_frac >= 0.0 && self.noise_std >= 0.0) {
            return bad("jitter and noise levels must be non-negative");
        }
        Ok(())
    }
}

/// Adds `amp * exp(-(t - center)^2 / (2 width^2))` over ±4 widths.
fn add_pulse(out: &mut [f64], fs: f64, center_s: f64, width_s: f64, amp: f64) {
    let lo = ((center_s - 4.0 * width_s) * fs).floor().max(0.0) as usize;
    let hi = (((center_s + 4.0 * width_s) * fs).ceil().max(0.0) as usize).min(out.len());
    for (i, v) in out.iter_mut().enumerate().take(hi).skip(lo) {
        let d = i as f64 / fs - center_s;
        *v += amp * (-(d * d) / (2.0 * width_s * width_s)).exp();
    }
}

/// Generates a 64 Hz recording for subject 0 of the preset's class task.
pub fn synth_ppg(params: &SynthParams) -> Result<PpgSignal, SignalError> {
    params.validate()?;
    let fs = SAMPLE_RATE_HZ as f64;
    let n = (params.duration_s * fs).round() as usize;
    if n == 0 {
        return Err(SignalError::InvalidSynth("duration shorter than one sample".into()));
    }
    let mut rng = seed::rng(params.seed);
    let mut out = vec![0.0; n];
    let mean_period = 60.0 / params.mean_hr_bpm;

    let mut beat: f64 = -rng.random_range(0.0..mean_period);
    while beat < params.duration_s + mean_period {
        let z: f64 = rng.sample(StandardNormal);
        let period = (mean_period * (1.0 + params.hr_jitter_frac * z)).max(0.35 * mean_period);
        let z: f64 = rng.sample(StandardNormal);
        let amp = (1.0 + params.amp_jitter_frac * z).max(0.1);
        add_pulse(&mut out, fs, beat + 0.18 * period, 0.07 * period, amp);
        add_pulse(&mut out, fs, beat + 0.48 * period, 0.10 * period, 0.45 * amp);
        beat += period;
    }
    if params.noise_std > 0.0 {
        for v in out.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v += params.noise_std * z;
        }
    }
    PpgSignal::new(out, SAMPLE_RATE_HZ, 0, params.class.task())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::normalize_minmax;

    /// Local maxima above half the global range, at least 0.25 s apart.
    fn peak_intervals(x: &[f64], fs: f64) -> Vec<f64> {
        let norm = normalize_minmax(x).unwrap();
        let min_gap = (0.25 * fs) as usize;
        let mut peaks: Vec<usize> = Vec::new();
        for i in 1..norm.len() - 1 {
            if norm[i] > 0.0 && norm[i] >= norm[i - 1] && norm[i] > norm[i + 1] {
                match peaks.last() {
                    Some(&p) if i - p < min_gap => {
                        if norm[i] > norm[p] {
                            *peaks.last_mut().unwrap() = i;
                        }
                    }
                    _ => peaks.push(i),
                }
            }
        }
        peaks.windows(2).map(|w| (w[1] - w[0]) as f64 / fs).collect()
    }

    fn std(v: &[f64]) -> f64 {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
    }

    #[test]
    fn three_minutes_is_11520_samples() {
        let sig = synth_ppg(&SynthParams::preset(Class::NonStress, 1)).unwrap();
        assert_eq!(sig.len(), 11520);
        assert_eq!(sig.sample_rate_hz(), 64);
    }

    #[test]
    fn deterministic_for_seed() {
        let p = SynthParams::preset(Class::Stress, 99);
        assert_eq!(synth_ppg(&p).unwrap(), synth_ppg(&p).unwrap());
        let q = SynthParams { seed: 100, ..p };
        assert_ne!(synth_ppg(&p).unwrap(), synth_ppg(&q).unwrap());
    }

    #[test]
    fn stress_presets_are_more_irregular() {
        let calm = SynthParams::preset(Class::NonStress, 0);
        let stress = SynthParams::preset(Class::Stress, 0);
        assert!(stress.hr_jitter_frac > calm.hr_jitter_frac);
        assert!(stress.amp_jitter_frac > calm.amp_jitter_frac);
        for seed in 0..10 {
            let a = synth_ppg(&SynthParams { seed, ..calm }).unwrap();
            let b = synth_ppg(&SynthParams { seed, ..stress }).unwrap();
            let ia = peak_intervals(a.samples(), 64.0);
            let ib = peak_intervals(b.samples(), 64.0);
            // Roughly one detected peak per beat.
            assert!((ia.len() as f64 - 180.0 * 66.0 / 60.0).abs() < 20.0, "{}", ia.len());
            assert!(std(&ib) > std(&ia), "seed {seed}: {} <= {}", std(&ib), std(&ia));
        }
    }

    #[test]
    fn subject_variants_keep_presets_ordered() {
        for subject in 1..=56 {
            let calm = SynthParams::for_subject(Class::NonStress, subject, 5);
            let stress = SynthParams::for_subject(Class::Stress, subject, 5);
            assert!(stress.hr_jitter_frac > calm.hr_jitter_frac);
            assert!(stress.mean_hr_bpm > calm.mean_hr_bpm);
        }
    }

    #[test]
    fn normalized_output_is_bounded() {
        let sig = synth_ppg(&SynthParams::preset(Class::Stress, 3)).unwrap();
        let norm = normalize_minmax(sig.samples()).unwrap();
        assert!(norm.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn rejects_bad_duration() {
        let p = SynthParams {
            duration_s: 0.0,
            ..SynthParams::preset(Class::Stress, 3)
        };
        assert!(synth_ppg(&p).is_err());
    }
}
