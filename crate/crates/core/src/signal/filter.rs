//! Chebyshev type II band-pass design as cascaded second-order sections.
//!
//! The design path is the classic one: analog low-pass prototype with unit
//! stopband edge, low-pass to band-pass transform on prewarped edges, then the
//! bilinear transform. Poles and zeros are paired into biquads, nearest zero
//! to each pole, starting from the pole farthest from the unit circle.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::{PpgSignal, SignalError};

/// Design parameters. `low_hz` and `high_hz` are the stopband edges, where
/// the response first reaches `-stop_atten_db`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cheby2Bandpass {
    /// Prototype order; the band-pass has twice as many poles.
    pub order: usize,
    pub low_hz: f64,
    pub high_hz: f64,
    pub stop_atten_db: f64,
}

impl Default for Cheby2Bandpass {
    fn default() -> Self {
        Self {
            order: 4,
            low_hz: 0.2,
            high_hz: 12.0,
            stop_atten_db: 40.0,
        }
    }
}

/// One section, `b0 + b1 z^-1 + b2 z^-2` over `1 + a1 z^-1 + a2 z^-2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

impl Biquad {
    fn response(&self, z_inv: Complex64) -> Complex64 {
        let z2 = z_inv * z_inv;
        let num = self.b[0] + z_inv * self.b[1] + z2 * self.b[2];
        let den = Complex64::new(1.0, 0.0) + z_inv * self.a[0] + z2 * self.a[1];
        num / den
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SosFilter {
    pub sections: Vec<Biquad>,
    pub sample_rate_hz: f64,
}

impl SosFilter {
    /// Filters `x` from zero initial conditions (transposed direct form II).
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = x.to_vec();
        for s in &self.sections {
            let (mut z1, mut z2) = (0.0, 0.0);
            for v in y.iter_mut() {
                let input = *v;
                let out = s.b[0] * input + z1;
                z1 = s.b[1] * input - s.a[0] * out + z2;
                z2 = s.b[2] * input - s.a[1] * out;
                *v = out;
            }
        }
        y
    }

    /// Complex response at `freq_hz`.
    pub fn response(&self, freq_hz: f64) -> Complex64 {
        let omega = 2.0 * PI * freq_hz / self.sample_rate_hz;
        let z_inv = Complex64::from_polar(1.0, -omega);
        self.sections
            .iter()
            .fold(Complex64::new(1.0, 0.0), |acc, s| acc * s.response(z_inv))
    }

    pub fn magnitude(&self, freq_hz: f64) -> f64 {
        self.response(freq_hz).norm()
    }
}

struct Zpk {
    zeros: Vec<Complex64>,
    poles: Vec<Complex64>,
    gain: f64,
}

impl Cheby2Bandpass {
    pub fn design(&self, sample_rate_hz: f64) -> Result<SosFilter, SignalError> {
        let nyquist_hz = sample_rate_hz / 2.0;
        if !(self.low_hz > 0.0 && self.low_hz < self.high_hz && self.high_hz < nyquist_hz) {
            return Err(SignalError::InvalidBand {
                low_hz: self.low_hz,
                high_hz: self.high_hz,
                nyquist_hz,
            });
        }
        if self.order < 2 || !self.order.is_multiple_of(2) {
            return Err(SignalError::InvalidOrder(self.order));
        }
        if self.stop_atten_db.is_nan() || self.stop_atten_db <= 0.0 {
            return Err(SignalError::InvalidAttenuation(self.stop_atten_db));
        }

        let warp = |f: f64| 2.0 * sample_rate_hz * (PI * f / sample_rate_hz).tan();
        let (w_lo, w_hi) = (warp(self.low_hz), warp(self.high_hz));
        let proto = prototype(self.order, self.stop_atten_db);
        let analog = lowpass_to_bandpass(proto, (w_lo * w_hi).sqrt(), w_hi - w_lo);
        let digital = bilinear(analog, sample_rate_hz);
        Ok(SosFilter {
            sections: to_sections(digital),
            sample_rate_hz,
        })
    }
}

/// Analog Chebyshev-II low-pass prototype with stopband edge at 1 rad/s.
fn prototype(order: usize, stop_atten_db: f64) -> Zpk {
    let n = order as f64;
    let eps = 1.0 / (10f64.powf(0.1 * stop_atten_db) - 1.0).sqrt();
    let mu = (1.0 / eps).asinh() / n;
    let j = Complex64::new(0.0, 1.0);

    // Even order: m runs over -N+1, -N+3, ..., N-1 and never hits zero.
    let ms: Vec<f64> = (0..order).map(|i| -n + 1.0 + 2.0 * i as f64).collect();
    let zeros: Vec<Complex64> = ms
        .iter()
        .map(|&m| -(j / (m * PI / (2.0 * n)).sin()).conj())
        .collect();
    let poles: Vec<Complex64> = ms
        .iter()
        .map(|&m| {
            let p = -(j * PI * m / (2.0 * n)).exp();
            let warped = Complex64::new(mu.sinh() * p.re, mu.cosh() * p.im);
            Complex64::new(1.0, 0.0) / warped
        })
        .collect();
    let num: Complex64 = poles.iter().map(|p| -p).product();
    let den: Complex64 = zeros.iter().map(|z| -z).product();
    Zpk {
        gain: (num / den).re,
        zeros,
        poles,
    }
}

fn lowpass_to_bandpass(lp: Zpk, center: f64, bandwidth: f64) -> Zpk {
    let degree = lp.poles.len() - lp.zeros.len();
    let w0_sq = Complex64::new(center * center, 0.0);
    let split = |roots: &[Complex64]| -> Vec<Complex64> {
        let scaled: Vec<Complex64> = roots.iter().map(|r| r * (bandwidth / 2.0)).collect();
        let mut out: Vec<Complex64> = scaled.iter().map(|r| r + (r * r - w0_sq).sqrt()).collect();
        out.extend(scaled.iter().map(|r| r - (r * r - w0_sq).sqrt()));
        out
    };
    let mut zeros = split(&lp.zeros);
    zeros.extend(std::iter::repeat_n(Complex64::new(0.0, 0.0), degree));
    Zpk {
        zeros,
        poles: split(&lp.poles),
        gain: lp.gain * bandwidth.powi(degree as i32),
    }
}

fn bilinear(analog: Zpk, sample_rate_hz: f64) -> Zpk {
    let fs2 = Complex64::new(2.0 * sample_rate_hz, 0.0);
    let degree = analog.poles.len() - analog.zeros.len();
    let map = |s: &Complex64| (fs2 + s) / (fs2 - s);
    let mut zeros: Vec<Complex64> = analog.zeros.iter().map(map).collect();
    zeros.extend(std::iter::repeat_n(Complex64::new(-1.0, 0.0), degree));
    let num: Complex64 = analog.zeros.iter().map(|z| fs2 - z).product();
    let den: Complex64 = analog.poles.iter().map(|p| fs2 - p).product();
    Zpk {
        zeros,
        poles: analog.poles.iter().map(map).collect(),
        gain: analog.gain * (num / den).re,
    }
}

/// Monic quadratic factors `[c1, c2]` of `z^2 + c1 z + c2` covering `roots`.
/// Complex roots are taken as conjugate pairs; real roots pair in order.
fn quadratic_factors(roots: &[Complex64]) -> Vec<(Complex64, [f64; 2])> {
    const IMAG_TOL: f64 = 1e-10;
    let mut factors = Vec::new();
    let mut reals = Vec::new();
    for r in roots {
        if r.im > IMAG_TOL {
            factors.push((*r, [-2.0 * r.re, r.norm_sqr()]));
        } else if r.im.abs() <= IMAG_TOL {
            reals.push(r.re);
        }
    }
    for pair in reals.chunks(2) {
        match *pair {
            [a, b] => factors.push((Complex64::new(a, 0.0), [-(a + b), a * b])),
            [a] => factors.push((Complex64::new(a, 0.0), [-a, 0.0])),
            _ => unreachable!(),
        }
    }
    factors
}

fn to_sections(zpk: Zpk) -> Vec<Biquad> {
    let mut poles = quadratic_factors(&zpk.poles);
    let mut zeros = quadratic_factors(&zpk.zeros);
    // Farthest-from-circle poles first so the sharpest resonances come last.
    poles.sort_by(|a, b| a.0.norm().total_cmp(&b.0.norm()));

    let mut sections = Vec::with_capacity(poles.len());
    for (pole, a) in poles {
        let b = if zeros.is_empty() {
            [1.0, 0.0, 0.0]
        } else {
            let (idx, _) = zeros
                .iter()
                .enumerate()
                .min_by(|x, y| (x.1 .0 - pole).norm().total_cmp(&(y.1 .0 - pole).norm()))
                .expect("non-empty");
            let (_, c) = zeros.swap_remove(idx);
            [1.0, c[0], c[1]]
        };
        sections.push(Biquad { b, a });
    }
    if let Some(first) = sections.first_mut() {
        for coeff in first.b.iter_mut() {
            *coeff *= zpk.gain;
        }
    }
    sections
}

/// Band-pass filters a recording with a Chebyshev-II cascade.
pub fn chebyshev2_bandpass(
    signal: &PpgSignal,
    order: usize,
    low_hz: f64,
    high_hz: f64,
    stop_atten_db: f64,
) -> Result<PpgSignal, SignalError> {
    let design = Cheby2Bandpass {
        order,
        low_hz,
        high_hz,
        stop_atten_db,
    };
    let filter = design.design(signal.sample_rate_hz() as f64)?;
    signal.with_samples(filter.apply(signal.samples()))
}
