use std::collections::BTreeMap;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

/// Dominant period of a row-major `[T, V]` series.
///
/// Each non-constant variable votes for `round(T / k)` where `k` is its
/// largest nonzero DFT bin after mean removal; the most common vote wins,
/// ties go to the shorter period, and the result is clamped to `[2, cap]`.
pub fn dominant_period(series: &[f64], vars: usize, cap: usize) -> Result<usize> {
    if vars == 0 || !series.len().is_multiple_of(vars) {
        return Err(Error::invalid("series length is not a multiple of the variable count"));
    }
    let t = series.len() / vars;
    if t < 4 {
        return Err(Error::invalid(format!("need at least 4 steps to estimate a period, got {t}")));
    }
    let fft = FftPlanner::<f64>::new().plan_fft_forward(t);
    let mut votes: BTreeMap<usize, usize> = BTreeMap::new();
    let mut buf = vec![Complex::new(0.0, 0.0); t];
    for c in 0..vars {
        let mean = (0..t).map(|i| series[i * vars + c]).sum::<f64>() / t as f64;
        for (i, z) in buf.iter_mut().enumerate() {
            *z = Complex::new(series[i * vars + c] - mean, 0.0);
        }
        fft.process(&mut buf);
        let (mut best_k, mut best) = (0, 0.0);
        for (k, z) in buf.iter().enumerate().take(t / 2 + 1).skip(1) {
            let m = z.norm();
            if m > best {
                best = m;
                best_k = k;
            }
        }
        // constant columns have only rounding noise left after mean removal
        let scale = (0..t).map(|i| series[i * vars + c].abs()).fold(0.0, f64::max).max(1.0);
        if best_k == 0 || best <= 1e-9 * scale * t as f64 {
            continue;
        }
        let period = (t as f64 / best_k as f64).round() as usize;
        *votes.entry(period).or_default() += 1;
    }
    let Some(max_votes) = votes.values().copied().max() else {
        return Err(Error::invalid(
            "every variable is constant; no dominant period. Set `period` explicitly",
        ));
    };
    // BTreeMap iterates in ascending period order, so the first maximum is the shortest
    let winner = votes
        .iter()
        .find(|(_, &n)| n == max_votes)
        .map(|(&p, _)| p)
        .expect("nonempty");
    Ok(winner.clamp(2, cap.max(2)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn sine(period: f64, amp: f64) -> impl Fn(usize) -> f64 {
        move |i| amp * (2.0 * PI * i as f64 / period).sin()
    }

    #[test]
    fn single_tone() {
        let s: Vec<f64> = (0..240).map(sine(24.0, 1.0)).collect();
        assert_eq!(dominant_period(&s, 1, 168).unwrap(), 24);
    }

    #[test]
    fn larger_amplitude_wins() {
        let (a, b) = (sine(24.0, 3.0), sine(96.0, 1.0));
        let s: Vec<f64> = (0..960).map(|i| a(i) + b(i)).collect();
        assert_eq!(dominant_period(&s, 1, 168).unwrap(), 24);
        // naive DFT oracle: the strongest nonzero bin is 960 / 24 = 40
        let mag = |k: usize| {
            let (mut re, mut im) = (0.0, 0.0);
            for (i, x) in s.iter().enumerate() {
                let w = 2.0 * PI * (k * i) as f64 / 960.0;
                re += x * w.cos();
                im -= x * w.sin();
            }
            re.hypot(im)
        };
        let best = (1..=480).max_by(|&a, &b| mag(a).total_cmp(&mag(b))).unwrap();
        assert_eq!(best, 40);
    }

    #[test]
    fn vote_ties_and_cap() {
        // two variables disagree: tie goes to the shorter period
        let (a, b) = (sine(24.0, 1.0), sine(48.0, 1.0));
        let s: Vec<f64> = (0..480).flat_map(|i| [a(i), b(i)]).collect();
        assert_eq!(dominant_period(&s, 2, 168).unwrap(), 24);
        let s: Vec<f64> = (0..480).map(sine(240.0, 1.0)).collect();
        assert_eq!(dominant_period(&s, 1, 100).unwrap(), 100);
    }

    #[test]
    fn constant_series_is_an_error() {
        let s = vec![3.0; 100];
        let msg = dominant_period(&s, 2, 168).unwrap_err().to_string();
        assert!(msg.contains("period"), "{msg}");
        // a constant column does not vote
        let a = sine(20.0, 1.0);
        let s: Vec<f64> = (0..200).flat_map(|i| [a(i), 5.0]).collect();
        assert_eq!(dominant_period(&s, 2, 168).unwrap(), 20);
    }
}
