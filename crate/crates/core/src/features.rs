//! Statistical/spectral window descriptors: four time-domain features per
//! channel plus five spectral band energies per physiological channel.

use crate::data::SAMPLE_RATE;
use crate::error::DaganError;
use crate::tensor::Tensor;

/// Band edges in Hz. Membership is lower-inclusive, upper-exclusive, except
/// that the top band also takes the Nyquist bin. The nominal top band runs to
/// 20 Hz, which exceeds the 15 Hz Nyquist of the 30 Hz synchronized data, so
/// it is truncated at 15 Hz.
pub const BANDS: [(f64, f64); 5] = [
    (0.0, 0.04),
    (0.04, 0.15),
    (0.15, 0.5),
    (0.5, 4.0),
    (4.0, 15.0),
];

/// 4 time features per channel + 5 band energies per physiological channel.
pub fn feature_dimension(channel_count: usize, physio_count: usize) -> usize {
    4 * channel_count + 5 * physio_count
}

/// Time-domain stats of one series: [max, min, mean, std] (population std).
pub fn time_stats(x: &[f64]) -> [f64; 4] {
    let n = x.len() as f64;
    let mut max = f64::NEG_INFINITY;
    let mut min = f64::INFINITY;
    let mut sum = 0.0;
    for &v in x {
        max = max.max(v);
        min = min.min(v);
        sum += v;
    }
    let mean = sum / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    [max, min, mean, var.sqrt()]
}

/// Mean-power split of one series into the five bands. Plain DFT of the raw
/// signal; bin m at frequency m*fs/N contributes |X_m|^2/N^2, folded so the
/// five energies sum to mean(x^2).
pub fn band_energies(x: &[f64]) -> [f64; 5] {
    let n = x.len();
    let nf = n as f64;
    let nyquist_bin = n / 2;
    let mut out = [0.0; 5];
    for m in 0..=nyquist_bin {
        let (mut re, mut im) = (0.0, 0.0);
        let w = -2.0 * std::f64::consts::PI * m as f64 / nf;
        for (t, &v) in x.iter().enumerate() {
            let a = w * t as f64;
            re += v * a.cos();
            im += v * a.sin();
        }
        let fold = if m == 0 || (n % 2 == 0 && m == nyquist_bin) {
            1.0
        } else {
            2.0
        };
        let e = fold * (re * re + im * im) / (nf * nf);
        let f = m as f64 * SAMPLE_RATE as f64 / nf;
        for (bi, &(lo, hi)) in BANDS.iter().enumerate() {
            let last = bi == BANDS.len() - 1;
            if f >= lo && (f < hi || (last && f <= hi)) {
                out[bi] += e;
                break;
            }
        }
    }
    out
}

/// Feature vector of a multichannel window given at 30 Hz.
///
/// `window` is [channels x N]; `physio` lists the channel indices that also
/// get spectral features. Layout: per channel [max, min, mean, std] in
/// channel order, then per physiological channel the 5 band energies in
/// ascending band order. For the full 9-channel window this is the
/// 51-dimensional descriptor.
pub fn extract_features(window: &Tensor, physio: &[usize]) -> Result<Vec<f64>, DaganError> {
    if window.ndim() != 2 || window.shape[1] < 2 {
        return Err(DaganError::Shape(format!(
            "feature window must be [channels x N>=2], got {:?}",
            window.shape
        )));
    }
    let ch = window.shape[0];
    let mut out = Vec::with_capacity(feature_dimension(ch, physio.len()));
    for c in 0..ch {
        out.extend_from_slice(&time_stats(window.row(c)));
    }
    for &c in physio {
        out.extend_from_slice(&band_energies(window.row(c)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn window(rows: Vec<Vec<f64>>) -> Tensor {
        let ch = rows.len();
        let n = rows[0].len();
        Tensor::from_vec(&[ch, n], rows.concat()).unwrap()
    }

    #[test]
    fn dimension_arithmetic() {
        assert_eq!(feature_dimension(9, 3), 51);
        assert_eq!(feature_dimension(1, 0), 4);
        assert_eq!(feature_dimension(6, 0), 24);
    }

    #[test]
    fn constant_window() {
        let c = 2.5;
        let w = window(vec![vec![c; 64]]);
        let f = extract_features(&w, &[0]).unwrap();
        assert_eq!(&f[..4], &[c, c, c, 0.0]);
        // DC concentrates in the lowest band
        assert!((f[4] - c * c).abs() < 1e-9);
        assert!(f[5..9].iter().all(|&e| e.abs() < 1e-12));
    }

    #[test]
    fn single_tone_concentrates_in_its_band() {
        // 0.1 Hz sinusoid over 60 s at 30 Hz
        let n = 1800;
        let x: Vec<f64> = (0..n)
            .map(|t| (2.0 * std::f64::consts::PI * 0.1 * t as f64 / 30.0).sin())
            .collect();
        let e = band_energies(&x);
        let total: f64 = e.iter().sum();
        assert!(e[1] / total >= 0.95, "band2 fraction {}", e[1] / total);
    }

    #[test]
    fn parseval_and_naive_dft_oracle() {
        let mut state = 123_456_789_u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as f64 / (1u64 << 31) as f64) - 1.0
        };
        let n = 120;
        let x: Vec<f64> = (0..n).map(|_| next()).collect();

        // naive full-spectrum oracle: all N bins, |X|^2/N^2, bands by frequency
        // with negative frequencies mapped to their positive alias
        let mut oracle = [0.0; 5];
        let mut total = 0.0;
        for m in 0..n {
            let (mut re, mut im) = (0.0, 0.0);
            for (t, &v) in x.iter().enumerate() {
                let a = -2.0 * std::f64::consts::PI * (m * t) as f64 / n as f64;
                re += v * a.cos();
                im += v * a.sin();
            }
            let e = (re * re + im * im) / (n * n) as f64;
            total += e;
            let mut f = m as f64 * 30.0 / n as f64;
            if f > 15.0 {
                f = 30.0 - f;
            }
            for (bi, &(lo, hi)) in BANDS.iter().enumerate() {
                let last = bi == BANDS.len() - 1;
                if f >= lo && (f < hi || (last && f <= hi)) {
                    oracle[bi] += e;
                    break;
                }
            }
        }
        let got = band_energies(&x);
        for (g, o) in got.iter().zip(oracle.iter()) {
            assert!((g - o).abs() < 1e-9, "{g} vs {o}");
        }
        // Parseval: band sum equals mean power
        let mean_power: f64 = x.iter().map(|v| v * v).sum::<f64>() / n as f64;
        assert!((got.iter().sum::<f64>() - mean_power).abs() < 1e-9);
        assert!((total - mean_power).abs() < 1e-9);
    }

    #[test]
    fn scale_equivariance() {
        let x: Vec<f64> = (0..90).map(|t| (t as f64 * 0.37).sin() + 0.2).collect();
        let k = -3.0;
        let xs: Vec<f64> = x.iter().map(|v| v * k).collect();
        let w = window(vec![x]);
        let ws = window(vec![xs]);
        let f = extract_features(&w, &[0]).unwrap();
        let fs = extract_features(&ws, &[0]).unwrap();
        // max/min swap under negative k
        assert!((fs[0] - k * f[1]).abs() < 1e-9);
        assert!((fs[1] - k * f[0]).abs() < 1e-9);
        assert!((fs[2] - k * f[2]).abs() < 1e-9);
        assert!((fs[3] - k.abs() * f[3]).abs() < 1e-9);
        for i in 4..9 {
            assert!((fs[i] - k * k * f[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn too_short_window_rejected() {
        let w = window(vec![vec![1.0]]);
        assert!(extract_features(&w, &[]).is_err());
    }
}
