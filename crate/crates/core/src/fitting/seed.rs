//! Initial guesses from a coarse look at the spectrum.

use super::FitConfig;
use crate::spectrum::OdmrSpectrum;

/// Starting point for the double-Lorentzian fit.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedParams {
    pub baseline: f64,
    /// Dip centers, GHz, `centers[0] >= centers[1]`.
    pub centers: [f64; 2],
    /// Fractional dip depths.
    pub depths: [f64; 2],
    pub hwhm_mhz: f64,
    /// Noise of the smoothed spectrum, same units as the values.
    pub noise: f64,
    /// Further separated local minima, deepest first, GHz.
    pub alternates: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Seed {
    Dips(SeedParams),
    /// No dip deeper than `snr_reject_threshold` times the noise.
    RejectedLowSnr {
        baseline: f64,
        noise: f64,
    },
}

/// Baseline from the median of the top quartile, dips from the two deepest
/// local minima of the 3-point smoothed spectrum.
///
/// Two minima count as separate dips only if the smoothed spectrum rises by at
/// least one noise unit between them. A dip must be deeper than
/// `snr_reject_threshold` noise units below the median level.
pub fn seed_estimate(s: &OdmrSpectrum, cfg: &FitConfig) -> Seed {
    let f = s.frequencies();
    let y = s.values();
    let n = y.len();
    let baseline = top_quartile_median(y);
    let sm = smooth3(y);
    let noise = smoothed_noise(y);

    let mut minima: Vec<usize> = (1..n - 1)
        .filter(|&i| sm[i] < sm[i - 1] && sm[i] <= sm[i + 1])
        .collect();
    minima.sort_by(|&a, &b| sm[a].total_cmp(&sm[b]).then(a.cmp(&b)));
    // Depth for the SNR test is measured from the overall median: the top-quartile
    // median sits about one noise unit above the true level.
    let level = median(&mut y.to_vec());
    let floor_depth = cfg.snr_reject_threshold * noise;
    let deep = |i: usize| level - sm[i] > floor_depth && level - sm[i] > 0.0;
    let Some(&first) = minima.first().filter(|&&i| deep(i)) else {
        return Seed::RejectedLowSnr { baseline, noise };
    };
    // Minima separated from the deepest one by a ridge of at least one noise unit.
    let separated: Vec<usize> = minima
        .iter()
        .skip(1)
        .copied()
        .filter(|&j| level - sm[j] > 0.0)
        .filter(|&j| {
            let (lo, hi) = (first.min(j), first.max(j));
            let ridge = sm[lo..=hi].iter().copied().fold(f64::MIN, f64::max);
            ridge - sm[first].max(sm[j]) >= noise.max(f64::MIN_POSITIVE)
        })
        .collect();
    let second = separated.first().copied();

    let hwhm_mhz = half_width_mhz(f, &sm, first, baseline);
    let depth = |i: usize| ((baseline - sm[i]) / baseline).clamp(1e-6, 1.0);
    let half_floor_ghz = 0.5e-3 * cfg.splitting_floor_mhz;
    let (centers, depths, hwhm_mhz) = match second {
        Some(j) => {
            let (hi, lo) = if f[first] >= f[j] {
                (first, j)
            } else {
                (j, first)
            };
            // Blended dips make the half-depth walk overshoot into the neighbor.
            let width = hwhm_mhz.min(0.5e3 * (f[hi] - f[lo]));
            ([f[hi], f[lo]], [depth(hi), depth(lo)], width)
        }
        None => (
            [f[first] + half_floor_ghz, f[first] - half_floor_ghz],
            [depth(first); 2],
            hwhm_mhz,
        ),
    };
    let alternates = separated.iter().skip(1).take(3).map(|&j| f[j]).collect();
    Seed::Dips(SeedParams {
        baseline,
        centers,
        depths,
        hwhm_mhz,
        noise,
        alternates,
    })
}

pub(crate) fn top_quartile_median(y: &[f64]) -> f64 {
    let mut v = y.to_vec();
    v.sort_by(|a, b| b.total_cmp(a));
    let q = v.len().div_ceil(4);
    median_sorted(&v[..q])
}

fn median_sorted(v: &[f64]) -> f64 {
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub(crate) fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    median_sorted(v)
}

fn smooth3(y: &[f64]) -> Vec<f64> {
    let n = y.len();
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(1);
            let hi = (i + 1).min(n - 1);
            y[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect()
}

/// Robust per-sample white-noise level: the MAD of first differences is
/// `sqrt(2) sigma` and insensitive to smooth structure.
pub(crate) fn white_noise(y: &[f64]) -> f64 {
    let mut d: Vec<f64> = y.windows(2).map(|w| w[1] - w[0]).collect();
    let m = median(&mut d);
    let mut dev: Vec<f64> = d.iter().map(|v| (v - m).abs()).collect();
    1.4826 * median(&mut dev) / std::f64::consts::SQRT_2
}

/// Noise of the 3-point mean.
fn smoothed_noise(y: &[f64]) -> f64 {
    white_noise(y) / 3f64.sqrt()
}

/// Half width at half depth of the dip at `i`, MHz, from the smoothed spectrum.
fn half_width_mhz(f: &[f64], sm: &[f64], i: usize, baseline: f64) -> f64 {
    let half = baseline - 0.5 * (baseline - sm[i]);
    let mut lo = i;
    while lo > 0 && sm[lo] < half {
        lo -= 1;
    }
    let mut hi = i;
    while hi + 1 < sm.len() && sm[hi] < half {
        hi += 1;
    }
    let step = (f[f.len() - 1] - f[0]) / (f.len() - 1) as f64;
    // The walk stops one sample past each half-depth crossing.
    (0.5 * (f[hi] - f[lo] - step)).max(0.5 * step) * 1e3
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectrum::{apply_shot_noise, cw_spectrum, linear_axis, LineShapeParams};

    fn line(center: f64, depth: f64) -> LineShapeParams {
        LineShapeParams {
            center,
            hwhm: 0.5,
            depth,
        }
    }

    #[test]
    fn double_dip_seeds_within_one_step() {
        let f = linear_axis(2.860, 2.880, 101);
        let step = f[1] - f[0];
        let s = cw_spectrum(&f, &[line(2.8735, 0.02), line(2.8651, 0.015)], None).unwrap();
        let Seed::Dips(p) = seed_estimate(&s, &FitConfig::default()) else {
            panic!("rejected")
        };
        // Oracle: grid argmin on each side of the midpoint.
        let v = s.values();
        let mid = f.iter().position(|&x| x > 2.8693).unwrap();
        let argmin = |r: std::ops::Range<usize>| r.min_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap();
        assert!((p.centers[0] - f[argmin(mid..f.len())]).abs() <= step);
        assert!((p.centers[1] - f[argmin(0..mid)]).abs() <= step);
        assert!((p.centers[0] - 2.8735).abs() <= step);
        assert!((p.centers[1] - 2.8651).abs() <= step);
        assert!(p.centers[0] > p.centers[1]);
    }

    #[test]
    fn single_dip_is_split_by_floor() {
        let f = linear_axis(2.860, 2.880, 101);
        let s = cw_spectrum(&f, &[line(2.87, 0.03)], None).unwrap();
        let cfg = FitConfig::default();
        let Seed::Dips(p) = seed_estimate(&s, &cfg) else {
            panic!("rejected")
        };
        assert!((p.centers[0] - p.centers[1] - cfg.splitting_floor_mhz * 1e-3).abs() < 1e-12);
        assert!((p.centers[0] + p.centers[1] - 2.0 * 2.87).abs() < 1e-12);
    }

    #[test]
    fn pure_noise_is_rejected() {
        let f = linear_axis(2.860, 2.880, 101);
        let flat = crate::spectrum::OdmrSpectrum::new(
            f,
            vec![1.0; 101],
            crate::spectrum::SpectrumUnit::Contrast,
        )
        .unwrap();
        // The deepest of ~100 smoothed samples exceeds three noise units in
        // roughly one flat spectrum in seven.
        let rejected = (0..400)
            .filter(|&seed| {
                let noisy = apply_shot_noise(&flat, 1e4, seed).unwrap();
                matches!(
                    seed_estimate(&noisy, &FitConfig::default()),
                    Seed::RejectedLowSnr { .. }
                )
            })
            .count();
        assert!(rejected >= 320, "{rejected}");
        assert!(matches!(
            seed_estimate(&flat, &FitConfig::default()),
            Seed::RejectedLowSnr { .. }
        ));
    }

    #[test]
    fn noise_estimate_tracks_poisson_width() {
        let f = linear_axis(2.860, 2.880, 2001);
        let flat = crate::spectrum::OdmrSpectrum::new(
            f,
            vec![1.0; 2001],
            crate::spectrum::SpectrumUnit::Contrast,
        )
        .unwrap();
        let noisy = apply_shot_noise(&flat, 1e4, 9).unwrap();
        let est = smoothed_noise(noisy.values()) * 3f64.sqrt();
        assert!((est / 100.0 - 1.0).abs() < 0.1, "{est}");
    }
}
