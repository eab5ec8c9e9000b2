//! Continuous-wave ODMR spectra: Lorentzian contrast dips, 14N hyperfine
//! triplets and Poisson shot noise.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

use crate::error::{Error, Result};
use crate::spin_model::{
    hyperfine_resonances, transition_frequencies_approx, PhysicalConstants, SpinParameters,
};

pub const MIN_SAMPLES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpectrumUnit {
    /// Fluorescence normalized to the off-resonance level.
    Contrast,
    /// Detected photons per frequency point.
    Counts,
}

/// A sampled ODMR spectrum for one pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct OdmrSpectrum {
    frequencies: Vec<f64>,
    values: Vec<f64>,
    unit: SpectrumUnit,
}

impl OdmrSpectrum {
    pub fn new(frequencies: Vec<f64>, values: Vec<f64>, unit: SpectrumUnit) -> Result<Self> {
        if frequencies.len() != values.len() {
            return Err(Error::InvalidArgument(format!(
                "{} frequencies but {} values",
                frequencies.len(),
                values.len()
            )));
        }
        if frequencies.len() < MIN_SAMPLES {
            return Err(Error::InvalidArgument(format!(
                "spectrum needs at least {MIN_SAMPLES} samples, got {}",
                frequencies.len()
            )));
        }
        if !frequencies.iter().all(|f| f.is_finite())
            || frequencies.windows(2).any(|w| w[1] <= w[0])
        {
            return Err(Error::InvalidArgument(
                "frequencies must be finite and strictly ascending".into(),
            ));
        }
        let ok = match unit {
            SpectrumUnit::Contrast => values.iter().all(|&v| v > 0.0 && v <= 1.05),
            SpectrumUnit::Counts => values.iter().all(|&v| v >= 0.0 && v.is_finite()),
        };
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "spectrum values out of range for {unit:?}"
            )));
        }
        Ok(Self {
            frequencies,
            values,
            unit,
        })
    }

    pub fn frequencies(&self) -> &[f64] {
        &self.frequencies
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn unit(&self) -> SpectrumUnit {
        self.unit
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// The samples with `lo <= f <= hi`.
    pub fn window(&self, lo: f64, hi: f64) -> Result<Self> {
        let (f, v): (Vec<f64>, Vec<f64>) = self
            .frequencies
            .iter()
            .zip(&self.values)
            .filter(|(f, _)| **f >= lo && **f <= hi)
            .map(|(f, v)| (*f, *v))
            .unzip();
        Self::new(f, v, self.unit)
    }
}

/// Shape of a single resonance dip.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineShapeParams {
    /// GHz.
    pub center: f64,
    /// Half-width at half-maximum, MHz.
    pub hwhm: f64,
    /// Contrast amplitude in (0, 1).
    pub depth: f64,
}

impl LineShapeParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.center.is_finite()
            && self.hwhm > 0.0
            && self.hwhm.is_finite()
            && self.depth > 0.0
            && self.depth < 1.0)
        {
            return Err(Error::InvalidParameter(format!("bad line shape {self:?}")));
        }
        Ok(())
    }
}

/// Peak-normalized Lorentzian dip `A g^2 / ((f - f0)^2 + g^2)`.
#[inline]
pub fn lorentzian_dip(f: f64, p: &LineShapeParams) -> f64 {
    let g = p.hwhm * 1e-3;
    let d = f - p.center;
    p.depth * g * g / (d * d + g * g)
}

/// Expand each line into an equal-weight triplet at `center` and `center +- splitting`.
pub fn hyperfine_triplets(lines: &[LineShapeParams], splitting_mhz: f64) -> Vec<LineShapeParams> {
    let s = splitting_mhz * 1e-3;
    lines
        .iter()
        .flat_map(|l| {
            [-s, 0.0, s].map(|off| LineShapeParams {
                center: l.center + off,
                depth: l.depth / 3.0,
                ..*l
            })
        })
        .collect()
}

/// Contrast spectrum `1 - sum of dips` on `freq_axis` (GHz).
pub fn cw_spectrum(
    freq_axis: &[f64],
    lines: &[LineShapeParams],
    hyperfine_mhz: Option<f64>,
) -> Result<OdmrSpectrum> {
    if lines.is_empty() {
        return Err(Error::InvalidArgument(
            "cw_spectrum needs at least one line".into(),
        ));
    }
    for l in lines {
        l.validate()?;
    }
    let expanded;
    let lines = match hyperfine_mhz {
        Some(s) => {
            expanded = hyperfine_triplets(lines, s);
            &expanded[..]
        }
        None => lines,
    };
    let values = freq_axis.iter().map(|&f| contrast_at(f, lines)).collect();
    OdmrSpectrum::new(freq_axis.to_vec(), values, SpectrumUnit::Contrast)
}

#[inline]
pub(crate) fn contrast_at(f: f64, lines: &[LineShapeParams]) -> f64 {
    1.0 - lines.iter().map(|l| lorentzian_dip(f, l)).sum::<f64>()
}

/// Dips of one NV (or an unresolved group) with the given resonance shape.
///
/// Without hyperfine structure this is one dip per transition. With it, each
/// nuclear projection `m_I` contributes its own pair at a third of the depth, so
/// that the outer lines coincide at zero field while the inner pair is split by strain.
pub fn spin_lines(
    p: &SpinParameters,
    c: &PhysicalConstants,
    depth: f64,
    hwhm_mhz: f64,
    hyperfine: bool,
) -> Result<Vec<LineShapeParams>> {
    let line = |center, depth| LineShapeParams {
        center,
        hwhm: hwhm_mhz,
        depth,
    };
    if hyperfine {
        Ok(hyperfine_resonances(p, c)?
            .iter()
            .flat_map(|(_, r)| {
                [
                    line(r.omega_plus, depth / 3.0),
                    line(r.omega_minus, depth / 3.0),
                ]
            })
            .collect())
    } else {
        let r = transition_frequencies_approx(p, c)?;
        Ok(vec![line(r.omega_plus, depth), line(r.omega_minus, depth)])
    }
}

/// Draw Poisson photon counts with mean `photons_per_point * contrast`.
pub fn apply_shot_noise(
    s: &OdmrSpectrum,
    photons_per_point: f64,
    seed: u64,
) -> Result<OdmrSpectrum> {
    if s.unit != SpectrumUnit::Contrast {
        return Err(Error::InvalidArgument(
            "shot noise applies to contrast spectra".into(),
        ));
    }
    if !(photons_per_point > 0.0 && photons_per_point.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "photons_per_point must be positive, got {photons_per_point}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = s
        .values
        .iter()
        .map(|&c| poisson_draw(photons_per_point * c, &mut rng))
        .collect();
    OdmrSpectrum::new(s.frequencies.clone(), values, SpectrumUnit::Counts)
}

#[inline]
pub(crate) fn poisson_draw<R: rand::Rng>(mean: f64, rng: &mut R) -> f64 {
    if mean > 0.0 {
        Poisson::new(mean)
            .expect("positive finite mean")
            .sample(rng)
    } else {
        0.0
    }
}

/// Uniform axis of `n` points from `start` to `stop` inclusive, GHz.
pub fn linear_axis(start: f64, stop: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![start];
    }
    let step = (stop - start) / (n - 1) as f64;
    (0..n).map(|i| start + step * i as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::Vector3;

    fn line(center: f64) -> LineShapeParams {
        LineShapeParams {
            center,
            hwhm: 0.5,
            depth: 0.02,
        }
    }

    #[test]
    fn dip_shape() {
        let l = line(2.87);
        assert_eq!(lorentzian_dip(2.87, &l), 0.02);
        assert_abs_diff_eq!(lorentzian_dip(2.8705, &l), 0.01, epsilon = 1e-13);
        assert_abs_diff_eq!(lorentzian_dip(2.8695, &l), 0.01, epsilon = 1e-13);
        assert!(lorentzian_dip(1e6, &l) < 1e-15);
        assert!(lorentzian_dip(-1e6, &l) < 1e-15);
    }

    #[test]
    fn spectrum_validation() {
        let f = linear_axis(2.86, 2.88, 10);
        assert!(OdmrSpectrum::new(f.clone(), vec![1.0; 9], SpectrumUnit::Contrast).is_err());
        assert!(OdmrSpectrum::new(f[..7].to_vec(), vec![1.0; 7], SpectrumUnit::Contrast).is_err());
        let mut rev = f.clone();
        rev.swap(2, 3);
        assert!(OdmrSpectrum::new(rev, vec![1.0; 10], SpectrumUnit::Contrast).is_err());
        assert!(OdmrSpectrum::new(f.clone(), vec![1.2; 10], SpectrumUnit::Contrast).is_err());
        assert!(OdmrSpectrum::new(f.clone(), vec![-1.0; 10], SpectrumUnit::Counts).is_err());
        assert!(OdmrSpectrum::new(f, vec![3.0; 10], SpectrumUnit::Counts).is_ok());
    }

    #[test]
    fn single_line_minimum_at_center() {
        let axis = linear_axis(2.86, 2.88, 201);
        let s = cw_spectrum(&axis, &[line(2.8713)], None).unwrap();
        let (imin, _) = s
            .values()
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .unwrap();
        assert!((axis[imin] - 2.8713).abs() <= 0.5e-4);
        assert!(cw_spectrum(&axis, &[], None).is_err());
    }

    fn local_minima(v: &[f64]) -> Vec<usize> {
        (1..v.len() - 1)
            .filter(|&i| v[i] < v[i - 1] && v[i] < v[i + 1])
            .collect()
    }

    #[test]
    fn double_dip_from_split_resonances() {
        let c = PhysicalConstants::default();
        let p = SpinParameters::from_strain(1e-4, 1e-4, Vector3::zeros(), &c);
        let lines = spin_lines(&p, &c, 0.02, 0.5, false).unwrap();
        let axis = linear_axis(2.86, 2.885, 501);
        let s = cw_spectrum(&axis, &lines, None).unwrap();
        let minima = local_minima(s.values());
        assert_eq!(minima.len(), 2);
        let split = axis[minima[1]] - axis[minima[0]];
        // Overlapping tails pull the minima slightly inward of 2 E_perp.
        assert!((split - 2.0 * 2.06e-3).abs() < 0.2e-3, "split {split}");
    }

    #[test]
    fn hyperfine_zero_field_structure() {
        // Four distinct dips: the degenerate outer pairs plus the strain-split inner pair.
        let c = PhysicalConstants::default();
        let p = SpinParameters::from_strain(0.0, 1.9e-5, Vector3::zeros(), &c);
        let lines = spin_lines(&p, &c, 0.03, 0.15, true).unwrap();
        assert_eq!(lines.len(), 6);
        assert_eq!(lines[0].center, lines[4].center);
        assert_eq!(lines[1].center, lines[5].center);
        let axis = linear_axis(2.865, 2.875, 2001);
        let s = cw_spectrum(&axis, &lines, None).unwrap();
        assert_eq!(local_minima(s.values()).len(), 4);

        // Unstrained: the inner pair merges too.
        let p = SpinParameters::zero_field(&c);
        let lines = spin_lines(&p, &c, 0.03, 0.15, true).unwrap();
        let s = cw_spectrum(&axis, &lines, None).unwrap();
        assert_eq!(local_minima(s.values()).len(), 3);
    }

    #[test]
    fn hyperfine_triplet_preserves_area() {
        // Integrate over the whole line with f = f0 + w tan(theta), midpoint rule in theta,
        // so the Lorentzian tails are included.
        let n = 200_000;
        let (f0, w) = (2.872, 2e-3);
        let dtheta = std::f64::consts::PI / n as f64;
        let thetas: Vec<f64> = (0..n)
            .map(|i| -std::f64::consts::FRAC_PI_2 + (i as f64 + 0.5) * dtheta)
            .collect();
        let axis: Vec<f64> = thetas.iter().map(|t| f0 + w * t.tan()).collect();
        let jac: Vec<f64> = thetas
            .iter()
            .map(|t| w * dtheta / t.cos().powi(2))
            .collect();
        let lines = [
            line(2.87),
            LineShapeParams {
                center: 2.874,
                hwhm: 0.8,
                depth: 0.01,
            },
        ];
        // Sum the dips directly: `1 - contrast` cancels catastrophically in the far tails.
        let area = |ls: &[LineShapeParams]| {
            axis.iter()
                .zip(&jac)
                .map(|(f, j)| ls.iter().map(|l| lorentzian_dip(*f, l)).sum::<f64>() * j)
                .sum::<f64>()
        };
        let exact = std::f64::consts::PI * (0.02 * 0.5e-3 + 0.01 * 0.8e-3);
        assert!((area(&lines) - exact).abs() / exact < 1e-9);
        let (a, b) = (area(&lines), area(&hyperfine_triplets(&lines, 2.16)));
        assert!(((a - b) / a).abs() < 1e-9, "{a} vs {b}");
    }

    #[test]
    fn shot_noise_deterministic_and_unbiased() {
        let axis = linear_axis(2.86, 2.88, 64);
        let s = cw_spectrum(&axis, &[line(2.87)], None).unwrap();
        let a = apply_shot_noise(&s, 1e4, 11).unwrap();
        let b = apply_shot_noise(&s, 1e4, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.unit(), SpectrumUnit::Counts);
        assert_ne!(a, apply_shot_noise(&s, 1e4, 12).unwrap());

        let big = apply_shot_noise(&s, 1e7, 3).unwrap();
        for (n, c) in big.values().iter().zip(s.values()) {
            assert!((n / 1e7 - c).abs() / c < 1e-3);
        }
        assert!(apply_shot_noise(&s, 0.0, 1).is_err());
    }

    #[test]
    fn shot_noise_poisson_mean() {
        let axis = linear_axis(2.0, 3.0, 1000);
        let flat = OdmrSpectrum::new(axis, vec![1.0; 1000], SpectrumUnit::Contrast).unwrap();
        let noisy = apply_shot_noise(&flat, 100.0, 99).unwrap();
        let mean = noisy.values().iter().sum::<f64>() / 1000.0;
        // 5 sigma of the sample mean: 5 * sqrt(100) / sqrt(1000).
        assert!((mean - 100.0).abs() < 5.0 * 10.0 / 1000f64.sqrt());
    }

    #[test]
    fn shot_noise_variance_matches_mean() {
        let axis = linear_axis(2.86, 2.88, 8);
        let s = cw_spectrum(&axis, &[line(2.87)], None).unwrap();
        let n = 10_000;
        let mut sum = [0.0; 8];
        let mut sum2 = [0.0; 8];
        for seed in 0..n {
            let r = apply_shot_noise(&s, 50.0, seed).unwrap();
            for (i, v) in r.values().iter().enumerate() {
                sum[i] += v;
                sum2[i] += v * v;
            }
        }
        for i in 0..8 {
            let mean = sum[i] / n as f64;
            let var = sum2[i] / n as f64 - mean * mean;
            assert!(
                (var / mean - 1.0).abs() < 0.1,
                "point {i}: mean {mean} var {var}"
            );
        }
    }
}
