//! Per-pixel double-Lorentzian fitting with covariance-based confidence intervals.
//!
//! The model is `baseline * (1 - A+ L(f; c + h, w+) - A- L(f; c - h, w-))` with
//! `L` a unit-height Lorentzian, parameterized by center `c` and half-splitting
//! `h >= splitting_floor / 2`. By default both dips share one width. Widths are
//! bounded below by the frequency step and above by a sixth of the sweep, so a
//! dip can neither collapse onto one sample nor flatten into the baseline.
//! Internally frequencies are MHz relative to the mean of the axis.

mod lm;
mod seed;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectrum::OdmrSpectrum;
use crate::stack::ImageStack;
use lm::{levenberg_marquardt, linearize, LmSettings, Model};

pub(crate) use seed::{median, white_noise};
pub use seed::{seed_estimate, Seed, SeedParams};

/// Minimum spectrum length: up to seven parameters plus five degrees of freedom.
pub const MIN_FIT_SAMPLES: usize = 12;

/// Depth ratio below which the weaker of two fitted dips is treated as absent.
pub const MIN_DEPTH_RATIO: f64 = 0.02;

/// Standard errors a dip depth must exceed to count as a line.
pub const MIN_LINE_SIGNIFICANCE: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SeedStrategy {
    /// One fit from the smoothed-minima seed.
    Smoothed,
    /// Also pair the deepest minimum with each further separated minimum and
    /// try a collapsed pair; keep the lowest cost.
    MultiStart,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub step_tolerance: f64,
    /// Reject when the deepest dip is shallower than this many noise units.
    pub snr_reject_threshold: f64,
    /// Smallest resolvable full splitting `omega+ - omega-`, MHz.
    pub splitting_floor_mhz: f64,
    pub seed_strategy: SeedStrategy,
    pub linewidth: Linewidth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Linewidth {
    /// One width for both dips (six parameters).
    Shared,
    /// A width per dip (seven parameters).
    Independent,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_iterations: 1000,
            gradient_tolerance: 1e-10,
            step_tolerance: 1e-10,
            snr_reject_threshold: 3.0,
            splitting_floor_mhz: 0.3,
            seed_strategy: SeedStrategy::MultiStart,
            linewidth: Linewidth::Shared,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if self.max_iterations == 0
            || !positive(self.gradient_tolerance)
            || !positive(self.step_tolerance)
            || !positive(self.splitting_floor_mhz)
            || !(self.snr_reject_threshold >= 0.0)
        {
            return Err(Error::InvalidParameter(
                "fit tolerances, iteration limit and splitting floor must be positive".into(),
            ));
        }
        Ok(())
    }

    fn lm(&self) -> LmSettings {
        LmSettings {
            max_iterations: self.max_iterations,
            gradient_tolerance: self.gradient_tolerance,
            step_tolerance: self.step_tolerance,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitStatus {
    Converged,
    MaxIter,
    DegenerateSingleDip,
    RejectedLowSnr,
}

impl FitStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Converged => "converged",
            Self::MaxIter => "max-iter",
            Self::DegenerateSingleDip => "degenerate-single-dip",
            Self::RejectedLowSnr => "rejected-low-snr",
        }
    }

    /// Statuses whose resonances are usable for strain maps.
    pub fn is_valid(self) -> bool {
        matches!(self, Self::Converged | Self::DegenerateSingleDip)
    }
}

impl std::str::FromStr for FitStatus {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            Self::Converged,
            Self::MaxIter,
            Self::DegenerateSingleDip,
            Self::RejectedLowSnr,
        ]
        .into_iter()
        .find(|v| v.as_str() == s)
        .ok_or_else(|| Error::Format(format!("unknown fit status {s:?}")))
    }
}

/// Outcome of one spectrum fit.
///
/// Parameters, in covariance order, are `[baseline, center, half_splitting,
/// depth+, depth-, hwhm+, hwhm-]` for double-dip fits and `[baseline, center,
/// depth, hwhm]` for single-dip fits. Frequencies in the covariance and
/// `ci68` are MHz.
#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    /// GHz.
    pub omega_plus: f64,
    pub omega_minus: f64,
    pub depths: [f64; 2],
    /// MHz.
    pub hwhms: [f64; 2],
    pub baseline: f64,
    pub covariance: DMatrix<f64>,
    pub ci68: Vec<f64>,
    pub residual_norm: f64,
    pub iterations: usize,
    pub status: FitStatus,
}

impl FitResult {
    pub fn center(&self) -> f64 {
        0.5 * (self.omega_plus + self.omega_minus)
    }

    pub fn half_splitting(&self) -> f64 {
        0.5 * (self.omega_plus - self.omega_minus)
    }

    /// 68% half-widths of `(omega+, omega-)`, GHz. `None` without a covariance.
    pub fn resonance_ci(&self) -> Option<(f64, f64)> {
        let c = &self.covariance;
        let (plus, minus) = match c.nrows() {
            6 | 7 => {
                let (vc, vh, cch) = (c[(1, 1)], c[(2, 2)], c[(1, 2)]);
                (vc + vh + 2.0 * cch, vc + vh - 2.0 * cch)
            }
            4 => (c[(1, 1)], c[(1, 1)]),
            _ => return None,
        };
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        (ok(plus) && ok(minus)).then(|| (plus.sqrt() * 1e-3, minus.sqrt() * 1e-3))
    }

    /// Mean of the two per-resonance CIs, GHz.
    pub fn mean_resonance_ci(&self) -> Option<f64> {
        self.resonance_ci().map(|(a, b)| 0.5 * (a + b))
    }

    /// 68% half-widths of `(center, half_splitting)`, GHz.
    pub fn center_split_ci(&self) -> Option<(f64, f64)> {
        let c = &self.covariance;
        let (vc, vh) = match c.nrows() {
            6 | 7 => (c[(1, 1)], c[(2, 2)]),
            4 => (c[(1, 1)], 0.0),
            _ => return None,
        };
        (vc.is_finite() && vh.is_finite() && vc >= 0.0 && vh >= 0.0)
            .then(|| (vc.sqrt() * 1e-3, vh.sqrt() * 1e-3))
    }

    /// Resonances, their intervals and the status, as consumed by strain maps.
    pub fn record(&self) -> ResonanceRecord {
        let (ci_plus, ci_minus) = self.resonance_ci().unwrap_or((f64::NAN, f64::NAN));
        ResonanceRecord {
            omega_plus: self.omega_plus,
            omega_minus: self.omega_minus,
            ci_plus,
            ci_minus,
            status: self.status,
        }
    }

    fn rejected(baseline: f64, residual_norm: f64) -> Self {
        Self {
            omega_plus: f64::NAN,
            omega_minus: f64::NAN,
            depths: [0.0; 2],
            hwhms: [f64::NAN; 2],
            baseline,
            covariance: DMatrix::zeros(0, 0),
            ci68: Vec::new(),
            residual_norm,
            iterations: 0,
            status: FitStatus::RejectedLowSnr,
        }
    }
}

/// The part of a fit that strain maps use. All frequencies in GHz.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResonanceRecord {
    pub omega_plus: f64,
    pub omega_minus: f64,
    /// 68% half-widths of the two resonances; NaN without a covariance.
    pub ci_plus: f64,
    pub ci_minus: f64,
    pub status: FitStatus,
}

impl ResonanceRecord {
    pub fn center(&self) -> f64 {
        0.5 * (self.omega_plus + self.omega_minus)
    }

    pub fn half_splitting(&self) -> f64 {
        0.5 * (self.omega_plus - self.omega_minus)
    }

    /// Mean resonance CI of a usable fit.
    pub fn usable_ci(&self) -> Option<f64> {
        let ci = 0.5 * (self.ci_plus + self.ci_minus);
        (self.status.is_valid() && ci.is_finite() && ci >= 0.0).then_some(ci)
    }
}

/// Resonance records on a spatial grid in `(z, y, x)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct ResonanceGrid {
    pub n_z: usize,
    pub n_y: usize,
    pub n_x: usize,
    pub pixel_size_nm: f64,
    pub z_offsets_um: Vec<f64>,
    pub total_time_s: f64,
    pub records: Vec<ResonanceRecord>,
}

#[derive(Debug, Clone, Copy)]
struct Bounds {
    c: (f64, f64),
    h: (f64, f64),
    w: (f64, f64),
}

struct DoubleDip {
    bounds: Bounds,
    shared: bool,
}
struct SingleDip(Bounds);

/// Unit Lorentzian and its derivatives with respect to center and width.
#[inline]
fn lorentzian(x: f64, x0: f64, w: f64) -> (f64, f64, f64) {
    let u = x - x0;
    let w2 = w * w;
    let d = u * u + w2;
    let l = w2 / d;
    let d2 = d * d;
    (l, 2.0 * w2 * u / d2, 2.0 * w * u * u / d2)
}

impl Model for DoubleDip {
    fn n_params(&self) -> usize {
        if self.shared {
            6
        } else {
            7
        }
    }

    fn eval(&self, p: &[f64], x: f64, g: &mut [f64]) -> f64 {
        let [b, c, h, a1, a2, w1] = [p[0], p[1], p[2], p[3], p[4], p[5]];
        let w2 = if self.shared { w1 } else { p[6] };
        let (l1, l1c, l1w) = lorentzian(x, c + h, w1);
        let (l2, l2c, l2w) = lorentzian(x, c - h, w2);
        let shape = 1.0 - a1 * l1 - a2 * l2;
        g[0] = shape;
        g[1] = -b * (a1 * l1c + a2 * l2c);
        g[2] = -b * (a1 * l1c - a2 * l2c);
        g[3] = -b * l1;
        g[4] = -b * l2;
        if self.shared {
            g[5] = -b * (a1 * l1w + a2 * l2w);
        } else {
            g[5] = -b * a1 * l1w;
            g[6] = -b * a2 * l2w;
        }
        b * shape
    }

    fn bounds(&self) -> Vec<(f64, f64)> {
        let b = &self.bounds;
        let mut v = vec![
            (f64::MIN_POSITIVE, f64::INFINITY),
            b.c,
            b.h,
            (0.0, 1.0),
            (0.0, 1.0),
            b.w,
        ];
        if !self.shared {
            v.push(b.w);
        }
        v
    }
}

impl Model for SingleDip {
    fn n_params(&self) -> usize {
        4
    }

    fn eval(&self, p: &[f64], x: f64, g: &mut [f64]) -> f64 {
        let [b, c, a, w] = [p[0], p[1], p[2], p[3]];
        let (l, lc, lw) = lorentzian(x, c, w);
        let shape = 1.0 - a * l;
        g[0] = shape;
        g[1] = -b * a * lc;
        g[2] = -b * l;
        g[3] = -b * a * lw;
        b * shape
    }

    fn bounds(&self) -> Vec<(f64, f64)> {
        let b = &self.0;
        vec![(f64::MIN_POSITIVE, f64::INFINITY), b.c, (0.0, 1.0), b.w]
    }
}

/// Fit one spectrum (contrast or counts) with a double Lorentzian.
///
/// Low-SNR spectra and failures of the normal matrix are reported through
/// [`FitResult::status`]; only malformed input is an error.
pub fn fit_double_lorentzian(s: &OdmrSpectrum, cfg: &FitConfig) -> Result<FitResult> {
    cfg.validate()?;
    if s.len() < MIN_FIT_SAMPLES {
        return Err(Error::InvalidArgument(format!(
            "fit needs at least {MIN_FIT_SAMPLES} samples, got {}",
            s.len()
        )));
    }
    let f = s.frequencies();
    let y = s.values();
    let n = f.len();
    let f_ref = 0.5 * (f[0] + f[n - 1]);
    let x: Vec<f64> = f.iter().map(|v| (v - f_ref) * 1e3).collect();
    let span = x[n - 1] - x[0];
    let step = span / (n - 1) as f64;
    let h_floor = 0.5 * cfg.splitting_floor_mhz;
    let bounds = Bounds {
        c: (x[0], x[n - 1]),
        h: (h_floor, span.max(h_floor)),
        w: (step, span / 6.0),
    };

    let seed = match seed_estimate(s, cfg) {
        Seed::Dips(p) => p,
        Seed::RejectedLowSnr { baseline, .. } => {
            let rss: f64 = y.iter().map(|v| (v - baseline).powi(2)).sum();
            return Ok(FitResult::rejected(baseline, rss.sqrt()));
        }
    };
    let to_x = |g: f64| (g - f_ref) * 1e3;
    let w0 = seed.hwhm_mhz.clamp(bounds.w.0, bounds.w.1);
    let c0 = 0.5 * (to_x(seed.centers[0]) + to_x(seed.centers[1]));
    let h0 = 0.5 * (to_x(seed.centers[0]) - to_x(seed.centers[1]));
    let mut starts = vec![vec![
        seed.baseline,
        c0,
        h0,
        seed.depths[0],
        seed.depths[1],
        w0,
        w0,
    ]];
    if cfg.seed_strategy == SeedStrategy::MultiStart {
        // Pair the deepest minimum with each alternate, then try a collapsed start.
        let (deep_f, d) = if seed.depths[0] >= seed.depths[1] {
            (seed.centers[0], seed.depths[0])
        } else {
            (seed.centers[1], seed.depths[1])
        };
        let shallow_f = if seed.depths[0] >= seed.depths[1] {
            seed.centers[1]
        } else {
            seed.centers[0]
        };
        for &other in seed.alternates.iter().chain([shallow_f].iter()) {
            let (a, b) = (to_x(deep_f), to_x(other));
            starts.push(vec![
                seed.baseline,
                0.5 * (a + b),
                (0.5 * (a - b).abs()).max(h_floor),
                d,
                d,
                w0,
                w0,
            ]);
        }
        starts.push(vec![
            seed.baseline,
            to_x(deep_f),
            w0.max(h_floor),
            0.5 * d,
            0.5 * d,
            w0,
            w0,
        ]);
        starts.dedup();
    }

    let shared = cfg.linewidth == Linewidth::Shared;
    let model = DoubleDip { bounds, shared };
    for p0 in &mut starts {
        p0.truncate(model.n_params());
    }
    let lm = cfg.lm();
    let best = starts
        .iter()
        .map(|p0| levenberg_marquardt(&model, &x, y, p0, &lm))
        .min_by(|a, b| a.cost.total_cmp(&b.cost))
        .expect("at least one start");

    let p = &best.params;
    let at_floor = p[2] <= h_floor * (1.0 + 1e-9);
    let lost_line = p[3] == 0.0 || p[4] == 0.0;
    if !at_floor && !lost_line {
        if let Some(cov) =
            covariance(&model, p, &x, y, best.cost).filter(|cov| both_lines_significant(p, cov))
        {
            let status = if best.converged {
                FitStatus::Converged
            } else {
                FitStatus::MaxIter
            };
            return Ok(FitResult {
                omega_plus: f_ref + (p[1] + p[2]) * 1e-3,
                omega_minus: f_ref + (p[1] - p[2]) * 1e-3,
                depths: [p[3], p[4]],
                hwhms: [p[5], p[model.n_params() - 1]],
                baseline: p[0],
                ci68: ci_from(&cov),
                covariance: cov,
                residual_norm: (2.0 * best.cost).sqrt(),
                iterations: best.iterations,
                status,
            });
        }
    }
    Ok(fit_single(
        &x,
        y,
        f_ref,
        bounds,
        p,
        h_floor,
        cfg,
        best.iterations,
    ))
}

/// A line counts only if its depth exceeds `MIN_LINE_SIGNIFICANCE` standard
/// errors and a small fraction of the other line's depth; otherwise the second Lorentzian is
/// parked on noise or baseline and the spectrum holds one line.
fn both_lines_significant(p: &[f64], cov: &DMatrix<f64>) -> bool {
    let (a, b) = (p[3], p[4]);
    let k = MIN_LINE_SIGNIFICANCE;
    a > k * cov[(3, 3)].sqrt()
        && b > k * cov[(4, 4)].sqrt()
        && a.min(b) >= MIN_DEPTH_RATIO * a.max(b)
}

/// Refit a collapsed double dip as one line reported at `center +- floor / 2`.
#[allow(clippy::too_many_arguments)]
fn fit_single(
    x: &[f64],
    y: &[f64],
    f_ref: f64,
    bounds: Bounds,
    p: &[f64],
    h_floor: f64,
    cfg: &FitConfig,
    iters: usize,
) -> FitResult {
    let model = SingleDip(bounds);
    let a0 = (p[3] + p[4]).clamp(1e-6, 1.0);
    let w0 = if p[3] >= p[4] { p[5] } else { p[p.len() - 1] };
    let fit = levenberg_marquardt(&model, x, y, &[p[0], p[1], a0, w0], &cfg.lm());
    let q = &fit.params;
    let cov = covariance(&model, q, x, y, fit.cost)
        .unwrap_or_else(|| DMatrix::from_element(4, 4, f64::NAN));
    FitResult {
        omega_plus: f_ref + (q[1] + h_floor) * 1e-3,
        omega_minus: f_ref + (q[1] - h_floor) * 1e-3,
        depths: [q[2]; 2],
        hwhms: [q[3]; 2],
        baseline: q[0],
        ci68: ci_from(&cov),
        covariance: cov,
        residual_norm: (2.0 * fit.cost).sqrt(),
        iterations: iters + fit.iterations,
        status: FitStatus::DegenerateSingleDip,
    }
}

/// `s^2 (J^T J)^-1` with `s^2 = RSS / (n - p)`, floored at the rounding level
/// of the model so an exact fit still reports a positive interval.
fn covariance<M: Model>(m: &M, p: &[f64], x: &[f64], y: &[f64], cost: f64) -> Option<DMatrix<f64>> {
    let (_, jac) = linearize(m, p, x, y);
    let k = m.n_params();
    let dof = (x.len() - k) as f64;
    let s2 = (2.0 * cost / dof).max((f64::EPSILON * p[0]).powi(2));
    let inv = jac.tr_mul(&jac).cholesky()?.inverse();
    let cov = inv * s2;
    (0..k)
        .all(|i| cov[(i, i)].is_finite() && cov[(i, i)] > 0.0)
        .then_some(cov)
}

fn ci_from(cov: &DMatrix<f64>) -> Vec<f64> {
    (0..cov.nrows()).map(|i| cov[(i, i)].sqrt()).collect()
}

/// Fit results on the spatial grid of a stack, in `(z, y, x)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct FitGrid {
    pub n_z: usize,
    pub n_y: usize,
    pub n_x: usize,
    pub pixel_size_nm: f64,
    pub z_offsets_um: Vec<f64>,
    pub total_time_s: f64,
    pub results: Vec<FitResult>,
}

impl FitGrid {
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.n_y + y) * self.n_x + x
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> &FitResult {
        &self.results[self.index(z, y, x)]
    }

    /// Median of the per-pixel mean resonance CI over valid pixels, GHz.
    pub fn median_ci(&self) -> Option<f64> {
        let mut v: Vec<f64> = self
            .results
            .iter()
            .filter(|r| r.status.is_valid())
            .filter_map(FitResult::mean_resonance_ci)
            .collect();
        (!v.is_empty()).then(|| seed::median(&mut v))
    }

    pub fn resonances(&self) -> ResonanceGrid {
        ResonanceGrid {
            n_z: self.n_z,
            n_y: self.n_y,
            n_x: self.n_x,
            pixel_size_nm: self.pixel_size_nm,
            z_offsets_um: self.z_offsets_um.clone(),
            total_time_s: self.total_time_s,
            records: self.results.iter().map(FitResult::record).collect(),
        }
    }

    pub fn valid_fraction(&self) -> f64 {
        let n = self.results.iter().filter(|r| r.status.is_valid()).count();
        n as f64 / self.results.len().max(1) as f64
    }
}

/// Fit every pixel spectrum of a stack. Pixels are independent, so the grid is
/// identical for any thread count or processing order.
pub fn fit_stack(stack: &ImageStack, cfg: &FitConfig) -> Result<FitGrid> {
    cfg.validate()?;
    let (n_freq, n_z, n_y, n_x) = stack.dims();
    if n_freq < MIN_FIT_SAMPLES {
        return Err(Error::InvalidArgument(format!(
            "fit needs at least {MIN_FIT_SAMPLES} frequencies, stack has {n_freq}"
        )));
    }
    let results = (0..n_z * n_y * n_x)
        .into_par_iter()
        .map(|i| {
            let (z, y, x) = (i / (n_y * n_x), (i / n_x) % n_y, i % n_x);
            fit_double_lorentzian(&stack.pixel_spectrum(z, y, x)?, cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FitGrid {
        n_z,
        n_y,
        n_x,
        pixel_size_nm: stack.pixel_size_nm(),
        z_offsets_um: stack.z_offsets_um().to_vec(),
        total_time_s: stack.acquisition.total_time_s,
        results,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectrum::{
        apply_shot_noise, cw_spectrum, linear_axis, LineShapeParams, SpectrumUnit,
    };
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn axis() -> Vec<f64> {
        linear_axis(2.860, 2.880, 100)
    }

    fn pair(plus: f64, minus: f64, depth: [f64; 2], hwhm: [f64; 2]) -> Vec<LineShapeParams> {
        vec![
            LineShapeParams {
                center: plus,
                hwhm: hwhm[0],
                depth: depth[0],
            },
            LineShapeParams {
                center: minus,
                hwhm: hwhm[1],
                depth: depth[1],
            },
        ]
    }

    fn counts(s: &OdmrSpectrum, scale: f64) -> OdmrSpectrum {
        let v = s.values().iter().map(|c| c * scale).collect();
        OdmrSpectrum::new(s.frequencies().to_vec(), v, SpectrumUnit::Counts).unwrap()
    }

    #[test]
    fn noiseless_double_dip_is_recovered() {
        let s = cw_spectrum(
            &axis(),
            &pair(2.8735, 2.8651, [0.02, 0.015], [0.5, 0.6]),
            None,
        )
        .unwrap();
        let r = fit_double_lorentzian(&counts(&s, 1e4), &independent()).unwrap();
        assert_eq!(r.status, FitStatus::Converged);
        assert_eq!(r.covariance.nrows(), 7);
        assert!((r.omega_plus - 2.8735).abs() < 1e-6);
        assert!((r.omega_minus - 2.8651).abs() < 1e-6);
        assert!((r.hwhms[1] - 0.6).abs() < 1e-6);
        assert!((r.baseline - 1e4).abs() < 1e-6);
        let (cp, cm) = r.resonance_ci().unwrap();
        assert!(cp > 0.0 && cp < 1e-9 && cm > 0.0 && cm < 1e-9);
    }

    fn independent() -> FitConfig {
        FitConfig {
            linewidth: Linewidth::Independent,
            ..Default::default()
        }
    }

    #[test]
    fn shared_width_fit_recovers_equal_lines() {
        let s = cw_spectrum(
            &axis(),
            &pair(2.8735, 2.8651, [0.02, 0.015], [0.55; 2]),
            None,
        )
        .unwrap();
        let r = fit_double_lorentzian(&counts(&s, 1e4), &FitConfig::default()).unwrap();
        assert_eq!(r.status, FitStatus::Converged);
        assert_eq!(r.covariance.nrows(), 6);
        assert!((r.omega_plus - 2.8735).abs() < 1e-9 && (r.omega_minus - 2.8651).abs() < 1e-9);
        assert!((r.hwhms[0] - 0.55).abs() < 1e-9 && r.hwhms[0] == r.hwhms[1]);
        assert!((r.depths[1] - 0.015).abs() < 1e-9);
    }

    #[test]
    fn random_noiseless_spectra_match_generators() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = independent();
        for _ in 0..100 {
            let c = rng.random_range(2.866..2.874);
            let h = rng.random_range(0.0015..0.004);
            let d = [rng.random_range(0.01..0.03), rng.random_range(0.01..0.03)];
            let w = [rng.random_range(0.3..0.7), rng.random_range(0.3..0.7)];
            let b = rng.random_range(1e3..1e5);
            let s = cw_spectrum(&axis(), &pair(c + h, c - h, d, w), None).unwrap();
            let r = fit_double_lorentzian(&counts(&s, b), &cfg).unwrap();
            assert_eq!(r.status, FitStatus::Converged);
            let rel = |a: f64, e: f64| ((a - e) / e).abs();
            assert!(rel(r.omega_plus, c + h) < 1e-6 && rel(r.omega_minus, c - h) < 1e-6);
            assert!(rel(r.depths[0], d[0]) < 1e-6 && rel(r.depths[1], d[1]) < 1e-6);
            assert!(rel(r.hwhms[0], w[0]) < 1e-6 && rel(r.hwhms[1], w[1]) < 1e-6);
            assert!(rel(r.baseline, b) < 1e-6);
        }
    }

    #[test]
    fn single_line_is_degenerate_at_floor() {
        let s = cw_spectrum(
            &axis(),
            &[LineShapeParams {
                center: 2.8702,
                hwhm: 0.5,
                depth: 0.03,
            }],
            None,
        )
        .unwrap();
        let cfg = FitConfig::default();
        let r = fit_double_lorentzian(&counts(&s, 1e4), &cfg).unwrap();
        assert_eq!(r.status, FitStatus::DegenerateSingleDip);
        assert!((r.center() - 2.8702).abs() < 1e-6);
        assert!((r.omega_plus - r.omega_minus - cfg.splitting_floor_mhz * 1e-3).abs() < 1e-12);
        assert_eq!(r.covariance.nrows(), 4);
    }

    #[test]
    fn vanishing_second_dip_counts_as_one_line() {
        // This spectrum used to converge with a second dip of depth ~1e-7 parked off the line.
        let f = linear_axis(2.86, 2.88, 80);
        let s = cw_spectrum(
            &f,
            &[LineShapeParams {
                center: 2.87,
                hwhm: 1.0,
                depth: 0.06,
            }],
            None,
        )
        .unwrap();
        for scale in [2050.0, 3915.0, 5122.0] {
            let r = fit_double_lorentzian(&counts(&s, scale), &FitConfig::default()).unwrap();
            assert_eq!(r.status, FitStatus::DegenerateSingleDip, "scale {scale}");
            assert!((r.center() - 2.87).abs() < 1e-9);
        }
    }

    #[test]
    fn flat_noise_is_rejected() {
        let flat = OdmrSpectrum::new(axis(), vec![1.0; 100], SpectrumUnit::Contrast).unwrap();
        let r = fit_double_lorentzian(
            &apply_shot_noise(&flat, 1e4, 5).unwrap(),
            &FitConfig::default(),
        )
        .unwrap();
        assert_eq!(r.status, FitStatus::RejectedLowSnr);
        assert!(r.residual_norm >= 0.0);
    }

    #[test]
    fn short_spectra_and_bad_configs_are_errors() {
        let s = cw_spectrum(
            &linear_axis(2.86, 2.88, 11),
            &pair(2.873, 2.866, [0.02; 2], [0.5; 2]),
            None,
        )
        .unwrap();
        assert!(fit_double_lorentzian(&s, &FitConfig::default()).is_err());
        let s = cw_spectrum(&axis(), &pair(2.873, 2.866, [0.02; 2], [0.5; 2]), None).unwrap();
        let bad = FitConfig {
            step_tolerance: 0.0,
            ..Default::default()
        };
        assert!(fit_double_lorentzian(&s, &bad).is_err());
    }

    #[test]
    fn accepted_steps_never_raise_the_cost() {
        let s = cw_spectrum(
            &axis(),
            &pair(2.8735, 2.8651, [0.02, 0.02], [0.5, 0.5]),
            None,
        )
        .unwrap();
        for seed in 0..20 {
            let noisy = apply_shot_noise(&s, 2e3, seed).unwrap();
            let f = noisy.frequencies();
            let f_ref = 0.5 * (f[0] + f[f.len() - 1]);
            let x: Vec<f64> = f.iter().map(|v| (v - f_ref) * 1e3).collect();
            let b = Bounds {
                c: (x[0], x[99]),
                h: (0.15, 20.0),
                w: (0.05, 20.0),
            };
            let out = levenberg_marquardt(
                &DoubleDip {
                    bounds: b,
                    shared: false,
                },
                &x,
                noisy.values(),
                &[2e3, 0.0, 3.0, 0.01, 0.01, 1.0, 1.0],
                &FitConfig::default().lm(),
            );
            assert!(out.cost_history.windows(2).all(|w| w[1] <= w[0]));
        }
    }

    #[test]
    fn monte_carlo_scatter_matches_reported_ci() {
        let s = cw_spectrum(
            &axis(),
            &pair(2.8735, 2.8651, [0.02, 0.02], [0.5, 0.5]),
            None,
        )
        .unwrap();
        let cfg = FitConfig::default();
        let mut centers = Vec::new();
        let mut cis = Vec::new();
        for seed in 0..200 {
            let r = fit_double_lorentzian(&apply_shot_noise(&s, 1e5, seed).unwrap(), &cfg).unwrap();
            assert_eq!(r.status, FitStatus::Converged);
            centers.push(r.omega_plus);
            cis.push(r.resonance_ci().unwrap().0);
        }
        let mean = centers.iter().sum::<f64>() / 200.0;
        let sd = (centers.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / 199.0).sqrt();
        let ci = cis.iter().sum::<f64>() / 200.0;
        assert!((sd / ci - 1.0).abs() < 0.25, "sd {sd} ci {ci}");
    }

    #[test]
    fn quadrupled_photons_halve_ci() {
        let s = cw_spectrum(
            &axis(),
            &pair(2.8735, 2.8651, [0.02, 0.02], [0.5, 0.5]),
            None,
        )
        .unwrap();
        let cfg = FitConfig::default();
        let median_ci = |photons: f64| {
            let mut v: Vec<f64> = (0..101)
                .map(|seed| {
                    let r =
                        fit_double_lorentzian(&apply_shot_noise(&s, photons, seed).unwrap(), &cfg)
                            .unwrap();
                    r.mean_resonance_ci().unwrap()
                })
                .collect();
            seed::median(&mut v)
        };
        let ratio = median_ci(2.5e4) / median_ci(1e5);
        assert!((ratio / 2.0 - 1.0).abs() < 0.1, "{ratio}");
    }

    #[test]
    fn status_names_round_trip() {
        for s in [
            FitStatus::Converged,
            FitStatus::MaxIter,
            FitStatus::DegenerateSingleDip,
            FitStatus::RejectedLowSnr,
        ] {
            assert_eq!(s.as_str().parse::<FitStatus>().unwrap(), s);
        }
        assert!("bogus".parse::<FitStatus>().is_err());
    }
}
