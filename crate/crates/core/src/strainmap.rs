//! From fit grids to calibrated strain maps: binning, smoothing, precision and
//! sensitivity layers, 3-D assembly and high-field orientation-class maps.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fitting::{FitGrid, FitStatus, ResonanceGrid};
use crate::spin_model::PhysicalConstants;
use crate::stack::{Acquisition, ImageStack};

/// Sum photon counts over `factor x factor` blocks. Trailing rows and columns
/// that do not fill a block are dropped and recorded in the acquisition metadata.
pub fn bin_stack(stack: &ImageStack, factor: usize) -> Result<ImageStack> {
    let (n_f, n_z, n_y, n_x) = stack.dims();
    if factor == 0 || factor > n_y || factor > n_x {
        return Err(Error::InvalidArgument(format!(
            "bin factor {factor} does not fit a {n_y}x{n_x} image"
        )));
    }
    let (ny, nx) = (n_y / factor, n_x / factor);
    let src = stack.data();
    let planes: Vec<Vec<f32>> = (0..n_f * n_z)
        .into_par_iter()
        .map(|plane| {
            let base = plane * n_y * n_x;
            let mut out = vec![0f64; ny * nx];
            for y in 0..ny * factor {
                let row = &src[base + y * n_x..base + y * n_x + nx * factor];
                for (x, v) in row.iter().enumerate() {
                    out[(y / factor) * nx + x / factor] += f64::from(*v);
                }
            }
            out.into_iter().map(|v| v as f32).collect()
        })
        .collect();
    let a = &stack.acquisition;
    ImageStack::new(
        (n_f, n_z, ny, nx),
        stack.frequency_hz().to_vec(),
        stack.z_offsets_um().to_vec(),
        stack.pixel_size_nm() * factor as f64,
        planes.concat(),
        Acquisition {
            bin_factor: a.bin_factor * factor,
            dropped_rows: a.dropped_rows + (n_y % factor) * a.bin_factor,
            dropped_cols: a.dropped_cols + (n_x % factor) * a.bin_factor,
            ..a.clone()
        },
    )
}

/// Mean of each valid pixel and its valid 4-neighbors. Invalid pixels are
/// left untouched and never contribute.
pub fn smooth_map(values: &[f64], valid: &[bool], n_y: usize, n_x: usize) -> Vec<f64> {
    assert_eq!(values.len(), n_y * n_x, "grid size mismatch");
    assert_eq!(valid.len(), n_y * n_x, "mask size mismatch");
    (0..n_y * n_x)
        .into_par_iter()
        .map(|i| {
            if !valid[i] {
                return values[i];
            }
            let (y, x) = (i / n_x, i % n_x);
            let mut sum = values[i];
            let mut n = 1.0;
            let mut add = |j: usize| {
                if valid[j] {
                    sum += values[j];
                    n += 1.0;
                }
            };
            if y > 0 {
                add(i - n_x);
            }
            if x > 0 {
                add(i - 1);
            }
            if x + 1 < n_x {
                add(i + 1);
            }
            if y + 1 < n_y {
                add(i + n_x);
            }
            sum / n
        })
        .collect()
}

/// One focal plane of calibrated strain. Invalid pixels hold NaN in every layer.
#[derive(Debug, Clone, PartialEq)]
pub struct StrainMap {
    pub n_y: usize,
    pub n_x: usize,
    /// Signed: positive raises the zero-field splitting.
    pub axial: Vec<f64>,
    pub nonaxial: Vec<f64>,
    pub precision_axial: Vec<f64>,
    pub precision_nonaxial: Vec<f64>,
    /// Mean per-resonance 68% interval, GHz.
    pub ci68: Vec<f64>,
    pub valid: Vec<bool>,
    pub pixel_size_nm: f64,
    pub z_offset_um: f64,
    pub measurement_time_s: f64,
    pub reference_d_ghz: f64,
}

impl StrainMap {
    pub fn index(&self, y: usize, x: usize) -> usize {
        y * self.n_x + x
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Copy with the axial and non-axial layers smoothed over valid 4-neighbors.
    pub fn smoothed(&self) -> Self {
        Self {
            axial: smooth_map(&self.axial, &self.valid, self.n_y, self.n_x),
            nonaxial: smooth_map(&self.nonaxial, &self.valid, self.n_y, self.n_x),
            ..self.clone()
        }
    }

    /// Per-row x position (pixels) of the largest `|forward difference|` of the
    /// axial layer; the boundary sits between pixels `x` and `x + 1`.
    pub fn boundary_trace(&self) -> Vec<Option<usize>> {
        (0..self.n_y)
            .map(|y| {
                (0..self.n_x.saturating_sub(1))
                    .filter(|&x| self.valid[self.index(y, x)] && self.valid[self.index(y, x + 1)])
                    .map(|x| {
                        (
                            x,
                            (self.axial[self.index(y, x + 1)] - self.axial[self.index(y, x)]).abs(),
                        )
                    })
                    .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
                    .map(|(x, _)| x)
            })
            .collect()
    }

    /// Median boundary position across rows, micrometers from the image edge.
    pub fn boundary_position_um(&self) -> Option<f64> {
        let mut xs: Vec<f64> = self
            .boundary_trace()
            .into_iter()
            .flatten()
            .map(|x| (x as f64 + 1.0) * self.pixel_size_nm * 1e-3)
            .collect();
        (!xs.is_empty()).then(|| median(&mut xs))
    }
}

/// Convert one focal plane of fits to strain.
///
/// Axial strain is the resonance center relative to `reference_d_ghz` divided by
/// the axial susceptibility; non-axial strain is the half-splitting over the
/// transverse susceptibility, exactly zero for single-dip fits. Precision layers
/// are the mean per-resonance CI over each susceptibility.
pub fn to_strain(
    fits: &FitGrid,
    z: usize,
    c: &PhysicalConstants,
    reference_d_ghz: f64,
) -> Result<StrainMap> {
    strain_from_resonances(&fits.resonances(), z, c, reference_d_ghz)
}

/// [`to_strain`] from stored resonance records.
pub fn strain_from_resonances(
    grid: &ResonanceGrid,
    z: usize,
    c: &PhysicalConstants,
    reference_d_ghz: f64,
) -> Result<StrainMap> {
    if z >= grid.n_z {
        return Err(Error::InvalidArgument(format!(
            "slice {z} out of range ({} slices)",
            grid.n_z
        )));
    }
    let plane = grid.n_y * grid.n_x;
    if grid.records.len() != grid.n_z * plane {
        return Err(Error::InvalidArgument(format!(
            "grid holds {} records, expected {}",
            grid.records.len(),
            grid.n_z * plane
        )));
    }
    let mut m = StrainMap {
        n_y: grid.n_y,
        n_x: grid.n_x,
        axial: vec![f64::NAN; plane],
        nonaxial: vec![f64::NAN; plane],
        precision_axial: vec![f64::NAN; plane],
        precision_nonaxial: vec![f64::NAN; plane],
        ci68: vec![f64::NAN; plane],
        valid: vec![false; plane],
        pixel_size_nm: grid.pixel_size_nm,
        z_offset_um: grid.z_offsets_um.get(z).copied().unwrap_or(0.0),
        measurement_time_s: grid.total_time_s,
        reference_d_ghz,
    };
    for (i, r) in grid.records[z * plane..(z + 1) * plane].iter().enumerate() {
        let Some(ci) = r.usable_ci() else {
            continue;
        };
        m.valid[i] = true;
        m.axial[i] = (r.center() - reference_d_ghz) / c.axial_susceptibility_ghz;
        m.nonaxial[i] = if r.status == FitStatus::DegenerateSingleDip {
            0.0
        } else {
            r.half_splitting() / c.transverse_susceptibility_ghz
        };
        m.ci68[i] = ci;
        m.precision_axial[i] = ci / c.axial_susceptibility_ghz;
        m.precision_nonaxial[i] = ci / c.transverse_susceptibility_ghz;
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// Bin edges, `counts.len() + 1` entries.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// Equal-width bins over `[0, max]`.
    pub fn from_values(values: &[f64], bins: usize) -> Self {
        let bins = bins.max(1);
        let max = values.iter().copied().fold(0.0, f64::max);
        let width = if max > 0.0 { max / bins as f64 } else { 1.0 };
        let edges = (0..=bins).map(|i| i as f64 * width).collect();
        let mut counts = vec![0; bins];
        for v in values {
            counts[((v / width) as usize).min(bins - 1)] += 1;
        }
        Self { edges, counts }
    }
}

/// Precision and shot-noise-normalized sensitivity summary of a strain map.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityReport {
    pub measurement_time_s: f64,
    /// Median mean-resonance CI over valid pixels, GHz.
    pub median_ci_ghz: f64,
    pub median_precision_axial: f64,
    pub median_precision_nonaxial: f64,
    /// `precision * sqrt(T)`, strain Hz^-1/2, NaN at invalid pixels.
    pub sensitivity_axial: Vec<f64>,
    pub sensitivity_nonaxial: Vec<f64>,
    pub median_sensitivity_axial: f64,
    pub median_sensitivity_nonaxial: f64,
    /// Histogram of the per-pixel CI in kHz.
    pub ci_histogram_khz: Histogram,
    pub valid_pixels: usize,
}

pub fn sensitivity_report(m: &StrainMap, bins: usize) -> Result<SensitivityReport> {
    let t = m.measurement_time_s;
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "measurement time must be positive, got {t}"
        )));
    }
    let root_t = t.sqrt();
    let scale = |v: &[f64]| v.iter().map(|p| p * root_t).collect::<Vec<_>>();
    let sensitivity_axial = scale(&m.precision_axial);
    let sensitivity_nonaxial = scale(&m.precision_nonaxial);
    let valid_median = |v: &[f64]| {
        let mut w: Vec<f64> = v
            .iter()
            .zip(&m.valid)
            .filter(|(_, ok)| **ok)
            .map(|(x, _)| *x)
            .collect();
        if w.is_empty() {
            f64::NAN
        } else {
            median(&mut w)
        }
    };
    let ci_khz: Vec<f64> = m
        .ci68
        .iter()
        .zip(&m.valid)
        .filter(|(_, ok)| **ok)
        .map(|(c, _)| c * 1e6)
        .collect();
    Ok(SensitivityReport {
        measurement_time_s: t,
        median_ci_ghz: valid_median(&m.ci68),
        median_precision_axial: valid_median(&m.precision_axial),
        median_precision_nonaxial: valid_median(&m.precision_nonaxial),
        median_sensitivity_axial: valid_median(&sensitivity_axial),
        median_sensitivity_nonaxial: valid_median(&sensitivity_nonaxial),
        sensitivity_axial,
        sensitivity_nonaxial,
        ci_histogram_khz: Histogram::from_values(&ci_khz, bins),
        valid_pixels: m.valid_count(),
    })
}

/// Strain maps at distinct depths, ordered by `z_offset_um`.
#[derive(Debug, Clone, PartialEq)]
pub struct StrainVolume {
    pub slices: Vec<StrainMap>,
}

impl StrainVolume {
    pub fn z_offsets_um(&self) -> Vec<f64> {
        self.slices.iter().map(|s| s.z_offset_um).collect()
    }

    /// Median boundary position of each slice, micrometers.
    pub fn boundary_positions_um(&self) -> Vec<Option<f64>> {
        self.slices
            .iter()
            .map(StrainMap::boundary_position_um)
            .collect()
    }
}

pub fn assemble_3d(mut maps: Vec<StrainMap>) -> Result<StrainVolume> {
    if maps.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "3-D assembly needs at least 2 slices, got {}",
            maps.len()
        )));
    }
    let (ny, nx) = (maps[0].n_y, maps[0].n_x);
    if maps.iter().any(|m| m.n_y != ny || m.n_x != nx) {
        return Err(Error::InvalidArgument("slices differ in size".into()));
    }
    maps.sort_by(|a, b| a.z_offset_um.total_cmp(&b.z_offset_um));
    if let Some(w) = maps
        .windows(2)
        .find(|w| w[0].z_offset_um == w[1].z_offset_um)
    {
        return Err(Error::InvalidArgument(format!(
            "duplicate z offset {} um",
            w[0].z_offset_um
        )));
    }
    Ok(StrainVolume { slices: maps })
}

/// Thresholds for deciding which orientation classes appear in a high-field stack.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifyConfig {
    /// Minimum fractional dip depth for a pixel to show a class.
    pub contrast_threshold: f64,
    /// The dip must also exceed this many standard errors of the pixel's noise.
    pub significance: f64,
    /// Minimum fraction of pixels that must show a class for it to be present.
    pub min_fraction: f64,
    /// Resonances closer than this are one line, MHz. Contrast is averaged over
    /// the frames within half of it from the resonance.
    pub line_resolution_mhz: f64,
}

impl Default for ClassifyConfig {
    fn default() -> Self {
        Self {
            contrast_threshold: 0.01,
            significance: 3.0,
            min_fraction: 0.02,
            line_resolution_mhz: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassMap {
    pub class: usize,
    pub frequency_ghz: f64,
    /// Fractional dip depth at the class resonance, one value per pixel.
    pub contrast: Vec<f64>,
    /// Pixels whose dip passes both thresholds.
    pub shows: Vec<bool>,
    /// Fraction of pixels showing the class.
    pub coverage: f64,
    pub present: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassMaps {
    pub n_y: usize,
    pub n_x: usize,
    pub classes: Vec<ClassMap>,
    /// Present classes.
    pub distinct_classes: usize,
    /// Distinct resonance lines among present classes.
    pub distinct_lines: usize,
}

/// Contrast maps of orientation classes at their high-field resonances in slice `z`.
///
/// Each pixel's off-resonance level is the median of its spectrum; the class
/// contrast is the fractional drop of the mean over the frames within half a
/// line resolution of the class resonance (at least the nearest frame). A pixel
/// shows the class when that drop exceeds `contrast_threshold` and
/// `significance` standard errors of the pixel's white noise.
pub fn orientation_contrast_maps(
    stack: &ImageStack,
    z: usize,
    resonances: &[(usize, f64)],
    cfg: &ClassifyConfig,
) -> Result<ClassMaps> {
    let (n_f, n_z, n_y, n_x) = stack.dims();
    if z >= n_z {
        return Err(Error::InvalidArgument(format!(
            "slice {z} out of range ({n_z} slices)"
        )));
    }
    let f = stack.frequency_ghz();
    let step = if n_f > 1 {
        (f[n_f - 1] - f[0]) / (n_f - 1) as f64
    } else {
        0.0
    };
    let half = 0.5 * cfg.line_resolution_mhz * 1e-3;
    let windows: Vec<Vec<usize>> = resonances
        .iter()
        .map(|&(class, freq)| {
            if freq < f[0] - 0.5 * step || freq > f[n_f - 1] + 0.5 * step {
                return Err(Error::InvalidArgument(format!(
                    "class {class} resonance {freq} GHz lies outside the frequency axis"
                )));
            }
            let near: Vec<usize> = (0..n_f).filter(|&k| (f[k] - freq).abs() <= half).collect();
            Ok(if near.is_empty() {
                vec![(0..n_f)
                    .min_by(|&a, &b| (f[a] - freq).abs().total_cmp(&(f[b] - freq).abs()))
                    .unwrap()]
            } else {
                near
            })
        })
        .collect::<Result<_>>()?;

    let plane = n_y * n_x;
    let per_pixel: Vec<Vec<(f64, bool)>> = (0..plane)
        .into_par_iter()
        .map(|i| {
            let counts = stack.pixel_counts(z, i / n_x, i % n_x);
            let base = median(&mut counts.clone());
            let noise = crate::fitting::white_noise(&counts);
            windows
                .iter()
                .map(|w| {
                    if base <= 0.0 {
                        return (0.0, false);
                    }
                    let mean = w.iter().map(|&k| counts[k]).sum::<f64>() / w.len() as f64;
                    let c = (base - mean) / base;
                    let floor = cfg.significance * noise / (w.len() as f64).sqrt() / base;
                    (c, c > cfg.contrast_threshold && c > floor)
                })
                .collect()
        })
        .collect();

    let mut classes: Vec<ClassMap> = resonances
        .iter()
        .enumerate()
        .map(|(k, &(class, freq))| {
            let contrast: Vec<f64> = per_pixel.iter().map(|v| v[k].0).collect();
            let shows: Vec<bool> = per_pixel.iter().map(|v| v[k].1).collect();
            let above = shows.iter().filter(|s| **s).count();
            let coverage = above as f64 / plane.max(1) as f64;
            let present = coverage >= cfg.min_fraction && above > 0;
            ClassMap {
                class,
                frequency_ghz: freq,
                contrast,
                shows,
                coverage,
                present,
            }
        })
        .collect();
    classes.sort_by_key(|c| c.class);

    let mut lines: Vec<f64> = classes
        .iter()
        .filter(|c| c.present)
        .map(|c| c.frequency_ghz)
        .collect();
    lines.sort_by(f64::total_cmp);
    let resolution = cfg.line_resolution_mhz * 1e-3;
    let distinct_lines = lines
        .iter()
        .enumerate()
        .filter(|(i, v)| *i == 0 || **v - lines[i - 1] >= resolution)
        .count();
    Ok(ClassMaps {
        n_y,
        n_x,
        distinct_classes: classes.iter().filter(|c| c.present).count(),
        distinct_lines,
        classes,
    })
}

fn median(v: &mut [f64]) -> f64 {
    crate::fitting::median(v)
}
