use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::spectrum::{contrast_at, hyperfine_triplets, poisson_draw, LineShapeParams};
use crate::spin_model::{
    ensemble_resonances, hyperfine_resonances, project_to_nv_frame, transition_frequencies_approx,
    OrientationClass, ResonancePair, SpinParameters,
};
use crate::stack::{Acquisition, ImageStack};

use super::scene::{NvEmitter, Optics, Scene};

/// Normalized, centred Gaussian PSF sampled on the pixel grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PsfKernel {
    pub sigma_nm: f64,
    pub radius: usize,
    /// `(2 radius + 1)^2` weights, row-major.
    pub weights: Vec<f64>,
}

impl PsfKernel {
    pub fn size(&self) -> usize {
        2 * self.radius + 1
    }

    pub fn weight(&self, dy: isize, dx: isize) -> f64 {
        let r = self.radius as isize;
        self.weights[((dy + r) * (2 * r + 1) + dx + r) as usize]
    }
}

/// Gaussian approximation of the diffraction-limited PSF, `sigma = 0.21 lambda / NA`,
/// truncated at 3 sigma.
pub fn psf_kernel(optics: &Optics, pixel_size_nm: f64) -> PsfKernel {
    let sigma_nm = optics.sigma_nm();
    let sigma_px = sigma_nm / pixel_size_nm;
    let radius = (3.0 * sigma_px).floor() as usize;
    let n = 2 * radius + 1;
    let mut weights = vec![0.0; n * n];
    let r = radius as f64;
    for (i, w) in weights.iter_mut().enumerate() {
        let dy = (i / n) as f64 - r;
        let dx = (i % n) as f64 - r;
        let d2 = dx * dx + dy * dy;
        if d2 <= 9.0 * sigma_px * sigma_px || radius == 0 {
            *w = (-0.5 * d2 / (sigma_px * sigma_px)).exp();
        }
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    PsfKernel {
        sigma_nm,
        radius,
        weights,
    }
}

/// Acquisition settings for a rendered frequency sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSettings {
    pub frequency_ghz: Vec<f64>,
    /// Focal-plane depths, one image per entry, micrometers.
    pub z_offsets_um: Vec<f64>,
    pub total_time_s: f64,
    /// Photons per second from an NV of unit brightness, off resonance.
    pub photon_rate: f64,
    pub seed: u64,
    pub shot_noise: bool,
    pub psf: bool,
}

impl SweepSettings {
    pub fn new(frequency_ghz: Vec<f64>, total_time_s: f64, photon_rate: f64, seed: u64) -> Self {
        Self {
            frequency_ghz,
            z_offsets_um: vec![0.0],
            total_time_s,
            photon_rate,
            seed,
            shot_noise: true,
            psf: true,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.frequency_ghz.len() < crate::spectrum::MIN_SAMPLES
            || self.frequency_ghz.windows(2).any(|w| !(w[1] > w[0]))
        {
            return Err(Error::InvalidScene(
                "need at least 8 strictly ascending frequencies".into(),
            ));
        }
        if !(self.total_time_s > 0.0 && self.total_time_s.is_finite()) {
            return Err(Error::InvalidScene("total time must be positive".into()));
        }
        if !(self.photon_rate > 0.0 && self.photon_rate.is_finite()) {
            return Err(Error::InvalidScene("photon rate must be positive".into()));
        }
        if self.z_offsets_um.is_empty() {
            return Err(Error::InvalidScene("need at least one focal plane".into()));
        }
        Ok(())
    }
}

/// Photon-weighted strain actually sampled by each pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub n_z: usize,
    pub n_y: usize,
    pub n_x: usize,
    pub pixel_size_nm: f64,
    /// Expected off-resonance NV photons per frame.
    pub nv_photons: Vec<f64>,
    /// Sums of `photons * strain`; divide by `nv_photons` for the mean.
    pub axial_sum: Vec<f64>,
    pub nonaxial_sum: Vec<f64>,
}

impl GroundTruth {
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.n_y + y) * self.n_x + x
    }

    /// Mean `(axial, nonaxial)` strain at a pixel, `None` if no NV light reaches it.
    pub fn strain(&self, z: usize, y: usize, x: usize) -> Option<(f64, f64)> {
        let i = self.index(z, y, x);
        let w = self.nv_photons[i];
        (w > 0.0).then(|| (self.axial_sum[i] / w, self.nonaxial_sum[i] / w))
    }

    /// Sum over `factor x factor` blocks, matching [`crate::strainmap::bin_stack`].
    pub fn binned(&self, factor: usize) -> Result<Self> {
        if factor == 0 || factor > self.n_y || factor > self.n_x {
            return Err(Error::InvalidArgument(format!(
                "bin factor {factor} does not fit the image"
            )));
        }
        let (ny, nx) = (self.n_y / factor, self.n_x / factor);
        let mut out = Self {
            n_z: self.n_z,
            n_y: ny,
            n_x: nx,
            pixel_size_nm: self.pixel_size_nm * factor as f64,
            nv_photons: vec![0.0; self.n_z * ny * nx],
            axial_sum: vec![0.0; self.n_z * ny * nx],
            nonaxial_sum: vec![0.0; self.n_z * ny * nx],
        };
        for z in 0..self.n_z {
            for y in 0..ny * factor {
                for x in 0..nx * factor {
                    let src = self.index(z, y, x);
                    let dst = (z * ny + y / factor) * nx + x / factor;
                    out.nv_photons[dst] += self.nv_photons[src];
                    out.axial_sum[dst] += self.axial_sum[src];
                    out.nonaxial_sum[dst] += self.nonaxial_sum[src];
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct Rendered {
    pub stack: ImageStack,
    pub truth: GroundTruth,
}

#[derive(Debug, Clone, Copy)]
enum ResonanceMode {
    LowField,
    HighField(nalgebra::Vector3<f64>),
}

/// A point source after merging unresolvable NVs.
#[derive(Debug, Clone)]
struct Emitter {
    position: [f64; 3],
    brightness: f64,
    contrast: Vec<f64>,
    axial: f64,
    nonaxial: f64,
}

/// Render a low-field ODMR stack of the scene.
///
/// Resonances follow the closed-form zero-field spectrum of each NV's local
/// strain (plus any bias field projected into its frame). Output is identical
/// for any thread count.
pub fn render_stack(scene: &Scene, sweep: &SweepSettings) -> Result<Rendered> {
    render(scene, sweep, ResonanceMode::LowField)
}

/// Render a high-field stack: each NV shows the lines `D +- gamma |B . axis|` of
/// its orientation class.
pub fn render_high_field_stack(
    scene: &Scene,
    b_lab_gauss: [f64; 3],
    sweep: &SweepSettings,
) -> Result<Rendered> {
    render(
        scene,
        sweep,
        ResonanceMode::HighField(nalgebra::Vector3::from(b_lab_gauss)),
    )
}

fn render(scene: &Scene, sweep: &SweepSettings, mode: ResonanceMode) -> Result<Rendered> {
    scene.validate()?;
    sweep.validate()?;
    if scene.nv_list.is_empty() {
        return Err(Error::InvalidScene("scene has no NVs".into()));
    }
    let emitters = build_emitters(scene, &sweep.frequency_ghz, mode)?;
    let (n_y, n_x) = scene.grid();
    if n_y == 0 || n_x == 0 {
        return Err(Error::InvalidScene(
            "extent is smaller than one pixel".into(),
        ));
    }
    let n_freq = sweep.frequency_ghz.len();
    let n_z = sweep.z_offsets_um.len();
    let t_frame = sweep.total_time_s / n_freq as f64;
    let plane = n_y * n_x;

    let mut data = vec![0f32; n_freq * n_z * plane];
    let mut truth = GroundTruth {
        n_z,
        n_y,
        n_x,
        pixel_size_nm: scene.pixel_size_nm,
        nv_photons: vec![0.0; n_z * plane],
        axial_sum: vec![0.0; n_z * plane],
        nonaxial_sum: vec![0.0; n_z * plane],
    };

    for (z, &z_focus) in sweep.z_offsets_um.iter().enumerate() {
        let footprints: Vec<(usize, Footprint)> = emitters
            .iter()
            .enumerate()
            .filter_map(|(i, e)| {
                footprint(scene, sweep.psf, e, z_focus, n_y, n_x).map(|fp| (i, fp))
            })
            .collect();
        let mut rows: Vec<Vec<usize>> = vec![Vec::new(); n_y];
        for (k, (_, fp)) in footprints.iter().enumerate() {
            for row in rows.iter_mut().skip(fp.y0).take(fp.h) {
                row.push(k);
            }
        }

        let pixel_area = (scene.pixel_size_nm * 1e-3).powi(2);
        let rendered_rows: Vec<RowOut> = rows
            .par_iter()
            .enumerate()
            .map(|(y, members)| {
                let mut acc = vec![0.0f64; n_x * n_freq];
                let mut out = RowOut {
                    counts: vec![0f32; n_x * n_freq],
                    nv_photons: vec![0.0; n_x],
                    axial: vec![0.0; n_x],
                    nonaxial: vec![0.0; n_x],
                };
                for &k in members {
                    let (ei, fp) = &footprints[k];
                    let e = &emitters[*ei];
                    let scale = sweep.photon_rate * t_frame * e.brightness * fp.scale;
                    let wrow = &fp.weights[(y - fp.y0) * fp.w..(y - fp.y0 + 1) * fp.w];
                    for (dx, &w) in wrow.iter().enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let x = fp.x0 + dx;
                        let amp = scale * w;
                        let cell = &mut acc[x * n_freq..(x + 1) * n_freq];
                        for (a, c) in cell.iter_mut().zip(&e.contrast) {
                            *a += amp * c;
                        }
                        out.nv_photons[x] += amp;
                        out.axial[x] += amp * e.axial;
                        out.nonaxial[x] += amp * e.nonaxial;
                    }
                }
                for x in 0..n_x {
                    let bg = background_rate(scene, x, y, z_focus) * pixel_area * t_frame;
                    let cell = &mut acc[x * n_freq..(x + 1) * n_freq];
                    if bg > 0.0 {
                        cell.iter_mut().for_each(|a| *a += bg);
                    }
                    let dst = &mut out.counts[x * n_freq..(x + 1) * n_freq];
                    if sweep.shot_noise {
                        let mut rng = ChaCha8Rng::seed_from_u64(sweep.seed);
                        rng.set_stream(((z * n_y + y) * n_x + x) as u64);
                        for (d, &mean) in dst.iter_mut().zip(cell.iter()) {
                            *d = poisson_draw(mean, &mut rng) as f32;
                        }
                    } else {
                        for (d, &mean) in dst.iter_mut().zip(cell.iter()) {
                            *d = mean as f32;
                        }
                    }
                }
                out
            })
            .collect();

        for (y, row) in rendered_rows.into_iter().enumerate() {
            for x in 0..n_x {
                for f in 0..n_freq {
                    data[((f * n_z + z) * n_y + y) * n_x + x] = row.counts[x * n_freq + f];
                }
                let t = truth.index(z, y, x);
                truth.nv_photons[t] = row.nv_photons[x];
                truth.axial_sum[t] = row.axial[x];
                truth.nonaxial_sum[t] = row.nonaxial[x];
            }
        }
    }

    let stack = ImageStack::new(
        (n_freq, n_z, n_y, n_x),
        sweep.frequency_ghz.iter().map(|f| f * 1e9).collect(),
        sweep.z_offsets_um.clone(),
        scene.pixel_size_nm,
        data,
        Acquisition {
            total_time_s: sweep.total_time_s,
            photon_rate: sweep.photon_rate,
            seed: sweep.seed,
            integral_counts: sweep.shot_noise,
            bin_factor: 1,
            dropped_rows: 0,
            dropped_cols: 0,
        },
    )?;
    Ok(Rendered { stack, truth })
}

struct RowOut {
    counts: Vec<f32>,
    nv_photons: Vec<f64>,
    axial: Vec<f64>,
    nonaxial: Vec<f64>,
}

/// Photons per second per square micrometer of frequency-flat background at a pixel.
fn background_rate(scene: &Scene, x: usize, y: usize, z_um: f64) -> f64 {
    let bg = &scene.background;
    let mut rate = bg.uniform_rate;
    if bg.ribbon_rate > 0.0 && bg.ribbon_width_um > 0.0 {
        let p = scene.pixel_size_nm * 1e-3;
        let center = [(x as f64 + 0.5) * p, (y as f64 + 0.5) * p, z_um];
        if scene.boundary.geometry.signed_distance(&center).abs() <= 0.5 * bg.ribbon_width_um {
            rate += bg.ribbon_rate;
        }
    }
    rate
}

/// PSF weights of one emitter in one focal plane, clipped to the image.
struct Footprint {
    x0: usize,
    y0: usize,
    w: usize,
    h: usize,
    weights: Vec<f64>,
    /// Collection efficiency relative to an in-focus emitter.
    scale: f64,
}

fn footprint(
    scene: &Scene,
    psf: bool,
    e: &Emitter,
    z_focus: f64,
    n_y: usize,
    n_x: usize,
) -> Option<Footprint> {
    let pix_um = scene.pixel_size_nm * 1e-3;
    let cx = e.position[0] / pix_um;
    let cy = e.position[1] / pix_um;
    let own = |c: f64, n: usize| (c.floor().max(0.0) as usize).min(n - 1);
    if !psf {
        return Some(Footprint {
            x0: own(cx, n_x),
            y0: own(cy, n_y),
            w: 1,
            h: 1,
            weights: vec![1.0],
            scale: 1.0,
        });
    }
    let dz = e.position[2] - z_focus;
    if dz.abs() > scene.optics.max_defocus_um {
        return None;
    }
    let factor = scene.optics.defocus_factor(dz);
    let sigma = scene.optics.sigma_nm() * factor / scene.pixel_size_nm;
    let reach = 3.0 * sigma;
    // Pixel j has its centre at j + 0.5.
    let lo = |c: f64| (c - reach - 0.5).ceil() as isize;
    let hi = |c: f64| (c + reach - 0.5).floor() as isize;
    let (xa, xb, ya, yb) = (lo(cx), hi(cx), lo(cy), hi(cy));
    let mut total = 0.0;
    let mut cells = Vec::new();
    for j in ya..=yb {
        for i in xa..=xb {
            let dx = i as f64 + 0.5 - cx;
            let dy = j as f64 + 0.5 - cy;
            let d2 = dx * dx + dy * dy;
            if d2 <= reach * reach {
                let w = (-0.5 * d2 / (sigma * sigma)).exp();
                total += w;
                cells.push((j, i, w));
            }
        }
    }
    if total == 0.0 {
        // PSF narrower than the pixel grid resolves: all light lands in the containing pixel.
        return Some(Footprint {
            x0: own(cx, n_x),
            y0: own(cy, n_y),
            w: 1,
            h: 1,
            weights: vec![1.0],
            scale: 1.0 / (factor * factor),
        });
    }
    let in_image =
        |j: isize, i: isize| j >= 0 && i >= 0 && (j as usize) < n_y && (i as usize) < n_x;
    let (mut x0, mut x1, mut y0, mut y1) = (isize::MAX, isize::MIN, isize::MAX, isize::MIN);
    for &(j, i, _) in cells.iter().filter(|(j, i, _)| in_image(*j, *i)) {
        x0 = x0.min(i);
        x1 = x1.max(i);
        y0 = y0.min(j);
        y1 = y1.max(j);
    }
    if x0 > x1 {
        return None;
    }
    let w = (x1 - x0 + 1) as usize;
    let h = (y1 - y0 + 1) as usize;
    let mut weights = vec![0.0; w * h];
    for &(j, i, wt) in cells.iter().filter(|(j, i, _)| in_image(*j, *i)) {
        weights[(j - y0) as usize * w + (i - x0) as usize] = wt / total;
    }
    Some(Footprint {
        x0: x0 as usize,
        y0: y0 as usize,
        w,
        h,
        weights,
        scale: 1.0 / (factor * factor),
    })
}

/// Resonance pairs of one NV: one pair, or one per nuclear projection with hyperfine enabled.
fn nv_branches(scene: &Scene, nv: &NvEmitter, mode: ResonanceMode) -> Result<Vec<ResonancePair>> {
    let c = &scene.constants;
    match mode {
        ResonanceMode::LowField => {
            let p = scene.nv_spin(nv);
            branch_pairs(&p, scene)
        }
        ResonanceMode::HighField(b) => {
            let (bz, _) = project_to_nv_frame(&b, &nv.orientation);
            let shift = c.zeeman_ghz(bz.abs());
            Ok(vec![ResonancePair::new(
                c.d_gs_ghz + shift,
                c.d_gs_ghz - shift,
            )])
        }
    }
}

fn branch_pairs(p: &SpinParameters, scene: &Scene) -> Result<Vec<ResonancePair>> {
    if scene.line.hyperfine {
        Ok(hyperfine_resonances(p, &scene.constants)?
            .iter()
            .map(|(_, r)| *r)
            .collect())
    } else {
        Ok(vec![transition_frequencies_approx(p, &scene.constants)?])
    }
}

/// Ensemble-averaged branches of a group of NVs weighted by brightness.
fn group_branches(
    scene: &Scene,
    group: &[&NvEmitter],
    mode: ResonanceMode,
) -> Result<Vec<ResonancePair>> {
    let total: f64 = group.iter().map(|nv| nv.brightness).sum();
    match mode {
        ResonanceMode::LowField => {
            let c = &scene.constants;
            let shifts: &[f64] = if scene.line.hyperfine {
                &[-1.0, 0.0, 1.0]
            } else {
                &[0.0]
            };
            shifts
                .iter()
                .map(|m| {
                    let members: Vec<(OrientationClass, SpinParameters)> = group
                        .iter()
                        .map(|nv| {
                            let mut p = scene.nv_spin(nv);
                            p.b_field.z += m * (c.hyperfine_mhz / c.gyromagnetic_mhz_per_gauss);
                            (
                                OrientationClass {
                                    fraction: nv.brightness / total,
                                    ..nv.orientation
                                },
                                p,
                            )
                        })
                        .collect();
                    ensemble_resonances(&members, c)
                })
                .collect()
        }
        ResonanceMode::HighField(_) => {
            let mut plus = 0.0;
            let mut minus = 0.0;
            for nv in group {
                let r = nv_branches(scene, nv, mode)?[0];
                plus += nv.brightness / total * r.omega_plus;
                minus += nv.brightness / total * r.omega_minus;
            }
            Ok(vec![ResonancePair::new(plus, minus)])
        }
    }
}

fn lines_for(
    scene: &Scene,
    branches: &[ResonancePair],
    mode: ResonanceMode,
) -> Vec<LineShapeParams> {
    let l = &scene.line;
    let depth = if branches.len() > 1 {
        l.depth / branches.len() as f64
    } else {
        l.depth
    };
    let lines: Vec<LineShapeParams> = branches
        .iter()
        .flat_map(|r| {
            [r.omega_plus, r.omega_minus].map(|center| LineShapeParams {
                center,
                hwhm: l.hwhm_mhz,
                depth,
            })
        })
        .collect();
    match mode {
        ResonanceMode::HighField(_) if l.hyperfine => {
            hyperfine_triplets(&lines, scene.constants.hyperfine_mhz)
        }
        _ => lines,
    }
}

fn build_emitters(scene: &Scene, freq: &[f64], mode: ResonanceMode) -> Result<Vec<Emitter>> {
    let nvs = &scene.nv_list;
    let keys: Vec<ResonancePair> = nvs
        .iter()
        .map(|nv| nv_branches(scene, nv, mode).map(|b| b[b.len() / 2]))
        .collect::<Result<_>>()?;
    let groups = if scene.merge_unresolvable {
        cluster_unresolvable(scene, &keys)
    } else {
        (0..nvs.len()).map(|i| vec![i]).collect()
    };

    groups
        .par_iter()
        .map(|g| {
            let members: Vec<&NvEmitter> = g.iter().map(|&i| &nvs[i]).collect();
            let total: f64 = members.iter().map(|nv| nv.brightness).sum();
            let branches = if members.len() == 1 {
                nv_branches(scene, members[0], mode)?
            } else {
                group_branches(scene, &members, mode)?
            };
            let lines = lines_for(scene, &branches, mode);
            let mut position = [0.0; 3];
            let (mut axial, mut nonaxial) = (0.0, 0.0);
            for nv in &members {
                let w = nv.brightness / total;
                for (p, q) in position.iter_mut().zip(nv.position) {
                    *p += w * q;
                }
                let (a, n) = scene.nv_strain(nv);
                axial += w * a;
                nonaxial += w * n;
            }
            Ok(Emitter {
                position,
                brightness: total,
                contrast: freq.iter().map(|&f| contrast_at(f, &lines)).collect(),
                axial,
                nonaxial,
            })
        })
        .collect()
}

/// Greedy grouping in NV order: later NVs within one PSF sigma of a group's
/// first member whose resonances differ by less than the line FWHM join it.
fn cluster_unresolvable(scene: &Scene, keys: &[ResonancePair]) -> Vec<Vec<usize>> {
    let nvs = &scene.nv_list;
    let radius = scene.optics.sigma_nm() * 1e-3;
    let fwhm = 2.0 * scene.line.hwhm_mhz * 1e-3;
    let cell = |p: &[f64; 3]| {
        (
            (p[0] / radius).floor() as i64,
            (p[1] / radius).floor() as i64,
        )
    };
    let mut grid: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    for (i, nv) in nvs.iter().enumerate() {
        grid.entry(cell(&nv.position)).or_default().push(i);
    }
    let mut assigned = vec![false; nvs.len()];
    let mut groups = Vec::new();
    for i in 0..nvs.len() {
        if assigned[i] {
            continue;
        }
        assigned[i] = true;
        let mut group = vec![i];
        let (cx, cy) = cell(&nvs[i].position);
        let mut candidates: Vec<usize> = (-1..=1)
            .flat_map(|dy| (-1..=1).map(move |dx| (cx + dx, cy + dy)))
            .filter_map(|k| grid.get(&k))
            .flatten()
            .copied()
            .filter(|&j| j > i && !assigned[j])
            .collect();
        candidates.sort_unstable();
        for j in candidates {
            let a = &nvs[i].position;
            let b = &nvs[j].position;
            let d2: f64 = a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum();
            let close = d2 <= radius * radius;
            let same_lines = (keys[i].omega_plus - keys[j].omega_plus).abs() < fwhm
                && (keys[i].omega_minus - keys[j].omega_minus).abs() < fwhm;
            if close && same_lines {
                assigned[j] = true;
                group.push(j);
            }
        }
        groups.push(group);
    }
    groups
}
