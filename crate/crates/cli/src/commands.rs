//! The five subcommands. Each returns a printable summary; all file output is
//! a pure function of the inputs.

use std::fmt;
use std::path::{Path, PathBuf};

use nvstrain_core::fitting::{fit_stack, FitGrid};
use nvstrain_core::simulator::{render_high_field_stack, render_stack, Rendered, Scene};
use nvstrain_core::spin_model::{high_field_resonances, OrientationClass, PhysicalConstants};
use nvstrain_core::strainmap::{
    assemble_3d, bin_stack, orientation_contrast_maps, sensitivity_report, strain_from_resonances,
    ClassMaps, ClassifyConfig, SensitivityReport, StrainMap,
};
use nvstrain_core::{FitConfig, FitStatus, ImageStack};
use serde::Serialize;

use crate::config::{FieldMode, ScenarioConfig};
use crate::error::CliError;
use crate::files::{self, GrayScale};

/// Build the scene and render the stack a scenario describes.
pub fn render(cfg: &ScenarioConfig) -> Result<(Scene, Rendered), CliError> {
    let sweep = cfg.sweep()?;
    let scene = Scene::build(&cfg.scene).map_err(CliError::config)?;
    let rendered = match cfg.acquisition.mode {
        FieldMode::LowField => render_stack(&scene, &sweep),
        FieldMode::HighField => render_high_field_stack(&scene, cfg.scene.b_lab_gauss, &sweep),
    }
    .map_err(CliError::config)?;
    Ok((scene, rendered))
}

/// Where `simulate` echoes the resolved config for a stack path.
pub fn resolved_config_path(stack: &Path) -> PathBuf {
    stack.with_extension("resolved.toml")
}

pub struct SimulateSummary {
    pub stack: PathBuf,
    pub dims: (usize, usize, usize, usize),
    pub nvs: usize,
    pub total_counts: f64,
}

impl fmt::Display for SimulateSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (n_f, n_z, n_y, n_x) = self.dims;
        write!(
            f,
            "simulated {} NVs into {n_f} frames x {n_z} slices x {n_y}x{n_x} pixels ({} counts) -> {}",
            self.nvs,
            self.total_counts,
            self.stack.display()
        )
    }
}

pub fn simulate(config: &Path, out: &Path) -> Result<SimulateSummary, CliError> {
    let cfg = ScenarioConfig::load(config)?;
    simulate_config(&cfg, out)
}

pub fn simulate_config(cfg: &ScenarioConfig, out: &Path) -> Result<SimulateSummary, CliError> {
    let (scene, r) = render(cfg)?;
    create_parent(out)?;
    r.stack.save(out).map_err(CliError::data)?;
    files::write(&resolved_config_path(out), cfg.resolved_toml())?;
    Ok(SimulateSummary {
        stack: out.to_path_buf(),
        dims: r.stack.dims(),
        nvs: scene.nv_list.len(),
        total_counts: r.stack.total_counts(),
    })
}

/// Bin the stack by `bin_factor` and fit every pixel.
pub fn fit_binned(
    stack: &ImageStack,
    fit: &FitConfig,
    bin_factor: usize,
) -> Result<FitGrid, CliError> {
    let binned;
    let stack = if bin_factor > 1 {
        binned = bin_stack(stack, bin_factor).map_err(CliError::data)?;
        &binned
    } else {
        stack
    };
    fit_stack(stack, fit).map_err(CliError::data)
}

pub struct FitSummary {
    pub pixels: usize,
    pub median_ci_ghz: Option<f64>,
    pub valid_fraction: f64,
    pub statuses: Vec<(FitStatus, usize)>,
}

impl FitSummary {
    pub fn of(grid: &FitGrid) -> Self {
        let statuses = [
            FitStatus::Converged,
            FitStatus::DegenerateSingleDip,
            FitStatus::MaxIter,
            FitStatus::RejectedLowSnr,
        ]
        .into_iter()
        .map(|s| (s, grid.results.iter().filter(|r| r.status == s).count()))
        .collect();
        Self {
            pixels: grid.results.len(),
            median_ci_ghz: grid.median_ci(),
            valid_fraction: grid.valid_fraction(),
            statuses,
        }
    }
}

impl fmt::Display for FitSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ci = self
            .median_ci_ghz
            .map_or("n/a".to_string(), |c| format!("{:.1} kHz", c * 1e6));
        write!(
            f,
            "fitted {} pixels: median ci68 {ci}, valid fraction {:.4}",
            self.pixels, self.valid_fraction
        )?;
        for (s, n) in &self.statuses {
            write!(f, ", {} {n}", s.as_str())?;
        }
        Ok(())
    }
}

pub fn fit(input: &Path, config: Option<&Path>, out: &Path) -> Result<FitSummary, CliError> {
    let cfg = optional_config(config)?;
    let stack = ImageStack::load(input).map_err(CliError::data)?;
    let grid = fit_binned(&stack, &cfg.fit, cfg.map.bin_factor)?;
    create_parent(out)?;
    files::write(
        out,
        files::fits_to_string(&grid, stack.acquisition.bin_factor * cfg.map.bin_factor),
    )?;
    Ok(FitSummary::of(&grid))
}

#[derive(Serialize)]
struct ScaleEntry {
    file: String,
    min: f64,
    max: f64,
}

#[derive(Serialize)]
struct ReportFile {
    z_offset_um: f64,
    measurement_time_s: f64,
    valid_pixels: usize,
    median_ci68_khz: f64,
    median_precision_axial: f64,
    median_precision_nonaxial: f64,
    median_sensitivity_axial_per_root_hz: f64,
    median_sensitivity_nonaxial_per_root_hz: f64,
    ci68_histogram_khz: HistogramFile,
}

#[derive(Serialize)]
struct HistogramFile {
    edges: Vec<f64>,
    counts: Vec<usize>,
}

#[derive(Serialize)]
struct VolumeFile {
    z_offsets_um: Vec<f64>,
    boundary_positions_um: Vec<f64>,
}

pub struct SliceSummary {
    pub z_offset_um: f64,
    pub valid: usize,
    pub pixels: usize,
    pub report: SensitivityReport,
    pub axial_range: Option<(f64, f64)>,
}

pub struct MapSummary {
    pub slices: Vec<SliceSummary>,
    pub boundary_positions_um: Option<Vec<Option<f64>>>,
}

impl fmt::Display for MapSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, s) in self.slices.iter().enumerate() {
            if k > 0 {
                writeln!(f)?;
            }
            let r = &s.report;
            write!(
                f,
                "slice z={} um: valid {}/{}, median ci68 {:.1} kHz, precision {:.3e} axial / {:.3e} non-axial, sensitivity {:.3e} / {:.3e} Hz^-1/2",
                s.z_offset_um,
                s.valid,
                s.pixels,
                r.median_ci_ghz * 1e6,
                r.median_precision_axial,
                r.median_precision_nonaxial,
                r.median_sensitivity_axial,
                r.median_sensitivity_nonaxial
            )?;
            if let Some((lo, hi)) = s.axial_range {
                write!(f, ", axial [{lo:.3e}, {hi:.3e}]")?;
            }
        }
        if let Some(b) = &self.boundary_positions_um {
            let text: Vec<String> = b
                .iter()
                .map(|p| p.map_or("n/a".into(), |v| format!("{v:.3}")))
                .collect();
            write!(f, "\nboundary position by depth (um): {}", text.join(", "))?;
        }
        Ok(())
    }
}

/// Strain maps of every slice, smoothed when the config asks for it.
pub fn strain_maps(
    grid: &nvstrain_core::fitting::ResonanceGrid,
    cfg: &ScenarioConfig,
) -> Result<Vec<StrainMap>, CliError> {
    (0..grid.n_z)
        .map(|z| {
            let m = strain_from_resonances(grid, z, &cfg.scene.constants, cfg.map.reference_d_ghz)
                .map_err(CliError::data)?;
            Ok(if cfg.map.smoothing { m.smoothed() } else { m })
        })
        .collect()
}

pub fn map(input: &Path, config: Option<&Path>, out_dir: &Path) -> Result<MapSummary, CliError> {
    let cfg = optional_config(config)?;
    let table = files::parse_fits(&files::read_text(input)?)?;
    let maps = strain_maps(&table.grid, &cfg)?;
    create_dir(out_dir)?;
    let multi = maps.len() > 1;
    let mut slices = Vec::new();
    for (z, m) in maps.iter().enumerate() {
        let suffix = if multi {
            format!("_z{z}")
        } else {
            String::new()
        };
        let report = sensitivity_report(m, cfg.map.histogram_bins).map_err(CliError::data)?;
        let layers: [(&str, &[f64]); 7] = [
            ("axial", &m.axial),
            ("nonaxial", &m.nonaxial),
            ("precision_axial", &m.precision_axial),
            ("precision_nonaxial", &m.precision_nonaxial),
            ("ci68_ghz", &m.ci68),
            ("sensitivity_axial", &report.sensitivity_axial),
            ("sensitivity_nonaxial", &report.sensitivity_nonaxial),
        ];
        let mut scales = std::collections::BTreeMap::new();
        for (k, (name, values)) in layers.iter().enumerate() {
            files::write(
                &out_dir.join(format!("{name}{suffix}.csv")),
                files::grid_to_csv(values, m.n_x),
            )?;
            if k < 4 {
                let scale = GrayScale::of(values);
                let file = format!("{name}{suffix}.pgm");
                files::write(
                    &out_dir.join(&file),
                    files::pgm_bytes(values, m.n_y, m.n_x, scale),
                )?;
                let (min, max) = scale.map_or((f64::NAN, f64::NAN), |s| (s.min, s.max));
                scales.insert(name.to_string(), ScaleEntry { file, min, max });
            }
        }
        let sidecar = toml::to_string(&scales).expect("scale table serializes");
        files::write(
            &out_dir.join(format!("graymap_scale{suffix}.toml")),
            sidecar,
        )?;
        let h = &report.ci_histogram_khz;
        let report_file = ReportFile {
            z_offset_um: m.z_offset_um,
            measurement_time_s: report.measurement_time_s,
            valid_pixels: report.valid_pixels,
            median_ci68_khz: report.median_ci_ghz * 1e6,
            median_precision_axial: report.median_precision_axial,
            median_precision_nonaxial: report.median_precision_nonaxial,
            median_sensitivity_axial_per_root_hz: report.median_sensitivity_axial,
            median_sensitivity_nonaxial_per_root_hz: report.median_sensitivity_nonaxial,
            ci68_histogram_khz: HistogramFile {
                edges: h.edges.clone(),
                counts: h.counts.clone(),
            },
        };
        let text = toml::to_string(&report_file).expect("report serializes");
        files::write(&out_dir.join(format!("sensitivity{suffix}.toml")), text)?;
        let axial_range = GrayScale::of(&m.axial).map(|s| (s.min, s.max));
        slices.push(SliceSummary {
            z_offset_um: m.z_offset_um,
            valid: m.valid_count(),
            pixels: m.n_y * m.n_x,
            report,
            axial_range,
        });
    }
    let boundary_positions_um = if multi {
        let volume = assemble_3d(maps).map_err(CliError::data)?;
        let positions = volume.boundary_positions_um();
        let file = VolumeFile {
            z_offsets_um: volume.z_offsets_um(),
            boundary_positions_um: positions.iter().map(|p| p.unwrap_or(f64::NAN)).collect(),
        };
        files::write(
            &out_dir.join("volume.toml"),
            toml::to_string(&file).expect("volume serializes"),
        )?;
        Some(positions)
    } else {
        None
    };
    Ok(MapSummary {
        slices,
        boundary_positions_um,
    })
}

pub struct ClassifySummary {
    pub maps: ClassMaps,
}

impl fmt::Display for ClassifySummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = &self.maps;
        write!(f, "{} distinct classes", m.distinct_lines)?;
        for c in &m.classes {
            write!(
                f,
                "\nclass {}: {:.6} GHz, coverage {:.4}, {}",
                c.class,
                c.frequency_ghz,
                c.coverage,
                if c.present { "present" } else { "absent" }
            )?;
        }
        Ok(())
    }
}

/// Per-class resonance used for the contrast maps: the upper line when it lies
/// on the frequency axis, otherwise the lower one.
pub fn class_resonances(
    stack: &ImageStack,
    field: [f64; 3],
    c: &PhysicalConstants,
    cfg: &ClassifyConfig,
) -> Result<Vec<(usize, f64)>, CliError> {
    let f = stack.frequency_ghz();
    let (lo, hi) = (f[0], f[f.len() - 1]);
    let spectrum = high_field_resonances(
        &field.into(),
        &OrientationClass::all_equal(),
        c,
        cfg.line_resolution_mhz * 1e-3,
    )
    .map_err(CliError::data)?;
    spectrum
        .per_class
        .iter()
        .map(|&(class, upper)| {
            let lower = 2.0 * c.d_gs_ghz - upper;
            [upper, lower]
                .into_iter()
                .find(|v| (lo..=hi).contains(v))
                .map(|v| (class, v))
                .ok_or_else(|| {
                    CliError::Data(format!(
                        "class {class} lines {lower:.6} / {upper:.6} GHz lie outside the sweep {lo:.6}..{hi:.6} GHz"
                    ))
                })
        })
        .collect()
}

pub fn classify_stack(
    stack: &ImageStack,
    field: [f64; 3],
    cfg: &ScenarioConfig,
) -> Result<ClassMaps, CliError> {
    let resonances = class_resonances(stack, field, &cfg.scene.constants, &cfg.classify)?;
    orientation_contrast_maps(stack, 0, &resonances, &cfg.classify).map_err(CliError::data)
}

#[derive(Serialize)]
struct ClassFile {
    class: usize,
    frequency_ghz: f64,
    coverage: f64,
    present: bool,
    map: String,
}

#[derive(Serialize)]
struct ClassesFile {
    field_gauss: [f64; 3],
    distinct_classes: usize,
    populated_classes: usize,
    classes: Vec<ClassFile>,
}

pub fn classify(
    input: &Path,
    field: [f64; 3],
    config: Option<&Path>,
    out_dir: &Path,
) -> Result<ClassifySummary, CliError> {
    let cfg = optional_config(config)?;
    let stack = ImageStack::load(input).map_err(CliError::data)?;
    classify_to(&stack, field, &cfg, out_dir)
}

fn classify_to(
    stack: &ImageStack,
    field: [f64; 3],
    cfg: &ScenarioConfig,
    out_dir: &Path,
) -> Result<ClassifySummary, CliError> {
    let maps = classify_stack(stack, field, cfg)?;
    create_dir(out_dir)?;
    let mut classes = Vec::new();
    for c in &maps.classes {
        let name = format!("class_{}", c.class);
        files::write(
            &out_dir.join(format!("{name}.csv")),
            files::grid_to_csv(&c.contrast, maps.n_x),
        )?;
        let pgm = files::pgm_bytes(&c.contrast, maps.n_y, maps.n_x, GrayScale::of(&c.contrast));
        files::write(&out_dir.join(format!("{name}.pgm")), pgm)?;
        classes.push(ClassFile {
            class: c.class,
            frequency_ghz: c.frequency_ghz,
            coverage: c.coverage,
            present: c.present,
            map: format!("{name}.csv"),
        });
    }
    let summary = ClassesFile {
        field_gauss: field,
        distinct_classes: maps.distinct_lines,
        populated_classes: maps.distinct_classes,
        classes,
    };
    files::write(
        &out_dir.join("classes.toml"),
        toml::to_string(&summary).expect("class summary serializes"),
    )?;
    Ok(ClassifySummary { maps })
}

/// Output of `pipeline`, one line per stage.
pub struct PipelineSummary {
    pub lines: Vec<String>,
}

impl fmt::Display for PipelineSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.lines.join("\n"))
    }
}

/// Simulate, then fit and map (low field) or classify (high field).
pub fn pipeline(config: &Path, out_dir: Option<&Path>) -> Result<PipelineSummary, CliError> {
    let cfg = ScenarioConfig::load(config)?;
    let dir = out_dir
        .map(Path::to_path_buf)
        .or_else(|| cfg.output.dir.clone())
        .ok_or_else(|| CliError::Config("output.dir: missing and no --out given".into()))?;
    create_dir(&dir)?;
    let stack_path = dir.join("stack.nvs");
    let mut lines = vec![simulate_config(&cfg, &stack_path)?.to_string()];
    let stack = ImageStack::load(&stack_path).map_err(CliError::data)?;
    match cfg.acquisition.mode {
        FieldMode::LowField => {
            let grid = fit_binned(&stack, &cfg.fit, cfg.map.bin_factor)?;
            let fits_path = dir.join("fits.tsv");
            files::write(
                &fits_path,
                files::fits_to_string(&grid, stack.acquisition.bin_factor * cfg.map.bin_factor),
            )?;
            lines.push(FitSummary::of(&grid).to_string());
            let resolved = resolved_config_path(&stack_path);
            lines.push(map(&fits_path, Some(&resolved), &dir.join("maps"))?.to_string());
        }
        FieldMode::HighField => {
            lines.push(
                classify_to(&stack, cfg.scene.b_lab_gauss, &cfg, &dir.join("classes"))?.to_string(),
            );
        }
    }
    Ok(PipelineSummary { lines })
}

fn optional_config(path: Option<&Path>) -> Result<ScenarioConfig, CliError> {
    path.map_or_else(|| Ok(ScenarioConfig::default()), ScenarioConfig::load)
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn create_parent(path: &Path) -> Result<(), CliError> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => create_dir(p),
        _ => Ok(()),
    }
}
