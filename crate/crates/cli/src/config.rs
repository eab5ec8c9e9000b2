//! Scenario files: one TOML document holding the scene, the acquisition, and
//! the fit, map and classify settings. Every section and field has a default
//! except `acquisition.seed`, which `simulate` requires.

use std::path::{Path, PathBuf};

use nvstrain_core::fitting::FitConfig;
use nvstrain_core::simulator::{SceneDescription, SweepSettings};
use nvstrain_core::spectrum::linear_axis;
use nvstrain_core::strainmap::ClassifyConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub scene: SceneDescription,
    pub acquisition: AcquisitionConfig,
    pub fit: FitConfig,
    pub map: MapConfig,
    pub classify: ClassifyConfig,
    pub output: OutputConfig,
}

/// Uniform frequency sweep, both ends included.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrequencyAxis {
    pub start_ghz: f64,
    pub stop_ghz: f64,
    pub points: usize,
}

impl Default for FrequencyAxis {
    fn default() -> Self {
        Self {
            start_ghz: 2.85,
            stop_ghz: 2.89,
            points: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FieldMode {
    /// Strain-split lines near D with `scene.b_lab_gauss` as a small bias.
    LowField,
    /// Orientation-resolved lines `D +- gamma |B . axis|` for `scene.b_lab_gauss`.
    HighField,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AcquisitionConfig {
    pub frequency: FrequencyAxis,
    pub total_time_s: f64,
    /// Photons per second from one NV of unit brightness, off resonance.
    pub photon_rate: f64,
    pub seed: Option<u64>,
    pub z_offsets_um: Vec<f64>,
    pub shot_noise: bool,
    pub psf: bool,
    pub mode: FieldMode,
}

impl Default for AcquisitionConfig {
    fn default() -> Self {
        Self {
            frequency: FrequencyAxis::default(),
            total_time_s: 100.0,
            photon_rate: 1000.0,
            seed: None,
            z_offsets_um: vec![0.0],
            shot_noise: true,
            psf: true,
            mode: FieldMode::LowField,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapConfig {
    /// Spatial binning applied to the stack before fitting.
    pub bin_factor: usize,
    pub smoothing: bool,
    pub reference_d_ghz: f64,
    pub histogram_bins: usize,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self {
            bin_factor: 1,
            smoothing: true,
            reference_d_ghz: 2.87,
            histogram_bins: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Default output directory of `pipeline`.
    pub dir: Option<PathBuf>,
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let de = toml::Deserializer::parse(text).map_err(|e| CliError::Config(e.to_string()))?;
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            CliError::Config(format!("{path}: {}", e.into_inner().message()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// The document with every default written out.
    pub fn resolved_toml(&self) -> String {
        toml::to_string(self).expect("scenario config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |field: &str, why: &str| Err(CliError::Config(format!("{field}: {why}")));
        let f = &self.acquisition.frequency;
        if f.points < 2
            || !(f.stop_ghz > f.start_ghz)
            || !f.start_ghz.is_finite()
            || !f.stop_ghz.is_finite()
        {
            return bad(
                "acquisition.frequency",
                "needs start_ghz < stop_ghz and at least 2 points",
            );
        }
        if self.map.bin_factor == 0 {
            return bad("map.bin_factor", "must be at least 1");
        }
        if self.map.histogram_bins == 0 {
            return bad("map.histogram_bins", "must be at least 1");
        }
        if !(self.map.reference_d_ghz > 0.0) {
            return bad("map.reference_d_ghz", "must be positive");
        }
        self.fit
            .validate()
            .map_err(|e| CliError::Config(format!("fit: {e}")))?;
        Ok(())
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        self.acquisition.seed.ok_or_else(|| {
            CliError::Config("acquisition.seed: missing (required for simulate)".into())
        })
    }

    pub fn sweep(&self) -> Result<SweepSettings, CliError> {
        let a = &self.acquisition;
        let f = a.frequency;
        Ok(SweepSettings {
            z_offsets_um: a.z_offsets_um.clone(),
            shot_noise: a.shot_noise,
            psf: a.psf,
            ..SweepSettings::new(
                linear_axis(f.start_ghz, f.stop_ghz, f.points),
                a.total_time_s,
                a.photon_rate,
                self.seed()?,
            )
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_takes_defaults() {
        let cfg = ScenarioConfig::from_toml("").unwrap();
        assert_eq!(cfg, ScenarioConfig::default());
        assert!(matches!(cfg.seed(), Err(CliError::Config(_))));
    }

    #[test]
    fn resolved_echo_round_trips() {
        let cfg =
            ScenarioConfig::from_toml("[acquisition]\nseed = 4\nphoton_rate = 12.5\n").unwrap();
        let again = ScenarioConfig::from_toml(&cfg.resolved_toml()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.resolved_toml(), cfg.resolved_toml());
    }

    #[test]
    fn schema_errors_name_the_field() {
        let e = ScenarioConfig::from_toml("[scene.line]\ndepth = \"deep\"\n").unwrap_err();
        assert!(e.to_string().contains("scene.line.depth"), "{e}");
        let e = ScenarioConfig::from_toml("[fit]\nmax_iteration = 3\n").unwrap_err();
        assert!(e.to_string().contains("fit"), "{e}");
        let e = ScenarioConfig::from_toml("[map]\nbin_factor = 0\n").unwrap_err();
        assert!(e.to_string().contains("map.bin_factor"), "{e}");
    }
}
