use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spin_model::{OrientationClass, PhysicalConstants, SpinParameters};

/// Sign of the axial strain near the boundary. Tensile strain lowers the
/// zero-field splitting, so it is rendered as a negative axial value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrainSign {
    Tensile,
    Compressive,
}

impl StrainSign {
    pub fn factor(self) -> f64 {
        match self {
            Self::Tensile => -1.0,
            Self::Compressive => 1.0,
        }
    }
}

/// A straight grain boundary whose position and angle drift linearly with depth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundaryGeometry {
    /// A point on the boundary at z = 0, (x, y) in micrometers.
    pub anchor_um: [f64; 2],
    /// Direction of the boundary line at z = 0, degrees from +x toward +y.
    pub angle_deg: f64,
    /// Lateral shift of the anchor per micrometer of depth.
    pub drift_per_um: [f64; 2],
    /// Rotation of the boundary per micrometer of depth, degrees.
    pub rotation_deg_per_um: f64,
}

impl Default for BoundaryGeometry {
    fn default() -> Self {
        Self {
            anchor_um: [0.0, 0.0],
            angle_deg: 90.0,
            drift_per_um: [0.0, 0.0],
            rotation_deg_per_um: 0.0,
        }
    }
}

impl BoundaryGeometry {
    /// Anchor point and unit normal of the boundary line at depth `z`.
    pub fn line_at(&self, z_um: f64) -> ([f64; 2], [f64; 2]) {
        let anchor = [
            self.anchor_um[0] + self.drift_per_um[0] * z_um,
            self.anchor_um[1] + self.drift_per_um[1] * z_um,
        ];
        let theta = (self.angle_deg + self.rotation_deg_per_um * z_um).to_radians();
        (anchor, [-theta.sin(), theta.cos()])
    }

    /// Signed distance from the boundary line at the point's depth, micrometers.
    pub fn signed_distance(&self, p: &[f64; 3]) -> f64 {
        let (a, n) = self.line_at(p[2]);
        (p[0] - a[0]) * n[0] + (p[1] - a[1]) * n[1]
    }
}

/// Strain field around a single grain boundary: an exponential relaxation
/// from the peak value at the boundary to a far-field baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrainBoundaryModel {
    pub geometry: BoundaryGeometry,
    /// Magnitude of the axial strain at the boundary.
    pub peak_axial: f64,
    pub peak_nonaxial: f64,
    pub far_field_axial: f64,
    pub far_field_nonaxial: f64,
    pub relaxation_length_um: f64,
    pub sign: StrainSign,
    /// If set, the excess over the far field decays as `exp(-z / depth_decay_um)`.
    pub depth_decay_um: Option<f64>,
}

impl Default for GrainBoundaryModel {
    fn default() -> Self {
        Self {
            geometry: BoundaryGeometry::default(),
            peak_axial: 0.0,
            peak_nonaxial: 0.0,
            far_field_axial: 0.0,
            far_field_nonaxial: 0.0,
            relaxation_length_um: 24.0,
            sign: StrainSign::Tensile,
            depth_decay_um: None,
        }
    }
}

/// Largest strain magnitude accepted in a scene.
pub const MAX_STRAIN: f64 = 5e-3;

impl GrainBoundaryModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.relaxation_length_um > 0.0 && self.relaxation_length_um.is_finite()) {
            return Err(Error::InvalidScene(
                "relaxation_length_um must be positive".into(),
            ));
        }
        for (name, v) in [
            ("peak_axial", self.peak_axial),
            ("peak_nonaxial", self.peak_nonaxial),
            ("far_field_axial", self.far_field_axial),
            ("far_field_nonaxial", self.far_field_nonaxial),
        ] {
            if !(v.abs() < MAX_STRAIN) {
                return Err(Error::InvalidScene(format!(
                    "|{name}| must be below {MAX_STRAIN}, got {v}"
                )));
            }
        }
        if self.peak_nonaxial < 0.0 || self.far_field_nonaxial < 0.0 {
            return Err(Error::InvalidScene(
                "non-axial strain magnitudes must be non-negative".into(),
            ));
        }
        if let Some(l) = self.depth_decay_um {
            if !(l > 0.0) {
                return Err(Error::InvalidScene(
                    "depth_decay_um must be positive".into(),
                ));
            }
        }
        Ok(())
    }

    /// `(axial, nonaxial)` strain at a position in micrometers.
    pub fn strain_at(&self, position: &[f64; 3]) -> (f64, f64) {
        let d = self.geometry.signed_distance(position).abs();
        let mut fall = (-d / self.relaxation_length_um).exp();
        if let Some(l) = self.depth_decay_um {
            fall *= (-position[2].max(0.0) / l).exp();
        }
        let axial = self.far_field_axial + (self.peak_axial - self.far_field_axial) * fall;
        let nonaxial =
            self.far_field_nonaxial + (self.peak_nonaxial - self.far_field_nonaxial) * fall;
        (self.sign.factor() * axial, nonaxial)
    }
}

/// Detection optics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Optics {
    pub numerical_aperture: f64,
    pub wavelength_nm: f64,
    /// Defocus length: the PSF width grows as `sigma0 (1 + |dz| / z_r)`.
    pub rayleigh_range_um: f64,
    /// Emitters further than this from the focal plane are not rendered in it.
    pub max_defocus_um: f64,
}

impl Default for Optics {
    fn default() -> Self {
        Self {
            numerical_aperture: 1.3,
            wavelength_nm: 670.0,
            rayleigh_range_um: 0.3,
            max_defocus_um: 1.5,
        }
    }
}

impl Optics {
    /// In-focus Gaussian PSF width, `0.21 lambda / NA`, nm.
    pub fn sigma_nm(&self) -> f64 {
        0.21 * self.wavelength_nm / self.numerical_aperture
    }

    pub fn sigma_at_defocus_nm(&self, dz_um: f64) -> f64 {
        self.sigma_nm() * self.defocus_factor(dz_um)
    }

    pub fn defocus_factor(&self, dz_um: f64) -> f64 {
        1.0 + dz_um.abs() / self.rayleigh_range_um
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.numerical_aperture > 0.0 && self.numerical_aperture < 2.0) {
            return Err(Error::InvalidScene(format!(
                "numerical aperture must lie in (0, 2), got {}",
                self.numerical_aperture
            )));
        }
        if !(self.wavelength_nm > 0.0 && self.rayleigh_range_um > 0.0 && self.max_defocus_um >= 0.0)
        {
            return Err(Error::InvalidScene(
                "optics lengths must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Frequency-independent fluorescence added to every frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackgroundModel {
    /// Full width of the bright ribbon centred on the grain boundary, micrometers.
    pub ribbon_width_um: f64,
    /// Extra photons per second per square micrometer inside the ribbon.
    pub ribbon_rate: f64,
    /// Photons per second per square micrometer everywhere.
    pub uniform_rate: f64,
}

impl Default for BackgroundModel {
    fn default() -> Self {
        Self {
            ribbon_width_um: 0.0,
            ribbon_rate: 0.0,
            uniform_rate: 0.0,
        }
    }
}

/// ODMR line shape shared by all NVs in a scene.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LineModel {
    /// Contrast depth of each transition.
    pub depth: f64,
    pub hwhm_mhz: f64,
    pub hyperfine: bool,
}

impl Default for LineModel {
    fn default() -> Self {
        Self {
            depth: 0.02,
            hwhm_mhz: 0.5,
            hyperfine: false,
        }
    }
}

/// A single NV emitter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NvEmitter {
    /// (x, y, z) in micrometers; z is depth below the surface.
    pub position: [f64; 3],
    pub orientation: OrientationClass,
    /// Relative photon rate.
    pub brightness: f64,
    /// `(axial, nonaxial)` strain replacing the boundary model at this NV.
    pub strain_override: Option<[f64; 2]>,
}

/// Where a population of NVs is placed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Region {
    All,
    /// Points with `(p - point) . normal >= 0`.
    HalfPlane {
        point: [f64; 2],
        normal: [f64; 2],
    },
    Rect {
        min: [f64; 2],
        max: [f64; 2],
    },
}

impl Region {
    fn contains(&self, x: f64, y: f64) -> bool {
        match self {
            Self::All => true,
            Self::HalfPlane { point, normal } => {
                (x - point[0]) * normal[0] + (y - point[1]) * normal[1] >= 0.0
            }
            Self::Rect { min, max } => x >= min[0] && x <= max[0] && y >= min[1] && y <= max[1],
        }
    }
}

/// Randomly placed NVs with a given areal density per depth layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Population {
    pub region: Region,
    /// NVs per square micrometer in each layer.
    pub density_per_um2: f64,
    /// Depth of each layer, micrometers.
    pub depths_um: Vec<f64>,
    /// Uniform depth jitter half-width.
    pub depth_jitter_um: f64,
    /// Relative populations of the four (111) classes.
    pub class_fractions: [f64; 4],
    pub brightness: f64,
    pub strain_override: Option<[f64; 2]>,
}

impl Default for Population {
    fn default() -> Self {
        Self {
            region: Region::All,
            density_per_um2: 1.0,
            depths_um: vec![0.0],
            depth_jitter_um: 0.0,
            class_fractions: [0.25; 4],
            brightness: 1.0,
            strain_override: None,
        }
    }
}

/// Serializable description of a scene; [`Scene::build`] places the NVs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneDescription {
    /// (x, y, z) extent in micrometers.
    pub extent_um: [f64; 3],
    pub pixel_size_nm: f64,
    pub optics: Optics,
    pub boundary: GrainBoundaryModel,
    pub background: BackgroundModel,
    pub line: LineModel,
    pub constants: PhysicalConstants,
    /// Lab-frame bias field, gauss.
    pub b_lab_gauss: [f64; 3],
    /// Render co-located NVs with unresolvable resonances as one ensemble-averaged emitter.
    pub merge_unresolvable: bool,
    /// Seed for NV placement.
    pub placement_seed: u64,
    pub populations: Vec<Population>,
}

impl Default for SceneDescription {
    fn default() -> Self {
        Self {
            extent_um: [10.0, 10.0, 1.0],
            pixel_size_nm: 80.0,
            optics: Optics::default(),
            boundary: GrainBoundaryModel::default(),
            background: BackgroundModel::default(),
            line: LineModel::default(),
            constants: PhysicalConstants::default(),
            b_lab_gauss: [0.0; 3],
            merge_unresolvable: true,
            placement_seed: 0,
            populations: Vec::new(),
        }
    }
}

/// An immutable scene ready for rendering.
#[derive(Debug, Clone)]
pub struct Scene {
    pub extent_um: [f64; 3],
    pub pixel_size_nm: f64,
    pub optics: Optics,
    pub boundary: GrainBoundaryModel,
    pub background: BackgroundModel,
    pub line: LineModel,
    pub constants: PhysicalConstants,
    pub b_lab_gauss: Vector3<f64>,
    pub merge_unresolvable: bool,
    pub nv_list: Vec<NvEmitter>,
}

impl Scene {
    /// Place every population's NVs and validate the result.
    pub fn build(desc: &SceneDescription) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(desc.placement_seed);
        let mut nv_list = Vec::new();
        for (k, pop) in desc.populations.iter().enumerate() {
            place_population(pop, desc.extent_um, &mut rng, &mut nv_list)
                .map_err(|e| Error::InvalidScene(format!("populations[{k}]: {e}")))?;
        }
        Self::with_nvs(desc, nv_list)
    }

    /// A scene with an explicit NV list; `desc.populations` is ignored.
    pub fn with_nvs(desc: &SceneDescription, nv_list: Vec<NvEmitter>) -> Result<Self> {
        let scene = Self {
            extent_um: desc.extent_um,
            pixel_size_nm: desc.pixel_size_nm,
            optics: desc.optics,
            boundary: desc.boundary,
            background: desc.background,
            line: desc.line,
            constants: desc.constants,
            b_lab_gauss: Vector3::from(desc.b_lab_gauss),
            merge_unresolvable: desc.merge_unresolvable,
            nv_list,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.pixel_size_nm > 0.0) {
            return Err(Error::InvalidScene("pixel_size_nm must be positive".into()));
        }
        if self.extent_um.iter().any(|e| !(*e > 0.0)) {
            return Err(Error::InvalidScene("extent must be positive".into()));
        }
        self.optics.validate()?;
        self.boundary.validate()?;
        self.constants
            .validate()
            .map_err(|e| Error::InvalidScene(e.to_string()))?;
        let l = &self.line;
        if !(l.depth > 0.0 && l.depth < 1.0 && l.hwhm_mhz > 0.0) {
            return Err(Error::InvalidScene(
                "line depth must lie in (0, 1) and hwhm be positive".into(),
            ));
        }
        let bg = &self.background;
        if bg.ribbon_rate < 0.0 || bg.uniform_rate < 0.0 || bg.ribbon_width_um < 0.0 {
            return Err(Error::InvalidScene(
                "background rates must be non-negative".into(),
            ));
        }
        for (i, nv) in self.nv_list.iter().enumerate() {
            let inside = nv
                .position
                .iter()
                .zip(&self.extent_um)
                .all(|(p, e)| *p >= 0.0 && *p <= *e);
            if !inside {
                return Err(Error::InvalidScene(format!(
                    "nv {i} at {:?} lies outside the extent",
                    nv.position
                )));
            }
            if !(nv.brightness > 0.0) {
                return Err(Error::InvalidScene(format!(
                    "nv {i} has non-positive brightness"
                )));
            }
        }
        Ok(())
    }

    /// Image size `(n_y, n_x)` in pixels.
    pub fn grid(&self) -> (usize, usize) {
        let n = |e: f64| ((e * 1e3 / self.pixel_size_nm) + 1e-9).floor() as usize;
        (n(self.extent_um[1]), n(self.extent_um[0]))
    }

    /// `(axial, nonaxial)` strain seen by an NV.
    pub fn nv_strain(&self, nv: &NvEmitter) -> (f64, f64) {
        match nv.strain_override {
            Some([a, n]) => (a, n),
            None => self.boundary.strain_at(&nv.position),
        }
    }

    pub fn nv_spin(&self, nv: &NvEmitter) -> SpinParameters {
        let (axial, nonaxial) = self.nv_strain(nv);
        let b = nv.orientation.nv_frame_field(&self.b_lab_gauss);
        SpinParameters::from_strain(axial, nonaxial, b, &self.constants)
    }
}

fn place_population(
    pop: &Population,
    extent: [f64; 3],
    rng: &mut ChaCha8Rng,
    out: &mut Vec<NvEmitter>,
) -> Result<()> {
    let total: f64 = pop.class_fractions.iter().sum();
    if !(total > 0.0) || pop.class_fractions.iter().any(|f| *f < 0.0) {
        return Err(Error::InvalidScene(
            "class_fractions must be non-negative with a positive sum".into(),
        ));
    }
    if !(pop.density_per_um2 >= 0.0 && pop.brightness > 0.0) {
        return Err(Error::InvalidScene(
            "density must be non-negative and brightness positive".into(),
        ));
    }
    let classes: Vec<OrientationClass> = (0..4)
        .map(|i| OrientationClass::crystal(i, pop.class_fractions[i] / total))
        .collect::<Result<_>>()?;
    // Expected count over the region, found by sampling its area fraction on a fixed grid.
    let samples = 200;
    let inside = (0..samples * samples)
        .filter(|k| {
            let x = (k % samples) as f64 + 0.5;
            let y = (k / samples) as f64 + 0.5;
            pop.region.contains(
                x / samples as f64 * extent[0],
                y / samples as f64 * extent[1],
            )
        })
        .count();
    let area = extent[0] * extent[1] * inside as f64 / (samples * samples) as f64;
    let per_layer = (pop.density_per_um2 * area).round() as usize;
    for &depth in &pop.depths_um {
        let mut placed = 0;
        let mut attempts = 0usize;
        while placed < per_layer {
            attempts += 1;
            if attempts > 100 * per_layer + 1000 {
                return Err(Error::InvalidScene("region too small to place NVs".into()));
            }
            let x = rng.random::<f64>() * extent[0];
            let y = rng.random::<f64>() * extent[1];
            let jitter = (rng.random::<f64>() * 2.0 - 1.0) * pop.depth_jitter_um;
            let u = rng.random::<f64>();
            if !pop.region.contains(x, y) {
                continue;
            }
            let z = (depth + jitter).clamp(0.0, extent[2]);
            let mut acc = 0.0;
            let mut class = classes[3];
            for c in &classes {
                acc += c.fraction;
                if u < acc && c.fraction > 0.0 {
                    class = *c;
                    break;
                }
            }
            if class.fraction == 0.0 {
                class = *classes
                    .iter()
                    .rev()
                    .find(|c| c.fraction > 0.0)
                    .expect("positive sum");
            }
            out.push(NvEmitter {
                position: [x, y, z],
                orientation: class,
                brightness: pop.brightness,
                strain_override: pop.strain_override,
            });
            placed += 1;
        }
    }
    Ok(())
}
