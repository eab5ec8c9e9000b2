//! Ground-state spin-1 physics of the NV center.
//!
//! The Hamiltonian is written in the `m_s = {+1, 0, -1}` basis with
//! `S_z = diag(1, 0, -1)` and the usual ladder construction for `S_x`, `S_y`.
//! All energies are frequencies: GHz for the matrix and resonances, MHz for
//! the effective-field components `E_x, E_y, E_z`, gauss for magnetic fields.

use nalgebra::{Matrix3, Vector3};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MHZ_PER_GHZ: f64 = 1e3;

/// Physical constants used by every conversion between fields, strain and frequency.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhysicalConstants {
    /// Zero-field splitting `D_gs`, GHz.
    pub d_gs_ghz: f64,
    /// Electron gyromagnetic ratio `g mu_B / h`, MHz per gauss.
    pub gyromagnetic_mhz_per_gauss: f64,
    /// Axial frequency shift per unit strain, GHz.
    pub axial_susceptibility_ghz: f64,
    /// Transverse frequency shift per unit strain, GHz.
    pub transverse_susceptibility_ghz: f64,
    /// 14N hyperfine splitting, MHz.
    pub hyperfine_mhz: f64,
}

impl Default for PhysicalConstants {
    fn default() -> Self {
        Self {
            d_gs_ghz: 2.87,
            gyromagnetic_mhz_per_gauss: 2.8031,
            axial_susceptibility_ghz: 9.38,
            transverse_susceptibility_ghz: 20.6,
            hyperfine_mhz: 2.16,
        }
    }
}

impl PhysicalConstants {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("d_gs_ghz", self.d_gs_ghz),
            (
                "gyromagnetic_mhz_per_gauss",
                self.gyromagnetic_mhz_per_gauss,
            ),
            ("axial_susceptibility_ghz", self.axial_susceptibility_ghz),
            (
                "transverse_susceptibility_ghz",
                self.transverse_susceptibility_ghz,
            ),
            ("hyperfine_mhz", self.hyperfine_mhz),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be finite and positive, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Zeeman frequency of a field component, GHz.
    #[inline]
    pub fn zeeman_ghz(&self, b_gauss: f64) -> f64 {
        self.gyromagnetic_mhz_per_gauss * b_gauss / MHZ_PER_GHZ
    }

    /// Axial effective-field energy `E_z` (MHz) produced by a strain value.
    #[inline]
    pub fn axial_energy_mhz(&self, strain: f64) -> f64 {
        strain * self.axial_susceptibility_ghz * MHZ_PER_GHZ
    }

    /// Transverse effective-field energy `E_perp` (MHz) produced by a strain value.
    #[inline]
    pub fn transverse_energy_mhz(&self, strain: f64) -> f64 {
        strain * self.transverse_susceptibility_ghz * MHZ_PER_GHZ
    }
}

/// Per-NV physical state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpinParameters {
    /// Zero-field splitting, GHz.
    pub d_gs: f64,
    /// Effective-field components, MHz.
    pub e_x: f64,
    pub e_y: f64,
    pub e_z: f64,
    /// Magnetic field in the NV frame (z along the NV axis), gauss.
    pub b_field: Vector3<f64>,
}

impl SpinParameters {
    pub fn zero_field(c: &PhysicalConstants) -> Self {
        Self {
            d_gs: c.d_gs_ghz,
            e_x: 0.0,
            e_y: 0.0,
            e_z: 0.0,
            b_field: Vector3::zeros(),
        }
    }

    /// Parameters for an NV under axial and non-axial strain, with the
    /// transverse component placed along x.
    pub fn from_strain(
        axial_strain: f64,
        nonaxial_strain: f64,
        b_field: Vector3<f64>,
        c: &PhysicalConstants,
    ) -> Self {
        Self {
            d_gs: c.d_gs_ghz,
            e_x: c.transverse_energy_mhz(nonaxial_strain),
            e_y: 0.0,
            e_z: c.axial_energy_mhz(axial_strain),
            b_field,
        }
    }

    pub fn e_perp(&self) -> f64 {
        self.e_x.hypot(self.e_y)
    }

    pub fn b_perp(&self) -> f64 {
        self.b_field.x.hypot(self.b_field.y)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.d_gs, self.e_x, self.e_y, self.e_z]
            .iter()
            .chain(self.b_field.iter())
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidParameter(format!(
                "spin parameters must be finite: {self:?}"
            )));
        }
        Ok(())
    }
}

/// One of the four crystallographic NV axis directions, with its population weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientationClass {
    pub index: usize,
    /// Unit vector in the lab frame.
    pub axis: Vector3<f64>,
    pub fraction: f64,
}

impl OrientationClass {
    /// The `index`-th (111) direction: (1,1,1), (1,-1,-1), (-1,1,-1), (-1,-1,1), normalized.
    pub fn crystal(index: usize, fraction: f64) -> Result<Self> {
        const SIGNS: [[f64; 3]; 4] = [
            [1.0, 1.0, 1.0],
            [1.0, -1.0, -1.0],
            [-1.0, 1.0, -1.0],
            [-1.0, -1.0, 1.0],
        ];
        let s = SIGNS.get(index).ok_or_else(|| {
            Error::InvalidArgument(format!("orientation class index {index} outside 0..3"))
        })?;
        Ok(Self {
            index,
            axis: Vector3::new(s[0], s[1], s[2]) / 3f64.sqrt(),
            fraction,
        })
    }

    /// All four classes with equal population.
    pub fn all_equal() -> [Self; 4] {
        [0, 1, 2, 3].map(|i| Self::crystal(i, 0.25).expect("index in range"))
    }

    /// The lab-frame field expressed in this NV's frame. The transverse part is
    /// placed on the x axis, which is all the spin physics depends on.
    pub fn nv_frame_field(&self, b_lab: &Vector3<f64>) -> Vector3<f64> {
        let (bz, bperp) = project_to_nv_frame(b_lab, self);
        Vector3::new(bperp, 0.0, bz)
    }
}

/// The two `m_s = 0 -> +-1` transition frequencies, GHz, with `omega_plus >= omega_minus`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResonancePair {
    pub omega_plus: f64,
    pub omega_minus: f64,
}

impl ResonancePair {
    pub fn new(a: f64, b: f64) -> Self {
        if a >= b {
            Self {
                omega_plus: a,
                omega_minus: b,
            }
        } else {
            Self {
                omega_plus: b,
                omega_minus: a,
            }
        }
    }

    pub fn center(&self) -> f64 {
        0.5 * (self.omega_plus + self.omega_minus)
    }

    pub fn half_splitting(&self) -> f64 {
        0.5 * (self.omega_plus - self.omega_minus)
    }
}

/// Which term dominates the `sqrt(E_perp^2 + (g mu_B B_z)^2)` splitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldRegime {
    HighField,
    LowField,
    Intermediate,
}

fn spin_operators() -> (Matrix3<Complex64>, Matrix3<Complex64>, Matrix3<Complex64>) {
    let r = std::f64::consts::FRAC_1_SQRT_2;
    let re = |v: f64| Complex64::new(v, 0.0);
    let im = |v: f64| Complex64::new(0.0, v);
    let z = Complex64::new(0.0, 0.0);
    let sx = Matrix3::new(z, re(r), z, re(r), z, re(r), z, re(r), z);
    let sy = Matrix3::new(z, im(-r), z, im(r), z, im(-r), z, im(r), z);
    let sz = Matrix3::from_diagonal(&Vector3::new(re(1.0), z, re(-1.0)));
    (sx, sy, sz)
}

/// Ground-state Hamiltonian `H/h` in GHz, basis order `m_s = +1, 0, -1`.
pub fn build_hamiltonian(p: &SpinParameters, c: &PhysicalConstants) -> Result<Matrix3<Complex64>> {
    p.validate()?;
    let (sx, sy, sz) = spin_operators();
    let ex = p.e_x / MHZ_PER_GHZ;
    let ey = p.e_y / MHZ_PER_GHZ;
    let ez = p.e_z / MHZ_PER_GHZ;
    let sz2 = sz * sz;
    let zero_field = sz2 * Complex64::from(p.d_gs + ez) - (sx * sx - sy * sy) * Complex64::from(ex)
        + (sx * sy + sy * sx) * Complex64::from(ey);
    let zeeman = sx * Complex64::from(c.zeeman_ghz(p.b_field.x))
        + sy * Complex64::from(c.zeeman_ghz(p.b_field.y))
        + sz * Complex64::from(c.zeeman_ghz(p.b_field.z));
    Ok(zero_field + zeeman)
}

/// Transition frequencies from exact diagonalization of the Hamiltonian.
///
/// The `m_s = 0`-like eigenstate is the one with the largest overlap with `|0>`;
/// the two returned frequencies are the other eigenvalues measured from it.
pub fn transition_frequencies_exact(
    p: &SpinParameters,
    c: &PhysicalConstants,
) -> Result<ResonancePair> {
    let h = build_hamiltonian(p, c)?;
    let eig = h.try_symmetric_eigen(1e-15, 10_000).ok_or_else(|| {
        Error::Numerical("Hamiltonian eigen-decomposition did not converge".into())
    })?;
    let ground = (0..3)
        .max_by(|&a, &b| {
            let oa = eig.eigenvectors[(1, a)].norm_sqr();
            let ob = eig.eigenvectors[(1, b)].norm_sqr();
            oa.total_cmp(&ob)
        })
        .expect("three eigenvectors");
    let e0 = eig.eigenvalues[ground];
    let mut others = (0..3)
        .filter(|&i| i != ground)
        .map(|i| eig.eigenvalues[i] - e0);
    let a = others.next().expect("two excited levels");
    let b = others.next().expect("two excited levels");
    if !(a.is_finite() && b.is_finite()) {
        return Err(Error::Numerical("non-finite eigenvalues".into()));
    }
    Ok(ResonancePair::new(a, b))
}

/// Closed-form transition frequencies, accurate for `B_perp << D`:
/// `D + E_z +- sqrt(E_perp^2 + (g mu_B B_z)^2)`.
pub fn transition_frequencies_approx(
    p: &SpinParameters,
    c: &PhysicalConstants,
) -> Result<ResonancePair> {
    p.validate()?;
    let e_perp = p.e_perp() / MHZ_PER_GHZ;
    let zeeman = c.zeeman_ghz(p.b_field.z);
    let center = p.d_gs + p.e_z / MHZ_PER_GHZ;
    let half = e_perp.hypot(zeeman);
    Ok(ResonancePair::new(center + half, center - half))
}

/// Resonances of the three 14N nuclear projections `m_I = -1, 0, +1`.
///
/// The hyperfine interaction acts as an extra axial field of `m_I * A / gamma`.
pub fn hyperfine_resonances(
    p: &SpinParameters,
    c: &PhysicalConstants,
) -> Result<[(i8, ResonancePair); 3]> {
    let shift_gauss = c.hyperfine_mhz / c.gyromagnetic_mhz_per_gauss;
    let mut out = [(0i8, ResonancePair::new(0.0, 0.0)); 3];
    for (slot, m_i) in out.iter_mut().zip([-1i8, 0, 1]) {
        let mut q = *p;
        q.b_field.z += f64::from(m_i) * shift_gauss;
        *slot = (m_i, transition_frequencies_approx(&q, c)?);
    }
    Ok(out)
}

/// Classify the field regime; `ratio_threshold` must exceed 1.
pub fn classify_regime(
    p: &SpinParameters,
    c: &PhysicalConstants,
    ratio_threshold: f64,
) -> FieldRegime {
    debug_assert!(ratio_threshold > 1.0);
    let zeeman = c.zeeman_ghz(p.b_field.z.abs()) * MHZ_PER_GHZ;
    let e_perp = p.e_perp();
    if zeeman > ratio_threshold * e_perp {
        FieldRegime::HighField
    } else if e_perp > ratio_threshold * zeeman {
        FieldRegime::LowField
    } else {
        FieldRegime::Intermediate
    }
}

/// Split a lab-frame field into its component along the NV axis and the
/// magnitude of the remainder, both in gauss.
pub fn project_to_nv_frame(b_lab: &Vector3<f64>, o: &OrientationClass) -> (f64, f64) {
    let bz = b_lab.dot(&o.axis);
    let perp2 = (b_lab.norm_squared() - bz * bz).max(0.0);
    (bz, perp2.sqrt())
}

/// A resonance line shared by one or more orientation classes.
#[derive(Debug, Clone, PartialEq)]
pub struct HighFieldLine {
    /// Upper-branch frequency `D + gamma |B . axis|`, GHz.
    pub upper: f64,
    /// Lower-branch frequency `D - gamma |B . axis|`, GHz.
    pub lower: f64,
    pub classes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HighFieldSpectrum {
    /// `(class index, upper-branch frequency GHz)` per populated class.
    pub per_class: Vec<(usize, f64)>,
    /// Classes merged into distinct lines, ascending in frequency.
    pub lines: Vec<HighFieldLine>,
}

impl HighFieldSpectrum {
    pub fn distinct_lines(&self) -> usize {
        self.lines.len()
    }
}

/// High-field resonances per orientation class. Classes with zero population
/// are skipped; classes whose frequencies agree within `resolution_ghz` share a line.
pub fn high_field_resonances(
    b_lab: &Vector3<f64>,
    orientations: &[OrientationClass],
    c: &PhysicalConstants,
    resolution_ghz: f64,
) -> Result<HighFieldSpectrum> {
    if orientations.is_empty() {
        return Err(Error::InvalidArgument(
            "no orientation classes given".into(),
        ));
    }
    let mut per_class: Vec<(usize, f64)> = orientations
        .iter()
        .filter(|o| o.fraction > 0.0)
        .map(|o| {
            let (bz, _) = project_to_nv_frame(b_lab, o);
            (o.index, c.d_gs_ghz + c.zeeman_ghz(bz.abs()))
        })
        .collect();
    per_class.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));

    let mut lines: Vec<HighFieldLine> = Vec::new();
    for &(idx, f) in &per_class {
        match lines.last_mut() {
            Some(line) if (f - line.upper).abs() <= resolution_ghz => line.classes.push(idx),
            _ => lines.push(HighFieldLine {
                upper: f,
                lower: 2.0 * c.d_gs_ghz - f,
                classes: vec![idx],
            }),
        }
    }
    per_class.sort_by_key(|&(idx, _)| idx);
    Ok(HighFieldSpectrum { per_class, lines })
}

/// Observed resonances of unresolved NVs: the population-weighted mean of each
/// member's closed-form resonances. Fractions must sum to one.
pub fn ensemble_resonances(
    members: &[(OrientationClass, SpinParameters)],
    c: &PhysicalConstants,
) -> Result<ResonancePair> {
    if members.is_empty() {
        return Err(Error::InvalidEnsemble("ensemble has no members".into()));
    }
    let total: f64 = members.iter().map(|(o, _)| o.fraction).sum();
    if (total - 1.0).abs() > 1e-9 || members.iter().any(|(o, _)| !(o.fraction >= 0.0)) {
        return Err(Error::InvalidEnsemble(format!(
            "fractions must be non-negative and sum to 1, got {total}"
        )));
    }
    // Averaging offsets from D keeps the rounding at the scale of the shifts.
    let mut plus = 0.0;
    let mut minus = 0.0;
    for (o, p) in members {
        let r = transition_frequencies_approx(p, c)?;
        plus += o.fraction * (r.omega_plus - c.d_gs_ghz);
        minus += o.fraction * (r.omega_minus - c.d_gs_ghz);
    }
    Ok(ResonancePair::new(c.d_gs_ghz + plus, c.d_gs_ghz + minus))
}

/// `(E_z, E_perp)` in MHz read back from a zero-field resonance pair.
pub fn observed_strain_components(r: &ResonancePair, c: &PhysicalConstants) -> (f64, f64) {
    let e_z = (r.center() - c.d_gs_ghz) * MHZ_PER_GHZ;
    let e_perp = r.half_splitting() * MHZ_PER_GHZ;
    (e_z, e_perp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn c() -> PhysicalConstants {
        PhysicalConstants::default()
    }

    fn params(e: (f64, f64, f64), b: (f64, f64, f64)) -> SpinParameters {
        SpinParameters {
            d_gs: 2.87,
            e_x: e.0,
            e_y: e.1,
            e_z: e.2,
            b_field: Vector3::new(b.0, b.1, b.2),
        }
    }

    fn assert_diag(h: &Matrix3<Complex64>, d: [f64; 3]) {
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { d[i] } else { 0.0 };
                assert_abs_diff_eq!(h[(i, j)].re, want, epsilon = 1e-12);
                assert_abs_diff_eq!(h[(i, j)].im, 0.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn default_constants() {
        let c = c();
        assert_eq!(c.axial_susceptibility_ghz, 9.38);
        assert_eq!(c.transverse_susceptibility_ghz, 20.6);
        assert_eq!(c.d_gs_ghz, 2.87);
        c.validate().unwrap();
        let bad = PhysicalConstants {
            hyperfine_mhz: 0.0,
            ..c
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn hamiltonian_bare_splitting() {
        let h = build_hamiltonian(&params((0.0, 0.0, 0.0), (0.0, 0.0, 0.0)), &c()).unwrap();
        assert_diag(&h, [2.87, 0.0, 2.87]);
    }

    #[test]
    fn hamiltonian_axial_strain() {
        // 6e-4 axial strain times 9.38 GHz.
        let h = build_hamiltonian(&params((0.0, 0.0, 5.628), (0.0, 0.0, 0.0)), &c()).unwrap();
        assert_diag(&h, [2.875628, 0.0, 2.875628]);
    }

    #[test]
    fn hamiltonian_axial_field() {
        let h = build_hamiltonian(&params((0.0, 0.0, 0.0), (0.0, 0.0, 10.0)), &c()).unwrap();
        assert_diag(&h, [2.898031, 0.0, 2.841969]);
    }

    #[test]
    fn hamiltonian_rejects_nan() {
        let p = params((f64::NAN, 0.0, 0.0), (0.0, 0.0, 0.0));
        assert!(matches!(
            build_hamiltonian(&p, &c()),
            Err(Error::InvalidParameter(_))
        ));
        let p = params((0.0, 0.0, 0.0), (0.0, f64::INFINITY, 0.0));
        assert!(transition_frequencies_exact(&p, &c()).is_err());
    }

    #[test]
    fn exact_zero_field_is_degenerate() {
        let r =
            transition_frequencies_exact(&params((0.0, 0.0, 0.0), (0.0, 0.0, 0.0)), &c()).unwrap();
        assert_abs_diff_eq!(r.omega_plus, 2.87, epsilon = 1e-12);
        assert_abs_diff_eq!(r.omega_minus, 2.87, epsilon = 1e-12);
    }

    #[test]
    fn exact_matches_closed_form_at_zero_field() {
        let p = params((0.6, 0.8, 1.5), (0.0, 0.0, 0.0));
        let exact = transition_frequencies_exact(&p, &c()).unwrap();
        let approx = transition_frequencies_approx(&p, &c()).unwrap();
        assert_abs_diff_eq!(exact.omega_plus, 2.8725, epsilon = 1e-12);
        assert_abs_diff_eq!(exact.omega_minus, 2.8705, epsilon = 1e-12);
        assert_abs_diff_eq!(exact.omega_plus, approx.omega_plus, epsilon = 1e-12);
        assert_abs_diff_eq!(exact.omega_minus, approx.omega_minus, epsilon = 1e-12);
    }

    #[test]
    fn exact_transverse_field_second_order() {
        // B_perp = 100 G along x, no strain. Only |0> and (|+1>+|-1>)/sqrt2 couple,
        // with element x = gamma B; the two-level algebra gives the frozen values below.
        // Second-order estimates D + x^2/D and D + 2x^2/D agree to O(x^4/D^3).
        let r = transition_frequencies_exact(&params((0.0, 0.0, 0.0), (100.0, 0.0, 0.0)), &c())
            .unwrap();
        assert_abs_diff_eq!(r.omega_plus, 2.924242600127424, epsilon = 1e-12);
        assert_abs_diff_eq!(r.omega_minus, 2.897121300063712, epsilon = 1e-12);
        let x = 0.28031_f64;
        let d = 2.87;
        assert_abs_diff_eq!(
            r.omega_minus,
            d + x * x / d,
            epsilon = 2.0 * x.powi(4) / d.powi(3)
        );
        assert_abs_diff_eq!(
            r.omega_plus,
            d + 2.0 * x * x / d,
            epsilon = 2.0 * x.powi(4) / d.powi(3)
        );
    }

    #[test]
    fn approx_examples() {
        let c = c();
        let r = transition_frequencies_approx(&SpinParameters::zero_field(&c), &c).unwrap();
        assert_eq!((r.omega_plus, r.omega_minus), (2.87, 2.87));

        let r =
            transition_frequencies_approx(&params((0.0, 0.0, 0.0), (0.0, 0.0, 10.0)), &c).unwrap();
        assert_abs_diff_eq!((r.omega_plus - r.omega_minus) * 1e3, 56.062, epsilon = 1e-9);

        let p = SpinParameters::from_strain(6e-4, 1.8e-4, Vector3::zeros(), &c);
        let r = transition_frequencies_approx(&p, &c).unwrap();
        assert_abs_diff_eq!(r.center(), 2.875628, epsilon = 1e-12);
        assert_abs_diff_eq!(
            r.omega_plus - r.omega_minus,
            2.0 * 3.708e-3,
            epsilon = 1e-12
        );
    }

    #[test]
    fn regime_examples() {
        let c = c();
        let high = params((1.0, 0.0, 0.0), (0.0, 0.0, 100.0));
        assert_eq!(classify_regime(&high, &c, 10.0), FieldRegime::HighField);
        let low = params((1.0, 0.0, 0.0), (0.0, 0.0, 0.0));
        assert_eq!(classify_regime(&low, &c, 10.0), FieldRegime::LowField);
        let boundary = params((1.0, 0.0, 0.0), (0.0, 0.0, 1.0 / 2.8031));
        assert_eq!(
            classify_regime(&boundary, &c, 10.0),
            FieldRegime::Intermediate
        );
    }

    #[test]
    fn projection_examples() {
        let o = OrientationClass::crystal(0, 1.0).unwrap();
        let (bz, bp) = project_to_nv_frame(&(o.axis * 100.0), &o);
        assert_abs_diff_eq!(bz, 100.0, epsilon = 1e-12);
        assert_abs_diff_eq!(bp, 0.0, epsilon = 1e-6);

        let perp = Vector3::new(1.0, -1.0, 0.0).normalize() * 50.0;
        let (bz, bp) = project_to_nv_frame(&perp, &o);
        assert_abs_diff_eq!(bz, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(bp, 50.0, epsilon = 1e-12);

        let (bz, _) = project_to_nv_frame(&Vector3::new(100.0, 0.0, 0.0), &o);
        assert_abs_diff_eq!(bz, 57.735026918962575, epsilon = 1e-12);
    }

    #[test]
    fn crystal_axes_are_unit() {
        for o in OrientationClass::all_equal() {
            assert_abs_diff_eq!(o.axis.norm(), 1.0, epsilon = 1e-12);
        }
        assert!(OrientationClass::crystal(4, 1.0).is_err());
    }

    #[test]
    fn high_field_line_counts() {
        let c = c();
        let all = OrientationClass::all_equal();
        let along_111 = Vector3::new(1.0, 1.0, 1.0).normalize() * 100.0;
        let s = high_field_resonances(&along_111, &all, &c, 1e-4).unwrap();
        assert_eq!(s.distinct_lines(), 2);
        assert_eq!(s.lines[1].classes, vec![0]);
        assert_abs_diff_eq!(s.lines[1].upper, 2.87 + 0.28031, epsilon = 1e-12);
        assert_abs_diff_eq!(s.lines[0].upper, 2.87 + 0.28031 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.lines[0].lower, 2.87 - 0.28031 / 3.0, epsilon = 1e-12);

        let s = high_field_resonances(&Vector3::zeros(), &all, &c, 1e-4).unwrap();
        assert_eq!(s.distinct_lines(), 1);
        assert_eq!(s.lines[0].classes, vec![0, 1, 2, 3]);

        let mut three = all;
        three[3].fraction = 0.0;
        let generic = Vector3::new(0.3, 0.5, 0.81).normalize() * 100.0;
        let s = high_field_resonances(&generic, &three, &c, 1e-4).unwrap();
        assert_eq!(s.distinct_lines(), 3);
        assert_eq!(s.per_class.len(), 3);

        assert!(high_field_resonances(&generic, &[], &c, 1e-4).is_err());
    }

    #[test]
    fn ensemble_examples() {
        let c = c();
        let o = OrientationClass::crystal(0, 1.0).unwrap();
        let p = params((1.0, 0.5, 2.0), (0.0, 0.0, 3.0));
        let single = ensemble_resonances(&[(o, p)], &c).unwrap();
        assert_eq!(single, transition_frequencies_approx(&p, &c).unwrap());

        let half = OrientationClass { fraction: 0.5, ..o };
        let pair = ensemble_resonances(&[(half, p), (half, p)], &c).unwrap();
        assert_abs_diff_eq!(pair.omega_plus, single.omega_plus, epsilon = 1e-15);
        assert_abs_diff_eq!(pair.omega_minus, single.omega_minus, epsilon = 1e-15);

        // One unstrained member and one with E_perp = X: splitting X, half of the true 2X.
        let x = 3.0;
        let unstrained = params((0.0, 0.0, 0.0), (0.0, 0.0, 0.0));
        let strained = params((x, 0.0, 0.0), (0.0, 0.0, 0.0));
        let r = ensemble_resonances(&[(half, unstrained), (half, strained)], &c).unwrap();
        assert_abs_diff_eq!((r.omega_plus - r.omega_minus) * 1e3, x, epsilon = 1e-9);
        let (_, e_perp) = observed_strain_components(&r, &c);
        assert_abs_diff_eq!(e_perp, x / 2.0, epsilon = 1e-9);

        let bad = OrientationClass { fraction: 0.4, ..o };
        assert!(matches!(
            ensemble_resonances(&[(bad, p), (half, p)], &c),
            Err(Error::InvalidEnsemble(_))
        ));
    }

    #[test]
    fn observed_components_examples() {
        let c = c();
        assert_eq!(
            observed_strain_components(&ResonancePair::new(2.87, 2.87), &c),
            (0.0, 0.0)
        );
        let center = 2.87 + 5.628e-3;
        let r = ResonancePair::new(center + 3.708e-3, center - 3.708e-3);
        let (ez, ep) = observed_strain_components(&r, &c);
        assert_abs_diff_eq!(ez, 5.628, epsilon = 1e-9);
        assert_abs_diff_eq!(ep, 3.708, epsilon = 1e-9);
    }

    #[test]
    fn hyperfine_outer_lines_degenerate_at_zero_field() {
        let c = c();
        let p = params((0.4, 0.0, 0.0), (0.0, 0.0, 0.0));
        let hf = hyperfine_resonances(&p, &c).unwrap();
        assert_eq!(hf[0].1, hf[2].1);
        assert_abs_diff_eq!(hf[1].1.half_splitting(), 0.4e-3, epsilon = 1e-15);
        assert_abs_diff_eq!(
            hf[0].1.half_splitting(),
            0.4e-3_f64.hypot(2.16e-3),
            epsilon = 1e-15
        );
    }

    /// Gap between the `m_s = 0` level and the lower `m_s = +-1` level, GHz.
    fn lower_gap(p: &SpinParameters, c: &PhysicalConstants) -> f64 {
        let bz = c.zeeman_ghz(p.b_field.z) * 1e3;
        p.d_gs + (p.e_z - p.e_perp().hypot(bz)) / 1e3
    }

    #[test]
    fn bound_with_bare_d_fails_for_negative_axial_term() {
        // Large E_perp and negative E_z shrink the lower gap below D, so the
        // second-order error exceeds 2 x^2 / D while staying under 2 x^2 / gap.
        let c = c();
        let p = params((-45.6056, 25.6337, -44.0487), (0.01093, -0.02973, 0.0));
        let exact = transition_frequencies_exact(&p, &c).unwrap();
        let approx = transition_frequencies_approx(&p, &c).unwrap();
        let x = c.zeeman_ghz(p.b_perp());
        let err = (exact.omega_minus - approx.omega_minus).abs();
        assert!(err > 2.0 * x * x / c.d_gs_ghz);
        assert!(err <= 2.0 * x * x / lower_gap(&p, &c));
    }

    fn arb_params() -> impl Strategy<Value = SpinParameters> {
        (
            -50.0..50.0,
            -50.0..50.0,
            -50.0..50.0,
            -200.0..200.0,
            0.0..1.0,
            0.0..std::f64::consts::TAU,
        )
            .prop_map(
                |(ex, ey, ez, bz, bp, phi): (f64, f64, f64, f64, f64, f64)| {
                    params((ex, ey, ez), (bp * phi.cos(), bp * phi.sin(), bz))
                },
            )
    }

    proptest! {
        #[test]
        fn hamiltonian_trace_and_hermiticity(p in arb_params()) {
            let h = build_hamiltonian(&p, &c()).unwrap();
            let tr = h.trace();
            prop_assert!((tr.re - 2.0 * (p.d_gs + p.e_z / 1e3)).abs() < 1e-12);
            prop_assert!(tr.im.abs() < 1e-12);
            prop_assert!((h - h.adjoint()).norm() < 1e-12);
        }

        #[test]
        fn closed_form_within_gap_corrected_bound(p in arb_params()) {
            let c = c();
            let exact = transition_frequencies_exact(&p, &c).unwrap();
            let approx = transition_frequencies_approx(&p, &c).unwrap();
            let x = c.zeeman_ghz(p.b_perp());
            let bound = 2.0 * x * x / lower_gap(&p, &c) + 1e-12;
            prop_assert!((exact.omega_plus - approx.omega_plus).abs() <= bound);
            prop_assert!((exact.omega_minus - approx.omega_minus).abs() <= bound);
        }

        #[test]
        fn closed_form_exact_without_transverse_field(mut p in arb_params()) {
            p.b_field.x = 0.0;
            p.b_field.y = 0.0;
            let c = c();
            let exact = transition_frequencies_exact(&p, &c).unwrap();
            let approx = transition_frequencies_approx(&p, &c).unwrap();
            prop_assert!((exact.omega_plus - approx.omega_plus).abs() < 1e-9);
            prop_assert!((exact.omega_minus - approx.omega_minus).abs() < 1e-9);
        }

        #[test]
        fn strain_round_trip(ez in -50.0..50.0f64, eperp in 0.0..50.0f64, phi in 0.0..std::f64::consts::TAU) {
            let c = c();
            let p = params((eperp * phi.cos(), eperp * phi.sin(), ez), (0.0, 0.0, 0.0));
            let r = transition_frequencies_approx(&p, &c).unwrap();
            let (ez_obs, ep_obs) = observed_strain_components(&r, &c);
            prop_assert!((ez_obs - ez).abs() < 1e-9);
            prop_assert!((ep_obs - eperp).abs() < 1e-9);
        }

        #[test]
        fn high_field_rotation_invariant(
            b in prop::array::uniform3(-100.0..100.0f64),
            axis in prop::array::uniform3(-1.0..1.0f64),
            angle in 0.0..std::f64::consts::TAU,
        ) {
            let c = c();
            let rot = nalgebra::Rotation3::new(Vector3::from(axis).normalize() * angle);
            let b = Vector3::from(b);
            let classes = OrientationClass::all_equal();
            let rotated: Vec<_> = classes.iter().map(|o| OrientationClass { axis: rot * o.axis, ..*o }).collect();
            let a = high_field_resonances(&b, &classes, &c, 1e-6).unwrap();
            let r = high_field_resonances(&(rot * b), &rotated, &c, 1e-6).unwrap();
            for (x, y) in a.per_class.iter().zip(&r.per_class) {
                prop_assert_eq!(x.0, y.0);
                prop_assert!((x.1 - y.1).abs() < 1e-12);
            }
        }
    }
}
