//! Image stacks of photon counts and their on-disk format.
//!
//! A stack file is a one-line preamble, a TOML header and a raw payload:
//!
//! ```text
//! NVSTACK <format_version> <header_bytes>\n
//! <header_bytes of TOML metadata>
//! <n_freq * n_z * n_y * n_x little-endian f32 values>
//! ```
//!
//! The payload is frequency-major, then z, then row-major `(y, x)`.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectrum::{OdmrSpectrum, SpectrumUnit};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "NVSTACK";

/// Acquisition metadata carried alongside the counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Acquisition {
    /// Total measurement time over the whole sweep, seconds.
    pub total_time_s: f64,
    /// Photon rate per NV (or per unit brightness), photons per second.
    pub photon_rate: f64,
    pub seed: u64,
    /// Counts are Poisson draws without analog noise, so every value is an integer.
    pub integral_counts: bool,
    /// Spatial binning applied so far.
    pub bin_factor: usize,
    /// Pixels dropped at the bottom / right edge by binning.
    pub dropped_rows: usize,
    pub dropped_cols: usize,
}

impl Default for Acquisition {
    fn default() -> Self {
        Self {
            total_time_s: 1.0,
            photon_rate: 1.0,
            seed: 0,
            integral_counts: false,
            bin_factor: 1,
            dropped_rows: 0,
            dropped_cols: 0,
        }
    }
}

/// Photon counts indexed by `(frequency, z, y, x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageStack {
    n_freq: usize,
    n_z: usize,
    n_y: usize,
    n_x: usize,
    frequency_hz: Vec<f64>,
    z_offsets_um: Vec<f64>,
    pixel_size_nm: f64,
    data: Vec<f32>,
    pub acquisition: Acquisition,
}

impl ImageStack {
    /// `dims` is `(n_freq, n_z, n_y, n_x)`.
    pub fn new(
        dims: (usize, usize, usize, usize),
        frequency_hz: Vec<f64>,
        z_offsets_um: Vec<f64>,
        pixel_size_nm: f64,
        data: Vec<f32>,
        acquisition: Acquisition,
    ) -> Result<Self> {
        let (n_freq, n_z, n_y, n_x) = dims;
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if n_freq == 0 || n_z == 0 || n_y == 0 || n_x == 0 {
            return bad(format!("empty stack dimensions {dims:?}"));
        }
        if frequency_hz.len() != n_freq {
            return bad(format!(
                "{} frequencies for n_freq = {n_freq}",
                frequency_hz.len()
            ));
        }
        if !frequency_hz.iter().all(|f| f.is_finite())
            || frequency_hz.windows(2).any(|w| w[1] <= w[0])
        {
            return bad("frequency axis must be strictly ascending".into());
        }
        if z_offsets_um.len() != n_z || !z_offsets_um.iter().all(|z| z.is_finite()) {
            return bad(format!("{} z offsets for n_z = {n_z}", z_offsets_um.len()));
        }
        if !(pixel_size_nm > 0.0 && pixel_size_nm.is_finite()) {
            return bad(format!("pixel size must be positive, got {pixel_size_nm}"));
        }
        if data.len() != n_freq * n_z * n_y * n_x {
            return bad(format!(
                "payload has {} values, dims need {}",
                data.len(),
                n_freq * n_z * n_y * n_x
            ));
        }
        if data.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return bad("counts must be finite and non-negative".into());
        }
        Ok(Self {
            n_freq,
            n_z,
            n_y,
            n_x,
            frequency_hz,
            z_offsets_um,
            pixel_size_nm,
            data,
            acquisition,
        })
    }

    /// `(n_freq, n_z, n_y, n_x)`.
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.n_freq, self.n_z, self.n_y, self.n_x)
    }

    pub fn n_freq(&self) -> usize {
        self.n_freq
    }
    pub fn n_z(&self) -> usize {
        self.n_z
    }
    pub fn n_y(&self) -> usize {
        self.n_y
    }
    pub fn n_x(&self) -> usize {
        self.n_x
    }

    pub fn frequency_hz(&self) -> &[f64] {
        &self.frequency_hz
    }

    pub fn frequency_ghz(&self) -> Vec<f64> {
        self.frequency_hz.iter().map(|f| f * 1e-9).collect()
    }

    pub fn z_offsets_um(&self) -> &[f64] {
        &self.z_offsets_um
    }

    pub fn pixel_size_nm(&self) -> f64 {
        self.pixel_size_nm
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn index(&self, f: usize, z: usize, y: usize, x: usize) -> usize {
        ((f * self.n_z + z) * self.n_y + y) * self.n_x + x
    }

    #[inline]
    pub fn get(&self, f: usize, z: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(f, z, y, x)]
    }

    /// Counts of one pixel across the frequency sweep.
    pub fn pixel_counts(&self, z: usize, y: usize, x: usize) -> Vec<f64> {
        let plane = self.n_z * self.n_y * self.n_x;
        let base = self.index(0, z, y, x);
        (0..self.n_freq)
            .map(|f| f64::from(self.data[base + f * plane]))
            .collect()
    }

    pub fn pixel_spectrum(&self, z: usize, y: usize, x: usize) -> Result<OdmrSpectrum> {
        OdmrSpectrum::new(
            self.frequency_ghz(),
            self.pixel_counts(z, y, x),
            SpectrumUnit::Counts,
        )
    }

    pub fn total_counts(&self) -> f64 {
        self.data.iter().map(|&v| f64::from(v)).sum()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header = toml::to_string(&Header::from(self))
            .map_err(|e| Error::Format(format!("cannot serialize header: {e}")))?;
        writeln!(w, "{MAGIC} {FORMAT_VERSION} {}", header.len())?;
        w.write_all(header.as_bytes())?;
        let mut payload = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&payload)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(buf)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("missing preamble line".into()))?;
        let preamble = std::str::from_utf8(&bytes[..nl])
            .map_err(|_| Error::Format("preamble is not UTF-8".into()))?;
        let mut parts = preamble.split(' ');
        if parts.next() != Some(MAGIC) {
            return Err(Error::Format("not a stack file (bad magic)".into()));
        }
        let version: u32 = parse_field(parts.next(), "format version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported format version {version}"
            )));
        }
        let header_len: usize = parse_field(parts.next(), "header length")?;
        let rest = &bytes[nl + 1..];
        if rest.len() < header_len {
            return Err(Error::Format("truncated header".into()));
        }
        let header_str = std::str::from_utf8(&rest[..header_len])
            .map_err(|_| Error::Format("header is not UTF-8".into()))?;
        let header: Header =
            toml::from_str(header_str).map_err(|e| Error::Format(format!("bad header: {e}")))?;
        if header.format_version != version {
            return Err(Error::Format(
                "header version disagrees with preamble".into(),
            ));
        }
        let payload = &rest[header_len..];
        let n = header
            .n_freq
            .checked_mul(header.n_z)
            .and_then(|v| v.checked_mul(header.n_y))
            .and_then(|v| v.checked_mul(header.n_x))
            .ok_or_else(|| Error::Format("dimensions overflow".into()))?;
        if payload.len() != n * 4 {
            return Err(Error::Format(format!(
                "payload is {} bytes, expected {} for the header dimensions",
                payload.len(),
                n * 4
            )));
        }
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if header.acquisition.integral_counts && data.iter().any(|v| v.fract() != 0.0) {
            return Err(Error::Format(
                "stack is flagged integral but holds fractional counts".into(),
            ));
        }
        Self::new(
            (header.n_freq, header.n_z, header.n_y, header.n_x),
            header.frequency_hz,
            header.z_offsets_um,
            header.pixel_size_nm,
            data,
            header.acquisition,
        )
        .map_err(|e| Error::Format(e.to_string()))
    }
}

fn parse_field<T: std::str::FromStr>(s: Option<&str>, what: &str) -> Result<T> {
    s.and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Format(format!("bad {what} in preamble")))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    n_freq: usize,
    n_z: usize,
    n_y: usize,
    n_x: usize,
    pixel_size_nm: f64,
    frequency_hz: Vec<f64>,
    z_offsets_um: Vec<f64>,
    acquisition: Acquisition,
}

impl From<&ImageStack> for Header {
    fn from(s: &ImageStack) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            n_freq: s.n_freq,
            n_z: s.n_z,
            n_y: s.n_y,
            n_x: s.n_x,
            pixel_size_nm: s.pixel_size_nm,
            frequency_hz: s.frequency_hz.clone(),
            z_offsets_um: s.z_offsets_um.clone(),
            acquisition: s.acquisition.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small() -> ImageStack {
        let n = 9 * 2 * 3 * 4;
        ImageStack::new(
            (9, 2, 3, 4),
            (0..9).map(|i| 2.86e9 + 2.5e6 * i as f64).collect(),
            vec![0.0, 1.0],
            80.0,
            (0..n).map(|i| i as f32).collect(),
            Acquisition {
                integral_counts: true,
                seed: 5,
                ..Default::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn layout_is_frequency_major() {
        let s = small();
        assert_eq!(s.index(0, 0, 0, 1), 1);
        assert_eq!(s.index(0, 0, 1, 0), 4);
        assert_eq!(s.index(0, 1, 0, 0), 12);
        assert_eq!(s.index(1, 0, 0, 0), 24);
        assert_eq!(s.pixel_counts(1, 2, 3)[2], (2 * 24 + 12 + 8 + 3) as f64);
    }

    #[test]
    fn constructor_checks() {
        let s = small();
        let make = |data: Vec<f32>, f: Vec<f64>| {
            ImageStack::new(
                s.dims(),
                f,
                vec![0.0, 1.0],
                80.0,
                data,
                Acquisition::default(),
            )
        };
        assert!(make(s.data().to_vec(), s.frequency_hz().to_vec()).is_ok());
        assert!(make(s.data()[1..].to_vec(), s.frequency_hz().to_vec()).is_err());
        let mut neg = s.data().to_vec();
        neg[3] = -1.0;
        assert!(make(neg, s.frequency_hz().to_vec()).is_err());
        let mut f = s.frequency_hz().to_vec();
        f.swap(0, 1);
        assert!(make(s.data().to_vec(), f).is_err());
    }

    #[test]
    fn file_round_trip_is_byte_identical() {
        let s = small();
        let bytes = s.to_bytes().unwrap();
        let back = ImageStack::from_bytes(&bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.to_bytes().unwrap(), bytes);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.nvstack");
        s.save(&path).unwrap();
        assert_eq!(ImageStack::load(&path).unwrap(), s);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = small().to_bytes().unwrap();
        assert!(ImageStack::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(ImageStack::from_bytes(b"garbage\n").is_err());
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(ImageStack::from_bytes(&bad_magic).is_err());
        let mut fractional = bytes.clone();
        let n = fractional.len();
        fractional[n - 4..].copy_from_slice(&0.5f32.to_le_bytes());
        assert!(matches!(
            ImageStack::from_bytes(&fractional),
            Err(Error::Format(_))
        ));
    }

    proptest! {
        #[test]
        fn arbitrary_stacks_round_trip(
            data in prop::collection::vec(0.0f32..1e6, 8 * 6),
            f0 in 1e9..4e9f64,
            step in 1.0..1e7f64,
            z0 in -5.0..5.0f64,
            pix in 1.0..1000.0f64,
            time in 0.1..1e4f64,
        ) {
            let s = ImageStack::new(
                (8, 2, 1, 3),
                (0..8).map(|i| f0 + step * i as f64).collect(),
                vec![z0, z0 + 1.0],
                pix,
                data,
                Acquisition { total_time_s: time, ..Default::default() },
            ).unwrap();
            let bytes = s.to_bytes().unwrap();
            let back = ImageStack::from_bytes(&bytes).unwrap();
            prop_assert_eq!(&back, &s);
            prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        }
    }
}
