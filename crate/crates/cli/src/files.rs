//! Text and image formats written by the commands.
//!
//! Floats are written in Rust's shortest round-trip form, so every value in a
//! table or grid parses back to the identical `f64`.

use std::fmt::Write as _;
use std::path::Path;

use nvstrain_core::fitting::{FitGrid, ResonanceGrid, ResonanceRecord};
use nvstrain_core::FitStatus;

use crate::error::CliError;

pub const FITS_MAGIC: &str = "# nvstrain-fits v1";

const FIT_COLUMNS: [&str; 16] = [
    "index",
    "z",
    "y",
    "x",
    "omega_plus_ghz",
    "omega_minus_ghz",
    "ci_plus_ghz",
    "ci_minus_ghz",
    "depth_plus",
    "depth_minus",
    "hwhm_plus_mhz",
    "hwhm_minus_mhz",
    "baseline",
    "residual_norm",
    "iterations",
    "status",
];

fn join<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// Render a fit grid as a tab-separated table under a `# key = value` header.
pub fn fits_to_string(grid: &FitGrid, bin_factor: usize) -> String {
    let mut s = String::new();
    writeln!(s, "{FITS_MAGIC}").unwrap();
    writeln!(s, "# dims = {},{},{}", grid.n_z, grid.n_y, grid.n_x).unwrap();
    writeln!(s, "# pixel_size_nm = {}", grid.pixel_size_nm).unwrap();
    writeln!(s, "# z_offsets_um = {}", join(&grid.z_offsets_um)).unwrap();
    writeln!(s, "# total_time_s = {}", grid.total_time_s).unwrap();
    writeln!(s, "# bin_factor = {bin_factor}").unwrap();
    writeln!(s, "{}", FIT_COLUMNS.join("\t")).unwrap();
    for (i, r) in grid.results.iter().enumerate() {
        let (z, y, x) = (
            i / (grid.n_y * grid.n_x),
            (i / grid.n_x) % grid.n_y,
            i % grid.n_x,
        );
        let rec = r.record();
        writeln!(
            s,
            "{i}\t{z}\t{y}\t{x}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.omega_plus,
            r.omega_minus,
            rec.ci_plus,
            rec.ci_minus,
            r.depths[0],
            r.depths[1],
            r.hwhms[0],
            r.hwhms[1],
            r.baseline,
            r.residual_norm,
            r.iterations,
            r.status.as_str()
        )
        .unwrap();
    }
    s
}

/// Parsed fit table: the resonance grid and the binning recorded with it.
#[derive(Debug, Clone, PartialEq)]
pub struct FitTable {
    pub grid: ResonanceGrid,
    pub bin_factor: usize,
}

pub fn parse_fits(text: &str) -> Result<FitTable, CliError> {
    let bad = |line: usize, why: String| CliError::Data(format!("fits line {line}: {why}"));
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l == FITS_MAGIC => {}
        _ => {
            return Err(CliError::Data(format!(
                "fits file must start with {FITS_MAGIC:?}"
            )))
        }
    }
    let mut header = std::collections::BTreeMap::new();
    let mut columns_seen = false;
    let mut records = Vec::new();
    for (n, line) in lines {
        let n = n + 1;
        if let Some(kv) = line.strip_prefix("# ") {
            let (k, v) = kv
                .split_once(" = ")
                .ok_or_else(|| bad(n, "header lines are `# key = value`".into()))?;
            header.insert(k.to_string(), v.to_string());
            continue;
        }
        if !columns_seen {
            if line.split('\t').ne(FIT_COLUMNS.iter().copied()) {
                return Err(bad(n, "unexpected column header".into()));
            }
            columns_seen = true;
            continue;
        }
        let cells: Vec<&str> = line.split('\t').collect();
        if cells.len() != FIT_COLUMNS.len() {
            return Err(bad(
                n,
                format!(
                    "expected {} columns, found {}",
                    FIT_COLUMNS.len(),
                    cells.len()
                ),
            ));
        }
        let index: usize = cells[0]
            .parse()
            .map_err(|_| bad(n, "bad pixel index".into()))?;
        if index != records.len() {
            return Err(bad(n, format!("pixel index {index} out of order")));
        }
        let num = |k: usize| {
            cells[k]
                .parse::<f64>()
                .map_err(|_| bad(n, format!("bad {}", FIT_COLUMNS[k])))
        };
        let status: FitStatus = cells[15].parse().map_err(|e| bad(n, format!("{e}")))?;
        records.push(ResonanceRecord {
            omega_plus: num(4)?,
            omega_minus: num(5)?,
            ci_plus: num(6)?,
            ci_minus: num(7)?,
            status,
        });
    }
    let get = |k: &str| {
        header
            .get(k)
            .ok_or_else(|| CliError::Data(format!("fits header lacks {k}")))
    };
    let num = |k: &str| -> Result<f64, CliError> {
        get(k)?
            .parse()
            .map_err(|_| CliError::Data(format!("fits header {k} is not a number")))
    };
    let dims: Vec<usize> = get("dims")?
        .split(',')
        .map(|v| {
            v.parse()
                .map_err(|_| CliError::Data("fits header dims must be three integers".into()))
        })
        .collect::<Result<_, _>>()?;
    let [n_z, n_y, n_x] = dims[..] else {
        return Err(CliError::Data(
            "fits header dims must be three integers".into(),
        ));
    };
    let z_text = get("z_offsets_um")?;
    let z_offsets_um: Vec<f64> = if z_text.is_empty() {
        Vec::new()
    } else {
        z_text
            .split(',')
            .map(|v| {
                v.parse()
                    .map_err(|_| CliError::Data("fits header z_offsets_um is malformed".into()))
            })
            .collect::<Result<_, _>>()?
    };
    if z_offsets_um.len() != n_z || records.len() != n_z * n_y * n_x {
        return Err(CliError::Data(format!(
            "fits table has {} rows and {} z offsets for dims {n_z}x{n_y}x{n_x}",
            records.len(),
            z_offsets_um.len()
        )));
    }
    let bin_factor = get("bin_factor")?
        .parse()
        .map_err(|_| CliError::Data("fits header bin_factor is not an integer".into()))?;
    Ok(FitTable {
        grid: ResonanceGrid {
            n_z,
            n_y,
            n_x,
            pixel_size_nm: num("pixel_size_nm")?,
            z_offsets_um,
            total_time_s: num("total_time_s")?,
            records,
        },
        bin_factor,
    })
}

/// Comma-separated grid, one image row per line; invalid pixels are `NaN`.
pub fn grid_to_csv(values: &[f64], n_x: usize) -> String {
    let mut s = String::with_capacity(values.len() * 24);
    for row in values.chunks(n_x) {
        writeln!(s, "{}", join(row)).unwrap();
    }
    s
}

pub fn parse_csv_grid(text: &str) -> Result<(usize, usize, Vec<f64>), CliError> {
    let mut values = Vec::new();
    let mut n_x = None;
    let mut n_y = 0;
    for (n, line) in text.lines().enumerate() {
        let row: Vec<f64> = line
            .split(',')
            .map(|v| {
                v.parse()
                    .map_err(|_| CliError::Data(format!("grid line {}: bad value {v:?}", n + 1)))
            })
            .collect::<Result<_, _>>()?;
        if *n_x.get_or_insert(row.len()) != row.len() {
            return Err(CliError::Data(format!(
                "grid line {} has {} values",
                n + 1,
                row.len()
            )));
        }
        values.extend(row);
        n_y += 1;
    }
    Ok((n_y, n_x.unwrap_or(0), values))
}

/// Linear 16-bit scaling of finite values onto `1..=65535`; `0` marks invalid pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrayScale {
    pub min: f64,
    pub max: f64,
}

impl GrayScale {
    pub fn of(values: &[f64]) -> Option<Self> {
        let finite = values.iter().copied().filter(|v| v.is_finite());
        let min = finite.clone().fold(f64::INFINITY, f64::min);
        let max = finite.fold(f64::NEG_INFINITY, f64::max);
        (min <= max).then_some(Self { min, max })
    }

    pub fn level(&self, v: f64) -> u16 {
        if !v.is_finite() {
            return 0;
        }
        if self.max == self.min {
            return 1;
        }
        (1.0 + ((v - self.min) / (self.max - self.min) * 65534.0).round()) as u16
    }

    /// Center of a gray level's value interval.
    pub fn value(&self, level: u16) -> Option<f64> {
        (level > 0).then(|| self.min + f64::from(level - 1) / 65534.0 * (self.max - self.min))
    }
}

/// Binary 16-bit portable graymap (P5, big-endian samples).
pub fn pgm_bytes(values: &[f64], n_y: usize, n_x: usize, scale: Option<GrayScale>) -> Vec<u8> {
    let mut out = format!("P5\n{n_x} {n_y}\n65535\n").into_bytes();
    out.reserve(values.len() * 2);
    for &v in values {
        let level = scale.map_or(0, |s| s.level(v));
        out.extend_from_slice(&level.to_be_bytes());
    }
    out
}

pub fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u16>), CliError> {
    let bad = || CliError::Data("malformed 16-bit P5 graymap".into());
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad())?);
    }
    pos += 1;
    let n_x: usize = fields[1].parse().map_err(|_| bad())?;
    let n_y: usize = fields[2].parse().map_err(|_| bad())?;
    if fields[0] != "P5" || fields[3] != "65535" || bytes.len() != pos + 2 * n_x * n_y {
        return Err(bad());
    }
    let px = bytes[pos..]
        .chunks_exact(2)
        .map(|b| u16::from_be_bytes([b[0], b[1]]))
        .collect();
    Ok((n_y, n_x, px))
}

pub fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray_levels_cover_the_range() {
        let s = GrayScale::of(&[f64::NAN, -2.0, 0.0, 2.0]).unwrap();
        assert_eq!((s.min, s.max), (-2.0, 2.0));
        assert_eq!(s.level(-2.0), 1);
        assert_eq!(s.level(2.0), 65535);
        assert_eq!(s.level(f64::NAN), 0);
        assert_eq!(s.value(1), Some(-2.0));
        assert_eq!(s.value(65535), Some(2.0));
        assert!(GrayScale::of(&[f64::NAN]).is_none());
        assert_eq!(GrayScale::of(&[3.0, 3.0]).unwrap().level(3.0), 1);
    }

    #[test]
    fn pgm_and_csv_round_trip() {
        let v = [0.1, f64::NAN, -3e-4, 1.0 / 3.0, 5e-300, 7.0];
        let scale = GrayScale::of(&v);
        let bytes = pgm_bytes(&v, 2, 3, scale);
        let (ny, nx, px) = parse_pgm(&bytes).unwrap();
        assert_eq!((ny, nx), (2, 3));
        assert_eq!(px[1], 0);
        assert_eq!(px[5], 65535);
        let (ny, nx, back) = parse_csv_grid(&grid_to_csv(&v, 3)).unwrap();
        assert_eq!((ny, nx), (2, 3));
        for (a, b) in v.iter().zip(&back) {
            assert!(a.to_bits() == b.to_bits() || (a.is_nan() && b.is_nan()));
        }
        assert!(parse_pgm(b"P5\n2 2\n255\n").is_err());
    }
}
