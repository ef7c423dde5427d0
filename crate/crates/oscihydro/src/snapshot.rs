//! Field snapshot files.
//!
//! Two fixed encodings, chosen explicitly by the caller (no sniffing):
//!
//! * **text** — a `#`-prefixed header followed by CSV rows, one row per line
//!   of the innermost axis. Values use Rust's shortest round-trip float
//!   formatting, so text snapshots reload bit-identically.
//! * **binary** — magic `OSCIFLD1`, a little-endian header, then the raw
//!   row-major samples as little-endian f64.
//!
//! Both carry the full grid description (points, lengths, boundary tags,
//! origins) and the simulation time of the sample.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::field::ScalarField;
use crate::grid::{Axis, Boundary, Grid};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SnapshotFormat {
    Text,
    Binary,
}

impl SnapshotFormat {
    pub fn extension(self) -> &'static str {
        match self {
            SnapshotFormat::Text => "csv",
            SnapshotFormat::Binary => "bin",
        }
    }
}

const MAGIC: &[u8; 8] = b"OSCIFLD1";

fn boundary_name(b: Boundary) -> &'static str {
    match b {
        Boundary::Periodic => "periodic",
        Boundary::DirichletZero => "dirichlet-zero",
    }
}

fn boundary_from_name(s: &str) -> Result<Boundary> {
    match s {
        "periodic" => Ok(Boundary::Periodic),
        "dirichlet-zero" => Ok(Boundary::DirichletZero),
        other => Err(Error::Snapshot(format!("unknown boundary tag `{other}`"))),
    }
}

pub fn write_field(
    path: &Path,
    field: &ScalarField,
    time: f64,
    format: SnapshotFormat,
) -> Result<()> {
    match format {
        SnapshotFormat::Text => write_text(path, field, time),
        SnapshotFormat::Binary => write_binary(path, field, time),
    }
}

pub fn read_field(path: &Path, format: SnapshotFormat) -> Result<(ScalarField, f64)> {
    match format {
        SnapshotFormat::Text => read_text(path),
        SnapshotFormat::Binary => read_binary(path),
    }
}

fn write_text(path: &Path, field: &ScalarField, time: f64) -> Result<()> {
    let grid = field.grid();
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "# oscihydro-field v1")?;
    writeln!(w, "# dims: {}", grid.dims())?;
    for ax in grid.axes() {
        writeln!(
            w,
            "# axis: points={} length={} boundary={} origin={}",
            ax.points,
            ax.length,
            boundary_name(ax.boundary),
            ax.origin
        )?;
    }
    writeln!(w, "# time: {time}")?;

    let row = grid.axis(grid.dims() - 1).points;
    for chunk in field.values().chunks(row) {
        let mut line = String::new();
        for (i, v) in chunk.iter().enumerate() {
            if i > 0 {
                line.push(',');
            }
            line.push_str(&format!("{v}"));
        }
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

fn header_value<'a>(line: &'a str, key: &str) -> Option<&'a str> {
    line.strip_prefix('#')
        .map(str::trim)
        .and_then(|rest| rest.strip_prefix(key))
        .and_then(|rest| rest.strip_prefix(':'))
        .map(str::trim)
}

fn read_text(path: &Path) -> Result<(ScalarField, f64)> {
    let reader = BufReader::new(File::open(path)?);
    let mut dims: Option<usize> = None;
    let mut axes: Vec<Axis> = Vec::new();
    let mut time: Option<f64> = None;
    let mut values: Vec<f64> = Vec::new();

    for line in reader.lines() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if trimmed.starts_with('#') {
            if trimmed.contains("oscihydro-field") {
                continue;
            } else if let Some(v) = header_value(trimmed, "dims") {
                dims = Some(v.parse().map_err(|_| {
                    Error::Snapshot(format!("bad dims value `{v}`"))
                })?);
            } else if let Some(v) = header_value(trimmed, "axis") {
                axes.push(parse_axis_header(v)?);
            } else if let Some(v) = header_value(trimmed, "time") {
                time = Some(v.parse().map_err(|_| {
                    Error::Snapshot(format!("bad time value `{v}`"))
                })?);
            } else {
                return Err(Error::Snapshot(format!("unknown header line `{trimmed}`")));
            }
            continue;
        }
        for tok in trimmed.split(',') {
            let tok = tok.trim();
            values.push(tok.parse().map_err(|_| {
                Error::Snapshot(format!("bad sample value `{tok}`"))
            })?);
        }
    }

    let dims = dims.ok_or_else(|| Error::Snapshot("missing dims header".into()))?;
    if axes.len() != dims {
        return Err(Error::Snapshot(format!(
            "dims says {dims} axes but {} axis headers present",
            axes.len()
        )));
    }
    let time = time.ok_or_else(|| Error::Snapshot("missing time header".into()))?;
    let grid = Arc::new(Grid::new(axes)?);
    if values.len() != grid.len() {
        return Err(Error::Snapshot(format!(
            "expected {} samples, found {}",
            grid.len(),
            values.len()
        )));
    }
    Ok((ScalarField::from_values(&grid, values)?, time))
}

fn parse_axis_header(body: &str) -> Result<Axis> {
    let mut points: Option<usize> = None;
    let mut length: Option<f64> = None;
    let mut boundary: Option<Boundary> = None;
    let mut origin: Option<f64> = None;
    for tok in body.split_whitespace() {
        let (key, value) = tok
            .split_once('=')
            .ok_or_else(|| Error::Snapshot(format!("bad axis token `{tok}`")))?;
        match key {
            "points" => {
                points = Some(value.parse().map_err(|_| {
                    Error::Snapshot(format!("bad axis points `{value}`"))
                })?)
            }
            "length" => {
                length = Some(value.parse().map_err(|_| {
                    Error::Snapshot(format!("bad axis length `{value}`"))
                })?)
            }
            "boundary" => boundary = Some(boundary_from_name(value)?),
            "origin" => {
                origin = Some(value.parse().map_err(|_| {
                    Error::Snapshot(format!("bad axis origin `{value}`"))
                })?)
            }
            other => return Err(Error::Snapshot(format!("unknown axis key `{other}`"))),
        }
    }
    let (Some(points), Some(length), Some(boundary), Some(origin)) =
        (points, length, boundary, origin)
    else {
        return Err(Error::Snapshot(format!("incomplete axis header `{body}`")));
    };
    Ok(Axis {
        length,
        points,
        boundary,
        origin,
    })
}

fn write_binary(path: &Path, field: &ScalarField, time: f64) -> Result<()> {
    let grid = field.grid();
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(grid.dims() as u32).to_le_bytes())?;
    for ax in grid.axes() {
        w.write_all(&(ax.points as u32).to_le_bytes())?;
        w.write_all(&[match ax.boundary {
            Boundary::Periodic => 0u8,
            Boundary::DirichletZero => 1u8,
        }])?;
        w.write_all(&ax.length.to_le_bytes())?;
        w.write_all(&ax.origin.to_le_bytes())?;
    }
    w.write_all(&time.to_le_bytes())?;
    for v in field.values() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_binary(path: &Path) -> Result<(ScalarField, f64)> {
    let mut r = BufReader::new(File::open(path)?);
    let magic = read_exact::<8>(&mut r)?;
    if &magic != MAGIC {
        return Err(Error::Snapshot("bad magic; not a binary field snapshot".into()));
    }
    let dims = u32::from_le_bytes(read_exact::<4>(&mut r)?) as usize;
    if !(1..=3).contains(&dims) {
        return Err(Error::Snapshot(format!("unsupported dims {dims}")));
    }
    let mut axes = Vec::with_capacity(dims);
    for _ in 0..dims {
        let points = u32::from_le_bytes(read_exact::<4>(&mut r)?) as usize;
        let tag = read_exact::<1>(&mut r)?[0];
        let boundary = match tag {
            0 => Boundary::Periodic,
            1 => Boundary::DirichletZero,
            other => {
                return Err(Error::Snapshot(format!("unknown boundary tag byte {other}")))
            }
        };
        let length = f64::from_le_bytes(read_exact::<8>(&mut r)?);
        let origin = f64::from_le_bytes(read_exact::<8>(&mut r)?);
        axes.push(Axis {
            length,
            points,
            boundary,
            origin,
        });
    }
    let time = f64::from_le_bytes(read_exact::<8>(&mut r)?);
    let grid = Arc::new(Grid::new(axes)?);
    let mut values = Vec::with_capacity(grid.len());
    for _ in 0..grid.len() {
        values.push(f64::from_le_bytes(read_exact::<8>(&mut r)?));
    }
    // trailing bytes mean the file does not match its own header
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(Error::Snapshot("trailing bytes after samples".into()));
    }
    Ok((ScalarField::from_values(&grid, values)?, time))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use tempfile::tempdir;

    fn wiggly() -> ScalarField {
        let g = Grid::periodic_2d([4.0, 6.0], [8, 16]);
        ScalarField::from_fn(&g, |p| (p[0] * 1.7).sin() + p[1] / 3.0)
    }

    #[test]
    fn text_round_trip_is_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("f.csv");
        let f = wiggly();
        write_field(&path, &f, 0.625, SnapshotFormat::Text).unwrap();
        let (back, t) = read_field(&path, SnapshotFormat::Text).unwrap();
        assert_eq!(t, 0.625);
        assert_eq!(back.grid().as_ref(), f.grid().as_ref());
        assert_eq!(back.values(), f.values());
    }

    #[test]
    fn binary_round_trip_is_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("f.bin");
        let f = wiggly();
        write_field(&path, &f, 1.25, SnapshotFormat::Binary).unwrap();
        let (back, t) = read_field(&path, SnapshotFormat::Binary).unwrap();
        assert_eq!(t, 1.25);
        assert_eq!(back.grid().as_ref(), f.grid().as_ref());
        assert_eq!(back.values(), f.values());
    }

    #[test]
    fn binary_rejects_wrong_magic() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"NOTAFILE____").unwrap();
        assert!(read_field(&path, SnapshotFormat::Binary).is_err());
    }

    #[test]
    fn text_rejects_sample_count_mismatch() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("f.csv");
        let f = wiggly();
        write_field(&path, &f, 0.0, SnapshotFormat::Text).unwrap();
        let mut body = std::fs::read_to_string(&path).unwrap();
        body.push_str("1.0,2.0\n");
        std::fs::write(&path, body).unwrap();
        assert!(read_field(&path, SnapshotFormat::Text).is_err());
    }
}
