//! Field files. Binary: three little-endian `u64` (d, grid_n, fiber) then
//! the values as little-endian `f64`, grid points row-major with the first
//! axis slowest and the fiber innermost. CSV (d <= 2): one row per grid point
//! with the point's coordinates on the unit torus followed by the values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::spectral::TorusField;

pub fn write_field_binary(path: &Path, field: &TorusField) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_field_binary_to(&mut w, field)?;
    w.flush()?;
    Ok(())
}

pub fn write_field_binary_to(w: &mut impl Write, field: &TorusField) -> Result<()> {
    for v in [field.dim(), field.n(), field.fiber()] {
        w.write_all(&(v as u64).to_le_bytes())?;
    }
    for v in field.values() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_field_binary(path: &Path) -> Result<TorusField> {
    read_field_binary_from(
        &mut BufReader::new(File::open(path)?),
        &path.display().to_string(),
    )
}

pub fn read_field_binary_from(r: &mut impl Read, origin: &str) -> Result<TorusField> {
    let mut header = [0u8; 24];
    r.read_exact(&mut header).map_err(|_| {
        Error::parse(
            format!("{origin}: header"),
            "file shorter than the 24-byte header",
        )
    })?;
    let word = |i: usize| {
        u64::from_le_bytes(header[8 * i..8 * i + 8].try_into().expect("8 bytes")) as usize
    };
    let (d, n, fiber) = (word(0), word(1), word(2));
    if d == 0 || d > 8 || fiber == 0 || !n.is_power_of_two() || n < 2 {
        return Err(Error::parse(
            format!("{origin}: header"),
            format!("implausible header d={d} grid_n={n} fiber={fiber}"),
        ));
    }
    let count = n
        .checked_pow(d as u32)
        .and_then(|p| p.checked_mul(fiber))
        .ok_or_else(|| Error::parse(format!("{origin}: header"), "field too large"))?;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != 8 * count {
        return Err(Error::parse(
            format!("{origin}: body"),
            format!(
                "expected {} bytes of values, found {}",
                8 * count,
                bytes.len()
            ),
        ));
    }
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    TorusField::new(n, d, fiber, values)
}

pub fn write_field_csv(path: &Path, field: &TorusField) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    write_field_csv_to(&mut w, field)?;
    w.flush()?;
    Ok(())
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::InvalidInput(format!("csv: {other:?}")),
    }
}

pub fn write_field_csv_to<W: Write>(w: &mut csv::Writer<W>, field: &TorusField) -> Result<()> {
    let d = field.dim();
    if d > 2 {
        return Err(Error::InvalidInput(format!(
            "csv export supports d <= 2, got d = {d}"
        )));
    }
    let mut header: Vec<String> = (1..=d).map(|a| format!("x{a}")).collect();
    header.extend((1..=field.fiber()).map(|c| format!("v{c}")));
    w.write_record(&header).map_err(csv_error)?;
    for p in 0..field.points() {
        let mut row: Vec<String> = field.coordinates(p).iter().map(|x| x.to_string()).collect();
        row.extend(field.at(p).iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(csv_error)?;
    }
    Ok(())
}

pub fn read_field_csv(path: &Path) -> Result<TorusField> {
    let origin = path.display().to_string();
    let mut r = csv::Reader::from_path(path).map_err(csv_error)?;
    let header = r.headers().map_err(csv_error)?.clone();
    let d = header.iter().filter(|h| h.starts_with('x')).count();
    let fiber = header.iter().filter(|h| h.starts_with('v')).count();
    if d == 0 || fiber == 0 || d + fiber != header.len() {
        return Err(Error::parse(
            format!("{origin}:1"),
            "header must be x1[,x2],v1,...",
        ));
    }
    let mut values = Vec::new();
    let mut rows = 0usize;
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_error)?;
        for (k, cell) in rec.iter().enumerate().skip(d) {
            let v: f64 = cell.trim().parse().map_err(|_| {
                Error::parse(
                    format!("{origin}:{} column {}", i + 2, k + 1),
                    format!("`{cell}` is not a number"),
                )
            })?;
            values.push(v);
        }
        rows += 1;
    }
    let n = (rows as f64).powf(1.0 / d as f64).round() as usize;
    if n.pow(d as u32) != rows {
        return Err(Error::parse(
            origin,
            format!("{rows} rows do not form a square grid"),
        ));
    }
    TorusField::new(n, d, fiber, values)
}
