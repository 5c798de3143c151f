//! CSV exchange formats for measures.
//!
//! Grid measures: header `x,density`, one row per node. Particle measures:
//! header `w,x1,...,xd`. Numbers are written like C's `%.17g`.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::measures::{Grid, GridMeasure, ParticleMeasure};

/// Formats `v` exactly as `printf("%.17g", v)` does.
pub fn fmt_g17(v: f64) -> String {
    const P: i32 = 17;
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return if v.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let sci = format!("{:.*e}", (P - 1) as usize, v);
    let (mantissa, exp) = sci.split_once('e').expect("exponent marker");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..P).contains(&exp) {
        let m = strip_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    } else {
        let fixed = format!("{:.*}", (P - 1 - exp) as usize, v);
        strip_zeros(&fixed).to_string()
    }
}

fn strip_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub fn write_grid_measure<W: Write>(m: &GridMeasure, mut out: W) -> Result<()> {
    let mut buf = String::from("x,density\n");
    for (i, r) in m.density().iter().enumerate() {
        buf.push_str(&fmt_g17(m.grid().node(i)));
        buf.push(',');
        buf.push_str(&fmt_g17(*r));
        buf.push('\n');
    }
    out.write_all(buf.as_bytes())?;
    Ok(())
}

pub fn write_particles<W: Write>(p: &ParticleMeasure, mut out: W) -> Result<()> {
    let mut buf = String::from("w");
    for k in 1..=p.dim() {
        buf.push_str(&format!(",x{k}"));
    }
    buf.push('\n');
    for (x, w) in p.positions().iter().zip(p.weights()) {
        buf.push_str(&fmt_g17(*w));
        for c in x {
            buf.push(',');
            buf.push_str(&fmt_g17(*c));
        }
        buf.push('\n');
    }
    out.write_all(buf.as_bytes())?;
    Ok(())
}

fn parse_field(s: &str, row: usize) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| Error::Parse(format!("row {row}: '{s}' is not a number")))
}

fn records<R: Read>(input: R) -> Result<(csv::StringRecord, Vec<csv::StringRecord>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let header = rdr.headers().map_err(|e| Error::Parse(e.to_string()))?.clone();
    let rows = rdr
        .records()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Parse(e.to_string()))?;
    Ok((header, rows))
}

/// Reads a grid measure; nodes must be uniformly spaced (relative tolerance 1e-9).
pub fn read_grid_measure<R: Read>(input: R) -> Result<GridMeasure> {
    let (header, rows) = records(input)?;
    if header.len() != 2 || &header[0] != "x" || &header[1] != "density" {
        return Err(Error::Parse("expected header 'x,density'".into()));
    }
    let mut xs = Vec::with_capacity(rows.len());
    let mut rho = Vec::with_capacity(rows.len());
    for (i, r) in rows.iter().enumerate() {
        if r.len() != 2 {
            return Err(Error::Parse(format!("row {}: expected 2 fields", i + 1)));
        }
        xs.push(parse_field(&r[0], i + 1)?);
        rho.push(parse_field(&r[1], i + 1)?);
    }
    if xs.len() < 2 {
        return Err(Error::Parse("need at least two rows".into()));
    }
    let grid = Grid::new(xs[0], xs[xs.len() - 1], xs.len()).map_err(|e| Error::Parse(e.to_string()))?;
    let tol = 1e-9 * grid.spacing();
    for (i, x) in xs.iter().enumerate() {
        if !((x - grid.node(i)).abs() <= tol) {
            return Err(Error::Parse(format!("row {}: node {x} breaks uniform spacing", i + 1)));
        }
    }
    GridMeasure::new(grid, rho).map_err(|e| Error::Parse(e.to_string()))
}

pub fn read_particles<R: Read>(input: R) -> Result<ParticleMeasure> {
    let (header, rows) = records(input)?;
    if header.len() < 2 || &header[0] != "w" {
        return Err(Error::Parse("expected header 'w,x1,...,xd'".into()));
    }
    for (k, name) in header.iter().enumerate().skip(1) {
        if name != format!("x{k}") {
            return Err(Error::Parse(format!(
                "header column {k} should be 'x{k}', got '{name}'"
            )));
        }
    }
    let d = header.len() - 1;
    let mut positions = Vec::with_capacity(rows.len());
    let mut weights = Vec::with_capacity(rows.len());
    for (i, r) in rows.iter().enumerate() {
        if r.len() != d + 1 {
            return Err(Error::Parse(format!("row {}: expected {} fields", i + 1, d + 1)));
        }
        weights.push(parse_field(&r[0], i + 1)?);
        positions.push(
            r.iter()
                .skip(1)
                .map(|s| parse_field(s, i + 1))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    ParticleMeasure::new(positions, weights).map_err(|e| Error::Parse(e.to_string()))
}
