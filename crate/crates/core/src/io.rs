//! Plain-text and PGM readers and writers for fields, images, masks and
//! subgradient certificates. Floats are written with Rust's shortest
//! round-trip formatting.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bregman::{CertificateProtocol, PolySubgradient};
use crate::error::{Error, Result};
use crate::field::MatrixField;
use crate::grid::Grid;
use crate::minors::MinorsLayout;
use crate::registration::ScalarImage;

fn parse_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Data rows of a CSV file with the given header, as floats.
fn read_table(path: &Path, header: &str) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == header => {}
        other => {
            return Err(parse_err(
                path,
                format!("expected header {header:?}, found {:?}", other.unwrap_or("")),
            ))
        }
    }
    let width = header.split(',').count();
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let row: std::result::Result<Vec<f64>, _> =
            line.split(',').map(|s| s.trim().parse::<f64>()).collect();
        let row = row.map_err(|e| parse_err(path, format!("line {}: {e}", n + 2)))?;
        if row.len() != width {
            return Err(parse_err(
                path,
                format!("line {}: {} fields, expected {width}", n + 2, row.len()),
            ));
        }
        rows.push(row);
    }
    Ok(rows)
}

fn component_header(prefix: &str, n: usize) -> String {
    (1..=n).map(|r| format!(",{prefix}{r}")).collect()
}

/// `i,j,x,y,u1,..,uN`, one row per node with `i` varying fastest.
pub fn write_field_csv(path: &Path, u: &MatrixField) -> Result<()> {
    let g = u.grid();
    let mut out = format!("i,j,x,y{}\n", component_header("u", u.ncomp()));
    for k in 0..g.node_count() {
        let (i, j) = g.node_coords(k);
        let p = g.node_position(i, j);
        write!(out, "{i},{j},{},{}", p[0], p[1]).unwrap();
        for v in u.node_value(k) {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

fn node_of(path: &Path, grid: &Grid, row: &[f64]) -> Result<usize> {
    let (i, j) = (row[0], row[1]);
    if i < 0.0 || j < 0.0 || i.fract() != 0.0 || j.fract() != 0.0 {
        return Err(parse_err(path, format!("bad node index ({i}, {j})")));
    }
    let (i, j) = (i as usize, j as usize);
    if i >= grid.nx() || j >= grid.ny() {
        return Err(parse_err(path, format!("node ({i}, {j}) outside the grid")));
    }
    Ok(grid.node_index(i, j))
}

fn check_complete(path: &Path, seen: &[bool]) -> Result<()> {
    match seen.iter().position(|s| !s) {
        Some(k) => Err(parse_err(path, format!("entry {k} missing"))),
        None => Ok(()),
    }
}

pub fn read_field_csv(path: &Path, grid: &Grid, ncomp: usize) -> Result<MatrixField> {
    let header = format!("i,j,x,y{}", component_header("u", ncomp));
    let mut values = vec![0.0; grid.node_count() * ncomp];
    let mut seen = vec![false; grid.node_count()];
    for row in read_table(path, &header)? {
        let k = node_of(path, grid, &row)?;
        values[k * ncomp..(k + 1) * ncomp].copy_from_slice(&row[4..]);
        seen[k] = true;
    }
    check_complete(path, &seen)?;
    MatrixField::from_values(grid, ncomp, values)
}

/// `i,j,value`, one row per node.
pub fn write_image_csv(path: &Path, img: &ScalarImage) -> Result<()> {
    let g = img.grid();
    let mut out = String::from("i,j,value\n");
    for (k, v) in img.samples().iter().enumerate() {
        let (i, j) = g.node_coords(k);
        writeln!(out, "{i},{j},{v}").unwrap();
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_image_csv(path: &Path, grid: &Grid) -> Result<ScalarImage> {
    let mut samples = vec![0.0; grid.node_count()];
    let mut seen = vec![false; grid.node_count()];
    for row in read_table(path, "i,j,value")? {
        let k = node_of(path, grid, &row)?;
        samples[k] = row[2];
        seen[k] = true;
    }
    check_complete(path, &seen)?;
    ScalarImage::new(grid, samples)
}

const PGM_TAG: &str = "# polyreg scale";

/// 16-bit binary PGM, top row first (largest `y`). Sample values are
/// recovered as `offset + scale·pixel`, both stored in a header comment.
pub fn write_pgm(path: &Path, img: &ScalarImage) -> Result<()> {
    let g = img.grid();
    let (lo, hi) = img.range();
    let scale = if hi > lo { (hi - lo) / 65535.0 } else { 1.0 };
    let mut bytes = format!("P5\n{PGM_TAG} {lo} {scale}\n{} {}\n65535\n", g.nx(), g.ny()).into_bytes();
    for j in (0..g.ny()).rev() {
        for i in 0..g.nx() {
            let v = img.samples()[g.node_index(i, j)];
            let px = ((v - lo) / scale).round().clamp(0.0, 65535.0) as u16;
            bytes.extend_from_slice(&px.to_be_bytes());
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_pgm(path: &Path, grid: &Grid) -> Result<ScalarImage> {
    let bytes = fs::read(path)?;
    let mut pos = 0;
    let mut line = || -> Result<String> {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| parse_err(path, "truncated header"))?;
        let s = String::from_utf8_lossy(&bytes[pos..pos + end]).into_owned();
        pos += end + 1;
        Ok(s)
    };
    if line()?.trim() != "P5" {
        return Err(parse_err(path, "not a binary PGM"));
    }
    let (mut offset, mut scale) = (0.0, 1.0);
    let mut dims = line()?;
    while dims.starts_with('#') {
        if let Some(rest) = dims.strip_prefix(PGM_TAG) {
            let nums: Vec<f64> = rest.split_whitespace().filter_map(|s| s.parse().ok()).collect();
            if let [o, s] = nums[..] {
                offset = o;
                scale = s;
            }
        }
        dims = line()?;
    }
    let wh: Vec<usize> = dims.split_whitespace().filter_map(|s| s.parse().ok()).collect();
    if wh != [grid.nx(), grid.ny()] {
        return Err(parse_err(path, format!("size {dims:?} does not match the grid")));
    }
    if line()?.trim() != "65535" {
        return Err(parse_err(path, "expected maxval 65535"));
    }
    let data = &bytes[pos..];
    if data.len() != 2 * grid.node_count() {
        return Err(parse_err(path, "pixel data has the wrong length"));
    }
    let mut samples = vec![0.0; grid.node_count()];
    for (r, j) in (0..grid.ny()).rev().enumerate() {
        for i in 0..grid.nx() {
            let b = 2 * (r * grid.nx() + i);
            let px = u16::from_be_bytes([data[b], data[b + 1]]);
            samples[grid.node_index(i, j)] = offset + scale * px as f64;
        }
    }
    ScalarImage::new(grid, samples)
}

/// 0/1 CSV with `rows` lines of `cols` entries; line `j` holds cell row `j`.
pub fn read_mask(path: &Path, cols: usize, rows: usize) -> Result<Vec<bool>> {
    let text = fs::read_to_string(path)?;
    let mut mask = Vec::with_capacity(rows * cols);
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    if lines.len() != rows {
        return Err(parse_err(path, format!("{} rows, expected {rows}", lines.len())));
    }
    for (j, l) in lines.iter().enumerate() {
        let before = mask.len();
        for s in l.split(',') {
            match s.trim() {
                "0" => mask.push(false),
                "1" => mask.push(true),
                other => return Err(parse_err(path, format!("row {j}: bad entry {other:?}"))),
            }
        }
        if mask.len() - before != cols {
            return Err(parse_err(path, format!("row {j}: expected {cols} entries")));
        }
    }
    Ok(mask)
}

pub fn write_mask(path: &Path, grid: &Grid) -> Result<()> {
    let cols = grid.nx() - 1;
    let out: String = grid
        .mask()
        .chunks(cols)
        .map(|r| {
            let row: Vec<&str> = r.iter().map(|&b| if b { "1" } else { "0" }).collect();
            row.join(",") + "\n"
        })
        .collect();
    fs::write(path, out)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateHeader {
    pub rows: usize,
    pub cols: usize,
    pub nx: usize,
    pub ny: usize,
    pub lower: [f64; 2],
    pub upper: [f64; 2],
    pub base_energy: f64,
    pub protocol: CertificateProtocol,
}

fn cell_table(grid: &Grid, width: usize, data: &[f64], prefix: &str) -> String {
    let mut out = format!("ci,cj{}\n", component_header(prefix, width));
    for c in 0..grid.cell_count() {
        let (ci, cj) = grid.cell_coords(c);
        write!(out, "{ci},{cj}").unwrap();
        for v in &data[c * width..(c + 1) * width] {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    out
}

fn read_cell_table(path: &Path, grid: &Grid, width: usize, prefix: &str) -> Result<Vec<f64>> {
    let header = format!("ci,cj{}", component_header(prefix, width));
    let mut data = vec![0.0; grid.cell_count() * width];
    let mut seen = vec![false; grid.cell_count()];
    for row in read_table(path, &header)? {
        let (ci, cj) = (row[0] as usize, row[1] as usize);
        if ci + 1 >= grid.nx() || cj + 1 >= grid.ny() {
            return Err(parse_err(path, format!("cell ({ci}, {cj}) outside the grid")));
        }
        let c = grid.cell_index(ci, cj);
        data[c * width..(c + 1) * width].copy_from_slice(&row[2..]);
        seen[c] = true;
    }
    check_complete(path, &seen)?;
    Ok(data)
}

/// Writes `header.json`, `base_point.csv`, `u0.csv`, `u1.csv` and `v2.csv`
/// into `dir`.
pub fn write_certificate(dir: &Path, w: &PolySubgradient, protocol: &CertificateProtocol) -> Result<()> {
    fs::create_dir_all(dir)?;
    let base = w.base_point();
    let g = base.grid();
    let n = w.layout().rows();
    let header = CertificateHeader {
        rows: n,
        cols: w.layout().cols(),
        nx: g.nx(),
        ny: g.ny(),
        lower: g.lower(),
        upper: g.upper(),
        base_energy: w.base_energy(),
        protocol: *protocol,
    };
    fs::write(dir.join("header.json"), serde_json::to_string_pretty(&header)? + "\n")?;
    write_field_csv(&dir.join("base_point.csv"), base)?;
    let u0 = MatrixField::from_values(g, n, w.u0().to_vec())?;
    write_field_csv(&dir.join("u0.csv"), &u0)?;
    fs::write(dir.join("u1.csv"), cell_table(g, 2 * n, w.u1(), "a"))?;
    fs::write(dir.join("v2.csv"), cell_table(g, w.layout().tau2(), w.v2(), "v"))?;
    Ok(())
}

/// Reads a certificate written by [`write_certificate`] on `grid`, whose
/// shape must match the header.
pub fn read_certificate(dir: &Path, grid: &Grid) -> Result<(PolySubgradient, CertificateProtocol)> {
    let hpath = dir.join("header.json");
    let header: CertificateHeader = serde_json::from_str(&fs::read_to_string(&hpath)?)
        .map_err(|e| parse_err(&hpath, e.to_string()))?;
    if (header.nx, header.ny, header.lower, header.upper)
        != (grid.nx(), grid.ny(), grid.lower(), grid.upper())
    {
        return Err(Error::mismatch("certificate was written for a different grid"));
    }
    let layout = MinorsLayout::new(header.rows, header.cols)?;
    let n = header.rows;
    let base = read_field_csv(&dir.join("base_point.csv"), grid, n)?;
    let u0 = read_field_csv(&dir.join("u0.csv"), grid, n)?.into_values();
    let u1 = read_cell_table(&dir.join("u1.csv"), grid, 2 * n, "a")?;
    let v2 = read_cell_table(&dir.join("v2.csv"), grid, layout.tau2(), "v")?;
    let w = PolySubgradient::from_parts(layout, u0, u1, v2, base, header.base_energy)?;
    Ok((w, header.protocol))
}
