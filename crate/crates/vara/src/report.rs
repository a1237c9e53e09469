//! Artifact emission: PGM heatmaps, alignment tables, and numeric CSV I/O.
//!
//! Heatmaps are 8-bit binary PGM with per-matrix linear min-max contrast.
//! Quantization loses precision, so the original value range is recorded in
//! the comment line; a constant matrix maps to black with `min == max`.
//! CSV cells use the shortest decimal form that parses back to the same
//! 64-bit float, so every emitted table round-trips losslessly.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// A decoded PGM heatmap together with the value range from its comment line.
#[derive(Debug, Clone, PartialEq)]
pub struct PgmImage {
    pub rows: usize,
    pub cols: usize,
    pub min: f64,
    pub max: f64,
    pub pixels: Vec<u8>,
}

/// Write a rank-2 tensor as a binary PGM heatmap.
///
/// Layout: `P5`, a comment line `# min=<v> max=<v>`, `<cols> <rows>`, `255`,
/// then `rows * cols` bytes in row-major order. Values map linearly so the
/// matrix minimum becomes 0 and the maximum 255.
pub fn write_pgm(path: &Path, t: &Tensor) -> Result<()> {
    if t.shape().len() != 2 {
        return Err(Error::InvalidArgument(format!(
            "heatmap needs a rank-2 tensor, got shape {:?}",
            t.shape()
        )));
    }
    if t.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite value in heatmap written to {}",
            path.display()
        )));
    }
    let (rows, cols) = (t.rows(), t.cols());
    let min = t.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let max = t.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    let mut out = Vec::with_capacity(64 + rows * cols);
    out.extend_from_slice(format!("P5\n# min={min} max={max}\n{cols} {rows}\n255\n").as_bytes());
    for &v in t.data() {
        let px = if span > 0.0 { ((v - min) / span * 255.0).round() as u8 } else { 0 };
        out.push(px);
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Read back a PGM written by [`write_pgm`]. The parser is strict: it accepts
/// exactly the layout this module emits and reports anything else as a
/// format error.
pub fn read_pgm(path: &Path) -> Result<PgmImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur = 0usize;
    let mut line = |what: &str| -> Result<String> {
        let rest = &bytes[cur.min(bytes.len())..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::format(path, format!("missing {what} line")))?;
        let s = str::from_utf8(&rest[..end])
            .map_err(|_| Error::format(path, format!("{what} line is not UTF-8")))?
            .to_string();
        cur += end + 1;
        Ok(s)
    };
    if line("magic")? != "P5" {
        return Err(Error::format(path, "not a binary PGM (expected P5)"));
    }
    let comment = line("comment")?;
    let range = comment
        .strip_prefix("# min=")
        .and_then(|r| r.split_once(" max="))
        .ok_or_else(|| Error::format(path, "comment line does not carry min/max"))?;
    let min: f64 = range.0.parse().map_err(|_| Error::format(path, "bad min in comment"))?;
    let max: f64 = range.1.parse().map_err(|_| Error::format(path, "bad max in comment"))?;
    let dims = line("dimensions")?;
    let (c, r) = dims
        .split_once(' ')
        .ok_or_else(|| Error::format(path, "bad dimensions line"))?;
    let cols: usize = c.parse().map_err(|_| Error::format(path, "bad column count"))?;
    let rows: usize = r.parse().map_err(|_| Error::format(path, "bad row count"))?;
    if cols == 0 || rows == 0 {
        return Err(Error::format(path, "zero-sized image"));
    }
    if line("maxval")? != "255" {
        return Err(Error::format(path, "expected maxval 255"));
    }
    let pixels = bytes[cur..].to_vec();
    if pixels.len() != rows * cols {
        return Err(Error::format(
            path,
            format!("expected {} pixel bytes, found {}", rows * cols, pixels.len()),
        ));
    }
    Ok(PgmImage { rows, cols, min, max, pixels })
}

/// Write one alignment matrix as CSV. The first line names the fields, the
/// second carries the frame count, token count, and layer index, and each of
/// the following `T` lines holds one row of `L` attention weights.
pub fn write_alignment_csv(path: &Path, a: &Tensor, layer: usize) -> Result<()> {
    if a.shape().len() != 2 {
        return Err(Error::InvalidArgument(format!(
            "alignment needs a rank-2 tensor, got shape {:?}",
            a.shape()
        )));
    }
    let (t, l) = (a.rows(), a.cols());
    let mut out = String::new();
    let _ = writeln!(out, "T,L,layer");
    let _ = writeln!(out, "{t},{l},{layer}");
    for r in 0..t {
        let row: Vec<String> = (0..l).map(|c| format!("{}", a.get2(r, c))).collect();
        let _ = writeln!(out, "{}", row.join(","));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Read back an alignment CSV written by [`write_alignment_csv`]; returns the
/// matrix and the layer index recorded in its header.
pub fn read_alignment_csv(path: &Path) -> Result<(Tensor, usize)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::format(path, "empty file"))?;
    if header != "T,L,layer" {
        return Err(Error::format(path, format!("unexpected header {header:?}")));
    }
    let dims = lines.next().ok_or_else(|| Error::format(path, "missing dimension line"))?;
    let parts: Vec<&str> = dims.split(',').collect();
    if parts.len() != 3 {
        return Err(Error::format(path, "dimension line needs three fields"));
    }
    let t: usize = parts[0].parse().map_err(|_| Error::format(path, "bad frame count"))?;
    let l: usize = parts[1].parse().map_err(|_| Error::format(path, "bad token count"))?;
    let layer: usize = parts[2].parse().map_err(|_| Error::format(path, "bad layer index"))?;
    let mut data = Vec::with_capacity(t * l);
    for r in 0..t {
        let row = lines
            .next()
            .ok_or_else(|| Error::format(path, format!("expected {t} rows, found {r}")))?;
        let cells: Vec<&str> = row.split(',').collect();
        if cells.len() != l {
            return Err(Error::format(
                path,
                format!("row {r} has {} cells, expected {l}", cells.len()),
            ));
        }
        for cell in cells {
            let v: f64 = cell
                .parse()
                .map_err(|_| Error::format(path, format!("bad number {cell:?} in row {r}")))?;
            data.push(v);
        }
    }
    if lines.next().is_some() {
        return Err(Error::format(path, "trailing lines after the last row"));
    }
    Ok((Tensor::new(vec![t, l], data)?, layer))
}

/// A numeric CSV parsed back into memory: named columns over f64 rows.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl CsvTable {
    /// All values of one named column, in row order.
    pub fn column(&self, name: &str) -> Result<Vec<f64>> {
        let idx = self
            .columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::InvalidArgument(format!("no column named {name:?}")))?;
        Ok(self.rows.iter().map(|r| r[idx]).collect())
    }
}

/// Write a header line plus pre-formatted data lines as a CSV file.
pub fn write_csv(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let mut out = String::with_capacity(header.len() + rows.iter().map(|r| r.len() + 1).sum::<usize>());
    let _ = writeln!(out, "{header}");
    for row in rows {
        let _ = writeln!(out, "{row}");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Parse a numeric CSV: one header line naming the columns, then rows whose
/// cells must all parse as f64 and match the header arity.
pub fn read_csv(path: &Path) -> Result<CsvTable> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::format(path, "empty file"))?;
    let columns: Vec<String> = header.split(',').map(|c| c.to_string()).collect();
    if columns.iter().any(|c| c.is_empty()) {
        return Err(Error::format(path, "empty column name in header"));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != columns.len() {
            return Err(Error::format(
                path,
                format!("row {i} has {} cells, expected {}", cells.len(), columns.len()),
            ));
        }
        let mut row = Vec::with_capacity(cells.len());
        for cell in cells {
            let v: f64 = cell
                .parse()
                .map_err(|_| Error::format(path, format!("bad number {cell:?} in row {i}")))?;
            row.push(v);
        }
        rows.push(row);
    }
    Ok(CsvTable { columns, rows })
}
