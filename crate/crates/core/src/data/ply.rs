//! ASCII PLY vertex tables.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Vertex properties and rows of an ASCII PLY file.
#[derive(Clone, Debug, PartialEq)]
pub struct PlyTable {
    /// `(name, type)` pairs in file order, e.g. `("x", "float")`.
    pub properties: Vec<(String, String)>,
    pub rows: Vec<Vec<f64>>,
}

impl PlyTable {
    pub fn column(&self, name: &str) -> Option<usize> {
        self.properties.iter().position(|(n, _)| n == name)
    }
}

const INT_TYPES: [&str; 12] = [
    "char", "uchar", "short", "ushort", "int", "uint", "int8", "uint8", "int16", "uint16", "int32", "uint32",
];
const FLOAT_TYPES: [&str; 4] = ["float", "double", "float32", "float64"];

/// Reads the vertex element of an ASCII PLY file. Other elements are
/// skipped.
pub fn read_ply(path: &Path) -> Result<PlyTable> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::format(path, msg);
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(bad("missing 'ply' signature".into()));
    }
    // (name, count, properties)
    let mut elements: Vec<(String, usize, Vec<(String, String)>)> = Vec::new();
    let mut format_seen = false;
    loop {
        let line = lines.next().ok_or_else(|| bad("header not terminated".into()))?.trim();
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["end_header"] => break,
            ["format", "ascii", _] => format_seen = true,
            ["format", other, ..] => return Err(bad(format!("unsupported format '{other}', only ascii"))),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => {
                let n = count.parse().map_err(|_| bad(format!("bad element count '{count}'")))?;
                elements.push((name.to_string(), n, Vec::new()));
            }
            ["property", "list", ..] => {
                let el = elements.last_mut().ok_or_else(|| bad("property before element".into()))?;
                if el.0 == "vertex" {
                    return Err(bad("list properties on vertices are not supported".into()));
                }
                el.2.push((words[words.len() - 1].to_string(), "list".into()));
            }
            ["property", ty, name] => {
                if !INT_TYPES.contains(ty) && !FLOAT_TYPES.contains(ty) {
                    return Err(bad(format!("unknown property type '{ty}'")));
                }
                let el = elements.last_mut().ok_or_else(|| bad("property before element".into()))?;
                el.2.push((name.to_string(), ty.to_string()));
            }
            _ => return Err(bad(format!("unrecognized header line '{line}'"))),
        }
    }
    if !format_seen {
        return Err(bad("missing format line".into()));
    }
    let mut table = None;
    for (name, count, props) in elements {
        if name == "vertex" {
            let mut rows = Vec::with_capacity(count);
            for i in 0..count {
                let line = lines.next().ok_or_else(|| bad(format!("expected {count} vertices, found {i}")))?;
                let row = line
                    .split_whitespace()
                    .zip(&props)
                    .map(|(w, (_, ty))| {
                        // single-precision columns parse as f32 so written values read back bit-exact
                        let v = if ty == "float" || ty == "float32" {
                            w.parse::<f32>().map(f64::from)
                        } else {
                            w.parse::<f64>()
                        };
                        v.map_err(|_| bad(format!("vertex {i}: bad number '{w}'")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let found = line.split_whitespace().count();
                if found != props.len() {
                    return Err(bad(format!("vertex {i}: {found} values for {} properties", props.len())));
                }
                rows.push(row);
            }
            table = Some(PlyTable { properties: props, rows });
            break;
        }
        for i in 0..count {
            lines.next().ok_or_else(|| bad(format!("element '{name}' truncated at {i}")))?;
        }
    }
    table.ok_or_else(|| bad("no vertex element".into()))
}

/// Points and the optional integer `label` property.
pub fn read_ply_cloud(path: &Path) -> Result<(Vec<[f32; 3]>, Option<Vec<u32>>)> {
    let t = read_ply(path)?;
    let col = |n: &str| t.column(n).ok_or_else(|| Error::format(path, format!("missing property '{n}'")));
    let (x, y, z) = (col("x")?, col("y")?, col("z")?);
    let points = t.rows.iter().map(|r| [r[x] as f32, r[y] as f32, r[z] as f32]).collect();
    let labels = match t.column("label") {
        None => None,
        Some(c) => Some(
            t.rows
                .iter()
                .enumerate()
                .map(|(i, r)| {
                    let v = r[c];
                    if v < 0.0 || v.fract() != 0.0 || v > u32::MAX as f64 {
                        Err(Error::Data(format!("{}: vertex {i} has invalid label {v}", path.display())))
                    } else {
                        Ok(v as u32)
                    }
                })
                .collect::<Result<Vec<_>>>()?,
        ),
    };
    Ok((points, labels))
}

/// Writes an ASCII PLY vertex table. Float values are printed in shortest
/// round-trip form, so `float` columns read back bit-exact.
pub fn write_ply(path: &Path, table: &PlyTable) -> Result<()> {
    let mut s = String::new();
    s.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "element vertex {}", table.rows.len());
    for (name, ty) in &table.properties {
        let _ = writeln!(s, "property {ty} {name}");
    }
    s.push_str("end_header\n");
    for (i, row) in table.rows.iter().enumerate() {
        if row.len() != table.properties.len() {
            return Err(Error::dim(format!("ply row {i} has {} values", row.len())));
        }
        for (k, (&v, (_, ty))) in row.iter().zip(&table.properties).enumerate() {
            if k > 0 {
                s.push(' ');
            }
            if ty == "float" || ty == "float32" {
                let _ = write!(s, "{}", v as f32);
            } else {
                let _ = write!(s, "{v}");
            }
        }
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}
