//! ASCII PLY and XYZ point-cloud files.
//!
//! Coordinates are written with Rust's shortest round-trip float
//! formatting, so save/load is bit-exact. PLY carries optional uchar
//! red/green/blue (stored as a 3-wide feature matrix) and an optional
//! int label; unknown scalar vertex properties are skipped with a
//! warning. XYZ rows are `x y z` or `x y z label`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{Features, PointCloud};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloudFormat {
    Ply,
    Xyz,
}

impl CloudFormat {
    pub fn parse(s: &str) -> Option<CloudFormat> {
        match s.to_ascii_lowercase().as_str() {
            "ply" => Some(CloudFormat::Ply),
            "xyz" => Some(CloudFormat::Xyz),
            _ => None,
        }
    }

    /// Guess from the file extension; defaults to xyz.
    pub fn from_path(path: &Path) -> CloudFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("ply") => CloudFormat::Ply,
            _ => CloudFormat::Xyz,
        }
    }
}

pub fn load_cloud(path: impl AsRef<Path>, format: CloudFormat) -> Result<PointCloud> {
    match format {
        CloudFormat::Ply => load_ply(path),
        CloudFormat::Xyz => load_xyz(path),
    }
}

pub fn save_cloud(cloud: &PointCloud, path: impl AsRef<Path>, format: CloudFormat) -> Result<()> {
    match format {
        CloudFormat::Ply => save_ply(cloud, path),
        CloudFormat::Xyz => save_xyz(cloud, path),
    }
}

pub fn save_ply(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let rgb = cloud.features().filter(|f| f.width() == 3);
    writeln!(w, "ply")?;
    writeln!(w, "format ascii 1.0")?;
    writeln!(w, "element vertex {}", cloud.len())?;
    writeln!(w, "property double x")?;
    writeln!(w, "property double y")?;
    writeln!(w, "property double z")?;
    if rgb.is_some() {
        writeln!(w, "property uchar red")?;
        writeln!(w, "property uchar green")?;
        writeln!(w, "property uchar blue")?;
    }
    if cloud.labels().is_some() {
        writeln!(w, "property int label")?;
    }
    writeln!(w, "end_header")?;
    for (i, p) in cloud.coords().iter().enumerate() {
        write!(w, "{} {} {}", p[0], p[1], p[2])?;
        if let Some(f) = rgb {
            let row = f.row(i);
            write!(
                w,
                " {} {} {}",
                clamp_u8(row[0]),
                clamp_u8(row[1]),
                clamp_u8(row[2])
            )?;
        }
        if let Some(labels) = cloud.labels() {
            write!(w, " {}", labels[i])?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

fn clamp_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum PlyColumn {
    X,
    Y,
    Z,
    Red,
    Green,
    Blue,
    Label,
    Ignored,
}

pub fn load_ply(path: impl AsRef<Path>) -> Result<PointCloud> {
    let reader = BufReader::new(File::open(&path)?);
    let mut lines = reader.lines();
    let mut line_no = 0usize;

    macro_rules! next_line {
        () => {{
            match lines.next() {
                None => None,
                Some(line) => {
                    line_no += 1;
                    Some(line?)
                }
            }
        }};
    }

    let parse_err = |line: usize, message: &str| Error::Parse {
        line,
        message: message.into(),
    };

    match next_line!() {
        Some(l) if l.trim() == "ply" => {}
        _ => return Err(parse_err(1, "expected `ply` magic")),
    }

    let mut vertex_count: Option<usize> = None;
    let mut columns: Vec<PlyColumn> = Vec::new();
    let mut in_vertex_element = false;
    let mut warned = false;
    loop {
        let Some(line) = next_line!() else {
            return Err(parse_err(line_no, "unexpected end of header"));
        };
        let line = line.trim().to_string();
        if line == "end_header" {
            break;
        }
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("format") => {
                if parts.next() != Some("ascii") {
                    return Err(parse_err(line_no, "only ascii PLY is supported"));
                }
            }
            Some("comment") | Some("obj_info") => {}
            Some("element") => {
                let kind = parts
                    .next()
                    .ok_or_else(|| parse_err(line_no, "element without a name"))?;
                if kind == "vertex" {
                    let n: usize = parts
                        .next()
                        .and_then(|v| v.parse().ok())
                        .ok_or_else(|| parse_err(line_no, "bad vertex count"))?;
                    vertex_count = Some(n);
                    in_vertex_element = true;
                } else {
                    in_vertex_element = false;
                }
            }
            Some("property") if in_vertex_element => {
                let ty = parts
                    .next()
                    .ok_or_else(|| parse_err(line_no, "property without a type"))?;
                if ty == "list" {
                    return Err(parse_err(
                        line_no,
                        "list properties on vertices are not supported",
                    ));
                }
                let name = parts
                    .next()
                    .ok_or_else(|| parse_err(line_no, "property without a name"))?;
                let column = match name {
                    "x" => PlyColumn::X,
                    "y" => PlyColumn::Y,
                    "z" => PlyColumn::Z,
                    "red" => PlyColumn::Red,
                    "green" => PlyColumn::Green,
                    "blue" => PlyColumn::Blue,
                    "label" => PlyColumn::Label,
                    other => {
                        if !warned {
                            eprintln!("warning: ignoring unknown PLY vertex property `{other}`");
                            warned = true;
                        }
                        PlyColumn::Ignored
                    }
                };
                columns.push(column);
            }
            Some("property") => {} // property of a non-vertex element
            Some(other) => {
                return Err(parse_err(line_no, &format!("unknown header entry `{other}`")))
            }
            None => {}
        }
    }

    let n = vertex_count.ok_or_else(|| parse_err(line_no, "no vertex element"))?;
    for c in [PlyColumn::X, PlyColumn::Y, PlyColumn::Z] {
        if !columns.contains(&c) {
            return Err(parse_err(line_no, "vertex element must carry x, y, z"));
        }
    }
    let has_rgb = columns.contains(&PlyColumn::Red)
        && columns.contains(&PlyColumn::Green)
        && columns.contains(&PlyColumn::Blue);
    let has_label = columns.contains(&PlyColumn::Label);

    let mut coords = Vec::with_capacity(n);
    let mut rgb: Vec<f64> = Vec::new();
    let mut labels: Vec<i64> = Vec::new();
    for _ in 0..n {
        let Some(line) = next_line!() else {
            return Err(parse_err(line_no, "fewer data rows than vertices"));
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != columns.len() {
            return Err(parse_err(
                line_no,
                &format!("expected {} fields, got {}", columns.len(), fields.len()),
            ));
        }
        let mut p = [0.0f64; 3];
        let mut color = [0.0f64; 3];
        let mut label = 0i64;
        for (column, field) in columns.iter().zip(&fields) {
            match column {
                PlyColumn::Ignored => {}
                PlyColumn::Label => {
                    label = field
                        .parse()
                        .map_err(|_| parse_err(line_no, "bad label value"))?;
                }
                other => {
                    let v: f64 = field
                        .parse()
                        .map_err(|_| parse_err(line_no, "bad numeric value"))?;
                    match other {
                        PlyColumn::X => p[0] = v,
                        PlyColumn::Y => p[1] = v,
                        PlyColumn::Z => p[2] = v,
                        PlyColumn::Red => color[0] = v,
                        PlyColumn::Green => color[1] = v,
                        PlyColumn::Blue => color[2] = v,
                        _ => unreachable!(),
                    }
                }
            }
        }
        coords.push(p);
        if has_rgb {
            rgb.extend_from_slice(&color);
        }
        if has_label {
            labels.push(label);
        }
    }

    let mut cloud = PointCloud::new(coords)?;
    if has_rgb {
        cloud = cloud.with_features(Features::new(rgb, 3)?)?;
    }
    if has_label {
        cloud = cloud.with_labels(labels)?;
    }
    Ok(cloud)
}

pub fn save_xyz(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (i, p) in cloud.coords().iter().enumerate() {
        match cloud.labels() {
            Some(labels) => writeln!(w, "{} {} {} {}", p[0], p[1], p[2], labels[i])?,
            None => writeln!(w, "{} {} {}", p[0], p[1], p[2])?,
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_xyz(path: impl AsRef<Path>) -> Result<PointCloud> {
    let reader = BufReader::new(File::open(&path)?);
    let mut coords = Vec::new();
    let mut labels: Vec<i64> = Vec::new();
    let mut expected_cols: Option<usize> = None;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        let cols = *expected_cols.get_or_insert(fields.len());
        if fields.len() != cols || !(3..=4).contains(&cols) {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected {cols} columns, got {}", fields.len()),
            });
        }
        let parse_f = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("bad numeric value `{s}`"),
            })
        };
        coords.push([parse_f(fields[0])?, parse_f(fields[1])?, parse_f(fields[2])?]);
        if cols == 4 {
            labels.push(fields[3].parse().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("bad label `{}`", fields[3]),
            })?);
        }
    }
    let cloud = PointCloud::new(coords)?;
    if labels.is_empty() {
        Ok(cloud)
    } else {
        cloud.with_labels(labels)
    }
}
