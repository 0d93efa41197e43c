//! Text point-cloud formats: whitespace `xyz` and ASCII PLY.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cloud::{Point3, PointCloud, Vector3};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CloudFormat {
    XyzText,
    PlyAscii,
}

impl CloudFormat {
    /// Guess from the file extension (`.ply` → PLY, otherwise xyz).
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("ply") => CloudFormat::PlyAscii,
            _ => CloudFormat::XyzText,
        }
    }
}

impl FromStr for CloudFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "xyz" | "xyz-text" => Ok(CloudFormat::XyzText),
            "ply" | "ply-ascii" => Ok(CloudFormat::PlyAscii),
            other => Err(Error::InvalidParameter(format!("unknown cloud format {other:?}"))),
        }
    }
}

pub fn load_cloud(path: impl AsRef<Path>, format: CloudFormat) -> Result<PointCloud> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    match format {
        CloudFormat::XyzText => parse_xyz(&text),
        CloudFormat::PlyAscii => parse_ply(&text),
    }
}

pub fn save_cloud(cloud: &PointCloud, path: impl AsRef<Path>, format: CloudFormat) -> Result<()> {
    let path = path.as_ref();
    let text = match format {
        CloudFormat::XyzText => format_xyz(cloud)?,
        CloudFormat::PlyAscii => format_ply(cloud)?,
    };
    write_atomic(path, text.as_bytes())
}

/// Write via a sibling temp file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn parse_f64(tok: &str, line: usize) -> Result<f64> {
    let v: f64 = tok.parse().map_err(|_| Error::Parse {
        line,
        msg: format!("not a number: {tok:?}"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            line,
            msg: format!("non-finite value {tok:?}"),
        });
    }
    Ok(v)
}

fn finish(points: Vec<Point3>, normals: Vec<Vector3>, has_normals: bool) -> Result<PointCloud> {
    if points.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let normals = has_normals.then(|| {
        normals
            .into_iter()
            .map(|n| {
                let len = n.norm();
                if len > 0.0 {
                    n / len
                } else {
                    n
                }
            })
            .collect()
    });
    PointCloud::with_normals(points, normals)
}

pub fn parse_xyz(text: &str) -> Result<PointCloud> {
    let mut points = Vec::new();
    let mut normals = Vec::new();
    let mut columns = None;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let vals = line
            .split_whitespace()
            .map(|t| parse_f64(t, line_no))
            .collect::<Result<Vec<_>>>()?;
        if vals.len() != 3 && vals.len() != 6 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected 3 or 6 columns, found {}", vals.len()),
            });
        }
        match columns {
            None => columns = Some(vals.len()),
            Some(c) if c != vals.len() => {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("column count changed from {c} to {}", vals.len()),
                })
            }
            _ => {}
        }
        points.push(Point3::new(vals[0], vals[1], vals[2]));
        if vals.len() == 6 {
            normals.push(Vector3::new(vals[3], vals[4], vals[5]));
        }
    }
    finish(points, normals, columns == Some(6))
}

struct PlyElement {
    name: String,
    count: usize,
    properties: Vec<String>,
}

pub fn parse_ply(text: &str) -> Result<PointCloud> {
    let fmt_err = |msg: String| Error::Format {
        format: "ply",
        msg,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == "ply" => {}
        _ => return Err(fmt_err("missing 'ply' magic".into())),
    }
    let mut elements: Vec<PlyElement> = Vec::new();
    let mut ascii = false;
    let mut header_done = false;
    for (_, raw) in lines.by_ref() {
        let mut toks = raw.split_whitespace();
        match toks.next() {
            Some("format") => {
                ascii = toks.next() == Some("ascii");
                if !ascii {
                    return Err(fmt_err("only ascii PLY is supported".into()));
                }
            }
            Some("element") => {
                let name = toks.next().unwrap_or_default().to_string();
                let count = toks
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| fmt_err(format!("bad element line {raw:?}")))?;
                elements.push(PlyElement {
                    name,
                    count,
                    properties: Vec::new(),
                });
            }
            Some("property") => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| fmt_err("property before element".into()))?;
                let name = toks.last().unwrap_or_default().to_string();
                el.properties.push(name);
            }
            Some("end_header") => {
                header_done = true;
                break;
            }
            _ => {}
        }
    }
    if !header_done || !ascii {
        return Err(fmt_err("incomplete header".into()));
    }

    let mut points = Vec::new();
    let mut normals = Vec::new();
    let mut has_normals = false;
    for el in &elements {
        let is_vertex = el.name == "vertex";
        let col = |n: &str| el.properties.iter().position(|p| p == n);
        let (xi, yi, zi) = (col("x"), col("y"), col("z"));
        let (nxi, nyi, nzi) = (col("nx"), col("ny"), col("nz"));
        if is_vertex {
            if xi.is_none() || yi.is_none() || zi.is_none() {
                return Err(fmt_err("vertex element lacks x/y/z".into()));
            }
            has_normals = nxi.is_some() && nyi.is_some() && nzi.is_some();
        }
        let mut seen = 0;
        while seen < el.count {
            let (i, raw) = lines
                .next()
                .ok_or_else(|| fmt_err(format!("truncated {} data", el.name)))?;
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            seen += 1;
            if !is_vertex {
                continue;
            }
            let toks: Vec<&str> = line.split_whitespace().collect();
            let get = |k: Option<usize>| -> Result<f64> {
                let k = k.expect("checked above");
                let t = toks.get(k).ok_or_else(|| Error::Parse {
                    line: i + 1,
                    msg: "missing vertex property".into(),
                })?;
                parse_f64(t, i + 1)
            };
            points.push(Point3::new(get(xi)?, get(yi)?, get(zi)?));
            if has_normals {
                normals.push(Vector3::new(get(nxi)?, get(nyi)?, get(nzi)?));
            }
        }
    }
    finish(points, normals, has_normals)
}

fn format_xyz(cloud: &PointCloud) -> Result<String> {
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let mut out = String::with_capacity(cloud.len() * 64);
    for (i, p) in cloud.points().iter().enumerate() {
        let _ = write!(out, "{:.16e} {:.16e} {:.16e}", p.x, p.y, p.z);
        if let Some(ns) = cloud.normals() {
            let n = ns[i];
            let _ = write!(out, " {:.16e} {:.16e} {:.16e}", n.x, n.y, n.z);
        }
        out.push('\n');
    }
    Ok(out)
}

fn format_ply(cloud: &PointCloud) -> Result<String> {
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let mut out = String::with_capacity(cloud.len() * 64 + 256);
    out.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(out, "element vertex {}", cloud.len());
    out.push_str("property double x\nproperty double y\nproperty double z\n");
    if cloud.normals().is_some() {
        out.push_str("property double nx\nproperty double ny\nproperty double nz\n");
    }
    out.push_str("end_header\n");
    out.push_str(&format_xyz(cloud)?);
    Ok(out)
}
