//! Text formats: XYZ, ASCII PLY and OFF.
//!
//! Floats are written with six digits after the decimal point.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use super::{PointCloud, ShapeLabel};
use crate::error::{Error, Result};
use crate::geom::Vec3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Xyz,
    Ply,
    Off,
}

impl Format {
    pub fn from_path(path: &Path) -> Result<Self> {
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .unwrap_or_default();
        ext.parse()
    }
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "xyz" | "txt" | "pts" => Ok(Format::Xyz),
            "ply" => Ok(Format::Ply),
            "off" => Ok(Format::Off),
            other => Err(Error::invalid(format!("unknown point-cloud format `{other}`"))),
        }
    }
}

pub fn load(path: &Path, format: Format) -> Result<PointCloud> {
    let text = fs::read_to_string(path)?;
    match format {
        Format::Xyz => parse_xyz(&text),
        Format::Ply => parse_ply(&text),
        Format::Off => parse_off(&text),
    }
}

/// Write `cloud` to `path`. `colorize` adds label colors to PLY output; OFF
/// always stores labels as vertex colors since it has no other slot for them.
pub fn save(cloud: &PointCloud, path: &Path, format: Format, colorize: bool) -> Result<()> {
    let text = match format {
        Format::Xyz => write_xyz(cloud),
        Format::Ply => write_ply(cloud, colorize),
        Format::Off => write_off(cloud),
    };
    fs::write(path, text)?;
    Ok(())
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn parse_f64(tok: &str, line: usize) -> Result<f64> {
    let v: f64 = tok
        .parse()
        .map_err(|_| parse_err(line, format!("`{tok}` is not a number")))?;
    if !v.is_finite() {
        return Err(parse_err(line, format!("non-finite value `{tok}`")));
    }
    Ok(v)
}

fn parse_usize(tok: &str, line: usize) -> Result<usize> {
    tok.parse()
        .map_err(|_| parse_err(line, format!("`{tok}` is not a non-negative integer")))
}

fn parse_label(tok: &str, line: usize) -> Result<ShapeLabel> {
    let id: u8 = tok
        .parse()
        .map_err(|_| parse_err(line, format!("`{tok}` is not a label")))?;
    ShapeLabel::from_id(id).map_err(|_| Error::Validation(format!("line {line}: unknown shape label {id}")))
}

fn parse_color(tok: &str, line: usize) -> Result<u8> {
    if let Ok(v) = tok.parse::<u8>() {
        return Ok(v);
    }
    let f = parse_f64(tok, line)?;
    if (0.0..=1.0).contains(&f) {
        Ok((f * 255.0).round() as u8)
    } else {
        Err(parse_err(line, format!("color component `{tok}` out of range")))
    }
}

fn assemble(
    points: Vec<Vec3>,
    normals: Option<Vec<Vec3>>,
    labels: Option<Vec<ShapeLabel>>,
) -> Result<PointCloud> {
    let mut cloud = PointCloud::new(points)?;
    if let Some(n) = normals {
        cloud = cloud.with_normals(n)?;
    }
    if let Some(l) = labels {
        cloud = cloud.with_labels(l)?;
    }
    Ok(cloud)
}

fn push_vec(out: &mut String, v: Vec3) {
    let _ = write!(out, "{:.6} {:.6} {:.6}", v[0], v[1], v[2]);
}

/// Lines of `x y z [nx ny nz] [label]`; every data line has the same width.
pub fn parse_xyz(text: &str) -> Result<PointCloud> {
    let mut points = Vec::new();
    let mut normals = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let toks: Vec<&str> = body.split_whitespace().collect();
        if !matches!(toks.len(), 3 | 4 | 6 | 7) {
            return Err(parse_err(line, format!("expected 3, 4, 6 or 7 columns, found {}", toks.len())));
        }
        match width {
            None => width = Some(toks.len()),
            Some(w) if w != toks.len() => {
                return Err(parse_err(line, format!("expected {w} columns, found {}", toks.len())))
            }
            _ => {}
        }
        let xyz = [
            parse_f64(toks[0], line)?,
            parse_f64(toks[1], line)?,
            parse_f64(toks[2], line)?,
        ];
        points.push(xyz);
        if toks.len() >= 6 {
            normals.push([
                parse_f64(toks[3], line)?,
                parse_f64(toks[4], line)?,
                parse_f64(toks[5], line)?,
            ]);
        }
        if matches!(toks.len(), 4 | 7) {
            labels.push(parse_label(toks[toks.len() - 1], line)?);
        }
    }
    if points.is_empty() {
        return Err(parse_err(text.lines().count().max(1), "no points"));
    }
    let w = width.unwrap_or(3);
    assemble(
        points,
        (w >= 6).then_some(normals),
        matches!(w, 4 | 7).then_some(labels),
    )
}

pub fn write_xyz(cloud: &PointCloud) -> String {
    let mut out = String::new();
    for i in 0..cloud.len() {
        push_vec(&mut out, cloud.points()[i]);
        if let Some(n) = cloud.normals() {
            out.push(' ');
            push_vec(&mut out, n[i]);
        }
        if let Some(l) = cloud.labels() {
            let _ = write!(out, " {}", l[i].id());
        }
        out.push('\n');
    }
    out
}

#[derive(Debug)]
struct PlyElement {
    name: String,
    count: usize,
    /// Property names; list properties are recorded as `None`.
    props: Vec<Option<String>>,
}

/// ASCII PLY 1.0. Vertex properties `x y z` are required; `nx ny nz`,
/// `red green blue` and `label` are optional. A cloud without a label
/// property whose colors all match the label color map gets its labels back
/// from the colors.
pub fn parse_ply(text: &str) -> Result<PointCloud> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, "ply")) => {}
        _ => return Err(parse_err(1, "missing `ply` magic")),
    }
    let mut elements: Vec<PlyElement> = Vec::new();
    let mut saw_format = false;
    let mut end_line = 0;
    for (line, l) in lines.by_ref() {
        let toks: Vec<&str> = l.split_whitespace().collect();
        match toks.first().copied() {
            None | Some("comment") | Some("obj_info") => {}
            Some("format") => {
                if toks.get(1) != Some(&"ascii") {
                    return Err(parse_err(line, "only ASCII PLY is supported"));
                }
                saw_format = true;
            }
            Some("element") => {
                if toks.len() != 3 {
                    return Err(parse_err(line, "malformed element line"));
                }
                elements.push(PlyElement {
                    name: toks[1].to_string(),
                    count: parse_usize(toks[2], line)?,
                    props: Vec::new(),
                });
            }
            Some("property") => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| parse_err(line, "property before any element"))?;
                match toks.get(1) {
                    Some(&"list") if toks.len() == 5 => el.props.push(None),
                    Some(_) if toks.len() == 3 => el.props.push(Some(toks[2].to_string())),
                    _ => return Err(parse_err(line, "malformed property line")),
                }
            }
            Some("end_header") => {
                end_line = line;
                break;
            }
            Some(other) => return Err(parse_err(line, format!("unexpected header keyword `{other}`"))),
        }
    }
    if end_line == 0 {
        return Err(parse_err(text.lines().count().max(1), "missing end_header"));
    }
    if !saw_format {
        return Err(parse_err(end_line, "missing format line"));
    }

    let mut points = Vec::new();
    let mut normals = Vec::new();
    let mut colors = Vec::new();
    let mut labels = Vec::new();
    let mut has = (false, false, false);
    let mut last_line = end_line;
    for el in &elements {
        let find = |name: &str| el.props.iter().position(|p| p.as_deref() == Some(name));
        let is_vertex = el.name == "vertex";
        let xyz = [find("x"), find("y"), find("z")];
        let nrm = [find("nx"), find("ny"), find("nz")];
        let rgb = [find("red"), find("green"), find("blue")];
        let lab = find("label");
        if is_vertex {
            if xyz.iter().any(Option::is_none) {
                return Err(parse_err(end_line, "vertex element lacks x, y or z"));
            }
            has = (nrm.iter().all(Option::is_some), rgb.iter().all(Option::is_some), lab.is_some());
        }
        let simple = el.props.iter().all(Option::is_some);
        for _ in 0..el.count {
            let (line, l) = loop {
                match lines.next() {
                    Some((n, l)) if l.is_empty() || l.starts_with("comment") => last_line = n,
                    Some(x) => break x,
                    None => return Err(parse_err(last_line + 1, format!("unexpected end of file in `{}`", el.name))),
                }
            };
            last_line = line;
            let toks: Vec<&str> = l.split_whitespace().collect();
            if !is_vertex {
                continue;
            }
            if simple && toks.len() != el.props.len() {
                return Err(parse_err(
                    line,
                    format!("expected {} values, found {}", el.props.len(), toks.len()),
                ));
            }
            let get = |i: Option<usize>| toks.get(i.expect("checked above")).copied().ok_or_else(|| parse_err(line, "too few values"));
            points.push([
                parse_f64(get(xyz[0])?, line)?,
                parse_f64(get(xyz[1])?, line)?,
                parse_f64(get(xyz[2])?, line)?,
            ]);
            if has.0 {
                normals.push([
                    parse_f64(get(nrm[0])?, line)?,
                    parse_f64(get(nrm[1])?, line)?,
                    parse_f64(get(nrm[2])?, line)?,
                ]);
            }
            if has.1 {
                colors.push([
                    parse_color(get(rgb[0])?, line)?,
                    parse_color(get(rgb[1])?, line)?,
                    parse_color(get(rgb[2])?, line)?,
                ]);
            }
            if has.2 {
                labels.push(parse_label(get(lab)?, line)?);
            }
        }
    }
    if points.is_empty() {
        return Err(parse_err(end_line, "no vertices"));
    }
    let labels = if has.2 {
        Some(labels)
    } else if has.1 {
        colors.iter().map(|&c| ShapeLabel::from_color(c)).collect()
    } else {
        None
    };
    assemble(points, has.0.then_some(normals), labels)
}

pub fn write_ply(cloud: &PointCloud, colorize: bool) -> String {
    let labels = cloud.labels();
    let colorize = colorize && labels.is_some();
    let mut out = String::from("ply\nformat ascii 1.0\n");
    let _ = writeln!(out, "element vertex {}", cloud.len());
    out.push_str("property float x\nproperty float y\nproperty float z\n");
    if cloud.normals().is_some() {
        out.push_str("property float nx\nproperty float ny\nproperty float nz\n");
    }
    if colorize {
        out.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    if labels.is_some() {
        out.push_str("property uchar label\n");
    }
    out.push_str("end_header\n");
    for i in 0..cloud.len() {
        push_vec(&mut out, cloud.points()[i]);
        if let Some(n) = cloud.normals() {
            out.push(' ');
            push_vec(&mut out, n[i]);
        }
        if let Some(l) = labels {
            if colorize {
                let [r, g, b] = l[i].color();
                let _ = write!(out, " {r} {g} {b}");
            }
            let _ = write!(out, " {}", l[i].id());
        }
        out.push('\n');
    }
    out
}

/// Parsed contents of an OFF file.
pub(super) struct OffBody {
    pub vertices: Vec<Vec3>,
    pub normals: Option<Vec<Vec3>>,
    pub colors: Option<Vec<[u8; 3]>>,
    pub faces: Vec<Vec<usize>>,
    pub last_line: usize,
}

/// `[C][N]OFF` with optional per-vertex normals and colors, then faces as
/// `n i0 i1 …`.
pub(super) fn parse_off_body(text: &str) -> Result<OffBody> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty());
    let (line, head) = lines.next().ok_or_else(|| parse_err(1, "empty file"))?;
    let mut head_toks = head.split_whitespace();
    let magic = head_toks.next().unwrap_or("");
    let Some(prefix) = magic.strip_suffix("OFF") else {
        return Err(parse_err(line, format!("expected OFF magic, found `{magic}`")));
    };
    let (has_color, has_normal) = match prefix {
        "" => (false, false),
        "C" => (true, false),
        "N" => (false, true),
        "CN" | "NC" => (true, true),
        _ => return Err(parse_err(line, format!("unsupported OFF variant `{magic}`"))),
    };
    // Counts may share the magic line.
    let rest: Vec<&str> = head_toks.collect();
    let (count_line, counts) = if rest.is_empty() {
        let (l, c) = lines.next().ok_or_else(|| parse_err(line + 1, "missing counts"))?;
        (l, c.split_whitespace().collect::<Vec<_>>())
    } else {
        (line, rest)
    };
    if counts.len() < 2 {
        return Err(parse_err(count_line, "expected vertex and face counts"));
    }
    let nv = parse_usize(counts[0], count_line)?;
    let nf = parse_usize(counts[1], count_line)?;
    let mut last_line = count_line;
    let base = 3 + if has_normal { 3 } else { 0 };
    let mut vertices = Vec::with_capacity(nv);
    let mut normals = Vec::new();
    let mut colors = Vec::new();
    for _ in 0..nv {
        let (line, l) = lines
            .next()
            .ok_or_else(|| parse_err(last_line + 1, "unexpected end of file in vertex list"))?;
        last_line = line;
        let toks: Vec<&str> = l.split_whitespace().collect();
        let need = base + if has_color { 3 } else { 0 };
        if toks.len() < need {
            return Err(parse_err(line, format!("expected at least {need} values, found {}", toks.len())));
        }
        vertices.push([parse_f64(toks[0], line)?, parse_f64(toks[1], line)?, parse_f64(toks[2], line)?]);
        if has_normal {
            normals.push([parse_f64(toks[3], line)?, parse_f64(toks[4], line)?, parse_f64(toks[5], line)?]);
        }
        if has_color {
            colors.push([
                parse_color(toks[base], line)?,
                parse_color(toks[base + 1], line)?,
                parse_color(toks[base + 2], line)?,
            ]);
        }
    }
    let mut faces = Vec::with_capacity(nf);
    for _ in 0..nf {
        let (line, l) = lines
            .next()
            .ok_or_else(|| parse_err(last_line + 1, "unexpected end of file in face list"))?;
        last_line = line;
        let toks: Vec<&str> = l.split_whitespace().collect();
        let n = parse_usize(toks[0], line)?;
        if n < 3 || toks.len() < n + 1 {
            return Err(parse_err(line, format!("malformed face with {n} vertices")));
        }
        let idx = toks[1..=n]
            .iter()
            .map(|t| {
                let i = parse_usize(t, line)?;
                if i >= nv {
                    Err(parse_err(line, format!("vertex index {i} out of range for {nv} vertices")))
                } else {
                    Ok(i)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        faces.push(idx);
    }
    Ok(OffBody {
        vertices,
        normals: has_normal.then_some(normals),
        colors: has_color.then_some(colors),
        faces,
        last_line,
    })
}

/// Vertices of an OFF file as a point cloud; faces are ignored. Vertex colors
/// that all match the label color map become labels.
pub fn parse_off(text: &str) -> Result<PointCloud> {
    let body = parse_off_body(text)?;
    if body.vertices.is_empty() {
        return Err(parse_err(body.last_line, "no vertices"));
    }
    let labels = body
        .colors
        .as_ref()
        .and_then(|cs| cs.iter().map(|&c| ShapeLabel::from_color(c)).collect());
    assemble(body.vertices, body.normals, labels)
}

pub fn write_off(cloud: &PointCloud) -> String {
    let magic = match (cloud.labels().is_some(), cloud.normals().is_some()) {
        (false, false) => "OFF",
        (true, false) => "COFF",
        (false, true) => "NOFF",
        (true, true) => "CNOFF",
    };
    let mut out = format!("{magic}\n{} 0 0\n", cloud.len());
    for i in 0..cloud.len() {
        push_vec(&mut out, cloud.points()[i]);
        if let Some(n) = cloud.normals() {
            out.push(' ');
            push_vec(&mut out, n[i]);
        }
        if let Some(l) = cloud.labels() {
            let [r, g, b] = l[i].color();
            let _ = write!(out, " {r} {g} {b} 255");
        }
        out.push('\n');
    }
    out
}
