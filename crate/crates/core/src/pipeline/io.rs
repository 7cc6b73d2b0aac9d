//! Point cloud and mesh files: `xyz`, `ply` (ascii and binary little-endian)
//! and `off`, plus dataset manifests.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::geometry::{Point, PointCloud, TriangleMesh};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CloudFormat {
    Xyz,
    /// ASCII PLY on write; either encoding on read.
    Ply,
    PlyBinary,
    Off,
}

impl CloudFormat {
    /// Guesses from the file extension.
    pub fn from_path(path: &Path) -> Result<Self> {
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .unwrap_or_default();
        ext.parse().map_err(|_| {
            Error::arg(format!(
                "{}: cannot tell the format from extension {ext:?} (expected xyz, ply or off)",
                path.display()
            ))
        })
    }
}

impl FromStr for CloudFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "xyz" | "txt" | "pts" => Ok(Self::Xyz),
            "ply" => Ok(Self::Ply),
            "ply_binary" | "binary_ply" => Ok(Self::PlyBinary),
            "off" => Ok(Self::Off),
            other => Err(Error::arg(format!("unknown cloud format {other:?}"))),
        }
    }
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Reads a cloud; `format` defaults to the one implied by the extension.
pub fn read_cloud(path: &Path, format: Option<CloudFormat>) -> Result<PointCloud> {
    let format = match format {
        Some(f) => f,
        None => CloudFormat::from_path(path)?,
    };
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let points = match format {
        CloudFormat::Xyz => parse_xyz(path, text(path, &bytes)?)?,
        CloudFormat::Ply | CloudFormat::PlyBinary => parse_ply(path, &bytes)?,
        CloudFormat::Off => parse_off(path, text(path, &bytes)?)?.0,
    };
    PointCloud::new(points).map_err(|e| parse_err(path, 0, e.to_string()))
}

/// Reads an OFF mesh (vertices and faces; polygons are fan-triangulated).
pub fn read_mesh(path: &Path) -> Result<TriangleMesh> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (vertices, faces) = parse_off(path, text(path, &bytes)?)?;
    TriangleMesh::new(vertices, faces).map_err(|e| parse_err(path, 0, e.to_string()))
}

pub fn write_cloud(cloud: &PointCloud, path: &Path, format: Option<CloudFormat>) -> Result<()> {
    let format = match format {
        Some(f) => f,
        None => CloudFormat::from_path(path)?,
    };
    let pts = cloud.points();
    let bytes = match format {
        CloudFormat::Xyz => {
            let mut s = String::with_capacity(pts.len() * 48);
            for p in pts {
                writeln!(s, "{} {} {}", p[0], p[1], p[2]).expect("string write");
            }
            s.into_bytes()
        }
        CloudFormat::Ply => {
            let mut s = ply_header("ascii", pts.len());
            for p in pts {
                writeln!(s, "{} {} {}", p[0], p[1], p[2]).expect("string write");
            }
            s.into_bytes()
        }
        CloudFormat::PlyBinary => {
            let mut b = ply_header("binary_little_endian", pts.len()).into_bytes();
            for p in pts {
                for c in p {
                    b.extend_from_slice(&c.to_le_bytes());
                }
            }
            b
        }
        CloudFormat::Off => {
            let mut s = format!("OFF\n{} 0 0\n", pts.len());
            for p in pts {
                writeln!(s, "{} {} {}", p[0], p[1], p[2]).expect("string write");
            }
            s.into_bytes()
        }
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn ply_header(encoding: &str, n: usize) -> String {
    format!(
        "ply\nformat {encoding} 1.0\nelement vertex {n}\nproperty double x\nproperty double y\nproperty double z\nend_header\n"
    )
}

fn text<'a>(path: &Path, bytes: &'a [u8]) -> Result<&'a str> {
    std::str::from_utf8(bytes).map_err(|e| parse_err(path, 0, format!("not valid UTF-8 text: {e}")))
}

fn number<T: FromStr>(path: &Path, line: usize, token: &str) -> Result<T> {
    token
        .parse()
        .map_err(|_| parse_err(path, line, format!("expected a number, found {token:?}")))
}

/// One point per line; extra numeric columns (normals, colors) are ignored.
fn parse_xyz(path: &Path, text: &str) -> Result<Vec<Point>> {
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(|c: char| c.is_whitespace() || c == ',').filter(|s| !s.is_empty()).collect();
        if fields.len() < 3 {
            return Err(parse_err(path, i + 1, format!("expected 3 coordinates, found {}", fields.len())));
        }
        let vals = fields
            .iter()
            .map(|t| number::<f64>(path, i + 1, t))
            .collect::<Result<Vec<_>>>()?;
        points.push([vals[0], vals[1], vals[2]]);
    }
    Ok(points)
}

/// Lines without comments or blanks, with their 1-based numbers.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty())
}

fn parse_off(path: &Path, text: &str) -> Result<(Vec<Point>, Vec<[usize; 3]>)> {
    let mut lines = content_lines(text);
    let (no, first) = lines.next().ok_or_else(|| parse_err(path, 1, "empty file"))?;
    let mut tokens: Vec<&str> = first.split_whitespace().collect();
    if tokens[0] != "OFF" {
        return Err(parse_err(path, no, format!("expected OFF header, found {:?}", tokens[0])));
    }
    tokens.remove(0);
    let (no, counts) = if tokens.is_empty() {
        let (n, l) = lines.next().ok_or_else(|| parse_err(path, no, "missing vertex/face counts"))?;
        (n, l.split_whitespace().collect::<Vec<_>>())
    } else {
        (no, tokens)
    };
    if counts.len() < 2 {
        return Err(parse_err(path, no, "expected vertex and face counts"));
    }
    let nv: usize = number(path, no, counts[0])?;
    let nf: usize = number(path, no, counts[1])?;
    let mut vertices = Vec::with_capacity(nv);
    for _ in 0..nv {
        let (no, l) = lines.next().ok_or_else(|| parse_err(path, no, format!("expected {nv} vertices")))?;
        let f: Vec<&str> = l.split_whitespace().collect();
        if f.len() < 3 {
            return Err(parse_err(path, no, "vertex needs 3 coordinates"));
        }
        vertices.push([number(path, no, f[0])?, number(path, no, f[1])?, number(path, no, f[2])?]);
    }
    let mut faces = Vec::with_capacity(nf);
    for _ in 0..nf {
        let (no, l) = lines.next().ok_or_else(|| parse_err(path, no, format!("expected {nf} faces")))?;
        let f: Vec<&str> = l.split_whitespace().collect();
        let n: usize = number(path, no, f.first().copied().unwrap_or(""))?;
        if n < 3 || f.len() < n + 1 {
            return Err(parse_err(path, no, format!("face needs at least 3 vertices, has {n}")));
        }
        let idx = f[1..=n]
            .iter()
            .map(|t| {
                let i: usize = number(path, no, t)?;
                if i >= nv {
                    return Err(parse_err(path, no, format!("vertex index {i} out of range (have {nv})")));
                }
                Ok(i)
            })
            .collect::<Result<Vec<_>>>()?;
        for j in 1..n - 1 {
            faces.push([idx[0], idx[j], idx[j + 1]]);
        }
    }
    Ok((vertices, faces))
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Self::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Self::I32 => i32::from_le_bytes(b[..4].try_into().expect("4 bytes")) as f64,
            Self::U32 => u32::from_le_bytes(b[..4].try_into().expect("4 bytes")) as f64,
            Self::F32 => f32::from_le_bytes(b[..4].try_into().expect("4 bytes")) as f64,
            Self::F64 => f64::from_le_bytes(b[..8].try_into().expect("8 bytes")),
        }
    }
}

#[derive(Debug)]
enum Property {
    Scalar(String, Scalar),
    List(Scalar, Scalar),
}

#[derive(Debug)]
struct Element {
    name: String,
    count: usize,
    properties: Vec<Property>,
}

/// Vertex positions (`x`, `y`, `z`) of a PLY file; other elements are skipped.
fn parse_ply(path: &Path, bytes: &[u8]) -> Result<Vec<Point>> {
    let end = find_subslice(bytes, b"end_header")
        .ok_or_else(|| parse_err(path, 1, "missing end_header"))?;
    let header = text(path, &bytes[..end])?;
    let mut body_start = end + b"end_header".len();
    if bytes.get(body_start) == Some(&b'\r') {
        body_start += 1;
    }
    if bytes.get(body_start) == Some(&b'\n') {
        body_start += 1;
    }
    let header_lines = header.lines().count();

    let mut lines = header.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, "ply")) => {}
        _ => return Err(parse_err(path, 1, "not a PLY file (missing 'ply' magic)")),
    }
    let mut binary = None;
    let mut elements: Vec<Element> = Vec::new();
    for (no, line) in lines {
        let t: Vec<&str> = line.split_whitespace().collect();
        match t.first().copied() {
            None | Some("comment") | Some("obj_info") => {}
            Some("format") => {
                binary = Some(match t.get(1).copied() {
                    Some("ascii") => false,
                    Some("binary_little_endian") => true,
                    other => return Err(parse_err(path, no, format!("unsupported PLY format {other:?}"))),
                })
            }
            Some("element") => {
                if t.len() != 3 {
                    return Err(parse_err(path, no, "element line needs a name and a count"));
                }
                elements.push(Element {
                    name: t[1].to_string(),
                    count: number(path, no, t[2])?,
                    properties: Vec::new(),
                });
            }
            Some("property") => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| parse_err(path, no, "property before any element"))?;
                let ty = |s: &str| Scalar::parse(s).ok_or_else(|| parse_err(path, no, format!("unknown PLY type {s:?}")));
                let prop = match t.as_slice() {
                    ["property", "list", count, item, _] => Property::List(ty(count)?, ty(item)?),
                    ["property", scalar, name] => Property::Scalar(name.to_string(), ty(scalar)?),
                    _ => return Err(parse_err(path, no, "malformed property line")),
                };
                el.properties.push(prop);
            }
            Some(other) => return Err(parse_err(path, no, format!("unexpected header keyword {other:?}"))),
        }
    }
    let binary = binary.ok_or_else(|| parse_err(path, 2, "missing format line"))?;
    let vertex = elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| parse_err(path, header_lines, "no vertex element"))?;
    let column = |axis: &str| {
        elements[vertex]
            .properties
            .iter()
            .position(|p| matches!(p, Property::Scalar(n, _) if n == axis))
            .ok_or_else(|| parse_err(path, header_lines, format!("vertex element has no {axis} property")))
    };
    let cols = [column("x")?, column("y")?, column("z")?];

    let body = &bytes[body_start..];
    let mut points = Vec::with_capacity(elements[vertex].count);
    if binary {
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = body
                .get(pos..pos + n)
                .ok_or_else(|| parse_err(path, 0, format!("binary body truncated at byte offset {}", body_start + pos)))?;
            pos += n;
            Ok(s)
        };
        for el in &elements[..=vertex] {
            let is_vertex = el.name == "vertex";
            for _ in 0..el.count {
                let mut row = Vec::with_capacity(el.properties.len());
                for p in &el.properties {
                    match p {
                        Property::Scalar(_, s) => row.push(s.read_le(take(s.size())?)),
                        Property::List(c, item) => {
                            let n = c.read_le(take(c.size())?) as usize;
                            take(n * item.size())?;
                            row.push(f64::NAN);
                        }
                    }
                }
                if is_vertex {
                    points.push([row[cols[0]], row[cols[1]], row[cols[2]]]);
                }
            }
        }
    } else {
        let body = text(path, body)?;
        let mut rows = body
            .lines()
            .enumerate()
            .map(|(i, l)| (header_lines + 1 + i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty());
        for el in &elements[..=vertex] {
            let is_vertex = el.name == "vertex";
            for _ in 0..el.count {
                let (no, line) = rows
                    .next()
                    .ok_or_else(|| parse_err(path, 0, format!("expected {} {} rows", el.count, el.name)))?;
                if !is_vertex {
                    continue;
                }
                let f: Vec<&str> = line.split_whitespace().collect();
                if f.len() < el.properties.len() {
                    return Err(parse_err(path, no, format!("expected {} values", el.properties.len())));
                }
                points.push([number(path, no, f[cols[0]])?, number(path, no, f[cols[1]])?, number(path, no, f[cols[2]])?]);
            }
        }
    }
    Ok(points)
}

fn find_subslice(hay: &[u8], needle: &[u8]) -> Option<usize> {
    hay.windows(needle.len()).position(|w| w == needle)
}

/// One `cloud [mesh]` pair per line of a manifest; `#` starts a comment and
/// relative paths resolve against the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub cloud: PathBuf,
    pub mesh: Option<PathBuf>,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let resolve = |p: &str| {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    };
    let mut entries = Vec::new();
    for (no, line) in content_lines(&body) {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() > 2 {
            return Err(parse_err(path, no, "expected 'cloud_path [mesh_path]'"));
        }
        entries.push(ManifestEntry {
            cloud: resolve(f[0]),
            mesh: f.get(1).map(|m| resolve(m)),
        });
    }
    if entries.is_empty() {
        return Err(parse_err(path, 0, "manifest lists no clouds"));
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::point_to_surface;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(n: usize) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
        PointCloud::new((0..n).map(|_| [rng.random::<f64>() - 0.5, rng.random::<f64>() * 1e-7, rng.random::<f64>() * 1e5]).collect()).unwrap()
    }

    #[test]
    fn round_trips_are_exact() {
        let dir = tempfile::tempdir().unwrap();
        let cloud = random_cloud(100);
        for (name, fmt) in [
            ("a.ply", Some(CloudFormat::PlyBinary)),
            ("b.ply", None),
            ("c.xyz", None),
            ("d.off", None),
        ] {
            let path = dir.path().join(name);
            write_cloud(&cloud, &path, fmt).unwrap();
            assert_eq!(read_cloud(&path, None).unwrap(), cloud, "{name}");
        }
    }

    #[test]
    fn xyz_errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.xyz");
        fs::write(&path, "0 0 0\n# note\n1 2 3\n1 two 3\n").unwrap();
        match read_cloud(&path, None).unwrap_err() {
            Error::Parse { line, message, .. } => {
                assert_eq!(line, 4);
                assert!(message.contains("two"));
            }
            other => panic!("unexpected {other:?}"),
        }
        fs::write(&path, "1 2\n").unwrap();
        assert!(read_cloud(&path, None).is_err());
    }

    #[test]
    fn unknown_extension_is_an_argument_error() {
        let err = read_cloud(Path::new("cloud.obj"), None).unwrap_err();
        assert!(matches!(err, Error::Argument(_)));
        assert!("stl".parse::<CloudFormat>().is_err());
    }

    #[test]
    fn cube_mesh_distance() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cube.off");
        fs::write(
            &path,
            "OFF\n# unit cube\n8 6 12\n\
             -1 -1 -1\n1 -1 -1\n1 1 -1\n-1 1 -1\n-1 -1 1\n1 -1 1\n1 1 1\n-1 1 1\n\
             4 0 3 2 1\n4 4 5 6 7\n4 0 1 5 4\n4 2 3 7 6\n4 1 2 6 5\n4 0 4 7 3\n",
        )
        .unwrap();
        let mesh = read_mesh(&path).unwrap();
        assert_eq!(mesh.faces().len(), 12);
        assert!((point_to_surface(&[[0.0, 0.0, 2.0]], &mesh).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(read_cloud(&path, None).unwrap().len(), 8);
    }

    #[test]
    fn ply_with_extra_properties_and_faces() {
        let dir = tempfile::tempdir().unwrap();
        let ascii = dir.path().join("a.ply");
        fs::write(
            &ascii,
            "ply\nformat ascii 1.0\ncomment test\nelement vertex 2\nproperty float nx\nproperty float x\nproperty float y\nproperty float z\n\
             element face 1\nproperty list uchar int vertex_indices\nend_header\n9 1 2 3\n9 4 5 6\n3 0 1 1\n",
        )
        .unwrap();
        assert_eq!(read_cloud(&ascii, None).unwrap().points(), &[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);

        let bin = dir.path().join("b.ply");
        let mut b = b"ply\nformat binary_little_endian 1.0\nelement face 1\nproperty list uchar int vertex_indices\n\
                     element vertex 1\nproperty float x\nproperty float y\nproperty float z\nproperty uchar red\nend_header\n"
            .to_vec();
        b.push(2);
        b.extend_from_slice(&7i32.to_le_bytes());
        b.extend_from_slice(&8i32.to_le_bytes());
        for v in [0.5f32, -1.0, 2.0] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b.push(255);
        fs::write(&bin, &b).unwrap();
        assert_eq!(read_cloud(&bin, None).unwrap().points(), &[[0.5, -1.0, 2.0]]);
        fs::write(&bin, &b[..b.len() - 3]).unwrap();
        assert!(read_cloud(&bin, None).is_err());
    }

    #[test]
    fn manifest_paths_resolve_relative_to_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("list.txt");
        fs::write(&path, "# clouds\na.xyz\nsub/b.ply mesh/b.off\n\n").unwrap();
        let m = read_manifest(&path).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m[0].cloud, dir.path().join("a.xyz"));
        assert_eq!(m[1].mesh.as_deref(), Some(dir.path().join("mesh/b.off").as_path()));
        fs::write(&path, "a b c\n").unwrap();
        assert!(read_manifest(&path).is_err());
    }
}
