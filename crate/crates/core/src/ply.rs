//! Minimal PLY reader/writer: vertex positions and triangle faces, ASCII or
//! binary little-endian.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{MifError, Result};
use crate::geometry::Point3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Encoding {
    Ascii,
    BinaryLe,
}

#[derive(Debug, Clone, Copy)]
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
    fn parse(name: &str) -> Option<Scalar> {
        Some(match name {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn read(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

#[derive(Debug, Clone)]
enum Property {
    Scalar { name: String, ty: Scalar },
    List { name: String, count: Scalar, item: Scalar },
}

#[derive(Debug, Clone)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

#[derive(Debug, Default)]
pub(crate) struct PlyData {
    pub vertices: Vec<Point3>,
    pub faces: Vec<Vec<u32>>,
}

pub(crate) fn read(path: &Path) -> Result<PlyData> {
    let bytes = fs::read(path).map_err(|e| MifError::io(path, e))?;
    parse(path, &bytes)
}

fn parse(path: &Path, bytes: &[u8]) -> Result<PlyData> {
    let fmt_err = |record: usize, msg: &str| MifError::format(path, record, msg);
    let end_marker = b"end_header";
    let header_end = bytes
        .windows(end_marker.len())
        .position(|w| w == end_marker)
        .ok_or_else(|| fmt_err(0, "missing end_header"))?;
    let mut body_start = header_end + end_marker.len();
    if bytes.get(body_start) == Some(&b'\r') {
        body_start += 1;
    }
    if bytes.get(body_start) == Some(&b'\n') {
        body_start += 1;
    }
    let header = std::str::from_utf8(&bytes[..header_end]).map_err(|_| fmt_err(0, "header is not utf-8"))?;
    let mut lines = header.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(fmt_err(0, "missing ply magic"));
    }
    let mut encoding = None;
    let mut elements: Vec<Element> = Vec::new();
    for line in lines {
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            ["format", "ascii", ..] => encoding = Some(Encoding::Ascii),
            ["format", "binary_little_endian", ..] => encoding = Some(Encoding::BinaryLe),
            ["format", other, ..] => {
                return Err(fmt_err(0, &format!("unsupported ply format {other}")))
            }
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count.parse().map_err(|_| fmt_err(0, "bad element count"))?,
                props: Vec::new(),
            }),
            ["property", "list", c, i, name] => {
                let el = elements.last_mut().ok_or_else(|| fmt_err(0, "property before element"))?;
                el.props.push(Property::List {
                    name: name.to_string(),
                    count: Scalar::parse(c).ok_or_else(|| fmt_err(0, "bad list count type"))?,
                    item: Scalar::parse(i).ok_or_else(|| fmt_err(0, "bad list item type"))?,
                });
            }
            ["property", ty, name] => {
                let el = elements.last_mut().ok_or_else(|| fmt_err(0, "property before element"))?;
                el.props.push(Property::Scalar {
                    name: name.to_string(),
                    ty: Scalar::parse(ty).ok_or_else(|| fmt_err(0, "bad property type"))?,
                });
            }
            _ => {}
        }
    }
    let encoding = encoding.ok_or_else(|| fmt_err(0, "missing format line"))?;
    let body = &bytes[body_start..];
    let mut out = PlyData::default();
    let mut ascii_tokens = if encoding == Encoding::Ascii {
        Some(
            std::str::from_utf8(body)
                .map_err(|_| fmt_err(0, "ascii body is not utf-8"))?
                .split_whitespace(),
        )
    } else {
        None
    };
    let mut cursor = 0usize;
    let mut next_value = |ty: Scalar, record: usize| -> Result<f64> {
        match ascii_tokens.as_mut() {
            Some(tokens) => tokens
                .next()
                .ok_or_else(|| fmt_err(record, "unexpected end of data"))?
                .parse::<f64>()
                .map_err(|_| fmt_err(record, "malformed number")),
            None => {
                let n = ty.size();
                let slice = body
                    .get(cursor..cursor + n)
                    .ok_or_else(|| fmt_err(record, "unexpected end of data"))?;
                cursor += n;
                Ok(ty.read(slice))
            }
        }
    };
    for el in &elements {
        let is_vertex = el.name == "vertex";
        let is_face = el.name == "face";
        let mut axis_of = Vec::with_capacity(el.props.len());
        for p in &el.props {
            axis_of.push(match p {
                Property::Scalar { name, .. } if is_vertex => match name.as_str() {
                    "x" => Some(0),
                    "y" => Some(1),
                    "z" => Some(2),
                    _ => None,
                },
                _ => None,
            });
        }
        if is_vertex && axis_of.iter().flatten().count() != 3 {
            return Err(fmt_err(0, "vertex element lacks x/y/z"));
        }
        for record in 0..el.count {
            let mut xyz = [0.0; 3];
            for (p, axis) in el.props.iter().zip(&axis_of) {
                match p {
                    Property::Scalar { ty, .. } => {
                        let v = next_value(*ty, record)?;
                        if let Some(a) = axis {
                            xyz[*a] = v;
                        }
                    }
                    Property::List { name, count, item } => {
                        let n = next_value(*count, record)?;
                        if !(n >= 0.0 && n.fract() == 0.0) {
                            return Err(fmt_err(record, "bad list length"));
                        }
                        let mut items = Vec::with_capacity(n as usize);
                        for _ in 0..n as usize {
                            items.push(next_value(*item, record)?);
                        }
                        if is_face && (name == "vertex_indices" || name == "vertex_index") {
                            let idx: Vec<u32> = items.iter().map(|v| *v as u32).collect();
                            out.faces.push(idx);
                        }
                    }
                }
            }
            if is_vertex {
                let p = Point3::from_array(xyz);
                if !p.is_finite() {
                    return Err(fmt_err(record, "non-finite vertex"));
                }
                out.vertices.push(p);
            }
        }
    }
    Ok(out)
}

/// Binary little-endian PLY with f64 vertices and optional u32 triangle faces.
pub(crate) fn write_binary(
    path: &Path,
    vertices: &[Point3],
    faces: &[[u32; 3]],
    comments: &[String],
) -> Result<()> {
    let mut buf = Vec::with_capacity(64 + vertices.len() * 24 + faces.len() * 13);
    let mut header = String::from("ply\nformat binary_little_endian 1.0\n");
    for c in comments {
        header.push_str(&format!("comment {c}\n"));
    }
    header.push_str(&format!(
        "element vertex {}\nproperty double x\nproperty double y\nproperty double z\n",
        vertices.len()
    ));
    if !faces.is_empty() {
        header.push_str(&format!(
            "element face {}\nproperty list uchar uint vertex_indices\n",
            faces.len()
        ));
    }
    header.push_str("end_header\n");
    buf.extend_from_slice(header.as_bytes());
    for v in vertices {
        for c in v.to_array() {
            buf.extend_from_slice(&c.to_le_bytes());
        }
    }
    for f in faces {
        buf.push(3);
        for i in f {
            buf.extend_from_slice(&i.to_le_bytes());
        }
    }
    let mut file = fs::File::create(path).map_err(|e| MifError::io(path, e))?;
    file.write_all(&buf).map_err(|e| MifError::io(path, e))
}

pub(crate) fn write_ascii(path: &Path, vertices: &[Point3]) -> Result<()> {
    let mut s = format!(
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\nend_header\n",
        vertices.len()
    );
    for v in vertices {
        s.push_str(&format!("{} {} {}\n", v.x, v.y, v.z));
    }
    fs::write(path, s).map_err(|e| MifError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_round_trip_with_faces() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ply");
        let v = vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(0.0, 1.5, -2.0),
        ];
        write_binary(&path, &v, &[[0, 1, 2]], &["hash abc".into()]).unwrap();
        let data = read(&path).unwrap();
        assert_eq!(data.vertices, v);
        assert_eq!(data.faces, vec![vec![0, 1, 2]]);
    }

    #[test]
    fn ascii_with_float_props_and_extras() {
        let text = "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nproperty uchar red\nend_header\n1 2 3 255\n4 5 6 0\n";
        let data = parse(Path::new("x.ply"), text.as_bytes()).unwrap();
        assert_eq!(data.vertices[1], Point3::new(4.0, 5.0, 6.0));
    }

    #[test]
    fn truncated_body_is_format_error() {
        let text = "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nend_header\n1 2 3\n4 5\n";
        let err = parse(Path::new("x.ply"), text.as_bytes()).unwrap_err();
        assert!(matches!(err, MifError::Format { record: 1, .. }));
    }
}
