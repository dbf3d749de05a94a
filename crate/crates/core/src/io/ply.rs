//! PLY meshes: ASCII and binary (either endianness), vertex positions,
//! optional vertex colors, and triangular faces. Other elements and
//! properties are skipped.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;

use crate::error::Error;
use crate::geometry::TriangleMesh;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Format {
    Ascii,
    BinaryLe,
    BinaryBe,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
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
}

#[derive(Clone, Debug)]
enum Property {
    Scalar { name: String, ty: Scalar },
    List { name: String, count: Scalar, item: Scalar },
}

#[derive(Clone, Debug)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

struct Header {
    format: Format,
    elements: Vec<Element>,
    /// Byte offset of the body.
    body: usize,
    /// Line number of `end_header`.
    end_line: usize,
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<Header, Error> {
    let err = |line: usize, msg: &str| Error::parse(path, line, msg);
    let mut pos = 0;
    let mut line_no = 0;
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        let Some(nl) = bytes[pos..].iter().position(|&b| b == b'\n') else {
            return Err(err(line_no + 1, "missing end_header"));
        };
        let line = std::str::from_utf8(&bytes[pos..pos + nl])
            .map_err(|_| err(line_no + 1, "header is not valid UTF-8"))?
            .trim_end_matches('\r');
        pos += nl + 1;
        line_no += 1;
        let mut tok = line.split_whitespace();
        let first = tok.next();
        if line_no == 1 {
            if line.trim() != "ply" {
                return Err(err(1, "missing `ply` magic"));
            }
            continue;
        }
        match first {
            None | Some("comment") | Some("obj_info") => {}
            Some("format") => {
                let f = match tok.next() {
                    Some("ascii") => Format::Ascii,
                    Some("binary_little_endian") => Format::BinaryLe,
                    Some("binary_big_endian") => Format::BinaryBe,
                    _ => return Err(err(line_no, "unknown format")),
                };
                if tok.next() != Some("1.0") {
                    return Err(err(line_no, "unsupported format version"));
                }
                format = Some(f);
            }
            Some("element") => {
                let name = tok.next().ok_or_else(|| err(line_no, "element without name"))?;
                let count = tok
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| err(line_no, "element count is not an integer"))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    props: Vec::new(),
                });
            }
            Some("property") => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| err(line_no, "property before any element"))?;
                let ty = tok.next().ok_or_else(|| err(line_no, "property without type"))?;
                let prop = if ty == "list" {
                    let count = tok.next().and_then(Scalar::parse);
                    let item = tok.next().and_then(Scalar::parse);
                    let name = tok.next();
                    match (count, item, name) {
                        (Some(count), Some(item), Some(name)) if !matches!(count, Scalar::F32 | Scalar::F64) => {
                            Property::List {
                                name: name.to_string(),
                                count,
                                item,
                            }
                        }
                        _ => return Err(err(line_no, "malformed list property")),
                    }
                } else {
                    let ty = Scalar::parse(ty).ok_or_else(|| err(line_no, &format!("unknown type `{ty}`")))?;
                    let name = tok.next().ok_or_else(|| err(line_no, "property without name"))?;
                    Property::Scalar {
                        name: name.to_string(),
                        ty,
                    }
                };
                el.props.push(prop);
            }
            Some("end_header") => {
                let format = format.ok_or_else(|| err(line_no, "missing format line"))?;
                return Ok(Header {
                    format,
                    elements,
                    body: pos,
                    end_line: line_no,
                });
            }
            Some(other) => return Err(err(line_no, &format!("unexpected header keyword `{other}`"))),
        }
    }
}

/// Source of scalar values for the body, ASCII or binary.
trait Values {
    fn next(&mut self, ty: Scalar) -> Result<f64, String>;
    /// Called at the end of each element instance.
    fn end_record(&mut self) -> Result<(), String> {
        Ok(())
    }
    fn location(&self) -> usize;
}

struct AsciiValues<'a> {
    lines: std::str::Lines<'a>,
    current: Vec<&'a str>,
    cursor: usize,
    line: usize,
}

impl Values for AsciiValues<'_> {
    fn next(&mut self, _ty: Scalar) -> Result<f64, String> {
        while self.cursor >= self.current.len() {
            if self.cursor > 0 || !self.current.is_empty() {
                return Err("record has too few values".into());
            }
            let line = self.lines.next().ok_or("unexpected end of file")?;
            self.line += 1;
            self.current = line.split_whitespace().collect();
            self.cursor = 0;
            if self.current.is_empty() {
                continue;
            }
        }
        let tok = self.current[self.cursor];
        self.cursor += 1;
        tok.parse::<f64>().map_err(|_| format!("`{tok}` is not a number"))
    }

    fn end_record(&mut self) -> Result<(), String> {
        if self.cursor != self.current.len() {
            return Err("record has extra values".into());
        }
        self.current.clear();
        self.cursor = 0;
        Ok(())
    }

    fn location(&self) -> usize {
        self.line
    }
}

struct BinaryValues<'a> {
    bytes: &'a [u8],
    pos: usize,
    big_endian: bool,
    end_line: usize,
}

impl Values for BinaryValues<'_> {
    fn next(&mut self, ty: Scalar) -> Result<f64, String> {
        let n = ty.size();
        let raw = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| format!("binary body truncated at byte {}", self.pos))?;
        self.pos += n;
        let mut b = [0u8; 8];
        b[..n].copy_from_slice(raw);
        if self.big_endian {
            b[..n].reverse();
        }
        Ok(match ty {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F64 => f64::from_le_bytes(b),
        })
    }

    fn location(&self) -> usize {
        self.end_line
    }
}

fn to_index(v: f64, n: usize) -> Result<u32, String> {
    if v.fract() != 0.0 || v < 0.0 || v >= n as f64 {
        return Err(format!("vertex index {v} out of range for {n} vertices"));
    }
    Ok(v as u32)
}

fn read_body(header: &Header, values: &mut dyn Values) -> Result<TriangleMesh, String> {
    let mut vertices = Vec::new();
    let mut colors: Vec<[f32; 3]> = Vec::new();
    let mut has_colors = false;
    let mut triangles = Vec::new();
    let mut num_vertices = 0;
    for el in &header.elements {
        let prop_index = |name: &str| {
            el.props
                .iter()
                .position(|p| matches!(p, Property::Scalar { name: n, .. } if n == name))
        };
        let is_vertex = el.name == "vertex";
        let is_face = el.name == "face";
        let xyz = [prop_index("x"), prop_index("y"), prop_index("z")];
        let rgb = [prop_index("red"), prop_index("green"), prop_index("blue")];
        if el.count > 0 && el.props.is_empty() {
            return Err(format!("element `{}` has no properties", el.name));
        }
        if is_vertex {
            if xyz.iter().any(Option::is_none) {
                return Err("vertex element lacks x, y or z".into());
            }
            num_vertices = el.count;
            has_colors = rgb.iter().all(Option::is_some);
            vertices.reserve(el.count.min(1 << 20));
        }
        for _ in 0..el.count {
            let mut scalars: Vec<Option<(f64, Scalar)>> = Vec::with_capacity(el.props.len());
            let mut face: Option<Vec<f64>> = None;
            for prop in &el.props {
                match prop {
                    Property::Scalar { ty, .. } => scalars.push(Some((values.next(*ty)?, *ty))),
                    Property::List { name, count, item } => {
                        let n = values.next(*count)?;
                        if n < 0.0 || n.fract() != 0.0 || n > 1e6 {
                            return Err(format!("invalid list length {n}"));
                        }
                        let items = (0..n as usize).map(|_| values.next(*item)).collect::<Result<Vec<_>, _>>()?;
                        if is_face && (name == "vertex_indices" || name == "vertex_index") {
                            face = Some(items);
                        }
                        scalars.push(None);
                    }
                }
            }
            values.end_record()?;
            if is_vertex {
                let get = |i: Option<usize>| scalars[i.unwrap()].unwrap();
                let p = xyz.map(get);
                vertices.push(Vector3::new(p[0].0, p[1].0, p[2].0));
                if has_colors {
                    colors.push(rgb.map(|i| {
                        let (v, ty) = get(i);
                        match ty {
                            Scalar::F32 | Scalar::F64 => v as f32,
                            Scalar::U16 => (v / 65535.0) as f32,
                            _ => (v / 255.0) as f32,
                        }
                    }));
                }
            } else if is_face {
                let items = face.ok_or("face element lacks vertex_indices")?;
                if items.len() != 3 {
                    return Err(format!("face with {} vertices; only triangles are supported", items.len()));
                }
                triangles.push([
                    to_index(items[0], num_vertices)?,
                    to_index(items[1], num_vertices)?,
                    to_index(items[2], num_vertices)?,
                ]);
            }
        }
    }
    TriangleMesh::new(vertices, triangles, has_colors.then_some(colors)).map_err(|e| e.to_string())
}

/// Parses a PLY file. Degenerate triangles are dropped.
pub fn parse_ply(bytes: &[u8], path: &Path) -> Result<TriangleMesh, Error> {
    let header = parse_header(bytes, path)?;
    if !header.elements.iter().any(|e| e.name == "vertex") {
        return Err(Error::parse(path, header.end_line, "no vertex element"));
    }
    let body = &bytes[header.body..];
    match header.format {
        Format::Ascii => {
            let text = std::str::from_utf8(body).map_err(|_| Error::parse(path, header.end_line, "body is not UTF-8"))?;
            let mut values = AsciiValues {
                lines: text.lines(),
                current: Vec::new(),
                cursor: 0,
                line: header.end_line,
            };
            read_body(&header, &mut values).map_err(|m| Error::parse(path, values.location().max(1), m))
        }
        Format::BinaryLe | Format::BinaryBe => {
            let mut values = BinaryValues {
                bytes: body,
                pos: 0,
                big_endian: header.format == Format::BinaryBe,
                end_line: header.end_line,
            };
            read_body(&header, &mut values).map_err(|m| Error::parse(path, values.location(), m))
        }
    }
}

pub fn read_ply(path: &Path) -> Result<TriangleMesh, Error> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_ply(&bytes, path)
}

/// ASCII PLY with shortest round-trip float formatting, so parsing the
/// output reproduces the mesh exactly.
pub fn format_ply(mesh: &TriangleMesh) -> String {
    let mut s = String::new();
    s.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "element vertex {}", mesh.vertices().len());
    s.push_str("property double x\nproperty double y\nproperty double z\n");
    if mesh.colors().is_some() {
        s.push_str("property float red\nproperty float green\nproperty float blue\n");
    }
    let _ = writeln!(s, "element face {}", mesh.triangles().len());
    s.push_str("property list uchar int vertex_indices\nend_header\n");
    for (i, v) in mesh.vertices().iter().enumerate() {
        let _ = write!(s, "{:?} {:?} {:?}", v.x, v.y, v.z);
        if let Some(c) = mesh.colors() {
            let _ = write!(s, " {:?} {:?} {:?}", c[i][0], c[i][1], c[i][2]);
        }
        s.push('\n');
    }
    for t in mesh.triangles() {
        let _ = writeln!(s, "3 {} {} {}", t[0], t[1], t[2]);
    }
    s
}

pub fn write_ply(path: &Path, mesh: &TriangleMesh) -> Result<(), Error> {
    std::fs::write(path, format_ply(mesh)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square() -> TriangleMesh {
        TriangleMesh::new(
            vec![
                Vector3::new(0.0, 0.0, 0.1),
                Vector3::new(1.0, 0.0, -2.5e-7),
                Vector3::new(1.0, 1.0, 3.0),
                Vector3::new(0.0, 1.0, 1.0 / 3.0),
            ],
            vec![[0, 1, 2], [0, 2, 3]],
            Some(vec![[0.1, 0.2, 0.3], [1.0, 0.0, 0.5], [0.0; 3], [0.25; 3]]),
        )
        .unwrap()
    }

    #[test]
    fn ascii_round_trip_is_exact() {
        let m = square();
        let back = parse_ply(format_ply(&m).as_bytes(), Path::new("m.ply")).unwrap();
        assert_eq!(back, m);
    }

    fn binary(big_endian: bool) -> Vec<u8> {
        let fmt = if big_endian { "binary_big_endian" } else { "binary_little_endian" };
        let mut b = format!(
            "ply\nformat {fmt} 1.0\ncomment test\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\nproperty uchar red\nproperty uchar green\nproperty uchar blue\nelement face 1\nproperty list uchar int vertex_indices\nelement extra 1\nproperty short q\nend_header\n"
        )
        .into_bytes();
        let f = |v: f32| if big_endian { v.to_be_bytes() } else { v.to_le_bytes() };
        for (p, c) in [([0.0f32, 0.0, 1.0], 255u8), ([1.0, 0.0, 1.0], 0), ([0.0, 1.0, 1.0], 51)] {
            for v in p {
                b.extend(f(v));
            }
            b.extend([c, c, c]);
        }
        b.push(3);
        for i in [0i32, 1, 2] {
            b.extend(if big_endian { i.to_be_bytes() } else { i.to_le_bytes() });
        }
        b.extend([0u8, 7]);
        b
    }

    #[test]
    fn binary_both_endiannesses() {
        for be in [false, true] {
            let m = parse_ply(&binary(be), Path::new("b.ply")).unwrap();
            assert_eq!(m.vertices().len(), 3);
            assert_eq!(m.triangles(), &[[0, 1, 2]]);
            assert_eq!(m.vertices()[1], Vector3::new(1.0, 0.0, 1.0));
            assert_eq!(m.colors().unwrap()[2], [0.2; 3]);
        }
    }

    #[test]
    fn errors_carry_line_numbers() {
        let bad = "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n0 0 0\n3 0 1 2\n";
        match parse_ply(bad.as_bytes(), Path::new("bad.ply")) {
            Err(Error::Parse { line, msg, .. }) => {
                assert_eq!(line, 11);
                assert!(msg.contains("out of range"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
        let quad = "ply\nformat ascii 1.0\nelement vertex 4\nproperty float x\nproperty float y\nproperty float z\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n";
        assert!(parse_ply(quad.as_bytes(), Path::new("q.ply")).is_err());
        let mut trunc = binary(false);
        trunc.truncate(trunc.len() - 5);
        assert!(parse_ply(&trunc, Path::new("t.ply")).is_err());
        assert!(parse_ply(b"plx\n", Path::new("m.ply")).is_err());
    }
}
