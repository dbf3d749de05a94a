//! Wavefront OBJ meshes: `v` positions (optionally followed by RGB) and
//! triangular `f` faces. Texture coordinates, normals, groups and
//! materials are ignored.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;

use crate::error::Error;
use crate::geometry::TriangleMesh;

fn face_index(tok: &str, count: usize) -> Result<u32, String> {
    let head = tok.split('/').next().unwrap_or("");
    let i: i64 = head.parse().map_err(|_| format!("bad face index `{tok}`"))?;
    let resolved = match i {
        0 => return Err("face index 0".into()),
        i if i > 0 => i - 1,
        i => count as i64 + i,
    };
    if resolved < 0 || resolved >= count as i64 {
        return Err(format!("face index {i} out of range for {count} vertices"));
    }
    Ok(resolved as u32)
}

pub fn parse_obj(text: &str, path: &Path) -> Result<TriangleMesh, Error> {
    let mut vertices = Vec::new();
    let mut colors = Vec::new();
    let mut triangles = Vec::new();
    let mut face_lines = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        let err = |msg: String| Error::parse(path, line_no, msg);
        let line = line.split('#').next().unwrap_or("");
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("v") => {
                let vals = tok
                    .map(|t| t.parse::<f64>().map_err(|_| err(format!("`{t}` is not a number"))))
                    .collect::<Result<Vec<_>, _>>()?;
                match vals.len() {
                    3 | 4 => vertices.push(Vector3::new(vals[0], vals[1], vals[2])),
                    6 => {
                        vertices.push(Vector3::new(vals[0], vals[1], vals[2]));
                        colors.push([vals[3] as f32, vals[4] as f32, vals[5] as f32]);
                    }
                    k => return Err(err(format!("vertex with {k} values"))),
                }
            }
            Some("f") => {
                let idx: Vec<&str> = tok.collect();
                if idx.len() != 3 {
                    return Err(err(format!("face with {} vertices; only triangles are supported", idx.len())));
                }
                let mut tri = [0u32; 3];
                for (slot, t) in tri.iter_mut().zip(&idx) {
                    *slot = face_index(t, vertices.len()).map_err(err)?;
                }
                triangles.push(tri);
                face_lines.push(line_no);
            }
            _ => {}
        }
    }
    if !colors.is_empty() && colors.len() != vertices.len() {
        return Err(Error::parse(path, 1, "vertex colors given for only some vertices"));
    }
    let colors = (!colors.is_empty()).then_some(colors);
    TriangleMesh::new(vertices, triangles, colors).map_err(|e| Error::parse(path, face_lines.first().copied().unwrap_or(1), e.to_string()))
}

pub fn read_obj(path: &Path) -> Result<TriangleMesh, Error> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let text = std::str::from_utf8(&bytes).map_err(|_| Error::parse(path, 1, "file is not UTF-8"))?;
    parse_obj(text, path)
}

pub fn format_obj(mesh: &TriangleMesh) -> String {
    let mut s = String::new();
    for (i, v) in mesh.vertices().iter().enumerate() {
        let _ = write!(s, "v {:?} {:?} {:?}", v.x, v.y, v.z);
        if let Some(c) = mesh.colors() {
            let _ = write!(s, " {:?} {:?} {:?}", c[i][0], c[i][1], c[i][2]);
        }
        s.push('\n');
    }
    for t in mesh.triangles() {
        let _ = writeln!(s, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
    }
    s
}
