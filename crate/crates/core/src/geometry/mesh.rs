use nalgebra::Vector3;

use crate::error::GeometryError;

/// Indexed triangle mesh in world units.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TriangleMesh {
    vertices: Vec<Vector3<f64>>,
    triangles: Vec<[u32; 3]>,
    colors: Option<Vec<[f32; 3]>>,
}

impl TriangleMesh {
    /// Builds a mesh and drops zero-area triangles.
    pub fn new(
        vertices: Vec<Vector3<f64>>,
        triangles: Vec<[u32; 3]>,
        colors: Option<Vec<[f32; 3]>>,
    ) -> Result<Self, GeometryError> {
        if let Some(c) = &colors {
            if c.len() != vertices.len() {
                return Err(GeometryError::InvalidMesh(format!(
                    "{} colors for {} vertices",
                    c.len(),
                    vertices.len()
                )));
            }
        }
        if vertices.iter().any(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(GeometryError::InvalidMesh("non-finite vertex".into()));
        }
        let n = vertices.len();
        if let Some(t) = triangles.iter().find(|t| t.iter().any(|&i| i as usize >= n)) {
            return Err(GeometryError::InvalidMesh(format!(
                "triangle {t:?} references a vertex beyond {n}"
            )));
        }
        let mut mesh = Self {
            vertices,
            triangles,
            colors,
        };
        mesh.triangles.retain(|t| {
            let [a, b, c] = t.map(|i| mesh.vertices[i as usize]);
            (b - a).cross(&(c - a)).norm() > 0.0
        });
        Ok(mesh)
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn vertices(&self) -> &[Vector3<f64>] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[u32; 3]] {
        &self.triangles
    }

    pub fn colors(&self) -> Option<&[[f32; 3]]> {
        self.colors.as_deref()
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn triangle(&self, i: usize) -> [Vector3<f64>; 3] {
        self.triangles[i].map(|v| self.vertices[v as usize])
    }

    /// Axis-aligned bounds of the referenced vertices, `None` for an empty mesh.
    pub fn bounds(&self) -> Option<(Vector3<f64>, Vector3<f64>)> {
        let mut it = self.triangles.iter().flatten().map(|&i| self.vertices[i as usize]);
        let first = it.next()?;
        Some(it.fold((first, first), |(lo, hi), v| (lo.inf(&v), hi.sup(&v))))
    }

    /// Appends `other`, re-indexing its triangles. Colors are kept only if both
    /// meshes carry them.
    pub fn merge(&mut self, other: &TriangleMesh) {
        let base = self.vertices.len() as u32;
        self.colors = match (self.colors.take(), &other.colors) {
            (Some(mut a), Some(b)) => {
                a.extend_from_slice(b);
                Some(a)
            }
            (None, _) if self.vertices.is_empty() => other.colors.clone(),
            _ => None,
        };
        self.vertices.extend_from_slice(&other.vertices);
        self.triangles
            .extend(other.triangles.iter().map(|t| t.map(|i| i + base)));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_triangles_are_filtered() {
        let v = vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
            Vector3::new(2.0, 0.0, 0.0),
        ];
        let m = TriangleMesh::new(v, vec![[0, 1, 2], [0, 1, 3], [1, 1, 2]], None).unwrap();
        assert_eq!(m.triangles(), &[[0, 1, 2]]);
    }

    #[test]
    fn out_of_range_index_is_an_error() {
        let v = vec![Vector3::zeros(); 3];
        assert!(TriangleMesh::new(v, vec![[0, 1, 3]], None).is_err());
    }

    #[test]
    fn merge_reindexes() {
        let tri = || {
            TriangleMesh::new(
                vec![Vector3::zeros(), Vector3::x(), Vector3::y()],
                vec![[0, 1, 2]],
                None,
            )
            .unwrap()
        };
        let mut a = tri();
        a.merge(&tri());
        assert_eq!(a.triangles(), &[[0, 1, 2], [3, 4, 5]]);
        assert_eq!(a.bounds(), Some((Vector3::zeros(), Vector3::new(1.0, 1.0, 0.0))));
    }
}
