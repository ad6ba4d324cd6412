//! Triangle meshes and area-uniform surface sampling.

use std::fs;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use super::io::parse_off_body;
use super::PointCloud;
use crate::error::{Error, Result};
use crate::geom::{self, Vec3};

#[derive(Clone, Debug, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
}

/// Read an OFF mesh; polygons are fan-triangulated.
pub fn load_mesh(path: &Path) -> Result<Mesh> {
    Mesh::parse_off(&fs::read_to_string(path)?)
}

impl Mesh {
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Result<Self> {
        if let Some(f) = faces.iter().find(|f| f.iter().any(|&i| i >= vertices.len())) {
            return Err(Error::DegenerateMesh(format!(
                "face {f:?} references a vertex beyond {}",
                vertices.len()
            )));
        }
        Ok(Mesh { vertices, faces })
    }

    pub fn parse_off(text: &str) -> Result<Self> {
        let body = parse_off_body(text)?;
        let faces = body
            .faces
            .iter()
            .flat_map(|poly| (1..poly.len() - 1).map(move |j| [poly[0], poly[j], poly[j + 1]]))
            .collect();
        Mesh::new(body.vertices, faces)
    }

    /// Axis-aligned unit cube centered at the origin, 12 outward-facing triangles.
    pub fn unit_cube() -> Self {
        let vertices = (0..8)
            .map(|i| {
                [
                    if i & 1 == 0 { -0.5 } else { 0.5 },
                    if i & 2 == 0 { -0.5 } else { 0.5 },
                    if i & 4 == 0 { -0.5 } else { 0.5 },
                ]
            })
            .collect();
        let quads = [
            [0, 2, 3, 1],
            [4, 5, 7, 6],
            [0, 1, 5, 4],
            [2, 6, 7, 3],
            [0, 4, 6, 2],
            [1, 3, 7, 5],
        ];
        let faces = quads
            .iter()
            .flat_map(|q| [[q[0], q[1], q[2]], [q[0], q[2], q[3]]])
            .collect();
        Mesh { vertices, faces }
    }

    fn corners(&self, f: usize) -> [Vec3; 3] {
        self.faces[f].map(|i| self.vertices[i])
    }

    /// Unnormalized face normal; its length is twice the face area.
    fn face_cross(&self, f: usize) -> Vec3 {
        let [a, b, c] = self.corners(f);
        geom::cross(geom::sub(b, a), geom::sub(c, a))
    }

    pub fn face_area(&self, f: usize) -> f64 {
        0.5 * geom::norm(self.face_cross(f))
    }

    pub fn area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.face_area(f)).sum()
    }

    /// `n` points distributed uniformly over the surface: faces are picked
    /// proportionally to area, then a uniform barycentric point is taken.
    /// Each point carries its face normal.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<PointCloud> {
        if n == 0 {
            return Err(Error::invalid("cannot sample zero points"));
        }
        let areas: Vec<f64> = (0..self.faces.len()).map(|f| self.face_area(f)).collect();
        let total: f64 = areas.iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::DegenerateMesh(format!(
                "total area {total} over {} faces",
                self.faces.len()
            )));
        }
        let pick = WeightedIndex::new(&areas).map_err(|e| Error::DegenerateMesh(e.to_string()))?;
        let mut points = Vec::with_capacity(n);
        let mut normals = Vec::with_capacity(n);
        for _ in 0..n {
            let f = pick.sample(rng);
            let [a, b, c] = self.corners(f);
            let (r1, r2): (f64, f64) = (rng.random(), rng.random());
            let s = r1.sqrt();
            let (wa, wb, wc) = (1.0 - s, s * (1.0 - r2), s * r2);
            points.push([
                wa * a[0] + wb * b[0] + wc * c[0],
                wa * a[1] + wb * b[1] + wc * c[1],
                wa * a[2] + wb * b[2] + wc * c[2],
            ]);
            normals.push(geom::normalize(self.face_cross(f)));
        }
        PointCloud::new(points)?.with_normals(normals)
    }
}

/// Free-function form of [`Mesh::sample`].
pub fn sample_mesh<R: Rng + ?Sized>(
    vertices: &[Vec3],
    faces: &[[usize; 3]],
    n: usize,
    rng: &mut R,
) -> Result<PointCloud> {
    Mesh::new(vertices.to_vec(), faces.to_vec())?.sample(n, rng)
}
