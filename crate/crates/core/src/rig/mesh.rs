//! Triangle meshes and the parametric shapes the synthetic rig is built from.

use super::camera::Vec3;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[u32; 3]>,
}

impl Mesh {
    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    /// Face indices in range and all vertices finite.
    pub fn is_valid(&self) -> bool {
        let n = self.vertices.len() as u32;
        self.faces.iter().all(|f| f.iter().all(|&i| i < n))
            && self.vertices.iter().all(|v| v.iter().all(|c| c.is_finite()))
    }

    pub fn append(&mut self, other: &Mesh) {
        let base = self.vertices.len() as u32;
        self.vertices.extend_from_slice(&other.vertices);
        self.faces
            .extend(other.faces.iter().map(|f| [f[0] + base, f[1] + base, f[2] + base]));
    }

    pub fn map_vertices(&self, f: impl Fn(Vec3) -> Vec3) -> Mesh {
        Mesh {
            vertices: self.vertices.iter().map(|&v| f(v)).collect(),
            faces: self.faces.clone(),
        }
    }

    /// Snaps every vertex to a cubic grid of the given step; `step <= 0` is a no-op.
    pub fn quantized(&self, step: f64) -> Mesh {
        if step <= 0.0 {
            return self.clone();
        }
        self.map_vertices(|v| v.map(|c| (c / step).round() * step))
    }

    /// Radius of the smallest origin-centred ball containing the mesh.
    pub fn bounding_radius(&self) -> f64 {
        self.vertices
            .iter()
            .map(|v| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt())
            .fold(0.0, f64::max)
    }
}

/// UV sphere with `rings` latitude bands and `segments` longitude segments.
pub fn uv_sphere(center: Vec3, radius: f64, rings: usize, segments: usize) -> Mesh {
    let mut m = Mesh::default();
    for i in 0..=rings {
        let theta = std::f64::consts::PI * i as f64 / rings as f64;
        for j in 0..segments {
            let phi = std::f64::consts::TAU * j as f64 / segments as f64;
            m.vertices.push([
                center[0] + radius * theta.sin() * phi.cos(),
                center[1] + radius * theta.sin() * phi.sin(),
                center[2] + radius * theta.cos(),
            ]);
        }
    }
    let idx = |i: usize, j: usize| (i * segments + j % segments) as u32;
    for i in 0..rings {
        for j in 0..segments {
            let (a, b, c, d) = (idx(i, j), idx(i, j + 1), idx(i + 1, j), idx(i + 1, j + 1));
            if i > 0 {
                m.faces.push([a, c, b]);
            }
            if i + 1 < rings {
                m.faces.push([b, c, d]);
            }
        }
    }
    m
}

/// Axis-aligned box; each face split into `sub × sub` quads so quantisation bends it.
pub fn cuboid(center: Vec3, half: Vec3, sub: usize) -> Mesh {
    let mut m = Mesh::default();
    let sub = sub.max(1);
    // (normal axis, sign)
    for axis in 0..3 {
        for sign in [-1.0, 1.0] {
            let (ua, va) = ((axis + 1) % 3, (axis + 2) % 3);
            let base = m.vertices.len() as u32;
            for i in 0..=sub {
                for j in 0..=sub {
                    let mut p = [0.0; 3];
                    p[axis] = center[axis] + sign * half[axis];
                    p[ua] = center[ua] + half[ua] * (2.0 * i as f64 / sub as f64 - 1.0);
                    p[va] = center[va] + half[va] * (2.0 * j as f64 / sub as f64 - 1.0);
                    m.vertices.push(p);
                }
            }
            let at = |i: usize, j: usize| base + (i * (sub + 1) + j) as u32;
            for i in 0..sub {
                for j in 0..sub {
                    m.faces.push([at(i, j), at(i + 1, j), at(i + 1, j + 1)]);
                    m.faces.push([at(i, j), at(i + 1, j + 1), at(i, j + 1)]);
                }
            }
        }
    }
    m
}
