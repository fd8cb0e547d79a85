//! Indexed triangle meshes: construction-time validation, topology queries
//! and a strict OBJ subset reader/writer.
//!
//! Faces are 0-based in memory and 1-based in OBJ files.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

pub type Vec3 = [f64; 3];

/// Relative area floor below which a face counts as degenerate, in units of
/// the squared bounding-box diagonal.
pub const DEGENERATE_AREA_RATIO: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("mesh has no vertices")]
    Empty,
    #[error("vertex {vertex} has a non-finite coordinate")]
    NonFinite { vertex: usize },
    #[error("face {face} references vertex {index} but the mesh has {count} vertices")]
    IndexOutOfRange {
        face: usize,
        index: usize,
        count: usize,
    },
    #[error("face {face} repeats a vertex index: {indices:?}")]
    RepeatedIndex { face: usize, indices: [usize; 3] },
    #[error("face {face} {indices:?} is degenerate (area {area:e})")]
    DegenerateFace {
        face: usize,
        indices: [usize; 3],
        area: f64,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: {source}")]
    AtLine {
        line: usize,
        #[source]
        source: Box<MeshError>,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub(crate) fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

/// Area of the triangle spanned by three points.
pub fn triangle_area(a: Vec3, b: Vec3, c: Vec3) -> f64 {
    0.5 * norm(cross(sub(b, a), sub(c, a)))
}

/// Indexed triangle mesh. Immutable once constructed; every instance satisfies
/// the validity invariants checked by [`TriMesh::new`].
#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh {
    vertices: Vec<Vec3>,
    faces: Vec<[usize; 3]>,
}

impl TriMesh {
    /// Validates and builds a mesh.
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Result<Self, MeshError> {
        if vertices.is_empty() {
            return Err(MeshError::Empty);
        }
        if let Some(vertex) = vertices
            .iter()
            .position(|v| v.iter().any(|c| !c.is_finite()))
        {
            return Err(MeshError::NonFinite { vertex });
        }
        let count = vertices.len();
        for (face, f) in faces.iter().enumerate() {
            if let Some(&index) = f.iter().find(|&&i| i >= count) {
                return Err(MeshError::IndexOutOfRange { face, index, count });
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(MeshError::RepeatedIndex { face, indices: *f });
            }
        }
        let diag = bbox_diagonal(&vertices);
        let floor = DEGENERATE_AREA_RATIO * diag * diag;
        for (face, f) in faces.iter().enumerate() {
            let area = triangle_area(vertices[f[0]], vertices[f[1]], vertices[f[2]]);
            if !(area >= floor) || area == 0.0 {
                return Err(MeshError::DegenerateFace {
                    face,
                    indices: *f,
                    area,
                });
            }
        }
        Ok(Self { vertices, faces })
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    /// Same connectivity, new positions. The result is re-validated.
    pub fn with_vertices(&self, vertices: Vec<Vec3>) -> Result<Self, MeshError> {
        if vertices.len() != self.vertices.len() {
            return Err(MeshError::IndexOutOfRange {
                face: 0,
                index: self.vertices.len(),
                count: vertices.len(),
            });
        }
        Self::new(vertices, self.faces.clone())
    }

    pub fn face_area(&self, face: usize) -> f64 {
        let [a, b, c] = self.faces[face];
        triangle_area(self.vertices[a], self.vertices[b], self.vertices[c])
    }

    pub fn surface_area(&self) -> f64 {
        (0..self.face_count()).map(|f| self.face_area(f)).sum()
    }

    /// Per-face arithmetic mean of the corner positions, in face order.
    pub fn face_centroids(&self) -> Vec<Vec3> {
        self.faces
            .iter()
            .map(|f| {
                let mut c = [0.0; 3];
                for &v in f {
                    for k in 0..3 {
                        c[k] += self.vertices[v][k];
                    }
                }
                c.map(|x| x / 3.0)
            })
            .collect()
    }

    /// Length of the axis-aligned bounding-box diagonal.
    pub fn bbox_diag(&self) -> f64 {
        bbox_diagonal(&self.vertices)
    }

    pub fn edge_set(&self) -> EdgeSet {
        let mut edges = BTreeSet::new();
        for f in &self.faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                edges.insert((a.min(b), a.max(b)));
            }
        }
        EdgeSet {
            edges: edges.into_iter().collect(),
        }
    }

    /// Number of connected components, counting vertices that no face
    /// references as components of their own.
    pub fn component_count(&self) -> usize {
        let mut parent: Vec<usize> = (0..self.vertex_count()).collect();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        for f in &self.faces {
            for k in 1..3 {
                let (ra, rb) = (find(&mut parent, f[0]), find(&mut parent, f[k]));
                if ra != rb {
                    parent[ra.max(rb)] = ra.min(rb);
                }
            }
        }
        (0..parent.len())
            .filter(|&i| find(&mut parent, i) == i)
            .count()
    }

    pub fn same_connectivity(&self, other: &TriMesh) -> bool {
        self.vertex_count() == other.vertex_count() && self.faces == other.faces
    }
}

fn bbox_diagonal(vertices: &[Vec3]) -> f64 {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for v in vertices {
        for k in 0..3 {
            lo[k] = lo[k].min(v[k]);
            hi[k] = hi[k].max(v[k]);
        }
    }
    if vertices.is_empty() {
        return 0.0;
    }
    norm(sub(hi, lo))
}

/// Sorted, deduplicated unordered edges `(i, j)` with `i < j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeSet {
    pub edges: Vec<(usize, usize)>,
}

impl EdgeSet {
    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }
}

/// Bounding-box diagonal of a point set; errors on an empty set.
pub fn bbox_diag(points: &[Vec3]) -> Result<f64, MeshError> {
    if points.is_empty() {
        return Err(MeshError::Empty);
    }
    Ok(bbox_diagonal(points))
}

/// Parses the `v`/`f` OBJ subset. Anything else except comments and blank
/// lines is rejected.
pub fn parse_obj(text: &str) -> Result<TriMesh, MeshError> {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    let mut face_lines = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let mut tokens = content.split_whitespace();
        let tag = tokens.next().unwrap_or_default();
        let rest: Vec<&str> = tokens.collect();
        let err = |message: String| MeshError::Parse { line, message };
        match tag {
            "v" => {
                if rest.len() != 3 {
                    return Err(err(format!(
                        "vertex record needs 3 coordinates, got {}",
                        rest.len()
                    )));
                }
                let mut p = [0.0; 3];
                for (k, tok) in rest.iter().enumerate() {
                    p[k] = tok
                        .parse::<f64>()
                        .map_err(|e| err(format!("bad coordinate `{tok}`: {e}")))?;
                }
                vertices.push(p);
            }
            "f" => {
                if rest.len() != 3 {
                    return Err(err(format!(
                        "face record must be a triangle, got {} vertices",
                        rest.len()
                    )));
                }
                let mut f = [0usize; 3];
                for (k, tok) in rest.iter().enumerate() {
                    let idx: i64 = tok
                        .parse()
                        .map_err(|e| err(format!("bad face index `{tok}`: {e}")))?;
                    if idx < 1 {
                        return Err(err(format!(
                            "face index {idx} must be a positive 1-based index"
                        )));
                    }
                    f[k] = (idx - 1) as usize;
                }
                faces.push(f);
                face_lines.push(line);
            }
            other => return Err(err(format!("unsupported record `{other}`"))),
        }
    }
    TriMesh::new(vertices, faces).map_err(|e| match e {
        MeshError::IndexOutOfRange { face, .. }
        | MeshError::RepeatedIndex { face, .. }
        | MeshError::DegenerateFace { face, .. } => MeshError::AtLine {
            line: face_lines[face],
            source: Box::new(e),
        },
        other => other,
    })
}

pub fn load_obj(path: impl AsRef<Path>) -> Result<TriMesh, MeshError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| MeshError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_obj(&text)
}

/// OBJ text with 17 significant digits per coordinate.
pub fn format_obj(mesh: &TriMesh) -> String {
    let mut out = String::with_capacity(64 * (mesh.vertex_count() + mesh.face_count()));
    for v in mesh.vertices() {
        let _ = writeln!(out, "v {:.16e} {:.16e} {:.16e}", v[0], v[1], v[2]);
    }
    for f in mesh.faces() {
        let _ = writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    out
}

pub fn save_obj(mesh: &TriMesh, path: impl AsRef<Path>) -> Result<(), MeshError> {
    let path = path.as_ref();
    std::fs::write(path, format_obj(mesh)).map_err(|source| MeshError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Regular icosahedron with circumradius 1, centered at the origin.
pub fn icosahedron() -> TriMesh {
    let phi = (1.0 + 5f64.sqrt()) / 2.0;
    let s = 1.0 / (1.0 + phi * phi).sqrt();
    let (a, b) = (s, phi * s);
    let vertices = vec![
        [-a, b, 0.0],
        [a, b, 0.0],
        [-a, -b, 0.0],
        [a, -b, 0.0],
        [0.0, -a, b],
        [0.0, a, b],
        [0.0, -a, -b],
        [0.0, a, -b],
        [b, 0.0, -a],
        [b, 0.0, a],
        [-b, 0.0, -a],
        [-b, 0.0, a],
    ];
    let faces = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    TriMesh::new(vertices, faces).expect("icosahedron is valid")
}
