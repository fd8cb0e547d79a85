//! Procedural articulated tubes ("worms"): a template per identity and posed
//! variations driven by per-joint bend and twist angles.
//!
//! Rings of vertices sit along a straight spine on the x axis, with a cap
//! apex at each end. Vertex 0 is the root apex; the root ring never moves, so
//! vertex 0 keeps its template position in every pose. Joints sit at the
//! interior rings. Because every identity shares the same pose parameters,
//! posing a second identity with the same angles gives the exact transfer
//! target for a pose extracted from the first.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::kv::{KvError, KvMap};
use crate::mesh::{MeshError, TriMesh, Vec3};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid worm spec: {0}")]
    InvalidSpec(String),
    #[error("invalid pose: {0}")]
    InvalidPose(String),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Kv(#[from] KvError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct WormSpec {
    /// Number of vertex rings along the spine.
    pub segments: usize,
    pub ring_resolution: usize,
    pub length: f64,
    /// One radius per ring.
    pub radii: Vec<f64>,
    /// Per-axis identity scale applied to the rest shape.
    pub scale: [f64; 3],
}

impl WormSpec {
    pub fn uniform(segments: usize, ring_resolution: usize, length: f64, radius: f64) -> Self {
        Self {
            segments,
            ring_resolution,
            length,
            radii: vec![radius; segments],
            scale: [1.0; 3],
        }
    }

    /// The reference identity: 20 rings of 10 vertices (400 faces), gently
    /// tapered towards the tip.
    pub fn identity_a() -> Self {
        let segments = 20;
        let radii = (0..segments)
            .map(|i| 0.32 - 0.1 * i as f64 / (segments - 1) as f64)
            .collect();
        Self {
            segments,
            ring_resolution: 10,
            length: 4.0,
            radii,
            scale: [1.0; 3],
        }
    }

    /// A second identity with the same spine: thicker, with a bulge in the
    /// middle instead of a taper.
    pub fn identity_b() -> Self {
        let segments = 20;
        let radii = (0..segments)
            .map(|i| {
                let s = i as f64 / (segments - 1) as f64;
                0.26 + 0.08 * (PI * s).sin()
            })
            .collect();
        Self {
            segments,
            ring_resolution: 10,
            length: 4.0,
            radii,
            scale: [1.0, 1.3, 1.3],
        }
    }

    pub fn joint_count(&self) -> usize {
        self.segments.saturating_sub(2)
    }

    pub fn vertex_count(&self) -> usize {
        self.segments * self.ring_resolution + 2
    }

    pub fn face_count(&self) -> usize {
        2 * self.ring_resolution * self.segments
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidSpec(m));
        if self.segments < 3 {
            return bad(format!("segments must be >= 3, got {}", self.segments));
        }
        if self.ring_resolution < 6 {
            return bad(format!(
                "ring resolution must be >= 6, got {}",
                self.ring_resolution
            ));
        }
        if !(self.length > 0.0 && self.length.is_finite()) {
            return bad(format!("length must be positive, got {}", self.length));
        }
        if self.radii.len() != self.segments {
            return bad(format!(
                "{} radii for {} segments",
                self.radii.len(),
                self.segments
            ));
        }
        if self.radii.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
            return bad("radii must be positive".into());
        }
        if self.scale.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return bad("scale factors must be positive".into());
        }
        Ok(())
    }

    /// Parses `segments`, `ring`, `length`, `radius` (one value or one per
    /// ring, comma-separated) and optional `scale` (three values).
    pub fn from_kv(map: &KvMap) -> Result<Self, SynthError> {
        map.check_keys(&["segments", "ring", "length", "radius", "scale"])?;
        let segments: usize = map.parse("segments")?;
        let ring_resolution: usize = map.parse("ring")?;
        let length: f64 = map.parse("length")?;
        let radii: Vec<f64> = map.parse_list("radius")?;
        let radii = match radii.len() {
            1 => vec![radii[0]; segments],
            _ => radii,
        };
        let scale = match map.get("scale") {
            Some(_) => {
                let s: Vec<f64> = map.parse_list("scale")?;
                if s.len() != 3 {
                    return Err(SynthError::InvalidSpec("scale needs three values".into()));
                }
                [s[0], s[1], s[2]]
            }
            None => [1.0; 3],
        };
        let spec = Self {
            segments,
            ring_resolution,
            length,
            radii,
            scale,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_kv_text(&self) -> String {
        let join = |v: &[f64]| {
            v.iter()
                .map(|x| format!("{x:?}"))
                .collect::<Vec<_>>()
                .join(",")
        };
        format!(
            "segments={}\nring={}\nlength={:?}\nradius={}\nscale={}\n",
            self.segments,
            self.ring_resolution,
            self.length,
            join(&self.radii),
            join(&self.scale)
        )
    }

    fn rest_ring_center(&self, i: usize) -> Vec3 {
        let x = self.length * i as f64 / (self.segments - 1) as f64;
        [x * self.scale[0], 0.0, 0.0]
    }

    fn rest_vertices(&self) -> Vec<Vec3> {
        let r = self.ring_resolution;
        let mut v = Vec::with_capacity(self.vertex_count());
        let [sx, sy, sz] = self.scale;
        v.push([-0.5 * self.radii[0] * sx, 0.0, 0.0]);
        for i in 0..self.segments {
            let x = self.length * i as f64 / (self.segments - 1) as f64;
            for j in 0..r {
                let theta = 2.0 * PI * j as f64 / r as f64;
                let rad = self.radii[i];
                v.push([x * sx, rad * theta.cos() * sy, rad * theta.sin() * sz]);
            }
        }
        let last = self.segments - 1;
        v.push([(self.length + 0.5 * self.radii[last]) * sx, 0.0, 0.0]);
        v
    }

    fn faces(&self) -> Vec<[usize; 3]> {
        let r = self.ring_resolution;
        let ring = |i: usize, j: usize| 1 + i * r + (j % r);
        let tip = self.vertex_count() - 1;
        let mut f = Vec::with_capacity(self.face_count());
        for j in 0..r {
            f.push([0, ring(0, j + 1), ring(0, j)]);
        }
        for i in 0..self.segments - 1 {
            for j in 0..r {
                let (a, b, c, d) = (
                    ring(i, j),
                    ring(i, j + 1),
                    ring(i + 1, j),
                    ring(i + 1, j + 1),
                );
                f.push([a, b, d]);
                f.push([a, d, c]);
            }
        }
        for j in 0..r {
            f.push([
                tip,
                ring(self.segments - 1, j),
                ring(self.segments - 1, j + 1),
            ]);
        }
        f
    }
}

/// Bend (about the local z axis) and twist (about the local spine axis) per
/// joint, in radians.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseParams {
    pub bend: Vec<f64>,
    pub twist: Vec<f64>,
}

impl PoseParams {
    pub fn zero(joints: usize) -> Self {
        Self {
            bend: vec![0.0; joints],
            twist: vec![0.0; joints],
        }
    }

    pub fn is_zero(&self) -> bool {
        self.bend.iter().chain(&self.twist).all(|&a| a == 0.0)
    }

    pub fn validate(&self, joints: usize) -> Result<(), SynthError> {
        if self.bend.len() != joints || self.twist.len() != joints {
            return Err(SynthError::InvalidPose(format!(
                "expected {joints} joints, got {} bends and {} twists",
                self.bend.len(),
                self.twist.len()
            )));
        }
        if self.bend.iter().chain(&self.twist).any(|a| !a.is_finite()) {
            return Err(SynthError::InvalidPose("non-finite angle".into()));
        }
        Ok(())
    }
}

type Mat = [[f64; 3]; 3];

fn matmul(a: &Mat, b: &Mat) -> Mat {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

fn apply(m: &Mat, v: Vec3) -> Vec3 {
    [0, 1, 2].map(|i| m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2])
}

fn rot_z(a: f64) -> Mat {
    let (s, c) = a.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

fn rot_x(a: f64) -> Mat {
    let (s, c) = a.sin_cos();
    [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
}

const I3: Mat = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

pub fn gen_template(spec: &WormSpec) -> Result<TriMesh, SynthError> {
    spec.validate()?;
    Ok(TriMesh::new(spec.rest_vertices(), spec.faces())?)
}

/// Poses the template: each ring moves rigidly with its joint frame. A ring
/// at a joint takes the half-way rotation between its incoming and outgoing
/// segments.
pub fn gen_pose(spec: &WormSpec, pose: &PoseParams) -> Result<TriMesh, SynthError> {
    spec.validate()?;
    pose.validate(spec.joint_count())?;
    let rest = spec.rest_vertices();
    if pose.is_zero() {
        return Ok(TriMesh::new(rest, spec.faces())?);
    }
    let s = spec.segments;
    let r = spec.ring_resolution;
    // ring orientation and posed spine point per ring
    let mut ring_rot = vec![I3; s];
    let mut center = vec![[0.0; 3]; s];
    center[0] = spec.rest_ring_center(0);
    let mut seg = I3;
    for i in 1..s {
        let step = {
            let (a, b) = (spec.rest_ring_center(i - 1), spec.rest_ring_center(i));
            [b[0] - a[0], b[1] - a[1], b[2] - a[2]]
        };
        let d = apply(&seg, step);
        center[i] = [
            center[i - 1][0] + d[0],
            center[i - 1][1] + d[1],
            center[i - 1][2] + d[2],
        ];
        if i < s - 1 {
            let (bend, twist) = (pose.bend[i - 1], pose.twist[i - 1]);
            ring_rot[i] = matmul(&seg, &matmul(&rot_x(0.5 * twist), &rot_z(0.5 * bend)));
            seg = matmul(&seg, &matmul(&rot_x(twist), &rot_z(bend)));
        } else {
            ring_rot[i] = seg;
        }
    }
    let place = |ring: usize, v: Vec3| {
        let c0 = spec.rest_ring_center(ring);
        let local = [v[0] - c0[0], v[1] - c0[1], v[2] - c0[2]];
        let w = apply(&ring_rot[ring], local);
        [
            center[ring][0] + w[0],
            center[ring][1] + w[1],
            center[ring][2] + w[2],
        ]
    };
    let mut out = Vec::with_capacity(rest.len());
    out.push(rest[0]);
    for i in 0..s {
        for j in 0..r {
            out.push(place(i, rest[1 + i * r + j]));
        }
    }
    out.push(place(s - 1, rest[rest.len() - 1]));
    Ok(TriMesh::new(out, spec.faces())?)
}

/// Uniform angle ranges for random poses. `joints` lists the joints that get
/// random angles; the others stay straight. `None` means every joint.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSampler {
    pub bend_max: f64,
    pub twist_max: f64,
    pub joints: Option<Vec<usize>>,
}

impl Default for PoseSampler {
    fn default() -> Self {
        Self {
            bend_max: 60f64.to_radians(),
            twist_max: 30f64.to_radians(),
            joints: None,
        }
    }
}

impl PoseSampler {
    pub fn sample(&self, joints: usize, rng: &mut impl Rng) -> PoseParams {
        let mut p = PoseParams::zero(joints);
        let active: Vec<usize> = match &self.joints {
            Some(j) => j.iter().copied().filter(|&j| j < joints).collect(),
            None => (0..joints).collect(),
        };
        for j in active {
            p.bend[j] = rng.random_range(-self.bend_max..=self.bend_max);
            p.twist[j] = rng.random_range(-self.twist_max..=self.twist_max);
        }
        p
    }
}

pub fn gen_dataset(
    spec: &WormSpec,
    n: usize,
    seed: u64,
    sampler: &PoseSampler,
) -> Result<Vec<(TriMesh, PoseParams)>, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let p = sampler.sample(spec.joint_count(), &mut rng);
            Ok((gen_pose(spec, &p)?, p))
        })
        .collect()
}

/// One manifest line per pose: file name, then the bend and twist angles.
pub fn manifest_text(entries: &[(String, PoseParams)]) -> String {
    let mut out = String::from("# file bend[0..J] twist[0..J] (radians)\n");
    for (name, p) in entries {
        let _ = write!(out, "{name}");
        for a in p.bend.iter().chain(&p.twist) {
            let _ = write!(out, " {a:.17e}");
        }
        out.push('\n');
    }
    out
}

/// Inverse of [`manifest_text`].
pub fn parse_manifest(text: &str, joints: usize) -> Result<Vec<(String, PoseParams)>, SynthError> {
    let mut out = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let name = parts.next().unwrap_or_default().to_string();
        let angles: Vec<f64> = parts
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|e| SynthError::InvalidPose(format!("{name}: {e}")))?;
        if angles.len() != 2 * joints {
            return Err(SynthError::InvalidPose(format!(
                "{name}: expected {} angles, got {}",
                2 * joints,
                angles.len()
            )));
        }
        out.push((
            name,
            PoseParams {
                bend: angles[..joints].to_vec(),
                twist: angles[joints..].to_vec(),
            },
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::norm;

    #[test]
    fn small_counts_and_euler() {
        let spec = WormSpec::uniform(3, 6, 2.0, 0.3);
        let m = gen_template(&spec).unwrap();
        assert_eq!(m.vertex_count(), 20);
        assert_eq!(m.face_count(), 36);
        let e = m.edge_set().len();
        assert_eq!(
            m.vertex_count() as i64 - e as i64 + m.face_count() as i64,
            2
        );
        assert_eq!(2 * e, 3 * m.face_count());
        assert_eq!(m.component_count(), 1);
    }

    #[test]
    fn scale_doubles_extent() {
        let spec = WormSpec::uniform(5, 8, 2.0, 0.3);
        let mut wide = spec.clone();
        wide.scale[0] = 2.0;
        let extent = |m: &TriMesh| {
            let xs = m.vertices().iter().map(|v| v[0]);
            xs.clone().fold(f64::MIN, f64::max) - xs.fold(f64::MAX, f64::min)
        };
        let (a, b) = (gen_template(&spec).unwrap(), gen_template(&wide).unwrap());
        assert!((extent(&b) - 2.0 * extent(&a)).abs() < 1e-12);
    }

    #[test]
    fn invalid_specs() {
        assert!(gen_template(&WormSpec::uniform(2, 6, 1.0, 0.1)).is_err());
        assert!(gen_template(&WormSpec::uniform(3, 5, 1.0, 0.1)).is_err());
        assert!(gen_template(&WormSpec::uniform(3, 6, 1.0, -0.1)).is_err());
        let spec = WormSpec::uniform(4, 6, 1.0, 0.1);
        assert!(gen_pose(&spec, &PoseParams::zero(3)).is_err());
    }

    #[test]
    fn zero_pose_is_template() {
        let spec = WormSpec::identity_a();
        let t = gen_template(&spec).unwrap();
        let p = gen_pose(&spec, &PoseParams::zero(spec.joint_count())).unwrap();
        assert_eq!(t, p);
    }

    #[test]
    fn right_angle_bend() {
        let spec = WormSpec::uniform(3, 8, 2.0, 0.2);
        let mut pose = PoseParams::zero(1);
        pose.bend[0] = PI / 2.0;
        let m = gen_pose(&spec, &pose).unwrap();
        let ring_centroid = |i: usize| {
            let pts = &m.vertices()[1 + 8 * i..1 + 8 * (i + 1)];
            let mut c = [0.0; 3];
            for p in pts {
                for k in 0..3 {
                    c[k] += p[k] / 8.0;
                }
            }
            c
        };
        let (c0, c1, c2) = (ring_centroid(0), ring_centroid(1), ring_centroid(2));
        let d1 = [c1[0] - c0[0], c1[1] - c0[1], c1[2] - c0[2]];
        let d2 = [c2[0] - c1[0], c2[1] - c1[1], c2[2] - c1[2]];
        let cos = crate::mesh::dot(d1, d2) / (norm(d1) * norm(d2));
        assert!(cos.abs() < 1e-12, "cos = {cos}");
    }

    #[test]
    fn rings_move_rigidly() {
        let spec = WormSpec::identity_a();
        let data = gen_dataset(&spec, 3, 7, &PoseSampler::default()).unwrap();
        let t = gen_template(&spec).unwrap();
        let r = spec.ring_resolution;
        for (m, _) in &data {
            assert!(m.same_connectivity(&t));
            assert_eq!(m.vertices()[0], t.vertices()[0]);
            for i in 0..spec.segments {
                for a in 0..r {
                    for b in a + 1..r {
                        let (ia, ib) = (1 + i * r + a, 1 + i * r + b);
                        let d0 = norm(crate::mesh::sub(t.vertices()[ia], t.vertices()[ib]));
                        let d1 = norm(crate::mesh::sub(m.vertices()[ia], m.vertices()[ib]));
                        assert!((d0 - d1).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn dataset_deterministic_and_manifest_round_trip() {
        let spec = WormSpec::identity_a();
        let a = gen_dataset(&spec, 4, 11, &PoseSampler::default()).unwrap();
        let b = gen_dataset(&spec, 4, 11, &PoseSampler::default()).unwrap();
        assert_eq!(a, b);
        let entries: Vec<(String, PoseParams)> = a
            .iter()
            .enumerate()
            .map(|(i, (_, p))| (format!("pose_{i}.obj"), p.clone()))
            .collect();
        let back = parse_manifest(&manifest_text(&entries), spec.joint_count()).unwrap();
        assert_eq!(back, entries);
        let max = PoseSampler::default();
        for (_, p) in &a {
            assert!(p.bend.iter().all(|x| x.abs() <= max.bend_max));
            assert!(p.twist.iter().all(|x| x.abs() <= max.twist_max));
        }
    }

    #[test]
    fn spec_text_round_trip() {
        let spec = WormSpec::identity_b();
        let map = KvMap::from_text(&spec.to_kv_text()).unwrap();
        assert_eq!(WormSpec::from_kv(&map).unwrap(), spec);
    }
}
