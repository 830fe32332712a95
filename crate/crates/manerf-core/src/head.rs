//! Synthetic blendshape head model.
//!
//! Stands in for a scanned morphable model: a subdivided icosphere scaled to
//! head proportions, with identity and expression bases made of smooth
//! localized bumps, per-vertex semantic labels partitioning the sphere into
//! angular bands, and learnable per-vertex latent codes.
//!
//! Vertices follow the linear blendshape rule
//! `V(beta, psi) = base + identity_basis . beta + expression_basis . psi`,
//! and per-vertex displacement to the canonical (neutral) expression is
//! `V(beta, 0) - V(beta, psi)`.

use alloc::vec;
use alloc::vec::Vec;

use crate::rng::{self, Stream};
use crate::tensor::Tensor;

/// Expression blend weights (dimensionless; the generator keeps |psi_j| <= 1).
#[derive(Clone, Debug, PartialEq)]
pub struct ExpressionParams(pub Vec<f64>);

impl ExpressionParams {
    pub fn zero(de: usize) -> Self {
        ExpressionParams(vec![0.0; de])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Generation settings; all sizes are exposed so scenes can be scaled up.
#[derive(Clone, Debug)]
pub struct HeadGenConfig {
    /// Icosphere subdivision level; vertex count is `10 * 4^level + 2`.
    pub subdivisions: usize,
    /// Identity basis size.
    pub di: usize,
    /// Expression basis size.
    pub de: usize,
    /// Number of semantic classes.
    pub classes: usize,
    /// Latent code dimension.
    pub dz: usize,
    /// Per-axis half-extents of the head (meters).
    pub proportions: [f64; 3],
    /// Amplitude / angular width of identity bumps.
    pub identity_amplitude: f64,
    pub identity_width: f64,
    /// Amplitude / angular width of expression bumps.
    pub expression_amplitude: f64,
    pub expression_width: f64,
    /// Standard deviation of the latent code initialization.
    pub latent_scale: f64,
}

impl Default for HeadGenConfig {
    fn default() -> Self {
        HeadGenConfig {
            subdivisions: 3,
            di: 4,
            de: 8,
            classes: 6,
            dz: 8,
            proportions: [0.40, 0.50, 0.45],
            identity_amplitude: 0.05,
            identity_width: 0.6,
            expression_amplitude: 0.08,
            expression_width: 0.35,
            latent_scale: 0.01,
        }
    }
}

/// Blendshape mesh plus per-vertex semantics and latent codes.
#[derive(Clone, Debug)]
pub struct HeadModel {
    /// `[nv, 3]` rest vertices at neutral expression and zero identity.
    pub base_vertices: Tensor,
    /// `[nv, 3, di]`.
    pub identity_basis: Tensor,
    /// `[nv, 3, de]`.
    pub expression_basis: Tensor,
    /// Per-vertex class in `[0, classes)`.
    pub semantic_labels: Vec<u32>,
    pub classes: usize,
    /// `[nv, dz]`, requires_grad; the trainable per-vertex codes.
    pub latent_codes: Tensor,
}

impl HeadModel {
    pub fn vertex_count(&self) -> usize {
        self.base_vertices.shape[0]
    }

    pub fn di(&self) -> usize {
        self.identity_basis.shape[2]
    }

    pub fn de(&self) -> usize {
        self.expression_basis.shape[2]
    }

    pub fn dz(&self) -> usize {
        self.latent_codes.shape[1]
    }

    /// Blendshape vertices for the given parameters, `[nv * 3]` row-major.
    pub fn vertices(&self, beta: &[f64], psi: &ExpressionParams) -> Vec<f64> {
        assert_eq!(beta.len(), self.di(), "identity parameter length");
        assert_eq!(psi.len(), self.de(), "expression parameter length");
        let nv = self.vertex_count();
        let (di, de) = (self.di(), self.de());
        let mut out = self.base_vertices.data.clone();
        let idb = &self.identity_basis.data;
        let exb = &self.expression_basis.data;
        for vc in 0..nv * 3 {
            let mut acc = 0.0;
            let id_row = &idb[vc * di..(vc + 1) * di];
            for (b, w) in beta.iter().zip(id_row) {
                acc += b * w;
            }
            let ex_row = &exb[vc * de..(vc + 1) * de];
            for (p, w) in psi.0.iter().zip(ex_row) {
                acc += p * w;
            }
            out[vc] += acc;
        }
        out
    }

    /// Per-vertex displacement from the expressed pose back to the canonical
    /// (neutral) one: `V(beta, 0) - V(beta, psi)`.
    pub fn displacement(&self, beta: &[f64], psi: &ExpressionParams) -> Vec<f64> {
        let canonical = self.vertices(beta, &ExpressionParams::zero(self.de()));
        let expressed = self.vertices(beta, psi);
        canonical.iter().zip(&expressed).map(|(c, e)| c - e).collect()
    }

    /// `[nv, classes]` one-hot semantic matrix.
    pub fn semantic_one_hot(&self) -> Tensor {
        let nv = self.vertex_count();
        let s = self.classes;
        let mut data = vec![0.0; nv * s];
        for (v, &label) in self.semantic_labels.iter().enumerate() {
            assert!((label as usize) < s, "semantic label {label} out of range [0, {s})");
            data[v * s + label as usize] = 1.0;
        }
        Tensor::from_vec(data, &[nv, s])
    }

    /// Axis-aligned bounding box of the canonical (neutral, given beta) mesh.
    pub fn canonical_bounds(&self, beta: &[f64]) -> ([f64; 3], [f64; 3]) {
        let verts = self.vertices(beta, &ExpressionParams::zero(self.de()));
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for v in verts.chunks_exact(3) {
            for c in 0..3 {
                lo[c] = lo[c].min(v[c]);
                hi[c] = hi[c].max(v[c]);
            }
        }
        (lo, hi)
    }
}

/// Unit icosphere by repeated subdivision of an icosahedron.
/// Returns `[nv * 3]` unit vectors; vertex order is deterministic.
pub fn icosphere(subdivisions: usize) -> Vec<f64> {
    let phi = (1.0 + crate::fmath::sqrt(5.0)) / 2.0;
    let mut verts: Vec<[f64; 3]> = vec![
        [-1.0, phi, 0.0],
        [1.0, phi, 0.0],
        [-1.0, -phi, 0.0],
        [1.0, -phi, 0.0],
        [0.0, -1.0, phi],
        [0.0, 1.0, phi],
        [0.0, -1.0, -phi],
        [0.0, 1.0, -phi],
        [phi, 0.0, -1.0],
        [phi, 0.0, 1.0],
        [-phi, 0.0, -1.0],
        [-phi, 0.0, 1.0],
    ];
    for v in verts.iter_mut() {
        normalize(v);
    }
    let mut faces: Vec<[usize; 3]> = vec![
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

    use alloc::collections::BTreeMap;
    for _ in 0..subdivisions {
        let mut midpoint: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        let mut next_faces = Vec::with_capacity(faces.len() * 4);
        for f in &faces {
            let mut mids = [0usize; 3];
            for e in 0..3 {
                let (a, b) = (f[e], f[(e + 1) % 3]);
                let key = (a.min(b), a.max(b));
                mids[e] = *midpoint.entry(key).or_insert_with(|| {
                    let mut m = [
                        (verts[a][0] + verts[b][0]) / 2.0,
                        (verts[a][1] + verts[b][1]) / 2.0,
                        (verts[a][2] + verts[b][2]) / 2.0,
                    ];
                    normalize(&mut m);
                    verts.push(m);
                    verts.len() - 1
                });
            }
            next_faces.push([f[0], mids[0], mids[2]]);
            next_faces.push([f[1], mids[1], mids[0]]);
            next_faces.push([f[2], mids[2], mids[1]]);
            next_faces.push([mids[0], mids[1], mids[2]]);
        }
        faces = next_faces;
    }

    let mut out = Vec::with_capacity(verts.len() * 3);
    for v in &verts {
        out.extend_from_slice(v);
    }
    out
}

fn normalize(v: &mut [f64; 3]) {
    let n = crate::fmath::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
    v[0] /= n;
    v[1] /= n;
    v[2] /= n;
}

/// Deterministic synthetic head; identical seeds produce bitwise-identical
/// models.
pub fn generate_synthetic_head(seed: u64, cfg: &HeadGenConfig) -> HeadModel {
    assert!(cfg.di > 0 && cfg.de > 0 && cfg.classes >= 2 && cfg.dz > 0, "head sizes must be positive");
    let unit = icosphere(cfg.subdivisions);
    let nv = unit.len() / 3;
    assert!(nv >= 4);

    let mut base = vec![0.0; nv * 3];
    for v in 0..nv {
        for c in 0..3 {
            base[v * 3 + c] = unit[v * 3 + c] * cfg.proportions[c];
        }
    }

    let mut rng = rng::stream_rng(seed, Stream::HeadModel, 0);

    // Bump basis: column k displaces vertices along their outward normal with
    // a Gaussian falloff (chord distance on the unit sphere) around a center
    // vertex. Distinct centers make the columns linearly independent.
    let mut make_basis = |count: usize, amplitude: f64, width: f64| -> Tensor {
        let mut centers: Vec<usize> = Vec::with_capacity(count);
        while centers.len() < count {
            let c = rng::index(&mut rng, nv);
            if !centers.contains(&c) {
                centers.push(c);
            }
        }
        let mut data = vec![0.0; nv * 3 * count];
        for (k, &cv) in centers.iter().enumerate() {
            let center = &unit[cv * 3..cv * 3 + 3];
            for v in 0..nv {
                let p = &unit[v * 3..v * 3 + 3];
                let d2 = (p[0] - center[0]) * (p[0] - center[0])
                    + (p[1] - center[1]) * (p[1] - center[1])
                    + (p[2] - center[2]) * (p[2] - center[2]);
                let w = amplitude * crate::fmath::exp(-d2 / (2.0 * width * width));
                for c in 0..3 {
                    data[(v * 3 + c) * count + k] = w * p[c];
                }
            }
        }
        Tensor::from_vec(data, &[nv, 3, count])
    };

    let identity_basis = make_basis(cfg.di, cfg.identity_amplitude, cfg.identity_width);
    let expression_basis = make_basis(cfg.de, cfg.expression_amplitude, cfg.expression_width);

    // Angular bands in z partition the sphere into `classes` regions.
    let mut semantic_labels = Vec::with_capacity(nv);
    for v in 0..nv {
        let t = (1.0 - unit[v * 3 + 2]) / 2.0;
        let class = ((t * cfg.classes as f64) as u32).min(cfg.classes as u32 - 1);
        semantic_labels.push(class);
    }
    let mut counts = vec![0usize; cfg.classes];
    for &l in &semantic_labels {
        counts[l as usize] += 1;
    }
    assert!(
        counts.iter().all(|&c| c > 0),
        "semantic class empty at level {}: {:?}",
        cfg.subdivisions,
        counts
    );

    let latent_codes = Tensor::normal(&[nv, cfg.dz], cfg.latent_scale, &mut rng).with_grad();

    HeadModel {
        base_vertices: Tensor::from_vec(base, &[nv, 3]),
        identity_basis,
        expression_basis,
        semantic_labels,
        classes: cfg.classes,
        latent_codes,
    }
}
