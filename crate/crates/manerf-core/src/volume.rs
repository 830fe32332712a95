//! Structured deformation-feature volume.
//!
//! Per-vertex features (displacement to canonical, shared expression vector,
//! semantic one-hot, latent code) are anchored into a sparse voxel grid at the
//! canonical vertex positions, diffused by a two-layer submanifold sparse
//! convolution, and queried continuously by trilinear interpolation over
//! voxel centers. Unoccupied corners contribute zero with their trilinear
//! weight retained, so features fade to zero at the boundary instead of
//! extrapolating; queries outside the grid return zero.

use alloc::collections::BTreeMap;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::fmath;
use crate::head::{ExpressionParams, HeadModel};
use crate::tensor::tape::{ConvMap, ConvPair, GatherEntry, GatherMap, ScatterMap, Tape, Var};
use crate::tensor::{ParamSet, Tensor};

pub const KERNEL_TAPS: usize = 27;

/// Channel widths of the diffusion network.
#[derive(Clone, Copy, Debug)]
pub struct VolumeConfig {
    pub voxel_size: f64,
    pub hidden_channels: usize,
    pub out_channels: usize,
    /// Grid bounds = canonical mesh bounding box padded by this many voxels.
    pub padding_voxels: usize,
}

impl Default for VolumeConfig {
    fn default() -> Self {
        VolumeConfig { voxel_size: 0.05, hidden_channels: 32, out_channels: 16, padding_voxels: 2 }
    }
}

/// Which anchored feature channels to zero out (ablation switches).
#[derive(Clone, Copy, Debug, Default)]
pub struct ChannelAblation {
    pub zero_displacement: bool,
    pub zero_expression: bool,
    pub zero_semantic: bool,
}

/// Static grid structure: occupancy, vertex binning, and convolution
/// neighbor pairs. Depends only on the canonical mesh, so one geometry is
/// shared by every frame of a scene.
#[derive(Clone, Debug)]
pub struct GridGeometry {
    pub origin: [f64; 3],
    pub voxel_size: f64,
    pub extents: [usize; 3],
    /// Occupied voxel coordinates, sorted; row `i` of a feature matrix
    /// corresponds to `occupied[i]`.
    pub occupied: Vec<[i32; 3]>,
    /// Dense coordinate -> occupied-row lookup (-1 when empty).
    index: Vec<i32>,
    /// Vertex -> voxel averaging map.
    pub scatter: Arc<ScatterMap>,
    /// Submanifold 3x3x3 neighbor pairs.
    pub conv: Arc<ConvMap>,
}

impl GridGeometry {
    /// Bin the canonical-pose vertices of a head into voxels.
    pub fn build(head: &HeadModel, beta: &[f64], cfg: &VolumeConfig) -> Self {
        assert!(cfg.voxel_size > 0.0, "voxel_size must be positive");
        let verts = head.vertices(beta, &ExpressionParams::zero(head.de()));
        let (lo, hi) = head.canonical_bounds(beta);
        assert!(
            (0..3).all(|c| hi[c] - lo[c] > 0.0),
            "degenerate mesh: zero bounding box {lo:?} {hi:?}"
        );
        Self::from_points(&verts, lo, hi, cfg)
    }

    /// Grid over explicit points (the binning core, also used by tests).
    pub fn from_points(points: &[f64], lo: [f64; 3], hi: [f64; 3], cfg: &VolumeConfig) -> Self {
        let vs = cfg.voxel_size;
        let pad = cfg.padding_voxels as f64;
        let origin = [lo[0] - pad * vs, lo[1] - pad * vs, lo[2] - pad * vs];
        let mut extents = [0usize; 3];
        for c in 0..3 {
            extents[c] = (fmath::floor((hi[c] - origin[c]) / vs) as usize) + 1 + cfg.padding_voxels;
        }

        let mut cells: BTreeMap<[i32; 3], Vec<u32>> = BTreeMap::new();
        for (v, p) in points.chunks_exact(3).enumerate() {
            let coord = [
                fmath::floor((p[0] - origin[0]) / vs) as i32,
                fmath::floor((p[1] - origin[1]) / vs) as i32,
                fmath::floor((p[2] - origin[2]) / vs) as i32,
            ];
            for c in 0..3 {
                assert!(
                    coord[c] >= 0 && (coord[c] as usize) < extents[c],
                    "vertex {v} escapes the grid"
                );
            }
            cells.entry(coord).or_default().push(v as u32);
        }
        Self::from_cells(origin, vs, extents, cells)
    }

    /// Assemble a geometry from an explicit occupancy map.
    pub fn from_cells(
        origin: [f64; 3],
        voxel_size: f64,
        extents: [usize; 3],
        cells: BTreeMap<[i32; 3], Vec<u32>>,
    ) -> Self {
        let occupied: Vec<[i32; 3]> = cells.keys().copied().collect();
        let mut index = vec![-1i32; extents[0] * extents[1] * extents[2]];
        for (row, coord) in occupied.iter().enumerate() {
            let flat = ((coord[0] as usize) * extents[1] + coord[1] as usize) * extents[2]
                + coord[2] as usize;
            index[flat] = row as i32;
        }

        let mut starts = Vec::with_capacity(occupied.len() + 1);
        let mut members = Vec::new();
        starts.push(0u32);
        for coord in &occupied {
            members.extend_from_slice(&cells[coord]);
            starts.push(members.len() as u32);
        }
        let scatter = Arc::new(ScatterMap { n_out: occupied.len(), starts, members });

        let lookup = |coord: [i32; 3]| -> i32 {
            for c in 0..3 {
                if coord[c] < 0 || coord[c] as usize >= extents[c] {
                    return -1;
                }
            }
            index[((coord[0] as usize) * extents[1] + coord[1] as usize) * extents[2]
                + coord[2] as usize]
        };

        let mut pairs = Vec::new();
        for (row, coord) in occupied.iter().enumerate() {
            for ox in -1i32..=1 {
                for oy in -1i32..=1 {
                    for oz in -1i32..=1 {
                        let src = lookup([coord[0] + ox, coord[1] + oy, coord[2] + oz]);
                        if src >= 0 {
                            let tap = (((ox + 1) * 3 + (oy + 1)) * 3 + (oz + 1)) as u16;
                            pairs.push(ConvPair { out: row as u32, src: src as u32, tap });
                        }
                    }
                }
            }
        }
        let conv = Arc::new(ConvMap { n_taps: KERNEL_TAPS, pairs });

        GridGeometry { origin, voxel_size: voxel_size, extents, occupied, index, scatter, conv }
    }

    pub fn occupied_count(&self) -> usize {
        self.occupied.len()
    }

    /// Occupied-row index of the voxel containing integer coordinate, or -1.
    pub fn row_of(&self, coord: [i32; 3]) -> i32 {
        for c in 0..3 {
            if coord[c] < 0 || coord[c] as usize >= self.extents[c] {
                return -1;
            }
        }
        self.index[((coord[0] as usize) * self.extents[1] + coord[1] as usize) * self.extents[2]
            + coord[2] as usize]
    }

    pub fn voxel_center(&self, coord: [i32; 3]) -> [f64; 3] {
        [
            self.origin[0] + (coord[0] as f64 + 0.5) * self.voxel_size,
            self.origin[1] + (coord[1] as f64 + 0.5) * self.voxel_size,
            self.origin[2] + (coord[2] as f64 + 0.5) * self.voxel_size,
        ]
    }

    /// Trilinear gather entries for a flat `[n, 3]` point list. Unoccupied or
    /// out-of-grid corners are simply absent (zero contribution, weights not
    /// renormalized).
    pub fn gather_map(&self, points: &[f64]) -> GatherMap {
        assert_eq!(points.len() % 3, 0);
        let n = points.len() / 3;
        let mut entries = Vec::new();
        for (p, xyz) in points.chunks_exact(3).enumerate() {
            let mut base = [0i32; 3];
            let mut frac = [0.0f64; 3];
            for c in 0..3 {
                let u = (xyz[c] - self.origin[c]) / self.voxel_size - 0.5;
                let fl = fmath::floor(u);
                base[c] = fl as i32;
                frac[c] = u - fl;
            }
            for dx in 0..2i32 {
                let wx = if dx == 0 { 1.0 - frac[0] } else { frac[0] };
                for dy in 0..2i32 {
                    let wy = if dy == 0 { 1.0 - frac[1] } else { frac[1] };
                    for dz in 0..2i32 {
                        let wz = if dz == 0 { 1.0 - frac[2] } else { frac[2] };
                        let row = self.row_of([base[0] + dx, base[1] + dy, base[2] + dz]);
                        if row >= 0 {
                            let weight = wx * wy * wz;
                            if weight != 0.0 {
                                entries.push(GatherEntry {
                                    out: p as u32,
                                    src: row as u32,
                                    weight,
                                });
                            }
                        }
                    }
                }
            }
        }
        GatherMap { n_out: n, entries }
    }
}

/// A diffused (or raw) feature volume: geometry plus one feature row per
/// occupied voxel. Immutable after construction; safe to query concurrently.
#[derive(Clone, Debug)]
pub struct VoxelGrid {
    pub geometry: Arc<GridGeometry>,
    /// `[n_occupied, channels]`.
    pub features: Tensor,
}

impl VoxelGrid {
    pub fn channels(&self) -> usize {
        self.features.shape[1]
    }

    /// Trilinear feature lookup at a single point.
    pub fn query(&self, x: [f64; 3]) -> Vec<f64> {
        let map = self.geometry.gather_map(&x);
        let c = self.channels();
        let mut out = vec![0.0; c];
        for e in map.entries {
            let row = &self.features.data[e.src as usize * c..(e.src as usize + 1) * c];
            for (o, v) in out.iter_mut().zip(row) {
                *o += e.weight * v;
            }
        }
        out
    }
}

/// Anchored channel count: displacement(3) + expression + one-hot + latent.
pub fn anchored_channels(head: &HeadModel) -> usize {
    3 + head.de() + head.classes + head.dz()
}

/// The constant part of the per-vertex anchored features:
/// `[dv (3) | psi (de) | one_hot (classes)]`, with ablated channels zeroed.
/// The latent code block is appended on the tape so its gradient flows.
pub fn anchor_constant_features(
    head: &HeadModel,
    beta: &[f64],
    psi: &ExpressionParams,
    ablation: &ChannelAblation,
) -> Tensor {
    let nv = head.vertex_count();
    let de = head.de();
    let s = head.classes;
    let width = 3 + de + s;
    let dv = head.displacement(beta, psi);
    let one_hot = head.semantic_one_hot();
    let mut data = vec![0.0; nv * width];
    for v in 0..nv {
        let row = &mut data[v * width..(v + 1) * width];
        if !ablation.zero_displacement {
            row[..3].copy_from_slice(&dv[v * 3..(v + 1) * 3]);
        }
        if !ablation.zero_expression {
            row[3..3 + de].copy_from_slice(psi.as_slice());
        }
        if !ablation.zero_semantic {
            row[3 + de..].copy_from_slice(&one_hot.data[v * s..(v + 1) * s]);
        }
    }
    Tensor::from_vec(data, &[nv, width])
}

/// Parameter names of the diffusion network.
pub const CONV1_WEIGHT: &str = "volume.conv1.weight";
pub const CONV2_WEIGHT: &str = "volume.conv2.weight";
pub const CONV2_BIAS: &str = "volume.conv2.bias";

/// Initialize diffusion-network parameters into `params`. Layer 1 has no
/// bias; layer 2's bias starts at zero, so all-zero inputs propagate to
/// all-zero outputs at initialization.
pub fn init_conv_params(
    params: &mut ParamSet,
    in_channels: usize,
    cfg: &VolumeConfig,
    rng: &mut ChaCha8Rng,
) {
    let bound1 = 1.0 / fmath::sqrt((KERNEL_TAPS * in_channels) as f64);
    let bound2 = 1.0 / fmath::sqrt((KERNEL_TAPS * cfg.hidden_channels) as f64);
    params.insert(
        CONV1_WEIGHT,
        Tensor::uniform(&[KERNEL_TAPS, in_channels, cfg.hidden_channels], bound1, rng).with_grad(),
    );
    params.insert(
        CONV2_WEIGHT,
        Tensor::uniform(&[KERNEL_TAPS, cfg.hidden_channels, cfg.out_channels], bound2, rng)
            .with_grad(),
    );
    params.insert(CONV2_BIAS, Tensor::zeros(&[cfg.out_channels]).with_grad());
}

/// Record anchoring: concatenate the constant channels with the latent codes
/// and average vertices into their voxels. `latent` is `[nv, dz]`.
pub fn anchor(tape: &mut Tape, constant: &Tensor, latent: Var, geometry: &GridGeometry) -> Var {
    let c = tape.leaf(constant);
    let feats = tape.concat(&[c, latent], 1);
    tape.scatter_mean(feats, geometry.scatter.clone())
}

/// Record the two-layer submanifold diffusion over anchored features.
pub fn diffuse(
    tape: &mut Tape,
    anchored: Var,
    vars: &BTreeMap<alloc::string::String, Var>,
    geometry: &GridGeometry,
) -> Var {
    let h = tape.sparse_conv(anchored, vars[CONV1_WEIGHT], None, geometry.conv.clone());
    let h = tape.relu(h);
    tape.sparse_conv(h, vars[CONV2_WEIGHT], Some(vars[CONV2_BIAS]), geometry.conv.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::{generate_synthetic_head, HeadGenConfig};
    use crate::rng::{stream_rng, Stream};
    use crate::tensor::tape::Tape;
    use rand::Rng;

    fn test_head() -> HeadModel {
        generate_synthetic_head(3, &HeadGenConfig::default())
    }

    /// Minimal hand-built head: four vertices, two classes.
    fn tiny_head(verts: Vec<f64>) -> HeadModel {
        let nv = verts.len() / 3;
        HeadModel {
            base_vertices: Tensor::from_vec(verts, &[nv, 3]),
            identity_basis: Tensor::zeros(&[nv, 3, 1]),
            expression_basis: Tensor::from_vec(vec![0.01; nv * 3], &[nv, 3, 1]),
            semantic_labels: (0..nv as u32).map(|v| v % 2).collect(),
            classes: 2,
            latent_codes: Tensor::zeros(&[nv, 2]).with_grad(),
        }
    }

    #[test]
    fn cluster_occupies_single_voxel_at_padding_offset() {
        // All vertices inside one voxel starting at the bbox corner.
        let head = tiny_head(vec![
            0.001, 0.001, 0.001, 0.002, 0.002, 0.001, 0.003, 0.001, 0.002, 0.004, 0.004, 0.004,
        ]);
        let cfg = VolumeConfig { voxel_size: 0.05, ..VolumeConfig::default() };
        let geom = GridGeometry::build(&head, &[0.0], &cfg);
        assert_eq!(geom.occupied_count(), 1);
        // Two voxels of padding shift the corner cell to (2, 2, 2).
        assert_eq!(geom.occupied[0], [2, 2, 2]);
    }

    #[test]
    fn two_vertices_in_one_voxel_average_features() {
        let head = tiny_head(vec![
            0.001, 0.001, 0.001, 0.004, 0.004, 0.004, 0.101, 0.001, 0.001, 0.104, 0.004, 0.004,
        ]);
        let cfg = VolumeConfig { voxel_size: 0.05, ..VolumeConfig::default() };
        let geom = GridGeometry::build(&head, &[0.0], &cfg);
        assert_eq!(geom.occupied_count(), 2);

        // Scatter arbitrary feature rows a, b through the tape op.
        let mut tape = Tape::new();
        let x = tape.constant(
            vec![1.0, 2.0, 3.0, 4.0, 10.0, 20.0, 30.0, 40.0],
            &[4, 2],
        );
        let y = tape.scatter_mean(x, geom.scatter.clone());
        // Vertices 0,1 share voxel row 0; vertices 2,3 share row 1.
        assert_eq!(tape.data(y), &[(1.0 + 3.0) / 2.0, (2.0 + 4.0) / 2.0, 20.0, 30.0]);
    }

    #[test]
    fn occupancy_matches_brute_force_binning() {
        let head = test_head();
        let cfg = VolumeConfig::default();
        let geom = GridGeometry::build(&head, &[0.1, -0.2, 0.05, 0.3], &cfg);

        // Independent floor-division binning oracle.
        let verts = head.vertices(&[0.1, -0.2, 0.05, 0.3], &ExpressionParams::zero(8));
        let mut expect: alloc::collections::BTreeSet<[i32; 3]> = Default::default();
        for p in verts.chunks_exact(3) {
            expect.insert([
                fmath::floor((p[0] - geom.origin[0]) / cfg.voxel_size) as i32,
                fmath::floor((p[1] - geom.origin[1]) / cfg.voxel_size) as i32,
                fmath::floor((p[2] - geom.origin[2]) / cfg.voxel_size) as i32,
            ]);
        }
        let got: alloc::collections::BTreeSet<[i32; 3]> = geom.occupied.iter().copied().collect();
        assert_eq!(got, expect);
        assert_eq!(geom.occupied_count(), expect.len());
    }

    #[test]
    #[should_panic(expected = "degenerate mesh")]
    fn degenerate_mesh_is_rejected() {
        let head = tiny_head(vec![0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5]);
        let _ = GridGeometry::build(&head, &[0.0], &VolumeConfig::default());
    }

    fn diffusion_vars(
        tape: &mut Tape,
        in_channels: usize,
        cfg: &VolumeConfig,
        seed: u64,
    ) -> BTreeMap<alloc::string::String, Var> {
        let mut params = ParamSet::new();
        let mut rng = stream_rng(seed, Stream::Init, 0);
        init_conv_params(&mut params, in_channels, cfg, &mut rng);
        tape.register(&params)
    }

    #[test]
    fn zero_input_features_diffuse_to_zero_at_init() {
        let head = test_head();
        let cfg = VolumeConfig::default();
        let geom = GridGeometry::build(&head, &[0.0; 4], &cfg);
        let mut tape = Tape::new();
        let vars = diffusion_vars(&mut tape, 25, &cfg, 5);
        let x = tape.constant(vec![0.0; geom.occupied_count() * 25], &[geom.occupied_count(), 25]);
        let y = diffuse(&mut tape, x, &vars, &geom);
        assert!(tape.data(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_voxel_identity_kernel_hand_case() {
        // One occupied voxel: only the center tap contributes in both layers.
        let mut cells: BTreeMap<[i32; 3], Vec<u32>> = BTreeMap::new();
        cells.insert([1, 1, 1], vec![0]);
        let geom = GridGeometry::from_cells([0.0; 3], 0.1, [3, 3, 3], cells);
        assert_eq!(geom.conv.pairs.len(), 1);

        let c_in = 3;
        let mut params = ParamSet::new();
        // Layer 1: identity at the center tap (tap 13).
        let mut w1 = Tensor::zeros(&[27, 3, 3]);
        for i in 0..3 {
            w1.data[13 * 9 + i * 3 + i] = 1.0;
        }
        params.insert(CONV1_WEIGHT, w1);
        let w2 = Tensor::from_vec(
            (0..27 * 3 * 2).map(|i| if i / 6 == 13 { (i % 6) as f64 * 0.1 } else { 0.0 }).collect(),
            &[27, 3, 2],
        );
        params.insert(CONV2_WEIGHT, w2.clone());
        params.insert(CONV2_BIAS, Tensor::from_vec(vec![0.5, -0.5], &[2]));

        let mut tape = Tape::new();
        let vars = tape.register(&params);
        let x_data = [0.7, -1.3, 0.2];
        let x = tape.constant(x_data.to_vec(), &[1, c_in]);
        let y = diffuse(&mut tape, x, &vars, &geom);

        // Expected: relu(x) through W2's center tap plus bias.
        let rx = [0.7, 0.0, 0.2];
        let mut expect = [0.5, -0.5];
        for ci in 0..3 {
            for co in 0..2 {
                expect[co] += rx[ci] * w2.data[13 * 6 + ci * 2 + co];
            }
        }
        let got = tape.data(y);
        for i in 0..2 {
            assert!((got[i] - expect[i]).abs() < 1e-12, "{got:?} vs {expect:?}");
        }
    }

    /// Dense 3D convolution oracle: zero-filled dense array, cross-correlated,
    /// then masked to the occupied set (submanifold semantics).
    fn dense_conv_oracle(
        geom: &GridGeometry,
        input: &[f64],
        c_in: usize,
        w: &Tensor,
        bias: Option<&[f64]>,
    ) -> Vec<f64> {
        let c_out = w.shape[2];
        let e = geom.extents;
        let mut dense = vec![0.0; e[0] * e[1] * e[2] * c_in];
        for (row, coord) in geom.occupied.iter().enumerate() {
            let flat = ((coord[0] as usize * e[1]) + coord[1] as usize) * e[2] + coord[2] as usize;
            dense[flat * c_in..(flat + 1) * c_in]
                .copy_from_slice(&input[row * c_in..(row + 1) * c_in]);
        }
        let mut out = vec![0.0; geom.occupied_count() * c_out];
        for (row, coord) in geom.occupied.iter().enumerate() {
            for ox in -1i32..=1 {
                for oy in -1i32..=1 {
                    for oz in -1i32..=1 {
                        let n = [coord[0] + ox, coord[1] + oy, coord[2] + oz];
                        if n.iter().zip(&e).any(|(&v, &ext)| v < 0 || v as usize >= ext) {
                            continue;
                        }
                        let flat =
                            ((n[0] as usize * e[1]) + n[1] as usize) * e[2] + n[2] as usize;
                        let tap = (((ox + 1) * 9) + ((oy + 1) * 3) + (oz + 1)) as usize;
                        for ci in 0..c_in {
                            let xv = dense[flat * c_in + ci];
                            for co in 0..c_out {
                                out[row * c_out + co] +=
                                    xv * w.data[(tap * c_in + ci) * c_out + co];
                            }
                        }
                    }
                }
            }
            if let Some(b) = bias {
                for co in 0..c_out {
                    out[row * c_out + co] += b[co];
                }
            }
        }
        out
    }

    #[test]
    fn diffuse_matches_dense_convolution_oracle() {
        // Random occupancy on an 8^3 grid.
        let mut rng = stream_rng(11, Stream::Init, 3);
        let mut cells: BTreeMap<[i32; 3], Vec<u32>> = BTreeMap::new();
        let mut v = 0u32;
        for x in 0..8i32 {
            for y in 0..8i32 {
                for z in 0..8i32 {
                    if rng.gen::<f64>() < 0.3 {
                        cells.insert([x, y, z], vec![v]);
                        v += 1;
                    }
                }
            }
        }
        let geom = GridGeometry::from_cells([0.0; 3], 0.1, [8, 8, 8], cells);
        let n = geom.occupied_count();
        assert!(n > 20);

        let c_in = 5;
        let cfg = VolumeConfig { hidden_channels: 4, out_channels: 3, ..VolumeConfig::default() };
        let mut params = ParamSet::new();
        let mut prng = stream_rng(12, Stream::Init, 4);
        init_conv_params(&mut params, c_in, &cfg, &mut prng);
        // Give the second layer a nonzero bias to exercise that path.
        params.get_mut(CONV2_BIAS).data = vec![0.3, -0.2, 0.1];

        let input: Vec<f64> = (0..n * c_in).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let mut tape = Tape::new();
        let vars = tape.register(&params);
        let x = tape.constant(input.clone(), &[n, c_in]);
        let y = diffuse(&mut tape, x, &vars, &geom);
        // Submanifold property: output support equals input occupied set.
        assert_eq!(tape.shape(y), &[n, 3]);

        let h1 = dense_conv_oracle(&geom, &input, c_in, params.get(CONV1_WEIGHT), None);
        let h1: Vec<f64> = h1.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let expect = dense_conv_oracle(
            &geom,
            &h1,
            cfg.hidden_channels,
            params.get(CONV2_WEIGHT),
            Some(&params.get(CONV2_BIAS).data),
        );
        let got = tape.data(y);
        for i in 0..expect.len() {
            assert!((got[i] - expect[i]).abs() < 1e-10, "at {i}: {} vs {}", got[i], expect[i]);
        }
    }

    fn grid_with_features(values: impl Fn([f64; 3]) -> Vec<f64>, channels: usize) -> VoxelGrid {
        // Fully occupied 4^3 grid with centers at (i+0.5)*0.1.
        let mut cells: BTreeMap<[i32; 3], Vec<u32>> = BTreeMap::new();
        let mut v = 0u32;
        for x in 0..4i32 {
            for y in 0..4i32 {
                for z in 0..4i32 {
                    cells.insert([x, y, z], vec![v]);
                    v += 1;
                }
            }
        }
        let geom = Arc::new(GridGeometry::from_cells([0.0; 3], 0.1, [4, 4, 4], cells));
        let mut data = Vec::new();
        for coord in &geom.occupied {
            data.extend(values(geom.voxel_center(*coord)));
        }
        let n = geom.occupied_count();
        VoxelGrid { geometry: geom, features: Tensor::from_vec(data, &[n, channels]) }
    }

    #[test]
    fn query_at_voxel_center_is_exact() {
        let grid = grid_with_features(|c| vec![c[0] * 7.0 + c[1], c[2]], 2);
        let center = grid.geometry.voxel_center([2, 1, 3]);
        let got = grid.query(center);
        let row = grid.geometry.row_of([2, 1, 3]) as usize;
        let expect = &grid.features.data[row * 2..row * 2 + 2];
        assert!((got[0] - expect[0]).abs() < 1e-12);
        assert!((got[1] - expect[1]).abs() < 1e-12);
    }

    #[test]
    fn query_at_corner_midpoint_is_mean_of_eight() {
        let grid = grid_with_features(|c| vec![c[0] + 2.0 * c[1] + 4.0 * c[2]], 1);
        // Midpoint of the 8 voxel centers (1..2, 1..2, 1..2).
        let a = grid.geometry.voxel_center([1, 1, 1]);
        let b = grid.geometry.voxel_center([2, 2, 2]);
        let mid = [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0, (a[2] + b[2]) / 2.0];
        let got = grid.query(mid)[0];
        let mut expect = 0.0;
        for dx in 1..3 {
            for dy in 1..3 {
                for dz in 1..3 {
                    let row = grid.geometry.row_of([dx, dy, dz]) as usize;
                    expect += grid.features.data[row];
                }
            }
        }
        expect /= 8.0;
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn query_reproduces_linear_fields_exactly() {
        let grid = grid_with_features(
            |c| vec![1.5 * c[0] - 2.0 * c[1] + 0.7 * c[2] + 0.3, -c[0] + 4.0 * c[2]],
            2,
        );
        let mut rng = stream_rng(13, Stream::Init, 5);
        for _ in 0..50 {
            // Interior points, at least half a voxel from the boundary.
            let x = [
                rng.gen_range(0.051..0.349),
                rng.gen_range(0.051..0.349),
                rng.gen_range(0.051..0.349),
            ];
            let got = grid.query(x);
            let e0 = 1.5 * x[0] - 2.0 * x[1] + 0.7 * x[2] + 0.3;
            let e1 = -x[0] + 4.0 * x[2];
            assert!((got[0] - e0).abs() < 1e-12, "{} vs {e0}", got[0]);
            assert!((got[1] - e1).abs() < 1e-12);
        }
    }

    #[test]
    fn query_outside_grid_is_zero() {
        let grid = grid_with_features(|_| vec![5.0], 1);
        assert_eq!(grid.query([-1.0, 0.2, 0.2]), vec![0.0]);
        assert_eq!(grid.query([0.2, 0.2, 99.0]), vec![0.0]);
    }

    #[test]
    fn query_is_locally_lipschitz_in_occupied_interior() {
        let grid = grid_with_features(|c| vec![fmath::sin(20.0 * c[0]) + c[1] * c[2]], 1);
        let mut rng = stream_rng(17, Stream::Init, 6);
        let eps = 0.01; // voxel_size / 10
        for _ in 0..40 {
            let x = [
                rng.gen_range(0.06..0.34),
                rng.gen_range(0.06..0.34),
                rng.gen_range(0.06..0.34),
            ];
            let mut u = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let n = fmath::sqrt(u.iter().map(|v| v * v).sum());
            u = [u[0] / n, u[1] / n, u[2] / n];
            let y = [x[0] + eps * u[0], x[1] + eps * u[1], x[2] + eps * u[2]];
            let d = (grid.query(x)[0] - grid.query(y)[0]).abs();
            // Feature range over the grid bounds the trilinear slope.
            assert!(d <= 60.0 * eps, "jump {d} over step {eps}");
        }
    }

    #[test]
    fn latent_gradients_flow_through_anchor_diffuse_query() {
        let head = test_head();
        let cfg = VolumeConfig::default();
        let beta = [0.0; 4];
        let geom = GridGeometry::build(&head, &beta, &cfg);
        let psi = ExpressionParams(vec![0.2, -0.1, 0.3, 0.0, 0.1, -0.2, 0.05, 0.15]);
        let constant = anchor_constant_features(&head, &beta, &psi, &ChannelAblation::default());

        let mut params = ParamSet::new();
        let mut rng = stream_rng(19, Stream::Init, 7);
        init_conv_params(&mut params, anchored_channels(&head), &cfg, &mut rng);
        params.insert("latent", head.latent_codes.clone());

        // Query near the surface some corners are occupied.
        let probe = head.vertices(&beta, &ExpressionParams::zero(8));
        let points: Vec<f64> = probe[..9].to_vec();

        let run = |latent_data: &[f64]| -> f64 {
            let mut tape = Tape::new();
            let mut p = params.clone();
            p.get_mut("latent").data = latent_data.to_vec();
            let vars = tape.register(&p);
            let anchored = anchor(&mut tape, &constant, vars["latent"], &geom);
            let diffused = diffuse(&mut tape, anchored, &vars, &geom);
            let gm = Arc::new(geom.gather_map(&points));
            let q = tape.gather_weighted(diffused, gm);
            let loss = tape.mean_all(q);
            tape.scalar_value(loss)
        };

        let mut tape = Tape::new();
        let vars = tape.register(&params);
        let anchored = anchor(&mut tape, &constant, vars["latent"], &geom);
        let diffused = diffuse(&mut tape, anchored, &vars, &geom);
        let gm = Arc::new(geom.gather_map(&points));
        let q = tape.gather_weighted(diffused, gm);
        let loss = tape.mean_all(q);
        tape.backward(loss);
        let analytic = tape.grad(vars["latent"]).expect("latent grad").to_vec();

        // Finite differences on a subset of latent entries (full sweep is slow).
        let base = params.get("latent").data.clone();
        let mut checked = 0;
        for i in (0..base.len()).step_by(97) {
            let mut plus = base.clone();
            plus[i] += 1e-5;
            let mut minus = base.clone();
            minus[i] -= 1e-5;
            let fd = (run(&plus) - run(&minus)) / 2e-5;
            let scale = fd.abs().max(analytic[i].abs()).max(1.0);
            assert!(
                (fd - analytic[i]).abs() / scale < 1e-4,
                "latent[{i}]: analytic {} vs fd {fd}",
                analytic[i]
            );
            checked += 1;
        }
        assert!(checked > 10);
        assert!(analytic.iter().any(|&g| g != 0.0), "latent gradient all zero");
    }

    #[test]
    fn ablated_channels_still_produce_finite_outputs() {
        let head = test_head();
        let cfg = VolumeConfig::default();
        let beta = [0.0; 4];
        let geom = GridGeometry::build(&head, &beta, &cfg);
        let psi = ExpressionParams(vec![0.5; 8]);
        for ablation in [
            ChannelAblation { zero_semantic: true, ..Default::default() },
            ChannelAblation { zero_expression: true, ..Default::default() },
            ChannelAblation { zero_displacement: true, ..Default::default() },
        ] {
            let constant = anchor_constant_features(&head, &beta, &psi, &ablation);
            let mut params = ParamSet::new();
            let mut rng = stream_rng(23, Stream::Init, 8);
            init_conv_params(&mut params, anchored_channels(&head), &cfg, &mut rng);
            params.insert("latent", head.latent_codes.clone());
            let mut tape = Tape::new();
            let vars = tape.register(&params);
            let anchored = anchor(&mut tape, &constant, vars["latent"], &geom);
            let diffused = diffuse(&mut tape, anchored, &vars, &geom);
            assert!(tape.data(diffused).iter().all(|v| v.is_finite()));
        }
    }
}
