//! Voxelization of LiDAR clouds, per-voxel set encoding, and the stride-8
//! BEV backbone.
//!
//! The backbone is a dense stand-in for a sparse 3D convolution stack: voxel
//! features are collapsed over z by summation, then three stride-2 2D
//! convolutions reduce the spatial dims by a factor of eight. Stage outputs
//! are kept for multi-scale RoI pooling.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CvfError, Result};
use crate::geometry::LidarPoint;
use crate::tensor::{Graph, Tensor, Var};

/// Metric-range voxel partition. BEV dims must divide by 8 so the backbone's
/// stride contract holds.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGridSpec {
    pub range_min: [f64; 3],
    pub range_max: [f64; 3],
    pub voxel_size: [f64; 3],
    /// None means unbounded.
    pub max_points_per_voxel: Option<usize>,
    dims: [usize; 3],
}

impl VoxelGridSpec {
    pub fn new(
        range_min: [f64; 3],
        range_max: [f64; 3],
        voxel_size: [f64; 3],
        max_points_per_voxel: Option<usize>,
    ) -> Result<Self> {
        let mut dims = [0usize; 3];
        for a in 0..3 {
            if voxel_size[a] <= 0.0 || range_max[a] <= range_min[a] {
                return Err(CvfError::InvalidArgument(format!(
                    "invalid range/size on axis {a}"
                )));
            }
            let n = (range_max[a] - range_min[a]) / voxel_size[a];
            let rounded = n.round();
            if (n - rounded).abs() > 1e-9 {
                return Err(CvfError::InvalidArgument(format!(
                    "range on axis {a} is not an integer number of voxels ({n})"
                )));
            }
            dims[a] = rounded as usize;
        }
        if dims[0] % 8 != 0 || dims[1] % 8 != 0 {
            return Err(CvfError::InvalidArgument(format!(
                "BEV dims ({}, {}) must be divisible by 8",
                dims[0], dims[1]
            )));
        }
        Ok(Self {
            range_min,
            range_max,
            voxel_size,
            max_points_per_voxel,
            dims,
        })
    }

    /// KITTI car configuration: range [0,70.4]x[-40,40]x[-3,1] m, voxels
    /// 0.05x0.05x0.1 m, giving (1408, 1600, 40) voxels.
    pub fn kitti_default() -> Self {
        Self::new(
            [0.0, -40.0, -3.0],
            [70.4, 40.0, 1.0],
            [0.05, 0.05, 0.1],
            Some(5),
        )
        .expect("KITTI grid divides exactly")
    }

    /// (n_x, n_y, n_z)
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    /// Stride-8 BEV feature map shape as (rows, cols) = (n_y/8, n_x/8).
    pub fn bev_shape(&self) -> (usize, usize) {
        (self.dims[1] / 8, self.dims[0] / 8)
    }

    /// Lower-inclusive, upper-exclusive voxel index of a point.
    pub fn voxel_index(&self, p: &LidarPoint) -> Option<[usize; 3]> {
        let coords = [p.x, p.y, p.z];
        let mut idx = [0usize; 3];
        for a in 0..3 {
            if coords[a] < self.range_min[a] || coords[a] >= self.range_max[a] {
                return None;
            }
            let i = ((coords[a] - self.range_min[a]) / self.voxel_size[a]).floor() as usize;
            idx[a] = i.min(self.dims[a] - 1);
        }
        Some(idx)
    }

    /// Metric lower corner of a voxel.
    pub fn voxel_min(&self, idx: [usize; 3]) -> [f64; 3] {
        [
            self.range_min[0] + idx[0] as f64 * self.voxel_size[0],
            self.range_min[1] + idx[1] as f64 * self.voxel_size[1],
            self.range_min[2] + idx[2] as f64 * self.voxel_size[2],
        ]
    }
}

/// Sparse occupancy map from voxel index (ix, iy, iz) to its points.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelizedScene {
    pub voxels: BTreeMap<[usize; 3], Vec<LidarPoint>>,
    pub dropped_out_of_range: usize,
    pub dropped_overflow: usize,
}

impl VoxelizedScene {
    pub fn occupied(&self) -> usize {
        self.voxels.len()
    }
}

fn voxel_hash(idx: [usize; 3]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for v in idx {
        for b in (v as u64).to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    h
}

/// Assign points to voxels. Out-of-range points are discarded; per-voxel
/// overflow is resolved by seeded uniform subsampling. Per-voxel point lists
/// are canonically sorted, so with no cap the result is independent of input
/// order.
pub fn voxelize(points: &[LidarPoint], spec: &VoxelGridSpec, seed: u64) -> VoxelizedScene {
    let mut voxels: BTreeMap<[usize; 3], Vec<LidarPoint>> = BTreeMap::new();
    let mut dropped_oor = 0usize;
    for p in points {
        match spec.voxel_index(p) {
            Some(idx) => voxels.entry(idx).or_default().push(*p),
            None => dropped_oor += 1,
        }
    }
    let mut dropped_overflow = 0usize;
    for (idx, pts) in voxels.iter_mut() {
        pts.sort_by(|a, b| {
            (a.x, a.y, a.z, a.intensity)
                .partial_cmp(&(b.x, b.y, b.z, b.intensity))
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        if let Some(cap) = spec.max_points_per_voxel {
            if pts.len() > cap {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ voxel_hash(*idx));
                let chosen = rand::seq::index::sample(&mut rng, pts.len(), cap);
                let mut keep: Vec<usize> = chosen.into_iter().collect();
                keep.sort_unstable();
                dropped_overflow += pts.len() - cap;
                *pts = keep.iter().map(|&i| pts[i]).collect();
            }
        }
    }
    VoxelizedScene {
        voxels,
        dropped_out_of_range: dropped_oor,
        dropped_overflow,
    }
}

/// Per-voxel set encoding: each point becomes (offset from the voxel-points
/// centroid, intensity), passes a shared affine + ReLU, and is max-pooled.
/// Returns one feature vector per occupied voxel in index order.
pub fn encode_voxels(
    graph: &mut Graph,
    scene: &VoxelizedScene,
    weight: Var,
    bias: Var,
) -> Result<Vec<([usize; 3], Var)>> {
    if scene.voxels.is_empty() {
        return Err(CvfError::InvalidArgument("encode_voxels on empty scene".into()));
    }
    if graph.value(weight).shape().first() != Some(&4) {
        return Err(CvfError::Shape(format!(
            "voxel encoder weight must be [4,C], got {:?}",
            graph.value(weight).shape()
        )));
    }
    let mut out = Vec::with_capacity(scene.voxels.len());
    for (&idx, pts) in &scene.voxels {
        let n = pts.len();
        let cx = pts.iter().map(|p| p.x).sum::<f64>() / n as f64;
        let cy = pts.iter().map(|p| p.y).sum::<f64>() / n as f64;
        let cz = pts.iter().map(|p| p.z).sum::<f64>() / n as f64;
        let mut rows = Vec::with_capacity(n * 4);
        for p in pts {
            rows.extend_from_slice(&[p.x - cx, p.y - cy, p.z - cz, p.intensity]);
        }
        let x = graph.leaf(Tensor::new(vec![n, 4], rows)?);
        let a = graph.linear(x, weight, bias)?;
        let r = graph.relu(a);
        let f = graph.max_over_set(r)?;
        out.push((idx, f));
    }
    Ok(out)
}

/// A BEV-aligned feature map with its metric placement.
#[derive(Debug, Clone, Copy)]
pub struct BevMap {
    pub var: Var,
    /// Metric position of the (row 0, col 0) cell's lower corner: (x, y).
    pub origin: [f64; 2],
    /// Meters per cell (square cells).
    pub cell_size: f64,
}

impl BevMap {
    /// Continuous (row, col) position of a metric BEV point.
    pub fn to_cell(&self, x: f64, y: f64) -> (f64, f64) {
        (
            (y - self.origin[1]) / self.cell_size - 0.5,
            (x - self.origin[0]) / self.cell_size - 0.5,
        )
    }
}

/// Scatter per-voxel features into a dense [C, n_y, n_x] map, summing over z
/// and over any voxels sharing a BEV cell.
pub fn scatter_bev(
    graph: &mut Graph,
    encoded: &[([usize; 3], Var)],
    spec: &VoxelGridSpec,
    channels: usize,
) -> Result<Var> {
    let [n_x, n_y, _] = spec.dims();
    let mut data = vec![0.0; channels * n_y * n_x];
    let mut inputs = Vec::with_capacity(encoded.len());
    let mut slots = Vec::with_capacity(encoded.len());
    for &(idx, v) in encoded {
        if graph.value(v).numel() != channels {
            return Err(CvfError::Shape(format!(
                "voxel feature length {} != channels {channels}",
                graph.value(v).numel()
            )));
        }
        let cell = idx[1] * n_x + idx[0];
        for c in 0..channels {
            data[c * n_y * n_x + cell] += graph.value(v).data()[c];
        }
        slots.push((v.id(), cell));
        inputs.push(v);
    }
    let plane = n_y * n_x;
    Ok(graph.record(
        "scatter_bev",
        inputs,
        Tensor::new(vec![channels, n_y, n_x], data)?,
        Box::new(move |_, og, grads| {
            for &(id, cell) in &slots {
                for c in 0..channels {
                    grads.accum(id, c, og[c * plane + cell]);
                }
            }
        }),
    ))
}

/// Three stride-2 conv+ReLU stages over the dense BEV map. Returns all stage
/// outputs, coarsest last; the final stage is the stride-8 LiDAR feature map.
pub fn bev_backbone(
    graph: &mut Graph,
    dense: Var,
    spec: &VoxelGridSpec,
    convs: &[(Var, Var)],
) -> Result<Vec<BevMap>> {
    if convs.len() != 3 {
        return Err(CvfError::InvalidArgument(format!(
            "backbone expects 3 conv stages, got {}",
            convs.len()
        )));
    }
    let mut stages = Vec::with_capacity(3);
    let mut cur = dense;
    let mut cell = spec.voxel_size[0];
    for &(w, b) in convs {
        let c = graph.conv2d(cur, w, b, 2, 1)?;
        cur = graph.relu(c);
        cell *= 2.0;
        stages.push(BevMap {
            var: cur,
            origin: [spec.range_min[0], spec.range_min[1]],
            cell_size: cell,
        });
    }
    Ok(stages)
}

/// Register backbone + voxel-encoder parameters with the given stage widths.
pub fn init_backbone_params(
    store: &mut crate::tensor::checkpoint::ParamStore,
    encoder_width: usize,
    stage_channels: [usize; 3],
    seed: u64,
) {
    store.init_uniform("voxel_enc.w", vec![4, encoder_width], 4, seed);
    store.init_zeros("voxel_enc.b", vec![encoder_width]);
    let mut c_in = encoder_width;
    for (i, &c_out) in stage_channels.iter().enumerate() {
        store.init_uniform(
            &format!("bev_backbone.conv{i}.w"),
            vec![c_out, c_in, 3, 3],
            c_in * 9,
            seed,
        );
        store.init_zeros(&format!("bev_backbone.conv{i}.b"), vec![c_out]);
        c_in = c_out;
    }
}
