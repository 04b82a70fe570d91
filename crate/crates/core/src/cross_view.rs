//! Auto-calibrated projection of camera-view features into a dense BEV
//! camera feature map.
//!
//! Each cell of a 2x-resolution camera voxel grid projects its z-slab center
//! points into every camera, shifts the landing position by a learnable
//! per-tile offset, and gathers the four neighboring feature pixels with
//! inverse-Euclidean-distance weights. Contributions from all slabs and
//! cameras are averaged. The whole mapping is differentiable with respect to
//! the camera features and the offsets.

use crate::error::{CvfError, Result};
use crate::geometry::{project_to_image, CalibrationSet, Projection};
use crate::tensor::{Graph, Tensor, Var};
use crate::voxel::VoxelGridSpec;

/// How the four neighboring feature pixels are weighted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InterpMode {
    /// Weights proportional to inverse Euclidean distance, normalized to
    /// sum to one.
    InverseDistance,
    /// Standard bilinear product weights, for comparison.
    Bilinear,
}

/// Positions closer than this to a lattice point collapse to a one-hot
/// weight.
pub const LATTICE_EPS: f64 = 1e-12;

/// Four neighbor lattice pixels of a continuous position, with weights and
/// weight derivatives with respect to the position.
#[derive(Debug, Clone, Copy)]
pub struct InterpStencil {
    /// (x, y) integer pixel coordinates, order (x0,y0),(x1,y0),(x0,y1),(x1,y1).
    pub pixels: [(i64, i64); 4],
    pub weights: [f64; 4],
    pub dw_dx: [f64; 4],
    pub dw_dy: [f64; 4],
}

/// Interpolation weights for the unit cell containing (x, y).
pub fn interp_weights(x: f64, y: f64, mode: InterpMode) -> InterpStencil {
    let x0 = x.floor() as i64;
    let y0 = y.floor() as i64;
    let pixels = [(x0, y0), (x0 + 1, y0), (x0, y0 + 1), (x0 + 1, y0 + 1)];
    match mode {
        InterpMode::InverseDistance => {
            let mut dist = [0.0; 4];
            for (i, &(px, py)) in pixels.iter().enumerate() {
                let dx = px as f64 - x;
                let dy = py as f64 - y;
                dist[i] = (dx * dx + dy * dy).sqrt();
            }
            if let Some(hit) = dist.iter().position(|&d| d < LATTICE_EPS) {
                let mut weights = [0.0; 4];
                weights[hit] = 1.0;
                return InterpStencil {
                    pixels,
                    weights,
                    dw_dx: [0.0; 4],
                    dw_dy: [0.0; 4],
                };
            }
            let inv: Vec<f64> = dist.iter().map(|&d| 1.0 / d).collect();
            let sum: f64 = inv.iter().sum();
            let mut weights = [0.0; 4];
            let mut du_dx = [0.0; 4];
            let mut du_dy = [0.0; 4];
            for i in 0..4 {
                weights[i] = inv[i] / sum;
                // d(1/d)/dpos = -(pos - corner)/d^3
                let dx = x - pixels[i].0 as f64;
                let dy = y - pixels[i].1 as f64;
                let d3 = dist[i] * dist[i] * dist[i];
                du_dx[i] = -dx / d3;
                du_dy[i] = -dy / d3;
            }
            let sum_dx: f64 = du_dx.iter().sum();
            let sum_dy: f64 = du_dy.iter().sum();
            let mut dw_dx = [0.0; 4];
            let mut dw_dy = [0.0; 4];
            for i in 0..4 {
                dw_dx[i] = du_dx[i] / sum - weights[i] * sum_dx / sum;
                dw_dy[i] = du_dy[i] / sum - weights[i] * sum_dy / sum;
            }
            InterpStencil {
                pixels,
                weights,
                dw_dx,
                dw_dy,
            }
        }
        InterpMode::Bilinear => {
            let fx = x - x0 as f64;
            let fy = y - y0 as f64;
            InterpStencil {
                pixels,
                weights: [
                    (1.0 - fx) * (1.0 - fy),
                    fx * (1.0 - fy),
                    (1.0 - fx) * fy,
                    fx * fy,
                ],
                dw_dx: [-(1.0 - fy), 1.0 - fy, -fy, fy],
                dw_dy: [-(1.0 - fx), -fx, 1.0 - fx, fx],
            }
        }
    }
}

/// Dense BEV grid at twice the LiDAR BEV feature resolution in x and y, with
/// per-cell representative z-slab centers.
#[derive(Debug, Clone)]
pub struct CameraVoxelGrid {
    /// Metric lower corner (x, y) of cell (row 0, col 0).
    pub origin: [f64; 2],
    /// Meters per cell in x and y.
    pub cell_size: f64,
    /// Columns (x axis).
    pub nx: usize,
    /// Rows (y axis).
    pub ny: usize,
    pub z_centers: Vec<f64>,
}

impl CameraVoxelGrid {
    /// Grid with four times as many BEV cells as the stride-8 LiDAR map.
    pub fn from_spec(spec: &VoxelGridSpec, z_slabs: usize) -> Result<Self> {
        if z_slabs == 0 {
            return Err(CvfError::InvalidArgument("z_slabs must be >= 1".into()));
        }
        let [n_x, n_y, _] = spec.dims();
        let cell_size = spec.voxel_size[0] * 4.0;
        let z_range = spec.range_max[2] - spec.range_min[2];
        let z_centers = (0..z_slabs)
            .map(|k| spec.range_min[2] + (k as f64 + 0.5) * z_range / z_slabs as f64)
            .collect();
        Ok(Self {
            origin: [spec.range_min[0], spec.range_min[1]],
            cell_size,
            nx: n_x / 4,
            ny: n_y / 4,
            z_centers,
        })
    }

    /// Metric (x, y) center of a cell.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.origin[0] + (col as f64 + 0.5) * self.cell_size,
            self.origin[1] + (row as f64 + 0.5) * self.cell_size,
        )
    }
}

/// Offset-field tiling over the BEV plane: each tile owns one (dx, dy) pair
/// in feature-pixel units, looked up by nearest tile.
#[derive(Debug, Clone, Copy)]
pub struct OffsetTiling {
    pub tiles_y: usize,
    pub tiles_x: usize,
}

impl OffsetTiling {
    pub fn shape(&self) -> Vec<usize> {
        vec![self.tiles_y, self.tiles_x, 2]
    }

    fn tile_of(&self, row: usize, col: usize, ny: usize, nx: usize) -> usize {
        let tr = (row * self.tiles_y / ny).min(self.tiles_y - 1);
        let tc = (col * self.tiles_x / nx).min(self.tiles_x - 1);
        tr * self.tiles_x + tc
    }
}

impl Default for OffsetTiling {
    fn default() -> Self {
        Self {
            tiles_y: 8,
            tiles_x: 8,
        }
    }
}

/// Projection configuration shared by the camera-to-BEV mapping and RoI
/// camera pooling.
#[derive(Debug, Clone, Copy)]
pub struct ProjectionConfig {
    /// Feature-map stride relative to the raw image (paper value 8).
    pub feature_stride: f64,
    pub mode: InterpMode,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self {
            feature_stride: 8.0,
            mode: InterpMode::InverseDistance,
        }
    }
}

/// Image pixel position expressed in feature-map pixel coordinates (feature
/// pixel centers at integers).
fn to_feature_coords(px: f64, py: f64, stride: f64) -> (f64, f64) {
    (px / stride - 0.5, py / stride - 0.5)
}

struct GatherSample {
    cell: usize,
    cam: usize,
    tile: usize,
    /// Flat spatial indices into the camera feature plane.
    neighbors: [usize; 4],
    weights: [f64; 4],
    dw_dx: [f64; 4],
    dw_dy: [f64; 4],
}

/// Project every camera feature map into the BEV camera grid. `offsets`,
/// when present, is a [T_y, T_x, 2] tensor of learnable feature-pixel
/// offsets; gradients flow to both the camera features and the offsets.
/// Cells seen by no camera are exactly zero.
pub fn auto_calibrated_project(
    graph: &mut Graph,
    camera_features: &[Var],
    calibs: &[CalibrationSet],
    grid: &CameraVoxelGrid,
    offsets: Option<(Var, OffsetTiling)>,
    config: &ProjectionConfig,
) -> Result<Var> {
    if camera_features.is_empty() || camera_features.len() != calibs.len() {
        return Err(CvfError::InvalidArgument(format!(
            "need one calibration per camera feature map ({} vs {})",
            camera_features.len(),
            calibs.len()
        )));
    }
    let channels = graph.value(camera_features[0]).shape()[0];
    let mut feat_dims = Vec::with_capacity(camera_features.len());
    for &f in camera_features {
        let s = graph.value(f).shape();
        if s.len() != 3 || s[0] != channels {
            return Err(CvfError::Shape(format!(
                "camera features must share [C,H,W] layout with C={channels}, got {s:?}"
            )));
        }
        feat_dims.push((s[1], s[2]));
    }
    if let Some((off, tiling)) = &offsets {
        let s = graph.value(*off).shape();
        if s != tiling.shape().as_slice() {
            return Err(CvfError::Shape(format!(
                "offset field shape {s:?} does not match tiling {:?}",
                tiling.shape()
            )));
        }
    }

    let (ny, nx) = (grid.ny, grid.nx);
    let mut samples: Vec<GatherSample> = Vec::new();
    let mut counts = vec![0u32; ny * nx];
    for row in 0..ny {
        for col in 0..nx {
            let (cx, cy) = grid.cell_center(row, col);
            let cell = row * nx + col;
            for &cz in &grid.z_centers {
                let p = nalgebra::Vector3::new(cx, cy, cz);
                for (cam, calib) in calibs.iter().enumerate() {
                    let pix = match project_to_image(&p, calib) {
                        Projection::InFront(px) => px,
                        Projection::BehindCamera => continue,
                    };
                    let (mut fx, mut fy) = to_feature_coords(pix.x, pix.y, config.feature_stride);
                    let mut tile = 0usize;
                    if let Some((off, tiling)) = &offsets {
                        tile = tiling.tile_of(row, col, ny, nx);
                        let ov = graph.value(*off).data();
                        fx += ov[tile * 2];
                        fy += ov[tile * 2 + 1];
                    }
                    let st = interp_weights(fx, fy, config.mode);
                    let (fh, fw) = feat_dims[cam];
                    let in_map = st.pixels.iter().all(|&(px, py)| {
                        px >= 0 && py >= 0 && (px as usize) < fw && (py as usize) < fh
                    });
                    if !in_map {
                        continue;
                    }
                    counts[cell] += 1;
                    samples.push(GatherSample {
                        cell,
                        cam,
                        tile,
                        neighbors: st
                            .pixels
                            .map(|(px, py)| py as usize * fw + px as usize),
                        weights: st.weights,
                        dw_dx: st.dw_dx,
                        dw_dy: st.dw_dy,
                    });
                }
            }
        }
    }

    // Forward accumulation.
    let mut out = vec![0.0; channels * ny * nx];
    let plane_out = ny * nx;
    for s in &samples {
        let f = graph.value(camera_features[s.cam]);
        let plane = feat_dims[s.cam].0 * feat_dims[s.cam].1;
        let inv = 1.0 / counts[s.cell] as f64;
        for c in 0..channels {
            let mut acc = 0.0;
            for i in 0..4 {
                acc += s.weights[i] * f.data()[c * plane + s.neighbors[i]];
            }
            out[c * plane_out + s.cell] += acc * inv;
        }
    }

    let feat_ids: Vec<usize> = camera_features.iter().map(|v| v.id()).collect();
    let feat_planes: Vec<usize> = feat_dims.iter().map(|&(h, w)| h * w).collect();
    let offset_id = offsets.as_ref().map(|(v, _)| v.id());
    let mut inputs: Vec<Var> = camera_features.to_vec();
    if let Some((off, _)) = &offsets {
        inputs.push(*off);
    }
    Ok(graph.record(
        "auto_calibrated_project",
        inputs,
        Tensor::new(vec![channels, ny, nx], out)?,
        Box::new(move |ts, og, grads| {
            for s in &samples {
                let fid = feat_ids[s.cam];
                let plane = feat_planes[s.cam];
                let inv = 1.0 / counts[s.cell] as f64;
                let fdata = ts[fid].data();
                let mut g_dx = 0.0;
                let mut g_dy = 0.0;
                for c in 0..channels {
                    let g = og[c * plane_out + s.cell] * inv;
                    if g == 0.0 {
                        continue;
                    }
                    for i in 0..4 {
                        let fi = c * plane + s.neighbors[i];
                        grads.accum(fid, fi, g * s.weights[i]);
                        g_dx += g * s.dw_dx[i] * fdata[fi];
                        g_dy += g * s.dw_dy[i] * fdata[fi];
                    }
                }
                if let Some(oid) = offset_id {
                    grads.accum(oid, s.tile * 2, g_dx);
                    grads.accum(oid, s.tile * 2 + 1, g_dy);
                }
            }
        }),
    ))
}

/// Compress the 2x-resolution projected camera map down to the LiDAR BEV
/// resolution: one stride-2 conv + ReLU.
pub fn bev_camera_compress(graph: &mut Graph, proj: Var, w: Var, b: Var) -> Result<Var> {
    let s = graph.value(proj).shape().to_vec();
    if s.len() != 3 || s[1] % 2 != 0 || s[2] % 2 != 0 {
        return Err(CvfError::Shape(format!(
            "compression input must have even spatial dims, got {s:?}"
        )));
    }
    let c = graph.conv2d(proj, w, b, 2, 1)?;
    Ok(graph.relu(c))
}
