//! Proposal generation and 3D RoI fusion-based refinement: anchors, the RPN
//! head, rotated NMS, target assignment, RoI pooling of joint / LiDAR /
//! camera features with set encoders, the refinement head, and the loss
//! stack.

use crate::cross_view::{interp_weights, InterpMode, ProjectionConfig};
use crate::error::{CvfError, Result};
use crate::geometry::{
    bev_iou, encode_box_residual, project_to_image, Box3D, CalibrationSet, Projection,
};
use crate::tensor::{checkpoint::ParamStore, Graph, Tensor, Var};
use crate::voxel::BevMap;

/// Per-class anchor geometry; yaw variants are fixed at 0 and 90 degrees.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorSpec {
    pub w: f64,
    pub l: f64,
    pub h: f64,
    /// Anchor center height.
    pub z: f64,
}

impl Default for AnchorSpec {
    /// KITTI car anchor.
    fn default() -> Self {
        Self {
            w: 1.6,
            l: 3.9,
            h: 1.56,
            z: -1.0,
        }
    }
}

pub const ANCHOR_YAWS: [f64; 2] = [0.0, std::f64::consts::FRAC_PI_2];
pub const ANCHORS_PER_CELL: usize = 2;

/// Anchors over every BEV cell, two yaws per cell. Index layout matches the
/// head output: a * rows * cols + r * cols + c.
pub fn generate_anchors(
    rows: usize,
    cols: usize,
    origin: [f64; 2],
    cell_size: f64,
    spec: &AnchorSpec,
) -> Vec<Box3D> {
    let mut anchors = Vec::with_capacity(ANCHORS_PER_CELL * rows * cols);
    for &yaw in &ANCHOR_YAWS {
        for r in 0..rows {
            for c in 0..cols {
                let x = origin[0] + (c as f64 + 0.5) * cell_size;
                let y = origin[1] + (r as f64 + 0.5) * cell_size;
                anchors.push(
                    Box3D::new(x, y, spec.z, spec.w, spec.l, spec.h, yaw)
                        .expect("anchor sizes are positive"),
                );
            }
        }
    }
    anchors
}

/// Detection proposal: a decoded box with its objectness score.
#[derive(Debug, Clone, Copy)]
pub struct Proposal {
    pub box3d: Box3D,
    pub objectness: f64,
    pub anchor_index: usize,
}

/// Loss constants; defaults are the reference values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub beta1: f64,
    pub beta2: f64,
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta1: 1.0,
            beta2: 2.0,
            alpha: 0.25,
            gamma: 2.0,
        }
    }
}

// ---------------------------------------------------------------------------
// RPN head

#[derive(Debug, Clone, Copy)]
pub struct RpnHeadParams {
    pub trunk_w: Var,
    pub trunk_b: Var,
    pub cls_w: Var,
    pub cls_b: Var,
    pub reg_w: Var,
    pub reg_b: Var,
}

pub fn init_rpn_params(store: &mut ParamStore, in_channels: usize, trunk: usize, seed: u64) {
    store.init_uniform("rpn.trunk.w", vec![trunk, in_channels, 3, 3], in_channels * 9, seed);
    store.init_zeros("rpn.trunk.b", vec![trunk]);
    store.init_uniform(
        "rpn.cls.w",
        vec![ANCHORS_PER_CELL, trunk, 1, 1],
        trunk,
        seed,
    );
    // objectness bias starts at the focal prior (1% positives) so the first
    // steps are not dominated by the easy-negative sea
    let prior: f64 = 0.01;
    if store.get("rpn.cls.b").is_none() {
        store.insert(
            "rpn.cls.b",
            Tensor::filled(vec![ANCHORS_PER_CELL], (prior / (1.0 - prior)).ln()),
        );
    }
    store.init_uniform(
        "rpn.reg.w",
        vec![7 * ANCHORS_PER_CELL, trunk, 1, 1],
        trunk,
        seed,
    );
    store.init_zeros("rpn.reg.b", vec![7 * ANCHORS_PER_CELL]);
}

pub fn attach_rpn_params(store: &ParamStore, g: &mut Graph) -> Result<RpnHeadParams> {
    Ok(RpnHeadParams {
        trunk_w: store.attach(g, "rpn.trunk.w")?,
        trunk_b: store.attach(g, "rpn.trunk.b")?,
        cls_w: store.attach(g, "rpn.cls.w")?,
        cls_b: store.attach(g, "rpn.cls.b")?,
        reg_w: store.attach(g, "rpn.reg.w")?,
        reg_b: store.attach(g, "rpn.reg.b")?,
    })
}

/// Objectness logits [A,H,W] and box residuals [7A,H,W]; residual channel
/// layout a*7+k.
#[derive(Debug, Clone, Copy)]
pub struct RpnOut {
    pub logits: Var,
    pub residuals: Var,
}

pub fn rpn_head(g: &mut Graph, f_joint: Var, params: &RpnHeadParams) -> Result<RpnOut> {
    let t = g.conv2d(f_joint, params.trunk_w, params.trunk_b, 1, 1)?;
    let t = g.relu(t);
    let logits = g.conv2d(t, params.cls_w, params.cls_b, 1, 0)?;
    let residuals = g.conv2d(t, params.reg_w, params.reg_b, 1, 0)?;
    Ok(RpnOut { logits, residuals })
}

/// Decode every anchor's predicted residual into a scored proposal.
pub fn decode_proposals(
    logits: &Tensor,
    residuals: &Tensor,
    anchors: &[Box3D],
) -> Result<Vec<Proposal>> {
    let (a_ch, h, w) = (logits.shape()[0], logits.shape()[1], logits.shape()[2]);
    if residuals.shape() != [7 * a_ch, h, w] {
        return Err(CvfError::Shape(format!(
            "residual shape {:?} does not match logits {:?}",
            residuals.shape(),
            logits.shape()
        )));
    }
    if anchors.len() != a_ch * h * w {
        return Err(CvfError::Shape(format!(
            "anchor count {} != {}",
            anchors.len(),
            a_ch * h * w
        )));
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(anchors.len());
    for a in 0..a_ch {
        for p in 0..plane {
            let idx = a * plane + p;
            let score = 1.0 / (1.0 + (-logits.data()[idx]).exp());
            let mut res = [0.0; 7];
            for (k, r) in res.iter_mut().enumerate() {
                *r = residuals.data()[(a * 7 + k) * plane + p];
            }
            out.push(Proposal {
                box3d: crate::geometry::decode_box_residual(&res, &anchors[idx])?,
                objectness: score,
                anchor_index: idx,
            });
        }
    }
    Ok(out)
}

/// Greedy descending-score suppression by rotated BEV IoU. Ties break on
/// score then earlier index.
pub fn nms(proposals: &[Proposal], iou_threshold: f64, max_keep: usize) -> Vec<Proposal> {
    let mut order: Vec<usize> = (0..proposals.len()).collect();
    order.sort_by(|&a, &b| {
        proposals[b]
            .objectness
            .partial_cmp(&proposals[a].objectness)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut kept: Vec<Proposal> = Vec::new();
    for &i in &order {
        if kept.len() >= max_keep {
            break;
        }
        let cand = &proposals[i];
        if kept
            .iter()
            .all(|k| bev_iou(&k.box3d, &cand.box3d) <= iou_threshold)
        {
            kept.push(*cand);
        }
    }
    kept
}

// ---------------------------------------------------------------------------
// Target assignment

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AnchorTarget {
    Positive { gt: usize, residual: [f64; 7] },
    Negative,
    Ignore,
}

/// BEV-IoU anchor assignment with forced best-anchor matching per ground
/// truth box.
pub fn assign_targets(
    anchors: &[Box3D],
    gts: &[Box3D],
    pos_iou: f64,
    neg_iou: f64,
) -> Result<Vec<AnchorTarget>> {
    if !(0.0 <= neg_iou && neg_iou <= pos_iou && pos_iou <= 1.0) {
        return Err(CvfError::InvalidArgument(format!(
            "thresholds must satisfy 0 <= neg ({neg_iou}) <= pos ({pos_iou}) <= 1"
        )));
    }
    let mut out = vec![AnchorTarget::Negative; anchors.len()];
    if gts.is_empty() {
        return Ok(out);
    }
    let mut best_anchor_for_gt = vec![(0usize, f64::NEG_INFINITY); gts.len()];
    for (ai, anchor) in anchors.iter().enumerate() {
        let mut best_gt = 0usize;
        let mut best = f64::NEG_INFINITY;
        for (gi, gt) in gts.iter().enumerate() {
            let iou = bev_iou(anchor, gt);
            if iou > best {
                best = iou;
                best_gt = gi;
            }
            if iou > best_anchor_for_gt[gi].1 {
                best_anchor_for_gt[gi] = (ai, iou);
            }
        }
        out[ai] = if best >= pos_iou {
            AnchorTarget::Positive {
                gt: best_gt,
                residual: encode_box_residual(&gts[best_gt], anchor)?,
            }
        } else if best <= neg_iou {
            AnchorTarget::Negative
        } else {
            AnchorTarget::Ignore
        };
    }
    for (gi, &(ai, _)) in best_anchor_for_gt.iter().enumerate() {
        out[ai] = AnchorTarget::Positive {
            gt: gi,
            residual: encode_box_residual(&gts[gi], &anchors[ai])?,
        };
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Losses

/// Focal classification loss over positive-target probabilities:
/// mean of -alpha (1-p)^gamma log(p).
pub fn focal_loss(g: &mut Graph, probs: Var, weights: &LossWeights) -> Result<Var> {
    let neg = g.mul_const(probs, -1.0);
    let one_minus = g.add_const(neg, 1.0);
    let modulator = g.pow_const(one_minus, weights.gamma);
    let logp = g.ln_clamped(probs);
    let prod = g.mul(modulator, logp)?;
    let scaled = g.mul_const(prod, -weights.alpha);
    Ok(g.mean_all(scaled))
}

/// Symmetric focal term for negative targets:
/// mean of -(1-alpha) p^gamma log(1-p).
pub fn focal_loss_negative(g: &mut Graph, probs: Var, weights: &LossWeights) -> Result<Var> {
    let modulator = g.pow_const(probs, weights.gamma);
    let negp = g.mul_const(probs, -1.0);
    let one_minus = g.add_const(negp, 1.0);
    let log1mp = g.ln_clamped(one_minus);
    let prod = g.mul(modulator, log1mp)?;
    let scaled = g.mul_const(prod, -(1.0 - weights.alpha));
    Ok(g.mean_all(scaled))
}

/// Smooth-L1 over location residual errors, averaged elementwise.
pub fn reg_loss_loc(g: &mut Graph, pred: Var, target: &[f64]) -> Result<Var> {
    let t = g.leaf(Tensor::new(vec![target.len()], target.to_vec())?);
    let p = g.reshape(pred, vec![target.len()])?;
    let d = g.sub(p, t)?;
    let s = g.smooth_l1(d);
    Ok(g.mean_all(s))
}

/// Smooth-L1 on the sine of the yaw error.
pub fn reg_loss_angle(g: &mut Graph, yaw_pred: Var, yaw_target: &[f64]) -> Result<Var> {
    let t = g.leaf(Tensor::new(vec![yaw_target.len()], yaw_target.to_vec())?);
    let p = g.reshape(yaw_pred, vec![yaw_target.len()])?;
    let d = g.sub(p, t)?;
    let s = g.sin_op(d);
    let l = g.smooth_l1(s);
    Ok(g.mean_all(l))
}

/// beta1 * cls + beta2 * (angle + loc)
pub fn weighted_loss(
    g: &mut Graph,
    cls: Var,
    reg_angle: Var,
    reg_loc: Var,
    weights: &LossWeights,
) -> Result<Var> {
    let reg = g.add(reg_angle, reg_loc)?;
    let reg = g.mul_const(reg, weights.beta2);
    let cls = g.mul_const(cls, weights.beta1);
    g.add(cls, reg)
}

/// Scalar components of a composed loss, for logging.
#[derive(Debug, Clone, Copy)]
pub struct RpnLoss {
    pub total: Var,
    pub cls_value: f64,
    pub loc_value: f64,
    pub angle_value: f64,
}

/// Full RPN loss from the head output and an anchor assignment. The
/// classification term applies the literal positive-target focal form on
/// positives plus the symmetric term on negatives; the summed terms are
/// normalized by the positive count (or 1 when the scene is empty) so the
/// sparse positives are not drowned out by the anchor sea.
pub fn rpn_loss(
    g: &mut Graph,
    out: &RpnOut,
    assignment: &[AnchorTarget],
    weights: &LossWeights,
) -> Result<RpnLoss> {
    let shape = g.value(out.logits).shape().to_vec();
    let plane = shape[1] * shape[2];
    let mut pos_idx = Vec::new();
    let mut neg_idx = Vec::new();
    let mut loc_idx = Vec::new();
    let mut angle_idx = Vec::new();
    let mut loc_target = Vec::new();
    let mut angle_target = Vec::new();
    for (i, t) in assignment.iter().enumerate() {
        let (a, p) = (i / plane, i % plane);
        match t {
            AnchorTarget::Positive { residual, .. } => {
                pos_idx.push(i);
                for k in 0..6 {
                    loc_idx.push((a * 7 + k) * plane + p);
                    loc_target.push(residual[k]);
                }
                angle_idx.push((a * 7 + 6) * plane + p);
                angle_target.push(residual[6]);
            }
            AnchorTarget::Negative => neg_idx.push(i),
            AnchorTarget::Ignore => {}
        }
    }
    let norm = pos_idx.len().max(1) as f64;

    // classification: focal sums normalized by the positive count
    let mut cls_terms: Vec<Var> = Vec::new();
    if !pos_idx.is_empty() {
        let logits = g.select(out.logits, &pos_idx)?;
        let p = g.sigmoid(logits);
        let f = focal_loss(g, p, weights)?;
        cls_terms.push(g.mul_const(f, pos_idx.len() as f64 / norm));
    }
    if !neg_idx.is_empty() {
        let logits = g.select(out.logits, &neg_idx)?;
        let p = g.sigmoid(logits);
        let f = focal_loss_negative(g, p, weights)?;
        cls_terms.push(g.mul_const(f, neg_idx.len() as f64 / norm));
    }
    let cls = match cls_terms.len() {
        0 => g.leaf(Tensor::scalar(0.0)),
        1 => cls_terms[0],
        _ => g.add(cls_terms[0], cls_terms[1])?,
    };

    let (loc, angle) = if pos_idx.is_empty() {
        (g.leaf(Tensor::scalar(0.0)), g.leaf(Tensor::scalar(0.0)))
    } else {
        let lp = g.select(out.residuals, &loc_idx)?;
        let ap = g.select(out.residuals, &angle_idx)?;
        (
            reg_loss_loc(g, lp, &loc_target)?,
            reg_loss_angle(g, ap, &angle_target)?,
        )
    };
    let total = weighted_loss(g, cls, angle, loc, weights)?;
    Ok(RpnLoss {
        total,
        cls_value: g.value(cls).data()[0],
        loc_value: g.value(loc).data()[0],
        angle_value: g.value(angle).data()[0],
    })
}

// ---------------------------------------------------------------------------
// RoI pooling

/// Sample a G x G grid in the box's rotated BEV frame and gather map
/// features with the configured interpolation; samples outside the map
/// gather zero. Output [C, G, G]; rows follow the box length axis.
pub fn rotated_roi_align(
    g: &mut Graph,
    map: &BevMap,
    box3d: &Box3D,
    grid: usize,
    mode: InterpMode,
) -> Result<Var> {
    if grid == 0 {
        return Err(CvfError::InvalidArgument("alignment grid must be >= 1".into()));
    }
    let shape = g.value(map.var).shape().to_vec();
    let (channels, rows, cols) = (shape[0], shape[1], shape[2]);
    let plane = rows * cols;
    let (sin_t, cos_t) = box3d.yaw.sin_cos();
    // per-sample gather stencils: (output position, neighbors, weights)
    let mut gathers: Vec<(usize, Vec<(usize, f64)>)> = Vec::new();
    for i in 0..grid {
        for j in 0..grid {
            let lx = ((i as f64 + 0.5) / grid as f64 - 0.5) * box3d.l;
            let ly = ((j as f64 + 0.5) / grid as f64 - 0.5) * box3d.w;
            let x = box3d.cx + cos_t * lx - sin_t * ly;
            let y = box3d.cy + sin_t * lx + cos_t * ly;
            let (row_f, col_f) = map.to_cell(x, y);
            let st = interp_weights(col_f, row_f, mode);
            let mut neigh = Vec::with_capacity(4);
            for (k, &(px, py)) in st.pixels.iter().enumerate() {
                if px >= 0 && py >= 0 && (px as usize) < cols && (py as usize) < rows {
                    neigh.push((py as usize * cols + px as usize, st.weights[k]));
                }
            }
            gathers.push((i * grid + j, neigh));
        }
    }
    let mut out = vec![0.0; channels * grid * grid];
    {
        let f = g.value(map.var).data();
        for (pos, neigh) in &gathers {
            for c in 0..channels {
                let mut acc = 0.0;
                for &(idx, w) in neigh {
                    acc += w * f[c * plane + idx];
                }
                out[c * grid * grid + pos] = acc;
            }
        }
    }
    let fid = map.var.id();
    let gg = grid * grid;
    Ok(g.record(
        "rotated_roi_align",
        vec![map.var],
        Tensor::new(vec![channels, grid, grid], out)?,
        Box::new(move |_, og, grads| {
            for (pos, neigh) in &gathers {
                for c in 0..channels {
                    let gv = og[c * gg + pos];
                    if gv == 0.0 {
                        continue;
                    }
                    for &(idx, w) in neigh {
                        grads.accum(fid, c * plane + idx, gv * w);
                    }
                }
            }
        }),
    ))
}

/// r^3 equally spaced grid points in the box frame, corners inset by half a
/// grid step; coordinates in box-local units.
pub fn roi_grid_points(box3d: &Box3D, r: usize) -> Vec<[f64; 3]> {
    let (sin_t, cos_t) = box3d.yaw.sin_cos();
    let frac = |i: usize| (i as f64 + 0.5) / r as f64 - 0.5;
    let mut pts = Vec::with_capacity(r * r * r);
    for i in 0..r {
        for j in 0..r {
            for k in 0..r {
                let lx = frac(i) * box3d.l;
                let ly = frac(j) * box3d.w;
                let lz = frac(k) * box3d.h;
                pts.push([
                    box3d.cx + cos_t * lx - sin_t * ly,
                    box3d.cy + sin_t * lx + cos_t * ly,
                    box3d.cz + lz,
                ]);
            }
        }
    }
    pts
}

/// Gather camera features at the projections of the r^3 RoI grid points and
/// encode them with a shared set encoder (affine + ReLU + max pool), one
/// output segment per camera. A box invisible to every camera yields a zero
/// vector.
pub fn roi_grid_camera_pool(
    g: &mut Graph,
    box3d: &Box3D,
    r: usize,
    camera_features: &[Var],
    calibs: &[CalibrationSet],
    config: &ProjectionConfig,
    enc_w: Var,
    enc_b: Var,
) -> Result<Var> {
    if r == 0 {
        return Err(CvfError::InvalidArgument("RoI grid resolution must be >= 1".into()));
    }
    if camera_features.len() != calibs.len() {
        return Err(CvfError::InvalidArgument(
            "need one calibration per camera".into(),
        ));
    }
    let width = g.value(enc_b).numel();
    let points = roi_grid_points(box3d, r);
    let n_pts = points.len();
    let mut any_visible = false;
    let mut segments: Vec<Var> = Vec::with_capacity(camera_features.len());
    for (cam, &feat) in camera_features.iter().enumerate() {
        let shape = g.value(feat).shape().to_vec();
        let (channels, fh, fw) = (shape[0], shape[1], shape[2]);
        let plane = fh * fw;
        // gather matrix [n_pts, C]; invisible points stay zero rows
        let mut gathers: Vec<(usize, Vec<(usize, f64)>)> = Vec::new();
        let mut visible_here = false;
        for (pi, p) in points.iter().enumerate() {
            let v = nalgebra::Vector3::new(p[0], p[1], p[2]);
            let pix = match project_to_image(&v, &calibs[cam]) {
                Projection::InFront(px) => px,
                Projection::BehindCamera => continue,
            };
            let fx = pix.x / config.feature_stride - 0.5;
            let fy = pix.y / config.feature_stride - 0.5;
            let st = interp_weights(fx, fy, config.mode);
            let in_map = st.pixels.iter().all(|&(px, py)| {
                px >= 0 && py >= 0 && (px as usize) < fw && (py as usize) < fh
            });
            if !in_map {
                continue;
            }
            visible_here = true;
            gathers.push((
                pi,
                st.pixels
                    .iter()
                    .zip(st.weights.iter())
                    .map(|(&(px, py), &w)| (py as usize * fw + px as usize, w))
                    .collect(),
            ));
        }
        any_visible |= visible_here;
        if !visible_here {
            segments.push(g.leaf(Tensor::zeros(vec![width])));
            continue;
        }
        let mut data = vec![0.0; n_pts * channels];
        {
            let f = g.value(feat).data();
            for (pi, neigh) in &gathers {
                for c in 0..channels {
                    let mut acc = 0.0;
                    for &(idx, w) in neigh {
                        acc += w * f[c * plane + idx];
                    }
                    data[pi * channels + c] = acc;
                }
            }
        }
        let fid = feat.id();
        let gathered = g.record(
            "roi_camera_gather",
            vec![feat],
            Tensor::new(vec![n_pts, channels], data)?,
            Box::new(move |_, og, grads| {
                for (pi, neigh) in &gathers {
                    for c in 0..channels {
                        let gv = og[pi * channels + c];
                        if gv == 0.0 {
                            continue;
                        }
                        for &(idx, w) in neigh {
                            grads.accum(fid, c * plane + idx, gv * w);
                        }
                    }
                }
            }),
        );
        let a = g.linear(gathered, enc_w, enc_b)?;
        let rl = g.relu(a);
        segments.push(g.max_over_set(rl)?);
    }
    if !any_visible {
        return Ok(g.leaf(Tensor::zeros(vec![width * camera_features.len()])));
    }
    if segments.len() == 1 {
        return Ok(segments[0]);
    }
    g.concat_flat(&segments)
}

/// Pool multi-scale LiDAR BEV features for a box: per scale, rotated RoI
/// align then a per-scale set encoder over the G^2 aligned cells;
/// concatenated over scales.
pub fn roi_lidar_pool(
    g: &mut Graph,
    maps: &[BevMap],
    box3d: &Box3D,
    grid: usize,
    mode: InterpMode,
    encoders: &[(Var, Var)],
) -> Result<Var> {
    if maps.is_empty() || maps.len() != encoders.len() {
        return Err(CvfError::InvalidArgument(format!(
            "need one encoder per scale ({} maps, {} encoders)",
            maps.len(),
            encoders.len()
        )));
    }
    let mut segments = Vec::with_capacity(maps.len());
    for (map, &(w, b)) in maps.iter().zip(encoders) {
        let aligned = rotated_roi_align(g, map, box3d, grid, mode)?;
        let channels = g.value(aligned).shape()[0];
        let flat = g.reshape(aligned, vec![channels, grid * grid])?;
        let set = g.transpose2d(flat)?; // [G^2, C]
        let a = g.linear(set, w, b)?;
        let rl = g.relu(a);
        segments.push(g.max_over_set(rl)?);
    }
    if segments.len() == 1 {
        return Ok(segments[0]);
    }
    g.concat_flat(&segments)
}

// ---------------------------------------------------------------------------
// Refinement head

#[derive(Debug, Clone, Copy)]
pub struct RefineHeadParams {
    pub fc1_w: Var,
    pub fc1_b: Var,
    pub fc2_w: Var,
    pub fc2_b: Var,
}

pub fn init_refine_params(store: &mut ParamStore, in_dim: usize, hidden: usize, seed: u64) {
    store.init_uniform("refine.fc1.w", vec![in_dim, hidden], in_dim, seed);
    store.init_zeros("refine.fc1.b", vec![hidden]);
    // Output layer starts at zero so refinement is the identity until the
    // head has seen enough proposals to beat it.
    store.init_zeros("refine.fc2.w", vec![hidden, 8]);
    store.init_zeros("refine.fc2.b", vec![8]);
}

pub fn attach_refine_params(store: &ParamStore, g: &mut Graph) -> Result<RefineHeadParams> {
    Ok(RefineHeadParams {
        fc1_w: store.attach(g, "refine.fc1.w")?,
        fc1_b: store.attach(g, "refine.fc1.b")?,
        fc2_w: store.attach(g, "refine.fc2.w")?,
        fc2_b: store.attach(g, "refine.fc2.b")?,
    })
}

/// Confidence logit [1] and 7-dim refinement residual from the concatenated
/// RoI features.
pub fn refine_head(
    g: &mut Graph,
    roi_joint: Var,
    lidar_vec: Var,
    cam_vec: Var,
    params: &RefineHeadParams,
) -> Result<(Var, Var)> {
    let n = g.value(roi_joint).numel();
    let flat_joint = g.reshape(roi_joint, vec![n])?;
    let cat = g.concat_flat(&[flat_joint, lidar_vec, cam_vec])?;
    let d = g.value(cat).numel();
    let row = g.reshape(cat, vec![1, d])?;
    let h = g.linear(row, params.fc1_w, params.fc1_b)?;
    let h = g.relu(h);
    let out = g.linear(h, params.fc2_w, params.fc2_b)?;
    let flat = g.reshape(out, vec![8])?;
    let conf = g.select(flat, &[0])?;
    let res = g.select(flat, &[1, 2, 3, 4, 5, 6, 7])?;
    Ok((conf, res))
}

/// Soft IoU target for the confidence refinement loss: a linear ramp from
/// `lo` to `hi` clamped to [0, 1].
pub fn iou_soft_target(iou: f64, lo: f64, hi: f64) -> f64 {
    ((iou - lo) / (hi - lo)).clamp(0.0, 1.0)
}

/// Binary cross-entropy between predicted confidences and soft targets.
pub fn bce_loss(g: &mut Graph, probs: Var, targets: &[f64]) -> Result<Var> {
    let t = g.leaf(Tensor::new(vec![targets.len()], targets.to_vec())?);
    let logp = g.ln_clamped(probs);
    let term1 = g.mul(t, logp)?;
    let negp = g.mul_const(probs, -1.0);
    let one_minus_p = g.add_const(negp, 1.0);
    let log1mp = g.ln_clamped(one_minus_p);
    let negt = g.mul_const(t, -1.0);
    let one_minus_t = g.add_const(negt, 1.0);
    let term2 = g.mul(one_minus_t, log1mp)?;
    let s = g.add(term1, term2)?;
    let m = g.mean_all(s);
    Ok(g.mul_const(m, -1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::iou_3d;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut impl Rng, shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn zero_rpn(g: &mut Graph, c_in: usize, trunk: usize) -> RpnHeadParams {
        RpnHeadParams {
            trunk_w: g.param(Tensor::zeros(vec![trunk, c_in, 3, 3])),
            trunk_b: g.param(Tensor::zeros(vec![trunk])),
            cls_w: g.param(Tensor::zeros(vec![2, trunk, 1, 1])),
            cls_b: g.param(Tensor::zeros(vec![2])),
            reg_w: g.param(Tensor::zeros(vec![14, trunk, 1, 1])),
            reg_b: g.param(Tensor::zeros(vec![14])),
        }
    }

    #[test]
    fn zero_head_scores_half_and_decodes_anchors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let f = g.leaf(rand_tensor(&mut rng, vec![3, 4, 4]));
        let params = zero_rpn(&mut g, 3, 5);
        let out = rpn_head(&mut g, f, &params).unwrap();
        assert_eq!(g.value(out.logits).shape(), &[2, 4, 4]);
        assert_eq!(g.value(out.residuals).shape(), &[14, 4, 4]);
        assert!(g.value(out.logits).data().iter().all(|&v| v == 0.0));

        let anchors = generate_anchors(4, 4, [0.0, 0.0], 2.0, &AnchorSpec::default());
        assert_eq!(anchors.len(), 32);
        let props =
            decode_proposals(g.value(out.logits), g.value(out.residuals), &anchors).unwrap();
        for (p, a) in props.iter().zip(&anchors) {
            assert_eq!(p.objectness, 0.5);
            assert!((p.box3d.cx - a.cx).abs() < 1e-12);
            assert!((p.box3d.w - a.w).abs() < 1e-12);
            assert!((p.box3d.yaw - a.yaw).abs() < 1e-12);
        }
    }

    #[test]
    fn nms_trivial_cases() {
        let b = Box3D::new(0.0, 0.0, 0.0, 1.6, 3.9, 1.5, 0.2).unwrap();
        let single = vec![Proposal {
            box3d: b,
            objectness: 0.7,
            anchor_index: 0,
        }];
        assert_eq!(nms(&single, 0.7, 100).len(), 1);

        let two = vec![
            Proposal {
                box3d: b,
                objectness: 0.9,
                anchor_index: 0,
            },
            Proposal {
                box3d: b,
                objectness: 0.8,
                anchor_index: 1,
            },
        ];
        let kept = nms(&two, 0.7, 100);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].objectness, 0.9);
    }

    /// Exhaustive reference: repeatedly pick the best-scored unsuppressed
    /// proposal and mark all overlapping ones, scanning the full list each
    /// round.
    pub(crate) fn nms_oracle(
        proposals: &[Proposal],
        iou_threshold: f64,
        max_keep: usize,
    ) -> Vec<usize> {
        let mut suppressed = vec![false; proposals.len()];
        let mut taken = vec![false; proposals.len()];
        let mut kept = Vec::new();
        while kept.len() < max_keep {
            let mut best: Option<usize> = None;
            for i in 0..proposals.len() {
                if suppressed[i] || taken[i] {
                    continue;
                }
                best = match best {
                    None => Some(i),
                    Some(j) if proposals[i].objectness > proposals[j].objectness => Some(i),
                    b => b,
                };
            }
            let Some(i) = best else { break };
            taken[i] = true;
            kept.push(i);
            for j in 0..proposals.len() {
                if !taken[j]
                    && !suppressed[j]
                    && bev_iou(&proposals[i].box3d, &proposals[j].box3d) > iou_threshold
                {
                    suppressed[j] = true;
                }
            }
        }
        kept
    }

    #[test]
    fn nms_matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let proposals: Vec<Proposal> = (0..50)
                .map(|i| Proposal {
                    box3d: Box3D::new(
                        rng.gen_range(-6.0..6.0),
                        rng.gen_range(-6.0..6.0),
                        0.0,
                        rng.gen_range(1.0..2.5),
                        rng.gen_range(2.0..5.0),
                        1.5,
                        rng.gen_range(-3.1..3.1),
                    )
                    .unwrap(),
                    objectness: rng.gen_range(0.0..1.0),
                    anchor_index: i,
                })
                .collect();
            let kept = nms(&proposals, 0.5, 20);
            let oracle = nms_oracle(&proposals, 0.5, 20);
            let kept_idx: Vec<usize> = kept.iter().map(|p| p.anchor_index).collect();
            assert_eq!(kept_idx, oracle);
        }
    }

    #[test]
    fn assignment_identity_and_empty_scene() {
        let anchors = generate_anchors(4, 4, [0.0, -4.0], 2.0, &AnchorSpec::default());
        let gt = anchors[5];
        let assigned = assign_targets(&anchors, &[gt], 0.6, 0.45).unwrap();
        match assigned[5] {
            AnchorTarget::Positive { gt: 0, residual } => {
                assert!(residual.iter().all(|&v| v.abs() < 1e-12));
            }
            other => panic!("expected positive identity assignment, got {other:?}"),
        }
        let empty = assign_targets(&anchors, &[], 0.6, 0.45).unwrap();
        assert!(empty.iter().all(|t| *t == AnchorTarget::Negative));
    }

    #[test]
    fn assignment_matches_iou_matrix_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let anchors = generate_anchors(6, 6, [0.0, -6.0], 2.0, &AnchorSpec::default());
        for _ in 0..20 {
            let gts: Vec<Box3D> = (0..3)
                .map(|_| {
                    Box3D::new(
                        rng.gen_range(1.0..11.0),
                        rng.gen_range(-5.0..5.0),
                        -1.0,
                        rng.gen_range(1.4..1.8),
                        rng.gen_range(3.5..4.3),
                        1.56,
                        rng.gen_range(-3.1..3.1),
                    )
                    .unwrap()
                })
                .collect();
            let (pos_t, neg_t) = (0.5, 0.35);
            let got = assign_targets(&anchors, &gts, pos_t, neg_t).unwrap();

            // exhaustive oracle over the IoU matrix
            let iou: Vec<Vec<f64>> = anchors
                .iter()
                .map(|a| gts.iter().map(|g| bev_iou(a, g)).collect())
                .collect();
            for (ai, row) in iou.iter().enumerate() {
                let best = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let best_gt = row.iter().position(|&v| v == best).unwrap();
                let forced = (0..gts.len()).any(|gi| {
                    let col_max = iou.iter().map(|r| r[gi]).fold(f64::NEG_INFINITY, f64::max);
                    iou[ai][gi] == col_max
                        && iou.iter().position(|r| r[gi] == col_max).unwrap() == ai
                });
                match got[ai] {
                    AnchorTarget::Positive { .. } => {
                        assert!(best >= pos_t || forced, "anchor {ai} wrongly positive");
                    }
                    AnchorTarget::Negative => {
                        assert!(best <= neg_t && !forced, "anchor {ai} wrongly negative");
                    }
                    AnchorTarget::Ignore => {
                        assert!(best > neg_t && best < pos_t && !forced);
                    }
                }
                if let AnchorTarget::Positive { gt, .. } = got[ai] {
                    if best >= pos_t && !forced {
                        assert_eq!(gt, best_gt);
                    }
                }
            }
        }
    }

    #[test]
    fn focal_loss_examples() {
        let w = LossWeights::default();
        let mut g = Graph::new();
        let ones = g.leaf(Tensor::filled(vec![4], 1.0));
        let l = focal_loss(&mut g, ones, &w).unwrap();
        assert!(g.value(l).data()[0].abs() < 1e-12);

        let mut g = Graph::new();
        let half = g.leaf(Tensor::scalar(0.5));
        let l = focal_loss(&mut g, half, &w).unwrap();
        let expect = 0.25 * 0.25 * f64::ln(2.0);
        assert!((g.value(l).data()[0] - expect).abs() < 1e-12);
        assert!((expect - 0.043322).abs() < 1e-6);

        // duplicating boxes leaves the mean unchanged
        let mut g = Graph::new();
        let p = g.leaf(Tensor::new(vec![2], vec![0.5, 0.5]).unwrap());
        let l2 = focal_loss(&mut g, p, &w).unwrap();
        assert!((g.value(l2).data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn focal_degenerates_to_nll_at_gamma_zero_alpha_one() {
        let w = LossWeights {
            alpha: 1.0,
            gamma: 0.0,
            ..LossWeights::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let probs: Vec<f64> = (0..16).map(|_| rng.gen_range(0.01..0.99)).collect();
        let mut g = Graph::new();
        let p = g.leaf(Tensor::new(vec![16], probs.clone()).unwrap());
        let l = focal_loss(&mut g, p, &w).unwrap();
        let nll = -probs.iter().map(|v| v.ln()).sum::<f64>() / 16.0;
        assert!((g.value(l).data()[0] - nll).abs() < 1e-12);
    }

    #[test]
    fn reg_loss_examples() {
        let mut g = Graph::new();
        let pred = g.leaf(Tensor::new(vec![6], vec![0.5; 6]).unwrap());
        let l = reg_loss_loc(&mut g, pred, &[0.0; 6]).unwrap();
        assert!((g.value(l).data()[0] - 0.125).abs() < 1e-12);

        let mut g = Graph::new();
        let pred = g.leaf(Tensor::new(vec![2], vec![1.0, -0.3]).unwrap());
        let l = reg_loss_loc(&mut g, pred, &[1.0, -0.3]).unwrap();
        assert_eq!(g.value(l).data()[0], 0.0);

        // angle error of exactly pi is unpenalized by the sine residual
        let mut g = Graph::new();
        let pred = g.leaf(Tensor::new(vec![1], vec![std::f64::consts::PI]).unwrap());
        let l = reg_loss_angle(&mut g, pred, &[0.0]).unwrap();
        assert!(g.value(l).data()[0].abs() < 1e-12);
    }

    #[test]
    fn weighted_sum_reproduces_paper_constants() {
        let w = LossWeights::default();
        let mut g = Graph::new();
        let cls = g.leaf(Tensor::scalar(1.0));
        let zero = g.leaf(Tensor::scalar(0.0));
        let total = weighted_loss(&mut g, cls, zero, zero, &w).unwrap();
        assert_eq!(g.value(total).data()[0], 1.0);

        let mut g = Graph::new();
        let cls = g.leaf(Tensor::scalar(0.0));
        let a = g.leaf(Tensor::scalar(0.25));
        let b = g.leaf(Tensor::scalar(0.25));
        let total = weighted_loss(&mut g, cls, a, b, &w).unwrap();
        assert_eq!(g.value(total).data()[0], 1.0);
    }

    #[test]
    fn roi_align_single_cell_and_constant_map() {
        // map with distinct per-cell values, 1 channel, 4x4 cells of 1m
        let mut g = Graph::new();
        let data: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let var = g.leaf(Tensor::new(vec![1, 4, 4], data).unwrap());
        let map = BevMap {
            var,
            origin: [0.0, 0.0],
            cell_size: 1.0,
        };
        // axis-aligned box exactly covering cell (row 2, col 1)
        let b = Box3D::new(1.5, 2.5, 0.0, 1.0, 1.0, 1.0, 0.0).unwrap();
        let a = rotated_roi_align(&mut g, &map, &b, 1, InterpMode::InverseDistance).unwrap();
        assert_eq!(g.value(a).data(), &[9.0]);

        let cvar = g.leaf(Tensor::filled(vec![2, 4, 4], 3.25));
        let cmap = BevMap {
            var: cvar,
            origin: [0.0, 0.0],
            cell_size: 1.0,
        };
        let b2 = Box3D::new(2.0, 2.0, 0.0, 1.5, 2.0, 1.0, 0.6).unwrap();
        let a2 = rotated_roi_align(&mut g, &cmap, &b2, 4, InterpMode::InverseDistance).unwrap();
        for &v in g.value(a2).data() {
            assert!((v - 3.25).abs() < 1e-12);
        }
    }

    #[test]
    fn roi_align_rotates_with_content() {
        // rotating a grid-compatible map and the box by 90 degrees permutes
        // the pooled output accordingly
        let n = 8usize;
        let mut base = Tensor::zeros(vec![1, n, n]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for v in base.data_mut() {
            *v = rng.gen_range(0.0..1.0);
        }
        // rotate content by 90 deg about the map center: (r,c) -> (c, n-1-r)
        let mut rot = Tensor::zeros(vec![1, n, n]);
        for r in 0..n {
            for c in 0..n {
                rot.data_mut()[c * n + (n - 1 - r)] = base.data()[r * n + c];
            }
        }
        let mut g = Graph::new();
        let mb = BevMap {
            var: g.leaf(base),
            origin: [-4.0, -4.0],
            cell_size: 1.0,
        };
        let mr = BevMap {
            var: g.leaf(rot),
            origin: [-4.0, -4.0],
            cell_size: 1.0,
        };
        let b = Box3D::new(0.6, -0.4, 0.0, 1.5, 2.5, 1.0, 0.3).unwrap();
        let b_rot = Box3D::new(0.4, 0.6, 0.0, 1.5, 2.5, 1.0, 0.3 + std::f64::consts::FRAC_PI_2)
            .unwrap();
        let pa = rotated_roi_align(&mut g, &mb, &b, 3, InterpMode::InverseDistance).unwrap();
        let pb = rotated_roi_align(&mut g, &mr, &b_rot, 3, InterpMode::InverseDistance).unwrap();
        for (x, y) in g.value(pa).data().iter().zip(g.value(pb).data()) {
            assert!((x - y).abs() < 1e-9, "{x} vs {y}");
        }
    }

    #[test]
    fn roi_grid_points_equal_spacing() {
        let b = Box3D::new(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0).unwrap();
        let pts = roi_grid_points(&b, 3);
        assert_eq!(pts.len(), 27);
        let mut xs: Vec<f64> = pts.iter().map(|p| p[0]).collect();
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        xs.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
        let expect = [-1.0 / 3.0, 0.0, 1.0 / 3.0];
        for (x, e) in xs.iter().zip(expect) {
            assert!((x - e).abs() < 1e-12);
        }
    }

    #[test]
    fn refine_head_zero_params_give_neutral_output() {
        let mut g = Graph::new();
        let joint = g.leaf(Tensor::filled(vec![2, 3, 3], 0.4));
        let lv = g.leaf(Tensor::filled(vec![4], 0.1));
        let cv = g.leaf(Tensor::filled(vec![4], 0.2));
        let params = RefineHeadParams {
            fc1_w: g.param(Tensor::zeros(vec![26, 6])),
            fc1_b: g.param(Tensor::zeros(vec![6])),
            fc2_w: g.param(Tensor::zeros(vec![6, 8])),
            fc2_b: g.param(Tensor::zeros(vec![8])),
        };
        let (conf, res) = refine_head(&mut g, joint, lv, cv, &params).unwrap();
        assert_eq!(g.value(conf).numel(), 1);
        assert_eq!(g.value(res).numel(), 7);
        let p = g.sigmoid(conf);
        assert_eq!(g.value(p).data()[0], 0.5);
        assert!(g.value(res).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn losses_pass_finite_difference_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w = LossWeights::default();
        // logits feeding focal + bce + reg stack
        let logits0: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let targets: Vec<f64> = (0..6).map(|_| rng.gen_range(0.0..1.0)).collect();
        let loss_of = |lv: &[f64]| -> (f64, Vec<f64>) {
            let mut g = Graph::new();
            let x = g.param(Tensor::new(vec![6], lv.to_vec()).unwrap());
            let p = g.sigmoid(x);
            let f = focal_loss(&mut g, p, &w).unwrap();
            let b = bce_loss(&mut g, p, &targets).unwrap();
            let r = reg_loss_angle(&mut g, x, &targets).unwrap();
            let t1 = g.add(f, b).unwrap();
            let total = g.add(t1, r).unwrap();
            let v = g.value(total).data()[0];
            g.backward(total).unwrap();
            (v, g.grad(x).unwrap().to_vec())
        };
        let (_, analytic) = loss_of(&logits0);
        let h = 1e-5;
        for i in 0..6 {
            let mut p = logits0.clone();
            p[i] += h;
            let mut m = logits0.clone();
            m[i] -= h;
            let num = (loss_of(&p).0 - loss_of(&m).0) / (2.0 * h);
            let err = (analytic[i] - num).abs() / f64::max(1.0, num.abs().max(analytic[i].abs()));
            assert!(err < 1e-4, "loss grad {i}: {} vs {num}", analytic[i]);
        }
    }

    #[test]
    fn pool_outputs_and_invariances() {
        use crate::cross_view::ProjectionConfig;
        use nalgebra::Matrix3x4;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut tr = Matrix3x4::zeros();
        tr[(0, 1)] = -1.0;
        tr[(1, 2)] = -1.0;
        tr[(2, 0)] = 1.0;
        let calib = CalibrationSet {
            tr,
            ..CalibrationSet::identity_with_pinhole(160.0, 128.0, 64.0)
        };
        let cfg = ProjectionConfig::default();
        let b = Box3D::new(8.0, 0.5, 0.0, 1.6, 3.9, 1.5, 0.4).unwrap();

        let mut g = Graph::new();
        let feat = g.leaf(rand_tensor(&mut rng, vec![3, 16, 32]));
        let enc_w = g.leaf(rand_tensor(&mut rng, vec![3, 5]));
        let enc_b = g.leaf(rand_tensor(&mut rng, vec![5]));
        let v = roi_grid_camera_pool(&mut g, &b, 3, &[feat], &[calib.clone()], &cfg, enc_w, enc_b)
            .unwrap();
        assert_eq!(g.value(v).numel(), 5);

        // fully invisible box gives a zero vector
        let behind = Box3D::new(-20.0, 0.0, 0.0, 1.6, 3.9, 1.5, 0.0).unwrap();
        let v0 = roi_grid_camera_pool(&mut g, &behind, 3, &[feat], &[calib.clone()], &cfg, enc_w, enc_b)
            .unwrap();
        assert!(g.value(v0).data().iter().all(|&x| x == 0.0));

        // r=1 degenerates to the encoder of the gathered center feature
        let v1 = roi_grid_camera_pool(&mut g, &b, 1, &[feat], &[calib], &cfg, enc_w, enc_b).unwrap();
        assert_eq!(g.value(v1).numel(), 5);

        // multi-scale LiDAR pool: output length = scales x width
        let m1 = BevMap {
            var: g.leaf(rand_tensor(&mut rng, vec![2, 8, 8])),
            origin: [0.0, -4.0],
            cell_size: 1.0,
        };
        let m2 = BevMap {
            var: g.leaf(rand_tensor(&mut rng, vec![4, 4, 4])),
            origin: [0.0, -4.0],
            cell_size: 2.0,
        };
        let e1 = (g.leaf(rand_tensor(&mut rng, vec![2, 6])), g.leaf(rand_tensor(&mut rng, vec![6])));
        let e2 = (g.leaf(rand_tensor(&mut rng, vec![4, 6])), g.leaf(rand_tensor(&mut rng, vec![6])));
        let lb = Box3D::new(4.0, 0.0, 0.0, 1.6, 3.9, 1.5, 0.3).unwrap();
        let lv = roi_lidar_pool(
            &mut g,
            &[m1, m2],
            &lb,
            4,
            InterpMode::InverseDistance,
            &[e1, e2],
        )
        .unwrap();
        assert_eq!(g.value(lv).numel(), 12);

        // all-zero maps with zero-bias encoders give zero output
        let z1 = BevMap {
            var: g.leaf(Tensor::zeros(vec![2, 8, 8])),
            origin: [0.0, -4.0],
            cell_size: 1.0,
        };
        let ez = (g.leaf(rand_tensor(&mut rng, vec![2, 6])), g.leaf(Tensor::zeros(vec![6])));
        let zv = roi_lidar_pool(&mut g, &[z1], &lb, 4, InterpMode::InverseDistance, &[ez]).unwrap();
        assert!(g.value(zv).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn iou_soft_target_ramp() {
        assert_eq!(iou_soft_target(0.25, 0.25, 0.75), 0.0);
        assert_eq!(iou_soft_target(0.75, 0.25, 0.75), 1.0);
        assert!((iou_soft_target(0.5, 0.25, 0.75) - 0.5).abs() < 1e-12);
        assert_eq!(iou_soft_target(0.1, 0.25, 0.75), 0.0);
        assert_eq!(iou_soft_target(0.9, 0.25, 0.75), 1.0);
    }

    #[test]
    fn iou3d_is_used_for_refinement_targets() {
        let a = Box3D::new(0.0, 0.0, 0.0, 1.0, 1.0, 2.0, 0.0).unwrap();
        let mut b = a;
        b.cz = 1.0; // half vertical overlap
        let iou = iou_3d(&a, &b);
        assert!((iou - 1.0 / 3.0).abs() < 1e-12);
    }
}
