//! End-to-end pipeline assembly: parameter registry, the full scene forward
//! pass (voxel -> BEV backbone, camera -> projected BEV, gated fusion, RPN),
//! proposal refinement, the toy SGD trainer, and scene-level detection.

use crate::cross_view::{
    auto_calibrated_project, bev_camera_compress, CameraVoxelGrid, OffsetTiling, ProjectionConfig,
};
use crate::data::{RunConfig, SceneSample};
use crate::detect::{
    assign_targets, bce_loss, decode_proposals, generate_anchors, init_refine_params,
    init_rpn_params, iou_soft_target, nms, refine_head, reg_loss_angle, reg_loss_loc,
    roi_grid_camera_pool, roi_lidar_pool, rotated_roi_align, rpn_head, rpn_loss, Proposal,
    RefineHeadParams, RpnHeadParams, RpnOut,
};
use crate::error::{CvfError, Result};
use crate::eval::Detection;
use crate::fusion::{gated_fuse, init_gated_fusion_params, GatedFusionOut, GatedFusionParams};
use crate::geometry::{decode_box_residual, encode_box_residual, iou_3d, Box3D};
use crate::tensor::{checkpoint::ParamStore, Graph, Tensor, Var};
use crate::voxel::{bev_backbone, encode_voxels, init_backbone_params, scatter_bev, BevMap};

/// Backbone stage widths derived from the configured final channel count.
pub fn stage_channels(cfg: &RunConfig) -> [usize; 3] {
    [
        (cfg.bev_channels / 4).max(2),
        (cfg.bev_channels / 2).max(2),
        cfg.bev_channels,
    ]
}

/// Channels of the fused joint map.
pub fn joint_channels(cfg: &RunConfig) -> usize {
    cfg.camera_channels + cfg.bev_channels
}

/// Input width of the refinement head: flattened joint RoI plus the
/// three-scale LiDAR set vector plus one camera set vector per camera.
pub fn refine_in_dim(cfg: &RunConfig, n_cams: usize) -> usize {
    joint_channels(cfg) * cfg.roi_grid * cfg.roi_grid
        + 3 * cfg.set_width
        + n_cams * cfg.set_width
}

/// Register every pipeline parameter; existing entries are kept, so calling
/// this after a checkpoint load is a no-op.
pub fn init_pipeline(store: &mut ParamStore, cfg: &RunConfig, n_cams: usize, seed: u64) {
    let stages = stage_channels(cfg);
    init_backbone_params(store, cfg.voxel_channels, stages, seed);
    let tiling = OffsetTiling {
        tiles_y: cfg.offset_tiles_y,
        tiles_x: cfg.offset_tiles_x,
    };
    // offsets start at the calibration prior (zero shift)
    store.init_zeros("projection.offsets", tiling.shape());
    store.init_uniform(
        "cam_bev.compress.w",
        vec![cfg.camera_channels, cfg.camera_channels, 3, 3],
        cfg.camera_channels * 9,
        seed,
    );
    store.init_zeros("cam_bev.compress.b", vec![cfg.camera_channels]);
    init_gated_fusion_params(store, cfg.camera_channels, cfg.bev_channels, seed);
    init_rpn_params(store, joint_channels(cfg), cfg.rpn_trunk, seed);
    store.init_uniform(
        "roi_cam.enc.w",
        vec![cfg.camera_channels, cfg.set_width],
        cfg.camera_channels,
        seed,
    );
    store.init_zeros("roi_cam.enc.b", vec![cfg.set_width]);
    for (i, &c) in stages.iter().enumerate() {
        store.init_uniform(&format!("roi_lidar.enc{i}.w"), vec![c, cfg.set_width], c, seed);
        store.init_zeros(&format!("roi_lidar.enc{i}.b"), vec![cfg.set_width]);
    }
    init_refine_params(store, refine_in_dim(cfg, n_cams), cfg.refine_hidden, seed);
}

/// Attaches parameters and remembers their names so the trainer can collect
/// every gradient afterwards.
struct Registry {
    attached: Vec<(String, Var)>,
}

impl Registry {
    fn new() -> Self {
        Self { attached: Vec::new() }
    }

    fn attach(&mut self, store: &ParamStore, g: &mut Graph, name: &str) -> Result<Var> {
        if let Some((_, v)) = self.attached.iter().find(|(n, _)| n == name) {
            return Ok(*v);
        }
        let v = store.attach(g, name)?;
        self.attached.push((name.to_string(), v));
        Ok(v)
    }
}

/// Everything the detection and refinement stages need from one forward
/// pass.
pub struct ForwardOut {
    /// Backbone stage maps, coarsest (stride 8) last.
    pub stages: Vec<BevMap>,
    pub cam_bev: Var,
    pub fusion: GatedFusionOut,
    pub joint_map: BevMap,
    pub rpn: RpnOut,
    /// Camera feature leaves, zeroed in LiDAR-only mode.
    pub cam_features: Vec<Var>,
    pub roi_cam_enc: (Var, Var),
    pub roi_lidar_encs: Vec<(Var, Var)>,
    pub refine_params: RefineHeadParams,
    /// (name, var) of every attached parameter.
    pub attached: Vec<(String, Var)>,
}

/// Full scene forward: voxelize + encode + scatter + backbone on the LiDAR
/// side, auto-calibrated projection + compression on the camera side, gated
/// fusion, and the RPN head. `camera_on = false` replaces the camera
/// pipeline with exact zeros (LiDAR-only mode).
pub fn forward(
    g: &mut Graph,
    store: &ParamStore,
    sample: &SceneSample,
    cfg: &RunConfig,
    camera_on: bool,
) -> Result<ForwardOut> {
    let spec = cfg.voxel_spec()?;
    let (rows, cols) = spec.bev_shape();
    let mut reg = Registry::new();

    // LiDAR branch
    let scene = crate::voxel::voxelize(&sample.points, &spec, cfg.seed);
    let dense = if scene.voxels.is_empty() {
        let [n_x, n_y, _] = spec.dims();
        g.leaf(Tensor::zeros(vec![cfg.voxel_channels, n_y, n_x]))
    } else {
        let enc_w = reg.attach(store, g, "voxel_enc.w")?;
        let enc_b = reg.attach(store, g, "voxel_enc.b")?;
        let encoded = encode_voxels(g, &scene, enc_w, enc_b)?;
        scatter_bev(g, &encoded, &spec, cfg.voxel_channels)?
    };
    let mut convs = Vec::with_capacity(3);
    for i in 0..3 {
        convs.push((
            reg.attach(store, g, &format!("bev_backbone.conv{i}.w"))?,
            reg.attach(store, g, &format!("bev_backbone.conv{i}.b"))?,
        ));
    }
    let stages = bev_backbone(g, dense, &spec, &convs)?;
    let lidar_bev = stages[2];

    // camera branch
    let cam_features: Vec<Var> = if camera_on {
        sample
            .camera_features
            .iter()
            .map(|t| g.leaf(t.clone()))
            .collect()
    } else {
        sample
            .camera_features
            .iter()
            .map(|t| g.leaf(Tensor::zeros(t.shape().to_vec())))
            .collect()
    };
    let proj_cfg = ProjectionConfig {
        feature_stride: cfg.feature_stride,
        mode: cfg.interp,
    };
    let cam_bev = if camera_on {
        let grid = CameraVoxelGrid::from_spec(&spec, cfg.z_slabs)?;
        let tiling = OffsetTiling {
            tiles_y: cfg.offset_tiles_y,
            tiles_x: cfg.offset_tiles_x,
        };
        let offsets = reg.attach(store, g, "projection.offsets")?;
        let projected = auto_calibrated_project(
            g,
            &cam_features,
            &sample.calibs,
            &grid,
            Some((offsets, tiling)),
            &proj_cfg,
        )?;
        let w = reg.attach(store, g, "cam_bev.compress.w")?;
        let b = reg.attach(store, g, "cam_bev.compress.b")?;
        bev_camera_compress(g, projected, w, b)?
    } else {
        g.leaf(Tensor::zeros(vec![cfg.camera_channels, rows, cols]))
    };

    // fusion + RPN
    let fusion_params = GatedFusionParams {
        conv_cam_w: reg.attach(store, g, "fusion.conv_cam.w")?,
        conv_cam_b: reg.attach(store, g, "fusion.conv_cam.b")?,
        conv_lidar_w: reg.attach(store, g, "fusion.conv_lidar.w")?,
        conv_lidar_b: reg.attach(store, g, "fusion.conv_lidar.b")?,
    };
    let fusion = gated_fuse(g, cam_bev, lidar_bev.var, &fusion_params)?;
    let joint_map = BevMap {
        var: fusion.joint,
        origin: lidar_bev.origin,
        cell_size: lidar_bev.cell_size,
    };
    let rpn_params = RpnHeadParams {
        trunk_w: reg.attach(store, g, "rpn.trunk.w")?,
        trunk_b: reg.attach(store, g, "rpn.trunk.b")?,
        cls_w: reg.attach(store, g, "rpn.cls.w")?,
        cls_b: reg.attach(store, g, "rpn.cls.b")?,
        reg_w: reg.attach(store, g, "rpn.reg.w")?,
        reg_b: reg.attach(store, g, "rpn.reg.b")?,
    };
    let rpn = rpn_head(g, fusion.joint, &rpn_params)?;

    // RoI / refinement parameters, attached up front so the trainer sees them
    let roi_cam_enc = (
        reg.attach(store, g, "roi_cam.enc.w")?,
        reg.attach(store, g, "roi_cam.enc.b")?,
    );
    let mut roi_lidar_encs = Vec::with_capacity(3);
    for i in 0..3 {
        roi_lidar_encs.push((
            reg.attach(store, g, &format!("roi_lidar.enc{i}.w"))?,
            reg.attach(store, g, &format!("roi_lidar.enc{i}.b"))?,
        ));
    }
    let refine_params = RefineHeadParams {
        fc1_w: reg.attach(store, g, "refine.fc1.w")?,
        fc1_b: reg.attach(store, g, "refine.fc1.b")?,
        fc2_w: reg.attach(store, g, "refine.fc2.w")?,
        fc2_b: reg.attach(store, g, "refine.fc2.b")?,
    };

    Ok(ForwardOut {
        stages,
        cam_bev,
        fusion,
        joint_map,
        rpn,
        cam_features,
        roi_cam_enc,
        roi_lidar_encs,
        refine_params,
        attached: reg.attached,
    })
}

/// BEV anchors matching the forward pass's joint map layout.
pub fn scene_anchors(cfg: &RunConfig) -> Result<Vec<Box3D>> {
    let spec = cfg.voxel_spec()?;
    let (rows, cols) = spec.bev_shape();
    Ok(generate_anchors(
        rows,
        cols,
        [spec.range_min[0], spec.range_min[1]],
        spec.voxel_size[0] * 8.0,
        &cfg.anchor,
    ))
}

/// Refinement head output for one proposal.
pub struct RefinedProposal {
    pub proposal: Proposal,
    pub conf_logit: Var,
    pub residual: Var,
    pub refined: Box3D,
    pub confidence: f64,
}

/// Pool joint, LiDAR, and camera features around a proposal and run the
/// refinement head.
pub fn refine_proposal(
    g: &mut Graph,
    fwd: &ForwardOut,
    sample: &SceneSample,
    cfg: &RunConfig,
    proposal: &Proposal,
) -> Result<RefinedProposal> {
    let roi_joint = rotated_roi_align(g, &fwd.joint_map, &proposal.box3d, cfg.roi_grid, cfg.interp)?;
    let lidar_vec = roi_lidar_pool(
        g,
        &fwd.stages,
        &proposal.box3d,
        cfg.roi_grid,
        cfg.interp,
        &fwd.roi_lidar_encs,
    )?;
    let proj_cfg = ProjectionConfig {
        feature_stride: cfg.feature_stride,
        mode: cfg.interp,
    };
    let cam_vec = roi_grid_camera_pool(
        g,
        &proposal.box3d,
        cfg.roi_r,
        &fwd.cam_features,
        &sample.calibs,
        &proj_cfg,
        fwd.roi_cam_enc.0,
        fwd.roi_cam_enc.1,
    )?;
    let (conf_logit, residual) = refine_head(g, roi_joint, lidar_vec, cam_vec, &fwd.refine_params)?;
    let res_vals = g.value(residual).data();
    let res: [f64; 7] = res_vals.try_into().map_err(|_| {
        CvfError::Shape(format!("refinement residual length {}", res_vals.len()))
    })?;
    let refined = decode_box_residual(&res, &proposal.box3d)?;
    let logit = g.value(conf_logit).data()[0];
    Ok(RefinedProposal {
        proposal: *proposal,
        conf_logit,
        residual,
        refined,
        confidence: 1.0 / (1.0 + (-logit).exp()),
    })
}

/// Proposals fed to the refinement stage during training: NMS survivors
/// plus the decoded box of each ground truth's best anchor.
fn training_proposals(
    props: &[Proposal],
    anchors: &[Box3D],
    gts: &[Box3D],
    cfg: &RunConfig,
    cap: usize,
) -> Vec<Proposal> {
    let mut chosen = nms(props, cfg.nms_iou, cap);
    for gt in gts {
        let best = anchors
            .iter()
            .enumerate()
            .max_by(|(_, a), (_, b)| {
                crate::geometry::bev_iou(a, gt)
                    .partial_cmp(&crate::geometry::bev_iou(b, gt))
                    .unwrap()
            })
            .map(|(i, _)| i);
        if let Some(ai) = best {
            if !chosen.iter().any(|p| p.anchor_index == ai) {
                chosen.push(props[ai]);
            }
        }
    }
    chosen
}

/// One step's scalar losses.
#[derive(Debug, Clone, Copy)]
pub struct StepLosses {
    pub rpn_total: f64,
    pub rpn_cls: f64,
    pub rpn_loc: f64,
    pub rpn_angle: f64,
    pub refine_total: f64,
    pub total: f64,
    pub mean_cam_attention: f64,
}

/// Build the full two-stage loss on an already-run forward pass. Returns
/// the loss Var (for backward) alongside its scalar components.
pub fn scene_loss(
    g: &mut Graph,
    fwd: &ForwardOut,
    sample: &SceneSample,
    cfg: &RunConfig,
    anchors: &[Box3D],
) -> Result<(Var, StepLosses)> {
    let assignment = assign_targets(
        anchors,
        &sample.gt_boxes,
        cfg.assign_pos_iou,
        cfg.assign_neg_iou,
    )?;
    let rpn = rpn_loss(g, &fwd.rpn, &assignment, &cfg.loss)?;

    // refinement stage on detached proposal boxes
    let props = decode_proposals(g.value(fwd.rpn.logits), g.value(fwd.rpn.residuals), anchors)?;
    let chosen = training_proposals(&props, anchors, &sample.gt_boxes, cfg, 8);
    let mut conf_logits = Vec::new();
    let mut conf_targets = Vec::new();
    let mut reg_terms: Vec<Var> = Vec::new();
    for p in &chosen {
        let refined = refine_proposal(g, fwd, sample, cfg, p)?;
        let (best_iou, best_gt) = sample
            .gt_boxes
            .iter()
            .map(|gt| iou_3d(&p.box3d, gt))
            .enumerate()
            .map(|(i, v)| (v, i))
            .fold((0.0, usize::MAX), |acc, cur| if cur.0 > acc.0 { cur } else { acc });
        conf_logits.push(refined.conf_logit);
        conf_targets.push(iou_soft_target(best_iou, cfg.iou_target_lo, cfg.iou_target_hi));
        if best_gt != usize::MAX && best_iou >= cfg.iou_target_lo {
            let target = encode_box_residual(&sample.gt_boxes[best_gt], &p.box3d)?;
            let loc = g.select(refined.residual, &[0, 1, 2, 3, 4, 5])?;
            let ang = g.select(refined.residual, &[6])?;
            let l_loc = reg_loss_loc(g, loc, &target[..6])?;
            let l_ang = reg_loss_angle(g, ang, &target[6..])?;
            let s = g.add(l_loc, l_ang)?;
            reg_terms.push(s);
        }
    }
    let refine_total = if chosen.is_empty() {
        g.leaf(Tensor::scalar(0.0))
    } else {
        let logits = g.concat_flat(&conf_logits)?;
        let probs = g.sigmoid(logits);
        let l_iou = bce_loss(g, probs, &conf_targets)?;
        let l_iou = g.mul_const(l_iou, cfg.loss.beta1);
        if reg_terms.is_empty() {
            l_iou
        } else {
            let mut reg_sum = reg_terms[0];
            for t in &reg_terms[1..] {
                reg_sum = g.add(reg_sum, *t)?;
            }
            let reg_mean = g.mul_const(reg_sum, cfg.loss.beta2 / reg_terms.len() as f64);
            g.add(l_iou, reg_mean)?
        }
    };

    let total = g.add(rpn.total, refine_total)?;
    let att = g.value(fwd.fusion.cam_attention);
    let mean_att = att.data().iter().sum::<f64>() / att.numel() as f64;
    let losses = StepLosses {
        rpn_total: g.value(rpn.total).data()[0],
        rpn_cls: rpn.cls_value,
        rpn_loc: rpn.loc_value,
        rpn_angle: rpn.angle_value,
        refine_total: g.value(refine_total).data()[0],
        total: g.value(total).data()[0],
        mean_cam_attention: mean_att,
    };
    Ok((total, losses))
}

/// Plain fixed-rate SGD over the full two-stage loss, cycling through the
/// given scenes round-robin (one scene per step).
pub fn train_set(
    store: &mut ParamStore,
    samples: &[SceneSample],
    cfg: &RunConfig,
    steps: usize,
    lr: f64,
    camera_on: bool,
) -> Result<Vec<StepLosses>> {
    if samples.is_empty() {
        return Err(crate::CvfError::Shape("training set is empty".into()));
    }
    init_pipeline(store, cfg, samples[0].calibs.len(), cfg.seed);
    let anchors = scene_anchors(cfg)?;
    let mut log = Vec::with_capacity(steps);
    for step in 0..steps {
        let sample = &samples[step % samples.len()];
        let mut g = Graph::new();
        let fwd = forward(&mut g, store, sample, cfg, camera_on)?;
        let (total, losses) = scene_loss(&mut g, &fwd, sample, cfg, &anchors)?;
        g.backward(total)?;
        for (name, var) in &fwd.attached {
            store.collect_grad_or_zero(&g, name, *var)?;
        }
        // parameters never attached this step (e.g. camera path off) keep
        // their values; give them explicit zero grads so the step is whole
        let names: Vec<String> = store.names().map(str::to_string).collect();
        for name in names {
            if !fwd.attached.iter().any(|(n, _)| *n == name) {
                let v = {
                    let t = store.get(&name).unwrap().clone();
                    g.leaf(t)
                };
                store.collect_grad_or_zero(&g, &name, v)?;
            }
        }
        store.sgd_step(lr)?;
        log.push(losses);
    }
    Ok(log)
}

/// Single-scene overfit: `train_set` on one sample.
pub fn train_toy(
    store: &mut ParamStore,
    sample: &SceneSample,
    cfg: &RunConfig,
    steps: usize,
    lr: f64,
    camera_on: bool,
) -> Result<Vec<StepLosses>> {
    train_set(store, std::slice::from_ref(sample), cfg, steps, lr, camera_on)
}

/// Detect on one scene: RPN proposals above the score threshold, rotated
/// NMS, then refinement of each survivor.
pub fn detect_scene(
    store: &ParamStore,
    sample: &SceneSample,
    cfg: &RunConfig,
    camera_on: bool,
) -> Result<Vec<Detection>> {
    let mut g = Graph::new();
    let fwd = forward(&mut g, store, sample, cfg, camera_on)?;
    let anchors = scene_anchors(cfg)?;
    let props = decode_proposals(g.value(fwd.rpn.logits), g.value(fwd.rpn.residuals), &anchors)?;
    let scored: Vec<Proposal> = props
        .into_iter()
        .filter(|p| p.objectness >= cfg.score_threshold)
        .collect();
    let kept = nms(&scored, cfg.nms_iou, cfg.max_detections);
    let mut out = Vec::with_capacity(kept.len());
    for p in &kept {
        let refined = refine_proposal(&mut g, &fwd, sample, cfg, p)?;
        out.push(Detection {
            box3d: refined.refined,
            score: p.objectness * refined.confidence,
            class: "Car".to_string(),
        });
    }
    // deterministic presentation order: score descending, insertion order
    let mut order: Vec<usize> = (0..out.len()).collect();
    order.sort_by(|&a, &b| {
        out[b]
            .score
            .partial_cmp(&out[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    Ok(order.into_iter().map(|i| out[i].clone()).collect())
}
