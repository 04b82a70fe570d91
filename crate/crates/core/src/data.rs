//! Scene ingestion and generation: KITTI velodyne/calib/label formats, the
//! seeded synthetic scene generator, joint point/box/calibration
//! augmentation, and flat key=value run configuration.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Matrix3x4, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cross_view::InterpMode;
use crate::detect::AnchorSpec;
use crate::detect::LossWeights;
use crate::error::{CvfError, Result};
use crate::geometry::{
    adjust_calibration, normalize_yaw, project_to_image, transform_cloud, Box3D, CalibrationSet,
    CloudTransform, LidarPoint, Projection,
};
use crate::tensor::Tensor;
use crate::voxel::VoxelGridSpec;

// ---------------------------------------------------------------------------
// Run configuration

/// Full run configuration. Defaults reproduce the reference KITTI car
/// constants; any field is overridable from a flat key=value file.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub voxel_min: [f64; 3],
    pub voxel_max: [f64; 3],
    pub voxel_size: [f64; 3],
    /// 0 disables the per-voxel cap.
    pub voxel_max_points: usize,
    pub anchor: AnchorSpec,
    pub loss: LossWeights,
    pub nms_iou: f64,
    pub assign_pos_iou: f64,
    pub assign_neg_iou: f64,
    pub iou_target_lo: f64,
    pub iou_target_hi: f64,
    pub offset_tiles_x: usize,
    pub offset_tiles_y: usize,
    pub z_slabs: usize,
    pub interp: InterpMode,
    pub feature_stride: f64,
    pub voxel_channels: usize,
    pub bev_channels: usize,
    pub camera_channels: usize,
    pub camera_feature_h: usize,
    pub camera_feature_w: usize,
    pub camera_focal: f64,
    pub roi_grid: usize,
    pub roi_r: usize,
    pub rpn_trunk: usize,
    pub refine_hidden: usize,
    pub set_width: usize,
    pub aug_flip: bool,
    pub aug_rot_max: f64,
    pub aug_scale_min: f64,
    pub aug_scale_max: f64,
    pub seed: u64,
    pub train_lr: f64,
    pub train_steps: usize,
    pub eval_iou: f64,
    pub score_threshold: f64,
    pub max_detections: usize,
    pub scene_objects: usize,
    pub scene_ground_z: f64,
    pub scene_ground_points: usize,
    pub scene_object_points: usize,
    pub scene_clutter: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            voxel_min: [0.0, -40.0, -3.0],
            voxel_max: [70.4, 40.0, 1.0],
            voxel_size: [0.05, 0.05, 0.1],
            voxel_max_points: 5,
            anchor: AnchorSpec::default(),
            loss: LossWeights::default(),
            nms_iou: 0.7,
            assign_pos_iou: 0.6,
            assign_neg_iou: 0.45,
            iou_target_lo: 0.25,
            iou_target_hi: 0.75,
            offset_tiles_x: 8,
            offset_tiles_y: 8,
            z_slabs: 4,
            interp: InterpMode::InverseDistance,
            feature_stride: 8.0,
            voxel_channels: 16,
            bev_channels: 128,
            camera_channels: 16,
            camera_feature_h: 47,
            camera_feature_w: 155,
            camera_focal: 721.5,
            roi_grid: 6,
            roi_r: 3,
            rpn_trunk: 32,
            refine_hidden: 32,
            set_width: 16,
            aug_flip: true,
            aug_rot_max: std::f64::consts::FRAC_PI_4,
            aug_scale_min: 0.95,
            aug_scale_max: 1.05,
            seed: 0,
            train_lr: 0.01,
            train_steps: 500,
            eval_iou: 0.7,
            score_threshold: 0.3,
            max_detections: 50,
            scene_objects: 3,
            scene_ground_z: -1.6,
            scene_ground_points: 3000,
            scene_object_points: 240,
            scene_clutter: 0,
        }
    }
}

impl RunConfig {
    pub fn voxel_spec(&self) -> Result<VoxelGridSpec> {
        VoxelGridSpec::new(
            self.voxel_min,
            self.voxel_max,
            self.voxel_size,
            if self.voxel_max_points == 0 {
                None
            } else {
                Some(self.voxel_max_points)
            },
        )
    }

    /// Pixel dims of the synthetic camera image plane.
    pub fn camera_image_dims(&self) -> (f64, f64) {
        (
            self.camera_feature_h as f64 * self.feature_stride,
            self.camera_feature_w as f64 * self.feature_stride,
        )
    }

    /// Pinhole camera looking down the LiDAR +x axis, KITTI-style axis
    /// permutation (x_cam = -y, y_cam = -z, z_cam = x).
    pub fn camera_calibration(&self) -> CalibrationSet {
        let (img_h, img_w) = self.camera_image_dims();
        let mut p = Matrix3x4::zeros();
        p[(0, 0)] = self.camera_focal;
        p[(0, 2)] = img_w / 2.0;
        p[(1, 1)] = self.camera_focal;
        p[(1, 2)] = img_h / 2.0;
        p[(2, 2)] = 1.0;
        let mut tr = Matrix3x4::zeros();
        tr[(0, 1)] = -1.0;
        tr[(1, 2)] = -1.0;
        tr[(2, 0)] = 1.0;
        CalibrationSet {
            p,
            r0: Matrix3::identity(),
            tr,
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Parse `key=value` lines; `#` starts a comment, blank lines are
    /// skipped, unknown keys and untyped values are positioned errors.
    pub fn parse(text: &str, source_name: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| CvfError::Parse {
                source_name: source_name.to_string(),
                position: format!("line {}", ln + 1),
                message,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key=value, got '{line}'")))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| err(e.to_string()))?;
        }
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn f(v: &str) -> Result<f64> {
            v.parse()
                .map_err(|_| CvfError::InvalidArgument(format!("'{v}' is not a number")))
        }
        fn u(v: &str) -> Result<usize> {
            v.parse()
                .map_err(|_| CvfError::InvalidArgument(format!("'{v}' is not a non-negative integer")))
        }
        fn b(v: &str) -> Result<bool> {
            match v {
                "true" => Ok(true),
                "false" => Ok(false),
                _ => Err(CvfError::InvalidArgument(format!(
                    "'{v}' is not true/false"
                ))),
            }
        }
        match key {
            "voxel.x_min" => self.voxel_min[0] = f(value)?,
            "voxel.y_min" => self.voxel_min[1] = f(value)?,
            "voxel.z_min" => self.voxel_min[2] = f(value)?,
            "voxel.x_max" => self.voxel_max[0] = f(value)?,
            "voxel.y_max" => self.voxel_max[1] = f(value)?,
            "voxel.z_max" => self.voxel_max[2] = f(value)?,
            "voxel.size_x" => self.voxel_size[0] = f(value)?,
            "voxel.size_y" => self.voxel_size[1] = f(value)?,
            "voxel.size_z" => self.voxel_size[2] = f(value)?,
            "voxel.max_points" => self.voxel_max_points = u(value)?,
            "anchor.w" => self.anchor.w = f(value)?,
            "anchor.l" => self.anchor.l = f(value)?,
            "anchor.h" => self.anchor.h = f(value)?,
            "anchor.z" => self.anchor.z = f(value)?,
            "loss.beta1" => self.loss.beta1 = f(value)?,
            "loss.beta2" => self.loss.beta2 = f(value)?,
            "loss.alpha" => self.loss.alpha = f(value)?,
            "loss.gamma" => self.loss.gamma = f(value)?,
            "nms.iou" => self.nms_iou = f(value)?,
            "assign.pos_iou" => self.assign_pos_iou = f(value)?,
            "assign.neg_iou" => self.assign_neg_iou = f(value)?,
            "iou_target.lo" => self.iou_target_lo = f(value)?,
            "iou_target.hi" => self.iou_target_hi = f(value)?,
            "offsets.tiles_x" => self.offset_tiles_x = u(value)?,
            "offsets.tiles_y" => self.offset_tiles_y = u(value)?,
            "projection.z_slabs" => self.z_slabs = u(value)?,
            "projection.feature_stride" => self.feature_stride = f(value)?,
            "projection.interp" => {
                self.interp = match value {
                    "inverse_distance" => InterpMode::InverseDistance,
                    "bilinear" => InterpMode::Bilinear,
                    _ => {
                        return Err(CvfError::InvalidArgument(format!(
                            "unknown interpolation '{value}'"
                        )))
                    }
                }
            }
            "channels.voxel" => self.voxel_channels = u(value)?,
            "channels.bev" => self.bev_channels = u(value)?,
            "channels.camera" => self.camera_channels = u(value)?,
            "camera.feature_h" => self.camera_feature_h = u(value)?,
            "camera.feature_w" => self.camera_feature_w = u(value)?,
            "camera.focal" => self.camera_focal = f(value)?,
            "roi.grid" => self.roi_grid = u(value)?,
            "roi.r" => self.roi_r = u(value)?,
            "rpn.trunk" => self.rpn_trunk = u(value)?,
            "refine.hidden" => self.refine_hidden = u(value)?,
            "set.width" => self.set_width = u(value)?,
            "aug.flip" => self.aug_flip = b(value)?,
            "aug.rot_max" => self.aug_rot_max = f(value)?,
            "aug.scale_min" => self.aug_scale_min = f(value)?,
            "aug.scale_max" => self.aug_scale_max = f(value)?,
            "seed" => self.seed = u(value)? as u64,
            "train.lr" => self.train_lr = f(value)?,
            "train.steps" => self.train_steps = u(value)?,
            "eval.iou" => self.eval_iou = f(value)?,
            "detect.score_threshold" => self.score_threshold = f(value)?,
            "detect.max" => self.max_detections = u(value)?,
            "scene.objects" => self.scene_objects = u(value)?,
            "scene.ground_z" => self.scene_ground_z = f(value)?,
            "scene.ground_points" => self.scene_ground_points = u(value)?,
            "scene.object_points" => self.scene_object_points = u(value)?,
            "scene.clutter" => self.scene_clutter = u(value)?,
            _ => {
                return Err(CvfError::InvalidArgument(format!("unknown key '{key}'")));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Velodyne binary

/// Each record is four consecutive little-endian f32: x, y, z, intensity.
pub const VELODYNE_RECORD_BYTES: usize = 16;

pub fn read_velodyne_bin(path: &Path) -> Result<Vec<LidarPoint>> {
    let bytes = fs::read(path)?;
    decode_velodyne(&bytes, &path.display().to_string())
}

pub fn decode_velodyne(bytes: &[u8], source_name: &str) -> Result<Vec<LidarPoint>> {
    if bytes.len() % VELODYNE_RECORD_BYTES != 0 {
        return Err(CvfError::Parse {
            source_name: source_name.to_string(),
            position: format!(
                "byte {}",
                bytes.len() - bytes.len() % VELODYNE_RECORD_BYTES
            ),
            message: format!(
                "truncated record: {} trailing bytes (need {VELODYNE_RECORD_BYTES})",
                bytes.len() % VELODYNE_RECORD_BYTES
            ),
        });
    }
    let mut out = Vec::with_capacity(bytes.len() / VELODYNE_RECORD_BYTES);
    for rec in bytes.chunks_exact(VELODYNE_RECORD_BYTES) {
        let v: Vec<f32> = rec
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push(LidarPoint::new(
            v[0] as f64,
            v[1] as f64,
            v[2] as f64,
            v[3] as f64,
        ));
    }
    Ok(out)
}

/// Writes f32 records; values are truncated to f32 precision, so a
/// read-back of just-written points is bit-identical at f32 width.
pub fn write_velodyne_bin(path: &Path, points: &[LidarPoint]) -> Result<()> {
    let mut buf = Vec::with_capacity(points.len() * VELODYNE_RECORD_BYTES);
    for p in points {
        for v in [p.x, p.y, p.z, p.intensity] {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// KITTI calibration

fn parse_float_row(
    source_name: &str,
    line_no: usize,
    values: &str,
    expect: usize,
) -> Result<Vec<f64>> {
    let parsed: std::result::Result<Vec<f64>, _> =
        values.split_whitespace().map(str::parse::<f64>).collect();
    let nums = parsed.map_err(|e| CvfError::Parse {
        source_name: source_name.to_string(),
        position: format!("line {line_no}"),
        message: format!("bad float: {e}"),
    })?;
    if nums.len() != expect {
        return Err(CvfError::Parse {
            source_name: source_name.to_string(),
            position: format!("line {line_no}"),
            message: format!("expected {expect} values, found {}", nums.len()),
        });
    }
    if let Some(bad) = nums.iter().find(|v| !v.is_finite()) {
        return Err(CvfError::Parse {
            source_name: source_name.to_string(),
            position: format!("line {line_no}"),
            message: format!("non-finite value {bad}"),
        });
    }
    Ok(nums)
}

pub fn read_kitti_calib(path: &Path) -> Result<CalibrationSet> {
    let text = fs::read_to_string(path)?;
    parse_kitti_calib(&text, &path.display().to_string())
}

/// Assembles P from `P2`, R0 from `R0_rect`, Tr from `Tr_velo_to_cam`.
pub fn parse_kitti_calib(text: &str, source_name: &str) -> Result<CalibrationSet> {
    let mut p2: Option<Vec<f64>> = None;
    let mut r0: Option<Vec<f64>> = None;
    let mut tr: Option<Vec<f64>> = None;
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, values)) = line.split_once(':') else {
            return Err(CvfError::Parse {
                source_name: source_name.to_string(),
                position: format!("line {}", ln + 1),
                message: "expected 'KEY: values'".to_string(),
            });
        };
        match key.trim() {
            "P2" => p2 = Some(parse_float_row(source_name, ln + 1, values, 12)?),
            "R0_rect" => r0 = Some(parse_float_row(source_name, ln + 1, values, 9)?),
            "Tr_velo_to_cam" => tr = Some(parse_float_row(source_name, ln + 1, values, 12)?),
            _ => {} // other calibration entries (P0, P1, P3, Tr_imu...) are ignored
        }
    }
    let missing = |k: &str| CvfError::Parse {
        source_name: source_name.to_string(),
        position: "end of file".to_string(),
        message: format!("missing key {k}"),
    };
    let p2 = p2.ok_or_else(|| missing("P2"))?;
    let r0 = r0.ok_or_else(|| missing("R0_rect"))?;
    let tr = tr.ok_or_else(|| missing("Tr_velo_to_cam"))?;
    let calib = CalibrationSet {
        p: Matrix3x4::from_row_slice(&p2),
        r0: Matrix3::from_row_slice(&r0),
        tr: Matrix3x4::from_row_slice(&tr),
    };
    calib
        .check_orthonormal(1e-4)
        .map_err(|e| CvfError::Parse {
            source_name: source_name.to_string(),
            position: "Tr_velo_to_cam".to_string(),
            message: e.to_string(),
        })?;
    Ok(calib)
}

// ---------------------------------------------------------------------------
// KITTI labels

/// A ground-truth box with its class string.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBox {
    pub class: String,
    pub box3d: Box3D,
}

/// Camera-frame label values -> LiDAR-frame box. The label location is the
/// bottom-face center in the rectified camera frame; KITTI yaw converts as
/// yaw = -ry - pi/2.
pub fn label_to_lidar_box(
    calib: &CalibrationSet,
    h: f64,
    w: f64,
    l: f64,
    loc: [f64; 3],
    ry: f64,
) -> Result<Box3D> {
    let bottom = calib.rect_to_lidar(&Vector3::new(loc[0], loc[1], loc[2]))?;
    Box3D::new(
        bottom.x,
        bottom.y,
        bottom.z + h / 2.0,
        w,
        l,
        h,
        normalize_yaw(-ry - std::f64::consts::FRAC_PI_2),
    )
}

/// Inverse of [`label_to_lidar_box`]: (h, w, l, location, ry).
pub fn lidar_box_to_label(calib: &CalibrationSet, b: &Box3D) -> (f64, f64, f64, [f64; 3], f64) {
    let bottom = calib.lidar_to_rect(&Vector3::new(b.cx, b.cy, b.cz - b.h / 2.0));
    let ry = normalize_yaw(-b.yaw - std::f64::consts::FRAC_PI_2);
    (b.h, b.w, b.l, [bottom.x, bottom.y, bottom.z], ry)
}

pub fn read_kitti_labels(path: &Path, calib: &CalibrationSet) -> Result<Vec<LabeledBox>> {
    let text = fs::read_to_string(path)?;
    parse_kitti_labels(&text, &path.display().to_string(), calib)
}

/// Rows: type trunc occl alpha bbox(4) h w l x y z ry [score]. `DontCare`
/// rows are skipped.
pub fn parse_kitti_labels(
    text: &str,
    source_name: &str,
    calib: &CalibrationSet,
) -> Result<Vec<LabeledBox>> {
    let mut out = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let class = fields[0].to_string();
        if class == "DontCare" {
            continue;
        }
        if fields.len() < 15 {
            return Err(CvfError::Parse {
                source_name: source_name.to_string(),
                position: format!("line {}", ln + 1),
                message: format!("expected >= 15 fields, found {}", fields.len()),
            });
        }
        let nums = parse_float_row(
            source_name,
            ln + 1,
            &fields[1..15].join(" "),
            14,
        )?;
        let (h, w, l) = (nums[7], nums[8], nums[9]);
        let loc = [nums[10], nums[11], nums[12]];
        let ry = nums[13];
        let box3d = label_to_lidar_box(calib, h, w, l, loc, ry).map_err(|e| CvfError::Parse {
            source_name: source_name.to_string(),
            position: format!("line {}", ln + 1),
            message: e.to_string(),
        })?;
        out.push(LabeledBox { class, box3d });
    }
    Ok(out)
}

/// KITTI detection rows: class, zero truncation/occlusion, alpha, 2D bbox
/// from projected corners, dims, camera location, ry, score.
pub fn format_kitti_detection(
    calib: &CalibrationSet,
    class: &str,
    b: &Box3D,
    score: f64,
) -> String {
    let (h, w, l, loc, ry) = lidar_box_to_label(calib, b);
    let alpha = normalize_yaw(ry - loc[0].atan2(loc[2]));
    // 2D bbox from the projected 3D corners; unprojectable boxes keep zeros
    let (mut x1, mut y1, mut x2, mut y2) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    let (sin_t, cos_t) = b.yaw.sin_cos();
    for dx in [-0.5, 0.5] {
        for dy in [-0.5, 0.5] {
            for dz in [-0.5, 0.5] {
                let lx = dx * b.l;
                let ly = dy * b.w;
                let c = Vector3::new(
                    b.cx + cos_t * lx - sin_t * ly,
                    b.cy + sin_t * lx + cos_t * ly,
                    b.cz + dz * b.h,
                );
                if let Projection::InFront(px) = project_to_image(&c, calib) {
                    x1 = x1.min(px.x);
                    y1 = y1.min(px.y);
                    x2 = x2.max(px.x);
                    y2 = y2.max(px.y);
                }
            }
        }
    }
    if !x1.is_finite() {
        (x1, y1, x2, y2) = (0.0, 0.0, 0.0, 0.0);
    }
    format!(
        "{class} 0.00 0 {alpha:.6} {x1:.2} {y1:.2} {x2:.2} {y2:.2} {h:.6} {w:.6} {l:.6} {:.6} {:.6} {:.6} {ry:.6} {score:.6}",
        loc[0], loc[1], loc[2]
    )
}

// ---------------------------------------------------------------------------
// Synthetic scenes

/// One scene: cloud, per-camera calibration and stand-in feature map, and
/// labeled ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub points: Vec<LidarPoint>,
    pub calibs: Vec<CalibrationSet>,
    pub camera_features: Vec<Tensor>,
    pub gt_boxes: Vec<Box3D>,
    pub gt_labels: Vec<String>,
}

fn range_density(r: f64) -> f64 {
    let ref_r = 10.0_f64;
    (ref_r / r.max(ref_r)).powi(2)
}

/// Surface returns for one box, range-falloff count from `budget`, faces
/// weighted by area: ±l sides, ±w ends, top.
fn sample_surface_points(rng: &mut ChaCha8Rng, b: &Box3D, budget: usize, points: &mut Vec<LidarPoint>) {
    let n = ((budget as f64 * range_density(b.range_bev())).round() as usize).max(4);
    let (sin_t, cos_t) = b.yaw.sin_cos();
    let areas = [
        b.l * b.h,
        b.l * b.h,
        b.w * b.h,
        b.w * b.h,
        b.w * b.l,
    ];
    let total: f64 = areas.iter().sum();
    for _ in 0..n {
        let mut pick = rng.gen_range(0.0..total);
        let mut face = 0;
        for (i, a) in areas.iter().enumerate() {
            if pick < *a {
                face = i;
                break;
            }
            pick -= a;
        }
        let u = rng.gen_range(-0.5..0.5);
        let v = rng.gen_range(-0.5..0.5);
        // faces sit a hair inside the box so membership survives the
        // rounding of later rigid transforms
        let s = 0.5 - 1e-6;
        let (lx, ly, lz) = match face {
            0 => (u * b.l, -s * b.w, v * b.h),
            1 => (u * b.l, s * b.w, v * b.h),
            2 => (-s * b.l, u * b.w, v * b.h),
            3 => (s * b.l, u * b.w, v * b.h),
            _ => (u * b.l, v * b.w, s * b.h),
        };
        points.push(LidarPoint::new(
            b.cx + cos_t * lx - sin_t * ly,
            b.cy + sin_t * lx + cos_t * ly,
            b.cz + lz,
            rng.gen_range(0.6..0.9),
        ));
    }
}

/// Paint a per-object signature blob into the camera feature map so object
/// pixels are distinguishable from background; amplitude alternates sign by
/// channel.
fn paint_object(feat: &mut Tensor, cfg: &RunConfig, calib: &CalibrationSet, b: &Box3D) {
    let (c_ch, fh, fw) = (feat.shape()[0], feat.shape()[1], feat.shape()[2]);
    let center = Vector3::new(b.cx, b.cy, b.cz);
    let Projection::InFront(px) = project_to_image(&center, calib) else {
        return;
    };
    let fx = px.x / cfg.feature_stride - 0.5;
    let fy = px.y / cfg.feature_stride - 0.5;
    // apparent radius of the object in feature pixels
    let radius = (cfg.camera_focal * b.l.max(b.h) / (2.0 * px.depth) / cfg.feature_stride).max(1.0);
    let sigma2 = radius * radius / 2.0;
    let reach = (radius * 2.5).ceil() as i64;
    let plane = fh * fw;
    for dy in -reach..=reach {
        for dx in -reach..=reach {
            let gx = fx.round() as i64 + dx;
            let gy = fy.round() as i64 + dy;
            if gx < 0 || gy < 0 || gx as usize >= fw || gy as usize >= fh {
                continue;
            }
            let d2 = (gx as f64 - fx).powi(2) + (gy as f64 - fy).powi(2);
            let a = 2.0 * (-d2 / (2.0 * sigma2)).exp();
            for c in 0..c_ch {
                let sign = if c % 2 == 0 { 1.0 } else { -1.0 };
                feat.data_mut()[c * plane + gy as usize * fw + gx as usize] += sign * a;
            }
        }
    }
}

/// Deterministic synthetic scene: non-overlapping car-sized boxes on a
/// ground plane, surface and ground points with range-falloff density, and
/// one synthetic camera feature map carrying an object signature.
pub fn generate_synthetic_scene(seed: u64, n_objects: usize, cfg: &RunConfig) -> SceneSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ce9e5);
    let calib = cfg.camera_calibration();
    let [x_min, y_min, _] = cfg.voxel_min;
    let [x_max, y_max, _] = cfg.voxel_max;

    // boxes: rejection-sampled so inflated footprints never touch
    let mut boxes: Vec<Box3D> = Vec::new();
    let margin = 4.0;
    let mut attempts = 0;
    while boxes.len() < n_objects && attempts < 10_000 {
        attempts += 1;
        let h = rng.gen_range(1.45..1.65);
        let candidate = Box3D::new(
            rng.gen_range(x_min + margin..x_max - margin),
            rng.gen_range(y_min + margin..y_max - margin),
            cfg.scene_ground_z + h / 2.0,
            rng.gen_range(1.5..1.75),
            rng.gen_range(3.6..4.2),
            h,
            rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
        )
        .expect("sampled sizes are positive");
        let inflate = |b: &Box3D| {
            Box3D::new(b.cx, b.cy, b.cz, b.w + 1.0, b.l + 1.0, b.h, b.yaw).unwrap()
        };
        if boxes
            .iter()
            .all(|b| crate::geometry::bev_intersection_area(&inflate(b), &inflate(&candidate)) == 0.0)
        {
            boxes.push(candidate);
        }
    }

    let mut points = Vec::new();
    // object surface points
    for b in &boxes {
        sample_surface_points(&mut rng, b, cfg.scene_object_points, &mut points);
    }
    // ground plane with range falloff
    for _ in 0..cfg.scene_ground_points {
        let x = rng.gen_range(x_min..x_max);
        let y = rng.gen_range(y_min..y_max);
        let keep: f64 = rng.gen_range(0.0..1.0);
        if keep >= range_density(x.hypot(y)) {
            continue;
        }
        points.push(LidarPoint::new(
            x,
            y,
            cfg.scene_ground_z + rng.gen_range(-0.02..0.02),
            rng.gen_range(0.1..0.3),
        ));
    }

    // camera feature: low-level background noise plus object signatures
    let mut feat = Tensor::zeros(vec![
        cfg.camera_channels,
        cfg.camera_feature_h,
        cfg.camera_feature_w,
    ]);
    for v in feat.data_mut() {
        *v = rng.gen_range(-0.05..0.05);
    }
    for b in &boxes {
        paint_object(&mut feat, cfg, &calib, b);
    }

    // far-range clutter: car-sized clusters with the same return statistics
    // as a real object at that range, but no label and no camera signature.
    // LiDAR alone cannot tell these from sparse true objects.
    let mut clutter: Vec<Box3D> = Vec::new();
    let mut attempts = 0;
    while clutter.len() < cfg.scene_clutter && attempts < 10_000 {
        attempts += 1;
        let h = rng.gen_range(1.45..1.65);
        let candidate = Box3D::new(
            rng.gen_range(x_min + margin..x_max - margin),
            rng.gen_range(y_min + margin..y_max - margin),
            cfg.scene_ground_z + h / 2.0,
            rng.gen_range(1.5..1.75),
            rng.gen_range(3.6..4.2),
            h,
            rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
        )
        .expect("sampled sizes are positive");
        if candidate.range_bev() <= 30.0 {
            continue;
        }
        let inflate = |b: &Box3D| {
            Box3D::new(b.cx, b.cy, b.cz, b.w + 1.0, b.l + 1.0, b.h, b.yaw).unwrap()
        };
        if boxes
            .iter()
            .chain(clutter.iter())
            .all(|b| crate::geometry::bev_intersection_area(&inflate(b), &inflate(&candidate)) == 0.0)
        {
            clutter.push(candidate);
        }
    }
    for b in &clutter {
        sample_surface_points(&mut rng, b, cfg.scene_object_points, &mut points);
    }

    let gt_labels = vec!["Car".to_string(); boxes.len()];
    SceneSample {
        points,
        calibs: vec![calib],
        camera_features: vec![feat],
        gt_boxes: boxes,
        gt_labels,
    }
}

// ---------------------------------------------------------------------------
// Augmentation

/// Draw bounds; defaults are the reference training ranges.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentBounds {
    pub flip: bool,
    pub rot_max: f64,
    pub scale_min: f64,
    pub scale_max: f64,
}

impl Default for AugmentBounds {
    fn default() -> Self {
        Self {
            flip: true,
            rot_max: std::f64::consts::FRAC_PI_4,
            scale_min: 0.95,
            scale_max: 1.05,
        }
    }
}

impl AugmentBounds {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            flip: cfg.aug_flip,
            rot_max: cfg.aug_rot_max,
            scale_min: cfg.aug_scale_min,
            scale_max: cfg.aug_scale_max,
        }
    }
}

/// A concrete sampled augmentation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentDraw {
    pub flip: bool,
    pub angle: f64,
    pub scale: f64,
}

impl AugmentDraw {
    pub fn identity() -> Self {
        Self {
            flip: false,
            angle: 0.0,
            scale: 1.0,
        }
    }
}

pub fn draw_augment(seed: u64, bounds: &AugmentBounds) -> AugmentDraw {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa46);
    AugmentDraw {
        flip: bounds.flip && rng.gen_bool(0.5),
        angle: rng.gen_range(-bounds.rot_max..=bounds.rot_max),
        scale: rng.gen_range(bounds.scale_min..=bounds.scale_max),
    }
}

/// Applies flip, then rotation, then scale jointly to points, ground-truth
/// boxes, and every camera calibration; camera features are untouched
/// because the adjusted calibration absorbs the transform.
pub fn augment_with(sample: &SceneSample, draw: &AugmentDraw) -> Result<SceneSample> {
    let mut ops: Vec<CloudTransform> = Vec::new();
    if draw.flip {
        ops.push(CloudTransform::FlipX);
    }
    if draw.angle != 0.0 {
        ops.push(CloudTransform::YawRotation(draw.angle));
    }
    if draw.scale != 1.0 {
        ops.push(CloudTransform::Scale(draw.scale));
    }
    let mut out = sample.clone();
    for op in ops {
        out.points = transform_cloud(&out.points, op)?;
        out.gt_boxes = out.gt_boxes.iter().map(|b| op.apply_box(b)).collect();
        out.calibs = out
            .calibs
            .iter()
            .map(|c| adjust_calibration(c, op))
            .collect::<Result<Vec<_>>>()?;
    }
    Ok(out)
}

pub fn augment(sample: &SceneSample, seed: u64, bounds: &AugmentBounds) -> Result<SceneSample> {
    augment_with(sample, &draw_augment(seed, bounds))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::bev_iou;

    fn desk_config() -> RunConfig {
        RunConfig {
            voxel_min: [0.0, -19.2, -3.0],
            voxel_max: [38.4, 19.2, 1.0],
            voxel_size: [0.6, 0.6, 1.0],
            camera_feature_h: 12,
            camera_feature_w: 40,
            camera_focal: 120.0,
            camera_channels: 4,
            scene_ground_points: 800,
            ..RunConfig::default()
        }
    }

    #[test]
    fn default_config_reproduces_reference_constants() {
        let cfg = RunConfig::default();
        let spec = cfg.voxel_spec().unwrap();
        assert_eq!(spec.dims(), [1408, 1600, 40]);
        assert_eq!(spec.bev_shape(), (200, 176));
        assert_eq!(cfg.nms_iou, 0.7);
        assert_eq!(cfg.loss.beta1, 1.0);
        assert_eq!(cfg.loss.beta2, 2.0);
        assert_eq!(cfg.loss.alpha, 0.25);
        assert_eq!(cfg.loss.gamma, 2.0);
        assert_eq!(cfg.aug_rot_max, std::f64::consts::FRAC_PI_4);
        assert_eq!((cfg.aug_scale_min, cfg.aug_scale_max), (0.95, 1.05));
        assert_eq!(cfg.bev_channels, 128);
    }

    #[test]
    fn config_parsing_and_errors() {
        let cfg = RunConfig::parse(
            "# comment\nvoxel.size_x=0.1\n\nnms.iou=0.5 # trailing\n",
            "inline",
        )
        .unwrap();
        assert_eq!(cfg.voxel_size[0], 0.1);
        assert_eq!(cfg.nms_iou, 0.5);

        let err = RunConfig::parse("bogus.key=1\n", "inline").unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
        let err = RunConfig::parse("nms.iou=abc\n", "inline").unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
        let err = RunConfig::parse("just words\n", "inline").unwrap_err();
        assert!(err.to_string().contains("key=value"), "{err}");
    }

    #[test]
    fn velodyne_single_record_and_empty() {
        let mut bytes = Vec::new();
        for v in [1.0f32, 2.0, 3.0, 0.5] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let pts = decode_velodyne(&bytes, "mem").unwrap();
        assert_eq!(pts.len(), 1);
        assert_eq!((pts[0].x, pts[0].y, pts[0].z, pts[0].intensity), (1.0, 2.0, 3.0, 0.5));
        assert!(decode_velodyne(&[], "mem").unwrap().is_empty());

        let err = decode_velodyne(&bytes[..10], "mem").unwrap_err();
        assert!(err.to_string().contains("byte 0"), "{err}");
    }

    #[test]
    fn velodyne_round_trip_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts: Vec<LidarPoint> = (0..1000)
            .map(|_| {
                LidarPoint::new(
                    rng.gen_range(-50.0..50.0f32) as f64,
                    rng.gen_range(-50.0..50.0f32) as f64,
                    rng.gen_range(-3.0..3.0f32) as f64,
                    rng.gen_range(0.0..1.0f32) as f64,
                )
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scan.bin");
        write_velodyne_bin(&path, &pts).unwrap();
        let back = read_velodyne_bin(&path).unwrap();
        assert_eq!(pts, back);
        // and the bytes themselves round trip
        let bytes = fs::read(&path).unwrap();
        write_velodyne_bin(&path, &back).unwrap();
        assert_eq!(bytes, fs::read(&path).unwrap());
    }

    const IDENTITY_CALIB: &str = "P2: 1 0 0 0 0 1 0 0 0 0 1 0\nR0_rect: 1 0 0 0 1 0 0 0 1\nTr_velo_to_cam: 1 0 0 0 0 1 0 0 0 0 1 0\n";

    #[test]
    fn calib_identity_and_errors() {
        let c = parse_kitti_calib(IDENTITY_CALIB, "mem").unwrap();
        assert_eq!(c.r0, Matrix3::identity());
        assert_eq!(c.tr, Matrix3x4::identity());

        let err = parse_kitti_calib("R0_rect: 1 0 0 0 1 0 0 0 1\n", "mem").unwrap_err();
        assert!(err.to_string().contains("missing key P2"), "{err}");
        let err =
            parse_kitti_calib("P2: 1 2 three\n", "mem").unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
    }

    #[test]
    fn label_round_trip_and_dontcare() {
        let cfg = desk_config();
        let calib = cfg.camera_calibration();
        let b = Box3D::new(12.0, -3.0, -0.8, 1.6, 3.9, 1.56, 0.7).unwrap();
        let (h, w, l, loc, ry) = lidar_box_to_label(&calib, &b);
        let back = label_to_lidar_box(&calib, h, w, l, loc, ry).unwrap();
        for (a, c) in [
            (b.cx, back.cx),
            (b.cy, back.cy),
            (b.cz, back.cz),
            (b.w, back.w),
            (b.l, back.l),
            (b.h, back.h),
            (b.yaw, back.yaw),
        ] {
            assert!((a - c).abs() < 1e-6, "{a} vs {c}");
        }

        let row = format!(
            "Car 0.0 0 0.0 0 0 10 10 {h} {w} {l} {} {} {} {ry}\nDontCare -1 -1 -10 0 0 0 0 -1 -1 -1 -1000 -1000 -1000 -10\n",
            loc[0], loc[1], loc[2]
        );
        let calib2 = parse_kitti_calib(IDENTITY_CALIB, "mem").unwrap();
        let _ = calib2;
        let parsed = parse_kitti_labels(&row, "mem", &calib).unwrap();
        assert_eq!(parsed.len(), 1);
        assert_eq!(parsed[0].class, "Car");
        assert!((parsed[0].box3d.cx - b.cx).abs() < 1e-6);

        let err = parse_kitti_labels("Car 1 2 3\n", "mem", &calib).unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
        let err = parse_kitti_labels(
            "Car 0 0 0 0 0 0 0 x 1 1 1 1 1 0\n",
            "mem",
            &calib,
        )
        .unwrap_err();
        assert!(err.to_string().contains("bad float"), "{err}");
    }

    #[test]
    fn synthetic_scene_contracts() {
        let cfg = desk_config();
        let s = generate_synthetic_scene(7, 3, &cfg);
        assert_eq!(s.gt_boxes.len(), 3);
        assert_eq!(s.gt_labels.len(), 3);
        assert_eq!(s.calibs.len(), 1);
        // deterministic
        let s2 = generate_synthetic_scene(7, 3, &cfg);
        assert_eq!(s, s2);
        // pairwise BEV IoU zero
        for i in 0..3 {
            for j in (i + 1)..3 {
                assert_eq!(bev_iou(&s.gt_boxes[i], &s.gt_boxes[j]), 0.0);
            }
        }
        // near boxes carry enough surface points
        for b in &s.gt_boxes {
            if b.range_bev() < 20.0 {
                let inside = s.points.iter().filter(|p| b.contains(&p.xyz())).count();
                assert!(inside >= 50, "only {inside} points in box at {:.1} m", b.range_bev());
            }
        }
        // empty scene
        let empty = generate_synthetic_scene(7, 0, &cfg);
        assert!(empty.gt_boxes.is_empty());
        assert!(!empty.points.is_empty()); // ground plane remains
    }

    #[test]
    fn clutter_adds_unlabeled_far_points() {
        let mut cfg = desk_config();
        cfg.voxel_max = [70.4, 12.8, 1.0];
        let plain = generate_synthetic_scene(7, 2, &cfg);
        cfg.scene_clutter = 4;
        let with = generate_synthetic_scene(7, 2, &cfg);
        // labels, boxes, and the original point prefix are untouched
        assert_eq!(with.gt_boxes, plain.gt_boxes);
        assert_eq!(with.camera_features, plain.camera_features);
        assert_eq!(&with.points[..plain.points.len()], &plain.points[..]);
        // every extra return sits beyond the 30 m clutter floor
        let extra = &with.points[plain.points.len()..];
        assert!(extra.len() >= 4 * 4, "only {} clutter points", extra.len());
        assert!(extra.iter().all(|p| p.x.hypot(p.y) > 27.0));
    }

    #[test]
    fn object_pixels_carry_camera_signature() {
        let cfg = desk_config();
        let s = generate_synthetic_scene(3, 2, &cfg);
        let feat = &s.camera_features[0];
        let max_abs = feat.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max_abs > 1.0, "no signature painted (max {max_abs})");
    }

    #[test]
    fn augmentation_identity_and_consistency() {
        let cfg = desk_config();
        let s = generate_synthetic_scene(5, 2, &cfg);
        let same = augment_with(&s, &AugmentDraw::identity()).unwrap();
        assert_eq!(s, same);

        let bounds = AugmentBounds::default();
        for seed in 0..20 {
            let d = draw_augment(seed, &bounds);
            assert!(d.angle.abs() <= bounds.rot_max);
            assert!(d.scale >= bounds.scale_min && d.scale <= bounds.scale_max);
            let t = augment(&s, seed, &bounds).unwrap();
            // membership of object points is preserved by the joint transform
            for (orig_b, new_b) in s.gt_boxes.iter().zip(&t.gt_boxes) {
                let orig_members: Vec<usize> = s
                    .points
                    .iter()
                    .enumerate()
                    .filter(|(_, p)| orig_b.contains(&p.xyz()))
                    .map(|(i, _)| i)
                    .collect();
                assert!(!orig_members.is_empty());
                for &i in &orig_members {
                    assert!(new_b.contains(&t.points[i].xyz()));
                }
            }
        }
    }

    #[test]
    fn rotation_draws_stay_in_bounds_over_many_seeds() {
        let bounds = AugmentBounds::default();
        for seed in 0..10_000 {
            let d = draw_augment(seed, &bounds);
            assert!(d.angle >= -std::f64::consts::FRAC_PI_4);
            assert!(d.angle <= std::f64::consts::FRAC_PI_4);
        }
    }

    #[test]
    fn detection_row_is_parseable() {
        let cfg = desk_config();
        let calib = cfg.camera_calibration();
        let b = Box3D::new(15.0, 2.0, -0.8, 1.6, 3.9, 1.56, 0.3).unwrap();
        let row = format_kitti_detection(&calib, "Car", &b, 0.91);
        let parsed = parse_kitti_labels(&row, "mem", &calib).unwrap();
        assert_eq!(parsed.len(), 1);
        assert!((parsed[0].box3d.cx - b.cx).abs() < 1e-4);
        assert!((parsed[0].box3d.yaw - b.yaw).abs() < 1e-4);
    }
}
