//! Coordinate frames, camera projection, oriented boxes, rotated IoU, and
//! anchor residual encoding.
//!
//! LiDAR frame: x forward, y left, z up, meters. Camera frame (KITTI
//! rectified): x right, y down, z forward. A [`Box3D`] stores its geometric
//! center; `l` runs along the heading, `w` across it.

use nalgebra::{Matrix3, Matrix3x4, Matrix4, Vector3, Vector4};

use crate::error::{CvfError, Result};

/// One LiDAR return. Intensity is clamped to [0,1] on construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LidarPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub intensity: f64,
}

impl LidarPoint {
    pub fn new(x: f64, y: f64, z: f64, intensity: f64) -> Self {
        Self {
            x,
            y,
            z,
            intensity: intensity.clamp(0.0, 1.0),
        }
    }

    pub fn xyz(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }
}

/// Rigid LiDAR-to-camera transform plus rectification and projection.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    /// Rectified-camera to pixel projection (pixel units).
    pub p: Matrix3x4<f64>,
    /// Rectification rotation.
    pub r0: Matrix3<f64>,
    /// Rigid LiDAR-to-camera transform.
    pub tr: Matrix3x4<f64>,
}

/// Continuous pixel position with camera-frame depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelCoord {
    pub x: f64,
    pub y: f64,
    pub depth: f64,
}

/// Result of projecting a 3D point into a camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Projection {
    InFront(PixelCoord),
    BehindCamera,
}

impl Projection {
    pub fn pixel(&self) -> Option<PixelCoord> {
        match self {
            Projection::InFront(p) => Some(*p),
            Projection::BehindCamera => None,
        }
    }
}

impl CalibrationSet {
    pub fn identity_with_pinhole(focal: f64, cx: f64, cy: f64) -> Self {
        let mut p = Matrix3x4::zeros();
        p[(0, 0)] = focal;
        p[(0, 2)] = cx;
        p[(1, 1)] = focal;
        p[(1, 2)] = cy;
        p[(2, 2)] = 1.0;
        Self {
            p,
            r0: Matrix3::identity(),
            tr: Matrix3x4::identity(),
        }
    }

    /// Point in the rectified camera frame.
    pub fn lidar_to_rect(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let hom = Vector4::new(p.x, p.y, p.z, 1.0);
        self.r0 * (self.tr * hom)
    }

    /// Inverse of `lidar_to_rect`; used when converting label boxes.
    pub fn rect_to_lidar(&self, p_rect: &Vector3<f64>) -> Result<Vector3<f64>> {
        let r0_inv = self
            .r0
            .try_inverse()
            .ok_or_else(|| CvfError::InvalidArgument("singular rectification matrix".into()))?;
        let mut tr4 = Matrix4::identity();
        tr4.fixed_view_mut::<3, 4>(0, 0).copy_from(&self.tr);
        let tr_inv = tr4
            .try_inverse()
            .ok_or_else(|| CvfError::InvalidArgument("singular LiDAR-to-camera transform".into()))?;
        let cam = r0_inv * p_rect;
        let hom = tr_inv * Vector4::new(cam.x, cam.y, cam.z, 1.0);
        Ok(Vector3::new(hom.x, hom.y, hom.z))
    }

    /// Rotation blocks orthonormal within `tol` (checked on KITTI ingest).
    pub fn check_orthonormal(&self, tol: f64) -> Result<()> {
        let rot = self.tr.fixed_view::<3, 3>(0, 0).into_owned();
        for (name, m) in [("R0", self.r0), ("Tr rotation", rot)] {
            let d = m * m.transpose() - Matrix3::identity();
            let err = d.iter().map(|v| v.abs()).fold(0.0, f64::max);
            if err > tol {
                return Err(CvfError::InvalidArgument(format!(
                    "{name} block not orthonormal (max deviation {err:.2e})"
                )));
            }
        }
        Ok(())
    }
}

/// Project a LiDAR-frame point: Tr, then R0, then P with perspective division.
pub fn project_to_image(p: &Vector3<f64>, calib: &CalibrationSet) -> Projection {
    let rect = calib.lidar_to_rect(p);
    let img = calib.p * Vector4::new(rect.x, rect.y, rect.z, 1.0);
    if img.z <= 0.0 {
        return Projection::BehindCamera;
    }
    Projection::InFront(PixelCoord {
        x: img.x / img.z,
        y: img.y / img.z,
        depth: img.z,
    })
}

/// Normalize an angle into [-pi, pi); ties at +pi resolve to -pi.
pub fn normalize_yaw(theta: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut t = (theta + std::f64::consts::PI).rem_euclid(two_pi) - std::f64::consts::PI;
    if t >= std::f64::consts::PI {
        t -= two_pi;
    }
    t
}

/// Oriented 3D box: geometric center, size (w,l,h), yaw about z.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3D {
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    pub w: f64,
    pub l: f64,
    pub h: f64,
    pub yaw: f64,
}

impl Box3D {
    pub fn new(cx: f64, cy: f64, cz: f64, w: f64, l: f64, h: f64, yaw: f64) -> Result<Self> {
        if !(w > 0.0 && l > 0.0 && h > 0.0) {
            return Err(CvfError::InvalidArgument(format!(
                "box size must be strictly positive, got ({w}, {l}, {h})"
            )));
        }
        Ok(Self {
            cx,
            cy,
            cz,
            w,
            l,
            h,
            yaw: normalize_yaw(yaw),
        })
    }

    pub fn center(&self) -> Vector3<f64> {
        Vector3::new(self.cx, self.cy, self.cz)
    }

    /// BEV footprint corners, counterclockwise.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let (hl, hw) = (self.l / 2.0, self.w / 2.0);
        let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
        local.map(|[lx, ly]| [self.cx + c * lx - s * ly, self.cy + s * lx + c * ly])
    }

    pub fn bev_area(&self) -> f64 {
        self.w * self.l
    }

    /// Whether a BEV point falls inside the rotated footprint.
    pub fn contains_bev(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.yaw.sin_cos();
        let dx = x - self.cx;
        let dy = y - self.cy;
        let lx = c * dx + s * dy;
        let ly = -s * dx + c * dy;
        lx.abs() <= self.l / 2.0 && ly.abs() <= self.w / 2.0
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        self.contains_bev(p.x, p.y) && (p.z - self.cz).abs() <= self.h / 2.0
    }

    pub fn range_bev(&self) -> f64 {
        (self.cx * self.cx + self.cy * self.cy).sqrt()
    }
}

fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        let j = (i + 1) % n;
        acc += poly[i][0] * poly[j][1] - poly[j][0] * poly[i][1];
    }
    acc.abs() / 2.0
}

/// Clip a polygon by the half-plane on the left of edge a->b
/// (Sutherland-Hodgman step, counterclockwise clip polygon).
fn clip_by_edge(poly: &[[f64; 2]], a: [f64; 2], b: [f64; 2]) -> Vec<[f64; 2]> {
    let side = |p: [f64; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
    let mut out = Vec::with_capacity(poly.len() + 1);
    let n = poly.len();
    for i in 0..n {
        let cur = poly[i];
        let next = poly[(i + 1) % n];
        let sc = side(cur);
        let sn = side(next);
        if sc >= 0.0 {
            out.push(cur);
        }
        if (sc > 0.0 && sn < 0.0) || (sc < 0.0 && sn > 0.0) {
            let t = sc / (sc - sn);
            out.push([
                cur[0] + t * (next[0] - cur[0]),
                cur[1] + t * (next[1] - cur[1]),
            ]);
        }
    }
    out
}

/// Exact intersection area of two rotated rectangles via convex clipping.
/// Operands are ordered canonically so the result is exactly symmetric.
pub fn bev_intersection_area(a: &Box3D, b: &Box3D) -> f64 {
    let key = |x: &Box3D| (x.cx, x.cy, x.w, x.l, x.yaw);
    let (a, b) = if key(b) < key(a) { (b, a) } else { (a, b) };
    let ca = a.bev_corners();
    let cb = b.bev_corners();
    let mut poly: Vec<[f64; 2]> = ca.to_vec();
    for i in 0..4 {
        if poly.is_empty() {
            return 0.0;
        }
        poly = clip_by_edge(&poly, cb[i], cb[(i + 1) % 4]);
    }
    polygon_area(&poly)
}

/// Rotated BEV IoU via exact polygon clipping.
pub fn bev_iou(a: &Box3D, b: &Box3D) -> f64 {
    let inter = bev_intersection_area(a, b);
    let union = a.bev_area() + b.bev_area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// 3D IoU: BEV intersection times vertical overlap over the volume union.
pub fn iou_3d(a: &Box3D, b: &Box3D) -> f64 {
    let inter_bev = bev_intersection_area(a, b);
    let z_lo = (a.cz - a.h / 2.0).max(b.cz - b.h / 2.0);
    let z_hi = (a.cz + a.h / 2.0).min(b.cz + b.h / 2.0);
    let dz = (z_hi - z_lo).max(0.0);
    let inter = inter_bev * dz;
    let union = a.w * a.l * a.h + b.w * b.l * b.h - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Box residual relative to an anchor: diagonal-normalized center deltas,
/// log size ratios, raw yaw delta.
pub fn encode_box_residual(gt: &Box3D, anchor: &Box3D) -> Result<[f64; 7]> {
    if !(anchor.w > 0.0 && anchor.l > 0.0 && anchor.h > 0.0) {
        return Err(CvfError::InvalidArgument("anchor size must be positive".into()));
    }
    let d = (anchor.w * anchor.w + anchor.l * anchor.l).sqrt();
    Ok([
        (gt.cx - anchor.cx) / d,
        (gt.cy - anchor.cy) / d,
        (gt.cz - anchor.cz) / anchor.h,
        (gt.w / anchor.w).ln(),
        (gt.l / anchor.l).ln(),
        (gt.h / anchor.h).ln(),
        gt.yaw - anchor.yaw,
    ])
}

pub fn decode_box_residual(res: &[f64; 7], anchor: &Box3D) -> Result<Box3D> {
    if !(anchor.w > 0.0 && anchor.l > 0.0 && anchor.h > 0.0) {
        return Err(CvfError::InvalidArgument("anchor size must be positive".into()));
    }
    let d = (anchor.w * anchor.w + anchor.l * anchor.l).sqrt();
    Box3D::new(
        anchor.cx + res[0] * d,
        anchor.cy + res[1] * d,
        anchor.cz + res[2] * anchor.h,
        anchor.w * res[3].exp(),
        anchor.l * res[4].exp(),
        anchor.h * res[5].exp(),
        anchor.yaw + res[6],
    )
}

/// Point-cloud level augmentation operation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CloudTransform {
    /// Mirror across the x axis (y -> -y).
    FlipX,
    /// Rotation about the z axis, radians.
    YawRotation(f64),
    /// Uniform scaling of coordinates.
    Scale(f64),
}

impl CloudTransform {
    pub fn validate(&self) -> Result<()> {
        if let CloudTransform::Scale(s) = self {
            if *s <= 0.0 {
                return Err(CvfError::InvalidArgument(format!(
                    "scale factor must be positive, got {s}"
                )));
            }
        }
        Ok(())
    }

    pub fn apply_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        match *self {
            CloudTransform::FlipX => Vector3::new(p.x, -p.y, p.z),
            CloudTransform::YawRotation(a) => {
                let (s, c) = a.sin_cos();
                Vector3::new(c * p.x - s * p.y, s * p.x + c * p.y, p.z)
            }
            CloudTransform::Scale(s) => p * s,
        }
    }

    pub fn apply_box(&self, b: &Box3D) -> Box3D {
        match *self {
            CloudTransform::FlipX => Box3D {
                cy: -b.cy,
                yaw: normalize_yaw(-b.yaw),
                ..*b
            },
            CloudTransform::YawRotation(a) => {
                let c = self.apply_point(&b.center());
                Box3D {
                    cx: c.x,
                    cy: c.y,
                    cz: c.z,
                    yaw: normalize_yaw(b.yaw + a),
                    ..*b
                }
            }
            CloudTransform::Scale(s) => Box3D {
                cx: b.cx * s,
                cy: b.cy * s,
                cz: b.cz * s,
                w: b.w * s,
                l: b.l * s,
                h: b.h * s,
                yaw: b.yaw,
            },
        }
    }

    /// 4x4 inverse of the transform as applied to points.
    fn inverse_matrix(&self) -> Matrix4<f64> {
        match *self {
            CloudTransform::FlipX => Matrix4::from_diagonal(&Vector4::new(1.0, -1.0, 1.0, 1.0)),
            CloudTransform::YawRotation(a) => {
                let (s, c) = (-a).sin_cos();
                let mut m = Matrix4::identity();
                m[(0, 0)] = c;
                m[(0, 1)] = -s;
                m[(1, 0)] = s;
                m[(1, 1)] = c;
                m
            }
            CloudTransform::Scale(s) => {
                Matrix4::from_diagonal(&Vector4::new(1.0 / s, 1.0 / s, 1.0 / s, 1.0))
            }
        }
    }
}

/// Transform every point of a cloud.
pub fn transform_cloud(points: &[LidarPoint], op: CloudTransform) -> Result<Vec<LidarPoint>> {
    op.validate()?;
    Ok(points
        .iter()
        .map(|p| {
            let q = op.apply_point(&p.xyz());
            LidarPoint::new(q.x, q.y, q.z, p.intensity)
        })
        .collect())
}

/// Adjust a calibration so that projection commutes with the point
/// transform: project(T(p), adjust(calib, T)) == project(p, calib).
/// For scaling, the rotation block of Tr is scaled by 1/s, which makes the
/// commutation exact at the cost of leaving the block non-orthonormal.
pub fn adjust_calibration(calib: &CalibrationSet, op: CloudTransform) -> Result<CalibrationSet> {
    op.validate()?;
    let mut tr4 = Matrix4::identity();
    tr4.fixed_view_mut::<3, 4>(0, 0).copy_from(&calib.tr);
    let adjusted = tr4 * op.inverse_matrix();
    Ok(CalibrationSet {
        p: calib.p,
        r0: calib.r0,
        tr: adjusted.fixed_view::<3, 4>(0, 0).into_owned(),
    })
}
