//! Adaptive gated fusion of camera and LiDAR BEV features.
//!
//! Both modalities are concatenated channel-wise; each modality's 3x3
//! gating convolution maps the concatenation to a single-channel spatial
//! attention map which, after a sigmoid, scales that modality's features.
//! The joint feature is the concatenation of the two gated features.

use crate::error::{CvfError, Result};
use crate::tensor::{checkpoint::ParamStore, Graph, Var};

/// Gating convolution parameters attached to a graph: one (weight, bias)
/// pair per modality, each producing a single attention channel.
#[derive(Debug, Clone, Copy)]
pub struct GatedFusionParams {
    pub conv_cam_w: Var,
    pub conv_cam_b: Var,
    pub conv_lidar_w: Var,
    pub conv_lidar_b: Var,
}

pub fn init_gated_fusion_params(
    store: &mut ParamStore,
    cam_channels: usize,
    lidar_channels: usize,
    seed: u64,
) {
    let c_in = cam_channels + lidar_channels;
    store.init_uniform("fusion.conv_cam.w", vec![1, c_in, 3, 3], c_in * 9, seed);
    store.init_zeros("fusion.conv_cam.b", vec![1]);
    store.init_uniform("fusion.conv_lidar.w", vec![1, c_in, 3, 3], c_in * 9, seed);
    store.init_zeros("fusion.conv_lidar.b", vec![1]);
}

pub fn attach_gated_fusion_params(store: &ParamStore, g: &mut Graph) -> Result<GatedFusionParams> {
    Ok(GatedFusionParams {
        conv_cam_w: store.attach(g, "fusion.conv_cam.w")?,
        conv_cam_b: store.attach(g, "fusion.conv_cam.b")?,
        conv_lidar_w: store.attach(g, "fusion.conv_lidar.w")?,
        conv_lidar_b: store.attach(g, "fusion.conv_lidar.b")?,
    })
}

/// Joint feature plus the two attention maps for inspection.
#[derive(Debug, Clone, Copy)]
pub struct GatedFusionOut {
    pub joint: Var,
    pub cam_attention: Var,
    pub lidar_attention: Var,
}

/// F_joint = (F_C * sigmoid(Conv_C(F_C (+) F_L))) (+) (F_L * sigmoid(Conv_L(F_C (+) F_L)))
/// where * broadcasts the single attention channel over feature channels and
/// (+) is channel-wise concatenation.
pub fn gated_fuse(
    g: &mut Graph,
    f_cam: Var,
    f_lidar: Var,
    params: &GatedFusionParams,
) -> Result<GatedFusionOut> {
    let (sc, sl) = (g.value(f_cam).shape().to_vec(), g.value(f_lidar).shape().to_vec());
    if sc.len() != 3 || sl.len() != 3 || sc[1..] != sl[1..] {
        return Err(CvfError::Shape(format!(
            "gated_fuse requires spatially aligned maps, got {sc:?} vs {sl:?}"
        )));
    }
    let cat = g.concat_axis0(f_cam, f_lidar)?;
    let cam_logits = g.conv2d(cat, params.conv_cam_w, params.conv_cam_b, 1, 1)?;
    let cam_attention = g.sigmoid(cam_logits);
    let lidar_logits = g.conv2d(cat, params.conv_lidar_w, params.conv_lidar_b, 1, 1)?;
    let lidar_attention = g.sigmoid(lidar_logits);
    let gated_cam = g.mul_broadcast_channel(f_cam, cam_attention)?;
    let gated_lidar = g.mul_broadcast_channel(f_lidar, lidar_attention)?;
    let joint = g.concat_axis0(gated_cam, gated_lidar)?;
    Ok(GatedFusionOut {
        joint,
        cam_attention,
        lidar_attention,
    })
}
