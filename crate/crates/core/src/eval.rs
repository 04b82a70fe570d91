//! Detection evaluation: 41-point average precision with greedy 3D-IoU
//! matching, distance-binned AP, and grayscale PGM dumps of BEV maps.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{CvfError, Result};
use crate::geometry::{iou_3d, Box3D};
use crate::tensor::Tensor;

/// A scored detection.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub box3d: Box3D,
    pub score: f64,
    pub class: String,
}

/// AP with its supporting counts and PR samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ApResult {
    pub ap: f64,
    pub tp: usize,
    pub fp: usize,
    pub missed: usize,
    /// Precision/recall after each detection, in rank order.
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub warning: Option<String>,
}

/// Detection indices in evaluation order: score descending, insertion order
/// breaking ties.
fn rank_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// Greedy matching: walk detections in rank order, match each to the
/// unmatched gt of highest 3D IoU if that IoU reaches the threshold.
/// Returns per-detection matched gt index (insertion order).
pub fn match_detections(
    dets: &[Detection],
    gts: &[Box3D],
    iou_threshold: f64,
) -> Result<Vec<Option<usize>>> {
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(CvfError::InvalidArgument(format!(
            "IoU threshold must lie in (0, 1], got {iou_threshold}"
        )));
    }
    let mut matched_gt = vec![false; gts.len()];
    let mut out = vec![None; dets.len()];
    for &di in &rank_order(dets) {
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if matched_gt[gi] {
                continue;
            }
            let iou = iou_3d(&dets[di].box3d, gt);
            if iou >= iou_threshold && best.map_or(true, |(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        if let Some((gi, _)) = best {
            matched_gt[gi] = true;
            out[di] = Some(gi);
        }
    }
    Ok(out)
}

/// AP over true-positive flags already in rank order.
fn ap_from_flags(flags: &[bool], n_gt: usize) -> ApResult {
    if n_gt == 0 {
        return if flags.is_empty() {
            ApResult {
                ap: 1.0,
                tp: 0,
                fp: 0,
                missed: 0,
                precision: vec![],
                recall: vec![],
                warning: Some("no ground truth and no detections; AP defined as 1".to_string()),
            }
        } else {
            ApResult {
                ap: 0.0,
                tp: 0,
                fp: flags.len(),
                missed: 0,
                precision: vec![0.0; flags.len()],
                recall: vec![0.0; flags.len()],
                warning: None,
            }
        };
    }
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(flags.len());
    let mut recall = Vec::with_capacity(flags.len());
    for (i, &is_tp) in flags.iter().enumerate() {
        if is_tp {
            tp += 1;
        }
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    let mut ap_sum = 0.0;
    for k in 0..=40 {
        let r = k as f64 / 40.0;
        let p = precision
            .iter()
            .zip(&recall)
            .filter(|(_, &rc)| rc >= r)
            .map(|(&pc, _)| pc)
            .fold(0.0f64, f64::max);
        ap_sum += p;
    }
    ApResult {
        ap: ap_sum / 41.0,
        tp,
        fp: flags.len() - tp,
        missed: n_gt - tp,
        precision,
        recall,
        warning: None,
    }
}

/// 41-point interpolated AP with greedy 3D-IoU matching.
pub fn average_precision_41pt(
    dets: &[Detection],
    gts: &[Box3D],
    iou_threshold: f64,
) -> Result<ApResult> {
    let matches = match_detections(dets, gts, iou_threshold)?;
    let flags: Vec<bool> = rank_order(dets)
        .iter()
        .map(|&di| matches[di].is_some())
        .collect();
    Ok(ap_from_flags(&flags, gts.len()))
}

/// BEV-range bin edges in meters.
pub const DISTANCE_BINS: [(f64, f64); 3] = [(0.0, 20.0), (20.0, 40.0), (40.0, 70.0)];

fn bin_of(range: f64) -> Option<usize> {
    DISTANCE_BINS
        .iter()
        .position(|&(lo, hi)| range >= lo && range < hi)
}

/// Per-bin AP: ground truths bin by their own BEV range, matched detections
/// inherit the bin of their matched gt, unmatched detections bin by their
/// own range. Out-of-range entries are dropped.
pub fn distance_binned_eval(
    dets: &[Detection],
    gts: &[Box3D],
    iou_threshold: f64,
) -> Result<[ApResult; 3]> {
    let matches = match_detections(dets, gts, iou_threshold)?;
    let gt_bins: Vec<Option<usize>> = gts.iter().map(|g| bin_of(g.range_bev())).collect();
    let mut flags_per_bin: [Vec<bool>; 3] = Default::default();
    for &di in &rank_order(dets) {
        let bin = match matches[di] {
            Some(gi) => gt_bins[gi],
            None => bin_of(dets[di].box3d.range_bev()),
        };
        if let Some(b) = bin {
            flags_per_bin[b].push(matches[di].is_some());
        }
    }
    let counts: [usize; 3] = {
        let mut c = [0usize; 3];
        for b in gt_bins.iter().flatten() {
            c[*b] += 1;
        }
        c
    };
    binned(flags_per_bin, counts)
}

/// Multi-scene per-bin AP: matching runs inside each scene, then detections
/// pool across scenes into one ranking per bin.
pub fn distance_binned_eval_set(
    scenes: &[(Vec<Detection>, Vec<Box3D>)],
    iou_threshold: f64,
) -> Result<[ApResult; 3]> {
    // (score, scene, rank-within-scene, tp, bin) pooled over all scenes
    let mut pooled: Vec<(f64, usize, usize, bool, usize)> = Vec::new();
    let mut counts = [0usize; 3];
    for (si, (dets, gts)) in scenes.iter().enumerate() {
        let matches = match_detections(dets, gts, iou_threshold)?;
        let gt_bins: Vec<Option<usize>> = gts.iter().map(|g| bin_of(g.range_bev())).collect();
        for b in gt_bins.iter().flatten() {
            counts[*b] += 1;
        }
        for (ri, &di) in rank_order(dets).iter().enumerate() {
            let bin = match matches[di] {
                Some(gi) => gt_bins[gi],
                None => bin_of(dets[di].box3d.range_bev()),
            };
            if let Some(b) = bin {
                pooled.push((dets[di].score, si, ri, matches[di].is_some(), b));
            }
        }
    }
    pooled.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let mut flags_per_bin: [Vec<bool>; 3] = Default::default();
    for &(_, _, _, tp, b) in &pooled {
        flags_per_bin[b].push(tp);
    }
    binned(flags_per_bin, counts)
}

fn binned(flags_per_bin: [Vec<bool>; 3], counts: [usize; 3]) -> Result<[ApResult; 3]> {
    Ok([
        ap_from_flags(&flags_per_bin[0], counts[0]),
        ap_from_flags(&flags_per_bin[1], counts[1]),
        ap_from_flags(&flags_per_bin[2], counts[2]),
    ])
}

// ---------------------------------------------------------------------------
// PGM dump

/// Reduce a [C,H,W] map to [H,W] by the channel L2 norm; 2D maps pass
/// through.
pub fn reduce_map(map: &Tensor) -> Result<(usize, usize, Vec<f64>)> {
    match map.shape() {
        [h, w] => Ok((*h, *w, map.data().to_vec())),
        [c, h, w] => {
            let plane = h * w;
            let mut out = vec![0.0; plane];
            for ch in 0..*c {
                for (o, v) in out.iter_mut().zip(&map.data()[ch * plane..(ch + 1) * plane]) {
                    *o += v * v;
                }
            }
            for o in &mut out {
                *o = o.sqrt();
            }
            Ok((*h, *w, out))
        }
        other => Err(CvfError::Shape(format!(
            "expected a 2D or 3D map, got {other:?}"
        ))),
    }
}

/// Min-max normalized 8-bit binary PGM; a constant map renders as uniform
/// mid-gray (128).
pub fn dump_bev_pgm(map: &Tensor, path: &Path) -> Result<()> {
    let (h, w, vals) = reduce_map(map)?;
    let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let bytes: Vec<u8> = if hi - lo <= 0.0 {
        vec![128u8; vals.len()]
    } else {
        vals.iter()
            .map(|v| ((v - lo) / (hi - lo) * 255.0).round() as u8)
            .collect()
    };
    let mut file = fs::File::create(path)?;
    write!(file, "P5\n{w} {h}\n255\n")?;
    file.write_all(&bytes)?;
    Ok(())
}

/// Read back a binary PGM written by [`dump_bev_pgm`].
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path)?;
    let err = |position: &str, message: String| CvfError::Parse {
        source_name: path.display().to_string(),
        position: position.to_string(),
        message,
    };
    let header_end = bytes
        .windows(1)
        .enumerate()
        .filter(|(_, w)| w[0] == b'\n')
        .map(|(i, _)| i)
        .nth(2)
        .ok_or_else(|| err("header", "incomplete PGM header".to_string()))?;
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|e| err("header", e.to_string()))?;
    let mut lines = header.lines();
    if lines.next() != Some("P5") {
        return Err(err("line 1", "expected P5 magic".to_string()));
    }
    let dims: Vec<usize> = lines
        .next()
        .unwrap_or("")
        .split_whitespace()
        .map(|t| t.parse().map_err(|e| err("line 2", format!("{e}"))))
        .collect::<Result<_>>()?;
    if dims.len() != 2 {
        return Err(err("line 2", "expected width and height".to_string()));
    }
    let (w, h) = (dims[0], dims[1]);
    if lines.next() != Some("255") {
        return Err(err("line 3", "expected maxval 255".to_string()));
    }
    let pixels = &bytes[header_end + 1..];
    if pixels.len() != w * h {
        return Err(err(
            "pixel data",
            format!("expected {} bytes, found {}", w * h, pixels.len()),
        ));
    }
    Ok((h, w, pixels.to_vec()))
}
