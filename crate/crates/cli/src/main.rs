//! `cvf`: command-line surface over the fusion pipeline. Every command is
//! deterministic given --config and --seed; outputs are written under --out.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use cvf_core::data::{
    format_kitti_detection, generate_synthetic_scene, write_velodyne_bin, RunConfig, SceneSample,
};
use cvf_core::eval::{average_precision_41pt, distance_binned_eval, dump_bev_pgm, DISTANCE_BINS};
use cvf_core::model::{detect_scene, forward, init_pipeline, train_toy};
use cvf_core::{Graph, ParamStore};

#[derive(Parser)]
#[command(name = "cvf", about = "camera-LiDAR cross-view fusion pipeline", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Flat key=value configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Scene / initialization seed; overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene and materialize it in KITTI formats.
    SynthGen {
        #[command(flatten)]
        common: Common,
    },
    /// Voxelize the scene and dump BEV occupancy.
    Voxelize {
        #[command(flatten)]
        common: Common,
    },
    /// Project camera features into BEV and dump the map.
    ProjectBev {
        #[command(flatten)]
        common: Common,
        /// Optional checkpoint with trained offsets/weights.
        #[arg(long)]
        params: Option<PathBuf>,
    },
    /// Run the full fusion forward pass and dump joint/attention maps.
    Fuse {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        params: Option<PathBuf>,
        /// Zero the camera pipeline.
        #[arg(long)]
        lidar_only: bool,
    },
    /// Overfit the full two-stage loss on one synthetic scene.
    TrainToy {
        #[command(flatten)]
        common: Common,
        /// SGD steps (default from config).
        #[arg(long)]
        steps: Option<usize>,
        /// Learning rate (default from config).
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        lidar_only: bool,
    },
    /// Detect objects and emit KITTI label text.
    Detect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        lidar_only: bool,
    },
    /// Detect, then evaluate against the scene's ground truth.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        lidar_only: bool,
        /// 3D IoU matching threshold.
        #[arg(long, default_value_t = 0.7)]
        iou: f64,
        /// Also report per-distance-bin AP.
        #[arg(long)]
        bins: bool,
    },
}

fn load(common: &Common) -> Result<(RunConfig, SceneSample)> {
    let mut cfg = RunConfig::from_file(&common.config)
        .with_context(|| format!("reading config {}", common.config.display()))?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    fs::create_dir_all(&common.out)
        .with_context(|| format!("creating {}", common.out.display()))?;
    let sample = generate_synthetic_scene(cfg.seed, cfg.scene_objects, &cfg);
    Ok((cfg, sample))
}

fn load_store(cfg: &RunConfig, n_cams: usize, params: &Option<PathBuf>) -> Result<ParamStore> {
    let mut store = match params {
        Some(p) => {
            ParamStore::load(p).with_context(|| format!("loading checkpoint {}", p.display()))?
        }
        None => ParamStore::new(),
    };
    init_pipeline(&mut store, cfg, n_cams, cfg.seed);
    Ok(store)
}

fn write_labels(path: &Path, sample: &SceneSample) -> Result<()> {
    let mut text = String::new();
    for (b, class) in sample.gt_boxes.iter().zip(&sample.gt_labels) {
        text.push_str(&format_kitti_detection(&sample.calibs[0], class, b, 1.0));
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

fn calib_text(sample: &SceneSample) -> String {
    let c = &sample.calibs[0];
    let row12 = |m: &nalgebra::Matrix3x4<f64>| {
        (0..3)
            .flat_map(|r| (0..4).map(move |cidx| (r, cidx)))
            .map(|(r, cidx)| format!("{}", m[(r, cidx)]))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let row9 = (0..3)
        .flat_map(|r| (0..3).map(move |cidx| (r, cidx)))
        .map(|(r, cidx)| format!("{}", c.r0[(r, cidx)]))
        .collect::<Vec<_>>()
        .join(" ");
    format!(
        "P2: {}\nR0_rect: {}\nTr_velo_to_cam: {}\n",
        row12(&c.p),
        row9,
        row12(&c.tr)
    )
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::SynthGen { common } => {
            let (cfg, sample) = load(&common)?;
            write_velodyne_bin(&common.out.join("velodyne.bin"), &sample.points)?;
            fs::write(common.out.join("calib.txt"), calib_text(&sample))?;
            write_labels(&common.out.join("labels.txt"), &sample)?;
            dump_bev_pgm(&sample.camera_features[0], &common.out.join("camera.pgm"))?;
            println!(
                "scene seed={} objects={} points={}",
                cfg.seed,
                sample.gt_boxes.len(),
                sample.points.len()
            );
        }
        Command::Voxelize { common } => {
            let (cfg, sample) = load(&common)?;
            let spec = cfg.voxel_spec()?;
            let scene = cvf_core::voxel::voxelize(&sample.points, &spec, cfg.seed);
            let [n_x, n_y, _] = spec.dims();
            let mut occ = cvf_core::Tensor::zeros(vec![n_y, n_x]);
            for (idx, pts) in &scene.voxels {
                occ.data_mut()[idx[1] * n_x + idx[0]] += pts.len() as f64;
            }
            dump_bev_pgm(&occ, &common.out.join("occupancy.pgm"))?;
            fs::write(
                common.out.join("voxelize.txt"),
                format!(
                    "occupied={}\ndropped_out_of_range={}\ndropped_overflow={}\n",
                    scene.occupied(),
                    scene.dropped_out_of_range,
                    scene.dropped_overflow
                ),
            )?;
            println!("occupied voxels: {}", scene.occupied());
        }
        Command::ProjectBev { common, params } => {
            let (cfg, sample) = load(&common)?;
            let store = load_store(&cfg, sample.calibs.len(), &params)?;
            let mut g = Graph::new();
            let fwd = forward(&mut g, &store, &sample, &cfg, true)?;
            dump_bev_pgm(g.value(fwd.cam_bev), &common.out.join("camera_bev.pgm"))?;
            println!("camera BEV shape: {:?}", g.value(fwd.cam_bev).shape());
        }
        Command::Fuse {
            common,
            params,
            lidar_only,
        } => {
            let (cfg, sample) = load(&common)?;
            let store = load_store(&cfg, sample.calibs.len(), &params)?;
            let mut g = Graph::new();
            let fwd = forward(&mut g, &store, &sample, &cfg, !lidar_only)?;
            dump_bev_pgm(g.value(fwd.joint_map.var), &common.out.join("joint.pgm"))?;
            dump_bev_pgm(
                g.value(fwd.fusion.cam_attention),
                &common.out.join("cam_attention.pgm"),
            )?;
            dump_bev_pgm(
                g.value(fwd.fusion.lidar_attention),
                &common.out.join("lidar_attention.pgm"),
            )?;
            println!("joint map shape: {:?}", g.value(fwd.joint_map.var).shape());
        }
        Command::TrainToy {
            common,
            steps,
            lr,
            lidar_only,
        } => {
            let (cfg, sample) = load(&common)?;
            let steps = steps.unwrap_or(cfg.train_steps);
            let lr = lr.unwrap_or(cfg.train_lr);
            let mut store = ParamStore::new();
            let log = train_toy(&mut store, &sample, &cfg, steps, lr, !lidar_only)?;
            store.save(&common.out.join("params.ckpt"))?;
            let mut text = String::from("step rpn_total refine_total total mean_cam_attention\n");
            for (i, l) in log.iter().enumerate() {
                text.push_str(&format!(
                    "{} {:.6} {:.6} {:.6} {:.6}\n",
                    i, l.rpn_total, l.refine_total, l.total, l.mean_cam_attention
                ));
            }
            fs::write(common.out.join("train_log.txt"), text)?;
            if let (Some(first), Some(last)) = (log.first(), log.last()) {
                println!(
                    "rpn loss {:.6} -> {:.6} over {steps} steps",
                    first.rpn_total, last.rpn_total
                );
            }
        }
        Command::Detect {
            common,
            params,
            lidar_only,
        } => {
            let (cfg, sample) = load(&common)?;
            let store = load_store(&cfg, sample.calibs.len(), &params)?;
            let dets = detect_scene(&store, &sample, &cfg, !lidar_only)?;
            let mut text = String::new();
            for d in &dets {
                text.push_str(&format_kitti_detection(
                    &sample.calibs[0],
                    &d.class,
                    &d.box3d,
                    d.score,
                ));
                text.push('\n');
            }
            fs::write(common.out.join("detections.txt"), text)?;
            println!("{} detections", dets.len());
        }
        Command::Eval {
            common,
            params,
            lidar_only,
            iou,
            bins,
        } => {
            let (cfg, sample) = load(&common)?;
            let store = load_store(&cfg, sample.calibs.len(), &params)?;
            let dets = detect_scene(&store, &sample, &cfg, !lidar_only)?;
            let overall = average_precision_41pt(&dets, &sample.gt_boxes, iou)?;
            let mut text = format!(
                "iou_threshold {iou}\nap {:.6}\ntp {}\nfp {}\nfn {}\n",
                overall.ap, overall.tp, overall.fp, overall.missed
            );
            if let Some(w) = &overall.warning {
                text.push_str(&format!("warning {w}\n"));
            }
            if bins {
                let per_bin = distance_binned_eval(&dets, &sample.gt_boxes, iou)?;
                for (r, (lo, hi)) in per_bin.iter().zip(DISTANCE_BINS) {
                    text.push_str(&format!(
                        "bin {lo:.0}-{hi:.0}m ap {:.6} tp {} fp {} fn {}\n",
                        r.ap, r.tp, r.fp, r.missed
                    ));
                }
            }
            fs::write(common.out.join("eval.txt"), &text)?;
            print!("{text}");
        }
    }
    Ok(())
}
