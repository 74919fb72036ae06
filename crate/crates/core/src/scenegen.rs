//! Deterministic synthetic RSU scene generation.
//!
//! Each simulated roadside unit observes a static background plus a few rigid
//! moving objects (boxes of points) at 0.1 s frame spacing. Ground-truth flow
//! comes from the object transforms; multi-modal clients additionally get a
//! synthetic per-point optical flow obtained by projecting each source point
//! before and after its ground-truth motion through a pinhole camera.
//!
//! Generation is a pure function of (profile, sample_seed): every random draw
//! comes from a stream keyed by logical identifiers, so parallel and serial
//! generation agree bit for bit. Geometry streams are separate from optical
//! and noise streams, which keeps the underlying scenes identical when only
//! camera availability changes (the multi-modal ablation relies on this).

use std::collections::BTreeSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{
    self, flow_from_rigid, FlowField, Point3, PointCloud, RigidTransform,
};
use crate::seed::{hash_str, mix_seed};
use crate::{Error, Result};

/// Frame spacing of the simulated 10 Hz sensors.
pub const FRAME_INTERVAL: f64 = 0.1;

/// Height threshold below which points count as ground. The scene generator
/// samples directly above it.
pub const DEFAULT_GROUND_THRESHOLD: f64 = 0.3;

const SCENE_Z_MAX: f64 = 3.3;
const OBJECT_EXTENT_RANGE: (f64, f64) = (1.5, 5.0);
const MAX_OBJECT_YAW_DEG: f64 = 5.0;

/// Heterogeneity knobs of one simulated client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientProfile {
    pub client_id: String,
    pub num_train: usize,
    pub num_val: usize,
    pub num_test: usize,
    /// Points per frame (sensor resolution proxy).
    pub points_per_frame: usize,
    /// Scene half extent is perception_range / 2 meters.
    pub perception_range: f64,
    pub num_objects: usize,
    /// Object speeds are drawn uniformly from this closed range (m/s).
    pub object_speed_range: (f64, f64),
    /// Fraction of the point budget that belongs to moving objects.
    pub dynamic_point_ratio: f64,
    pub has_camera: bool,
    /// Per-coordinate Gaussian sensor noise (m), applied to both frames.
    pub position_noise_sigma: f64,
    /// Vehicle-like clients get a random rigid ego perturbation per frame
    /// with this scale (m for translation, rad for rotation); 0 for RSUs.
    pub ego_motion_sigma: f64,
    /// Gaussian noise added to the synthetic optical flow (pixels).
    pub pixel_noise_sigma: f64,
    pub seed: u64,
}

impl ClientProfile {
    pub fn validate(&self) -> Result<()> {
        if self.client_id.is_empty() {
            return Err(Error::Config("client_id must not be empty".into()));
        }
        if self.num_train == 0 || self.num_val == 0 || self.num_test == 0 {
            return Err(Error::Config(format!(
                "client {}: sample counts must be positive",
                self.client_id
            )));
        }
        if self.points_per_frame == 0 {
            return Err(Error::Config(format!(
                "client {}: points_per_frame must be positive",
                self.client_id
            )));
        }
        if self.perception_range <= 0.0 {
            return Err(Error::Config(format!(
                "client {}: perception_range must be positive",
                self.client_id
            )));
        }
        if !(0.0..=1.0).contains(&self.dynamic_point_ratio) {
            return Err(Error::Config(format!(
                "client {}: dynamic_point_ratio must be in [0, 1]",
                self.client_id
            )));
        }
        let (lo, hi) = self.object_speed_range;
        if lo < 0.0 || hi < lo {
            return Err(Error::Config(format!(
                "client {}: object_speed_range must satisfy 0 <= lo <= hi",
                self.client_id
            )));
        }
        if self.position_noise_sigma < 0.0
            || self.ego_motion_sigma < 0.0
            || self.pixel_noise_sigma < 0.0
        {
            return Err(Error::Config(format!(
                "client {}: noise sigmas must be nonnegative",
                self.client_id
            )));
        }
        Ok(())
    }
}

/// Pinhole camera with a world-to-camera extrinsic pose.
#[derive(Debug, Clone)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
    pub extrinsic: RigidTransform,
}

impl CameraModel {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: f64,
        height: f64,
        extrinsic: RigidTransform,
    ) -> Result<Self> {
        if fx <= 0.0 || fy <= 0.0 {
            return Err(Error::Config("camera focal lengths must be positive".into()));
        }
        if width <= 0.0 || height <= 0.0 {
            return Err(Error::Config("camera image size must be positive".into()));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            extrinsic,
        })
    }

    /// Camera at `eye` looking toward `target` (camera +z forward, +y down).
    pub fn looking_at(
        eye: Point3,
        target: Point3,
        fx: f64,
        fy: f64,
        width: f64,
        height: f64,
    ) -> Result<Self> {
        let forward = geometry::sub(target, eye);
        let fnorm = geometry::norm(forward);
        if fnorm < 1e-9 {
            return Err(Error::Config("camera eye and target coincide".into()));
        }
        let forward = geometry::scale(forward, 1.0 / fnorm);
        let mut up = [0.0, 0.0, 1.0];
        if geometry::norm(geometry::cross(forward, up)) < 1e-9 {
            up = [0.0, 1.0, 0.0];
        }
        let right = geometry::cross(forward, up);
        let right = geometry::scale(right, 1.0 / geometry::norm(right));
        let down = geometry::cross(forward, right);
        let rotation = [right, down, forward];
        let rot = RigidTransform {
            rotation,
            translation: [0.0; 3],
        };
        let t = geometry::scale(rot.apply(eye), -1.0);
        let extrinsic = RigidTransform::new(rotation, t)
            .map_err(|e| Error::Config(format!("degenerate camera pose: {e}")))?;
        Self::new(fx, fy, width / 2.0, height / 2.0, width, height, extrinsic)
    }

    /// Pinhole projection; `None` when behind the camera or outside the image.
    pub fn project(&self, p: Point3) -> Option<[f64; 2]> {
        let q = self.extrinsic.apply(p);
        if q[2] <= 1e-9 {
            return None;
        }
        let u = self.fx * q[0] / q[2] + self.cx;
        let v = self.fy * q[1] / q[2] + self.cy;
        if u < 0.0 || u >= self.width || v < 0.0 || v >= self.height {
            return None;
        }
        Some([u, v])
    }
}

/// Free-function form of the projection.
pub fn project_point(cam: &CameraModel, p: Point3) -> Option<[f64; 2]> {
    cam.project(p)
}

/// The elevated roadside camera of a client: ~6 m mast looking at the scene
/// center, 1920x1280 image.
pub fn default_camera(profile: &ClientProfile) -> CameraModel {
    let r = profile.perception_range;
    CameraModel::looking_at(
        [0.0, -0.55 * r, 6.0],
        [0.0, 0.0, 1.0],
        800.0,
        800.0,
        1920.0,
        1280.0,
    )
    .expect("default camera pose is valid")
}

/// Two consecutive frames plus optional optical flow and ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct FramePair {
    pub source: PointCloud,
    pub target: PointCloud,
    /// Per-source-point pixel motion; present only for camera clients.
    pub optical: Option<Vec<[f64; 2]>>,
    /// False where the point was out of view in either frame (optical is
    /// zero there and the point is treated as static by the loss).
    pub optical_valid: Option<Vec<bool>>,
    /// Evaluation-only flow labels.
    pub gt_flow: Option<FlowField>,
    pub frame_interval: f64,
}

impl FramePair {
    pub fn new(
        source: PointCloud,
        target: PointCloud,
        optical: Option<Vec<[f64; 2]>>,
        optical_valid: Option<Vec<bool>>,
        gt_flow: Option<FlowField>,
        frame_interval: f64,
    ) -> Result<Self> {
        if frame_interval <= 0.0 {
            return Err(Error::InvalidInput("frame_interval must be > 0".into()));
        }
        if let Some(o) = &optical {
            if o.len() != source.len() {
                return Err(Error::InvalidInput(
                    "optical flow length differs from source".into(),
                ));
            }
        }
        if let Some(v) = &optical_valid {
            if v.len() != source.len() {
                return Err(Error::InvalidInput(
                    "optical mask length differs from source".into(),
                ));
            }
        }
        if let Some(g) = &gt_flow {
            if g.len() != source.len() {
                return Err(Error::InvalidInput(
                    "gt flow length differs from source".into(),
                ));
            }
        }
        Ok(Self {
            source,
            target,
            optical,
            optical_valid,
            gt_flow,
            frame_interval,
        })
    }

    /// Drops the evaluation labels (training pairs are self-supervised).
    pub fn without_gt(mut self) -> Self {
        self.gt_flow = None;
        self
    }
}

/// Train/val/test pairs of one client.
#[derive(Debug, Clone)]
pub struct ClientDataset {
    pub profile: ClientProfile,
    pub train: Vec<FramePair>,
    pub val: Vec<FramePair>,
    pub test: Vec<FramePair>,
}

impl ClientDataset {
    /// N_k: the aggregation weight of this client.
    pub fn data_size(&self) -> usize {
        self.train.len()
    }
}

fn uniform_box(rng: &mut ChaCha8Rng, lo: Point3, hi: Point3) -> Point3 {
    [
        rng.gen_range(lo[0]..hi[0]),
        rng.gen_range(lo[1]..hi[1]),
        rng.gen_range(lo[2]..hi[2]),
    ]
}

fn small_rigid(rng: &mut ChaCha8Rng, sigma: f64) -> RigidTransform {
    let normal = Normal::new(0.0, sigma).expect("valid sigma");
    let t = [
        normal.sample(rng),
        normal.sample(rng),
        normal.sample(rng),
    ];
    let axis = [
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
    ];
    let angle = normal.sample(rng);
    let mut r = RigidTransform::from_axis_angle(axis, angle);
    r.translation = t;
    r
}

/// Synthetic optical flow: project each source point before and after its
/// ground-truth motion and subtract. Points out of view in either frame get
/// zero flow and a false validity flag.
pub fn synth_optical_flow(
    positions: &[Point3],
    gt_flow: &FlowField,
    cam: &CameraModel,
    pixel_noise_sigma: f64,
    seed: u64,
) -> (Vec<[f64; 2]>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = if pixel_noise_sigma > 0.0 {
        Some(Normal::new(0.0, pixel_noise_sigma).expect("valid sigma"))
    } else {
        None
    };
    let mut optical = Vec::with_capacity(positions.len());
    let mut valid = Vec::with_capacity(positions.len());
    for (p, f) in positions.iter().zip(gt_flow.vectors.iter()) {
        let before = cam.project(*p);
        let after = cam.project(geometry::add(*p, *f));
        match (before, after) {
            (Some(u0), Some(u1)) => {
                let mut o = [u1[0] - u0[0], u1[1] - u0[1]];
                if let Some(n) = &noise {
                    o[0] += n.sample(&mut rng);
                    o[1] += n.sample(&mut rng);
                }
                optical.push(o);
                valid.push(true);
            }
            _ => {
                optical.push([0.0, 0.0]);
                valid.push(false);
            }
        }
    }
    (optical, valid)
}

/// Samples `n` points from a cloud: without replacement when n <= |c|, with
/// replacement otherwise. The index map subsamples per-point attributes
/// consistently.
pub fn downsample(
    c: &PointCloud,
    n: usize,
    seed: u64,
) -> Result<(PointCloud, Vec<usize>)> {
    if c.is_empty() {
        return Err(Error::InvalidInput("downsample: empty input cloud".into()));
    }
    if n == 0 {
        return Err(Error::InvalidInput("downsample: n must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx: Vec<usize> = if n <= c.len() {
        let mut pool: Vec<usize> = (0..c.len()).collect();
        for i in 0..n {
            let j = rng.gen_range(i..pool.len());
            pool.swap(i, j);
        }
        pool.truncate(n);
        pool
    } else {
        (0..n).map(|_| rng.gen_range(0..c.len())).collect()
    };
    let cloud = PointCloud::new(idx.iter().map(|&i| c.points()[i]).collect())?;
    Ok((cloud, idx))
}

/// Downsamples both frames of a pair to fixed sizes, keeping the per-source
/// attributes aligned through the index map.
pub fn downsample_pair(pair: &FramePair, n: usize, seed: u64) -> Result<FramePair> {
    let (src, idx) = downsample(&pair.source, n, mix_seed(&[seed, 0]))?;
    let (tgt, _) = downsample(&pair.target, n, mix_seed(&[seed, 1]))?;
    let optical = pair
        .optical
        .as_ref()
        .map(|o| idx.iter().map(|&i| o[i]).collect());
    let optical_valid = pair
        .optical_valid
        .as_ref()
        .map(|v| idx.iter().map(|&i| v[i]).collect());
    let gt_flow = pair.gt_flow.as_ref().map(|g| FlowField {
        vectors: idx.iter().map(|&i| g.vectors[i]).collect(),
    });
    FramePair::new(src, tgt, optical, optical_valid, gt_flow, pair.frame_interval)
}

/// Generates one frame pair. Deterministic in (profile, sample_seed).
pub fn generate_frame_pair(profile: &ClientProfile, sample_seed: u64) -> Result<FramePair> {
    profile.validate()?;
    let base = mix_seed(&[profile.seed, hash_str(&profile.client_id), sample_seed]);
    let mut rng_geom = ChaCha8Rng::seed_from_u64(mix_seed(&[base, 1]));
    let mut rng_ego = ChaCha8Rng::seed_from_u64(mix_seed(&[base, 2]));
    let optical_seed = mix_seed(&[base, 3]);
    let mut rng_noise = ChaCha8Rng::seed_from_u64(mix_seed(&[base, 4]));

    let n = profile.points_per_frame;
    let half = profile.perception_range / 2.0;
    let n_dyn = if profile.num_objects == 0 {
        0
    } else {
        ((n as f64) * profile.dynamic_point_ratio).round() as usize
    };
    let n_bg = n - n_dyn.min(n);

    // Static background, identical in both frames before noise.
    let mut base_points: Vec<Point3> = Vec::with_capacity(n);
    for _ in 0..n_bg {
        base_points.push(uniform_box(
            &mut rng_geom,
            [-half, -half, DEFAULT_GROUND_THRESHOLD],
            [half, half, SCENE_Z_MAX],
        ));
    }

    // Rigid objects: boxes of points, translation-dominant motion with a
    // small yaw, translation magnitude = speed * frame interval.
    let mut motions: Vec<(usize, usize, RigidTransform)> = Vec::new();
    if profile.num_objects > 0 && n_dyn > 0 {
        let per = n_dyn / profile.num_objects;
        let mut rem = n_dyn % profile.num_objects;
        for _ in 0..profile.num_objects {
            let count = per + if rem > 0 { 1 } else { 0 };
            rem = rem.saturating_sub(1);
            if count == 0 {
                continue;
            }
            let center_xy = [
                rng_geom.gen_range(-half..half),
                rng_geom.gen_range(-half..half),
            ];
            let ext = [
                rng_geom.gen_range(OBJECT_EXTENT_RANGE.0..OBJECT_EXTENT_RANGE.1),
                rng_geom.gen_range(OBJECT_EXTENT_RANGE.0..OBJECT_EXTENT_RANGE.1),
                rng_geom.gen_range(OBJECT_EXTENT_RANGE.0..OBJECT_EXTENT_RANGE.1),
            ];
            let center = [
                center_xy[0],
                center_xy[1],
                DEFAULT_GROUND_THRESHOLD + 0.05 + ext[2] / 2.0,
            ];
            let lo = geometry::sub(center, geometry::scale(ext, 0.5));
            let hi = geometry::add(center, geometry::scale(ext, 0.5));
            let start = base_points.len();
            for _ in 0..count {
                base_points.push(uniform_box(&mut rng_geom, lo, hi));
            }
            let (smin, smax) = profile.object_speed_range;
            let speed = if smax > smin {
                rng_geom.gen_range(smin..=smax)
            } else {
                smin
            };
            let heading = rng_geom.gen_range(0.0..std::f64::consts::TAU);
            let translation = [
                speed * FRAME_INTERVAL * heading.cos(),
                speed * FRAME_INTERVAL * heading.sin(),
                0.0,
            ];
            let max_yaw = MAX_OBJECT_YAW_DEG.to_radians();
            let yaw = rng_geom.gen_range(-max_yaw..max_yaw);
            let t = RigidTransform::about_point(RigidTransform::rot_z(yaw), center, translation);
            motions.push((start, count, t));
        }
    }

    // Per-point motion map: identity for background, rigid for objects.
    let total = base_points.len();
    let mut moved: Vec<Point3> = base_points.clone();
    for (start, count, t) in &motions {
        for p in moved.iter_mut().skip(*start).take(*count) {
            *p = t.apply(*p);
        }
    }

    // Vehicle-like ego perturbation: an independent small rigid transform on
    // each observed frame.
    let (e1, e2) = if profile.ego_motion_sigma > 0.0 {
        (
            small_rigid(&mut rng_ego, profile.ego_motion_sigma),
            small_rigid(&mut rng_ego, profile.ego_motion_sigma),
        )
    } else {
        (RigidTransform::identity(), RigidTransform::identity())
    };
    let observed_src: Vec<Point3> = base_points.iter().map(|p| e1.apply(*p)).collect();
    let observed_tgt: Vec<Point3> = moved.iter().map(|p| e2.apply(*p)).collect();

    // Ground truth is the pre-noise motion of each observed source point.
    let gt = FlowField {
        vectors: observed_src
            .iter()
            .zip(observed_tgt.iter())
            .map(|(a, b)| geometry::sub(*b, *a))
            .collect(),
    };

    let (optical, optical_valid) = if profile.has_camera {
        let cam = default_camera(profile);
        let (o, v) = synth_optical_flow(
            &observed_src,
            &gt,
            &cam,
            profile.pixel_noise_sigma,
            optical_seed,
        );
        (Some(o), Some(v))
    } else {
        (None, None)
    };

    let mut src_points = observed_src;
    let mut tgt_points = observed_tgt;
    if profile.position_noise_sigma > 0.0 {
        let normal = Normal::new(0.0, profile.position_noise_sigma).expect("valid sigma");
        for p in src_points.iter_mut() {
            for c in p.iter_mut() {
                *c += normal.sample(&mut rng_noise);
            }
        }
        for p in tgt_points.iter_mut() {
            for c in p.iter_mut() {
                *c += normal.sample(&mut rng_noise);
            }
        }
    }
    debug_assert_eq!(src_points.len(), total);

    FramePair::new(
        PointCloud::new(src_points)?,
        PointCloud::new(tgt_points)?,
        optical,
        optical_valid,
        Some(gt),
        FRAME_INTERVAL,
    )
}

const VAL_SEED_BASE: u64 = 1_000_000;
const TEST_SEED_BASE: u64 = 2_000_000;

/// Generates the full dataset of one client. Training pairs are stripped of
/// ground truth (they are consumed self-supervised); val/test keep it.
pub fn generate_client_dataset(profile: &ClientProfile) -> Result<ClientDataset> {
    profile.validate()?;
    let gen_split = |base: u64, count: usize, keep_gt: bool| -> Result<Vec<FramePair>> {
        (0..count)
            .map(|i| {
                let pair = generate_frame_pair(profile, base + i as u64)?;
                Ok(if keep_gt { pair } else { pair.without_gt() })
            })
            .collect()
    };
    Ok(ClientDataset {
        profile: profile.clone(),
        train: gen_split(0, profile.num_train, false)?,
        val: gen_split(VAL_SEED_BASE, profile.num_val, true)?,
        test: gen_split(TEST_SEED_BASE, profile.num_test, true)?,
    })
}

/// Builds one dataset per profile (in order), rejecting duplicate ids.
pub fn build_federation(profiles: &[ClientProfile]) -> Result<Vec<ClientDataset>> {
    let mut seen = BTreeSet::new();
    for p in profiles {
        if !seen.insert(p.client_id.clone()) {
            return Err(Error::Config(format!(
                "duplicate client id: {}",
                p.client_id
            )));
        }
    }
    profiles
        .par_iter()
        .map(generate_client_dataset)
        .collect::<Result<Vec<_>>>()
}

/// The default eight-client heterogeneous federation: point budgets spanning
/// 512-4096, ranges 20-120 m, speeds up to 10 m/s, varying dynamics. The
/// first `multimodal_clients` clients carry cameras.
pub fn default_federation(
    seed: u64,
    multimodal_clients: usize,
    num_train: usize,
    num_val: usize,
    num_test: usize,
) -> Vec<ClientProfile> {
    let points = [512, 1024, 1536, 2048, 2560, 3072, 3584, 4096];
    let ranges = [20.0, 34.0, 48.0, 62.0, 76.0, 90.0, 105.0, 120.0];
    let objects = [2, 3, 2, 4, 3, 5, 4, 6];
    let speeds = [
        (0.0, 3.0),
        (1.0, 4.0),
        (2.0, 6.0),
        (0.5, 8.0),
        (3.0, 9.0),
        (1.0, 10.0),
        (4.0, 10.0),
        (2.0, 7.0),
    ];
    let dynamics = [0.15, 0.2, 0.25, 0.3, 0.35, 0.4, 0.5, 0.6];
    let pos_noise = [0.0, 0.005, 0.01, 0.0, 0.008, 0.01, 0.005, 0.01];
    (0..8)
        .map(|i| ClientProfile {
            client_id: format!("rsu{i}"),
            num_train,
            num_val,
            num_test,
            points_per_frame: points[i],
            perception_range: ranges[i],
            num_objects: objects[i],
            object_speed_range: speeds[i],
            dynamic_point_ratio: dynamics[i],
            has_camera: i < multimodal_clients,
            position_noise_sigma: pos_noise[i],
            ego_motion_sigma: 0.0,
            pixel_noise_sigma: 1.0,
            seed: mix_seed(&[seed, i as u64]),
        })
        .collect()
}

/// Held-out campus-like profiles used for the unseen-client protocol:
/// smaller ranges, slower traffic, fewer dynamic points.
pub fn unseen_profiles(seed: u64, num_val: usize, num_test: usize) -> Vec<ClientProfile> {
    (0..2)
        .map(|i| ClientProfile {
            client_id: format!("campus{i}"),
            num_train: 1,
            num_val,
            num_test,
            points_per_frame: 768 + 512 * i as usize,
            perception_range: 24.0 + 8.0 * i as f64,
            num_objects: 2,
            object_speed_range: (0.5, 4.0),
            dynamic_point_ratio: 0.12 + 0.04 * i as f64,
            has_camera: false,
            position_noise_sigma: 0.005,
            ego_motion_sigma: 0.0,
            pixel_noise_sigma: 1.0,
            seed: mix_seed(&[seed, 0x9e1d, i as u64]),
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Export format: per client, a manifest plus flat little-endian f32 arrays.
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct SampleEntry {
    n_source: usize,
    n_target: usize,
    has_optical: bool,
    has_gt: bool,
    frame_interval: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ClientManifest {
    profile: ClientProfile,
    train: Vec<SampleEntry>,
    val: Vec<SampleEntry>,
    test: Vec<SampleEntry>,
}

fn write_f32(path: &Path, values: impl Iterator<Item = f64>) -> Result<()> {
    let mut bytes = Vec::new();
    for v in values {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

fn read_f32(path: &Path, expect: usize) -> Result<Vec<f64>> {
    let bytes = std::fs::read(path)?;
    if bytes.len() != expect * 4 {
        return Err(Error::InvalidInput(format!(
            "{}: expected {} floats, file holds {} bytes",
            path.display(),
            expect,
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64)
        .collect())
}

fn sample_paths(dir: &Path, split: &str, idx: usize, field: &str) -> std::path::PathBuf {
    dir.join(format!("{split}_{idx:04}_{field}.f32"))
}

fn export_split(dir: &Path, split: &str, pairs: &[FramePair]) -> Result<Vec<SampleEntry>> {
    let mut entries = Vec::with_capacity(pairs.len());
    for (i, pair) in pairs.iter().enumerate() {
        write_f32(
            &sample_paths(dir, split, i, "src"),
            pair.source.iter().flat_map(|p| p.iter().copied()),
        )?;
        write_f32(
            &sample_paths(dir, split, i, "tgt"),
            pair.target.iter().flat_map(|p| p.iter().copied()),
        )?;
        if let Some(o) = &pair.optical {
            write_f32(
                &sample_paths(dir, split, i, "opt"),
                o.iter().flat_map(|p| p.iter().copied()),
            )?;
            let valid = pair
                .optical_valid
                .as_ref()
                .expect("optical pairs carry a validity mask");
            write_f32(
                &sample_paths(dir, split, i, "optmask"),
                valid.iter().map(|b| if *b { 1.0 } else { 0.0 }),
            )?;
        }
        if let Some(g) = &pair.gt_flow {
            write_f32(
                &sample_paths(dir, split, i, "gt"),
                g.vectors.iter().flat_map(|p| p.iter().copied()),
            )?;
        }
        entries.push(SampleEntry {
            n_source: pair.source.len(),
            n_target: pair.target.len(),
            has_optical: pair.optical.is_some(),
            has_gt: pair.gt_flow.is_some(),
            frame_interval: pair.frame_interval,
        });
    }
    Ok(entries)
}

fn import_split(dir: &Path, split: &str, entries: &[SampleEntry]) -> Result<Vec<FramePair>> {
    let mut pairs = Vec::with_capacity(entries.len());
    for (i, e) in entries.iter().enumerate() {
        let src = read_f32(&sample_paths(dir, split, i, "src"), e.n_source * 3)?;
        let tgt = read_f32(&sample_paths(dir, split, i, "tgt"), e.n_target * 3)?;
        let to_points = |v: &[f64]| -> Vec<Point3> {
            v.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
        };
        let optical = if e.has_optical {
            let o = read_f32(&sample_paths(dir, split, i, "opt"), e.n_source * 2)?;
            Some(o.chunks_exact(2).map(|c| [c[0], c[1]]).collect::<Vec<_>>())
        } else {
            None
        };
        let optical_valid = if e.has_optical {
            let m = read_f32(&sample_paths(dir, split, i, "optmask"), e.n_source)?;
            Some(m.iter().map(|v| *v != 0.0).collect::<Vec<_>>())
        } else {
            None
        };
        let gt_flow = if e.has_gt {
            let g = read_f32(&sample_paths(dir, split, i, "gt"), e.n_source * 3)?;
            Some(FlowField {
                vectors: to_points(&g),
            })
        } else {
            None
        };
        pairs.push(FramePair::new(
            PointCloud::new(to_points(&src))?,
            PointCloud::new(to_points(&tgt))?,
            optical,
            optical_valid,
            gt_flow,
            e.frame_interval,
        )?);
    }
    Ok(pairs)
}

/// Writes a client dataset as a directory of flat f32 arrays plus a manifest.
pub fn export_dataset(ds: &ClientDataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let manifest = ClientManifest {
        profile: ds.profile.clone(),
        train: export_split(dir, "train", &ds.train)?,
        val: export_split(dir, "val", &ds.val)?,
        test: export_split(dir, "test", &ds.test)?,
    };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

pub fn import_dataset(dir: &Path) -> Result<ClientDataset> {
    let manifest: ClientManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    Ok(ClientDataset {
        train: import_split(dir, "train", &manifest.train)?,
        val: import_split(dir, "val", &manifest.val)?,
        test: import_split(dir, "test", &manifest.test)?,
        profile: manifest.profile,
    })
}

/// Exports every client under `dir/<client_id>/`.
pub fn export_federation(datasets: &[ClientDataset], dir: &Path) -> Result<()> {
    for ds in datasets {
        export_dataset(ds, &dir.join(&ds.profile.client_id))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn static_profile() -> ClientProfile {
        ClientProfile {
            client_id: "t0".into(),
            num_train: 2,
            num_val: 1,
            num_test: 1,
            points_per_frame: 200,
            perception_range: 30.0,
            num_objects: 0,
            object_speed_range: (0.0, 0.0),
            dynamic_point_ratio: 0.0,
            has_camera: false,
            position_noise_sigma: 0.0,
            ego_motion_sigma: 0.0,
            pixel_noise_sigma: 0.0,
            seed: 9,
        }
    }

    fn dynamic_profile() -> ClientProfile {
        ClientProfile {
            client_id: "t1".into(),
            num_train: 2,
            num_val: 1,
            num_test: 1,
            points_per_frame: 400,
            perception_range: 40.0,
            num_objects: 2,
            object_speed_range: (5.0, 5.0),
            dynamic_point_ratio: 0.3,
            has_camera: true,
            position_noise_sigma: 0.0,
            ego_motion_sigma: 0.0,
            pixel_noise_sigma: 0.0,
            seed: 10,
        }
    }

    #[test]
    fn static_scene_has_identical_frames_and_zero_flow() {
        let pair = generate_frame_pair(&static_profile(), 0).unwrap();
        assert_eq!(pair.source, pair.target);
        let gt = pair.gt_flow.as_ref().unwrap();
        assert!(gt.vectors.iter().all(|v| *v == [0.0; 3]));
        assert!(pair.optical.is_none());
    }

    #[test]
    fn object_flow_magnitude_is_speed_times_interval() {
        // 5 m/s at 0.1 s: flow magnitude about 0.5 m on object points (the
        // small yaw adds a rotational component around the object center).
        let mut profile = dynamic_profile();
        profile.has_camera = false;
        let pair = generate_frame_pair(&profile, 3).unwrap();
        let gt = pair.gt_flow.as_ref().unwrap();
        let moving: Vec<f64> = gt
            .vectors
            .iter()
            .filter(|v| geometry::norm(**v) > 1e-9)
            .map(|v| geometry::norm(*v))
            .collect();
        assert!(!moving.is_empty());
        for m in &moving {
            assert!(
                (*m - 0.5).abs() < 0.3,
                "object flow magnitude {m} too far from speed x interval"
            );
        }
        // Warping the source by gt reproduces the target exactly (noise-free).
        for ((s, f), t) in pair
            .source
            .iter()
            .zip(gt.vectors.iter())
            .zip(pair.target.iter())
        {
            let w = geometry::add(*s, *f);
            for c in 0..3 {
                assert!((w[c] - t[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let p = dynamic_profile();
        let a = generate_frame_pair(&p, 7).unwrap();
        let b = generate_frame_pair(&p, 7).unwrap();
        assert_eq!(a, b);
        let c = generate_frame_pair(&p, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn camera_toggle_keeps_geometry_identical() {
        let with = dynamic_profile();
        let mut without = with.clone();
        without.has_camera = false;
        let a = generate_frame_pair(&with, 5).unwrap();
        let b = generate_frame_pair(&without, 5).unwrap();
        assert_eq!(a.source, b.source);
        assert_eq!(a.target, b.target);
        assert!(a.optical.is_some() && b.optical.is_none());
    }

    #[test]
    fn zero_point_profile_rejected() {
        let mut p = static_profile();
        p.points_per_frame = 0;
        assert!(generate_frame_pair(&p, 0).is_err());
    }

    #[test]
    fn dynamic_fraction_tracks_profile() {
        let mut lo = dynamic_profile();
        lo.dynamic_point_ratio = 0.1;
        lo.client_id = "lo".into();
        let mut hi = dynamic_profile();
        hi.dynamic_point_ratio = 0.6;
        hi.client_id = "hi".into();
        let measure = |p: &ClientProfile| {
            let pair = generate_frame_pair(p, 1).unwrap();
            let gt = pair.gt_flow.unwrap();
            let dynamic = gt
                .vectors
                .iter()
                .filter(|v| geometry::norm(**v) > 1e-9)
                .count();
            dynamic as f64 / gt.len() as f64
        };
        let (mlo, mhi) = (measure(&lo), measure(&hi));
        let tol = 3.0 / (lo.points_per_frame as f64).sqrt();
        assert!((mlo - 0.1).abs() <= tol.max(0.1), "measured {mlo}");
        assert!((mhi - 0.6).abs() <= tol.max(0.1), "measured {mhi}");
        assert!(mlo < mhi);
    }

    #[test]
    fn projection_axis_and_behind_cases() {
        let cam = CameraModel::new(
            500.0,
            500.0,
            960.0,
            640.0,
            1920.0,
            1280.0,
            RigidTransform::identity(),
        )
        .unwrap();
        // Optical axis at depth 1 hits the principal point.
        assert_eq!(cam.project([0.0, 0.0, 1.0]), Some([960.0, 640.0]));
        // Behind the camera.
        assert_eq!(cam.project([0.0, 0.0, -1.0]), None);
        // Hand pinhole arithmetic: u = 960 + 500 * (1/2) = 1210.
        let px = cam.project([1.0, 0.0, 2.0]).unwrap();
        assert!((px[0] - 1210.0).abs() < 1e-12);
        assert!((px[1] - 640.0).abs() < 1e-12);
        // Outside the image bounds.
        assert_eq!(cam.project([10.0, 0.0, 2.0]), None);
    }

    #[test]
    fn optical_flow_of_lateral_motion_matches_projection_oracle() {
        let cam = CameraModel::new(
            500.0,
            500.0,
            960.0,
            640.0,
            1920.0,
            1280.0,
            RigidTransform::identity(),
        )
        .unwrap();
        let p = [0.4, -0.2, 4.0];
        let f = [0.3, 0.1, 0.0];
        let gt = FlowField { vectors: vec![f] };
        let (opt, valid) = synth_optical_flow(&[p], &gt, &cam, 0.0, 0);
        assert!(valid[0]);
        // Motion parallel to the image plane at fixed depth: displacement =
        // focal * (3D displacement / depth).
        assert!((opt[0][0] - 500.0 * 0.3 / 4.0).abs() < 1e-12);
        assert!((opt[0][1] - 500.0 * 0.1 / 4.0).abs() < 1e-12);

        // Static point projects to zero flow; out-of-view flips the flag.
        let (opt0, valid0) =
            synth_optical_flow(&[p], &FlowField { vectors: vec![[0.0; 3]] }, &cam, 0.0, 0);
        assert!(valid0[0] && opt0[0] == [0.0, 0.0]);
        let behind = [0.0, 0.0, -1.0];
        let (optb, validb) = synth_optical_flow(&[behind], &gt, &cam, 0.0, 0);
        assert!(!validb[0] && optb[0] == [0.0, 0.0]);
    }

    #[test]
    fn dynamic_visible_points_have_nonzero_optical_flow() {
        let profile = dynamic_profile();
        let pair = generate_frame_pair(&profile, 11).unwrap();
        let gt = pair.gt_flow.as_ref().unwrap();
        let opt = pair.optical.as_ref().unwrap();
        let valid = pair.optical_valid.as_ref().unwrap();
        let mut checked = 0;
        for i in 0..gt.len() {
            if valid[i] && geometry::norm(gt.vectors[i]) > 1e-6 {
                let n = (opt[i][0].powi(2) + opt[i][1].powi(2)).sqrt();
                assert!(n > 0.0, "dynamic visible point {i} has zero optical flow");
                checked += 1;
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn downsample_contracts() {
        let pair = generate_frame_pair(&dynamic_profile(), 2).unwrap();
        let c = &pair.source;
        // n == |c|: a permutation.
        let (all, idx) = downsample(c, c.len(), 1).unwrap();
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..c.len()).collect::<Vec<_>>());
        assert_eq!(all.len(), c.len());
        // n = 1: a point of c.
        let (one, oi) = downsample(c, 1, 2).unwrap();
        assert_eq!(one.points()[0], c.points()[oi[0]]);
        // 256 from 400: distinct valid indices.
        let (_, idx256) = downsample(c, 256, 3).unwrap();
        let uniq: BTreeSet<_> = idx256.iter().collect();
        assert_eq!(uniq.len(), 256);
        assert!(idx256.iter().all(|i| *i < c.len()));
        // Oversampling draws with replacement.
        let (big, bigidx) = downsample(c, c.len() + 50, 4).unwrap();
        assert_eq!(big.len(), c.len() + 50);
        assert!(bigidx.iter().all(|i| *i < c.len()));
        // Empty input errors.
        let empty = PointCloud::new(vec![]).unwrap();
        assert!(downsample(&empty, 5, 0).is_err());
    }

    #[test]
    fn downsample_pair_keeps_attributes_aligned() {
        let pair = generate_frame_pair(&dynamic_profile(), 6).unwrap();
        let small = downsample_pair(&pair, 64, 99).unwrap();
        assert_eq!(small.source.len(), 64);
        assert_eq!(small.target.len(), 64);
        assert_eq!(small.optical.as_ref().unwrap().len(), 64);
        assert_eq!(small.gt_flow.as_ref().unwrap().len(), 64);
        // Flow still matches source -> somewhere in the scene: warped points
        // must coincide with original warped positions for matching indices.
        let gt = pair.gt_flow.as_ref().unwrap();
        let sgt = small.gt_flow.as_ref().unwrap();
        for i in 0..64 {
            let orig = pair
                .source
                .iter()
                .position(|p| *p == small.source.points()[i])
                .unwrap();
            assert_eq!(sgt.vectors[i], gt.vectors[orig]);
        }
    }

    #[test]
    fn federation_rejects_duplicate_ids_and_matches_budgets() {
        let mut a = static_profile();
        a.client_id = "dup".into();
        let mut b = dynamic_profile();
        b.client_id = "dup".into();
        let err = build_federation(&[a.clone(), b]).unwrap_err();
        assert!(err.to_string().contains("duplicate client id"));

        let profiles = default_federation(1, 4, 3, 1, 1);
        let feds = build_federation(&profiles).unwrap();
        assert_eq!(feds.len(), 8);
        for (ds, p) in feds.iter().zip(&profiles) {
            assert_eq!(ds.data_size(), 3);
            assert!(ds.train.iter().all(|t| t.gt_flow.is_none()));
            assert!(ds.val.iter().all(|t| t.gt_flow.is_some()));
            assert!(ds.test.iter().all(|t| t.gt_flow.is_some()));
            for pair in ds.train.iter().chain(&ds.val).chain(&ds.test) {
                assert_eq!(pair.source.len(), p.points_per_frame);
            }
            assert_eq!(ds.train[0].optical.is_some(), p.has_camera);
        }
    }

    #[test]
    fn ego_motion_perturbs_static_background() {
        let mut p = static_profile();
        p.ego_motion_sigma = 0.05;
        let pair = generate_frame_pair(&p, 0).unwrap();
        // Frames no longer coincide, and gt flow reflects the perturbation.
        assert_ne!(pair.source, pair.target);
        let gt = pair.gt_flow.as_ref().unwrap();
        assert!(gt.vectors.iter().any(|v| geometry::norm(*v) > 1e-4));
        // Still exact: source + gt = target.
        for ((s, f), t) in pair
            .source
            .iter()
            .zip(gt.vectors.iter())
            .zip(pair.target.iter())
        {
            let w = geometry::add(*s, *f);
            for c in 0..3 {
                assert!((w[c] - t[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn export_import_round_trip() {
        let ds = generate_client_dataset(&dynamic_profile()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export_dataset(&ds, dir.path()).unwrap();
        let back = import_dataset(dir.path()).unwrap();
        assert_eq!(back.profile, ds.profile);
        assert_eq!(back.train.len(), ds.train.len());
        // f32 round trip: equal within single precision.
        for (a, b) in ds.train.iter().zip(&back.train) {
            for (pa, pb) in a.source.iter().zip(b.source.iter()) {
                for c in 0..3 {
                    assert!((pa[c] - pb[c]).abs() <= pa[c].abs().max(1.0) * 1e-6);
                }
            }
            assert_eq!(a.optical.is_some(), b.optical.is_some());
        }
        // Re-export is byte-identical (generation and export deterministic).
        let dir2 = tempfile::tempdir().unwrap();
        export_dataset(&ds, dir2.path()).unwrap();
        let m1 = std::fs::read(dir.path().join("manifest.json")).unwrap();
        let m2 = std::fs::read(dir2.path().join("manifest.json")).unwrap();
        assert_eq!(m1, m2);
        let f1 = std::fs::read(dir.path().join("train_0000_src.f32")).unwrap();
        let f2 = std::fs::read(dir2.path().join("train_0000_src.f32")).unwrap();
        assert_eq!(f1, f2);
    }
}
