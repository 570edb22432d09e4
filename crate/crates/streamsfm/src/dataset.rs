//! Dataset and artifact file formats: cameras.json, matches.csv,
//! tracklets.csv, control_points.csv, truth.json, intrinsics.json,
//! timemaps.json, scene.json. All structured records are JSON with fixed
//! field order; bulk observations are CSV with mandatory headers; pixels are
//! stored raw (distorted).

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::camera::{Camera, Intrinsics, Pixel, Pose, StreamMeta};
use crate::error::{Error, Result};
use crate::scene::{DynamicObject, Gauge, ReconstructionMode, Scene, StaticPoint, TrackletRef};
use crate::spline::{SplineCurve, TimeMap, Tracklet};

// ---------------------------------------------------------------------------
// in-memory dataset
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorIntrinsics {
    pub f: f64,
    pub cx: f64,
    pub cy: f64,
    pub d0: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub id: usize,
    pub fps: f64,
    pub frame_count: u32,
    pub image_w: u32,
    pub image_h: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prior_intrinsics: Option<PriorIntrinsics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CamerasFile {
    cameras: Vec<CameraRecord>,
}

/// One pixel-pair record of matches.csv / control_points.csv.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchRecord {
    pub cam_i: usize,
    pub cam_j: usize,
    pub p1: Pixel,
    pub p2: Pixel,
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub cameras: Vec<CameraRecord>,
    pub matches: Vec<MatchRecord>,
    pub tracklets: Vec<Tracklet>,
    pub control_points: Vec<MatchRecord>,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        let n = self.cameras.len();
        if n < 2 {
            return Err(Error::Config(format!("{n} cameras, need at least 2")));
        }
        for (i, c) in self.cameras.iter().enumerate() {
            if c.id != i {
                return Err(Error::Config(format!(
                    "camera ids must be 0..N-1 in order, found {} at position {i}",
                    c.id
                )));
            }
            if !(c.fps > 0.0) {
                return Err(Error::Config(format!("camera {i} fps {} invalid", c.fps)));
            }
        }
        for m in self.matches.iter().chain(self.control_points.iter()) {
            if m.cam_i >= n || m.cam_j >= n || m.cam_i == m.cam_j {
                return Err(Error::Config(format!(
                    "match references camera pair ({}, {})",
                    m.cam_i, m.cam_j
                )));
            }
        }
        for t in &self.tracklets {
            if t.camera_id >= n {
                return Err(Error::Config(format!(
                    "tracklet references camera {}",
                    t.camera_id
                )));
            }
            t.validate()?;
        }
        Ok(())
    }

    /// Matches grouped per camera pair, deterministic order.
    pub fn matches_by_pair(&self) -> BTreeMap<(usize, usize), Vec<(Pixel, Pixel)>> {
        let mut map: BTreeMap<(usize, usize), Vec<(Pixel, Pixel)>> = BTreeMap::new();
        for m in &self.matches {
            map.entry((m.cam_i, m.cam_j)).or_default().push((m.p1, m.p2));
        }
        map
    }

    /// Tracklets grouped per camera, deterministic order.
    pub fn tracklets_by_camera(&self) -> Vec<Vec<&Tracklet>> {
        let mut out: Vec<Vec<&Tracklet>> = vec![Vec::new(); self.cameras.len()];
        for t in &self.tracklets {
            out[t.camera_id].push(t);
        }
        out
    }
}

// ---------------------------------------------------------------------------
// CSV / JSON plumbing
// ---------------------------------------------------------------------------

fn validation_error(file: &Path, line: usize, field: &str, message: String) -> Error {
    Error::Validation {
        file: file.display().to_string(),
        line,
        field: field.to_string(),
        message,
    }
}

fn parse_field<T: std::str::FromStr>(
    file: &Path,
    line: usize,
    field: &str,
    value: &str,
) -> Result<T> {
    value
        .trim()
        .parse::<T>()
        .map_err(|_| validation_error(file, line, field, format!("cannot parse `{value}`")))
}

fn read_pair_csv(path: &Path) -> Result<Vec<MatchRecord>> {
    let file = std::fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let header = match lines.next() {
        Some((_, Ok(h))) => h,
        _ => return Err(validation_error(path, 1, "header", "missing header".into())),
    };
    let expected = "cam_i,cam_j,u1,v1,u2,v2";
    if header.trim() != expected {
        return Err(validation_error(
            path,
            1,
            "header",
            format!("expected `{expected}`, found `{header}`"),
        ));
    }
    let mut out = Vec::new();
    for (idx, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 6 {
            return Err(validation_error(
                path,
                idx + 1,
                "row",
                format!("expected 6 columns, found {}", cols.len()),
            ));
        }
        out.push(MatchRecord {
            cam_i: parse_field(path, idx + 1, "cam_i", cols[0])?,
            cam_j: parse_field(path, idx + 1, "cam_j", cols[1])?,
            p1: Pixel::new(
                parse_field(path, idx + 1, "u1", cols[2])?,
                parse_field(path, idx + 1, "v1", cols[3])?,
            ),
            p2: Pixel::new(
                parse_field(path, idx + 1, "u2", cols[4])?,
                parse_field(path, idx + 1, "v2", cols[5])?,
            ),
        });
    }
    Ok(out)
}

fn write_pair_csv(path: &Path, records: &[MatchRecord]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "cam_i,cam_j,u1,v1,u2,v2")?;
    for m in records {
        writeln!(
            f,
            "{},{},{},{},{},{}",
            m.cam_i, m.cam_j, m.p1.x, m.p1.y, m.p2.x, m.p2.y
        )?;
    }
    Ok(())
}

fn read_tracklets_csv(path: &Path) -> Result<Vec<Tracklet>> {
    let file = std::fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let header = match lines.next() {
        Some((_, Ok(h))) => h,
        _ => return Err(validation_error(path, 1, "header", "missing header".into())),
    };
    let expected = "camera_id,object_id,frame,u,v";
    if header.trim() != expected {
        return Err(validation_error(
            path,
            1,
            "header",
            format!("expected `{expected}`, found `{header}`"),
        ));
    }
    let mut grouped: BTreeMap<(usize, usize), Vec<(f64, Pixel)>> = BTreeMap::new();
    for (idx, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 5 {
            return Err(validation_error(
                path,
                idx + 1,
                "row",
                format!("expected 5 columns, found {}", cols.len()),
            ));
        }
        let camera_id: usize = parse_field(path, idx + 1, "camera_id", cols[0])?;
        let object_id: usize = parse_field(path, idx + 1, "object_id", cols[1])?;
        let frame: f64 = parse_field(path, idx + 1, "frame", cols[2])?;
        let u: f64 = parse_field(path, idx + 1, "u", cols[3])?;
        let v: f64 = parse_field(path, idx + 1, "v", cols[4])?;
        grouped
            .entry((camera_id, object_id))
            .or_default()
            .push((frame, Pixel::new(u, v)));
    }
    Ok(grouped
        .into_iter()
        .map(|((camera_id, object_id), samples)| Tracklet {
            camera_id,
            object_id,
            samples,
        })
        .collect())
}

fn write_tracklets_csv(path: &Path, tracklets: &[Tracklet]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "camera_id,object_id,frame,u,v")?;
    for t in tracklets {
        for (frame, p) in &t.samples {
            writeln!(f, "{},{},{},{},{}", t.camera_id, t.object_id, frame, p.x, p.y)?;
        }
    }
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let data = std::fs::read_to_string(path)?;
    serde_json::from_str(&data).map_err(|e| {
        validation_error(path, e.line(), "json", e.to_string())
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut out = serde_json::to_string_pretty(value)?;
    out.push('\n');
    std::fs::write(path, out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// dataset directory
// ---------------------------------------------------------------------------

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let cams: CamerasFile = read_json(&dir.join("cameras.json"))?;
    let matches_path = dir.join("matches.csv");
    let matches = if matches_path.exists() {
        read_pair_csv(&matches_path)?
    } else {
        Vec::new()
    };
    let tracklets_path = dir.join("tracklets.csv");
    let tracklets = if tracklets_path.exists() {
        read_tracklets_csv(&tracklets_path)?
    } else {
        Vec::new()
    };
    let cp_path = dir.join("control_points.csv");
    let control_points = if cp_path.exists() {
        read_pair_csv(&cp_path)?
    } else {
        Vec::new()
    };
    let dataset = Dataset {
        cameras: cams.cameras,
        matches,
        tracklets,
        control_points,
    };
    dataset.validate()?;
    Ok(dataset)
}

pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_json(
        &dir.join("cameras.json"),
        &CamerasFile {
            cameras: dataset.cameras.clone(),
        },
    )?;
    write_pair_csv(&dir.join("matches.csv"), &dataset.matches)?;
    write_tracklets_csv(&dir.join("tracklets.csv"), &dataset.tracklets)?;
    write_pair_csv(&dir.join("control_points.csv"), &dataset.control_points)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// scene.json
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CameraJson {
    id: usize,
    fps: f64,
    frame_count: u32,
    image_w: u32,
    image_h: u32,
    f: f64,
    cx: f64,
    cy: f64,
    d0: f64,
    /// Rotation as a unit quaternion (w, x, y, z).
    q: [f64; 4],
    t: [f64; 3],
    focal_init: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct StaticPointJson {
    xyz: [f64; 3],
    obs: Vec<(usize, f64, f64)>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TrackletJson {
    camera: usize,
    object_id: usize,
    samples: Vec<(f64, f64, f64)>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct DynamicObjectJson {
    degree: usize,
    knots: Vec<f64>,
    control_points: Vec<[f64; 3]>,
    tracklets: Vec<TrackletJson>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct SceneJson {
    mode: String,
    gauge: Gauge,
    cameras: Vec<CameraJson>,
    time_maps: Vec<TimeMap>,
    static_points: Vec<StaticPointJson>,
    dynamic_objects: Vec<DynamicObjectJson>,
}

pub fn scene_to_json_string(scene: &Scene) -> Result<String> {
    let json = SceneJson {
        mode: scene.mode.as_str().to_string(),
        gauge: scene.gauge,
        cameras: scene
            .cameras
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let q = canonical_quaternion(&c.pose.rotation);
                CameraJson {
                    id: c.stream.id,
                    fps: c.stream.fps,
                    frame_count: c.stream.frame_count,
                    image_w: c.intrinsics.image_w,
                    image_h: c.intrinsics.image_h,
                    f: c.intrinsics.f,
                    cx: c.intrinsics.cx,
                    cy: c.intrinsics.cy,
                    d0: c.intrinsics.d0,
                    q,
                    t: [
                        c.pose.translation.x,
                        c.pose.translation.y,
                        c.pose.translation.z,
                    ],
                    focal_init: scene.focal_init.get(i).copied().unwrap_or(c.intrinsics.f),
                }
            })
            .collect(),
        time_maps: scene.time_maps.clone(),
        static_points: scene
            .static_points
            .iter()
            .map(|p| StaticPointJson {
                xyz: [p.position.x, p.position.y, p.position.z],
                obs: p
                    .observations
                    .iter()
                    .map(|(cam, px)| (*cam, px.x, px.y))
                    .collect(),
            })
            .collect(),
        dynamic_objects: scene
            .dynamic_objects
            .iter()
            .map(|o| DynamicObjectJson {
                degree: o.spline.degree,
                knots: o.spline.knots.clone(),
                control_points: o
                    .spline
                    .control_points
                    .iter()
                    .map(|c| [c.x, c.y, c.z])
                    .collect(),
                tracklets: o
                    .tracklets
                    .iter()
                    .map(|t| TrackletJson {
                        camera: t.camera,
                        object_id: t.object_id,
                        samples: t.samples.iter().map(|(f, p)| (*f, p.x, p.y)).collect(),
                    })
                    .collect(),
            })
            .collect(),
    };
    let mut s = serde_json::to_string_pretty(&json)?;
    s.push('\n');
    Ok(s)
}

pub fn write_scene(path: &Path, scene: &Scene) -> Result<()> {
    std::fs::write(path, scene_to_json_string(scene)?)?;
    Ok(())
}

pub fn read_scene(path: &Path) -> Result<Scene> {
    let json: SceneJson = read_json(path)?;
    scene_from_json(json)
}

fn scene_from_json(json: SceneJson) -> Result<Scene> {
    let mode = ReconstructionMode::parse(&json.mode)?;
    let cameras: Vec<Camera> = json
        .cameras
        .iter()
        .map(|c| {
            let norm = (c.q[0] * c.q[0] + c.q[1] * c.q[1] + c.q[2] * c.q[2] + c.q[3] * c.q[3])
                .sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::Config(format!(
                    "camera {} quaternion norm {norm} outside 1 +- 1e-6",
                    c.id
                )));
            }
            let q = normalize_quaternion(&c.q);
            Ok(Camera {
                intrinsics: Intrinsics {
                    f: c.f,
                    cx: c.cx,
                    cy: c.cy,
                    d0: c.d0,
                    image_w: c.image_w,
                    image_h: c.image_h,
                },
                pose: Pose {
                    rotation: matrix_from_quaternion(&q),
                    translation: Vector3::new(c.t[0], c.t[1], c.t[2]),
                },
                stream: StreamMeta {
                    id: c.id,
                    fps: c.fps,
                    frame_count: c.frame_count,
                },
            })
        })
        .collect::<Result<_>>()?;
    let focal_init = json.cameras.iter().map(|c| c.focal_init).collect();
    Ok(Scene {
        mode,
        cameras,
        time_maps: json.time_maps,
        static_points: json
            .static_points
            .into_iter()
            .map(|p| StaticPoint {
                position: Vector3::new(p.xyz[0], p.xyz[1], p.xyz[2]),
                observations: p
                    .obs
                    .into_iter()
                    .map(|(cam, u, v)| (cam, Pixel::new(u, v)))
                    .collect(),
            })
            .collect(),
        dynamic_objects: json
            .dynamic_objects
            .into_iter()
            .map(|o| DynamicObject {
                spline: SplineCurve {
                    degree: o.degree,
                    knots: o.knots,
                    control_points: o
                        .control_points
                        .into_iter()
                        .map(|c| Vector3::new(c[0], c[1], c[2]))
                        .collect(),
                },
                tracklets: o
                    .tracklets
                    .into_iter()
                    .map(|t| TrackletRef {
                        camera: t.camera,
                        object_id: t.object_id,
                        samples: t
                            .samples
                            .into_iter()
                            .map(|(f, u, v)| (f, Pixel::new(u, v)))
                            .collect(),
                    })
                    .collect(),
            })
            .collect(),
        gauge: json.gauge,
        focal_init,
    })
}

/// Deterministic quaternion -> rotation matrix (standard formula; maps the
/// identity quaternion to the exact identity matrix).
fn matrix_from_quaternion(q: &[f64; 4]) -> Matrix3<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Shepperd's method with a deterministic sign convention (w >= 0, ties
/// broken by the first nonzero component).
fn quaternion_from_matrix(m: &Matrix3<f64>) -> [f64; 4] {
    let trace = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
    let mut q = if trace > m[(0, 0)] && trace > m[(1, 1)] && trace > m[(2, 2)] {
        let s = (trace + 1.0).sqrt() * 2.0;
        [
            0.25 * s,
            (m[(2, 1)] - m[(1, 2)]) / s,
            (m[(0, 2)] - m[(2, 0)]) / s,
            (m[(1, 0)] - m[(0, 1)]) / s,
        ]
    } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
        let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
        [
            (m[(2, 1)] - m[(1, 2)]) / s,
            0.25 * s,
            (m[(0, 1)] + m[(1, 0)]) / s,
            (m[(0, 2)] + m[(2, 0)]) / s,
        ]
    } else if m[(1, 1)] > m[(2, 2)] {
        let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
        [
            (m[(0, 2)] - m[(2, 0)]) / s,
            (m[(0, 1)] + m[(1, 0)]) / s,
            0.25 * s,
            (m[(1, 2)] + m[(2, 1)]) / s,
        ]
    } else {
        let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
        [
            (m[(1, 0)] - m[(0, 1)]) / s,
            (m[(0, 2)] + m[(2, 0)]) / s,
            (m[(1, 2)] + m[(2, 1)]) / s,
            0.25 * s,
        ]
    };
    let flip = if q[0] != 0.0 {
        q[0] < 0.0
    } else if q[1] != 0.0 {
        q[1] < 0.0
    } else if q[2] != 0.0 {
        q[2] < 0.0
    } else {
        q[3] < 0.0
    };
    if flip {
        for v in &mut q {
            *v = -*v;
        }
    }
    q
}

/// The exact normalization applied when parsing; also used inside the
/// writer's fixed-point canonicalization so both sides agree bitwise.
fn normalize_quaternion(q: &[f64; 4]) -> [f64; 4] {
    let norm = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    if norm == 1.0 {
        *q
    } else {
        [q[0] / norm, q[1] / norm, q[2] / norm, q[3] / norm]
    }
}

fn quat_bits(q: &[f64; 4]) -> [u64; 4] {
    [
        q[0].to_bits(),
        q[1].to_bits(),
        q[2].to_bits(),
        q[3].to_bits(),
    ]
}

/// Quaternion whose serialize/parse round trip is bit-stable: iterate the
/// conversion pair to a fixed point (or pick the deterministic minimum of a
/// conversion cycle).
fn canonical_quaternion(m: &Matrix3<f64>) -> [f64; 4] {
    let mut q = quaternion_from_matrix(m);
    let mut seen: Vec<([u64; 4], [f64; 4])> = vec![(quat_bits(&q), q)];
    for _ in 0..8 {
        let next = quaternion_from_matrix(&matrix_from_quaternion(&normalize_quaternion(&q)));
        let bits = quat_bits(&next);
        if bits == quat_bits(&q) {
            return q;
        }
        if let Some(pos) = seen.iter().position(|(b, _)| *b == bits) {
            // conversion cycle: deterministic representative
            return seen[pos..]
                .iter()
                .min_by(|a, b| a.0.cmp(&b.0))
                .unwrap()
                .1;
        }
        seen.push((bits, next));
        q = next;
    }
    q
}

// ---------------------------------------------------------------------------
// calibration, sync and truth artifacts
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IntrinsicsRecord {
    pub id: usize,
    pub f: f64,
    pub cx: f64,
    pub cy: f64,
    pub d0: f64,
    pub brown_k1: f64,
    pub brown_k2: f64,
    pub brown_k3: f64,
    pub brown_max_discrepancy_px: f64,
    pub brown_warning: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CalibrationPairRecord {
    pub cam_i: usize,
    pub cam_j: usize,
    pub matches: usize,
    pub inliers: usize,
    pub low_coverage: bool,
    /// Focal recovery from F can fail for degenerate configurations; the
    /// fallback default focal is recorded instead.
    pub focal_degenerate: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IntrinsicsFile {
    pub cameras: Vec<IntrinsicsRecord>,
    pub pairs: Vec<CalibrationPairRecord>,
}

pub fn write_intrinsics(path: &Path, file: &IntrinsicsFile) -> Result<()> {
    write_json(path, file)
}

pub fn read_intrinsics(path: &Path) -> Result<IntrinsicsFile> {
    read_json(path)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TimeMapPairRecord {
    pub cam_i: usize,
    pub cam_j: usize,
    /// Maps cam_j frames to cam_i frames.
    pub alpha: f64,
    pub beta: f64,
    pub inlier_samples: usize,
    pub score: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TimeMapsFile {
    pub pairs: Vec<TimeMapPairRecord>,
    /// Per camera, map onto camera 0's clock.
    pub to_reference: Vec<TimeMap>,
}

pub fn write_timemaps(path: &Path, file: &TimeMapsFile) -> Result<()> {
    write_json(path, file)
}

pub fn read_timemaps(path: &Path) -> Result<TimeMapsFile> {
    read_json(path)
}

/// Ground truth emitted by the synthetic generator.
pub struct GroundTruthFile {
    pub scene: Scene,
    pub match_inlier_labels: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
struct TruthJson {
    scene: serde_json::Value,
    match_inlier_labels: Vec<bool>,
}

pub fn write_truth(path: &Path, truth: &GroundTruthFile) -> Result<()> {
    let scene_str = scene_to_json_string(&truth.scene)?;
    let json = TruthJson {
        scene: serde_json::from_str(&scene_str)?,
        match_inlier_labels: truth.match_inlier_labels.clone(),
    };
    write_json(path, &json)
}

pub fn read_truth(path: &Path) -> Result<GroundTruthFile> {
    let json: TruthJson = read_json(path)?;
    let scene_json: SceneJson = serde_json::from_value(json.scene)?;
    Ok(GroundTruthFile {
        scene: scene_from_json(scene_json)?,
        match_inlier_labels: json.match_inlier_labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spline::uniform_clamped_knots;
    use tempfile::tempdir;

    fn sample_scene() -> Scene {
        let cam = |id: usize, f: f64| Camera {
            intrinsics: Intrinsics::new(f, 1920, 1080, -2e-7),
            pose: Pose::identity(),
            stream: StreamMeta {
                id,
                fps: 15.0,
                frame_count: 900,
            },
        };
        let mut cam1 = cam(1, 900.0);
        let angle: f64 = 0.3;
        cam1.pose.rotation = Matrix3::new(
            angle.cos(),
            0.0,
            angle.sin(),
            0.0,
            1.0,
            0.0,
            -angle.sin(),
            0.0,
            angle.cos(),
        );
        cam1.pose.translation = Vector3::new(0.6, 0.0, 0.8);
        let knots = uniform_clamped_knots(0.0, 100.0, 3, 15.0);
        let n_ctrl = knots.len() - 4;
        Scene {
            mode: ReconstructionMode::StaticDynamicSync,
            cameras: vec![cam(0, 1500.0), cam1],
            time_maps: vec![
                TimeMap::identity(),
                TimeMap {
                    alpha: 0.6,
                    beta: 37.0,
                },
            ],
            static_points: vec![StaticPoint {
                position: Vector3::new(0.1, -0.2, 2.0),
                observations: vec![(0, Pixel::new(1000.5, 500.25)), (1, Pixel::new(700.0, 600.0))],
            }],
            dynamic_objects: vec![DynamicObject {
                spline: SplineCurve {
                    degree: 3,
                    knots,
                    control_points: (0..n_ctrl)
                        .map(|i| Vector3::new(i as f64 * 0.01, 0.0, 2.0))
                        .collect(),
                },
                tracklets: vec![TrackletRef {
                    camera: 0,
                    object_id: 4,
                    samples: vec![(0.0, Pixel::new(10.0, 20.0)), (1.0, Pixel::new(11.0, 21.0))],
                }],
            }],
            gauge: Gauge {
                reference_camera: 0,
                unit_baseline_camera: 1,
            },
            focal_init: vec![1480.0, 910.0],
        }
    }

    #[test]
    fn scene_json_round_trip_is_byte_stable() {
        let scene = sample_scene();
        let dir = tempdir().unwrap();
        let path = dir.path().join("scene.json");
        write_scene(&path, &scene).unwrap();
        let first = std::fs::read(&path).unwrap();
        let parsed = read_scene(&path).unwrap();
        write_scene(&path, &parsed).unwrap();
        let second = std::fs::read(&path).unwrap();
        assert_eq!(first, second, "serialize-parse-serialize changed bytes");
        // identity reference pose survives the quaternion round trip exactly
        assert_eq!(parsed.cameras[0].pose.rotation, Matrix3::identity());
        assert_eq!(parsed.time_maps[1].beta.to_bits(), 37.0f64.to_bits());
    }

    #[test]
    fn dataset_round_trip() {
        let dataset = Dataset {
            cameras: vec![
                CameraRecord {
                    id: 0,
                    fps: 15.0,
                    frame_count: 900,
                    image_w: 1920,
                    image_h: 1080,
                    prior_intrinsics: None,
                },
                CameraRecord {
                    id: 1,
                    fps: 25.0,
                    frame_count: 1500,
                    image_w: 1920,
                    image_h: 1080,
                    prior_intrinsics: Some(PriorIntrinsics {
                        f: 900.0,
                        cx: 960.0,
                        cy: 540.0,
                        d0: -2e-7,
                    }),
                },
            ],
            matches: vec![MatchRecord {
                cam_i: 0,
                cam_j: 1,
                p1: Pixel::new(1.5, 2.25),
                p2: Pixel::new(3.0, 4.125),
            }],
            tracklets: vec![Tracklet {
                camera_id: 0,
                object_id: 2,
                samples: vec![(0.0, Pixel::new(5.0, 6.0)), (3.0, Pixel::new(7.5, 8.0))],
            }],
            control_points: vec![MatchRecord {
                cam_i: 0,
                cam_j: 1,
                p1: Pixel::new(10.0, 11.0),
                p2: Pixel::new(12.0, 13.0),
            }],
        };
        let dir = tempdir().unwrap();
        write_dataset(dir.path(), &dataset).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.cameras, dataset.cameras);
        assert_eq!(back.matches, dataset.matches);
        assert_eq!(back.tracklets, dataset.tracklets);
        assert_eq!(back.control_points, dataset.control_points);
        // re-write must be byte identical
        let m1 = std::fs::read(dir.path().join("matches.csv")).unwrap();
        write_dataset(dir.path(), &back).unwrap();
        let m2 = std::fs::read(dir.path().join("matches.csv")).unwrap();
        assert_eq!(m1, m2);
    }

    #[test]
    fn malformed_csv_reports_file_line_field() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("matches.csv");
        std::fs::write(&path, "cam_i,cam_j,u1,v1,u2,v2\n0,1,10.0,oops,30.0,40.0\n").unwrap();
        let err = read_pair_csv(&path).unwrap_err();
        match &err {
            Error::Validation { line, field, .. } => {
                assert_eq!(*line, 2);
                assert_eq!(field, "v1");
            }
            other => panic!("expected validation error, got {other}"),
        }
        assert_eq!(err.exit_code(), 2);

        std::fs::write(&path, "wrong,header\n").unwrap();
        let err = read_pair_csv(&path).unwrap_err();
        assert_eq!(err.name(), "validation-error");
    }

    #[test]
    fn truth_round_trip() {
        let scene = sample_scene();
        let dir = tempdir().unwrap();
        let path = dir.path().join("truth.json");
        write_truth(
            &path,
            &GroundTruthFile {
                scene: scene.clone(),
                match_inlier_labels: vec![true, false, true],
            },
        )
        .unwrap();
        let back = read_truth(&path).unwrap();
        assert_eq!(back.match_inlier_labels, vec![true, false, true]);
        assert_eq!(back.scene.cameras.len(), 2);
        assert_eq!(
            back.scene.time_maps[1].beta.to_bits(),
            scene.time_maps[1].beta.to_bits()
        );
    }
}
