//! ASCII PLY export of a reconstructed scene: static points in gray,
//! trajectory polylines sampled at 10 Hz colored per object, and camera
//! frusta as line sets.

use std::io::Write;
use std::path::Path;

use crate::camera::{Camera, Point3};
use crate::error::Result;
use crate::scene::Scene;

const POINT_GRAY: [u8; 3] = [160, 160, 160];
const FRUSTUM_COLOR: [u8; 3] = [230, 220, 60];
const OBJECT_PALETTE: [[u8; 3]; 8] = [
    [228, 26, 28],
    [55, 126, 184],
    [77, 175, 74],
    [152, 78, 163],
    [255, 127, 0],
    [166, 86, 40],
    [247, 129, 191],
    [0, 206, 209],
];

const TRAJECTORY_SAMPLE_HZ: f64 = 10.0;

struct PlyBuffers {
    vertices: Vec<(Point3, [u8; 3])>,
    edges: Vec<(usize, usize)>,
}

impl PlyBuffers {
    fn push_vertex(&mut self, p: Point3, color: [u8; 3]) -> usize {
        self.vertices.push((p, color));
        self.vertices.len() - 1
    }
}

fn frustum_vertices(cam: &Camera, depth: f64) -> [Point3; 5] {
    let intr = &cam.intrinsics;
    let k_inv = intr.k_matrix().try_inverse().unwrap();
    let center = cam.pose.center();
    let corner = |u: f64, v: f64| -> Point3 {
        let ray = cam.pose.rotation.transpose() * (k_inv * nalgebra::Vector3::new(u, v, 1.0));
        center + ray * depth
    };
    [
        center,
        corner(0.0, 0.0),
        corner(intr.image_w as f64, 0.0),
        corner(intr.image_w as f64, intr.image_h as f64),
        corner(0.0, intr.image_h as f64),
    ]
}

/// Writes the scene as an ASCII PLY with vertex colors and an edge element.
/// An empty scene produces a valid header-only file.
pub fn export_ply(scene: &Scene, path: &Path) -> Result<()> {
    let mut buf = PlyBuffers {
        vertices: Vec::new(),
        edges: Vec::new(),
    };

    for p in &scene.static_points {
        buf.push_vertex(p.position, POINT_GRAY);
    }

    let fps_ref = scene
        .cameras
        .get(scene.gauge.reference_camera)
        .map(|c| c.stream.fps)
        .unwrap_or(1.0);
    for (m, obj) in scene.dynamic_objects.iter().enumerate() {
        let color = OBJECT_PALETTE[m % OBJECT_PALETTE.len()];
        let (lo, hi) = obj.spline.domain();
        let step = fps_ref / TRAJECTORY_SAMPLE_HZ;
        let n = ((hi - lo) / step).floor().max(1.0) as usize;
        let mut prev: Option<usize> = None;
        for k in 0..=n {
            let tau = lo + (hi - lo) * k as f64 / n as f64;
            let idx = buf.push_vertex(obj.spline.eval_unchecked(tau), color);
            if let Some(p) = prev {
                buf.edges.push((p, idx));
            }
            prev = Some(idx);
        }
    }

    // frustum depth scaled to the scene: median static point depth or 1
    let depth = {
        let mut depths: Vec<f64> = scene
            .static_points
            .iter()
            .map(|p| p.position.norm())
            .collect();
        depths.sort_by(f64::total_cmp);
        let median = depths.get(depths.len() / 2).copied().unwrap_or(2.0);
        0.15 * median.max(1e-6)
    };
    for cam in &scene.cameras {
        let verts = frustum_vertices(cam, depth);
        let ids: Vec<usize> = verts
            .iter()
            .map(|v| buf.push_vertex(*v, FRUSTUM_COLOR))
            .collect();
        for corner in 1..=4 {
            buf.edges.push((ids[0], ids[corner]));
            buf.edges.push((ids[corner], ids[if corner == 4 { 1 } else { corner + 1 }]));
        }
    }

    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "ply")?;
    writeln!(out, "format ascii 1.0")?;
    writeln!(out, "element vertex {}", buf.vertices.len())?;
    writeln!(out, "property float x")?;
    writeln!(out, "property float y")?;
    writeln!(out, "property float z")?;
    writeln!(out, "property uchar red")?;
    writeln!(out, "property uchar green")?;
    writeln!(out, "property uchar blue")?;
    writeln!(out, "element edge {}", buf.edges.len())?;
    writeln!(out, "property int vertex1")?;
    writeln!(out, "property int vertex2")?;
    writeln!(out, "end_header")?;
    for (p, c) in &buf.vertices {
        writeln!(
            out,
            "{} {} {} {} {} {}",
            p.x as f32, p.y as f32, p.z as f32, c[0], c[1], c[2]
        )?;
    }
    for (a, b) in &buf.edges {
        writeln!(out, "{a} {b}")?;
    }
    Ok(())
}

/// Expected vertex count: static points + per-object polyline samples +
/// five frustum vertices per camera.
pub fn expected_vertex_count(scene: &Scene) -> usize {
    let fps_ref = scene
        .cameras
        .get(scene.gauge.reference_camera)
        .map(|c| c.stream.fps)
        .unwrap_or(1.0);
    let mut count = scene.static_points.len() + 5 * scene.cameras.len();
    for obj in &scene.dynamic_objects {
        let (lo, hi) = obj.spline.domain();
        let step = fps_ref / TRAJECTORY_SAMPLE_HZ;
        count += ((hi - lo) / step).floor().max(1.0) as usize + 1;
    }
    count
}
