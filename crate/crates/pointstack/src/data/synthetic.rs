//! Analytic shape samplers and synthetic dataset generation.
//!
//! Classes are surface samplers with exact-by-construction part labels. The
//! rippled variants differ from their smooth bases only in fine surface
//! detail, which is what makes the benchmark sensitive to how much granular
//! information survives pooling.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Dataset, TaskKind};
use crate::error::{Error, Result};
use crate::geometry::PointCloud;

/// Surface ripple used by the `Rippled*` variants.
pub const RIPPLE_AMPLITUDE: f64 = 0.12;
pub const RIPPLE_FREQUENCY: f64 = 4.0;

const CYLINDER_RADIUS: f64 = 0.55;
const CYLINDER_HEIGHT: f64 = 1.6;
const TORUS_MAJOR: f64 = 0.7;
const TORUS_MINOR: f64 = 0.28;
const BOX_HALF: [f64; 3] = [0.9, 0.65, 0.45];

/// Available shape samplers. Every kind labels its points with two local
/// parts (0 and 1), so any subset works as a segmentation benchmark.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ShapeKind {
    Sphere,
    RippledSphere,
    Box,
    Cylinder,
    RippledCylinder,
    Torus,
}

impl ShapeKind {
    pub fn name(&self) -> &'static str {
        match self {
            ShapeKind::Sphere => "sphere",
            ShapeKind::RippledSphere => "ripple-sphere",
            ShapeKind::Box => "box",
            ShapeKind::Cylinder => "cylinder",
            ShapeKind::RippledCylinder => "ripple-cylinder",
            ShapeKind::Torus => "torus",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sphere" => Ok(ShapeKind::Sphere),
            "ripple-sphere" => Ok(ShapeKind::RippledSphere),
            "box" => Ok(ShapeKind::Box),
            "cylinder" => Ok(ShapeKind::Cylinder),
            "ripple-cylinder" => Ok(ShapeKind::RippledCylinder),
            "torus" => Ok(ShapeKind::Torus),
            other => Err(Error::InvalidArgument(format!("unknown shape kind `{other}`"))),
        }
    }

    /// Number of local part classes (always 2 here).
    pub fn part_count(&self) -> u32 {
        2
    }
}

/// Recipe for one synthetic dataset.
#[derive(Clone, Debug)]
pub struct SyntheticSpec {
    pub task: TaskKind,
    pub classes: Vec<ShapeKind>,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub points: usize,
    /// Per-coordinate gaussian jitter applied after sampling.
    pub noise: f64,
    /// Random rotation about the up axis per sample.
    pub rotate: bool,
    /// Relative uniform scale jitter per sample (`0.1` means `[0.9, 1.1]`).
    pub scale_jitter: f64,
}

impl SyntheticSpec {
    pub fn classification(classes: Vec<ShapeKind>, per_class: usize, points: usize) -> Self {
        SyntheticSpec {
            task: TaskKind::Classification,
            classes,
            train_per_class: per_class,
            test_per_class: per_class / 2,
            points,
            noise: 0.01,
            rotate: true,
            scale_jitter: 0.1,
        }
    }

    pub fn segmentation(classes: Vec<ShapeKind>, per_class: usize, points: usize) -> Self {
        SyntheticSpec {
            task: TaskKind::PartSegmentation,
            classes,
            train_per_class: per_class,
            test_per_class: per_class / 2,
            points,
            noise: 0.005,
            rotate: true,
            scale_jitter: 0.05,
        }
    }
}

fn gauss<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn sphere_point<R: Rng>(rng: &mut R, ripple: f64, phase: f64) -> ([f64; 3], u32) {
    // Direction from a normalized gaussian; radius optionally rippled in the
    // spherical angles.
    loop {
        let v = [gauss(rng), gauss(rng), gauss(rng)];
        let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if norm < 1e-9 {
            continue;
        }
        let dir = [v[0] / norm, v[1] / norm, v[2] / norm];
        let r = if ripple == 0.0 {
            1.0
        } else {
            // Azimuthal ripple, tapered by sin(polar) so it closes smoothly
            // at the poles and is strongest around the equator.
            let azimuth = dir[1].atan2(dir[0]);
            let polar = dir[2].clamp(-1.0, 1.0).acos();
            1.0 + ripple * (RIPPLE_FREQUENCY * azimuth + phase).sin() * polar.sin()
        };
        let part = u32::from(dir[2] < 0.0); // hemispheres
        return ([dir[0] * r, dir[1] * r, dir[2] * r], part);
    }
}

fn box_point<R: Rng>(rng: &mut R) -> ([f64; 3], u32) {
    let [hx, hy, hz] = BOX_HALF;
    let area_x = hy * hz; // per +/- face pair, relative weights
    let area_y = hx * hz;
    let area_z = hx * hy;
    let total = 2.0 * (area_x + area_y + area_z);
    let mut u = rng.gen_range(0.0..total);
    let sign = |rng: &mut R| if rng.gen_range(0.0..1.0) < 0.5 { -1.0 } else { 1.0 };
    let (p, part);
    if u < 2.0 * area_x {
        p = [
            sign(rng) * hx,
            rng.gen_range(-hy..hy),
            rng.gen_range(-hz..hz),
        ];
        part = 0; // side faces
    } else {
        u -= 2.0 * area_x;
        if u < 2.0 * area_y {
            p = [
                rng.gen_range(-hx..hx),
                sign(rng) * hy,
                rng.gen_range(-hz..hz),
            ];
            part = 0;
        } else {
            p = [
                rng.gen_range(-hx..hx),
                rng.gen_range(-hy..hy),
                sign(rng) * hz,
            ];
            part = 1; // top and bottom
        }
    }
    (p, part)
}

fn cylinder_point<R: Rng>(rng: &mut R, ripple: f64, phase: f64) -> ([f64; 3], u32) {
    let r0 = CYLINDER_RADIUS;
    let h = CYLINDER_HEIGHT;
    let lateral = std::f64::consts::TAU * r0 * h;
    let caps = 2.0 * std::f64::consts::PI * r0 * r0;
    let theta = rng.gen_range(0.0..std::f64::consts::TAU);
    let r_theta = r0 * (1.0 + ripple * (RIPPLE_FREQUENCY * theta + phase).sin());
    if rng.gen_range(0.0..lateral + caps) < lateral {
        // Barrel: part 0.
        let z = rng.gen_range(-h / 2.0..h / 2.0);
        ([r_theta * theta.cos(), r_theta * theta.sin(), z], 0)
    } else {
        // Caps: part 1, z is exactly +/- h/2 by construction.
        let z = if rng.gen_range(0.0..1.0) < 0.5 { h / 2.0 } else { -h / 2.0 };
        let rad = r_theta * rng.gen_range(0.0f64..1.0).sqrt();
        ([rad * theta.cos(), rad * theta.sin(), z], 1)
    }
}

fn torus_point<R: Rng>(rng: &mut R) -> ([f64; 3], u32) {
    let (big, small) = (TORUS_MAJOR, TORUS_MINOR);
    let theta = rng.gen_range(0.0..std::f64::consts::TAU);
    // Rejection sampling keeps the surface density uniform in the tube angle.
    let phi = loop {
        let phi = rng.gen_range(0.0..std::f64::consts::TAU);
        let accept = (big + small * phi.cos()) / (big + small);
        if rng.gen_range(0.0..1.0) < accept {
            break phi;
        }
    };
    let ring = big + small * phi.cos();
    let p = [ring * theta.cos(), ring * theta.sin(), small * phi.sin()];
    let part = u32::from(phi.cos() < 0.0); // outer 0, inner 1
    (p, part)
}

fn sample_shape<R: Rng>(kind: ShapeKind, spec: &SyntheticSpec, rng: &mut R) -> PointCloud {
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let scale = if spec.scale_jitter > 0.0 {
        rng.gen_range(1.0 - spec.scale_jitter..1.0 + spec.scale_jitter)
    } else {
        1.0
    };
    let angle = if spec.rotate {
        rng.gen_range(0.0..std::f64::consts::TAU)
    } else {
        0.0
    };
    let (sin_a, cos_a) = angle.sin_cos();

    let mut points = Vec::with_capacity(spec.points);
    let mut labels = Vec::with_capacity(spec.points);
    for _ in 0..spec.points {
        let (p, part) = match kind {
            ShapeKind::Sphere => sphere_point(rng, 0.0, 0.0),
            ShapeKind::RippledSphere => sphere_point(rng, RIPPLE_AMPLITUDE, phase),
            ShapeKind::Box => box_point(rng),
            ShapeKind::Cylinder => cylinder_point(rng, 0.0, 0.0),
            ShapeKind::RippledCylinder => cylinder_point(rng, RIPPLE_AMPLITUDE, phase),
            ShapeKind::Torus => torus_point(rng),
        };
        // Rotation first (z untouched), then scale, then jitter.
        let rotated = [
            cos_a * p[0] - sin_a * p[1],
            sin_a * p[0] + cos_a * p[1],
            p[2],
        ];
        let jitter = |rng: &mut R| {
            if spec.noise > 0.0 {
                gauss(rng) * spec.noise
            } else {
                0.0
            }
        };
        points.push([
            rotated[0] * scale + jitter(rng),
            rotated[1] * scale + jitter(rng),
            rotated[2] * scale + jitter(rng),
        ]);
        labels.push(part);
    }
    let cloud = PointCloud::new(points).expect("non-empty by construction");
    match spec.task {
        TaskKind::Classification => cloud,
        TaskKind::PartSegmentation => cloud.with_point_labels(labels).expect("matching length"),
    }
}

/// Build a dataset from the spec. Part labels are offset per category so
/// every `(category, local part)` pair maps to a distinct global part class.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Result<Dataset> {
    if spec.classes.is_empty() {
        return Err(Error::InvalidArgument("synthetic spec lists no classes".into()));
    }
    if spec.points == 0 || spec.train_per_class == 0 {
        return Err(Error::InvalidArgument(
            "synthetic spec needs points and per-class sample counts".into(),
        ));
    }

    let mut class_names = Vec::with_capacity(spec.classes.len());
    for (i, kind) in spec.classes.iter().enumerate() {
        let base = kind.name().to_string();
        if spec.classes[..i].iter().any(|k| k.name() == base) {
            class_names.push(format!("{base}-{i}"));
        } else {
            class_names.push(base);
        }
    }

    let mut part_offset = Vec::with_capacity(spec.classes.len());
    let mut next_part = 0u32;
    for kind in &spec.classes {
        part_offset.push(next_part);
        next_part += kind.part_count();
    }

    let mut train = Vec::new();
    let mut test = Vec::new();
    for (class_id, kind) in spec.classes.iter().enumerate() {
        for split in 0..2 {
            let count = if split == 0 {
                spec.train_per_class
            } else {
                spec.test_per_class
            };
            for _ in 0..count {
                let mut cloud = sample_shape(*kind, spec, rng).with_class(class_id as u32);
                if let Some(labels) = cloud.point_labels.as_mut() {
                    for l in labels.iter_mut() {
                        *l += part_offset[class_id];
                    }
                }
                if split == 0 {
                    train.push(cloud);
                } else {
                    test.push(cloud);
                }
            }
        }
    }

    let parts_per_class = match spec.task {
        TaskKind::Classification => None,
        TaskKind::PartSegmentation => Some(
            spec.classes
                .iter()
                .zip(&part_offset)
                .map(|(kind, &off)| (off..off + kind.part_count()).collect())
                .collect(),
        ),
    };

    let dataset = Dataset {
        task: spec.task,
        class_names,
        train,
        test,
        parts_per_class,
    };
    dataset.validate()?;
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn counts_match_the_spec() {
        let spec = SyntheticSpec {
            task: TaskKind::Classification,
            classes: vec![
                ShapeKind::Sphere,
                ShapeKind::Box,
                ShapeKind::Cylinder,
                ShapeKind::Torus,
            ],
            train_per_class: 50,
            test_per_class: 10,
            points: 512,
            noise: 0.01,
            rotate: true,
            scale_jitter: 0.1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ds = generate_synthetic_dataset(&spec, &mut rng).unwrap();
        assert_eq!(ds.train.len(), 200);
        assert_eq!(ds.test.len(), 40);
        assert_eq!(ds.class_count(), 4);
        for c in &ds.train {
            assert_eq!(c.len(), 512);
        }
    }

    #[test]
    fn unit_sphere_points_sit_on_the_surface() {
        let spec = SyntheticSpec {
            task: TaskKind::Classification,
            classes: vec![ShapeKind::Sphere],
            train_per_class: 2,
            test_per_class: 1,
            points: 256,
            noise: 0.0,
            rotate: false,
            scale_jitter: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ds = generate_synthetic_dataset(&spec, &mut rng).unwrap();
        for cloud in ds.train.iter().chain(&ds.test) {
            for p in cloud.points() {
                let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
                assert!((r - 1.0).abs() < 1e-6, "radius {r}");
            }
        }
    }

    #[test]
    fn cylinder_caps_sit_exactly_at_half_height() {
        let spec = SyntheticSpec {
            task: TaskKind::PartSegmentation,
            classes: vec![ShapeKind::Cylinder],
            train_per_class: 2,
            test_per_class: 1,
            points: 256,
            noise: 0.0,
            rotate: true, // z-rotation keeps |z| intact
            scale_jitter: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ds = generate_synthetic_dataset(&spec, &mut rng).unwrap();
        let mut saw_cap = false;
        for cloud in &ds.train {
            let labels = cloud.point_labels.as_ref().unwrap();
            for (p, &l) in cloud.points().iter().zip(labels) {
                if l == 1 {
                    saw_cap = true;
                    assert_eq!(p[2].abs(), CYLINDER_HEIGHT / 2.0, "caps are exact");
                }
            }
        }
        assert!(saw_cap);
    }

    #[test]
    fn segmentation_parts_are_offset_per_category() {
        let spec = SyntheticSpec {
            task: TaskKind::PartSegmentation,
            classes: vec![ShapeKind::Cylinder, ShapeKind::Torus],
            train_per_class: 2,
            test_per_class: 1,
            points: 128,
            noise: 0.0,
            rotate: false,
            scale_jitter: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ds = generate_synthetic_dataset(&spec, &mut rng).unwrap();
        let parts = ds.parts_per_class.as_ref().unwrap();
        assert_eq!(parts[0], vec![0, 1]);
        assert_eq!(parts[1], vec![2, 3]);
        assert_eq!(ds.part_class_count(), 4);
        for cloud in &ds.train {
            let class = cloud.class_label.unwrap() as usize;
            for &l in cloud.point_labels.as_ref().unwrap() {
                assert!(parts[class].contains(&l));
            }
        }
    }

    #[test]
    fn duplicate_shape_kinds_get_distinct_names() {
        let spec = SyntheticSpec {
            task: TaskKind::Classification,
            classes: vec![ShapeKind::Sphere, ShapeKind::Sphere],
            train_per_class: 1,
            test_per_class: 1,
            points: 16,
            noise: 0.0,
            rotate: false,
            scale_jitter: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ds = generate_synthetic_dataset(&spec, &mut rng).unwrap();
        assert_eq!(ds.class_names[0], "sphere");
        assert_eq!(ds.class_names[1], "sphere-1");
    }
}
