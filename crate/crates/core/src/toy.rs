//! Procedural street scenes for desk-scale experiments.
//!
//! Every scan casts one ray per range-image cell (jittered inside the cell)
//! against a random scene of ground, buildings, cars, poles and trees.
//! Simulated scans return every hit with its class label. Real-style scans
//! come from independent scenes of the same distribution, add range noise
//! and drop rays with probability `1 - keep_probability(depth, reflectance)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use std::path::{Path, PathBuf};

use crate::dataio::{self, DatasetSpec, DomainRole};
use crate::error::Result;
use crate::rangeview::{PointCloud, SensorConfig};

pub const SENSOR_HEIGHT: f64 = 1.73;

/// Class ids used by the generator (see [`crate::dataio::ClassTable`]).
pub mod class {
    pub const CAR: u32 = 1;
    pub const ROAD: u32 = 7;
    pub const SIDEWALK: u32 = 8;
    pub const BUILDING: u32 = 11;
    pub const VEGETATION: u32 = 13;
    pub const TRUNK: u32 = 14;
    pub const TERRAIN: u32 = 15;
    pub const POLE: u32 = 16;
}

/// 64 × 256 grid with the default vertical field of view.
pub fn toy_sensor() -> SensorConfig {
    SensorConfig {
        height: 64,
        width: 256,
        ..SensorConfig::default()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    Simulated,
    Real,
}

/// Probability that a real-style return survives.
pub fn keep_probability(depth: f64, reflectance: f64) -> f64 {
    let p = if depth < 20.0 {
        0.95
    } else if depth < 50.0 {
        0.95 - 0.85 * (depth - 20.0) / 30.0
    } else if depth < 55.0 {
        0.1 * (55.0 - depth) / 5.0
    } else {
        0.0
    };
    if reflectance < 0.08 {
        p * 0.3
    } else {
        p
    }
}

pub const REAL_RANGE_NOISE: f64 = 0.02;

#[derive(Clone, Debug)]
enum Shape {
    Box { min: [f64; 3], max: [f64; 3] },
    Cylinder { c: [f64; 2], r: f64, z0: f64, z1: f64 },
}

#[derive(Clone, Debug)]
struct Object {
    shape: Shape,
    class: u32,
    reflectance: f64,
}

#[derive(Clone, Debug)]
pub struct Scene {
    objects: Vec<Object>,
    road_half_width: f64,
    walk_width: f64,
    /// Phase of the road reflectance texture.
    texture: [f64; 2],
}

struct Hit {
    t: f64,
    normal: [f64; 3],
    class: u32,
    reflectance: f64,
}

impl Scene {
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut objects = Vec::new();
        let road = rng.random_range(3.0..5.0);
        let walk = rng.random_range(1.5..3.0);
        for side in [-1.0, 1.0] {
            let mut x = rng.random_range(-70.0..-50.0);
            while x < 70.0 {
                let len = rng.random_range(8.0..25.0);
                if rng.random_bool(0.8) {
                    let near = road + walk + rng.random_range(1.0..6.0);
                    let depth = rng.random_range(6.0..15.0);
                    let (y0, y1) = if side > 0.0 { (near, near + depth) } else { (-near - depth, -near) };
                    objects.push(Object {
                        shape: Shape::Box {
                            min: [x, y0, -SENSOR_HEIGHT],
                            max: [x + len, y1, -SENSOR_HEIGHT + rng.random_range(4.0..16.0)],
                        },
                        class: class::BUILDING,
                        reflectance: rng.random_range(0.15..0.45),
                    });
                } else {
                    // gap filled by a tree
                    let c = [x + len / 2.0, side * (road + walk + rng.random_range(1.0..4.0))];
                    objects.push(Object {
                        shape: Shape::Cylinder { c, r: 0.25, z0: -SENSOR_HEIGHT, z1: -SENSOR_HEIGHT + 2.5 },
                        class: class::TRUNK,
                        reflectance: rng.random_range(0.1..0.25),
                    });
                    objects.push(Object {
                        shape: Shape::Cylinder {
                            c,
                            r: rng.random_range(1.5..3.0),
                            z0: -SENSOR_HEIGHT + 2.5,
                            z1: -SENSOR_HEIGHT + rng.random_range(5.0..8.0),
                        },
                        class: class::VEGETATION,
                        reflectance: rng.random_range(0.05..0.2),
                    });
                }
                x += len + rng.random_range(0.5..6.0);
            }
            let mut px = rng.random_range(-60.0..-40.0);
            while px < 60.0 {
                objects.push(Object {
                    shape: Shape::Cylinder {
                        c: [px, side * (road + 0.4)],
                        r: 0.12,
                        z0: -SENSOR_HEIGHT,
                        z1: -SENSOR_HEIGHT + 6.0,
                    },
                    class: class::POLE,
                    reflectance: rng.random_range(0.4..0.7),
                });
                px += rng.random_range(15.0..35.0);
            }
        }
        let cars = rng.random_range(4..12);
        for _ in 0..cars {
            let mut x: f64 = rng.random_range(-45.0..45.0);
            if x.abs() < 4.0 {
                x += 8.0f64.copysign(x);
            }
            let lane = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let y = lane * rng.random_range(1.2..road - 1.0).max(1.2);
            let (l, w, h) = (rng.random_range(3.8..4.8), rng.random_range(1.7..2.0), rng.random_range(1.4..1.7));
            // dark paint reflects poorly
            let reflectance = if rng.random_bool(0.3) { rng.random_range(0.02..0.07) } else { rng.random_range(0.2..0.7) };
            objects.push(Object {
                shape: Shape::Box {
                    min: [x - l / 2.0, y - w / 2.0, -SENSOR_HEIGHT],
                    max: [x + l / 2.0, y + w / 2.0, -SENSOR_HEIGHT + h],
                },
                class: class::CAR,
                reflectance,
            });
        }
        Scene {
            objects,
            road_half_width: road,
            walk_width: walk,
            texture: [rng.random_range(0.0..6.3), rng.random_range(0.0..6.3)],
        }
    }

    fn ground(&self, p: [f64; 3]) -> (u32, f64) {
        let ay = p[1].abs();
        if ay < self.road_half_width {
            let tex = (0.35 * p[0] + self.texture[0]).sin() * (0.9 * p[1] + self.texture[1]).cos();
            (class::ROAD, 0.1 + 0.04 * tex)
        } else if ay < self.road_half_width + self.walk_width {
            (class::SIDEWALK, 0.28)
        } else {
            (class::TERRAIN, 0.2)
        }
    }

    fn cast(&self, dir: [f64; 3]) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        let mut consider = |h: Hit| {
            if h.t > 1e-6 && best.as_ref().is_none_or(|b| h.t < b.t) {
                best = Some(h);
            }
        };
        if dir[2] < 0.0 {
            let t = -SENSOR_HEIGHT / dir[2];
            let p = [dir[0] * t, dir[1] * t, -SENSOR_HEIGHT];
            let (class, reflectance) = self.ground(p);
            consider(Hit {
                t,
                normal: [0.0, 0.0, 1.0],
                class,
                reflectance,
            });
        }
        for o in &self.objects {
            let hit = match &o.shape {
                Shape::Box { min, max } => ray_box(dir, *min, *max),
                Shape::Cylinder { c, r, z0, z1 } => ray_cylinder(dir, *c, *r, *z0, *z1),
            };
            if let Some((t, normal)) = hit {
                consider(Hit {
                    t,
                    normal,
                    class: o.class,
                    reflectance: o.reflectance,
                });
            }
        }
        best
    }
}

fn ray_box(d: [f64; 3], min: [f64; 3], max: [f64; 3]) -> Option<(f64, [f64; 3])> {
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    let mut axis = 0;
    let mut sign = 1.0;
    for a in 0..3 {
        if d[a].abs() < 1e-15 {
            if 0.0 < min[a] || 0.0 > max[a] {
                return None;
            }
            continue;
        }
        let (mut lo, mut hi) = (min[a] / d[a], max[a] / d[a]);
        let mut s = -1.0;
        if lo > hi {
            std::mem::swap(&mut lo, &mut hi);
            s = 1.0;
        }
        if lo > t0 {
            t0 = lo;
            axis = a;
            sign = s;
        }
        t1 = t1.min(hi);
    }
    if t0 > t1 || t0 <= 0.0 {
        return None;
    }
    let mut n = [0.0; 3];
    n[axis] = sign;
    Some((t0, n))
}

fn ray_cylinder(d: [f64; 3], c: [f64; 2], r: f64, z0: f64, z1: f64) -> Option<(f64, [f64; 3])> {
    let a = d[0] * d[0] + d[1] * d[1];
    if a < 1e-15 {
        return None;
    }
    let b = -2.0 * (d[0] * c[0] + d[1] * c[1]);
    let cc = c[0] * c[0] + c[1] * c[1] - r * r;
    let disc = b * b - 4.0 * a * cc;
    if disc < 0.0 {
        return None;
    }
    let t = (-b - disc.sqrt()) / (2.0 * a);
    if t <= 0.0 {
        return None;
    }
    let z = d[2] * t;
    if z < z0 || z > z1 {
        return None;
    }
    let n = [(d[0] * t - c[0]) / r, (d[1] * t - c[1]) / r, 0.0];
    Some((t, n))
}

/// Per-scan RNG, independent of generation order.
fn scan_rng(seed: u64, domain: Domain, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(match domain {
        Domain::Simulated => 1,
        Domain::Real => 2,
    });
    rng.set_word_pos((index as u128) << 40);
    rng
}

/// One scan of the given domain: the point cloud (one aux channel with
/// class ids for simulated scans, none for real-style) and its labels.
pub fn scan(seed: u64, domain: Domain, index: usize, sensor: &SensorConfig) -> (PointCloud, Vec<u32>) {
    let mut rng = scan_rng(seed, domain, index);
    let scene = Scene::random(&mut rng);
    let noise = Normal::new(0.0, REAL_RANGE_NOISE).expect("finite std");
    let mut cloud = PointCloud::new(usize::from(domain == Domain::Simulated));
    let mut labels = Vec::new();
    for row in 0..sensor.height {
        for col in 0..sensor.width {
            let (ju, jv): (f64, f64) = (rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3));
            let up = sensor.fov_up.to_radians();
            let down = sensor.fov_down.to_radians();
            let phi = sensor.row_center(row) + jv * (up - down) / sensor.height as f64;
            let theta = sensor.column_center(col) + ju * 2.0 * std::f64::consts::PI / sensor.width as f64;
            let dir = [phi.cos() * theta.cos(), phi.cos() * theta.sin(), phi.sin()];
            // draws are consumed for every ray so scans stay aligned across settings
            let eps = noise.sample(&mut rng);
            let u: f64 = rng.random();
            let Some(hit) = scene.cast(dir) else { continue };
            let cos_inc = -(dir[0] * hit.normal[0] + dir[1] * hit.normal[1] + dir[2] * hit.normal[2]);
            let refl = (hit.reflectance * (0.4 + 0.6 * cos_inc.abs())).clamp(0.0, 1.0);
            let mut t = hit.t;
            if domain == Domain::Real {
                t += eps;
                if u >= keep_probability(t, refl) {
                    continue;
                }
            }
            if t < sensor.d_min || t > sensor.d_max {
                continue;
            }
            let p = [dir[0] * t, dir[1] * t, dir[2] * t];
            match domain {
                Domain::Simulated => {
                    cloud.push(p, refl, &[f64::from(hit.class)]);
                    labels.push(hit.class);
                }
                Domain::Real => cloud.push(p, refl, &[]),
            }
        }
    }
    (cloud, labels)
}

/// Moves every point along its ray by `sigma · z`, `z ~ N(0, 1)`. The draws
/// depend only on `(seed, index)` so different `sigma` share them.
pub fn add_depth_noise(cloud: &PointCloud, sigma: f64, seed: u64, index: usize) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    rng.set_word_pos((index as u128) << 40);
    let mut out = cloud.clone();
    for p in &mut out.xyz {
        let z: f64 = rng.sample(rand_distr::StandardNormal);
        let d = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        if d > 0.0 {
            let s = (d + sigma * z).max(0.0) / d;
            *p = [p[0] * s, p[1] * s, p[2] * s];
        }
    }
    out
}

/// Writes `count` scans of each domain under `root/sim` and `root/real` in
/// the sequence layout, one sequence `00`, each with a `dataset.toml`.
/// Returns the two spec paths.
pub fn write_toy_dataset(root: &Path, seed: u64, count: usize) -> Result<(PathBuf, PathBuf)> {
    let sensor = toy_sensor();
    let mut paths = Vec::new();
    for (domain, name, role) in [(Domain::Simulated, "sim", DomainRole::Simulated), (Domain::Real, "real", DomainRole::Real)] {
        let dir = root.join(name);
        let mut spec = DatasetSpec::new(".", role, domain == Domain::Simulated);
        spec.sensor = sensor;
        spec.sequences = vec!["00".into()];
        let mut abs = spec.clone();
        abs.root = dir.clone();
        for i in 0..count {
            let frame = format!("{i:06}");
            let (cloud, labels) = scan(seed, domain, i, &sensor);
            dataio::write_scan(&abs.scan_path("00", &frame), &cloud)?;
            if domain == Domain::Simulated {
                dataio::write_labels(&abs.label_path("00", &frame), &labels)?;
            }
        }
        let path = dir.join("dataset.toml");
        dataio::write_file(&path, spec.to_toml().as_bytes())?;
        paths.push(path);
    }
    Ok((paths[0].clone(), paths[1].clone()))
}
