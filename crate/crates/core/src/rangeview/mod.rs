//! Conversion between lidar point clouds and multichannel range images.
//!
//! Points are assigned to cells by azimuth (columns, sweeping from +π on
//! the left to −π on the right) and elevation (rows, top row at `fov_up`).
//! Projection stores each retained point's exact angles in dedicated
//! channels so real scans reconstruct without quantization; generated
//! images, which carry no angle channels, reconstruct from cell centres.

mod image;
mod render;
mod rimg;

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use image::{ChannelRole, RangeImage};
pub use render::{render_gray, render_png};
pub use rimg::{decode_rimg, encode_rimg, read_rimg, write_rimg};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorConfig {
    pub height: usize,
    pub width: usize,
    /// Upper edge of the vertical field of view, degrees.
    pub fov_up: f64,
    /// Lower edge of the vertical field of view, degrees (below `fov_up`).
    pub fov_down: f64,
    pub d_max: f64,
    pub d_min: f64,
}

impl Default for SensorConfig {
    /// 64-beam sensor comparable to an HDL-64E.
    fn default() -> Self {
        Self {
            height: 64,
            width: 1024,
            fov_up: 2.0,
            fov_down: -24.8,
            d_max: 80.0,
            d_min: 0.5,
        }
    }
}

impl SensorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::InvalidArgument(format!(
                "sensor grid must be non-empty, got {}x{}",
                self.height, self.width
            )));
        }
        if !(self.fov_down < self.fov_up) || !self.fov_down.is_finite() || !self.fov_up.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "fov_down ({}) must be below fov_up ({})",
                self.fov_down, self.fov_up
            )));
        }
        if !(self.d_min >= 0.0 && self.d_min < self.d_max && self.d_max.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "need 0 <= d_min < d_max, got d_min={} d_max={}",
                self.d_min, self.d_max
            )));
        }
        Ok(())
    }

    fn fov_up_rad(&self) -> f64 {
        self.fov_up.to_radians()
    }

    fn fov_down_rad(&self) -> f64 {
        self.fov_down.to_radians()
    }

    /// Column for an azimuth in (−π, π].
    pub fn column_of(&self, theta: f64) -> usize {
        let w = self.width as f64;
        let col = (w * 0.5 * (1.0 - theta / PI)).floor();
        col.clamp(0.0, w - 1.0) as usize
    }

    /// Row for an elevation inside the field of view.
    pub fn row_of(&self, phi: f64) -> usize {
        let h = self.height as f64;
        let (down, up) = (self.fov_down_rad(), self.fov_up_rad());
        let row = (h * (1.0 - (phi - down) / (up - down))).floor();
        row.clamp(0.0, h - 1.0) as usize
    }

    pub fn column_center(&self, col: usize) -> f64 {
        PI * (1.0 - 2.0 * (col as f64 + 0.5) / self.width as f64)
    }

    pub fn row_center(&self, row: usize) -> f64 {
        let (down, up) = (self.fov_down_rad(), self.fov_up_rad());
        down + (1.0 - (row as f64 + 0.5) / self.height as f64) * (up - down)
    }

    fn in_fov(&self, phi: f64) -> bool {
        phi >= self.fov_down_rad() && phi <= self.fov_up_rad()
    }
}

/// Point records stored column-wise: coordinates, reflectance and `aux_dims`
/// auxiliary values per point (e.g. a semantic class id).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub xyz: Vec<[f64; 3]>,
    pub reflectance: Vec<f64>,
    pub aux_dims: usize,
    pub aux: Vec<f64>,
}

impl PointCloud {
    pub fn new(aux_dims: usize) -> Self {
        Self {
            aux_dims,
            ..Default::default()
        }
    }

    pub fn from_xyzr(xyz: Vec<[f64; 3]>, reflectance: Vec<f64>) -> Self {
        Self {
            xyz,
            reflectance,
            aux_dims: 0,
            aux: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.xyz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xyz.is_empty()
    }

    pub fn push(&mut self, xyz: [f64; 3], reflectance: f64, aux: &[f64]) {
        assert_eq!(aux.len(), self.aux_dims, "aux arity");
        self.xyz.push(xyz);
        self.reflectance.push(reflectance);
        self.aux.extend_from_slice(aux);
    }

    pub fn aux_of(&self, i: usize) -> &[f64] {
        &self.aux[i * self.aux_dims..(i + 1) * self.aux_dims]
    }

    pub fn validate(&self) -> Result<()> {
        if self.reflectance.len() != self.xyz.len() || self.aux.len() != self.xyz.len() * self.aux_dims {
            return Err(Error::DimensionMismatch {
                what: "point cloud",
                detail: format!(
                    "{} points, {} reflectances, {} aux values for {} aux dims",
                    self.xyz.len(),
                    self.reflectance.len(),
                    self.aux.len(),
                    self.aux_dims
                ),
            });
        }
        if let Some(i) = self.xyz.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::InvalidArgument(format!("point {i} has non-finite coordinates")));
        }
        if let Some(i) = self.reflectance.iter().position(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::InvalidArgument(format!(
                "point {i} reflectance {} outside [0, 1]",
                self.reflectance[i]
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectionReport {
    pub retained: usize,
    /// Points displaced by a nearer point in the same cell.
    pub collisions: usize,
    /// Points outside the vertical field of view or the range limits.
    pub out_of_fov: usize,
}

/// `(azimuth, elevation)` of a point, both in radians.
pub fn spherical_angles(x: f64, y: f64, z: f64) -> Result<(f64, f64)> {
    if x == 0.0 && y == 0.0 && z == 0.0 {
        return Err(Error::Domain("angles of the zero vector are undefined".into()));
    }
    Ok((y.atan2(x), z.atan2(x.hypot(y))))
}

/// Roles produced by [`project`] for a cloud with `aux_dims` auxiliary channels.
pub fn projected_roles(aux_dims: usize) -> Vec<ChannelRole> {
    let mut roles = vec![ChannelRole::Depth, ChannelRole::Reflectance];
    if aux_dims == 1 {
        roles.push(ChannelRole::Semantic);
    }
    roles.extend([ChannelRole::Azimuth, ChannelRole::Elevation]);
    roles
}

pub fn project(cloud: &PointCloud, config: &SensorConfig) -> Result<(RangeImage, ProjectionReport)> {
    config.validate()?;
    cloud.validate()?;
    if cloud.aux_dims > 1 {
        return Err(Error::InvalidArgument(format!(
            "range images carry at most one auxiliary (semantic) channel, cloud has {}",
            cloud.aux_dims
        )));
    }
    let mut image = RangeImage::new(config.height, config.width, projected_roles(cloud.aux_dims))?;
    let mut owner: Vec<Option<usize>> = vec![None; config.height * config.width];
    let mut depth_of = vec![f64::INFINITY; config.height * config.width];
    let mut report = ProjectionReport::default();

    for (i, &[x, y, z]) in cloud.xyz.iter().enumerate() {
        let d = (x * x + y * y + z * z).sqrt();
        if d < config.d_min || d > config.d_max || d == 0.0 {
            report.out_of_fov += 1;
            continue;
        }
        let (theta, phi) = spherical_angles(x, y, z)?;
        if !config.in_fov(phi) {
            report.out_of_fov += 1;
            continue;
        }
        let cell = config.row_of(phi) * config.width + config.column_of(theta);
        if owner[cell].is_some() {
            report.collisions += 1;
            // strict comparison keeps the earliest index on equal depths
            if d >= depth_of[cell] {
                continue;
            }
        }
        owner[cell] = Some(i);
        depth_of[cell] = d;
    }

    let sem = image.channel_index(ChannelRole::Semantic);
    let az = image.channel_index(ChannelRole::Azimuth).expect("projected image has azimuth");
    let el = image.channel_index(ChannelRole::Elevation).expect("projected image has elevation");
    for (cell, who) in owner.iter().enumerate() {
        let Some(i) = *who else { continue };
        let [x, y, z] = cloud.xyz[i];
        let (theta, phi) = spherical_angles(x, y, z)?;
        let px = image.pixel_mut(cell);
        px[0] = depth_of[cell];
        px[1] = cloud.reflectance[i];
        if let Some(s) = sem {
            px[s] = cloud.aux_of(i)[0];
        }
        px[az] = theta;
        px[el] = phi;
        image.valid_mut()[cell] = true;
        report.retained += 1;
    }
    Ok((image, report))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AngleSource {
    /// Exact per-point angles from the azimuth/elevation channels.
    Stored,
    /// Cell-centre angles, for images synthesized by a model.
    PixelCenter,
}

pub fn reconstruct(image: &RangeImage, config: &SensorConfig, angle_source: AngleSource) -> Result<PointCloud> {
    config.validate()?;
    if (image.height(), image.width()) != (config.height, config.width) {
        return Err(Error::Shape(format!(
            "image is {}x{}, sensor expects {}x{}",
            image.height(),
            image.width(),
            config.height,
            config.width
        )));
    }
    let depth = image
        .channel_index(ChannelRole::Depth)
        .ok_or_else(|| Error::MissingChannel("depth".into()))?;
    let refl = image.channel_index(ChannelRole::Reflectance);
    let sem = image.channel_index(ChannelRole::Semantic);
    let angles = match angle_source {
        AngleSource::Stored => {
            let az = image
                .channel_index(ChannelRole::Azimuth)
                .ok_or_else(|| Error::MissingChannel("azimuth (required for stored angles)".into()))?;
            let el = image
                .channel_index(ChannelRole::Elevation)
                .ok_or_else(|| Error::MissingChannel("elevation (required for stored angles)".into()))?;
            Some((az, el))
        }
        AngleSource::PixelCenter => None,
    };
    let mut cloud = PointCloud::new(usize::from(sem.is_some()));
    for row in 0..image.height() {
        for col in 0..image.width() {
            let cell = row * image.width() + col;
            if !image.valid()[cell] {
                continue;
            }
            let px = image.pixel(cell);
            let d = px[depth];
            let (theta, phi) = match angles {
                Some((az, el)) => (px[az], px[el]),
                None => (config.column_center(col), config.row_center(row)),
            };
            let (st, ct) = theta.sin_cos();
            let (sp, cp) = phi.sin_cos();
            let r = refl.map_or(0.0, |k| px[k]);
            let aux: Vec<f64> = sem.map(|k| px[k]).into_iter().collect();
            cloud.push([d * cp * ct, d * cp * st, d * sp], r, &aux);
        }
    }
    Ok(cloud)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    #[default]
    Linear,
    Log,
}

fn norm_depth(d: f64, d_max: f64, mode: NormMode) -> f64 {
    match mode {
        NormMode::Linear => 2.0 * (d / d_max) - 1.0,
        NormMode::Log => 2.0 * ((1.0 + d).ln() / (1.0 + d_max).ln()) - 1.0,
    }
}

fn denorm_depth(v: f64, d_max: f64, mode: NormMode) -> f64 {
    let t = (v + 1.0) * 0.5;
    match mode {
        NormMode::Linear => t * d_max,
        NormMode::Log => (t * (1.0 + d_max).ln()).exp() - 1.0,
    }
}

/// Maps depth and reflectance to `[-1, 1]`; invalid cells become `-1`.
///
/// Depths above `d_max` are clamped and counted in the returned total.
pub fn normalize(image: &RangeImage, config: &SensorConfig, mode: NormMode) -> Result<(RangeImage, usize)> {
    let depth = image
        .channel_index(ChannelRole::Depth)
        .ok_or_else(|| Error::MissingChannel("depth".into()))?;
    let refl = image.channel_index(ChannelRole::Reflectance);
    let mut out = image.clone();
    let mut clamped = 0;
    for cell in 0..image.height() * image.width() {
        let valid = image.valid()[cell];
        let px = out.pixel_mut(cell);
        if valid {
            let mut d = px[depth];
            if d > config.d_max {
                d = config.d_max;
                clamped += 1;
            }
            px[depth] = norm_depth(d.max(0.0), config.d_max, mode);
            if let Some(r) = refl {
                px[r] = 2.0 * px[r] - 1.0;
            }
        } else {
            px[depth] = -1.0;
            if let Some(r) = refl {
                px[r] = -1.0;
            }
        }
    }
    if clamped > 0 {
        log::warn!("normalize: clamped {clamped} depths above d_max = {}", config.d_max);
    }
    Ok((out, clamped))
}

/// Inverse of [`normalize`] on valid cells; invalid cells get zero depth and reflectance.
pub fn denormalize(image: &RangeImage, config: &SensorConfig, mode: NormMode) -> Result<RangeImage> {
    let depth = image
        .channel_index(ChannelRole::Depth)
        .ok_or_else(|| Error::MissingChannel("depth".into()))?;
    let refl = image.channel_index(ChannelRole::Reflectance);
    let mut out = image.clone();
    for cell in 0..image.height() * image.width() {
        let valid = image.valid()[cell];
        let px = out.pixel_mut(cell);
        if valid {
            px[depth] = denorm_depth(px[depth], config.d_max, mode).max(0.0);
            if let Some(r) = refl {
                px[r] = ((px[r] + 1.0) * 0.5).clamp(0.0, 1.0);
            }
        } else {
            px[depth] = 0.0;
            if let Some(r) = refl {
                px[r] = 0.0;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use std::f64::consts::FRAC_PI_2;
    use std::f64::consts::FRAC_PI_4;

    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn in_fov_cloud(n: usize, cfg: &SensorConfig, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cloud = PointCloud::new(1);
        for _ in 0..n {
            let theta = rng.random_range(-PI..PI);
            let phi = rng.random_range(cfg.fov_down.to_radians()..cfg.fov_up.to_radians());
            let d = rng.random_range(cfg.d_min + 0.1..cfg.d_max - 0.1);
            cloud.push(
                [d * phi.cos() * theta.cos(), d * phi.cos() * theta.sin(), d * phi.sin()],
                rng.random_range(0.0..1.0),
                &[rng.random_range(0..17) as f64],
            );
        }
        cloud
    }

    #[test]
    fn angles_of_axis_points() {
        assert_eq!(spherical_angles(10.0, 0.0, 0.0).unwrap(), (0.0, 0.0));
        let (t, p) = spherical_angles(0.0, 5.0, 0.0).unwrap();
        assert!((t - FRAC_PI_2).abs() < 1e-15 && p == 0.0);
        let (t, p) = spherical_angles(1.0, 1.0, 2f64.sqrt()).unwrap();
        assert!((t - FRAC_PI_4).abs() < 1e-15 && (p - FRAC_PI_4).abs() < 1e-15);
        assert!(matches!(spherical_angles(0.0, 0.0, 0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn single_point_lands_in_centre_column() {
        let cfg = SensorConfig::default();
        let mid = ((cfg.fov_up + cfg.fov_down) / 2.0).to_radians();
        let cloud = PointCloud::from_xyzr(vec![[10.0 * mid.cos(), 0.0, 10.0 * mid.sin()]], vec![0.4]);
        let (img, rep) = project(&cloud, &cfg).unwrap();
        assert_eq!(rep, ProjectionReport { retained: 1, collisions: 0, out_of_fov: 0 });
        let valid: Vec<usize> = (0..img.valid().len()).filter(|&i| img.valid()[i]).collect();
        assert_eq!(valid.len(), 1);
        // 1 - (mid - down)/(up - down) = 0.5 lands on the boundary between rows 31 and 32
        assert_eq!(valid[0] % cfg.width, 512);
        assert_eq!(valid[0] / cfg.width, cfg.row_of(mid));
        assert!((img.get(ChannelRole::Depth, valid[0]).unwrap() - 10.0).abs() < 1e-12);
    }

    #[test]
    fn nearer_point_wins_collision() {
        let cfg = SensorConfig::default();
        let cloud = PointCloud::from_xyzr(vec![[9.0, 0.0, -0.5], [5.0, 0.0, -5.0 / 18.0]], vec![0.1, 0.9]);
        let (img, rep) = project(&cloud, &cfg).unwrap();
        assert_eq!((rep.retained, rep.collisions), (1, 1));
        let cell = img.valid().iter().position(|&v| v).unwrap();
        let d = img.get(ChannelRole::Depth, cell).unwrap();
        assert!((d - (25.0f64 + 25.0 / 324.0).sqrt()).abs() < 1e-12);
        assert_eq!(img.get(ChannelRole::Reflectance, cell), Some(0.9));
    }

    #[test]
    fn equal_depth_keeps_earliest_point() {
        let cfg = SensorConfig::default();
        let cloud = PointCloud::from_xyzr(vec![[5.0, 0.0, -0.2], [5.0, 0.0, -0.2]], vec![0.25, 0.75]);
        let (img, rep) = project(&cloud, &cfg).unwrap();
        assert_eq!(rep.collisions, 1);
        let cell = img.valid().iter().position(|&v| v).unwrap();
        assert_eq!(img.get(ChannelRole::Reflectance, cell), Some(0.25));
    }

    #[test]
    fn empty_cloud_gives_empty_image() {
        let cfg = SensorConfig::default();
        let (img, rep) = project(&PointCloud::new(0), &cfg).unwrap();
        assert_eq!(rep, ProjectionReport::default());
        assert!(img.valid().iter().all(|v| !v));
        assert!(reconstruct(&img, &cfg, AngleSource::Stored).unwrap().is_empty());
    }

    #[test]
    fn out_of_range_points_are_counted() {
        let cfg = SensorConfig::default();
        let cloud = PointCloud::from_xyzr(
            vec![[0.1, 0.0, 0.0], [100.0, 0.0, 0.0], [0.0, 0.0, 10.0], [10.0, 0.0, -1.0]],
            vec![0.0; 4],
        );
        let (_, rep) = project(&cloud, &cfg).unwrap();
        assert_eq!(rep, ProjectionReport { retained: 1, collisions: 0, out_of_fov: 3 });
    }

    #[test]
    fn reconstruct_single_cell() {
        let cfg = SensorConfig { height: 1, width: 4, ..SensorConfig::default() };
        let mut img = RangeImage::new(1, 4, projected_roles(0)).unwrap();
        img.set_valid(1, true);
        img.set(ChannelRole::Depth, 1, 2.0);
        img.set(ChannelRole::Azimuth, 1, FRAC_PI_2);
        img.set(ChannelRole::Elevation, 1, 0.0);
        let pc = reconstruct(&img, &cfg, AngleSource::Stored).unwrap();
        assert_eq!(pc.len(), 1);
        let [x, y, z] = pc.xyz[0];
        assert!(x.abs() < 1e-15 && (y - 2.0).abs() < 1e-15 && z == 0.0);
    }

    #[test]
    fn stored_angles_need_angle_channels() {
        let cfg = SensorConfig { height: 2, width: 2, ..SensorConfig::default() };
        let img = RangeImage::new(2, 2, vec![ChannelRole::Depth, ChannelRole::Reflectance]).unwrap();
        assert!(matches!(
            reconstruct(&img, &cfg, AngleSource::Stored),
            Err(Error::MissingChannel(_))
        ));
        assert!(reconstruct(&img, &cfg, AngleSource::PixelCenter).is_ok());
    }

    #[test]
    fn stored_round_trip_is_lossless() {
        let cfg = SensorConfig::default();
        let cloud = in_fov_cloud(10_000, &cfg, 7);
        let (img, rep) = project(&cloud, &cfg).unwrap();
        assert_eq!(rep.retained + rep.collisions + rep.out_of_fov, cloud.len());
        let back = reconstruct(&img, &cfg, AngleSource::Stored).unwrap();
        assert_eq!(back.len(), rep.retained);
        // match reconstructed points to sources through their reflectance+label fingerprint
        for (i, p) in back.xyz.iter().enumerate() {
            let (t, ph) = spherical_angles(p[0], p[1], p[2]).unwrap();
            let cell = cfg.row_of(ph) * cfg.width + cfg.column_of(t);
            assert!(img.valid()[cell]);
            assert!((t - img.get(ChannelRole::Azimuth, cell).unwrap()).abs() < 1e-9);
            assert!((ph - img.get(ChannelRole::Elevation, cell).unwrap()).abs() < 1e-9);
            assert_eq!(back.reflectance[i], img.get(ChannelRole::Reflectance, cell).unwrap());
        }
    }

    #[test]
    fn pixel_centres_reproject_to_their_cell() {
        let cfg = SensorConfig::default();
        for row in [0, 17, 63] {
            for col in [0, 1, 511, 512, 1023] {
                assert_eq!(cfg.row_of(cfg.row_center(row)), row);
                assert_eq!(cfg.column_of(cfg.column_center(col)), col);
            }
        }
    }

    #[test]
    fn normalize_endpoints_and_round_trip() {
        let cfg = SensorConfig { height: 2, width: 3, ..SensorConfig::default() };
        let mut img = RangeImage::new(2, 3, vec![ChannelRole::Depth, ChannelRole::Reflectance]).unwrap();
        let depths = [cfg.d_max, 0.0, 12.5, 79.0, 3.25];
        for (cell, &d) in depths.iter().enumerate() {
            img.set_valid(cell, true);
            img.set(ChannelRole::Depth, cell, d);
            img.set(ChannelRole::Reflectance, cell, 0.1 * cell as f64);
        }
        for mode in [NormMode::Linear, NormMode::Log] {
            let (n, clamped) = normalize(&img, &cfg, mode).unwrap();
            assert_eq!(clamped, 0);
            assert!((n.get(ChannelRole::Depth, 0).unwrap() - 1.0).abs() < 1e-15);
            assert_eq!(n.get(ChannelRole::Depth, 1), Some(-1.0));
            assert_eq!(n.get(ChannelRole::Depth, 5), Some(-1.0));
            assert_eq!(n.get(ChannelRole::Reflectance, 5), Some(-1.0));
            let back = denormalize(&n, &cfg, mode).unwrap();
            for cell in 0..5 {
                let (a, b) = (back.get(ChannelRole::Depth, cell).unwrap(), depths[cell]);
                assert!((a - b).abs() <= 1e-6 * b.max(1.0), "{mode:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn normalize_clamps_far_depths() {
        let cfg = SensorConfig { height: 1, width: 1, ..SensorConfig::default() };
        let mut img = RangeImage::new(1, 1, vec![ChannelRole::Depth]).unwrap();
        img.set_valid(0, true);
        img.set(ChannelRole::Depth, 0, 120.0);
        let (n, clamped) = normalize(&img, &cfg, NormMode::Linear).unwrap();
        assert_eq!(clamped, 1);
        assert_eq!(n.get(ChannelRole::Depth, 0), Some(1.0));
    }

    proptest! {
        #[test]
        fn report_counts_partition_input(seed in 0u64..1000, n in 0usize..400) {
            let cfg = SensorConfig { height: 16, width: 64, ..SensorConfig::default() };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let xyz: Vec<[f64; 3]> = (0..n)
                .map(|_| [rng.random_range(-90.0..90.0), rng.random_range(-90.0..90.0), rng.random_range(-20.0..5.0)])
                .collect();
            let cloud = PointCloud::from_xyzr(xyz, vec![0.5; n]);
            let (img, rep) = project(&cloud, &cfg).unwrap();
            prop_assert_eq!(rep.retained + rep.collisions + rep.out_of_fov, n);
            prop_assert_eq!(img.valid().iter().filter(|v| **v).count(), rep.retained);
        }

        #[test]
        fn projection_ignores_point_order(seed in 0u64..1000) {
            let cfg = SensorConfig { height: 16, width: 64, ..SensorConfig::default() };
            let cloud = in_fov_cloud(300, &cfg, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            let mut order: Vec<usize> = (0..cloud.len()).collect();
            for i in (1..order.len()).rev() {
                order.swap(i, rng.random_range(0..=i));
            }
            let mut shuffled = PointCloud::new(1);
            for &i in &order {
                shuffled.push(cloud.xyz[i], cloud.reflectance[i], cloud.aux_of(i));
            }
            let (a, ra) = project(&cloud, &cfg).unwrap();
            let (b, rb) = project(&shuffled, &cfg).unwrap();
            prop_assert_eq!(ra, rb);
            prop_assert_eq!(a, b);
        }
    }
}
