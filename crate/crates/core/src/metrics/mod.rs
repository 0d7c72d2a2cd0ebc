//! Realness (FID, SWD, JSD, MMD) and faithfulness (CD, RMSE) metrics.

mod bev;
mod features;
mod fid;
mod nn;
mod swd;

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use bev::{bev_histogram, jsd, BevConfig, BevHistogram};
pub use features::{decode_features, encode_features, read_features, write_features, FeatureExtractor, RandomConvFeatures};
pub use fid::{fid, fid_from_stats, mean_cov, sqrtm_psd, trace_sqrt_product, Fid};
pub use nn::{chamfer, chamfer_trees, mmd, sq_dist, subsample, KdTree};
pub use swd::{swd, wasserstein_1d, SwdConfig};

use crate::dataio::{self, read_manifest};
use crate::error::{Error, Result};
use crate::rangeview::{self, ChannelRole, PointCloud, RangeImage, SensorConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MmdConfig {
    pub points_per_cloud: usize,
}

impl Default for MmdConfig {
    fn default() -> Self {
        Self { points_per_cloud: 2048 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricConfig {
    /// Cap on scans drawn from each set.
    pub sample_count: usize,
    pub swd: SwdConfig,
    pub jsd: BevConfig,
    pub mmd: MmdConfig,
    pub seed: u64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            sample_count: 5000,
            swd: SwdConfig::default(),
            jsd: BevConfig::default(),
            mmd: MmdConfig::default(),
            seed: 0,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_count < 2 {
            return Err(Error::Config("sample_count must be >= 2".into()));
        }
        if self.mmd.points_per_cloud == 0 {
            return Err(Error::Config("points_per_cloud must be positive".into()));
        }
        self.swd.validate()?;
        self.jsd.validate()
    }
}

/// Depth RMSE over cells valid in both images.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rmse {
    pub value: f64,
    pub overlap: usize,
    /// Cells valid in exactly one of the two images.
    pub mismatched: usize,
}

pub fn rmse(input: &RangeImage, output: &RangeImage) -> Result<Rmse> {
    if (input.height(), input.width()) != (output.height(), output.width()) {
        return Err(Error::Shape(format!(
            "{}x{} vs {}x{} images",
            input.height(),
            input.width(),
            output.height(),
            output.width()
        )));
    }
    let (a, b) = (input.plane(ChannelRole::Depth)?, output.plane(ChannelRole::Depth)?);
    let (mut sum, mut overlap, mut mismatched) = (0.0, 0, 0);
    for (cell, (x, y)) in a.iter().zip(&b).enumerate() {
        match (input.valid()[cell], output.valid()[cell]) {
            (true, true) => {
                sum += (x - y) * (x - y);
                overlap += 1;
            }
            (false, false) => {}
            _ => mismatched += 1,
        }
    }
    if overlap == 0 {
        return Err(Error::Domain("no overlapping valid cells".into()));
    }
    Ok(Rmse {
        value: (sum / overlap as f64).sqrt(),
        overlap,
        mismatched,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleCounts {
    pub real: usize,
    pub generated: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pairs: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub fid: f64,
    pub swd: f64,
    /// Jensen–Shannon divergence (nats) of BEV occupancy, not its square root.
    pub jsd: f64,
    pub mmd: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cd: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rmse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rmse_mismatched_cells: Option<u64>,
    pub fid_clamped_eigenvalues: usize,
    pub bev_ignored_points: u64,
    pub counts: SampleCounts,
    pub feature_extractor: String,
    pub config_fingerprint: String,
}

impl MetricReport {
    /// SWD + JSD + MMD.
    pub fn realness_composite(&self) -> f64 {
        self.swd + self.jsd + self.mmd
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn table_header() -> &'static str {
        "FID\tSWD\tJSD\tMMD\tCD\tRMSE"
    }

    pub fn table_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.6}"));
        format!(
            "{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}\t{}",
            self.fid,
            self.swd,
            self.jsd,
            self.mmd,
            opt(self.cd),
            opt(self.rmse)
        )
    }
}

fn fingerprint(cfg: &MetricConfig, sensor: &SensorConfig, extractor: &dyn FeatureExtractor) -> String {
    let v = serde_json::json!({
        "metrics": cfg,
        "sensor": sensor,
        "extractor": extractor.name(),
        "extractor_version": extractor.version(),
    });
    dataio::sha256_hex(v.to_string().as_bytes())
}

/// Projects a cloud into a depth/reflectance image in metric units.
pub fn cloud_image(cloud: &PointCloud, sensor: &SensorConfig) -> Result<RangeImage> {
    let (img, _) = rangeview::project(cloud, sensor)?;
    img.select(&[ChannelRole::Depth, ChannelRole::Reflectance])
}

fn sub_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Seeded subsample of every cloud, each cloud with its own stream position.
pub fn subsample_clouds(clouds: &[PointCloud], k: usize, seed: u64, stream: u64) -> Vec<Vec<[f64; 3]>> {
    clouds
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let mut r = sub_rng(seed, stream);
            r.set_word_pos((i as u128) << 32);
            subsample(&c.xyz, k, &mut r)
        })
        .collect()
}

/// Every metric over in-memory sets. `pairs` are (input, translated) clouds.
pub fn evaluate_sets(
    real: &[PointCloud],
    generated: &[PointCloud],
    pairs: Option<&[(PointCloud, PointCloud)]>,
    sensor: &SensorConfig,
    cfg: &MetricConfig,
    extractor: &(dyn FeatureExtractor + Sync),
) -> Result<MetricReport> {
    cfg.validate()?;
    if real.len() < 2 || generated.len() < 2 {
        return Err(Error::Empty("each set needs at least 2 scans".into()));
    }
    let images = |set: &[PointCloud]| set.par_iter().map(|c| cloud_image(c, sensor)).collect::<Result<Vec<_>>>();
    let (ia, ib) = (images(real)?, images(generated)?);
    let feats = |set: &[RangeImage]| set.par_iter().map(|i| extractor.extract(i)).collect::<Result<Vec<_>>>();
    let f = fid(&feats(&ia)?, &feats(&ib)?)?;
    let s = swd(&ib, &ia, &cfg.swd, &mut sub_rng(cfg.seed, 1))?;
    let ha = bev_histogram(real, &cfg.jsd)?;
    let hb = bev_histogram(generated, &cfg.jsd)?;
    let j = jsd(&hb.mass, &ha.mass)?;
    let k = cfg.mmd.points_per_cloud;
    // same stream for both sets: identical clouds get identical subsamples
    let m = mmd(&subsample_clouds(generated, k, cfg.seed, 2), &subsample_clouds(real, k, cfg.seed, 2))?;
    let (mut cd, mut rm, mut mism) = (None, None, None);
    if let Some(p) = pairs {
        if p.is_empty() {
            return Err(Error::Empty("pairing manifest has no entries".into()));
        }
        let per: Vec<(f64, Rmse)> = p
            .par_iter()
            .map(|(a, b)| -> Result<(f64, Rmse)> {
                let c = chamfer(&a.xyz, &b.xyz)?;
                let r = rmse(&cloud_image(a, sensor)?, &cloud_image(b, sensor)?)?;
                Ok((c, r))
            })
            .collect::<Result<_>>()?;
        let n = per.len() as f64;
        cd = Some(per.iter().map(|x| x.0).sum::<f64>() / n);
        rm = Some(per.iter().map(|x| x.1.value).sum::<f64>() / n);
        mism = Some(per.iter().map(|x| x.1.mismatched as u64).sum());
    }
    let report = MetricReport {
        fid: f.value,
        swd: s,
        jsd: j,
        mmd: m,
        cd,
        rmse: rm,
        rmse_mismatched_cells: mism,
        fid_clamped_eigenvalues: f.clamped,
        bev_ignored_points: ha.ignored + hb.ignored,
        counts: SampleCounts {
            real: real.len(),
            generated: generated.len(),
            pairs: pairs.map(<[_]>::len),
        },
        feature_extractor: format!("{}/{}", extractor.name(), extractor.version()),
        config_fingerprint: fingerprint(cfg, sensor, extractor),
    };
    let values = [report.fid, report.swd, report.jsd, report.mmd];
    if values.iter().chain(report.cd.iter()).chain(report.rmse.iter()).any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::Domain(format!("metric value out of range in {values:?}")));
    }
    Ok(report)
}

/// All `.bin` files below `dir`, sorted by path.
pub fn scan_files(dir: &Path) -> Result<Vec<PathBuf>> {
    fn walk(d: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        for e in fs::read_dir(d).map_err(|e| Error::io(d, e))? {
            let p = e.map_err(|e| Error::io(d, e))?.path();
            if p.is_dir() {
                walk(&p, out)?;
            } else if p.extension().is_some_and(|x| x == "bin") {
                out.push(p);
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, &mut out)?;
    out.sort();
    Ok(out)
}

/// At most `cap` files, chosen with a seeded draw and kept in path order.
pub fn cap_files(mut files: Vec<PathBuf>, cap: usize, seed: u64, stream: u64) -> Vec<PathBuf> {
    if files.len() <= cap {
        return files;
    }
    let mut idx = sample(&mut sub_rng(seed, stream), files.len(), cap).into_vec();
    idx.sort_unstable();
    let keep: Vec<PathBuf> = idx.iter().map(|&i| std::mem::take(&mut files[i])).collect();
    keep
}

fn load_clouds(files: &[PathBuf]) -> Result<Vec<PointCloud>> {
    files.iter().map(|f| Ok(dataio::read_scan(f)?.cloud)).collect()
}

/// Evaluates the scans under `gen_dir` against those under `real_dir`.
/// Faithfulness metrics are computed only when a manifest is given.
pub fn evaluate(
    real_dir: &Path,
    gen_dir: &Path,
    manifest: Option<&Path>,
    sensor: &SensorConfig,
    cfg: &MetricConfig,
    extractor: &(dyn FeatureExtractor + Sync),
) -> Result<MetricReport> {
    cfg.validate()?;
    let real = load_clouds(&cap_files(scan_files(real_dir)?, cfg.sample_count, cfg.seed, 10))?;
    let generated = load_clouds(&cap_files(scan_files(gen_dir)?, cfg.sample_count, cfg.seed, 11))?;
    let pairs = match manifest {
        Some(m) => {
            let entries = read_manifest(m)?;
            let mut p = Vec::with_capacity(entries.len());
            for e in &entries {
                let input = dataio::resolve(m, &e.input);
                let output = dataio::resolve(m, &e.output);
                p.push((dataio::read_scan(&input)?.cloud, dataio::read_scan(&output)?.cloud));
            }
            Some(p)
        }
        None => None,
    };
    evaluate_sets(&real, &generated, pairs.as_deref(), sensor, cfg, extractor)
}
