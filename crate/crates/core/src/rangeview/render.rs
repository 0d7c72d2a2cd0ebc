use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use super::image::{ChannelRole, RangeImage};
use crate::error::{Error, Result};

/// Maps one channel to 8-bit gray levels; invalid cells are 0, valid cells 1..=255.
pub fn render_gray(image: &RangeImage, channel: ChannelRole) -> Result<Vec<u8>> {
    let plane = image.plane(channel)?;
    let valid = image.valid();
    let vals: Vec<f64> = plane
        .iter()
        .zip(valid)
        .filter(|(_, v)| **v)
        .map(|(x, _)| *x)
        .collect();
    let shade = |t: f64| (1.0 + 254.0 * t.clamp(0.0, 1.0)).round() as u8;
    let level: Box<dyn Fn(f64) -> u8> = match channel {
        ChannelRole::Depth => {
            // inverse depth: near is bright
            let lo = vals.iter().copied().filter(|d| *d > 0.0).fold(f64::INFINITY, f64::min);
            let hi = vals.iter().copied().fold(0.0, f64::max);
            Box::new(move |d: f64| {
                if d <= 0.0 || !lo.is_finite() {
                    return 255;
                }
                if hi <= lo {
                    return 255;
                }
                shade((1.0 / d - 1.0 / hi) / (1.0 / lo - 1.0 / hi))
            })
        }
        ChannelRole::Reflectance => Box::new(move |r: f64| shade(r)),
        ChannelRole::RaydropLogit => Box::new(move |l: f64| shade(1.0 / (1.0 + (-l).exp()))),
        ChannelRole::Semantic | ChannelRole::Azimuth | ChannelRole::Elevation => {
            let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            Box::new(move |v: f64| if hi > lo { shade((v - lo) / (hi - lo)) } else { 255 })
        }
    };
    Ok(plane
        .iter()
        .zip(valid)
        .map(|(&x, &v)| if v { level(x) } else { 0 })
        .collect())
}

/// Writes one channel as an 8-bit grayscale PNG.
pub fn render_png(image: &RangeImage, channel: ChannelRole, path: &Path) -> Result<()> {
    let pixels = render_gray(image, channel)?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), image.width() as u32, image.height() as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header()?;
    writer.write_image_data(&pixels)?;
    writer.finish()?;
    Ok(())
}
