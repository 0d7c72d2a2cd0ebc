use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Meaning of one channel of a [`RangeImage`]. The declaration order is the
/// canonical channel order and the bit order of the `.rimg` role bitmap.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelRole {
    Depth,
    Reflectance,
    RaydropLogit,
    Semantic,
    Azimuth,
    Elevation,
}

impl ChannelRole {
    pub const ALL: [ChannelRole; 6] = [
        ChannelRole::Depth,
        ChannelRole::Reflectance,
        ChannelRole::RaydropLogit,
        ChannelRole::Semantic,
        ChannelRole::Azimuth,
        ChannelRole::Elevation,
    ];

    pub fn bit(self) -> u16 {
        1 << (self as u16)
    }

    pub fn name(self) -> &'static str {
        match self {
            ChannelRole::Depth => "depth",
            ChannelRole::Reflectance => "reflectance",
            ChannelRole::RaydropLogit => "raydrop_logit",
            ChannelRole::Semantic => "semantic",
            ChannelRole::Azimuth => "azimuth",
            ChannelRole::Elevation => "elevation",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|r| r.name() == name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown channel role '{name}'")))
    }

    pub fn bitmap(roles: &[ChannelRole]) -> u16 {
        roles.iter().fold(0, |acc, r| acc | r.bit())
    }

    pub fn from_bitmap(bits: u16) -> Result<Vec<ChannelRole>> {
        if bits >> Self::ALL.len() != 0 {
            return Err(Error::Malformed {
                what: "channel role bitmap",
                detail: format!("unknown role bits in {bits:#06x}"),
            });
        }
        Ok(Self::ALL.into_iter().filter(|r| bits & r.bit() != 0).collect())
    }
}

/// `H × W × C` grid stored row-major with interleaved channels, plus a
/// per-cell validity mask. Roles are kept in canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct RangeImage {
    height: usize,
    width: usize,
    roles: Vec<ChannelRole>,
    data: Vec<f64>,
    valid: Vec<bool>,
}

impl RangeImage {
    /// All-invalid image with zeroed channels.
    pub fn new(height: usize, width: usize, mut roles: Vec<ChannelRole>) -> Result<Self> {
        roles.sort();
        if roles.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidArgument(format!("duplicate channel role in {roles:?}")));
        }
        if roles.is_empty() {
            return Err(Error::InvalidArgument("range image needs at least one channel".into()));
        }
        Ok(Self {
            height,
            width,
            data: vec![0.0; height * width * roles.len()],
            valid: vec![false; height * width],
            roles,
        })
    }

    /// Builds an image from raw parts; `data` is `H·W·C` interleaved in the given role order.
    pub fn from_parts(height: usize, width: usize, roles: Vec<ChannelRole>, data: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        let mut sorted = roles.clone();
        sorted.sort();
        if sorted != roles {
            return Err(Error::InvalidArgument(format!("roles {roles:?} not in canonical order")));
        }
        let mut img = Self::new(height, width, roles)?;
        if data.len() != img.data.len() || valid.len() != img.valid.len() {
            return Err(Error::DimensionMismatch {
                what: "range image",
                detail: format!(
                    "{}x{}x{} needs {} values and {} flags, got {} and {}",
                    height,
                    width,
                    img.channels(),
                    img.data.len(),
                    img.valid.len(),
                    data.len(),
                    valid.len()
                ),
            });
        }
        img.data = data;
        img.valid = valid;
        Ok(img)
    }

    /// Image from channel planes (`planes[k]` has `H·W` values for `roles[k]`).
    pub fn from_planes(height: usize, width: usize, roles: &[ChannelRole], planes: &[Vec<f64>], valid: Vec<bool>) -> Result<Self> {
        let mut img = Self::new(height, width, roles.to_vec())?;
        if planes.len() != roles.len() || valid.len() != height * width {
            return Err(Error::DimensionMismatch {
                what: "range image planes",
                detail: format!("{} roles, {} planes", roles.len(), planes.len()),
            });
        }
        for (role, plane) in roles.iter().zip(planes) {
            img.set_plane(*role, plane)?;
        }
        img.valid = valid;
        Ok(img)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.roles.len()
    }

    pub fn roles(&self) -> &[ChannelRole] {
        &self.roles
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn valid_mut(&mut self) -> &mut [bool] {
        &mut self.valid
    }

    pub fn set_valid(&mut self, cell: usize, v: bool) {
        self.valid[cell] = v;
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    pub fn has(&self, role: ChannelRole) -> bool {
        self.roles.contains(&role)
    }

    pub fn channel_index(&self, role: ChannelRole) -> Option<usize> {
        self.roles.iter().position(|r| *r == role)
    }

    pub fn pixel(&self, cell: usize) -> &[f64] {
        let c = self.roles.len();
        &self.data[cell * c..(cell + 1) * c]
    }

    pub fn pixel_mut(&mut self, cell: usize) -> &mut [f64] {
        let c = self.roles.len();
        &mut self.data[cell * c..(cell + 1) * c]
    }

    pub fn get(&self, role: ChannelRole, cell: usize) -> Option<f64> {
        self.channel_index(role).map(|k| self.pixel(cell)[k])
    }

    /// Panics if the role is absent.
    pub fn set(&mut self, role: ChannelRole, cell: usize, value: f64) {
        let k = self.channel_index(role).expect("role present in image");
        self.pixel_mut(cell)[k] = value;
    }

    /// Copy of one channel as an `H·W` plane.
    pub fn plane(&self, role: ChannelRole) -> Result<Vec<f64>> {
        let k = self
            .channel_index(role)
            .ok_or_else(|| Error::MissingChannel(role.name().into()))?;
        let c = self.roles.len();
        Ok(self.data.iter().skip(k).step_by(c).copied().collect())
    }

    pub fn set_plane(&mut self, role: ChannelRole, plane: &[f64]) -> Result<()> {
        let k = self
            .channel_index(role)
            .ok_or_else(|| Error::MissingChannel(role.name().into()))?;
        if plane.len() != self.height * self.width {
            return Err(Error::DimensionMismatch {
                what: "channel plane",
                detail: format!("expected {} values, got {}", self.height * self.width, plane.len()),
            });
        }
        let c = self.roles.len();
        for (cell, &v) in plane.iter().enumerate() {
            self.data[cell * c + k] = v;
        }
        Ok(())
    }

    /// Keeps only the listed roles (which must be present).
    pub fn select(&self, roles: &[ChannelRole]) -> Result<RangeImage> {
        let mut out = RangeImage::new(self.height, self.width, roles.to_vec())?;
        for &role in out.roles.clone().iter() {
            out.set_plane(role, &self.plane(role)?)?;
        }
        out.valid = self.valid.clone();
        Ok(out)
    }

    /// Columns `[start, start + width)` with wrap-around along azimuth.
    pub fn crop_columns(&self, start: usize, width: usize) -> RangeImage {
        let c = self.roles.len();
        let mut data = Vec::with_capacity(self.height * width * c);
        let mut valid = Vec::with_capacity(self.height * width);
        for row in 0..self.height {
            for j in 0..width {
                let cell = row * self.width + (start + j) % self.width;
                data.extend_from_slice(self.pixel(cell));
                valid.push(self.valid[cell]);
            }
        }
        RangeImage {
            height: self.height,
            width,
            roles: self.roles.clone(),
            data,
            valid,
        }
    }
}
