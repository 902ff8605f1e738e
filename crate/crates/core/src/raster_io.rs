//! Image-shaped data (flows, confidences, XYZ maps, DSMs, masks) and the
//! `GRR1` container they are stored in.
//!
//! Layout, all little-endian:
//!
//! ```text
//! offset  size  field
//!      0     4  magic "GRR1"
//!      4     4  u32 version (= 1)
//!      8     4  u32 height
//!     12     4  u32 width
//!     16     4  u32 channels
//!     20     4  u32 semantic code
//!     24     4  u32 nodata flag (0 = none, 1 = present)
//!     28     4  f32 nodata value (0.0 when the flag is 0)
//!     32   ...  f32 samples, row-major, channel-interleaved
//! ```
//!
//! Georeferencing and covariance live in a JSON sidecar next to the
//! container (`dsm.grr` -> `dsm.meta.json`).
//!
//! Pixel coordinates are `(row, col)` with integer values at pixel centres.
//! Pixel `(r, c)` of a georeferenced raster is centred on
//! `(origin_easting + (c + 0.5) * pixel_size_x, origin_northing + (r + 0.5) * pixel_size_y)`.

use crate::geodesy_metrics::GeodeticPoint;
use crate::geometry::Vec3;
use nalgebra::{Matrix3, SymmetricEigen};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"GRR1";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 32;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid value: {0}")]
    InvalidValue(String),
    #[error("pixel ({row}, {col}) outside {height}x{width} raster")]
    OutOfBounds { row: f64, col: f64, height: usize, width: usize },
    #[error("no data at pixel ({row}, {col})")]
    NoDataAtPixel { row: f64, col: f64 },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl RasterError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Semantic {
    Flow2,
    Confidence1,
    Xyz3,
    Dsm1,
    Mask1,
    Rgb3,
}

impl Semantic {
    pub const ALL: [Semantic; 6] =
        [Semantic::Flow2, Semantic::Confidence1, Semantic::Xyz3, Semantic::Dsm1, Semantic::Mask1, Semantic::Rgb3];

    pub fn channels(self) -> usize {
        match self {
            Semantic::Flow2 => 2,
            Semantic::Confidence1 | Semantic::Dsm1 | Semantic::Mask1 => 1,
            Semantic::Xyz3 | Semantic::Rgb3 => 3,
        }
    }

    pub fn code(self) -> u32 {
        match self {
            Semantic::Flow2 => 1,
            Semantic::Confidence1 => 2,
            Semantic::Xyz3 => 3,
            Semantic::Dsm1 => 4,
            Semantic::Mask1 => 5,
            Semantic::Rgb3 => 6,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.code() == code)
    }
}

/// How bilinear sampling treats nodata neighbours.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodataPolicy {
    /// Drop nodata neighbours and renormalise the remaining weights.
    Renormalize,
    /// Fail if any neighbour with nonzero weight is nodata.
    Strict,
}

/// H x W x C float32 image. Flow rasters store absolute target coordinates
/// as `(col, row)` in channels `(0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
    nodata: Option<f32>,
    semantic: Semantic,
}

impl Raster {
    pub fn new(
        height: usize,
        width: usize,
        semantic: Semantic,
        data: Vec<f32>,
        nodata: Option<f32>,
    ) -> Result<Self, RasterError> {
        let channels = semantic.channels();
        if height == 0 || width == 0 {
            return Err(RasterError::Shape(format!("empty raster {height}x{width}")));
        }
        if data.len() != height * width * channels {
            return Err(RasterError::Shape(format!(
                "expected {} samples for {height}x{width}x{channels}, got {}",
                height * width * channels,
                data.len()
            )));
        }
        let raster = Self { height, width, channels, data, nodata, semantic };
        if let Some(i) = raster.data.iter().position(|&v| !v.is_finite() && !raster.is_nodata_value(v)) {
            return Err(RasterError::InvalidValue(format!("non-finite sample at index {i}")));
        }
        Ok(raster)
    }

    pub fn filled(height: usize, width: usize, semantic: Semantic, value: f32) -> Self {
        let channels = semantic.channels();
        Self { height, width, channels, data: vec![value; height * width * channels], nodata: None, semantic }
    }

    /// Builds a raster by filling each pixel's channel slice.
    pub fn from_fn(
        height: usize,
        width: usize,
        semantic: Semantic,
        nodata: Option<f32>,
        mut f: impl FnMut(usize, usize, &mut [f32]),
    ) -> Result<Self, RasterError> {
        let channels = semantic.channels();
        let mut data = vec![0.0f32; height * width * channels];
        for (i, px) in data.chunks_exact_mut(channels).enumerate() {
            f(i / width, i % width, px);
        }
        Self::new(height, width, semantic, data, nodata)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn semantic(&self) -> Semantic {
        self.semantic
    }

    pub fn nodata(&self) -> Option<f32> {
        self.nodata
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f32] {
        let start = (row * self.width + col) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn pixel_mut(&mut self, row: usize, col: usize) -> &mut [f32] {
        let start = (row * self.width + col) * self.channels;
        &mut self.data[start..start + self.channels]
    }

    pub fn get(&self, row: usize, col: usize, channel: usize) -> f32 {
        self.data[(row * self.width + col) * self.channels + channel]
    }

    pub fn is_nodata_value(&self, v: f32) -> bool {
        match self.nodata {
            Some(nd) if nd.is_nan() => v.is_nan(),
            Some(nd) => v == nd,
            None => false,
        }
    }

    /// True when any channel of the pixel holds the nodata value.
    pub fn pixel_is_nodata(&self, row: usize, col: usize) -> bool {
        self.nodata.is_some() && self.pixel(row, col).iter().any(|&v| self.is_nodata_value(v))
    }

    /// Whether a subpixel location lies inside the area covered by the pixels.
    pub fn contains(&self, row: f64, col: f64) -> bool {
        row >= -0.5 && col >= -0.5 && row <= self.height as f64 - 0.5 && col <= self.width as f64 - 0.5
    }

    /// Bilinear sample of all channels (up to three) at a subpixel location.
    ///
    /// Neighbour indices are clamped at the border, so sampling exactly at a
    /// pixel centre returns the stored value bit-for-bit.
    pub fn sample_bilinear(&self, row: f64, col: f64, policy: NodataPolicy) -> Result<[f64; 3], RasterError> {
        if !(row.is_finite() && col.is_finite()) || !self.contains(row, col) {
            return Err(RasterError::OutOfBounds { row, col, height: self.height, width: self.width });
        }
        let r0f = row.floor();
        let c0f = col.floor();
        let fr = row - r0f;
        let fc = col - c0f;
        let clamp_r = |r: f64| r.clamp(0.0, (self.height - 1) as f64) as usize;
        let clamp_c = |c: f64| c.clamp(0.0, (self.width - 1) as f64) as usize;
        let (r0, r1) = (clamp_r(r0f), clamp_r(r0f + 1.0));
        let (c0, c1) = (clamp_c(c0f), clamp_c(c0f + 1.0));
        let taps = [
            (r0, c0, (1.0 - fr) * (1.0 - fc)),
            (r0, c1, (1.0 - fr) * fc),
            (r1, c0, fr * (1.0 - fc)),
            (r1, c1, fr * fc),
        ];
        let mut acc = [0.0f64; 3];
        let mut weight_sum = 0.0;
        let mut skipped = false;
        for (r, c, w) in taps {
            if w == 0.0 {
                continue;
            }
            if self.pixel_is_nodata(r, c) {
                if policy == NodataPolicy::Strict {
                    return Err(RasterError::NoDataAtPixel { row, col });
                }
                skipped = true;
                continue;
            }
            for (a, &v) in acc.iter_mut().zip(self.pixel(r, c)) {
                *a += w * v as f64;
            }
            weight_sum += w;
        }
        if weight_sum <= 1e-12 {
            return Err(RasterError::NoDataAtPixel { row, col });
        }
        if skipped || weight_sum != 1.0 {
            for a in &mut acc {
                *a /= weight_sum;
            }
        }
        Ok(acc)
    }
}

/// Affine georeferencing of a north-up raster in a local metric frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeoTransform {
    pub origin_easting: f64,
    pub origin_northing: f64,
    pub pixel_size_x: f64,
    pub pixel_size_y: f64,
    #[serde(default)]
    pub crs_label: String,
    /// Geodetic origin of the local east-north-up frame.
    pub geodetic_anchor: GeodeticPoint,
}

impl GeoTransform {
    pub fn validate(&self) -> Result<(), RasterError> {
        if !(self.pixel_size_x > 0.0) || self.pixel_size_y == 0.0 || !self.pixel_size_y.is_finite() {
            return Err(RasterError::InvalidValue(format!(
                "pixel sizes ({}, {}) must satisfy x > 0, y != 0",
                self.pixel_size_x, self.pixel_size_y
            )));
        }
        Ok(())
    }

    /// Larger of the two pixel dimensions, in metres.
    pub fn ground_sample_distance(&self) -> f64 {
        self.pixel_size_x.abs().max(self.pixel_size_y.abs())
    }

    /// World (easting, northing) of a subpixel location.
    pub fn pixel_to_world(&self, row: f64, col: f64) -> (f64, f64) {
        (
            self.origin_easting + (col + 0.5) * self.pixel_size_x,
            self.origin_northing + (row + 0.5) * self.pixel_size_y,
        )
    }

    /// Subpixel `(row, col)` of a world location.
    pub fn world_to_pixel(&self, easting: f64, northing: f64) -> (f64, f64) {
        (
            (northing - self.origin_northing) / self.pixel_size_y - 0.5,
            (easting - self.origin_easting) / self.pixel_size_x - 0.5,
        )
    }
}

/// 3x3 SPD geopositioning covariance of a DSM, in m².
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CovarianceRecord", into = "CovarianceRecord")]
pub struct DsmCovariance {
    sigma: Matrix3<f64>,
}

#[derive(Serialize, Deserialize)]
struct CovarianceRecord {
    sigma: [[f64; 3]; 3],
}

impl TryFrom<CovarianceRecord> for DsmCovariance {
    type Error = RasterError;

    fn try_from(rec: CovarianceRecord) -> Result<Self, Self::Error> {
        DsmCovariance::new(Matrix3::from_fn(|r, c| rec.sigma[r][c]))
    }
}

impl From<DsmCovariance> for CovarianceRecord {
    fn from(cov: DsmCovariance) -> Self {
        let s = cov.sigma;
        CovarianceRecord { sigma: [0, 1, 2].map(|r| [0, 1, 2].map(|c| s[(r, c)])) }
    }
}

impl DsmCovariance {
    pub fn new(sigma: Matrix3<f64>) -> Result<Self, RasterError> {
        if !sigma.iter().all(|v| v.is_finite()) {
            return Err(RasterError::InvalidValue("covariance has non-finite entries".into()));
        }
        if (sigma - sigma.transpose()).abs().max() > 1e-12 {
            return Err(RasterError::InvalidValue("covariance is not symmetric".into()));
        }
        let min_eig = SymmetricEigen::new(sigma).eigenvalues.min();
        if !(min_eig > 0.0) {
            return Err(RasterError::InvalidValue(format!("covariance is not positive definite (min eigenvalue {min_eig})")));
        }
        Ok(Self { sigma })
    }

    pub fn identity() -> Self {
        Self { sigma: Matrix3::identity() }
    }

    pub fn sigma(&self) -> &Matrix3<f64> {
        &self.sigma
    }
}

/// Contents of a `.meta.json` sidecar.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RasterMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geotransform: Option<GeoTransform>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariance: Option<DsmCovariance>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub provenance: BTreeMap<String, serde_json::Value>,
}

pub fn sidecar_path(raster_path: &Path) -> PathBuf {
    raster_path.with_extension("meta.json")
}

pub fn write_raster(raster: &Raster, path: &Path) -> Result<(), RasterError> {
    let file = File::create(path).map_err(|e| RasterError::io(path, e))?;
    let mut out = BufWriter::new(file);
    encode_raster(raster, &mut out).map_err(|e| RasterError::io(path, e))?;
    out.flush().map_err(|e| RasterError::io(path, e))
}

pub fn encode_raster(raster: &Raster, out: &mut impl Write) -> std::io::Result<()> {
    let dim = |v: usize| u32::try_from(v).expect("raster dimension exceeds u32");
    out.write_all(MAGIC)?;
    for v in [VERSION, dim(raster.height), dim(raster.width), dim(raster.channels), raster.semantic.code()] {
        out.write_all(&v.to_le_bytes())?;
    }
    out.write_all(&u32::from(raster.nodata.is_some()).to_le_bytes())?;
    out.write_all(&raster.nodata.unwrap_or(0.0).to_le_bytes())?;
    for v in &raster.data {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_raster(path: &Path) -> Result<Raster, RasterError> {
    let file = File::open(path).map_err(|e| RasterError::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file).read_to_end(&mut bytes).map_err(|e| RasterError::io(path, e))?;
    decode_raster(&bytes)
}

pub fn decode_raster(bytes: &[u8]) -> Result<Raster, RasterError> {
    if bytes.len() < HEADER_LEN {
        return Err(RasterError::Format(format!("file too short for header ({} bytes)", bytes.len())));
    }
    if &bytes[0..4] != MAGIC {
        return Err(RasterError::Format(format!("bad magic {:?}", &bytes[0..4])));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
    let version = word(1);
    if version != VERSION {
        return Err(RasterError::Format(format!("unsupported version {version}")));
    }
    let (height, width, channels) = (word(2) as usize, word(3) as usize, word(4) as usize);
    let semantic =
        Semantic::from_code(word(5)).ok_or_else(|| RasterError::Format(format!("unknown semantic code {}", word(5))))?;
    if channels != semantic.channels() {
        return Err(RasterError::Shape(format!("{semantic:?} requires {} channels, header says {channels}", semantic.channels())));
    }
    let nodata = match word(6) {
        0 => None,
        1 => Some(f32::from_le_bytes(bytes[28..32].try_into().unwrap())),
        f => return Err(RasterError::Format(format!("bad nodata flag {f}"))),
    };
    let payload = &bytes[HEADER_LEN..];
    let expected = height
        .checked_mul(width)
        .and_then(|v| v.checked_mul(channels))
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| RasterError::Shape("dimensions overflow".into()))?;
    if payload.len() != expected {
        return Err(RasterError::Shape(format!("expected {expected} payload bytes, found {}", payload.len())));
    }
    let data = payload.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
    Raster::new(height, width, semantic, data, nodata)
}

pub fn read_meta(path: &Path) -> Result<RasterMeta, RasterError> {
    read_json(path)
}

pub fn write_meta(meta: &RasterMeta, path: &Path) -> Result<(), RasterError> {
    write_json(meta, path)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, RasterError> {
    let text = std::fs::read_to_string(path).map_err(|e| RasterError::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| RasterError::Json { path: path.to_path_buf(), source })
}

/// Pretty-printed JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(value: &T, path: &Path) -> Result<(), RasterError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| RasterError::Json { path: path.to_path_buf(), source })?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| RasterError::io(path, e))
}

/// Valid points of an Xyz3 raster in row-major order; nodata and
/// non-finite pixels are skipped.
pub fn xyz_points(r: &Raster) -> Vec<Vec3> {
    (0..r.height)
        .flat_map(|row| (0..r.width).map(move |col| (row, col)))
        .filter(|&(row, col)| !r.pixel_is_nodata(row, col))
        .map(|(row, col)| r.pixel(row, col))
        .filter(|p| p.iter().all(|v| v.is_finite()))
        .map(|p| Vec3::new(p[0] as f64, p[1] as f64, p[2] as f64))
        .collect()
}

/// Local-frame `(easting, northing, height)` of a DSM location, with the
/// height bilinearly interpolated. Any nodata neighbour with nonzero weight
/// makes the lookup fail.
pub fn dsm_pixel_to_xyz(dsm: &Raster, geo: &GeoTransform, row: f64, col: f64) -> Result<Vec3, RasterError> {
    if dsm.channels() != 1 {
        return Err(RasterError::Shape(format!("DSM must have 1 channel, has {}", dsm.channels())));
    }
    let h = dsm.sample_bilinear(row, col, NodataPolicy::Strict)?[0];
    let (e, n) = geo.pixel_to_world(row, col);
    Ok(Vec3::new(e, n, h))
}

/// Bilinear lookup in a per-pixel XYZ raster; nodata neighbours are skipped
/// and the remaining weights renormalised.
pub fn xyz_image_lookup(xyz: &Raster, row: f64, col: f64) -> Result<Vec3, RasterError> {
    if xyz.channels() != 3 {
        return Err(RasterError::Shape(format!("XYZ raster must have 3 channels, has {}", xyz.channels())));
    }
    let [x, y, z] = xyz.sample_bilinear(row, col, NodataPolicy::Renormalize)?;
    Ok(Vec3::new(x, y, z))
}
