//! Volumetric and planar data model with the `DVOL`, `DMSK` and `DDEP`
//! binary formats.
//!
//! All multi-byte fields are little-endian. Volumes are stored X-fastest:
//! the voxel `(x, y, z)` lives at flat index `x + X * (y + Y * z)`.
//! Axes: X = left-right, Y = posterior to anterior (the camera sits on the
//! anterior side looking along -Y), Z = inferior to superior. The coronal
//! plane is X-Z, so 2D grids are `W = X` columns by `H = Z` rows.

use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use thiserror::Error;

pub const VOLUME_MAGIC: &[u8; 4] = b"DVOL";
pub const MASK_MAGIC: &[u8; 4] = b"DMSK";
pub const DEPTH_MAGIC: &[u8; 4] = b"DDEP";
pub const FORMAT_VERSION: u8 = 1;

pub const DTYPE_F32: u8 = 0;
pub const DTYPE_U8: u8 = 1;

/// Number of organ channels.
pub const N_ORGANS: usize = 11;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported format version {0}")]
    VersionMismatch(u8),
    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),
    #[error("unexpected dtype code {found} (expected {expected})")]
    WrongDtype { expected: u8, found: u8 },
    #[error("truncated file: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("payload size mismatch: header implies {expected} bytes, file has {actual}")]
    SizeMismatch { expected: usize, actual: usize },
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("invalid UTF-8 in organ name")]
    BadName,
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, FormatError>;

fn invariant<T>(msg: impl Into<String>) -> Result<T> {
    Err(FormatError::Invariant(msg.into()))
}

/// The eleven structures, in the fixed channel order used by every file,
/// checkpoint and report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Organ {
    Hips,
    Femurs,
    Vertebra,
    Heart,
    Lungs,
    Kidneys,
    Liver,
    Pancreas,
    Spleen,
    Stomach,
    UrinaryBladder,
}

impl Organ {
    pub const ALL: [Organ; N_ORGANS] = [
        Organ::Hips,
        Organ::Femurs,
        Organ::Vertebra,
        Organ::Heart,
        Organ::Lungs,
        Organ::Kidneys,
        Organ::Liver,
        Organ::Pancreas,
        Organ::Spleen,
        Organ::Stomach,
        Organ::UrinaryBladder,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Organ::Hips => "hips",
            Organ::Femurs => "femurs",
            Organ::Vertebra => "vertebra",
            Organ::Heart => "heart",
            Organ::Lungs => "lungs",
            Organ::Kidneys => "kidneys",
            Organ::Liver => "liver",
            Organ::Pancreas => "pancreas",
            Organ::Spleen => "spleen",
            Organ::Stomach => "stomach",
            Organ::UrinaryBladder => "urinary_bladder",
        }
    }

    pub fn from_name(name: &str) -> Option<Organ> {
        Organ::ALL.into_iter().find(|o| o.name() == name)
    }
}

impl fmt::Display for Organ {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub fn canonical_organ_names() -> Vec<String> {
    Organ::ALL.iter().map(|o| o.name().to_string()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dims3 {
    pub x: usize,
    pub y: usize,
    pub z: usize,
}

impl Dims3 {
    pub fn new(x: usize, y: usize, z: usize) -> Self {
        Self { x, y, z }
    }

    pub fn len(&self) -> usize {
        self.x * self.y * self.z
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.x * (y + self.y * z)
    }

    fn validate(&self) -> Result<()> {
        if self.x == 0 || self.y == 0 || self.z == 0 {
            return invariant(format!("dims must be >= 1, got {self:?}"));
        }
        Ok(())
    }
}

/// Physical voxel size in millimetres along X, Y and Z.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spacing3 {
    pub x: f32,
    pub y: f32,
    pub z: f32,
}

impl Spacing3 {
    pub fn new(x: f32, y: f32, z: f32) -> Self {
        Self { x, y, z }
    }

    pub fn isotropic(s: f32) -> Self {
        Self::new(s, s, s)
    }

    /// In-plane spacing of the coronal projection (X, Z).
    pub fn coronal(&self) -> Spacing2 {
        Spacing2::new(self.x, self.z)
    }

    fn validate(&self) -> Result<()> {
        if !(self.x > 0.0 && self.y > 0.0 && self.z > 0.0)
            || !(self.x.is_finite() && self.y.is_finite() && self.z.is_finite())
        {
            return invariant(format!("spacing must be positive and finite, got {self:?}"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dims2 {
    pub w: usize,
    pub h: usize,
}

impl Dims2 {
    pub fn new(w: usize, h: usize) -> Self {
        Self { w, h }
    }

    pub fn len(&self) -> usize {
        self.w * self.h
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, z: usize) -> usize {
        x + self.w * z
    }

    fn validate(&self) -> Result<()> {
        if self.w == 0 || self.h == 0 {
            return invariant(format!("2D dims must be >= 1, got {self:?}"));
        }
        Ok(())
    }
}

/// Pixel size in millimetres along the image columns (X) and rows (Z).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spacing2 {
    pub x: f32,
    pub z: f32,
}

impl Spacing2 {
    pub fn new(x: f32, z: f32) -> Self {
        Self { x, z }
    }

    fn validate(&self) -> Result<()> {
        if !(self.x > 0.0 && self.z > 0.0) || !(self.x.is_finite() && self.z.is_finite()) {
            return invariant(format!("spacing must be positive and finite, got {self:?}"));
        }
        Ok(())
    }
}

/// Scalar volume (simulated intensity).
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: Dims3,
    spacing: Spacing3,
    values: Vec<f32>,
}

impl Volume {
    pub fn new(dims: Dims3, spacing: Spacing3, values: Vec<f32>) -> Result<Self> {
        dims.validate()?;
        spacing.validate()?;
        if values.len() != dims.len() {
            return invariant(format!(
                "volume has {} values for dims {:?}",
                values.len(),
                dims
            ));
        }
        Ok(Self {
            dims,
            spacing,
            values,
        })
    }

    pub fn zeros(dims: Dims3, spacing: Spacing3) -> Result<Self> {
        Self::new(dims, spacing, vec![0.0; dims.len()])
    }

    pub fn dims(&self) -> Dims3 {
        self.dims
    }

    pub fn spacing(&self) -> Spacing3 {
        self.spacing
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.values[self.dims.index(x, y, z)]
    }
}

/// One bit per voxel, stored as a byte in {0, 1}.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryVolume {
    dims: Dims3,
    spacing: Spacing3,
    bits: Vec<u8>,
}

impl BinaryVolume {
    pub fn new(dims: Dims3, spacing: Spacing3, bits: Vec<u8>) -> Result<Self> {
        dims.validate()?;
        spacing.validate()?;
        if bits.len() != dims.len() {
            return invariant(format!(
                "binary volume has {} voxels for dims {:?}",
                bits.len(),
                dims
            ));
        }
        if bits.iter().any(|&b| b > 1) {
            return invariant("binary volume values must be 0 or 1");
        }
        Ok(Self {
            dims,
            spacing,
            bits,
        })
    }

    pub fn zeros(dims: Dims3, spacing: Spacing3) -> Result<Self> {
        Self::new(dims, spacing, vec![0; dims.len()])
    }

    pub fn dims(&self) -> Dims3 {
        self.dims
    }

    pub fn spacing(&self) -> Spacing3 {
        self.spacing
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.bits[self.dims.index(x, y, z)] != 0
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, on: bool) {
        let i = self.dims.index(x, y, z);
        self.bits[i] = on as u8;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.iter().all(|&b| b == 0)
    }

    /// `true` when every set voxel of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &BinaryVolume) -> bool {
        self.dims == other.dims
            && self
                .bits
                .iter()
                .zip(&other.bits)
                .all(|(&a, &b)| a == 0 || b != 0)
    }
}

/// Integer label map: 0 is background, `k + 1` is organ `k` in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    dims: Dims3,
    spacing: Spacing3,
    labels: Vec<u8>,
}

impl LabelVolume {
    pub fn new(dims: Dims3, spacing: Spacing3, labels: Vec<u8>) -> Result<Self> {
        dims.validate()?;
        spacing.validate()?;
        if labels.len() != dims.len() {
            return invariant(format!(
                "label volume has {} voxels for dims {:?}",
                labels.len(),
                dims
            ));
        }
        Ok(Self {
            dims,
            spacing,
            labels,
        })
    }

    pub fn dims(&self) -> Dims3 {
        self.dims
    }

    pub fn spacing(&self) -> Spacing3 {
        self.spacing
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Binary mask of the voxels carrying `label`.
    pub fn select(&self, label: u8) -> BinaryVolume {
        let bits = self.labels.iter().map(|&l| (l == label) as u8).collect();
        BinaryVolume {
            dims: self.dims,
            spacing: self.spacing,
            bits,
        }
    }

    /// One binary volume per canonical organ.
    pub fn organ_masks(&self) -> Vec<BinaryVolume> {
        (0..N_ORGANS).map(|k| self.select(k as u8 + 1)).collect()
    }
}

/// Ordered per-organ binary 2D masks on the coronal grid. Channels may overlap.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskStack {
    dims: Dims2,
    spacing: Spacing2,
    names: Vec<String>,
    channels: Vec<Vec<u8>>,
}

impl MaskStack {
    pub fn new(
        dims: Dims2,
        spacing: Spacing2,
        names: Vec<String>,
        channels: Vec<Vec<u8>>,
    ) -> Result<Self> {
        dims.validate()?;
        spacing.validate()?;
        if names.len() != channels.len() {
            return invariant(format!(
                "{} organ names for {} channels",
                names.len(),
                channels.len()
            ));
        }
        if channels.len() > u8::MAX as usize {
            return invariant("too many channels");
        }
        for (name, ch) in names.iter().zip(&channels) {
            if ch.len() != dims.len() {
                return invariant(format!(
                    "channel {name} has {} pixels, expected {}",
                    ch.len(),
                    dims.len()
                ));
            }
            if ch.iter().any(|&b| b > 1) {
                return invariant(format!("channel {name} is not binary"));
            }
            if name.len() > u16::MAX as usize {
                return invariant("organ name too long");
            }
        }
        Ok(Self {
            dims,
            spacing,
            names,
            channels,
        })
    }

    /// Stack with the canonical organ names.
    pub fn canonical(dims: Dims2, spacing: Spacing2, channels: Vec<Vec<u8>>) -> Result<Self> {
        Self::new(dims, spacing, canonical_organ_names(), channels)
    }

    pub fn empty_canonical(dims: Dims2, spacing: Spacing2) -> Result<Self> {
        Self::canonical(dims, spacing, vec![vec![0; dims.len()]; N_ORGANS])
    }

    pub fn dims(&self) -> Dims2 {
        self.dims
    }

    pub fn spacing(&self) -> Spacing2 {
        self.spacing
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn channel(&self, c: usize) -> &[u8] {
        &self.channels[c]
    }

    pub fn channels(&self) -> &[Vec<u8>] {
        &self.channels
    }

    pub fn has_canonical_order(&self) -> bool {
        self.names.len() == N_ORGANS && self.names.iter().zip(Organ::ALL).all(|(n, o)| n == o.name())
    }
}

/// Coronal height map in [0, 1]; background pixels are exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    dims: Dims2,
    spacing: Spacing2,
    values: Vec<f32>,
}

impl DepthImage {
    pub fn new(dims: Dims2, spacing: Spacing2, values: Vec<f32>) -> Result<Self> {
        dims.validate()?;
        spacing.validate()?;
        if values.len() != dims.len() {
            return invariant(format!(
                "depth image has {} values for dims {:?}",
                values.len(),
                dims
            ));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return invariant(format!("depth value {v} outside [0, 1]"));
        }
        Ok(Self {
            dims,
            spacing,
            values,
        })
    }

    pub fn dims(&self) -> Dims2 {
        self.dims
    }

    pub fn spacing(&self) -> Spacing2 {
        self.spacing
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, x: usize, z: usize) -> f32 {
        self.values[self.dims.index(x, z)]
    }
}

// ---------------------------------------------------------------------------
// Encoding

pub(crate) struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let available = self.buf.len() - self.pos;
        if n > available {
            return Err(FormatError::Truncated {
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub(crate) fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let found = self.take(4).map_err(|_| FormatError::BadMagic {
            expected: String::from_utf8_lossy(expected).into_owned(),
            found: String::from_utf8_lossy(self.buf).into_owned(),
        })?;
        if found != expected {
            return Err(FormatError::BadMagic {
                expected: String::from_utf8_lossy(expected).into_owned(),
                found: String::from_utf8_lossy(found).into_owned(),
            });
        }
        Ok(())
    }

    pub(crate) fn version(&mut self) -> Result<()> {
        let v = self.u8()?;
        if v != FORMAT_VERSION {
            return Err(FormatError::VersionMismatch(v));
        }
        Ok(())
    }

    /// Fixed-size trailing payload: the remaining byte count must match exactly.
    pub(crate) fn payload(&mut self, expected: usize) -> Result<&'a [u8]> {
        let actual = self.remaining();
        if actual != expected {
            return Err(FormatError::SizeMismatch { expected, actual });
        }
        self.take(expected)
    }
}

pub(crate) fn f32s_from_le(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

pub(crate) fn push_f32s(out: &mut Vec<u8>, values: &[f32]) {
    out.reserve(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn dim_u32(n: usize) -> Result<u32> {
    u32::try_from(n).or_else(|_| invariant(format!("dimension {n} exceeds u32")))
}

fn volume_header(out: &mut Vec<u8>, dtype: u8, dims: Dims3, spacing: Spacing3) -> Result<()> {
    out.extend_from_slice(VOLUME_MAGIC);
    out.push(FORMAT_VERSION);
    out.push(dtype);
    for d in [dims.x, dims.y, dims.z] {
        out.extend_from_slice(&dim_u32(d)?.to_le_bytes());
    }
    for s in [spacing.x, spacing.y, spacing.z] {
        out.extend_from_slice(&s.to_le_bytes());
    }
    Ok(())
}

/// Size of the `DVOL` header in bytes.
pub const VOLUME_HEADER_LEN: usize = 4 + 1 + 1 + 12 + 12;

pub fn encode_volume(v: &Volume) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(VOLUME_HEADER_LEN + v.values.len() * 4);
    volume_header(&mut out, DTYPE_F32, v.dims, v.spacing)?;
    push_f32s(&mut out, &v.values);
    Ok(out)
}

pub fn encode_label_volume(v: &LabelVolume) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(VOLUME_HEADER_LEN + v.labels.len());
    volume_header(&mut out, DTYPE_U8, v.dims, v.spacing)?;
    out.extend_from_slice(&v.labels);
    Ok(out)
}

pub fn encode_binary_volume(v: &BinaryVolume) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(VOLUME_HEADER_LEN + v.bits.len());
    volume_header(&mut out, DTYPE_U8, v.dims, v.spacing)?;
    out.extend_from_slice(&v.bits);
    Ok(out)
}

/// Decoded `DVOL` file, either payload type.
#[derive(Debug, Clone, PartialEq)]
pub enum VolumeFile {
    Scalar(Volume),
    Labels(LabelVolume),
}

pub fn decode_volume_file(bytes: &[u8]) -> Result<VolumeFile> {
    let mut c = Cursor::new(bytes);
    c.magic(VOLUME_MAGIC)?;
    c.version()?;
    let dtype = c.u8()?;
    if dtype != DTYPE_F32 && dtype != DTYPE_U8 {
        return Err(FormatError::UnknownDtype(dtype));
    }
    let dims = Dims3::new(c.u32()? as usize, c.u32()? as usize, c.u32()? as usize);
    let spacing = Spacing3::new(c.f32()?, c.f32()?, c.f32()?);
    let n = dims.x.checked_mul(dims.y).and_then(|v| v.checked_mul(dims.z));
    let n = n.ok_or_else(|| FormatError::Invariant("dims overflow".into()))?;
    match dtype {
        DTYPE_F32 => {
            let payload = c.payload(n * 4)?;
            Ok(VolumeFile::Scalar(Volume::new(
                dims,
                spacing,
                f32s_from_le(payload),
            )?))
        }
        _ => {
            let payload = c.payload(n)?;
            Ok(VolumeFile::Labels(LabelVolume::new(
                dims,
                spacing,
                payload.to_vec(),
            )?))
        }
    }
}

pub fn decode_volume(bytes: &[u8]) -> Result<Volume> {
    match decode_volume_file(bytes)? {
        VolumeFile::Scalar(v) => Ok(v),
        VolumeFile::Labels(_) => Err(FormatError::WrongDtype {
            expected: DTYPE_F32,
            found: DTYPE_U8,
        }),
    }
}

pub fn decode_label_volume(bytes: &[u8]) -> Result<LabelVolume> {
    match decode_volume_file(bytes)? {
        VolumeFile::Labels(v) => Ok(v),
        VolumeFile::Scalar(_) => Err(FormatError::WrongDtype {
            expected: DTYPE_U8,
            found: DTYPE_F32,
        }),
    }
}

/// Size of the fixed part of the `DMSK` header in bytes.
pub const MASK_HEADER_LEN: usize = 4 + 1 + 1 + 8 + 8;

pub fn encode_maskstack(m: &MaskStack) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(MASK_HEADER_LEN + m.channels.len() * (m.dims.len() + 32));
    out.extend_from_slice(MASK_MAGIC);
    out.push(FORMAT_VERSION);
    out.push(m.channels.len() as u8);
    out.extend_from_slice(&dim_u32(m.dims.w)?.to_le_bytes());
    out.extend_from_slice(&dim_u32(m.dims.h)?.to_le_bytes());
    out.extend_from_slice(&m.spacing.x.to_le_bytes());
    out.extend_from_slice(&m.spacing.z.to_le_bytes());
    for (name, ch) in m.names.iter().zip(&m.channels) {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(ch);
    }
    Ok(out)
}

pub fn decode_maskstack(bytes: &[u8]) -> Result<MaskStack> {
    let mut c = Cursor::new(bytes);
    c.magic(MASK_MAGIC)?;
    c.version()?;
    let n_channels = c.u8()? as usize;
    let dims = Dims2::new(c.u32()? as usize, c.u32()? as usize);
    let spacing = Spacing2::new(c.f32()?, c.f32()?);
    let plane = dims
        .w
        .checked_mul(dims.h)
        .ok_or_else(|| FormatError::Invariant("dims overflow".into()))?;
    let mut names = Vec::with_capacity(n_channels);
    let mut channels = Vec::with_capacity(n_channels);
    for _ in 0..n_channels {
        let len = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(len)?).map_err(|_| FormatError::BadName)?;
        names.push(name.to_string());
        channels.push(c.take(plane)?.to_vec());
    }
    if c.remaining() != 0 {
        return Err(FormatError::SizeMismatch {
            expected: c.pos,
            actual: bytes.len(),
        });
    }
    MaskStack::new(dims, spacing, names, channels)
}

/// Size of the `DDEP` header in bytes.
pub const DEPTH_HEADER_LEN: usize = 4 + 1 + 8 + 8;

pub fn encode_depth(d: &DepthImage) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(DEPTH_HEADER_LEN + d.values.len() * 4);
    out.extend_from_slice(DEPTH_MAGIC);
    out.push(FORMAT_VERSION);
    out.extend_from_slice(&dim_u32(d.dims.w)?.to_le_bytes());
    out.extend_from_slice(&dim_u32(d.dims.h)?.to_le_bytes());
    out.extend_from_slice(&d.spacing.x.to_le_bytes());
    out.extend_from_slice(&d.spacing.z.to_le_bytes());
    push_f32s(&mut out, &d.values);
    Ok(out)
}

pub fn decode_depth(bytes: &[u8]) -> Result<DepthImage> {
    let mut c = Cursor::new(bytes);
    c.magic(DEPTH_MAGIC)?;
    c.version()?;
    let dims = Dims2::new(c.u32()? as usize, c.u32()? as usize);
    let spacing = Spacing2::new(c.f32()?, c.f32()?);
    let n = dims
        .w
        .checked_mul(dims.h)
        .ok_or_else(|| FormatError::Invariant("dims overflow".into()))?;
    let payload = c.payload(n * 4)?;
    DepthImage::new(dims, spacing, f32s_from_le(payload))
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    decode_volume(&fs::read(path)?)
}

pub fn write_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_volume(v)?)
}

pub fn read_label_volume(path: impl AsRef<Path>) -> Result<LabelVolume> {
    decode_label_volume(&fs::read(path)?)
}

pub fn write_label_volume(v: &LabelVolume, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_label_volume(v)?)
}

pub fn write_binary_volume(v: &BinaryVolume, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_binary_volume(v)?)
}

pub fn read_maskstack(path: impl AsRef<Path>) -> Result<MaskStack> {
    decode_maskstack(&fs::read(path)?)
}

pub fn write_maskstack(m: &MaskStack, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_maskstack(m)?)
}

pub fn read_depth(path: impl AsRef<Path>) -> Result<DepthImage> {
    decode_depth(&fs::read(path)?)
}

pub fn write_depth(d: &DepthImage, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_depth(d)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sp() -> Spacing3 {
        Spacing3::isotropic(4.0)
    }

    #[test]
    fn zero_volume_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.dvol");
        let v = Volume::zeros(Dims3::new(4, 4, 4), sp()).unwrap();
        write_volume(&v, &path).unwrap();
        assert_eq!(read_volume(&path).unwrap(), v);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let v = Volume::zeros(Dims3::new(2, 2, 2), sp()).unwrap();
        let mut bytes = encode_volume(&v).unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(
            decode_volume(&bytes),
            Err(FormatError::BadMagic { .. })
        ));
    }

    #[test]
    fn x_fastest_storage() {
        let v = Volume::new(
            Dims3::new(2, 2, 2),
            sp(),
            (0..8).map(|i| i as f32).collect(),
        )
        .unwrap();
        assert_eq!(v.get(1, 0, 0), 1.0);
        assert_eq!(v.get(0, 1, 0), 2.0);
        assert_eq!(v.get(0, 0, 1), 4.0);
    }

    #[test]
    fn distinct_header_errors() {
        let v = Volume::zeros(Dims3::new(2, 2, 2), sp()).unwrap();
        let good = encode_volume(&v).unwrap();

        let mut bad_version = good.clone();
        bad_version[4] = 2;
        assert!(matches!(
            decode_volume(&bad_version),
            Err(FormatError::VersionMismatch(2))
        ));

        let mut bad_dtype = good.clone();
        bad_dtype[5] = 7;
        assert!(matches!(
            decode_volume(&bad_dtype),
            Err(FormatError::UnknownDtype(7))
        ));

        assert!(matches!(
            decode_volume(&good[..good.len() - 3]),
            Err(FormatError::SizeMismatch { .. })
        ));
        assert!(matches!(
            decode_volume(&good[..10]),
            Err(FormatError::Truncated { .. })
        ));

        let mut longer = good.clone();
        longer.push(0);
        assert!(matches!(
            decode_volume(&longer),
            Err(FormatError::SizeMismatch { .. })
        ));
    }

    #[test]
    fn maskstack_file_length() {
        let dims = Dims2::new(96, 48);
        let m = MaskStack::empty_canonical(dims, Spacing2::new(4.0, 4.0)).unwrap();
        let bytes = encode_maskstack(&m).unwrap();
        let names: usize = Organ::ALL.iter().map(|o| 2 + o.name().len()).sum();
        assert_eq!(bytes.len(), MASK_HEADER_LEN + names + 11 * 96 * 48);
    }

    #[test]
    fn empty_channel_preserved() {
        let dims = Dims2::new(5, 3);
        let mut channels = vec![vec![1u8; 15]; N_ORGANS];
        channels[4] = vec![0; 15];
        let m = MaskStack::canonical(dims, Spacing2::new(1.0, 2.0), channels).unwrap();
        let back = decode_maskstack(&encode_maskstack(&m).unwrap()).unwrap();
        assert_eq!(back, m);
        assert!(back.channel(4).iter().all(|&b| b == 0));
        assert!(back.has_canonical_order());
    }

    #[test]
    fn depth_out_of_range_rejected() {
        let r = DepthImage::new(Dims2::new(2, 1), Spacing2::new(1.0, 1.0), vec![0.5, 1.5]);
        assert!(matches!(r, Err(FormatError::Invariant(_))));
    }

    #[test]
    fn maskstack_trailing_bytes_rejected() {
        let m = MaskStack::empty_canonical(Dims2::new(3, 3), Spacing2::new(1.0, 1.0)).unwrap();
        let mut bytes = encode_maskstack(&m).unwrap();
        bytes.push(9);
        assert!(matches!(
            decode_maskstack(&bytes),
            Err(FormatError::SizeMismatch { .. })
        ));
        bytes.truncate(bytes.len() - 5);
        assert!(matches!(
            decode_maskstack(&bytes),
            Err(FormatError::Truncated { .. })
        ));
    }

    #[test]
    fn label_volume_selects_organs() {
        let labels = vec![0, 1, 11, 1, 0, 0, 0, 0];
        let lv = LabelVolume::new(Dims3::new(2, 2, 2), sp(), labels).unwrap();
        let masks = lv.organ_masks();
        assert_eq!(masks.len(), N_ORGANS);
        assert_eq!(masks[0].count(), 2);
        assert_eq!(masks[10].count(), 1);
        assert!(masks[5].is_empty());
        let back = decode_label_volume(&encode_label_volume(&lv).unwrap()).unwrap();
        assert_eq!(back, lv);
        assert!(matches!(
            decode_volume(&encode_label_volume(&lv).unwrap()),
            Err(FormatError::WrongDtype { .. })
        ));
    }

    fn arb_volume() -> impl Strategy<Value = Volume> {
        (1usize..6, 1usize..6, 1usize..6, 0.1f32..10.0).prop_flat_map(|(x, y, z, s)| {
            proptest::collection::vec(-1e6f32..1e6, x * y * z).prop_map(move |vals| {
                Volume::new(Dims3::new(x, y, z), Spacing3::new(s, s * 2.0, s), vals).unwrap()
            })
        })
    }

    fn arb_maskstack() -> impl Strategy<Value = MaskStack> {
        (1usize..8, 1usize..8, 0usize..5).prop_flat_map(|(w, h, n)| {
            proptest::collection::vec(
                ("[a-z_]{0,12}", proptest::collection::vec(0u8..2, w * h)),
                n,
            )
            .prop_map(move |chs| {
                let (names, channels) = chs.into_iter().unzip();
                MaskStack::new(Dims2::new(w, h), Spacing2::new(1.5, 3.0), names, channels)
                    .unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn volume_round_trip_is_byte_exact(v in arb_volume()) {
            let bytes = encode_volume(&v).unwrap();
            let back = decode_volume(&bytes).unwrap();
            prop_assert_eq!(encode_volume(&back).unwrap(), bytes);
            prop_assert_eq!(back, v);
        }

        #[test]
        fn maskstack_round_trip_is_byte_exact(m in arb_maskstack()) {
            let bytes = encode_maskstack(&m).unwrap();
            let back = decode_maskstack(&bytes).unwrap();
            prop_assert_eq!(encode_maskstack(&back).unwrap(), bytes);
            prop_assert_eq!(back, m);
        }

        #[test]
        fn depth_round_trip_is_byte_exact(w in 1usize..9, h in 1usize..9, seed in 0u32..1000) {
            let vals = (0..w * h).map(|i| (((i as u32).wrapping_mul(2654435761u32) ^ seed) % 1001) as f32 / 1000.0).collect();
            let d = DepthImage::new(Dims2::new(w, h), Spacing2::new(2.0, 4.0), vals).unwrap();
            let bytes = encode_depth(&d).unwrap();
            let back = decode_depth(&bytes).unwrap();
            prop_assert_eq!(encode_depth(&back).unwrap(), bytes);
            prop_assert_eq!(back, d);
        }

        #[test]
        fn storage_order(x in 1usize..5, y in 1usize..5, z in 1usize..5) {
            let dims = Dims3::new(x, y, z);
            let v = Volume::new(dims, sp(), (0..dims.len()).map(|i| i as f32).collect()).unwrap();
            for k in 0..z { for j in 0..y { for i in 0..x {
                prop_assert_eq!(v.get(i, j, k) as usize, i + x * (j + y * k));
            }}}
        }
    }
}
