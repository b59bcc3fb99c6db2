//! Voxel grids, slicing, cropping, and the `.spv` binary volume format.
//!
//! Indexing is x-fastest, then y, then z, everywhere in this crate. The
//! `.spv` layout is a fixed 32-byte header (magic `SPV1`, three u32
//! little-endian dims, f64 little-endian voxel pitch, zero padding)
//! followed by the payload as little-endian f64, so roundtrips are
//! bit-exact and language-neutral.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::scalar::Scalar;

pub const SPV_MAGIC: [u8; 4] = *b"SPV1";
pub const SPV_HEADER_LEN: usize = 32;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("dims must be positive, got {0:?}")]
    BadDims((usize, usize, usize)),
    #[error("voxel pitch must be positive, got {0}")]
    BadPitch(f64),
    #[error("data length {got} does not match dims {dims:?} ({want})")]
    LengthMismatch {
        dims: (usize, usize, usize),
        want: usize,
        got: usize,
    },
    #[error("crop window out of bounds: center {center:?}, size {size:?}, dims {dims:?}")]
    WindowOutOfBounds {
        center: (usize, usize, usize),
        size: (usize, usize, usize),
        dims: (usize, usize, usize),
    },
    #[error("slice index {index} out of range for nz = {nz}")]
    SliceOutOfRange { index: usize, nz: usize },
    #[error("bad magic bytes {0:?}, expected \"SPV1\"")]
    BadMagic([u8; 4]),
    #[error("payload is shorter than the header claims ({want} values)")]
    TruncatedPayload { want: usize },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Dense 3D grid with isotropic voxel pitch in millimetres.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D<T: Scalar = f64> {
    dims: (usize, usize, usize),
    voxel_mm: f64,
    data: Vec<T>,
}

impl<T: Scalar> Volume3D<T> {
    pub fn new(dims: (usize, usize, usize), voxel_mm: f64, data: Vec<T>) -> Result<Self, VolumeError> {
        if dims.0 == 0 || dims.1 == 0 || dims.2 == 0 {
            return Err(VolumeError::BadDims(dims));
        }
        if !(voxel_mm > 0.0) {
            return Err(VolumeError::BadPitch(voxel_mm));
        }
        let want = dims.0 * dims.1 * dims.2;
        if data.len() != want {
            return Err(VolumeError::LengthMismatch { dims, want, got: data.len() });
        }
        Ok(Self { dims, voxel_mm, data })
    }

    pub fn zeros(dims: (usize, usize, usize), voxel_mm: f64) -> Self {
        Self::filled(dims, voxel_mm, T::zero())
    }

    pub fn filled(dims: (usize, usize, usize), voxel_mm: f64, value: T) -> Self {
        Self::new(dims, voxel_mm, vec![value; dims.0 * dims.1 * dims.2]).expect("valid dims")
    }

    pub fn from_fn(
        dims: (usize, usize, usize),
        voxel_mm: f64,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Self {
        let mut data = Vec::with_capacity(dims.0 * dims.1 * dims.2);
        for z in 0..dims.2 {
            for y in 0..dims.1 {
                for x in 0..dims.0 {
                    data.push(f(x, y, z));
                }
            }
        }
        Self::new(dims, voxel_mm, data).expect("valid dims")
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn voxel_mm(&self) -> f64 {
        self.voxel_mm
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        debug_assert!(x < self.dims.0 && y < self.dims.1 && z < self.dims.2);
        x + self.dims.0 * (y + self.dims.1 * z)
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> T {
        self.data[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: T) {
        let i = self.index(x, y, z);
        self.data[i] = v;
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64()).sum()
    }

    /// Extracts the axial (short-axis) plane at `axis_index`.
    pub fn slice_extract(&self, axis_index: usize) -> Result<Slice2D<T>, VolumeError> {
        let (nx, ny, nz) = self.dims;
        if axis_index >= nz {
            return Err(VolumeError::SliceOutOfRange { index: axis_index, nz });
        }
        let start = nx * ny * axis_index;
        Slice2D::new((nx, ny), self.data[start..start + nx * ny].to_vec())
    }

    /// Crops a `size` window centered on `center` (output voxel `(i,j,k)`
    /// reads input `center - size/2 + (i,j,k)`). Errors if the window does
    /// not lie fully inside the volume.
    pub fn crop_centered(
        &self,
        center: (usize, usize, usize),
        size: (usize, usize, usize),
    ) -> Result<Volume3D<T>, VolumeError> {
        if size.0 == 0 || size.1 == 0 || size.2 == 0 {
            return Err(VolumeError::BadDims(size));
        }
        let origin = match crop_origin(self.dims, center, size) {
            Some(o) => o,
            None => {
                return Err(VolumeError::WindowOutOfBounds { center, size, dims: self.dims });
            }
        };
        let mut data = Vec::with_capacity(size.0 * size.1 * size.2);
        for k in 0..size.2 {
            for j in 0..size.1 {
                let row = self.index(origin.0, origin.1 + j, origin.2 + k);
                data.extend_from_slice(&self.data[row..row + size.0]);
            }
        }
        Volume3D::new(size, self.voxel_mm, data)
    }

    /// Writes `sub` back at the window `crop_centered` read it from.
    pub fn embed_centered(
        &mut self,
        sub: &Volume3D<T>,
        center: (usize, usize, usize),
    ) -> Result<(), VolumeError> {
        let size = sub.dims;
        let origin = match crop_origin(self.dims, center, size) {
            Some(o) => o,
            None => {
                return Err(VolumeError::WindowOutOfBounds { center, size, dims: self.dims });
            }
        };
        for k in 0..size.2 {
            for j in 0..size.1 {
                let dst = self.index(origin.0, origin.1 + j, origin.2 + k);
                let src = sub.index(0, j, k);
                self.data[dst..dst + size.0].copy_from_slice(&sub.data[src..src + size.0]);
            }
        }
        Ok(())
    }
}

/// Origin of the centered crop window, or `None` if it would truncate.
pub fn crop_origin(
    dims: (usize, usize, usize),
    center: (usize, usize, usize),
    size: (usize, usize, usize),
) -> Option<(usize, usize, usize)> {
    fn axis(dim: usize, center: usize, size: usize) -> Option<usize> {
        let half = size / 2;
        if center < half {
            return None;
        }
        let origin = center - half;
        if origin + size > dim {
            return None;
        }
        Some(origin)
    }
    Some((
        axis(dims.0, center.0, size.0)?,
        axis(dims.1, center.1, size.1)?,
        axis(dims.2, center.2, size.2)?,
    ))
}

/// 2D slice with the same x-fastest layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Slice2D<T: Scalar = f64> {
    dims: (usize, usize),
    data: Vec<T>,
}

impl<T: Scalar> Slice2D<T> {
    pub fn new(dims: (usize, usize), data: Vec<T>) -> Result<Self, VolumeError> {
        if dims.0 == 0 || dims.1 == 0 {
            return Err(VolumeError::BadDims((dims.0, dims.1, 1)));
        }
        if data.len() != dims.0 * dims.1 {
            return Err(VolumeError::LengthMismatch {
                dims: (dims.0, dims.1, 1),
                want: dims.0 * dims.1,
                got: data.len(),
            });
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: (usize, usize)) -> Self {
        Self::new(dims, vec![T::zero(); dims.0 * dims.1]).expect("valid dims")
    }

    pub fn dims(&self) -> (usize, usize) {
        self.dims
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> T {
        self.data[x + self.dims.0 * y]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: T) {
        self.data[x + self.dims.0 * y] = v;
    }
}

pub fn write_volume<T: Scalar>(vol: &Volume3D<T>, path: impl AsRef<Path>) -> Result<(), VolumeError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_volume_to(vol, &mut w)
}

pub fn write_volume_to<T: Scalar>(vol: &Volume3D<T>, w: &mut impl Write) -> Result<(), VolumeError> {
    let mut header = [0u8; SPV_HEADER_LEN];
    header[0..4].copy_from_slice(&SPV_MAGIC);
    header[4..8].copy_from_slice(&(vol.dims.0 as u32).to_le_bytes());
    header[8..12].copy_from_slice(&(vol.dims.1 as u32).to_le_bytes());
    header[12..16].copy_from_slice(&(vol.dims.2 as u32).to_le_bytes());
    header[16..24].copy_from_slice(&vol.voxel_mm.to_le_bytes());
    w.write_all(&header)?;
    let mut buf = Vec::with_capacity(vol.data.len() * 8);
    for v in &vol.data {
        buf.extend_from_slice(&v.as_f64().to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_volume<T: Scalar>(path: impl AsRef<Path>) -> Result<Volume3D<T>, VolumeError> {
    let mut r = BufReader::new(File::open(path)?);
    read_volume_from(&mut r)
}

pub fn read_volume_from<T: Scalar>(r: &mut impl Read) -> Result<Volume3D<T>, VolumeError> {
    let mut header = [0u8; SPV_HEADER_LEN];
    r.read_exact(&mut header)?;
    let magic: [u8; 4] = header[0..4].try_into().unwrap();
    if magic != SPV_MAGIC {
        return Err(VolumeError::BadMagic(magic));
    }
    let nx = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let ny = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let nz = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
    let voxel_mm = f64::from_le_bytes(header[16..24].try_into().unwrap());
    let want = nx
        .checked_mul(ny)
        .and_then(|v| v.checked_mul(nz))
        .ok_or(VolumeError::BadDims((nx, ny, nz)))?;
    let mut payload = vec![0u8; want * 8];
    r.read_exact(&mut payload)
        .map_err(|_| VolumeError::TruncatedPayload { want })?;
    let data: Vec<T> = payload
        .chunks_exact(8)
        .map(|c| T::cast(f64::from_le_bytes(c.try_into().unwrap())))
        .collect();
    Volume3D::new((nx, ny, nz), voxel_mm, data)
}
