//! Multi-channel 3D activation tensor for the restoration network.

use crate::scalar::Scalar;
use crate::voxel::Volume3D;

/// Channel-major stack of 3D grids; within a channel the layout matches
/// [`Volume3D`] (x fastest).
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelVolume<T: Scalar = f64> {
    channels: usize,
    dims: (usize, usize, usize),
    data: Vec<T>,
}

impl<T: Scalar> ChannelVolume<T> {
    pub fn zeros(channels: usize, dims: (usize, usize, usize)) -> Self {
        Self {
            channels,
            dims,
            data: vec![T::zero(); channels * dims.0 * dims.1 * dims.2],
        }
    }

    pub fn from_volume(vol: &Volume3D<T>) -> Self {
        Self {
            channels: 1,
            dims: vol.dims(),
            data: vol.data().to_vec(),
        }
    }

    /// Single-channel tensor into a volume with the given voxel pitch.
    pub fn into_volume(self, voxel_mm: f64) -> Volume3D<T> {
        assert_eq!(self.channels, 1, "expected a single-channel tensor");
        Volume3D::new(self.dims, voxel_mm, self.data).expect("consistent dims")
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn voxels(&self) -> usize {
        self.dims.0 * self.dims.1 * self.dims.2
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.voxels();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Concatenates along the channel axis: `self` first, then `other`.
    pub fn concat(&self, other: &ChannelVolume<T>) -> ChannelVolume<T> {
        assert_eq!(self.dims, other.dims, "concat dims must match");
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        ChannelVolume { channels: self.channels + other.channels, dims: self.dims, data }
    }

    /// Splits the gradient of a concat back into the two branches.
    pub fn split(&self, first_channels: usize) -> (ChannelVolume<T>, ChannelVolume<T>) {
        assert!(first_channels <= self.channels);
        let n = self.voxels();
        let a = ChannelVolume {
            channels: first_channels,
            dims: self.dims,
            data: self.data[..first_channels * n].to_vec(),
        };
        let b = ChannelVolume {
            channels: self.channels - first_channels,
            dims: self.dims,
            data: self.data[first_channels * n..].to_vec(),
        };
        (a, b)
    }

    pub fn add_assign(&mut self, other: &ChannelVolume<T>) {
        assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }
}
