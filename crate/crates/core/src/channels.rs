//! Rotationally symmetric frequency channels: the channel operator `U`
//! and the per-sample shift applied to it.
//!
//! Each channel kernel is the inverse discrete Fourier transform of the
//! radial indicator of its passband, centered at the slice center
//! `(nx/2, ny/2)`. The indicators are symmetric under frequency negation,
//! so kernels are real; disjoint passbands make the rows of `U` mutually
//! orthogonal and every kernel has zero DC response. Shifts wrap
//! circularly, which makes shift equivariance exact.

use thiserror::Error;

use crate::scalar::Scalar;
use crate::voxel::Slice2D;

#[derive(Debug, Error)]
pub enum ChannelError {
    #[error("passband ({lo}, {hi}] invalid: bounds must satisfy 0 <= lo < hi <= 0.5 cycles/pixel")]
    BadPassband { lo: f64, hi: f64 },
    #[error("passbands ({0}, {1}] and ({2}, {3}] overlap")]
    Overlap(f64, f64, f64, f64),
    #[error("need at least one passband")]
    Empty,
    #[error("slice dims {got:?} do not match bank dims {want:?}")]
    DimMismatch { want: (usize, usize), got: (usize, usize) },
}

/// `n` octave passbands starting at `start` cycles/pixel.
pub fn octave_passbands(n: usize, start: f64) -> Vec<(f64, f64)> {
    (0..n)
        .map(|i| (start * (1u64 << i) as f64, start * (1u64 << (i + 1)) as f64))
        .collect()
}

/// Channel feature vector: one value per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelVector<T: Scalar = f64> {
    pub values: Vec<T>,
}

impl<T: Scalar> ChannelVector<T> {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// The `C x N_2D` channel operator, stored as C spatial kernels.
#[derive(Debug, Clone)]
pub struct ChannelBank<T: Scalar = f64> {
    slice_dims: (usize, usize),
    passbands: Vec<(f64, f64)>,
    kernels: Vec<Vec<T>>,
}

#[inline]
fn signed_freq(i: usize, n: usize) -> f64 {
    if i <= n / 2 {
        i as f64 / n as f64
    } else {
        (i as f64 - n as f64) / n as f64
    }
}

impl<T: Scalar> ChannelBank<T> {
    pub fn n_channels(&self) -> usize {
        self.kernels.len()
    }

    pub fn slice_dims(&self) -> (usize, usize) {
        self.slice_dims
    }

    pub fn passbands(&self) -> &[(f64, f64)] {
        &self.passbands
    }

    /// Kernel `c` as stored: centered at `(nx/2, ny/2)`.
    pub fn kernel(&self, c: usize) -> &[T] {
        &self.kernels[c]
    }

    /// Kernel `c` circularly shifted so its center sits at `shift`.
    pub fn shifted_kernel(&self, c: usize, shift: (i64, i64)) -> Vec<T> {
        let (nx, ny) = self.slice_dims;
        let (cx, cy) = ((nx / 2) as i64, (ny / 2) as i64);
        let k = &self.kernels[c];
        let mut out = vec![T::zero(); nx * ny];
        for y in 0..ny as i64 {
            let sy = (y - shift.1 + cy).rem_euclid(ny as i64) as usize;
            for x in 0..nx as i64 {
                let sx = (x - shift.0 + cx).rem_euclid(nx as i64) as usize;
                out[(x + y * nx as i64) as usize] = k[sx + sy * nx];
            }
        }
        out
    }
}

/// Builds the bank from radial passbands in cycles/pixel.
pub fn build_channels<T: Scalar>(
    slice_dims: (usize, usize),
    passbands: &[(f64, f64)],
) -> Result<ChannelBank<T>, ChannelError> {
    if passbands.is_empty() {
        return Err(ChannelError::Empty);
    }
    for &(lo, hi) in passbands {
        if !(lo >= 0.0 && lo < hi && hi <= 0.5) {
            return Err(ChannelError::BadPassband { lo, hi });
        }
    }
    let mut sorted = passbands.to_vec();
    sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    for w in sorted.windows(2) {
        // Half-open (lo, hi] bands: a shared endpoint is not an overlap.
        if w[1].0 < w[0].1 - 1e-15 {
            return Err(ChannelError::Overlap(w[0].0, w[0].1, w[1].0, w[1].1));
        }
    }

    let (nx, ny) = slice_dims;
    let (cx, cy) = ((nx / 2) as f64, (ny / 2) as f64);
    let norm = 1.0 / (nx * ny) as f64;
    let kernels = passbands
        .iter()
        .map(|&(lo, hi)| {
            let pts: Vec<(f64, f64)> = (0..nx)
                .flat_map(|u| (0..ny).map(move |v| (u, v)))
                .filter_map(|(u, v)| {
                    let fu = signed_freq(u, nx);
                    let fv = signed_freq(v, ny);
                    let rho = (fu * fu + fv * fv).sqrt();
                    (rho > lo && rho <= hi).then_some((fu, fv))
                })
                .collect();
            let mut k = vec![T::zero(); nx * ny];
            for y in 0..ny {
                for x in 0..nx {
                    let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                    let sum: f64 = pts
                        .iter()
                        .map(|&(fu, fv)| (std::f64::consts::TAU * (fu * dx + fv * dy)).cos())
                        .sum();
                    k[x + y * nx] = T::cast(norm * sum);
                }
            }
            k
        })
        .collect();
    Ok(ChannelBank { slice_dims, passbands: passbands.to_vec(), kernels })
}

/// Projects a slice onto the channels with the kernels re-centered at
/// `shift`: `value_c = <shifted kernel_c, slice>`. Linear in the slice.
pub fn channelize<T: Scalar>(
    slice: &Slice2D<T>,
    bank: &ChannelBank<T>,
    shift: (i64, i64),
) -> Result<ChannelVector<T>, ChannelError> {
    if slice.dims() != bank.slice_dims {
        return Err(ChannelError::DimMismatch { want: bank.slice_dims, got: slice.dims() });
    }
    let (nx, ny) = bank.slice_dims;
    let (cx, cy) = ((nx / 2) as i64, (ny / 2) as i64);
    let data = slice.data();
    let values = bank
        .kernels
        .iter()
        .map(|k| {
            let mut acc = T::zero();
            for y in 0..ny as i64 {
                let sy = (y - shift.1 + cy).rem_euclid(ny as i64) as usize;
                let krow = &k[sy * nx..(sy + 1) * nx];
                let srow = &data[(y as usize) * nx..(y as usize + 1) * nx];
                // Split the wrapped x indexing into two contiguous runs.
                let off = (cx - shift.0).rem_euclid(nx as i64) as usize;
                let head = nx - off;
                for x in 0..head {
                    acc += krow[x + off] * srow[x];
                }
                for x in head..nx {
                    acc += krow[x + off - nx] * srow[x];
                }
            }
            acc
        })
        .collect();
    Ok(ChannelVector { values })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bank48() -> ChannelBank {
        build_channels((48, 48), &octave_passbands(4, 1.0 / 64.0)).unwrap()
    }

    fn random_slice(dims: (usize, usize), seed: u64) -> Slice2D {
        let mut s = crate::rng::SeedStream::new(seed, &[]);
        let data = (0..dims.0 * dims.1).map(|_| s.normal()).collect();
        Slice2D::new(dims, data).unwrap()
    }

    #[test]
    fn octave_bands_match_expected_edges() {
        let b = octave_passbands(4, 1.0 / 64.0);
        assert_eq!(b, vec![
            (1.0 / 64.0, 1.0 / 32.0),
            (1.0 / 32.0, 1.0 / 16.0),
            (1.0 / 16.0, 1.0 / 8.0),
            (1.0 / 8.0, 1.0 / 4.0),
        ]);
    }

    #[test]
    fn kernels_are_pairwise_orthogonal() {
        let bank = bank48();
        for a in 0..4 {
            for b in 0..4 {
                let dot: f64 = bank
                    .kernel(a)
                    .iter()
                    .zip(bank.kernel(b))
                    .map(|(&x, &y)| x * y)
                    .sum();
                if a == b {
                    assert!(dot > 0.0);
                } else {
                    assert!(dot.abs() <= 1e-10, "channels {a},{b}: {dot}");
                }
            }
        }
    }

    #[test]
    fn constant_slice_maps_to_zero() {
        let bank = bank48();
        let slice = Slice2D::new((48, 48), vec![3.7; 48 * 48]).unwrap();
        let v = channelize(&slice, &bank, (24, 24)).unwrap();
        for c in v.values {
            assert!(c.abs() <= 1e-10);
        }
        // Zero slice maps to exactly zero.
        let v = channelize(&Slice2D::zeros((48, 48)), &bank, (10, 30)).unwrap();
        assert!(v.values.iter().all(|&c| c == 0.0));
    }

    #[test]
    fn frequency_response_is_the_band_indicator() {
        // Forward DFT of each kernel: magnitude 1 inside its own passband,
        // 0 outside, up to grid discretization.
        let bank = bank48();
        let n = 48;
        for c in 0..4 {
            let (lo, hi) = bank.passbands()[c];
            let k = bank.kernel(c);
            for u in 0..n {
                for v in 0..n {
                    let fu = signed_freq(u, n);
                    let fv = signed_freq(v, n);
                    let mut re = 0.0;
                    let mut im = 0.0;
                    for y in 0..n {
                        for x in 0..n {
                            let ph = -std::f64::consts::TAU * (fu * x as f64 + fv * y as f64);
                            re += k[x + y * n] * ph.cos();
                            im += k[x + y * n] * ph.sin();
                        }
                    }
                    let mag = (re * re + im * im).sqrt();
                    let rho = (fu * fu + fv * fv).sqrt();
                    let want = if rho > lo && rho <= hi { 1.0 } else { 0.0 };
                    assert!(
                        (mag - want).abs() < 1e-9,
                        "channel {c} at ({u},{v}): |F| = {mag}, want {want}"
                    );
                }
            }
        }
    }

    #[test]
    fn shift_equivariance_is_exact() {
        let bank = bank48();
        let slice = random_slice((48, 48), 3);
        let (tx, ty) = (7i64, -11i64);
        // Circularly shift the slice by (tx, ty).
        let mut shifted = Slice2D::zeros((48, 48));
        for y in 0..48i64 {
            for x in 0..48i64 {
                let sx = (x - tx).rem_euclid(48) as usize;
                let sy = (y - ty).rem_euclid(48) as usize;
                shifted.set(x as usize, y as usize, slice.at(sx, sy));
            }
        }
        let a = channelize(&shifted, &bank, (24, 24)).unwrap();
        let b = channelize(&slice, &bank, (24 - tx, 24 - ty)).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((x - y).abs() <= 1e-12, "{x} vs {y}");
        }
    }

    #[test]
    fn channelize_is_linear() {
        let bank = bank48();
        let f = random_slice((48, 48), 5);
        let g = random_slice((48, 48), 6);
        let (a, b) = (2.5, -1.25);
        let mix = Slice2D::new(
            (48, 48),
            f.data().iter().zip(g.data()).map(|(&x, &y)| a * x + b * y).collect(),
        )
        .unwrap();
        let vf = channelize(&f, &bank, (20, 28)).unwrap();
        let vg = channelize(&g, &bank, (20, 28)).unwrap();
        let vm = channelize(&mix, &bank, (20, 28)).unwrap();
        for c in 0..4 {
            let want = a * vf.values[c] + b * vg.values[c];
            assert!((vm.values[c] - want).abs() <= 1e-12 * want.abs().max(1.0));
        }
    }

    #[test]
    fn quarter_turn_about_shift_point_preserves_features() {
        let bank = bank48();
        let slice = random_slice((48, 48), 8);
        let (cx, cy) = (24i64, 24i64);
        // Rotate indices by 90 degrees about (cx, cy), modulo the grid.
        let mut rot = Slice2D::zeros((48, 48));
        for y in 0..48i64 {
            for x in 0..48i64 {
                let sx = (cx + (y - cy)).rem_euclid(48) as usize;
                let sy = (cy - (x - cx)).rem_euclid(48) as usize;
                rot.set(x as usize, y as usize, slice.at(sx, sy));
            }
        }
        let a = channelize(&slice, &bank, (cx, cy)).unwrap();
        let b = channelize(&rot, &bank, (cx, cy)).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((x - y).abs() <= 1e-10, "{x} vs {y}");
        }
    }

    #[test]
    fn invalid_passbands_are_rejected() {
        assert!(matches!(
            build_channels::<f64>((48, 48), &[(0.1, 0.6)]),
            Err(ChannelError::BadPassband { .. })
        ));
        assert!(matches!(
            build_channels::<f64>((48, 48), &[(0.3, 0.2)]),
            Err(ChannelError::BadPassband { .. })
        ));
        assert!(matches!(
            build_channels::<f64>((48, 48), &[(0.05, 0.2), (0.1, 0.3)]),
            Err(ChannelError::Overlap(..))
        ));
        assert!(matches!(build_channels::<f64>((48, 48), &[]), Err(ChannelError::Empty)));
        // Shared endpoints are fine.
        assert!(build_channels::<f64>((48, 48), &[(0.05, 0.1), (0.1, 0.2)]).is_ok());
    }

    #[test]
    fn dim_mismatch_is_rejected() {
        let bank = bank48();
        let slice = Slice2D::<f64>::zeros((32, 32));
        assert!(matches!(
            channelize(&slice, &bank, (0, 0)),
            Err(ChannelError::DimMismatch { .. })
        ));
    }
}
