//! Parallel-beam forward/back projection, angle subsampling, and Poisson
//! count simulation.
//!
//! The projector rotates the volume about the z axis and sums along y.
//! Rotation is the mass-preserving (splatting) form of bilinear in-plane
//! interpolation, which collapses under the y sum to a linear footprint on
//! the detector: each voxel lands at a rotated transaxial coordinate and
//! splits its value linearly between the two adjacent bins. Backprojection
//! reads the same two weights, so the pair is an exact transpose.
//!
//! The detector spans the rotated grid diagonal ([`detector_bins`]), so no
//! in-grid activity ever leaves the field of view and every view of a
//! volume carries exactly the same total expected counts. The rotation
//! center is the voxel `(nx/2, ny/2)` and it maps to the bin `nu/2` at
//! every angle.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::rng::{tag, SeedStream};
use crate::scalar::Scalar;
use crate::voxel::{read_volume, write_volume, Volume3D, VolumeError};

#[derive(Debug, Error)]
pub enum ProjectorError {
    #[error("volume must be square in x,y; got dims {0:?}")]
    NonSquare((usize, usize, usize)),
    #[error("projection set has {bins:?} bins per view, dims {dims:?} require {want:?}")]
    InconsistentDims {
        dims: (usize, usize, usize),
        bins: (usize, usize),
        want: (usize, usize),
    },
    #[error("angle count {angles} does not match view count {views}")]
    AngleCountMismatch { angles: usize, views: usize },
    #[error("invalid angle selection: keep {n_keep} of {n_total}")]
    BadSelection { n_total: usize, n_keep: usize },
    #[error("expected projection kind {want:?}, got {got:?}")]
    KindMismatch { want: ProjectionKind, got: ProjectionKind },
    #[error("reference projection set has zero total activity")]
    ZeroActivityReference,
    #[error("counts-per-view target must be positive, got {0}")]
    BadTarget(f64),
    #[error("angle index {0} out of range")]
    AngleIndexOutOfRange(usize),
    #[error("sidecar angle file: {0}")]
    Sidecar(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjectionKind {
    Expected,
    Counts,
}

/// Angle-indexed stack of 2D projections, `u` fastest, then `v`, then angle.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionSet<T: Scalar = f64> {
    angles_deg: Vec<f64>,
    nu: usize,
    nv: usize,
    bins: Vec<T>,
    kind: ProjectionKind,
    bin_mm: f64,
}

impl<T: Scalar> ProjectionSet<T> {
    pub fn new(
        angles_deg: Vec<f64>,
        (nu, nv): (usize, usize),
        bins: Vec<T>,
        kind: ProjectionKind,
        bin_mm: f64,
    ) -> Result<Self, ProjectorError> {
        if bins.len() != nu * nv * angles_deg.len() {
            return Err(ProjectorError::AngleCountMismatch {
                angles: angles_deg.len(),
                views: if nu * nv == 0 { 0 } else { bins.len() / (nu * nv) },
            });
        }
        Ok(Self { angles_deg, nu, nv, bins, kind, bin_mm })
    }

    pub fn zeros(angles_deg: Vec<f64>, (nu, nv): (usize, usize), kind: ProjectionKind, bin_mm: f64) -> Self {
        let n = nu * nv * angles_deg.len();
        Self { angles_deg, nu, nv, bins: vec![T::zero(); n], kind, bin_mm }
    }

    pub fn n_views(&self) -> usize {
        self.angles_deg.len()
    }

    pub fn angles_deg(&self) -> &[f64] {
        &self.angles_deg
    }

    pub fn view_dims(&self) -> (usize, usize) {
        (self.nu, self.nv)
    }

    pub fn kind(&self) -> ProjectionKind {
        self.kind
    }

    pub fn bin_mm(&self) -> f64 {
        self.bin_mm
    }

    pub fn bins(&self) -> &[T] {
        &self.bins
    }

    pub fn bins_mut(&mut self) -> &mut [T] {
        &mut self.bins
    }

    pub fn view(&self, a: usize) -> &[T] {
        let n = self.nu * self.nv;
        &self.bins[a * n..(a + 1) * n]
    }

    pub fn view_mut(&mut self, a: usize) -> &mut [T] {
        let n = self.nu * self.nv;
        &mut self.bins[a * n..(a + 1) * n]
    }

    pub fn total(&self) -> f64 {
        self.bins.iter().map(|v| v.as_f64()).sum()
    }

    pub fn view_total(&self, a: usize) -> f64 {
        self.view(a).iter().map(|v| v.as_f64()).sum()
    }

    /// New set keeping only the views at `indices`, in the given order.
    pub fn select_views(&self, indices: &[usize]) -> Result<ProjectionSet<T>, ProjectorError> {
        let n = self.nu * self.nv;
        let mut angles = Vec::with_capacity(indices.len());
        let mut bins = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            if i >= self.n_views() {
                return Err(ProjectorError::AngleIndexOutOfRange(i));
            }
            angles.push(self.angles_deg[i]);
            bins.extend_from_slice(self.view(i));
        }
        ProjectionSet::new(angles, (self.nu, self.nv), bins, self.kind, self.bin_mm)
    }
}

/// Detector bin count covering the rotated in-plane diagonal: the smallest
/// even integer at least `nx * sqrt(2) + 2`.
pub fn detector_bins(nx: usize) -> usize {
    let d = (nx as f64 * std::f64::consts::SQRT_2).ceil() as usize + 2;
    d + (d % 2)
}

/// Uniformly spaced angles `i * orbit / n` for `i = 0..n`.
pub fn uniform_angles(n: usize, orbit_deg: f64) -> Vec<f64> {
    (0..n).map(|i| i as f64 * orbit_deg / n as f64).collect()
}

/// Evenly subsamples `n_keep` of `n_total` angle indices:
/// `floor(i * n_total / n_keep)`.
pub fn select_angles(n_total: usize, n_keep: usize) -> Result<Vec<usize>, ProjectorError> {
    if n_keep == 0 || n_keep > n_total {
        return Err(ProjectorError::BadSelection { n_total, n_keep });
    }
    Ok((0..n_keep).map(|i| i * n_total / n_keep).collect())
}

#[inline]
fn footprint(x: f64) -> (isize, f64) {
    let u0 = x.floor();
    (u0 as isize, x - u0)
}

pub fn forward_project<T: Scalar>(
    vol: &Volume3D<T>,
    angles_deg: &[f64],
) -> Result<ProjectionSet<T>, ProjectorError> {
    let (nx, ny, nz) = vol.dims();
    if nx != ny {
        return Err(ProjectorError::NonSquare(vol.dims()));
    }
    let nu = detector_bins(nx);
    let nv = nz;
    let rcx = (nx / 2) as f64;
    let rcy = (ny / 2) as f64;
    let cu = (nu / 2) as f64;

    let views: Vec<Vec<T>> = angles_deg
        .par_iter()
        .map(|&deg| {
            let th = deg.to_radians();
            let (s, c) = th.sin_cos();
            let mut view = vec![T::zero(); nu * nv];
            for z in 0..nz {
                let row_v = &mut view[z * nu..(z + 1) * nu];
                for y in 0..ny {
                    let sdy = s * (y as f64 - rcy);
                    let src = vol.index(0, y, z);
                    let row = &vol.data()[src..src + nx];
                    for (x, &val) in row.iter().enumerate() {
                        // Keep c*dx and s*dy separate so voxels on the
                        // rotation axes land on exact bin centers.
                        let xr = cu + c * (x as f64 - rcx) + sdy;
                        let (u0, w) = footprint(xr);
                        if u0 >= 0 && (u0 as usize) < nu {
                            row_v[u0 as usize] += val * T::cast(1.0 - w);
                        }
                        let u1 = u0 + 1;
                        if u1 >= 0 && (u1 as usize) < nu {
                            row_v[u1 as usize] += val * T::cast(w);
                        }
                    }
                }
            }
            view
        })
        .collect();

    let mut bins = Vec::with_capacity(nu * nv * angles_deg.len());
    for v in views {
        bins.extend_from_slice(&v);
    }
    ProjectionSet::new(angles_deg.to_vec(), (nu, nv), bins, ProjectionKind::Expected, vol.voxel_mm())
}

/// Exact adjoint of [`forward_project`] for volumes of shape `dims`.
pub fn back_project<T: Scalar>(
    proj: &ProjectionSet<T>,
    dims: (usize, usize, usize),
) -> Result<Volume3D<T>, ProjectorError> {
    let (nx, ny, nz) = dims;
    if nx != ny {
        return Err(ProjectorError::NonSquare(dims));
    }
    let nu = detector_bins(nx);
    if proj.nu != nu || proj.nv != nz {
        return Err(ProjectorError::InconsistentDims {
            dims,
            bins: (proj.nu, proj.nv),
            want: (nu, nz),
        });
    }
    let rcx = (nx / 2) as f64;
    let rcy = (ny / 2) as f64;
    let cu = (nu / 2) as f64;
    let trig: Vec<(f64, f64)> = proj.angles_deg.iter().map(|d| d.to_radians().sin_cos()).collect();

    let mut vol = Volume3D::zeros(dims, proj.bin_mm);
    let plane = nx * ny;
    vol.data_mut()
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(z, out_plane)| {
            for (a, &(s, c)) in trig.iter().enumerate() {
                let row_v = &proj.view(a)[z * nu..(z + 1) * nu];
                for y in 0..ny {
                    let sdy = s * (y as f64 - rcy);
                    let out_row = &mut out_plane[y * nx..(y + 1) * nx];
                    for (x, out) in out_row.iter_mut().enumerate() {
                        let xr = cu + c * (x as f64 - rcx) + sdy;
                        let (u0, w) = footprint(xr);
                        let mut acc = T::zero();
                        if u0 >= 0 && (u0 as usize) < nu {
                            acc += row_v[u0 as usize] * T::cast(1.0 - w);
                        }
                        let u1 = u0 + 1;
                        if u1 >= 0 && (u1 as usize) < nu {
                            acc += row_v[u1 as usize] * T::cast(w);
                        }
                        *out += acc;
                    }
                }
            }
        });
    Ok(vol)
}

/// Scales `expected` so the reference (full-view) set averages
/// `counts_per_view_target` expected counts per view, then replaces every
/// bin with a Poisson draw. The scale comes from the reference set, so all
/// protocols of one acquisition share the same per-view dwell. Each view
/// draws from its own seed substream; results do not depend on thread
/// count.
pub fn simulate_counts<T: Scalar>(
    expected: &ProjectionSet<T>,
    counts_per_view_target: f64,
    reference: &ProjectionSet<T>,
    seed: u64,
) -> Result<ProjectionSet<T>, ProjectorError> {
    if expected.kind != ProjectionKind::Expected {
        return Err(ProjectorError::KindMismatch {
            want: ProjectionKind::Expected,
            got: expected.kind,
        });
    }
    if !(counts_per_view_target > 0.0) {
        return Err(ProjectorError::BadTarget(counts_per_view_target));
    }
    let alpha = count_scale(reference, counts_per_view_target)?;
    let n = expected.nu * expected.nv;
    let mut out = expected.clone();
    out.kind = ProjectionKind::Counts;
    out.bins
        .par_chunks_mut(n)
        .enumerate()
        .for_each(|(view_idx, view)| {
            let mut stream = SeedStream::new(seed, &[tag::NOISE, view_idx as u64]);
            for b in view.iter_mut() {
                *b = T::cast(stream.poisson(alpha * b.as_f64()) as f64);
            }
        });
    Ok(out)
}

/// The global scale `alpha` that makes `reference` average
/// `counts_per_view_target` expected counts per view.
pub fn count_scale<T: Scalar>(
    reference: &ProjectionSet<T>,
    counts_per_view_target: f64,
) -> Result<f64, ProjectorError> {
    let total = reference.total();
    if total <= 0.0 {
        return Err(ProjectorError::ZeroActivityReference);
    }
    Ok(counts_per_view_target / (total / reference.n_views() as f64))
}

pub fn write_projections<T: Scalar>(
    proj: &ProjectionSet<T>,
    path: impl AsRef<Path>,
) -> Result<(), ProjectorError> {
    let path = path.as_ref();
    let as_vol = Volume3D::new(
        (proj.nu, proj.nv, proj.n_views()),
        proj.bin_mm,
        proj.bins.clone(),
    )?;
    write_volume(&as_vol, path)?;
    let mut w = BufWriter::new(File::create(path.with_extension("angles"))?);
    for a in &proj.angles_deg {
        writeln!(w, "{a}")?;
    }
    Ok(())
}

pub fn read_projections<T: Scalar>(
    path: impl AsRef<Path>,
    kind: ProjectionKind,
) -> Result<ProjectionSet<T>, ProjectorError> {
    let path = path.as_ref();
    let vol: Volume3D<T> = read_volume(path)?;
    let sidecar = path.with_extension("angles");
    let reader = BufReader::new(File::open(&sidecar)?);
    let mut angles = Vec::new();
    for line in reader.lines() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        angles.push(
            t.parse::<f64>()
                .map_err(|e| ProjectorError::Sidecar(format!("{}: {e}", sidecar.display())))?,
        );
    }
    let (nu, nv, na) = vol.dims();
    if angles.len() != na {
        return Err(ProjectorError::AngleCountMismatch { angles: angles.len(), views: na });
    }
    let bin_mm = vol.voxel_mm();
    ProjectionSet::new(angles, (nu, nv), vol.into_data(), kind, bin_mm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;

    fn random_volume(n: usize, seed: u64) -> Volume3D {
        let mut s = SeedStream::new(seed, &[]);
        Volume3D::from_fn((n, n, n), 1.0, |_, _, _| s.uniform())
    }

    /// Brute-force reimplementation: every voxel is rotated one at a time
    /// with its own trigonometry and binned by hand.
    fn forward_oracle(vol: &Volume3D, angles_deg: &[f64]) -> Vec<Vec<f64>> {
        let (nx, ny, nz) = vol.dims();
        let nu = detector_bins(nx);
        let mut views = Vec::new();
        for &deg in angles_deg {
            let mut view = vec![0.0; nu * nz];
            for z in 0..nz {
                for y in 0..ny {
                    for x in 0..nx {
                        let dx = x as f64 - (nx / 2) as f64;
                        let dy = y as f64 - (ny / 2) as f64;
                        let xr = (nu / 2) as f64
                            + dx * deg.to_radians().cos()
                            + dy * deg.to_radians().sin();
                        let u0 = xr.floor() as isize;
                        let w = xr - xr.floor();
                        let val = vol.at(x, y, z);
                        if u0 >= 0 && (u0 as usize) < nu {
                            view[z * nu + u0 as usize] += val * (1.0 - w);
                        }
                        if u0 + 1 >= 0 && ((u0 + 1) as usize) < nu {
                            view[z * nu + (u0 + 1) as usize] += val * w;
                        }
                    }
                }
            }
            views.push(view);
        }
        views
    }

    #[test]
    fn angle_zero_gives_column_sums() {
        let vol = random_volume(10, 1);
        let proj = forward_project(&vol, &[0.0]).unwrap();
        let (nu, _) = proj.view_dims();
        let offset = nu / 2 - 5;
        for z in 0..10 {
            for x in 0..10 {
                let colsum: f64 = (0..10).map(|y| vol.at(x, y, z)).sum();
                let got = proj.view(0)[z * nu + x + offset].to_owned();
                assert!((got - colsum).abs() < 1e-12, "x={x} z={z}");
            }
        }
    }

    #[test]
    fn center_delta_hits_one_bin_at_every_angle() {
        let mut vol = Volume3D::<f64>::zeros((16, 16, 16), 1.0);
        vol.set(8, 8, 8, 1.0);
        let angles: Vec<f64> = (0..12).map(|i| i as f64 * 15.0).collect();
        let proj = forward_project(&vol, &angles).unwrap();
        let (nu, _) = proj.view_dims();
        for a in 0..12 {
            let view = proj.view(a);
            for (i, &v) in view.iter().enumerate() {
                if i == 8 * nu + nu / 2 {
                    assert!((v - 1.0).abs() < 1e-14, "angle {a}");
                } else {
                    assert_eq!(v, 0.0, "angle {a} bin {i}");
                }
            }
        }
    }

    #[test]
    fn forward_matches_pointwise_oracle() {
        let vol = random_volume(16, 2);
        let angles: Vec<f64> = (0..8).map(|i| i as f64 * 22.5).collect();
        let proj = forward_project(&vol, &angles).unwrap();
        let oracle = forward_oracle(&vol, &angles);
        for a in 0..8 {
            for (got, want) in proj.view(a).iter().zip(&oracle[a]) {
                assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0));
            }
        }
    }

    #[test]
    fn forward_is_linear() {
        let va = random_volume(12, 3);
        let vb = random_volume(12, 4);
        let angles = uniform_angles(6, 180.0);
        let (a, b) = (1.7, -0.4);
        let mix = Volume3D::new(
            va.dims(),
            1.0,
            va.data()
                .iter()
                .zip(vb.data())
                .map(|(&x, &y)| a * x + b * y)
                .collect(),
        )
        .unwrap();
        let pa = forward_project(&va, &angles).unwrap();
        let pb = forward_project(&vb, &angles).unwrap();
        let pm = forward_project(&mix, &angles).unwrap();
        for i in 0..pm.bins().len() {
            let want = a * pa.bins()[i] + b * pb.bins()[i];
            assert!((pm.bins()[i] - want).abs() <= 1e-12 * want.abs().max(1.0));
        }
    }

    #[test]
    fn adjointness_on_random_pairs() {
        let angles = uniform_angles(7, 180.0);
        for seed in 0..10 {
            let x = random_volume(12, 100 + seed);
            let fx = forward_project(&x, &angles).unwrap();
            let mut s = SeedStream::new(200 + seed, &[]);
            let mut y = fx.clone();
            for b in y.bins.iter_mut() {
                *b = s.normal();
            }
            let bty = back_project(&y, x.dims()).unwrap();
            let lhs: f64 = fx.bins().iter().zip(y.bins()).map(|(&a, &b)| a * b).sum();
            let rhs: f64 = x.data().iter().zip(bty.data()).map(|(&a, &b)| a * b).sum();
            assert!(
                (lhs - rhs).abs() <= 1e-10 * lhs.abs().max(rhs.abs()).max(1e-30),
                "seed {seed}: {lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn backproject_zero_is_zero_and_smears_uniform() {
        let angles = vec![0.0];
        let nu = detector_bins(8);
        let zero = ProjectionSet::<f64>::zeros(angles.clone(), (nu, 8), ProjectionKind::Expected, 1.0);
        let vol = back_project(&zero, (8, 8, 8)).unwrap();
        assert!(vol.data().iter().all(|&v| v == 0.0));

        let ones = ProjectionSet::new(
            angles,
            (nu, 8),
            vec![1.0f64; nu * 8],
            ProjectionKind::Expected,
            1.0,
        )
        .unwrap();
        let vol = back_project(&ones, (8, 8, 8)).unwrap();
        // Single angle at 0 degrees: constant along y for each (x, z).
        for z in 0..8 {
            for x in 0..8 {
                let v0 = vol.at(x, 0, z);
                assert!((v0 - 1.0).abs() < 1e-12);
                for y in 1..8 {
                    assert_eq!(vol.at(x, y, z), v0);
                }
            }
        }
    }

    #[test]
    fn select_angles_examples() {
        assert_eq!(select_angles(30, 5).unwrap(), vec![0, 6, 12, 18, 24]);
        assert_eq!(select_angles(30, 30).unwrap(), (0..30).collect::<Vec<_>>());
        assert_eq!(select_angles(7, 3).unwrap(), vec![0, 2, 4]);
        assert!(select_angles(5, 6).is_err());
        assert!(select_angles(5, 0).is_err());
    }

    #[test]
    fn sparse_expected_counts_are_exact_fraction_of_full() {
        let vol = random_volume(16, 7);
        let full = forward_project(&vol, &uniform_angles(30, 180.0)).unwrap();
        let keep = select_angles(30, 5).unwrap();
        let sparse = full.select_views(&keep).unwrap();
        let alpha = count_scale(&full, 13_333.0).unwrap();
        let full_total = alpha * full.total();
        let sparse_total = alpha * sparse.total();
        assert!((full_total - 30.0 * 13_333.0).abs() <= 1e-9 * full_total);
        assert!((sparse_total / full_total - 5.0 / 30.0).abs() <= 1e-12);
    }

    #[test]
    fn counts_are_deterministic_and_zero_on_zero_bins() {
        let mut vol = random_volume(8, 9);
        // Zero a plane so some bins have zero expectation.
        for y in 0..8 {
            for x in 0..8 {
                vol.set(x, y, 0, 0.0);
            }
        }
        let expected = forward_project(&vol, &uniform_angles(4, 180.0)).unwrap();
        let a = simulate_counts(&expected, 500.0, &expected, 11).unwrap();
        let b = simulate_counts(&expected, 500.0, &expected, 11).unwrap();
        assert_eq!(a.bins(), b.bins());
        assert_eq!(a.kind(), ProjectionKind::Counts);
        for (e, c) in expected.bins().iter().zip(a.bins()) {
            if *e == 0.0 {
                assert_eq!(*c, 0.0);
            }
            assert_eq!(c.fract(), 0.0);
            assert!(*c >= 0.0);
        }
        let c = simulate_counts(&expected, 500.0, &expected, 12).unwrap();
        assert_ne!(a.bins(), c.bins());
    }

    #[test]
    fn zero_reference_is_rejected() {
        let zero = Volume3D::<f64>::zeros((8, 8, 8), 1.0);
        let expected = forward_project(&zero, &uniform_angles(4, 180.0)).unwrap();
        assert!(matches!(
            simulate_counts(&expected, 500.0, &expected, 1),
            Err(ProjectorError::ZeroActivityReference)
        ));
    }

    #[test]
    fn projection_roundtrip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let vol = random_volume(10, 13);
        let proj = forward_project(&vol, &uniform_angles(5, 180.0)).unwrap();
        let path = dir.path().join("p.spv");
        write_projections(&proj, &path).unwrap();
        let back: ProjectionSet = read_projections(&path, ProjectionKind::Expected).unwrap();
        assert_eq!(back, proj);
    }

    #[test]
    fn non_square_volume_is_rejected() {
        let vol = Volume3D::<f64>::filled((8, 6, 4), 1.0, 1.0);
        assert!(matches!(
            forward_project(&vol, &[0.0]),
            Err(ProjectorError::NonSquare(_))
        ));
    }
}
