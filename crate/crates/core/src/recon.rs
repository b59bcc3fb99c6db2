//! Ordered-subsets expectation-maximization reconstruction.

use thiserror::Error;

use crate::projector::{back_project, forward_project, ProjectionKind, ProjectionSet, ProjectorError};
use crate::scalar::Scalar;
use crate::voxel::Volume3D;

/// Division guard used by the OSEM update and the log-likelihood.
pub const EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ReconError {
    #[error("subset count {n_subsets} invalid for {n_angles} angles")]
    BadSubsets { n_angles: usize, n_subsets: usize },
    #[error("counts projection set required, got {0:?}")]
    NotCounts(ProjectionKind),
    #[error("iteration and init settings must be positive")]
    BadConfig,
    #[error("subset {0} has all-zero sensitivity")]
    ZeroSensitivity(usize),
    #[error(transparent)]
    Projector(#[from] ProjectorError),
}

#[derive(Debug, Clone, Copy)]
pub struct OsemConfig {
    pub n_iterations: usize,
    pub n_subsets: usize,
    pub init_value: f64,
    pub nonneg_floor: f64,
}

impl Default for OsemConfig {
    fn default() -> Self {
        Self { n_iterations: 8, n_subsets: 6, init_value: 1.0, nonneg_floor: EPS }
    }
}

/// Interleaved subsets: subset `s` holds the angle indices `i` with
/// `i mod n_subsets == s`. The union covers all angles and subsets are
/// pairwise disjoint.
pub fn partition_subsets(n_angles: usize, n_subsets: usize) -> Result<Vec<Vec<usize>>, ReconError> {
    if n_subsets == 0 || n_subsets > n_angles {
        return Err(ReconError::BadSubsets { n_angles, n_subsets });
    }
    let mut subsets = vec![Vec::new(); n_subsets];
    for i in 0..n_angles {
        subsets[i % n_subsets].push(i);
    }
    Ok(subsets)
}

/// Multiplicative OSEM: per subset `s`,
/// `x <- x * Bs(y_s / max(Fs x, eps)) / max(Bs 1, eps)`,
/// iterated `n_iterations` times over the subsets in ascending order.
/// Subset sensitivities are computed once and cached.
pub fn osem<T: Scalar>(
    counts: &ProjectionSet<T>,
    dims: (usize, usize, usize),
    cfg: &OsemConfig,
) -> Result<Volume3D<T>, ReconError> {
    osem_traced(counts, dims, cfg, |_, _| {})
}

/// [`osem`] with a hook observing the image after each full iteration.
pub fn osem_traced<T: Scalar>(
    counts: &ProjectionSet<T>,
    dims: (usize, usize, usize),
    cfg: &OsemConfig,
    mut on_iteration: impl FnMut(usize, &Volume3D<T>),
) -> Result<Volume3D<T>, ReconError> {
    if counts.kind() != ProjectionKind::Counts {
        return Err(ReconError::NotCounts(counts.kind()));
    }
    if cfg.n_iterations == 0 || !(cfg.init_value > 0.0) || !(cfg.nonneg_floor > 0.0) {
        return Err(ReconError::BadConfig);
    }
    let subsets = partition_subsets(counts.n_views(), cfg.n_subsets)?;
    let eps = T::cast(cfg.nonneg_floor);

    let mut subset_data = Vec::with_capacity(subsets.len());
    for (s, idx) in subsets.iter().enumerate() {
        if idx.is_empty() {
            return Err(ReconError::BadSubsets {
                n_angles: counts.n_views(),
                n_subsets: cfg.n_subsets,
            });
        }
        let sub_counts = counts.select_views(idx)?;
        let mut ones = sub_counts.clone();
        for b in ones.bins_mut() {
            *b = T::one();
        }
        let sens = back_project(&ones, dims)?;
        if sens.data().iter().all(|v| v.as_f64() <= cfg.nonneg_floor) {
            return Err(ReconError::ZeroSensitivity(s));
        }
        subset_data.push((sub_counts, sens));
    }

    let mut image = Volume3D::filled(dims, counts.bin_mm(), T::cast(cfg.init_value));
    for it in 0..cfg.n_iterations {
        for (sub_counts, sens) in &subset_data {
            let mut fwd = forward_project(&image, sub_counts.angles_deg())?;
            for (f, y) in fwd.bins_mut().iter_mut().zip(sub_counts.bins()) {
                *f = *y / (*f).max(eps);
            }
            let ratio = back_project(&fwd, dims)?;
            for ((x, r), s) in image
                .data_mut()
                .iter_mut()
                .zip(ratio.data())
                .zip(sens.data())
            {
                *x = *x * *r / (*s).max(eps);
            }
        }
        on_iteration(it, &image);
    }
    Ok(image)
}

/// Poisson log-likelihood up to the `ln y!` constant:
/// `sum_b [ y_b ln(max(yhat_b, eps)) - yhat_b ]` with
/// `yhat = forward_project(vol)` at the angles of `counts`.
pub fn poisson_loglik<T: Scalar>(
    counts: &ProjectionSet<T>,
    vol: &Volume3D<T>,
) -> Result<f64, ReconError> {
    let fwd = forward_project(vol, counts.angles_deg())?;
    if fwd.view_dims() != counts.view_dims() {
        return Err(ProjectorError::InconsistentDims {
            dims: vol.dims(),
            bins: counts.view_dims(),
            want: fwd.view_dims(),
        }
        .into());
    }
    let mut ll = 0.0;
    for (&y, &f) in counts.bins().iter().zip(fwd.bins()) {
        let y = y.as_f64();
        let f = f.as_f64();
        if y > 0.0 {
            ll += y * f.max(EPS).ln();
        }
        ll -= f;
    }
    Ok(ll)
}
