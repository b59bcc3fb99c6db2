//! Hybrid training loss: squared-error fidelity plus the shifted-channel
//! feature term.
//!
//! Per sample:
//!
//! ```text
//! loss = ||truth - est||^2
//!      + lambda / (C * (s2 - s1 + 1))
//!        * sum_{s = s1..=s2} || (S U)(truth_s - est_s) ||^2
//! ```
//!
//! where `U` is the channel operator, `S` re-centers the kernels on the
//! sample's shift target (defect centroid, or LV center for defect-absent
//! samples), and `(s1, s2)` is the sample's slice range. The channel term
//! is normalized by `C * n_slices` so one default `lambda` works across
//! slice counts. Batch losses are means over the per-sample values.

use crate::channels::ChannelBank;
use crate::phantom::SampleMeta;
use crate::scalar::Scalar;
use crate::voxel::Volume3D;

use super::RestorerError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SliceRangeMode {
    /// Use each sample's `slice_range` from its meta record.
    PerSampleMeta,
    /// Fixed `(s1, s2)` for every sample.
    Fixed(usize, usize),
}

#[derive(Debug, Clone)]
pub struct LossConfig<T: Scalar = f64> {
    pub lambda: f64,
    pub slice_range_mode: SliceRangeMode,
    pub bank: ChannelBank<T>,
}

/// Loss value split into its two terms; `total = fidelity + channel`.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossParts {
    pub total: f64,
    pub fidelity: f64,
    pub channel: f64,
}

impl LossParts {
    pub fn add(&mut self, other: &LossParts) {
        self.total += other.total;
        self.fidelity += other.fidelity;
        self.channel += other.channel;
    }

    pub fn scale(&mut self, k: f64) {
        self.total *= k;
        self.fidelity *= k;
        self.channel *= k;
    }
}

fn slice_range<T: Scalar>(
    cfg: &LossConfig<T>,
    meta: &SampleMeta,
    nz: usize,
) -> Result<(usize, usize), RestorerError> {
    let (s1, s2) = match cfg.slice_range_mode {
        SliceRangeMode::PerSampleMeta => meta.slice_range,
        SliceRangeMode::Fixed(a, b) => (a, b),
    };
    if s1 > s2 || s2 >= nz {
        return Err(RestorerError::Loss(format!(
            "slice range ({s1}, {s2}) empty or outside nz = {nz}"
        )));
    }
    Ok((s1, s2))
}

fn shift_of(meta: &SampleMeta) -> (i64, i64) {
    let t = meta.shift_target_vox();
    (t[0].round() as i64, t[1].round() as i64)
}

/// Evaluates the per-sample loss and, when `grad` is given, accumulates
/// `d loss / d est` into it. Fusing the two keeps the channel projections
/// shared between the value and the gradient.
fn loss_eval<T: Scalar>(
    est: &Volume3D<T>,
    truth: &Volume3D<T>,
    meta: &SampleMeta,
    cfg: &LossConfig<T>,
    mut grad: Option<&mut Volume3D<T>>,
) -> Result<LossParts, RestorerError> {
    if est.dims() != truth.dims() {
        return Err(RestorerError::Loss(format!(
            "est dims {:?} vs truth dims {:?}",
            est.dims(),
            truth.dims()
        )));
    }
    let (nx, ny, nz) = est.dims();
    if cfg.bank.slice_dims() != (nx, ny) {
        return Err(RestorerError::Loss(format!(
            "channel bank is {:?}, slices are {:?}",
            cfg.bank.slice_dims(),
            (nx, ny)
        )));
    }
    let (s1, s2) = slice_range(cfg, meta, nz)?;

    let mut fidelity = 0.0;
    for (i, (&e, &t)) in est.data().iter().zip(truth.data()).enumerate() {
        let d = (t - e).as_f64();
        fidelity += d * d;
        if let Some(g) = grad.as_deref_mut() {
            // d/d_est of (t - e)^2.
            g.data_mut()[i] += T::cast(-2.0 * d);
        }
    }

    let mut channel = 0.0;
    if cfg.lambda > 0.0 {
        let c_count = cfg.bank.n_channels();
        let norm = cfg.lambda / (c_count as f64 * (s2 - s1 + 1) as f64);
        let shift = shift_of(meta);
        let kernels: Vec<Vec<T>> = (0..c_count)
            .map(|c| cfg.bank.shifted_kernel(c, shift))
            .collect();
        let plane = nx * ny;
        for s in s1..=s2 {
            let e_s = &est.data()[s * plane..(s + 1) * plane];
            let t_s = &truth.data()[s * plane..(s + 1) * plane];
            for k in &kernels {
                let mut proj = 0.0;
                for i in 0..plane {
                    proj += k[i].as_f64() * (t_s[i] - e_s[i]).as_f64();
                }
                channel += norm * proj * proj;
                if let Some(g) = grad.as_deref_mut() {
                    let coef = T::cast(-2.0 * norm * proj);
                    let g_s = &mut g.data_mut()[s * plane..(s + 1) * plane];
                    for i in 0..plane {
                        g_s[i] += coef * k[i];
                    }
                }
            }
        }
    }

    Ok(LossParts { total: fidelity + channel, fidelity, channel })
}

/// Per-sample loss value.
pub fn loss_eq1<T: Scalar>(
    est: &Volume3D<T>,
    truth: &Volume3D<T>,
    meta: &SampleMeta,
    cfg: &LossConfig<T>,
) -> Result<f64, RestorerError> {
    Ok(loss_parts(est, truth, meta, cfg)?.total)
}

/// Per-sample loss split into fidelity and channel terms.
pub fn loss_parts<T: Scalar>(
    est: &Volume3D<T>,
    truth: &Volume3D<T>,
    meta: &SampleMeta,
    cfg: &LossConfig<T>,
) -> Result<LossParts, RestorerError> {
    loss_eval(est, truth, meta, cfg, None)
}

/// Per-sample loss and its gradient with respect to `est`.
pub fn loss_with_grad<T: Scalar>(
    est: &Volume3D<T>,
    truth: &Volume3D<T>,
    meta: &SampleMeta,
    cfg: &LossConfig<T>,
) -> Result<(LossParts, Volume3D<T>), RestorerError> {
    let mut grad = Volume3D::zeros(est.dims(), est.voxel_mm());
    let parts = loss_eval(est, truth, meta, cfg, Some(&mut grad))?;
    Ok((parts, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channels::{build_channels, channelize, octave_passbands};
    use crate::rng::SeedStream;
    use crate::voxel::Slice2D;

    fn meta_at(x: f64, y: f64, z: f64, range: (usize, usize)) -> SampleMeta {
        SampleMeta {
            sample_id: 0,
            cluster_id: 0,
            defect_present: true,
            defect_centroid_vox: [x, y, z],
            lv_center_vox: [x, y, z],
            slice_range: range,
        }
    }

    fn cfg8(lambda: f64) -> LossConfig {
        LossConfig {
            lambda,
            slice_range_mode: SliceRangeMode::PerSampleMeta,
            bank: build_channels((8, 8), &[(0.1, 0.25), (0.25, 0.5)]).unwrap(),
        }
    }

    fn random_volume(dims: (usize, usize, usize), seed: u64) -> Volume3D {
        let mut s = SeedStream::new(seed, &[]);
        Volume3D::from_fn(dims, 1.0, |_, _, _| s.normal())
    }

    #[test]
    fn identical_volumes_have_zero_loss() {
        let v = random_volume((8, 8, 8), 1);
        let meta = meta_at(4.0, 4.0, 4.0, (2, 5));
        let parts = loss_parts(&v, &v, &meta, &cfg8(1.0)).unwrap();
        assert_eq!(parts.total, 0.0);
    }

    #[test]
    fn lambda_zero_reduces_to_sum_of_squares() {
        let est = random_volume((8, 8, 8), 2);
        let truth = random_volume((8, 8, 8), 3);
        let meta = meta_at(4.0, 4.0, 4.0, (0, 7));
        let parts = loss_parts(&est, &truth, &meta, &cfg8(0.0)).unwrap();
        let want: f64 = est
            .data()
            .iter()
            .zip(truth.data())
            .map(|(&e, &t)| (t - e) * (t - e))
            .sum();
        assert!((parts.total - want).abs() < 1e-12 * want);
        assert_eq!(parts.channel, 0.0);
    }

    #[test]
    fn single_slice_matches_channelize_composition() {
        // Hand-built 8x8 slice pair in a one-slice range; the oracle
        // composes channelize with the squared norm and the same
        // normalization.
        let cfg = cfg8(1.0);
        let est = random_volume((8, 8, 8), 4);
        let truth = random_volume((8, 8, 8), 5);
        let meta = meta_at(3.0, 5.0, 2.0, (2, 2));
        let parts = loss_parts(&est, &truth, &meta, &cfg).unwrap();

        let diff: Vec<f64> = est
            .slice_extract(2)
            .unwrap()
            .data()
            .iter()
            .zip(truth.slice_extract(2).unwrap().data())
            .map(|(&e, &t)| t - e)
            .collect();
        let dslice = Slice2D::new((8, 8), diff).unwrap();
        let v = channelize(&dslice, &cfg.bank, (3, 5)).unwrap();
        let want: f64 = v.values.iter().map(|&c| c * c).sum::<f64>() / (2.0 * 1.0);
        assert!((parts.channel - want).abs() <= 1e-12 * want.abs().max(1.0));
    }

    #[test]
    fn channel_term_ignores_constant_offsets() {
        let cfg = cfg8(1.0);
        let est = random_volume((8, 8, 8), 6);
        let truth = random_volume((8, 8, 8), 7);
        let meta = meta_at(4.0, 4.0, 4.0, (1, 6));
        let base = loss_parts(&est, &truth, &meta, &cfg).unwrap();

        let bump = |v: &Volume3D, k: f64| {
            Volume3D::new(v.dims(), 1.0, v.data().iter().map(|&x| x + k).collect()).unwrap()
        };
        let shifted = loss_parts(&bump(&est, 3.5), &bump(&truth, 3.5), &meta, &cfg).unwrap();
        assert!((base.channel - shifted.channel).abs() <= 1e-10 * base.channel.max(1.0));
    }

    #[test]
    fn loss_is_nonnegative_and_zero_only_at_equality() {
        let est = random_volume((8, 8, 8), 8);
        let mut truth = est.clone();
        let meta = meta_at(4.0, 4.0, 4.0, (0, 7));
        let cfg = cfg8(2.0);
        assert_eq!(loss_parts(&est, &truth, &meta, &cfg).unwrap().total, 0.0);
        truth.set(1, 2, 3, truth.at(1, 2, 3) + 0.1);
        assert!(loss_parts(&est, &truth, &meta, &cfg).unwrap().total > 0.0);
    }

    #[test]
    fn bad_ranges_and_dims_are_rejected() {
        let est = random_volume((8, 8, 8), 9);
        let truth = random_volume((8, 8, 4), 10);
        let meta = meta_at(4.0, 4.0, 4.0, (0, 7));
        assert!(loss_parts(&est, &truth, &meta, &cfg8(1.0)).is_err());

        let truth = random_volume((8, 8, 8), 11);
        let meta_bad = meta_at(4.0, 4.0, 4.0, (5, 3));
        assert!(loss_parts(&est, &truth, &meta_bad, &cfg8(1.0)).is_err());
        let meta_oob = meta_at(4.0, 4.0, 4.0, (0, 8));
        assert!(loss_parts(&est, &truth, &meta_oob, &cfg8(1.0)).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let cfg = cfg8(1.3);
        let est = random_volume((8, 8, 8), 12);
        let truth = random_volume((8, 8, 8), 13);
        let meta = meta_at(3.0, 4.0, 4.0, (2, 6));
        let (_, grad) = loss_with_grad(&est, &truth, &meta, &cfg).unwrap();
        let mut s = SeedStream::new(14, &[]);
        let h = 1e-5;
        for _ in 0..50 {
            let i = s.below(est.data().len() as u64) as usize;
            let mut ep = est.clone();
            ep.data_mut()[i] += h;
            let mut em = est.clone();
            em.data_mut()[i] -= h;
            let lp = loss_eq1(&ep, &truth, &meta, &cfg).unwrap();
            let lm = loss_eq1(&em, &truth, &meta, &cfg).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            let an = grad.data()[i];
            assert!(
                (fd - an).abs() <= 1e-6 * fd.abs().max(1.0),
                "voxel {i}: fd {fd} vs analytic {an}"
            );
        }
    }
}
