//! Convolution, upsampling, and ReLU kernels with hand-written backward
//! passes.
//!
//! Stride-1 3x3x3 convs dominate the runtime; they are organized as
//! per-row shifted axpy/dot operations over the contiguous x axis so the
//! inner loops vectorize. Parallelism is over output (forward, weight
//! grads) or input (input grads) channels: writes are disjoint and each
//! accumulation runs in a fixed order, so results do not depend on the
//! worker count.

use rayon::prelude::*;

use super::tensor::ChannelVolume;
use crate::scalar::Scalar;

/// `out[x] += wm*in[x-1] + w0*in[x] + wp*in[x+1]`, clipped at the ends.
#[inline]
fn add_shifted_row<T: Scalar>(out: &mut [T], inp: &[T], wm: T, w0: T, wp: T) {
    let n = out.len();
    for x in 0..n {
        out[x] += w0 * inp[x];
    }
    for x in 1..n {
        out[x] += wm * inp[x - 1];
    }
    for x in 0..n - 1 {
        out[x] += wp * inp[x + 1];
    }
}

/// `(sum g[x]*in[x-1], sum g[x]*in[x], sum g[x]*in[x+1])`, clipped.
#[inline]
fn shifted_dots<T: Scalar>(g: &[T], inp: &[T]) -> (T, T, T) {
    let n = g.len();
    let mut dm = T::zero();
    let mut d0 = T::zero();
    let mut dp = T::zero();
    for x in 0..n {
        d0 += g[x] * inp[x];
    }
    for x in 1..n {
        dm += g[x] * inp[x - 1];
    }
    for x in 0..n - 1 {
        dp += g[x] * inp[x + 1];
    }
    (dm, d0, dp)
}

#[inline]
fn w_index(oc: usize, ic: usize, in_ch: usize, dz: usize, dy: usize) -> usize {
    (oc * in_ch + ic) * 27 + (dz * 3 + dy) * 3
}

/// 3x3x3 convolution, stride 1, zero padding; weights laid out as
/// `(out_ch, in_ch, dz, dy, dx)` where tap `d` reads input offset `d - 1`.
pub fn conv3s1_forward<T: Scalar>(
    inp: &ChannelVolume<T>,
    w: &[T],
    bias: &[T],
    out_ch: usize,
    relu: bool,
) -> ChannelVolume<T> {
    let (nx, ny, nz) = inp.dims();
    let in_ch = inp.channels();
    debug_assert_eq!(w.len(), out_ch * in_ch * 27);
    let mut out = ChannelVolume::zeros(out_ch, inp.dims());
    let nvox = inp.voxels();
    out.data_mut()
        .par_chunks_mut(nvox)
        .enumerate()
        .for_each(|(oc, oc_data)| {
            for z in 0..nz {
                for y in 0..ny {
                    let orow_at = (z * ny + y) * nx;
                    oc_data[orow_at..orow_at + nx].fill(bias[oc]);
                    for ic in 0..in_ch {
                        let ich = inp.channel(ic);
                        for dz in 0..3usize {
                            let zz = z as isize + dz as isize - 1;
                            if zz < 0 || zz >= nz as isize {
                                continue;
                            }
                            for dy in 0..3usize {
                                let yy = y as isize + dy as isize - 1;
                                if yy < 0 || yy >= ny as isize {
                                    continue;
                                }
                                let irow_at = ((zz as usize) * ny + yy as usize) * nx;
                                let wk = w_index(oc, ic, in_ch, dz, dy);
                                add_shifted_row(
                                    &mut oc_data[orow_at..orow_at + nx],
                                    &ich[irow_at..irow_at + nx],
                                    w[wk],
                                    w[wk + 1],
                                    w[wk + 2],
                                );
                            }
                        }
                    }
                    if relu {
                        for o in &mut oc_data[orow_at..orow_at + nx] {
                            if *o < T::zero() {
                                *o = T::zero();
                            }
                        }
                    }
                }
            }
        });
    out
}

/// Backward of [`conv3s1_forward`] (ReLU already folded into `gout`).
/// Returns `(grad_input, grad_w, grad_bias)`.
pub fn conv3s1_backward<T: Scalar>(
    inp: &ChannelVolume<T>,
    gout: &ChannelVolume<T>,
    w: &[T],
    out_ch: usize,
) -> (ChannelVolume<T>, Vec<T>, Vec<T>) {
    let (nx, ny, nz) = inp.dims();
    let in_ch = inp.channels();
    let nvox = inp.voxels();

    let mut ginp = ChannelVolume::zeros(in_ch, inp.dims());
    ginp.data_mut()
        .par_chunks_mut(nvox)
        .enumerate()
        .for_each(|(ic, gic)| {
            for z in 0..nz {
                for y in 0..ny {
                    let grow_at = (z * ny + y) * nx;
                    for oc in 0..out_ch {
                        let gch = gout.channel(oc);
                        for dz in 0..3usize {
                            let zz = z as isize - (dz as isize - 1);
                            if zz < 0 || zz >= nz as isize {
                                continue;
                            }
                            for dy in 0..3usize {
                                let yy = y as isize - (dy as isize - 1);
                                if yy < 0 || yy >= ny as isize {
                                    continue;
                                }
                                let irow_at = ((zz as usize) * ny + yy as usize) * nx;
                                let wk = w_index(oc, ic, in_ch, dz, dy);
                                // Transposed taps: gin[x] += w[d]*g[x - (d-1)].
                                add_shifted_row(
                                    &mut gic[grow_at..grow_at + nx],
                                    &gch[irow_at..irow_at + nx],
                                    w[wk + 2],
                                    w[wk + 1],
                                    w[wk],
                                );
                            }
                        }
                    }
                }
            }
        });

    let per_oc: Vec<(Vec<T>, T)> = (0..out_ch)
        .into_par_iter()
        .map(|oc| {
            let gch = gout.channel(oc);
            let mut gw = vec![T::zero(); in_ch * 27];
            let mut gb = T::zero();
            for &g in gch {
                gb += g;
            }
            for z in 0..nz {
                for y in 0..ny {
                    let grow = &gch[(z * ny + y) * nx..(z * ny + y) * nx + nx];
                    for ic in 0..in_ch {
                        let ich = inp.channel(ic);
                        for dz in 0..3usize {
                            let zz = z as isize + dz as isize - 1;
                            if zz < 0 || zz >= nz as isize {
                                continue;
                            }
                            for dy in 0..3usize {
                                let yy = y as isize + dy as isize - 1;
                                if yy < 0 || yy >= ny as isize {
                                    continue;
                                }
                                let irow_at = ((zz as usize) * ny + yy as usize) * nx;
                                let (dm, d0, dp) = shifted_dots(grow, &ich[irow_at..irow_at + nx]);
                                let wk = ic * 27 + (dz * 3 + dy) * 3;
                                gw[wk] += dm;
                                gw[wk + 1] += d0;
                                gw[wk + 2] += dp;
                            }
                        }
                    }
                }
            }
            (gw, gb)
        })
        .collect();

    let mut grad_w = vec![T::zero(); out_ch * in_ch * 27];
    let mut grad_b = vec![T::zero(); out_ch];
    for (oc, (gw, gb)) in per_oc.into_iter().enumerate() {
        grad_w[oc * in_ch * 27..(oc + 1) * in_ch * 27].copy_from_slice(&gw);
        grad_b[oc] = gb;
    }
    (ginp, grad_w, grad_b)
}

/// 3x3x3 convolution, stride 2, zero padding; output dims are halved
/// (caller guarantees even input dims).
pub fn conv3s2_forward<T: Scalar>(
    inp: &ChannelVolume<T>,
    w: &[T],
    bias: &[T],
    out_ch: usize,
    relu: bool,
) -> ChannelVolume<T> {
    let (nx, ny, nz) = inp.dims();
    let in_ch = inp.channels();
    let (ox, oy, oz) = (nx / 2, ny / 2, nz / 2);
    let mut out = ChannelVolume::zeros(out_ch, (ox, oy, oz));
    let novox = ox * oy * oz;
    out.data_mut()
        .par_chunks_mut(novox)
        .enumerate()
        .for_each(|(oc, oc_data)| {
            for zo in 0..oz {
                for yo in 0..oy {
                    for xo in 0..ox {
                        let mut acc = bias[oc];
                        for ic in 0..in_ch {
                            let ich = inp.channel(ic);
                            for dz in 0..3usize {
                                let zz = 2 * zo as isize + dz as isize - 1;
                                if zz < 0 || zz >= nz as isize {
                                    continue;
                                }
                                for dy in 0..3usize {
                                    let yy = 2 * yo as isize + dy as isize - 1;
                                    if yy < 0 || yy >= ny as isize {
                                        continue;
                                    }
                                    let irow_at = ((zz as usize) * ny + yy as usize) * nx;
                                    let wk = w_index(oc, ic, in_ch, dz, dy);
                                    for dx in 0..3usize {
                                        let xx = 2 * xo as isize + dx as isize - 1;
                                        if xx < 0 || xx >= nx as isize {
                                            continue;
                                        }
                                        acc += w[wk + dx] * ich[irow_at + xx as usize];
                                    }
                                }
                            }
                        }
                        if relu && acc < T::zero() {
                            acc = T::zero();
                        }
                        oc_data[(zo * oy + yo) * ox + xo] = acc;
                    }
                }
            }
        });
    out
}

/// Backward of [`conv3s2_forward`].
pub fn conv3s2_backward<T: Scalar>(
    inp: &ChannelVolume<T>,
    gout: &ChannelVolume<T>,
    w: &[T],
    out_ch: usize,
) -> (ChannelVolume<T>, Vec<T>, Vec<T>) {
    let (nx, ny, nz) = inp.dims();
    let in_ch = inp.channels();
    let (ox, oy, oz) = gout.dims();
    let nvox = inp.voxels();

    let mut ginp = ChannelVolume::zeros(in_ch, inp.dims());
    ginp.data_mut()
        .par_chunks_mut(nvox)
        .enumerate()
        .for_each(|(ic, gic)| {
            for oc in 0..out_ch {
                let gch = gout.channel(oc);
                for zo in 0..oz {
                    for yo in 0..oy {
                        for xo in 0..ox {
                            let g = gch[(zo * oy + yo) * ox + xo];
                            if g == T::zero() {
                                continue;
                            }
                            for dz in 0..3usize {
                                let zz = 2 * zo as isize + dz as isize - 1;
                                if zz < 0 || zz >= nz as isize {
                                    continue;
                                }
                                for dy in 0..3usize {
                                    let yy = 2 * yo as isize + dy as isize - 1;
                                    if yy < 0 || yy >= ny as isize {
                                        continue;
                                    }
                                    let wk = w_index(oc, ic, in_ch, dz, dy);
                                    let irow_at = ((zz as usize) * ny + yy as usize) * nx;
                                    for dx in 0..3usize {
                                        let xx = 2 * xo as isize + dx as isize - 1;
                                        if xx < 0 || xx >= nx as isize {
                                            continue;
                                        }
                                        gic[irow_at + xx as usize] += w[wk + dx] * g;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });

    let per_oc: Vec<(Vec<T>, T)> = (0..out_ch)
        .into_par_iter()
        .map(|oc| {
            let gch = gout.channel(oc);
            let mut gw = vec![T::zero(); in_ch * 27];
            let mut gb = T::zero();
            for zo in 0..oz {
                for yo in 0..oy {
                    for xo in 0..ox {
                        let g = gch[(zo * oy + yo) * ox + xo];
                        gb += g;
                        if g == T::zero() {
                            continue;
                        }
                        for ic in 0..in_ch {
                            let ich = inp.channel(ic);
                            for dz in 0..3usize {
                                let zz = 2 * zo as isize + dz as isize - 1;
                                if zz < 0 || zz >= nz as isize {
                                    continue;
                                }
                                for dy in 0..3usize {
                                    let yy = 2 * yo as isize + dy as isize - 1;
                                    if yy < 0 || yy >= ny as isize {
                                        continue;
                                    }
                                    let irow_at = ((zz as usize) * ny + yy as usize) * nx;
                                    let wk = ic * 27 + (dz * 3 + dy) * 3;
                                    for dx in 0..3usize {
                                        let xx = 2 * xo as isize + dx as isize - 1;
                                        if xx < 0 || xx >= nx as isize {
                                            continue;
                                        }
                                        gw[wk + dx] += g * ich[irow_at + xx as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            (gw, gb)
        })
        .collect();

    let mut grad_w = vec![T::zero(); out_ch * in_ch * 27];
    let mut grad_b = vec![T::zero(); out_ch];
    for (oc, (gw, gb)) in per_oc.into_iter().enumerate() {
        grad_w[oc * in_ch * 27..(oc + 1) * in_ch * 27].copy_from_slice(&gw);
        grad_b[oc] = gb;
    }
    (ginp, grad_w, grad_b)
}

/// 1x1x1 convolution (pointwise channel mixing).
pub fn conv1_forward<T: Scalar>(
    inp: &ChannelVolume<T>,
    w: &[T],
    bias: &[T],
    out_ch: usize,
    relu: bool,
) -> ChannelVolume<T> {
    let in_ch = inp.channels();
    let nvox = inp.voxels();
    let mut out = ChannelVolume::zeros(out_ch, inp.dims());
    out.data_mut()
        .par_chunks_mut(nvox)
        .enumerate()
        .for_each(|(oc, oc_data)| {
            oc_data.fill(bias[oc]);
            for ic in 0..in_ch {
                let wv = w[oc * in_ch + ic];
                for (o, &i) in oc_data.iter_mut().zip(inp.channel(ic)) {
                    *o += wv * i;
                }
            }
            if relu {
                for o in oc_data.iter_mut() {
                    if *o < T::zero() {
                        *o = T::zero();
                    }
                }
            }
        });
    out
}

/// Backward of [`conv1_forward`].
pub fn conv1_backward<T: Scalar>(
    inp: &ChannelVolume<T>,
    gout: &ChannelVolume<T>,
    w: &[T],
    out_ch: usize,
) -> (ChannelVolume<T>, Vec<T>, Vec<T>) {
    let in_ch = inp.channels();
    let nvox = inp.voxels();
    let mut ginp = ChannelVolume::zeros(in_ch, inp.dims());
    ginp.data_mut()
        .par_chunks_mut(nvox)
        .enumerate()
        .for_each(|(ic, gic)| {
            for oc in 0..out_ch {
                let wv = w[oc * in_ch + ic];
                for (g, &go) in gic.iter_mut().zip(gout.channel(oc)) {
                    *g += wv * go;
                }
            }
        });
    let mut grad_w = vec![T::zero(); out_ch * in_ch];
    let mut grad_b = vec![T::zero(); out_ch];
    for oc in 0..out_ch {
        let gch = gout.channel(oc);
        grad_b[oc] = gch.iter().copied().sum();
        for ic in 0..in_ch {
            let mut acc = T::zero();
            for (&g, &i) in gch.iter().zip(inp.channel(ic)) {
                acc += g * i;
            }
            grad_w[oc * in_ch + ic] = acc;
        }
    }
    (ginp, grad_w, grad_b)
}

/// Nearest-neighbor x2 upsampling in x, y, z.
pub fn upsample2_forward<T: Scalar>(inp: &ChannelVolume<T>) -> ChannelVolume<T> {
    let (nx, ny, nz) = inp.dims();
    let (ox, oy, oz) = (2 * nx, 2 * ny, 2 * nz);
    let mut out = ChannelVolume::zeros(inp.channels(), (ox, oy, oz));
    let novox = ox * oy * oz;
    out.data_mut()
        .par_chunks_mut(novox)
        .enumerate()
        .for_each(|(c, oc_data)| {
            let ich = inp.channel(c);
            for z in 0..oz {
                for y in 0..oy {
                    let irow_at = ((z / 2) * ny + y / 2) * nx;
                    let orow_at = (z * oy + y) * ox;
                    for x in 0..ox {
                        oc_data[orow_at + x] = ich[irow_at + x / 2];
                    }
                }
            }
        });
    out
}

/// Backward of [`upsample2_forward`]: sums each 2x2x2 child block.
pub fn upsample2_backward<T: Scalar>(gout: &ChannelVolume<T>, in_dims: (usize, usize, usize)) -> ChannelVolume<T> {
    let (nx, ny, _) = in_dims;
    let (ox, oy, _) = gout.dims();
    let mut ginp = ChannelVolume::zeros(gout.channels(), in_dims);
    let nvox = ginp.voxels();
    ginp.data_mut()
        .par_chunks_mut(nvox)
        .enumerate()
        .for_each(|(c, gic)| {
            let gch = gout.channel(c);
            for z in 0..in_dims.2 {
                for y in 0..ny {
                    for x in 0..nx {
                        let mut acc = T::zero();
                        for a in 0..2 {
                            for b in 0..2 {
                                for d in 0..2 {
                                    acc += gch[((2 * z + a) * oy + 2 * y + b) * ox + 2 * x + d];
                                }
                            }
                        }
                        gic[(z * ny + y) * nx + x] = acc;
                    }
                }
            }
        });
    ginp
}

/// Masks the output gradient by the stored post-ReLU activation.
pub fn relu_mask<T: Scalar>(gout: &ChannelVolume<T>, post: &ChannelVolume<T>) -> ChannelVolume<T> {
    let mut g = gout.clone();
    for (gv, &p) in g.data_mut().iter_mut().zip(post.data()) {
        if p <= T::zero() {
            *gv = T::zero();
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;

    fn random_tensor(ch: usize, dims: (usize, usize, usize), seed: u64) -> ChannelVolume {
        let mut s = SeedStream::new(seed, &[]);
        let mut t = ChannelVolume::zeros(ch, dims);
        for v in t.data_mut() {
            *v = s.normal();
        }
        t
    }

    fn random_weights(n: usize, seed: u64) -> Vec<f64> {
        let mut s = SeedStream::new(seed, &[]);
        (0..n).map(|_| s.normal() * 0.3).collect()
    }

    /// Index-by-index convolution (the oracle for both strides).
    fn conv_oracle(
        inp: &ChannelVolume,
        w: &[f64],
        bias: &[f64],
        out_ch: usize,
        stride: usize,
        relu: bool,
    ) -> ChannelVolume {
        let (nx, ny, nz) = inp.dims();
        let in_ch = inp.channels();
        let od = (nx / stride, ny / stride, nz / stride);
        let mut out = ChannelVolume::zeros(out_ch, od);
        for oc in 0..out_ch {
            for zo in 0..od.2 {
                for yo in 0..od.1 {
                    for xo in 0..od.0 {
                        let mut acc = bias[oc];
                        for ic in 0..in_ch {
                            for dz in 0..3 {
                                for dy in 0..3 {
                                    for dx in 0..3 {
                                        let zz = (stride * zo + dz) as isize - 1;
                                        let yy = (stride * yo + dy) as isize - 1;
                                        let xx = (stride * xo + dx) as isize - 1;
                                        if zz < 0 || yy < 0 || xx < 0 {
                                            continue;
                                        }
                                        let (zz, yy, xx) = (zz as usize, yy as usize, xx as usize);
                                        if zz >= nz || yy >= ny || xx >= nx {
                                            continue;
                                        }
                                        acc += w[(oc * in_ch + ic) * 27 + (dz * 3 + dy) * 3 + dx]
                                            * inp.channel(ic)[(zz * ny + yy) * nx + xx];
                                    }
                                }
                            }
                        }
                        if relu {
                            acc = acc.max(0.0);
                        }
                        out.channel_mut(oc)[(zo * od.1 + yo) * od.0 + xo] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_s1_matches_oracle() {
        let inp = random_tensor(3, (6, 5, 4), 1);
        let w = random_weights(2 * 3 * 27, 2);
        let b = random_weights(2, 3);
        for relu in [false, true] {
            let got = conv3s1_forward(&inp, &w, &b, 2, relu);
            let want = conv_oracle(&inp, &w, &b, 2, 1, relu);
            for (g, w) in got.data().iter().zip(want.data()) {
                assert!((g - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_s2_matches_oracle() {
        let inp = random_tensor(2, (8, 6, 4), 4);
        let w = random_weights(3 * 2 * 27, 5);
        let b = random_weights(3, 6);
        let got = conv3s2_forward(&inp, &w, &b, 3, true);
        let want = conv_oracle(&inp, &w, &b, 3, 2, true);
        assert_eq!(got.dims(), (4, 3, 2));
        for (g, w) in got.data().iter().zip(want.data()) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn conv1_is_pointwise_mixing() {
        let inp = random_tensor(3, (4, 4, 4), 7);
        let w = random_weights(2 * 3, 8);
        let b = random_weights(2, 9);
        let out = conv1_forward(&inp, &w, &b, 2, false);
        for oc in 0..2 {
            for p in 0..inp.voxels() {
                let want: f64 = b[oc]
                    + (0..3).map(|ic| w[oc * 3 + ic] * inp.channel(ic)[p]).sum::<f64>();
                assert!((out.channel(oc)[p] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn upsample_reads_parent_cells_and_backward_sums_children() {
        let inp = random_tensor(2, (3, 2, 2), 10);
        let up = upsample2_forward(&inp);
        assert_eq!(up.dims(), (6, 4, 4));
        for c in 0..2 {
            for z in 0..4 {
                for y in 0..4 {
                    for x in 0..6 {
                        assert_eq!(
                            up.channel(c)[(z * 4 + y) * 6 + x],
                            inp.channel(c)[((z / 2) * 2 + y / 2) * 3 + x / 2]
                        );
                    }
                }
            }
        }
        let g = random_tensor(2, (6, 4, 4), 11);
        let gin = upsample2_backward(&g, (3, 2, 2));
        // Adjoint identity: <up(x), g> == <x, up^T(g)>.
        let lhs: f64 = up.data().iter().zip(g.data()).map(|(&a, &b)| a * b).sum();
        let rhs: f64 = inp.data().iter().zip(gin.data()).map(|(&a, &b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
