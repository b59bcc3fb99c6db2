//! Network parameters, forward execution, and reverse-mode backpropagation.

use std::collections::HashMap;

use super::arch::{Arch, LayerOp};
use super::layers::*;
use super::tensor::ChannelVolume;
use super::RestorerError;
use crate::rng::{tag, SeedStream};
use crate::scalar::Scalar;
use crate::voxel::Volume3D;

/// Weights and biases of one convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock<T: Scalar = f64> {
    pub w: Vec<T>,
    pub b: Vec<T>,
}

impl<T: Scalar> ParamBlock<T> {
    pub fn zeros_like(&self) -> ParamBlock<T> {
        ParamBlock { w: vec![T::zero(); self.w.len()], b: vec![T::zero(); self.b.len()] }
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.w.iter().chain(self.b.iter())
    }
}

/// All parameters of the restoration network plus its architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams<T: Scalar = f64> {
    arch: Arch,
    pub blocks: Vec<ParamBlock<T>>,
}

impl<T: Scalar> NetParams<T> {
    pub fn new(arch: Arch, blocks: Vec<ParamBlock<T>>) -> Result<Self, RestorerError> {
        arch.validate()?;
        let shapes = arch.conv_shapes();
        if shapes.len() != blocks.len() {
            return Err(RestorerError::Shape(format!(
                "{} parameter blocks for {} conv layers",
                blocks.len(),
                shapes.len()
            )));
        }
        for (i, ((o, c, k), blk)) in shapes.iter().zip(&blocks).enumerate() {
            if blk.w.len() != o * c * k * k * k || blk.b.len() != *o {
                return Err(RestorerError::Shape(format!("block {i} shape mismatch")));
            }
            if blk.iter().any(|v| !v.is_finite()) {
                return Err(RestorerError::Shape(format!("block {i} contains non-finite values")));
            }
        }
        Ok(Self { arch, blocks })
    }

    pub fn zeros(arch: Arch) -> Result<Self, RestorerError> {
        let blocks = arch
            .conv_shapes()
            .iter()
            .map(|&(o, c, k)| ParamBlock {
                w: vec![T::zero(); o * c * k * k * k],
                b: vec![T::zero(); o],
            })
            .collect();
        Self::new(arch, blocks)
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn n_params(&self) -> usize {
        self.blocks.iter().map(|b| b.w.len() + b.b.len()).sum()
    }

    pub fn zero_grads(&self) -> Vec<ParamBlock<T>> {
        self.blocks.iter().map(|b| b.zeros_like()).collect()
    }
}

/// Fan-in-scaled uniform init (`U(-a, a)` with `a = sqrt(6 / fan_in)`, so
/// the weight variance is `2 / fan_in`); biases zero. Deterministic in the
/// seed: weights are drawn block by block from one stream.
pub fn init_params<T: Scalar>(arch: &Arch, seed: u64) -> Result<NetParams<T>, RestorerError> {
    arch.validate()?;
    let mut stream = SeedStream::new(seed, &[tag::TRAIN_INIT]);
    let blocks = arch
        .conv_shapes()
        .iter()
        .map(|&(o, c, k)| {
            let fan_in = (c * k * k * k) as f64;
            let a = (6.0 / fan_in).sqrt();
            ParamBlock {
                w: (0..o * c * k * k * k)
                    .map(|_| T::cast(stream.uniform_in(-a, a)))
                    .collect(),
                b: vec![T::zero(); o],
            }
        })
        .collect();
    NetParams::new(arch.clone(), blocks)
}

/// Per-op activations recorded by the forward pass (post-ReLU for fused
/// convs). `outputs[i]` is the input of op `i + 1`.
pub struct Tape<T: Scalar = f64> {
    outputs: Vec<ChannelVolume<T>>,
}

fn run_ops<T: Scalar>(
    params: &NetParams<T>,
    input: &ChannelVolume<T>,
    keep_tape: bool,
) -> (ChannelVolume<T>, Option<Tape<T>>) {
    let mut cur = input.clone();
    let mut outputs = Vec::new();
    let mut slots: HashMap<usize, ChannelVolume<T>> = HashMap::new();
    let mut block = 0usize;
    for op in &params.arch.ops {
        let next = match *op {
            LayerOp::Conv { out_ch, kernel, stride, relu, .. } => {
                let pb = &params.blocks[block];
                block += 1;
                match (kernel, stride) {
                    (3, 1) => conv3s1_forward(&cur, &pb.w, &pb.b, out_ch, relu),
                    (3, 2) => conv3s2_forward(&cur, &pb.w, &pb.b, out_ch, relu),
                    (1, 1) => conv1_forward(&cur, &pb.w, &pb.b, out_ch, relu),
                    _ => unreachable!("validated arch"),
                }
            }
            LayerOp::Upsample2 => upsample2_forward(&cur),
            LayerOp::SaveSkip { slot } => {
                slots.insert(slot, cur.clone());
                cur.clone()
            }
            LayerOp::ConcatSkip { slot } => cur.concat(&slots[&slot]),
        };
        if keep_tape {
            outputs.push(next.clone());
        }
        cur = next;
    }
    (cur, keep_tape.then_some(Tape { outputs }))
}

fn check_input<T: Scalar>(params: &NetParams<T>, input: &Volume3D<T>) -> Result<(), RestorerError> {
    params.arch.check_dims(input.dims())?;
    Ok(())
}

/// Runs the network: `output = input + residual_branch(input)` when the
/// architecture carries the global residual. Deterministic; with all-zero
/// parameters the output equals the input exactly.
pub fn net_forward<T: Scalar>(
    params: &NetParams<T>,
    input: &Volume3D<T>,
) -> Result<Volume3D<T>, RestorerError> {
    check_input(params, input)?;
    let tin = ChannelVolume::from_volume(input);
    let (mut out, _) = run_ops(params, &tin, false);
    if params.arch.global_residual {
        out.add_assign(&tin);
    }
    Ok(out.into_volume(input.voxel_mm()))
}

/// Forward pass that records the tape needed by [`backward_from_tape`].
pub fn forward_with_tape<T: Scalar>(
    params: &NetParams<T>,
    input: &Volume3D<T>,
) -> Result<(Volume3D<T>, Tape<T>), RestorerError> {
    check_input(params, input)?;
    let tin = ChannelVolume::from_volume(input);
    let (mut out, tape) = run_ops(params, &tin, true);
    if params.arch.global_residual {
        out.add_assign(&tin);
    }
    Ok((out.into_volume(input.voxel_mm()), tape.expect("tape requested")))
}

/// Reverse pass: gradient of a scalar loss with respect to every parameter,
/// given the gradient with respect to the network output. The global
/// residual passes the output gradient straight into the deepest branch.
pub fn backward_from_tape<T: Scalar>(
    params: &NetParams<T>,
    input: &Volume3D<T>,
    tape: &Tape<T>,
    grad_output: &Volume3D<T>,
) -> Vec<ParamBlock<T>> {
    let ops = &params.arch.ops;
    debug_assert_eq!(tape.outputs.len(), ops.len());
    // Map each skip slot to the op whose output it saved.
    let mut slot_source: HashMap<usize, usize> = HashMap::new();
    for (i, op) in ops.iter().enumerate() {
        if let LayerOp::SaveSkip { slot } = *op {
            slot_source.insert(slot, i);
        }
    }

    let input_t = ChannelVolume::from_volume(input);
    let mut grads = params.zero_grads();
    let mut cur = ChannelVolume::from_volume(grad_output);
    let mut pending: HashMap<usize, ChannelVolume<T>> = HashMap::new();
    let mut block = params.blocks.len();

    for i in (0..ops.len()).rev() {
        if let Some(extra) = pending.remove(&i) {
            cur.add_assign(&extra);
        }
        let op_input = if i == 0 { &input_t } else { &tape.outputs[i - 1] };
        let op_output = &tape.outputs[i];
        match ops[i] {
            LayerOp::Conv { out_ch, kernel, stride, relu, .. } => {
                block -= 1;
                let masked;
                let g = if relu {
                    masked = relu_mask(&cur, op_output);
                    &masked
                } else {
                    &cur
                };
                let (ginp, gw, gb) = match (kernel, stride) {
                    (3, 1) => conv3s1_backward(op_input, g, &params.blocks[block].w, out_ch),
                    (3, 2) => conv3s2_backward(op_input, g, &params.blocks[block].w, out_ch),
                    (1, 1) => conv1_backward(op_input, g, &params.blocks[block].w, out_ch),
                    _ => unreachable!("validated arch"),
                };
                grads[block].w = gw;
                grads[block].b = gb;
                cur = ginp;
            }
            LayerOp::Upsample2 => {
                cur = upsample2_backward(&cur, op_input.dims());
            }
            LayerOp::SaveSkip { .. } => {
                // Identity; the concat contribution was already merged via
                // `pending` at the top of this iteration.
            }
            LayerOp::ConcatSkip { slot } => {
                let (to_branch, to_skip) = cur.split(op_input.channels());
                let src = slot_source[&slot];
                pending
                    .entry(src)
                    .and_modify(|p| p.add_assign(&to_skip))
                    .or_insert(to_skip);
                cur = to_branch;
            }
        }
    }
    grads
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_volume(dims: (usize, usize, usize), seed: u64) -> Volume3D {
        let mut s = SeedStream::new(seed, &[]);
        Volume3D::from_fn(dims, 1.0, |_, _, _| s.normal())
    }

    #[test]
    fn zero_params_make_the_identity() {
        let params = NetParams::<f64>::zeros(Arch::default_unet()).unwrap();
        let input = random_volume((12, 12, 12), 1);
        let out = net_forward(&params, &input).unwrap();
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn forward_is_deterministic() {
        let params = init_params::<f64>(&Arch::default_unet(), 7).unwrap();
        let input = random_volume((12, 12, 12), 2);
        let a = net_forward(&params, &input).unwrap();
        let b = net_forward(&params, &input).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn indivisible_dims_are_rejected() {
        let params = init_params::<f64>(&Arch::default_unet(), 7).unwrap();
        let input = random_volume((10, 10, 10), 3);
        assert!(net_forward(&params, &input).is_err());
    }

    #[test]
    fn single_conv_net_matches_direct_convolution() {
        // Degenerate architecture: one stride-1 conv, no residual.
        let arch = Arch {
            in_ch: 1,
            ops: vec![LayerOp::Conv { in_ch: 1, out_ch: 1, kernel: 3, stride: 1, relu: false }],
            global_residual: false,
        };
        let params = init_params::<f64>(&arch, 11).unwrap();
        let input = random_volume((4, 4, 4), 5);
        let out = net_forward(&params, &input).unwrap();
        let w = &params.blocks[0].w;
        let b = params.blocks[0].b[0];
        for z in 0..4usize {
            for y in 0..4usize {
                for x in 0..4usize {
                    let mut acc = b;
                    for dz in 0..3 {
                        for dy in 0..3 {
                            for dx in 0..3 {
                                let (zz, yy, xx) = (
                                    z as isize + dz - 1,
                                    y as isize + dy - 1,
                                    x as isize + dx - 1,
                                );
                                if zz < 0 || yy < 0 || xx < 0 || zz > 3 || yy > 3 || xx > 3 {
                                    continue;
                                }
                                acc += w[((dz * 3 + dy) * 3 + dx) as usize]
                                    * input.at(xx as usize, yy as usize, zz as usize);
                            }
                        }
                    }
                    assert!((out.at(x, y, z) - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn init_is_seeded_with_scaled_variance() {
        let arch = Arch::default_unet();
        let a = init_params::<f64>(&arch, 3).unwrap();
        let b = init_params::<f64>(&arch, 3).unwrap();
        assert_eq!(a, b);
        let c = init_params::<f64>(&arch, 4).unwrap();
        assert_ne!(a, c);

        // Variance of U(-a, a) is a^2/3 = 2/fan_in, checked on the largest
        // block within 20%.
        let shapes = arch.conv_shapes();
        let (idx, _) = a.blocks.iter().enumerate().max_by_key(|(_, b)| b.w.len()).unwrap();
        let (_, in_ch, k) = shapes[idx];
        let fan_in = (in_ch * k * k * k) as f64;
        let w = &a.blocks[idx].w;
        assert!(w.len() >= 10_000, "need >= 1e4 draws, got {}", w.len());
        let mean: f64 = w.iter().sum::<f64>() / w.len() as f64;
        let var: f64 = w.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w.len() as f64;
        let want = 2.0 / fan_in;
        assert!((var / want - 1.0).abs() < 0.2, "var {var} vs {want}");
        for blk in &a.blocks {
            assert!(blk.b.iter().all(|&v| v == 0.0));
        }
    }
}
