//! The training-time RepVGG block: `relu(bn3(conv3x3(x)) + bn1(conv1x1(x)) + bn0(x))`.
//!
//! The identity branch exists only when input and output shapes match
//! (`c_in == c_out` and stride 1); otherwise the block has the two conv branches.

use rand::Rng;

use crate::arch::WinoCache;
use crate::error::{Error, Result};
use crate::winograd::WinogradKernel;
use crate::tensor::{batch_norm_infer, conv2d, relu, BnParams, ConvParams, Scalar, Tensor4};
use crate::tensor::relu_in_place;

/// Training-time multi-branch block. Branch convs are bias-free; all affine terms live in BN.
#[derive(Clone, Debug)]
pub struct RepVggBlock<T> {
    pub(crate) conv3: ConvParams<T>,
    pub(crate) bn3: BnParams<T>,
    pub(crate) conv1: ConvParams<T>,
    pub(crate) bn1: BnParams<T>,
    pub(crate) bn_id: Option<BnParams<T>>,
    // Winograd form of conv3; cleared whenever the kernel is handed out mutably.
    pub(crate) wino3: WinoCache<T>,
}

impl<T: Scalar> PartialEq for RepVggBlock<T> {
    fn eq(&self, other: &Self) -> bool {
        self.conv3 == other.conv3
            && self.bn3 == other.bn3
            && self.conv1 == other.conv1
            && self.bn1 == other.bn1
            && self.bn_id == other.bn_id
    }
}

impl<T: Scalar> RepVggBlock<T> {
    /// Assembles a block and checks its structural invariants.
    pub fn new(
        conv3: ConvParams<T>,
        bn3: BnParams<T>,
        conv1: ConvParams<T>,
        bn1: BnParams<T>,
        bn_id: Option<BnParams<T>>,
    ) -> Result<Self> {
        let block = RepVggBlock {
            conv3,
            bn3,
            conv1,
            bn1,
            bn_id,
            wino3: WinoCache::new(),
        };
        block.validate()?;
        Ok(block)
    }

    pub(crate) fn validate(&self) -> Result<()> {
        let (c3, c1) = (&self.conv3, &self.conv1);
        if c3.kernel_size() != 3 || c1.kernel_size() != 1 {
            return Err(Error::Model("block branches must be 3x3 and 1x1".into()));
        }
        if c3.padding() != 1 || c1.padding() != 0 {
            return Err(Error::Model(format!(
                "3x3 branch needs padding 1 and 1x1 branch padding 0, got {} and {}",
                c3.padding(),
                c1.padding()
            )));
        }
        if c3.stride() != c1.stride() {
            return Err(Error::Model(format!(
                "branch strides differ: {} vs {}",
                c3.stride(),
                c1.stride()
            )));
        }
        if c3.groups() != c1.groups() {
            return Err(Error::Model(format!(
                "branch groups differ: {} vs {}",
                c3.groups(),
                c1.groups()
            )));
        }
        if c3.kernel().shape()[..2] != c1.kernel().shape()[..2] {
            return Err(Error::Model(format!(
                "branch kernels {:?} and {:?} disagree on channels",
                c3.kernel().shape(),
                c1.kernel().shape()
            )));
        }
        if c3.bias().is_some() || c1.bias().is_some() {
            return Err(Error::Model("branch convs must not carry a bias".into()));
        }
        let c_out = self.c_out();
        if self.bn3.channels() != c_out || self.bn1.channels() != c_out {
            return Err(Error::Model(format!(
                "branch batch norms must have {c_out} channels"
            )));
        }
        let wants_identity = self.c_in() == c_out && self.stride() == 1;
        match (&self.bn_id, wants_identity) {
            (Some(bn), true) if bn.channels() != c_out => Err(Error::Model(format!(
                "identity batch norm must have {c_out} channels"
            ))),
            (Some(_), false) => Err(Error::Model(
                "identity branch requires c_in == c_out and stride 1".into(),
            )),
            (None, true) => Err(Error::Model(
                "block with matching shapes must have an identity branch".into(),
            )),
            _ => Ok(()),
        }
    }

    /// Random block for tests and equivalence checks: He-uniform kernels and non-trivial
    /// BN statistics on every branch.
    pub fn random(
        rng: &mut impl Rng,
        c_in: usize,
        c_out: usize,
        stride: usize,
        groups: usize,
    ) -> Result<Self> {
        if !c_in.is_multiple_of(groups) || !c_out.is_multiple_of(groups) {
            return Err(Error::Model(format!(
                "channels {c_in}->{c_out} not divisible by {groups} groups"
            )));
        }
        let cin_g = c_in / groups;
        let mut kernel = |k: usize| {
            let bound = (6.0 / (cin_g * k * k) as f64).sqrt();
            Tensor4::from_fn([c_out, cin_g, k, k], |_, _, _, _| {
                T::of(rng.gen_range(-bound..bound))
            })
        };
        let conv3 = ConvParams::new(kernel(3), None, stride, 1, groups)?;
        let conv1 = ConvParams::new(kernel(1), None, stride, 0, groups)?;
        let mut bn = |c: usize| {
            let mean = uniform_vec(rng, c, -0.5, 0.5);
            let var = uniform_vec(rng, c, 0.5, 2.0);
            let gamma = uniform_vec(rng, c, 0.5, 1.5);
            let beta = uniform_vec(rng, c, -0.5, 0.5);
            BnParams::new(mean, var, gamma, beta, crate::tensor::DEFAULT_BN_EPS)
        };
        let bn3 = bn(c_out)?;
        let bn1 = bn(c_out)?;
        let bn_id = if c_in == c_out && stride == 1 {
            Some(bn(c_out)?)
        } else {
            None
        };
        RepVggBlock::new(conv3, bn3, conv1, bn1, bn_id)
    }

    pub fn conv3(&self) -> &ConvParams<T> {
        &self.conv3
    }

    /// Winograd-domain form of the 3x3 branch, computed on first use and cached.
    pub fn conv3_winograd(&self) -> Result<&WinogradKernel<T>> {
        if let Some(k) = self.wino3.get() {
            return Ok(k);
        }
        let k = WinogradKernel::new(&self.conv3)?;
        Ok(self.wino3.get_or_init(|| k))
    }

    pub fn bn3(&self) -> &BnParams<T> {
        &self.bn3
    }

    pub fn conv1(&self) -> &ConvParams<T> {
        &self.conv1
    }

    pub fn bn1(&self) -> &BnParams<T> {
        &self.bn1
    }

    pub fn bn_id(&self) -> Option<&BnParams<T>> {
        self.bn_id.as_ref()
    }

    pub fn c_in(&self) -> usize {
        self.conv3.in_channels()
    }

    pub fn c_out(&self) -> usize {
        self.conv3.out_channels()
    }

    pub fn stride(&self) -> usize {
        self.conv3.stride()
    }

    pub fn groups(&self) -> usize {
        self.conv3.groups()
    }

    pub fn has_identity(&self) -> bool {
        self.bn_id.is_some()
    }

    /// Number of stored scalars: both kernels plus four vectors per batch norm.
    pub fn num_params(&self) -> usize {
        let bn = |b: &BnParams<T>| 4 * b.channels();
        self.conv3.kernel().len()
            + self.conv1.kernel().len()
            + bn(&self.bn3)
            + bn(&self.bn1)
            + self.bn_id.as_ref().map_or(0, bn)
    }
}

fn uniform_vec<T: Scalar>(rng: &mut impl Rng, len: usize, lo: f64, hi: f64) -> Vec<T> {
    (0..len).map(|_| T::of(rng.gen_range(lo..hi))).collect()
}

/// Multi-branch forward with inference-time batch norm.
pub fn block_forward_train<T: Scalar>(block: &RepVggBlock<T>, input: &Tensor4<T>) -> Result<Tensor4<T>> {
    if input.channels() != block.c_in() {
        return Err(Error::shape(format!(
            "block expects {} input channels, got {}",
            block.c_in(),
            input.channels()
        )));
    }
    let mut sum = batch_norm_infer(&conv2d(input, &block.conv3)?, &block.bn3)?;
    sum.add_assign(&batch_norm_infer(&conv2d(input, &block.conv1)?, &block.bn1)?)?;
    if let Some(bn) = &block.bn_id {
        sum.add_assign(&batch_norm_infer(input, bn)?)?;
    }
    relu_in_place(&mut sum);
    Ok(sum)
}

/// Plain forward of a converted block: `relu(conv3x3(x) + b)`.
pub fn block_forward_deploy<T: Scalar>(fused: &ConvParams<T>, input: &Tensor4<T>) -> Result<Tensor4<T>> {
    if fused.kernel_size() != 3 || fused.bias().is_none() {
        return Err(Error::Model("deploy block must be a 3x3 conv with bias".into()));
    }
    Ok(relu(&conv2d(input, fused)?))
}
