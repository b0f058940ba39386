//! Structural re-parameterization: collapsing a trained multi-branch block into one 3x3 conv.
//!
//! Every branch is first turned into a conv with bias by folding its batch norm into the
//! kernel. The identity branch is materialized as a 1x1 conv with a (per-group) identity
//! kernel so it goes through the same folding. The two 1x1 kernels are then zero-padded to
//! 3x3 and the three kernels and three biases summed. All of the arithmetic runs in `f64`
//! and is cast to the model precision once at the end.

use crate::arch::{Layer, LayerKind, Mode, Model, WinoCache};
use crate::block::RepVggBlock;
use crate::error::{Error, Result};
use crate::tensor::{BnParams, ConvParams, Scalar, Tensor4};

/// A converted block: a 3x3 conv that always carries a bias.
#[derive(Clone, Debug)]
pub struct FusedConv<T> {
    conv: ConvParams<T>,
    wino: WinoCache<T>,
}

impl<T: Scalar> PartialEq for FusedConv<T> {
    fn eq(&self, other: &Self) -> bool {
        self.conv == other.conv
    }
}

impl<T: Scalar> FusedConv<T> {
    pub fn new(conv: ConvParams<T>) -> Result<Self> {
        if conv.kernel_size() != 3 || conv.padding() != 1 {
            return Err(Error::Model(
                "fused conv must be 3x3 with padding 1".to_string(),
            ));
        }
        if conv.bias().is_none() {
            return Err(Error::Model("fused conv must carry a bias".to_string()));
        }
        Ok(FusedConv {
            conv,
            wino: WinoCache::new(),
        })
    }

    pub fn conv(&self) -> &ConvParams<T> {
        &self.conv
    }

    pub fn into_conv(self) -> ConvParams<T> {
        self.conv
    }

    pub fn bias(&self) -> &[T] {
        self.conv.bias().expect("fused conv always has a bias")
    }

    pub fn num_params(&self) -> usize {
        self.conv.kernel().len() + self.conv.out_channels()
    }

    pub(crate) fn wino_cache(&self) -> &WinoCache<T> {
        &self.wino
    }
}

/// Folds `bn` into the bias-free conv kernel that precedes it.
///
/// Returns `(W', b')` with `W'[i] = gamma_i / sigma_i * W[i]` and
/// `b'_i = beta_i - mu_i * gamma_i / sigma_i`, so that `bn(x * W) == x * W' + b'`.
pub fn fuse_bn<T: Scalar>(conv: &ConvParams<T>, bn: &BnParams<T>) -> Result<(Tensor4<T>, Vec<T>)> {
    if conv.bias().is_some() {
        return Err(Error::Model(
            "batch-norm folding expects a conv without bias".to_string(),
        ));
    }
    let (kernel, bias) = fuse_bn_f64(&conv.kernel().cast::<f64>(), bn)?;
    Ok((kernel.cast(), bias.into_iter().map(T::of).collect()))
}

fn fuse_bn_f64<T: Scalar>(kernel: &Tensor4<f64>, bn: &BnParams<T>) -> Result<(Tensor4<f64>, Vec<f64>)> {
    let c_out = kernel.shape()[0];
    if bn.channels() != c_out {
        return Err(Error::shape(format!(
            "batch norm has {} channels, conv has {c_out} outputs",
            bn.channels()
        )));
    }
    let per = kernel.len() / c_out.max(1);
    let mut fused = kernel.clone();
    let mut bias = Vec::with_capacity(c_out);
    for i in 0..c_out {
        let t = bn.gamma()[i].as_f64() / bn.sigma(i);
        for v in &mut fused.data_mut()[i * per..(i + 1) * per] {
            *v *= t;
        }
        bias.push(bn.beta()[i].as_f64() - bn.mean()[i].as_f64() * t);
    }
    Ok((fused, bias))
}

/// Embeds a 1x1 kernel at the center of an otherwise zero 3x3 kernel.
pub fn pad_1x1_to_3x3<T: Scalar>(kernel: &Tensor4<T>) -> Result<Tensor4<T>> {
    let [c_out, c_in, kh, kw] = kernel.shape();
    if kh != 1 || kw != 1 {
        return Err(Error::shape(format!(
            "expected a 1x1 kernel, got {kh}x{kw}"
        )));
    }
    Ok(Tensor4::from_fn([c_out, c_in, 3, 3], |o, i, y, x| {
        if y == 1 && x == 1 {
            kernel.get(o, i, 0, 0)
        } else {
            T::zero()
        }
    }))
}

/// 1x1 kernel of shape `(channels, channels / groups, 1, 1)` whose grouped conv is the identity.
pub fn identity_to_1x1<T: Scalar>(channels: usize, groups: usize) -> Result<Tensor4<T>> {
    if groups == 0 || !channels.is_multiple_of(groups) {
        return Err(Error::shape(format!(
            "{channels} channels not divisible by {groups} groups"
        )));
    }
    let per_group = channels / groups;
    Ok(Tensor4::from_fn([channels, per_group, 1, 1], |o, i, _, _| {
        if i == o % per_group {
            T::one()
        } else {
            T::zero()
        }
    }))
}

/// Collapses a training-time block into a single 3x3 conv with bias.
pub fn convert_block<T: Scalar>(block: &RepVggBlock<T>) -> Result<FusedConv<T>> {
    block.validate()?;
    let (mut kernel, mut bias) = fuse_bn_f64(&block.conv3().kernel().cast::<f64>(), block.bn3())?;

    let mut add_branch = |k1: Tensor4<f64>, b: Vec<f64>| -> Result<()> {
        kernel.add_assign(&pad_1x1_to_3x3(&k1)?)?;
        for (acc, v) in bias.iter_mut().zip(b) {
            *acc += v;
        }
        Ok(())
    };

    let (k1, b1) = fuse_bn_f64(&block.conv1().kernel().cast::<f64>(), block.bn1())?;
    add_branch(k1, b1)?;
    if let Some(bn_id) = block.bn_id() {
        let eye = identity_to_1x1::<f64>(block.c_out(), block.groups())?;
        let (k0, b0) = fuse_bn_f64(&eye, bn_id)?;
        add_branch(k0, b0)?;
    }

    let conv = ConvParams::new(
        kernel.cast(),
        Some(bias.into_iter().map(T::of).collect()),
        block.stride(),
        1,
        block.groups(),
    )?;
    FusedConv::new(conv)
}

/// Converts every block of a train-mode model; the head is carried over unchanged.
///
/// A model that is already in deploy mode is returned as is.
pub fn convert_model<T: Scalar>(model: &Model<T>) -> Result<Model<T>> {
    if model.mode() == Mode::Deploy {
        return Ok(model.clone());
    }
    let layers = model
        .layers()
        .iter()
        .map(|layer| {
            let kind = match &layer.kind {
                LayerKind::Train(block) => LayerKind::Deploy(convert_block(block)?),
                LayerKind::Deploy(fused) => LayerKind::Deploy(fused.clone()),
            };
            Ok(Layer {
                index: layer.index,
                stage: layer.stage,
                kind,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Model::from_parts(model.spec().clone(), Mode::Deploy, layers, model.head().clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::block::{block_forward_deploy, block_forward_train};
    use crate::tensor::{batch_norm_infer, conv2d, DEFAULT_BN_EPS};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bn_with_sigma(mu: f64, sigma: f64, gamma: f64, beta: f64) -> BnParams<f64> {
        BnParams::new(vec![mu], vec![sigma * sigma - DEFAULT_BN_EPS], vec![gamma], vec![beta], DEFAULT_BN_EPS)
            .unwrap()
    }

    #[test]
    fn identity_bn_leaves_kernel_untouched() {
        let k = Tensor4::from_fn([2, 1, 3, 3], |o, _, y, x| (o * 9 + y * 3 + x) as f64 - 4.0);
        let conv = ConvParams::new(k.clone(), None, 1, 1, 1).unwrap();
        let bn = BnParams::new(vec![0.0; 2], vec![1.0 - DEFAULT_BN_EPS; 2], vec![1.0; 2], vec![0.0; 2], DEFAULT_BN_EPS)
            .unwrap();
        let (w, b) = fuse_bn(&conv, &bn).unwrap();
        assert!(w.max_abs_diff(&k).unwrap() < 1e-12);
        assert!(b.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn scalar_fusion_by_hand() {
        // W=2, gamma=3, sigma=2, mu=1, beta=0.5 -> W'=3, b'=-1
        let conv = ConvParams::new(Tensor4::new([1, 1, 1, 1], vec![2.0]).unwrap(), None, 1, 0, 1).unwrap();
        let (w, b) = fuse_bn(&conv, &bn_with_sigma(1.0, 2.0, 3.0, 0.5)).unwrap();
        assert!((w.data()[0] - 3.0).abs() < 1e-12);
        assert!((b[0] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn fusion_is_linear_in_affine_params() {
        let k = Tensor4::from_fn([3, 2, 1, 1], |o, i, _, _| (o as f64 - i as f64) * 0.75);
        let conv = ConvParams::new(k, None, 1, 0, 1).unwrap();
        let base = BnParams::new(vec![0.0; 3], vec![0.5, 1.5, 3.0], vec![0.5, -1.0, 2.0], vec![0.25, 1.0, -2.0], DEFAULT_BN_EPS)
            .unwrap();
        let doubled = BnParams::new(
            vec![0.0; 3],
            base.var().to_vec(),
            base.gamma().iter().map(|g| 2.0 * g).collect(),
            base.beta().iter().map(|b| 2.0 * b).collect(),
            DEFAULT_BN_EPS,
        )
        .unwrap();
        let (w1, b1) = fuse_bn(&conv, &base).unwrap();
        let (w2, b2) = fuse_bn(&conv, &doubled).unwrap();
        assert_eq!(w2, w1.scale(2.0));
        assert_eq!(b2, b1.iter().map(|b| 2.0 * b).collect::<Vec<_>>());
    }

    #[test]
    fn fused_conv_reproduces_conv_then_bn() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let block = RepVggBlock::<f32>::random(&mut rng, 6, 8, 1, 2).unwrap();
        let x = Tensor4::from_fn([2, 6, 9, 9], |_, _, _, _| rng.gen_range(-1.0f32..1.0));
        let want = batch_norm_infer(&conv2d(&x, block.conv3()).unwrap(), block.bn3()).unwrap();
        let (w, b) = fuse_bn(block.conv3(), block.bn3()).unwrap();
        let fused = ConvParams::new(w, Some(b), 1, 1, 2).unwrap();
        assert!(conv2d(&x, &fused).unwrap().max_abs_diff(&want).unwrap() <= 1e-5);
    }

    #[test]
    fn fuse_rejects_bias_and_channel_mismatch() {
        let conv = ConvParams::new(Tensor4::<f32>::zeros([2, 1, 1, 1]), Some(vec![0.0; 2]), 1, 0, 1).unwrap();
        assert!(fuse_bn(&conv, &BnParams::identity(2, DEFAULT_BN_EPS)).is_err());
        let conv = ConvParams::new(Tensor4::<f32>::zeros([2, 1, 1, 1]), None, 1, 0, 1).unwrap();
        assert!(matches!(
            fuse_bn(&conv, &BnParams::identity(3, DEFAULT_BN_EPS)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn padding_embeds_at_center() {
        let k = Tensor4::<f32>::new([1, 1, 1, 1], vec![2.5]).unwrap();
        let p = pad_1x1_to_3x3(&k).unwrap();
        for y in 0..3 {
            for x in 0..3 {
                assert_eq!(p.get(0, 0, y, x), if (y, x) == (1, 1) { 2.5 } else { 0.0 });
            }
        }
        let z = pad_1x1_to_3x3(&Tensor4::<f32>::zeros([4, 2, 1, 1])).unwrap();
        assert_eq!(z, Tensor4::zeros([4, 2, 3, 3]));
        assert!(pad_1x1_to_3x3(&Tensor4::<f32>::zeros([1, 1, 3, 3])).is_err());
    }

    #[test]
    fn padded_kernel_matches_pointwise_conv_for_both_strides() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let k1 = Tensor4::from_fn([4, 2, 1, 1], |_, _, _, _| rng.gen_range(-1.0f64..1.0));
        let k3 = pad_1x1_to_3x3(&k1).unwrap();
        let x = Tensor4::from_fn([1, 4, 7, 8], |_, _, _, _| rng.gen_range(-1.0f64..1.0));
        for stride in [1, 2] {
            let a = conv2d(&x, &ConvParams::new(k1.clone(), None, stride, 0, 2).unwrap()).unwrap();
            let b = conv2d(&x, &ConvParams::new(k3.clone(), None, stride, 1, 2).unwrap()).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn identity_kernels() {
        let k = identity_to_1x1::<f32>(2, 1).unwrap();
        assert_eq!(k.data(), &[1.0, 0.0, 0.0, 1.0]);

        let k = identity_to_1x1::<f32>(4, 2).unwrap();
        assert_eq!(k.shape(), [4, 2, 1, 1]);
        for o in 0..4 {
            assert_eq!(k.get(o, o % 2, 0, 0), 1.0);
            assert_eq!(k.get(o, 1 - o % 2, 0, 0), 0.0);
        }
        assert!(identity_to_1x1::<f32>(6, 4).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for g in [1, 2, 4] {
            let x = Tensor4::from_fn([2, 8, 5, 5], |_, _, _, _| rng.gen_range(-1.0f32..1.0));
            let p = ConvParams::new(identity_to_1x1(8, g).unwrap(), None, 1, 0, g).unwrap();
            assert_eq!(conv2d(&x, &p).unwrap(), x);
        }
    }

    #[test]
    fn identity_only_block_converts_to_padded_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut block = RepVggBlock::<f64>::random(&mut rng, 4, 4, 1, 2).unwrap();
        block.conv3.kernel_mut().data_mut().fill(0.0);
        block.conv1.kernel_mut().data_mut().fill(0.0);
        for bn in [&mut block.bn3, &mut block.bn1] {
            bn.mean.fill(0.0);
            bn.beta.fill(0.0);
        }
        block.bn_id = Some(BnParams::new(vec![0.0; 4], vec![1.0 - DEFAULT_BN_EPS; 4], vec![1.0; 4], vec![0.0; 4], DEFAULT_BN_EPS).unwrap());
        let fused = convert_block(&block).unwrap();
        let want = pad_1x1_to_3x3(&identity_to_1x1::<f64>(4, 2).unwrap()).unwrap();
        assert!(fused.conv().kernel().max_abs_diff(&want).unwrap() < 1e-12);
        assert!(fused.bias().iter().all(|b| b.abs() < 1e-12));

        let x = Tensor4::from_fn([1, 4, 6, 6], |_, _, _, _| rng.gen_range(-1.0..1.0));
        let y = block_forward_deploy(fused.conv(), &x).unwrap();
        assert!(y.max_abs_diff(&crate::tensor::relu(&x)).unwrap() < 1e-12);
        assert!(block_forward_train(&block, &x).unwrap().max_abs_diff(&y).unwrap() < 1e-12);
    }

    #[test]
    fn two_branch_block_sums_two_fusions() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let block = RepVggBlock::<f64>::random(&mut rng, 4, 6, 2, 2).unwrap();
        let fused = convert_block(&block).unwrap();
        let (w3, b3) = fuse_bn(block.conv3(), block.bn3()).unwrap();
        let (w1, b1) = fuse_bn(block.conv1(), block.bn1()).unwrap();
        let want = w3.add(&pad_1x1_to_3x3(&w1).unwrap()).unwrap();
        assert!(fused.conv().kernel().max_abs_diff(&want).unwrap() < 1e-12);
        for i in 0..6 {
            assert!((fused.bias()[i] - (b3[i] + b1[i])).abs() < 1e-12);
        }
        assert_eq!(fused.conv().stride(), 2);
        assert_eq!(fused.conv().groups(), 2);
    }

    #[test]
    fn conversion_commutes_with_output_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        // c_in != c_out so permuting outputs keeps the block valid without touching inputs.
        let block = RepVggBlock::<f64>::random(&mut rng, 3, 5, 1, 1).unwrap();
        let perm = [3, 0, 4, 1, 2];
        let permute_kernel = |k: &Tensor4<f64>| {
            let [_, c, h, w] = k.shape();
            Tensor4::from_fn([perm.len(), c, h, w], |o, i, y, x| k.get(perm[o], i, y, x))
        };
        let permute_vec = |v: &[f64]| perm.iter().map(|&p| v[p]).collect::<Vec<_>>();
        let permute_bn = |bn: &BnParams<f64>| {
            BnParams::new(permute_vec(bn.mean()), permute_vec(bn.var()), permute_vec(bn.gamma()), permute_vec(bn.beta()), bn.eps())
                .unwrap()
        };
        let permuted = RepVggBlock::new(
            ConvParams::new(permute_kernel(block.conv3().kernel()), None, 1, 1, 1).unwrap(),
            permute_bn(block.bn3()),
            ConvParams::new(permute_kernel(block.conv1().kernel()), None, 1, 0, 1).unwrap(),
            permute_bn(block.bn1()),
            None,
        )
        .unwrap();
        let a = convert_block(&permuted).unwrap();
        let b = convert_block(&block).unwrap();
        assert_eq!(a.conv().kernel(), &permute_kernel(b.conv().kernel()));
        assert_eq!(a.bias(), &permute_vec(b.bias())[..]);
    }
}
