use super::{Scalar, Tensor4};
use crate::error::{Error, Result};

/// Batch-norm epsilon used unless a model overrides it.
pub const DEFAULT_BN_EPS: f64 = 1e-5;

/// Per-channel inference batch-norm statistics and affine parameters.
///
/// The standard deviation is not stored; it is `sqrt(var + eps)`.
#[derive(Clone, Debug, PartialEq)]
pub struct BnParams<T> {
    pub(crate) mean: Vec<T>,
    pub(crate) var: Vec<T>,
    pub(crate) gamma: Vec<T>,
    pub(crate) beta: Vec<T>,
    pub(crate) eps: f64,
}

impl<T: Scalar> BnParams<T> {
    pub fn new(mean: Vec<T>, var: Vec<T>, gamma: Vec<T>, beta: Vec<T>, eps: f64) -> Result<Self> {
        let c = mean.len();
        if var.len() != c || gamma.len() != c || beta.len() != c {
            return Err(Error::shape(format!(
                "batch-norm vectors have lengths {}, {}, {}, {}",
                c,
                var.len(),
                gamma.len(),
                beta.len()
            )));
        }
        if !(eps > 0.0) {
            return Err(Error::Model(format!("batch-norm eps must be positive, got {eps}")));
        }
        if let Some(i) = var.iter().position(|v| !(v.as_f64() + eps > 0.0)) {
            return Err(Error::Model(format!(
                "batch-norm channel {i} has non-positive var + eps"
            )));
        }
        Ok(BnParams {
            mean,
            var,
            gamma,
            beta,
            eps,
        })
    }

    /// Fresh statistics: mean 0, variance 1, gamma 1, beta 0.
    pub fn identity(channels: usize, eps: f64) -> Self {
        BnParams {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            eps,
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[T] {
        &self.mean
    }

    pub fn var(&self) -> &[T] {
        &self.var
    }

    pub fn gamma(&self) -> &[T] {
        &self.gamma
    }

    pub fn beta(&self) -> &[T] {
        &self.beta
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    /// `sqrt(var_i + eps)` in `f64`.
    pub fn sigma(&self, i: usize) -> f64 {
        (self.var[i].as_f64() + self.eps).sqrt()
    }
}

/// Inference-time batch norm: `(x - mean) * gamma / sigma + beta` per channel.
pub fn batch_norm_infer<T: Scalar>(input: &Tensor4<T>, bn: &BnParams<T>) -> Result<Tensor4<T>> {
    let [n, c, _, _] = input.shape();
    if bn.channels() != c {
        return Err(Error::shape(format!(
            "batch norm has {} channels, input has {c}",
            bn.channels()
        )));
    }
    let mut out = input.clone();
    for ch in 0..c {
        let scale = T::of(bn.gamma[ch].as_f64() / bn.sigma(ch));
        let (mu, beta) = (bn.mean[ch], bn.beta[ch]);
        for b in 0..n {
            for v in out.plane_mut(b, ch) {
                *v = (*v - mu) * scale + beta;
            }
        }
    }
    Ok(out)
}

pub fn relu<T: Scalar>(input: &Tensor4<T>) -> Tensor4<T> {
    input.map(|v| v.max(T::zero()))
}

pub(crate) fn relu_in_place<T: Scalar>(t: &mut Tensor4<T>) {
    for v in t.data_mut() {
        *v = v.max(T::zero());
    }
}

/// Spatial mean per (batch, channel): `(n, c, h, w) -> (n, c, 1, 1)`.
pub fn global_avg_pool<T: Scalar>(input: &Tensor4<T>) -> Result<Tensor4<T>> {
    let [n, c, h, w] = input.shape();
    if h * w == 0 {
        return Err(Error::shape("global average pool over an empty plane"));
    }
    let denom = (h * w) as f64;
    Ok(Tensor4::from_fn([n, c, 1, 1], |b, ch, _, _| {
        T::of(input.plane(b, ch).iter().map(|v| v.as_f64()).sum::<f64>() / denom)
    }))
}

/// Fully-connected layer with a row-major `out x in` weight matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub(crate) weight: Vec<T>,
    pub(crate) bias: Vec<T>,
    in_features: usize,
    out_features: usize,
}

impl<T: Scalar> Linear<T> {
    pub fn new(weight: Vec<T>, bias: Vec<T>, in_features: usize, out_features: usize) -> Result<Self> {
        if weight.len() != in_features * out_features || bias.len() != out_features {
            return Err(Error::shape(format!(
                "linear {in_features}->{out_features} given {} weights and {} biases",
                weight.len(),
                bias.len()
            )));
        }
        Ok(Linear {
            weight,
            bias,
            in_features,
            out_features,
        })
    }

    pub fn in_features(&self) -> usize {
        self.in_features
    }

    pub fn out_features(&self) -> usize {
        self.out_features
    }

    pub fn weight(&self) -> &[T] {
        &self.weight
    }

    pub fn bias(&self) -> &[T] {
        &self.bias
    }
}

/// Applies `fc` to each batch element's flattened features; returns `(n, out, 1, 1)`.
pub fn fully_connected<T: Scalar>(input: &Tensor4<T>, fc: &Linear<T>) -> Result<Tensor4<T>> {
    let [n, c, h, w] = input.shape();
    let features = c * h * w;
    if features != fc.in_features {
        return Err(Error::shape(format!(
            "fully-connected layer expects {} features, input has {features}",
            fc.in_features
        )));
    }
    Ok(Tensor4::from_fn([n, fc.out_features, 1, 1], |b, o, _, _| {
        let x = &input.data()[b * features..(b + 1) * features];
        let row = &fc.weight[o * features..(o + 1) * features];
        let dot: f64 = x.iter().zip(row).map(|(a, w)| a.as_f64() * w.as_f64()).sum();
        T::of(dot + fc.bias[o].as_f64())
    }))
}
