//! Reverse-mode training of train-mode models on small synthetic datasets.
//!
//! Batch norms normalize with batch statistics during training and fold those statistics into
//! their running estimates by an exponential moving average. Weight decay touches conv and
//! fully-connected kernels only.

use std::f64::consts::PI;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::arch::{forward, LayerKind, Mode, Model};
use crate::block::RepVggBlock;
use crate::error::{Error, Result};
use crate::tensor::{conv2d, conv2d_backward, BnParams, Scalar, Tensor4};

/// Running-statistics momentum: `running = (1 - m) * running + m * batch`.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Anneal the learning rate to zero along a half cosine over the epochs.
    pub cosine: bool,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.05,
            cosine: true,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 30,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Spec(format!("train config: {what}")));
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad("learning rate must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight decay must be finite and non-negative");
        }
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if self.batch_size < 2 {
            return bad("batch size must be at least 2 for batch statistics");
        }
        Ok(())
    }

    /// Learning rate used during epoch `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.cosine {
            0.5 * self.learning_rate * (1.0 + (PI * epoch as f64 / self.epochs as f64).cos())
        } else {
            self.learning_rate
        }
    }
}

/// Deterministic oriented-grating images, one orientation and colour mix per class.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyDataset<T> {
    pub train_inputs: Tensor4<T>,
    pub train_labels: Vec<usize>,
    pub val_inputs: Tensor4<T>,
    pub val_labels: Vec<usize>,
    pub num_classes: usize,
}

impl<T: Scalar> ToyDataset<T> {
    pub fn generate(
        num_classes: usize,
        train_per_class: usize,
        val_per_class: usize,
        size: usize,
        seed: u64,
    ) -> Result<Self> {
        if num_classes < 2 || train_per_class == 0 || val_per_class == 0 || size < 4 {
            return Err(Error::Spec(format!(
                "toy dataset needs >= 2 classes, samples in both splits and size >= 4 \
                 (got {num_classes} classes, {train_per_class}/{val_per_class} samples, size {size})"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (train_inputs, train_labels) = Self::split(&mut rng, num_classes, train_per_class, size);
        let (val_inputs, val_labels) = Self::split(&mut rng, num_classes, val_per_class, size);
        Ok(ToyDataset {
            train_inputs,
            train_labels,
            val_inputs,
            val_labels,
            num_classes,
        })
    }

    /// The default toy task: 4 classes of 3x32x32 images, 64 training and 16 validation
    /// images per class.
    pub fn default_toy(seed: u64) -> Self {
        Self::generate(4, 64, 16, 32, seed).expect("default toy parameters are valid")
    }

    fn split(rng: &mut ChaCha8Rng, k: usize, per_class: usize, size: usize) -> (Tensor4<T>, Vec<usize>) {
        let n = k * per_class;
        let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
        let plane = size * size;
        let mut data = Vec::with_capacity(n * 3 * plane);
        for &c in &labels {
            let theta = PI * c as f64 / k as f64;
            let freq = 2.0 + (c % 2) as f64;
            let phase = rng.gen_range(0.0..2.0 * PI);
            let contrast = rng.gen_range(0.8..1.2);
            for ch in 0..3 {
                let tint = 0.5 + 0.5 * (2.0 * PI * (c as f64 / k as f64 + ch as f64 / 3.0)).cos();
                for y in 0..size {
                    for x in 0..size {
                        let u = (x as f64 * theta.cos() + y as f64 * theta.sin()) / size as f64;
                        let v = contrast * tint * (2.0 * PI * freq * u + phase).sin()
                            + rng.gen_range(-0.8..0.8);
                        data.push(T::of(v));
                    }
                }
            }
        }
        (Tensor4::new([n, 3, size, size], data).expect("sized above"), labels)
    }
}

/// Learnable tensor categories, in the order they are visited within a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    Conv3Kernel,
    Conv1Kernel,
    Gamma,
    Beta,
    FcWeight,
    FcBias,
}

impl ParamKind {
    /// Whether weight decay applies.
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Conv3Kernel | ParamKind::Conv1Kernel | ParamKind::FcWeight)
    }
}

fn train_block<T: Scalar>(model: &Model<T>, i: usize) -> Result<&RepVggBlock<T>> {
    match &model.layers()[i].kind {
        LayerKind::Train(b) => Ok(b),
        LayerKind::Deploy(_) => Err(Error::Unsupported(
            "gradients need a train-mode model; this one is already converted".into(),
        )),
    }
}

fn require_train<T: Scalar>(model: &Model<T>) -> Result<()> {
    if model.mode() != Mode::Train {
        return Err(Error::Unsupported(
            "gradients need a train-mode model; this one is already converted".into(),
        ));
    }
    Ok(())
}

/// Every learnable tensor of a train-mode model, in a fixed order: per block the 3x3 kernel,
/// 1x1 kernel, (gamma, beta) of the 3x3, 1x1 and identity batch norms, then the head weight
/// and bias. Batch-norm running statistics are not included.
pub fn params<T: Scalar>(model: &Model<T>) -> Result<Vec<(ParamKind, &[T])>> {
    require_train(model)?;
    let mut out = Vec::new();
    for i in 0..model.layers().len() {
        let b = train_block(model, i)?;
        out.push((ParamKind::Conv3Kernel, b.conv3().kernel().data()));
        out.push((ParamKind::Conv1Kernel, b.conv1().kernel().data()));
        for bn in [Some(b.bn3()), Some(b.bn1()), b.bn_id()].into_iter().flatten() {
            out.push((ParamKind::Gamma, bn.gamma()));
            out.push((ParamKind::Beta, bn.beta()));
        }
    }
    out.push((ParamKind::FcWeight, model.head().weight()));
    out.push((ParamKind::FcBias, model.head().bias()));
    Ok(out)
}

/// Mutable counterpart of [`params`], same order.
pub fn params_mut<T: Scalar>(model: &mut Model<T>) -> Result<Vec<(ParamKind, &mut [T])>> {
    require_train(model)?;
    let mut out: Vec<(ParamKind, &mut [T])> = Vec::new();
    let (layers, head) = model.parts_mut();
    for layer in layers {
        let LayerKind::Train(b) = &mut layer.kind else {
            unreachable!("train-mode models hold only train-mode layers")
        };
        let RepVggBlock {
            conv3,
            bn3,
            conv1,
            bn1,
            bn_id,
            wino3,
        } = b;
        wino3.take();
        out.push((ParamKind::Conv3Kernel, conv3.kernel_mut().data_mut()));
        out.push((ParamKind::Conv1Kernel, conv1.kernel_mut().data_mut()));
        for bn in [Some(bn3), Some(bn1), bn_id.as_mut()].into_iter().flatten() {
            out.push((ParamKind::Gamma, &mut bn.gamma[..]));
            out.push((ParamKind::Beta, &mut bn.beta[..]));
        }
    }
    out.push((ParamKind::FcWeight, &mut head.weight[..]));
    out.push((ParamKind::FcBias, &mut head.bias[..]));
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockGrads<T> {
    pub conv3: Vec<T>,
    pub conv1: Vec<T>,
    pub gamma3: Vec<T>,
    pub beta3: Vec<T>,
    pub gamma1: Vec<T>,
    pub beta1: Vec<T>,
    pub identity: Option<(Vec<T>, Vec<T>)>,
}

/// Loss and its gradient with respect to every learnable scalar.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub loss: f64,
    pub blocks: Vec<BlockGrads<T>>,
    pub fc_weight: Vec<T>,
    pub fc_bias: Vec<T>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient tensors in the order of [`params`].
    pub fn slices(&self) -> Vec<(ParamKind, &[T])> {
        let mut out: Vec<(ParamKind, &[T])> = Vec::new();
        for b in &self.blocks {
            out.push((ParamKind::Conv3Kernel, &b.conv3));
            out.push((ParamKind::Conv1Kernel, &b.conv1));
            out.push((ParamKind::Gamma, &b.gamma3));
            out.push((ParamKind::Beta, &b.beta3));
            out.push((ParamKind::Gamma, &b.gamma1));
            out.push((ParamKind::Beta, &b.beta1));
            if let Some((g, be)) = &b.identity {
                out.push((ParamKind::Gamma, g));
                out.push((ParamKind::Beta, be));
            }
        }
        out.push((ParamKind::FcWeight, &self.fc_weight));
        out.push((ParamKind::FcBias, &self.fc_bias));
        out
    }

    /// Euclidean norm over all gradient entries.
    pub fn norm(&self) -> f64 {
        self.slices()
            .iter()
            .flat_map(|(_, s)| s.iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }
}

struct BnCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    mean: Vec<f64>,
    var: Vec<f64>,
    count: usize,
}

fn bn_train_forward<T: Scalar>(x: &Tensor4<T>, bn: &BnParams<T>) -> (Tensor4<T>, BnCache) {
    let [n, c, h, w] = x.shape();
    let hw = h * w;
    let count = n * hw;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let vals = || (0..n).flat_map(move |b| x.plane(b, ch).iter().map(|v| v.as_f64()));
        let m = vals().sum::<f64>() / count as f64;
        mean[ch] = m;
        var[ch] = vals().map(|v| (v - m) * (v - m)).sum::<f64>() / count as f64;
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + bn.eps()).sqrt()).collect();
    let mut xhat = vec![0.0; x.len()];
    let mut out = Tensor4::zeros(x.shape());
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            let (g, be) = (bn.gamma[ch].as_f64(), bn.beta[ch].as_f64());
            for (i, v) in x.plane(b, ch).iter().enumerate() {
                let xh = (v.as_f64() - mean[ch]) * inv_std[ch];
                xhat[off + i] = xh;
                out.data_mut()[off + i] = T::of(g * xh + be);
            }
        }
    }
    (
        out,
        BnCache {
            xhat,
            inv_std,
            mean,
            var,
            count,
        },
    )
}

/// Returns `(dx, dgamma, dbeta)`.
fn bn_train_backward<T: Scalar>(dy: &Tensor4<T>, cache: &BnCache, gamma: &[T]) -> (Tensor4<T>, Vec<T>, Vec<T>) {
    let [n, c, h, w] = dy.shape();
    let hw = h * w;
    let m = cache.count as f64;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            for (i, d) in dy.plane(b, ch).iter().enumerate() {
                dbeta[ch] += d.as_f64();
                dgamma[ch] += d.as_f64() * cache.xhat[off + i];
            }
        }
    }
    let mut dx = Tensor4::zeros(dy.shape());
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            let k = gamma[ch].as_f64() * cache.inv_std[ch];
            for (i, d) in dy.plane(b, ch).iter().enumerate() {
                let v = k * (d.as_f64() - dbeta[ch] / m - cache.xhat[off + i] * dgamma[ch] / m);
                dx.data_mut()[off + i] = T::of(v);
            }
        }
    }
    let cast = |v: Vec<f64>| v.into_iter().map(T::of).collect();
    (dx, cast(dgamma), cast(dbeta))
}

struct LayerCache<T> {
    input: Tensor4<T>,
    output: Tensor4<T>,
    bn3: BnCache,
    bn1: BnCache,
    bn_id: Option<BnCache>,
}

struct Trace<T> {
    layers: Vec<LayerCache<T>>,
    pooled: Vec<f64>,
    logits: Vec<f64>,
    batch: usize,
}

fn forward_train<T: Scalar>(model: &Model<T>, inputs: &Tensor4<T>) -> Result<Trace<T>> {
    require_train(model)?;
    let spec = model.spec();
    if inputs.channels() != spec.input_channels() {
        return Err(Error::shape(format!(
            "model expects {} input channels, got {}",
            spec.input_channels(),
            inputs.channels()
        )));
    }
    let min = spec.min_input_size();
    if inputs.height() < min || inputs.width() < min {
        return Err(Error::shape(format!(
            "input {}x{} is smaller than the minimum {min}x{min}",
            inputs.height(),
            inputs.width()
        )));
    }
    let mut layers = Vec::with_capacity(model.layers().len());
    let mut x = inputs.clone();
    for i in 0..model.layers().len() {
        let b = train_block(model, i)?;
        let (mut sum, bn3) = bn_train_forward(&conv2d(&x, b.conv3())?, b.bn3());
        let (y1, bn1) = bn_train_forward(&conv2d(&x, b.conv1())?, b.bn1());
        sum.add_assign(&y1)?;
        let bn_id = match b.bn_id() {
            Some(bn) => {
                let (yid, cache) = bn_train_forward(&x, bn);
                sum.add_assign(&yid)?;
                Some(cache)
            }
            None => None,
        };
        let output = sum.map(|v| if v > T::zero() { v } else { T::zero() });
        layers.push(LayerCache {
            input: std::mem::replace(&mut x, output.clone()),
            output,
            bn3,
            bn1,
            bn_id,
        });
    }
    let [n, c, h, w] = x.shape();
    let pooled: Vec<f64> = (0..n)
        .flat_map(|b| (0..c).map(move |ch| (b, ch)))
        .map(|(b, ch)| x.plane(b, ch).iter().map(|v| v.as_f64()).sum::<f64>() / (h * w) as f64)
        .collect();
    let head = model.head();
    let (fin, k) = (head.in_features(), head.out_features());
    let mut logits = vec![0.0; n * k];
    for b in 0..n {
        for o in 0..k {
            let row = &head.weight()[o * fin..(o + 1) * fin];
            logits[b * k + o] = head.bias()[o].as_f64()
                + row.iter().zip(&pooled[b * fin..(b + 1) * fin]).map(|(w, p)| w.as_f64() * p).sum::<f64>();
        }
    }
    Ok(Trace {
        layers,
        pooled,
        logits,
        batch: n,
    })
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
fn cross_entropy(logits: &[f64], labels: &[usize], k: usize) -> Result<(f64, Vec<f64>)> {
    let n = labels.len();
    if logits.len() != n * k {
        return Err(Error::shape(format!("{} labels for {} logit rows", n, logits.len() / k.max(1))));
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; n * k];
    for (b, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::shape(format!("label {label} out of range for {k} classes")));
        }
        let row = &logits[b * k..(b + 1) * k];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        loss += z.ln() + max - row[label];
        for o in 0..k {
            let p = (row[o] - max).exp() / z;
            grad[b * k + o] = (p - if o == label { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok((loss / n as f64, grad))
}

/// Training-mode loss (batch statistics in every batch norm). Does not touch running stats.
pub fn loss<T: Scalar>(model: &Model<T>, inputs: &Tensor4<T>, labels: &[usize]) -> Result<f64> {
    let trace = forward_train(model, inputs)?;
    Ok(cross_entropy(&trace.logits, labels, model.spec().num_classes())?.0)
}

/// Loss and gradients of a train-mode model on one batch.
pub fn backward<T: Scalar>(model: &Model<T>, inputs: &Tensor4<T>, labels: &[usize]) -> Result<Gradients<T>> {
    Ok(backward_traced(model, inputs, labels)?.0)
}

fn backward_traced<T: Scalar>(
    model: &Model<T>,
    inputs: &Tensor4<T>,
    labels: &[usize],
) -> Result<(Gradients<T>, Trace<T>)> {
    let trace = forward_train(model, inputs)?;
    let head = model.head();
    let (fin, k) = (head.in_features(), head.out_features());
    let (loss, dlogits) = cross_entropy(&trace.logits, labels, k)?;
    let n = trace.batch;

    let mut fc_weight = vec![0.0; k * fin];
    let mut fc_bias = vec![0.0; k];
    let mut dpooled = vec![0.0; n * fin];
    for b in 0..n {
        for o in 0..k {
            let d = dlogits[b * k + o];
            fc_bias[o] += d;
            for f in 0..fin {
                fc_weight[o * fin + f] += d * trace.pooled[b * fin + f];
                dpooled[b * fin + f] += d * head.weight()[o * fin + f].as_f64();
            }
        }
    }

    let last = &trace.layers.last().expect("models have at least one layer").output;
    let [_, c, h, w] = last.shape();
    let hw = (h * w) as f64;
    let mut dout = Tensor4::from_fn(last.shape(), |b, ch, _, _| T::of(dpooled[b * c + ch] / hw));

    let mut blocks = Vec::with_capacity(trace.layers.len());
    for (i, cache) in trace.layers.iter().enumerate().rev() {
        let blk = train_block(model, i)?;
        let ds = Tensor4::new(
            dout.shape(),
            dout.data()
                .iter()
                .zip(cache.output.data())
                .map(|(&d, &o)| if o > T::zero() { d } else { T::zero() })
                .collect(),
        )?;
        let (dy3, gamma3, beta3) = bn_train_backward(&ds, &cache.bn3, blk.bn3().gamma());
        let (dy1, gamma1, beta1) = bn_train_backward(&ds, &cache.bn1, blk.bn1().gamma());
        let g3 = conv2d_backward(&cache.input, blk.conv3(), &dy3)?;
        let g1 = conv2d_backward(&cache.input, blk.conv1(), &dy1)?;
        let mut din = g3.input;
        din.add_assign(&g1.input)?;
        let identity = match (&cache.bn_id, blk.bn_id()) {
            (Some(c), Some(bn)) => {
                let (dx, g, be) = bn_train_backward(&ds, c, bn.gamma());
                din.add_assign(&dx)?;
                Some((g, be))
            }
            _ => None,
        };
        blocks.push(BlockGrads {
            conv3: g3.kernel.into_data(),
            conv1: g1.kernel.into_data(),
            gamma3,
            beta3,
            gamma1,
            beta1,
            identity,
        });
        dout = din;
    }
    blocks.reverse();
    let cast = |v: Vec<f64>| v.into_iter().map(T::of).collect();
    Ok((
        Gradients {
            loss,
            blocks,
            fc_weight: cast(fc_weight),
            fc_bias: cast(fc_bias),
        },
        trace,
    ))
}

fn update_running_stats<T: Scalar>(model: &mut Model<T>, trace: &Trace<T>, momentum: f64) {
    let fold = |bn: &mut BnParams<T>, c: &BnCache| {
        let unbias = if c.count > 1 { c.count as f64 / (c.count - 1) as f64 } else { 1.0 };
        for ch in 0..bn.channels() {
            let m = bn.mean[ch].as_f64();
            let v = bn.var[ch].as_f64();
            bn.mean[ch] = T::of((1.0 - momentum) * m + momentum * c.mean[ch]);
            bn.var[ch] = T::of((1.0 - momentum) * v + momentum * c.var[ch] * unbias);
        }
    };
    let (layers, _) = model.parts_mut();
    for (layer, cache) in layers.iter_mut().zip(&trace.layers) {
        if let LayerKind::Train(b) = &mut layer.kind {
            fold(&mut b.bn3, &cache.bn3);
            fold(&mut b.bn1, &cache.bn1);
            if let (Some(bn), Some(c)) = (b.bn_id.as_mut(), &cache.bn_id) {
                fold(bn, c);
            }
        }
    }
}

/// Overwrites every batch norm's running statistics with the statistics of `inputs`, as if
/// the model had been trained on data distributed like them. Learnable parameters are
/// untouched.
pub fn calibrate_bn<T: Scalar>(model: &mut Model<T>, inputs: &Tensor4<T>) -> Result<()> {
    let trace = forward_train(model, inputs)?;
    update_running_stats(model, &trace, 1.0);
    Ok(())
}

/// One row of the loss curve. Epoch 0 describes the untrained model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossCurve {
    pub points: Vec<CurvePoint>,
}

impl LossCurve {
    pub const CSV_HEADER: &'static str = "epoch,lr,trainLoss,valAcc";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for p in &self.points {
            s.push_str(&format!("{},{},{},{}\n", p.epoch, p.lr, p.train_loss, p.val_acc));
        }
        s
    }

    pub fn initial_loss(&self) -> Option<f64> {
        self.points.first().map(|p| p.train_loss)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.points.last().map(|p| p.train_loss)
    }
}

pub struct TrainOutcome<T> {
    pub model: Model<T>,
    pub curve: LossCurve,
}

pub enum TrainError<T> {
    Invalid(Error),
    /// The loss became non-finite during `epoch`; `model` is the state after the last epoch
    /// that finished with finite losses.
    Diverged {
        epoch: usize,
        model: Box<Model<T>>,
        curve: LossCurve,
    },
}

impl<T> fmt::Debug for TrainError<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl<T> fmt::Display for TrainError<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::Invalid(e) => write!(f, "{e}"),
            TrainError::Diverged { epoch, .. } => write!(f, "training diverged in epoch {epoch}: loss is not finite"),
        }
    }
}

impl<T> std::error::Error for TrainError<T> {}

impl<T> From<Error> for TrainError<T> {
    fn from(e: Error) -> Self {
        TrainError::Invalid(e)
    }
}

/// Mean batch-statistics loss over `inputs` taken in consecutive batches.
pub fn eval_loss<T: Scalar>(model: &Model<T>, inputs: &Tensor4<T>, labels: &[usize], batch_size: usize) -> Result<f64> {
    let n = inputs.batch();
    let mut total = 0.0;
    for start in (0..n).step_by(batch_size.max(1)) {
        let end = (start + batch_size).min(n);
        let idx: Vec<usize> = (start..end).collect();
        total += loss(model, &inputs.gather_batch(&idx)?, &labels[start..end])? * idx.len() as f64;
    }
    Ok(total / n as f64)
}

/// Inference-mode predictions (running statistics, or fused convs for deploy models).
pub fn predict<T: Scalar>(model: &Model<T>, inputs: &Tensor4<T>, batch_size: usize) -> Result<Vec<usize>> {
    let n = inputs.batch();
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(batch_size.max(1)) {
        let idx: Vec<usize> = (start..(start + batch_size).min(n)).collect();
        out.extend(forward(model, &inputs.gather_batch(&idx)?)?.argmax_per_batch());
    }
    Ok(out)
}

pub fn accuracy<T: Scalar>(model: &Model<T>, inputs: &Tensor4<T>, labels: &[usize], batch_size: usize) -> Result<f64> {
    let pred = predict(model, inputs, batch_size)?;
    Ok(pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len().max(1) as f64)
}

/// SGD with momentum on a copy of `model`.
///
/// Each epoch shuffles the training set, steps through full batches, then records the
/// batch-statistics training loss (consecutive unshuffled batches) and validation accuracy
/// of the updated model.
pub fn train<T: Scalar>(
    model: &Model<T>,
    data: &ToyDataset<T>,
    cfg: &TrainConfig,
) -> std::result::Result<TrainOutcome<T>, TrainError<T>> {
    cfg.validate()?;
    require_train(model)?;
    if data.num_classes != model.spec().num_classes() {
        return Err(Error::Spec(format!(
            "dataset has {} classes, model head has {}",
            data.num_classes,
            model.spec().num_classes()
        ))
        .into());
    }
    let n = data.train_inputs.batch();
    if n < cfg.batch_size {
        return Err(Error::Spec(format!("{n} training samples cannot fill a batch of {}", cfg.batch_size)).into());
    }
    let mut model = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut velocity: Vec<Vec<T>> = params(&model)?.iter().map(|(_, p)| vec![T::zero(); p.len()]).collect();
    let record = |model: &Model<T>, epoch: usize, lr: f64| -> Result<CurvePoint> {
        Ok(CurvePoint {
            epoch,
            lr,
            train_loss: eval_loss(model, &data.train_inputs, &data.train_labels, cfg.batch_size)?,
            val_acc: accuracy(model, &data.val_inputs, &data.val_labels, cfg.batch_size)?,
        })
    };
    let mut curve = LossCurve {
        points: vec![record(&model, 0, cfg.lr_at(0))?],
    };
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 1..=cfg.epochs {
        let snapshot = model.clone();
        let lr = cfg.lr_at(epoch - 1);
        order.shuffle(&mut rng);
        let mut diverged = false;
        for chunk in order.chunks_exact(cfg.batch_size) {
            let inputs = data.train_inputs.gather_batch(chunk)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| data.train_labels[i]).collect();
            let (grads, trace) = backward_traced(&model, &inputs, &labels)?;
            if !grads.loss.is_finite() {
                diverged = true;
                break;
            }
            sgd_step(&mut model, &grads, &mut velocity, lr, cfg)?;
            update_running_stats(&mut model, &trace, BN_MOMENTUM);
        }
        let point = record(&model, epoch, lr)?;
        if diverged || !point.train_loss.is_finite() {
            return Err(TrainError::Diverged {
                epoch,
                model: Box::new(snapshot),
                curve,
            });
        }
        curve.points.push(point);
    }
    Ok(TrainOutcome { model, curve })
}

fn sgd_step<T: Scalar>(
    model: &mut Model<T>,
    grads: &Gradients<T>,
    velocity: &mut [Vec<T>],
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    let grad_slices = grads.slices();
    for (((kind, p), (_, g)), v) in params_mut(model)?.into_iter().zip(grad_slices).zip(velocity.iter_mut()) {
        let wd = if kind.decays() { cfg.weight_decay } else { 0.0 };
        for ((pi, gi), vi) in p.iter_mut().zip(g).zip(v.iter_mut()) {
            let d = gi.as_f64() + wd * pi.as_f64();
            let nv = cfg.momentum * vi.as_f64() + d;
            *vi = T::of(nv);
            *pi = T::of(pi.as_f64() - lr * nv);
        }
    }
    Ok(())
}
