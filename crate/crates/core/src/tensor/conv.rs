use super::{MatRef, Scalar, Tensor4};
use crate::error::{Error, Result};

/// Convolution kernel plus optional bias and square stride/padding/groups metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T> {
    kernel: Tensor4<T>,
    bias: Option<Vec<T>>,
    stride: usize,
    padding: usize,
    groups: usize,
}

impl<T: Scalar> ConvParams<T> {
    pub fn new(
        kernel: Tensor4<T>,
        bias: Option<Vec<T>>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self> {
        let [c_out, _, kh, kw] = kernel.shape();
        if kh != kw || !(kh == 1 || kh == 3) {
            return Err(Error::Unsupported(format!(
                "kernel must be 1x1 or 3x3, got {kh}x{kw}"
            )));
        }
        if stride == 0 {
            return Err(Error::Unsupported("stride must be positive".into()));
        }
        if groups == 0 || c_out % groups != 0 {
            return Err(Error::shape(format!(
                "{c_out} output channels not divisible by {groups} groups"
            )));
        }
        if let Some(b) = &bias {
            if b.len() != c_out {
                return Err(Error::shape(format!(
                    "bias has {} entries for {c_out} output channels",
                    b.len()
                )));
            }
        }
        Ok(ConvParams {
            kernel,
            bias,
            stride,
            padding,
            groups,
        })
    }

    pub fn kernel(&self) -> &Tensor4<T> {
        &self.kernel
    }

    pub(crate) fn kernel_mut(&mut self) -> &mut Tensor4<T> {
        &mut self.kernel
    }

    pub fn bias(&self) -> Option<&[T]> {
        self.bias.as_deref()
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn padding(&self) -> usize {
        self.padding
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel.shape()[2]
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape()[1] * self.groups
    }

    pub fn with_bias(mut self, bias: Option<Vec<T>>) -> Result<Self> {
        if let Some(b) = &bias {
            if b.len() != self.out_channels() {
                return Err(Error::shape(format!(
                    "bias has {} entries for {} output channels",
                    b.len(),
                    self.out_channels()
                )));
            }
        }
        self.bias = bias;
        Ok(self)
    }

    /// Output shape for `input_shape`, validating channel and spatial compatibility.
    pub fn output_shape(&self, input_shape: [usize; 4]) -> Result<[usize; 4]> {
        let [n, c, h, w] = input_shape;
        if c != self.in_channels() {
            return Err(Error::shape(format!(
                "input has {c} channels, kernel {:?} with {} groups expects {}",
                self.kernel.shape(),
                self.groups,
                self.in_channels()
            )));
        }
        let k = self.kernel_size();
        let (ph, pw) = (h + 2 * self.padding, w + 2 * self.padding);
        if ph < k || pw < k {
            return Err(Error::shape(format!(
                "input {h}x{w} with padding {} is smaller than the {k}x{k} kernel",
                self.padding
            )));
        }
        let oh = (ph - k) / self.stride + 1;
        let ow = (pw - k) / self.stride + 1;
        if n == 0 || oh == 0 || ow == 0 {
            return Err(Error::shape("convolution output is empty".to_string()));
        }
        Ok([n, self.out_channels(), oh, ow])
    }
}

/// Direct grouped convolution via im2col and a blocked matrix product.
pub fn conv2d<T: Scalar>(input: &Tensor4<T>, p: &ConvParams<T>) -> Result<Tensor4<T>> {
    let out_shape = p.output_shape(input.shape())?;
    let [n, _, h, w] = input.shape();
    let [_, c_out, oh, ow] = out_shape;
    let g = p.groups;
    let cin_g = p.in_channels() / g;
    let cout_g = c_out / g;
    let k = p.kernel_size();
    let kk = cin_g * k * k;
    let ohw = oh * ow;
    let pointwise = k == 1 && p.stride == 1 && p.padding == 0;

    let mut out = Tensor4::zeros(out_shape);
    let mut cols = if pointwise {
        Vec::new()
    } else {
        vec![T::zero(); kk * ohw]
    };
    let kernel = p.kernel.data();
    for b in 0..n {
        for grp in 0..g {
            let in_start = (b * p.in_channels() + grp * cin_g) * h * w;
            let in_group = &input.data()[in_start..in_start + cin_g * h * w];
            let b_mat = if pointwise {
                in_group
            } else {
                im2col(in_group, cin_g, h, w, k, p.stride, p.padding, oh, ow, &mut cols);
                &cols[..]
            };
            let out_start = (b * c_out + grp * cout_g) * ohw;
            let out_group = &mut out.data_mut()[out_start..out_start + cout_g * ohw];
            let w_group = &kernel[grp * cout_g * kk..(grp + 1) * cout_g * kk];
            T::gemm(
                cout_g,
                kk,
                ohw,
                MatRef::row_major(w_group, kk),
                MatRef::row_major(b_mat, ohw),
                T::zero(),
                out_group,
                ohw,
            );
        }
    }
    if let Some(bias) = &p.bias {
        for b in 0..n {
            for (c, &bv) in bias.iter().enumerate() {
                for v in out.plane_mut(b, c) {
                    *v += bv;
                }
            }
        }
    }
    Ok(out)
}

/// Naive seven-loop convolution accumulating in `f64`. Slow; used as the correctness oracle.
pub fn conv2d_reference<T: Scalar>(input: &Tensor4<T>, p: &ConvParams<T>) -> Result<Tensor4<T>> {
    let out_shape = p.output_shape(input.shape())?;
    let [n, _, h, w] = input.shape();
    let [_, c_out, oh, ow] = out_shape;
    let cin_g = p.in_channels() / p.groups;
    let cout_g = c_out / p.groups;
    let k = p.kernel_size();
    let (s, pad) = (p.stride as isize, p.padding as isize);
    let mut out = Tensor4::zeros(out_shape);
    for b in 0..n {
        for oc in 0..c_out {
            let grp = oc / cout_g;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = p.bias.as_ref().map_or(0.0, |bias| bias[oc].as_f64());
                    for ic in 0..cin_g {
                        let c = grp * cin_g + ic;
                        for ky in 0..k {
                            let iy = oy as isize * s + ky as isize - pad;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = ox as isize * s + kx as isize - pad;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += input.get(b, c, iy as usize, ix as usize).as_f64()
                                    * p.kernel.get(oc, ic, ky, kx).as_f64();
                            }
                        }
                    }
                    out.set(b, oc, oy, ox, T::of(acc));
                }
            }
        }
    }
    Ok(out)
}

/// Unfolds one group of one image into a `(cin_g * k * k) x (oh * ow)` column matrix.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    src: &[T],
    channels: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    cols: &mut [T],
) {
    let ohw = oh * ow;
    for c in 0..channels {
        let plane = &src[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst_row.fill(T::zero());
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-adds a column matrix back onto an image group (adjoint of [`im2col`]).
#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    cols: &[T],
    channels: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    dst: &mut [T],
) {
    let ohw = oh * ow;
    for c in 0..channels {
        let plane = &mut dst[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * ohw..(row + 1) * ohw];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let plane_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && (ix as usize) < w {
                            plane_row[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of a convolution with respect to its input, kernel and (if present) bias.
#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub input: Tensor4<T>,
    pub kernel: Tensor4<T>,
    pub bias: Option<Vec<T>>,
}

/// Backward pass of [`conv2d`] given the upstream gradient `grad_out`.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor4<T>,
    p: &ConvParams<T>,
    grad_out: &Tensor4<T>,
) -> Result<ConvGrads<T>> {
    let out_shape = p.output_shape(input.shape())?;
    if grad_out.shape() != out_shape {
        return Err(Error::shape(format!(
            "upstream gradient {:?} does not match conv output {:?}",
            grad_out.shape(),
            out_shape
        )));
    }
    let [n, c_in, h, w] = input.shape();
    let [_, c_out, oh, ow] = out_shape;
    let g = p.groups;
    let cin_g = c_in / g;
    let cout_g = c_out / g;
    let k = p.kernel_size();
    let kk = cin_g * k * k;
    let ohw = oh * ow;

    let mut grad_in = Tensor4::zeros(input.shape());
    let mut grad_k = Tensor4::zeros(p.kernel.shape());
    let mut cols = vec![T::zero(); kk * ohw];
    let mut dcols = vec![T::zero(); kk * ohw];
    for b in 0..n {
        for grp in 0..g {
            let in_start = (b * c_in + grp * cin_g) * h * w;
            let in_group = &input.data()[in_start..in_start + cin_g * h * w];
            im2col(in_group, cin_g, h, w, k, p.stride, p.padding, oh, ow, &mut cols);
            let go_start = (b * c_out + grp * cout_g) * ohw;
            let go = &grad_out.data()[go_start..go_start + cout_g * ohw];

            // dW_g += dY_g * cols^T
            let gk = &mut grad_k.data_mut()[grp * cout_g * kk..(grp + 1) * cout_g * kk];
            T::gemm(
                cout_g,
                ohw,
                kk,
                MatRef::row_major(go, ohw),
                MatRef::transposed(&cols, ohw),
                T::one(),
                gk,
                kk,
            );

            // dcols = W_g^T * dY_g
            let wg = &p.kernel.data()[grp * cout_g * kk..(grp + 1) * cout_g * kk];
            T::gemm(
                kk,
                cout_g,
                ohw,
                MatRef::transposed(wg, kk),
                MatRef::row_major(go, ohw),
                T::zero(),
                &mut dcols,
                ohw,
            );
            let gi = &mut grad_in.data_mut()[in_start..in_start + cin_g * h * w];
            col2im(&dcols, cin_g, h, w, k, p.stride, p.padding, oh, ow, gi);
        }
    }
    let grad_b = p.bias.as_ref().map(|_| {
        (0..c_out)
            .map(|c| {
                let mut acc = T::zero();
                for b in 0..n {
                    for &v in grad_out.plane(b, c) {
                        acc += v;
                    }
                }
                acc
            })
            .collect()
    });
    Ok(ConvGrads {
        input: grad_in,
        kernel: grad_k,
        bias: grad_b,
    })
}
