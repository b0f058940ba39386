//! F(2x2, 3x3) Winograd convolution for stride-1 3x3 layers.
//!
//! Each 4x4 input tile `d` and 3x3 kernel `k` produce a 2x2 output tile
//! `A^T [(G k G^T) ⊙ (B^T d B)] A`. Only the elementwise stage multiplies data by weights:
//! 16 multiplies per (tile, input channel, output channel) instead of 36 for direct
//! convolution, which is the 4/9 ratio the Wino-MUL cost metric is built on.

use crate::analysis::LayerCost;
use crate::error::{Error, Result};
use crate::tensor::{ConvParams, MatRef, Scalar, Tensor4};

/// Input transform `B^T` (4x4).
pub const BT: [[f64; 4]; 4] = [
    [1.0, 0.0, -1.0, 0.0],
    [0.0, 1.0, 1.0, 0.0],
    [0.0, -1.0, 1.0, 0.0],
    [0.0, 1.0, 0.0, -1.0],
];

/// Kernel transform `G` (4x3).
pub const G: [[f64; 3]; 4] = [
    [1.0, 0.0, 0.0],
    [0.5, 0.5, 0.5],
    [0.5, -0.5, 0.5],
    [0.0, 0.0, 1.0],
];

/// Output transform `A^T` (2x4).
pub const AT: [[f64; 4]; 2] = [[1.0, 1.0, 1.0, 0.0], [0.0, 1.0, -1.0, -1.0]];

/// `G k G^T` for one 3x3 kernel.
pub fn transform_kernel(k: &[[f64; 3]; 3]) -> [[f64; 4]; 4] {
    let mut gk = [[0.0; 3]; 4];
    for i in 0..4 {
        for j in 0..3 {
            gk[i][j] = (0..3).map(|t| G[i][t] * k[t][j]).sum();
        }
    }
    let mut u = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            u[i][j] = (0..3).map(|t| gk[i][t] * G[j][t]).sum();
        }
    }
    u
}

// B^T d B, written out so the transform is additions only.
#[inline]
fn transform_input<T: Scalar>(d: &[[T; 4]; 4]) -> [[T; 4]; 4] {
    let mut t = [[T::zero(); 4]; 4];
    for j in 0..4 {
        t[0][j] = d[0][j] - d[2][j];
        t[1][j] = d[1][j] + d[2][j];
        t[2][j] = d[2][j] - d[1][j];
        t[3][j] = d[1][j] - d[3][j];
    }
    let mut v = [[T::zero(); 4]; 4];
    for i in 0..4 {
        v[i][0] = t[i][0] - t[i][2];
        v[i][1] = t[i][1] + t[i][2];
        v[i][2] = t[i][2] - t[i][1];
        v[i][3] = t[i][1] - t[i][3];
    }
    v
}

// A^T m A.
#[inline]
fn transform_output<T: Scalar>(m: &[[T; 4]; 4]) -> [[T; 2]; 2] {
    let mut t = [[T::zero(); 4]; 2];
    for j in 0..4 {
        t[0][j] = m[0][j] + m[1][j] + m[2][j];
        t[1][j] = m[1][j] - m[2][j] - m[3][j];
    }
    [
        [t[0][0] + t[0][1] + t[0][2], t[0][1] - t[0][2] - t[0][3]],
        [t[1][0] + t[1][1] + t[1][2], t[1][1] - t[1][2] - t[1][3]],
    ]
}

/// A 3x3 stride-1 convolution with its kernels pre-transformed into the Winograd domain.
#[derive(Clone, Debug)]
pub struct WinogradKernel<T> {
    // [16][c_out][cin_g]
    transformed: Vec<T>,
    bias: Option<Vec<T>>,
    c_out: usize,
    cin_g: usize,
    groups: usize,
    padding: usize,
}

impl<T: Scalar> WinogradKernel<T> {
    /// Precomputes `G k G^T` for every (output channel, input channel) pair.
    pub fn new(p: &ConvParams<T>) -> Result<Self> {
        if p.kernel_size() != 3 || p.stride() != 1 {
            return Err(Error::Unsupported(format!(
                "winograd F(2x2,3x3) needs a stride-1 3x3 kernel, got {0}x{0} stride {1}",
                p.kernel_size(),
                p.stride()
            )));
        }
        let [c_out, cin_g, _, _] = p.kernel().shape();
        let mut transformed = vec![T::zero(); 16 * c_out * cin_g];
        for o in 0..c_out {
            for i in 0..cin_g {
                let mut k = [[0.0; 3]; 3];
                for (y, row) in k.iter_mut().enumerate() {
                    for (x, v) in row.iter_mut().enumerate() {
                        *v = p.kernel().get(o, i, y, x).as_f64();
                    }
                }
                let u = transform_kernel(&k);
                for xi in 0..16 {
                    transformed[(xi * c_out + o) * cin_g + i] = T::of(u[xi / 4][xi % 4]);
                }
            }
        }
        Ok(WinogradKernel {
            transformed,
            bias: p.bias().map(<[T]>::to_vec),
            c_out,
            cin_g,
            groups: p.groups(),
            padding: p.padding(),
        })
    }

    pub fn apply(&self, input: &Tensor4<T>) -> Result<Tensor4<T>> {
        let mut unused = 0;
        self.run::<false>(input, false, &mut unused)
    }

    /// `relu(apply(input))`, clamping while the output tiles are written.
    pub fn apply_relu(&self, input: &Tensor4<T>) -> Result<Tensor4<T>> {
        let mut unused = 0;
        self.run::<false>(input, true, &mut unused)
    }

    /// Like [`apply`](Self::apply), also returning the number of scalar multiplies executed in
    /// the elementwise (transform-domain) stage.
    pub fn apply_counted(&self, input: &Tensor4<T>) -> Result<(Tensor4<T>, u64)> {
        let mut count = 0;
        let out = self.run::<true>(input, false, &mut count)?;
        Ok((out, count))
    }

    fn run<const COUNT: bool>(&self, input: &Tensor4<T>, relu: bool, count: &mut u64) -> Result<Tensor4<T>> {
        let [n, c_in, h, w] = input.shape();
        if c_in != self.cin_g * self.groups {
            return Err(Error::shape(format!(
                "input has {c_in} channels, winograd kernel expects {}",
                self.cin_g * self.groups
            )));
        }
        let pad = self.padding;
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        if ph < 3 || pw < 3 {
            return Err(Error::shape(format!(
                "input {h}x{w} with padding {pad} is smaller than the 3x3 kernel"
            )));
        }
        if n == 0 {
            return Err(Error::shape("convolution output is empty"));
        }
        let (oh, ow) = (ph - 2, pw - 2);
        // Output is computed on a grid rounded up to even size, then cropped.
        let (th, tw) = (oh.div_ceil(2), ow.div_ceil(2));
        let tiles = th * tw;
        let (g, cin_g, cout_g) = (self.groups, self.cin_g, self.c_out / self.groups);

        let mut out = Tensor4::zeros([n, self.c_out, oh, ow]);
        // Tiles of the whole batch side by side: column b * tiles + t.
        let cols = n * tiles;
        let mut v = vec![T::zero(); 16 * cin_g * cols];
        let mut m = vec![T::zero(); 16 * cout_g * cols];

        for grp in 0..g {
            for b in 0..n {
                for i in 0..cin_g {
                    let plane = input.plane(b, grp * cin_g + i);
                    for ty in 0..th {
                        let y0 = (2 * ty) as isize - pad as isize;
                        for tx in 0..tw {
                            let x0 = (2 * tx) as isize - pad as isize;
                            let mut d = [[T::zero(); 4]; 4];
                            if y0 >= 0 && x0 >= 0 && y0 + 4 <= h as isize && x0 + 4 <= w as isize {
                                for (r, row) in d.iter_mut().enumerate() {
                                    let start = (y0 as usize + r) * w + x0 as usize;
                                    row.copy_from_slice(&plane[start..start + 4]);
                                }
                            } else {
                                for (r, row) in d.iter_mut().enumerate() {
                                    let y = y0 + r as isize;
                                    if y < 0 || y >= h as isize {
                                        continue;
                                    }
                                    for (c, val) in row.iter_mut().enumerate() {
                                        let x = x0 + c as isize;
                                        if x >= 0 && x < w as isize {
                                            *val = plane[y as usize * w + x as usize];
                                        }
                                    }
                                }
                            }
                            let dt = transform_input(&d);
                            let col = b * tiles + ty * tw + tx;
                            for xi in 0..16 {
                                v[(xi * cin_g + i) * cols + col] = dt[xi / 4][xi % 4];
                            }
                        }
                    }
                }
            }

            // Elementwise stage: per transform coordinate, a (cout_g x cin_g)(cin_g x cols)
            // product.
            for xi in 0..16 {
                let u = &self.transformed[(xi * self.c_out + grp * cout_g) * cin_g..][..cout_g * cin_g];
                let vx = &v[xi * cin_g * cols..][..cin_g * cols];
                let mx = &mut m[xi * cout_g * cols..][..cout_g * cols];
                if COUNT {
                    mx.fill(T::zero());
                    for (o, m_row) in mx.chunks_exact_mut(cols).enumerate() {
                        for (&u, v_row) in u[o * cin_g..][..cin_g].iter().zip(vx.chunks_exact(cols)) {
                            for (acc, &x) in m_row.iter_mut().zip(v_row) {
                                *acc += u * x;
                            }
                            *count += cols as u64;
                        }
                    }
                } else {
                    T::gemm(
                        cout_g,
                        cin_g,
                        cols,
                        MatRef::row_major(u, cin_g),
                        MatRef::row_major(vx, cols),
                        T::zero(),
                        mx,
                        cols,
                    );
                }
            }

            for b in 0..n {
                for o in 0..cout_g {
                    let oc = grp * cout_g + o;
                    let bias = self.bias.as_ref().map_or(T::zero(), |bv| bv[oc]);
                    let dst = out.plane_mut(b, oc);
                    for ty in 0..th {
                        for tx in 0..tw {
                            let col = b * tiles + ty * tw + tx;
                            let mut mt = [[T::zero(); 4]; 4];
                            for xi in 0..16 {
                                mt[xi / 4][xi % 4] = m[(xi * cout_g + o) * cols + col];
                            }
                            let y2 = transform_output(&mt);
                            for (dy, row) in y2.iter().enumerate() {
                                let oy = 2 * ty + dy;
                                if oy >= oh {
                                    continue;
                                }
                                for (dx, &val) in row.iter().enumerate() {
                                    let ox = 2 * tx + dx;
                                    if ox < ow {
                                        let y = val + bias;
                                        dst[oy * ow + ox] = if relu { y.max(T::zero()) } else { y };
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Winograd convolution with the same contract as [`crate::tensor::conv2d`].
///
/// Fails with [`Error::Unsupported`] unless the kernel is 3x3 with stride 1.
pub fn winograd_conv3x3<T: Scalar>(input: &Tensor4<T>, p: &ConvParams<T>) -> Result<Tensor4<T>> {
    p.output_shape(input.shape())?;
    WinogradKernel::new(p)?.apply(input)
}

/// [`winograd_conv3x3`] plus the elementwise-stage multiply count.
pub fn winograd_conv3x3_counted<T: Scalar>(
    input: &Tensor4<T>,
    p: &ConvParams<T>,
) -> Result<(Tensor4<T>, u64)> {
    p.output_shape(input.shape())?;
    WinogradKernel::new(p)?.apply_counted(input)
}

/// Multiplies charged to one conv layer when every stride-1 3x3 conv runs F(2x2,3x3):
/// 4/9 of the direct count for those layers, the direct count otherwise.
pub fn wino_mul_count(layer: &LayerCost) -> u64 {
    let direct = layer.direct_muls();
    if layer.kernel == 3 && layer.stride == 1 {
        direct / 9 * 4
    } else {
        direct
    }
}
