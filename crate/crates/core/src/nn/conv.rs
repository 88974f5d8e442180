//! Strided 2-D cross-correlation and its adjoint, lowered to matrix products
//! through an im2col buffer spanning the whole batch.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Real, Shape4, Tensor4};

/// Zero padding per side.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding {
    pub const fn uniform(p: usize) -> Self {
        Padding {
            top: p,
            bottom: p,
            left: p,
            right: p,
        }
    }

    /// Padding giving `ceil(size / stride)` outputs per axis for a square
    /// kernel: `floor(k/2)` before, the remainder after.
    pub fn same(kernel: usize, stride: usize, h: usize, w: usize) -> Self {
        let axis = |size: usize| {
            let out = size.div_ceil(stride);
            let total = ((out - 1) * stride + kernel).saturating_sub(size);
            let lo = (kernel / 2).min(total);
            (lo, total - lo)
        };
        let (top, bottom) = axis(h);
        let (left, right) = axis(w);
        Padding {
            top,
            bottom,
            left,
            right,
        }
    }
}

/// Kernel geometry shared by forward and adjoint convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvGeom {
    pub out_c: usize,
    pub in_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: Padding,
}

impl ConvGeom {
    pub fn weight_shape(&self) -> Shape4 {
        Shape4::new(self.out_c, self.in_c, self.kh, self.kw)
    }

    fn patch(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    /// Output spatial size of the forward convolution.
    pub fn conv_out(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let ph = h + self.pad.top + self.pad.bottom;
        let pw = w + self.pad.left + self.pad.right;
        if self.stride == 0 || ph < self.kh || pw < self.kw {
            return Err(Error::Contract(format!(
                "conv2d: {h}x{w} input with padding {:?} is smaller than {}x{} kernel (stride {})",
                self.pad, self.kh, self.kw, self.stride
            )));
        }
        Ok((
            (ph - self.kh) / self.stride + 1,
            (pw - self.kw) / self.stride + 1,
        ))
    }

    /// Output spatial size of the transposed convolution.
    pub fn transpose_out(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let oh = ((h.max(1) - 1) * self.stride + self.kh) as isize
            - (self.pad.top + self.pad.bottom) as isize;
        let ow = ((w.max(1) - 1) * self.stride + self.kw) as isize
            - (self.pad.left + self.pad.right) as isize;
        if self.stride == 0 || h == 0 || w == 0 || oh < 1 || ow < 1 {
            return Err(Error::Contract(format!(
                "conv_transpose2d: {h}x{w} input gives empty output with geometry {self:?}"
            )));
        }
        Ok((oh as usize, ow as usize))
    }
}

/// A convolution kernel with per-output-channel bias.
///
/// `bias` may be empty, meaning no bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvKernel<R> {
    pub weight: Tensor4<R>,
    pub bias: Vec<R>,
    pub stride: usize,
    pub pad: Padding,
}

impl<R: Real> ConvKernel<R> {
    pub fn new(weight: Tensor4<R>, bias: Vec<R>, stride: usize, pad: Padding) -> Result<Self> {
        let s = weight.shape();
        if stride == 0 {
            return Err(Error::Contract("stride must be >= 1".into()));
        }
        if !bias.is_empty() && bias.len() != s.n {
            return Err(Error::shape(
                "ConvKernel::new",
                format!("bias of {}", s.n),
                bias.len(),
            ));
        }
        Ok(ConvKernel {
            weight,
            bias,
            stride,
            pad,
        })
    }

    /// Odd square kernel with "same" padding at stride 1.
    pub fn same(weight: Tensor4<R>, bias: Vec<R>) -> Result<Self> {
        let s = weight.shape();
        if s.h.is_multiple_of(2) || s.w.is_multiple_of(2) {
            return Err(Error::Contract(format!(
                "same padding needs odd kernel, got {}x{}",
                s.h, s.w
            )));
        }
        let pad = Padding {
            top: s.h / 2,
            bottom: s.h / 2,
            left: s.w / 2,
            right: s.w / 2,
        };
        Self::new(weight, bias, 1, pad)
    }

    /// Uniform initialization in `±sqrt(3 / fan_in)`, zero bias.
    pub fn init(geom: ConvGeom, rng: &mut impl Rng) -> Self {
        let bound = (3.0 / geom.patch().max(1) as f64).sqrt();
        ConvKernel {
            weight: Tensor4::uniform(geom.weight_shape(), -bound, bound, rng),
            bias: vec![R::zero(); geom.out_c],
            stride: geom.stride,
            pad: geom.pad,
        }
    }

    pub fn geom(&self) -> ConvGeom {
        let s = self.weight.shape();
        ConvGeom {
            out_c: s.n,
            in_c: s.c,
            kh: s.h,
            kw: s.w,
            stride: self.stride,
            pad: self.pad,
        }
    }
}

fn check_input<R: Real>(op: &'static str, x: &Tensor4<R>, channels: usize) -> Result<()> {
    if x.shape().c != channels {
        return Err(Error::shape(
            op,
            format!("{channels} input channels"),
            x.shape(),
        ));
    }
    Ok(())
}

/// Cross-correlation of `input` with `k`, plus bias.
pub fn conv2d<R: Real>(input: &Tensor4<R>, k: &ConvKernel<R>) -> Result<Tensor4<R>> {
    let geom = k.geom();
    check_input("conv2d", input, geom.in_c)?;
    let bias = (!k.bias.is_empty()).then_some(k.bias.as_slice());
    conv2d_raw(input, &k.weight, bias, &geom)
}

/// Adjoint of [`conv2d`] with respect to its input: maps `k.out_c` channels
/// back to `k.in_c` channels. The bias, when present, must have `k.in_c`
/// entries and is added to the output.
pub fn conv_transpose2d<R: Real>(input: &Tensor4<R>, k: &ConvKernel<R>) -> Result<Tensor4<R>> {
    let geom = k.geom();
    check_input("conv_transpose2d", input, geom.out_c)?;
    if !k.bias.is_empty() && k.bias.len() != geom.in_c {
        return Err(Error::shape(
            "conv_transpose2d",
            format!("bias of {} (output channels)", geom.in_c),
            k.bias.len(),
        ));
    }
    let s = input.shape();
    let (oh, ow) = geom.transpose_out(s.h, s.w)?;
    let mut out = conv2d_input_grad(input, &k.weight, &geom, oh, ow);
    if !k.bias.is_empty() {
        add_channel_bias(&mut out, &k.bias);
    }
    Ok(out)
}

pub(crate) fn add_channel_bias<R: Real>(t: &mut Tensor4<R>, bias: &[R]) {
    let s = t.shape();
    let plane = s.plane();
    for (i, chunk) in t.data_mut().chunks_mut(plane).enumerate() {
        let b = bias[i % s.c];
        for v in chunk {
            *v += b;
        }
    }
}

/// Fills `col` (`patch x n*oh*ow`, row-major) from `input`.
fn im2col<R: Real>(input: &Tensor4<R>, geom: &ConvGeom, oh: usize, ow: usize, col: &mut [R]) {
    let s = input.shape();
    let p = oh * ow;
    let np = s.n * p;
    let data = input.data();
    for c in 0..s.c {
        for ky in 0..geom.kh {
            for kx in 0..geom.kw {
                let row = (c * geom.kh + ky) * geom.kw + kx;
                let dst = &mut col[row * np..(row + 1) * np];
                for n in 0..s.n {
                    let plane = &data[(n * s.c + c) * s.plane()..(n * s.c + c + 1) * s.plane()];
                    for oy in 0..oh {
                        let iy = (oy * geom.stride + ky) as isize - geom.pad.top as isize;
                        let d = &mut dst[n * p + oy * ow..n * p + (oy + 1) * ow];
                        if iy < 0 || iy >= s.h as isize {
                            d.fill(R::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * s.w..(iy as usize + 1) * s.w];
                        for (ox, v) in d.iter_mut().enumerate() {
                            let ix = (ox * geom.stride + kx) as isize - geom.pad.left as isize;
                            *v = if ix >= 0 && ix < s.w as isize {
                                src[ix as usize]
                            } else {
                                R::zero()
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds `col` back into an `n x in_c x h x w` tensor.
fn col2im<R: Real>(col: &[R], geom: &ConvGeom, shape: Shape4, oh: usize, ow: usize) -> Tensor4<R> {
    let mut out = Tensor4::zeros(shape);
    let p = oh * ow;
    let np = shape.n * p;
    let plane_len = shape.plane();
    let data = out.data_mut();
    for c in 0..shape.c {
        for ky in 0..geom.kh {
            for kx in 0..geom.kw {
                let row = (c * geom.kh + ky) * geom.kw + kx;
                let srcrow = &col[row * np..(row + 1) * np];
                for n in 0..shape.n {
                    let base = (n * shape.c + c) * plane_len;
                    for oy in 0..oh {
                        let iy = (oy * geom.stride + ky) as isize - geom.pad.top as isize;
                        if iy < 0 || iy >= shape.h as isize {
                            continue;
                        }
                        let s = &srcrow[n * p + oy * ow..n * p + (oy + 1) * ow];
                        let drow = base + iy as usize * shape.w;
                        for (ox, &v) in s.iter().enumerate() {
                            let ix = (ox * geom.stride + kx) as isize - geom.pad.left as isize;
                            if ix >= 0 && ix < shape.w as isize {
                                data[drow + ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// `[oc][n*p]` matrix -> NCHW tensor.
fn mat_to_nchw<R: Real>(mat: &[R], n: usize, oc: usize, oh: usize, ow: usize) -> Tensor4<R> {
    let p = oh * ow;
    let mut data = Vec::with_capacity(n * oc * p);
    for b in 0..n {
        for c in 0..oc {
            let start = c * n * p + b * p;
            data.extend_from_slice(&mat[start..start + p]);
        }
    }
    Tensor4::from_vec(Shape4::new(n, oc, oh, ow), data)
}

/// NCHW tensor -> `[c][n*p]` matrix.
fn nchw_to_mat<R: Real>(t: &Tensor4<R>) -> Vec<R> {
    let s = t.shape();
    let p = s.plane();
    let mut mat = vec![R::zero(); s.len()];
    for b in 0..s.n {
        for c in 0..s.c {
            let src = (b * s.c + c) * p;
            let dst = c * s.n * p + b * p;
            mat[dst..dst + p].copy_from_slice(&t.data()[src..src + p]);
        }
    }
    mat
}

pub(crate) fn conv2d_raw<R: Real>(
    input: &Tensor4<R>,
    weight: &Tensor4<R>,
    bias: Option<&[R]>,
    geom: &ConvGeom,
) -> Result<Tensor4<R>> {
    let s = input.shape();
    let (oh, ow) = geom.conv_out(s.h, s.w)?;
    let np = s.n * oh * ow;
    let k = geom.patch();
    let mut col = vec![R::zero(); k * np];
    im2col(input, geom, oh, ow, &mut col);
    let mut mat = vec![R::zero(); geom.out_c * np];
    R::gemm(
        geom.out_c,
        k,
        np,
        R::one(),
        weight.data(),
        false,
        &col,
        false,
        R::zero(),
        &mut mat,
    );
    let mut out = mat_to_nchw(&mat, s.n, geom.out_c, oh, ow);
    if let Some(b) = bias {
        add_channel_bias(&mut out, b);
    }
    Ok(out)
}

/// Gradient of a conv2d output with respect to its input, i.e. the
/// transposed convolution of `dout` onto an `ih x iw` grid.
pub(crate) fn conv2d_input_grad<R: Real>(
    dout: &Tensor4<R>,
    weight: &Tensor4<R>,
    geom: &ConvGeom,
    ih: usize,
    iw: usize,
) -> Tensor4<R> {
    let s = dout.shape();
    let np = s.n * s.plane();
    let k = geom.patch();
    let dmat = nchw_to_mat(dout);
    let mut col = vec![R::zero(); k * np];
    R::gemm(
        k,
        geom.out_c,
        np,
        R::one(),
        weight.data(),
        true,
        &dmat,
        false,
        R::zero(),
        &mut col,
    );
    col2im(&col, geom, Shape4::new(s.n, geom.in_c, ih, iw), s.h, s.w)
}

/// Gradient of a conv2d output with respect to its weight, accumulated
/// into `dweight`.
pub(crate) fn conv2d_weight_grad<R: Real>(
    input: &Tensor4<R>,
    dout: &Tensor4<R>,
    geom: &ConvGeom,
    dweight: &mut [R],
) {
    let s = input.shape();
    let (oh, ow) = (dout.shape().h, dout.shape().w);
    let np = s.n * oh * ow;
    let k = geom.patch();
    let mut col = vec![R::zero(); k * np];
    im2col(input, geom, oh, ow, &mut col);
    let dmat = nchw_to_mat(dout);
    R::gemm(
        geom.out_c,
        np,
        k,
        R::one(),
        &dmat,
        false,
        &col,
        true,
        R::one(),
        dweight,
    );
}

/// Sum of `dout` over batch and space per channel.
pub(crate) fn channel_sums<R: Real>(dout: &Tensor4<R>) -> Vec<R> {
    let s = dout.shape();
    let mut out = vec![R::zero(); s.c];
    for (i, chunk) in dout.data().chunks(s.plane().max(1)).enumerate() {
        if s.plane() == 0 {
            break;
        }
        out[i % s.c] += chunk.iter().copied().sum();
    }
    out
}
