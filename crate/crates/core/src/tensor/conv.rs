//! Convolution kernels.
//!
//! All convolutions are cross-correlations (the kernel is not flipped). The
//! optimized path lowers each sample to an im2col matrix and a single GEMM;
//! `conv3d_reference` and `conv2d_reference` are direct loops accumulating in
//! `f64` and serve as oracles.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Element, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Zero padding so that unit stride preserves extents. An odd deficit puts
    /// the extra row on the high side.
    #[default]
    Same,
    Valid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: [usize; 3],
    pub dilation: [usize; 3],
    pub padding: Padding,
}

impl Default for ConvGeometry {
    fn default() -> Self {
        Self {
            stride: [1; 3],
            dilation: [1; 3],
            padding: Padding::Same,
        }
    }
}

impl ConvGeometry {
    pub fn valid() -> Self {
        Self {
            padding: Padding::Valid,
            ..Self::default()
        }
    }

    pub fn with_stride(mut self, stride: [usize; 3]) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_dilation(mut self, dilation: [usize; 3]) -> Self {
        self.dilation = dilation;
        self
    }
}

const AXES: [&str; 3] = ["depth", "height", "width"];

/// Output extent and low-side padding of one spatial axis.
fn axis_plan(
    axis: usize,
    input: usize,
    kernel: usize,
    stride: usize,
    dilation: usize,
    padding: Padding,
) -> Result<(usize, usize)> {
    if stride == 0 || dilation == 0 || kernel == 0 {
        return Err(Error::Geometry(format!(
            "{} axis: kernel, stride and dilation must be positive",
            AXES[axis]
        )));
    }
    if input == 0 {
        return Err(Error::Geometry(format!("{} axis: empty input", AXES[axis])));
    }
    let effective = (kernel - 1) * dilation + 1;
    match padding {
        Padding::Valid => {
            if input < effective {
                return Err(Error::Geometry(format!(
                    "{} axis: input extent {input} smaller than dilated kernel extent {effective}",
                    AXES[axis]
                )));
            }
            Ok(((input - effective) / stride + 1, 0))
        }
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + effective).saturating_sub(input);
            Ok((out, total / 2))
        }
    }
}

/// Spatial output extents of a convolution.
pub fn output_extent(
    input: [usize; 3],
    kernel: [usize; 3],
    geom: &ConvGeometry,
) -> Result<[usize; 3]> {
    let plan = Plan::new(input, kernel, geom)?;
    Ok(plan.output)
}

#[derive(Clone, Copy, Debug)]
struct Plan {
    input: [usize; 3],
    output: [usize; 3],
    kernel: [usize; 3],
    pad: [usize; 3],
    stride: [usize; 3],
    dilation: [usize; 3],
}

impl Plan {
    fn new(input: [usize; 3], kernel: [usize; 3], geom: &ConvGeometry) -> Result<Self> {
        let mut output = [0; 3];
        let mut pad = [0; 3];
        for axis in 0..3 {
            let (o, p) = axis_plan(
                axis,
                input[axis],
                kernel[axis],
                geom.stride[axis],
                geom.dilation[axis],
                geom.padding,
            )?;
            output[axis] = o;
            pad[axis] = p;
        }
        Ok(Self {
            input,
            output,
            kernel,
            pad,
            stride: geom.stride,
            dilation: geom.dilation,
        })
    }

    fn in_len(&self) -> usize {
        self.input.iter().product()
    }

    fn out_len(&self) -> usize {
        self.output.iter().product()
    }

    fn kernel_len(&self) -> usize {
        self.kernel.iter().product()
    }

    /// 1×1×1 kernel at unit stride: the im2col matrix is the input itself.
    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.pad == [0, 0, 0]
    }

    /// Input coordinate read by output coordinate `o` at kernel tap `k` on `axis`.
    #[inline]
    fn source(&self, axis: usize, o: usize, k: usize) -> Option<usize> {
        let pos = (o * self.stride[axis] + k * self.dilation[axis]) as isize - self.pad[axis] as isize;
        (pos >= 0 && (pos as usize) < self.input[axis]).then_some(pos as usize)
    }

    /// Range of output columns along width whose source lies inside the input, for tap `l`
    /// at unit width stride.
    #[inline]
    fn width_span(&self, l: usize) -> (usize, usize) {
        let shift = (l * self.dilation[2]) as isize - self.pad[2] as isize;
        let lo = (-shift).max(0) as usize;
        let hi = (self.input[2] as isize - shift).clamp(0, self.output[2] as isize) as usize;
        (lo.min(hi), hi)
    }

    /// Fills `cols` (rows: channel × kernel taps, columns: output positions).
    fn im2col<T: Element>(&self, x: &[T], channels: usize, cols: &mut [T]) {
        let [di, hi, wi] = self.input;
        let [dout, hout, wout] = self.output;
        let [kd, kh, kw] = self.kernel;
        let p = self.out_len();
        let mut row = 0;
        for c in 0..channels {
            for i in 0..kd {
                for j in 0..kh {
                    for l in 0..kw {
                        let dst = &mut cols[row * p..(row + 1) * p];
                        row += 1;
                        for od in 0..dout {
                            let plane = &mut dst[od * hout * wout..(od + 1) * hout * wout];
                            let Some(id) = self.source(0, od, i) else {
                                plane.fill(T::zero());
                                continue;
                            };
                            for oh in 0..hout {
                                let line = &mut plane[oh * wout..(oh + 1) * wout];
                                let Some(ih) = self.source(1, oh, j) else {
                                    line.fill(T::zero());
                                    continue;
                                };
                                let src = &x[((c * di + id) * hi + ih) * wi..][..wi];
                                if self.stride[2] == 1 {
                                    let (lo, hi_) = self.width_span(l);
                                    line[..lo].fill(T::zero());
                                    line[hi_..].fill(T::zero());
                                    if hi_ > lo {
                                        let s0 = lo + l * self.dilation[2] - self.pad[2];
                                        line[lo..hi_].copy_from_slice(&src[s0..s0 + (hi_ - lo)]);
                                    }
                                } else {
                                    for (ow, v) in line.iter_mut().enumerate() {
                                        *v = match self.source(2, ow, l) {
                                            Some(iw) => src[iw],
                                            None => T::zero(),
                                        };
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds `cols` back onto `dx`; the adjoint of [`Plan::im2col`].
    fn col2im<T: Element>(&self, cols: &[T], channels: usize, dx: &mut [T]) {
        let [di, hi, wi] = self.input;
        let [dout, hout, wout] = self.output;
        let [kd, kh, kw] = self.kernel;
        let p = self.out_len();
        let mut row = 0;
        for c in 0..channels {
            for i in 0..kd {
                for j in 0..kh {
                    for l in 0..kw {
                        let src = &cols[row * p..(row + 1) * p];
                        row += 1;
                        for od in 0..dout {
                            let Some(id) = self.source(0, od, i) else {
                                continue;
                            };
                            for oh in 0..hout {
                                let Some(ih) = self.source(1, oh, j) else {
                                    continue;
                                };
                                let line = &src[(od * hout + oh) * wout..][..wout];
                                let dst = &mut dx[((c * di + id) * hi + ih) * wi..][..wi];
                                if self.stride[2] == 1 {
                                    let (lo, hi_) = self.width_span(l);
                                    if hi_ > lo {
                                        let s0 = lo + l * self.dilation[2] - self.pad[2];
                                        for (d, &v) in dst[s0..s0 + (hi_ - lo)].iter_mut().zip(&line[lo..hi_]) {
                                            *d = *d + v;
                                        }
                                    }
                                } else {
                                    for (ow, &v) in line.iter().enumerate() {
                                        if let Some(iw) = self.source(2, ow, l) {
                                            dst[iw] = dst[iw] + v;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Kernel stack and biases of one 3D convolution layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvWeights<T = f32> {
    kernels: Tensor<T>,
    biases: Vec<T>,
    pub geometry: ConvGeometry,
}

impl<T: Element> ConvWeights<T> {
    /// `kernels` has shape `(out_channels, in_channels, kd, kh, kw)`.
    pub fn new(kernels: Tensor<T>, biases: Vec<T>, geometry: ConvGeometry) -> Result<Self> {
        let [cout, ..] = kernels.dims5()?;
        if biases.len() != cout {
            return Err(Error::dim("bias length", cout, biases.len()));
        }
        Ok(Self {
            kernels,
            biases,
            geometry,
        })
    }

    pub fn kernels(&self) -> &Tensor<T> {
        &self.kernels
    }

    pub fn biases(&self) -> &[T] {
        &self.biases
    }

    pub fn out_channels(&self) -> usize {
        self.kernels.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.kernels.shape()[1]
    }

    pub fn kernel_extent(&self) -> [usize; 3] {
        let s = self.kernels.shape();
        [s[2], s[3], s[4]]
    }

    /// A planar kernel has depth extent one and never mixes depth slices.
    pub fn is_planar(&self) -> bool {
        self.kernel_extent()[0] == 1
    }

    /// Zero-bias weights with the in/out channel axes swapped.
    ///
    /// `transpose_conv3d(y, w)` is the adjoint of `conv3d(·, w.adjoint())` under the
    /// geometry `w.geometry`, up to the bias term.
    pub fn adjoint(&self) -> Self {
        let [cout, cin, kd, kh, kw] = self.kernels.dims5().expect("rank-5 kernels");
        let taps = kd * kh * kw;
        let src = self.kernels.data();
        let mut data = vec![T::zero(); src.len()];
        for o in 0..cout {
            for i in 0..cin {
                let from = (o * cin + i) * taps;
                let to = (i * cout + o) * taps;
                data[to..to + taps].copy_from_slice(&src[from..from + taps]);
            }
        }
        Self {
            kernels: Tensor::from_parts(vec![cin, cout, kd, kh, kw], data),
            biases: vec![T::zero(); cin],
            geometry: self.geometry,
        }
    }

    pub fn into_parts(self) -> (Tensor<T>, Vec<T>) {
        (self.kernels, self.biases)
    }
}

/// Kernel stack and biases of one 2D convolution layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel2D<T = f32> {
    kernels: Tensor<T>,
    biases: Vec<T>,
}

impl<T: Element> Kernel2D<T> {
    /// `kernels` has shape `(out_channels, in_channels, kh, kw)`.
    pub fn new(kernels: Tensor<T>, biases: Vec<T>) -> Result<Self> {
        if kernels.rank() != 4 {
            return Err(Error::dim("rank", 4, kernels.rank()));
        }
        let cout = kernels.shape()[0];
        if biases.len() != cout {
            return Err(Error::dim("bias length", cout, biases.len()));
        }
        Ok(Self { kernels, biases })
    }

    pub fn kernels(&self) -> &Tensor<T> {
        &self.kernels
    }

    pub fn biases(&self) -> &[T] {
        &self.biases
    }

    pub fn out_channels(&self) -> usize {
        self.kernels.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.kernels.shape()[1]
    }
}

fn check_input<T: Element>(input: &Tensor<T>, kernel: &Tensor<T>, bias: &[T]) -> Result<([usize; 5], [usize; 5])> {
    let x = input.dims5()?;
    let k = kernel.dims5()?;
    if x[1] != k[1] {
        return Err(Error::dim("channel", k[1], x[1]));
    }
    if bias.len() != k[0] {
        return Err(Error::dim("bias length", k[0], bias.len()));
    }
    Ok((x, k))
}

fn add_bias<T: Element>(out: &mut [T], bias: &[T], plane: usize) {
    for (chunk, &b) in out.chunks_mut(plane).zip(bias) {
        for v in chunk {
            *v = *v + b;
        }
    }
}

pub(crate) fn conv3d_raw<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &[T],
    geom: &ConvGeometry,
) -> Result<Tensor<T>> {
    let ([n, cin, d, h, w], [cout, _, kd, kh, kw]) = check_input(input, kernel, bias)?;
    let plan = Plan::new([d, h, w], [kd, kh, kw], geom)?;
    let p = plan.out_len();
    let in_len = cin * plan.in_len();
    let k_len = cin * plan.kernel_len();
    let mut out = vec![T::zero(); n * cout * p];
    out.par_chunks_mut(cout * p)
        .zip(input.data().par_chunks(in_len))
        .for_each(|(y, x)| {
            // Seeding with the bias lets the product accumulate onto it before the single rounding.
            add_bias(y, bias, p);
            if plan.is_pointwise() {
                T::gemm(cout, k_len, p, kernel.data(), false, x, false, y, true);
            } else {
                let mut cols = vec![T::zero(); k_len * p];
                plan.im2col(x, cin, &mut cols);
                T::gemm(cout, k_len, p, kernel.data(), false, &cols, false, y, true);
            }
        });
    let [od, oh, ow] = plan.output;
    Ok(Tensor::from_parts(vec![n, cout, od, oh, ow], out))
}

/// Gradients of a convolution with respect to its input, kernel and bias.
pub(crate) struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub kernel: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

fn bias_grad<T: Element>(grad_out: &Tensor<T>) -> Tensor<T> {
    let s = grad_out.shape();
    let c = s[1];
    let plane: usize = s[2..].iter().product();
    let mut acc = vec![0.0f64; c];
    for (idx, chunk) in grad_out.data().chunks(plane).enumerate() {
        acc[idx % c] += chunk.iter().map(|v| v.as_f64()).sum::<f64>();
    }
    Tensor::from_parts(vec![c], acc.into_iter().map(T::from_f64).collect())
}

pub(crate) fn conv3d_backward<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    geom: &ConvGeometry,
    grad_out: &Tensor<T>,
    wants: [bool; 3],
) -> Result<ConvGrads<T>> {
    let [n, cin, d, h, w] = input.dims5()?;
    let [cout, _, kd, kh, kw] = kernel.dims5()?;
    let plan = Plan::new([d, h, w], [kd, kh, kw], geom)?;
    let p = plan.out_len();
    let in_len = cin * plan.in_len();
    let k_len = cin * plan.kernel_len();
    let [want_input, want_kernel, want_bias] = wants;

    let per_sample: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = (0..n)
        .into_par_iter()
        .map(|s| {
            let x = &input.data()[s * in_len..(s + 1) * in_len];
            let dy = &grad_out.data()[s * cout * p..(s + 1) * cout * p];
            let pointwise = plan.is_pointwise();
            let dk = want_kernel.then(|| {
                let mut dk = vec![T::zero(); cout * k_len];
                if pointwise {
                    T::gemm(cout, p, k_len, dy, false, x, true, &mut dk, false);
                } else {
                    let mut cols = vec![T::zero(); k_len * p];
                    plan.im2col(x, cin, &mut cols);
                    T::gemm(cout, p, k_len, dy, false, &cols, true, &mut dk, false);
                }
                dk
            });
            let dx = want_input.then(|| {
                let mut dcols = vec![T::zero(); k_len * p];
                T::gemm(k_len, cout, p, kernel.data(), true, dy, false, &mut dcols, false);
                if pointwise {
                    dcols
                } else {
                    let mut dx = vec![T::zero(); in_len];
                    plan.col2im(&dcols, cin, &mut dx);
                    dx
                }
            });
            (dx, dk)
        })
        .collect();

    let mut grad_input = want_input.then(|| Vec::with_capacity(n * in_len));
    let mut grad_kernel = want_kernel.then(|| vec![T::zero(); cout * k_len]);
    for (dx, dk) in per_sample {
        if let (Some(acc), Some(dx)) = (grad_input.as_mut(), dx) {
            acc.extend_from_slice(&dx);
        }
        if let (Some(acc), Some(dk)) = (grad_kernel.as_mut(), dk) {
            for (a, b) in acc.iter_mut().zip(dk) {
                *a = *a + b;
            }
        }
    }
    Ok(ConvGrads {
        input: grad_input.map(|g| Tensor::from_parts(input.shape().to_vec(), g)),
        kernel: grad_kernel.map(|g| Tensor::from_parts(kernel.shape().to_vec(), g)),
        bias: want_bias.then(|| bias_grad(grad_out)),
    })
}

/// 3D convolution (cross-correlation) plus per-output-channel bias.
pub fn conv3d<T: Element>(input: &Tensor<T>, w: &ConvWeights<T>) -> Result<Tensor<T>> {
    conv3d_raw(input, &w.kernels, &w.biases, &w.geometry)
}

/// Direct-loop 3D convolution accumulating in `f64`. Oracle for [`conv3d`].
pub fn conv3d_reference<T: Element>(input: &Tensor<T>, w: &ConvWeights<T>) -> Result<Tensor<T>> {
    let ([n, cin, d, h, wd], [cout, _, kd, kh, kw]) = check_input(input, &w.kernels, &w.biases)?;
    let plan = Plan::new([d, h, wd], [kd, kh, kw], &w.geometry)?;
    let [od, oh, ow] = plan.output;
    let x = input.data();
    let k = w.kernels.data();
    let mut out = Vec::with_capacity(n * cout * od * oh * ow);
    for s in 0..n {
        for o in 0..cout {
            for zd in 0..od {
                for zh in 0..oh {
                    for zw in 0..ow {
                        let mut acc = w.biases[o].as_f64();
                        for c in 0..cin {
                            for i in 0..kd {
                                let Some(id) = plan.source(0, zd, i) else { continue };
                                for j in 0..kh {
                                    let Some(ih) = plan.source(1, zh, j) else { continue };
                                    for l in 0..kw {
                                        let Some(iw) = plan.source(2, zw, l) else { continue };
                                        let xv = x[(((s * cin + c) * d + id) * h + ih) * wd + iw];
                                        let kv = k[(((o * cin + c) * kd + i) * kh + j) * kw + l];
                                        acc += xv.as_f64() * kv.as_f64();
                                    }
                                }
                            }
                        }
                        out.push(T::from_f64(acc));
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, cout, od, oh, ow], out))
}

fn as_planar<T: Element>(input: &Tensor<T>, w: &Kernel2D<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    if input.rank() != 4 {
        return Err(Error::dim("rank", 4, input.rank()));
    }
    let s = input.shape();
    let k = w.kernels.shape();
    let x = input.clone().reshape(&[s[0], s[1], 1, s[2], s[3]])?;
    let kk = w.kernels.clone().reshape(&[k[0], k[1], 1, k[2], k[3]])?;
    Ok((x, kk))
}

/// 2D convolution (cross-correlation) plus bias at unit stride and dilation.
///
/// Runs on the same lowering as [`conv3d`] with a single depth slice, so a planar
/// 3D convolution reproduces it slice by slice with identical summation order.
pub fn conv2d<T: Element>(input: &Tensor<T>, w: &Kernel2D<T>, padding: Padding) -> Result<Tensor<T>> {
    let (x, k) = as_planar(input, w)?;
    let geom = ConvGeometry {
        padding,
        ..ConvGeometry::default()
    };
    let y = conv3d_raw(&x, &k, &w.biases, &geom)?;
    let [n, c, _, h, wd] = y.dims5()?;
    y.reshape(&[n, c, h, wd])
}

/// Direct-loop 2D convolution accumulating in `f64`.
pub fn conv2d_reference<T: Element>(input: &Tensor<T>, w: &Kernel2D<T>, padding: Padding) -> Result<Tensor<T>> {
    if input.rank() != 4 {
        return Err(Error::dim("rank", 4, input.rank()));
    }
    let [n, cin, h, wd] = <[usize; 4]>::try_from(input.shape()).unwrap();
    let [cout, kcin, kh, kw] = <[usize; 4]>::try_from(w.kernels.shape()).unwrap();
    if cin != kcin {
        return Err(Error::dim("channel", kcin, cin));
    }
    let (oh, ph) = axis_plan(1, h, kh, 1, 1, padding)?;
    let (ow, pw) = axis_plan(2, wd, kw, 1, 1, padding)?;
    let x = input.data();
    let k = w.kernels.data();
    let mut out = Vec::with_capacity(n * cout * oh * ow);
    for s in 0..n {
        for o in 0..cout {
            for y in 0..oh {
                for z in 0..ow {
                    let mut acc = w.biases[o].as_f64();
                    for c in 0..cin {
                        for j in 0..kh {
                            let ih = (y + j) as isize - ph as isize;
                            if ih < 0 || ih as usize >= h {
                                continue;
                            }
                            for l in 0..kw {
                                let iw = (z + l) as isize - pw as isize;
                                if iw < 0 || iw as usize >= wd {
                                    continue;
                                }
                                let xv = x[((s * cin + c) * h + ih as usize) * wd + iw as usize];
                                acc += xv.as_f64() * k[((o * cin + c) * kh + j) * kw + l].as_f64();
                            }
                        }
                    }
                    out.push(T::from_f64(acc));
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, cout, oh, ow], out))
}

/// Transposed-convolution plan: kernel rearranged to `(cout·taps) × cin` and the
/// forward-convolution plan it is the adjoint of.
fn transpose_plan<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    geom: &ConvGeometry,
) -> Result<([usize; 5], [usize; 5], Plan, [usize; 3])> {
    let x = input.dims5()?;
    let k = kernel.dims5()?;
    if x[1] != k[1] {
        return Err(Error::dim("channel", k[1], x[1]));
    }
    let out_sp = [x[2] * geom.stride[0], x[3] * geom.stride[1], x[4] * geom.stride[2]];
    let plan = Plan::new(out_sp, [k[2], k[3], k[4]], geom)?;
    if plan.output != [x[2], x[3], x[4]] {
        return Err(Error::Geometry(format!(
            "transposed convolution: upsampled extents {:?} do not map back onto input extents {:?}",
            out_sp,
            [x[2], x[3], x[4]]
        )));
    }
    Ok((x, k, plan, out_sp))
}

fn kernel_as_columns<T: Element>(kernel: &Tensor<T>) -> Vec<T> {
    let [cout, cin, kd, kh, kw] = kernel.dims5().unwrap();
    let taps = kd * kh * kw;
    let src = kernel.data();
    let mut a = vec![T::zero(); cout * taps * cin];
    for o in 0..cout {
        for i in 0..cin {
            for t in 0..taps {
                a[(o * taps + t) * cin + i] = src[(o * cin + i) * taps + t];
            }
        }
    }
    a
}

pub(crate) fn transpose_conv3d_raw<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &[T],
    geom: &ConvGeometry,
) -> Result<Tensor<T>> {
    let ([n, cin, ..], [cout, ..], plan, out_sp) = transpose_plan(input, kernel, geom)?;
    if bias.len() != cout {
        return Err(Error::dim("bias length", cout, bias.len()));
    }
    let a = kernel_as_columns(kernel);
    let rows = cout * plan.kernel_len();
    let py = plan.out_len();
    let px = plan.in_len();
    let mut out = vec![T::zero(); n * cout * px];
    out.par_chunks_mut(cout * px)
        .zip(input.data().par_chunks(cin * py))
        .for_each(|(x, y)| {
            let mut cols = vec![T::zero(); rows * py];
            T::gemm(rows, cin, py, &a, false, y, false, &mut cols, false);
            plan.col2im(&cols, cout, x);
            add_bias(x, bias, px);
        });
    Ok(Tensor::from_parts(
        vec![n, cout, out_sp[0], out_sp[1], out_sp[2]],
        out,
    ))
}

pub(crate) fn transpose_conv3d_backward<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    geom: &ConvGeometry,
    grad_out: &Tensor<T>,
    wants: [bool; 3],
) -> Result<ConvGrads<T>> {
    let ([n, cin, ..], [cout, _, kd, kh, kw], plan, _) = transpose_plan(input, kernel, geom)?;
    let taps = kd * kh * kw;
    let rows = cout * taps;
    let py = plan.out_len();
    let px = plan.in_len();
    let [want_input, want_kernel, want_bias] = wants;
    let a = kernel_as_columns(kernel);

    let per_sample: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = (0..n)
        .into_par_iter()
        .map(|s| {
            let y = &input.data()[s * cin * py..(s + 1) * cin * py];
            let dx = &grad_out.data()[s * cout * px..(s + 1) * cout * px];
            let mut dcols = vec![T::zero(); rows * py];
            plan.im2col(dx, cout, &mut dcols);
            let dy = want_input.then(|| {
                let mut dy = vec![T::zero(); cin * py];
                T::gemm(cin, rows, py, &a, true, &dcols, false, &mut dy, false);
                dy
            });
            let da = want_kernel.then(|| {
                let mut da = vec![T::zero(); rows * cin];
                T::gemm(rows, py, cin, &dcols, false, y, true, &mut da, false);
                da
            });
            (dy, da)
        })
        .collect();

    let mut grad_input = want_input.then(|| Vec::with_capacity(n * cin * py));
    let mut grad_cols = want_kernel.then(|| vec![T::zero(); rows * cin]);
    for (dy, da) in per_sample {
        if let (Some(acc), Some(dy)) = (grad_input.as_mut(), dy) {
            acc.extend_from_slice(&dy);
        }
        if let (Some(acc), Some(da)) = (grad_cols.as_mut(), da) {
            for (a, b) in acc.iter_mut().zip(da) {
                *a = *a + b;
            }
        }
    }
    let grad_kernel = grad_cols.map(|da| {
        let mut dk = vec![T::zero(); da.len()];
        for o in 0..cout {
            for i in 0..cin {
                for t in 0..taps {
                    dk[(o * cin + i) * taps + t] = da[(o * taps + t) * cin + i];
                }
            }
        }
        Tensor::from_parts(kernel.shape().to_vec(), dk)
    });
    Ok(ConvGrads {
        input: grad_input.map(|g| Tensor::from_parts(input.shape().to_vec(), g)),
        kernel: grad_kernel,
        bias: want_bias.then(|| bias_grad(grad_out)),
    })
}

/// Transposed 3D convolution upsampling each spatial axis by `upsample`.
///
/// `w` holds `(out_channels, in_channels, kd, kh, kw)` kernels of the transposed
/// operation itself; its stride is replaced by `upsample`. The linear part is the
/// adjoint of `conv3d` with `w.adjoint()` at that stride.
pub fn transpose_conv3d<T: Element>(
    input: &Tensor<T>,
    w: &ConvWeights<T>,
    upsample: [usize; 3],
) -> Result<Tensor<T>> {
    if upsample.contains(&0) {
        return Err(Error::Geometry("upsample factors must be positive".into()));
    }
    let geom = w.geometry.with_stride(upsample);
    transpose_conv3d_raw(input, &w.kernels, &w.biases, &geom)
}
