//! Convolution primitives built from an im2col/col2im pair plus matrix products.
//!
//! `Im2Col` and `Col2Im` are linear maps and each other's adjoint, so each one's
//! backward pass is the other's forward pass. Both convolution directions then
//! differentiate through ordinary (gemm-backed) matmuls.

use candle_core::{CpuStorage, CustomOp1, CustomOp3, DType, Device, Layout, Result, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geometry {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn new(channels: usize, height: usize, width: usize, kernel: usize, stride: usize, pad: usize) -> Result<Self> {
        let span_h = height + 2 * pad;
        let span_w = width + 2 * pad;
        if span_h < kernel || span_w < kernel || stride == 0 {
            candle_core::bail!("kernel {kernel} does not fit {height}x{width} with padding {pad}")
        }
        Ok(Self {
            channels,
            height,
            width,
            kernel,
            stride,
            pad,
            out_h: (span_h - kernel) / stride + 1,
            out_w: (span_w - kernel) / stride + 1,
        })
    }

    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Calls `f(col_index, image_index)` for every in-bounds tap of sample `n`
    /// when `batch` samples share one `(rows, batch * cols)` column matrix.
    #[inline]
    fn for_each_tap(&self, n: usize, batch: usize, mut f: impl FnMut(usize, usize)) {
        let k = self.kernel;
        let row_len = batch * self.cols();
        for c in 0..self.channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        let base_in = (c * self.height + iy as usize) * self.width;
                        let base_col = row * row_len + n * self.cols() + oy * self.out_w;
                        for ox in 0..self.out_w {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.width as isize {
                                continue;
                            }
                            f(base_col + ox, base_in + ix as usize);
                        }
                    }
                }
            }
        }
    }
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("expected contiguous input"),
    }
}

fn unfold<T: Copy + Default>(src: &[T], batch: usize, g: &Geometry) -> Vec<T> {
    let per_in = g.image_len();
    let mut out = vec![T::default(); batch * g.rows() * g.cols()];
    for n in 0..batch {
        let s = &src[n * per_in..(n + 1) * per_in];
        g.for_each_tap(n, batch, |ci, ii| out[ci] = s[ii]);
    }
    out
}

fn fold<T: Copy + Default + std::ops::AddAssign>(src: &[T], batch: usize, g: &Geometry) -> Vec<T> {
    let per_img = g.image_len();
    let mut out = vec![T::default(); batch * per_img];
    for n in 0..batch {
        let o = &mut out[n * per_img..(n + 1) * per_img];
        g.for_each_tap(n, batch, |ci, ii| o[ii] += src[ci]);
    }
    out
}

/// `(N, C, H, W)` to the `(C·k·k, N·out_h·out_w)` patch matrix.
struct Im2Col(Geometry);
/// Adjoint of [`Im2Col`]: scatters a patch matrix back, summing overlaps.
struct Col2Im(Geometry);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let batch = layout.dims()[0];
        let shape = Shape::from((g.rows(), batch * g.cols()));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(unfold(contiguous(v, layout)?, batch, g)),
            CpuStorage::F64(v) => CpuStorage::F64(unfold(contiguous(v, layout)?, batch, g)),
            _ => candle_core::bail!("im2col supports f32 and f64 only"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op1(Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let batch = layout.dims()[1] / g.cols();
        let shape = Shape::from((batch, g.channels, g.height, g.width));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(fold(contiguous(v, layout)?, batch, g)),
            CpuStorage::F64(v) => CpuStorage::F64(fold(contiguous(v, layout)?, batch, g)),
            _ => candle_core::bail!("col2im supports f32 and f64 only"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op1(Im2Col(self.0))?))
    }
}

/// Square-kernel 2-D convolution. `x`: `(N, C_in, H, W)`, `weight`: `(C_out, C_in, k, k)`.
pub fn conv2d(x: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (c_out, c_in, k, k2) = weight.dims4()?;
    if c != c_in || k != k2 {
        candle_core::bail!("conv2d: input has {c} channels, weight expects {c_in} ({k}x{k2} kernel)")
    }
    let g = Geometry::new(c, h, w, k, stride, pad)?;
    let cols = x.contiguous()?.apply_op1(Im2Col(g))?;
    let wmat = weight.reshape((c_out, g.rows()))?;
    let y = wmat.matmul(&cols)?.reshape((c_out, n, g.cols()))?.transpose(0, 1)?;
    y.contiguous()?.reshape((n, c_out, g.out_h, g.out_w))
}

/// Output side length of a transposed convolution.
pub fn conv_transpose_out(len: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (len - 1) * stride + kernel - 2 * pad
}

/// Transposed convolution (the adjoint of [`conv2d`] with the same settings).
/// `x`: `(N, C_in, H, W)`, `weight`: `(C_in, C_out, k, k)`.
pub fn conv_transpose2d(x: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (c_in, c_out, k, k2) = weight.dims4()?;
    if c != c_in || k != k2 {
        candle_core::bail!("conv_transpose2d: input has {c} channels, weight expects {c_in}")
    }
    let g = Geometry::new(c_out, conv_transpose_out(h, k, stride, pad), conv_transpose_out(w, k, stride, pad), k, stride, pad)?;
    debug_assert_eq!((g.out_h, g.out_w), (h, w));
    let wmat = weight.reshape((c_in, g.rows()))?.t()?;
    let xs = x.reshape((n, c, h * w))?.transpose(0, 1)?.contiguous()?.reshape((c, n * h * w))?;
    wmat.matmul(&xs)?.contiguous()?.apply_op1(Col2Im(g))
}

/// Host copy of a tensor's values as `f64`, with its dtype for the way back.
fn host_f64(t: &Tensor) -> Result<(Vec<f64>, DType)> {
    Ok((t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?, t.dtype()))
}

fn from_host(values: Vec<f64>, shape: &[usize], dtype: DType) -> Result<Tensor> {
    Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(dtype)
}

fn map_storage(storage: &CpuStorage, layout: &Layout, f: impl Fn(f64) -> f64) -> Result<CpuStorage> {
    Ok(match storage {
        CpuStorage::F32(v) => CpuStorage::F32(contiguous(v, layout)?.iter().map(|&x| f(x as f64) as f32).collect()),
        CpuStorage::F64(v) => CpuStorage::F64(contiguous(v, layout)?.iter().map(|&x| f(x)).collect()),
        _ => candle_core::bail!("only f32 and f64 are supported"),
    })
}

fn storage_f64(storage: &CpuStorage, layout: &Layout) -> Result<Vec<f64>> {
    Ok(match storage {
        CpuStorage::F32(v) => contiguous(v, layout)?.iter().map(|&x| x as f64).collect(),
        CpuStorage::F64(v) => contiguous(v, layout)?.to_vec(),
        _ => candle_core::bail!("only f32 and f64 are supported"),
    })
}

fn storage_like(like: &CpuStorage, values: Vec<f64>) -> CpuStorage {
    match like {
        CpuStorage::F32(_) => CpuStorage::F32(values.into_iter().map(|v| v as f32).collect()),
        _ => CpuStorage::F64(values),
    }
}

struct LeakyRelu(f64);

impl CustomOp1 for LeakyRelu {
    fn name(&self) -> &'static str {
        "leaky_relu"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> Result<(CpuStorage, Shape)> {
        let slope = self.0;
        Ok((map_storage(storage, layout, |x| if x > 0.0 { x } else { slope * x })?, layout.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> Result<Option<Tensor>> {
        let (x, dtype) = host_f64(arg)?;
        let (g, _) = host_f64(grad_res)?;
        let slope = self.0;
        let dx = x.iter().zip(&g).map(|(&x, &g)| if x > 0.0 { g } else { slope * g }).collect();
        Ok(Some(from_host(dx, arg.dims(), dtype)?))
    }
}

/// `max(x, slope·x)` for `0 <= slope < 1`; the gradient at 0 is `slope`.
pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    x.contiguous()?.apply_op1(LeakyRelu(slope))
}

/// Logistic function via `tanh`, which stays finite for large-magnitude inputs.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    ((x * 0.5)?.tanh()? * 0.5)? + 0.5
}

const NORM_EPS: f64 = 1e-5;

/// Mean and `1 / sqrt(var + eps)` of each contiguous group of `len` values.
fn group_stats(x: &[f64], len: usize) -> Vec<(f64, f64)> {
    x.chunks_exact(len)
        .map(|g| {
            let mean = g.iter().sum::<f64>() / len as f64;
            let var = g.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / len as f64;
            (mean, 1.0 / (var + NORM_EPS).sqrt())
        })
        .collect()
}

struct InstanceNorm {
    channels: usize,
    spatial: usize,
}

impl CustomOp3 for InstanceNorm {
    fn name(&self) -> &'static str {
        "instance_norm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let x = storage_f64(s1, l1)?;
        let (scale, shift) = (storage_f64(s2, l2)?, storage_f64(s3, l3)?);
        let mut out = Vec::with_capacity(x.len());
        for (gi, (group, (mean, inv))) in x.chunks_exact(self.spatial).zip(group_stats(&x, self.spatial)).enumerate() {
            let c = gi % self.channels;
            out.extend(group.iter().map(|v| scale[c] * (v - mean) * inv + shift[c]));
        }
        Ok((storage_like(s1, out), l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        scale: &Tensor,
        _shift: &Tensor,
        _res: &Tensor,
        grad_res: &Tensor,
    ) -> Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (xv, dtype) = host_f64(x)?;
        let (g, _) = host_f64(grad_res)?;
        let (sv, _) = host_f64(scale)?;
        let len = self.spatial as f64;
        let mut dx = vec![0f64; xv.len()];
        let mut dscale = vec![0f64; self.channels];
        let mut dshift = vec![0f64; self.channels];
        for (gi, (mean, inv)) in group_stats(&xv, self.spatial).into_iter().enumerate() {
            let c = gi % self.channels;
            let range = gi * self.spatial..(gi + 1) * self.spatial;
            let (xs, gs) = (&xv[range.clone()], &g[range.clone()]);
            let (mut sum_g, mut sum_gx) = (0.0, 0.0);
            for (&xi, &gi) in xs.iter().zip(gs) {
                sum_g += gi;
                sum_gx += gi * (xi - mean) * inv;
            }
            dshift[c] += sum_g;
            dscale[c] += sum_gx;
            let (mg, mgx) = (sum_g / len, sum_gx / len);
            for ((d, &xi), &gi) in dx[range].iter_mut().zip(xs).zip(gs) {
                *d = sv[c] * inv * (gi - mg - (xi - mean) * inv * mgx);
            }
        }
        Ok((
            Some(from_host(dx, x.dims(), dtype)?),
            Some(from_host(dscale, scale.dims(), scale.dtype())?),
            Some(from_host(dshift, scale.dims(), scale.dtype())?),
        ))
    }
}

/// Per-sample, per-channel normalization over the spatial axes with an affine map.
pub fn instance_norm(x: &Tensor, scale: &Tensor, shift: &Tensor) -> Result<Tensor> {
    let (_, c, h, w) = x.dims4()?;
    if scale.dims() != [c] || shift.dims() != [c] {
        candle_core::bail!("instance_norm: scale and shift must have shape [{c}]")
    }
    x.contiguous()?.apply_op3(&scale.contiguous()?, &shift.contiguous()?, InstanceNorm { channels: c, spatial: h * w })
}
