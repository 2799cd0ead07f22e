use rand::Rng;

use super::scalar::Scalar;
use super::tensor::Tensor;

/// Trainable tensor together with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Scalar> Param<T> {
    fn zeros(name: String, shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            name,
            shape,
            value: vec![T::ZERO; len],
            grad: vec![T::ZERO; len],
        }
    }

    fn filled(name: String, shape: Vec<usize>, v: f64) -> Self {
        let mut p = Self::zeros(name, shape);
        p.value.fill(T::from_f64(v));
        p
    }

    fn uniform<R: Rng + ?Sized>(name: String, shape: Vec<usize>, bound: f64, rng: &mut R) -> Self {
        let mut p = Self::zeros(name, shape);
        for v in &mut p.value {
            *v = T::from_f64(rng.random_range(-bound..bound));
        }
        p
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::ZERO);
    }
}

/// Non-trainable state (batch-norm running statistics).
#[derive(Debug, Clone)]
pub struct Buffer<T> {
    pub name: String,
    pub value: Vec<T>,
}

/// Output positions `o` in `0..n_out` whose input index `o * stride + shift`
/// lies in `0..n_in`.
fn valid_span(n_in: usize, n_out: usize, stride: usize, shift: isize) -> (usize, usize) {
    let lo = if shift < 0 { ((-shift) as usize).div_ceil(stride) } else { 0 };
    let last = n_in as isize - 1 - shift;
    let hi = if last < 0 { 0 } else { (last as usize / stride + 1).min(n_out) };
    (lo.min(hi), hi)
}

/// Unfolds one `c x h x w` item into a `(c*k*k) x (oh*ow)` patch matrix
/// whose rows start `ld` elements apart.
#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    cols: &mut [T],
    ld: usize,
) {
    let p = oh * ow;
    for ky in 0..k {
        let (ylo, yhi) = valid_span(h, oh, stride, ky as isize - pad as isize);
        for kx in 0..k {
            let shift = kx as isize - pad as isize;
            let (xlo, xhi) = valid_span(w, ow, stride, shift);
            for ch in 0..c {
                let src = &x[ch * h * w..(ch + 1) * h * w];
                let row = &mut cols[((ch * k + ky) * k + kx) * ld..][..p];
                row[..ylo * ow].fill(T::ZERO);
                row[yhi * ow..].fill(T::ZERO);
                for oy in ylo..yhi {
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    let line = &src[(oy * stride + ky - pad) * w..][..w];
                    dst[..xlo].fill(T::ZERO);
                    dst[xhi..].fill(T::ZERO);
                    let start = (xlo * stride) as isize + shift;
                    for (j, d) in dst[xlo..xhi].iter_mut().enumerate() {
                        *d = line[start as usize + j * stride];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds patches back into a `c x h x w` item.
#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im<T: Scalar>(
    cols: &[T],
    ld: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    x: &mut [T],
) {
    let p = oh * ow;
    for ky in 0..k {
        let (ylo, yhi) = valid_span(h, oh, stride, ky as isize - pad as isize);
        for kx in 0..k {
            let shift = kx as isize - pad as isize;
            let (xlo, xhi) = valid_span(w, ow, stride, shift);
            let start = ((xlo * stride) as isize + shift) as usize;
            for ch in 0..c {
                let dst = &mut x[ch * h * w..(ch + 1) * h * w];
                let row = &cols[((ch * k + ky) * k + kx) * ld..][..p];
                for oy in ylo..yhi {
                    let line = &mut dst[(oy * stride + ky - pad) * w..][..w];
                    for (j, v) in row[oy * ow + xlo..oy * ow + xhi].iter().enumerate() {
                        line[start + j * stride] += *v;
                    }
                }
            }
        }
    }
}

/// `n x c x p` to `c x (n*p)`.
fn to_channel_major<T: Scalar>(data: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; data.len()];
    for i in 0..n {
        for ch in 0..c {
            out[ch * n * p + i * p..][..p].copy_from_slice(&data[(i * c + ch) * p..][..p]);
        }
    }
    out
}

/// `c x (n*p)` to `n x c x p`, adding a per-channel bias when given.
fn from_channel_major<T: Scalar>(data: &[T], n: usize, c: usize, p: usize, bias: Option<&[T]>) -> Vec<T> {
    let mut out = vec![T::ZERO; data.len()];
    for i in 0..n {
        for ch in 0..c {
            let dst = &mut out[(i * c + ch) * p..][..p];
            dst.copy_from_slice(&data[ch * n * p + i * p..][..p]);
            if let Some(b) = bias {
                for v in dst.iter_mut() {
                    *v += b[ch];
                }
            }
        }
    }
    out
}

/// Row sums of a `c x m` matrix added into `grad`.
fn accumulate_bias_grad<T: Scalar>(grad: &mut [T], rows: &[T], m: usize) {
    for (ch, g) in grad.iter_mut().enumerate() {
        let mut s = T::ZERO;
        for v in &rows[ch * m..(ch + 1) * m] {
            s += *v;
        }
        *g += s;
    }
}

/// 2-D convolution; weight layout `cout x cin x k x k`.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> Conv2d<T> {
    /// Weights and biases drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`,
    /// `fan_in = cin * k * k`.
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / ((cin * k * k) as f64).sqrt();
        Self {
            cin,
            cout,
            k,
            stride,
            pad,
            weight: Param::uniform(format!("{name}.weight"), vec![cout, cin, k, k], bound, rng),
            bias: Param::uniform(format!("{name}.bias"), vec![cout], bound, rng),
        }
    }

    pub fn out_size(&self, n: usize) -> usize {
        (n + 2 * self.pad - self.k) / self.stride + 1
    }

    /// Patch matrix of the whole batch, `(cin*k*k) x (n*oh*ow)`.
    fn patches(&self, x: &Tensor<T>, oh: usize, ow: usize) -> Vec<T> {
        let (p, ld) = (oh * ow, x.n * oh * ow);
        let mut cols = vec![T::ZERO; self.cin * self.k * self.k * ld];
        for i in 0..x.n {
            im2col(x.item(i), x.c, x.h, x.w, self.k, self.stride, self.pad, oh, ow, &mut cols[i * p..], ld);
        }
        cols
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.c, self.cin, "conv input channels");
        let (oh, ow) = (self.out_size(x.h), self.out_size(x.w));
        let rows = self.cin * self.k * self.k;
        let np = x.n * oh * ow;
        let cols = self.patches(x, oh, ow);
        let mut y = vec![T::ZERO; self.cout * np];
        T::gemm(self.cout, rows, np, &self.weight.value, false, &cols, false, &mut y, false);
        let data = from_channel_major(&y, x.n, self.cout, oh * ow, Some(&self.bias.value));
        Tensor { n: x.n, c: self.cout, h: oh, w: ow, data }
    }

    /// Accumulates parameter gradients and returns the input gradient when
    /// `need_dx` is set.
    pub fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>, need_dx: bool) -> Option<Tensor<T>> {
        let (oh, ow) = (dy.h, dy.w);
        let rows = self.cin * self.k * self.k;
        let (p, np) = (oh * ow, x.n * oh * ow);
        let cols = self.patches(x, oh, ow);
        let dy = to_channel_major(&dy.data, x.n, self.cout, p);
        T::gemm(self.cout, np, rows, &dy, false, &cols, true, &mut self.weight.grad, true);
        accumulate_bias_grad(&mut self.bias.grad, &dy, np);
        need_dx.then(|| {
            let mut dcols = cols;
            T::gemm(rows, self.cout, np, &self.weight.value, true, &dy, false, &mut dcols, false);
            let mut dx = Tensor::zeros(x.n, x.c, x.h, x.w);
            for i in 0..x.n {
                col2im(&dcols[i * p..], np, x.c, x.h, x.w, self.k, self.stride, self.pad, oh, ow, dx.item_mut(i));
            }
            dx
        })
    }

    pub fn params_mut(&mut self) -> [&mut Param<T>; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> [&Param<T>; 2] {
        [&self.weight, &self.bias]
    }
}

/// Transposed 2-D convolution; weight layout `cin x cout x k x k`.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d<T> {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> ConvTranspose2d<T> {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / ((cin * k * k) as f64).sqrt();
        Self {
            cin,
            cout,
            k,
            stride,
            pad,
            weight: Param::uniform(format!("{name}.weight"), vec![cin, cout, k, k], bound, rng),
            bias: Param::uniform(format!("{name}.bias"), vec![cout], bound, rng),
        }
    }

    pub fn out_size(&self, n: usize) -> usize {
        (n - 1) * self.stride + self.k - 2 * self.pad
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.c, self.cin, "transposed conv input channels");
        let (oh, ow) = (self.out_size(x.h), self.out_size(x.w));
        let rows = self.cout * self.k * self.k;
        let (p, np) = (x.plane(), x.n * x.plane());
        let xs = to_channel_major(&x.data, x.n, x.c, p);
        let mut cols = vec![T::ZERO; rows * np];
        T::gemm(rows, self.cin, np, &self.weight.value, true, &xs, false, &mut cols, false);
        let mut y = Tensor::zeros(x.n, self.cout, oh, ow);
        let plane = oh * ow;
        for i in 0..x.n {
            let yi = y.item_mut(i);
            col2im(&cols[i * p..], np, self.cout, oh, ow, self.k, self.stride, self.pad, x.h, x.w, yi);
            for (ch, b) in self.bias.value.iter().enumerate() {
                for v in &mut yi[ch * plane..(ch + 1) * plane] {
                    *v += *b;
                }
            }
        }
        y
    }

    pub fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>, need_dx: bool) -> Option<Tensor<T>> {
        let rows = self.cout * self.k * self.k;
        let (p, np) = (x.plane(), x.n * x.plane());
        let mut dcols = vec![T::ZERO; rows * np];
        for i in 0..x.n {
            im2col(dy.item(i), self.cout, dy.h, dy.w, self.k, self.stride, self.pad, x.h, x.w, &mut dcols[i * p..], np);
        }
        let xs = to_channel_major(&x.data, x.n, x.c, p);
        T::gemm(self.cin, np, rows, &xs, false, &dcols, true, &mut self.weight.grad, true);
        let dys = to_channel_major(&dy.data, dy.n, dy.c, dy.plane());
        accumulate_bias_grad(&mut self.bias.grad, &dys, dy.n * dy.plane());
        need_dx.then(|| {
            let mut dxs = vec![T::ZERO; self.cin * np];
            T::gemm(self.cin, rows, np, &self.weight.value, false, &dcols, false, &mut dxs, false);
            let data = from_channel_major(&dxs, x.n, self.cin, p, None);
            Tensor { n: x.n, c: self.cin, h: x.h, w: x.w, data }
        })
    }

    pub fn params_mut(&mut self) -> [&mut Param<T>; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> [&Param<T>; 2] {
        [&self.weight, &self.bias]
    }
}

/// Per-channel batch normalization over `N x H x W`.
#[derive(Debug, Clone)]
pub struct BatchNorm2d<T> {
    pub channels: usize,
    pub momentum: f64,
    pub eps: f64,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Buffer<T>,
    pub running_var: Buffer<T>,
}

#[derive(Debug, Clone)]
pub struct BnCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(name: &str, channels: usize, momentum: f64, eps: f64) -> Self {
        Self {
            channels,
            momentum,
            eps,
            gamma: Param::filled(format!("{name}.gamma"), vec![channels], 1.0),
            beta: Param::zeros(format!("{name}.beta"), vec![channels]),
            running_mean: Buffer {
                name: format!("{name}.running_mean"),
                value: vec![T::ZERO; channels],
            },
            running_var: Buffer {
                name: format!("{name}.running_var"),
                value: vec![T::ONE; channels],
            },
        }
    }

    /// Normalizes with batch statistics and updates the running estimates
    /// (the variance estimate uses the unbiased batch variance).
    pub fn forward_train(&mut self, x: &Tensor<T>) -> (Tensor<T>, BnCache<T>) {
        let plane = x.plane();
        let count = (x.n * plane) as f64;
        let mut xhat = Tensor::zeros(x.n, x.c, x.h, x.w);
        let mut y = Tensor::zeros(x.n, x.c, x.h, x.w);
        let mut inv_std = vec![T::ZERO; x.c];
        for ch in 0..x.c {
            let mut sum = 0.0;
            for i in 0..x.n {
                sum += x.item(i)[ch * plane..(ch + 1) * plane].iter().map(|v| v.to_f64()).sum::<f64>();
            }
            let mean = sum / count;
            let mut sq = 0.0;
            for i in 0..x.n {
                sq += x.item(i)[ch * plane..(ch + 1) * plane]
                    .iter()
                    .map(|v| (v.to_f64() - mean).powi(2))
                    .sum::<f64>();
            }
            let var = sq / count;
            let istd = 1.0 / (var + self.eps).sqrt();
            inv_std[ch] = T::from_f64(istd);
            let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
            let (m_t, istd_t) = (T::from_f64(mean), T::from_f64(istd));
            for i in 0..x.n {
                let off = i * x.item_len() + ch * plane;
                for j in off..off + plane {
                    let xh = (x.data[j] - m_t) * istd_t;
                    xhat.data[j] = xh;
                    y.data[j] = g * xh + b;
                }
            }
            let m = self.momentum;
            let unbiased = sq / (count - 1.0).max(1.0);
            let rm = &mut self.running_mean.value[ch];
            *rm = T::from_f64((1.0 - m) * rm.to_f64() + m * mean);
            let rv = &mut self.running_var.value[ch];
            *rv = T::from_f64((1.0 - m) * rv.to_f64() + m * unbiased);
        }
        (y, BnCache { xhat, inv_std })
    }

    pub fn forward_eval(&self, x: &Tensor<T>) -> Tensor<T> {
        let plane = x.plane();
        let mut y = x.clone();
        for ch in 0..x.c {
            let istd = 1.0 / (self.running_var.value[ch].to_f64() + self.eps).sqrt();
            let scale = T::from_f64(self.gamma.value[ch].to_f64() * istd);
            let shift = self.beta.value[ch] - self.running_mean.value[ch] * scale;
            for i in 0..x.n {
                let off = i * x.item_len() + ch * plane;
                for v in &mut y.data[off..off + plane] {
                    *v = *v * scale + shift;
                }
            }
        }
        y
    }

    pub fn backward(&mut self, cache: &BnCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let xhat = &cache.xhat;
        let plane = dy.plane();
        let count = (dy.n * plane) as f64;
        let mut dx = Tensor::zeros(dy.n, dy.c, dy.h, dy.w);
        for ch in 0..dy.c {
            let (mut sdy, mut sdyx) = (0.0, 0.0);
            for i in 0..dy.n {
                let off = i * dy.item_len() + ch * plane;
                for j in off..off + plane {
                    let d = dy.data[j].to_f64();
                    sdy += d;
                    sdyx += d * xhat.data[j].to_f64();
                }
            }
            self.gamma.grad[ch] += T::from_f64(sdyx);
            self.beta.grad[ch] += T::from_f64(sdy);
            let scale = self.gamma.value[ch] * cache.inv_std[ch];
            let (mdy, mdyx) = (T::from_f64(sdy / count), T::from_f64(sdyx / count));
            for i in 0..dy.n {
                let off = i * dy.item_len() + ch * plane;
                for j in off..off + plane {
                    dx.data[j] = scale * (dy.data[j] - mdy - xhat.data[j] * mdyx);
                }
            }
        }
        dx
    }

    pub fn params_mut(&mut self) -> [&mut Param<T>; 2] {
        [&mut self.gamma, &mut self.beta]
    }

    pub fn params(&self) -> [&Param<T>; 2] {
        [&self.gamma, &self.beta]
    }

    pub fn buffers_mut(&mut self) -> [&mut Buffer<T>; 2] {
        [&mut self.running_mean, &mut self.running_var]
    }

    pub fn buffers(&self) -> [&Buffer<T>; 2] {
        [&self.running_mean, &self.running_var]
    }
}

pub(crate) fn relu_inplace<T: Scalar>(t: &mut Tensor<T>) {
    for v in &mut t.data {
        if *v < T::ZERO {
            *v = T::ZERO;
        }
    }
}

/// Gradient through a ReLU given its output.
pub(crate) fn relu_backward<T: Scalar>(out: &Tensor<T>, dy: &mut Tensor<T>) {
    for (d, y) in dy.data.iter_mut().zip(&out.data) {
        if *y <= T::ZERO {
            *d = T::ZERO;
        }
    }
}
