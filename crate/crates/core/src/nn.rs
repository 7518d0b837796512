//! Minimal CPU neural-network kernels: convolutions, transposed convolutions,
//! linear layers and Adam, generic over `f32` (training) and `f64` (gradient checks).

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;

use crate::error::Error;

pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Send
    + Sync
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::MulAssign
    + 'static
{
    /// `c = alpha * a * b + beta * c` with explicit row/column strides.
    ///
    /// # Safety
    /// Pointers and strides must describe valid, non-aliasing matrices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("representable literal")
    }
}

impl Real for f32 {
    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Strided matrix view used by [`gemm`]: (data, row stride, column stride).
#[derive(Clone, Copy)]
pub struct View<'a, T> {
    pub data: &'a [T],
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> View<'a, T> {
    pub fn rows(data: &'a [T], cols: usize) -> Self {
        View { data, rs: cols, cs: 1 }
    }
    /// Transposed view of a row-major matrix with `cols` columns.
    pub fn t(data: &'a [T], cols: usize) -> Self {
        View { data, rs: 1, cs: cols }
    }
    fn check(&self, r: usize, c: usize) {
        if r > 0 && c > 0 {
            let last = (r - 1) * self.rs + (c - 1) * self.cs;
            assert!(last < self.data.len(), "gemm view out of bounds");
        }
    }
}

/// `c[m×n] = a[m×k] · b[k×n] + beta · c`, with `c` row-major.
pub fn gemm<T: Real>(m: usize, k: usize, n: usize, a: View<T>, b: View<T>, beta: T, c: &mut [T]) {
    a.check(m, k);
    b.check(k, n);
    assert!(c.len() >= m * n, "gemm output too small");
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: bounds checked above; `c` is a distinct mutable slice.
    unsafe {
        T::raw_gemm(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![T::zero(); shape.iter().product()] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self, Error> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!("shape {:?} needs {} values, got {}", shape, n, data.len())));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dims4(&self) -> [usize; 4] {
        assert_eq!(self.shape.len(), 4, "expected a 4-d tensor, got {:?}", self.shape);
        [self.shape[0], self.shape[1], self.shape[2], self.shape[3]]
    }

    /// Size of one batch item.
    pub fn item_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn item(&self, i: usize) -> &[T] {
        let n = self.item_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn item_mut(&mut self, i: usize) -> &mut [T] {
        let n = self.item_len();
        &mut self.data[i * n..(i + 1) * n]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64().unwrap()).unwrap()).collect(),
        }
    }
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient through a ReLU given its output.
pub fn relu_backward<T: Real>(out: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let data = out
        .data
        .iter()
        .zip(&dy.data)
        .map(|(&o, &g)| if o > T::zero() { g } else { T::zero() })
        .collect();
    Tensor { shape: dy.shape.clone(), data }
}

/// Named trainable array with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Real> Param<T> {
    pub fn zeros(name: &str, shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Param { name: name.to_string(), shape: shape.to_vec(), value: vec![T::zero(); n], grad: vec![T::zero(); n] }
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn uniform<R: Rng>(name: &str, shape: &[usize], fan_in: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(name, shape);
        let bound = 1.0 / (fan_in as f64).sqrt();
        for v in &mut p.value {
            *v = T::lit(rng.gen_range(-bound..bound));
        }
        p
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }

    pub fn cast<U: Real>(&self) -> Param<U> {
        let c = |v: &Vec<T>| v.iter().map(|x| U::from_f64(x.to_f64().unwrap()).unwrap()).collect();
        Param { name: self.name.clone(), shape: self.shape.clone(), value: c(&self.value), grad: c(&self.grad) }
    }
}

/// Layout `[c*k*k, oh*ow]` patches of a `[c, h, w]` image.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, k: usize, s: usize, p: usize, oh: usize, ow: usize, cols: &mut [T]) {
    let hw = oh * ow;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..oh {
                    let iy = (oy * s + ky) as isize - p as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * s + kx) as isize - p as isize;
                        *v = if ix < 0 || ix >= w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add patches back into `[c, h, w]`.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(cols: &[T], c: usize, h: usize, w: usize, k: usize, s: usize, p: usize, oh: usize, ow: usize, x: &mut [T]) {
    let hw = oh * ow;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..oh {
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ci * h + iy as usize) * w;
                    for ox in 0..ow {
                        let ix = (ox * s + kx) as isize - p as isize;
                        if ix >= 0 && ix < w as isize {
                            x[base + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv_out(n: usize, k: usize, s: usize, p: usize) -> Option<usize> {
    (n + 2 * p).checked_sub(k).map(|v| v / s + 1)
}

#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Real> Conv2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(name: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: usize, rng: &mut R) -> Self {
        let fan_in = cin * k * k;
        Conv2d {
            weight: Param::uniform(&format!("{name}.weight"), &[cout, cin, k, k], fan_in, rng),
            bias: Param::uniform(&format!("{name}.bias"), &[cout], fan_in, rng),
            cin,
            cout,
            k,
            stride,
            pad,
        }
    }

    pub fn out_size(&self, n: usize) -> usize {
        conv_out(n, self.k, self.stride, self.pad).expect("input smaller than kernel")
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let [b, c, h, w] = x.dims4();
        assert_eq!(c, self.cin, "conv input channels");
        let (oh, ow) = (self.out_size(h), self.out_size(w));
        let (ckk, hw) = (self.cin * self.k * self.k, oh * ow);
        let mut y = Tensor::zeros(&[b, self.cout, oh, ow]);
        let mut cols = vec![T::zero(); ckk * hw];
        for i in 0..b {
            im2col(x.item(i), c, h, w, self.k, self.stride, self.pad, oh, ow, &mut cols);
            let yi = y.item_mut(i);
            for (o, &bv) in self.bias.value.iter().enumerate() {
                yi[o * hw..(o + 1) * hw].iter_mut().for_each(|v| *v = bv);
            }
            gemm(self.cout, ckk, hw, View::rows(&self.weight.value, ckk), View::rows(&cols, hw), T::one(), yi);
        }
        y
    }

    /// Accumulates parameter gradients; returns the input gradient when asked.
    pub fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>, need_dx: bool) -> Option<Tensor<T>> {
        let [b, c, h, w] = x.dims4();
        let [_, _, oh, ow] = dy.dims4();
        let (ckk, hw) = (self.cin * self.k * self.k, oh * ow);
        let mut cols = vec![T::zero(); ckk * hw];
        let mut dx = need_dx.then(|| Tensor::zeros(&x.shape));
        for i in 0..b {
            let dyi = dy.item(i);
            for o in 0..self.cout {
                self.bias.grad[o] += dyi[o * hw..(o + 1) * hw].iter().copied().sum();
            }
            im2col(x.item(i), c, h, w, self.k, self.stride, self.pad, oh, ow, &mut cols);
            gemm(self.cout, hw, ckk, View::rows(dyi, hw), View::t(&cols, hw), T::one(), &mut self.weight.grad);
            if let Some(dx) = dx.as_mut() {
                gemm(ckk, self.cout, hw, View::t(&self.weight.value, ckk), View::rows(dyi, hw), T::zero(), &mut cols);
                col2im(&cols, c, h, w, self.k, self.stride, self.pad, oh, ow, dx.item_mut(i));
            }
        }
        dx
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }
}

/// Transposed convolution; weight layout `[cin, cout, k, k]`.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub output_pad: usize,
}

impl<T: Real> ConvTranspose2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        output_pad: usize,
        rng: &mut R,
    ) -> Self {
        assert!(output_pad < stride.max(1) || output_pad == 0, "output padding must be below stride");
        let fan_in = cout * k * k;
        ConvTranspose2d {
            weight: Param::uniform(&format!("{name}.weight"), &[cin, cout, k, k], fan_in, rng),
            bias: Param::uniform(&format!("{name}.bias"), &[cout], fan_in, rng),
            cin,
            cout,
            k,
            stride,
            pad,
            output_pad,
        }
    }

    pub fn out_size(&self, n: usize) -> usize {
        (n - 1) * self.stride + self.k + self.output_pad - 2 * self.pad
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let [b, c, h, w] = x.dims4();
        assert_eq!(c, self.cin, "transposed conv input channels");
        let (oh, ow) = (self.out_size(h), self.out_size(w));
        let (ckk, hw) = (self.cout * self.k * self.k, h * w);
        let mut y = Tensor::zeros(&[b, self.cout, oh, ow]);
        let mut cols = vec![T::zero(); ckk * hw];
        let ohw = oh * ow;
        for i in 0..b {
            gemm(ckk, self.cin, hw, View::t(&self.weight.value, ckk), View::rows(x.item(i), hw), T::zero(), &mut cols);
            let yi = y.item_mut(i);
            for (o, &bv) in self.bias.value.iter().enumerate() {
                yi[o * ohw..(o + 1) * ohw].iter_mut().for_each(|v| *v = bv);
            }
            col2im(&cols, self.cout, oh, ow, self.k, self.stride, self.pad, h, w, yi);
        }
        y
    }

    pub fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>, need_dx: bool) -> Option<Tensor<T>> {
        let [b, _, h, w] = x.dims4();
        let [_, _, oh, ow] = dy.dims4();
        let (ckk, hw, ohw) = (self.cout * self.k * self.k, h * w, oh * ow);
        let mut cols = vec![T::zero(); ckk * hw];
        let mut dx = need_dx.then(|| Tensor::zeros(&x.shape));
        for i in 0..b {
            let dyi = dy.item(i);
            for o in 0..self.cout {
                self.bias.grad[o] += dyi[o * ohw..(o + 1) * ohw].iter().copied().sum();
            }
            im2col(dyi, self.cout, oh, ow, self.k, self.stride, self.pad, h, w, &mut cols);
            gemm(self.cin, hw, ckk, View::rows(x.item(i), hw), View::t(&cols, hw), T::one(), &mut self.weight.grad);
            if let Some(dx) = dx.as_mut() {
                gemm(self.cin, ckk, hw, View::rows(&self.weight.value, ckk), View::rows(&cols, hw), T::zero(), dx.item_mut(i));
            }
        }
        dx
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }
}

#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub din: usize,
    pub dout: usize,
}

impl<T: Real> Linear<T> {
    pub fn new<R: Rng>(name: &str, din: usize, dout: usize, rng: &mut R) -> Self {
        Linear {
            weight: Param::uniform(&format!("{name}.weight"), &[dout, din], din, rng),
            bias: Param::uniform(&format!("{name}.bias"), &[dout], din, rng),
            din,
            dout,
        }
    }

    /// `x` is `[b, din]` (any trailing shape flattened).
    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let b = x.shape[0];
        assert_eq!(x.item_len(), self.din, "linear input width");
        let mut y = Tensor::zeros(&[b, self.dout]);
        for i in 0..b {
            y.item_mut(i).copy_from_slice(&self.bias.value);
        }
        gemm(b, self.din, self.dout, View::rows(&x.data, self.din), View::t(&self.weight.value, self.din), T::one(), &mut y.data);
        y
    }

    pub fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>, need_dx: bool) -> Option<Tensor<T>> {
        let b = x.shape[0];
        for i in 0..b {
            for (g, &d) in self.bias.grad.iter_mut().zip(dy.item(i)) {
                *g += d;
            }
        }
        gemm(self.dout, b, self.din, View::t(&dy.data, self.dout), View::rows(&x.data, self.din), T::one(), &mut self.weight.grad);
        need_dx.then(|| {
            let mut dx = Tensor::zeros(&x.shape);
            gemm(b, self.dout, self.din, View::rows(&dy.data, self.dout), View::rows(&self.weight.value, self.din), T::zero(), &mut dx.data);
            dx
        })
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }
}

/// `x + conv1x1(relu(conv3x3(relu(x))))`.
#[derive(Debug, Clone)]
pub struct Residual<T> {
    pub conv3: Conv2d<T>,
    pub conv1: Conv2d<T>,
}

#[derive(Debug, Clone)]
pub struct ResidualTrace<T> {
    t1: Tensor<T>,
    t3: Tensor<T>,
}

impl<T: Real> Residual<T> {
    pub fn new<R: Rng>(name: &str, c: usize, rng: &mut R) -> Self {
        Residual {
            conv3: Conv2d::new(&format!("{name}.conv3"), c, c, 3, 1, 1, rng),
            conv1: Conv2d::new(&format!("{name}.conv1"), c, c, 1, 1, 0, rng),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, ResidualTrace<T>) {
        let t1 = relu(x);
        let t3 = relu(&self.conv3.forward(&t1));
        let mut y = self.conv1.forward(&t3);
        y.data.iter_mut().zip(&x.data).for_each(|(a, &b)| *a += b);
        (y, ResidualTrace { t1, t3 })
    }

    pub fn backward(&mut self, x: &Tensor<T>, tr: &ResidualTrace<T>, dy: &Tensor<T>) -> Tensor<T> {
        let d3 = self.conv1.backward(&tr.t3, dy, true).unwrap();
        let d2 = relu_backward(&tr.t3, &d3);
        let d1 = self.conv3.backward(&tr.t1, &d2, true).unwrap();
        let mut dx = dy.clone();
        for ((g, &d), &xi) in dx.data.iter_mut().zip(&d1.data).zip(&x.data) {
            if xi > T::zero() {
                *g += d;
            }
        }
        dx
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.conv3.params_mut();
        v.extend(self.conv1.params_mut());
        v
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut v = self.conv3.params();
        v.extend(self.conv1.params());
        v
    }
}

/// Adam with bias correction; state is keyed by parameter order.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step(&mut self, params: &mut [&mut Param<T>]) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![T::zero(); p.value.len()]).collect();
            self.v = self.m.clone();
        }
        assert_eq!(self.m.len(), params.len(), "optimizer bound to a different parameter set");
        self.t += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let step = T::lit(self.lr * c2.sqrt() / c1);
        let eps = T::lit(self.eps * c2.sqrt());
        for (p, (m, v)) in params.iter_mut().zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = b1 * m[i] + (T::one() - b1) * g;
                v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                p.value[i] = p.value[i] - step * m[i] / (v[i].sqrt() + eps);
            }
        }
    }
}

pub fn zero_grads<T: Real>(params: &mut [&mut Param<T>]) {
    params.iter_mut().for_each(|p| p.zero_grad());
}

/// Numerically stable log-softmax over the last axis of `[b, n]`.
pub fn log_softmax<T: Real>(logits: &Tensor<T>) -> Tensor<T> {
    let n = logits.item_len();
    let mut out = logits.clone();
    for row in out.data.chunks_mut(n) {
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
        row.iter_mut().for_each(|v| *v = *v - lse);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn direct_conv(x: &Tensor<f64>, c: &Conv2d<f64>) -> Tensor<f64> {
        let [b, ci, h, w] = x.dims4();
        let (oh, ow) = (c.out_size(h), c.out_size(w));
        let mut y = Tensor::zeros(&[b, c.cout, oh, ow]);
        for n in 0..b {
            for o in 0..c.cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = c.bias.value[o];
                        for i in 0..ci {
                            for ky in 0..c.k {
                                for kx in 0..c.k {
                                    let iy = (oy * c.stride + ky) as isize - c.pad as isize;
                                    let ix = (ox * c.stride + kx) as isize - c.pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        s += c.weight.value[((o * ci + i) * c.k + ky) * c.k + kx]
                                            * x.data[((n * ci + i) * h + iy as usize) * w + ix as usize];
                                    }
                                }
                            }
                        }
                        y.data[((n * c.cout + o) * oh + oy) * ow + ox] = s;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let conv = Conv2d::<f64>::new("c", 2, 3, 4, 2, 1, &mut rng);
        let x = rand_tensor(&[2, 2, 9, 9], &mut rng);
        let a = conv.forward(&x);
        let b = direct_conv(&x, &conv);
        assert_eq!(a.shape, vec![2, 3, 4, 4]);
        for (u, v) in a.data.iter().zip(&b.data) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn transposed_conv_is_adjoint_of_conv() {
        // <conv(x), y> == <x, convT(y)> when biases are zero and weights are shared.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut conv = Conv2d::<f64>::new("c", 2, 3, 4, 2, 1, &mut rng);
        let mut tconv = ConvTranspose2d::<f64>::new("t", 3, 2, 4, 2, 1, 1, &mut rng);
        conv.bias.value.iter_mut().for_each(|v| *v = 0.0);
        tconv.bias.value.iter_mut().for_each(|v| *v = 0.0);
        tconv.weight.value = conv.weight.value.clone();
        let x = rand_tensor(&[1, 2, 11, 11], &mut rng);
        let y = rand_tensor(&[1, 3, 5, 5], &mut rng);
        let cx = conv.forward(&x);
        let ty = tconv.forward(&y);
        assert_eq!(ty.shape, x.shape);
        let lhs: f64 = cx.data.iter().zip(&y.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data.iter().zip(&ty.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    fn check_layer_grad<F, B>(x: &Tensor<f64>, params: usize, fwd: F, mut bwd: B)
    where
        F: Fn(&Tensor<f64>, usize, f64) -> f64,
        B: FnMut(&Tensor<f64>) -> (Tensor<f64>, Vec<f64>),
    {
        // loss = sum(out * r) for fixed r baked into fwd; bwd returns (dx, flat param grads)
        let (dx, dp) = bwd(x);
        let h = 1e-6;
        for i in (0..x.len()).step_by(7) {
            let mut xp = x.clone();
            xp.data[i] += h;
            let mut xm = x.clone();
            xm.data[i] -= h;
            let fd = (fwd(&xp, usize::MAX, 0.0) - fwd(&xm, usize::MAX, 0.0)) / (2.0 * h);
            assert!((fd - dx.data[i]).abs() < 1e-6 * (1.0 + fd.abs()), "dx[{i}] {fd} vs {}", dx.data[i]);
        }
        for j in (0..params).step_by(5) {
            let fd = (fwd(x, j, h) - fwd(x, j, -h)) / (2.0 * h);
            assert!((fd - dp[j]).abs() < 1e-6 * (1.0 + fd.abs()), "dp[{j}] {fd} vs {}", dp[j]);
        }
    }

    fn flat_params(ps: Vec<&Param<f64>>) -> (Vec<f64>, Vec<f64>) {
        let mut v = Vec::new();
        let mut g = Vec::new();
        for p in ps {
            v.extend(&p.value);
            g.extend(&p.grad);
        }
        (v, g)
    }

    fn set_flat(ps: Vec<&mut Param<f64>>, j: usize, delta: f64) {
        let mut off = 0;
        for p in ps {
            if j >= off && j < off + p.value.len() {
                p.value[j - off] += delta;
                return;
            }
            off += p.value.len();
        }
    }

    #[test]
    fn conv_and_tconv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let conv = Conv2d::<f64>::new("c", 2, 3, 4, 2, 1, &mut rng);
        let x = rand_tensor(&[2, 2, 7, 7], &mut rng);
        let r = rand_tensor(&[2, 3, 3, 3], &mut rng);
        let n = flat_params(conv.params()).0.len();
        let fwd = |x: &Tensor<f64>, j: usize, d: f64| {
            let mut c = conv.clone();
            if j != usize::MAX {
                set_flat(c.params_mut(), j, d);
            }
            c.forward(x).data.iter().zip(&r.data).map(|(a, b)| a * b).sum()
        };
        check_layer_grad(&x, n, fwd, |x| {
            let mut c = conv.clone();
            let dx = c.backward(x, &r, true).unwrap();
            (dx, flat_params(c.params()).1)
        });

        let tconv = ConvTranspose2d::<f64>::new("t", 2, 3, 4, 2, 1, 1, &mut rng);
        let r = rand_tensor(&[2, 3, 15, 15], &mut rng);
        let n = flat_params(tconv.params()).0.len();
        let fwd = |x: &Tensor<f64>, j: usize, d: f64| {
            let mut c = tconv.clone();
            if j != usize::MAX {
                set_flat(c.params_mut(), j, d);
            }
            c.forward(x).data.iter().zip(&r.data).map(|(a, b)| a * b).sum()
        };
        check_layer_grad(&x, n, fwd, |x| {
            let mut c = tconv.clone();
            let dx = c.backward(x, &r, true).unwrap();
            (dx, flat_params(c.params()).1)
        });
    }

    #[test]
    fn linear_and_residual_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let lin = Linear::<f64>::new("l", 6, 4, &mut rng);
        let x = rand_tensor(&[3, 6], &mut rng);
        let r = rand_tensor(&[3, 4], &mut rng);
        let n = flat_params(lin.params()).0.len();
        let fwd = |x: &Tensor<f64>, j: usize, d: f64| {
            let mut c = lin.clone();
            if j != usize::MAX {
                set_flat(c.params_mut(), j, d);
            }
            c.forward(x).data.iter().zip(&r.data).map(|(a, b)| a * b).sum()
        };
        check_layer_grad(&x, n, fwd, |x| {
            let mut c = lin.clone();
            let dx = c.backward(x, &r, true).unwrap();
            (dx, flat_params(c.params()).1)
        });

        let res = Residual::<f64>::new("r", 2, &mut rng);
        let x = rand_tensor(&[2, 2, 4, 4], &mut rng);
        let r = rand_tensor(&[2, 2, 4, 4], &mut rng);
        let n = flat_params(res.params()).0.len();
        let fwd = |x: &Tensor<f64>, j: usize, d: f64| {
            let mut c = res.clone();
            if j != usize::MAX {
                set_flat(c.params_mut(), j, d);
            }
            c.forward(x).0.data.iter().zip(&r.data).map(|(a, b)| a * b).sum()
        };
        check_layer_grad(&x, n, fwd, |x| {
            let mut c = res.clone();
            let (_, tr) = c.forward(x);
            let dx = c.backward(x, &tr, &r);
            (dx, flat_params(c.params()).1)
        });
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = Param::<f64>::zeros("p", &[2]);
        p.grad = vec![3.0, -0.5];
        let mut opt = Adam::new(0.1);
        opt.step(&mut [&mut p]);
        assert!((p.value[0] + 0.1).abs() < 1e-6);
        assert!((p.value[1] - 0.1).abs() < 1e-6);
    }

    #[test]
    fn log_softmax_is_stable() {
        let t = Tensor::from_vec(&[1, 3], vec![1000.0f64, 1000.0, 1000.0]).unwrap();
        let l = log_softmax(&t);
        for v in l.data {
            assert!((v + 3f64.ln()).abs() < 1e-12);
        }
    }
}
