//! Strided 2-D convolution and transposed convolution via im2col + GEMM.
//!
//! Both layers share one index map between a "big" grid (convolution input,
//! transposed-convolution output) and a "small" grid (convolution output,
//! transposed-convolution input): `big = small·stride − pad + tap`.

use super::{matmul, Param, Scalar, Tensor};

/// Column buffers are built for as many images at once as fit this budget.
const CHUNK_ELEMS: usize = 1 << 21;

pub fn conv_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

pub fn conv_transpose_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input - 1) * stride + kernel - 2 * pad
}

#[derive(Debug, Clone, Copy)]
struct Geom {
    c_big: usize,
    h_big: usize,
    w_big: usize,
    h_small: usize,
    w_small: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl Geom {
    fn rows(&self) -> usize {
        self.c_big * self.k * self.k
    }

    fn small(&self) -> usize {
        self.h_small * self.w_small
    }

    fn big(&self) -> usize {
        self.c_big * self.h_big * self.w_big
    }

    fn chunk(&self, n: usize) -> usize {
        (CHUNK_ELEMS / (self.rows() * self.small()).max(1)).clamp(1, n.max(1))
    }

    #[inline]
    fn big_index(&self, small: usize, tap: usize) -> Option<usize> {
        let v = (small * self.stride + tap) as isize - self.pad as isize;
        (v >= 0 && (v as usize) < self.h_big.max(self.w_big)).then_some(v as usize)
    }
}

/// `cols[(c·k + ki)·k + kj, i·P + sy·Ws + sx] = big[i, c, sy·s − p + ki, sx·s − p + kj]`
fn im2col<T: Scalar>(g: &Geom, big: &[T], n_img: usize, cols: &mut [T]) {
    let ps = g.small();
    let ncol = n_img * ps;
    let plane = g.h_big * g.w_big;
    for c in 0..g.c_big {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * ncol..(row + 1) * ncol];
                for i in 0..n_img {
                    let src = &big[(i * g.c_big + c) * plane..(i * g.c_big + c + 1) * plane];
                    for sy in 0..g.h_small {
                        let d = &mut dst[i * ps + sy * g.w_small..i * ps + (sy + 1) * g.w_small];
                        match g.big_index(sy, ki).filter(|&by| by < g.h_big) {
                            None => d.iter_mut().for_each(|v| *v = T::zero()),
                            Some(by) => {
                                let line = &src[by * g.w_big..(by + 1) * g.w_big];
                                for (sx, v) in d.iter_mut().enumerate() {
                                    *v = match g.big_index(sx, kj).filter(|&bx| bx < g.w_big) {
                                        Some(bx) => line[bx],
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

/// Adjoint of [`im2col`]: accumulates columns back into the big grid.
fn col2im_add<T: Scalar>(g: &Geom, cols: &[T], n_img: usize, big: &mut [T]) {
    let ps = g.small();
    let ncol = n_img * ps;
    let plane = g.h_big * g.w_big;
    for c in 0..g.c_big {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * ncol..(row + 1) * ncol];
                for i in 0..n_img {
                    let dst = &mut big[(i * g.c_big + c) * plane..(i * g.c_big + c + 1) * plane];
                    for sy in 0..g.h_small {
                        let Some(by) = g.big_index(sy, ki).filter(|&by| by < g.h_big) else {
                            continue;
                        };
                        let s = &src[i * ps + sy * g.w_small..i * ps + (sy + 1) * g.w_small];
                        let line = &mut dst[by * g.w_big..(by + 1) * g.w_big];
                        for (sx, &v) in s.iter().enumerate() {
                            if let Some(bx) = g.big_index(sx, kj).filter(|&bx| bx < g.w_big) {
                                line[bx] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `out[ch, i·P + p] = t[n0 + i, ch, p]` for a chunk of images.
fn gather_channels<T: Scalar>(t: &Tensor<T>, n0: usize, nc: usize, out: &mut [T]) {
    let p = t.h * t.w;
    let ncol = nc * p;
    for i in 0..nc {
        let s = t.sample(n0 + i);
        for ch in 0..t.c {
            out[ch * ncol + i * p..ch * ncol + (i + 1) * p].copy_from_slice(&s[ch * p..(ch + 1) * p]);
        }
    }
}

fn scatter_channels<T: Scalar>(src: &[T], t: &mut Tensor<T>, n0: usize, nc: usize) {
    let p = t.h * t.w;
    let ncol = nc * p;
    let c = t.c;
    for i in 0..nc {
        let s = t.sample_mut(n0 + i);
        for ch in 0..c {
            s[ch * p..(ch + 1) * p].copy_from_slice(&src[ch * ncol + i * p..ch * ncol + (i + 1) * p]);
        }
    }
}

fn add_channel_bias<T: Scalar>(t: &mut Tensor<T>, bias: &[T]) {
    let p = t.h * t.w;
    for i in 0..t.n {
        let s = t.sample_mut(i);
        for (ch, &b) in bias.iter().enumerate() {
            s[ch * p..(ch + 1) * p].iter_mut().for_each(|v| *v += b);
        }
    }
}

fn accumulate_channel_bias_grad<T: Scalar>(dy: &Tensor<T>, grad: &mut [T]) {
    let p = dy.h * dy.w;
    for i in 0..dy.n {
        let s = dy.sample(i);
        for (ch, g) in grad.iter_mut().enumerate() {
            *g += s[ch * p..(ch + 1) * p].iter().copied().sum::<T>();
        }
    }
}

/// Convolution with weight layout `[out, in, k, k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(name: &str, cin: usize, cout: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Conv2d {
            weight: Param::zeros(format!("{name}.weight"), &[cout, cin, kernel, kernel]),
            bias: Param::zeros(format!("{name}.bias"), &[cout]),
            in_channels: cin,
            out_channels: cout,
            kernel,
            stride,
            pad,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            conv_output_size(h, self.kernel, self.stride, self.pad),
            conv_output_size(w, self.kernel, self.stride, self.pad),
        )
    }

    fn geom(&self, x: &Tensor<T>) -> Geom {
        let (ho, wo) = self.output_hw(x.h, x.w);
        Geom {
            c_big: self.in_channels,
            h_big: x.h,
            w_big: x.w,
            h_small: ho,
            w_small: wo,
            k: self.kernel,
            stride: self.stride,
            pad: self.pad,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.c, self.in_channels, "{}: input channels", self.weight.name);
        let g = self.geom(x);
        let mut y = Tensor::zeros(x.n, self.out_channels, g.h_small, g.w_small);
        let chunk = g.chunk(x.n);
        let mut cols = vec![T::zero(); g.rows() * chunk * g.small()];
        let mut out = vec![T::zero(); self.out_channels * chunk * g.small()];
        let mut n0 = 0;
        while n0 < x.n {
            let nc = chunk.min(x.n - n0);
            let ncol = nc * g.small();
            im2col(&g, &x.data[n0 * g.big()..(n0 + nc) * g.big()], nc, &mut cols);
            matmul(
                self.out_channels,
                g.rows(),
                ncol,
                &self.weight.value,
                false,
                &cols[..g.rows() * ncol],
                false,
                T::zero(),
                &mut out[..self.out_channels * ncol],
            );
            scatter_channels(&out[..self.out_channels * ncol], &mut y, n0, nc);
            n0 += nc;
        }
        add_channel_bias(&mut y, &self.bias.value);
        y
    }

    /// Accumulates weight and bias gradients; returns the input gradient when
    /// `need_input_grad`.
    pub fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>, need_input_grad: bool) -> Option<Tensor<T>> {
        let g = self.geom(x);
        assert_eq!((dy.c, dy.h, dy.w), (self.out_channels, g.h_small, g.w_small));
        accumulate_channel_bias_grad(dy, &mut self.bias.grad);
        let mut dx = need_input_grad.then(|| Tensor::zeros(x.n, x.c, x.h, x.w));
        let chunk = g.chunk(x.n);
        let mut cols = vec![T::zero(); g.rows() * chunk * g.small()];
        let mut dyc = vec![T::zero(); self.out_channels * chunk * g.small()];
        let mut n0 = 0;
        while n0 < x.n {
            let nc = chunk.min(x.n - n0);
            let ncol = nc * g.small();
            let cols = &mut cols[..g.rows() * ncol];
            let dyc = &mut dyc[..self.out_channels * ncol];
            im2col(&g, &x.data[n0 * g.big()..(n0 + nc) * g.big()], nc, cols);
            gather_channels(dy, n0, nc, dyc);
            // dW[out, rows] += dY[out, ncol] · colsᵀ
            matmul(
                self.out_channels,
                ncol,
                g.rows(),
                dyc,
                false,
                cols,
                true,
                T::one(),
                &mut self.weight.grad,
            );
            if let Some(dx) = dx.as_mut() {
                // dcols[rows, ncol] = Wᵀ · dY
                matmul(
                    g.rows(),
                    self.out_channels,
                    ncol,
                    &self.weight.value,
                    true,
                    dyc,
                    false,
                    T::zero(),
                    cols,
                );
                col2im_add(&g, cols, nc, &mut dx.data[n0 * g.big()..(n0 + nc) * g.big()]);
            }
            n0 += nc;
        }
        dx
    }
}

/// Transposed convolution with weight layout `[in, out, k, k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvTranspose2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Scalar> ConvTranspose2d<T> {
    pub fn new(name: &str, cin: usize, cout: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        ConvTranspose2d {
            weight: Param::zeros(format!("{name}.weight"), &[cin, cout, kernel, kernel]),
            bias: Param::zeros(format!("{name}.bias"), &[cout]),
            in_channels: cin,
            out_channels: cout,
            kernel,
            stride,
            pad,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            conv_transpose_output_size(h, self.kernel, self.stride, self.pad),
            conv_transpose_output_size(w, self.kernel, self.stride, self.pad),
        )
    }

    fn geom(&self, x: &Tensor<T>) -> Geom {
        let (ho, wo) = self.output_hw(x.h, x.w);
        Geom {
            c_big: self.out_channels,
            h_big: ho,
            w_big: wo,
            h_small: x.h,
            w_small: x.w,
            k: self.kernel,
            stride: self.stride,
            pad: self.pad,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.c, self.in_channels, "{}: input channels", self.weight.name);
        let g = self.geom(x);
        let mut y = Tensor::zeros(x.n, self.out_channels, g.h_big, g.w_big);
        let chunk = g.chunk(x.n);
        let mut xc = vec![T::zero(); self.in_channels * chunk * g.small()];
        let mut cols = vec![T::zero(); g.rows() * chunk * g.small()];
        let mut n0 = 0;
        while n0 < x.n {
            let nc = chunk.min(x.n - n0);
            let ncol = nc * g.small();
            let xc = &mut xc[..self.in_channels * ncol];
            let cols = &mut cols[..g.rows() * ncol];
            gather_channels(x, n0, nc, xc);
            // cols[rows, ncol] = Wᵀ · X, with W stored as [in, rows]
            matmul(
                g.rows(),
                self.in_channels,
                ncol,
                &self.weight.value,
                true,
                xc,
                false,
                T::zero(),
                cols,
            );
            col2im_add(&g, cols, nc, &mut y.data[n0 * g.big()..(n0 + nc) * g.big()]);
            n0 += nc;
        }
        add_channel_bias(&mut y, &self.bias.value);
        y
    }

    pub fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>, need_input_grad: bool) -> Option<Tensor<T>> {
        let g = self.geom(x);
        assert_eq!((dy.c, dy.h, dy.w), (self.out_channels, g.h_big, g.w_big));
        accumulate_channel_bias_grad(dy, &mut self.bias.grad);
        let mut dx = need_input_grad.then(|| Tensor::zeros(x.n, x.c, x.h, x.w));
        let chunk = g.chunk(x.n);
        let mut xc = vec![T::zero(); self.in_channels * chunk * g.small()];
        let mut cols = vec![T::zero(); g.rows() * chunk * g.small()];
        let mut n0 = 0;
        while n0 < x.n {
            let nc = chunk.min(x.n - n0);
            let ncol = nc * g.small();
            let xc = &mut xc[..self.in_channels * ncol];
            let cols = &mut cols[..g.rows() * ncol];
            gather_channels(x, n0, nc, xc);
            im2col(&g, &dy.data[n0 * g.big()..(n0 + nc) * g.big()], nc, cols);
            // dW[in, rows] += X[in, ncol] · dcolsᵀ
            matmul(
                self.in_channels,
                ncol,
                g.rows(),
                xc,
                false,
                cols,
                true,
                T::one(),
                &mut self.weight.grad,
            );
            if let Some(dx) = dx.as_mut() {
                // dX[in, ncol] = W[in, rows] · dcols
                matmul(
                    self.in_channels,
                    g.rows(),
                    ncol,
                    &self.weight.value,
                    false,
                    cols,
                    false,
                    T::zero(),
                    xc,
                );
                scatter_channels(xc, dx, n0, nc);
            }
            n0 += nc;
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct-loop reference convolution.
    fn conv_ref(x: &Tensor<f64>, w: &[f64], cout: usize, k: usize, s: usize, p: usize) -> Tensor<f64> {
        let ho = conv_output_size(x.h, k, s, p);
        let wo = conv_output_size(x.w, k, s, p);
        let mut y = Tensor::zeros(x.n, cout, ho, wo);
        for n in 0..x.n {
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..x.c {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy = (oy * s + ki) as isize - p as isize;
                                    let ix = (ox * s + kj) as isize - p as isize;
                                    if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                        continue;
                                    }
                                    let xv = x.data[((n * x.c + ci) * x.h + iy as usize) * x.w + ix as usize];
                                    acc += xv * w[((co * x.c + ci) * k + ki) * k + kj];
                                }
                            }
                        }
                        y.data[((n * cout + co) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        y
    }

    /// Direct scatter definition of the transposed convolution.
    fn conv_t_ref(x: &Tensor<f64>, w: &[f64], cout: usize, k: usize, s: usize) -> Tensor<f64> {
        let ho = conv_transpose_output_size(x.h, k, s, 0);
        let wo = conv_transpose_output_size(x.w, k, s, 0);
        let mut y = Tensor::zeros(x.n, cout, ho, wo);
        for n in 0..x.n {
            for ci in 0..x.c {
                for iy in 0..x.h {
                    for ix in 0..x.w {
                        let xv = x.data[((n * x.c + ci) * x.h + iy) * x.w + ix];
                        for co in 0..cout {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let oy = iy * s + ki;
                                    let ox = ix * s + kj;
                                    y.data[((n * cout + co) * ho + oy) * wo + ox] +=
                                        xv * w[((ci * cout + co) * k + ki) * k + kj];
                                }
                            }
                        }
                    }
                }
            }
        }
        y
    }

    fn filled(n: usize, c: usize, h: usize, w: usize, seed: f64) -> Tensor<f64> {
        let data = (0..n * c * h * w).map(|i| ((i as f64 + seed) * 0.618).sin()).collect();
        Tensor::from_vec(n, c, h, w, data)
    }

    #[test]
    fn conv_matches_reference_loops() {
        let x = filled(2, 3, 11, 11, 0.3);
        let mut conv = Conv2d::<f64>::new("c", 3, 4, 5, 2, 2);
        conv.weight.value = (0..conv.weight.len()).map(|i| (i as f64 * 0.13).cos()).collect();
        let y = conv.forward(&x);
        let r = conv_ref(&x, &conv.weight.value, 4, 5, 2, 2);
        assert_eq!((y.h, y.w), (6, 6));
        for (a, b) in y.data.iter().zip(&r.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_transpose_matches_reference_loops() {
        let x = filled(2, 3, 5, 5, 1.1);
        for (k, s) in [(5, 2), (2, 1), (6, 2)] {
            let mut ct = ConvTranspose2d::<f64>::new("t", 3, 2, k, s, 0);
            ct.weight.value = (0..ct.weight.len()).map(|i| (i as f64 * 0.29).sin()).collect();
            let y = ct.forward(&x);
            let r = conv_t_ref(&x, &ct.weight.value, 2, k, s);
            assert_eq!((y.h, y.w), (r.h, r.w));
            for (a, b) in y.data.iter().zip(&r.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn conv_input_gradient_is_the_adjoint() {
        // <conv(x), v> = <x, conv_backward(v)> for a bias-free layer.
        let x = filled(2, 2, 9, 9, 0.0);
        let mut conv = Conv2d::<f64>::new("c", 2, 3, 5, 2, 2);
        conv.weight.value = (0..conv.weight.len()).map(|i| (i as f64 * 0.41).sin()).collect();
        let y = conv.forward(&x);
        let v = filled(y.n, y.c, y.h, y.w, 2.0);
        let dx = conv.backward(&x, &v, true).unwrap();
        assert!((dot(&y.data, &v.data) - dot(&x.data, &dx.data)).abs() < 1e-9);
    }

    #[test]
    fn conv_transpose_input_gradient_is_the_adjoint() {
        let x = filled(3, 2, 4, 4, 0.5);
        let mut ct = ConvTranspose2d::<f64>::new("t", 2, 3, 5, 2, 0);
        ct.weight.value = (0..ct.weight.len()).map(|i| (i as f64 * 0.77).cos()).collect();
        let y = ct.forward(&x);
        let v = filled(y.n, y.c, y.h, y.w, 4.0);
        let dx = ct.backward(&x, &v, true).unwrap();
        assert!((dot(&y.data, &v.data) - dot(&x.data, &dx.data)).abs() < 1e-9);
    }

    #[test]
    fn output_size_formulas() {
        assert_eq!(conv_output_size(128, 5, 2, 2), 64);
        assert_eq!(conv_output_size(8, 5, 2, 2), 4);
        assert_eq!(conv_transpose_output_size(1, 5, 2, 0), 5);
        assert_eq!(conv_transpose_output_size(61, 2, 1, 0), 62);
        assert_eq!(conv_transpose_output_size(62, 6, 2, 0), 128);
    }
}
