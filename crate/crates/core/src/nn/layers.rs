//! Primitive layers with explicit forward caches and backward passes.
//!
//! Parameters live in one flat buffer; a layer only records offsets into it.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{matmul, Scalar, Tensor};

/// Hands out disjoint ranges of the flat parameter buffer.
#[derive(Debug, Default, Clone)]
pub struct ParamLayout {
    len: usize,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn alloc(&mut self, len: usize) -> usize {
        let off = self.len;
        self.len += len;
        off
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Square convolution, stride 1, "same" zero padding. `ksize` is 1 or 3.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub ksize: usize,
    pub weight: usize,
    pub bias: usize,
}

/// Saved activations needed by [`Conv2d::backward`].
#[derive(Debug, Default)]
pub struct ConvCache<T> {
    cols: Vec<T>,
    h: usize,
    w: usize,
}

impl Conv2d {
    pub fn new(cin: usize, cout: usize, ksize: usize, layout: &mut ParamLayout) -> Self {
        assert!(ksize == 1 || ksize == 3, "only 1x1 and 3x3 kernels");
        let weight = layout.alloc(cout * cin * ksize * ksize);
        let bias = layout.alloc(cout);
        Self { cin, cout, ksize, weight, bias }
    }

    fn fan_in(&self) -> usize {
        self.cin * self.ksize * self.ksize
    }

    fn weight_len(&self) -> usize {
        self.cout * self.fan_in()
    }

    /// He-normal weights, zero bias.
    pub fn init<T: Scalar, R: Rng>(&self, params: &mut [T], rng: &mut R) {
        let std = (2.0 / self.fan_in() as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        for w in &mut params[self.weight..self.weight + self.weight_len()] {
            *w = T::lit(normal.sample(rng));
        }
        for b in &mut params[self.bias..self.bias + self.cout] {
            *b = T::zero();
        }
    }

    pub fn zero<T: Scalar>(&self, params: &mut [T]) {
        params[self.weight..self.weight + self.weight_len()].fill(T::zero());
        params[self.bias..self.bias + self.cout].fill(T::zero());
    }

    /// Forward pass. With `keep = false` the cache stays empty and only
    /// inference is possible.
    pub fn forward<T: Scalar>(
        &self,
        params: &[T],
        x: &Tensor<T>,
        keep: bool,
    ) -> (Tensor<T>, ConvCache<T>) {
        assert_eq!(x.c, self.cin, "conv input channels");
        let hw = x.plane();
        let rows = self.fan_in();
        let wts = &params[self.weight..self.weight + self.weight_len()];
        let bias = &params[self.bias..self.bias + self.cout];
        let mut out = Tensor::zeros(x.n, self.cout, x.h, x.w);
        let mut cache = ConvCache { cols: Vec::new(), h: x.h, w: x.w };
        if keep {
            cache.cols = vec![T::zero(); x.n * rows * hw];
        }
        let mut scratch = if keep || self.ksize == 1 { Vec::new() } else { vec![T::zero(); rows * hw] };
        for i in 0..x.n {
            let dst = out.item_mut(i);
            for (co, b) in bias.iter().enumerate() {
                dst[co * hw..(co + 1) * hw].fill(*b);
            }
            let col: &[T] = if self.ksize == 1 {
                if keep {
                    cache.cols[i * rows * hw..(i + 1) * rows * hw].copy_from_slice(x.item(i));
                }
                x.item(i)
            } else if keep {
                let c = &mut cache.cols[i * rows * hw..(i + 1) * rows * hw];
                im2col3(x.item(i), x.c, x.h, x.w, c);
                c
            } else {
                im2col3(x.item(i), x.c, x.h, x.w, &mut scratch);
                &scratch
            };
            matmul(wts, false, col, false, dst, self.cout, rows, hw, T::one());
        }
        (out, cache)
    }

    /// Accumulates parameter gradients into `grads`; returns the input
    /// gradient when `need_dx`.
    pub fn backward<T: Scalar>(
        &self,
        params: &[T],
        cache: &ConvCache<T>,
        dy: &Tensor<T>,
        grads: &mut [T],
        need_dx: bool,
    ) -> Option<Tensor<T>> {
        assert_eq!(dy.c, self.cout);
        assert!(!cache.cols.is_empty() || dy.n == 0, "backward without a training cache");
        let (h, w) = (cache.h, cache.w);
        let hw = h * w;
        let rows = self.fan_in();
        let wlen = self.weight_len();
        let wts = &params[self.weight..self.weight + wlen];
        let mut dx = need_dx.then(|| Tensor::zeros(dy.n, self.cin, h, w));
        let mut dcol = if need_dx && self.ksize == 3 { vec![T::zero(); rows * hw] } else { Vec::new() };
        for i in 0..dy.n {
            let g = dy.item(i);
            let col = &cache.cols[i * rows * hw..(i + 1) * rows * hw];
            {
                let gb = &mut grads[self.bias..self.bias + self.cout];
                for (co, gbv) in gb.iter_mut().enumerate() {
                    let mut s = T::zero();
                    for v in &g[co * hw..(co + 1) * hw] {
                        s += *v;
                    }
                    *gbv += s;
                }
            }
            matmul(
                g,
                false,
                col,
                true,
                &mut grads[self.weight..self.weight + wlen],
                self.cout,
                hw,
                rows,
                T::one(),
            );
            if let Some(dx) = dx.as_mut() {
                if self.ksize == 1 {
                    matmul(wts, true, g, false, dx.item_mut(i), rows, self.cout, hw, T::zero());
                } else {
                    matmul(wts, true, g, false, &mut dcol, rows, self.cout, hw, T::zero());
                    col2im3(&dcol, self.cin, h, w, dx.item_mut(i));
                }
            }
        }
        dx
    }
}

/// Unfold 3×3 neighbourhoods: row `(ci·3+ky)·3+kx`, column `y·w+x`.
fn im2col3<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, col: &mut [T]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[((ci * 3 + ky) * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let dst = &mut row[y * w..(y + 1) * w];
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            dst[0] = T::zero();
                            dst[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => dst.copy_from_slice(src),
                        _ => {
                            dst[..w - 1].copy_from_slice(&src[1..]);
                            dst[w - 1] = T::zero();
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col3`]: scatter-add columns back into the image.
fn col2im3<T: Scalar>(col: &[T], c: usize, h: usize, w: usize, x: &mut [T]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[((ci * 3 + ky) * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            for (d, s) in dst[..w - 1].iter_mut().zip(&src[1..]) {
                                *d += *s;
                            }
                        }
                        1 => {
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += *s;
                            }
                        }
                        _ => {
                            for (d, s) in dst[1..].iter_mut().zip(&src[..w - 1]) {
                                *d += *s;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn relu_inplace<T: Scalar>(x: &mut Tensor<T>) {
    for v in &mut x.data {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Zero `dy` wherever the (post-activation) output was not positive.
pub fn relu_backward<T: Scalar>(out: &Tensor<T>, dy: &mut Tensor<T>) {
    for (g, o) in dy.data.iter_mut().zip(&out.data) {
        if *o <= T::zero() {
            *g = T::zero();
        }
    }
}

/// 2×2 max pooling, stride 2. Returns the argmax offset (0..4) per output.
pub fn maxpool2<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Vec<u8>) {
    assert!(x.h % 2 == 0 && x.w % 2 == 0, "maxpool needs even sizes");
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut out = Tensor::zeros(x.n, x.c, oh, ow);
    let mut arg = vec![0u8; out.data.len()];
    for p in 0..x.n * x.c {
        let src = &x.data[p * x.h * x.w..(p + 1) * x.h * x.w];
        for y in 0..oh {
            for xx in 0..ow {
                let base = 2 * y * x.w + 2 * xx;
                let cand = [src[base], src[base + 1], src[base + x.w], src[base + x.w + 1]];
                let mut best = 0;
                for k in 1..4 {
                    if cand[k] > cand[best] {
                        best = k;
                    }
                }
                let o = p * oh * ow + y * ow + xx;
                out.data[o] = cand[best];
                arg[o] = best as u8;
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward<T: Scalar>(dy: &Tensor<T>, arg: &[u8]) -> Tensor<T> {
    let (h, w) = (dy.h * 2, dy.w * 2);
    let mut dx = Tensor::zeros(dy.n, dy.c, h, w);
    for p in 0..dy.n * dy.c {
        for y in 0..dy.h {
            for xx in 0..dy.w {
                let o = p * dy.h * dy.w + y * dy.w + xx;
                let a = arg[o] as usize;
                let idx = p * h * w + (2 * y + a / 2) * w + 2 * xx + a % 2;
                dx.data[idx] += dy.data[o];
            }
        }
    }
    dx
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (x.h * 2, x.w * 2);
    let mut out = Tensor::zeros(x.n, x.c, h, w);
    for p in 0..x.n * x.c {
        for y in 0..h {
            for xx in 0..w {
                out.data[p * h * w + y * w + xx] = x.data[p * x.h * x.w + (y / 2) * x.w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Scalar>(dy: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (dy.h / 2, dy.w / 2);
    let mut dx = Tensor::zeros(dy.n, dy.c, h, w);
    for p in 0..dy.n * dy.c {
        for y in 0..dy.h {
            for xx in 0..dy.w {
                dx.data[p * h * w + (y / 2) * w + xx / 2] += dy.data[p * dy.h * dy.w + y * dy.w + xx];
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct 3×3 convolution used as an oracle for the im2col path.
    fn conv_naive(x: &Tensor<f64>, p: &[f64], conv: &Conv2d) -> Tensor<f64> {
        let mut out = Tensor::zeros(x.n, conv.cout, x.h, x.w);
        let k = conv.ksize as isize;
        let r = k / 2;
        for i in 0..x.n {
            for co in 0..conv.cout {
                for y in 0..x.h as isize {
                    for xx in 0..x.w as isize {
                        let mut s = p[conv.bias + co];
                        for ci in 0..conv.cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let (sy, sx) = (y + ky - r, xx + kx - r);
                                    if sy < 0 || sx < 0 || sy >= x.h as isize || sx >= x.w as isize {
                                        continue;
                                    }
                                    let wi = conv.weight
                                        + ((co * conv.cin + ci) * conv.ksize + ky as usize) * conv.ksize
                                        + kx as usize;
                                    let xi = ((i * x.c + ci) * x.h + sy as usize) * x.w + sx as usize;
                                    s += p[wi] * x.data[xi];
                                }
                            }
                        }
                        out.data[((i * conv.cout + co) * x.h + y as usize) * x.w + xx as usize] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for ksize in [1, 3] {
            let mut layout = ParamLayout::new();
            let conv = Conv2d::new(2, 3, ksize, &mut layout);
            let mut p = vec![0.0f64; layout.len()];
            conv.init(&mut p, &mut rng);
            p[conv.bias] = 0.25;
            let x = Tensor::from_vec(2, 2, 4, 5, (0..80).map(|i| ((i * 7) % 11) as f64 - 5.0).collect());
            let (y, _) = conv.forward(&p, &x, false);
            let want = conv_naive(&x, &p, &conv);
            for (a, b) in y.data.iter().zip(&want.data) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint_of_forward() {
        // <dy, J·v> = <Jᵀ·dy, v> for the input direction (bias set to zero).
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut layout = ParamLayout::new();
        let conv = Conv2d::new(3, 2, 3, &mut layout);
        let mut p = vec![0.0f64; layout.len()];
        conv.init(&mut p, &mut rng);
        let x = Tensor::from_vec(1, 3, 5, 4, (0..60).map(|i| (i as f64 * 0.3).sin()).collect());
        let dy = Tensor::from_vec(1, 2, 5, 4, (0..40).map(|i| (i as f64 * 0.7).cos()).collect());
        let (y, cache) = conv.forward(&p, &x, true);
        let mut g = vec![0.0; p.len()];
        let dx = conv.backward(&p, &cache, &dy, &mut g, true).unwrap();
        let lhs: f64 = dy.data.iter().zip(&y.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = dx.data.iter().zip(&x.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
        // and weights: <dy, y> = <dW, W> with zero bias
        let wsum: f64 = (0..conv.weight_len()).map(|i| g[conv.weight + i] * p[conv.weight + i]).sum();
        assert!((lhs - wsum).abs() < 1e-10);
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let x = Tensor::<f32>::from_vec(1, 1, 2, 2, vec![1., 5., 3., 2.]);
        let (y, arg) = maxpool2(&x);
        assert_eq!(y.data, vec![5.]);
        let dx = maxpool2_backward(&Tensor::from_vec(1, 1, 1, 1, vec![2.]), &arg);
        assert_eq!(dx.data, vec![0., 2., 0., 0.]);
    }

    #[test]
    fn upsample_backward_sums_blocks() {
        let x = Tensor::<f32>::from_vec(1, 1, 1, 2, vec![1., 2.]);
        let y = upsample2(&x);
        assert_eq!(y.data, vec![1., 1., 2., 2., 1., 1., 2., 2.]);
        let dx = upsample2_backward(&y);
        assert_eq!(dx.data, vec![4., 8.]);
    }
}
