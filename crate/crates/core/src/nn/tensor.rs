use super::Scalar;

/// Dense batch of feature maps in `N×C×H×W` order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w, data: vec![T::zero(); n * c * h * w] }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), n * c * h * w, "tensor data length mismatch");
        Self { n, c, h, w, data }
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn item_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn item(&self, i: usize) -> &[T] {
        let l = self.item_len();
        &self.data[i * l..(i + 1) * l]
    }

    pub fn item_mut(&mut self, i: usize) -> &mut [T] {
        let l = self.item_len();
        &mut self.data[i * l..(i + 1) * l]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.n == other.n && self.c == other.c && self.h == other.h && self.w == other.w
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert!(self.same_shape(other), "shape mismatch in add");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }
}

/// Stack items along the channel axis: `[a; b]` per batch item.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    assert!(a.n == b.n && a.h == b.h && a.w == b.w, "concat shape mismatch");
    let mut out = Tensor::zeros(a.n, a.c + b.c, a.h, a.w);
    let (la, lb) = (a.item_len(), b.item_len());
    for i in 0..a.n {
        let dst = out.item_mut(i);
        dst[..la].copy_from_slice(a.item(i));
        dst[la..la + lb].copy_from_slice(b.item(i));
    }
    out
}

/// Inverse of [`concat_channels`] for gradients.
pub fn split_channels<T: Scalar>(t: &Tensor<T>, first: usize) -> (Tensor<T>, Tensor<T>) {
    assert!(first <= t.c);
    let mut a = Tensor::zeros(t.n, first, t.h, t.w);
    let mut b = Tensor::zeros(t.n, t.c - first, t.h, t.w);
    let la = a.item_len();
    for i in 0..t.n {
        let src = t.item(i);
        a.item_mut(i).copy_from_slice(&src[..la]);
        b.item_mut(i).copy_from_slice(&src[la..]);
    }
    (a, b)
}

/// Zero-pad bottom/right so both spatial sizes are multiples of `m`.
pub fn pad_to_multiple<T: Scalar>(x: &Tensor<T>, m: usize) -> Tensor<T> {
    let h = x.h.div_ceil(m) * m;
    let w = x.w.div_ceil(m) * m;
    if h == x.h && w == x.w {
        return x.clone();
    }
    let mut out = Tensor::zeros(x.n, x.c, h, w);
    for i in 0..x.n {
        for ch in 0..x.c {
            for y in 0..x.h {
                let src = ((i * x.c + ch) * x.h + y) * x.w;
                let dst = ((i * x.c + ch) * h + y) * w;
                out.data[dst..dst + x.w].copy_from_slice(&x.data[src..src + x.w]);
            }
        }
    }
    out
}

/// Keep the top-left `h×w` window; adjoint of [`pad_to_multiple`].
pub fn crop<T: Scalar>(x: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    if h == x.h && w == x.w {
        return x.clone();
    }
    assert!(h <= x.h && w <= x.w);
    let mut out = Tensor::zeros(x.n, x.c, h, w);
    for i in 0..x.n {
        for ch in 0..x.c {
            for y in 0..h {
                let src = ((i * x.c + ch) * x.h + y) * x.w;
                let dst = ((i * x.c + ch) * h + y) * w;
                out.data[dst..dst + w].copy_from_slice(&x.data[src..src + w]);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_then_split_is_identity() {
        let a = Tensor::<f32>::from_vec(2, 1, 1, 2, vec![1., 2., 3., 4.]);
        let b = Tensor::<f32>::from_vec(2, 2, 1, 2, vec![5., 6., 7., 8., 9., 10., 11., 12.]);
        let c = concat_channels(&a, &b);
        assert_eq!(c.item(1), &[3., 4., 9., 10., 11., 12.]);
        let (a2, b2) = split_channels(&c, 1);
        assert_eq!(a2, a);
        assert_eq!(b2, b);
    }

    #[test]
    fn pad_and_crop_round_trip() {
        let x = Tensor::<f64>::from_vec(1, 1, 3, 3, (0..9).map(f64::from).collect());
        let p = pad_to_multiple(&x, 4);
        assert_eq!((p.h, p.w), (4, 4));
        assert_eq!(p.data[4..7], [3., 4., 5.]);
        assert_eq!(p.data[15], 0.0);
        assert_eq!(crop(&p, 3, 3), x);
    }
}
