//! Four-level encoder-decoder with skip connections.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    maxpool2, maxpool2_backward, relu_backward, relu_inplace, upsample2, upsample2_backward, Conv2d,
    ConvCache, ParamLayout,
};
use super::tensor::{concat_channels, crop, pad_to_multiple, split_channels};
use super::{Scalar, Tensor};

/// Total spatial downsampling of the encoder.
pub const DOWNSAMPLE: usize = 8;

/// conv3×3 → ReLU → conv3×3 → ReLU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub first: Conv2d,
    pub second: Conv2d,
}

#[derive(Debug)]
pub struct BlockCache<T> {
    first: ConvCache<T>,
    mid: Tensor<T>,
    second: ConvCache<T>,
    out: Tensor<T>,
}

impl<T> BlockCache<T> {
    pub fn out(&self) -> &Tensor<T> {
        &self.out
    }
}

impl ConvBlock {
    pub fn new(cin: usize, cout: usize, layout: &mut ParamLayout) -> Self {
        Self { first: Conv2d::new(cin, cout, 3, layout), second: Conv2d::new(cout, cout, 3, layout) }
    }

    pub fn init<T: Scalar, R: Rng>(&self, params: &mut [T], rng: &mut R) {
        self.first.init(params, rng);
        self.second.init(params, rng);
    }

    pub fn forward<T: Scalar>(&self, params: &[T], x: &Tensor<T>, keep: bool) -> BlockCache<T> {
        let (mut mid, first) = self.first.forward(params, x, keep);
        relu_inplace(&mut mid);
        let (mut out, second) = self.second.forward(params, &mid, keep);
        relu_inplace(&mut out);
        BlockCache { first, mid: if keep { mid } else { Tensor::zeros(0, 0, 0, 0) }, second, out }
    }

    pub fn backward<T: Scalar>(
        &self,
        params: &[T],
        cache: &BlockCache<T>,
        mut dy: Tensor<T>,
        grads: &mut [T],
        need_dx: bool,
    ) -> Option<Tensor<T>> {
        relu_backward(&cache.out, &mut dy);
        let mut dmid = self
            .second
            .backward(params, &cache.second, &dy, grads, true)
            .expect("dx requested");
        relu_backward(&cache.mid, &mut dmid);
        self.first.backward(params, &cache.first, &dmid, grads, need_dx)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNet {
    pub in_channels: usize,
    pub out_channels: usize,
    pub width: usize,
    enc: [ConvBlock; 3],
    bottleneck: ConvBlock,
    dec: [ConvBlock; 3],
    head: Conv2d,
}

/// Everything [`UNet::backward`] needs from the forward pass.
#[derive(Debug)]
pub struct UNetCache<T> {
    in_h: usize,
    in_w: usize,
    enc: Vec<BlockCache<T>>,
    pool_arg: Vec<Vec<u8>>,
    bottleneck: BlockCache<T>,
    dec: Vec<BlockCache<T>>,
    head: ConvCache<T>,
}

impl UNet {
    pub fn new(in_channels: usize, out_channels: usize, width: usize, layout: &mut ParamLayout) -> Self {
        let w = [width, 2 * width, 4 * width, 8 * width];
        let enc = [
            ConvBlock::new(in_channels, w[0], layout),
            ConvBlock::new(w[0], w[1], layout),
            ConvBlock::new(w[1], w[2], layout),
        ];
        let bottleneck = ConvBlock::new(w[2], w[3], layout);
        // dec[l] consumes upsampled level l+1 features concatenated with skip l
        let dec = [
            ConvBlock::new(w[1] + w[0], w[0], layout),
            ConvBlock::new(w[2] + w[1], w[1], layout),
            ConvBlock::new(w[3] + w[2], w[2], layout),
        ];
        let head = Conv2d::new(w[0], out_channels, 1, layout);
        Self { in_channels, out_channels, width, enc, bottleneck, dec, head }
    }

    pub fn init<T: Scalar, R: Rng>(&self, params: &mut [T], rng: &mut R) {
        for b in &self.enc {
            b.init(params, rng);
        }
        self.bottleneck.init(params, rng);
        for b in &self.dec {
            b.init(params, rng);
        }
        self.head.init(params, rng);
    }

    /// Returns per-pixel logits at the input resolution. Inputs whose sides
    /// are not multiples of [`DOWNSAMPLE`] are zero-padded and the output
    /// cropped back.
    pub fn forward<T: Scalar>(&self, params: &[T], x: &Tensor<T>, keep: bool) -> (Tensor<T>, UNetCache<T>) {
        assert_eq!(x.c, self.in_channels, "unet input channels");
        let padded = pad_to_multiple(x, DOWNSAMPLE);
        let mut enc = Vec::with_capacity(3);
        let mut pool_arg = Vec::with_capacity(3);
        let mut cur = padded;
        for block in &self.enc {
            let c = block.forward(params, &cur, keep);
            let (p, arg) = maxpool2(c.out());
            enc.push(c);
            pool_arg.push(arg);
            cur = p;
        }
        let bottleneck = self.bottleneck.forward(params, &cur, keep);
        let mut dec: Vec<BlockCache<T>> = Vec::with_capacity(3);
        let mut below = bottleneck.out().clone();
        for level in (0..3).rev() {
            let up = upsample2(&below);
            let cat = concat_channels(&up, enc[level].out());
            let c = self.dec[level].forward(params, &cat, keep);
            below = c.out().clone();
            dec.push(c);
        }
        dec.reverse();
        let (logits, head) = self.head.forward(params, dec[0].out(), keep);
        let logits = crop(&logits, x.h, x.w);
        (logits, UNetCache { in_h: x.h, in_w: x.w, enc, pool_arg, bottleneck, dec, head })
    }

    /// Zero the output layer so the network initially predicts all-zero
    /// logits.
    pub fn zero_head<T: Scalar>(&self, params: &mut [T]) {
        self.head.zero(params);
    }

    /// Logits plus the last decoder features (width channels), both at the
    /// input resolution; pair with [`UNet::backward_features`].
    pub fn forward_features<T: Scalar>(
        &self,
        params: &[T],
        x: &Tensor<T>,
        keep: bool,
    ) -> (Tensor<T>, Tensor<T>, UNetCache<T>) {
        let (logits, cache) = self.forward(params, x, keep);
        let features = crop(cache.dec[0].out(), x.h, x.w);
        (logits, features, cache)
    }

    pub fn backward<T: Scalar>(
        &self,
        params: &[T],
        cache: &UNetCache<T>,
        dlogits: &Tensor<T>,
        grads: &mut [T],
        need_dx: bool,
    ) -> Option<Tensor<T>> {
        let top = cache.dec[0].out();
        let dl = pad_to_multiple(dlogits, DOWNSAMPLE);
        debug_assert!(dl.h == top.h && dl.w == top.w);
        let d = self.head.backward(params, &cache.head, &dl, grads, true).expect("dx");
        self.backward_body(params, cache, d, grads, need_dx)
    }

    /// Backward pass for [`UNet::forward_features`] with gradients on both
    /// outputs.
    pub fn backward_features<T: Scalar>(
        &self,
        params: &[T],
        cache: &UNetCache<T>,
        dlogits: &Tensor<T>,
        dfeatures: &Tensor<T>,
        grads: &mut [T],
        need_dx: bool,
    ) -> Option<Tensor<T>> {
        let dl = pad_to_multiple(dlogits, DOWNSAMPLE);
        let mut d = self.head.backward(params, &cache.head, &dl, grads, true).expect("dx");
        d.add_assign(&pad_to_multiple(dfeatures, DOWNSAMPLE));
        self.backward_body(params, cache, d, grads, need_dx)
    }

    fn backward_body<T: Scalar>(
        &self,
        params: &[T],
        cache: &UNetCache<T>,
        mut d: Tensor<T>,
        grads: &mut [T],
        need_dx: bool,
    ) -> Option<Tensor<T>> {
        let w = [self.width, 2 * self.width, 4 * self.width];
        let mut dskip: Vec<Option<Tensor<T>>> = vec![None, None, None];
        for level in 0..3 {
            let dcat = self.dec[level]
                .backward(params, &cache.dec[level], d, grads, true)
                .expect("dx");
            let up_c = dcat.c - w[level];
            let (dup, ds) = split_channels(&dcat, up_c);
            dskip[level] = Some(ds);
            d = upsample2_backward(&dup);
        }
        let mut d = self
            .bottleneck
            .backward(params, &cache.bottleneck, d, grads, true)
            .expect("dx");
        for level in (0..3).rev() {
            let mut dout = maxpool2_backward(&d, &cache.pool_arg[level]);
            dout.add_assign(dskip[level].as_ref().expect("skip grad"));
            let want = need_dx || level > 0;
            match self.enc[level].backward(params, &cache.enc[level], dout, grads, want) {
                Some(dx) => d = dx,
                None => return None,
            }
        }
        Some(crop(&d, cache.in_h, cache.in_w))
    }
}
