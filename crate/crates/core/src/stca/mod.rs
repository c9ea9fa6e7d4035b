//! Spatial-temporal cross attention: the factorized fusion pair that routes
//! event information into the image branch (SCA) and image information into
//! the event branch (TCA), plus the channel-alignment MBConv block and the
//! exact cost model for the factorization.
//!
//! Score-matrix element counts can be instrumented via
//! [`count_attention_scores`]; in full-attention mode (`window = 0`) the
//! counted TCA+SCA elements equal [`attention_cost`]'s factorized term
//! exactly. The windowed block+grid mode (MaxViT-style, `window > 0`) trades
//! that exact correspondence for tractability on large feature maps and is
//! the training default.

use std::cell::Cell;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{join, Params};
use crate::nn::ops::{avg_pool2d, upsample_nearest2d};
use crate::nn::{Conv2d, DepthwiseConv2d, Scalar, Tensor};
use crate::TrainRng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    /// Pooling scale `p` applied before temporal cross attention.
    pub pool_scale: usize,
    pub heads: usize,
    /// Block/grid window size for spatial cross attention; `0` selects full
    /// spatial attention (the configuration the cost model describes).
    pub window: usize,
    pub mbconv_expansion: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            pool_scale: 2,
            heads: 1,
            window: 4,
            mbconv_expansion: 2,
        }
    }
}

thread_local! {
    static SCORE_COUNT: Cell<u64> = const { Cell::new(0) };
    static COUNTING: Cell<bool> = const { Cell::new(false) };
}

fn record_scores(n: u64) {
    COUNTING.with(|c| {
        if c.get() {
            SCORE_COUNT.with(|s| s.set(s.get() + n));
        }
    });
}

/// Run `f` with score-matrix element counting enabled; returns the result
/// and the number of attention score elements materialized inside.
pub fn count_attention_scores<R>(f: impl FnOnce() -> R) -> (R, u64) {
    struct Guard(bool, u64);
    impl Drop for Guard {
        fn drop(&mut self) {
            COUNTING.with(|c| c.set(self.0));
            SCORE_COUNT.with(|s| s.set(self.1));
        }
    }
    let _guard = Guard(
        COUNTING.with(|c| c.replace(true)),
        SCORE_COUNT.with(|s| s.replace(0)),
    );
    let r = f();
    let count = SCORE_COUNT.with(|s| s.get());
    (r, count)
}

/// Exact score-element counts of full spatio-temporal cross attention vs the
/// TCA + SCA factorization: `full = T*H*W*H*W`,
/// `factorized = (T/p^2 + H*W) * H*W`, both as exact integers.
pub fn attention_cost(
    bins: usize,
    h: usize,
    w: usize,
    pool_scale: usize,
) -> Result<(u128, u128)> {
    if pool_scale == 0 || h % pool_scale != 0 || w % pool_scale != 0 {
        return Err(Error::domain(format!(
            "pool scale {pool_scale} must divide spatial dims {h}x{w}"
        )));
    }
    let (bins, h, w, p) = (bins as u128, h as u128, w as u128, pool_scale as u128);
    let hw = h * w;
    let full = bins * hw * hw;
    let factorized = bins * (h / p) * (w / p) + hw * hw;
    Ok((full, factorized))
}

/// MBConv-style channel alignment: 1x1 expansion, depthwise 3x3, 1x1
/// projection, with a residual connection when the channel count is
/// unchanged.
pub struct MbConv<S: Scalar> {
    expand: Conv2d<S>,
    depthwise: DepthwiseConv2d<S>,
    project: Conv2d<S>,
    c_in: usize,
    c_out: usize,
}

impl<S: Scalar> MbConv<S> {
    pub fn new(rng: &mut TrainRng, c_in: usize, c_out: usize, expansion: usize) -> Self {
        let mid = (c_in * expansion).max(1);
        MbConv {
            expand: Conv2d::new(rng, c_in, mid, 1, 1, 0),
            depthwise: DepthwiseConv2d::new(rng, mid, 3, 1, 1),
            project: Conv2d::new(rng, mid, c_out, 1, 1, 0),
            c_in,
            c_out,
        }
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != self.c_in {
            return Err(Error::domain(format!(
                "align_channels expects (N, {}, H, W), got {shape:?}",
                self.c_in
            )));
        }
        let h = self.expand.forward(x).silu();
        let h = self.depthwise.forward(&h).silu();
        let y = self.project.forward(&h);
        Ok(if self.c_in == self.c_out {
            y.add(x)
        } else {
            y
        })
    }
}

impl<S: Scalar> Params<S> for MbConv<S> {
    fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        self.expand.collect(&join(prefix, "expand"), out);
        self.depthwise.collect(&join(prefix, "dw"), out);
        self.project.collect(&join(prefix, "project"), out);
    }
}

// ---------------------------------------------------------------------------
// Temporal cross attention
// ---------------------------------------------------------------------------

/// Temporal cross attention: queries from pooled event features, a single
/// key/value per location from the channel-aligned pooled image feature,
/// attention weights normalized over the temporal axis, nearest-neighbor
/// unpooling, residual into the event branch.
pub struct Tca<S: Scalar> {
    align: MbConv<S>,
    q: Conv2d<S>,
    k: Conv2d<S>,
    v: Conv2d<S>,
    out: Conv2d<S>,
    cfg: AttentionConfig,
    c_evt: usize,
    c_img: usize,
}

impl<S: Scalar> Tca<S> {
    pub fn new(rng: &mut TrainRng, c_evt: usize, c_img: usize, cfg: AttentionConfig) -> Self {
        Tca {
            align: MbConv::new(rng, c_img, c_evt, cfg.mbconv_expansion),
            q: Conv2d::new(rng, c_evt, c_evt, 1, 1, 0),
            k: Conv2d::new(rng, c_evt, c_evt, 1, 1, 0),
            v: Conv2d::new(rng, c_evt, c_evt, 1, 1, 0),
            out: Conv2d::zeros(c_evt, c_evt, 1, 1, 0),
            cfg,
            c_evt,
            c_img,
        }
    }

    /// `evt`: `(N, T, Ce, H, W)`, `img`: `(N, Ci, H, W)` -> event shape.
    pub fn forward(&self, evt: &Tensor<S>, img: &Tensor<S>) -> Result<Tensor<S>> {
        let es = evt.shape();
        let is = img.shape();
        if es.len() != 5 || is.len() != 4 || es[2] != self.c_evt || is[1] != self.c_img {
            return Err(Error::domain(format!(
                "tca shape mismatch: event {es:?}, image {is:?}"
            )));
        }
        if es[0] != is[0] || es[3] != is[2] || es[4] != is[3] {
            return Err(Error::domain(format!(
                "tca: event {es:?} and image {is:?} disagree on batch or spatial dims"
            )));
        }
        let (n, t, ce, h, w) = (es[0], es[1], es[2], es[3], es[4]);
        let p = self.cfg.pool_scale;
        if h % p != 0 || w % p != 0 {
            return Err(Error::domain(format!(
                "tca: pool scale {p} must divide {h}x{w}"
            )));
        }
        let heads = self.cfg.heads;
        if ce % heads != 0 {
            return Err(Error::domain(format!(
                "tca: heads {heads} must divide event channels {ce}"
            )));
        }
        let (hp, wp) = (h / p, w / p);

        let folded = evt.reshape(&[n * t, ce, h, w]);
        let pooled_e = avg_pool2d(&folded, p);
        let q = self.q.forward(&pooled_e); // (n*t, ce, hp, wp)

        let aligned = self.align.forward(img)?;
        let pooled_i = avg_pool2d(&aligned, p);
        let k = self.k.forward(&pooled_i); // (n, ce, hp, wp)
        let v = self.v.forward(&pooled_i);

        let ch = ce / heads;
        let q5 = q.reshape(&[n, t, heads, ch, hp, wp]);
        let k5 = k.reshape(&[n, 1, heads, ch, hp, wp]);
        let v5 = v.reshape(&[n, 1, heads, ch, hp, wp]);

        // scores over the temporal axis: one key per location
        let scale = S::from_f64(1.0 / (ch as f64).sqrt());
        let scores = q5.mul(&k5).sum_axes(&[3], true).scale(scale); // (n, t, heads, 1, hp, wp)
        record_scores((n * t * heads * hp * wp) as u64);
        let alpha = scores.softmax(1);
        let agg = alpha.mul(&v5); // (n, t, heads, ch, hp, wp)

        let agg = agg.reshape(&[n * t, ce, hp, wp]);
        let projected = self.out.forward(&agg);
        let up = upsample_nearest2d(&projected, p);
        Ok(up.reshape(&[n, t, ce, h, w]).add(evt))
    }
}

impl<S: Scalar> Params<S> for Tca<S> {
    fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        self.align.collect(&join(prefix, "align"), out);
        self.q.collect(&join(prefix, "q"), out);
        self.k.collect(&join(prefix, "k"), out);
        self.v.collect(&join(prefix, "v"), out);
        self.out.collect(&join(prefix, "out"), out);
    }
}

// ---------------------------------------------------------------------------
// Spatial cross attention
// ---------------------------------------------------------------------------

enum Partition {
    Full,
    /// MaxViT block partition: local `w x w` windows.
    Block(usize),
    /// MaxViT grid partition: `w x w` dilated grids.
    Grid(usize),
}

struct AttnProj<S: Scalar> {
    q: Conv2d<S>,
    k: Conv2d<S>,
    v: Conv2d<S>,
    out: Conv2d<S>,
}

impl<S: Scalar> AttnProj<S> {
    fn new(rng: &mut TrainRng, c: usize) -> Self {
        AttnProj {
            q: Conv2d::new(rng, c, c, 1, 1, 0),
            k: Conv2d::new(rng, c, c, 1, 1, 0),
            v: Conv2d::new(rng, c, c, 1, 1, 0),
            out: Conv2d::zeros(c, c, 1, 1, 0),
        }
    }
}

impl<S: Scalar> Params<S> for AttnProj<S> {
    fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        self.q.collect(&join(prefix, "q"), out);
        self.k.collect(&join(prefix, "k"), out);
        self.v.collect(&join(prefix, "v"), out);
        self.out.collect(&join(prefix, "out"), out);
    }
}

/// Spatial cross attention: the temporally flattened, channel-aligned event
/// feature provides keys/values for every image-branch query. Full mode
/// attends across all spatial positions; windowed mode runs MaxViT-style
/// block attention followed by grid attention.
pub struct Sca<S: Scalar> {
    align: MbConv<S>,
    block: AttnProj<S>,
    grid: Option<AttnProj<S>>,
    cfg: AttentionConfig,
    c_kv: usize,
    c_img: usize,
}

impl<S: Scalar> Sca<S> {
    /// `c_kv` is the raw key/value source channel count before alignment
    /// (for the encoder: `T * Ce`).
    pub fn new(rng: &mut TrainRng, c_kv: usize, c_img: usize, cfg: AttentionConfig) -> Self {
        Sca {
            align: MbConv::new(rng, c_kv, c_img, cfg.mbconv_expansion),
            block: AttnProj::new(rng, c_img),
            grid: if cfg.window > 0 {
                Some(AttnProj::new(rng, c_img))
            } else {
                None
            },
            cfg,
            c_kv,
            c_img,
        }
    }

    /// `evt`: `(N, T, Ce, H, W)` with `T*Ce == c_kv`; `img`: `(N, Ci, H, W)`.
    pub fn forward(&self, evt: &Tensor<S>, img: &Tensor<S>) -> Result<Tensor<S>> {
        let es = evt.shape();
        if es.len() != 5 {
            return Err(Error::domain(format!(
                "sca expects a 5-D event feature, got {es:?}"
            )));
        }
        let flat = evt.reshape(&[es[0], es[1] * es[2], es[3], es[4]]);
        self.forward_kv(&flat, img)
    }

    /// Cross attention against an arbitrary 4-D key/value source (also used
    /// by the decoder to fuse pyramid features).
    pub fn forward_kv(&self, kv: &Tensor<S>, img: &Tensor<S>) -> Result<Tensor<S>> {
        let ks = kv.shape();
        let is = img.shape();
        if ks.len() != 4 || is.len() != 4 || ks[1] != self.c_kv || is[1] != self.c_img {
            return Err(Error::domain(format!(
                "sca shape mismatch: kv {ks:?} (want C={}), image {is:?} (want C={})",
                self.c_kv, self.c_img
            )));
        }
        if ks[0] != is[0] || ks[2] != is[2] || ks[3] != is[3] {
            return Err(Error::domain(format!(
                "sca: kv {ks:?} and image {is:?} disagree on batch or spatial dims"
            )));
        }
        let (h, w) = (is[2], is[3]);
        let heads = self.cfg.heads;
        if self.c_img % heads != 0 {
            return Err(Error::domain(format!(
                "sca: heads {heads} must divide image channels {}",
                self.c_img
            )));
        }
        let aligned = self.align.forward(kv)?;

        if self.cfg.window == 0 {
            return Ok(self.attend(img, &aligned, &self.block, Partition::Full, heads));
        }
        let win = self.cfg.window.min(h).min(w);
        if h % win != 0 || w % win != 0 {
            return Err(Error::domain(format!(
                "sca: window {win} must divide spatial dims {h}x{w}"
            )));
        }
        let after_block = self.attend(img, &aligned, &self.block, Partition::Block(win), heads);
        let grid = self.grid.as_ref().expect("windowed mode has grid projections");
        Ok(self.attend(&after_block, &aligned, grid, Partition::Grid(win), heads))
    }

    fn attend(
        &self,
        img: &Tensor<S>,
        kv: &Tensor<S>,
        proj: &AttnProj<S>,
        part: Partition,
        heads: usize,
    ) -> Tensor<S> {
        let is = img.shape();
        let (n, c, h, w) = (is[0], is[1], is[2], is[3]);
        let q = proj.q.forward(img);
        let k = proj.k.forward(kv);
        let v = proj.v.forward(kv);

        // partition into (groups, tokens, channels) with heads folded into
        // the batch axis
        let to_tokens = |x: &Tensor<S>| -> (Tensor<S>, usize) {
            match part {
                Partition::Full => {
                    let t = x
                        .reshape(&[n, heads, c / heads, h * w])
                        .permute(&[0, 1, 3, 2])
                        .reshape(&[n * heads, h * w, c / heads]);
                    (t, h * w)
                }
                Partition::Block(win) => {
                    let (nh, nw) = (h / win, w / win);
                    let t = x
                        .reshape(&[n, heads, c / heads, nh, win, nw, win])
                        .permute(&[0, 1, 3, 5, 4, 6, 2])
                        .reshape(&[n * heads * nh * nw, win * win, c / heads]);
                    (t, win * win)
                }
                Partition::Grid(win) => {
                    let (nh, nw) = (h / win, w / win);
                    let t = x
                        .reshape(&[n, heads, c / heads, win, nh, win, nw])
                        .permute(&[0, 1, 4, 6, 3, 5, 2])
                        .reshape(&[n * heads * nh * nw, win * win, c / heads]);
                    (t, win * win)
                }
            }
        };
        let from_tokens = |x: &Tensor<S>| -> Tensor<S> {
            match part {
                Partition::Full => x
                    .reshape(&[n, heads, h * w, c / heads])
                    .permute(&[0, 1, 3, 2])
                    .reshape(&[n, c, h, w]),
                Partition::Block(win) => {
                    let (nh, nw) = (h / win, w / win);
                    x.reshape(&[n, heads, nh, nw, win, win, c / heads])
                        .permute(&[0, 1, 6, 2, 4, 3, 5])
                        .reshape(&[n, c, h, w])
                }
                Partition::Grid(win) => {
                    let (nh, nw) = (h / win, w / win);
                    x.reshape(&[n, heads, nh, nw, win, win, c / heads])
                        .permute(&[0, 1, 6, 4, 2, 5, 3])
                        .reshape(&[n, c, h, w])
                }
            }
        };

        let (qt, tokens) = to_tokens(&q);
        let (kt, _) = to_tokens(&k);
        let (vt, _) = to_tokens(&v);
        let groups = qt.shape()[0];
        let scale = S::from_f64(1.0 / ((c / heads) as f64).sqrt());
        let scores = qt.bmm(&kt.permute(&[0, 2, 1])).scale(scale);
        record_scores((groups * tokens * tokens) as u64);
        let alpha = scores.softmax(2);
        let agg = alpha.bmm(&vt);
        let merged = from_tokens(&agg);
        proj.out.forward(&merged).add(img)
    }
}

impl<S: Scalar> Params<S> for Sca<S> {
    fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        self.align.collect(&join(prefix, "align"), out);
        self.block.collect(&join(prefix, "block"), out);
        if let Some(g) = &self.grid {
            g.collect(&join(prefix, "grid"), out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::randn_array;
    use rand::SeedableRng;

    fn rng(seed: u64) -> TrainRng {
        TrainRng::seed_from_u64(seed)
    }

    fn full_cfg() -> AttentionConfig {
        AttentionConfig {
            window: 0,
            ..Default::default()
        }
    }

    #[test]
    fn attention_cost_examples() {
        // B=8, H=W=8, p=2
        let (full, fact) = attention_cost(8, 8, 8, 2).unwrap();
        assert_eq!(full, 8 * 64 * 64);
        assert_eq!(fact, (2 + 64) * 64);
        // B=p^2 with 1x1 spatial (p=1 so the pool divides)
        let (full, fact) = attention_cost(1, 1, 1, 1).unwrap();
        assert_eq!(full, 1);
        assert_eq!(fact, 2);
        // indivisible pool scale
        assert!(attention_cost(4, 3, 4, 2).is_err());
    }

    #[test]
    fn attention_cost_dominance() {
        for bins in [2usize, 4, 8, 16] {
            for hw in [(2usize, 2usize), (4, 4), (8, 16), (32, 32)] {
                let (full, fact) = attention_cost(bins, hw.0, hw.1, 2).unwrap();
                assert!(fact < full, "bins {bins}, {hw:?}: {fact} !< {full}");
            }
        }
    }

    #[test]
    fn align_channels_shape_contracts() {
        let mut r = rng(9);
        let mb = MbConv::<f64>::new(&mut r, 24, 16, 2);
        let x = Tensor::from_array(randn_array(&mut r, &[1, 24, 8, 8], 1.0));
        assert_eq!(mb.forward(&x).unwrap().shape(), vec![1, 16, 8, 8]);
        // same target channels: shape unchanged, residual connection active
        let mb_same = MbConv::<f64>::new(&mut r, 16, 16, 2);
        let y = Tensor::from_array(randn_array(&mut r, &[1, 16, 8, 8], 1.0));
        let out = mb_same.forward(&y).unwrap();
        assert_eq!(out.shape(), y.shape());
        // wrong channel count is a domain error
        assert!(mb.forward(&y).is_err());
    }

    #[test]
    fn tca_preserves_shape() {
        let mut r = rng(1);
        let cfg = AttentionConfig::default();
        let tca = Tca::<f32>::new(&mut r, 16, 24, cfg);
        let evt = Tensor::from_array(randn_array(&mut r, &[2, 8, 16, 32, 32], 1.0));
        let img = Tensor::from_array(randn_array(&mut r, &[2, 24, 32, 32], 1.0));
        let out = tca.forward(&evt, &img).unwrap();
        assert_eq!(out.shape(), vec![2, 8, 16, 32, 32]);
    }

    #[test]
    fn tca_single_bin_weight_is_one() {
        // With one temporal bin the softmax weight is exactly 1, so the
        // output is the residual input plus the projected image value.
        let mut r = rng(2);
        let cfg = AttentionConfig {
            pool_scale: 1,
            window: 0,
            ..Default::default()
        };
        let mut tca = Tca::<f64>::new(&mut r, 4, 6, cfg);
        // use a non-zero output projection so the fusion term is visible
        tca.out = Conv2d::new(&mut r, 4, 4, 1, 1, 0);
        let evt = Tensor::from_array(randn_array(&mut r, &[1, 1, 4, 4, 4], 1.0));
        let img = Tensor::from_array(randn_array(&mut r, &[1, 6, 4, 4], 1.0));
        let out = tca.forward(&evt, &img).unwrap();

        // expected: evt + out_proj(V) with V = v(align(img)) (pool scale 1)
        let aligned = tca.align.forward(&img).unwrap();
        let v = tca.v.forward(&aligned);
        let expected = tca
            .out
            .forward(&v)
            .reshape(&[1, 1, 4, 4, 4])
            .add(&evt);
        let diff = out
            .to_array()
            .iter()
            .zip(expected.to_array().iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(diff < 1e-12, "max diff {diff}");
    }

    #[test]
    fn tca_rows_sum_to_one() {
        // indirectly: uniform queries/keys give uniform alpha; aggregated
        // value equals plain value mean over t. Instead verify directly on
        // the softmax primitive over the temporal axis with random scores.
        let mut r = rng(3);
        let scores = Tensor::<f64>::from_array(randn_array(&mut r, &[2, 8, 1, 1, 3, 3], 1.0));
        let alpha = scores.softmax(1);
        let sums = alpha.sum_axes(&[1], false).to_array();
        for &s in sums.iter() {
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn sca_preserves_shape_full_and_windowed() {
        let mut r = rng(4);
        for cfg in [full_cfg(), AttentionConfig::default()] {
            let sca = Sca::<f32>::new(&mut r, 8 * 16, 24, cfg);
            let evt = Tensor::from_array(randn_array(&mut r, &[2, 8, 16, 32, 32], 1.0));
            let img = Tensor::from_array(randn_array(&mut r, &[2, 24, 32, 32], 1.0));
            let out = sca.forward(&evt, &img).unwrap();
            assert_eq!(out.shape(), vec![2, 24, 32, 32]);
        }
    }

    #[test]
    fn sca_zero_event_zero_out_proj_is_identity() {
        let mut r = rng(5);
        let sca = Sca::<f64>::new(&mut r, 2 * 4, 8, AttentionConfig::default());
        let evt = Tensor::zeros(&[1, 2, 4, 8, 8]);
        let img = Tensor::from_array(randn_array(&mut r, &[1, 8, 8, 8], 1.0));
        // output projections are zero-initialized by construction
        let out = sca.forward(&evt, &img).unwrap();
        let diff = out
            .to_array()
            .iter()
            .zip(img.to_array().iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(diff < 1e-12);
    }

    #[test]
    fn sca_single_pixel_grid_degenerates_to_single_token() {
        let mut r = rng(6);
        let mut sca = Sca::<f64>::new(&mut r, 2 * 4, 8, AttentionConfig::default());
        sca.block.out = Conv2d::new(&mut r, 8, 8, 1, 1, 0);
        if let Some(g) = sca.grid.as_mut() {
            g.out = Conv2d::new(&mut r, 8, 8, 1, 1, 0);
        }
        let evt = Tensor::from_array(randn_array(&mut r, &[1, 2, 4, 1, 1], 1.0));
        let img = Tensor::from_array(randn_array(&mut r, &[1, 8, 1, 1], 1.0));
        let out = sca.forward(&evt, &img).unwrap();
        // single token: softmax weight 1 -> each pass adds out_proj(v)
        let aligned = sca.align.forward(&evt.reshape(&[1, 8, 1, 1])).unwrap();
        let after_block = sca
            .block
            .out
            .forward(&sca.block.v.forward(&aligned))
            .add(&img);
        let grid = sca.grid.as_ref().unwrap();
        let expected = grid
            .out
            .forward(&grid.v.forward(&aligned))
            .add(&after_block);
        let diff = out
            .to_array()
            .iter()
            .zip(expected.to_array().iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(diff < 1e-12, "max diff {diff}");
    }

    #[test]
    fn instrumented_counts_match_cost_model_in_full_mode() {
        let mut r = rng(7);
        for &(bins, ce, ci, h, w) in
            [(8usize, 8usize, 12usize, 8usize, 8usize), (4, 4, 8, 4, 8), (2, 4, 4, 2, 2)].iter()
        {
            let cfg = full_cfg();
            let tca = Tca::<f32>::new(&mut r, ce, ci, cfg);
            let sca = Sca::<f32>::new(&mut r, bins * ce, ci, cfg);
            let evt = Tensor::from_array(randn_array(&mut r, &[1, bins, ce, h, w], 1.0));
            let img = Tensor::from_array(randn_array(&mut r, &[1, ci, h, w], 1.0));
            let (_, counted) = count_attention_scores(|| {
                tca.forward(&evt, &img).unwrap();
                sca.forward(&evt, &img).unwrap();
            });
            let (_, fact) = attention_cost(bins, h, w, cfg.pool_scale).unwrap();
            assert_eq!(counted as u128, fact, "bins {bins} {h}x{w}");
        }
    }

    #[test]
    fn gradients_flow_through_tca_and_sca() {
        use crate::nn::gradcheck::check_gradients;
        let mut r = rng(8);
        let cfg = AttentionConfig {
            window: 2,
            pool_scale: 2,
            heads: 1,
            mbconv_expansion: 2,
        };
        let tca = Tca::<f64>::new(&mut r, 2, 3, cfg);
        let sca = Sca::<f64>::new(&mut r, 2 * 2, 3, cfg);
        // randomize the zero-initialized output projections so their
        // gradients are informative
        for p in [&tca.out.weight, &sca.block.out.weight] {
            p.set_value(randn_array(&mut r, &p.shape(), 0.3));
        }
        if let Some(g) = &sca.grid {
            g.out.weight.set_value(randn_array(&mut r, &g.out.weight.shape(), 0.3));
        }
        let evt = Tensor::param(randn_array(&mut r, &[1, 2, 2, 4, 4], 0.7));
        let img = Tensor::param(randn_array(&mut r, &[1, 3, 4, 4], 0.7));
        let mut params = vec![evt.clone(), img.clone()];
        params.extend(tca.params());
        params.extend(sca.params());
        let f = {
            let (tca_e, img_c, evt_c) = (tca, img.clone(), evt.clone());
            let sca_e = sca;
            move || {
                let a = tca_e.forward(&evt_c, &img_c).unwrap();
                let b = sca_e.forward(&a, &img_c).unwrap();
                b.powi(2).mean_all()
            }
        };
        let rep = check_gradients(&params, f, 1e-5, Some(40), 123);
        assert!(
            rep.max_rel_err <= 1e-3,
            "max rel err {} over {} elements",
            rep.max_rel_err,
            rep.checked
        );
    }
}
