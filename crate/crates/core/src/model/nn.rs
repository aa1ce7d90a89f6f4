//! Minimal CNN engine: convolution, batch normalization, residual blocks,
//! global average pooling, and a fully-connected head, with hand-written
//! backward passes.
//!
//! Everything is generic over the element type so the same graph runs in f32
//! for training and in f64 for finite-difference gradient checks.
//!
//! Activations are kept in NHWC layout: the im2col product then lands
//! directly in the output layout and per-channel work runs over contiguous
//! rows. All arithmetic happens in one fixed order, so results are
//! bit-reproducible for a given seed regardless of thread count.

use super::ModelConfig;
use crate::error::{Error, Result};
use ndarray::{Array1, Array2, Array4, ArrayD, ArrayViewMutD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Element type of the network: f32 for training, f64 for gradient checks.
pub trait Elem:
    num_traits::Float
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + Send
    + Sync
    + std::fmt::Debug
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Elem for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Elem for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

// ---------------------------------------------------------------------------
// Convolution (NHWC)
// ---------------------------------------------------------------------------

/// 2-D convolution over NHWC activations.
#[derive(Debug, Clone)]
pub struct Conv2d<E> {
    /// (kh, kw, in_channels, out_channels); matches the im2col column order.
    pub weight: Array4<E>,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

pub struct ConvCache<E> {
    col: Array2<E>,
    in_shape: (usize, usize, usize, usize),
}

fn out_hw(
    h: usize,
    w: usize,
    k: (usize, usize),
    s: (usize, usize),
    p: (usize, usize),
) -> (usize, usize) {
    ((h + 2 * p.0 - k.0) / s.0 + 1, (w + 2 * p.1 - k.1) / s.1 + 1)
}

/// im2col over an NHWC batch: rows index (sample, oy, ox), columns index
/// (ky, kx, channel). Channel runs are copied as contiguous slices.
fn im2col<E: Elem>(
    x: &Array4<E>,
    k: (usize, usize),
    s: (usize, usize),
    p: (usize, usize),
) -> Array2<E> {
    let (n, h, w, c) = x.dim();
    let (oh, ow) = out_hw(h, w, k, s, p);
    let xs = x.as_slice().expect("standard layout");
    let cols = k.0 * k.1 * c;
    let mut out = Array2::<E>::zeros((n * oh * ow, cols));
    let os = out.as_slice_mut().expect("standard layout");
    for ni in 0..n {
        let x_n = ni * h * w * c;
        for oy in 0..oh {
            let iy0 = (oy * s.0) as isize - p.0 as isize;
            for ox in 0..ow {
                let ix0 = (ox * s.1) as isize - p.1 as isize;
                let row = (((ni * oh) + oy) * ow + ox) * cols;
                for ky in 0..k.0 {
                    let iy = iy0 + ky as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let x_r = x_n + iy as usize * w * c;
                    let col_r = row + ky * k.1 * c;
                    for kx in 0..k.1 {
                        let ix = ix0 + kx as isize;
                        if ix >= 0 && ix < w as isize {
                            let src = x_r + ix as usize * c;
                            let dst = col_r + kx * c;
                            os[dst..dst + c].copy_from_slice(&xs[src..src + c]);
                        }
                    }
                }
            }
        }
    }
    out
}

/// Scatter-add of column gradients back onto the NHWC input gradient.
fn col2im<E: Elem>(
    dcol: &Array2<E>,
    dx: &mut Array4<E>,
    k: (usize, usize),
    s: (usize, usize),
    p: (usize, usize),
) {
    let (n, h, w, c) = dx.dim();
    let (oh, ow) = out_hw(h, w, k, s, p);
    let ds = dcol.as_slice().expect("standard layout");
    let xs = dx.as_slice_mut().expect("standard layout");
    let cols = k.0 * k.1 * c;
    for ni in 0..n {
        let x_n = ni * h * w * c;
        for oy in 0..oh {
            let iy0 = (oy * s.0) as isize - p.0 as isize;
            for ox in 0..ow {
                let ix0 = (ox * s.1) as isize - p.1 as isize;
                let row = (((ni * oh) + oy) * ow + ox) * cols;
                for ky in 0..k.0 {
                    let iy = iy0 + ky as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let x_r = x_n + iy as usize * w * c;
                    let col_r = row + ky * k.1 * c;
                    for kx in 0..k.1 {
                        let ix = ix0 + kx as isize;
                        if ix >= 0 && ix < w as isize {
                            let dst = x_r + ix as usize * c;
                            let src = col_r + kx * c;
                            for ci in 0..c {
                                xs[dst + ci] = xs[dst + ci] + ds[src + ci];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<E: Elem> Conv2d<E> {
    fn kernel(&self) -> (usize, usize) {
        let d = self.weight.dim();
        (d.0, d.1)
    }

    fn weight_mat(&self) -> ndarray::ArrayView2<'_, E> {
        let (kh, kw, ic, oc) = self.weight.dim();
        self.weight
            .view()
            .into_shape_with_order((kh * kw * ic, oc))
            .expect("contiguous weight")
    }

    pub fn forward(&self, x: &Array4<E>, keep_cache: bool) -> (Array4<E>, Option<ConvCache<E>>) {
        let (n, h, w, _) = x.dim();
        let k = self.kernel();
        let oc = self.weight.dim().3;
        let (oh, ow) = out_hw(h, w, k, self.stride, self.padding);
        let col = im2col(x, k, self.stride, self.padding);
        let out_mat = col.dot(&self.weight_mat());
        let out = out_mat
            .into_shape_with_order((n, oh, ow, oc))
            .expect("conv output shape");
        let cache = keep_cache.then(|| ConvCache {
            col,
            in_shape: x.dim(),
        });
        (out, cache)
    }

    /// Returns (dx, dweight).
    pub fn backward(&self, cache: &ConvCache<E>, dout: &Array4<E>) -> (Array4<E>, Array4<E>) {
        let (n, oh, ow, oc) = dout.dim();
        let k = self.kernel();
        let dmat = dout
            .view()
            .into_shape_with_order((n * oh * ow, oc))
            .expect("contiguous dout");
        let dw_mat = cache.col.t().dot(&dmat);
        let dweight = dw_mat
            .into_shape_with_order(self.weight.dim())
            .expect("weight shape");
        let dcol = dmat.dot(&self.weight_mat().t());
        let mut dx = Array4::<E>::zeros(cache.in_shape);
        col2im(&dcol, &mut dx, k, self.stride, self.padding);
        (dx, dweight)
    }
}

// ---------------------------------------------------------------------------
// Batch normalization (NHWC, per-channel over N·H·W)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct BatchNorm<E> {
    pub gamma: Array1<E>,
    pub beta: Array1<E>,
    pub running_mean: Array1<E>,
    pub running_var: Array1<E>,
    pub momentum: f64,
    pub eps: f64,
}

pub struct BnCache<E> {
    xhat: Array4<E>,
    inv_std: Array1<E>,
    batch_mean: Array1<E>,
    batch_var_unbiased: Array1<E>,
    m: usize,
}

impl<E: Elem> BatchNorm<E> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Array1::from_elem(channels, E::one()),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::from_elem(channels, E::one()),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    /// Training-mode forward with batch statistics, accumulated in f64 in
    /// fixed index order. Pure: running statistics are updated separately via
    /// [`BatchNorm::update_running`].
    pub fn forward_train(&self, x: &Array4<E>) -> (Array4<E>, BnCache<E>) {
        let (n, h, w, c) = x.dim();
        let m = n * h * w;
        let xs = x.as_slice().expect("standard layout");
        let mut sums = vec![0.0f64; c];
        let mut sqs = vec![0.0f64; c];
        for row in 0..m {
            let base = row * c;
            for ci in 0..c {
                let v = xs[base + ci].to_f64();
                sums[ci] += v;
                sqs[ci] += v * v;
            }
        }
        let mut mean = Array1::<E>::zeros(c);
        let mut var = Array1::<E>::zeros(c);
        let mut inv_std = Array1::<E>::zeros(c);
        let mut mu = vec![E::zero(); c];
        let mut is = vec![E::zero(); c];
        for ci in 0..c {
            let m_f = sums[ci] / m as f64;
            let v_f = (sqs[ci] / m as f64 - m_f * m_f).max(0.0);
            mean[ci] = E::from_f64(m_f);
            var[ci] = E::from_f64(v_f);
            let i_f = 1.0 / (v_f + self.eps).sqrt();
            inv_std[ci] = E::from_f64(i_f);
            mu[ci] = E::from_f64(m_f);
            is[ci] = E::from_f64(i_f);
        }
        let mut xhat = Array4::<E>::zeros(x.dim());
        let mut y = Array4::<E>::zeros(x.dim());
        {
            let hs = xhat.as_slice_mut().expect("standard layout");
            let ys = y.as_slice_mut().expect("standard layout");
            for row in 0..m {
                let base = row * c;
                for ci in 0..c {
                    let hnorm = (xs[base + ci] - mu[ci]) * is[ci];
                    hs[base + ci] = hnorm;
                    ys[base + ci] = self.gamma[ci] * hnorm + self.beta[ci];
                }
            }
        }
        let unbias = if m > 1 {
            E::from_f64(m as f64 / (m as f64 - 1.0))
        } else {
            E::one()
        };
        let cache = BnCache {
            xhat,
            inv_std,
            batch_mean: mean,
            batch_var_unbiased: var.mapv(|v| v * unbias),
            m,
        };
        (y, cache)
    }

    pub fn forward_eval(&self, x: &Array4<E>) -> Array4<E> {
        let (n, h, w, c) = x.dim();
        let m = n * h * w;
        let xs = x.as_slice().expect("standard layout");
        let mut scale = vec![E::zero(); c];
        let mut shift = vec![E::zero(); c];
        for ci in 0..c {
            let is = E::one() / (self.running_var[ci] + E::from_f64(self.eps)).sqrt();
            scale[ci] = self.gamma[ci] * is;
            shift[ci] = self.beta[ci] - self.gamma[ci] * self.running_mean[ci] * is;
        }
        let mut y = Array4::<E>::zeros(x.dim());
        {
            let ys = y.as_slice_mut().expect("standard layout");
            for row in 0..m {
                let base = row * c;
                for ci in 0..c {
                    ys[base + ci] = scale[ci] * xs[base + ci] + shift[ci];
                }
            }
        }
        y
    }

    pub fn update_running(&mut self, cache: &BnCache<E>) {
        let mom = E::from_f64(self.momentum);
        let keep = E::one() - mom;
        for ci in 0..self.running_mean.len() {
            self.running_mean[ci] = keep * self.running_mean[ci] + mom * cache.batch_mean[ci];
            self.running_var[ci] = keep * self.running_var[ci] + mom * cache.batch_var_unbiased[ci];
        }
    }

    /// Returns (dx, dgamma, dbeta).
    pub fn backward(
        &self,
        cache: &BnCache<E>,
        dy: &Array4<E>,
    ) -> (Array4<E>, Array1<E>, Array1<E>) {
        let (n, h, w, c) = dy.dim();
        let m = n * h * w;
        let ds = dy.as_slice().expect("standard layout");
        let hs = cache.xhat.as_slice().expect("standard layout");
        let mut sum_dy = vec![0.0f64; c];
        let mut sum_dy_xh = vec![0.0f64; c];
        for row in 0..m {
            let base = row * c;
            for ci in 0..c {
                let d = ds[base + ci].to_f64();
                sum_dy[ci] += d;
                sum_dy_xh[ci] += d * hs[base + ci].to_f64();
            }
        }
        let mut dgamma = Array1::<E>::zeros(c);
        let mut dbeta = Array1::<E>::zeros(c);
        let mut g_is = vec![E::zero(); c];
        let mut mean_dy = vec![E::zero(); c];
        let mut mean_dy_xh = vec![E::zero(); c];
        for ci in 0..c {
            dgamma[ci] = E::from_f64(sum_dy_xh[ci]);
            dbeta[ci] = E::from_f64(sum_dy[ci]);
            g_is[ci] = self.gamma[ci] * cache.inv_std[ci];
            mean_dy[ci] = E::from_f64(sum_dy[ci] / cache.m as f64);
            mean_dy_xh[ci] = E::from_f64(sum_dy_xh[ci] / cache.m as f64);
        }
        let mut dx = Array4::<E>::zeros(dy.dim());
        {
            let xs = dx.as_slice_mut().expect("standard layout");
            for row in 0..m {
                let base = row * c;
                for ci in 0..c {
                    xs[base + ci] =
                        g_is[ci] * (ds[base + ci] - mean_dy[ci] - hs[base + ci] * mean_dy_xh[ci]);
                }
            }
        }
        (dx, dgamma, dbeta)
    }
}

// ---------------------------------------------------------------------------
// ReLU, pooling, linear
// ---------------------------------------------------------------------------

fn relu<E: Elem>(mut x: Array4<E>) -> Array4<E> {
    x.mapv_inplace(|v| if v > E::zero() { v } else { E::zero() });
    x
}

fn relu_backward<E: Elem>(out: &Array4<E>, dy: &Array4<E>) -> Array4<E> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(out).for_each(|d, o| {
        if *o <= E::zero() {
            *d = E::zero();
        }
    });
    dx
}

fn global_avg_pool<E: Elem>(x: &Array4<E>) -> Array2<E> {
    let (n, h, w, c) = x.dim();
    let scale = E::from_f64(1.0 / (h * w) as f64);
    let xs = x.as_slice().expect("standard layout");
    let mut out = Array2::<E>::zeros((n, c));
    for ni in 0..n {
        let mut acc = vec![E::zero(); c];
        let base = ni * h * w * c;
        for row in 0..h * w {
            let b = base + row * c;
            for ci in 0..c {
                acc[ci] = acc[ci] + xs[b + ci];
            }
        }
        for ci in 0..c {
            out[(ni, ci)] = acc[ci] * scale;
        }
    }
    out
}

fn global_avg_pool_backward<E: Elem>(
    dy: &Array2<E>,
    shape: (usize, usize, usize, usize),
) -> Array4<E> {
    let (n, h, w, c) = shape;
    let scale = E::from_f64(1.0 / (h * w) as f64);
    let mut dx = Array4::<E>::zeros(shape);
    {
        let xs = dx.as_slice_mut().expect("standard layout");
        for ni in 0..n {
            let base = ni * h * w * c;
            for row in 0..h * w {
                let b = base + row * c;
                for ci in 0..c {
                    xs[b + ci] = dy[(ni, ci)] * scale;
                }
            }
        }
    }
    dx
}

#[derive(Debug, Clone)]
pub struct Linear<E> {
    /// (in_features, out_features)
    pub weight: Array2<E>,
    pub bias: Array1<E>,
}

impl<E: Elem> Linear<E> {
    pub fn forward(&self, x: &Array2<E>) -> Array2<E> {
        let mut y = x.dot(&self.weight);
        for mut row in y.rows_mut() {
            for (v, b) in row.iter_mut().zip(self.bias.iter()) {
                *v = *v + *b;
            }
        }
        y
    }

    /// Returns (dx, dweight, dbias).
    pub fn backward(&self, x: &Array2<E>, dy: &Array2<E>) -> (Array2<E>, Array2<E>, Array1<E>) {
        let dw = x.t().dot(dy);
        let db = dy.sum_axis(ndarray::Axis(0));
        let dx = dy.dot(&self.weight.t());
        (dx, dw, db)
    }
}

// ---------------------------------------------------------------------------
// Residual network
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ResBlock<E> {
    pub conv1: Conv2d<E>,
    pub bn1: BatchNorm<E>,
    pub conv2: Conv2d<E>,
    pub bn2: BatchNorm<E>,
    pub shortcut: Option<(Conv2d<E>, BatchNorm<E>)>,
}

pub struct BlockCache<E> {
    conv1: ConvCache<E>,
    bn1: BnCache<E>,
    relu1: Array4<E>,
    conv2: ConvCache<E>,
    bn2: BnCache<E>,
    shortcut: Option<(ConvCache<E>, BnCache<E>)>,
    out: Array4<E>,
}

pub struct NetCache<E> {
    stem: Option<(ConvCache<E>, BnCache<E>, Array4<E>)>,
    blocks: Vec<BlockCache<E>>,
    pooled: Array2<E>,
    pool_shape: (usize, usize, usize, usize),
}

impl<E: Elem> NetCache<E> {
    /// FNV-1a digest of every ReLU activation sign. Two forward passes with
    /// the same digest share one smooth region of the loss surface, which is
    /// what central differences require.
    pub fn relu_signature(&self) -> u64 {
        let mut hash = 0xcbf29ce484222325u64;
        let mut feed = |arr: &Array4<E>| {
            for v in arr.iter() {
                hash ^= u64::from(*v > E::zero());
                hash = hash.wrapping_mul(0x100000001b3);
            }
        };
        if let Some((_, _, r)) = &self.stem {
            feed(r);
        }
        for b in &self.blocks {
            feed(&b.relu1);
            feed(&b.out);
        }
        hash
    }
}

#[derive(Debug, Clone)]
pub struct Network<E> {
    pub cfg: ModelConfig,
    pub stem: Option<(Conv2d<E>, BatchNorm<E>)>,
    pub blocks: Vec<ResBlock<E>>,
    pub fc: Linear<E>,
}

impl<E: Elem> Network<E> {
    /// Initialize from a seed: He-normal convolution and linear weights,
    /// identity batch norms. Draws are made in f64 in a fixed order, so f32
    /// and f64 instantiations of the same seed share parameters.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6e_65_74_69_6e_69_74_00);
        let he4 = |rng: &mut ChaCha8Rng, kh: usize, kw: usize, ic: usize, oc: usize| {
            let std = (2.0 / (ic * kh * kw) as f64).sqrt();
            Array4::from_shape_fn((kh, kw, ic, oc), |_| {
                let n: f64 = StandardNormal.sample(rng);
                E::from_f64(n * std)
            })
        };
        let mut ch = cfg.channels.count();
        let stem = if cfg.stem_width > 0 {
            let conv = Conv2d {
                weight: he4(&mut rng, 3, 3, ch, cfg.stem_width),
                stride: cfg.stem_stride,
                padding: (1, 1),
            };
            ch = cfg.stem_width;
            Some((conv, BatchNorm::new(ch)))
        } else {
            None
        };
        let mut blocks = Vec::with_capacity(cfg.blocks.len());
        for spec in &cfg.blocks {
            let oc = spec.out_channels;
            let conv1 = Conv2d {
                weight: he4(&mut rng, 3, 3, ch, oc),
                stride: spec.stride,
                padding: (1, 1),
            };
            let conv2 = Conv2d {
                weight: he4(&mut rng, 3, 3, oc, oc),
                stride: (1, 1),
                padding: (1, 1),
            };
            let shortcut = if spec.stride != (1, 1) || ch != oc {
                Some((
                    Conv2d {
                        weight: he4(&mut rng, 1, 1, ch, oc),
                        stride: spec.stride,
                        padding: (0, 0),
                    },
                    BatchNorm::new(oc),
                ))
            } else {
                None
            };
            blocks.push(ResBlock {
                conv1,
                bn1: BatchNorm::new(oc),
                conv2,
                bn2: BatchNorm::new(oc),
                shortcut,
            });
            ch = oc;
        }
        let head_dim = cfg.head.dim();
        let std = (2.0 / ch as f64).sqrt();
        let fc = Linear {
            weight: Array2::from_shape_fn((ch, head_dim), |_| {
                let n: f64 = StandardNormal.sample(&mut rng);
                E::from_f64(n * std)
            }),
            bias: Array1::zeros(head_dim),
        };
        Ok(Network {
            cfg: cfg.clone(),
            stem,
            blocks,
            fc,
        })
    }

    /// Expected NHWC input: (batch, frames, rows, channels).
    pub fn check_input(&self, x: &Array4<E>) -> Result<()> {
        let (_, h, w, c) = x.dim();
        let want = (
            self.cfg.input_frames,
            self.cfg.input_rows,
            self.cfg.channels.count(),
        );
        if (h, w, c) != want {
            return Err(Error::ShapeMismatch(format!(
                "batch is {h}×{w}×{c} per sample (frames×rows×channels), model expects {}×{}×{}",
                want.0, want.1, want.2
            )));
        }
        Ok(())
    }

    /// Training-mode forward pass with caches for backprop.
    pub fn forward_train(&self, x: &Array4<E>) -> Result<(Array2<E>, NetCache<E>)> {
        self.check_input(x)?;
        let mut cur;
        let stem_cache;
        match &self.stem {
            Some((conv, bn)) => {
                let (c1, cc) = conv.forward(x, true);
                let (b1, bc) = bn.forward_train(&c1);
                let r = relu(b1);
                cur = r.clone();
                stem_cache = Some((cc.expect("cache"), bc, r));
            }
            None => {
                cur = x.clone();
                stem_cache = None;
            }
        }
        let mut block_caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (c1, cc1) = block.conv1.forward(&cur, true);
            let (b1, bc1) = block.bn1.forward_train(&c1);
            let r1 = relu(b1);
            let (c2, cc2) = block.conv2.forward(&r1, true);
            let (b2, bc2) = block.bn2.forward_train(&c2);
            let (sc, sc_cache) = match &block.shortcut {
                Some((conv, bn)) => {
                    let (s1, scc) = conv.forward(&cur, true);
                    let (s2, sbc) = bn.forward_train(&s1);
                    (s2, Some((scc.expect("cache"), sbc)))
                }
                None => (cur.clone(), None),
            };
            let out = relu(b2 + sc);
            block_caches.push(BlockCache {
                conv1: cc1.expect("cache"),
                bn1: bc1,
                relu1: r1,
                conv2: cc2.expect("cache"),
                bn2: bc2,
                shortcut: sc_cache,
                out: out.clone(),
            });
            cur = out;
        }
        let pool_shape = cur.dim();
        let pooled = global_avg_pool(&cur);
        let logits = self.fc.forward(&pooled);
        Ok((
            logits,
            NetCache {
                stem: stem_cache,
                blocks: block_caches,
                pooled,
                pool_shape,
            },
        ))
    }

    /// Inference-mode forward pass (running statistics, no caches).
    pub fn forward_eval(&self, x: &Array4<E>) -> Result<Array2<E>> {
        self.check_input(x)?;
        let mut cur;
        match &self.stem {
            Some((conv, bn)) => {
                let (c1, _) = conv.forward(x, false);
                cur = relu(bn.forward_eval(&c1));
            }
            None => cur = x.clone(),
        }
        for block in &self.blocks {
            let (c1, _) = block.conv1.forward(&cur, false);
            let r1 = relu(block.bn1.forward_eval(&c1));
            let (c2, _) = block.conv2.forward(&r1, false);
            let b2 = block.bn2.forward_eval(&c2);
            let sc = match &block.shortcut {
                Some((conv, bn)) => {
                    let (s1, _) = conv.forward(&cur, false);
                    bn.forward_eval(&s1)
                }
                None => cur.clone(),
            };
            cur = relu(b2 + sc);
        }
        let pooled = global_avg_pool(&cur);
        Ok(self.fc.forward(&pooled))
    }

    /// Backward pass; gradients in canonical parameter order (see
    /// [`Network::trainable_names`]).
    pub fn backward(&self, cache: &NetCache<E>, dlogits: &Array2<E>) -> Vec<ArrayD<E>> {
        let (dpooled, dfc_w, dfc_b) = self.fc.backward(&cache.pooled, dlogits);
        let mut dcur = global_avg_pool_backward(&dpooled, cache.pool_shape);

        let mut block_grads: Vec<Vec<ArrayD<E>>> = Vec::with_capacity(self.blocks.len());
        for (block, bc) in self.blocks.iter().zip(&cache.blocks).rev() {
            let dsum = relu_backward(&bc.out, &dcur);
            let (dx_sc, sc_grads) = match (&block.shortcut, &bc.shortcut) {
                (Some((conv, bn)), Some((scc, sbc))) => {
                    let (dsc, dg, db) = bn.backward(sbc, &dsum);
                    let (dx, dw) = conv.backward(scc, &dsc);
                    (dx, Some((dw, dg, db)))
                }
                _ => (dsum.clone(), None),
            };
            let (db2, dg2, dbeta2) = block.bn2.backward(&bc.bn2, &dsum);
            let (dr1, dw2) = block.conv2.backward(&bc.conv2, &db2);
            let dr1 = relu_backward(&bc.relu1, &dr1);
            let (db1, dg1, dbeta1) = block.bn1.backward(&bc.bn1, &dr1);
            let (dx_main, dw1) = block.conv1.backward(&bc.conv1, &db1);

            dcur = dx_main + dx_sc;

            let mut grads: Vec<ArrayD<E>> = vec![
                dw1.into_dyn(),
                dg1.into_dyn(),
                dbeta1.into_dyn(),
                dw2.into_dyn(),
                dg2.into_dyn(),
                dbeta2.into_dyn(),
            ];
            if let Some((dw, dg, db)) = sc_grads {
                grads.push(dw.into_dyn());
                grads.push(dg.into_dyn());
                grads.push(db.into_dyn());
            }
            block_grads.push(grads);
        }
        block_grads.reverse();

        let mut out: Vec<ArrayD<E>> = Vec::new();
        if let (Some((conv, bn)), Some((cc, bc, r))) = (&self.stem, &cache.stem) {
            let dr = relu_backward(r, &dcur);
            let (db, dg, dbeta) = bn.backward(bc, &dr);
            let (_, dw) = conv.backward(cc, &db);
            out.push(dw.into_dyn());
            out.push(dg.into_dyn());
            out.push(dbeta.into_dyn());
        }
        for g in block_grads {
            out.extend(g);
        }
        out.push(dfc_w.into_dyn());
        out.push(dfc_b.into_dyn());
        out
    }

    /// Apply the batch statistics from a training forward pass to the running
    /// statistics of every batch norm.
    pub fn update_running_stats(&mut self, cache: &NetCache<E>) {
        if let (Some((_, bn)), Some((_, bc, _))) = (&mut self.stem, &cache.stem) {
            bn.update_running(bc);
        }
        for (block, bc) in self.blocks.iter_mut().zip(&cache.blocks) {
            block.bn1.update_running(&bc.bn1);
            block.bn2.update_running(&bc.bn2);
            if let (Some((_, bn)), Some((_, sbc))) = (&mut block.shortcut, &bc.shortcut) {
                bn.update_running(sbc);
            }
        }
    }

    /// Canonical names of the trainable tensors.
    pub fn trainable_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        if self.stem.is_some() {
            names.push("stem.conv.weight".into());
            names.push("stem.bn.gamma".into());
            names.push("stem.bn.beta".into());
        }
        for (i, block) in self.blocks.iter().enumerate() {
            names.push(format!("block{i}.conv1.weight"));
            names.push(format!("block{i}.bn1.gamma"));
            names.push(format!("block{i}.bn1.beta"));
            names.push(format!("block{i}.conv2.weight"));
            names.push(format!("block{i}.bn2.gamma"));
            names.push(format!("block{i}.bn2.beta"));
            if block.shortcut.is_some() {
                names.push(format!("block{i}.shortcut.conv.weight"));
                names.push(format!("block{i}.shortcut.bn.gamma"));
                names.push(format!("block{i}.shortcut.bn.beta"));
            }
        }
        names.push("fc.weight".into());
        names.push("fc.bias".into());
        names
    }

    /// Mutable dynamic views of the trainable tensors, in canonical order.
    pub fn trainable_views_mut(&mut self) -> Vec<ArrayViewMutD<'_, E>> {
        let mut views: Vec<ArrayViewMutD<'_, E>> = Vec::new();
        if let Some((conv, bn)) = &mut self.stem {
            views.push(conv.weight.view_mut().into_dyn());
            views.push(bn.gamma.view_mut().into_dyn());
            views.push(bn.beta.view_mut().into_dyn());
        }
        for block in &mut self.blocks {
            views.push(block.conv1.weight.view_mut().into_dyn());
            views.push(block.bn1.gamma.view_mut().into_dyn());
            views.push(block.bn1.beta.view_mut().into_dyn());
            views.push(block.conv2.weight.view_mut().into_dyn());
            views.push(block.bn2.gamma.view_mut().into_dyn());
            views.push(block.bn2.beta.view_mut().into_dyn());
            if let Some((conv, bn)) = &mut block.shortcut {
                views.push(conv.weight.view_mut().into_dyn());
                views.push(bn.gamma.view_mut().into_dyn());
                views.push(bn.beta.view_mut().into_dyn());
            }
        }
        views.push(self.fc.weight.view_mut().into_dyn());
        views.push(self.fc.bias.view_mut().into_dyn());
        views
    }

    /// All tensors (trainable plus running statistics) by canonical name.
    pub fn named_tensors(&self) -> Vec<(String, ArrayD<E>)> {
        let mut out: Vec<(String, ArrayD<E>)> = Vec::new();
        let bn_all = |prefix: &str, bn: &BatchNorm<E>, out: &mut Vec<(String, ArrayD<E>)>| {
            out.push((format!("{prefix}.gamma"), bn.gamma.clone().into_dyn()));
            out.push((format!("{prefix}.beta"), bn.beta.clone().into_dyn()));
            out.push((
                format!("{prefix}.running_mean"),
                bn.running_mean.clone().into_dyn(),
            ));
            out.push((
                format!("{prefix}.running_var"),
                bn.running_var.clone().into_dyn(),
            ));
        };
        if let Some((conv, bn)) = &self.stem {
            out.push(("stem.conv.weight".into(), conv.weight.clone().into_dyn()));
            bn_all("stem.bn", bn, &mut out);
        }
        for (i, block) in self.blocks.iter().enumerate() {
            out.push((
                format!("block{i}.conv1.weight"),
                block.conv1.weight.clone().into_dyn(),
            ));
            bn_all(&format!("block{i}.bn1"), &block.bn1, &mut out);
            out.push((
                format!("block{i}.conv2.weight"),
                block.conv2.weight.clone().into_dyn(),
            ));
            bn_all(&format!("block{i}.bn2"), &block.bn2, &mut out);
            if let Some((conv, bn)) = &block.shortcut {
                out.push((
                    format!("block{i}.shortcut.conv.weight"),
                    conv.weight.clone().into_dyn(),
                ));
                bn_all(&format!("block{i}.shortcut.bn"), bn, &mut out);
            }
        }
        out.push(("fc.weight".into(), self.fc.weight.clone().into_dyn()));
        out.push(("fc.bias".into(), self.fc.bias.clone().into_dyn()));
        out
    }

    /// Overwrite tensors from a name → tensor map. Missing names error;
    /// `skip_head` leaves the fully-connected head at its current values
    /// (used when enrolling from a pretrained extractor).
    pub fn load_named<F>(&mut self, mut lookup: F, skip_head: bool) -> Result<()>
    where
        F: FnMut(&str) -> Option<ArrayD<E>>,
    {
        let mut set = |name: String, target: &mut dyn AnyTensor<E>| -> Result<()> {
            let value = lookup(&name)
                .ok_or_else(|| Error::ShapeMismatch(format!("missing tensor '{name}'")))?;
            target.assign_from(&name, value)
        };
        if let Some((conv, bn)) = &mut self.stem {
            set("stem.conv.weight".into(), &mut conv.weight)?;
            set("stem.bn.gamma".into(), &mut bn.gamma)?;
            set("stem.bn.beta".into(), &mut bn.beta)?;
            set("stem.bn.running_mean".into(), &mut bn.running_mean)?;
            set("stem.bn.running_var".into(), &mut bn.running_var)?;
        }
        for (i, block) in self.blocks.iter_mut().enumerate() {
            set(format!("block{i}.conv1.weight"), &mut block.conv1.weight)?;
            set(format!("block{i}.bn1.gamma"), &mut block.bn1.gamma)?;
            set(format!("block{i}.bn1.beta"), &mut block.bn1.beta)?;
            set(
                format!("block{i}.bn1.running_mean"),
                &mut block.bn1.running_mean,
            )?;
            set(
                format!("block{i}.bn1.running_var"),
                &mut block.bn1.running_var,
            )?;
            set(format!("block{i}.conv2.weight"), &mut block.conv2.weight)?;
            set(format!("block{i}.bn2.gamma"), &mut block.bn2.gamma)?;
            set(format!("block{i}.bn2.beta"), &mut block.bn2.beta)?;
            set(
                format!("block{i}.bn2.running_mean"),
                &mut block.bn2.running_mean,
            )?;
            set(
                format!("block{i}.bn2.running_var"),
                &mut block.bn2.running_var,
            )?;
            if let Some((conv, bn)) = &mut block.shortcut {
                set(format!("block{i}.shortcut.conv.weight"), &mut conv.weight)?;
                set(format!("block{i}.shortcut.bn.gamma"), &mut bn.gamma)?;
                set(format!("block{i}.shortcut.bn.beta"), &mut bn.beta)?;
                set(
                    format!("block{i}.shortcut.bn.running_mean"),
                    &mut bn.running_mean,
                )?;
                set(
                    format!("block{i}.shortcut.bn.running_var"),
                    &mut bn.running_var,
                )?;
            }
        }
        if !skip_head {
            set("fc.weight".into(), &mut self.fc.weight)?;
            set("fc.bias".into(), &mut self.fc.bias)?;
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Shape-checked assignment from a dynamic tensor.
pub trait AnyTensor<E> {
    fn assign_from(&mut self, name: &str, value: ArrayD<E>) -> Result<()>;
}

macro_rules! impl_any_tensor {
    ($dim:ty) => {
        impl<E: Elem> AnyTensor<E> for ndarray::Array<E, $dim> {
            fn assign_from(&mut self, name: &str, value: ArrayD<E>) -> Result<()> {
                let fixed = value.into_dimensionality::<$dim>().map_err(|_| {
                    Error::ShapeMismatch(format!("tensor '{name}' has the wrong rank"))
                })?;
                if fixed.dim() != self.dim() {
                    return Err(Error::ShapeMismatch(format!(
                        "tensor '{name}' has shape {:?}, expected {:?}",
                        fixed.shape(),
                        self.shape()
                    )));
                }
                *self = fixed;
                Ok(())
            }
        }
    };
}

impl_any_tensor!(ndarray::Ix1);
impl_any_tensor!(ndarray::Ix2);
impl_any_tensor!(ndarray::Ix4);

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ChannelSet, Head, ModelConfig};
    use ndarray::{Array4, Axis};
    use rand::Rng;

    fn small_input(seed: u64, n: usize, cfg: &ModelConfig) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn(
            (n, cfg.input_frames, cfg.input_rows, cfg.channels.count()),
            |_| rng.gen_range(-1.0..1.0),
        )
    }

    #[test]
    fn conv_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Array4::from_shape_fn((2, 5, 7, 3), |_| rng.gen_range(-1.0f64..1.0));
        let w = Array4::from_shape_fn((3, 3, 3, 4), |_| rng.gen_range(-1.0f64..1.0));
        let conv = Conv2d {
            weight: w.clone(),
            stride: (1, 2),
            padding: (1, 1),
        };
        let (y, _) = conv.forward(&x, false);
        let (oh, ow) = out_hw(5, 7, (3, 3), (1, 2), (1, 1));
        assert_eq!(y.dim(), (2, oh, ow, 4));
        for ni in 0..2 {
            for oy in 0..oh {
                for ox in 0..ow {
                    for oc in 0..4 {
                        let mut acc = 0.0;
                        for ky in 0..3 {
                            for kx in 0..3 {
                                for ic in 0..3 {
                                    let iy = (oy + ky) as isize - 1;
                                    let ix = (ox * 2 + kx) as isize - 1;
                                    if iy >= 0 && iy < 5 && ix >= 0 && ix < 7 {
                                        acc += x[(ni, iy as usize, ix as usize, ic)]
                                            * w[(ky, kx, ic, oc)];
                                    }
                                }
                            }
                        }
                        assert!((y[(ni, oy, ox, oc)] - acc).abs() < 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn forward_shapes_and_softmax_rows() {
        let cfg = ModelConfig::desk(ChannelSet::All, Head::MultiClass(5));
        let net = Network::<f64>::init(&cfg, 7).unwrap();
        let x = small_input(1, 3, &cfg);
        let logits = net.forward_eval(&x).unwrap();
        assert_eq!(logits.dim(), (3, 5));
        for row in logits.rows() {
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let sum: f64 = row.iter().map(|&v| (v - m).exp()).sum();
            let total: f64 = row.iter().map(|&v| (v - m).exp() / sum).sum();
            assert!((total - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn duplicated_inputs_give_identical_logits() {
        let cfg = ModelConfig::desk(ChannelSet::All, Head::Binary);
        let net = Network::<f64>::init(&cfg, 9).unwrap();
        let one = small_input(2, 1, &cfg);
        let mut two = Array4::zeros((2, one.dim().1, one.dim().2, one.dim().3));
        two.index_axis_mut(Axis(0), 0)
            .assign(&one.index_axis(Axis(0), 0));
        two.index_axis_mut(Axis(0), 1)
            .assign(&one.index_axis(Axis(0), 0));
        let logits = net.forward_eval(&two).unwrap();
        for k in 0..2 {
            assert_eq!(logits[(0, k)], logits[(1, k)]);
        }
    }

    #[test]
    fn wrong_channel_count_rejected() {
        let cfg = ModelConfig::desk(ChannelSet::Right, Head::Binary);
        let net = Network::<f64>::init(&cfg, 1).unwrap();
        let four = Array4::<f64>::zeros((1, cfg.input_frames, cfg.input_rows, 4));
        assert!(matches!(
            net.forward_eval(&four),
            Err(Error::ShapeMismatch(_))
        ));
        let cfg4 = ModelConfig::desk(ChannelSet::All, Head::Binary);
        let net4 = Network::<f64>::init(&cfg4, 1).unwrap();
        let one = Array4::<f64>::zeros((1, cfg.input_frames, cfg.input_rows, 1));
        assert!(matches!(
            net4.forward_eval(&one),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn init_is_deterministic_and_dtype_consistent() {
        let cfg = ModelConfig::desk(ChannelSet::All, Head::Binary);
        let a = Network::<f32>::init(&cfg, 11).unwrap();
        let b = Network::<f32>::init(&cfg, 11).unwrap();
        let d = Network::<f64>::init(&cfg, 11).unwrap();
        for ((na, ta), ((_, tb), (_, td))) in a
            .named_tensors()
            .into_iter()
            .zip(b.named_tensors().into_iter().zip(d.named_tensors()))
        {
            assert_eq!(ta, tb, "tensor {na} differs between runs");
            for (x, y) in ta.iter().zip(td.iter()) {
                assert_eq!(*x, *y as f32, "tensor {na} differs between dtypes");
            }
        }
    }

    #[test]
    fn trainable_names_match_views() {
        let cfg = ModelConfig::desk(ChannelSet::All, Head::MultiClass(3));
        let mut net = Network::<f32>::init(&cfg, 5).unwrap();
        let names = net.trainable_names();
        let views = net.trainable_views_mut();
        assert_eq!(names.len(), views.len());
    }

    #[test]
    fn desk_model_parameter_budget() {
        let cfg = ModelConfig::desk(ChannelSet::All, Head::MultiClass(20));
        let net = Network::<f32>::init(&cfg, 5).unwrap();
        let count = net.parameter_count();
        assert!(count > 50_000 && count < 400_000, "parameter count {count}");
    }
}
