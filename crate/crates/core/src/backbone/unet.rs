//! Desk-scale U-Net: `conv3→GN→ReLU` pairs per level, max-pool down,
//! bilinear ×2 up with skip concatenation, and a 1×1 single-logit head.
//!
//! The head reads the finest block's normalized features before their last
//! ReLU. With a zero-initialized head on non-negative features, the first
//! steps drive every head weight negative (background dominates), leaving
//! foreground only expressible as "all features off" and capping
//! probabilities at `sigmoid(bias)`; signed features avoid that trap.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::*;
use super::state::ParamLayout;
use super::SegModel;
use crate::error::{Error, Result};
use crate::tensor::{Plane, Real};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    pub in_channels: usize,
    /// Channel width per level, finest first.
    pub widths: Vec<usize>,
    pub gn_groups: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            widths: vec![16, 32, 64, 128],
            gn_groups: 4,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.in_channels == 0 || self.gn_groups == 0 {
            return Err(Error::Config(
                "unet needs ≥1 level, ≥1 input channel and ≥1 group".into(),
            ));
        }
        if let Some(w) = self.widths.iter().find(|&&w| w % self.gn_groups != 0) {
            return Err(Error::Config(format!(
                "width {w} is not divisible by gn_groups={}",
                self.gn_groups
            )));
        }
        Ok(())
    }

    pub fn architecture_id(&self) -> String {
        let widths: Vec<String> = self.widths.iter().map(|w| w.to_string()).collect();
        format!(
            "unet-c{}-w{}-g{}",
            self.in_channels,
            widths.join("-"),
            self.gn_groups
        )
    }

    /// Parses an id produced by [`UNetConfig::architecture_id`].
    pub fn from_architecture_id(id: &str) -> Result<Self> {
        let bad = || Error::Checkpoint(format!("unknown architecture `{id}`"));
        let rest = id.strip_prefix("unet-c").ok_or_else(bad)?;
        let (c, rest) = rest.split_once("-w").ok_or_else(bad)?;
        let (w, g) = rest.rsplit_once("-g").ok_or_else(bad)?;
        let cfg = Self {
            in_channels: c.parse().map_err(|_| bad())?,
            widths: w
                .split('-')
                .map(|s| s.parse().map_err(|_| bad()))
                .collect::<Result<_>>()?,
            gn_groups: g.parse().map_err(|_| bad())?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug)]
struct Block {
    cin: usize,
    cout: usize,
    conv1: usize,
    gamma1: usize,
    beta1: usize,
    conv2: usize,
    gamma2: usize,
    beta2: usize,
}

impl Block {
    fn register(layout: &mut ParamLayout, prefix: &str, cin: usize, cout: usize) -> Self {
        Self {
            cin,
            cout,
            conv1: layout.push(format!("{prefix}.conv1.weight"), &[cout, cin, 3, 3]),
            gamma1: layout.push(format!("{prefix}.gn1.gamma"), &[cout]),
            beta1: layout.push(format!("{prefix}.gn1.beta"), &[cout]),
            conv2: layout.push(format!("{prefix}.conv2.weight"), &[cout, cout, 3, 3]),
            gamma2: layout.push(format!("{prefix}.gn2.gamma"), &[cout]),
            beta2: layout.push(format!("{prefix}.gn2.beta"), &[cout]),
        }
    }
}

pub struct BlockCache<T> {
    h: usize,
    w: usize,
    col1: Vec<T>,
    gn1: GroupNormCache<T>,
    a1: Vec<T>,
    col2: Vec<T>,
    gn2: GroupNormCache<T>,
    /// Whether `out` went through the final ReLU.
    relu_out: bool,
    out: Vec<T>,
}

pub struct UNetCache<T> {
    h: usize,
    w: usize,
    enc: Vec<BlockCache<T>>,
    pool_arg: Vec<Vec<u32>>,
    /// Decoder caches in level order (index 0 = finest).
    dec: Vec<Option<BlockCache<T>>>,
}

#[derive(Clone, Debug)]
pub struct UNet {
    cfg: UNetConfig,
    layout: Arc<ParamLayout>,
    enc: Vec<Block>,
    dec: Vec<Block>,
    head_w: usize,
    head_b: usize,
}

impl UNet {
    pub fn new(cfg: UNetConfig) -> Result<Self> {
        cfg.validate()?;
        let mut layout = ParamLayout::new();
        let mut enc = Vec::new();
        let mut cin = cfg.in_channels;
        for (l, &w) in cfg.widths.iter().enumerate() {
            enc.push(Block::register(&mut layout, &format!("enc{l}"), cin, w));
            cin = w;
        }
        let mut dec = Vec::new();
        for l in 0..cfg.widths.len() - 1 {
            let (w, below) = (cfg.widths[l], cfg.widths[l + 1]);
            dec.push(Block::register(
                &mut layout,
                &format!("dec{l}"),
                below + w,
                w,
            ));
        }
        let head_w = layout.push("head.weight", &[1, cfg.widths[0], 1, 1]);
        let head_b = layout.push("head.bias", &[1]);
        Ok(Self {
            cfg,
            layout: Arc::new(layout),
            enc,
            dec,
            head_w,
            head_b,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    pub fn levels(&self) -> usize {
        self.cfg.widths.len()
    }

    fn p<'a, T: Real>(&self, params: &'a [T], idx: usize) -> &'a [T] {
        &params[self.layout.range(idx)]
    }

    fn block_forward<T: Real>(
        &self,
        b: &Block,
        params: &[T],
        input: &[T],
        h: usize,
        w: usize,
        relu_out: bool,
    ) -> BlockCache<T> {
        let hw = h * w;
        let g = self.cfg.gn_groups;
        let mut col1 = Vec::new();
        let mut a1 = vec![T::zero(); b.cout * hw];
        conv3_forward(
            self.p(params, b.conv1),
            b.cin,
            b.cout,
            h,
            w,
            input,
            &mut col1,
            &mut a1,
        );
        let gn1 = group_norm_forward(
            &mut a1,
            b.cout,
            g,
            hw,
            self.p(params, b.gamma1),
            self.p(params, b.beta1),
        );
        relu_forward(&mut a1);
        let mut col2 = Vec::new();
        let mut out = vec![T::zero(); b.cout * hw];
        conv3_forward(
            self.p(params, b.conv2),
            b.cout,
            b.cout,
            h,
            w,
            &a1,
            &mut col2,
            &mut out,
        );
        let gn2 = group_norm_forward(
            &mut out,
            b.cout,
            g,
            hw,
            self.p(params, b.gamma2),
            self.p(params, b.beta2),
        );
        if relu_out {
            relu_forward(&mut out);
        }
        BlockCache {
            h,
            w,
            col1,
            gn1,
            a1,
            col2,
            gn2,
            relu_out,
            out,
        }
    }

    /// Consumes `dout`; returns the input gradient when `need_input`.
    fn block_backward<T: Real>(
        &self,
        b: &Block,
        params: &[T],
        cache: &BlockCache<T>,
        mut dout: Vec<T>,
        grads: &mut [T],
        need_input: bool,
    ) -> Option<Vec<T>> {
        let (h, w) = (cache.h, cache.w);
        let hw = h * w;
        let g = self.cfg.gn_groups;
        if cache.relu_out {
            relu_backward(&cache.out, &mut dout);
        }
        {
            let (dg, db) = two_ranges(
                grads,
                self.layout.range(b.gamma2),
                self.layout.range(b.beta2),
            );
            group_norm_backward(
                &mut dout,
                &cache.gn2,
                b.cout,
                g,
                hw,
                self.p(params, b.gamma2),
                dg,
                db,
            );
        }
        let mut da1 = vec![T::zero(); b.cout * hw];
        conv3_backward(
            self.p(params, b.conv2),
            b.cout,
            b.cout,
            h,
            w,
            &cache.col2,
            &dout,
            &mut grads[self.layout.range(b.conv2)],
            Some(&mut da1),
        );
        relu_backward(&cache.a1, &mut da1);
        {
            let (dg, db) = two_ranges(
                grads,
                self.layout.range(b.gamma1),
                self.layout.range(b.beta1),
            );
            group_norm_backward(
                &mut da1,
                &cache.gn1,
                b.cout,
                g,
                hw,
                self.p(params, b.gamma1),
                dg,
                db,
            );
        }
        let mut din = if need_input {
            Some(vec![T::zero(); b.cin * hw])
        } else {
            None
        };
        conv3_backward(
            self.p(params, b.conv1),
            b.cin,
            b.cout,
            h,
            w,
            &cache.col1,
            &da1,
            &mut grads[self.layout.range(b.conv1)],
            din.as_deref_mut(),
        );
        din
    }

    fn check_input(&self, len: usize, h: usize, w: usize) -> Result<()> {
        let factor = 1usize << (self.levels() - 1);
        if h == 0 || w == 0 || !h.is_multiple_of(factor) || !w.is_multiple_of(factor) {
            return Err(Error::Config(format!(
                "input {h}x{w} must be a positive multiple of {factor} for {} levels",
                self.levels()
            )));
        }
        if len != self.cfg.in_channels * h * w {
            return Err(Error::ShapeMismatch {
                id: "input".into(),
                expected: (h, w),
                actual: (len / (self.cfg.in_channels * w.max(1)), w),
            });
        }
        Ok(())
    }
}

fn two_ranges<T>(
    buf: &mut [T],
    a: std::ops::Range<usize>,
    b: std::ops::Range<usize>,
) -> (&mut [T], &mut [T]) {
    assert!(a.end <= b.start, "ranges must be ordered and disjoint");
    let (lo, hi) = buf.split_at_mut(b.start);
    (&mut lo[a], &mut hi[..b.end - b.start])
}

impl SegModel for UNet {
    type Cache<T: Real> = UNetCache<T>;

    fn architecture_id(&self) -> String {
        self.cfg.architecture_id()
    }

    fn layout(&self) -> Arc<ParamLayout> {
        Arc::clone(&self.layout)
    }

    fn in_channels(&self) -> usize {
        self.cfg.in_channels
    }

    fn init_params(&self, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = vec![0.0f32; self.layout.total()];
        for spec in self.layout.specs() {
            let dst = &mut values[spec.offset..spec.offset + spec.len];
            if spec.name.starts_with("head.") {
                continue;
            }
            if spec.name.ends_with(".weight") {
                let fan_in: usize = spec.shape[1..].iter().product();
                let bound = (6.0 / fan_in as f64).sqrt() as f32;
                dst.iter_mut()
                    .for_each(|v| *v = rng.gen_range(-bound..bound));
            } else if spec.name.ends_with(".gamma") {
                dst.iter_mut().for_each(|v| *v = 1.0);
            }
        }
        values
    }

    fn forward_cached<T: Real>(
        &self,
        params: &[T],
        input: &[T],
        h: usize,
        w: usize,
    ) -> Result<(Plane<T>, UNetCache<T>)> {
        self.check_input(input.len(), h, w)?;
        let levels = self.levels();
        let mut enc = Vec::with_capacity(levels);
        let mut pool_arg = Vec::with_capacity(levels.saturating_sub(1));
        let (mut ch, mut cw) = (h, w);
        let mut x = input.to_vec();
        for (l, b) in self.enc.iter().enumerate() {
            // only a single-level net feeds its encoder block to the head
            let cache = self.block_forward(b, params, &x, ch, cw, levels > 1);
            if l + 1 < levels {
                let (pooled, arg) = maxpool2_forward(&cache.out, b.cout, ch, cw);
                pool_arg.push(arg);
                x = pooled;
                ch /= 2;
                cw /= 2;
            }
            enc.push(cache);
        }
        let mut dec: Vec<Option<BlockCache<T>>> =
            (0..levels.saturating_sub(1)).map(|_| None).collect();
        for l in (0..levels - 1).rev() {
            let below = self.cfg.widths[l + 1];
            let (bh, bw) = (enc[l + 1].h, enc[l + 1].w);
            let d = match &dec.get(l + 1).and_then(|c| c.as_ref()) {
                Some(c) => &c.out,
                None => &enc[l + 1].out,
            };
            let (uh, uw) = (2 * bh, 2 * bw);
            let skip = &enc[l].out;
            let mut cat = vec![T::zero(); (below + self.cfg.widths[l]) * uh * uw];
            upsample2_forward(d, below, bh, bw, &mut cat[..below * uh * uw]);
            cat[below * uh * uw..].copy_from_slice(skip);
            dec[l] = Some(self.block_forward(&self.dec[l], params, &cat, uh, uw, l != 0));
        }
        let top = match dec.first().and_then(|c| c.as_ref()) {
            Some(c) => &c.out,
            None => &enc[0].out,
        };
        let hw = h * w;
        let hw_w = self.p(params, self.head_w);
        let bias = self.p(params, self.head_b)[0];
        let mut logits = vec![bias; hw];
        for (c, &wc) in hw_w.iter().enumerate() {
            for (o, &v) in logits.iter_mut().zip(&top[c * hw..(c + 1) * hw]) {
                *o += wc * v;
            }
        }
        Ok((
            Plane::from_vec(h, w, logits),
            UNetCache {
                h,
                w,
                enc,
                pool_arg,
                dec,
            },
        ))
    }

    fn backward_cached<T: Real>(
        &self,
        params: &[T],
        cache: &UNetCache<T>,
        upstream: &Plane<T>,
        grads: &mut [T],
    ) -> Result<()> {
        if upstream.shape() != (cache.h, cache.w) {
            return Err(Error::ShapeMismatch {
                id: "upstream".into(),
                expected: (cache.h, cache.w),
                actual: upstream.shape(),
            });
        }
        if grads.len() != self.layout.total() {
            return Err(Error::Config(
                "gradient buffer does not match layout".into(),
            ));
        }
        let levels = self.levels();
        let hw = cache.h * cache.w;
        let top = match cache.dec.first().and_then(|c| c.as_ref()) {
            Some(c) => &c.out,
            None => &cache.enc[0].out,
        };
        let w0 = self.cfg.widths[0];
        let head_w = self.p(params, self.head_w);
        let mut dtop = vec![T::zero(); w0 * hw];
        {
            let gw_range = self.layout.range(self.head_w);
            let gb = self.layout.range(self.head_b).start;
            let up = &upstream.data;
            grads[gb] += up.iter().copied().sum::<T>();
            for c in 0..w0 {
                let feat = &top[c * hw..(c + 1) * hw];
                grads[gw_range.start + c] += up.iter().zip(feat).map(|(&a, &b)| a * b).sum::<T>();
                for (d, &u) in dtop[c * hw..(c + 1) * hw].iter_mut().zip(up) {
                    *d = head_w[c] * u;
                }
            }
        }
        // Walk the decoder from the finest level downwards.
        let mut skip_grads: Vec<Option<Vec<T>>> = (0..levels).map(|_| None).collect();
        let mut d = dtop;
        for l in 0..levels - 1 {
            let bc = cache.dec[l].as_ref().expect("decoder cache");
            let below = self.cfg.widths[l + 1];
            let uhw = bc.h * bc.w;
            let dcat = self
                .block_backward(&self.dec[l], params, bc, d, grads, true)
                .expect("decoder input grad");
            skip_grads[l] = Some(dcat[below * uhw..].to_vec());
            let (bh, bw) = (bc.h / 2, bc.w / 2);
            let mut dbelow = vec![T::zero(); below * bh * bw];
            upsample2_backward(&dcat[..below * uhw], below, bh, bw, &mut dbelow);
            d = dbelow;
        }
        // `d` now holds the gradient w.r.t. the bottleneck output.
        let mut dnext: Option<Vec<T>> = None;
        for l in (0..levels).rev() {
            let bc = &cache.enc[l];
            let mut dout = if l == levels - 1 {
                std::mem::take(&mut d)
            } else {
                let mut g = skip_grads[l].take().expect("skip grad");
                if let Some(dn) = dnext.take() {
                    maxpool2_backward(&dn, &cache.pool_arg[l], &mut g);
                }
                g
            };
            if dout.is_empty() {
                dout = vec![T::zero(); bc.out.len()];
            }
            dnext = self.block_backward(&self.enc[l], params, bc, dout, grads, l > 0);
        }
        Ok(())
    }
}
