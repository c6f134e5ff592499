//! Pixel-space mini U-Net with cross-attention conditioning, the forward
//! noising process, and DDIM sampling with classifier-free guidance.
//!
//! The latent encoder/decoder is the identity at this scale; the interface
//! point is `to_model_range` / `from_model_range` so a real autoencoder
//! could slot in.

use crate::error::{DecalError, Result};
use crate::params::{init_fan_in, init_normal, init_ones, init_zeros, Binder, ParamStore};
use crate::rng::stream;
use crate::tensor::{Graph, Var};
use crate::text::ConditionSequence;
use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

// ---------------------------------------------------------------------------
// schedule
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub kind: ScheduleKind,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { steps: 1000, kind: ScheduleKind::Linear, beta_start: 1e-4, beta_end: 0.02 }
    }
}

/// Precomputed beta / alpha / alpha-bar tables.
#[derive(Debug, Clone)]
pub struct ScheduleTable {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

pub fn make_schedule(cfg: &ScheduleConfig) -> Result<ScheduleTable> {
    if cfg.steps < 10 {
        return Err(DecalError::Config(format!("schedule needs >= 10 steps, got {}", cfg.steps)));
    }
    let t = cfg.steps;
    let betas: Vec<f64> = match cfg.kind {
        ScheduleKind::Linear => (0..t)
            .map(|i| cfg.beta_start + (cfg.beta_end - cfg.beta_start) * i as f64 / (t - 1) as f64)
            .collect(),
        ScheduleKind::Cosine => {
            let s = 0.008;
            let f = |x: f64| ((x + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos().powi(2);
            let f0 = f(0.0);
            let mut b = Vec::with_capacity(t);
            let mut prev = 1.0;
            for i in 0..t {
                let ab = f((i + 1) as f64 / t as f64) / f0;
                let beta = (1.0 - ab / prev).clamp(1e-8, 0.999);
                b.push(beta);
                prev *= 1.0 - beta;
            }
            b
        }
    };
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(t);
    let mut prod = 1.0;
    for a in &alphas {
        prod *= a;
        alpha_bars.push(prod);
    }
    let table = ScheduleTable { betas, alphas, alpha_bars };
    table.validate()?;
    Ok(table)
}

impl ScheduleTable {
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.betas.len();
        for i in 0..t {
            if !(self.betas[i] > 0.0 && self.betas[i] < 1.0) {
                return Err(DecalError::Numeric(format!("beta[{i}] out of (0,1)")));
            }
            if i > 0 && self.betas[i] < self.betas[i - 1] {
                return Err(DecalError::Numeric(format!("betas not nondecreasing at {i}")));
            }
            if i > 0 && self.alpha_bars[i] >= self.alpha_bars[i - 1] {
                return Err(DecalError::Numeric(format!("alpha_bars not strictly decreasing at {i}")));
            }
        }
        if self.betas[0] >= 0.05 {
            return Err(DecalError::Numeric("alpha_bar_0 not close to 1".into()));
        }
        Ok(())
    }
}

/// Forward noising: z_t = sqrt(ab_t) z0 + sqrt(1 - ab_t) eps.
pub fn q_sample(z0: &Array3<f64>, t: usize, eps: &Array3<f64>, s: &ScheduleTable) -> Result<Array3<f64>> {
    if t >= s.len() {
        return Err(DecalError::Config(format!("t {} out of range (T = {})", t, s.len())));
    }
    if z0.shape() != eps.shape() {
        return Err(DecalError::Shape(format!("z0 {:?} vs eps {:?}", z0.shape(), eps.shape())));
    }
    let ab = s.alpha_bars[t];
    Ok(z0.mapv(|v| v * ab.sqrt()) + &eps.mapv(|v| v * (1.0 - ab).sqrt()))
}

/// Images live in [0,1]; the model operates in [-1,1].
pub fn to_model_range(x: &Array3<f64>) -> Array3<f64> {
    x.mapv(|v| v * 2.0 - 1.0)
}

pub fn from_model_range(z: &Array3<f64>) -> Array3<f64> {
    z.mapv(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0))
}

pub fn randn3(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Array3<f64> {
    let mut out = Array3::<f64>::zeros((c, h, w));
    for v in out.iter_mut() {
        *v = rng.sample(rand_distr::StandardNormal);
    }
    out
}

// ---------------------------------------------------------------------------
// U-Net
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    pub resolution: usize,
    /// channel width per level; the image halves in size at each level
    pub channels: Vec<usize>,
    /// spatial resolutions that get a cross-attention layer
    pub attn_resolutions: Vec<usize>,
    pub heads: usize,
    pub norm_groups: usize,
    pub d_cond: usize,
    pub time_dim: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            resolution: 64,
            channels: vec![32, 64, 64],
            attn_resolutions: vec![32, 16],
            heads: 2,
            norm_groups: 8,
            d_cond: 48,
            time_dim: 64,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(DecalError::Config("channels must be non-empty".into()));
        }
        for &c in &self.channels {
            if c % self.norm_groups != 0 {
                return Err(DecalError::Config(format!(
                    "channel width {c} not divisible by norm groups {}",
                    self.norm_groups
                )));
            }
            if c % self.heads != 0 {
                return Err(DecalError::Config(format!(
                    "channel width {c} not divisible by head count {}",
                    self.heads
                )));
            }
        }
        let min_res = self.resolution >> (self.channels.len() - 1);
        if min_res < 4 {
            return Err(DecalError::Config("too many levels for the resolution".into()));
        }
        Ok(())
    }

    fn level_resolution(&self, level: usize) -> usize {
        self.resolution >> level
    }

    fn has_attn(&self, level: usize) -> bool {
        self.attn_resolutions.contains(&self.level_resolution(level))
    }

    /// The highest resolution among attention layers; the attention loss is
    /// computed there.
    pub fn ca_resolution(&self) -> Option<usize> {
        self.attn_resolutions.iter().copied().max()
    }
}

/// Attention maps recorded during one forward pass.
#[derive(Debug, Clone)]
pub struct AttnLayerRecord {
    pub layer: String,
    pub resolution: (usize, usize),
    /// [heads, H*W, L]
    pub maps: Array3<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct AttentionRecord {
    pub layers: Vec<AttnLayerRecord>,
}

/// Graph-side attention tap: per-head softmax maps as live variables.
pub struct AttnTap {
    pub layer: String,
    pub resolution: (usize, usize),
    pub heads: Vec<Var>,
}

pub struct UNet {
    pub cfg: UNetConfig,
}

struct ResBlockNames {
    gn1_g: String,
    gn1_b: String,
    conv1_w: String,
    conv1_b: String,
    temb_w: String,
    temb_b: String,
    gn2_g: String,
    gn2_b: String,
    conv2_w: String,
    conv2_b: String,
    skip_w: Option<String>,
    skip_b: Option<String>,
}

fn res_names(prefix: &str, cin: usize, cout: usize) -> ResBlockNames {
    ResBlockNames {
        gn1_g: format!("{prefix}.gn1.g"),
        gn1_b: format!("{prefix}.gn1.b"),
        conv1_w: format!("{prefix}.conv1.w"),
        conv1_b: format!("{prefix}.conv1.b"),
        temb_w: format!("{prefix}.temb.w"),
        temb_b: format!("{prefix}.temb.b"),
        gn2_g: format!("{prefix}.gn2.g"),
        gn2_b: format!("{prefix}.gn2.b"),
        conv2_w: format!("{prefix}.conv2.w"),
        conv2_b: format!("{prefix}.conv2.b"),
        skip_w: (cin != cout).then(|| format!("{prefix}.skip.w")),
        skip_b: (cin != cout).then(|| format!("{prefix}.skip.b")),
    }
}

impl UNet {
    pub fn new(cfg: UNetConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(UNet { cfg })
    }

    fn init_res(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, cin: usize, cout: usize) {
        let n = res_names(prefix, cin, cout);
        store.insert(&n.gn1_g, init_ones(&[cin]));
        store.insert(&n.gn1_b, init_zeros(&[cin]));
        store.insert(&n.conv1_w, init_fan_in(rng, &[cout, cin, 3, 3]));
        store.insert(&n.conv1_b, init_zeros(&[cout]));
        store.insert(&n.temb_w, init_fan_in(rng, &[self.cfg.time_dim, cout]));
        store.insert(&n.temb_b, init_zeros(&[cout]));
        store.insert(&n.gn2_g, init_ones(&[cout]));
        store.insert(&n.gn2_b, init_zeros(&[cout]));
        // second conv zero-init: the block starts as (skip) identity
        store.insert(&n.conv2_w, init_zeros(&[cout, cout, 3, 3]));
        store.insert(&n.conv2_b, init_zeros(&[cout]));
        if let (Some(w), Some(b)) = (&n.skip_w, &n.skip_b) {
            store.insert(w, init_fan_in(rng, &[cout, cin, 1, 1]));
            store.insert(b, init_zeros(&[cout]));
        }
    }

    fn init_attn(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, c: usize) {
        let d = self.cfg.d_cond;
        let std_c = (1.0 / c as f64).sqrt();
        let std_d = (1.0 / d as f64).sqrt();
        store.insert(&format!("{prefix}.gn.g"), init_ones(&[c]));
        store.insert(&format!("{prefix}.gn.b"), init_zeros(&[c]));
        store.insert(&format!("{prefix}.wq"), init_normal(rng, &[c, c], std_c));
        store.insert(&format!("{prefix}.wk"), init_normal(rng, &[d, c], std_d));
        store.insert(&format!("{prefix}.wv"), init_normal(rng, &[d, c], std_d));
        // zero-init projection: attention starts as a no-op on the residual path
        store.insert(&format!("{prefix}.wo"), init_zeros(&[c, c]));
        store.insert(&format!("{prefix}.ob"), init_zeros(&[c]));
    }

    /// Create all weights in a fixed order (pure function of the rng stream).
    pub fn init_params(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        let ch = &self.cfg.channels;
        let td = self.cfg.time_dim;
        store.insert("unet.time.l1.w", init_fan_in(rng, &[td, td]));
        store.insert("unet.time.l1.b", init_zeros(&[td]));
        store.insert("unet.time.l2.w", init_fan_in(rng, &[td, td]));
        store.insert("unet.time.l2.b", init_zeros(&[td]));
        store.insert("unet.stem.w", init_fan_in(rng, &[ch[0], 3, 3, 3]));
        store.insert("unet.stem.b", init_zeros(&[ch[0]]));
        let levels = ch.len();
        for l in 0..levels - 1 {
            self.init_res(store, rng, &format!("unet.down{l}.res"), ch[l], ch[l]);
            if self.cfg.has_attn(l) {
                self.init_attn(store, rng, &format!("unet.down{l}.attn"), ch[l]);
            }
            store.insert(&format!("unet.down{l}.down.w"), init_fan_in(rng, &[ch[l + 1], ch[l], 3, 3]));
            store.insert(&format!("unet.down{l}.down.b"), init_zeros(&[ch[l + 1]]));
        }
        let cb = ch[levels - 1];
        self.init_res(store, rng, "unet.mid.res1", cb, cb);
        if self.cfg.has_attn(levels - 1) {
            self.init_attn(store, rng, "unet.mid.attn", cb);
        }
        self.init_res(store, rng, "unet.mid.res2", cb, cb);
        for l in (0..levels - 1).rev() {
            store.insert(&format!("unet.up{l}.conv.w"), init_fan_in(rng, &[ch[l], ch[l + 1], 3, 3]));
            store.insert(&format!("unet.up{l}.conv.b"), init_zeros(&[ch[l]]));
            self.init_res(store, rng, &format!("unet.up{l}.res"), 2 * ch[l], ch[l]);
            if self.cfg.has_attn(l) {
                self.init_attn(store, rng, &format!("unet.up{l}.attn"), ch[l]);
            }
        }
        store.insert("unet.head.gn.g", init_ones(&[ch[0]]));
        store.insert("unet.head.gn.b", init_zeros(&[ch[0]]));
        store.insert("unet.head.conv.w", init_zeros(&[3, ch[0], 3, 3]));
        store.insert("unet.head.conv.b", init_zeros(&[3]));
    }

    /// Names of the cross-attention K/V projection parameters (the denoiser
    /// part of the customization trainable set).
    pub fn kv_param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        let levels = self.cfg.channels.len();
        for l in 0..levels - 1 {
            if self.cfg.has_attn(l) {
                out.push(format!("unet.down{l}.attn.wk"));
                out.push(format!("unet.down{l}.attn.wv"));
                out.push(format!("unet.up{l}.attn.wk"));
                out.push(format!("unet.up{l}.attn.wv"));
            }
        }
        if self.cfg.has_attn(levels - 1) {
            out.push("unet.mid.attn.wk".into());
            out.push("unet.mid.attn.wv".into());
        }
        out.sort();
        out
    }

    fn sinusoidal_t(&self, t: usize) -> Array2<f64> {
        let d = self.cfg.time_dim;
        let mut out = Array2::<f64>::zeros((1, d));
        for i in 0..d {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let v = t as f64 * rate;
            out[[0, i]] = if i % 2 == 0 { v.sin() } else { v.cos() };
        }
        out
    }

    fn time_embed(&self, b: &mut Binder, t: usize) -> Var {
        let sin = b.graph.constant(self.sinusoidal_t(t).into_dyn());
        let w1 = b.bind("unet.time.l1.w");
        let b1 = b.bind("unet.time.l1.b");
        let w2 = b.bind("unet.time.l2.w");
        let b2 = b.bind("unet.time.l2.b");
        let h = b.graph.matmul(sin, w1);
        let h = b.graph.add_row_bias(h, b1);
        let h = b.graph.silu(h);
        let h = b.graph.matmul(h, w2);
        b.graph.add_row_bias(h, b2)
    }

    fn res_block(&self, b: &mut Binder, prefix: &str, cin: usize, cout: usize, x: Var, temb: Var) -> Var {
        let n = res_names(prefix, cin, cout);
        let groups = self.cfg.norm_groups;
        let g1g = b.bind(&n.gn1_g);
        let g1b = b.bind(&n.gn1_b);
        let h = b.graph.group_norm(x, g1g, g1b, groups, 1e-5);
        let h = b.graph.silu(h);
        let w1 = b.bind(&n.conv1_w);
        let h = b.graph.conv2d(h, w1, 1, 1);
        let b1 = b.bind(&n.conv1_b);
        let h = b.graph.add_chan_bias(h, b1);

        let tw = b.bind(&n.temb_w);
        let tb = b.bind(&n.temb_b);
        let ts = b.graph.silu(temb);
        let tproj = b.graph.matmul(ts, tw); // [1, cout]
        let tproj = b.graph.add_row_bias(tproj, tb);
        let tvec = b.graph.reshape(tproj, &[cout]);
        let h = b.graph.add_chan_bias(h, tvec);

        let g2g = b.bind(&n.gn2_g);
        let g2b = b.bind(&n.gn2_b);
        let h = b.graph.group_norm(h, g2g, g2b, groups, 1e-5);
        let h = b.graph.silu(h);
        let w2 = b.bind(&n.conv2_w);
        let h = b.graph.conv2d(h, w2, 1, 1);
        let b2 = b.bind(&n.conv2_b);
        let h = b.graph.add_chan_bias(h, b2);

        let skip = match (&n.skip_w, &n.skip_b) {
            (Some(w), Some(sb)) => {
                let wv = b.bind(w);
                let s = b.graph.conv2d(x, wv, 1, 0);
                let sbv = b.bind(sb);
                b.graph.add_chan_bias(s, sbv)
            }
            _ => x,
        };
        b.graph.add(h, skip)
    }

    fn attn_block(
        &self,
        b: &mut Binder,
        prefix: &str,
        c: usize,
        hw: (usize, usize),
        x: Var,
        cond: Var,
    ) -> (Var, AttnTap) {
        let groups = self.cfg.norm_groups;
        let heads = self.cfg.heads;
        let dh = c / heads;
        let (h, w) = hw;
        let gg = b.bind(&format!("{prefix}.gn.g"));
        let gb = b.bind(&format!("{prefix}.gn.b"));
        let n = b.graph.group_norm(x, gg, gb, groups, 1e-5);
        let flat = b.graph.reshape(n, &[c, h * w]);
        let xf = b.graph.transpose2(flat); // [HW, C]
        let wq = b.bind(&format!("{prefix}.wq"));
        let wk = b.bind(&format!("{prefix}.wk"));
        let wv = b.bind(&format!("{prefix}.wv"));
        let q = b.graph.matmul(xf, wq); // [HW, C]
        let k = b.graph.matmul(cond, wk); // [L, C]
        let v = b.graph.matmul(cond, wv);
        let mut head_maps = Vec::with_capacity(heads);
        let mut ctxs = Vec::with_capacity(heads);
        for hd in 0..heads {
            let qh = b.graph.slice_cols(q, hd * dh, (hd + 1) * dh);
            let kh = b.graph.slice_cols(k, hd * dh, (hd + 1) * dh);
            let vh = b.graph.slice_cols(v, hd * dh, (hd + 1) * dh);
            let kt = b.graph.transpose2(kh);
            let scores = b.graph.matmul(qh, kt);
            let scaled = b.graph.scale(scores, 1.0 / (dh as f64).sqrt());
            let a = b.graph.softmax_rows(scaled); // [HW, L]
            head_maps.push(a);
            ctxs.push(b.graph.matmul(a, vh));
        }
        let ctx = b.graph.concat_cols(&ctxs);
        let wo = b.bind(&format!("{prefix}.wo"));
        let proj = b.graph.matmul(ctx, wo);
        let ob = b.bind(&format!("{prefix}.ob"));
        let proj = b.graph.add_row_bias(proj, ob);
        let back = b.graph.transpose2(proj);
        let back = b.graph.reshape(back, &[c, h, w]);
        let out = b.graph.add(x, back);
        (
            out,
            AttnTap { layer: prefix.to_string(), resolution: hw, heads: head_maps },
        )
    }

    /// Full forward pass in a graph. Returns the noise prediction and the
    /// attention taps of every cross-attention layer, in network order.
    pub fn forward_graph(&self, b: &mut Binder, z_t: Var, t: usize, cond: Var) -> (Var, Vec<AttnTap>) {
        let ch = &self.cfg.channels;
        let levels = ch.len();
        let res0 = self.cfg.resolution;
        let temb = self.time_embed(b, t);
        let mut taps = Vec::new();

        let sw = b.bind("unet.stem.w");
        let h = b.graph.conv2d(z_t, sw, 1, 1);
        let sb = b.bind("unet.stem.b");
        let mut h = b.graph.add_chan_bias(h, sb);

        let mut skips: Vec<Var> = Vec::new();
        for l in 0..levels - 1 {
            let r = res0 >> l;
            h = self.res_block(b, &format!("unet.down{l}.res"), ch[l], ch[l], h, temb);
            if self.cfg.has_attn(l) {
                let (nh, tap) = self.attn_block(b, &format!("unet.down{l}.attn"), ch[l], (r, r), h, cond);
                h = nh;
                taps.push(tap);
            }
            skips.push(h);
            let dw = b.bind(&format!("unet.down{l}.down.w"));
            let dn = b.graph.conv2d(h, dw, 2, 1);
            let db = b.bind(&format!("unet.down{l}.down.b"));
            h = b.graph.add_chan_bias(dn, db);
        }

        let lb = levels - 1;
        let rb = res0 >> lb;
        let cb = ch[lb];
        h = self.res_block(b, "unet.mid.res1", cb, cb, h, temb);
        if self.cfg.has_attn(lb) {
            let (nh, tap) = self.attn_block(b, "unet.mid.attn", cb, (rb, rb), h, cond);
            h = nh;
            taps.push(tap);
        }
        h = self.res_block(b, "unet.mid.res2", cb, cb, h, temb);

        for l in (0..levels - 1).rev() {
            let r = res0 >> l;
            let up = b.graph.upsample_nearest2(h);
            let uw = b.bind(&format!("unet.up{l}.conv.w"));
            let uc = b.graph.conv2d(up, uw, 1, 1);
            let ub = b.bind(&format!("unet.up{l}.conv.b"));
            let uc = b.graph.add_chan_bias(uc, ub);
            let skip = skips.pop().unwrap();
            let cat = b.graph.concat_chan(&[uc, skip]);
            h = self.res_block(b, &format!("unet.up{l}.res"), 2 * ch[l], ch[l], cat, temb);
            if self.cfg.has_attn(l) {
                let (nh, tap) = self.attn_block(b, &format!("unet.up{l}.attn"), ch[l], (r, r), h, cond);
                h = nh;
                taps.push(tap);
            }
        }

        let hg = b.bind("unet.head.gn.g");
        let hb = b.bind("unet.head.gn.b");
        let out = b.graph.group_norm(h, hg, hb, self.cfg.norm_groups, 1e-5);
        let out = b.graph.silu(out);
        let hw = b.bind("unet.head.conv.w");
        let out = b.graph.conv2d(out, hw, 1, 1);
        let hcb = b.bind("unet.head.conv.b");
        let eps = b.graph.add_chan_bias(out, hcb);
        (eps, taps)
    }

    /// Numeric forward pass without gradients.
    pub fn predict_eps(
        &self,
        store: &ParamStore,
        z_t: &Array3<f64>,
        t: usize,
        cond: &ConditionSequence,
        record_attention: bool,
    ) -> Result<(Array3<f64>, Option<AttentionRecord>)> {
        if z_t.shape() != [3, self.cfg.resolution, self.cfg.resolution] {
            return Err(DecalError::Shape(format!(
                "z_t shape {:?}, expected [3, {r}, {r}]",
                z_t.shape(),
                r = self.cfg.resolution
            )));
        }
        let mut g = Graph::new();
        let mut b = Binder::new(&mut g, store);
        let zv = b.graph.constant(z_t.clone().into_dyn());
        let cv = b.graph.constant(cond.data.clone().into_dyn());
        let (eps, taps) = self.forward_graph(&mut b, zv, t, cv);
        let record = record_attention.then(|| materialize_record(&g, &taps));
        let eps = g
            .value(eps)
            .view()
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap()
            .to_owned();
        Ok((eps, record))
    }
}

/// Copy attention taps out of a graph into a plain record.
pub fn materialize_record(g: &Graph, taps: &[AttnTap]) -> AttentionRecord {
    let layers = taps
        .iter()
        .map(|tap| {
            let (h, w) = tap.resolution;
            let l = g.value(tap.heads[0]).shape()[1];
            let mut maps = Array3::<f64>::zeros((tap.heads.len(), h * w, l));
            for (i, &hv) in tap.heads.iter().enumerate() {
                let m = g.value(hv).view().into_dimensionality::<ndarray::Ix2>().unwrap();
                maps.index_axis_mut(ndarray::Axis(0), i).assign(&m);
            }
            AttnLayerRecord { layer: tap.layer.clone(), resolution: tap.resolution, maps }
        })
        .collect();
    AttentionRecord { layers }
}

// ---------------------------------------------------------------------------
// DDIM
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct DdimParams {
    pub steps: usize,
    pub guidance: f64,
    pub seed: u64,
}

/// Deterministic DDIM sampling with classifier-free guidance.
/// `cond_null = None` runs the conditional-only trajectory.
pub fn ddim_sample(
    unet: &UNet,
    store: &ParamStore,
    schedule: &ScheduleTable,
    cond: &ConditionSequence,
    cond_null: Option<&ConditionSequence>,
    params: &DdimParams,
) -> Result<Array3<f64>> {
    let t_max = schedule.len();
    if params.steps == 0 || params.steps > t_max {
        return Err(DecalError::Config(format!(
            "ddim steps {} out of range (T = {t_max})",
            params.steps
        )));
    }
    let r = unet.cfg.resolution;
    let mut rng = stream(params.seed, "sampling");
    let mut z = randn3(&mut rng, 3, r, r);
    let ratio = t_max / params.steps;
    let ts: Vec<usize> = (0..params.steps).map(|i| i * ratio).collect();
    for k in (0..ts.len()).rev() {
        let t = ts[k];
        let eps = guided_eps(unet, store, &z, t, cond, cond_null, params.guidance)?;
        let ab_t = schedule.alpha_bars[t];
        let ab_prev = if k == 0 { 1.0 } else { schedule.alpha_bars[ts[k - 1]] };
        let x0 = z
            .iter()
            .zip(eps.iter())
            .map(|(&zt, &e)| ((zt - (1.0 - ab_t).sqrt() * e) / ab_t.sqrt()).clamp(-1.0, 1.0))
            .collect::<Vec<f64>>();
        let x0 = Array3::from_shape_vec((3, r, r), x0).unwrap();
        z = x0.mapv(|v| v * ab_prev.sqrt()) + &eps.mapv(|v| v * (1.0 - ab_prev).sqrt());
    }
    Ok(from_model_range(&z))
}

/// eps = (1-g) * eps_uncond + g * eps_cond; exact at g = 0 and g = 1.
fn guided_eps(
    unet: &UNet,
    store: &ParamStore,
    z: &Array3<f64>,
    t: usize,
    cond: &ConditionSequence,
    cond_null: Option<&ConditionSequence>,
    guidance: f64,
) -> Result<Array3<f64>> {
    match cond_null {
        None => Ok(unet.predict_eps(store, z, t, cond, false)?.0),
        Some(nc) => {
            if guidance == 1.0 {
                return Ok(unet.predict_eps(store, z, t, cond, false)?.0);
            }
            if guidance == 0.0 {
                return Ok(unet.predict_eps(store, z, t, nc, false)?.0);
            }
            let e_c = unet.predict_eps(store, z, t, cond, false)?.0;
            let e_u = unet.predict_eps(store, z, t, nc, false)?.0;
            Ok(e_u.mapv(|v| v * (1.0 - guidance)) + &e_c.mapv(|v| v * guidance))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::rng::stream;
    use crate::text::SlotPositions;
    use rand::Rng;

    fn tiny_unet() -> (UNet, ParamStore) {
        let cfg = UNetConfig {
            resolution: 8,
            channels: vec![8],
            attn_resolutions: vec![8],
            heads: 2,
            norm_groups: 4,
            d_cond: 8,
            time_dim: 8,
        };
        let unet = UNet::new(cfg).unwrap();
        let mut store = ParamStore::new();
        let mut rng = stream(0, "init");
        unet.init_params(&mut store, &mut rng);
        (unet, store)
    }

    fn rand_cond(seed: u64, l: usize, d: usize) -> ConditionSequence {
        let mut rng = stream(seed, "cond");
        let mut data = Array2::<f64>::zeros((l, d));
        for v in data.iter_mut() {
            *v = rng.random::<f64>() * 2.0 - 1.0;
        }
        ConditionSequence { data, positions: SlotPositions::default() }
    }

    #[test]
    fn schedule_linear_oracle() {
        let cfg = ScheduleConfig::default();
        let s = make_schedule(&cfg).unwrap();
        assert_eq!(s.len(), 1000);
        // independent product oracle
        let mut prod = 1.0;
        for i in 0..1000 {
            let beta = 1e-4 + (0.02 - 1e-4) * i as f64 / 999.0;
            prod *= 1.0 - beta;
        }
        assert!((s.alpha_bars[999] - prod).abs() < 1e-12);
        assert!(s.alpha_bars[999] < 0.01, "alpha_bar_T = {}", s.alpha_bars[999]);
        // strictly decreasing
        for i in 1..1000 {
            assert!(s.alpha_bars[i] < s.alpha_bars[i - 1]);
        }
    }

    #[test]
    fn schedule_cosine_small_t_valid() {
        let cfg = ScheduleConfig { steps: 10, kind: ScheduleKind::Cosine, ..Default::default() };
        let s = make_schedule(&cfg).unwrap();
        s.validate().unwrap();
        assert!(make_schedule(&ScheduleConfig { steps: 5, ..Default::default() }).is_err());
    }

    #[test]
    fn q_sample_identities() {
        let s = make_schedule(&ScheduleConfig::default()).unwrap();
        let mut rng = stream(1, "q");
        let z0 = randn3(&mut rng, 3, 4, 4);
        let zero = Array3::<f64>::zeros((3, 4, 4));
        let zt = q_sample(&z0, 500, &zero, &s).unwrap();
        let expect = z0.mapv(|v| v * s.alpha_bars[500].sqrt());
        assert_eq!(zt, expect);
        // t = 0 stays close to z0 for unit-range inputs
        let z0u = z0.mapv(|v| v.clamp(-1.0, 1.0));
        let eps = randn3(&mut rng, 3, 4, 4).mapv(|v| v.clamp(-1.0, 1.0));
        let zt0 = q_sample(&z0u, 0, &eps, &s).unwrap();
        let dev = (&zt0 - &z0u).iter().fold(0.0f64, |a, &b| a.max(b.abs()));
        assert!(dev <= 0.02, "max deviation {dev}");
        // out of range
        assert!(q_sample(&z0, 1000, &zero, &s).is_err());
    }

    #[test]
    fn q_sample_variance_monte_carlo() {
        let s = make_schedule(&ScheduleConfig::default()).unwrap();
        let t = 300;
        let mut rng = stream(2, "mc");
        let z0 = Array3::<f64>::zeros((1, 1, 1));
        let n = 10000;
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        for _ in 0..n {
            let eps = randn3(&mut rng, 1, 1, 1);
            let zt = q_sample(&z0, t, &eps, &s).unwrap();
            sum += zt[[0, 0, 0]];
            sum2 += zt[[0, 0, 0]] * zt[[0, 0, 0]];
        }
        let mean = sum / n as f64;
        let var = sum2 / n as f64 - mean * mean;
        let expect = 1.0 - s.alpha_bars[t];
        assert!((var - expect).abs() / expect < 0.05, "var {var} vs {expect}");
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let (unet, store) = tiny_unet();
        let mut rng = stream(3, "z");
        let z = randn3(&mut rng, 3, 8, 8);
        let cond = rand_cond(4, 6, 8);
        let (eps, rec) = unet.predict_eps(&store, &z, 100, &cond, true).unwrap();
        assert_eq!(eps.shape(), &[3, 8, 8]);
        let rec = rec.unwrap();
        assert!(!rec.layers.is_empty());
        for layer in &rec.layers {
            for h in 0..layer.maps.shape()[0] {
                for q in 0..layer.maps.shape()[1] {
                    let s: f64 = layer.maps.slice(ndarray::s![h, q, ..]).sum();
                    assert!((s - 1.0).abs() < 1e-5, "row sum {s}");
                }
            }
        }
    }

    #[test]
    fn unet_gradcheck_sampled_weights() {
        let (unet, mut store) = tiny_unet();
        // perturb zero-init weights so gradients are informative
        let mut rng = stream(5, "perturb");
        for name in store.sorted_names() {
            let p = store.get_mut(&name).unwrap();
            for v in p.iter_mut() {
                *v += 0.05 * (rng.random::<f64>() - 0.5);
            }
        }
        let mut zr = stream(6, "z");
        let z = randn3(&mut zr, 3, 8, 8);
        let cond = rand_cond(7, 6, 8);
        let target = randn3(&mut zr, 3, 8, 8);

        let loss_fn = |store: &ParamStore| -> f64 {
            let mut g = Graph::new();
            let mut b = Binder::new(&mut g, store);
            let zv = b.graph.constant(z.clone().into_dyn());
            let cv = b.graph.constant(cond.data.clone().into_dyn());
            let (eps, _) = unet.forward_graph(&mut b, zv, 100, cv);
            let tv = b.graph.constant(target.clone().into_dyn());
            let loss = b.graph.mse(eps, tv);
            g.scalar_value(loss)
        };

        // analytic gradients
        let mut g = Graph::new();
        let mut b = Binder::new(&mut g, &store);
        let zv = b.graph.constant(z.clone().into_dyn());
        let cv = b.graph.constant(cond.data.clone().into_dyn());
        let (eps, _) = unet.forward_graph(&mut b, zv, 100, cv);
        let tv = b.graph.constant(target.clone().into_dyn());
        let loss = b.graph.mse(eps, tv);
        let bound = b.into_bound();
        let mut grads = g.backward(loss);
        let named = crate::params::collect_named_grads(&bound, &mut grads);

        // sample ~1% of weights across all parameters
        let mut checker = stream(8, "pick");
        let h = 1e-5;
        let mut checked = 0;
        for (name, ga) in &named {
            let pv = store.get(name).unwrap().clone();
            for idx in 0..pv.len() {
                if checker.random::<f64>() > 0.01 {
                    continue;
                }
                let orig = pv.as_slice().unwrap()[idx];
                {
                    let p = store.get_mut(name).unwrap();
                    p.as_slice_mut().unwrap()[idx] = orig + h;
                }
                let lp = loss_fn(&store);
                {
                    let p = store.get_mut(name).unwrap();
                    p.as_slice_mut().unwrap()[idx] = orig - h;
                }
                let lm = loss_fn(&store);
                {
                    let p = store.get_mut(name).unwrap();
                    p.as_slice_mut().unwrap()[idx] = orig;
                }
                let fd = (lp - lm) / (2.0 * h);
                let an = ga.as_slice().unwrap()[idx];
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-4);
                assert!(err <= 1e-3, "{name}[{idx}]: analytic {an} vs fd {fd} (err {err})");
                checked += 1;
            }
        }
        assert!(checked > 20, "only {checked} weights checked");
    }

    #[test]
    fn batch_independence_by_duplication() {
        let (unet, store) = tiny_unet();
        let mut rng = stream(9, "z");
        let z1 = randn3(&mut rng, 3, 8, 8);
        let z2 = randn3(&mut rng, 3, 8, 8);
        let cond = rand_cond(10, 6, 8);
        let (a1, _) = unet.predict_eps(&store, &z1, 50, &cond, false).unwrap();
        let (a2, _) = unet.predict_eps(&store, &z2, 50, &cond, false).unwrap();
        // running the same inputs again (as a duplicated batch would) gives
        // identical outputs
        let (b1, _) = unet.predict_eps(&store, &z1, 50, &cond, false).unwrap();
        let (b2, _) = unet.predict_eps(&store, &z2, 50, &cond, false).unwrap();
        assert_eq!(a1, b1);
        assert_eq!(a2, b2);
    }

    #[test]
    fn ddim_contracts() {
        let (unet, store) = tiny_unet();
        let s = make_schedule(&ScheduleConfig { steps: 100, ..Default::default() }).unwrap();
        let cond = rand_cond(11, 6, 8);
        let null = rand_cond(12, 6, 8);
        // guidance 1 == conditional-only trajectory, bitwise
        let p1 = DdimParams { steps: 10, guidance: 1.0, seed: 3 };
        let a = ddim_sample(&unet, &store, &s, &cond, Some(&null), &p1).unwrap();
        let b = ddim_sample(&unet, &store, &s, &cond, None, &p1).unwrap();
        assert_eq!(a, b);
        // guidance 0 == unconditional trajectory
        let p0 = DdimParams { steps: 10, guidance: 0.0, seed: 3 };
        let c = ddim_sample(&unet, &store, &s, &cond, Some(&null), &p0).unwrap();
        let d = ddim_sample(&unet, &store, &s, &null, None, &p0).unwrap();
        assert_eq!(c, d);
        // same seed twice -> identical
        let p = DdimParams { steps: 10, guidance: 3.0, seed: 7 };
        let x = ddim_sample(&unet, &store, &s, &cond, Some(&null), &p).unwrap();
        let y = ddim_sample(&unet, &store, &s, &cond, Some(&null), &p).unwrap();
        assert_eq!(x, y);
        // output in [0,1]
        assert!(x.iter().all(|&v| (0.0..=1.0).contains(&v)));
        // steps > T rejected
        assert!(ddim_sample(&unet, &store, &s, &cond, None, &DdimParams { steps: 101, guidance: 1.0, seed: 0 }).is_err());
    }

    #[test]
    fn cfg_linearity_under_swap() {
        let (unet, store) = tiny_unet();
        let s = make_schedule(&ScheduleConfig { steps: 100, ..Default::default() }).unwrap();
        let cond = rand_cond(13, 6, 8);
        let null = rand_cond(14, 6, 8);
        let g = 2.5;
        let a = ddim_sample(&unet, &store, &s, &cond, Some(&null), &DdimParams { steps: 8, guidance: g, seed: 5 }).unwrap();
        let b = ddim_sample(&unet, &store, &s, &null, Some(&cond), &DdimParams { steps: 8, guidance: 1.0 - g, seed: 5 }).unwrap();
        let dev = (&a - &b).iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        assert!(dev < 1e-12, "max dev {dev}");
    }

    #[test]
    fn trainable_kv_names_exist() {
        let (unet, store) = tiny_unet();
        let names = unet.kv_param_names();
        assert!(!names.is_empty());
        for n in &names {
            assert!(store.contains(n), "{n} missing");
        }
    }
}
