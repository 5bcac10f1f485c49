//! Inversion encoder: staged window+global attention backbone emitting a
//! feature pyramid, local-to-global latent-code branches and a structure-code
//! projection.
//!
//! Four stages follow a 4x4 patch embed. Stages 1-2 downsample by max-pool,
//! the last two stages share the base resolution, where the window spans the
//! whole map and attention is global. Latent codes are grouped
//! coarse/medium/fine across the three deepest stages.

use ndarray::{Array2, IxDyn};
use rand_chacha::ChaCha8Rng;

use crate::error::{IferError, Result};
use crate::params::{he_init, randn, ParamNodes, Params};
use crate::tape::{Arr, Graph, Id};

const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct EncoderConfig {
    pub img_size: usize,
    pub patch: usize,
    /// Channel width of each of the four stages.
    pub widths: Vec<usize>,
    pub window: usize,
    pub heads: usize,
    /// Total latent codes N.
    pub n_codes: usize,
    /// Latent dimension d.
    pub code_dim: usize,
    /// Structure-code channels d_s.
    pub sc_channels: usize,
    /// Codes emitted by the coarse/medium/fine branches.
    pub groups: [usize; 3],
}

impl EncoderConfig {
    pub fn desk_default() -> Self {
        Self {
            img_size: 64,
            patch: 4,
            widths: vec![32, 64, 128, 128],
            window: 4,
            heads: 4,
            n_codes: 10,
            code_dim: 128,
            sc_channels: 128,
            groups: [3, 4, 3],
        }
    }

    /// Tiny config for finite-difference checks on 3x16x16 inputs.
    pub fn micro() -> Self {
        Self {
            img_size: 16,
            patch: 4,
            widths: vec![4, 6, 8, 8],
            window: 2,
            heads: 2,
            n_codes: 3,
            code_dim: 6,
            sc_channels: 4,
            groups: [1, 1, 1],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() != 4 {
            return Err(IferError::Config("encoder needs 4 stage widths".into()));
        }
        if self.img_size % self.patch != 0 {
            return Err(IferError::Config(format!(
                "patch {} must divide image size {}",
                self.patch, self.img_size
            )));
        }
        if self.groups.iter().sum::<usize>() != self.n_codes {
            return Err(IferError::Config(format!(
                "branch groups {:?} must sum to N={}",
                self.groups, self.n_codes
            )));
        }
        for (i, &w) in self.widths.iter().enumerate() {
            if w % self.heads != 0 {
                return Err(IferError::Config(format!(
                    "stage {i} width {w} not divisible by {} heads",
                    self.heads
                )));
            }
        }
        Ok(())
    }

    /// Spatial side of the structure code (deepest stage).
    pub fn base_side(&self) -> usize {
        self.stage_side(3)
    }

    /// Spatial side of stage `i` (0-based).
    pub fn stage_side(&self, i: usize) -> usize {
        let s0 = self.img_size / self.patch;
        match i {
            0 => s0,
            1 => s0 / 2,
            _ => s0 / 4,
        }
    }

    fn stage_window(&self, i: usize) -> usize {
        self.window.min(self.stage_side(i))
    }
}

/// Weights of one attention application.
#[derive(Clone, Copy)]
pub struct AttnIds {
    pub wq: Id,
    pub wk: Id,
    pub wv: Id,
    pub wo: Id,
    pub bo: Id,
}

fn attn_param_shapes(p: &mut Params, prefix: &str, c: usize, rng: &mut ChaCha8Rng) {
    let s = (1.0 / c as f64).sqrt();
    p.insert(&format!("{prefix}.wq"), randn(rng, &[c, c], s));
    p.insert(&format!("{prefix}.wk"), randn(rng, &[c, c], s));
    p.insert(&format!("{prefix}.wv"), randn(rng, &[c, c], s));
    p.insert(&format!("{prefix}.wo"), randn(rng, &[c, c], s));
    p.insert(&format!("{prefix}.bo"), Arr::zeros(IxDyn(&[c])));
}

fn attn_ids(pn: &ParamNodes, prefix: &str) -> AttnIds {
    AttnIds {
        wq: pn.id(&format!("{prefix}.wq")),
        wk: pn.id(&format!("{prefix}.wk")),
        wv: pn.id(&format!("{prefix}.wv")),
        wo: pn.id(&format!("{prefix}.wo")),
        bo: pn.id(&format!("{prefix}.bo")),
    }
}

fn tokens_linear(g: &mut Graph, t: Id, w: Id) -> Id {
    let shape = g.value(t).shape().to_vec();
    let (bn, tt, c) = (shape[0], shape[1], shape[2]);
    let flat = g.reshape(t, &[bn * tt, c]);
    let y = g.matmul(flat, w);
    let cout = g.value(w).shape()[1];
    g.reshape(y, &[bn, tt, cout])
}

fn split_heads(g: &mut Graph, t: Id, heads: usize) -> Id {
    let shape = g.value(t).shape().to_vec();
    let (bn, tt, c) = (shape[0], shape[1], shape[2]);
    let r = g.reshape(t, &[bn, tt, heads, c / heads]);
    let p = g.permute(r, &[0, 2, 1, 3]);
    g.reshape(p, &[bn * heads, tt, c / heads])
}

fn merge_heads(g: &mut Graph, t: Id, heads: usize) -> Id {
    let shape = g.value(t).shape().to_vec();
    let (bnh, tt, dh) = (shape[0], shape[1], shape[2]);
    let r = g.reshape(t, &[bnh / heads, heads, tt, dh]);
    let p = g.permute(r, &[0, 2, 1, 3]);
    g.reshape(p, &[bnh / heads, tt, heads * dh])
}

fn window_partition(g: &mut Graph, x: Id, w: usize) -> Id {
    let shape = g.value(x).shape().to_vec();
    let (b, c, h, wd) = (shape[0], shape[1], shape[2], shape[3]);
    let r = g.reshape(x, &[b, c, h / w, w, wd / w, w]);
    let p = g.permute(r, &[0, 2, 4, 3, 5, 1]);
    g.reshape(p, &[b * (h / w) * (wd / w), w * w, c])
}

fn window_merge(g: &mut Graph, t: Id, b: usize, c: usize, h: usize, wd: usize, w: usize) -> Id {
    let r = g.reshape(t, &[b, h / w, wd / w, w, w, c]);
    let p = g.permute(r, &[0, 5, 1, 3, 2, 4]);
    g.reshape(p, &[b, c, h, wd])
}

/// Non-overlapping window self-attention on `[B,C,H,W]`. Returns the output
/// map and the attention probabilities `[B*nw*heads, w^2, w^2]`.
pub fn window_attention(
    g: &mut Graph,
    fm: Id,
    window: usize,
    heads: usize,
    ids: AttnIds,
) -> Result<(Id, Id)> {
    let shape = g.value(fm).shape().to_vec();
    if shape.len() != 4 {
        return Err(IferError::Shape(format!(
            "window_attention expects [B,C,H,W], got {shape:?}"
        )));
    }
    let (b, c, h, wd) = (shape[0], shape[1], shape[2], shape[3]);
    if window < 1 || h % window != 0 || wd % window != 0 {
        return Err(IferError::Shape(format!(
            "window {window} does not divide feature map side {h}x{wd}"
        )));
    }
    let t = window_partition(g, fm, window);
    let q = tokens_linear(g, t, ids.wq);
    let k = tokens_linear(g, t, ids.wk);
    let v = tokens_linear(g, t, ids.wv);
    let qh = split_heads(g, q, heads);
    let kh = split_heads(g, k, heads);
    let vh = split_heads(g, v, heads);
    let kt = g.permute(kh, &[0, 2, 1]);
    let scores = g.bmm(qh, kt);
    let scaled = g.scale(scores, 1.0 / ((c / heads) as f64).sqrt());
    let probs = g.softmax_last(scaled);
    let ctx = g.bmm(probs, vh);
    let merged = merge_heads(g, ctx, heads);
    let o = tokens_linear(g, merged, ids.wo);
    let o = g.add(o, ids.bo);
    Ok((window_merge(g, o, b, c, h, wd, window), probs))
}

fn layer_norm_chw(g: &mut Graph, x: Id, gain: Id, bias: Id) -> Id {
    let c = g.value(x).shape()[1];
    let mean = g.sum_axis_keep(x, 1);
    let mean = g.scale(mean, 1.0 / c as f64);
    let xm = g.sub(x, mean);
    let sq = g.square(xm);
    let var = g.sum_axis_keep(sq, 1);
    let var = g.scale(var, 1.0 / c as f64);
    let var = g.add_scalar(var, LN_EPS);
    let inv = g.powf(var, -0.5);
    let xhat = g.mul(xm, inv);
    let g4 = g.reshape(gain, &[1, c, 1, 1]);
    let b4 = g.reshape(bias, &[1, c, 1, 1]);
    let y = g.mul(xhat, g4);
    g.add(y, b4)
}

pub struct EncodeOut {
    /// N latent codes, each `[B,d]`, ordered coarse to fine.
    pub codes: Vec<Id>,
    /// Structure code `[B,d_s,base,base]`.
    pub sc: Id,
    /// (resolution, map id) per aligned stage, finest first.
    pub pyramid: Vec<(usize, Id)>,
    /// Attention probabilities of the final (global) stage.
    pub final_attn: Id,
}

#[derive(Clone)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub params: Params,
}

impl Encoder {
    pub fn init(cfg: EncoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let mut p = Params::new();
        p.insert(
            "patch.kernel",
            he_init(rng, &[cfg.widths[0], 3, cfg.patch, cfg.patch]),
        );
        p.insert("patch.bias", Arr::zeros(IxDyn(&[cfg.widths[0]])));
        for i in 0..4 {
            let c = cfg.widths[i];
            p.insert(&format!("s{i}.ln1.g"), Arr::ones(IxDyn(&[c])));
            p.insert(&format!("s{i}.ln1.b"), Arr::zeros(IxDyn(&[c])));
            attn_param_shapes(&mut p, &format!("s{i}.attn"), c, rng);
            p.insert(&format!("s{i}.ln2.g"), Arr::ones(IxDyn(&[c])));
            p.insert(&format!("s{i}.ln2.b"), Arr::zeros(IxDyn(&[c])));
            p.insert(&format!("s{i}.mlp1.w"), randn(rng, &[c, 2 * c], (1.0 / c as f64).sqrt()));
            p.insert(&format!("s{i}.mlp1.b"), Arr::zeros(IxDyn(&[2 * c])));
            p.insert(&format!("s{i}.mlp2.w"), randn(rng, &[2 * c, c], (0.5 / c as f64).sqrt()));
            p.insert(&format!("s{i}.mlp2.b"), Arr::zeros(IxDyn(&[c])));
            if i < 2 {
                p.insert(
                    &format!("down{i}.kernel"),
                    he_init(rng, &[cfg.widths[i + 1], c, 1, 1]),
                );
                p.insert(&format!("down{i}.bias"), Arr::zeros(IxDyn(&[cfg.widths[i + 1]])));
            }
        }
        // stage 2 -> 3 keeps resolution; 1x1 transition
        p.insert(
            "down2.kernel",
            he_init(rng, &[cfg.widths[3], cfg.widths[2], 1, 1]),
        );
        p.insert("down2.bias", Arr::zeros(IxDyn(&[cfg.widths[3]])));
        // branches: coarse from stage 3, medium from stage 2, fine from stage 1
        for (j, (stage, k)) in [(3usize, cfg.groups[0]), (2, cfg.groups[1]), (1, cfg.groups[2])]
            .into_iter()
            .enumerate()
        {
            let c = cfg.widths[stage];
            let side = cfg.stage_side(stage);
            let win = cfg.stage_window(stage);
            let mut s = side;
            let mut t = 0;
            while s > win {
                attn_param_shapes(&mut p, &format!("br{j}.att{t}"), c, rng);
                s /= 2;
                t += 1;
            }
            attn_param_shapes(&mut p, &format!("br{j}.final"), c, rng);
            let flat = c * win * win;
            p.insert(
                &format!("br{j}.proj.w"),
                randn(rng, &[flat, k * cfg.code_dim], (1.0 / flat as f64).sqrt()),
            );
            p.insert(&format!("br{j}.proj.b"), Arr::zeros(IxDyn(&[k * cfg.code_dim])));
        }
        p.insert(
            "scproj.kernel",
            he_init(rng, &[cfg.sc_channels, cfg.widths[3], 1, 1]),
        );
        p.insert("scproj.bias", Arr::zeros(IxDyn(&[cfg.sc_channels])));
        Ok(Self { cfg, params: p })
    }

    fn stage_block(
        &self,
        g: &mut Graph,
        pn: &ParamNodes,
        x: Id,
        i: usize,
    ) -> Result<(Id, Id)> {
        let win = self.cfg.stage_window(i);
        let ln1g = pn.id(&format!("s{i}.ln1.g"));
        let ln1b = pn.id(&format!("s{i}.ln1.b"));
        let n1 = layer_norm_chw(g, x, ln1g, ln1b);
        let (a, probs) = window_attention(g, n1, win, self.cfg.heads, attn_ids(pn, &format!("s{i}.attn")))?;
        let x = g.add(x, a);
        let ln2g = pn.id(&format!("s{i}.ln2.g"));
        let ln2b = pn.id(&format!("s{i}.ln2.b"));
        let n2 = layer_norm_chw(g, x, ln2g, ln2b);
        // channel MLP applied pointwise
        let shape = g.value(n2).shape().to_vec();
        let (b, c, h, wd) = (shape[0], shape[1], shape[2], shape[3]);
        let t = g.permute(n2, &[0, 2, 3, 1]);
        let t = g.reshape(t, &[b * h * wd, c]);
        let w1 = pn.id(&format!("s{i}.mlp1.w"));
        let b1 = pn.id(&format!("s{i}.mlp1.b"));
        let w2 = pn.id(&format!("s{i}.mlp2.w"));
        let b2 = pn.id(&format!("s{i}.mlp2.b"));
        let h1 = g.matmul(t, w1);
        let h1 = g.add(h1, b1);
        let h1 = g.leaky_relu(h1, 0.2);
        let h2 = g.matmul(h1, w2);
        let h2 = g.add(h2, b2);
        let m = g.reshape(h2, &[b, h, wd, c]);
        let m = g.permute(m, &[0, 3, 1, 2]);
        Ok((g.add(x, m), probs))
    }

    /// Local-to-global branch: window attention + 2x max-pool until the side
    /// equals the window, then full attention and a projection to `k` codes.
    /// Returns the codes `[B, k, d]` and the number of pooling steps taken.
    pub fn local_to_global_branch(
        &self,
        g: &mut Graph,
        pn: &ParamNodes,
        fm: Id,
        branch: usize,
        k: usize,
    ) -> Result<(Id, usize)> {
        let shape = g.value(fm).shape().to_vec();
        let (b, c, mut side) = (shape[0], shape[1], shape[2]);
        let win = self.cfg.window.min(side);
        if side < win {
            return Err(IferError::Config(format!(
                "branch input side {side} smaller than window {win}"
            )));
        }
        let mut x = fm;
        let mut pools = 0;
        while side > win {
            let ids = attn_ids(pn, &format!("br{branch}.att{pools}"));
            let (a, _) = window_attention(g, x, win, self.cfg.heads, ids)?;
            x = g.maxpool2(a);
            side /= 2;
            pools += 1;
        }
        let ids = attn_ids(pn, &format!("br{branch}.final"));
        let (a, _) = window_attention(g, x, win, self.cfg.heads, ids)?;
        let flat = g.reshape(a, &[b, c * win * win]);
        let w = pn.id(&format!("br{branch}.proj.w"));
        let bias = pn.id(&format!("br{branch}.proj.b"));
        let y = g.matmul(flat, w);
        let y = g.add(y, bias);
        Ok((g.reshape(y, &[b, k, self.cfg.code_dim]), pools))
    }

    /// Full forward pass on `[B,3,S,S]` images in [0,1].
    pub fn encode(&self, g: &mut Graph, pn: &ParamNodes, image: Id) -> Result<EncodeOut> {
        let shape = g.value(image).shape().to_vec();
        let want = [3, self.cfg.img_size, self.cfg.img_size];
        if shape.len() != 4 || shape[1..] != want {
            return Err(IferError::Shape(format!(
                "encode expects [B,3,{},{}], got {shape:?}",
                self.cfg.img_size, self.cfg.img_size
            )));
        }
        if !g.value(image).iter().all(|v| v.is_finite()) {
            return Err(IferError::Validation(
                "encode input contains NaN or infinite values".into(),
            ));
        }
        let pk = pn.id("patch.kernel");
        let pb = pn.id("patch.bias");
        let x = g.conv2d(image, pk, self.cfg.patch, 0);
        let c0 = self.cfg.widths[0];
        let pb4 = g.reshape(pb, &[1, c0, 1, 1]);
        let mut x = g.add(x, pb4);

        let mut stage_out = Vec::new();
        let mut final_attn = None;
        for i in 0..4 {
            let (y, probs) = self.stage_block(g, pn, x, i)?;
            stage_out.push(y);
            final_attn = Some(probs);
            if i < 3 {
                let mut z = y;
                if i < 2 {
                    z = g.maxpool2(z);
                }
                let dk = pn.id(&format!("down{i}.kernel"));
                let db = pn.id(&format!("down{i}.bias"));
                let z2 = g.conv2d(z, dk, 1, 0);
                let cn = self.cfg.widths[i + 1];
                let db4 = g.reshape(db, &[1, cn, 1, 1]);
                let z3 = g.add(z2, db4);
                x = g.leaky_relu(z3, 0.2);
            }
        }

        let pyramid = vec![
            (self.cfg.stage_side(0), stage_out[0]),
            (self.cfg.stage_side(1), stage_out[1]),
            (self.cfg.stage_side(2), stage_out[2]),
        ];

        let mut codes = Vec::with_capacity(self.cfg.n_codes);
        for (j, (stage, k)) in [
            (3usize, self.cfg.groups[0]),
            (2, self.cfg.groups[1]),
            (1, self.cfg.groups[2]),
        ]
        .into_iter()
        .enumerate()
        {
            let (cks, _) = self.local_to_global_branch(g, pn, stage_out[stage], j, k)?;
            for idx in 0..k {
                let s = g.slice_axis(cks, 1, idx, 1);
                let b = g.value(s).shape()[0];
                codes.push(g.reshape(s, &[b, self.cfg.code_dim]));
            }
        }

        let sk = pn.id("scproj.kernel");
        let sb = pn.id("scproj.bias");
        let sc = g.conv2d(stage_out[3], sk, 1, 0);
        let sb4 = g.reshape(sb, &[1, self.cfg.sc_channels, 1, 1]);
        let sc = g.add(sc, sb4);

        Ok(EncodeOut {
            codes,
            sc,
            pyramid,
            final_attn: final_attn.unwrap(),
        })
    }

    /// Inference: encode one image to plain arrays.
    pub fn encode_one(&self, image: &Arr) -> Result<(crate::generator::LatentCodes, Arr, Vec<(usize, Arr)>)> {
        let mut g = Graph::new();
        let pn = self.params.nodes(&mut g);
        let img = g.leaf(
            image
                .clone()
                .into_shape(IxDyn(&[1, 3, self.cfg.img_size, self.cfg.img_size]))
                .map_err(|_| {
                    IferError::Shape(format!(
                        "expected [3,{0},{0}] image, got {1:?}",
                        self.cfg.img_size,
                        image.shape()
                    ))
                })?,
        );
        let out = self.encode(&mut g, &pn, img)?;
        let mut codes = Array2::zeros((self.cfg.n_codes, self.cfg.code_dim));
        for (l, &cid) in out.codes.iter().enumerate() {
            let v = g.value(cid);
            for i in 0..self.cfg.code_dim {
                codes[[l, i]] = v[[0, i]];
            }
        }
        let bs = self.cfg.base_side();
        let sc = g
            .value(out.sc)
            .clone()
            .into_shape(IxDyn(&[self.cfg.sc_channels, bs, bs]))
            .unwrap();
        let pyr = out
            .pyramid
            .iter()
            .map(|&(r, id)| (r, g.value(id).clone()))
            .collect();
        let lc = crate::generator::LatentCodes::new(codes, crate::generator::Provenance::Encoder)?;
        Ok((lc, sc, pyr))
    }

    /// Receive-side attention heatmap of the final global stage, min-max
    /// normalized to [0,1] (degenerate range maps to zeros), upsampled to the
    /// input resolution.
    pub fn attention_map(&self, image: &Arr) -> Result<Array2<f64>> {
        let mut g = Graph::new();
        let pn = self.params.nodes(&mut g);
        let img = g.leaf(
            image
                .clone()
                .into_shape(IxDyn(&[1, 3, self.cfg.img_size, self.cfg.img_size]))
                .map_err(|_| IferError::Shape("attention_map expects [3,S,S]".into()))?,
        );
        let out = self.encode(&mut g, &pn, img)?;
        let probs = g.value(out.final_attn); // [nw*heads, T, T], B=1
        let side = self.cfg.stage_side(3);
        let win = self.cfg.stage_window(3);
        let nw = (side / win) * (side / win);
        let t = win * win;
        let mut heat = Array2::<f64>::zeros((side, side));
        let heads = self.cfg.heads;
        for wi in 0..nw {
            let mut received = vec![0.0f64; t];
            for h in 0..heads {
                let m = probs.index_axis(ndarray::Axis(0), wi * heads + h);
                for q in 0..t {
                    for kk in 0..t {
                        received[kk] += m[[q, kk]];
                    }
                }
            }
            let (wr, wc) = (wi / (side / win), wi % (side / win));
            for kk in 0..t {
                let (r, c) = (kk / win, kk % win);
                heat[[wr * win + r, wc * win + c]] = received[kk] / (heads * t) as f64;
            }
        }
        let mn = heat.iter().cloned().fold(f64::INFINITY, f64::min);
        let mx = heat.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if mx - mn < 1e-12 {
            heat.fill(0.0);
        } else {
            heat.mapv_inplace(|v| (v - mn) / (mx - mn));
        }
        // nearest upsample to image resolution
        let scale = self.cfg.img_size / side;
        let mut full = Array2::<f64>::zeros((self.cfg.img_size, self.cfg.img_size));
        for r in 0..self.cfg.img_size {
            for c in 0..self.cfg.img_size {
                full[[r, c]] = heat[[r / scale, c / scale]];
            }
        }
        Ok(full)
    }
}
