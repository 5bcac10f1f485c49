//! Image-inversion discriminator: siamese conv encoders m_q/m_k with a
//! momentum update, unbalanced augmentation and least-squares objectives on
//! a cosine-similarity score.
//!
//! m_q sees the strongly augmented first image and carries gradient; m_k sees
//! the weakly augmented second image and is only ever moved by the momentum
//! update. Scores live in [-1,1]; real target a=1, fake target b=-1.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ndarray::IxDyn;

use crate::error::{IferError, Result};
use crate::params::{he_init, randn, ParamNodes, Params};
use crate::tape::{Arr, Graph, Id};

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CriticConfig {
    pub img_size: usize,
    /// Channel widths of the four strided conv blocks.
    pub channels: Vec<usize>,
    pub embed_dim: usize,
    /// Momentum weight a_m of the EMA update.
    pub momentum: f64,
}

impl CriticConfig {
    pub fn desk_default() -> Self {
        Self {
            img_size: 64,
            channels: vec![16, 32, 64, 128],
            embed_dim: 128,
            momentum: 0.999,
        }
    }

    pub fn micro() -> Self {
        Self {
            img_size: 16,
            channels: vec![4, 6, 8, 8],
            embed_dim: 8,
            momentum: 0.9,
        }
    }
}

/// Strength-specific augmentation ranges; all outputs stay valid images.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AugRanges {
    /// Minimum crop scale; 1.0 keeps the full frame.
    pub crop_min: f64,
    pub flip_prob: f64,
    /// Max absolute brightness shift.
    pub brightness: f64,
    /// Max relative contrast deviation.
    pub contrast: f64,
}

impl AugRanges {
    pub fn identity() -> Self {
        Self {
            crop_min: 1.0,
            flip_prob: 0.0,
            brightness: 0.0,
            contrast: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AugPolicy {
    pub strong: AugRanges,
    pub weak: AugRanges,
}

impl AugPolicy {
    pub fn desk_default() -> Self {
        Self {
            strong: AugRanges {
                crop_min: 0.7,
                flip_prob: 0.5,
                brightness: 0.2,
                contrast: 0.2,
            },
            weak: AugRanges {
                crop_min: 0.95,
                flip_prob: 0.0,
                brightness: 0.05,
                contrast: 0.03,
            },
        }
    }

    pub fn identity() -> Self {
        Self {
            strong: AugRanges::identity(),
            weak: AugRanges::identity(),
        }
    }
}

/// Deterministic differentiable augmentation of `[B,3,S,S]` images: per-sample
/// crop-resize (nearest), horizontal flip, brightness and contrast jitter.
pub fn augment(g: &mut Graph, img: Id, ranges: &AugRanges, seed: u64) -> Result<Id> {
    let shape = g.value(img).shape().to_vec();
    if shape.len() != 4 || shape[1] != 3 {
        return Err(IferError::Shape(format!(
            "augment expects [B,3,S,S], got {shape:?}"
        )));
    }
    let (b, s) = (shape[0], shape[2]);
    let mut out = Vec::with_capacity(b);
    for i in 0..b {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let scale = if ranges.crop_min < 1.0 {
            rng.gen_range(ranges.crop_min..=1.0)
        } else {
            1.0
        };
        let crop = ((s as f64 * scale).round() as usize).clamp(1, s);
        let max_off = s - crop;
        let (or, oc) = if max_off > 0 {
            (rng.gen_range(0..=max_off), rng.gen_range(0..=max_off))
        } else {
            (0, 0)
        };
        let flip = ranges.flip_prob > 0.0 && rng.gen::<f64>() < ranges.flip_prob;
        let bright = if ranges.brightness > 0.0 {
            rng.gen_range(-ranges.brightness..=ranges.brightness)
        } else {
            0.0
        };
        let contrast = if ranges.contrast > 0.0 {
            rng.gen_range(1.0 - ranges.contrast..=1.0 + ranges.contrast)
        } else {
            1.0
        };

        let one = g.slice_axis(img, 0, i, 1);
        let map = g.reshape(one, &[3, s, s]);
        // crop + nearest resize (+ optional flip) as one gather
        let mut src = Vec::with_capacity(s * s);
        for r in 0..s {
            for c in 0..s {
                let cc = if flip { s - 1 - c } else { c };
                let sr = or + (r * crop) / s;
                let sc = oc + (cc * crop) / s;
                src.push((sr.min(s - 1), sc.min(s - 1)));
            }
        }
        let mut x = g.gather_hw(map, src, s, s);
        if contrast != 1.0 {
            let mean = g.mean_all(x);
            let xm = g.sub(x, mean);
            let xs = g.scale(xm, contrast);
            x = g.add(xs, mean);
        }
        if bright != 0.0 {
            x = g.add_scalar(x, bright);
        }
        if contrast != 1.0 || bright != 0.0 {
            x = g.clamp(x, 0.0, 1.0);
        }
        out.push(g.reshape(x, &[1, 3, s, s]));
    }
    Ok(g.concat(&out, 0))
}

/// EMA update of Eq-style momentum encoders: `k' = a_m*k + (1-a_m)*q`.
pub fn momentum_update(theta_q: &Params, theta_k: &Params, a_m: f64) -> Result<Params> {
    if !(0.0..1.0).contains(&a_m) {
        return Err(IferError::Validation(format!(
            "momentum weight {a_m} outside [0,1)"
        )));
    }
    let mut out = Params::new();
    for (name, k) in &theta_k.0 {
        let q = theta_q.0.get(name).ok_or_else(|| {
            IferError::Shape(format!("momentum_update: array '{name}' missing in theta_q"))
        })?;
        if q.shape() != k.shape() {
            return Err(IferError::Shape(format!(
                "momentum_update: array '{name}' has shape {:?} in theta_k but {:?} in theta_q",
                k.shape(),
                q.shape()
            )));
        }
        out.insert(name, k * a_m + q * (1.0 - a_m));
    }
    for name in theta_q.names() {
        if !theta_k.0.contains_key(name) {
            return Err(IferError::Shape(format!(
                "momentum_update: array '{name}' missing in theta_k"
            )));
        }
    }
    Ok(out)
}

#[derive(Clone)]
pub struct Critic {
    pub cfg: CriticConfig,
    pub theta_q: Params,
    pub theta_k: Params,
    pub policy: AugPolicy,
}

fn trunk_params(cfg: &CriticConfig, rng: &mut ChaCha8Rng) -> Params {
    let mut p = Params::new();
    let mut cin = 3;
    for (i, &c) in cfg.channels.iter().enumerate() {
        p.insert(&format!("b{i}.kernel"), he_init(rng, &[c, cin, 3, 3]));
        p.insert(&format!("b{i}.bias"), Arr::zeros(IxDyn(&[c])));
        cin = c;
    }
    p.insert(
        "head.w",
        randn(rng, &[cin, cfg.embed_dim], (1.0 / cin as f64).sqrt()),
    );
    p.insert("head.b", Arr::zeros(IxDyn(&[cfg.embed_dim])));
    p
}

/// Strided trunk forward to an L2-normalized embedding `[B, embed]`.
pub fn embed(g: &mut Graph, cfg: &CriticConfig, pn: &ParamNodes, img: Id) -> Id {
    let mut x = img;
    for i in 0..cfg.channels.len() {
        let k = pn.id(&format!("b{i}.kernel"));
        let bias = pn.id(&format!("b{i}.bias"));
        let y = g.conv2d(x, k, 2, 1);
        let c = cfg.channels[i];
        let b4 = g.reshape(bias, &[1, c, 1, 1]);
        let y = g.add(y, b4);
        x = g.leaky_relu(y, 0.2);
    }
    let pooled = g.global_avg_pool(x);
    let w = pn.id("head.w");
    let b = pn.id("head.b");
    let e = g.matmul(pooled, w);
    let e = g.add(e, b);
    l2_normalize_rows(g, e)
}

pub fn l2_normalize_rows(g: &mut Graph, e: Id) -> Id {
    let sq = g.square(e);
    let n = g.sum_axis_keep(sq, 1);
    let n = g.add_scalar(n, 1e-12);
    let inv = g.powf(n, -0.5);
    g.mul(e, inv)
}

/// Row-wise cosine of two L2-normalized embeddings, `[B]`.
pub fn cosine_rows(g: &mut Graph, a: Id, b: Id) -> Id {
    let p = g.mul(a, b);
    let s = g.sum_axis_keep(p, 1);
    let bsz = g.value(s).shape()[0];
    g.reshape(s, &[bsz])
}

pub struct AugSeeds {
    pub q: u64,
    pub k: u64,
}

impl Critic {
    pub fn init(cfg: CriticConfig, policy: AugPolicy, rng: &mut ChaCha8Rng) -> Self {
        let q = trunk_params(&cfg, rng);
        let k = q.clone();
        Self {
            cfg,
            theta_q: q,
            theta_k: k,
            policy,
        }
    }

    pub fn apply_momentum(&mut self, a_m: f64) -> Result<()> {
        self.theta_k = momentum_update(&self.theta_q, &self.theta_k, a_m)?;
        Ok(())
    }

    /// D(img1, img2): m_q on the strongly augmented first image, m_k on the
    /// weakly augmented second. The m_k path is detached, so no gradient
    /// reaches theta_k or img2.
    pub fn score(
        &self,
        g: &mut Graph,
        qn: &ParamNodes,
        img1: Id,
        img2: Id,
        seeds: &AugSeeds,
    ) -> Result<Id> {
        let a1 = augment(g, img1, &self.policy.strong, seeds.q)?;
        let img2_stop = g.detach(img2);
        let a2 = augment(g, img2_stop, &self.policy.weak, seeds.k)?;
        let a2 = g.detach(a2);
        let eq = embed(g, &self.cfg, qn, a1);
        let kn = self.theta_k.frozen_nodes(g);
        let ek = embed(g, &self.cfg, &kn, a2);
        let ek = g.detach(ek);
        Ok(cosine_rows(g, eq, ek))
    }

    /// Inference score on two single images `[3,S,S]`.
    pub fn score_pair(&self, img1: &Arr, img2: &Arr, seeds: &AugSeeds) -> Result<f64> {
        let mut g = Graph::new();
        let qn = self.theta_q.nodes(&mut g);
        let s = self.cfg.img_size;
        let i1 = g.leaf(img1.clone().into_shape(IxDyn(&[1, 3, s, s])).map_err(|_| {
            IferError::Shape(format!("expected [3,{s},{s}] image, got {:?}", img1.shape()))
        })?);
        let i2 = g.leaf(img2.clone().into_shape(IxDyn(&[1, 3, s, s])).map_err(|_| {
            IferError::Shape(format!("expected [3,{s},{s}] image, got {:?}", img2.shape()))
        })?);
        let sc = self.score(&mut g, &qn, i1, i2, seeds)?;
        Ok(g.value(sc)[[0]])
    }
}

/// `(D(x,x)-1)^2 + (D(y,x)+1)^2`, batch-averaged, from score vectors.
pub fn critic_loss_from_scores(g: &mut Graph, d_xx: Id, d_yx: Id) -> Id {
    let r = g.add_scalar(d_xx, -1.0);
    let r2 = g.square(r);
    let real = g.mean_all(r2);
    let f = g.add_scalar(d_yx, 1.0);
    let f2 = g.square(f);
    let fake = g.mean_all(f2);
    g.add(real, fake)
}

/// `(D(y,x)-1)^2`, batch-averaged.
pub fn encoder_adv_loss_from_scores(g: &mut Graph, d_yx: Id) -> Id {
    let r = g.add_scalar(d_yx, -1.0);
    let r2 = g.square(r);
    g.mean_all(r2)
}

/// Full critic objective on a batch: x real images, y detached inversions.
pub fn critic_loss(
    critic: &Critic,
    g: &mut Graph,
    qn: &ParamNodes,
    x: Id,
    y: Id,
    seed: u64,
) -> Result<Id> {
    let d_xx = critic.score(
        g,
        qn,
        x,
        x,
        &AugSeeds {
            q: seed,
            k: seed ^ 0x5151_5151,
        },
    )?;
    let y_stop = g.detach(y);
    let d_yx = critic.score(
        g,
        qn,
        y_stop,
        x,
        &AugSeeds {
            q: seed ^ 0xABCD,
            k: seed ^ 0xDCBA,
        },
    )?;
    Ok(critic_loss_from_scores(g, d_xx, d_yx))
}

/// Adversarial term for the encoder: gradient flows into `y` only.
pub fn encoder_adv_loss(
    critic: &Critic,
    g: &mut Graph,
    qn_frozen: &ParamNodes,
    x: Id,
    y: Id,
    seed: u64,
) -> Result<Id> {
    let d_yx = critic.score(
        g,
        qn_frozen,
        y,
        x,
        &AugSeeds {
            q: seed ^ 0xABCD,
            k: seed ^ 0xDCBA,
        },
    )?;
    Ok(encoder_adv_loss_from_scores(g, d_yx))
}
