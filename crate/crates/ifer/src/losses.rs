//! Composite inversion objective: pixel, perceptual, consistency, latent
//! regularization, adversarial and alignment terms with their weights.
//!
//! Perceptual and consistency terms run through a frozen copy of the
//! discriminator trunk; no external pretrained network is involved, so every
//! derived number is a proxy metric.

use ndarray::{Array1, IxDyn};

use crate::critic::{cosine_rows, l2_normalize_rows, Critic, CriticConfig};
use crate::error::{IferError, Result};
use crate::params::{ParamNodes, Params};
use crate::tape::{Graph, Id};

/// Frozen feature extractor cloned from the discriminator's m_q weights.
#[derive(Clone)]
pub struct Trunk {
    pub cfg: CriticConfig,
    pub params: Params,
}

impl Trunk {
    pub fn from_critic(critic: &Critic) -> Self {
        Self {
            cfg: critic.cfg.clone(),
            params: critic.theta_q.clone(),
        }
    }

    pub fn frozen_nodes(&self, g: &mut Graph) -> ParamNodes {
        self.params.frozen_nodes(g)
    }

    /// Per-block activations (after the leaky ReLU), coarse strides last.
    pub fn features(&self, g: &mut Graph, pn: &ParamNodes, img: Id) -> Vec<Id> {
        let mut x = img;
        let mut feats = Vec::with_capacity(self.cfg.channels.len());
        for i in 0..self.cfg.channels.len() {
            let k = pn.id(&format!("b{i}.kernel"));
            let bias = pn.id(&format!("b{i}.bias"));
            let y = g.conv2d(x, k, 2, 1);
            let c = self.cfg.channels[i];
            let b4 = g.reshape(bias, &[1, c, 1, 1]);
            let y = g.add(y, b4);
            x = g.leaky_relu(y, 0.2);
            feats.push(x);
        }
        feats
    }

    /// L2-normalized embedding `[B, embed]`.
    pub fn embed(&self, g: &mut Graph, pn: &ParamNodes, img: Id) -> Id {
        let feats = self.features(g, pn, img);
        let last = *feats.last().expect("trunk has at least one block");
        let pooled = g.global_avg_pool(last);
        let w = pn.id("head.w");
        let b = pn.id("head.b");
        let e = g.matmul(pooled, w);
        let e = g.add(e, b);
        l2_normalize_rows(g, e)
    }
}

/// Plain batch-mean squared error between images.
pub fn pixel_loss(g: &mut Graph, x: Id, y: Id) -> Result<Id> {
    let (sx, sy) = (g.value(x).shape().to_vec(), g.value(y).shape().to_vec());
    if sx != sy {
        return Err(IferError::Shape(format!(
            "pixel_loss: shapes {sx:?} vs {sy:?}"
        )));
    }
    let d = g.sub(x, y);
    let d2 = g.square(d);
    Ok(g.mean_all(d2))
}

fn channel_normalize(g: &mut Graph, f: Id) -> Id {
    let sq = g.square(f);
    let n = g.sum_axis_keep(sq, 1);
    let n = g.add_scalar(n, 1e-10);
    let inv = g.powf(n, -0.5);
    g.mul(f, inv)
}

/// Sum over trunk blocks of the MSE between channel-unit-normalized features.
pub fn perceptual_distance(g: &mut Graph, trunk: &Trunk, pn: &ParamNodes, x: Id, y: Id) -> Result<Id> {
    let fx = trunk.features(g, pn, x);
    let fy = trunk.features(g, pn, y);
    let mut total = g.scalar(0.0);
    for (a, b) in fx.into_iter().zip(fy) {
        let na = channel_normalize(g, a);
        let nb = channel_normalize(g, b);
        let d = g.sub(na, nb);
        let d2 = g.square(d);
        let m = g.mean_all(d2);
        total = g.add(total, m);
    }
    Ok(total)
}

/// `1 - cos(e(x), e(y))` averaged over the batch; range [0, 2].
pub fn consistency_loss(g: &mut Graph, trunk: &Trunk, pn: &ParamNodes, x: Id, y: Id) -> Result<Id> {
    let ex = trunk.embed(g, pn, x);
    let ey = trunk.embed(g, pn, y);
    let cos = cosine_rows(g, ex, ey);
    let m = g.mean_all(cos);
    let neg = g.neg(m);
    Ok(g.add_scalar(neg, 1.0))
}

/// Mean over layers and batch of the squared distance to the frozen mean
/// latent: `(1/(N*B)) sum_l sum_b ||code_lb - w_mean||^2`.
pub fn latent_reg(g: &mut Graph, codes: &[Id], w_mean: &Array1<f64>) -> Result<Id> {
    if codes.is_empty() {
        return Err(IferError::Validation("latent_reg needs >= 1 code".into()));
    }
    let d = w_mean.len();
    let b = {
        let v = g.value(codes[0]);
        if v.ndim() != 2 || v.shape()[1] != d {
            return Err(IferError::Shape(format!(
                "latent_reg: code shape {:?} vs mean latent dim {d}",
                v.shape()
            )));
        }
        v.shape()[0]
    };
    let wm = g.leaf(
        w_mean
            .clone()
            .into_shape(IxDyn(&[1, d]))
            .expect("1-d mean latent"),
    );
    let mut total = g.scalar(0.0);
    for &c in codes {
        let diff = g.sub(c, wm);
        let d2 = g.square(diff);
        let s = g.sum_all(d2);
        total = g.add(total, s);
    }
    Ok(g.scale(total, 1.0 / (codes.len() * b) as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub pixel: f64,
    pub perceptual: f64,
    pub consistency: f64,
    pub latent_reg: f64,
    pub adversarial: f64,
    pub alignment: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            pixel: 0.8,
            perceptual: 1.0,
            consistency: 0.1,
            latent_reg: 1e-4,
            adversarial: 1e-3,
            alignment: 1.0,
        }
    }
}

/// Unweighted term ids feeding the composite objective; optional players may
/// be disabled (ablations, pure reconstruction phases).
pub struct LossTerms {
    pub pixel: Id,
    pub perceptual: Id,
    pub consistency: Id,
    pub latent_reg: Id,
    pub adversarial: Option<Id>,
    pub alignment: Option<Id>,
}

#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub pixel: f64,
    pub perceptual: f64,
    pub consistency: f64,
    pub latent_reg: f64,
    pub adversarial: f64,
    pub alignment: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Recombine the unweighted terms with `w`; must match `total`.
    pub fn recombine(&self, w: &LossWeights) -> f64 {
        w.pixel * self.pixel
            + w.perceptual * self.perceptual
            + w.consistency * self.consistency
            + w.latent_reg * self.latent_reg
            + w.adversarial * self.adversarial
            + w.alignment * self.alignment
    }
}

/// Weighted sum of the terms; the breakdown records unweighted values.
pub fn compose(g: &mut Graph, w: &LossWeights, terms: &LossTerms) -> (Id, LossBreakdown) {
    let mut total = g.scale(terms.pixel, w.pixel);
    let p = g.scale(terms.perceptual, w.perceptual);
    total = g.add(total, p);
    let c = g.scale(terms.consistency, w.consistency);
    total = g.add(total, c);
    let l = g.scale(terms.latent_reg, w.latent_reg);
    total = g.add(total, l);
    if let Some(a) = terms.adversarial {
        let a = g.scale(a, w.adversarial);
        total = g.add(total, a);
    }
    if let Some(al) = terms.alignment {
        let al = g.scale(al, w.alignment);
        total = g.add(total, al);
    }
    let breakdown = LossBreakdown {
        pixel: g.scalar_value(terms.pixel),
        perceptual: g.scalar_value(terms.perceptual),
        consistency: g.scalar_value(terms.consistency),
        latent_reg: g.scalar_value(terms.latent_reg),
        adversarial: terms.adversarial.map_or(0.0, |a| g.scalar_value(a)),
        alignment: terms.alignment.map_or(0.0, |a| g.scalar_value(a)),
        total: g.scalar_value(total),
    };
    (total, breakdown)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::critic::AugPolicy;
    use crate::faces::{render_face, sample_params, Split};
    use crate::params::randn;
    use crate::tape::Arr;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn micro_trunk(seed: u64) -> Trunk {
        let mut r = rng(seed);
        let critic = Critic::init(CriticConfig::micro(), AugPolicy::identity(), &mut r);
        Trunk::from_critic(&critic)
    }

    fn face_trunk(seed: u64) -> Trunk {
        let mut r = rng(seed);
        let cfg = CriticConfig {
            img_size: 64,
            channels: vec![4, 6, 8, 8],
            embed_dim: 8,
            momentum: 0.9,
        };
        let critic = Critic::init(cfg, AugPolicy::identity(), &mut r);
        Trunk::from_critic(&critic)
    }

    fn unit_img(r: &mut ChaCha8Rng, b: usize, s: usize) -> Arr {
        randn(r, &[b, 3, s, s], 0.2).mapv(|v| (v + 0.5).clamp(0.0, 1.0))
    }

    #[test]
    fn pixel_loss_matches_plain_mse() {
        let mut r = rng(0);
        let x = unit_img(&mut r, 2, 8);
        let y = unit_img(&mut r, 2, 8);
        let mut g = Graph::new();
        let xi = g.leaf(x.clone());
        let yi = g.leaf(y.clone());
        let l = pixel_loss(&mut g, xi, yi).unwrap();
        let oracle = crate::metrics::mse(&x, &y).unwrap();
        assert!((g.scalar_value(l) - oracle).abs() < 1e-12);
        let z = g.leaf(unit_img(&mut r, 2, 9));
        assert!(pixel_loss(&mut g, xi, z).is_err());
    }

    #[test]
    fn perceptual_and_consistency_vanish_on_identity() {
        let trunk = micro_trunk(1);
        let mut r = rng(2);
        let x = unit_img(&mut r, 2, 16);
        let mut g = Graph::new();
        let pn = trunk.frozen_nodes(&mut g);
        let xi = g.leaf(x);
        let p = perceptual_distance(&mut g, &trunk, &pn, xi, xi).unwrap();
        assert!(g.scalar_value(p).abs() < 1e-12);
        let c = consistency_loss(&mut g, &trunk, &pn, xi, xi).unwrap();
        assert!(g.scalar_value(c).abs() < 1e-9);
    }

    #[test]
    fn perceptual_positive_and_symmetric_on_distinct_inputs() {
        let trunk = micro_trunk(3);
        let mut r = rng(4);
        let x = unit_img(&mut r, 2, 16);
        let y = unit_img(&mut r, 2, 16);
        let mut g = Graph::new();
        let pn = trunk.frozen_nodes(&mut g);
        let xi = g.leaf(x);
        let yi = g.leaf(y);
        let pxy = perceptual_distance(&mut g, &trunk, &pn, xi, yi).unwrap();
        let pyx = perceptual_distance(&mut g, &trunk, &pn, yi, xi).unwrap();
        assert!(g.scalar_value(pxy) > 0.0);
        assert!((g.scalar_value(pxy) - g.scalar_value(pyx)).abs() < 1e-12);
    }

    #[test]
    fn consistency_stays_in_range_and_detects_negation() {
        let trunk = micro_trunk(5);
        let mut r = rng(6);
        for _ in 0..20 {
            let x = unit_img(&mut r, 3, 16);
            let y = unit_img(&mut r, 3, 16);
            let mut g = Graph::new();
            let pn = trunk.frozen_nodes(&mut g);
            let xi = g.leaf(x);
            let yi = g.leaf(y);
            let c = consistency_loss(&mut g, &trunk, &pn, xi, yi).unwrap();
            let v = g.scalar_value(c);
            assert!((-1e-9..=2.0 + 1e-9).contains(&v), "{v}");
        }
    }

    #[test]
    fn same_face_is_more_consistent_than_different_face() {
        let trunk = face_trunk(7);
        let params = sample_params(12, 99, Split::Train).unwrap();
        let mut same = 0.0;
        let mut cross = 0.0;
        let mut n = 0.0;
        for pair in params.chunks(2) {
            if pair.len() < 2 {
                break;
            }
            let a = &pair[0];
            let mut a_jit = a.clone();
            a_jit.jitter_seed ^= 0x5a5a;
            let b = &pair[1];
            let ia = render_face(a).unwrap();
            let ia2 = render_face(&a_jit).unwrap();
            let ib = render_face(b).unwrap();
            let mut g = Graph::new();
            let pn = trunk.frozen_nodes(&mut g);
            let s = 64;
            let xi = g.leaf(ia.clone().into_shape(IxDyn(&[1, 3, s, s])).unwrap());
            let yi = g.leaf(ia2.into_shape(IxDyn(&[1, 3, s, s])).unwrap());
            let zi = g.leaf(ib.into_shape(IxDyn(&[1, 3, s, s])).unwrap());
            let cs = consistency_loss(&mut g, &trunk, &pn, xi, yi).unwrap();
            let cc = consistency_loss(&mut g, &trunk, &pn, xi, zi).unwrap();
            same += g.scalar_value(cs);
            cross += g.scalar_value(cc);
            n += 1.0;
        }
        assert!(
            same / n < cross / n,
            "same-identity {same} should beat cross-identity {cross}"
        );
    }

    #[test]
    fn latent_reg_unit_offset_oracle() {
        // one layer offset by a unit vector, N layers total -> 1/N
        let d = 6;
        let n_layers = 3;
        let w_mean = Array1::<f64>::zeros(d);
        let mut g = Graph::new();
        let mut codes = Vec::new();
        for l in 0..n_layers {
            let mut c = Arr::zeros(IxDyn(&[1, d]));
            if l == 0 {
                c[[0, 2]] = 1.0;
            }
            codes.push(g.leaf(c));
        }
        let reg = latent_reg(&mut g, &codes, &w_mean).unwrap();
        assert!((g.scalar_value(reg) - 1.0 / n_layers as f64).abs() < 1e-12);
        // gradient is 2(code - w_mean)/(N*B)
        let grads = g.backward(reg);
        let g0 = grads[codes[0].0].as_ref().unwrap();
        assert!((g0[[0, 2]] - 2.0 / n_layers as f64).abs() < 1e-12);
        assert!(g0.iter().filter(|&&v| v != 0.0).count() == 1);
    }

    #[test]
    fn latent_reg_validates_shapes() {
        let mut g = Graph::new();
        let w_mean = Array1::<f64>::zeros(4);
        assert!(latent_reg(&mut g, &[], &w_mean).is_err());
        let bad = g.leaf(Arr::zeros(IxDyn(&[1, 5])));
        assert!(latent_reg(&mut g, &[bad], &w_mean).is_err());
    }

    #[test]
    fn default_weights_are_pinned() {
        let w = LossWeights::default();
        assert_eq!(w.pixel, 0.8);
        assert_eq!(w.perceptual, 1.0);
        assert_eq!(w.consistency, 0.1);
        assert_eq!(w.latent_reg, 1e-4);
        assert_eq!(w.adversarial, 1e-3);
        assert_eq!(w.alignment, 1.0);
    }

    #[test]
    fn breakdown_recombines_to_total() {
        let mut g = Graph::new();
        let w = LossWeights::default();
        let terms = LossTerms {
            pixel: g.scalar(0.3),
            perceptual: g.scalar(1.7),
            consistency: g.scalar(0.2),
            latent_reg: g.scalar(5.0),
            adversarial: Some(g.scalar(2.5)),
            alignment: Some(g.scalar(0.9)),
        };
        let (total, bd) = compose(&mut g, &w, &terms);
        assert!((bd.total - g.scalar_value(total)).abs() < 1e-12);
        assert!((bd.recombine(&w) - bd.total).abs() < 1e-6);
        // optional terms off -> their breakdown entries are zero
        let terms2 = LossTerms {
            adversarial: None,
            alignment: None,
            ..terms
        };
        let (_, bd2) = compose(&mut g, &w, &terms2);
        assert_eq!(bd2.adversarial, 0.0);
        assert_eq!(bd2.alignment, 0.0);
        assert!((bd2.recombine(&w) - bd2.total).abs() < 1e-6);
    }

    #[test]
    fn composite_gradients_match_finite_differences() {
        let trunk = micro_trunk(8);
        let w = LossWeights::default();
        let w_mean = Array1::<f64>::zeros(4);
        let mut r = rng(9);
        let x0 = unit_img(&mut r, 1, 16);
        let y0 = unit_img(&mut r, 1, 16);
        let c0 = randn(&mut r, &[1, 4], 0.5);

        let eval = |y: &Arr, c: &Arr| -> (f64, Graph, Id, Id) {
            let mut g = Graph::new();
            let pn = trunk.frozen_nodes(&mut g);
            let xi = g.leaf(x0.clone());
            let yi = g.leaf(y.clone());
            let ci = g.leaf(c.clone());
            let terms = LossTerms {
                pixel: pixel_loss(&mut g, xi, yi).unwrap(),
                perceptual: perceptual_distance(&mut g, &trunk, &pn, xi, yi).unwrap(),
                consistency: consistency_loss(&mut g, &trunk, &pn, xi, yi).unwrap(),
                latent_reg: latent_reg(&mut g, &[ci], &w_mean).unwrap(),
                adversarial: None,
                alignment: None,
            };
            let (total, _) = compose(&mut g, &w, &terms);
            (g.scalar_value(total), g, yi, ci)
        };

        let (_, g, yi, ci) = eval(&y0, &c0);
        let total_id = Id(g.len() - 1);
        let grads = g.backward(total_id);
        let gy = grads[yi.0].as_ref().unwrap();
        let gc = grads[ci.0].as_ref().unwrap();
        let eps = 1e-6;
        let check = |an: f64, fd: f64, what: &str| {
            let denom = an.abs().max(fd.abs()).max(1.0);
            assert!((an - fd).abs() / denom < 1e-4, "{what}: analytic {an} fd {fd}");
        };
        for flat in [0usize, 101, 407] {
            let mut p = y0.clone();
            *p.iter_mut().nth(flat).unwrap() += eps;
            let up = eval(&p, &c0).0;
            let mut m = y0.clone();
            *m.iter_mut().nth(flat).unwrap() -= eps;
            let dn = eval(&m, &c0).0;
            check(*gy.iter().nth(flat).unwrap(), (up - dn) / (2.0 * eps), "image");
        }
        for flat in [0usize, 3] {
            let mut p = c0.clone();
            *p.iter_mut().nth(flat).unwrap() += eps;
            let up = eval(&y0, &p).0;
            let mut m = c0.clone();
            *m.iter_mut().nth(flat).unwrap() -= eps;
            let dn = eval(&y0, &m).0;
            check(*gc.iter().nth(flat).unwrap(), (up - dn) / (2.0 * eps), "code");
        }
    }

    #[test]
    fn perceptual_distance_grows_with_noise_level() {
        let trunk = micro_trunk(11);
        let mut r = rng(12);
        let sigmas = [0.05, 0.1, 0.2];
        let mut means = [0.0f64; 3];
        let n = 50;
        for _ in 0..n {
            let x = unit_img(&mut r, 1, 16);
            let noise = randn(&mut r, &[1, 3, 16, 16], 1.0);
            for (slot, &s) in sigmas.iter().enumerate() {
                let y = (&x + &(&noise * s)).mapv(|v| v.clamp(0.0, 1.0));
                let mut g = Graph::new();
                let pn = trunk.frozen_nodes(&mut g);
                let xi = g.leaf(x.clone());
                let yi = g.leaf(y);
                let d = perceptual_distance(&mut g, &trunk, &pn, xi, yi).unwrap();
                means[slot] += g.scalar_value(d) / n as f64;
            }
        }
        assert!(
            means[0] < means[1] && means[1] < means[2],
            "mean distances not monotone in sigma: {means:?}"
        );
    }
}
