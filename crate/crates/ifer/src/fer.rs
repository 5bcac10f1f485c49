//! Expression classifier over inverted faces: per-layer latent MLPs are
//! summed into a fusion vector that styles a demodulated convolution over the
//! structure code, then a small MLP head classifies the pooled features.
//!
//! Ablation paths bypass the fusion module entirely: latents-only classifies
//! the mean-pooled raw codes, structure-only runs the fusion kernel as a
//! plain convolution over the structure code.

use ndarray::IxDyn;
use rand_chacha::ChaCha8Rng;

use crate::error::{IferError, Result};
use crate::faces::NUM_CLASSES;
use crate::generator::modulated_conv;
use crate::params::{he_init, randn, ParamNodes, Params};
use crate::tape::{Graph, Id};

#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct FerConfig {
    /// Number of latent codes fed in (one per generator layer).
    pub num_codes: usize,
    pub code_dim: usize,
    /// Structure-code channels; the styled axis of the fusion conv.
    pub sc_channels: usize,
    /// Width of the shared fusion vector; also the fusion conv's out-channels
    /// so both ablation paths can share the classifier.
    pub fuse_dim: usize,
    pub hidden: usize,
}

impl FerConfig {
    pub fn desk_default() -> Self {
        Self {
            num_codes: 10,
            code_dim: 128,
            sc_channels: 128,
            fuse_dim: 128,
            hidden: 64,
        }
    }

    pub fn micro() -> Self {
        Self {
            num_codes: 3,
            code_dim: 6,
            sc_channels: 4,
            fuse_dim: 6,
            hidden: 6,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum FusionMode {
    /// Latents style a demodulated conv over the structure code.
    Full,
    /// Mean-pooled raw codes only; the fusion module and structure code are
    /// bypassed.
    LatentsOnly,
    /// Plain conv over the structure code; latents are ignored.
    StructureOnly,
}

impl FusionMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "latents-only" => Ok(Self::LatentsOnly),
            "structure-only" => Ok(Self::StructureOnly),
            other => Err(IferError::Config(format!(
                "unknown fusion mode '{other}' (full | latents-only | structure-only)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::LatentsOnly => "latents-only",
            Self::StructureOnly => "structure-only",
        }
    }
}

#[derive(Clone)]
pub struct FerHead {
    pub cfg: FerConfig,
    pub params: Params,
}

impl FerHead {
    pub fn init(cfg: FerConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut p = Params::new();
        let d = cfg.code_dim;
        let f = cfg.fuse_dim;
        for l in 0..cfg.num_codes {
            p.insert(&format!("mlp{l}.w1"), randn(rng, &[d, f], (1.0 / d as f64).sqrt()));
            p.insert(&format!("mlp{l}.b1"), crate::tape::Arr::zeros(IxDyn(&[f])));
            p.insert(&format!("mlp{l}.w2"), randn(rng, &[f, f], (1.0 / f as f64).sqrt()));
            p.insert(&format!("mlp{l}.b2"), crate::tape::Arr::zeros(IxDyn(&[f])));
        }
        p.insert(
            "affine.w",
            randn(rng, &[f, cfg.sc_channels], (1.0 / f as f64).sqrt()),
        );
        p.insert("affine.b", crate::tape::Arr::ones(IxDyn(&[cfg.sc_channels])));
        p.insert("fuse.kernel", he_init(rng, &[f, cfg.sc_channels, 3, 3]));
        p.insert("fuse.bias", crate::tape::Arr::zeros(IxDyn(&[f])));
        p.insert("cls.w1", randn(rng, &[f, cfg.hidden], (1.0 / f as f64).sqrt()));
        p.insert("cls.b1", crate::tape::Arr::zeros(IxDyn(&[cfg.hidden])));
        p.insert(
            "cls.w2",
            randn(rng, &[cfg.hidden, NUM_CLASSES], (1.0 / cfg.hidden as f64).sqrt()),
        );
        p.insert("cls.b2", crate::tape::Arr::zeros(IxDyn(&[NUM_CLASSES])));
        Self { cfg, params: p }
    }

    fn check_codes(&self, g: &Graph, codes: &[Id]) -> Result<usize> {
        if codes.len() != self.cfg.num_codes {
            return Err(IferError::Config(format!(
                "fer head expects {} latent codes, got {}",
                self.cfg.num_codes,
                codes.len()
            )));
        }
        let b = g.value(codes[0]).shape()[0];
        for &c in codes {
            let s = g.value(c).shape().to_vec();
            if s != [b, self.cfg.code_dim] {
                return Err(IferError::Shape(format!(
                    "latent code must be [B,{}], got {s:?}",
                    self.cfg.code_dim
                )));
            }
        }
        Ok(b)
    }

    /// Shared fusion vector `h = sum_l M_l(code_l)`, `[B, fuse_dim]`.
    pub fn fusion_vector(&self, g: &mut Graph, pn: &ParamNodes, codes: &[Id]) -> Result<Id> {
        self.check_codes(g, codes)?;
        let mut h: Option<Id> = None;
        for (l, &c) in codes.iter().enumerate() {
            let w1 = pn.id(&format!("mlp{l}.w1"));
            let b1 = pn.id(&format!("mlp{l}.b1"));
            let w2 = pn.id(&format!("mlp{l}.w2"));
            let b2 = pn.id(&format!("mlp{l}.b2"));
            let x = g.matmul(c, w1);
            let x = g.add(x, b1);
            let x = g.leaky_relu(x, 0.2);
            let x = g.matmul(x, w2);
            let x = g.add(x, b2);
            h = Some(match h {
                Some(acc) => g.add(acc, x),
                None => x,
            });
        }
        Ok(h.expect("num_codes >= 1"))
    }

    /// Latents modulate a demodulated conv over the structure code,
    /// `[B, fuse_dim, h, w]`.
    pub fn fuse(&self, g: &mut Graph, pn: &ParamNodes, sc: Id, codes: &[Id]) -> Result<Id> {
        {
            let s = g.value(sc).shape().to_vec();
            if s.len() != 4 || s[1] != self.cfg.sc_channels {
                return Err(IferError::Shape(format!(
                    "structure code must be [B,{},h,w], got {s:?}",
                    self.cfg.sc_channels
                )));
            }
        }
        let h = self.fusion_vector(g, pn, codes)?;
        let aw = pn.id("affine.w");
        let ab = pn.id("affine.b");
        let style = g.matmul(h, aw);
        let style = g.add(style, ab);
        let k = pn.id("fuse.kernel");
        let y = modulated_conv(g, sc, k, style, true)?;
        let bias = pn.id("fuse.bias");
        let b4 = g.reshape(bias, &[1, self.cfg.fuse_dim, 1, 1]);
        let y = g.add(y, b4);
        Ok(g.leaky_relu(y, 0.2))
    }

    fn classify(&self, g: &mut Graph, pn: &ParamNodes, feat: Id) -> Id {
        let w1 = pn.id("cls.w1");
        let b1 = pn.id("cls.b1");
        let w2 = pn.id("cls.w2");
        let b2 = pn.id("cls.b2");
        let x = g.matmul(feat, w1);
        let x = g.add(x, b1);
        let x = g.leaky_relu(x, 0.2);
        let x = g.matmul(x, w2);
        g.add(x, b2)
    }

    /// Raw class scores `[B, 7]` for the chosen fusion path.
    pub fn logits(
        &self,
        g: &mut Graph,
        pn: &ParamNodes,
        sc: Id,
        codes: &[Id],
        mode: FusionMode,
    ) -> Result<Id> {
        let feat = match mode {
            FusionMode::Full => {
                let fused = self.fuse(g, pn, sc, codes)?;
                g.global_avg_pool(fused)
            }
            FusionMode::LatentsOnly => {
                // ablation bypasses the fusion MLPs: plain mean over layers
                if self.cfg.code_dim != self.cfg.fuse_dim {
                    return Err(IferError::Config(format!(
                        "latents-only ablation feeds raw codes to the classifier \
                         and needs code_dim == fuse_dim, got {} vs {}",
                        self.cfg.code_dim, self.cfg.fuse_dim
                    )));
                }
                self.check_codes(g, codes)?;
                let mut acc = codes[0];
                for &c in &codes[1..] {
                    acc = g.add(acc, c);
                }
                g.scale(acc, 1.0 / codes.len() as f64)
            }
            FusionMode::StructureOnly => {
                let k = pn.id("fuse.kernel");
                let y = g.conv2d(sc, k, 1, 1);
                let bias = pn.id("fuse.bias");
                let b4 = g.reshape(bias, &[1, self.cfg.fuse_dim, 1, 1]);
                let y = g.add(y, b4);
                let y = g.leaky_relu(y, 0.2);
                g.global_avg_pool(y)
            }
        };
        Ok(self.classify(g, pn, feat))
    }

    pub fn probabilities(&self, g: &mut Graph, logits: Id) -> Id {
        g.softmax_last(logits)
    }
}

/// Batch-mean cross entropy `-log p[label]` from logits.
pub fn fer_loss(g: &mut Graph, logits: Id, labels: &[usize]) -> Result<Id> {
    let shape = g.value(logits).shape().to_vec();
    if shape.len() != 2 || shape[1] != NUM_CLASSES {
        return Err(IferError::Shape(format!(
            "logits must be [B,{NUM_CLASSES}], got {shape:?}"
        )));
    }
    if labels.len() != shape[0] {
        return Err(IferError::Validation(format!(
            "batch has {} logits rows but {} labels",
            shape[0],
            labels.len()
        )));
    }
    for &l in labels {
        if l >= NUM_CLASSES {
            return Err(IferError::Validation(format!(
                "label {l} out of range 0..{NUM_CLASSES}"
            )));
        }
    }
    let logp = g.log_softmax_last(logits);
    let mut mask = crate::tape::Arr::zeros(IxDyn(&[shape[0], NUM_CLASSES]));
    for (i, &l) in labels.iter().enumerate() {
        mask[[i, l]] = -1.0 / shape[0] as f64;
    }
    let m = g.leaf(mask);
    let prod = g.mul(logp, m);
    Ok(g.sum_all(prod))
}

/// Row argmax of logits or probabilities.
pub fn predictions(g: &Graph, logits: Id) -> Vec<usize> {
    let v = g.value(logits);
    let (b, k) = (v.shape()[0], v.shape()[1]);
    (0..b)
        .map(|i| {
            (0..k)
                .max_by(|&a, &c| v[[i, a]].total_cmp(&v[[i, c]]))
                .unwrap()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::randn;
    use crate::tape::Arr;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn micro_inputs(r: &mut ChaCha8Rng, b: usize) -> (Arr, Vec<Arr>) {
        let cfg = FerConfig::micro();
        let sc = randn(r, &[b, cfg.sc_channels, 4, 4], 0.5);
        let codes = (0..cfg.num_codes)
            .map(|_| randn(r, &[b, cfg.code_dim], 0.5))
            .collect();
        (sc, codes)
    }

    #[test]
    fn probabilities_sum_to_one() {
        let mut r = rng(0);
        let head = FerHead::init(FerConfig::micro(), &mut r);
        let (sc, codes) = micro_inputs(&mut r, 3);
        let mut g = Graph::new();
        let pn = head.params.nodes(&mut g);
        let sci = g.leaf(sc);
        let cids: Vec<Id> = codes.into_iter().map(|c| g.leaf(c)).collect();
        for mode in [FusionMode::Full, FusionMode::LatentsOnly, FusionMode::StructureOnly] {
            let logits = head.logits(&mut g, &pn, sci, &cids, mode).unwrap();
            let probs = head.probabilities(&mut g, logits);
            let pv = g.value(probs);
            assert_eq!(pv.shape(), &[3, NUM_CLASSES]);
            for i in 0..3 {
                let s: f64 = (0..NUM_CLASSES).map(|k| pv[[i, k]]).sum();
                assert!((s - 1.0).abs() < 1e-6, "{mode:?} row {i} sums to {s}");
                assert!((0..NUM_CLASSES).all(|k| pv[[i, k]] > 0.0));
            }
        }
    }

    #[test]
    fn zeroed_final_layer_gives_uniform_and_ln7_loss() {
        let mut r = rng(1);
        let mut head = FerHead::init(FerConfig::micro(), &mut r);
        head.params.insert("cls.w2", Arr::zeros(IxDyn(&[head.cfg.hidden, NUM_CLASSES])));
        head.params.insert("cls.b2", Arr::zeros(IxDyn(&[NUM_CLASSES])));
        let (sc, codes) = micro_inputs(&mut r, 2);
        let mut g = Graph::new();
        let pn = head.params.nodes(&mut g);
        let sci = g.leaf(sc);
        let cids: Vec<Id> = codes.into_iter().map(|c| g.leaf(c)).collect();
        let logits = head.logits(&mut g, &pn, sci, &cids, FusionMode::Full).unwrap();
        let probs = head.probabilities(&mut g, logits);
        let pv = g.value(probs);
        for v in pv.iter() {
            assert!((v - 1.0 / 7.0).abs() < 1e-12);
        }
        let loss = fer_loss(&mut g, logits, &[0, 6]).unwrap();
        let ln7 = (7.0f64).ln();
        assert!((g.scalar_value(loss) - ln7).abs() < 1e-12, "{}", g.scalar_value(loss));
    }

    #[test]
    fn fer_loss_validates_labels_and_shapes() {
        let mut g = Graph::new();
        let logits = g.leaf(Arr::zeros(IxDyn(&[2, NUM_CLASSES])));
        assert!(matches!(
            fer_loss(&mut g, logits, &[0, 7]),
            Err(IferError::Validation(_))
        ));
        assert!(matches!(
            fer_loss(&mut g, logits, &[0]),
            Err(IferError::Validation(_))
        ));
        let bad = g.leaf(Arr::zeros(IxDyn(&[2, 5])));
        assert!(matches!(fer_loss(&mut g, bad, &[0, 1]), Err(IferError::Shape(_))));
    }

    #[test]
    fn perfect_logits_drive_loss_to_zero() {
        let mut g = Graph::new();
        let mut l = Arr::zeros(IxDyn(&[3, NUM_CLASSES]));
        for (i, &lab) in [1usize, 4, 6].iter().enumerate() {
            l[[i, lab]] = 50.0;
        }
        let li = g.leaf(l);
        let loss = fer_loss(&mut g, li, &[1, 4, 6]).unwrap();
        assert!(g.scalar_value(loss) < 1e-12);
    }

    #[test]
    fn argmax_is_shift_invariant() {
        let mut r = rng(2);
        let mut g = Graph::new();
        let l = randn(&mut r, &[5, NUM_CLASSES], 1.0);
        let li = g.leaf(l.clone());
        let ls = g.leaf(l.mapv(|v| v + 3.25));
        assert_eq!(predictions(&g, li), predictions(&g, ls));
    }

    #[test]
    fn fusion_is_sensitive_to_both_inputs() {
        let mut r = rng(3);
        let head = FerHead::init(FerConfig::micro(), &mut r);
        let (sc, codes) = micro_inputs(&mut r, 2);
        let (sc2, codes2) = micro_inputs(&mut r, 2);
        let mut g = Graph::new();
        let pn = head.params.nodes(&mut g);
        let sci = g.leaf(sc);
        let sci2 = g.leaf(sc2);
        let cids: Vec<Id> = codes.into_iter().map(|c| g.leaf(c)).collect();
        let cids2: Vec<Id> = codes2.into_iter().map(|c| g.leaf(c)).collect();
        let base = head.logits(&mut g, &pn, sci, &cids, FusionMode::Full).unwrap();
        let other_sc = head.logits(&mut g, &pn, sci2, &cids, FusionMode::Full).unwrap();
        let other_codes = head.logits(&mut g, &pn, sci, &cids2, FusionMode::Full).unwrap();
        let d_sc = (g.value(base) - g.value(other_sc)).mapv(f64::abs).sum();
        let d_codes = (g.value(base) - g.value(other_codes)).mapv(f64::abs).sum();
        assert!(d_sc > 1e-6, "logits ignore the structure code");
        assert!(d_codes > 1e-6, "logits ignore the latent codes");
        // ablations ignore exactly the other input
        let lat = head.logits(&mut g, &pn, sci, &cids, FusionMode::LatentsOnly).unwrap();
        let lat2 = head.logits(&mut g, &pn, sci2, &cids, FusionMode::LatentsOnly).unwrap();
        assert_eq!(g.value(lat), g.value(lat2));
        let st = head.logits(&mut g, &pn, sci, &cids, FusionMode::StructureOnly).unwrap();
        let st2 = head.logits(&mut g, &pn, sci, &cids2, FusionMode::StructureOnly).unwrap();
        assert_eq!(g.value(st), g.value(st2));
    }

    #[test]
    fn wrong_code_count_or_shape_is_rejected() {
        let mut r = rng(4);
        let head = FerHead::init(FerConfig::micro(), &mut r);
        let (sc, codes) = micro_inputs(&mut r, 1);
        let mut g = Graph::new();
        let pn = head.params.nodes(&mut g);
        let sci = g.leaf(sc);
        let cids: Vec<Id> = codes.into_iter().map(|c| g.leaf(c)).collect();
        assert!(matches!(
            head.logits(&mut g, &pn, sci, &cids[..2], FusionMode::Full),
            Err(IferError::Config(_))
        ));
        let bad = g.leaf(Arr::zeros(IxDyn(&[1, head.cfg.code_dim + 1])));
        let mut wrong = cids.clone();
        wrong[1] = bad;
        assert!(matches!(
            head.logits(&mut g, &pn, sci, &wrong, FusionMode::Full),
            Err(IferError::Shape(_))
        ));
    }

    #[test]
    fn fer_gradients_match_finite_differences() {
        let mut r = rng(5);
        let head = FerHead::init(FerConfig::micro(), &mut r);
        let (sc0, codes0) = micro_inputs(&mut r, 2);
        let labels = [2usize, 5];

        let eval = |sc: &Arr, codes: &[Arr], kern_delta: Option<(usize, f64)>| -> (f64, Graph, Vec<Id>, Id, crate::params::ParamNodes) {
            let mut params = head.params.clone();
            if let Some((flat, d)) = kern_delta {
                let k = params.0.get_mut("fuse.kernel").unwrap();
                *k.iter_mut().nth(flat).unwrap() += d;
            }
            let mut g = Graph::new();
            let pn = params.nodes(&mut g);
            let sci = g.leaf(sc.clone());
            let cids: Vec<Id> = codes.iter().map(|c| g.leaf(c.clone())).collect();
            let logits = head.logits(&mut g, &pn, sci, &cids, FusionMode::Full).unwrap();
            let loss = fer_loss(&mut g, logits, &labels).unwrap();
            let v = g.scalar_value(loss);
            (v, g, cids, sci, pn)
        };

        let (_, g, cids, sci, pn) = eval(&sc0, &codes0, None);
        let loss_id = Id(g.len() - 1);
        let grads = g.backward(loss_id);
        let eps = 1e-6;
        let check = |an: f64, fd: f64, what: &str| {
            let denom = an.abs().max(fd.abs()).max(1.0);
            assert!((an - fd).abs() / denom < 1e-4, "{what}: analytic {an} fd {fd}");
        };
        let gsc = grads[sci.0].as_ref().unwrap();
        for flat in [0usize, 13, 61] {
            let mut p = sc0.clone();
            *p.iter_mut().nth(flat).unwrap() += eps;
            let up = eval(&p, &codes0, None).0;
            let mut m = sc0.clone();
            *m.iter_mut().nth(flat).unwrap() -= eps;
            let dn = eval(&m, &codes0, None).0;
            check(*gsc.iter().nth(flat).unwrap(), (up - dn) / (2.0 * eps), "sc");
        }
        let gc = grads[cids[0].0].as_ref().unwrap();
        for flat in [0usize, 5] {
            let mut cp = codes0.clone();
            *cp[0].iter_mut().nth(flat).unwrap() += eps;
            let up = eval(&sc0, &cp, None).0;
            let mut cm = codes0.clone();
            *cm[0].iter_mut().nth(flat).unwrap() -= eps;
            let dn = eval(&sc0, &cm, None).0;
            check(*gc.iter().nth(flat).unwrap(), (up - dn) / (2.0 * eps), "code");
        }
        let gk = grads[pn.id("fuse.kernel").0].as_ref().unwrap();
        for flat in [0usize, 17] {
            let up = eval(&sc0, &codes0, Some((flat, eps))).0;
            let dn = eval(&sc0, &codes0, Some((flat, -eps))).0;
            check(*gk.iter().nth(flat).unwrap(), (up - dn) / (2.0 * eps), "kernel");
        }
    }
}
