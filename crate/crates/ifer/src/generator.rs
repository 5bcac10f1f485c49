//! Miniature style-based generator with modulated/demodulated convolution.
//!
//! The learned constant input can be replaced by an encoder structure code.
//! Per-layer features are exposed for the distribution-alignment loss. No
//! per-pixel noise injection, so synthesis is deterministic.

use ndarray::{Array1, Array2, IxDyn};
use rand_chacha::ChaCha8Rng;

use crate::error::{IferError, Result};
use crate::params::{he_init, randn, ParamNodes, Params};
use crate::tape::{Arr, Graph, Id};

pub const DEMOD_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Provenance {
    Encoder,
    Sampled,
    Mixed,
}

/// One style vector per generator layer (a W+ analogue), `[N, d]`.
#[derive(Clone, Debug)]
pub struct LatentCodes {
    pub codes: Array2<f64>,
    pub provenance: Provenance,
}

impl LatentCodes {
    pub fn new(codes: Array2<f64>, provenance: Provenance) -> Result<Self> {
        if !codes.iter().all(|v| v.is_finite()) {
            return Err(IferError::Validation("latent codes must be finite".into()));
        }
        Ok(Self { codes, provenance })
    }

    pub fn num_layers(&self) -> usize {
        self.codes.nrows()
    }

    pub fn dim(&self) -> usize {
        self.codes.ncols()
    }
}

/// Layers `[0, crossover)` from `a`, the rest from `b`.
pub fn style_mix(a: &LatentCodes, b: &LatentCodes, crossover: usize) -> Result<LatentCodes> {
    if a.codes.dim() != b.codes.dim() {
        return Err(IferError::Shape(format!(
            "style_mix: code shapes {:?} vs {:?}",
            a.codes.dim(),
            b.codes.dim()
        )));
    }
    let n = a.num_layers();
    if crossover > n {
        return Err(IferError::Validation(format!(
            "style_mix crossover {crossover} out of range 0..={n}"
        )));
    }
    let mut codes = b.codes.clone();
    for l in 0..crossover {
        codes.row_mut(l).assign(&a.codes.row(l));
    }
    Ok(LatentCodes {
        codes,
        provenance: Provenance::Mixed,
    })
}

/// Modulated 3x3 (or 1x1) convolution: the kernel is scaled per in-channel by
/// the per-sample style; with demodulation each out-channel kernel is rescaled
/// by `1/sqrt(sum w'^2 + eps)`. Realized equivalently as input scaling plus
/// output rescaling, which keeps the convolution batched.
pub fn modulated_conv(
    g: &mut Graph,
    x: Id,
    kernel: Id,
    style: Id,
    demodulate: bool,
) -> Result<Id> {
    let (xb, xc) = {
        let v = g.value(x);
        if v.ndim() != 4 {
            return Err(IferError::Shape(format!(
                "modulated_conv input must be [B,C,H,W], got {:?}",
                v.shape()
            )));
        }
        (v.shape()[0], v.shape()[1])
    };
    let (cout, cin, kh, kw) = {
        let v = g.value(kernel);
        if v.ndim() != 4 {
            return Err(IferError::Shape(format!(
                "modulated_conv kernel must be [O,I,kh,kw], got {:?}",
                v.shape()
            )));
        }
        (v.shape()[0], v.shape()[1], v.shape()[2], v.shape()[3])
    };
    let (sb, sc) = {
        let v = g.value(style);
        if v.ndim() != 2 {
            return Err(IferError::Shape(format!(
                "modulated_conv style must be [B,in], got {:?}",
                v.shape()
            )));
        }
        (v.shape()[0], v.shape()[1])
    };
    if sc != cin || xc != cin || sb != xb {
        return Err(IferError::Shape(format!(
            "modulated_conv mismatch: input [B={xb},C={xc}], kernel in={cin}, style [B={sb},len={sc}]"
        )));
    }
    let pad = kh / 2;
    let style4 = g.reshape(style, &[xb, cin, 1, 1]);
    let xs = g.mul(x, style4);
    let mut y = g.conv2d(xs, kernel, 1, pad);
    if demodulate {
        let k2 = g.square(kernel);
        let ks = g.sum_axis_keep(k2, 3);
        let ks = g.sum_axis_keep(ks, 2);
        let ks = g.reshape(ks, &[cout, cin]); // sum over taps
        let s2 = g.square(style); // [B,in]
        let kst = g.permute(ks, &[1, 0]); // [in,out]
        let denom = g.matmul(s2, kst); // [B,out]
        let denom = g.add_scalar(denom, DEMOD_EPS);
        let dcoef = g.powf(denom, -0.5);
        let dcoef4 = g.reshape(dcoef, &[xb, cout, 1, 1]);
        y = g.mul(y, dcoef4);
    }
    let _ = kw;
    Ok(y)
}

#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct GeneratorConfig {
    pub img_size: usize,
    pub base_size: usize,
    /// Structure-code channels d_s; also the constant input's channel count.
    pub sc_channels: usize,
    /// Style/latent dimension d.
    pub code_dim: usize,
    /// Out-channels per synthesis layer, coarse to fine.
    pub layer_channels: Vec<usize>,
    pub mapping_layers: usize,
}

impl GeneratorConfig {
    pub fn desk_default() -> Self {
        Self {
            img_size: 64,
            base_size: 4,
            sc_channels: 128,
            code_dim: 128,
            layer_channels: vec![64, 64, 64, 64, 32, 32, 16, 16, 8, 8],
            mapping_layers: 4,
        }
    }

    /// Tiny config for finite-difference checks.
    pub fn micro() -> Self {
        Self {
            img_size: 8,
            base_size: 4,
            sc_channels: 4,
            code_dim: 6,
            layer_channels: vec![4, 4, 3, 3],
            mapping_layers: 2,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layer_channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let doublings = (self.img_size / self.base_size).trailing_zeros() as usize;
        let expect = 2 * doublings + 2;
        if self.layer_channels.len() != expect {
            return Err(IferError::Config(format!(
                "generator needs {expect} layers for {}->{} synthesis, got {}",
                self.base_size,
                self.img_size,
                self.layer_channels.len()
            )));
        }
        Ok(())
    }

    fn in_channels(&self, layer: usize) -> usize {
        if layer == 0 {
            self.sc_channels
        } else {
            self.layer_channels[layer - 1]
        }
    }

    /// Resolution at which layer `l` operates.
    pub fn layer_resolution(&self, layer: usize) -> usize {
        self.base_size << (layer / 2)
    }

    fn upsample_before(&self, layer: usize) -> bool {
        layer >= 2 && layer % 2 == 0
    }
}

pub struct SynthesisTrace {
    pub image: Id,
    /// (resolution, feature map id), coarse to fine.
    pub features: Vec<(usize, Id)>,
}

#[derive(Clone)]
pub struct Generator {
    pub cfg: GeneratorConfig,
    pub params: Params,
    /// Mean mapped latent, frozen after pretraining.
    pub w_mean: Option<Array1<f64>>,
}

impl Generator {
    pub fn init(cfg: GeneratorConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let mut p = Params::new();
        p.insert(
            "constant",
            randn(rng, &[cfg.sc_channels, cfg.base_size, cfg.base_size], 1.0),
        );
        for l in 0..cfg.num_layers() {
            let cin = cfg.in_channels(l);
            let cout = cfg.layer_channels[l];
            p.insert(&format!("layer{l}.kernel"), he_init(rng, &[cout, cin, 3, 3]));
            p.insert(&format!("layer{l}.bias"), Arr::zeros(IxDyn(&[cout])));
            p.insert(
                &format!("layer{l}.affine_w"),
                randn(rng, &[cfg.code_dim, cin], (1.0 / cfg.code_dim as f64).sqrt()),
            );
            p.insert(&format!("layer{l}.affine_b"), Arr::ones(IxDyn(&[cin])));
        }
        let last = *cfg.layer_channels.last().unwrap();
        p.insert("torgb.kernel", he_init(rng, &[3, last, 1, 1]));
        p.insert("torgb.bias", Arr::from_elem(IxDyn(&[3]), 0.5));
        for i in 0..cfg.mapping_layers {
            p.insert(
                &format!("map{i}.w"),
                randn(rng, &[cfg.code_dim, cfg.code_dim], (1.0 / cfg.code_dim as f64).sqrt()),
            );
            p.insert(&format!("map{i}.b"), Arr::zeros(IxDyn(&[cfg.code_dim])));
        }
        Ok(Self {
            cfg,
            params: p,
            w_mean: None,
        })
    }

    /// The learned constant input, broadcast to batch size `b`.
    pub fn constant_input(&self, g: &mut Graph, pn: &ParamNodes, b: usize) -> Id {
        let c = pn.id("constant");
        let c4 = g.reshape(c, &[1, self.cfg.sc_channels, self.cfg.base_size, self.cfg.base_size]);
        let zeros = g.leaf(Arr::zeros(IxDyn(&[
            b,
            self.cfg.sc_channels,
            self.cfg.base_size,
            self.cfg.base_size,
        ])));
        g.add(c4, zeros)
    }

    /// Synthesize from a structure code `[B,d_s,4,4]` and per-layer styles
    /// (`codes[l]` is `[B,d]`).
    pub fn synthesize(
        &self,
        g: &mut Graph,
        pn: &ParamNodes,
        sc: Id,
        codes: &[Id],
    ) -> Result<SynthesisTrace> {
        if codes.len() != self.cfg.num_layers() {
            return Err(IferError::Config(format!(
                "synthesize needs {} latent codes, got {}",
                self.cfg.num_layers(),
                codes.len()
            )));
        }
        {
            let v = g.value(sc);
            let want = [self.cfg.sc_channels, self.cfg.base_size, self.cfg.base_size];
            if v.ndim() != 4 || v.shape()[1..] != want {
                return Err(IferError::Shape(format!(
                    "structure code must be [B,{},{},{}], got {:?}",
                    want[0],
                    want[1],
                    want[2],
                    v.shape()
                )));
            }
        }
        let mut x = sc;
        let mut features = Vec::new();
        for l in 0..self.cfg.num_layers() {
            if self.cfg.upsample_before(l) {
                x = g.upsample2(x);
            }
            let aw = pn.id(&format!("layer{l}.affine_w"));
            let ab = pn.id(&format!("layer{l}.affine_b"));
            let s = g.matmul(codes[l], aw);
            let s = g.add(s, ab);
            let k = pn.id(&format!("layer{l}.kernel"));
            x = modulated_conv(g, x, k, s, true)?;
            let bias = pn.id(&format!("layer{l}.bias"));
            let cout = self.cfg.layer_channels[l];
            let b4 = g.reshape(bias, &[1, cout, 1, 1]);
            x = g.add(x, b4);
            x = g.leaky_relu(x, 0.2);
            if l % 2 == 1 {
                let res = self.cfg.layer_resolution(l);
                if res <= self.cfg.base_size * 4 {
                    features.push((res, x));
                }
            }
        }
        let tw = pn.id("torgb.kernel");
        let tb = pn.id("torgb.bias");
        let rgb = g.conv2d(x, tw, 1, 0);
        let tb4 = g.reshape(tb, &[1, 3, 1, 1]);
        let rgb = g.add(rgb, tb4);
        let image = g.clamp(rgb, 0.0, 1.0);
        Ok(SynthesisTrace { image, features })
    }

    /// Mapping network z -> w, `[B,d] -> [B,d]`.
    pub fn map_latent(&self, g: &mut Graph, pn: &ParamNodes, z: Id) -> Id {
        let mut h = z;
        for i in 0..self.cfg.mapping_layers {
            let w = pn.id(&format!("map{i}.w"));
            let b = pn.id(&format!("map{i}.b"));
            h = g.matmul(h, w);
            h = g.add(h, b);
            if i + 1 < self.cfg.mapping_layers {
                h = g.leaky_relu(h, 0.2);
            }
        }
        h
    }

    /// Mean of `m` mapped samples.
    pub fn mean_latent(&self, m: usize, rng: &mut ChaCha8Rng) -> Result<Array1<f64>> {
        if m < 1 {
            return Err(IferError::Validation(format!(
                "mean_latent needs m >= 1, got {m}"
            )));
        }
        let d = self.cfg.code_dim;
        let mut g = Graph::new();
        let pn = self.params.nodes(&mut g);
        let z = g.leaf(randn(rng, &[m, d], 1.0));
        let w = self.map_latent(&mut g, &pn, z);
        let wv = g.value(w);
        let mean = wv.sum_axis(ndarray::Axis(0)) / m as f64;
        Ok(mean.into_dimensionality().unwrap())
    }

    /// Inference helper: synthesize a single image from plain arrays.
    pub fn synthesize_one(&self, sc: &Arr, codes: &LatentCodes) -> Result<(Arr, Vec<(usize, Arr)>)> {
        let mut g = Graph::new();
        let pn = self.params.nodes(&mut g);
        let scb = g.leaf(
            sc.clone()
                .into_shape(IxDyn(&[1, self.cfg.sc_channels, self.cfg.base_size, self.cfg.base_size]))
                .map_err(|_| {
                    IferError::Shape(format!(
                        "structure code shape {:?} incompatible with [{},{},{}]",
                        sc.shape(),
                        self.cfg.sc_channels,
                        self.cfg.base_size,
                        self.cfg.base_size
                    ))
                })?,
        );
        let code_ids: Vec<Id> = (0..codes.num_layers())
            .map(|l| {
                let row = codes.codes.row(l).to_owned();
                g.leaf(row.into_shape(IxDyn(&[1, codes.dim()])).unwrap())
            })
            .collect();
        let trace = self.synthesize(&mut g, &pn, scb, &code_ids)?;
        let img = g
            .value(trace.image)
            .clone()
            .into_shape(IxDyn(&[3, self.cfg.img_size, self.cfg.img_size]))
            .unwrap();
        let feats = trace
            .features
            .iter()
            .map(|&(r, id)| (r, g.value(id).clone()))
            .collect();
        Ok((img, feats))
    }

    /// Sample latent codes by mapping a fresh z (same w for every layer).
    pub fn sample_codes(&self, rng: &mut ChaCha8Rng) -> LatentCodes {
        let d = self.cfg.code_dim;
        let mut g = Graph::new();
        let pn = self.params.nodes(&mut g);
        let z = g.leaf(randn(rng, &[1, d], 1.0));
        let w = self.map_latent(&mut g, &pn, z);
        let wv = g.value(w).clone().into_shape(IxDyn(&[d])).unwrap();
        let mut codes = Array2::zeros((self.cfg.num_layers(), d));
        for l in 0..self.cfg.num_layers() {
            for i in 0..d {
                codes[[l, i]] = wv[[i]];
            }
        }
        LatentCodes {
            codes,
            provenance: Provenance::Sampled,
        }
    }

    pub fn constant_as_sc(&self) -> Arr {
        self.params.get("constant").clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Axis;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn ones_style_no_demod_is_plain_conv() {
        let mut r = rng(0);
        let x = randn(&mut r, &[2, 3, 5, 5], 1.0);
        let k = randn(&mut r, &[4, 3, 3, 3], 1.0);
        let mut g = Graph::new();
        let xi = g.leaf(x);
        let ki = g.leaf(k);
        let style = g.leaf(Arr::ones(IxDyn(&[2, 3])));
        let y = modulated_conv(&mut g, xi, ki, style, false).unwrap();
        let plain = g.conv2d(xi, ki, 1, 1);
        let diff = (g.value(y) - g.value(plain)).mapv(f64::abs);
        assert!(diff.iter().all(|&v| v < 1e-12));
    }

    #[test]
    fn demodulation_absorbs_positive_style_scaling() {
        let mut r = rng(1);
        let x = randn(&mut r, &[2, 6, 8, 8], 1.0);
        let k = randn(&mut r, &[5, 6, 3, 3], 1.0);
        let s = randn(&mut r, &[2, 6], 1.0);
        let c = 3.7;
        let mut g = Graph::new();
        let xi = g.leaf(x);
        let ki = g.leaf(k);
        let si = g.leaf(s.clone());
        let y1 = modulated_conv(&mut g, xi, ki, si, true).unwrap();
        let ssc = g.leaf(s.mapv(|v| c * v));
        let y2 = modulated_conv(&mut g, xi, ki, ssc, true).unwrap();
        // scaling the style scales the input path by c and the demod
        // coefficient by 1/c, so outputs agree up to eps
        let diff = (g.value(y1) - &(g.value(y2).mapv(|v| v * c))).mapv(f64::abs);
        // y2 = conv(x * c s) * d(c s) = c * conv(x s) / (c sqrt(...)) = y1
        let direct = (g.value(y1) - g.value(y2)).mapv(f64::abs);
        let _ = diff;
        let m = direct.iter().cloned().fold(0.0f64, f64::max);
        assert!(m < 1e-5, "max abs diff {m}");
    }

    #[test]
    fn demodulated_output_std_near_unity() {
        let mut r = rng(2);
        let mut vals: Vec<Vec<f64>> = vec![Vec::new(); 4];
        for _ in 0..40 {
            let x = randn(&mut r, &[1, 8, 16, 16], 1.0);
            let k = randn(&mut r, &[4, 8, 3, 3], 1.0);
            let s = randn(&mut r, &[1, 8], 1.0);
            let mut g = Graph::new();
            let xi = g.leaf(x);
            let ki = g.leaf(k);
            let si = g.leaf(s);
            let y = modulated_conv(&mut g, xi, ki, si, true).unwrap();
            let yv = g.value(y);
            for c in 0..4 {
                vals[c].extend(yv.index_axis(Axis(1), c).iter().cloned());
            }
        }
        for c in 0..4 {
            let n = vals[c].len() as f64;
            assert!(n >= 1e4, "need >= 1e4 samples per channel, got {n}");
            let mean = vals[c].iter().sum::<f64>() / n;
            let var = vals[c].iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let std = var.sqrt();
            assert!((0.7..=1.3).contains(&std), "channel {c} std {std}");
        }
    }

    #[test]
    fn modulated_conv_shape_mismatch_errors() {
        let mut r = rng(3);
        let mut g = Graph::new();
        let x = g.leaf(randn(&mut r, &[1, 3, 4, 4], 1.0));
        let k = g.leaf(randn(&mut r, &[2, 5, 3, 3], 1.0));
        let s = g.leaf(randn(&mut r, &[1, 3], 1.0));
        assert!(matches!(
            modulated_conv(&mut g, x, k, s, true),
            Err(IferError::Shape(_))
        ));
    }

    #[test]
    fn synthesize_is_deterministic_and_finite_on_zero_inputs() {
        let mut r = rng(4);
        let gen = Generator::init(GeneratorConfig::micro(), &mut r).unwrap();
        let cfg = &gen.cfg;
        let sc = Arr::zeros(IxDyn(&[cfg.sc_channels, 4, 4]));
        let codes = LatentCodes {
            codes: Array2::zeros((cfg.num_layers(), cfg.code_dim)),
            provenance: Provenance::Sampled,
        };
        let (img1, feats) = gen.synthesize_one(&sc, &codes).unwrap();
        let (img2, _) = gen.synthesize_one(&sc, &codes).unwrap();
        assert_eq!(img1, img2);
        assert!(img1.iter().all(|v| v.is_finite()));
        assert_eq!(feats.len(), 2); // 4 and 8 for the micro config
        assert_eq!(feats[0].0, 4);
        assert_eq!(feats[1].0, 8);
    }

    #[test]
    fn wrong_code_count_is_config_error() {
        let mut r = rng(5);
        let gen = Generator::init(GeneratorConfig::micro(), &mut r).unwrap();
        let sc = Arr::zeros(IxDyn(&[gen.cfg.sc_channels, 4, 4]));
        let codes = LatentCodes {
            codes: Array2::zeros((2, gen.cfg.code_dim)),
            provenance: Provenance::Sampled,
        };
        assert!(matches!(
            gen.synthesize_one(&sc, &codes),
            Err(IferError::Config(_))
        ));
    }

    #[test]
    fn structure_code_replaces_constant() {
        let mut r = rng(6);
        let gen = Generator::init(GeneratorConfig::micro(), &mut r).unwrap();
        let codes = gen.sample_codes(&mut r);
        let (img_const, _) = gen.synthesize_one(&gen.constant_as_sc(), &codes).unwrap();
        let sc = randn(&mut r, &[gen.cfg.sc_channels, 4, 4], 1.0);
        let (img_sc, _) = gen.synthesize_one(&sc, &codes).unwrap();
        let mse = (&img_const - &img_sc).mapv(|v| v * v).mean().unwrap();
        assert!(mse > 0.0);
    }

    #[test]
    fn mean_latent_basics() {
        let mut r = rng(7);
        let gen = Generator::init(GeneratorConfig::micro(), &mut r).unwrap();
        assert!(gen.mean_latent(0, &mut r).is_err());
        let mut r1 = rng(8);
        let m1 = gen.mean_latent(1, &mut r1).unwrap();
        // m=1 equals the single mapped sample
        let mut r2 = rng(8);
        let d = gen.cfg.code_dim;
        let mut g = Graph::new();
        let pn = gen.params.nodes(&mut g);
        let z = g.leaf(randn(&mut r2, &[1, d], 1.0));
        let w = gen.map_latent(&mut g, &pn, z);
        let wv = g.value(w);
        for i in 0..d {
            assert!((m1[i] - wv[[0, i]]).abs() < 1e-12);
        }
        // fixed seed reproducible
        let a = gen.mean_latent(50, &mut rng(9)).unwrap();
        let b = gen.mean_latent(50, &mut rng(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mean_latent_large_sample_oracle() {
        let mut r = rng(10);
        let mut cfg = GeneratorConfig::micro();
        cfg.code_dim = 8;
        let gen = Generator::init(cfg, &mut r).unwrap();
        let m = 10_000usize;
        let w_small = gen.mean_latent(m, &mut rng(11)).unwrap();
        let big = 1_000_000usize;
        // oracle mean and per-coordinate sigma from a much larger sample
        let mut g = Graph::new();
        let pn = gen.params.nodes(&mut g);
        let mut r_big = rng(12);
        let mut sum = Array1::<f64>::zeros(8);
        let mut sumsq = Array1::<f64>::zeros(8);
        let chunk = 20_000;
        for _ in 0..big / chunk {
            let z = g.leaf(randn(&mut r_big, &[chunk, 8], 1.0));
            let w = gen.map_latent(&mut g, &pn, z);
            let wv = g.value(w);
            sum += &wv.sum_axis(Axis(0));
            sumsq += &wv.mapv(|v| v * v).sum_axis(Axis(0));
        }
        for i in 0..8 {
            let mean = sum[i] / big as f64;
            let var = sumsq[i] / big as f64 - mean * mean;
            let tol = 3.0 * var.sqrt() / (m as f64).sqrt();
            assert!(
                (w_small[i] - mean).abs() < tol,
                "coord {i}: {} vs oracle {mean} (tol {tol})",
                w_small[i]
            );
        }
    }

    #[test]
    fn style_mix_contracts() {
        let mut r = rng(13);
        let gen = Generator::init(GeneratorConfig::micro(), &mut r).unwrap();
        let a = gen.sample_codes(&mut r);
        let b = gen.sample_codes(&mut r);
        let m0 = style_mix(&a, &b, 0).unwrap();
        assert_eq!(m0.codes, b.codes);
        let mn = style_mix(&a, &b, gen.cfg.num_layers()).unwrap();
        assert_eq!(mn.codes, a.codes);
        assert_eq!(mn.provenance, Provenance::Mixed);
        assert!(style_mix(&a, &b, gen.cfg.num_layers() + 1).is_err());

        let mid = style_mix(&a, &b, 2).unwrap();
        let sc = gen.constant_as_sc();
        let (ia, _) = gen.synthesize_one(&sc, &a).unwrap();
        let (ib, _) = gen.synthesize_one(&sc, &b).unwrap();
        let (im, _) = gen.synthesize_one(&sc, &mid).unwrap();
        let mse_a = (&im - &ia).mapv(|v| v * v).mean().unwrap();
        let mse_b = (&im - &ib).mapv(|v| v * v).mean().unwrap();
        assert!(mse_a > 0.0 && mse_b > 0.0);
    }

    #[test]
    fn synthesis_gradients_match_finite_differences() {
        let mut r = rng(14);
        let gen = Generator::init(GeneratorConfig::micro(), &mut r).unwrap();
        let cfg = gen.cfg.clone();
        let n_layers = cfg.num_layers();
        let sc0 = randn(&mut r, &[1, cfg.sc_channels, 4, 4], 0.5);
        let codes0: Vec<Arr> = (0..n_layers)
            .map(|_| randn(&mut r, &[1, cfg.code_dim], 0.5))
            .collect();
        let proj = randn(&mut r, &[1, 3, cfg.img_size, cfg.img_size], 1.0);

        let eval = |sc: &Arr, codes: &[Arr], kern_delta: Option<(usize, f64)>| -> (f64, Graph, Vec<Id>, Id, ParamNodes) {
            let mut params = gen.params.clone();
            if let Some((flat, d)) = kern_delta {
                let k = params.0.get_mut("layer0.kernel").unwrap();
                *k.iter_mut().nth(flat).unwrap() += d;
            }
            let mut g = Graph::new();
            let pn = params.nodes(&mut g);
            let sci = g.leaf(sc.clone());
            let cids: Vec<Id> = codes.iter().map(|c| g.leaf(c.clone())).collect();
            let tr = gen.synthesize(&mut g, &pn, sci, &cids).unwrap();
            let pj = g.leaf(proj.clone());
            let prod = g.mul(tr.image, pj);
            let loss = g.sum_all(prod);
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
        // structure code, a few entries
        let gsc = grads[sci.0].as_ref().unwrap();
        for flat in [0usize, 7, 33] {
            let mut p = sc0.clone();
            *p.iter_mut().nth(flat).unwrap() += eps;
            let up = eval(&p, &codes0, None).0;
            let mut m = sc0.clone();
            *m.iter_mut().nth(flat).unwrap() -= eps;
            let dn = eval(&m, &codes0, None).0;
            check(*gsc.iter().nth(flat).unwrap(), (up - dn) / (2.0 * eps), "sc");
        }
        // one code vector
        let gl = grads[cids[1].0].as_ref().unwrap();
        for flat in [0usize, 3] {
            let mut cp = codes0.clone();
            *cp[1].iter_mut().nth(flat).unwrap() += eps;
            let up = eval(&sc0, &cp, None).0;
            let mut cm = codes0.clone();
            *cm[1].iter_mut().nth(flat).unwrap() -= eps;
            let dn = eval(&sc0, &cm, None).0;
            check(*gl.iter().nth(flat).unwrap(), (up - dn) / (2.0 * eps), "code");
        }
        // a kernel
        let gk = grads[pn.id("layer0.kernel").0].as_ref().unwrap();
        for flat in [0usize, 11] {
            let up = eval(&sc0, &codes0, Some((flat, eps))).0;
            let dn = eval(&sc0, &codes0, Some((flat, -eps))).0;
            check(*gk.iter().nth(flat).unwrap(), (up - dn) / (2.0 * eps), "kernel");
        }
    }
}
