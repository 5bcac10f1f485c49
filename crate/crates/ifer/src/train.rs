//! Training and evaluation orchestration: toy-GAN pretraining, inversion
//! training/fine-tuning, expression-head training, metric reports and the
//! image-producing commands behind the CLI.

use ndarray::{Array1, Array2, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::align::alignment_loss;
use crate::checkpoint::{Checkpoint, RngState};
use crate::config::RunConfig;
use crate::critic::{self, AugPolicy, Critic, CriticConfig};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{IferError, Result};
use crate::faces::{ExpressionLabel, Sample, NUM_CLASSES};
use crate::fer::{fer_loss, predictions, FerConfig, FerHead, FusionMode};
use crate::generator::{Generator, GeneratorConfig, LatentCodes, Provenance};
use crate::imageio;
use crate::losses::{
    compose, consistency_loss, latent_reg, perceptual_distance, pixel_loss, LossBreakdown,
    LossTerms, Trunk,
};
use crate::metrics;
use crate::optim::Adam;
use crate::params::{grads_by_name, he_init, randn, ParamNodes, Params};
use crate::tape::{Arr, Graph, Id};

pub const STAGE_PRETRAIN: &str = "pretrain";
pub const STAGE_INVERSION: &str = "inversion";
pub const STAGE_FINETUNE: &str = "finetune";
pub const STAGE_FER: &str = "fer";

/// Architecture record stored in every checkpoint; loads reject mismatches.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Arch {
    pub gen: GeneratorConfig,
    pub enc: EncoderConfig,
    pub critic: CriticConfig,
    pub fer: FerConfig,
}

impl Arch {
    pub fn desk_default() -> Self {
        Self {
            gen: GeneratorConfig::desk_default(),
            enc: EncoderConfig::desk_default(),
            critic: CriticConfig::desk_default(),
            fer: FerConfig::desk_default(),
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("arch serializes")
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        Ok(serde_json::from_value(v.clone())?)
    }
}

fn batch_images(samples: &[Sample], idx: &[usize]) -> Arr {
    let s = samples[0].image.shape()[1];
    let mut out = Arr::zeros(IxDyn(&[idx.len(), 3, s, s]));
    for (bi, &i) in idx.iter().enumerate() {
        for ch in 0..3 {
            for r in 0..s {
                for c in 0..s {
                    out[[bi, ch, r, c]] = samples[i].image[[ch, r, c]];
                }
            }
        }
    }
    out
}

fn sample_indices(rng: &mut ChaCha8Rng, n: usize, b: usize) -> Vec<usize> {
    (0..b).map(|_| rng.gen_range(0..n)).collect()
}

/// Spread `n` encoder codes over `layers` generator layers; layer `l` reads
/// code `l*n/layers`, the identity when counts match.
pub fn expand_codes(codes: &[Id], layers: usize) -> Vec<Id> {
    (0..layers).map(|l| codes[l * codes.len() / layers]).collect()
}

/// Same spreading on a stored `[n,d]` code matrix.
pub fn expand_code_matrix(codes: &Array2<f64>, layers: usize) -> Array2<f64> {
    let n = codes.nrows();
    let mut out = Array2::zeros((layers, codes.ncols()));
    for l in 0..layers {
        out.row_mut(l).assign(&codes.row(l * n / layers));
    }
    out
}

/// Keep the pyramid layers whose resolutions exist on both sides, paired
/// coarse to fine.
pub fn match_pyramids(
    e_pyr: &[(usize, Id)],
    g_pyr: &[(usize, Id)],
) -> (Vec<(usize, Id)>, Vec<(usize, Id)>) {
    let mut e: Vec<(usize, Id)> = e_pyr.to_vec();
    e.sort_by_key(|&(r, _)| r);
    let mut eo = Vec::new();
    let mut go = Vec::new();
    for &(er, ef) in &e {
        if let Some(&(gr, gf)) = g_pyr.iter().find(|&&(gr, _)| gr == er) {
            eo.push((er, ef));
            go.push((gr, gf));
        }
    }
    (eo, go)
}

/// LSGAN patch discriminator for pretraining; shares the trunk layout (and
/// parameter names) with the proxy trunk so its conv weights double as the
/// frozen feature extractor afterwards.
fn disc_init(cfg: &CriticConfig, rng: &mut ChaCha8Rng) -> Params {
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
    p.insert(
        "score.w",
        randn(rng, &[cfg.embed_dim, 1], (1.0 / cfg.embed_dim as f64).sqrt()),
    );
    p.insert("score.b", Arr::zeros(IxDyn(&[1])));
    p
}

fn disc_score(g: &mut Graph, cfg: &CriticConfig, pn: &ParamNodes, img: Id) -> Id {
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
    let hw = pn.id("head.w");
    let hb = pn.id("head.b");
    let e = g.matmul(pooled, hw);
    let e = g.add(e, hb);
    let e = g.leaky_relu(e, 0.2);
    let sw = pn.id("score.w");
    let sb = pn.id("score.b");
    let s = g.matmul(e, sw);
    let s = g.add(s, sb);
    let b = g.value(s).shape()[0];
    g.reshape(s, &[b])
}

fn check_finite(what: &str, iter: usize, v: f64) -> Result<()> {
    if !v.is_finite() {
        return Err(IferError::Divergence(format!(
            "{what} became {v} at iteration {iter}"
        )));
    }
    Ok(())
}

pub struct PretrainOut {
    pub ckpt: Checkpoint,
    pub d_losses: Vec<f64>,
    pub g_losses: Vec<f64>,
}

/// Adversarially pretrain the toy generator against an LSGAN discriminator
/// (targets 1 real / 0 fake), then record the mean mapped latent.
pub fn pretrain_generator(cfg: &RunConfig, arch: &Arch) -> Result<PretrainOut> {
    cfg.validate()?;
    let samples = crate::faces::sample_dataset(cfg.train_size, cfg.data_seed, crate::faces::Split::Train)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut gen = Generator::init(arch.gen.clone(), &mut rng)?;
    let mut disc = disc_init(&arch.critic, &mut rng);
    let mut opt_g = Adam::new(cfg.lr);
    let mut opt_d = Adam::new(cfg.lr);
    let mut d_losses = Vec::new();
    let mut g_losses = Vec::new();
    let b = cfg.batch_size;
    let layers = arch.gen.num_layers();

    for it in 0..cfg.iterations {
        let idx = sample_indices(&mut rng, samples.len(), b);
        let real = batch_images(&samples, &idx);
        let z = randn(&mut rng, &[b, arch.gen.code_dim], 1.0);

        let mut g = Graph::new();
        let gn = gen.params.nodes(&mut g);
        let dn = disc.nodes(&mut g);
        let zi = g.leaf(z);
        let w = gen.map_latent(&mut g, &gn, zi);
        let codes: Vec<Id> = vec![w; layers];
        let sc = gen.constant_input(&mut g, &gn, b);
        let trace = gen.synthesize(&mut g, &gn, sc, &codes)?;
        let fake = trace.image;
        let ri = g.leaf(real);

        // discriminator step: (D(x)-1)^2 + D(G(z))^2, generator detached
        let dr = disc_score(&mut g, &arch.critic, &dn, ri);
        let fake_stop = g.detach(fake);
        let df = disc_score(&mut g, &arch.critic, &dn, fake_stop);
        let r1 = g.add_scalar(dr, -1.0);
        let r2 = g.square(r1);
        let lr_real = g.mean_all(r2);
        let f2 = g.square(df);
        let lr_fake = g.mean_all(f2);
        let l_d = g.add(lr_real, lr_fake);
        let ldv = g.scalar_value(l_d);
        check_finite("discriminator loss", it, ldv)?;
        let gd = g.backward(l_d);
        let gdn = grads_by_name(&disc, &dn, &gd);
        opt_d.step(&mut disc, &gdn);

        // generator step against the pre-step discriminator snapshot
        let dg = disc_score(&mut g, &arch.critic, &dn, fake);
        let g1 = g.add_scalar(dg, -1.0);
        let g2 = g.square(g1);
        let l_g = g.mean_all(g2);
        let lgv = g.scalar_value(l_g);
        check_finite("generator loss", it, lgv)?;
        let gg = g.backward(l_g);
        let ggn = grads_by_name(&gen.params, &gn, &gg);
        opt_g.step(&mut gen.params, &ggn);

        d_losses.push(ldv);
        g_losses.push(lgv);
    }

    let w_mean = gen.mean_latent(256, &mut rng)?;
    let mut ckpt = Checkpoint::new(
        STAGE_PRETRAIN,
        cfg.iterations as u64,
        RngState::new(cfg.seed, rng.get_word_pos()),
        arch.to_json(),
    );
    ckpt.insert_params("gen", &gen.params);
    ckpt.insert_params("disc", &disc);
    ckpt.insert_array("w_mean", w_mean.into_dyn());
    Ok(PretrainOut {
        ckpt,
        d_losses,
        g_losses,
    })
}

pub fn generator_from_ckpt(ck: &Checkpoint, arch: &Arch) -> Result<Generator> {
    let params = ck.extract_params("gen")?;
    let wm = ck.array("w_mean")?;
    let w_mean: Array1<f64> = wm
        .clone()
        .into_dimensionality()
        .map_err(|_| IferError::Checkpoint("w_mean must be rank 1".into()))?;
    Ok(Generator {
        cfg: arch.gen.clone(),
        params,
        w_mean: Some(w_mean),
    })
}

pub fn trunk_from_ckpt(ck: &Checkpoint, arch: &Arch) -> Result<Trunk> {
    Ok(Trunk {
        cfg: arch.critic.clone(),
        params: ck.extract_params("disc")?,
    })
}

pub fn encoder_from_ckpt(ck: &Checkpoint, arch: &Arch) -> Result<Encoder> {
    Ok(Encoder {
        cfg: arch.enc.clone(),
        params: ck.extract_params("enc")?,
    })
}

pub struct InversionOut {
    pub ckpt: Checkpoint,
    pub breakdowns: Vec<LossBreakdown>,
    pub critic_losses: Vec<f64>,
}

fn run_inversion(
    cfg: &RunConfig,
    arch: &Arch,
    gen: &Generator,
    mut encoder: Encoder,
    mut crit: Critic,
    trunk: &Trunk,
    samples: &[Sample],
    stage: &str,
) -> Result<InversionOut> {
    cfg.validate()?;
    let w_mean = gen
        .w_mean
        .clone()
        .ok_or_else(|| IferError::Checkpoint("generator has no stored mean latent".into()))?;
    let gen_checksum = gen.params.checksum();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x1A7E);
    let mut opt_e = Adam::new(cfg.lr);
    let mut opt_c = Adam::new(cfg.lr);
    let layers = arch.gen.num_layers();
    let mut breakdowns = Vec::new();
    let mut critic_losses = Vec::new();

    for it in 0..cfg.iterations {
        let idx = sample_indices(&mut rng, samples.len(), cfg.batch_size);
        let x = batch_images(samples, &idx);

        let mut g = Graph::new();
        let en = encoder.params.nodes(&mut g);
        let gn = gen.params.frozen_nodes(&mut g);
        let tn = trunk.frozen_nodes(&mut g);
        let qn = crit.theta_q.nodes(&mut g);
        let xi = g.leaf(x);
        let out = encoder.encode(&mut g, &en, xi)?;
        let codes = expand_codes(&out.codes, layers);
        let trace = gen.synthesize(&mut g, &gn, out.sc, &codes)?;
        let y = trace.image;

        // critic step on detached inversions
        let lc = critic::critic_loss(&crit, &mut g, &qn, xi, y, it as u64)?;
        let lcv = g.scalar_value(lc);
        check_finite("critic loss", it, lcv)?;
        let gc = g.backward(lc);
        let gcn = grads_by_name(&crit.theta_q, &qn, &gc);
        opt_c.step(&mut crit.theta_q, &gcn);
        critic_losses.push(lcv);

        // encoder step; the adversarial term reads the in-graph critic
        // snapshot (pre-update), whose gradients are simply never applied
        let adversarial = if cfg.weights.adversarial > 0.0 {
            Some(critic::encoder_adv_loss(&crit, &mut g, &qn, xi, y, it as u64)?)
        } else {
            None
        };
        let alignment = if cfg.weights.alignment > 0.0 {
            let (e_pyr, g_pyr) = match_pyramids(&out.pyramid, &trace.features);
            if e_pyr.is_empty() {
                return Err(IferError::Config(
                    "alignment enabled but encoder and generator share no pyramid resolution"
                        .into(),
                ));
            }
            Some(alignment_loss(&mut g, &e_pyr, &g_pyr)?)
        } else {
            None
        };
        let terms = LossTerms {
            pixel: pixel_loss(&mut g, y, xi)?,
            perceptual: perceptual_distance(&mut g, trunk, &tn, xi, y)?,
            consistency: consistency_loss(&mut g, trunk, &tn, xi, y)?,
            latent_reg: latent_reg(&mut g, &out.codes, &w_mean)?,
            adversarial,
            alignment,
        };
        let (total, bd) = compose(&mut g, &cfg.weights, &terms);
        check_finite("composite loss", it, bd.total)?;
        let ge = g.backward(total);
        let gen_grads = grads_by_name(&encoder.params, &en, &ge);
        opt_e.step(&mut encoder.params, &gen_grads);
        crit.apply_momentum(cfg.momentum)?;
        breakdowns.push(bd);
    }

    if gen.params.checksum() != gen_checksum {
        return Err(IferError::Validation(
            "frozen-generator contract violated: generator parameters changed".into(),
        ));
    }

    let mut ckpt = Checkpoint::new(
        stage,
        cfg.iterations as u64,
        RngState::new(cfg.seed, rng.get_word_pos()),
        arch.to_json(),
    );
    ckpt.insert_params("gen", &gen.params);
    ckpt.insert_params("disc", &trunk.params);
    ckpt.insert_params("enc", &encoder.params);
    ckpt.insert_params("criticq", &crit.theta_q);
    ckpt.insert_params("critick", &crit.theta_k);
    ckpt.insert_array("w_mean", w_mean.into_dyn());
    Ok(InversionOut {
        ckpt,
        breakdowns,
        critic_losses,
    })
}

/// Train a fresh encoder against the frozen pretrained generator.
pub fn train_inversion(cfg: &RunConfig, gan: &Checkpoint) -> Result<InversionOut> {
    gan.ensure_stage(STAGE_PRETRAIN)?;
    let arch = Arch::from_json(&gan.arch)?;
    let gen = generator_from_ckpt(gan, &arch)?;
    let trunk = trunk_from_ckpt(gan, &arch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let encoder = Encoder::init(arch.enc.clone(), &mut rng)?;
    let crit = Critic::init(arch.critic.clone(), AugPolicy::desk_default(), &mut rng);
    let samples = crate::faces::sample_dataset(cfg.train_size, cfg.data_seed, crate::faces::Split::Train)?;
    run_inversion(cfg, &arch, &gen, encoder, crit, &trunk, &samples, STAGE_INVERSION)
}

/// Continue inversion training on the FER training split.
pub fn finetune_inversion(cfg: &RunConfig, inv: &Checkpoint) -> Result<InversionOut> {
    if inv.stage != STAGE_INVERSION && inv.stage != STAGE_FINETUNE {
        return Err(IferError::Checkpoint(format!(
            "finetune needs an inversion checkpoint, got stage '{}'",
            inv.stage
        )));
    }
    let arch = Arch::from_json(&inv.arch)?;
    let gen = generator_from_ckpt(inv, &arch)?;
    let trunk = trunk_from_ckpt(inv, &arch)?;
    let encoder = encoder_from_ckpt(inv, &arch)?;
    let crit = Critic {
        cfg: arch.critic.clone(),
        theta_q: inv.extract_params("criticq")?,
        theta_k: inv.extract_params("critick")?,
        policy: AugPolicy::desk_default(),
    };
    // the FER split reuses the val lane so fine-tuning sees fresh identities
    let samples = crate::faces::sample_dataset(cfg.train_size, cfg.data_seed, crate::faces::Split::Val)?;
    run_inversion(cfg, &arch, &gen, encoder, crit, &trunk, &samples, STAGE_FINETUNE)
}

pub struct FerOut {
    pub ckpt: Checkpoint,
    pub report: serde_json::Value,
    pub accuracy: f64,
}

fn confusion_and_accuracy(
    truth: &[usize],
    pred: &[usize],
) -> (Vec<Vec<usize>>, f64, serde_json::Value) {
    let mut conf = vec![vec![0usize; NUM_CLASSES]; NUM_CLASSES];
    let mut hits = 0usize;
    for (&t, &p) in truth.iter().zip(pred) {
        conf[t][p] += 1;
        if t == p {
            hits += 1;
        }
    }
    let acc = hits as f64 / truth.len().max(1) as f64;
    let mut per_class = serde_json::Map::new();
    for k in 0..NUM_CLASSES {
        let support: usize = conf[k].iter().sum();
        let tp = conf[k][k];
        let predicted: usize = (0..NUM_CLASSES).map(|t| conf[t][k]).sum();
        let recall = if support > 0 { tp as f64 / support as f64 } else { 0.0 };
        let precision = if predicted > 0 { tp as f64 / predicted as f64 } else { 0.0 };
        let name = ExpressionLabel::from_index(k).expect("class index").name();
        per_class.insert(
            name.to_string(),
            serde_json::json!({
                "support": support,
                "precision": precision,
                "recall": recall,
            }),
        );
    }
    (conf, acc, serde_json::Value::Object(per_class))
}

/// Train the fusion head (and encoder) for expression recognition.
/// `pretrained` supplies the inversion-trained encoder; `None` trains from
/// scratch for the ablation.
pub fn train_fer(
    cfg: &RunConfig,
    arch: &Arch,
    pretrained: Option<&Checkpoint>,
    mode: FusionMode,
) -> Result<FerOut> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xFE12);
    let (mut encoder, passthrough) = match pretrained {
        Some(ck) => {
            let ck_arch = Arch::from_json(&ck.arch)?;
            if &ck_arch != arch {
                return Err(IferError::Checkpoint(
                    "architecture mismatch between checkpoint and requested arch".into(),
                ));
            }
            (encoder_from_ckpt(ck, arch)?, Some(ck))
        }
        None => (Encoder::init(arch.enc.clone(), &mut rng)?, None),
    };
    let mut head = FerHead::init(arch.fer.clone(), &mut rng);
    let gen_checksum_before = passthrough
        .map(|ck| ck.extract_params("gen").map(|p| p.checksum()))
        .transpose()?;

    let train = crate::faces::sample_dataset(cfg.train_size, cfg.data_seed, crate::faces::Split::Train)?;
    let test = crate::faces::sample_dataset(cfg.test_size, cfg.data_seed, crate::faces::Split::Test)?;
    // class-imbalance warning contract: the round-robin sampler is balanced,
    // but warn if rendering produced a skewed label set anyway
    let mut counts = [0usize; NUM_CLASSES];
    for s in &train {
        counts[s.label.index()] += 1;
    }
    let (mn, mx) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
    if *mn * 2 < *mx {
        eprintln!("warning: class-imbalanced training manifest: counts {counts:?}");
    }

    let mut opt = Adam::new(cfg.lr).with_weight_decay(1e-2);
    for it in 0..cfg.iterations {
        let idx = sample_indices(&mut rng, train.len(), cfg.batch_size);
        let x = batch_images(&train, &idx);
        let labels: Vec<usize> = idx.iter().map(|&i| train[i].label.index()).collect();
        let mut g = Graph::new();
        let en = encoder.params.nodes(&mut g);
        let hn = head.params.nodes(&mut g);
        let xi = g.leaf(x);
        let out = encoder.encode(&mut g, &en, xi)?;
        let logits = head.logits(&mut g, &hn, out.sc, &out.codes, mode)?;
        let loss = fer_loss(&mut g, logits, &labels)?;
        let lv = g.scalar_value(loss);
        check_finite("fer loss", it, lv)?;
        let grads = g.backward(loss);
        let mut all = grads_by_name(&encoder.params, &en, &grads);
        all.extend(grads_by_name(&head.params, &hn, &grads));
        let mut joint = Params::new();
        joint.0.extend(encoder.params.0.clone());
        joint.0.extend(head.params.0.clone());
        opt.step(&mut joint, &all);
        for (name, v) in joint.0 {
            if head.params.0.contains_key(&name) {
                head.params.0.insert(name, v);
            } else {
                encoder.params.0.insert(name, v);
            }
        }
    }

    // evaluation on the held-out test split
    let mut truth = Vec::new();
    let mut pred = Vec::new();
    for chunk in test.chunks(16) {
        let idx: Vec<usize> = (0..chunk.len()).collect();
        let x = batch_images(chunk, &idx);
        let mut g = Graph::new();
        let en = encoder.params.frozen_nodes(&mut g);
        let hn = head.params.frozen_nodes(&mut g);
        let xi = g.leaf(x);
        let out = encoder.encode(&mut g, &en, xi)?;
        let logits = head.logits(&mut g, &hn, out.sc, &out.codes, mode)?;
        pred.extend(predictions(&g, logits));
        truth.extend(chunk.iter().map(|s| s.label.index()));
    }
    let (conf, acc, per_class) = confusion_and_accuracy(&truth, &pred);

    if let (Some(before), Some(ck)) = (gen_checksum_before.as_ref(), passthrough) {
        let after = ck.extract_params("gen")?.checksum();
        if &after != before {
            return Err(IferError::Validation(
                "frozen-generator contract violated during FER training".into(),
            ));
        }
    }

    let report = serde_json::json!({
        "stage": STAGE_FER,
        "mode": mode.name(),
        "from_scratch": pretrained.is_none(),
        "iterations": cfg.iterations,
        "seed": cfg.seed,
        "test_size": test.len(),
        "accuracy": acc,
        "per_class": per_class,
        "confusion": conf,
        "proxy_metrics": false,
    });

    let mut ckpt = Checkpoint::new(
        STAGE_FER,
        cfg.iterations as u64,
        RngState::new(cfg.seed, rng.get_word_pos()),
        arch.to_json(),
    );
    if let Some(ck) = passthrough {
        ckpt.insert_params("gen", &ck.extract_params("gen")?);
        ckpt.insert_params("disc", &ck.extract_params("disc")?);
        ckpt.insert_array("w_mean", ck.array("w_mean")?.clone());
    }
    ckpt.insert_params("enc", &encoder.params);
    ckpt.insert_params("fer", &head.params);
    Ok(FerOut {
        ckpt,
        report,
        accuracy: acc,
    })
}

/// Invert one `[3,S,S]` image through a checkpointed encoder + generator.
pub fn invert_image(enc: &Encoder, gen: &Generator, image: &Arr) -> Result<(Arr, LatentCodes, Arr)> {
    let (codes, sc, _) = enc.encode_one(image)?;
    let expanded = LatentCodes {
        codes: expand_code_matrix(&codes.codes, gen.cfg.num_layers()),
        provenance: Provenance::Encoder,
    };
    let (img, _) = gen.synthesize_one(&sc, &expanded)?;
    Ok((img, codes, sc))
}

/// Trunk embeddings of a set of images, `[n, embed]`.
pub fn trunk_embeddings(trunk: &Trunk, images: &[Arr]) -> Result<Array2<f64>> {
    if images.is_empty() {
        return Err(IferError::Validation("no images to embed".into()));
    }
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(images.len());
    for chunk in images.chunks(16) {
        let s = chunk[0].shape()[1];
        let mut batch = Arr::zeros(IxDyn(&[chunk.len(), 3, s, s]));
        for (i, im) in chunk.iter().enumerate() {
            for ch in 0..3 {
                for r in 0..s {
                    for c in 0..s {
                        batch[[i, ch, r, c]] = im[[ch, r, c]];
                    }
                }
            }
        }
        let mut g = Graph::new();
        let tn = trunk.frozen_nodes(&mut g);
        let bi = g.leaf(batch);
        let e = trunk.embed(&mut g, &tn, bi);
        let ev = g.value(e);
        for i in 0..chunk.len() {
            rows.push(ev.index_axis(ndarray::Axis(0), i).iter().cloned().collect());
        }
    }
    let d = rows[0].len();
    let mut out = Array2::zeros((rows.len(), d));
    for (i, r) in rows.iter().enumerate() {
        for (j, &v) in r.iter().enumerate() {
            out[[i, j]] = v;
        }
    }
    Ok(out)
}

/// Inversion metric report over a dataset; every learned-feature metric is a
/// proxy against the in-repo trunk and flagged as such.
pub fn evaluate_inversion(ck: &Checkpoint, samples: &[Sample]) -> Result<serde_json::Value> {
    if ck.stage == STAGE_PRETRAIN {
        return Err(IferError::Checkpoint(
            "inversion evaluation needs an encoder; checkpoint is stage 'pretrain'".into(),
        ));
    }
    let arch = Arch::from_json(&ck.arch)?;
    let enc = encoder_from_ckpt(ck, &arch)?;
    let gen = generator_from_ckpt(ck, &arch)?;
    let trunk = trunk_from_ckpt(ck, &arch)?;
    let mut mse_sum = 0.0;
    let mut psnr_sum = 0.0;
    let mut ssim_sum = 0.0;
    let mut perc_sum = 0.0;
    let mut sources = Vec::new();
    let mut inversions = Vec::new();
    for s in samples {
        let (inv, _, _) = invert_image(&enc, &gen, &s.image)?;
        mse_sum += metrics::mse(&s.image, &inv)?;
        psnr_sum += metrics::psnr(&s.image, &inv)?;
        ssim_sum += metrics::ssim(&s.image, &inv)?;
        let mut g = Graph::new();
        let tn = trunk.frozen_nodes(&mut g);
        let sz = s.image.shape()[1];
        let a = g.leaf(s.image.clone().into_shape(IxDyn(&[1, 3, sz, sz])).unwrap());
        let b = g.leaf(inv.clone().into_shape(IxDyn(&[1, 3, sz, sz])).unwrap());
        let p = perceptual_distance(&mut g, &trunk, &tn, a, b)?;
        perc_sum += g.scalar_value(p);
        sources.push(s.image.clone());
        inversions.push(inv);
    }
    let n = samples.len() as f64;
    let fid = if samples.len() >= metrics::FID_MIN_SET {
        let ea = trunk_embeddings(&trunk, &sources)?;
        let eb = trunk_embeddings(&trunk, &inversions)?;
        Some(metrics::fid_from_embeddings(&ea, &eb)?)
    } else {
        None
    };
    Ok(serde_json::json!({
        "mode": "inversion",
        "count": samples.len(),
        "mse": mse_sum / n,
        "psnr": psnr_sum / n,
        "ssim": ssim_sum / n,
        "perceptual_proxy": perc_sum / n,
        "fid_proxy": fid,
        "proxy_metrics": true,
    }))
}

/// Write a source/inversion two-panel grid per readable input image.
/// Unreadable files are skipped with a log line; returns the written paths.
pub fn invert_command(
    ck: &Checkpoint,
    inputs: &[std::path::PathBuf],
    out_dir: &std::path::Path,
) -> Result<Vec<std::path::PathBuf>> {
    let arch = Arch::from_json(&ck.arch)?;
    let enc = encoder_from_ckpt(ck, &arch)?;
    let gen = generator_from_ckpt(ck, &arch)?;
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    for path in inputs {
        let img = match imageio::load_png(path) {
            Ok(i) => i,
            Err(e) => {
                eprintln!("skipping {}: {e}", path.display());
                continue;
            }
        };
        let (inv, _, _) = invert_image(&enc, &gen, &img)?;
        let panel = imageio::grid(&[img, inv])?;
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().to_string())
            .unwrap_or_else(|| "image".into());
        let out = out_dir.join(format!("{stem}_inversion.png"));
        imageio::save_png(&out, &panel)?;
        written.push(out);
    }
    Ok(written)
}

/// Style mixing: coarse layers `[0, crossover)` from image A, the rest from
/// image B, synthesized over B's structure code. Emits a 3-panel grid
/// (A, B, mix); crossover 0 therefore reproduces B's solo inversion.
pub fn mix_command(
    ck: &Checkpoint,
    img_a: &std::path::Path,
    img_b: &std::path::Path,
    crossover: usize,
    out_dir: &std::path::Path,
) -> Result<std::path::PathBuf> {
    let arch = Arch::from_json(&ck.arch)?;
    let enc = encoder_from_ckpt(ck, &arch)?;
    let gen = generator_from_ckpt(ck, &arch)?;
    let a = imageio::load_png(img_a)?;
    let b = imageio::load_png(img_b)?;
    let (codes_a, _, _) = enc.encode_one(&a)?;
    let (codes_b, sc_b, _) = enc.encode_one(&b)?;
    let layers = gen.cfg.num_layers();
    let ea = LatentCodes {
        codes: expand_code_matrix(&codes_a.codes, layers),
        provenance: Provenance::Encoder,
    };
    let eb = LatentCodes {
        codes: expand_code_matrix(&codes_b.codes, layers),
        provenance: Provenance::Encoder,
    };
    let mixed = crate::generator::style_mix(&ea, &eb, crossover)?;
    let (img_mix, _) = gen.synthesize_one(&sc_b, &mixed)?;
    std::fs::create_dir_all(out_dir)?;
    let panel = imageio::grid(&[a, b, img_mix])?;
    let out = out_dir.join(format!("mix_{crossover}.png"));
    imageio::save_png(&out, &panel)?;
    Ok(out)
}

/// Attention overlays: per image, a 2-panel grid of the source and the
/// final-stage receive-side attention heatmap blended over it.
pub fn viz_attn_command(
    ck: &Checkpoint,
    inputs: &[std::path::PathBuf],
    out_dir: &std::path::Path,
) -> Result<Vec<std::path::PathBuf>> {
    let arch = Arch::from_json(&ck.arch)?;
    let enc = encoder_from_ckpt(ck, &arch)?;
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    for path in inputs {
        let img = match imageio::load_png(path) {
            Ok(i) => i,
            Err(e) => {
                eprintln!("skipping {}: {e}", path.display());
                continue;
            }
        };
        let heat = enc.attention_map(&img)?;
        let over = imageio::overlay_attention(&img, &heat.into_dyn())?;
        let panel = imageio::grid(&[img, over])?;
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().to_string())
            .unwrap_or_else(|| "image".into());
        let out = out_dir.join(format!("{stem}_attention.png"));
        imageio::save_png(&out, &panel)?;
        written.push(out);
    }
    Ok(written)
}

/// FER metric report for a labeled dataset.
pub fn evaluate_fer(ck: &Checkpoint, samples: &[Sample], mode: FusionMode) -> Result<serde_json::Value> {
    ck.ensure_stage(STAGE_FER)?;
    let arch = Arch::from_json(&ck.arch)?;
    let enc = encoder_from_ckpt(ck, &arch)?;
    let head = FerHead {
        cfg: arch.fer.clone(),
        params: ck.extract_params("fer")?,
    };
    let mut truth = Vec::new();
    let mut pred = Vec::new();
    for chunk in samples.chunks(16) {
        let idx: Vec<usize> = (0..chunk.len()).collect();
        let x = batch_images(chunk, &idx);
        let mut g = Graph::new();
        let en = enc.params.frozen_nodes(&mut g);
        let hn = head.params.frozen_nodes(&mut g);
        let xi = g.leaf(x);
        let out = enc.encode(&mut g, &en, xi)?;
        let logits = head.logits(&mut g, &hn, out.sc, &out.codes, mode)?;
        pred.extend(predictions(&g, logits));
        truth.extend(chunk.iter().map(|s| s.label.index()));
    }
    let (conf, acc, per_class) = confusion_and_accuracy(&truth, &pred);
    Ok(serde_json::json!({
        "mode": "fer",
        "count": samples.len(),
        "accuracy": acc,
        "per_class": per_class,
        "confusion": conf,
        "proxy_metrics": false,
    }))
}
