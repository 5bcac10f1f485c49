//! Distribution alignment between encoder and generator feature pyramids.
//!
//! Per layer, every image's feature map is average-pooled to a vector; the
//! batch-pairwise dot products (self-pairs excluded) are softmaxed per row
//! and the encoder and generator distributions are compared with KL(E || G),
//! row-averaged and summed over layers. Generator features are treated as
//! constants, so gradient reaches the encoder side only.

use crate::error::{IferError, Result};
use crate::tape::{Graph, Id};

/// Batch-pairwise similarity distribution of `[B,C,H,W]` features: rows
/// `[B, B-1]`, each a softmax over dot products with the other images.
pub fn layer_distribution(g: &mut Graph, feats: Id) -> Result<Id> {
    let shape = g.value(feats).shape().to_vec();
    if shape.len() != 4 {
        return Err(IferError::Shape(format!(
            "layer_distribution expects [B,C,H,W], got {shape:?}"
        )));
    }
    let b = shape[0];
    if b < 3 {
        return Err(IferError::Validation(format!(
            "layer_distribution needs batch >= 3; B={b} leaves degenerate single-entry rows"
        )));
    }
    let pooled = g.global_avg_pool(feats); // [B,C]
    let pt = g.permute(pooled, &[1, 0]);
    let sim = g.matmul(pooled, pt); // [B,B]
    // drop the diagonal: per row keep columns != row index
    let mut rows = Vec::with_capacity(b);
    for a in 0..b {
        let row = g.slice_axis(sim, 0, a, 1); // [1,B]
        let mut parts = Vec::new();
        if a > 0 {
            parts.push(g.slice_axis(row, 1, 0, a));
        }
        if a + 1 < b {
            parts.push(g.slice_axis(row, 1, a + 1, b - a - 1));
        }
        let r = if parts.len() == 1 {
            parts[0]
        } else {
            g.concat(&parts, 1)
        };
        rows.push(r);
    }
    let m = g.concat(&rows, 0); // [B, B-1]
    Ok(g.softmax_last(m))
}

/// Row-averaged KL(E || G) of two `[B, B-1]` distribution matrices,
/// accumulated order-independently.
pub fn kl_rows(g: &mut Graph, e_dist: Id, g_dist: Id) -> Id {
    let b = g.value(e_dist).shape()[0];
    let ln_e = g.ln(e_dist);
    let ln_g = g.ln(g_dist);
    let diff = g.sub(ln_e, ln_g);
    let contrib = g.mul(e_dist, diff);
    let total = g.sum_all_sorted(contrib);
    g.scale(total, 1.0 / b as f64)
}

/// Eq.-style alignment loss: sum over paired layers of row-averaged
/// KL(E_dis || G_dis). Pyramids are (resolution, feature id) lists; layers
/// are paired by position and must agree on resolution.
pub fn alignment_loss(
    g: &mut Graph,
    e_pyr: &[(usize, Id)],
    g_pyr: &[(usize, Id)],
) -> Result<Id> {
    if e_pyr.len() != g_pyr.len() {
        return Err(IferError::Config(format!(
            "pyramids have {} and {} layers",
            e_pyr.len(),
            g_pyr.len()
        )));
    }
    let mut total = None;
    for (i, (&(er, ef), &(gr, gf))) in e_pyr.iter().zip(g_pyr.iter()).enumerate() {
        if er != gr {
            return Err(IferError::Config(format!(
                "layer {i} pairs encoder resolution {er} with generator resolution {gr}"
            )));
        }
        let gf_stop = g.detach(gf);
        let ed = layer_distribution(g, ef)?;
        let gd = layer_distribution(g, gf_stop)?;
        let kl = kl_rows(g, ed, gd);
        total = Some(match total {
            None => kl,
            Some(t) => g.add(t, kl),
        });
    }
    total.ok_or_else(|| IferError::Config("alignment over empty pyramids".into()))
}
