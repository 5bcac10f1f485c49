//! PNG I/O for `[3,H,W]` images in [0,1], plus side-by-side grids and
//! attention overlays for the visualization commands.

use std::path::Path;

use ndarray::IxDyn;

use crate::error::{IferError, Result};
use crate::tape::Arr;

fn check_chw(img: &Arr) -> Result<(usize, usize)> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(IferError::Shape(format!(
            "image must be [3,H,W], got {s:?}"
        )));
    }
    Ok((s[1], s[2]))
}

pub fn save_png(path: &Path, img: &Arr) -> Result<()> {
    let (h, w) = check_chw(img)?;
    let mut buf = Vec::with_capacity(h * w * 3);
    for r in 0..h {
        for c in 0..w {
            for ch in 0..3 {
                let v = img[[ch, r, c]].clamp(0.0, 1.0);
                buf.push((v * 255.0).round() as u8);
            }
        }
    }
    let im = image::RgbImage::from_raw(w as u32, h as u32, buf)
        .expect("buffer sized to dimensions");
    im.save(path)?;
    Ok(())
}

pub fn load_png(path: &Path) -> Result<Arr> {
    let im = image::open(path)?.to_rgb8();
    let (w, h) = (im.width() as usize, im.height() as usize);
    let mut out = Arr::zeros(IxDyn(&[3, h, w]));
    for (x, y, p) in im.enumerate_pixels() {
        for ch in 0..3 {
            out[[ch, y as usize, x as usize]] = p.0[ch] as f64 / 255.0;
        }
    }
    Ok(out)
}

/// Concatenate equally sized panels left to right into one `[3,H,n*W]` image.
pub fn grid(panels: &[Arr]) -> Result<Arr> {
    if panels.is_empty() {
        return Err(IferError::Validation("grid needs >= 1 panel".into()));
    }
    let (h, w) = check_chw(&panels[0])?;
    for p in panels {
        if check_chw(p)? != (h, w) {
            return Err(IferError::Shape(format!(
                "grid panels disagree: [3,{h},{w}] vs {:?}",
                p.shape()
            )));
        }
    }
    let mut out = Arr::zeros(IxDyn(&[3, h, w * panels.len()]));
    for (i, p) in panels.iter().enumerate() {
        for ch in 0..3 {
            for r in 0..h {
                for c in 0..w {
                    out[[ch, r, i * w + c]] = p[[ch, r, c]];
                }
            }
        }
    }
    Ok(out)
}

/// Blend a `[H,W]` attention map in [0,1] over the image as a red-blue heat
/// tint; output stays a valid image.
pub fn overlay_attention(img: &Arr, attn: &Arr) -> Result<Arr> {
    let (h, w) = check_chw(img)?;
    if attn.shape() != [h, w] {
        return Err(IferError::Shape(format!(
            "attention map {:?} does not match image [{h},{w}]",
            attn.shape()
        )));
    }
    let mut out = Arr::zeros(IxDyn(&[3, h, w]));
    let alpha = 0.45;
    for r in 0..h {
        for c in 0..w {
            let a = attn[[r, c]].clamp(0.0, 1.0);
            let heat = [a, 0.0, 1.0 - a];
            for ch in 0..3 {
                let v = (1.0 - alpha) * img[[ch, r, c]].clamp(0.0, 1.0) + alpha * heat[ch];
                out[[ch, r, c]] = v.clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}
