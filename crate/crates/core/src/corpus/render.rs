//! Rasterize symbol strings into grayscale images with per-sample
//! distortions (rotate, curve, blur, noise).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

use super::{Charset, CorpusError, CorpusSpec, GLYPH_SIDE};
use crate::tensor::Tensor;

/// Render `text` into a (1, H, W) image. Deterministic in
/// (text, charset, spec, sample_seed); glyphs go left to right into
/// fixed-width slots sized for `len_range.1` characters.
///
/// With distortion disabled (or every drawn magnitude zero) the output
/// equals the undistorted glyph paste exactly.
pub fn render_string(
    text: &[usize],
    charset: &Charset,
    spec: &CorpusSpec,
    sample_seed: u64,
) -> Result<Tensor, CorpusError> {
    if text.is_empty() {
        return Err(CorpusError::EmptyText);
    }
    if text.len() > spec.len_range.1 {
        return Err(CorpusError::BadSpec(format!(
            "text length {} exceeds len_range max {}",
            text.len(),
            spec.len_range.1
        )));
    }
    if !charset.is_renderable() {
        return Err(CorpusError::NotRenderable(charset.language_id.clone()));
    }
    for &id in text {
        if id >= charset.n_symbols() {
            return Err(CorpusError::UnknownSymbol(id));
        }
    }

    let (h, w) = spec.image_hw;
    let paste = paste_glyphs(text, charset, spec);

    let d = &spec.distortion;
    if !d.enabled {
        return Ok(paste);
    }
    let mut rng = ChaCha12Rng::seed_from_u64(sample_seed);
    // Fixed draw order: angle, curve amplitude, curve phase, blur sigma.
    let theta_deg: f32 = sample_uniform(&mut rng, d.rotate_deg_max);
    let amp: f32 = sample_uniform_pos(&mut rng, d.curve_amp_px);
    let phase: f32 = rng.gen::<f32>() * std::f32::consts::TAU;
    let sigma: f32 = sample_uniform_pos(&mut rng, d.blur_sigma_max);

    let mut img = if theta_deg == 0.0 && amp == 0.0 {
        paste
    } else {
        warp(&paste, h, w, theta_deg, amp, phase)
    };
    if sigma > 0.0 {
        img = gaussian_blur(&img, h, w, sigma);
    }
    if d.noise_std > 0.0 {
        let normal = Normal::new(0.0f32, d.noise_std).expect("validated std");
        for v in img.data_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    for v in img.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(img)
}

fn sample_uniform(rng: &mut ChaCha12Rng, max: f32) -> f32 {
    if max == 0.0 {
        0.0
    } else {
        (rng.gen::<f32>() * 2.0 - 1.0) * max
    }
}

fn sample_uniform_pos(rng: &mut ChaCha12Rng, max: f32) -> f32 {
    if max == 0.0 {
        0.0
    } else {
        rng.gen::<f32>() * max
    }
}

/// Integer glyph scale and slot geometry for a spec.
pub(crate) fn layout(spec: &CorpusSpec) -> (f32, usize) {
    let (h, w) = spec.image_hw;
    let slot_w = w as f32 / spec.len_range.1 as f32;
    let s_h = (h.saturating_sub(2)) / GLYPH_SIDE;
    let s_w = ((slot_w - 1.0) / GLYPH_SIDE as f32).floor() as usize;
    let scale = s_h.min(s_w).max(1);
    (slot_w, scale)
}

fn paste_glyphs(text: &[usize], charset: &Charset, spec: &CorpusSpec) -> Tensor {
    let (h, w) = spec.image_hw;
    let (slot_w, scale) = layout(spec);
    let glyph_px = GLYPH_SIDE * scale;
    let y0 = (h.saturating_sub(glyph_px)) / 2;
    let mut img = Tensor::zeros(&[1, h, w]);
    for (k, &id) in text.iter().enumerate() {
        let glyph = &charset.glyphs[id];
        let x0 = (k as f32 * slot_w + (slot_w - glyph_px as f32).max(0.0) / 2.0).round() as usize;
        for cy in 0..GLYPH_SIDE {
            for cx in 0..GLYPH_SIDE {
                if !glyph.cell(cy, cx) {
                    continue;
                }
                for py in 0..scale {
                    for px in 0..scale {
                        let y = y0 + cy * scale + py;
                        let x = x0 + cx * scale + px;
                        if y < h && x < w {
                            img.data_mut()[y * w + x] = 1.0;
                        }
                    }
                }
            }
        }
    }
    img
}

/// Inverse-mapped rotation about the image center composed with a
/// sinusoidal vertical displacement, sampled bilinearly.
fn warp(src: &Tensor, h: usize, w: usize, theta_deg: f32, amp: f32, phase: f32) -> Tensor {
    let theta = theta_deg.to_radians();
    let (sin_t, cos_t) = (theta.sin(), theta.cos());
    let cy = (h as f32 - 1.0) / 2.0;
    let cx = (w as f32 - 1.0) / 2.0;
    let mut out = Tensor::zeros(&[1, h, w]);
    let sd = src.data();
    for y in 0..h {
        for x in 0..w {
            let curved_y =
                y as f32 - amp * (std::f32::consts::TAU * x as f32 / w as f32 + phase).sin();
            let dy = curved_y - cy;
            let dx = x as f32 - cx;
            let sx = cx + cos_t * dx + sin_t * dy;
            let sy = cy - sin_t * dx + cos_t * dy;
            out.data_mut()[y * w + x] = bilinear(sd, h, w, sy, sx);
        }
    }
    out
}

fn bilinear(data: &[f32], h: usize, w: usize, y: f32, x: f32) -> f32 {
    let y0 = y.floor();
    let x0 = x.floor();
    let fy = y - y0;
    let fx = x - x0;
    let fetch = |yy: f32, xx: f32| -> f32 {
        if yy < 0.0 || xx < 0.0 || yy >= h as f32 || xx >= w as f32 {
            0.0
        } else {
            data[yy as usize * w + xx as usize]
        }
    };
    let v00 = fetch(y0, x0);
    let v01 = fetch(y0, x0 + 1.0);
    let v10 = fetch(y0 + 1.0, x0);
    let v11 = fetch(y0 + 1.0, x0 + 1.0);
    v00 * (1.0 - fy) * (1.0 - fx) + v01 * (1.0 - fy) * fx + v10 * fy * (1.0 - fx) + v11 * fy * fx
}

fn gaussian_blur(src: &Tensor, h: usize, w: usize, sigma: f32) -> Tensor {
    let radius = (2.5 * sigma).ceil() as usize;
    if radius == 0 {
        return src.clone();
    }
    let mut kernel = Vec::with_capacity(2 * radius + 1);
    let mut sum = 0.0f32;
    for i in 0..=2 * radius {
        let d = i as f32 - radius as f32;
        let v = (-d * d / (2.0 * sigma * sigma)).exp();
        kernel.push(v);
        sum += v;
    }
    for v in &mut kernel {
        *v /= sum;
    }
    // Horizontal then vertical pass, zero padding (background is 0).
    let sd = src.data();
    let mut tmp = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f32;
            for (i, kv) in kernel.iter().enumerate() {
                let xi = x as isize + i as isize - radius as isize;
                if xi >= 0 && (xi as usize) < w {
                    acc += kv * sd[y * w + xi as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = Tensor::zeros(&[1, h, w]);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f32;
            for (i, kv) in kernel.iter().enumerate() {
                let yi = y as isize + i as isize - radius as isize;
                if yi >= 0 && (yi as usize) < h {
                    acc += kv * tmp[yi as usize * w + x];
                }
            }
            out.data_mut()[y * w + x] = acc;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::DistortionSpec;

    fn spec_no_distortion() -> CorpusSpec {
        let mut spec = CorpusSpec::new(Charset::latin_like(), 100, 7);
        spec.distortion = DistortionSpec::none();
        spec
    }

    #[test]
    fn empty_text_rejected() {
        let spec = spec_no_distortion();
        match render_string(&[], &spec.charset.clone(), &spec, 0) {
            Err(CorpusError::EmptyText) => {}
            other => panic!("expected EmptyText, got {other:?}"),
        }
    }

    #[test]
    fn special_or_out_of_range_id_rejected() {
        let spec = spec_no_distortion();
        let cs = spec.charset.clone();
        assert!(matches!(
            render_string(&[cs.sos_id()], &cs, &spec, 0),
            Err(CorpusError::UnknownSymbol(_))
        ));
        assert!(matches!(
            render_string(&[999], &cs, &spec, 0),
            Err(CorpusError::UnknownSymbol(_))
        ));
    }

    #[test]
    fn deterministic_and_confined_to_leading_slots() {
        let spec = spec_no_distortion();
        let cs = spec.charset.clone();
        let a = render_string(&[0, 1], &cs, &spec, 7).unwrap();
        let b = render_string(&[0, 1], &cs, &spec, 7).unwrap();
        assert!(a.bit_eq(&b));
        assert_eq!(a.shape(), &[1, 32, 96]);
        // ink only in the left two glyph slots
        let slot_w = 96.0f32 / 10.0;
        let limit = (2.0 * slot_w).ceil() as usize;
        let (h, w) = (32, 96);
        let mut any_ink = false;
        for y in 0..h {
            for x in 0..w {
                let v = a.data()[y * w + x];
                if v > 0.0 {
                    any_ink = true;
                    assert!(x < limit, "ink at x={x} beyond slot limit {limit}");
                }
            }
        }
        assert!(any_ink);
    }

    #[test]
    fn zero_magnitudes_equal_pure_paste() {
        // enabled, but all magnitudes zero: must equal the direct paste
        let mut spec = spec_no_distortion();
        spec.distortion = DistortionSpec {
            rotate_deg_max: 0.0,
            curve_amp_px: 0.0,
            blur_sigma_max: 0.0,
            noise_std: 0.0,
            enabled: true,
        };
        let cs = spec.charset.clone();
        let distorted = render_string(&[0], &cs, &spec, 12345).unwrap();
        let pasted = paste_glyphs(&[0], &cs, &spec);
        assert!(distorted.bit_eq(&pasted));
    }

    #[test]
    fn distortion_changes_pixels_but_stays_in_range() {
        let mut spec = spec_no_distortion();
        spec.distortion = DistortionSpec::default();
        let cs = spec.charset.clone();
        let img = render_string(&[0, 1, 2], &cs, &spec, 99).unwrap();
        let clean = paste_glyphs(&[0, 1, 2], &cs, &spec);
        assert!(!img.bit_eq(&clean));
        assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        // different seeds draw different distortions
        let img2 = render_string(&[0, 1, 2], &cs, &spec, 100).unwrap();
        assert!(!img.bit_eq(&img2));
    }
}
