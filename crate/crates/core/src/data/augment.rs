use super::CaptionedImage;
use crate::error::{ensure_arg, Result};
use crate::tensor::Tensor;

/// Vertical by horizontal grid of shift offsets.
pub const SHIFT_OFFSETS: (usize, usize) = (6, 8);
pub const FLIP_STATES: usize = 2;
pub const AUGMENT_VARIANTS: usize = SHIFT_OFFSETS.0 * SHIFT_OFFSETS.1 * FLIP_STATES;
/// Largest shift as a fraction of the image side.
pub const CROP_MARGIN: f64 = 0.125;

/// Deterministic crop-and-flip variant `variant_index` of `image`.
///
/// Variants `0..48` crop a window shifted by a grid offset within the
/// margin (bilinear resampling, edges replicated), and `48..96` add a
/// left-right flip. Variant 0 is the identity.
pub fn augment(image: &CaptionedImage, variant_index: usize) -> Result<CaptionedImage> {
    ensure_arg!(
        variant_index < AUGMENT_VARIANTS,
        "variant index {variant_index} out of range 0..{AUGMENT_VARIANTS}"
    );
    let offset = variant_index % (SHIFT_OFFSETS.0 * SHIFT_OFFSETS.1);
    let flip = variant_index >= SHIFT_OFFSETS.0 * SHIFT_OFFSETS.1;
    let (oy, ox) = (offset / SHIFT_OFFSETS.1, offset % SHIFT_OFFSETS.1);
    let margin_y = CROP_MARGIN * image.height() as f64;
    let margin_x = CROP_MARGIN * image.width() as f64;
    let dy = margin_y * oy as f64 / (SHIFT_OFFSETS.0 - 1) as f64;
    let dx = margin_x * ox as f64 / (SHIFT_OFFSETS.1 - 1) as f64;
    let mut pixels = shift(&image.pixels, dy, dx);
    if flip {
        pixels = flip_image(&pixels);
    }
    Ok(CaptionedImage {
        pixels,
        embeddings: image.embeddings.clone(),
        class_id: image.class_id,
    })
}

/// Left-right mirror of an `(H, W, C)` image.
pub fn flip_image(pixels: &Tensor) -> Tensor {
    let (h, w, c) = (pixels.shape()[0], pixels.shape()[1], pixels.shape()[2]);
    let src = pixels.data();
    let mut out = Vec::with_capacity(src.len());
    for y in 0..h {
        for x in (0..w).rev() {
            let base = (y * w + x) * c;
            out.extend_from_slice(&src[base..base + c]);
        }
    }
    Tensor::from_vec(pixels.shape(), out)
}

/// `out(y, x) = in(y + dy, x + dx)`, bilinear, coordinates clamped to the
/// image. Convex weights keep the pixel range.
fn shift(pixels: &Tensor, dy: f64, dx: f64) -> Tensor {
    let (h, w, c) = (pixels.shape()[0], pixels.shape()[1], pixels.shape()[2]);
    if dy == 0.0 && dx == 0.0 {
        return pixels.clone();
    }
    let src = pixels.data();
    let taps = |pos: f64, n: usize| -> (usize, usize, f64) {
        let p = pos.clamp(0.0, (n - 1) as f64);
        let i0 = p.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, p - i0 as f64)
    };
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        let (y0, y1, fy) = taps(y as f64 + dy, h);
        for x in 0..w {
            let (x0, x1, fx) = taps(x as f64 + dx, w);
            for ch in 0..c {
                let at = |yy: usize, xx: usize| src[(yy * w + xx) * c + ch];
                let top = (1.0 - fx) * at(y0, x0) + fx * at(y0, x1);
                let bottom = (1.0 - fx) * at(y1, x0) + fx * at(y1, x1);
                out[(y * w + x) * c + ch] = ((1.0 - fy) * top + fy * bottom).clamp(-1.0, 1.0);
            }
        }
    }
    Tensor::from_vec(pixels.shape(), out)
}
