//! Image augmentation with matching box transforms.
//!
//! Output boxes are snapped to the 6-decimal annotation grid, which makes the
//! flips exact involutions and four quarter turns the identity on any box that
//! already lies on the grid.

use crate::domain::{BBox, Detection};
use image::{imageops, RgbImage};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Minimum fraction of a box's area that must survive a crop.
pub const MIN_KEPT_AREA: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AugmentOp {
    FlipH,
    FlipV,
    /// Quarter turn clockwise.
    Rot90,
    /// Centered crop keeping this fraction of each side, in (0, 1].
    Crop(f64),
    /// Additive Gaussian noise, sigma in 8-bit intensity units.
    Noise(f64),
}

impl AugmentOp {
    pub fn tag(&self) -> String {
        match self {
            AugmentOp::FlipH => "fliph".into(),
            AugmentOp::FlipV => "flipv".into(),
            AugmentOp::Rot90 => "rot90".into(),
            AugmentOp::Crop(f) => format!("crop{:03}", (f * 100.0).round() as u32),
            AugmentOp::Noise(s) => format!("noise{}", s.round() as u32),
        }
    }
}

fn grid(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

fn snapped(b: BBox) -> Option<BBox> {
    let b = BBox {
        cx: grid(b.cx).clamp(0.0, 1.0),
        cy: grid(b.cy).clamp(0.0, 1.0),
        w: grid(b.w).min(1.0),
        h: grid(b.h).min(1.0),
    };
    b.validate().ok().map(|_| b)
}

fn map_boxes(boxes: &[Detection], f: impl Fn(&BBox) -> Option<BBox>) -> Vec<Detection> {
    boxes
        .iter()
        .filter_map(|d| {
            f(&d.bbox).and_then(snapped).map(|bbox| Detection { bbox, ..*d })
        })
        .collect()
}

/// Pixel rectangle `(x0, y0, width, height)` kept by a centered crop.
pub fn crop_rect(width: u32, height: u32, frac: f64) -> (u32, u32, u32, u32) {
    let cw = ((width as f64 * frac).round() as u32).clamp(1, width);
    let ch = ((height as f64 * frac).round() as u32).clamp(1, height);
    ((width - cw) / 2, (height - ch) / 2, cw, ch)
}

pub fn augment_image<R: Rng + ?Sized>(
    image: &RgbImage,
    op: AugmentOp,
    boxes: &[Detection],
    rng: &mut R,
) -> (RgbImage, Vec<Detection>) {
    match op {
        AugmentOp::FlipH => (
            imageops::flip_horizontal(image),
            map_boxes(boxes, |b| Some(BBox { cx: 1.0 - b.cx, ..*b })),
        ),
        AugmentOp::FlipV => (
            imageops::flip_vertical(image),
            map_boxes(boxes, |b| Some(BBox { cy: 1.0 - b.cy, ..*b })),
        ),
        AugmentOp::Rot90 => (
            imageops::rotate90(image),
            map_boxes(boxes, |b| {
                Some(BBox {
                    cx: 1.0 - b.cy,
                    cy: b.cx,
                    w: b.h,
                    h: b.w,
                })
            }),
        ),
        AugmentOp::Crop(frac) => {
            assert!(frac > 0.0 && frac <= 1.0, "crop fraction {frac} outside (0, 1]");
            let (w, h) = image.dimensions();
            let (x0, y0, cw, ch) = crop_rect(w, h, frac);
            let out = imageops::crop_imm(image, x0, y0, cw, ch).to_image();
            let (fw, fh) = (w as f64, h as f64);
            let boxes = map_boxes(boxes, |b| {
                // Work in source pixels.
                let (bx0, by0, bx1, by1) = b.corners();
                let (bx0, by0, bx1, by1) = (bx0 * fw, by0 * fh, bx1 * fw, by1 * fh);
                let (kx0, ky0) = (x0 as f64, y0 as f64);
                let (kx1, ky1) = (kx0 + cw as f64, ky0 + ch as f64);
                let ix0 = bx0.max(kx0);
                let iy0 = by0.max(ky0);
                let ix1 = bx1.min(kx1);
                let iy1 = by1.min(ky1);
                if ix1 <= ix0 || iy1 <= iy0 {
                    return None;
                }
                let kept = (ix1 - ix0) * (iy1 - iy0) / ((bx1 - bx0) * (by1 - by0));
                if kept < MIN_KEPT_AREA {
                    return None;
                }
                Some(BBox::from_corners(
                    (ix0 - kx0) / cw as f64,
                    (iy0 - ky0) / ch as f64,
                    (ix1 - kx0) / cw as f64,
                    (iy1 - ky0) / ch as f64,
                ))
            });
            (out, boxes)
        }
        AugmentOp::Noise(sigma) => {
            assert!(sigma >= 0.0, "noise sigma must be non-negative");
            if sigma == 0.0 {
                return (image.clone(), boxes.to_vec());
            }
            let normal = Normal::new(0.0, sigma).expect("finite sigma");
            let mut out = image.clone();
            for p in out.pixels_mut() {
                for ch in p.0.iter_mut() {
                    let v = *ch as f64 + normal.sample(rng);
                    *ch = v.round().clamp(0.0, 255.0) as u8;
                }
            }
            (out, boxes.to_vec())
        }
    }
}
