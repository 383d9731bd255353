//! Synthetic desk-scale datasets: a 10-class glyph set for classification and
//! a rectangles-and-discs generator for segmentation. Both are deterministic
//! under a seed so sweeps are exactly repeatable.

use std::rc::Rc;

use rand::Rng;

use super::{Dataset, DataError, Label, Split};
use crate::rng;
use crate::tensor::Tensor;

/// Number of distinct glyph classes the classifier generator supports.
pub const GLYPH_CLASSES: usize = 10;

/// Paints glyph `class` into an `h x w` field with the given jitter and
/// foreground level. Classes are distinct shapes — disc, ring, bars, cross,
/// diagonals, frame, triangle, checker, dots — so the task is learnable by
/// very small models yet degrades gracefully under input noise.
fn paint_glyph(img: &mut [f64], h: usize, w: usize, class: usize, dx: f64, dy: f64, fg: f64) {
    let (ch, cw) = (h as f64 / 2.0 + dy, w as f64 / 2.0 + dx);
    let scale = h.min(w) as f64 / 32.0;
    let mut set = |y: usize, x: usize, v: f64| {
        if y < h && x < w {
            img[y * w + x] = img[y * w + x].max(v);
        }
    };
    for y in 0..h {
        for x in 0..w {
            let ry = y as f64 - ch;
            let rx = x as f64 - cw;
            let r2 = ry * ry + rx * rx;
            let on = match class {
                0 => r2 <= (8.0 * scale).powi(2),
                1 => r2 <= (9.0 * scale).powi(2) && r2 >= (6.0 * scale).powi(2),
                2 => ry.abs() <= 3.0 * scale && rx.abs() <= 11.0 * scale,
                3 => rx.abs() <= 3.0 * scale && ry.abs() <= 11.0 * scale,
                4 => {
                    (ry.abs() <= 2.0 * scale && rx.abs() <= 10.0 * scale)
                        || (rx.abs() <= 2.0 * scale && ry.abs() <= 10.0 * scale)
                }
                5 => {
                    ((ry - rx).abs() <= 2.0 * scale || (ry + rx).abs() <= 2.0 * scale)
                        && r2 <= (11.0 * scale).powi(2)
                }
                6 => {
                    let b = 10.0 * scale;
                    let inner = 7.0 * scale;
                    ry.abs() <= b
                        && rx.abs() <= b
                        && (ry.abs() >= inner || rx.abs() >= inner)
                }
                7 => ry >= -2.0 * scale && ry <= 9.0 * scale && rx.abs() <= ry + 2.0 * scale,
                8 => {
                    let block = (5.0 * scale).max(1.0);
                    let by = (ry / block).floor() as i64;
                    let bx = (rx / block).floor() as i64;
                    r2 <= (11.0 * scale).powi(2) && (by + bx).rem_euclid(2) == 0
                }
                _ => {
                    let off = 6.0 * scale;
                    let rr = (3.2 * scale).powi(2);
                    [(-off, -off), (-off, off), (off, -off), (off, off)]
                        .iter()
                        .any(|(oy, ox)| (ry - oy).powi(2) + (rx - ox).powi(2) <= rr)
                }
            };
            if on {
                set(y, x, fg);
            }
        }
    }
}

/// Generates `n` single-channel glyph images with jittered placement,
/// variable foreground level, and a low-amplitude noise background.
pub fn make_synthetic_cls(
    n: usize,
    h: usize,
    w: usize,
    seed: u64,
    split: Split,
) -> Result<Dataset, DataError> {
    if h < 16 || w < 16 {
        return Err(DataError::Config(format!(
            "glyphs need at least 16x16 pixels, got {h}x{w}"
        )));
    }
    let purpose = match split {
        Split::Train => "synth.cls.train",
        Split::Test => "synth.cls.test",
    };
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let mut r = rng::stream(seed, purpose, i as u64);
        let class = i % GLYPH_CLASSES;
        let mut img = vec![0.0; h * w];
        for p in img.iter_mut() {
            *p = r.gen::<f64>() * 0.12;
        }
        let dx = r.gen_range(-2.0..=2.0);
        let dy = r.gen_range(-2.0..=2.0);
        let fg = r.gen_range(0.65..=1.0);
        paint_glyph(&mut img, h, w, class, dx, dy, fg);
        images.push(Tensor::detached(vec![1, h, w], img));
        labels.push(Label::Class(class));
    }
    Dataset::new(images, labels, split, GLYPH_CLASSES)
}

/// Paired intensity and mask buffers a shape rasterizer writes into.
pub struct Canvas<'a> {
    pub img: &'a mut [f64],
    pub mask: &'a mut [usize],
    pub width: usize,
}

/// Rasterizes a filled disc: pixels whose center lies within `r` of
/// `(cy, cx)` get intensity `fg` and mask value `class`. Public so area
/// properties can be checked directly against the circle formula.
pub fn paint_disc(c: &mut Canvas, cy: f64, cx: f64, r: f64, class: usize, fg: f64) {
    let (w, h) = (c.width, c.img.len() / c.width);
    for y in 0..h {
        for x in 0..w {
            let dy = y as f64 + 0.5 - cy;
            let dx = x as f64 + 0.5 - cx;
            if dy * dy + dx * dx <= r * r {
                c.img[y * w + x] = fg;
                c.mask[y * w + x] = class;
            }
        }
    }
}

/// Rasterizes a filled axis-aligned rectangle spanning `[y0, y1) x [x0, x1)`.
pub fn paint_rect(c: &mut Canvas, y0: usize, x0: usize, y1: usize, x1: usize, class: usize, fg: f64) {
    let (w, h) = (c.width, c.img.len() / c.width);
    for y in y0..y1.min(h) {
        for x in x0..x1.min(w) {
            c.img[y * w + x] = fg;
            c.mask[y * w + x] = class;
        }
    }
}

/// Segmentation set: 1-3 random rectangles and discs per image on a noise
/// background; each pixel's mask value is the topmost (last drawn) shape,
/// background class 0. Shape classes cycle through `1..l`.
pub fn make_synthetic_seg(
    n: usize,
    h: usize,
    w: usize,
    l: usize,
    seed: u64,
    split: Split,
) -> Result<Dataset, DataError> {
    if l < 2 {
        return Err(DataError::Config(format!(
            "segmentation needs background plus at least one class, got {l}"
        )));
    }
    if h < 12 || w < 12 {
        return Err(DataError::Config(format!(
            "shapes do not fit a {h}x{w} field"
        )));
    }
    let purpose = match split {
        Split::Train => "synth.seg.train",
        Split::Test => "synth.seg.test",
    };
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let mut r = rng::stream(seed, purpose, i as u64);
        let mut img = vec![0.0; h * w];
        for p in img.iter_mut() {
            *p = r.gen::<f64>() * 0.1;
        }
        let mut mask = vec![0usize; h * w];
        let shapes = r.gen_range(1..=3usize);
        for _ in 0..shapes {
            let class = r.gen_range(1..l);
            // Class identity shows in intensity so the image determines the
            // mask; jitter keeps instances distinct.
            let fg = 0.35 + 0.6 * (class as f64 / l as f64) + r.gen_range(-0.05..=0.05);
            let fg = fg.clamp(0.2, 1.0);
            let mut canvas = Canvas { img: &mut img, mask: &mut mask, width: w };
            if r.gen::<bool>() {
                let rad = r.gen_range(3.0..=(h.min(w) as f64 / 3.0));
                let cy = r.gen_range(rad..=(h as f64 - rad));
                let cx = r.gen_range(rad..=(w as f64 - rad));
                paint_disc(&mut canvas, cy, cx, rad, class, fg);
            } else {
                let sh = r.gen_range(3..=h / 2);
                let sw = r.gen_range(3..=w / 2);
                let y0 = r.gen_range(0..=h - sh);
                let x0 = r.gen_range(0..=w - sw);
                paint_rect(&mut canvas, y0, x0, y0 + sh, x0 + sw, class, fg);
            }
        }
        images.push(Tensor::detached(vec![1, h, w], img));
        labels.push(Label::Mask(Rc::new(mask)));
    }
    Dataset::new(images, labels, split, l)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classifier_set_is_deterministic_and_balanced() {
        let a = make_synthetic_cls(40, 32, 32, 7, Split::Train).unwrap();
        let b = make_synthetic_cls(40, 32, 32, 7, Split::Train).unwrap();
        for (x, y) in a.images.iter().zip(&b.images) {
            assert_eq!(x.data(), y.data());
        }
        for class in 0..GLYPH_CLASSES {
            let count = a
                .labels
                .iter()
                .filter(|l| matches!(l, Label::Class(c) if *c == class))
                .count();
            assert_eq!(count, 4, "class {class} unbalanced");
        }
        // Train and test streams must not alias.
        let t = make_synthetic_cls(40, 32, 32, 7, Split::Test).unwrap();
        assert_ne!(a.images[0].data(), t.images[0].data());
    }

    #[test]
    fn glyphs_are_pairwise_distinct() {
        let ds = make_synthetic_cls(GLYPH_CLASSES, 32, 32, 3, Split::Train).unwrap();
        for i in 0..GLYPH_CLASSES {
            for j in (i + 1)..GLYPH_CLASSES {
                let d: f64 = ds.images[i]
                    .data()
                    .iter()
                    .zip(ds.images[j].data())
                    .map(|(a, b)| (a - b).abs())
                    .sum();
                assert!(d > 10.0, "glyphs {i} and {j} look alike (L1 = {d})");
            }
        }
    }

    #[test]
    fn disc_area_tracks_the_circle_formula() {
        let (h, w, r) = (64usize, 64usize, 14.0f64);
        let mut img = vec![0.0; h * w];
        let mut mask = vec![0usize; h * w];
        let mut canvas = Canvas { img: &mut img, mask: &mut mask, width: w };
        paint_disc(&mut canvas, 32.0, 32.0, r, 1, 1.0);
        let count = mask.iter().filter(|&&m| m == 1).count() as f64;
        let area = std::f64::consts::PI * r * r;
        assert!(
            (count - area).abs() / area < 0.05,
            "disc covers {count} pixels, circle area is {area}"
        );
    }

    #[test]
    fn seg_masks_use_topmost_shape_and_stay_in_range() {
        let ds = make_synthetic_seg(12, 24, 24, 4, 9, Split::Train).unwrap();
        let mut saw_shape = false;
        for label in &ds.labels {
            let Label::Mask(m) = label else { panic!("want masks") };
            for &v in m.iter() {
                assert!(v < 4);
                saw_shape |= v > 0;
            }
        }
        assert!(saw_shape, "no shape was drawn in 12 images");
        // Overwrite rule: a later rectangle hides an earlier one.
        let mut img = vec![0.0; 36];
        let mut mask = vec![0usize; 36];
        let mut canvas = Canvas { img: &mut img, mask: &mut mask, width: 6 };
        paint_rect(&mut canvas, 0, 0, 4, 4, 1, 0.5);
        paint_rect(&mut canvas, 2, 2, 5, 5, 2, 0.9);
        assert_eq!(mask[2 * 6 + 2], 2, "topmost shape must win");
        assert_eq!(mask[0], 1);
    }

    #[test]
    fn seg_rejects_degenerate_class_counts_and_fields() {
        assert!(make_synthetic_seg(1, 24, 24, 1, 0, Split::Train).is_err());
        assert!(make_synthetic_seg(1, 8, 8, 3, 0, Split::Train).is_err());
    }
}
