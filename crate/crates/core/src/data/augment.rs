//! Seeded geometric and intensity augmentation of slice samples.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{gt_edge_map, SliceSample};

pub const MAX_ROTATION_DEG: f64 = 15.0;
pub const SCALE_RANGE: (f32, f32) = (0.9, 1.1);
pub const SHIFT_RANGE: (f32, f32) = (-0.1, 0.1);

/// Flips, then rotation about the slice centre, then `x * scale + shift` on
/// the intensities. Mask and edge are never intensity-jittered.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub flip_h: bool,
    pub flip_v: bool,
    pub angle_deg: f64,
    pub scale: f32,
    pub shift: f32,
}

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams { flip_h: false, flip_v: false, angle_deg: 0.0, scale: 1.0, shift: 0.0 }
    }

    pub fn sample(rng: &mut impl Rng) -> Self {
        AugmentParams {
            flip_h: rng.random_bool(0.5),
            flip_v: rng.random_bool(0.5),
            angle_deg: rng.random_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG),
            scale: rng.random_range(SCALE_RANGE.0..=SCALE_RANGE.1),
            shift: rng.random_range(SHIFT_RANGE.0..=SHIFT_RANGE.1),
        }
    }

    pub fn apply(&self, s: &SliceSample) -> SliceSample {
        let (h, w, d) = (s.height, s.width, s.depth);
        let mut slice = s.slice.clone();
        let mut context = s.context.clone();
        let mut mask = s.mask.clone();
        if self.flip_h {
            flip(&mut slice, h, w, 1, true);
            flip(&mut context, h, w, d, true);
            flip(&mut mask, h, w, 1, true);
        }
        if self.flip_v {
            flip(&mut slice, h, w, 1, false);
            flip(&mut context, h, w, d, false);
            flip(&mut mask, h, w, 1, false);
        }
        if self.angle_deg != 0.0 {
            slice = rotate_bilinear(&slice, h, w, 1, self.angle_deg);
            context = rotate_bilinear(&context, h, w, d, self.angle_deg);
            mask = rotate_nearest(&mask, h, w, self.angle_deg);
        }
        if self.scale != 1.0 || self.shift != 0.0 {
            for x in slice.iter_mut().chain(context.iter_mut()) {
                *x = *x * self.scale + self.shift;
            }
        }
        SliceSample {
            subject_id: s.subject_id.clone(),
            z: s.z,
            height: h,
            width: w,
            depth: d,
            slice,
            context,
            edge: gt_edge_map(&mask, h, w),
            mask,
        }
    }
}

/// Draws parameters from `seed` and applies them.
pub fn augment(s: &SliceSample, seed: u64) -> SliceSample {
    AugmentParams::sample(&mut ChaCha8Rng::seed_from_u64(seed)).apply(s)
}

/// Mirrors an `[H, W, C]` grid left-right (`horizontal`) or top-bottom.
fn flip<T>(data: &mut [T], h: usize, w: usize, c: usize, horizontal: bool) {
    if horizontal {
        for row in data.chunks_exact_mut(w * c) {
            for x in 0..w / 2 {
                for k in 0..c {
                    row.swap(x * c + k, (w - 1 - x) * c + k);
                }
            }
        }
    } else {
        let stride = w * c;
        for y in 0..h / 2 {
            let (top, bottom) = data.split_at_mut((h - 1 - y) * stride);
            top[y * stride..(y + 1) * stride].swap_with_slice(&mut bottom[..stride]);
        }
    }
}

/// Source coordinate of output pixel `(y, x)` under a rotation by `angle`.
fn source(y: usize, x: usize, h: usize, w: usize, cos: f64, sin: f64) -> (f64, f64) {
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (dy, dx) = (y as f64 - cy, x as f64 - cx);
    (cy + cos * dy - sin * dx, cx + sin * dy + cos * dx)
}

/// Bilinear rotation of an `[H, W, C]` grid; samples outside read as zero.
fn rotate_bilinear(src: &[f32], h: usize, w: usize, c: usize, angle_deg: f64) -> Vec<f32> {
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let mut out = vec![0f32; src.len()];
    let at = |yy: i64, xx: i64, k: usize| {
        if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
            0.0
        } else {
            src[(yy as usize * w + xx as usize) * c + k]
        }
    };
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = source(y, x, h, w, cos, sin);
            let (y0, x0) = (sy.floor(), sx.floor());
            let (fy, fx) = ((sy - y0) as f32, (sx - x0) as f32);
            let (y0, x0) = (y0 as i64, x0 as i64);
            for k in 0..c {
                let top = at(y0, x0, k) * (1.0 - fx) + at(y0, x0 + 1, k) * fx;
                let bot = at(y0 + 1, x0, k) * (1.0 - fx) + at(y0 + 1, x0 + 1, k) * fx;
                out[(y * w + x) * c + k] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

fn rotate_nearest(src: &[u8], h: usize, w: usize, angle_deg: f64) -> Vec<u8> {
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let mut out = vec![0u8; src.len()];
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = source(y, x, h, w, cos, sin);
            let (yy, xx) = (sy.round() as i64, sx.round() as i64);
            if yy >= 0 && xx >= 0 && yy < h as i64 && xx < w as i64 {
                out[y * w + x] = src[yy as usize * w + xx as usize];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{extract_samples, Volume};
    use proptest::prelude::*;
    use rand::Rng;

    fn sample(seed: u64) -> SliceSample {
        let (z, h, w) = (5, 12, 10);
        let n = z * h * w;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let intensities = (0..n).map(|_| rng.random::<f32>()).collect();
        let mask = (0..n)
            .map(|i| {
                let (y, x) = ((i / w) % h, i % w);
                ((y as i64 - 5).pow(2) + (x as i64 - 4).pow(2) < 9) as u8
            })
            .collect();
        let v = Volume::new("t", [z, h, w], intensities, mask).unwrap();
        extract_samples(&v, 3).unwrap().swap_remove(2)
    }

    #[test]
    fn double_horizontal_flip_is_identity() {
        let s = sample(0);
        let p = AugmentParams { flip_h: true, ..AugmentParams::identity() };
        let once = p.apply(&s);
        assert_ne!(once.slice, s.slice);
        assert_eq!(p.apply(&once), s);
        let v = AugmentParams { flip_v: true, ..AugmentParams::identity() };
        assert_eq!(v.apply(&v.apply(&s)), s);
    }

    #[test]
    fn flip_matches_index_oracle() {
        let s = sample(1);
        let (h, w) = (s.height, s.width);
        let f = AugmentParams { flip_h: true, flip_v: true, ..AugmentParams::identity() }.apply(&s);
        for y in 0..h {
            for x in 0..w {
                assert_eq!(f.slice[y * w + x], s.slice[(h - 1 - y) * w + (w - 1 - x)]);
            }
        }
    }

    #[test]
    fn quarter_turn_on_square_grid_is_exact_permutation() {
        let src: Vec<f32> = (0..16).map(|i| i as f32).collect();
        let r = rotate_bilinear(&src, 4, 4, 1, 90.0);
        let mut sorted = r.clone();
        sorted.sort_by(f32::total_cmp);
        for (a, b) in sorted.iter().zip(&src) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn seeded_augment_is_deterministic() {
        let s = sample(2);
        assert_eq!(augment(&s, 9), augment(&s, 9));
        assert_ne!(augment(&s, 9).slice, augment(&s, 10).slice);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn augmented_sample_invariants(seed in any::<u64>(), data_seed in 0u64..8) {
            let s = sample(data_seed);
            let a = augment(&s, seed);
            prop_assert!(a.mask.iter().all(|&m| m <= 1));
            prop_assert_eq!(&a.edge, &gt_edge_map(&a.mask, a.height, a.width));
            prop_assert_eq!(a.context_plane(a.depth / 2), a.slice.clone());
            prop_assert!(a.slice.iter().all(|x| x.is_finite()));
        }
    }
}
