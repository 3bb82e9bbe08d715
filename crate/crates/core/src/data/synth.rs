//! Synthetic lesion phantoms: smooth random background with one to three
//! dark ellipsoids per volume.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{save_volume, Volume};
use crate::error::{Error, Result};

pub const DEFAULT_SIZE: [usize; 3] = [24, 96, 96];
pub const LESION_FRACTION: (f64, f64) = (0.001, 0.05);

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthOptions {
    /// `[Z, H, W]`.
    pub size: [usize; 3],
    /// Standard deviation of additive white noise; 0 gives clean volumes.
    pub noise: f32,
    /// Relative intensity drop inside a lesion.
    pub contrast: f32,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions { size: DEFAULT_SIZE, noise: 0.05, contrast: 0.6 }
    }
}

impl SynthOptions {
    pub fn clean(self) -> Self {
        SynthOptions { noise: 0.0, ..self }
    }
}

#[derive(Clone, Copy, Debug)]
struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2)).sum::<f64>() <= 1.0
    }
}

/// `n` volumes, bit-identical for equal `(n, seed, opts)`. Subject `i` only
/// depends on `(seed, i)`, so a larger `n` extends a smaller dataset.
pub fn synth_dataset(n: usize, seed: u64, opts: &SynthOptions) -> Result<Vec<Volume>> {
    if n == 0 {
        return Err(Error::Config("synthetic dataset needs at least one subject".into()));
    }
    let [z, h, w] = opts.size;
    if z < 3 || h < 16 || w < 16 {
        return Err(Error::Config(format!("synthetic size {:?} too small (min 3x16x16)", opts.size)));
    }
    (0..n).map(|i| synth_volume(i, seed, opts)).collect()
}

fn synth_volume(index: usize, seed: u64, opts: &SynthOptions) -> Result<Volume> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let [z, h, w] = opts.size;
    let total = (z * h * w) as f64;

    let background = smooth_field(&mut rng, opts.size);
    let mut mask = vec![0u8; z * h * w];
    let mut accepted = false;
    for _ in 0..200 {
        let count = rng.random_range(1..=3);
        let lesions: Vec<Ellipsoid> = (0..count).map(|_| random_ellipsoid(&mut rng, opts.size)).collect();
        rasterize(&lesions, opts.size, &mut mask);
        let frac = mask.iter().map(|&m| m as f64).sum::<f64>() / total;
        if (LESION_FRACTION.0..=LESION_FRACTION.1).contains(&frac) {
            accepted = true;
            break;
        }
    }
    if !accepted {
        return Err(Error::Data(format!("could not place lesions in a {:?} volume", opts.size)));
    }

    let mut intensities = background;
    for (v, &m) in intensities.iter_mut().zip(&mask) {
        if m != 0 {
            *v *= 1.0 - opts.contrast;
        }
    }
    if opts.noise > 0.0 {
        for v in &mut intensities {
            *v += opts.noise * gaussian(&mut rng);
        }
    }
    Volume::new(format!("sub-{index:03}"), opts.size, intensities, mask)
}

fn random_ellipsoid(rng: &mut ChaCha8Rng, [z, h, w]: [usize; 3]) -> Ellipsoid {
    let rz = rng.random_range((z as f64 / 12.0).max(1.0)..=(z as f64 / 5.0).max(1.5));
    let ry = rng.random_range(h as f64 / 24.0..=h as f64 / 8.0);
    let rx = rng.random_range(w as f64 / 24.0..=w as f64 / 8.0);
    let radii = [rz, ry, rx];
    let mut center = [0.0; 3];
    for (a, &n) in [z, h, w].iter().enumerate() {
        let lo = (radii[a] - 0.5).min(n as f64 / 2.0 - 0.5);
        let hi = (n as f64 - 0.5 - radii[a]).max(lo);
        center[a] = rng.random_range(lo..=hi);
    }
    Ellipsoid { center, radii }
}

fn rasterize(lesions: &[Ellipsoid], [z, h, w]: [usize; 3], mask: &mut [u8]) {
    for k in 0..z {
        for y in 0..h {
            for x in 0..w {
                let p = [k as f64, y as f64, x as f64];
                mask[(k * h + y) * w + x] = lesions.iter().any(|e| e.contains(p)) as u8;
            }
        }
    }
}

/// Coarse uniform noise, trilinearly upsampled and mapped to roughly
/// `[0.4, 0.7]`.
fn smooth_field(rng: &mut ChaCha8Rng, [z, h, w]: [usize; 3]) -> Vec<f32> {
    let (cz, cy, cx) = (z / 4 + 2, h / 8 + 2, w / 8 + 2);
    let coarse: Vec<f32> = (0..cz * cy * cx).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let pos = |i: usize, n: usize, c: usize| {
        let p = i as f32 * (c - 1) as f32 / (n.max(2) - 1) as f32;
        let i0 = (p.floor() as usize).min(c - 2);
        (i0, p - i0 as f32)
    };
    let mut out = Vec::with_capacity(z * h * w);
    for k in 0..z {
        let (k0, fk) = pos(k, z, cz);
        for y in 0..h {
            let (y0, fy) = pos(y, h, cy);
            for x in 0..w {
                let (x0, fx) = pos(x, w, cx);
                let mut acc = 0.0;
                for (dk, wk) in [(0, 1.0 - fk), (1, fk)] {
                    for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
                        for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
                            acc += wk * wy * wx * coarse[((k0 + dk) * cy + y0 + dy) * cx + x0 + dx];
                        }
                    }
                }
                out.push(0.55 + 0.15 * acc);
            }
        }
    }
    out
}

fn gaussian(rng: &mut ChaCha8Rng) -> f32 {
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random();
    ((-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()) as f32
}

/// Writes every volume to `<root>/<subject_id>/`.
pub fn write_dataset(volumes: &[Volume], root: &Path) -> Result<()> {
    for v in volumes {
        save_volume(v, &root.join(&v.subject_id))?;
    }
    Ok(())
}
