//! Volumes, slice samples and the preprocessing that connects them.

pub mod augment;
pub mod folds;
pub mod nifti;
pub mod preview;
pub mod synth;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::ModelInput;
use crate::tensor::Tensor;

pub use augment::{augment, AugmentParams};
pub use folds::{make_folds, Fold, FoldPlan, SplitRatios};
pub use synth::{synth_dataset, SynthOptions};

pub const DEFAULT_TARGET_SIZE: usize = 192;
pub const IMAGE_FILE: &str = "t1.nii.gz";
pub const MASK_FILE: &str = "mask.nii.gz";

/// One subject: intensities and a voxel-aligned binary mask, both `[Z, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub subject_id: String,
    pub dims: [usize; 3],
    pub intensities: Vec<f32>,
    pub mask: Vec<u8>,
    pub spacing: [f32; 3],
}

impl Volume {
    pub fn new(subject_id: impl Into<String>, dims: [usize; 3], intensities: Vec<f32>, mask: Vec<u8>) -> Result<Self> {
        let v = Volume { subject_id: subject_id.into(), dims, intensities, mask, spacing: [1.0; 3] };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        let n: usize = self.dims.iter().product();
        if n == 0 || self.intensities.len() != n || self.mask.len() != n {
            return Err(Error::Data(format!(
                "{}: dims {:?} but {} intensities and {} mask voxels",
                self.subject_id,
                self.dims,
                self.intensities.len(),
                self.mask.len()
            )));
        }
        if self.intensities.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("{}: non-finite intensity", self.subject_id)));
        }
        if self.mask.iter().any(|&m| m > 1) {
            return Err(Error::Data(format!("{}: mask is not binary", self.subject_id)));
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.dims[0]
    }

    pub fn plane_len(&self) -> usize {
        self.dims[1] * self.dims[2]
    }

    pub fn slice(&self, z: usize) -> &[f32] {
        let p = self.plane_len();
        &self.intensities[z * p..(z + 1) * p]
    }

    pub fn mask_slice(&self, z: usize) -> &[u8] {
        let p = self.plane_len();
        &self.mask[z * p..(z + 1) * p]
    }

    pub fn lesion_voxels(&self) -> usize {
        self.mask.iter().map(|&m| m as usize).sum()
    }
}

fn find_file(dir: &Path, stem: &str) -> Option<PathBuf> {
    [format!("{stem}.nii.gz"), format!("{stem}.nii")]
        .into_iter()
        .map(|n| dir.join(n))
        .find(|p| p.is_file())
}

/// Loads `<dir>/t1.nii[.gz]` and `<dir>/mask.nii[.gz]`. The subject id is the
/// directory name.
pub fn load_volume(dir: &Path) -> Result<Volume> {
    let image_path = find_file(dir, "t1").ok_or_else(|| Error::Volume {
        path: dir.to_path_buf(),
        reason: "no t1.nii or t1.nii.gz".into(),
    })?;
    let mask_path = find_file(dir, "mask").ok_or_else(|| Error::Volume {
        path: dir.to_path_buf(),
        reason: "missing mask (mask.nii or mask.nii.gz)".into(),
    })?;
    let image = nifti::read(&image_path)?;
    let mask = nifti::read(&mask_path)?;
    if image.dims != mask.dims {
        return Err(Error::Volume {
            path: mask_path,
            reason: format!("mask dims {:?} differ from image dims {:?}", mask.dims, image.dims),
        });
    }
    let [nx, ny, nz] = image.dims;
    let subject_id = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let intensities: Vec<f32> = image.data.iter().map(|&v| v as f32).collect();
    if intensities.iter().any(|v| !v.is_finite()) {
        return Err(Error::Volume { path: image_path, reason: "non-finite intensity".into() });
    }
    Ok(Volume {
        subject_id,
        dims: [nz, ny, nx],
        intensities,
        mask: mask.data.iter().map(|&v| (v >= 0.5) as u8).collect(),
        spacing: [image.spacing[2], image.spacing[1], image.spacing[0]],
    })
}

/// Writes `v` as `<dir>/t1.nii.gz` (float32) and `<dir>/mask.nii.gz` (uint8).
pub fn save_volume(v: &Volume, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let [z, h, w] = v.dims;
    let spacing = [v.spacing[2], v.spacing[1], v.spacing[0]];
    nifti::write(&dir.join(IMAGE_FILE), [w, h, z], spacing, nifti::Voxels::F32(&v.intensities))?;
    nifti::write(&dir.join(MASK_FILE), [w, h, z], spacing, nifti::Voxels::U8(&v.mask))
}

/// Subject directories under `root` (those containing a `t1` image), sorted.
pub fn list_subjects(root: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut dirs = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(root, e))?.path();
        if path.is_dir() && find_file(&path, "t1").is_some() {
            dirs.push(path);
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Data(format!("no subject directories under {}", root.display())));
    }
    Ok(dirs)
}

/// Bilinear resize of an `h x w` plane with half-pixel centres and edge clamp.
pub fn resize_bilinear(src: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    let (sy, sx) = (h as f64 / oh as f64, w as f64 / ow as f64);
    let axis = |o: usize, scale: f64, n: usize| {
        let p = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (p.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, (p - i0 as f64) as f32)
    };
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let (y0, y1, fy) = axis(y, sy, h);
        for x in 0..ow {
            let (x0, x1, fx) = axis(x, sx, w);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

pub fn resize_nearest<T: Copy>(src: &[T], h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let pick = |o: usize, n: usize, on: usize| (((o as f64 + 0.5) * n as f64 / on as f64) as usize).min(n - 1);
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let sy = pick(y, h, oh);
        for x in 0..ow {
            out.push(src[sy * w + pick(x, w, ow)]);
        }
    }
    out
}

/// Result of [`preprocess`]; `warnings` records degenerate inputs.
#[derive(Clone, Debug)]
pub struct Preprocessed {
    pub volume: Volume,
    pub warnings: Vec<String>,
}

/// Resizes every slice to `target x target` and min-max normalises the volume
/// to `[0, 1]`. A constant volume becomes all zeros with a warning.
pub fn preprocess(v: &Volume, target: usize) -> Result<Preprocessed> {
    v.validate()?;
    if target == 0 {
        return Err(Error::Config("preprocess target size must be positive".into()));
    }
    let [z, h, w] = v.dims;
    let mut intensities = Vec::with_capacity(z * target * target);
    let mut mask = Vec::with_capacity(z * target * target);
    for k in 0..z {
        intensities.extend(resize_bilinear(v.slice(k), h, w, target, target));
        mask.extend(resize_nearest(v.mask_slice(k), h, w, target, target));
    }
    let (lo, hi) = intensities
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let mut warnings = Vec::new();
    if hi > lo {
        let span = hi - lo;
        for x in &mut intensities {
            *x = ((*x - lo) / span).clamp(0.0, 1.0);
        }
    } else {
        warnings.push(format!("{}: constant intensity {lo}, normalised to zeros", v.subject_id));
        intensities.iter_mut().for_each(|x| *x = 0.0);
    }
    let spacing = [v.spacing[0], v.spacing[1] * h as f32 / target as f32, v.spacing[2] * w as f32 / target as f32];
    Ok(Preprocessed {
        volume: Volume { subject_id: v.subject_id.clone(), dims: [z, target, target], intensities, mask, spacing },
        warnings,
    })
}

/// Morphological gradient with a 3x3 square element: dilation minus erosion.
/// Pixels outside the image count as background for both operations, so a
/// full-frame mask yields an edge along the image border.
pub fn gt_edge_map(mask: &[u8], h: usize, w: usize) -> Vec<u8> {
    let mut edge = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let (mut any, mut all) = (false, true);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                    let on = yy >= 0 && xx >= 0 && yy < h as i64 && xx < w as i64 && mask[yy as usize * w + xx as usize] != 0;
                    any |= on;
                    all &= on;
                }
            }
            edge[y * w + x] = (any && !all) as u8;
        }
    }
    edge
}

/// One training unit: a slice, its `D`-plane context window `[H, W, D]`, the
/// mask and the edge map of the mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceSample {
    pub subject_id: String,
    pub z: usize,
    pub height: usize,
    pub width: usize,
    pub depth: usize,
    pub slice: Vec<f32>,
    pub context: Vec<f32>,
    pub mask: Vec<u8>,
    pub edge: Vec<u8>,
}

impl SliceSample {
    pub fn has_lesion(&self) -> bool {
        self.mask.iter().any(|&m| m != 0)
    }

    /// Context plane `d` as a contiguous `[H, W]` grid.
    pub fn context_plane(&self, d: usize) -> Vec<f32> {
        self.context.iter().skip(d).step_by(self.depth).copied().collect()
    }
}

/// Plane indices of the window centred on `z`, replicating the end planes.
pub fn context_indices(z: usize, depth: usize, nz: usize) -> Vec<usize> {
    let half = (depth / 2) as i64;
    (-half..=half).map(|o| (z as i64 + o).clamp(0, nz as i64 - 1) as usize).collect()
}

/// One sample per slice of `v`.
pub fn extract_samples(v: &Volume, depth: usize) -> Result<Vec<SliceSample>> {
    if depth % 2 == 0 {
        return Err(Error::Config(format!("context depth must be odd, got {depth}")));
    }
    let [nz, h, w] = v.dims;
    let p = h * w;
    let mut out = Vec::with_capacity(nz);
    for z in 0..nz {
        let planes = context_indices(z, depth, nz);
        let mut context = vec![0f32; p * depth];
        for (d, &k) in planes.iter().enumerate() {
            for (i, &x) in v.slice(k).iter().enumerate() {
                context[i * depth + d] = x;
            }
        }
        let mask = v.mask_slice(z).to_vec();
        out.push(SliceSample {
            subject_id: v.subject_id.clone(),
            z,
            height: h,
            width: w,
            depth,
            slice: v.slice(z).to_vec(),
            context,
            edge: gt_edge_map(&mask, h, w),
            mask,
        });
    }
    Ok(out)
}

/// Keeps every lesion-bearing sample plus an equal number of randomly chosen
/// empty ones (all empties if there are fewer), in the original order.
pub fn balance_lesion_slices(samples: Vec<SliceSample>, seed: u64) -> Vec<SliceSample> {
    let lesion = samples.iter().filter(|s| s.has_lesion()).count();
    let mut empty: Vec<usize> = (0..samples.len()).filter(|&i| !samples[i].has_lesion()).collect();
    empty.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    empty.truncate(lesion);
    let mut keep = vec![false; samples.len()];
    for i in empty {
        keep[i] = true;
    }
    samples
        .into_iter()
        .zip(keep)
        .filter(|(s, k)| *k || s.has_lesion())
        .map(|(s, _)| s)
        .collect()
}

/// A stacked mini-batch ready for the model and the losses.
#[derive(Clone, Debug)]
pub struct Batch {
    pub input: ModelInput<f32>,
    pub mask: Tensor<f32>,
    /// Edge target at half resolution, matching the edge prediction.
    pub edge_half: Tensor<f32>,
}

impl Batch {
    pub fn new(samples: &[&SliceSample]) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::Data("empty batch".into()))?;
        let (h, w, d) = (first.height, first.width, first.depth);
        if samples.iter().any(|s| (s.height, s.width, s.depth) != (h, w, d)) {
            return Err(Error::Shape("batch samples differ in size".into()));
        }
        let n = samples.len();
        let (hh, wh) = (h / 2, w / 2);
        let mut image = Vec::with_capacity(n * h * w);
        let mut context = Vec::with_capacity(n * h * w * d);
        let mut mask = Vec::with_capacity(n * h * w);
        let mut edge_half = Vec::with_capacity(n * hh * wh);
        for s in samples {
            image.extend_from_slice(&s.slice);
            context.extend_from_slice(&s.context);
            mask.extend(s.mask.iter().map(|&m| m as f32));
            for y in 0..hh {
                for x in 0..wh {
                    let e = |dy: usize, dx: usize| s.edge[(2 * y + dy) * w + 2 * x + dx];
                    edge_half.push((e(0, 0) | e(0, 1) | e(1, 0) | e(1, 1)) as f32);
                }
            }
        }
        Ok(Batch {
            input: ModelInput {
                image: Tensor::new(&[n, h, w, 1], image)?,
                context: Tensor::new(&[n, h, w, d, 1], context)?,
            },
            mask: Tensor::new(&[n, h, w, 1], mask)?,
            edge_half: Tensor::new(&[n, hh, wh, 1], edge_half)?,
        })
    }

    pub fn len(&self) -> usize {
        self.mask.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_volume(z: usize, h: usize, w: usize) -> Volume {
        let n = z * h * w;
        let intensities = (0..n).map(|i| (i / (h * w)) as f32 * 100.0 + (i % 7) as f32).collect();
        let mask = (0..n).map(|i| (i % 5 == 0) as u8).collect();
        Volume::new("s", [z, h, w], intensities, mask).unwrap()
    }

    /// Brute-force set definition of the morphological gradient.
    fn edge_oracle(mask: &[u8], h: usize, w: usize) -> Vec<u8> {
        let at = |y: i64, x: i64| {
            if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
                0
            } else {
                mask[y as usize * w + x as usize]
            }
        };
        let mut out = Vec::new();
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let nb: Vec<u8> = (-1..=1).flat_map(|dy| (-1..=1).map(move |dx| (dy, dx))).map(|(dy, dx)| at(y + dy, x + dx)).collect();
                let dil = *nb.iter().max().unwrap();
                let ero = *nb.iter().min().unwrap();
                out.push(dil - ero);
            }
        }
        out
    }

    #[test]
    fn edge_of_square_and_full_frame() {
        assert!(gt_edge_map(&[0; 64], 8, 8).iter().all(|&e| e == 0));
        let mut sq = vec![0u8; 64];
        for y in 2..6 {
            for x in 2..6 {
                sq[y * 8 + x] = 1;
            }
        }
        let e = gt_edge_map(&sq, 8, 8);
        assert_eq!(e, edge_oracle(&sq, 8, 8));
        // 6x6 dilation minus 2x2 erosion
        assert_eq!(e.iter().map(|&v| v as usize).sum::<usize>(), 36 - 4);
        assert_eq!(e[3 * 8 + 3], 0);
        let full = gt_edge_map(&[1; 64], 8, 8);
        for y in 0..8 {
            for x in 0..8 {
                let border = y == 0 || x == 0 || y == 7 || x == 7;
                assert_eq!(full[y * 8 + x] == 1, border);
            }
        }
    }

    #[test]
    fn samples_replicate_boundary_planes() {
        let v = ramp_volume(10, 4, 3);
        let s = extract_samples(&v, 5).unwrap();
        assert_eq!(s.len(), 10);
        assert_eq!(context_indices(0, 5, 10), vec![0, 0, 0, 1, 2]);
        assert_eq!(context_indices(9, 5, 10), vec![7, 8, 9, 9, 9]);
        for (d, k) in [0, 0, 0, 1, 2].into_iter().enumerate() {
            assert_eq!(s[0].context_plane(d), v.slice(k));
        }
        for sample in &s {
            assert_eq!(sample.context_plane(2), sample.slice);
            assert_eq!(sample.edge, gt_edge_map(&sample.mask, 4, 3));
        }
        assert!(extract_samples(&v, 4).is_err());
    }

    #[test]
    fn lesion_filter_keeps_balanced_count() {
        let mut v = ramp_volume(10, 4, 4);
        v.mask.iter_mut().for_each(|m| *m = 0);
        for z in [2, 5, 6] {
            v.mask[z * 16 + 5] = 1;
        }
        let s = balance_lesion_slices(extract_samples(&v, 3).unwrap(), 1);
        assert_eq!(s.len(), 6);
        assert_eq!(s.iter().filter(|x| x.has_lesion()).count(), 3);
        assert!(s.windows(2).all(|p| p[0].z < p[1].z));
    }

    #[test]
    fn preprocess_resizes_and_normalises() {
        let v = ramp_volume(3, 233, 197);
        let p = preprocess(&v, 192).unwrap();
        assert_eq!(p.volume.dims, [3, 192, 192]);
        assert!(p.warnings.is_empty());
        assert!(p.volume.mask.iter().all(|&m| m <= 1));
        let lo = p.volume.intensities.iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = p.volume.intensities.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        assert_eq!((lo, hi), (0.0, 1.0));

        let flat = Volume::new("c", [2, 5, 5], vec![3.0; 50], vec![0; 50]).unwrap();
        let p = preprocess(&flat, 8).unwrap();
        assert!(p.volume.intensities.iter().all(|&x| x == 0.0));
        assert_eq!(p.warnings.len(), 1);
    }

    #[test]
    fn bilinear_identity_and_constant() {
        let src: Vec<f32> = (0..12).map(|i| i as f32).collect();
        assert_eq!(resize_bilinear(&src, 3, 4, 3, 4), src);
        assert!(resize_bilinear(&[2.5; 12], 3, 4, 7, 5).iter().all(|&x| x == 2.5));
        assert_eq!(resize_nearest(&src, 3, 4, 3, 4), src);
    }

    #[test]
    fn volume_round_trips_through_nifti() {
        let dir = tempfile::tempdir().unwrap();
        let mut v = ramp_volume(4, 6, 5);
        v.subject_id = "sub-x".into();
        v.intensities[7] = -0.123_456_79;
        let sub = dir.path().join("sub-x");
        save_volume(&v, &sub).unwrap();
        let back = load_volume(&sub).unwrap();
        assert_eq!(back, v);
        assert_eq!(list_subjects(dir.path()).unwrap(), vec![sub.clone()]);

        std::fs::remove_file(sub.join(MASK_FILE)).unwrap();
        assert!(load_volume(&sub).unwrap_err().to_string().contains("missing mask"));
    }

    #[test]
    fn atlas_geometry_maps_to_189_slices() {
        let dir = tempfile::tempdir().unwrap();
        let dims = [197, 233, 189];
        let n: usize = dims.iter().product();
        nifti::write(&dir.path().join("t1.nii"), dims, [1.0; 3], nifti::Voxels::U8(&vec![1u8; n])).unwrap();
        nifti::write(&dir.path().join("mask.nii"), dims, [1.0; 3], nifti::Voxels::U8(&vec![0u8; n])).unwrap();
        let v = load_volume(dir.path()).unwrap();
        assert_eq!(v.dims, [189, 233, 197]);
    }

    #[test]
    fn mismatched_mask_dims_error() {
        let dir = tempfile::tempdir().unwrap();
        nifti::write(&dir.path().join("t1.nii"), [2, 2, 2], [1.0; 3], nifti::Voxels::F32(&[0.0; 8])).unwrap();
        nifti::write(&dir.path().join("mask.nii"), [2, 2, 1], [1.0; 3], nifti::Voxels::U8(&[0; 4])).unwrap();
        assert!(load_volume(dir.path()).is_err());
    }

    #[test]
    fn batch_stacks_and_pools_edges() {
        let v = ramp_volume(3, 4, 4);
        let s = extract_samples(&v, 3).unwrap();
        let b = Batch::new(&[&s[0], &s[1]]).unwrap();
        assert_eq!(b.input.image.shape(), &[2, 4, 4, 1]);
        assert_eq!(b.input.context.shape(), &[2, 4, 4, 3, 1]);
        assert_eq!(b.edge_half.shape(), &[2, 2, 2, 1]);
        let e = &s[1].edge;
        let expect = (e[0] | e[1] | e[4] | e[5]) as f32;
        assert_eq!(b.edge_half.data()[4], expect);
    }
}
