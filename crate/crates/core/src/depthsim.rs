//! Volume to depth-image simulation and coronal projection of organ labels.
//!
//! Pipeline: normalize to [0, 1], threshold to a body mask, binary opening,
//! anterior surface extraction, per-image height normalization, far-value
//! suppression, grayscale opening.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Exec;
use crate::phantom::{self, Manifest, PhantomCase};
use crate::voldata::{
    self, BinaryVolume, DepthImage, Dims2, FormatError, MaskStack, Volume, N_ORGANS,
};

#[derive(Debug, Error)]
pub enum DepthSimError {
    #[error("volume is constant; cannot normalize")]
    ConstantVolume,
    #[error("body mask is empty")]
    EmptyBody,
    #[error("label volumes disagree on dims or spacing")]
    DimsMismatch,
    #[error("expected {expected} organ volumes, got {found}")]
    OrganCount { expected: usize, found: usize },
    #[error("invalid pipeline config: {0}")]
    Config(String),
    #[error(transparent)]
    Format(#[from] FormatError),
}

pub type Result<T> = std::result::Result<T, DepthSimError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub binarize_threshold: f32,
    pub far_suppress_threshold: f32,
    pub binary_opening_radius: usize,
    pub gray_opening_radius: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            binarize_threshold: 0.02,
            far_suppress_threshold: 0.3,
            binary_opening_radius: 1,
            gray_opening_radius: 1,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, t) in [
            ("binarize_threshold", self.binarize_threshold),
            ("far_suppress_threshold", self.far_suppress_threshold),
        ] {
            if !(t > 0.0 && t < 1.0) {
                return Err(DepthSimError::Config(format!("{name} must lie in (0, 1), got {t}")));
            }
        }
        Ok(())
    }
}

pub fn normalize_volume(v: &Volume) -> Result<Volume> {
    let (lo, hi) = v
        .values()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        });
    if !(hi > lo) {
        return Err(DepthSimError::ConstantVolume);
    }
    let range = hi - lo;
    let values = v
        .values()
        .iter()
        .map(|&x| ((x - lo) / range).clamp(0.0, 1.0))
        .collect();
    Ok(Volume::new(v.dims(), v.spacing(), values)?)
}

/// Strict threshold: a voxel is foreground iff its value exceeds `t`.
pub fn binarize(v: &Volume, t: f32) -> BinaryVolume {
    let bits = v.values().iter().map(|&x| (x > t) as u8).collect();
    BinaryVolume::new(v.dims(), v.spacing(), bits).expect("dims come from a valid volume")
}

fn erode_cross(bits: &[u8], n: [usize; 3], r: usize) -> Vec<u8> {
    let strides = [1, n[0], n[0] * n[1]];
    let mut out = vec![0u8; bits.len()];
    for k in 0..n[2] {
        for j in 0..n[1] {
            for i in 0..n[0] {
                let idx = i + n[0] * (j + n[1] * k);
                if bits[idx] == 0 {
                    continue;
                }
                let pos = [i, j, k];
                let keep = (0..3).all(|a| {
                    (1..=r).all(|d| {
                        pos[a] >= d
                            && pos[a] + d < n[a]
                            && bits[idx - d * strides[a]] != 0
                            && bits[idx + d * strides[a]] != 0
                    })
                });
                out[idx] = keep as u8;
            }
        }
    }
    out
}

fn dilate_cross(bits: &[u8], n: [usize; 3], r: usize) -> Vec<u8> {
    let strides = [1, n[0], n[0] * n[1]];
    let mut out = bits.to_vec();
    for k in 0..n[2] {
        for j in 0..n[1] {
            for i in 0..n[0] {
                let idx = i + n[0] * (j + n[1] * k);
                if bits[idx] == 0 {
                    continue;
                }
                let pos = [i, j, k];
                for a in 0..3 {
                    for d in 1..=r {
                        if pos[a] >= d {
                            out[idx - d * strides[a]] = 1;
                        }
                        if pos[a] + d < n[a] {
                            out[idx + d * strides[a]] = 1;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Erosion then dilation with the axis-aligned cross of arm length `radius`
/// (the 6-neighbourhood for radius 1). Voxels outside the grid count as
/// background during erosion.
pub fn binary_opening(m: &BinaryVolume, radius: usize) -> BinaryVolume {
    if radius == 0 {
        return m.clone();
    }
    let d = m.dims();
    let n = [d.x, d.y, d.z];
    let eroded = erode_cross(m.bits(), n, radius);
    let opened = dilate_cross(&eroded, n, radius);
    BinaryVolume::new(d, m.spacing(), opened).expect("same dims")
}

fn filter_square(values: &[f32], dims: Dims2, r: usize, pick: fn(f32, f32) -> f32) -> Vec<f32> {
    let (w, h) = (dims.w, dims.h);
    // Separable: rows, then columns. Windows are clipped at the image border.
    let mut rows = vec![0f32; values.len()];
    for z in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(w - 1);
            rows[x + w * z] = (lo..=hi)
                .map(|i| values[i + w * z])
                .reduce(pick)
                .unwrap();
        }
    }
    let mut out = vec![0f32; values.len()];
    for z in 0..h {
        let lo = z.saturating_sub(r);
        let hi = (z + r).min(h - 1);
        for x in 0..w {
            out[x + w * z] = (lo..=hi).map(|k| rows[x + w * k]).reduce(pick).unwrap();
        }
    }
    out
}

/// Min filter then max filter over a `(2r+1)^2` square window.
pub fn gray_opening(values: &[f32], dims: Dims2, radius: usize) -> Vec<f32> {
    if radius == 0 {
        return values.to_vec();
    }
    let eroded = filter_square(values, dims, radius, f32::min);
    filter_square(&eroded, dims, radius, f32::max)
}

/// Raw anterior surface height in millimetres per coronal pixel, `None` where
/// the ray misses the body.
pub fn surface_heights(body: &BinaryVolume) -> Vec<Option<f64>> {
    let d = body.dims();
    let sy = body.spacing().y as f64;
    let mut out = vec![None; d.x * d.z];
    for z in 0..d.z {
        for x in 0..d.x {
            out[x + d.x * z] = (0..d.y).rev().find(|&y| body.get(x, y, z)).map(|y| y as f64 * sy);
        }
    }
    out
}

pub fn extract_depth(body: &BinaryVolume, cfg: &PipelineConfig) -> Result<DepthImage> {
    let d = body.dims();
    let dims2 = Dims2::new(d.x, d.z);
    let heights = surface_heights(body);
    let (lo, hi) = heights
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &h| {
            (lo.min(h), hi.max(h))
        });
    if lo > hi {
        return Err(DepthSimError::EmptyBody);
    }
    let t = cfg.far_suppress_threshold;
    let suppressed: Vec<f32> = heights
        .iter()
        .map(|h| match h {
            None => 0.0,
            Some(_) if hi == lo => 1.0,
            Some(h) => {
                let v = ((h - lo) / (hi - lo)) as f32;
                if v < t {
                    0.0
                } else {
                    v
                }
            }
        })
        .collect();
    let values = gray_opening(&suppressed, dims2, cfg.gray_opening_radius);
    Ok(DepthImage::new(dims2, body.spacing().coronal(), values)?)
}

/// Coronal maximum-intensity projection of each organ volume, separately.
pub fn project_masks(labels: &[BinaryVolume]) -> Result<MaskStack> {
    if labels.len() != N_ORGANS {
        return Err(DepthSimError::OrganCount {
            expected: N_ORGANS,
            found: labels.len(),
        });
    }
    let d = labels[0].dims();
    let spacing = labels[0].spacing();
    if labels.iter().any(|l| l.dims() != d || l.spacing() != spacing) {
        return Err(DepthSimError::DimsMismatch);
    }
    let dims2 = Dims2::new(d.x, d.z);
    let channels = labels
        .iter()
        .map(|vol| {
            let mut ch = vec![0u8; dims2.len()];
            for z in 0..d.z {
                for y in 0..d.y {
                    for x in 0..d.x {
                        if vol.get(x, y, z) {
                            ch[x + d.x * z] = 1;
                        }
                    }
                }
            }
            ch
        })
        .collect();
    Ok(MaskStack::canonical(dims2, spacing.coronal(), channels)?)
}

/// Body mask as seen by the simulated camera (normalize, threshold, open).
pub fn body_mask(volume: &Volume, cfg: &PipelineConfig) -> Result<BinaryVolume> {
    let normalized = normalize_volume(volume)?;
    let mask = binarize(&normalized, cfg.binarize_threshold);
    Ok(binary_opening(&mask, cfg.binary_opening_radius))
}

pub fn simulate(
    volume: &Volume,
    organ_labels: &[BinaryVolume],
    cfg: &PipelineConfig,
) -> Result<(DepthImage, MaskStack)> {
    cfg.validate()?;
    let body = body_mask(volume, cfg)?;
    let depth = extract_depth(&body, cfg)?;
    let masks = project_masks(organ_labels)?;
    Ok((depth, masks))
}

pub fn simulate_case(case: &PhantomCase, cfg: &PipelineConfig) -> Result<(DepthImage, MaskStack)> {
    simulate(&case.volume, &case.organ_masks(), cfg)
}

pub fn depth_path(dir: &Path, case_id: &str) -> PathBuf {
    dir.join(format!("{case_id}.ddep"))
}

pub fn masks_path(dir: &Path, case_id: &str) -> PathBuf {
    dir.join(format!("{case_id}.dmsk"))
}

/// A case that could not be simulated.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseFailure {
    pub case_id: String,
    pub message: String,
}

fn simulate_file(phantom_dir: &Path, out_dir: &Path, case_id: &str, cfg: &PipelineConfig) -> Result<()> {
    let volume = voldata::read_volume(phantom::volume_path(phantom_dir, case_id))?;
    let labels = voldata::read_label_volume(phantom::labels_path(phantom_dir, case_id))?;
    if labels.dims() != volume.dims() {
        return Err(DepthSimError::DimsMismatch);
    }
    let (depth, masks) = simulate(&volume, &labels.organ_masks(), cfg)?;
    voldata::write_depth(&depth, depth_path(out_dir, case_id))?;
    voldata::write_maskstack(&masks, masks_path(out_dir, case_id))?;
    Ok(())
}

/// Simulates every manifest case from `phantom_dir` into `out_dir`. Cases
/// that fail are reported, not fatal; the others are still written.
pub fn simulate_dataset_with(
    exec: Exec,
    phantom_dir: &Path,
    manifest: &Manifest,
    out_dir: &Path,
    cfg: &PipelineConfig,
) -> Result<Vec<CaseFailure>> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(FormatError::from)?;
    let results = exec.map(&manifest.rows, |row| {
        simulate_file(phantom_dir, out_dir, &row.case_id, cfg).map_err(|e| CaseFailure {
            case_id: row.case_id.clone(),
            message: e.to_string(),
        })
    });
    Ok(results.into_iter().filter_map(|r| r.err()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voldata::{Dims3, Spacing3};
    use proptest::prelude::*;

    fn sp() -> Spacing3 {
        Spacing3::isotropic(1.0)
    }

    fn vol(values: Vec<f32>) -> Volume {
        let n = values.len();
        Volume::new(Dims3::new(n, 1, 1), sp(), values).unwrap()
    }

    #[test]
    fn normalize_affine() {
        let v = normalize_volume(&vol(vec![0.0, 250.0, 500.0])).unwrap();
        assert_eq!(v.values(), &[0.0, 0.5, 1.0]);
        let unit = vol(vec![0.0, 0.25, 1.0]);
        assert_eq!(normalize_volume(&unit).unwrap(), unit);
        assert!(matches!(
            normalize_volume(&vol(vec![3.0; 4])),
            Err(DepthSimError::ConstantVolume)
        ));
    }

    #[test]
    fn binarize_is_strict() {
        let m = binarize(&vol(vec![0.021, 0.019, 0.02]), 0.02);
        assert_eq!(m.bits(), &[1, 0, 0]);
    }

    fn cube_volume(n: usize, lo: usize, hi: usize) -> BinaryVolume {
        let d = Dims3::new(n, n, n);
        let mut m = BinaryVolume::zeros(d, sp()).unwrap();
        for z in lo..hi {
            for y in lo..hi {
                for x in lo..hi {
                    m.set(x, y, z, true);
                }
            }
        }
        m
    }

    #[test]
    fn opening_removes_isolated_voxel() {
        let mut m = BinaryVolume::zeros(Dims3::new(5, 5, 5), sp()).unwrap();
        m.set(2, 2, 2, true);
        assert!(binary_opening(&m, 1).is_empty());
        assert_eq!(binary_opening(&m, 0), m);
    }

    #[test]
    fn opening_of_cube_keeps_core() {
        let m = cube_volume(14, 2, 12);
        let opened = binary_opening(&m, 1);
        assert!(opened.is_subset_of(&m));
        // Direct definition: erosion keeps voxels whose six neighbours are
        // set, dilation adds the six neighbours back.
        let eroded = cube_volume(14, 3, 11);
        for z in 0..14 {
            for y in 0..14 {
                for x in 0..14 {
                    let p = [x as i64, y as i64, z as i64];
                    let mut expect = eroded.get(x, y, z);
                    for a in 0..3 {
                        for s in [-1i64, 1] {
                            let mut q = p;
                            q[a] += s;
                            if q.iter().all(|&c| (0..14).contains(&c)) {
                                expect |= eroded.get(q[0] as usize, q[1] as usize, q[2] as usize);
                            }
                        }
                    }
                    assert_eq!(opened.get(x, y, z), expect, "({x},{y},{z})");
                }
            }
        }
        assert!(cube_volume(14, 3, 11).is_subset_of(&opened));
        // Edges of the cube are the only voxels lost.
        assert_eq!(m.count() - opened.count(), 12 * 8 + 8);
    }

    #[test]
    fn gray_opening_removes_spike() {
        let dims = Dims2::new(7, 7);
        let mut v = vec![0.5f32; 49];
        v[3 + 7 * 3] = 0.9;
        let out = gray_opening(&v, dims, 1);
        assert!(out.iter().all(|&x| x == 0.5));
    }

    #[test]
    fn hemisphere_apex_is_one() {
        let n = 21;
        let d = Dims3::new(n, n, n);
        let mut m = BinaryVolume::zeros(d, sp()).unwrap();
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    let (dx, dz) = (x as f64 - 10.0, z as f64 - 10.0);
                    if dx * dx + (y as f64).powi(2) + dz * dz <= 100.0 {
                        m.set(x, y, z, true);
                    }
                }
            }
        }
        // The discrete apex is a single pixel, so the grayscale opening
        // would shave it; check the normalization endpoint without it.
        let cfg = PipelineConfig { gray_opening_radius: 0, ..Default::default() };
        let depth = extract_depth(&m, &cfg).unwrap();
        assert_eq!(depth.get(10, 10), 1.0);
        let opened = extract_depth(&m, &PipelineConfig::default()).unwrap();
        assert!(opened.values().iter().all(|&v| v < 1.0));
    }

    #[test]
    fn empty_body_is_error() {
        let m = BinaryVolume::zeros(Dims3::new(3, 3, 3), sp()).unwrap();
        assert!(matches!(
            extract_depth(&m, &PipelineConfig::default()),
            Err(DepthSimError::EmptyBody)
        ));
    }

    #[test]
    fn flat_surface_is_one() {
        let mut m = BinaryVolume::zeros(Dims3::new(6, 4, 6), sp()).unwrap();
        for z in 0..6 {
            for x in 0..6 {
                m.set(x, 1, z, true);
            }
        }
        let depth = extract_depth(&m, &PipelineConfig::default()).unwrap();
        assert!(depth.values().iter().all(|&v| v == 1.0));
    }

    fn organ_set(d: Dims3) -> Vec<BinaryVolume> {
        (0..N_ORGANS).map(|_| BinaryVolume::zeros(d, sp()).unwrap()).collect()
    }

    #[test]
    fn projection_of_single_voxel() {
        let d = Dims3::new(8, 10, 12);
        let mut organs = organ_set(d);
        organs[0].set(3, 7, 9, true);
        let stack = project_masks(&organs).unwrap();
        assert_eq!(stack.dims(), Dims2::new(8, 12));
        for z in 0..12 {
            for x in 0..8 {
                assert_eq!(stack.channel(0)[x + 8 * z] == 1, (x, z) == (3, 9));
            }
        }
        assert!(stack.channels()[1..].iter().all(|c| c.iter().all(|&b| b == 0)));
    }

    #[test]
    fn projection_keeps_overlap() {
        let d = Dims3::new(4, 4, 4);
        let mut organs = organ_set(d);
        organs[3].set(1, 0, 2, true);
        organs[4].set(1, 3, 2, true);
        let stack = project_masks(&organs).unwrap();
        assert_eq!(stack.channel(3)[1 + 4 * 2], 1);
        assert_eq!(stack.channel(4)[1 + 4 * 2], 1);
    }

    #[test]
    fn projection_rejects_mismatch() {
        let mut organs = organ_set(Dims3::new(4, 4, 4));
        organs[2] = BinaryVolume::zeros(Dims3::new(4, 4, 5), sp()).unwrap();
        assert!(matches!(project_masks(&organs), Err(DepthSimError::DimsMismatch)));
        assert!(matches!(
            project_masks(&organs[..3]),
            Err(DepthSimError::OrganCount { .. })
        ));
    }

    fn arb_mask() -> impl Strategy<Value = BinaryVolume> {
        (2usize..8, 2usize..8, 2usize..8).prop_flat_map(|(x, y, z)| {
            proptest::collection::vec(proptest::bool::weighted(0.6), x * y * z).prop_map(
                move |bits| {
                    BinaryVolume::new(
                        Dims3::new(x, y, z),
                        Spacing3::isotropic(1.0),
                        bits.into_iter().map(u8::from).collect(),
                    )
                    .unwrap()
                },
            )
        })
    }

    proptest! {
        #[test]
        fn binary_opening_is_anti_extensive_and_idempotent(m in arb_mask(), r in 0usize..3) {
            let once = binary_opening(&m, r);
            prop_assert!(once.is_subset_of(&m));
            prop_assert_eq!(binary_opening(&once, r), once);
        }

        #[test]
        fn gray_opening_is_anti_extensive_and_idempotent(
            (w, h, vals) in (1usize..10, 1usize..10).prop_flat_map(|(w, h)| {
                (Just(w), Just(h), proptest::collection::vec(0f32..1.0, w * h))
            }),
            r in 0usize..3,
        ) {
            let dims = Dims2::new(w, h);
            let once = gray_opening(&vals, dims, r);
            prop_assert!(once.iter().zip(&vals).all(|(a, b)| a <= b));
            prop_assert_eq!(gray_opening(&once, dims, r), once);
        }

        #[test]
        fn depth_values_in_allowed_set(m in arb_mask()) {
            prop_assume!(!m.is_empty());
            let cfg = PipelineConfig::default();
            let depth = extract_depth(&m, &cfg).unwrap();
            for &v in depth.values() {
                prop_assert!(v == 0.0 || (cfg.far_suppress_threshold..=1.0).contains(&v));
            }
        }

        #[test]
        fn projection_preserves_xz_extent(m in arb_mask()) {
            prop_assume!(!m.is_empty());
            let d = m.dims();
            let mut organs = organ_set(d);
            organs[0] = BinaryVolume::new(d, sp(), m.bits().to_vec()).unwrap();
            let stack = project_masks(&organs).unwrap();
            let ch = stack.channel(0);
            prop_assert!(ch.iter().filter(|&&b| b == 1).count() <= m.count());
            let (mut vx, mut vz) = (vec![], vec![]);
            for z in 0..d.z { for y in 0..d.y { for x in 0..d.x {
                if m.get(x, y, z) { vx.push(x); vz.push(z); }
            }}}
            let (mut px, mut pz) = (vec![], vec![]);
            for z in 0..d.z { for x in 0..d.x {
                if ch[x + d.x * z] == 1 { px.push(x); pz.push(z); }
            }}
            prop_assert_eq!(vx.iter().min(), px.iter().min());
            prop_assert_eq!(vx.iter().max(), px.iter().max());
            prop_assert_eq!(vz.iter().min(), pz.iter().min());
            prop_assert_eq!(vz.iter().max(), pz.iter().max());
        }
    }
}
