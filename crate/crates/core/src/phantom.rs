//! Synthetic whole-body phantoms with exact organ ground truth.
//!
//! The body is a stack of superellipsoids (head, neck, torso, pelvis, two
//! legs) lying supine on a table slab; organs are ellipsoids placed at fixed
//! fractional positions of an inner trunk frame. The frame is the outer torso
//! minus the subcutaneous fat layer, so the surface seen by the camera carries
//! most (but not all) of the information needed to place the organs.
//!
//! World coordinates are millimetres with voxel `(i, j, k)` centred at
//! `((i + 0.5) sx, (j + 0.5) sy, (k + 0.5) sz)`. The legs may run out of the
//! inferior end of the grid, as in a scanner field of view; everything above
//! them must fit.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Exec;
use crate::voldata::{
    self, BinaryVolume, Dims3, FormatError, LabelVolume, Organ, Spacing3, Volume, N_ORGANS,
};

pub const HEIGHT_RANGE_MM: (f64, f64) = (1500.0, 1950.0);
pub const TORSO_WIDTH_RANGE_MM: (f64, f64) = (280.0, 420.0);
pub const TORSO_DEPTH_RANGE_MM: (f64, f64) = (180.0, 300.0);
pub const FAT_RANGE_MM: (f64, f64) = (10.0, 40.0);
pub const LATERALITY_RANGE_MM: (f64, f64) = (-10.0, 10.0);
pub const ORGAN_JITTER_SIGMA_MM: f64 = 8.0;
pub const BLADDER_JITTER_SIGMA_MM: f64 = 15.0;
/// Jitter draws are truncated at this many standard deviations.
pub const JITTER_TRUNCATION: f64 = 2.5;

pub const DEFAULT_DIMS: Dims3 = Dims3 { x: 60, y: 48, z: 144 };
pub const DEFAULT_SPACING_MM: f32 = 8.0;

pub const BODY_INTENSITY: f32 = 0.5;
pub const TABLE_INTENSITY: f32 = 0.05;
pub const NOISE_AMPLITUDE: f32 = 0.01;
/// Number of posterior Y layers occupied by the table.
pub const TABLE_LAYERS: usize = 3;
/// Gap between the top of the head and the superior end of the grid.
const HEAD_MARGIN_MM: f64 = 24.0;

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("body does not fit the grid: {0}")]
    BodyExceedsGrid(String),
    #[error("organ {0} is empty at this resolution")]
    EmptyOrgan(Organ),
    #[error("cohort size must be at least 1")]
    EmptyCohort,
    #[error("case {case}: {source}")]
    Case {
        case: String,
        #[source]
        source: Box<PhantomError>,
    },
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, PhantomError>;

/// Sampled anatomy of one synthetic subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BodyParams {
    pub height_mm: f64,
    /// Outer (skin) width of the torso.
    pub torso_width_mm: f64,
    /// Outer (skin) anterior-posterior depth of the torso.
    pub torso_depth_mm: f64,
    pub fat_thickness_mm: f64,
    pub laterality_shift: f64,
    /// Per-organ (x, y, z) displacement in canonical organ order.
    pub jitter_mm: [[f64; 3]; N_ORGANS],
    pub rng_seed: u64,
}

fn truncated_normal(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    let normal = Normal::new(0.0, sigma).expect("positive sigma");
    loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= JITTER_TRUNCATION * sigma {
            return v;
        }
    }
}

pub fn sample_params(rng_seed: u64) -> BodyParams {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let height_mm = rng.gen_range(HEIGHT_RANGE_MM.0..=HEIGHT_RANGE_MM.1);
    let torso_width_mm = rng.gen_range(TORSO_WIDTH_RANGE_MM.0..=TORSO_WIDTH_RANGE_MM.1);
    let torso_depth_mm = rng.gen_range(TORSO_DEPTH_RANGE_MM.0..=TORSO_DEPTH_RANGE_MM.1);
    let fat_thickness_mm = rng.gen_range(FAT_RANGE_MM.0..=FAT_RANGE_MM.1);
    let laterality_shift = rng.gen_range(LATERALITY_RANGE_MM.0..=LATERALITY_RANGE_MM.1);
    let mut jitter_mm = [[0.0; 3]; N_ORGANS];
    for organ in Organ::ALL {
        let sigma = if organ == Organ::UrinaryBladder {
            BLADDER_JITTER_SIGMA_MM
        } else {
            ORGAN_JITTER_SIGMA_MM
        };
        for axis in 0..3 {
            jitter_mm[organ.index()][axis] = truncated_normal(&mut rng, sigma);
        }
    }
    BodyParams {
        height_mm,
        torso_width_mm,
        torso_depth_mm,
        fat_thickness_mm,
        laterality_shift,
        jitter_mm,
        rng_seed,
    }
}

/// Axis-aligned superellipsoid `|dx/a|^p + |dy/b|^p + |dz/c|^q <= 1`.
#[derive(Debug, Clone, Copy)]
struct Blob {
    center: [f64; 3],
    semi: [f64; 3],
    p: f64,
    q: f64,
}

impl Blob {
    fn ellipsoid(center: [f64; 3], semi: [f64; 3]) -> Self {
        Self {
            center,
            semi,
            p: 2.0,
            q: 2.0,
        }
    }

    fn contains(&self, pt: [f64; 3]) -> bool {
        let dx = ((pt[0] - self.center[0]) / self.semi[0]).abs();
        let dy = ((pt[1] - self.center[1]) / self.semi[1]).abs();
        let dz = ((pt[2] - self.center[2]) / self.semi[2]).abs();
        if dx > 1.0 || dy > 1.0 || dz > 1.0 {
            return false;
        }
        dx.powf(self.p) + dy.powf(self.p) + dz.powf(self.q) <= 1.0
    }

    fn lo(&self, axis: usize) -> f64 {
        self.center[axis] - self.semi[axis]
    }

    fn hi(&self, axis: usize) -> f64 {
        self.center[axis] + self.semi[axis]
    }

    /// Calls `f` for every voxel whose centre lies inside the blob.
    fn rasterize(&self, dims: Dims3, spacing: [f64; 3], mut f: impl FnMut(usize)) {
        let n = [dims.x, dims.y, dims.z];
        let range = |axis: usize| {
            let lo = (self.lo(axis) / spacing[axis] - 0.5).ceil().max(0.0) as usize;
            let hi = (self.hi(axis) / spacing[axis] - 0.5).floor();
            if hi < 0.0 {
                return (1, 0);
            }
            (lo, (hi as usize).min(n[axis] - 1))
        };
        let (x0, x1) = range(0);
        let (y0, y1) = range(1);
        let (z0, z1) = range(2);
        for k in z0..=z1 {
            let pz = (k as f64 + 0.5) * spacing[2];
            for j in y0..=y1 {
                let py = (j as f64 + 0.5) * spacing[1];
                for i in x0..=x1 {
                    let px = (i as f64 + 0.5) * spacing[0];
                    if self.contains([px, py, pz]) {
                        f(dims.index(i, j, k));
                    }
                }
            }
        }
    }
}

/// Placement of one organ part in the trunk frame. Offsets and semi-axes are
/// fractions of the frame half-width (x), half-depth (y) and of the trunk
/// length (z position, measured from the crotch) or trunk half-length (z size).
struct OrganPart {
    fx: f64,
    fy: f64,
    fz: f64,
    ax: f64,
    ay: f64,
    az: f64,
}

const fn part(fx: f64, fy: f64, fz: f64, ax: f64, ay: f64, az: f64) -> OrganPart {
    OrganPart {
        fx,
        fy,
        fz,
        ax,
        ay,
        az,
    }
}

fn organ_layout(organ: Organ) -> Vec<OrganPart> {
    match organ {
        Organ::Hips => vec![
            part(-0.55, -0.1, 0.22, 0.28, 0.45, 0.18),
            part(0.55, -0.1, 0.22, 0.28, 0.45, 0.18),
        ],
        Organ::Femurs => vec![
            part(-0.44, -0.05, -0.02, 0.12, 0.25, 0.22),
            part(0.44, -0.05, -0.02, 0.12, 0.25, 0.22),
        ],
        Organ::Vertebra => vec![part(0.0, -0.62, 0.45, 0.12, 0.2, 0.36)],
        Organ::Heart => vec![part(0.12, 0.25, 0.74, 0.38, 0.45, 0.2)],
        Organ::Lungs => vec![
            part(-0.45, 0.0, 0.8, 0.36, 0.65, 0.34),
            part(0.45, 0.0, 0.8, 0.36, 0.65, 0.34),
        ],
        Organ::Kidneys => vec![
            part(-0.35, -0.45, 0.44, 0.18, 0.22, 0.18),
            part(0.35, -0.45, 0.44, 0.18, 0.22, 0.18),
        ],
        Organ::Liver => vec![part(-0.35, 0.1, 0.57, 0.55, 0.55, 0.2)],
        Organ::Pancreas => vec![part(0.08, 0.0, 0.5, 0.45, 0.18, 0.07)],
        Organ::Spleen => vec![part(0.62, -0.35, 0.6, 0.2, 0.3, 0.15)],
        Organ::Stomach => vec![part(0.35, 0.35, 0.6, 0.3, 0.35, 0.14)],
        Organ::UrinaryBladder => vec![part(0.0, 0.3, 0.1, 0.3, 0.3, 0.12)],
    }
}

/// Later organs overwrite earlier ones where ellipsoids intersect in 3D.
const PAINT_ORDER: [Organ; N_ORGANS] = [
    Organ::Lungs,
    Organ::Liver,
    Organ::Heart,
    Organ::Stomach,
    Organ::Hips,
    Organ::Femurs,
    Organ::Spleen,
    Organ::Kidneys,
    Organ::Pancreas,
    Organ::UrinaryBladder,
    Organ::Vertebra,
];

fn contrast(organ: Organ) -> f32 {
    match organ {
        Organ::Hips | Organ::Femurs | Organ::Vertebra => 0.3,
        Organ::Heart => 0.15,
        Organ::Lungs => -0.35,
        Organ::Kidneys => 0.2,
        Organ::Liver => 0.1,
        Organ::Pancreas => 0.05,
        Organ::Spleen => 0.12,
        Organ::Stomach => -0.1,
        Organ::UrinaryBladder => 0.25,
    }
}

/// Key landmarks of a body placed in the grid, in world millimetres.
#[derive(Debug, Clone, Copy)]
struct BodyFrame {
    cx: f64,
    table_top: f64,
    head_top: f64,
    shoulder: f64,
    crotch: f64,
    outer_w: f64,
    outer_d: f64,
}

impl BodyFrame {
    fn inner_w(&self, p: &BodyParams) -> f64 {
        self.outer_w - 2.0 * p.fat_thickness_mm
    }

    fn inner_d(&self, p: &BodyParams) -> f64 {
        self.outer_d - 2.0 * p.fat_thickness_mm
    }

    fn torso_cy(&self) -> f64 {
        self.table_top + self.outer_d / 2.0
    }

    fn trunk_len(&self) -> f64 {
        self.shoulder - self.crotch
    }
}

fn body_blobs(p: &BodyParams, f: &BodyFrame) -> Vec<Blob> {
    let h = p.height_mm;
    let w = f.outer_w;
    let d = f.outer_d;
    let head_semi = [70.0 + 0.1 * (w - 350.0), 90.0, 0.065 * h];
    let waist = f.head_top - 0.44 * h;
    let pelvis_top = f.head_top - 0.40 * h;
    let leg_semi = [0.13 * w, 0.275 * d, 0.25 * h];
    let leg_cz = f.crotch - 0.2 * h;
    let mut blobs = vec![
        Blob::ellipsoid(
            [f.cx, f.table_top + head_semi[1], f.head_top - head_semi[2]],
            head_semi,
        ),
        Blob::ellipsoid(
            [f.cx, f.table_top + 65.0, f.head_top - 0.14 * h],
            [55.0, 60.0, 0.035 * h],
        ),
        Blob {
            center: [f.cx, f.torso_cy(), (f.shoulder + waist) / 2.0],
            semi: [w / 2.0, d / 2.0, (f.shoulder - waist) / 2.0],
            p: 2.5,
            q: 6.0,
        },
        Blob {
            center: [f.cx, f.table_top + 0.45 * d, (pelvis_top + f.crotch) / 2.0],
            semi: [0.475 * w, 0.45 * d, (pelvis_top - f.crotch) / 2.0],
            p: 2.5,
            q: 4.0,
        },
    ];
    for side in [-1.0, 1.0] {
        blobs.push(Blob::ellipsoid(
            [f.cx + side * 0.22 * w, f.table_top + leg_semi[1], leg_cz],
            leg_semi,
        ));
    }
    blobs
}

fn organ_blobs(organ: Organ, p: &BodyParams, f: &BodyFrame) -> Vec<Blob> {
    let half_w = f.inner_w(p) / 2.0;
    let half_d = f.inner_d(p) / 2.0;
    let len = f.trunk_len();
    let j = p.jitter_mm[organ.index()];
    organ_layout(organ)
        .iter()
        .map(|pt| {
            Blob::ellipsoid(
                [
                    f.cx + pt.fx * half_w + p.laterality_shift + j[0],
                    f.torso_cy() + pt.fy * half_d + j[1],
                    f.crotch + pt.fz * len + j[2],
                ],
                [pt.ax * half_w, pt.ay * half_d, pt.az * len / 2.0],
            )
        })
        .collect()
}

/// One synthetic subject: intensity volume, organ label map and body mask.
#[derive(Debug, Clone)]
pub struct PhantomCase {
    pub case_id: String,
    pub volume: Volume,
    pub labels: LabelVolume,
    /// Body voxels, table excluded.
    pub body: BinaryVolume,
    pub params: BodyParams,
}

impl PhantomCase {
    /// Ground-truth organ masks in canonical order.
    pub fn organ_masks(&self) -> Vec<BinaryVolume> {
        self.labels.organ_masks()
    }
}

pub fn build_phantom(params: &BodyParams, dims: Dims3, spacing: Spacing3) -> Result<PhantomCase> {
    build_phantom_with_id(params, dims, spacing, format!("seed_{}", params.rng_seed))
}

fn build_phantom_with_id(
    params: &BodyParams,
    dims: Dims3,
    spacing: Spacing3,
    case_id: String,
) -> Result<PhantomCase> {
    let sp = [spacing.x as f64, spacing.y as f64, spacing.z as f64];
    let extent = [dims.x as f64 * sp[0], dims.y as f64 * sp[1], dims.z as f64 * sp[2]];
    if dims.y <= TABLE_LAYERS {
        return Err(PhantomError::BodyExceedsGrid(
            "no room above the table".into(),
        ));
    }
    let h = params.height_mm;
    let head_top = extent[2] - HEAD_MARGIN_MM;
    let frame = BodyFrame {
        cx: extent[0] / 2.0,
        table_top: TABLE_LAYERS as f64 * sp[1],
        head_top,
        shoulder: head_top - 0.17 * h,
        crotch: head_top - 0.53 * h,
        outer_w: params.torso_width_mm,
        outer_d: params.torso_depth_mm,
    };
    let blobs = body_blobs(params, &frame);
    // Legs (the last two blobs) may leave through the inferior face only.
    for (i, b) in blobs.iter().enumerate() {
        let legs = i >= blobs.len() - 2;
        let fits = b.lo(0) >= 0.0
            && b.hi(0) <= extent[0]
            && b.lo(1) >= frame.table_top - 1e-9
            && b.hi(1) <= extent[1]
            && b.hi(2) <= extent[2]
            && (legs || b.lo(2) >= 0.0);
        if !fits {
            return Err(PhantomError::BodyExceedsGrid(format!(
                "body part {i} spans [{:.0},{:.0}]x[{:.0},{:.0}]x[{:.0},{:.0}] mm, grid is {:.0}x{:.0}x{:.0} mm",
                b.lo(0), b.hi(0), b.lo(1), b.hi(1), b.lo(2), b.hi(2),
                extent[0], extent[1], extent[2]
            )));
        }
    }
    if frame.crotch < 0.0 {
        return Err(PhantomError::BodyExceedsGrid(
            "pelvis extends below the grid".into(),
        ));
    }

    let n = dims.len();
    let mut body = vec![0u8; n];
    for b in &blobs {
        b.rasterize(dims, sp, |i| body[i] = 1);
    }

    let mut labels = vec![0u8; n];
    for organ in PAINT_ORDER {
        let tag = organ.index() as u8 + 1;
        for b in organ_blobs(organ, params, &frame) {
            b.rasterize(dims, sp, |i| {
                if body[i] != 0 {
                    labels[i] = tag;
                }
            });
        }
    }
    let mut present = [false; N_ORGANS];
    for &l in &labels {
        if l != 0 {
            present[l as usize - 1] = true;
        }
    }
    if let Some(k) = present.iter().position(|&p| !p) {
        return Err(PhantomError::EmptyOrgan(Organ::ALL[k]));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(params.rng_seed ^ 0x6e6f_6973_655f_7631);
    let mut values = vec![0f32; n];
    for k in 0..dims.z {
        for j in 0..dims.y {
            for i in 0..dims.x {
                let idx = dims.index(i, j, k);
                let base = if body[idx] != 0 {
                    match labels[idx] {
                        0 => BODY_INTENSITY,
                        l => BODY_INTENSITY + contrast(Organ::ALL[l as usize - 1]),
                    }
                } else if j < TABLE_LAYERS {
                    TABLE_INTENSITY
                } else {
                    0.0
                };
                values[idx] = base + rng.gen_range(-NOISE_AMPLITUDE..=NOISE_AMPLITUDE);
            }
        }
    }

    Ok(PhantomCase {
        case_id,
        volume: Volume::new(dims, spacing, values)?,
        labels: LabelVolume::new(dims, spacing, labels)?,
        body: BinaryVolume::new(dims, spacing, body)?,
        params: params.clone(),
    })
}

/// SplitMix64 finaliser.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of case `index`: `splitmix64(master_seed ^ splitmix64(index))`.
pub fn case_seed(master_seed: u64, index: usize) -> u64 {
    splitmix64(master_seed ^ splitmix64(index as u64))
}

pub fn case_id(index: usize) -> String {
    format!("case_{index:05}")
}

pub fn volume_path(dir: &Path, case_id: &str) -> PathBuf {
    dir.join(format!("{case_id}.dvol"))
}

pub fn labels_path(dir: &Path, case_id: &str) -> PathBuf {
    dir.join(format!("{case_id}_labels.dvol"))
}

pub const MANIFEST_FILE: &str = "manifest.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub case_id: String,
    pub seed: u64,
    pub height_mm: f64,
    pub torso_width_mm: f64,
    pub torso_depth_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let rows = r.deserialize().collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Self { rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Builds case `index` of a cohort in memory.
pub fn cohort_case(master_seed: u64, index: usize, dims: Dims3, spacing: Spacing3) -> Result<PhantomCase> {
    let params = sample_params(case_seed(master_seed, index));
    build_phantom_with_id(&params, dims, spacing, case_id(index))
}

pub fn generate_cohort(
    n: usize,
    master_seed: u64,
    dims: Dims3,
    spacing: Spacing3,
    out_dir: impl AsRef<Path>,
) -> Result<Manifest> {
    generate_cohort_with(Exec::default(), n, master_seed, dims, spacing, out_dir)
}

pub fn generate_cohort_with(
    exec: Exec,
    n: usize,
    master_seed: u64,
    dims: Dims3,
    spacing: Spacing3,
    out_dir: impl AsRef<Path>,
) -> Result<Manifest> {
    if n == 0 {
        return Err(PhantomError::EmptyCohort);
    }
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir)?;
    let rows = exec.map_range(n, |i| -> Result<ManifestRow> {
        let case = cohort_case(master_seed, i, dims, spacing).map_err(|e| PhantomError::Case {
            case: case_id(i),
            source: Box::new(e),
        })?;
        voldata::write_volume(&case.volume, volume_path(out_dir, &case.case_id))?;
        voldata::write_label_volume(&case.labels, labels_path(out_dir, &case.case_id))?;
        Ok(ManifestRow {
            case_id: case.case_id,
            seed: case.params.rng_seed,
            height_mm: case.params.height_mm,
            torso_width_mm: case.params.torso_width_mm,
            torso_depth_mm: case.params.torso_depth_mm,
        })
    });
    let manifest = Manifest {
        rows: rows.into_iter().collect::<Result<_>>()?,
    };
    manifest.write(out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}
