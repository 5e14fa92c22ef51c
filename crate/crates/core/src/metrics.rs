//! Localization metrics on coronal masks: Dice, average symmetric surface
//! distance, bounding-box detection offset error, percentiles and the
//! Wilcoxon signed-rank test.

use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use thiserror::Error;

use crate::exec::Exec;
use crate::voldata::{Dims2, MaskStack, Spacing2, N_ORGANS};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("mask dims mismatch: {0:?} vs {1:?}")]
    DimsMismatch(Dims2, Dims2),
    #[error("mask is empty")]
    EmptyMask,
    #[error("empty sample")]
    EmptySample,
    #[error("paired samples differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least {needed} non-zero differences, got {found}")]
    TooFewDifferences { needed: usize, found: usize },
    #[error("case lists do not match: {0}")]
    CaseMismatch(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

fn check_len(mask: &[u8], dims: Dims2) -> Result<()> {
    if mask.len() != dims.len() {
        return Err(MetricsError::DimsMismatch(dims, Dims2::new(mask.len(), 1)));
    }
    Ok(())
}

/// `2|A∩B| / (|A| + |B|)`, with two empty masks scoring 1.
pub fn dice(a: &[u8], b: &[u8]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(MetricsError::DimsMismatch(
            Dims2::new(a.len(), 1),
            Dims2::new(b.len(), 1),
        ));
    }
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x != 0, y != 0);
        na += x as usize;
        nb += y as usize;
        inter += (x && y) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// Foreground pixels with at least one 4-neighbour in the background; the
/// outside of the image counts as background. Returned as `(x, z)`.
pub fn boundary(mask: &[u8], dims: Dims2) -> Result<Vec<(usize, usize)>> {
    check_len(mask, dims)?;
    let at = |x: isize, z: isize| {
        x >= 0 && z >= 0 && (x as usize) < dims.w && (z as usize) < dims.h && mask[x as usize + dims.w * z as usize] != 0
    };
    let mut out = Vec::new();
    for z in 0..dims.h {
        for x in 0..dims.w {
            if mask[x + dims.w * z] == 0 {
                continue;
            }
            let (xi, zi) = (x as isize, z as isize);
            if !(at(xi - 1, zi) && at(xi + 1, zi) && at(xi, zi - 1) && at(xi, zi + 1)) {
                out.push((x, z));
            }
        }
    }
    if out.is_empty() {
        return Err(MetricsError::EmptyMask);
    }
    Ok(out)
}

/// Exact 1D squared distance transform (lower envelope of parabolas) with
/// sample positions `i * step`.
fn edt_1d(f: &[f64], step: f64, out: &mut [f64]) {
    let n = f.len();
    let sites: Vec<usize> = (0..n).filter(|&i| f[i].is_finite()).collect();
    if sites.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let pos = |i: usize| i as f64 * step;
    let mut v: Vec<usize> = Vec::with_capacity(sites.len());
    let mut bounds: Vec<f64> = Vec::with_capacity(sites.len() + 1);
    for &q in &sites {
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    bounds.clear();
                    bounds.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&r) => {
                    let s = ((f[q] + pos(q) * pos(q)) - (f[r] + pos(r) * pos(r))) / (2.0 * (pos(q) - pos(r)));
                    if s <= *bounds.last().unwrap() {
                        v.pop();
                        bounds.pop();
                    } else {
                        v.push(q);
                        bounds.push(s);
                        break;
                    }
                }
            }
        }
    }
    let mut k = 0;
    for (i, o) in out.iter_mut().enumerate() {
        let p = pos(i);
        while k + 1 < v.len() && bounds[k + 1] < p {
            k += 1;
        }
        let d = p - pos(v[k]);
        *o = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance (mm^2) from every pixel to the nearest site.
fn squared_distance_map(sites: &[(usize, usize)], dims: Dims2, spacing: Spacing2) -> Vec<f64> {
    let (w, h) = (dims.w, dims.h);
    let mut grid = vec![f64::INFINITY; w * h];
    for &(x, z) in sites {
        grid[x + w * z] = 0.0;
    }
    let mut tmp = vec![0.0; w.max(h)];
    for z in 0..h {
        let row = grid[z * w..(z + 1) * w].to_vec();
        edt_1d(&row, spacing.x as f64, &mut tmp[..w]);
        grid[z * w..(z + 1) * w].copy_from_slice(&tmp[..w]);
    }
    let mut col = vec![0.0; h];
    for x in 0..w {
        for z in 0..h {
            col[z] = grid[x + w * z];
        }
        edt_1d(&col, spacing.z as f64, &mut tmp[..h]);
        for z in 0..h {
            grid[x + w * z] = tmp[z];
        }
    }
    grid
}

fn mean_surface_distance(from: &[(usize, usize)], to_map: &[f64], dims: Dims2) -> f64 {
    from.iter().map(|&(x, z)| to_map[x + dims.w * z].sqrt()).sum::<f64>() / from.len() as f64
}

/// Average symmetric surface distance in millimetres: the mean of the two
/// directed mean boundary-to-boundary distances.
pub fn assd(a: &[u8], b: &[u8], dims: Dims2, spacing: Spacing2) -> Result<f64> {
    check_len(b, dims)?;
    let ba = boundary(a, dims)?;
    let bb = boundary(b, dims)?;
    let da = squared_distance_map(&ba, dims, spacing);
    let db = squared_distance_map(&bb, dims, spacing);
    Ok(0.5 * (mean_surface_distance(&ba, &db, dims) + mean_surface_distance(&bb, &da, dims)))
}

/// Axis-aligned box on the coronal plane, in millimetres. `left/right` run
/// along X, `top/bottom` along Z; pixel edges, not centres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox2D {
    pub left: f64,
    pub right: f64,
    pub top: f64,
    pub bottom: f64,
}

pub fn bbox(mask: &[u8], dims: Dims2, spacing: Spacing2) -> Result<BBox2D> {
    check_len(mask, dims)?;
    let mut ext: Option<(usize, usize, usize, usize)> = None;
    for z in 0..dims.h {
        for x in 0..dims.w {
            if mask[x + dims.w * z] != 0 {
                ext = Some(match ext {
                    None => (x, x, z, z),
                    Some((x0, x1, z0, z1)) => (x0.min(x), x1.max(x), z0.min(z), z1.max(z)),
                });
            }
        }
    }
    let (x0, x1, z0, z1) = ext.ok_or(MetricsError::EmptyMask)?;
    let (sx, sz) = (spacing.x as f64, spacing.z as f64);
    Ok(BBox2D {
        left: x0 as f64 * sx,
        right: (x1 + 1) as f64 * sx,
        top: z0 as f64 * sz,
        bottom: (z1 + 1) as f64 * sz,
    })
}

/// Detection offset error: the largest of the four side offsets.
pub fn doe(gt: &BBox2D, pred: &BBox2D) -> f64 {
    (gt.left - pred.left)
        .abs()
        .max((gt.right - pred.right).abs())
        .max((gt.top - pred.top).abs())
        .max((gt.bottom - pred.bottom).abs())
}

/// Linear-interpolation percentile: rank `1 + q (n - 1)` on the sorted sample.
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(MetricsError::EmptySample);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    Ok(sorted[lo] + frac * (sorted[hi] - sorted[lo]))
}

pub fn percentile95(values: &[f64]) -> Result<f64> {
    percentile(values, 0.95)
}

pub const WILCOXON_MIN_N: usize = 5;
/// Largest non-zero difference count handled by exact enumeration.
pub const WILCOXON_EXACT_MAX_N: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// `min(w_plus, w_minus)`.
    pub statistic: f64,
    pub w_plus: f64,
    pub w_minus: f64,
    /// Number of non-zero differences.
    pub n: usize,
    pub p_value: f64,
    pub exact: bool,
}

/// Average ranks of `values` (1-based), ties sharing the mean rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Two-sided paired Wilcoxon signed-rank test. Zero differences are dropped.
/// For up to [`WILCOXON_EXACT_MAX_N`] differences the null distribution of the
/// positive-rank sum is enumerated exactly and `p = min(1, 2 P(T+ <= W))`;
/// beyond that a normal approximation with tie and continuity corrections is
/// used.
pub fn wilcoxon_signed_rank(x: &[f64], y: &[f64]) -> Result<WilcoxonResult> {
    if x.len() != y.len() {
        return Err(MetricsError::LengthMismatch(x.len(), y.len()));
    }
    let diffs: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).filter(|d| *d != 0.0).collect();
    let n = diffs.len();
    if n < WILCOXON_MIN_N {
        return Err(MetricsError::TooFewDifferences {
            needed: WILCOXON_MIN_N,
            found: n,
        });
    }
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = average_ranks(&abs);
    let w_plus: f64 = diffs.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let w_minus = total - w_plus;
    let statistic = w_plus.min(w_minus);

    let (p_value, exact) = if n <= WILCOXON_EXACT_MAX_N {
        // Doubled ranks are integers even with ties.
        let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
        let max_sum: usize = doubled.iter().sum();
        let mut counts = vec![0u64; max_sum + 1];
        counts[0] = 1;
        for &r in &doubled {
            for s in (r..=max_sum).rev() {
                counts[s] += counts[s - r];
            }
        }
        let limit = (2.0 * statistic).round() as usize;
        let below: u64 = counts[..=limit].iter().sum();
        let p = 2.0 * below as f64 / (1u64 << n) as f64;
        (p.min(1.0), true)
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        let mut tie_term = 0.0;
        let mut sorted = abs.clone();
        sorted.sort_by(|a, b| a.total_cmp(b));
        let mut i = 0;
        while i < sorted.len() {
            let mut j = i;
            while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
                j += 1;
            }
            let t = (j - i + 1) as f64;
            tie_term += t * t * t - t;
            i = j + 1;
        }
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
        let z = ((statistic - mean).abs() - 0.5).max(0.0) / var.sqrt();
        ((erfc(z / std::f64::consts::SQRT_2)).min(1.0), false)
    };
    Ok(WilcoxonResult {
        statistic,
        w_plus,
        w_minus,
        n,
        p_value,
        exact,
    })
}

// ---------------------------------------------------------------------------
// Case-level evaluation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrganRecord {
    pub organ: String,
    pub dice: f64,
    pub assd_mm: Option<f64>,
    pub doe_mm: Option<f64>,
    /// Prediction is non-empty.
    pub detected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseReport {
    pub case_id: String,
    pub organs: Vec<OrganRecord>,
}

impl CaseReport {
    pub fn mean_dice(&self) -> f64 {
        self.organs.iter().map(|o| o.dice).sum::<f64>() / self.organs.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub organ: String,
    pub dice_mean: f64,
    pub dice_std: f64,
    pub assd_mean_mm: Option<f64>,
    pub assd_std_mm: Option<f64>,
    pub doe_p95_mm: Option<f64>,
    pub n_detected: usize,
    pub n_cases: usize,
}

/// Per-organ rows in canonical order plus a pooled row. The pooled Dice and
/// ASSD are mean and standard deviation of the per-organ means; the pooled
/// DOE95 is the mean of the per-organ DOE95 values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub organs: Vec<AggregateRow>,
    pub pooled: AggregateRow,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub reports: Vec<CaseReport>,
    pub aggregate: Aggregate,
}

pub fn evaluate_organ(pred: &[u8], gt: &[u8], dims: Dims2, spacing: Spacing2, organ: &str) -> Result<OrganRecord> {
    let d = dice(pred, gt)?;
    let detected = pred.iter().any(|&v| v != 0);
    let gt_present = gt.iter().any(|&v| v != 0);
    let (assd_mm, doe_mm) = if detected && gt_present {
        (
            Some(assd(pred, gt, dims, spacing)?),
            Some(doe(&bbox(gt, dims, spacing)?, &bbox(pred, dims, spacing)?)),
        )
    } else {
        (None, None)
    };
    Ok(OrganRecord {
        organ: organ.to_string(),
        dice: d,
        assd_mm,
        doe_mm,
        detected,
    })
}

pub fn evaluate_case(case_id: &str, pred: &MaskStack, gt: &MaskStack) -> Result<CaseReport> {
    if pred.dims() != gt.dims() {
        return Err(MetricsError::DimsMismatch(pred.dims(), gt.dims()));
    }
    if pred.names() != gt.names() {
        return Err(MetricsError::CaseMismatch(format!("{case_id}: organ lists differ")));
    }
    let organs = (0..gt.n_channels())
        .map(|c| evaluate_organ(pred.channel(c), gt.channel(c), gt.dims(), gt.spacing(), &gt.names()[c]))
        .collect::<Result<_>>()?;
    Ok(CaseReport {
        case_id: case_id.to_string(),
        organs,
    })
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn opt(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

pub fn aggregate(reports: &[CaseReport]) -> Result<Aggregate> {
    let first = reports.first().ok_or(MetricsError::EmptySample)?;
    let names: Vec<String> = first.organs.iter().map(|o| o.organ.clone()).collect();
    let mut rows = Vec::with_capacity(names.len());
    for (k, name) in names.iter().enumerate() {
        let recs: Vec<&OrganRecord> = reports.iter().map(|r| &r.organs[k]).collect();
        let dices: Vec<f64> = recs.iter().map(|r| r.dice).collect();
        let assds: Vec<f64> = recs.iter().filter_map(|r| r.assd_mm).collect();
        let does: Vec<f64> = recs.iter().filter_map(|r| r.doe_mm).collect();
        let (dice_mean, dice_std) = mean_std(&dices);
        let (assd_mean, assd_std) = mean_std(&assds);
        rows.push(AggregateRow {
            organ: name.clone(),
            dice_mean,
            dice_std,
            assd_mean_mm: opt(assd_mean),
            assd_std_mm: opt(assd_std),
            doe_p95_mm: percentile95(&does).ok(),
            n_detected: recs.iter().filter(|r| r.detected).count(),
            n_cases: recs.len(),
        });
    }
    let organ_dice: Vec<f64> = rows.iter().map(|r| r.dice_mean).collect();
    let organ_assd: Vec<f64> = rows.iter().filter_map(|r| r.assd_mean_mm).collect();
    let (dice_mean, dice_std) = mean_std(&organ_dice);
    let (assd_mean, assd_std) = mean_std(&organ_assd);
    let organ_doe: Vec<f64> = rows.iter().filter_map(|r| r.doe_p95_mm).collect();
    let pooled = AggregateRow {
        organ: "pooled".into(),
        dice_mean,
        dice_std,
        assd_mean_mm: opt(assd_mean),
        assd_std_mm: opt(assd_std),
        doe_p95_mm: opt(mean_std(&organ_doe).0),
        n_detected: rows.iter().map(|r| r.n_detected).sum(),
        n_cases: rows.iter().map(|r| r.n_cases).sum(),
    };
    Ok(Aggregate { organs: rows, pooled })
}

pub fn evaluate_cases(case_ids: &[String], preds: &[MaskStack], gts: &[MaskStack]) -> Result<Evaluation> {
    evaluate_cases_with(Exec::default(), case_ids, preds, gts)
}

pub fn evaluate_cases_with(exec: Exec, case_ids: &[String], preds: &[MaskStack], gts: &[MaskStack]) -> Result<Evaluation> {
    if preds.len() != gts.len() || case_ids.len() != gts.len() {
        return Err(MetricsError::CaseMismatch(format!(
            "{} ids, {} predictions, {} ground truths",
            case_ids.len(),
            preds.len(),
            gts.len()
        )));
    }
    if gts.is_empty() {
        return Err(MetricsError::EmptySample);
    }
    let reports = exec
        .map_range(gts.len(), |i| evaluate_case(&case_ids[i], &preds[i], &gts[i]))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let aggregate = aggregate(&reports)?;
    Ok(Evaluation { reports, aggregate })
}

/// Pixelwise frequency of each organ over `gts`, thresholded at 0.5: the
/// best constant prediction that ignores the input.
pub fn mean_mask_baseline(gts: &[MaskStack]) -> Result<MaskStack> {
    let first = gts.first().ok_or(MetricsError::EmptySample)?;
    let dims = first.dims();
    let mut counts = vec![vec![0usize; dims.len()]; first.n_channels()];
    for g in gts {
        if g.dims() != dims {
            return Err(MetricsError::DimsMismatch(dims, g.dims()));
        }
        for (c, ch) in g.channels().iter().enumerate() {
            for (acc, &v) in counts[c].iter_mut().zip(ch) {
                *acc += v as usize;
            }
        }
    }
    let n = gts.len();
    let channels = counts
        .into_iter()
        .map(|ch| ch.into_iter().map(|k| (2 * k > n) as u8).collect())
        .collect();
    MaskStack::new(dims, first.spacing(), first.names().to_vec(), channels)
        .map_err(|e| MetricsError::CaseMismatch(e.to_string()))
}

#[derive(Debug, Serialize)]
struct CsvRow<'a> {
    case_id: &'a str,
    organ: &'a str,
    dice: f64,
    assd_mm: Option<f64>,
    doe_mm: Option<f64>,
    detected: bool,
}

/// Per-case report CSV: `case_id,organ,dice,assd_mm,doe_mm,detected`.
pub fn write_case_reports(reports: &[CaseReport], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in reports {
        for o in &r.organs {
            w.serialize(CsvRow {
                case_id: &r.case_id,
                organ: &o.organ,
                dice: o.dice,
                assd_mm: o.assd_mm,
                doe_mm: o.doe_mm,
                detected: o.detected,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn n_organ_rows(agg: &Aggregate) -> usize {
    debug_assert!(agg.organs.len() <= N_ORGANS);
    agg.organs.len()
}
