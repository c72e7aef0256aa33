//! Segmentation evaluation: Dice overlap, absolute volume difference,
//! Hausdorff distances (max and percentile variants), and average surface
//! distance, over one-vs-rest class masks.
//!
//! Boundary extraction uses 6-neighborhood face adjacency with the volume
//! border counting as background, and point coordinates are voxel indices
//! scaled by the spacing in mm. The percentile Hausdorff uses the
//! nearest-rank method on each directed distance multiset, then the max of
//! the two directed values. ASD is directed reference-to-automatic; a
//! symmetrized mean-of-both-directions variant is available separately.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::LabelVolume;

/// A binary 3-D mask with voxel spacing, the operand of every metric here.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(dims: [usize; 3], spacing_mm: [f64; 3], data: Vec<bool>) -> Result<Self> {
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "mask has {} voxels but dims {:?} need {}",
                data.len(),
                dims,
                n
            )));
        }
        Ok(BinaryMask { dims, spacing_mm, data })
    }

    /// One-vs-rest mask of a single class.
    pub fn from_labels(labels: &LabelVolume, class: u8) -> Self {
        BinaryMask {
            dims: labels.dims,
            spacing_mm: labels.spacing_mm,
            data: labels.data.iter().map(|&v| v == class).collect(),
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    #[inline]
    fn at(&self, z: usize, y: usize, x: usize) -> bool {
        self.data[(z * self.dims[1] + y) * self.dims[2] + x]
    }
}

fn check_pair(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if a.dims != b.dims {
        return Err(Error::ShapeMismatch(format!("mask dims differ: {:?} vs {:?}", a.dims, b.dims)));
    }
    if a.spacing_mm != b.spacing_mm {
        return Err(Error::ShapeMismatch(format!(
            "mask spacings differ: {:?} vs {:?}",
            a.spacing_mm, b.spacing_mm
        )));
    }
    Ok(())
}

/// Dice similarity coefficient `2|A∩B| / (|A| + |B|)`, in [0, 1]. Two empty
/// masks count as a perfect match (1) by convention.
pub fn dsc(reference: &BinaryMask, automatic: &BinaryMask) -> Result<f64> {
    check_pair(reference, automatic)?;
    let mut inter = 0usize;
    let mut total = 0usize;
    for (r, a) in reference.data.iter().zip(&automatic.data) {
        inter += usize::from(*r && *a);
        total += usize::from(*r) + usize::from(*a);
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Absolute volume difference as a percentage of the reference volume.
pub fn avd(reference: &BinaryMask, automatic: &BinaryMask) -> Result<f64> {
    check_pair(reference, automatic)?;
    let vr = reference.count();
    if vr == 0 {
        return Err(Error::MetricUndefined("AVD needs a non-empty reference mask".into()));
    }
    let va = automatic.count();
    Ok((vr as f64 - va as f64).abs() / vr as f64 * 100.0)
}

/// Boundary voxel centers of a segmentation, in mm.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryPointSet {
    pub points: Vec<[f64; 3]>,
}

/// Foreground voxels with at least one of their 6 face-neighbors background;
/// the volume border counts as background. Coordinates are voxel indices
/// scaled by the mask spacing.
pub fn extract_boundary(mask: &BinaryMask) -> Result<BoundaryPointSet> {
    if mask.spacing_mm.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::InvalidConfig(format!("voxel spacing must be positive, got {:?}", mask.spacing_mm)));
    }
    if mask.is_empty() {
        return Err(Error::MetricUndefined("cannot extract the boundary of an empty mask".into()));
    }
    let [d, h, w] = mask.dims;
    let [sz, sy, sx] = mask.spacing_mm;
    let mut points = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if !mask.at(z, y, x) {
                    continue;
                }
                let exposed = (z == 0 || !mask.at(z - 1, y, x))
                    || (z + 1 == d || !mask.at(z + 1, y, x))
                    || (y == 0 || !mask.at(z, y - 1, x))
                    || (y + 1 == h || !mask.at(z, y + 1, x))
                    || (x == 0 || !mask.at(z, y, x - 1))
                    || (x + 1 == w || !mask.at(z, y, x + 1));
                if exposed {
                    points.push([z as f64 * sz, y as f64 * sy, x as f64 * sx]);
                }
            }
        }
    }
    Ok(BoundaryPointSet { points })
}

/// Static 3-D KD-tree for nearest-neighbor distances.
struct KdTree {
    /// Points permuted into tree order: node i's children are the subtree
    /// bounds tracked during the query, so only the permuted storage plus the
    /// splitting structure is needed.
    pts: Vec<[f64; 3]>,
}

impl KdTree {
    fn build(points: &[[f64; 3]]) -> Self {
        let mut pts = points.to_vec();
        let n = pts.len();
        Self::sort_range(&mut pts, 0, n, 0);
        KdTree { pts }
    }

    /// Arrange `pts[lo..hi]` so the median by `axis` sits at the midpoint,
    /// recursing into both halves with the next axis: an implicit balanced
    /// tree addressed by range midpoints.
    fn sort_range(pts: &mut [[f64; 3]], lo: usize, hi: usize, axis: usize) {
        if hi - lo <= 1 {
            return;
        }
        let mid = (lo + hi) / 2;
        pts[lo..hi].select_nth_unstable_by(mid - lo, |a, b| a[axis].total_cmp(&b[axis]));
        let next = (axis + 1) % 3;
        Self::sort_range(pts, lo, mid, next);
        Self::sort_range(pts, mid + 1, hi, next);
    }

    /// Squared Euclidean distance from `q` to the nearest stored point.
    fn nearest_sq(&self, q: [f64; 3]) -> f64 {
        let mut best = f64::INFINITY;
        self.query(q, 0, self.pts.len(), 0, &mut best);
        best
    }

    fn query(&self, q: [f64; 3], lo: usize, hi: usize, axis: usize, best: &mut f64) {
        if lo >= hi {
            return;
        }
        let mid = (lo + hi) / 2;
        let p = self.pts[mid];
        let d2 = (q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2) + (q[2] - p[2]).powi(2);
        if d2 < *best {
            *best = d2;
        }
        let next = (axis + 1) % 3;
        let delta = q[axis] - p[axis];
        let (first_lo, first_hi, second_lo, second_hi) =
            if delta < 0.0 { (lo, mid, mid + 1, hi) } else { (mid + 1, hi, lo, mid) };
        self.query(q, first_lo, first_hi, next, best);
        if delta * delta < *best {
            self.query(q, second_lo, second_hi, next, best);
        }
    }
}

/// All nearest-neighbor distances from the points of `from` to the set `to`.
fn directed_distances(from: &BoundaryPointSet, to: &BoundaryPointSet) -> Vec<f64> {
    let tree = KdTree::build(&to.points);
    from.points.par_iter().map(|&q| tree.nearest_sq(q).sqrt()).collect()
}

/// Nearest-rank percentile of an unsorted multiset (p in (0, 100]).
fn nearest_rank(values: &mut [f64], p: f64) -> f64 {
    debug_assert!(!values.is_empty());
    values.sort_unstable_by(f64::total_cmp);
    let n = values.len();
    let rank = ((p / 100.0) * n as f64).ceil() as usize;
    values[rank.clamp(1, n) - 1]
}

/// Which Hausdorff distance to compute.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum HausdorffVariant {
    /// Classic maximum of the two directed maxima.
    Max,
    /// Replace each directed maximum with the p-th percentile (nearest rank)
    /// of that direction's distance multiset, then take the max of the two.
    Percentile(f64),
}

/// Hausdorff distance between two boundary point sets, in mm.
pub fn hausdorff(a: &BoundaryPointSet, b: &BoundaryPointSet, variant: HausdorffVariant) -> Result<f64> {
    if a.points.is_empty() || b.points.is_empty() {
        return Err(Error::MetricUndefined("Hausdorff distance needs two non-empty point sets".into()));
    }
    if let HausdorffVariant::Percentile(p) = variant {
        if !(p > 0.0 && p <= 100.0) {
            return Err(Error::InvalidConfig(format!("percentile must lie in (0, 100], got {p}")));
        }
    }
    let mut d_ab = directed_distances(a, b);
    let mut d_ba = directed_distances(b, a);
    let (va, vb) = match variant {
        HausdorffVariant::Max => (
            d_ab.iter().copied().fold(0.0, f64::max),
            d_ba.iter().copied().fold(0.0, f64::max),
        ),
        HausdorffVariant::Percentile(p) => (nearest_rank(&mut d_ab, p), nearest_rank(&mut d_ba, p)),
    };
    Ok(va.max(vb))
}

/// Directed average surface distance: the mean nearest-neighbor distance
/// from every reference boundary point to the automatic boundary, in mm.
pub fn asd(reference: &BoundaryPointSet, automatic: &BoundaryPointSet) -> Result<f64> {
    if reference.points.is_empty() || automatic.points.is_empty() {
        return Err(Error::MetricUndefined("ASD needs two non-empty point sets".into()));
    }
    let d = directed_distances(reference, automatic);
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

/// Symmetrized variant: the mean of the two directed averages.
pub fn asd_symmetric(a: &BoundaryPointSet, b: &BoundaryPointSet) -> Result<f64> {
    Ok((asd(a, b)? + asd(b, a)?) / 2.0)
}

/// All metrics of one class, `None` where undefined for these masks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: u8,
    pub dsc: Option<f64>,
    pub mhd: Option<f64>,
    pub mhd95: Option<f64>,
    pub asd: Option<f64>,
    pub avd: Option<f64>,
}

/// Per-class evaluation of one subject.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub subject: String,
    pub classes: Vec<ClassMetrics>,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "subject,class,dsc,mhd,mhd95,asd,avd";

    /// One CSV line per class; undefined values print as `NA`.
    pub fn csv_rows(&self) -> Vec<String> {
        fn cell(v: Option<f64>) -> String {
            v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
        }
        self.classes
            .iter()
            .map(|c| {
                format!(
                    "{},{},{},{},{},{},{}",
                    self.subject,
                    c.class,
                    cell(c.dsc),
                    cell(c.mhd),
                    cell(c.mhd95),
                    cell(c.asd),
                    cell(c.avd)
                )
            })
            .collect()
    }
}

/// Evaluate every foreground class (1 .. `classes`) one-vs-rest.
///
/// A class absent from both volumes yields a row of `None`s; boundary
/// metrics are `None` whenever either mask is empty, and AVD whenever the
/// reference is empty. `symmetric_asd` selects the symmetrized surface
/// distance instead of the directed reference-to-automatic form.
pub fn evaluate(
    subject: &str,
    reference: &LabelVolume,
    prediction: &LabelVolume,
    classes: usize,
    symmetric_asd: bool,
) -> Result<MetricReport> {
    if reference.dims != prediction.dims {
        return Err(Error::ShapeMismatch(format!(
            "label volumes differ in shape: {:?} vs {:?}",
            reference.dims, prediction.dims
        )));
    }
    if reference.spacing_mm != prediction.spacing_mm {
        return Err(Error::ShapeMismatch(format!(
            "label volumes differ in spacing: {:?} vs {:?}",
            reference.spacing_mm, prediction.spacing_mm
        )));
    }
    if classes < 2 {
        return Err(Error::InvalidConfig("evaluation needs at least two classes".into()));
    }
    let rows = (1..classes as u8)
        .map(|class| {
            let mask_ref = BinaryMask::from_labels(reference, class);
            let mask_auto = BinaryMask::from_labels(prediction, class);
            let ref_empty = mask_ref.is_empty();
            let auto_empty = mask_auto.is_empty();
            if ref_empty && auto_empty {
                return Ok(ClassMetrics { class, dsc: None, mhd: None, mhd95: None, asd: None, avd: None });
            }
            let dice = Some(dsc(&mask_ref, &mask_auto)?);
            let volume = if ref_empty { None } else { Some(avd(&mask_ref, &mask_auto)?) };
            let (mhd, mhd95, surface) = if ref_empty || auto_empty {
                (None, None, None)
            } else {
                let b_ref = extract_boundary(&mask_ref)?;
                let b_auto = extract_boundary(&mask_auto)?;
                let h = hausdorff(&b_ref, &b_auto, HausdorffVariant::Max)?;
                let h95 = hausdorff(&b_ref, &b_auto, HausdorffVariant::Percentile(95.0))?;
                let s = if symmetric_asd { asd_symmetric(&b_ref, &b_auto)? } else { asd(&b_ref, &b_auto)? };
                (Some(h), Some(h95), Some(s))
            };
            Ok(ClassMetrics { class, dsc: dice, mhd, mhd95, asd: surface, avd: volume })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport { subject: subject.to_string(), classes: rows })
}
