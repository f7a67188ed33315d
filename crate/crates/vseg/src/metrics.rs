//! Region-wise segmentation quality metrics: Dice overlap and percentile
//! Hausdorff distance in millimeters.
//!
//! Hausdorff distances are measured between mask boundaries (a voxel is
//! boundary if it lies in the mask and has a 6-neighbor outside it, grid
//! edges counting as outside), voxel center to voxel center, scaled by the
//! physical spacing. Distance fields come from a separable lower-envelope
//! transform, so full volumes stay O(n) per axis rather than all-pairs.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::volio::{extract_region, LabelMap, Mask, Region, RegionName};

/// Reported when one mask is empty and the other is not, keeping aggregate
/// means finite. The value is the conventional miss penalty for this task
/// family.
pub const MISSING_REGION_HD: f64 = 373.13;

/// Default Hausdorff percentile.
pub const DEFAULT_HD_PERCENTILE: f64 = 95.0;

#[derive(Debug)]
pub enum MetricError {
    Shape(String),
    Parameter(String),
}

impl fmt::Display for MetricError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricError::Shape(m) => write!(f, "shape error: {m}"),
            MetricError::Parameter(m) => write!(f, "parameter error: {m}"),
        }
    }
}

impl std::error::Error for MetricError {}

/// Dice overlap `2|A∩B| / (|A|+|B|)`; two empty masks score 1.0, so
/// correctly predicting an absent region is rewarded.
pub fn dice(pred: &Mask, gt: &Mask) -> Result<f64, MetricError> {
    if pred.dims != gt.dims {
        return Err(MetricError::Shape(format!(
            "dice: mask dims {:?} vs {:?}",
            pred.dims, gt.dims
        )));
    }
    let mut inter = 0usize;
    let mut total = 0usize;
    for (&a, &b) in pred.data.iter().zip(&gt.data) {
        inter += (a && b) as usize;
        total += a as usize + b as usize;
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Symmetric percentile Hausdorff distance between mask boundaries, in mm.
///
/// `percentile` must lie in (0, 100]; 100 gives the classical Hausdorff
/// distance, the default of 95 the robust variant. Both directions are
/// reduced at the percentile and the larger one is returned. Two empty
/// masks give 0; exactly one empty mask gives [`MISSING_REGION_HD`].
pub fn hausdorff(
    pred: &Mask,
    gt: &Mask,
    spacing: [f64; 3],
    percentile: f64,
) -> Result<f64, MetricError> {
    if pred.dims != gt.dims {
        return Err(MetricError::Shape(format!(
            "hausdorff: mask dims {:?} vs {:?}",
            pred.dims, gt.dims
        )));
    }
    if !(percentile > 0.0 && percentile <= 100.0) {
        return Err(MetricError::Parameter(format!(
            "percentile must be in (0, 100], got {percentile}"
        )));
    }
    if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(MetricError::Parameter(format!(
            "spacing must be positive and finite, got {spacing:?}"
        )));
    }
    match (pred.is_empty(), gt.is_empty()) {
        (true, true) => return Ok(0.0),
        (true, false) | (false, true) => return Ok(MISSING_REGION_HD),
        (false, false) => {}
    }

    let ba = boundary(pred);
    let bb = boundary(gt);
    let field_b = squared_distance_field(&bb, pred.dims, spacing);
    let field_a = squared_distance_field(&ba, pred.dims, spacing);

    let dims = pred.dims;
    let off = |p: &[usize; 3]| (p[2] * dims[1] + p[1]) * dims[0] + p[0];
    let mut d_ab: Vec<f64> = ba.iter().map(|p| field_b[off(p)].sqrt()).collect();
    let mut d_ba: Vec<f64> = bb.iter().map(|p| field_a[off(p)].sqrt()).collect();
    Ok(percentile_of(&mut d_ab, percentile).max(percentile_of(&mut d_ba, percentile)))
}

/// Boundary voxels: in the mask with some 6-neighbor outside it (or outside
/// the grid).
fn boundary(mask: &Mask) -> Vec<[usize; 3]> {
    let [nx, ny, nz] = mask.dims;
    let mut out = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if !mask.at(x, y, z) {
                    continue;
                }
                let exposed = (x == 0 || !mask.at(x - 1, y, z))
                    || (x + 1 == nx || !mask.at(x + 1, y, z))
                    || (y == 0 || !mask.at(x, y - 1, z))
                    || (y + 1 == ny || !mask.at(x, y + 1, z))
                    || (z == 0 || !mask.at(x, y, z - 1))
                    || (z + 1 == nz || !mask.at(x, y, z + 1));
                if exposed {
                    out.push([x, y, z]);
                }
            }
        }
    }
    out
}

// Finite stand-in for infinity; keeps the envelope arithmetic NaN-free even
// for lanes with no sites.
const FAR: f64 = 1e30;

/// Squared Euclidean distance (mm²) from every voxel to the nearest point in
/// `sites`, by three passes of the 1D lower-envelope transform.
fn squared_distance_field(sites: &[[usize; 3]], dims: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let [nx, ny, nz] = dims;
    let n = nx * ny * nz;
    let mut field = vec![FAR; n];
    for p in sites {
        field[(p[2] * ny + p[1]) * nx + p[0]] = 0.0;
    }
    let max_extent = nx.max(ny).max(nz);
    let mut f = vec![0.0; max_extent];
    let mut d = vec![0.0; max_extent];
    let mut v = vec![0usize; max_extent];
    let mut z = vec![0.0; max_extent + 1];

    // X lanes.
    for zz in 0..nz {
        for yy in 0..ny {
            let base = (zz * ny + yy) * nx;
            f[..nx].copy_from_slice(&field[base..base + nx]);
            envelope_1d(&f[..nx], spacing[0], &mut d, &mut v, &mut z);
            field[base..base + nx].copy_from_slice(&d[..nx]);
        }
    }
    // Y lanes.
    for zz in 0..nz {
        for xx in 0..nx {
            for yy in 0..ny {
                f[yy] = field[(zz * ny + yy) * nx + xx];
            }
            envelope_1d(&f[..ny], spacing[1], &mut d, &mut v, &mut z);
            for yy in 0..ny {
                field[(zz * ny + yy) * nx + xx] = d[yy];
            }
        }
    }
    // Z lanes.
    for yy in 0..ny {
        for xx in 0..nx {
            for zz in 0..nz {
                f[zz] = field[(zz * ny + yy) * nx + xx];
            }
            envelope_1d(&f[..nz], spacing[2], &mut d, &mut v, &mut z);
            for zz in 0..nz {
                field[(zz * ny + yy) * nx + xx] = d[zz];
            }
        }
    }
    field
}

/// One pass of the lower-envelope distance transform:
/// `d[q] = min_p f[p] + (w·(q-p))²` with sample pitch `w`.
fn envelope_1d(f: &[f64], w: f64, d: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    if n == 1 {
        d[0] = f[0];
        return;
    }
    let mut k = 0usize;
    v[0] = 0;
    z[0] = -FAR;
    z[1] = FAR;
    for q in 1..n {
        let xq = q as f64 * w;
        loop {
            let p = v[k];
            let xp = p as f64 * w;
            // Intersection of the parabolas rooted at p and q.
            let s = ((f[q] + xq * xq) - (f[p] + xp * xp)) / (2.0 * (xq - xp));
            if s <= z[k] {
                if k == 0 {
                    // q dominates the whole envelope so far.
                    v[0] = q;
                    z[0] = -FAR;
                    z[1] = FAR;
                    break;
                }
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = FAR;
                break;
            }
        }
    }
    k = 0;
    for q in 0..n {
        let xq = q as f64 * w;
        while z[k + 1] < xq {
            k += 1;
        }
        let dx = xq - v[k] as f64 * w;
        d[q] = f[v[k]] + dx * dx;
    }
    // Clamp lanes with no sites back to FAR so later passes treat them as
    // empty rather than astronomically large but finite-squared.
    for q in 0..n {
        if d[q] > FAR {
            d[q] = FAR;
        }
    }
}

/// Percentile with linear interpolation between order statistics:
/// `h = p/100 · (n-1)`, interpolating `sorted[floor h]` and `sorted[ceil h]`.
/// `p = 100` is the maximum.
fn percentile_of(values: &mut [f64], p: f64) -> f64 {
    debug_assert!(!values.is_empty());
    values.sort_by(|a, b| a.partial_cmp(b).expect("distances are finite"));
    let h = p / 100.0 * (values.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    values[lo] + (h - lo as f64) * (values[hi] - values[lo])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionScore {
    pub region: RegionName,
    pub dice: f64,
    /// Millimeters, or [`MISSING_REGION_HD`] when exactly one mask is empty.
    pub hd: f64,
}

/// Scores for one subject across the three nested tumor regions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectReport {
    pub subject_id: String,
    /// Which Hausdorff percentile the `hd` fields used.
    pub hd_percentile: f64,
    pub scores: [RegionScore; 3],
    pub mean_dice: f64,
    pub mean_hd: f64,
}

/// Scores `pred` against `gt` on the ET, TC, and WT regions.
pub fn evaluate_subject(
    subject_id: &str,
    pred: &LabelMap,
    gt: &LabelMap,
    spacing: [f64; 3],
    percentile: f64,
) -> Result<SubjectReport, MetricError> {
    if pred.dims() != gt.dims() {
        return Err(MetricError::Shape(format!(
            "evaluate: prediction dims {:?} vs ground truth {:?}",
            pred.dims(),
            gt.dims()
        )));
    }
    let mut scores = Vec::with_capacity(3);
    for region in Region::all() {
        let pm = extract_region(pred, &region);
        let gm = extract_region(gt, &region);
        scores.push(RegionScore {
            region: region.name,
            dice: dice(&pm, &gm)?,
            hd: hausdorff(&pm, &gm, spacing, percentile)?,
        });
    }
    let mean_dice = scores.iter().map(|s| s.dice).sum::<f64>() / 3.0;
    let mean_hd = scores.iter().map(|s| s.hd).sum::<f64>() / 3.0;
    Ok(SubjectReport {
        subject_id: subject_id.to_owned(),
        hd_percentile: percentile,
        scores: [scores[0], scores[1], scores[2]],
        mean_dice,
        mean_hd,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask(dims: [usize; 3], points: &[[usize; 3]]) -> Mask {
        let mut data = vec![false; dims[0] * dims[1] * dims[2]];
        for p in points {
            data[(p[2] * dims[1] + p[1]) * dims[0] + p[0]] = true;
        }
        Mask { dims, data }
    }

    #[test]
    fn identical_masks_are_perfect() {
        let m = mask([4, 4, 4], &[[1, 1, 1], [2, 1, 1], [1, 2, 3]]);
        assert_eq!(dice(&m, &m).unwrap(), 1.0);
        assert_eq!(hausdorff(&m, &m, [1.0; 3], 100.0).unwrap(), 0.0);
    }

    #[test]
    fn disjoint_masks_have_zero_dice() {
        let a = mask([4, 4, 4], &[[0, 0, 0]]);
        let b = mask([4, 4, 4], &[[3, 3, 3]]);
        assert_eq!(dice(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn half_overlap_scores_half() {
        // |A| = 2, |B| = 2, |A n B| = 1 -> 2*1/(2+2).
        let a = mask([4, 1, 1], &[[0, 0, 0], [1, 0, 0]]);
        let b = mask([4, 1, 1], &[[1, 0, 0], [2, 0, 0]]);
        assert_eq!(dice(&a, &b).unwrap(), 0.5);
    }

    #[test]
    fn empty_conventions() {
        let e = mask([3, 3, 3], &[]);
        let m = mask([3, 3, 3], &[[1, 1, 1]]);
        assert_eq!(dice(&e, &e).unwrap(), 1.0);
        assert_eq!(hausdorff(&e, &e, [1.0; 3], 95.0).unwrap(), 0.0);
        assert_eq!(hausdorff(&e, &m, [1.0; 3], 95.0).unwrap(), MISSING_REGION_HD);
        assert_eq!(hausdorff(&m, &e, [1.0; 3], 95.0).unwrap(), MISSING_REGION_HD);
    }

    #[test]
    fn three_four_five_is_exactly_five() {
        let a = mask([5, 6, 2], &[[0, 0, 0]]);
        let b = mask([5, 6, 2], &[[3, 4, 0]]);
        assert_eq!(hausdorff(&a, &b, [1.0; 3], 100.0).unwrap(), 5.0);
    }

    #[test]
    fn spacing_scales_distances() {
        let a = mask([1, 1, 5], &[[0, 0, 0]]);
        let b = mask([1, 1, 5], &[[0, 0, 3]]);
        let d = hausdorff(&a, &b, [1.0, 1.0, 2.5], 100.0).unwrap();
        assert!((d - 7.5).abs() < 1e-12);
    }

    #[test]
    fn mismatched_shapes_and_bad_percentiles_error() {
        let a = mask([2, 2, 2], &[[0, 0, 0]]);
        let b = mask([3, 2, 2], &[[0, 0, 0]]);
        assert!(matches!(dice(&a, &b), Err(MetricError::Shape(_))));
        assert!(matches!(
            hausdorff(&a, &b, [1.0; 3], 95.0),
            Err(MetricError::Shape(_))
        ));
        assert!(matches!(
            hausdorff(&a, &a, [1.0; 3], 0.0),
            Err(MetricError::Parameter(_))
        ));
        assert!(matches!(
            hausdorff(&a, &a, [1.0; 3], 100.5),
            Err(MetricError::Parameter(_))
        ));
    }

    // Independent all-pairs oracle: brute-force nearest boundary distance,
    // with its own boundary scan and percentile arithmetic.
    fn brute_force_hd(a: &Mask, b: &Mask, spacing: [f64; 3], p: f64) -> f64 {
        fn bnd(m: &Mask) -> Vec<[i64; 3]> {
            let [nx, ny, nz] = m.dims;
            let mut out = Vec::new();
            for z in 0..nz {
                for y in 0..ny {
                    for x in 0..nx {
                        if !m.at(x, y, z) {
                            continue;
                        }
                        let mut exposed = false;
                        for (dx, dy, dz) in
                            [(1i64, 0i64, 0i64), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
                        {
                            let (qx, qy, qz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                            let inside = qx >= 0
                                && qy >= 0
                                && qz >= 0
                                && (qx as usize) < nx
                                && (qy as usize) < ny
                                && (qz as usize) < nz
                                && m.at(qx as usize, qy as usize, qz as usize);
                            if !inside {
                                exposed = true;
                            }
                        }
                        if exposed {
                            out.push([x as i64, y as i64, z as i64]);
                        }
                    }
                }
            }
            out
        }
        fn directed(from: &[[i64; 3]], to: &[[i64; 3]], sp: [f64; 3], p: f64) -> f64 {
            let mut dists: Vec<f64> = from
                .iter()
                .map(|a| {
                    to.iter()
                        .map(|b| {
                            let dx = (a[0] - b[0]) as f64 * sp[0];
                            let dy = (a[1] - b[1]) as f64 * sp[1];
                            let dz = (a[2] - b[2]) as f64 * sp[2];
                            (dx * dx + dy * dy + dz * dz).sqrt()
                        })
                        .fold(f64::INFINITY, f64::min)
                })
                .collect();
            dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let h = p / 100.0 * (dists.len() - 1) as f64;
            let (lo, hi) = (h.floor() as usize, h.ceil() as usize);
            dists[lo] + (h - lo as f64) * (dists[hi] - dists[lo])
        }
        let (ba, bb) = (bnd(a), bnd(b));
        directed(&ba, &bb, spacing, p).max(directed(&bb, &ba, spacing, p))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]
        #[test]
        fn hausdorff_matches_all_pairs_oracle(
            seed in 0u64..10_000,
            nx in 2usize..9, ny in 2usize..9, nz in 2usize..9,
            p in prop_oneof![Just(95.0), Just(100.0), 30.0f64..100.0],
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
            let n = nx * ny * nz;
            let a = Mask { dims: [nx, ny, nz], data: (0..n).map(|_| rng.random_bool(0.3)).collect() };
            let b = Mask { dims: [nx, ny, nz], data: (0..n).map(|_| rng.random_bool(0.3)).collect() };
            prop_assume!(!a.is_empty() && !b.is_empty());
            let spacing = [1.0, 0.5 + rng.random::<f64>(), 0.5 + rng.random::<f64>()];
            let fast = hausdorff(&a, &b, spacing, p).unwrap();
            let slow = brute_force_hd(&a, &b, spacing, p);
            prop_assert!((fast - slow).abs() < 1e-9, "fast {fast} vs brute force {slow}");
            // Symmetry and percentile ordering.
            let rev = hausdorff(&b, &a, spacing, p).unwrap();
            prop_assert_eq!(fast, rev);
            let h95 = hausdorff(&a, &b, spacing, 95.0).unwrap();
            let h100 = hausdorff(&a, &b, spacing, 100.0).unwrap();
            prop_assert!(h95 <= h100 + 1e-12);
        }

        #[test]
        fn dice_matches_set_counting(seed in 0u64..10_000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
            let dims = [5usize, 4, 3];
            let n = 60;
            let a = Mask { dims, data: (0..n).map(|_| rng.random_bool(0.4)).collect() };
            let b = Mask { dims, data: (0..n).map(|_| rng.random_bool(0.4)).collect() };
            let inter = a.data.iter().zip(&b.data).filter(|(x, y)| **x && **y).count();
            let expected = if a.count() + b.count() == 0 {
                1.0
            } else {
                2.0 * inter as f64 / (a.count() + b.count()) as f64
            };
            prop_assert_eq!(dice(&a, &b).unwrap(), expected);
            prop_assert_eq!(dice(&a, &b).unwrap(), dice(&b, &a).unwrap());
        }
    }

    fn sphere_mask(dims: [usize; 3], center: [f64; 3], r: f64) -> Mask {
        let mut data = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let d2 = (x as f64 - center[0]).powi(2)
                        + (y as f64 - center[1]).powi(2)
                        + (z as f64 - center[2]).powi(2);
                    data.push(d2 <= r * r);
                }
            }
        }
        Mask { dims, data }
    }

    #[test]
    fn eroding_a_matching_sphere_never_improves_dice() {
        let gt = sphere_mask([16, 16, 16], [8.0, 8.0, 8.0], 5.0);
        let mut last = 1.0;
        for shrink in 0..5 {
            let pred = sphere_mask([16, 16, 16], [8.0, 8.0, 8.0], 5.0 - shrink as f64);
            let d = dice(&pred, &gt).unwrap();
            assert!(d <= last + 1e-12, "erosion step {shrink} raised dice");
            last = d;
        }
    }

    #[test]
    fn evaluate_perfect_prediction() {
        let dims = [6, 6, 6];
        let mut labels = vec![0u8; 216];
        labels[10] = 4;
        labels[11] = 1;
        labels[12] = 2;
        let gt = LabelMap::new(dims, [1.0; 3], labels.clone()).unwrap();
        let pred = LabelMap::new(dims, [1.0; 3], labels).unwrap();
        let rep = evaluate_subject("s0", &pred, &gt, [1.0; 3], 95.0).unwrap();
        for s in &rep.scores {
            assert_eq!(s.dice, 1.0);
            assert_eq!(s.hd, 0.0);
        }
        assert_eq!(rep.mean_dice, 1.0);
        assert_eq!(rep.mean_hd, 0.0);
        assert_eq!(rep.hd_percentile, 95.0);
    }

    #[test]
    fn all_background_prediction_misses_every_region() {
        let dims = [6, 6, 6];
        let mut labels = vec![0u8; 216];
        labels[10] = 4;
        let gt = LabelMap::new(dims, [1.0; 3], labels).unwrap();
        let pred = LabelMap::new(dims, [1.0; 3], vec![0u8; 216]).unwrap();
        let rep = evaluate_subject("s1", &pred, &gt, [1.0; 3], 95.0).unwrap();
        for s in &rep.scores {
            assert_eq!(s.dice, 0.0, "{} dice", s.region);
            assert_eq!(s.hd, MISSING_REGION_HD, "{} hd", s.region);
        }
        // Means are plain arithmetic means over the three regions.
        assert!((rep.mean_hd - MISSING_REGION_HD).abs() < 1e-12);
    }

    #[test]
    fn report_serializes_with_region_names() {
        let dims = [4, 4, 4];
        let mut labels = vec![0u8; 64];
        labels[0] = 4;
        let gt = LabelMap::new(dims, [1.0; 3], labels.clone()).unwrap();
        let pred = LabelMap::new(dims, [1.0; 3], labels).unwrap();
        let rep = evaluate_subject("sub-7", &pred, &gt, [1.0; 3], 95.0).unwrap();
        let json = serde_json::to_string(&rep).unwrap();
        assert!(json.contains("\"ET\"") && json.contains("\"TC\"") && json.contains("\"WT\""));
        let back: SubjectReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, rep);
    }
}
