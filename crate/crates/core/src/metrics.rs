//! Dice similarity and normalized surface Dice, per class, per case and
//! aggregated over a directory of predictions.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::load_labels;
use crate::volume::{voxel_count, LabelVolume, Shape3, Spacing3};

/// Volumes up to this many voxels use exact pairwise surface distances.
pub const BRUTE_FORCE_MAX_VOXELS: usize = 64 * 64 * 64;

fn check_pair(pred: &LabelVolume, gt: &LabelVolume) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(Error::Shape(format!(
            "prediction shape {:?} != ground truth shape {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    if pred.spacing() != gt.spacing() {
        return Err(Error::Shape(format!(
            "prediction spacing {:?} != ground truth spacing {:?}",
            pred.spacing(),
            gt.spacing()
        )));
    }
    Ok(())
}

/// `2|P∩G| / (|P| + |G|)`; 1 when both masks are empty, 0 when only one is.
pub fn dsc(pred: &LabelVolume, gt: &LabelVolume, class_id: u8) -> Result<f64> {
    check_pair(pred, gt)?;
    let (mut p, mut g, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.labels().iter().zip(gt.labels()) {
        let (ia, ib) = (a == class_id, b == class_id);
        p += ia as usize;
        g += ib as usize;
        both += (ia && ib) as usize;
    }
    Ok(match (p, g) {
        (0, 0) => 1.0,
        (0, _) | (_, 0) => 0.0,
        _ => 2.0 * both as f64 / (p + g) as f64,
    })
}

/// Mask voxels with at least one six-connected neighbour outside the mask.
/// Neighbours beyond the volume edge count as outside.
pub fn boundary_voxels(labels: &LabelVolume, class_id: u8) -> Vec<[usize; 3]> {
    let [d, w, h] = labels.shape();
    let l = labels.labels();
    let inside = |z: usize, y: usize, x: usize| l[(z * w + y) * h + x] == class_id;
    let mut out = Vec::new();
    for z in 0..d {
        for y in 0..w {
            for x in 0..h {
                if !inside(z, y, x) {
                    continue;
                }
                let edge = z == 0
                    || y == 0
                    || x == 0
                    || z + 1 == d
                    || y + 1 == w
                    || x + 1 == h
                    || !inside(z - 1, y, x)
                    || !inside(z + 1, y, x)
                    || !inside(z, y - 1, x)
                    || !inside(z, y + 1, x)
                    || !inside(z, y, x - 1)
                    || !inside(z, y, x + 1);
                if edge {
                    out.push([z, y, x]);
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SurfaceDistance {
    /// Chosen by volume size.
    Auto,
    /// Exact pairwise distances between boundary voxels.
    BruteForce,
    /// Exact Euclidean distance transform of the boundary set.
    DistanceTransform,
}

fn sq_mm(a: [usize; 3], b: [usize; 3], s: Spacing3) -> f64 {
    (0..3).map(|i| ((a[i] as f64 - b[i] as f64) * s[i]).powi(2)).sum()
}

fn within_brute_force(from: &[[usize; 3]], to: &[[usize; 3]], spacing: Spacing3, tol_sq: f64) -> usize {
    from.iter()
        .filter(|&&p| to.iter().any(|&q| sq_mm(p, q, spacing) <= tol_sq))
        .count()
}

/// One pass of the lower-envelope squared distance transform along a line
/// with sample spacing `s`: `out[p] = min_q ((p−q)s)² + f[q]`.
fn edt_1d(f: &[f64], s: f64, out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let pos = |i: usize| i as f64 * s;
    let mut k: Option<usize> = None;
    for q in 0..f.len() {
        if f[q].is_infinite() {
            continue;
        }
        let Some(mut top) = k else {
            k = Some(0);
            v[0] = q;
            z[0] = f64::NEG_INFINITY;
            z[1] = f64::INFINITY;
            continue;
        };
        loop {
            let r = v[top];
            let x = ((f[q] + pos(q) * pos(q)) - (f[r] + pos(r) * pos(r))) / (2.0 * (pos(q) - pos(r)));
            if x <= z[top] {
                // z[0] is -inf, so this never pops the last parabola
                top -= 1;
            } else {
                top += 1;
                v[top] = q;
                z[top] = x;
                z[top + 1] = f64::INFINITY;
                break;
            }
        }
        k = Some(top);
    }
    if k.is_none() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (p, o) in out.iter_mut().enumerate() {
        while z[k + 1] < pos(p) {
            k += 1;
        }
        let d = pos(p) - pos(v[k]);
        *o = d * d + f[v[k]];
    }
}

/// Squared millimetre distance from every voxel to the nearest seed voxel.
pub fn squared_distance_transform(shape: Shape3, spacing: Spacing3, seeds: &[[usize; 3]]) -> Vec<f64> {
    let n = voxel_count(shape);
    let mut dist = vec![f64::INFINITY; n];
    for &[z, y, x] in seeds {
        dist[(z * shape[1] + y) * shape[2] + x] = 0.0;
    }
    let strides = [shape[1] * shape[2], shape[2], 1];
    let longest = *shape.iter().max().unwrap();
    let (mut line, mut out) = (vec![0.0; longest], vec![0.0; longest]);
    let (mut v, mut zs) = (vec![0usize; longest], vec![0.0; longest + 1]);
    for axis in 0..3 {
        let len = shape[axis];
        let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
        for i in 0..shape[others[0]] {
            for j in 0..shape[others[1]] {
                let base = i * strides[others[0]] + j * strides[others[1]];
                for t in 0..len {
                    line[t] = dist[base + t * strides[axis]];
                }
                edt_1d(&line[..len], spacing[axis], &mut out[..len], &mut v, &mut zs);
                for t in 0..len {
                    dist[base + t * strides[axis]] = out[t];
                }
            }
        }
    }
    dist
}

fn within_transform(from: &[[usize; 3]], to: &[[usize; 3]], shape: Shape3, spacing: Spacing3, tol_sq: f64) -> usize {
    let dist = squared_distance_transform(shape, spacing, to);
    from.iter()
        .filter(|&&[z, y, x]| dist[(z * shape[1] + y) * shape[2] + x] <= tol_sq)
        .count()
}

/// Normalized surface Dice with the surface-distance strategy chosen by volume size.
pub fn nsd(pred: &LabelVolume, gt: &LabelVolume, class_id: u8, tolerance_mm: f64) -> Result<f64> {
    nsd_with(pred, gt, class_id, tolerance_mm, SurfaceDistance::Auto)
}

/// `(|∂P near ∂G| + |∂G near ∂P|) / (|∂P| + |∂G|)` with distances in millimetres.
pub fn nsd_with(
    pred: &LabelVolume,
    gt: &LabelVolume,
    class_id: u8,
    tolerance_mm: f64,
    method: SurfaceDistance,
) -> Result<f64> {
    check_pair(pred, gt)?;
    if !(tolerance_mm >= 0.0) {
        return Err(Error::InvalidArgument(format!("tolerance must be >= 0, got {tolerance_mm}")));
    }
    let bp = boundary_voxels(pred, class_id);
    let bg = boundary_voxels(gt, class_id);
    match (bp.is_empty(), bg.is_empty()) {
        (true, true) => return Ok(1.0),
        (true, false) | (false, true) => return Ok(0.0),
        _ => {}
    }
    // slack absorbs rounding in the millimetre arithmetic
    let tol_sq = tolerance_mm * tolerance_mm * (1.0 + 1e-12) + 1e-12;
    let shape = pred.shape();
    let spacing = pred.spacing();
    let brute = match method {
        SurfaceDistance::Auto => voxel_count(shape) <= BRUTE_FORCE_MAX_VOXELS,
        SurfaceDistance::BruteForce => true,
        SurfaceDistance::DistanceTransform => false,
    };
    let (a, b) = if brute {
        (
            within_brute_force(&bp, &bg, spacing, tol_sq),
            within_brute_force(&bg, &bp, spacing, tol_sq),
        )
    } else {
        (
            within_transform(&bp, &bg, shape, spacing, tol_sq),
            within_transform(&bg, &bp, shape, spacing, tol_sq),
        )
    };
    Ok((a + b) as f64 / (bp.len() + bg.len()) as f64)
}

/// Scores for one case. `dsc[k]`/`nsd[k]` refer to foreground class `k + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseResult {
    pub case_id: String,
    pub dsc: Vec<f64>,
    pub nsd: Option<Vec<f64>>,
    /// Classes (1-based) present in the prediction or the ground truth.
    pub present: Vec<bool>,
}

fn mean_over(values: &[f64], present: &[bool]) -> f64 {
    let picked: Vec<f64> = values.iter().zip(present).filter(|p| *p.1).map(|p| *p.0).collect();
    if picked.is_empty() {
        1.0
    } else {
        picked.iter().sum::<f64>() / picked.len() as f64
    }
}

impl CaseResult {
    pub fn evaluate(case_id: &str, pred: &LabelVolume, gt: &LabelVolume, nsd_tolerance: Option<f64>) -> Result<Self> {
        check_pair(pred, gt)?;
        let classes = 1..gt.num_classes().max(pred.num_classes());
        let mut present = vec![false; classes.len()];
        for (&a, &b) in pred.labels().iter().zip(gt.labels()) {
            for l in [a, b] {
                if l > 0 {
                    present[l as usize - 1] = true;
                }
            }
        }
        let dsc = classes.clone().map(|c| dsc(pred, gt, c)).collect::<Result<Vec<_>>>()?;
        let nsd = nsd_tolerance
            .map(|t| classes.map(|c| nsd(pred, gt, c, t)).collect::<Result<Vec<_>>>())
            .transpose()?;
        Ok(Self {
            case_id: case_id.to_string(),
            dsc,
            nsd,
            present,
        })
    }

    /// Mean DSC over foreground classes present in either volume (1 if none are).
    pub fn mean_dsc(&self) -> f64 {
        mean_over(&self.dsc, &self.present)
    }

    pub fn mean_nsd(&self) -> Option<f64> {
        self.nsd.as_ref().map(|n| mean_over(n, &self.present))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationReport {
    pub class_names: Vec<String>,
    pub cases: Vec<CaseResult>,
    /// Case ids found on only one side, with the side that lacks them.
    pub missing: Vec<(String, &'static str)>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

impl EvaluationReport {
    pub fn mean_dsc(&self) -> f64 {
        mean(self.cases.iter().map(CaseResult::mean_dsc))
    }

    pub fn class_mean_dsc(&self, k: usize) -> f64 {
        mean(self.cases.iter().map(|c| c.dsc[k]))
    }

    fn has_nsd(&self) -> bool {
        self.cases.first().is_some_and(|c| c.nsd.is_some())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("case,mean");
        for n in &self.class_names {
            write!(s, ",{n}").unwrap();
        }
        if self.has_nsd() {
            s.push_str(",nsd_mean");
            for n in &self.class_names {
                write!(s, ",nsd_{n}").unwrap();
            }
        }
        s.push('\n');
        let row = |s: &mut String, id: &str, m: f64, per: &[f64], nsd: Option<(f64, Vec<f64>)>| {
            write!(s, "{id},{m:.6}").unwrap();
            per.iter().for_each(|v| write!(s, ",{v:.6}").unwrap());
            if let Some((nm, nv)) = nsd {
                write!(s, ",{nm:.6}").unwrap();
                nv.iter().for_each(|v| write!(s, ",{v:.6}").unwrap());
            }
            s.push('\n');
        };
        for c in &self.cases {
            row(&mut s, &c.case_id, c.mean_dsc(), &c.dsc, c.mean_nsd().zip(c.nsd.clone()));
        }
        let k = self.class_names.len();
        let agg: Vec<f64> = (0..k).map(|i| self.class_mean_dsc(i)).collect();
        let agg_nsd = self.has_nsd().then(|| {
            (
                mean(self.cases.iter().filter_map(CaseResult::mean_nsd)),
                (0..k).map(|i| mean(self.cases.iter().map(|c| c.nsd.as_ref().unwrap()[i]))).collect(),
            )
        });
        row(&mut s, "mean", self.mean_dsc(), &agg, agg_nsd);
        for (id, side) in &self.missing {
            writeln!(s, "# missing {side}: {id}").unwrap();
        }
        s
    }
}

/// Case ids (file stems of `*.json` headers) in a directory.
fn case_ids(dir: &Path) -> Result<BTreeSet<String>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut ids = BTreeSet::new();
    for e in entries {
        let e = e.map_err(|e| Error::io(dir, e))?;
        let name = e.file_name().to_string_lossy().into_owned();
        if let Some(stem) = name.strip_suffix(".json") {
            ids.insert(stem.to_string());
        }
    }
    Ok(ids)
}

/// Default foreground class names `class_1 … class_{C−1}`.
pub fn default_class_names(num_classes: u8) -> Vec<String> {
    (1..num_classes).map(|c| format!("class_{c}")).collect()
}

/// Scores every case id found in both directories. Ids found on one side only
/// are reported in [`EvaluationReport::missing`] and left out of the means.
pub fn evaluate_dataset(
    pred_dir: &Path,
    gt_dir: &Path,
    class_names: Option<&[String]>,
    nsd_tolerance: Option<f64>,
) -> Result<EvaluationReport> {
    let pred_ids = case_ids(pred_dir)?;
    let gt_ids = case_ids(gt_dir)?;
    let mut missing = Vec::new();
    for id in gt_ids.difference(&pred_ids) {
        missing.push((id.clone(), "prediction"));
    }
    for id in pred_ids.difference(&gt_ids) {
        missing.push((id.clone(), "ground truth"));
    }
    let ids: Vec<&String> = pred_ids.intersection(&gt_ids).collect();
    let mut names = class_names.map(<[String]>::to_vec);
    if names.is_none() {
        if let Some(first) = ids.first() {
            names = Some(default_class_names(load_labels(&gt_dir.join(first))?.num_classes()));
        }
    }
    let cases = ids
        .par_iter()
        .map(|id| {
            let pred = load_labels(&pred_dir.join(id))?;
            let gt = load_labels(&gt_dir.join(id))?;
            let n = names.as_ref().map_or(0, Vec::len);
            if n + 1 != gt.num_classes() as usize {
                return Err(Error::Config(format!(
                    "{n} class names given for {} foreground classes",
                    gt.num_classes() - 1
                )));
            }
            CaseResult::evaluate(id, &pred, &gt, nsd_tolerance)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvaluationReport {
        class_names: names.unwrap_or_default(),
        cases,
        missing,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn labels(shape: Shape3, spacing: Spacing3, f: impl Fn(usize, usize, usize) -> u8) -> LabelVolume {
        let mut v = Vec::new();
        for z in 0..shape[0] {
            for y in 0..shape[1] {
                for x in 0..shape[2] {
                    v.push(f(z, y, x));
                }
            }
        }
        LabelVolume::new(shape, spacing, 3, v).unwrap()
    }

    #[test]
    fn dsc_conventions() {
        let a = labels([4, 4, 4], [1.0; 3], |z, _, _| (z < 2) as u8);
        let b = labels([4, 4, 4], [1.0; 3], |z, _, _| (z >= 2) as u8);
        assert_eq!(dsc(&a, &a, 1).unwrap(), 1.0);
        assert_eq!(dsc(&a, &b, 1).unwrap(), 0.0);
        assert_eq!(dsc(&a, &b, 2).unwrap(), 1.0);
        let c = labels([4, 4, 4], [1.0; 3], |_, _, _| 0);
        assert_eq!(dsc(&a, &c, 1).unwrap(), 0.0);
    }

    #[test]
    fn dsc_half_overlap() {
        // |P| = 4, |G| = 4, |P∩G| = 2
        let p = labels([1, 1, 8], [1.0; 3], |_, _, x| (x < 4) as u8);
        let g = labels([1, 1, 8], [1.0; 3], |_, _, x| (2..6).contains(&x) as u8);
        assert_eq!(dsc(&p, &g, 1).unwrap(), 0.5);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = labels([2, 2, 2], [1.0; 3], |_, _, _| 0);
        let b = labels([2, 2, 3], [1.0; 3], |_, _, _| 0);
        assert!(matches!(dsc(&a, &b, 1), Err(Error::Shape(_))));
        assert!(matches!(nsd(&a, &b, 1, 1.0), Err(Error::Shape(_))));
    }

    fn cube(offset: usize) -> LabelVolume {
        labels([16, 16, 16], [1.0; 3], |z, y, x| {
            ((4 + offset..12 + offset).contains(&z) && (4..12).contains(&y) && (4..12).contains(&x)) as u8
        })
    }

    #[test]
    fn shifted_cube_nsd() {
        let (a, b) = (cube(0), cube(1));
        assert_eq!(nsd(&a, &a, 1, 0.0).unwrap(), 1.0);
        assert_eq!(nsd(&a, &b, 1, 1.0).unwrap(), 1.0);
        assert!(nsd(&a, &b, 1, 0.0).unwrap() < 1.0);
    }

    fn blob(rng: &mut ChaCha8Rng, shape: Shape3, spacing: Spacing3) -> LabelVolume {
        let c: [f64; 3] = std::array::from_fn(|a| rng.random_range(0.0..shape[a] as f64));
        let r = rng.random_range(2.0..6.0);
        labels(shape, spacing, |z, y, x| {
            let d = (z as f64 - c[0]).powi(2) + (y as f64 - c[1]).powi(2) + (x as f64 - c[2]).powi(2);
            (d <= r * r) as u8
        })
    }

    #[test]
    fn transform_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..15 {
            let shape = [rng.random_range(6..14), rng.random_range(6..14), rng.random_range(6..14)];
            let spacing = [rng.random_range(0.5..3.0), rng.random_range(0.5..3.0), rng.random_range(0.5..3.0)];
            let (a, b) = (blob(&mut rng, shape, spacing), blob(&mut rng, shape, spacing));
            for tol in [0.0, 0.7, 1.5, 3.0, 6.0] {
                let bf = nsd_with(&a, &b, 1, tol, SurfaceDistance::BruteForce).unwrap();
                let dt = nsd_with(&a, &b, 1, tol, SurfaceDistance::DistanceTransform).unwrap();
                assert_eq!(bf, dt, "tol {tol}");
            }
        }
    }

    #[test]
    fn distance_transform_against_pairwise_minimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let shape = [7, 9, 5];
        let spacing = [1.5, 0.5, 2.0];
        let seeds: Vec<[usize; 3]> = (0..6)
            .map(|_| std::array::from_fn(|a| rng.random_range(0..shape[a])))
            .collect();
        let d = squared_distance_transform(shape, spacing, &seeds);
        for z in 0..7 {
            for y in 0..9 {
                for x in 0..5 {
                    let want = seeds.iter().map(|&s| sq_mm([z, y, x], s, spacing)).fold(f64::INFINITY, f64::min);
                    assert!((d[(z * 9 + y) * 5 + x] - want).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn nsd_symmetric_and_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let (a, b) = (blob(&mut rng, [12; 3], [1.0; 3]), blob(&mut rng, [12; 3], [1.0; 3]));
            let mut prev = 0.0;
            for tol in [0.0, 0.5, 1.0, 2.0, 4.0, 8.0] {
                let v = nsd(&a, &b, 1, tol).unwrap();
                assert_eq!(v, nsd(&b, &a, 1, tol).unwrap());
                assert!((0.0..=1.0).contains(&v) && v >= prev);
                prev = v;
            }
        }
    }

    #[test]
    fn case_mean_over_present_classes() {
        let gt = labels([1, 1, 8], [1.0; 3], |_, _, x| (x < 4) as u8);
        let r = CaseResult::evaluate("c", &gt, &gt, None).unwrap();
        assert_eq!(r.dsc, vec![1.0, 1.0]);
        assert_eq!(r.present, vec![true, false]);
        assert_eq!(r.mean_dsc(), 1.0);
        let bg = labels([1, 1, 8], [1.0; 3], |_, _, _| 0);
        assert_eq!(CaseResult::evaluate("e", &bg, &bg, None).unwrap().mean_dsc(), 1.0);
    }
}
