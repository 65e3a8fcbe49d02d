//! Overlap and boundary-distance scores over the whole tumour, tumour core
//! and enhancing tumour composites.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{percentile_sorted, Dims};
use crate::volume::LabelVolume;

pub const DEFAULT_EMPTY_PENALTY: f64 = 373.13;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Region {
    Wt,
    Tc,
    Et,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::Wt, Region::Tc, Region::Et];

    pub fn name(self) -> &'static str {
        match self {
            Region::Wt => "WT",
            Region::Tc => "TC",
            Region::Et => "ET",
        }
    }

    /// Internal class ids (1 necrosis, 2 edema, 3 enhancing) in the region.
    pub fn classes(self) -> &'static [u8] {
        match self {
            Region::Wt => &[1, 2, 3],
            Region::Tc => &[1, 3],
            Region::Et => &[3],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricConfig {
    /// HD95 assigned when exactly one of the two masks is empty.
    pub empty_penalty: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig { empty_penalty: DEFAULT_EMPTY_PENALTY }
    }
}

pub fn region_mask(l: &LabelVolume, r: Region) -> Vec<bool> {
    let cls = r.classes();
    l.labels.iter().map(|v| cls.contains(v)).collect()
}

fn check_len(a: &[bool], b: &[bool]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("mask sizes differ: {} vs {}", a.len(), b.len())));
    }
    Ok(())
}

/// `2TP / (2TP + FP + FN)`; 1 when both masks are empty.
pub fn dice(pred: &[bool], truth: &[bool]) -> Result<f64> {
    check_len(pred, truth)?;
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for (&p, &t) in pred.iter().zip(truth) {
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    if tp + fp + fn_ == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * tp as f64 / (2 * tp + fp + fn_) as f64)
}

/// Squared distance transform of one line: `out[i] = min_q (s·(i−q))² + f[q]`
/// over finite `f[q]`.
fn edt_1d(f: &[f64], s: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    v.clear();
    z.clear();
    let pos = |q: usize| q as f64 * s;
    for (q, &fq) in f.iter().enumerate() {
        if !fq.is_finite() {
            continue;
        }
        loop {
            let Some(&p) = v.last() else {
                v.push(q);
                z.push(f64::NEG_INFINITY);
                break;
            };
            let x = ((fq + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)));
            if x <= *z.last().unwrap() {
                v.pop();
                z.pop();
            } else {
                v.push(q);
                z.push(x);
                break;
            }
        }
    }
    if v.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (i, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < pos(i) {
            k += 1;
        }
        let d = pos(i) - pos(v[k]);
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance from every voxel to the nearest `true`
/// voxel of `mask` (infinite when the mask is empty).
pub fn squared_distance_transform(mask: &[bool], dims: Dims, spacing: [f64; 3]) -> Vec<f64> {
    let mut d: Vec<f64> = mask.iter().map(|&m| if m { 0.0 } else { f64::INFINITY }).collect();
    let [nx, ny, nz] = dims.0;
    let strides = [1, nx, nx * ny];
    let (mut v, mut z) = (Vec::new(), Vec::new());
    for axis in 0..3 {
        let n = dims.0[axis];
        let stride = strides[axis];
        let mut line = vec![0.0; n];
        let mut out = vec![0.0; n];
        let others: Vec<usize> = (0..nx * ny * nz).filter(|&i| (i / stride) % n == 0).collect();
        for base in others {
            for (k, l) in line.iter_mut().enumerate() {
                *l = d[base + k * stride];
            }
            edt_1d(&line, spacing[axis], &mut out, &mut v, &mut z);
            for (k, &o) in out.iter().enumerate() {
                d[base + k * stride] = o;
            }
        }
    }
    d
}

/// The concatenated directed distances: each `pred` voxel to the nearest
/// `truth` voxel, then each `truth` voxel to the nearest `pred` voxel.
/// Both masks must be nonempty.
pub fn surface_distances(pred: &[bool], truth: &[bool], dims: Dims, spacing: [f64; 3]) -> Result<Vec<f64>> {
    check_len(pred, truth)?;
    if pred.len() != dims.len() {
        return Err(Error::Shape(format!("{} mask voxels for grid {dims}", pred.len())));
    }
    let to_truth = squared_distance_transform(truth, dims, spacing);
    let to_pred = squared_distance_transform(pred, dims, spacing);
    let mut out: Vec<f64> = pred.iter().zip(&to_truth).filter(|(&m, _)| m).map(|(_, d)| d.sqrt()).collect();
    out.extend(truth.iter().zip(&to_pred).filter(|(&m, _)| m).map(|(_, d)| d.sqrt()));
    Ok(out)
}

/// How an empty mask was scored.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmptyCase {
    None,
    BothEmpty,
    PredEmpty,
    TruthEmpty,
}

/// 95th percentile (linear interpolation) of [`surface_distances`]; 0 when
/// both masks are empty, `penalty` when exactly one is.
pub fn hd95_with_flag(
    pred: &[bool],
    truth: &[bool],
    dims: Dims,
    spacing: [f64; 3],
    penalty: f64,
) -> Result<(f64, EmptyCase)> {
    check_len(pred, truth)?;
    let (pe, te) = (!pred.iter().any(|&b| b), !truth.iter().any(|&b| b));
    match (pe, te) {
        (true, true) => return Ok((0.0, EmptyCase::BothEmpty)),
        (true, false) => return Ok((penalty, EmptyCase::PredEmpty)),
        (false, true) => return Ok((penalty, EmptyCase::TruthEmpty)),
        _ => {}
    }
    let mut d = surface_distances(pred, truth, dims, spacing)?;
    d.sort_by(f64::total_cmp);
    Ok((percentile_sorted(&d, 95.0), EmptyCase::None))
}

pub fn hd95(pred: &[bool], truth: &[bool], dims: Dims, spacing: [f64; 3], penalty: f64) -> Result<f64> {
    hd95_with_flag(pred, truth, dims, spacing, penalty).map(|(v, _)| v)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseReport {
    pub case_id: String,
    /// WT, TC, ET.
    pub dice: [f64; 3],
    pub hd95: [f64; 3],
    pub flags: Vec<String>,
}

impl CaseReport {
    /// Score for a case with no prediction at all.
    pub fn missing(case_id: &str, cfg: &MetricConfig) -> Self {
        CaseReport {
            case_id: case_id.to_string(),
            dice: [0.0; 3],
            hd95: [cfg.empty_penalty; 3],
            flags: vec!["missing_prediction".into()],
        }
    }

    pub fn columns(&self) -> [f64; 6] {
        [self.dice[0], self.dice[1], self.dice[2], self.hd95[0], self.hd95[1], self.hd95[2]]
    }
}

pub fn evaluate_case(
    case_id: &str,
    pred: &LabelVolume,
    truth: &LabelVolume,
    spacing: [f64; 3],
    cfg: &MetricConfig,
) -> Result<CaseReport> {
    if pred.dims != truth.dims {
        return Err(Error::Shape(format!("prediction {} vs truth {}", pred.dims, truth.dims)));
    }
    let mut report = CaseReport { case_id: case_id.to_string(), dice: [0.0; 3], hd95: [0.0; 3], flags: Vec::new() };
    for (i, r) in Region::ALL.into_iter().enumerate() {
        let (p, t) = (region_mask(pred, r), region_mask(truth, r));
        report.dice[i] = dice(&p, &t)?;
        let (h, flag) = hd95_with_flag(&p, &t, pred.dims, spacing, cfg.empty_penalty)?;
        report.hd95[i] = h;
        let tag = match flag {
            EmptyCase::None => continue,
            EmptyCase::BothEmpty => "both_empty",
            EmptyCase::PredEmpty => "pred_empty",
            EmptyCase::TruthEmpty => "truth_empty",
        };
        report.flags.push(format!("{}:{tag}", r.name()));
    }
    Ok(report)
}

/// Column-wise mean and median (linear interpolation) over a case set.
#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub mean: [f64; 6],
    pub median: [f64; 6],
}

pub fn summarize(reports: &[CaseReport]) -> Option<Summary> {
    if reports.is_empty() {
        return None;
    }
    let mut mean = [0.0; 6];
    let mut median = [0.0; 6];
    for c in 0..6 {
        let mut col: Vec<f64> = reports.iter().map(|r| r.columns()[c]).collect();
        mean[c] = col.iter().sum::<f64>() / col.len() as f64;
        col.sort_by(f64::total_cmp);
        median[c] = percentile_sorted(&col, 50.0);
    }
    Some(Summary { mean, median })
}

pub const CSV_HEADER: &str = "case_id,dice_wt,dice_tc,dice_et,hd95_wt,hd95_tc,hd95_et,flags";

/// Per-case rows followed by `mean` and `median` rows.
pub fn format_csv(reports: &[CaseReport]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    let row = |s: &mut String, id: &str, cols: &[f64; 6], flags: &str| {
        s.push_str(id);
        for v in cols {
            write!(s, ",{v:.6}").unwrap();
        }
        writeln!(s, ",{flags}").unwrap();
    };
    for r in reports {
        row(&mut s, &r.case_id, &r.columns(), &r.flags.join("|"));
    }
    if let Some(sum) = summarize(reports) {
        row(&mut s, "mean", &sum.mean, "");
        row(&mut s, "median", &sum.median, "");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn region_counts() {
        let l = LabelVolume { dims: Dims::new(4, 1, 1), labels: vec![0, 1, 2, 3] };
        let count = |r| region_mask(&l, r).iter().filter(|&&b| b).count();
        assert_eq!((count(Region::Wt), count(Region::Tc), count(Region::Et)), (3, 2, 1));
    }

    #[test]
    fn dice_hand_case() {
        let p = [true, true, false];
        let t = [false, true, true];
        assert_eq!(dice(&p, &t).unwrap(), 0.5);
        assert_eq!(dice(&[false; 3], &[false; 3]).unwrap(), 1.0);
        assert_eq!(dice(&[true, false], &[false, false]).unwrap(), 0.0);
        assert!(matches!(dice(&[true], &[true, false]), Err(Error::Shape(_))));
    }

    #[test]
    fn hd95_two_points() {
        let dims = Dims::new(5, 1, 1);
        let mut p = vec![false; 5];
        let mut t = vec![false; 5];
        p[0] = true;
        t[3] = true;
        assert_eq!(hd95(&p, &t, dims, [1.0; 3], 373.13).unwrap(), 3.0);
        assert_eq!(hd95(&p, &p, dims, [1.0; 3], 373.13).unwrap(), 0.0);
        assert_eq!(hd95(&p, &[false; 5], dims, [1.0; 3], 300.0).unwrap(), 300.0);
        assert_eq!(hd95(&[false; 5], &[false; 5], dims, [1.0; 3], 300.0).unwrap(), 0.0);
    }

    #[test]
    fn distance_transform_anisotropic() {
        let dims = Dims::new(3, 3, 3);
        let mut m = vec![false; 27];
        m[dims.index(0, 0, 0)] = true;
        let d = squared_distance_transform(&m, dims, [1.0, 2.0, 3.0]);
        assert_eq!(d[dims.index(2, 1, 1)], 4.0 + 4.0 + 9.0);
        assert_eq!(d[dims.index(0, 0, 2)], 36.0);
    }

    #[test]
    fn missing_prediction_and_csv() {
        let cfg = MetricConfig::default();
        let r = CaseReport::missing("c1", &cfg);
        assert_eq!(r.dice, [0.0; 3]);
        assert_eq!(r.hd95, [373.13; 3]);
        let csv = format_csv(&[r]);
        assert!(csv.starts_with(CSV_HEADER));
        assert!(csv.contains("c1,0.000000,0.000000,0.000000,373.130000,373.130000,373.130000,missing_prediction"));
        assert!(csv.contains("\nmedian,"));
    }
}
