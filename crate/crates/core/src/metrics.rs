//! Overlap and distance metrics over foreground pixel sets.
//!
//! Ratios with an empty denominator are `None` ("undefined"), which is
//! distinct from a measured zero.

use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::LabelMap;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

pub fn confusion_counts(pred: &LabelMap, truth: &LabelMap, foreground: u8) -> Result<Counts> {
    if !pred.same_shape(truth) {
        return Err(Error::Shape("prediction and truth differ in size".into()));
    }
    let mut c = Counts::default();
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        match (p == foreground, t == foreground) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

pub(crate) fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn dice(c: &Counts) -> Option<f64> {
    ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_)
}

pub fn ppv(c: &Counts) -> Option<f64> {
    ratio(c.tp, c.tp + c.fp)
}

pub fn tpr(c: &Counts) -> Option<f64> {
    ratio(c.tp, c.tp + c.fn_)
}

pub fn csi(c: &Counts) -> Option<f64> {
    ratio(c.tp, c.tp + c.fp + c.fn_)
}

/// Identical to [`csi`] for a binary foreground.
pub fn jaccard(c: &Counts) -> Option<f64> {
    csi(c)
}

const FAR: f64 = f64::INFINITY;

/// Exact 1-D squared distance transform (lower envelope of parabolas);
/// infinite entries are not sites.
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    let n = f.len();
    v.clear();
    z.clear();
    for q in 0..n {
        if f[q] == FAR {
            continue;
        }
        let fq = f[q] + (q * q) as f64;
        while let Some(&p) = v.last() {
            let s = (fq - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= *z.last().expect("paired with v") {
                v.pop();
                z.pop();
            } else {
                z.push(s);
                break;
            }
        }
        if v.is_empty() {
            z.clear();
            z.push(f64::NEG_INFINITY);
        }
        v.push(q);
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = FAR);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance from every pixel to the nearest `true` pixel.
pub fn squared_distance_transform(set: &[bool], height: usize, width: usize) -> Vec<f64> {
    let mut grid: Vec<f64> = set.iter().map(|&s| if s { 0.0 } else { FAR }).collect();
    let (mut v, mut z) = (Vec::new(), Vec::new());
    let mut col = vec![0.0; height];
    let mut col_out = vec![0.0; height];
    for x in 0..width {
        for y in 0..height {
            col[y] = grid[y * width + x];
        }
        edt_1d(&col, &mut col_out, &mut v, &mut z);
        for y in 0..height {
            grid[y * width + x] = col_out[y];
        }
    }
    let mut row_out = vec![0.0; width];
    for y in 0..height {
        let row = &mut grid[y * width..(y + 1) * width];
        edt_1d(row, &mut row_out, &mut v, &mut z);
        row.copy_from_slice(&row_out);
    }
    grid
}

/// `max_{a in A} min_{b in B} |a - b|` over pixel grids; `None` if either set is empty.
pub fn directed_hausdorff(a: &[bool], b: &[bool], height: usize, width: usize) -> Option<f64> {
    if !a.iter().any(|&v| v) || !b.iter().any(|&v| v) {
        return None;
    }
    let dt = squared_distance_transform(b, height, width);
    let worst = a
        .iter()
        .zip(&dt)
        .filter(|(&in_a, _)| in_a)
        .map(|(_, &d)| d)
        .fold(0.0, f64::max);
    Some(worst.sqrt())
}

fn symmetric(a: &[bool], b: &[bool], h: usize, w: usize) -> Option<f64> {
    Some(directed_hausdorff(a, b, h, w)?.max(directed_hausdorff(b, a, h, w)?))
}

/// Symmetric Hausdorff distance (pixel units) between the foreground sets
/// of two label maps.
pub fn hausdorff(pred: &LabelMap, truth: &LabelMap, foreground: u8) -> Result<Option<f64>> {
    if !pred.same_shape(truth) {
        return Err(Error::Shape("prediction and truth differ in size".into()));
    }
    let a: Vec<bool> = pred.data().iter().map(|&v| v == foreground).collect();
    let b: Vec<bool> = truth.data().iter().map(|&v| v == foreground).collect();
    Ok(symmetric(&a, &b, pred.height(), pred.width()))
}

/// Hausdorff distance between two sets of `(row, col)` pixel coordinates.
pub fn hausdorff_points(a: &[(usize, usize)], b: &[(usize, usize)]) -> Option<f64> {
    if a.is_empty() || b.is_empty() {
        return None;
    }
    let h = a.iter().chain(b).map(|p| p.0).max()? + 1;
    let w = a.iter().chain(b).map(|p| p.1).max()? + 1;
    let raster = |pts: &[(usize, usize)]| {
        let mut g = vec![false; h * w];
        for &(y, x) in pts {
            g[y * w + x] = true;
        }
        g
    };
    symmetric(&raster(a), &raster(b), h, w)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub image_id: String,
    pub dsc: Option<f64>,
    pub ppv: Option<f64>,
    pub tpr: Option<f64>,
    pub csi: Option<f64>,
    pub jaccard: Option<f64>,
    pub hd: Option<f64>,
}

impl ImageMetrics {
    pub fn evaluate(image_id: impl Into<String>, pred: &LabelMap, truth: &LabelMap, foreground: u8) -> Result<Self> {
        let c = confusion_counts(pred, truth, foreground)?;
        Ok(Self {
            image_id: image_id.into(),
            dsc: dice(&c),
            ppv: ppv(&c),
            tpr: tpr(&c),
            csi: csi(&c),
            jaccard: jaccard(&c),
            hd: hausdorff(pred, truth, foreground)?,
        })
    }

    fn values(&self) -> [Option<f64>; 6] {
        [self.dsc, self.ppv, self.tpr, self.csi, self.jaccard, self.hd]
    }
}

/// Mean and sample standard deviation over the defined values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub n: usize,
}

impl Summary {
    pub fn of(values: impl IntoIterator<Item = Option<f64>>) -> Self {
        let v: Vec<f64> = values.into_iter().flatten().collect();
        if v.is_empty() {
            return Self::default();
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let std = if v.len() > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self {
            mean: Some(mean),
            std: Some(std),
            n: v.len(),
        }
    }
}

pub const REPORT_COLUMNS: [&str; 7] = ["image_id", "dsc", "ppv", "tpr", "csi", "jaccard", "hd"];

/// Missing values are written as this token.
pub const UNDEFINED: &str = "NA";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<ImageMetrics>,
}

impl MetricReport {
    pub fn aggregate(&self) -> [Summary; 6] {
        let mut out = [Summary::default(); 6];
        for (i, s) in out.iter_mut().enumerate() {
            *s = Summary::of(self.rows.iter().map(|r| r.values()[i]));
        }
        out
    }

    pub fn mean_dsc(&self) -> Option<f64> {
        self.aggregate()[0].mean
    }

    /// CSV with one row per image followed by `mean` and `std` rows.
    pub fn to_csv(&self) -> String {
        let mut s = REPORT_COLUMNS.join(",");
        s.push('\n');
        let fmt = |v: Option<f64>| v.map_or_else(|| UNDEFINED.to_string(), |x| format!("{x:.6}"));
        for r in &self.rows {
            let _ = write!(s, "{}", r.image_id);
            for v in r.values() {
                let _ = write!(s, ",{}", fmt(v));
            }
            s.push('\n');
        }
        let agg = self.aggregate();
        for (label, pick) in [("mean", 0), ("std", 1)] {
            s.push_str(label);
            for a in &agg {
                let _ = write!(s, ",{}", fmt(if pick == 0 { a.mean } else { a.std }));
            }
            s.push('\n');
        }
        s
    }

    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        w.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lm(w: usize, v: &[u8]) -> LabelMap {
        LabelMap::new(v.len() / w, w, v.to_vec()).unwrap()
    }

    #[test]
    fn counts_for_basic_cases() {
        let mut v = vec![0u8; 25];
        v[..10].fill(1);
        let y = lm(5, &v);
        let c = confusion_counts(&y, &y, 1).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_), (10, 0, 0));

        let pred = lm(5, &[1, 1, 1, 0, 0, 0, 0, 0, 0, 0]);
        let truth = lm(5, &[0, 0, 0, 1, 1, 0, 0, 0, 0, 0]);
        let c = confusion_counts(&pred, &truth, 1).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), (0, 3, 2, 5));

        let z = LabelMap::filled(4, 6, 0);
        let c = confusion_counts(&z, &z, 1).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), (0, 0, 0, 24));
    }

    #[test]
    fn ratio_formulas() {
        let c = Counts { tp: 3, fp: 1, fn_: 2, tn: 0 };
        assert_eq!(ppv(&c), Some(0.75));
        assert_eq!(tpr(&c), Some(0.6));
        assert_eq!(csi(&c), Some(0.5));
        assert_eq!(jaccard(&c), Some(0.5));
        assert!((dice(&c).unwrap() - 2.0 / 3.0).abs() < 1e-15);

        let perfect = Counts { tp: 4, fp: 0, fn_: 0, tn: 3 };
        for f in [dice, ppv, tpr, csi, jaccard] {
            assert_eq!(f(&perfect), Some(1.0));
        }

        let empty_pred = Counts { tp: 0, fp: 0, fn_: 5, tn: 1 };
        assert_eq!(dice(&empty_pred), Some(0.0));
        assert_eq!(ppv(&empty_pred), None);
        assert_eq!(tpr(&empty_pred), Some(0.0));
    }

    #[test]
    fn hausdorff_examples() {
        assert_eq!(hausdorff_points(&[(0, 0)], &[(3, 4)]), Some(5.0));
        let s = [(1, 1), (1, 2), (2, 2)];
        assert_eq!(hausdorff_points(&s, &s), Some(0.0));
        assert_eq!(hausdorff_points(&[], &s), None);

        // A subset of B: A->B is 0, B->A is not.
        let a = [(0usize, 0usize), (0, 1)];
        let b = [(0, 0), (0, 1), (0, 2), (2, 1), (4, 4)];
        let h = 5;
        let grid = |pts: &[(usize, usize)]| {
            let mut g = vec![false; h * h];
            for &(y, x) in pts {
                g[y * h + x] = true;
            }
            g
        };
        assert_eq!(directed_hausdorff(&grid(&a), &grid(&b), h, h), Some(0.0));
        let back = directed_hausdorff(&grid(&b), &grid(&a), h, h).unwrap();
        assert!((back - (16.0f64 + 9.0).sqrt()).abs() < 1e-12);
        assert_eq!(hausdorff_points(&a, &b), Some(back));
    }

    #[test]
    fn report_csv_layout_and_aggregate() {
        let truth = lm(4, &[1, 1, 0, 0, 0, 0, 0, 0]);
        let r = MetricReport {
            rows: vec![
                ImageMetrics::evaluate("a", &truth, &truth, 1).unwrap(),
                ImageMetrics::evaluate("b", &LabelMap::filled(2, 4, 0), &truth, 1).unwrap(),
            ],
        };
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "image_id,dsc,ppv,tpr,csi,jaccard,hd");
        assert!(lines[2].starts_with("b,0.000000,NA,0.000000"));
        assert!(lines[3].starts_with("mean,0.500000,1.000000,0.500000"));
        assert_eq!(lines.len(), 5);
    }
}
