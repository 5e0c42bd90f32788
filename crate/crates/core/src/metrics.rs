//! Evaluation metrics: range-limited IoU and Chamfer distance per level,
//! and flow endpoint errors.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::geometry::{Vec3, VoxelGridSpec};
use crate::grid::OccupancyGrid;

/// Voxels whose centroid depth is at most `z_range`.
fn in_range(spec: &VoxelGridSpec, level: usize, z_range: f64) -> impl Fn(usize) -> bool + '_ {
    let dims = spec.dims(level);
    move |f| spec.centroid(level, crate::geometry::unflatten(dims, f)).z <= z_range
}

/// Set IoU in percent over voxels within `z_range`; two empty sets score 100.
pub fn metric_iou(pred: &OccupancyGrid, gt: &OccupancyGrid, spec: &VoxelGridSpec, level: usize, z_range: f64) -> f64 {
    assert_eq!(pred.dims, gt.dims, "metric_iou: dims differ");
    let keep = in_range(spec, level, z_range);
    let (mut inter, mut union) = (0usize, 0usize);
    for (f, (&p, &g)) in pred.data.iter().zip(&gt.data).enumerate() {
        if (p || g) && keep(f) {
            union += 1;
            inter += (p && g) as usize;
        }
    }
    if union == 0 {
        100.0
    } else {
        100.0 * inter as f64 / union as f64
    }
}

/// Centroids of occupied voxels within `z_range`.
pub fn occupied_centroids(grid: &OccupancyGrid, spec: &VoxelGridSpec, level: usize, z_range: f64) -> Vec<Vec3> {
    grid.occupied()
        .into_iter()
        .map(|f| spec.centroid(level, grid.coords(f)))
        .filter(|c| c.z <= z_range)
        .collect()
}

fn mean_nearest(from: &[Vec3], to: &[Vec3]) -> f64 {
    let total: f64 = from
        .iter()
        .map(|a| to.iter().map(|b| (a - b).norm_squared()).fold(f64::INFINITY, f64::min).sqrt())
        .sum();
    total / from.len() as f64
}

/// Sum of both directed mean nearest-neighbour distances. With exactly one
/// empty set the result is `empty_penalty`; two empty sets give 0.
pub fn chamfer(a: &[Vec3], b: &[Vec3], empty_penalty: f64) -> f64 {
    match (a.is_empty(), b.is_empty()) {
        (true, true) => 0.0,
        (true, false) | (false, true) => empty_penalty,
        _ => mean_nearest(a, b) + mean_nearest(b, a),
    }
}

/// Endpoint errors in meters: over all voxels and over ground-truth occupied
/// voxels (0 when there are none).
pub fn epe_metrics(pred: &[[f64; 3]], gt: &[[f64; 3]], gt_occ: &OccupancyGrid, l4: f64) -> Result<(f64, f64)> {
    if pred.len() != gt.len() || gt.len() != gt_occ.len() {
        return Err(Error::Invalid(format!(
            "epe_metrics: {} predicted, {} target, {} occupancy entries",
            pred.len(),
            gt.len(),
            gt_occ.len()
        )));
    }
    if pred.is_empty() {
        return Ok((0.0, 0.0));
    }
    let (mut all, mut fg, mut n_fg) = (0.0, 0.0, 0usize);
    for ((p, t), &o) in pred.iter().zip(gt).zip(&gt_occ.data) {
        let e = ((p[0] - t[0]).powi(2) + (p[1] - t[1]).powi(2) + (p[2] - t[2]).powi(2)).sqrt() * l4;
        all += e;
        if o {
            fg += e;
            n_fg += 1;
        }
    }
    let fg_epe = if n_fg == 0 { 0.0 } else { fg / n_fg as f64 };
    Ok((all / pred.len() as f64, fg_epe))
}

pub const CSV_HEADER: &str = "split,level,range_m,iou_pct,cd_m,epe_m,fg_epe_m";

/// Per-level, per-range detection metrics plus flow errors, averaged over
/// the samples of one split.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub split: String,
    pub ranges: Vec<f64>,
    /// `[level][range]`, level 1 first.
    pub iou_pct: Vec<Vec<f64>>,
    pub cd_m: Vec<Vec<f64>>,
    pub epe_m: Option<f64>,
    pub fg_epe_m: Option<f64>,
    pub samples: usize,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |x| format!("{x}"))
}

impl MetricReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "# cd_m is the sum of the two directed mean nearest-neighbour distances").unwrap();
        writeln!(s, "split={}", self.split).unwrap();
        writeln!(s, "samples={}", self.samples).unwrap();
        for (l, (ious, cds)) in self.iou_pct.iter().zip(&self.cd_m).enumerate() {
            for (r, (iou, cd)) in self.ranges.iter().zip(ious.iter().zip(cds)) {
                writeln!(s, "iou_pct.level{}.range{r}={iou}", l + 1).unwrap();
                writeln!(s, "cd_m.level{}.range{r}={cd}", l + 1).unwrap();
            }
        }
        writeln!(s, "epe_m={}", fmt_opt(self.epe_m)).unwrap();
        writeln!(s, "fg_epe_m={}", fmt_opt(self.fg_epe_m)).unwrap();
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{CSV_HEADER}").unwrap();
        for (l, (ious, cds)) in self.iou_pct.iter().zip(&self.cd_m).enumerate() {
            for (r, (iou, cd)) in self.ranges.iter().zip(ious.iter().zip(cds)) {
                writeln!(
                    s,
                    "{},{},{r},{iou},{cd},{},{}",
                    self.split,
                    l + 1,
                    fmt_opt(self.epe_m),
                    fmt_opt(self.fg_epe_m)
                )
                .unwrap();
            }
        }
        s
    }

    /// Rows of a CSV written by [`MetricReport::to_csv`] as numbers
    /// `[level, range_m, iou_pct, cd_m, epe_m, fg_epe_m]`.
    pub fn parse_csv_rows(text: &str) -> Result<Vec<(String, [f64; 6])>> {
        let mut lines = text.lines();
        if lines.next() != Some(CSV_HEADER) {
            return Err(Error::Invalid("metrics CSV has an unexpected header".into()));
        }
        lines
            .filter(|l| !l.trim().is_empty())
            .map(|line| {
                let cols: Vec<&str> = line.split(',').collect();
                if cols.len() != 7 {
                    return Err(Error::Invalid(format!("metrics CSV row has {} columns: {line}", cols.len())));
                }
                let mut vals = [0.0; 6];
                for (v, c) in vals.iter_mut().zip(&cols[1..]) {
                    *v = c.parse().map_err(|_| Error::Invalid(format!("bad number `{c}` in metrics CSV")))?;
                }
                Ok((cols[0].to_string(), vals))
            })
            .collect()
    }
}

/// Running sums for a [`MetricReport`].
#[derive(Clone, Debug)]
pub struct MetricAccumulator {
    split: String,
    ranges: Vec<f64>,
    iou: Vec<Vec<f64>>,
    cd: Vec<Vec<f64>>,
    epe: f64,
    fg_epe: f64,
    flow_samples: usize,
    samples: usize,
}

impl MetricAccumulator {
    pub fn new(split: &str, levels: usize, ranges: &[f64]) -> Self {
        MetricAccumulator {
            split: split.to_string(),
            ranges: ranges.to_vec(),
            iou: vec![vec![0.0; ranges.len()]; levels],
            cd: vec![vec![0.0; ranges.len()]; levels],
            epe: 0.0,
            fg_epe: 0.0,
            flow_samples: 0,
            samples: 0,
        }
    }

    /// Adds one sample's detection results (coarsest level first). The
    /// Chamfer penalty for a one-sided empty set is the range itself.
    pub fn add_detection(&mut self, pred: &[OccupancyGrid], gt: &[OccupancyGrid], spec: &VoxelGridSpec) {
        for (l, (p, g)) in pred.iter().zip(gt).enumerate() {
            let level = l + 1;
            for (r, &range) in self.ranges.iter().enumerate() {
                self.iou[l][r] += metric_iou(p, g, spec, level, range);
                let a = occupied_centroids(p, spec, level, range);
                let b = occupied_centroids(g, spec, level, range);
                self.cd[l][r] += chamfer(&a, &b, range);
            }
        }
        self.samples += 1;
    }

    pub fn add_flow(&mut self, epe: f64, fg_epe: f64) {
        self.epe += epe;
        self.fg_epe += fg_epe;
        self.flow_samples += 1;
    }

    pub fn finish(&self) -> MetricReport {
        let n = self.samples.max(1) as f64;
        let avg = |v: &Vec<Vec<f64>>| v.iter().map(|row| row.iter().map(|x| x / n).collect()).collect();
        let flow = |x: f64| (self.flow_samples > 0).then(|| x / self.flow_samples as f64);
        MetricReport {
            split: self.split.clone(),
            ranges: self.ranges.clone(),
            iou_pct: avg(&self.iou),
            cd_m: avg(&self.cd),
            epe_m: flow(self.epe),
            fg_epe_m: flow(self.fg_epe),
            samples: self.samples,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn line_spec() -> VoxelGridSpec {
        VoxelGridSpec::new([0.0; 3], [1.0, 1.0, 10.0], [1, 1, 10], 1).unwrap()
    }

    fn line(bits: &[usize]) -> OccupancyGrid {
        OccupancyGrid::from_vec([1, 1, 10], (0..10).map(|i| bits.contains(&i)).collect())
    }

    #[test]
    fn iou_examples() {
        let s = line_spec();
        let a = line(&[0, 1, 2, 3]);
        assert_eq!(metric_iou(&a, &a, &s, 1, 30.0), 100.0);
        assert_eq!(metric_iou(&a, &line(&[5, 6, 7, 8]), &s, 1, 30.0), 0.0);
        assert_eq!(metric_iou(&a, &line(&[1, 2, 3, 4, 5]), &s, 1, 30.0), 50.0);
        assert_eq!(metric_iou(&line(&[]), &line(&[]), &s, 1, 30.0), 100.0);
        // centroids at 0.5, 1.5, ...; range 2.5 keeps voxels 0..=2, boundary included
        assert_eq!(metric_iou(&line(&[2, 9]), &line(&[2]), &s, 1, 2.5), 100.0);
        assert_eq!(metric_iou(&line(&[1, 2, 9]), &line(&[2]), &s, 1, 2.5), 50.0);
        assert_eq!(metric_iou(&line(&[1, 2, 9]), &line(&[2]), &s, 1, 2.4), 0.0);
    }

    #[test]
    fn chamfer_examples() {
        let a = vec![Vec3::new(1.0, 2.0, 3.0), Vec3::new(0.0, 0.0, 1.0)];
        assert_eq!(chamfer(&a, &a, 30.0), 0.0);
        assert_eq!(chamfer(&[Vec3::zeros()], &[Vec3::new(1.0, 0.0, 0.0)], 30.0), 2.0);
        assert_eq!(chamfer(&[], &a, 30.0), 30.0);
        assert_eq!(chamfer(&[], &[], 30.0), 0.0);
    }

    #[test]
    fn chamfer_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut pts = |n: usize| -> Vec<Vec3> {
            (0..n).map(|_| Vec3::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(0.0..9.0))).collect()
        };
        let (a, b) = (pts(20), pts(20));
        let mut want = 0.0;
        for (x, y) in [(&a, &b), (&b, &a)] {
            let mut s = 0.0;
            for p in x.iter() {
                let mut best = f64::INFINITY;
                for q in y.iter() {
                    let d = ((p.x - q.x).powi(2) + (p.y - q.y).powi(2) + (p.z - q.z).powi(2)).sqrt();
                    best = best.min(d);
                }
                s += best;
            }
            want += s / x.len() as f64;
        }
        assert!((chamfer(&a, &b, 30.0) - want).abs() < 1e-9);
    }

    #[test]
    fn epe_examples() {
        let occ = line(&[1, 2]);
        let gt = vec![[0.0, 0.0, 1.0]; 10];
        assert_eq!(epe_metrics(&gt, &gt, &occ, 0.5).unwrap(), (0.0, 0.0));
        let mut pred = gt.clone();
        pred[7] = [0.0, 0.0, 3.0];
        let (epe, fg) = epe_metrics(&pred, &gt, &occ, 0.5).unwrap();
        assert_eq!(fg, 0.0);
        assert!((epe - 0.1).abs() < 1e-15);
        pred[2] = [0.0, 3.0, 1.0];
        let (_, fg) = epe_metrics(&pred, &gt, &occ, 0.5).unwrap();
        assert!((fg - 0.75).abs() < 1e-15);
        assert_eq!(epe_metrics(&gt, &gt, &line(&[]), 1.0).unwrap().1, 0.0);
    }

    #[test]
    fn report_round_trips_through_csv() {
        let s = line_spec();
        let mut acc = MetricAccumulator::new("val", 1, &[4.0, 8.0]);
        acc.add_detection(&[line(&[1, 2, 6])], &[line(&[1, 6])], &s);
        acc.add_flow(0.25, 0.5);
        let r = acc.finish();
        let rows = MetricReport::parse_csv_rows(&r.to_csv()).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].1, [1.0, 4.0, 50.0, r.cd_m[0][0], 0.25, 0.5]);
        assert!(r.to_text().contains("iou_pct.level1.range8=66.66666666666667"));
    }

    proptest! {
        #[test]
        fn soft_iou_agrees_with_set_iou_on_binary(a in proptest::collection::vec(proptest::bool::ANY, 10), b in proptest::collection::vec(proptest::bool::ANY, 10)) {
            let s = line_spec();
            let (ga, gb) = (OccupancyGrid::from_vec([1, 1, 10], a), OccupancyGrid::from_vec([1, 1, 10], b));
            let soft = crate::losses::soft_iou(&ga.as_f64(), &gb).unwrap();
            prop_assert!((soft - metric_iou(&ga, &gb, &s, 1, 100.0) / 100.0).abs() < 1e-12);
        }

        #[test]
        fn chamfer_symmetric_and_order_free(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(1..12);
            let m = rng.gen_range(1..12);
            let a: Vec<Vec3> = (0..n).map(|_| Vec3::new(rng.gen(), rng.gen(), rng.gen())).collect();
            let b: Vec<Vec3> = (0..m).map(|_| Vec3::new(rng.gen(), rng.gen(), rng.gen())).collect();
            prop_assert_eq!(chamfer(&a, &b, 1.0), chamfer(&b, &a, 1.0));
            let mut ar = a.clone();
            ar.reverse();
            prop_assert!((chamfer(&ar, &b, 1.0) - chamfer(&a, &b, 1.0)).abs() < 1e-12);
        }
    }
}
