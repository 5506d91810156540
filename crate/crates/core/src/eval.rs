//! DET curves, EER, AUC-over-DET, median-gap histograms and the top-K
//! annotation-overlap table.
//!
//! The DET task is binary candidate-versus-normal: maneuver windows are
//! excluded from the curve but kept for histograms and the overlap table.
//! Thresholds sweep every distinct score (plus infinite sentinels), so the
//! curve is exact and testable against brute-force counting.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::SetLabel;
use crate::engine::ScoreRecord;
use crate::error::DaganError;

pub const HIST_BINS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub fnr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetCurve {
    /// Ordered by decreasing threshold, i.e. increasing FPR.
    pub points: Vec<DetPoint>,
    pub eer: f64,
    pub auc: f64,
}

/// Exact DET sweep over candidate-vs-normal scores. A sample scoring strictly
/// above the threshold is classified abnormal.
pub fn det_curve(records: &[ScoreRecord]) -> Result<DetCurve, DaganError> {
    let mut normals: Vec<f64> = Vec::new();
    let mut candidates: Vec<f64> = Vec::new();
    for r in records {
        match r.set {
            SetLabel::Normal => normals.push(r.m_anomaly),
            SetLabel::Candidate => candidates.push(r.m_anomaly),
            SetLabel::Maneuver => {}
        }
    }
    if normals.is_empty() || candidates.is_empty() {
        return Err(DaganError::Usage(
            "det_curve needs non-empty normal and candidate sets".into(),
        ));
    }
    normals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    candidates.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let mut thresholds: Vec<f64> = normals.iter().chain(candidates.iter()).copied().collect();
    thresholds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    thresholds.dedup();

    let n_norm = normals.len() as f64;
    let n_cand = candidates.len() as f64;
    let mut points = Vec::with_capacity(thresholds.len() + 2);
    let eval_at = |th: f64| {
        // count strictly-greater via first index with value > th
        let flagged_norm = normals.len() - normals.partition_point(|&v| v <= th);
        let missed_cand = candidates.partition_point(|&v| v <= th);
        DetPoint {
            threshold: th,
            fpr: flagged_norm as f64 / n_norm,
            fnr: missed_cand as f64 / n_cand,
        }
    };
    points.push(DetPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        fnr: 1.0,
    });
    for &th in thresholds.iter().rev() {
        points.push(eval_at(th));
    }
    points.push(DetPoint {
        threshold: f64::NEG_INFINITY,
        fpr: 1.0,
        fnr: 0.0,
    });

    let eer = eer_of(&points);
    let auc = auc_of(&points);
    Ok(DetCurve { points, eer, auc })
}

/// EER by linear interpolation between the adjacent sweep points straddling
/// FPR = FNR.
pub fn eer_of(points: &[DetPoint]) -> f64 {
    for w in points.windows(2) {
        let (p1, p2) = (w[0], w[1]);
        let d1 = p1.fpr - p1.fnr;
        let d2 = p2.fpr - p2.fnr;
        if d1 == 0.0 {
            return p1.fpr;
        }
        if d1 < 0.0 && d2 >= 0.0 {
            if d2 == d1 {
                return 0.5 * (p1.fpr + p2.fpr);
            }
            let t = -d1 / (d2 - d1);
            return p1.fpr + t * (p2.fpr - p1.fpr);
        }
    }
    points.last().map(|p| p.fpr).unwrap_or(0.5)
}

/// Trapezoidal integral of FNR over FPR on [0,1]; the sentinel endpoints make
/// the extension explicit.
pub fn auc_of(points: &[DetPoint]) -> f64 {
    let mut auc = 0.0;
    for w in points.windows(2) {
        auc += (w[1].fpr - w[0].fpr) * 0.5 * (w[0].fnr + w[1].fnr);
    }
    auc
}

/// Median with the mean-of-middle-two convention for even counts.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MedianGap {
    pub median_candidate: f64,
    pub median_normal: f64,
    pub median_maneuver: Option<f64>,
    /// median(candidate) − median(normal)
    pub delta: f64,
}

pub fn median_gap(records: &[ScoreRecord]) -> Result<MedianGap, DaganError> {
    let by_set = |set: SetLabel| -> Vec<f64> {
        records
            .iter()
            .filter(|r| r.set == set)
            .map(|r| r.m_anomaly)
            .collect()
    };
    let cand = by_set(SetLabel::Candidate);
    let norm = by_set(SetLabel::Normal);
    if cand.is_empty() || norm.is_empty() {
        return Err(DaganError::Usage(
            "median_gap needs non-empty normal and candidate sets".into(),
        ));
    }
    let man = by_set(SetLabel::Maneuver);
    let mc = median(&cand);
    let mn = median(&norm);
    Ok(MedianGap {
        median_candidate: mc,
        median_normal: mn,
        median_maneuver: if man.is_empty() { None } else { Some(median(&man)) },
        delta: mc - mn,
    })
}

/// Score histogram over [0,1] with `HIST_BINS` uniform bins; values outside
/// clamp into the edge bins.
pub fn histogram(scores: &[f64]) -> Vec<usize> {
    let mut bins = vec![0usize; HIST_BINS];
    for &s in scores {
        let idx = ((s * HIST_BINS as f64).floor() as isize).clamp(0, HIST_BINS as isize - 1);
        bins[idx as usize] += 1;
    }
    bins
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct OverlapRow {
    pub normal: usize,
    pub candidate: usize,
    pub maneuver: usize,
}

impl OverlapRow {
    pub fn total(&self) -> usize {
        self.normal + self.candidate + self.maneuver
    }

    fn count(records: &[&ScoreRecord]) -> Self {
        let mut row = OverlapRow::default();
        for r in records {
            match r.set {
                SetLabel::Normal => row.normal += 1,
                SetLabel::Candidate => row.candidate += 1,
                SetLabel::Maneuver => row.maneuver += 1,
            }
        }
        row
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OverlapTable {
    pub k: usize,
    pub top: OverlapRow,
    pub random: OverlapRow,
}

/// Set-label counts among the K highest-scoring segments, with a seeded
/// uniformly-random selection row for contrast. Score ties break toward the
/// earlier window, then the lexicographically smaller session id.
pub fn top_k_overlap(
    records: &[ScoreRecord],
    k: usize,
    random_seed: u64,
) -> Result<OverlapTable, DaganError> {
    if k == 0 || k > records.len() {
        return Err(DaganError::Usage(format!(
            "top-k {} out of range for {} scored segments",
            k,
            records.len()
        )));
    }
    let mut by_score: Vec<&ScoreRecord> = records.iter().collect();
    by_score.sort_by(|a, b| {
        b.m_anomaly
            .partial_cmp(&a.m_anomaly)
            .unwrap()
            .then(a.target_start_s.partial_cmp(&b.target_start_s).unwrap())
            .then(a.session_id.cmp(&b.session_id))
    });
    let top = OverlapRow::count(&by_score[..k]);

    let mut rng = ChaCha8Rng::seed_from_u64(random_seed);
    let picks = rand::seq::index::sample(&mut rng, records.len(), k);
    let sampled: Vec<&ScoreRecord> = picks.iter().map(|i| &records[i]).collect();
    let random = OverlapRow::count(&sampled);
    Ok(OverlapTable { k, top, random })
}

pub fn write_det_csv(path: &Path, curve: &DetCurve) -> Result<(), DaganError> {
    let mut out = String::from("threshold,fpr,fnr\n");
    for p in &curve.points {
        out.push_str(&format!("{},{:.9},{:.9}\n", fmt_threshold(p.threshold), p.fpr, p.fnr));
    }
    fs::write(path, out)?;
    Ok(())
}

fn fmt_threshold(t: f64) -> String {
    if t == f64::INFINITY {
        "inf".into()
    } else if t == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{t:.12}")
    }
}

pub fn write_hist_csv(path: &Path, bins: &[usize]) -> Result<(), DaganError> {
    let mut out = String::from("bin_lo,bin_hi,count\n");
    let w = 1.0 / bins.len() as f64;
    for (i, &c) in bins.iter().enumerate() {
        out.push_str(&format!("{:.3},{:.3},{}\n", i as f64 * w, (i + 1) as f64 * w, c));
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(score: f64, set: SetLabel) -> ScoreRecord {
        ScoreRecord {
            session_id: "s".into(),
            target_start_s: 0.0,
            s_real: None,
            s_fake: None,
            m_anomaly: score,
            set,
        }
    }

    fn recs(normal: &[f64], candidate: &[f64]) -> Vec<ScoreRecord> {
        normal
            .iter()
            .map(|&s| rec(s, SetLabel::Normal))
            .chain(candidate.iter().map(|&s| rec(s, SetLabel::Candidate)))
            .collect()
    }

    #[test]
    fn perfect_separation() {
        let c = det_curve(&recs(&[0.1, 0.2], &[0.3, 0.4])).unwrap();
        assert!(c.points.iter().any(|p| p.fpr == 0.0 && p.fnr == 0.0));
        assert_eq!(c.eer, 0.0);
        assert!(c.auc.abs() < 1e-12);
    }

    #[test]
    fn identical_multisets_are_chance() {
        let c = det_curve(&recs(&[0.2, 0.5, 0.7], &[0.2, 0.5, 0.7])).unwrap();
        assert!((c.eer - 0.5).abs() < 1e-12, "eer {}", c.eer);
        assert!((c.auc - 0.5).abs() < 0.34); // diagonal within 1/n slack
    }

    #[test]
    fn empty_set_is_usage_error() {
        assert!(det_curve(&recs(&[0.1], &[])).is_err());
        assert!(det_curve(&recs(&[], &[0.1])).is_err());
    }

    #[test]
    fn maneuvers_are_excluded_from_det() {
        let mut records = recs(&[0.1, 0.2], &[0.8, 0.9]);
        records.push(rec(0.99, SetLabel::Maneuver));
        let c = det_curve(&records).unwrap();
        assert_eq!(c.eer, 0.0); // the high-scoring maneuver does not pollute FPR
    }

    #[test]
    fn brute_force_sweep_oracle() {
        // 50 deterministic pseudo-random scores per set
        let mut state = 9_u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            (state >> 40) as f64 / (1u64 << 24) as f64
        };
        let normal: Vec<f64> = (0..50).map(|_| next()).collect();
        let candidate: Vec<f64> = (0..50).map(|_| next() * 0.9 + 0.1).collect();
        let c = det_curve(&recs(&normal, &candidate)).unwrap();
        for p in &c.points {
            let fpr = normal.iter().filter(|&&v| v > p.threshold).count() as f64 / 50.0;
            let fnr = candidate.iter().filter(|&&v| v <= p.threshold).count() as f64 / 50.0;
            assert_eq!(p.fpr, fpr);
            assert_eq!(p.fnr, fnr);
        }
        // Riemann-sum integration oracle
        let mut auc = 0.0;
        for w in c.points.windows(2) {
            auc += (w[1].fpr - w[0].fpr) * 0.5 * (w[0].fnr + w[1].fnr);
        }
        assert!((c.auc - auc).abs() < 1e-9);
    }

    #[test]
    fn sweep_is_monotone() {
        let mut state = 77_u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            (state >> 40) as f64 / (1u64 << 24) as f64
        };
        let normal: Vec<f64> = (0..40).map(|_| next()).collect();
        let candidate: Vec<f64> = (0..30).map(|_| next()).collect();
        let c = det_curve(&recs(&normal, &candidate)).unwrap();
        for w in c.points.windows(2) {
            assert!(w[1].threshold < w[0].threshold || w[0].threshold == f64::INFINITY);
            assert!(w[1].fpr >= w[0].fpr);
            assert!(w[1].fnr <= w[0].fnr);
        }
    }

    #[test]
    fn eer_auc_invariant_under_monotone_transform() {
        let mut state = 5_u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            (state >> 40) as f64 / (1u64 << 24) as f64
        };
        let normal: Vec<f64> = (0..30).map(|_| next() * 0.7).collect();
        let candidate: Vec<f64> = (0..30).map(|_| next() * 0.7 + 0.2).collect();
        let base = det_curve(&recs(&normal, &candidate)).unwrap();
        let tf = |v: f64| (v * 3.0).tanh(); // strictly increasing on [0,1]
        let mapped = det_curve(&recs(
            &normal.iter().map(|&v| tf(v)).collect::<Vec<_>>(),
            &candidate.iter().map(|&v| tf(v)).collect::<Vec<_>>(),
        ))
        .unwrap();
        assert!((base.eer - mapped.eer).abs() < 1e-12);
        assert!((base.auc - mapped.auc).abs() < 1e-12);
    }

    #[test]
    fn median_gap_examples() {
        let g = median_gap(&recs(&[0.3], &[0.8])).unwrap();
        assert!((g.delta - 0.5).abs() < 1e-12);
        let g = median_gap(&recs(&[0.1, 0.5], &[0.1, 0.5])).unwrap();
        assert_eq!(g.delta, 0.0);
        assert!(median_gap(&recs(&[], &[0.1])).is_err());
    }

    #[test]
    fn median_conventions() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn histogram_bins() {
        let h = histogram(&[0.0, 0.011, 0.999, 1.0]);
        assert_eq!(h[0], 2);
        assert_eq!(h[49], 2);
        assert_eq!(h.iter().sum::<usize>(), 4);
    }

    #[test]
    fn top_k_tie_rule_prefers_earlier() {
        let mut records = Vec::new();
        for i in 0..10 {
            records.push(ScoreRecord {
                session_id: "a".into(),
                target_start_s: i as f64 * 6.0,
                s_real: None,
                s_fake: None,
                m_anomaly: 0.5,
                set: if i < 3 { SetLabel::Candidate } else { SetLabel::Normal },
            });
        }
        let t = top_k_overlap(&records, 3, 1).unwrap();
        // all scores tie, so the 3 earliest (the candidates) win
        assert_eq!(t.top.candidate, 3);
        assert_eq!(t.top.total(), 3);
        assert_eq!(t.random.total(), 3);
    }

    #[test]
    fn top_k_bounds() {
        let records = recs(&[0.1, 0.2], &[0.9]);
        assert!(top_k_overlap(&records, 4, 1).is_err());
        assert!(top_k_overlap(&records, 0, 1).is_err());
        let t = top_k_overlap(&records, 2, 1).unwrap();
        assert_eq!(t.top.candidate, 1);
    }

    #[test]
    fn random_row_is_seed_deterministic() {
        let records = recs(&(0..50).map(|i| i as f64 / 50.0).collect::<Vec<_>>(), &[0.99; 10]);
        let a = top_k_overlap(&records, 10, 42).unwrap();
        let b = top_k_overlap(&records, 10, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn csv_writers() {
        let dir = tempfile::tempdir().unwrap();
        let c = det_curve(&recs(&[0.1, 0.2], &[0.3])).unwrap();
        let det_path = dir.path().join("det_x.csv");
        write_det_csv(&det_path, &c).unwrap();
        let text = std::fs::read_to_string(&det_path).unwrap();
        assert!(text.starts_with("threshold,fpr,fnr\n"));
        assert!(text.contains("inf,"));

        let hist_path = dir.path().join("hist_x_normal.csv");
        write_hist_csv(&hist_path, &histogram(&[0.5])).unwrap();
        let text = std::fs::read_to_string(&hist_path).unwrap();
        assert!(text.starts_with("bin_lo,bin_hi,count\n"));
        assert_eq!(text.lines().count(), 51);
    }
}
