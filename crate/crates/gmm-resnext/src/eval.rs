//! Trial scoring metrics: cosine similarity, equal error rate, and minimum
//! detection cost, plus the scores-file and report formats.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::TrialLabel;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DcfParams {
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
}

impl Default for DcfParams {
    fn default() -> Self {
        DcfParams {
            p_target: 0.01,
            c_miss: 0.01,
            c_fa: 0.01,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrialScore {
    pub label: TrialLabel,
    pub enroll_utt: String,
    pub test_utt: String,
    pub score: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub eer: f64,
    pub min_dcf: f64,
    pub threshold_eer: f64,
    pub threshold_dcf: f64,
    pub n_target: usize,
    pub n_nontarget: usize,
}

/// Cosine similarity a·b / (‖a‖‖b‖). Zero vectors are rejected.
pub fn cosine(a: &[f32], b: &[f32]) -> Result<f64> {
    assert_eq!(a.len(), b.len(), "embedding dimension mismatch");
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        dot += x as f64 * y as f64;
        na += x as f64 * x as f64;
        nb += y as f64 * y as f64;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok(dot / (na.sqrt() * nb.sqrt()))
}

/// Threshold sweep over the observed scores plus one sentinel above the
/// maximum (the reject-all operating point). At threshold t, a trial is
/// accepted when its score >= t, so P_miss(t) = fraction of targets < t and
/// P_fa(t) = fraction of nontargets >= t.
fn sweep(targets: &[f64], nontargets: &[f64]) -> Result<Vec<(f64, f64, f64)>> {
    if targets.is_empty() || nontargets.is_empty() {
        return Err(Error::SingleClass);
    }
    let mut sorted_t = targets.to_vec();
    let mut sorted_n = nontargets.to_vec();
    sorted_t.sort_by(|a, b| a.partial_cmp(b).unwrap());
    sorted_n.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut thresholds: Vec<f64> = targets.iter().chain(nontargets).copied().collect();
    thresholds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    thresholds.dedup();
    let max = *thresholds.last().unwrap();
    thresholds.push(max + 1.0);

    let nt = sorted_t.len() as f64;
    let nn = sorted_n.len() as f64;
    Ok(thresholds
        .into_iter()
        .map(|t| {
            let below_t = sorted_t.partition_point(|&s| s < t) as f64;
            let below_n = sorted_n.partition_point(|&s| s < t) as f64;
            (t, below_t / nt, (nn - below_n) / nn)
        })
        .collect())
}

/// Equal error rate and its threshold. The miss and false-alarm rates are
/// interpolated linearly between adjacent sweep points to locate the
/// crossing.
pub fn eer(targets: &[f64], nontargets: &[f64]) -> Result<(f64, f64)> {
    let points = sweep(targets, nontargets)?;
    // diff = P_miss - P_fa is non-decreasing: starts <= 0, ends at +1.
    for w in points.windows(2) {
        let (t0, pm0, pf0) = w[0];
        let (t1, pm1, pf1) = w[1];
        let d0 = pm0 - pf0;
        let d1 = pm1 - pf1;
        if d0 == 0.0 {
            return Ok((pm0, t0));
        }
        if d0 < 0.0 && d1 >= 0.0 {
            let lambda = -d0 / (d1 - d0);
            let eer = pm0 + lambda * (pm1 - pm0);
            let threshold = t0 + lambda * (t1 - t0);
            return Ok((eer, threshold));
        }
    }
    let (t, pm, _) = *points.last().unwrap();
    Ok((pm, t))
}

/// Minimum normalized detection cost over the threshold sweep, and the
/// threshold achieving it.
pub fn min_dcf(targets: &[f64], nontargets: &[f64], params: &DcfParams) -> Result<(f64, f64)> {
    let points = sweep(targets, nontargets)?;
    let miss_weight = params.c_miss * params.p_target;
    let fa_weight = params.c_fa * (1.0 - params.p_target);
    let norm = miss_weight.min(fa_weight);
    let mut best = f64::INFINITY;
    let mut best_t = 0.0;
    for (t, pm, pf) in points {
        let cost = (miss_weight * pm + fa_weight * pf) / norm;
        if cost < best {
            best = cost;
            best_t = t;
        }
    }
    Ok((best, best_t))
}

pub fn split_scores(scores: &[TrialScore]) -> (Vec<f64>, Vec<f64>) {
    let mut targets = Vec::new();
    let mut nontargets = Vec::new();
    for s in scores {
        match s.label {
            TrialLabel::Target => targets.push(s.score),
            TrialLabel::NonTarget => nontargets.push(s.score),
        }
    }
    (targets, nontargets)
}

pub fn compute_report(scores: &[TrialScore], params: &DcfParams) -> Result<EvalReport> {
    let (targets, nontargets) = split_scores(scores);
    let (eer_value, threshold_eer) = eer(&targets, &nontargets)?;
    let (dcf_value, threshold_dcf) = min_dcf(&targets, &nontargets, params)?;
    Ok(EvalReport {
        eer: eer_value,
        min_dcf: dcf_value,
        threshold_eer,
        threshold_dcf,
        n_target: targets.len(),
        n_nontarget: nontargets.len(),
    })
}

/// Scores file: one `enroll_utt test_utt score` line per trial.
pub fn write_scores(path: &Path, scores: &[TrialScore]) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for s in scores {
        // default Display prints the shortest digits that round-trip exactly
        writeln!(file, "{} {} {}", s.enroll_utt, s.test_utt, s.score)
            .map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Read a scores file back, resolving labels from the trial list order-
/// insensitively by (enroll, test) pair.
pub fn read_scores(
    path: &Path,
    trials: &[crate::dataio::TrialRecord],
) -> Result<Vec<TrialScore>> {
    let mut labels = std::collections::HashMap::new();
    for t in trials {
        labels.insert((t.enroll_utt.as_str(), t.test_utt.as_str()), t.label);
    }
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let bad = |reason: String| Error::TrialFile {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        };
        if parts.len() != 3 {
            return Err(bad(format!("expected 3 fields, found {}", parts.len())));
        }
        let score: f64 = parts[2]
            .parse()
            .map_err(|_| bad(format!("bad score '{}'", parts[2])))?;
        let label = labels
            .get(&(parts[0], parts[1]))
            .copied()
            .ok_or_else(|| bad(format!("unknown trial pair {} {}", parts[0], parts[1])))?;
        out.push(TrialScore {
            label,
            enroll_utt: parts[0].to_string(),
            test_utt: parts[1].to_string(),
            score,
        });
    }
    Ok(out)
}

/// Exhaustive-scan oracles for the metrics: for each candidate threshold the
/// rates are recomputed from scratch by full passes over the scores. Used by
/// the test suite to validate the sorted-sweep implementations.
pub mod oracle {
    use super::DcfParams;

    fn rates_at(targets: &[f64], nontargets: &[f64], t: f64) -> (f64, f64) {
        let miss = targets.iter().filter(|&&s| s < t).count() as f64 / targets.len() as f64;
        let fa = nontargets.iter().filter(|&&s| s >= t).count() as f64
            / nontargets.len() as f64;
        (miss, fa)
    }

    fn candidate_thresholds(targets: &[f64], nontargets: &[f64]) -> Vec<f64> {
        let mut ts: Vec<f64> = targets.iter().chain(nontargets).copied().collect();
        ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        ts.dedup();
        let max = *ts.last().unwrap();
        ts.push(max + 1.0);
        ts
    }

    pub fn eer_scan(targets: &[f64], nontargets: &[f64]) -> (f64, f64) {
        let ts = candidate_thresholds(targets, nontargets);
        for i in 0..ts.len() - 1 {
            let (pm0, pf0) = rates_at(targets, nontargets, ts[i]);
            let (pm1, pf1) = rates_at(targets, nontargets, ts[i + 1]);
            let d0 = pm0 - pf0;
            let d1 = pm1 - pf1;
            if d0 == 0.0 {
                return (pm0, ts[i]);
            }
            if d0 < 0.0 && d1 >= 0.0 {
                let lambda = -d0 / (d1 - d0);
                return (pm0 + lambda * (pm1 - pm0), ts[i] + lambda * (ts[i + 1] - ts[i]));
            }
        }
        let t = *ts.last().unwrap();
        let (pm, _) = rates_at(targets, nontargets, t);
        (pm, t)
    }

    pub fn min_dcf_scan(targets: &[f64], nontargets: &[f64], p: &DcfParams) -> (f64, f64) {
        let mw = p.c_miss * p.p_target;
        let fw = p.c_fa * (1.0 - p.p_target);
        let norm = mw.min(fw);
        let mut best = f64::INFINITY;
        let mut best_t = 0.0;
        for t in candidate_thresholds(targets, nontargets) {
            let (pm, pf) = rates_at(targets, nontargets, t);
            let cost = (mw * pm + fw * pf) / norm;
            if cost < best {
                best = cost;
                best_t = t;
            }
        }
        (best, best_t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn cosine_basics() {
        assert!((cosine(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!(cosine(&[1.0, 0.0], &[0.0, 3.0]).unwrap().abs() < 1e-12);
        assert!((cosine(&[1.0, -2.0], &[-1.0, 2.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!(matches!(cosine(&[0.0, 0.0], &[1.0, 1.0]), Err(Error::ZeroVector)));
    }

    #[test]
    fn eer_perfect_separation_is_zero() {
        let (e, _) = eer(&[0.9, 0.8], &[0.1, 0.2]).unwrap();
        assert_eq!(e, 0.0);
    }

    #[test]
    fn eer_crossing_case() {
        let (e, t) = eer(&[0.8, 0.2], &[0.6, 0.1]).unwrap();
        assert!((e - 0.5).abs() < 1e-12, "eer {e}");
        assert!((t - 0.6).abs() < 1e-12, "threshold {t}");
    }

    #[test]
    fn eer_label_swap_negation_symmetry() {
        let targets = [0.7, 0.4, 0.9, 0.3];
        let nontargets = [0.5, 0.2, 0.6];
        let (e1, _) = eer(&targets, &nontargets).unwrap();
        let neg_t: Vec<f64> = nontargets.iter().map(|s| -s).collect();
        let neg_n: Vec<f64> = targets.iter().map(|s| -s).collect();
        let (e2, _) = eer(&neg_t, &neg_n).unwrap();
        assert!((e1 - e2).abs() < 1e-12);
    }

    #[test]
    fn eer_requires_both_classes() {
        assert!(matches!(eer(&[0.5], &[]), Err(Error::SingleClass)));
        assert!(matches!(eer(&[], &[0.5]), Err(Error::SingleClass)));
    }

    #[test]
    fn min_dcf_perfect_and_degenerate() {
        let p = DcfParams::default();
        let (d, _) = min_dcf(&[0.9, 0.8], &[0.1, 0.2], &p).unwrap();
        assert_eq!(d, 0.0);
        // every trial has the same score: best choice is a trivial system
        let (d, _) = min_dcf(&[0.5, 0.5], &[0.5, 0.5, 0.5], &p).unwrap();
        assert!((d - 1.0).abs() < 1e-12, "degenerate minDCF {d}");
    }

    #[test]
    fn min_dcf_scale_invariance() {
        let p = DcfParams::default();
        let targets = [0.7, 0.4, 0.9];
        let nontargets = [0.5, 0.2, 0.6, 0.1];
        let (d1, _) = min_dcf(&targets, &nontargets, &p).unwrap();
        let st: Vec<f64> = targets.iter().map(|s| s * 2.0).collect();
        let sn: Vec<f64> = nontargets.iter().map(|s| s * 2.0).collect();
        let (d2, _) = min_dcf(&st, &sn, &p).unwrap();
        assert!((d1 - d2).abs() < 1e-12);
    }

    #[test]
    fn metrics_match_scan_oracle_on_random_sets() {
        let p = DcfParams::default();
        let mut rng = ChaCha20Rng::seed_from_u64(42);
        for _ in 0..30 {
            let nt = rng.gen_range(1..200);
            let nn = rng.gen_range(1..200);
            let targets: Vec<f64> =
                (0..nt).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let nontargets: Vec<f64> =
                (0..nn).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (e, _) = eer(&targets, &nontargets).unwrap();
            let (eo, _) = oracle::eer_scan(&targets, &nontargets);
            assert!((e - eo).abs() < 1e-9, "eer {e} vs oracle {eo}");
            let (d, dt) = min_dcf(&targets, &nontargets, &p).unwrap();
            let (doracle, dot) = oracle::min_dcf_scan(&targets, &nontargets, &p);
            assert!((d - doracle).abs() < 1e-9, "dcf {d} vs oracle {doracle}");
            assert_eq!(dt, dot);
        }
    }

    #[test]
    fn report_consistent_with_metrics_and_file_roundtrip() {
        use crate::dataio::TrialRecord;
        let scores = vec![
            TrialScore { label: TrialLabel::Target, enroll_utt: "a".into(), test_utt: "b".into(), score: 0.8 },
            TrialScore { label: TrialLabel::Target, enroll_utt: "a".into(), test_utt: "c".into(), score: 0.2 },
            TrialScore { label: TrialLabel::NonTarget, enroll_utt: "b".into(), test_utt: "d".into(), score: 0.6 },
            TrialScore { label: TrialLabel::NonTarget, enroll_utt: "c".into(), test_utt: "d".into(), score: 0.1 },
        ];
        let p = DcfParams::default();
        let report = compute_report(&scores, &p).unwrap();
        let (e, _) = eer(&[0.8, 0.2], &[0.6, 0.1]).unwrap();
        assert_eq!(report.eer, e);
        assert_eq!(report.n_target, 2);
        assert_eq!(report.n_nontarget, 2);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.txt");
        write_scores(&path, &scores).unwrap();
        let trials: Vec<TrialRecord> = scores
            .iter()
            .map(|s| TrialRecord {
                label: s.label,
                enroll_utt: s.enroll_utt.clone(),
                test_utt: s.test_utt.clone(),
            })
            .collect();
        let back = read_scores(&path, &trials).unwrap();
        for (a, b) in scores.iter().zip(&back) {
            assert_eq!(a.score, b.score);
            assert_eq!(a.label, b.label);
        }
    }

    proptest! {
        // Any strictly increasing transform of all scores leaves both
        // metrics unchanged.
        #[test]
        fn metrics_invariant_under_monotone_transform(
            mut targets in proptest::collection::vec(-1.0f64..1.0, 1..40),
            mut nontargets in proptest::collection::vec(-1.0f64..1.0, 1..40),
            a in 0.1f64..5.0,
            b in -2.0f64..2.0,
        ) {
            targets.dedup();
            nontargets.dedup();
            let f = |s: f64| a * s + b + (s * 0.5).tanh();
            let ft: Vec<f64> = targets.iter().map(|&s| f(s)).collect();
            let fn_: Vec<f64> = nontargets.iter().map(|&s| f(s)).collect();
            let (e1, _) = eer(&targets, &nontargets).unwrap();
            let (e2, _) = eer(&ft, &fn_).unwrap();
            prop_assert!((e1 - e2).abs() < 1e-9);
            let p = DcfParams::default();
            let (d1, _) = min_dcf(&targets, &nontargets, &p).unwrap();
            let (d2, _) = min_dcf(&ft, &fn_, &p).unwrap();
            prop_assert!((d1 - d2).abs() < 1e-9);
        }
    }
}
