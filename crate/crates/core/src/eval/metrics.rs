//! Segment-level detection and sensor-level localization scores.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{CopyKind, SegmentRow};
use crate::faults::FaultKind;

/// Precision, recall and their harmonic mean. Any ratio with a zero
/// denominator is 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn prf(tp: usize, fp: usize, fn_: usize) -> Prf {
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Prf {
        tp,
        fp,
        fn_,
        precision,
        recall,
        f1,
    }
}

/// A copy counts as detected faulty when it has at least one verdict; the
/// injected copies are the positives.
pub fn detection_metrics(rows: &[SegmentRow]) -> Prf {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for r in rows {
        match (r.copy, r.flagged.is_empty()) {
            (CopyKind::Injected, false) => tp += 1,
            (CopyKind::Injected, true) => fn_ += 1,
            (CopyKind::Clean, false) => fp += 1,
            (CopyKind::Clean, true) => {}
        }
    }
    prf(tp, fp, fn_)
}

/// Sensor-level counts summed over every copy; clean-copy flags are false
/// positives.
pub fn localization_metrics(rows: &[SegmentRow]) -> Prf {
    let tp = rows.iter().map(|r| r.tp).sum();
    let fp = rows.iter().map(|r| r.fp).sum();
    let fn_ = rows.iter().map(|r| r.fn_).sum();
    prf(tp, fp, fn_)
}

/// Mean delay in minutes over correctly localized faults, and the number of
/// faults never localized.
pub fn localization_time(rows: &[SegmentRow]) -> (Option<f64>, usize) {
    let delays: Vec<f64> = rows.iter().flat_map(|r| r.delays_min.iter().copied()).collect();
    let missed = rows.iter().filter(|r| r.copy == CopyKind::Injected).map(|r| r.fn_).sum();
    let mean = (!delays.is_empty()).then(|| delays.iter().sum::<f64>() / delays.len() as f64);
    (mean, missed)
}

/// Detection and localization rate of one fault kind.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KindRates {
    pub injected: usize,
    pub detected: usize,
    pub localized: usize,
    pub detection_rate: f64,
    pub localization_rate: f64,
}

/// A fault is detected when its injected copy has any verdict and localized
/// when its own sensor was flagged.
pub fn per_kind_rates(rows: &[SegmentRow]) -> BTreeMap<String, KindRates> {
    let mut out: BTreeMap<String, KindRates> =
        FaultKind::ALL.iter().map(|k| (k.name().to_string(), KindRates::default())).collect();
    for row in rows.iter().filter(|r| r.copy == CopyKind::Injected) {
        for spec in &row.faults {
            let e = out.get_mut(spec.kind.name()).expect("every kind is present");
            e.injected += 1;
            if !row.flagged.is_empty() {
                e.detected += 1;
            }
            if row.flagged.contains(&spec.sensor) {
                e.localized += 1;
            }
        }
    }
    for e in out.values_mut() {
        e.detection_rate = ratio(e.detected, e.injected);
        e.localization_rate = ratio(e.localized, e.injected);
    }
    out
}

/// Behaviour of injected copies carrying two or more faults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MultiSummary {
    pub segments: usize,
    /// Segments where at least one injected sensor was flagged.
    pub localized_any: usize,
    /// Segments where a further distinct sensor was flagged in a later window
    /// than the first verdict.
    pub surfaced_later: usize,
}

pub fn multi_summary(rows: &[SegmentRow]) -> MultiSummary {
    let mut s = MultiSummary::default();
    for r in rows.iter().filter(|r| r.copy == CopyKind::Injected && r.injected.len() >= 2) {
        s.segments += 1;
        if r.tp > 0 {
            s.localized_any += 1;
        }
        if let Some(first) = r.flag_taus.first() {
            if r.flag_taus.iter().any(|t| t > first) {
                s.surfaced_later += 1;
            }
        }
    }
    s
}

/// Every aggregate score of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub detection: Prf,
    pub localization: Prf,
    pub mean_localization_time_min: Option<f64>,
    pub missed_localizations: usize,
    pub per_fault_type: BTreeMap<String, KindRates>,
    pub multi: MultiSummary,
}

pub fn metrics_report(rows: &[SegmentRow]) -> MetricsReport {
    let (mean, missed) = localization_time(rows);
    MetricsReport {
        detection: detection_metrics(rows),
        localization: localization_metrics(rows),
        mean_localization_time_min: mean,
        missed_localizations: missed,
        per_fault_type: per_kind_rates(rows),
        multi: multi_summary(rows),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::Mode;
    use crate::faults::FaultSpec;
    use proptest::prelude::*;

    fn row(id: usize, copy: CopyKind, injected: &[&str], flagged: &[&str]) -> SegmentRow {
        SegmentRow::score(
            id,
            copy,
            Mode::Single,
            injected.iter().map(|s| s.to_string()).collect(),
            flagged.iter().enumerate().map(|(i, s)| (s.to_string(), i, 0.0)).collect(),
            &[],
        )
    }

    #[test]
    fn f1_examples() {
        let p = prf(1, 1, 0);
        assert_eq!((p.precision, p.recall), (0.5, 1.0));
        assert!((p.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(prf(0, 0, 5).f1, 0.0);
        assert_eq!(prf(0, 0, 5).precision, 0.0);
    }

    #[test]
    fn detection_counts_copies_once() {
        let rows = vec![
            row(0, CopyKind::Clean, &[], &["a", "b"]),
            row(0, CopyKind::Injected, &["a"], &["a"]),
            row(1, CopyKind::Clean, &[], &["c"]),
            row(1, CopyKind::Injected, &["b"], &["c"]),
        ];
        let d = detection_metrics(&rows);
        assert_eq!((d.tp, d.fp, d.fn_), (2, 2, 0));
        assert!((d.f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn localization_examples() {
        let exact = vec![row(0, CopyKind::Clean, &[], &[]), row(0, CopyKind::Injected, &["a"], &["a"])];
        let m = localization_metrics(&exact);
        assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));

        let extra = vec![row(0, CopyKind::Injected, &["a"], &["a", "x"])];
        let m = localization_metrics(&extra);
        assert_eq!((m.precision, m.recall), (0.5, 1.0));
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-15);

        let partial = vec![row(0, CopyKind::Injected, &["a", "b", "c"], &["a", "b"])];
        let m = localization_metrics(&partial);
        assert_eq!(m.precision, 1.0);
        assert!((m.recall - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.f1 - 0.8).abs() < 1e-15);
    }

    #[test]
    fn delays_average_over_correct_localizations() {
        let spec = |s: &str, start: f64| FaultSpec {
            kind: FaultKind::Drift,
            sensor: s.into(),
            start,
            delta: 1800.0,
            params: vec![],
            seed: 0,
            segment: None,
        };
        let r = SegmentRow::score(
            0,
            CopyKind::Injected,
            Mode::Multi,
            vec!["a".into(), "b".into(), "c".into()],
            vec![("a".into(), 10, 100.0 * 60.0 + 240.0), ("b".into(), 12, 100.0 * 60.0 + 600.0)],
            &[spec("a", 6000.0), spec("b", 6000.0), spec("c", 6000.0)],
        );
        assert_eq!(r.delays_min, vec![4.0, 10.0]);
        let (mean, missed) = localization_time(&[r]);
        assert_eq!(mean, Some(7.0));
        assert_eq!(missed, 1);
    }

    #[test]
    fn kind_rates_follow_each_fault() {
        let spec = |s: &str, kind: FaultKind| FaultSpec {
            kind,
            sensor: s.into(),
            start: 0.0,
            delta: 1800.0,
            params: vec![],
            seed: 0,
            segment: None,
        };
        let rows = vec![
            SegmentRow::score(0, CopyKind::Injected, Mode::Single, vec!["a".into()], vec![("b".into(), 4, 300.0)], &[spec("a", FaultKind::Drift)]),
            SegmentRow::score(1, CopyKind::Injected, Mode::Single, vec!["c".into()], vec![("c".into(), 4, 300.0)], &[spec("c", FaultKind::Drift)]),
            SegmentRow::score(2, CopyKind::Injected, Mode::Single, vec!["d".into()], vec![], &[spec("d", FaultKind::Spike)]),
        ];
        let rates = per_kind_rates(&rows);
        let drift = &rates["drift"];
        assert_eq!((drift.injected, drift.detected, drift.localized), (2, 2, 1));
        assert_eq!((drift.detection_rate, drift.localization_rate), (1.0, 0.5));
        assert_eq!(rates["spike"].detection_rate, 0.0);
        assert_eq!(rates["outlier"].injected, 0);
    }

    proptest! {
        #[test]
        fn f1_lies_between_precision_and_recall(tp in 0usize..50, fp in 0usize..50, fn_ in 0usize..50) {
            let m = prf(tp, fp, fn_);
            for v in [m.precision, m.recall, m.f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            if tp > 0 {
                prop_assert!(m.f1 >= m.precision.min(m.recall) - 1e-15);
                prop_assert!(m.f1 <= m.precision.max(m.recall) + 1e-15);
            }
            if m.precision == m.recall {
                prop_assert!((m.f1 - m.precision).abs() < 1e-15);
            }
        }
    }
}
