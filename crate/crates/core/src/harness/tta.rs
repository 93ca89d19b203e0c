//! Time-to-accuracy comparison between runs.

use super::metrics::{MetricsRow, Scope};
use crate::error::{Error, Result};

/// Accuracy margin below the smaller peak that defines the common target.
pub const NOMINAL_MARGIN: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct RunTta {
    pub name: String,
    pub peak_accuracy: f64,
    /// First server wall clock at which accuracy reached the nominal target;
    /// `None` if it never did.
    pub tta_s: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TtaResult {
    pub nominal_accuracy: f64,
    pub runs: Vec<RunTta>,
    /// `tta(runs[0]) / tta(runs[i])`; undefined when either is unreachable.
    pub ratios: Vec<Option<f64>>,
}

fn accuracy_points(rows: &[MetricsRow]) -> Vec<(f64, f64)> {
    let mut pts: Vec<(u32, f64, f64)> = rows
        .iter()
        .filter(|r| r.scope == Scope::Server)
        .filter_map(|r| {
            r.test_accuracy
                .filter(|a| a.is_finite())
                .map(|a| (r.round, r.wall_clock_s, a))
        })
        .collect();
    pts.sort_by_key(|p| p.0);
    pts.into_iter().map(|(_, w, a)| (w, a)).collect()
}

/// The first run is the baseline. The nominal target is the smallest peak
/// accuracy minus one percentage point.
pub fn analyze_tta(runs: &[(String, Vec<MetricsRow>)]) -> Result<TtaResult> {
    analyze_tta_at(runs, None)
}

/// Like [`analyze_tta`], but `target` replaces the derived nominal accuracy.
/// A run whose accuracy never reaches the target is unreachable.
pub fn analyze_tta_at(
    runs: &[(String, Vec<MetricsRow>)],
    target: Option<f64>,
) -> Result<TtaResult> {
    if runs.len() < 2 {
        return Err(Error::param("time-to-accuracy needs at least two runs"));
    }
    let points: Vec<_> = runs.iter().map(|(_, rows)| accuracy_points(rows)).collect();
    let mut peaks = Vec::with_capacity(runs.len());
    for ((name, _), pts) in runs.iter().zip(&points) {
        let peak = pts
            .iter()
            .map(|p| p.1)
            .reduce(f64::max)
            .ok_or_else(|| Error::param(format!("run {name:?} has no server accuracy rows")))?;
        peaks.push(peak);
    }
    let nominal = target
        .unwrap_or_else(|| peaks.iter().copied().fold(f64::INFINITY, f64::min) - NOMINAL_MARGIN);
    let tta: Vec<RunTta> = runs
        .iter()
        .zip(&points)
        .zip(&peaks)
        .map(|(((name, _), pts), &peak)| RunTta {
            name: name.clone(),
            peak_accuracy: peak,
            tta_s: pts.iter().find(|p| p.1 >= nominal).map(|p| p.0),
        })
        .collect();
    let ratios = tta
        .iter()
        .map(|r| match (tta[0].tta_s, r.tta_s) {
            (Some(base), Some(t)) if t > 0.0 => Some(base / t),
            _ => None,
        })
        .collect();
    Ok(TtaResult {
        nominal_accuracy: nominal,
        runs: tta,
        ratios,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn server(round: u32, wall: f64, acc: f64) -> MetricsRow {
        MetricsRow {
            scope: Scope::Server,
            round,
            pull_s: 0.0,
            sample_s: 0.0,
            train_s: 0.0,
            push_s: 0.0,
            round_s: 0.0,
            test_accuracy: Some(acc),
            wall_clock_s: wall,
            pulled_keys: 0,
            pushed_keys: 0,
        }
    }

    #[test]
    fn identical_runs_have_unit_ratio() {
        let rows = vec![
            server(0, 1.0, 0.25),
            server(1, 2.0, 0.75),
            server(2, 3.0, 0.5),
        ];
        let r = analyze_tta(&[("a".into(), rows.clone()), ("b".into(), rows)]).unwrap();
        assert_eq!(r.nominal_accuracy, 0.75 - 0.01);
        assert_eq!(r.runs[1].tta_s, Some(2.0));
        assert_eq!(r.ratios, vec![Some(1.0), Some(1.0)]);
    }

    #[test]
    fn target_above_a_peak_is_unreachable() {
        let a = vec![server(1, 1.0, 0.5), server(2, 2.0, 0.9)];
        let b = vec![server(1, 1.0, 0.6)];
        let r = analyze_tta_at(&[("a".into(), a), ("b".into(), b)], Some(0.8)).unwrap();
        assert_eq!(r.runs[0].tta_s, Some(2.0));
        assert_eq!(r.runs[1].tta_s, None);
        assert_eq!(r.ratios, vec![Some(1.0), None]);
    }

    #[test]
    fn needs_two_runs_with_accuracy() {
        let rows = vec![server(0, 1.0, 0.5)];
        assert!(analyze_tta(&[("a".into(), rows.clone())]).is_err());
        assert!(analyze_tta(&[("a".into(), rows), ("b".into(), vec![])]).is_err());
    }
}
