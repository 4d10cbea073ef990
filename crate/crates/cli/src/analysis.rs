//! Pure post-processing of trajectory logs shared by recipes and tests.

use eos_core::trainer::{PhaseLabel, PhaseSegment, StepRecord, TrajectoryLog};

/// Sharpness relative to `2/η` after sharpness first rises through it.
#[derive(Debug, Clone, PartialEq)]
pub struct HoverStats {
    pub threshold: f64,
    pub first_crossing: usize,
    /// Mean of `S / (2/η)` over probes from the crossing on.
    pub mean_ratio: f64,
    pub probes: usize,
}

/// `None` when sharpness never climbs from below `2/η` to above it.
pub fn hover_stats(log: &TrajectoryLog, eta: f64, horizon: Option<usize>) -> Option<HoverStats> {
    let threshold = 2.0 / eta;
    let probes: Vec<(usize, f64)> = log
        .records
        .iter()
        .filter_map(|r| r.sharpness.map(|s| (r.epoch, s)))
        .collect();
    let i = (1..probes.len()).find(|&i| probes[i - 1].1 < threshold && probes[i].1 >= threshold)?;
    let first_crossing = probes[i].0;
    let tail: Vec<f64> = probes[i..]
        .iter()
        .filter(|(e, _)| horizon.is_none_or(|h| *e < first_crossing + h))
        .map(|(_, s)| s / threshold)
        .collect();
    Some(HoverStats {
        threshold,
        first_crossing,
        mean_ratio: tail.iter().sum::<f64>() / tail.len() as f64,
        probes: tail.len(),
    })
}

/// Unstable segments as inclusive `(start, end)` epoch pairs.
pub fn instability_windows(segments: &[PhaseSegment]) -> Vec<(usize, usize)> {
    segments
        .iter()
        .filter(|s| s.label == PhaseLabel::Unstable)
        .map(|s| (s.start_epoch, s.end_epoch))
        .collect()
}

/// Largest rise of a series over its earlier value, i.e. how far it is
/// from non-increasing. Zero for non-increasing input.
pub fn max_rise(values: &[f64]) -> f64 {
    values
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(0.0, f64::max)
}

/// Similarity trace of one instability window, cut at the loss peak.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowTrace {
    pub start: usize,
    pub end: usize,
    pub peak_epoch: usize,
    /// `(epoch, subspace similarity)` from the window start to the peak.
    pub similarity: Vec<(usize, f64)>,
}

impl WindowTrace {
    pub fn max_rise(&self) -> f64 {
        let v: Vec<f64> = self.similarity.iter().map(|p| p.1).collect();
        max_rise(&v)
    }

    /// Mean absolute epoch-to-epoch change, a roughness measure.
    pub fn roughness(&self) -> f64 {
        let v: Vec<f64> = self.similarity.iter().map(|p| p.1).collect();
        if v.len() < 2 {
            return 0.0;
        }
        v.windows(2).map(|w| (w[1] - w[0]).abs()).sum::<f64>() / (v.len() - 1) as f64
    }
}

/// Cuts each window's similarity trace at its loss peak.
pub fn window_traces(records: &[StepRecord], windows: &[(usize, usize)]) -> Vec<WindowTrace> {
    windows
        .iter()
        .filter_map(|&(start, end)| {
            let inside: Vec<&StepRecord> = records
                .iter()
                .filter(|r| r.epoch >= start && r.epoch <= end && r.subspace_sim.is_some())
                .collect();
            let peak = inside.iter().max_by(|a, b| a.loss.total_cmp(&b.loss))?;
            Some(WindowTrace {
                start,
                end,
                peak_epoch: peak.epoch,
                similarity: inside
                    .iter()
                    .filter(|r| r.epoch <= peak.epoch)
                    .map(|r| (r.epoch, r.subspace_sim.unwrap()))
                    .collect(),
            })
        })
        .collect()
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation (average ranks for ties); NaN when either
/// side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Population standard deviation.
pub fn std_dev(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
}

/// Mean validation accuracy of the `n` learning rates just above `limit`
/// and the `n` just below it. `points` are `(η, mean accuracy)` sorted by η;
/// `None` when either side has fewer than `n` entries.
pub fn goldilocks_gap(points: &[(f64, f64)], limit: f64, n: usize) -> Option<(f64, f64)> {
    let below: Vec<f64> = points.iter().filter(|p| p.0 <= limit).map(|p| p.1).collect();
    let above: Vec<f64> = points.iter().filter(|p| p.0 > limit).map(|p| p.1).collect();
    if below.len() < n || above.len() < n {
        return None;
    }
    Some((mean(&below[below.len() - n..]), mean(&above[..n])))
}

#[cfg(test)]
mod tests {
    use super::*;
    use eos_core::trainer::RunStatus;

    fn rec(epoch: usize, loss: f64, sharpness: Option<f64>, sim: Option<f64>) -> StepRecord {
        StepRecord {
            epoch,
            loss,
            train_acc: 0.0,
            sharpness,
            grad_norm: 0.0,
            osc_dist: None,
            alpha: None,
            eigsim: None,
            subspace_sim: sim,
            eta_used: 0.1,
            lambdas: None,
        }
    }

    #[test]
    fn hover_uses_the_first_upward_crossing() {
        // Starts above the threshold (20), dips, then climbs through it at epoch 3.
        let s = [25.0, 15.0, 18.0, 21.0, 19.0, 22.0];
        let log = TrajectoryLog {
            records: s.iter().enumerate().map(|(i, &v)| rec(i, 1.0, Some(v), None)).collect(),
            status: RunStatus::Finished,
            similarity_k: 0,
            probe_every: 1,
        };
        let h = hover_stats(&log, 0.1, None).unwrap();
        assert_eq!(h.first_crossing, 3);
        assert_eq!(h.probes, 3);
        assert!((h.mean_ratio - (21.0 + 19.0 + 22.0) / 60.0).abs() < 1e-12);
        assert_eq!(hover_stats(&log, 0.1, Some(2)).unwrap().probes, 2);
        assert!(hover_stats(&log, 0.01, None).is_none());
    }

    #[test]
    fn spearman_examples() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[9.0, 5.0, 1.0]) + 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]) - 0.8).abs() < 1e-12);
        assert!(spearman(&[1.0, 2.0], &[3.0, 3.0]).is_nan());
    }

    #[test]
    fn window_trace_stops_at_loss_peak() {
        let records = vec![
            rec(10, 1.0, None, Some(1.0)),
            rec(12, 1.5, None, Some(0.9)),
            rec(14, 2.0, None, Some(0.91)),
            rec(16, 1.2, None, Some(0.5)),
        ];
        let t = window_traces(&records, &[(10, 16)]);
        assert_eq!(t[0].peak_epoch, 14);
        assert_eq!(t[0].similarity.len(), 3);
        assert!((t[0].max_rise() - 0.01).abs() < 1e-12);
    }

    #[test]
    fn goldilocks_sides() {
        let pts = [(1.0, 0.7), (2.0, 0.7), (3.0, 0.71), (4.0, 0.8), (5.0, 0.8)];
        let (below, above) = goldilocks_gap(&pts, 3.5, 2).unwrap();
        assert!((below - 0.705).abs() < 1e-12);
        assert!((above - 0.8).abs() < 1e-12);
        assert!(goldilocks_gap(&pts, 3.5, 3).is_none());
    }
}
