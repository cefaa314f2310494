//! Closed-loop evaluation against ground truth and summary statistics.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::grid::BusId;
use crate::integrators::TrapezoidalOptions;
use crate::mlp::NeuralOdeModel;
use crate::neudye::{simulate_closed_loop, simulate_dnn_closed_loop, DiscreteSurrogate, Episode, HybridState, HybridTrajectory};
use crate::par::{map_indexed, Execution};

/// Denominator floor of the relative error.
pub const REL_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy)]
pub enum Surrogate<'a> {
    Node(&'a NeuralOdeModel),
    Discrete(&'a DiscreteSurrogate),
}

impl Surrogate<'_> {
    pub fn simulate(&self, ep: &Episode, opts: &TrapezoidalOptions) -> Result<HybridTrajectory> {
        let d = ep.data;
        let x0 = HybridState {
            x_in: d.x_in(0).to_vec(),
            x_ex: d.x_ex(0).to_vec(),
            t: d.grid.t0,
        };
        match self {
            Surrogate::Node(m) => simulate_closed_loop(m, ep.insys, &x0, &d.scenario, &d.grid, opts),
            Surrogate::Discrete(s) => simulate_dnn_closed_loop(s, ep.insys, &x0, &d.scenario, &d.grid, opts),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Monitored {
    /// Tie-line current magnitude.
    Tie,
    /// Internal machine electrical frequency (Hz).
    Frequency,
    /// Boundary bus voltage magnitude.
    Voltage,
}

/// Relative-error time series of one scenario, one column per state.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSeries {
    pub id: usize,
    pub t: Vec<f64>,
    pub names: Vec<String>,
    pub kinds: Vec<Monitored>,
    /// `values[k][i]` is the error of state `k` at sample `i`.
    pub values: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSummary {
    pub states: Vec<String>,
    pub mean_per_state: Vec<f64>,
    pub max_per_state: Vec<f64>,
    /// Mean and max over tie currents and internal frequencies.
    pub mean: f64,
    pub max: f64,
    pub tie_mean: f64,
    pub tie_max: f64,
    pub frequency_mean: f64,
    pub frequency_max: f64,
    pub voltage_mean: f64,
    pub voltage_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub id: usize,
    pub fault_bus: Option<BusId>,
    pub clear: f64,
    pub alpha: f64,
    pub diverged: bool,
    pub error: Option<String>,
    /// Absent when the closed loop diverged.
    pub summary: Option<ScenarioSummary>,
}

/// Quartiles with Tukey whiskers (1.5 IQR, clipped to the data).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub n: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub whisker_low: f64,
    pub whisker_high: f64,
}

impl BoxStats {
    /// Quartiles by linear interpolation between order statistics.
    pub fn from_values(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let pos = p * (v.len() - 1) as f64;
            let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
            v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
        };
        let (q1, median, q3) = (q(0.25), q(0.5), q(0.75));
        let iqr = q3 - q1;
        let (lo_fence, hi_fence) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
        Some(Self {
            n: v.len(),
            min: v[0],
            q1,
            median,
            q3,
            max: v[v.len() - 1],
            whisker_low: v.iter().copied().find(|&x| x >= lo_fence).unwrap_or(v[0]),
            whisker_high: v.iter().rev().copied().find(|&x| x <= hi_fence).unwrap_or(v[v.len() - 1]),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub scenarios: Vec<ScenarioReport>,
    pub completed: usize,
    pub diverged: usize,
    /// Across completed scenarios, of the per-scenario mean and max.
    pub mean_error: Option<BoxStats>,
    pub max_error: Option<BoxStats>,
    pub tie_mean_error: Option<BoxStats>,
}

/// Relative error `|x - x̂| / (max_t |x̂| + ε)` of each series.
fn relative_series(pred: &[Vec<f64>], truth: &[Vec<f64>]) -> Vec<Vec<f64>> {
    pred.iter()
        .zip(truth)
        .map(|(p, t)| {
            let denom = t.iter().fold(0.0f64, |m, v| m.max(v.abs())) + REL_EPS;
            p.iter().zip(t).map(|(a, b)| (a - b).abs() / denom).collect()
        })
        .collect()
}

/// Names, kinds, predicted and measured series, one entry per monitored state.
type MonitoredSeries = (Vec<String>, Vec<Monitored>, Vec<Vec<f64>>, Vec<Vec<f64>>);

/// Monitored quantities of a closed-loop trajectory and of the measurements.
fn monitored(ep: &Episode, traj: &HybridTrajectory, f0: f64) -> MonitoredSeries {
    let d = ep.data;
    let m = d.len();
    let nt = d.n_ex / 2;
    let nm = d.n_in / 2;
    let nb = d.n_boundary();
    let layout = &ep.insys.layout;
    let mut names = Vec::new();
    let mut kinds = Vec::new();
    let mut pred = Vec::new();
    let mut truth = Vec::new();
    let mag = |x: &[f64], t: usize| x[2 * t].hypot(x[2 * t + 1]);
    for t in 0..nt {
        names.push(format!("tie_{t}_mag"));
        kinds.push(Monitored::Tie);
        pred.push((0..m).map(|i| mag(traj.x_ex(i), t)).collect());
        truth.push((0..m).map(|i| mag(d.x_ex(i), t)).collect());
    }
    let in_names = layout.names_in();
    for k in 0..nm {
        names.push(format!("freq_{}", in_names[2 * k + 1].trim_start_matches("domega_")));
        kinds.push(Monitored::Frequency);
        pred.push((0..m).map(|i| f0 * (1.0 + traj.x_in(i)[2 * k + 1])).collect());
        truth.push((0..m).map(|i| f0 * (1.0 + d.x_in(i)[2 * k + 1])).collect());
    }
    let stages = d.scenario.segment_stages();
    let vb: Vec<Vec<f64>> = (0..m)
        .map(|i| {
            let stage = stages[crate::integrators::segment_of(&d.events, i)];
            ep.insys
                .boundary_voltages(traj.x_in(i), traj.x_ex(i), stage)
                .iter()
                .map(|v| v.norm())
                .collect()
        })
        .collect();
    for (b, id) in layout.boundary_bus_ids().iter().enumerate().take(nb) {
        names.push(format!("vb_{id}"));
        kinds.push(Monitored::Voltage);
        pred.push((0..m).map(|i| vb[i][b]).collect());
        truth.push((0..m).map(|i| d.boundary_voltage(i)[b]).collect());
    }
    (names, kinds, pred, truth)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn max(v: &[f64]) -> f64 {
    v.iter().copied().fold(0.0, f64::max)
}

/// Summary of a scenario's error series; the mean over a group is the
/// average of its per-state means.
pub fn summarize(series: &ScenarioSeries) -> (Vec<f64>, Vec<f64>, [(f64, f64); 4]) {
    let means: Vec<f64> = series.values.iter().map(|v| mean(v)).collect();
    let maxes: Vec<f64> = series.values.iter().map(|v| max(v)).collect();
    let group = |pred: &dyn Fn(Monitored) -> bool| {
        let idx: Vec<usize> = (0..series.kinds.len()).filter(|&k| pred(series.kinds[k])).collect();
        let m: Vec<f64> = idx.iter().map(|&k| means[k]).collect();
        let x: Vec<f64> = idx.iter().map(|&k| maxes[k]).collect();
        (mean(&m), max(&x))
    };
    let criterion = group(&|k| k != Monitored::Voltage);
    let tie = group(&|k| k == Monitored::Tie);
    let freq = group(&|k| k == Monitored::Frequency);
    let volt = group(&|k| k == Monitored::Voltage);
    (means, maxes, [criterion, tie, freq, volt])
}

/// Runs every episode in closed loop and compares it with its measurements.
pub fn evaluate(
    surrogate: Surrogate,
    episodes: &[Episode],
    base_frequency_hz: f64,
    opts: &TrapezoidalOptions,
    exec: Execution,
) -> (EvaluationReport, Vec<ScenarioSeries>) {
    let results = map_indexed(episodes, exec, |_, ep| {
        surrogate.simulate(ep, opts).map(|traj| {
            let (names, kinds, pred, truth) = monitored(ep, &traj, base_frequency_hz);
            ScenarioSeries {
                id: ep.data.scenario.id,
                t: (0..ep.data.len()).map(|i| ep.data.grid.t(i)).collect(),
                names,
                kinds,
                values: relative_series(&pred, &truth),
            }
        })
    });
    let mut scenarios = Vec::new();
    let mut all_series = Vec::new();
    for (ep, r) in episodes.iter().zip(results) {
        let sc = &ep.data.scenario;
        let mut rep = ScenarioReport {
            id: sc.id,
            fault_bus: sc.fault_bus,
            clear: sc.clear,
            alpha: sc.alpha,
            diverged: false,
            error: None,
            summary: None,
        };
        match r {
            Ok(series) => {
                let (means, maxes, g) = summarize(&series);
                rep.summary = Some(ScenarioSummary {
                    states: series.names.clone(),
                    mean_per_state: means,
                    max_per_state: maxes,
                    mean: g[0].0,
                    max: g[0].1,
                    tie_mean: g[1].0,
                    tie_max: g[1].1,
                    frequency_mean: g[2].0,
                    frequency_max: g[2].1,
                    voltage_mean: g[3].0,
                    voltage_max: g[3].1,
                });
                all_series.push(series);
            }
            Err(e) => {
                log::warn!("scenario {} diverged: {e}", sc.id);
                rep.diverged = true;
                rep.error = Some(e.to_string());
            }
        }
        scenarios.push(rep);
    }
    let done: Vec<&ScenarioSummary> = scenarios.iter().filter_map(|s| s.summary.as_ref()).collect();
    let stat = |f: &dyn Fn(&ScenarioSummary) -> f64| BoxStats::from_values(&done.iter().map(|s| f(s)).collect::<Vec<_>>());
    let report = EvaluationReport {
        completed: done.len(),
        diverged: scenarios.len() - done.len(),
        mean_error: stat(&|s| s.mean),
        max_error: stat(&|s| s.max),
        tie_mean_error: stat(&|s| s.tie_mean),
        scenarios,
    };
    (report, all_series)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::io::{read_columns_csv, read_json, write_json, write_series};
    use crate::testutil::{fault, fixture, TIGHT};

    #[test]
    fn box_stats_follow_linear_interpolation_and_tukey_whiskers() {
        let b = BoxStats::from_values(&[5.0, 1.0, 100.0, 3.0, 2.0, 4.0]).unwrap();
        assert_eq!((b.n, b.min, b.max), (6, 1.0, 100.0));
        assert!((b.q1 - 2.25).abs() < 1e-15);
        assert!((b.median - 3.5).abs() < 1e-15);
        assert!((b.q3 - 4.75).abs() < 1e-15);
        assert_eq!((b.whisker_low, b.whisker_high), (1.0, 5.0));
        let one = BoxStats::from_values(&[2.0]).unwrap();
        assert_eq!((one.q1, one.median, one.q3), (2.0, 2.0, 2.0));
        assert!(BoxStats::from_values(&[]).is_none());
    }

    /// Replaces the measurements with the surrogate's own closed loop.
    fn self_consistent(fx: &mut crate::testutil::Fixture) {
        for (d, insys) in fx.data.scenarios.iter_mut().zip(&fx.systems) {
            let ep = Episode { data: d, insys };
            let t = Surrogate::Node(&fx.model).simulate(&ep, &TIGHT).unwrap();
            let stages = d.scenario.segment_stages();
            let vb: Vec<f64> = (0..t.len())
                .flat_map(|i| {
                    let st = stages[crate::integrators::segment_of(&d.events, i)];
                    insys.boundary_voltages(t.x_in(i), t.x_ex(i), st).iter().map(|v| v.norm()).collect::<Vec<_>>()
                })
                .collect();
            d.x_in = (0..t.len()).flat_map(|i| t.x_in(i).to_vec()).collect();
            d.x_ex = (0..t.len()).flat_map(|i| t.x_ex(i).to_vec()).collect();
            d.boundary_voltage = vb;
        }
    }

    #[test]
    fn oracle_surrogate_has_no_error() {
        let mut fx = fixture("wscc9", &[fault(0, 6, 0.1), fault(1, 9, 0.12)], 0.3, &[6], 1);
        self_consistent(&mut fx);
        let eps: Vec<Episode> = fx.data.scenarios.iter().zip(&fx.systems).map(|(data, insys)| Episode { data, insys }).collect();
        let (report, series) = evaluate(Surrogate::Node(&fx.model), &eps, 60.0, &TIGHT, Execution::Sequential);
        assert_eq!((report.completed, report.diverged), (2, 0));
        assert!(report.max_error.unwrap().max <= 1e-6);
        assert_eq!(series[0].names, vec!["tie_0_mag", "tie_1_mag", "freq_3", "vb_6", "vb_9"]);
    }

    #[test]
    fn diverged_scenarios_are_counted_but_not_aggregated() {
        let fx = fixture("two_machine", &[fault(0, 2, 0.08), fault(1, 2, 0.09)], 0.2, &[4], 2);
        let mut model = fx.model.clone();
        let n = model.theta.len();
        model.theta[n - 1] = 1e6;
        let eps: Vec<Episode> = fx.data.scenarios.iter().zip(&fx.systems).map(|(data, insys)| Episode { data, insys }).collect();
        let (report, series) = evaluate(Surrogate::Node(&model), &eps, 60.0, &TIGHT, Execution::Sequential);
        assert_eq!((report.completed, report.diverged), (0, 2));
        assert!(series.is_empty() && report.mean_error.is_none());
        assert!(report.scenarios.iter().all(|s| s.diverged && s.summary.is_none() && s.error.is_some()));
    }

    #[test]
    fn aggregates_recomputed_from_csv_match_the_report() {
        let fx = fixture("wscc9", &[fault(0, 6, 0.1), fault(1, 9, 0.13), fault(2, 3, 0.11)], 0.4, &[6], 3);
        let eps: Vec<Episode> = fx.data.scenarios.iter().zip(&fx.systems).map(|(data, insys)| Episode { data, insys }).collect();
        let (report, series) = evaluate(Surrogate::Node(&fx.model), &eps, 60.0, &TIGHT, Execution::Sequential);
        let dir = tempfile::tempdir().unwrap();
        for s in &series {
            write_series(dir.path(), s).unwrap();
        }
        write_json(&dir.path().join("report.json"), &report).unwrap();
        let back: EvaluationReport = read_json(&dir.path().join("report.json")).unwrap();
        assert_eq!(back, report);

        let mut means = Vec::new();
        let mut maxes = Vec::new();
        for sc in &back.scenarios {
            let (names, rows) = read_columns_csv(&dir.path().join(format!("scenario_{}.csv", sc.id))).unwrap();
            let (mut m, mut x) = (Vec::new(), 0.0f64);
            for (k, name) in names.iter().enumerate().skip(1) {
                if name.starts_with("vb_") {
                    continue;
                }
                let col: Vec<f64> = rows.iter().map(|r| r[k]).collect();
                m.push(col.iter().sum::<f64>() / col.len() as f64);
                x = col.iter().copied().fold(x, f64::max);
            }
            means.push(m.iter().sum::<f64>() / m.len() as f64);
            maxes.push(x);
        }
        assert_eq!(BoxStats::from_values(&means), back.mean_error);
        assert_eq!(BoxStats::from_values(&maxes), back.max_error);
    }

    #[test]
    fn summary_averages_per_state_means_and_skips_voltages() {
        let series = ScenarioSeries {
            id: 0,
            t: vec![0.0, 1.0],
            names: vec!["tie_0_mag".into(), "freq_1".into(), "vb_2".into()],
            kinds: vec![Monitored::Tie, Monitored::Frequency, Monitored::Voltage],
            values: vec![vec![0.1, 0.3], vec![0.0, 0.02], vec![1.0, 1.0]],
        };
        let (means, maxes, g) = summarize(&series);
        assert_eq!(means, vec![0.2, 0.01, 1.0]);
        assert_eq!(maxes, vec![0.3, 0.02, 1.0]);
        assert!((g[0].0 - 0.105).abs() < 1e-15);
        assert_eq!(g[0].1, 0.3);
        assert_eq!(g[3], (1.0, 1.0));
    }
}
