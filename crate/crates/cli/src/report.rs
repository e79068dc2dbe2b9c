//! Statistics over a results table, and the τ histogram.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use polydreg::linalg::{mean, std_dev};
use polydreg::metrics::{bonferroni, paired_t_one_sided, wilcoxon_signed_rank, StatTestResult, TailRatioReport};
use serde::{Deserialize, Serialize};

use crate::cell::ResultRow;
use crate::config::{Comparison, Metric};

pub const REPORT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub model_id: String,
    pub fraction: f64,
    pub n_ok: usize,
    pub n_failed: usize,
    pub accuracy_mean: Option<f64>,
    pub accuracy_std: Option<f64>,
    pub tau_mean: Option<f64>,
    pub tau_std: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestEntry {
    pub model_a: String,
    pub model_b: String,
    pub metric: Metric,
    pub fraction: f64,
    pub n_pairs: usize,
    /// Mean advantage of `model_a`: `b − a` for τ, `a − b` for accuracy.
    pub mean_advantage: Option<f64>,
    pub paired_t: Option<StatTestResult>,
    pub paired_t_error: Option<String>,
    pub wilcoxon: Option<StatTestResult>,
    pub wilcoxon_error: Option<String>,
    /// Cells present for one model but not the other.
    pub missing: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PooledEntry {
    pub model_a: String,
    pub model_b: String,
    pub metric: Metric,
    pub n_pairs: usize,
    pub mean_advantage: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub format_version: u32,
    pub bonferroni_m: usize,
    pub groups: Vec<GroupSummary>,
    pub tests: Vec<TestEntry>,
    pub pooled: Vec<PooledEntry>,
}

impl StatsReport {
    pub fn missing_cells(&self) -> Vec<String> {
        let set: BTreeSet<String> = self.tests.iter().flat_map(|t| t.missing.iter().cloned()).collect();
        set.into_iter().collect()
    }

    pub fn test(&self, a: &str, b: &str, metric: Metric, fraction: f64) -> Option<&TestEntry> {
        self.tests
            .iter()
            .find(|t| t.model_a == a && t.model_b == b && t.metric == metric && t.fraction == fraction)
    }
}

fn metric_of(row: &ResultRow, metric: Metric) -> Option<f64> {
    match metric {
        Metric::Tau => row.tau,
        Metric::Accuracy => row.eval_accuracy,
    }
}

fn ok_row<'a>(rows: &'a [ResultRow], model: &str, fraction: f64, seed: u64) -> Option<&'a ResultRow> {
    rows.iter().find(|r| r.model_id == model && r.fraction == fraction && r.seed == seed && r.is_ok())
}

fn fmt_cell(model: &str, fraction: f64, seed: u64, why: &str) -> String {
    format!("({model}, fraction {fraction}, seed {seed}) {why}")
}

/// Paired values `(x, y)` with `x − y` the advantage of `a`, plus any
/// seeds that could not be paired.
fn pairs(rows: &[ResultRow], c: &Comparison, fraction: f64, seeds: &[u64]) -> (Vec<f64>, Vec<f64>, Vec<String>) {
    let (mut xs, mut ys, mut missing) = (Vec::new(), Vec::new(), Vec::new());
    for &s in seeds {
        let a = ok_row(rows, &c.model_a, fraction, s).and_then(|r| metric_of(r, c.metric));
        let b = ok_row(rows, &c.model_b, fraction, s).and_then(|r| metric_of(r, c.metric));
        match (a, b) {
            (Some(a), Some(b)) => match c.metric {
                Metric::Tau => {
                    xs.push(b);
                    ys.push(a);
                }
                Metric::Accuracy => {
                    xs.push(a);
                    ys.push(b);
                }
            },
            (a, b) => {
                for (m, v) in [(&c.model_a, a), (&c.model_b, b)] {
                    if v.is_none() {
                        let failed = rows
                            .iter()
                            .any(|r| r.model_id == *m && r.fraction == fraction && r.seed == s && !r.is_ok());
                        missing.push(fmt_cell(m, fraction, s, if failed { "failed" } else { "missing" }));
                    }
                }
            }
        }
    }
    (xs, ys, missing)
}

/// Tests every comparison at every fraction. `seeds` and `fractions` are the
/// expected grid; when empty they are taken from the rows.
pub fn compute_stats(
    rows: &[ResultRow],
    comparisons: &[Comparison],
    fractions: &[f64],
    seeds: &[u64],
    m: usize,
) -> StatsReport {
    let mut fr: Vec<f64> = if fractions.is_empty() {
        rows.iter().map(|r| r.fraction).collect()
    } else {
        fractions.to_vec()
    };
    fr.sort_by(f64::total_cmp);
    fr.dedup();
    let seeds: Vec<u64> = if seeds.is_empty() {
        rows.iter().map(|r| r.seed).collect::<BTreeSet<_>>().into_iter().collect()
    } else {
        seeds.to_vec()
    };
    let mut models: Vec<String> = Vec::new();
    for r in rows {
        if !models.contains(&r.model_id) {
            models.push(r.model_id.clone());
        }
    }

    let mut groups = Vec::new();
    for model in &models {
        for &f in &fr {
            let cell: Vec<&ResultRow> = rows.iter().filter(|r| &r.model_id == model && r.fraction == f).collect();
            if cell.is_empty() {
                continue;
            }
            let acc: Vec<f64> = cell.iter().filter_map(|r| r.is_ok().then_some(r.eval_accuracy).flatten()).collect();
            let tau: Vec<f64> = cell.iter().filter_map(|r| r.is_ok().then_some(r.tau).flatten()).collect();
            let summary = |v: &[f64]| (!v.is_empty()).then(|| mean(v));
            let spread = |v: &[f64]| (v.len() > 1).then(|| std_dev(v));
            groups.push(GroupSummary {
                model_id: model.clone(),
                fraction: f,
                n_ok: cell.iter().filter(|r| r.is_ok()).count(),
                n_failed: cell.iter().filter(|r| !r.is_ok()).count(),
                accuracy_mean: summary(&acc),
                accuracy_std: spread(&acc),
                tau_mean: summary(&tau),
                tau_std: spread(&tau),
            });
        }
    }

    let mut tests = Vec::new();
    let mut pooled = Vec::new();
    for c in comparisons {
        let mut all_adv = Vec::new();
        for &f in &fr {
            let (xs, ys, missing) = pairs(rows, c, f, &seeds);
            let adv: Vec<f64> = xs.iter().zip(&ys).map(|(x, y)| x - y).collect();
            all_adv.extend_from_slice(&adv);
            let adjust = |r: polydreg::Result<StatTestResult>| match r {
                Ok(r) => match bonferroni(std::slice::from_ref(&r), m) {
                    Ok(mut v) => (v.pop(), None),
                    Err(e) => (None, Some(e.to_string())),
                },
                Err(e) => (None, Some(e.to_string())),
            };
            let (paired_t, paired_t_error) = adjust(paired_t_one_sided(&xs, &ys));
            let (wilcoxon, wilcoxon_error) = adjust(wilcoxon_signed_rank(&xs, &ys));
            tests.push(TestEntry {
                model_a: c.model_a.clone(),
                model_b: c.model_b.clone(),
                metric: c.metric,
                fraction: f,
                n_pairs: xs.len(),
                mean_advantage: (!adv.is_empty()).then(|| mean(&adv)),
                paired_t,
                paired_t_error,
                wilcoxon,
                wilcoxon_error,
                missing,
            });
        }
        pooled.push(PooledEntry {
            model_a: c.model_a.clone(),
            model_b: c.model_b.clone(),
            metric: c.metric,
            n_pairs: all_adv.len(),
            mean_advantage: (!all_adv.is_empty()).then(|| mean(&all_adv)),
        });
    }
    StatsReport { format_version: REPORT_VERSION, bonferroni_m: m, groups, tests, pooled }
}

fn opt(v: Option<f64>, prec: usize) -> String {
    v.map(|x| format!("{x:.prec$}")).unwrap_or_else(|| "-".into())
}

fn pval(r: &Option<StatTestResult>, err: &Option<String>) -> String {
    match (r, err) {
        (Some(r), _) => format!("p={:.3e} adj={:.3e}", r.p_value, r.p_adjusted),
        (None, Some(e)) => format!("error: {e}"),
        (None, None) => "-".into(),
    }
}

/// Plain-text rendering of a report.
pub fn render_text(report: &StatsReport) -> String {
    let mut o = String::new();
    let _ = writeln!(o, "per-fraction summary (mean ± std over ok seeds)");
    let _ = writeln!(o, "{:<14} {:>8} {:>4} {:>6} {:>18} {:>18}", "model", "fraction", "ok", "failed", "accuracy", "tau");
    for g in &report.groups {
        let _ = writeln!(
            o,
            "{:<14} {:>8.2} {:>4} {:>6} {:>18} {:>18}",
            g.model_id,
            g.fraction,
            g.n_ok,
            g.n_failed,
            format!("{} ± {}", opt(g.accuracy_mean, 4), opt(g.accuracy_std, 4)),
            format!("{} ± {}", opt(g.tau_mean, 4), opt(g.tau_std, 4)),
        );
    }
    let _ = writeln!(o);
    let _ = writeln!(o, "paired one-sided tests, Bonferroni m = {}", report.bonferroni_m);
    for t in &report.tests {
        let better = match t.metric {
            Metric::Tau => "lower tau",
            Metric::Accuracy => "higher accuracy",
        };
        let _ = writeln!(
            o,
            "{} vs {} ({better}) fraction {:.2}: n={} advantage={} | t: {} | wilcoxon: {}",
            t.model_a,
            t.model_b,
            t.fraction,
            t.n_pairs,
            opt(t.mean_advantage, 4),
            pval(&t.paired_t, &t.paired_t_error),
            pval(&t.wilcoxon, &t.wilcoxon_error),
        );
        for m in &t.missing {
            let _ = writeln!(o, "    unpaired: {m}");
        }
    }
    let _ = writeln!(o);
    let _ = writeln!(o, "pooled over fractions");
    for p in &report.pooled {
        let _ = writeln!(
            o,
            "{} vs {} [{}]: n={} mean advantage={}",
            p.model_a,
            p.model_b,
            p.metric.name(),
            p.n_pairs,
            opt(p.mean_advantage, 4)
        );
    }
    o
}

pub const HISTOGRAM_BINS: usize = 50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `HISTOGRAM_BINS + 1` log-spaced edges from the smallest positive norm
    /// to the largest.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    /// Norms that are exactly zero and so fall outside a log scale.
    pub zero_count: usize,
}

pub fn log_histogram(values: &[f64]) -> Histogram {
    let positive: Vec<f64> = values.iter().cloned().filter(|v| *v > 0.0).collect();
    let zero_count = values.len() - positive.len();
    if positive.is_empty() {
        return Histogram { edges: Vec::new(), counts: Vec::new(), zero_count };
    }
    let lo = positive.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = positive.iter().cloned().fold(0.0, f64::max);
    let (llo, lhi) = (lo.ln(), hi.ln());
    let edges: Vec<f64> = (0..=HISTOGRAM_BINS)
        .map(|i| if i == HISTOGRAM_BINS { hi } else { (llo + (lhi - llo) * i as f64 / HISTOGRAM_BINS as f64).exp() })
        .collect();
    let mut counts = vec![0; HISTOGRAM_BINS];
    for v in positive {
        let bin = if lhi > llo {
            (((v.ln() - llo) / (lhi - llo)) * HISTOGRAM_BINS as f64).floor() as usize
        } else {
            HISTOGRAM_BINS - 1
        };
        counts[bin.min(HISTOGRAM_BINS - 1)] += 1;
    }
    Histogram { edges, counts, zero_count }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailRatioFile {
    pub format_version: u32,
    pub model_id: String,
    pub n: usize,
    pub mean: f64,
    pub p99: f64,
    pub tau: f64,
    pub histogram: Histogram,
    pub norms: Vec<f64>,
}

impl TailRatioFile {
    pub fn new(report: &TailRatioReport) -> Self {
        TailRatioFile {
            format_version: REPORT_VERSION,
            model_id: report.model_id.clone(),
            n: report.n,
            mean: report.mean,
            p99: report.p99,
            tau: report.tau,
            histogram: log_histogram(&report.norms),
            norms: report.norms.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cell::CellStatus;
    use crate::config::ModelKind;

    fn row(model: &str, seed: u64, acc: f64, tau: f64) -> ResultRow {
        ResultRow {
            format_version: 1,
            model_id: model.into(),
            kind: ModelKind::Cr,
            fraction: 1.0,
            seed,
            status: CellStatus::Ok,
            n_train: 10,
            n_eval: 5,
            param_count: 1,
            eval_accuracy: Some(acc),
            tau: Some(tau),
            mean_norm: Some(1.0),
            p99_norm: Some(tau),
            final_task_loss: Some(0.1),
            final_penalty: Some(0.1),
            error: None,
        }
    }

    #[test]
    fn hand_built_table_matches_direct_tests() {
        let a = [0.9, 0.8, 0.85, 0.95];
        let b = [0.7, 0.75, 0.6, 0.8];
        let mut rows = Vec::new();
        for s in 0..4 {
            rows.push(row("a", s, a[s as usize], 1.0 + 0.01 * s as f64));
            rows.push(row("b", s, b[s as usize], 1.5 + 0.02 * s as f64));
        }
        let cmp = vec![Comparison::parse("a", "b", "accuracy").unwrap(), Comparison::parse("a", "b", "tau").unwrap()];
        let rep = compute_stats(&rows, &cmp, &[], &[], 1);
        let t = rep.test("a", "b", Metric::Accuracy, 1.0).unwrap();
        let direct = paired_t_one_sided(&a, &b).unwrap();
        assert_eq!(t.paired_t.as_ref().unwrap().p_value, direct.p_value);
        assert_eq!(t.paired_t.as_ref().unwrap().p_adjusted, direct.p_value);
        let tau = rep.test("a", "b", Metric::Tau, 1.0).unwrap();
        assert!(tau.mean_advantage.unwrap() > 0.0);
        assert!(render_text(&rep).contains("Bonferroni m = 1"));
    }

    #[test]
    fn ties_and_gaps_are_reported_per_test() {
        let mut rows = Vec::new();
        for s in 0..3 {
            rows.push(row("a", s, 0.8, 1.0));
            rows.push(row("b", s, 0.8, 1.0 + s as f64));
        }
        rows.push(row("a", 3, 0.8, 1.0));
        let cmp = vec![Comparison::parse("a", "b", "accuracy").unwrap()];
        let rep = compute_stats(&rows, &cmp, &[], &[], 1);
        let t = &rep.tests[0];
        assert!(t.wilcoxon_error.is_some());
        assert!(t.paired_t_error.is_some());
        assert_eq!(rep.missing_cells(), vec!["(b, fraction 1, seed 3) missing".to_string()]);
    }

    #[test]
    fn histogram_bins_cover_every_positive_value() {
        let v: Vec<f64> = (0..100).map(|i| i as f64 * 0.37).collect();
        let h = log_histogram(&v);
        assert_eq!(h.edges.len(), HISTOGRAM_BINS + 1);
        assert_eq!(h.zero_count, 1);
        assert_eq!(h.counts.iter().sum::<usize>(), 99);
        let c = log_histogram(&[2.0; 5]);
        assert_eq!(c.counts[HISTOGRAM_BINS - 1], 5);
    }
}
