//! Trend and structure predicates over one or more metrics.csv files.
//!
//! Models are identified by name: `covae`, `poe`, `moe`, and `<name>-online`
//! for an online-prior variant of `<name>`. A predicate whose inputs are
//! absent reports SKIP.

use std::collections::BTreeSet;
use std::fmt;

use covae_core::eval::metric;
use covae_core::stats::{mean, ols_slope, std_error};

use crate::metrics::MetricRow;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Pass,
    Fail,
    Skip,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub name: &'static str,
    pub status: Status,
    pub detail: String,
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = match self.status {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Skip => "SKIP",
        };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

/// Read-only view over replicate-level rows.
pub struct Table<'a> {
    rows: &'a [MetricRow],
}

impl<'a> Table<'a> {
    pub fn new(rows: &'a [MetricRow]) -> Self {
        Self { rows }
    }

    pub fn has_model(&self, model: &str) -> bool {
        self.rows.iter().any(|r| r.model == model)
    }

    pub fn rhos(&self, model: &str, m: &str) -> Vec<f64> {
        let set: BTreeSet<u64> = self
            .rows
            .iter()
            .filter(|r| r.model == model && r.metric == m)
            .map(|r| r.rho.to_bits())
            .collect();
        let mut v: Vec<f64> = set.into_iter().map(f64::from_bits).collect();
        v.sort_by(f64::total_cmp);
        v
    }

    /// `(replicate, value, stderr)` per replicate; falls back to summary rows
    /// when a file holds no replicate rows.
    pub fn replicates(&self, model: &str, rho: f64, m: &str) -> Vec<(usize, f64, f64)> {
        let pick = |summary: bool| -> Vec<(usize, f64, f64)> {
            self.rows
                .iter()
                .filter(|r| r.model == model && r.rho == rho && r.metric == m && r.replicate.is_none() == summary)
                .map(|r| (r.replicate.unwrap_or(0), r.value, r.stderr))
                .collect()
        };
        let reps = pick(false);
        if reps.is_empty() {
            pick(true)
        } else {
            reps
        }
    }

    /// Mean and SE across replicates; a single replicate keeps its own SE.
    pub fn estimate(&self, model: &str, rho: f64, m: &str) -> Option<(f64, f64)> {
        let reps = self.replicates(model, rho, m);
        match reps.len() {
            0 => None,
            1 => Some((reps[0].1, reps[0].2)),
            _ => {
                let v: Vec<f64> = reps.iter().map(|r| r.1).collect();
                Some((mean(&v), std_error(&v)))
            }
        }
    }

    /// Values of `m` for every replicate row of `model`, with their rho.
    fn points(&self, model: &str, m: &str) -> Vec<(f64, f64)> {
        self.rhos(model, m)
            .into_iter()
            .flat_map(|rho| self.replicates(model, rho, m).into_iter().map(move |r| (rho, r.1)))
            .collect()
    }
}

/// OLS slope and its SE; `None` without three points over two distinct x.
pub fn slope_of(points: &[(f64, f64)]) -> Option<(f64, f64)> {
    let x: Vec<f64> = points.iter().map(|p| p.0).collect();
    let y: Vec<f64> = points.iter().map(|p| p.1).collect();
    let distinct = x.iter().any(|&v| v != x[0]);
    (points.len() >= 3 && distinct).then(|| ols_slope(&x, &y))
}

fn outcome(name: &'static str, failures: Vec<String>, checked: usize, what: &str) -> Outcome {
    if checked == 0 {
        return Outcome {
            name,
            status: Status::Skip,
            detail: format!("no {what} in input"),
        };
    }
    if failures.is_empty() {
        Outcome {
            name,
            status: Status::Pass,
            detail: format!("{checked} {what} checked"),
        }
    } else {
        Outcome {
            name,
            status: Status::Fail,
            detail: failures.join("; "),
        }
    }
}

fn skip(name: &'static str, detail: impl Into<String>) -> Outcome {
    Outcome {
        name,
        status: Status::Skip,
        detail: detail.into(),
    }
}

fn single(name: &'static str, ok: bool, detail: String) -> Outcome {
    Outcome {
        name,
        status: if ok { Status::Pass } else { Status::Fail },
        detail,
    }
}

pub const CORR_TOLERANCE: f64 = 0.1;
pub const MOE_CORR_MIN: f64 = 0.95;
pub const PRIOR_STD_TOLERANCE: f64 = 0.15;
pub const START_TOLERANCE: f64 = 0.1;
pub const Z_SEPARATION: f64 = 3.0;
pub const Z_SLOPE_CI: f64 = 1.96;

fn poe_corr_exact(t: &Table) -> Outcome {
    let mut fails = Vec::new();
    let mut n = 0;
    for m in [metric::CORR_JOINT, metric::CORR_CONDITIONAL] {
        for rho in t.rhos("poe", m) {
            for (rep, v, _) in t.replicates("poe", rho, m) {
                n += 1;
                if v != 1.0 {
                    fails.push(format!("{m} = {v} at rho {rho} replicate {rep}"));
                }
            }
        }
    }
    outcome("poe_corr_exact", fails, n, "PoE correlation rows")
}

fn moe_corr_high(t: &Table) -> Outcome {
    let mut fails = Vec::new();
    let mut n = 0;
    for m in [metric::CORR_JOINT, metric::CORR_CONDITIONAL] {
        for rho in t.rhos("moe", m) {
            let (v, _) = t.estimate("moe", rho, m).expect("rho listed");
            n += 1;
            if v < MOE_CORR_MIN {
                fails.push(format!("{m} = {v:.4} at rho {rho}"));
            }
        }
    }
    outcome("moe_corr_high", fails, n, "MoE correlation cells")
}

fn covae_corr_tracks_cca(t: &Table, m: &str, name: &'static str) -> Outcome {
    let mut fails = Vec::new();
    let mut n = 0;
    for rho in t.rhos("covae", m) {
        let Some((truth, _)) = t.estimate("covae", rho, metric::RHO_CCA) else {
            continue;
        };
        let (v, _) = t.estimate("covae", rho, m).expect("rho listed");
        n += 1;
        if (v - truth).abs() > CORR_TOLERANCE {
            fails.push(format!("rho {rho}: {v:.4} vs CCA {truth:.4}"));
        }
    }
    outcome(name, fails, n, "CoVAE cells")
}

fn poe_equal_std(t: &Table) -> Outcome {
    let mut fails = Vec::new();
    let mut n = 0;
    for rho in t.rhos("poe", metric::STD_MISSING) {
        let obs = t.replicates("poe", rho, metric::STD_OBSERVED);
        for (rep, miss, _) in t.replicates("poe", rho, metric::STD_MISSING) {
            n += 1;
            match obs.iter().find(|o| o.0 == rep) {
                Some(o) if o.1 == miss => {}
                Some(o) => fails.push(format!("rho {rho} replicate {rep}: observed {} vs missing {miss}", o.1)),
                None => fails.push(format!("rho {rho} replicate {rep}: no std_observed row")),
            }
        }
    }
    outcome("poe_equal_std", fails, n, "PoE spread rows")
}

fn covae_missing_std_matches_prior(t: &Table) -> Outcome {
    const NAME: &str = "covae_missing_std_matches_prior";
    let Some(rho) = t.rhos("covae", metric::STD_MISSING).into_iter().find(|r| (r - 0.5).abs() < 1e-9) else {
        return skip(NAME, "no CoVAE cell at rho 0.5");
    };
    let (Some((miss, _)), Some((rho_hat, _))) = (
        t.estimate("covae", rho, metric::STD_MISSING),
        t.estimate("covae", rho, metric::RHO_HAT),
    ) else {
        return skip(NAME, "std_missing or rho_hat absent at rho 0.5");
    };
    let target = (1.0 - rho_hat * rho_hat).sqrt();
    let rel = (miss / target - 1.0).abs();
    single(
        NAME,
        rel <= PRIOR_STD_TOLERANCE,
        format!("std_missing {miss:.4} vs sqrt(1 - rho_hat^2) = {target:.4} (relative error {rel:.3})"),
    )
}

/// Mean difference `a - b` and its SE, paired by replicate when possible.
fn paired_diff(a: &[(usize, f64, f64)], b: &[(usize, f64, f64)]) -> Option<(f64, f64)> {
    let diffs: Vec<f64> = a
        .iter()
        .filter_map(|x| b.iter().find(|y| y.0 == x.0).map(|y| x.1 - y.1))
        .collect();
    match diffs.len() {
        0 => None,
        1 => {
            let (x, y) = (a[0], b[0]);
            Some((x.1 - y.1, (x.2 * x.2 + y.2 * y.2).sqrt()))
        }
        _ => Some((mean(&diffs), std_error(&diffs))),
    }
}

fn covae_missing_exceeds_observed(t: &Table) -> Outcome {
    let mut fails = Vec::new();
    let mut n = 0;
    for rho in t.rhos("covae", metric::STD_MISSING) {
        let miss = t.replicates("covae", rho, metric::STD_MISSING);
        let obs = t.replicates("covae", rho, metric::STD_OBSERVED);
        let Some((d, se)) = paired_diff(&miss, &obs) else {
            continue;
        };
        n += 1;
        if d <= Z_SEPARATION * se {
            fails.push(format!("rho {rho}: missing - observed = {d:.4} (SE {se:.4})"));
        }
    }
    outcome("covae_missing_exceeds_observed", fails, n, "CoVAE cells")
}

fn covae_std_missing_decreasing(t: &Table) -> Outcome {
    const NAME: &str = "covae_std_missing_decreasing";
    let rhos = t.rhos("covae", metric::STD_MISSING);
    if rhos.len() < 2 {
        return skip(NAME, "fewer than two CoVAE correlations");
    }
    let mut fails = Vec::new();
    for w in rhos.windows(2) {
        let (a, sa) = t.estimate("covae", w[0], metric::STD_MISSING).expect("listed");
        let (b, sb) = t.estimate("covae", w[1], metric::STD_MISSING).expect("listed");
        let se = (sa * sa + sb * sb).sqrt();
        if a - b <= Z_SEPARATION * se {
            fails.push(format!("rho {} -> {}: {a:.4} -> {b:.4} (SE {se:.4})", w[0], w[1]));
        }
    }
    outcome(NAME, fails, rhos.len() - 1, "consecutive pairs")
}

fn covae_std_missing_starts_at_one(t: &Table) -> Outcome {
    const NAME: &str = "covae_std_missing_starts_at_one";
    let Some(&rho) = t.rhos("covae", metric::STD_MISSING).first() else {
        return skip(NAME, "no CoVAE spread rows");
    };
    if rho > 0.1 + 1e-9 {
        return skip(NAME, format!("smallest rho {rho} exceeds 0.1"));
    }
    let (v, _) = t.estimate("covae", rho, metric::STD_MISSING).expect("listed");
    single(
        NAME,
        (v - 1.0).abs() <= START_TOLERANCE,
        format!("std_missing at rho {rho} = {v:.4}"),
    )
}

fn baseline_std_flat(t: &Table) -> Outcome {
    let mut fails = Vec::new();
    let mut n = 0;
    for model in ["poe", "moe"] {
        let Some((slope, se)) = slope_of(&t.points(model, metric::STD_MISSING)) else {
            continue;
        };
        n += 1;
        if slope.abs() > Z_SLOPE_CI * se {
            fails.push(format!("{model}: slope {slope:.4} (SE {se:.4})"));
        }
    }
    outcome("baseline_std_flat", fails, n, "baselines")
}

fn covae_conditional_nll_decreasing(t: &Table) -> Outcome {
    const NAME: &str = "covae_conditional_nll_decreasing";
    let Some((slope, se)) = slope_of(&t.points("covae", metric::NLL_CONDITIONAL)) else {
        return skip(NAME, "need three CoVAE conditional NLL rows over two correlations");
    };
    single(
        NAME,
        slope + Z_SEPARATION * se < 0.0,
        format!("slope {slope:.4} (SE {se:.4})"),
    )
}

fn online_prior_overshoots(t: &Table) -> Outcome {
    let mut fails = Vec::new();
    let mut n = 0;
    let online: BTreeSet<&str> = t
        .rows
        .iter()
        .filter_map(|r| r.model.strip_suffix("-online"))
        .collect();
    for base in online {
        let on = format!("{base}-online");
        for rho in t.rhos(&on, metric::RHO_HAT) {
            let a = t.replicates(&on, rho, metric::RHO_HAT);
            let b = t.replicates(base, rho, metric::RHO_HAT);
            let Some((d, se)) = paired_diff(&a, &b) else {
                continue;
            };
            n += 1;
            if d <= Z_SEPARATION * se || d <= 0.0 {
                fails.push(format!("{on} vs {base} at rho {rho}: difference {d:.4} (SE {se:.4})"));
            }
        }
    }
    outcome("online_prior_overshoots", fails, n, "online/frozen pairs")
}

/// Every predicate, in a fixed order.
pub fn run(rows: &[MetricRow]) -> Vec<Outcome> {
    let t = Table::new(rows);
    vec![
        poe_corr_exact(&t),
        moe_corr_high(&t),
        covae_corr_tracks_cca(&t, metric::CORR_JOINT, "covae_joint_corr_tracks_cca"),
        covae_corr_tracks_cca(&t, metric::CORR_CONDITIONAL, "covae_conditional_corr_tracks_cca"),
        poe_equal_std(&t),
        covae_missing_std_matches_prior(&t),
        covae_missing_exceeds_observed(&t),
        covae_std_missing_decreasing(&t),
        covae_std_missing_starts_at_one(&t),
        baseline_std_flat(&t),
        covae_conditional_nll_decreasing(&t),
        online_prior_overshoots(&t),
    ]
}

/// Plain-text table of summary values: one line per model, rho and metric.
pub fn summary_table(rows: &[MetricRow]) -> String {
    let t = Table::new(rows);
    let mut keys: Vec<(&str, &str)> = Vec::new();
    for r in rows {
        if !keys.contains(&(r.model.as_str(), r.metric.as_str())) {
            keys.push((r.model.as_str(), r.metric.as_str()));
        }
    }
    let mut out = format!("{:<16} {:>6} {:<18} {:>12} {:>10}\n", "model", "rho", "metric", "mean", "se");
    for (model, m) in keys {
        for rho in t.rhos(model, m) {
            if let Some((v, se)) = t.estimate(model, rho, m) {
                out.push_str(&format!("{model:<16} {rho:>6.3} {m:<18} {v:>12.5} {se:>10.5}\n"));
            }
        }
    }
    out
}
