//! Side-by-side comparison of the metrics of two runs.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use anyhow::{Context, Result};

use crate::artifacts::OutDir;

pub const METRIC_HEADER: [&str; 5] = ["image", "metric", "value", "unit", "regions"];

#[derive(Debug)]
pub enum CompareError {
    MissingMetrics(String),
    RegionMismatch { only_a: Vec<String>, only_b: Vec<String> },
}

impl fmt::Display for CompareError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::MissingMetrics(p) => write!(f, "{p} has no metrics.csv; run `capsbeam metrics` there first"),
            Self::RegionMismatch { only_a, only_b } => write!(
                f,
                "runs measure different regions (only in A: [{}], only in B: [{}])",
                only_a.join(", "),
                only_b.join(", ")
            ),
        }
    }
}

impl std::error::Error for CompareError {}

/// (metric, regions, occurrence) -> value, in file order.
type Keyed = Vec<((String, String, usize), f64)>;

fn load(dir: &Path) -> Result<Keyed> {
    let path = dir.join("metrics.csv");
    if !path.is_file() {
        return Err(CompareError::MissingMetrics(dir.display().to_string()).into());
    }
    let mut r = csv::Reader::from_path(&path).with_context(|| format!("reading {}", path.display()))?;
    let mut seen: BTreeMap<(String, String), usize> = BTreeMap::new();
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.with_context(|| format!("parsing {}", path.display()))?;
        let (metric, value, regions) = (rec.get(1), rec.get(2), rec.get(4));
        let (Some(metric), Some(value), Some(regions)) = (metric, value, regions) else {
            anyhow::bail!("{}: short row {:?}", path.display(), rec);
        };
        let value: f64 = value.parse().with_context(|| format!("{}: value `{value}`", path.display()))?;
        let n = seen.entry((metric.to_string(), regions.to_string())).or_default();
        out.push(((metric.to_string(), regions.to_string(), *n), value));
        *n += 1;
    }
    Ok(out)
}

fn label(k: &(String, String, usize)) -> String {
    format!("{}@{}#{}", k.0, k.1, k.2)
}

pub fn run(run_a: &Path, run_b: &Path, out: &Path) -> Result<()> {
    let a = load(run_a)?;
    let b: BTreeMap<_, _> = load(run_b)?.into_iter().collect();
    let only_a: Vec<String> = a.iter().filter(|(k, _)| !b.contains_key(k)).map(|(k, _)| label(k)).collect();
    let keys_a: std::collections::BTreeSet<_> = a.iter().map(|(k, _)| k.clone()).collect();
    let only_b: Vec<String> = b.keys().filter(|k| !keys_a.contains(*k)).map(label).collect();
    if !only_a.is_empty() || !only_b.is_empty() {
        return Err(CompareError::RegionMismatch { only_a, only_b }.into());
    }
    let mut rows = Vec::new();
    let mut max_pct: f64 = 0.0;
    for (k, va) in &a {
        let vb = b[k];
        let delta = vb - va;
        let pct = if *va != 0.0 {
            100.0 * delta / va.abs()
        } else if delta == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        max_pct = max_pct.max(pct.abs());
        rows.push(vec![k.0.clone(), k.1.clone(), va.to_string(), vb.to_string(), delta.to_string(), pct.to_string()]);
    }
    let dir = OutDir::create(out, "compare", "none")?;
    dir.csv("compare.csv", &["metric", "regions", "a", "b", "delta", "pct_change"], &rows)?;
    for r in &rows {
        println!("{}", r.join(","));
    }
    println!("max_abs_pct_change={max_pct}");
    Ok(())
}
