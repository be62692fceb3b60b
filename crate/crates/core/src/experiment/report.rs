//! CSV results and plain-text summaries.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub variant: String,
    pub task: String,
    pub n_episodes: usize,
    pub success_rate: f64,
    pub mean_len: f64,
    pub seed: u64,
}

pub const HEADER: &str = "variant,task,n_episodes,success_rate,mean_len,seed";

pub fn write_csv(w: &mut impl Write, rows: &[ResultRow]) -> std::io::Result<()> {
    writeln!(w, "{HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{:.4},{:.3},{}",
            r.variant, r.task, r.n_episodes, r.success_rate, r.mean_len, r.seed
        )?;
    }
    Ok(())
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Per-variant, per-task success over seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub median: f64,
    pub mean: f64,
    pub n_seeds: usize,
}

/// `variant -> task -> cell`, in first-appearance order of variants and tasks.
pub fn table(rows: &[ResultRow]) -> Vec<(String, Vec<(String, Cell)>)> {
    let mut order: Vec<String> = Vec::new();
    let mut tasks: Vec<String> = Vec::new();
    let mut by: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for r in rows {
        if !order.contains(&r.variant) {
            order.push(r.variant.clone());
        }
        if !tasks.contains(&r.task) {
            tasks.push(r.task.clone());
        }
        by.entry((r.variant.clone(), r.task.clone())).or_default().push(r.success_rate);
    }
    order
        .into_iter()
        .map(|v| {
            let cells = tasks
                .iter()
                .filter_map(|t| {
                    by.get(&(v.clone(), t.clone())).map(|xs| {
                        (
                            t.clone(),
                            Cell {
                                median: median(xs),
                                mean: xs.iter().sum::<f64>() / xs.len() as f64,
                                n_seeds: xs.len(),
                            },
                        )
                    })
                })
                .collect();
            (v, cells)
        })
        .collect()
}

/// Fixed-width text table: median success per task and the average of
/// those medians, plus the mean over every (task, seed) pair.
pub fn summarize(rows: &[ResultRow]) -> String {
    let t = table(rows);
    let mut s = String::new();
    let tasks: Vec<&str> = t.first().map(|(_, c)| c.iter().map(|(k, _)| k.as_str()).collect()).unwrap_or_default();
    let _ = write!(s, "{:<16}", "variant");
    for k in &tasks {
        let _ = write!(s, " {k:>10}");
    }
    let _ = writeln!(s, " {:>10} {:>10}", "average", "mean");
    for (v, cells) in &t {
        let _ = write!(s, "{v:<16}");
        for (_, c) in cells {
            let _ = write!(s, " {:>10.4}", c.median);
        }
        let avg = cells.iter().map(|(_, c)| c.median).sum::<f64>() / cells.len().max(1) as f64;
        let mean = cells.iter().map(|(_, c)| c.mean).sum::<f64>() / cells.len().max(1) as f64;
        let _ = writeln!(s, " {avg:>10.4} {mean:>10.4}");
    }
    let n = t.first().and_then(|(_, c)| c.first()).map_or(0, |(_, c)| c.n_seeds);
    let _ = writeln!(s, "(medians over {n} seeds)");
    s
}

/// `results.csv` and `summary.txt` under `dir`.
pub fn write_report(dir: impl AsRef<Path>, rows: &[ResultRow]) -> std::io::Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("results.csv"))?);
    write_csv(&mut f, rows)?;
    f.flush()?;
    std::fs::write(dir.join("summary.txt"), summarize(rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows() -> Vec<ResultRow> {
        let mut out = Vec::new();
        for (vi, v) in ["full", "no_rl", "no_moe", "no_subopt_data"].iter().enumerate() {
            for (ti, t) in ["go_to", "go_avoid", "crawl"].iter().enumerate() {
                out.push(ResultRow {
                    variant: v.to_string(),
                    task: t.to_string(),
                    n_episodes: 25,
                    success_rate: (vi * 3 + ti) as f64 / 12.0,
                    mean_len: 10.0 + ti as f64,
                    seed: 0,
                });
            }
        }
        out
    }

    #[test]
    fn twelve_rows_and_stable_bytes() {
        let mut a = Vec::new();
        write_csv(&mut a, &rows()).unwrap();
        let mut b = Vec::new();
        write_csv(&mut b, &rows()).unwrap();
        assert_eq!(a, b);
        let text = String::from_utf8(a).unwrap();
        assert_eq!(text.lines().count(), 13);
        assert_eq!(text.lines().next().unwrap(), HEADER);
        assert_eq!(text.lines().nth(2).unwrap(), "full,go_avoid,25,0.0833,11.000,0");
    }

    #[test]
    fn averages_are_arithmetic_means() {
        let t = table(&rows());
        let (name, cells) = &t[1];
        assert_eq!(name, "no_rl");
        let avg = cells.iter().map(|(_, c)| c.median).sum::<f64>() / 3.0;
        assert!((avg - (3.0 + 4.0 + 5.0) / 36.0).abs() < 1e-12);
        assert!(summarize(&rows()).contains("0.3333"));
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[0.2, 0.9, 0.4]), 0.4);
        assert_eq!(median(&[0.2, 0.4, 0.6, 1.0]), 0.5);
    }

    #[test]
    fn report_files_are_reproducible() {
        let d = tempfile::tempdir().unwrap();
        write_report(d.path().join("a"), &rows()).unwrap();
        write_report(d.path().join("b"), &rows()).unwrap();
        for f in ["results.csv", "summary.txt"] {
            assert_eq!(
                std::fs::read(d.path().join("a").join(f)).unwrap(),
                std::fs::read(d.path().join("b").join(f)).unwrap()
            );
        }
    }
}
