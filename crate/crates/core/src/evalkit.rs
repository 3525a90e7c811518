//! Evaluation: sample completions from a policy, verify them, and report
//! pass@k.
//!
//! pass@k uses the standard unbiased combinatorial estimator
//! `1 − C(n−c, k)/C(n, k)` over `n` verified samples with `c` accepted,
//! computed as a product of ratios so nothing overflows. Aggregation is the
//! macro average (mean over problems).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Problem;
use crate::error::{Error, Result};
use crate::policy::{PolicyModel, Tokenizer};
use crate::seeding::derive_seed;
use crate::verifier::{verify, ExecLimits, Verdict};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Samples drawn (and verified) per problem.
    pub samples_per_problem: usize,
    /// Which pass@k values to report; every k must be ≤ samples_per_problem.
    pub k_values: Vec<usize>,
    pub temperature: f64,
    pub seed: u64,
    /// Sampling budget per completion.
    pub max_new_tokens: usize,
    /// Also report a deterministic greedy-decoding pass@1 variant.
    pub include_greedy: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            samples_per_problem: 10,
            k_values: vec![1, 10],
            temperature: 0.8,
            seed: 0,
            max_new_tokens: 64,
            include_greedy: true,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_problem == 0 {
            return Err(Error::Config("samples_per_problem must be at least 1".into()));
        }
        if self.k_values.is_empty() {
            return Err(Error::Config("k_values must not be empty".into()));
        }
        for &k in &self.k_values {
            if k == 0 || k > self.samples_per_problem {
                return Err(Error::Config(format!(
                    "k value {k} out of range 1..={}",
                    self.samples_per_problem
                )));
            }
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::Config("max_new_tokens must be at least 1".into()));
        }
        Ok(())
    }
}

/// Unbiased pass@k: probability that at least one of `k` draws (without
/// replacement) from `n` samples with `c` correct is correct.
pub fn pass_at_k(n: usize, c: usize, k: usize) -> Result<f64> {
    if c > n {
        return Err(Error::Argument(format!("c ({c}) exceeds n ({n})")));
    }
    if k == 0 || k > n {
        return Err(Error::Argument(format!("k ({k}) out of range 1..={n}")));
    }
    if c == 0 {
        return Ok(0.0);
    }
    if n - c < k {
        // Fewer incorrect samples than draws: a correct one is guaranteed.
        return Ok(1.0);
    }
    // 1 − C(n−c, k)/C(n, k) = 1 − Π_{i=0}^{k−1} (n−c−i)/(n−i).
    let mut miss = 1.0;
    for i in 0..k {
        miss *= (n - c - i) as f64 / (n - i) as f64;
    }
    Ok(1.0 - miss)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemEval {
    pub problem_id: String,
    pub n: usize,
    /// Number of Accepted samples.
    pub c: usize,
    pub pass_at_k: BTreeMap<usize, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub difficulty: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub problems: Vec<ProblemEval>,
    /// Macro-averaged pass@k over problems.
    pub pass_at_k: BTreeMap<usize, f64>,
    pub verdict_hist: BTreeMap<String, usize>,
    /// Macro-averaged pass@k per difficulty tag (tagged problems only).
    pub by_difficulty: BTreeMap<String, BTreeMap<usize, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub greedy_pass_at_1: Option<f64>,
    pub samples_per_problem: usize,
    pub temperature: f64,
}

/// Draw `samples_per_problem` seeded completions per problem, verify each,
/// and aggregate pass@k. Deterministic for a fixed seed; the (problem,
/// sample) fan-out runs on the rayon pool but reduction order is fixed.
pub fn evaluate(
    model: &PolicyModel,
    problems: &[Problem],
    config: &EvalConfig,
    limits: &ExecLimits,
) -> Result<EvalReport> {
    config.validate()?;
    for problem in problems {
        if problem.tests.is_empty() {
            return Err(Error::Validation(format!(
                "problem {:?} has no tests; cannot evaluate",
                problem.problem_id
            )));
        }
    }
    let tokenizer = Tokenizer::new();
    let n = config.samples_per_problem;

    // One task per (problem, sample index); plus one greedy task per
    // problem when requested, indexed with sample slot n.
    let mut tasks: Vec<(usize, usize)> = Vec::new();
    for p in 0..problems.len() {
        for s in 0..n {
            tasks.push((p, s));
        }
        if config.include_greedy {
            tasks.push((p, n));
        }
    }

    let outcomes: Vec<Result<Verdict>> = tasks
        .par_iter()
        .map(|&(p, s)| {
            let problem = &problems[p];
            let prompt = tokenizer.encode(problem.statement.as_bytes());
            let completion = if s == n {
                model.sample_completion(&prompt, 0.0, config.max_new_tokens, 0)?
            } else {
                let seed = derive_seed(
                    config.seed,
                    &[b"eval", problem.problem_id.as_bytes(), &(s as u64).to_le_bytes()],
                );
                model.sample_completion(&prompt, config.temperature, config.max_new_tokens, seed)?
            };
            let source = String::from_utf8_lossy(&tokenizer.decode_lossy(&completion)).into_owned();
            verify(&source, &problem.tests, limits)
        })
        .collect();

    let mut verdicts: Vec<Vec<Verdict>> = vec![Vec::new(); problems.len()];
    let mut greedy_accepted = 0usize;
    let mut verdict_hist: BTreeMap<String, usize> = BTreeMap::new();
    for (&(p, s), outcome) in tasks.iter().zip(outcomes) {
        let verdict = outcome?;
        if s == n {
            if verdict == Verdict::Accepted {
                greedy_accepted += 1;
            }
        } else {
            *verdict_hist.entry(verdict.as_str().to_string()).or_default() += 1;
            verdicts[p].push(verdict);
        }
    }

    let mut report = EvalReport {
        problems: Vec::with_capacity(problems.len()),
        pass_at_k: BTreeMap::new(),
        verdict_hist,
        by_difficulty: BTreeMap::new(),
        greedy_pass_at_1: (config.include_greedy && !problems.is_empty())
            .then(|| greedy_accepted as f64 / problems.len() as f64),
        samples_per_problem: n,
        temperature: config.temperature,
    };
    for (problem, vs) in problems.iter().zip(&verdicts) {
        let c = vs.iter().filter(|&&v| v == Verdict::Accepted).count();
        let mut per_k = BTreeMap::new();
        for &k in &config.k_values {
            per_k.insert(k, pass_at_k(n, c, k)?);
        }
        report.problems.push(ProblemEval {
            problem_id: problem.problem_id.clone(),
            n,
            c,
            pass_at_k: per_k,
            difficulty: problem.difficulty.clone(),
        });
    }
    for &k in &config.k_values {
        let mean = if report.problems.is_empty() {
            0.0
        } else {
            report.problems.iter().map(|p| p.pass_at_k[&k]).sum::<f64>()
                / report.problems.len() as f64
        };
        report.pass_at_k.insert(k, mean);
    }
    let mut tags: BTreeMap<String, Vec<&ProblemEval>> = BTreeMap::new();
    for p in &report.problems {
        if let Some(tag) = &p.difficulty {
            tags.entry(tag.clone()).or_default().push(p);
        }
    }
    for (tag, group) in tags {
        let mut per_k = BTreeMap::new();
        for &k in &config.k_values {
            per_k.insert(
                k,
                group.iter().map(|p| p.pass_at_k[&k]).sum::<f64>() / group.len() as f64,
            );
        }
        report.by_difficulty.insert(tag, per_k);
    }
    Ok(report)
}

/// Write the JSON summary, a plain-text table, and a static SVG plot.
/// Returns the paths written.
pub fn emit_report(report: &EvalReport, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io_at(out_dir, e))?;
    let json_path = out_dir.join("eval_report.json");
    let table_path = out_dir.join("eval_table.txt");
    let plot_path = out_dir.join("pass_at_k.svg");

    let file = File::create(&json_path).map_err(|e| Error::io_at(&json_path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, report)?;
    w.write_all(b"\n").map_err(|e| Error::io_at(&json_path, e))?;
    w.flush().map_err(|e| Error::io_at(&json_path, e))?;

    std::fs::write(&table_path, render_table(report)).map_err(|e| Error::io_at(&table_path, e))?;
    std::fs::write(&plot_path, render_pass_k_svg(report)).map_err(|e| Error::io_at(&plot_path, e))?;
    Ok(vec![json_path, table_path, plot_path])
}

/// Rows = result sets (aggregate plus one per difficulty tag), columns =
/// pass@k. The `report` subcommand stacks several of these tables, one per
/// training mode, to mirror a results-table layout.
pub fn render_table(report: &EvalReport) -> String {
    let ks: Vec<usize> = report.pass_at_k.keys().copied().collect();
    let mut out = String::new();
    out.push_str(&format!("{:<16}", "set"));
    for k in &ks {
        out.push_str(&format!("  pass@{k:<6}"));
    }
    out.push('\n');
    let row = |name: &str, values: &BTreeMap<usize, f64>| {
        let mut line = format!("{name:<16}");
        for k in &ks {
            match values.get(k) {
                Some(v) => line.push_str(&format!("  {:<11.4}", v)),
                None => line.push_str(&format!("  {:<11}", "-")),
            }
        }
        line.push('\n');
        line
    };
    out.push_str(&row("all", &report.pass_at_k));
    for (tag, values) in &report.by_difficulty {
        out.push_str(&row(tag, values));
    }
    if let Some(g) = report.greedy_pass_at_1 {
        out.push_str(&format!("greedy pass@1: {g:.4}\n"));
    }
    out.push_str(&format!(
        "problems: {}, samples/problem: {}, temperature: {}\n",
        report.problems.len(),
        report.samples_per_problem,
        report.temperature
    ));
    out
}

/// Minimal static bar chart of aggregate pass@k. Deterministic bytes.
fn render_pass_k_svg(report: &EvalReport) -> String {
    let ks: Vec<(usize, f64)> = report.pass_at_k.iter().map(|(&k, &v)| (k, v)).collect();
    let width = 120 + 90 * ks.len().max(1);
    let height = 260;
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    svg.push_str("<text x=\"12\" y=\"24\" font-family=\"monospace\" font-size=\"14\">pass@k</text>\n");
    // Axis line at y = 220 (value 0) up to y = 40 (value 1).
    svg.push_str("<line x1=\"40\" y1=\"220\" x2=\"40\" y2=\"40\" stroke=\"black\"/>\n");
    svg.push_str(&format!(
        "<line x1=\"40\" y1=\"220\" x2=\"{}\" y2=\"220\" stroke=\"black\"/>\n",
        width - 20
    ));
    for (i, (k, v)) in ks.iter().enumerate() {
        let bar_h = (v.clamp(0.0, 1.0) * 180.0).round() as usize;
        let x = 60 + 90 * i;
        let y = 220 - bar_h;
        svg.push_str(&format!(
            "<rect x=\"{x}\" y=\"{y}\" width=\"60\" height=\"{bar_h}\" fill=\"#4477aa\"/>\n"
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"238\" font-family=\"monospace\" font-size=\"12\">k={k}</text>\n",
            x + 12
        ));
        svg.push_str(&format!(
            "<text x=\"{x}\" y=\"{}\" font-family=\"monospace\" font-size=\"12\">{v:.3}</text>\n",
            y.saturating_sub(6).max(14)
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

/// Exhaustive-enumeration oracle for pass@k: fraction of k-subsets of n
/// samples (c of them correct) containing at least one correct sample.
/// Only sensible for small n; used by tests and the acceptance suite.
pub fn pass_at_k_bruteforce(n: usize, c: usize, k: usize) -> f64 {
    assert!(n <= 20, "bruteforce oracle is exponential in n");
    let mut subsets = 0u64;
    let mut hits = 0u64;
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != k {
            continue;
        }
        subsets += 1;
        // Samples 0..c are the correct ones; any of those bits set is a hit.
        if c > 0 && mask & ((1u32 << c) - 1) != 0 {
            hits += 1;
        }
    }
    hits as f64 / subsets as f64
}
