//! Offline corpus: load, validate, filter, and rebalance problems and graded
//! solutions.
//!
//! The on-disk format is UTF-8 JSONL, one record per line:
//!
//! ```text
//! {"kind":"problem","problem_id":"p1","statement":"...","tests":[{"input":"...","expected_output":"..."}]}
//! {"kind":"solution","problem_id":"p1","source":"...","verdict":"accepted"}
//! ```
//!
//! Malformed or dangling lines are quarantined into a rejects report rather
//! than aborting; large scraped corpora always contain noise. A `Corpus` is
//! immutable after construction and safe to share read-only across threads.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::Tokenizer;
use crate::reward::RewardProfile;
use crate::seeding::derive_seed;
use crate::verifier::Verdict;

/// One executable check: bytes fed to stdin, expected stdout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestCase {
    pub input: String,
    pub expected_output: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Problem {
    pub problem_id: String,
    pub statement: String,
    pub tests: Vec<TestCase>,
    pub difficulty: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub problem_id: String,
    pub source: String,
    pub token_length: usize,
    pub verdict: Option<Verdict>,
    pub reward: Option<f64>,
    /// Generator-declared expected verdict, carried through for cross-checks.
    pub intent: Option<Verdict>,
}

impl Solution {
    pub fn is_accepted(&self) -> bool {
        self.verdict == Some(Verdict::Accepted)
    }

    pub(crate) fn set_verdict(&mut self, verdict: Verdict, profile: &RewardProfile) {
        self.verdict = Some(verdict);
        self.reward = Some(profile.reward_of(verdict));
    }
}

#[derive(Debug, Clone, Default)]
pub struct Corpus {
    problems: IndexMap<String, Problem>,
    solutions: IndexMap<String, Vec<Solution>>,
    pub provenance: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub max_tokens: usize,
    pub cap_correct: usize,
    pub require_tests: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig { max_tokens: 2048, cap_correct: 50, require_tests: false }
    }
}

/// One quarantined input line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reject {
    pub line: usize,
    pub error: String,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct IngestStats {
    pub lines_total: usize,
    pub blank_lines: usize,
    pub problems: usize,
    pub solutions_kept: usize,
    pub solutions_discarded_by_length: usize,
    pub rejects: Vec<Reject>,
}

#[derive(Debug)]
pub struct IngestOutcome {
    pub corpus: Corpus,
    pub stats: IngestStats,
}

/// Wire format for one JSONL record.
#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Record {
    Problem {
        problem_id: String,
        statement: String,
        tests: Vec<TestCase>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        difficulty: Option<String>,
    },
    Solution {
        problem_id: String,
        source: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        verdict: Option<Verdict>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        intent: Option<Verdict>,
    },
}

impl Corpus {
    pub fn problems(&self) -> &IndexMap<String, Problem> {
        &self.problems
    }

    pub fn solutions(&self) -> &IndexMap<String, Vec<Solution>> {
        &self.solutions
    }

    pub fn solutions_of(&self, problem_id: &str) -> &[Solution] {
        self.solutions.get(problem_id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn problem(&self, problem_id: &str) -> Option<&Problem> {
        self.problems.get(problem_id)
    }

    pub fn total_solutions(&self) -> usize {
        self.solutions.values().map(Vec::len).sum()
    }

    pub fn is_fully_labeled(&self) -> bool {
        self.solutions.values().flatten().all(|s| s.verdict.is_some())
    }

    /// Iterate solutions in stable (file) order with their global index.
    pub fn indexed_solutions(&self) -> impl Iterator<Item = (usize, &str, usize, &Solution)> {
        self.solutions
            .iter()
            .flat_map(|(pid, sols)| {
                sols.iter().enumerate().map(move |(i, s)| (pid.as_str(), i, s))
            })
            .enumerate()
            .map(|(global, (pid, i, s))| (global, pid, i, s))
    }

    pub(crate) fn insert_problem(&mut self, problem: Problem) -> Result<()> {
        if self.problems.contains_key(&problem.problem_id) {
            return Err(Error::Validation(format!(
                "duplicate problem_id {:?}",
                problem.problem_id
            )));
        }
        self.solutions.entry(problem.problem_id.clone()).or_default();
        self.problems.insert(problem.problem_id.clone(), problem);
        Ok(())
    }

    pub(crate) fn push_solution(&mut self, solution: Solution) -> Result<()> {
        if !self.problems.contains_key(&solution.problem_id) {
            return Err(Error::Validation(format!(
                "solution references unknown problem_id {:?}",
                solution.problem_id
            )));
        }
        self.solutions
            .entry(solution.problem_id.clone())
            .or_default()
            .push(solution);
        Ok(())
    }

    pub(crate) fn solutions_mut(&mut self) -> &mut IndexMap<String, Vec<Solution>> {
        &mut self.solutions
    }

    /// A new corpus restricted to problems (and their solutions) matching
    /// `keep`; insertion order is preserved.
    pub fn subset(&self, mut keep: impl FnMut(&Problem) -> bool) -> Corpus {
        let mut out = Corpus { provenance: self.provenance.clone(), ..Corpus::default() };
        for problem in self.problems.values() {
            if keep(problem) {
                out.insert_problem(problem.clone()).expect("unique in source corpus");
                for sol in self.solutions_of(&problem.problem_id) {
                    out.push_solution(sol.clone()).expect("problem just inserted");
                }
            }
        }
        out
    }

    /// A new corpus with only the solutions matching `keep`; problems are
    /// retained even if all their solutions are dropped.
    pub fn filter_solutions(&self, mut keep: impl FnMut(&Problem, &Solution) -> bool) -> Corpus {
        let mut out = Corpus { provenance: self.provenance.clone(), ..Corpus::default() };
        for problem in self.problems.values() {
            out.insert_problem(problem.clone()).expect("unique in source corpus");
            for sol in self.solutions_of(&problem.problem_id) {
                if keep(problem, sol) {
                    out.push_solution(sol.clone()).expect("problem just inserted");
                }
            }
        }
        out
    }

    /// Write the corpus back out: problems first, then solutions, both in
    /// insertion order. Stable bytes for identical corpora.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io_at(path, e))?;
        let mut w = BufWriter::new(file);
        for problem in self.problems.values() {
            let record = Record::Problem {
                problem_id: problem.problem_id.clone(),
                statement: problem.statement.clone(),
                tests: problem.tests.clone(),
                difficulty: problem.difficulty.clone(),
            };
            serde_json::to_writer(&mut w, &record)?;
            w.write_all(b"\n").map_err(|e| Error::io_at(path, e))?;
        }
        for sols in self.solutions.values() {
            for sol in sols {
                let record = Record::Solution {
                    problem_id: sol.problem_id.clone(),
                    source: sol.source.clone(),
                    verdict: sol.verdict,
                    intent: sol.intent,
                };
                serde_json::to_writer(&mut w, &record)?;
                w.write_all(b"\n").map_err(|e| Error::io_at(path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io_at(path, e))?;
        Ok(())
    }

    /// Strict load of a pipeline-produced corpus file: any reject is an
    /// error, no length filtering.
    pub fn load(path: &Path) -> Result<Corpus> {
        let outcome = ingest_corpus(
            path,
            &FilterConfig { max_tokens: usize::MAX, cap_correct: usize::MAX, require_tests: false },
        )?;
        if let Some(first) = outcome.stats.rejects.first() {
            return Err(Error::Validation(format!(
                "{} is not a clean corpus file: line {}: {}",
                path.display(),
                first.line,
                first.error
            )));
        }
        Ok(outcome.corpus)
    }
}

/// Ingest a JSONL corpus, filtering overlong solutions and quarantining
/// malformed lines. Solutions may appear before their problem; references
/// are resolved once the whole file is read.
pub fn ingest_corpus(path: &Path, config: &FilterConfig) -> Result<IngestOutcome> {
    if config.max_tokens < 1 || config.cap_correct < 1 {
        return Err(Error::Config(
            "max_tokens and cap_correct must be at least 1".to_string(),
        ));
    }
    let file = File::open(path).map_err(|e| Error::io_at(path, e))?;
    let reader = BufReader::new(file);
    let tokenizer = Tokenizer::new();
    let profile = RewardProfile::default();

    let mut corpus = Corpus {
        provenance: format!("ingested from {}", path.display()),
        ..Corpus::default()
    };
    let mut stats = IngestStats::default();
    // (line number, solution) waiting for its problem record
    let mut pending: Vec<(usize, Solution)> = Vec::new();

    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        stats.lines_total = lineno;
        let line = line.map_err(|e| Error::io_at(path, e))?;
        if line.trim().is_empty() {
            stats.blank_lines += 1;
            continue;
        }
        let record: Record = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                stats.rejects.push(Reject { line: lineno, error: format!("malformed json: {e}") });
                continue;
            }
        };
        match record {
            Record::Problem { problem_id, statement, tests, difficulty } => {
                if problem_id.is_empty() {
                    stats.rejects.push(Reject { line: lineno, error: "empty problem_id".into() });
                    continue;
                }
                if config.require_tests && tests.is_empty() {
                    stats.rejects.push(Reject {
                        line: lineno,
                        error: format!("problem {problem_id:?} has no tests"),
                    });
                    continue;
                }
                // Duplicate problem ids are a fatal corpus defect, not noise.
                corpus.insert_problem(Problem { problem_id, statement, tests, difficulty })?;
                stats.problems += 1;
            }
            Record::Solution { problem_id, source, verdict, intent } => {
                if problem_id.is_empty() {
                    stats.rejects.push(Reject { line: lineno, error: "empty problem_id".into() });
                    continue;
                }
                let token_length = tokenizer.token_length(&source);
                if token_length > config.max_tokens {
                    stats.solutions_discarded_by_length += 1;
                    continue;
                }
                let reward = verdict.map(|v| profile.reward_of(v));
                pending.push((
                    lineno,
                    Solution { problem_id, source, token_length, verdict, reward, intent },
                ));
            }
        }
    }

    for (lineno, solution) in pending {
        if corpus.problems.contains_key(&solution.problem_id) {
            corpus.push_solution(solution)?;
            stats.solutions_kept += 1;
        } else {
            stats.rejects.push(Reject {
                line: lineno,
                error: format!("solution references unknown problem_id {:?}", solution.problem_id),
            });
        }
    }

    Ok(IngestOutcome { corpus, stats })
}

/// Write the rejects report (JSONL of `{"line":int,"error":str}`).
pub fn write_rejects(rejects: &[Reject], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io_at(path, e))?;
    let mut w = BufWriter::new(file);
    for reject in rejects {
        serde_json::to_writer(&mut w, reject)?;
        w.write_all(b"\n").map_err(|e| Error::io_at(path, e))?;
    }
    w.flush().map_err(|e| Error::io_at(path, e))?;
    Ok(())
}

/// Cap the number of Accepted solutions per problem at `cap`, keeping a
/// seeded uniform random subset (first-N would inherit ordering bias from
/// the source file). Non-Accepted solutions are untouched. Idempotent for a
/// fixed seed.
pub fn cap_correct(corpus: &Corpus, cap: usize, seed: u64) -> Result<Corpus> {
    if cap < 1 {
        return Err(Error::Argument("cap must be at least 1".to_string()));
    }
    let mut out = corpus.clone();
    for (problem_id, sols) in out.solutions_mut().iter_mut() {
        if let Some((i, _)) = sols.iter().enumerate().find(|(_, s)| s.verdict.is_none()) {
            return Err(Error::Validation(format!(
                "cap_correct requires a labeled corpus; solution {i} of problem {problem_id:?} has no verdict"
            )));
        }
        let accepted: Vec<usize> = sols
            .iter()
            .enumerate()
            .filter(|(_, s)| s.is_accepted())
            .map(|(i, _)| i)
            .collect();
        if accepted.len() <= cap {
            continue;
        }
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(seed, &[b"cap_correct", problem_id.as_bytes()]));
        let mut chosen = accepted.clone();
        chosen.shuffle(&mut rng);
        chosen.truncate(cap);
        chosen.sort_unstable();
        let mut keep = vec![true; sols.len()];
        for i in accepted {
            keep[i] = chosen.binary_search(&i).is_ok();
        }
        let mut idx = 0;
        sols.retain(|_| {
            let k = keep[idx];
            idx += 1;
            k
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct CorpusStats {
    pub problems: usize,
    pub solutions: usize,
    pub labeled: usize,
    pub verdict_hist: BTreeMap<String, usize>,
    pub per_problem_solutions: BTreeMap<String, usize>,
    /// Token-length histogram, bucket width 256, keyed by bucket start.
    pub token_length_hist: BTreeMap<usize, usize>,
    /// Problems with at least one Accepted and one non-Accepted solution.
    pub eligible_problems: usize,
    pub excluded_no_correct: usize,
    pub excluded_no_incorrect: usize,
    pub excluded_no_solutions: usize,
}

pub fn corpus_stats(corpus: &Corpus) -> CorpusStats {
    let mut stats = CorpusStats { problems: corpus.problems.len(), ..CorpusStats::default() };
    for (problem_id, sols) in &corpus.solutions {
        stats.solutions += sols.len();
        stats.per_problem_solutions.insert(problem_id.clone(), sols.len());
        let mut accepted = 0usize;
        let mut failed = 0usize;
        for sol in sols {
            *stats.token_length_hist.entry((sol.token_length / 256) * 256).or_default() += 1;
            if let Some(v) = sol.verdict {
                stats.labeled += 1;
                *stats.verdict_hist.entry(v.as_str().to_string()).or_default() += 1;
                if v == Verdict::Accepted {
                    accepted += 1;
                } else {
                    failed += 1;
                }
            }
        }
        if sols.is_empty() {
            stats.excluded_no_solutions += 1;
        } else if accepted == 0 {
            stats.excluded_no_correct += 1;
        } else if failed == 0 {
            stats.excluded_no_incorrect += 1;
        } else {
            stats.eligible_problems += 1;
        }
    }
    stats
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;

    /// Build a labeled in-memory corpus: per problem, a list of verdicts.
    pub fn labeled_corpus(spec: &[(&str, &[Verdict])]) -> Corpus {
        let profile = RewardProfile::default();
        let mut corpus = Corpus { provenance: "test".into(), ..Corpus::default() };
        for (pid, verdicts) in spec {
            corpus
                .insert_problem(Problem {
                    problem_id: pid.to_string(),
                    statement: format!("problem {pid}\n"),
                    tests: vec![TestCase {
                        input: "x\n".into(),
                        expected_output: "x".into(),
                    }],
                    difficulty: None,
                })
                .unwrap();
            for (i, &v) in verdicts.iter().enumerate() {
                let source = format!("# {pid} sol {i}\nprint('x')\n");
                let token_length = source.len();
                corpus
                    .push_solution(Solution {
                        problem_id: pid.to_string(),
                        source,
                        token_length,
                        verdict: Some(v),
                        reward: Some(profile.reward_of(v)),
                        intent: Some(v),
                    })
                    .unwrap();
            }
        }
        corpus
    }
}
