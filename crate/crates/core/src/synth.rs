//! Synthetic task corpora: small string-manipulation problems with known-good
//! reference programs and corruption operators that produce solutions whose
//! verdict is known by construction.
//!
//! The generator is deterministic: the same spec and seed produce
//! byte-identical corpora. Every generated solution carries its intended
//! verdict in the `intent` field so the verifier can be cross-checked against
//! it end to end.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Problem, Solution, TestCase};
use crate::error::{Error, Result};
use crate::policy::Tokenizer;
use crate::reward::RewardProfile;
use crate::seeding::derive_seed;
use crate::verifier::Verdict;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskFamily {
    ReverseString,
    SortDigits,
    BalancedParens,
}

impl TaskFamily {
    pub const ALL: [TaskFamily; 3] =
        [TaskFamily::ReverseString, TaskFamily::SortDigits, TaskFamily::BalancedParens];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskFamily::ReverseString => "reverse-string",
            TaskFamily::SortDigits => "sort-digits",
            TaskFamily::BalancedParens => "balanced-parens",
        }
    }
}

impl std::str::FromStr for TaskFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<TaskFamily> {
        TaskFamily::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::Argument(format!("unknown task family {s:?}")))
    }
}

impl std::fmt::Display for TaskFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Fractions of solutions generated with each intended verdict; must be
/// non-negative and sum to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictMix {
    pub accepted: f64,
    pub wrong_answer: f64,
    pub time_limit: f64,
    pub runtime_error: f64,
    pub compile_error: f64,
}

impl Default for VerdictMix {
    fn default() -> Self {
        VerdictMix {
            accepted: 0.5,
            wrong_answer: 0.2,
            time_limit: 0.1,
            runtime_error: 0.1,
            compile_error: 0.1,
        }
    }
}

impl VerdictMix {
    fn fractions(&self) -> [(Verdict, f64); 5] {
        [
            (Verdict::Accepted, self.accepted),
            (Verdict::WrongAnswer, self.wrong_answer),
            (Verdict::TimeLimit, self.time_limit),
            (Verdict::RuntimeError, self.runtime_error),
            (Verdict::CompileError, self.compile_error),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let fractions = self.fractions();
        for (verdict, f) in fractions {
            if !(f.is_finite() && f >= 0.0) {
                return Err(Error::Config(format!(
                    "mix fraction for {verdict} must be a non-negative number, got {f}"
                )));
            }
        }
        let sum: f64 = fractions.iter().map(|(_, f)| f).sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!("mix fractions must sum to 1, got {sum}")));
        }
        Ok(())
    }

    /// Apportion `n` solutions to the five intents by largest remainder, so
    /// counts sum to exactly `n` and are identical for every problem.
    pub fn counts(&self, n: usize) -> [(Verdict, usize); 5] {
        let fractions = self.fractions();
        let mut out: Vec<(Verdict, usize, f64)> = fractions
            .iter()
            .map(|&(v, f)| {
                let exact = f * n as f64;
                (v, exact.floor() as usize, exact - exact.floor())
            })
            .collect();
        let mut assigned: usize = out.iter().map(|&(_, c, _)| c).sum();
        // Hand out the remainder to the largest fractional parts; ties go to
        // the earlier verdict in enum order, so the result is deterministic.
        let mut order: Vec<usize> = (0..out.len()).collect();
        order.sort_by(|&a, &b| out[b].2.partial_cmp(&out[a].2).unwrap().then(a.cmp(&b)));
        let mut i = 0;
        while assigned < n {
            out[order[i % order.len()]].1 += 1;
            assigned += 1;
            i += 1;
        }
        [
            (out[0].0, out[0].1),
            (out[1].0, out[1].1),
            (out[2].0, out[2].1),
            (out[3].0, out[3].1),
            (out[4].0, out[4].1),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub family: TaskFamily,
    pub problems: usize,
    pub solutions_per_problem: usize,
    pub mix: VerdictMix,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        SyntheticTaskSpec {
            family: TaskFamily::ReverseString,
            problems: 20,
            solutions_per_problem: 8,
            mix: VerdictMix::default(),
            seed: 0,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.problems == 0 {
            return Err(Error::Config("problems must be at least 1".into()));
        }
        if self.solutions_per_problem == 0 {
            return Err(Error::Config("solutions_per_problem must be at least 1".into()));
        }
        self.mix.validate()
    }
}

/// Short comment prefixes attached to accepted solutions so a problem's
/// correct programs are not all byte-identical. Deliberately a tiny pool:
/// the corpus should stay learnable by a small model.
const ACCEPTED_PREFIXES: [&str; 3] = ["", "# solve\n", "# main\n"];

/// Crashes at the first executed line with a nonzero exit status.
const CRASH_SOURCE: &str = "raise RuntimeError('corrupted')\n";
/// Valid syntax, never terminates.
const SPIN_SOURCE: &str = "while True:\n    pass\n";
/// Rejected by the compiler.
const SYNTAX_SOURCE: &str = "def f(:\n    return 0\n";

fn statement(family: TaskFamily, case: usize) -> String {
    let task = match family {
        TaskFamily::ReverseString => "Read one line and print it reversed.",
        TaskFamily::SortDigits => "Read a line of digits and print them sorted ascending.",
        TaskFamily::BalancedParens => {
            "Read a parenthesis string and print yes if balanced, else no."
        }
    };
    format!("{task} (case {case:03})")
}

fn canonical_source(family: TaskFamily) -> &'static str {
    match family {
        TaskFamily::ReverseString => "print(input()[::-1])",
        TaskFamily::SortDigits => "print(''.join(sorted(input())))",
        TaskFamily::BalancedParens => {
            "s = input()\nd = 0\nm = 0\nfor c in s:\n    d += 1 if c == '(' else -1\n    m = min(m, d)\nprint('yes' if d == 0 and m >= 0 else 'no')"
        }
    }
}

/// A plausible but wrong program for the family. Diverges from the
/// canonical program at the first byte so that positive and negative group
/// members do not share a long common prefix.
fn wrong_source(family: TaskFamily) -> &'static str {
    match family {
        // Forgot to reverse / sort: echoes the input.
        TaskFamily::ReverseString | TaskFamily::SortDigits => "s = input()\nprint(s)",
        // Ignores the input entirely.
        TaskFamily::BalancedParens => "s = input()\nprint('yes')",
    }
}

fn lowercase_payload(rng: &mut ChaCha8Rng) -> String {
    let len = rng.random_range(4..=9);
    (0..len).map(|_| rng.random_range(b'a'..=b'z') as char).collect()
}

fn digit_payload(rng: &mut ChaCha8Rng) -> String {
    let len = rng.random_range(4..=9);
    (0..len).map(|_| rng.random_range(b'0'..=b'9') as char).collect()
}

/// Balanced parenthesis string built by repeatedly inserting "()" pairs.
fn balanced_payload(rng: &mut ChaCha8Rng) -> String {
    let pairs = rng.random_range(2..=5);
    let mut s = String::from("()");
    for _ in 1..pairs {
        let at = rng.random_range(0..=s.len());
        s.insert_str(at, "()");
    }
    s
}

fn tests_for(family: TaskFamily, rng: &mut ChaCha8Rng) -> Vec<TestCase> {
    match family {
        TaskFamily::ReverseString => (0..2)
            .map(|_| {
                // Palindromic payloads would make the echo program pass.
                let payload = loop {
                    let p = lowercase_payload(rng);
                    if p.chars().rev().collect::<String>() != p {
                        break p;
                    }
                };
                let expected: String = payload.chars().rev().collect();
                TestCase { input: format!("{payload}\n"), expected_output: expected }
            })
            .collect(),
        TaskFamily::SortDigits => (0..2)
            .map(|_| {
                // Pre-sorted payloads would make the echo program pass.
                let payload = loop {
                    let p = digit_payload(rng);
                    let mut sorted: Vec<char> = p.chars().collect();
                    sorted.sort_unstable();
                    if sorted.iter().collect::<String>() != p {
                        break p;
                    }
                };
                let mut sorted: Vec<char> = payload.chars().collect();
                sorted.sort_unstable();
                TestCase {
                    input: format!("{payload}\n"),
                    expected_output: sorted.into_iter().collect(),
                }
            })
            .collect(),
        TaskFamily::BalancedParens => {
            let yes = balanced_payload(rng);
            // Leading ')' dips below zero immediately: unbalanced for sure,
            // so the constant-"yes" program fails this case.
            let no = format!("){}", balanced_payload(rng));
            vec![
                TestCase { input: format!("{yes}\n"), expected_output: "yes".into() },
                TestCase { input: format!("{no}\n"), expected_output: "no".into() },
            ]
        }
    }
}

fn solution_source(family: TaskFamily, intent: Verdict, rng: &mut ChaCha8Rng) -> String {
    match intent {
        Verdict::Accepted => {
            let prefix = ACCEPTED_PREFIXES[rng.random_range(0..ACCEPTED_PREFIXES.len())];
            format!("{prefix}{}", canonical_source(family))
        }
        Verdict::WrongAnswer => wrong_source(family).to_string(),
        Verdict::TimeLimit => SPIN_SOURCE.to_string(),
        Verdict::RuntimeError => CRASH_SOURCE.to_string(),
        Verdict::CompileError => SYNTAX_SOURCE.to_string(),
    }
}

/// Generate a corpus from the spec. Unlabeled: verdicts come from the
/// verifier, not the generator; intents are recorded for cross-checking.
pub fn generate(spec: &SyntheticTaskSpec) -> Result<Corpus> {
    spec.validate()?;
    let tokenizer = Tokenizer::new();
    let mut corpus = Corpus::default();
    corpus.provenance = format!(
        "synth family={} problems={} solutions_per_problem={} seed={}",
        spec.family, spec.problems, spec.solutions_per_problem, spec.seed
    );
    let counts = spec.mix.counts(spec.solutions_per_problem);
    for case in 0..spec.problems {
        let problem_id = format!("{}-{case:04}", spec.family);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            spec.seed,
            &[b"synth-problem", spec.family.as_str().as_bytes(), &(case as u64).to_le_bytes()],
        ));
        corpus.insert_problem(Problem {
            problem_id: problem_id.clone(),
            statement: statement(spec.family, case),
            tests: tests_for(spec.family, &mut rng),
            difficulty: Some(difficulty_tag(spec.family).to_string()),
        })?;
        let mut intents: Vec<Verdict> = Vec::with_capacity(spec.solutions_per_problem);
        for (verdict, count) in counts {
            intents.extend(std::iter::repeat(verdict).take(count));
        }
        intents.shuffle(&mut rng);
        for intent in intents {
            let source = solution_source(spec.family, intent, &mut rng);
            corpus.push_solution(Solution {
                problem_id: problem_id.clone(),
                token_length: tokenizer.token_length(&source),
                source,
                verdict: None,
                reward: None,
                intent: Some(intent),
            })?;
        }
    }
    Ok(corpus)
}

/// Generate a corpus and stamp each solution's verdict and reward from its
/// generation intent, skipping the verifier entirely.
///
/// The intent-equals-verdict contract is enforced separately (each corruption
/// operator is labeled end to end in the test suite); this entry lets
/// benchmarks and trainer tests build large labeled corpora without spawning
/// an interpreter per solution.
pub fn generate_labeled(spec: &SyntheticTaskSpec, profile: &RewardProfile) -> Result<Corpus> {
    let mut corpus = generate(spec)?;
    for solutions in corpus.solutions_mut().values_mut() {
        for s in solutions.iter_mut() {
            let intent = s.intent.expect("generated solutions always carry an intent");
            s.verdict = Some(intent);
            s.reward = Some(profile.reward_of(intent));
        }
    }
    Ok(corpus)
}

fn difficulty_tag(family: TaskFamily) -> &'static str {
    match family {
        TaskFamily::ReverseString => "intro",
        TaskFamily::SortDigits => "interview",
        TaskFamily::BalancedParens => "competition",
    }
}
