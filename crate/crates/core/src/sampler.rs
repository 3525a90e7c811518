//! Group and batch assembly under the mixed-correctness constraint.
//!
//! Every training group holds `n` distinct solutions to one problem with at
//! least one Accepted (reward +1.0) and at least one non-Accepted member —
//! all-correct or all-wrong groups carry no contrast and (under the
//! normalized estimators) zero or degenerate advantage signal.
//!
//! Construction is counting-based rather than rejection-based: per problem,
//! `g = min(|accepted|, |failed|, ⌊total/n⌋)` groups are formed by reserving
//! one accepted and one failed member per group and filling the remaining
//! `n − 2` seats from the shuffled leftovers. This makes the per-epoch group
//! count a closed-form function of the pool sizes (50 accepted + 50 failed
//! at n = 4 always yields 25 groups) and terminates without retry loops.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Solution};
use crate::error::{Error, Result};
use crate::reward::RewardVector;
use crate::seeding::derive_seed;

/// `n` solutions to one problem, mixed-correctness guaranteed.
#[derive(Debug, Clone)]
pub struct Group {
    pub problem_id: String,
    /// Positions of the members within the problem's solution list.
    pub member_indices: Vec<usize>,
    pub members: Vec<Solution>,
    pub rewards: RewardVector,
}

impl Group {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Check every Group invariant; used by tests and the trainer's entry
    /// validation.
    pub fn validate(&self, group_size: usize) -> Result<()> {
        if self.members.len() != group_size {
            return Err(Error::Validation(format!(
                "group for {:?} has {} members, expected {group_size}",
                self.problem_id,
                self.members.len()
            )));
        }
        if self.member_indices.len() != self.members.len()
            || self.rewards.len() != self.members.len()
        {
            return Err(Error::Validation(format!(
                "group for {:?} has inconsistent member/index/reward lengths",
                self.problem_id
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for &idx in &self.member_indices {
            if !seen.insert(idx) {
                return Err(Error::Validation(format!(
                    "group for {:?} repeats solution index {idx}",
                    self.problem_id
                )));
            }
        }
        if self.members.iter().any(|m| m.problem_id != self.problem_id) {
            return Err(Error::Validation(format!(
                "group for {:?} mixes problems",
                self.problem_id
            )));
        }
        let values = self.rewards.values();
        if !values.iter().any(|&r| r == 1.0) {
            return Err(Error::Validation(format!(
                "group for {:?} has no Accepted member",
                self.problem_id
            )));
        }
        if !values.iter().any(|&r| r < 1.0) {
            return Err(Error::Validation(format!(
                "group for {:?} has no failed member",
                self.problem_id
            )));
        }
        Ok(())
    }
}

/// Consecutive groups packed for one optimizer step.
#[derive(Debug, Clone)]
pub struct Batch {
    pub groups: Vec<Group>,
    /// True for a trailing batch that could not be filled to capacity.
    pub partial: bool,
}

impl Batch {
    pub fn solutions(&self) -> usize {
        self.groups.iter().map(Group::len).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Solutions per group (n of the advantage estimators).
    pub group_size: usize,
    /// Solutions per optimizer step; must be a multiple of `group_size`.
    pub batch_solutions: usize,
    pub seed: u64,
    /// Reshuffle group order across problems each epoch.
    pub epoch_shuffle: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { group_size: 4, batch_solutions: 8, seed: 0, epoch_shuffle: true }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::Config("group_size must be at least 2".into()));
        }
        if self.batch_solutions == 0 || self.batch_solutions % self.group_size != 0 {
            return Err(Error::Config(format!(
                "batch_solutions ({}) must be a positive multiple of group_size ({})",
                self.batch_solutions, self.group_size
            )));
        }
        Ok(())
    }

    pub fn groups_per_batch(&self) -> usize {
        self.batch_solutions / self.group_size
    }
}

/// Bookkeeping for one epoch of group construction; the conservation
/// identity `groups·n + skipped + ineligible = total solutions` is exact.
#[derive(Debug, Clone, Default, Serialize)]
pub struct EpochStats {
    pub eligible_problems: usize,
    pub groups: usize,
    pub used_solutions: usize,
    /// Solutions of eligible problems left over after packing.
    pub skipped_solutions: usize,
    /// Solutions belonging to problems that cannot form any valid group.
    pub ineligible_solutions: usize,
    pub warning: Option<String>,
}

fn require_labeled(corpus: &Corpus) -> Result<()> {
    for (_, pid, idx, sol) in corpus.indexed_solutions() {
        if sol.verdict.is_none() || sol.reward.is_none() {
            return Err(Error::Validation(format!(
                "corpus is not fully labeled: solution {idx} of problem {pid:?} has no verdict"
            )));
        }
    }
    Ok(())
}

/// Problems able to form at least one valid group of size `n`: at least one
/// Accepted solution, at least one non-Accepted, and at least `n` total.
pub fn eligible_problems(corpus: &Corpus, group_size: usize) -> Result<Vec<String>> {
    if group_size < 2 {
        return Err(Error::Argument("group_size must be at least 2".into()));
    }
    require_labeled(corpus)?;
    let mut out = Vec::new();
    for (pid, sols) in corpus.solutions() {
        let accepted = sols.iter().filter(|s| s.is_accepted()).count();
        let failed = sols.len() - accepted;
        if accepted >= 1 && failed >= 1 && sols.len() >= group_size {
            out.push(pid.clone());
        }
    }
    Ok(out)
}

/// Build one epoch's groups. Deterministic for fixed
/// `(corpus, config.seed, epoch)`; each solution is used at most once per
/// epoch.
pub fn build_groups(corpus: &Corpus, config: &SamplerConfig, epoch: u64) -> Result<(Vec<Group>, EpochStats)> {
    config.validate()?;
    require_labeled(corpus)?;
    let n = config.group_size;
    let eligible = eligible_problems(corpus, n)?;
    let eligible_set: std::collections::HashSet<&str> =
        eligible.iter().map(String::as_str).collect();

    let mut stats = EpochStats { eligible_problems: eligible.len(), ..EpochStats::default() };
    let mut groups: Vec<Group> = Vec::new();

    for (pid, sols) in corpus.solutions() {
        if !eligible_set.contains(pid.as_str()) {
            stats.ineligible_solutions += sols.len();
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            config.seed,
            &[b"sampler-groups", &epoch.to_le_bytes(), pid.as_bytes()],
        ));
        let mut accepted: Vec<usize> = Vec::new();
        let mut failed: Vec<usize> = Vec::new();
        for (i, s) in sols.iter().enumerate() {
            if s.is_accepted() {
                accepted.push(i);
            } else {
                failed.push(i);
            }
        }
        accepted.shuffle(&mut rng);
        failed.shuffle(&mut rng);
        let g = accepted.len().min(failed.len()).min(sols.len() / n);
        debug_assert!(g >= 1, "eligibility guarantees at least one group");

        let mut remainder: Vec<usize> = Vec::new();
        remainder.extend_from_slice(&accepted[g..]);
        remainder.extend_from_slice(&failed[g..]);
        remainder.shuffle(&mut rng);

        for k in 0..g {
            let mut indices = vec![accepted[k], failed[k]];
            indices.extend_from_slice(&remainder[k * (n - 2)..(k + 1) * (n - 2)]);
            // Hide the reserved-first layout from downstream consumers.
            indices.shuffle(&mut rng);
            let members: Vec<Solution> = indices.iter().map(|&i| sols[i].clone()).collect();
            let rewards = RewardVector::new(
                members.iter().map(|m| m.reward.expect("labeled")).collect(),
            );
            let group = Group { problem_id: pid.clone(), member_indices: indices, members, rewards };
            debug_assert!(group.validate(n).is_ok());
            groups.push(group);
        }
        stats.groups += g;
        stats.used_solutions += g * n;
        stats.skipped_solutions += sols.len() - g * n;
    }

    if config.epoch_shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            config.seed,
            &[b"sampler-epoch-order", &epoch.to_le_bytes()],
        ));
        groups.shuffle(&mut rng);
    }
    if groups.is_empty() {
        stats.warning = Some("no eligible problems; epoch is empty".to_string());
    }
    Ok((groups, stats))
}

/// Pack consecutive groups into batches of `batch_solutions / group_size`
/// groups; a trailing underfull batch is emitted flagged `partial`.
pub fn build_batches(groups: Vec<Group>, config: &SamplerConfig) -> Result<Vec<Batch>> {
    config.validate()?;
    if let Some(first) = groups.first() {
        if let Some(bad) = groups.iter().find(|g| g.len() != first.len()) {
            return Err(Error::Validation(format!(
                "mixed group sizes: {} vs {}",
                first.len(),
                bad.len()
            )));
        }
    }
    let per_batch = config.groups_per_batch();
    let mut batches = Vec::new();
    let mut iter = groups.into_iter().peekable();
    while iter.peek().is_some() {
        let chunk: Vec<Group> = iter.by_ref().take(per_batch).collect();
        let partial = chunk.len() < per_batch;
        batches.push(Batch { groups: chunk, partial });
    }
    Ok(batches)
}

/// Audit/replay record for one group.
#[derive(Debug, Serialize)]
struct ManifestEntry<'a> {
    problem_id: &'a str,
    member_indices: &'a [usize],
    rewards: &'a [f64],
}

/// Owned counterpart for reading a manifest back.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct ManifestRecord {
    pub problem_id: String,
    pub member_indices: Vec<usize>,
    pub rewards: Vec<f64>,
}

/// Parse a group manifest written by [`write_group_manifest`].
pub fn read_group_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Write the epoch's groups as JSONL of
/// `{"problem_id":str,"member_indices":[int],"rewards":[float]}`.
pub fn write_group_manifest(groups: &[Group], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io_at(path, e))?;
    let mut w = BufWriter::new(file);
    for group in groups {
        let entry = ManifestEntry {
            problem_id: &group.problem_id,
            member_indices: &group.member_indices,
            rewards: group.rewards.values(),
        };
        serde_json::to_writer(&mut w, &entry)?;
        w.write_all(b"\n").map_err(|e| Error::io_at(path, e))?;
    }
    w.flush().map_err(|e| Error::io_at(path, e))?;
    Ok(())
}

#[cfg(test)]
fn manifest_string(groups: &[Group]) -> String {
    groups
        .iter()
        .map(|g| {
            serde_json::to_string(&ManifestEntry {
                problem_id: &g.problem_id,
                member_indices: &g.member_indices,
                rewards: g.rewards.values(),
            })
            .unwrap()
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Check the epoch-level invariants over an emitted group set; shared by
/// unit tests, property tests, and the acceptance suite.
pub fn check_epoch_invariants(
    corpus: &Corpus,
    groups: &[Group],
    stats: &EpochStats,
    group_size: usize,
) -> Result<()> {
    let mut used: std::collections::HashMap<&str, std::collections::HashSet<usize>> =
        std::collections::HashMap::new();
    for group in groups {
        group.validate(group_size)?;
        let per_problem = used.entry(group.problem_id.as_str()).or_default();
        for &idx in &group.member_indices {
            if !per_problem.insert(idx) {
                return Err(Error::Validation(format!(
                    "solution {idx} of {:?} appears in two groups within one epoch",
                    group.problem_id
                )));
            }
        }
    }
    let total = corpus.total_solutions();
    let accounted =
        groups.len() * group_size + stats.skipped_solutions + stats.ineligible_solutions;
    if accounted != total {
        return Err(Error::Validation(format!(
            "count conservation violated: {} groups × {group_size} + {} skipped + {} ineligible = {accounted} ≠ {total} total",
            groups.len(),
            stats.skipped_solutions,
            stats.ineligible_solutions
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::test_support::labeled_corpus;
    use crate::verifier::Verdict::{self, *};

    fn config(seed: u64) -> SamplerConfig {
        SamplerConfig { seed, ..SamplerConfig::default() }
    }

    #[test]
    fn eligibility_examples() {
        let corpus = labeled_corpus(&[
            ("mixed", &[Accepted, Accepted, WrongAnswer, WrongAnswer][..]),
            ("all_correct", &[Accepted, Accepted, Accepted, Accepted][..]),
            ("too_small", &[Accepted, WrongAnswer][..]),
            ("no_correct", &[WrongAnswer, TimeLimit, RuntimeError, CompileError][..]),
        ]);
        assert_eq!(eligible_problems(&corpus, 4).unwrap(), vec!["mixed".to_string()]);
        // The two-solution problem is eligible at n=2.
        let at_two = eligible_problems(&corpus, 2).unwrap();
        assert!(at_two.contains(&"too_small".to_string()));
    }

    #[test]
    fn unlabeled_corpus_is_rejected() {
        let mut corpus = labeled_corpus(&[("p", &[Accepted, WrongAnswer][..])]);
        corpus.solutions_mut().get_mut("p").unwrap()[1].verdict = None;
        assert!(matches!(eligible_problems(&corpus, 2), Err(Error::Validation(_))));
        assert!(matches!(build_groups(&corpus, &config(0), 0), Err(Error::Validation(_))));
    }

    #[test]
    fn unique_packing_uses_all_four() {
        let corpus = labeled_corpus(&[("p", &[Accepted, Accepted, WrongAnswer, WrongAnswer][..])]);
        let (groups, stats) = build_groups(&corpus, &config(3), 0).unwrap();
        assert_eq!(groups.len(), 1);
        let mut indices = groups[0].member_indices.clone();
        indices.sort_unstable();
        assert_eq!(indices, vec![0, 1, 2, 3]);
        assert_eq!(stats.skipped_solutions, 0);
        check_epoch_invariants(&corpus, &groups, &stats, 4).unwrap();
    }

    #[test]
    fn fifty_fifty_yields_twenty_five_groups() {
        let verdicts: Vec<Verdict> = std::iter::repeat(Accepted)
            .take(50)
            .chain(std::iter::repeat(WrongAnswer).take(50))
            .collect();
        let corpus = labeled_corpus(&[("p", &verdicts)]);
        let (groups, stats) = build_groups(&corpus, &config(11), 0).unwrap();
        assert_eq!(groups.len(), 25);
        assert_eq!(stats.skipped_solutions, 0);
        check_epoch_invariants(&corpus, &groups, &stats, 4).unwrap();
    }

    #[test]
    fn lopsided_pool_skips_leftovers() {
        // 1 accepted + 7 failed, n=4: exactly one group, four skipped.
        let corpus = labeled_corpus(&[(
            "p",
            &[Accepted, WrongAnswer, WrongAnswer, WrongAnswer, WrongAnswer, WrongAnswer, WrongAnswer, WrongAnswer][..],
        )]);
        let (groups, stats) = build_groups(&corpus, &config(5), 0).unwrap();
        assert_eq!(groups.len(), 1);
        assert_eq!(stats.skipped_solutions, 4);
        check_epoch_invariants(&corpus, &groups, &stats, 4).unwrap();
    }

    #[test]
    fn same_seed_same_sequence_different_seed_differs() {
        let verdicts: Vec<Verdict> = std::iter::repeat(Accepted)
            .take(20)
            .chain(std::iter::repeat(RuntimeError).take(20))
            .collect();
        let corpus = labeled_corpus(&[("a", &verdicts), ("b", &verdicts)]);
        let (g1, _) = build_groups(&corpus, &config(42), 0).unwrap();
        let (g2, _) = build_groups(&corpus, &config(42), 0).unwrap();
        let (g3, _) = build_groups(&corpus, &config(43), 0).unwrap();
        let (g4, _) = build_groups(&corpus, &config(42), 1).unwrap();
        assert_eq!(manifest_string(&g1), manifest_string(&g2));
        assert_ne!(manifest_string(&g1), manifest_string(&g3));
        assert_ne!(manifest_string(&g1), manifest_string(&g4), "epochs reshuffle");
    }

    #[test]
    fn empty_eligible_set_warns() {
        let corpus = labeled_corpus(&[("p", &[Accepted, Accepted, Accepted, Accepted][..])]);
        let (groups, stats) = build_groups(&corpus, &config(0), 0).unwrap();
        assert!(groups.is_empty());
        assert!(stats.warning.is_some());
        assert_eq!(stats.ineligible_solutions, 4);
        check_epoch_invariants(&corpus, &groups, &stats, 4).unwrap();
    }

    #[test]
    fn batch_packing_examples() {
        let corpus = labeled_corpus(&[(
            "p",
            &[Accepted, Accepted, Accepted, Accepted, WrongAnswer, WrongAnswer, WrongAnswer, WrongAnswer][..],
        )]);
        let cfg = config(1);
        let (groups, _) = build_groups(&corpus, &cfg, 0).unwrap();
        assert_eq!(groups.len(), 2);
        let batches = build_batches(groups.clone(), &cfg).unwrap();
        assert_eq!(batches.len(), 1);
        assert_eq!(batches[0].groups.len(), 2);
        assert!(!batches[0].partial);
        assert_eq!(batches[0].solutions(), 8);

        // 3 groups, capacity 2 → [2, 1], second partial.
        let mut three = groups.clone();
        three.push(groups[0].clone());
        let batches = build_batches(three, &cfg).unwrap();
        assert_eq!(batches.len(), 2);
        assert!(!batches[0].partial);
        assert_eq!(batches[1].groups.len(), 1);
        assert!(batches[1].partial);

        assert!(build_batches(Vec::new(), &cfg).unwrap().is_empty());
    }

    #[test]
    fn mixed_group_sizes_rejected() {
        let corpus = labeled_corpus(&[("p", &[Accepted, Accepted, WrongAnswer, WrongAnswer][..])]);
        let (mut groups, _) = build_groups(&corpus, &config(0), 0).unwrap();
        let (two_groups, _) = build_groups(
            &corpus,
            &SamplerConfig { group_size: 2, batch_solutions: 8, seed: 0, epoch_shuffle: false },
            0,
        )
        .unwrap();
        groups.extend(two_groups);
        assert!(matches!(build_batches(groups, &config(0)), Err(Error::Validation(_))));
    }

    #[test]
    fn config_validation() {
        assert!(SamplerConfig { group_size: 1, ..SamplerConfig::default() }.validate().is_err());
        assert!(SamplerConfig { batch_solutions: 6, ..SamplerConfig::default() }
            .validate()
            .is_err());
        assert!(SamplerConfig::default().validate().is_ok());
    }

    #[test]
    fn manifest_round_trip() {
        let corpus = labeled_corpus(&[("p", &[Accepted, WrongAnswer, TimeLimit, CompileError][..])]);
        let (groups, _) = build_groups(&corpus, &config(9), 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        write_group_manifest(&groups, &path).unwrap();
        let records = read_group_manifest(&path).unwrap();
        assert_eq!(records.len(), groups.len());
        for (record, group) in records.iter().zip(&groups) {
            assert_eq!(record.problem_id, group.problem_id);
            assert_eq!(record.member_indices, group.member_indices);
            assert_eq!(record.rewards, group.rewards.values());
        }
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn arb_verdicts() -> impl Strategy<Value = Vec<Verdict>> {
            proptest::collection::vec(
                prop_oneof![
                    Just(Accepted),
                    Just(WrongAnswer),
                    Just(TimeLimit),
                    Just(RuntimeError),
                    Just(CompileError),
                ],
                0..12,
            )
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]
            #[test]
            fn epoch_invariants_hold(
                problem_verdicts in proptest::collection::vec(arb_verdicts(), 1..8),
                seed in 0u64..1000,
                epoch in 0u64..4,
            ) {
                let named: Vec<(String, Vec<Verdict>)> = problem_verdicts
                    .into_iter()
                    .enumerate()
                    .map(|(i, v)| (format!("p{i}"), v))
                    .collect();
                let spec: Vec<(&str, &[Verdict])> =
                    named.iter().map(|(n, v)| (n.as_str(), v.as_slice())).collect();
                let corpus = labeled_corpus(&spec);
                let cfg = SamplerConfig { seed, ..SamplerConfig::default() };
                let (groups, stats) = build_groups(&corpus, &cfg, epoch).unwrap();
                check_epoch_invariants(&corpus, &groups, &stats, cfg.group_size).unwrap();
            }
        }
    }
}
