//! grouprl: offline policy-gradient post-training for autoregressive sequence
//! models with verifiable code rewards.
//!
//! The engine trains on a fixed, pre-collected corpus of graded solutions:
//! no sampling from the trained policy and no code execution happen inside
//! training steps. The pipeline stages are
//!
//! 1. **corpus** — ingest, validate, filter, and rebalance a JSONL corpus of
//!    problems and candidate solutions,
//! 2. **verifier** — execute solutions against test cases under resource
//!    limits and assign one of five verdicts,
//! 3. **reward / sampler** — map verdicts to scalar rewards, build
//!    mixed-correctness groups, and compute leave-one-out, group-normalized,
//!    or exponential advantages,
//! 4. **policy / trainer** — a small byte-level decoder-only transformer with
//!    exact log-probabilities and analytic gradients, optimized with the
//!    advantage-weighted REINFORCE objective (plus an SFT baseline),
//! 5. **evalkit** — sample, verify, and report pass@k.
//!
//! The `grouprl` binary orchestrates the stages; `synth` generates small
//! verifiable task corpora so the whole mechanism runs in minutes on one CPU.

pub mod corpus;
pub mod counters;
pub mod error;
pub mod evalkit;
pub mod policy;
pub mod reward;
pub mod sampler;
mod seeding;
pub mod synth;
pub mod trainer;
pub mod verifier;

pub mod cli;

pub use corpus::{Corpus, FilterConfig, Problem, Solution, TestCase};
pub use error::{Error, Result};
pub use evalkit::{pass_at_k, EvalConfig, EvalReport};
pub use policy::{ArchConfig, PolicyModel, Tokenizer};
pub use reward::{AdvantageMode, AdvantageVector, RewardProfile, RewardVector};
pub use sampler::{Batch, Group, SamplerConfig};
pub use trainer::{TrainConfig, StepMetrics};
pub use verifier::{ExecLimits, Verdict};
