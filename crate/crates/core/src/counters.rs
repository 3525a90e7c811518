//! Process-wide instrumentation counters.
//!
//! The offline training contract ("no sampling, no verification during
//! training steps") is asserted against these counters rather than trusted:
//! the verifier bumps [`VERIFIER_EXECUTIONS`] on every child process it
//! spawns and the policy bumps [`POLICY_SAMPLES`] on every sampling call.
//! `rl_step` snapshots both before and after each update and fails hard if
//! either moved.

use std::sync::atomic::{AtomicU64, Ordering};

pub static VERIFIER_EXECUTIONS: AtomicU64 = AtomicU64::new(0);
pub static POLICY_SAMPLES: AtomicU64 = AtomicU64::new(0);

/// (verifier executions, policy sampling calls) since process start.
pub fn snapshot() -> (u64, u64) {
    (
        VERIFIER_EXECUTIONS.load(Ordering::SeqCst),
        POLICY_SAMPLES.load(Ordering::SeqCst),
    )
}

/// Serialize counter-sensitive work within one test process.
///
/// The counters are process-global, so a test that asserts "counters did not
/// move during training" (as `train` itself does every step) races against
/// any concurrently running test that executes programs or samples the
/// policy. Test code that does either takes this lock first; production code
/// never calls it because a CLI run is a single logical flow.
pub fn exclusive_session() -> std::sync::MutexGuard<'static, ()> {
    static LOCK: std::sync::Mutex<()> = std::sync::Mutex::new(());
    LOCK.lock().unwrap_or_else(std::sync::PoisonError::into_inner)
}

pub(crate) fn record_execution() {
    VERIFIER_EXECUTIONS.fetch_add(1, Ordering::SeqCst);
}

pub(crate) fn record_policy_sample() {
    POLICY_SAMPLES.fetch_add(1, Ordering::SeqCst);
}
