use serde::{Deserialize, Serialize};

use super::{AccountState, QueueEntry};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "verdict", content = "reason")]
pub enum QuotaVerdict {
    Admit,
    Deny(String),
}

impl QuotaVerdict {
    pub fn is_admit(&self) -> bool {
        matches!(self, QuotaVerdict::Admit)
    }
}

/// Start-time check: the user's running GPUs plus this job's must stay
/// within `max_running_gpus` (inclusive).
pub fn check_quota(entry: &QueueEntry, account: &AccountState, running_gpus: u64) -> QuotaVerdict {
    let limit = u64::from(account.quota.max_running_gpus);
    let after = running_gpus + entry.gpus();
    if after > limit {
        QuotaVerdict::Deny(format!(
            "QUOTA_EXCEEDED: user {} would run {after} GPUs, limit {limit}",
            account.user
        ))
    } else {
        QuotaVerdict::Admit
    }
}

/// Submit-time check against `max_queued_jobs`.
pub fn check_enqueue_quota(account: &AccountState, queued_jobs: u64) -> QuotaVerdict {
    let limit = u64::from(account.quota.max_queued_jobs);
    if queued_jobs >= limit {
        QuotaVerdict::Deny(format!(
            "QUOTA_EXCEEDED: user {} already has {queued_jobs} queued jobs, limit {limit}",
            account.user
        ))
    } else {
        QuotaVerdict::Admit
    }
}
