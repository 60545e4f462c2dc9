use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{AccountState, Accounts, Quota};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyWeights {
    pub age: f64,
    pub fair_share: f64,
    pub qos: f64,
}

impl Default for PolicyWeights {
    fn default() -> Self {
        PolicyWeights { age: 1000.0, fair_share: 2000.0, qos: 4000.0 }
    }
}

impl PolicyWeights {
    pub fn scaled(&self, c: f64) -> Self {
        PolicyWeights { age: self.age * c, fair_share: self.fair_share * c, qos: self.qos * c }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AccountPolicy {
    pub share_weight: f64,
    pub max_running_gpus: u32,
    pub max_queued_jobs: u32,
}

impl Default for AccountPolicy {
    fn default() -> Self {
        AccountPolicy { share_weight: 1.0, max_running_gpus: u32::MAX, max_queued_jobs: 1000 }
    }
}

/// Contents of `policy.json`. Every field is optional.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Policy {
    pub weights: PolicyWeights,
    pub age_max_s: u64,
    pub half_life_s: f64,
    pub quantum_s: u64,
    pub preemption_enabled: bool,
    pub backfill_enabled: bool,
    pub gang_enabled: bool,
    pub grace_s: u64,
    /// Jobs running past `walltime × grace_factor` are killed.
    pub walltime_grace_factor: f64,
    pub default_account: AccountPolicy,
    pub users: BTreeMap<String, AccountPolicy>,
}

impl Default for Policy {
    fn default() -> Self {
        Policy {
            weights: PolicyWeights::default(),
            age_max_s: 7 * 86_400,
            half_life_s: 86_400.0,
            quantum_s: 30,
            preemption_enabled: true,
            backfill_enabled: true,
            gang_enabled: true,
            grace_s: 10,
            walltime_grace_factor: 1.25,
            default_account: AccountPolicy::default(),
            users: BTreeMap::new(),
        }
    }
}

impl Policy {
    pub fn from_json(text: &str) -> serde_json::Result<Policy> {
        serde_json::from_str(text)
    }

    pub fn account_policy(&self, user: &str) -> AccountPolicy {
        self.users.get(user).copied().unwrap_or(self.default_account)
    }

    /// Account state for `user` with zero usage.
    pub fn account(&self, user: &str) -> AccountState {
        let p = self.account_policy(user);
        AccountState {
            user: user.to_string(),
            share_weight: p.share_weight,
            decayed_usage: 0.0,
            quota: Quota { max_running_gpus: p.max_running_gpus, max_queued_jobs: p.max_queued_jobs },
        }
    }

    /// Accounts for the given users plus every user named in the policy,
    /// with usage filled from `usage`.
    pub fn accounts<'a>(&self, users: impl IntoIterator<Item = &'a str>, usage: &BTreeMap<String, f64>) -> Accounts {
        let mut out = Accounts::new();
        let names = users.into_iter().map(str::to_string).chain(self.users.keys().cloned()).chain(usage.keys().cloned());
        for name in names {
            out.entry(name.clone()).or_insert_with(|| {
                let mut a = self.account(&name);
                a.decayed_usage = usage.get(&name).copied().unwrap_or(0.0);
                a
            });
        }
        out
    }
}
