use std::cmp::Ordering;

use super::{fair_share_factor, AccountState, Accounts, Policy, PolicyWeights, QueueEntry, Time};
use crate::schema::Qos;

pub fn qos_norm(qos: Qos) -> f64 {
    match qos {
        Qos::High => 1.0,
        Qos::Normal => 0.5,
        Qos::Preemptible => 0.0,
    }
}

/// Multifactor priority:
/// `W_age · min(age / age_max, 1) + W_fs · fair_share + W_qos · qos_norm`.
pub fn compute_priority(
    submit_time_s: Time,
    qos: Qos,
    account: &AccountState,
    all: &Accounts,
    now: Time,
    weights: &PolicyWeights,
    age_max_s: u64,
) -> f64 {
    let age = now.saturating_sub(submit_time_s) as f64;
    let age_factor = (age / age_max_s.max(1) as f64).min(1.0);
    weights.age * age_factor + weights.fair_share * fair_share_factor(account, all) + weights.qos * qos_norm(qos)
}

/// Sort the queue by descending priority, ties broken by submit time and
/// then job id. Returns the entries with their scores.
pub fn order_queue<'a>(
    queue: &'a [QueueEntry],
    accounts: &Accounts,
    now: Time,
    policy: &Policy,
) -> Vec<(&'a QueueEntry, f64)> {
    let mut scored: Vec<(&QueueEntry, f64)> = queue
        .iter()
        .map(|e| {
            let fallback;
            let account = match accounts.get(&e.user) {
                Some(a) => a,
                None => {
                    fallback = policy.account(&e.user);
                    &fallback
                }
            };
            let p = compute_priority(e.submit_time_s, e.qos, account, accounts, now, &policy.weights, policy.age_max_s);
            (e, p)
        })
        .collect();
    scored.sort_by(|a, b| {
        b.1.total_cmp(&a.1)
            .then_with(|| a.0.submit_time_s.cmp(&b.0.submit_time_s))
            .then_with(|| a.0.job_id.cmp(&b.0.job_id))
    });
    scored
}

pub(crate) fn by_priority_then_start(a: &(f64, Time, crate::ids::JobId), b: &(f64, Time, crate::ids::JobId)) -> Ordering {
    // Lowest priority first; among equals the most recently started first.
    a.0.total_cmp(&b.0).then_with(|| b.1.cmp(&a.1)).then_with(|| b.2.cmp(&a.2))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_account() -> Accounts {
        let mut a = Accounts::new();
        a.insert("u".into(), AccountState::new("u", 1.0));
        a
    }

    #[test]
    fn new_high_job_with_default_weights() {
        let all = one_account();
        let p = compute_priority(100, Qos::High, &all["u"], &all, 100, &PolicyWeights::default(), 7 * 86_400);
        assert_eq!(p, 6000.0);
    }

    #[test]
    fn qos_difference_is_half_weight() {
        let all = one_account();
        let w = PolicyWeights::default();
        let high = compute_priority(0, Qos::High, &all["u"], &all, 500, &w, 7 * 86_400);
        let normal = compute_priority(0, Qos::Normal, &all["u"], &all, 500, &w, 7 * 86_400);
        assert_eq!(high - normal, w.qos * 0.5);
    }

    #[test]
    fn age_saturates() {
        let all = one_account();
        let w = PolicyWeights { age: 1000.0, fair_share: 0.0, qos: 0.0 };
        assert_eq!(compute_priority(0, Qos::Normal, &all["u"], &all, 10, &w, 10), 1000.0);
        assert_eq!(compute_priority(0, Qos::Normal, &all["u"], &all, 1000, &w, 10), 1000.0);
        assert_eq!(compute_priority(0, Qos::Normal, &all["u"], &all, 5, &w, 10), 500.0);
    }
}
