use super::{AccountState, Accounts};
use crate::schema::ResourceReq;

/// Weight of a CPU-second relative to a GPU-second in the usage metric.
pub const CPU_SECOND_WEIGHT: f64 = 0.1;

/// Resource-seconds charged for holding `total` (summed over nodes) for
/// `seconds`: gpu-seconds + 0.1 · cpu-seconds.
pub fn usage_cost(total: &ResourceReq, seconds: f64) -> f64 {
    (f64::from(total.gpus) + CPU_SECOND_WEIGHT * f64::from(total.cpus)) * seconds
}

/// `U ← U · 0.5^(Δt / half_life)` for every account.
pub fn decay_usage(accounts: &mut Accounts, delta_t_s: f64, half_life_s: f64) {
    assert!(delta_t_s >= 0.0 && half_life_s > 0.0);
    let factor = 0.5f64.powf(delta_t_s / half_life_s);
    for acct in accounts.values_mut() {
        acct.decayed_usage *= factor;
    }
}

/// `2^(−u/s)` with `u` the user's fraction of total decayed usage and `s` its
/// fraction of total share weight. 1 when nobody has usage.
pub fn fair_share_factor(user: &AccountState, all: &Accounts) -> f64 {
    let total_usage: f64 = all.values().map(|a| a.decayed_usage).sum();
    if total_usage <= 0.0 {
        return 1.0;
    }
    let total_weight: f64 = all.values().map(|a| a.share_weight).sum();
    assert!(total_weight > 0.0, "share weights must sum to a positive value");
    let usage_fraction = user.decayed_usage / total_usage;
    let share_fraction = user.share_weight / total_weight;
    (-usage_fraction / share_fraction).exp2()
}
