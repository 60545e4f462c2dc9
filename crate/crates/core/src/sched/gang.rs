use super::{GangAction, GangGroup, GangOp, Time};

/// Round-robin time slicing for one partition.
///
/// If the active member is not running (it was just joined, or the previous
/// active member left), it is resumed. Otherwise, once a quantum has elapsed
/// since the last switch, the active gang is suspended and the next one
/// resumed. A group of one never rotates.
pub fn gang_rotate(group: &GangGroup, now: Time, quantum_s: Time) -> Vec<GangOp> {
    assert!(quantum_s > 0, "quantum must be positive");
    if group.members.is_empty() {
        return Vec::new();
    }
    let active = &group.members[group.active % group.members.len()];
    if !active.running {
        return vec![GangOp { job_id: active.job_id, action: GangAction::Resume }];
    }
    if group.members.len() < 2 || now.saturating_sub(group.last_switch_s) < quantum_s {
        return Vec::new();
    }
    let next = &group.members[(group.active + 1) % group.members.len()];
    vec![
        GangOp { job_id: active.job_id, action: GangAction::Suspend },
        GangOp { job_id: next.job_id, action: GangAction::Resume },
    ]
}
