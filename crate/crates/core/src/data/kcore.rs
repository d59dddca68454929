use std::collections::HashSet;

use super::InteractionLog;

/// Repeatedly drops users and items with fewer than `k` interactions until
/// every survivor has at least `k`. May return an empty log.
pub fn kcore_filter(log: &InteractionLog, k: usize) -> InteractionLog {
    let mut out = log.clone();
    loop {
        let weak_users: HashSet<String> =
            out.users().filter(|(_, evs)| evs.len() < k).map(|(u, _)| u.to_string()).collect();
        let weak_items: HashSet<String> =
            out.item_degrees().into_iter().filter(|&(_, d)| d < k).map(|(i, _)| i.to_string()).collect();
        if weak_users.is_empty() && weak_items.is_empty() {
            return out;
        }
        out.retain(|u, i| !weak_users.contains(u) && !weak_items.contains(i));
    }
}
