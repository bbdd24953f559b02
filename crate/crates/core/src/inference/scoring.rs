//! Posterior-sample scoring and multi-chain merging.

use serde::{Deserialize, Serialize};

use crate::evaluation::Gating;
use crate::worldmodel::Event;

/// An inferred event with its posterior inclusion confidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredEvent {
    pub event: Event,
    pub confidence: f64,
}

/// Cluster sampled events across a trace and score each cluster by the
/// fraction of samples containing a member. The reported event is the
/// cluster medoid. Greedy: repeatedly grow a cluster around the event with
/// the most support, then remove its members.
pub fn score_events(samples: &[Vec<Event>], gating: &Gating) -> Vec<ScoredEvent> {
    let n_samples = samples.len();
    if n_samples == 0 {
        return Vec::new();
    }
    // flatten with sample indices
    let mut pool: Vec<(usize, Event)> = Vec::new();
    for (s, events) in samples.iter().enumerate() {
        for e in events {
            pool.push((s, *e));
        }
    }
    let mut out = Vec::new();
    let mut used = vec![false; pool.len()];
    loop {
        // supporter count per candidate: at most one per sample
        let mut best: Option<(usize, usize)> = None; // (count, index)
        for (i, (_, e)) in pool.iter().enumerate() {
            if used[i] {
                continue;
            }
            let mut seen = vec![false; n_samples];
            let mut count = 0;
            for (j, (s, f)) in pool.iter().enumerate() {
                if used[j] || seen[*s] || !gating.admits(e, f) {
                    continue;
                }
                seen[*s] = true;
                count += 1;
            }
            let better = match best {
                None => true,
                Some((bc, bi)) => {
                    count > bc || (count == bc && tie_break(&pool[i].1, &pool[bi].1))
                }
            };
            if better {
                best = Some((count, i));
            }
        }
        let (count, center_idx) = match best {
            Some(b) if b.0 > 0 => b,
            _ => break,
        };
        // collect members: nearest per sample
        let center = pool[center_idx].1;
        let mut member_of_sample: Vec<Option<(usize, f64)>> = vec![None; n_samples];
        for (j, (s, f)) in pool.iter().enumerate() {
            if used[j] || !gating.admits(&center, f) {
                continue;
            }
            let d = center.surface_distance_km(f);
            if member_of_sample[*s].map(|(_, bd)| d < bd).unwrap_or(true) {
                member_of_sample[*s] = Some((j, d));
            }
        }
        let members: Vec<usize> = member_of_sample.iter().flatten().map(|(j, _)| *j).collect();
        for &j in &members {
            used[j] = true;
        }
        // medoid: member minimizing total distance to the others
        let mut medoid = center;
        let mut best_total = f64::INFINITY;
        for &j in &members {
            let total: f64 = members
                .iter()
                .map(|&k| pool[j].1.surface_distance_km(&pool[k].1))
                .sum();
            if total < best_total {
                best_total = total;
                medoid = pool[j].1;
            }
        }
        out.push(ScoredEvent {
            event: medoid,
            confidence: count as f64 / n_samples as f64,
        });
        let _ = count;
    }
    out.sort_by(|a, b| {
        b.confidence
            .total_cmp(&a.confidence)
            .then(a.event.time.total_cmp(&b.event.time))
    });
    out
}

fn tie_break(a: &Event, b: &Event) -> bool {
    (a.time, a.lon, a.lat)
        .partial_cmp(&(b.time, b.lon, b.lat))
        .map(|o| o == std::cmp::Ordering::Less)
        .unwrap_or(false)
}

/// Greedy multi-chain merge: repeatedly take the globally highest-confidence
/// event, dropping any event within the gate of an already-selected one.
/// Deterministic under the (confidence, time, lon, lat) tie-break.
pub fn merge_chains(bulletins: &[Vec<ScoredEvent>], gating: &Gating) -> Vec<ScoredEvent> {
    let mut all: Vec<ScoredEvent> = bulletins.iter().flatten().copied().collect();
    all.sort_by(|a, b| {
        b.confidence
            .total_cmp(&a.confidence)
            .then(a.event.time.total_cmp(&b.event.time))
            .then(a.event.lon.total_cmp(&b.event.lon))
            .then(a.event.lat.total_cmp(&b.event.lat))
    });
    let mut selected: Vec<ScoredEvent> = Vec::new();
    for cand in all {
        if selected
            .iter()
            .all(|s| !gating.admits(&s.event, &cand.event))
        {
            selected.push(cand);
        }
    }
    selected
}
