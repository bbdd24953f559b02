//! Bulletin scoring: gated minimum-weight maximum-cardinality matching,
//! precision/recall, PR curves, location error, and de novo subsets.

use serde::{Deserialize, Serialize};

use crate::geophys::great_circle_km;
use crate::worldmodel::Event;

/// Matching gate: events pair only if within both limits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gating {
    /// Maximum great-circle separation, degrees of arc.
    pub max_deg: f64,
    /// Maximum origin-time separation, seconds.
    pub max_s: f64,
}

impl Default for Gating {
    fn default() -> Self {
        Gating {
            max_deg: 2.0,
            max_s: 50.0,
        }
    }
}

impl Gating {
    pub fn max_km(&self) -> f64 {
        self.max_deg.to_radians() * crate::geophys::EARTH_RADIUS_KM
    }

    pub fn admits(&self, a: &Event, b: &Event) -> bool {
        (a.time - b.time).abs() <= self.max_s && a.surface_distance_km(b) <= self.max_km()
    }
}

/// A one-to-one matching between an inferred and a reference bulletin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matching {
    /// (inferred index, reference index, great-circle distance km).
    pub pairs: Vec<(usize, usize, f64)>,
    pub unmatched_inferred: Vec<usize>,
    pub unmatched_reference: Vec<usize>,
}

impl Matching {
    pub fn cardinality(&self) -> usize {
        self.pairs.len()
    }
}

/// Per-pair bonus that makes cardinality dominate total weight: any real
/// match is cheaper than leaving a pair unmatched.
const UNMATCHED: f64 = 1e9;

/// Minimum-weight maximum-cardinality matching between two bulletins in the
/// gated bipartite graph, edge weight = great-circle distance. Exact: the
/// gate is enforced with a big-M cost and the assignment is solved by the
/// Jonker-Volgenant shortest augmenting path algorithm.
pub fn match_bulletins(inferred: &[Event], reference: &[Event], gating: &Gating) -> Matching {
    let n_i = inferred.len();
    let n_r = reference.len();
    let n = n_i.max(n_r);
    if n == 0 {
        return Matching {
            pairs: Vec::new(),
            unmatched_inferred: Vec::new(),
            unmatched_reference: Vec::new(),
        };
    }
    // square cost matrix: real pairs cost their distance, gated-out and
    // padding pairs cost UNMATCHED (allowed but maximally discouraged)
    let mut cost = vec![UNMATCHED; n * n];
    for (i, ev_i) in inferred.iter().enumerate() {
        for (r, ev_r) in reference.iter().enumerate() {
            if gating.admits(ev_i, ev_r) {
                cost[i * n + r] = ev_i.surface_distance_km(ev_r);
            }
        }
    }
    let assignment = solve_assignment(&cost, n);
    let mut pairs = Vec::new();
    let mut unmatched_inferred = Vec::new();
    let mut matched_ref = vec![false; n_r];
    for (i, &r) in assignment.iter().enumerate().take(n_i) {
        if r < n_r && cost[i * n + r] < UNMATCHED {
            pairs.push((i, r, cost[i * n + r]));
            matched_ref[r] = true;
        } else {
            unmatched_inferred.push(i);
        }
    }
    let unmatched_reference = (0..n_r).filter(|&r| !matched_ref[r]).collect();
    Matching {
        pairs,
        unmatched_inferred,
        unmatched_reference,
    }
}

/// Jonker-Volgenant shortest augmenting path assignment on a dense square
/// cost matrix; returns, per row, the assigned column.
fn solve_assignment(cost: &[f64], n: usize) -> Vec<usize> {
    // potentials
    let mut u = vec![0.0_f64; n + 1];
    let mut v = vec![0.0_f64; n + 1];
    // way[j] = predecessor column on the augmenting path
    let mut assigned_row = vec![n; n + 1]; // per column, the assigned row

    for row in 0..n {
        // start an augmenting search from `row` using the virtual column n
        let mut j0 = n;
        assigned_row[n] = row;
        let mut min_v = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        let mut way = vec![n; n + 1];
        loop {
            used[j0] = true;
            let i0 = assigned_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = n;
            for j in 0..n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 * n + j] - u[i0] - v[j];
                if cur < min_v[j] {
                    min_v[j] = cur;
                    way[j] = j0;
                }
                if min_v[j] < delta {
                    delta = min_v[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[assigned_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_v[j] -= delta;
                }
            }
            j0 = j1;
            if assigned_row[j0] == n {
                break;
            }
        }
        // augment along the path
        loop {
            let j1 = way[j0];
            assigned_row[j0] = assigned_row[j1];
            j0 = j1;
            if j0 == n {
                break;
            }
        }
    }
    let mut row_to_col = vec![n; n];
    for j in 0..n {
        if assigned_row[j] < n {
            row_to_col[assigned_row[j]] = j;
        }
    }
    row_to_col
}

/// Precision and recall of a matching. Empty-set convention: a ratio with a
/// zero denominator is 1.0.
pub fn precision_recall(matching: &Matching, n_inferred: usize, n_reference: usize) -> (f64, f64) {
    let m = matching.cardinality() as f64;
    let precision = if n_inferred == 0 {
        1.0
    } else {
        m / n_inferred as f64
    };
    let recall = if n_reference == 0 {
        1.0
    } else {
        m / n_reference as f64
    };
    (precision, recall)
}

/// One point of a precision-recall curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub n_kept: usize,
}

/// Precision-recall curve parameterized by the confidence threshold: one
/// point per distinct confidence, matching recomputed on each thresholded
/// subset.
pub fn pr_curve(
    scored: &[(Event, f64)],
    reference: &[Event],
    gating: &Gating,
) -> Vec<PrPoint> {
    let mut thresholds: Vec<f64> = scored.iter().map(|(_, c)| *c).collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    if thresholds.is_empty() {
        thresholds.push(1.0);
    }
    let mut out = Vec::new();
    for &t in &thresholds {
        let kept: Vec<Event> = scored
            .iter()
            .filter(|(_, c)| *c >= t)
            .map(|(e, _)| *e)
            .collect();
        let m = match_bulletins(&kept, reference, gating);
        let (p, r) = precision_recall(&m, kept.len(), reference.len());
        out.push(PrPoint {
            threshold: t,
            precision: p,
            recall: r,
            n_kept: kept.len(),
        });
    }
    out
}

/// Mean great-circle distance of matched pairs; `None` when nothing matched.
pub fn mean_location_error(matching: &Matching) -> Option<f64> {
    if matching.pairs.is_empty() {
        return None;
    }
    Some(matching.pairs.iter().map(|p| p.2).sum::<f64>() / matching.pairs.len() as f64)
}

/// Reference events farther than `radius_km` from every training event.
pub fn de_novo_subset(reference: &[Event], training: &[Event], radius_km: f64) -> Vec<Event> {
    reference
        .iter()
        .filter(|r| {
            training
                .iter()
                .all(|t| great_circle_km(r.lon, r.lat, t.lon, t.lat) > radius_km)
        })
        .copied()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(lon: f64, lat: f64, time: f64) -> Event {
        Event {
            lon,
            lat,
            depth: 0.0,
            time,
            mb: 4.0,
        }
    }

    /// Exhaustive maximum-cardinality minimum-weight matching for small
    /// bulletins; the oracle for the assignment solver.
    pub(super) fn brute_force_match(
        inferred: &[Event],
        reference: &[Event],
        gating: &Gating,
    ) -> (usize, f64) {
        fn recurse(
            i: usize,
            inferred: &[Event],
            reference: &[Event],
            used: &mut Vec<bool>,
            gating: &Gating,
        ) -> (usize, f64) {
            if i == inferred.len() {
                return (0, 0.0);
            }
            // skip inferred[i]
            let mut best = recurse(i + 1, inferred, reference, used, gating);
            for r in 0..reference.len() {
                if used[r] || !gating.admits(&inferred[i], &reference[r]) {
                    continue;
                }
                used[r] = true;
                let (c, w) = recurse(i + 1, inferred, reference, used, gating);
                used[r] = false;
                let d = inferred[i].surface_distance_km(&reference[r]);
                let cand = (c + 1, w + d);
                if cand.0 > best.0 || (cand.0 == best.0 && cand.1 < best.1) {
                    best = cand;
                }
            }
            best
        }
        let mut used = vec![false; reference.len()];
        recurse(0, inferred, reference, &mut used, gating)
    }

    #[test]
    fn empty_inferred_zero_recall() {
        let reference = vec![ev(0.0, 0.0, 0.0)];
        let m = match_bulletins(&[], &reference, &Gating::default());
        assert_eq!(m.cardinality(), 0);
        let (p, r) = precision_recall(&m, 0, 1);
        assert_eq!(p, 1.0);
        assert_eq!(r, 0.0);
    }

    #[test]
    fn cardinality_beats_weight() {
        // A is near ref1 (0.5 deg) and ref2 (1.0 deg); B is near ref1 only.
        // Max cardinality forces A-ref2, B-ref1.
        let inferred = vec![ev(0.5, 0.0, 0.0), ev(-1.5, 0.0, 0.0)];
        let reference = vec![ev(0.0, 0.0, 0.0), ev(1.5, 0.0, 0.0)];
        let m = match_bulletins(&inferred, &reference, &Gating::default());
        assert_eq!(m.cardinality(), 2);
        let mut pairs: Vec<(usize, usize)> = m.pairs.iter().map(|&(i, r, _)| (i, r)).collect();
        pairs.sort_unstable();
        assert_eq!(pairs, vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn gate_excludes_distant_pairs() {
        let inferred = vec![ev(2.1, 0.0, 0.0)];
        let reference = vec![ev(0.0, 0.0, 0.0)];
        let m = match_bulletins(&inferred, &reference, &Gating::default());
        assert_eq!(m.cardinality(), 0);
        assert_eq!(m.unmatched_inferred, vec![0]);
        assert_eq!(m.unmatched_reference, vec![0]);
        // time gate too
        let m2 = match_bulletins(
            &[ev(0.0, 0.0, 100.0)],
            &[ev(0.0, 0.0, 0.0)],
            &Gating::default(),
        );
        assert_eq!(m2.cardinality(), 0);
    }

    #[test]
    fn matches_brute_force_on_random_bulletins() {
        use rand::{RngExt, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(33);
        let gating = Gating::default();
        for trial in 0..100 {
            let n_i = rng.random_range(0..=6);
            let n_r = rng.random_range(0..=6);
            let mut mk = |n: usize| -> Vec<Event> {
                (0..n)
                    .map(|_| {
                        ev(
                            rng.random_range(-3.0..3.0),
                            rng.random_range(-3.0..3.0),
                            rng.random_range(-60.0..60.0),
                        )
                    })
                    .collect()
            };
            let inferred = mk(n_i);
            let reference = mk(n_r);
            let m = match_bulletins(&inferred, &reference, &gating);
            let (bc, bw) = brute_force_match(&inferred, &reference, &gating);
            assert_eq!(m.cardinality(), bc, "trial {trial}: cardinality");
            let w: f64 = m.pairs.iter().map(|p| p.2).sum();
            assert!(
                (w - bw).abs() < 1e-6,
                "trial {trial}: weight {w} vs brute {bw}"
            );
            // symmetry of cardinality
            let m_swapped = match_bulletins(&reference, &inferred, &gating);
            assert_eq!(m.cardinality(), m_swapped.cardinality());
        }
    }

    #[test]
    fn precision_recall_counting() {
        let m = Matching {
            pairs: vec![(0, 0, 1.0), (1, 2, 2.0)],
            unmatched_inferred: vec![2, 3],
            unmatched_reference: vec![1, 3, 4, 5, 6, 7],
        };
        let (p, r) = precision_recall(&m, 4, 8);
        assert_eq!(p, 0.5);
        assert_eq!(r, 0.25);
        let empty = Matching {
            pairs: vec![],
            unmatched_inferred: vec![0, 1, 2],
            unmatched_reference: vec![],
        };
        assert_eq!(precision_recall(&empty, 3, 0), (0.0, 1.0));
    }

    #[test]
    fn perfect_bulletin() {
        let reference = vec![ev(10.0, 10.0, 0.0), ev(20.0, 20.0, 100.0)];
        let m = match_bulletins(&reference, &reference, &Gating::default());
        assert_eq!(
            precision_recall(&m, reference.len(), reference.len()),
            (1.0, 1.0)
        );
        assert_eq!(mean_location_error(&m), Some(0.0));
    }

    #[test]
    fn location_error_mean() {
        let m = Matching {
            pairs: vec![(0, 0, 10.0), (1, 1, 30.0)],
            unmatched_inferred: vec![],
            unmatched_reference: vec![],
        };
        assert_eq!(mean_location_error(&m), Some(20.0));
        let empty = Matching {
            pairs: vec![],
            unmatched_inferred: vec![],
            unmatched_reference: vec![],
        };
        assert_eq!(mean_location_error(&empty), None);
    }

    #[test]
    fn pr_curve_thresholds() {
        let reference = vec![ev(0.0, 0.0, 0.0), ev(10.0, 0.0, 500.0)];
        let scored = vec![
            (ev(0.1, 0.0, 1.0), 0.9),
            (ev(10.1, 0.0, 501.0), 0.6),
            (ev(50.0, 0.0, 900.0), 0.3),
        ];
        let curve = pr_curve(&scored, &reference, &Gating::default());
        assert_eq!(curve.len(), 3);
        // lowest threshold keeps everything: 2/3 precision, 1.0 recall
        assert!((curve[0].precision - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(curve[0].recall, 1.0);
        // highest threshold keeps only the 0.9 event
        assert_eq!(curve[2].precision, 1.0);
        assert_eq!(curve[2].recall, 0.5);
        // recall non-increasing with threshold
        for w in curve.windows(2) {
            assert!(w[1].recall <= w[0].recall + 1e-12);
        }
    }

    #[test]
    fn pr_curve_degenerate_cases() {
        let reference = vec![ev(0.0, 0.0, 0.0)];
        // all confidences equal: single point
        let scored = vec![(ev(0.1, 0.0, 1.0), 0.5), (ev(30.0, 0.0, 2.0), 0.5)];
        let curve = pr_curve(&scored, &reference, &Gating::default());
        assert_eq!(curve.len(), 1);
        // empty bulletin: empty-set precision convention
        let curve2 = pr_curve(&[], &reference, &Gating::default());
        assert_eq!(curve2.len(), 1);
        assert_eq!(curve2[0].precision, 1.0);
        assert_eq!(curve2[0].recall, 0.0);
    }

    #[test]
    fn pr_curve_matches_brute_force_thresholding() {
        use rand::{RngExt, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let gating = Gating::default();
        let reference: Vec<Event> = (0..10)
            .map(|_| {
                ev(
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-5.0..5.0),
                    rng.random_range(0.0..1000.0),
                )
            })
            .collect();
        let scored: Vec<(Event, f64)> = (0..10)
            .map(|_| {
                (
                    ev(
                        rng.random_range(-5.0..5.0),
                        rng.random_range(-5.0..5.0),
                        rng.random_range(0.0..1000.0),
                    ),
                    (rng.random_range(0..5) as f64) / 4.0,
                )
            })
            .collect();
        let curve = pr_curve(&scored, &reference, &gating);
        for pt in &curve {
            let kept: Vec<Event> = scored
                .iter()
                .filter(|(_, c)| *c >= pt.threshold)
                .map(|(e, _)| *e)
                .collect();
            let (bc, _) = brute_force_match(&kept, &reference, &gating);
            let expect_p = if kept.is_empty() {
                1.0
            } else {
                bc as f64 / kept.len() as f64
            };
            let expect_r = bc as f64 / reference.len() as f64;
            assert!((pt.precision - expect_p).abs() < 1e-12);
            assert!((pt.recall - expect_r).abs() < 1e-12);
        }
    }

    #[test]
    fn de_novo_radius() {
        let training = vec![ev(0.0, 0.0, 0.0)];
        // ~60 km away: included; ~10 km: excluded
        let near = ev(0.09, 0.0, 0.0);
        let far = ev(0.54, 0.0, 0.0);
        let subset = de_novo_subset(&[near, far], &training, 50.0);
        assert_eq!(subset.len(), 1);
        assert_eq!(subset[0].lon, far.lon);
        // empty training set includes everything
        let all = de_novo_subset(&[near, far], &[], 50.0);
        assert_eq!(all.len(), 2);
    }
}
