//! Trajectory accuracy and reliability metrics, plus grouping
//! precision/recall scores.

use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};
use crate::grouping::GroupPartition;
use crate::numerics::Array;

/// Per-window trajectory scores.
#[derive(Clone, Copy, Debug, Default)]
pub struct TrajectoryScores {
    /// Average displacement error, meters.
    pub ade: f64,
    /// Final displacement error, meters.
    pub fde: f64,
    /// Collision rate, percent of pedestrians involved in a collision.
    pub col: f64,
    /// Temporal correlation coefficient in [-1, 1].
    pub tcc: f64,
}

/// Grouping precision/recall under both scores.
#[derive(Clone, Copy, Debug, Default)]
pub struct GroupScores {
    pub pw_precision: f64,
    pub pw_recall: f64,
    pub gm_precision: f64,
    pub gm_recall: f64,
}

fn check_tracks(pred: &Array, gt: &Array, op: &'static str) -> Result<(usize, usize)> {
    let (p, g) = (pred.shape(), gt.shape());
    if p != g || p.len() != 3 || p[2] != 2 {
        return Err(Error::Alignment(format!(
            "{op}: prediction shape {p:?} does not match ground truth {g:?}"
        )));
    }
    Ok((p[0], p[1]))
}

/// Mean Euclidean distance over all pedestrians and steps.
pub fn ade(pred: &Array, gt: &Array) -> Result<f64> {
    let (n, t) = check_tracks(pred, gt, "ade")?;
    let mut total = 0.0;
    for i in 0..n {
        for s in 0..t {
            let dx = pred.at3(i, s, 0) - gt.at3(i, s, 0);
            let dy = pred.at3(i, s, 1) - gt.at3(i, s, 1);
            total += (dx * dx + dy * dy).sqrt();
        }
    }
    Ok(total / (n * t) as f64)
}

/// Mean Euclidean distance at the final step.
pub fn fde(pred: &Array, gt: &Array) -> Result<f64> {
    let (n, t) = check_tracks(pred, gt, "fde")?;
    let mut total = 0.0;
    for i in 0..n {
        let dx = pred.at3(i, t - 1, 0) - gt.at3(i, t - 1, 0);
        let dy = pred.at3(i, t - 1, 1) - gt.at3(i, t - 1, 1);
        total += (dx * dx + dy * dy).sqrt();
    }
    Ok(total / n as f64)
}

/// Collision rate over sampled futures (`S×N×T×2`): per sample, the
/// fraction of pedestrians that pass within `threshold` meters of another
/// at any step, averaged over samples and scaled to percent.
pub fn col(samples: &Array, threshold: f64) -> Result<f64> {
    let shape = samples.shape();
    if shape.len() != 4 || shape[3] != 2 {
        return Err(Error::Alignment(format!(
            "col: expected S×N×T×2 samples, got {shape:?}"
        )));
    }
    let (count, n, t) = (shape[0], shape[1], shape[2]);
    if count == 0 {
        return Err(Error::Alignment("col: no samples".into()));
    }
    if n < 2 {
        return Ok(0.0);
    }
    let at = |s: usize, i: usize, step: usize, c: usize| -> f64 {
        samples.data()[(((s * n) + i) * t + step) * 2 + c]
    };
    let mut total = 0.0;
    for s in 0..count {
        let mut involved = vec![false; n];
        for i in 0..n {
            for j in (i + 1)..n {
                for step in 0..t {
                    let dx = at(s, i, step, 0) - at(s, j, step, 0);
                    let dy = at(s, i, step, 1) - at(s, j, step, 1);
                    if (dx * dx + dy * dy).sqrt() < threshold {
                        involved[i] = true;
                        involved[j] = true;
                        break;
                    }
                }
            }
        }
        total += involved.iter().filter(|&&v| v).count() as f64 / n as f64;
    }
    Ok(total / count as f64 * 100.0)
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0; // zero-variance series carry no correlation signal
    }
    cov / (va * vb).sqrt()
}

/// Temporal correlation coefficient: Pearson correlation of the x- and
/// y-series between prediction and ground truth, averaged over the two axes
/// and then over pedestrians.
pub fn tcc(pred: &Array, gt: &Array) -> Result<f64> {
    let (n, t) = check_tracks(pred, gt, "tcc")?;
    if t < 2 {
        return Err(Error::Alignment("tcc needs at least two steps".into()));
    }
    let mut total = 0.0;
    for i in 0..n {
        let mut per_axis = 0.0;
        for c in 0..2 {
            let a: Vec<f64> = (0..t).map(|s| pred.at3(i, s, c)).collect();
            let b: Vec<f64> = (0..t).map(|s| gt.at3(i, s, c)).collect();
            per_axis += pearson(&a, &b);
        }
        total += per_axis / 2.0;
    }
    Ok(total / n as f64)
}

fn same_universe(pred: &GroupPartition, gt: &GroupPartition, op: &'static str) -> Result<usize> {
    if pred.len() != gt.len() {
        return Err(Error::Alignment(format!(
            "{op}: partitions cover {} vs {} pedestrians",
            pred.len(),
            gt.len()
        )));
    }
    Ok(pred.len())
}

/// Raw pair counts behind the pairwise score: same-group pairs agreed on,
/// predicted, and in the ground truth. Summable across windows for
/// micro-averaged corpus scores.
pub fn pw_counts(pred: &GroupPartition, gt: &GroupPartition) -> Result<(usize, usize, usize)> {
    let n = same_universe(pred, gt, "pw_scores")?;
    let mut pred_pairs = 0usize;
    let mut gt_pairs = 0usize;
    let mut both = 0usize;
    for i in 0..n {
        for j in (i + 1)..n {
            let p = pred.same_group(i, j);
            let g = gt.same_group(i, j);
            pred_pairs += p as usize;
            gt_pairs += g as usize;
            both += (p && g) as usize;
        }
    }
    Ok((both, pred_pairs, gt_pairs))
}

/// Pairwise grouping scores: precision and recall of same-group pairs.
/// A vacuous denominator scores 1.0.
pub fn pw_scores(pred: &GroupPartition, gt: &GroupPartition) -> Result<(f64, f64)> {
    let (both, pred_pairs, gt_pairs) = pw_counts(pred, gt)?;
    let precision = if pred_pairs == 0 {
        1.0
    } else {
        both as f64 / pred_pairs as f64
    };
    let recall = if gt_pairs == 0 {
        1.0
    } else {
        both as f64 / gt_pairs as f64
    };
    Ok((precision, recall))
}

/// Node of the augmented universe used by the Group-MITRE score: every
/// pedestrian that is a singleton in either partition gains a fake
/// counterpart that its own partition groups with it.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
enum MitreNode {
    Real(usize),
    Fake(usize),
}

fn augmented_groups(
    own: &GroupPartition,
    other: &GroupPartition,
) -> Vec<Vec<MitreNode>> {
    let n = own.len();
    let mut groups: Vec<Vec<MitreNode>> = own
        .groups()
        .iter()
        .map(|g| g.iter().map(|&i| MitreNode::Real(i)).collect())
        .collect();
    for i in 0..n {
        let own_singleton = own.groups()[own.member_of(i)].len() == 1;
        let other_singleton = other.groups()[other.member_of(i)].len() == 1;
        if own_singleton {
            // the fake counterpart joins its pedestrian
            groups[own.member_of(i)].push(MitreNode::Fake(i));
        } else if other_singleton {
            // the counterpart exists in the universe but is alone here
            groups.push(vec![MitreNode::Fake(i)]);
        }
    }
    groups
}

fn mitre_direction(truth: &GroupPartition, response: &GroupPartition) -> (f64, f64) {
    let truth_groups = augmented_groups(truth, response);
    let response_groups = augmented_groups(response, truth);
    let mut class_of: HashMap<MitreNode, usize> = HashMap::new();
    for (k, g) in response_groups.iter().enumerate() {
        for &node in g {
            class_of.insert(node, k);
        }
    }
    let mut numerator = 0.0;
    let mut denominator = 0.0;
    for q in &truth_groups {
        let mut classes: HashSet<usize> = HashSet::new();
        let mut missing = 0usize;
        for node in q {
            match class_of.get(node) {
                Some(&k) => {
                    classes.insert(k);
                }
                // a node absent from the response partitions as its own class
                None => missing += 1,
            }
        }
        let parts = classes.len() + missing;
        numerator += (q.len() - parts) as f64;
        denominator += (q.len() - 1) as f64;
    }
    (numerator, denominator)
}

/// Raw link counts behind the Group-MITRE score, as
/// `(precision_num, precision_den, recall_num, recall_den)`. Summable
/// across windows for micro-averaged corpus scores.
pub fn gmitre_counts(pred: &GroupPartition, gt: &GroupPartition) -> Result<(f64, f64, f64, f64)> {
    same_universe(pred, gt, "gmitre_scores")?;
    let (rn, rd) = mitre_direction(gt, pred);
    let (pn, pd) = mitre_direction(pred, gt);
    Ok((pn, pd, rn, rd))
}

/// Group-MITRE scores: link-based recall over augmented ground-truth groups
/// (fake counterparts attached to singletons) and the symmetric precision.
pub fn gmitre_scores(pred: &GroupPartition, gt: &GroupPartition) -> Result<(f64, f64)> {
    let (pn, pd, rn, rd) = gmitre_counts(pred, gt)?;
    let recall = if rd == 0.0 { 1.0 } else { rn / rd };
    let precision = if pd == 0.0 { 1.0 } else { pn / pd };
    Ok((precision, recall))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn track(n: usize, t: usize, mut f: impl FnMut(usize, usize) -> (f64, f64)) -> Array {
        let mut a = Array::zeros(&[n, t, 2]);
        for i in 0..n {
            for s in 0..t {
                let (x, y) = f(i, s);
                a.set3(i, s, 0, x);
                a.set3(i, s, 1, y);
            }
        }
        a
    }

    fn random_track(n: usize, t: usize, rng: &mut ChaCha8Rng) -> Array {
        track(n, t, |_, _| {
            (rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0))
        })
    }

    #[test]
    fn ade_examples() {
        let gt = track(2, 3, |i, s| (s as f64, i as f64));
        assert_eq!(ade(&gt, &gt).unwrap(), 0.0);

        // constant (0.3, 0.4) offset → 0.5 everywhere
        let off = track(2, 3, |i, s| (s as f64 + 0.3, i as f64 + 0.4));
        assert!((ade(&off, &gt).unwrap() - 0.5).abs() < 1e-12);

        // random 2×3 case against a hand sum
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_track(2, 3, &mut rng);
        let g = random_track(2, 3, &mut rng);
        let mut hand = 0.0;
        for i in 0..2 {
            for s in 0..3 {
                hand += ((p.at3(i, s, 0) - g.at3(i, s, 0)).powi(2)
                    + (p.at3(i, s, 1) - g.at3(i, s, 1)).powi(2))
                .sqrt();
            }
        }
        hand /= 6.0;
        assert!((ade(&p, &g).unwrap() - hand).abs() <= 1e-12);
    }

    #[test]
    fn fde_isolates_the_endpoint() {
        let gt = track(1, 4, |_, s| (s as f64, 0.0));
        let mut p = gt.clone();
        p.set3(0, 3, 1, 1.0);
        assert!((fde(&p, &gt).unwrap() - 1.0).abs() < 1e-12);
        assert!((ade(&p, &gt).unwrap() - 0.25).abs() < 1e-12);
        assert_eq!(fde(&gt, &gt).unwrap(), 0.0);
    }

    #[test]
    fn ade_equals_fde_for_single_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = random_track(3, 1, &mut rng);
        let g = random_track(3, 1, &mut rng);
        assert!((ade(&p, &g).unwrap() - fde(&p, &g).unwrap()).abs() <= 1e-15);
    }

    #[test]
    fn shape_mismatch_is_alignment_error() {
        let a = Array::zeros(&[2, 3, 2]);
        let b = Array::zeros(&[2, 4, 2]);
        assert!(matches!(ade(&a, &b), Err(Error::Alignment(_))));
    }

    fn samples_of(tracks: &[Array]) -> Array {
        let (n, t) = (tracks[0].shape()[0], tracks[0].shape()[1]);
        let mut out = Array::zeros(&[tracks.len(), n, t, 2]);
        for (s, tr) in tracks.iter().enumerate() {
            let stride = n * t * 2;
            out.data_mut()[s * stride..(s + 1) * stride].copy_from_slice(tr.data());
        }
        out
    }

    #[test]
    fn col_examples() {
        // parallel tracks 1 m apart never collide at 0.2 m
        let parallel = track(2, 5, |i, s| (s as f64, i as f64));
        assert_eq!(col(&samples_of(&[parallel]), 0.2).unwrap(), 0.0);

        // two tracks crossing through the same point at the same step
        let crossing = track(2, 3, |i, s| {
            if i == 0 {
                (s as f64, 0.0)
            } else {
                (2.0 - s as f64, 0.0)
            }
        });
        assert_eq!(col(&samples_of(&[crossing]), 0.2).unwrap(), 100.0);

        // single pedestrian can never collide
        let solo = track(1, 5, |_, s| (s as f64, 0.0));
        assert_eq!(col(&samples_of(&[solo]), 0.2).unwrap(), 0.0);
    }

    #[test]
    fn col_matches_brute_force_and_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let tracks: Vec<Array> = (0..3).map(|_| random_track(3, 4, &mut rng)).collect();
            let samples = samples_of(&tracks);
            let thr = rng.gen_range(0.1..3.0);
            // brute force: exhaustive pair/step scan
            let mut expected = 0.0;
            for tr in &tracks {
                let mut involved = [false; 3];
                for i in 0..3 {
                    for j in (i + 1)..3 {
                        for s in 0..4 {
                            let dx = tr.at3(i, s, 0) - tr.at3(j, s, 0);
                            let dy = tr.at3(i, s, 1) - tr.at3(j, s, 1);
                            if (dx * dx + dy * dy).sqrt() < thr {
                                involved[i] = true;
                                involved[j] = true;
                            }
                        }
                    }
                }
                expected += involved.iter().filter(|&&v| v).count() as f64 / 3.0;
            }
            expected = expected / 3.0 * 100.0;
            let got = col(&samples, thr).unwrap();
            assert!((got - expected).abs() <= 1e-9);
            // monotone in the threshold
            let wider = col(&samples, thr + 0.5).unwrap();
            assert!(wider >= got);
        }
    }

    #[test]
    fn tcc_examples() {
        // identical non-constant tracks → 1
        let gt = track(2, 5, |i, s| (s as f64, s as f64 + i as f64));
        assert!((tcc(&gt, &gt).unwrap() - 1.0).abs() < 1e-12);

        // time-reversed diagonal track → -1
        let rev = track(2, 5, |i, s| (4.0 - s as f64, 4.0 - s as f64 + i as f64));
        assert!((tcc(&rev, &gt).unwrap() + 1.0).abs() < 1e-12);

        // zero-variance prediction contributes 0
        let flat = track(1, 5, |_, _| (1.0, 1.0));
        let moving = track(1, 5, |_, s| (s as f64, s as f64));
        assert_eq!(tcc(&flat, &moving).unwrap(), 0.0);
    }

    #[test]
    fn tcc_matches_textbook_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..30 {
            let p = random_track(2, 6, &mut rng);
            let g = random_track(2, 6, &mut rng);
            let mut expected = 0.0;
            for i in 0..2 {
                for c in 0..2 {
                    let a: Vec<f64> = (0..6).map(|s| p.at3(i, s, c)).collect();
                    let b: Vec<f64> = (0..6).map(|s| g.at3(i, s, c)).collect();
                    let n = 6.0;
                    let (sa, sb) = (a.iter().sum::<f64>(), b.iter().sum::<f64>());
                    let sab: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
                    let saa: f64 = a.iter().map(|x| x * x).sum();
                    let sbb: f64 = b.iter().map(|x| x * x).sum();
                    let r = (n * sab - sa * sb)
                        / ((n * saa - sa * sa).sqrt() * (n * sbb - sb * sb).sqrt());
                    expected += r / 2.0;
                }
            }
            expected /= 2.0;
            assert!((tcc(&p, &g).unwrap() - expected).abs() <= 1e-9);
        }
    }

    fn part(groups: &[&[usize]], n: usize) -> GroupPartition {
        GroupPartition::new(groups.iter().map(|g| g.to_vec()).collect(), n).unwrap()
    }

    #[test]
    fn pw_examples() {
        let gt = part(&[&[0, 1, 2], &[3]], 4);
        assert_eq!(pw_scores(&gt, &gt).unwrap(), (1.0, 1.0));

        // all-singleton prediction: vacuous precision, zero recall
        let singles = GroupPartition::singletons(4);
        assert_eq!(pw_scores(&singles, &gt).unwrap(), (1.0, 0.0));

        // pred {0,1}{2}{3} vs gt {0,1,2}{3}
        let pred = part(&[&[0, 1], &[2], &[3]], 4);
        let (p, r) = pw_scores(&pred, &gt).unwrap();
        assert_eq!(p, 1.0);
        assert!((r - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn gmitre_examples() {
        // identical partitions score perfectly
        let gt = part(&[&[0, 1], &[2]], 3);
        assert_eq!(gmitre_scores(&gt, &gt).unwrap(), (1.0, 1.0));

        // gt pairs {0,1}, prediction splits them: recall 0
        let gt_pair = part(&[&[0, 1]], 2);
        let singles = GroupPartition::singletons(2);
        let (_, r) = gmitre_scores(&singles, &gt_pair).unwrap();
        assert_eq!(r, 0.0);

        // gt {0,1,2}, pred {0,1}{2}: recall (3-2)/(3-1) = 0.5
        let gt3 = part(&[&[0, 1, 2]], 3);
        let pred = part(&[&[0, 1], &[2]], 3);
        let (_, r) = gmitre_scores(&pred, &gt3).unwrap();
        assert!((r - 0.5).abs() < 1e-12);
    }

    /// Brute-force Group-MITRE: count the links of a spanning forest of each
    /// augmented truth group that the response already provides, via
    /// connected components of the response-induced graph.
    fn gmitre_oracle(pred: &GroupPartition, gt: &GroupPartition) -> (f64, f64) {
        fn direction(truth: &GroupPartition, response: &GroupPartition) -> (f64, f64) {
            let t_groups = augmented_groups(truth, response);
            let r_groups = augmented_groups(response, truth);
            let mut num = 0.0;
            let mut den = 0.0;
            for q in &t_groups {
                // connected components of q under "same response group"
                let mut comp: Vec<usize> = (0..q.len()).collect();
                fn find(comp: &mut Vec<usize>, i: usize) -> usize {
                    if comp[i] != i {
                        let r = find(comp, comp[i]);
                        comp[i] = r;
                    }
                    comp[i]
                }
                for a in 0..q.len() {
                    for b in (a + 1)..q.len() {
                        let linked = r_groups
                            .iter()
                            .any(|g| g.contains(&q[a]) && g.contains(&q[b]));
                        if linked {
                            let (ra, rb) = (find(&mut comp, a), find(&mut comp, b));
                            if ra != rb {
                                comp[ra] = rb;
                            }
                        }
                    }
                }
                let parts = (0..q.len())
                    .map(|i| find(&mut comp, i))
                    .collect::<HashSet<_>>()
                    .len();
                num += (q.len() - parts) as f64;
                den += (q.len() - 1) as f64;
            }
            (num, den)
        }
        let (rn, rd) = direction(gt, pred);
        let (pn, pd) = direction(pred, gt);
        (
            if pd == 0.0 { 1.0 } else { pn / pd },
            if rd == 0.0 { 1.0 } else { rn / rd },
        )
    }

    fn random_partition(n: usize, rng: &mut ChaCha8Rng) -> GroupPartition {
        let mut ids: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            ids.swap(i, rng.gen_range(0..=i));
        }
        let mut groups = Vec::new();
        let mut i = 0;
        while i < n {
            let take = rng.gen_range(1..=(n - i).min(4));
            groups.push(ids[i..i + take].to_vec());
            i += take;
        }
        GroupPartition::new(groups, n).unwrap()
    }

    #[test]
    fn gmitre_matches_link_counting_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..200 {
            let n = rng.gen_range(1..=9);
            let pred = random_partition(n, &mut rng);
            let gt = random_partition(n, &mut rng);
            let got = gmitre_scores(&pred, &gt).unwrap();
            let want = gmitre_oracle(&pred, &gt);
            assert!((got.0 - want.0).abs() <= 1e-12, "{got:?} vs {want:?}");
            assert!((got.1 - want.1).abs() <= 1e-12, "{got:?} vs {want:?}");
        }
    }

    #[test]
    fn perfect_scores_iff_equal_partitions() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..300 {
            let n = rng.gen_range(1..=8);
            let pred = random_partition(n, &mut rng);
            let gt = random_partition(n, &mut rng);
            let equal = pred == gt;
            let (pp, pr) = pw_scores(&pred, &gt).unwrap();
            let (gp, gr) = gmitre_scores(&pred, &gt).unwrap();
            let pw_perfect = pp == 1.0 && pr == 1.0;
            let gm_perfect = gp == 1.0 && gr == 1.0;
            assert_eq!(pw_perfect, equal, "pw on {pred:?} vs {gt:?}");
            assert_eq!(gm_perfect, equal, "gm on {pred:?} vs {gt:?}");
        }
    }

    #[test]
    fn metrics_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let p = random_track(4, 5, &mut rng);
        let g = random_track(4, 5, &mut rng);
        let perm = [2usize, 0, 3, 1];
        let permute = |a: &Array| {
            let mut out = Array::zeros(&[4, 5, 2]);
            for (ni, &oi) in perm.iter().enumerate() {
                for s in 0..5 {
                    for c in 0..2 {
                        out.set3(ni, s, c, a.at3(oi, s, c));
                    }
                }
            }
            out
        };
        assert!((ade(&p, &g).unwrap() - ade(&permute(&p), &permute(&g)).unwrap()).abs() <= 1e-12);
        assert!((fde(&p, &g).unwrap() - fde(&permute(&p), &permute(&g)).unwrap()).abs() <= 1e-12);
        assert!((tcc(&p, &g).unwrap() - tcc(&permute(&p), &permute(&g)).unwrap()).abs() <= 1e-12);

        let pred = part(&[&[0, 2], &[1], &[3]], 4);
        let gt = part(&[&[0, 2, 3], &[1]], 4);
        let remap = |q: &GroupPartition| {
            let inv: Vec<usize> = {
                let mut inv = vec![0; 4];
                for (ni, &oi) in perm.iter().enumerate() {
                    inv[oi] = ni;
                }
                inv
            };
            GroupPartition::new(
                q.groups()
                    .iter()
                    .map(|g| g.iter().map(|&i| inv[i]).collect())
                    .collect(),
                4,
            )
            .unwrap()
        };
        assert_eq!(
            pw_scores(&pred, &gt).unwrap(),
            pw_scores(&remap(&pred), &remap(&gt)).unwrap()
        );
        assert_eq!(
            gmitre_scores(&pred, &gt).unwrap(),
            gmitre_scores(&remap(&pred), &remap(&gt)).unwrap()
        );
    }
}
