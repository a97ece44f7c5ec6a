//! Group assignment: trajectory embedding, pairwise distances, hard groups
//! via union-find, and the straight-through differentiable path.
//!
//! The hard partition drives the pooling structure in the forward pass. For
//! the backward pass, a column-normalized sigmoid of the thresholded
//! distances stands in as a continuous relaxation, spliced in with a
//! stop-gradient so forward values are untouched.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{Array, Tape, Var};

/// Embedding width of the grouping network.
pub const EMBED_CHANNELS: usize = 16;

/// Negative-side slope of the smooth leaky rectifier used throughout the
/// networks.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Disjoint, nonempty index sets covering `0..n`.
///
/// Canonical form: members sorted ascending within each group, groups sorted
/// by smallest member. Two partitions are equal up to relabeling iff their
/// canonical forms compare equal.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupPartition {
    groups: Vec<Vec<usize>>,
    member_of: Vec<usize>,
}

impl GroupPartition {
    pub fn new(groups: Vec<Vec<usize>>, n: usize) -> Result<Self> {
        let mut groups: Vec<Vec<usize>> = groups;
        let mut member_of = vec![usize::MAX; n];
        for group in &mut groups {
            if group.is_empty() {
                return Err(Error::Partition("empty group".into()));
            }
            group.sort_unstable();
            for &i in group.iter() {
                if i >= n {
                    return Err(Error::Partition(format!(
                        "member {i} out of range for {n} pedestrians"
                    )));
                }
            }
        }
        groups.sort_by_key(|g| g[0]);
        for (k, group) in groups.iter().enumerate() {
            for &i in group {
                if member_of[i] != usize::MAX {
                    return Err(Error::Partition(format!("member {i} appears twice")));
                }
                member_of[i] = k;
            }
        }
        if let Some(missing) = member_of.iter().position(|&m| m == usize::MAX) {
            return Err(Error::Partition(format!(
                "member {missing} not covered by any group"
            )));
        }
        Ok(GroupPartition { groups, member_of })
    }

    /// The all-singleton partition of `0..n`.
    pub fn singletons(n: usize) -> Self {
        GroupPartition {
            groups: (0..n).map(|i| vec![i]).collect(),
            member_of: (0..n).collect(),
        }
    }

    /// Number of pedestrians covered.
    pub fn len(&self) -> usize {
        self.member_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.member_of.is_empty()
    }

    /// Number of groups K.
    pub fn group_count(&self) -> usize {
        self.groups.len()
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn member_of(&self, i: usize) -> usize {
        self.member_of[i]
    }

    pub fn same_group(&self, i: usize, j: usize) -> bool {
        self.member_of[i] == self.member_of[j]
    }

    pub fn is_all_singletons(&self) -> bool {
        self.groups.len() == self.member_of.len()
    }

    /// True when every group of `self` is contained in some group of
    /// `coarser` (the refinement order used by monotone coarsening).
    pub fn refines(&self, coarser: &GroupPartition) -> bool {
        self.len() == coarser.len()
            && self
                .groups
                .iter()
                .all(|g| g.iter().all(|&i| coarser.same_group(g[0], i)))
    }
}

/// Disjoint-set forest with path compression and union by rank.
struct UnionFind {
    parent: Vec<usize>,
    rank: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
            rank: vec![0; n],
        }
    }

    fn find(&mut self, x: usize) -> usize {
        if self.parent[x] != x {
            self.parent[x] = self.find(self.parent[x]);
        }
        self.parent[x]
    }

    fn union(&mut self, x: usize, y: usize) {
        let rx = self.find(x);
        let ry = self.find(y);
        if rx == ry {
            return;
        }
        if self.rank[rx] < self.rank[ry] {
            self.parent[rx] = ry;
        } else if self.rank[rx] > self.rank[ry] {
            self.parent[ry] = rx;
        } else {
            self.parent[ry] = rx;
            self.rank[rx] += 1;
        }
    }

    fn components(&mut self) -> usize {
        let n = self.parent.len();
        (0..n).filter(|&i| self.find(i) == i).count()
    }

    fn into_partition(mut self) -> GroupPartition {
        let n = self.parent.len();
        let mut by_root: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for i in 0..n {
            let r = self.find(i);
            by_root.entry(r).or_default().push(i);
        }
        GroupPartition::new(by_root.into_values().collect(), n)
            .expect("union-find yields a valid partition")
    }
}

/// Learnable parameters of the group assignment module.
#[derive(Clone, Debug)]
pub struct GroupParams {
    /// First temporal conv of the embedding, kernel 3, 2 -> 16 channels.
    pub conv1_w: Array,
    pub conv1_b: Array,
    /// Second temporal conv, kernel 3, 16 -> 16 channels.
    pub conv2_w: Array,
    pub conv2_b: Array,
    /// Learnable distance threshold, initialized to 1.
    pub pi: Array,
    /// Relaxation temperature of the soft assignment. Fixed, not trained.
    pub tau: f64,
}

pub(crate) fn xavier(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Array {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| rng.gen_range(-limit..limit)).collect();
    Array::new(shape.to_vec(), data).expect("shape matches generated data")
}

/// Gain on the embedding conv init. Pedestrian displacements are fractions
/// of a meter, so plain Xavier weights collapse every pairwise embedding
/// distance far below the unit threshold init and the thresholded sigmoid
/// saturates with nothing to separate. The gain puts typical cross-group
/// distances above 1 at initialization, so the threshold starts out
/// moderately selective.
const EMBED_INIT_GAIN: f64 = 3.0;

impl GroupParams {
    pub fn init(seed: u64) -> Self {
        let c = EMBED_CHANNELS;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut conv1_w = xavier(&mut rng, &[3, 2, c], 3 * 2, 3 * c);
        let mut conv2_w = xavier(&mut rng, &[3, c, c], 3 * c, 3 * c);
        for v in conv1_w.data_mut().iter_mut().chain(conv2_w.data_mut()) {
            *v *= EMBED_INIT_GAIN;
        }
        GroupParams {
            conv1_w,
            conv1_b: Array::zeros(&[c]),
            conv2_w,
            conv2_b: Array::zeros(&[c]),
            pi: Array::scalar(1.0),
            tau: 0.1,
        }
    }

    pub fn vars<'t>(&self, tape: &'t Tape) -> GroupVars<'t> {
        GroupVars {
            conv1_w: tape.leaf(self.conv1_w.clone()),
            conv1_b: tape.leaf(self.conv1_b.clone()),
            conv2_w: tape.leaf(self.conv2_w.clone()),
            conv2_b: tape.leaf(self.conv2_b.clone()),
            pi: tape.leaf(self.pi.clone()),
            tau: self.tau,
        }
    }
}

/// Tape handles for [`GroupParams`] within one forward pass.
pub struct GroupVars<'t> {
    pub conv1_w: Var<'t>,
    pub conv1_b: Var<'t>,
    pub conv2_w: Var<'t>,
    pub conv2_b: Var<'t>,
    pub pi: Var<'t>,
    pub tau: f64,
}

/// Per-pedestrian embedding of relative trajectories: two temporal convs
/// with leaky rectifiers, then a mean over time. `N×T×2 -> N×16`.
pub fn embed<'t>(obs_rel: Var<'t>, p: &GroupVars<'t>) -> Result<Var<'t>> {
    let h = obs_rel
        .temporal_conv(p.conv1_w, p.conv1_b)?
        .smooth_leaky(LEAKY_SLOPE)?;
    let h = h
        .temporal_conv(p.conv2_w, p.conv2_b)?
        .smooth_leaky(LEAKY_SLOPE)?;
    h.mean_time()
}

/// L2 distances between embedding rows: symmetric, zero diagonal.
pub fn pairwise_distance(e: Var<'_>) -> Result<Var<'_>> {
    e.pairwise_l2()
}

/// Hard group assignment: union-find over all pairs with `d[i,j] <= pi`
/// (ties count as colleagues), i.e. connected components of the thresholded
/// graph. Pedestrians in no pair become singletons.
pub fn assign_groups(d: &Array, pi: f64) -> GroupPartition {
    let n = d.shape()[0];
    debug_assert_eq!(d.shape(), [n, n]);
    let mut uf = UnionFind::new(n);
    for i in 0..n {
        for j in (i + 1)..n {
            if d.at2(i, j) <= pi {
                uf.union(i, j);
            }
        }
    }
    uf.into_partition()
}

/// Smallest threshold that merges the scene down to at most ceil(N/2)
/// groups, for the fixed-ratio ablation that replaces the learnable
/// threshold with a 50% node reduction.
pub fn fixed_ratio_threshold(d: &Array) -> f64 {
    let n = d.shape()[0];
    if n <= 1 {
        return 0.0;
    }
    let target = n.div_ceil(2);
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            pairs.push((d.at2(i, j), i, j));
        }
    }
    pairs.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let mut uf = UnionFind::new(n);
    let mut components = n;
    let mut threshold = 0.0;
    for (dist, i, j) in pairs {
        if components <= target {
            break;
        }
        if uf.find(i) != uf.find(j) {
            uf.union(i, j);
            components -= 1;
            threshold = dist;
        }
    }
    debug_assert_eq!(components, uf.components().min(components));
    threshold
}

/// Soft assignment matrix: `a[i,j] = sigma((pi - d[i,j]) / tau)`, columns
/// normalized to sum 1. Tape-registered so gradients reach the embedding and
/// the threshold.
pub fn soft_assignment<'t>(d: Var<'t>, pi: Var<'t>, tau: f64) -> Result<Var<'t>> {
    if tau <= 0.0 {
        return Err(Error::Config(format!("tau must be positive, got {tau}")));
    }
    let n = d.shape()[0];
    let z = pi.broadcast_to(&[n, n])?.sub(d)?.scale(1.0 / tau)?;
    // The tiny offset keeps fully saturated columns strictly positive.
    z.sigmoid()?.add_const(1e-300)?.col_normalize()
}

/// Straight-through features: forward value is `x` (up to rounding of
/// `(x - a'x) + a'x`); the backward pass sees only the group-mixed term, so
/// gradients flow into the soft assignment and from there into the
/// embedding and threshold.
pub fn st_features<'t>(x: Var<'t>, a: Var<'t>) -> Result<Var<'t>> {
    let xs = x.shape();
    let ash = a.shape();
    if ash.len() != 2 || ash[0] != ash[1] || xs.len() != 2 || xs[0] != ash[0] {
        return Err(Error::Dimension {
            op: "st_features",
            lhs: xs,
            rhs: ash,
        });
    }
    let mixed = a.transpose()?.matmul(x)?;
    x.sub(mixed)?.stop_gradient()?.add(mixed)
}

/// Binary cross-entropy between the same-group probability
/// `sigma((pi - d)/tau)` and the ground-truth same-group indicator, averaged
/// over unordered pairs. Evaluated in logit space for stability.
pub fn supervised_group_loss<'t>(
    d: Var<'t>,
    pi: Var<'t>,
    tau: f64,
    labels: &GroupPartition,
) -> Result<Var<'t>> {
    if tau <= 0.0 {
        return Err(Error::Config(format!("tau must be positive, got {tau}")));
    }
    let n = d.shape()[0];
    if labels.len() != n {
        return Err(Error::Alignment(format!(
            "group labels cover {} pedestrians, window has {n}",
            labels.len()
        )));
    }
    let tape = d.tape();
    if n < 2 {
        return Ok(tape.leaf(Array::scalar(0.0)));
    }
    let mut mask = Array::zeros(&[n, n]);
    let mut y = Array::zeros(&[n, n]);
    let mut pairs = 0usize;
    for i in 0..n {
        for j in (i + 1)..n {
            mask.set2(i, j, 1.0);
            if labels.same_group(i, j) {
                y.set2(i, j, 1.0);
            }
            pairs += 1;
        }
    }
    let z = pi.broadcast_to(&[n, n])?.sub(d)?.scale(1.0 / tau)?;
    // BCE(sigma(z), y) = softplus(z) - z*y
    let per_pair = z.softplus()?.sub(z.mul(tape.leaf(y))?)?;
    per_pair
        .mul(tape.leaf(mask))?
        .sum_all()?
        .scale(1.0 / pairs as f64)
}

/// Deterministic per-scene partition from trained parameters, for grouping
/// evaluation without running the whole predictor.
pub fn infer_partition(
    obs_rel: &Array,
    params: &GroupParams,
    fixed_ratio: bool,
) -> Result<(GroupPartition, Array)> {
    let tape = Tape::new();
    let x = tape.leaf(obs_rel.clone());
    let vars = params.vars(&tape);
    let e = embed(x, &vars)?;
    let d = pairwise_distance(e)?.value();
    let threshold = if fixed_ratio {
        fixed_ratio_threshold(&d)
    } else {
        params.pi.item()
    };
    Ok((assign_groups(&d, threshold), d))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use rand::Rng;

    fn random_symmetric(n: usize, rng: &mut ChaCha8Rng) -> Array {
        let mut d = Array::zeros(&[n, n]);
        for i in 0..n {
            for j in (i + 1)..n {
                let v = rng.gen_range(0.0..2.0);
                d.set2(i, j, v);
                d.set2(j, i, v);
            }
        }
        d
    }

    /// Independent oracle: connected components of the thresholded graph by
    /// breadth-first search.
    fn bfs_components(d: &Array, pi: f64) -> GroupPartition {
        let n = d.shape()[0];
        let mut seen = vec![false; n];
        let mut groups = Vec::new();
        for start in 0..n {
            if seen[start] {
                continue;
            }
            let mut queue = vec![start];
            let mut group = Vec::new();
            seen[start] = true;
            while let Some(i) = queue.pop() {
                group.push(i);
                for j in 0..n {
                    if j != i && !seen[j] && d.at2(i, j) <= pi {
                        seen[j] = true;
                        queue.push(j);
                    }
                }
            }
            groups.push(group);
        }
        GroupPartition::new(groups, n).unwrap()
    }

    #[test]
    fn all_far_gives_singletons() {
        let mut d = Array::full(&[3, 3], 10.0);
        for i in 0..3 {
            d.set2(i, i, 0.0);
        }
        let part = assign_groups(&d, 1.0);
        assert!(part.is_all_singletons());
        assert_eq!(part.group_count(), 3);
    }

    #[test]
    fn transitive_union_of_pairs() {
        // pairs (0,1) and (1,2) under threshold merge into one group
        let mut d = Array::full(&[3, 3], 10.0);
        for i in 0..3 {
            d.set2(i, i, 0.0);
        }
        d.set2(0, 1, 0.5);
        d.set2(1, 0, 0.5);
        d.set2(1, 2, 0.5);
        d.set2(2, 1, 0.5);
        let part = assign_groups(&d, 1.0);
        assert_eq!(part.groups(), &[vec![0, 1, 2]]);
    }

    #[test]
    fn tie_at_threshold_counts_as_colleague() {
        let mut d = Array::zeros(&[2, 2]);
        d.set2(0, 1, 1.0);
        d.set2(1, 0, 1.0);
        assert_eq!(assign_groups(&d, 1.0).group_count(), 1);
        assert_eq!(assign_groups(&d, 0.999).group_count(), 2);
    }

    #[test]
    fn matches_bfs_oracle_on_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let n = rng.gen_range(1..=8);
            let d = random_symmetric(n, &mut rng);
            let pi = rng.gen_range(0.0..2.0);
            assert_eq!(assign_groups(&d, pi), bfs_components(&d, pi));
        }
    }

    #[test]
    fn coarsens_monotonically_in_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let n = rng.gen_range(2..=8);
            let d = random_symmetric(n, &mut rng);
            let a = rng.gen_range(0.0..2.0);
            let b = rng.gen_range(0.0..2.0);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            assert!(assign_groups(&d, lo).refines(&assign_groups(&d, hi)));
        }
    }

    #[test]
    fn fixed_ratio_halves_node_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let n = rng.gen_range(2..=9);
            let d = random_symmetric(n, &mut rng);
            let thr = fixed_ratio_threshold(&d);
            let part = assign_groups(&d, thr);
            assert!(
                part.group_count() <= n.div_ceil(2),
                "n={n} K={} thr={thr}",
                part.group_count()
            );
        }
    }

    #[test]
    fn pairwise_distance_examples() {
        let tape = Tape::new();
        // identical rows → all-zero matrix
        let e = tape.leaf(Array::new(vec![2, 2], vec![1.0, 2.0, 1.0, 2.0]).unwrap());
        let d = pairwise_distance(e).unwrap().value();
        assert_eq!(d.data(), &[0.0; 4]);

        // rows (0,0) and (3,4) → distance 5
        let e = tape.leaf(Array::new(vec![2, 2], vec![0.0, 0.0, 3.0, 4.0]).unwrap());
        let d = pairwise_distance(e).unwrap().value();
        assert!((d.at2(0, 1) - 5.0).abs() < 1e-12);
        assert!((d.at2(1, 0) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn pairwise_distance_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 5;
        let f = 4;
        let data: Vec<f64> = (0..n * f).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = Array::new(vec![n, f], data).unwrap();
        let tape = Tape::new();
        let d = tape.leaf(x.clone()).pairwise_l2().unwrap().value();
        for i in 0..n {
            for j in 0..n {
                let naive: f64 = (0..f)
                    .map(|p| (x.at2(i, p) - x.at2(j, p)).powi(2))
                    .sum::<f64>()
                    .sqrt();
                assert!((d.at2(i, j) - naive).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn embed_is_permutation_equivariant() {
        let params = GroupParams::init(42);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data: Vec<f64> = (0..3 * 8 * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = Array::new(vec![3, 8, 2], data.clone()).unwrap();

        let tape = Tape::new();
        let e = embed(tape.leaf(x.clone()), &params.vars(&tape))
            .unwrap()
            .value();

        // identical tracks embed identically
        let mut dup = data.clone();
        dup.copy_within(0..16, 16);
        let xd = Array::new(vec![3, 8, 2], dup).unwrap();
        let tape2 = Tape::new();
        let ed = embed(tape2.leaf(xd), &params.vars(&tape2)).unwrap().value();
        for j in 0..EMBED_CHANNELS {
            assert_eq!(ed.at2(0, j), ed.at2(1, j));
        }

        // permuting pedestrians permutes rows
        let perm = [2usize, 0, 1];
        let mut pdata = vec![0.0; 3 * 8 * 2];
        for (new_i, &old_i) in perm.iter().enumerate() {
            pdata[new_i * 16..(new_i + 1) * 16].copy_from_slice(&data[old_i * 16..(old_i + 1) * 16]);
        }
        let xp = Array::new(vec![3, 8, 2], pdata).unwrap();
        let tape3 = Tape::new();
        let ep = embed(tape3.leaf(xp), &params.vars(&tape3)).unwrap().value();
        for (new_i, &old_i) in perm.iter().enumerate() {
            for j in 0..EMBED_CHANNELS {
                assert_eq!(ep.at2(new_i, j), e.at2(old_i, j));
            }
        }
    }

    #[test]
    fn soft_assignment_single_pedestrian_is_one() {
        let tape = Tape::new();
        let d = tape.leaf(Array::zeros(&[1, 1]));
        let pi = tape.leaf(Array::scalar(1.0));
        let a = soft_assignment(d, pi, 0.1).unwrap().value();
        assert_eq!(a.data(), &[1.0]);
    }

    #[test]
    fn soft_assignment_uniform_for_equal_distances() {
        let tape = Tape::new();
        // all off-diagonal distances equal AND diagonal zero would break
        // uniformity, so test with a fully constant matrix
        let d = tape.leaf(Array::full(&[4, 4], 0.7));
        let pi = tape.leaf(Array::scalar(1.0));
        let a = soft_assignment(d, pi, 0.1).unwrap().value();
        for v in a.data() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn soft_assignment_columns_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let n = rng.gen_range(1..=6);
            let dm = random_symmetric(n, &mut rng);
            let tape = Tape::new();
            let a = soft_assignment(tape.leaf(dm), tape.leaf(Array::scalar(1.0)), 0.1)
                .unwrap()
                .value();
            for j in 0..n {
                let sum: f64 = (0..n).map(|i| a.at2(i, j)).sum();
                assert!((sum - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn soft_assignment_gradient_wrt_pi() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let dm = random_symmetric(4, &mut rng);
        let err = grad_check(
            move |tape, l| {
                let a = soft_assignment(l[0], l[1], 0.5)?;
                // weighted sum so the gradient is not trivially zero
                let w: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
                let wv = tape.leaf(Array::new(vec![4, 4], w).unwrap());
                a.mul(wv)?.sum_all()
            },
            &[dm, Array::scalar(1.0)],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "rel err {err}");
    }

    #[test]
    fn st_features_forward_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let n = rng.gen_range(1..=6);
            let f = rng.gen_range(1..=5);
            let x = Array::new(
                vec![n, f],
                (0..n * f).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            )
            .unwrap();
            let dm = random_symmetric(n, &mut rng);
            let tape = Tape::new();
            let a = soft_assignment(tape.leaf(dm), tape.leaf(Array::scalar(1.0)), 0.1).unwrap();
            let out = st_features(tape.leaf(x.clone()), a).unwrap().value();
            assert!(out.max_abs_diff(&x) <= 1e-12);
        }
    }

    #[test]
    fn st_features_gradient_flows_to_threshold() {
        // through the soft path only: d -> a -> x' -> sum
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let dm = random_symmetric(4, &mut rng);
        let x = Array::new(
            vec![4, 3],
            (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();

        let tape = Tape::new();
        let d = tape.leaf(dm.clone());
        let pi = tape.leaf(Array::scalar(1.0));
        let a = soft_assignment(d, pi, 0.5).unwrap();
        let xv = tape.leaf(x.clone());
        // weight the output so group mixing matters
        let w: Vec<f64> = (0..12).map(|i| (i as f64 * 0.61).cos()).collect();
        let wv = tape.leaf(Array::new(vec![4, 3], w.clone()).unwrap());
        let s = st_features(xv, a)
            .unwrap()
            .mul(wv)
            .unwrap()
            .sum_all()
            .unwrap();
        let grads = tape.backward(s).unwrap();
        assert!(grads.grad(pi).item().abs() > 1e-8);

        // and the finite-difference oracle on the soft path agrees
        let err = grad_check(
            move |t, l| {
                let a = soft_assignment(l[0], l[1], 0.5)?;
                let wv = t.leaf(Array::new(vec![4, 3], w.clone()).unwrap());
                st_features(l[2], a)?.mul(wv)?.sum_all()
            },
            &[dm, Array::scalar(1.0), x],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "rel err {err}");
    }

    #[test]
    fn st_features_gradient_wrt_x_is_soft_mixed_path() {
        // the detached term contributes nothing: d sum(st(x,a)) / dx equals
        // d sum(a'x) / dx
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let dm = random_symmetric(3, &mut rng);
        let x = Array::new(vec![3, 2], (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();

        let tape = Tape::new();
        let a = soft_assignment(tape.leaf(dm.clone()), tape.leaf(Array::scalar(1.0)), 0.1).unwrap();
        let xv = tape.leaf(x.clone());
        let s = st_features(xv, a).unwrap().sum_all().unwrap();
        let g_st = tape.backward(s).unwrap().grad(xv);

        let tape2 = Tape::new();
        let a2 =
            soft_assignment(tape2.leaf(dm), tape2.leaf(Array::scalar(1.0)), 0.1).unwrap();
        let xv2 = tape2.leaf(x);
        let s2 = a2
            .transpose()
            .unwrap()
            .matmul(xv2)
            .unwrap()
            .sum_all()
            .unwrap();
        let g_soft = tape2.backward(s2).unwrap().grad(xv2);

        assert!(g_st.max_abs_diff(&g_soft) <= 1e-12);
    }

    #[test]
    fn supervised_loss_at_threshold_is_ln2() {
        let tape = Tape::new();
        let d = tape.leaf(Array::full(&[3, 3], 1.0));
        let pi = tape.leaf(Array::scalar(1.0));
        let labels = GroupPartition::new(vec![vec![0, 1], vec![2]], 3).unwrap();
        let loss = supervised_group_loss(d, pi, 0.1, &labels).unwrap().value();
        assert!((loss.item() - 2.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn supervised_loss_saturates_on_perfect_separation() {
        let tape = Tape::new();
        let mut dm = Array::full(&[4, 4], 5.0);
        for i in 0..4 {
            dm.set2(i, i, 0.0);
        }
        // group {0,1} and {2,3} tight together, far from each other
        for (i, j) in [(0, 1), (2, 3)] {
            dm.set2(i, j, 0.1);
            dm.set2(j, i, 0.1);
        }
        let labels = GroupPartition::new(vec![vec![0, 1], vec![2, 3]], 4).unwrap();
        let loss = supervised_group_loss(
            tape.leaf(dm),
            tape.leaf(Array::scalar(1.0)),
            0.1,
            &labels,
        )
        .unwrap()
        .value();
        assert!(loss.item() < 0.01, "loss {}", loss.item());
    }

    #[test]
    fn supervised_loss_matches_hand_expansion() {
        // 3 pedestrians, labels {0,1},{2}, distances chosen off-threshold
        let mut dm = Array::zeros(&[3, 3]);
        let entries = [(0, 1, 0.8), (0, 2, 1.4), (1, 2, 1.1)];
        for &(i, j, v) in &entries {
            dm.set2(i, j, v);
            dm.set2(j, i, v);
        }
        let (pi, tau) = (1.0, 0.5);
        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        let mut expected = 0.0;
        for &(i, j, v) in &entries {
            let p = sig((pi - v) / tau);
            let y = if (i, j) == (0, 1) { 1.0 } else { 0.0 };
            expected += -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
        }
        expected /= 3.0;

        let tape = Tape::new();
        let labels = GroupPartition::new(vec![vec![0, 1], vec![2]], 3).unwrap();
        let loss = supervised_group_loss(
            tape.leaf(dm),
            tape.leaf(Array::scalar(pi)),
            tau,
            &labels,
        )
        .unwrap()
        .value();
        assert!((loss.item() - expected).abs() < 1e-9);
    }

    #[test]
    fn supervised_loss_rejects_misaligned_labels() {
        let tape = Tape::new();
        let d = tape.leaf(Array::zeros(&[3, 3]));
        let pi = tape.leaf(Array::scalar(1.0));
        let labels = GroupPartition::singletons(2);
        assert!(matches!(
            supervised_group_loss(d, pi, 0.1, &labels),
            Err(Error::Alignment(_))
        ));
    }

    #[test]
    fn partition_rejects_bad_inputs() {
        assert!(GroupPartition::new(vec![vec![0], vec![0]], 1).is_err());
        assert!(GroupPartition::new(vec![vec![0]], 2).is_err());
        assert!(GroupPartition::new(vec![vec![0], vec![]], 1).is_err());
        assert!(GroupPartition::new(vec![vec![0, 2]], 2).is_err());
    }
}
