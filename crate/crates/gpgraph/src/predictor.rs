//! Weight-shared trajectory encoder over the three interaction graphs,
//! group integration into a bivariate Gaussian displacement field, and
//! multi-modal sampling with scene-, pedestrian- or group-level noise.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::grouping::{xavier, GroupPartition, LEAKY_SLOPE};
use crate::hierarchy::InteractionGraph;
use crate::numerics::{Array, Tape, Var};
use crate::trajectories::relative_to_absolute;

/// Channel width of the shared encoder.
pub const ENC_CHANNELS: usize = 16;

/// Gaussian parameters per pedestrian and step: mu_x, mu_y, log sigma_x,
/// log sigma_y, pre-tanh rho.
pub const FIELD_CHANNELS: usize = 5;

const SIGMA_FLOOR: f64 = 1e-6;

/// tanh rounds to exactly ±1.0 beyond |x| ≈ 19; this keeps |rho| < 1
/// strictly so 1 - rho² never reaches zero.
const RHO_SCALE: f64 = 1.0 - 1e-9;

/// All learnable predictor weights. `theta` is one parameter set used for
/// all three graphs; `psi` fuses the branch outputs and extrapolates the
/// time axis from the observation to the prediction horizon.
#[derive(Clone, Debug)]
pub struct PredictorWeights {
    /// Graph conv of the shared encoder, 2 -> 16 channels.
    pub theta_gc_w: Array,
    /// Two temporal convs of the shared encoder, kernel 3.
    pub theta_tc1_w: Array,
    pub theta_tc1_b: Array,
    pub theta_tc2_w: Array,
    pub theta_tc2_b: Array,
    /// 1x1 fusion conv over the concatenated branch channels, 48 -> 16.
    pub psi_fuse_w: Array,
    pub psi_fuse_b: Array,
    /// Dense time extrapolation, T_obs -> T_pred.
    pub psi_time_w: Array,
    pub psi_time_b: Array,
    /// Temporal conv at prediction length, kernel 3.
    pub psi_tc_w: Array,
    pub psi_tc_b: Array,
    /// Output conv emitting the 5 Gaussian channels.
    pub psi_out_w: Array,
    pub psi_out_b: Array,
}

/// Time-extrapolation init: every future step starts as a copy of the last
/// observed step plus small noise, a persistence prior that matches
/// near-constant-velocity walking far better than a random mix of steps.
fn persistence_time_init(rng: &mut ChaCha8Rng, t_obs: usize, t_pred: usize) -> Array {
    let mut w = xavier(rng, &[t_pred, t_obs], t_obs, t_pred);
    for v in w.data_mut().iter_mut() {
        *v *= 0.1;
    }
    for t in 0..t_pred {
        let idx = t * t_obs + (t_obs - 1);
        w.data_mut()[idx] += 1.0;
    }
    w
}

impl PredictorWeights {
    pub fn init(seed: u64, t_obs: usize, t_pred: usize) -> Self {
        let c = ENC_CHANNELS;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PredictorWeights {
            theta_gc_w: xavier(&mut rng, &[2, c], 2, c),
            theta_tc1_w: xavier(&mut rng, &[3, c, c], 3 * c, 3 * c),
            theta_tc1_b: Array::zeros(&[c]),
            theta_tc2_w: xavier(&mut rng, &[3, c, c], 3 * c, 3 * c),
            theta_tc2_b: Array::zeros(&[c]),
            psi_fuse_w: xavier(&mut rng, &[1, 3 * c, c], 3 * c, c),
            psi_fuse_b: Array::zeros(&[c]),
            psi_time_w: persistence_time_init(&mut rng, t_obs, t_pred),
            psi_time_b: Array::zeros(&[t_pred]),
            psi_tc_w: xavier(&mut rng, &[3, c, c], 3 * c, 3 * c),
            psi_tc_b: Array::zeros(&[c]),
            psi_out_w: xavier(&mut rng, &[3, c, FIELD_CHANNELS], 3 * c, 3 * FIELD_CHANNELS),
            psi_out_b: Array::zeros(&[FIELD_CHANNELS]),
        }
    }

    pub fn t_obs(&self) -> usize {
        self.psi_time_w.shape()[1]
    }

    pub fn t_pred(&self) -> usize {
        self.psi_time_w.shape()[0]
    }

    pub fn vars<'t>(&self, tape: &'t Tape) -> PredictorVars<'t> {
        PredictorVars {
            theta_gc_w: tape.leaf(self.theta_gc_w.clone()),
            theta_tc1_w: tape.leaf(self.theta_tc1_w.clone()),
            theta_tc1_b: tape.leaf(self.theta_tc1_b.clone()),
            theta_tc2_w: tape.leaf(self.theta_tc2_w.clone()),
            theta_tc2_b: tape.leaf(self.theta_tc2_b.clone()),
            psi_fuse_w: tape.leaf(self.psi_fuse_w.clone()),
            psi_fuse_b: tape.leaf(self.psi_fuse_b.clone()),
            psi_time_w: tape.leaf(self.psi_time_w.clone()),
            psi_time_b: tape.leaf(self.psi_time_b.clone()),
            psi_tc_w: tape.leaf(self.psi_tc_w.clone()),
            psi_tc_b: tape.leaf(self.psi_tc_b.clone()),
            psi_out_w: tape.leaf(self.psi_out_w.clone()),
            psi_out_b: tape.leaf(self.psi_out_b.clone()),
        }
    }
}

/// Tape handles for [`PredictorWeights`] within one forward pass. The theta
/// handles are created once, so every branch literally shares them.
pub struct PredictorVars<'t> {
    pub theta_gc_w: Var<'t>,
    pub theta_tc1_w: Var<'t>,
    pub theta_tc1_b: Var<'t>,
    pub theta_tc2_w: Var<'t>,
    pub theta_tc2_b: Var<'t>,
    pub psi_fuse_w: Var<'t>,
    pub psi_fuse_b: Var<'t>,
    pub psi_time_w: Var<'t>,
    pub psi_time_b: Var<'t>,
    pub psi_tc_w: Var<'t>,
    pub psi_tc_b: Var<'t>,
    pub psi_out_w: Var<'t>,
    pub psi_out_b: Var<'t>,
}

/// Shared encoder: graph convolution with the normalized adjacency, then two
/// temporal convs. The same theta weights serve whichever graph is passed.
pub fn encode<'t>(g: &InteractionGraph<'t>, w: &PredictorVars<'t>) -> Result<Var<'t>> {
    let h = g
        .node_features
        .graph_conv(&g.normalized, w.theta_gc_w)?
        .smooth_leaky(LEAKY_SLOPE)?;
    let h = h
        .temporal_conv(w.theta_tc1_w, w.theta_tc1_b)?
        .smooth_leaky(LEAKY_SLOPE)?;
    h.temporal_conv(w.theta_tc2_w, w.theta_tc2_b)
}

/// Group integration: concatenate the three agent-aligned feature sets,
/// fuse channels, extrapolate the time axis, and emit the Gaussian field
/// `N×T_pred×5`.
pub fn integrate<'t>(
    agent: Var<'t>,
    member: Var<'t>,
    group_unpooled: Var<'t>,
    w: &PredictorVars<'t>,
) -> Result<Var<'t>> {
    let (sa, sm, sg) = (agent.shape(), member.shape(), group_unpooled.shape());
    if sa != sm || sa != sg {
        return Err(Error::Alignment(format!(
            "integrate expects three aligned N×T×C feature sets, got {sa:?} / {sm:?} / {sg:?}"
        )));
    }
    let cat = Var::concat_channels(&[agent, member, group_unpooled])?;
    let fused = cat
        .temporal_conv(w.psi_fuse_w, w.psi_fuse_b)?
        .smooth_leaky(LEAKY_SLOPE)?;
    let extended = fused
        .time_linear(w.psi_time_w, w.psi_time_b)?
        .smooth_leaky(LEAKY_SLOPE)?;
    let h = extended
        .temporal_conv(w.psi_tc_w, w.psi_tc_b)?
        .smooth_leaky(LEAKY_SLOPE)?;
    h.temporal_conv(w.psi_out_w, w.psi_out_b)
}

/// Per-pedestrian, per-step bivariate Gaussian displacement distribution.
/// Raw storage; activations (`exp` for sigma, `tanh` for rho) are applied on
/// access, so sigma > 0 and |rho| < 1 always hold.
#[derive(Clone, Debug)]
pub struct GaussianField {
    pub params: Array,
}

impl GaussianField {
    pub fn new(params: Array) -> Result<Self> {
        if params.shape().len() != 3 || params.shape()[2] != FIELD_CHANNELS {
            return Err(Error::Dimension {
                op: "GaussianField",
                lhs: params.shape().to_vec(),
                rhs: vec![0, 0, FIELD_CHANNELS],
            });
        }
        Ok(GaussianField { params })
    }

    pub fn n(&self) -> usize {
        self.params.shape()[0]
    }

    pub fn t_pred(&self) -> usize {
        self.params.shape()[1]
    }

    pub fn mean(&self, i: usize, t: usize) -> (f64, f64) {
        (self.params.at3(i, t, 0), self.params.at3(i, t, 1))
    }

    pub fn sigma(&self, i: usize, t: usize) -> (f64, f64) {
        (
            self.params.at3(i, t, 2).exp(),
            self.params.at3(i, t, 3).exp(),
        )
    }

    pub fn rho(&self, i: usize, t: usize) -> f64 {
        self.params.at3(i, t, 4).tanh() * RHO_SCALE
    }
}

/// Negative log-likelihood of ground-truth displacements under the field,
/// averaged over pedestrians and steps. Built from tape primitives so it is
/// differentiable end to end.
pub fn nll_loss<'t>(field: Var<'t>, fut_rel: Var<'t>) -> Result<Var<'t>> {
    let fs = field.shape();
    let ts = fut_rel.shape();
    if fs.len() != 3 || ts.len() != 3 || fs[0] != ts[0] || fs[1] != ts[1] || fs[2] != FIELD_CHANNELS
    {
        return Err(Error::Dimension {
            op: "nll_loss",
            lhs: fs,
            rhs: ts,
        });
    }
    let mx = field.slice_channels(0, 1)?;
    let my = field.slice_channels(1, 2)?;
    let lsx = field.slice_channels(2, 3)?;
    let lsy = field.slice_channels(3, 4)?;
    let rho = field.slice_channels(4, 5)?.tanh()?.scale(RHO_SCALE)?;
    let tx = fut_rel.slice_channels(0, 1)?;
    let ty = fut_rel.slice_channels(1, 2)?;

    let zx = tx.sub(mx)?.div(lsx.exp()?)?;
    let zy = ty.sub(my)?.div(lsy.exp()?)?;
    // 1 - rho^2, strictly positive because |tanh| < 1
    let omr = rho.mul(rho)?.neg()?.add_const(1.0)?;
    let cross = rho.mul(zx.mul(zy)?)?.scale(2.0)?;
    let quad = zx.mul(zx)?.add(zy.mul(zy)?)?.sub(cross)?;

    let log_norm = lsx.add(lsy)?.add(omr.ln()?.scale(0.5)?)?;
    let point = log_norm
        .add(quad.div(omr.scale(2.0)?)?)?
        .add_const((2.0 * std::f64::consts::PI).ln())?;
    point.mean_all()
}

/// Which pedestrians share one latent noise sequence when sampling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplingMode {
    /// Everyone in the scene shares one noise sequence.
    SceneLevel,
    /// Independent noise per pedestrian.
    PedestrianLevel,
    /// One noise sequence per group, shared by its members and independent
    /// across groups.
    GroupLevel,
}

impl std::str::FromStr for SamplingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scene" => Ok(SamplingMode::SceneLevel),
            "pedestrian" => Ok(SamplingMode::PedestrianLevel),
            "group" => Ok(SamplingMode::GroupLevel),
            other => Err(Error::Usage(format!(
                "unknown sampling mode `{other}` (expected scene|pedestrian|group)"
            ))),
        }
    }
}

/// Standardized 2-D noise for one (sample, unit) pair. Independent ChaCha
/// streams keep draws reproducible and independent of thread scheduling.
pub(crate) fn noise_sequence(seed: u64, sample: usize, unit: usize, t: usize) -> Vec<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((sample as u64) << 32) | unit as u64);
    (0..t)
        .map(|_| {
            (
                StandardNormal.sample(&mut rng),
                StandardNormal.sample(&mut rng),
            )
        })
        .collect()
}

/// Draw `count` multi-modal futures as absolute trajectories
/// (`count×N×T_pred×2`). Displacement noise is transformed through the
/// Cholesky factor of each step's 2x2 covariance, cumulative-summed, and
/// anchored at the last observed positions.
pub fn sample(
    field: &GaussianField,
    mode: SamplingMode,
    part: &GroupPartition,
    last_obs: &Array,
    seed: u64,
    count: usize,
) -> Result<Array> {
    let (n, t) = (field.n(), field.t_pred());
    if count < 1 {
        return Err(Error::Usage("sample count must be at least 1".into()));
    }
    if last_obs.shape() != [n, 2] {
        return Err(Error::Dimension {
            op: "sample last_obs",
            lhs: last_obs.shape().to_vec(),
            rhs: vec![n, 2],
        });
    }
    if mode == SamplingMode::GroupLevel && part.len() != n {
        return Err(Error::Usage(format!(
            "group-level sampling needs a partition over {n} pedestrians, got {}",
            part.len()
        )));
    }
    let mut out = Array::zeros(&[count, n, t, 2]);
    for s in 0..count {
        // one noise sequence per unit, reused by every pedestrian mapped to it
        let unit_of = |i: usize| -> usize {
            match mode {
                SamplingMode::SceneLevel => 0,
                SamplingMode::PedestrianLevel => i,
                SamplingMode::GroupLevel => part.member_of(i),
            }
        };
        let units = match mode {
            SamplingMode::SceneLevel => 1,
            SamplingMode::PedestrianLevel => n,
            SamplingMode::GroupLevel => part.group_count(),
        };
        let noise: Vec<Vec<(f64, f64)>> = (0..units)
            .map(|u| noise_sequence(seed, s, u, t))
            .collect();
        let mut rel = Array::zeros(&[n, t, 2]);
        for i in 0..n {
            let eps = &noise[unit_of(i)];
            for step in 0..t {
                let (mx, my) = field.mean(i, step);
                let (sx, sy) = field.sigma(i, step);
                let (sx, sy) = (sx.max(SIGMA_FLOOR), sy.max(SIGMA_FLOOR));
                let rho = field.rho(i, step);
                let (ex, ey) = eps[step];
                // Cholesky of [[sx², rho·sx·sy], [rho·sx·sy, sy²]]
                let dx = mx + sx * ex;
                let dy = my + sy * (rho * ex + (1.0 - rho * rho).sqrt() * ey);
                rel.set3(i, step, 0, dx);
                rel.set3(i, step, 1, dy);
            }
        }
        let abs = relative_to_absolute(&rel, last_obs);
        for i in 0..n {
            for step in 0..t {
                for c in 0..2 {
                    out.data_mut()[(((s * n) + i) * t + step) * 2 + c] = abs.at3(i, step, c);
                }
            }
        }
    }
    Ok(out)
}

/// Index of the sample with the lowest average displacement error against
/// the ground truth; ties resolve to the first.
pub fn best_of_k(samples: &Array, fut: &Array) -> usize {
    let (count, n, t) = (samples.shape()[0], samples.shape()[1], samples.shape()[2]);
    debug_assert_eq!(fut.shape(), [n, t, 2]);
    let mut best = 0;
    let mut best_err = f64::INFINITY;
    for s in 0..count {
        let mut err = 0.0;
        for i in 0..n {
            for step in 0..t {
                let dx = samples.data()[(((s * n) + i) * t + step) * 2] - fut.at3(i, step, 0);
                let dy = samples.data()[(((s * n) + i) * t + step) * 2 + 1] - fut.at3(i, step, 1);
                err += (dx * dx + dy * dy).sqrt();
            }
        }
        if err < best_err {
            best_err = err;
            best = s;
        }
    }
    best
}

/// Extract one sample as an `N×T×2` array.
pub fn sample_slice(samples: &Array, index: usize) -> Array {
    let (n, t) = (samples.shape()[1], samples.shape()[2]);
    let stride = n * t * 2;
    Array::new(
        vec![n, t, 2],
        samples.data()[index * stride..(index + 1) * stride].to_vec(),
    )
    .expect("contiguous slice")
}
