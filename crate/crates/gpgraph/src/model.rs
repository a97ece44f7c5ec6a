//! The assembled model: group assignment feeding the three-graph hierarchy
//! feeding the weight-shared predictor, with one loss at the end.
//!
//! The hard partition built from the current threshold drives pooling
//! structure; the straight-through features splice the soft assignment into
//! the backward pass, so the embedding and the threshold train from the
//! trajectory loss alone. Raw trajectories feed the agent-wise and
//! intra-group branches; the straight-through features feed group pooling.

use crate::error::{Error, Result};
use crate::grouping::{
    self, assign_groups, fixed_ratio_threshold, GroupParams, GroupPartition, GroupVars,
};
use crate::hierarchy::{group_graph, group_pool, group_unpool, member_graph, ped_graph, pool_positions};
use crate::numerics::{Array, Tape, Var};
use crate::predictor::{encode, integrate, nll_loss, PredictorVars, PredictorWeights};
use crate::trajectories::{future_relative, to_relative, TrajectoryWindow};

/// Every learnable tensor in the pipeline, plus the fixed temperature.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub group: GroupParams,
    pub predictor: PredictorWeights,
}

impl ModelParams {
    pub fn init(seed: u64, t_obs: usize, t_pred: usize) -> Self {
        ModelParams {
            group: GroupParams::init(seed),
            predictor: PredictorWeights::init(seed.wrapping_add(0x9E37_79B9), t_obs, t_pred),
        }
    }

    pub fn t_obs(&self) -> usize {
        self.predictor.t_obs()
    }

    pub fn t_pred(&self) -> usize {
        self.predictor.t_pred()
    }

    /// Named tensors in checkpoint order. Includes pi and tau.
    pub fn named(&self) -> Vec<(&'static str, Array)> {
        let g = &self.group;
        let p = &self.predictor;
        vec![
            ("group.conv1_w", g.conv1_w.clone()),
            ("group.conv1_b", g.conv1_b.clone()),
            ("group.conv2_w", g.conv2_w.clone()),
            ("group.conv2_b", g.conv2_b.clone()),
            ("group.pi", g.pi.clone()),
            ("group.tau", Array::scalar(g.tau)),
            ("theta.gc_w", p.theta_gc_w.clone()),
            ("theta.tc1_w", p.theta_tc1_w.clone()),
            ("theta.tc1_b", p.theta_tc1_b.clone()),
            ("theta.tc2_w", p.theta_tc2_w.clone()),
            ("theta.tc2_b", p.theta_tc2_b.clone()),
            ("psi.fuse_w", p.psi_fuse_w.clone()),
            ("psi.fuse_b", p.psi_fuse_b.clone()),
            ("psi.time_w", p.psi_time_w.clone()),
            ("psi.time_b", p.psi_time_b.clone()),
            ("psi.tc_w", p.psi_tc_w.clone()),
            ("psi.tc_b", p.psi_tc_b.clone()),
            ("psi.out_w", p.psi_out_w.clone()),
            ("psi.out_b", p.psi_out_b.clone()),
        ]
    }

    /// Rebuild from named tensors (checkpoint loading).
    pub fn from_named(tensors: &[(String, Array)]) -> Result<Self> {
        let get = |name: &str| -> Result<Array> {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, a)| a.clone())
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
        };
        let params = ModelParams {
            group: GroupParams {
                conv1_w: get("group.conv1_w")?,
                conv1_b: get("group.conv1_b")?,
                conv2_w: get("group.conv2_w")?,
                conv2_b: get("group.conv2_b")?,
                pi: get("group.pi")?,
                tau: get("group.tau")?.item(),
            },
            predictor: PredictorWeights {
                theta_gc_w: get("theta.gc_w")?,
                theta_tc1_w: get("theta.tc1_w")?,
                theta_tc1_b: get("theta.tc1_b")?,
                theta_tc2_w: get("theta.tc2_w")?,
                theta_tc2_b: get("theta.tc2_b")?,
                psi_fuse_w: get("psi.fuse_w")?,
                psi_fuse_b: get("psi.fuse_b")?,
                psi_time_w: get("psi.time_w")?,
                psi_time_b: get("psi.time_b")?,
                psi_tc_w: get("psi.tc_w")?,
                psi_tc_b: get("psi.tc_b")?,
                psi_out_w: get("psi.out_w")?,
                psi_out_b: get("psi.out_b")?,
            },
        };
        if params.group.tau <= 0.0 {
            return Err(Error::Checkpoint(format!(
                "tau must be positive, got {}",
                params.group.tau
            )));
        }
        Ok(params)
    }

    /// Names of tensors updated by the optimizer (everything but tau).
    pub fn trainable_names() -> &'static [&'static str] {
        &[
            "group.conv1_w",
            "group.conv1_b",
            "group.conv2_w",
            "group.conv2_b",
            "group.pi",
            "theta.gc_w",
            "theta.tc1_w",
            "theta.tc1_b",
            "theta.tc2_w",
            "theta.tc2_b",
            "psi.fuse_w",
            "psi.fuse_b",
            "psi.time_w",
            "psi.time_b",
            "psi.tc_w",
            "psi.tc_b",
            "psi.out_w",
            "psi.out_b",
        ]
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Array> {
        let g = &mut self.group;
        let p = &mut self.predictor;
        Some(match name {
            "group.conv1_w" => &mut g.conv1_w,
            "group.conv1_b" => &mut g.conv1_b,
            "group.conv2_w" => &mut g.conv2_w,
            "group.conv2_b" => &mut g.conv2_b,
            "group.pi" => &mut g.pi,
            "theta.gc_w" => &mut p.theta_gc_w,
            "theta.tc1_w" => &mut p.theta_tc1_w,
            "theta.tc1_b" => &mut p.theta_tc1_b,
            "theta.tc2_w" => &mut p.theta_tc2_w,
            "theta.tc2_b" => &mut p.theta_tc2_b,
            "psi.fuse_w" => &mut p.psi_fuse_w,
            "psi.fuse_b" => &mut p.psi_fuse_b,
            "psi.time_w" => &mut p.psi_time_w,
            "psi.time_b" => &mut p.psi_time_b,
            "psi.tc_w" => &mut p.psi_tc_w,
            "psi.tc_b" => &mut p.psi_tc_b,
            "psi.out_w" => &mut p.psi_out_w,
            "psi.out_b" => &mut p.psi_out_b,
            _ => return None,
        })
    }

    pub fn vars<'t>(&self, tape: &'t Tape) -> ModelVars<'t> {
        ModelVars {
            group: self.group.vars(tape),
            predictor: self.predictor.vars(tape),
        }
    }
}

/// Tape handles for all parameters within one forward pass.
pub struct ModelVars<'t> {
    pub group: GroupVars<'t>,
    pub predictor: PredictorVars<'t>,
}

impl<'t> ModelVars<'t> {
    /// Handles in [`ModelParams::trainable_names`] order, for gradient
    /// collection.
    pub fn trainable(&self) -> Vec<Var<'t>> {
        let g = &self.group;
        let p = &self.predictor;
        vec![
            g.conv1_w,
            g.conv1_b,
            g.conv2_w,
            g.conv2_b,
            g.pi,
            p.theta_gc_w,
            p.theta_tc1_w,
            p.theta_tc1_b,
            p.theta_tc2_w,
            p.theta_tc2_b,
            p.psi_fuse_w,
            p.psi_fuse_b,
            p.psi_time_w,
            p.psi_time_b,
            p.psi_tc_w,
            p.psi_tc_b,
            p.psi_out_w,
            p.psi_out_b,
        ]
    }
}

/// Forward-pass switches.
#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    /// Weight of the supervised grouping BCE term (0 disables it).
    pub bce_weight: f64,
    /// Replace the learnable threshold with the per-scene value that halves
    /// the node count.
    pub fixed_ratio: bool,
}

/// Everything a training step or an evaluation pass needs from one forward.
pub struct ForwardPass<'t> {
    /// Hard partition used for pooling structure.
    pub partition: GroupPartition,
    /// Embedding distance matrix (values).
    pub distance: Array,
    /// Threshold that produced the partition.
    pub threshold: f64,
    /// Gaussian field, `N×T_pred×5` raw parameters.
    pub field: Var<'t>,
    /// Trajectory negative log-likelihood.
    pub nll: Var<'t>,
    /// Total training loss (nll plus weighted BCE when enabled).
    pub loss: Var<'t>,
}

/// Run the whole pipeline on one window.
pub fn forward<'t>(
    tape: &'t Tape,
    window: &TrajectoryWindow,
    vars: &ModelVars<'t>,
    labels: Option<&GroupPartition>,
    opts: &ForwardOptions,
) -> Result<ForwardPass<'t>> {
    let n = window.n();
    let t_obs = window.t_obs();
    let obs_rel = tape.leaf(to_relative(window));

    // group assignment
    let emb = grouping::embed(obs_rel, &vars.group)?;
    let dist = grouping::pairwise_distance(emb)?;
    let distance = dist.value();
    let (threshold, pi_soft) = if opts.fixed_ratio {
        let thr = fixed_ratio_threshold(&distance);
        (thr, tape.leaf(Array::scalar(thr)))
    } else {
        (vars.group.pi.value().item(), vars.group.pi)
    };
    let partition = assign_groups(&distance, threshold);
    let soft = grouping::soft_assignment(dist, pi_soft, vars.group.tau)?;

    // straight-through features feed the pooling branch
    let flat = obs_rel.reshape(&[n, t_obs * 2])?;
    let st = grouping::st_features(flat, soft)?.reshape(&[n, t_obs, 2])?;

    // hierarchy
    let g_ped = ped_graph(&window.obs, obs_rel)?;
    let g_member = member_graph(&g_ped, &partition)?;
    let pooled = group_pool(st, &partition)?;
    let group_positions = pool_positions(&window.obs, &partition);
    let g_group = group_graph(&group_positions, pooled)?;

    // weight-shared encoding and integration
    let enc_agent = encode(&g_ped, &vars.predictor)?;
    let enc_member = encode(&g_member, &vars.predictor)?;
    let enc_group = encode(&g_group, &vars.predictor)?;
    let enc_group_agentwise = group_unpool(enc_group, &partition)?;
    let field = integrate(enc_agent, enc_member, enc_group_agentwise, &vars.predictor)?;

    // losses
    let fut_rel = tape.leaf(future_relative(window));
    let nll = nll_loss(field, fut_rel)?;
    let loss = if opts.bce_weight != 0.0 {
        let labels = labels.ok_or_else(|| {
            Error::Usage("supervised grouping loss requested without labels".into())
        })?;
        let bce = grouping::supervised_group_loss(dist, pi_soft, vars.group.tau, labels)?;
        nll.add(bce.scale(opts.bce_weight)?)?
    } else {
        nll
    };

    Ok(ForwardPass {
        partition,
        distance,
        threshold,
        field,
        nll,
        loss,
    })
}

/// Grouping-only inference for a window (no predictor work).
pub fn infer_partition(
    window: &TrajectoryWindow,
    params: &ModelParams,
    fixed_ratio: bool,
) -> Result<(GroupPartition, Array)> {
    grouping::infer_partition(&to_relative(window), &params.group, fixed_ratio)
}
