//! Command-line entry points: synthesis, training, evaluation, grouping and
//! figure emission. All randomness flows from `--seed`; outputs are
//! byte-deterministic for a given flag set, independent of `--jobs`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::grouping::GroupPartition;
use crate::metrics::{self, TrajectoryScores};
use crate::model::{forward, ForwardOptions, ModelParams};
use crate::numerics::Tape;
use crate::plot::render_window_svg;
use crate::predictor::{best_of_k, sample, sample_slice, GaussianField, SamplingMode};
use crate::synth::{generate, scenario_split_merge, SynthSpec};
use crate::trajectories::{
    make_windows, parse_dataset, write_dataset, GroupLabelSet, TrajectoryWindow,
};
use crate::training::{fit, OptimizerKind, TrainConfig};

#[derive(Parser)]
#[command(
    name = "gpgraph",
    about = "Group-aware multi-modal pedestrian trajectory prediction",
    long_about = None,
    version
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic crowd scenes with ground-truth group labels
    Synth(SynthArgs),
    /// Train grouping and prediction weights on trajectory data
    Train(TrainArgs),
    /// Evaluate a checkpoint: ADE/FDE/COL/TCC over best-of-k sampling
    #[command(after_help = "Output files:\n  \
        eval.csv     CSV `window_id,metric,value` with one row per window and\n               \
        metric (ade, fde, col, tcc)\n  \
        summary.json aggregate means plus the run configuration")]
    Eval(EvalArgs),
    /// Infer group partitions and, given labels, score them
    #[command(after_help = "Output files:\n  \
        groups.txt        one block per window: header line, then one group of\n                    \
        pedestrian ids per line (singletons included)\n  \
        group_scores.csv  with --labels: CSV `window_id,metric,value` rows for\n                    \
        pw_precision, pw_recall, gm_precision, gm_recall\n  \
        group_summary.json with --labels: micro-averaged corpus scores")]
    Group(GroupArgs),
    /// Render one window as an SVG: tracks, groups, sampled futures
    Plot(PlotArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory for scene_XXX.txt and scene_XXX.groups files
    #[arg(long)]
    out: PathBuf,
    /// Number of scenes to generate
    #[arg(long, default_value_t = 20)]
    scenes: usize,
    /// Groups per scene
    #[arg(long, default_value_t = 2)]
    groups: usize,
    #[arg(long, default_value_t = 2)]
    members_min: usize,
    #[arg(long, default_value_t = 3)]
    members_max: usize,
    /// Walking speed range, m/s
    #[arg(long, default_value_t = 0.8)]
    speed_min: f64,
    #[arg(long, default_value_t = 1.4)]
    speed_max: f64,
    /// Heading jitter around evenly spread directions, radians
    #[arg(long, default_value_t = 0.3)]
    heading_jitter: f64,
    /// Lateral spacing between group members, meters
    #[arg(long, default_value_t = 0.5)]
    spacing: f64,
    /// Positional noise sigma, meters
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    /// Frames per scene
    #[arg(long, default_value_t = 20)]
    frames: usize,
    /// Seconds per frame
    #[arg(long, default_value_t = 0.4)]
    frame_stride: f64,
    /// Generate split-and-merge scenes with this divergence factor
    #[arg(long)]
    split_merge: Option<f64>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset file or directory of *.txt files
    #[arg(long)]
    data: PathBuf,
    /// Group label sidecar (defaults to <data stem>.groups per file)
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Output directory for checkpoint.gpg, checkpoint.json, loss_trace.csv
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// adam or sgd
    #[arg(long, default_value = "adam")]
    optimizer: String,
    /// Windows per optimizer step
    #[arg(long, default_value_t = 1)]
    batch: usize,
    /// Add the supervised grouping BCE loss (requires labels)
    #[arg(long)]
    supervised: bool,
    /// Weight of the supervised BCE term
    #[arg(long, default_value_t = 1.0)]
    bce_weight: f64,
    /// Replace the learnable threshold with a 50% node-reduction threshold
    #[arg(long)]
    fixed_ratio: bool,
    #[arg(long, default_value_t = 8)]
    t_obs: usize,
    #[arg(long, default_value_t = 12)]
    t_pred: usize,
    /// Frames between consecutive window starts
    #[arg(long, default_value_t = 1)]
    window_stride: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Samples per window for best-of-k evaluation
    #[arg(long, default_value_t = 20)]
    samples: usize,
    /// Latent sampling mode: scene | pedestrian | group
    #[arg(long, default_value = "group")]
    mode: String,
    /// Collision distance threshold, meters
    #[arg(long, default_value_t = 0.2)]
    col_threshold: f64,
    /// Worker threads for window-level parallelism
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    fixed_ratio: bool,
    #[arg(long, default_value_t = 1)]
    window_stride: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct GroupArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Score partitions against these labels (or per-file sidecars when
    /// --data is a directory)
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    fixed_ratio: bool,
    #[arg(long, default_value_t = 1)]
    window_stride: usize,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output SVG path
    #[arg(long)]
    out: PathBuf,
    /// Which window to draw
    #[arg(long, default_value_t = 0)]
    window: usize,
    #[arg(long, default_value_t = 20)]
    samples: usize,
    #[arg(long, default_value = "group")]
    mode: String,
    #[arg(long)]
    fixed_ratio: bool,
    #[arg(long, default_value_t = 1)]
    window_stride: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Group(args) => cmd_group(args),
        Command::Plot(args) => cmd_plot(args),
    }
}

/// One dataset file with its windows and optional window-aligned labels.
struct LoadedFile {
    name: String,
    windows: Vec<TrajectoryWindow>,
    labels: Option<GroupLabelSet>,
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))
}

fn dataset_paths(data: &Path) -> Result<Vec<PathBuf>> {
    if data.is_dir() {
        let mut paths: Vec<PathBuf> = fs::read_dir(data)
            .map_err(|e| Error::io(data.display().to_string(), e))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.extension().map_or(false, |e| e == "txt"))
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(Error::Usage(format!(
                "no .txt dataset files in {}",
                data.display()
            )));
        }
        Ok(paths)
    } else if data.is_file() {
        Ok(vec![data.to_path_buf()])
    } else {
        Err(Error::Usage(format!(
            "dataset path {} does not exist",
            data.display()
        )))
    }
}

fn load_files(
    data: &Path,
    labels_override: Option<&Path>,
    t_obs: usize,
    t_pred: usize,
    stride: usize,
) -> Result<Vec<LoadedFile>> {
    let paths = dataset_paths(data)?;
    if labels_override.is_some() && paths.len() > 1 {
        return Err(Error::Usage(
            "--labels can only be combined with a single dataset file; use sidecars for directories"
                .into(),
        ));
    }
    let mut files = Vec::new();
    for path in paths {
        let scene = parse_dataset(&read_to_string(&path)?)?;
        let windows = make_windows(&scene, t_obs, t_pred, stride)?;
        let label_path = match labels_override {
            Some(p) => Some(p.to_path_buf()),
            None => {
                let sidecar = path.with_extension("groups");
                sidecar.exists().then_some(sidecar)
            }
        };
        let labels = match label_path {
            Some(p) => Some(GroupLabelSet::parse(&read_to_string(&p)?)?),
            None => None,
        };
        files.push(LoadedFile {
            name: path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| path.display().to_string()),
            windows,
            labels,
        });
    }
    Ok(files)
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path.display().to_string(), e))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path.display().to_string(), e))
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    ensure_dir(&args.out)?;
    for i in 0..args.scenes {
        let spec = SynthSpec {
            groups: args.groups,
            members_min: args.members_min,
            members_max: args.members_max,
            speed_min: args.speed_min,
            speed_max: args.speed_max,
            heading_jitter: args.heading_jitter,
            spacing: args.spacing,
            noise_sigma: args.noise,
            frame_stride_s: args.frame_stride,
            frames: args.frames,
            seed: args.seed.wrapping_add(i as u64),
        };
        let (scene, labels) = match args.split_merge {
            Some(div) => scenario_split_merge(&spec, div)?,
            None => generate(&spec)?,
        };
        write_file(
            &args.out.join(format!("scene_{i:03}.txt")),
            &write_dataset(&scene),
        )?;
        write_file(
            &args.out.join(format!("scene_{i:03}.groups")),
            &labels.render(),
        )?;
    }
    println!("wrote {} scenes to {}", args.scenes, args.out.display());
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let optimizer = match args.optimizer.as_str() {
        "adam" => OptimizerKind::Adam,
        "sgd" => OptimizerKind::Sgd,
        other => {
            return Err(Error::Usage(format!(
                "unknown optimizer `{other}` (expected adam|sgd)"
            )))
        }
    };
    let files = load_files(
        &args.data,
        args.labels.as_deref(),
        args.t_obs,
        args.t_pred,
        args.window_stride,
    )?;
    let mut data: Vec<(TrajectoryWindow, Option<GroupPartition>)> = Vec::new();
    for file in &files {
        for w in &file.windows {
            let part = match &file.labels {
                Some(l) => Some(l.window_partition(&w.ped_ids)?),
                None => None,
            };
            data.push((w.clone(), part));
        }
    }
    if data.is_empty() {
        return Err(Error::Usage("no training windows in the dataset".into()));
    }
    let cfg = TrainConfig {
        epochs: args.epochs,
        learning_rate: args.lr,
        optimizer,
        batch: args.batch,
        nll_weight: 1.0,
        bce_weight: if args.supervised { args.bce_weight } else { 0.0 },
        seed: args.seed,
        fixed_ratio: args.fixed_ratio,
    };
    let result = fit(&data, &cfg)?;

    ensure_dir(&args.out)?;
    checkpoint::save(&args.out.join("checkpoint.gpg"), &result.params)?;
    checkpoint::save_sidecar(&args.out.join("checkpoint.json"), &cfg, &result.loss_trace)?;
    let mut trace_csv = String::from("epoch,loss\n");
    for (e, loss) in result.loss_trace.iter().enumerate() {
        trace_csv.push_str(&format!("{e},{loss:.9}\n"));
    }
    write_file(&args.out.join("loss_trace.csv"), &trace_csv)?;
    println!(
        "trained on {} windows for {} epochs; final loss {:.6}",
        data.len(),
        cfg.epochs,
        result.loss_trace.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

/// Per-window seed: decorrelated from neighbours, independent of --jobs.
fn window_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

struct WindowEval {
    scores: TrajectoryScores,
    partition: GroupPartition,
}

fn eval_window(
    params: &ModelParams,
    window: &TrajectoryWindow,
    mode: SamplingMode,
    count: usize,
    col_threshold: f64,
    seed: u64,
    fixed_ratio: bool,
) -> Result<WindowEval> {
    let tape = Tape::new();
    let vars = params.vars(&tape);
    let opts = ForwardOptions {
        bce_weight: 0.0,
        fixed_ratio,
    };
    let fwd = forward(&tape, window, &vars, None, &opts)?;
    let field = GaussianField::new(fwd.field.value())?;
    let samples = sample(
        &field,
        mode,
        &fwd.partition,
        &window.last_positions(),
        seed,
        count,
    )?;
    let best = best_of_k(&samples, &window.fut);
    let best_track = sample_slice(&samples, best);
    let scores = TrajectoryScores {
        ade: metrics::ade(&best_track, &window.fut)?,
        fde: metrics::fde(&best_track, &window.fut)?,
        col: metrics::col(&samples, col_threshold)?,
        tcc: metrics::tcc(&best_track, &window.fut)?,
    };
    Ok(WindowEval {
        scores,
        partition: fwd.partition,
    })
}

#[derive(Serialize)]
struct EvalSummary {
    windows: usize,
    samples: usize,
    mode: String,
    col_threshold: f64,
    seed: u64,
    ade: f64,
    fde: f64,
    col: f64,
    tcc: f64,
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let mode: SamplingMode = args.mode.parse()?;
    if args.jobs == 0 {
        return Err(Error::Usage("--jobs must be at least 1".into()));
    }
    let params = checkpoint::load(&args.checkpoint)?;
    let files = load_files(
        &args.data,
        None,
        params.t_obs(),
        params.t_pred(),
        args.window_stride,
    )?;
    let windows: Vec<&TrajectoryWindow> =
        files.iter().flat_map(|f| f.windows.iter()).collect();
    if windows.is_empty() {
        return Err(Error::Usage("no evaluation windows in the dataset".into()));
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let results: Vec<Result<WindowEval>> = pool.install(|| {
        windows
            .par_iter()
            .enumerate()
            .map(|(i, w)| {
                eval_window(
                    &params,
                    w,
                    mode,
                    args.samples,
                    args.col_threshold,
                    window_seed(args.seed, i),
                    args.fixed_ratio,
                )
            })
            .collect()
    });

    let mut csv = String::from("window_id,metric,value\n");
    let mut sums = TrajectoryScores::default();
    let mut evaluated = Vec::with_capacity(results.len());
    for (i, r) in results.into_iter().enumerate() {
        let r = r?;
        csv.push_str(&format!("{i},ade,{:.9}\n", r.scores.ade));
        csv.push_str(&format!("{i},fde,{:.9}\n", r.scores.fde));
        csv.push_str(&format!("{i},col,{:.9}\n", r.scores.col));
        csv.push_str(&format!("{i},tcc,{:.9}\n", r.scores.tcc));
        sums.ade += r.scores.ade;
        sums.fde += r.scores.fde;
        sums.col += r.scores.col;
        sums.tcc += r.scores.tcc;
        evaluated.push(r);
    }
    let n = evaluated.len() as f64;
    let summary = EvalSummary {
        windows: evaluated.len(),
        samples: args.samples,
        mode: args.mode.clone(),
        col_threshold: args.col_threshold,
        seed: args.seed,
        ade: sums.ade / n,
        fde: sums.fde / n,
        col: sums.col / n,
        tcc: sums.tcc / n,
    };
    ensure_dir(&args.out)?;
    write_file(&args.out.join("eval.csv"), &csv)?;
    let json = serde_json::to_string_pretty(&summary)
        .map_err(|e| Error::Config(format!("summary serialization: {e}")))?;
    write_file(&args.out.join("summary.json"), &json)?;
    println!(
        "evaluated {} windows: ADE {:.4} FDE {:.4} COL {:.2}% TCC {:.3}",
        summary.windows, summary.ade, summary.fde, summary.col, summary.tcc
    );
    Ok(())
}

#[derive(Serialize)]
struct GroupSummary {
    windows: usize,
    pw_precision: f64,
    pw_recall: f64,
    gm_precision: f64,
    gm_recall: f64,
}

fn cmd_group(args: GroupArgs) -> Result<()> {
    let params = checkpoint::load(&args.checkpoint)?;
    let files = load_files(
        &args.data,
        args.labels.as_deref(),
        params.t_obs(),
        params.t_pred(),
        args.window_stride,
    )?;

    let mut out_text = String::new();
    let mut scores_csv = String::from("window_id,metric,value\n");
    let mut any_labels = false;
    // micro-averaged numerators and denominators across windows
    let (mut pw_both, mut pw_pred, mut pw_gt) = (0usize, 0usize, 0usize);
    let (mut gm_pn, mut gm_pd, mut gm_rn, mut gm_rd) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut window_id = 0usize;
    for file in &files {
        for w in &file.windows {
            let (part, _) = crate::model::infer_partition(w, &params, args.fixed_ratio)?;
            out_text.push_str(&format!(
                "# window {window_id} source {} frame {}\n",
                file.name, w.start_frame
            ));
            for group in part.groups() {
                let ids: Vec<String> = group.iter().map(|&i| w.ped_ids[i].to_string()).collect();
                out_text.push_str(&ids.join(" "));
                out_text.push('\n');
            }
            if let Some(labels) = &file.labels {
                any_labels = true;
                let gt = labels.window_partition(&w.ped_ids)?;
                let (p, r) = metrics::pw_scores(&part, &gt)?;
                let (gp, gr) = metrics::gmitre_scores(&part, &gt)?;
                scores_csv.push_str(&format!("{window_id},pw_precision,{p:.9}\n"));
                scores_csv.push_str(&format!("{window_id},pw_recall,{r:.9}\n"));
                scores_csv.push_str(&format!("{window_id},gm_precision,{gp:.9}\n"));
                scores_csv.push_str(&format!("{window_id},gm_recall,{gr:.9}\n"));
                let (b, pp, gg) = metrics::pw_counts(&part, &gt)?;
                pw_both += b;
                pw_pred += pp;
                pw_gt += gg;
                let (pn, pd, rn, rd) = metrics::gmitre_counts(&part, &gt)?;
                gm_pn += pn;
                gm_pd += pd;
                gm_rn += rn;
                gm_rd += rd;
            }
            window_id += 1;
        }
    }
    if window_id == 0 {
        return Err(Error::Usage("no windows in the dataset".into()));
    }

    ensure_dir(&args.out)?;
    write_file(&args.out.join("groups.txt"), &out_text)?;
    if any_labels {
        let summary = GroupSummary {
            windows: window_id,
            pw_precision: if pw_pred == 0 {
                1.0
            } else {
                pw_both as f64 / pw_pred as f64
            },
            pw_recall: if pw_gt == 0 {
                1.0
            } else {
                pw_both as f64 / pw_gt as f64
            },
            gm_precision: if gm_pd == 0.0 { 1.0 } else { gm_pn / gm_pd },
            gm_recall: if gm_rd == 0.0 { 1.0 } else { gm_rn / gm_rd },
        };
        write_file(&args.out.join("group_scores.csv"), &scores_csv)?;
        let json = serde_json::to_string_pretty(&summary)
            .map_err(|e| Error::Config(format!("summary serialization: {e}")))?;
        write_file(&args.out.join("group_summary.json"), &json)?;
        println!(
            "grouped {} windows: PW {:.3}/{:.3} GM {:.3}/{:.3}",
            summary.windows,
            summary.pw_precision,
            summary.pw_recall,
            summary.gm_precision,
            summary.gm_recall
        );
    } else {
        println!("grouped {window_id} windows (no labels, no scores)");
    }
    Ok(())
}

fn cmd_plot(args: PlotArgs) -> Result<()> {
    let mode: SamplingMode = args.mode.parse()?;
    let params = checkpoint::load(&args.checkpoint)?;
    let files = load_files(
        &args.data,
        None,
        params.t_obs(),
        params.t_pred(),
        args.window_stride,
    )?;
    let windows: Vec<&TrajectoryWindow> =
        files.iter().flat_map(|f| f.windows.iter()).collect();
    let window = windows.get(args.window).copied().ok_or_else(|| {
        Error::Usage(format!(
            "window {} out of range ({} available)",
            args.window,
            windows.len()
        ))
    })?;

    let tape = Tape::new();
    let vars = params.vars(&tape);
    let opts = ForwardOptions {
        bce_weight: 0.0,
        fixed_ratio: args.fixed_ratio,
    };
    let fwd = forward(&tape, window, &vars, None, &opts)?;
    let field = GaussianField::new(fwd.field.value())?;
    let samples = sample(
        &field,
        mode,
        &fwd.partition,
        &window.last_positions(),
        window_seed(args.seed, args.window),
        args.samples,
    )?;
    let svg = render_window_svg(window, &fwd.partition, &samples);
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            ensure_dir(parent)?;
        }
    }
    write_file(&args.out, &svg)?;
    println!(
        "plotted window {} ({} pedestrians, {} groups) to {}",
        args.window,
        window.n(),
        fwd.partition.group_count(),
        args.out.display()
    );
    Ok(())
}
