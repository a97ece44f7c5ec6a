//! Trajectory datasets: parsing, observation/prediction windowing, and
//! absolute/relative coordinate conversion.
//!
//! Input format is the plain 4-column text used by the public benchmark
//! releases: `frame ped x y` in world meters, whitespace separated. Group
//! labels ride in a sidecar file, one group of pedestrian ids per line,
//! singletons omitted.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::grouping::GroupPartition;
use crate::numerics::Array;

/// One line of a dataset file.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RawRecord {
    pub frame: i64,
    pub ped: i64,
    pub x: f64,
    pub y: f64,
}

/// A full recording: the ordered frame ids (constant stride) and one
/// frame-indexed track per pedestrian.
#[derive(Clone, Debug)]
pub struct Scene {
    frames: Vec<i64>,
    stride: i64,
    tracks: BTreeMap<i64, BTreeMap<i64, (f64, f64)>>,
}

impl Scene {
    pub fn from_records(records: &[RawRecord]) -> Result<Self> {
        let mut tracks: BTreeMap<i64, BTreeMap<i64, (f64, f64)>> = BTreeMap::new();
        let mut frame_set: std::collections::BTreeSet<i64> = Default::default();
        for r in records {
            frame_set.insert(r.frame);
            if tracks
                .entry(r.ped)
                .or_default()
                .insert(r.frame, (r.x, r.y))
                .is_some()
            {
                return Err(Error::Format(format!(
                    "duplicate (frame, ped) pair ({}, {})",
                    r.frame, r.ped
                )));
            }
        }
        let frames: Vec<i64> = frame_set.into_iter().collect();
        let stride = match frames.len() {
            0 | 1 => 1,
            _ => {
                let s = frames[1] - frames[0];
                for w in frames.windows(2) {
                    if w[1] - w[0] != s {
                        return Err(Error::Format(format!(
                            "non-uniform frame stride: {} after {} (expected stride {s})",
                            w[1], w[0]
                        )));
                    }
                }
                s
            }
        };
        Ok(Scene {
            frames,
            stride,
            tracks,
        })
    }

    pub fn frames(&self) -> &[i64] {
        &self.frames
    }

    pub fn frame_stride(&self) -> i64 {
        self.stride
    }

    pub fn ped_ids(&self) -> Vec<i64> {
        self.tracks.keys().copied().collect()
    }

    pub fn position(&self, ped: i64, frame: i64) -> Option<(f64, f64)> {
        self.tracks.get(&ped).and_then(|t| t.get(&frame)).copied()
    }

    pub fn records(&self) -> Vec<RawRecord> {
        let mut out = Vec::new();
        for &frame in &self.frames {
            for (&ped, track) in &self.tracks {
                if let Some(&(x, y)) = track.get(&frame) {
                    out.push(RawRecord { frame, ped, x, y });
                }
            }
        }
        out
    }
}

/// One scene slice: N pedestrians observed for `t_obs` frames with `t_pred`
/// ground-truth future frames. Every pedestrian is present at all
/// `t_obs + t_pred` frames.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryWindow {
    pub ped_ids: Vec<i64>,
    /// Observed absolute positions, `N×t_obs×2` meters.
    pub obs: Array,
    /// Ground-truth future absolute positions, `N×t_pred×2` meters.
    pub fut: Array,
    /// First observed frame id, for reporting.
    pub start_frame: i64,
}

impl TrajectoryWindow {
    pub fn n(&self) -> usize {
        self.ped_ids.len()
    }

    pub fn t_obs(&self) -> usize {
        self.obs.shape()[1]
    }

    pub fn t_pred(&self) -> usize {
        self.fut.shape()[1]
    }

    /// Last observed absolute position per pedestrian, `N×2`.
    pub fn last_positions(&self) -> Array {
        let (n, t) = (self.n(), self.t_obs());
        let mut out = Array::zeros(&[n, 2]);
        for i in 0..n {
            out.set2(i, 0, self.obs.at3(i, t - 1, 0));
            out.set2(i, 1, self.obs.at3(i, t - 1, 1));
        }
        out
    }
}

/// Parse the 4-column text format. Lines must hold `frame ped x y`; frame
/// and pedestrian ids must be integral values.
pub fn parse_dataset(text: &str) -> Result<Scene> {
    let mut records = Vec::new();
    let mut seen: std::collections::HashSet<(i64, i64)> = Default::default();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected 4 fields `frame ped x y`, got {}", fields.len()),
            });
        }
        let nums: Vec<f64> = fields
            .iter()
            .map(|f| {
                f.parse::<f64>().map_err(|_| Error::Parse {
                    line: line_no,
                    msg: format!("`{f}` is not a number"),
                })
            })
            .collect::<Result<_>>()?;
        let as_int = |v: f64, what: &str| -> Result<i64> {
            if v.fract() != 0.0 || !v.is_finite() {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("{what} must be an integer, got {v}"),
                });
            }
            Ok(v as i64)
        };
        let frame = as_int(nums[0], "frame id")?;
        let ped = as_int(nums[1], "pedestrian id")?;
        if !seen.insert((frame, ped)) {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("duplicate (frame, ped) pair ({frame}, {ped})"),
            });
        }
        records.push(RawRecord {
            frame,
            ped,
            x: nums[2],
            y: nums[3],
        });
    }
    Scene::from_records(&records)
}

/// Render a scene back to the 4-column text format (frames ascending, then
/// pedestrian ids).
pub fn write_dataset(scene: &Scene) -> String {
    let mut out = String::new();
    for r in scene.records() {
        out.push_str(&format!("{} {} {:.6} {:.6}\n", r.frame, r.ped, r.x, r.y));
    }
    out
}

/// Slice a scene into windows. One window per start index at the given
/// stride; pedestrians must be present at every one of the `t_obs + t_pred`
/// frames to be included; windows with no pedestrians are dropped.
pub fn make_windows(
    scene: &Scene,
    t_obs: usize,
    t_pred: usize,
    stride: usize,
) -> Result<Vec<TrajectoryWindow>> {
    if t_obs < 1 || t_pred < 1 || stride < 1 {
        return Err(Error::Config(
            "t_obs, t_pred and stride must all be at least 1".into(),
        ));
    }
    let total = t_obs + t_pred;
    let frames = scene.frames();
    let mut windows = Vec::new();
    if frames.len() < total {
        return Ok(windows);
    }
    let mut start = 0;
    while start + total <= frames.len() {
        let span = &frames[start..start + total];
        let ped_ids: Vec<i64> = scene
            .ped_ids()
            .into_iter()
            .filter(|&p| span.iter().all(|&f| scene.position(p, f).is_some()))
            .collect();
        if !ped_ids.is_empty() {
            let n = ped_ids.len();
            let mut obs = Array::zeros(&[n, t_obs, 2]);
            let mut fut = Array::zeros(&[n, t_pred, 2]);
            for (i, &p) in ped_ids.iter().enumerate() {
                for (t, &f) in span.iter().enumerate() {
                    let (x, y) = scene.position(p, f).expect("presence checked above");
                    if t < t_obs {
                        obs.set3(i, t, 0, x);
                        obs.set3(i, t, 1, y);
                    } else {
                        fut.set3(i, t - t_obs, 0, x);
                        fut.set3(i, t - t_obs, 1, y);
                    }
                }
            }
            windows.push(TrajectoryWindow {
                ped_ids,
                obs,
                fut,
                start_frame: span[0],
            });
        }
        start += stride;
    }
    Ok(windows)
}

/// Per-step displacements of the observed track. Step 0 is the zero vector;
/// cumulative-summing the output and adding the first absolute position
/// reconstructs the input exactly.
pub fn to_relative(w: &TrajectoryWindow) -> Array {
    displacements(&w.obs, None)
}

/// Displacements of the future track, anchored at the last observed
/// position so that cumulative sums reconstruct absolute futures.
pub fn future_relative(w: &TrajectoryWindow) -> Array {
    displacements(&w.fut, Some(&w.last_positions()))
}

fn displacements(abs: &Array, anchor: Option<&Array>) -> Array {
    let (n, t) = (abs.shape()[0], abs.shape()[1]);
    let mut rel = Array::zeros(&[n, t, 2]);
    for i in 0..n {
        for s in 0..t {
            for c in 0..2 {
                let prev = if s == 0 {
                    match anchor {
                        Some(a) => a.at2(i, c),
                        None => abs.at3(i, 0, c),
                    }
                } else {
                    abs.at3(i, s - 1, c)
                };
                rel.set3(i, s, c, abs.at3(i, s, c) - prev);
            }
        }
    }
    rel
}

/// Inverse of [`to_relative`]: cumulative-sum displacements from the given
/// anchor positions (`N×2`).
pub fn relative_to_absolute(rel: &Array, anchor: &Array) -> Array {
    let (n, t) = (rel.shape()[0], rel.shape()[1]);
    let mut abs = Array::zeros(&[n, t, 2]);
    for i in 0..n {
        let mut x = anchor.at2(i, 0);
        let mut y = anchor.at2(i, 1);
        for s in 0..t {
            x += rel.at3(i, s, 0);
            y += rel.at3(i, s, 1);
            abs.set3(i, s, 0, x);
            abs.set3(i, s, 1, y);
        }
    }
    abs
}

/// Ground-truth grouping for a scene, in pedestrian ids. Pedestrians in no
/// listed group are singletons.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GroupLabelSet {
    groups: Vec<Vec<i64>>,
}

impl GroupLabelSet {
    pub fn new(groups: Vec<Vec<i64>>) -> Self {
        GroupLabelSet { groups }
    }

    pub fn groups(&self) -> &[Vec<i64>] {
        &self.groups
    }

    /// Parse the sidecar format: one group per line, space-separated ids.
    pub fn parse(text: &str) -> Result<Self> {
        let mut groups = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let ids: Vec<i64> = line
                .split_whitespace()
                .map(|f| {
                    f.parse::<i64>().map_err(|_| Error::Parse {
                        line: idx + 1,
                        msg: format!("`{f}` is not a pedestrian id"),
                    })
                })
                .collect::<Result<_>>()?;
            groups.push(ids);
        }
        Ok(GroupLabelSet { groups })
    }

    /// Render to the sidecar format, omitting singletons.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for g in &self.groups {
            if g.len() < 2 {
                continue;
            }
            let ids: Vec<String> = g.iter().map(|i| i.to_string()).collect();
            out.push_str(&ids.join(" "));
            out.push('\n');
        }
        out
    }

    /// Restrict the labels to a window's pedestrians, yielding a partition
    /// over window indices. Unlisted pedestrians become singletons.
    pub fn window_partition(&self, ped_ids: &[i64]) -> Result<GroupPartition> {
        let index_of: BTreeMap<i64, usize> = ped_ids
            .iter()
            .enumerate()
            .map(|(i, &p)| (p, i))
            .collect();
        let mut assigned = vec![false; ped_ids.len()];
        let mut groups = Vec::new();
        for g in &self.groups {
            let members: Vec<usize> = g.iter().filter_map(|p| index_of.get(p).copied()).collect();
            for &m in &members {
                if assigned[m] {
                    return Err(Error::Alignment(format!(
                        "pedestrian {} appears in two labeled groups",
                        ped_ids[m]
                    )));
                }
                assigned[m] = true;
            }
            if !members.is_empty() {
                groups.push(members);
            }
        }
        for (i, done) in assigned.iter().enumerate() {
            if !done {
                groups.push(vec![i]);
            }
        }
        GroupPartition::new(groups, ped_ids.len())
    }
}

const CACHE_VERSION: u8 = 1;

/// Serialize windows to the length-prefixed binary cache.
pub fn write_windows_cache<W: Write>(mut w: W, windows: &[TrajectoryWindow]) -> Result<()> {
    let io = |e| Error::io("<windows cache>", e);
    w.write_all(&[CACHE_VERSION]).map_err(io)?;
    w.write_all(&(windows.len() as u32).to_le_bytes()).map_err(io)?;
    for win in windows {
        w.write_all(&(win.n() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(&(win.t_obs() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(&(win.t_pred() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(&win.start_frame.to_le_bytes()).map_err(io)?;
        for &p in &win.ped_ids {
            w.write_all(&p.to_le_bytes()).map_err(io)?;
        }
        for &v in win.obs.data().iter().chain(win.fut.data()) {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    Ok(())
}

/// Deserialize windows from the binary cache.
pub fn read_windows_cache<R: Read>(mut r: R) -> Result<Vec<TrajectoryWindow>> {
    let io = |e| Error::io("<windows cache>", e);
    let mut u8buf = [0u8; 1];
    r.read_exact(&mut u8buf).map_err(io)?;
    if u8buf[0] != CACHE_VERSION {
        return Err(Error::Format(format!(
            "unsupported cache version {}",
            u8buf[0]
        )));
    }
    let mut u32buf = [0u8; 4];
    let mut u64buf = [0u8; 8];
    let mut read_u32 = |r: &mut R| -> Result<u32> {
        r.read_exact(&mut u32buf).map_err(io)?;
        Ok(u32::from_le_bytes(u32buf))
    };
    let count = read_u32(&mut r)?;
    let mut windows = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let n = read_u32(&mut r)? as usize;
        let t_obs = read_u32(&mut r)? as usize;
        let t_pred = read_u32(&mut r)? as usize;
        r.read_exact(&mut u64buf).map_err(io)?;
        let start_frame = i64::from_le_bytes(u64buf);
        let mut ped_ids = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut u64buf).map_err(io)?;
            ped_ids.push(i64::from_le_bytes(u64buf));
        }
        let mut read_array = |shape: &[usize]| -> Result<Array> {
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                r.read_exact(&mut u64buf).map_err(io)?;
                data.push(f64::from_le_bytes(u64buf));
            }
            Array::new(shape.to_vec(), data)
        };
        let obs = read_array(&[n, t_obs, 2])?;
        let fut = read_array(&[n, t_pred, 2])?;
        windows.push(TrajectoryWindow {
            ped_ids,
            obs,
            fut,
            start_frame,
        });
    }
    Ok(windows)
}
