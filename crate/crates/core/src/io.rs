//! On-disk formats: map and scene dumps, pose import, traces, ablation
//! tables. CSVs use `\n` line endings and 9 significant digits.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::csu::{FusionStrategy, SparseGlobalMap};
use crate::error::{Error, Result};
use crate::geometry::{CameraPose, Vec3, VoxelCoord};
use crate::pipeline::FrameMetrics;
use crate::sim::Scene;

const SIG_DIGITS: usize = 9;

/// Formats like C's `%.9g`.
pub fn fmt_g9(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return "0".into();
    }
    let sci = format!("{:.*e}", SIG_DIGITS - 1, v);
    let (mant, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if exp < -4 || exp >= SIG_DIGITS as i32 {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{}{:02}", trim_zeros(mant), sign, exp.abs())
    } else {
        let prec = (SIG_DIGITS as i32 - 1 - exp) as usize;
        trim_zeros(&format!("{v:.prec$}")).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Writes `bytes` to a temporary file next to `path`, then renames it into
/// place. Fails if the parent directory does not exist.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    if !parent.is_dir() {
        return Err(Error::io(
            parent,
            std::io::Error::new(std::io::ErrorKind::NotFound, "output directory does not exist"),
        ));
    }
    let mut tmp = tempfile::NamedTempFile::new_in(parent).map_err(|e| Error::io(parent, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// `foo/bar.csv` -> `foo/bar.json`.
pub fn sidecar_path(csv: &Path) -> PathBuf {
    csv.with_extension("json")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapMeta {
    pub voxel_size: [f64; 3],
    pub num_classes: usize,
    pub lambda: f64,
    pub strategy: FusionStrategy,
    pub entries: usize,
}

/// Map dump rows in sorted key order; probability columns when `with_probs`.
pub fn map_to_csv(map: &SparseGlobalMap, with_probs: bool) -> String {
    let mut out = String::from("ix,iy,iz,label,confidence,count");
    if with_probs {
        for c in 0..map.num_classes() {
            write!(out, ",p{c}").unwrap();
        }
    }
    out.push('\n');
    for s in map.entries_sorted() {
        let c = s.coord;
        write!(out, "{},{},{},{},{},{}", c.ix, c.iy, c.iz, s.label(), fmt_g9(s.confidence), s.count).unwrap();
        if with_probs {
            for p in &s.probs {
                out.push(',');
                out.push_str(&fmt_g9(*p));
            }
        }
        out.push('\n');
    }
    out
}

pub fn write_map(path: &Path, map: &SparseGlobalMap, strategy: FusionStrategy, with_probs: bool) -> Result<()> {
    write_atomic(path, map_to_csv(map, with_probs).as_bytes())?;
    let vs = map.voxel_size();
    let meta = MapMeta {
        voxel_size: [vs.x, vs.y, vs.z],
        num_classes: map.num_classes(),
        lambda: map.lambda(),
        strategy,
        entries: map.len(),
    };
    write_json(&sidecar_path(path), &meta)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneMeta {
    pub voxel_size: [f64; 3],
    pub num_classes: usize,
    /// Lattice index of the first cell.
    pub min: [i64; 3],
    pub shape: [usize; 3],
}

#[derive(Debug, Serialize, Deserialize)]
struct SceneRow {
    ix: i64,
    iy: i64,
    iz: i64,
    label: u8,
}

/// Writes the non-empty cells of `scene` and a sidecar with its extent.
pub fn export_scene(path: &Path, scene: &Scene) -> Result<()> {
    let mut out = String::from("ix,iy,iz,label\n");
    for ((i, j, k), &l) in scene.labels().indexed_iter() {
        if l != 0 {
            let c = scene.coord_of(i, j, k);
            writeln!(out, "{},{},{},{}", c.ix, c.iy, c.iz, l).unwrap();
        }
    }
    write_atomic(path, out.as_bytes())?;
    let vs = scene.voxel_size();
    let (min, _) = scene.bbox();
    let meta = SceneMeta {
        voxel_size: [vs.x, vs.y, vs.z],
        num_classes: scene.num_classes(),
        min: min.as_array(),
        shape: scene.shape(),
    };
    write_json(&sidecar_path(path), &meta)
}

pub fn import_scene(path: &Path) -> Result<Scene> {
    let meta_path = sidecar_path(path);
    let meta_text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: SceneMeta = serde_json::from_str(&meta_text)?;
    let mut labels = Array3::<u8>::zeros(meta.shape);
    let min = VoxelCoord::new(meta.min[0], meta.min[1], meta.min[2]);
    let mut rdr = csv::Reader::from_path(path)?;
    for (n, row) in rdr.deserialize::<SceneRow>().enumerate() {
        let line = n + 2;
        let row = row.map_err(|e| Error::Row {
            row: line,
            message: e.to_string(),
        })?;
        let idx = [row.ix - min.ix, row.iy - min.iy, row.iz - min.iz];
        if idx.iter().zip(meta.shape).any(|(&i, s)| i < 0 || i as usize >= s) {
            return Err(Error::Row {
                row: line,
                message: format!("cell ({}, {}, {}) outside the scene extent", row.ix, row.iy, row.iz),
            });
        }
        labels[[idx[0] as usize, idx[1] as usize, idx[2] as usize]] = row.label;
    }
    Scene::from_parts(labels, meta.num_classes, Vec3::from(meta.voxel_size), min)
}

#[derive(Debug, Deserialize)]
struct PoseRow {
    frame: i64,
    tx: f64,
    ty: f64,
    tz: f64,
    qw: f64,
    qx: f64,
    qy: f64,
    qz: f64,
}

/// Maximum tolerated deviation of a quaternion's norm from 1.
pub const QUAT_NORM_TOL: f64 = 1e-3;

/// Reads `frame,tx,ty,tz,qw,qx,qy,qz` rows (camera-to-world). Frame ids must
/// strictly increase. Row numbers in errors are file line numbers.
pub fn read_pose_csv(path: &Path) -> Result<Vec<(i64, CameraPose)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_pose_csv(&text)
}

pub fn parse_pose_csv(text: &str) -> Result<Vec<(i64, CameraPose)>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let header = rdr.headers()?.clone();
    let expected = ["frame", "tx", "ty", "tz", "qw", "qx", "qy", "qz"];
    if header.iter().ne(expected.iter().copied()) {
        return Err(Error::Row {
            row: 1,
            message: format!("expected header `{}`", expected.join(",")),
        });
    }
    let mut out: Vec<(i64, CameraPose)> = Vec::new();
    for (n, row) in rdr.deserialize::<PoseRow>().enumerate() {
        let line = n + 2;
        let err = |message: String| Error::Row { row: line, message };
        let r = row.map_err(|e| err(e.to_string()))?;
        if let Some((prev, _)) = out.last() {
            if r.frame == *prev {
                return Err(err(format!("duplicate frame id {}", r.frame)));
            }
            if r.frame < *prev {
                return Err(err(format!("frame id {} follows {}", r.frame, prev)));
            }
        }
        let q = [r.qw, r.qx, r.qy, r.qz];
        let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || (norm - 1.0).abs() > QUAT_NORM_TOL {
            return Err(err(format!("quaternion norm {norm} deviates from 1 by more than {QUAT_NORM_TOL}")));
        }
        let q = q.map(|v| v / norm);
        let pose = CameraPose::from_quaternion(q, Vec3::new(r.tx, r.ty, r.tz)).map_err(|e| err(e.to_string()))?;
        out.push((r.frame, pose));
    }
    if out.is_empty() {
        return Err(Error::invalid("pose file has no rows"));
    }
    Ok(out)
}

pub fn write_poses_json(path: &Path, poses: &[CameraPose]) -> Result<()> {
    write_json(path, &poses)
}

pub fn read_poses_json(path: &Path) -> Result<Vec<CameraPose>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn trace_to_csv(trace: &[FrameMetrics]) -> String {
    let mut out = String::from("frame,iou,miou,visible,fused,map_size\n");
    for t in trace {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            t.frame,
            fmt_g9(t.iou),
            fmt_g9(t.miou),
            t.visible,
            t.fused,
            t.map_size
        )
        .unwrap();
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub strategy: FusionStrategy,
    pub tla: bool,
    pub rcm: bool,
    pub seed: u64,
    pub iou: f64,
    pub miou: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationSummary {
    pub strategy: FusionStrategy,
    pub tla: bool,
    pub rcm: bool,
    pub seeds: usize,
    pub mean_iou: f64,
    pub mean_miou: f64,
}

/// Groups rows by (strategy, tla, rcm) in first-appearance order.
pub fn summarize(rows: &[AblationRow]) -> Vec<AblationSummary> {
    let mut out: Vec<(AblationSummary, f64, f64)> = Vec::new();
    for r in rows {
        let slot = out
            .iter_mut()
            .find(|(s, _, _)| s.strategy == r.strategy && s.tla == r.tla && s.rcm == r.rcm);
        match slot {
            Some((s, iou, miou)) => {
                s.seeds += 1;
                *iou += r.iou;
                *miou += r.miou;
            }
            None => out.push((
                AblationSummary {
                    strategy: r.strategy,
                    tla: r.tla,
                    rcm: r.rcm,
                    seeds: 1,
                    mean_iou: 0.0,
                    mean_miou: 0.0,
                },
                r.iou,
                r.miou,
            )),
        }
    }
    out.into_iter()
        .map(|(mut s, iou, miou)| {
            s.mean_iou = iou / s.seeds as f64;
            s.mean_miou = miou / s.seeds as f64;
            s
        })
        .collect()
}

pub fn ablation_to_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("strategy,tla,rcm,seed,iou,miou\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.strategy,
            r.tla as u8,
            r.rcm as u8,
            r.seed,
            fmt_g9(r.iou),
            fmt_g9(r.miou)
        )
        .unwrap();
    }
    out
}

pub fn summary_to_csv(summary: &[AblationSummary]) -> String {
    let mut out = String::from("strategy,tla,rcm,seeds,mean_iou,mean_miou\n");
    for s in summary {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            s.strategy,
            s.tla as u8,
            s.rcm as u8,
            s.seeds,
            fmt_g9(s.mean_iou),
            fmt_g9(s.mean_miou)
        )
        .unwrap();
    }
    out
}
