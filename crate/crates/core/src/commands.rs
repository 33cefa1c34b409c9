//! Job commands behind the CLI. Each command reads its inputs, writes its
//! artifacts under an output directory and returns the in-memory result so
//! callers and tests can inspect it without reparsing files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{config_hash, RunConfig};
use crate::error::{Error, Result};
use crate::geometry::{center_error, iou, select_reference_box, BBox, SelectionRule};
use crate::gradcheck::{run_suite, CheckResult};
use crate::heatmap::{generate_sequence, rescale_box, BoxSequence, Heatmap, HeatmapConfig};
use crate::labels::parse_labels;
use crate::metrics::{evaluate_sequence, MetricReport};
use crate::model::TrackerParams;
use crate::synth::{
    confidence_rankings, export_sequence, frame_name, generate, import_sequence, recall_at_k, MatchCriterion,
    SceneConfig, SyntheticSequence,
};
use crate::tracker::{track, train, EpochStats, PreparedSequence, TrackResult, TrainConfig};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const TRACK_FILE: &str = "track.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const ORACLE_FILE: &str = "oracle_table.csv";
pub const TOPK_FILE: &str = "topk.csv";
pub const GRADCHECK_FILE: &str = "gradcheck.csv";

/// File extension of the raw float heatmap format.
pub const FLOAT_EXT: &str = "fth";

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, contents)?;
    Ok(())
}

/// SHA-256 of every regular file below `dir`, keyed by `/`-separated
/// relative path.
pub fn file_digests(dir: &Path) -> Result<BTreeMap<String, String>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else {
                let rel = path.strip_prefix(root).expect("walk stays under root");
                let key = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
                out.insert(key, hex::encode(Sha256::digest(std::fs::read(&path)?)));
            }
        }
        Ok(())
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out)?;
    Ok(out)
}

// ---------------------------------------------------------------- heatmaps

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapEntry {
    pub label: String,
    pub heatmap: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapManifest {
    pub config_hash: String,
    pub width: usize,
    pub height: usize,
    pub frames: Vec<HeatmapEntry>,
}

/// Renders one PNG heatmap per label file in `labels_dir` into `out` and
/// writes `manifest.json` alongside.
pub fn gen_heatmaps(labels_dir: &Path, out: &Path, cfg: &HeatmapConfig) -> Result<HeatmapManifest> {
    cfg.validate()?;
    let records = parse_labels(labels_dir)?;
    let dims = cfg.dims();
    let seq = BoxSequence {
        dims,
        frames: records.iter().map(|(_, recs)| recs.iter().map(|r| r.to_pixels(dims)).collect()).collect(),
    };
    let maps = generate_sequence(&seq, cfg)?;
    std::fs::create_dir_all(out)?;
    let mut frames = Vec::with_capacity(maps.len());
    for ((path, _), map) in records.iter().zip(&maps) {
        let stem = path.file_stem().unwrap_or_default().to_string_lossy();
        let name = format!("{stem}.png");
        map.save_png(out.join(&name))?;
        frames.push(HeatmapEntry { label: path.file_name().unwrap_or_default().to_string_lossy().into(), heatmap: name });
    }
    let manifest = HeatmapManifest { config_hash: config_hash(cfg), width: dims.width, height: dims.height, frames };
    write_file(&out.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

// -------------------------------------------------------------------- eval

fn heatmap_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "png" || x == FLOAT_EXT))
        .collect();
    files.sort();
    Ok(files)
}

fn load_heatmap(path: &Path) -> Result<Heatmap> {
    if path.extension().is_some_and(|x| x == FLOAT_EXT) {
        Heatmap::load_float(path)
    } else {
        Heatmap::load_png(path)
    }
}

fn load_heatmap_dir(dir: &Path) -> Result<Vec<Heatmap>> {
    heatmap_files(dir)?.par_iter().map(|p| load_heatmap(p)).collect()
}

fn subdirs(dir: &Path) -> Result<Vec<String>> {
    let mut names: Vec<String> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .map(|p| p.file_name().unwrap_or_default().to_string_lossy().into_owned())
        .collect();
    names.sort();
    Ok(names)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub sequence: String,
    pub report: MetricReport,
}

/// Name of the frame-weighted aggregate row in [`eval`] output.
pub const AGGREGATE_ROW: &str = "all";

/// Compares predicted and ground-truth heatmap directories. Either both hold
/// heatmap files directly (one sequence) or both hold one subdirectory per
/// sequence with matching names. The last row pools all frames.
pub fn eval(pred: &Path, gt: &Path) -> Result<Vec<EvalRow>> {
    let pred_seqs = subdirs(pred)?;
    let gt_seqs = subdirs(gt)?;
    if pred_seqs != gt_seqs {
        return Err(Error::SequenceMismatch(format!(
            "prediction sequences {pred_seqs:?} differ from ground-truth sequences {gt_seqs:?}"
        )));
    }
    let pairs: Vec<(String, PathBuf, PathBuf)> = if pred_seqs.is_empty() {
        let name = pred.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "sequence".into());
        vec![(name, pred.to_path_buf(), gt.to_path_buf())]
    } else {
        pred_seqs.into_iter().map(|s| (s.clone(), pred.join(&s), gt.join(&s))).collect()
    };
    let mut rows = Vec::with_capacity(pairs.len() + 1);
    for (name, p, g) in pairs {
        let preds = load_heatmap_dir(&p)?;
        let gts = load_heatmap_dir(&g)?;
        let report = evaluate_sequence(&preds, &gts)
            .map_err(|e| Error::SequenceMismatch(format!("sequence {name}: {e}")))?;
        if ![report.nss, report.cc, report.sim, report.mse, report.mae].iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical(format!("sequence {name}: non-finite metric")));
        }
        rows.push(EvalRow { sequence: name, report });
    }
    let reports: Vec<MetricReport> = rows.iter().map(|r| r.report).collect();
    rows.push(EvalRow { sequence: AGGREGATE_ROW.into(), report: MetricReport::pooled(&reports) });
    Ok(rows)
}

pub fn eval_csv(rows: &[EvalRow]) -> String {
    let mut buf = Vec::new();
    buf.extend_from_slice(MetricReport::CSV_HEADER.as_bytes());
    buf.push(b'\n');
    for r in rows {
        r.report.write_csv_row(&mut buf, &r.sequence).expect("writing to a Vec cannot fail");
    }
    String::from_utf8(buf).expect("csv is utf-8")
}

// --------------------------------------------------------- simulate / train

/// Scene settings with the run seed applied.
pub fn scene_for(cfg: &RunConfig, seed: u64) -> SceneConfig {
    SceneConfig { seed, ..cfg.scene.clone() }
}

fn train_config_for(cfg: &RunConfig, train_cfg: &TrainConfig) -> TrainConfig {
    TrainConfig { seed: cfg.seed, ..train_cfg.clone() }
}

/// Generates the scene for `cfg.seed`, exports it to `out` and writes the
/// canonical config and a digest manifest of every written file.
pub fn simulate(cfg: &RunConfig, out: &Path) -> Result<BTreeMap<String, String>> {
    let seq = generate(&scene_for(cfg, cfg.seed))?;
    export_sequence(&seq, out)?;
    write_file(&out.join("config.toml"), cfg.to_toml())?;
    let mut digests = file_digests(out)?;
    digests.remove(MANIFEST_FILE);
    write_file(&out.join(MANIFEST_FILE), serde_json::to_string_pretty(&digests)? + "\n")?;
    Ok(digests)
}

fn load_sequences(dirs: &[PathBuf]) -> Result<Vec<PreparedSequence>> {
    dirs.iter().map(|d| import_sequence(d).map(PreparedSequence::new)).collect()
}

pub fn train_log_csv(history: &[EpochStats]) -> String {
    let mut s = String::from("epoch,ce,geo,rank,dist,scale,rerank_total,refine_total,total,samples,skipped\n");
    for e in history {
        let m = &e.mean;
        writeln!(
            s,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{}",
            e.epoch, m.ce, m.geo, m.rank, m.dist, m.scale, m.rerank_total, m.refine_total, m.total, e.samples, e.skipped
        )
        .unwrap();
    }
    s
}

/// Trains on exported sequence directories, starting from `init` when given
/// and from a fresh seeded initialisation otherwise. Writes `params.bin`
/// (with its JSON sidecar) and `train_log.csv` under `out`.
pub fn train_cmd(cfg: &RunConfig, data: &[PathBuf], init: Option<&Path>, out: &Path) -> Result<Vec<EpochStats>> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("train needs at least one sequence directory".into()));
    }
    let sequences = load_sequences(data)?;
    let mut params = match init {
        Some(p) => TrackerParams::load(p)?,
        None => TrackerParams::init(&cfg.model, cfg.seed),
    };
    let history = train(&sequences, &mut params, &cfg.gaps, &cfg.loss, &train_config_for(cfg, &cfg.train))?;
    std::fs::create_dir_all(out)?;
    params.save(out.join(PARAMS_FILE))?;
    write_file(&out.join(TRAIN_LOG_FILE), train_log_csv(&history))?;
    Ok(history)
}

/// Runs the tracker on one exported sequence. Writes `track.csv` and one
/// heatmap PNG per frame under `out/heatmaps`.
pub fn track_cmd(cfg: &RunConfig, data: &Path, params: &Path, out: &Path) -> Result<TrackResult> {
    let params = TrackerParams::load(params)?;
    let seq = PreparedSequence::new(import_sequence(data)?);
    let result = track(&seq, &params, Some(&cfg.heatmap), &cfg.track)?;
    write_file(&out.join(TRACK_FILE), result.to_csv())?;
    let dir = out.join("heatmaps");
    std::fs::create_dir_all(&dir)?;
    result
        .heatmaps
        .par_iter()
        .enumerate()
        .try_for_each(|(t, h)| h.save_png(dir.join(format!("{}.png", frame_name(t)))))?;
    Ok(result)
}

// --------------------------------------------------------------- benchmark

/// A trained model and its tracking run on the evaluation sequence.
#[derive(Debug, Clone)]
pub struct BenchmarkRun {
    pub test: PreparedSequence,
    pub params: TrackerParams,
    /// Empty when the parameters were supplied rather than trained.
    pub history: Vec<EpochStats>,
    pub result: TrackResult,
}

/// Evaluates on the scene for `cfg.seed` (or `data`, when given) with
/// `params`, or with a model trained on the scenes for seeds
/// `cfg.seed + 1 ..= cfg.seed + benchmark.train_sequences` under the
/// benchmark training settings.
pub fn run_benchmark(cfg: &RunConfig, data: Option<&Path>, params: Option<TrackerParams>) -> Result<BenchmarkRun> {
    let test = match data {
        Some(d) => import_sequence(d)?,
        None => generate(&scene_for(cfg, cfg.seed))?,
    };
    if !test.has_labels() {
        return Err(Error::InvalidArgument("benchmark sequence needs ground-truth labels".into()));
    }
    let test = PreparedSequence::new(test);
    let (params, history) = match params {
        Some(p) => (p, Vec::new()),
        None => {
            let n = cfg.benchmark.train_sequences as u64;
            let sequences: Vec<PreparedSequence> = (1..=n)
                .into_par_iter()
                .map(|i| generate(&scene_for(cfg, cfg.seed + i)).map(PreparedSequence::new))
                .collect::<Result<_>>()?;
            let mut params = TrackerParams::init(&cfg.model, cfg.seed);
            let tc = train_config_for(cfg, &cfg.benchmark.train);
            let history = train(&sequences, &mut params, &cfg.gaps, &cfg.loss, &tc)?;
            (params, history)
        }
    };
    let result = track(&test, &params, None, &cfg.track)?;
    Ok(BenchmarkRun { test, params, history, result })
}

/// Per-frame boxes chosen by an oracle rule; frames without proposals keep
/// the previous choice (the ground truth on frame 0).
pub fn rule_boxes(seq: &SyntheticSequence, rule: SelectionRule) -> Vec<BBox> {
    let mut out: Vec<BBox> = Vec::with_capacity(seq.len());
    for (t, (set, gt)) in seq.proposals.iter().zip(&seq.gt_boxes).enumerate() {
        let b = match select_reference_box(set, gt, rule) {
            Ok((_, b)) => b,
            Err(_) if t == 0 => *gt,
            Err(_) => out[t - 1],
        };
        out.push(b);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleRow {
    pub name: String,
    /// Mean center error in pixels.
    pub err: f64,
    pub iou: f64,
    /// Fraction of frames with center error at most each center threshold.
    pub success_center: Vec<f64>,
    /// Fraction of frames with IoU at least each IoU threshold.
    pub success_iou: Vec<f64>,
    pub metrics: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleTable {
    pub center_thresholds: Vec<f64>,
    pub iou_thresholds: Vec<f64>,
    pub rows: Vec<OracleRow>,
}

impl OracleTable {
    pub fn row(&self, name: &str) -> Option<&OracleRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    fn headers(&self) -> Vec<String> {
        let mut h: Vec<String> = ["rule", "err", "iou"].iter().map(|s| s.to_string()).collect();
        h.extend(self.center_thresholds.iter().map(|t| format!("succ_err@{t}")));
        h.extend(self.iou_thresholds.iter().map(|t| format!("succ_iou@{t}")));
        h.extend(["nss", "cc", "mae"].iter().map(|s| s.to_string()));
        h
    }

    fn cells(r: &OracleRow) -> Vec<String> {
        let mut c = vec![r.name.clone(), format!("{:.4}", r.err), format!("{:.4}", r.iou)];
        c.extend(r.success_center.iter().chain(&r.success_iou).map(|v| format!("{v:.4}")));
        c.extend([r.metrics.nss, r.metrics.cc, r.metrics.mae].iter().map(|v| format!("{v:.4}")));
        c
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.headers().join(",") + "\n";
        for r in &self.rows {
            s += &(Self::cells(r).join(",") + "\n");
        }
        s
    }

    /// Fixed-width text rendering for the terminal.
    pub fn to_text(&self) -> String {
        let headers = self.headers();
        let body: Vec<Vec<String>> = self.rows.iter().map(Self::cells).collect();
        let widths: Vec<usize> = (0..headers.len())
            .map(|i| body.iter().map(|r| r[i].len()).chain([headers[i].len()]).max().unwrap_or(0))
            .collect();
        let line = |cells: &[String]| {
            cells.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect::<Vec<_>>().join("  ") + "\n"
        };
        let mut s = line(&headers);
        for r in &body {
            s += &line(r);
        }
        s
    }
}

pub const ORACLE_ROWS: [&str; 5] = ["Conf", "MinErr", "MaxIoU", "rerank-only", "full"];

/// Err/IoU/success rates and heatmap metrics for the three oracle rules and
/// both tracker variants. Heatmap metrics are skipped (left at zero) when
/// `with_heatmaps` is false.
pub fn oracle_table(cfg: &RunConfig, run: &BenchmarkRun, with_heatmaps: bool) -> Result<OracleTable> {
    let seq = &run.test.seq;
    let mut candidates: Vec<(String, Vec<BBox>)> =
        SelectionRule::ALL.iter().map(|&r| (r.name().to_string(), rule_boxes(seq, r))).collect();
    candidates.push(("rerank-only".into(), run.result.reranked_boxes()));
    candidates.push(("full".into(), run.result.refined_boxes()));

    let heat_dims = cfg.heatmap.dims();
    let render = |boxes: &[BBox]| -> Result<Vec<Heatmap>> {
        let frames = boxes.iter().map(|b| vec![rescale_box(b, seq.dims, heat_dims)]).collect();
        generate_sequence(&BoxSequence { dims: heat_dims, frames }, &cfg.heatmap)
    };
    let gt_maps = if with_heatmaps { Some(render(&seq.gt_boxes)?) } else { None };
    let bench = &cfg.benchmark;

    let rows = candidates
        .par_iter()
        .map(|(name, boxes)| {
            let n = boxes.len().max(1) as f64;
            let errs: Vec<f64> = boxes.iter().zip(&seq.gt_boxes).map(|(b, g)| center_error(b, g)).collect();
            let ious: Vec<f64> = boxes.iter().zip(&seq.gt_boxes).map(|(b, g)| iou(b, g)).collect();
            let frac = |hits: usize| hits as f64 / n;
            let metrics = match &gt_maps {
                Some(g) => evaluate_sequence(&render(boxes)?, g)?,
                None => MetricReport { nss: 0.0, cc: 0.0, sim: 0.0, mse: 0.0, mae: 0.0, n_frames: 0 },
            };
            let row = OracleRow {
                name: name.clone(),
                err: errs.iter().sum::<f64>() / n,
                iou: ious.iter().sum::<f64>() / n,
                success_center: bench
                    .center_thresholds
                    .iter()
                    .map(|&th| frac(errs.iter().filter(|&&e| e <= th).count()))
                    .collect(),
                success_iou: bench.iou_thresholds.iter().map(|&th| frac(ious.iter().filter(|&&v| v >= th).count())).collect(),
                metrics,
            };
            if !(row.err.is_finite() && row.iou.is_finite()) {
                return Err(Error::Numerical(format!("{name}: non-finite error statistics")));
            }
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(OracleTable {
        center_thresholds: bench.center_thresholds.clone(),
        iou_thresholds: bench.iou_thresholds.clone(),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TopkPoint {
    pub order: String,
    pub criterion: String,
    pub threshold: f64,
    pub k: usize,
    pub recall: f64,
}

/// Recall-at-k curves for the confidence and rerank orderings under every
/// benchmark threshold, for k = 1 ..= capacity.
pub fn topk(cfg: &RunConfig, run: &BenchmarkRun) -> Result<Vec<TopkPoint>> {
    let seq = &run.test.seq;
    let conf = confidence_rankings(seq);
    let rerank = run.result.rankings();
    let mut criteria: Vec<(String, f64, MatchCriterion)> = Vec::new();
    for &th in &cfg.benchmark.center_thresholds {
        criteria.push(("center_error".into(), th, MatchCriterion::CenterError(th)));
    }
    for &th in &cfg.benchmark.iou_thresholds {
        criteria.push(("iou".into(), th, MatchCriterion::Iou(th)));
    }
    let mut out = Vec::new();
    for (order, rankings) in [("confidence", &conf), ("rerank", &rerank)] {
        for (name, th, crit) in &criteria {
            for k in 1..=seq.capacity() {
                out.push(TopkPoint {
                    order: order.into(),
                    criterion: name.clone(),
                    threshold: *th,
                    k,
                    recall: recall_at_k(seq, rankings, k, *crit)?,
                });
            }
        }
    }
    Ok(out)
}

pub fn topk_csv(points: &[TopkPoint]) -> String {
    let mut s = String::from("order,criterion,threshold,k,recall\n");
    for p in points {
        writeln!(s, "{},{},{},{},{:.6}", p.order, p.criterion, p.threshold, p.k, p.recall).unwrap();
    }
    s
}

// -------------------------------------------------------------- grad check

pub fn grad_check_csv(results: &[CheckResult]) -> String {
    let mut s = String::from("check,instances,max_rel,max_abs,passed\n");
    for r in results {
        writeln!(s, "{},{},{:.3e},{:.3e},{}", r.name, r.instances, r.max_rel, r.max_abs, r.passed()).unwrap();
    }
    s
}

/// Runs the finite-difference suite and writes `gradcheck.csv` under `out`.
pub fn grad_check(seed: u64, instances: usize, out: &Path) -> Result<Vec<CheckResult>> {
    let results = run_suite(seed, instances)?;
    write_file(&out.join(GRADCHECK_FILE), grad_check_csv(&results))?;
    Ok(results)
}

