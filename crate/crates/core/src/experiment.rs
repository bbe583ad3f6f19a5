//! Experiment orchestration behind the command-line tool: dataset files,
//! training runs with checkpoints and logs, evaluation, mask overlays and
//! the ablation, ratio and alpha sweeps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_model, TensorFile};
use crate::data::{self, image_to_gray, labels_to_gray, split_labeled, split_test, DatasetSplit, Ratio, Sample, SplitConfig, SyntheticConfig};
use crate::error::{Error, Result};
use crate::metrics::{MetricReport, Summary};
use crate::model::{HeadInit, LabelMap};
use crate::plot::{LinePlot, Series};
use crate::trainer::{evaluate, relabel, EpochStats, Phase, TrainConfig, Trainer, Variant, EPOCH_COLUMNS};
use crate::uncertainty::RegionMask;

/// One `α` setting of the sensitivity sweep. `1*` is equal costs with
/// independently initialized auxiliary heads; a plain `1` starts both heads
/// from the main head's weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlphaSetting {
    pub alpha: f64,
    pub star: bool,
}

impl std::str::FromStr for AlphaSetting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        let (num, star) = match t.strip_suffix('*') {
            Some(n) => (n, true),
            None => (t, false),
        };
        let alpha: f64 = num.parse().map_err(|_| Error::Config(format!("bad alpha `{s}`")))?;
        if !(alpha >= 1.0 && alpha.is_finite()) {
            return Err(Error::Config(format!("alpha `{s}` must be at least 1")));
        }
        Ok(Self { alpha, star })
    }
}

impl std::fmt::Display for AlphaSetting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}{}", self.alpha, if self.star { "*" } else { "" })
    }
}

impl Serialize for AlphaSetting {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for AlphaSetting {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => v.to_string().parse(),
            Raw::Text(s) => s.parse(),
        }
        .map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
    pub ratios: Vec<Ratio>,
    pub alphas: Vec<AlphaSetting>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            variants: Variant::ALL.to_vec(),
            ratios: vec![
                Ratio { labeled: 1, unlabeled: 4 },
                Ratio { labeled: 1, unlabeled: 2 },
                Ratio::ONE_TO_ONE,
            ],
            alphas: ["1*", "2", "5", "10"].iter().map(|s| s.parse().expect("valid")).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data_dir: PathBuf,
    pub output_dir: PathBuf,
    pub data: SyntheticConfig,
    pub split: SplitConfig,
    pub train: TrainConfig,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            output_dir: PathBuf::from("runs"),
            data: SyntheticConfig::default(),
            split: SplitConfig::default(),
            train: TrainConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.split.validate()?;
        self.train.validate()
    }

    /// Desk-scale schedule sized for a single CPU core: a narrower network,
    /// shortened epochs, and noisier images so the supervised baseline is
    /// not saturated at this budget.
    pub fn desk() -> Self {
        Self {
            data: SyntheticConfig {
                noise_sigma: DESK_NOISE_SIGMA,
                ..SyntheticConfig::default()
            },
            train: TrainConfig::desk(),
            ..Self::default()
        }
    }
}

pub const DESK_NOISE_SIGMA: f64 = 0.6;

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            channels: vec![8, 16, 32, 32],
            head_width: 16,
            pretrain_epochs: 10,
            joint_epochs: 20,
            ..Self::default()
        }
    }
}

fn ensure_fresh(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::Config(format!("{} already exists; pass --force to overwrite", path.display())));
    }
    Ok(())
}

pub const SAMPLES_FILE: &str = "samples.crd";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub train_file: String,
    pub train_count: usize,
    pub test_file: String,
    pub test_count: usize,
    pub data: SyntheticConfig,
    pub split: SplitConfig,
}

/// Generates the benchmark and writes `train/` and `test/` container files
/// plus a manifest under `dir`.
pub fn cmd_gen(cfg: &ExperimentConfig, dir: &Path, force: bool, export_png: bool) -> Result<Manifest> {
    let manifest_path = dir.join("manifest.toml");
    ensure_fresh(&manifest_path, force)?;
    let samples = data::generate(&cfg.data)?;
    let (train, test) = split_test(samples, &cfg.split, cfg.data.seed)?;
    for (part, set) in [("train", &train), ("test", &test)] {
        let sub = dir.join(part);
        fs::create_dir_all(&sub)?;
        data::save(sub.join(SAMPLES_FILE), set)?;
        if export_png {
            let png = sub.join("png");
            fs::create_dir_all(&png)?;
            for (i, s) in set.iter().enumerate() {
                image_to_gray(&s.image).save(png.join(format!("{i:04}_image.png")))?;
                labels_to_gray(&s.label, cfg.data.classes).save(png.join(format!("{i:04}_mask.png")))?;
            }
        }
    }
    let manifest = Manifest {
        format: "CRD1".into(),
        train_file: format!("train/{SAMPLES_FILE}"),
        train_count: train.len(),
        test_file: format!("test/{SAMPLES_FILE}"),
        test_count: test.len(),
        data: cfg.data.clone(),
        split: cfg.split.clone(),
    };
    fs::write(&manifest_path, toml::to_string(&manifest).expect("serializable"))?;
    fs::write(dir.join("config.toml"), cfg.to_toml())?;
    Ok(manifest)
}

pub fn load_split(cfg: &ExperimentConfig) -> Result<DatasetSplit> {
    let train = data::load(cfg.data_dir.join("train").join(SAMPLES_FILE))?;
    let test = data::load(cfg.data_dir.join("test").join(SAMPLES_FILE))?;
    let (labeled, unlabeled) = split_labeled(train, cfg.split.ratio, cfg.train.seed)?;
    Ok(DatasetSplit::new(labeled, unlabeled, test))
}

/// The same partition `cmd_train` sees, built in memory from the generator.
pub fn build_split(cfg: &ExperimentConfig) -> Result<DatasetSplit> {
    let (train, test) = split_test(data::generate(&cfg.data)?, &cfg.split, cfg.data.seed)?;
    let (labeled, unlabeled) = split_labeled(train, cfg.split.ratio, cfg.train.seed)?;
    Ok(DatasetSplit::new(labeled, unlabeled, test))
}

pub fn checkpoint_name(t: &Trainer) -> String {
    format!("epoch_{:04}_{:04}.crn", t.pretrain_done, t.joint_done)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub report: MetricReport,
    pub history: Vec<EpochStats>,
    pub trainer: Trainer,
}

/// Trains one variant, writing checkpoints at every relabel interval, the
/// per-epoch log and plots, the final model and the test-set report.
pub fn run_training(cfg: &ExperimentConfig, split: &DatasetSplit, out: &Path, trainer: Trainer) -> Result<TrainOutcome> {
    let ckpt = out.join("checkpoints");
    fs::create_dir_all(&ckpt)?;
    fs::write(out.join("config.toml"), cfg.to_toml())?;
    let log_path = out.join("epochs.csv");
    let mut log = if trainer.pretrain_done + trainer.joint_done > 0 && log_path.exists() {
        let text = fs::read_to_string(&log_path)?;
        let keep = 1 + trainer.pretrain_done + trainer.joint_done;
        text.lines().take(keep).map(|l| format!("{l}\n")).collect::<String>()
    } else {
        format!("{EPOCH_COLUMNS}\n")
    };
    let interval = cfg.train.relabel_interval;
    let pretrain_epochs = cfg.train.pretrain_epochs;
    let mut trainer = trainer;
    let history = trainer.run(split, |t, s| {
        log.push_str(&s.csv_row());
        log.push('\n');
        fs::write(&log_path, &log)?;
        let boundary = match s.phase {
            Phase::Pretrain => t.pretrain_done == pretrain_epochs,
            Phase::Joint => t.joint_done % interval == 0,
        };
        if boundary {
            t.snapshot().save(ckpt.join(checkpoint_name(t)))?;
        }
        Ok(())
    })?;
    save_model(out.join("model.crn"), &trainer.model)?;
    let report = evaluate(trainer.final_net(), &split.test)?;
    report.write_csv(fs::File::create(out.join("metrics.csv"))?)?;
    write_plots(&log_stats(&log), out)?;
    Ok(TrainOutcome {
        report,
        history,
        trainer,
    })
}

/// Starts or resumes a run from the files in `cfg.data_dir`.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path, force: bool, resume: Option<&Path>) -> Result<TrainOutcome> {
    let split = load_split(cfg)?;
    let trainer = match resume {
        Some(p) => Trainer::restore(cfg.train.clone(), &TensorFile::load(p)?)?,
        None => {
            ensure_fresh(&out.join("epochs.csv"), force)?;
            Trainer::new(cfg.train.clone(), cfg.data.classes)?
        }
    };
    fs::create_dir_all(out)?;
    run_training(cfg, &split, out, trainer)
}

pub fn cmd_eval(checkpoint: &Path, test: &[Sample], out_csv: &Path) -> Result<MetricReport> {
    let file = TensorFile::load(checkpoint)?;
    let prefix = if file.tensors.keys().any(|k| k.starts_with("student.")) { "student" } else { "" };
    let net = file.to_segnet(prefix)?;
    let report = evaluate(&net, test)?;
    report.write_csv(fs::File::create(out_csv)?)?;
    Ok(report)
}

const RED: Rgb<u8> = Rgb([230, 40, 40]);
const GREEN: Rgb<u8> = Rgb([40, 220, 60]);

/// Pixels of the foreground that touch the background (4-neighbourhood).
pub fn contour(y: &LabelMap) -> Vec<bool> {
    let (h, w) = (y.height(), y.width());
    (0..h * w)
        .map(|z| {
            let (r, c) = (z / w, z % w);
            if y.get(r, c) == 0 {
                return false;
            }
            let off = |dr: isize, dc: isize| {
                let (rr, cc) = (r as isize + dr, c as isize + dc);
                rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize || y.get(rr as usize, cc as usize) == 0
            };
            off(-1, 0) || off(1, 0) || off(0, -1) || off(0, 1)
        })
        .collect()
}

/// Grayscale image with the uncertain region tinted red and the ground-truth
/// contour drawn in green on top.
pub fn overlay(sample: &Sample, uncertain: &RegionMask) -> RgbImage {
    let gray = image_to_gray(&sample.image);
    let edge = contour(&sample.label);
    let w = sample.image.width();
    RgbImage::from_fn(w as u32, sample.image.height() as u32, |x, y| {
        let z = y as usize * w + x as usize;
        let g = gray.get_pixel(x, y)[0];
        if edge[z] {
            GREEN
        } else if uncertain.data()[z] == 1 {
            let mix = |a: u8, b: u8| ((a as u16 + b as u16) / 2) as u8;
            Rgb([mix(g, RED[0]), mix(g, RED[1]), mix(g, RED[2])])
        } else {
            Rgb([g, g, g])
        }
    })
}

/// Snapshot files in `path` (a file or a directory), ordered by training progress.
pub fn checkpoint_series(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "crn"))
        .collect();
    files.sort();
    Ok(files)
}

/// For each snapshot, writes the uncertain masks and overlays of the
/// unlabeled pool into `out/<snapshot stem>/`, using the same normalization
/// recalibration as relabeling during training. Returns the directories written.
pub fn cmd_masks(cfg: &ExperimentConfig, checkpoints: &Path, split: &DatasetSplit, out: &Path) -> Result<Vec<PathBuf>> {
    let unlabeled: Vec<Sample> = split
        .unlabeled
        .iter()
        .zip(split.unlabeled_truth())
        .map(|(x, y)| Sample {
            image: x.clone(),
            label: y.clone(),
        })
        .collect();
    let mut dirs = Vec::new();
    for path in checkpoint_series(checkpoints)? {
        let mut t = Trainer::restore(cfg.train.clone(), &TensorFile::load(&path)?)?;
        t.recalibrate(split)?;
        let stem = path.file_stem().map_or_else(|| "snapshot".into(), |s| s.to_string_lossy().into_owned());
        let dir = out.join(stem);
        fs::create_dir_all(&dir)?;
        let cache = relabel(&t.model, &split.unlabeled, t.joint_done)?;
        for (j, (e, s)) in cache.entries.iter().zip(&unlabeled).enumerate() {
            e.uncertain.save_png(dir.join(format!("{j:04}_uncertain.png")))?;
            overlay(s, &e.uncertain).save(dir.join(format!("{j:04}_overlay.png")))?;
        }
        dirs.push(dir);
    }
    Ok(dirs)
}

fn parse_opt(v: &str) -> Option<f64> {
    v.parse().ok()
}

fn log_stats(log: &str) -> Vec<(Phase, Vec<Option<f64>>)> {
    log.lines()
        .skip(1)
        .filter_map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let phase = match f.first()? {
                &"pretrain" => Phase::Pretrain,
                _ => Phase::Joint,
            };
            Some((phase, f[2..].iter().map(|v| parse_opt(v)).collect()))
        })
        .collect()
}

fn series(rows: &[(Phase, Vec<Option<f64>>)], col: usize, color: [u8; 3]) -> Series {
    Series {
        points: rows
            .iter()
            .enumerate()
            .filter_map(|(i, (_, v))| v[col].map(|y| (i as f64, y)))
            .collect(),
        color,
    }
}

/// `losses.png`: crm (blue), certain-region (orange), consistency (green).
/// `mask_quality.png`: PPV (blue), TPR (orange), CSI (green), uncertain fraction (grey).
fn write_plots(rows: &[(Phase, Vec<Option<f64>>)], out: &Path) -> Result<()> {
    let (blue, orange, green, grey) = ([31, 119, 180], [255, 127, 14], [44, 160, 44], [120, 120, 120]);
    LinePlot::new(vec![series(rows, 0, blue), series(rows, 1, orange), series(rows, 2, green)])
        .render()
        .save(out.join("losses.png"))?;
    LinePlot::new(vec![
        series(rows, 4, blue),
        series(rows, 5, orange),
        series(rows, 6, green),
        series(rows, 3, grey),
    ])
    .render()
    .save(out.join("mask_quality.png"))?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepKind {
    Ablation,
    Ratio,
    Alpha,
}

impl std::str::FromStr for SweepKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ablation" => Ok(Self::Ablation),
            "ratio" => Ok(Self::Ratio),
            "alpha" => Ok(Self::Alpha),
            _ => Err(Error::Config(format!("unknown sweep `{s}`; expected ablation, ratio or alpha"))),
        }
    }
}

/// One run of a sweep, fully described by its configuration.
#[derive(Clone, Debug)]
pub struct Cell {
    pub row: String,
    pub column: String,
    pub config: ExperimentConfig,
}

impl Cell {
    pub fn dir_name(&self) -> String {
        let clean = |s: &str| s.replace([':', '*', '+'], "_");
        format!("{}__{}__seed{}", clean(&self.row), clean(&self.column), self.config.train.seed)
    }
}

pub fn sweep_cells(cfg: &ExperimentConfig, kind: SweepKind) -> Result<Vec<Cell>> {
    let s = &cfg.sweep;
    if s.seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one seed".into()));
    }
    let mut cells = Vec::new();
    let mut push = |row: String, column: String, edit: &dyn Fn(&mut ExperimentConfig)| {
        for &seed in &s.seeds {
            let mut c = cfg.clone();
            c.train.seed = seed;
            edit(&mut c);
            cells.push(Cell {
                row: row.clone(),
                column: column.clone(),
                config: c,
            });
        }
    };
    match kind {
        SweepKind::Ablation => {
            for &v in &s.variants {
                push(v.to_string(), cfg.split.ratio.to_string(), &|c| c.train.variant = v);
            }
        }
        SweepKind::Ratio => {
            for &v in &s.variants {
                for &r in &s.ratios {
                    push(v.to_string(), r.to_string(), &|c| {
                        c.train.variant = v;
                        c.split.ratio = r;
                    });
                }
            }
        }
        SweepKind::Alpha => {
            for &a in &s.alphas {
                push(format!("alpha={a}"), cfg.split.ratio.to_string(), &|c| {
                    c.train.variant = Variant::Ours;
                    c.train.alpha = a.alpha;
                    if a.alpha == 1.0 {
                        c.train.head_init = if a.star { HeadInit::Independent } else { HeadInit::Shared };
                    }
                });
            }
        }
    }
    Ok(cells)
}

#[derive(Clone, Debug)]
pub struct CellResult {
    pub cell: Cell,
    pub outcome: std::result::Result<MetricReport, String>,
}

/// Everything that determines the pretrained state of a cell.
fn pretrain_key(c: &ExperimentConfig) -> String {
    let t = &c.train;
    let mut t = t.clone();
    t.variant = Variant::Seg;
    t.joint_epochs = 0;
    t.eval_every = 0;
    format!("{:?}|{:?}|{:?}", c.data, c.split, t)
}

/// Runs every cell sequentially. Cells that differ only in the variant share
/// one pretraining run; a failing cell is recorded and the sweep continues.
pub fn run_sweep(cells: &[Cell], out: Option<&Path>, mut progress: impl FnMut(&CellResult)) -> Vec<CellResult> {
    let mut pretrained: BTreeMap<String, (Trainer, DatasetSplit)> = BTreeMap::new();
    let mut results = Vec::new();
    for cell in cells {
        let outcome = (|| -> Result<MetricReport> {
            let key = pretrain_key(&cell.config);
            if !pretrained.contains_key(&key) {
                let split = build_split(&cell.config)?;
                let mut t = Trainer::new(cell.config.train.clone(), cell.config.data.classes)?;
                while t.pretrain_done < t.cfg.pretrain_epochs {
                    t.pretrain_epoch(&split)?;
                }
                pretrained.insert(key.clone(), (t, split));
            }
            let (base, split) = &pretrained[&key];
            let mut t = base.clone();
            t.cfg = cell.config.train.clone();
            match out {
                Some(root) => {
                    let dir = root.join("cells").join(cell.dir_name());
                    fs::create_dir_all(&dir)?;
                    Ok(run_training(&cell.config, split, &dir, t)?.report)
                }
                None => {
                    t.run(split, |_, _| Ok(()))?;
                    evaluate(t.final_net(), &split.test)
                }
            }
        })()
        .map_err(|e| e.to_string());
        let r = CellResult {
            cell: cell.clone(),
            outcome,
        };
        progress(&r);
        results.push(r);
    }
    results
}

/// Mean (standard deviation) of the per-seed mean DSC for each row/column.
pub fn summarize(results: &[CellResult]) -> BTreeMap<(String, String), (Summary, usize)> {
    let mut groups: BTreeMap<(String, String), (Vec<Option<f64>>, usize)> = BTreeMap::new();
    for r in results {
        let g = groups.entry((r.cell.row.clone(), r.cell.column.clone())).or_default();
        match &r.outcome {
            Ok(rep) => g.0.push(rep.mean_dsc()),
            Err(_) => g.1 += 1,
        }
    }
    groups.into_iter().map(|(k, (v, failed))| (k, (Summary::of(v), failed))).collect()
}

fn ordered<'a>(items: impl Iterator<Item = &'a String>) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for s in items {
        if !out.contains(s) {
            out.push(s.clone());
        }
    }
    out
}

/// Table with one row per row label and one `mean (std)` DSC column per
/// column label; failed runs are counted in a trailing column.
pub fn table_csv(results: &[CellResult]) -> String {
    let rows = ordered(results.iter().map(|r| &r.cell.row));
    let cols = ordered(results.iter().map(|r| &r.cell.column));
    let summary = summarize(results);
    let mut s = String::from("setting");
    for c in &cols {
        let _ = write!(s, ",{c}");
    }
    s.push_str(",failed\n");
    for r in &rows {
        s.push_str(r);
        let mut failed = 0;
        for c in &cols {
            let cell = summary.get(&(r.clone(), c.clone()));
            failed += cell.map_or(0, |x| x.1);
            match cell.and_then(|x| x.0.mean.zip(x.0.std)) {
                Some((m, sd)) => {
                    let _ = write!(s, ",{:.2} ({:.2})", 100.0 * m, 100.0 * sd);
                }
                None => s.push_str(",NA"),
            }
        }
        let _ = writeln!(s, ",{failed}");
    }
    s
}

/// One line per run: row, column, seed, mean DSC or the error message.
pub fn runs_csv(results: &[CellResult]) -> String {
    let mut s = String::from("setting,column,seed,dsc,error\n");
    for r in results {
        let seed = r.cell.config.train.seed;
        match &r.outcome {
            Ok(rep) => {
                let d = rep.mean_dsc().map_or_else(|| "NA".into(), |v| format!("{v:.6}"));
                let _ = writeln!(s, "{},{},{seed},{d},", r.cell.row, r.cell.column);
            }
            Err(e) => {
                let _ = writeln!(s, "{},{},{seed},NA,\"{}\"", r.cell.row, r.cell.column, e.replace('"', "'"));
            }
        }
    }
    s
}

pub fn cmd_sweep(cfg: &ExperimentConfig, kind: SweepKind, out: &Path, force: bool) -> Result<Vec<CellResult>> {
    let table = out.join("table.csv");
    ensure_fresh(&table, force)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.toml"), cfg.to_toml())?;
    let cells = sweep_cells(cfg, kind)?;
    let results = run_sweep(&cells, Some(out), |_| {});
    fs::write(out.join("runs.csv"), runs_csv(&results))?;
    fs::write(&table, table_csv(&results))?;
    Ok(results)
}
