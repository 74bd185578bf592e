//! End-to-end orchestration: data, classifier, detectors, calibration, both
//! benchmarks and explanation rendering.
//!
//! Artifacts live under the configured output directory. Each one carries a
//! `.key.json` sidecar with the settings that produced it and is rebuilt when
//! those settings change.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::baselines::{energy_confidence, fnrd_confidence, mcp_confidence};
use crate::calibration::{
    calibrate_bank, class_confidence, fit_logistic, vanilla_confidence, LogisticCalibration,
    LogisticParams,
};
use crate::classifier::{
    fit_neuron_ranges, monitored_activations, train_classifier, NeuronRanges, ToyCnn,
};
use crate::config::{DataConfig, RunConfig};
use crate::detectors::{
    train_class_based, train_vanilla, BankMode, DetectorBank, DetectorTrainConfig,
};
use crate::error::{Error, Result};
use crate::explain::{overlay, pattern_references, reference_file_name};
use crate::farc::FarcArchive;
use crate::io::{read_file, write_file};
use crate::metrics::{spearman, summarize, EvalReport, ScorePair};
use crate::perturb::perturb_dataset;
use crate::ppm;
use crate::report::{self, CrossRow, GammaRow, RankRow, Series};
use crate::synth::{gen_ood, gen_synth, DatasetManifest, LabeledSet, Split};
use crate::tensor::{FeatureMap, Image};

pub struct Datasets {
    pub train: LabeledSet,
    pub test: LabeledSet,
    pub ood: LabeledSet,
}

const SPLITS: [&str; 3] = ["train", "test", "ood"];

pub fn generate_data(cfg: &DataConfig) -> Result<Datasets> {
    Ok(Datasets {
        train: gen_synth(cfg.classes, cfg.train_per_class, cfg.seed, Split::Train)?,
        test: gen_synth(cfg.classes, cfg.test_per_class, cfg.seed, Split::Test)?,
        ood: gen_ood(cfg.ood_count, cfg.seed)?,
    })
}

/// `manifest.json` plus one `<id>.ppm` per entry.
pub fn write_dataset(dir: &Path, set: &LabeledSet) -> Result<()> {
    write_file(&dir.join("manifest.json"), &report::to_json(&set.manifest))?;
    for (entry, image) in set.manifest.entries.iter().zip(&set.images) {
        ppm::write(&dir.join(format!("{}.ppm", entry.id)), image)?;
    }
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<LabeledSet> {
    let path = dir.join("manifest.json");
    let manifest: DatasetManifest = serde_json::from_slice(&read_file(&path)?)
        .map_err(|e| Error::Artifact(format!("{}: {e}", path.display())))?;
    manifest
        .validate()
        .map_err(|e| Error::Artifact(format!("{}: {e}", path.display())))?;
    let images = manifest
        .entries
        .par_iter()
        .map(|e| ppm::read(&dir.join(format!("{}.ppm", e.id))))
        .collect::<Result<Vec<_>>>()?;
    Ok(LabeledSet {
        images,
        labels: manifest.labels(),
        manifest,
    })
}

pub fn write_datasets(dir: &Path, data: &Datasets) -> Result<()> {
    for (name, set) in SPLITS.iter().zip([&data.train, &data.test, &data.ood]) {
        write_dataset(&dir.join(name), set)?;
    }
    Ok(())
}

/// Images from `data_dir` when configured, generated otherwise.
pub fn load_data(cfg: &RunConfig) -> Result<Datasets> {
    match &cfg.data_dir {
        Some(dir) => Ok(Datasets {
            train: read_dataset(&dir.join("train"))?,
            test: read_dataset(&dir.join("test"))?,
            ood: read_dataset(&dir.join("ood"))?,
        }),
        None => generate_data(&cfg.data),
    }
}

/// First stage to rebuild even if a matching artifact exists.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Rebuild {
    Classifier,
    Detectors,
    Calibration,
    Nothing,
}

pub struct CalibratedBank {
    pub mode: BankMode,
    pub p: usize,
    pub bank: DetectorBank,
    pub cal: LogisticCalibration,
}

/// Everything trained for one seed.
pub struct SeedModels {
    pub seed: u64,
    pub model: ToyCnn,
    pub ranges: NeuronRanges,
    pub banks: Vec<CalibratedBank>,
    /// Logistic fit of the training-set energy scores. Maps EB into [0, 1]
    /// where confidences are averaged.
    pub energy: LogisticParams,
}

pub fn seed_dir(cfg: &RunConfig, seed: u64) -> PathBuf {
    cfg.out.join(format!("seed-{seed}"))
}

fn key_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_name().unwrap_or_default().to_os_string();
    name.push(".key.json");
    artifact.with_file_name(name)
}

/// Loads `artifact` when its sidecar key matches, builds and saves it otherwise.
fn cached<T>(
    artifact: &Path,
    key: &serde_json::Value,
    force: bool,
    build: impl FnOnce() -> Result<T>,
    save: impl FnOnce(&T, &Path) -> Result<()>,
    load: impl FnOnce(&Path) -> Result<T>,
) -> Result<T> {
    let key_bytes = report::to_json(key);
    if !force
        && artifact.exists()
        && std::fs::read(key_path(artifact)).ok().as_deref() == Some(&key_bytes[..])
    {
        return load(artifact);
    }
    let value = build()?;
    save(&value, artifact)?;
    write_file(&key_path(artifact), &key_bytes)?;
    Ok(value)
}

fn data_key(cfg: &RunConfig) -> serde_json::Value {
    match &cfg.data_dir {
        Some(dir) => serde_json::json!({ "data_dir": dir }),
        None => serde_json::json!({ "data": cfg.data }),
    }
}

fn detector_config(cfg: &RunConfig, seed: u64) -> DetectorTrainConfig {
    DetectorTrainConfig {
        seed,
        ..cfg.detectors.clone()
    }
}

fn train_bank(
    mode: BankMode,
    features: &[FeatureMap],
    labels: &[usize],
    num_classes: usize,
    p: usize,
    config: &DetectorTrainConfig,
) -> Result<DetectorBank> {
    match mode {
        BankMode::Vanilla => train_vanilla(features, p, config),
        BankMode::ClassBased => train_class_based(features, labels, num_classes, p, config),
    }
}

/// Trains (or reloads) the classifier, every configured bank and its
/// calibration for one seed. The seed replaces the seeds inside the
/// classifier and detector settings.
pub fn prepare_seed(
    cfg: &RunConfig,
    data: &Datasets,
    seed: u64,
    rebuild: Rebuild,
) -> Result<SeedModels> {
    let dir = seed_dir(cfg, seed);
    let train = &data.train;
    let ccfg = crate::classifier::ClassifierTrainConfig {
        seed,
        ..cfg.classifier.clone()
    };
    let ckey = serde_json::json!({ "data": data_key(cfg), "classifier": ccfg });
    let model = cached(
        &dir.join("classifier.tcnn"),
        &ckey,
        rebuild <= Rebuild::Classifier,
        || train_classifier(&train.images, &train.labels, &ccfg),
        |m, p| m.save(p),
        ToyCnn::load,
    )?;
    let (features, logits): (Vec<FeatureMap>, Vec<Vec<f64>>) = train
        .images
        .par_iter()
        .map(|x| model.forward(x))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .unzip();
    let energies = logits
        .iter()
        .map(|l| energy_confidence(l))
        .collect::<Result<Vec<_>>>()?;
    let energy = fit_logistic(&energies)?;
    let ranges = fit_neuron_ranges(&model, &train.images)?;
    let dcfg = detector_config(cfg, seed);
    let mut banks = Vec::new();
    for &p in &cfg.detector_counts {
        for &mode in &cfg.modes {
            let stem = format!("{}-p{p}", mode.as_str());
            let dkey =
                serde_json::json!({ "classifier": ckey, "detectors": dcfg, "mode": mode, "p": p });
            let bank = cached(
                &dir.join(format!("{stem}.pbnk")),
                &dkey,
                rebuild <= Rebuild::Detectors,
                || {
                    train_bank(
                        mode,
                        &features,
                        &train.labels,
                        model.num_classes(),
                        p,
                        &dcfg,
                    )
                },
                |b, path| b.save(path),
                DetectorBank::load,
            )?;
            let cal = cached(
                &dir.join(format!("{stem}.pcal")),
                &dkey,
                rebuild <= Rebuild::Calibration,
                || calibrate_bank(&bank, &features, &train.labels),
                |c, path| c.save(path),
                LogisticCalibration::load,
            )?;
            banks.push(CalibratedBank { mode, p, bank, cal });
        }
    }
    Ok(SeedModels {
        seed,
        model,
        ranges,
        banks,
        energy,
    })
}

pub fn prepare_all(cfg: &RunConfig, data: &Datasets, rebuild: Rebuild) -> Result<Vec<SeedModels>> {
    cfg.seed_list()
        .into_iter()
        .map(|s| prepare_seed(cfg, data, s, rebuild))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum MeasureKind {
    Bank(usize),
    Mcp,
    Eb,
    Fnrd,
}

/// The confidence measures of a run, in report order: every bank, then the
/// MCP, EB and FNRD baselines.
pub struct Measures {
    names: Vec<String>,
    kinds: Vec<MeasureKind>,
}

impl Measures {
    fn new(cfg: &RunConfig) -> Self {
        let mut names = Vec::new();
        let mut kinds = Vec::new();
        let mut i = 0;
        for &p in &cfg.detector_counts {
            for &mode in &cfg.modes {
                let base = match mode {
                    BankMode::Vanilla => "vP",
                    BankMode::ClassBased => "cP",
                };
                names.push(if cfg.detector_counts.len() > 1 {
                    format!("{base}-p{p}")
                } else {
                    base.to_string()
                });
                kinds.push(MeasureKind::Bank(i));
                i += 1;
            }
        }
        for (name, kind) in [
            ("MCP", MeasureKind::Mcp),
            ("EB", MeasureKind::Eb),
            ("FNRD", MeasureKind::Fnrd),
        ] {
            names.push(name.into());
            kinds.push(kind);
        }
        Self { names, kinds }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Replaces raw EB scores by their training-set logistic CDF.
    fn bound_energy(&self, scores: &mut [Vec<f64>], fit: &LogisticParams) {
        if let Some(m) = self.kinds.iter().position(|&k| k == MeasureKind::Eb) {
            for row in scores {
                row[m] = fit.cdf(row[m]).value();
            }
        }
    }

    fn scores(
        &self,
        fmap: &FeatureMap,
        logits: &[f64],
        banks: &[CalibratedBank],
        ranges: &NeuronRanges,
    ) -> Result<Vec<f64>> {
        self.kinds
            .iter()
            .map(|k| match *k {
                MeasureKind::Bank(i) => {
                    let b = &banks[i];
                    match b.mode {
                        BankMode::Vanilla => vanilla_confidence(fmap, &b.bank, &b.cal),
                        BankMode::ClassBased => class_confidence(fmap, logits, &b.bank, &b.cal),
                    }
                    .map(|c| c.value())
                }
                MeasureKind::Mcp => mcp_confidence(logits).map(|c| c.value()),
                MeasureKind::Eb => energy_confidence(logits),
                MeasureKind::Fnrd => {
                    fnrd_confidence(&monitored_activations(fmap, logits), ranges).map(|c| c.value())
                }
            })
            .collect()
    }
}

/// Scores of every measure for every image, image-major.
fn score_images(
    models: &SeedModels,
    measures: &Measures,
    images: &[Image],
) -> Result<Vec<Vec<f64>>> {
    images
        .par_iter()
        .map(|x| {
            let (f, l) = models.model.forward(x)?;
            measures.scores(&f, &l, &models.banks, &models.ranges)
        })
        .collect()
}

fn column(scores: &[Vec<f64>], m: usize) -> Vec<f64> {
    scores.iter().map(|s| s[m]).collect()
}

/// One `(iod, ood)` score table per seed, summarised into report rows.
fn cross_rows(
    names: &[String],
    per_seed: &[(Vec<Vec<f64>>, Vec<Vec<f64>>)],
    iod: &str,
    ood: &str,
) -> Result<Vec<CrossRow>> {
    let mut rows = Vec::new();
    for (m, name) in names.iter().enumerate() {
        let reports = per_seed
            .iter()
            .map(|(i, o)| EvalReport::compute(&ScorePair::new(column(i, m), column(o, m))?))
            .collect::<Result<Vec<_>>>()?;
        for (k, metric) in ["auroc", "aupr", "fpr80"].iter().enumerate() {
            let values: Vec<f64> = reports.iter().map(|r| r.metrics()[k].1).collect();
            let s = summarize(&values)?;
            rows.push(CrossRow {
                measure: name.clone(),
                iod: iod.into(),
                ood: ood.into(),
                metric: (*metric).into(),
                mean: s.mean,
                std: s.std,
            });
        }
    }
    Ok(rows)
}

/// Cross-dataset table from images; writes `cross.csv` and `cross.json`.
pub fn run_cross(cfg: &RunConfig, data: &Datasets, models: &[SeedModels]) -> Result<Vec<CrossRow>> {
    let measures = Measures::new(cfg);
    let per_seed = models
        .iter()
        .map(|sm| {
            Ok((
                score_images(sm, &measures, &data.test.images)?,
                score_images(sm, &measures, &data.ood.images)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let rows = cross_rows(
        measures.names(),
        &per_seed,
        &data.test.manifest.name,
        &data.ood.manifest.name,
    )?;
    report::write_table(&cfg.out, "cross", &rows)?;
    Ok(rows)
}

fn archive_name(path: &Path) -> String {
    path.file_stem()
        .map_or_else(|| "archive".into(), |s| s.to_string_lossy().into_owned())
}

fn load_archive(path: &Path) -> Result<(Vec<FeatureMap>, Vec<Vec<f64>>, Vec<usize>)> {
    let a = FarcArchive::load(path)?;
    if a.is_empty() {
        return Err(Error::Artifact(format!(
            "{}: archive has no records",
            path.display()
        )));
    }
    let logits = a.records.iter().map(|r| r.logits_f64()).collect();
    Ok((a.feature_maps(), logits, a.labels()))
}

/// Cross-dataset table from feature archives: detectors and ranges are fitted
/// on the training archive, one detector initialisation per seed.
pub fn run_cross_archives(cfg: &RunConfig) -> Result<Vec<CrossRow>> {
    let paths = cfg
        .archives
        .as_ref()
        .ok_or_else(|| Error::Config("no feature archives configured".into()))?;
    let (train_f, train_l, labels) = load_archive(&paths.train)?;
    let (iod_f, iod_l, _) = load_archive(&paths.iod)?;
    let (ood_f, ood_l, _) = load_archive(&paths.ood)?;
    let num_classes = train_l[0].len();
    if [&iod_l, &ood_l].iter().any(|l| l[0].len() != num_classes) {
        return Err(Error::Artifact(
            "archives disagree on the logit count".into(),
        ));
    }
    if labels.iter().any(|&l| l >= num_classes) {
        return Err(Error::Artifact(
            "training archive label exceeds logit count".into(),
        ));
    }
    let ranges = NeuronRanges::fit(
        train_f
            .iter()
            .zip(&train_l)
            .map(|(f, l)| monitored_activations(f, l))
            .collect::<Vec<_>>()
            .iter()
            .map(Vec::as_slice),
    )?;
    let measures = Measures::new(cfg);
    let mut per_seed = Vec::new();
    for seed in cfg.seed_list() {
        let dcfg = detector_config(cfg, seed);
        let mut banks = Vec::new();
        for &p in &cfg.detector_counts {
            for &mode in &cfg.modes {
                let bank = train_bank(mode, &train_f, &labels, num_classes, p, &dcfg)?;
                let cal = calibrate_bank(&bank, &train_f, &labels)?;
                banks.push(CalibratedBank { mode, p, bank, cal });
            }
        }
        let score = |fs: &[FeatureMap], ls: &[Vec<f64>]| {
            fs.par_iter()
                .zip(ls)
                .map(|(f, l)| measures.scores(f, l, &banks, &ranges))
                .collect::<Result<Vec<_>>>()
        };
        per_seed.push((score(&iod_f, &iod_l)?, score(&ood_f, &ood_l)?));
    }
    let rows = cross_rows(
        measures.names(),
        &per_seed,
        &archive_name(&paths.iod),
        &archive_name(&paths.ood),
    )?;
    report::write_table(&cfg.out, "cross", &rows)?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerturbReport {
    pub gammas: Vec<GammaRow>,
    pub ranks: Vec<RankRow>,
}

/// `Γ` sweeps of every measure over the in-distribution test set, their rank
/// correlation with perturbation strength, and one plot per perturbation.
/// Writes `perturb.{csv,json}`, `perturb_gamma.{csv,json}` and
/// `perturb_<kind>.svg`.
pub fn run_perturb(
    cfg: &RunConfig,
    data: &Datasets,
    models: &[SeedModels],
) -> Result<PerturbReport> {
    let measures = Measures::new(cfg);
    let names = measures.names();
    let mut gammas = Vec::new();
    let mut ranks = Vec::new();
    for grid in cfg.grids()? {
        let kind = grid.kind();
        // [seed][magnitude][measure]
        let mut curves = Vec::with_capacity(models.len());
        for sm in models {
            let mut per_mag = Vec::with_capacity(grid.len());
            for &mag in grid.values() {
                let images = perturb_dataset(kind, mag, &data.test.images, cfg.perturb_seed)?;
                let mut scores = score_images(sm, &measures, &images)?;
                measures.bound_energy(&mut scores, &sm.energy);
                let n = scores.len() as f64;
                per_mag.push(
                    (0..names.len())
                        .map(|m| column(&scores, m).iter().sum::<f64>() / n)
                        .collect::<Vec<_>>(),
                );
            }
            curves.push(per_mag);
        }
        let strengths: Vec<f64> = grid.values().iter().map(|&v| kind.strength(v)).collect();
        for (m, name) in names.iter().enumerate() {
            for (sm, per_mag) in models.iter().zip(&curves) {
                let ys: Vec<f64> = per_mag.iter().map(|g| g[m]).collect();
                for (&mag, &g) in grid.values().iter().zip(&ys) {
                    gammas.push(GammaRow {
                        measure: name.clone(),
                        perturbation: kind.as_str().into(),
                        seed: sm.seed,
                        magnitude: mag,
                        gamma: g,
                    });
                }
                let r_s = match spearman(&strengths, &ys) {
                    Ok(v) => Some(v),
                    Err(Error::DegenerateInput(_)) => None,
                    Err(e) => return Err(e),
                };
                ranks.push(RankRow {
                    measure: name.clone(),
                    perturbation: kind.as_str().into(),
                    seed: sm.seed,
                    r_s,
                });
            }
        }
        let series: Vec<Series> = names
            .iter()
            .enumerate()
            .map(|(m, n)| Series {
                label: n.clone(),
                ys: (0..grid.len())
                    .map(|j| curves.iter().map(|c| c[j][m]).sum::<f64>() / curves.len() as f64)
                    .collect(),
            })
            .collect();
        let svg = report::line_plot(
            &format!("mean confidence under {kind}"),
            "magnitude",
            grid.values(),
            &series,
        )?;
        write_file(&cfg.out.join(format!("perturb_{kind}.svg")), svg.as_bytes())?;
    }
    report::write_table(&cfg.out, "perturb", &ranks)?;
    report::write_table(&cfg.out, "perturb_gamma", &gammas)?;
    Ok(PerturbReport { gammas, ranks })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RenderedReference {
    pub rank: usize,
    pub image_id: String,
    pub image_index: usize,
    pub score: f64,
    pub confidence: f64,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectorReferences {
    pub class: usize,
    pub detector: usize,
    pub references: Vec<RenderedReference>,
}

/// Pattern references of the first seed's class-based bank (the vanilla bank
/// when no class-based one is configured), rendered as saliency overlays into
/// `explain/` with a `references.json` index.
pub fn run_explain(
    cfg: &RunConfig,
    data: &Datasets,
    models: &[SeedModels],
) -> Result<Vec<DetectorReferences>> {
    let sm = models
        .first()
        .ok_or_else(|| Error::Config("no seeds".into()))?;
    let cb = sm
        .banks
        .iter()
        .find(|b| b.mode == BankMode::ClassBased)
        .or_else(|| sm.banks.first())
        .ok_or_else(|| Error::Config("no detector bank".into()))?;
    let refs = pattern_references(
        &cb.bank,
        &cb.cal,
        &sm.model,
        &data.train.images,
        cfg.explain.top_k,
        &cfg.explain.smoothgrad,
    )?;
    let dir = cfg.out.join("explain");
    let mut out = Vec::with_capacity(refs.len());
    for r in &refs {
        let mut rendered = Vec::with_capacity(r.entries.len());
        for (rank, e) in r.entries.iter().enumerate() {
            let file = reference_file_name(r.class, r.detector, rank);
            let image = &data.train.images[e.image_index];
            let sal = e.saliency.as_ref().expect("references carry saliency");
            ppm::write(&dir.join(&file), &overlay(image, sal)?)?;
            rendered.push(RenderedReference {
                rank,
                image_id: data.train.manifest.entries[e.image_index].id.clone(),
                image_index: e.image_index,
                score: e.score,
                confidence: e.confidence,
                file,
            });
        }
        out.push(DetectorReferences {
            class: r.class,
            detector: r.detector,
            references: rendered,
        });
    }
    write_file(&dir.join("references.json"), &report::to_json(&out))?;
    Ok(out)
}

/// Summary of a full run.
pub struct RunOutcome {
    pub cross: Vec<CrossRow>,
    pub perturb: Option<PerturbReport>,
    pub explain: Option<Vec<DetectorReferences>>,
}

/// Every stage from scratch. With feature archives configured only the
/// cross-dataset benchmark runs, since perturbations and saliency need images.
pub fn run_all(cfg: &RunConfig) -> Result<RunOutcome> {
    if cfg.archives.is_some() {
        return Ok(RunOutcome {
            cross: run_cross_archives(cfg)?,
            perturb: None,
            explain: None,
        });
    }
    let data = load_data(cfg)?;
    if cfg.data_dir.is_none() {
        write_datasets(&cfg.out.join("data"), &data)?;
    }
    let models = prepare_all(cfg, &data, Rebuild::Classifier)?;
    Ok(RunOutcome {
        cross: run_cross(cfg, &data, &models)?,
        perturb: Some(run_perturb(cfg, &data, &models)?),
        explain: Some(run_explain(cfg, &data, &models)?),
    })
}
