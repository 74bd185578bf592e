//! One PASS/FAIL line per acceptance criterion. Run with
//! `cargo test -p particul --test acceptance -- --nocapture` to see them.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use common::*;
use particul::baselines::{fnrd_confidence, mcp_confidence};
use particul::calibration::{class_confidence, detector_confidence, LogisticParams};
use particul::classifier::{accuracy, monitored_activations};
use particul::config::RunConfig;
use particul::detectors::{detection_score, mean_peak_mass, train_class_based, BankMode};
use particul::metrics::{aupr, auroc, fpr_at_tpr, spearman, ScorePair};
use particul::pipeline::{
    load_data, prepare_all, run_all, Datasets, Rebuild, RunOutcome, SeedModels,
};
use particul::tensor::{argmax, FeatureMap};
use particul::Error;
use rand::Rng;

#[derive(Default)]
struct Ledger {
    lines: Vec<(bool, String, String)>,
}

impl Ledger {
    fn record(&mut self, pass: bool, name: &str, detail: String) {
        println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        self.lines.push((pass, name.to_string(), detail));
    }

    fn failures(&self) -> Vec<&str> {
        self.lines
            .iter()
            .filter(|l| !l.0)
            .map(|l| l.1.as_str())
            .collect()
    }
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(
                    p.strip_prefix(root).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                );
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn gradient_fidelity(l: &mut Ledger) {
    let t = Instant::now();
    let n = 24;
    let (mut det_worst, mut in_worst, mut unicity) = (0.0f64, 0.0f64, 0);
    for seed in 0..n {
        let (e, u) = detector_fd_error(seed);
        det_worst = det_worst.max(e);
        unicity += u as usize;
        in_worst = in_worst.max(input_fd_error(seed));
    }
    let secs = t.elapsed().as_secs_f64();
    l.record(
        det_worst < 1e-4 && in_worst < 1e-4 && unicity > 0 && secs < 30.0,
        "gradient fidelity",
        format!(
            "{n} detector-loss instances ({unicity} with active unicity) worst rel err {det_worst:.2e}; \
             {n} input-gradient instances worst {in_worst:.2e}; {secs:.2}s"
        ),
    );
}

fn metric_oracles(l: &mut Ledger) {
    let t = Instant::now();
    let n = 100;
    let mut worst = [0.0f64; 4];
    for seed in 0..n {
        let (iod, ood) = metric_instance(seed);
        let pair = ScorePair::new(iod.clone(), ood.clone()).unwrap();
        worst[0] = worst[0].max((auroc(&pair).unwrap() - mann_whitney(&iod, &ood)).abs());
        worst[1] = worst[1].max((aupr(&pair).unwrap() - sweep_aupr(&iod, &ood)).abs());
        for target in [0.05, 0.5, 0.8, 0.95, 1.0] {
            let d =
                (fpr_at_tpr(&pair, target).unwrap() - sweep_fpr_at_tpr(&iod, &ood, target)).abs();
            worst[2] = worst[2].max(d);
        }
    }
    // separate paired instances, 2..=200 long, half of them heavily tied and a
    // tenth constant
    let mut degenerate = 0;
    let mut mismatched = 0;
    for seed in 0..n {
        let mut r = rng(seed + 7000);
        let len = r.random_range(2..=200);
        let (xs, ys) = if seed % 10 == 0 {
            (tied_scores(&mut r, len), vec![1.5; len])
        } else if seed % 2 == 0 {
            (tied_scores(&mut r, len), tied_scores(&mut r, len))
        } else {
            let xs: Vec<f64> = (0..len).map(|_| r.random::<f64>()).collect();
            let ys = xs.iter().map(|x| x + r.random_range(-0.3..0.3)).collect();
            (xs, ys)
        };
        let oracle = rank_pearson(&xs, &ys);
        match spearman(&xs, &ys) {
            Ok(v) => worst[3] = worst[3].max((v - oracle).abs()),
            Err(Error::DegenerateInput(_)) if oracle.is_nan() => degenerate += 1,
            Err(_) => mismatched += 1,
        }
    }
    let secs = t.elapsed().as_secs_f64();
    l.record(
        worst.iter().all(|&w| w < 1e-9) && mismatched == 0 && secs < 10.0,
        "metric oracles",
        format!(
            "{n} instances each; max |diff| auroc {:.1e} aupr {:.1e} fpr@tpr {:.1e} spearman {:.1e} \
             ({degenerate} degenerate agreed); {secs:.2}s",
            worst[0], worst[1], worst[2], worst[3]
        ),
    );
}

fn train_features(sm: &SeedModels, data: &Datasets) -> Vec<FeatureMap> {
    data.train
        .images
        .iter()
        .map(|x| sm.model.forward(x).unwrap().0)
        .collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn calibration(l: &mut Ledger, data: &Datasets, models: &[SeedModels]) {
    let (mut lo, mut hi, mut count) = (f64::INFINITY, f64::NEG_INFINITY, 0);
    let (mut mean_lo, mut mean_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for sm in models {
        let feats = train_features(sm, data);
        for cb in &sm.banks {
            for c in 0..cb.bank.num_classes() {
                let group: Vec<&FeatureMap> = match cb.mode {
                    BankMode::Vanilla => feats.iter().collect(),
                    BankMode::ClassBased => feats
                        .iter()
                        .zip(&data.train.labels)
                        .filter(|(_, &y)| y == c)
                        .map(|(f, _)| f)
                        .collect(),
                };
                for i in 0..cb.bank.per_class() {
                    let confs: Vec<f64> = group
                        .iter()
                        .map(|f| {
                            cb.cal
                                .get(c, i)
                                .cdf(detection_score(f, cb.bank.kernel(c, i)).unwrap())
                                .value()
                        })
                        .collect();
                    let mean = confs.iter().sum::<f64>() / confs.len() as f64;
                    mean_lo = mean_lo.min(mean);
                    mean_hi = mean_hi.max(mean);
                    let m = median(confs);
                    lo = lo.min(m);
                    hi = hi.max(m);
                    count += 1;
                }
            }
        }
    }
    let mut spot = 0.0f64;
    let mut r = rng(11);
    for _ in 0..100 {
        let (mu, sigma) = (r.random_range(-20.0..20.0), r.random_range(0.01..10.0));
        spot = spot.max((detector_confidence(mu, mu, sigma).unwrap().value() - 0.5).abs());
        let q = detector_confidence(mu + sigma * 3f64.ln(), mu, sigma)
            .unwrap()
            .value();
        spot = spot.max((q - 0.75).abs());
    }
    l.record(
        (0.4..=0.6).contains(&lo) && (0.4..=0.6).contains(&hi) && spot <= 1e-12,
        "calibration",
        format!(
            "{count} detectors, median confidence over fitting set in [{lo:.4}, {hi:.4}] \
             (mean in [{mean_lo:.4}, {mean_hi:.4}]); spot values max err {spot:.1e}"
        ),
    );
}

fn cross_dataset(l: &mut Ledger, outcome: &RunOutcome, secs: f64) {
    let mut ok = secs < 300.0;
    let mut parts = Vec::new();
    for name in ["vP", "cP"] {
        let row = outcome
            .cross
            .iter()
            .find(|r| r.measure == name && r.metric == "auroc")
            .unwrap();
        let std = row.std.unwrap_or(f64::NAN);
        ok &= row.mean >= 0.80 && std <= 0.10;
        parts.push(format!("{name} auroc {:.3} ± {std:.3}", row.mean));
    }
    let baselines: Vec<String> = ["MCP", "EB", "FNRD"]
        .iter()
        .filter_map(|n| {
            outcome
                .cross
                .iter()
                .find(|r| r.measure == *n && r.metric == "auroc")
        })
        .map(|r| format!("{} {:.3}", r.measure, r.mean))
        .collect();
    l.record(
        ok,
        "cross-dataset",
        format!(
            "{} (baselines {}); end-to-end {secs:.1}s on one thread",
            parts.join(", "),
            baselines.join(", ")
        ),
    );
}

fn perturbation(l: &mut Ledger, outcome: &RunOutcome, data: &Datasets, models: &[SeedModels]) {
    let report = outcome.perturb.as_ref().unwrap();
    let mut ok = true;
    let mut parts = Vec::new();
    for kind in ["gaussian_noise", "gaussian_blur"] {
        let rs: Vec<Option<f64>> = report
            .ranks
            .iter()
            .filter(|r| r.measure == "vP" && r.perturbation == kind)
            .map(|r| r.r_s)
            .collect();
        ok &= !rs.is_empty() && rs.iter().all(|v| v.is_some_and(|v| v <= -0.9));
        let shown: Vec<String> = rs
            .iter()
            .map(|v| v.map_or("undefined".into(), |v| format!("{v:.3}")))
            .collect();
        parts.push(format!("vP r_s {kind} per seed [{}]", shown.join(", ")));
    }

    let mut shift_err = 0.0f64;
    for sm in models {
        for x in &data.test.images {
            let logits = sm.model.forward(x).unwrap().1;
            let base = mcp_confidence(&logits).unwrap().value();
            for c in [-40.0, -1.5, 0.25, 7.0, 40.0] {
                let shifted: Vec<f64> = logits.iter().map(|v| v + c).collect();
                shift_err = shift_err.max((mcp_confidence(&shifted).unwrap().value() - base).abs());
            }
        }
    }
    let mut fnrd_min = f64::INFINITY;
    for sm in models {
        for x in &data.train.images {
            let (f, logits) = sm.model.forward(x).unwrap();
            fnrd_min = fnrd_min.min(
                fnrd_confidence(&monitored_activations(&f, &logits), &sm.ranges)
                    .unwrap()
                    .value(),
            );
        }
    }
    ok &= shift_err < 1e-12 && fnrd_min == 1.0;
    parts.push(format!("MCP shift max diff {shift_err:.1e}"));
    parts.push(format!("FNRD min on training samples {fnrd_min}"));
    l.record(ok, "perturbation", parts.join("; "));
}

fn determinism(l: &mut Ledger, first: &Path, cfg: &RunConfig) {
    let mut again = cfg.clone();
    again.out = first.with_file_name("again");
    // second run on the default multi-threaded pool
    run_all(&again).unwrap();
    let (a, b) = (tree(first), tree(&again.out));
    let differing: Vec<String> = a
        .iter()
        .filter(|(k, v)| b.get(*k) != Some(*v))
        .map(|(k, _)| k.display().to_string())
        .collect();
    let kinds: std::collections::BTreeSet<String> = a
        .keys()
        .filter_map(|k| k.extension().map(|e| e.to_string_lossy().into_owned()))
        .collect();
    l.record(
        differing.is_empty() && a.len() == b.len(),
        "determinism",
        format!(
            "{} files ({}) compared across a 1-thread and a multi-thread run; {} differ",
            a.len(),
            kinds.into_iter().collect::<Vec<_>>().join("/"),
            differing.len()
        ),
    );
}

fn class_isolation(l: &mut Ledger, cfg: &RunConfig, data: &Datasets, models: &[SeedModels]) {
    let sm = &models[0];
    let feats = train_features(sm, data);
    let labels = &data.train.labels;
    let k = sm.model.num_classes();
    let p = cfg.detector_counts[0];
    let dcfg = particul::detectors::DetectorTrainConfig {
        seed: sm.seed,
        ..cfg.detectors.clone()
    };
    let full = train_class_based(&feats, labels, k, p, &dcfg).unwrap();
    let mut ablation_ok = true;
    for j in 0..k {
        // drop class j and renumber the rest
        let (fs, ls): (Vec<FeatureMap>, Vec<usize>) = feats
            .iter()
            .zip(labels)
            .filter(|(_, &y)| y != j)
            .map(|(f, &y)| (f.clone(), if y > j { y - 1 } else { y }))
            .unzip();
        let ablated = train_class_based(&fs, &ls, k - 1, p, &dcfg).unwrap();
        for i in (0..k).filter(|&i| i != j) {
            let renumbered = if i > j { i - 1 } else { i };
            ablation_ok &= full.class_kernels(i) == ablated.class_kernels(renumbered);
        }
    }

    let cb = sm
        .banks
        .iter()
        .find(|b| b.mode == BankMode::ClassBased)
        .unwrap();
    let mut r = rng(23);
    let (mut checked, mut changed) = (0, 0);
    for x in data.test.images.iter().chain(&data.ood.images) {
        let (f, logits) = sm.model.forward(x).unwrap();
        let z = argmax(&logits);
        let before = class_confidence(&f, &logits, &cb.bank, &cb.cal)
            .unwrap()
            .value();
        let (mut bank, mut cal) = (cb.bank.clone(), cb.cal.clone());
        for c in (0..k).filter(|&c| c != z) {
            for i in 0..p {
                bank.kernel_mut(c, i)
                    .iter_mut()
                    .for_each(|v| *v = r.random_range(-5.0..5.0));
                cal.set(
                    c,
                    i,
                    LogisticParams {
                        mu: r.random_range(-3.0..3.0),
                        sigma: r.random_range(0.1..3.0),
                    },
                );
            }
        }
        let after = class_confidence(&f, &logits, &bank, &cal).unwrap().value();
        checked += 1;
        changed += (before.to_bits() != after.to_bits()) as usize;
    }
    l.record(
        ablation_ok && changed == 0,
        "class isolation",
        format!(
            "removing each of {k} classes left the other classes' kernels {}; \
             {checked} confidences after mutating other-class detectors, {changed} changed bits",
            if ablation_ok { "identical" } else { "altered" }
        ),
    );
}

fn regression_notes(data: &Datasets, models: &[SeedModels]) {
    for sm in models {
        let acc = accuracy(&sm.model, &data.train.images, &data.train.labels).unwrap();
        let feats = train_features(sm, data);
        let refs: Vec<&FeatureMap> = feats.iter().collect();
        let cb = sm
            .banks
            .iter()
            .find(|b| b.mode == BankMode::Vanilla)
            .unwrap();
        let mass = mean_peak_mass(&refs, cb.bank.kernels()).unwrap();
        let shown: Vec<String> = mass.iter().map(|m| format!("{m:.2}")).collect();
        println!(
            "note seed {}: train accuracy {acc:.3}, vanilla peak mass [{}]",
            sm.seed,
            shown.join(", ")
        );
    }
}

#[test]
fn acceptance() {
    let mut l = Ledger::default();
    gradient_fidelity(&mut l);
    metric_oracles(&mut l);

    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::from_json("{}").unwrap();
    cfg.out = tmp.path().join("first");
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap();
    let t = Instant::now();
    let outcome = pool.install(|| run_all(&cfg)).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let data = load_data(&cfg).unwrap();
    let models = prepare_all(&cfg, &data, Rebuild::Nothing).unwrap();

    calibration(&mut l, &data, &models);
    cross_dataset(&mut l, &outcome, secs);
    perturbation(&mut l, &outcome, &data, &models);
    determinism(&mut l, &cfg.out, &cfg);
    class_isolation(&mut l, &cfg, &data, &models);
    regression_notes(&data, &models);

    let failed = l.failures();
    println!(
        "{} of {} criteria passed",
        l.lines.len() - failed.len(),
        l.lines.len()
    );
    assert!(failed.is_empty(), "failing criteria: {}", failed.join(", "));
}
