//! Subcommand implementations.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gta_core::attack_core::{LossMode, PerturbationRecord};
use gta_core::data::AttackBudget;
use gta_core::baselines::{
    ensemble_transfer_attack, joint_single_image_attack, train_uap, uap_attack, BaselineMethod,
    UapArtifact, UapTrainConfig,
};
use gta_core::checkpoint::{
    load_checkpoint, load_classifier, load_surrogate, save_checkpoint, save_classifier,
    save_surrogate, Checkpoint,
};
use gta_core::data::{generate_desk_split, load_archive, save_archive, DeskSpec, Image, LabeledImageSet};
use gta_core::evaluation::{
    build_report, gta_success_rate, save_noise_panel, save_spectrum_panels, spectrum,
    transfer_cross_dataset, transfer_within_dataset, GTAReport, ReportFormat,
};
use gta_core::ice::{ice_attack, metrics_csv, train_ice, IceResources, IceTrainConfig};
use gta_core::models::{
    build_classifier, build_surrogate_with, train_classifier, Classifier, SurrogateModel,
    TrainHparams,
};
use gta_core::sine_attack::{load_omega, sa_attack, sa_train, save_omega, wave_descriptor, SaTrainConfig};
use gta_core::GtaError;

use crate::config::{DatasetCfg, ExperimentConfig, Manifest, Workspace};

fn mix_seed(base: u64, tag: &str) -> u64 {
    let mut h = base ^ 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}

fn desk_spec(ds: &DatasetCfg, seed: u64) -> DeskSpec {
    DeskSpec {
        name: ds.name.clone(),
        height: ds.height,
        width: ds.width,
        num_classes: ds.num_classes,
        samples_per_class: ds.train_per_class,
        seed: mix_seed(seed, &ds.name),
    }
}

fn train_one(
    cfg: &ExperimentConfig,
    ds: &DatasetCfg,
    arch: &str,
    train_set: &LabeledImageSet,
    test_set: &LabeledImageSet,
    role: &str,
) -> Result<(Classifier, f64, f64)> {
    let seed = mix_seed(cfg.seed, &format!("{role}:{}:{arch}", ds.name));
    let mut model = build_classifier(arch, ds.num_classes, (ds.height, ds.width), seed)?;
    let hp = TrainHparams {
        learning_rate: cfg.train.classifier_learning_rate,
        weight_decay: cfg.train.weight_decay,
        momentum: cfg.train.classifier_momentum,
        batch_size: cfg.train.classifier_batch_size,
        iterations: cfg.train.classifier_iterations,
        seed,
    };
    let stats = train_classifier(&mut model, train_set, Some(test_set), &hp)
        .with_context(|| format!("training {role} model {arch} on {}", ds.name))?;
    Ok((model, stats.train_accuracy, stats.test_accuracy.unwrap_or(0.0)))
}

pub fn cmd_prepare(cfg: &ExperimentConfig, ws: &Workspace) -> Result<()> {
    let manifest = Manifest::for_config(cfg);
    if let Ok(existing) = Manifest::read(&ws.manifest_path()) {
        if existing.config_hash == manifest.config_hash && prepared_artifacts_exist(cfg, ws) {
            println!("prepare: artifacts up-to-date, skipping");
            return Ok(());
        }
    }
    ws.create_dirs()?;

    // Per-model resume: an interrupted run skips models that were already
    // trained under the same config hash instead of starting over.
    let hash_path = ws.models_dir().join("prepare.hash");
    let mut rows: BTreeMap<String, String> = BTreeMap::new();
    if fs::read_to_string(&hash_path).map(|h| h.trim() == manifest.config_hash).unwrap_or(false) {
        if let Ok(prev) = fs::read_to_string(ws.models_dir().join("accuracy.csv")) {
            for line in prev.lines().skip(1) {
                let key: Vec<&str> = line.split(',').take(3).collect();
                if key.len() == 3 {
                    rows.insert(key.join(","), line.to_string());
                }
            }
        }
    } else {
        let _ = fs::remove_file(ws.models_dir().join("accuracy.csv"));
        fs::write(&hash_path, &manifest.config_hash)?;
    }
    let flush = |rows: &BTreeMap<String, String>| -> Result<()> {
        let mut acc = String::from("dataset,architecture,role,train_accuracy,test_accuracy\n");
        for line in rows.values() {
            acc.push_str(line);
            acc.push('\n');
        }
        fs::write(ws.models_dir().join("accuracy.csv"), acc)?;
        Ok(())
    };

    for ds in &cfg.source_datasets {
        let (train, test) = generate_desk_split(&desk_spec(ds, cfg.seed), ds.test_per_class)?;
        save_archive(&train, &ws.archive(&ds.name, "train"))?;
        save_archive(&test, &ws.archive(&ds.name, "test"))?;
        for arch in &ds.architectures {
            let key = format!("{},{arch},source", ds.name);
            if rows.contains_key(&key) && ws.source_model(&ds.name, arch).exists() {
                println!("source {}/{arch}: already trained, skipping", ds.name);
                continue;
            }
            let (model, tr, te) = train_one(cfg, ds, arch, &train, &test, "source")?;
            save_classifier(&model, &ws.source_model(&ds.name, arch))?;
            rows.insert(key.clone(), format!("{key},{tr:.4},{te:.4}"));
            flush(&rows)?;
            println!("source {}/{arch}: train acc {tr:.3}, test acc {te:.3}", ds.name);
        }
    }
    let tds = &cfg.target.dataset;
    let (train, test) = generate_desk_split(&desk_spec(tds, cfg.seed), tds.test_per_class)?;
    save_archive(&train, &ws.archive(&tds.name, "train"))?;
    save_archive(&test, &ws.archive(&tds.name, "test"))?;
    for arch in &tds.architectures {
        let key = format!("{},{arch},target", tds.name);
        if rows.contains_key(&key) && ws.target_model(arch).exists() {
            println!("target {}/{arch}: already trained, skipping", tds.name);
            continue;
        }
        let (model, tr, te) = train_one(cfg, tds, arch, &train, &test, "target")?;
        save_classifier(&model, &ws.target_model(arch))?;
        rows.insert(key.clone(), format!("{key},{tr:.4},{te:.4}"));
        flush(&rows)?;
        println!("target {}/{arch}: train acc {tr:.3}, test acc {te:.3}", tds.name);
    }
    manifest.write(&ws.manifest_path())?;
    Ok(())
}

fn prepared_artifacts_exist(cfg: &ExperimentConfig, ws: &Workspace) -> bool {
    let mut ok = true;
    for ds in &cfg.source_datasets {
        ok &= ws.archive(&ds.name, "train").exists() && ws.archive(&ds.name, "test").exists();
        for arch in &ds.architectures {
            ok &= ws.source_model(&ds.name, arch).exists();
        }
    }
    let tds = &cfg.target.dataset;
    ok &= ws.archive(&tds.name, "train").exists() && ws.archive(&tds.name, "test").exists();
    for arch in &tds.architectures {
        ok &= ws.target_model(arch).exists();
    }
    ok
}

fn load_resources(cfg: &ExperimentConfig, ws: &Workspace) -> Result<IceResources> {
    let mut sets = Vec::new();
    let mut models = Vec::new();
    for ds in &cfg.source_datasets {
        let path = ws.archive(&ds.name, "train");
        if !path.exists() {
            return Err(GtaError::Missing(format!("dataset archive {} (run prepare)", path.display())).into());
        }
        sets.push(load_archive(&path)?);
        let group: Vec<Classifier> = ds
            .architectures
            .iter()
            .map(|arch| {
                let p = ws.source_model(&ds.name, arch);
                if !p.exists() {
                    return Err(anyhow!(GtaError::Missing(format!(
                        "source model {} (run prepare)",
                        p.display()
                    ))));
                }
                Ok(load_classifier(&p)?)
            })
            .collect::<Result<_>>()?;
        models.push(group);
    }
    Ok(IceResources::new(sets, models)?)
}

fn flat_source_models(cfg: &ExperimentConfig, ws: &Workspace) -> Result<Vec<Classifier>> {
    Ok(load_resources(cfg, ws)?.source_models.into_iter().flatten().collect())
}

pub fn cmd_train(cfg: &ExperimentConfig, ws: &Workspace, method: &str) -> Result<()> {
    let resources = load_resources(cfg, ws)?;
    match method {
        "ice" => {
            let surrogate = build_surrogate_with(
                cfg.attack.output_dim,
                cfg.attack.surrogate_widths,
                mix_seed(cfg.seed, "surrogate-init"),
            )?;
            let icfg = IceTrainConfig {
                iterations: cfg.train.ice_iterations,
                batch_size: cfg.train.attack_batch_size,
                learning_rate: cfg.train.attack_learning_rate,
                eps_c: cfg.attack.eps_c,
                eps_c_period: cfg.attack.eps_c_period,
                gamma1: cfg.attack.gamma1,
                gamma2: cfg.attack.gamma2,
                inner_steps: cfg.attack.inner_steps,
                seed: mix_seed(cfg.seed, "ice-train"),
                ..IceTrainConfig::default()
            };
            let (trained, metrics) = train_ice(surrogate, &resources, &icfg)?;
            save_surrogate(&trained, &ws.attackers_dir().join("ice.ckpt"))?;
            fs::write(ws.attackers_dir().join("ice_metrics.csv"), metrics_csv(&metrics))?;
            println!("ice: wrote surrogate checkpoint ({} iterations)", icfg.iterations);
        }
        "sa" => {
            let scfg = SaTrainConfig {
                iterations: cfg.train.sa_iterations,
                batch_size: cfg.train.attack_batch_size,
                learning_rate: cfg.train.sa_learning_rate.unwrap_or(cfg.train.attack_learning_rate),
                epsilon: cfg.attack.epsilon,
                seed: mix_seed(cfg.seed, "sa-train"),
            };
            let (omega, metrics) = sa_train(&resources, &scfg)?;
            save_omega(&omega, &ws.attackers_dir().join("omega.txt"))?;
            fs::write(ws.attackers_dir().join("sa_metrics.csv"), metrics_csv(&metrics))?;
            println!("sa: trained omega\n{}", wave_descriptor(&omega).table());
        }
        "uap" => {
            let ucfg = UapTrainConfig {
                iterations: cfg.train.uap_iterations,
                batch_size: cfg.train.attack_batch_size,
                learning_rate: cfg.train.uap_learning_rate,
                epsilon: cfg.attack.epsilon,
                seed: mix_seed(cfg.seed, "uap-train"),
            };
            let (artifact, metrics) = train_uap(&resources, &ucfg)?;
            save_uap(&artifact, &ws.attackers_dir().join("uap.ckpt"))?;
            fs::write(ws.attackers_dir().join("uap_metrics.csv"), metrics_csv(&metrics))?;
            println!("uap: wrote 100x100x3 artifact");
        }
        other => bail!("unknown training method '{other}' (expected ice, sa, or uap)"),
    }
    Ok(())
}

fn save_uap(artifact: &UapArtifact, path: &Path) -> Result<()> {
    let ck = Checkpoint {
        arch: "uap".into(),
        meta: vec![],
        tensors: vec![("nu".into(), artifact.nu.clone().into_dyn())],
    };
    save_checkpoint(&ck, path)?;
    Ok(())
}

fn load_uap(path: &Path) -> Result<UapArtifact> {
    let ck = load_checkpoint(path)?;
    if ck.arch != "uap" {
        return Err(GtaError::UnknownArchitecture(ck.arch).into());
    }
    let nu = ck
        .tensors
        .first()
        .ok_or_else(|| GtaError::Corrupt("uap checkpoint has no tensor".into()))?
        .1
        .clone()
        .into_dimensionality::<ndarray::Ix3>()
        .map_err(|e| GtaError::Corrupt(format!("uap tensor is not 3-D: {e}")))?;
    let artifact = UapArtifact { nu };
    artifact.validate()?;
    Ok(artifact)
}

/// Deterministic stratified subset: every k-th image up to `count`.
fn eval_subset(set: &LabeledImageSet, count: usize) -> LabeledImageSet {
    let n = set.len().min(count);
    let step = (set.len() / n.max(1)).max(1);
    let idx: Vec<usize> = (0..n).map(|i| (i * step) % set.len()).collect();
    LabeledImageSet {
        name: format!("{}-eval", set.name),
        height: set.height,
        width: set.width,
        num_classes: set.num_classes,
        images: idx.iter().map(|&i| set.images[i].clone()).collect(),
        labels: idx.iter().map(|&i| set.labels[i]).collect(),
    }
}

fn loss_mode_of(cfg: &ExperimentConfig) -> Result<LossMode> {
    match cfg.attack.loss_mode.as_str() {
        "entropy" => Ok(LossMode::Entropy),
        "kl_vs_clean" => Ok(LossMode::KlVsClean),
        other => bail!("unknown loss_mode '{other}'"),
    }
}

enum Attacker {
    Ice(SurrogateModel),
    Sa(gta_core::sine_attack::SineParams),
    Uap(UapArtifact),
    Ensemble(Vec<Classifier>, BaselineMethod),
    Joint(Vec<Classifier>),
}

impl Attacker {
    fn craft(&self, image: &Image, budget: AttackBudget, loss_mode: LossMode) -> gta_core::Result<PerturbationRecord> {
        match self {
            Attacker::Ice(s) => ice_attack(s, image, budget),
            Attacker::Sa(omega) => Ok(sa_attack(omega, image, budget.epsilon)),
            Attacker::Uap(artifact) => Ok(uap_attack(artifact, image, budget.epsilon)),
            Attacker::Ensemble(models, method) => {
                ensemble_transfer_attack(models, image, *method, budget, loss_mode)
            }
            Attacker::Joint(models) => joint_single_image_attack(models, image, budget),
        }
    }
}

fn build_attacker(cfg: &ExperimentConfig, ws: &Workspace, method: &str) -> Result<Attacker> {
    let need = |p: std::path::PathBuf, what: &str| -> Result<std::path::PathBuf> {
        if !p.exists() {
            return Err(GtaError::Missing(format!("{what} {} (run train first)", p.display())).into());
        }
        Ok(p)
    };
    Ok(match method {
        "ice" => Attacker::Ice(load_surrogate(&need(ws.attackers_dir().join("ice.ckpt"), "surrogate")?)?),
        "sa" => Attacker::Sa(load_omega(&need(ws.attackers_dir().join("omega.txt"), "omega record")?)?),
        "uap" => Attacker::Uap(load_uap(&need(ws.attackers_dir().join("uap.ckpt"), "UAP artifact")?)?),
        "fgsm" => Attacker::Ensemble(flat_source_models(cfg, ws)?, BaselineMethod::Fgsm),
        "pgd" => Attacker::Ensemble(flat_source_models(cfg, ws)?, BaselineMethod::Pgd),
        "mi" => Attacker::Ensemble(flat_source_models(cfg, ws)?, BaselineMethod::Mi { mu: cfg.attack.mu }),
        "di" => Attacker::Ensemble(
            flat_source_models(cfg, ws)?,
            BaselineMethod::Di { seed: mix_seed(cfg.seed, "di") },
        ),
        "ti-dim" => Attacker::Ensemble(
            flat_source_models(cfg, ws)?,
            BaselineMethod::TiDim { kernel_size: cfg.attack.ti_kernel, sigma: cfg.attack.ti_sigma },
        ),
        "joint" => Attacker::Joint(flat_source_models(cfg, ws)?),
        other => bail!("unknown attack method '{other}'"),
    })
}

fn load_targets(cfg: &ExperimentConfig, ws: &Workspace) -> Result<Vec<(String, Classifier)>> {
    cfg.target
        .dataset
        .architectures
        .iter()
        .map(|arch| {
            let p = ws.target_model(arch);
            if !p.exists() {
                return Err(GtaError::Missing(format!("target model {} (run prepare)", p.display())).into());
            }
            Ok((arch.clone(), load_classifier(&p)?))
        })
        .collect()
}

pub fn cmd_attack_eval(cfg: &ExperimentConfig, ws: &Workspace, method: &str, with_spectrum: bool) -> Result<()> {
    let attacker = build_attacker(cfg, ws, method)?;
    let targets = load_targets(cfg, ws)?;
    let test = load_archive(&ws.archive(&cfg.target.dataset.name, "test"))?;
    let test = eval_subset(&test, cfg.evaluation.eval_images);
    let budget = AttackBudget { epsilon: cfg.attack.epsilon, steps: cfg.attack.steps };
    let loss_mode = loss_mode_of(cfg)?;
    let mut reports = Vec::new();
    for (name, target) in &targets {
        let craft = |img: &Image| -> gta_core::Result<Image> {
            Ok(attacker.craft(img, budget, loss_mode)?.adversarial)
        };
        let report = gta_success_rate(
            target,
            name,
            &test,
            &craft,
            method,
            budget.epsilon,
            budget.steps,
            cfg.seed,
        )?;
        println!(
            "{method} vs {name}: {}/{} = {:.3}",
            report.successes,
            report.evaluated,
            report.rate()
        );
        reports.push(report);
    }
    let csv = build_report(&reports, ReportFormat::RowsCsv)?;
    fs::write(ws.reports_dir().join(format!("rows_{method}.csv")), csv)?;
    if with_spectrum {
        write_spectrum_artifacts(cfg, ws, method, &attacker, &test, budget, loss_mode)?;
    }
    Ok(())
}

fn write_spectrum_artifacts(
    _cfg: &ExperimentConfig,
    ws: &Workspace,
    method: &str,
    attacker: &Attacker,
    test: &LabeledImageSet,
    budget: AttackBudget,
    loss_mode: LossMode,
) -> Result<()> {
    let sample = test
        .images
        .first()
        .ok_or_else(|| GtaError::Invalid("no evaluation image for spectrum".into()))?;
    let record = attacker.craft(sample, budget, loss_mode)?;
    let diagram = spectrum(&record.noise)?;
    let stem = ws.reports_dir().join(format!("{method}_noise.png"));
    save_noise_panel(&record.noise, &stem)?;
    let panels = save_spectrum_panels(&diagram, &stem)?;
    let mut peaks = String::from("channel,row_offset,col_offset,radius_bins\n");
    for (ch, name) in ["R", "G", "B"].iter().enumerate() {
        let (du, dv) = diagram.peak_bins[ch];
        peaks.push_str(&format!("{name},{du},{dv},{:.3}\n", diagram.peak_radius(ch)));
    }
    fs::write(ws.reports_dir().join(format!("{method}_spectrum_peaks.csv")), peaks)?;
    println!("spectrum: wrote {} panels for {method}", panels.len() + 1);
    Ok(())
}

pub fn cmd_spectrum(cfg: &ExperimentConfig, ws: &Workspace, method: &str) -> Result<()> {
    let attacker = build_attacker(cfg, ws, method)?;
    let test = load_archive(&ws.archive(&cfg.target.dataset.name, "test"))?;
    let test = eval_subset(&test, cfg.evaluation.eval_images);
    let budget = AttackBudget { epsilon: cfg.attack.epsilon, steps: cfg.attack.steps };
    write_spectrum_artifacts(cfg, ws, method, &attacker, &test, budget, loss_mode_of(cfg)?)
}

pub fn cmd_transfer_study(cfg: &ExperimentConfig, ws: &Workspace) -> Result<()> {
    let surrogate = load_surrogate(&ws.attackers_dir().join("ice.ckpt"))
        .map_err(|_| GtaError::Missing("ICE surrogate (run `train ice` first)".into()))?;
    let targets = load_targets(cfg, ws)?;
    let budget = AttackBudget { epsilon: cfg.attack.epsilon, steps: cfg.attack.steps };

    let test = load_archive(&ws.archive(&cfg.target.dataset.name, "test"))?;
    let victims = eval_subset(&test, cfg.evaluation.eval_images);
    let k = cfg.evaluation.transfer_records.min(victims.len());
    let records: Vec<PerturbationRecord> = victims.images[..k]
        .iter()
        .map(|img| ice_attack(&surrogate, img, budget))
        .collect::<gta_core::Result<_>>()?;

    // equal-budget random-sign control
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, "random-sign"));
    let random_records: Vec<PerturbationRecord> = victims.images[..k]
        .iter()
        .map(|img| {
            let noise = Array3::from_shape_fn(img.raw_dim(), |_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 });
            let mut adv = img.clone();
            adv.zip_mut_with(&noise, |x, &n| *x = (*x + budget.epsilon * n).clamp(0.0, 255.0));
            PerturbationRecord::new(img.clone(), adv, "RandomSign", budget)
        })
        .collect();

    let mut reports = Vec::new();
    for (name, target) in &targets {
        reports.push(transfer_within_dataset(&records, &victims, target, name)?);
        reports.push(transfer_within_dataset(&random_records, &victims, target, name)?);
    }

    // cross-dataset: take the largest source resolution and crop its noises
    // onto the target victims (precondition: source >= target resolution)
    let big = cfg
        .source_datasets
        .iter()
        .max_by_key(|ds| ds.height * ds.width)
        .expect("validated nonempty");
    if big.height >= cfg.target.dataset.height && big.width >= cfg.target.dataset.width {
        let src_test = load_archive(&ws.archive(&big.name, "test"))?;
        let src_eval = eval_subset(&src_test, k);
        let src_records: Vec<PerturbationRecord> = src_eval
            .images
            .iter()
            .map(|img| ice_attack(&surrogate, img, budget))
            .collect::<gta_core::Result<_>>()?;
        for (name, target) in &targets {
            reports.push(transfer_cross_dataset(&src_records, &victims, budget.epsilon, target, name)?);
        }
    } else {
        println!(
            "transfer-study: skipping cross-dataset leg ({}x{} source < {}x{} target)",
            big.height, big.width, cfg.target.dataset.height, cfg.target.dataset.width
        );
    }
    for r in &reports {
        println!("{} vs {}: {}/{} = {:.3}", r.method, r.target_model, r.successes, r.evaluated, r.rate());
    }
    let csv = build_report(&reports, ReportFormat::RowsCsv)?;
    fs::write(ws.reports_dir().join("transfer.csv"), csv)?;
    Ok(())
}

pub fn cmd_report(ws: &Workspace) -> Result<()> {
    let mut reports: Vec<GTAReport> = Vec::new();
    let mut paths: Vec<_> = fs::read_dir(ws.reports_dir())
        .map_err(|_| GtaError::Missing("reports directory (run attack-eval first)".into()))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.file_name()
                .map(|n| n.to_string_lossy().starts_with("rows_"))
                .unwrap_or(false)
        })
        .collect();
    paths.sort();
    for p in &paths {
        let text = fs::read_to_string(p)?;
        for line in text.lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                continue;
            }
            reports.push(GTAReport {
                method: f[0].into(),
                target_model: f[1].into(),
                evaluated: f[2].parse()?,
                successes: f[3].parse()?,
                epsilon: f[5].parse()?,
                steps: f[6].parse()?,
                seed: f[7].parse()?,
            });
        }
    }
    if reports.is_empty() {
        return Err(GtaError::Missing("no per-method report rows found".into()).into());
    }
    let csv = build_report(&reports, ReportFormat::MatrixCsv)?;
    fs::write(ws.reports_dir().join("matrix.csv"), &csv)?;
    println!("{csv}");
    Ok(())
}
