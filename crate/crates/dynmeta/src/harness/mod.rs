//! Experiment orchestration: dataset assembly, the train/eval/stability/
//! sweep/ablate/export commands, metrics persistence, and plot emission.
//!
//! Deterministic results (losses, accuracies, skip rates) go to
//! `metrics.csv`, which is byte-identical across reruns of the same
//! (config, seed). Wall-clock readings land in `timing.csv`, and the
//! accuracy-milestone table (first epoch and cumulative seconds per
//! threshold) in `milestones.csv`.

pub mod svg;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::clustering::{dbscan, kmeans, make_pseudo_labels, PointSet};
use crate::config::{DatasetKind, Mode, RunConfig};
use crate::data::{
    gen_blobs, inject_label_noise, load_image_dataset, load_tensor_dataset, sample_unlabeled_batch,
    split_by_class, LabeledDataset,
};
use crate::error::{Error, Result};
use crate::eval::{eval_fewshot, eval_zeroshot, stability_curve, EvalReport};
use crate::meta::{
    init_dynamic_head, train_mtl, train_supervised_meta, train_uht, train_wct, Architecture,
    Backbone, EpochEvent, HyperConfig, Provenance, TrainReport, TrainedModel,
};
use crate::repstab::{capture_activations, stability_csv, ActivationSnapshot, ProbeBatch};
use crate::rng::{stream, subseed};
use crate::scalar::Scalar;
use crate::tensor::adapt::{adapt_and_outer_grad, OuterWrt};
use crate::tensor::{sgd_update, GradMap, Tensor};
use std::fs;
use std::path::{Path, PathBuf};

/// One deterministic metrics row.
#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub epoch: usize,
    pub phase: &'static str,
    pub metric: String,
    pub value: f64,
}

/// Append-only metrics log; rows are sorted by (epoch, phase, metric) when
/// written.
#[derive(Debug, Clone)]
pub struct MetricsLog {
    pub run_id: String,
    pub seed: u64,
    rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub fn new(run_id: String, seed: u64) -> MetricsLog {
        MetricsLog {
            run_id,
            seed,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, epoch: usize, phase: &'static str, metric: impl Into<String>, value: f64) {
        self.rows.push(MetricsRow {
            epoch,
            phase,
            metric: metric.into(),
            value,
        });
    }

    pub fn rows(&self) -> &[MetricsRow] {
        &self.rows
    }

    pub fn to_csv(&self) -> String {
        let mut rows = self.rows.clone();
        rows.sort_by(|a, b| {
            (a.epoch, a.phase, &a.metric)
                .cmp(&(b.epoch, b.phase, &b.metric))
        });
        let mut out = String::from("run_id,seed,epoch,phase,metric,value\n");
        for r in rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                self.run_id, self.seed, r.epoch, r.phase, r.metric, r.value
            ));
        }
        out
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// The class-disjoint splits used by every command.
pub struct SplitData {
    pub full: LabeledDataset<f32>,
    pub train: LabeledDataset<f32>,
    pub val: LabeledDataset<f32>,
    pub test: LabeledDataset<f32>,
}

/// Assemble the dataset named by the config and split it; label noise is
/// injected into the training split only.
pub fn build_dataset(config: &RunConfig) -> Result<SplitData> {
    let full: LabeledDataset<f32> = match config.dataset {
        DatasetKind::Blobs => gen_blobs(
            config.blob_classes,
            config.blob_dim,
            config.blob_per_class,
            config.blob_intra,
            config.blob_inter,
            subseed(config.seed, &[0xda7a]),
        )?,
        DatasetKind::ImageDir => load_image_dataset(Path::new(&config.data_path))?,
        DatasetKind::Tensor => load_tensor_dataset(
            Path::new(&config.data_path),
            Path::new(&config.labels_path),
        )?,
    };
    let (train, val, test) = split_by_class(
        &full,
        (config.train_frac, config.val_frac, config.test_frac),
        subseed(config.seed, &[0x5b11]),
    )?;
    let train = if config.noise_ratio > 0.0 {
        inject_label_noise(&train, config.noise_ratio, subseed(config.seed, &[0x401]))?
    } else {
        train
    };
    Ok(SplitData {
        full,
        train,
        val,
        test,
    })
}

/// Architecture implied by the config and the dataset's feature shape.
pub fn build_architecture(config: &RunConfig, ds: &LabeledDataset<f32>) -> Result<Architecture> {
    match config.backbone.as_str() {
        "mlp" => {
            let input: usize = ds.feature_dims().iter().product();
            let mut dims = vec![input];
            dims.extend(&config.hidden);
            dims.push(config.embed_dim);
            Ok(Architecture::Mlp { dims })
        }
        "conv" => match ds.feature_dims() {
            &[c, h, w] => Ok(Architecture::Conv {
                channels: config.conv_channels,
                in_channels: c,
                height: h,
                width: w,
                layers: config.conv_layers,
            }),
            other => Err(Error::Shape(format!(
                "conv backbone needs image samples (c,h,w), got {other:?}"
            ))),
        },
        other => Err(Error::Argument(format!("unknown backbone '{other}'"))),
    }
}

fn provenance(config: &RunConfig) -> Provenance {
    Provenance {
        seed: config.seed,
        config_hash: config.hash(),
        mode: config.mode.as_str().to_string(),
    }
}

/// Few-shot plus zero-shot evaluation with the config's protocol.
pub fn evaluate_model(
    model: &TrainedModel<f32>,
    test: &LabeledDataset<f32>,
    config: &RunConfig,
) -> Result<Vec<EvalReport>> {
    let few = eval_fewshot(
        model,
        test,
        config.eval_way,
        config.eval_shot,
        config.eval_query,
        config.eval_episodes,
        config.eval_adapt_steps,
        config.alpha,
        config.eval_scope(),
        subseed(config.seed, &[0xe7a]),
    )?;
    let zero = eval_zeroshot(
        model,
        test,
        test.class_count(),
        config.kmeans_seeds,
        config.kmeans_iters,
        subseed(config.seed, &[0x2e0]),
    )?;
    Ok(vec![few, zero])
}

/// Everything `train` leaves on disk.
pub struct TrainArtifacts {
    pub model: TrainedModel<f32>,
    pub report_epochs: usize,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

struct MilestoneTracker {
    thresholds: Vec<f64>,
    /// (first epoch, cumulative train seconds) per threshold.
    crossed: Vec<Option<(usize, f64)>>,
}

impl MilestoneTracker {
    fn new(thresholds: &[f64]) -> MilestoneTracker {
        MilestoneTracker {
            thresholds: thresholds.to_vec(),
            crossed: vec![None; thresholds.len()],
        }
    }

    fn observe(&mut self, epoch: usize, cum_secs: f64, accuracy: f64) {
        for (i, &t) in self.thresholds.iter().enumerate() {
            if self.crossed[i].is_none() && accuracy >= t {
                self.crossed[i] = Some((epoch, cum_secs));
            }
        }
    }

    fn to_csv(&self) -> String {
        let mut out = String::from("threshold,first_epoch,cum_seconds\n");
        for (t, c) in self.thresholds.iter().zip(&self.crossed) {
            match c {
                Some((e, s)) => out.push_str(&format!("{t},{e},{s:.3}\n")),
                None => out.push_str(&format!("{t},,\n")),
            }
        }
        out
    }
}

/// Dispatch the mode's trainer with metric recording, periodic checkpoints,
/// and milestone tracking; persist everything under the config's out_dir.
pub fn run_train(config: &RunConfig) -> Result<TrainArtifacts> {
    config.validate()?;
    let out = &config.out_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_text(&out.join("config.resolved"), &config.canonical_text())?;

    let data = build_dataset(config)?;
    let arch = build_architecture(config, &data.train)?;
    let hyper = config.hyper();
    let prov = provenance(config);

    let mut metrics = MetricsLog::new(config.run_id(), config.seed);
    let mut timing = String::from("run_id,seed,epoch,wall_secs\n");
    let mut milestones = MilestoneTracker::new(&config.milestones);
    let mut cum_secs = 0.0f64;
    let run_id = config.run_id();
    let test = &data.test;
    let mut checkpoint_err: Option<Error> = None;

    let report = {
        let mut hook = |event: &EpochEvent<f32>| {
            let stats = event.stats;
            metrics.push(stats.epoch, "train", "loss", stats.mean_loss);
            metrics.push(
                stats.epoch,
                "train",
                "skip_rate",
                stats.skipped as f64 / stats.tasks.max(1) as f64,
            );
            cum_secs += stats.wall_secs;
            timing.push_str(&format!(
                "{},{},{},{:.6}\n",
                run_id, config.seed, stats.epoch, stats.wall_secs
            ));
            if config.eval_every > 0 && (stats.epoch + 1) % config.eval_every == 0 {
                let snapshot = TrainedModel {
                    backbone: event.backbone.clone(),
                    static_head: event.static_head.cloned(),
                    provenance: Provenance {
                        seed: config.seed,
                        config_hash: config.hash(),
                        mode: config.mode.as_str().to_string(),
                    },
                };
                if let Ok(report) = eval_fewshot(
                    &snapshot,
                    test,
                    config.eval_way,
                    config.eval_shot,
                    config.eval_query,
                    config.milestone_episodes,
                    config.eval_adapt_steps,
                    config.alpha,
                    config.eval_scope(),
                    subseed(config.seed, &[0x317e, stats.epoch as u64]),
                ) {
                    metrics.push(stats.epoch, "eval_fewshot", "accuracy", report.mean);
                    milestones.observe(stats.epoch, cum_secs, report.mean);
                }
            }
            if config.checkpoint_every > 0
                && (stats.epoch + 1) % config.checkpoint_every == 0
                && checkpoint_err.is_none()
            {
                let snapshot = TrainedModel {
                    backbone: event.backbone.clone(),
                    static_head: event.static_head.cloned(),
                    provenance: Provenance {
                        seed: config.seed,
                        config_hash: config.hash(),
                        mode: config.mode.as_str().to_string(),
                    },
                };
                let path = out.join(format!("checkpoint_{:06}.mlck", stats.epoch));
                if let Err(e) = save_checkpoint(&snapshot, &path) {
                    checkpoint_err = Some(e);
                }
            }
        };
        dispatch_training(config, &arch, &data, &hyper, prov, &mut hook)?
    };
    if let Some(e) = checkpoint_err {
        return Err(e);
    }

    let checkpoint_path = out.join("checkpoint.mlck");
    save_checkpoint(&report.model, &checkpoint_path)?;
    let metrics_path = out.join("metrics.csv");
    write_text(&metrics_path, &metrics.to_csv())?;
    write_text(&out.join("timing.csv"), &timing)?;
    write_text(&out.join("milestones.csv"), &milestones.to_csv())?;

    Ok(TrainArtifacts {
        model: report.model,
        report_epochs: report.epochs.len(),
        metrics_path,
        checkpoint_path,
    })
}

fn dispatch_training(
    config: &RunConfig,
    arch: &Architecture,
    data: &SplitData,
    hyper: &HyperConfig,
    prov: Provenance,
    hook: &mut dyn FnMut(&EpochEvent<f32>),
) -> Result<TrainReport<f32>> {
    match config.mode {
        Mode::Uht => train_uht(arch.clone(), &data.train, hyper, config.seed, prov, hook),
        Mode::Maml | Mode::Anil => train_supervised_meta(
            arch.clone(),
            &data.train,
            hyper,
            config.episode_spec(),
            config.head_mode,
            config.seed,
            prov,
            hook,
        ),
        Mode::Wct => train_wct(arch.clone(), &data.train, hyper, config.seed, prov, hook),
        Mode::Mtl => train_mtl(
            arch.clone(),
            &data.train,
            hyper,
            config.episode_spec(),
            config.seed,
            prov,
            hook,
        ),
    }
}

/// Load a checkpoint and evaluate it on the config's test split. Returns the
/// reports and writes them to `eval_metrics.csv` in the out dir (a separate
/// file so evaluating into a training directory never disturbs its
/// deterministic `metrics.csv`).
pub fn run_eval(config: &RunConfig, ckpt: &Path) -> Result<Vec<EvalReport>> {
    config.validate()?;
    let out = &config.out_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_text(&out.join("config.resolved"), &config.canonical_text())?;

    let model = load_checkpoint::<f32>(ckpt)?;
    let data = build_dataset(config)?;
    let reports = evaluate_model(&model, &data.test, config)?;

    let mut metrics = MetricsLog::new(config.run_id(), config.seed);
    for r in &reports {
        let phase = if r.metric_name.starts_with("fewshot") {
            "eval_fewshot"
        } else {
            "eval_zeroshot"
        };
        metrics.push(0, phase, format!("{}_mean", r.metric_name), r.mean);
        metrics.push(0, phase, format!("{}_ci95", r.metric_name), r.ci95);
    }
    write_text(&out.join("eval_metrics.csv"), &metrics.to_csv())?;
    Ok(reports)
}

/// Train while snapshotting probe activations every epoch; emit the
/// stability CSV and an SVG with one line per layer.
pub struct StabilityArtifacts {
    pub csv_path: PathBuf,
    pub svg_path: PathBuf,
    pub records: usize,
    pub layers: Vec<String>,
}

pub fn run_stability(config: &RunConfig) -> Result<StabilityArtifacts> {
    config.validate()?;
    let out = &config.out_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_text(&out.join("config.resolved"), &config.canonical_text())?;

    let data = build_dataset(config)?;
    let arch = build_architecture(config, &data.train)?;
    let hyper = config.hyper();
    let prov = provenance(config);

    let probe_size = config.probe_size.min(data.test.len());
    let probe = ProbeBatch {
        inputs: sample_unlabeled_batch(&data.test, probe_size, subseed(config.seed, &[0x9a0b]))?
            .inputs,
    };

    let mut snapshots: Vec<ActivationSnapshot> = Vec::with_capacity(hyper.epochs);
    let mut capture_err: Option<Error> = None;
    {
        let mut hook = |event: &EpochEvent<f32>| {
            if capture_err.is_some() {
                return;
            }
            match capture_activations(event.backbone, event.static_head, &probe, event.epoch) {
                Ok(snap) => snapshots.push(snap),
                Err(e) => capture_err = Some(e),
            }
        };
        dispatch_training(config, &arch, &data, &hyper, prov, &mut hook)?;
    }
    if let Some(e) = capture_err {
        return Err(e);
    }

    let records = stability_curve(&snapshots, config.var_frac)?;
    let csv_path = out.join("stability.csv");
    write_text(&csv_path, &stability_csv(&config.run_id(), config.seed, &records))?;

    let layers: Vec<String> = snapshots[0]
        .layers
        .iter()
        .map(|(n, _)| n.clone())
        .collect();
    let series: Vec<svg::Series> = layers
        .iter()
        .map(|layer| svg::Series {
            name: layer.clone(),
            points: records
                .iter()
                .filter(|r| &r.layer == layer)
                .map(|r| (r.epoch as f64, r.rs))
                .collect(),
        })
        .collect();
    let svg_path = out.join("stability.svg");
    write_text(
        &svg_path,
        &svg::line_plot("representation stability per layer", 0.0, 1.0, &series),
    )?;

    Ok(StabilityArtifacts {
        csv_path,
        svg_path,
        records: records.len(),
        layers,
    })
}

/// One short train+eval per cell of the Cartesian grid; failures become
/// error rows instead of aborting the sweep.
pub fn run_sweep(config: &RunConfig, grid: &[(String, Vec<String>)]) -> Result<PathBuf> {
    config.validate()?;
    if grid.is_empty() {
        return Err(Error::Argument("sweep needs at least one --grid".into()));
    }
    let out = &config.out_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_text(&out.join("config.resolved"), &config.canonical_text())?;

    // Cartesian product, row-major in the given key order.
    let mut cells: Vec<Vec<(String, String)>> = vec![Vec::new()];
    for (key, values) in grid {
        let mut next = Vec::with_capacity(cells.len() * values.len());
        for cell in &cells {
            for v in values {
                let mut c = cell.clone();
                c.push((key.clone(), v.clone()));
                next.push(c);
            }
        }
        cells = next;
    }

    let mut rows: Vec<String> = Vec::with_capacity(cells.len());
    for cell in &cells {
        let desc = cell
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(";");
        let result = (|| -> Result<(f64, f64, f64, f64)> {
            let mut cell_config = config.clone();
            for (k, v) in cell {
                cell_config.set_key(k, v, 0)?;
            }
            cell_config.validate()?;
            cell_config.out_dir = out.join("cells").join(desc.replace(['=', ';'], "_"));
            let data = build_dataset(&cell_config)?;
            let arch = build_architecture(&cell_config, &data.train)?;
            let hyper = cell_config.hyper();
            let prov = provenance(&cell_config);
            fs::create_dir_all(&cell_config.out_dir)
                .map_err(|e| Error::io(&cell_config.out_dir, e))?;
            write_text(
                &cell_config.out_dir.join("config.resolved"),
                &cell_config.canonical_text(),
            )?;
            let report = dispatch_training(
                &cell_config,
                &arch,
                &data,
                &hyper,
                prov,
                &mut |_: &EpochEvent<f32>| {},
            )?;
            let reports = evaluate_model(&report.model, &data.test, &cell_config)?;
            Ok((
                reports[0].mean,
                reports[0].ci95,
                reports[1].mean,
                reports[1].ci95,
            ))
        })();
        match result {
            Ok((fa, fc, za, zc)) => {
                rows.push(format!("{desc},ok,{fa},{fc},{za},{zc}"));
            }
            Err(e) => {
                let brief = e.to_string().replace(',', ";").replace('\n', " ");
                rows.push(format!("{desc},error:{brief},,,,"));
            }
        }
    }
    rows.sort();
    let mut csv = String::from("cell,status,fewshot_acc,fewshot_ci95,zeroshot_acc,zeroshot_ci95\n");
    for r in rows {
        csv.push_str(&r);
        csv.push('\n');
    }
    let path = out.join("sweep.csv");
    write_text(&path, &csv)?;
    Ok(path)
}

// ── ablation variants ────────────────────────────────────────────────────

fn embed_points(backbone: &Backbone<f32>, inputs: &Tensor<f32>, normalize: bool) -> Result<PointSet> {
    let emb = backbone.embed(inputs)?;
    let (n, d) = emb.as_matrix_dims()?;
    let points = PointSet::new(n, d, emb.data().iter().map(|v| v.to_f64()).collect())?;
    Ok(if normalize {
        points.unit_normalized()
    } else {
        points
    })
}

/// G1: homogeneous tasks from K-means (k = way) learned by a persistent
/// static head.
fn train_g1(
    arch: Architecture,
    train: &LabeledDataset<f32>,
    hyper: &HyperConfig,
    way: usize,
    kmeans_iters: usize,
    seed: u64,
    prov: Provenance,
) -> Result<TrainedModel<f32>> {
    let mut backbone: Backbone<f32> = Backbone::init(arch, seed)?;
    let mut head = init_dynamic_head::<f32>(backbone.embed_dim(), way, seed, u64::MAX)?.params;
    for epoch in 0..hyper.epochs {
        let mut grads: Vec<GradMap<f32>> = Vec::with_capacity(hyper.meta_batch);
        for t in 0..hyper.meta_batch {
            let batch_seed = subseed(seed, &[0x61, epoch as u64, t as u64]);
            let batch =
                sample_unlabeled_batch(train, hyper.sub_sample.min(train.len()), batch_seed)?;
            let points = embed_points(&backbone, &batch.inputs, hyper.normalize_embeddings)?;
            let mut krng = stream(seed, &[0x6b, epoch as u64, t as u64]);
            let (assignment, _) = kmeans(&points, way, kmeans_iters, &mut krng)?;
            let labels: Vec<usize> = assignment.labels.iter().map(|&l| l as usize).collect();
            let inputs = backbone.prep_inputs(&batch.inputs)?;
            let bb = &backbone;
            let out = adapt_and_outer_grad(
                backbone.body(),
                &head,
                hyper.inner_steps,
                hyper.alpha as f32,
                hyper.scope,
                hyper.order,
                OuterWrt::BodyAndHead,
                |tape, b, h| {
                    let x = tape.leaf(inputs.clone());
                    let emb = bb.forward(tape, b, x)?;
                    let logits = crate::meta::head_logits(tape, h, emb)?;
                    tape.softmax_cross_entropy(logits, &labels)
                },
                |tape, b, h| {
                    let x = tape.leaf(inputs.clone());
                    let emb = bb.forward(tape, b, x)?;
                    let logits = crate::meta::head_logits(tape, h, emb)?;
                    tape.softmax_cross_entropy(logits, &labels)
                },
            )?;
            grads.push(out.outer_grad);
        }
        if !grads.is_empty() {
            let mean = GradMap::mean(&grads)?;
            backbone = backbone.with_body(sgd_update(backbone.body(), &mean, hyper.eta as f32)?);
            head = sgd_update(&head, &mean, hyper.eta as f32)?;
        }
    }
    Ok(TrainedModel {
        backbone,
        static_head: Some(head),
        provenance: prov,
    })
}

/// G2: pseudo-labels derived once from the frozen initial body and never
/// re-derived; tasks then train dynamic heads bi-level as usual.
fn train_g2(
    arch: Architecture,
    train: &LabeledDataset<f32>,
    hyper: &HyperConfig,
    seed: u64,
    prov: Provenance,
) -> Result<TrainedModel<f32>> {
    let mut backbone: Backbone<f32> = Backbone::init(arch, seed)?;
    let points = embed_points(&backbone, train.samples(), hyper.normalize_embeddings)?;
    let assignment = dbscan(&points, &hyper.dbscan);
    let pseudo = make_pseudo_labels(&assignment, true, hyper.dbscan.min_samples);
    if pseudo.num_classes < 2 {
        return Err(Error::Argument(format!(
            "initial clustering produced {} usable clusters; need >= 2",
            pseudo.num_classes
        )));
    }
    let pseudo_ds = LabeledDataset::new(
        train.gather(&pseudo.kept)?,
        pseudo.labels.clone(),
        pseudo.num_classes,
    )?;

    for epoch in 0..hyper.epochs {
        let mut grads: Vec<GradMap<f32>> = Vec::with_capacity(hyper.meta_batch);
        for t in 0..hyper.meta_batch {
            let task_id = (epoch * hyper.meta_batch + t) as u64;
            let batch_seed = subseed(seed, &[0x62, epoch as u64, t as u64]);
            let batch = sample_unlabeled_batch(
                &pseudo_ds,
                hyper.sub_sample.min(pseudo_ds.len()),
                batch_seed,
            )?;
            // frozen global labels, re-densified within the batch
            let raw: Vec<usize> = batch
                .source_indices
                .iter()
                .map(|&i| pseudo_ds.labels()[i])
                .collect();
            let mut distinct: Vec<usize> = raw.clone();
            distinct.sort();
            distinct.dedup();
            if distinct.len() < 2 {
                continue;
            }
            let labels: Vec<usize> = raw
                .iter()
                .map(|l| distinct.binary_search(l).unwrap())
                .collect();
            let head =
                init_dynamic_head::<f32>(backbone.embed_dim(), distinct.len(), seed, task_id)?;
            let inputs = backbone.prep_inputs(&batch.inputs)?;
            let bb = &backbone;
            let out = adapt_and_outer_grad(
                backbone.body(),
                &head.params,
                hyper.inner_steps,
                hyper.alpha as f32,
                hyper.scope,
                hyper.order,
                OuterWrt::BodyOnly,
                |tape, b, h| {
                    let x = tape.leaf(inputs.clone());
                    let emb = bb.forward(tape, b, x)?;
                    let logits = crate::meta::head_logits(tape, h, emb)?;
                    tape.softmax_cross_entropy(logits, &labels)
                },
                |tape, b, h| {
                    let x = tape.leaf(inputs.clone());
                    let emb = bb.forward(tape, b, x)?;
                    let logits = crate::meta::head_logits(tape, h, emb)?;
                    tape.softmax_cross_entropy(logits, &labels)
                },
            )?;
            grads.push(out.outer_grad);
        }
        if !grads.is_empty() {
            let mean = GradMap::mean(&grads)?;
            backbone = backbone.with_body(sgd_update(backbone.body(), &mean, hyper.eta as f32)?);
        }
    }
    Ok(TrainedModel {
        backbone,
        static_head: None,
        provenance: prov,
    })
}

/// G3: density clustering as in the full method, but cluster sets are
/// resampled down to a fixed way so a persistent static head fits them.
fn train_g3(
    arch: Architecture,
    train: &LabeledDataset<f32>,
    hyper: &HyperConfig,
    way: usize,
    seed: u64,
    prov: Provenance,
) -> Result<TrainedModel<f32>> {
    let mut backbone: Backbone<f32> = Backbone::init(arch, seed)?;
    let mut head = init_dynamic_head::<f32>(backbone.embed_dim(), way, seed, u64::MAX)?.params;
    for epoch in 0..hyper.epochs {
        let mut grads: Vec<GradMap<f32>> = Vec::with_capacity(hyper.meta_batch);
        for t in 0..hyper.meta_batch {
            let batch_seed = subseed(seed, &[0x63, epoch as u64, t as u64]);
            let batch =
                sample_unlabeled_batch(train, hyper.sub_sample.min(train.len()), batch_seed)?;
            let points = embed_points(&backbone, &batch.inputs, hyper.normalize_embeddings)?;
            let assignment = dbscan(&points, &hyper.dbscan);
            let drop_small = (epoch as f64) >= hyper.drop_epoch_frac * hyper.epochs as f64;
            let pseudo = make_pseudo_labels(&assignment, drop_small, hyper.dbscan.min_samples);
            if pseudo.num_classes < way {
                continue; // cannot resample to the fixed way
            }
            // seeded choice of `way` clusters, ascending so relabeling is canonical
            let mut crng = stream(seed, &[0x635, epoch as u64, t as u64]);
            let mut chosen: Vec<usize> =
                rand::seq::index::sample(&mut crng, pseudo.num_classes, way).into_vec();
            chosen.sort();
            let mut keep_rows = Vec::new();
            let mut labels = Vec::new();
            for (row, &lab) in pseudo.labels.iter().enumerate() {
                if let Ok(new) = chosen.binary_search(&lab) {
                    keep_rows.push(pseudo.kept[row]);
                    labels.push(new);
                }
            }
            let gathered = {
                let all = batch.inputs.clone();
                let n = all.dims()[0];
                let rl = all.numel() / n;
                let mut data = Vec::with_capacity(keep_rows.len() * rl);
                for &i in &keep_rows {
                    data.extend_from_slice(&all.data()[i * rl..(i + 1) * rl]);
                }
                let mut dims = vec![keep_rows.len()];
                dims.extend_from_slice(&all.dims()[1..]);
                Tensor::from_vec(&dims, data)?
            };
            let inputs = backbone.prep_inputs(&gathered)?;
            let bb = &backbone;
            let out = adapt_and_outer_grad(
                backbone.body(),
                &head,
                hyper.inner_steps,
                hyper.alpha as f32,
                hyper.scope,
                hyper.order,
                OuterWrt::BodyAndHead,
                |tape, b, h| {
                    let x = tape.leaf(inputs.clone());
                    let emb = bb.forward(tape, b, x)?;
                    let logits = crate::meta::head_logits(tape, h, emb)?;
                    tape.softmax_cross_entropy(logits, &labels)
                },
                |tape, b, h| {
                    let x = tape.leaf(inputs.clone());
                    let emb = bb.forward(tape, b, x)?;
                    let logits = crate::meta::head_logits(tape, h, emb)?;
                    tape.softmax_cross_entropy(logits, &labels)
                },
            )?;
            grads.push(out.outer_grad);
        }
        if !grads.is_empty() {
            let mean = GradMap::mean(&grads)?;
            backbone = backbone.with_body(sgd_update(backbone.body(), &mean, hyper.eta as f32)?);
            head = sgd_update(&head, &mean, hyper.eta as f32)?;
        }
    }
    Ok(TrainedModel {
        backbone,
        static_head: Some(head),
        provenance: prov,
    })
}

/// Run the four ablation variants on one shared data seed and evaluate them
/// identically. Returns the CSV path.
pub fn run_ablate(config: &RunConfig) -> Result<PathBuf> {
    config.validate()?;
    let out = &config.out_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_text(&out.join("config.resolved"), &config.canonical_text())?;

    let data = build_dataset(config)?;
    let dataset_hash = format!("{:016x}", data.train.fingerprint());
    let arch = build_architecture(config, &data.train)?;
    let hyper = config.hyper();

    let mut rows: Vec<String> = Vec::new();
    let variants: Vec<(&str, Result<TrainedModel<f32>>)> = vec![
        (
            "g1",
            train_g1(
                arch.clone(),
                &data.train,
                &hyper,
                config.way,
                config.kmeans_iters,
                config.seed,
                provenance(config),
            ),
        ),
        (
            "g2",
            train_g2(
                arch.clone(),
                &data.train,
                &hyper,
                config.seed,
                provenance(config),
            ),
        ),
        (
            "g3",
            train_g3(
                arch.clone(),
                &data.train,
                &hyper,
                config.way,
                config.seed,
                provenance(config),
            ),
        ),
        (
            "full",
            train_uht(
                arch.clone(),
                &data.train,
                &hyper,
                config.seed,
                provenance(config),
                &mut |_: &EpochEvent<f32>| {},
            )
            .map(|r| r.model),
        ),
    ];

    for (name, outcome) in variants {
        match outcome {
            Ok(model) => {
                let head_kind = if model.static_head.is_some() {
                    "static"
                } else {
                    "none"
                };
                save_checkpoint(&model, &out.join(format!("{name}.mlck")))?;
                let reports = evaluate_model(&model, &data.test, config)?;
                for r in &reports {
                    rows.push(format!(
                        "{name},{},{},{},{},{head_kind},{dataset_hash}",
                        r.metric_name, r.mean, r.ci95, r.n_episodes
                    ));
                }
            }
            Err(e) => {
                let brief = e.to_string().replace(',', ";").replace('\n', " ");
                rows.push(format!("{name},error:{brief},,,,,{dataset_hash}"));
            }
        }
    }

    let mut csv = String::from("variant,metric,mean,ci95,n,head,dataset_hash\n");
    for r in rows {
        csv.push_str(&r);
        csv.push('\n');
    }
    let path = out.join("ablate.csv");
    write_text(&path, &csv)?;
    Ok(path)
}

/// Embed the config's full dataset with a checkpointed body and write
/// `index,label,e0,...,e{D-1}` rows.
pub fn run_export_embeddings(config: &RunConfig, ckpt: &Path) -> Result<PathBuf> {
    config.validate()?;
    let out = &config.out_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let model = load_checkpoint::<f32>(ckpt)?;
    let data = build_dataset(config)?;
    let emb = model.backbone.embed(data.full.samples())?;
    let (n, d) = emb.as_matrix_dims()?;

    let mut csv = String::from("index,label");
    for j in 0..d {
        csv.push_str(&format!(",e{j}"));
    }
    csv.push('\n');
    for i in 0..n {
        csv.push_str(&format!("{i},{}", data.full.labels()[i]));
        for j in 0..d {
            csv.push_str(&format!(",{}", emb.data()[i * d + j]));
        }
        csv.push('\n');
    }
    let path = out.join("embeddings.csv");
    write_text(&path, &csv)?;
    Ok(path)
}
