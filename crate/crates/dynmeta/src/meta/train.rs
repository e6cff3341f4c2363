//! Training loops: cluster-task bi-level training, supervised meta-learning
//! with static or dynamic heads, whole-class training, and multi-task
//! learning. Within one meta-batch every task adapts from an identical
//! snapshot of the body; tasks run in parallel and reduce in ascending task
//! order, so runs are bit-reproducible from (config, seed).

use super::{head_logits, init_dynamic_head, Architecture, Backbone, DynamicHead, HyperConfig, Provenance, TrainedModel};
use crate::clustering::{dbscan, make_pseudo_labels, PointSet};
use crate::data::{sample_episode, sample_heterogeneous_episode, sample_unlabeled_batch, Episode, LabeledDataset, TaskBatch};
use crate::error::{Error, Result};
use crate::rng::subseed;
use crate::scalar::Scalar;
use crate::tensor::adapt::{adapt_and_outer_grad, OuterWrt, Scope};
use crate::tensor::tape::{Tape, TapedParams, Var};
use crate::tensor::{sgd_update, GradMap, ParamGroup, Tensor};
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::time::Instant;

/// Per-task health information from the unsupervised pipeline.
#[derive(Debug, Clone, Default)]
pub struct TaskDiagnostics {
    pub num_clusters: usize,
    pub noise_points: usize,
    pub kept: usize,
    pub skipped: bool,
}

/// Contribution of one task to the outer update.
pub struct TaskOutcome<E> {
    pub outer_loss: f64,
    /// None when the task was skipped.
    pub outer_grad: Option<GradMap<E>>,
    pub diagnostics: TaskDiagnostics,
}

/// Per-epoch summary row.
#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean outer loss over non-skipped tasks (NaN if all skipped).
    pub mean_loss: f64,
    pub skipped: usize,
    pub tasks: usize,
    pub wall_secs: f64,
}

/// Snapshot handed to the per-epoch hook.
pub struct EpochEvent<'a, E> {
    pub epoch: usize,
    pub backbone: &'a Backbone<E>,
    pub static_head: Option<&'a ParamGroup<E>>,
    pub stats: &'a EpochStats,
}

/// Trained model plus the per-epoch log.
pub struct TrainReport<E> {
    pub model: TrainedModel<E>,
    pub epochs: Vec<EpochStats>,
}

/// No-op hook.
pub fn no_hook<E>(_: &EpochEvent<E>) {}

fn gather_rows<E: Scalar>(t: &Tensor<E>, indices: &[usize]) -> Result<Tensor<E>> {
    let n = t.dims()[0];
    let rl = t.numel() / n;
    let mut data = Vec::with_capacity(indices.len() * rl);
    for &i in indices {
        if i >= n {
            return Err(Error::Index(format!("row {i} out of range 0..{n}")));
        }
        data.extend_from_slice(&t.data()[i * rl..(i + 1) * rl]);
    }
    let mut dims = vec![indices.len()];
    dims.extend_from_slice(&t.dims()[1..]);
    Tensor::from_vec(&dims, data)
}

/// Cross-entropy of head(body(x)) against the given targets.
fn task_loss<E: Scalar>(
    backbone: &Backbone<E>,
    tape: &mut Tape<E>,
    body: &TapedParams,
    head: &TapedParams,
    inputs: &Tensor<E>,
    labels: &[usize],
) -> Result<Var> {
    let x = tape.leaf(inputs.clone());
    let emb = backbone.forward(tape, body, x)?;
    let logits = head_logits(tape, head, emb)?;
    tape.softmax_cross_entropy(logits, labels)
}

/// Plain (non-differentiable) inner-loop adaptation: `inner_steps`
/// applications of θ ← θ − α·∇CE(head(body(x)), labels) on the scoped
/// parameter groups. Used at evaluation time; during training the same
/// updates are recorded on the tape instead.
pub fn inner_adapt<E: Scalar>(
    backbone: &Backbone<E>,
    head: &DynamicHead<E>,
    inputs: &Tensor<E>,
    labels: &[usize],
    steps: usize,
    alpha: f64,
    scope: Scope,
) -> Result<(ParamGroup<E>, ParamGroup<E>)> {
    let prepped = backbone.prep_inputs(inputs)?;
    let mut cur_body = backbone.body().clone();
    let mut cur_head = head.params.clone();
    let alpha_e = E::from_f64(alpha);
    for _ in 0..steps {
        let shell = backbone.with_body(cur_body.clone());
        let mut tape = Tape::new();
        let b = tape.param_group(&cur_body);
        let h = tape.param_group(&cur_head);
        let loss = task_loss(&shell, &mut tape, &b, &h, &prepped, labels)?;
        match scope {
            Scope::BodyAndHead => {
                let gb = tape.grad_map(loss, &[&b])?;
                let gh = tape.grad_map(loss, &[&h])?;
                cur_body = sgd_update(&cur_body, &gb, alpha_e)?;
                cur_head = sgd_update(&cur_head, &gh, alpha_e)?;
            }
            Scope::HeadOnly => {
                let gh = tape.grad_map(loss, &[&h])?;
                cur_head = sgd_update(&cur_head, &gh, alpha_e)?;
            }
        }
    }
    Ok((cur_body, cur_head))
}

/// The unsupervised task pipeline: embed the batch, cluster, pseudo-label,
/// fit a fresh head in the inner loop, and return the outer loss and its
/// gradient over the body. Tasks whose batch yields fewer than two surviving
/// clusters are skipped (zero contribution, flagged in the diagnostics).
pub fn uht_task_outer_loss<E: Scalar>(
    backbone: &Backbone<E>,
    batch: &TaskBatch<E>,
    hyper: &HyperConfig,
    run_seed: u64,
    task_id: u64,
    epoch: usize,
) -> Result<TaskOutcome<E>> {
    let embeddings = backbone.embed(&batch.inputs)?;
    let (n, d) = embeddings.as_matrix_dims()?;
    let coords: Vec<f64> = embeddings.data().iter().map(|v| v.to_f64()).collect();
    let mut points = PointSet::new(n, d, coords)?;
    if hyper.normalize_embeddings {
        points = points.unit_normalized();
    }

    let assignment = dbscan(&points, &hyper.dbscan);
    let drop_small = (epoch as f64) >= hyper.drop_epoch_frac * hyper.epochs as f64;
    let pseudo = make_pseudo_labels(&assignment, drop_small, hyper.dbscan.min_samples);

    let mut diagnostics = TaskDiagnostics {
        num_clusters: pseudo.num_classes,
        noise_points: assignment.noise_count(),
        kept: pseudo.kept.len(),
        skipped: false,
    };
    if pseudo.num_classes < 2 {
        diagnostics.skipped = true;
        return Ok(TaskOutcome {
            outer_loss: f64::NAN,
            outer_grad: None,
            diagnostics,
        });
    }

    let head = init_dynamic_head::<E>(backbone.embed_dim(), pseudo.num_classes, run_seed, task_id)?;
    let kept_inputs = backbone.prep_inputs(&gather_rows(&batch.inputs, &pseudo.kept)?)?;

    // Support/query split when requested: alternate kept positions. Pseudo-
    // labels are frozen from the pre-adaptation embeddings either way.
    let (inner_x, inner_y, outer_x, outer_y) = if hyper.split_support_query {
        let sup: Vec<usize> = (0..pseudo.kept.len()).step_by(2).collect();
        let qry: Vec<usize> = (1..pseudo.kept.len()).step_by(2).collect();
        if qry.is_empty() {
            let all_y = pseudo.labels.clone();
            (kept_inputs.clone(), all_y.clone(), kept_inputs.clone(), all_y)
        } else {
            (
                gather_rows(&kept_inputs, &sup)?,
                sup.iter().map(|&i| pseudo.labels[i]).collect(),
                gather_rows(&kept_inputs, &qry)?,
                qry.iter().map(|&i| pseudo.labels[i]).collect(),
            )
        }
    } else {
        let y = pseudo.labels.clone();
        (kept_inputs.clone(), y.clone(), kept_inputs.clone(), y)
    };

    let outcome = adapt_and_outer_grad(
        backbone.body(),
        &head.params,
        hyper.inner_steps,
        E::from_f64(hyper.alpha),
        hyper.scope,
        hyper.order,
        OuterWrt::BodyOnly,
        |tape, b, h| task_loss(backbone, tape, b, h, &inner_x, &inner_y),
        |tape, b, h| task_loss(backbone, tape, b, h, &outer_x, &outer_y),
    )?;
    if !outcome.outer_loss.to_f64().is_finite() {
        return Err(Error::NonFinite("outer loss".into()));
    }
    Ok(TaskOutcome {
        outer_loss: outcome.outer_loss.to_f64(),
        outer_grad: Some(outcome.outer_grad),
        diagnostics,
    })
}

/// body ← body − eta · mean(task gradients). Errors if no gradients remain.
pub fn outer_step<E: Scalar>(
    backbone: &Backbone<E>,
    task_grads: &[GradMap<E>],
    eta: f64,
) -> Result<Backbone<E>> {
    if task_grads.is_empty() {
        return Err(Error::Argument(
            "outer step needs at least one task gradient".into(),
        ));
    }
    let mean = GradMap::mean(task_grads)?;
    let body = sgd_update(backbone.body(), &mean, E::from_f64(eta))?;
    Ok(backbone.with_body(body))
}

fn epoch_stats(epoch: usize, outcomes: &[TaskOutcome<impl Scalar>], started: Instant) -> EpochStats {
    let kept: Vec<f64> = outcomes
        .iter()
        .filter(|o| !o.diagnostics.skipped)
        .map(|o| o.outer_loss)
        .collect();
    let mean_loss = if kept.is_empty() {
        f64::NAN
    } else {
        kept.iter().sum::<f64>() / kept.len() as f64
    };
    EpochStats {
        epoch,
        mean_loss,
        skipped: outcomes.len() - kept.len(),
        tasks: outcomes.len(),
        wall_secs: started.elapsed().as_secs_f64(),
    }
}

/// Bi-level training over cluster-constructed tasks (labels ignored).
pub fn train_uht<E: Scalar>(
    arch: Architecture,
    train: &LabeledDataset<E>,
    hyper: &HyperConfig,
    seed: u64,
    provenance: Provenance,
    hook: &mut dyn FnMut(&EpochEvent<E>),
) -> Result<TrainReport<E>> {
    hyper.validate()?;
    let mut backbone: Backbone<E> = Backbone::init(arch, seed)?;
    let mut epochs = Vec::with_capacity(hyper.epochs);

    for epoch in 0..hyper.epochs {
        let started = Instant::now();
        let batches: Vec<(u64, TaskBatch<E>)> = (0..hyper.meta_batch)
            .map(|t| {
                let task_id = (epoch * hyper.meta_batch + t) as u64;
                let batch_seed = subseed(seed, &[0x4a5c, epoch as u64, t as u64]);
                sample_unlabeled_batch(train, hyper.sub_sample.min(train.len()), batch_seed)
                    .map(|b| (task_id, b))
            })
            .collect::<Result<_>>()?;

        let outcomes: Vec<TaskOutcome<E>> = batches
            .par_iter()
            .map(|(task_id, batch)| {
                uht_task_outer_loss(&backbone, batch, hyper, seed, *task_id, epoch)
            })
            .collect::<Result<_>>()?;

        let grads: Vec<GradMap<E>> = outcomes
            .iter()
            .filter_map(|o| o.outer_grad.clone())
            .collect();
        if !grads.is_empty() {
            backbone = outer_step(&backbone, &grads, hyper.eta)?;
        }
        let stats = epoch_stats(epoch, &outcomes, started);
        hook(&EpochEvent {
            epoch,
            backbone: &backbone,
            static_head: None,
            stats: &stats,
        });
        epochs.push(stats);
    }

    Ok(TrainReport {
        model: TrainedModel {
            backbone,
            static_head: None,
            provenance,
        },
        epochs,
    })
}

/// Episode construction for the supervised modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpisodeSpec {
    pub way_min: usize,
    pub way_max: usize,
    pub shot: usize,
    pub query: usize,
}

impl EpisodeSpec {
    pub fn fixed(way: usize, shot: usize, query: usize) -> EpisodeSpec {
        EpisodeSpec {
            way_min: way,
            way_max: way,
            shot,
            query,
        }
    }

    pub fn is_heterogeneous(&self) -> bool {
        self.way_min != self.way_max
    }

    fn sample<E: Scalar>(&self, ds: &LabeledDataset<E>, seed: u64) -> Result<Episode<E>> {
        if self.is_heterogeneous() {
            sample_heterogeneous_episode(ds, self.way_min, self.way_max, self.shot, self.query, seed)
        } else {
            sample_episode(ds, self.way_min, self.shot, self.query, seed)
        }
    }
}

/// Static (persistent, meta-updated) vs dynamic (fresh per task) heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadMode {
    Static,
    Dynamic,
}

/// Supervised bi-level training on labeled episodes: inner adaptation on the
/// support set, outer loss on the query set. Static mode keeps one
/// persistent head meta-updated alongside the body; dynamic mode
/// re-initializes a head of the episode's width per task and meta-updates
/// the body only.
pub fn train_supervised_meta<E: Scalar>(
    arch: Architecture,
    train: &LabeledDataset<E>,
    hyper: &HyperConfig,
    spec: EpisodeSpec,
    head_mode: HeadMode,
    seed: u64,
    provenance: Provenance,
    hook: &mut dyn FnMut(&EpochEvent<E>),
) -> Result<TrainReport<E>> {
    hyper.validate()?;
    if head_mode == HeadMode::Static && spec.is_heterogeneous() {
        return Err(Error::Argument(
            "a static head cannot serve a heterogeneous way range".into(),
        ));
    }
    let mut backbone: Backbone<E> = Backbone::init(arch, seed)?;
    let mut static_head: Option<ParamGroup<E>> = match head_mode {
        HeadMode::Static => Some(
            init_dynamic_head::<E>(backbone.embed_dim(), spec.way_min, seed, u64::MAX)?.params,
        ),
        HeadMode::Dynamic => None,
    };
    let mut epochs = Vec::with_capacity(hyper.epochs);

    for epoch in 0..hyper.epochs {
        let started = Instant::now();
        let episodes: Vec<(u64, Episode<E>)> = (0..hyper.meta_batch)
            .map(|t| {
                let task_id = (epoch * hyper.meta_batch + t) as u64;
                let ep_seed = subseed(seed, &[0xe6a0, epoch as u64, t as u64]);
                spec.sample(train, ep_seed).map(|e| (task_id, e))
            })
            .collect::<Result<_>>()?;

        let outcomes: Vec<TaskOutcome<E>> = episodes
            .par_iter()
            .map(|(task_id, ep)| -> Result<TaskOutcome<E>> {
                let head = match &static_head {
                    Some(h) => h.clone(),
                    None => {
                        init_dynamic_head::<E>(backbone.embed_dim(), ep.way, seed, *task_id)?.params
                    }
                };
                let sup_x = backbone.prep_inputs(&ep.support_inputs)?;
                let qry_x = backbone.prep_inputs(&ep.query_inputs)?;
                let wrt = match head_mode {
                    HeadMode::Static => OuterWrt::BodyAndHead,
                    HeadMode::Dynamic => OuterWrt::BodyOnly,
                };
                let out = adapt_and_outer_grad(
                    backbone.body(),
                    &head,
                    hyper.inner_steps,
                    E::from_f64(hyper.alpha),
                    hyper.scope,
                    hyper.order,
                    wrt,
                    |tape, b, h| task_loss(&backbone, tape, b, h, &sup_x, &ep.support_labels),
                    |tape, b, h| task_loss(&backbone, tape, b, h, &qry_x, &ep.query_labels),
                )?;
                Ok(TaskOutcome {
                    outer_loss: out.outer_loss.to_f64(),
                    outer_grad: Some(out.outer_grad),
                    diagnostics: TaskDiagnostics {
                        kept: ep.support_indices.len() + ep.query_indices.len(),
                        ..TaskDiagnostics::default()
                    },
                })
            })
            .collect::<Result<_>>()?;

        let grads: Vec<GradMap<E>> = outcomes
            .iter()
            .filter_map(|o| o.outer_grad.clone())
            .collect();
        if !grads.is_empty() {
            let mean = GradMap::mean(&grads)?;
            let body = sgd_update(backbone.body(), &mean, E::from_f64(hyper.eta))?;
            backbone = backbone.with_body(body);
            if let Some(h) = static_head.take() {
                static_head = Some(sgd_update(&h, &mean, E::from_f64(hyper.eta))?);
            }
        }
        let stats = epoch_stats(epoch, &outcomes, started);
        hook(&EpochEvent {
            epoch,
            backbone: &backbone,
            static_head: static_head.as_ref(),
            stats: &stats,
        });
        epochs.push(stats);
    }

    Ok(TrainReport {
        model: TrainedModel {
            backbone,
            static_head,
            provenance,
        },
        epochs,
    })
}

/// Whole-class training: single-level minibatch cross-entropy over all
/// classes with a persistent head. Performs epochs × meta_batch gradient
/// steps so the step budget matches the meta modes at identical config.
pub fn train_wct<E: Scalar>(
    arch: Architecture,
    train: &LabeledDataset<E>,
    hyper: &HyperConfig,
    seed: u64,
    provenance: Provenance,
    hook: &mut dyn FnMut(&EpochEvent<E>),
) -> Result<TrainReport<E>> {
    hyper.validate()?;
    if train.class_count() < 2 {
        return Err(Error::Argument(
            "whole-class training needs at least two classes".into(),
        ));
    }
    let mut backbone: Backbone<E> = Backbone::init(arch, seed)?;
    let mut head =
        init_dynamic_head::<E>(backbone.embed_dim(), train.class_count(), seed, u64::MAX)?.params;
    let batch_size = hyper.sub_sample.min(train.len());
    let eta = E::from_f64(hyper.eta);
    let mut epochs = Vec::with_capacity(hyper.epochs);

    for epoch in 0..hyper.epochs {
        let started = Instant::now();
        let mut losses = Vec::with_capacity(hyper.meta_batch);
        for step in 0..hyper.meta_batch {
            let batch_seed = subseed(seed, &[0x6c7, epoch as u64, step as u64]);
            let batch = sample_unlabeled_batch(train, batch_size, batch_seed)?;
            let labels: Vec<usize> = batch
                .source_indices
                .iter()
                .map(|&i| train.labels()[i])
                .collect();
            let inputs = backbone.prep_inputs(&batch.inputs)?;

            let mut tape = Tape::new();
            let b = tape.param_group(backbone.body());
            let h = tape.param_group(&head);
            let loss = task_loss(&backbone, &mut tape, &b, &h, &inputs, &labels)?;
            losses.push(tape.value(loss).item()?.to_f64());
            let grads = tape.grad_map(loss, &[&b, &h])?;
            backbone = backbone.with_body(sgd_update(backbone.body(), &grads, eta)?);
            head = sgd_update(&head, &grads, eta)?;
        }
        let stats = EpochStats {
            epoch,
            mean_loss: losses.iter().sum::<f64>() / losses.len().max(1) as f64,
            skipped: 0,
            tasks: hyper.meta_batch,
            wall_secs: started.elapsed().as_secs_f64(),
        };
        hook(&EpochEvent {
            epoch,
            backbone: &backbone,
            static_head: Some(&head),
            stats: &stats,
        });
        epochs.push(stats);
    }

    Ok(TrainReport {
        model: TrainedModel {
            backbone,
            static_head: Some(head),
            provenance,
        },
        epochs,
    })
}

/// Multi-task learning: the same episodes as the meta modes, but each
/// episode takes one direct gradient step on the body and a persistent head
/// keyed by the episode's way (no inner/outer split).
pub fn train_mtl<E: Scalar>(
    arch: Architecture,
    train: &LabeledDataset<E>,
    hyper: &HyperConfig,
    spec: EpisodeSpec,
    seed: u64,
    provenance: Provenance,
    hook: &mut dyn FnMut(&EpochEvent<E>),
) -> Result<TrainReport<E>> {
    hyper.validate()?;
    let mut backbone: Backbone<E> = Backbone::init(arch, seed)?;
    let mut heads: BTreeMap<usize, ParamGroup<E>> = BTreeMap::new();
    let eta = E::from_f64(hyper.eta);
    let mut epochs = Vec::with_capacity(hyper.epochs);

    for epoch in 0..hyper.epochs {
        let started = Instant::now();
        let mut losses = Vec::with_capacity(hyper.meta_batch);
        for t in 0..hyper.meta_batch {
            let ep_seed = subseed(seed, &[0xe6a0, epoch as u64, t as u64]);
            let ep = spec.sample(train, ep_seed)?;
            let embed_dim = backbone.embed_dim();
            if !heads.contains_key(&ep.way) {
                let fresh = init_dynamic_head::<E>(embed_dim, ep.way, seed, ep.way as u64)?.params;
                heads.insert(ep.way, fresh);
            }
            let head = heads.get(&ep.way).unwrap().clone();

            // the episode's full sample set is the minibatch
            let mut inputs = Vec::new();
            let mut labels = Vec::new();
            inputs.extend_from_slice(ep.support_inputs.data());
            labels.extend_from_slice(&ep.support_labels);
            inputs.extend_from_slice(ep.query_inputs.data());
            labels.extend_from_slice(&ep.query_labels);
            let mut dims = vec![labels.len()];
            dims.extend_from_slice(&ep.support_inputs.dims()[1..]);
            let x = backbone.prep_inputs(&Tensor::from_vec(&dims, inputs)?)?;

            let mut tape = Tape::new();
            let b = tape.param_group(backbone.body());
            let h = tape.param_group(&head);
            let loss = task_loss(&backbone, &mut tape, &b, &h, &x, &labels)?;
            losses.push(tape.value(loss).item()?.to_f64());
            let grads = tape.grad_map(loss, &[&b, &h])?;
            backbone = backbone.with_body(sgd_update(backbone.body(), &grads, eta)?);
            heads.insert(ep.way, sgd_update(&head, &grads, eta)?);
        }
        let stats = EpochStats {
            epoch,
            mean_loss: losses.iter().sum::<f64>() / losses.len().max(1) as f64,
            skipped: 0,
            tasks: hyper.meta_batch,
            wall_secs: started.elapsed().as_secs_f64(),
        };
        hook(&EpochEvent {
            epoch,
            backbone: &backbone,
            static_head: None,
            stats: &stats,
        });
        epochs.push(stats);
    }

    Ok(TrainReport {
        model: TrainedModel {
            backbone,
            // report the 5-way head if one exists, else none
            static_head: heads.into_iter().next().map(|(_, h)| h),
            provenance,
        },
        epochs,
    })
}
