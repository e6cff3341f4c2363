//! Few-shot episodic evaluation, clustering-based zero-shot evaluation with
//! optimal label matching, and stability-curve assembly.

use crate::clustering::{kmeans, PointSet};
use crate::data::{sample_episode, Episode, LabeledDataset};
use crate::error::{Error, Result};
use crate::meta::{head_logits, init_dynamic_head, inner_adapt, TrainedModel};
use crate::repstab::{representation_stability, ActivationSnapshot, StabilityRecord};
use crate::rng::{stream, subseed};
use crate::scalar::Scalar;
use crate::tensor::adapt::Scope;
use crate::tensor::tape::Tape;
use rayon::prelude::*;

/// Mean metric over episodes/seeds with a normal-approximation interval.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub metric_name: String,
    pub mean: f64,
    pub ci95: f64,
    pub n_episodes: usize,
    pub per_episode: Vec<f64>,
}

impl EvalReport {
    pub fn from_values(metric_name: impl Into<String>, values: Vec<f64>) -> EvalReport {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n.max(1) as f64;
        let ci95 = if n > 1 {
            let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
            1.96 * var.sqrt() / (n as f64).sqrt()
        } else {
            0.0
        };
        EvalReport {
            metric_name: metric_name.into(),
            mean,
            ci95,
            n_episodes: n,
            per_episode: values,
        }
    }
}

/// Fit a fresh dynamic head on the support set (`adapt_steps` inner updates
/// at rate `alpha`, scope as given) and return query accuracy. With
/// `adapt_steps = 0` the fresh head is scored directly (chance level).
pub fn adapt_and_score_episode<E: Scalar>(
    model: &TrainedModel<E>,
    episode: &Episode<E>,
    adapt_steps: usize,
    alpha: f64,
    scope: Scope,
    head_seed: u64,
) -> Result<f64> {
    if episode.way < 2 {
        return Err(Error::Argument("an episode needs at least 2 ways".into()));
    }
    let backbone = &model.backbone;
    let head = init_dynamic_head::<E>(backbone.embed_dim(), episode.way, head_seed, 0)?;
    let (body, head_params) = if adapt_steps == 0 {
        (backbone.body().clone(), head.params.clone())
    } else {
        inner_adapt(
            backbone,
            &head,
            &episode.support_inputs,
            &episode.support_labels,
            adapt_steps,
            alpha,
            scope,
        )?
    };
    let adapted = backbone.with_body(body);
    let emb = adapted.embed(&episode.query_inputs)?;
    let mut tape: Tape<E> = Tape::new();
    let h = tape.param_group(&head_params);
    let e = tape.leaf(emb);
    let logits = head_logits(&mut tape, &h, e)?;
    let preds = tape.value(logits).argmax_rows()?;
    let correct = preds
        .iter()
        .zip(&episode.query_labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(correct as f64 / episode.query_labels.len() as f64)
}

/// Average episode accuracy over `n_episodes` seeded episodes.
#[allow(clippy::too_many_arguments)]
pub fn eval_fewshot<E: Scalar>(
    model: &TrainedModel<E>,
    split: &LabeledDataset<E>,
    way: usize,
    shot: usize,
    query: usize,
    n_episodes: usize,
    adapt_steps: usize,
    alpha: f64,
    scope: Scope,
    seed: u64,
) -> Result<EvalReport> {
    if n_episodes == 0 {
        return Err(Error::Argument("n_episodes must be >= 1".into()));
    }
    let values: Vec<f64> = (0..n_episodes)
        .into_par_iter()
        .map(|i| -> Result<f64> {
            let ep_seed = subseed(seed, &[0xe7a1, i as u64]);
            let episode = sample_episode(split, way, shot, query, ep_seed)?;
            adapt_and_score_episode(model, &episode, adapt_steps, alpha, scope, ep_seed)
        })
        .collect::<Result<_>>()?;
    Ok(EvalReport::from_values(
        format!("fewshot_{way}w{shot}s"),
        values,
    ))
}

/// Optimal cluster-to-class assignment by the Hungarian algorithm
/// (potential-based O(k^3) min-cost matching on the negated counts).
/// Returns the permutation (cluster -> class) and the matched accuracy.
pub fn hungarian_match(confusion: &[Vec<u64>]) -> Result<(Vec<usize>, f64)> {
    let k = confusion.len();
    if k == 0 || confusion.iter().any(|row| row.len() != k) {
        return Err(Error::Argument("confusion matrix must be square".into()));
    }
    let total: u64 = confusion.iter().flatten().sum();

    // Minimize cost = max_entry - count via the standard potentials method.
    let max_entry = *confusion.iter().flatten().max().unwrap();
    let cost = |i: usize, j: usize| (max_entry - confusion[i][j]) as f64;

    // 1-based arrays per the classic formulation.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; k + 1];
    let mut v = vec![0.0; k + 1];
    let mut p = vec![0usize; k + 1]; // p[j]: row matched to column j
    let mut way = vec![0usize; k + 1];
    for i in 1..=k {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; k + 1];
        let mut used = vec![false; k + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=k {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=k {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut assignment = vec![0usize; k];
    for j in 1..=k {
        assignment[p[j] - 1] = j - 1;
    }
    let matched: u64 = (0..k).map(|i| confusion[i][assignment[i]]).sum();
    let accuracy = if total == 0 {
        0.0
    } else {
        matched as f64 / total as f64
    };
    Ok((assignment, accuracy))
}

/// Embed the split with the body (no adaptation), K-means it with k clusters
/// once per seed, and report the Hungarian-matched accuracy across seeds.
pub fn eval_zeroshot<E: Scalar>(
    model: &TrainedModel<E>,
    split: &LabeledDataset<E>,
    k: usize,
    kmeans_seeds: usize,
    kmeans_iters: usize,
    seed: u64,
) -> Result<EvalReport> {
    if k != split.class_count() {
        return Err(Error::Argument(format!(
            "k={k} does not match the split's {} classes",
            split.class_count()
        )));
    }
    if kmeans_seeds == 0 {
        return Err(Error::Argument("need at least one kmeans seed".into()));
    }
    let emb = model.backbone.embed(split.samples())?;
    let (n, d) = emb.as_matrix_dims()?;
    let points = PointSet::new(n, d, emb.data().iter().map(|v| v.to_f64()).collect())?;

    let mut values = Vec::with_capacity(kmeans_seeds);
    for s in 0..kmeans_seeds {
        let mut rng = stream(seed, &[0x2e05, s as u64]);
        let (assign, _) = kmeans(&points, k, kmeans_iters, &mut rng)?;
        let mut confusion = vec![vec![0u64; k]; k];
        for (i, &cluster) in assign.labels.iter().enumerate() {
            confusion[cluster as usize][split.labels()[i]] += 1;
        }
        let (_, acc) = hungarian_match(&confusion)?;
        values.push(acc);
    }
    Ok(EvalReport::from_values("zeroshot_kmeans", values))
}

/// Apply [`representation_stability`] to each consecutive snapshot pair.
pub fn stability_curve(
    snapshots: &[ActivationSnapshot],
    var_frac: f64,
) -> Result<Vec<StabilityRecord>> {
    if snapshots.len() < 2 {
        return Err(Error::Argument(
            "stability needs at least two snapshots".into(),
        ));
    }
    let mut out = Vec::new();
    for pair in snapshots.windows(2) {
        out.extend(representation_stability(&pair[0], &pair[1], var_frac)?);
    }
    Ok(out)
}
