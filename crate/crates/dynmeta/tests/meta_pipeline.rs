//! Integration checks of the unsupervised task pipeline: the outer gradient
//! with frozen pseudo-labels matches finite differences, skipped tasks
//! contribute nothing, and k-means survives degenerate inputs.

use dynmeta::clustering::{dbscan, kmeans, make_pseudo_labels, DbscanParams, PointSet};
use dynmeta::data::{gen_blobs, sample_unlabeled_batch};
use dynmeta::meta::{
    head_logits, init_dynamic_head, outer_step, uht_task_outer_loss, Architecture, Backbone,
    HyperConfig,
};
use dynmeta::rng::stream;
use dynmeta::tensor::adapt::{adapt_and_outer_grad, GradOrder, OuterWrt, Scope};
use dynmeta::tensor::tape::Tape;
use dynmeta::tensor::{GradMap, ParamGroup, Tensor};

/// Exact outer gradient of the cluster-task pipeline vs central finite
/// differences, with the pseudo-labels frozen to the unperturbed clustering
/// (clustering is non-differentiable by design; gradients flow through the
/// network parameters only).
#[test]
fn uht_outer_grad_matches_finite_differences_with_frozen_labels() {
    let ds = gen_blobs::<f64>(3, 6, 40, 0.3, 50.0, 5).unwrap();
    let backbone: Backbone<f64> = Backbone::init(Architecture::mlp(vec![6, 8, 5]), 2).unwrap();
    let hyper = HyperConfig {
        alpha: 0.05,
        inner_steps: 1,
        dbscan: DbscanParams {
            eps: 0.25,
            min_samples: 3,
        },
        normalize_embeddings: true,
        ..HyperConfig::default()
    };
    let batch = sample_unlabeled_batch(&ds, 45, 9).unwrap();

    // the engine's gradient through the real pipeline
    let out = uht_task_outer_loss(&backbone, &batch, &hyper, 1, 0, 0).unwrap();
    assert!(!out.diagnostics.skipped);
    let engine_grad = out.outer_grad.unwrap();

    // freeze the labels the pipeline derived, then FD the same loss
    let emb = backbone.embed(&batch.inputs).unwrap();
    let (n, d) = emb.as_matrix_dims().unwrap();
    let points =
        PointSet::new(n, d, emb.data().to_vec()).unwrap().unit_normalized();
    let assignment = dbscan(&points, &hyper.dbscan);
    let pseudo = make_pseudo_labels(&assignment, false, hyper.dbscan.min_samples);
    assert!(pseudo.num_classes >= 2);
    let kept_rows: Vec<Vec<f64>> = pseudo
        .kept
        .iter()
        .map(|&i| batch.inputs.data()[i * 6..(i + 1) * 6].to_vec())
        .collect();
    let inputs = Tensor::from_vec(
        &[kept_rows.len(), 6],
        kept_rows.into_iter().flatten().collect(),
    )
    .unwrap();
    let head = init_dynamic_head::<f64>(5, pseudo.num_classes, 1, 0).unwrap();

    let pipeline_value = |body: &ParamGroup<f64>| -> f64 {
        let shell = backbone.with_body(body.clone());
        let loss_fn = |tape: &mut Tape<f64>,
                       b: &dynmeta::tensor::tape::TapedParams,
                       h: &dynmeta::tensor::tape::TapedParams| {
            let x = tape.leaf(inputs.clone());
            let e = shell.forward(tape, b, x)?;
            let logits = head_logits(tape, h, e)?;
            tape.softmax_cross_entropy(logits, &pseudo.labels)
        };
        adapt_and_outer_grad(
            body,
            &head.params,
            1,
            0.05,
            Scope::BodyAndHead,
            GradOrder::FirstOrder,
            OuterWrt::BodyOnly,
            loss_fn,
            loss_fn,
        )
        .unwrap()
        .outer_loss
    };

    let step = 1e-5;
    for name in backbone.body().names().map(String::from).collect::<Vec<_>>() {
        let tensor = backbone.body().get(&name).unwrap();
        for i in (0..tensor.numel()).step_by(7) {
            let tweak = |delta: f64| {
                let tensors = backbone
                    .body()
                    .iter()
                    .map(|(nm, t)| {
                        if nm == name {
                            let mut data = t.data().to_vec();
                            data[i] += delta;
                            Tensor::from_vec(t.dims(), data).unwrap()
                        } else {
                            t.clone()
                        }
                    })
                    .collect();
                backbone.body().with_tensors(tensors).unwrap()
            };
            let fd = (pipeline_value(&tweak(step)) - pipeline_value(&tweak(-step))) / (2.0 * step);
            let analytic = engine_grad.get(&name).unwrap().data()[i];
            let err = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6);
            assert!(
                err <= 1e-3,
                "{name}[{i}]: engine {analytic} vs FD {fd} (rel {err:.2e})"
            );
        }
    }
}

#[test]
fn skipped_tasks_contribute_nothing_to_the_outer_step() {
    let backbone: Backbone<f64> = Backbone::init(Architecture::mlp(vec![4, 6]), 3).unwrap();
    let names: Vec<String> = backbone.body().names().map(String::from).collect();
    let grad = GradMap::from_entries(
        names
            .iter()
            .map(|n| {
                let dims = backbone.body().get(n).unwrap().dims().to_vec();
                (n.clone(), Tensor::new(&dims, 1.0).unwrap())
            })
            .collect(),
    );
    // a skipped task yields no gradient entry at all; the outer step over
    // the remaining gradient equals the single-task update
    let with_skip = outer_step(&backbone, &[grad.clone()], 0.1).unwrap();
    let direct = outer_step(&backbone, &[grad], 0.1).unwrap();
    assert_eq!(with_skip.body(), direct.body());
}

#[test]
fn kmeans_duplicate_points_trigger_reseed_without_empty_clusters() {
    // all points identical: the second centroid starts empty every round
    let points = PointSet::new(6, 2, vec![1.0; 12]).unwrap();
    let mut rng = stream(4, &[0]);
    let (assignment, centroids) = kmeans(&points, 2, 25, &mut rng).unwrap();
    let sizes = assignment.cluster_sizes();
    assert_eq!(sizes.len(), 2);
    assert!(sizes.iter().all(|&s| s > 0), "empty cluster: {sizes:?}");
    assert_eq!(centroids.len(), 2);
}

#[test]
fn alpha_zero_outer_loss_is_fresh_head_loss() {
    // with α = 0 the inner loop is the identity, so the outer loss equals
    // the cross-entropy at the freshly initialized head
    let ds = gen_blobs::<f64>(3, 6, 40, 0.3, 50.0, 5).unwrap();
    let backbone: Backbone<f64> = Backbone::init(Architecture::mlp(vec![6, 8, 5]), 2).unwrap();
    let hyper = HyperConfig {
        alpha: 1e-300, // alpha must be > 0; this is numerically the identity
        inner_steps: 1,
        dbscan: DbscanParams {
            eps: 0.25,
            min_samples: 3,
        },
        normalize_embeddings: true,
        ..HyperConfig::default()
    };
    let batch = sample_unlabeled_batch(&ds, 45, 9).unwrap();
    let out = uht_task_outer_loss(&backbone, &batch, &hyper, 1, 0, 0).unwrap();
    assert!(!out.diagnostics.skipped);

    // rebuild the fresh-head loss directly
    let emb = backbone.embed(&batch.inputs).unwrap();
    let (n, d) = emb.as_matrix_dims().unwrap();
    let points = PointSet::new(n, d, emb.data().to_vec()).unwrap().unit_normalized();
    let assignment = dbscan(&points, &hyper.dbscan);
    let pseudo = make_pseudo_labels(&assignment, false, hyper.dbscan.min_samples);
    let head = init_dynamic_head::<f64>(5, pseudo.num_classes, 1, 0).unwrap();
    let kept: Vec<f64> = pseudo
        .kept
        .iter()
        .flat_map(|&i| batch.inputs.data()[i * 6..(i + 1) * 6].to_vec())
        .collect();
    let inputs = Tensor::from_vec(&[pseudo.kept.len(), 6], kept).unwrap();
    let mut tape = Tape::new();
    let b = tape.param_group(backbone.body());
    let h = tape.param_group(&head.params);
    let x = tape.leaf(inputs);
    let e = backbone.forward(&mut tape, &b, x).unwrap();
    let logits = head_logits(&mut tape, &h, e).unwrap();
    let loss = tape.softmax_cross_entropy(logits, &pseudo.labels).unwrap();
    let fresh = tape.value(loss).item().unwrap();
    assert!(
        (out.outer_loss - fresh).abs() < 1e-9,
        "outer {} vs fresh-head {}",
        out.outer_loss,
        fresh
    );
}
