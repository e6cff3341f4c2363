//! Acceptance suite: one test per criterion, each printing a pass line with
//! its measured values. Trend criteria (5-10) pin exact configs and seeds;
//! training is bit-reproducible, so their outcomes are deterministic.

use dynmeta::clustering::{dbscan, DbscanParams, PointSet, NOISE};
use dynmeta::config::parse_config_text;
use dynmeta::error::Result;
use dynmeta::harness::{self, run_ablate, run_stability, run_sweep, run_train};
use dynmeta::linalg::Mat;
use dynmeta::meta::{head_logits, init_dynamic_head, Architecture, Backbone};
use dynmeta::repstab::svcca_similarity;
use dynmeta::rng::stream;
use dynmeta::tensor::adapt::{adapt_and_outer_grad, GradOrder, OuterWrt, Scope};
use dynmeta::tensor::tape::{Tape, TapedParams, Var};
use dynmeta::tensor::{ParamGroup, ParamRole, Tensor};
use rand::Rng;
use std::fs;
use std::path::PathBuf;
use std::sync::Mutex;
use std::time::Instant;

/// Training-heavy criteria run one at a time so criterion 9's wall-clock
/// comparison is not polluted by concurrent tests.
static GATE: Mutex<()> = Mutex::new(());

fn temp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("dynmeta_accept_{tag}_{}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

// ── criterion 1: gradient fidelity ───────────────────────────────────────

/// 2-layer MLP 4→8→3 as (body 4→8, head 8→3) parameter groups.
fn tiny_mlp(seed: u64) -> (Backbone<f64>, ParamGroup<f64>) {
    let backbone = Backbone::init(Architecture::mlp(vec![4, 8]), seed).unwrap();
    let head = init_dynamic_head::<f64>(8, 3, seed, 0).unwrap().params;
    (backbone, head)
}

fn mlp_ce_loss(
    backbone: &Backbone<f64>,
    tape: &mut Tape<f64>,
    body: &TapedParams,
    head: &TapedParams,
    x: &Tensor<f64>,
    targets: &[usize],
) -> Result<Var> {
    let xv = tape.leaf(x.clone());
    let emb = backbone.forward(tape, body, xv)?;
    let logits = head_logits(tape, head, emb)?;
    tape.softmax_cross_entropy(logits, targets)
}

/// Plain loss value at the given parameter values.
fn ce_value(
    backbone: &Backbone<f64>,
    body: &ParamGroup<f64>,
    head: &ParamGroup<f64>,
    x: &Tensor<f64>,
    targets: &[usize],
) -> f64 {
    let shell = backbone.with_body(body.clone());
    let mut tape = Tape::new();
    let b = tape.param_group(body);
    let h = tape.param_group(head);
    let loss = mlp_ce_loss(&shell, &mut tape, &b, &h, x, targets).unwrap();
    tape.value(loss).item().unwrap()
}

fn perturbed(group: &ParamGroup<f64>, name: &str, index: usize, delta: f64) -> ParamGroup<f64> {
    let tensors = group
        .iter()
        .map(|(n, t)| {
            if n == name {
                let mut data = t.data().to_vec();
                data[index] += delta;
                Tensor::from_vec(t.dims(), data).unwrap()
            } else {
                t.clone()
            }
        })
        .collect();
    group.with_tensors(tensors).unwrap()
}

#[test]
fn criterion_01_gradient_fidelity() {
    let started = Instant::now();
    let (backbone, head) = tiny_mlp(41);
    let mut rng = stream(42, &[1]);
    let x = Tensor::from_vec(&[6, 4], (0..24).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect())
        .unwrap();
    let targets = vec![0, 1, 2, 0, 1, 2];

    // analytic gradients for every parameter of both layers
    let mut tape = Tape::new();
    let b = tape.param_group(backbone.body());
    let h = tape.param_group(&head);
    let loss = mlp_ce_loss(&backbone, &mut tape, &b, &h, &x, &targets).unwrap();
    let grads = tape.grad_map(loss, &[&b, &h]).unwrap();

    let step = 1e-5;
    let mut checked = 0usize;
    let mut worst: f64 = 0.0;
    let body_names: Vec<String> = backbone.body().names().map(String::from).collect();
    let head_names: Vec<String> = head.names().map(String::from).collect();
    for name in body_names.iter().chain(&head_names) {
        let in_body = backbone.body().get(name).is_some();
        let group = if in_body { backbone.body() } else { &head };
        let numel = group.get(name).unwrap().numel();
        for i in 0..numel {
            let tweak = |delta: f64| -> (ParamGroup<f64>, ParamGroup<f64>) {
                if in_body {
                    (perturbed(group, name, i, delta), head.clone())
                } else {
                    (backbone.body().clone(), perturbed(group, name, i, delta))
                }
            };
            let (bp, hp) = tweak(step);
            let (bm, hm) = tweak(-step);
            let fd = (ce_value(&backbone, &bp, &hp, &x, &targets)
                - ce_value(&backbone, &bm, &hm, &x, &targets))
                / (2.0 * step);
            let analytic = grads.get(name).unwrap().data()[i];
            let err = rel_err(analytic, fd);
            worst = worst.max(err);
            assert!(
                err <= 1e-4,
                "param {name}[{i}]: analytic {analytic} vs FD {fd} (rel {err:.2e})"
            );
            checked += 1;
        }
    }
    let secs = started.elapsed().as_secs_f64();
    assert!(checked >= 60, "checked only {checked} parameters");
    assert!(secs < 1.0, "took {secs:.2}s, budget 1s");
    println!(
        "criterion 1 PASS: {checked} parameter gradients match central finite differences \
         (worst rel err {worst:.2e}, {secs:.2}s)"
    );
}

// ── criterion 2: second-order fidelity ───────────────────────────────────

#[test]
fn criterion_02_second_order_fidelity() {
    let started = Instant::now();

    // closed-form quadratic: θ=1, α=0.1, one step
    let mut body = ParamGroup::new(ParamRole::Body);
    body.push("theta", Tensor::scalar(1.0)).unwrap();
    let empty = ParamGroup::new(ParamRole::Head);
    let quad = |tape: &mut Tape<f64>, b: &TapedParams, _h: &TapedParams| {
        let th = b.vars()[0];
        let sq = tape.mul(th, th)?;
        tape.sum_all(sq)
    };
    let exact = adapt_and_outer_grad(
        &body, &empty, 1, 0.1, Scope::BodyAndHead, GradOrder::Exact, OuterWrt::BodyOnly, quad, quad,
    )
    .unwrap();
    let first = adapt_and_outer_grad(
        &body, &empty, 1, 0.1, Scope::BodyAndHead, GradOrder::FirstOrder, OuterWrt::BodyOnly, quad,
        quad,
    )
    .unwrap();
    let ge = exact.outer_grad.get("theta").unwrap().item().unwrap();
    let gf = first.outer_grad.get("theta").unwrap().item().unwrap();
    assert!((ge - 1.28).abs() < 1e-12, "exact quadratic grad {ge}");
    assert!((gf - 1.6).abs() < 1e-12, "first-order quadratic grad {gf}");

    // tiny MLP, 1 inner step, α=0.05: exact outer grad vs finite differences
    // of the composed adapt-then-loss pipeline
    let (backbone, head) = tiny_mlp(17);
    let mut rng = stream(18, &[2]);
    let x = Tensor::from_vec(&[9, 4], (0..36).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect())
        .unwrap();
    let targets = vec![0, 1, 2, 0, 1, 2, 0, 1, 2];
    let loss_fn = |tape: &mut Tape<f64>, b: &TapedParams, h: &TapedParams| {
        mlp_ce_loss(&backbone, tape, b, h, &x, &targets)
    };
    let out = adapt_and_outer_grad(
        backbone.body(),
        &head,
        1,
        0.05,
        Scope::BodyAndHead,
        GradOrder::Exact,
        OuterWrt::BodyOnly,
        loss_fn,
        loss_fn,
    )
    .unwrap();

    // pipeline value at arbitrary body values (adapted values are identical
    // in both orders, so the cheap first-order path supplies the values)
    let pipeline = |body_vals: &ParamGroup<f64>| -> f64 {
        adapt_and_outer_grad(
            body_vals,
            &head,
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
    let mut worst: f64 = 0.0;
    for name in backbone.body().names().map(String::from).collect::<Vec<_>>() {
        let tensor = backbone.body().get(&name).unwrap();
        for i in 0..tensor.numel() {
            let plus = pipeline(&perturbed(backbone.body(), &name, i, step));
            let minus = pipeline(&perturbed(backbone.body(), &name, i, -step));
            let fd = (plus - minus) / (2.0 * step);
            let analytic = out.outer_grad.get(&name).unwrap().data()[i];
            let err = rel_err(analytic, fd);
            worst = worst.max(err);
            assert!(
                err <= 1e-3,
                "second-order {name}[{i}]: analytic {analytic} vs FD {fd} (rel {err:.2e})"
            );
        }
    }
    let secs = started.elapsed().as_secs_f64();
    assert!(secs < 5.0, "took {secs:.2}s, budget 5s");
    println!(
        "criterion 2 PASS: quadratic closed form exact to 1e-12; unrolled second-order \
         gradients match pipeline finite differences (worst rel err {worst:.2e}, {secs:.2}s)"
    );
}

// ── criterion 3: DBSCAN oracle equivalence ───────────────────────────────

/// Independent oracle: core points by closed-ball counting, clusters as the
/// transitive closure of core-to-core eps-reachability (boolean Floyd-
/// Warshall), borders to their lowest-index core neighbor, canonical ids by
/// ascending minimum member index.
fn dbscan_closure_oracle(points: &PointSet, eps: f64, min_samples: usize) -> (Vec<bool>, Vec<i64>) {
    let n = points.len();
    let eps2 = eps * eps;
    let within = |i: usize, j: usize| points.squared_dist(i, j) <= eps2;
    let core: Vec<bool> = (0..n)
        .map(|i| (0..n).filter(|&j| within(i, j)).count() >= min_samples)
        .collect();
    let mut reach = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            if core[i] && core[j] && within(i, j) {
                reach[i * n + j] = true;
            }
        }
    }
    for k in 0..n {
        for i in 0..n {
            if reach[i * n + k] {
                for j in 0..n {
                    if reach[k * n + j] {
                        reach[i * n + j] = true;
                    }
                }
            }
        }
    }
    let mut labels = vec![NOISE; n];
    let mut reps: Vec<usize> = Vec::new();
    for i in 0..n {
        if !core[i] {
            continue;
        }
        let rep = (0..n).find(|&j| core[j] && reach[i * n + j]).unwrap_or(i);
        let id = match reps.iter().position(|&r| r == rep) {
            Some(p) => p,
            None => {
                reps.push(rep);
                reps.len() - 1
            }
        };
        labels[i] = id as i64;
    }
    for i in 0..n {
        if !core[i] {
            if let Some(c) = (0..n).find(|&j| core[j] && within(i, j)) {
                labels[i] = labels[c];
            }
        }
    }
    let num = reps.len();
    let mut min_member = vec![usize::MAX; num];
    for (i, &l) in labels.iter().enumerate() {
        if l >= 0 && i < min_member[l as usize] {
            min_member[l as usize] = i;
        }
    }
    let mut order: Vec<usize> = (0..num).collect();
    order.sort_by_key(|&c| min_member[c]);
    let mut remap = vec![0i64; num];
    for (new, &old) in order.iter().enumerate() {
        remap[old] = new as i64;
    }
    for l in labels.iter_mut() {
        if *l >= 0 {
            *l = remap[*l as usize];
        }
    }
    (core, labels)
}

#[test]
fn criterion_03_dbscan_oracle_equivalence() {
    let started = Instant::now();
    let mut rng = stream(333, &[0]);
    for trial in 0..200 {
        let n = 20 + (rng.random::<u32>() as usize) % 181; // 20..=200
        let d = 1 + (rng.random::<u32>() as usize) % 8; // 1..=8
        let spread = 1.0 + rng.random::<f64>() * 3.0;
        let data: Vec<f64> = (0..n * d).map(|_| rng.random::<f64>() * spread).collect();
        let points = PointSet::new(n, d, data).unwrap();
        let eps = 0.05 + rng.random::<f64>() * 1.0;
        let min_samples = 1 + (rng.random::<u32>() as usize) % 8;
        let params = DbscanParams::new(eps, min_samples).unwrap();

        let got = dbscan(&points, &params);
        let (core, labels) = dbscan_closure_oracle(&points, eps, min_samples);
        assert_eq!(
            got.core_flags.as_ref().unwrap(),
            &core,
            "trial {trial}: core sets differ (n={n}, d={d}, eps={eps:.3}, min={min_samples})"
        );
        assert_eq!(
            got.labels, labels,
            "trial {trial}: partitions differ (n={n}, d={d}, eps={eps:.3}, min={min_samples})"
        );
    }
    let secs = started.elapsed().as_secs_f64();
    assert!(secs < 30.0, "took {secs:.2}s, budget 30s");
    println!(
        "criterion 3 PASS: 200 random instances identical to the density-reachability \
         closure oracle ({secs:.2}s)"
    );
}

// ── criterion 4: SVCCA properties ────────────────────────────────────────

#[test]
fn criterion_04_svcca_properties() {
    let started = Instant::now();
    let random_mat = |n: usize, d: usize, seed: u64| {
        let mut rng = stream(seed, &[4]);
        let mut m = Mat::zeros(n, d);
        for v in m.data.iter_mut() {
            *v = rng.random::<f64>() * 2.0 - 1.0;
        }
        m
    };

    let a = random_mat(500, 10, 1);
    let self_sim = svcca_similarity(&a, &a, 0.99).unwrap();
    assert!((self_sim - 1.0).abs() < 1e-6, "self similarity {self_sim}");

    // orthogonal transform from the eigenvectors of a random symmetric matrix
    let r = random_mat(10, 10, 2);
    let sym = r.transpose().matmul(&r).unwrap();
    let (_, q) = dynmeta::linalg::eigh(&sym).unwrap();
    let aq = a.matmul(&q).unwrap();
    let orth = svcca_similarity(&a, &aq, 0.99).unwrap();
    assert!((orth - 1.0).abs() < 1e-6, "orthogonal invariance {orth}");

    let mut perm_mat = Mat::zeros(500, 10);
    let perm = [7usize, 2, 9, 0, 4, 6, 1, 8, 3, 5];
    for i in 0..500 {
        for (j, &pj) in perm.iter().enumerate() {
            perm_mat.set(i, j, a.at(i, pj));
        }
    }
    let permuted = svcca_similarity(&a, &perm_mat, 0.99).unwrap();
    assert!((permuted - 1.0).abs() < 1e-6, "permutation invariance {permuted}");

    let mut scaled = a.clone();
    for v in scaled.data.iter_mut() {
        *v *= 2.0;
    }
    let scale_sim = svcca_similarity(&a, &scaled, 0.99).unwrap();
    assert!((scale_sim - 1.0).abs() < 1e-6, "scaling invariance {scale_sim}");

    let g1 = random_mat(5000, 10, 5);
    let g2 = random_mat(5000, 10, 6);
    let indep = svcca_similarity(&g1, &g2, 0.99).unwrap();
    assert!(indep < 0.1, "independent gaussians similarity {indep}");

    let secs = started.elapsed().as_secs_f64();
    assert!(secs < 10.0, "took {secs:.2}s, budget 10s");
    println!(
        "criterion 4 PASS: self={self_sim:.8}, orthogonal={orth:.8}, permuted={permuted:.8}, \
         scaled={scale_sim:.8}, independent={indep:.4} ({secs:.2}s)"
    );
}

// ── shared config fragments for the trend criteria ───────────────────────

const NOISE_TREND_BASE: &str = "\
blob_classes = 32
blob_dim = 32
blob_per_class = 40
blob_inter = 8
blob_intra = 2.0
hidden = 32,32
embed_dim = 32
epochs = 400
meta_batch = 4
sub_sample = 100
alpha = 0.05
inner_steps = 3
way = 5
shot = 1
query = 15
head_mode = static
eval_way = 5
eval_shot = 1
eval_query = 15
eval_episodes = 300
eval_adapt_steps = 50
";

const TREND_SEEDS: [u64; 3] = [1, 2, 4];

fn train_and_fewshot(config_text: &str, seed: u64, out: PathBuf) -> f64 {
    let mut config = parse_config_text(config_text).unwrap();
    config.seed = seed;
    config.out_dir = out;
    let arts = run_train(&config).unwrap();
    let data = harness::build_dataset(&config).unwrap();
    let reports = harness::evaluate_model(&arts.model, &data.test, &config).unwrap();
    reports[0].mean
}

// ── criterion 5: label-noise robustness trend ────────────────────────────

#[test]
fn criterion_05_label_noise_trend() {
    let _gate = GATE.lock().unwrap();
    let started = Instant::now();
    let dir = temp_dir("c5");

    let acc = |mode: &str, eta: f64, noise: f64, seed: u64| -> f64 {
        let text = format!("{NOISE_TREND_BASE}mode = {mode}\neta = {eta}\nnoise_ratio = {noise}\n");
        train_and_fewshot(&text, seed, dir.join(format!("{mode}_{noise}_{seed}")))
    };

    let mut maml_drop = 0.0;
    let mut wct_drop = 0.0;
    let mut maml_at30 = 0.0;
    let mut wct_at30 = 0.0;
    for &seed in &TREND_SEEDS {
        let m0 = acc("maml", 0.01, 0.0, seed);
        let m3 = acc("maml", 0.01, 0.3, seed);
        let w0 = acc("wct", 0.05, 0.0, seed);
        let w3 = acc("wct", 0.05, 0.3, seed);
        println!(
            "  seed {seed}: maml {m0:.4}->{m3:.4} (drop {:+.4}), wct {w0:.4}->{w3:.4} (drop {:+.4})",
            m0 - m3,
            w0 - w3
        );
        maml_drop += (m0 - m3) / 3.0;
        wct_drop += (w0 - w3) / 3.0;
        maml_at30 += m3 / 3.0;
        wct_at30 += w3 / 3.0;
    }
    let secs = started.elapsed().as_secs_f64();
    assert!(
        maml_drop < wct_drop,
        "mean accuracy drop: maml {maml_drop:+.4} must be below wct {wct_drop:+.4}"
    );
    assert!(
        maml_at30 > wct_at30,
        "accuracy at 30% noise: maml {maml_at30:.4} must exceed wct {wct_at30:.4}"
    );
    assert!(secs < 600.0, "took {secs:.1}s, budget 600s");
    let _ = fs::remove_dir_all(&dir);
    println!(
        "criterion 5 PASS: mean drop maml {maml_drop:+.4} < wct {wct_drop:+.4}; \
         at 30% noise maml {maml_at30:.4} > wct {wct_at30:.4} ({secs:.1}s)"
    );
}

// ── criterion 6: heterogeneity trend ─────────────────────────────────────

#[test]
fn criterion_06_heterogeneity_trend() {
    let _gate = GATE.lock().unwrap();
    let started = Instant::now();
    let dir = temp_dir("c6");

    const BASE: &str = "\
blob_classes = 32
blob_dim = 32
blob_per_class = 40
blob_inter = 8
blob_intra = 2.0
hidden = 32,32
embed_dim = 32
epochs = 300
meta_batch = 4
sub_sample = 100
alpha = 0.05
inner_steps = 3
way = 5
shot = 1
query = 10
eval_way = 5
eval_shot = 1
eval_query = 15
eval_episodes = 300
eval_adapt_steps = 50
eval_scope = head_only
";

    let acc = |label: &str, extra: &str, seed: u64| -> f64 {
        train_and_fewshot(&format!("{BASE}{extra}"), seed, dir.join(format!("{label}_{seed}")))
    };

    let mut dyn_het = 0.0;
    let mut mtl_het = 0.0;
    let mut dyn_homo = 0.0;
    let mut stat_homo = 0.0;
    for &seed in &TREND_SEEDS {
        let d = acc(
            "dyn_het",
            "mode = maml\nhead_mode = dynamic\nway_min = 3\nway_max = 8\neta = 0.01\n",
            seed,
        );
        let m = acc(
            "mtl_het",
            "mode = mtl\nway_min = 3\nway_max = 8\neta = 0.05\n",
            seed,
        );
        let dh = acc("dyn_homo", "mode = maml\nhead_mode = dynamic\neta = 0.01\n", seed);
        let sh = acc("stat_homo", "mode = maml\nhead_mode = static\neta = 0.01\n", seed);
        println!("  seed {seed}: dyn_het {d:.4}, mtl {m:.4}, dyn_homo {dh:.4}, static_homo {sh:.4}");
        dyn_het += d / 3.0;
        mtl_het += m / 3.0;
        dyn_homo += dh / 3.0;
        stat_homo += sh / 3.0;
    }
    let margin = dyn_het - mtl_het;
    let parity = (dyn_homo - stat_homo).abs();
    let secs = started.elapsed().as_secs_f64();
    assert!(
        margin > 0.0,
        "dynamic-head meta {dyn_het:.4} must beat MTL {mtl_het:.4}"
    );
    assert!(
        parity < 0.03,
        "homogeneous dynamic {dyn_homo:.4} vs static {stat_homo:.4} differ by {parity:.4} >= 0.03"
    );
    assert!(secs < 600.0, "took {secs:.1}s, budget 600s");
    let _ = fs::remove_dir_all(&dir);
    println!(
        "criterion 6 PASS: heterogeneous dynamic-head {dyn_het:.4} > MTL {mtl_het:.4} \
         (margin {margin:+.4}); homogeneous dynamic/static parity gap {parity:.4} < 0.03 ({secs:.1}s)"
    );
}

// ── criterion 7: stability trend ─────────────────────────────────────────

#[test]
fn criterion_07_stability_trend() {
    let _gate = GATE.lock().unwrap();
    let started = Instant::now();
    let dir = temp_dir("c7");

    const BASE: &str = "\
blob_classes = 32
blob_dim = 32
blob_per_class = 40
blob_inter = 8
blob_intra = 2.0
hidden = 32,32
embed_dim = 32
epochs = 50
meta_batch = 16
sub_sample = 100
alpha = 0.05
inner_steps = 3
way = 5
shot = 1
query = 15
head_mode = static
noise_ratio = 0.3
probe_size = 256
";

    // mean rs over the final 25% of epochs for the named layers
    let tail_mean = |csv_path: &std::path::Path, layers: &[&str]| -> f64 {
        let text = fs::read_to_string(csv_path).unwrap();
        let rows: Vec<(usize, String, f64)> = text
            .lines()
            .skip(1)
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                (f[2].parse().unwrap(), f[3].to_string(), f[4].parse().unwrap())
            })
            .collect();
        let max_epoch = rows.iter().map(|r| r.0).max().unwrap();
        let cut = max_epoch - (max_epoch + 1) / 4;
        let vals: Vec<f64> = rows
            .iter()
            .filter(|(e, l, _)| *e > cut && layers.contains(&l.as_str()))
            .map(|r| r.2)
            .collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    };

    let mut meta_body = 0.0;
    let mut meta_head = 0.0;
    let mut wct_body = 0.0;
    for &seed in &TREND_SEEDS {
        for (mode, eta) in [("maml", 0.05), ("wct", 0.1)] {
            let mut config =
                parse_config_text(&format!("{BASE}mode = {mode}\neta = {eta}\n")).unwrap();
            config.seed = seed;
            config.out_dir = dir.join(format!("{mode}_{seed}"));
            let arts = run_stability(&config).unwrap();
            let body = tail_mean(&arts.csv_path, &["l1", "l2", "l3"]);
            let head = tail_mean(&arts.csv_path, &["head"]);
            println!("  {mode} seed {seed}: body rs {body:.6}, head rs {head:.6}");
            if mode == "maml" {
                meta_body += body / 3.0;
                meta_head += head / 3.0;
            } else {
                wct_body += body / 3.0;
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    assert!(
        meta_body > wct_body,
        "meta body rs {meta_body:.6} must exceed wct body rs {wct_body:.6}"
    );
    assert!(
        meta_head < meta_body,
        "meta head rs {meta_head:.6} must be below its body rs {meta_body:.6}"
    );
    assert!(secs < 600.0, "took {secs:.1}s, budget 600s");
    let _ = fs::remove_dir_all(&dir);
    println!(
        "criterion 7 PASS: final-quarter body rs meta {meta_body:.6} > wct {wct_body:.6}; \
         meta head rs {meta_head:.6} < meta body rs ({secs:.1}s)"
    );
}

// ── criterion 8: unsupervised end-to-end ─────────────────────────────────

const UHT_E2E: &str = "\
mode = uht
blob_classes = 16
blob_dim = 32
blob_per_class = 60
blob_inter = 40
blob_intra = 0.5
hidden = 64,64
embed_dim = 64
epochs = 300
meta_batch = 8
sub_sample = 100
alpha = 0.05
eta = 0.001
inner_steps = 1
eps = 0.3
min_samples = 4
normalize_embeddings = true
drop_epoch_frac = 0.2
order = exact
scope = body_and_head
eval_way = 5
eval_shot = 1
eval_query = 15
eval_episodes = 200
eval_adapt_steps = 50
kmeans_seeds = 5
";

#[test]
fn criterion_08_uht_end_to_end() {
    let _gate = GATE.lock().unwrap();
    let started = Instant::now();
    let dir = temp_dir("c8");

    let mut config = parse_config_text(UHT_E2E).unwrap();
    config.seed = 7;
    config.out_dir = dir.clone();
    let arts = run_train(&config).unwrap();
    assert_eq!(arts.report_epochs, 300);

    // training must actually engage: tasks form (low skip rate) and the
    // outer loss falls
    let metrics = fs::read_to_string(&arts.metrics_path).unwrap();
    let losses: Vec<f64> = metrics
        .lines()
        .filter(|l| l.contains(",train,loss,"))
        .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(losses.len(), 300);
    let early: f64 = losses[..50].iter().sum::<f64>() / 50.0;
    let late: f64 = losses[250..].iter().sum::<f64>() / 50.0;
    assert!(
        late < early,
        "outer loss must fall: first-50 mean {early:.4} vs last-50 mean {late:.4}"
    );

    let data = harness::build_dataset(&config).unwrap();
    let reports = harness::evaluate_model(&arts.model, &data.test, &config).unwrap();
    let fewshot = reports[0].mean;
    let zeroshot = reports[1].mean;
    let secs = started.elapsed().as_secs_f64();
    assert!(fewshot >= 0.40, "5-way 1-shot accuracy {fewshot:.4} below 0.40");
    assert!(zeroshot >= 0.60, "zero-shot matched accuracy {zeroshot:.4} below 0.60");
    assert!(secs < 900.0, "took {secs:.1}s, budget 900s");
    let _ = fs::remove_dir_all(&dir);
    println!(
        "criterion 8 PASS: after 300 outer steps 5w1s accuracy {fewshot:.4} >= 0.40, \
         zero-shot {zeroshot:.4} >= 0.60, outer loss {early:.4}->{late:.4} ({secs:.1}s)"
    );
}

// ── criterion 9: ANIL/MAML overhead ordering ─────────────────────────────

#[test]
fn criterion_09_overhead_ordering() {
    let _gate = GATE.lock().unwrap();
    let started = Instant::now();
    let dir = temp_dir("c9");

    let mean_epoch_secs = |scope: &str| -> (f64, PathBuf) {
        let text = format!(
            "{}scope = {scope}\nepochs = 30\ninner_steps = 2\neval_every = 10\nmilestone_episodes = 40\n",
            UHT_E2E.replace("scope = body_and_head\n", "").replace("epochs = 300\n", "")
        );
        let mut config = parse_config_text(&text).unwrap();
        config.seed = 3;
        config.out_dir = dir.join(scope);
        run_train(&config).unwrap();
        let timing = fs::read_to_string(config.out_dir.join("timing.csv")).unwrap();
        let secs: Vec<f64> = timing
            .lines()
            .skip(1)
            .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
            .collect();
        (
            secs.iter().sum::<f64>() / secs.len() as f64,
            config.out_dir.join("milestones.csv"),
        )
    };

    let (head_only, milestones_path) = mean_epoch_secs("head_only");
    let (body_and_head, _) = mean_epoch_secs("body_and_head");
    assert!(
        head_only < body_and_head,
        "head-only epochs ({head_only:.4}s) must be faster than body-and-head ({body_and_head:.4}s)"
    );

    let milestones = fs::read_to_string(milestones_path).unwrap();
    let lines: Vec<&str> = milestones.lines().collect();
    assert_eq!(lines[0], "threshold,first_epoch,cum_seconds");
    assert_eq!(lines.len(), 6, "five threshold rows expected:\n{milestones}");
    for (i, want) in ["0.5", "0.6", "0.7", "0.8", "0.9"].iter().enumerate() {
        assert!(
            lines[i + 1].starts_with(&format!("{want},")),
            "row {i} is {}",
            lines[i + 1]
        );
    }
    let secs = started.elapsed().as_secs_f64();
    assert!(secs < 300.0, "took {secs:.1}s, budget 300s");
    let _ = fs::remove_dir_all(&dir);
    println!(
        "criterion 9 PASS: mean wall-clock per outer step {head_only:.4}s (head only) < \
         {body_and_head:.4}s (body and head); milestone CSV has 5 threshold rows ({secs:.1}s)"
    );
}

// ── criterion 10: harness completeness ───────────────────────────────────

#[test]
fn criterion_10_harness_completeness() {
    let _gate = GATE.lock().unwrap();
    let started = Instant::now();
    let dir = temp_dir("c10");

    // ablate: four variants sharing one data seed
    let mut config = parse_config_text(&format!(
        "{}way = 5\nepochs = 60\neval_episodes = 100\nkmeans_seeds = 3\n",
        UHT_E2E.replace("epochs = 300\n", "").replace("eval_episodes = 200\n", "")
    ))
    .unwrap();
    config.seed = 3;
    config.out_dir = dir.join("ablate");
    let ablate_csv = run_ablate(&config).unwrap();
    let text = fs::read_to_string(&ablate_csv).unwrap();
    let mut variants: Vec<&str> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    variants.sort();
    variants.dedup();
    assert_eq!(variants, vec!["full", "g1", "g2", "g3"], "{text}");
    for metric in ["fewshot_5w1s", "zeroshot_kmeans"] {
        let rows = text.lines().filter(|l| l.contains(metric)).count();
        assert_eq!(rows, 4, "{metric} must have one row per variant:\n{text}");
    }
    let hashes: Vec<&str> = text.lines().skip(1).map(|l| l.rsplit(',').next().unwrap()).collect();
    assert!(hashes.windows(2).all(|w| w[0] == w[1]), "dataset hashes differ");
    assert!(!text.contains("error:"), "a variant failed:\n{text}");

    // sweep: 5 x 3 grid with at least 80% non-error cells
    let mut sweep_config = parse_config_text(&format!(
        "{}epochs = 20\neval_episodes = 50\nkmeans_seeds = 3\n",
        UHT_E2E.replace("epochs = 300\n", "").replace("eval_episodes = 200\n", "")
    ))
    .unwrap();
    sweep_config.seed = 3;
    sweep_config.out_dir = dir.join("sweep");
    let grid = vec![
        (
            "eps".to_string(),
            ["0.5", "1.0", "2.0", "3.0", "5.0"].map(String::from).to_vec(),
        ),
        ("min_samples".to_string(), ["5", "15", "30"].map(String::from).to_vec()),
    ];
    let sweep_csv = run_sweep(&sweep_config, &grid).unwrap();
    let text = fs::read_to_string(&sweep_csv).unwrap();
    let cells: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(cells.len(), 15, "expected 15 cells:\n{text}");
    let ok = cells.iter().filter(|l| l.split(',').nth(1) == Some("ok")).count();
    assert!(
        ok as f64 >= 0.8 * 15.0,
        "only {ok}/15 cells succeeded:\n{text}"
    );
    let secs = started.elapsed().as_secs_f64();
    assert!(secs < 1200.0, "took {secs:.1}s, budget 1200s");
    let _ = fs::remove_dir_all(&dir);
    println!(
        "criterion 10 PASS: ablate emitted 4 variants per metric on one dataset hash; \
         sweep completed {ok}/15 cells ({secs:.1}s)"
    );
}

// ── criterion 11: determinism and persistence ────────────────────────────

#[test]
fn criterion_11_determinism_and_persistence() {
    let _gate = GATE.lock().unwrap();
    let started = Instant::now();
    let dir = temp_dir("c11");

    let text = format!(
        "{}epochs = 10\neval_every = 5\nmilestone_episodes = 20\n",
        UHT_E2E.replace("epochs = 300\n", "")
    );
    let run = |out: &str| -> (Vec<u8>, Vec<u8>) {
        let mut config = parse_config_text(&text).unwrap();
        config.seed = 5;
        config.out_dir = dir.join(out);
        let arts = run_train(&config).unwrap();
        (
            fs::read(&arts.metrics_path).unwrap(),
            fs::read(&arts.checkpoint_path).unwrap(),
        )
    };
    let (metrics_a, ckpt_a) = run("a");
    let (metrics_b, ckpt_b) = run("b");
    assert_eq!(metrics_a, metrics_b, "metrics CSVs differ between reruns");
    assert_eq!(ckpt_a, ckpt_b, "checkpoints differ between reruns");

    // save -> load -> save byte identity
    let loaded = dynmeta::checkpoint::load_checkpoint_bytes::<f32>(&ckpt_a).unwrap();
    let resaved = dynmeta::checkpoint::checkpoint_bytes(&loaded);
    assert_eq!(ckpt_a, resaved, "save->load->save changed bytes");

    let secs = started.elapsed().as_secs_f64();
    assert!(secs < 60.0, "took {secs:.1}s, budget 60s");
    let _ = fs::remove_dir_all(&dir);
    println!(
        "criterion 11 PASS: rerun metrics and checkpoints byte-identical; \
         save->load->save byte-identical ({secs:.1}s)"
    );
}
