//! Representation stability via SVCCA.
//!
//! A layer's stability between consecutive epochs is the SVCCA similarity of
//! its activation matrices on a fixed probe batch: reduce each matrix to the
//! directions covering `var_frac` of its variance, whiten, and average the
//! canonical correlations of the whitened cross-covariance.

use crate::error::{Error, Result};
use crate::linalg::{singular_values, thin_svd, Mat};
use crate::meta::{head_logits, Backbone};
use crate::scalar::Scalar;
use crate::tensor::tape::Tape;
use crate::tensor::{ParamGroup, Tensor};

/// Default retained-variance fraction for the SVD reduction step.
pub const DEFAULT_VAR_FRAC: f64 = 0.99;
/// Default probe batch size.
pub const DEFAULT_PROBE_SIZE: usize = 256;

/// Activations of every layer on the probe batch at one epoch.
#[derive(Debug, Clone)]
pub struct ActivationSnapshot {
    pub epoch: usize,
    /// (layer name, n-datapoints x d-neurons matrix), in network order.
    pub layers: Vec<(String, Mat)>,
}

impl ActivationSnapshot {
    pub fn layer_names(&self) -> Vec<&str> {
        self.layers.iter().map(|(n, _)| n.as_str()).collect()
    }
}

/// One rs value: the stability of `layer` at epoch `epoch` relative to the
/// previous epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct StabilityRecord {
    pub epoch: usize,
    pub layer: String,
    pub rs: f64,
}

/// A fixed batch of inputs sampled once per run; identical bytes at every
/// epoch so consecutive snapshots are comparable.
#[derive(Debug, Clone)]
pub struct ProbeBatch<E> {
    pub inputs: Tensor<E>,
}

impl<E: Scalar> ProbeBatch<E> {
    pub fn size(&self) -> usize {
        self.inputs.dims()[0]
    }
}

/// Record the post-nonlinearity outputs of every layer on the probe batch.
/// Convolutional activations of shape n×c×h×w are reshaped to (n·h·w)×c so
/// spatial positions count as datapoints; when a persistent head is present
/// its logits are captured as layer "head".
pub fn capture_activations<E: Scalar>(
    backbone: &Backbone<E>,
    static_head: Option<&ParamGroup<E>>,
    probe: &ProbeBatch<E>,
    epoch: usize,
) -> Result<ActivationSnapshot> {
    let prepped = backbone.prep_inputs(&probe.inputs)?;
    let mut tape = Tape::new();
    let body = tape.param_group(backbone.body());
    let x = tape.leaf(prepped);
    let (emb, layer_vars) = backbone.forward_layers(&mut tape, &body, x)?;

    let mut layers = Vec::with_capacity(layer_vars.len() + 1);
    for (name, var) in &layer_vars {
        let t = tape.value(*var);
        t.assert_finite(name)?;
        let mat = match t.dims() {
            &[n, d] => {
                let mut m = Mat::zeros(n, d);
                for (dst, src) in m.data.iter_mut().zip(t.data()) {
                    *dst = src.to_f64();
                }
                m
            }
            &[n, c, h, w] => {
                // (n·h·w) x c: spatial positions become datapoints
                let mut m = Mat::zeros(n * h * w, c);
                let data = t.data();
                for b in 0..n {
                    for ci in 0..c {
                        for y in 0..h {
                            for xx in 0..w {
                                let row = (b * h + y) * w + xx;
                                m.set(row, ci, data[((b * c + ci) * h + y) * w + xx].to_f64());
                            }
                        }
                    }
                }
                m
            }
            other => {
                return Err(Error::Shape(format!(
                    "layer {name} has unexpected shape {other:?}"
                )))
            }
        };
        if mat.rows < mat.cols {
            return Err(Error::Shape(format!(
                "probe too small for layer {name}: {} rows for {} neurons",
                mat.rows, mat.cols
            )));
        }
        layers.push((name.clone(), mat));
    }
    if let Some(head) = static_head {
        let h = tape.param_group(head);
        let logits = head_logits(&mut tape, &h, emb)?;
        let t = tape.value(logits);
        let (n, d) = t.as_matrix_dims()?;
        let mut m = Mat::zeros(n, d);
        for (dst, src) in m.data.iter_mut().zip(t.data()) {
            *dst = src.to_f64();
        }
        layers.push(("head".to_string(), m));
    }
    Ok(ActivationSnapshot { epoch, layers })
}

/// SVD reduction: centered scores plus the orthonormal left basis of the
/// retained directions.
fn svd_reduce_parts(acts: &Mat, var_frac: f64) -> Result<(Mat, Mat)> {
    if !(var_frac > 0.0 && var_frac <= 1.0) {
        return Err(Error::Argument(format!(
            "var_frac must be in (0, 1], got {var_frac}"
        )));
    }
    if acts.rows < acts.cols || acts.cols == 0 {
        return Err(Error::Shape(format!(
            "need n >= d >= 1, got {}x{}",
            acts.rows, acts.cols
        )));
    }
    let centered = acts.center_columns();
    let (u, sigma, _v) = thin_svd(&centered)?;
    let total: f64 = sigma.iter().map(|s| s * s).sum();
    if total <= 0.0 {
        return Err(Error::Degenerate(
            "activation matrix has no variance".into(),
        ));
    }
    let mut cum = 0.0;
    let mut keep = 0;
    for s in &sigma {
        cum += s * s;
        keep += 1;
        if cum >= var_frac * total - 1e-12 * total {
            break;
        }
    }
    let mut scores = Mat::zeros(acts.rows, keep);
    let mut basis = Mat::zeros(acts.rows, keep);
    for i in 0..acts.rows {
        for j in 0..keep {
            basis.set(i, j, u.at(i, j));
            scores.set(i, j, u.at(i, j) * sigma[j]);
        }
    }
    Ok((scores, basis))
}

/// Center columns, take the SVD, and keep the smallest leading set of
/// directions whose squared singular values cover at least `var_frac` of the
/// total. Returns the projection (scores) onto those directions.
pub fn svd_reduce(acts: &Mat, var_frac: f64) -> Result<Mat> {
    svd_reduce_parts(acts, var_frac).map(|(scores, _)| scores)
}

/// Mean canonical correlation between the SVD reductions of A and B.
/// Both matrices must have the same row count (same probe datapoints).
///
/// The reductions come out of the SVD with orthonormal datapoint-side bases,
/// so whitening each side is an exact diagonal rescaling and the canonical
/// correlations are the singular values of `Ux^T Uy` (the cosines of the
/// principal angles between the two reduced subspaces), clipped to [0, 1].
pub fn svcca_similarity(a: &Mat, b: &Mat, var_frac: f64) -> Result<f64> {
    if a.rows != b.rows {
        return Err(Error::Shape(format!(
            "row counts differ: {} vs {}",
            a.rows, b.rows
        )));
    }
    let (_, ux) = svd_reduce_parts(a, var_frac)?;
    let (_, uy) = svd_reduce_parts(b, var_frac)?;
    let m = ux.transpose().matmul(&uy)?;
    let sv = singular_values(&m)?;
    let k = m.rows.min(m.cols);
    let mean = sv
        .iter()
        .take(k)
        .map(|&s| s.clamp(0.0, 1.0))
        .sum::<f64>()
        / k as f64;
    Ok(mean)
}

/// rs for every layer between two consecutive snapshots.
pub fn representation_stability(
    prev: &ActivationSnapshot,
    curr: &ActivationSnapshot,
    var_frac: f64,
) -> Result<Vec<StabilityRecord>> {
    if prev.layer_names() != curr.layer_names() {
        return Err(Error::Contract(format!(
            "layer sets differ: {:?} vs {:?}",
            prev.layer_names(),
            curr.layer_names()
        )));
    }
    let mut out = Vec::with_capacity(curr.layers.len());
    for ((name, a), (_, b)) in prev.layers.iter().zip(&curr.layers) {
        let rs = svcca_similarity(a, b, var_frac)?;
        out.push(StabilityRecord {
            epoch: curr.epoch,
            layer: name.clone(),
            rs,
        });
    }
    Ok(out)
}

/// CSV rows for stability records: `run_id,seed,epoch,layer,rs`.
pub fn stability_csv(run_id: &str, seed: u64, records: &[StabilityRecord]) -> String {
    let mut out = String::from("run_id,seed,epoch,layer,rs\n");
    for r in records {
        out.push_str(&format!("{run_id},{seed},{},{},{}\n", r.epoch, r.layer, r.rs));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::eigh;
    use crate::rng::stream;
    use rand::Rng;

    fn random_mat(n: usize, d: usize, seed: u64) -> Mat {
        let mut rng = stream(seed, &[d as u64]);
        let mut m = Mat::zeros(n, d);
        for v in m.data.iter_mut() {
            *v = rng.random::<f64>() * 2.0 - 1.0;
        }
        m
    }

    #[test]
    fn svd_reduce_rank_one() {
        // one nonzero direction: every row is a multiple of the same vector
        let mut m = Mat::zeros(50, 4);
        let dir = [1.0, -2.0, 0.5, 3.0];
        let mut rng = stream(3, &[0]);
        for i in 0..50 {
            let a: f64 = rng.random::<f64>() * 2.0 - 1.0;
            for j in 0..4 {
                m.set(i, j, a * dir[j]);
            }
        }
        let r = svd_reduce(&m, 0.99).unwrap();
        assert_eq!(r.cols, 1);
    }

    #[test]
    fn svd_reduce_full_rank_keeps_all() {
        let m = random_mat(60, 5, 9);
        let r = svd_reduce(&m, 1.0).unwrap();
        assert_eq!(r.cols, 5);
    }

    #[test]
    fn svd_reduce_two_dominant_directions() {
        // columns scaled so the singular spectrum is ~(100, 100, 1, ...)
        let mut m = random_mat(500, 10, 21);
        // orthonormalize-ish by construction: random gaussian columns are
        // near-orthogonal at n=500; scale the first two up.
        for i in 0..500 {
            for j in 0..10 {
                let scale = if j < 2 { 100.0 } else { 1.0 };
                let v = m.at(i, j) * scale;
                m.set(i, j, v);
            }
        }
        let r = svd_reduce(&m, 0.99).unwrap();
        assert_eq!(r.cols, 2);

        // independent spectrum check: power iteration on the Gram matrix
        let centered = m.center_columns();
        let gram = centered.transpose().matmul(&centered).unwrap();
        let mut v = vec![1.0f64; 10];
        for _ in 0..200 {
            let mut nv = vec![0.0; 10];
            for i in 0..10 {
                for j in 0..10 {
                    nv[i] += gram.at(i, j) * v[j];
                }
            }
            let norm = nv.iter().map(|x| x * x).sum::<f64>().sqrt();
            for x in nv.iter_mut() {
                *x /= norm;
            }
            v = nv;
        }
        let lead: f64 = (0..10)
            .map(|i| (0..10).map(|j| gram.at(i, j) * v[j]).sum::<f64>() * v[i])
            .sum();
        let total: f64 = (0..10).map(|i| gram.at(i, i)).sum();
        // two dominant directions: the top one alone covers < 99%, top two
        // cover well over 99%
        assert!(lead / total < 0.99);
        assert!(2.0 * lead / total > 0.99);
    }

    #[test]
    fn degenerate_matrix_errors() {
        let m = Mat::zeros(20, 3); // constant columns, no variance
        assert!(matches!(
            svd_reduce(&m, 0.99),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn self_similarity_is_one() {
        let a = random_mat(500, 10, 31);
        let s = svcca_similarity(&a, &a, 0.99).unwrap();
        assert!((s - 1.0).abs() < 1e-6, "self similarity {s}");
    }

    #[test]
    fn invariance_to_orthogonal_map_and_scaling() {
        let a = random_mat(500, 10, 32);
        // random orthogonal Q from the SVD of a random matrix
        let r = random_mat(10, 10, 33);
        let sym = r.transpose().matmul(&r).unwrap();
        let (_, q) = eigh(&sym).unwrap();
        let aq = a.matmul(&q).unwrap();
        let s = svcca_similarity(&a, &aq, 0.99).unwrap();
        assert!((s - 1.0).abs() < 1e-6, "orthogonal map similarity {s}");

        let mut a2 = a.clone();
        for v in a2.data.iter_mut() {
            *v *= 2.0;
        }
        let s = svcca_similarity(&a, &a2, 0.99).unwrap();
        assert!((s - 1.0).abs() < 1e-6, "scaling similarity {s}");
    }

    #[test]
    fn independent_gaussians_near_zero() {
        let a = random_mat(5000, 10, 41);
        let b = random_mat(5000, 10, 42);
        let s = svcca_similarity(&a, &b, 0.99).unwrap();
        assert!(s < 0.1, "independent similarity {s}");
    }

    #[test]
    fn symmetry_and_column_permutation() {
        let a = random_mat(300, 6, 51);
        let b = random_mat(300, 8, 52);
        let sab = svcca_similarity(&a, &b, 0.99).unwrap();
        let sba = svcca_similarity(&b, &a, 0.99).unwrap();
        assert!((sab - sba).abs() < 1e-9);

        // permute the columns of a
        let mut ap = Mat::zeros(300, 6);
        let perm = [3usize, 0, 5, 1, 4, 2];
        for i in 0..300 {
            for (j, &pj) in perm.iter().enumerate() {
                ap.set(i, j, a.at(i, pj));
            }
        }
        let sp = svcca_similarity(&ap, &b, 0.99).unwrap();
        assert!((sab - sp).abs() < 1e-9);
        assert!(sab >= 0.0 && sab <= 1.0 + 1e-9);
    }

    #[test]
    fn capture_shapes_and_determinism() {
        use crate::meta::Architecture;
        let backbone: Backbone<f64> =
            Backbone::init(Architecture::mlp(vec![4, 8, 6]), 3).unwrap();
        let mut rng = stream(9, &[0]);
        let data: Vec<f64> = (0..256 * 4).map(|_| rng.random::<f64>()).collect();
        let probe = ProbeBatch {
            inputs: Tensor::from_vec(&[256, 4], data).unwrap(),
        };
        let snap = capture_activations(&backbone, None, &probe, 0).unwrap();
        assert_eq!(snap.layers.len(), 2);
        for (_, m) in &snap.layers {
            assert_eq!(m.rows, 256);
        }
        let snap2 = capture_activations(&backbone, None, &probe, 0).unwrap();
        for ((_, a), (_, b)) in snap.layers.iter().zip(&snap2.layers) {
            assert_eq!(a.data, b.data);
        }
    }

    #[test]
    fn capture_conv_reshapes_spatial_to_rows() {
        use crate::meta::Architecture;
        let arch = Architecture::Conv {
            channels: 4,
            in_channels: 1,
            height: 11,
            width: 11,
            layers: 1,
        };
        let backbone: Backbone<f64> = Backbone::init(arch, 3).unwrap();
        let mut rng = stream(9, &[1]);
        let data: Vec<f64> = (0..8 * 121).map(|_| rng.random::<f64>()).collect();
        let probe = ProbeBatch {
            inputs: Tensor::from_vec(&[8, 1, 11, 11], data).unwrap(),
        };
        let snap = capture_activations(&backbone, None, &probe, 0).unwrap();
        // 11 -> 5 spatial, so the conv layer matrix is (8·5·5) x 4
        assert_eq!(snap.layers[0].1.rows, 200);
        assert_eq!(snap.layers[0].1.cols, 4);
    }

    #[test]
    fn stability_mismatched_layers_is_contract_error() {
        let a = ActivationSnapshot {
            epoch: 0,
            layers: vec![("l1".into(), random_mat(50, 4, 61))],
        };
        let b = ActivationSnapshot {
            epoch: 1,
            layers: vec![("other".into(), random_mat(50, 4, 62))],
        };
        assert!(matches!(
            representation_stability(&a, &b, 0.99),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn unchanged_layer_has_rs_one_rescaled_layer_too() {
        let m = random_mat(200, 6, 71);
        let mut scaled = m.clone();
        for v in scaled.data.iter_mut() {
            *v *= 2.0;
        }
        let prev = ActivationSnapshot {
            epoch: 4,
            layers: vec![("l1".into(), m.clone()), ("l2".into(), m.clone())],
        };
        let curr = ActivationSnapshot {
            epoch: 5,
            layers: vec![("l1".into(), m.clone()), ("l2".into(), scaled)],
        };
        let recs = representation_stability(&prev, &curr, 0.99).unwrap();
        assert_eq!(recs.len(), 2);
        for r in &recs {
            assert_eq!(r.epoch, 5);
            assert!((r.rs - 1.0).abs() < 1e-6, "{} rs {}", r.layer, r.rs);
        }
    }

    #[test]
    fn rerandomized_layer_scores_below_unchanged() {
        for seed in 0..5u64 {
            let kept = random_mat(300, 8, 100 + seed);
            let fresh_a = random_mat(300, 8, 200 + seed);
            let fresh_b = random_mat(300, 8, 300 + seed);
            let prev = ActivationSnapshot {
                epoch: 1,
                layers: vec![("stay".into(), kept.clone()), ("jump".into(), fresh_a)],
            };
            let curr = ActivationSnapshot {
                epoch: 2,
                layers: vec![("stay".into(), kept.clone()), ("jump".into(), fresh_b)],
            };
            let recs = representation_stability(&prev, &curr, 0.99).unwrap();
            let stay = recs.iter().find(|r| r.layer == "stay").unwrap().rs;
            let jump = recs.iter().find(|r| r.layer == "jump").unwrap().rs;
            assert!(jump < stay, "seed {seed}: jump {jump} !< stay {stay}");
        }
    }
}
