//! The bi-level training core: backbones, dynamic heads, hyper-parameters,
//! and the trainers for unsupervised cluster-task meta-learning plus the
//! supervised baselines it is compared against.

mod train;

pub use train::{
    inner_adapt, no_hook, outer_step, train_mtl, train_supervised_meta, train_uht, train_wct,
    uht_task_outer_loss, EpisodeSpec, EpochEvent, EpochStats, HeadMode, TaskDiagnostics,
    TaskOutcome, TrainReport,
};

use crate::clustering::DbscanParams;
use crate::error::{Error, Result};
use crate::rng::stream;
use crate::scalar::Scalar;
use crate::tensor::adapt::{GradOrder, Scope};
use crate::tensor::tape::{Tape, TapedParams, Var};
use crate::tensor::{ParamGroup, ParamRole, Tensor};
use rand::Rng;

/// Feature-extractor architecture.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Architecture {
    /// Fully connected stack: dims[0] inputs through hidden widths to the
    /// embedding width, ReLU between layers, none after the last.
    Mlp { dims: Vec<usize> },
    /// Stack of stride-2 valid convolutions (square 3x3 kernels, ReLU each),
    /// flattened to the embedding. Layer count is bounded by how many times
    /// the spatial extent survives the kernel.
    Conv {
        channels: usize,
        in_channels: usize,
        height: usize,
        width: usize,
        layers: usize,
    },
}

pub const CONV_KERNEL: usize = 3;
pub const CONV_STRIDE: usize = 2;

impl Architecture {
    pub fn mlp(dims: Vec<usize>) -> Architecture {
        Architecture::Mlp { dims }
    }

    /// Embedding width this architecture produces.
    pub fn embed_dim(&self) -> Result<usize> {
        match self {
            Architecture::Mlp { dims } => dims
                .last()
                .copied()
                .ok_or_else(|| Error::Argument("mlp needs at least one layer".into())),
            Architecture::Conv {
                channels,
                height,
                width,
                layers,
                ..
            } => {
                let (mut h, mut w) = (*height, *width);
                for i in 0..*layers {
                    if h < CONV_KERNEL || w < CONV_KERNEL {
                        return Err(Error::Shape(format!(
                            "conv layer {i} needs at least {CONV_KERNEL}x{CONV_KERNEL} input, got {h}x{w}"
                        )));
                    }
                    h = (h - CONV_KERNEL) / CONV_STRIDE + 1;
                    w = (w - CONV_KERNEL) / CONV_STRIDE + 1;
                }
                Ok(channels * h * w)
            }
        }
    }

    /// Serialize for checkpoint metadata.
    pub fn describe(&self) -> String {
        match self {
            Architecture::Mlp { dims } => format!(
                "mlp:{}",
                dims.iter()
                    .map(|d| d.to_string())
                    .collect::<Vec<_>>()
                    .join(",")
            ),
            Architecture::Conv {
                channels,
                in_channels,
                height,
                width,
                layers,
            } => format!("conv:{channels},{in_channels},{height},{width},{layers}"),
        }
    }

    pub fn parse(text: &str) -> Result<Architecture> {
        let bad = || Error::Checkpoint(format!("unparseable architecture '{text}'"));
        if let Some(list) = text.strip_prefix("mlp:") {
            let dims: Vec<usize> = list
                .split(',')
                .map(|s| s.parse().map_err(|_| bad()))
                .collect::<Result<_>>()?;
            return Ok(Architecture::Mlp { dims });
        }
        if let Some(list) = text.strip_prefix("conv:") {
            let parts: Vec<usize> = list
                .split(',')
                .map(|s| s.parse().map_err(|_| bad()))
                .collect::<Result<_>>()?;
            if parts.len() != 5 {
                return Err(bad());
            }
            return Ok(Architecture::Conv {
                channels: parts[0],
                in_channels: parts[1],
                height: parts[2],
                width: parts[3],
                layers: parts[4],
            });
        }
        Err(bad())
    }
}

/// Shared feature extractor: architecture plus its body parameters.
#[derive(Debug, Clone)]
pub struct Backbone<E> {
    arch: Architecture,
    body: ParamGroup<E>,
    embed_dim: usize,
}

fn uniform_tensor<E: Scalar>(
    dims: &[usize],
    bound: f64,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<Tensor<E>> {
    let n: usize = dims.iter().product();
    let data = (0..n)
        .map(|_| E::from_f64((rng.random::<f64>() * 2.0 - 1.0) * bound))
        .collect();
    Tensor::from_vec(dims, data)
}

impl<E: Scalar> Backbone<E> {
    /// Seeded initialization: weights uniform in ±1/sqrt(fan_in), biases zero.
    pub fn init(arch: Architecture, seed: u64) -> Result<Backbone<E>> {
        let embed_dim = arch.embed_dim()?;
        let mut body = ParamGroup::new(ParamRole::Body);
        let mut rng = stream(seed, &[0xb0d1]);
        match &arch {
            Architecture::Mlp { dims } => {
                if dims.len() < 2 {
                    return Err(Error::Argument(
                        "mlp needs an input and an output width".into(),
                    ));
                }
                for i in 0..dims.len() - 1 {
                    let bound = 1.0 / (dims[i] as f64).sqrt();
                    body.push(
                        format!("l{}.w", i + 1),
                        uniform_tensor(&[dims[i], dims[i + 1]], bound, &mut rng)?,
                    )?;
                    body.push(format!("l{}.b", i + 1), Tensor::zeros(&[dims[i + 1]])?)?;
                }
            }
            Architecture::Conv {
                channels,
                in_channels,
                layers,
                ..
            } => {
                if *layers == 0 {
                    return Err(Error::Argument("conv needs at least one layer".into()));
                }
                let mut cin = *in_channels;
                for i in 0..*layers {
                    let bound = 1.0 / ((cin * CONV_KERNEL * CONV_KERNEL) as f64).sqrt();
                    body.push(
                        format!("l{}.k", i + 1),
                        uniform_tensor(&[*channels, cin, CONV_KERNEL, CONV_KERNEL], bound, &mut rng)?,
                    )?;
                    cin = *channels;
                }
            }
        }
        Ok(Backbone {
            arch,
            body,
            embed_dim,
        })
    }

    pub fn from_parts(arch: Architecture, body: ParamGroup<E>) -> Result<Backbone<E>> {
        let embed_dim = arch.embed_dim()?;
        Ok(Backbone {
            arch,
            body,
            embed_dim,
        })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn body(&self) -> &ParamGroup<E> {
        &self.body
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn with_body(&self, body: ParamGroup<E>) -> Backbone<E> {
        Backbone {
            arch: self.arch.clone(),
            body,
            embed_dim: self.embed_dim,
        }
    }

    /// Flatten inputs for the MLP path; conv keeps the image layout.
    pub fn prep_inputs(&self, inputs: &Tensor<E>) -> Result<Tensor<E>> {
        let n = inputs.dims()[0];
        match &self.arch {
            Architecture::Mlp { dims } => {
                let flat = inputs.numel() / n;
                if flat != dims[0] {
                    return Err(Error::Shape(format!(
                        "inputs flatten to {flat} features, backbone expects {}",
                        dims[0]
                    )));
                }
                inputs.reshaped(&[n, flat])
            }
            Architecture::Conv {
                in_channels,
                height,
                width,
                ..
            } => {
                let want = [n, *in_channels, *height, *width];
                if inputs.dims() != want {
                    return Err(Error::Shape(format!(
                        "inputs are {:?}, backbone expects {:?}",
                        inputs.dims(),
                        want
                    )));
                }
                Ok(inputs.clone())
            }
        }
    }

    /// Forward pass producing the n×embed_dim embedding.
    pub fn forward(&self, tape: &mut Tape<E>, body: &TapedParams, x: Var) -> Result<Var> {
        Ok(self.forward_layers(tape, body, x)?.0)
    }

    /// Forward pass also returning every post-nonlinearity layer output, in
    /// network order, for activation capture.
    pub fn forward_layers(
        &self,
        tape: &mut Tape<E>,
        body: &TapedParams,
        x: Var,
    ) -> Result<(Var, Vec<(String, Var)>)> {
        let mut layers = Vec::new();
        match &self.arch {
            Architecture::Mlp { dims } => {
                let nlayers = dims.len() - 1;
                let mut cur = x;
                for i in 0..nlayers {
                    let w = body.vars()[2 * i];
                    let b = body.vars()[2 * i + 1];
                    cur = tape.linear(cur, w, b)?;
                    if i + 1 < nlayers {
                        cur = tape.relu(cur)?;
                    }
                    layers.push((format!("l{}", i + 1), cur));
                }
                Ok((cur, layers))
            }
            Architecture::Conv { layers: nlayers, .. } => {
                let mut cur = x;
                for i in 0..*nlayers {
                    let k = body.vars()[i];
                    cur = tape.conv2d(cur, k, CONV_STRIDE)?;
                    cur = tape.relu(cur)?;
                    layers.push((format!("l{}", i + 1), cur));
                }
                let n = tape.value(cur).dims()[0];
                let flat = tape.value(cur).numel() / n;
                let emb = tape.reshape(cur, &[n, flat])?;
                Ok((emb, layers))
            }
        }
    }

    /// Plain embedding of a raw input batch (no gradients kept).
    pub fn embed(&self, inputs: &Tensor<E>) -> Result<Tensor<E>> {
        let prepped = self.prep_inputs(inputs)?;
        let mut tape = Tape::new();
        let body = tape.param_group(&self.body);
        let x = tape.leaf(prepped);
        let emb = self.forward(&mut tape, &body, x)?;
        let out = tape.value(emb).clone();
        out.assert_finite("embedding")?;
        Ok(out)
    }
}

/// A classification head sized for one task, created fresh per task and
/// discarded after the task's outer-loss contribution is computed.
#[derive(Debug, Clone)]
pub struct DynamicHead<E> {
    pub params: ParamGroup<E>,
    pub class_count: usize,
}

/// Initialize a head of width `class_count`: weights uniform in
/// ±1/sqrt(embed_dim) from a stream keyed by (run seed, task id), bias zero.
pub fn init_dynamic_head<E: Scalar>(
    embed_dim: usize,
    class_count: usize,
    run_seed: u64,
    task_id: u64,
) -> Result<DynamicHead<E>> {
    if class_count < 2 {
        return Err(Error::Argument(format!(
            "a head needs at least 2 classes, got {class_count}"
        )));
    }
    let mut rng = stream(run_seed, &[0x4ead, task_id]);
    let bound = 1.0 / (embed_dim as f64).sqrt();
    let mut params = ParamGroup::new(ParamRole::Head);
    params.push(
        "head.w",
        uniform_tensor(&[embed_dim, class_count], bound, &mut rng)?,
    )?;
    params.push("head.b", Tensor::zeros(&[class_count])?)?;
    Ok(DynamicHead {
        params,
        class_count,
    })
}

/// Apply a head's linear layer to embeddings on the tape.
pub fn head_logits<E: Scalar>(
    tape: &mut Tape<E>,
    head: &TapedParams,
    embeddings: Var,
) -> Result<Var> {
    tape.linear(embeddings, head.vars()[0], head.vars()[1])
}

/// Training hyper-parameters shared by every mode.
#[derive(Debug, Clone)]
pub struct HyperConfig {
    /// Inner-loop learning rate.
    pub alpha: f64,
    /// Outer-loop learning rate.
    pub eta: f64,
    pub inner_steps: usize,
    /// Tasks per outer step.
    pub meta_batch: usize,
    /// Outer steps.
    pub epochs: usize,
    /// Unlabeled batch size per task.
    pub sub_sample: usize,
    pub dbscan: DbscanParams,
    /// Unit-normalize embeddings before clustering.
    pub normalize_embeddings: bool,
    /// Small-cluster dropout activates once epoch >= drop_epoch_frac * epochs.
    pub drop_epoch_frac: f64,
    pub order: GradOrder,
    pub scope: Scope,
    /// Split each task batch into support/query halves for the outer loss.
    pub split_support_query: bool,
}

impl Default for HyperConfig {
    fn default() -> Self {
        HyperConfig {
            alpha: 0.05,
            eta: 0.001,
            inner_steps: 1,
            meta_batch: 8,
            epochs: 100,
            sub_sample: 100,
            dbscan: DbscanParams {
                eps: 1.0,
                min_samples: 15,
            },
            normalize_embeddings: false,
            drop_epoch_frac: 0.2,
            order: GradOrder::Exact,
            scope: Scope::BodyAndHead,
            split_support_query: false,
        }
    }
}

impl HyperConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::Argument("alpha must be > 0".into()));
        }
        if !(self.eta >= 0.0) {
            return Err(Error::Argument("eta must be >= 0".into()));
        }
        if self.inner_steps == 0 {
            return Err(Error::Argument("inner_steps must be >= 1".into()));
        }
        if self.meta_batch == 0 {
            return Err(Error::Argument("meta_batch must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.drop_epoch_frac) {
            return Err(Error::Argument("drop_epoch_frac must be in [0,1]".into()));
        }
        DbscanParams::new(self.dbscan.eps, self.dbscan.min_samples)?;
        Ok(())
    }
}

/// Run provenance: enough to reproduce the run bit-exactly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub seed: u64,
    pub config_hash: u64,
    pub mode: String,
}

/// A trained backbone plus, for the single-level/static modes, its
/// persistent head.
#[derive(Debug, Clone)]
pub struct TrainedModel<E> {
    pub backbone: Backbone<E>,
    pub static_head: Option<ParamGroup<E>>,
    pub provenance: Provenance,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn head_init_bounds_and_determinism() {
        let h = init_dynamic_head::<f64>(64, 5, 7, 3).unwrap();
        let w = h.params.get("head.w").unwrap();
        assert_eq!(w.dims(), &[64, 5]);
        assert!(w.data().iter().all(|v| v.abs() <= 1.0 / 8.0));
        assert_eq!(h.params.get("head.b").unwrap().dims(), &[5]);
        assert!(h.params.get("head.b").unwrap().data().iter().all(|&v| v == 0.0));

        let h2 = init_dynamic_head::<f64>(64, 5, 7, 3).unwrap();
        assert_eq!(h.params, h2.params);
        let h3 = init_dynamic_head::<f64>(64, 5, 7, 4).unwrap();
        assert_ne!(h.params, h3.params);
    }

    #[test]
    fn head_rejects_single_class() {
        assert!(init_dynamic_head::<f64>(8, 1, 0, 0).is_err());
    }

    #[test]
    fn mlp_backbone_shapes() {
        let arch = Architecture::mlp(vec![4, 8, 3]);
        let b: Backbone<f64> = Backbone::init(arch, 5).unwrap();
        assert_eq!(b.embed_dim(), 3);
        let x = Tensor::from_vec(&[2, 4], vec![0.1; 8]).unwrap();
        let emb = b.embed(&x).unwrap();
        assert_eq!(emb.dims(), &[2, 3]);
    }

    #[test]
    fn conv_backbone_shapes() {
        let arch = Architecture::Conv {
            channels: 4,
            in_channels: 1,
            height: 11,
            width: 11,
            layers: 2,
        };
        // 11 -> 5 -> 2 spatial, embed = 4*2*2
        let b: Backbone<f32> = Backbone::init(arch, 3).unwrap();
        assert_eq!(b.embed_dim(), 16);
        let x = Tensor::from_vec(&[3, 1, 11, 11], vec![0.5; 3 * 121]).unwrap();
        let emb = b.embed(&x).unwrap();
        assert_eq!(emb.dims(), &[3, 16]);
    }

    #[test]
    fn conv_too_deep_rejected() {
        let arch = Architecture::Conv {
            channels: 4,
            in_channels: 1,
            height: 8,
            width: 8,
            layers: 4,
        };
        assert!(Backbone::<f32>::init(arch, 0).is_err());
    }

    #[test]
    fn architecture_describe_round_trip() {
        for arch in [
            Architecture::mlp(vec![32, 64, 64, 64]),
            Architecture::Conv {
                channels: 32,
                in_channels: 1,
                height: 28,
                width: 28,
                layers: 3,
            },
        ] {
            assert_eq!(Architecture::parse(&arch.describe()).unwrap(), arch);
        }
    }

    #[test]
    fn backbone_init_deterministic() {
        let a: Backbone<f32> = Backbone::init(Architecture::mlp(vec![6, 8, 4]), 9).unwrap();
        let b: Backbone<f32> = Backbone::init(Architecture::mlp(vec![6, 8, 4]), 9).unwrap();
        assert_eq!(a.body(), b.body());
    }
}
