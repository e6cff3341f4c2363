//! Flat `key = value` run configuration with a closed schema: unknown keys
//! and constraint violations are named errors with line numbers, defaults
//! follow the reference experiment setup, and the canonical echo is a parse
//! fixed point.

use crate::clustering::DbscanParams;
use crate::error::{Error, Result};
use crate::meta::{EpisodeSpec, HeadMode, HyperConfig};
use crate::rng::fnv1a;
use crate::tensor::adapt::{GradOrder, Scope};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Uht,
    Maml,
    Anil,
    Wct,
    Mtl,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Uht => "uht",
            Mode::Maml => "maml",
            Mode::Anil => "anil",
            Mode::Wct => "wct",
            Mode::Mtl => "mtl",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Blobs,
    ImageDir,
    Tensor,
}

/// Fully resolved run configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    pub seed: u64,
    pub out_dir: PathBuf,

    pub dataset: DatasetKind,
    pub data_path: String,
    pub labels_path: String,
    pub blob_classes: usize,
    pub blob_dim: usize,
    pub blob_per_class: usize,
    pub blob_intra: f64,
    pub blob_inter: f64,
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    pub noise_ratio: f64,

    pub backbone: String, // "mlp" | "conv"
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub conv_channels: usize,
    pub conv_layers: usize,

    pub alpha: f64,
    pub eta: f64,
    pub inner_steps: usize,
    pub meta_batch: usize,
    pub epochs: usize,
    pub sub_sample: usize,
    pub eps: f64,
    pub min_samples: usize,
    pub drop_epoch_frac: f64,
    pub order: GradOrder,
    pub scope: Scope,
    pub split_support_query: bool,
    pub normalize_embeddings: bool,

    pub way: usize,
    pub shot: usize,
    pub query: usize,
    pub way_min: usize,
    pub way_max: usize,
    pub head_mode: HeadMode,

    pub eval_episodes: usize,
    pub eval_adapt_steps: usize,
    pub eval_way: usize,
    pub eval_shot: usize,
    pub eval_query: usize,
    pub kmeans_seeds: usize,
    pub kmeans_iters: usize,
    /// "auto" derives from the mode; "body_and_head"/"head_only" force it.
    pub eval_scope: String,

    pub probe_size: usize,
    pub var_frac: f64,
    pub milestones: Vec<f64>,
    pub eval_every: usize,
    pub milestone_episodes: usize,
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: Mode::Uht,
            seed: 0,
            out_dir: PathBuf::from("out"),
            dataset: DatasetKind::Blobs,
            data_path: String::new(),
            labels_path: String::new(),
            blob_classes: 16,
            blob_dim: 32,
            blob_per_class: 60,
            blob_intra: 0.5,
            blob_inter: 40.0,
            train_frac: 0.5,
            val_frac: 0.2,
            test_frac: 0.3,
            noise_ratio: 0.0,
            backbone: "mlp".into(),
            hidden: vec![64, 64],
            embed_dim: 64,
            conv_channels: 32,
            conv_layers: 3,
            alpha: 0.05,
            eta: 0.001,
            inner_steps: 1,
            meta_batch: 8,
            epochs: 100,
            sub_sample: 100,
            eps: 1.0,
            min_samples: 15,
            drop_epoch_frac: 0.2,
            order: GradOrder::Exact,
            scope: Scope::BodyAndHead,
            split_support_query: false,
            normalize_embeddings: false,
            way: 5,
            shot: 1,
            query: 15,
            way_min: 0,
            way_max: 0,
            head_mode: HeadMode::Static,
            eval_episodes: 200,
            eval_adapt_steps: 50,
            eval_way: 5,
            eval_shot: 1,
            eval_query: 15,
            kmeans_seeds: 5,
            kmeans_iters: 50,
            eval_scope: "auto".into(),
            probe_size: 256,
            var_frac: 0.99,
            milestones: vec![0.5, 0.6, 0.7, 0.8, 0.9],
            eval_every: 0,
            milestone_episodes: 40,
            checkpoint_every: 0,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::parse(line, format!("{key}: cannot parse '{value}'")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<Vec<T>> {
    value
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::parse(line, format!("{key}: cannot parse '{s}'")))
        })
        .collect()
}

fn parse_bool(key: &str, value: &str, line: usize) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(Error::parse(
            line,
            format!("{key}: expected true or false, got '{other}'"),
        )),
    }
}

impl RunConfig {
    /// Apply one `key = value` assignment. `line` feeds error messages.
    pub fn set_key(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        match key {
            "mode" => {
                self.mode = match value {
                    "uht" => Mode::Uht,
                    "maml" => Mode::Maml,
                    "anil" => Mode::Anil,
                    "wct" => Mode::Wct,
                    "mtl" => Mode::Mtl,
                    other => {
                        return Err(Error::parse(
                            line,
                            format!("mode: unknown mode '{other}' (uht|maml|anil|wct|mtl)"),
                        ))
                    }
                }
            }
            "seed" => self.seed = parse_num(key, value, line)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            "dataset" => {
                self.dataset = match value {
                    "blobs" => DatasetKind::Blobs,
                    "image_dir" => DatasetKind::ImageDir,
                    "tensor" => DatasetKind::Tensor,
                    other => {
                        return Err(Error::parse(
                            line,
                            format!("dataset: unknown kind '{other}' (blobs|image_dir|tensor)"),
                        ))
                    }
                }
            }
            "data_path" => self.data_path = value.to_string(),
            "labels_path" => self.labels_path = value.to_string(),
            "blob_classes" => self.blob_classes = parse_num(key, value, line)?,
            "blob_dim" => self.blob_dim = parse_num(key, value, line)?,
            "blob_per_class" => self.blob_per_class = parse_num(key, value, line)?,
            "blob_intra" => self.blob_intra = parse_num(key, value, line)?,
            "blob_inter" => self.blob_inter = parse_num(key, value, line)?,
            "train_frac" => self.train_frac = parse_num(key, value, line)?,
            "val_frac" => self.val_frac = parse_num(key, value, line)?,
            "test_frac" => self.test_frac = parse_num(key, value, line)?,
            "noise_ratio" => self.noise_ratio = parse_num(key, value, line)?,
            "backbone" => {
                if value != "mlp" && value != "conv" {
                    return Err(Error::parse(
                        line,
                        format!("backbone: expected mlp or conv, got '{value}'"),
                    ));
                }
                self.backbone = value.to_string();
            }
            "hidden" => self.hidden = parse_list(key, value, line)?,
            "embed_dim" => self.embed_dim = parse_num(key, value, line)?,
            "conv_channels" => self.conv_channels = parse_num(key, value, line)?,
            "conv_layers" => self.conv_layers = parse_num(key, value, line)?,
            "alpha" => self.alpha = parse_num(key, value, line)?,
            "eta" => self.eta = parse_num(key, value, line)?,
            "inner_steps" => self.inner_steps = parse_num(key, value, line)?,
            "meta_batch" => self.meta_batch = parse_num(key, value, line)?,
            "epochs" => self.epochs = parse_num(key, value, line)?,
            "sub_sample" => self.sub_sample = parse_num(key, value, line)?,
            "eps" => self.eps = parse_num(key, value, line)?,
            "min_samples" => self.min_samples = parse_num(key, value, line)?,
            "drop_epoch_frac" => self.drop_epoch_frac = parse_num(key, value, line)?,
            "order" => {
                self.order = match value {
                    "exact" => GradOrder::Exact,
                    "first_order" => GradOrder::FirstOrder,
                    other => {
                        return Err(Error::parse(
                            line,
                            format!("order: expected exact or first_order, got '{other}'"),
                        ))
                    }
                }
            }
            "scope" => {
                self.scope = match value {
                    "body_and_head" => Scope::BodyAndHead,
                    "head_only" => Scope::HeadOnly,
                    other => {
                        return Err(Error::parse(
                            line,
                            format!("scope: expected body_and_head or head_only, got '{other}'"),
                        ))
                    }
                }
            }
            "split_support_query" => self.split_support_query = parse_bool(key, value, line)?,
            "normalize_embeddings" => self.normalize_embeddings = parse_bool(key, value, line)?,
            "way" => self.way = parse_num(key, value, line)?,
            "shot" => self.shot = parse_num(key, value, line)?,
            "query" => self.query = parse_num(key, value, line)?,
            "way_min" => self.way_min = parse_num(key, value, line)?,
            "way_max" => self.way_max = parse_num(key, value, line)?,
            "head_mode" => {
                self.head_mode = match value {
                    "static" => HeadMode::Static,
                    "dynamic" => HeadMode::Dynamic,
                    other => {
                        return Err(Error::parse(
                            line,
                            format!("head_mode: expected static or dynamic, got '{other}'"),
                        ))
                    }
                }
            }
            "eval_episodes" => self.eval_episodes = parse_num(key, value, line)?,
            "eval_adapt_steps" => self.eval_adapt_steps = parse_num(key, value, line)?,
            "eval_way" => self.eval_way = parse_num(key, value, line)?,
            "eval_shot" => self.eval_shot = parse_num(key, value, line)?,
            "eval_query" => self.eval_query = parse_num(key, value, line)?,
            "kmeans_seeds" => self.kmeans_seeds = parse_num(key, value, line)?,
            "kmeans_iters" => self.kmeans_iters = parse_num(key, value, line)?,
            "eval_scope" => {
                if !["auto", "body_and_head", "head_only"].contains(&value) {
                    return Err(Error::parse(
                        line,
                        format!("eval_scope: expected auto, body_and_head, or head_only, got '{value}'"),
                    ));
                }
                self.eval_scope = value.to_string();
            }
            "probe_size" => self.probe_size = parse_num(key, value, line)?,
            "var_frac" => self.var_frac = parse_num(key, value, line)?,
            "milestones" => self.milestones = parse_list(key, value, line)?,
            "eval_every" => self.eval_every = parse_num(key, value, line)?,
            "milestone_episodes" => self.milestone_episodes = parse_num(key, value, line)?,
            "checkpoint_every" => self.checkpoint_every = parse_num(key, value, line)?,
            other => {
                return Err(Error::parse(line, format!("unknown key '{other}'")));
            }
        }
        Ok(())
    }

    /// Cross-field constraint checks, with the offending key named.
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, ok: bool| {
            if ok {
                Ok(())
            } else {
                Err(Error::Argument(format!("{name} violates its constraint")))
            }
        };
        positive("alpha", self.alpha > 0.0)?;
        positive("eta", self.eta >= 0.0)?;
        positive("eps", self.eps > 0.0)?;
        positive("min_samples", self.min_samples >= 1)?;
        positive("inner_steps", self.inner_steps >= 1)?;
        positive("meta_batch", self.meta_batch >= 1)?;
        positive("sub_sample", self.sub_sample >= 1)?;
        positive(
            "drop_epoch_frac",
            (0.0..=1.0).contains(&self.drop_epoch_frac),
        )?;
        positive("noise_ratio", (0.0..=1.0).contains(&self.noise_ratio))?;
        positive("var_frac", self.var_frac > 0.0 && self.var_frac <= 1.0)?;
        positive(
            "train_frac",
            (self.train_frac + self.val_frac + self.test_frac - 1.0).abs() < 1e-9,
        )?;
        positive("way", self.way >= 2)?;
        positive("shot", self.shot >= 1)?;
        positive("query", self.query >= 1)?;
        positive(
            "way_min",
            (self.way_min == 0) == (self.way_max == 0) && self.way_min <= self.way_max,
        )?;
        positive("eval_way", self.eval_way >= 2)?;
        positive("blob_classes", self.blob_classes >= 1)?;
        positive("embed_dim", self.embed_dim >= 1)?;
        positive("milestones", !self.milestones.is_empty())?;
        Ok(())
    }

    /// Episode spec for the supervised modes: the heterogeneous range when
    /// way_min/way_max are set, else the fixed way.
    pub fn episode_spec(&self) -> EpisodeSpec {
        if self.way_min > 0 {
            EpisodeSpec {
                way_min: self.way_min,
                way_max: self.way_max,
                shot: self.shot,
                query: self.query,
            }
        } else {
            EpisodeSpec::fixed(self.way, self.shot, self.query)
        }
    }

    /// Adaptation scope used at evaluation time. In auto mode: frozen body
    /// (head only) for the single-level baselines and anil, full fine-tuning
    /// for maml, and the training scope for uht.
    pub fn eval_scope(&self) -> Scope {
        match self.eval_scope.as_str() {
            "body_and_head" => Scope::BodyAndHead,
            "head_only" => Scope::HeadOnly,
            _ => match self.mode {
                Mode::Maml => Scope::BodyAndHead,
                Mode::Anil | Mode::Wct | Mode::Mtl => Scope::HeadOnly,
                Mode::Uht => self.hyper().scope,
            },
        }
    }

    /// Inner/outer hyper-parameters; the mode pins the scope for maml/anil.
    pub fn hyper(&self) -> HyperConfig {
        let scope = match self.mode {
            Mode::Maml => Scope::BodyAndHead,
            Mode::Anil => Scope::HeadOnly,
            _ => self.scope,
        };
        HyperConfig {
            alpha: self.alpha,
            eta: self.eta,
            inner_steps: self.inner_steps,
            meta_batch: self.meta_batch,
            epochs: self.epochs,
            sub_sample: self.sub_sample,
            dbscan: DbscanParams {
                eps: self.eps,
                min_samples: self.min_samples,
            },
            normalize_embeddings: self.normalize_embeddings,
            drop_epoch_frac: self.drop_epoch_frac,
            order: self.order,
            scope,
            split_support_query: self.split_support_query,
        }
    }

    /// Canonical echo: every key, sorted, `key = value`. Parsing this text
    /// reproduces the config exactly.
    pub fn canonical_text(&self) -> String {
        let mut pairs: Vec<(String, String)> = vec![
            ("mode".into(), self.mode.as_str().into()),
            ("seed".into(), self.seed.to_string()),
            ("out_dir".into(), self.out_dir.display().to_string()),
            (
                "dataset".into(),
                match self.dataset {
                    DatasetKind::Blobs => "blobs".into(),
                    DatasetKind::ImageDir => "image_dir".into(),
                    DatasetKind::Tensor => "tensor".into(),
                },
            ),
            ("data_path".into(), self.data_path.clone()),
            ("labels_path".into(), self.labels_path.clone()),
            ("blob_classes".into(), self.blob_classes.to_string()),
            ("blob_dim".into(), self.blob_dim.to_string()),
            ("blob_per_class".into(), self.blob_per_class.to_string()),
            ("blob_intra".into(), self.blob_intra.to_string()),
            ("blob_inter".into(), self.blob_inter.to_string()),
            ("train_frac".into(), self.train_frac.to_string()),
            ("val_frac".into(), self.val_frac.to_string()),
            ("test_frac".into(), self.test_frac.to_string()),
            ("noise_ratio".into(), self.noise_ratio.to_string()),
            ("backbone".into(), self.backbone.clone()),
            (
                "hidden".into(),
                self.hidden
                    .iter()
                    .map(|v| v.to_string())
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            ("embed_dim".into(), self.embed_dim.to_string()),
            ("conv_channels".into(), self.conv_channels.to_string()),
            ("conv_layers".into(), self.conv_layers.to_string()),
            ("alpha".into(), self.alpha.to_string()),
            ("eta".into(), self.eta.to_string()),
            ("inner_steps".into(), self.inner_steps.to_string()),
            ("meta_batch".into(), self.meta_batch.to_string()),
            ("epochs".into(), self.epochs.to_string()),
            ("sub_sample".into(), self.sub_sample.to_string()),
            ("eps".into(), self.eps.to_string()),
            ("min_samples".into(), self.min_samples.to_string()),
            ("drop_epoch_frac".into(), self.drop_epoch_frac.to_string()),
            (
                "order".into(),
                match self.order {
                    GradOrder::Exact => "exact".into(),
                    GradOrder::FirstOrder => "first_order".into(),
                },
            ),
            (
                "scope".into(),
                match self.scope {
                    Scope::BodyAndHead => "body_and_head".into(),
                    Scope::HeadOnly => "head_only".into(),
                },
            ),
            (
                "split_support_query".into(),
                self.split_support_query.to_string(),
            ),
            (
                "normalize_embeddings".into(),
                self.normalize_embeddings.to_string(),
            ),
            ("way".into(), self.way.to_string()),
            ("shot".into(), self.shot.to_string()),
            ("query".into(), self.query.to_string()),
            ("way_min".into(), self.way_min.to_string()),
            ("way_max".into(), self.way_max.to_string()),
            (
                "head_mode".into(),
                match self.head_mode {
                    HeadMode::Static => "static".into(),
                    HeadMode::Dynamic => "dynamic".into(),
                },
            ),
            ("eval_episodes".into(), self.eval_episodes.to_string()),
            ("eval_adapt_steps".into(), self.eval_adapt_steps.to_string()),
            ("eval_way".into(), self.eval_way.to_string()),
            ("eval_shot".into(), self.eval_shot.to_string()),
            ("eval_query".into(), self.eval_query.to_string()),
            ("kmeans_seeds".into(), self.kmeans_seeds.to_string()),
            ("kmeans_iters".into(), self.kmeans_iters.to_string()),
            ("eval_scope".into(), self.eval_scope.clone()),
            ("probe_size".into(), self.probe_size.to_string()),
            ("var_frac".into(), self.var_frac.to_string()),
            (
                "milestones".into(),
                self.milestones
                    .iter()
                    .map(|v| v.to_string())
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            ("eval_every".into(), self.eval_every.to_string()),
            (
                "milestone_episodes".into(),
                self.milestone_episodes.to_string(),
            ),
            ("checkpoint_every".into(), self.checkpoint_every.to_string()),
        ];
        pairs.sort();
        let mut out = String::new();
        for (k, v) in pairs {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Stable hash of the canonical text. The seed and out_dir lines are
    /// excluded: the seed is tracked separately in provenance, and moving
    /// outputs should not change run identity.
    pub fn hash(&self) -> u64 {
        let text: String = self
            .canonical_text()
            .lines()
            .filter(|l| !l.starts_with("out_dir") && !l.starts_with("seed"))
            .collect::<Vec<_>>()
            .join("\n");
        fnv1a(text.as_bytes())
    }

    pub fn run_id(&self) -> String {
        format!("{:016x}-{}", self.hash(), self.seed)
    }
}

/// Parse a config file: `key = value` lines, `#` comments, closed schema,
/// defaults applied for absent keys.
pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_text(&text)
}

pub fn parse_config_text(text: &str) -> Result<RunConfig> {
    let mut config = RunConfig::default();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::parse(line_no, format!("expected 'key = value', got '{line}'"))
        })?;
        config.set_key(key.trim(), value.trim(), line_no)?;
    }
    config.validate()?;
    Ok(config)
}
