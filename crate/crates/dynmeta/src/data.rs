//! Datasets and samplers: synthetic blob generation, PGM directory loading,
//! class-disjoint splits, symmetric label noise, and episode / unlabeled
//! batch sampling. Every sampler is a pure function of (dataset, parameters,
//! seed).

use crate::error::{Error, Result};
use crate::rng::stream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::fs;
use std::path::Path;

/// Labeled samples with a per-class index.
#[derive(Debug, Clone)]
pub struct LabeledDataset<E> {
    samples: Tensor<E>,
    labels: Vec<usize>,
    class_count: usize,
    class_index: Vec<Vec<usize>>,
}

impl<E: Scalar> LabeledDataset<E> {
    pub fn new(samples: Tensor<E>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        let n = samples.dims()[0];
        if labels.len() != n {
            return Err(Error::Shape(format!(
                "{} labels for {} samples",
                labels.len(),
                n
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Index(format!(
                "label {bad} out of range 0..{class_count}"
            )));
        }
        let mut class_index = vec![Vec::new(); class_count];
        for (i, &l) in labels.iter().enumerate() {
            class_index[l].push(i);
        }
        Ok(LabeledDataset {
            samples,
            labels,
            class_count,
            class_index,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_index(&self) -> &[Vec<usize>] {
        &self.class_index
    }

    /// Shape of one sample (without the leading batch extent).
    pub fn feature_dims(&self) -> &[usize] {
        &self.samples.dims()[1..]
    }

    pub fn samples(&self) -> &Tensor<E> {
        &self.samples
    }

    fn row_len(&self) -> usize {
        self.samples.numel() / self.len()
    }

    /// Stack the given sample rows into a batch tensor.
    pub fn gather(&self, indices: &[usize]) -> Result<Tensor<E>> {
        if indices.is_empty() {
            return Err(Error::Argument("cannot gather an empty batch".into()));
        }
        let rl = self.row_len();
        let mut data = Vec::with_capacity(indices.len() * rl);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Index(format!("sample index {i} out of range")));
            }
            data.extend_from_slice(&self.samples.data()[i * rl..(i + 1) * rl]);
        }
        let mut dims = vec![indices.len()];
        dims.extend_from_slice(self.feature_dims());
        Tensor::from_vec(&dims, data)
    }

    pub fn cast<T: Scalar>(&self) -> LabeledDataset<T> {
        LabeledDataset {
            samples: self.samples.cast(),
            labels: self.labels.clone(),
            class_count: self.class_count,
            class_index: self.class_index.clone(),
        }
    }

    /// Fingerprint of the sample payload plus labels, for provenance checks.
    pub fn fingerprint(&self) -> u64 {
        let mut bytes = Vec::with_capacity(self.samples.numel() * E::BYTE_WIDTH);
        for v in self.samples.data() {
            bytes.extend_from_slice(&v.to_le_bytes_vec());
        }
        for &l in &self.labels {
            bytes.extend_from_slice(&(l as u64).to_le_bytes());
        }
        crate::rng::fnv1a(&bytes)
    }
}

/// One few-shot task: `way` classes, `shot` support and `query_count` query
/// samples per class, with episode-local labels in 0..way.
#[derive(Debug, Clone)]
pub struct Episode<E> {
    pub way: usize,
    pub shot: usize,
    pub query_count: usize,
    pub support_inputs: Tensor<E>,
    pub support_labels: Vec<usize>,
    pub query_inputs: Tensor<E>,
    pub query_labels: Vec<usize>,
    pub support_indices: Vec<usize>,
    pub query_indices: Vec<usize>,
}

/// An unlabeled batch standing in for one task.
#[derive(Debug, Clone)]
pub struct TaskBatch<E> {
    pub inputs: Tensor<E>,
    pub source_indices: Vec<usize>,
}

/// Gaussian blob classes with centers drawn uniformly in a hypercube of side
/// `inter_spread`, used as the desk-scale stand-in for image datasets.
pub fn gen_blobs<E: Scalar>(
    num_classes: usize,
    dim: usize,
    samples_per_class: usize,
    intra_spread: f64,
    inter_spread: f64,
    seed: u64,
) -> Result<LabeledDataset<E>> {
    if num_classes == 0 || dim == 0 || samples_per_class == 0 {
        return Err(Error::Argument("counts must be positive".into()));
    }
    if !(intra_spread > 0.0) || !(inter_spread > 0.0) {
        return Err(Error::Argument("spreads must be > 0".into()));
    }
    let mut rng = stream(seed, &[0x6c0b]);
    let mut centers = Vec::with_capacity(num_classes * dim);
    for _ in 0..num_classes * dim {
        centers.push((rng.random::<f64>() - 0.5) * inter_spread);
    }
    let n = num_classes * samples_per_class;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for c in 0..num_classes {
        for _ in 0..samples_per_class {
            for k in 0..dim {
                let g: f64 = rng.sample(StandardNormal);
                data.push(E::from_f64(centers[c * dim + k] + intra_spread * g));
            }
            labels.push(c);
        }
    }
    LabeledDataset::new(Tensor::from_vec(&[n, dim], data)?, labels, num_classes)
}

// ── PGM directory loading ────────────────────────────────────────────────

fn parse_pgm(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let mut pos = 0usize;
    let next_token = |pos: &mut usize| -> Result<Vec<u8>> {
        // skip whitespace and '#' comments
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
            } else {
                break;
            }
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(Error::Format(format!("truncated header in {}", path.display())));
        }
        Ok(bytes[start..*pos].to_vec())
    };

    let magic = next_token(&mut pos)?;
    if magic != b"P5" {
        return Err(Error::Format(format!("{} is not a P5 PGM", path.display())));
    }
    let width: usize = String::from_utf8_lossy(&next_token(&mut pos)?)
        .parse()
        .map_err(|_| Error::Format(format!("bad width in {}", path.display())))?;
    let height: usize = String::from_utf8_lossy(&next_token(&mut pos)?)
        .parse()
        .map_err(|_| Error::Format(format!("bad height in {}", path.display())))?;
    let maxval: usize = String::from_utf8_lossy(&next_token(&mut pos)?)
        .parse()
        .map_err(|_| Error::Format(format!("bad maxval in {}", path.display())))?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!(
            "{}: only 8-bit PGM supported (maxval {maxval})",
            path.display()
        )));
    }
    pos += 1; // single whitespace after maxval
    let need = width * height;
    if bytes.len() < pos + need {
        return Err(Error::Format(format!(
            "{}: payload truncated ({} of {} bytes)",
            path.display(),
            bytes.len().saturating_sub(pos),
            need
        )));
    }
    Ok((width, height, bytes[pos..pos + need].to_vec()))
}

/// Load a `root/<class_name>/<file>.pgm` tree. Class ids follow the
/// lexicographic order of the subdirectory names; pixels are scaled to
/// [0, 1]; every image must share one size.
pub fn load_image_dataset<E: Scalar>(root: &Path) -> Result<LabeledDataset<E>> {
    let mut class_dirs: Vec<_> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.path())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(Error::Format(format!(
            "no class subdirectories under {}",
            root.display()
        )));
    }

    let mut shape: Option<(usize, usize)> = None;
    let mut data: Vec<E> = Vec::new();
    let mut labels = Vec::new();
    for (class_id, dir) in class_dirs.iter().enumerate() {
        let mut files: Vec<_> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Format(format!(
                "class directory {} holds no images",
                dir.display()
            )));
        }
        for file in files {
            let bytes = fs::read(&file).map_err(|e| Error::io(&file, e))?;
            let (w, h, pixels) = parse_pgm(&bytes, &file)?;
            match shape {
                None => shape = Some((h, w)),
                Some(s) if s != (h, w) => {
                    return Err(Error::Format(format!(
                        "{} is {}x{}, expected {}x{}",
                        file.display(),
                        h,
                        w,
                        s.0,
                        s.1
                    )))
                }
                _ => {}
            }
            data.extend(pixels.iter().map(|&p| E::from_f64(p as f64 / 255.0)));
            labels.push(class_id);
        }
    }
    let (h, w) = shape.unwrap();
    let n = labels.len();
    LabeledDataset::new(
        Tensor::from_vec(&[n, 1, h, w], data)?,
        labels,
        class_dirs.len(),
    )
}

/// Load a tensor-backed dataset: `data.tsr` plus `labels.csv` with header
/// `index,label`.
pub fn load_tensor_dataset<E: Scalar>(data_path: &Path, labels_path: &Path) -> Result<LabeledDataset<E>> {
    let samples = Tensor::<E>::read_tsr(data_path)?;
    let text = fs::read_to_string(labels_path).map_err(|e| Error::io(labels_path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == "index,label" => {}
        _ => return Err(Error::Format("labels.csv must start with 'index,label'".into())),
    }
    let n = samples.dims()[0];
    let mut labels = vec![usize::MAX; n];
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (idx_s, label_s) = line
            .split_once(',')
            .ok_or_else(|| Error::parse(lineno + 2, "expected 'index,label'"))?;
        let idx: usize = idx_s
            .trim()
            .parse()
            .map_err(|_| Error::parse(lineno + 2, "bad index"))?;
        let label: usize = label_s
            .trim()
            .parse()
            .map_err(|_| Error::parse(lineno + 2, "bad label"))?;
        if idx >= n {
            return Err(Error::parse(lineno + 2, format!("index {idx} out of range")));
        }
        labels[idx] = label;
    }
    if labels.iter().any(|&l| l == usize::MAX) {
        return Err(Error::Format("labels.csv does not cover every sample".into()));
    }
    let class_count = labels.iter().max().copied().unwrap_or(0) + 1;
    LabeledDataset::new(samples, labels, class_count)
}

// ── splits and noise ─────────────────────────────────────────────────────

/// Partition *classes* (not samples) into train/val/test by a seeded shuffle,
/// apportioning counts by largest remainder. Each split's classes are
/// relabeled to a contiguous range in ascending original-id order.
pub fn split_by_class<E: Scalar>(
    ds: &LabeledDataset<E>,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(LabeledDataset<E>, LabeledDataset<E>, LabeledDataset<E>)> {
    let (f1, f2, f3) = fractions;
    if f1 < 0.0 || f2 < 0.0 || f3 < 0.0 || (f1 + f2 + f3 - 1.0).abs() > 1e-9 {
        return Err(Error::Argument(format!(
            "fractions must be nonnegative and sum to 1, got ({f1}, {f2}, {f3})"
        )));
    }
    let c = ds.class_count();
    let fr = [f1, f2, f3];
    let mut counts: Vec<usize> = fr.iter().map(|f| (f * c as f64).floor() as usize).collect();
    let mut rem: usize = c - counts.iter().sum::<usize>();
    let mut frac_parts: Vec<(usize, f64)> = fr
        .iter()
        .enumerate()
        .map(|(i, f)| (i, f * c as f64 - counts[i] as f64))
        .collect();
    frac_parts.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for (i, _) in frac_parts {
        if rem == 0 {
            break;
        }
        counts[i] += 1;
        rem -= 1;
    }
    if counts.iter().any(|&x| x == 0) {
        return Err(Error::Argument(format!(
            "not enough classes ({c}) for a nonempty three-way split {counts:?}"
        )));
    }

    let mut classes: Vec<usize> = (0..c).collect();
    use rand::seq::SliceRandom;
    classes.shuffle(&mut stream(seed, &[0x59117]));
    let take = |from: usize, upto: usize| -> Vec<usize> {
        let mut v = classes[from..upto].to_vec();
        v.sort();
        v
    };
    let a = take(0, counts[0]);
    let b = take(counts[0], counts[0] + counts[1]);
    let d = take(counts[0] + counts[1], c);

    let build = |class_list: &[usize]| -> Result<LabeledDataset<E>> {
        let mut indices = Vec::new();
        let mut labels = Vec::new();
        for (new_label, &orig) in class_list.iter().enumerate() {
            for &i in &ds.class_index()[orig] {
                indices.push(i);
                labels.push(new_label);
            }
        }
        // restore ascending sample order for determinism of downstream code
        let mut order: Vec<usize> = (0..indices.len()).collect();
        order.sort_by_key(|&k| indices[k]);
        let sorted_idx: Vec<usize> = order.iter().map(|&k| indices[k]).collect();
        let sorted_labels: Vec<usize> = order.iter().map(|&k| labels[k]).collect();
        let samples = ds.gather(&sorted_idx)?;
        LabeledDataset::new(samples, sorted_labels, class_list.len())
    };
    Ok((build(&a)?, build(&b)?, build(&d)?))
}

/// Replace the labels of round(ratio * n) seeded-chosen samples with a
/// uniformly chosen *different* class (symmetric label noise).
pub fn inject_label_noise<E: Scalar>(
    ds: &LabeledDataset<E>,
    ratio: f64,
    seed: u64,
) -> Result<LabeledDataset<E>> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Argument(format!("ratio must be in [0,1], got {ratio}")));
    }
    if ratio > 0.0 && ds.class_count() < 2 {
        return Err(Error::Argument(
            "label noise needs at least two classes".into(),
        ));
    }
    let n = ds.len();
    let count = (ratio * n as f64).round() as usize;
    let mut labels = ds.labels().to_vec();
    if count > 0 {
        let mut rng = stream(seed, &[0x401f3]);
        let chosen = sample(&mut rng, n, count);
        for i in chosen {
            let old = labels[i];
            let draw = rng.random_range(0..ds.class_count() - 1);
            labels[i] = if draw >= old { draw + 1 } else { draw };
        }
    }
    LabeledDataset::new(ds.samples().clone(), labels, ds.class_count())
}

// ── episode and batch sampling ───────────────────────────────────────────

fn sample_episode_with<E: Scalar>(
    ds: &LabeledDataset<E>,
    way: usize,
    shot: usize,
    query_count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Episode<E>> {
    if way < 1 || shot < 1 || query_count < 1 {
        return Err(Error::Argument("way, shot, query must be >= 1".into()));
    }
    let need = shot + query_count;
    let eligible: Vec<usize> = (0..ds.class_count())
        .filter(|&c| ds.class_index()[c].len() >= need)
        .collect();
    if eligible.len() < way {
        return Err(Error::Argument(format!(
            "{} classes have >= {} samples, but way={} requested",
            eligible.len(),
            need,
            way
        )));
    }
    let class_pick = sample(rng, eligible.len(), way);
    let mut support_indices = Vec::with_capacity(way * shot);
    let mut query_indices = Vec::with_capacity(way * query_count);
    let mut support_labels = Vec::with_capacity(way * shot);
    let mut query_labels = Vec::with_capacity(way * query_count);
    for (local, ei) in class_pick.into_iter().enumerate() {
        let class = eligible[ei];
        let pool = &ds.class_index()[class];
        let picks = sample(rng, pool.len(), need);
        for (j, p) in picks.into_iter().enumerate() {
            if j < shot {
                support_indices.push(pool[p]);
                support_labels.push(local);
            } else {
                query_indices.push(pool[p]);
                query_labels.push(local);
            }
        }
    }
    Ok(Episode {
        way,
        shot,
        query_count,
        support_inputs: ds.gather(&support_indices)?,
        query_inputs: ds.gather(&query_indices)?,
        support_labels,
        query_labels,
        support_indices,
        query_indices,
    })
}

/// Sample a `way`-way `shot`-shot episode with `query_count` query samples
/// per class.
pub fn sample_episode<E: Scalar>(
    ds: &LabeledDataset<E>,
    way: usize,
    shot: usize,
    query_count: usize,
    seed: u64,
) -> Result<Episode<E>> {
    sample_episode_with(ds, way, shot, query_count, &mut stream(seed, &[0xe915]))
}

/// Draw the way uniformly from [way_min, way_max], then sample as
/// [`sample_episode`]. A degenerate range reproduces `sample_episode` exactly.
pub fn sample_heterogeneous_episode<E: Scalar>(
    ds: &LabeledDataset<E>,
    way_min: usize,
    way_max: usize,
    shot: usize,
    query_count: usize,
    seed: u64,
) -> Result<Episode<E>> {
    if way_min > way_max || way_max > ds.class_count() {
        return Err(Error::Argument(format!(
            "invalid way range [{way_min}, {way_max}] for {} classes",
            ds.class_count()
        )));
    }
    let way = stream(seed, &[0x3a9]).random_range(way_min..=way_max);
    sample_episode_with(ds, way, shot, query_count, &mut stream(seed, &[0xe915]))
}

/// Seeded sample of `size` rows without replacement, labels discarded.
pub fn sample_unlabeled_batch<E: Scalar>(
    ds: &LabeledDataset<E>,
    size: usize,
    seed: u64,
) -> Result<TaskBatch<E>> {
    if size == 0 || size > ds.len() {
        return Err(Error::Argument(format!(
            "batch size {size} not in 1..={}",
            ds.len()
        )));
    }
    let mut rng = stream(seed, &[0xba7c4]);
    let source_indices: Vec<usize> = sample(&mut rng, ds.len(), size).into_iter().collect();
    Ok(TaskBatch {
        inputs: ds.gather(&source_indices)?,
        source_indices,
    })
}
