//! Task datasets: synthetic generators, TSV corpora, splits and batching.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::Tensor;

pub const DEFAULT_BATCH_SIZE: usize = 8;
pub const UNK: &str = "<unk>";

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
    #[error("{path}:{line}: {msg}")]
    Malformed { path: String, line: usize, msg: String },
    #[error("{0}: empty file")]
    Empty(String),
    #[error("split needs {need} samples, dataset `{task}` has {have}")]
    SplitCounts { task: String, need: usize, have: usize },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Input {
    Dense(Vec<f64>),
    Tokens(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Unique within the source dataset; survives splitting.
    pub id: usize,
    pub input: Input,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Full,
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Full => "full",
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

/// Word list with id 0 reserved for out-of-vocabulary tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Keeps words seen at least `min_count` times, in first-seen order.
    pub fn build<'a>(tokens: impl IntoIterator<Item = &'a str>, min_count: usize) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        let mut order = Vec::new();
        for t in tokens {
            let c = counts.entry(t).or_insert(0);
            if *c == 0 {
                order.push(t);
            }
            *c += 1;
        }
        let mut words = vec![UNK.to_string()];
        words.extend(order.into_iter().filter(|w| counts[w] >= min_count.max(1)).map(str::to_string));
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(0)
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }
}

#[derive(Debug, Clone)]
pub struct TaskDataset {
    pub task_id: String,
    pub samples: Vec<Sample>,
    pub num_classes: usize,
    pub split: Split,
    pub vocab: Option<Arc<Vocab>>,
}

impl TaskDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn is_text(&self) -> bool {
        matches!(self.samples.first().map(|s| &s.input), Some(Input::Tokens(_)))
    }

    fn with_samples(&self, samples: Vec<Sample>, split: Split) -> Self {
        Self { samples, split, ..self.clone() }
    }

    /// First `n` samples, keeping split and vocabulary.
    pub fn take(&self, n: usize) -> Self {
        self.with_samples(self.samples[..n.min(self.len())].to_vec(), self.split)
    }

    /// Batch over all samples in stored order.
    pub fn full_batch(&self) -> Batch {
        Batch::from_samples(self.samples.iter())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BatchInputs {
    /// `[batch, dim]` feature rows.
    Dense(Tensor),
    Tokens(Vec<Vec<usize>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: BatchInputs,
    pub labels: Vec<usize>,
}

impl Batch {
    /// Panics on an empty iterator or mixed input kinds.
    pub fn from_samples<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> Self {
        let samples: Vec<&Sample> = samples.into_iter().collect();
        assert!(!samples.is_empty(), "batch needs at least one sample");
        let labels = samples.iter().map(|s| s.label).collect();
        let inputs = match &samples[0].input {
            Input::Dense(first) => {
                let dim = first.len();
                let mut data = Vec::with_capacity(samples.len() * dim);
                for s in &samples {
                    match &s.input {
                        Input::Dense(x) if x.len() == dim => data.extend_from_slice(x),
                        _ => panic!("mixed or ragged dense inputs in one batch"),
                    }
                }
                BatchInputs::Dense(Tensor::new(&[samples.len(), dim], data).expect("dense batch shape"))
            }
            Input::Tokens(_) => BatchInputs::Tokens(
                samples
                    .iter()
                    .map(|s| match &s.input {
                        Input::Tokens(t) => t.clone(),
                        Input::Dense(_) => panic!("mixed inputs in one batch"),
                    })
                    .collect(),
            ),
        };
        Self { inputs, labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_tasks: usize,
    pub input_dim: usize,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    /// Rank of the shared labeling matrix.
    pub rank: usize,
    /// Scale of each task's private perturbation.
    pub sigma_p: f64,
    /// Fraction of labels replaced by a different class.
    pub label_noise: f64,
    #[serde(default = "default_samples")]
    pub samples_per_task: usize,
    pub seed: u64,
}

fn default_classes() -> usize {
    2
}

fn default_samples() -> usize {
    2000
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::Spec(m.to_string()));
        if self.input_dim == 0 || self.num_classes < 2 || self.samples_per_task == 0 {
            return bad("input_dim, samples_per_task must be positive and num_classes >= 2");
        }
        if self.rank == 0 || self.rank > self.input_dim {
            return bad("rank must be in [1, input_dim]");
        }
        if !(0.0..0.5).contains(&self.label_noise) {
            return bad("label_noise must be in [0, 0.5)");
        }
        if !(self.sigma_p >= 0.0 && self.sigma_p.is_finite()) {
            return bad("sigma_p must be finite and non-negative");
        }
        Ok(())
    }
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Vec<f64> {
    (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect::<Vec<f64>>()
}

/// Draws the shared labeling matrix `W_s` (`[classes, dim]`, rank `r`).
fn shared_matrix(spec: &SyntheticSpec) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (c, d, r) = (spec.num_classes, spec.input_dim, spec.rank);
    let a = normal_matrix(&mut rng, c, r, 1.0);
    let b = normal_matrix(&mut rng, r, d, 1.0);
    let norm = 1.0 / (r as f64).sqrt();
    let mut w = vec![0.0; c * d];
    for i in 0..c {
        for k in 0..r {
            for j in 0..d {
                w[i * d + j] += norm * a[i * r + k] * b[k * d + j];
            }
        }
    }
    w
}

/// Task `index` of the family described by `spec`. Tasks are independent of
/// each other given the seed, so held-out tasks can be drawn by index.
pub fn gen_synthetic_task(spec: &SyntheticSpec, index: usize) -> Result<TaskDataset, DataError> {
    spec.validate()?;
    let (c, d) = (spec.num_classes, spec.input_dim);
    let shared = shared_matrix(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(index as u64 + 1)));
    let private = normal_matrix(&mut rng, c, d, spec.sigma_p);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(rng.random());
    let w: Vec<f64> = shared.iter().zip(&private).map(|(a, b)| a + b).collect();
    let mut samples = Vec::with_capacity(spec.samples_per_task);
    for id in 0..spec.samples_per_task {
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for class in 0..c {
            let score: f64 = w[class * d..(class + 1) * d].iter().zip(&x).map(|(a, b)| a * b).sum();
            if score > best_score {
                best = class;
                best_score = score;
            }
        }
        let mut label = best;
        if noise_rng.random::<f64>() < spec.label_noise {
            let shift = noise_rng.random_range(1..c);
            label = (best + shift) % c;
        }
        samples.push(Sample { id, input: Input::Dense(x), label });
    }
    Ok(TaskDataset { task_id: format!("task{index}"), samples, num_classes: c, split: Split::Full, vocab: None })
}

/// The first `spec.num_tasks` tasks.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Vec<TaskDataset>, DataError> {
    (0..spec.num_tasks).map(|k| gen_synthetic_task(spec, k)).collect()
}

/// Labels produced before noise, for measuring the flip rate.
pub fn synthetic_clean_labels(spec: &SyntheticSpec, index: usize) -> Result<Vec<usize>, DataError> {
    let clean = SyntheticSpec { label_noise: 0.0, ..spec.clone() };
    Ok(gen_synthetic_task(&clean, index)?.samples.iter().map(|s| s.label).collect())
}

fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

fn parse_tsv(path: &Path) -> Result<Vec<(usize, Vec<String>)>, DataError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |msg: &str| DataError::Malformed { path: path.display().to_string(), line: i + 1, msg: msg.to_string() };
        let (label, body) = line.split_once('\t').ok_or_else(|| malformed("expected `label<TAB>text`"))?;
        let label = match label.trim() {
            "0" => 0,
            "1" => 1,
            other => return Err(malformed(&format!("label `{other}` is not 0 or 1"))),
        };
        rows.push((label, tokenize(body).collect()));
    }
    if rows.is_empty() {
        return Err(DataError::Empty(path.display().to_string()));
    }
    Ok(rows)
}

/// Loads several `label<TAB>text` files over one joint vocabulary.
pub fn load_tsv_corpus(files: &[(String, PathBuf)], min_count: usize) -> Result<(Arc<Vocab>, Vec<TaskDataset>), DataError> {
    let parsed: Vec<_> = files.iter().map(|(_, p)| parse_tsv(p)).collect::<Result<_, _>>()?;
    let vocab = Arc::new(Vocab::build(parsed.iter().flatten().flat_map(|(_, toks)| toks.iter().map(String::as_str)), min_count));
    let datasets = files
        .iter()
        .zip(parsed)
        .map(|((task, _), rows)| TaskDataset {
            task_id: task.clone(),
            samples: rows
                .into_iter()
                .enumerate()
                .map(|(id, (label, toks))| Sample { id, input: Input::Tokens(toks.iter().map(|t| vocab.id(t)).collect()), label })
                .collect(),
            num_classes: 2,
            split: Split::Full,
            vocab: Some(Arc::clone(&vocab)),
        })
        .collect();
    Ok((vocab, datasets))
}

pub fn load_tsv(path: &Path, min_count: usize) -> Result<TaskDataset, DataError> {
    let name = path.file_stem().map_or("task".to_string(), |s| s.to_string_lossy().into_owned());
    let (_, mut sets) = load_tsv_corpus(&[(name, path.to_path_buf())], min_count)?;
    Ok(sets.remove(0))
}

/// Dense rows written as `label,x1,...,xn`.
pub fn load_dense_csv(path: &Path, task_id: &str, num_classes: usize) -> Result<TaskDataset, DataError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut samples = Vec::new();
    let mut dim = None;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |msg: String| DataError::Malformed { path: path.display().to_string(), line: i + 1, msg };
        let mut fields = line.split(',');
        let label: usize = fields.next().and_then(|f| f.trim().parse().ok()).ok_or_else(|| malformed("bad label".into()))?;
        if label >= num_classes {
            return Err(malformed(format!("label {label} outside [0, {num_classes})")));
        }
        let x: Vec<f64> = fields.map(|f| f.trim().parse::<f64>().map_err(|e| malformed(e.to_string()))).collect::<Result<_, _>>()?;
        if x.is_empty() || *dim.get_or_insert(x.len()) != x.len() {
            return Err(malformed("inconsistent feature count".into()));
        }
        samples.push(Sample { id: samples.len(), input: Input::Dense(x), label });
    }
    if samples.is_empty() {
        return Err(DataError::Empty(path.display().to_string()));
    }
    Ok(TaskDataset { task_id: task_id.to_string(), samples, num_classes, split: Split::Full, vocab: None })
}

pub fn write_dense_csv(dataset: &TaskDataset, path: &Path) -> Result<(), DataError> {
    let mut out = String::new();
    for s in &dataset.samples {
        let Input::Dense(x) = &s.input else {
            return Err(DataError::Manifest("dense export needs dense inputs".into()));
        };
        out.push_str(&s.label.to_string());
        for v in x {
            out.push(',');
            out.push_str(&format!("{v:?}"));
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(io_err(path))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

impl SplitCounts {
    pub const DEFAULT: SplitCounts = SplitCounts { train: 1400, dev: 200, test: 400 };

    /// The default counts when the dataset is large enough, else 70/10/20.
    pub fn for_size(n: usize) -> Self {
        let d = Self::DEFAULT;
        if n >= d.train + d.dev + d.test {
            d
        } else {
            let train = n * 7 / 10;
            let dev = n / 10;
            SplitCounts { train, dev, test: n - train - dev }
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.dev + self.test
    }
}

/// Seeded shuffle, then consecutive train/dev/test partitions.
pub fn split(dataset: &TaskDataset, counts: Option<SplitCounts>, seed: u64) -> Result<(TaskDataset, TaskDataset, TaskDataset), DataError> {
    let counts = counts.unwrap_or_else(|| SplitCounts::for_size(dataset.len()));
    if counts.total() > dataset.len() {
        return Err(DataError::SplitCounts { task: dataset.task_id.clone(), need: counts.total(), have: dataset.len() });
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let pick = |range: std::ops::Range<usize>| order[range].iter().map(|&i| dataset.samples[i].clone()).collect();
    let (a, b) = (counts.train, counts.train + counts.dev);
    Ok((
        dataset.with_samples(pick(0..a), Split::Train),
        dataset.with_samples(pick(a..b), Split::Dev),
        dataset.with_samples(pick(b..b + counts.test), Split::Test),
    ))
}

/// One epoch of shuffled batches; the shuffle depends only on `(seed, epoch)`.
/// The final partial batch is kept.
pub fn batch_iter(dataset: &TaskDataset, batch_size: usize, seed: u64, epoch: usize) -> impl Iterator<Item = Batch> + '_ {
    assert!(batch_size > 0, "batch size must be positive");
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add((epoch as u64).wrapping_mul(0xD1B5_4A32_D192_ED03)));
    order.shuffle(&mut rng);
    let chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    chunks.into_iter().map(move |idx| Batch::from_samples(idx.iter().map(|&i| &dataset.samples[i])))
}

/// `size` distinct samples drawn uniformly (all of them if the set is smaller).
pub fn sample_batch(dataset: &TaskDataset, size: usize, rng: &mut impl Rng) -> Batch {
    let picked = rand::seq::index::sample(rng, dataset.len(), size.min(dataset.len()));
    Batch::from_samples(picked.iter().map(|i| &dataset.samples[i]))
}

/// Split of the union of several vocabularies into the words every task has
/// and the rest.
#[derive(Debug, Clone, PartialEq)]
pub struct VocabPartition {
    pub per_task: Vec<BTreeSet<usize>>,
    pub intersection: BTreeSet<usize>,
    pub complement: BTreeSet<usize>,
}

impl VocabPartition {
    pub fn new(per_task: Vec<BTreeSet<usize>>) -> Self {
        let union: BTreeSet<usize> = per_task.iter().flatten().copied().collect();
        let intersection: BTreeSet<usize> = match per_task.split_first() {
            Some((first, rest)) => first.iter().filter(|w| rest.iter().all(|s| s.contains(w))).copied().collect(),
            None => BTreeSet::new(),
        };
        let complement = union.difference(&intersection).copied().collect();
        Self { per_task, intersection, complement }
    }

    /// Token ids appearing in each dataset.
    pub fn from_datasets(datasets: &[&TaskDataset]) -> Self {
        Self::new(
            datasets
                .iter()
                .map(|d| {
                    d.samples
                        .iter()
                        .filter_map(|s| match &s.input {
                            Input::Tokens(t) => Some(t.iter().copied()),
                            Input::Dense(_) => None,
                        })
                        .flatten()
                        .collect()
                })
                .collect(),
        )
    }

    pub fn union(&self) -> BTreeSet<usize> {
        self.intersection.union(&self.complement).copied().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Tsv,
    Dense,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestTask {
    pub id: String,
    pub path: PathBuf,
    pub format: DataFormat,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    #[serde(default)]
    pub counts: Option<SplitCounts>,
}

/// JSON listing of task files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub tasks: Vec<ManifestTask>,
    #[serde(default = "default_min_count")]
    pub min_count: usize,
}

fn default_min_count() -> usize {
    1
}

impl DatasetManifest {
    pub fn read(path: &Path) -> Result<Self, DataError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| DataError::Manifest(e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<(), DataError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| DataError::Manifest(e.to_string()))?;
        fs::write(path, text + "\n").map_err(io_err(path))
    }

    /// Loads every task; relative paths resolve against `base`. Text tasks
    /// share one vocabulary.
    pub fn load(&self, base: &Path) -> Result<Vec<TaskDataset>, DataError> {
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        let text: Vec<(String, PathBuf)> =
            self.tasks.iter().filter(|t| t.format == DataFormat::Tsv).map(|t| (t.id.clone(), resolve(&t.path))).collect();
        let mut text_sets = if text.is_empty() { Vec::new() } else { load_tsv_corpus(&text, self.min_count)?.1 }.into_iter();
        self.tasks
            .iter()
            .map(|t| match t.format {
                DataFormat::Tsv => Ok(text_sets.next().expect("one dataset per text task")),
                DataFormat::Dense => load_dense_csv(&resolve(&t.path), &t.id, t.num_classes),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;
    use std::io::Write as _;

    use super::*;

    fn spec() -> SyntheticSpec {
        SyntheticSpec {
            num_tasks: 3,
            input_dim: 10,
            num_classes: 2,
            rank: 3,
            sigma_p: 0.3,
            label_noise: 0.1,
            samples_per_task: 200,
            seed: 7,
        }
    }

    #[test]
    fn spec_validation() {
        assert!(SyntheticSpec { label_noise: 0.5, ..spec() }.validate().is_err());
        assert!(SyntheticSpec { rank: 11, ..spec() }.validate().is_err());
        assert!(SyntheticSpec { num_classes: 1, ..spec() }.validate().is_err());
        assert!(spec().validate().is_ok());
    }

    #[test]
    fn generator_is_deterministic_and_index_stable() {
        let a = gen_synthetic(&spec()).unwrap();
        let b = gen_synthetic(&spec()).unwrap();
        assert_eq!(a.iter().map(|d| &d.samples).collect::<Vec<_>>(), b.iter().map(|d| &d.samples).collect::<Vec<_>>());
        let more = gen_synthetic(&SyntheticSpec { num_tasks: 5, ..spec() }).unwrap();
        assert_eq!(a[2].samples, more[2].samples);
        assert_ne!(a[0].samples, a[1].samples);
        for d in &a {
            assert!(d.samples.iter().all(|s| s.label < 2));
        }
    }

    #[test]
    fn zero_perturbation_shares_one_labeling_function() {
        let s = SyntheticSpec { sigma_p: 0.0, label_noise: 0.0, ..spec() };
        let sets = gen_synthetic(&s).unwrap();
        let shared = shared_matrix(&s);
        for d in &sets {
            for smp in &d.samples {
                let Input::Dense(x) = &smp.input else { unreachable!() };
                let score = |c: usize| shared[c * 10..(c + 1) * 10].iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
                let expected = usize::from(score(1) > score(0));
                assert_eq!(smp.label, expected);
            }
        }
    }

    #[test]
    fn label_flip_rate_matches_noise() {
        for eta in [0.05, 0.2] {
            let s = SyntheticSpec { label_noise: eta, samples_per_task: 10_000, num_classes: 3, ..spec() };
            let noisy = gen_synthetic_task(&s, 0).unwrap();
            let clean = synthetic_clean_labels(&s, 0).unwrap();
            let flips = noisy.samples.iter().zip(&clean).filter(|(a, b)| a.label != **b).count();
            let rate = flips as f64 / 10_000.0;
            assert!((rate - eta).abs() < 0.02, "eta {eta}: measured {rate}");
        }
    }

    #[test]
    fn split_counts_and_disjointness() {
        let big = gen_synthetic_task(&SyntheticSpec { samples_per_task: 2000, ..spec() }, 0).unwrap();
        let (tr, dv, te) = split(&big, None, 1).unwrap();
        assert_eq!((tr.len(), dv.len(), te.len()), (1400, 200, 400));
        let ids = |d: &TaskDataset| d.samples.iter().map(|s| s.id).collect::<HashSet<_>>();
        assert!(ids(&tr).is_disjoint(&ids(&dv)));
        assert!(ids(&tr).is_disjoint(&ids(&te)));
        assert!(ids(&dv).is_disjoint(&ids(&te)));
        assert_eq!((tr.split, dv.split, te.split), (Split::Train, Split::Dev, Split::Test));

        let small = gen_synthetic_task(&SyntheticSpec { samples_per_task: 100, ..spec() }, 0).unwrap();
        let (tr, dv, te) = split(&small, None, 1).unwrap();
        assert_eq!((tr.len(), dv.len(), te.len()), (70, 10, 20));

        let too_many = SplitCounts { train: 90, dev: 10, test: 10 };
        assert!(matches!(split(&small, Some(too_many), 1), Err(DataError::SplitCounts { .. })));
    }

    #[test]
    fn batches_cover_epoch_and_keep_partial() {
        let d = gen_synthetic_task(&SyntheticSpec { samples_per_task: 21, ..spec() }, 0).unwrap();
        let batches: Vec<_> = batch_iter(&d, DEFAULT_BATCH_SIZE, 3, 0).collect();
        assert_eq!(batches.iter().map(Batch::len).collect::<Vec<_>>(), vec![8, 8, 5]);
        let again: Vec<_> = batch_iter(&d, DEFAULT_BATCH_SIZE, 3, 0).collect();
        assert_eq!(batches, again);
        let next: Vec<_> = batch_iter(&d, DEFAULT_BATCH_SIZE, 3, 1).collect();
        assert_ne!(batches, next);
    }

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        fs::File::create(&p).unwrap().write_all(body.as_bytes()).unwrap();
        p
    }

    #[test]
    fn tsv_loading() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "books.tsv", "1\tGreat Book great\n0\tdull read\n1\trare\n");
        let d = load_tsv(&p, 2).unwrap();
        assert_eq!(d.task_id, "books");
        let vocab = d.vocab.as_ref().unwrap();
        assert_eq!(vocab.len(), 2); // <unk>, great
        assert_eq!(d.samples[0].input, Input::Tokens(vec![1, 0, 1]));
        assert_eq!(d.samples.iter().map(|s| s.label).collect::<Vec<_>>(), vec![1, 0, 1]);

        let bad = write(dir.path(), "bad.tsv", "1\tok\nno tab here\n");
        match load_tsv(&bad, 1) {
            Err(DataError::Malformed { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        let bad_label = write(dir.path(), "lab.tsv", "2\tok\n");
        assert!(matches!(load_tsv(&bad_label, 1), Err(DataError::Malformed { line: 1, .. })));
        let empty = write(dir.path(), "empty.tsv", "");
        assert!(matches!(load_tsv(&empty, 1), Err(DataError::Empty(_))));
    }

    #[test]
    fn manifest_loads_shared_vocab_and_dense() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "a.tsv", "1\tgood stuff\n");
        write(dir.path(), "b.tsv", "0\tbad stuff\n");
        let d = gen_synthetic_task(&SyntheticSpec { samples_per_task: 5, ..spec() }, 0).unwrap();
        write_dense_csv(&d, &dir.path().join("c.csv")).unwrap();
        let manifest: DatasetManifest = serde_json::from_str(
            r#"{"tasks":[{"id":"a","path":"a.tsv","format":"tsv"},{"id":"b","path":"b.tsv","format":"tsv"},
                {"id":"c","path":"c.csv","format":"dense"}]}"#,
        )
        .unwrap();
        let sets = manifest.load(dir.path()).unwrap();
        assert_eq!(sets[0].samples[0].input, Input::Tokens(vec![1, 2]));
        assert_eq!(sets[1].samples[0].input, Input::Tokens(vec![3, 2]));
        assert_eq!(sets[2].samples, d.samples);
        assert!(serde_json::from_str::<DatasetManifest>(r#"{"tasks":[],"bogus":1}"#).is_err());
    }

    #[test]
    fn vocab_partition_is_exact() {
        let p = VocabPartition::new(vec![[1, 2, 3].into(), [2, 3, 4].into(), [3, 2, 9].into()]);
        assert_eq!(p.intersection, [2, 3].into());
        assert_eq!(p.complement, [1, 4, 9].into());
        assert!(p.intersection.is_disjoint(&p.complement));
        assert_eq!(p.union(), [1, 2, 3, 4, 9].into());
    }
}
