use std::collections::BTreeMap;

use serde::Serialize;

use crate::datakit::{Batch, BatchInputs, Input, TaskDataset, VocabPartition};
use crate::readops::{EncoderKind, Model};
use crate::registry::Registry;

use super::HarnessError;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WordStat {
    pub id: usize,
    pub word: String,
    /// Times some shared neuron peaked on this word within a sequence.
    pub n_max: usize,
    /// Occurrences across the evaluated sequences.
    pub count: usize,
    pub q: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NeuronReport {
    /// Shared feature width.
    pub d: usize,
    pub sequences: usize,
    /// Every occurring word, by id.
    pub words: Vec<WordStat>,
    pub top_intersection: Vec<WordStat>,
    pub top_complement: Vec<WordStat>,
}

impl NeuronReport {
    pub fn total_n_max(&self) -> usize {
        self.words.iter().map(|w| w.n_max).sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// `partition,rank,word,n_max,count,q` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("partition,rank,word,n_max,count,q\n");
        for (name, list) in [("intersection", &self.top_intersection), ("complement", &self.top_complement)] {
            for (rank, w) in list.iter().enumerate() {
                out.push_str(&format!("{name},{},{},{},{},{:.6}\n", rank + 1, csv_field(&w.word), w.n_max, w.count, w.q));
            }
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Shared-encoder activations of each word on its own, `[word][neuron]`.
fn word_activations(model: &Model, registry: &Registry, task: &str, words: &[usize]) -> Result<BTreeMap<usize, Vec<f64>>, HarnessError> {
    let mut out = BTreeMap::new();
    for chunk in words.chunks(256) {
        let batch = Batch { inputs: BatchInputs::Tokens(chunk.iter().map(|&w| vec![w]).collect()), labels: vec![0; chunk.len()] };
        let feats = model.shared_features(registry, task, &batch)?;
        for (i, &w) in chunk.iter().enumerate() {
            out.insert(w, feats.row(i).to_vec());
        }
    }
    Ok(out)
}

/// Per sequence and shared neuron, the position with the largest
/// single-word activation (lowest position on ties) credits its word.
/// `q = N_max / (n_w · d)`; empty sequences are skipped. The top `top_k`
/// words by `q` are reported for the words every test set contains and for
/// the rest.
pub fn neuron_feature_stat(
    model: &Model,
    registry: &Registry,
    test_sets: &[&TaskDataset],
    top_k: usize,
) -> Result<NeuronReport, HarnessError> {
    if model.spec.shared.kind != EncoderKind::BagOfWordsEmbeddingMean {
        return Err(HarnessError::Config("model: neuron analysis needs a text model".into()));
    }
    let task = model.task_ids().into_iter().next().ok_or_else(|| HarnessError::Runtime("model has no tasks".into()))?;
    let mut seqs: Vec<&[usize]> = Vec::new();
    for set in test_sets {
        for s in &set.samples {
            match &s.input {
                Input::Tokens(t) if t.is_empty() => {}
                Input::Tokens(t) => seqs.push(t),
                Input::Dense(_) => return Err(HarnessError::Config("data: neuron analysis needs text inputs".into())),
            }
        }
    }
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for s in &seqs {
        for &w in *s {
            *counts.entry(w).or_default() += 1;
        }
    }
    let words: Vec<usize> = counts.keys().copied().collect();
    let acts = word_activations(model, registry, &task, &words)?;
    let d = model.spec.shared.out_dim();
    let mut n_max: BTreeMap<usize, usize> = BTreeMap::new();
    for s in &seqs {
        for j in 0..d {
            let mut best = s[0];
            for &w in &s[1..] {
                if acts[&w][j] > acts[&best][j] {
                    best = w;
                }
            }
            *n_max.entry(best).or_default() += 1;
        }
    }
    let vocab = test_sets.iter().find_map(|t| t.vocab.clone());
    let stat = |id: usize| {
        let n = n_max.get(&id).copied().unwrap_or(0);
        let c = counts[&id];
        WordStat {
            id,
            word: vocab.as_ref().map_or_else(|| id.to_string(), |v| v.word(id).to_string()),
            n_max: n,
            count: c,
            q: n as f64 / (c * d) as f64,
        }
    };
    let all: Vec<WordStat> = words.iter().map(|&w| stat(w)).collect();
    let partition = VocabPartition::from_datasets(test_sets);
    let top = |set: &std::collections::BTreeSet<usize>| {
        let mut v: Vec<WordStat> = all.iter().filter(|w| set.contains(&w.id)).cloned().collect();
        v.sort_by(|a, b| b.q.total_cmp(&a.q).then(a.id.cmp(&b.id)));
        v.truncate(top_k);
        v
    };
    Ok(NeuronReport {
        d,
        sequences: seqs.len(),
        top_intersection: top(&partition.intersection),
        top_complement: top(&partition.complement),
        words: all,
    })
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::datakit::{Sample, Split};
    use crate::readops::{Activation, EncoderSpec, ModelSpec, ReadOpKind, TaskHeadSpec};

    fn text_model(vocab: usize, d: usize) -> (Model, Registry) {
        let mut reg = Registry::new();
        let spec =
            ModelSpec { read_op: ReadOpKind::Flat, shared: EncoderSpec::bag_of_words(vocab, 6, &[d], Activation::Tanh), private: None };
        let model = Model::build(&mut reg, spec, &[TaskHeadSpec { id: "a".into(), num_classes: 2 }], 5).unwrap();
        reg.freeze();
        (model, reg)
    }

    fn corpus(task: &str, seqs: Vec<Vec<usize>>) -> TaskDataset {
        TaskDataset {
            task_id: task.into(),
            samples: seqs.into_iter().enumerate().map(|(i, t)| Sample { id: i, input: Input::Tokens(t), label: 0 }).collect(),
            num_classes: 2,
            split: Split::Test,
            vocab: None,
        }
    }

    fn random_corpus(n: usize, vocab: usize, seed: u64) -> Vec<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..rng.random_range(1..9)).map(|_| rng.random_range(1..vocab)).collect()).collect()
    }

    #[test]
    fn single_word_sequences_force_the_maximum() {
        let (model, reg) = text_model(10, 4);
        let data = corpus("a", (1..10).map(|w| vec![w]).collect());
        let r = neuron_feature_stat(&model, &reg, &[&data], 10).unwrap();
        assert_eq!(r.total_n_max(), 4 * 9);
        assert!(r.words.iter().all(|w| w.n_max == 4 && w.q == 1.0));
    }

    #[test]
    fn one_neuron_two_sequences_two_increments() {
        let (model, reg) = text_model(10, 1);
        let data = corpus("a", vec![vec![1, 2, 3], vec![4, 5, 4, 6]]);
        let r = neuron_feature_stat(&model, &reg, &[&data], 10).unwrap();
        assert_eq!(r.total_n_max(), 2);
        assert_eq!(r.sequences, 2);
        assert_eq!(r.words.iter().find(|w| w.id == 4).unwrap().count, 2);
    }

    #[test]
    fn conservation_on_fifty_sentences() {
        let (model, reg) = text_model(30, 5);
        let data = corpus("a", random_corpus(50, 30, 1));
        let r = neuron_feature_stat(&model, &reg, &[&data], 10).unwrap();
        assert_eq!(r.total_n_max(), 5 * 50);
    }

    #[test]
    fn empty_sequences_are_skipped() {
        let (model, reg) = text_model(10, 3);
        let data = corpus("a", vec![vec![], vec![1, 2]]);
        let r = neuron_feature_stat(&model, &reg, &[&data], 10).unwrap();
        assert_eq!((r.sequences, r.total_n_max()), (1, 3));
    }

    #[test]
    fn repeated_word_ties_credit_once() {
        let (model, reg) = text_model(10, 2);
        let data = corpus("a", vec![vec![3, 3, 3]]);
        let r = neuron_feature_stat(&model, &reg, &[&data], 10).unwrap();
        let w = &r.words[0];
        assert_eq!((w.n_max, w.count), (2, 3));
        assert!((w.q - 2.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn brute_force_recount_matches() {
        let (model, reg) = text_model(25, 4);
        let seqs = random_corpus(20, 25, 2);
        let data = corpus("a", seqs.clone());
        let r = neuron_feature_stat(&model, &reg, &[&data], 25).unwrap();
        let mut oracle: BTreeMap<usize, usize> = BTreeMap::new();
        for s in &seqs {
            let batch = Batch { inputs: BatchInputs::Tokens(s.iter().map(|&w| vec![w]).collect()), labels: vec![0; s.len()] };
            let f = model.shared_features(&reg, "a", &batch).unwrap();
            for j in 0..4 {
                let mut arg = 0;
                for p in 1..s.len() {
                    if f.get(p, j) > f.get(arg, j) {
                        arg = p;
                    }
                }
                *oracle.entry(s[arg]).or_default() += 1;
            }
        }
        for w in &r.words {
            assert_eq!(w.n_max, oracle.get(&w.id).copied().unwrap_or(0), "word {}", w.id);
        }
    }

    #[test]
    fn partitions_split_top_lists() {
        let (model, reg) = text_model(10, 2);
        let a = corpus("a", vec![vec![1, 2], vec![3]]);
        let b = corpus("b", vec![vec![1, 4]]);
        let r = neuron_feature_stat(&model, &reg, &[&a, &b], 10).unwrap();
        assert_eq!(r.top_intersection.iter().map(|w| w.id).collect::<Vec<_>>(), vec![1]);
        let mut comp: Vec<usize> = r.top_complement.iter().map(|w| w.id).collect();
        comp.sort();
        assert_eq!(comp, vec![2, 3, 4]);
        assert!(r.to_csv().starts_with("partition,rank,word,n_max,count,q\n"));
    }

    #[test]
    fn dense_model_rejected() {
        let mut reg = Registry::new();
        let spec = ModelSpec { read_op: ReadOpKind::Flat, shared: EncoderSpec::mlp(3, &[2], Activation::Tanh), private: None };
        let model = Model::build(&mut reg, spec, &[TaskHeadSpec { id: "a".into(), num_classes: 2 }], 1).unwrap();
        let data = corpus("a", vec![vec![1]]);
        assert!(matches!(neuron_feature_stat(&model, &reg, &[&data], 3), Err(HarnessError::Config(_))));
    }
}
