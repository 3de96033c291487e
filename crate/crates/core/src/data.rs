//! Feature files, question/answer datasets and synthetic needle tasks.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{pad_trim, tokenize, EmbeddingTable, EncodedQuestion, Vocabulary, UNK};
use crate::error::{Error, Result};
use crate::tensor::{argmax, Tensor};

pub const FEATURE_MAGIC: &[u8; 4] = b"VQAF";
pub const FEATURE_VERSION: u32 = 1;
const FEATURE_HEADER: u64 = 20;

/// Region features for every image, all with the same `[K×Dv]` shape.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStore {
    regions: usize,
    dim: usize,
    ids: Vec<String>,
    index: HashMap<String, usize>,
    records: Vec<Tensor>,
}

impl FeatureStore {
    pub fn new(regions: usize, dim: usize) -> Self {
        FeatureStore {
            regions,
            dim,
            ids: Vec::new(),
            index: HashMap::new(),
            records: Vec::new(),
        }
    }

    pub fn regions(&self) -> usize {
        self.regions
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    /// Adds or replaces the features of `id`.
    pub fn insert(&mut self, id: impl Into<String>, features: Tensor) -> Result<()> {
        if features.shape() != [self.regions, self.dim] {
            return Err(Error::dim("feature store", features.shape(), &[self.regions, self.dim]));
        }
        let id = id.into();
        match self.index.get(&id) {
            Some(&i) => self.records[i] = features,
            None => {
                self.index.insert(id.clone(), self.ids.len());
                self.ids.push(id);
                self.records.push(features);
            }
        }
        Ok(())
    }

    pub fn get(&self, id: &str) -> Result<&Tensor> {
        self.index
            .get(id)
            .map(|&i| &self.records[i])
            .ok_or_else(|| Error::Data(format!("no features for image `{id}`")))
    }

    /// Writes the binary record file and the `id ordinal` index file.
    pub fn write(&self, bin_path: impl AsRef<Path>, index_path: impl AsRef<Path>) -> Result<()> {
        let bin_path = bin_path.as_ref();
        let mut bytes = Vec::with_capacity(FEATURE_HEADER as usize + self.records.len() * self.regions * self.dim * 4);
        bytes.extend_from_slice(FEATURE_MAGIC);
        for v in [FEATURE_VERSION, self.len() as u32, self.regions as u32, self.dim as u32] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        for rec in &self.records {
            for &v in rec.data() {
                bytes.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        fs::write(bin_path, bytes).map_err(|e| Error::io(bin_path, e))?;

        let index_path = index_path.as_ref();
        let mut text = String::new();
        for (i, id) in self.ids.iter().enumerate() {
            text.push_str(&format!("{id}\t{i}\n"));
        }
        fs::write(index_path, text).map_err(|e| Error::io(index_path, e))
    }

    /// Reads a store written by [`FeatureStore::write`]; values widen to `f64`.
    pub fn load(bin_path: impl AsRef<Path>, index_path: impl AsRef<Path>) -> Result<Self> {
        let bin_path = bin_path.as_ref();
        let bytes = fs::read(bin_path).map_err(|e| Error::io(bin_path, e))?;
        if bytes.len() < 4 || &bytes[..4] != FEATURE_MAGIC {
            return Err(Error::BadMagic {
                path: bin_path.into(),
                expected: "VQAF".into(),
            });
        }
        if (bytes.len() as u64) < FEATURE_HEADER {
            return Err(Error::Truncated {
                path: bin_path.into(),
                expected: FEATURE_HEADER,
                found: bytes.len() as u64,
            });
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes"));
        let (version, count, regions, dim) = (word(0), word(1) as usize, word(2) as usize, word(3) as usize);
        if version != FEATURE_VERSION {
            return Err(Error::format(bin_path, format!("unsupported version {version}")));
        }
        let expected = FEATURE_HEADER + (count as u64) * (regions as u64) * (dim as u64) * 4;
        if (bytes.len() as u64) < expected {
            return Err(Error::Truncated {
                path: bin_path.into(),
                expected,
                found: bytes.len() as u64,
            });
        }
        if (bytes.len() as u64) > expected {
            return Err(Error::format(
                bin_path,
                format!("{} trailing bytes after {count} records", bytes.len() as u64 - expected),
            ));
        }
        let per = regions * dim;
        let mut records = Vec::with_capacity(count);
        for r in 0..count {
            let start = FEATURE_HEADER as usize + r * per * 4;
            let data = bytes[start..start + per * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            records.push(Tensor::new(vec![regions, dim], data)?);
        }

        let index_path = index_path.as_ref();
        let text = fs::read_to_string(index_path).map_err(|e| Error::io(index_path, e))?;
        let mut ids = vec![None; count];
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (id, ord) = line
                .trim_end()
                .rsplit_once(char::is_whitespace)
                .ok_or_else(|| Error::format(index_path, format!("line {}: expected `id ordinal`", lineno + 1)))?;
            let ord: usize = ord
                .parse()
                .map_err(|_| Error::format(index_path, format!("line {}: bad ordinal `{ord}`", lineno + 1)))?;
            if ord >= count {
                return Err(Error::format(
                    index_path,
                    format!("line {}: ordinal {ord} out of range for {count} records", lineno + 1),
                ));
            }
            ids[ord] = Some(id.trim().to_string());
        }
        let mut store = FeatureStore::new(regions, dim);
        for (ord, (id, rec)) in ids.into_iter().zip(records).enumerate() {
            let id = id.ok_or_else(|| Error::format(index_path, format!("record {ord} has no id")))?;
            store.insert(id, rec)?;
        }
        Ok(store)
    }
}

/// Answer strings in a fixed order; index = position.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AnswerVocabulary {
    answers: Vec<String>,
    index: HashMap<String, usize>,
}

impl AnswerVocabulary {
    pub fn from_list(answers: Vec<String>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, a) in answers.iter().enumerate() {
            if index.insert(a.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate answer `{a}`")));
            }
        }
        Ok(AnswerVocabulary { answers, index })
    }

    /// Orders answers by descending frequency, ties broken lexicographically.
    pub fn from_counts(counts: &HashMap<String, usize>) -> Self {
        let mut items: Vec<(&String, &usize)> = counts.iter().collect();
        items.sort_by(|a, b| b.1.cmp(a.1).then_with(|| a.0.cmp(b.0)));
        Self::from_list(items.into_iter().map(|(a, _)| a.clone()).collect()).expect("map keys are unique")
    }

    pub fn get(&self, answer: &str) -> Option<usize> {
        self.index.get(answer).copied()
    }

    pub fn answer(&self, index: usize) -> Option<&str> {
        self.answers.get(index).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }

    pub fn answers(&self) -> &[String] {
        &self.answers
    }

    /// One answer per line.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_list(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = String::new();
        for a in &self.answers {
            text.push_str(a);
            text.push('\n');
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VqaExample {
    pub question_text: String,
    pub question: EncodedQuestion,
    pub image_id: String,
    /// Soft target score per answer index.
    pub targets: BTreeMap<usize, f64>,
}

impl VqaExample {
    pub fn target_vector(&self, answers: usize) -> Vec<f64> {
        let mut y = vec![0.0; answers];
        for (&i, &s) in &self.targets {
            if i < answers {
                y[i] = s;
            }
        }
        y
    }

    pub fn score(&self, answer: usize) -> f64 {
        self.targets.get(&answer).copied().unwrap_or(0.0)
    }
}

/// One line of a dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub question: String,
    pub image_id: String,
    pub answers: BTreeMap<String, f64>,
}

/// Reads line-delimited JSON records, tokenizing and padding each question.
/// Answers outside `answers` are dropped with a warning.
pub fn load_dataset(
    path: impl AsRef<Path>,
    vocab: &Vocabulary,
    answers: &AnswerVocabulary,
    max_len: usize,
) -> Result<Vec<VqaExample>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DatasetRecord = serde_json::from_str(line).map_err(|e| {
            let kind = match e.classify() {
                serde_json::error::Category::Data => "schema error",
                _ => "malformed record",
            };
            Error::format(path, format!("line {lineno}: {kind}: {e}"))
        })?;
        let mut targets = BTreeMap::new();
        for (ans, &score) in &rec.answers {
            if !(0.0..=1.0).contains(&score) {
                return Err(Error::Data(format!(
                    "{}:{lineno}: score {score} for `{ans}` outside [0, 1]",
                    path.display()
                )));
            }
            match answers.get(ans) {
                Some(i) => {
                    targets.insert(i, score);
                }
                None => warn!("{}:{lineno}: dropping unknown answer `{ans}`", path.display()),
            }
        }
        out.push(VqaExample {
            question: pad_trim(&tokenize(&rec.question), vocab, max_len)?,
            question_text: rec.question,
            image_id: rec.image_id,
            targets,
        });
    }
    if out.is_empty() {
        warn!("{}: dataset is empty", path.display());
    }
    Ok(out)
}

pub fn write_dataset(path: impl AsRef<Path>, examples: &[VqaExample], answers: &AnswerVocabulary) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for ex in examples {
        let rec = DatasetRecord {
            question: ex.question_text.clone(),
            image_id: ex.image_id.clone(),
            answers: ex
                .targets
                .iter()
                .map(|(&i, &s)| (answers.answer(i).unwrap_or("<unknown>").to_string(), s))
                .collect(),
        };
        let line = serde_json::to_string(&rec).map_err(|e| Error::Data(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Example indices grouped into batches. With `shuffle`, the order is a
/// function of `(seed, epoch)` only.
pub fn batch_iter(len: usize, batch_size: usize, shuffle: bool, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..len).collect();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch);
        order.shuffle(&mut rng);
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeedleTask {
    /// One queried region decides the answer.
    Single,
    /// Two queried regions decide the answer jointly.
    Dual,
}

/// Parameters of a synthetic needle dataset.
///
/// Every region row carries a distinct key tag and a class pattern (both scaled
/// basis vectors) on top of uniform noise. The question names one (or two) key
/// tags; the answer is the class (or unordered class pair) stored in those rows.
/// The remaining rows carry distractor classes, so the task cannot be solved
/// without locating the queried rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub task: NeedleTask,
    pub seed: u64,
    /// Total examples; the first 80% form the training split.
    pub n: usize,
    pub regions: usize,
    pub feature_dim: usize,
    pub num_keys: usize,
    pub num_classes: usize,
    pub word_dim: usize,
    /// Amplitude of the uniform noise on every feature.
    pub noise: f64,
    /// Magnitude of the key tag and class pattern entries.
    pub signal: f64,
    /// Probability that an example also lists a second answer with score 0.3.
    pub partial_credit: f64,
}

impl Default for SyntheticSpec {
    /// 2000 training and 500 validation examples of the single-region task.
    fn default() -> Self {
        Self::single(0, 2500)
    }
}

impl SyntheticSpec {
    pub fn single(seed: u64, n: usize) -> Self {
        SyntheticSpec {
            task: NeedleTask::Single,
            seed,
            n,
            regions: 6,
            feature_dim: 16,
            num_keys: 6,
            num_classes: 6,
            word_dim: 16,
            noise: 1.0,
            signal: 3.0,
            partial_credit: 0.25,
        }
    }

    pub fn dual(seed: u64, n: usize) -> Self {
        SyntheticSpec {
            task: NeedleTask::Dual,
            num_classes: 4,
            ..Self::single(seed, n)
        }
    }

    pub fn num_answers(&self) -> usize {
        match self.task {
            NeedleTask::Single => self.num_classes,
            NeedleTask::Dual => self.num_classes * (self.num_classes + 1) / 2,
        }
    }

    pub fn n_train(&self) -> usize {
        self.n * 4 / 5
    }

    pub fn validate(&self) -> Result<()> {
        let min_regions = match self.task {
            NeedleTask::Single => 2,
            NeedleTask::Dual => 3,
        };
        if self.regions < min_regions {
            return Err(Error::Config(format!(
                "{:?} task needs at least {min_regions} regions",
                self.task
            )));
        }
        if self.num_keys < self.regions {
            return Err(Error::Config(format!(
                "{} keys cannot tag {} distinct regions",
                self.num_keys, self.regions
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if self.feature_dim < self.num_keys + self.num_classes {
            return Err(Error::Config(format!(
                "feature width {} too small for {} key tags plus {} class patterns",
                self.feature_dim, self.num_keys, self.num_classes
            )));
        }
        if self.word_dim == 0 || self.n == 0 {
            return Err(Error::Config("word_dim and n must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.partial_credit) {
            return Err(Error::Config("partial_credit must be a probability".into()));
        }
        if self.signal <= 2.0 * self.noise {
            return Err(Error::Config("signal must exceed twice the noise amplitude".into()));
        }
        Ok(())
    }
}

/// Ground truth kept alongside each synthetic example.
#[derive(Clone, Debug, PartialEq)]
pub struct NeedleTruth {
    pub keys: Vec<usize>,
    pub rows: Vec<usize>,
    pub classes: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub spec: SyntheticSpec,
    pub train: Vec<VqaExample>,
    pub val: Vec<VqaExample>,
    pub train_truth: Vec<NeedleTruth>,
    pub val_truth: Vec<NeedleTruth>,
    pub features: FeatureStore,
    pub vocab: Vocabulary,
    pub table: EmbeddingTable,
    pub answers: AnswerVocabulary,
}

const SINGLE_TEMPLATES: [&str; 3] = [
    "what is in region {a}",
    "which class does {a} show",
    "what object sits at {a}",
];
const DUAL_TEMPLATES: [&str; 2] = ["what pair is in {a} and {b}", "which classes do {a} and {b} show"];

fn key_token(k: usize) -> String {
    format!("key{k}")
}

fn class_name(c: usize) -> String {
    format!("class{c}")
}

/// Answer index of the unordered pair `{c1, c2}` among `num_classes` classes.
pub fn pair_label(c1: usize, c2: usize, num_classes: usize) -> usize {
    let (lo, hi) = if c1 <= c2 { (c1, c2) } else { (c2, c1) };
    lo * num_classes - lo * (lo.saturating_sub(1)) / 2 + (hi - lo)
}

fn pair_names(num_classes: usize) -> Vec<String> {
    let mut names = vec![String::new(); num_classes * (num_classes + 1) / 2];
    for lo in 0..num_classes {
        for hi in lo..num_classes {
            names[pair_label(lo, hi, num_classes)] = format!("{}+{}", class_name(lo), class_name(hi));
        }
    }
    names
}

fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

/// Generates a needle dataset. The result is a pure function of `spec`.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let templates: &[&str] = match spec.task {
        NeedleTask::Single => &SINGLE_TEMPLATES,
        NeedleTask::Dual => &DUAL_TEMPLATES,
    };
    let mut vocab = Vocabulary::new();
    for t in templates {
        for w in tokenize(&t.replace("{a}", "").replace("{b}", "")) {
            vocab.insert(&w);
        }
    }
    for k in 0..spec.num_keys {
        vocab.insert(&key_token(k));
    }
    let mut table_data = vec![0.0; vocab.len() * spec.word_dim];
    for v in table_data.iter_mut().skip(2 * spec.word_dim) {
        *v = round_f32(rng.gen_range(-1.0..1.0));
    }
    let mut trainable = vec![false; vocab.len()];
    trainable[UNK] = true;
    let table = EmbeddingTable {
        matrix: Tensor::new(vec![vocab.len(), spec.word_dim], table_data)?,
        trainable,
    };

    let answers = match spec.task {
        NeedleTask::Single => AnswerVocabulary::from_list((0..spec.num_classes).map(class_name).collect())?,
        NeedleTask::Dual => AnswerVocabulary::from_list(pair_names(spec.num_classes))?,
    };

    let mut features = FeatureStore::new(spec.regions, spec.feature_dim);
    let mut examples = Vec::with_capacity(spec.n);
    let mut truths = Vec::with_capacity(spec.n);
    let queried = match spec.task {
        NeedleTask::Single => 1,
        NeedleTask::Dual => 2,
    };
    for i in 0..spec.n {
        let mut keys: Vec<usize> = (0..spec.num_keys).collect();
        keys.shuffle(&mut rng);
        keys.truncate(spec.regions);
        let classes: Vec<usize> = (0..spec.regions).map(|_| rng.gen_range(0..spec.num_classes)).collect();
        let mut data = Vec::with_capacity(spec.regions * spec.feature_dim);
        for r in 0..spec.regions {
            for d in 0..spec.feature_dim {
                let mut v = spec.noise * rng.gen_range(-1.0..1.0);
                if d == keys[r] || d == spec.num_keys + classes[r] {
                    v += spec.signal;
                }
                data.push(round_f32(v));
            }
        }
        let image_id = format!("syn{i:05}");
        features.insert(
            image_id.clone(),
            Tensor::new(vec![spec.regions, spec.feature_dim], data)?,
        )?;

        let mut rows: Vec<usize> = (0..spec.regions).collect();
        rows.shuffle(&mut rng);
        rows.truncate(queried);
        let truth = NeedleTruth {
            keys: rows.iter().map(|&r| keys[r]).collect(),
            classes: rows.iter().map(|&r| classes[r]).collect(),
            rows,
        };
        let answer = match spec.task {
            NeedleTask::Single => truth.classes[0],
            NeedleTask::Dual => pair_label(truth.classes[0], truth.classes[1], spec.num_classes),
        };
        let template = templates[rng.gen_range(0..templates.len())];
        let mut text = template.replace("{a}", &key_token(truth.keys[0]));
        if queried == 2 {
            text = text.replace("{b}", &key_token(truth.keys[1]));
        }
        let mut targets = BTreeMap::new();
        targets.insert(answer, 1.0);
        if rng.gen::<f64>() < spec.partial_credit {
            let other = (answer + rng.gen_range(1..answers.len())) % answers.len();
            targets.insert(other, 0.3);
        }
        examples.push(VqaExample {
            question: pad_trim(&tokenize(&text), &vocab, crate::encoders::DEFAULT_MAX_LEN)?,
            question_text: text,
            image_id,
            targets,
        });
        truths.push(truth);
    }

    let n_train = spec.n_train();
    let val = examples.split_off(n_train);
    let val_truth = truths.split_off(n_train);
    let data = SyntheticData {
        spec: spec.clone(),
        train: examples,
        val,
        train_truth: truths,
        val_truth,
        features,
        vocab,
        table,
        answers,
    };
    for split in [&data.train, &data.val] {
        let acc = data.marked_row_oracle_accuracy(split)?;
        if acc != 1.0 {
            return Err(Error::Numeric(format!(
                "synthetic generator produced an unsolvable example (marked-row oracle {acc})"
            )));
        }
    }
    Ok(data)
}

impl SyntheticData {
    /// Locates the row tagged with `key` and reads its class, from features alone.
    fn read_row(&self, image_id: &str, key: usize) -> Result<usize> {
        let f = self.features.get(image_id)?;
        let nk = self.spec.num_keys;
        let row = (0..f.rows())
            .find(|&r| argmax(&f.row(r)[..nk]) == key)
            .ok_or_else(|| Error::Data(format!("no region tagged {key} in {image_id}")))?;
        Ok(argmax(&f.row(row)[nk..nk + self.spec.num_classes]))
    }

    fn question_keys(&self, ex: &VqaExample) -> Vec<usize> {
        ex.question.indices[..ex.question.len]
            .iter()
            .filter_map(|&i| self.vocab.token(i)?.strip_prefix("key")?.parse().ok())
            .collect()
    }

    /// Accuracy of a predictor that decodes every queried row directly.
    pub fn marked_row_oracle_accuracy(&self, split: &[VqaExample]) -> Result<f64> {
        let mut total = 0.0;
        for ex in split {
            let keys = self.question_keys(ex);
            let pred = match self.spec.task {
                NeedleTask::Single => self.read_row(&ex.image_id, keys[0])?,
                NeedleTask::Dual => pair_label(
                    self.read_row(&ex.image_id, keys[0])?,
                    self.read_row(&ex.image_id, keys[1])?,
                    self.spec.num_classes,
                ),
            };
            total += ex.score(pred);
        }
        Ok(if split.is_empty() {
            1.0
        } else {
            total / split.len() as f64
        })
    }

    /// Best achievable accuracy when only the first queried row can be read:
    /// for each observed class, predict the answer with the highest total
    /// score among examples showing that class.
    pub fn one_row_bayes_accuracy(&self, split: &[VqaExample]) -> Result<f64> {
        let mut groups: HashMap<usize, Vec<f64>> = HashMap::new();
        for ex in split {
            let keys = self.question_keys(ex);
            let seen = self.read_row(&ex.image_id, keys[0])?;
            let acc = groups.entry(seen).or_insert_with(|| vec![0.0; self.answers.len()]);
            for (&a, &s) in &ex.targets {
                acc[a] += s;
            }
        }
        Ok(best_constant_total(groups.values()) / split.len().max(1) as f64)
    }
}

/// In-sample accuracy of the best constant answer per distinct question,
/// i.e. the ceiling for any predictor that ignores the image.
pub fn question_only_bayes_accuracy(split: &[VqaExample], num_answers: usize) -> f64 {
    let mut groups: HashMap<&[usize], Vec<f64>> = HashMap::new();
    for ex in split {
        let acc = groups
            .entry(&ex.question.indices[..ex.question.len])
            .or_insert_with(|| vec![0.0; num_answers]);
        for (&a, &s) in &ex.targets {
            acc[a] += s;
        }
    }
    best_constant_total(groups.values()) / split.len().max(1) as f64
}

fn best_constant_total<'a>(groups: impl Iterator<Item = &'a Vec<f64>>) -> f64 {
    groups.map(|g| g.iter().copied().fold(0.0, f64::max)).sum()
}
