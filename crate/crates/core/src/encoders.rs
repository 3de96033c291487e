//! Question side of the model: tokenization, fixed-length padding, word-vector
//! lookup and the GRU that turns a question into a single embedding.

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use log::warn;
use rand::Rng;

use crate::autodiff::{Graph, NodeId, ParamStore};
use crate::error::{Error, Result};
use crate::layers::glorot_uniform;
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const DEFAULT_MAX_LEN: usize = 14;

#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    /// A vocabulary holding only PAD and UNK.
    pub fn new() -> Self {
        let mut v = Vocabulary {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        v.insert(PAD_TOKEN);
        v.insert(UNK_TOKEN);
        v
    }

    /// Returns the index of `token`, adding it if absent.
    pub fn insert(&mut self, token: &str) -> usize {
        if let Some(&i) = self.index.get(token) {
            return i;
        }
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), self.tokens.len() - 1);
        self.tokens.len() - 1
    }

    pub fn lookup(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Word vectors `[V×D]` with a per-row trainable flag.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub matrix: Tensor,
    pub trainable: Vec<bool>,
}

impl EmbeddingTable {
    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn rows(&self) -> usize {
        self.matrix.rows()
    }

    /// Marks every known-token row trainable (PAD stays frozen).
    pub fn unfreeze_known(&mut self) {
        for (i, t) in self.trainable.iter_mut().enumerate() {
            *t = i != PAD;
        }
    }
}

/// Lowercases, splits on whitespace and strips leading/trailing ASCII punctuation.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| t.trim_matches(|c: char| c.is_ascii_punctuation()).to_lowercase())
        .filter(|t| !t.is_empty())
        .collect()
}

/// A question as exactly `max_len` vocabulary indices plus its true length.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedQuestion {
    pub indices: Vec<usize>,
    pub len: usize,
}

/// Truncates to the first `max_len` tokens or right-pads with PAD.
pub fn pad_trim(tokens: &[String], vocab: &Vocabulary, max_len: usize) -> Result<EncodedQuestion> {
    let idx: Vec<usize> = tokens.iter().map(|t| vocab.lookup(t)).collect();
    pad_trim_indices(&idx, max_len)
}

pub fn pad_trim_indices(indices: &[usize], max_len: usize) -> Result<EncodedQuestion> {
    if max_len == 0 {
        return Err(Error::Config("max question length must be >= 1".into()));
    }
    let len = indices.len().min(max_len);
    let mut out = indices[..len].to_vec();
    out.resize(max_len, PAD);
    Ok(EncodedQuestion { indices: out, len })
}

/// Reads whitespace separated `token v1 … vD` lines. Rows follow file order
/// after PAD and UNK; a repeated token keeps its last vector.
pub fn load_word_vectors(path: impl AsRef<Path>) -> Result<(Vocabulary, EmbeddingTable)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut vocab = Vocabulary::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut dim = None;
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let token = parts.next().expect("non-empty line");
        let values = parts
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|_| Error::format(path, format!("line {lineno}: cannot parse `{s}` as a number")))
            })
            .collect::<Result<Vec<f64>>>()?;
        match dim {
            None if values.is_empty() => {
                return Err(Error::format(path, format!("line {lineno}: no vector values")));
            }
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(Error::format(
                    path,
                    format!("line {lineno}: expected {d} values, found {}", values.len()),
                ));
            }
            Some(_) => {}
        }
        if token == PAD_TOKEN || token == UNK_TOKEN {
            return Err(Error::format(path, format!("line {lineno}: reserved token `{token}`")));
        }
        if vocab.contains(token) {
            warn!(
                "{}: duplicate token `{token}` on line {lineno}, keeping the later vector",
                path.display()
            );
            rows[vocab.lookup(token) - 2] = values;
        } else {
            vocab.insert(token);
            rows.push(values);
        }
    }
    let dim = dim.ok_or_else(|| Error::format(path, "no word vectors found"))?;
    let mut data = vec![0.0; 2 * dim];
    for r in &rows {
        data.extend_from_slice(r);
    }
    let matrix = Tensor::new(vec![vocab.len(), dim], data)?;
    let mut trainable = vec![false; vocab.len()];
    trainable[UNK] = true;
    Ok((vocab, EmbeddingTable { matrix, trainable }))
}

/// Writes the known-token rows (everything after PAD and UNK) in the text layout
/// read by [`load_word_vectors`]. Values use shortest round-trip formatting.
pub fn write_word_vectors(path: impl AsRef<Path>, vocab: &Vocabulary, table: &EmbeddingTable) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for i in 2..vocab.len() {
        let mut line = vocab.token(i).expect("index in range").to_string();
        for v in table.matrix.row(i) {
            line.push(' ');
            line.push_str(&format!("{v:?}"));
        }
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// GRU weights for input width `D` and hidden width `H`.
#[derive(Clone, Debug, PartialEq)]
pub struct GruParams {
    pub w_z: Tensor,
    pub w_r: Tensor,
    pub w_h: Tensor,
    pub u_z: Tensor,
    pub u_r: Tensor,
    pub u_h: Tensor,
    pub b_z: Tensor,
    pub b_r: Tensor,
    pub b_h: Tensor,
}

const GRU_NAMES: [&str; 9] = ["w_z", "w_r", "w_h", "u_z", "u_r", "u_h", "b_z", "b_r", "b_h"];

impl GruParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        GruParams {
            w_z: Tensor::zeros(&[hidden, input]),
            w_r: Tensor::zeros(&[hidden, input]),
            w_h: Tensor::zeros(&[hidden, input]),
            u_z: Tensor::zeros(&[hidden, hidden]),
            u_r: Tensor::zeros(&[hidden, hidden]),
            u_h: Tensor::zeros(&[hidden, hidden]),
            b_z: Tensor::zeros(&[hidden]),
            b_r: Tensor::zeros(&[hidden]),
            b_h: Tensor::zeros(&[hidden]),
        }
    }

    /// Fan-based uniform matrices, zero biases.
    pub fn random<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        GruParams {
            w_z: glorot_uniform(hidden, input, rng),
            w_r: glorot_uniform(hidden, input, rng),
            w_h: glorot_uniform(hidden, input, rng),
            u_z: glorot_uniform(hidden, hidden, rng),
            u_r: glorot_uniform(hidden, hidden, rng),
            u_h: glorot_uniform(hidden, hidden, rng),
            b_z: Tensor::zeros(&[hidden]),
            b_r: Tensor::zeros(&[hidden]),
            b_h: Tensor::zeros(&[hidden]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_z.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.u_z.rows()
    }

    fn tensors(&self) -> [&Tensor; 9] {
        [
            &self.w_z, &self.w_r, &self.w_h, &self.u_z, &self.u_r, &self.u_h, &self.b_z, &self.b_r, &self.b_h,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let (d, h) = (self.input_dim(), self.hidden_dim());
        for (name, t) in GRU_NAMES.iter().zip(self.tensors()) {
            let expected: Vec<usize> = match name.as_bytes()[0] {
                b'w' => vec![h, d],
                b'u' => vec![h, h],
                _ => vec![h],
            };
            if t.shape() != expected.as_slice() {
                return Err(Error::dim("gru params", t.shape(), &expected));
            }
        }
        Ok(())
    }

    pub fn to_store(&self, prefix: &str) -> ParamStore {
        let mut store = ParamStore::new();
        for (name, t) in GRU_NAMES.iter().zip(self.tensors()) {
            store.insert(format!("{prefix}.{name}"), t.clone());
        }
        store
    }

    pub fn from_store(store: &ParamStore, prefix: &str) -> Result<Self> {
        let get = |n: &str| store.get(&format!("{prefix}.{n}")).cloned();
        let p = GruParams {
            w_z: get("w_z")?,
            w_r: get("w_r")?,
            w_h: get("w_h")?,
            u_z: get("u_z")?,
            u_r: get("u_r")?,
            u_h: get("u_h")?,
            b_z: get("b_z")?,
            b_r: get("b_r")?,
            b_h: get("b_h")?,
        };
        p.validate()?;
        Ok(p)
    }
}

/// GRU weights registered on a graph.
#[derive(Clone, Copy, Debug)]
pub struct GruNodes {
    w: [NodeId; 3],
    u: [NodeId; 3],
    b: [NodeId; 3],
}

impl GruNodes {
    pub fn bind(g: &mut Graph, store: &ParamStore, prefix: &str) -> Result<Self> {
        let mut ids = [None; 9];
        for (slot, name) in ids.iter_mut().zip(GRU_NAMES) {
            *slot = Some(g.param_from(store, &format!("{prefix}.{name}"))?);
        }
        let ids = ids.map(|i| i.expect("all bound"));
        Ok(GruNodes {
            w: [ids[0], ids[1], ids[2]],
            u: [ids[3], ids[4], ids[5]],
            b: [ids[6], ids[7], ids[8]],
        })
    }

    /// One recurrence step on a batch: `x[B×D]`, `h[B×H]` → `h′[B×H]`.
    ///
    /// z = σ(W_z x + U_z h + b_z), r = σ(W_r x + U_r h + b_r),
    /// h̃ = tanh(W_h x + U_h (r∘h) + b_h), h′ = (1−z)∘h + z∘h̃.
    pub fn step(&self, g: &mut Graph, x: NodeId, h: NodeId) -> Result<NodeId> {
        let gate = |g: &mut Graph, i: usize, hin: NodeId| -> Result<NodeId> {
            let xi = g.linear(x, self.w[i], Some(self.b[i]))?;
            let hi = g.linear(hin, self.u[i], None)?;
            g.add(xi, hi)
        };
        let z = gate(g, 0, h)?;
        let z = g.sigmoid(z);
        let r = gate(g, 1, h)?;
        let r = g.sigmoid(r);
        let rh = g.mul(r, h)?;
        let cand = gate(g, 2, rh)?;
        let cand = g.tanh(cand);
        let keep = g.one_minus(z);
        let old = g.mul(keep, h)?;
        let new = g.mul(z, cand)?;
        g.add(old, new)
    }

    /// Runs the recurrence over a batch of padded questions. Each row stops
    /// updating at its true length, so padding never enters the state.
    pub fn encode_batch(&self, g: &mut Graph, table: NodeId, questions: &[&EncodedQuestion]) -> Result<NodeId> {
        let hidden = g.value(self.u[0]).rows();
        let mut h = g.constant(Tensor::zeros(&[questions.len(), hidden]));
        let steps = questions.iter().map(|q| q.len).max().unwrap_or(0);
        for t in 0..steps {
            let active: Vec<bool> = questions.iter().map(|q| t < q.len).collect();
            let idx = questions
                .iter()
                .map(|q| if t < q.len { q.indices[t] } else { PAD })
                .collect();
            let x = g.gather_rows(table, idx)?;
            let next = self.step(g, x, h)?;
            h = if active.iter().all(|&a| a) {
                next
            } else {
                g.blend_rows(next, h, active)?
            };
        }
        Ok(h)
    }
}

/// Single-example GRU step outside any training graph.
pub fn gru_cell(x: &Tensor, h: &Tensor, p: &GruParams) -> Result<Tensor> {
    p.validate()?;
    if x.len() != p.input_dim() || h.len() != p.hidden_dim() {
        return Err(Error::dim("gru_cell", x.shape(), h.shape()));
    }
    let store = p.to_store("gru");
    let mut g = Graph::new();
    let nodes = GruNodes::bind(&mut g, &store, "gru")?;
    let xi = g.constant(x.reshape(&[1, x.len()])?);
    let hi = g.constant(h.reshape(&[1, h.len()])?);
    let out = nodes.step(&mut g, xi, hi)?;
    g.value(out).reshape(&[p.hidden_dim()])
}

/// Final GRU state after the first `true_len` tokens (zeros when empty).
pub fn encode_question(indices: &[usize], true_len: usize, table: &EmbeddingTable, p: &GruParams) -> Result<Tensor> {
    if true_len > indices.len() {
        return Err(Error::Data(format!(
            "true length {true_len} exceeds {} indices",
            indices.len()
        )));
    }
    if let Some(&bad) = indices[..true_len].iter().find(|&&i| i >= table.rows()) {
        return Err(Error::Data(format!(
            "token index {bad} outside vocabulary of {}",
            table.rows()
        )));
    }
    if table.dim() != p.input_dim() {
        return Err(Error::dim("encode_question", table.matrix.shape(), p.w_z.shape()));
    }
    let q = EncodedQuestion {
        indices: indices.to_vec(),
        len: true_len,
    };
    let store = p.to_store("gru");
    let mut g = Graph::new();
    let nodes = GruNodes::bind(&mut g, &store, "gru")?;
    let t = g.constant(table.matrix.clone());
    let h = nodes.encode_batch(&mut g, t, &[&q])?;
    g.value(h).reshape(&[p.hidden_dim()])
}
