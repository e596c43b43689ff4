//! Token vocabulary, embedding table and nearest-neighbor projection.
//!
//! The vocabulary is the feasible set of the discrete prompt problem: every
//! optimized prompt position must end up on one of the (non-special) rows of the
//! embedding table.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;

/// Ordered, duplicate-free list of token strings.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    special: BTreeSet<usize>,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>, special: impl IntoIterator<Item = usize>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Vocab("vocabulary is empty".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(Error::Vocab(format!(
                    "token {i} ({tok:?}) is empty or contains whitespace"
                )));
            }
            if index.insert(tok.clone(), i).is_some() {
                return Err(Error::Vocab(format!("duplicate token `{tok}`")));
            }
        }
        let special: BTreeSet<usize> = special.into_iter().collect();
        if let Some(&bad) = special.iter().find(|&&i| i >= tokens.len()) {
            return Err(Error::IdOutOfRange {
                id: bad,
                size: tokens.len(),
            });
        }
        Ok(Vocabulary {
            tokens,
            index,
            special,
        })
    }

    /// Parses the plain-text format: one token per line, optionally preceded by
    /// a `#special: i,j,...` header line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().peekable();
        let mut special = Vec::new();
        if let Some(header) = lines.peek().and_then(|l| l.strip_prefix("#special:")) {
            for part in header.split(',').map(str::trim).filter(|p| !p.is_empty()) {
                special.push(part.parse::<usize>().map_err(|_| Error::Format {
                    what: "vocabulary header",
                    msg: format!("`{part}` is not a token index"),
                })?);
            }
            lines.next();
        }
        let tokens = lines.map(|l| l.trim_end_matches('\r').to_string()).collect();
        Vocabulary::new(tokens, special)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Vocabulary::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        if !self.special.is_empty() {
            let ids: Vec<String> = self.special.iter().map(usize::to_string).collect();
            out.push_str(&format!("#special: {}\n", ids.join(",")));
        }
        for tok in &self.tokens {
            out.push_str(tok);
            out.push('\n');
        }
        out
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or(Error::IdOutOfRange {
                id,
                size: self.len(),
            })
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn is_special(&self, id: usize) -> bool {
        self.special.contains(&id)
    }

    pub fn special_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.special.iter().copied()
    }

    /// Ids that projection may return.
    pub fn feasible_ids(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(|i| !self.special.contains(i))
    }

    /// Word-level tokenization: every whitespace-delimited word must be a token.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|w| self.id(w).ok_or_else(|| Error::UnknownWord(w.to_string())))
            .collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> Result<String> {
        let words = ids
            .iter()
            .map(|&id| self.token(id))
            .collect::<Result<Vec<_>>>()?;
        Ok(words.join(" "))
    }

    pub fn check_ids(&self, ids: &[usize]) -> Result<()> {
        match ids.iter().find(|&&id| id >= self.len()) {
            Some(&id) => Err(Error::IdOutOfRange {
                id,
                size: self.len(),
            }),
            None => Ok(()),
        }
    }
}

/// Collapses runs of whitespace into single spaces and trims the ends.
pub fn normalize_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// |V| × d matrix of token embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    vectors: Array2<f64>,
}

impl EmbeddingTable {
    pub fn new(vectors: Array2<f64>) -> Result<Self> {
        if vectors.ncols() == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding table"));
        }
        Ok(EmbeddingTable { vectors })
    }

    pub fn read(reader: &mut impl Read) -> Result<Self> {
        EmbeddingTable::new(io::read_matrix(reader)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        EmbeddingTable::read(&mut file)
    }

    pub fn write(&self, writer: &mut impl Write) -> Result<()> {
        io::write_matrix(writer, &self.vectors)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut file)?;
        file.flush()?;
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn vectors(&self) -> ArrayView2<'_, f64> {
        self.vectors.view()
    }

    pub fn row(&self, id: usize) -> ArrayView1<'_, f64> {
        self.vectors.row(id)
    }
}

/// Distance used to pick the nearest vocabulary row.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Euclidean,
    Cosine,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Euclidean => "euclidean",
            Metric::Cosine => "cosine",
        })
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Metric::Euclidean),
            "cosine" => Ok(Metric::Cosine),
            other => Err(Error::Config(format!("unknown metric `{other}`"))),
        }
    }
}

/// Result of snapping every prompt row onto its nearest vocabulary row.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub token_ids: Vec<usize>,
    pub projected: Array2<f64>,
}

/// The continuous optimization variable together with its projected twin.
///
/// `free` is allowed to leave the table; `projected` always consists of table rows.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptState {
    pub free: Array2<f64>,
    pub projected: Array2<f64>,
    pub token_ids: Vec<usize>,
}

impl PromptState {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

/// A vocabulary paired with its embedding table.
#[derive(Clone, Debug)]
pub struct Lexicon {
    vocab: Vocabulary,
    table: EmbeddingTable,
    // Squared row norms and norms, cached for projection.
    norms: Vec<f64>,
}

impl Lexicon {
    pub fn new(vocab: Vocabulary, table: EmbeddingTable) -> Result<Self> {
        if vocab.len() != table.rows() {
            return Err(Error::shape(
                "embedding table rows",
                vocab.len(),
                table.rows(),
            ));
        }
        if vocab.feasible_ids().next().is_none() {
            return Err(Error::Vocab("every token is special".into()));
        }
        let norms = table
            .vectors
            .axis_iter(Axis(0))
            .map(|r| r.dot(&r).sqrt())
            .collect();
        Ok(Lexicon {
            vocab,
            table,
            norms,
        })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn table(&self) -> &EmbeddingTable {
        &self.table
    }

    pub fn dim(&self) -> usize {
        self.table.dim()
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        self.vocab.tokenize(text)
    }

    pub fn detokenize(&self, ids: &[usize]) -> Result<String> {
        self.vocab.detokenize(ids)
    }

    /// Stacks the table rows for `ids`.
    pub fn embed(&self, ids: &[usize]) -> Result<Array2<f64>> {
        self.vocab.check_ids(ids)?;
        let mut out = Array2::zeros((ids.len(), self.dim()));
        for (mut dst, &id) in out.axis_iter_mut(Axis(0)).zip(ids) {
            dst.assign(&self.table.row(id));
        }
        Ok(out)
    }

    /// Nearest non-special row for every prompt row, lowest index on ties.
    pub fn project(&self, free: &ArrayView2<'_, f64>, metric: Metric) -> Result<Projection> {
        if free.ncols() != self.dim() {
            return Err(Error::shape("prompt embedding columns", self.dim(), free.ncols()));
        }
        let token_ids = free
            .axis_iter(Axis(0))
            .enumerate()
            .map(|(j, row)| self.nearest(row, metric).map_err(|e| match e {
                Error::DegenerateRow { .. } => Error::DegenerateRow { row: j },
                e => e,
            }))
            .collect::<Result<Vec<_>>>()?;
        let projected = self.embed(&token_ids)?;
        Ok(Projection {
            token_ids,
            projected,
        })
    }

    pub fn project_state(&self, free: Array2<f64>, metric: Metric) -> Result<PromptState> {
        let Projection {
            token_ids,
            projected,
        } = self.project(&free.view(), metric)?;
        Ok(PromptState {
            free,
            projected,
            token_ids,
        })
    }

    fn nearest(&self, query: ArrayView1<'_, f64>, metric: Metric) -> Result<usize> {
        if query.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("prompt embedding"));
        }
        let vectors = self.table.vectors();
        let mut best = None::<(usize, f64)>;
        match metric {
            Metric::Euclidean => {
                for i in self.vocab.feasible_ids() {
                    let dist: f64 = query
                        .iter()
                        .zip(vectors.row(i))
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    if best.is_none_or(|(_, d)| dist < d) {
                        best = Some((i, dist));
                    }
                }
            }
            Metric::Cosine => {
                let qn = query.dot(&query).sqrt();
                if qn == 0.0 {
                    return Err(Error::DegenerateRow { row: 0 });
                }
                for i in self.vocab.feasible_ids() {
                    // A zero table row has no direction; it sits at similarity 0.
                    let sim = if self.norms[i] == 0.0 {
                        0.0
                    } else {
                        query.dot(&vectors.row(i)) / (qn * self.norms[i])
                    };
                    let dist = 1.0 - sim;
                    if best.is_none_or(|(_, d)| dist < d) {
                        best = Some((i, dist));
                    }
                }
            }
        }
        Ok(best.expect("lexicon has at least one feasible id").0)
    }
}
