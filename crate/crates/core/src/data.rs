//! Dataset reading, tokenization, batching, and ranking triples.
//!
//! All tasks share one tab-separated schema:
//!
//! ```text
//! label <TAB> sentence_a <TAB> sentence_b [<TAB> group_id]
//! ```
//!
//! `group_id` (the question id) is required for answer selection.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::embedding::{tokenize, Sentence, Vocab, PAD};
use crate::error::{Error, Result};
use crate::heads::HeadKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Task {
    Snli,
    SciTail,
    Quora,
    WikiQa,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Snli, Task::SciTail, Task::Quora, Task::WikiQa];

    pub fn name(self) -> &'static str {
        match self {
            Task::Snli => "snli",
            Task::SciTail => "scitail",
            Task::Quora => "quora",
            Task::WikiQa => "wikiqa",
        }
    }

    /// Maximum sentence length in tokens.
    pub fn max_len(self) -> usize {
        match self {
            Task::Snli => 64,
            Task::SciTail | Task::Quora => 48,
            Task::WikiQa => 32,
        }
    }

    /// Label strings in class-id order.
    pub fn labels(self) -> &'static [&'static str] {
        match self {
            Task::Snli => &["entailment", "contradiction", "neutral"],
            Task::SciTail => &["entails", "neutral"],
            Task::Quora | Task::WikiQa => &["0", "1"],
        }
    }

    pub fn head(self) -> HeadKind {
        match self {
            Task::WikiQa => HeadKind::Rank,
            t => HeadKind::Classify(t.labels().len()),
        }
    }

    pub fn is_ranking(self) -> bool {
        self == Task::WikiQa
    }

    pub fn parse_label(self, s: &str) -> Option<usize> {
        self.labels().iter().position(|&l| l == s)
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown task {s:?} (expected snli, scitail, quora or wikiqa)")))
    }
}

/// One validated line of a dataset file.
#[derive(Debug, Clone, PartialEq)]
pub struct RawPair {
    pub line: usize,
    pub label: usize,
    pub a: String,
    pub b: String,
    pub group: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct RawDataset {
    pub pairs: Vec<RawPair>,
    /// SNLI lines whose gold label is `-` (no annotator consensus).
    pub dropped_no_consensus: usize,
}

pub fn read_dataset(path: &Path, task: Task) -> Result<RawDataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text, path, task)
}

pub fn parse_dataset(text: &str, path: &Path, task: Task) -> Result<RawDataset> {
    let mut out = RawDataset::default();
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let data_err = |msg: String| Error::Data {
            path: path.into(),
            line: line_no,
            msg,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 3 {
            return Err(data_err(format!("expected at least 3 tab-separated fields, found {}", fields.len())));
        }
        let label_str = fields[0].trim();
        if task == Task::Snli && label_str == "-" {
            out.dropped_no_consensus += 1;
            continue;
        }
        let label = task
            .parse_label(label_str)
            .ok_or_else(|| data_err(format!("unknown {task} label {label_str:?}")))?;
        let group = fields.get(3).map(|g| g.trim().to_string()).filter(|g| !g.is_empty());
        if task.is_ranking() && group.is_none() {
            return Err(data_err("missing group_id for ranking task".into()));
        }
        out.pairs.push(RawPair {
            line: line_no,
            label,
            a: fields[1].to_string(),
            b: fields[2].to_string(),
            group,
        });
    }
    Ok(out)
}

/// Both sentences of a pair as token ids, plus its label.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedPair {
    /// Position of the pair in its split.
    pub pair_id: usize,
    pub a: Sentence,
    pub b: Sentence,
    /// Class id, or relevance (0/1) for ranking.
    pub label: usize,
    pub group: Option<String>,
}

impl TokenizedPair {
    pub fn len_a(&self) -> usize {
        self.a.len()
    }

    pub fn len_b(&self) -> usize {
        self.b.len()
    }
}

/// `len` ones followed by `pad_to - len` zeros.
pub fn length_mask(len: usize, pad_to: usize) -> Vec<bool> {
    (0..pad_to).map(|i| i < len).collect()
}

#[derive(Debug, Clone, Default)]
pub struct Prepared {
    pub pairs: Vec<TokenizedPair>,
    /// Pairs dropped because a sentence had no tokens.
    pub skipped_empty: usize,
}

/// Tokenizes and truncates each sentence to `cap` tokens.
pub fn prepare_pairs(raw: &[RawPair], vocab: &Vocab, cap: usize) -> Prepared {
    let mut out = Prepared::default();
    for r in raw {
        let (ta, tb) = (tokenize(&r.a), tokenize(&r.b));
        if ta.is_empty() || tb.is_empty() {
            out.skipped_empty += 1;
            continue;
        }
        out.pairs.push(TokenizedPair {
            pair_id: out.pairs.len() + out.skipped_empty,
            a: Sentence::new(ta, vocab, cap),
            b: Sentence::new(tb, vocab, cap),
            label: r.label,
            group: r.group.clone(),
        });
    }
    if out.skipped_empty > 0 {
        log::warn!("skipped {} pairs with an empty sentence", out.skipped_empty);
    }
    out
}

/// Vocabulary over both sentences of the given (training) pairs.
pub fn build_vocab(raw: &[RawPair], min_count: usize) -> Vocab {
    let token_lists: Vec<Vec<String>> = raw
        .iter()
        .flat_map(|r| [tokenize(&r.a), tokenize(&r.b)])
        .collect();
    Vocab::build(token_lists.iter(), min_count)
}

/// Padded id matrices for a group of pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// Indices of the member pairs in the source slice.
    pub members: Vec<usize>,
    pub ids_a: Vec<Vec<usize>>,
    pub ids_b: Vec<Vec<usize>>,
    pub mask_a: Vec<Vec<bool>>,
    pub mask_b: Vec<Vec<bool>>,
    pub labels: Vec<usize>,
    pub pad_a: usize,
    pub pad_b: usize,
}

impl Batch {
    pub fn new(pairs: &[TokenizedPair], members: Vec<usize>) -> Self {
        let pad_a = members.iter().map(|&i| pairs[i].len_a()).max().unwrap_or(0);
        let pad_b = members.iter().map(|&i| pairs[i].len_b()).max().unwrap_or(0);
        let pad = |ids: &[usize], to: usize| {
            let mut v = ids.to_vec();
            v.resize(to, PAD);
            v
        };
        Self {
            ids_a: members.iter().map(|&i| pad(&pairs[i].a.ids, pad_a)).collect(),
            ids_b: members.iter().map(|&i| pad(&pairs[i].b.ids, pad_b)).collect(),
            mask_a: members.iter().map(|&i| length_mask(pairs[i].len_a(), pad_a)).collect(),
            mask_b: members.iter().map(|&i| length_mask(pairs[i].len_b(), pad_b)).collect(),
            labels: members.iter().map(|&i| pairs[i].label).collect(),
            members,
            pad_a,
            pad_b,
        }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Splits `pairs` into batches, shuffling the order first when `shuffle_seed` is given.
pub fn build_batches(pairs: &[TokenizedPair], batch_size: usize, shuffle_seed: Option<u64>) -> Vec<Batch> {
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order
        .chunks(batch_size.max(1))
        .map(|chunk| Batch::new(pairs, chunk.to_vec()))
        .collect()
}

/// Candidates sharing a question, in order of first appearance.
#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub id: String,
    pub members: Vec<usize>,
}

pub fn groups(pairs: &[TokenizedPair]) -> Vec<Group> {
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut out: Vec<Group> = Vec::new();
    for (i, p) in pairs.iter().enumerate() {
        let id = p.group.as_deref().unwrap_or("");
        let slot = *index.entry(id).or_insert_with(|| {
            out.push(Group {
                id: id.to_string(),
                members: Vec::new(),
            });
            out.len() - 1
        });
        out[slot].members.push(i);
    }
    out
}

/// A question with one relevant and one irrelevant candidate (pair indices).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triple {
    pub positive: usize,
    pub negative: usize,
}

/// One triple per positive candidate, its negative drawn uniformly from the
/// same group. Groups without both kinds of candidate contribute nothing.
pub fn make_ranking_triples(pairs: &[TokenizedPair], seed: u64) -> Vec<Triple> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for group in groups(pairs) {
        let (pos, neg): (Vec<usize>, Vec<usize>) = group.members.iter().partition(|&&i| pairs[i].label == 1);
        if pos.is_empty() || neg.is_empty() {
            continue;
        }
        for positive in pos {
            let negative = neg[rng.gen_range(0..neg.len())];
            out.push(Triple { positive, negative });
        }
    }
    out
}

/// Linearly separable synthetic pairs for smoke tests and demos: the second
/// sentence carries a marker word that determines the label.
pub fn synthetic_pairs(task: Task, n: usize, seed: u64) -> Vec<RawPair> {
    const FILLER: [&str; 16] = [
        "a", "man", "woman", "dog", "runs", "park", "the", "eats", "red", "ball", "child", "plays", "near", "old",
        "house", "water",
    ];
    const MARKERS: [&str; 3] = ["indeed", "never", "perhaps"];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = task.labels().len();
    let words = |rng: &mut ChaCha8Rng, k: usize| -> Vec<&str> {
        (0..k).map(|_| FILLER[rng.gen_range(0..FILLER.len())]).collect()
    };
    (0..n)
        .map(|i| {
            let label = i % classes;
            let la = rng.gen_range(3..7);
            let a = words(&mut rng, la);
            let lb = rng.gen_range(2..5);
            let mut b = words(&mut rng, lb);
            let at = rng.gen_range(0..=b.len());
            b.insert(at, MARKERS[label]);
            RawPair {
                line: i + 1,
                label,
                a: a.join(" "),
                b: b.join(" "),
                group: task.is_ranking().then(|| format!("q{}", i / 4)),
            }
        })
        .collect()
}

/// Serialises pairs in the TSV schema.
pub fn to_tsv(task: Task, pairs: &[RawPair]) -> String {
    let mut out = String::new();
    for p in pairs {
        out.push_str(task.labels()[p.label]);
        out.push('\t');
        out.push_str(&p.a);
        out.push('\t');
        out.push_str(&p.b);
        if let Some(g) = &p.group {
            out.push('\t');
            out.push_str(g);
        }
        out.push('\n');
    }
    out
}
