//! bAbI-format question answering data: parsing, vocabulary, Bag-of-Words
//! encoding, and deterministic synthetic task generators.
//!
//! A bAbI file is a sequence of numbered lines. Statements read
//! `<id> <sentence>`; questions read `<id> <question>\t<answer>\t<supports>`,
//! where supports are ids of earlier statements. An id of 1 starts a new
//! story context.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("no questions found")]
    Empty,
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("unknown synthetic task {0:?}")]
    UnknownTask(String),
    #[error("no bAbI file matching qa{task}_*_{split}.txt in {dir}")]
    MissingFile { task: u32, split: &'static str, dir: PathBuf },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
}

/// One question with the statements that precede it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Story {
    pub sentences: Vec<Vec<String>>,
    pub question: Vec<String>,
    pub answer: String,
    /// Indices into `sentences` of the supporting statements.
    #[serde(default)]
    pub supporting: Vec<usize>,
}

/// Lowercases and splits on whitespace, dropping sentence punctuation.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| t.trim_matches(|c| matches!(c, '.' | '?' | '!')).to_lowercase())
        .filter(|t| !t.is_empty())
        .collect()
}

/// Parses bAbI text. Each question becomes a [`Story`] holding the most
/// recent `max_sentences` statements of its context.
pub fn parse_babi(text: &str, max_sentences: usize) -> Result<Vec<Story>, DataError> {
    let mut stories = Vec::new();
    let mut context: Vec<(usize, Vec<String>)> = Vec::new();
    let mut last_id = 0;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let raw = raw.trim_end_matches('\r');
        if raw.trim().is_empty() {
            continue;
        }
        let malformed = |msg: &str| DataError::Malformed { line, msg: msg.to_string() };
        let (id, rest) = raw
            .trim_start()
            .split_once(' ')
            .ok_or_else(|| malformed("expected \"<id> <text>\""))?;
        let id: usize = id.parse().map_err(|_| malformed("line id is not a number"))?;
        if id == 0 {
            return Err(malformed("line ids start at 1"));
        }
        if id == 1 {
            context.clear();
        } else if id <= last_id {
            return Err(malformed("line id does not increase within a story"));
        }
        last_id = id;

        if !rest.contains('\t') {
            context.push((id, tokenize(rest)));
            continue;
        }
        let mut fields = rest.split('\t');
        let question = tokenize(fields.next().unwrap_or_default());
        let answer = fields.next().map(str::trim).unwrap_or_default();
        if answer.is_empty() || answer.contains(char::is_whitespace) {
            return Err(malformed("question needs a single answer token"));
        }
        let supports = fields
            .next()
            .unwrap_or_default()
            .split_whitespace()
            .map(|s| s.parse::<usize>().map_err(|_| malformed("support id is not a number")))
            .collect::<Result<Vec<_>, _>>()?;
        if question.is_empty() {
            return Err(malformed("empty question"));
        }
        if context.is_empty() {
            return Err(malformed("question has no preceding statements"));
        }
        for s in &supports {
            if !context.iter().any(|(cid, _)| cid == s) {
                return Err(malformed("support id does not name an earlier statement"));
            }
        }
        let start = context.len().saturating_sub(max_sentences);
        let window = &context[start..];
        let supporting = supports
            .iter()
            .filter_map(|s| window.iter().position(|(cid, _)| cid == s))
            .collect();
        stories.push(Story {
            sentences: window.iter().map(|(_, t)| t.clone()).collect(),
            question,
            answer: answer.to_lowercase(),
            supporting,
        });
    }
    if stories.is_empty() {
        return Err(DataError::Empty);
    }
    Ok(stories)
}

/// Writes each story as its own bAbI context.
pub fn serialize_babi(stories: &[Story]) -> String {
    let mut out = String::new();
    for s in stories {
        for (i, sentence) in s.sentences.iter().enumerate() {
            out.push_str(&format!("{} {}.\n", i + 1, sentence.join(" ")));
        }
        let supports: Vec<String> = s.supporting.iter().map(|i| (i + 1).to_string()).collect();
        out.push_str(&format!(
            "{} {}?\t{}\t{}\n",
            s.sentences.len() + 1,
            s.question.join(" "),
            s.answer,
            supports.join(" ")
        ));
    }
    out
}

pub fn write_jsonl(stories: &[Story]) -> String {
    stories
        .iter()
        .map(|s| serde_json::to_string(s).expect("story serializes") + "\n")
        .collect()
}

pub fn read_jsonl(text: &str) -> Result<Vec<Story>, DataError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|source| DataError::Json { line: i + 1, source }))
        .collect()
}

/// Token for a statement's age within its story (0 = most recent).
pub fn time_token(age: usize) -> String {
    format!("time#{age}")
}

/// Token/index bijection. Word tokens are sorted; optional time tokens
/// `time#0..` follow them.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
    time_tokens: usize,
}

impl Vocabulary {
    /// Builds from the words of `stories` plus `time_tokens` age tokens.
    pub fn build(stories: &[Story], time_tokens: usize) -> Self {
        let mut words = BTreeSet::new();
        for s in stories {
            for sentence in &s.sentences {
                words.extend(sentence.iter().cloned());
            }
            words.extend(s.question.iter().cloned());
            words.insert(s.answer.clone());
        }
        let mut tokens: Vec<String> = words.into_iter().collect();
        tokens.extend((0..time_tokens).map(time_token));
        Self::from_tokens(tokens, time_tokens)
    }

    pub fn from_tokens(tokens: Vec<String>, time_tokens: usize) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index, time_tokens }
    }

    /// Restores the index after deserialization.
    pub fn reindex(&mut self) {
        self.index = self.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn time_tokens(&self) -> usize {
        self.time_tokens
    }

    fn require(&self, token: &str) -> Result<usize, DataError> {
        self.id(token).ok_or_else(|| DataError::UnknownToken(token.to_string()))
    }
}

/// Binary Bag-of-Words vector: entry `i` is 1 iff token `i` occurs.
pub fn encode_bow(sentence: &[String], vocab: &Vocabulary) -> Result<Vec<u8>, DataError> {
    let mut v = vec![0u8; vocab.len()];
    for t in sentence {
        v[vocab.require(t)?] = 1;
    }
    Ok(v)
}

/// A story as sorted lists of active Bag-of-Words indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedStory {
    pub sentences: Vec<Vec<usize>>,
    pub question: Vec<usize>,
    pub answer: usize,
}

fn active(tokens: &[String], vocab: &Vocabulary) -> Result<Vec<usize>, DataError> {
    let set: BTreeSet<usize> = tokens.iter().map(|t| vocab.require(t)).collect::<Result<_, _>>()?;
    Ok(set.into_iter().collect())
}

pub fn encode_story(story: &Story, vocab: &Vocabulary) -> Result<EncodedStory, DataError> {
    let n = story.sentences.len();
    let sentences = story
        .sentences
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut ids = active(s, vocab)?;
            if vocab.time_tokens > 0 {
                let age = (n - 1 - i).min(vocab.time_tokens - 1);
                ids.push(vocab.require(&time_token(age))?);
                ids.sort_unstable();
                ids.dedup();
            }
            Ok(ids)
        })
        .collect::<Result<Vec<_>, DataError>>()?;
    Ok(EncodedStory {
        sentences,
        question: active(&story.question, vocab)?,
        answer: vocab.require(&story.answer)?,
    })
}

pub fn encode_all(stories: &[Story], vocab: &Vocabulary) -> Result<Vec<EncodedStory>, DataError> {
    stories.iter().map(|s| encode_story(s, vocab)).collect()
}

/// Train/validation/test stories sharing one vocabulary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub vocab: Vocabulary,
    pub train: Vec<EncodedStory>,
    pub valid: Vec<EncodedStory>,
    pub test: Vec<EncodedStory>,
}

impl Dataset {
    /// Holds out `valid_fraction` of `train` (deterministic shuffle by
    /// `seed`), builds the vocabulary from the remaining training stories and
    /// encodes every split against it.
    pub fn from_splits(
        train: Vec<Story>,
        test: Vec<Story>,
        valid_fraction: f64,
        seed: u64,
    ) -> Result<Self, DataError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_da7a);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let n_valid = ((train.len() as f64) * valid_fraction).round() as usize;
        let n_valid = n_valid.min(train.len().saturating_sub(1));
        let valid_idx: BTreeSet<usize> = order[..n_valid].iter().copied().collect();
        let (mut tr, mut va) = (Vec::new(), Vec::new());
        for (i, s) in train.into_iter().enumerate() {
            if valid_idx.contains(&i) {
                va.push(s);
            } else {
                tr.push(s);
            }
        }
        let max_len = tr.iter().map(|s| s.sentences.len()).max().unwrap_or(1);
        let vocab = Vocabulary::build(&tr, max_len);
        Ok(Self {
            train: encode_all(&tr, &vocab)?,
            valid: encode_all(&va, &vocab)?,
            test: encode_all(&test, &vocab)?,
            vocab,
        })
    }

    pub fn max_sentences(&self) -> usize {
        self.train
            .iter()
            .chain(&self.valid)
            .chain(&self.test)
            .map(|s| s.sentences.len())
            .max()
            .unwrap_or(0)
    }
}

/// Reads `qa{task}_*_train.txt` and `qa{task}_*_test.txt` from `dir`.
pub fn load_babi_task(dir: &Path, task: u32, max_sentences: usize) -> Result<(Vec<Story>, Vec<Story>), DataError> {
    let find = |split: &'static str| -> Result<PathBuf, DataError> {
        let prefix = format!("qa{task}_");
        let suffix = format!("_{split}.txt");
        let entries = fs::read_dir(dir).map_err(|source| DataError::Io { path: dir.to_path_buf(), source })?;
        let mut hits: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with(&prefix) && n.ends_with(&suffix))
            })
            .collect();
        hits.sort();
        hits.into_iter().next().ok_or(DataError::MissingFile { task, split, dir: dir.to_path_buf() })
    };
    let read = |path: PathBuf| -> Result<Vec<Story>, DataError> {
        let text = fs::read_to_string(&path).map_err(|source| DataError::Io { path, source })?;
        parse_babi(&text, max_sentences)
    };
    Ok((read(find("train")?)?, read(find("test")?)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticTask {
    /// "Where is X?" with one statement per actor.
    SingleFact,
    /// "Where is the O?" answered by chaining who holds O and where they went.
    TwoFact,
    /// Ten to twenty-four movements among six actors; actors move repeatedly so
    /// only the most recent mention answers. Trained dot similarities grow
    /// well past 32.
    WideSimilarity,
}

impl fmt::Display for SyntheticTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SyntheticTask::SingleFact => "single-fact",
            SyntheticTask::TwoFact => "two-fact",
            SyntheticTask::WideSimilarity => "wide-similarity",
        })
    }
}

impl FromStr for SyntheticTask {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "single-fact" => Ok(SyntheticTask::SingleFact),
            "two-fact" => Ok(SyntheticTask::TwoFact),
            "wide-similarity" => Ok(SyntheticTask::WideSimilarity),
            _ => Err(DataError::UnknownTask(s.to_string())),
        }
    }
}

const ACTORS: [&str; 6] = ["mary", "john", "daniel", "sandra", "fred", "julie"];
const PLACES: [&str; 8] = ["kitchen", "garden", "office", "hallway", "bedroom", "bathroom", "cinema", "park"];
const OBJECTS: [&str; 4] = ["apple", "football", "milk", "box"];

fn words(text: &str) -> Vec<String> {
    text.split(' ').map(str::to_string).collect()
}

/// Deterministic synthetic stories for `task`.
pub fn gen_synthetic(task: SyntheticTask, n_stories: usize, seed: u64) -> Vec<Story> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_stories)
        .map(|_| match task {
            SyntheticTask::SingleFact => single_fact(&mut rng),
            SyntheticTask::TwoFact => two_fact(&mut rng),
            SyntheticTask::WideSimilarity => wide_similarity(&mut rng),
        })
        .collect()
}

fn single_fact(rng: &mut ChaCha8Rng) -> Story {
    let n = rng.gen_range(2..=5);
    let actors: Vec<&str> = ACTORS.choose_multiple(rng, n).copied().collect();
    let places: Vec<&str> = (0..n).map(|_| *PLACES.choose(rng).unwrap()).collect();
    let target = rng.gen_range(0..n);
    Story {
        sentences: (0..n).map(|i| words(&format!("{} went to the {}", actors[i], places[i]))).collect(),
        question: words(&format!("where is {}", actors[target])),
        answer: places[target].to_string(),
        supporting: vec![target],
    }
}

fn two_fact(rng: &mut ChaCha8Rng) -> Story {
    let n = rng.gen_range(2..=3);
    let actors: Vec<&str> = ACTORS[..4].choose_multiple(rng, n).copied().collect();
    let objects: Vec<&str> = OBJECTS.choose_multiple(rng, n).copied().collect();
    let places: Vec<&str> = PLACES[..6].choose_multiple(rng, n).copied().collect();
    let mut facts: Vec<(Vec<String>, usize, bool)> = Vec::new();
    for i in 0..n {
        facts.push((words(&format!("{} went to the {}", actors[i], places[i])), i, false));
        facts.push((words(&format!("{} got the {}", actors[i], objects[i])), i, true));
    }
    facts.shuffle(rng);
    let target = rng.gen_range(0..n);
    let mut supporting: Vec<usize> = facts
        .iter()
        .enumerate()
        .filter(|(_, f)| f.1 == target)
        .map(|(j, _)| j)
        .collect();
    supporting.sort_unstable();
    Story {
        sentences: facts.into_iter().map(|f| f.0).collect(),
        question: words(&format!("where is the {}", objects[target])),
        answer: places[target].to_string(),
        supporting,
    }
}

const WIDE_ACTORS: [&str; 6] = ["mary", "john", "daniel", "sandra", "fred", "julie"];
const WIDE_ROUNDS: std::ops::RangeInclusive<usize> = 5..=12;

fn wide_similarity(rng: &mut ChaCha8Rng) -> Story {
    // Rounds of two movements; many actors reappear, so the newest mention
    // of the asked actor has to beat older ones by a clear margin.
    let n = 2 * rng.gen_range(WIDE_ROUNDS);
    let mut last = BTreeMap::new();
    let sentences: Vec<Vec<String>> = (0..n)
        .map(|i| {
            let actor = *WIDE_ACTORS.choose(rng).unwrap();
            let place = *PLACES.choose(rng).unwrap();
            last.insert(actor, (place, i));
            words(&format!("{actor} went to the {place}"))
        })
        .collect();
    let known: Vec<&str> = last.keys().copied().collect();
    let actor = *known.choose(rng).unwrap();
    let (place, support) = last[actor];
    Story {
        sentences,
        question: words(&format!("where is {actor}")),
        answer: place.to_string(),
        supporting: vec![support],
    }
}

const MOVES: [&str; 5] = ["moved to", "went to", "journeyed to", "travelled to", "went back to"];
const BABI_ACTORS: [&str; 4] = ["Mary", "John", "Daniel", "Sandra"];
const BABI_PLACES: [&str; 6] = ["bathroom", "bedroom", "garden", "hallway", "kitchen", "office"];

/// bAbI task 1 ("single supporting fact") in its native text format: stories
/// of five rounds, each two movement statements followed by a question about
/// an actor already mentioned. Produces `n_stories * 5` questions.
pub fn gen_babi_task1(n_stories: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::new();
    for _ in 0..n_stories {
        let mut id = 1;
        let mut location: BTreeMap<&str, (&str, usize)> = BTreeMap::new();
        for _ in 0..5 {
            for _ in 0..2 {
                let actor = *BABI_ACTORS.choose(&mut rng).unwrap();
                let place = *BABI_PLACES.choose(&mut rng).unwrap();
                let verb = *MOVES.choose(&mut rng).unwrap();
                out.push_str(&format!("{id} {actor} {verb} the {place}.\n"));
                location.insert(actor, (place, id));
                id += 1;
            }
            let known: Vec<&str> = location.keys().copied().collect();
            let actor = *known.choose(&mut rng).unwrap();
            let (place, support) = location[actor];
            out.push_str(&format!("{id} Where is {actor}? \t{place}\t{support}\n"));
            id += 1;
        }
    }
    out
}
