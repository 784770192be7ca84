//! Deterministic dataset generators: Dyck-1 depth prediction, a mini-SCAN
//! fragment, and modular addition.
//!
//! Every dataset can be written as line-delimited text. The first line is a
//! `#` header (`task`, `split`, `seed`, field order); each following line is
//! one example with tab-separated fields:
//!
//! * Dyck: `tokens<TAB>depths`, tokens as `(`/`)` characters, depths as
//!   space-separated integers.
//! * SCAN: `command<TAB>actions`, both space-separated words.
//! * Mod-add: `a<TAB>b<TAB>target`.

use std::collections::HashSet;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TaskError {
    #[error("requested {requested} distinct Dyck words of length {len}, only {available} exist")]
    TooManyDyck {
        requested: usize,
        len: usize,
        available: u128,
    },
    #[error("Dyck length must be even and positive, got {0}")]
    OddLength(usize),
    #[error("grammar yields {available} pairs, split needs {requested}")]
    GrammarTooSmall { available: usize, requested: usize },
    #[error("{0} is not prime")]
    NotPrime(u64),
    #[error("train fraction {0} outside (0, 1)")]
    BadFraction(f64),
    #[error("cannot parse command `{0}`")]
    BadCommand(String),
    #[error("malformed line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Dyck,
    Scan,
    Modadd,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Dyck => "dyck",
            TaskKind::Scan => "scan",
            TaskKind::Modadd => "modadd",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<E> {
    pub task: TaskKind,
    pub split: Split,
    pub seed: u64,
    pub examples: Vec<E>,
}

impl<E> Dataset<E> {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// One example per line, fields in a fixed documented order.
pub trait LineRecord: Sized {
    const FIELDS: &'static str;
    fn to_line(&self) -> String;
    fn from_line(line: &str) -> Result<Self, String>;
}

impl<E: LineRecord> Dataset<E> {
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "# task={} split={} seed={} fields={}\n",
            self.task.name(),
            match self.split {
                Split::Train => "train",
                Split::Test => "test",
            },
            self.seed,
            E::FIELDS
        );
        for e in &self.examples {
            out.push_str(&e.to_line());
            out.push('\n');
        }
        out
    }

    pub fn from_text(task: TaskKind, text: &str) -> Result<Self, TaskError> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(TaskError::Parse {
            line: 1,
            msg: "empty file".into(),
        })?;
        let mut split = Split::Train;
        let mut seed = 0;
        for kv in header.trim_start_matches('#').split_whitespace() {
            match kv.split_once('=') {
                Some(("split", "test")) => split = Split::Test,
                Some(("seed", s)) => {
                    seed = s.parse().map_err(|_| TaskError::Parse {
                        line: 1,
                        msg: format!("bad seed `{s}`"),
                    })?
                }
                _ => {}
            }
        }
        let examples = lines
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| E::from_line(l).map_err(|msg| TaskError::Parse { line: i + 1, msg }))
            .collect::<Result<_, _>>()?;
        Ok(Dataset {
            task,
            split,
            seed,
            examples,
        })
    }
}

// ---------------------------------------------------------------- Dyck-1

pub const DYCK_OPEN: usize = 0;
pub const DYCK_CLOSE: usize = 1;
pub const DYCK_PAD: usize = 2;
pub const DYCK_VOCAB: usize = 3;
pub const DYCK_DEFAULT_LEN: usize = 24;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct DyckExample {
    pub tokens: Vec<usize>,
    pub depths: Vec<usize>,
}

impl DyckExample {
    pub fn from_tokens(tokens: Vec<usize>) -> Self {
        let depths = depth_profile(&tokens);
        Self { tokens, depths }
    }

    /// Parses a `(`/`)` string.
    pub fn parse(s: &str) -> Option<Self> {
        let tokens = s
            .chars()
            .map(|c| match c {
                '(' => Some(DYCK_OPEN),
                ')' => Some(DYCK_CLOSE),
                _ => None,
            })
            .collect::<Option<Vec<_>>>()?;
        Some(Self::from_tokens(tokens))
    }

    pub fn render(&self) -> String {
        self.tokens
            .iter()
            .map(|&t| if t == DYCK_OPEN { '(' } else { ')' })
            .collect()
    }

    pub fn is_balanced(&self) -> bool {
        let mut d: i64 = 0;
        for &t in &self.tokens {
            d += if t == DYCK_OPEN { 1 } else { -1 };
            if d < 0 {
                return false;
            }
        }
        d == 0
    }
}

/// Running depth after each token.
pub fn depth_profile(tokens: &[usize]) -> Vec<usize> {
    let mut d: i64 = 0;
    tokens
        .iter()
        .map(|&t| {
            d += if t == DYCK_OPEN { 1 } else { -1 };
            d.max(0) as usize
        })
        .collect()
}

impl LineRecord for DyckExample {
    const FIELDS: &'static str = "tokens,depths";

    fn to_line(&self) -> String {
        let mut s = self.render();
        s.push('\t');
        for (i, d) in self.depths.iter().enumerate() {
            if i > 0 {
                s.push(' ');
            }
            write!(s, "{d}").unwrap();
        }
        s
    }

    fn from_line(line: &str) -> Result<Self, String> {
        let (tok, dep) = line.split_once('\t').ok_or("missing tab")?;
        let ex = DyckExample::parse(tok).ok_or("bad token")?;
        let depths: Vec<usize> = dep
            .split_whitespace()
            .map(|d| d.parse().map_err(|_| format!("bad depth `{d}`")))
            .collect::<Result<_, _>>()?;
        if depths != ex.depths {
            return Err("depths disagree with tokens".into());
        }
        Ok(ex)
    }
}

/// Catalan number C_n: the count of Dyck words of length 2n.
pub fn catalan(n: usize) -> u128 {
    let mut c: u128 = 1;
    for i in 0..n as u128 {
        c = c * 2 * (2 * i + 1) / (i + 2);
    }
    c
}

/// Uniform Dyck word with `n` pairs via the cycle lemma: a random arrangement
/// of `n` opens and `n + 1` closes has exactly one rotation whose proper
/// prefixes stay nonnegative; dropping its final close yields the word.
pub fn sample_dyck_word(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut w: Vec<usize> = std::iter::repeat_n(DYCK_OPEN, n)
        .chain(std::iter::repeat_n(DYCK_CLOSE, n + 1))
        .collect();
    w.shuffle(rng);
    let mut sum = 0i64;
    let mut min = i64::MAX;
    let mut argmin = 0;
    for (i, &t) in w.iter().enumerate() {
        sum += if t == DYCK_OPEN { 1 } else { -1 };
        if sum < min {
            min = sum;
            argmin = i;
        }
    }
    w.rotate_left(argmin + 1);
    w.pop();
    w
}

/// `n` distinct uniformly sampled Dyck words of length `len`.
pub fn gen_dyck(n: usize, len: usize, seed: u64) -> Result<Vec<DyckExample>, TaskError> {
    if len == 0 || len % 2 == 1 {
        return Err(TaskError::OddLength(len));
    }
    let available = catalan(len / 2);
    if n as u128 > available {
        return Err(TaskError::TooManyDyck {
            requested: n,
            len,
            available,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::with_capacity(n);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let w = sample_dyck_word(&mut rng, len / 2);
        if seen.insert(w.clone()) {
            out.push(DyckExample::from_tokens(w));
        }
    }
    Ok(out)
}

/// Disjoint train/test Dyck splits (defaults 50/5000).
pub fn dyck_splits(
    n_train: usize,
    n_test: usize,
    len: usize,
    seed: u64,
) -> Result<(Dataset<DyckExample>, Dataset<DyckExample>), TaskError> {
    let mut all = gen_dyck(n_train + n_test, len, seed)?;
    let test = all.split_off(n_train);
    Ok((
        Dataset {
            task: TaskKind::Dyck,
            split: Split::Train,
            seed,
            examples: all,
        },
        Dataset {
            task: TaskKind::Dyck,
            split: Split::Test,
            seed,
            examples: test,
        },
    ))
}

// ---------------------------------------------------------------- mini-SCAN

/// Command vocabulary, index = token id. Version 1.
pub const SCAN_COMMAND_VOCAB: [&str; 11] = [
    "<pad>", "jump", "walk", "run", "look", "left", "right", "opposite", "twice", "thrice", "and",
];
/// Action vocabulary, index = token id. Version 1.
pub const SCAN_ACTION_VOCAB: [&str; 9] = [
    "<pad>", "<bos>", "<eos>", "JUMP", "WALK", "RUN", "LOOK", "LTURN", "RTURN",
];
pub const SCAN_VOCAB_VERSION: u32 = 1;
pub const SCAN_PAD: usize = 0;
pub const SCAN_BOS: usize = 1;
pub const SCAN_EOS: usize = 2;
pub const SCAN_TRAIN: usize = 2048;
pub const SCAN_TEST: usize = 500;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ScanExample {
    /// Command token ids into [`SCAN_COMMAND_VOCAB`].
    pub command: Vec<usize>,
    /// Action token ids into [`SCAN_ACTION_VOCAB`], without BOS/EOS.
    pub actions: Vec<usize>,
}

fn cmd_id(w: &str) -> Option<usize> {
    SCAN_COMMAND_VOCAB.iter().position(|&v| v == w)
}

fn act_id(w: &str) -> Option<usize> {
    SCAN_ACTION_VOCAB.iter().position(|&v| v == w)
}

fn parse_phrase(words: &[&str]) -> Option<Vec<&'static str>> {
    let (verb, mut rest) = words.split_first()?;
    let act = match *verb {
        "jump" => "JUMP",
        "walk" => "WALK",
        "run" => "RUN",
        "look" => "LOOK",
        _ => return None,
    };
    let mut turns: Vec<&'static str> = Vec::new();
    let mut opposite = false;
    if rest.first() == Some(&"opposite") {
        opposite = true;
        rest = &rest[1..];
    }
    match rest.first() {
        Some(&"left") | Some(&"right") => {
            let t = if rest[0] == "left" { "LTURN" } else { "RTURN" };
            turns.push(t);
            if opposite {
                turns.push(t);
            }
            rest = &rest[1..];
        }
        _ if opposite => return None,
        _ => {}
    }
    let reps = match rest {
        [] => 1,
        ["twice"] => 2,
        ["thrice"] => 3,
        _ => return None,
    };
    let mut unit = turns;
    unit.push(act);
    Some(unit.iter().cycle().take(unit.len() * reps).copied().collect())
}

/// Interprets a command of the mini-grammar: `phrase [and phrase]`, where a
/// phrase is `verb [[opposite] (left|right)] [twice|thrice]`. A direction
/// turns before acting, `opposite` turns twice, and repetition repeats the
/// whole turn-then-act unit.
pub fn grammar_oracle(command: &str) -> Result<Vec<&'static str>, TaskError> {
    let words: Vec<&str> = command.split_whitespace().collect();
    let bad = || TaskError::BadCommand(command.to_string());
    let parts: Vec<&[&str]> = words.split(|w| *w == "and").collect();
    if parts.is_empty() || parts.len() > 2 {
        return Err(bad());
    }
    let mut out = Vec::new();
    for p in parts {
        out.extend(parse_phrase(p).ok_or_else(bad)?);
    }
    Ok(out)
}

impl ScanExample {
    pub fn from_command(command: &str) -> Result<Self, TaskError> {
        let actions = grammar_oracle(command)?
            .into_iter()
            .map(|a| act_id(a).expect("oracle emits vocabulary words"))
            .collect();
        let command = command
            .split_whitespace()
            .map(|w| cmd_id(w).ok_or_else(|| TaskError::BadCommand(command.to_string())))
            .collect::<Result<_, _>>()?;
        Ok(Self { command, actions })
    }

    pub fn command_text(&self) -> String {
        self.command
            .iter()
            .map(|&i| SCAN_COMMAND_VOCAB[i])
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn action_text(&self) -> String {
        self.actions
            .iter()
            .map(|&i| SCAN_ACTION_VOCAB[i])
            .collect::<Vec<_>>()
            .join(" ")
    }
}

impl LineRecord for ScanExample {
    const FIELDS: &'static str = "command,actions";

    fn to_line(&self) -> String {
        format!("{}\t{}", self.command_text(), self.action_text())
    }

    fn from_line(line: &str) -> Result<Self, String> {
        let (c, a) = line.split_once('\t').ok_or("missing tab")?;
        let ex = ScanExample::from_command(c).map_err(|e| e.to_string())?;
        if ex.action_text() != a.trim() {
            return Err("actions disagree with grammar".into());
        }
        Ok(ex)
    }
}

/// All single phrases of the fragment, in a fixed order.
fn scan_phrases() -> Vec<String> {
    let mut out = Vec::new();
    for verb in ["jump", "walk", "run", "look"] {
        for dir in ["", " left", " right", " opposite left", " opposite right"] {
            for rep in ["", " twice", " thrice"] {
                out.push(format!("{verb}{dir}{rep}"));
            }
        }
    }
    out
}

/// Every command of the fragment: the 60 phrases, then `X and Y` pairs, until
/// at least `min_pairs` commands exist.
pub fn scan_grammar(min_pairs: usize) -> Vec<ScanExample> {
    let phrases = scan_phrases();
    let mut cmds: Vec<String> = phrases.clone();
    'outer: for x in &phrases {
        for y in &phrases {
            if cmds.len() >= min_pairs {
                break 'outer;
            }
            cmds.push(format!("{x} and {y}"));
        }
    }
    cmds.iter()
        .map(|c| ScanExample::from_command(c).expect("fragment commands parse"))
        .collect()
}

/// Seeded 2048/500 split of the mini-grammar.
pub fn gen_scan_lite(seed: u64) -> Result<(Dataset<ScanExample>, Dataset<ScanExample>), TaskError> {
    gen_scan_split(SCAN_TRAIN, SCAN_TEST, seed)
}

pub fn gen_scan_split(
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<(Dataset<ScanExample>, Dataset<ScanExample>), TaskError> {
    let need = n_train + n_test;
    let mut all = scan_grammar(need);
    if all.len() < need {
        return Err(TaskError::GrammarTooSmall {
            available: all.len(),
            requested: need,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    all.shuffle(&mut rng);
    all.truncate(need);
    let test = all.split_off(n_train);
    Ok((
        Dataset {
            task: TaskKind::Scan,
            split: Split::Train,
            seed,
            examples: all,
        },
        Dataset {
            task: TaskKind::Scan,
            split: Split::Test,
            seed,
            examples: test,
        },
    ))
}

// ---------------------------------------------------------------- mod-add

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ModAddExample {
    pub a: usize,
    pub b: usize,
    pub target: usize,
}

impl LineRecord for ModAddExample {
    const FIELDS: &'static str = "a,b,target";

    fn to_line(&self) -> String {
        format!("{}\t{}\t{}", self.a, self.b, self.target)
    }

    fn from_line(line: &str) -> Result<Self, String> {
        let v: Vec<usize> = line
            .split('\t')
            .map(|s| s.trim().parse().map_err(|_| format!("bad field `{s}`")))
            .collect::<Result<_, _>>()?;
        match v[..] {
            [a, b, target] => Ok(Self { a, b, target }),
            _ => Err("expected three fields".into()),
        }
    }
}

pub fn is_prime(p: u64) -> bool {
    p >= 2 && (2..).take_while(|d| d * d <= p).all(|d| !p.is_multiple_of(d))
}

/// All `p^2` pairs split by `train_frac` (train size rounds down).
pub fn gen_modadd(
    p: usize,
    train_frac: f64,
    seed: u64,
) -> Result<(Dataset<ModAddExample>, Dataset<ModAddExample>), TaskError> {
    if !is_prime(p as u64) {
        return Err(TaskError::NotPrime(p as u64));
    }
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(TaskError::BadFraction(train_frac));
    }
    let mut all: Vec<ModAddExample> = (0..p)
        .flat_map(|a| {
            (0..p).map(move |b| ModAddExample {
                a,
                b,
                target: (a + b) % p,
            })
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    all.shuffle(&mut rng);
    let n_train = (train_frac * all.len() as f64).floor() as usize;
    let test = all.split_off(n_train);
    Ok((
        Dataset {
            task: TaskKind::Modadd,
            split: Split::Train,
            seed,
            examples: all,
        },
        Dataset {
            task: TaskKind::Modadd,
            split: Split::Test,
            seed,
            examples: test,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn words(n: usize) -> Vec<String> {
        // brute-force enumeration of balanced strings of length 2n
        let mut out = Vec::new();
        for mask in 0u32..(1 << (2 * n)) {
            let toks: Vec<usize> = (0..2 * n).map(|i| ((mask >> i) & 1) as usize).collect();
            let ex = DyckExample::from_tokens(toks);
            if ex.is_balanced() {
                out.push(ex.render());
            }
        }
        out
    }

    #[test]
    fn depth_examples() {
        assert_eq!(DyckExample::parse("()").unwrap().depths, vec![1, 0]);
        assert_eq!(DyckExample::parse("(())").unwrap().depths, vec![1, 2, 1, 0]);
    }

    #[test]
    fn catalan_matches_enumeration() {
        for n in 1..=6 {
            assert_eq!(catalan(n), words(n).len() as u128);
        }
        assert_eq!(catalan(12), 208_012);
    }

    #[test]
    fn sampler_is_uniform_for_length_six() {
        let all = words(3);
        assert_eq!(all.len(), 5);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let draws = 100_000;
        let mut counts: HashMap<String, usize> = HashMap::new();
        for _ in 0..draws {
            let w = DyckExample::from_tokens(sample_dyck_word(&mut rng, 3));
            assert!(w.is_balanced());
            *counts.entry(w.render()).or_default() += 1;
        }
        assert_eq!(counts.len(), 5);
        let p = 0.2;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for w in &all {
            let c = counts[w] as f64;
            assert!((c - draws as f64 * p).abs() < 3.0 * sigma, "{w}: {c}");
        }
    }

    #[test]
    fn dyck_splits_are_valid_and_disjoint() {
        let (train, test) = dyck_splits(50, 5000, 24, 42).unwrap();
        assert_eq!((train.len(), test.len()), (50, 5000));
        let train_set: HashSet<_> = train.examples.iter().map(|e| e.tokens.clone()).collect();
        for e in train.examples.iter().chain(&test.examples) {
            assert_eq!(e.tokens.len(), 24);
            assert!(e.is_balanced());
            assert_eq!(*e.depths.last().unwrap(), 0);
            assert!(e.depths.iter().all(|&d| d <= 12));
        }
        assert!(test.examples.iter().all(|e| !train_set.contains(&e.tokens)));
        let (again, _) = dyck_splits(50, 5000, 24, 42).unwrap();
        assert_eq!(train, again);
    }

    #[test]
    fn dyck_errors() {
        assert!(matches!(gen_dyck(6, 6, 0), Err(TaskError::TooManyDyck { .. })));
        assert_eq!(gen_dyck(1, 5, 0), Err(TaskError::OddLength(5)));
    }

    #[test]
    fn scan_oracle_cases() {
        assert_eq!(grammar_oracle("jump").unwrap(), vec!["JUMP"]);
        assert_eq!(
            grammar_oracle("jump left twice").unwrap(),
            vec!["LTURN", "JUMP", "LTURN", "JUMP"]
        );
        assert_eq!(
            grammar_oracle("walk opposite right").unwrap(),
            vec!["RTURN", "RTURN", "WALK"]
        );
        assert_eq!(
            grammar_oracle("look and run right").unwrap(),
            vec!["LOOK", "RTURN", "RUN"]
        );
        assert!(grammar_oracle("jump opposite").is_err());
        assert!(grammar_oracle("fly").is_err());
    }

    #[test]
    fn scan_split_sizes_and_oracle_purity() {
        let (train, test) = gen_scan_lite(3).unwrap();
        assert_eq!((train.len(), test.len()), (2048, 500));
        let train_set: HashSet<_> = train.examples.iter().cloned().collect();
        assert!(test.examples.iter().all(|e| !train_set.contains(e)));
        for e in train.examples.iter().chain(&test.examples) {
            let again = ScanExample::from_command(&e.command_text()).unwrap();
            assert_eq!(&again, e);
        }
        assert!(matches!(
            gen_scan_split(5000, 500, 0),
            Err(TaskError::GrammarTooSmall { .. })
        ));
    }

    #[test]
    fn modadd_cases() {
        let (train, test) = gen_modadd(5, 0.5, 0).unwrap();
        let ex = train
            .examples
            .iter()
            .chain(&test.examples)
            .find(|e| e.a == 2 && e.b == 3)
            .unwrap();
        assert_eq!(ex.target, 0);
        let (train, test) = gen_modadd(97, 0.5, 1).unwrap();
        assert_eq!((train.len(), test.len()), (4704, 4705));
        assert!(train.examples.iter().chain(&test.examples).all(|e| e.target < 97));
        assert!(train
            .examples
            .iter()
            .chain(&test.examples)
            .any(|e| e.a == 96 && e.b == 1 && e.target == 0));
        assert_eq!(gen_modadd(91, 0.5, 0).unwrap_err(), TaskError::NotPrime(91));
    }

    #[test]
    fn text_format_roundtrip() {
        let (train, _) = dyck_splits(5, 5, 24, 1).unwrap();
        let back = Dataset::<DyckExample>::from_text(TaskKind::Dyck, &train.to_text()).unwrap();
        assert_eq!(back, train);
        let (s, _) = gen_scan_split(10, 5, 2).unwrap();
        let back = Dataset::<ScanExample>::from_text(TaskKind::Scan, &s.to_text()).unwrap();
        assert_eq!(back.examples, s.examples);
        let (m, _) = gen_modadd(5, 0.4, 2).unwrap();
        let back = Dataset::<ModAddExample>::from_text(TaskKind::Modadd, &m.to_text()).unwrap();
        assert_eq!(back.examples, m.examples);
    }
}
