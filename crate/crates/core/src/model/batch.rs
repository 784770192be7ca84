use std::sync::Arc;

use crate::nncore::{Tensor, IGNORE_INDEX};
use crate::tasks::{DyckExample, ModAddExample, ScanExample, SCAN_BOS, SCAN_EOS, SCAN_PAD};

use super::{Arch, ModelConfig, ModelError};

/// How accuracy is counted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scoring {
    /// Every labelled position is one unit.
    PerPosition,
    /// An example counts only if every labelled position is right.
    ExactSequence,
}

/// Model input with aligned per-position targets.
#[derive(Clone, Debug)]
pub enum Batch {
    Decoder {
        tokens: Vec<usize>,
        batch: usize,
        len: usize,
        targets: Vec<usize>,
        scoring: Scoring,
    },
    /// Teacher-forced encoder-decoder batch. Exact-match accuracy under
    /// teacher forcing equals greedy-decoding exact match: a sequence whose
    /// every teacher-forced argmax is right decodes identically.
    Seq2Seq {
        src: Vec<usize>,
        src_len: usize,
        src_valid: Arc<Vec<bool>>,
        tgt_in: Vec<usize>,
        tgt_len: usize,
        targets: Vec<usize>,
        batch: usize,
    },
}

/// Summable loss/accuracy counters.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Metrics {
    pub loss_sum: f64,
    pub tokens: usize,
    pub correct: usize,
    pub units: usize,
}

impl Metrics {
    pub fn loss(&self) -> f64 {
        if self.tokens == 0 {
            0.0
        } else {
            self.loss_sum / self.tokens as f64
        }
    }

    pub fn accuracy(&self) -> f64 {
        if self.units == 0 {
            0.0
        } else {
            self.correct as f64 / self.units as f64
        }
    }

    pub fn merge(&mut self, other: &Metrics) {
        self.loss_sum += other.loss_sum;
        self.tokens += other.tokens;
        self.correct += other.correct;
        self.units += other.units;
    }
}

impl Batch {
    pub fn dyck(examples: &[DyckExample]) -> Self {
        let len = examples.first().map_or(0, |e| e.tokens.len());
        let mut tokens = Vec::with_capacity(examples.len() * len);
        let mut targets = Vec::with_capacity(examples.len() * len);
        for e in examples {
            assert_eq!(e.tokens.len(), len, "Dyck batches need equal lengths");
            tokens.extend_from_slice(&e.tokens);
            targets.extend_from_slice(&e.depths);
        }
        Batch::Decoder {
            tokens,
            batch: examples.len(),
            len,
            targets,
            scoring: Scoring::PerPosition,
        }
    }

    /// Sequence `a b =` with the residue as the only label.
    pub fn modadd(examples: &[ModAddExample], p: usize) -> Self {
        let mut tokens = Vec::with_capacity(examples.len() * 3);
        let mut targets = Vec::with_capacity(examples.len() * 3);
        for e in examples {
            tokens.extend([e.a, e.b, p]);
            targets.extend([IGNORE_INDEX, IGNORE_INDEX, e.target]);
        }
        Batch::Decoder {
            tokens,
            batch: examples.len(),
            len: 3,
            targets,
            scoring: Scoring::PerPosition,
        }
    }

    pub fn scan(examples: &[ScanExample]) -> Self {
        let b = examples.len();
        let s = examples.iter().map(|e| e.command.len()).max().unwrap_or(1);
        let t = examples.iter().map(|e| e.actions.len() + 1).max().unwrap_or(1);
        let mut src = vec![SCAN_PAD; b * s];
        let mut valid = vec![false; b * s];
        let mut tgt_in = vec![SCAN_PAD; b * t];
        let mut targets = vec![IGNORE_INDEX; b * t];
        for (i, e) in examples.iter().enumerate() {
            for (j, &c) in e.command.iter().enumerate() {
                src[i * s + j] = c;
                valid[i * s + j] = true;
            }
            tgt_in[i * t] = SCAN_BOS;
            for (j, &a) in e.actions.iter().enumerate() {
                tgt_in[i * t + j + 1] = a;
                targets[i * t + j] = a;
            }
            targets[i * t + e.actions.len()] = SCAN_EOS;
        }
        Batch::Seq2Seq {
            src,
            src_len: s,
            src_valid: Arc::new(valid),
            tgt_in,
            tgt_len: t,
            targets,
            batch: b,
        }
    }

    pub fn batch_size(&self) -> usize {
        match self {
            Batch::Decoder { batch, .. } | Batch::Seq2Seq { batch, .. } => *batch,
        }
    }

    /// Length of the sequence the logits are laid out over.
    pub fn out_len(&self) -> usize {
        match self {
            Batch::Decoder { len, .. } => *len,
            Batch::Seq2Seq { tgt_len, .. } => *tgt_len,
        }
    }

    pub fn targets(&self) -> &[usize] {
        match self {
            Batch::Decoder { targets, .. } | Batch::Seq2Seq { targets, .. } => targets,
        }
    }

    fn scoring(&self) -> Scoring {
        match self {
            Batch::Decoder { scoring, .. } => *scoring,
            Batch::Seq2Seq { .. } => Scoring::ExactSequence,
        }
    }

    pub(super) fn check(&self, cfg: &ModelConfig) -> Result<(), ModelError> {
        let vocab_check = |toks: &[usize], vocab: usize| {
            toks.iter()
                .find(|&&t| t >= vocab)
                .map_or(Ok(()), |&t| Err(ModelError::OutOfVocab { token: t, vocab }))
        };
        match (self, cfg.arch) {
            (Batch::Decoder { tokens, len, .. }, Arch::DecoderOnly) => {
                if *len > cfg.max_len {
                    return Err(ModelError::TooLong {
                        len: *len,
                        max: cfg.max_len,
                    });
                }
                vocab_check(tokens, cfg.vocab_in)
            }
            (
                Batch::Seq2Seq {
                    src,
                    src_len,
                    tgt_in,
                    tgt_len,
                    ..
                },
                Arch::EncoderDecoder,
            ) => {
                if *src_len > cfg.max_len {
                    return Err(ModelError::TooLong {
                        len: *src_len,
                        max: cfg.max_len,
                    });
                }
                if *tgt_len > cfg.max_tgt_len {
                    return Err(ModelError::TooLong {
                        len: *tgt_len,
                        max: cfg.max_tgt_len,
                    });
                }
                vocab_check(src, cfg.vocab_in)?;
                vocab_check(tgt_in, cfg.vocab_out)
            }
            _ => Err(ModelError::WrongBatch),
        }
    }

    /// Cross-entropy and accuracy counts for `logits` `[batch, len, vocab]`.
    pub fn score(&self, logits: &Tensor) -> Result<Metrics, ModelError> {
        let targets = self.targets();
        if logits.rows() != targets.len() {
            return Err(ModelError::Nn(crate::nncore::NnError::ShapeMismatch {
                op: "score",
                lhs: logits.shape().to_vec(),
                rhs: vec![targets.len()],
            }));
        }
        let mut m = Metrics::default();
        let len = self.out_len();
        let mut seq_ok = true;
        let mut seq_has = false;
        for (r, &t) in targets.iter().enumerate() {
            if t != IGNORE_INDEX {
                let row = logits.row(r);
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lz = row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln() + mx;
                m.loss_sum += lz - row[t];
                m.tokens += 1;
                let ok = argmax(row) == t;
                match self.scoring() {
                    Scoring::PerPosition => {
                        m.units += 1;
                        m.correct += ok as usize;
                    }
                    Scoring::ExactSequence => {
                        seq_ok &= ok;
                        seq_has = true;
                    }
                }
            }
            if self.scoring() == Scoring::ExactSequence && (r + 1) % len == 0 {
                if seq_has {
                    m.units += 1;
                    m.correct += seq_ok as usize;
                }
                seq_ok = true;
                seq_has = false;
            }
        }
        Ok(m)
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
