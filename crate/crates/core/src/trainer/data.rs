use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::model::Batch;
use crate::tasks::{self, DyckExample, ModAddExample, ScanExample, TaskKind};

use super::{RunConfig, TrainError};

/// Materialized train/test splits for one run.
#[derive(Clone, Debug)]
pub enum TaskData {
    Dyck {
        train: Vec<DyckExample>,
        test: Vec<DyckExample>,
    },
    Scan {
        train: Vec<ScanExample>,
        test: Vec<ScanExample>,
    },
    Modadd {
        p: usize,
        train: Vec<ModAddExample>,
        test: Vec<ModAddExample>,
    },
}

impl TaskData {
    pub fn generate(cfg: &RunConfig) -> Result<Self, TrainError> {
        let d = &cfg.data;
        let seed = d.seed.unwrap_or(cfg.seed);
        Ok(match cfg.task {
            TaskKind::Dyck => {
                let (train, test) = tasks::dyck_splits(d.n_train, d.n_test, d.seq_len, seed)?;
                TaskData::Dyck {
                    train: train.examples,
                    test: test.examples,
                }
            }
            TaskKind::Scan => {
                let (train, test) = tasks::gen_scan_split(d.n_train, d.n_test, seed)?;
                TaskData::Scan {
                    train: train.examples,
                    test: test.examples,
                }
            }
            TaskKind::Modadd => {
                let (train, test) = tasks::gen_modadd(d.modulus, d.train_frac, seed)?;
                TaskData::Modadd {
                    p: d.modulus,
                    train: train.examples,
                    test: test.examples,
                }
            }
        })
    }

    pub fn n_train(&self) -> usize {
        match self {
            TaskData::Dyck { train, .. } => train.len(),
            TaskData::Scan { train, .. } => train.len(),
            TaskData::Modadd { train, .. } => train.len(),
        }
    }

    pub fn n_test(&self) -> usize {
        match self {
            TaskData::Dyck { test, .. } => test.len(),
            TaskData::Scan { test, .. } => test.len(),
            TaskData::Modadd { test, .. } => test.len(),
        }
    }

    fn batch_of(&self, train: bool, idx: &[usize]) -> Batch {
        match self {
            TaskData::Dyck { train: tr, test } => {
                let src = if train { tr } else { test };
                Batch::dyck(&idx.iter().map(|&i| src[i].clone()).collect::<Vec<_>>())
            }
            TaskData::Scan { train: tr, test } => {
                let src = if train { tr } else { test };
                Batch::scan(&idx.iter().map(|&i| src[i].clone()).collect::<Vec<_>>())
            }
            TaskData::Modadd { p, train: tr, test } => {
                let src = if train { tr } else { test };
                Batch::modadd(&idx.iter().map(|&i| src[i]).collect::<Vec<_>>(), *p)
            }
        }
    }

    /// Fixed gradient batches: the whole training set when `batch_size` is
    /// `None`, otherwise a seeded partition reused cyclically.
    pub fn train_batches(&self, batch_size: Option<usize>, seed: u64) -> Vec<Batch> {
        let n = self.n_train();
        let mut idx: Vec<usize> = (0..n).collect();
        match batch_size {
            None => vec![self.batch_of(true, &idx)],
            Some(bs) => {
                idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ba7c));
                idx.chunks(bs.max(1)).map(|c| self.batch_of(true, c)).collect()
            }
        }
    }

    /// Full training set in evaluation-sized chunks.
    pub fn train_eval_batches(&self, chunk: usize) -> Vec<Batch> {
        let idx: Vec<usize> = (0..self.n_train()).collect();
        idx.chunks(chunk.max(1)).map(|c| self.batch_of(true, c)).collect()
    }

    /// The first `limit` test examples (all when `None`) in chunks.
    pub fn test_batches(&self, limit: Option<usize>, chunk: usize) -> Vec<Batch> {
        let n = limit.map_or(self.n_test(), |l| l.min(self.n_test()));
        let idx: Vec<usize> = (0..n).collect();
        idx.chunks(chunk.max(1)).map(|c| self.batch_of(false, c)).collect()
    }
}
