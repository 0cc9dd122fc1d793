//! Byte-level corpus, contiguous train/validation split and batch sampling.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Byte vocabulary size.
pub const BYTE_VOCAB: usize = 256;

/// Token windows; `targets` is `inputs` shifted left by one token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub batch: usize,
    pub time: usize,
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
}

impl Batch {
    pub fn input_row(&self, b: usize) -> &[u32] {
        &self.inputs[b * self.time..(b + 1) * self.time]
    }

    pub fn target_row(&self, b: usize) -> &[u32] {
        &self.targets[b * self.time..(b + 1) * self.time]
    }

    fn from_starts(tokens: &[u8], starts: &[usize], time: usize) -> Self {
        let mut inputs = Vec::with_capacity(starts.len() * time);
        let mut targets = Vec::with_capacity(starts.len() * time);
        for &s in starts {
            inputs.extend(tokens[s..s + time].iter().map(|&t| t as u32));
            targets.extend(tokens[s + 1..s + time + 1].iter().map(|&t| t as u32));
        }
        Batch {
            batch: starts.len(),
            time,
            inputs,
            targets,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    tokens: Vec<u8>,
    source: Option<PathBuf>,
    train_end: usize,
    val_fraction: f64,
}

/// Split record written next to a run for reproducibility.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMetadata {
    pub source: Option<PathBuf>,
    pub total_tokens: usize,
    pub train_tokens: usize,
    pub val_tokens: usize,
    pub val_fraction: f64,
}

impl Corpus {
    /// The last `val_fraction` of the stream is held out for validation.
    pub fn from_bytes(tokens: Vec<u8>, val_fraction: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&val_fraction) {
            return Err(Error::config("data.val_fraction", "must lie in [0, 1)"));
        }
        if tokens.len() < 2 {
            return Err(Error::InsufficientData(format!(
                "corpus has {} tokens",
                tokens.len()
            )));
        }
        let val_len = (tokens.len() as f64 * val_fraction).round() as usize;
        let train_end = tokens.len() - val_len.min(tokens.len());
        Ok(Corpus {
            tokens,
            source: None,
            train_end,
            val_fraction,
        })
    }

    pub fn load(path: &Path, val_fraction: f64) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut corpus = Corpus::from_bytes(bytes, val_fraction)?;
        corpus.source = Some(path.to_path_buf());
        Ok(corpus)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[u8] {
        &self.tokens
    }

    pub fn train_tokens(&self) -> &[u8] {
        &self.tokens[..self.train_end]
    }

    pub fn val_tokens(&self) -> &[u8] {
        &self.tokens[self.train_end..]
    }

    pub fn metadata(&self) -> SplitMetadata {
        SplitMetadata {
            source: self.source.clone(),
            total_tokens: self.len(),
            train_tokens: self.train_end,
            val_tokens: self.len() - self.train_end,
            val_fraction: self.val_fraction,
        }
    }

    /// Fails unless the training range fits at least one window plus its
    /// shifted target.
    pub fn ensure_window(&self, context: usize) -> Result<()> {
        if context == 0 || self.train_end < context + 1 {
            return Err(Error::InsufficientData(format!(
                "training range of {} tokens cannot hold a window of {context} (+1)",
                self.train_end
            )));
        }
        Ok(())
    }

    /// `batch_size` windows with independently uniform starts inside the
    /// training range.
    pub fn sample_batch<R: Rng + ?Sized>(
        &self,
        batch_size: usize,
        context: usize,
        rng: &mut R,
    ) -> Result<Batch> {
        self.ensure_window(context)?;
        if batch_size == 0 {
            return Err(Error::config("trainer.batch_size", "must be >= 1"));
        }
        let max_start = self.train_end - context - 1;
        let starts: Vec<usize> = (0..batch_size)
            .map(|_| rng.gen_range(0..=max_start))
            .collect();
        Ok(Batch::from_starts(&self.tokens, &starts, context))
    }

    /// Non-overlapping windows tiling the validation range, grouped into
    /// batches of at most `batch_size`.
    pub fn validation_batches(&self, batch_size: usize, context: usize) -> Result<Vec<Batch>> {
        if batch_size == 0 || context == 0 {
            return Err(Error::InvalidInput("empty validation batch shape".into()));
        }
        let n = self.tokens.len();
        let mut starts = Vec::new();
        let mut s = self.train_end;
        while s + context < n {
            starts.push(s);
            s += context;
        }
        if starts.is_empty() {
            return Err(Error::InsufficientData(format!(
                "validation split of {} tokens holds no window of {context}",
                n - self.train_end
            )));
        }
        Ok(starts
            .chunks(batch_size)
            .map(|chunk| Batch::from_starts(&self.tokens, chunk, context))
            .collect())
    }
}
