use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const BLANK: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const PAD: usize = 3;
pub const RESERVED: usize = 4;

const RESERVED_NAMES: [&str; RESERVED] = ["<blank>", "<bos>", "<eos>", "<pad>"];

/// Bijective gloss vocabulary. Indices below [`RESERVED`] are special
/// tokens; gloss `k` in insertion order has index `k + RESERVED`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Codebook {
    glosses: Vec<String>,
    index: HashMap<String, usize>,
}

impl Codebook {
    pub fn new<S: AsRef<str>>(glosses: impl IntoIterator<Item = S>) -> Result<Self> {
        let mut cb = Self::default();
        for g in glosses {
            cb.insert(g.as_ref())?;
        }
        Ok(cb)
    }

    fn insert(&mut self, gloss: &str) -> Result<usize> {
        if gloss.is_empty() || gloss.chars().any(char::is_whitespace) {
            return Err(Error::Codebook(format!("invalid gloss {gloss:?}")));
        }
        if RESERVED_NAMES.contains(&gloss) {
            return Err(Error::Codebook(format!("{gloss} is a reserved token")));
        }
        if self.index.contains_key(gloss) {
            return Err(Error::Codebook(format!("duplicate gloss {gloss}")));
        }
        let idx = self.glosses.len() + RESERVED;
        self.glosses.push(gloss.to_string());
        self.index.insert(gloss.to_string(), idx);
        Ok(idx)
    }

    /// Total size including reserved tokens.
    pub fn len(&self) -> usize {
        self.glosses.len() + RESERVED
    }

    pub fn num_glosses(&self) -> usize {
        self.glosses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.glosses.is_empty()
    }

    pub fn index_of(&self, gloss: &str) -> Result<usize> {
        self.index
            .get(gloss)
            .copied()
            .ok_or_else(|| Error::Codebook(format!("unknown gloss {gloss}")))
    }

    pub fn gloss(&self, index: usize) -> Result<&str> {
        if index < RESERVED {
            return Ok(RESERVED_NAMES[index]);
        }
        self.glosses
            .get(index - RESERVED)
            .map(String::as_str)
            .ok_or_else(|| Error::Codebook(format!("index {index} outside codebook of {}", self.len())))
    }

    pub fn is_gloss(&self, index: usize) -> bool {
        (RESERVED..self.len()).contains(&index)
    }

    pub fn check(&self, index: usize) -> Result<()> {
        if index >= self.len() {
            return Err(Error::Codebook(format!(
                "index {index} outside codebook of {}",
                self.len()
            )));
        }
        Ok(())
    }

    pub fn encode(&self, glosses: &[&str]) -> Result<Vec<usize>> {
        glosses.iter().map(|g| self.index_of(g)).collect()
    }

    pub fn decode(&self, indices: &[usize]) -> Result<Vec<String>> {
        indices.iter().map(|&i| self.gloss(i).map(str::to_string)).collect()
    }

    pub fn glosses(&self) -> &[String] {
        &self.glosses
    }

    /// One gloss per line, in index order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for g in &self.glosses {
            s.push_str(g);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cb = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.is_empty() {
                continue;
            }
            cb.insert(line)
                .map_err(|e| Error::Codebook(format!("line {}: {e}", n + 1)))?;
        }
        Ok(cb)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}
