//! Scored vocabulary snapshots.

use std::cmp::Ordering;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::store::{create, TermId, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankEntry {
    pub term: TermId,
    /// Set-expansion probability.
    pub p_set: f64,
    pub sy: Option<f64>,
    /// Present exactly when `sy` is.
    pub final_score: Option<f64>,
}

impl RankEntry {
    pub fn new(term: TermId, p_set: f64) -> Self {
        Self {
            term,
            p_set,
            sy: None,
            final_score: None,
        }
    }

    /// The score the list is ordered by: the fused score when present, else `p_set`.
    pub fn score(&self) -> f64 {
        self.final_score.unwrap_or(self.p_set)
    }
}

/// Entries sorted by descending score, ties broken by ascending term id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RankList {
    entries: Vec<RankEntry>,
    /// Terms that could not be scored.
    pub omitted: usize,
}

fn by_score(a: &RankEntry, b: &RankEntry) -> Ordering {
    b.score()
        .partial_cmp(&a.score())
        .unwrap_or(Ordering::Equal)
        .then(a.term.cmp(&b.term))
}

impl RankList {
    pub fn new(mut entries: Vec<RankEntry>, omitted: usize) -> Self {
        entries.sort_by(by_score);
        Self { entries, omitted }
    }

    /// Orders fused entries first (by final score), then the remaining entries by `p_set`.
    pub fn adjusted(entries: Vec<RankEntry>, omitted: usize) -> Self {
        let (mut fused, mut plain): (Vec<_>, Vec<_>) =
            entries.into_iter().partition(|e| e.final_score.is_some());
        fused.sort_by(by_score);
        plain.sort_by(by_score);
        fused.extend(plain);
        Self {
            entries: fused,
            omitted,
        }
    }

    pub fn entries(&self) -> &[RankEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn terms(&self) -> impl Iterator<Item = TermId> + '_ {
        self.entries.iter().map(|e| e.term)
    }

    pub fn get(&self, term: TermId) -> Option<&RankEntry> {
        self.entries.iter().find(|e| e.term == term)
    }

    /// Writes `rank<TAB>surface<TAB>p_set[<TAB>sy<TAB>final]`, ranks from 1.
    pub fn write_tsv(&self, path: &Path, vocab: &Vocabulary) -> Result<()> {
        let mut out = create(path)?;
        let io = |e| Error::io(path, e);
        for (i, e) in self.entries.iter().enumerate() {
            write!(out, "{}\t{}\t{}", i + 1, vocab.surface(e.term), e.p_set).map_err(io)?;
            if let (Some(sy), Some(f)) = (e.sy, e.final_score) {
                write!(out, "\t{sy}\t{f}").map_err(io)?;
            }
            writeln!(out).map_err(io)?;
        }
        out.flush().map_err(io)
    }

    /// Reads a list written by [`RankList::write_tsv`], keeping file order.
    pub fn read_tsv(path: &Path, vocab: &Vocabulary) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 && cols.len() != 5 {
                return Err(Error::parse(path, i + 1, "expected 3 or 5 columns"));
            }
            let term = vocab
                .lookup(cols[1])
                .ok_or_else(|| Error::UnknownSurface(cols[1].into()))?;
            let num = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| Error::parse(path, i + 1, format!("bad number {s:?}")))
            };
            let mut e = RankEntry::new(term, num(cols[2])?);
            if cols.len() == 5 {
                e.sy = Some(num(cols[3])?);
                e.final_score = Some(num(cols[4])?);
            }
            entries.push(e);
        }
        Ok(Self { entries, omitted: 0 })
    }
}
