//! Corpus ingestion, the train/unseen split, and forget-set sampling.
//!
//! A corpus is a plain UTF-8 text file, one sequence per line. One seeded
//! shuffle splits it into a training pool and an unseen pool; the unseen
//! pool anchors the forgetting threshold and must stay disjoint from
//! anything the model trains on, which the provenance tags enforce
//! downstream.

use std::path::Path;

use crate::error::{Result, UlabError};
use crate::lm::sequence::{SourceTag, TokenSequence};
use crate::lm::tokenizer::tokenize;
use crate::rng::Rng;

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| UlabError::io(path.display().to_string(), e))?;
    let lines: Vec<String> = text
        .lines()
        .map(str::trim_end)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    if lines.is_empty() {
        return Err(UlabError::Config(format!(
            "corpus {} has no non-empty lines",
            path.display()
        )));
    }
    Ok(lines)
}

/// Deterministic split: shuffle line indices under `seed`, first `n_train`
/// lines become the training pool, the rest the unseen pool. Sequence ids
/// are stable across split seeds (they come from the original line number).
pub fn split_corpus(
    lines: &[String],
    n_train: usize,
    seed: u64,
) -> Result<(Vec<TokenSequence>, Vec<TokenSequence>)> {
    if n_train == 0 || n_train >= lines.len() {
        return Err(UlabError::Config(format!(
            "split wants {n_train} training lines from a {}-line corpus; both pools must be non-empty",
            lines.len()
        )));
    }
    let mut order: Vec<usize> = (0..lines.len()).collect();
    Rng::new(seed).shuffle(&mut order);
    let seq = |idx: usize, tag: SourceTag| tokenize(format!("line-{idx:04}"), &lines[idx], tag);
    let train = order[..n_train]
        .iter()
        .map(|&i| seq(i, SourceTag::Train))
        .collect();
    let unseen = order[n_train..]
        .iter()
        .map(|&i| seq(i, SourceTag::Unseen))
        .collect();
    Ok((train, unseen))
}

/// Seeded sampling without replacement, one independent draw per replica.
/// Replicas may overlap each other; none can contain unseen-pool text
/// because they only ever see the training pool.
pub fn sample_forget_sets(
    train_pool: &[TokenSequence],
    size: usize,
    replicas: usize,
    seed: u64,
) -> Result<Vec<Vec<TokenSequence>>> {
    if size == 0 || size > train_pool.len() {
        return Err(UlabError::contract(format!(
            "forget-set size {size} out of range for a training pool of {}",
            train_pool.len()
        )));
    }
    if replicas == 0 {
        return Err(UlabError::contract("need at least one replica"));
    }
    let base = Rng::new(seed);
    let mut sets = Vec::with_capacity(replicas);
    for r in 0..replicas {
        let mut rng = base.fork(r as u64);
        let idx = rng.sample_indices(train_pool.len(), size);
        sets.push(idx.into_iter().map(|i| train_pool[i].clone()).collect());
    }
    Ok(sets)
}

const WORDS: [&str; 48] = [
    "amber", "basin", "cedar", "delta", "ember", "fjord", "gale", "harbor", "inlet", "jasper",
    "knoll", "lagoon", "meadow", "nectar", "orchid", "pebble", "quarry", "ridge", "summit",
    "thicket", "upland", "vale", "willow", "zephyr", "arbor", "brook", "cliff", "dune", "escarp",
    "fern", "grove", "heath", "isle", "juniper", "kelp", "loam", "mesa", "nook", "oasis", "prairie",
    "quartz", "reef", "shoal", "tarn", "alder", "birch", "cove", "drift",
];

/// Deterministic word-salad corpus. Lines share vocabulary (so sequences
/// share n-grams, as real forget sets do) but no two lines repeat under one
/// seed. Every line lands within two bytes of `target_len`.
pub fn synthetic_corpus(n_lines: usize, target_len: usize, seed: u64) -> Vec<String> {
    let mut rng = Rng::new(seed);
    let mut lines = Vec::with_capacity(n_lines);
    let mut seen = std::collections::HashSet::new();
    while lines.len() < n_lines {
        let mut line = String::new();
        while line.len() + 7 < target_len {
            if !line.is_empty() {
                line.push(' ');
            }
            line.push_str(WORDS[rng.below(WORDS.len())]);
        }
        while line.len() < target_len {
            line.push(['a', 'e', 'o', 's'][rng.below(4)]);
        }
        line.truncate(target_len);
        if seen.insert(line.clone()) {
            lines.push(line);
        }
    }
    lines
}
