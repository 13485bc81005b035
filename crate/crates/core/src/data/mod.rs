//! Pair ingestion, match-graph identifier assignment, blocking statistics,
//! blocking-level splits and catalog persistence.
//!
//! A pair dataset only tells us which offers were compared and whether they
//! matched. Two graphs over the deduplicated offers recover the rest:
//! connected components of the *matching* edges are products, and connected
//! components of *all* edges are blockings.

mod synth;
mod union_find;

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

pub use synth::{generate_synthetic, NoiseConfig, SynthConfig};
pub use union_find::UnionFind;

pub const LEFT_COLUMN: &str = "title_left";
pub const RIGHT_COLUMN: &str = "title_right";
pub const LABEL_COLUMN: &str = "label";

pub const OFFERS_FILE: &str = "offers.jsonl";
pub const PAIRS_FILE: &str = "pairs.jsonl";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: missing required column `{column}`")]
    MissingColumn { path: PathBuf, column: String },
    #[error("{path}:{line}: {message}")]
    Row {
        path: PathBuf,
        line: u64,
        message: String,
    },
    #[error("{path}: malformed record: {message}")]
    Malformed { path: PathBuf, message: String },
    #[error("cannot split {0} blocking(s); at least 2 are required")]
    TooFewBlockings(usize),
    #[error("split fraction must lie strictly between 0 and 1, got {0}")]
    InvalidFraction(f64),
    #[error("empty pair sequence")]
    NoPairs,
    #[error("invalid catalog: {0}")]
    InvalidCatalog(String),
    #[error("invalid synthetic config: {0}")]
    InvalidSynthConfig(String),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

/// One labeled offer pair as read from a dataset file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRecord {
    pub left_title: String,
    pub right_title: String,
    pub label: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Offer {
    pub offer_id: usize,
    pub title: String,
    pub product_id: usize,
    pub blocking_id: usize,
}

/// A labeled comparison between two catalog offers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OfferPair {
    pub left: usize,
    pub right: usize,
    pub label: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OfferCatalog {
    pub offers: Vec<Offer>,
    pub pairs: Vec<OfferPair>,
    pub product_count: usize,
    pub blocking_count: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockingStats {
    pub avg_block_size: f64,
    pub std_block_size: f64,
    pub avg_pos_per_block: f64,
    pub std_pos_per_block: f64,
    pub avg_neg_per_block: f64,
    pub std_neg_per_block: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Delimiter {
    /// Tab if the header line contains a tab, comma otherwise.
    #[default]
    Auto,
    Tab,
    Comma,
}

/// NFC-normalizes and collapses internal whitespace runs to single spaces.
pub fn normalize_title(raw: &str) -> String {
    let nfc: String = raw.nfc().collect();
    nfc.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Reads a delimiter-separated pair file with `title_left`, `title_right`
/// and `label` columns.
pub fn parse_pairs(path: &Path, delimiter: Delimiter) -> Result<Vec<PairRecord>> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut reader = BufReader::new(file);
    let mut header = String::new();
    reader.read_line(&mut header).map_err(io_err(path))?;
    let delim = match delimiter {
        Delimiter::Tab => b'\t',
        Delimiter::Comma => b',',
        Delimiter::Auto if header.contains('\t') => b'\t',
        Delimiter::Auto => b',',
    };
    // Re-open so the csv reader sees the header line too.
    let file = File::open(path).map_err(io_err(path))?;
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(delim)
        .has_headers(true)
        .flexible(true)
        .from_reader(file);

    let headers = rdr.headers().map_err(|e| DataError::Malformed {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim().trim_start_matches('\u{feff}') == name)
            .ok_or_else(|| DataError::MissingColumn {
                path: path.to_path_buf(),
                column: name.to_string(),
            })
    };
    let left_col = column(LEFT_COLUMN)?;
    let right_col = column(RIGHT_COLUMN)?;
    let label_col = column(LABEL_COLUMN)?;

    let mut out = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            DataError::Row {
                path: path.to_path_buf(),
                line,
                message: e.to_string(),
            }
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let row_err = |message: String| DataError::Row {
            path: path.to_path_buf(),
            line,
            message,
        };
        let field = |idx: usize, name: &str| {
            record
                .get(idx)
                .ok_or_else(|| row_err(format!("missing value for `{name}`")))
        };
        let left = field(left_col, LEFT_COLUMN)?;
        let right = field(right_col, RIGHT_COLUMN)?;
        let label = match field(label_col, LABEL_COLUMN)?.trim() {
            "1" => true,
            "0" => false,
            other => return Err(row_err(format!("label must be 0 or 1, got `{other}`"))),
        };
        if left.trim().is_empty() {
            return Err(row_err(format!("empty `{LEFT_COLUMN}`")));
        }
        if right.trim().is_empty() {
            return Err(row_err(format!("empty `{RIGHT_COLUMN}`")));
        }
        out.push(PairRecord {
            left_title: left.to_string(),
            right_title: right.to_string(),
            label,
        });
    }
    Ok(out)
}

/// Deduplicates offers by normalized title and labels products and
/// blockings as connected components of the match graph and the full
/// comparison graph.
pub fn assign_ids(pairs: &[PairRecord]) -> Result<OfferCatalog> {
    if pairs.is_empty() {
        return Err(DataError::NoPairs);
    }
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut titles: Vec<String> = Vec::new();
    let mut intern = |raw: &str| {
        let key = normalize_title(raw);
        *index.entry(key.clone()).or_insert_with(|| {
            titles.push(key);
            titles.len() - 1
        })
    };
    let edges: Vec<OfferPair> = pairs
        .iter()
        .map(|p| OfferPair {
            left: intern(&p.left_title),
            right: intern(&p.right_title),
            label: p.label,
        })
        .collect();

    let n = titles.len();
    let mut products = UnionFind::new(n);
    let mut blockings = UnionFind::new(n);
    for e in &edges {
        blockings.union(e.left, e.right);
        if e.label {
            products.union(e.left, e.right);
        }
    }
    let (product_ids, product_count) = products.dense_labels();
    let (blocking_ids, blocking_count) = blockings.dense_labels();

    let offers = titles
        .into_iter()
        .enumerate()
        .map(|(offer_id, title)| Offer {
            offer_id,
            title,
            product_id: product_ids[offer_id],
            blocking_id: blocking_ids[offer_id],
        })
        .collect();
    Ok(OfferCatalog {
        offers,
        pairs: edges,
        product_count,
        blocking_count,
    })
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-query-offer blocking statistics: for each offer, positives are the
/// other offers of its product, negatives the offers of its blocking that
/// belong to other products. Averaged over all offers with population
/// standard deviations.
pub fn blocking_stats(catalog: &OfferCatalog) -> BlockingStats {
    let mut product_size: HashMap<usize, usize> = HashMap::new();
    let mut blocking_size: HashMap<usize, usize> = HashMap::new();
    for o in &catalog.offers {
        *product_size.entry(o.product_id).or_default() += 1;
        *blocking_size.entry(o.blocking_id).or_default() += 1;
    }
    let mut pos = Vec::with_capacity(catalog.offers.len());
    let mut neg = Vec::with_capacity(catalog.offers.len());
    let mut size = Vec::with_capacity(catalog.offers.len());
    for o in &catalog.offers {
        let p = product_size[&o.product_id];
        let b = blocking_size[&o.blocking_id];
        pos.push((p - 1) as f64);
        neg.push((b - p) as f64);
        size.push((b - 1) as f64);
    }
    if catalog.offers.is_empty() {
        return BlockingStats {
            avg_block_size: 0.0,
            std_block_size: 0.0,
            avg_pos_per_block: 0.0,
            std_pos_per_block: 0.0,
            avg_neg_per_block: 0.0,
            std_neg_per_block: 0.0,
        };
    }
    let (avg_block_size, std_block_size) = mean_std(&size);
    let (avg_pos_per_block, std_pos_per_block) = mean_std(&pos);
    let (avg_neg_per_block, std_neg_per_block) = mean_std(&neg);
    BlockingStats {
        avg_block_size,
        std_block_size,
        avg_pos_per_block,
        std_pos_per_block,
        avg_neg_per_block,
        std_neg_per_block,
    }
}

impl OfferCatalog {
    /// Checks the structural invariants; used after loading from disk.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DataError::InvalidCatalog(m));
        let mut product_blocking: HashMap<usize, usize> = HashMap::new();
        for (i, o) in self.offers.iter().enumerate() {
            if o.offer_id != i {
                return bad(format!("offer at position {i} has id {}", o.offer_id));
            }
            if o.product_id >= self.product_count || o.blocking_id >= self.blocking_count {
                return bad(format!("offer {i} has an out-of-range identifier"));
            }
            match product_blocking.insert(o.product_id, o.blocking_id) {
                Some(b) if b != o.blocking_id => {
                    return bad(format!("product {} spans two blockings", o.product_id))
                }
                _ => {}
            }
        }
        for p in &self.pairs {
            let (Some(l), Some(r)) = (self.offers.get(p.left), self.offers.get(p.right)) else {
                return bad(format!("pair ({}, {}) references a missing offer", p.left, p.right));
            };
            if l.blocking_id != r.blocking_id {
                return bad(format!("pair ({}, {}) crosses blockings", p.left, p.right));
            }
            if p.label && l.product_id != r.product_id {
                return bad(format!("matching pair ({}, {}) crosses products", p.left, p.right));
            }
        }
        Ok(())
    }

    /// Restricts the catalog to the given blockings, renumbering offers,
    /// products and blockings densely in original order.
    pub fn restrict_to_blockings(&self, keep: &[bool]) -> OfferCatalog {
        let mut offer_map = vec![usize::MAX; self.offers.len()];
        let mut product_map: HashMap<usize, usize> = HashMap::new();
        let mut blocking_map: HashMap<usize, usize> = HashMap::new();
        let mut offers = Vec::new();
        for o in &self.offers {
            if !keep[o.blocking_id] {
                continue;
            }
            let next_p = product_map.len();
            let product_id = *product_map.entry(o.product_id).or_insert(next_p);
            let next_b = blocking_map.len();
            let blocking_id = *blocking_map.entry(o.blocking_id).or_insert(next_b);
            offer_map[o.offer_id] = offers.len();
            offers.push(Offer {
                offer_id: offers.len(),
                title: o.title.clone(),
                product_id,
                blocking_id,
            });
        }
        let pairs = self
            .pairs
            .iter()
            .filter(|p| offer_map[p.left] != usize::MAX && offer_map[p.right] != usize::MAX)
            .map(|p| OfferPair {
                left: offer_map[p.left],
                right: offer_map[p.right],
                label: p.label,
            })
            .collect();
        OfferCatalog {
            offers,
            pairs,
            product_count: product_map.len(),
            blocking_count: blocking_map.len(),
        }
    }
}

/// Splits a catalog by blocking so that held-out blockings are unseen.
/// Returns `(train, held_out)`.
pub fn split(
    catalog: &OfferCatalog,
    val_fraction: f64,
    seed: u64,
) -> Result<(OfferCatalog, OfferCatalog)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(DataError::InvalidFraction(val_fraction));
    }
    let n = catalog.blocking_count;
    if n < 2 {
        return Err(DataError::TooFewBlockings(n));
    }
    let n_val = ((n as f64 * val_fraction).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut in_val = vec![false; n];
    for &b in &order[..n_val] {
        in_val[b] = true;
    }
    let in_train: Vec<bool> = in_val.iter().map(|v| !v).collect();
    Ok((
        catalog.restrict_to_blockings(&in_train),
        catalog.restrict_to_blockings(&in_val),
    ))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        let line = serde_json::to_string(row).expect("plain records serialize");
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| DataError::Row {
            path: path.to_path_buf(),
            line: i as u64 + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Writes `offers.jsonl` and `pairs.jsonl` into `dir`.
pub fn write_catalog(catalog: &OfferCatalog, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_jsonl(&dir.join(OFFERS_FILE), &catalog.offers)?;
    write_jsonl(&dir.join(PAIRS_FILE), &catalog.pairs)
}

pub fn read_catalog(dir: &Path) -> Result<OfferCatalog> {
    let offers: Vec<Offer> = read_jsonl(&dir.join(OFFERS_FILE))?;
    let pairs: Vec<OfferPair> = read_jsonl(&dir.join(PAIRS_FILE))?;
    let product_count = offers.iter().map(|o| o.product_id + 1).max().unwrap_or(0);
    let blocking_count = offers.iter().map(|o| o.blocking_id + 1).max().unwrap_or(0);
    let catalog = OfferCatalog {
        offers,
        pairs,
        product_count,
        blocking_count,
    };
    catalog.validate()?;
    Ok(catalog)
}

/// Writes pairs back out in the ingestion format (tab-separated).
pub fn write_pair_file(catalog: &OfferCatalog, path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .delimiter(b'\t')
        .from_path(path)
        .map_err(|e| DataError::Malformed {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    let wrap = |e: csv::Error| DataError::Malformed {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    w.write_record([LEFT_COLUMN, RIGHT_COLUMN, LABEL_COLUMN])
        .map_err(wrap)?;
    for p in &catalog.pairs {
        let label = if p.label { "1" } else { "0" };
        w.write_record([
            catalog.offers[p.left].title.as_str(),
            catalog.offers[p.right].title.as_str(),
            label,
        ])
        .map_err(wrap)?;
    }
    w.flush().map_err(io_err(path))
}
