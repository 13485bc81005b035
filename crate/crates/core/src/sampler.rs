//! Blocking-aware batch construction.
//!
//! A batch is a sequence of *groups*. Each group has one anchor offer, up to
//! `k` further offers of the anchor's product and, in blocking mode, up to
//! `q` offers of other products from the same blocking. Every blocking
//! contributes at most one group per batch, so the remaining batch members
//! are unrelated offers from other blockings. With blocking mode off, groups
//! carry only same-product offers and anchors are drawn across the whole
//! catalog.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::OfferCatalog;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SamplerError {
    #[error("catalog has no product with at least two offers")]
    NoAnchors,
    #[error("invalid sampler config: {0}")]
    InvalidConfig(String),
    #[error("a group of {group} offers does not fit in a batch of {target}")]
    GroupTooLarge { group: usize, target: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Maximum same-product offers per group besides the anchor.
    pub k: usize,
    /// Maximum same-blocking other-product offers per group.
    pub q: usize,
    pub target_batch_size: usize,
    pub blocking_mode: bool,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            k: 1,
            q: 16,
            target_batch_size: 64,
            blocking_mode: true,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), SamplerError> {
        if self.k < 1 {
            return Err(SamplerError::InvalidConfig("k must be at least 1".into()));
        }
        if self.target_batch_size < self.k + 1 {
            return Err(SamplerError::InvalidConfig(format!(
                "target_batch_size {} is smaller than k + 1 = {}",
                self.target_batch_size,
                self.k + 1
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProductEntry {
    pub product_id: usize,
    pub offers: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockingEntry {
    pub blocking_id: usize,
    pub products: Vec<ProductEntry>,
}

/// Position of an anchor-eligible product inside the index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct AnchorRef {
    pub blocking: usize,
    pub product: usize,
}

/// Immutable lookup `blocking -> product -> offers`, built once per catalog.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SamplerIndex {
    pub blockings: Vec<BlockingEntry>,
    /// Products with at least two offers.
    pub anchors: Vec<AnchorRef>,
}

impl SamplerIndex {
    pub fn build(catalog: &OfferCatalog) -> Result<Self, SamplerError> {
        let mut tree: BTreeMap<usize, BTreeMap<usize, Vec<usize>>> = BTreeMap::new();
        for o in &catalog.offers {
            tree.entry(o.blocking_id)
                .or_default()
                .entry(o.product_id)
                .or_default()
                .push(o.offer_id);
        }
        let blockings: Vec<BlockingEntry> = tree
            .into_iter()
            .map(|(blocking_id, products)| BlockingEntry {
                blocking_id,
                products: products
                    .into_iter()
                    .map(|(product_id, offers)| ProductEntry { product_id, offers })
                    .collect(),
            })
            .collect();
        let anchors: Vec<AnchorRef> = blockings
            .iter()
            .enumerate()
            .flat_map(|(b, entry)| {
                entry
                    .products
                    .iter()
                    .enumerate()
                    .filter(|(_, p)| p.offers.len() >= 2)
                    .map(move |(p, _)| AnchorRef { blocking: b, product: p })
            })
            .collect();
        if anchors.is_empty() {
            return Err(SamplerError::NoAnchors);
        }
        Ok(Self { blockings, anchors })
    }

    pub fn product(&self, a: AnchorRef) -> &ProductEntry {
        &self.blockings[a.blocking].products[a.product]
    }
}

/// Layout of one group inside a [`Batch`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GroupSpan {
    pub anchor_product: usize,
    pub start: usize,
    /// Same-product offers besides the anchor.
    pub positives: usize,
    /// Other-product offers from the anchor's blocking.
    pub negatives: usize,
}

impl GroupSpan {
    pub fn len(&self) -> usize {
        1 + self.positives + self.negatives
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Batch {
    pub offer_ids: Vec<usize>,
    pub product_ids: Vec<usize>,
    pub blocking_ids: Vec<usize>,
    pub groups: Vec<GroupSpan>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.offer_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offer_ids.is_empty()
    }
}

struct Group {
    offers: Vec<usize>,
    span: GroupSpan,
    product_id: usize,
    blocking_id: usize,
    negative_products: Vec<usize>,
}

fn build_group(
    index: &SamplerIndex,
    config: &SamplerConfig,
    anchor: AnchorRef,
    rng: &mut ChaCha8Rng,
) -> Group {
    let blocking = &index.blockings[anchor.blocking];
    let product = &blocking.products[anchor.product];
    let mut same = product.offers.clone();
    same.shuffle(rng);
    same.truncate(config.k + 1);
    let positives = same.len() - 1;

    let mut negatives: Vec<(usize, usize)> = Vec::new();
    if config.blocking_mode && config.q > 0 {
        let pool: Vec<(usize, usize)> = blocking
            .products
            .iter()
            .enumerate()
            .filter(|(p, _)| *p != anchor.product)
            .flat_map(|(_, p)| p.offers.iter().map(move |&o| (o, p.product_id)))
            .collect();
        negatives = pool.choose_multiple(rng, config.q.min(pool.len())).copied().collect();
    }
    let span = GroupSpan {
        anchor_product: product.product_id,
        start: 0,
        positives,
        negatives: negatives.len(),
    };
    let (neg_offers, neg_products): (Vec<usize>, Vec<usize>) = negatives.into_iter().unzip();
    same.extend(neg_offers);
    Group {
        offers: same,
        span,
        product_id: product.product_id,
        blocking_id: blocking.blocking_id,
        negative_products: neg_products,
    }
}

fn push_group(batch: &mut Batch, mut g: Group) {
    g.span.start = batch.len();
    let n_same = 1 + g.span.positives;
    for (i, &o) in g.offers.iter().enumerate() {
        batch.offer_ids.push(o);
        batch.product_ids.push(if i < n_same {
            g.product_id
        } else {
            g.negative_products[i - n_same]
        });
        batch.blocking_ids.push(g.blocking_id);
    }
    batch.groups.push(g.span);
}

/// Fills one batch from `queue` (anchors in preference order). Consumed
/// anchors are removed from the queue. Stops at the first group that would
/// overflow the target size.
fn fill_from_queue(
    index: &SamplerIndex,
    config: &SamplerConfig,
    queue: &mut Vec<AnchorRef>,
    rng: &mut ChaCha8Rng,
) -> Result<Batch, SamplerError> {
    let mut batch = Batch::default();
    let mut used_blocking = vec![false; index.blockings.len()];
    let mut taken = vec![false; queue.len()];
    for (pos, &anchor) in queue.iter().enumerate() {
        if config.blocking_mode && used_blocking[anchor.blocking] {
            continue;
        }
        let group = build_group(index, config, anchor, rng);
        if batch.len() + group.offers.len() > config.target_batch_size {
            if batch.is_empty() {
                return Err(SamplerError::GroupTooLarge {
                    group: group.offers.len(),
                    target: config.target_batch_size,
                });
            }
            break;
        }
        used_blocking[anchor.blocking] = true;
        taken[pos] = true;
        push_group(&mut batch, group);
    }
    let mut it = taken.iter();
    queue.retain(|_| !*it.next().unwrap());
    Ok(batch)
}

/// Draws one batch. Identical `(index, config, rng state)` give identical
/// batches.
pub fn next_batch(
    index: &SamplerIndex,
    config: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Batch, SamplerError> {
    config.validate()?;
    let mut queue: Vec<AnchorRef> = if config.blocking_mode {
        // one uniformly drawn eligible product per blocking, blockings in random order
        let mut per_blocking: BTreeMap<usize, Vec<AnchorRef>> = BTreeMap::new();
        for &a in &index.anchors {
            per_blocking.entry(a.blocking).or_default().push(a);
        }
        let mut blocks: Vec<Vec<AnchorRef>> = per_blocking.into_values().collect();
        blocks.shuffle(rng);
        blocks
            .into_iter()
            .map(|c| c[rng.gen_range(0..c.len())])
            .collect()
    } else {
        let mut all = index.anchors.clone();
        all.shuffle(rng);
        all
    };
    fill_from_queue(index, config, &mut queue, rng)
}

/// One epoch: every anchor-eligible product is used as an anchor exactly
/// once, in a seeded permutation. The last batch may be smaller.
pub fn epoch_plan(
    index: &SamplerIndex,
    config: &SamplerConfig,
    epoch_seed: u64,
) -> Result<Vec<Batch>, SamplerError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
    let mut queue = index.anchors.clone();
    queue.shuffle(&mut rng);
    let mut plan = Vec::new();
    while !queue.is_empty() {
        plan.push(fill_from_queue(index, config, &mut queue, &mut rng)?);
    }
    Ok(plan)
}

/// Number of (same-product, other-product) offers each element sees in the
/// batch, besides itself.
pub fn positive_negative_counts(batch: &Batch) -> Vec<(usize, usize)> {
    let n = batch.len();
    batch
        .product_ids
        .iter()
        .map(|p| {
            let same = batch.product_ids.iter().filter(|x| *x == p).count() - 1;
            (same, n - 1 - same)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{assign_ids, Offer, PairRecord};

    fn offer(id: usize, product: usize, blocking: usize) -> Offer {
        Offer {
            offer_id: id,
            title: format!("o{id}"),
            product_id: product,
            blocking_id: blocking,
        }
    }

    /// Blockings each holding product sizes from `shape`.
    fn catalog(blockings: usize, shape: &[usize]) -> OfferCatalog {
        let mut offers = Vec::new();
        let mut product = 0;
        for b in 0..blockings {
            for &n in shape {
                for _ in 0..n {
                    offers.push(offer(offers.len(), product, b));
                }
                product += 1;
            }
        }
        OfferCatalog {
            offers,
            pairs: vec![],
            product_count: product,
            blocking_count: blockings,
        }
    }

    #[test]
    fn index_from_pairs() {
        let pairs = [
            PairRecord { left_title: "A".into(), right_title: "B".into(), label: true },
            PairRecord { left_title: "A".into(), right_title: "C".into(), label: false },
        ];
        let c = assign_ids(&pairs).unwrap();
        let idx = SamplerIndex::build(&c).unwrap();
        assert_eq!(idx.blockings.len(), 1);
        assert_eq!(idx.blockings[0].products.len(), 2);
        assert_eq!(idx.blockings[0].products[0].offers, vec![0, 1]);
        assert_eq!(idx.anchors.len(), 1);
        assert_eq!(idx, SamplerIndex::build(&c).unwrap());
    }

    #[test]
    fn singletons_only_is_an_error() {
        let c = catalog(3, &[1, 1]);
        assert_eq!(SamplerIndex::build(&c), Err(SamplerError::NoAnchors));
    }

    #[test]
    fn two_blockings_two_groups() {
        // two blockings each {P: 3 offers, Q: 2 offers}; k = 1, q = 2, target 8
        let c = catalog(2, &[3, 2]);
        let idx = SamplerIndex::build(&c).unwrap();
        let cfg = SamplerConfig { k: 1, q: 2, target_batch_size: 8, blocking_mode: true, seed: 0 };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = next_batch(&idx, &cfg, &mut rng).unwrap();
        assert_eq!(b.len(), 8);
        assert_eq!(b.groups.len(), 2);
        for g in &b.groups {
            assert_eq!((g.positives, g.negatives), (1, 2));
        }
        assert_ne!(b.blocking_ids[0], b.blocking_ids[4]);
    }

    #[test]
    fn positives_capped_by_availability() {
        let c = catalog(1, &[2, 3]);
        let idx = SamplerIndex::build(&c).unwrap();
        let cfg = SamplerConfig { k: 4, q: 0, target_batch_size: 16, blocking_mode: true, seed: 0 };
        let plan = epoch_plan(&idx, &cfg, 0).unwrap();
        for b in &plan {
            let g = b.groups[0];
            let size = c.offers.iter().filter(|o| o.product_id == g.anchor_product).count();
            assert_eq!(g.positives, size - 1);
        }
    }

    #[test]
    fn q_zero_has_no_same_blocking_negatives() {
        let c = catalog(4, &[3, 3, 3]);
        let idx = SamplerIndex::build(&c).unwrap();
        let cfg = SamplerConfig { k: 2, q: 0, target_batch_size: 64, blocking_mode: true, seed: 0 };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let b = next_batch(&idx, &cfg, &mut rng).unwrap();
        assert!(b.groups.iter().all(|g| g.negatives == 0));
        // composition equals a vanilla group: anchor plus k same-product offers
        assert!(b.groups.iter().all(|g| g.len() == 3));
        let mut blockings = b.blocking_ids.clone();
        blockings.dedup();
        assert_eq!(blockings.len(), 4);
    }

    #[test]
    fn epoch_plan_cardinality_and_coverage() {
        // ten blockings, each with one eligible product (2 offers) and two singletons
        let c = catalog(10, &[2, 1, 1]);
        let idx = SamplerIndex::build(&c).unwrap();
        assert_eq!(idx.anchors.len(), 10);
        let cfg = SamplerConfig { k: 1, q: 2, target_batch_size: 16, blocking_mode: true, seed: 0 };
        let plan = epoch_plan(&idx, &cfg, 5).unwrap();
        assert_eq!(plan.len(), 3);
        assert_eq!(plan.iter().map(Batch::len).collect::<Vec<_>>(), vec![16, 16, 8]);
        let mut anchors: Vec<usize> = plan
            .iter()
            .flat_map(|b| b.groups.iter().map(|g| g.anchor_product))
            .collect();
        anchors.sort();
        let mut expected: Vec<usize> = idx.anchors.iter().map(|&a| idx.product(a).product_id).collect();
        expected.sort();
        assert_eq!(anchors, expected);
        assert_eq!(plan, epoch_plan(&idx, &cfg, 5).unwrap());
        assert_ne!(plan, epoch_plan(&idx, &cfg, 6).unwrap());
    }

    #[test]
    fn vanilla_mode_groups_are_same_product_only() {
        let c = catalog(3, &[4, 4, 4]);
        let idx = SamplerIndex::build(&c).unwrap();
        let cfg = SamplerConfig { k: 1, q: 16, target_batch_size: 8, blocking_mode: false, seed: 0 };
        let plan = epoch_plan(&idx, &cfg, 1).unwrap();
        // nine anchors in groups of two: 4 + 4 + 1 groups
        assert_eq!(plan.iter().map(Batch::len).collect::<Vec<_>>(), vec![8, 8, 2]);
        for b in &plan {
            assert!(b.groups.iter().all(|g| g.negatives == 0 && g.positives == 1));
        }
    }

    #[test]
    fn group_too_large() {
        let c = catalog(1, &[5, 5]);
        let idx = SamplerIndex::build(&c).unwrap();
        let cfg = SamplerConfig { k: 2, q: 5, target_batch_size: 4, blocking_mode: true, seed: 0 };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            next_batch(&idx, &cfg, &mut rng),
            Err(SamplerError::GroupTooLarge { group: 8, target: 4 })
        );
        let bad = SamplerConfig { k: 0, ..cfg };
        assert!(matches!(bad.validate(), Err(SamplerError::InvalidConfig(_))));
    }

    #[test]
    fn counts_partition_the_batch() {
        let c = catalog(3, &[3, 2, 4]);
        let idx = SamplerIndex::build(&c).unwrap();
        let cfg = SamplerConfig { k: 2, q: 3, target_batch_size: 20, blocking_mode: true, seed: 0 };
        for b in epoch_plan(&idx, &cfg, 11).unwrap() {
            for (p, n) in positive_negative_counts(&b) {
                assert_eq!(p + n, b.len() - 1);
            }
        }
    }
}
