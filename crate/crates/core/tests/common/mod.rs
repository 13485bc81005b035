#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use blockscl::data::{OfferCatalog, PairRecord};
use blockscl::sampler::{positive_negative_counts, Batch, SamplerConfig};
use blockscl::numerics::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type Partition = BTreeSet<BTreeSet<String>>;

/// Random labeled pairs over titles `t0..t{n-1}`.
pub fn random_pairs(rng: &mut ChaCha8Rng, n_offers: usize, n_pairs: usize, match_p: f64) -> Vec<PairRecord> {
    (0..n_pairs)
        .map(|_| {
            let a = rng.gen_range(0..n_offers);
            let mut b = rng.gen_range(0..n_offers);
            if b == a {
                b = (a + 1) % n_offers;
            }
            PairRecord {
                left_title: format!("t{a}"),
                right_title: format!("t{b}"),
                label: rng.gen_bool(match_p),
            }
        })
        .collect()
}

/// Connected components as reachability sets, one graph search per offer.
pub fn closure_partition(pairs: &[PairRecord], matches_only: bool) -> Partition {
    let mut names: Vec<String> = pairs
        .iter()
        .flat_map(|p| [p.left_title.clone(), p.right_title.clone()])
        .collect();
    names.sort();
    names.dedup();
    let idx: BTreeMap<&str, usize> = names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let n = names.len();
    let mut adj = vec![Vec::new(); n];
    for p in pairs {
        if matches_only && !p.label {
            continue;
        }
        let (a, b) = (idx[p.left_title.as_str()], idx[p.right_title.as_str()]);
        adj[a].push(b);
        adj[b].push(a);
    }
    (0..n)
        .map(|start| {
            let mut seen = vec![false; n];
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(u) = stack.pop() {
                for &v in &adj[u] {
                    if !seen[v] {
                        seen[v] = true;
                        stack.push(v);
                    }
                }
            }
            (0..n).filter(|&j| seen[j]).map(|j| names[j].clone()).collect()
        })
        .collect()
}

/// Groups catalog titles by product id (`by_product`) or blocking id.
pub fn catalog_partition(catalog: &OfferCatalog, by_product: bool) -> Partition {
    let mut groups: BTreeMap<usize, BTreeSet<String>> = BTreeMap::new();
    for o in &catalog.offers {
        let key = if by_product { o.product_id } else { o.blocking_id };
        groups.entry(key).or_default().insert(o.title.clone());
    }
    groups.into_values().collect()
}

/// Every block of `fine` lies inside one block of `coarse`.
pub fn refines(fine: &Partition, coarse: &Partition) -> bool {
    fine.iter().all(|f| coarse.iter().any(|c| f.is_subset(c)))
}

/// Contrastive loss straight from the formula, no shifting.
pub fn naive_scl(z: &Tensor<f64>, ids: &[usize], tau: f64) -> f64 {
    let b = z.rows();
    let dot = |i: usize, j: usize| z.row(i).iter().zip(z.row(j)).map(|(a, b)| a * b).sum::<f64>();
    let mut total = 0.0;
    let mut anchors = 0;
    for i in 0..b {
        let pos: Vec<usize> = (0..b).filter(|&j| j != i && ids[j] == ids[i]).collect();
        if pos.is_empty() {
            continue;
        }
        anchors += 1;
        let denom: f64 = (0..b).filter(|&j| j != i).map(|j| (dot(i, j) / tau).exp()).sum();
        let term: f64 = pos.iter().map(|&p| -((dot(i, p) / tau).exp() / denom).ln()).sum();
        total += term / pos.len() as f64;
    }
    total / anchors as f64
}

pub fn unit_rows(b: usize, d: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let rows: Vec<Vec<f64>> = (0..b)
        .map(|_| {
            let r: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.iter().map(|v| v / n).collect()
        })
        .collect();
    Tensor::from_rows(&rows).unwrap()
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap());
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            r[o] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

/// Checks a batch against the catalog it was drawn from.
pub fn check_batch(batch: &Batch, catalog: &OfferCatalog, cfg: &SamplerConfig) -> Result<(), String> {
    let n = batch.len();
    ensure!(n > 0 && n <= cfg.target_batch_size, "batch size {n}");
    let mut seen = std::collections::HashSet::new();
    for (i, &o) in batch.offer_ids.iter().enumerate() {
        ensure!(seen.insert(o), "offer {o} twice");
        ensure!(batch.product_ids[i] == catalog.offers[o].product_id, "product id of element {i}");
        ensure!(batch.blocking_ids[i] == catalog.offers[o].blocking_id, "blocking id of element {i}");
    }
    for (i, (p, q)) in positive_negative_counts(batch).into_iter().enumerate() {
        ensure!(p + q == n - 1, "element {i}: {p} + {q} != {}", n - 1);
    }
    let mut covered = 0;
    for g in &batch.groups {
        ensure!(g.positives >= 1 && g.positives <= cfg.k, "{} positives with k = {}", g.positives, cfg.k);
        ensure!(g.negatives <= cfg.q, "{} negatives with q = {}", g.negatives, cfg.q);
        let anchor = &catalog.offers[batch.offer_ids[g.start]];
        ensure!(anchor.product_id == g.anchor_product, "anchor product");
        for i in g.start..g.start + 1 + g.positives {
            ensure!(batch.product_ids[i] == anchor.product_id, "positive {i} of another product");
        }
        for i in g.start + 1 + g.positives..g.start + 1 + g.positives + g.negatives {
            ensure!(batch.blocking_ids[i] == anchor.blocking_id, "negative {i} from another blocking");
            ensure!(batch.product_ids[i] != anchor.product_id, "negative {i} of the anchor product");
        }
        let pool = catalog
            .offers
            .iter()
            .filter(|o| o.blocking_id == anchor.blocking_id && o.product_id != anchor.product_id)
            .count();
        let want = if cfg.blocking_mode { cfg.q.min(pool) } else { 0 };
        ensure!(g.negatives == want, "{} negatives, expected {want}", g.negatives);
        covered += 1 + g.positives + g.negatives;
    }
    ensure!(covered == n, "groups cover {covered} of {n}");
    if cfg.blocking_mode {
        let mut blocks: Vec<usize> = batch.groups.iter().map(|g| batch.blocking_ids[g.start]).collect();
        let len = blocks.len();
        blocks.sort();
        blocks.dedup();
        ensure!(blocks.len() == len, "two groups from one blocking");
    }
    Ok(())
}
