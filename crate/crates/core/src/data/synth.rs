//! Seeded synthetic product-offer catalogs.
//!
//! Every blocking has its own brand and series letters and a category, so
//! the products of one blocking are textually close. Products differ by model
//! number, capacity and color, and several products of a blocking share a
//! model number, which makes their negatives hard. Offers are noisy copies of
//! the product's base title.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, Offer, OfferCatalog, OfferPair, Result};

const CONSONANTS: &[u8] = b"bcdfghklmnprstvz";
const VOWELS: &[u8] = b"aeiou";
const CAPACITIES: &[&str] = &["16gb", "32gb", "64gb", "128gb", "256gb", "512gb"];
const COLORS: &[&str] = &["black", "silver", "white", "red", "blue", "gold"];
const CATEGORIES: &[&str] = &[
    "usb flash drive",
    "external hard drive",
    "solid state drive",
    "memory card",
    "portable ssd",
    "wireless mouse",
    "mechanical keyboard",
    "gaming headset",
];
/// Products per model number inside a blocking.
const VARIANTS_PER_MODEL: usize = 3;

/// Per-offer perturbations applied to a product's base title.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    /// Probability of dropping each non-key token.
    pub drop_p: f64,
    /// Probability of transposing each adjacent token pair.
    pub swap_p: f64,
    /// Probability of prepending a retailer name.
    pub prefix_p: f64,
    /// Number of distinct retailer names.
    pub prefix_pool: usize,
    /// Probability of shifting the non-key year token by one.
    pub jitter_p: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            drop_p: 0.15,
            swap_p: 0.1,
            prefix_p: 1.0,
            prefix_pool: 8,
            jitter_p: 0.3,
        }
    }
}

impl NoiseConfig {
    pub fn none() -> Self {
        Self {
            drop_p: 0.0,
            swap_p: 0.0,
            prefix_p: 0.0,
            prefix_pool: 8,
            jitter_p: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_products: usize,
    pub offers_per_product: usize,
    /// Products per blocking.
    pub blocking_size: usize,
    pub seed: u64,
    pub noise: NoiseConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_products: 100,
            offers_per_product: 5,
            blocking_size: 10,
            seed: 1,
            noise: NoiseConfig::default(),
        }
    }
}

fn pseudo_word(rng: &mut ChaCha8Rng, syllables: usize) -> String {
    let mut s = String::new();
    for _ in 0..syllables {
        s.push(CONSONANTS[rng.gen_range(0..CONSONANTS.len())] as char);
        s.push(VOWELS[rng.gen_range(0..VOWELS.len())] as char);
    }
    if rng.gen_bool(0.5) {
        s.push(CONSONANTS[rng.gen_range(0..CONSONANTS.len())] as char);
    }
    s
}

fn unique_word(rng: &mut ChaCha8Rng, used: &mut HashSet<String>, syllables: usize) -> String {
    loop {
        let w = pseudo_word(rng, syllables);
        if used.insert(w.clone()) {
            return w;
        }
    }
}

struct Token {
    text: String,
    /// Never dropped (the model code).
    key: bool,
    /// Year-like numeric attribute that noise may shift.
    jitter: Option<u32>,
}

fn perturb(base: &[Token], noise: &NoiseConfig, retailers: &[String], rng: &mut ChaCha8Rng) -> String {
    let mut tokens: Vec<String> = Vec::with_capacity(base.len() + 1);
    for t in base {
        if !t.key && noise.drop_p > 0.0 && rng.gen_bool(noise.drop_p) {
            continue;
        }
        match t.jitter {
            Some(year) if noise.jitter_p > 0.0 && rng.gen_bool(noise.jitter_p) => {
                let shifted = if rng.gen_bool(0.5) { year + 1 } else { year - 1 };
                tokens.push(shifted.to_string());
            }
            _ => tokens.push(t.text.clone()),
        }
    }
    if noise.swap_p > 0.0 {
        for i in 1..tokens.len() {
            if rng.gen_bool(noise.swap_p) {
                tokens.swap(i - 1, i);
            }
        }
    }
    if noise.prefix_p > 0.0 && !retailers.is_empty() && rng.gen_bool(noise.prefix_p) {
        let r = &retailers[rng.gen_range(0..retailers.len())];
        tokens.insert(0, r.clone());
    }
    tokens.join(" ")
}

/// Generates a catalog of `n_products` products split into blockings of
/// `blocking_size` products, `offers_per_product` offers each, with every
/// within-blocking offer pair listed and labeled.
pub fn generate_synthetic(config: &SynthConfig) -> Result<OfferCatalog> {
    let bad = |m: &str| Err(DataError::InvalidSynthConfig(m.to_string()));
    if config.offers_per_product < 2 {
        return bad("offers_per_product must be at least 2");
    }
    if !(2..=CAPACITIES.len() * COLORS.len()).contains(&config.blocking_size) {
        return bad("blocking_size must lie in [2, 36]");
    }
    if config.n_products == 0 {
        return bad("n_products must be positive");
    }
    let probs = [
        config.noise.drop_p,
        config.noise.swap_p,
        config.noise.prefix_p,
        config.noise.jitter_p,
    ];
    if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return bad("noise probabilities must lie in [0, 1]");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut used = HashSet::new();
    let retailers: Vec<String> = (0..config.noise.prefix_pool)
        .map(|_| unique_word(&mut rng, &mut used, 2))
        .collect();

    let n_blockings = config.n_products.div_ceil(config.blocking_size);
    let mut offers = Vec::with_capacity(config.n_products * config.offers_per_product);
    let mut pairs = Vec::new();
    let mut product_id = 0;
    for blocking_id in 0..n_blockings {
        let brand = unique_word(&mut rng, &mut used, 3);
        let series: String = (0..2)
            .map(|_| CONSONANTS[rng.gen_range(0..CONSONANTS.len())] as char)
            .collect();
        let category = CATEGORIES[rng.gen_range(0..CATEGORIES.len())];
        let products_here = config
            .blocking_size
            .min(config.n_products - blocking_id * config.blocking_size);

        let n_models = products_here.div_ceil(VARIANTS_PER_MODEL);
        let mut numbers = HashSet::new();
        let base = rng.gen_range(1..9) * 100;
        let mut models = Vec::with_capacity(n_models);
        while models.len() < n_models {
            let n = base + rng.gen_range(0..20) * 5;
            if numbers.insert(n) {
                models.push(n);
            }
        }
        let mut variants: Vec<(usize, usize)> = (0..CAPACITIES.len())
            .flat_map(|c| (0..COLORS.len()).map(move |k| (c, k)))
            .collect();
        // distinct (capacity, color) per product keeps base titles unique
        variants.shuffle(&mut rng);

        let first_offer = offers.len();
        for p in 0..products_here {
            let model = models[p % n_models];
            let (cap, color) = variants[p];
            let year: u32 = rng.gen_range(2015..2023);
            let mut base_tokens = vec![
                Token { text: brand.clone(), key: false, jitter: None },
                Token { text: format!("{series}{model}"), key: true, jitter: None },
                Token { text: CAPACITIES[cap].to_string(), key: false, jitter: None },
                Token { text: COLORS[color].to_string(), key: false, jitter: None },
            ];
            base_tokens.extend(category.split(' ').map(|w| Token {
                text: w.to_string(),
                key: false,
                jitter: None,
            }));
            base_tokens.push(Token { text: year.to_string(), key: false, jitter: Some(year) });

            for _ in 0..config.offers_per_product {
                let title = perturb(&base_tokens, &config.noise, &retailers, &mut rng);
                offers.push(Offer {
                    offer_id: offers.len(),
                    title,
                    product_id,
                    blocking_id,
                });
            }
            product_id += 1;
        }
        for i in first_offer..offers.len() {
            for j in i + 1..offers.len() {
                pairs.push(OfferPair {
                    left: i,
                    right: j,
                    label: offers[i].product_id == offers[j].product_id,
                });
            }
        }
    }
    Ok(OfferCatalog {
        offers,
        pairs,
        product_count: product_id,
        blocking_count: n_blockings,
    })
}
