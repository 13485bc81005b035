//! Title tokenization and hashed word / character n-gram features.

use unicode_normalization::UnicodeNormalization;

use super::{EncoderConfig, EncoderError};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a over the UTF-8 bytes of `s`.
pub fn fnv1a64(s: &str) -> u64 {
    s.bytes()
        .fold(FNV_OFFSET, |h, b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// NFC-normalizes, lowercases and splits on runs of non-alphanumeric
/// characters.
pub fn tokenize(title: &str) -> Result<Vec<String>, EncoderError> {
    let normalized: String = title.nfc().collect::<String>().to_lowercase();
    let tokens: Vec<String> = normalized
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect();
    if tokens.is_empty() {
        return Err(EncoderError::EmptyTitle(title.to_string()));
    }
    Ok(tokens)
}

/// Feature strings of one token: `word:<token>` (when enabled), then the
/// character n-grams of `^token$` for every length in
/// `ngram_min..=ngram_max`, shortest first.
pub fn feature_strings(token: &str, config: &EncoderConfig) -> Vec<String> {
    let mut out = Vec::new();
    if config.use_word_features {
        out.push(format!("word:{token}"));
    }
    let padded: Vec<char> = std::iter::once('^')
        .chain(token.chars())
        .chain(std::iter::once('$'))
        .collect();
    for n in config.ngram_min..=config.ngram_max {
        if n > padded.len() {
            break;
        }
        for w in padded.windows(n) {
            out.push(w.iter().collect());
        }
    }
    out
}

/// Feature ids in `[0, V)` for a token sequence; duplicates are kept.
pub fn featurize(tokens: &[String], config: &EncoderConfig) -> Vec<u32> {
    let mask = (config.feature_vocab_size - 1) as u64;
    tokens
        .iter()
        .flat_map(|t| feature_strings(t, config))
        .map(|f| (fnv1a64(&f) & mask) as u32)
        .collect()
}

/// Tokenizes and featurizes a title.
pub fn featurize_title(title: &str, config: &EncoderConfig) -> Result<Vec<u32>, EncoderError> {
    Ok(featurize(&tokenize(title)?, config))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(min: usize, max: usize, words: bool) -> EncoderConfig {
        EncoderConfig {
            ngram_min: min,
            ngram_max: max,
            use_word_features: words,
            ..EncoderConfig::default()
        }
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(
            tokenize("Kingston DataTraveler 32GB").unwrap(),
            vec!["kingston", "datatraveler", "32gb"]
        );
        assert_eq!(tokenize("USB-3.0//silver").unwrap(), vec!["usb", "3", "0", "silver"]);
        assert!(matches!(tokenize("###"), Err(EncoderError::EmptyTitle(_))));
        assert_eq!(tokenize("Cafe\u{301}").unwrap(), tokenize("Café").unwrap());
    }

    #[test]
    fn fnv_reference_values() {
        // published FNV-1a 64 test vectors
        assert_eq!(fnv1a64(""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64("a"), 0xaf63dc4c8601ec8c);
        // regression pin, computed once independently
        assert_eq!(fnv1a64("^king"), 0xc8ba3b8c4ef97e72);
        assert_eq!(fnv1a64("^king") & (32768 - 1), 32370);
    }

    #[test]
    fn feature_enumeration() {
        let c = cfg(3, 3, true);
        assert_eq!(feature_strings("ab", &c), vec!["word:ab", "^ab", "ab$"]);
        assert_eq!(featurize(&["ab".to_string()], &c).len(), 3);
        let c = cfg(3, 5, false);
        assert_eq!(
            feature_strings("ab", &c),
            vec!["^ab", "ab$", "^ab$"]
        );
    }

    #[test]
    fn duplicates_are_kept() {
        let c = cfg(3, 3, true);
        let once = featurize(&["ab".to_string()], &c);
        let twice = featurize(&["ab".to_string(), "ab".to_string()], &c);
        assert_eq!(twice.len(), 2 * once.len());
        for id in &once {
            assert_eq!(twice.iter().filter(|x| *x == id).count(), 2 * once.iter().filter(|x| *x == id).count());
        }
        assert!(twice.iter().all(|&f| (f as usize) < c.feature_vocab_size));
    }
}
