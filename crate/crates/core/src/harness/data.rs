//! Example sources: synthetic key-value retrieval, character language
//! modelling, and a line-oriented dataset cache.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One input sequence. `question` tokens are prepended to every window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub question: Vec<u32>,
    pub tokens: Vec<u32>,
    /// Class read out at the last context token; absent for language modelling.
    pub label: Option<u32>,
}

impl Example {
    pub fn new(tokens: Vec<u32>, label: Option<u32>) -> Self {
        Self { question: Vec::new(), tokens, label }
    }

    pub fn max_token(&self) -> Option<u32> {
        self.question.iter().chain(&self.tokens).chain(&self.label).copied().max()
    }
}

/// Where the query key is placed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QueryPosition {
    /// The final token of the sequence.
    #[default]
    Last,
}

/// Key-value retrieval: `pairs` (key, value) bigrams scattered through noise,
/// and a final query token repeating one of the keys. The label is that key's value.
///
/// Token ids: `[0, noise)` noise, then `keys` key ids, then `values` value ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticTaskSpec {
    pub length: usize,
    pub pairs: usize,
    pub noise_vocab: usize,
    pub key_vocab: usize,
    pub value_vocab: usize,
    /// Minimum distance from any value token to the query; must exceed `window`.
    pub min_gap: usize,
    pub window: usize,
    pub query: QueryPosition,
    pub examples: usize,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            length: 2048,
            pairs: 4,
            noise_vocab: 8,
            key_vocab: 16,
            value_vocab: 16,
            min_gap: 256,
            window: 64,
            query: QueryPosition::Last,
            examples: 256,
            seed: 0,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn vocab(&self) -> usize {
        self.noise_vocab + self.key_vocab + self.value_vocab
    }

    pub fn key_token(&self, i: usize) -> u32 {
        (self.noise_vocab + i) as u32
    }

    pub fn value_token(&self, i: usize) -> u32 {
        (self.noise_vocab + self.key_vocab + i) as u32
    }

    pub fn is_value(&self, token: u32) -> bool {
        (token as usize) >= self.noise_vocab + self.key_vocab && (token as usize) < self.vocab()
    }

    /// Span available for pair placement: pair starts lie in `[0, region)`.
    fn region(&self) -> usize {
        (self.length - 1).saturating_sub(self.min_gap).saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_gap <= self.window {
            return Err(Error::Invalid(format!(
                "min_gap {} must exceed the window {} so the value is out of local reach",
                self.min_gap, self.window
            )));
        }
        if self.pairs == 0 || self.pairs > self.key_vocab {
            return Err(Error::Invalid(format!(
                "need 1..={} distinct keys, asked for {} pairs",
                self.key_vocab, self.pairs
            )));
        }
        if self.noise_vocab == 0 || self.value_vocab == 0 {
            return Err(Error::Invalid("noise and value vocabularies must be non-empty".into()));
        }
        if self.length < self.min_gap + 2 || self.region() < 2 * self.pairs {
            return Err(Error::Invalid(format!(
                "length {} cannot fit {} pairs at least {} tokens before the query",
                self.length, self.pairs, self.min_gap
            )));
        }
        Ok(())
    }
}

/// Generates `spec.examples` examples, deterministic in `spec.seed`.
pub fn gen_kv_retrieval(spec: &SyntheticTaskSpec) -> Result<Vec<Example>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let region = spec.region();
    // one pair per equal segment, so pairs never overlap
    let seg = region / spec.pairs;
    Ok((0..spec.examples)
        .map(|_| {
            let mut tokens: Vec<u32> =
                (0..spec.length).map(|_| rng.random_range(0..spec.noise_vocab) as u32).collect();
            let keys = sample(&mut rng, spec.key_vocab, spec.pairs).into_vec();
            let values: Vec<usize> = (0..spec.pairs).map(|_| rng.random_range(0..spec.value_vocab)).collect();
            for (i, (&k, &v)) in keys.iter().zip(&values).enumerate() {
                let at = i * seg + rng.random_range(0..seg - 1);
                tokens[at] = spec.key_token(k);
                tokens[at + 1] = spec.value_token(v);
            }
            let pick = rng.random_range(0..spec.pairs);
            tokens[spec.length - 1] = spec.key_token(keys[pick]);
            Example::new(tokens, Some(spec.value_token(values[pick])))
        })
        .collect())
}

/// Character-level corpus cut into fixed-length windows.
#[derive(Debug, Clone, PartialEq)]
pub struct CharCorpus {
    alphabet: Vec<char>,
    ids: Vec<u32>,
}

impl CharCorpus {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut alphabet: Vec<char> = text.chars().collect();
        alphabet.sort_unstable();
        alphabet.dedup();
        if alphabet.is_empty() {
            return Err(Error::Invalid("empty corpus".into()));
        }
        let ids = text
            .chars()
            .map(|c| alphabet.binary_search(&c).expect("char is in alphabet") as u32)
            .collect();
        Ok(Self { alphabet, ids })
    }

    pub fn vocab(&self) -> usize {
        self.alphabet.len()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter().map(|&i| self.alphabet[i as usize]).collect()
    }

    /// Non-overlapping windows of `length` characters; the tail is dropped.
    pub fn windows(&self, length: usize) -> Result<Vec<Example>> {
        if length < 2 {
            return Err(Error::Invalid("language-model windows need at least 2 characters".into()));
        }
        Ok(self.ids.chunks_exact(length).map(|w| Example::new(w.to_vec(), None)).collect())
    }

    /// Splits windows into train and test by position: the last `test_fraction` go to test.
    pub fn split(&self, length: usize, test_fraction: f64) -> Result<(Vec<Example>, Vec<Example>)> {
        let mut all = self.windows(length)?;
        let n_test = ((all.len() as f64) * test_fraction).round() as usize;
        if n_test == 0 || n_test >= all.len() {
            return Err(Error::Invalid(format!(
                "{} windows cannot be split with test fraction {test_fraction}",
                all.len()
            )));
        }
        let test = all.split_off(all.len() - n_test);
        Ok((all, test))
    }
}

/// Writes one example per line: space-separated context ids, then a tab and the
/// label (empty when absent), then a tab and question ids if there are any.
pub fn write_cache(path: &Path, examples: &[Example]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for ex in examples {
        let join = |ids: &[u32]| ids.iter().map(u32::to_string).collect::<Vec<_>>().join(" ");
        write!(w, "{}\t{}", join(&ex.tokens), ex.label.map(|l| l.to_string()).unwrap_or_default())?;
        if !ex.question.is_empty() {
            write!(w, "\t{}", join(&ex.question))?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_cache(path: &Path) -> Result<Vec<Example>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let bad = |what: &str| Error::Corrupt(format!("{}:{}: {what}", path.display(), n + 1));
        let parse_ids = |s: &str| -> Result<Vec<u32>> {
            s.split_ascii_whitespace().map(|t| t.parse().map_err(|_| bad("bad token id"))).collect()
        };
        let mut fields = line.split('\t');
        let tokens = parse_ids(fields.next().unwrap_or_default())?;
        if tokens.is_empty() {
            return Err(bad("no tokens"));
        }
        let label = match fields.next() {
            Some("") | None => None,
            Some(s) => Some(s.trim().parse().map_err(|_| bad("bad label"))?),
        };
        let question = fields.next().map(parse_ids).transpose()?.unwrap_or_default();
        if fields.next().is_some() {
            return Err(bad("too many fields"));
        }
        out.push(Example { question, tokens, label });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticTaskSpec {
        SyntheticTaskSpec { length: 200, pairs: 3, min_gap: 65, window: 64, examples: 50, ..Default::default() }
    }

    #[test]
    fn value_is_far_from_query() {
        let spec = SyntheticTaskSpec { examples: 20, ..Default::default() };
        for ex in gen_kv_retrieval(&spec).unwrap() {
            let query = *ex.tokens.last().unwrap();
            let key_at = ex.tokens.iter().position(|&t| t == query).unwrap();
            assert_eq!(ex.tokens[key_at + 1], ex.label.unwrap());
            assert!(ex.tokens.len() - 1 - (key_at + 1) >= 65);
        }
    }

    #[test]
    fn seeded_generation_is_deterministic() {
        assert_eq!(gen_kv_retrieval(&small()).unwrap(), gen_kv_retrieval(&small()).unwrap());
        let other = SyntheticTaskSpec { seed: 1, ..small() };
        assert_ne!(gen_kv_retrieval(&small()).unwrap(), gen_kv_retrieval(&other).unwrap());
    }

    #[test]
    fn impossible_specs_rejected() {
        assert!(SyntheticTaskSpec { min_gap: 64, ..small() }.validate().is_err());
        assert!(SyntheticTaskSpec { length: 60, ..small() }.validate().is_err());
        assert!(SyntheticTaskSpec { pairs: 17, ..small() }.validate().is_err());
    }

    #[test]
    fn each_key_appears_once_before_query() {
        let spec = small();
        for ex in gen_kv_retrieval(&spec).unwrap() {
            let q = *ex.tokens.last().unwrap();
            let n = ex.tokens[..ex.tokens.len() - 1].iter().filter(|&&t| t == q).count();
            assert_eq!(n, 1);
            assert!(spec.is_value(ex.label.unwrap()));
        }
    }

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.tsv");
        let mut data = gen_kv_retrieval(&small()).unwrap();
        data.push(Example { question: vec![3, 4], tokens: vec![1, 2], label: None });
        write_cache(&path, &data).unwrap();
        assert_eq!(read_cache(&path).unwrap(), data);
        fs::write(&path, "1 x 3\t2\n").unwrap();
        assert!(matches!(read_cache(&path), Err(Error::Corrupt(_))));
    }

    #[test]
    fn corpus_windows() {
        let c = CharCorpus::from_text("abcabcab").unwrap();
        assert_eq!(c.vocab(), 3);
        let w = c.windows(3).unwrap();
        assert_eq!(w.len(), 2);
        assert_eq!(c.decode(&w[1].tokens), "abc");
        let (train, test) = CharCorpus::from_text(&"xy".repeat(20)).unwrap().split(4, 0.2).unwrap();
        assert_eq!((train.len(), test.len()), (8, 2));
    }
}
