//! MovieLens ingestion: parsing, ID vocabularies and seeded train/test splits.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Rating ceiling used for MovieLens when none is given explicitly.
pub const MOVIELENS_K_MAX: f64 = 5.0;

/// One observed rating with raw dataset IDs.
#[derive(Debug, Clone, PartialEq)]
pub struct RatingTriplet {
    pub user_raw: String,
    pub item_raw: String,
    pub rating: f64,
    pub timestamp: Option<i64>,
}

/// On-disk layout of a ratings file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    /// `u.data`: `user<TAB>item<TAB>rating<TAB>timestamp`.
    Ml100k,
    /// `ratings.dat`: `user::item::rating::timestamp`.
    Ml1m,
}

impl Format {
    fn separator(self) -> &'static str {
        match self {
            Format::Ml100k => "\t",
            Format::Ml1m => "::",
        }
    }
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ml100k" => Ok(Format::Ml100k),
            "ml1m" => Ok(Format::Ml1m),
            other => Err(Error::InvalidArgument(format!("unknown format {other:?}"))),
        }
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Format::Ml100k => "ml100k",
            Format::Ml1m => "ml1m",
        })
    }
}

pub fn parse_movielens(path: impl AsRef<Path>, format: Format) -> Result<Vec<RatingTriplet>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_movielens_str(&text, format)
}

/// Parses ratings from in-memory text. Blank lines are skipped; both LF and
/// CRLF endings are accepted.
pub fn parse_movielens_str(text: &str, format: Format) -> Result<Vec<RatingTriplet>> {
    let sep = format.separator();
    let mut out = Vec::new();
    for (i, raw_line) in text.lines().enumerate() {
        let line = raw_line.strip_suffix('\r').unwrap_or(raw_line);
        if line.trim().is_empty() {
            continue;
        }
        let malformed = || Error::MalformedLine {
            line: i + 1,
            text: line.to_string(),
        };
        let fields: Vec<&str> = line.split(sep).map(str::trim).collect();
        if !(3..=4).contains(&fields.len()) || fields[0].is_empty() || fields[1].is_empty() {
            return Err(malformed());
        }
        let rating: f64 = fields[2].parse().map_err(|_| malformed())?;
        if !rating.is_finite() {
            return Err(malformed());
        }
        let timestamp = match fields.get(3) {
            Some(ts) => Some(ts.parse::<i64>().map_err(|_| malformed())?),
            None => None,
        };
        out.push(RatingTriplet {
            user_raw: fields[0].to_string(),
            item_raw: fields[1].to_string(),
            rating,
            timestamp,
        });
    }
    if out.is_empty() {
        return Err(Error::NoRatings);
    }
    Ok(out)
}

/// Bidirectional raw-ID ↔ dense-index map. Indices follow first-seen order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocab {
    forward: HashMap<String, usize>,
    backward: Vec<String>,
}

impl Vocab {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a vocabulary from IDs in index order. Duplicates are rejected.
    pub fn from_ids<I, S>(ids: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Vocab::new();
        for id in ids {
            let id = id.into();
            if vocab.forward.contains_key(&id) {
                return Err(Error::Data(format!("duplicate vocabulary id {id:?}")));
            }
            vocab.intern(&id);
        }
        Ok(vocab)
    }

    /// Returns the index of `raw`, assigning the next free one if unseen.
    pub fn intern(&mut self, raw: &str) -> usize {
        if let Some(&idx) = self.forward.get(raw) {
            return idx;
        }
        let idx = self.backward.len();
        self.forward.insert(raw.to_string(), idx);
        self.backward.push(raw.to_string());
        idx
    }

    pub fn index_of(&self, raw: &str) -> Option<usize> {
        self.forward.get(raw).copied()
    }

    pub fn raw(&self, idx: usize) -> Option<&str> {
        self.backward.get(idx).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.backward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.backward.is_empty()
    }

    /// Raw IDs in index order.
    pub fn ids(&self) -> &[String] {
        &self.backward
    }
}

/// A rating with dense indices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rating {
    pub user: usize,
    pub item: usize,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub triplets: Vec<Rating>,
    pub user_vocab: Vocab,
    pub item_vocab: Vocab,
    pub k_max: f64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    pub fn user_count(&self) -> usize {
        self.user_vocab.len()
    }

    pub fn item_count(&self) -> usize {
        self.item_vocab.len()
    }

    /// Mean rating, or `None` when empty.
    pub fn mean_rating(&self) -> Option<f64> {
        if self.triplets.is_empty() {
            return None;
        }
        let sum: f64 = self.triplets.iter().map(|t| t.y).sum();
        Some(sum / self.triplets.len() as f64)
    }

    /// Same vocabularies and scale, different triplets.
    pub fn with_triplets(&self, triplets: Vec<Rating>) -> Dataset {
        Dataset {
            triplets,
            user_vocab: self.user_vocab.clone(),
            item_vocab: self.item_vocab.clone(),
            k_max: self.k_max,
        }
    }
}

/// Interns raw IDs and validates ratings against `k_max`.
///
/// Without an explicit `k_max` the ceiling is the largest observed rating
/// rounded up to an integer.
pub fn build_dataset(triplets: &[RatingTriplet], k_max: Option<f64>) -> Result<Dataset> {
    if triplets.is_empty() {
        return Err(Error::NoRatings);
    }
    let max_seen = triplets
        .iter()
        .map(|t| t.rating)
        .fold(f64::NEG_INFINITY, f64::max);
    let k_max = match k_max {
        Some(k) if !(k.is_finite() && k > 0.0) => {
            return Err(Error::InvalidArgument(format!("k_max must be positive, got {k}")))
        }
        Some(k) => k,
        None => max_seen.ceil(),
    };
    if !(k_max > 0.0) {
        return Err(Error::Data("all ratings are zero; rating ceiling would be 0".into()));
    }

    let mut user_vocab = Vocab::new();
    let mut item_vocab = Vocab::new();
    let mut out = Vec::with_capacity(triplets.len());
    for t in triplets {
        if !(t.rating >= 0.0 && t.rating <= k_max) {
            return Err(Error::RatingOutOfRange {
                rating: t.rating,
                k_max,
            });
        }
        out.push(Rating {
            user: user_vocab.intern(&t.user_raw),
            item: item_vocab.intern(&t.item_raw),
            y: t.rating,
        });
    }
    Ok(Dataset {
        triplets: out,
        user_vocab,
        item_vocab,
        k_max,
    })
}

/// Number of training rows for a split: `⌈n·fraction⌉`, guarded against
/// representation error in the product (`10 × 0.9` must give 9, not 10).
fn train_len(n: usize, fraction: f64) -> usize {
    let exact = n as f64 * fraction;
    let rounded = exact.round();
    let k = if (exact - rounded).abs() <= 1e-9 * exact.max(1.0) {
        rounded
    } else {
        exact.ceil()
    };
    (k as usize).min(n)
}

/// Seeded global shuffle, then the first `⌈n·train_fraction⌉` triplets form
/// the training half. Both halves keep the full vocabularies and `k_max`.
pub fn split(dataset: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    if dataset.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let mut shuffled = dataset.triplets.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shuffled.shuffle(&mut rng);
    let test = shuffled.split_off(train_len(shuffled.len(), train_fraction));
    Ok((dataset.with_triplets(shuffled), dataset.with_triplets(test)))
}

/// Maps a rating in `[0, k_max]` onto the sigmoid range `[0, 1]`.
pub fn normalize_target(y: f64, k_max: f64) -> Result<f64> {
    if !(k_max > 0.0) {
        return Err(Error::InvalidArgument(format!("k_max must be positive, got {k_max}")));
    }
    Ok(y / k_max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn triplet(u: &str, i: &str, r: f64) -> RatingTriplet {
        RatingTriplet {
            user_raw: u.into(),
            item_raw: i.into(),
            rating: r,
            timestamp: None,
        }
    }

    #[test]
    fn parses_ml1m_line() {
        let got = parse_movielens_str("1::1193::5::978300760\n", Format::Ml1m).unwrap();
        assert_eq!(
            got,
            vec![RatingTriplet {
                user_raw: "1".into(),
                item_raw: "1193".into(),
                rating: 5.0,
                timestamp: Some(978300760),
            }]
        );
    }

    #[test]
    fn parses_ml100k_line_with_crlf() {
        let got = parse_movielens_str("196\t242\t3\t881250949\r\n186\t302\t3\t891717742\r\n", Format::Ml100k)
            .unwrap();
        assert_eq!(got.len(), 2);
        assert_eq!(got[0].user_raw, "196");
        assert_eq!(got[0].item_raw, "242");
        assert_eq!(got[0].rating, 3.0);
        assert_eq!(got[1].timestamp, Some(891717742));
    }

    #[test]
    fn empty_input_is_no_ratings() {
        assert!(matches!(parse_movielens_str("", Format::Ml100k), Err(Error::NoRatings)));
        assert!(matches!(parse_movielens_str("\n\n", Format::Ml1m), Err(Error::NoRatings)));
    }

    #[test]
    fn malformed_line_reports_number_and_text() {
        let err = parse_movielens_str("1::2::3::4\n1::x\n", Format::Ml1m).unwrap_err();
        match err {
            Error::MalformedLine { line, text } => {
                assert_eq!(line, 2);
                assert_eq!(text, "1::x");
            }
            other => panic!("unexpected {other:?}"),
        }
        // wrong separator for the format
        assert!(matches!(
            parse_movielens_str("1::2::3::4\n", Format::Ml100k),
            Err(Error::MalformedLine { line: 1, .. })
        ));
        assert!(matches!(
            parse_movielens_str("1\t2\tfive\t4\n", Format::Ml100k),
            Err(Error::MalformedLine { .. })
        ));
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = parse_movielens("/nonexistent/u.data", Format::Ml100k).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn vocab_first_seen_order() {
        let ts = vec![triplet("5", "a", 1.0), triplet("7", "b", 2.0), triplet("5", "c", 3.0)];
        let ds = build_dataset(&ts, None).unwrap();
        assert_eq!(ds.user_vocab.index_of("5"), Some(0));
        assert_eq!(ds.user_vocab.index_of("7"), Some(1));
        assert_eq!(ds.user_vocab.len(), 2);
        assert_eq!(ds.triplets[2].user, 0);
    }

    #[test]
    fn k_max_defaults_to_ceil_of_max() {
        let ts: Vec<_> = (1..=5).map(|r| triplet("u", &r.to_string(), r as f64)).collect();
        assert_eq!(build_dataset(&ts, None).unwrap().k_max, 5.0);
        let ts = vec![triplet("u", "i", 4.5)];
        assert_eq!(build_dataset(&ts, None).unwrap().k_max, 5.0);
    }

    #[test]
    fn rating_above_explicit_k_max_rejected() {
        let ts = vec![triplet("u", "i", 6.0)];
        assert!(matches!(
            build_dataset(&ts, Some(5.0)),
            Err(Error::RatingOutOfRange { .. })
        ));
        let ts = vec![triplet("u", "i", -1.0)];
        assert!(build_dataset(&ts, None).is_err());
        assert!(matches!(build_dataset(&[], None), Err(Error::NoRatings)));
    }

    fn toy(n: usize) -> Dataset {
        let ts: Vec<_> = (0..n)
            .map(|k| triplet(&(k % 3).to_string(), &(k % 4).to_string(), (k % 5) as f64))
            .collect();
        build_dataset(&ts, Some(5.0)).unwrap()
    }

    #[test]
    fn split_counts() {
        let (tr, te) = split(&toy(10), 0.9, 1).unwrap();
        assert_eq!(tr.len(), 9);
        assert_eq!(te.len(), 1);
        let (tr, te) = split(&toy(100_000), 0.9, 1).unwrap();
        assert_eq!((tr.len(), te.len()), (90_000, 10_000));
        let (tr, _) = split(&toy(7), 0.5, 1).unwrap();
        assert_eq!(tr.len(), 4);
    }

    #[test]
    fn split_is_deterministic_and_shares_vocab() {
        let ds = toy(50);
        let a = split(&ds, 0.8, 42).unwrap();
        let b = split(&ds, 0.8, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.1.user_vocab, ds.user_vocab);
        assert_eq!(a.1.k_max, ds.k_max);
        let c = split(&ds, 0.8, 43).unwrap();
        assert_ne!(a.0.triplets, c.0.triplets);
    }

    #[test]
    fn split_fraction_must_be_open_interval() {
        let ds = toy(10);
        for f in [0.0, 1.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(split(&ds, f, 0), Err(Error::InvalidArgument(_))));
        }
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_target(5.0, 5.0).unwrap(), 1.0);
        assert_eq!(normalize_target(0.0, 5.0).unwrap(), 0.0);
        assert!((normalize_target(3.0, 5.0).unwrap() - 0.6).abs() < 1e-15);
        assert!(normalize_target(3.0, 0.0).is_err());
    }

    fn sort_key(r: &Rating) -> (usize, usize, u64) {
        (r.user, r.item, r.y.to_bits())
    }

    proptest! {
        #[test]
        fn vocab_round_trip(ids in proptest::collection::vec((0u8..20, 0u8..20), 1..60)) {
            let ts: Vec<_> = ids.iter().map(|(u, i)| triplet(&u.to_string(), &format!("m{i}"), 1.0)).collect();
            let ds = build_dataset(&ts, None).unwrap();
            for t in &ts {
                let u = ds.user_vocab.index_of(&t.user_raw).unwrap();
                prop_assert_eq!(ds.user_vocab.raw(u).unwrap(), t.user_raw.as_str());
                let i = ds.item_vocab.index_of(&t.item_raw).unwrap();
                prop_assert_eq!(ds.item_vocab.raw(i).unwrap(), t.item_raw.as_str());
            }
            for r in &ds.triplets {
                prop_assert!(r.user < ds.user_count() && r.item < ds.item_count());
            }
        }

        #[test]
        fn split_is_a_partition(n in 1usize..200, frac in 0.01f64..0.99, seed: u64) {
            let ds = toy(n);
            let (tr, te) = split(&ds, frac, seed).unwrap();
            prop_assert_eq!(tr.len() + te.len(), n);
            let mut joined: Vec<_> = tr.triplets.iter().chain(&te.triplets).map(sort_key).collect();
            let mut orig: Vec<_> = ds.triplets.iter().map(sort_key).collect();
            joined.sort_unstable();
            orig.sort_unstable();
            prop_assert_eq!(joined, orig);
        }

        #[test]
        fn normalize_monotone(a in 0.0f64..5.0, b in 0.0f64..5.0) {
            let (na, nb) = (normalize_target(a, 5.0).unwrap(), normalize_target(b, 5.0).unwrap());
            prop_assert!((0.0..=1.0).contains(&na));
            if a <= b { prop_assert!(na <= nb); }
        }
    }
}
