//! Review data model, TSV ingestion, downsampling and corpus statistics.

mod oracle;
mod synthetic;

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use oracle::{bayes_oracle, bayes_oracle_accuracy, OracleEstimate, OracleMode, OracleReport};
pub use synthetic::{generate_synthetic, GeneratorParams, LatentRecord};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Review {
    pub review_id: String,
    pub user_id: String,
    pub product_id: String,
    /// 1-based rating.
    pub label: usize,
    pub text: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Users (or products) of a corpus. Ids cover every split, sorted; the
/// history lists hold positions in the training split only.
#[derive(Clone, Debug, Default)]
pub struct EntityIndex {
    ids: Vec<String>,
    positions: HashMap<String, usize>,
    history: Vec<Vec<usize>>,
}

impl EntityIndex {
    fn build<'a>(
        all: impl Iterator<Item = &'a str>,
        train: impl Iterator<Item = (usize, &'a str)>,
    ) -> Self {
        let ids: Vec<String> = all
            .collect::<BTreeSet<_>>()
            .into_iter()
            .map(str::to_owned)
            .collect();
        let positions: HashMap<String, usize> =
            ids.iter().enumerate().map(|(i, id)| (id.clone(), i)).collect();
        let mut history = vec![Vec::new(); ids.len()];
        for (review, id) in train {
            history[positions[id]].push(review);
        }
        Self {
            ids,
            positions,
            history,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.positions.get(id).copied()
    }

    /// Training-split review positions for entity `i` (`n_i` of them).
    pub fn history(&self, i: usize) -> &[usize] {
        &self.history[i]
    }

    /// True when the entity has no training reviews.
    pub fn is_cold(&self, i: usize) -> bool {
        self.history[i].is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct Corpus {
    num_classes: usize,
    train: Vec<Review>,
    dev: Vec<Review>,
    test: Vec<Review>,
    users: EntityIndex,
    products: EntityIndex,
}

impl Corpus {
    pub fn new(
        num_classes: usize,
        train: Vec<Review>,
        dev: Vec<Review>,
        test: Vec<Review>,
    ) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::InvalidParam(format!(
                "num_classes must be >= 2, got {num_classes}"
            )));
        }
        let mut seen = HashSet::new();
        for r in train.iter().chain(&dev).chain(&test) {
            if r.label < 1 || r.label > num_classes {
                return Err(Error::Range(format!(
                    "review {} has label {} outside 1..={num_classes}",
                    r.review_id, r.label
                )));
            }
            if r.user_id.is_empty() || r.product_id.is_empty() {
                return Err(Error::InvalidParam(format!(
                    "review {} has an empty user or product id",
                    r.review_id
                )));
            }
            if !seen.insert(r.review_id.as_str()) {
                return Err(Error::InvalidParam(format!(
                    "duplicate review id {}",
                    r.review_id
                )));
            }
        }
        let all = || train.iter().chain(&dev).chain(&test);
        let users = EntityIndex::build(
            all().map(|r| r.user_id.as_str()),
            train.iter().enumerate().map(|(i, r)| (i, r.user_id.as_str())),
        );
        let products = EntityIndex::build(
            all().map(|r| r.product_id.as_str()),
            train
                .iter()
                .enumerate()
                .map(|(i, r)| (i, r.product_id.as_str())),
        );
        Ok(Self {
            num_classes,
            train,
            dev,
            test,
            users,
            products,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split(&self, split: Split) -> &[Review] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    pub fn users(&self) -> &EntityIndex {
        &self.users
    }

    pub fn products(&self) -> &EntityIndex {
        &self.products
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.dev.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn reviews(&self) -> impl Iterator<Item = &Review> {
        self.train.iter().chain(&self.dev).chain(&self.test)
    }
}

/// Parsing options for the review TSV format.
#[derive(Clone, Copy, Debug)]
pub struct LoadOptions {
    pub num_classes: usize,
    pub allow_empty_text: bool,
}

impl LoadOptions {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            allow_empty_text: false,
        }
    }
}

/// Reads `user⟨TAB⟩product⟨TAB⟩rating⟨TAB⟩text` lines. Review ids are
/// `{split}-{line index}`.
pub fn read_reviews(path: &Path, split: Split, opts: LoadOptions) -> Result<Vec<Review>> {
    let content = fs::read_to_string(path)?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut reviews = Vec::new();
    for (i, raw) in content.lines().enumerate() {
        let line_no = i + 1;
        let fields: Vec<&str> = raw.splitn(4, '\t').collect();
        if fields.len() != 4 {
            return Err(parse_err(
                line_no,
                format!("expected 4 tab-separated fields, found {}", fields.len()),
            ));
        }
        let (user, product, rating, text) = (fields[0], fields[1], fields[2], fields[3]);
        if user.is_empty() || product.is_empty() {
            return Err(parse_err(line_no, "empty user or product id".into()));
        }
        let rating: i64 = rating
            .trim()
            .parse()
            .map_err(|_| parse_err(line_no, format!("rating {rating:?} is not an integer")))?;
        if rating < 1 || rating > opts.num_classes as i64 {
            return Err(Error::RatingRange {
                line: line_no,
                rating,
                num_classes: opts.num_classes,
            });
        }
        if text.trim().is_empty() && !opts.allow_empty_text {
            return Err(parse_err(line_no, "empty review text".into()));
        }
        reviews.push(Review {
            review_id: format!("{}-{}", split.name(), reviews.len()),
            user_id: user.to_owned(),
            product_id: product.to_owned(),
            label: rating as usize,
            text: text.to_owned(),
        });
    }
    Ok(reviews)
}

/// Loads a single file as the training split.
pub fn load_tsv(path: &Path, num_classes: usize) -> Result<Corpus> {
    let train = read_reviews(path, Split::Train, LoadOptions::new(num_classes))?;
    Corpus::new(num_classes, train, Vec::new(), Vec::new())
}

/// Loads `train.tsv`, `dev.tsv` and `test.tsv` from a directory; missing dev
/// or test files yield empty splits.
pub fn load_split_dir(dir: &Path, opts: LoadOptions) -> Result<Corpus> {
    let mut splits = Vec::new();
    for split in Split::ALL {
        let path = dir.join(format!("{}.tsv", split.name()));
        if split != Split::Train && !path.exists() {
            splits.push(Vec::new());
            continue;
        }
        splits.push(read_reviews(&path, split, opts)?);
    }
    let test = splits.pop().unwrap_or_default();
    let dev = splits.pop().unwrap_or_default();
    let train = splits.pop().unwrap_or_default();
    Corpus::new(opts.num_classes, train, dev, test)
}

pub fn write_reviews(path: &Path, reviews: &[Review]) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for r in reviews {
        if r.text.contains(['\n', '\r']) {
            return Err(Error::Format(format!(
                "review {} text contains a newline",
                r.review_id
            )));
        }
        writeln!(
            out,
            "{}\t{}\t{}\t{}",
            r.user_id, r.product_id, r.label, r.text
        )?;
    }
    out.flush()?;
    Ok(())
}

/// Writes the three splits as `{train,dev,test}.tsv` under `dir`.
pub fn save_split_dir(corpus: &Corpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for split in Split::ALL {
        write_reviews(
            &dir.join(format!("{}.tsv", split.name())),
            corpus.split(split),
        )?;
    }
    Ok(())
}

/// Keeps `ceil(fraction · n_i)` uniformly sampled training reviews per user.
/// Dev and test are untouched; surviving reviews keep their order and ids.
pub fn downsample_user_reviews(corpus: &Corpus, fraction: f64, seed: u64) -> Result<Corpus> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Range(format!("fraction {fraction} not in (0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let users = corpus.users();
    let mut keep = vec![false; corpus.train.len()];
    for u in 0..users.len() {
        let history = users.history(u);
        let n = history.len();
        if n == 0 {
            continue;
        }
        // Guard against 0.3 * 10 = 3.0000000000000004 style round-up.
        let k = ((fraction * n as f64) - 1e-9).ceil().max(1.0) as usize;
        for pick in index::sample(&mut rng, n, k.min(n)) {
            keep[history[pick]] = true;
        }
    }
    let train = corpus
        .train
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(r, _)| r.clone())
        .collect();
    Corpus::new(
        corpus.num_classes,
        train,
        corpus.dev.clone(),
        corpus.test.clone(),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub train_docs: usize,
    pub dev_docs: usize,
    pub test_docs: usize,
    pub words_per_doc: f64,
    pub users: usize,
    pub products: usize,
    pub docs_per_user: f64,
    pub docs_per_product: f64,
}

/// Whitespace word counts and per-entity averages over all splits.
pub fn corpus_stats(corpus: &Corpus) -> Result<CorpusStats> {
    if corpus.is_empty() {
        return Err(Error::InvalidParam("statistics of an empty corpus".into()));
    }
    let docs = corpus.len();
    let words: usize = corpus
        .reviews()
        .map(|r| r.text.split_whitespace().count())
        .sum();
    Ok(CorpusStats {
        train_docs: corpus.train.len(),
        dev_docs: corpus.dev.len(),
        test_docs: corpus.test.len(),
        words_per_doc: words as f64 / docs as f64,
        users: corpus.users.len(),
        products: corpus.products.len(),
        docs_per_user: docs as f64 / corpus.users.len() as f64,
        docs_per_product: docs as f64 / corpus.products.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn review(id: &str, user: &str, product: &str, label: usize, text: &str) -> Review {
        Review {
            review_id: id.into(),
            user_id: user.into(),
            product_id: product.into(),
            label,
            text: text.into(),
        }
    }

    fn tsv(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn parses_a_review_line() {
        let f = tsv("u1\tp1\t5\tgreat food\n");
        let c = load_tsv(f.path(), 5).unwrap();
        let r = &c.split(Split::Train)[0];
        assert_eq!(
            (r.user_id.as_str(), r.product_id.as_str(), r.label, r.text.as_str()),
            ("u1", "p1", 5, "great food")
        );
        assert_eq!(c.users().len(), 1);
        assert_eq!(c.products().history(0), &[0]);
    }

    #[test]
    fn empty_file_gives_empty_corpus() {
        let f = tsv("");
        let c = load_tsv(f.path(), 5).unwrap();
        assert!(c.is_empty());
        assert!(c.users().is_empty() && c.products().is_empty());
    }

    #[test]
    fn rating_out_of_range_names_the_line() {
        let f = tsv("u1\tp1\t6\tgreat food\n");
        match load_tsv(f.path(), 5) {
            Err(Error::RatingRange { line, rating, .. }) => assert_eq!((line, rating), (1, 6)),
            other => panic!("expected range error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_line_is_a_parse_error() {
        let f = tsv("u1\tp1\t3\tok\nu2\tp2\n");
        assert!(matches!(
            load_tsv(f.path(), 5),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn empty_text_requires_the_flag() {
        let f = tsv("u1\tp1\t3\t\n");
        assert!(load_tsv(f.path(), 5).is_err());
        let opts = LoadOptions {
            num_classes: 5,
            allow_empty_text: true,
        };
        assert_eq!(read_reviews(f.path(), Split::Train, opts).unwrap().len(), 1);
    }

    #[test]
    fn training_history_counts_sum_to_train_size() {
        let c = Corpus::new(
            5,
            vec![
                review("a", "u1", "p1", 1, "x"),
                review("b", "u1", "p2", 2, "x"),
                review("c", "u2", "p1", 3, "x"),
            ],
            vec![review("d", "u3", "p1", 4, "x")],
            vec![],
        )
        .unwrap();
        let total: usize = (0..c.users().len()).map(|u| c.users().history(u).len()).sum();
        assert_eq!(total, 3);
        let u3 = c.users().position("u3").unwrap();
        assert!(c.users().is_cold(u3));
    }

    #[test]
    fn duplicate_review_ids_are_rejected() {
        let r = review("a", "u1", "p1", 1, "x");
        assert!(Corpus::new(5, vec![r.clone()], vec![r], vec![]).is_err());
    }

    #[test]
    fn stats_means() {
        let c = Corpus::new(
            5,
            vec![
                review("a", "u1", "p1", 1, "one two three"),
                review("b", "u1", "p1", 2, "one two three four five"),
            ],
            vec![],
            vec![],
        )
        .unwrap();
        let s = corpus_stats(&c).unwrap();
        assert_eq!(s.words_per_doc, 4.0);

        let c = Corpus::new(
            5,
            vec![
                review("a", "u1", "p1", 1, "x"),
                review("b", "u1", "p2", 1, "x"),
                review("c", "u1", "p3", 1, "x"),
                review("d", "u2", "p1", 1, "x"),
            ],
            vec![],
            vec![],
        )
        .unwrap();
        assert_eq!(corpus_stats(&c).unwrap().docs_per_user, 2.0);
    }

    #[test]
    fn downsample_keeps_ceil_fraction_per_user() {
        let train: Vec<Review> = (0..10)
            .map(|i| review(&format!("r{i}"), "u1", "p1", 1, "x"))
            .chain((0..3).map(|i| review(&format!("s{i}"), "u2", "p1", 1, "x")))
            .collect();
        let c = Corpus::new(5, train, vec![review("d", "u1", "p1", 2, "x")], vec![]).unwrap();
        let d = downsample_user_reviews(&c, 0.1, 3).unwrap();
        let u1 = d.users().position("u1").unwrap();
        let u2 = d.users().position("u2").unwrap();
        assert_eq!(d.users().history(u1).len(), 1);
        assert_eq!(d.users().history(u2).len(), 1);
        assert_eq!(d.split(Split::Dev), c.split(Split::Dev));

        let same = downsample_user_reviews(&c, 1.0, 3).unwrap();
        assert_eq!(same.split(Split::Train), c.split(Split::Train));

        let again = downsample_user_reviews(&c, 0.1, 3).unwrap();
        assert_eq!(again.split(Split::Train), d.split(Split::Train));

        assert!(matches!(
            downsample_user_reviews(&c, 0.0, 3),
            Err(Error::Range(_))
        ));
        assert!(downsample_user_reviews(&c, 0.3, 3)
            .map(|d| d.users().history(u1).len() == 3)
            .unwrap());
    }
}
