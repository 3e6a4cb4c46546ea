//! Corpus ingestion: manifest loading, vocabulary construction, encoding,
//! family filtering, stratified splitting, and short-sample dropping.
//!
//! A corpus is a set of labeled mnemonic opcode sequences. Mnemonics are
//! normalized to uppercase and split on any whitespace; test-time mnemonics
//! unseen in training map to a reserved UNK index so emission lookups stay
//! total.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding;

/// Display form of the reserved unknown-symbol index.
pub const UNK_TOKEN: &str = "<UNK>";

/// Token storage: raw mnemonic strings after loading, vocabulary indices
/// after encoding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TokenSeq {
    Raw(Vec<String>),
    Encoded(Vec<u32>),
}

/// A labeled opcode sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpcodeSample {
    pub sample_id: String,
    pub family: String,
    pub tokens: TokenSeq,
    /// Token count before any truncation.
    pub raw_length: usize,
}

impl OpcodeSample {
    pub fn encoded(&self) -> Result<&[u32]> {
        match &self.tokens {
            TokenSeq::Encoded(v) => Ok(v),
            TokenSeq::Raw(_) => Err(Error::InvalidInput(format!(
                "sample {} has not been encoded",
                self.sample_id
            ))),
        }
    }

    pub fn raw(&self) -> Result<&[String]> {
        match &self.tokens {
            TokenSeq::Raw(v) => Ok(v),
            TokenSeq::Encoded(_) => Err(Error::InvalidInput(format!(
                "sample {} is already encoded",
                self.sample_id
            ))),
        }
    }
}

/// Bijection between the training mnemonics and indices `0..m-1`, with the
/// reserved UNK symbol at index `m`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_index: HashMap<String, u32>,
    index_to_token: Vec<String>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let token_to_index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary {
            token_to_index,
            index_to_token: tokens,
        }
    }

    /// Count of distinct training mnemonics (excludes UNK).
    pub fn m(&self) -> usize {
        self.index_to_token.len()
    }

    pub fn unk_index(&self) -> u32 {
        self.index_to_token.len() as u32
    }

    /// Symbol count including UNK; the `M` used by emission matrices.
    pub fn total_symbols(&self) -> usize {
        self.index_to_token.len() + 1
    }

    pub fn encode(&self, token: &str) -> u32 {
        self.token_to_index
            .get(token)
            .copied()
            .unwrap_or_else(|| self.unk_index())
    }

    pub fn decode(&self, index: u32) -> &str {
        self.index_to_token
            .get(index as usize)
            .map(String::as_str)
            .unwrap_or(UNK_TOKEN)
    }

    pub fn tokens(&self) -> &[String] {
        &self.index_to_token
    }
}

impl Serialize for Vocabulary {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.index_to_token.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocabulary {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        Ok(Vocabulary::from_tokens(Vec::<String>::deserialize(d)?))
    }
}

/// A set of samples with their (sorted, duplicate-free) family list and,
/// after encoding, the vocabulary binding.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub samples: Vec<OpcodeSample>,
    pub families: Vec<String>,
    pub vocabulary: Option<Vocabulary>,
}

impl Corpus {
    fn from_samples(samples: Vec<OpcodeSample>, vocabulary: Option<Vocabulary>) -> Self {
        let mut families: Vec<String> = samples
            .iter()
            .map(|s| s.family.clone())
            .collect::<HashSet<_>>()
            .into_iter()
            .collect();
        families.sort();
        Corpus {
            samples,
            families,
            vocabulary,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Indices of samples per family, in manifest order within each family.
    pub fn indices_by_family(&self) -> BTreeMap<&str, Vec<usize>> {
        let mut map: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, s) in self.samples.iter().enumerate() {
            map.entry(s.family.as_str()).or_default().push(i);
        }
        map
    }

    /// Class index of a family in the canonical (lexicographic) order.
    pub fn class_index(&self, family: &str) -> Option<usize> {
        self.families.iter().position(|f| f == family)
    }
}

/// Disjoint train/test partition of a filtered corpus.
#[derive(Debug, Clone)]
pub struct SplitResult {
    pub train: Corpus,
    pub test: Corpus,
    pub seed: u64,
}

/// Samples removed because they were shorter than the truncation length.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq, Eq)]
pub struct DropReport {
    pub dropped: Vec<String>,
    pub per_family: BTreeMap<String, usize>,
}

/// Load a corpus from a CSV manifest (`sample_id,family,path` header, paths
/// relative to `data_root`). Tokens stay as raw strings; mnemonics are
/// uppercased and split on any whitespace.
pub fn load_corpus(manifest_path: &Path, data_root: &Path) -> Result<Corpus> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(manifest_path)
        .map_err(|e| Error::MalformedManifest(format!("{}: {e}", manifest_path.display())))?;

    let headers = reader
        .headers()
        .map_err(|e| Error::MalformedManifest(format!("unreadable header: {e}")))?;
    let expect = ["sample_id", "family", "path"];
    if headers.len() != 3 || headers.iter().zip(expect).any(|(h, e)| h != e) {
        return Err(Error::MalformedManifest(format!(
            "expected header sample_id,family,path, found {:?}",
            headers.iter().collect::<Vec<_>>()
        )));
    }

    let mut samples = Vec::new();
    let mut seen_ids = HashSet::new();
    for (row, record) in reader.records().enumerate() {
        let record =
            record.map_err(|e| Error::MalformedManifest(format!("row {}: {e}", row + 1)))?;
        if record.len() != 3 {
            return Err(Error::MalformedManifest(format!(
                "row {}: expected 3 fields, found {}",
                row + 1,
                record.len()
            )));
        }
        let (sample_id, family, rel_path) = (&record[0], &record[1], &record[2]);
        if sample_id.is_empty() || family.is_empty() || rel_path.is_empty() {
            return Err(Error::MalformedManifest(format!(
                "row {}: empty field",
                row + 1
            )));
        }
        if !seen_ids.insert(sample_id.to_string()) {
            return Err(Error::MalformedManifest(format!(
                "row {}: duplicate sample_id {sample_id}",
                row + 1
            )));
        }
        let path = data_root.join(rel_path);
        let text = fs::read_to_string(&path)
            .map_err(|e| Error::MissingSample(format!("{}: {e}", path.display())))?;
        let tokens: Vec<String> = text
            .split_whitespace()
            .map(|t| t.to_uppercase())
            .collect();
        if tokens.is_empty() {
            return Err(Error::EmptyInput(format!(
                "opcode file {} contains no tokens",
                path.display()
            )));
        }
        let raw_length = tokens.len();
        samples.push(OpcodeSample {
            sample_id: sample_id.to_string(),
            family: family.to_string(),
            tokens: TokenSeq::Raw(tokens),
            raw_length,
        });
    }

    if samples.is_empty() {
        return Err(Error::EmptyCorpus(format!(
            "manifest {} has no rows",
            manifest_path.display()
        )));
    }
    Ok(Corpus::from_samples(samples, None))
}

/// Build the vocabulary from the distinct mnemonics of the training set,
/// indexed by first occurrence (samples in manifest order, tokens in sequence
/// order). UNK is reserved at index `m`.
pub fn build_vocabulary(train: &Corpus) -> Result<Vocabulary> {
    if train.is_empty() {
        return Err(Error::EmptyCorpus("cannot build vocabulary".into()));
    }
    let mut seen: HashMap<&str, u32> = HashMap::new();
    let mut ordered: Vec<String> = Vec::new();
    for sample in &train.samples {
        for token in sample.raw()? {
            if !seen.contains_key(token.as_str()) {
                seen.insert(token, ordered.len() as u32);
                ordered.push(token.clone());
            }
        }
    }
    Ok(Vocabulary::from_tokens(ordered))
}

/// Replace every token by its vocabulary index; tokens absent from the
/// vocabulary map to UNK. `raw_length` is preserved.
pub fn encode_corpus(corpus: Corpus, vocab: &Vocabulary) -> Result<Corpus> {
    let samples = corpus
        .samples
        .into_iter()
        .map(|s| {
            let encoded = match &s.tokens {
                TokenSeq::Raw(raw) => raw.iter().map(|t| vocab.encode(t)).collect(),
                TokenSeq::Encoded(_) => {
                    return Err(Error::InvalidInput(format!(
                        "sample {} is already encoded",
                        s.sample_id
                    )))
                }
            };
            Ok(OpcodeSample {
                tokens: TokenSeq::Encoded(encoded),
                ..s
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus {
        samples,
        families: corpus.families,
        vocabulary: Some(vocab.clone()),
    })
}

/// Remove families smaller than `min_family_size`, then split the remaining
/// samples stratified per family: after a seed-deterministic shuffle,
/// `floor(train_fraction * n)` samples go to train, the rest to test.
/// Manifest order is preserved within each side.
pub fn filter_and_split(
    corpus: &Corpus,
    min_family_size: usize,
    train_fraction: f64,
    seed: u64,
) -> Result<SplitResult> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidInput(format!(
            "train_fraction must be in (0, 1), got {train_fraction}"
        )));
    }

    let by_family = corpus.indices_by_family();
    let mut train_idx: Vec<usize> = Vec::new();
    let mut test_idx: Vec<usize> = Vec::new();
    for (family, indices) in &by_family {
        if indices.len() < min_family_size {
            continue;
        }
        let mut shuffled = indices.clone();
        // Salted so the split stream never aliases the per-family training
        // streams derived from the same run seed.
        let mut rng = seeding::rng(seeding::family_seed(
            seeding::mix64(seed ^ 0x7370_6c74),
            family,
        ));
        shuffled.shuffle(&mut rng);
        let n_train = (train_fraction * indices.len() as f64).floor() as usize;
        train_idx.extend_from_slice(&shuffled[..n_train]);
        test_idx.extend_from_slice(&shuffled[n_train..]);
    }
    if train_idx.is_empty() && test_idx.is_empty() {
        return Err(Error::EmptyCorpus(format!(
            "no family has at least {min_family_size} samples"
        )));
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();

    let pick = |idx: &[usize]| -> Corpus {
        let samples = idx.iter().map(|&i| corpus.samples[i].clone()).collect();
        Corpus::from_samples(samples, corpus.vocabulary.clone())
    };
    Ok(SplitResult {
        train: pick(&train_idx),
        test: pick(&test_idx),
        seed,
    })
}

/// Remove samples with fewer than `l` tokens. The report lists dropped ids
/// and per-family drop counts; an empty result is permitted.
pub fn drop_short(corpus: &Corpus, l: usize) -> Result<(Corpus, DropReport)> {
    if l == 0 {
        return Err(Error::InvalidInput("l must be >= 1".into()));
    }
    let mut kept = Vec::new();
    let mut report = DropReport::default();
    for sample in &corpus.samples {
        if sample.raw_length < l {
            report.dropped.push(sample.sample_id.clone());
            *report.per_family.entry(sample.family.clone()).or_insert(0) += 1;
        } else {
            kept.push(sample.clone());
        }
    }
    Ok((
        Corpus::from_samples(kept, corpus.vocabulary.clone()),
        report,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs::File;
    use std::io::Write;

    fn write_corpus_dir(rows: &[(&str, &str, &str)]) -> tempfile::TempDir {
        // rows: (sample_id, family, opcode text)
        let dir = tempfile::tempdir().unwrap();
        let mut manifest = File::create(dir.path().join("manifest.csv")).unwrap();
        writeln!(manifest, "sample_id,family,path").unwrap();
        for (id, family, text) in rows {
            let rel = format!("{id}.txt");
            fs::write(dir.path().join(&rel), text).unwrap();
            writeln!(manifest, "{id},{family},{rel}").unwrap();
        }
        dir
    }

    fn load(dir: &tempfile::TempDir) -> Result<Corpus> {
        load_corpus(&dir.path().join("manifest.csv"), dir.path())
    }

    fn raw_sample(id: &str, family: &str, tokens: &[&str]) -> OpcodeSample {
        OpcodeSample {
            sample_id: id.into(),
            family: family.into(),
            tokens: TokenSeq::Raw(tokens.iter().map(|t| t.to_string()).collect()),
            raw_length: tokens.len(),
        }
    }

    fn toy_corpus(per_family: &[(&str, usize)]) -> Corpus {
        let mut samples = Vec::new();
        for (family, count) in per_family {
            for i in 0..*count {
                samples.push(raw_sample(
                    &format!("{family}_{i}"),
                    family,
                    &["MOV", "ADD"],
                ));
            }
        }
        Corpus::from_samples(samples, None)
    }

    #[test]
    fn load_three_rows_two_families() {
        let dir = write_corpus_dir(&[
            ("s1", "zbot", "mov add"),
            ("s2", "cridex", "push pop mov"),
            ("s3", "zbot", "xor"),
        ]);
        let corpus = load(&dir).unwrap();
        assert_eq!(corpus.len(), 3);
        assert_eq!(corpus.families, vec!["cridex", "zbot"]);
        // Mnemonics uppercased.
        assert_eq!(
            corpus.samples[0].raw().unwrap(),
            &["MOV".to_string(), "ADD".to_string()]
        );
        assert_eq!(corpus.samples[1].raw_length, 3);
    }

    #[test]
    fn load_missing_file_is_missing_sample() {
        let dir = write_corpus_dir(&[("s1", "zbot", "mov")]);
        fs::remove_file(dir.path().join("s1.txt")).unwrap();
        match load(&dir) {
            Err(Error::MissingSample(_)) => {}
            other => panic!("expected MissingSample, got {other:?}"),
        }
    }

    #[test]
    fn load_rejects_bad_header_and_empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = dir.path().join("manifest.csv");
        fs::write(&manifest, "id,family,path\n").unwrap();
        assert!(matches!(
            load_corpus(&manifest, dir.path()),
            Err(Error::MalformedManifest(_))
        ));
        fs::write(&manifest, "sample_id,family,path\n").unwrap();
        assert!(matches!(
            load_corpus(&manifest, dir.path()),
            Err(Error::EmptyCorpus(_))
        ));
    }

    #[test]
    fn load_rejects_duplicate_ids() {
        let dir = write_corpus_dir(&[("s1", "zbot", "mov")]);
        let manifest = dir.path().join("manifest.csv");
        let mut text = fs::read_to_string(&manifest).unwrap();
        text.push_str("s1,zbot,s1.txt\n");
        fs::write(&manifest, text).unwrap();
        assert!(matches!(load(&dir), Err(Error::MalformedManifest(_))));
    }

    #[test]
    fn vocabulary_first_occurrence_order() {
        let corpus = Corpus::from_samples(
            vec![raw_sample("a", "f", &["MOV", "ADD", "MOV"])],
            None,
        );
        let vocab = build_vocabulary(&corpus).unwrap();
        assert_eq!(vocab.m(), 2);
        assert_eq!(vocab.encode("MOV"), 0);
        assert_eq!(vocab.encode("ADD"), 1);
        assert_eq!(vocab.unk_index(), 2);
        assert_eq!(vocab.total_symbols(), 3);
    }

    #[test]
    fn vocabulary_of_empty_corpus_fails() {
        let corpus = Corpus::from_samples(vec![], None);
        assert!(matches!(
            build_vocabulary(&corpus),
            Err(Error::EmptyCorpus(_))
        ));
    }

    #[test]
    fn encode_maps_unknown_to_unk_and_roundtrips_known() {
        let train = Corpus::from_samples(vec![raw_sample("a", "f", &["MOV", "ADD"])], None);
        let vocab = build_vocabulary(&train).unwrap();
        let test = Corpus::from_samples(vec![raw_sample("b", "f", &["ADD", "XCHG", "MOV"])], None);
        let encoded = encode_corpus(test, &vocab).unwrap();
        assert_eq!(encoded.samples[0].encoded().unwrap(), &[1, 2, 0]);
        assert_eq!(encoded.samples[0].raw_length, 3);
        // Known tokens decode back to themselves.
        assert_eq!(vocab.decode(0), "MOV");
        assert_eq!(vocab.decode(1), "ADD");
        assert_eq!(vocab.decode(2), UNK_TOKEN);
    }

    #[test]
    fn encode_all_unknown_tokens() {
        let train = Corpus::from_samples(vec![raw_sample("a", "f", &["MOV"])], None);
        let vocab = build_vocabulary(&train).unwrap();
        let adversarial =
            Corpus::from_samples(vec![raw_sample("b", "f", &["JMP", "CALL", "RET"])], None);
        let encoded = encode_corpus(adversarial, &vocab).unwrap();
        let unk = vocab.unk_index();
        assert!(encoded.samples[0]
            .encoded()
            .unwrap()
            .iter()
            .all(|&t| t == unk));
    }

    #[test]
    fn filter_boundary_at_min_family_size() {
        let corpus = toy_corpus(&[("small", 49), ("kept", 50)]);
        let split = filter_and_split(&corpus, 50, 0.8, 1).unwrap();
        assert_eq!(split.train.families, vec!["kept"]);
        assert_eq!(split.test.families, vec!["kept"]);
        assert_eq!(split.train.len() + split.test.len(), 50);
    }

    #[test]
    fn split_is_stratified_floor() {
        let corpus = toy_corpus(&[("a", 100), ("b", 57)]);
        let split = filter_and_split(&corpus, 50, 0.8, 9).unwrap();
        let train_by = split.train.indices_by_family();
        let test_by = split.test.indices_by_family();
        assert_eq!(train_by["a"].len(), 80);
        assert_eq!(test_by["a"].len(), 20);
        assert_eq!(train_by["b"].len(), 45); // floor(0.8 * 57)
        assert_eq!(test_by["b"].len(), 12);
    }

    #[test]
    fn split_partitions_and_is_deterministic() {
        let corpus = toy_corpus(&[("a", 60), ("b", 55)]);
        let s1 = filter_and_split(&corpus, 50, 0.8, 123).unwrap();
        let s2 = filter_and_split(&corpus, 50, 0.8, 123).unwrap();
        let ids = |c: &Corpus| -> Vec<String> {
            c.samples.iter().map(|s| s.sample_id.clone()).collect()
        };
        assert_eq!(ids(&s1.train), ids(&s2.train));
        assert_eq!(ids(&s1.test), ids(&s2.test));

        let mut all: Vec<String> = ids(&s1.train);
        all.extend(ids(&s1.test));
        all.sort();
        let mut expected: Vec<String> =
            corpus.samples.iter().map(|s| s.sample_id.clone()).collect();
        expected.sort();
        assert_eq!(all, expected);

        let s3 = filter_and_split(&corpus, 50, 0.8, 124).unwrap();
        assert_ne!(ids(&s1.train), ids(&s3.train));
    }

    #[test]
    fn split_rejects_bad_fraction_and_empty_filter() {
        let corpus = toy_corpus(&[("a", 10)]);
        assert!(matches!(
            filter_and_split(&corpus, 5, 1.0, 0),
            Err(Error::InvalidInput(_))
        ));
        assert!(matches!(
            filter_and_split(&corpus, 50, 0.8, 0),
            Err(Error::EmptyCorpus(_))
        ));
    }

    #[test]
    fn drop_short_boundary() {
        let corpus = Corpus::from_samples(
            vec![
                raw_sample("short", "f", &["MOV"]),
                raw_sample("exact", "f", &["MOV", "ADD"]),
                raw_sample("long", "g", &["MOV", "ADD", "XOR"]),
            ],
            None,
        );
        let (kept, report) = drop_short(&corpus, 2).unwrap();
        assert_eq!(kept.len(), 2);
        assert_eq!(report.dropped, vec!["short".to_string()]);
        assert_eq!(report.per_family["f"], 1);
        assert!(!report.per_family.contains_key("g"));
    }

    #[test]
    fn drop_short_identity_when_nothing_short() {
        let corpus = toy_corpus(&[("a", 3)]);
        let (kept, report) = drop_short(&corpus, 1).unwrap();
        assert_eq!(kept.len(), 3);
        assert!(report.dropped.is_empty());
        assert!(report.per_family.is_empty());
        let json = serde_json::to_string(&report).unwrap();
        assert_eq!(json, r#"{"dropped":[],"per_family":{}}"#);
    }

    #[test]
    fn vocabulary_serde_roundtrip() {
        let train = Corpus::from_samples(vec![raw_sample("a", "f", &["MOV", "ADD"])], None);
        let vocab = build_vocabulary(&train).unwrap();
        let json = serde_json::to_string(&vocab).unwrap();
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(back, vocab);
    }
}
