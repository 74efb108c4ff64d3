//! Token to issuing-protocol resolution.
//!
//! Each token is resolved by the first stage that succeeds:
//!
//! 1. the metadata map (`token -> protocol` as listed by the data source),
//! 2. the manually curated map,
//! 3. TF-IDF cosine similarity between the token's description and every
//!    protocol description, accepted when the best score exceeds a threshold,
//! 4. a catch-all that makes the token its own issuer (primary-market token).
//!
//! The last stage is total, so every submitted token gets exactly one entry.

use std::collections::{BTreeMap, HashMap};
use std::io::Read;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_SIMILARITY_THRESHOLD: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Metadata,
    Manual,
    Tfidf,
    PrimaryMarket,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapEntry {
    pub protocol_id: String,
    pub stage: Stage,
    /// Similarity score; present only for [`Stage::Tfidf`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TokenProtocolMap {
    pub entries: BTreeMap<String, MapEntry>,
}

impl TokenProtocolMap {
    pub fn get(&self, token: &str) -> Option<&MapEntry> {
        self.entries.get(token)
    }

    /// Issuer of `token`. Tokens never submitted for resolution are treated
    /// as primary-market tokens and issue themselves.
    pub fn issuer<'a>(&'a self, token: &'a str) -> &'a str {
        self.entries
            .get(token)
            .map(|e| e.protocol_id.as_str())
            .unwrap_or(token)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Builds a map directly from `token -> protocol` pairs, all tagged
    /// with `stage`.
    pub fn from_pairs<I, K, V>(pairs: I, stage: Stage) -> Self
    where
        I: IntoIterator<Item = (K, V)>,
        K: Into<String>,
        V: Into<String>,
    {
        let entries = pairs
            .into_iter()
            .map(|(k, v)| {
                (
                    k.into(),
                    MapEntry {
                        protocol_id: v.into(),
                        stage,
                        score: None,
                    },
                )
            })
            .collect();
        TokenProtocolMap { entries }
    }

    pub fn stage_counts(&self) -> BTreeMap<Stage, usize> {
        let mut out = BTreeMap::new();
        for e in self.entries.values() {
            *out.entry(e.stage).or_insert(0) += 1;
        }
        out
    }

    pub fn write_csv<W: std::io::Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["token_id", "protocol_id", "stage", "score"])?;
        for (token, e) in &self.entries {
            let stage = serde_json::to_value(e.stage)?;
            w.write_record([
                token.as_str(),
                e.protocol_id.as_str(),
                stage.as_str().unwrap_or_default(),
                &e.score.map(|s| s.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(source: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(source);
        let mut entries = BTreeMap::new();
        for row in r.records() {
            let row = row?;
            if row.len() < 3 {
                return Err(Error::Format("token map rows need token_id,protocol_id,stage".into()));
            }
            let stage: Stage = serde_json::from_value(serde_json::Value::String(row[2].to_owned()))
                .map_err(|_| Error::Format(format!("unknown stage `{}`", &row[2])))?;
            let score = match row.get(3) {
                Some(s) if !s.is_empty() => Some(
                    s.parse::<f64>()
                        .map_err(|_| Error::Format(format!("bad score `{s}`")))?,
                ),
                _ => None,
            };
            entries.insert(
                row[0].to_owned(),
                MapEntry {
                    protocol_id: row[1].to_owned(),
                    stage,
                    score,
                },
            );
        }
        Ok(TokenProtocolMap { entries })
    }
}

/// Loads a two-column `token_id,protocol_id` CSV with header.
pub fn load_manual_map<R: Read>(source: R) -> Result<BTreeMap<String, String>> {
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(source);
    let header = r.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != ["token_id", "protocol_id"] {
        return Err(Error::Format(
            "manual map header must be `token_id,protocol_id`".into(),
        ));
    }
    let mut out = BTreeMap::new();
    for row in r.records() {
        let row = row?;
        if row.len() != 2 || row[0].is_empty() || row[1].is_empty() {
            return Err(Error::Format(format!(
                "manual map line {}: expected two non-empty fields",
                row.position().map(|p| p.line()).unwrap_or(0)
            )));
        }
        out.insert(row[0].to_owned(), row[1].to_owned());
    }
    Ok(out)
}

/// Loads a JSON object `{token_id: protocol_id}`.
pub fn load_metadata_map<R: Read>(source: R) -> Result<BTreeMap<String, String>> {
    Ok(serde_json::from_reader(source)?)
}

/// Lowercases and splits on anything that is not alphanumeric.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "id", rename_all = "snake_case")]
pub enum EntityId {
    Token(String),
    Protocol(String),
}

/// Token and protocol descriptions sharing one vocabulary and one set of
/// inverse document frequencies.
#[derive(Debug, Clone, PartialEq)]
pub struct TextCorpus {
    pub docs: BTreeMap<EntityId, String>,
    /// Sorted, duplicate-free.
    pub vocab: Vec<String>,
    /// `idf[i] = ln(N / df(vocab[i]))` over all documents.
    pub idf: Vec<f64>,
}

impl TextCorpus {
    pub fn new(
        token_texts: &BTreeMap<String, String>,
        protocol_texts: &BTreeMap<String, String>,
    ) -> Self {
        let docs: BTreeMap<EntityId, String> = token_texts
            .iter()
            .map(|(k, v)| (EntityId::Token(k.clone()), v.clone()))
            .chain(
                protocol_texts
                    .iter()
                    .map(|(k, v)| (EntityId::Protocol(k.clone()), v.clone())),
            )
            .collect();

        let mut df: BTreeMap<String, usize> = BTreeMap::new();
        for text in docs.values() {
            let mut terms = tokenize(text);
            terms.sort_unstable();
            terms.dedup();
            for t in terms {
                *df.entry(t).or_insert(0) += 1;
            }
        }
        let n = docs.len() as f64;
        let (vocab, idf) = df
            .into_iter()
            .map(|(t, d)| (t, (n / d as f64).ln()))
            .unzip();
        TextCorpus { docs, vocab, idf }
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    fn term_index(&self) -> HashMap<&str, usize> {
        self.vocab
            .iter()
            .enumerate()
            .map(|(i, t)| (t.as_str(), i))
            .collect()
    }
}

/// Sparse vector as `(term index, weight)` pairs sorted by index, zeros
/// omitted.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseVector(pub Vec<(usize, f64)>);

impl SparseVector {
    pub fn dot(&self, other: &SparseVector) -> f64 {
        let (mut i, mut j, mut acc) = (0, 0, 0.0);
        let (a, b) = (&self.0, &other.0);
        while i < a.len() && j < b.len() {
            match a[i].0.cmp(&b[j].0) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    acc += a[i].1 * b[j].1;
                    i += 1;
                    j += 1;
                }
            }
        }
        acc
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|(_, v)| v * v).sum::<f64>().sqrt()
    }

    pub fn get(&self, index: usize) -> f64 {
        self.0
            .binary_search_by_key(&index, |(i, _)| *i)
            .map(|k| self.0[k].1)
            .unwrap_or(0.0)
    }
}

/// Raw term count times inverse document frequency, per document.
pub fn tfidf_vectors(corpus: &TextCorpus) -> Result<BTreeMap<EntityId, SparseVector>> {
    if corpus.is_empty() {
        return Err(Error::Parameter("TF-IDF needs a non-empty corpus".into()));
    }
    let index = corpus.term_index();
    Ok(corpus
        .docs
        .iter()
        .map(|(id, text)| {
            let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
            for term in tokenize(text) {
                *counts.entry(index[term.as_str()]).or_insert(0) += 1;
            }
            let v = counts
                .into_iter()
                .map(|(i, c)| (i, c as f64 * corpus.idf[i]))
                .filter(|(_, w)| *w != 0.0)
                .collect();
            (id.clone(), SparseVector(v))
        })
        .collect())
}

/// Cosine of the angle between `a` and `b`; zero when either is zero.
pub fn cosine_similarity(a: &SparseVector, b: &SparseVector) -> f64 {
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (a.dot(b) / (na * nb)).clamp(-1.0, 1.0)
}

/// Resolves tokens against fixed lookup tables and a fixed corpus.
#[derive(Debug, Clone)]
pub struct Resolver {
    metadata: BTreeMap<String, String>,
    manual: BTreeMap<String, String>,
    token_vectors: BTreeMap<String, SparseVector>,
    protocol_vectors: Vec<(String, SparseVector)>,
    threshold: f64,
}

impl Resolver {
    pub fn new(
        metadata: BTreeMap<String, String>,
        manual: BTreeMap<String, String>,
        corpus: &TextCorpus,
        threshold: f64,
    ) -> Result<Self> {
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(Error::Config(format!(
                "similarity threshold must lie in (0, 1), got {threshold}"
            )));
        }
        let mut token_vectors = BTreeMap::new();
        let mut protocol_vectors = Vec::new();
        if !corpus.is_empty() {
            for (id, v) in tfidf_vectors(corpus)? {
                match id {
                    EntityId::Token(t) => {
                        token_vectors.insert(t, v);
                    }
                    // BTreeMap order keeps protocols lexicographic.
                    EntityId::Protocol(p) => protocol_vectors.push((p, v)),
                }
            }
        }
        Ok(Resolver {
            metadata,
            manual,
            token_vectors,
            protocol_vectors,
            threshold,
        })
    }

    pub fn resolve(&self, token: &str) -> MapEntry {
        if let Some(p) = self.metadata.get(token) {
            return MapEntry {
                protocol_id: p.clone(),
                stage: Stage::Metadata,
                score: None,
            };
        }
        if let Some(p) = self.manual.get(token) {
            return MapEntry {
                protocol_id: p.clone(),
                stage: Stage::Manual,
                score: None,
            };
        }
        if let Some(v) = self.token_vectors.get(token) {
            let mut best: Option<(&str, f64)> = None;
            for (p, pv) in &self.protocol_vectors {
                let s = cosine_similarity(v, pv);
                // Strict comparison keeps the lexicographically first
                // protocol on ties.
                if best.is_none_or(|(_, b)| s > b) {
                    best = Some((p, s));
                }
            }
            if let Some((p, s)) = best {
                if s > self.threshold {
                    return MapEntry {
                        protocol_id: p.to_owned(),
                        stage: Stage::Tfidf,
                        score: Some(s),
                    };
                }
            }
        }
        MapEntry {
            protocol_id: token.to_owned(),
            stage: Stage::PrimaryMarket,
            score: None,
        }
    }

    pub fn resolve_all<'a, I>(&self, tokens: I) -> TokenProtocolMap
    where
        I: IntoIterator<Item = &'a str>,
    {
        let tokens: Vec<&str> = tokens.into_iter().collect();
        let entries = tokens
            .par_iter()
            .map(|t| ((*t).to_owned(), self.resolve(t)))
            .collect::<Vec<_>>()
            .into_iter()
            .collect();
        TokenProtocolMap { entries }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texts(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs
            .iter()
            .map(|(k, v)| ((*k).to_owned(), (*v).to_owned()))
            .collect()
    }

    fn manual() -> BTreeMap<String, String> {
        texts(&[("WETH", "WETH"), ("DAI", "MakerDAO"), ("USDC", "Circle")])
    }

    #[test]
    fn manual_entries_resolve() {
        let corpus = TextCorpus::new(&BTreeMap::new(), &BTreeMap::new());
        let r = Resolver::new(BTreeMap::new(), manual(), &corpus, 0.3).unwrap();
        let weth = r.resolve("WETH");
        assert_eq!((weth.protocol_id.as_str(), weth.stage), ("WETH", Stage::Manual));
        let dai = r.resolve("DAI");
        assert_eq!((dai.protocol_id.as_str(), dai.stage), ("MakerDAO", Stage::Manual));
    }

    #[test]
    fn metadata_beats_manual() {
        let corpus = TextCorpus::new(&BTreeMap::new(), &BTreeMap::new());
        let r = Resolver::new(texts(&[("DAI", "Sky")]), manual(), &corpus, 0.3).unwrap();
        assert_eq!(r.resolve("DAI").protocol_id, "Sky");
        assert_eq!(r.resolve("DAI").stage, Stage::Metadata);
    }

    #[test]
    fn identical_description_matches_with_score_one() {
        let tokens = texts(&[("stkX", "staked governance receipt of the xylo vault")]);
        let protocols = texts(&[
            ("Xylo", "staked governance receipt of the xylo vault"),
            ("Other", "a lending market for stablecoins"),
            ("Third", "perpetual futures exchange"),
        ]);
        let corpus = TextCorpus::new(&tokens, &protocols);
        let r = Resolver::new(BTreeMap::new(), BTreeMap::new(), &corpus, 0.5).unwrap();
        let e = r.resolve("stkX");
        assert_eq!(e.protocol_id, "Xylo");
        assert_eq!(e.stage, Stage::Tfidf);
        assert!((e.score.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unmatched_token_is_its_own_issuer() {
        let tokens = texts(&[("XYZQ", "completely unrelated words")]);
        let protocols = texts(&[("A", "lending market"), ("B", "exchange venue")]);
        let corpus = TextCorpus::new(&tokens, &protocols);
        let r = Resolver::new(BTreeMap::new(), BTreeMap::new(), &corpus, 0.3).unwrap();
        let e = r.resolve("XYZQ");
        assert_eq!(e.protocol_id, "XYZQ");
        assert_eq!(e.stage, Stage::PrimaryMarket);
        assert_eq!(e.score, None);
        // No description at all.
        assert_eq!(r.resolve("NOPE").stage, Stage::PrimaryMarket);
    }

    #[test]
    fn similarity_ties_go_to_smallest_protocol_id() {
        let tokens = texts(&[("tok", "shared words here")]);
        let protocols = texts(&[
            ("beta", "shared words here"),
            ("alpha", "shared words here"),
            ("gamma", "nothing in common"),
        ]);
        let corpus = TextCorpus::new(&tokens, &protocols);
        let r = Resolver::new(BTreeMap::new(), BTreeMap::new(), &corpus, 0.3).unwrap();
        assert_eq!(r.resolve("tok").protocol_id, "alpha");
    }

    #[test]
    fn idf_of_identical_docs_is_zero() {
        let corpus = TextCorpus::new(&texts(&[("a", "same text")]), &texts(&[("b", "same text")]));
        assert!(corpus.idf.iter().all(|&v| v == 0.0));
        let vecs = tfidf_vectors(&corpus).unwrap();
        assert!(vecs.values().all(|v| v.0.is_empty()));
    }

    #[test]
    fn tfidf_hand_values() {
        let corpus = TextCorpus::new(&texts(&[("x", "alpha beta")]), &texts(&[("p", "gamma")]));
        let vecs = tfidf_vectors(&corpus).unwrap();
        let alpha = corpus.vocab.iter().position(|t| t == "alpha").unwrap();
        let v = &vecs[&EntityId::Token("x".into())];
        assert!((v.get(alpha) - 2f64.ln()).abs() < 1e-15);
        assert!((corpus.idf[alpha] - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn single_doc_is_zero_vector() {
        let corpus = TextCorpus::new(&texts(&[("x", "alpha beta")]), &BTreeMap::new());
        let vecs = tfidf_vectors(&corpus).unwrap();
        assert!(vecs.values().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let corpus = TextCorpus::new(&BTreeMap::new(), &BTreeMap::new());
        assert!(tfidf_vectors(&corpus).is_err());
    }

    #[test]
    fn cosine_examples() {
        let a = SparseVector(vec![(0, 1.0), (1, 1.0)]);
        let b = SparseVector(vec![(0, 1.0), (2, 1.0)]);
        assert!((cosine_similarity(&a, &b) - 0.5).abs() < 1e-12);
        assert!((cosine_similarity(&a, &a) - 1.0).abs() < 1e-12);
        let c = SparseVector(vec![(5, 2.0)]);
        assert_eq!(cosine_similarity(&a, &c), 0.0);
        assert_eq!(cosine_similarity(&a, &SparseVector::default()), 0.0);
    }

    #[test]
    fn tokenizer_lowercases_and_splits() {
        assert_eq!(tokenize("Wrapped-ETH (v2)"), vec!["wrapped", "eth", "v2"]);
    }

    #[test]
    fn manual_map_csv() {
        let m = load_manual_map("token_id,protocol_id\nDAI,MakerDAO\n# note\nWETH,WETH\n".as_bytes())
            .unwrap();
        assert_eq!(m["DAI"], "MakerDAO");
        assert_eq!(m.len(), 2);
        assert!(load_manual_map("a,b\nDAI,MakerDAO\n".as_bytes()).is_err());
    }

    #[test]
    fn map_csv_round_trip() {
        let corpus = TextCorpus::new(&BTreeMap::new(), &BTreeMap::new());
        let r = Resolver::new(texts(&[("A", "pa")]), manual(), &corpus, 0.3).unwrap();
        let map = r.resolve_all(["A", "DAI", "ZZZ"]);
        let mut buf = Vec::new();
        map.write_csv(&mut buf).unwrap();
        assert_eq!(TokenProtocolMap::read_csv(buf.as_slice()).unwrap(), map);
    }

    #[test]
    fn threshold_is_validated() {
        let corpus = TextCorpus::new(&BTreeMap::new(), &BTreeMap::new());
        assert!(Resolver::new(BTreeMap::new(), BTreeMap::new(), &corpus, 1.0).is_err());
        assert!(Resolver::new(BTreeMap::new(), BTreeMap::new(), &corpus, 0.0).is_err());
    }
}
