//! Prefix expansion and the TF-IDF → truncated SVD featurization.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::event_schema::{DomainSet, EncodedEpisode, Vocabulary};
use crate::linalg::{randomized_svd, Csr, SparseVec, SvdOptions, SvdProjector};
use crate::par;

pub const DEFAULT_K: usize = 5;
pub const DEFAULT_SVD_RANK: usize = 256;
pub const TIME_FEATS: usize = 2;
const MIN_DF: usize = 2;

/// Anytime-supervision row: the first `ell` content tokens of an episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefixRow {
    pub episode_id: String,
    pub ell: usize,
    pub tokens: Vec<u32>,
    pub labels: DomainSet,
    pub weight: f64,
    #[serde(default)]
    pub time_feats: Vec<f64>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub danger: bool,
}

/// Rows for `ell = 1..=min(K, L)` with weights `ell / K`.
pub fn expand_prefixes(ep: &EncodedEpisode, k: usize) -> Vec<PrefixRow> {
    let content = ep.content();
    let n = k.min(content.len());
    (1..=n)
        .map(|ell| PrefixRow {
            episode_id: ep.episode_id.clone(),
            ell,
            tokens: content[..ell].to_vec(),
            labels: ep.labels,
            weight: ell as f64 / k as f64,
            time_feats: ep.time_feats.clone(),
            danger: ep.danger,
        })
        .collect()
}

pub fn expand_all(eps: &[EncodedEpisode], k: usize) -> Vec<PrefixRow> {
    eps.iter().flat_map(|e| expand_prefixes(e, k)).collect()
}

/// Space-joined rendered tokens.
pub fn prefix_document(tokens: &[u32], vocab: &Vocabulary) -> String {
    tokens
        .iter()
        .map(|&t| vocab.decode(t).unwrap_or("[UNK]"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn ngrams(doc: &str) -> Vec<String> {
    let toks: Vec<&str> = doc.split_whitespace().collect();
    let mut out: Vec<String> = toks.iter().map(|t| t.to_string()).collect();
    out.extend(toks.windows(2).map(|w| format!("{} {}", w[0], w[1])));
    out
}

/// 1–2-gram TF-IDF with `min_df = 2`, raw term counts, smoothed idf
/// `ln((1+N)/(1+df)) + 1` and L2 row normalization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TfidfModel {
    pub version: u32,
    pub n_docs: usize,
    pub terms: Vec<String>,
    pub idf: Vec<f64>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl PartialEq for TfidfModel {
    fn eq(&self, o: &Self) -> bool {
        self.version == o.version
            && self.n_docs == o.n_docs
            && self.terms == o.terms
            && self.idf == o.idf
    }
}

impl TfidfModel {
    pub fn fit(docs: &[String]) -> Result<Self> {
        if docs.len() < 2 {
            return Err(Error::Degenerate(format!(
                "tf-idf needs at least 2 documents, got {}",
                docs.len()
            )));
        }
        let mut df: BTreeMap<String, usize> = BTreeMap::new();
        for d in docs {
            let mut grams = ngrams(d);
            grams.sort();
            grams.dedup();
            for g in grams {
                *df.entry(g).or_default() += 1;
            }
        }
        let n = docs.len() as f64;
        let (terms, idf): (Vec<String>, Vec<f64>) = df
            .into_iter()
            .filter(|(_, c)| *c >= MIN_DF)
            .map(|(t, c)| {
                let idf = ((1.0 + n) / (1.0 + c as f64)).ln() + 1.0;
                (t, idf)
            })
            .unzip();
        if terms.is_empty() {
            return Err(Error::Degenerate("no term reaches min_df = 2".into()));
        }
        let mut m = Self {
            version: 1,
            n_docs: docs.len(),
            terms,
            idf,
            index: HashMap::new(),
        };
        m.rebuild_index();
        Ok(m)
    }

    pub fn rebuild_index(&mut self) {
        self.index = self
            .terms
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
    }

    pub fn n_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn transform(&self, doc: &str) -> SparseVec {
        let mut tf: BTreeMap<u32, f64> = BTreeMap::new();
        for g in ngrams(doc) {
            if let Some(&c) = self.index.get(&g) {
                *tf.entry(c).or_default() += 1.0;
            }
        }
        let mut v: SparseVec = tf
            .into_iter()
            .map(|(c, n)| (c, n * self.idf[c as usize]))
            .collect();
        let norm = v.iter().map(|(_, x)| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            for (_, x) in v.iter_mut() {
                *x /= norm;
            }
        }
        v
    }
}

pub fn tfidf_fit(docs: &[String]) -> Result<TfidfModel> {
    TfidfModel::fit(docs)
}

pub fn svd_fit(rows: &[SparseVec], n_cols: usize, rank: usize, seed: u64) -> Result<SvdProjector> {
    randomized_svd(
        &Csr::new(rows, n_cols),
        rank,
        SvdOptions {
            seed,
            ..SvdOptions::default()
        },
    )
}

/// Fitted TF-IDF + SVD with the time-feature switch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Featurizer {
    pub version: u32,
    pub tfidf: TfidfModel,
    pub svd: SvdProjector,
    pub use_time: bool,
    pub seed: u64,
}

impl Featurizer {
    /// Fit on training prefix documents.
    pub fn fit(docs: &[String], rank: usize, use_time: bool, seed: u64) -> Result<Self> {
        let tfidf = TfidfModel::fit(docs)?;
        let rows = par::map(docs, |d| tfidf.transform(d));
        let svd = svd_fit(&rows, tfidf.n_terms(), rank, seed)?;
        Ok(Self {
            version: 1,
            tfidf,
            svd,
            use_time,
            seed,
        })
    }

    pub fn dim(&self) -> usize {
        self.svd.rank + if self.use_time { TIME_FEATS } else { 0 }
    }

    /// `[SVD projection of the tf-idf vector ; ln(1 + time_feats)]`. Missing
    /// time features are filled with 0.
    pub fn featurize(&self, doc: &str, time_feats: &[f64]) -> Vec<f64> {
        let mut z = self.svd.project(&self.tfidf.transform(doc));
        if self.use_time {
            for i in 0..TIME_FEATS {
                let t = time_feats.get(i).copied().unwrap_or(0.0).max(0.0);
                z.push(t.ln_1p());
            }
        }
        z
    }

    pub fn featurize_row(&self, row: &PrefixRow, vocab: &Vocabulary) -> Vec<f64> {
        self.featurize(&prefix_document(&row.tokens, vocab), &row.time_feats)
    }

    pub fn featurize_rows(&self, rows: &[PrefixRow], vocab: &Vocabulary) -> Vec<Vec<f64>> {
        par::map(rows, |r| self.featurize_row(r, vocab))
    }

    /// SHA-256 of the canonical JSON serialization.
    pub fn model_hash(&self) -> [u8; 32] {
        let bytes = serde_json::to_vec(self).expect("featurizer serializes");
        Sha256::digest(&bytes).into()
    }

    pub fn restore_index(&mut self) {
        self.tfidf.rebuild_index();
    }
}

const FEATURE_MAGIC: &[u8; 8] = b"PCFEAT01";

/// Dense feature matrix with header `{N, dim, seed, model hash}`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub n: usize,
    pub dim: usize,
    pub seed: u64,
    pub model_hash: [u8; 32],
    pub data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn from_rows(
        rows: &[Vec<f64>],
        dim: usize,
        seed: u64,
        model_hash: [u8; 32],
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.len() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            n: rows.len(),
            dim,
            seed,
            model_hash,
            data,
        })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.dim.max(1))
    }

    pub fn write(&self, mut w: impl Write) -> Result<()> {
        w.write_all(FEATURE_MAGIC)?;
        w.write_all(&(self.n as u64).to_le_bytes())?;
        w.write_all(&(self.dim as u64).to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&self.model_hash)?;
        for x in &self.data {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != FEATURE_MAGIC {
            return Err(Error::Data("not a feature matrix file".into()));
        }
        let mut u = [0u8; 8];
        let mut next = |r: &mut dyn Read| -> Result<u64> {
            r.read_exact(&mut u)?;
            Ok(u64::from_le_bytes(u))
        };
        let n = next(&mut r)? as usize;
        let dim = next(&mut r)? as usize;
        let seed = next(&mut r)?;
        let mut model_hash = [0u8; 32];
        r.read_exact(&mut model_hash)?;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != n * dim * 8 {
            return Err(Error::Data(format!(
                "feature payload has {} bytes, header implies {}",
                bytes.len(),
                n * dim * 8
            )));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Self {
            n,
            dim,
            seed,
            model_hash,
            data,
        })
    }
}
