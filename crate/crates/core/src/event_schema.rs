//! Clinical event model, token template, deterministic ordering, gap markers,
//! vocabulary and sequence assembly.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Maximum sequence length including `[BOS]` and `[EOS]`.
pub const MAX_SEQ_LEN: usize = 512;

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const BOS_ID: u32 = 2;
pub const EOS_ID: u32 = 3;

/// Fixed sentinel tokens, in id order.
pub const SENTINELS: [&str; 4] = ["[PAD]", "[UNK]", "[BOS]", "[EOS]"];

/// Default gap thresholds in hours.
pub const DEFAULT_GAP_HOURS: [u32; 2] = [1, 6];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum EventKind {
    Diag,
    Lab,
    Order,
    Gap,
    Bos,
    Eos,
    Pad,
    Unk,
}

impl EventKind {
    /// Sort precedence within a timestamp. Only the three coded kinds have a
    /// defined rank; everything else sorts after them.
    pub fn precedence(self) -> u8 {
        match self {
            EventKind::Diag => 0,
            EventKind::Lab => 1,
            EventKind::Order => 2,
            EventKind::Gap => 3,
            _ => 4,
        }
    }

    pub fn is_sentinel(self) -> bool {
        matches!(
            self,
            EventKind::Bos | EventKind::Eos | EventKind::Pad | EventKind::Unk
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum LabBin {
    Low,
    Normal,
    High,
    Critical,
    Pos,
    Neg,
}

impl LabBin {
    pub const ALL: [LabBin; 6] = [
        LabBin::Low,
        LabBin::Normal,
        LabBin::High,
        LabBin::Critical,
        LabBin::Pos,
        LabBin::Neg,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LabBin::Low => "LOW",
            LabBin::Normal => "NORMAL",
            LabBin::High => "HIGH",
            LabBin::Critical => "CRITICAL",
            LabBin::Pos => "POS",
            LabBin::Neg => "NEG",
        }
    }
}

impl FromStr for LabBin {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LabBin::ALL
            .iter()
            .copied()
            .find(|b| b.as_str() == s)
            .ok_or_else(|| Error::Schema(format!("unknown lab bin {s:?}")))
    }
}

/// One timestamped coded event.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClinicalEvent {
    pub kind: EventKind,
    pub code: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bin: Option<LabBin>,
    /// Minutes since episode start.
    pub t_min: u32,
}

impl ClinicalEvent {
    pub fn diag(code: impl Into<String>, t_min: u32) -> Self {
        Self {
            kind: EventKind::Diag,
            code: code.into(),
            bin: None,
            t_min,
        }
    }

    pub fn lab(test: impl Into<String>, bin: LabBin, t_min: u32) -> Self {
        Self {
            kind: EventKind::Lab,
            code: test.into(),
            bin: Some(bin),
            t_min,
        }
    }

    pub fn order(code: impl Into<String>, t_min: u32) -> Self {
        Self {
            kind: EventKind::Order,
            code: code.into(),
            bin: None,
            t_min,
        }
    }

    pub fn gap(hours: u32, t_min: u32) -> Self {
        Self {
            kind: EventKind::Gap,
            code: hours.to_string(),
            bin: None,
            t_min,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.kind, self.bin) {
            (EventKind::Lab, None) => {
                return Err(Error::Schema(format!(
                    "LAB event {:?} without a value bin",
                    self.code
                )))
            }
            (k, Some(_)) if k != EventKind::Lab => {
                return Err(Error::Schema(format!(
                    "{k:?} event {:?} carries a value bin",
                    self.code
                )))
            }
            _ => {}
        }
        if !self.kind.is_sentinel() {
            if self.code.is_empty() {
                return Err(Error::Schema(format!(
                    "{:?} event with empty code",
                    self.kind
                )));
            }
            if self.code.chars().any(char::is_whitespace) {
                return Err(Error::Schema(format!(
                    "code {:?} contains whitespace",
                    self.code
                )));
            }
        }
        if self.kind == EventKind::Lab && self.code.contains(':') {
            return Err(Error::Schema(format!(
                "lab test {:?} contains ':'",
                self.code
            )));
        }
        if self.kind == EventKind::Gap && self.code.parse::<u32>().map_or(true, |k| k == 0) {
            return Err(Error::Schema(format!(
                "gap marker hours {:?} is not a positive integer",
                self.code
            )));
        }
        Ok(())
    }
}

/// A rendered schema token.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Token(String);

impl Token {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn into_string(self) -> String {
        self.0
    }

    /// Validate `text` against the token grammar.
    pub fn parse(text: &str) -> Result<Token> {
        let ok = if SENTINELS.contains(&text) {
            true
        } else if let Some(code) = text.strip_prefix("[DIAG]_ICD9_") {
            valid_code(code)
        } else if let Some(rest) = text.strip_prefix("[OBS]_LAB_") {
            match rest.split_once(':') {
                Some((test, bin)) => {
                    valid_code(test) && !test.contains(':') && bin.parse::<LabBin>().is_ok()
                }
                None => false,
            }
        } else if let Some(code) = text.strip_prefix("[ACTION]_ORD_") {
            valid_code(code)
        } else if let Some(k) = text.strip_prefix("[GAP]_H") {
            k.parse::<u32>().is_ok_and(|k| k > 0) && !k.starts_with('+') && !k.starts_with('0')
        } else {
            false
        };
        if ok {
            Ok(Token(text.to_string()))
        } else {
            Err(Error::Schema(format!(
                "{text:?} matches no token production"
            )))
        }
    }

    pub fn kind(&self) -> EventKind {
        let s = self.0.as_str();
        if s.starts_with("[DIAG]") {
            EventKind::Diag
        } else if s.starts_with("[OBS]") {
            EventKind::Lab
        } else if s.starts_with("[ACTION]") {
            EventKind::Order
        } else if s.starts_with("[GAP]") {
            EventKind::Gap
        } else {
            match s {
                "[BOS]" => EventKind::Bos,
                "[EOS]" => EventKind::Eos,
                "[PAD]" => EventKind::Pad,
                _ => EventKind::Unk,
            }
        }
    }

    /// Code family used by the vocabulary whitelist: `ICD9_<category>` for
    /// diagnoses (the part before the dot), `LAB_<test>` and `ORD_<order>`.
    /// Gap markers and sentinels have no family and are never filtered.
    pub fn family(&self) -> Option<String> {
        let s = self.0.as_str();
        if let Some(code) = s.strip_prefix("[DIAG]_") {
            let cat = code.split('.').next().unwrap_or(code);
            Some(cat.to_string())
        } else if let Some(rest) = s.strip_prefix("[OBS]_") {
            Some(rest.split(':').next().unwrap_or(rest).to_string())
        } else {
            s.strip_prefix("[ACTION]_").map(str::to_string)
        }
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

fn valid_code(code: &str) -> bool {
    !code.is_empty() && !code.chars().any(char::is_whitespace)
}

/// Render an event through the token template.
pub fn render_token(event: &ClinicalEvent) -> Result<Token> {
    event.validate()?;
    let text = match event.kind {
        EventKind::Diag => format!("[DIAG]_ICD9_{}", event.code),
        EventKind::Lab => {
            let bin = event.bin.expect("validated");
            format!("[OBS]_LAB_{}:{}", event.code, bin.as_str())
        }
        EventKind::Order => format!("[ACTION]_ORD_{}", event.code),
        EventKind::Gap => format!("[GAP]_H{}", event.code),
        EventKind::Bos => "[BOS]".to_string(),
        EventKind::Eos => "[EOS]".to_string(),
        EventKind::Pad => "[PAD]".to_string(),
        EventKind::Unk => "[UNK]".to_string(),
    };
    Ok(Token(text))
}

/// Rendering of a gold-label diagnosis code.
pub fn gold_token(code: &str) -> String {
    format!("[DIAG]_ICD9_{code}")
}

fn sort_text(e: &ClinicalEvent) -> String {
    render_token(e)
        .map(Token::into_string)
        .unwrap_or_else(|_| e.code.clone())
}

/// Sort by timestamp, then kind precedence (DIAG, LAB, ORDER), then byte-wise
/// rendered token text. Stable for identical tokens.
pub fn order_events(events: &[ClinicalEvent]) -> Vec<ClinicalEvent> {
    let mut keyed: Vec<(u32, u8, String, &ClinicalEvent)> = events
        .iter()
        .map(|e| (e.t_min, e.kind.precedence(), sort_text(e), e))
        .collect();
    keyed.sort_by(|a, b| {
        a.0.cmp(&b.0)
            .then(a.1.cmp(&b.1))
            .then_with(|| a.2.as_bytes().cmp(b.2.as_bytes()))
    });
    keyed.into_iter().map(|k| k.3.clone()).collect()
}

/// Insert `[GAP]_H<k>` between consecutive events for the largest threshold
/// `k` with `k*60 <= gap`. `thresholds_hours` must be ascending.
pub fn insert_gap_markers(
    events: &[ClinicalEvent],
    thresholds_hours: &[u32],
) -> Vec<ClinicalEvent> {
    let mut out = Vec::with_capacity(events.len() * 2);
    for (i, e) in events.iter().enumerate() {
        if i > 0 {
            let prev = &events[i - 1];
            let gap = e.t_min.saturating_sub(prev.t_min);
            if let Some(&k) = thresholds_hours.iter().rev().find(|&&k| k * 60 <= gap) {
                out.push(ClinicalEvent::gap(k, prev.t_min));
            }
        }
        out.push(e.clone());
    }
    out
}

/// Parameters of sequence assembly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceConfig {
    pub gap_hours: Vec<u32>,
    pub max_len: usize,
}

impl Default for SequenceConfig {
    fn default() -> Self {
        Self {
            gap_hours: DEFAULT_GAP_HOURS.to_vec(),
            max_len: MAX_SEQ_LEN,
        }
    }
}

/// Rendered content tokens of an episode: gold diagnosis removed, ordered,
/// gap markers inserted. No sentinels, no truncation.
pub fn content_tokens(
    events: &[ClinicalEvent],
    gold: Option<&str>,
    gap_hours: &[u32],
) -> Result<Vec<Token>> {
    let gold_text = gold.filter(|g| !g.is_empty()).map(gold_token);
    let mut kept = Vec::with_capacity(events.len());
    for e in events {
        let tok = render_token(e)?;
        if gold_text.as_deref() == Some(tok.as_str()) {
            continue;
        }
        kept.push(e.clone());
    }
    let ordered = order_events(&kept);
    insert_gap_markers(&ordered, gap_hours)
        .iter()
        .map(render_token)
        .collect()
}

/// `[BOS]` + encoded content tokens + `[EOS]`, keeping the most recent
/// `max_len - 2` content tokens.
pub fn build_sequence(
    events: &[ClinicalEvent],
    gold: Option<&str>,
    vocab: &Vocabulary,
    cfg: &SequenceConfig,
) -> Result<Vec<u32>> {
    if cfg.max_len < 2 {
        return Err(Error::Config(format!(
            "max_len {} cannot hold [BOS] and [EOS]",
            cfg.max_len
        )));
    }
    let tokens = content_tokens(events, gold, &cfg.gap_hours)?;
    let keep = cfg.max_len - 2;
    let start = tokens.len().saturating_sub(keep);
    let mut ids = Vec::with_capacity(tokens.len() - start + 2);
    ids.push(BOS_ID);
    ids.extend(tokens[start..].iter().map(|t| vocab.encode(t.as_str())));
    ids.push(EOS_ID);
    Ok(ids)
}

// ---------------------------------------------------------------------------
// Domains

/// Specialist domain. Declaration order is the arbitration priority.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Domain {
    Cardiac,
    Pulmonary,
    Gastro,
    Musculoskeletal,
    Psychogenic,
}

impl Domain {
    pub const ALL: [Domain; 5] = [
        Domain::Cardiac,
        Domain::Pulmonary,
        Domain::Gastro,
        Domain::Musculoskeletal,
        Domain::Psychogenic,
    ];
    pub const COUNT: usize = 5;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Domain> {
        Self::ALL.get(i).copied()
    }

    /// 1 = highest priority (Cardiac) … 5 = lowest (Psychogenic).
    pub fn priority(self) -> u8 {
        self as u8 + 1
    }

    pub fn is_life_threat(self) -> bool {
        matches!(self, Domain::Cardiac | Domain::Pulmonary)
    }

    pub fn name(self) -> &'static str {
        match self {
            Domain::Cardiac => "Cardiac",
            Domain::Pulmonary => "Pulmonary",
            Domain::Gastro => "Gastro",
            Domain::Musculoskeletal => "Musculoskeletal",
            Domain::Psychogenic => "Psychogenic",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Domain::ALL
            .iter()
            .copied()
            .find(|d| d.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Schema(format!("unknown domain {s:?}")))
    }
}

impl Serialize for Domain {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Domain {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Multi-hot set of domains, bit `i` = `Domain::ALL[i]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, PartialOrd, Ord)]
pub struct DomainSet(u8);

impl DomainSet {
    pub const EMPTY: DomainSet = DomainSet(0);
    pub const ALL: DomainSet = DomainSet(0b11111);
    pub const LIFE: DomainSet = DomainSet(0b00011);

    pub fn from_bits(bits: u8) -> DomainSet {
        DomainSet(bits & Self::ALL.0)
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn single(d: Domain) -> DomainSet {
        DomainSet(1 << d.index())
    }

    pub fn with(self, d: Domain) -> DomainSet {
        DomainSet(self.0 | (1 << d.index()))
    }

    pub fn insert(&mut self, d: Domain) {
        self.0 |= 1 << d.index();
    }

    pub fn contains(self, d: Domain) -> bool {
        self.0 & (1 << d.index()) != 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn union(self, other: DomainSet) -> DomainSet {
        DomainSet(self.0 | other.0)
    }

    pub fn intersects(self, other: DomainSet) -> bool {
        self.0 & other.0 != 0
    }

    pub fn is_subset(self, other: DomainSet) -> bool {
        self.0 & !other.0 == 0
    }

    /// Members in priority order.
    pub fn iter(self) -> impl Iterator<Item = Domain> {
        Domain::ALL.into_iter().filter(move |d| self.contains(*d))
    }

    /// Highest-priority member.
    pub fn primary(self) -> Option<Domain> {
        self.iter().next()
    }

    pub fn to_multi_hot(self) -> [bool; 5] {
        let mut out = [false; 5];
        for d in self.iter() {
            out[d.index()] = true;
        }
        out
    }
}

impl FromIterator<Domain> for DomainSet {
    fn from_iter<I: IntoIterator<Item = Domain>>(iter: I) -> Self {
        iter.into_iter().fold(DomainSet::EMPTY, DomainSet::with)
    }
}

impl Serialize for DomainSet {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_seq(self.iter())
    }
}

impl<'de> Deserialize<'de> for DomainSet {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = Vec::<Domain>::deserialize(d)?;
        Ok(v.into_iter().collect())
    }
}

// ---------------------------------------------------------------------------
// Episodes

/// One patient encounter, the record format of episode JSONL files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub episode_id: String,
    pub events: Vec<ClinicalEvent>,
    #[serde(default)]
    pub time_feats: Vec<f64>,
    #[serde(default)]
    pub labels: DomainSet,
    #[serde(default)]
    pub gold: String,
    /// Vitals danger flag; triggers fail-open routing.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub danger: bool,
}

impl Episode {
    pub fn validate(&self) -> Result<()> {
        if self.episode_id.is_empty() {
            return Err(Error::Schema("empty episode_id".into()));
        }
        for e in &self.events {
            e.validate()
                .map_err(|err| Error::Schema(format!("episode {}: {err}", self.episode_id)))?;
        }
        if self.time_feats.len() > 2 {
            return Err(Error::Schema(format!(
                "episode {}: {} time features, at most 2 allowed",
                self.episode_id,
                self.time_feats.len()
            )));
        }
        if self.time_feats.iter().any(|x| !x.is_finite()) {
            return Err(Error::Schema(format!(
                "episode {}: non-finite time feature",
                self.episode_id
            )));
        }
        Ok(())
    }

    pub fn is_training_eligible(&self) -> bool {
        !self.labels.is_empty()
    }
}

/// `[minutes to first order, max inter-event gap]` over chronologically
/// ordered events. Episodes without orders report the final timestamp as the
/// first feature.
pub fn compute_time_feats(events: &[ClinicalEvent]) -> Vec<f64> {
    let ordered = order_events(events);
    let last = ordered.last().map_or(0, |e| e.t_min);
    let first_order = ordered
        .iter()
        .find(|e| e.kind == EventKind::Order)
        .map_or(last, |e| e.t_min);
    let max_gap = ordered
        .windows(2)
        .map(|w| w[1].t_min - w[0].t_min)
        .max()
        .unwrap_or(0);
    vec![first_order as f64, max_gap as f64]
}

/// An episode after tokenization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedEpisode {
    pub episode_id: String,
    pub tokens: Vec<u32>,
    #[serde(default)]
    pub time_feats: Vec<f64>,
    pub labels: DomainSet,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub danger: bool,
}

impl EncodedEpisode {
    pub fn encode(ep: &Episode, vocab: &Vocabulary, cfg: &SequenceConfig) -> Result<Self> {
        let gold = (!ep.gold.is_empty()).then_some(ep.gold.as_str());
        Ok(Self {
            episode_id: ep.episode_id.clone(),
            tokens: build_sequence(&ep.events, gold, vocab, cfg)?,
            time_feats: ep.time_feats.clone(),
            labels: ep.labels,
            danger: ep.danger,
        })
    }

    /// Tokens between `[BOS]` and `[EOS]`. `[UNK]` counts as content.
    pub fn content(&self) -> &[u32] {
        let mut s = self.tokens.as_slice();
        if s.first() == Some(&BOS_ID) {
            s = &s[1..];
        }
        if s.last() == Some(&EOS_ID) {
            s = &s[..s.len() - 1];
        }
        s
    }
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(r: impl BufRead) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v =
            serde_json::from_str(&line).map_err(|e| Error::Data(format!("line {}: {e}", n + 1)))?;
        out.push(v);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(mut w: impl Write, items: &[T]) -> Result<()> {
    for it in items {
        serde_json::to_writer(&mut w, it)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_episodes(r: impl BufRead) -> Result<Vec<Episode>> {
    let eps: Vec<Episode> = read_jsonl(r)?;
    for e in &eps {
        e.validate()?;
    }
    Ok(eps)
}

// ---------------------------------------------------------------------------
// Vocabulary

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    counts: Vec<u64>,
    index: HashMap<String, u32>,
    pub min_count: u64,
    pub whitelist: BTreeSet<String>,
}

impl Vocabulary {
    fn from_entries(
        entries: Vec<(String, u64)>,
        min_count: u64,
        whitelist: BTreeSet<String>,
    ) -> Self {
        let mut tokens = Vec::with_capacity(entries.len() + 4);
        let mut counts = Vec::with_capacity(entries.len() + 4);
        for s in SENTINELS {
            tokens.push(s.to_string());
            counts.push(0);
        }
        for (t, c) in entries {
            tokens.push(t);
            counts.push(c);
        }
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self {
            tokens,
            counts,
            index,
            min_count,
            whitelist,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of `token`, `[UNK]` when absent.
    pub fn encode(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn get(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn decode(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn count(&self, id: u32) -> Option<u64> {
        self.counts.get(id as usize).copied()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// SHA-256 over the id-ordered token listing.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }

    /// `<id>\t<token>\t<count>` per line, sorted by id.
    pub fn write_tsv(&self, mut w: impl Write) -> Result<()> {
        for (i, (t, c)) in self.tokens.iter().zip(&self.counts).enumerate() {
            writeln!(w, "{i}\t{t}\t{c}")?;
        }
        Ok(())
    }

    pub fn read_tsv(r: impl BufRead) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split('\t');
            let (Some(id), Some(tok), Some(count), None) =
                (parts.next(), parts.next(), parts.next(), parts.next())
            else {
                return Err(Error::Data(format!(
                    "vocab line {}: expected 3 tab-separated fields",
                    n + 1
                )));
            };
            let id: usize = id
                .parse()
                .map_err(|_| Error::Data(format!("vocab line {}: bad id", n + 1)))?;
            let count: u64 = count
                .parse()
                .map_err(|_| Error::Data(format!("vocab line {}: bad count", n + 1)))?;
            if id != entries.len() {
                return Err(Error::Data(format!(
                    "vocab line {}: ids must be dense and sorted",
                    n + 1
                )));
            }
            Token::parse(tok)?;
            if id < SENTINELS.len() && tok != SENTINELS[id] {
                return Err(Error::Data(format!(
                    "vocab id {id} must be {}",
                    SENTINELS[id]
                )));
            }
            entries.push((tok.to_string(), count));
        }
        if entries.len() < SENTINELS.len() {
            return Err(Error::Data("vocab file lacks sentinel entries".into()));
        }
        let rest = entries.split_off(SENTINELS.len());
        let min_count = rest.iter().map(|e| e.1).min().unwrap_or(1);
        Ok(Self::from_entries(rest, min_count, BTreeSet::new()))
    }
}

/// Count rendered tokens over the corpus, keep those with count ≥ `min_count`
/// whose family is whitelisted (empty whitelist keeps everything). Ids:
/// sentinels, then descending count, ties byte-wise alphabetical.
pub fn build_vocabulary(
    corpus: &[Episode],
    min_count: u64,
    whitelist: &BTreeSet<String>,
    cfg: &SequenceConfig,
) -> Result<Vocabulary> {
    let mut counts: HashMap<String, u64> = HashMap::new();
    for ep in corpus {
        let gold = (!ep.gold.is_empty()).then_some(ep.gold.as_str());
        for t in content_tokens(&ep.events, gold, &cfg.gap_hours)? {
            *counts.entry(t.into_string()).or_default() += 1;
        }
    }
    let mut entries: Vec<(String, u64)> = counts
        .into_iter()
        .filter(|(t, c)| {
            if *c < min_count || SENTINELS.contains(&t.as_str()) {
                return false;
            }
            if whitelist.is_empty() {
                return true;
            }
            match Token(t.clone()).family() {
                Some(f) => whitelist.contains(&f),
                None => true,
            }
        })
        .collect();
    entries.sort_by(|a, b| match b.1.cmp(&a.1) {
        Ordering::Equal => a.0.as_bytes().cmp(b.0.as_bytes()),
        o => o,
    });
    Ok(Vocabulary::from_entries(
        entries,
        min_count,
        whitelist.clone(),
    ))
}
