//! Vocabulary fitting and deterministic encoding of raw feature and label values.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD_INDEX: u32 = 0;
pub const UNK_INDEX: u32 = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// How an input field is encoded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProcessorKind {
    Sequence,
    NestedSequence,
    MultiHot,
    Raw,
}

/// How an output field is encoded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelKind {
    Binary,
    Multiclass,
    Multilabel,
    Regression,
}

impl ProcessorKind {
    pub fn name(self) -> &'static str {
        match self {
            ProcessorKind::Sequence => "sequence",
            ProcessorKind::NestedSequence => "nested_sequence",
            ProcessorKind::MultiHot => "multi_hot",
            ProcessorKind::Raw => "raw",
        }
    }

    pub fn uses_vocab(self) -> bool {
        self != ProcessorKind::Raw
    }
}

impl LabelKind {
    pub fn name(self) -> &'static str {
        match self {
            LabelKind::Binary => "binary",
            LabelKind::Multiclass => "multiclass",
            LabelKind::Multilabel => "multilabel",
            LabelKind::Regression => "regression",
        }
    }

    pub fn uses_space(self) -> bool {
        matches!(self, LabelKind::Multiclass | LabelKind::Multilabel)
    }
}

/// Partial token counts from one worker; merging is associative and commutative.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct VocabCounts {
    pub counts: BTreeMap<String, u64>,
}

impl VocabCounts {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, token: &str) {
        match self.counts.get_mut(token) {
            Some(c) => *c += 1,
            None => {
                self.counts.insert(token.to_string(), 1);
            }
        }
    }

    pub fn add_all<'a>(&mut self, tokens: impl IntoIterator<Item = &'a str>) {
        for t in tokens {
            self.add(t);
        }
    }

    pub fn merge(&mut self, other: &VocabCounts) {
        for (t, c) in &other.counts {
            *self.counts.entry(t.clone()).or_insert(0) += c;
        }
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }
}

/// Dense token index: pad = 0, unk = 1, observed tokens in byte order from 2.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, u32>,
}

impl Vocabulary {
    /// Builds from distinct tokens; order of `tokens` is irrelevant.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let sorted: BTreeSet<String> = tokens.into_iter().map(Into::into).collect();
        let tokens: Vec<String> = sorted.into_iter().collect();
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32 + 2))
            .collect();
        Vocabulary { tokens, index }
    }

    /// Number of indices including pad and unk.
    pub fn size(&self) -> usize {
        self.tokens.len() + 2
    }

    pub fn index_of(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_INDEX)
    }

    pub fn token_at(&self, index: u32) -> Option<&str> {
        match index {
            PAD_INDEX => Some(PAD_TOKEN),
            UNK_INDEX => Some(UNK_TOKEN),
            i => self.tokens.get(i as usize - 2).map(String::as_str),
        }
    }

    /// Observed tokens in index order (index 2 onward).
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Fits a vocabulary over the union of partial counts, keeping tokens seen at least `min_freq` times.
pub fn fit_vocab_min_freq(partials: &[VocabCounts], min_freq: u64) -> Vocabulary {
    let mut total = VocabCounts::new();
    for p in partials {
        total.merge(p);
    }
    Vocabulary::from_tokens(
        total
            .counts
            .into_iter()
            .filter(|(_, c)| *c >= min_freq.max(1))
            .map(|(t, _)| t),
    )
}

pub fn fit_vocab(partials: &[VocabCounts]) -> Vocabulary {
    fit_vocab_min_freq(partials, 1)
}

pub fn encode_sequence<S: AsRef<str>>(tokens: &[S], v: &Vocabulary) -> Vec<u32> {
    tokens.iter().map(|t| v.index_of(t.as_ref())).collect()
}

pub fn encode_nested<S: AsRef<str>>(visits: &[Vec<S>], v: &Vocabulary) -> Vec<Vec<u32>> {
    visits.iter().map(|inner| encode_sequence(inner, v)).collect()
}

/// Bitset with `size` bits, LSB-first within each byte.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BitSet {
    pub size: u32,
    pub bytes: Vec<u8>,
}

impl BitSet {
    pub fn new(size: usize) -> Self {
        BitSet {
            size: size as u32,
            bytes: vec![0; size.div_ceil(8)],
        }
    }

    pub fn set(&mut self, i: usize) {
        assert!(i < self.size as usize, "bit {i} out of range {}", self.size);
        self.bytes[i / 8] |= 1 << (i % 8);
    }

    pub fn get(&self, i: usize) -> bool {
        i < self.size as usize && self.bytes[i / 8] & (1 << (i % 8)) != 0
    }

    pub fn count_ones(&self) -> usize {
        self.bytes.iter().map(|b| b.count_ones() as usize).sum()
    }

    pub fn ones(&self) -> Vec<usize> {
        (0..self.size as usize).filter(|&i| self.get(i)).collect()
    }
}

pub fn encode_multihot<S: AsRef<str>>(tokens: &[S], v: &Vocabulary) -> BitSet {
    let mut bits = BitSet::new(v.size());
    for t in tokens {
        bits.set(v.index_of(t.as_ref()) as usize);
    }
    bits
}

/// Sorted label space for multiclass and multilabel outputs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSpace {
    labels: Vec<String>,
}

impl LabelSpace {
    pub fn from_labels<I, S>(labels: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let sorted: BTreeSet<String> = labels.into_iter().map(Into::into).collect();
        LabelSpace {
            labels: sorted.into_iter().collect(),
        }
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn index_of(&self, label: &str) -> Option<u32> {
        self.labels
            .binary_search_by(|l| l.as_str().cmp(label))
            .ok()
            .map(|i| i as u32)
    }
}

/// Raw label value as produced by a task.
#[derive(Debug, Clone, PartialEq)]
pub enum LabelValue<'a> {
    Scalar(&'a str),
    Set(&'a [String]),
}

#[derive(Debug, Clone, PartialEq)]
pub enum EncodedLabel {
    Binary(u8),
    Class(u32),
    Multi(BitSet),
    Real(f64),
}

/// Encodes one label; multilabel values outside `space` are dropped and reported in the count.
pub fn encode_label(
    field: &str,
    value: LabelValue<'_>,
    kind: LabelKind,
    space: Option<&LabelSpace>,
) -> Result<(EncodedLabel, usize)> {
    let label_err = |message: String| Error::Label {
        field: field.to_string(),
        message,
    };
    let need_space = || space.ok_or_else(|| label_err("no fitted label space".into()));
    match (kind, value) {
        (LabelKind::Binary, LabelValue::Scalar(s)) => match s.trim() {
            "1" | "true" | "True" | "TRUE" => Ok((EncodedLabel::Binary(1), 0)),
            "0" | "false" | "False" | "FALSE" => Ok((EncodedLabel::Binary(0), 0)),
            other => Err(label_err(format!("{other:?} is not a binary label"))),
        },
        (LabelKind::Multiclass, LabelValue::Scalar(s)) => need_space()?
            .index_of(s)
            .map(|i| (EncodedLabel::Class(i), 0))
            .ok_or_else(|| label_err(format!("{s:?} is not in the label space"))),
        (LabelKind::Multilabel, LabelValue::Set(items)) => {
            let space = need_space()?;
            let mut bits = BitSet::new(space.len());
            let mut dropped = 0;
            for item in items {
                match space.index_of(item) {
                    Some(i) => bits.set(i as usize),
                    None => dropped += 1,
                }
            }
            Ok((EncodedLabel::Multi(bits), dropped))
        }
        (LabelKind::Regression, LabelValue::Scalar(s)) => match s.trim().parse::<f64>() {
            Ok(x) if x.is_finite() => Ok((EncodedLabel::Real(x), 0)),
            _ => Err(label_err(format!("{s:?} is not a finite real"))),
        },
        (kind, _) => Err(label_err(format!("value shape does not fit a {} label", kind.name()))),
    }
}

/// Serialized fitted state of one field, written as `procstate.<field>.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProcessorState {
    pub field: String,
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pad_index: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub unk_index: Option<u32>,
    /// Vocabulary tokens from index 2 onward, or the sorted label space.
    pub tokens: Vec<String>,
}

impl ProcessorState {
    pub fn for_input(field: &str, kind: ProcessorKind, vocab: Option<&Vocabulary>) -> Self {
        let vocab_kind = kind.uses_vocab();
        ProcessorState {
            field: field.to_string(),
            kind: kind.name().to_string(),
            pad_index: vocab_kind.then_some(PAD_INDEX),
            unk_index: vocab_kind.then_some(UNK_INDEX),
            tokens: vocab.map(|v| v.tokens().to_vec()).unwrap_or_default(),
        }
    }

    pub fn for_output(field: &str, kind: LabelKind, space: Option<&LabelSpace>) -> Self {
        ProcessorState {
            field: field.to_string(),
            kind: kind.name().to_string(),
            pad_index: None,
            unk_index: None,
            tokens: space.map(|s| s.labels().to_vec()).unwrap_or_default(),
        }
    }

    pub fn file_name(field: &str) -> String {
        format!("procstate.{field}.json")
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("state serializes");
        s.push('\n');
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashMap;

    fn counts(pairs: &[(&str, u64)]) -> VocabCounts {
        VocabCounts {
            counts: pairs.iter().map(|(t, c)| (t.to_string(), *c)).collect(),
        }
    }

    #[test]
    fn vocab_is_sorted_after_reserved() {
        let v = fit_vocab(&[counts(&[("b", 1), ("a", 2)])]);
        assert_eq!(v.size(), 4);
        assert_eq!((v.index_of("a"), v.index_of("b")), (2, 3));
        assert_eq!(v.token_at(0), Some(PAD_TOKEN));
        assert_eq!(v.token_at(1), Some(UNK_TOKEN));
        assert_eq!(fit_vocab(&[]).size(), 2);
    }

    #[test]
    fn min_freq_drops_rare_tokens() {
        let v = fit_vocab_min_freq(&[counts(&[("a", 1), ("b", 3)]), counts(&[("a", 1)])], 2);
        assert_eq!(v.tokens(), ["a", "b"]);
        let v = fit_vocab_min_freq(&[counts(&[("a", 1), ("b", 3)])], 2);
        assert_eq!(v.tokens(), ["b"]);
    }

    #[test]
    fn sequence_and_nested_encoding() {
        let v = Vocabulary::from_tokens(["a", "b"]);
        assert_eq!(encode_sequence(&["a", "b"], &v), vec![2, 3]);
        assert_eq!(encode_sequence(&["zzz"], &v), vec![1]);
        let nested = vec![vec!["a"], vec!["b", "a"]];
        assert_eq!(encode_nested(&nested, &v), vec![vec![2], vec![3, 2]]);
        assert!(encode_nested::<&str>(&[], &v).is_empty());
    }

    #[test]
    fn multihot_encoding() {
        let v = Vocabulary::from_tokens(["a", "b"]);
        assert_eq!(encode_multihot(&["a"], &v).ones(), vec![2]);
        let empty = encode_multihot::<&str>(&[], &v);
        assert_eq!(empty.count_ones(), 0);
        assert_eq!(empty.size, 4);
        assert_eq!(encode_multihot(&["x", "y", "a"], &v).ones(), vec![1, 2]);
    }

    #[test]
    fn label_encoding() {
        let enc = |v, k, s| encode_label("y", v, k, s).map(|(l, _)| l);
        for t in ["1", "true"] {
            assert_eq!(enc(LabelValue::Scalar(t), LabelKind::Binary, None).unwrap(), EncodedLabel::Binary(1));
        }
        assert_eq!(enc(LabelValue::Scalar("false"), LabelKind::Binary, None).unwrap(), EncodedLabel::Binary(0));
        assert!(enc(LabelValue::Scalar("2"), LabelKind::Binary, None).is_err());

        let space = LabelSpace::from_labels(["lo", "hi"]);
        assert_eq!(enc(LabelValue::Scalar("hi"), LabelKind::Multiclass, Some(&space)).unwrap(), EncodedLabel::Class(0));
        assert_eq!(enc(LabelValue::Scalar("lo"), LabelKind::Multiclass, Some(&space)).unwrap(), EncodedLabel::Class(1));
        assert!(matches!(
            enc(LabelValue::Scalar("mid"), LabelKind::Multiclass, Some(&space)),
            Err(Error::Label { .. })
        ));

        let space = LabelSpace::from_labels(["d3", "d1", "d2"]);
        let set = vec!["d2".to_string(), "zz".to_string()];
        let (label, dropped) = encode_label("y", LabelValue::Set(&set), LabelKind::Multilabel, Some(&space)).unwrap();
        let EncodedLabel::Multi(bits) = label else { panic!() };
        assert_eq!((bits.ones(), dropped), (vec![1], 1));

        assert_eq!(enc(LabelValue::Scalar("2.5"), LabelKind::Regression, None).unwrap(), EncodedLabel::Real(2.5));
        for bad in ["inf", "NaN", "x"] {
            assert!(matches!(enc(LabelValue::Scalar(bad), LabelKind::Regression, None), Err(Error::Label { .. })));
        }
    }

    #[test]
    fn state_json_round_trips() {
        let v = Vocabulary::from_tokens(["b", "a"]);
        let s = ProcessorState::for_input("conditions", ProcessorKind::Sequence, Some(&v));
        let back: ProcessorState = serde_json::from_str(&s.to_json()).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.tokens, ["a", "b"]);
        assert_eq!(ProcessorState::file_name("label"), "procstate.label.json");
    }

    fn token() -> impl Strategy<Value = String> {
        "[a-e]{1,2}"
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn vocab_merge_is_partition_and_order_invariant(
            tokens in prop::collection::vec(token(), 0..60),
            cuts in prop::collection::vec(0usize..4, 0..60),
            rotate in 0usize..4,
        ) {
            let mut single = VocabCounts::new();
            single.add_all(tokens.iter().map(String::as_str));
            let oracle = fit_vocab(&[single.clone()]);

            let mut parts = vec![VocabCounts::new(); 4];
            for (i, t) in tokens.iter().enumerate() {
                parts[cuts.get(i).copied().unwrap_or(0)].add(t);
            }
            let mut merged = VocabCounts::new();
            for p in &parts {
                merged.merge(p);
            }
            prop_assert_eq!(&merged, &single);
            parts.rotate_left(rotate);
            prop_assert_eq!(fit_vocab(&parts), oracle.clone());
            parts.reverse();
            prop_assert_eq!(fit_vocab(&parts), oracle);
        }

        #[test]
        fn multihot_popcount_law(
            vocab in prop::collection::btree_set(token(), 0..10),
            set in prop::collection::btree_set("[a-g]{1,2}", 0..12),
        ) {
            let v = Vocabulary::from_tokens(vocab.iter().cloned());
            let items: Vec<&String> = set.iter().collect();
            let bits = encode_multihot(&items, &v);
            let known = set.iter().filter(|t| vocab.contains(*t)).count();
            let any_unknown = set.iter().any(|t| !vocab.contains(t));
            prop_assert_eq!(bits.count_ones(), known + usize::from(any_unknown));
        }

        #[test]
        fn sequence_round_trip_against_map_oracle(
            vocab in prop::collection::btree_set(token(), 0..10),
            seq in prop::collection::vec("[a-g]{1,2}", 0..20),
        ) {
            let v = Vocabulary::from_tokens(vocab.iter().cloned());
            let oracle: HashMap<&str, u32> =
                vocab.iter().enumerate().map(|(i, t)| (t.as_str(), i as u32 + 2)).collect();
            let enc = encode_sequence(&seq, &v);
            prop_assert_eq!(enc.len(), seq.len());
            for (t, i) in seq.iter().zip(&enc) {
                prop_assert_eq!(*i, oracle.get(t.as_str()).copied().unwrap_or(1));
                let back = v.token_at(*i).unwrap();
                prop_assert_eq!(back, if vocab.contains(t) { t.as_str() } else { UNK_TOKEN });
            }
            prop_assert_eq!(encode_sequence(&seq, &v), enc);
        }

        #[test]
        fn nested_encoding_matches_per_element(
            vocab in prop::collection::btree_set(token(), 0..10),
            nested in prop::collection::vec(prop::collection::vec("[a-g]{1,2}", 0..5), 0..6),
        ) {
            let v = Vocabulary::from_tokens(vocab.iter().cloned());
            let enc = encode_nested(&nested, &v);
            prop_assert_eq!(enc.len(), nested.len());
            for (inner, e) in nested.iter().zip(&enc) {
                let oracle: Vec<u32> = inner.iter().map(|t| v.index_of(t)).collect();
                prop_assert_eq!(e, &oracle);
            }
        }

        #[test]
        fn label_space_is_order_independent(mut labels in prop::collection::vec(token(), 1..20), k in 0usize..20) {
            let a = LabelSpace::from_labels(labels.iter().cloned());
            let n = labels.len();
            labels.rotate_left(k % n);
            labels.reverse();
            let b = LabelSpace::from_labels(labels.iter().cloned());
            prop_assert_eq!(&a, &b);
            for l in &labels {
                let (ea, _) = encode_label("y", LabelValue::Scalar(l), LabelKind::Multiclass, Some(&a)).unwrap();
                let (eb, _) = encode_label("y", LabelValue::Scalar(l), LabelKind::Multiclass, Some(&b)).unwrap();
                prop_assert_eq!(ea, eb);
            }
        }
    }
}
