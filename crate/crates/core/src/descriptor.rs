//! Declarative dataset configuration: which CSV tables exist and how their columns map onto events.
//!
//! The accepted syntax is a strict subset of YAML: block or flow mappings and sequences of plain
//! or quoted scalars. Anchors, aliases, tags and multi-document streams are rejected, as are
//! unknown keys at every level.
//!
//! ```yaml
//! version: 1
//! dataset_name: demo
//! tables:
//!   admissions:
//!     file: admissions.csv
//!     patient_id_column: subject_id
//!     timestamp_column: admittime
//!     timestamp_format: "%Y-%m-%d %H:%M:%S"
//!     attribute_columns: [hadm_id, dischtime]
//!   diagnoses:
//!     file: diagnoses.csv
//!     patient_id_column: subject_id
//!     timestamp_column: admittime
//!     timestamp_format: "%Y-%m-%d %H:%M:%S"
//!     attribute_columns: [hadm_id, icd9_code]
//!     join: {table: admissions, on: hadm_id, columns: [admittime]}
//! ```
//!
//! A table's `timestamp_column` and `attribute_columns` may name columns pulled in by its `join`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use yaml_rust2::parser::{Event as YamlEvent, Parser};

use crate::event::RESERVED_ATTRIBUTES;

pub const DESCRIPTOR_VERSION: i64 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JoinSpec {
    pub table: String,
    pub on: String,
    pub columns: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TableSpec {
    pub name: String,
    pub file: PathBuf,
    pub patient_id_column: String,
    pub timestamp_column: Option<String>,
    pub timestamp_format: Option<String>,
    pub attribute_columns: Vec<String>,
    pub join: Option<JoinSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetDescriptor {
    pub version: i64,
    pub dataset_name: String,
    /// Tables in declaration order.
    pub tables: Vec<TableSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DescriptorError {
    #[error("syntax error at line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("invalid descriptor at `{location}`: {message}")]
    Validation { location: String, message: String },
}

fn syntax(line: usize, message: impl Into<String>) -> DescriptorError {
    DescriptorError::Syntax {
        line,
        message: message.into(),
    }
}

fn invalid(location: impl Into<String>, message: impl Into<String>) -> DescriptorError {
    DescriptorError::Validation {
        location: location.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone)]
enum Node {
    Scalar(String, usize),
    Seq(Vec<Node>, usize),
    Map(Vec<(String, Node)>, usize),
}

impl Node {
    fn line(&self) -> usize {
        match self {
            Node::Scalar(_, l) | Node::Seq(_, l) | Node::Map(_, l) => *l,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Node::Scalar(..) => "scalar",
            Node::Seq(..) => "sequence",
            Node::Map(..) => "mapping",
        }
    }
}

fn parse_tree(text: &str) -> Result<Node, DescriptorError> {
    let mut parser = Parser::new_from_str(text);
    let mut stack: Vec<(Node, Option<String>)> = Vec::new();
    let mut pending_key: Vec<Option<String>> = Vec::new();
    let mut root: Option<Node> = None;
    let mut documents = 0usize;

    loop {
        let (event, mark) = parser
            .next_token()
            .map_err(|e| syntax(e.marker().line(), e.info().to_string()))?;
        let line = mark.line();
        let completed = match event {
            YamlEvent::StreamStart | YamlEvent::Nothing | YamlEvent::DocumentEnd => continue,
            YamlEvent::StreamEnd => break,
            YamlEvent::DocumentStart => {
                documents += 1;
                if documents > 1 {
                    return Err(syntax(line, "multi-document streams are not supported"));
                }
                continue;
            }
            YamlEvent::Alias(_) => return Err(syntax(line, "aliases are not supported")),
            YamlEvent::Scalar(value, _, anchor, tag) => {
                if anchor != 0 {
                    return Err(syntax(line, "anchors are not supported"));
                }
                if tag.is_some() {
                    return Err(syntax(line, "tags are not supported"));
                }
                Node::Scalar(value, line)
            }
            YamlEvent::SequenceStart(anchor, ref tag) | YamlEvent::MappingStart(anchor, ref tag) => {
                if anchor != 0 {
                    return Err(syntax(line, "anchors are not supported"));
                }
                if tag.is_some() {
                    return Err(syntax(line, "tags are not supported"));
                }
                let node = if matches!(event, YamlEvent::SequenceStart(..)) {
                    Node::Seq(Vec::new(), line)
                } else {
                    Node::Map(Vec::new(), line)
                };
                stack.push((node, None));
                pending_key.push(None);
                continue;
            }
            YamlEvent::SequenceEnd | YamlEvent::MappingEnd => {
                pending_key.pop();
                let (node, _) = stack.pop().expect("balanced events");
                node
            }
        };

        match stack.last_mut() {
            None => root = Some(completed),
            Some((Node::Seq(items, _), _)) => items.push(completed),
            Some((Node::Map(entries, _), _)) => {
                let slot = pending_key.last_mut().expect("map has key slot");
                match slot.take() {
                    None => match completed {
                        Node::Scalar(key, l) => {
                            if entries.iter().any(|(k, _)| *k == key) {
                                return Err(syntax(l, format!("duplicate key `{key}`")));
                            }
                            *slot = Some(key);
                        }
                        other => {
                            return Err(syntax(other.line(), "mapping keys must be scalars"));
                        }
                    },
                    Some(key) => entries.push((key, completed)),
                }
            }
            Some((Node::Scalar(..), _)) => unreachable!("scalars never open a scope"),
        }
    }
    root.ok_or_else(|| syntax(1, "empty document"))
}

struct MapReader<'a> {
    location: String,
    entries: &'a [(String, Node)],
    used: BTreeSet<&'a str>,
}

impl<'a> MapReader<'a> {
    fn new(location: impl Into<String>, node: &'a Node) -> Result<Self, DescriptorError> {
        let location = location.into();
        match node {
            Node::Map(entries, _) => Ok(MapReader {
                location,
                entries,
                used: BTreeSet::new(),
            }),
            other => Err(syntax(
                other.line(),
                format!("`{location}` must be a mapping, found {}", other.kind()),
            )),
        }
    }

    fn get(&mut self, key: &'a str) -> Option<&'a Node> {
        let found = self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v);
        if found.is_some() {
            self.used.insert(key);
        }
        found
    }

    fn key_path(&self, key: &str) -> String {
        if self.location.is_empty() {
            key.to_string()
        } else {
            format!("{}.{key}", self.location)
        }
    }

    fn string(&mut self, key: &'a str) -> Result<Option<String>, DescriptorError> {
        match self.get(key) {
            None => Ok(None),
            Some(Node::Scalar(s, _)) => Ok(Some(s.clone())),
            Some(other) => Err(syntax(
                other.line(),
                format!("`{}` must be a scalar", self.key_path(key)),
            )),
        }
    }

    fn required(&mut self, key: &'a str) -> Result<String, DescriptorError> {
        self.string(key)?
            .ok_or_else(|| invalid(self.key_path(key), "missing required key"))
    }

    fn string_list(&mut self, key: &'a str) -> Result<Option<Vec<String>>, DescriptorError> {
        match self.get(key) {
            None => Ok(None),
            Some(Node::Seq(items, _)) => items
                .iter()
                .map(|n| match n {
                    Node::Scalar(s, _) => Ok(s.clone()),
                    other => Err(syntax(
                        other.line(),
                        format!("`{}` items must be scalars", self.key_path(key)),
                    )),
                })
                .collect::<Result<Vec<_>, _>>()
                .map(Some),
            Some(other) => Err(syntax(
                other.line(),
                format!("`{}` must be a sequence", self.key_path(key)),
            )),
        }
    }

    fn finish(self) -> Result<(), DescriptorError> {
        for (k, _) in self.entries {
            if !self.used.contains(k.as_str()) {
                return Err(invalid(self.key_path(k), "unknown key"));
            }
        }
        Ok(())
    }
}

fn read_table(name: &str, node: &Node) -> Result<TableSpec, DescriptorError> {
    let loc = format!("tables.{name}");
    let mut m = MapReader::new(loc.clone(), node)?;
    let file = m.required("file")?;
    let patient_id_column = m.required("patient_id_column")?;
    let timestamp_column = m.string("timestamp_column")?;
    let timestamp_format = m.string("timestamp_format")?;
    let attribute_columns = m
        .string_list("attribute_columns")?
        .ok_or_else(|| invalid(format!("{loc}.attribute_columns"), "missing required key"))?;
    let join = match m.get("join") {
        None => None,
        Some(j) => {
            let mut jm = MapReader::new(format!("{loc}.join"), j)?;
            let spec = JoinSpec {
                table: jm.required("table")?,
                on: jm.required("on")?,
                columns: jm.string_list("columns")?.unwrap_or_default(),
            };
            jm.finish()?;
            Some(spec)
        }
    };
    m.finish()?;
    Ok(TableSpec {
        name: name.to_string(),
        file: PathBuf::from(file),
        patient_id_column,
        timestamp_column,
        timestamp_format,
        attribute_columns,
        join,
    })
}

/// Parses and validates descriptor text.
pub fn parse_descriptor(text: &str) -> Result<DatasetDescriptor, DescriptorError> {
    let root = parse_tree(text)?;
    let mut top = MapReader::new("", &root)?;
    let version_text = top.required("version")?;
    let version: i64 = version_text
        .trim()
        .parse()
        .map_err(|_| invalid("version", format!("`{version_text}` is not an integer")))?;
    let dataset_name = top.required("dataset_name")?;
    let tables_node = top
        .get("tables")
        .ok_or_else(|| invalid("tables", "missing required key"))?;
    let table_entries = match tables_node {
        Node::Map(entries, _) => entries,
        other => return Err(syntax(other.line(), "`tables` must be a mapping")),
    };
    let tables = table_entries
        .iter()
        .map(|(name, node)| read_table(name, node))
        .collect::<Result<Vec<_>, _>>()?;
    top.finish()?;

    let descriptor = DatasetDescriptor {
        version,
        dataset_name,
        tables,
    };
    descriptor.validate()?;
    Ok(descriptor)
}

impl DatasetDescriptor {
    pub fn from_file(path: &Path) -> Result<(Self, String), crate::Error> {
        let text = std::fs::read_to_string(path).map_err(|e| crate::Error::io(path, e))?;
        let d = parse_descriptor(&text)?;
        Ok((d, text))
    }

    pub fn table(&self, name: &str) -> Option<&TableSpec> {
        self.tables.iter().find(|t| t.name == name)
    }

    pub fn table_index(&self, name: &str) -> Option<usize> {
        self.tables.iter().position(|t| t.name == name)
    }

    /// Checks every structural invariant. The outcome does not depend on table order.
    pub fn validate(&self) -> Result<(), DescriptorError> {
        if self.version != DESCRIPTOR_VERSION {
            return Err(invalid(
                "version",
                format!("unsupported version {}", self.version),
            ));
        }
        if self.dataset_name.is_empty() {
            return Err(invalid("dataset_name", "must be non-empty"));
        }
        let mut seen = BTreeSet::new();
        for t in &self.tables {
            if !seen.insert(t.name.as_str()) {
                return Err(invalid(format!("tables.{}", t.name), "duplicate table name"));
            }
        }
        // Report the first offending table in name order so the verdict is order independent.
        let mut by_name: Vec<&TableSpec> = self.tables.iter().collect();
        by_name.sort_by(|a, b| a.name.cmp(&b.name));
        for t in by_name {
            self.validate_table(t)?;
        }
        Ok(())
    }

    fn validate_table(&self, t: &TableSpec) -> Result<(), DescriptorError> {
        let loc = format!("tables.{}", t.name);
        if t.name.is_empty() {
            return Err(invalid(loc, "table name must be non-empty"));
        }
        if t.patient_id_column.is_empty() {
            return Err(invalid(format!("{loc}.patient_id_column"), "must be non-empty"));
        }
        if t.attribute_columns.is_empty() {
            return Err(invalid(format!("{loc}.attribute_columns"), "must be non-empty"));
        }
        let mut attrs = BTreeSet::new();
        for c in &t.attribute_columns {
            if c == &t.patient_id_column {
                return Err(invalid(
                    format!("{loc}.attribute_columns"),
                    format!("`{c}` is the patient_id_column"),
                ));
            }
            if RESERVED_ATTRIBUTES.contains(&c.as_str()) {
                return Err(invalid(
                    format!("{loc}.attribute_columns"),
                    format!("`{c}` is a reserved attribute name"),
                ));
            }
            if !attrs.insert(c) {
                return Err(invalid(
                    format!("{loc}.attribute_columns"),
                    format!("`{c}` listed twice"),
                ));
            }
        }
        if t.timestamp_format.is_some() && t.timestamp_column.is_none() {
            return Err(invalid(
                format!("{loc}.timestamp_format"),
                "timestamp_format requires timestamp_column",
            ));
        }
        if let Some(j) = &t.join {
            if j.table == t.name {
                return Err(invalid(format!("{loc}.join.table"), "a table cannot join itself"));
            }
            if self.table(&j.table).is_none() {
                return Err(invalid(
                    format!("{loc}.join.table"),
                    format!("unknown join target `{}`", j.table),
                ));
            }
            if j.on.is_empty() {
                return Err(invalid(format!("{loc}.join.on"), "must be non-empty"));
            }
        }
        Ok(())
    }

    /// Renders the descriptor in the accepted syntax; every scalar is double-quoted.
    pub fn to_yaml(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "version: {}", self.version);
        let _ = writeln!(out, "dataset_name: {}", quote(&self.dataset_name));
        if self.tables.is_empty() {
            out.push_str("tables: {}\n");
            return out;
        }
        out.push_str("tables:\n");
        for t in &self.tables {
            let _ = writeln!(out, "  {}:", quote(&t.name));
            let _ = writeln!(out, "    file: {}", quote(&t.file.to_string_lossy()));
            let _ = writeln!(out, "    patient_id_column: {}", quote(&t.patient_id_column));
            if let Some(c) = &t.timestamp_column {
                let _ = writeln!(out, "    timestamp_column: {}", quote(c));
            }
            if let Some(f) = &t.timestamp_format {
                let _ = writeln!(out, "    timestamp_format: {}", quote(f));
            }
            let _ = writeln!(out, "    attribute_columns: {}", quote_list(&t.attribute_columns));
            if let Some(j) = &t.join {
                out.push_str("    join:\n");
                let _ = writeln!(out, "      table: {}", quote(&j.table));
                let _ = writeln!(out, "      on: {}", quote(&j.on));
                let _ = writeln!(out, "      columns: {}", quote_list(&j.columns));
            }
        }
        out
    }
}

fn quote(s: &str) -> String {
    // JSON string escaping is a valid YAML double-quoted scalar.
    serde_json::to_string(s).expect("string serialization")
}

fn quote_list(items: &[String]) -> String {
    let inner: Vec<String> = items.iter().map(|s| quote(s)).collect();
    format!("[{}]", inner.join(", "))
}

/// Hex SHA-256 of the descriptor text; identifies a cache built from it.
pub fn descriptor_digest(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Table specs keyed by name.
pub fn tables_by_name(d: &DatasetDescriptor) -> BTreeMap<&str, &TableSpec> {
    d.tables.iter().map(|t| (t.name.as_str(), t)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) const FIXTURE: &str = include_str!("../tests/fixtures/tiny/dataset.yaml");

    #[test]
    fn parses_fixture() {
        let d = parse_descriptor(FIXTURE).unwrap();
        assert_eq!(d.dataset_name, "tiny");
        assert_eq!(d.tables.len(), 2);
        let diag = d.table("diagnoses").unwrap();
        assert_eq!(diag.join.as_ref().unwrap().table, "admissions");
        assert_eq!(diag.join.as_ref().unwrap().on, "hadm_id");
        assert_eq!(d.table("admissions").unwrap().timestamp_column.as_deref(), Some("admittime"));
    }

    #[test]
    fn missing_patient_id_column_names_table() {
        let text = "version: 1\ndataset_name: x\ntables:\n  labs:\n    file: labs.csv\n    attribute_columns: [a]\n";
        match parse_descriptor(text) {
            Err(DescriptorError::Validation { location, .. }) => {
                assert_eq!(location, "tables.labs.patient_id_column")
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_version_two() {
        let text = FIXTURE.replace("version: 1", "version: 2");
        let err = parse_descriptor(&text).unwrap_err();
        assert!(err.to_string().contains("unsupported version"), "{err}");
    }

    #[test]
    fn rejects_unknown_keys() {
        let text = FIXTURE.replace("dataset_name: tiny", "dataset_name: tiny\ncolour: red");
        let err = parse_descriptor(&text).unwrap_err();
        assert!(matches!(&err, DescriptorError::Validation { location, .. } if location == "colour"));
        let text = FIXTURE.replace("file: diagnoses.csv", "file: diagnoses.csv\n    patient_col: x");
        let err = parse_descriptor(&text).unwrap_err();
        assert!(err.to_string().contains("tables.diagnoses.patient_col"), "{err}");
    }

    #[test]
    fn rejects_unknown_join_target_and_duplicates() {
        let text = FIXTURE.replace("table: admissions", "table: visits");
        let err = parse_descriptor(&text).unwrap_err();
        assert!(err.to_string().contains("tables.diagnoses.join.table"), "{err}");

        let dup = "version: 1\ndataset_name: x\ntables:\n  a:\n    file: a.csv\n    patient_id_column: p\n    attribute_columns: [c]\n  a:\n    file: b.csv\n    patient_id_column: p\n    attribute_columns: [c]\n";
        assert!(parse_descriptor(dup).is_err());
    }

    #[test]
    fn rejects_anchors_aliases_and_multidoc() {
        let anchored = "version: 1\ndataset_name: &n x\ntables: {}\n";
        assert!(matches!(parse_descriptor(anchored), Err(DescriptorError::Syntax { .. })));
        let multi = "---\nversion: 1\n---\nversion: 1\n";
        assert!(matches!(parse_descriptor(multi), Err(DescriptorError::Syntax { .. })));
        let bad = "version: [1\n";
        assert!(matches!(parse_descriptor(bad), Err(DescriptorError::Syntax { .. })));
    }

    #[test]
    fn format_without_column_is_invalid() {
        let text = "version: 1\ndataset_name: x\ntables:\n  a:\n    file: a.csv\n    patient_id_column: p\n    timestamp_format: \"%Y\"\n    attribute_columns: [c]\n";
        assert!(parse_descriptor(text).is_err());
    }

    fn arb_descriptor() -> impl Strategy<Value = DatasetDescriptor> {
        let ident = "[a-z][a-z0-9_]{0,6}";
        let table = (
            ident,
            ident,
            prop::option::of((ident, prop::option::of("%[YmdHMS][-: ]%[YmdHMS]"))),
            prop::collection::btree_set("[a-z]{1,4}[0-9]", 1..4),
        );
        (
            "[A-Za-z][A-Za-z0-9 '\"]{0,10}",
            prop::collection::btree_map(ident, table, 1..5),
            any::<prop::sample::Index>(),
        )
            .prop_map(|(name, tables, join_pick)| {
                let names: Vec<String> = tables.keys().cloned().collect();
                let mut specs: Vec<TableSpec> = tables
                    .into_iter()
                    .map(|(tname, (file, pid, ts, attrs))| {
                        let (timestamp_column, timestamp_format) = match ts {
                            Some((c, f)) => (Some(c), f),
                            None => (None, None),
                        };
                        TableSpec {
                            name: tname,
                            file: PathBuf::from(format!("{file}.csv")),
                            patient_id_column: format!("pid_{pid}"),
                            timestamp_column,
                            timestamp_format,
                            attribute_columns: attrs.into_iter().collect(),
                            join: None,
                        }
                    })
                    .collect();
                if names.len() > 1 {
                    let parent = names[0].clone();
                    let child = join_pick.index(names.len() - 1) + 1;
                    specs[child].join = Some(JoinSpec {
                        table: parent,
                        on: "hadm_id".into(),
                        columns: vec!["admittime".into()],
                    });
                }
                DatasetDescriptor {
                    version: 1,
                    dataset_name: name,
                    tables: specs,
                }
            })
    }

    proptest! {
        #[test]
        fn serialize_round_trip(d in arb_descriptor()) {
            prop_assert!(d.validate().is_ok());
            let once = parse_descriptor(&d.to_yaml()).unwrap();
            prop_assert_eq!(&once, &d);
            let twice = parse_descriptor(&once.to_yaml()).unwrap();
            prop_assert_eq!(twice, once);
        }

        #[test]
        fn validation_is_order_independent(d in arb_descriptor(), rot in 0usize..5, drop_pid in any::<bool>()) {
            let mut d = d;
            if drop_pid {
                let last = d.tables.len() - 1;
                d.tables[last].patient_id_column.clear();
            }
            let verdict = d.validate().is_ok();
            let mut permuted = d.clone();
            let n = permuted.tables.len();
            permuted.tables.rotate_left(rot % n);
            permuted.tables.reverse();
            prop_assert_eq!(permuted.validate().is_ok(), verdict);
        }
    }
}
