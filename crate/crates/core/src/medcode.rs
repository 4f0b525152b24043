//! Medical-code ontologies: per-system code trees with definition lookup and ancestor or
//! descendant closure, plus many-to-many translation between systems.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum MedcodeError {
    #[error("parent links form a cycle through `{code}`")]
    Cycle { code: String },
    #[error("code `{code}` names parent `{parent}`, which is not defined")]
    DanglingParent { code: String, parent: String },
    #[error("code `{code}` is defined more than once")]
    DuplicateCode { code: String },
    #[error("unknown code `{code}`")]
    UnknownCode { code: String },
    #[error("{}: {message}", path.display())]
    Read { path: PathBuf, message: String },
}

impl MedcodeError {
    pub fn kind(&self) -> &'static str {
        match self {
            MedcodeError::Cycle { .. } => "CycleError",
            MedcodeError::DanglingParent { .. } => "DanglingParentError",
            MedcodeError::DuplicateCode { .. } => "DuplicateCodeError",
            MedcodeError::UnknownCode { .. } => "UnknownCodeError",
            MedcodeError::Read { .. } => "IoError",
        }
    }
}

pub type Result<T> = std::result::Result<T, MedcodeError>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeNode {
    pub name: String,
    pub parent: Option<String>,
}

/// Validated, acyclic code tree of one coding system.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OntologyGraph {
    pub system: String,
    nodes: BTreeMap<String, CodeNode>,
    children: BTreeMap<String, Vec<String>>,
}

impl OntologyGraph {
    /// Builds and validates a graph from `(code, name, parent)` rows.
    pub fn from_rows<I>(system: &str, rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String, Option<String>)>,
    {
        let mut nodes = BTreeMap::new();
        for (code, name, parent) in rows {
            if nodes.contains_key(&code) {
                return Err(MedcodeError::DuplicateCode { code });
            }
            nodes.insert(code, CodeNode { name, parent });
        }
        for (code, node) in &nodes {
            if let Some(p) = &node.parent {
                if !nodes.contains_key(p) {
                    return Err(MedcodeError::DanglingParent {
                        code: code.clone(),
                        parent: p.clone(),
                    });
                }
            }
        }
        check_acyclic(&nodes)?;
        let mut children: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for (code, node) in &nodes {
            if let Some(p) = &node.parent {
                children.entry(p.clone()).or_default().push(code.clone());
            }
        }
        Ok(OntologyGraph {
            system: system.to_string(),
            nodes,
            children,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn contains(&self, code: &str) -> bool {
        self.nodes.contains_key(code)
    }

    pub fn codes(&self) -> impl Iterator<Item = &str> {
        self.nodes.keys().map(String::as_str)
    }

    pub fn roots(&self) -> Vec<&str> {
        self.nodes
            .iter()
            .filter(|(_, n)| n.parent.is_none())
            .map(|(c, _)| c.as_str())
            .collect()
    }

    pub fn parent(&self, code: &str) -> Option<&str> {
        self.nodes.get(code).and_then(|n| n.parent.as_deref())
    }

    pub fn lookup(&self, code: &str) -> Option<&str> {
        self.nodes.get(code).map(|n| n.name.as_str())
    }

    /// Transitive parents of `code`, nearest first, excluding `code` itself.
    pub fn ancestors(&self, code: &str) -> Result<Vec<String>> {
        let mut node = self.nodes.get(code).ok_or_else(|| unknown(code))?;
        let mut out = Vec::new();
        while let Some(p) = &node.parent {
            out.push(p.clone());
            node = &self.nodes[p];
        }
        Ok(out)
    }

    /// Every code below `code`, in code order, excluding `code` itself.
    pub fn descendants(&self, code: &str) -> Result<Vec<String>> {
        if !self.contains(code) {
            return Err(unknown(code));
        }
        let mut out = BTreeSet::new();
        let mut stack = vec![code];
        while let Some(c) = stack.pop() {
            for child in self.children.get(c).into_iter().flatten() {
                out.insert(child.clone());
                stack.push(child);
            }
        }
        Ok(out.into_iter().collect())
    }
}

fn unknown(code: &str) -> MedcodeError {
    MedcodeError::UnknownCode { code: code.to_string() }
}

/// Rejects parent cycles, naming the smallest code on the first cycle found.
fn check_acyclic(nodes: &BTreeMap<String, CodeNode>) -> Result<()> {
    // 1 = on the current walk, 2 = known to reach a root.
    let mut state: BTreeMap<&str, u8> = BTreeMap::new();
    for start in nodes.keys() {
        let mut path: Vec<&str> = Vec::new();
        let mut cur = Some(start.as_str());
        while let Some(c) = cur {
            match state.get(c) {
                Some(2) => break,
                Some(1) => {
                    let at = path.iter().position(|p| *p == c).expect("on-path node is in the path");
                    let code = path[at..].iter().min().expect("cycle is non-empty");
                    return Err(MedcodeError::Cycle { code: code.to_string() });
                }
                _ => {
                    state.insert(c, 1);
                    path.push(c);
                    cur = nodes[c].parent.as_deref();
                }
            }
        }
        for p in path {
            state.insert(p, 2);
        }
    }
    Ok(())
}

fn read_err(path: &Path, message: impl ToString) -> MedcodeError {
    MedcodeError::Read {
        path: path.to_path_buf(),
        message: message.to_string(),
    }
}

fn csv_rows(path: &Path, header: &[&str]) -> Result<Vec<csv::StringRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| read_err(path, e))?;
    let found: Vec<String> = rdr.headers().map_err(|e| read_err(path, e))?.iter().map(|h| h.trim().to_string()).collect();
    if found != header {
        return Err(read_err(path, format!("expected header {:?}, found {found:?}", header.join(","))));
    }
    rdr.records().map(|r| r.map_err(|e| read_err(path, e))).collect()
}

/// Loads a `code,name,parent` CSV; an empty parent marks a root.
pub fn load_ontology(system: &str, path: impl AsRef<Path>) -> Result<OntologyGraph> {
    let path = path.as_ref();
    let rows = csv_rows(path, &["code", "name", "parent"])?;
    let mut parsed = Vec::with_capacity(rows.len());
    for r in rows {
        let code = r[0].trim().to_string();
        if code.is_empty() {
            return Err(read_err(path, "empty code"));
        }
        let parent = r[2].trim();
        parsed.push((code, r[1].to_string(), (!parent.is_empty()).then(|| parent.to_string())));
    }
    OntologyGraph::from_rows(system, parsed)
}

/// Many-to-many code translation between two systems.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CrossMap {
    pub source_system: String,
    pub target_system: String,
    pairs: BTreeMap<String, BTreeSet<String>>,
}

impl CrossMap {
    /// Builds from `(source, target)` pairs; repeated pairs collapse into one.
    pub fn from_pairs<I>(source_system: &str, target_system: &str, pairs: I) -> Self
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut map: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for (s, t) in pairs {
            map.entry(s).or_default().insert(t);
        }
        CrossMap {
            source_system: source_system.to_string(),
            target_system: target_system.to_string(),
            pairs: map,
        }
    }

    /// All targets paired with `code`; empty when unmapped.
    pub fn translate(&self, code: &str) -> BTreeSet<String> {
        self.pairs.get(code).cloned().unwrap_or_default()
    }

    pub fn translate_all<'a>(&self, codes: impl IntoIterator<Item = &'a str>) -> BTreeSet<String> {
        codes.into_iter().flat_map(|c| self.translate(c)).collect()
    }

    pub fn pair_count(&self) -> usize {
        self.pairs.values().map(BTreeSet::len).sum()
    }
}

/// Loads a `source,target` CSV.
pub fn load_crossmap(source_system: &str, target_system: &str, path: impl AsRef<Path>) -> Result<CrossMap> {
    let path = path.as_ref();
    let rows = csv_rows(path, &["source", "target"])?;
    let pairs = rows.iter().map(|r| (r[0].trim().to_string(), r[1].trim().to_string()));
    Ok(CrossMap::from_pairs(source_system, target_system, pairs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fixture(name: &str) -> PathBuf {
        Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/medcode").join(name)
    }

    fn rows(spec: &[(&str, Option<&str>)]) -> Vec<(String, String, Option<String>)> {
        spec.iter()
            .map(|(c, p)| (c.to_string(), format!("name of {c}"), p.map(str::to_string)))
            .collect()
    }

    #[test]
    fn fixture_tree_loads() {
        let g = load_ontology("ICD9CM", fixture("icd9_tree.csv")).unwrap();
        assert_eq!(g.len(), 10);
        assert_eq!(g.roots(), vec!["ICD9CM"]);
        assert_eq!(g.lookup("4280"), Some("Congestive heart failure, unspecified"));
        assert_eq!(g.lookup("4280"), g.lookup("4280"));
        assert_eq!(g.lookup("9999"), None);
        assert_eq!(g.ancestors("4019").unwrap(), vec!["401-405", "390-459", "ICD9CM"]);
        assert!(g.ancestors("ICD9CM").unwrap().is_empty());
        assert_eq!(g.descendants("390-459").unwrap(), vec!["401-405", "4011", "4019", "420-429", "4280"]);
        assert_eq!(g.ancestors("nope"), Err(MedcodeError::UnknownCode { code: "nope".into() }));
    }

    #[test]
    fn load_errors() {
        let self_loop = OntologyGraph::from_rows("X", rows(&[("A", Some("A"))]));
        assert_eq!(self_loop, Err(MedcodeError::Cycle { code: "A".into() }));
        let dup = OntologyGraph::from_rows("X", rows(&[("A", None), ("A", None)]));
        assert_eq!(dup, Err(MedcodeError::DuplicateCode { code: "A".into() }));
        let dangling = OntologyGraph::from_rows("X", rows(&[("A", Some("B"))]));
        assert!(matches!(dangling, Err(MedcodeError::DanglingParent { .. })));
        let cycle = OntologyGraph::from_rows("X", rows(&[("R", None), ("A", Some("C")), ("B", Some("A")), ("C", Some("B"))]));
        assert_eq!(cycle, Err(MedcodeError::Cycle { code: "A".into() }));

        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.csv");
        std::fs::write(&bad, "code,label,parent\nA,a,\n").unwrap();
        assert!(matches!(load_ontology("X", &bad), Err(MedcodeError::Read { .. })));
    }

    #[test]
    fn fixture_map_translates() {
        let m = load_crossmap("NDC", "ATC", fixture("ndc_to_atc.csv")).unwrap();
        let both: BTreeSet<String> = ["C09AA02", "C09BA02"].map(String::from).into();
        assert_eq!(m.translate("00093-0058"), both);
        assert!(m.translate("99999-9999").is_empty());
        let union: BTreeSet<String> = m.translate("00093-0058").union(&m.translate("00002-8215")).cloned().collect();
        assert_eq!(m.translate_all(["00093-0058", "00002-8215", "x"]), union);
        assert_eq!(CrossMap::from_pairs("a", "b", vec![("x".to_string(), "y".to_string()); 2]).pair_count(), 1);
    }

    /// Random forest: node i's parent is drawn from nodes 0..i, or none.
    fn arb_forest() -> impl Strategy<Value = Vec<Option<usize>>> {
        (1usize..40).prop_flat_map(|n| {
            (0..n)
                .map(|i| if i == 0 { Just(None).boxed() } else { prop::option::weighted(0.85, 0..i).boxed() })
                .collect::<Vec<_>>()
        })
    }

    fn name(i: usize) -> String {
        format!("C{i:03}")
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn closures_match_brute_force(parents in arb_forest(), reverse in any::<bool>()) {
            let mut rows: Vec<_> = parents.iter().enumerate()
                .map(|(i, p)| (name(i), String::new(), p.map(name)))
                .collect();
            if reverse {
                rows.reverse();
            }
            let g = OntologyGraph::from_rows("X", rows).unwrap();
            // Reflexive-transitive parent relation, by repeated relaxation over all pairs.
            let n = parents.len();
            let mut reach = vec![vec![false; n]; n];
            for i in 0..n {
                reach[i][i] = true;
                if let Some(p) = parents[i] { reach[i][p] = true; }
            }
            for k in 0..n { for i in 0..n { for j in 0..n {
                if reach[i][k] && reach[k][j] { reach[i][j] = true; }
            }}}
            for i in 0..n {
                let anc = g.ancestors(&name(i)).unwrap();
                let anc_set: BTreeSet<String> = anc.iter().cloned().collect();
                let oracle: BTreeSet<String> = (0..n).filter(|&j| j != i && reach[i][j]).map(name).collect();
                prop_assert_eq!(&anc_set, &oracle);
                prop_assert_eq!(anc.len(), anc_set.len());
                prop_assert!(!anc_set.contains(&name(i)));
                // Nearest first: each entry is the parent of the previous one.
                let mut prev = name(i);
                for a in &anc {
                    prop_assert_eq!(g.parent(&prev), Some(a.as_str()));
                    prev = a.clone();
                }
                let desc: BTreeSet<String> = g.descendants(&name(i)).unwrap().into_iter().collect();
                let dual: BTreeSet<String> = (0..n)
                    .filter(|&j| g.ancestors(&name(j)).unwrap().contains(&name(i)))
                    .map(name)
                    .collect();
                prop_assert_eq!(desc, dual);
            }
        }

        #[test]
        fn cyclic_parent_maps_are_rejected(parents in arb_forest(), pick in any::<prop::sample::Index>(), depth in any::<prop::sample::Index>()) {
            // Close a cycle: point some node's ancestor (or itself) back at that node.
            let n = parents.len();
            let i = pick.index(n);
            let mut chain = vec![i];
            while let Some(p) = parents[*chain.last().unwrap()] { chain.push(p); }
            let top = chain[depth.index(chain.len())];
            let mut cyclic = parents.clone();
            cyclic[top] = Some(i);
            let rows = cyclic.iter().enumerate().map(|(k, p)| (name(k), String::new(), p.map(name)));
            let on_cycle: BTreeSet<String> = chain[..=chain.iter().position(|&c| c == top).unwrap()].iter().map(|&c| name(c)).collect();
            match OntologyGraph::from_rows("X", rows) {
                Err(MedcodeError::Cycle { code }) => prop_assert!(on_cycle.contains(&code), "{code} not in {on_cycle:?}"),
                other => prop_assert!(false, "expected a cycle error, got {other:?}"),
            }
        }
    }
}
