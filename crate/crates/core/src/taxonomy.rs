//! Two-level category hierarchy (parents and child leaves under a synthetic
//! root) and the normalized label-graph adjacency built from it.
//!
//! Both `Taxonomy` and `LabelGraph` are immutable after construction and safe
//! to share across threads.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::hashing::fnv1a64;
use crate::math::Mat;

/// Name given to the synthetic root node; user labels may not claim it.
pub const ROOT_NAME: &str = "<root>";

#[derive(Debug, thiserror::Error)]
pub enum TaxonomyError {
    #[error("duplicate label `{0}`")]
    DuplicateLabel(String),
    #[error("line {line}: child `{name}` listed before any parent")]
    OrphanChild { line: usize, name: String },
    #[error("taxonomy has no categories")]
    EmptyTaxonomy,
    #[error("parent `{0}` has no children")]
    ChildlessParent(String),
    #[error("line {line}: unexpected indentation (children are indented two spaces)")]
    BadIndentation { line: usize },
    #[error("line {line}: label names may not contain tabs")]
    BadLabelName { line: usize },
    #[error("unknown label `{0}`")]
    UnknownLabel(String),
    #[error("label `{0}` is not a child category")]
    NotAChild(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Index into a taxonomy's node table. Ids are dense: root is 0, parents
/// follow in sorted-name order, then children in sorted-name order.
#[derive(
    Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct LabelId(pub u32);

impl LabelId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeKind {
    Root,
    Parent,
    Child,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Taxonomy {
    names: Vec<String>,
    kinds: Vec<NodeKind>,
    parent: Vec<Option<LabelId>>,
    children: Vec<Vec<LabelId>>,
    by_name: BTreeMap<String, LabelId>,
    parent_ids: Vec<LabelId>,
    child_ids: Vec<LabelId>,
}

impl Taxonomy {
    /// Builds a taxonomy from `(parent name, child names)` pairs, adding the
    /// synthetic root and assigning ids in sorted-name order per level.
    pub fn from_pairs<P, C>(pairs: &[(P, Vec<C>)]) -> Result<Self, TaxonomyError>
    where
        P: AsRef<str>,
        C: AsRef<str>,
    {
        if pairs.is_empty() {
            return Err(TaxonomyError::EmptyTaxonomy);
        }
        let mut parent_names: Vec<&str> = Vec::new();
        let mut child_lists: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for (p, cs) in pairs {
            let p = p.as_ref();
            if child_lists.contains_key(p) {
                return Err(TaxonomyError::DuplicateLabel(p.to_string()));
            }
            parent_names.push(p);
            child_lists.insert(p, cs.iter().map(|c| c.as_ref()).collect());
        }
        parent_names.sort_unstable();

        fn register<'a>(
            seen: &mut BTreeMap<&'a str, ()>,
            name: &'a str,
        ) -> Result<(), TaxonomyError> {
            if name.is_empty() {
                return Err(TaxonomyError::DuplicateLabel(String::new()));
            }
            if seen.insert(name, ()).is_some() {
                return Err(TaxonomyError::DuplicateLabel(name.to_string()));
            }
            Ok(())
        }
        let mut seen: BTreeMap<&str, ()> = BTreeMap::new();
        seen.insert(ROOT_NAME, ());
        for &p in &parent_names {
            register(&mut seen, p)?;
        }
        let mut all_children: Vec<(&str, &str)> = Vec::new(); // (child, parent)
        for &p in &parent_names {
            let cs = &child_lists[p];
            if cs.is_empty() {
                return Err(TaxonomyError::ChildlessParent(p.to_string()));
            }
            for &c in cs {
                register(&mut seen, c)?;
                all_children.push((c, p));
            }
        }
        all_children.sort_unstable_by_key(|&(c, _)| c);

        let n = 1 + parent_names.len() + all_children.len();
        let mut names = Vec::with_capacity(n);
        let mut kinds = Vec::with_capacity(n);
        let mut parent = vec![None; n];
        let mut children: Vec<Vec<LabelId>> = vec![Vec::new(); n];
        let mut by_name = BTreeMap::new();

        names.push(ROOT_NAME.to_string());
        kinds.push(NodeKind::Root);
        by_name.insert(ROOT_NAME.to_string(), LabelId(0));

        let mut parent_ids = Vec::with_capacity(parent_names.len());
        for &p in &parent_names {
            let id = LabelId(names.len() as u32);
            by_name.insert(p.to_string(), id);
            names.push(p.to_string());
            kinds.push(NodeKind::Parent);
            parent[id.index()] = Some(LabelId(0));
            children[0].push(id);
            parent_ids.push(id);
        }
        let mut child_ids = Vec::with_capacity(all_children.len());
        for &(c, p) in &all_children {
            let id = LabelId(names.len() as u32);
            let pid = by_name[p];
            by_name.insert(c.to_string(), id);
            names.push(c.to_string());
            kinds.push(NodeKind::Child);
            parent[id.index()] = Some(pid);
            children[pid.index()].push(id);
            child_ids.push(id);
        }

        Ok(Taxonomy { names, kinds, parent, children, by_name, parent_ids, child_ids })
    }

    /// Parses the taxonomy text format: one label per line, parents
    /// flush-left, children indented two spaces, `#` comments.
    pub fn load(source: &str) -> Result<Self, TaxonomyError> {
        let mut pairs: Vec<(String, Vec<String>)> = Vec::new();
        for (lineno, raw) in source.lines().enumerate() {
            let line = lineno + 1;
            if raw.trim().is_empty() || raw.trim_start().starts_with('#') {
                continue;
            }
            let name_part = if let Some(rest) = raw.strip_prefix("  ") {
                if rest.starts_with(' ') || rest.starts_with('\t') {
                    return Err(TaxonomyError::BadIndentation { line });
                }
                Indented(rest)
            } else if raw.starts_with(' ') || raw.starts_with('\t') {
                return Err(TaxonomyError::BadIndentation { line });
            } else {
                Flush(raw)
            };
            let (indented, text) = match name_part {
                Indented(t) => (true, t),
                Flush(t) => (false, t),
            };
            let name = text.trim().to_string();
            if name.contains('\t') {
                return Err(TaxonomyError::BadLabelName { line });
            }
            if indented {
                match pairs.last_mut() {
                    Some((_, cs)) => cs.push(name),
                    None => return Err(TaxonomyError::OrphanChild { line, name }),
                }
            } else {
                pairs.push((name, Vec::new()));
            }
        }
        Taxonomy::from_pairs(&pairs)
    }

    pub fn load_path(path: impl AsRef<Path>) -> Result<Self, TaxonomyError> {
        let text = std::fs::read_to_string(path)?;
        Taxonomy::load(&text)
    }

    pub fn root_id(&self) -> LabelId {
        LabelId(0)
    }

    /// Total node count including the synthetic root.
    pub fn node_count(&self) -> usize {
        self.names.len()
    }

    pub fn name(&self, id: LabelId) -> &str {
        &self.names[id.index()]
    }

    pub fn kind(&self, id: LabelId) -> NodeKind {
        self.kinds[id.index()]
    }

    pub fn id_of(&self, name: &str) -> Option<LabelId> {
        self.by_name.get(name).copied()
    }

    /// Parent ids in id order.
    pub fn parents(&self) -> &[LabelId] {
        &self.parent_ids
    }

    /// Child (leaf) ids in id order.
    pub fn children(&self) -> &[LabelId] {
        &self.child_ids
    }

    pub fn children_of(&self, parent: LabelId) -> &[LabelId] {
        &self.children[parent.index()]
    }

    pub fn is_child(&self, id: LabelId) -> bool {
        matches!(self.kinds.get(id.index()), Some(NodeKind::Child))
    }

    /// Parent of a child category.
    pub fn parent_of(&self, child: LabelId) -> Result<LabelId, TaxonomyError> {
        match self.kinds.get(child.index()) {
            None => Err(TaxonomyError::UnknownLabel(format!("#{}", child.0))),
            Some(NodeKind::Child) => Ok(self.parent[child.index()].expect("child has parent")),
            Some(_) => Err(TaxonomyError::NotAChild(self.names[child.index()].clone())),
        }
    }

    /// All children sharing `child`'s parent, excluding `child` itself.
    pub fn siblings(&self, child: LabelId) -> Result<Vec<LabelId>, TaxonomyError> {
        let parent = self.parent_of(child)?;
        Ok(self
            .children_of(parent)
            .iter()
            .copied()
            .filter(|&c| c != child)
            .collect())
    }

    /// Position of a child id within `children()`; panics on non-child ids.
    pub fn child_position(&self, child: LabelId) -> usize {
        debug_assert!(self.is_child(child));
        child.index() - 1 - self.parent_ids.len()
    }

    /// Position of a parent id within `parents()`; panics on non-parent ids.
    pub fn parent_position(&self, parent: LabelId) -> usize {
        debug_assert!(matches!(self.kind(parent), NodeKind::Parent));
        parent.index() - 1
    }

    /// Renders the taxonomy back to its text format (parents flush-left,
    /// children indented two spaces).
    pub fn to_source_text(&self) -> String {
        let mut out = String::new();
        for &p in self.parents() {
            out.push_str(self.name(p));
            out.push('\n');
            for &c in self.children_of(p) {
                out.push_str("  ");
                out.push_str(self.name(c));
                out.push('\n');
            }
        }
        out
    }

    /// Stable fingerprint of the node names and edges, used to bind
    /// checkpoints to the taxonomy they were trained on.
    pub fn structural_hash(&self) -> u64 {
        let mut h = 0xa5a5_a5a5_a5a5_a5a5;
        for (i, name) in self.names.iter().enumerate() {
            h = fnv1a64(name.as_bytes(), h);
            let p = self.parent[i].map(|p| p.0 as i64).unwrap_or(-1);
            h = fnv1a64(&p.to_le_bytes(), h);
        }
        h
    }
}

enum LinePart<'a> {
    Indented(&'a str),
    Flush(&'a str),
}
use LinePart::{Flush, Indented};

/// Label graph over the taxonomy nodes with self-loops added and symmetric
/// degree normalization applied.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelGraph {
    /// Root first, then parents, then children, each group in id order.
    pub node_order: Vec<LabelId>,
    /// `D^{-1/2} (A + I) D^{-1/2}`, dimension `node_count × node_count`.
    pub adjacency: Mat,
}

/// Symmetric degree normalization with self-loops over an undirected edge
/// list on `n` nodes.
pub fn normalized_adjacency(n: usize, edges: &[(usize, usize)]) -> Mat {
    let mut a = Mat::identity(n);
    for &(u, v) in edges {
        a.set(u, v, 1.0);
        a.set(v, u, 1.0);
    }
    let degrees: Vec<f64> = (0..n).map(|i| a.row(i).iter().sum::<f64>()).collect();
    let inv_sqrt: Vec<f64> = degrees.iter().map(|&d| 1.0 / d.sqrt()).collect();
    Mat::from_fn(n, n, |r, c| a.at(r, c) * inv_sqrt[r] * inv_sqrt[c])
}

/// Builds the normalized label graph: root↔parent and parent↔child edges.
pub fn build_label_graph(t: &Taxonomy) -> LabelGraph {
    let n = t.node_count();
    let mut edges = Vec::with_capacity(n - 1);
    for &p in t.parents() {
        edges.push((0, p.index()));
    }
    for &c in t.children() {
        let p = t.parent_of(c).expect("taxonomy child has parent");
        edges.push((p.index(), c.index()));
    }
    LabelGraph {
        node_order: (0..n as u32).map(LabelId).collect(),
        adjacency: normalized_adjacency(n, &edges),
    }
}
