use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt;

use num_rational::Ratio;

use crate::semantic_map::{CategoryId, CategoryTable};

use super::ParserError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SynsetId(pub u32);

/// Wu-Palmer score kept as an exact ratio so threshold comparisons and ties are exact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Similarity(Ratio<u32>);

impl Similarity {
    pub fn new(numer: u32, denom: u32) -> Self {
        Similarity(Ratio::new(numer, denom))
    }

    pub fn ratio(self) -> Ratio<u32> {
        self.0
    }

    pub fn to_f64(self) -> f64 {
        *self.0.numer() as f64 / *self.0.denom() as f64
    }
}

impl PartialOrd for Similarity {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Similarity {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.cmp(&other.0)
    }
}

impl fmt::Display for Similarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.0.numer(), self.0.denom())
    }
}

#[derive(Debug, Clone)]
struct Node {
    name: String,
    parent: Option<SynsetId>,
    depth: u32,
    gloss: Vec<String>,
}

/// Single-rooted synset tree; the root has depth 1.
#[derive(Debug, Clone)]
pub struct Taxonomy {
    nodes: Vec<Node>,
    by_name: HashMap<String, SynsetId>,
}

impl Taxonomy {
    /// Parses `synset \t parent \t gloss words` lines, parent `-` for the root.
    /// Parents may appear after their children.
    pub fn from_tsv(text: &str) -> Result<Self, ParserError> {
        let mut raw = Vec::new();
        let mut by_name = HashMap::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(ParserError::Asset(format!("taxonomy line {}: expected 3 columns", lineno + 1)));
            }
            let name = cols[0].trim().to_string();
            if by_name.insert(name.clone(), SynsetId(raw.len() as u32)).is_some() {
                return Err(ParserError::Asset(format!("duplicate synset {name}")));
            }
            let gloss = cols[2].split_whitespace().map(str::to_lowercase).collect();
            raw.push((name, cols[1].trim().to_string(), gloss));
        }
        let mut nodes: Vec<Node> = Vec::with_capacity(raw.len());
        for (name, parent, gloss) in raw {
            let parent = match parent.as_str() {
                "-" => None,
                p => Some(*by_name.get(p).ok_or_else(|| ParserError::UnknownSynset(p.to_string()))?),
            };
            nodes.push(Node { name, parent, depth: 0, gloss });
        }
        let roots = nodes.iter().filter(|n| n.parent.is_none()).count();
        if roots != 1 {
            return Err(ParserError::Asset(format!("taxonomy must have exactly one root, found {roots}")));
        }
        for i in 0..nodes.len() {
            let mut depth = 1;
            let mut cur = nodes[i].parent;
            while let Some(p) = cur {
                depth += 1;
                if depth as usize > nodes.len() {
                    return Err(ParserError::Asset(format!("cycle through synset {}", nodes[i].name)));
                }
                cur = nodes[p.0 as usize].parent;
            }
            nodes[i].depth = depth;
        }
        Ok(Self { nodes, by_name })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = SynsetId> {
        (0..self.nodes.len() as u32).map(SynsetId)
    }

    pub fn id(&self, name: &str) -> Option<SynsetId> {
        self.by_name.get(name).copied()
    }

    fn node(&self, s: SynsetId) -> Result<&Node, ParserError> {
        self.nodes.get(s.0 as usize).ok_or_else(|| ParserError::UnknownSynset(format!("#{}", s.0)))
    }

    pub fn name(&self, s: SynsetId) -> &str {
        &self.nodes[s.0 as usize].name
    }

    /// Head lemma of a synset name, e.g. `sofa` for `sofa.n.01`.
    pub fn lemma(&self, s: SynsetId) -> &str {
        let name = self.name(s);
        name.split('.').next().unwrap_or(name)
    }

    pub fn parent(&self, s: SynsetId) -> Option<SynsetId> {
        self.nodes[s.0 as usize].parent
    }

    pub fn depth(&self, s: SynsetId) -> Result<u32, ParserError> {
        Ok(self.node(s)?.depth)
    }

    pub fn gloss(&self, s: SynsetId) -> &[String] {
        &self.nodes[s.0 as usize].gloss
    }

    pub fn max_depth(&self) -> u32 {
        self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
    }

    pub fn lowest_common_ancestor(&self, a: SynsetId, b: SynsetId) -> Result<SynsetId, ParserError> {
        let (mut a, mut b) = (a, b);
        let (mut da, mut db) = (self.depth(a)?, self.depth(b)?);
        while da > db {
            a = self.nodes[a.0 as usize].parent.expect("non-root has parent");
            da -= 1;
        }
        while db > da {
            b = self.nodes[b.0 as usize].parent.expect("non-root has parent");
            db -= 1;
        }
        while a != b {
            a = self.nodes[a.0 as usize].parent.expect("single root");
            b = self.nodes[b.0 as usize].parent.expect("single root");
        }
        Ok(a)
    }

    /// `2 * depth(lca) / (depth(a) + depth(b))`.
    pub fn wu_palmer(&self, a: SynsetId, b: SynsetId) -> Result<Similarity, ParserError> {
        let lca = self.lowest_common_ancestor(a, b)?;
        Ok(Similarity::new(2 * self.depth(lca)?, self.depth(a)? + self.depth(b)?))
    }
}

/// Category label to its reference synset, total over the label set.
#[derive(Debug, Clone)]
pub struct ObjectSynsetMap {
    synsets: Vec<SynsetId>,
}

impl ObjectSynsetMap {
    pub fn from_tsv(text: &str, categories: &CategoryTable, taxonomy: &Taxonomy) -> Result<Self, ParserError> {
        let mut synsets: Vec<Option<SynsetId>> = vec![None; categories.len()];
        for line in text.lines() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (label, synset) = line
                .split_once('\t')
                .ok_or_else(|| ParserError::Asset(format!("object synset line {line:?}: expected 2 columns")))?;
            let cat = categories
                .id(label.trim())
                .ok_or_else(|| ParserError::Asset(format!("unknown category {label:?}")))?;
            let s = taxonomy.id(synset.trim()).ok_or_else(|| ParserError::UnknownSynset(synset.trim().to_string()))?;
            synsets[cat.index()] = Some(s);
        }
        let synsets = synsets
            .into_iter()
            .enumerate()
            .map(|(i, s)| s.ok_or_else(|| ParserError::Asset(format!("category {} has no synset", categories.label(CategoryId(i as u16))))))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { synsets })
    }

    pub fn get(&self, category: CategoryId) -> SynsetId {
        self.synsets[category.index()]
    }

    pub fn iter(&self) -> impl Iterator<Item = (CategoryId, SynsetId)> + '_ {
        self.synsets.iter().enumerate().map(|(i, &s)| (CategoryId(i as u16), s))
    }
}
