//! Key-component extraction: ordered landmark categories and turn actions
//! recovered from an instruction with a lexicon tagger, Lesk sense selection
//! and Wu-Palmer matching against the category synsets.

mod lexicon;
mod taxonomy;

use std::collections::HashSet;
use std::sync::Arc;

use serde::{Serialize, Serializer};
use thiserror::Error;

use crate::semantic_map::{CategoryId, CategoryTable};

pub use lexicon::{pos_tag, tokenize, LexEntry, Lexicon, PosTag, TaggedToken};
pub use taxonomy::{ObjectSynsetMap, Similarity, SynsetId, Taxonomy};

pub const DEFAULT_GAMMA: (u32, u32) = (85, 100);
pub const DEFAULT_WINDOW: usize = 3;

#[derive(Debug, Error)]
pub enum ParserError {
    #[error("word {0:?} is not in the lexicon")]
    UnknownWord(String),
    #[error("word {0:?} has no senses")]
    NoSenses(String),
    #[error("unknown synset {0}")]
    UnknownSynset(String),
    #[error("invalid language asset: {0}")]
    Asset(String),
}

/// Lexicon, taxonomy, category synsets and Lesk stop words, loaded together.
#[derive(Debug, Clone)]
pub struct LanguageAssets {
    pub categories: CategoryTable,
    pub taxonomy: Taxonomy,
    pub lexicon: Lexicon,
    pub object_synsets: ObjectSynsetMap,
    pub stop_words: HashSet<String>,
}

impl LanguageAssets {
    pub fn bundled() -> Arc<Self> {
        static BUNDLED: std::sync::OnceLock<Arc<LanguageAssets>> = std::sync::OnceLock::new();
        BUNDLED
            .get_or_init(|| {
                Arc::new(
                    Self::from_sources(
                        CategoryTable::bundled(),
                        include_str!("../../assets/taxonomy.tsv"),
                        include_str!("../../assets/lexicon.tsv"),
                        include_str!("../../assets/object_synsets.tsv"),
                        include_str!("../../assets/stopwords.txt"),
                    )
                    .expect("bundled language assets are valid"),
                )
            })
            .clone()
    }

    pub fn from_sources(
        categories: CategoryTable,
        taxonomy_tsv: &str,
        lexicon_tsv: &str,
        object_synsets_tsv: &str,
        stop_words: &str,
    ) -> Result<Self, ParserError> {
        let taxonomy = Taxonomy::from_tsv(taxonomy_tsv)?;
        let lexicon = Lexicon::from_tsv(lexicon_tsv, &taxonomy)?;
        let object_synsets = ObjectSynsetMap::from_tsv(object_synsets_tsv, &categories, &taxonomy)?;
        let stop_words = stop_words.lines().map(str::trim).filter(|w| !w.is_empty()).map(str::to_string).collect();
        Ok(Self { categories, taxonomy, lexicon, object_synsets, stop_words })
    }

    /// Simplified Lesk: the sense whose gloss shares the most distinct
    /// non-stop-words with the context. Ties go to the earlier listed sense.
    pub fn wsd_lesk<S: AsRef<str>>(&self, word: &str, context: &[S]) -> Result<SynsetId, ParserError> {
        let entry = self.lexicon.get(word).ok_or_else(|| ParserError::UnknownWord(word.to_string()))?;
        let (&first, rest) = entry.synsets.split_first().ok_or_else(|| ParserError::NoSenses(word.to_string()))?;
        if rest.is_empty() {
            return Ok(first);
        }
        let context: HashSet<&str> =
            context.iter().map(AsRef::as_ref).filter(|w| !self.stop_words.contains(*w)).collect();
        let overlap = |s: SynsetId| {
            let gloss: HashSet<&str> =
                self.taxonomy.gloss(s).iter().map(String::as_str).filter(|w| !self.stop_words.contains(*w)).collect();
            gloss.intersection(&context).count()
        };
        let mut best = (first, overlap(first));
        for &s in rest {
            let o = overlap(s);
            if o > best.1 {
                best = (s, o);
            }
        }
        Ok(best.0)
    }

    pub fn wu_palmer(&self, a: SynsetId, b: SynsetId) -> Result<Similarity, ParserError> {
        self.taxonomy.wu_palmer(a, b)
    }

    /// Closest category to a synset; ties go to the smallest category id.
    pub fn nearest_label(&self, s: SynsetId) -> Result<(CategoryId, Similarity), ParserError> {
        let mut best: Option<(CategoryId, Similarity)> = None;
        for (cat, target) in self.object_synsets.iter() {
            let score = self.taxonomy.wu_palmer(s, target)?;
            if best.is_none_or(|(_, b)| score > b) {
                best = Some((cat, score));
            }
        }
        best.ok_or_else(|| ParserError::Asset("empty category table".into()))
    }

    /// Dictionary word for a category, used when verbalizing paths.
    pub fn category_word(&self, category: CategoryId) -> &str {
        self.categories.label(category)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ComponentKind {
    Landmark(CategoryId),
    TurnLeft,
    TurnRight,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct KeyComponent {
    pub kind: ComponentKind,
    pub token_index: usize,
}

impl KeyComponent {
    pub fn landmark(&self) -> Option<CategoryId> {
        match self.kind {
            ComponentKind::Landmark(c) => Some(c),
            _ => None,
        }
    }
}

#[derive(Serialize)]
struct ComponentJson<'a> {
    kind: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    category: Option<u16>,
    #[serde(skip_serializing_if = "Option::is_none")]
    label: Option<&'a str>,
    token: usize,
}

/// JSON form of a component sequence, as printed by the CLI.
pub fn components_to_json(components: &[KeyComponent], categories: &CategoryTable) -> serde_json::Value {
    let rows: Vec<ComponentJson> = components
        .iter()
        .map(|c| match c.kind {
            ComponentKind::Landmark(cat) => ComponentJson {
                kind: "landmark",
                category: Some(cat.0),
                label: Some(categories.label(cat)),
                token: c.token_index,
            },
            ComponentKind::TurnLeft => ComponentJson { kind: "turn_left", category: None, label: None, token: c.token_index },
            ComponentKind::TurnRight => ComponentJson { kind: "turn_right", category: None, label: None, token: c.token_index },
        })
        .collect();
    serde_json::to_value(rows).expect("components serialize")
}

impl Serialize for ComponentKind {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            ComponentKind::Landmark(c) => s.serialize_str(&format!("landmark:{}", c.0)),
            ComponentKind::TurnLeft => s.serialize_str("turn_left"),
            ComponentKind::TurnRight => s.serialize_str("turn_right"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct InstructionParser {
    assets: Arc<LanguageAssets>,
    gamma: Similarity,
    window: usize,
}

impl InstructionParser {
    pub fn new(assets: Arc<LanguageAssets>) -> Self {
        Self { assets, gamma: Similarity::new(DEFAULT_GAMMA.0, DEFAULT_GAMMA.1), window: DEFAULT_WINDOW }
    }

    pub fn bundled() -> Self {
        Self::new(LanguageAssets::bundled())
    }

    /// Threshold as an exact fraction; landmarks need a score strictly above it.
    pub fn with_gamma(mut self, numer: u32, denom: u32) -> Self {
        self.gamma = Similarity::new(numer, denom);
        self
    }

    pub fn with_window(mut self, k: usize) -> Self {
        self.window = k;
        self
    }

    pub fn assets(&self) -> &Arc<LanguageAssets> {
        &self.assets
    }

    pub fn pos_tag(&self, text: &str) -> Vec<TaggedToken> {
        pos_tag(&self.assets.lexicon, text)
    }

    /// Nouns become landmarks when their best category match beats the
    /// threshold. A verb followed within `k` tokens by `left`/`right` yields a
    /// turn unless the next token is a noun other than `turn`; the scan stops
    /// at the first direction word either way.
    pub fn extract_key_components(&self, text: &str) -> Vec<KeyComponent> {
        let tagged = self.pos_tag(text);
        let context: Vec<&str> = tagged.iter().map(|t| t.text.as_str()).collect();
        let mut out: Vec<KeyComponent> = Vec::new();
        for (i, w) in tagged.iter().enumerate() {
            if w.tag.is_noun() {
                let Ok(sense) = self.assets.wsd_lesk(&w.text, &context) else { continue };
                let Ok((cat, score)) = self.assets.nearest_label(sense) else { continue };
                if score > self.gamma {
                    out.push(KeyComponent { kind: ComponentKind::Landmark(cat), token_index: i });
                }
            } else if w.tag.is_verb() {
                for j in i + 1..=(i + self.window).min(tagged.len().saturating_sub(1)) {
                    let kind = match tagged[j].text.as_str() {
                        "left" => ComponentKind::TurnLeft,
                        "right" => ComponentKind::TurnRight,
                        _ => continue,
                    };
                    let accept = match tagged.get(j + 1) {
                        None => true,
                        Some(next) => !next.tag.is_noun() || next.text == "turn",
                    };
                    if accept && !out.iter().any(|c| c.token_index == j) {
                        out.push(KeyComponent { kind, token_index: j });
                    }
                    break;
                }
            }
        }
        out.sort_by_key(|c| c.token_index);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parser() -> InstructionParser {
        InstructionParser::bundled()
    }

    fn tags(text: &str) -> Vec<(String, PosTag)> {
        parser().pos_tag(text).into_iter().map(|t| (t.text, t.tag)).collect()
    }

    fn cat(label: &str) -> CategoryId {
        CategoryTable::bundled().id(label).unwrap()
    }

    fn kinds(text: &str) -> Vec<ComponentKind> {
        parser().extract_key_components(text).into_iter().map(|c| c.kind).collect()
    }

    #[test]
    fn bundled_assets_sizes() {
        let a = LanguageAssets::bundled();
        assert!(a.lexicon.len() >= 450, "lexicon has {} words", a.lexicon.len());
        assert!((110..=140).contains(&a.taxonomy.len()));
        assert!(a.taxonomy.max_depth() <= 7);
        assert!((45..=60).contains(&a.stop_words.len()));
    }

    #[test]
    fn tagger_rules() {
        assert_eq!(tags("turn right"), vec![("turn".into(), PosTag::VB), ("right".into(), PosTag::Other)]);
        assert_eq!(
            tags("a right turn"),
            vec![("a".into(), PosTag::Other), ("right".into(), PosTag::Other), ("turn".into(), PosTag::NN)]
        );
        assert_eq!(tags("sofas"), vec![("sofas".into(), PosTag::NNS)]);
        assert_eq!(tags("Zorblax")[0].1, PosTag::NN);
        assert_eq!(tags("go then turn")[2].1, PosTag::VB);
        assert_eq!(tags("sofa, head")[2].1, PosTag::VB);
        assert_eq!(tokenize("Walk past the SOFA. Stop!"), vec!["walk", "past", "the", "sofa", ".", "stop", "!"]);
    }

    #[test]
    fn lesk_picks_sense_by_gloss_overlap() {
        let a = LanguageAssets::bundled();
        let t = &a.taxonomy;
        let furniture = t.id("table.n.01").unwrap();
        let data = t.id("table.n.02").unwrap();
        assert_eq!(a.wsd_lesk("table", &["set", "the", "table", "for", "dinner", "near", "the", "chairs"]).unwrap(), furniture);
        assert_eq!(a.wsd_lesk("table", &["a", "table", "with", "rows", "and", "columns"]).unwrap(), data);
        assert_eq!(a.wsd_lesk("table", &["zzz"]).unwrap(), furniture);
        assert_eq!(a.wsd_lesk("sofa", &["rows", "columns"]).unwrap(), t.id("sofa.n.01").unwrap());
        assert!(matches!(a.wsd_lesk("zorblax", &["x"]), Err(ParserError::UnknownWord(_))));
    }

    #[test]
    fn nearest_label_on_own_synset_is_exact() {
        let a = LanguageAssets::bundled();
        for (c, s) in a.object_synsets.iter() {
            assert_eq!(a.nearest_label(s).unwrap(), (c, Similarity::new(1, 1)));
        }
        // hyponym at depth 7 under a depth-6 category: 12/13
        let armchair = a.taxonomy.id("armchair.n.01").unwrap();
        assert_eq!(a.nearest_label(armchair).unwrap(), (cat("chair"), Similarity::new(12, 13)));
    }

    #[test]
    fn appendix_phrases() {
        assert_eq!(kinds("take a right turn and walk past the sofa"), vec![ComponentKind::TurnRight, ComponentKind::Landmark(cat("sofa"))]);
        assert_eq!(kinds("head to the right"), vec![ComponentKind::TurnRight]);
        assert_eq!(kinds("you can observe a picture on the right wall"), vec![ComponentKind::Landmark(cat("picture"))]);
    }

    #[test]
    fn threshold_is_strict() {
        // "furniture" (depth 5) vs chair (depth 6): 10/11 passes 0.85 but not 10/11 itself
        let p = parser();
        assert_eq!(p.extract_key_components("the furniture").len(), 1);
        let strict = parser().with_gamma(10, 11);
        assert!(strict.extract_key_components("the furniture").is_empty());
        let loose = parser().with_gamma(909, 1000);
        assert_eq!(loose.extract_key_components("the furniture").len(), 1);
    }

    #[test]
    fn turn_window_and_follower_rules() {
        assert_eq!(kinds("turn left"), vec![ComponentKind::TurnLeft]);
        assert_eq!(kinds("go to the left"), vec![ComponentKind::TurnLeft]);
        // beyond k = 3
        assert!(kinds("go all the way left").is_empty());
        assert_eq!(parser().with_window(4).extract_key_components("go all the way left").len(), 1);
        // noun follower blocks, first hit exits the scan
        assert_eq!(kinds("walk right sofa"), vec![ComponentKind::Landmark(cat("sofa"))]);
        assert_eq!(kinds("walk left right"), vec![ComponentKind::TurnLeft]);
    }

    #[test]
    fn components_are_in_token_order() {
        let comps = parser().extract_key_components("walk past the sofa then turn left and stop near the lamp");
        assert!(comps.windows(2).all(|w| w[0].token_index < w[1].token_index));
        assert_eq!(
            comps.iter().map(|c| c.kind).collect::<Vec<_>>(),
            vec![ComponentKind::Landmark(cat("sofa")), ComponentKind::TurnLeft, ComponentKind::Landmark(cat("lamp"))]
        );
        let json = components_to_json(&comps, &CategoryTable::bundled());
        assert_eq!(json[0]["label"], "sofa");
        assert_eq!(json[1]["kind"], "turn_left");
    }
}
