//! Synthetic captioning corpus.
//!
//! Each record comes from a [`SceneSpec`]: a few objects with a category and
//! an attribute, and relations between them. A template renders the scene
//! into a caption together with its constituency tree, so box structure is
//! known by construction. Region features are fixed embeddings of the scene
//! parts plus seeded Gaussian noise.
//!
//! Template syntax is bracket notation with bare words, e.g.
//! `(S (NP a ATTR1 OBJ1) (VP (VP REL1) (NP the ATTR2 OBJ2)))`. Placeholders:
//! `ATTRn` and `OBJn` name the attribute and category of object `n`, `RELn`
//! expands to the words of relation `n`; the index defaults to 1. Bare words
//! receive a part-of-speech preterminal from a small fixed lexicon. A
//! template without parentheses is read as a single noun phrase.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::boxes::{parse_bracketed, ParseNode};
use crate::corpus::CaptionRecord;
use crate::error::{Error, Result};

pub const CATEGORIES: [&str; 30] = [
    "cube", "ball", "cone", "box", "cup", "bowl", "plate", "vase", "lamp", "chair", "table",
    "book", "bottle", "clock", "phone", "shoe", "hat", "bag", "pen", "mug", "candle", "basket",
    "pillow", "kettle", "spoon", "bucket", "helmet", "drum", "jar", "block",
];

pub const ATTRIBUTES: [&str; 20] = [
    "red", "blue", "green", "yellow", "black", "white", "orange", "purple", "pink", "brown",
    "gray", "silver", "golden", "wooden", "metal", "plastic", "glass", "striped", "dotted",
    "shiny",
];

pub const RELATIONS: [&str; 12] = [
    "lying next to",
    "sitting right beside",
    "placed right behind",
    "resting just under",
    "standing close to",
    "leaning up against",
    "hidden deep inside",
    "floating just above",
    "hanging just over",
    "glued right onto",
    "stacked right atop",
    "rolling close by",
];

/// Three-object templates of 14 to 16 tokens and five or six finest-level boxes.
pub const DEFAULT_TEMPLATES: [&str; 3] = [
    "(S (NP (NP a ATTR1 OBJ1) (CC and) (NP a ATTR2 OBJ2)) (VP (VP are REL1) (NP the ATTR3 OBJ3)))",
    "(S (NP a ATTR1 OBJ1) (VP (VP is REL1) (NP (NP the ATTR2 OBJ2) (CC and) (NP the ATTR3 OBJ3))))",
    "(S (NP a ATTR1 OBJ1) (VP (VP REL1) (NP the ATTR2 OBJ2)) (CC and) (VP (VP REL2) (NP the ATTR3 OBJ3)))",
];

const MAX_OBJECTS: usize = 8;
const MAX_RELATIONS: usize = 8;
const EMBED_SEED: u64 = 0x5eed_b0f1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_scenes: usize,
    pub n_categories: usize,
    pub n_attributes: usize,
    pub n_relations: usize,
    pub d_r: usize,
    /// Standard deviation of the Gaussian noise added to region features.
    pub noise: f64,
    pub templates: Vec<String>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_scenes: 2000,
            n_categories: 12,
            n_attributes: 8,
            n_relations: 6,
            d_r: 32,
            noise: 0.1,
            templates: DEFAULT_TEMPLATES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    /// `(category, attribute)` per object.
    pub objects: Vec<(usize, usize)>,
    /// `(subject index, relation, object index)`.
    pub relations: Vec<(usize, usize, usize)>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Attr(usize),
    Obj(usize),
    Rel(usize),
}

#[derive(Debug, Clone)]
enum TItem {
    Word(String),
    Slot(Slot),
    Node(String, Vec<TItem>),
}

/// A parsed template and the scene arity it needs.
#[derive(Debug, Clone)]
pub struct Template {
    root: TItem,
    pub n_objects: usize,
    pub n_relations: usize,
}

const POS_TAGS: [&str; 16] = [
    "DT", "JJ", "NN", "NNS", "IN", "CC", "VBG", "VBZ", "VBP", "VBN", "TO", "RB", "PRP", "CD",
    "WDT", "EX",
];

fn pos_of(word: &str) -> &'static str {
    match word {
        "a" | "an" | "the" => "DT",
        "and" | "or" | "but" => "CC",
        "is" => "VBZ",
        "are" => "VBP",
        "to" => "TO",
        "on" | "next" | "behind" | "under" | "near" | "against" | "inside" | "above" | "beside"
        | "with" | "in" | "of" | "at" | "by" | "over" | "onto" | "atop" => "IN",
        "right" | "just" | "close" | "up" | "deep" | "together" | "again" | "very" => "RB",
        w if w.ends_with("ing") => "VBG",
        _ => "NN",
    }
}

fn parse_slot(word: &str) -> Result<Option<Slot>> {
    if !word.chars().next().is_some_and(|c| c.is_ascii_uppercase()) {
        return Ok(None);
    }
    let split = word.find(|c: char| c.is_ascii_digit()).unwrap_or(word.len());
    let (name, idx) = word.split_at(split);
    let idx: usize = if idx.is_empty() {
        1
    } else {
        idx.parse()
            .map_err(|_| Error::Config(format!("bad placeholder index in {word:?}")))?
    };
    if idx == 0 {
        return Err(Error::Config(format!("placeholder {word:?}: indices start at 1")));
    }
    let slot = match name {
        "ATTR" => Slot::Attr(idx - 1),
        "OBJ" => Slot::Obj(idx - 1),
        "REL" => Slot::Rel(idx - 1),
        _ => return Err(Error::Config(format!("unknown template placeholder {word:?}"))),
    };
    Ok(Some(slot))
}

impl Template {
    pub fn parse(text: &str) -> Result<Template> {
        let text = text.trim();
        if text.is_empty() {
            return Err(Error::Config("empty template".into()));
        }
        let bracketed = if text.starts_with('(') {
            text.to_string()
        } else {
            format!("(NP {text})")
        };
        let tree = parse_bracketed(&bracketed)
            .map_err(|e| Error::Config(format!("template {text:?}: {e}")))?;
        let root = Self::convert(&tree)?;
        let mut t = Template {
            root,
            n_objects: 0,
            n_relations: 0,
        };
        let (mut objs, mut rels) = (0, 0);
        Self::arity(&t.root, &mut objs, &mut rels);
        if objs > MAX_OBJECTS || rels > MAX_RELATIONS {
            return Err(Error::Config(format!("template {text:?} uses too many slots")));
        }
        t.n_objects = objs.max(if rels > 0 { 2 } else { 0 });
        t.n_relations = rels;
        Ok(t)
    }

    fn convert(node: &ParseNode) -> Result<TItem> {
        match node {
            ParseNode::Leaf(w) => Ok(match parse_slot(w)? {
                Some(s) => TItem::Slot(s),
                None => TItem::Word(w.clone()),
            }),
            ParseNode::Node { label, children } => Ok(TItem::Node(
                label.clone(),
                children.iter().map(Self::convert).collect::<Result<_>>()?,
            )),
        }
    }

    fn arity(item: &TItem, objs: &mut usize, rels: &mut usize) {
        match item {
            TItem::Word(_) => {}
            TItem::Slot(Slot::Attr(i)) | TItem::Slot(Slot::Obj(i)) => *objs = (*objs).max(i + 1),
            TItem::Slot(Slot::Rel(i)) => *rels = (*rels).max(i + 1),
            TItem::Node(_, children) => {
                for c in children {
                    Self::arity(c, objs, rels);
                }
            }
        }
    }

    /// Render the template for a scene as a tree.
    pub fn render(&self, scene: &SceneSpec) -> Result<ParseNode> {
        if scene.objects.len() < self.n_objects || scene.relations.len() < self.n_relations {
            return Err(Error::Data("scene has too few objects or relations for template".into()));
        }
        let mut out = Self::render_item(&self.root, scene, false);
        Ok(out.pop().expect("root renders to one node"))
    }

    fn slot_words(slot: Slot, scene: &SceneSpec) -> Vec<String> {
        match slot {
            Slot::Attr(i) => vec![ATTRIBUTES[scene.objects[i].1].to_string()],
            Slot::Obj(i) => vec![CATEGORIES[scene.objects[i].0].to_string()],
            Slot::Rel(i) => RELATIONS[scene.relations[i].1]
                .split_whitespace()
                .map(String::from)
                .collect(),
        }
    }

    fn tag_of(slot: Slot, word: &str) -> &'static str {
        match slot {
            Slot::Attr(_) => "JJ",
            Slot::Obj(_) => "NN",
            Slot::Rel(_) => pos_of(word),
        }
    }

    fn render_item(item: &TItem, scene: &SceneSpec, in_preterminal: bool) -> Vec<ParseNode> {
        match item {
            TItem::Word(w) if in_preterminal => vec![ParseNode::leaf(w.as_str())],
            TItem::Word(w) => vec![ParseNode::node(pos_of(w), vec![ParseNode::leaf(w.as_str())])],
            TItem::Slot(s) => Self::slot_words(*s, scene)
                .into_iter()
                .map(|w| {
                    if in_preterminal {
                        ParseNode::Leaf(w)
                    } else {
                        ParseNode::node(Self::tag_of(*s, &w), vec![ParseNode::Leaf(w)])
                    }
                })
                .collect(),
            TItem::Node(label, children) => {
                let pre = POS_TAGS.contains(&label.as_str());
                let kids = children
                    .iter()
                    .flat_map(|c| Self::render_item(c, scene, pre))
                    .collect();
                vec![ParseNode::node(label.as_str(), kids)]
            }
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<Vec<Template>> {
        if self.n_scenes == 0 {
            return Err(Error::Config("n_scenes must be at least 1".into()));
        }
        if self.templates.is_empty() {
            return Err(Error::Config("template set is empty".into()));
        }
        let limits = [
            ("n_categories", self.n_categories, CATEGORIES.len()),
            ("n_attributes", self.n_attributes, ATTRIBUTES.len()),
            ("n_relations", self.n_relations, RELATIONS.len()),
        ];
        for (name, value, max) in limits {
            if value == 0 || value > max {
                return Err(Error::Config(format!("{name} must be in 1..={max}, got {value}")));
            }
        }
        if self.d_r == 0 {
            return Err(Error::Config("d_r must be positive".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config("noise must be a non-negative number".into()));
        }
        self.templates.iter().map(|t| Template::parse(t)).collect()
    }
}

/// Fixed pseudo-random embedding for one scene part; independent of the
/// corpus seed so that corpora generated with different seeds share features.
fn part_embedding(family: u64, id: usize, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(EMBED_SEED ^ (family << 40) ^ id as u64);
    (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

const FAMILY_CATEGORY: u64 = 1;
const FAMILY_ATTRIBUTE: u64 = 2;
const FAMILY_RELATION: u64 = 3;
const FAMILY_ROLE: u64 = 4;

/// Region vectors for a scene: one per object, then one per relation. Each
/// carries a role embedding for its slot, since region order is not visible
/// to the encoder.
pub fn scene_regions(scene: &SceneSpec, d_r: usize, noise: f64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(scene.seed);
    let mut noisy = |mut v: Vec<f64>| {
        for x in &mut v {
            let z: f64 = rng.sample(StandardNormal);
            *x += noise * z;
        }
        v
    };
    let add = |a: Vec<f64>, b: Vec<f64>| a.into_iter().zip(b).map(|(x, y)| x + y).collect::<Vec<_>>();
    let mut out = Vec::with_capacity(scene.objects.len() + scene.relations.len());
    for (i, &(cat, attr)) in scene.objects.iter().enumerate() {
        let v = add(
            add(part_embedding(FAMILY_CATEGORY, cat, d_r), part_embedding(FAMILY_ATTRIBUTE, attr, d_r)),
            part_embedding(FAMILY_ROLE, i, d_r),
        );
        out.push(noisy(v));
    }
    for (j, &(_, rel, _)) in scene.relations.iter().enumerate() {
        let v = add(
            part_embedding(FAMILY_RELATION, rel, d_r),
            part_embedding(FAMILY_ROLE, MAX_OBJECTS + j, d_r),
        );
        out.push(noisy(v));
    }
    out
}

fn sample_scene(rng: &mut ChaCha8Rng, cfg: &SynthConfig, n_obj: usize, n_rel: usize) -> SceneSpec {
    let n_obj = n_obj.max(1);
    let mut cats: Vec<usize> = (0..cfg.n_categories).collect();
    cats.shuffle(rng);
    let objects = (0..n_obj)
        .map(|i| {
            let cat = if i < cats.len() {
                cats[i]
            } else {
                rng.gen_range(0..cfg.n_categories)
            };
            (cat, rng.gen_range(0..cfg.n_attributes))
        })
        .collect();
    let relations = (0..n_rel)
        .map(|j| {
            let subject = 0;
            let object = (j + 1).min(n_obj - 1);
            (subject, rng.gen_range(0..cfg.n_relations), object)
        })
        .collect();
    SceneSpec {
        objects,
        relations,
        seed: rng.gen(),
    }
}

/// Generate `cfg.n_scenes` records. The output is a pure function of
/// `(cfg, seed)`.
pub fn generate_synthetic_corpus(cfg: &SynthConfig, seed: u64) -> Result<Vec<CaptionRecord>> {
    let templates = cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(cfg.n_scenes);
    for idx in 0..cfg.n_scenes {
        let ti = rng.gen_range(0..templates.len());
        let chosen = &templates[ti];
        let scene = sample_scene(&mut rng, cfg, chosen.n_objects, chosen.n_relations);
        let tree = chosen.render(&scene)?;
        let mut refs: Vec<Vec<String>> = Vec::new();
        for t in &templates {
            if t.n_objects == chosen.n_objects && t.n_relations == chosen.n_relations {
                let r = t.render(&scene)?.leaves();
                if !refs.contains(&r) {
                    refs.push(r);
                }
            }
        }
        out.push(CaptionRecord {
            id: format!("syn-{seed}-{idx:05}"),
            tokens: tree.leaves(),
            tree: Some(tree.to_bracketed()),
            regions: scene_regions(&scene, cfg.d_r, cfg.noise),
            refs,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::to_jsonl;

    fn single(template: &str) -> SynthConfig {
        SynthConfig {
            n_scenes: 1,
            n_categories: 1,
            n_attributes: 1,
            n_relations: 1,
            d_r: 4,
            noise: 0.1,
            templates: vec![template.to_string()],
        }
    }

    #[test]
    fn single_np_template() {
        let recs = generate_synthetic_corpus(&single("a ATTR OBJ"), 3).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].tokens, ["a", "red", "cube"]);
        assert_eq!(recs[0].tree.as_deref(), Some("(NP (DT a) (JJ red) (NN cube))"));
        assert_eq!(recs[0].regions.len(), 1);
        assert_eq!(recs[0].regions[0].len(), 4);
    }

    #[test]
    fn same_seed_same_bytes() {
        let cfg = SynthConfig {
            n_scenes: 50,
            ..SynthConfig::default()
        };
        let a = to_jsonl(&generate_synthetic_corpus(&cfg, 11).unwrap()).unwrap();
        let b = to_jsonl(&generate_synthetic_corpus(&cfg, 11).unwrap()).unwrap();
        assert_eq!(a, b);
        let c = to_jsonl(&generate_synthetic_corpus(&cfg, 12).unwrap()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn unknown_placeholder_is_rejected() {
        let err = generate_synthetic_corpus(&single("a COLOR OBJ"), 1).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("COLOR"));
    }

    #[test]
    fn bad_config_values() {
        let mut cfg = single("a ATTR OBJ");
        cfg.templates.clear();
        assert!(generate_synthetic_corpus(&cfg, 1).is_err());
        let mut cfg = single("a ATTR OBJ");
        cfg.n_scenes = 0;
        assert!(generate_synthetic_corpus(&cfg, 1).is_err());
        let mut cfg = single("a ATTR OBJ");
        cfg.n_categories = 99;
        assert!(generate_synthetic_corpus(&cfg, 1).is_err());
    }

    #[test]
    fn default_templates_parse_and_fit() {
        let cfg = SynthConfig {
            n_scenes: 200,
            ..SynthConfig::default()
        };
        let recs = generate_synthetic_corpus(&cfg, 5).unwrap();
        for r in &recs {
            assert!((14..=16).contains(&r.tokens.len()), "{:?}", r.tokens);
            let tree = parse_bracketed(r.tree.as_ref().unwrap()).unwrap();
            assert_eq!(tree.leaves(), r.tokens);
            assert!(r.refs.contains(&r.tokens));
            assert!(r.regions.iter().all(|v| v.len() == cfg.d_r));
        }
    }

    #[test]
    fn relation_words_get_preterminals() {
        let t = Template::parse("(S (NP a OBJ1) (VP (VP REL1) (NP the OBJ2)))").unwrap();
        assert_eq!((t.n_objects, t.n_relations), (2, 1));
        let scene = SceneSpec {
            objects: vec![(0, 0), (1, 0)],
            relations: vec![(0, 0, 1)],
            seed: 0,
        };
        assert_eq!(
            t.render(&scene).unwrap().to_bracketed(),
            "(S (NP (DT a) (NN cube)) (VP (VP (VBG lying) (IN next) (TO to)) (NP (DT the) (NN ball))))"
        );
    }

    #[test]
    fn explicit_preterminals_are_kept() {
        let t = Template::parse("(NP (DT the) (JJ ATTR) (NN OBJ))").unwrap();
        let scene = SceneSpec {
            objects: vec![(1, 1)],
            relations: vec![],
            seed: 0,
        };
        assert_eq!(t.render(&scene).unwrap().to_bracketed(), "(NP (DT the) (JJ blue) (NN ball))");
    }

    #[test]
    fn regions_share_part_embeddings_across_seeds() {
        let scene = |seed| SceneSpec {
            objects: vec![(2, 3)],
            relations: vec![],
            seed,
        };
        let a = scene_regions(&scene(1), 8, 0.0);
        let b = scene_regions(&scene(2), 8, 0.0);
        assert_eq!(a, b);
        let c = scene_regions(&scene(2), 8, 0.5);
        assert_ne!(a, c);
    }
}
