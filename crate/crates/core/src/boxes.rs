//! Constituency trees and the typed phrase boxes cut from them.
//!
//! A caption is bracketed as a Penn-style tree, e.g.
//! `(S (NP (DT a) (JJ cute) (NN dog)) (VP (VP (VBG lying) (IN on)) (NP (DT the) (NN floor))))`,
//! and cut into a [`BoundingSequence`]: an ordered list of `(type, length)` slots
//! whose lengths add up to the caption length. The cut depth is a [`Level`];
//! deeper levels give finer boxes and [`Level::Finest`] keeps cutting until no
//! NP/VP/CP constituent remains below a node.
//!
//! Treebank labels map onto box types as follows (see [`BoxType::from_label`]):
//!
//! | label                     | box   |
//! |---------------------------|-------|
//! | `NP`, `NP-SBJ`, `NPS`, …  | NP    |
//! | `VP`, `VP-…`              | VP    |
//! | `CC`, `CONJP`, `CP`       | CP    |
//! | anything else, bare words | OTHER |
//!
//! Adjacent OTHER pieces are merged into one box only when they are siblings
//! emitted by the same parent, which keeps every level a refinement of the
//! coarser ones.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper bound on the number of tokens in a single box.
pub const DEFAULT_MAX_BOX_LEN: usize = 16;
/// Upper bound on the number of boxes in a sequence.
pub const DEFAULT_MAX_BOXES: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseNode {
    Leaf(String),
    Node { label: String, children: Vec<ParseNode> },
}

impl ParseNode {
    pub fn leaf(token: impl Into<String>) -> Self {
        ParseNode::Leaf(token.into())
    }

    pub fn node(label: impl Into<String>, children: Vec<ParseNode>) -> Self {
        ParseNode::Node {
            label: label.into(),
            children,
        }
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self, ParseNode::Leaf(_))
    }

    /// In-order leaf tokens.
    pub fn leaves(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.collect_leaves(&mut out);
        out
    }

    fn collect_leaves(&self, out: &mut Vec<String>) {
        match self {
            ParseNode::Leaf(t) => out.push(t.clone()),
            ParseNode::Node { children, .. } => {
                for c in children {
                    c.collect_leaves(out);
                }
            }
        }
    }

    /// Same tree with its leaves replaced, in order, by `words`. `None` when
    /// the word count differs from the leaf count.
    pub fn with_leaves(&self, words: &[String]) -> Option<ParseNode> {
        if words.len() != self.leaf_count() {
            return None;
        }
        let mut it = words.iter();
        Some(self.replace_leaves(&mut it))
    }

    fn replace_leaves<'a>(&self, words: &mut impl Iterator<Item = &'a String>) -> ParseNode {
        match self {
            ParseNode::Leaf(_) => ParseNode::Leaf(words.next().expect("leaf count checked").clone()),
            ParseNode::Node { label, children } => ParseNode::Node {
                label: label.clone(),
                children: children.iter().map(|c| c.replace_leaves(words)).collect(),
            },
        }
    }

    pub fn leaf_count(&self) -> usize {
        match self {
            ParseNode::Leaf(_) => 1,
            ParseNode::Node { children, .. } => children.iter().map(|c| c.leaf_count()).sum(),
        }
    }

    fn box_type(&self) -> BoxType {
        match self {
            ParseNode::Leaf(_) => BoxType::Other,
            ParseNode::Node { label, .. } => BoxType::from_label(label),
        }
    }

    fn children(&self) -> &[ParseNode] {
        match self {
            ParseNode::Leaf(_) => &[],
            ParseNode::Node { children, .. } => children,
        }
    }

    fn has_phrase_child(&self) -> bool {
        self.children().iter().any(|c| c.box_type().is_phrase())
    }

    fn has_phrase_below(&self) -> bool {
        self.children()
            .iter()
            .any(|c| c.box_type().is_phrase() || c.has_phrase_below())
    }

    /// Render back to bracket notation.
    pub fn to_bracketed(&self) -> String {
        let mut s = String::new();
        self.write_bracketed(&mut s);
        s
    }

    fn write_bracketed(&self, out: &mut String) {
        match self {
            ParseNode::Leaf(t) => out.push_str(t),
            ParseNode::Node { label, children } => {
                out.push('(');
                out.push_str(label);
                for c in children {
                    out.push(' ');
                    c.write_bracketed(out);
                }
                out.push(')');
            }
        }
    }
}

impl fmt::Display for ParseNode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_bracketed())
    }
}

/// Parse a Penn-style bracketed tree.
///
/// Bare tokens are allowed directly under a phrase (`(NP a cute dog)`), and an
/// unlabeled outer wrapper with exactly one child (`( (S ...) )`) is unwrapped.
pub fn parse_bracketed(text: &str) -> Result<ParseNode> {
    let chars: Vec<char> = text.chars().collect();
    let mut p = BracketParser { chars: &chars, pos: 0 };
    p.skip_ws();
    if p.pos >= chars.len() {
        return Err(p.error("empty input"));
    }
    if chars[p.pos] != '(' {
        return Err(p.error("expected '('"));
    }
    let tree = p.parse_node()?;
    p.skip_ws();
    if p.pos < chars.len() {
        return Err(p.error("trailing characters after tree"));
    }
    Ok(tree)
}

struct BracketParser<'a> {
    chars: &'a [char],
    pos: usize,
}

impl BracketParser<'_> {
    fn error(&self, message: &str) -> Error {
        Error::Parse {
            offset: self.pos,
            message: message.to_string(),
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.chars.len() && self.chars[self.pos].is_whitespace() {
            self.pos += 1;
        }
    }

    fn token(&mut self) -> String {
        let start = self.pos;
        while self.pos < self.chars.len() {
            let c = self.chars[self.pos];
            if c.is_whitespace() || c == '(' || c == ')' {
                break;
            }
            self.pos += 1;
        }
        self.chars[start..self.pos].iter().collect()
    }

    // Called with `pos` on an opening parenthesis.
    fn parse_node(&mut self) -> Result<ParseNode> {
        let open = self.pos;
        self.pos += 1;
        self.skip_ws();
        if self.pos >= self.chars.len() {
            return Err(self.error("unbalanced parentheses: unexpected end of input"));
        }
        let label = match self.chars[self.pos] {
            '(' => None,
            ')' => {
                return Err(Error::Parse {
                    offset: open,
                    message: "empty constituent".into(),
                })
            }
            _ => Some(self.token()),
        };
        let mut children = Vec::new();
        loop {
            self.skip_ws();
            if self.pos >= self.chars.len() {
                return Err(self.error("unbalanced parentheses: unexpected end of input"));
            }
            match self.chars[self.pos] {
                ')' => {
                    self.pos += 1;
                    break;
                }
                '(' => children.push(self.parse_node()?),
                _ => children.push(ParseNode::Leaf(self.token())),
            }
        }
        match label {
            Some(label) => {
                if children.is_empty() {
                    return Err(Error::Parse {
                        offset: open,
                        message: format!("empty constituent ({label})"),
                    });
                }
                Ok(ParseNode::Node { label, children })
            }
            None => {
                if children.len() == 1 {
                    Ok(children.pop().expect("one child"))
                } else {
                    Err(Error::Parse {
                        offset: open,
                        message: "unlabeled constituent must wrap exactly one tree".into(),
                    })
                }
            }
        }
    }
}

/// Box type of a phrase slot. `Eob` only terminates bounding; it never sits
/// inside a [`BoundingSequence`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BoxType {
    #[serde(rename = "NP")]
    Np,
    #[serde(rename = "VP")]
    Vp,
    #[serde(rename = "CP")]
    Cp,
    #[serde(rename = "OTHER")]
    Other,
    #[serde(rename = "EOB")]
    Eob,
}

impl BoxType {
    pub const COUNT: usize = 5;
    pub const ALL: [BoxType; 5] = [
        BoxType::Np,
        BoxType::Vp,
        BoxType::Cp,
        BoxType::Other,
        BoxType::Eob,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<BoxType> {
        BoxType::ALL.get(i).copied()
    }

    /// Treebank label normalization.
    pub fn from_label(label: &str) -> BoxType {
        if label.starts_with("NP") {
            BoxType::Np
        } else if label.starts_with("VP") {
            BoxType::Vp
        } else if matches!(label, "CC" | "CONJP" | "CP") {
            BoxType::Cp
        } else {
            BoxType::Other
        }
    }

    pub fn is_phrase(self) -> bool {
        matches!(self, BoxType::Np | BoxType::Vp | BoxType::Cp)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BoxType::Np => "NP",
            BoxType::Vp => "VP",
            BoxType::Cp => "CP",
            BoxType::Other => "OTHER",
            BoxType::Eob => "EOB",
        }
    }
}

impl fmt::Display for BoxType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BoxType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "NP" => Ok(BoxType::Np),
            "VP" => Ok(BoxType::Vp),
            "CP" => Ok(BoxType::Cp),
            "OTHER" => Ok(BoxType::Other),
            "EOB" => Ok(BoxType::Eob),
            _ => Err(Error::Data(format!("unknown box type {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoxSpec {
    #[serde(rename = "type")]
    pub ty: BoxType,
    pub len: usize,
}

impl BoxSpec {
    pub fn new(ty: BoxType, len: usize) -> Self {
        BoxSpec { ty, len }
    }
}

impl fmt::Display for BoxSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.ty, self.len)
    }
}

/// Ordered boxes `b_1..b_N` covering a caption.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BoundingSequence {
    boxes: Vec<BoxSpec>,
}

impl BoundingSequence {
    /// Validates that no box is EOB or empty. An empty sequence is allowed so
    /// that callers can build one incrementally.
    pub fn new(boxes: Vec<BoxSpec>) -> Result<Self> {
        for b in &boxes {
            if b.ty == BoxType::Eob {
                return Err(Error::Data("EOB cannot appear inside a bounding sequence".into()));
            }
            if b.len == 0 {
                return Err(Error::Data(format!("box {b} has zero length")));
            }
        }
        Ok(BoundingSequence { boxes })
    }

    pub fn boxes(&self) -> &[BoxSpec] {
        &self.boxes
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Total token count `Σ l_i`.
    pub fn total_len(&self) -> usize {
        self.boxes.iter().map(|b| b.len).sum()
    }

    /// Check the size limits a model imposes.
    pub fn check_limits(&self, max_len: usize, max_box_len: usize, max_boxes: usize) -> Result<()> {
        if self.boxes.is_empty() {
            return Err(Error::Data("bounding sequence is empty".into()));
        }
        if self.boxes.len() > max_boxes {
            return Err(Error::Data(format!(
                "{} boxes exceed the limit of {max_boxes}",
                self.boxes.len()
            )));
        }
        if let Some(b) = self.boxes.iter().find(|b| b.len > max_box_len) {
            return Err(Error::Data(format!("box {b} exceeds max box length {max_box_len}")));
        }
        if self.total_len() > max_len {
            return Err(Error::Data(format!(
                "boxes cover {} tokens, more than max_len {max_len}",
                self.total_len()
            )));
        }
        Ok(())
    }
}

impl fmt::Display for BoundingSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, b) in self.boxes.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{b}")?;
        }
        Ok(())
    }
}

/// Parses `"NP:3,VP:2,NP:2"`.
impl FromStr for BoundingSequence {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut boxes = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (ty, len) = part
                .split_once(':')
                .ok_or_else(|| Error::Data(format!("box {part:?} is not TYPE:LEN")))?;
            let len: usize = len
                .trim()
                .parse()
                .map_err(|_| Error::Data(format!("box {part:?} has a non-numeric length")))?;
            boxes.push(BoxSpec::new(ty.trim().parse()?, len));
        }
        BoundingSequence::new(boxes)
    }
}

/// Split depth for [`extract_boxes`]. Depth counts the root's children as 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    Depth(usize),
    Finest,
}

impl Level {
    /// `-1` is the finest level; any `k >= 1` is a depth.
    pub fn from_k(k: i64) -> Result<Level> {
        match k {
            -1 => Ok(Level::Finest),
            k if k >= 1 => Ok(Level::Depth(k as usize)),
            _ => Err(Error::Config(format!("level must be -1 or >= 1, got {k}"))),
        }
    }

    pub fn k(self) -> i64 {
        match self {
            Level::Depth(k) => k as i64,
            Level::Finest => -1,
        }
    }
}

/// One emitted box with its tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub ty: BoxType,
    pub tokens: Vec<String>,
}

struct Piece {
    ty: BoxType,
    tokens: Vec<String>,
    // Siblings emitted whole by the same parent share a group.
    group: usize,
}

/// Cut `tree` at `level` into typed boxes. Returns the sequence together with
/// the token span of every box; the spans concatenate to the leaf sequence.
pub fn extract_boxes(tree: &ParseNode, level: Level) -> Result<(BoundingSequence, Vec<Vec<String>>)> {
    let segments = extract_segments(tree, level)?;
    let boxes = segments
        .iter()
        .map(|s| BoxSpec::new(s.ty, s.tokens.len()))
        .collect();
    let spans = segments.into_iter().map(|s| s.tokens).collect();
    Ok((BoundingSequence::new(boxes)?, spans))
}

pub fn extract_segments(tree: &ParseNode, level: Level) -> Result<Vec<Segment>> {
    if tree.leaf_count() == 0 {
        return Err(Error::Data("tree has no leaves".into()));
    }
    let mut pieces = Vec::new();
    let mut next_group = 1;
    visit(tree, 0, level, 0, &mut next_group, &mut pieces);

    let mut out: Vec<Segment> = Vec::with_capacity(pieces.len());
    let mut last_group = None;
    for p in pieces {
        if p.tokens.is_empty() {
            continue;
        }
        match out.last_mut() {
            Some(prev)
                if prev.ty == BoxType::Other
                    && p.ty == BoxType::Other
                    && last_group == Some(p.group) =>
            {
                prev.tokens.extend(p.tokens);
            }
            _ => {
                last_group = Some(p.group);
                out.push(Segment {
                    ty: p.ty,
                    tokens: p.tokens,
                });
            }
        }
    }
    Ok(out)
}

fn emit_whole(node: &ParseNode, depth: usize, level: Level) -> bool {
    match node {
        ParseNode::Leaf(_) => true,
        ParseNode::Node { .. } => match level {
            Level::Finest => !node.has_phrase_below(),
            Level::Depth(k) => depth >= k || !node.has_phrase_child(),
        },
    }
}

fn visit(
    node: &ParseNode,
    depth: usize,
    level: Level,
    group: usize,
    next_group: &mut usize,
    out: &mut Vec<Piece>,
) {
    if emit_whole(node, depth, level) {
        out.push(Piece {
            ty: node.box_type(),
            tokens: node.leaves(),
            group,
        });
        return;
    }
    let mine = *next_group;
    *next_group += 1;
    for child in node.children() {
        visit(child, depth + 1, level, mine, next_group, out);
    }
}

/// Per-token tag produced by expanding a bounding sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenTag {
    pub ty: BoxType,
    pub box_index: usize,
    pub within: usize,
}

/// Repeat each box's type `l_i` times, keeping the box index and the position
/// inside the box.
pub fn expand_bounding(b: &BoundingSequence) -> Vec<TokenTag> {
    b.boxes()
        .iter()
        .enumerate()
        .flat_map(|(i, bx)| {
            (0..bx.len).map(move |w| TokenTag {
                ty: bx.ty,
                box_index: i,
                within: w,
            })
        })
        .collect()
}

/// Inverse of [`expand_bounding`]: group runs of equal box index.
pub fn regroup(tags: &[TokenTag]) -> Result<BoundingSequence> {
    let mut boxes: Vec<BoxSpec> = Vec::new();
    let mut current: Option<usize> = None;
    for t in tags {
        if current == Some(t.box_index) {
            boxes.last_mut().expect("open box").len += 1;
        } else {
            current = Some(t.box_index);
            boxes.push(BoxSpec::new(t.ty, 1));
        }
    }
    BoundingSequence::new(boxes)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct BoxStats {
    /// Number of boxes per caption.
    pub count_hist: BTreeMap<usize, usize>,
    /// Box lengths.
    pub len_hist: BTreeMap<usize, usize>,
    pub type_freq: BTreeMap<BoxType, usize>,
}

pub fn box_statistics<'a>(sequences: impl IntoIterator<Item = &'a BoundingSequence>) -> BoxStats {
    let mut stats = BoxStats::default();
    for seq in sequences {
        *stats.count_hist.entry(seq.len()).or_default() += 1;
        for b in seq.boxes() {
            *stats.len_hist.entry(b.len).or_default() += 1;
            *stats.type_freq.entry(b.ty).or_default() += 1;
        }
    }
    stats
}
