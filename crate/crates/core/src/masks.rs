//! Attention-permission matrices for every training stage.
//!
//! A [`SegmentLayout`] describes which spans of a sequence hold image
//! embeddings, text tokens, or padding. [`build_mask`] turns a layout and a
//! [`MaskKind`] into a boolean matrix where `allow(i, j)` means token `i` may
//! attend to token `j`.
//!
//! Padding is handled the same way for every kind: a pad row attends only to
//! itself (so its softmax stays defined) and no row attends to a pad column.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::MASK_SENTINEL;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmentKind {
    Image,
    Text,
    Pad,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Segment {
    pub kind: SegmentKind,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SegmentLayout {
    segments: Vec<Segment>,
}

impl SegmentLayout {
    pub fn new(segments: Vec<Segment>) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::Layout("layout has no segments".into()));
        }
        if let Some(s) = segments.iter().find(|s| s.len == 0) {
            return Err(Error::Layout(format!("{:?} segment has zero length", s.kind)));
        }
        Ok(SegmentLayout { segments })
    }

    /// `Image image_len, Text text_len` followed by `pad_len` padding.
    pub fn image_prefix(image_len: usize, text_len: usize, pad_len: usize) -> Result<Self> {
        let mut segs = vec![
            Segment {
                kind: SegmentKind::Image,
                len: image_len,
            },
            Segment {
                kind: SegmentKind::Text,
                len: text_len,
            },
        ];
        if pad_len > 0 {
            segs.push(Segment {
                kind: SegmentKind::Pad,
                len: pad_len,
            });
        }
        Self::new(segs)
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn total_len(&self) -> usize {
        self.segments.iter().map(|s| s.len).sum()
    }

    pub fn count(&self, kind: SegmentKind) -> usize {
        self.segments.iter().filter(|s| s.kind == kind).map(|s| s.len).sum()
    }

    /// Per-token `(kind, segment index)`.
    pub fn tokens(&self) -> Vec<(SegmentKind, usize)> {
        self.segments
            .iter()
            .enumerate()
            .flat_map(|(b, s)| std::iter::repeat_n((s.kind, b), s.len))
            .collect()
    }

    fn image_segments(&self) -> usize {
        self.segments.iter().filter(|s| s.kind == SegmentKind::Image).count()
    }
}

impl FromStr for SegmentLayout {
    type Err = Error;

    /// Parses `image:2,text:2,pad:1`.
    fn from_str(s: &str) -> Result<Self> {
        let mut segs = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (kind, len) = part
                .split_once(':')
                .ok_or_else(|| Error::Layout(format!("expected kind:len, got {part:?}")))?;
            let kind = match kind.trim().to_ascii_lowercase().as_str() {
                "image" | "img" => SegmentKind::Image,
                "text" | "txt" => SegmentKind::Text,
                "pad" => SegmentKind::Pad,
                other => return Err(Error::Layout(format!("unknown segment kind {other:?}"))),
            };
            let len = len
                .trim()
                .parse()
                .map_err(|_| Error::Layout(format!("bad segment length in {part:?}")))?;
            segs.push(Segment { kind, len });
        }
        SegmentLayout::new(segs)
    }
}

impl fmt::Display for SegmentLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .segments
            .iter()
            .map(|s| {
                let k = match s.kind {
                    SegmentKind::Image => "image",
                    SegmentKind::Text => "text",
                    SegmentKind::Pad => "pad",
                };
                format!("{k}:{}", s.len)
            })
            .collect();
        write!(f, "{}", parts.join(","))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskKind {
    /// Every token attends every token (stage 0).
    FullBidirectional,
    /// Image block is a clique, text is causal over everything before it,
    /// image never attends text (stages 1-3).
    ImageBidiTextCausal,
    CausalBaseline,
    /// Causal, plus every token may attend every image token.
    InterleavedA,
    /// Within a segment: image bidirectional, text causal. Across segments:
    /// only strictly earlier segments are visible.
    InterleavedB,
}

impl MaskKind {
    pub const ALL: [MaskKind; 5] = [
        MaskKind::FullBidirectional,
        MaskKind::ImageBidiTextCausal,
        MaskKind::CausalBaseline,
        MaskKind::InterleavedA,
        MaskKind::InterleavedB,
    ];

    pub fn is_interleaved(self) -> bool {
        matches!(self, MaskKind::InterleavedA | MaskKind::InterleavedB)
    }

    pub fn name(self) -> &'static str {
        match self {
            MaskKind::FullBidirectional => "full",
            MaskKind::ImageBidiTextCausal => "prefix",
            MaskKind::CausalBaseline => "causal",
            MaskKind::InterleavedA => "interleaved-a",
            MaskKind::InterleavedB => "interleaved-b",
        }
    }
}

impl FromStr for MaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "full" | "full-bidirectional" | "stage0" => MaskKind::FullBidirectional,
            "prefix" | "image-bidi-text-causal" | "stage1" | "stage2" | "stage3" => MaskKind::ImageBidiTextCausal,
            "causal" | "causal-baseline" => MaskKind::CausalBaseline,
            "interleaved-a" | "interleaveda" => MaskKind::InterleavedA,
            "interleaved-b" | "interleavedb" => MaskKind::InterleavedB,
            other => {
                return Err(Error::Input(format!(
                    "unknown mask kind {other:?}; expected one of full, prefix, causal, interleaved-a, interleaved-b"
                )))
            }
        })
    }
}

impl fmt::Display for MaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskMatrix {
    side: usize,
    allow: Vec<bool>,
}

impl MaskMatrix {
    pub fn from_fn(side: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let allow = (0..side * side).map(|k| f(k / side, k % side)).collect();
        MaskMatrix { side, allow }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn allow(&self, i: usize, j: usize) -> bool {
        self.allow[i * self.side + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: bool) {
        self.allow[i * self.side + j] = value;
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.side, |i, j| self.allow(j, i))
    }

    /// Rows as `"1100"` strings.
    pub fn row_strings(&self) -> Vec<String> {
        (0..self.side)
            .map(|i| (0..self.side).map(|j| if self.allow(i, j) { '1' } else { '0' }).collect())
            .collect()
    }

    /// Header row of column indices, then one 0/1 row per token.
    pub fn to_csv(&self) -> String {
        let mut out = (0..self.side).map(|j| j.to_string()).collect::<Vec<_>>().join(",");
        out.push('\n');
        for i in 0..self.side {
            let row: Vec<&str> = (0..self.side).map(|j| if self.allow(i, j) { "1" } else { "0" }).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

fn check_layout_for(layout: &SegmentLayout, kind: MaskKind) -> Result<()> {
    if kind.is_interleaved() {
        return Ok(());
    }
    let images = layout.image_segments();
    if images > 1 {
        return Err(Error::Layout(format!(
            "{kind} mask needs a single image prefix, layout has {images} image segments"
        )));
    }
    if images == 1 && layout.segments[0].kind != SegmentKind::Image {
        return Err(Error::Layout(format!("{kind} mask needs the image segment first")));
    }
    Ok(())
}

pub fn build_mask(layout: &SegmentLayout, kind: MaskKind) -> Result<MaskMatrix> {
    check_layout_for(layout, kind)?;
    let tokens = layout.tokens();
    let img = |j: usize| tokens[j].0 == SegmentKind::Image;
    let txt = |j: usize| tokens[j].0 == SegmentKind::Text;
    let pad = |j: usize| tokens[j].0 == SegmentKind::Pad;
    let block = |j: usize| tokens[j].1;
    Ok(MaskMatrix::from_fn(layout.total_len(), |i, j| {
        if pad(i) {
            return i == j;
        }
        if pad(j) {
            return false;
        }
        match kind {
            MaskKind::FullBidirectional => true,
            MaskKind::ImageBidiTextCausal => (img(i) && img(j)) || (txt(i) && (img(j) || j <= i)),
            MaskKind::CausalBaseline => j <= i,
            MaskKind::InterleavedA => img(j) || j <= i,
            MaskKind::InterleavedB => block(j) < block(i) || (block(j) == block(i) && (img(j) || j <= i)),
        }
    }))
}

/// 0 where allowed, [`MASK_SENTINEL`] where forbidden.
pub fn mask_to_bias(mask: &MaskMatrix) -> Tensor {
    let data = mask.allow.iter().map(|&a| if a { 0.0 } else { MASK_SENTINEL }).collect();
    Tensor::new(vec![mask.side, mask.side], data).expect("square mask")
}

/// Tokens whose information can reach `src` by following attention edges
/// through any number of layers, `src` included.
pub fn reachability(mask: &MaskMatrix, src: usize) -> Result<BTreeSet<usize>> {
    if src >= mask.side {
        return Err(Error::IndexOutOfRange {
            index: src,
            len: mask.side,
        });
    }
    let mut seen = BTreeSet::from([src]);
    let mut queue = VecDeque::from([src]);
    while let Some(i) = queue.pop_front() {
        for j in 0..mask.side {
            if mask.allow(i, j) && seen.insert(j) {
                queue.push_back(j);
            }
        }
    }
    Ok(seen)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum MaskViolation {
    /// The layout itself is not valid for the requested kind.
    Layout(String),
    SizeMismatch { expected: usize, found: usize },
    Entry { row: usize, col: usize, expected: bool },
}

impl fmt::Display for MaskViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MaskViolation::Layout(msg) => write!(f, "layout: {msg}"),
            MaskViolation::SizeMismatch { expected, found } => {
                write!(f, "mask side {found}, layout needs {expected}")
            }
            MaskViolation::Entry { row, col, expected } => {
                write!(f, "entry ({row},{col}) should be {}", u8::from(*expected))
            }
        }
    }
}

/// Re-derives the rule for `kind` and reports the first mismatching entry in
/// row-major order.
pub fn validate_mask(mask: &MaskMatrix, layout: &SegmentLayout, kind: MaskKind) -> std::result::Result<(), MaskViolation> {
    let expected = build_mask(layout, kind).map_err(|e| MaskViolation::Layout(e.to_string()))?;
    if expected.side != mask.side {
        return Err(MaskViolation::SizeMismatch {
            expected: expected.side,
            found: mask.side,
        });
    }
    for i in 0..mask.side {
        for j in 0..mask.side {
            if mask.allow(i, j) != expected.allow(i, j) {
                return Err(MaskViolation::Entry {
                    row: i,
                    col: j,
                    expected: expected.allow(i, j),
                });
            }
        }
    }
    Ok(())
}

/// Bias tensors keyed by `(layout, kind)`, shared by every layer and head.
#[derive(Debug, Default)]
pub struct MaskCache {
    entries: HashMap<(SegmentLayout, MaskKind), Rc<Tensor>>,
}

impl MaskCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bias(&mut self, layout: &SegmentLayout, kind: MaskKind) -> Result<Rc<Tensor>> {
        if let Some(t) = self.entries.get(&(layout.clone(), kind)) {
            return Ok(Rc::clone(t));
        }
        let t = Rc::new(mask_to_bias(&build_mask(layout, kind)?));
        self.entries.insert((layout.clone(), kind), Rc::clone(&t));
        Ok(t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn layout(s: &str) -> SegmentLayout {
        s.parse().unwrap()
    }

    #[test]
    fn stage1_golden() {
        let m = build_mask(&layout("image:2,text:2"), MaskKind::ImageBidiTextCausal).unwrap();
        assert_eq!(m.row_strings(), ["1100", "1100", "1110", "1111"]);
    }

    #[test]
    fn full_is_all_true() {
        let m = build_mask(&layout("image:2,text:2"), MaskKind::FullBidirectional).unwrap();
        assert!(m.row_strings().iter().all(|r| r == "1111"));
    }

    #[test]
    fn causal_is_lower_triangular() {
        let m = build_mask(&layout("image:2,text:2"), MaskKind::CausalBaseline).unwrap();
        assert_eq!(m.row_strings(), ["1000", "1100", "1110", "1111"]);
    }

    #[test]
    fn interleaved_a_enumerated() {
        // allow[i][j] = img(j) || j <= i over tokens I T I T
        let m = build_mask(&layout("image:1,text:1,image:1,text:1"), MaskKind::InterleavedA).unwrap();
        assert_eq!(m.row_strings(), ["1010", "1110", "1110", "1111"]);
    }

    #[test]
    fn interleaved_b_blocks() {
        let m = build_mask(&layout("image:2,text:1,image:2"), MaskKind::InterleavedB).unwrap();
        assert_eq!(m.row_strings(), ["11000", "11000", "11100", "11111", "11111"]);
    }

    #[test]
    fn pads_attend_only_themselves() {
        let m = build_mask(&layout("image:1,text:1,pad:2"), MaskKind::FullBidirectional).unwrap();
        assert_eq!(m.row_strings(), ["1100", "1100", "0010", "0001"]);
    }

    #[test]
    fn layout_errors() {
        let inter = layout("image:1,text:1,image:1,text:1");
        assert!(build_mask(&inter, MaskKind::ImageBidiTextCausal).is_err());
        assert!(build_mask(&layout("text:2,image:2"), MaskKind::FullBidirectional).is_err());
        assert!(SegmentLayout::new(vec![]).is_err());
        assert!("image:0".parse::<SegmentLayout>().is_err());
        assert!("video:2".parse::<SegmentLayout>().is_err());
    }

    #[test]
    fn bias_mapping() {
        let all = MaskMatrix::from_fn(2, |_, _| true);
        assert_eq!(mask_to_bias(&all).data(), &[0.0; 4]);
        let id = MaskMatrix::from_fn(2, |i, j| i == j);
        assert_eq!(mask_to_bias(&id).data(), &[0.0, MASK_SENTINEL, MASK_SENTINEL, 0.0]);
        let m = build_mask(&layout("image:2,text:2"), MaskKind::ImageBidiTextCausal).unwrap();
        let b = mask_to_bias(&m);
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(b.get2(i, j) == 0.0, m.allow(i, j));
            }
        }
    }

    #[test]
    fn reachability_examples() {
        let l = layout("image:2,text:2");
        let prefix = build_mask(&l, MaskKind::ImageBidiTextCausal).unwrap();
        assert_eq!(reachability(&prefix, 0).unwrap(), BTreeSet::from([0, 1]));
        assert_eq!(reachability(&prefix, 3).unwrap(), BTreeSet::from([0, 1, 2, 3]));
        let causal = build_mask(&l, MaskKind::CausalBaseline).unwrap();
        assert_eq!(reachability(&causal, 0).unwrap(), BTreeSet::from([0]));
        assert!(reachability(&causal, 4).is_err());
    }

    #[test]
    fn validate_examples() {
        let l = layout("image:2,text:2");
        let mut m = build_mask(&l, MaskKind::ImageBidiTextCausal).unwrap();
        assert_eq!(validate_mask(&m, &l, MaskKind::ImageBidiTextCausal), Ok(()));
        m.set(0, 2, true);
        assert_eq!(
            validate_mask(&m, &l, MaskKind::ImageBidiTextCausal),
            Err(MaskViolation::Entry {
                row: 0,
                col: 2,
                expected: false
            })
        );
        let causal = build_mask(&l, MaskKind::CausalBaseline).unwrap();
        assert!(matches!(
            validate_mask(&causal.transpose(), &l, MaskKind::CausalBaseline),
            Err(MaskViolation::Entry { .. })
        ));
        let other = build_mask(&layout("image:2,text:3"), MaskKind::CausalBaseline).unwrap();
        assert!(matches!(
            validate_mask(&other, &l, MaskKind::CausalBaseline),
            Err(MaskViolation::SizeMismatch { .. })
        ));
    }

    #[test]
    fn cache_shares_bias() {
        let mut cache = MaskCache::new();
        let l = layout("image:2,text:2");
        let a = cache.bias(&l, MaskKind::ImageBidiTextCausal).unwrap();
        let b = cache.bias(&l, MaskKind::ImageBidiTextCausal).unwrap();
        assert!(Rc::ptr_eq(&a, &b));
        cache.bias(&l, MaskKind::CausalBaseline).unwrap();
        assert_eq!(cache.len(), 2);
    }

    fn prefix_layout() -> impl Strategy<Value = SegmentLayout> {
        (1usize..6, 1usize..7, 0usize..3).prop_map(|(i, t, p)| SegmentLayout::image_prefix(i, t, p).unwrap())
    }

    fn interleaved_layout() -> impl Strategy<Value = SegmentLayout> {
        prop::collection::vec((any::<bool>(), 1usize..4), 1..5).prop_map(|segs| {
            SegmentLayout::new(
                segs.into_iter()
                    .map(|(img, len)| Segment {
                        kind: if img { SegmentKind::Image } else { SegmentKind::Text },
                        len,
                    })
                    .collect(),
            )
            .unwrap()
        })
    }

    proptest! {
        #[test]
        fn prefix_text_block_matches_causal(l in prefix_layout()) {
            let p = build_mask(&l, MaskKind::ImageBidiTextCausal).unwrap();
            let c = build_mask(&l, MaskKind::CausalBaseline).unwrap();
            let toks = l.tokens();
            for i in 0..l.total_len() {
                for j in 0..l.total_len() {
                    let (ki, kj) = (toks[i].0, toks[j].0);
                    if ki == SegmentKind::Text && kj == SegmentKind::Text {
                        prop_assert_eq!(p.allow(i, j), c.allow(i, j));
                    }
                    if ki == SegmentKind::Image && kj == SegmentKind::Image {
                        prop_assert!(p.allow(i, j));
                    }
                    if ki == SegmentKind::Image && kj == SegmentKind::Text {
                        prop_assert!(!p.allow(i, j));
                    }
                }
            }
        }

        #[test]
        fn no_future_text_except_full(l in interleaved_layout()) {
            let toks = l.tokens();
            for kind in [MaskKind::InterleavedA, MaskKind::InterleavedB] {
                let m = build_mask(&l, kind).unwrap();
                for i in 0..l.total_len() {
                    for j in i + 1..l.total_len() {
                        if toks[j].0 == SegmentKind::Text {
                            prop_assert!(!m.allow(i, j));
                        }
                        if kind == MaskKind::InterleavedA && toks[j].0 == SegmentKind::Image {
                            prop_assert!(m.allow(i, j));
                        }
                        if kind == MaskKind::InterleavedB && toks[j].1 > toks[i].1 {
                            prop_assert!(!m.allow(i, j));
                        }
                    }
                }
                prop_assert_eq!(validate_mask(&m, &l, kind), Ok(()));
            }
        }

        #[test]
        fn every_row_has_an_allowed_entry(l in prefix_layout(), k in 0usize..3) {
            let kind = MaskKind::ALL[k];
            let m = build_mask(&l, kind).unwrap();
            for i in 0..m.side() {
                prop_assert!((0..m.side()).any(|j| m.allow(i, j)));
            }
        }
    }
}
