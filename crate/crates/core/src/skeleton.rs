//! The six *cogn* skeletons: which utterances may influence which.
//!
//! Builders follow the published loop bounds literally, including the
//! outer loops that start at the second utterance (variants I–IV leave the
//! first utterance without incoming edges, and variant I omits `(1, 2)`).
//! `inclusive_bounds` starts those loops at the first utterance instead.
//!
//! Edge endpoints are 1-based utterance positions; masks and matrices are
//! 0-based.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UtteranceMeta {
    /// 1-based position.
    pub index: usize,
    pub speaker: String,
    pub emotion: Option<String>,
}

impl UtteranceMeta {
    pub fn is_emotional(&self) -> bool {
        self.emotion.is_some()
    }
}

/// A conversation with speaker turns, emotion labels and emotion-cause
/// pairs `(t, i)`: utterance `i` causes the emotion of utterance `t`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "ConversationFile", into = "ConversationFile")]
pub struct Conversation {
    utterances: Vec<UtteranceMeta>,
    ecp: Vec<(usize, usize)>,
}

/// On-disk form: `{"speakers": [...], "emotions": [...], "ecp": [[t, i], ...]}`.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConversationFile {
    speakers: Vec<String>,
    #[serde(default)]
    emotions: Option<Vec<Option<String>>>,
    #[serde(default)]
    ecp: Vec<(usize, usize)>,
}

impl TryFrom<ConversationFile> for Conversation {
    type Error = Error;

    fn try_from(f: ConversationFile) -> Result<Self> {
        let emotions = f.emotions.unwrap_or_else(|| vec![None; f.speakers.len()]);
        if emotions.len() != f.speakers.len() {
            return Err(Error::Validation(format!(
                "{} emotions for {} speakers",
                emotions.len(),
                f.speakers.len()
            )));
        }
        Conversation::new(f.speakers, emotions, f.ecp)
    }
}

impl From<Conversation> for ConversationFile {
    fn from(c: Conversation) -> Self {
        ConversationFile {
            speakers: c.utterances.iter().map(|u| u.speaker.clone()).collect(),
            emotions: Some(c.utterances.iter().map(|u| u.emotion.clone()).collect()),
            ecp: c.ecp,
        }
    }
}

impl Conversation {
    pub fn new(
        speakers: Vec<String>,
        emotions: Vec<Option<String>>,
        ecp: Vec<(usize, usize)>,
    ) -> Result<Self> {
        let n = speakers.len();
        if n == 0 {
            return Err(Error::Validation(
                "a conversation needs at least one utterance".into(),
            ));
        }
        if emotions.len() != n {
            return Err(Error::Validation(
                "emotion labels must match utterance count".into(),
            ));
        }
        for &(t, i) in &ecp {
            if !(1 <= i && i <= t && t <= n) {
                return Err(Error::Validation(format!(
                    "emotion-cause pair ({t}, {i}) must satisfy 1 <= i <= t <= {n}"
                )));
            }
        }
        let utterances = speakers
            .into_iter()
            .zip(emotions)
            .enumerate()
            .map(|(k, (speaker, emotion))| UtteranceMeta {
                index: k + 1,
                speaker,
                emotion,
            })
            .collect();
        Ok(Conversation { utterances, ecp })
    }

    /// Unlabeled conversation from speaker ids alone.
    pub fn from_speakers<S: Into<String>>(speakers: impl IntoIterator<Item = S>) -> Result<Self> {
        let speakers: Vec<String> = speakers.into_iter().map(Into::into).collect();
        let n = speakers.len();
        Conversation::new(speakers, vec![None; n], Vec::new())
    }

    /// Two speakers taking turns, `A B A B ...`.
    pub fn alternating(n: usize) -> Result<Self> {
        Conversation::from_speakers((0..n).map(|k| if k % 2 == 0 { "A" } else { "B" }))
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn utterances(&self) -> &[UtteranceMeta] {
        &self.utterances
    }

    pub fn ecp(&self) -> &[(usize, usize)] {
        &self.ecp
    }

    /// Speaker of the 1-based utterance `index`.
    pub fn speaker(&self, index: usize) -> &str {
        &self.utterances[index - 1].speaker
    }

    pub fn is_emotional(&self, index: usize) -> bool {
        self.utterances[index - 1].is_emotional()
    }

    pub fn same_speaker(&self, a: usize, b: usize) -> bool {
        self.speaker(a) == self.speaker(b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SkeletonVariant {
    I,
    II,
    III,
    IV,
    V,
    VI,
}

impl SkeletonVariant {
    pub const ALL: [SkeletonVariant; 6] = [
        SkeletonVariant::I,
        SkeletonVariant::II,
        SkeletonVariant::III,
        SkeletonVariant::IV,
        SkeletonVariant::V,
        SkeletonVariant::VI,
    ];

    pub fn needs_k(self) -> bool {
        matches!(self, SkeletonVariant::IV | SkeletonVariant::VI)
    }

    /// Whether edges carry a same-speaker type.
    pub fn is_typed(self) -> bool {
        !matches!(self, SkeletonVariant::I | SkeletonVariant::II)
    }

    /// Variants whose edges all point from earlier to later utterances.
    pub fn is_predecessor_only(self) -> bool {
        matches!(
            self,
            SkeletonVariant::I | SkeletonVariant::V | SkeletonVariant::VI
        )
    }
}

impl fmt::Display for SkeletonVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for SkeletonVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SkeletonVariant::ALL
            .into_iter()
            .find(|v| v.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::Validation(format!("unknown skeleton variant {s:?} (expected I..VI)"))
            })
    }
}

/// Directed edge `source → target`; `same_speaker` is `None` for untyped variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SkeletonEdge {
    pub source: usize,
    pub target: usize,
    pub same_speaker: Option<bool>,
}

impl Serialize for SkeletonEdge {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self.same_speaker {
            Some(m) => (self.source, self.target, m as u8).serialize(s),
            None => (self.source, self.target).serialize(s),
        }
    }
}

impl<'de> Deserialize<'de> for SkeletonEdge {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw: Vec<usize> = Vec::deserialize(d)?;
        match *raw.as_slice() {
            [source, target] => Ok(SkeletonEdge {
                source,
                target,
                same_speaker: None,
            }),
            [source, target, m @ (0 | 1)] => Ok(SkeletonEdge {
                source,
                target,
                same_speaker: Some(m == 1),
            }),
            _ => Err(serde::de::Error::custom(
                "edge must be [i, j] or [i, j, m] with m in {0, 1}",
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CognSkeleton {
    pub variant: SkeletonVariant,
    pub n: usize,
    pub k: Option<usize>,
    pub edges: BTreeSet<SkeletonEdge>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BuildOptions {
    /// Start the outer loops of variants I–IV at the first utterance.
    pub inclusive_bounds: bool,
}

/// Builds the skeleton of `variant` over `conversation`.
pub fn build_skeleton(
    variant: SkeletonVariant,
    conversation: &Conversation,
    k: Option<usize>,
) -> Result<CognSkeleton> {
    build_skeleton_with(variant, conversation, k, BuildOptions::default())
}

pub fn build_skeleton_with(
    variant: SkeletonVariant,
    conversation: &Conversation,
    k: Option<usize>,
    options: BuildOptions,
) -> Result<CognSkeleton> {
    if variant.needs_k() && k.is_none() {
        return Err(Error::Validation(format!("variant {variant} requires k")));
    }
    if k == Some(0) {
        return Err(Error::Validation("k must be >= 1".into()));
    }
    let n = conversation.len();
    let first = if options.inclusive_bounds { 1 } else { 2 };
    let mut edges = BTreeSet::new();
    let typed = |j: usize, i: usize| SkeletonEdge {
        source: j,
        target: i,
        same_speaker: Some(conversation.same_speaker(j, i)),
    };
    match variant {
        SkeletonVariant::I => {
            for i in first..n {
                edges.insert(SkeletonEdge {
                    source: i,
                    target: i + 1,
                    same_speaker: None,
                });
            }
        }
        SkeletonVariant::II => {
            for i in first..=n {
                for j in first..=n {
                    if i != j {
                        edges.insert(SkeletonEdge {
                            source: j,
                            target: i,
                            same_speaker: None,
                        });
                    }
                }
            }
        }
        SkeletonVariant::III => {
            for i in first..=n {
                for j in first..=n {
                    if i != j {
                        edges.insert(typed(j, i));
                    }
                }
            }
        }
        SkeletonVariant::IV => {
            let k = k.expect("checked above");
            for i in first..=n {
                for j in first..=n {
                    let gap = i.abs_diff(j);
                    if 0 < gap && gap < k {
                        edges.insert(typed(j, i));
                    }
                }
            }
        }
        SkeletonVariant::V => {
            for i in 2..=n {
                edges.insert(typed(i - 1, i));
            }
        }
        SkeletonVariant::VI => {
            let k = k.expect("checked above");
            for i in 2..=n {
                let mut same = 0;
                let mut gamma = i - 1;
                while gamma > 0 && same < k {
                    let edge = typed(gamma, i);
                    if edge.same_speaker == Some(true) {
                        same += 1;
                    }
                    edges.insert(edge);
                    gamma -= 1;
                }
            }
        }
    }
    Ok(CognSkeleton {
        variant,
        n,
        k,
        edges,
    })
}

/// Cell of the influence matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdjacencyCell {
    None,
    Untyped,
    Typed(bool),
}

/// `cells[i][j]` describes the edge `j → i`: row `i` lists the
/// influencers of utterance `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdjacencyMatrix {
    pub n: usize,
    pub cells: Vec<Vec<AdjacencyCell>>,
}

impl AdjacencyMatrix {
    /// CSV with one row per influenced utterance; cells are empty (no edge),
    /// `*` (untyped edge), or the edge type `0`/`1`.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in &self.cells {
            let line: Vec<&str> = row
                .iter()
                .map(|c| match c {
                    AdjacencyCell::None => "",
                    AdjacencyCell::Untyped => "*",
                    AdjacencyCell::Typed(false) => "0",
                    AdjacencyCell::Typed(true) => "1",
                })
                .collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }
}

impl CognSkeleton {
    pub fn adjacency_matrix(&self) -> AdjacencyMatrix {
        let mut cells = vec![vec![AdjacencyCell::None; self.n]; self.n];
        for e in &self.edges {
            cells[e.target - 1][e.source - 1] = match e.same_speaker {
                Some(m) => AdjacencyCell::Typed(m),
                None => AdjacencyCell::Untyped,
            };
        }
        AdjacencyMatrix { n: self.n, cells }
    }

    /// Row-major `n × n` mask: `mask[i * n + t]` iff edge `i → t` (0-based).
    pub fn mask(&self) -> Vec<bool> {
        let n = self.n;
        let mut mask = vec![false; n * n];
        for e in &self.edges {
            mask[(e.source - 1) * n + (e.target - 1)] = true;
        }
        mask
    }

    /// True when every edge points from an earlier to a later utterance,
    /// making `I − Aᵀ` triangular for any weights on the mask.
    pub fn is_forward(&self) -> bool {
        self.edges.iter().all(|e| e.source < e.target)
    }

    pub fn in_degree(&self, target: usize) -> usize {
        self.edges.iter().filter(|e| e.target == target).count()
    }
}

/// Free-function form of [`CognSkeleton::adjacency_matrix`].
pub fn adjacency_matrix(skeleton: &CognSkeleton) -> AdjacencyMatrix {
    skeleton.adjacency_matrix()
}

/// Free-function form of [`CognSkeleton::mask`].
pub fn skeleton_mask(skeleton: &CognSkeleton) -> Vec<bool> {
    skeleton.mask()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn edge_list(s: &CognSkeleton) -> Vec<(usize, usize, Option<bool>)> {
        s.edges
            .iter()
            .map(|e| (e.source, e.target, e.same_speaker))
            .collect()
    }

    #[test]
    fn variant_one_skips_first_pair() {
        let conv = Conversation::alternating(6).unwrap();
        let s = build_skeleton(SkeletonVariant::I, &conv, None).unwrap();
        assert_eq!(
            edge_list(&s),
            vec![(2, 3, None), (3, 4, None), (4, 5, None), (5, 6, None)]
        );
        let inclusive = build_skeleton_with(
            SkeletonVariant::I,
            &conv,
            None,
            BuildOptions {
                inclusive_bounds: true,
            },
        )
        .unwrap();
        assert_eq!(inclusive.edges.len(), 5);
    }

    #[test]
    fn variant_two_on_three_utterances() {
        let conv = Conversation::alternating(3).unwrap();
        let s = build_skeleton(SkeletonVariant::II, &conv, None).unwrap();
        assert_eq!(edge_list(&s), vec![(2, 3, None), (3, 2, None)]);
    }

    #[test]
    fn variant_six_trace() {
        let conv = Conversation::alternating(6).unwrap();
        let s = build_skeleton(SkeletonVariant::VI, &conv, Some(2)).unwrap();
        let into_six: Vec<_> = s
            .edges
            .iter()
            .filter(|e| e.target == 6)
            .map(|e| (e.source, e.same_speaker))
            .collect();
        assert_eq!(
            into_six,
            vec![
                (2, Some(true)),
                (3, Some(false)),
                (4, Some(true)),
                (5, Some(false))
            ]
        );
        let adj = s.adjacency_matrix();
        assert_eq!(
            adj.cells[5],
            vec![
                AdjacencyCell::None,
                AdjacencyCell::Typed(true),
                AdjacencyCell::Typed(false),
                AdjacencyCell::Typed(true),
                AdjacencyCell::Typed(false),
                AdjacencyCell::None
            ]
        );
    }

    #[test]
    fn variant_five_single_predecessor() {
        let conv = Conversation::alternating(4).unwrap();
        let s = build_skeleton(SkeletonVariant::V, &conv, None).unwrap();
        let adj = s.adjacency_matrix();
        for i in 1..4 {
            let influencers: Vec<_> = (0..4)
                .filter(|&j| adj.cells[i][j] != AdjacencyCell::None)
                .collect();
            assert_eq!(influencers, vec![i - 1]);
            assert_eq!(adj.cells[i][i - 1], AdjacencyCell::Typed(false));
        }
    }

    #[test]
    fn masks() {
        let s = build_skeleton(
            SkeletonVariant::II,
            &Conversation::alternating(4).unwrap(),
            None,
        )
        .unwrap();
        let mask = s.mask();
        for i in 0..4 {
            for t in 0..4 {
                assert_eq!(mask[i * 4 + t], i != t && i >= 1 && t >= 1);
            }
        }
        let single = build_skeleton(
            SkeletonVariant::VI,
            &Conversation::alternating(1).unwrap(),
            Some(2),
        )
        .unwrap();
        assert_eq!(single.mask(), vec![false]);
        let iv = build_skeleton(
            SkeletonVariant::IV,
            &Conversation::alternating(4).unwrap(),
            Some(2),
        )
        .unwrap();
        let mask = iv.mask();
        for i in 0..4 {
            for t in 0..4 {
                assert_eq!(mask[i * 4 + t], i.abs_diff(t) == 1 && i >= 1 && t >= 1);
            }
        }
    }

    #[test]
    fn empty_adjacency() {
        let s = build_skeleton(
            SkeletonVariant::I,
            &Conversation::alternating(2).unwrap(),
            None,
        )
        .unwrap();
        assert!(s
            .adjacency_matrix()
            .cells
            .iter()
            .flatten()
            .all(|c| *c == AdjacencyCell::None));
    }

    #[test]
    fn errors() {
        let conv = Conversation::alternating(3).unwrap();
        assert!(build_skeleton(SkeletonVariant::VI, &conv, None).is_err());
        assert!(build_skeleton(SkeletonVariant::IV, &conv, Some(0)).is_err());
        assert!("VII".parse::<SkeletonVariant>().is_err());
        assert_eq!(
            "vi".parse::<SkeletonVariant>().unwrap(),
            SkeletonVariant::VI
        );
        assert!(Conversation::new(vec!["A".into()], vec![None], vec![(1, 2)]).is_err());
    }

    #[test]
    fn json_edges() {
        let s = build_skeleton(
            SkeletonVariant::V,
            &Conversation::alternating(3).unwrap(),
            None,
        )
        .unwrap();
        let json = serde_json::to_value(&s).unwrap();
        assert_eq!(json["edges"], serde_json::json!([[1, 2, 0], [2, 3, 0]]));
        assert_eq!(serde_json::from_value::<CognSkeleton>(json).unwrap(), s);
        let s = build_skeleton(
            SkeletonVariant::I,
            &Conversation::alternating(3).unwrap(),
            None,
        )
        .unwrap();
        assert_eq!(
            serde_json::to_value(&s).unwrap()["edges"],
            serde_json::json!([[2, 3]])
        );
    }

    #[test]
    fn csv_export() {
        let s = build_skeleton(
            SkeletonVariant::V,
            &Conversation::alternating(3).unwrap(),
            None,
        )
        .unwrap();
        assert_eq!(s.adjacency_matrix().to_csv(), ",,\n0,,\n,0,\n");
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn conversations() -> impl Strategy<Value = Conversation> {
        prop::collection::vec(prop::sample::select(vec!["A", "B", "C"]), 1..12)
            .prop_map(|s| Conversation::from_speakers(s).unwrap())
    }

    proptest! {
        #[test]
        fn edges_are_well_formed(conv in conversations(), k in 1usize..5) {
            for variant in SkeletonVariant::ALL {
                let sk = build_skeleton(variant, &conv, Some(k)).unwrap();
                prop_assert_eq!(sk.mask().iter().filter(|&&m| m).count(), sk.edges.len());
                for e in &sk.edges {
                    prop_assert!(1 <= e.source && e.source <= conv.len());
                    prop_assert!(1 <= e.target && e.target <= conv.len());
                    prop_assert_ne!(e.source, e.target);
                    match e.same_speaker {
                        Some(m) => {
                            prop_assert!(variant.is_typed());
                            prop_assert_eq!(m, conv.same_speaker(e.source, e.target));
                        }
                        None => prop_assert!(!variant.is_typed()),
                    }
                }
                if variant.is_predecessor_only() {
                    prop_assert!(sk.is_forward());
                }
            }
        }
    }
}
