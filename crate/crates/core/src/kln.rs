//! Knowledge-based local neighborhoods.
//!
//! Candidate pairs are ranked against a target pair by how many of their
//! categories (question ids) coincide with the target's. The sampler draws
//! a fixed composition of degrees so that the few-shot examples given to
//! the explainer stay close to the target.
//!
//! For a clone target in question `q`, a candidate is
//! [`Degree::High`] when both snippets answer `q`, [`Degree::Medium`] when
//! exactly one does, and [`Degree::Null`] when neither does. A non-clone
//! target in questions `a != b` uses the inverse ladder: [`Degree::High`]
//! is one snippet from `a` and one from `b`, [`Degree::Null`] is a clone
//! pair from a question outside `{a, b}`, and every other pair is
//! [`Degree::Medium`].
//!
//! The sampler draws from construction-specific subsets of those classes:
//! a null sample for a clone target must itself be a non-clone pair, and a
//! medium sample for a non-clone target must reuse one snippet of the null
//! sample and pair it with a snippet from another question.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{choose2, CodePair, Corpus, CorpusError, Label, Snippet};
use crate::detector::{DetectorAdapter, DetectorError, Prediction};

#[derive(Debug, Error)]
pub enum KlnError {
    #[error("candidate {0} is the target pair itself")]
    CandidateIsTarget(String),
    #[error("cannot draw {needed} {degree} samples for {target}: only {available} eligible")]
    Infeasible {
        target: String,
        degree: Degree,
        needed: usize,
        available: u64,
    },
    #[error("neighborhood already has size {0}; only size-4 sets can be extended")]
    NotExtendable(usize),
    #[error("medium candidates of a non-clone target are anchored on its null sample")]
    MissingAnchor,
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Degree {
    High,
    Medium,
    Null,
}

impl fmt::Display for Degree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Degree::High => "high",
            Degree::Medium => "medium",
            Degree::Null => "null",
        })
    }
}

/// Number of few-shot samples in a neighborhood.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum KlnSize {
    Four,
    Eight,
}

impl KlnSize {
    pub fn get(self) -> usize {
        match self {
            KlnSize::Four => 4,
            KlnSize::Eight => 8,
        }
    }

    /// (high, medium, null) sample counts.
    pub fn composition(self) -> (usize, usize, usize) {
        match self {
            KlnSize::Four => (2, 1, 1),
            KlnSize::Eight => (4, 3, 1),
        }
    }
}

impl TryFrom<u8> for KlnSize {
    type Error = String;

    fn try_from(value: u8) -> Result<Self, Self::Error> {
        match value {
            4 => Ok(KlnSize::Four),
            8 => Ok(KlnSize::Eight),
            other => Err(format!("neighborhood size must be 4 or 8, got {other}")),
        }
    }
}

impl From<KlnSize> for u8 {
    fn from(size: KlnSize) -> u8 {
        size.get() as u8
    }
}

impl fmt::Display for KlnSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.get())
    }
}

impl std::str::FromStr for KlnSize {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let n: u8 = s.trim().parse().map_err(|_| format!("invalid size `{s}`"))?;
        KlnSize::try_from(n)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlnSample {
    pub pair: CodePair,
    pub degree: Degree,
    pub prediction: Prediction,
}

/// Ground-truth class counts among the samples of one neighborhood.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassBalance {
    pub clone: usize,
    pub non_clone: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborhoodSet {
    pub target: CodePair,
    pub size: KlnSize,
    /// Ordered high, then medium, then null.
    pub samples: Vec<KlnSample>,
    pub seed: u64,
    /// Seed of the draw that grew a size-4 set to size 8.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extension_seed: Option<u64>,
}

impl NeighborhoodSet {
    pub fn degree_counts(&self) -> (usize, usize, usize) {
        self.samples.iter().fold((0, 0, 0), |(h, m, n), s| match s.degree {
            Degree::High => (h + 1, m, n),
            Degree::Medium => (h, m + 1, n),
            Degree::Null => (h, m, n + 1),
        })
    }

    pub fn class_balance(&self) -> ClassBalance {
        let clone = self
            .samples
            .iter()
            .filter(|s| s.pair.ground_truth() == Label::Clone)
            .count();
        ClassBalance {
            clone,
            non_clone: self.samples.len() - clone,
        }
    }

    pub fn null_sample(&self) -> Option<&KlnSample> {
        self.samples.iter().find(|s| s.degree == Degree::Null)
    }
}

/// Degree of `candidate` relative to `target`.
pub fn classify_degree(target: &CodePair, candidate: &CodePair) -> Result<Degree, KlnError> {
    if target == candidate {
        return Err(KlnError::CandidateIsTarget(candidate.key().to_string()));
    }
    let (cq_a, cq_b) = (&candidate.a.question_id, &candidate.b.question_id);
    Ok(match target.ground_truth() {
        Label::Clone => {
            let q = &target.a.question_id;
            match (cq_a == q) as u8 + (cq_b == q) as u8 {
                2 => Degree::High,
                1 => Degree::Medium,
                _ => Degree::Null,
            }
        }
        Label::NonClone => {
            let (ta, tb) = (&target.a.question_id, &target.b.question_id);
            if (cq_a == ta && cq_b == tb) || (cq_a == tb && cq_b == ta) {
                Degree::High
            } else if cq_a == cq_b && cq_a != ta && cq_a != tb {
                Degree::Null
            } else {
                Degree::Medium
            }
        }
    })
}

/// An index space over pairs that can be counted and unranked without
/// materializing it.
enum PairSpace<'c> {
    /// Every `(x, y)` with `x` from the left list and `y` from the right.
    /// The two lists must not share snippets.
    Product(Vec<&'c Arc<Snippet>>, Vec<&'c Arc<Snippet>>),
    /// Every pair inside one group.
    Within(Vec<&'c [Arc<Snippet>]>),
    /// Every pair whose snippets fall in two different groups.
    Across(Vec<&'c [Arc<Snippet>]>),
}

impl PairSpace<'_> {
    fn len(&self) -> u64 {
        match self {
            PairSpace::Product(l, r) => (l.len() * r.len()) as u64,
            PairSpace::Within(groups) => groups.iter().map(|g| choose2(g.len() as u64)).sum(),
            PairSpace::Across(groups) => {
                let total: u64 = groups.iter().map(|g| g.len() as u64).sum();
                let within: u64 = groups.iter().map(|g| choose2(g.len() as u64)).sum();
                choose2(total) - within
            }
        }
    }

    fn get(&self, mut index: u64) -> CodePair {
        let make = |x: &Arc<Snippet>, y: &Arc<Snippet>| {
            CodePair::new(x.key(), y.key()).expect("spaces never pair a snippet with itself")
        };
        match self {
            PairSpace::Product(l, r) => {
                let n = r.len() as u64;
                make(l[(index / n) as usize], r[(index % n) as usize])
            }
            PairSpace::Within(groups) => {
                for g in groups {
                    let count = choose2(g.len() as u64);
                    if index < count {
                        let (i, j) = unrank_pair(index, g.len() as u64);
                        return make(&g[i as usize], &g[j as usize]);
                    }
                    index -= count;
                }
                unreachable!("index beyond space")
            }
            PairSpace::Across(groups) => {
                for (gi, g) in groups.iter().enumerate() {
                    for h in &groups[gi + 1..] {
                        let count = (g.len() * h.len()) as u64;
                        if index < count {
                            let n = h.len() as u64;
                            return make(&g[(index / n) as usize], &h[(index % n) as usize]);
                        }
                        index -= count;
                    }
                }
                unreachable!("index beyond space")
            }
        }
    }

    fn contains(&self, pair: &CodePair) -> bool {
        let in_list = |list: &[&Arc<Snippet>], id: &str| list.iter().any(|s| s.id == id);
        let group_of = |groups: &[&[Arc<Snippet>]], id: &str| {
            groups.iter().position(|g| g.iter().any(|s| s.id == id))
        };
        match self {
            PairSpace::Product(l, r) => {
                (in_list(l, &pair.a.id) && in_list(r, &pair.b.id))
                    || (in_list(l, &pair.b.id) && in_list(r, &pair.a.id))
            }
            PairSpace::Within(groups) => match (group_of(groups, &pair.a.id), group_of(groups, &pair.b.id)) {
                (Some(x), Some(y)) => x == y,
                _ => false,
            },
            PairSpace::Across(groups) => match (group_of(groups, &pair.a.id), group_of(groups, &pair.b.id)) {
                (Some(x), Some(y)) => x != y,
                _ => false,
            },
        }
    }

    fn iter(&self) -> impl Iterator<Item = CodePair> + '_ {
        (0..self.len()).map(|i| self.get(i))
    }
}

/// Maps `index` in `0..C(n, 2)` to `(i, j)` with `i < j`, row by row.
fn unrank_pair(mut index: u64, n: u64) -> (u64, u64) {
    let mut i = 0;
    loop {
        let row = n - 1 - i;
        if index < row {
            return (i, i + 1 + index);
        }
        index -= row;
        i += 1;
    }
}

fn candidate_space<'c>(
    corpus: &'c Corpus,
    target: &CodePair,
    degree: Degree,
    null_anchor: Option<&CodePair>,
) -> Result<PairSpace<'c>, KlnError> {
    let group = |q: &str| corpus.question(q).unwrap_or(&[]);
    let others = |skip: &[&str]| -> Vec<&'c [Arc<Snippet>]> {
        corpus
            .questions()
            .iter()
            .filter(|(q, _)| !skip.contains(&q.as_str()))
            .map(|(_, list)| list.as_slice())
            .collect()
    };
    let snippets_outside = |q: &str| -> Vec<&'c Arc<Snippet>> {
        corpus.snippets().filter(|s| s.question_id != q).collect()
    };
    let (qa, qb) = (target.a.question_id.as_str(), target.b.question_id.as_str());
    Ok(match (target.ground_truth(), degree) {
        (Label::Clone, Degree::High) => PairSpace::Within(vec![group(qa)]),
        (Label::Clone, Degree::Medium) => {
            PairSpace::Product(group(qa).iter().collect(), snippets_outside(qa))
        }
        (Label::Clone, Degree::Null) => PairSpace::Across(others(&[qa])),
        (Label::NonClone, Degree::High) => {
            PairSpace::Product(group(qa).iter().collect(), group(qb).iter().collect())
        }
        (Label::NonClone, Degree::Null) => PairSpace::Within(others(&[qa, qb])),
        (Label::NonClone, Degree::Medium) => {
            let anchor = null_anchor.ok_or(KlnError::MissingAnchor)?;
            let (a, b) = corpus.pair_snippets(anchor)?;
            PairSpace::Product(vec![a, b], snippets_outside(&anchor.a.question_id))
        }
    })
}

/// Pairs the sampler may draw for `degree`, excluding the target.
///
/// `null_anchor` is the null sample of the neighborhood and is required for
/// the medium degree of a non-clone target.
pub fn eligible_candidates(
    corpus: &Corpus,
    target: &CodePair,
    degree: Degree,
    null_anchor: Option<&CodePair>,
) -> Result<Vec<CodePair>, KlnError> {
    let space = candidate_space(corpus, target, degree, null_anchor)?;
    Ok(space.iter().filter(|p| p != target).collect())
}

fn draw(
    space: &PairSpace<'_>,
    count: usize,
    taken: &mut BTreeSet<CodePair>,
    target: &CodePair,
    degree: Degree,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<CodePair>, KlnError> {
    let blocked = taken.iter().filter(|p| space.contains(p)).count() as u64;
    let available = space.len() - blocked;
    if available < count as u64 {
        return Err(KlnError::Infeasible {
            target: target.key().to_string(),
            degree,
            needed: count,
            available,
        });
    }
    let mut drawn = Vec::with_capacity(count);
    while drawn.len() < count {
        let pair = space.get(rng.gen_range(0..space.len()));
        if taken.insert(pair.clone()) {
            drawn.push(pair);
        }
    }
    Ok(drawn)
}

fn annotate(
    pairs: Vec<CodePair>,
    degree: Degree,
    corpus: &Corpus,
    adapter: &DetectorAdapter,
) -> Result<Vec<KlnSample>, KlnError> {
    pairs
        .into_iter()
        .map(|pair| {
            let prediction = adapter.predict(&pair, corpus)?;
            Ok(KlnSample {
                pair,
                degree,
                prediction,
            })
        })
        .collect()
}

/// Seed of the size-8 extension drawn inside [`sample_neighborhood`].
pub fn extension_seed(seed: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Draws a neighborhood of `size` around `target`.
///
/// A size-8 set is the size-4 set for `seed` grown by
/// [`extend_neighborhood`] with [`extension_seed`]`(seed)`, so the two sizes
/// nest.
pub fn sample_neighborhood(
    corpus: &Corpus,
    target: &CodePair,
    size: KlnSize,
    seed: u64,
    adapter: &DetectorAdapter,
) -> Result<NeighborhoodSet, KlnError> {
    corpus.pair_snippets(target)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut taken = BTreeSet::from([target.clone()]);
    let (high_n, medium_n, null_n) = KlnSize::Four.composition();

    let (high, medium, null) = match target.ground_truth() {
        Label::Clone => {
            let high = draw_degree(corpus, target, Degree::High, None, high_n, &mut taken, &mut rng)?;
            let medium = draw_degree(corpus, target, Degree::Medium, None, medium_n, &mut taken, &mut rng)?;
            let null = draw_degree(corpus, target, Degree::Null, None, null_n, &mut taken, &mut rng)?;
            (high, medium, null)
        }
        Label::NonClone => {
            let null = draw_degree(corpus, target, Degree::Null, None, null_n, &mut taken, &mut rng)?;
            let anchor = null[0].clone();
            let medium =
                draw_degree(corpus, target, Degree::Medium, Some(&anchor), medium_n, &mut taken, &mut rng)?;
            let high = draw_degree(corpus, target, Degree::High, None, high_n, &mut taken, &mut rng)?;
            (high, medium, null)
        }
    };

    let mut samples = annotate(high, Degree::High, corpus, adapter)?;
    samples.extend(annotate(medium, Degree::Medium, corpus, adapter)?);
    samples.extend(annotate(null, Degree::Null, corpus, adapter)?);
    let set = NeighborhoodSet {
        target: target.clone(),
        size: KlnSize::Four,
        samples,
        seed,
        extension_seed: None,
    };
    match size {
        KlnSize::Four => Ok(set),
        KlnSize::Eight => extend_neighborhood(&set, corpus, extension_seed(seed), adapter),
    }
}

fn draw_degree(
    corpus: &Corpus,
    target: &CodePair,
    degree: Degree,
    anchor: Option<&CodePair>,
    count: usize,
    taken: &mut BTreeSet<CodePair>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<CodePair>, KlnError> {
    let space = candidate_space(corpus, target, degree, anchor)?;
    draw(&space, count, taken, target, degree, rng)
}

/// Grows a size-4 set to size 8 by adding two high and two medium samples.
/// The original four samples are kept.
pub fn extend_neighborhood(
    set4: &NeighborhoodSet,
    corpus: &Corpus,
    seed: u64,
    adapter: &DetectorAdapter,
) -> Result<NeighborhoodSet, KlnError> {
    if set4.size != KlnSize::Four {
        return Err(KlnError::NotExtendable(set4.size.get()));
    }
    let target = &set4.target;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut taken: BTreeSet<CodePair> = set4.samples.iter().map(|s| s.pair.clone()).collect();
    taken.insert(target.clone());
    let anchor = match target.ground_truth() {
        Label::Clone => None,
        Label::NonClone => Some(set4.null_sample().ok_or(KlnError::MissingAnchor)?.pair.clone()),
    };

    let (h8, m8, _) = KlnSize::Eight.composition();
    let (h4, m4, _) = KlnSize::Four.composition();
    let high = draw_degree(corpus, target, Degree::High, None, h8 - h4, &mut taken, &mut rng)?;
    let medium = draw_degree(corpus, target, Degree::Medium, anchor.as_ref(), m8 - m4, &mut taken, &mut rng)?;

    let mut added = annotate(high, Degree::High, corpus, adapter)?;
    added.extend(annotate(medium, Degree::Medium, corpus, adapter)?);
    let mut samples: Vec<KlnSample> = set4.samples.iter().cloned().chain(added).collect();
    // Stable sort keeps base samples ahead of additions within a degree.
    samples.sort_by_key(|s| s.degree);
    Ok(NeighborhoodSet {
        target: target.clone(),
        size: KlnSize::Eight,
        samples,
        seed: set4.seed,
        extension_seed: Some(seed),
    })
}

/// Distinct snippet ids referenced by a set's samples.
pub fn referenced_snippets(set: &NeighborhoodSet) -> HashSet<&str> {
    set.samples
        .iter()
        .flat_map(|s| [s.pair.a.id.as_str(), s.pair.b.id.as_str()])
        .collect()
}
