//! Discrete token universe, token sequences and scenarios.
//!
//! Token ids are dense from zero and roles are assigned contiguously: intent
//! ids first, then physics, then distractors. Each physics token is
//! compatible with exactly one scenario class.

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;

pub const VOCAB_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TokenError {
    #[error("vocabulary counts must be >= 1 (intent={intent}, physics={physics}, distractor={distractor}, classes={classes})")]
    ZeroCount {
        intent: usize,
        physics: usize,
        distractor: usize,
        classes: usize,
    },
    #[error("{physics} physics tokens cannot be split evenly over {classes} classes")]
    IndivisiblePhysics { physics: usize, classes: usize },
    #[error("token id {token} out of range for vocabulary of size {size}")]
    OutOfRange { token: u32, size: usize },
    #[error("sequence of length {len} exceeds budget {max}")]
    TooLong { len: usize, max: usize },
    #[error("scenario needs 1..={available} intent tokens, got k={k}")]
    BadIntentCount { k: usize, available: usize },
    #[error("scenario needs at least {classes} distractor tokens to carry a class cue, have {available}")]
    TooFewCueTokens { classes: usize, available: usize },
    #[error("malformed query: {0}")]
    MalformedQuery(String),
    #[error("invalid vocabulary document: {0}")]
    InvalidDocument(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Intent,
    Physics,
    Distractor,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    roles: Vec<Role>,
    physics_class: Vec<Option<u32>>,
    n_intent: usize,
    n_physics: usize,
    n_distractor: usize,
    n_classes: usize,
}

/// Wire form of [`Vocab`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabDocument {
    pub version: u32,
    pub size: usize,
    pub roles: Vec<Role>,
    pub physics_class: Vec<Option<u32>>,
}

impl Vocab {
    /// Builds a vocabulary with contiguous roles. The seed decides which
    /// physics tokens belong to which class; every class receives the same
    /// number of physics tokens.
    pub fn build(
        n_intent: usize,
        n_physics: usize,
        n_distractor: usize,
        n_classes: usize,
        seed: u64,
    ) -> Result<Self, TokenError> {
        if n_intent == 0 || n_physics == 0 || n_distractor == 0 || n_classes == 0 {
            return Err(TokenError::ZeroCount {
                intent: n_intent,
                physics: n_physics,
                distractor: n_distractor,
                classes: n_classes,
            });
        }
        if !n_physics.is_multiple_of(n_classes) {
            return Err(TokenError::IndivisiblePhysics {
                physics: n_physics,
                classes: n_classes,
            });
        }
        let per_class = n_physics / n_classes;
        let mut labels: Vec<u32> = (0..n_classes as u32)
            .flat_map(|c| std::iter::repeat_n(c, per_class))
            .collect();
        labels.shuffle(&mut seed::stream(seed, &[seed::stage::VOCAB]));

        let size = n_intent + n_physics + n_distractor;
        let mut roles = Vec::with_capacity(size);
        let mut physics_class = Vec::with_capacity(size);
        roles.extend(std::iter::repeat_n(Role::Intent, n_intent));
        physics_class.extend(std::iter::repeat_n(None, n_intent));
        roles.extend(std::iter::repeat_n(Role::Physics, n_physics));
        physics_class.extend(labels.into_iter().map(Some));
        roles.extend(std::iter::repeat_n(Role::Distractor, n_distractor));
        physics_class.extend(std::iter::repeat_n(None, n_distractor));

        Ok(Self {
            roles,
            physics_class,
            n_intent,
            n_physics,
            n_distractor,
            n_classes,
        })
    }

    /// Default desk-scale vocabulary: 4 intent, 8 physics, 8 distractor, 2 classes.
    pub fn desk_default(seed: u64) -> Self {
        Self::build(4, 8, 8, 2, seed).expect("default vocabulary is valid")
    }

    pub fn size(&self) -> usize {
        self.roles.len()
    }

    pub fn n_intent(&self) -> usize {
        self.n_intent
    }

    pub fn n_physics(&self) -> usize {
        self.n_physics
    }

    pub fn n_distractor(&self) -> usize {
        self.n_distractor
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn role(&self, token: u32) -> Option<Role> {
        self.roles.get(token as usize).copied()
    }

    pub fn physics_class(&self, token: u32) -> Option<u32> {
        self.physics_class.get(token as usize).copied().flatten()
    }

    pub fn intent_tokens(&self) -> std::ops::Range<u32> {
        0..self.n_intent as u32
    }

    pub fn physics_tokens(&self) -> std::ops::Range<u32> {
        let start = self.n_intent as u32;
        start..start + self.n_physics as u32
    }

    pub fn distractor_tokens(&self) -> std::ops::Range<u32> {
        let start = (self.n_intent + self.n_physics) as u32;
        start..start + self.n_distractor as u32
    }

    /// Physics tokens compatible with `class`, ascending.
    pub fn compatible_physics(&self, class: u32) -> Vec<u32> {
        self.physics_tokens()
            .filter(|&t| self.physics_class(t) == Some(class))
            .collect()
    }

    /// The distractor token that marks scenario class `class` in a query.
    pub fn cue_token(&self, class: u32) -> Result<u32, TokenError> {
        if self.n_distractor < self.n_classes {
            return Err(TokenError::TooFewCueTokens {
                classes: self.n_classes,
                available: self.n_distractor,
            });
        }
        Ok(self.distractor_tokens().start + class)
    }

    pub fn check_token(&self, token: u32) -> Result<(), TokenError> {
        if (token as usize) < self.size() {
            Ok(())
        } else {
            Err(TokenError::OutOfRange {
                token,
                size: self.size(),
            })
        }
    }

    pub fn to_document(&self) -> VocabDocument {
        VocabDocument {
            version: VOCAB_FORMAT_VERSION,
            size: self.size(),
            roles: self.roles.clone(),
            physics_class: self.physics_class.clone(),
        }
    }

    pub fn from_document(doc: &VocabDocument) -> Result<Self, TokenError> {
        let bad = |m: &str| Err(TokenError::InvalidDocument(m.to_string()));
        if doc.version != VOCAB_FORMAT_VERSION {
            return bad(&format!("unsupported version {}", doc.version));
        }
        if doc.roles.len() != doc.size || doc.physics_class.len() != doc.size {
            return bad("roles/physics_class length differs from size");
        }
        let count = |r: Role| doc.roles.iter().filter(|&&x| x == r).count();
        let (n_intent, n_physics, n_distractor) = (count(Role::Intent), count(Role::Physics), count(Role::Distractor));
        let contiguous = doc.roles.windows(2).all(|w| {
            let rank = |r: Role| r as u8;
            rank(w[0]) <= rank(w[1])
        });
        if !contiguous || n_intent == 0 || n_physics == 0 || n_distractor == 0 {
            return bad("roles must be contiguous intent, physics, distractor blocks, each non-empty");
        }
        for (role, class) in doc.roles.iter().zip(&doc.physics_class) {
            if (*role == Role::Physics) != class.is_some() {
                return bad("physics_class must be set for exactly the physics tokens");
            }
        }
        let n_classes = doc
            .physics_class
            .iter()
            .flatten()
            .max()
            .map(|&m| m as usize + 1)
            .unwrap_or(0);
        let per_class: Vec<usize> = (0..n_classes as u32)
            .map(|c| doc.physics_class.iter().filter(|&&x| x == Some(c)).count())
            .collect();
        if per_class.iter().any(|&n| n != per_class[0]) {
            return bad("physics tokens must be evenly split over classes");
        }
        Ok(Self {
            roles: doc.roles.clone(),
            physics_class: doc.physics_class.clone(),
            n_intent,
            n_physics,
            n_distractor,
            n_classes,
        })
    }
}

impl Serialize for Vocab {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_document().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocab {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let doc = VocabDocument::deserialize(d)?;
        Vocab::from_document(&doc).map_err(serde::de::Error::custom)
    }
}

/// An ordered list of token ids, validated against a vocabulary and a
/// length budget at construction.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSequence(Vec<u32>);

impl TokenSequence {
    pub fn new(tokens: Vec<u32>, vocab: &Vocab, max_len: usize) -> Result<Self, TokenError> {
        if tokens.len() > max_len {
            return Err(TokenError::TooLong {
                len: tokens.len(),
                max: max_len,
            });
        }
        for &t in &tokens {
            vocab.check_token(t)?;
        }
        Ok(Self(tokens))
    }

    /// Wraps tokens without vocabulary validation. Callers are the policy
    /// sampler and the protocol decoder, which check ranges themselves.
    pub fn from_raw(tokens: Vec<u32>) -> Self {
        Self(tokens)
    }

    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn tokens(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<u32> {
        self.0
    }

    /// Tokens in ascending order.
    pub fn sorted(&self) -> Self {
        let mut v = self.0.clone();
        v.sort_unstable();
        Self(v)
    }
}

impl From<TokenSequence> for Vec<u32> {
    fn from(s: TokenSequence) -> Self {
        s.0
    }
}

/// A user request: the intents to depict and the scenario class whose
/// physics applies.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Scenario {
    pub class_id: u32,
    /// Sorted, distinct intent-role tokens.
    pub intent_tokens: Vec<u32>,
    /// Exactly `intent_tokens`, ascending.
    pub prompt: TokenSequence,
    /// Distractor-role token naming the class in the policy query.
    pub cue: u32,
}

impl Scenario {
    pub fn new(vocab: &Vocab, class_id: u32, mut intent_tokens: Vec<u32>) -> Result<Self, TokenError> {
        intent_tokens.sort_unstable();
        intent_tokens.dedup();
        if intent_tokens.is_empty() || intent_tokens.len() > vocab.n_intent() {
            return Err(TokenError::BadIntentCount {
                k: intent_tokens.len(),
                available: vocab.n_intent(),
            });
        }
        if let Some(&t) = intent_tokens.iter().find(|&&t| vocab.role(t) != Some(Role::Intent)) {
            return Err(TokenError::MalformedQuery(format!("token {t} is not an intent token")));
        }
        if class_id as usize >= vocab.n_classes() {
            return Err(TokenError::MalformedQuery(format!("class {class_id} out of range")));
        }
        let cue = vocab.cue_token(class_id)?;
        let prompt = TokenSequence::new(intent_tokens.clone(), vocab, intent_tokens.len())?;
        Ok(Self {
            class_id,
            intent_tokens,
            prompt,
            cue,
        })
    }

    /// What the policy conditions on: the prompt followed by the class cue.
    pub fn query(&self) -> TokenSequence {
        let mut t = self.prompt.tokens().to_vec();
        t.push(self.cue);
        TokenSequence(t)
    }

    /// Inverse of [`Scenario::query`].
    pub fn from_query(vocab: &Vocab, query: &[u32]) -> Result<Self, TokenError> {
        let mut intents = Vec::new();
        let mut class = None;
        for &t in query {
            vocab.check_token(t)?;
            match vocab.role(t) {
                Some(Role::Intent) => intents.push(t),
                Some(Role::Distractor) => {
                    let c = t - vocab.distractor_tokens().start;
                    if c as usize >= vocab.n_classes() || class.replace(c).is_some() {
                        return Err(TokenError::MalformedQuery(format!(
                            "unexpected distractor {t} in query"
                        )));
                    }
                }
                _ => return Err(TokenError::MalformedQuery(format!("physics token {t} in query"))),
            }
        }
        let class = class.ok_or_else(|| TokenError::MalformedQuery("query has no class cue".into()))?;
        Self::new(vocab, class, intents)
    }
}

/// Draws a class uniformly and `k` distinct intent tokens uniformly.
pub fn sample_scenario<R: Rng + ?Sized>(vocab: &Vocab, k: usize, rng: &mut R) -> Result<Scenario, TokenError> {
    if k == 0 || k > vocab.n_intent() {
        return Err(TokenError::BadIntentCount {
            k,
            available: vocab.n_intent(),
        });
    }
    let class_id = rng.random_range(0..vocab.n_classes() as u32);
    let intents: Vec<u32> = index::sample(rng, vocab.n_intent(), k)
        .into_iter()
        .map(|i| i as u32)
        .collect();
    Scenario::new(vocab, class_id, intents)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_layout_is_contiguous() {
        let v = Vocab::build(4, 8, 8, 2, 7).unwrap();
        assert_eq!(v.size(), 20);
        for t in 0..4 {
            assert_eq!(v.role(t), Some(Role::Intent));
        }
        for t in 4..12 {
            assert_eq!(v.role(t), Some(Role::Physics));
            assert!(v.physics_class(t).is_some());
        }
        for t in 12..20 {
            assert_eq!(v.role(t), Some(Role::Distractor));
            assert_eq!(v.physics_class(t), None);
        }
        assert_eq!(v.compatible_physics(0).len(), 4);
        assert_eq!(v.compatible_physics(1).len(), 4);
        assert_eq!(v.role(20), None);
    }

    #[test]
    fn minimal_vocab() {
        let v = Vocab::build(1, 1, 1, 1, 123).unwrap();
        assert_eq!(v.size(), 3);
        assert_eq!(
            (0..3).map(|t| v.role(t).unwrap()).collect::<Vec<_>>(),
            vec![Role::Intent, Role::Physics, Role::Distractor]
        );
    }

    #[test]
    fn build_is_deterministic() {
        let a = serde_json::to_string(&Vocab::build(4, 8, 8, 2, 7).unwrap()).unwrap();
        let b = serde_json::to_string(&Vocab::build(4, 8, 8, 2, 7).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn build_rejects_bad_counts() {
        assert!(matches!(Vocab::build(0, 8, 8, 2, 0), Err(TokenError::ZeroCount { .. })));
        assert!(matches!(Vocab::build(4, 8, 8, 0, 0), Err(TokenError::ZeroCount { .. })));
        assert!(matches!(
            Vocab::build(4, 7, 8, 2, 0),
            Err(TokenError::IndivisiblePhysics { .. })
        ));
    }

    #[test]
    fn document_round_trip_and_validation() {
        let v = Vocab::desk_default(3);
        let json = serde_json::to_string(&v).unwrap();
        assert!(json.starts_with("{\"version\":1,\"size\":20,"));
        let back: Vocab = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);

        let mut doc = v.to_document();
        doc.physics_class[0] = Some(0);
        assert!(Vocab::from_document(&doc).is_err());
        let mut doc = v.to_document();
        doc.version = 2;
        assert!(Vocab::from_document(&doc).is_err());
    }

    #[test]
    fn sequence_validation() {
        let v = Vocab::desk_default(0);
        assert!(TokenSequence::new(vec![0, 19], &v, 5).is_ok());
        assert!(matches!(
            TokenSequence::new(vec![20], &v, 5),
            Err(TokenError::OutOfRange { token: 20, .. })
        ));
        assert!(matches!(
            TokenSequence::new(vec![0; 6], &v, 5),
            Err(TokenError::TooLong { len: 6, max: 5 })
        ));
    }

    #[test]
    fn full_intent_pool_scenario() {
        let v = Vocab::desk_default(0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = sample_scenario(&v, 4, &mut rng).unwrap();
        assert_eq!(s.intent_tokens, vec![0, 1, 2, 3]);
        assert_eq!(s.prompt.tokens(), &[0, 1, 2, 3]);
    }

    #[test]
    fn scenario_rejects_bad_k() {
        let v = Vocab::desk_default(0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(sample_scenario(&v, 0, &mut rng).is_err());
        assert!(sample_scenario(&v, 5, &mut rng).is_err());
    }

    #[test]
    fn scenario_sampling_is_reproducible() {
        let v = Vocab::build(6, 8, 8, 2, 0).unwrap();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..20)
                .map(|_| sample_scenario(&v, 3, &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(11), draw(11));
        for s in draw(11) {
            assert_eq!(s.intent_tokens.len(), 3);
            assert!(TokenSequence::new(s.prompt.tokens().to_vec(), &v, 5).is_ok());
            assert!(s.intent_tokens.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn query_round_trip() {
        let v = Vocab::desk_default(0);
        for class in 0..2 {
            let s = Scenario::new(&v, class, vec![3, 1, 0]).unwrap();
            assert_eq!(s.query().tokens(), &[0, 1, 3, 12 + class]);
            assert_eq!(Scenario::from_query(&v, s.query().tokens()).unwrap(), s);
        }
        assert!(Scenario::from_query(&v, &[0, 1]).is_err());
        assert!(Scenario::from_query(&v, &[0, 4, 12]).is_err());
        assert!(Scenario::from_query(&v, &[0, 12, 13]).is_err());
    }
}
