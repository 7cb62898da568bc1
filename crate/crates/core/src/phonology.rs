//! Segment-level phonological annotation.
//!
//! Every transcribed segment token is mapped to a [`SegmentProfile`]: a sound
//! class plus consonant features (voicing, position, manner) or vowel features
//! (roundedness, height, backness, and an optional extreme corner). Feature
//! values follow a deliberately coarse scheme:
//!
//! * positions collapse to {alveolar, glottal, labial, palatal, velar}
//!   (dental/retroflex/postalveolar -> alveolar, uvular/labio-velar -> velar,
//!   pharyngeal/epiglottal -> glottal, labialized anything -> labial);
//! * manners collapse to {continuant, lateral, nasal, stop, vibrant}
//!   (fricatives/approximants -> continuant, affricates -> stop,
//!   taps/flaps/trills -> vibrant);
//! * vowel height collapses to {high, low, mid} with close-mid/open-mid
//!   folded into mid, and the two-way `extreme` corner splits at the exact
//!   mid line: close through close-mid count as high, open-mid through open
//!   as low. A vowel has no extreme corner iff its fine height is exactly
//!   mid or its backness is central.
//!
//! Aspiration, length, nasalization, phonation overlays and tone are ignored;
//! a combining ring forces voicelessness; diphthongs and unknown clusters fall
//! back to their first recognized constituent. Anything else is `Other` and is
//! counted but never contributes to a feature table.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Corpus;

#[derive(Debug, Error)]
pub enum PhonologyError {
    #[error("unknown category name `{0}`")]
    UnknownCategory(String),
    #[error("unknown feature value `{value}` for {field}")]
    UnknownFeatureValue { field: &'static str, value: String },
    #[error("segment mapping row {row}: {message}")]
    BadMappingRow { row: usize, message: String },
    #[error("count table has {0} rows; proportion compression needs at least 2")]
    TooFewRows(usize),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

macro_rules! feature_enum {
    ($name:ident { $($variant:ident => $label:expr),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn label(self) -> &'static str {
                match self {
                    $($name::$variant => $label),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.label())
            }
        }

        impl FromStr for $name {
            type Err = PhonologyError;
            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s {
                    $($label => Ok($name::$variant),)+
                    other => Err(PhonologyError::UnknownFeatureValue {
                        field: stringify!($name),
                        value: other.to_string(),
                    }),
                }
            }
        }
    };
}

feature_enum!(Voicing { Voiced => "voiced", Unvoiced => "unvoiced" });
feature_enum!(Position {
    Alveolar => "alveolar",
    Glottal => "glottal",
    Labial => "labial",
    Palatal => "palatal",
    Velar => "velar",
});
feature_enum!(Manner {
    Continuant => "continuant",
    Lateral => "lateral",
    Nasal => "nasal",
    Stop => "stop",
    Vibrant => "vibrant",
});
feature_enum!(Roundedness { Rounded => "rounded", Unrounded => "unrounded" });
feature_enum!(Height { High => "high", Low => "low", Mid => "mid" });
feature_enum!(Backness { Back => "back", Central => "central", Front => "front" });
feature_enum!(Extreme {
    HighBack => "high-back",
    HighFront => "high-front",
    LowBack => "low-back",
    LowFront => "low-front",
});

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SoundClass {
    Consonant,
    Vowel,
    Other,
}

impl fmt::Display for SoundClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SoundClass::Consonant => "consonant",
            SoundClass::Vowel => "vowel",
            SoundClass::Other => "other",
        })
    }
}

/// Feature bundle for one segment token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentProfile {
    pub sound_class: SoundClass,
    pub voicing: Option<Voicing>,
    pub position: Option<Position>,
    pub manner: Option<Manner>,
    pub roundedness: Option<Roundedness>,
    pub height: Option<Height>,
    pub backness: Option<Backness>,
    pub extreme: Option<Extreme>,
}

impl SegmentProfile {
    pub const OTHER: SegmentProfile = SegmentProfile {
        sound_class: SoundClass::Other,
        voicing: None,
        position: None,
        manner: None,
        roundedness: None,
        height: None,
        backness: None,
        extreme: None,
    };

    fn consonant(voicing: Voicing, position: Position, manner: Manner) -> Self {
        SegmentProfile {
            sound_class: SoundClass::Consonant,
            voicing: Some(voicing),
            position: Some(position),
            manner: Some(manner),
            roundedness: None,
            height: None,
            backness: None,
            extreme: None,
        }
    }

    fn vowel(
        roundedness: Roundedness,
        height: Height,
        backness: Backness,
        extreme: Option<Extreme>,
    ) -> Self {
        SegmentProfile {
            sound_class: SoundClass::Vowel,
            voicing: None,
            position: None,
            manner: None,
            roundedness: Some(roundedness),
            height: Some(height),
            backness: Some(backness),
            extreme,
        }
    }
}

/// The ten feature categories a proportion table can be built over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Voicing,
    Position,
    Manner,
    MannerVoicing,
    PositionVoicing,
    Roundedness,
    Height,
    Backness,
    Extreme,
    ExtremeRoundedness,
}

impl Category {
    pub const ALL: &'static [Category] = &[
        Category::Voicing,
        Category::Position,
        Category::Manner,
        Category::MannerVoicing,
        Category::PositionVoicing,
        Category::Roundedness,
        Category::Height,
        Category::Backness,
        Category::Extreme,
        Category::ExtremeRoundedness,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::Voicing => "voicing",
            Category::Position => "position",
            Category::Manner => "manner",
            Category::MannerVoicing => "manner_voicing",
            Category::PositionVoicing => "position_voicing",
            Category::Roundedness => "roundedness",
            Category::Height => "height",
            Category::Backness => "backness",
            Category::Extreme => "extreme",
            Category::ExtremeRoundedness => "extreme_roundedness",
        }
    }

    /// Canonical level list (lexicographically sorted; the last level is the
    /// regression reference level).
    pub fn levels(self) -> &'static [&'static str] {
        match self {
            Category::Voicing => &["unvoiced", "voiced"],
            Category::Position => &["alveolar", "glottal", "labial", "palatal", "velar"],
            Category::Manner => &["continuant", "lateral", "nasal", "stop", "vibrant"],
            // Combined categories keep only the attested level sets; rare
            // combinations (e.g. unvoiced nasals) are skipped when counting.
            Category::MannerVoicing => &[
                "continuant unvoiced",
                "continuant voiced",
                "lateral voiced",
                "nasal voiced",
                "stop unvoiced",
                "stop voiced",
                "vibrant voiced",
            ],
            Category::PositionVoicing => &[
                "alveolar unvoiced",
                "alveolar voiced",
                "glottal unvoiced",
                "glottal voiced",
                "labial unvoiced",
                "labial voiced",
                "palatal unvoiced",
                "palatal voiced",
                "velar unvoiced",
                "velar voiced",
            ],
            Category::Roundedness => &["rounded", "unrounded"],
            Category::Height => &["high", "low", "mid"],
            Category::Backness => &["back", "central", "front"],
            Category::Extreme => &["high-back", "high-front", "low-back", "low-front"],
            Category::ExtremeRoundedness => &[
                "high-back-rounded",
                "high-back-unrounded",
                "high-front-rounded",
                "high-front-unrounded",
                "low-back-rounded",
                "low-back-unrounded",
                "low-front-rounded",
                "low-front-unrounded",
            ],
        }
    }

    pub fn is_vocalic(self) -> bool {
        matches!(
            self,
            Category::Roundedness
                | Category::Height
                | Category::Backness
                | Category::Extreme
                | Category::ExtremeRoundedness
        )
    }

    /// Level index of a profile under this category; `None` when the profile
    /// does not participate (wrong sound class, no extreme corner, or an
    /// unlisted combination).
    pub fn level_of(self, p: &SegmentProfile) -> Option<usize> {
        let find = |label: String| self.levels().iter().position(|l| *l == label);
        match self {
            Category::Voicing => Some(p.voicing?.label()).and_then(|l| find(l.to_string())),
            Category::Position => Some(p.position?.label()).and_then(|l| find(l.to_string())),
            Category::Manner => Some(p.manner?.label()).and_then(|l| find(l.to_string())),
            Category::MannerVoicing => find(format!("{} {}", p.manner?, p.voicing?)),
            Category::PositionVoicing => find(format!("{} {}", p.position?, p.voicing?)),
            Category::Roundedness => {
                Some(p.roundedness?.label()).and_then(|l| find(l.to_string()))
            }
            Category::Height => Some(p.height?.label()).and_then(|l| find(l.to_string())),
            Category::Backness => Some(p.backness?.label()).and_then(|l| find(l.to_string())),
            Category::Extreme => Some(p.extreme?.label()).and_then(|l| find(l.to_string())),
            Category::ExtremeRoundedness => {
                find(format!("{}-{}", p.extreme?, p.roundedness?))
            }
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Category {
    type Err = PhonologyError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Category::ALL
            .iter()
            .copied()
            .find(|c| c.name() == s)
            .ok_or_else(|| PhonologyError::UnknownCategory(s.to_string()))
    }
}

// Builtin token table. Columns: token, voicing, position, manner for
// consonants; token, roundedness, backness, fine height for vowels. Fine
// heights are collapsed at table-build time.
#[rustfmt::skip]
const CONSONANTS: &[(&str, Voicing, Position, Manner)] = &[
    // labial
    ("p", Voicing::Unvoiced, Position::Labial, Manner::Stop),
    ("b", Voicing::Voiced, Position::Labial, Manner::Stop),
    ("ɓ", Voicing::Voiced, Position::Labial, Manner::Stop),
    ("m", Voicing::Voiced, Position::Labial, Manner::Nasal),
    ("ɱ", Voicing::Voiced, Position::Labial, Manner::Nasal),
    ("ʙ", Voicing::Voiced, Position::Labial, Manner::Vibrant),
    ("ⱱ", Voicing::Voiced, Position::Labial, Manner::Vibrant),
    ("ɸ", Voicing::Unvoiced, Position::Labial, Manner::Continuant),
    ("β", Voicing::Voiced, Position::Labial, Manner::Continuant),
    ("f", Voicing::Unvoiced, Position::Labial, Manner::Continuant),
    ("v", Voicing::Voiced, Position::Labial, Manner::Continuant),
    ("ʋ", Voicing::Voiced, Position::Labial, Manner::Continuant),
    ("pf", Voicing::Unvoiced, Position::Labial, Manner::Stop),
    ("bv", Voicing::Voiced, Position::Labial, Manner::Stop),
    // alveolar (incl. dental, postalveolar, retroflex, alveolo-palatal)
    ("t", Voicing::Unvoiced, Position::Alveolar, Manner::Stop),
    ("d", Voicing::Voiced, Position::Alveolar, Manner::Stop),
    ("ɗ", Voicing::Voiced, Position::Alveolar, Manner::Stop),
    ("ʈ", Voicing::Unvoiced, Position::Alveolar, Manner::Stop),
    ("ɖ", Voicing::Voiced, Position::Alveolar, Manner::Stop),
    ("n", Voicing::Voiced, Position::Alveolar, Manner::Nasal),
    ("ɳ", Voicing::Voiced, Position::Alveolar, Manner::Nasal),
    ("r", Voicing::Voiced, Position::Alveolar, Manner::Vibrant),
    ("ɾ", Voicing::Voiced, Position::Alveolar, Manner::Vibrant),
    ("ɽ", Voicing::Voiced, Position::Alveolar, Manner::Vibrant),
    ("s", Voicing::Unvoiced, Position::Alveolar, Manner::Continuant),
    ("z", Voicing::Voiced, Position::Alveolar, Manner::Continuant),
    ("ʃ", Voicing::Unvoiced, Position::Alveolar, Manner::Continuant),
    ("ʒ", Voicing::Voiced, Position::Alveolar, Manner::Continuant),
    ("ʂ", Voicing::Unvoiced, Position::Alveolar, Manner::Continuant),
    ("ʐ", Voicing::Voiced, Position::Alveolar, Manner::Continuant),
    ("ɕ", Voicing::Unvoiced, Position::Alveolar, Manner::Continuant),
    ("ʑ", Voicing::Voiced, Position::Alveolar, Manner::Continuant),
    ("θ", Voicing::Unvoiced, Position::Alveolar, Manner::Continuant),
    ("ð", Voicing::Voiced, Position::Alveolar, Manner::Continuant),
    ("ɹ", Voicing::Voiced, Position::Alveolar, Manner::Continuant),
    ("ɻ", Voicing::Voiced, Position::Alveolar, Manner::Continuant),
    ("l", Voicing::Voiced, Position::Alveolar, Manner::Lateral),
    ("ɭ", Voicing::Voiced, Position::Alveolar, Manner::Lateral),
    ("ɬ", Voicing::Unvoiced, Position::Alveolar, Manner::Lateral),
    ("ɮ", Voicing::Voiced, Position::Alveolar, Manner::Lateral),
    ("ts", Voicing::Unvoiced, Position::Alveolar, Manner::Stop),
    ("dz", Voicing::Voiced, Position::Alveolar, Manner::Stop),
    ("tʃ", Voicing::Unvoiced, Position::Alveolar, Manner::Stop),
    ("dʒ", Voicing::Voiced, Position::Alveolar, Manner::Stop),
    ("tɕ", Voicing::Unvoiced, Position::Alveolar, Manner::Stop),
    ("dʑ", Voicing::Voiced, Position::Alveolar, Manner::Stop),
    ("ʈʂ", Voicing::Unvoiced, Position::Alveolar, Manner::Stop),
    ("ɖʐ", Voicing::Voiced, Position::Alveolar, Manner::Stop),
    ("tθ", Voicing::Unvoiced, Position::Alveolar, Manner::Stop),
    ("tɬ", Voicing::Unvoiced, Position::Alveolar, Manner::Stop),
    // palatal
    ("c", Voicing::Unvoiced, Position::Palatal, Manner::Stop),
    ("ɟ", Voicing::Voiced, Position::Palatal, Manner::Stop),
    ("ʄ", Voicing::Voiced, Position::Palatal, Manner::Stop),
    ("ɲ", Voicing::Voiced, Position::Palatal, Manner::Nasal),
    ("ç", Voicing::Unvoiced, Position::Palatal, Manner::Continuant),
    ("ʝ", Voicing::Voiced, Position::Palatal, Manner::Continuant),
    ("j", Voicing::Voiced, Position::Palatal, Manner::Continuant),
    ("ɥ", Voicing::Voiced, Position::Palatal, Manner::Continuant),
    ("ʎ", Voicing::Voiced, Position::Palatal, Manner::Lateral),
    ("cç", Voicing::Unvoiced, Position::Palatal, Manner::Stop),
    // velar (incl. uvular and labio-velar)
    ("k", Voicing::Unvoiced, Position::Velar, Manner::Stop),
    ("g", Voicing::Voiced, Position::Velar, Manner::Stop),
    ("ɡ", Voicing::Voiced, Position::Velar, Manner::Stop),
    ("ɠ", Voicing::Voiced, Position::Velar, Manner::Stop),
    ("q", Voicing::Unvoiced, Position::Velar, Manner::Stop),
    ("ɢ", Voicing::Voiced, Position::Velar, Manner::Stop),
    ("ʛ", Voicing::Voiced, Position::Velar, Manner::Stop),
    ("ŋ", Voicing::Voiced, Position::Velar, Manner::Nasal),
    ("ɴ", Voicing::Voiced, Position::Velar, Manner::Nasal),
    ("x", Voicing::Unvoiced, Position::Velar, Manner::Continuant),
    ("ɣ", Voicing::Voiced, Position::Velar, Manner::Continuant),
    ("χ", Voicing::Unvoiced, Position::Velar, Manner::Continuant),
    ("ʁ", Voicing::Voiced, Position::Velar, Manner::Continuant),
    ("ɰ", Voicing::Voiced, Position::Velar, Manner::Continuant),
    ("w", Voicing::Voiced, Position::Velar, Manner::Continuant),
    ("ʍ", Voicing::Unvoiced, Position::Velar, Manner::Continuant),
    ("ʟ", Voicing::Voiced, Position::Velar, Manner::Lateral),
    ("ʀ", Voicing::Voiced, Position::Velar, Manner::Vibrant),
    ("kx", Voicing::Unvoiced, Position::Velar, Manner::Stop),
    ("kp", Voicing::Unvoiced, Position::Velar, Manner::Stop),
    ("gb", Voicing::Voiced, Position::Velar, Manner::Stop),
    ("ŋm", Voicing::Voiced, Position::Velar, Manner::Nasal),
    // glottal (incl. pharyngeal and epiglottal)
    ("h", Voicing::Unvoiced, Position::Glottal, Manner::Continuant),
    ("ɦ", Voicing::Voiced, Position::Glottal, Manner::Continuant),
    ("ʔ", Voicing::Unvoiced, Position::Glottal, Manner::Stop),
    ("ʡ", Voicing::Unvoiced, Position::Glottal, Manner::Stop),
    ("ħ", Voicing::Unvoiced, Position::Glottal, Manner::Continuant),
    ("ʕ", Voicing::Voiced, Position::Glottal, Manner::Continuant),
    ("ʜ", Voicing::Unvoiced, Position::Glottal, Manner::Continuant),
    ("ʢ", Voicing::Voiced, Position::Glottal, Manner::Continuant),
];

#[derive(Clone, Copy)]
enum FineHeight {
    Close,
    NearClose,
    CloseMid,
    Mid,
    OpenMid,
    NearOpen,
    Open,
}

#[rustfmt::skip]
const VOWELS: &[(&str, Roundedness, Backness, FineHeight)] = &[
    ("i", Roundedness::Unrounded, Backness::Front, FineHeight::Close),
    ("y", Roundedness::Rounded, Backness::Front, FineHeight::Close),
    ("ɨ", Roundedness::Unrounded, Backness::Central, FineHeight::Close),
    ("ʉ", Roundedness::Rounded, Backness::Central, FineHeight::Close),
    ("ɯ", Roundedness::Unrounded, Backness::Back, FineHeight::Close),
    ("u", Roundedness::Rounded, Backness::Back, FineHeight::Close),
    ("ɪ", Roundedness::Unrounded, Backness::Front, FineHeight::NearClose),
    ("ʏ", Roundedness::Rounded, Backness::Front, FineHeight::NearClose),
    ("ʊ", Roundedness::Rounded, Backness::Back, FineHeight::NearClose),
    ("e", Roundedness::Unrounded, Backness::Front, FineHeight::CloseMid),
    ("ø", Roundedness::Rounded, Backness::Front, FineHeight::CloseMid),
    ("ɘ", Roundedness::Unrounded, Backness::Central, FineHeight::CloseMid),
    ("ɵ", Roundedness::Rounded, Backness::Central, FineHeight::CloseMid),
    ("ɤ", Roundedness::Unrounded, Backness::Back, FineHeight::CloseMid),
    ("o", Roundedness::Rounded, Backness::Back, FineHeight::CloseMid),
    ("ə", Roundedness::Unrounded, Backness::Central, FineHeight::Mid),
    ("ɛ", Roundedness::Unrounded, Backness::Front, FineHeight::OpenMid),
    ("œ", Roundedness::Rounded, Backness::Front, FineHeight::OpenMid),
    ("ɜ", Roundedness::Unrounded, Backness::Central, FineHeight::OpenMid),
    ("ɞ", Roundedness::Rounded, Backness::Central, FineHeight::OpenMid),
    ("ʌ", Roundedness::Unrounded, Backness::Back, FineHeight::OpenMid),
    ("ɔ", Roundedness::Rounded, Backness::Back, FineHeight::OpenMid),
    ("æ", Roundedness::Unrounded, Backness::Front, FineHeight::NearOpen),
    ("ɐ", Roundedness::Unrounded, Backness::Central, FineHeight::NearOpen),
    ("a", Roundedness::Unrounded, Backness::Front, FineHeight::Open),
    ("ɶ", Roundedness::Rounded, Backness::Front, FineHeight::Open),
    ("ɑ", Roundedness::Unrounded, Backness::Back, FineHeight::Open),
    ("ɒ", Roundedness::Rounded, Backness::Back, FineHeight::Open),
];

fn vowel_profile(r: Roundedness, b: Backness, fine: FineHeight) -> SegmentProfile {
    let height = match fine {
        FineHeight::Close | FineHeight::NearClose => Height::High,
        FineHeight::CloseMid | FineHeight::Mid | FineHeight::OpenMid => Height::Mid,
        FineHeight::NearOpen | FineHeight::Open => Height::Low,
    };
    let half = match fine {
        FineHeight::Close | FineHeight::NearClose | FineHeight::CloseMid => Some(true),
        FineHeight::Mid => None,
        FineHeight::OpenMid | FineHeight::NearOpen | FineHeight::Open => Some(false),
    };
    let extreme = match (half, b) {
        (None, _) | (_, Backness::Central) => None,
        (Some(true), Backness::Back) => Some(Extreme::HighBack),
        (Some(true), Backness::Front) => Some(Extreme::HighFront),
        (Some(false), Backness::Back) => Some(Extreme::LowBack),
        (Some(false), Backness::Front) => Some(Extreme::LowFront),
    };
    SegmentProfile::vowel(r, height, b, extreme)
}

// Overlay marks stripped before lookup: aspiration, length, phonation,
// articulation diacritics, tone letters, ties, and secondary articulations
// other than labialization (which retargets the position instead).
const IGNORED_MARKS: &[char] = &[
    'ʰ', 'ʱ', 'ː', 'ˑ', '\u{0306}', '\u{0303}', '\u{0324}', '\u{0330}', '\u{0339}', '\u{031C}',
    '\u{031F}', '\u{0320}', '\u{0308}', '\u{033D}', '\u{031D}', '\u{031E}', '\u{0318}',
    '\u{0319}', '\u{0329}', '\u{032F}', '\u{02DE}', 'ʼ', 'ᵐ', 'ⁿ', 'ᵑ', 'ʲ', 'ˠ', 'ˤ',
    '\u{0334}', '\u{0361}', '\u{035C}', '˥', '˦', '˧', '˨', '˩', '¹', '²', '³', '⁴', '⁵',
    '\u{0301}', '\u{0300}', '\u{0302}', '\u{0304}', '\u{030C}',
];
const DEVOICE_MARKS: &[char] = &['\u{0325}', '\u{030A}'];
const LABIALIZE_MARK: char = 'ʷ';

/// Token-to-profile mapping with overlay handling and first-constituent
/// fallback for clusters and diphthongs.
#[derive(Debug, Clone)]
pub struct SegmentClassifier {
    map: BTreeMap<String, SegmentProfile>,
}

impl SegmentClassifier {
    pub fn builtin() -> Self {
        let mut map = BTreeMap::new();
        for &(tok, v, p, m) in CONSONANTS {
            map.insert(tok.to_string(), SegmentProfile::consonant(v, p, m));
        }
        for &(tok, r, b, h) in VOWELS {
            map.insert(tok.to_string(), vowel_profile(r, b, h));
        }
        SegmentClassifier { map }
    }

    pub fn classify(&self, token: &str) -> SegmentProfile {
        let token = token.trim();
        if token.is_empty() {
            return SegmentProfile::OTHER;
        }
        if let Some(p) = self.map.get(token) {
            return *p;
        }
        // strip overlays, remember the ones that change features
        let mut stripped = String::with_capacity(token.len());
        let mut devoice = false;
        let mut labialize = false;
        for ch in token.chars() {
            if IGNORED_MARKS.contains(&ch) {
                continue;
            }
            if DEVOICE_MARKS.contains(&ch) {
                devoice = true;
                continue;
            }
            if ch == LABIALIZE_MARK {
                labialize = true;
                continue;
            }
            stripped.push(ch);
        }
        let adjust = |mut p: SegmentProfile| {
            if p.sound_class == SoundClass::Consonant {
                if devoice {
                    p.voicing = Some(Voicing::Unvoiced);
                }
                if labialize {
                    p.position = Some(Position::Labial);
                }
            }
            p
        };
        if let Some(p) = self.map.get(stripped.as_str()) {
            return adjust(*p);
        }
        // longest matching prefix: first constituent of a cluster/diphthong
        let chars: Vec<char> = stripped.chars().collect();
        for end in (1..chars.len()).rev() {
            let prefix: String = chars[..end].iter().collect();
            if let Some(p) = self.map.get(prefix.as_str()) {
                return adjust(*p);
            }
        }
        log::debug!("unclassifiable segment token `{token}`");
        SegmentProfile::OTHER
    }

    /// Writes the mapping as CSV (`token,sound_class,voicing,...,extreme`).
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), PhonologyError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "token",
            "sound_class",
            "voicing",
            "position",
            "manner",
            "roundedness",
            "height",
            "backness",
            "extreme",
        ])?;
        fn cell<T: fmt::Display>(v: Option<T>) -> String {
            v.map(|x| x.to_string()).unwrap_or_default()
        }
        for (tok, p) in &self.map {
            w.write_record([
                tok.clone(),
                p.sound_class.to_string(),
                cell(p.voicing),
                cell(p.position),
                cell(p.manner),
                cell(p.roundedness),
                cell(p.height),
                cell(p.backness),
                cell(p.extreme),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a mapping in the format produced by [`write_csv`](Self::write_csv).
    pub fn read_csv<R: Read>(input: R) -> Result<Self, PhonologyError> {
        let mut rdr = csv::Reader::from_reader(input);
        let mut map = BTreeMap::new();
        fn parse_opt<T: FromStr<Err = PhonologyError>>(
            s: &str,
            row: usize,
        ) -> Result<Option<T>, PhonologyError> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse::<T>().map(Some).map_err(|e| PhonologyError::BadMappingRow {
                    row,
                    message: e.to_string(),
                })
            }
        }
        for (i, rec) in rdr.records().enumerate() {
            let row = i + 2; // 1-based, after header
            let rec = rec?;
            if rec.len() != 9 {
                return Err(PhonologyError::BadMappingRow {
                    row,
                    message: format!("expected 9 columns, got {}", rec.len()),
                });
            }
            let sound_class = match &rec[1] {
                "consonant" => SoundClass::Consonant,
                "vowel" => SoundClass::Vowel,
                "other" => SoundClass::Other,
                other => {
                    return Err(PhonologyError::BadMappingRow {
                        row,
                        message: format!("unknown sound class `{other}`"),
                    })
                }
            };
            let profile = SegmentProfile {
                sound_class,
                voicing: parse_opt(&rec[2], row)?,
                position: parse_opt(&rec[3], row)?,
                manner: parse_opt(&rec[4], row)?,
                roundedness: parse_opt(&rec[5], row)?,
                height: parse_opt(&rec[6], row)?,
                backness: parse_opt(&rec[7], row)?,
                extreme: parse_opt(&rec[8], row)?,
            };
            map.insert(rec[0].to_string(), profile);
        }
        Ok(SegmentClassifier { map })
    }
}

fn builtin() -> &'static SegmentClassifier {
    static BUILTIN: OnceLock<SegmentClassifier> = OnceLock::new();
    BUILTIN.get_or_init(SegmentClassifier::builtin)
}

/// Classifies one segment token with the builtin mapping.
pub fn classify_segment(token: &str) -> SegmentProfile {
    builtin().classify(token)
}

/// Per-(language, concept) counts over the levels of one category.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CategoryCountTable {
    pub category: Category,
    pub levels: Vec<String>,
    pub rows: Vec<CountRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CountRow {
    pub language_id: String,
    pub concept_id: String,
    pub counts: Vec<u64>,
    pub total: u64,
}

/// Counts category levels over all forms, aggregating synonymous forms of the
/// same (language, concept) pair into one row. Pairs with no participating
/// segments are dropped.
pub fn count_features(
    corpus: &Corpus,
    category: Category,
    classifier: Option<&SegmentClassifier>,
) -> CategoryCountTable {
    let classifier = classifier.unwrap_or_else(|| builtin());
    let levels: Vec<String> = category.levels().iter().map(|s| s.to_string()).collect();
    let k = levels.len();
    let mut acc: BTreeMap<(usize, usize), Vec<u64>> = BTreeMap::new();
    for form in &corpus.forms {
        let li = corpus.language_index(&form.language_id).expect("validated form");
        let ci = corpus.concept_index(&form.concept_id).expect("validated form");
        for token in &form.segments {
            let profile = classifier.classify(token);
            if let Some(level) = category.level_of(&profile) {
                acc.entry((li, ci)).or_insert_with(|| vec![0; k])[level] += 1;
            }
        }
    }
    let rows = acc
        .into_iter()
        .map(|((li, ci), counts)| {
            let total = counts.iter().sum();
            CountRow {
                language_id: corpus.languages[li].id.clone(),
                concept_id: corpus.concepts[ci].id.clone(),
                counts,
                total,
            }
        })
        .filter(|r| r.total > 0)
        .collect();
    CategoryCountTable { category, levels, rows }
}

impl CategoryCountTable {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), PhonologyError> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["language_id".to_string(), "concept_id".to_string()];
        header.extend(self.levels.iter().cloned());
        header.push("total".to_string());
        w.write_record(&header)?;
        for row in &self.rows {
            let mut rec = vec![row.language_id.clone(), row.concept_id.clone()];
            rec.extend(row.counts.iter().map(|c| c.to_string()));
            rec.push(row.total.to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Count rows turned into compressed proportions suitable for a Dirichlet
/// likelihood: raw shares are squeezed off the simplex boundary via
/// y' = (y (n - 1) + 1/K) / n with n the number of rows in the table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProportionTable {
    pub category: Category,
    pub levels: Vec<String>,
    pub rows: Vec<ProportionRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProportionRow {
    pub language_id: String,
    pub concept_id: String,
    pub proportions: Vec<f64>,
    pub total: u64,
}

pub fn to_proportions(table: &CategoryCountTable) -> Result<ProportionTable, PhonologyError> {
    let n = table.rows.len();
    if n < 2 {
        return Err(PhonologyError::TooFewRows(n));
    }
    let n = n as f64;
    let k = table.levels.len() as f64;
    let rows = table
        .rows
        .iter()
        .map(|row| {
            let total = row.total as f64;
            let proportions = row
                .counts
                .iter()
                .map(|&c| {
                    let y = c as f64 / total;
                    (y * (n - 1.0) + 1.0 / k) / n
                })
                .collect();
            ProportionRow {
                language_id: row.language_id.clone(),
                concept_id: row.concept_id.clone(),
                proportions,
                total: row.total,
            }
        })
        .collect();
    Ok(ProportionTable {
        category: table.category,
        levels: table.levels.clone(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_vowel_rows() {
        let a = classify_segment("a");
        assert_eq!(a.sound_class, SoundClass::Vowel);
        assert_eq!(a.roundedness, Some(Roundedness::Unrounded));
        assert_eq!(a.height, Some(Height::Low));
        assert_eq!(a.backness, Some(Backness::Front));
        assert_eq!(a.extreme, Some(Extreme::LowFront));

        let i = classify_segment("i");
        assert_eq!(i.height, Some(Height::High));
        assert_eq!(i.backness, Some(Backness::Front));
        assert_eq!(i.roundedness, Some(Roundedness::Unrounded));
        assert_eq!(i.extreme, Some(Extreme::HighFront));

        let u = classify_segment("u");
        assert_eq!(u.height, Some(Height::High));
        assert_eq!(u.backness, Some(Backness::Back));
        assert_eq!(u.roundedness, Some(Roundedness::Rounded));
        assert_eq!(u.extreme, Some(Extreme::HighBack));

        // close-mid vowels land in mid for the three-way height but on the
        // high side of the two-way extreme split
        let o = classify_segment("o");
        assert_eq!(o.height, Some(Height::Mid));
        assert_eq!(o.backness, Some(Backness::Back));
        assert_eq!(o.roundedness, Some(Roundedness::Rounded));
        assert_eq!(o.extreme, Some(Extreme::HighBack));

        let e = classify_segment("e");
        assert_eq!(e.height, Some(Height::Mid));
        assert_eq!(e.backness, Some(Backness::Front));
        assert_eq!(e.roundedness, Some(Roundedness::Unrounded));
        assert_eq!(e.extreme, Some(Extreme::HighFront));
    }

    #[test]
    fn reference_consonant_rows() {
        let n = classify_segment("n");
        assert_eq!(
            (n.voicing, n.position, n.manner),
            (Some(Voicing::Voiced), Some(Position::Alveolar), Some(Manner::Nasal))
        );
        let m = classify_segment("m");
        assert_eq!(
            (m.voicing, m.position, m.manner),
            (Some(Voicing::Voiced), Some(Position::Labial), Some(Manner::Nasal))
        );
        let k = classify_segment("k");
        assert_eq!(
            (k.voicing, k.position, k.manner),
            (Some(Voicing::Unvoiced), Some(Position::Velar), Some(Manner::Stop))
        );
        let t = classify_segment("t");
        assert_eq!(
            (t.voicing, t.position, t.manner),
            (Some(Voicing::Unvoiced), Some(Position::Alveolar), Some(Manner::Stop))
        );
        let l = classify_segment("l");
        assert_eq!(
            (l.voicing, l.position, l.manner),
            (Some(Voicing::Voiced), Some(Position::Alveolar), Some(Manner::Lateral))
        );
    }

    #[test]
    fn overlays_and_fallbacks() {
        // aspiration/length ignored
        assert_eq!(classify_segment("kʰ"), classify_segment("k"));
        assert_eq!(classify_segment("aː"), classify_segment("a"));
        // tie bar stripped
        assert_eq!(classify_segment("t\u{0361}ʃ"), classify_segment("tʃ"));
        // devoicing ring
        let n0 = classify_segment("n\u{0325}");
        assert_eq!(n0.voicing, Some(Voicing::Unvoiced));
        assert_eq!(n0.manner, Some(Manner::Nasal));
        // labialization retargets position
        let kw = classify_segment("kʷ");
        assert_eq!(kw.position, Some(Position::Labial));
        assert_eq!(kw.manner, Some(Manner::Stop));
        // diphthong falls back to first vowel
        assert_eq!(classify_segment("ai"), classify_segment("a"));
        assert_eq!(classify_segment("ou̯"), classify_segment("o"));
        // unknowns are other
        assert_eq!(classify_segment("+").sound_class, SoundClass::Other);
        assert_eq!(classify_segment("").sound_class, SoundClass::Other);
    }

    #[test]
    fn central_and_mid_vowels_have_no_extreme() {
        assert_eq!(classify_segment("ə").extreme, None);
        assert_eq!(classify_segment("ɨ").extreme, None);
        assert_eq!(classify_segment("ɐ").extreme, None);
        // open-mid back is on the low side
        assert_eq!(classify_segment("ɔ").extreme, Some(Extreme::LowBack));
        assert_eq!(classify_segment("ɛ").extreme, Some(Extreme::LowFront));
    }

    #[test]
    fn profile_field_consistency() {
        let c = SegmentClassifier::builtin();
        for (tok, p) in &c.map {
            match p.sound_class {
                SoundClass::Consonant => {
                    assert!(
                        p.voicing.is_some() && p.position.is_some() && p.manner.is_some(),
                        "consonant {tok} missing features"
                    );
                    assert!(p.roundedness.is_none() && p.height.is_none());
                }
                SoundClass::Vowel => {
                    assert!(
                        p.roundedness.is_some() && p.height.is_some() && p.backness.is_some(),
                        "vowel {tok} missing features"
                    );
                    assert!(p.voicing.is_none() && p.manner.is_none());
                    if p.backness == Some(Backness::Central) {
                        assert_eq!(p.extreme, None, "central vowel {tok} must lack extreme");
                    }
                }
                SoundClass::Other => {}
            }
        }
    }

    #[test]
    fn mapping_csv_round_trip() {
        let c = SegmentClassifier::builtin();
        let mut buf = Vec::new();
        c.write_csv(&mut buf).unwrap();
        let c2 = SegmentClassifier::read_csv(buf.as_slice()).unwrap();
        for (tok, p) in &c.map {
            assert_eq!(c2.map.get(tok), Some(p), "token {tok}");
        }
        assert_eq!(c.map.len(), c2.map.len());
    }

    #[test]
    fn category_levels_are_sorted_and_named() {
        for cat in Category::ALL {
            let mut sorted = cat.levels().to_vec();
            sorted.sort_unstable();
            assert_eq!(&sorted, cat.levels(), "{cat} levels must be sorted");
            assert_eq!(cat.name().parse::<Category>().unwrap(), *cat);
        }
        assert!("no_such_category".parse::<Category>().is_err());
    }

    #[test]
    fn combined_category_skips_unlisted_combinations() {
        // unvoiced lateral is not a manner+voicing level
        let lh = classify_segment("ɬ");
        assert_eq!(Category::MannerVoicing.level_of(&lh), None);
        assert!(Category::Manner.level_of(&lh).is_some());
        assert!(Category::Voicing.level_of(&lh).is_some());
        // schwa participates in height but not in extreme
        let schwa = classify_segment("ə");
        assert!(Category::Height.level_of(&schwa).is_some());
        assert_eq!(Category::Extreme.level_of(&schwa), None);
        assert_eq!(Category::ExtremeRoundedness.level_of(&schwa), None);
    }
}
