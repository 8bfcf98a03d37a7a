//! The four query variants rendered from a scene.

use serde::{Deserialize, Serialize};

use super::{SceneSpec, ShapeColor, ShapeInstance, ShapeKind};
use crate::coords::{NormalizedBox, QuantizerConfig};
use crate::query::{Query, RegionSpec, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryMode {
    /// Caption plus position tokens and `color kind` regional descriptions.
    PositionTokens,
    /// Regions folded into the caption as size / aspect / location words.
    PositionWords,
    CaptionOnly,
    /// Position tokens with the bare kind label as description.
    OdLabels,
}

impl QueryMode {
    pub const ALL: [QueryMode; 4] =
        [QueryMode::PositionTokens, QueryMode::PositionWords, QueryMode::CaptionOnly, QueryMode::OdLabels];

    pub fn name(self) -> &'static str {
        match self {
            QueryMode::PositionTokens => "position_tokens",
            QueryMode::PositionWords => "position_words",
            QueryMode::CaptionOnly => "caption_only",
            QueryMode::OdLabels => "od_labels",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

/// Area tercile boundaries, as fractions of the canvas.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AreaTerciles {
    pub small_max: f64,
    pub medium_max: f64,
}

impl AreaTerciles {
    /// Empirical terciles of the given box areas.
    pub fn fit(areas: &[f64]) -> Option<Self> {
        if areas.len() < 3 {
            return None;
        }
        let mut sorted = areas.to_vec();
        sorted.sort_by(f64::total_cmp);
        let at = |q: f64| sorted[((sorted.len() as f64 * q).ceil() as usize).saturating_sub(1)];
        Some(Self { small_max: at(1.0 / 3.0), medium_max: at(2.0 / 3.0) })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PositionWordRules {
    pub area: AreaTerciles,
    /// `w / h` below this is "tall".
    pub tall_below: f64,
    /// `w / h` above this is "long".
    pub long_above: f64,
}

impl PositionWordRules {
    pub fn new(area: AreaTerciles) -> Self {
        Self { area, tall_below: 0.75, long_above: 1.33 }
    }

    pub fn size_word(&self, b: &NormalizedBox) -> &'static str {
        let a = b.area();
        if a <= self.area.small_max {
            "small"
        } else if a <= self.area.medium_max {
            "medium"
        } else {
            "large"
        }
    }

    pub fn aspect_word(&self, b: &NormalizedBox) -> &'static str {
        let r = b.width() / b.height();
        if r < self.tall_below {
            "tall"
        } else if r > self.long_above {
            "long"
        } else {
            "square-shaped"
        }
    }
}

const LOCATIONS: [[&str; 3]; 3] = [
    ["top left", "top", "top right"],
    ["left", "center", "right"],
    ["bottom left", "bottom", "bottom right"],
];

/// Third of the unit interval containing `c`; boundaries go to the middle third.
fn grid_cell(c: f64) -> usize {
    if c < 1.0 / 3.0 {
        0
    } else if c > 2.0 / 3.0 {
        2
    } else {
        1
    }
}

/// One of nine location names from the box centre.
pub fn location_word(b: &NormalizedBox) -> &'static str {
    let (cx, cy) = b.center();
    LOCATIONS[grid_cell(cy)][grid_cell(cx)]
}

fn object_phrase(s: &ShapeInstance) -> String {
    format!("a {} {}", s.color.name(), s.kind.name())
}

fn base_caption(scene: &SceneSpec) -> String {
    let parts: Vec<String> = scene.shapes.iter().map(object_phrase).collect();
    format!("a scene with {}", parts.join(" and "))
}

fn positioned_phrase(s: &ShapeInstance, rules: &PositionWordRules) -> String {
    format!(
        "a {} {} {} {} in the {}",
        rules.size_word(&s.bbox),
        rules.aspect_word(&s.bbox),
        s.color.name(),
        s.kind.name(),
        location_word(&s.bbox)
    )
}

/// Render the scene's query under `mode`. Region boxes are the scene boxes verbatim.
pub fn scene_to_query(scene: &SceneSpec, mode: QueryMode, rules: &PositionWordRules) -> Query {
    let region = |s: &ShapeInstance, text: String| {
        RegionSpec::new(s.bbox, &text).expect("template descriptions are non-empty")
    };
    let (caption, regions) = match mode {
        QueryMode::CaptionOnly => (base_caption(scene), Vec::new()),
        QueryMode::PositionTokens => (
            base_caption(scene),
            scene.shapes.iter().map(|s| region(s, s.label().description())).collect(),
        ),
        QueryMode::OdLabels => (
            base_caption(scene),
            scene.shapes.iter().map(|s| region(s, s.kind.name().to_string())).collect(),
        ),
        QueryMode::PositionWords => {
            let parts: Vec<String> = scene.shapes.iter().map(|s| positioned_phrase(s, rules)).collect();
            (format!("a scene with {}", parts.join(" and ")), Vec::new())
        }
    };
    Query::new(&caption, regions).expect("templates contain no reserved characters")
}

/// Every word the caption templates can produce.
pub fn lexicon() -> Vec<&'static str> {
    let mut words = vec![
        "a", "scene", "with", "and", "in", "the", "small", "medium", "large", "long", "square-shaped",
        "tall", "top", "bottom", "left", "right", "center",
    ];
    words.extend(ShapeColor::ALL.iter().map(|c| c.name()));
    words.extend(ShapeKind::ALL.iter().map(|k| k.name()));
    words
}

pub fn scene_lexicon_vocab(quant: &QuantizerConfig) -> Vocabulary {
    Vocabulary::new(lexicon(), quant)
}
