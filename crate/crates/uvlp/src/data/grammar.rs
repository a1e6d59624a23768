//! Template grammar for captions and questions, plus its own consistency
//! checker.
//!
//! The checker is the inverse of generation: it parses a caption back
//! through the templates and verifies every mentioned object and the spatial
//! relation against the region records themselves (class from `class_probs`,
//! attribute from the feature block, geometry from the boxes). Tests lean on
//! it as an independent oracle, so it deliberately reads regions rather than
//! trusting any generation metadata.

use serde::{Deserialize, Serialize};

use super::scene::Region;

/// Minimum region feature width; grammars whose one-hot blocks are narrower
/// are zero-padded up to this so the default configuration has a stable
/// input dimension.
pub const MIN_FEATURE_DIM: usize = 32;

/// Spatial relation between two objects, derived from box centers. The axis
/// with the larger center displacement wins; smaller y is "above" (image
/// coordinates).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    Left,
    Right,
    Above,
    Below,
}

impl Relation {
    /// Relation of the region centered at `a` relative to `b`.
    pub fn between(a: (f64, f64), b: (f64, f64)) -> Relation {
        let dx = a.0 - b.0;
        let dy = a.1 - b.1;
        if dx.abs() >= dy.abs() {
            if dx < 0.0 {
                Relation::Left
            } else {
                Relation::Right
            }
        } else if dy < 0.0 {
            Relation::Above
        } else {
            Relation::Below
        }
    }
}

/// Phrase realizations of the four relations.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RelationPhrases {
    pub left: String,
    pub right: String,
    pub above: String,
    pub below: String,
}

impl RelationPhrases {
    pub fn phrase(&self, rel: Relation) -> &str {
        match rel {
            Relation::Left => &self.left,
            Relation::Right => &self.right,
            Relation::Above => &self.above,
            Relation::Below => &self.below,
        }
    }

    fn all(&self) -> [(Relation, &str); 4] {
        [
            (Relation::Left, &self.left),
            (Relation::Right, &self.right),
            (Relation::Above, &self.above),
            (Relation::Below, &self.below),
        ]
    }
}

/// One template per question kind. `{class}` and `{attr}` are the slots.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct QuestionTemplates {
    pub color: String,
    pub size: String,
    pub class: String,
    pub count: String,
}

/// The kinds of questions the grammar can pose.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuestionKind {
    Color,
    Size,
    Class,
    Count,
}

/// Declarative scene grammar: object classes, attributes, relations, and the
/// caption/question templates that realize them. Loadable from a JSON file;
/// `GrammarSpec::default()` is the built-in desk grammar.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GrammarSpec {
    pub classes: Vec<String>,
    pub colors: Vec<String>,
    pub sizes: Vec<String>,
    pub relations: RelationPhrases,
    /// Caption templates over slots {attr0} {class0} {rel} {attr1} {class1}.
    /// Every template must mention both objects and the relation.
    pub caption_templates: Vec<String>,
    pub question_templates: QuestionTemplates,
    /// Number words; `numbers[n]` realizes the count n.
    pub numbers: Vec<String>,
}

impl Default for GrammarSpec {
    fn default() -> Self {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        GrammarSpec {
            classes: s(&[
                "square", "circle", "triangle", "star", "diamond", "hexagon", "pentagon", "oval",
                "cross", "arrow", "heart", "ring", "cube", "cone", "spiral", "wedge",
            ]),
            colors: s(&[
                "red", "blue", "green", "yellow", "purple", "orange", "black", "white",
            ]),
            sizes: s(&["tiny", "small", "large", "huge"]),
            relations: RelationPhrases {
                left: "left of".into(),
                right: "right of".into(),
                above: "above".into(),
                below: "below".into(),
            },
            caption_templates: s(&[
                "a {attr0} {class0} {rel} a {attr1} {class1}",
                "the {attr0} {class0} is {rel} the {attr1} {class1}",
                "there is a {attr0} {class0} {rel} a {attr1} {class1}",
                "a scene with a {attr0} {class0} {rel} a {attr1} {class1}",
            ]),
            question_templates: QuestionTemplates {
                color: "what color is the {class}".into(),
                size: "what size is the {class}".into(),
                class: "what is the {attr} thing".into(),
                count: "how many objects are there".into(),
            },
            numbers: s(&[
                "zero", "one", "two", "three", "four", "five", "six", "seven", "eight",
            ]),
        }
    }
}

impl GrammarSpec {
    /// Every string whose words can appear in text; feeds vocabulary
    /// construction.
    pub(super) fn word_sources(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        out.extend(self.classes.iter().map(String::as_str));
        out.extend(self.colors.iter().map(String::as_str));
        out.extend(self.sizes.iter().map(String::as_str));
        out.extend([
            self.relations.left.as_str(),
            self.relations.right.as_str(),
            self.relations.above.as_str(),
            self.relations.below.as_str(),
        ]);
        out.extend(self.caption_templates.iter().map(String::as_str));
        out.extend([
            self.question_templates.color.as_str(),
            self.question_templates.size.as_str(),
            self.question_templates.class.as_str(),
            self.question_templates.count.as_str(),
        ]);
        out.extend(self.numbers.iter().map(String::as_str));
        out
    }

    /// Attributes are the colors followed by the sizes; the index order is
    /// load-bearing for the feature one-hot layout.
    pub fn attribute_count(&self) -> usize {
        self.colors.len() + self.sizes.len()
    }

    /// Word form of a global attribute index.
    pub fn attribute(&self, idx: usize) -> &str {
        if idx < self.colors.len() {
            &self.colors[idx]
        } else {
            &self.sizes[idx - self.colors.len()]
        }
    }

    pub fn is_color_attribute(&self, idx: usize) -> bool {
        idx < self.colors.len()
    }

    /// Width of the region feature vectors this grammar produces: class
    /// one-hot block, attribute one-hot block, then zero padding up to
    /// `MIN_FEATURE_DIM` so small grammars still leave the encoder a few
    /// uninformative dimensions to ignore.
    pub fn feature_dim(&self) -> usize {
        (self.classes.len() + self.attribute_count()).max(MIN_FEATURE_DIM)
    }

    /// Structural sanity for loaded grammar files.
    pub fn validate(&self) -> Result<(), super::DataError> {
        let err = |m: &str| Err(super::DataError::Config(m.to_string()));
        if self.classes.len() < 8 {
            return err("grammar needs at least 8 classes so distractors can avoid object classes");
        }
        if self.colors.is_empty() || self.sizes.is_empty() {
            return err("grammar needs at least one color and one size");
        }
        if self.caption_templates.is_empty() {
            return err("grammar needs at least one caption template");
        }
        for t in &self.caption_templates {
            for slot in ["{class0}", "{class1}", "{rel}"] {
                if !t.contains(slot) {
                    return err(&format!("caption template '{t}' is missing {slot}"));
                }
            }
        }
        if self.numbers.len() < 5 {
            return err("grammar needs number words for counts up to four");
        }
        Ok(())
    }

    /// Fills a caption template. `objs` supplies (class word, attr word) for
    /// objects 0 and 1 in template order.
    pub(super) fn realize_caption(
        &self,
        template: &str,
        objs: [(&str, &str); 2],
        rel: Relation,
    ) -> String {
        template
            .replace("{attr0}", objs[0].1)
            .replace("{class0}", objs[0].0)
            .replace("{attr1}", objs[1].1)
            .replace("{class1}", objs[1].0)
            .replace("{rel}", self.relations.phrase(rel))
    }

    /// Checks a caption against the regions it claims to describe: it must
    /// parse under some template, every mentioned (attribute, class) pair
    /// must name an actual region, and the spatial relation must hold
    /// between those regions' boxes.
    pub fn caption_consistent(&self, caption: &str, regions: &[Region]) -> bool {
        let words: Vec<&str> = caption.split_whitespace().collect();
        let Some(parse) = self.parse_caption(&words) else {
            return false;
        };
        let r0 = regions.iter().find(|r| {
            self.region_matches(r, &parse.class0, parse.attr0.as_deref())
        });
        let r1 = regions.iter().find(|r| {
            self.region_matches(r, &parse.class1, parse.attr1.as_deref())
        });
        let (Some(r0), Some(r1)) = (r0, r1) else {
            return false;
        };
        Relation::between(r0.center(), r1.center()) == parse.rel
    }

    /// True when a region's records say it is `class` (and has `attr`, when
    /// one was mentioned). Class is read from `class_probs`, the attribute
    /// from the feature one-hot block.
    fn region_matches(&self, region: &Region, class: &str, attr: Option<&str>) -> bool {
        let class_idx = match self.classes.iter().position(|c| c == class) {
            Some(i) => i,
            None => return false,
        };
        if argmax(&region.class_probs) != class_idx {
            return false;
        }
        match attr {
            None => true,
            Some(a) => {
                let Some(attr_idx) = (0..self.attribute_count()).find(|&i| self.attribute(i) == a)
                else {
                    return false;
                };
                let block =
                    &region.features[self.classes.len()..self.classes.len() + self.attribute_count()];
                // Attributed objects carry a 1.0 one-hot plus noise; the 0.5
                // threshold separates them from attribute-free distractors.
                argmax(block) == attr_idx && block[attr_idx] > 0.5
            }
        }
    }

    fn parse_caption(&self, words: &[&str]) -> Option<CaptionParse> {
        for template in &self.caption_templates {
            for (rel, phrase) in self.relations.all() {
                let expanded = template.replace("{rel}", phrase);
                let pattern: Vec<&str> = expanded.split_whitespace().collect();
                if pattern.len() != words.len() {
                    continue;
                }
                if let Some(parse) = self.unify(&pattern, words, rel) {
                    return Some(parse);
                }
            }
        }
        None
    }

    /// Position-wise unification once {rel} has been expanded: slots must
    /// bind to legal class/attribute words, literals must match exactly.
    fn unify(&self, pattern: &[&str], words: &[&str], rel: Relation) -> Option<CaptionParse> {
        let mut parse = CaptionParse {
            class0: String::new(),
            class1: String::new(),
            attr0: None,
            attr1: None,
            rel,
        };
        for (&p, &w) in pattern.iter().zip(words) {
            match p {
                "{class0}" | "{class1}" => {
                    if !self.classes.iter().any(|c| c == w) {
                        return None;
                    }
                    if p == "{class0}" {
                        parse.class0 = w.to_string();
                    } else {
                        parse.class1 = w.to_string();
                    }
                }
                "{attr0}" | "{attr1}" => {
                    if !(0..self.attribute_count()).any(|i| self.attribute(i) == w) {
                        return None;
                    }
                    if p == "{attr0}" {
                        parse.attr0 = Some(w.to_string());
                    } else {
                        parse.attr1 = Some(w.to_string());
                    }
                }
                literal => {
                    if literal != w {
                        return None;
                    }
                }
            }
        }
        if parse.class0.is_empty() || parse.class1.is_empty() {
            return None;
        }
        Some(parse)
    }
}

struct CaptionParse {
    class0: String,
    class1: String,
    attr0: Option<String>,
    attr1: Option<String>,
    rel: Relation,
}

pub(super) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}
