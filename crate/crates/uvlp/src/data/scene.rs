//! Synthetic scene generation: regions, a caption, and QA pairs from a
//! seeded RNG and a grammar.
//!
//! A scene contains 2–4 *objects* — regions with a distinct class and
//! exactly one attribute (a color or a size) — plus *distractor* regions
//! with classes unused by the objects and no attribute, filling up to N.
//! The caption describes objects 0 and 1 and the spatial relation between
//! their boxes; questions ask about attributes, classes, and the object
//! count. Everything a caption or answer claims is recoverable from the
//! region records alone, which is what makes the grammar's consistency
//! checker usable as an oracle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::grammar::{GrammarSpec, QuestionKind, Relation};
use super::{DataError, Vocab};
use crate::rngx::{sample_distinct, shuffle, standard_normal};

/// Questions generated per scene.
pub const QA_PER_SCENE: usize = 2;

/// Margin by which the dominant center-displacement axis must beat the other
/// when placing the two captioned objects, so the stated relation is
/// unambiguous.
const RELATION_MARGIN: f64 = 0.1;

/// One image region: appearance features, a class distribution, and box
/// geometry (x1, y1, x2, y2, relative area), all in model-ready form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub features: Vec<f64>,
    pub class_probs: Vec<f64>,
    pub geometry: [f64; 5],
}

impl Region {
    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.geometry[0] + self.geometry[2]),
            0.5 * (self.geometry[1] + self.geometry[3]),
        )
    }
}

/// A question about a scene. `answer` is the word itself; `answer_id` and
/// `soft_labels` stay empty until an answer vocabulary is built over the
/// whole dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaPair {
    pub question: Vec<usize>,
    pub answer: String,
    pub answer_id: Option<usize>,
    pub soft_labels: Vec<f64>,
}

/// A full training example: regions, caption token ids (unpadded), and QA
/// pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneExample {
    pub scene_id: u64,
    pub regions: Vec<Region>,
    pub caption: Vec<usize>,
    pub qa: Vec<QaPair>,
}

/// An object before it is lowered into a region record.
struct DrawnObject {
    class: usize,
    attr: usize,
    geometry: [f64; 5],
}

/// Generates one scene deterministically from `rng_seed`. Pure in
/// (seed, spec, n, noise): the draw order below is fixed and documented so
/// identical inputs give bitwise-identical output.
///
/// Draw order: object count m → m distinct object classes → per-object
/// attribute (color/size coin, then index) → boxes for objects 0 and 1
/// (redrawn together until the relation margin holds) → boxes for remaining
/// objects → distractor classes (distinct, unused) → distractor boxes →
/// region order shuffle → per-region feature noise then class-logit noise →
/// caption template index → QA pool shuffle.
pub fn generate_scene(
    rng_seed: u64,
    spec: &GrammarSpec,
    n: usize,
    noise: f64,
) -> Result<SceneExample, DataError> {
    spec.validate()?;
    if !(noise >= 0.0) {
        return Err(DataError::Config(format!(
            "noise must be a nonnegative real, got {noise}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let vocab = Vocab::from_grammar(spec);

    let m = rng.random_range(2..=4usize);
    if n < m {
        return Err(DataError::Config(format!(
            "scene drew {m} objects but only N={n} region slots are configured"
        )));
    }
    if spec.classes.len() < n {
        return Err(DataError::Config(format!(
            "N={n} regions need {n} distinct classes but the grammar declares only {}",
            spec.classes.len()
        )));
    }

    let object_classes = sample_distinct(&mut rng, spec.classes.len(), m);
    let attrs: Vec<usize> = (0..m)
        .map(|_| {
            if rng.random_bool(0.5) {
                rng.random_range(0..spec.colors.len())
            } else {
                spec.colors.len() + rng.random_range(0..spec.sizes.len())
            }
        })
        .collect();

    // Boxes for the two captioned objects, redrawn as a pair until one axis
    // dominates by the margin; remaining objects are unconstrained.
    let (box0, box1) = loop {
        let a = draw_box(&mut rng);
        let b = draw_box(&mut rng);
        let (ca, cb) = (box_center(&a), box_center(&b));
        let dx = (ca.0 - cb.0).abs();
        let dy = (ca.1 - cb.1).abs();
        if (dx - dy).abs() >= RELATION_MARGIN {
            break (a, b);
        }
    };
    let mut objects: Vec<DrawnObject> = Vec::with_capacity(m);
    for i in 0..m {
        let geometry = match i {
            0 => box0,
            1 => box1,
            _ => draw_box(&mut rng),
        };
        objects.push(DrawnObject {
            class: object_classes[i],
            attr: attrs[i],
            geometry,
        });
    }

    // Distractors take classes the objects did not use, so every class in
    // the scene is unique and class-mention questions stay well-posed.
    let unused: Vec<usize> = (0..spec.classes.len())
        .filter(|c| !object_classes.contains(c))
        .collect();
    let picks = sample_distinct(&mut rng, unused.len(), n - m);
    let distractor_classes: Vec<usize> = picks.iter().map(|&i| unused[i]).collect();
    let distractor_boxes: Vec<[f64; 5]> = (0..n - m).map(|_| draw_box(&mut rng)).collect();

    // Slot assignment: objects would otherwise always occupy the first
    // columns, so shuffle which region slot each entity lands in.
    let mut order: Vec<usize> = (0..n).collect();
    shuffle(&mut rng, &mut order);

    let d_in = spec.feature_dim();
    let l = spec.classes.len();
    let mut regions: Vec<Region> = Vec::with_capacity(n);
    for &entity in &order {
        let (class, attr, geometry) = if entity < m {
            let o = &objects[entity];
            (o.class, Some(o.attr), o.geometry)
        } else {
            (
                distractor_classes[entity - m],
                None,
                distractor_boxes[entity - m],
            )
        };
        let mut features = vec![0.0; d_in];
        features[class] = 1.0;
        if let Some(a) = attr {
            features[l + a] = 1.0;
        }
        for f in features.iter_mut() {
            *f += noise * standard_normal(&mut rng);
        }
        let mut logits = vec![0.0; l];
        logits[class] = 4.0;
        for z in logits.iter_mut() {
            *z += noise * standard_normal(&mut rng);
        }
        regions.push(Region {
            features,
            class_probs: softmax(&logits),
            geometry,
        });
    }

    // Caption: objects 0 and 1 plus the relation their boxes actually have.
    let rel = Relation::between(box_center(&box0), box_center(&box1));
    let template = &spec.caption_templates[rng.random_range(0..spec.caption_templates.len())];
    let caption_text = spec.realize_caption(
        template,
        [
            (&spec.classes[objects[0].class], spec.attribute(objects[0].attr)),
            (&spec.classes[objects[1].class], spec.attribute(objects[1].attr)),
        ],
        rel,
    );
    let caption: Vec<usize> = caption_text
        .split_whitespace()
        .map(|w| vocab.id(w).unwrap_or(super::UNK))
        .collect();

    let qa = draw_questions(&mut rng, spec, &vocab, &objects, m)?;

    Ok(SceneExample {
        scene_id: rng_seed,
        regions,
        caption,
        qa,
    })
}

/// Enumerates every well-posed question, shuffles, and keeps
/// `QA_PER_SCENE`. Attribute questions are always well-posed (classes are
/// unique scene-wide); class questions require the attribute to be unique
/// among the objects; the count question is always available.
fn draw_questions(
    rng: &mut ChaCha8Rng,
    spec: &GrammarSpec,
    vocab: &Vocab,
    objects: &[DrawnObject],
    m: usize,
) -> Result<Vec<QaPair>, DataError> {
    let mut pool: Vec<(QuestionKind, usize)> = Vec::new();
    for (i, o) in objects.iter().enumerate() {
        if spec.is_color_attribute(o.attr) {
            pool.push((QuestionKind::Color, i));
        } else {
            pool.push((QuestionKind::Size, i));
        }
    }
    for (i, o) in objects.iter().enumerate() {
        if objects.iter().filter(|p| p.attr == o.attr).count() == 1 {
            pool.push((QuestionKind::Class, i));
        }
    }
    pool.push((QuestionKind::Count, 0));
    shuffle(rng, &mut pool);
    pool.truncate(QA_PER_SCENE);

    let mut out = Vec::with_capacity(pool.len());
    for (kind, i) in pool {
        let o = &objects[i];
        let (text, answer) = match kind {
            QuestionKind::Color => (
                spec.question_templates
                    .color
                    .replace("{class}", &spec.classes[o.class]),
                spec.attribute(o.attr).to_string(),
            ),
            QuestionKind::Size => (
                spec.question_templates
                    .size
                    .replace("{class}", &spec.classes[o.class]),
                spec.attribute(o.attr).to_string(),
            ),
            QuestionKind::Class => (
                spec.question_templates
                    .class
                    .replace("{attr}", spec.attribute(o.attr)),
                spec.classes[o.class].clone(),
            ),
            QuestionKind::Count => {
                let word = spec.numbers.get(m).ok_or_else(|| {
                    DataError::Config(format!("grammar has no number word for count {m}"))
                })?;
                (spec.question_templates.count.clone(), word.clone())
            }
        };
        let question: Vec<usize> = text
            .split_whitespace()
            .map(|w| vocab.id(w).unwrap_or(super::UNK))
            .collect();
        out.push(QaPair {
            question,
            answer,
            answer_id: None,
            soft_labels: Vec::new(),
        });
    }
    Ok(out)
}

/// One box with half-extents in [0.05, 0.2] and center clear of the frame
/// edge; area is exactly the width–height product so the Region invariant
/// holds by construction.
fn draw_box(rng: &mut ChaCha8Rng) -> [f64; 5] {
    let hw: f64 = rng.random_range(0.05..0.2);
    let hh: f64 = rng.random_range(0.05..0.2);
    let cx: f64 = rng.random_range(hw..1.0 - hw);
    let cy: f64 = rng.random_range(hh..1.0 - hh);
    let (x1, y1, x2, y2) = (cx - hw, cy - hh, cx + hw, cy + hh);
    [x1, y1, x2, y2, (x2 - x1) * (y2 - y1)]
}

fn box_center(b: &[f64; 5]) -> (f64, f64) {
    (0.5 * (b[0] + b[2]), 0.5 * (b[1] + b[3]))
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::detokenize;
    use crate::data::grammar::argmax;

    fn desk() -> (GrammarSpec, Vocab) {
        let g = GrammarSpec::default();
        let v = Vocab::from_grammar(&g);
        (g, v)
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let (g, _) = desk();
        let a = generate_scene(99, &g, 8, 0.1).unwrap();
        let b = generate_scene(99, &g, 8, 0.1).unwrap();
        assert_eq!(a, b);
        for (ra, rb) in a.regions.iter().zip(&b.regions) {
            for (x, y) in ra.features.iter().zip(&rb.features) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn region_invariants_hold_across_seeds() {
        let (g, _) = desk();
        for seed in 0..100 {
            let ex = generate_scene(seed, &g, 8, 0.1).unwrap();
            assert_eq!(ex.regions.len(), 8);
            assert_eq!(ex.qa.len(), QA_PER_SCENE);
            assert!(!ex.caption.is_empty());
            for r in &ex.regions {
                assert_eq!(r.features.len(), g.feature_dim());
                assert_eq!(r.class_probs.len(), g.classes.len());
                let sum: f64 = r.class_probs.iter().sum();
                assert!((sum - 1.0).abs() < 1e-9, "simplex violated: {sum}");
                assert!(r.class_probs.iter().all(|&p| p >= 0.0));
                let [x1, y1, x2, y2, area] = r.geometry;
                assert!(x2 > x1 && y2 > y1);
                assert!((area - (x2 - x1) * (y2 - y1)).abs() < 1e-9);
                assert!(r.geometry.iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn noiseless_class_probs_argmax_matches_one_hot() {
        let (g, _) = desk();
        for seed in 0..20 {
            let ex = generate_scene(seed, &g, 8, 0.0).unwrap();
            for r in &ex.regions {
                let class = crate::data::grammar::argmax(&r.class_probs);
                assert_eq!(r.features[class], 1.0);
            }
        }
    }

    #[test]
    fn captions_are_consistent_under_grammar_checker() {
        let (g, v) = desk();
        for seed in 0..1000 {
            let ex = generate_scene(seed, &g, 8, 0.1).unwrap();
            let caption = detokenize(&ex.caption, &v);
            assert!(
                g.caption_consistent(&caption, &ex.regions),
                "seed {seed}: '{caption}' inconsistent with its regions"
            );
        }
    }

    #[test]
    fn count_answers_match_attributed_region_count() {
        let (g, v) = desk();
        let count_q = "how many objects are there";
        let mut seen = 0;
        for seed in 0..300 {
            let ex = generate_scene(seed, &g, 8, 0.1).unwrap();
            let attributed = ex
                .regions
                .iter()
                .filter(|r| {
                    let block = &r.features[g.classes.len()..g.classes.len() + g.attribute_count()];
                    block.iter().any(|&x| x > 0.5)
                })
                .count();
            for qa in &ex.qa {
                if detokenize(&qa.question, &v) == count_q {
                    seen += 1;
                    assert_eq!(qa.answer, g.numbers[attributed]);
                }
            }
        }
        assert!(seen > 20, "count question never sampled ({seen})");
    }

    #[test]
    fn attribute_answers_match_region_records() {
        let (g, v) = desk();
        for seed in 0..300 {
            let ex = generate_scene(seed, &g, 8, 0.1).unwrap();
            for qa in &ex.qa {
                let q = detokenize(&qa.question, &v);
                let Some(class_word) = q
                    .strip_prefix("what color is the ")
                    .or_else(|| q.strip_prefix("what size is the "))
                else {
                    continue;
                };
                let class_idx = g.classes.iter().position(|c| c == class_word).unwrap();
                let region = ex
                    .regions
                    .iter()
                    .find(|r| argmax(&r.class_probs) == class_idx)
                    .expect("mentioned class has a region");
                let block =
                    &region.features[g.classes.len()..g.classes.len() + g.attribute_count()];
                assert_eq!(g.attribute(argmax(block)), qa.answer, "seed {seed}: '{q}'");
            }
        }
    }

    #[test]
    fn too_few_slots_is_a_config_error() {
        let (g, _) = desk();
        let err = generate_scene(0, &g, 1, 0.1).unwrap_err();
        assert!(matches!(err, DataError::Config(_)), "got {err}");
    }

    #[test]
    fn more_slots_than_classes_is_a_config_error() {
        let (g, _) = desk();
        let err = generate_scene(0, &g, 32, 0.1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("16"), "message should name the class count: {msg}");
    }

    #[test]
    fn objects_do_not_always_sit_in_leading_slots() {
        let (g, _) = desk();
        let mut leading_attr = 0;
        for seed in 0..50 {
            let ex = generate_scene(seed, &g, 8, 0.0).unwrap();
            let block = &ex.regions[0].features[g.classes.len()..g.classes.len() + g.attribute_count()];
            if block.iter().any(|&x| x > 0.5) {
                leading_attr += 1;
            }
        }
        assert!(leading_attr < 45, "slot 0 is an object in {leading_attr}/50 scenes");
    }
}
