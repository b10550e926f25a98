//! Zero-shot classification over labeled image embeddings: digit and
//! per-attribute accuracy against single-word class prompts, plus
//! nearest-ideal-vector accuracy used for model selection.

use std::collections::BTreeMap;

use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};

use crate::bias::IdealVectors;
use crate::mad::{Factor, LatentFactors, ATTRIBUTE_FACTORS};
use crate::store::EmbeddingSet;
use crate::{vocab, Error, Result};

/// Zero-shot evaluation of one trained model on one labeled split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub digit_accuracy: f64,
    /// Accuracy per attribute factor, keyed by factor name.
    pub attribute_accuracies: BTreeMap<String, f64>,
    pub mean_attribute_accuracy: f64,
    /// Nearest-ideal-vector accuracy, averaged over all factor tasks.
    pub ideal_word_accuracy: f64,
}

impl EvalReport {
    /// Assemble a report; the attribute map must cover exactly the five
    /// attribute factors and every accuracy must lie in [0, 1].
    pub fn new(
        digit_accuracy: f64,
        attribute_accuracies: BTreeMap<String, f64>,
        ideal_word_accuracy: f64,
    ) -> Result<Self> {
        for f in ATTRIBUTE_FACTORS {
            if !attribute_accuracies.contains_key(f.name()) {
                return Err(Error::InvalidArgument(format!(
                    "report is missing the {} accuracy",
                    f.name()
                )));
            }
        }
        if attribute_accuracies.len() != ATTRIBUTE_FACTORS.len() {
            return Err(Error::InvalidArgument(
                "report has accuracies for unknown attributes".into(),
            ));
        }
        let mean_attribute_accuracy = attribute_accuracies.values().sum::<f64>()
            / attribute_accuracies.len() as f64;
        let report = EvalReport {
            digit_accuracy,
            attribute_accuracies,
            mean_attribute_accuracy,
            ideal_word_accuracy,
        };
        for (name, v) in report.all_accuracies() {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!(
                    "{name} accuracy {v} outside [0, 1]"
                )));
            }
        }
        Ok(report)
    }

    fn all_accuracies(&self) -> Vec<(String, f64)> {
        let mut out = vec![
            ("digit".to_string(), self.digit_accuracy),
            ("ideal word".to_string(), self.ideal_word_accuracy),
        ];
        for (k, v) in &self.attribute_accuracies {
            out.push((k.clone(), *v));
        }
        out
    }

    /// The single model-selection number: the mean of the ideal-word
    /// accuracy, the digit accuracy, and the five attribute accuracies.
    pub fn selection_score(&self) -> f64 {
        let sum = self.ideal_word_accuracy
            + self.digit_accuracy
            + self.attribute_accuracies.values().sum::<f64>();
        sum / (2 + self.attribute_accuracies.len()) as f64
    }
}

/// Token sequence of a single-word class prompt: `[SOT, word, EOT, ...]`.
pub fn prompt_tokens(word: &str) -> Result<[u8; vocab::CONTEXT_LEN]> {
    vocab::tokenize(&[word])
}

/// Flat token buffer with one prompt per class value of `task`, in
/// canonical class order.
pub fn task_prompt_tokens(task: Factor) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(task.values().len() * vocab::CONTEXT_LEN);
    for word in task.values() {
        out.extend_from_slice(&prompt_tokens(word)?);
    }
    Ok(out)
}

/// The ground-truth class index of every row, read from the set's labels.
fn truth_classes(images: &EmbeddingSet, task: Factor) -> Result<Vec<usize>> {
    let labels = images.labels.as_ref().ok_or_else(|| {
        Error::InvalidArgument("embedding set carries no factor labels".into())
    })?;
    labels
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let lf: LatentFactors = serde_json::from_value(v.clone()).map_err(|e| {
                Error::InvalidArgument(format!("row {i} label is not a factor record: {e}"))
            })?;
            Ok(task.class_of(&lf))
        })
        .collect()
}

/// Cosine similarity, with zero-norm vectors scoring negative infinity so
/// they are never preferred.
fn cosine(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b.iter()) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return f64::NEG_INFINITY;
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// Index of the best row of `classes` by cosine similarity; ties keep the
/// lowest index (strict improvement required to switch).
fn nearest_class(x: ArrayView1<'_, f64>, classes: &ndarray::Array2<f64>) -> usize {
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (c, row) in classes.rows().into_iter().enumerate() {
        let score = cosine(x, row);
        if score > best_score {
            best_score = score;
            best = c;
        }
    }
    best
}

fn accuracy_against(
    images: &EmbeddingSet,
    classes: &ndarray::Array2<f64>,
    truth: &[usize],
) -> f64 {
    let correct = truth
        .iter()
        .enumerate()
        .filter(|(i, &t)| nearest_class(images.row(*i), classes) == t)
        .count();
    correct as f64 / truth.len() as f64
}

/// Fraction of labeled images whose most-similar class prompt (by cosine,
/// ties toward the lowest class index) is their true class for `task`.
pub fn zero_shot_accuracy(
    images: &EmbeddingSet,
    class_prompts: &EmbeddingSet,
    task: &str,
) -> Result<f64> {
    let task = Factor::from_name(task)?;
    let n_classes = task.values().len();
    if class_prompts.n() != n_classes {
        return Err(Error::InvalidArgument(format!(
            "{} prompts given but {} has {n_classes} classes",
            class_prompts.n(),
            task.name()
        )));
    }
    if class_prompts.dim() != images.dim() {
        return Err(Error::Shape(format!(
            "prompt dimension {} does not match image dimension {}",
            class_prompts.dim(),
            images.dim()
        )));
    }
    if images.n() == 0 {
        return Err(Error::InvalidArgument("no images to classify".into()));
    }
    let truth = truth_classes(images, task)?;
    Ok(accuracy_against(images, &class_prompts.data, &truth))
}

/// Nearest-ideal-vector classification accuracy for `task`. The ideal
/// vectors must cover exactly the task's classes in canonical order.
pub fn ideal_word_accuracy(
    images: &EmbeddingSet,
    ideal: &IdealVectors,
    task: &str,
) -> Result<f64> {
    let task = Factor::from_name(task)?;
    let want: Vec<&str> = task.values().to_vec();
    if want.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "{} has a single class; nearest-vector accuracy is undefined",
            task.name()
        )));
    }
    if ideal.labels.len() != want.len()
        || ideal.labels.iter().zip(&want).any(|(got, want)| got != want)
    {
        return Err(Error::InvalidArgument(format!(
            "ideal vectors labeled {:?} do not match the {} classes {:?}",
            ideal.labels,
            task.name(),
            want
        )));
    }
    if ideal.vectors.ncols() != images.dim() {
        return Err(Error::Shape(format!(
            "ideal dimension {} does not match image dimension {}",
            ideal.vectors.ncols(),
            images.dim()
        )));
    }
    if images.n() == 0 {
        return Err(Error::InvalidArgument("no images to classify".into()));
    }
    let truth = truth_classes(images, task)?;
    Ok(accuracy_against(images, &ideal.vectors, &truth))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mad::{ColorClass, Fracture, ScaleClass, Swelling, Thickness};
    use crate::store::Modality;
    use crate::testkit;
    use ndarray::Array2;
    use rand::Rng;

    fn factors_with(color: ColorClass, scale: ScaleClass) -> LatentFactors {
        LatentFactors {
            digit: 0,
            thickness: Thickness::NoThickthinning,
            swelling: Swelling::NoSwelling,
            fracture: Fracture::NoFracture,
            scale,
            color,
        }
    }

    const COLORS: [ColorClass; 7] = [
        ColorClass::Gray,
        ColorClass::Red,
        ColorClass::Green,
        ColorClass::Blue,
        ColorClass::Cyan,
        ColorClass::Magenta,
        ColorClass::Yellow,
    ];

    fn labeled_images(data: Array2<f64>, factors: &[LatentFactors]) -> EmbeddingSet {
        let labels = factors
            .iter()
            .map(|f| serde_json::to_value(f).unwrap())
            .collect();
        EmbeddingSet::new(data, Modality::Image, false, Some(labels), "test").unwrap()
    }

    fn prompt_set(data: Array2<f64>) -> EmbeddingSet {
        EmbeddingSet::new(data, Modality::Text, false, None, "test").unwrap()
    }

    #[test]
    fn basis_aligned_images_classify_perfectly() {
        let prompts = prompt_set(Array2::eye(7));
        let mut rows = Array2::zeros((21, 7));
        let mut factors = Vec::new();
        for i in 0..21 {
            rows[(i, i % 7)] = 1.0;
            factors.push(factors_with(COLORS[i % 7], ScaleClass::Large));
        }
        let images = labeled_images(rows, &factors);
        let acc = zero_shot_accuracy(&images, &prompts, "color").unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn orthogonal_images_fall_back_to_class_zero() {
        // Scale task: prompts along e0/e1, every image along e7 (all
        // cosines zero) -> every prediction is class 0 = "large".
        let mut prompts = Array2::zeros((2, 8));
        prompts[(0, 0)] = 1.0;
        prompts[(1, 1)] = 1.0;
        let prompts = prompt_set(prompts);
        let mut rows = Array2::zeros((10, 8));
        let mut factors = Vec::new();
        for i in 0..10 {
            rows[(i, 7)] = 1.0;
            let scale = if i < 3 { ScaleClass::Large } else { ScaleClass::Small };
            factors.push(factors_with(ColorClass::Gray, scale));
        }
        let images = labeled_images(rows, &factors);
        let acc = zero_shot_accuracy(&images, &prompts, "scale").unwrap();
        assert!((acc - 0.3).abs() < 1e-12);
    }

    #[test]
    fn random_images_score_at_chance_level() {
        let mut rng = testkit::rng(77);
        let n = 10_000;
        let images_raw = testkit::random_unit_set(n, 12, Modality::Image, &mut rng);
        let factors: Vec<LatentFactors> = (0..n)
            .map(|_| factors_with(COLORS[rng.random_range(0..7)], ScaleClass::Large))
            .collect();
        let images = labeled_images(images_raw.data, &factors);
        let prompts = prompt_set(
            testkit::random_unit_set(7, 12, Modality::Text, &mut rng).data,
        );
        let acc = zero_shot_accuracy(&images, &prompts, "color").unwrap();
        let p = 1.0 / 7.0;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        assert!(
            (acc - p).abs() < 3.0 * sigma,
            "accuracy {acc} vs chance {p} (3 sigma = {})",
            3.0 * sigma
        );
    }

    #[test]
    fn accuracy_is_rotation_invariant() {
        let mut rng = testkit::rng(5);
        let n = 200;
        let images_raw = testkit::random_unit_set(n, 10, Modality::Image, &mut rng);
        let factors: Vec<LatentFactors> = (0..n)
            .map(|_| factors_with(COLORS[rng.random_range(0..7)], ScaleClass::Large))
            .collect();
        let prompts_raw = testkit::random_unit_set(7, 10, Modality::Text, &mut rng);
        let images = labeled_images(images_raw.data.clone(), &factors);
        let prompts = prompt_set(prompts_raw.data.clone());
        let base = zero_shot_accuracy(&images, &prompts, "color").unwrap();

        let q = testkit::random_orthogonal(10, &mut rng);
        let images_rot = labeled_images(images_raw.data.dot(&q), &factors);
        let prompts_rot = prompt_set(prompts_raw.data.dot(&q));
        let rotated = zero_shot_accuracy(&images_rot, &prompts_rot, "color").unwrap();
        assert_eq!(base, rotated);
    }

    #[test]
    fn shape_and_label_errors_are_reported() {
        let prompts = prompt_set(Array2::eye(7));
        let unlabeled =
            EmbeddingSet::new(Array2::eye(7), Modality::Image, false, None, "test").unwrap();
        assert!(zero_shot_accuracy(&unlabeled, &prompts, "color").is_err());

        let images = labeled_images(
            Array2::eye(7),
            &vec![factors_with(ColorClass::Gray, ScaleClass::Large); 7],
        );
        // Wrong prompt count for the task.
        assert!(zero_shot_accuracy(&images, &prompts, "scale").is_err());
        // Unknown task name.
        assert!(zero_shot_accuracy(&images, &prompts, "hue").is_err());
        // Dimension mismatch.
        let narrow = prompt_set(Array2::eye(2));
        assert!(zero_shot_accuracy(&images, &narrow, "scale").is_err());
    }

    fn ideals_for(task: Factor, vectors: Array2<f64>) -> IdealVectors {
        IdealVectors {
            labels: task.values().iter().map(|s| s.to_string()).collect(),
            grand_mean: vec![0.0; vectors.ncols()],
            vectors,
            modality: Modality::Text,
        }
    }

    #[test]
    fn class_mean_ideals_beat_arbitrary_prompts() {
        // Two tight clusters by scale class; the cluster means are the
        // best possible 2-class centroids for this data.
        let mut rng = testkit::rng(3);
        let n = 300;
        let d = 6;
        let mut data = Array2::zeros((n, d));
        let mut factors = Vec::new();
        for i in 0..n {
            let (scale, center) = if i % 2 == 0 {
                (ScaleClass::Large, 0)
            } else {
                (ScaleClass::Small, 1)
            };
            for j in 0..d {
                let base = if j == center { 1.0 } else { 0.0 };
                data[(i, j)] = base + rng.random_range(-0.2..0.2);
            }
            factors.push(factors_with(ColorClass::Gray, scale));
        }
        let images = labeled_images(data.clone(), &factors);

        // Exact class means.
        let mut means = Array2::zeros((2, d));
        let mut counts = [0.0; 2];
        for (i, f) in factors.iter().enumerate() {
            let c = if f.scale == ScaleClass::Large { 0 } else { 1 };
            counts[c] += 1.0;
            for j in 0..d {
                means[(c, j)] += data[(i, j)];
            }
        }
        for c in 0..2 {
            for j in 0..d {
                means[(c, j)] /= counts[c];
            }
        }
        let ideal_acc =
            ideal_word_accuracy(&images, &ideals_for(Factor::Scale, means), "scale").unwrap();
        assert!(ideal_acc > 0.99, "ideal accuracy {ideal_acc}");
        for seed in 0..5 {
            let mut prng = testkit::rng(100 + seed);
            let prompts = prompt_set(
                testkit::random_unit_set(2, d, Modality::Text, &mut prng).data,
            );
            let baseline = zero_shot_accuracy(&images, &prompts, "scale").unwrap();
            assert!(ideal_acc >= baseline, "{ideal_acc} < {baseline}");
        }
    }

    #[test]
    fn degenerate_ideals_fall_back_to_class_zero() {
        let mut rows = Array2::zeros((4, 3));
        for i in 0..4 {
            rows[(i, i % 3)] = 1.0;
        }
        let factors = vec![
            factors_with(ColorClass::Gray, ScaleClass::Large),
            factors_with(ColorClass::Gray, ScaleClass::Small),
            factors_with(ColorClass::Gray, ScaleClass::Small),
            factors_with(ColorClass::Gray, ScaleClass::Small),
        ];
        let images = labeled_images(rows, &factors);
        let same = Array2::from_shape_fn((2, 3), |_| 0.4);
        let acc =
            ideal_word_accuracy(&images, &ideals_for(Factor::Scale, same), "scale").unwrap();
        assert!((acc - 0.25).abs() < 1e-12, "{acc}");
    }

    #[test]
    fn mislabeled_ideals_are_rejected() {
        let images = labeled_images(
            Array2::eye(3),
            &vec![factors_with(ColorClass::Gray, ScaleClass::Large); 3],
        );
        // Labels out of order.
        let swapped = IdealVectors {
            labels: vec!["small".into(), "large".into()],
            vectors: Array2::eye(3).slice(ndarray::s![0..2, ..]).to_owned(),
            grand_mean: vec![0.0; 3],
            modality: Modality::Text,
        };
        let err = ideal_word_accuracy(&images, &swapped, "scale").unwrap_err();
        assert!(err.to_string().contains("do not match"), "{err}");

        // Single class.
        let single = IdealVectors {
            labels: vec!["large".into()],
            vectors: Array2::eye(3).slice(ndarray::s![0..1, ..]).to_owned(),
            grand_mean: vec![0.0; 3],
            modality: Modality::Text,
        };
        assert!(ideal_word_accuracy(&images, &single, "scale").is_err());
    }

    #[test]
    fn prompt_tokens_wrap_one_word() {
        let toks = prompt_tokens("red").unwrap();
        assert_eq!(toks[0], vocab::SOT);
        assert_eq!(toks[1], vocab::word_id("red").unwrap());
        assert!(toks[2..].iter().all(|&t| t == vocab::EOT));

        let all = task_prompt_tokens(Factor::Color).unwrap();
        assert_eq!(all.len(), 7 * vocab::CONTEXT_LEN);
        assert!(prompt_tokens("no such word").is_err());
    }

    #[test]
    fn report_validates_and_scores() {
        let attrs: BTreeMap<String, f64> = [
            ("thickness", 0.5),
            ("swelling", 0.6),
            ("fracture", 0.7),
            ("scale", 0.8),
            ("color", 0.9),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        let report = EvalReport::new(0.4, attrs.clone(), 0.3).unwrap();
        assert!((report.mean_attribute_accuracy - 0.7).abs() < 1e-12);
        let want = (0.3 + 0.4 + 0.5 + 0.6 + 0.7 + 0.8 + 0.9) / 7.0;
        assert!((report.selection_score() - want).abs() < 1e-12);

        let json = serde_json::to_string(&report).unwrap();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(report, back);

        assert!(EvalReport::new(1.4, attrs.clone(), 0.3).is_err());
        let mut missing = attrs.clone();
        missing.remove("color");
        assert!(EvalReport::new(0.4, missing, 0.3).is_err());
        let mut extra = attrs;
        extra.insert("hue".into(), 0.5);
        assert!(EvalReport::new(0.4, extra, 0.3).is_err());
    }
}
