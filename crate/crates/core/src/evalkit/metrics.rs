use serde::{Deserialize, Serialize};

use super::detect::Detection;
use crate::scenegen::ObjectInstance;

/// Matching counts, additive across images.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub true_positives: usize,
    pub detections: usize,
    pub ground_truth: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Counts {
    pub fn add(&mut self, other: Counts) {
        self.true_positives += other.true_positives;
        self.detections += other.detections;
        self.ground_truth += other.ground_truth;
    }

    /// Precision and recall are 0 on an empty denominator; F1 is 0 when
    /// `P + R = 0`.
    pub fn scores(&self) -> Prf1 {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(self.true_positives, self.detections);
        let recall = ratio(self.true_positives, self.ground_truth);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Prf1 { precision, recall, f1 }
    }

    /// Per-image recall as used by rsim; an empty truth counts as fully
    /// recalled.
    pub fn image_recall(&self) -> f64 {
        if self.ground_truth == 0 {
            1.0
        } else {
            self.true_positives as f64 / self.ground_truth as f64
        }
    }
}

/// Match detections to ground truth by (shape, color). With `gate` set, a
/// match also requires center distance below `gate`.
pub fn match_counts(dets: &[Detection], truth: &[ObjectInstance], gate: Option<f64>) -> Counts {
    let mut used = vec![false; dets.len()];
    let mut tp = 0;
    for o in truth {
        let hit = dets.iter().enumerate().position(|(i, d)| {
            !used[i]
                && d.otype == o.otype
                && gate.is_none_or(|g| {
                    let (dx, dy) = (d.position.0 - o.position.0, d.position.1 - o.position.1);
                    (dx * dx + dy * dy).sqrt() < g
                })
        });
        if let Some(i) = hit {
            used[i] = true;
            tp += 1;
        }
    }
    Counts {
        true_positives: tp,
        detections: dets.len(),
        ground_truth: truth.len(),
    }
}

/// Type-only P/R/F1 of one detection list against one scene.
pub fn prf1(dets: &[Detection], truth: &[ObjectInstance]) -> Prf1 {
    match_counts(dets, truth, None).scores()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{Color, ObjectType, Shape};

    fn obj(s: Shape, c: Color) -> ObjectInstance {
        ObjectInstance { otype: ObjectType::new(s, c), position: (0.5, 0.5), size: 0.14 }
    }

    fn det(s: Shape, c: Color) -> Detection {
        Detection { otype: ObjectType::new(s, c), position: (0.5, 0.5), confidence: 1.0 }
    }

    #[test]
    fn counting_examples() {
        let truth = [obj(Shape::Square, Color::Red), obj(Shape::Circle, Color::Blue)];
        let exact = [det(Shape::Square, Color::Red), det(Shape::Circle, Color::Blue)];
        assert_eq!(prf1(&exact, &truth), Prf1 { precision: 1.0, recall: 1.0, f1: 1.0 });
        let half = [det(Shape::Square, Color::Red), det(Shape::Triangle, Color::Cyan)];
        assert_eq!(prf1(&half, &truth), Prf1 { precision: 0.5, recall: 0.5, f1: 0.5 });
        assert_eq!(prf1(&[], &truth), Prf1::default());
    }

    #[test]
    fn positional_gate() {
        let truth = [obj(Shape::Square, Color::Red)];
        let mut far = det(Shape::Square, Color::Red);
        far.position = (0.9, 0.9);
        assert_eq!(match_counts(&[far.clone()], &truth, None).true_positives, 1);
        assert_eq!(match_counts(&[far], &truth, Some(0.25)).true_positives, 0);
    }
}
