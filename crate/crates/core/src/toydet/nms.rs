use super::boxes::{iou, BBox};

/// Greedy non-maximum suppression. Returns kept indices in selection order;
/// equal scores are visited by ascending index.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    debug_assert_eq!(boxes.len(), scores.len());
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.iter().all(|&k| iou(&boxes[k], &boxes[i]) <= iou_threshold) {
            keep.push(i);
        }
    }
    keep
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_and_duplicate() {
        let b = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(nms(&[b], &[0.3], 0.5), vec![0]);
        assert_eq!(nms(&[b, b], &[0.8, 0.9], 0.5), vec![1]);
        assert!(nms(&[], &[], 0.5).is_empty());
    }

    #[test]
    fn equal_scores_prefer_lower_index() {
        let b = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(nms(&[b, b, b], &[0.5, 0.5, 0.5], 0.5), vec![0]);
    }
}
