use super::BinaryMap;

/// Outcome of matching one predicted boundary map against ground truth.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MatchCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl std::ops::AddAssign for MatchCounts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

/// One-to-one greedy matching within a Euclidean radius of `maxdist_px`.
///
/// Candidate (pred, gt) pairs are visited by ascending distance, ties broken
/// by raster index of the prediction and then of the ground-truth pixel.
/// This is not always a maximum matching once the radius reaches 1 px.
pub fn match_boundaries(pred: &BinaryMap, gt: &BinaryMap, maxdist_px: f64) -> MatchCounts {
    assert_eq!(
        (pred.height, pred.width),
        (gt.height, gt.width),
        "matched maps must share a shape"
    );
    let (h, w) = (pred.height as isize, pred.width as isize);
    let reach = maxdist_px.max(0.0).floor() as isize;
    let r2 = maxdist_px * maxdist_px;

    let mut pairs: Vec<(u64, usize, usize)> = Vec::new();
    for (pi, _) in pred.data.iter().enumerate().filter(|(_, &b)| b) {
        let (py, px) = ((pi / pred.width) as isize, (pi % pred.width) as isize);
        for dy in -reach..=reach {
            for dx in -reach..=reach {
                let (y, x) = (py + dy, px + dx);
                if y < 0 || x < 0 || y >= h || x >= w {
                    continue;
                }
                let d2 = (dy * dy + dx * dx) as u64;
                if d2 as f64 > r2 {
                    continue;
                }
                let gi = (y * w + x) as usize;
                if gt.data[gi] {
                    pairs.push((d2, pi, gi));
                }
            }
        }
    }
    pairs.sort_unstable();

    let mut pred_used = vec![false; pred.data.len()];
    let mut gt_used = vec![false; gt.data.len()];
    let mut tp = 0;
    for (_, pi, gi) in pairs {
        if !pred_used[pi] && !gt_used[gi] {
            pred_used[pi] = true;
            gt_used[gi] = true;
            tp += 1;
        }
    }
    MatchCounts {
        tp,
        fp: pred.count() - tp,
        fn_: gt.count() - tp,
    }
}
