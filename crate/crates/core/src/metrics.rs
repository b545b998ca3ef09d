//! Segmentation scores with unsupervised channel matching.
//!
//! Predicted channels carry no class identity, so every score first maps
//! channels to ground-truth classes with the assignment that maximises total
//! overlap over the whole evaluated set. Scores are then computed per image
//! and averaged; corpus-level (pooled) scores are reported alongside.

use pathfinding::kuhn_munkres::kuhn_munkres;
use pathfinding::matrix::Matrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `counts[p][g]`: pixels labelled `p` in the prediction and `g` in the truth.
pub fn confusion(pred: &[u8], gt: &[u8], k: usize, k_gt: usize) -> Result<Vec<Vec<u64>>> {
    if pred.len() != gt.len() {
        return Err(Error::Shape {
            what: "label maps".into(),
            expected: vec![gt.len()],
            got: vec![pred.len()],
        });
    }
    let mut counts = vec![vec![0u64; k_gt]; k];
    for (&p, &g) in pred.iter().zip(gt) {
        let (p, g) = (p as usize, g as usize);
        if p >= k || g >= k_gt {
            return Err(Error::Range {
                what: "label",
                value: p.max(g) as i64,
                range: format!("below {k} (prediction) and {k_gt} (ground truth)"),
            });
        }
        counts[p][g] += 1;
    }
    Ok(counts)
}

fn best_total(w: &[Vec<i64>], rows: &[usize], cols: &[usize]) -> i64 {
    if rows.is_empty() {
        return 0;
    }
    let m = Matrix::from_rows(rows.iter().map(|&r| cols.iter().map(move |&c| w[r][c])))
        .expect("rectangular");
    kuhn_munkres(&m).0
}

/// Assignment maximising total overlap on a confusion matrix. Entry `p` is
/// the class matched to predicted channel `p`, or `None` when there are more
/// channels than classes. Among optimal assignments the lexicographically
/// smallest is returned.
pub fn match_confusion(counts: &[Vec<u64>], k_gt: usize) -> Vec<Option<usize>> {
    let k = counts.len();
    let n = k.max(k_gt);
    let w: Vec<Vec<i64>> = (0..n)
        .map(|p| (0..n).map(|g| if p < k && g < k_gt { counts[p][g] as i64 } else { 0 }).collect())
        .collect();
    let all: Vec<usize> = (0..n).collect();
    let mut remaining = best_total(&w, &all, &all);
    let mut free = all.clone();
    let mut out = Vec::with_capacity(k);
    for p in 0..k {
        let rest: Vec<usize> = (p + 1..n).collect();
        let pick = free
            .iter()
            .copied()
            .find(|&g| {
                let others: Vec<usize> = free.iter().copied().filter(|&c| c != g).collect();
                w[p][g] + best_total(&w, &rest, &others) == remaining
            })
            .expect("an optimal completion exists");
        remaining -= w[p][pick];
        free.retain(|&c| c != pick);
        out.push((pick < k_gt).then_some(pick));
    }
    out
}

/// Channel-to-class assignment for a pair of label sets.
pub fn match_channels(pred: &[u8], gt: &[u8], k: usize, k_gt: usize) -> Result<Vec<Option<usize>>> {
    Ok(match_confusion(&confusion(pred, gt, k, k_gt)?, k_gt))
}

/// Relabel through a matching; unmatched channels become `u8::MAX`.
pub fn apply_matching(pred: &[u8], matching: &[Option<usize>]) -> Vec<u8> {
    pred.iter()
        .map(|&p| matching.get(p as usize).copied().flatten().map_or(u8::MAX, |g| g as u8))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiceMode {
    /// `2|A∩B| / (|A| + |B|)`.
    #[default]
    Symmetric,
    /// `2|A∩B| / |A|` with `A` the prediction; not bounded by one.
    Literal,
}

/// IoU with the empty-set convention: 1 when both sets are empty.
pub fn iou_counts(inter: u64, pred: u64, gt: u64) -> f64 {
    let union = pred + gt - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn dice_counts(inter: u64, pred: u64, gt: u64, mode: DiceMode) -> f64 {
    match mode {
        DiceMode::Symmetric => {
            if pred + gt == 0 {
                1.0
            } else {
                2.0 * inter as f64 / (pred + gt) as f64
            }
        }
        DiceMode::Literal => {
            if pred == 0 {
                if gt == 0 {
                    1.0
                } else {
                    0.0
                }
            } else {
                2.0 * inter as f64 / pred as f64
            }
        }
    }
}

/// Scores of one image, or of a pooled set, after matching.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub acc: f64,
    pub iou: f64,
    pub miou: f64,
    pub dice: f64,
    /// Binary foreground/background pixel accuracy.
    pub fg_acc: f64,
}

/// Scores of matched labels `pred` (classes of the truth, or `u8::MAX`).
pub fn scores_matched(pred: &[u8], gt: &[u8], k_gt: usize, fg: &[usize], mode: DiceMode) -> Scores {
    let n = gt.len() as u64;
    let is_fg = |l: u8| fg.contains(&(l as usize));
    let (mut correct, mut fg_correct, mut inter, mut fp, mut fgt) = (0u64, 0u64, 0u64, 0u64, 0u64);
    let mut cls_inter = vec![0u64; k_gt];
    let mut cls_pred = vec![0u64; k_gt];
    let mut cls_gt = vec![0u64; k_gt];
    for (&p, &g) in pred.iter().zip(gt) {
        correct += (p == g) as u64;
        let (pf, gf) = (is_fg(p), is_fg(g));
        fg_correct += (pf == gf) as u64;
        inter += (pf && gf) as u64;
        fp += pf as u64;
        fgt += gf as u64;
        if (p as usize) < k_gt {
            cls_pred[p as usize] += 1;
        }
        cls_gt[g as usize] += 1;
        if p == g {
            cls_inter[g as usize] += 1;
        }
    }
    let miou = if k_gt == 0 {
        1.0
    } else {
        (0..k_gt).map(|c| iou_counts(cls_inter[c], cls_pred[c], cls_gt[c])).sum::<f64>() / k_gt as f64
    };
    let frac = |x: u64| if n == 0 { 1.0 } else { x as f64 / n as f64 };
    Scores {
        acc: frac(correct),
        iou: iou_counts(inter, fp, fgt),
        miou,
        dice: dice_counts(inter, fp, fgt, mode),
        fg_acc: frac(fg_correct),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Per-image scores averaged over images.
    pub acc: f64,
    pub iou: f64,
    pub miou: f64,
    pub dice: f64,
    pub fg_acc: f64,
    pub dice_mode: DiceMode,
    /// Class assigned to each predicted channel (`null` if unmatched).
    pub matching: Vec<Option<usize>>,
    pub images: usize,
    /// Scores over all pixels pooled together.
    pub pooled: Scores,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreOptions {
    pub foreground: Vec<usize>,
    pub dice_mode: DiceMode,
}

impl ScoreOptions {
    /// Every class but 0 counts as foreground.
    pub fn all_but_background(k_gt: usize) -> Self {
        Self {
            foreground: (1..k_gt).collect(),
            dice_mode: DiceMode::Symmetric,
        }
    }
}

/// Score predicted label maps against the truth. Both are concatenations of
/// `plane`-sized maps; `k` predicted channels, `k_gt` classes.
pub fn score(
    pred: &[u8],
    gt: &[u8],
    plane: usize,
    k: usize,
    k_gt: usize,
    opts: &ScoreOptions,
) -> Result<MetricReport> {
    if plane == 0 || !pred.len().is_multiple_of(plane) {
        return Err(Error::Shape {
            what: "label maps".into(),
            expected: vec![plane],
            got: vec![pred.len()],
        });
    }
    if let Some(&c) = opts.foreground.iter().find(|&&c| c >= k_gt) {
        return Err(Error::config("eval.foreground", format!("class {c} does not exist (K_gt = {k_gt})")));
    }
    let matching = match_channels(pred, gt, k, k_gt)?;
    let mapped = apply_matching(pred, &matching);
    let per_image: Vec<Scores> = mapped
        .par_chunks(plane)
        .zip(gt.par_chunks(plane))
        .map(|(p, g)| scores_matched(p, g, k_gt, &opts.foreground, opts.dice_mode))
        .collect();
    let images = per_image.len();
    let mean = |f: fn(&Scores) -> f64| {
        if images == 0 {
            1.0
        } else {
            per_image.iter().map(f).sum::<f64>() / images as f64
        }
    };
    Ok(MetricReport {
        acc: mean(|s| s.acc),
        iou: mean(|s| s.iou),
        miou: mean(|s| s.miou),
        dice: mean(|s| s.dice),
        fg_acc: mean(|s| s.fg_acc),
        dice_mode: opts.dice_mode,
        matching,
        images,
        pooled: scores_matched(&mapped, gt, k_gt, &opts.foreground, opts.dice_mode),
    })
}

/// Per-pixel agreement between two labelings after matching the first onto
/// the second, averaged over images.
pub fn consistency(generated: &[u8], reference: &[u8], plane: usize, k: usize, k_ref: usize) -> Result<f64> {
    if generated.len() != reference.len() || plane == 0 || !generated.len().is_multiple_of(plane) {
        return Err(Error::Shape {
            what: "consistency label maps".into(),
            expected: vec![reference.len()],
            got: vec![generated.len()],
        });
    }
    let matching = match_channels(generated, reference, k, k_ref)?;
    let mapped = apply_matching(generated, &matching);
    let images = generated.len() / plane;
    if images == 0 {
        return Ok(1.0);
    }
    let total: f64 = mapped
        .chunks(plane)
        .zip(reference.chunks(plane))
        .map(|(a, b)| a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / plane as f64)
        .sum();
    Ok(total / images as f64)
}

impl MetricReport {
    pub fn to_text(&self) -> String {
        let matching: Vec<String> = self
            .matching
            .iter()
            .enumerate()
            .map(|(p, g)| match g {
                Some(g) => format!("{p}->{g}"),
                None => format!("{p}->-"),
            })
            .collect();
        format!(
            "images   {}\nacc      {:.4}\niou      {:.4}\nmiou     {:.4}\ndice     {:.4} ({:?})\nfg_acc   {:.4}\nmatching {}\npooled   acc {:.4} iou {:.4} miou {:.4} dice {:.4}\n",
            self.images,
            self.acc,
            self.iou,
            self.miou,
            self.dice,
            self.dice_mode,
            self.fg_acc,
            matching.join(" "),
            self.pooled.acc,
            self.pooled.iou,
            self.pooled.miou,
            self.pooled.dice,
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is serialisable")
    }
}
