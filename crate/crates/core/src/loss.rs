//! Label algebra and the partial-annotation training loss.
//!
//! Annotated slices carry one strong region (pixels the annotators marked as
//! a typical example of one class). Every other lung pixel on that slice is
//! only known *not* to be a typical region of that class, which the label
//! algebra records as a weak label of the same class. Strong and weak labels
//! of a class share one one-hot encoding; they differ in how the loss treats
//! them: strong pixels pay cross-entropy toward the class, weak pixels pay a
//! penalty (scaled by `lambda`) for probability mass assigned to it.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Number of segmentation classes.
pub const NUM_CLASSES: usize = 5;

/// Probabilities are clamped to this floor before any logarithm.
pub const PROB_FLOOR: f64 = 1e-7;

/// Display names in class-index order.
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["CON", "GGO", "HCM", "EMP", "NOR"];

/// Lung texture classes: consolidation, ground-glass opacity, honeycombing,
/// emphysema, and normal tissue.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ClassId {
    Con = 0,
    Ggo = 1,
    Hcm = 2,
    Emp = 3,
    Nor = 4,
}

impl ClassId {
    pub const ALL: [ClassId; NUM_CLASSES] = [
        ClassId::Con,
        ClassId::Ggo,
        ClassId::Hcm,
        ClassId::Emp,
        ClassId::Nor,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<ClassId> {
        ClassId::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::Contract(format!("class index {i} out of range")))
    }

    pub fn name(self) -> &'static str {
        CLASS_NAMES[self.index()]
    }
}

impl std::fmt::Display for ClassId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-pixel annotation state on an annotated slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PixelLabel {
    /// Inside the marked typical region of the class.
    Strong(ClassId),
    /// Lung tissue on a slice annotated for the class, outside the marked
    /// region: known not to be a typical region of that class.
    Weak(ClassId),
    /// Outside the lung or otherwise excluded.
    Ignore,
}

impl PixelLabel {
    /// Compact byte encoding for on-disk label maps: strong labels occupy
    /// 0..5, weak labels 10..15, ignore is 255.
    pub fn to_byte(self) -> u8 {
        match self {
            PixelLabel::Strong(c) => c.index() as u8,
            PixelLabel::Weak(c) => 10 + c.index() as u8,
            PixelLabel::Ignore => 255,
        }
    }

    pub fn from_byte(b: u8) -> Result<PixelLabel> {
        match b {
            0..=4 => Ok(PixelLabel::Strong(ClassId::from_index(b as usize)?)),
            10..=14 => Ok(PixelLabel::Weak(ClassId::from_index(b as usize - 10)?)),
            255 => Ok(PixelLabel::Ignore),
            other => Err(Error::Contract(format!("invalid label byte {other}"))),
        }
    }
}

/// How weak labels enter the loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum LossMode {
    /// Weak pixels are dropped; only strong pixels are trained on.
    SupervisedOnly,
    /// Weak pixels pay `lambda * ln(p_c)`, discouraging mass on the class.
    Proposed { lambda: f64 },
    /// Weak pixels are pseudo-labelled with the most probable class other
    /// than the weak class and trained on like strong pixels.
    SemiSupervised,
}

impl LossMode {
    /// Whether a weak pixel adds a term (and counts toward the mean).
    pub fn weak_contributes(self) -> bool {
        match self {
            LossMode::SupervisedOnly => false,
            LossMode::Proposed { lambda } => lambda > 0.0,
            LossMode::SemiSupervised => true,
        }
    }
}

/// One-hot class encoding shared by strong and weak labels of a class.
pub fn encode_label(label: PixelLabel) -> Option<[f64; NUM_CLASSES]> {
    let class = match label {
        PixelLabel::Strong(c) | PixelLabel::Weak(c) => c,
        PixelLabel::Ignore => return None,
    };
    let mut e = [0.0; NUM_CLASSES];
    e[class.index()] = 1.0;
    Some(e)
}

fn floored_ln(p: f64) -> f64 {
    p.max(PROB_FLOOR).ln()
}

/// Most probable class excluding `exclude`; ties pick the lowest index.
pub fn pseudo_label(probs: &[f64], exclude: ClassId) -> ClassId {
    debug_assert_eq!(probs.len(), NUM_CLASSES);
    let mut best = usize::MAX;
    let mut best_p = f64::NEG_INFINITY;
    for (i, &p) in probs.iter().enumerate() {
        if i == exclude.index() {
            continue;
        }
        if p > best_p {
            best_p = p;
            best = i;
        }
    }
    ClassId::from_index(best).expect("at least one non-excluded class")
}

/// Loss term of one pixel, or `None` when the pixel does not contribute.
///
/// `probs` is the pixel's class distribution (already softmaxed).
pub fn pixel_loss(label: PixelLabel, probs: &[f64], mode: LossMode) -> Option<f64> {
    debug_assert_eq!(probs.len(), NUM_CLASSES);
    match label {
        PixelLabel::Ignore => None,
        PixelLabel::Strong(c) => Some(-floored_ln(probs[c.index()])),
        PixelLabel::Weak(c) => match mode {
            LossMode::SupervisedOnly => None,
            LossMode::Proposed { lambda } => {
                if lambda > 0.0 {
                    Some(lambda * floored_ln(probs[c.index()]))
                } else {
                    None
                }
            }
            LossMode::SemiSupervised => {
                Some(-floored_ln(probs[pseudo_label(probs, c).index()]))
            }
        },
    }
}

/// Mean loss over the contributing pixels of one slice; zero when nothing
/// contributes.
///
/// `probs` holds `labels.len()` contiguous class distributions.
pub fn batch_loss(labels: &[PixelLabel], probs: &[f64], mode: LossMode) -> Result<f64> {
    if probs.len() != labels.len() * NUM_CLASSES {
        return Err(Error::dimension(
            "shape",
            format!(
                "{} labels need {} probabilities, got {}",
                labels.len(),
                labels.len() * NUM_CLASSES,
                probs.len()
            ),
        ));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, &label) in labels.iter().enumerate() {
        let px = &probs[i * NUM_CLASSES..(i + 1) * NUM_CLASSES];
        if let Some(term) = pixel_loss(label, px, mode) {
            sum += term;
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Cross-entropy sum and pixel count over strong pixels only. Pooling the
/// sums across slices gives the validation score used for early stopping.
pub fn strong_ce_terms(labels: &[PixelLabel], probs: &[f64]) -> Result<(f64, usize)> {
    if probs.len() != labels.len() * NUM_CLASSES {
        return Err(Error::dimension(
            "shape",
            format!(
                "{} labels need {} probabilities, got {}",
                labels.len(),
                labels.len() * NUM_CLASSES,
                probs.len()
            ),
        ));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, &label) in labels.iter().enumerate() {
        if let PixelLabel::Strong(c) = label {
            sum += -floored_ln(probs[i * NUM_CLASSES + c.index()]);
            n += 1;
        }
    }
    Ok((sum, n))
}

/// Appends the loss of one slice to the graph:
/// `sum(weights ⊙ ln(clamp(softmax(logits))))` with a constant weight leaf
/// carrying `-1/n` at strong targets, `+lambda/n` at weak targets, and
/// `-1/n` at pseudo targets, `n` being the contributing-pixel count.
///
/// Pseudo labels are read from the forward softmax values and enter as
/// constants, so no gradient flows through their selection.
pub fn attach_loss(
    graph: &mut Graph,
    logits: NodeId,
    labels: &[PixelLabel],
    mode: LossMode,
) -> Result<NodeId> {
    let shape = graph.value(logits).shape().to_vec();
    if shape.last() != Some(&NUM_CLASSES) {
        return Err(Error::dimension(
            "channel",
            format!("logits must end in {NUM_CLASSES} channels, got {shape:?}"),
        ));
    }
    let pixels = graph.value(logits).numel() / NUM_CLASSES;
    if pixels != labels.len() {
        return Err(Error::dimension(
            "shape",
            format!("{pixels} logit pixels vs {} labels", labels.len()),
        ));
    }

    let probs = graph.softmax_channels(logits)?;

    let mut weights = vec![0.0; pixels * NUM_CLASSES];
    let mut n = 0usize;
    {
        let pv = graph.value(probs).data();
        for (i, &label) in labels.iter().enumerate() {
            match label {
                PixelLabel::Ignore => {}
                PixelLabel::Strong(c) => {
                    weights[i * NUM_CLASSES + c.index()] = -1.0;
                    n += 1;
                }
                PixelLabel::Weak(c) => match mode {
                    LossMode::SupervisedOnly => {}
                    LossMode::Proposed { lambda } => {
                        if lambda > 0.0 {
                            weights[i * NUM_CLASSES + c.index()] = lambda;
                            n += 1;
                        }
                    }
                    LossMode::SemiSupervised => {
                        let px = &pv[i * NUM_CLASSES..(i + 1) * NUM_CLASSES];
                        weights[i * NUM_CLASSES + pseudo_label(px, c).index()] = -1.0;
                        n += 1;
                    }
                },
            }
        }
    }
    if n > 0 {
        for w in &mut weights {
            *w /= n as f64;
        }
    }

    let clamped = graph.clamp_min(probs, PROB_FLOOR)?;
    let logp = graph.ln(clamped)?;
    let w_leaf = graph.leaf(Tensor::new(shape, weights)?);
    let weighted = graph.mul(logp, w_leaf)?;
    graph.sum(weighted)
}

#[cfg(test)]
mod tests {
    use super::*;

    const UNIFORM: [f64; 5] = [0.2; 5];

    #[test]
    fn strong_and_weak_share_encoding() {
        for c in ClassId::ALL {
            let s = encode_label(PixelLabel::Strong(c)).unwrap();
            let w = encode_label(PixelLabel::Weak(c)).unwrap();
            assert_eq!(s, w);
            assert_eq!(s.iter().sum::<f64>(), 1.0);
            assert_eq!(s[c.index()], 1.0);
        }
        assert!(encode_label(PixelLabel::Ignore).is_none());
    }

    #[test]
    fn label_byte_roundtrip() {
        for c in ClassId::ALL {
            for l in [PixelLabel::Strong(c), PixelLabel::Weak(c)] {
                assert_eq!(PixelLabel::from_byte(l.to_byte()).unwrap(), l);
            }
        }
        assert_eq!(
            PixelLabel::from_byte(PixelLabel::Ignore.to_byte()).unwrap(),
            PixelLabel::Ignore
        );
        assert!(PixelLabel::from_byte(7).is_err());
    }

    #[test]
    fn strong_pixel_uniform_probs() {
        let v = pixel_loss(
            PixelLabel::Strong(ClassId::Ggo),
            &UNIFORM,
            LossMode::Proposed { lambda: 0.1 },
        )
        .unwrap();
        assert!((v - 1.609438).abs() < 1e-6, "{v}");
    }

    #[test]
    fn strong_pixel_half_probability() {
        let mut probs = [0.125; 5];
        probs[ClassId::Con.index()] = 0.5;
        let v = pixel_loss(
            PixelLabel::Strong(ClassId::Con),
            &probs,
            LossMode::SupervisedOnly,
        )
        .unwrap();
        assert!((v - 0.693147).abs() < 1e-6, "{v}");
    }

    #[test]
    fn weak_pixel_uniform_probs() {
        let v = pixel_loss(
            PixelLabel::Weak(ClassId::Emp),
            &UNIFORM,
            LossMode::Proposed { lambda: 0.1 },
        )
        .unwrap();
        assert!((v - (-0.160944)).abs() < 1e-6, "{v}");
    }

    #[test]
    fn weak_pixel_drops_out_without_lambda() {
        for mode in [LossMode::SupervisedOnly, LossMode::Proposed { lambda: 0.0 }] {
            assert!(pixel_loss(PixelLabel::Weak(ClassId::Con), &UNIFORM, mode).is_none());
        }
        assert!(pixel_loss(PixelLabel::Ignore, &UNIFORM, LossMode::SemiSupervised).is_none());
    }

    #[test]
    fn semi_supervised_pseudo_label() {
        let probs = [0.1, 0.6, 0.1, 0.1, 0.1];
        let v = pixel_loss(PixelLabel::Weak(ClassId::Con), &probs, LossMode::SemiSupervised)
            .unwrap();
        assert!((v - 0.510826).abs() < 1e-6, "{v}");

        // even when the weak class itself is the argmax it is excluded
        let probs2 = [0.2, 0.6, 0.1, 0.05, 0.05];
        let v2 = pixel_loss(PixelLabel::Weak(ClassId::Ggo), &probs2, LossMode::SemiSupervised)
            .unwrap();
        assert!((v2 - (-(0.2f64).ln())).abs() < 1e-12, "{v2}");

        // ties pick the lowest class index
        let tied = [0.25, 0.0, 0.25, 0.25, 0.25];
        assert_eq!(pseudo_label(&tied, ClassId::Ggo), ClassId::Con);
    }

    #[test]
    fn probability_floor_bounds_the_loss() {
        let mut probs = [0.0; 5];
        probs[4] = 1.0;
        let v = pixel_loss(
            PixelLabel::Strong(ClassId::Con),
            &probs,
            LossMode::SupervisedOnly,
        )
        .unwrap();
        assert!((v - (-PROB_FLOOR.ln())).abs() < 1e-9);
        assert!(v < 16.2);
    }

    #[test]
    fn batch_mean_counts_only_contributing_pixels() {
        let labels = [
            PixelLabel::Strong(ClassId::Con),
            PixelLabel::Weak(ClassId::Ggo),
            PixelLabel::Ignore,
        ];
        let probs: Vec<f64> = UNIFORM.iter().cycle().take(15).cloned().collect();

        // lambda = 0: weak pixel neither adds a term nor inflates the mean
        let v0 = batch_loss(&labels, &probs, LossMode::Proposed { lambda: 0.0 }).unwrap();
        assert!((v0 - 1.609438).abs() < 1e-6);

        // lambda > 0: mean over two contributing pixels
        let v1 = batch_loss(&labels, &probs, LossMode::Proposed { lambda: 0.1 }).unwrap();
        let expect = (1.609438 + -0.160944) / 2.0;
        assert!((v1 - expect).abs() < 1e-6, "{v1} vs {expect}");

        // nothing contributes
        let only_ignore = [PixelLabel::Ignore, PixelLabel::Ignore];
        let v2 = batch_loss(
            &only_ignore,
            &probs[..10],
            LossMode::Proposed { lambda: 1.0 },
        )
        .unwrap();
        assert_eq!(v2, 0.0);
    }

    #[test]
    fn strong_ce_pools_sum_and_count() {
        let labels = [
            PixelLabel::Strong(ClassId::Con),
            PixelLabel::Weak(ClassId::Con),
            PixelLabel::Strong(ClassId::Nor),
        ];
        let probs: Vec<f64> = UNIFORM.iter().cycle().take(15).cloned().collect();
        let (sum, n) = strong_ce_terms(&labels, &probs).unwrap();
        assert_eq!(n, 2);
        assert!((sum - 2.0 * 1.609438).abs() < 1e-5);
    }

    #[test]
    fn graph_loss_matches_direct_evaluation() {
        let labels = [
            PixelLabel::Strong(ClassId::Con),
            PixelLabel::Weak(ClassId::Hcm),
            PixelLabel::Ignore,
            PixelLabel::Strong(ClassId::Emp),
        ];
        let logit_data: Vec<f64> = (0..20).map(|i| ((i * 13 + 5) % 7) as f64 * 0.4 - 1.1).collect();

        for mode in [
            LossMode::SupervisedOnly,
            LossMode::Proposed { lambda: 0.0 },
            LossMode::Proposed { lambda: 0.1 },
            LossMode::Proposed { lambda: 1.0 },
            LossMode::SemiSupervised,
        ] {
            let mut g = Graph::new();
            let logits = g
                .parameter(Tensor::new(vec![1, 2, 2, 5], logit_data.clone()).unwrap());
            let loss = attach_loss(&mut g, logits, &labels, mode).unwrap();

            let mut sg = Graph::new();
            let l2 = sg.leaf(Tensor::new(vec![1, 2, 2, 5], logit_data.clone()).unwrap());
            let probs = sg.softmax_channels(l2).unwrap();
            let direct = batch_loss(&labels, sg.value(probs).data(), mode).unwrap();

            let graph_value = g.value(loss).item().unwrap();
            assert!(
                (graph_value - direct).abs() < 1e-12,
                "{mode:?}: {graph_value} vs {direct}"
            );

            let err = g.gradient_check(logits, loss, 1e-5).unwrap();
            assert!(err < 1e-6, "{mode:?}: relative error {err}");
        }
    }

    #[test]
    fn lambda_zero_weights_match_supervised_only() {
        let labels = [
            PixelLabel::Strong(ClassId::Ggo),
            PixelLabel::Weak(ClassId::Ggo),
        ];
        let data: Vec<f64> = (0..10).map(|i| i as f64 * 0.3 - 1.0).collect();

        let grads: Vec<Vec<f64>> = [LossMode::SupervisedOnly, LossMode::Proposed { lambda: 0.0 }]
            .into_iter()
            .map(|mode| {
                let mut g = Graph::new();
                let logits = g.parameter(Tensor::new(vec![1, 1, 2, 5], data.clone()).unwrap());
                let loss = attach_loss(&mut g, logits, &labels, mode).unwrap();
                let grads = g.backward(loss).unwrap();
                grads.wrt(logits).unwrap().data().to_vec()
            })
            .collect();
        assert_eq!(grads[0], grads[1]);
    }
}
