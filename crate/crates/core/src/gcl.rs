//! Graph contrastive losses over node embeddings of several modality
//! streams.
//!
//! Every row of a batch acts as an anchor. For anchor `a` with positive
//! similarities `s⁺` and negative similarities `s⁻` the ratio term is
//! `−Σs⁺ / (Σs⁺ + Σs⁻)` (no logarithm) and the regularizer pulls
//! similarities toward a target: `1` for the class loss (ICCL), the margin
//! `β` for the modality loss (IMCL). Both are averaged over anchors that
//! have at least one positive and one negative.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Mask, Tape, Var};
use crate::corpus::Modality;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    /// `(1 + cos(a, b)) / 2`.
    #[default]
    BoundedCosine,
    /// Row softmax of raw dot products with the self-pair excluded.
    SoftmaxedDot,
}

/// Which rows count as IMCL positives.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImclPositiveRule {
    /// Same class, other modality.
    #[default]
    CrossModal,
    /// Same class, same modality.
    SameModal,
}

/// Which similarities the IMCL regularizer pulls toward `β`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegTarget {
    #[default]
    Positives,
    /// The cross-modal negatives.
    LiteralDelta,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GclConfig {
    pub beta: f64,
    pub lambda: f64,
    pub similarity: Similarity,
    pub imcl_positive_rule: ImclPositiveRule,
    pub reg_target: RegTarget,
}

impl Default for GclConfig {
    fn default() -> Self {
        Self {
            beta: 0.8,
            lambda: 0.5,
            similarity: Similarity::default(),
            imcl_positive_rule: ImclPositiveRule::default(),
            reg_target: RegTarget::default(),
        }
    }
}

impl GclConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("beta", self.beta), ("lambda", self.lambda)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

/// Embeddings with their modality and class tags, one per row.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastBatch {
    pub embeddings: Matrix,
    pub modality: Vec<Modality>,
    pub label: Vec<usize>,
}

impl ContrastBatch {
    pub fn new(embeddings: Matrix, modality: Vec<Modality>, label: Vec<usize>) -> Result<Self> {
        let n = embeddings.rows();
        if modality.len() != n || label.len() != n {
            return Err(Error::shape(format!(
                "contrast batch has {n} rows, {} modality tags and {} labels",
                modality.len(),
                label.len()
            )));
        }
        Ok(Self {
            embeddings,
            modality,
            label,
        })
    }
}

/// A contrastive loss on the tape with its parts.
#[derive(Clone, Copy, Debug)]
pub struct ContrastTerms {
    pub total: Var,
    pub ratio: Var,
    pub reg: Var,
    pub valid: usize,
    pub skipped: usize,
}

/// Scalar values of a contrastive loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContrastValue {
    pub total: f64,
    pub ratio: f64,
    pub reg: f64,
    pub valid: usize,
    pub skipped: usize,
}

/// `n × n` pairwise similarities of the rows of `emb`.
pub fn similarity_on_tape(tape: &mut Tape, emb: Var, kind: Similarity) -> Var {
    match kind {
        Similarity::BoundedCosine => {
            let unit = tape.row_normalize(emb);
            let cos = tape.matmul_nt(unit, unit);
            let half = tape.scale(cos, 0.5);
            tape.add_scalar(half, 0.5)
        }
        Similarity::SoftmaxedDot => {
            let dots = tape.matmul_nt(emb, emb);
            let n = tape.value(dots).rows();
            let diag = tape.constant(Matrix::from_fn(n, n, |i, j| if i == j { -1e300 } else { 0.0 }));
            let masked = tape.add(dots, diag);
            tape.row_softmax(masked)
        }
    }
}

/// Ratio plus regularizer for the given positive/negative masks.
fn contrast(
    tape: &mut Tape,
    sim: Var,
    pos: Mask,
    neg: Mask,
    reg_mask: Option<Mask>,
    target: f64,
) -> Result<ContrastTerms> {
    let n = tape.value(sim).rows();
    let reg_mask = Rc::new(reg_mask.unwrap_or_else(|| pos.clone()));
    let valid_rows: Vec<bool> = (0..n).map(|i| pos.row_count(i) > 0 && neg.row_count(i) > 0).collect();
    let valid = valid_rows.iter().filter(|v| **v).count();
    if valid == 0 {
        return Err(Error::DegenerateBatch { rows: n });
    }
    let share = 1.0 / valid as f64;
    let weight: Vec<f64> = valid_rows.iter().map(|&v| if v { share } else { 0.0 }).collect();
    let pad: Vec<f64> = valid_rows.iter().map(|&v| if v { 0.0 } else { 1.0 }).collect();
    let reg_weight: Vec<f64> = (0..n)
        .map(|i| {
            let c = reg_mask.row_count(i);
            if valid_rows[i] && c > 0 {
                share / c as f64
            } else {
                0.0
            }
        })
        .collect();

    let sp = tape.masked_row_sum(sim, Rc::new(pos));
    let sn = tape.masked_row_sum(sim, Rc::new(neg));
    let pad = tape.constant(Matrix::column_vector(&pad));
    let denom = tape.add(sp, sn);
    let denom = tape.add(denom, pad);
    let frac = tape.div(sp, denom);
    let weight = tape.constant(Matrix::column_vector(&weight));
    let weighted = tape.mul(frac, weight);
    let ratio = tape.sum(weighted);
    let ratio = tape.scale(ratio, -1.0);

    let dev = tape.masked_row_sq_dev(sim, reg_mask, target);
    let reg_weight = tape.constant(Matrix::column_vector(&reg_weight));
    let reg = tape.mul(dev, reg_weight);
    let reg = tape.sum(reg);
    let total = tape.add(ratio, reg);
    Ok(ContrastTerms {
        total,
        ratio,
        reg,
        valid,
        skipped: n - valid,
    })
}

fn check_tags(tape: &Tape, sim: Var, modality: &[Modality], label: &[usize]) -> Result<usize> {
    let n = tape.value(sim).rows();
    if modality.len() != n || label.len() != n {
        return Err(Error::shape("contrast tags do not match the similarity matrix"));
    }
    Ok(n)
}

/// Intra-class / inter-class loss within each modality.
pub fn iccl_on_tape(tape: &mut Tape, sim: Var, modality: &[Modality], label: &[usize]) -> Result<ContrastTerms> {
    let n = check_tags(tape, sim, modality, label)?;
    let pos = Mask::from_fn(n, n, |a, b| {
        a != b && modality[a] == modality[b] && label[a] == label[b]
    });
    let neg = Mask::from_fn(n, n, |a, b| modality[a] == modality[b] && label[a] != label[b]);
    contrast(tape, sim, pos, neg, None, 1.0)
}

/// Intra-modal / inter-modal loss aligning classes across modalities.
pub fn imcl_on_tape(
    tape: &mut Tape,
    sim: Var,
    modality: &[Modality],
    label: &[usize],
    config: &GclConfig,
) -> Result<ContrastTerms> {
    let n = check_tags(tape, sim, modality, label)?;
    let pos = match config.imcl_positive_rule {
        ImclPositiveRule::CrossModal => Mask::from_fn(n, n, |a, b| modality[a] != modality[b] && label[a] == label[b]),
        ImclPositiveRule::SameModal => Mask::from_fn(n, n, |a, b| {
            a != b && modality[a] == modality[b] && label[a] == label[b]
        }),
    };
    let neg = Mask::from_fn(n, n, |a, b| modality[a] != modality[b] && label[a] != label[b]);
    let reg_mask = match config.reg_target {
        RegTarget::Positives => None,
        RegTarget::LiteralDelta => Some(neg.clone()),
    };
    contrast(tape, sim, pos, neg, reg_mask, config.beta)
}

fn evaluate(
    batch: &ContrastBatch,
    config: &GclConfig,
    f: impl FnOnce(&mut Tape, Var) -> Result<ContrastTerms>,
) -> Result<ContrastValue> {
    let mut tape = Tape::new();
    let emb = tape.constant(batch.embeddings.clone());
    let sim = similarity_on_tape(&mut tape, emb, config.similarity);
    let t = f(&mut tape, sim)?;
    Ok(ContrastValue {
        total: tape.value(t.total).item(),
        ratio: tape.value(t.ratio).item(),
        reg: tape.value(t.reg).item(),
        valid: t.valid,
        skipped: t.skipped,
    })
}

pub fn iccl_loss(batch: &ContrastBatch, config: &GclConfig) -> Result<ContrastValue> {
    evaluate(batch, config, |tape, sim| {
        iccl_on_tape(tape, sim, &batch.modality, &batch.label)
    })
}

pub fn imcl_loss(batch: &ContrastBatch, config: &GclConfig) -> Result<ContrastValue> {
    evaluate(batch, config, |tape, sim| {
        imcl_on_tape(tape, sim, &batch.modality, &batch.label, config)
    })
}

/// `λ·imcl + (1 − λ)·iccl`.
pub fn hybrid_loss(l_imcl: f64, l_iccl: f64, lambda: f64) -> f64 {
    lambda * l_imcl + (1.0 - lambda) * l_iccl
}
