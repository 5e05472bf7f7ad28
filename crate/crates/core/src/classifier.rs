//! Emotion inference head: fused stream outputs to class probabilities.

use std::rc::Rc;

use crate::autograd::{softmax_in_place, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Activation, Bound, Mlp, Mode, ParamStore, Rng};
use crate::tensor::Matrix;

/// Concatenates per-stream vectors of equal length.
pub fn fuse(parts: &[&[f64]]) -> Result<Vec<f64>> {
    let Some(first) = parts.first() else {
        return Err(Error::Argument("nothing to fuse".into()));
    };
    if let Some(bad) = parts.iter().find(|p| p.len() != first.len()) {
        return Err(Error::shape(format!(
            "fusion inputs disagree on length: {} vs {}",
            first.len(),
            bad.len()
        )));
    }
    Ok(parts.concat())
}

/// Two ReLU layers of widths `2d` and `d`, then a linear decision layer.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub mlp: Mlp,
    classes: usize,
}

impl Classifier {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, in_dim: usize, d: usize, classes: usize, dropout: f64) -> Self {
        let mlp = Mlp::new(
            store,
            rng,
            "cls",
            &[in_dim, 2 * d, d, classes],
            Activation::Relu,
            Activation::Identity,
            dropout,
        );
        Self { mlp, classes }
    }

    pub fn in_dim(&self) -> usize {
        self.mlp.in_dim()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn logits(&self, tape: &mut Tape, p: &Bound, z: Var, mode: &mut Mode<'_>) -> Result<Var> {
        let got = tape.value(z).cols();
        if got != self.in_dim() {
            return Err(Error::shape(format!(
                "classifier expects width {}, got {got}",
                self.in_dim()
            )));
        }
        Ok(self.mlp.forward(tape, p, z, mode))
    }
}

/// Class probabilities for one fused vector.
pub fn classify(store: &ParamStore, classifier: &Classifier, z_f: &[f64], mode: &mut Mode<'_>) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let z = tape.constant(Matrix::row_vector(z_f));
    let logits = classifier.logits(&mut tape, &p, z, mode)?;
    let mut probs = tape.value(logits).as_slice().to_vec();
    softmax_in_place(&mut probs);
    Ok(probs)
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = k;
        }
    }
    best
}

fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    match labels.iter().position(|&l| l >= classes) {
        Some(i) => Err(Error::Label {
            line: i,
            label: labels[i],
            class_count: classes,
        }),
        None => Ok(()),
    }
}

/// Mean negative log-likelihood of `labels` under row-wise softmax of
/// `logits`.
pub fn nll_on_tape(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let (n, c) = tape.value(logits).shape();
    if labels.len() != n {
        return Err(Error::shape(format!("{n} logit rows but {} labels", labels.len())));
    }
    check_labels(labels, c)?;
    let lp = tape.log_softmax_rows(logits);
    let picked = tape.pick_per_row(lp, Rc::new(labels.to_vec()));
    let mean = tape.mean(picked);
    Ok(tape.scale(mean, -1.0))
}

/// Mean `−ln p(label)` over the rows of an `n × C` probability matrix.
pub fn cls_loss(probs: &Matrix, labels: &[usize]) -> Result<f64> {
    if labels.len() != probs.rows() || labels.is_empty() {
        return Err(Error::shape(format!(
            "{} probability rows but {} labels",
            probs.rows(),
            labels.len()
        )));
    }
    check_labels(labels, probs.cols())?;
    let total: f64 = labels.iter().enumerate().map(|(i, &l)| -probs.get(i, l).ln()).sum();
    Ok(total / labels.len() as f64)
}
