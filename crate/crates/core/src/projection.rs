//! Modality-specific MLPs that map raw features into a shared width `d`.

use crate::autograd::{Tape, Var};
use crate::corpus::{Dims, Modality, Utterance};
use crate::error::{Error, Result};
use crate::nn::{Activation, Bound, Mlp, Mode, ParamStore, Rng};
use crate::tensor::Matrix;

/// Projected text, video and audio embeddings of one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedFeatures {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub a: Vec<f64>,
}

/// Three two-layer MLPs `D_m → d → d` with GELU and dropout after the
/// hidden layer.
#[derive(Clone, Debug)]
pub struct Projection {
    mlps: [Mlp; 3],
    d: usize,
}

impl Projection {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, dims: Dims, d: usize, dropout: f64) -> Self {
        let mlps = Modality::ALL.map(|m| {
            Mlp::new(
                store,
                rng,
                &format!("proj.{m}"),
                &[dims.of(m), d, d],
                Activation::Gelu,
                Activation::Identity,
                dropout,
            )
        });
        Self { mlps, d }
    }

    /// Wraps caller-built MLPs; all must emit the same width.
    pub fn from_mlps(mlps: [Mlp; 3]) -> Result<Self> {
        let d = mlps[0].out_dim();
        if mlps.iter().any(|m| m.out_dim() != d) {
            return Err(Error::shape("projection MLPs disagree on output width"));
        }
        Ok(Self { mlps, d })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn mlp(&self, m: Modality) -> &Mlp {
        &self.mlps[m.index()]
    }

    pub fn input_dim(&self, m: Modality) -> usize {
        self.mlp(m).in_dim()
    }

    /// Projects an `n × D_m` batch of one modality.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, m: Modality, x: Var, mode: &mut Mode<'_>) -> Result<Var> {
        let got = tape.value(x).cols();
        if got != self.input_dim(m) {
            return Err(Error::shape(format!(
                "{m} features have width {got}, projection expects {}",
                self.input_dim(m)
            )));
        }
        Ok(self.mlp(m).forward(tape, p, x, mode))
    }
}

/// Projects one utterance's features.
pub fn project(
    store: &ParamStore,
    projection: &Projection,
    utterance: &Utterance,
    mode: &mut Mode<'_>,
) -> Result<ProjectedFeatures> {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let mut out: [Vec<f64>; 3] = Default::default();
    for m in Modality::ALL {
        let x = tape.constant(Matrix::row_vector(utterance.features(m)));
        let y = projection.forward(&mut tape, &p, m, x, mode)?;
        out[m.index()] = tape.value(y).as_slice().to_vec();
    }
    let [u, a, v] = out;
    Ok(ProjectedFeatures { u, v, a })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn utterance(dims: Dims) -> Utterance {
        Utterance {
            utt_id: "u".into(),
            speaker: "P1".into(),
            label: 0,
            text_feat: (0..dims.text).map(|i| i as f64 * 0.1).collect(),
            audio_feat: (0..dims.audio).map(|i| -(i as f64) * 0.2).collect(),
            visual_feat: (0..dims.visual).map(|i| (i as f64).sin()).collect(),
        }
    }

    #[test]
    fn zero_weights_emit_the_bias() {
        let dims = Dims {
            text: 3,
            audio: 2,
            visual: 4,
        };
        let mut store = ParamStore::new();
        let mut rng = Rng::seed_from_u64(1);
        let proj = Projection::new(&mut store, &mut rng, dims, 3, 0.5);
        let bias = Matrix::row_vector(&[1.0, -2.0, 0.5]);
        for m in Modality::ALL {
            for layer in &proj.mlp(m).layers {
                let w = store.get_mut(layer.weight);
                *w = Matrix::zeros(w.rows(), w.cols());
            }
            let last = proj.mlp(m).layers.last().unwrap();
            *store.get_mut(last.bias.unwrap()) = bias.clone();
        }
        let out = project(&store, &proj, &utterance(dims), &mut Mode::Eval).unwrap();
        for v in [&out.u, &out.v, &out.a] {
            assert_eq!(v.as_slice(), bias.as_slice());
        }
    }

    #[test]
    fn eval_is_deterministic_and_train_uses_dropout() {
        let dims = Dims {
            text: 5,
            audio: 4,
            visual: 6,
        };
        let mut store = ParamStore::new();
        let mut rng = Rng::seed_from_u64(2);
        let proj = Projection::new(&mut store, &mut rng, dims, 8, 0.5);
        let u = utterance(dims);
        let a = project(&store, &proj, &u, &mut Mode::Eval).unwrap();
        let b = project(&store, &proj, &u, &mut Mode::Eval).unwrap();
        assert_eq!(a, b);
        let mut r1 = Rng::seed_from_u64(7);
        let mut r2 = Rng::seed_from_u64(7);
        let t1 = project(&store, &proj, &u, &mut Mode::Train(&mut r1)).unwrap();
        let t2 = project(&store, &proj, &u, &mut Mode::Train(&mut r2)).unwrap();
        assert_eq!(t1, t2);
        assert_ne!(t1, a);
        assert_eq!(a.u.len(), 8);
    }

    #[test]
    fn wrong_width_is_a_shape_error() {
        let dims = Dims {
            text: 5,
            audio: 4,
            visual: 6,
        };
        let mut store = ParamStore::new();
        let mut rng = Rng::seed_from_u64(2);
        let proj = Projection::new(&mut store, &mut rng, dims, 8, 0.0);
        let mut u = utterance(dims);
        u.audio_feat.pop();
        assert!(matches!(
            project(&store, &proj, &u, &mut Mode::Eval),
            Err(Error::Shape(_))
        ));
    }
}
