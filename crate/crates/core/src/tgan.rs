//! Tri-modal generative adversarial networks.
//!
//! Each modality `M` gets a generator that maps the projections of the two
//! other modalities into `M`'s space and a discriminator that tells real
//! projections of `M` from generated ones. For target `T` with sources
//! `A`, `V` and discriminator outputs clamped to `[ε, 1 − ε]`:
//!
//! ```text
//! L_gen = E[log(1 − D_T(G_T(a)))] + E[log(1 − D_T(G_T(v)))]          (minimized)
//! L_dis = E[log D_T(t)] + E[log(1 − D_T(G_T(a)))] + E[log(1 − D_T(G_T(v)))]  (maximized)
//! ```
//!
//! The generator takes a `2d` input. In [`GanInputMode::PerSourcePad`] each
//! source is fed alone with the other slot zeroed, which evaluates the two
//! expectations literally; [`GanInputMode::ConcatJoint`] feeds both sources
//! together and counts the joint sample once per source term.

use std::rc::Rc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::corpus::Modality;
use crate::error::{Error, Result};
use crate::nn::{Activation, Adam, Bound, Mlp, Mode, ParamStore, Rng};
use crate::projection::Projection;
use crate::tensor::Matrix;

/// Clamp applied to discriminator outputs before taking logs.
pub const DISC_EPS: f64 = 1e-7;
const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GanInputMode {
    #[default]
    PerSourcePad,
    ConcatJoint,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GanConfig {
    #[serde(default)]
    pub input_mode: GanInputMode,
    /// Keep the projection MLPs fixed during the adversarial phase.
    #[serde(default)]
    pub freeze_projection: bool,
}

#[derive(Clone, Debug)]
pub struct GanPair {
    pub target: Modality,
    pub generator: Mlp,
    pub discriminator: Mlp,
    d: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanStepReport {
    pub gen_loss: f64,
    pub disc_loss: f64,
    pub disc_real_mean: f64,
    pub disc_fake_mean: f64,
}

impl GanPair {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, target: Modality, d: usize) -> Self {
        let generator = Mlp::new(
            store,
            rng,
            &Self::generator_prefix(target),
            &[2 * d, d, d],
            Activation::Gelu,
            Activation::Identity,
            0.0,
        );
        let discriminator = Mlp::new(
            store,
            rng,
            &Self::discriminator_prefix(target),
            &[d, d, 1],
            Activation::LeakyRelu(LEAKY_SLOPE),
            Activation::Sigmoid,
            0.0,
        );
        Self {
            target,
            generator,
            discriminator,
            d,
        }
    }

    pub fn generator_prefix(target: Modality) -> String {
        format!("gan.{target}.gen.")
    }

    pub fn discriminator_prefix(target: Modality) -> String {
        format!("gan.{target}.disc.")
    }

    pub fn d(&self) -> usize {
        self.d
    }

    fn check_source(&self, tape: &Tape, x: Var) -> Result<usize> {
        let (n, w) = tape.value(x).shape();
        if w != self.d {
            return Err(Error::shape(format!(
                "generator input has width {w}, expected {}",
                self.d
            )));
        }
        Ok(n)
    }

    /// `G(other1 ⊕ other2)` for `n × d` batches.
    pub fn generate(&self, tape: &mut Tape, p: &Bound, other1: Var, other2: Var) -> Result<Var> {
        let n1 = self.check_source(tape, other1)?;
        let n2 = self.check_source(tape, other2)?;
        if n1 != n2 {
            return Err(Error::shape(format!("source batches have {n1} and {n2} rows")));
        }
        let x = tape.hcat(&[other1, other2]);
        Ok(self.generator.forward(tape, p, x, &mut Mode::Eval))
    }

    /// Clamped discriminator output, `n × 1`.
    pub fn discriminate(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let w = tape.value(x).cols();
        if w != self.d {
            return Err(Error::shape(format!(
                "discriminator input has width {w}, expected {}",
                self.d
            )));
        }
        let y = self.discriminator.forward(tape, p, x, &mut Mode::Eval);
        Ok(tape.clamp(y, DISC_EPS, 1.0 - DISC_EPS))
    }

    /// The two generated batches entering the source terms of the losses.
    fn fakes(&self, tape: &mut Tape, p: &Bound, other1: Var, other2: Var, mode: GanInputMode) -> Result<[Var; 2]> {
        let n = self.check_source(tape, other1)?;
        if n == 0 {
            return Err(Error::Argument("adversarial losses need a nonempty batch".into()));
        }
        match mode {
            GanInputMode::PerSourcePad => {
                let zeros = tape.constant(Matrix::zeros(n, self.d));
                let first = self.generate(tape, p, other1, zeros)?;
                let second = self.generate(tape, p, zeros, other2)?;
                Ok([first, second])
            }
            GanInputMode::ConcatJoint => {
                let joint = self.generate(tape, p, other1, other2)?;
                Ok([joint, joint])
            }
        }
    }

    fn mean_log_one_minus(&self, tape: &mut Tape, p: &Bound, fake: Var) -> Result<(Var, f64)> {
        let d = self.discriminate(tape, p, fake)?;
        let mean_d = tape.value(d).sum() / tape.value(d).rows() as f64;
        let om = tape.one_minus(d);
        let l = tape.log(om);
        Ok((tape.mean(l), mean_d))
    }

    /// Generator objective, minimized by the generator.
    pub fn generator_loss(
        &self,
        tape: &mut Tape,
        p: &Bound,
        other1: Var,
        other2: Var,
        mode: GanInputMode,
    ) -> Result<Var> {
        let [f1, f2] = self.fakes(tape, p, other1, other2, mode)?;
        let (l1, _) = self.mean_log_one_minus(tape, p, f1)?;
        let (l2, _) = self.mean_log_one_minus(tape, p, f2)?;
        Ok(tape.add(l1, l2))
    }

    /// Discriminator objective, maximized by the discriminator. Generated
    /// samples enter as constants, so no gradient reaches the generator.
    pub fn discriminator_loss(
        &self,
        tape: &mut Tape,
        p: &Bound,
        real: Var,
        other1: Var,
        other2: Var,
        mode: GanInputMode,
    ) -> Result<DiscriminatorTerms> {
        let n_real = tape.value(real).rows();
        if n_real == 0 {
            return Err(Error::Argument("adversarial losses need a nonempty batch".into()));
        }
        let fakes = self.fakes(tape, p, other1, other2, mode)?;
        let d_real = self.discriminate(tape, p, real)?;
        let real_mean = tape.value(d_real).sum() / n_real as f64;
        let log_real = tape.log(d_real);
        let mut loss = tape.mean(log_real);
        let mut fake_mean = 0.0;
        for f in fakes {
            let detached = tape.constant(tape.value(f).clone());
            let (term, m) = self.mean_log_one_minus(tape, p, detached)?;
            fake_mean += m / 2.0;
            loss = tape.add(loss, term);
        }
        Ok(DiscriminatorTerms {
            loss,
            real_mean,
            fake_mean,
        })
    }
}

pub struct DiscriminatorTerms {
    pub loss: Var,
    pub real_mean: f64,
    pub fake_mean: f64,
}

/// Builds the three pairs in text, audio, visual order.
pub fn build_pairs(store: &mut ParamStore, rng: &mut Rng, d: usize) -> [GanPair; 3] {
    Modality::ALL.map(|m| GanPair::new(store, rng, m, d))
}

fn prefix_mask(store: &ParamStore, prefixes: &[String]) -> Vec<bool> {
    store
        .iter()
        .map(|(name, _)| prefixes.iter().any(|p| name.starts_with(p.as_str())))
        .collect()
}

fn check_finite(what: &str, target: Modality, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "{what} for target {target} is {value}; aborting adversarial phase"
        )))
    }
}

/// Update counts of one adversarial run, indexed by [`Modality::index`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GanUpdateCounts {
    pub discriminator: [usize; 3],
    pub generator: [usize; 3],
}

/// One batch of the adversarial phase: a discriminator ascent step for every
/// pair, then a generator descent step for every pair.
///
/// `inputs` holds the raw `n × D_m` features per modality. Dropout masks of
/// the projection are drawn once and shared by both steps.
#[allow(clippy::too_many_arguments)]
pub fn adversarial_step(
    store: &mut ParamStore,
    adam: &mut Adam,
    projection: &Projection,
    pairs: &[GanPair; 3],
    inputs: &[Matrix; 3],
    config: &GanConfig,
    rng: &mut Rng,
    counts: &mut GanUpdateCounts,
) -> Result<[GanStepReport; 3]> {
    let mask_rng = rng.clone();
    let mut reports = [GanStepReport {
        gen_loss: 0.0,
        disc_loss: 0.0,
        disc_real_mean: 0.0,
        disc_fake_mean: 0.0,
    }; 3];

    // Discriminator ascent: minimize the negated objective, D params only.
    {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let mut step_rng = mask_rng.clone();
        let mut mode = Mode::Train(&mut step_rng);
        let mut proj = Vec::with_capacity(3);
        for m in Modality::ALL {
            let x = tape.constant(inputs[m.index()].clone());
            let y = projection.forward(&mut tape, &p, m, x, &mut mode)?;
            proj.push(tape.constant(tape.value(y).clone()));
        }
        let mut total: Option<Var> = None;
        for pair in pairs {
            let [s1, s2] = pair.target.others();
            let terms = pair.discriminator_loss(
                &mut tape,
                &p,
                proj[pair.target.index()],
                proj[s1.index()],
                proj[s2.index()],
                config.input_mode,
            )?;
            let value = tape.value(terms.loss).item();
            check_finite("discriminator loss", pair.target, value)?;
            let r = &mut reports[pair.target.index()];
            r.disc_loss = value;
            r.disc_real_mean = terms.real_mean;
            r.disc_fake_mean = terms.fake_mean;
            total = Some(match total {
                Some(t) => tape.add(t, terms.loss),
                None => terms.loss,
            });
        }
        let total = total.expect("three pairs");
        let neg = tape.scale(total, -1.0);
        let mut grads = tape.backward(neg);
        let grads = p.collect(&mut grads);
        let prefixes: Vec<String> = pairs
            .iter()
            .map(|pair| GanPair::discriminator_prefix(pair.target))
            .collect();
        let mask = prefix_mask(store, &prefixes);
        adam.step(store, &grads, |id| mask[id.index()]);
        for pair in pairs {
            counts.discriminator[pair.target.index()] += 1;
        }
    }

    // Generator descent on the updated discriminators.
    let mut step_rng = mask_rng;
    {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let mut mode = Mode::Train(&mut step_rng);
        let mut proj = Vec::with_capacity(3);
        for m in Modality::ALL {
            let x = tape.constant(inputs[m.index()].clone());
            proj.push(projection.forward(&mut tape, &p, m, x, &mut mode)?);
        }
        let mut total: Option<Var> = None;
        for pair in pairs {
            let [s1, s2] = pair.target.others();
            let loss = pair.generator_loss(&mut tape, &p, proj[s1.index()], proj[s2.index()], config.input_mode)?;
            let value = tape.value(loss).item();
            check_finite("generator loss", pair.target, value)?;
            reports[pair.target.index()].gen_loss = value;
            total = Some(match total {
                Some(t) => tape.add(t, loss),
                None => loss,
            });
        }
        let total = total.expect("three pairs");
        let mut grads = tape.backward(total);
        let grads = p.collect(&mut grads);
        let mut prefixes: Vec<String> = pairs
            .iter()
            .map(|pair| GanPair::generator_prefix(pair.target))
            .collect();
        if !config.freeze_projection {
            prefixes.push("proj.".to_string());
        }
        let mask = prefix_mask(store, &prefixes);
        adam.step(store, &grads, |id| mask[id.index()]);
        for pair in pairs {
            counts.generator[pair.target.index()] += 1;
        }
    }
    *rng = step_rng;
    Ok(reports)
}

/// Batches of raw per-modality features for one adversarial epoch, in the
/// order drawn from `rng`.
pub fn utterance_batches(features: &[Matrix; 3], batch_size: usize, rng: &mut Rng) -> Result<Vec<[Matrix; 3]>> {
    if batch_size == 0 {
        return Err(Error::Argument("batch size must be at least 1".into()));
    }
    let n = features[0].rows();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    Ok(order
        .chunks(batch_size)
        .map(|chunk| {
            let idx = Rc::new(chunk.to_vec());
            [0, 1, 2].map(|k| features[k].gather_rows(&idx))
        })
        .collect())
}

/// Runs `epochs` passes of the adversarial phase over the utterances whose
/// raw features are stacked in `features` (one `N × D_m` matrix per
/// modality).
#[allow(clippy::too_many_arguments)]
pub fn adversarial_phase(
    store: &mut ParamStore,
    adam: &mut Adam,
    projection: &Projection,
    pairs: &[GanPair; 3],
    features: &[Matrix; 3],
    batch_size: usize,
    epochs: usize,
    config: &GanConfig,
    rng: &mut Rng,
) -> Result<(Vec<[GanStepReport; 3]>, GanUpdateCounts)> {
    if epochs == 0 {
        return Err(Error::Argument("adversarial phase needs at least one epoch".into()));
    }
    let mut counts = GanUpdateCounts::default();
    let mut log = Vec::new();
    for _ in 0..epochs {
        for batch in utterance_batches(features, batch_size, rng)? {
            log.push(adversarial_step(
                store,
                adam,
                projection,
                pairs,
                &batch,
                config,
                rng,
                &mut counts,
            )?);
        }
    }
    Ok((log, counts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn setup(d: usize) -> (ParamStore, GanPair) {
        let mut store = ParamStore::new();
        let mut rng = Rng::seed_from_u64(5);
        let pair = GanPair::new(&mut store, &mut rng, Modality::Text, d);
        (store, pair)
    }

    /// Forces the discriminator to a constant output `c` by zeroing weights
    /// and setting the final bias to `logit(c)`.
    fn constant_discriminator(store: &mut ParamStore, pair: &GanPair, logit: f64) {
        for layer in &pair.discriminator.layers {
            let w = store.get_mut(layer.weight);
            *w = Matrix::zeros(w.rows(), w.cols());
            let b = store.get_mut(layer.bias.unwrap());
            *b = Matrix::zeros(b.rows(), b.cols());
        }
        let last = pair.discriminator.layers.last().unwrap();
        *store.get_mut(last.bias.unwrap()) = Matrix::scalar(logit);
    }

    fn batch(n: usize, d: usize, offset: f64) -> Matrix {
        Matrix::from_fn(n, d, |i, j| ((i * d + j) as f64 * 0.37 + offset).sin())
    }

    #[test]
    fn constant_half_discriminator_gives_log_half_terms() {
        let (mut store, pair) = setup(4);
        constant_discriminator(&mut store, &pair, 0.0);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let o1 = tape.constant(batch(3, 4, 0.0));
        let o2 = tape.constant(batch(3, 4, 1.0));
        let real = tape.constant(batch(3, 4, 2.0));
        for mode in [GanInputMode::PerSourcePad, GanInputMode::ConcatJoint] {
            let g = pair.generator_loss(&mut tape, &p, o1, o2, mode).unwrap();
            assert!((tape.value(g).item() - (-1.386_294_361_119_890_6)).abs() < 1e-12);
            let d = pair.discriminator_loss(&mut tape, &p, real, o1, o2, mode).unwrap();
            assert!((tape.value(d.loss).item() - (-2.079_441_541_679_835_8)).abs() < 1e-12);
        }
    }

    #[test]
    fn clamped_discriminator_bounds_the_generator_loss() {
        let (mut store, pair) = setup(4);
        constant_discriminator(&mut store, &pair, 60.0);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let o1 = tape.constant(batch(2, 4, 0.0));
        let o2 = tape.constant(batch(2, 4, 1.0));
        let g = pair
            .generator_loss(&mut tape, &p, o1, o2, GanInputMode::PerSourcePad)
            .unwrap();
        let expected = 2.0 * DISC_EPS.ln();
        assert!((tape.value(g).item() - expected).abs() < 1e-6);
        assert!((expected - (-32.236)).abs() < 1e-3);
    }

    #[test]
    fn zero_generator_emits_bias_and_is_deterministic() {
        let (mut store, pair) = setup(3);
        for layer in &pair.generator.layers {
            let w = store.get_mut(layer.weight);
            *w = Matrix::zeros(w.rows(), w.cols());
        }
        let bias = Matrix::row_vector(&[0.25, -1.0, 4.0]);
        *store.get_mut(pair.generator.layers[1].bias.unwrap()) = bias.clone();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let o1 = tape.constant(batch(1, 3, 0.0));
        let o2 = tape.constant(batch(1, 3, 0.5));
        let a = pair.generate(&mut tape, &p, o1, o2).unwrap();
        let b = pair.generate(&mut tape, &p, o1, o2).unwrap();
        assert_eq!(tape.value(a), &bias);
        assert_eq!(tape.value(a), tape.value(b));
    }

    #[test]
    fn discriminator_loss_sends_no_gradient_to_the_generator() {
        let (store, pair) = setup(4);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let o1 = tape.constant(batch(3, 4, 0.0));
        let o2 = tape.constant(batch(3, 4, 1.0));
        let real = tape.constant(batch(3, 4, 2.0));
        let d = pair
            .discriminator_loss(&mut tape, &p, real, o1, o2, GanInputMode::PerSourcePad)
            .unwrap();
        let mut grads = tape.backward(d.loss);
        let grads = p.collect(&mut grads);
        for (id, g) in store.ids().zip(&grads) {
            let name = store.name(id);
            if name.contains(".gen.") {
                assert!(g.is_none(), "{name} received a gradient");
            }
            if name.contains(".disc.") {
                assert!(g.is_some(), "{name} missing a gradient");
            }
        }
    }

    #[test]
    fn empty_batch_is_an_argument_error() {
        let (store, pair) = setup(2);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let e = tape.constant(Matrix::zeros(0, 2));
        assert!(matches!(
            pair.generator_loss(&mut tape, &p, e, e, GanInputMode::PerSourcePad),
            Err(Error::Argument(_))
        ));
        assert!(matches!(
            pair.discriminator_loss(&mut tape, &p, e, e, e, GanInputMode::PerSourcePad),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let (store, pair) = setup(2);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let a = tape.constant(Matrix::zeros(1, 3));
        assert!(matches!(pair.generate(&mut tape, &p, a, a), Err(Error::Shape(_))));
    }
}
