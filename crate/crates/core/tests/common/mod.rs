//! Helpers shared by the integration tests: finite differences and
//! straight-line reference implementations written without the tape.

#![allow(dead_code)]

use ariign_core::autograd::{Tape, Var};
use ariign_core::corpus::{generate_synthetic, Corpus, Modality, ModalityNoise, SyntheticSpec};
use ariign_core::nn::{Activation, Bound, Mlp, ParamStore, Rng};
use ariign_core::relgraph::GcnParams;
use ariign_core::Matrix;
use rand::{Rng as _, SeedableRng};

pub fn rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn activate(a: Activation, x: f64) -> f64 {
    match a {
        Activation::Identity => x,
        Activation::Gelu => gelu(x),
        Activation::Relu => x.max(0.0),
        Activation::LeakyRelu(s) => {
            if x > 0.0 {
                x
            } else {
                s * x
            }
        }
        Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
    }
}

/// `x · W + b` one output at a time.
fn affine(w: &Matrix, b: &Matrix, x: &[f64]) -> Vec<f64> {
    (0..w.cols())
        .map(|j| {
            let mut acc = b.get(0, j);
            for (i, xi) in x.iter().enumerate() {
                acc += xi * w.get(i, j);
            }
            acc
        })
        .collect()
}

/// Eval-mode MLP on one row.
pub fn mlp_ref(store: &ParamStore, mlp: &Mlp, x: &[f64]) -> Vec<f64> {
    let last = mlp.layers.len() - 1;
    let mut h = x.to_vec();
    for (k, layer) in mlp.layers.iter().enumerate() {
        let b = store.get(layer.bias.expect("layers carry a bias"));
        h = affine(store.get(layer.weight), b, &h);
        let act = if k == last { mlp.output } else { mlp.hidden };
        h = h.into_iter().map(|v| activate(act, v)).collect();
    }
    h
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn row_times(x: &[f64], w: &Matrix) -> Vec<f64> {
    (0..w.cols())
        .map(|j| x.iter().enumerate().map(|(i, v)| v * w.get(i, j)).sum())
        .collect()
}

/// Relation name of the edge `j → i` in a speaker graph with the full
/// relation set.
pub fn relation_name(i: usize, j: usize, same_speaker: bool) -> &'static str {
    if i == j {
        "self"
    } else if j < i {
        if same_speaker {
            "same_speaker_past"
        } else {
            "other_speaker_past"
        }
    } else if same_speaker {
        "same_speaker_future"
    } else {
        "other_speaker_future"
    }
}

/// Attention weights, indexed `[i][j]` for `|i − j| ≤ window`, and the final
/// node states, computed with nested loops over nodes and relations.
pub fn gcn_ref(
    store: &ParamStore,
    name: &str,
    params: &GcnParams,
    speakers: &[String],
    window: usize,
    feats: &Matrix,
) -> (Vec<Vec<(usize, f64)>>, Matrix) {
    let t = speakers.len();
    let dim = params.dim;
    let w2 = store.get(params.attn_hidden);
    let w1 = store.get(params.attn_out);
    let neighbors = |i: usize| (0..t).filter(move |&j| i.abs_diff(j) <= window);

    let mut omega = vec![Vec::new(); t];
    for i in 0..t {
        let mut scores = Vec::new();
        for j in neighbors(i) {
            let joint: Vec<f64> = feats.row(i).iter().chain(feats.row(j)).copied().collect();
            let mut e = 0.0;
            for h in 0..dim {
                let mut pre = 0.0;
                for (k, v) in joint.iter().enumerate() {
                    pre += v * w2.get(k, h);
                }
                e += gelu(pre) * w1.get(h, 0);
            }
            scores.push((j, e));
        }
        let max = scores.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scores.iter().map(|s| (s.1 - max).exp()).sum();
        omega[i] = scores.iter().map(|&(j, e)| (j, (e - max).exp() / z)).collect();
    }

    let self_w = store.get(params.self_weight);
    let mut psi: Vec<Vec<f64>> = (0..t).map(|i| feats.row(i).to_vec()).collect();
    for _ in 0..params.layers {
        let mut next = vec![vec![0.0; dim]; t];
        for i in 0..t {
            let own = row_times(&psi[i], self_w);
            let w_ii = omega[i].iter().find(|(j, _)| *j == i).unwrap().1;
            for rel in [
                "same_speaker_past",
                "same_speaker_future",
                "other_speaker_past",
                "other_speaker_future",
                "self",
            ] {
                let members: Vec<(usize, f64)> = omega[i]
                    .iter()
                    .copied()
                    .filter(|&(j, _)| relation_name(i, j, speakers[i] == speakers[j]) == rel)
                    .collect();
                if members.is_empty() {
                    continue;
                }
                let w_r = store.get(store.find(&format!("{name}.rel.{rel}")).unwrap());
                let norm = 1.0 / members.len() as f64;
                for (j, w_ij) in members {
                    let msg = row_times(&psi[j], w_r);
                    for c in 0..dim {
                        next[i][c] += norm * (w_ij * msg[c] + w_ii * own[c]);
                    }
                }
            }
        }
        psi = next.into_iter().map(|r| r.into_iter().map(gelu).collect()).collect();
    }
    (omega, Matrix::from_rows(&psi))
}

/// `(1 + cos) / 2`.
pub fn bounded_cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    (1.0 + dot(a, b) / (na * nb)) / 2.0
}

/// Ratio loss plus regularizer with anchor-wise loops. `positive` and
/// `negative` decide membership of the pair `(a, b)`.
pub fn contrast_ref(
    emb: &Matrix,
    positive: impl Fn(usize, usize) -> bool,
    negative: impl Fn(usize, usize) -> bool,
    target: f64,
) -> Option<f64> {
    let n = emb.rows();
    let mut ratio = 0.0;
    let mut reg = 0.0;
    let mut valid = 0;
    for a in 0..n {
        let mut sp = 0.0;
        let mut sn = 0.0;
        let mut dev = 0.0;
        let mut np = 0;
        let mut nn = 0;
        for b in 0..n {
            let s = bounded_cosine(emb.row(a), emb.row(b));
            if positive(a, b) {
                sp += s;
                dev += (s - target) * (s - target);
                np += 1;
            }
            if negative(a, b) {
                sn += s;
                nn += 1;
            }
        }
        if np > 0 && nn > 0 {
            valid += 1;
            ratio += sp / (sp + sn);
            reg += dev / np as f64;
        }
    }
    (valid > 0).then(|| (-ratio + reg) / valid as f64)
}

pub fn iccl_ref(emb: &Matrix, modality: &[Modality], label: &[usize]) -> Option<f64> {
    contrast_ref(
        emb,
        |a, b| a != b && modality[a] == modality[b] && label[a] == label[b],
        |a, b| modality[a] == modality[b] && label[a] != label[b],
        1.0,
    )
}

pub fn imcl_ref(emb: &Matrix, modality: &[Modality], label: &[usize], beta: f64) -> Option<f64> {
    contrast_ref(
        emb,
        |a, b| modality[a] != modality[b] && label[a] == label[b],
        |a, b| modality[a] != modality[b] && label[a] != label[b],
        beta,
    )
}

fn clamp_disc(v: f64) -> f64 {
    v.clamp(1e-7, 1.0 - 1e-7)
}

/// Generator objective with each source fed next to a zero block.
pub fn generator_loss_ref(store: &ParamStore, gen: &Mlp, disc: &Mlp, o1: &Matrix, o2: &Matrix) -> f64 {
    let n = o1.rows();
    let d = o1.cols();
    let mut total = 0.0;
    for i in 0..n {
        let zeros = vec![0.0; d];
        let first: Vec<f64> = o1.row(i).iter().chain(&zeros).copied().collect();
        let second: Vec<f64> = zeros.iter().chain(o2.row(i)).copied().collect();
        for input in [first, second] {
            let fake = mlp_ref(store, gen, &input);
            let p = clamp_disc(mlp_ref(store, disc, &fake)[0]);
            total += (1.0 - p).ln();
        }
    }
    total / n as f64
}

pub fn discriminator_loss_ref(
    store: &ParamStore,
    gen: &Mlp,
    disc: &Mlp,
    real: &Matrix,
    o1: &Matrix,
    o2: &Matrix,
) -> f64 {
    let mut real_term = 0.0;
    for i in 0..real.rows() {
        real_term += clamp_disc(mlp_ref(store, disc, real.row(i))[0]).ln();
    }
    real_term / real.rows() as f64 + generator_loss_ref(store, gen, disc, o1, o2)
}

/// Outcome of comparing analytic gradients with central differences.
#[derive(Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    pub within_1e4: usize,
    pub max_rel: f64,
}

impl GradReport {
    pub fn merge(&mut self, other: GradReport) {
        self.checked += other.checked;
        self.within_1e4 += other.within_1e4;
        self.max_rel = self.max_rel.max(other.max_rel);
    }

    pub fn share_within_1e4(&self) -> f64 {
        self.within_1e4 as f64 / self.checked as f64
    }

    pub fn passes(&self) -> bool {
        self.checked > 0 && self.share_within_1e4() >= 0.95 && self.max_rel < 1e-3
    }
}

pub const FD_STEP: f64 = 1e-5;

/// Differences below this magnitude are compared absolutely: central
/// differences carry roughly `1e-11` of rounding noise at this step.
const REL_FLOOR: f64 = 1e-6;

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Checks `d loss / d θ` for every parameter of `store` and every matrix
/// in `inputs`, sampling at most `samples` coordinates per tensor.
pub fn check_gradients(
    store: &ParamStore,
    inputs: &[Matrix],
    samples: usize,
    rng: &mut Rng,
    loss: impl Fn(&mut Tape, &Bound, &[Var]) -> Var,
) -> GradReport {
    check_gradients_where(store, inputs, samples, rng, |_| true, loss)
}

/// As [`check_gradients`], restricted to parameters whose name passes
/// `select`.
pub fn check_gradients_where(
    store: &ParamStore,
    inputs: &[Matrix],
    samples: usize,
    rng: &mut Rng,
    select: impl Fn(&str) -> bool,
    loss: impl Fn(&mut Tape, &Bound, &[Var]) -> Var,
) -> GradReport {
    let eval = |store: &ParamStore, inputs: &[Matrix]| -> f64 {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let xs: Vec<Var> = inputs.iter().map(|m| tape.constant(m.clone())).collect();
        let l = loss(&mut tape, &p, &xs);
        tape.value(l).item()
    };

    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let xs: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
    let l = loss(&mut tape, &p, &xs);
    let mut grads = tape.backward(l);
    let input_grads: Vec<Option<Matrix>> = xs.iter().map(|v| grads.take(*v)).collect();
    let param_grads = p.collect(&mut grads);

    let mut report = GradReport::default();
    let mut record = |analytic: f64, numeric: f64| {
        let e = rel_error(analytic, numeric);
        report.checked += 1;
        if e < 1e-4 {
            report.within_1e4 += 1;
        }
        report.max_rel = report.max_rel.max(e);
    };
    let pick = |len: usize, rng: &mut Rng| -> Vec<usize> {
        if len <= samples {
            (0..len).collect()
        } else {
            (0..samples).map(|_| rng.random_range(0..len)).collect()
        }
    };

    for (k, id) in store.ids().enumerate() {
        if !select(store.name(id)) {
            continue;
        }
        let len = store.get(id).len();
        for c in pick(len, rng) {
            let analytic = param_grads[k].as_ref().map_or(0.0, |g| g.as_slice()[c]);
            let mut plus = store.clone();
            plus.get_mut(id).as_mut_slice()[c] += FD_STEP;
            let mut minus = store.clone();
            minus.get_mut(id).as_mut_slice()[c] -= FD_STEP;
            let numeric = (eval(&plus, inputs) - eval(&minus, inputs)) / (2.0 * FD_STEP);
            record(analytic, numeric);
        }
    }
    for (k, m) in inputs.iter().enumerate() {
        for c in pick(m.len(), rng) {
            let analytic = input_grads[k].as_ref().map_or(0.0, |g| g.as_slice()[c]);
            let mut plus = inputs.to_vec();
            plus[k].as_mut_slice()[c] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].as_mut_slice()[c] -= FD_STEP;
            let numeric = (eval(store, &plus) - eval(store, &minus)) / (2.0 * FD_STEP);
            record(analytic, numeric);
        }
    }
    report
}

/// Speakers alternating in irregular runs.
pub fn speakers(rng: &mut Rng, t: usize) -> Vec<String> {
    (0..t).map(|_| format!("P{}", rng.random_range(0..2))).collect()
}

/// The noisy corpus of the modality and ablation experiments: text
/// cleanest, visual noisiest.
pub fn noisy_corpus() -> Corpus {
    let spec = SyntheticSpec {
        noise: ModalityNoise {
            text: 1.0,
            audio: 2.0,
            visual: 4.0,
        },
        ..SyntheticSpec::default()
    };
    generate_synthetic(&spec).unwrap()
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}
