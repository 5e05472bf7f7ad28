//! Two-phase training: adversarial cross-modal generation over utterances,
//! then graph convolution with contrastive and classification losses over
//! batches of dialogues.
//!
//! All randomness comes from one `ChaCha8` stream seeded by
//! [`TrainConfig::seed`]. Draw order: parameter initialization (projection,
//! generator/discriminator pairs, graph streams, classifier), then per
//! adversarial epoch the utterance shuffle followed by each step's dropout
//! masks, then per graph epoch the dialogue shuffle followed by each step's
//! dropout masks.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::classifier::{argmax, nll_on_tape, Classifier};
use crate::corpus::{CorpusMeta, Dialogue, Modality, SplitRatios, Splits, Utterance};
use crate::error::{Error, Result};
use crate::gcl::{
    iccl_on_tape, imcl_on_tape, similarity_on_tape, ContrastTerms, GclConfig, ImclPositiveRule, RegTarget, Similarity,
};
use crate::metrics::MetricsReport;
use crate::nn::{Adam, AdamConfig, Bound, Mode, ParamStore, Rng};
use crate::projection::Projection;
use crate::relgraph::{
    build_graph, edge_attention, edge_attention_on_tape, gcn_forward_on_tape, GcnParams, RelationSet, SelfTerm,
    SpeakerGraph, Topology,
};
use crate::tensor::Matrix;
use crate::tgan::{adversarial_phase, build_pairs, GanConfig, GanInputMode, GanPair};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// One graph per modality; stream outputs are concatenated.
    #[default]
    CrossModal,
    /// Projections summed into one stream before the graph.
    Add,
    /// Projections concatenated into one stream before the graph.
    Concat,
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross_modal" | "cross-modal" => Ok(FusionMode::CrossModal),
            "add" => Ok(FusionMode::Add),
            "concat" => Ok(FusionMode::Concat),
            _ => Err(Error::Config(format!(
                "unknown fusion mode {s:?} (expected add, concat or cross_modal)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Adversarial epochs; `None` uses `epochs`.
    pub gan_epochs: Option<usize>,
    pub batch_size: usize,
    pub lr: f64,
    pub dropout: f64,
    pub weight_decay: f64,
    pub window: usize,
    pub d: usize,
    pub gcn_layers: usize,
    pub beta: f64,
    pub lambda: f64,
    pub seed: u64,
    pub use_tgan: bool,
    pub use_imcl: bool,
    pub use_iccl: bool,
    pub modalities: Vec<Modality>,
    pub fusion_mode: FusionMode,
    pub relation_set: RelationSet,
    pub self_term: SelfTerm,
    pub similarity: Similarity,
    pub imcl_positive_rule: ImclPositiveRule,
    pub reg_target: RegTarget,
    pub gan_input_mode: GanInputMode,
    pub freeze_projection: bool,
    pub split: SplitRatios,
    /// Seed of the train/val/test shuffle; `None` uses `seed`.
    pub split_seed: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            gan_epochs: None,
            batch_size: 32,
            lr: 5e-4,
            dropout: 0.5,
            weight_decay: 1e-5,
            window: 10,
            d: 128,
            gcn_layers: 2,
            beta: 0.8,
            lambda: 0.5,
            seed: 1,
            use_tgan: true,
            use_imcl: true,
            use_iccl: true,
            modalities: Modality::ALL.to_vec(),
            fusion_mode: FusionMode::CrossModal,
            relation_set: RelationSet::Full,
            self_term: SelfTerm::OncePerRelation,
            similarity: Similarity::BoundedCosine,
            imcl_positive_rule: ImclPositiveRule::CrossModal,
            reg_target: RegTarget::Positives,
            gan_input_mode: GanInputMode::PerSourcePad,
            freeze_projection: false,
            split: SplitRatios::default(),
            split_seed: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.epochs == 0 {
            return fail("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail(format!("weight_decay must be nonnegative, got {}", self.weight_decay));
        }
        if self.d == 0 || self.gcn_layers == 0 {
            return fail("d and gcn_layers must be at least 1".into());
        }
        if self.modalities.is_empty() {
            return fail("at least one modality is required".into());
        }
        for (k, m) in self.modalities.iter().enumerate() {
            if self.modalities[..k].contains(m) {
                return fail(format!("modality {m} listed twice"));
            }
        }
        self.gcl_config().validate()?;
        if self.use_imcl && self.fusion_mode == FusionMode::CrossModal && self.modalities.len() < 2 {
            return fail(format!(
                "the modality-contrastive loss needs at least two modality streams, but only {} is \
                 selected with cross_modal fusion; add modalities or disable it with --ablate imcl",
                self.modalities[0]
            ));
        }
        Ok(())
    }

    pub fn gan_epochs(&self) -> usize {
        self.gan_epochs.unwrap_or(self.epochs)
    }

    pub fn split_seed(&self) -> u64 {
        self.split_seed.unwrap_or(self.seed)
    }

    /// Selected modalities in canonical order.
    pub fn ordered_modalities(&self) -> Vec<Modality> {
        Modality::ALL
            .into_iter()
            .filter(|m| self.modalities.contains(m))
            .collect()
    }

    /// The adversarial phase needs all three modalities in separate streams.
    pub fn tgan_active(&self) -> bool {
        self.use_tgan && self.fusion_mode == FusionMode::CrossModal && self.modalities.len() == 3
    }

    /// Fused single-stream baselines have no second modality to contrast.
    pub fn imcl_active(&self) -> bool {
        self.use_imcl && self.fusion_mode == FusionMode::CrossModal && self.modalities.len() >= 2
    }

    pub fn iccl_active(&self) -> bool {
        self.use_iccl
    }

    pub fn gcl_config(&self) -> GclConfig {
        GclConfig {
            beta: self.beta,
            lambda: self.lambda,
            similarity: self.similarity,
            imcl_positive_rule: self.imcl_positive_rule,
            reg_target: self.reg_target,
        }
    }

    pub fn gan_config(&self) -> GanConfig {
        GanConfig {
            input_mode: self.gan_input_mode,
            freeze_projection: self.freeze_projection,
        }
    }

    pub fn adam_config(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

/// Named losses of one optimization step; `None` marks terms that did not
/// run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub gen_text: Option<f64>,
    pub gen_audio: Option<f64>,
    pub gen_visual: Option<f64>,
    pub disc_text: Option<f64>,
    pub disc_audio: Option<f64>,
    pub disc_visual: Option<f64>,
    pub iccl: Option<f64>,
    pub imcl: Option<f64>,
    pub hybrid: Option<f64>,
    pub cls: Option<f64>,
    pub overall: Option<f64>,
}

/// `cls + λ·imcl + (1 − λ)·iccl`, with absent terms contributing 0.
pub fn overall_loss(cls: f64, iccl: Option<f64>, imcl: Option<f64>, lambda: f64) -> Result<f64> {
    for (name, v) in [("cls", Some(cls)), ("iccl", iccl), ("imcl", imcl)] {
        if let Some(v) = v {
            if !v.is_finite() {
                return Err(Error::Numeric(format!("{name} loss is {v}")));
            }
        }
    }
    Ok(cls + lambda * imcl.unwrap_or(0.0) + (1.0 - lambda) * iccl.unwrap_or(0.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Adversarial,
    Graph,
    Done,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step {
        phase: Phase,
        epoch: usize,
        step: usize,
        #[serde(flatten)]
        losses: LossBundle,
        skipped_anchors: usize,
    },
    Epoch {
        phase: Phase,
        epoch: usize,
        val_waa: Option<f64>,
        val_wf1: Option<f64>,
        best: bool,
    },
}

impl LogRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("log records serialize")
    }
}

/// One graph stream: a modality, or the fused projections.
#[derive(Clone, Debug)]
pub struct Stream {
    pub name: String,
    /// Modality tag used by the contrastive losses.
    pub tag: Modality,
    pub gcn: GcnParams,
}

/// Every trainable component and its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub store: ParamStore,
    pub config: TrainConfig,
    pub meta: CorpusMeta,
    pub projection: Projection,
    pub pairs: [GanPair; 3],
    pub streams: Vec<Stream>,
    pub classifier: Classifier,
}

/// Tape handles of one forward pass over a batch of dialogues.
pub struct Forward {
    pub logits: Var,
    /// Node states of every stream, `N × dim` with dialogues stacked.
    pub streams: Vec<Var>,
    pub labels: Vec<usize>,
}

impl Model {
    /// Builds all parameters, including the adversarial pairs even when
    /// they will not train, so that ablations share an initialization.
    pub fn new(config: &TrainConfig, meta: &CorpusMeta, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        let mut store = ParamStore::new();
        let projection = Projection::new(&mut store, rng, meta.dims, d, config.dropout);
        let pairs = build_pairs(&mut store, rng, d);
        let mods = config.ordered_modalities();
        let graph = |store: &mut ParamStore, rng: &mut Rng, name: &str, dim: usize| {
            GcnParams::new(
                store,
                rng,
                name,
                dim,
                config.gcn_layers,
                config.relation_set,
                config.self_term,
            )
        };
        let (streams, cls_in) = match config.fusion_mode {
            FusionMode::CrossModal => {
                let streams: Vec<Stream> = mods
                    .iter()
                    .map(|&m| Stream {
                        name: m.to_string(),
                        tag: m,
                        gcn: graph(&mut store, rng, &format!("graph.{m}"), d),
                    })
                    .collect();
                (streams, mods.len() * d)
            }
            FusionMode::Add | FusionMode::Concat => {
                let dim = if config.fusion_mode == FusionMode::Add {
                    d
                } else {
                    mods.len() * d
                };
                let stream = Stream {
                    name: "fused".into(),
                    tag: Modality::Text,
                    gcn: graph(&mut store, rng, "graph.fused", dim),
                };
                (vec![stream], dim)
            }
        };
        let classifier = Classifier::new(&mut store, rng, cls_in, d, meta.class_count, config.dropout);
        Ok(Self {
            store,
            config: config.clone(),
            meta: meta.clone(),
            projection,
            pairs,
            streams,
            classifier,
        })
    }

    /// Rejects utterances whose feature widths or labels do not fit the
    /// model.
    pub fn check_dialogues(&self, dialogues: &[Dialogue]) -> Result<()> {
        for dlg in dialogues {
            for u in &dlg.utterances {
                for m in Modality::ALL {
                    let want = self.meta.dims.of(m);
                    if u.features(m).len() != want {
                        return Err(Error::shape(format!(
                            "utterance {} has {m} width {}, model expects {want}",
                            u.utt_id,
                            u.features(m).len()
                        )));
                    }
                }
                if u.label >= self.meta.class_count {
                    return Err(Error::Data(format!(
                        "utterance {} has label {} but the model knows {} classes",
                        u.utt_id, u.label, self.meta.class_count
                    )));
                }
            }
        }
        Ok(())
    }

    /// Projected (and, for fused modes, combined) node features of each
    /// stream, utterances stacked in order.
    fn stream_inputs(&self, tape: &mut Tape, p: &Bound, utts: &[&Utterance], mode: &mut Mode<'_>) -> Result<Vec<Var>> {
        let n = utts.len();
        if n == 0 {
            return Err(Error::Argument("forward pass over an empty batch".into()));
        }
        let mods = self.config.ordered_modalities();
        let mut projected = Vec::with_capacity(mods.len());
        for &m in &mods {
            let width = self.meta.dims.of(m);
            let x = Matrix::from_fn(n, width, |i, j| utts[i].features(m)[j]);
            let x = tape.constant(x);
            projected.push(self.projection.forward(tape, p, m, x, mode)?);
        }
        Ok(match self.config.fusion_mode {
            FusionMode::CrossModal => projected,
            FusionMode::Add => {
                let mut acc = projected[0];
                for &v in &projected[1..] {
                    acc = tape.add(acc, v);
                }
                vec![acc]
            }
            FusionMode::Concat => vec![tape.hcat(&projected)],
        })
    }

    /// Eval-mode graphs of one dialogue, one per stream, with attention
    /// weights filled in.
    pub fn speaker_graphs(&self, dialogue: &Dialogue) -> Result<Vec<SpeakerGraph>> {
        self.check_dialogues(std::slice::from_ref(dialogue))?;
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape);
        let utts: Vec<&Utterance> = dialogue.utterances.iter().collect();
        let inputs = self.stream_inputs(&mut tape, &p, &utts, &mut Mode::Eval)?;
        self.streams
            .iter()
            .zip(inputs)
            .map(|(stream, input)| {
                let feats = tape.value(input).clone();
                let graph = build_graph(
                    dialogue,
                    &feats,
                    self.config.window,
                    self.config.relation_set,
                    &stream.name,
                )?;
                edge_attention(&graph, &self.store, &stream.gcn)
            })
            .collect()
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, dialogues: &[&Dialogue], mode: &mut Mode<'_>) -> Result<Forward> {
        let utts: Vec<&Utterance> = dialogues.iter().flat_map(|d| d.utterances.iter()).collect();
        let inputs = self.stream_inputs(tape, p, &utts, mode)?;

        let parts: Vec<Topology> = dialogues
            .iter()
            .map(|d| Topology::for_dialogue(d, self.config.window, self.config.relation_set))
            .collect();
        let topo = Topology::concat(&parts);
        let mut outputs = Vec::with_capacity(self.streams.len());
        for (stream, &input) in self.streams.iter().zip(&inputs) {
            let w = edge_attention_on_tape(tape, p, &stream.gcn, &topo, input)?;
            outputs.push(gcn_forward_on_tape(tape, p, &stream.gcn, &topo, w, input)?);
        }
        let z = if outputs.len() == 1 {
            outputs[0]
        } else {
            tape.hcat(&outputs)
        };
        let logits = self.classifier.logits(tape, p, z, mode)?;
        Ok(Forward {
            logits,
            streams: outputs,
            labels: utts.iter().map(|u| u.label).collect(),
        })
    }

    /// Eval-mode predicted labels, batched by `batch_size` dialogues.
    pub fn predict(&self, dialogues: &[Dialogue]) -> Result<(Vec<usize>, Vec<usize>)> {
        self.check_dialogues(dialogues)?;
        let mut preds = Vec::new();
        let mut labels = Vec::new();
        let refs: Vec<&Dialogue> = dialogues.iter().filter(|d| !d.is_empty()).collect();
        for chunk in refs.chunks(self.config.batch_size.max(1)) {
            let mut tape = Tape::new();
            let p = self.store.bind(&mut tape);
            let fwd = self.forward(&mut tape, &p, chunk, &mut Mode::Eval)?;
            let logits = tape.value(fwd.logits);
            if !logits.is_finite() {
                return Err(Error::Numeric("non-finite logits during evaluation".into()));
            }
            preds.extend((0..logits.rows()).map(|i| argmax(logits.row(i))));
            labels.extend(fwd.labels);
        }
        Ok((preds, labels))
    }

    pub fn evaluate(&self, dialogues: &[Dialogue]) -> Result<MetricsReport> {
        let (preds, labels) = self.predict(dialogues)?;
        MetricsReport::from_predictions(&preds, &labels, self.meta.class_count)
    }
}

/// Best validation score seen so far and the parameters that produced it.
#[derive(Clone, Debug)]
pub struct Best {
    pub wf1: f64,
    pub epoch: usize,
    pub params: ParamStore,
}

/// Resumable training state.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub adam: Adam,
    pub rng: Rng,
    pub phase: Phase,
    /// Epochs completed within the current phase.
    pub epoch: usize,
    /// Optimization steps taken so far, both phases.
    pub step: usize,
    pub best: Option<Best>,
    pub(crate) log: Vec<LogRecord>,
}

fn stack_features(dialogues: &[Dialogue], m: Modality, width: usize) -> Matrix {
    let utts: Vec<&Utterance> = dialogues.iter().flat_map(|d| d.utterances.iter()).collect();
    Matrix::from_fn(utts.len(), width, |i, j| utts[i].features(m)[j])
}

/// Warnings for classes missing from the training split.
pub fn check_splits(splits: &Splits, class_count: usize) -> Result<Vec<String>> {
    let count = |ds: &[Dialogue]| ds.iter().map(Dialogue::len).sum::<usize>();
    if count(&splits.train) == 0 {
        return Err(Error::Data("training split has no utterances".into()));
    }
    if count(&splits.val) == 0 {
        return Err(Error::Data("validation split has no utterances".into()));
    }
    let mut seen = vec![false; class_count];
    for u in splits.train.iter().flat_map(|d| &d.utterances) {
        if let Some(s) = seen.get_mut(u.label) {
            *s = true;
        }
    }
    Ok(seen
        .iter()
        .enumerate()
        .filter(|(_, s)| !**s)
        .map(|(c, _)| format!("class {c} has no training utterances"))
        .collect())
}

impl Trainer {
    pub fn new(config: &TrainConfig, meta: &CorpusMeta) -> Result<Self> {
        let mut rng = Rng::seed_from_u64(config.seed);
        let model = Model::new(config, meta, &mut rng)?;
        let adam = Adam::new(&model.store, config.adam_config());
        let phase = if config.tgan_active() && config.gan_epochs() > 0 {
            Phase::Adversarial
        } else {
            Phase::Graph
        };
        Ok(Self {
            model,
            adam,
            rng,
            phase,
            epoch: 0,
            step: 0,
            best: None,
            log: Vec::new(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.model.config
    }

    pub fn is_done(&self) -> bool {
        self.phase == Phase::Done
    }

    /// Drains log records produced since the last call.
    pub fn take_log(&mut self) -> Vec<LogRecord> {
        std::mem::take(&mut self.log)
    }

    /// Runs one epoch of the current phase. Returns `true` once training
    /// has finished.
    pub fn run_epoch(&mut self, splits: &Splits) -> Result<bool> {
        match self.phase {
            Phase::Adversarial => self.adversarial_epoch(&splits.train)?,
            Phase::Graph => self.graph_epoch(splits)?,
            Phase::Done => {}
        }
        Ok(self.is_done())
    }

    pub fn run(&mut self, splits: &Splits) -> Result<()> {
        self.model.check_dialogues(&splits.train)?;
        self.model.check_dialogues(&splits.val)?;
        while !self.run_epoch(splits)? {}
        Ok(())
    }

    fn adversarial_epoch(&mut self, train: &[Dialogue]) -> Result<()> {
        let model = &mut self.model;
        let dims = model.meta.dims;
        let features = Modality::ALL.map(|m| stack_features(train, m, dims.of(m)));
        let (reports, _) = adversarial_phase(
            &mut model.store,
            &mut self.adam,
            &model.projection,
            &model.pairs,
            &features,
            model.config.batch_size,
            1,
            &model.config.gan_config(),
            &mut self.rng,
        )?;
        for r in reports {
            let [t, a, v] = r;
            self.log.push(LogRecord::Step {
                phase: Phase::Adversarial,
                epoch: self.epoch,
                step: self.step,
                losses: LossBundle {
                    gen_text: Some(t.gen_loss),
                    gen_audio: Some(a.gen_loss),
                    gen_visual: Some(v.gen_loss),
                    disc_text: Some(t.disc_loss),
                    disc_audio: Some(a.disc_loss),
                    disc_visual: Some(v.disc_loss),
                    ..LossBundle::default()
                },
                skipped_anchors: 0,
            });
            self.step += 1;
        }
        self.log.push(LogRecord::Epoch {
            phase: Phase::Adversarial,
            epoch: self.epoch,
            val_waa: None,
            val_wf1: None,
            best: false,
        });
        self.epoch += 1;
        if self.epoch >= self.model.config.gan_epochs() {
            self.phase = Phase::Graph;
            self.epoch = 0;
        }
        Ok(())
    }

    fn graph_epoch(&mut self, splits: &Splits) -> Result<()> {
        let mut order: Vec<usize> = (0..splits.train.len())
            .filter(|&k| !splits.train[k].is_empty())
            .collect();
        order.shuffle(&mut self.rng);
        for chunk in order.chunks(self.model.config.batch_size) {
            let batch: Vec<&Dialogue> = chunk.iter().map(|&k| &splits.train[k]).collect();
            self.graph_step(&batch)?;
        }
        let report = self.model.evaluate(&splits.val)?;
        let improved = self.best.as_ref().is_none_or(|b| report.wf1 > b.wf1);
        if improved {
            self.best = Some(Best {
                wf1: report.wf1,
                epoch: self.epoch,
                params: self.model.store.clone(),
            });
        }
        self.log.push(LogRecord::Epoch {
            phase: Phase::Graph,
            epoch: self.epoch,
            val_waa: Some(report.waa),
            val_wf1: Some(report.wf1),
            best: improved,
        });
        self.epoch += 1;
        if self.epoch >= self.model.config.epochs {
            self.phase = Phase::Done;
        }
        Ok(())
    }

    /// One update of the projection, graph and classifier parameters.
    pub fn graph_step(&mut self, batch: &[&Dialogue]) -> Result<LossBundle> {
        let model = &self.model;
        let config = &model.config;
        let mut tape = Tape::new();
        let p = model.store.bind(&mut tape);
        let mut mode = Mode::Train(&mut self.rng);
        let fwd = model.forward(&mut tape, &p, batch, &mut mode)?;
        let cls = nll_on_tape(&mut tape, fwd.logits, &fwd.labels)?;
        let mut total = cls;
        let mut bundle = LossBundle {
            cls: Some(tape.value(cls).item()),
            ..LossBundle::default()
        };
        let mut skipped = 0;

        if config.iccl_active() || config.imcl_active() {
            let emb = if fwd.streams.len() == 1 {
                fwd.streams[0]
            } else {
                tape.vcat(&fwd.streams)
            };
            let n = fwd.labels.len();
            let tags: Vec<Modality> = model
                .streams
                .iter()
                .flat_map(|s| std::iter::repeat_n(s.tag, n))
                .collect();
            let labels: Vec<usize> = (0..model.streams.len())
                .flat_map(|_| fwd.labels.iter().copied())
                .collect();
            let sim = similarity_on_tape(&mut tape, emb, config.similarity);
            let gcl = config.gcl_config();
            let absorb = |r: Result<ContrastTerms>, skipped: &mut usize| -> Result<Option<ContrastTerms>> {
                match r {
                    Ok(t) => {
                        *skipped += t.skipped;
                        Ok(Some(t))
                    }
                    Err(Error::DegenerateBatch { rows }) => {
                        *skipped += rows;
                        Ok(None)
                    }
                    Err(e) => Err(e),
                }
            };
            let iccl = if config.iccl_active() {
                absorb(iccl_on_tape(&mut tape, sim, &tags, &labels), &mut skipped)?
            } else {
                None
            };
            let imcl = if config.imcl_active() {
                absorb(imcl_on_tape(&mut tape, sim, &tags, &labels, &gcl), &mut skipped)?
            } else {
                None
            };
            let mut hybrid: Option<Var> = None;
            if let Some(t) = iccl {
                bundle.iccl = Some(tape.value(t.total).item());
                hybrid = Some(tape.scale(t.total, 1.0 - config.lambda));
            }
            if let Some(t) = imcl {
                bundle.imcl = Some(tape.value(t.total).item());
                let w = tape.scale(t.total, config.lambda);
                hybrid = Some(match hybrid {
                    Some(h) => tape.add(h, w),
                    None => w,
                });
            }
            bundle.hybrid = Some(hybrid.map_or(0.0, |h| tape.value(h).item()));
            if let Some(h) = hybrid {
                total = tape.add(total, h);
            }
        }
        let overall = tape.value(total).item();
        bundle.overall = Some(overall);
        if !overall.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at step {} (graph epoch {}): {bundle:?}",
                self.step, self.epoch
            )));
        }
        let mut grads = tape.backward(total);
        let grads = p.collect(&mut grads);
        let trainable: Vec<bool> = model
            .store
            .ids()
            .map(|id| !model.store.name(id).starts_with("gan."))
            .collect();
        self.adam
            .step(&mut self.model.store, &grads, |id| trainable[id.index()]);
        self.log.push(LogRecord::Step {
            phase: Phase::Graph,
            epoch: self.epoch,
            step: self.step,
            losses: bundle.clone(),
            skipped_anchors: skipped,
        });
        self.step += 1;
        Ok(bundle)
    }

    /// The model with the best validation parameters, or the current ones
    /// if no validation pass has run.
    pub fn best_model(&self) -> Model {
        let mut model = self.model.clone();
        if let Some(best) = &self.best {
            model.store = best.params.clone();
        }
        model
    }
}

/// Trains from scratch on `splits` and returns the finished trainer with
/// every log record.
pub fn train(splits: &Splits, meta: &CorpusMeta, config: &TrainConfig) -> Result<(Trainer, Vec<LogRecord>)> {
    check_splits(splits, meta.class_count)?;
    let mut trainer = Trainer::new(config, meta)?;
    trainer.run(splits)?;
    let log = trainer.take_log();
    Ok((trainer, log))
}
