//! Speaker-relation graphs and attention-weighted relational graph
//! convolution.
//!
//! For a dialogue of `T` utterances and window `W`, node `i` receives an
//! edge from every `j` with `|i − j| ≤ W`, its own self-loop included. The
//! relation of an edge depends on whether `i` and `j` share a speaker and
//! on whether `j` precedes or follows `i`.
//!
//! Edge weights come from a two-layer scorer over the concatenated
//! endpoint features, normalized with a softmax over each node's incoming
//! edges:
//!
//! ```text
//! ε_ij = w₁ · GELU(W₂ [ξ_i ⊕ ξ_j])        ω_ij = exp ε_ij / Σ_{k ∈ N_i} exp ε_ik
//! ```
//!
//! One convolution layer then computes
//!
//! ```text
//! ψ_i' = GELU( Σ_r Σ_{j ∈ N_i^r} (1/|N_i^r|) (ω_ij W_r ψ_j + ω_ii W_s ψ_i) )
//! ```

use std::fmt::Write as _;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autograd::{ScatterEntry, Tape, Var};
use crate::corpus::Dialogue;
use crate::error::{Error, Result};
use crate::nn::{uniform_fan_in, Bound, ParamId, ParamStore, Rng};
use crate::tensor::Matrix;

pub const DEFAULT_WINDOW: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    SameSpeakerPast,
    SameSpeakerFuture,
    OtherSpeakerPast,
    OtherSpeakerFuture,
    SelfLoop,
    /// The only relation of [`RelationSet::Single`].
    Any,
}

impl Relation {
    pub fn name(self) -> &'static str {
        match self {
            Relation::SameSpeakerPast => "same_speaker_past",
            Relation::SameSpeakerFuture => "same_speaker_future",
            Relation::OtherSpeakerPast => "other_speaker_past",
            Relation::OtherSpeakerFuture => "other_speaker_future",
            Relation::SelfLoop => "self",
            Relation::Any => "any",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationSet {
    /// Speaker identity × temporal direction, plus the self-loop.
    #[default]
    Full,
    Single,
}

impl RelationSet {
    pub fn relations(self) -> &'static [Relation] {
        match self {
            RelationSet::Full => &[
                Relation::SameSpeakerPast,
                Relation::SameSpeakerFuture,
                Relation::OtherSpeakerPast,
                Relation::OtherSpeakerFuture,
                Relation::SelfLoop,
            ],
            RelationSet::Single => &[Relation::Any],
        }
    }

    /// Relation of the edge carrying `j`'s state into node `i`.
    pub fn classify(self, i: usize, j: usize, same_speaker: bool) -> Relation {
        match self {
            RelationSet::Single => Relation::Any,
            RelationSet::Full => match (j.cmp(&i), same_speaker) {
                (std::cmp::Ordering::Equal, _) => Relation::SelfLoop,
                (std::cmp::Ordering::Less, true) => Relation::SameSpeakerPast,
                (std::cmp::Ordering::Greater, true) => Relation::SameSpeakerFuture,
                (std::cmp::Ordering::Less, false) => Relation::OtherSpeakerPast,
                (std::cmp::Ordering::Greater, false) => Relation::OtherSpeakerFuture,
            },
        }
    }

    fn slot(self, r: Relation) -> usize {
        self.relations()
            .iter()
            .position(|x| *x == r)
            .expect("relation belongs to its set")
    }
}

/// Placement of the `ω_ii W_s ψ_i` term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelfTerm {
    /// Inside the neighbor sum and scaled by `1/|N_i^r|`, which adds it once
    /// for every relation under which node `i` has neighbors.
    #[default]
    OncePerRelation,
    /// Added unscaled for every `(r, j)` pair, i.e. `|N_i|` times.
    LiteralPerNeighbor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub relation: Relation,
}

/// Edges of one dialogue graph, grouped by destination node in ascending
/// order and by source within a node.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Topology {
    node_count: usize,
    edges: Vec<Edge>,
    relation_set: RelationSet,
}

impl Topology {
    pub fn build<S: AsRef<str>>(speakers: &[S], window: usize, relation_set: RelationSet) -> Self {
        let t = speakers.len();
        let mut edges = Vec::new();
        for i in 0..t {
            let lo = i.saturating_sub(window);
            let hi = (i + window).min(t.saturating_sub(1));
            for j in lo..=hi {
                let same = speakers[i].as_ref() == speakers[j].as_ref();
                edges.push(Edge {
                    src: j,
                    dst: i,
                    relation: relation_set.classify(i, j, same),
                });
            }
        }
        Self {
            node_count: t,
            edges,
            relation_set,
        }
    }

    pub fn for_dialogue(dialogue: &Dialogue, window: usize, relation_set: RelationSet) -> Self {
        let speakers: Vec<&str> = dialogue.utterances.iter().map(|u| u.speaker.as_str()).collect();
        Self::build(&speakers, window, relation_set)
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn relation_set(&self) -> RelationSet {
        self.relation_set
    }

    /// Sources of node `i`'s incoming edges.
    pub fn in_neighbors(&self, i: usize) -> Vec<usize> {
        self.edges.iter().filter(|e| e.dst == i).map(|e| e.src).collect()
    }

    /// Disjoint union, renumbering nodes of later parts after earlier ones.
    pub fn concat(parts: &[Topology]) -> Self {
        let relation_set = parts.first().map_or_else(RelationSet::default, |t| t.relation_set);
        let mut edges = Vec::with_capacity(parts.iter().map(|t| t.edges.len()).sum());
        let mut offset = 0;
        for t in parts {
            assert_eq!(t.relation_set, relation_set, "mixed relation sets");
            edges.extend(t.edges.iter().map(|e| Edge {
                src: e.src + offset,
                dst: e.dst + offset,
                relation: e.relation,
            }));
            offset += t.node_count;
        }
        Self {
            node_count: offset,
            edges,
            relation_set,
        }
    }

    /// The same graph with node `k` renamed `perm[k]`, edges regrouped by
    /// destination.
    pub fn relabel(&self, perm: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.node_count];
        if perm.len() != self.node_count
            || perm
                .iter()
                .any(|&k| k >= seen.len() || std::mem::replace(&mut seen[k], true))
        {
            return Err(Error::Argument(format!(
                "relabeling of {} nodes is not a permutation",
                self.node_count
            )));
        }
        let mut edges: Vec<Edge> = self
            .edges
            .iter()
            .map(|e| Edge {
                src: perm[e.src],
                dst: perm[e.dst],
                relation: e.relation,
            })
            .collect();
        edges.sort_by_key(|e| (e.dst, e.src));
        Ok(Self {
            node_count: self.node_count,
            edges,
            relation_set: self.relation_set,
        })
    }

    /// Index of each node's self-loop edge.
    fn self_loops(&self) -> Vec<usize> {
        let mut out = vec![usize::MAX; self.node_count];
        for (k, e) in self.edges.iter().enumerate() {
            if e.src == e.dst {
                out[e.dst] = k;
            }
        }
        assert!(out.iter().all(|&k| k != usize::MAX), "every node has a self-loop");
        out
    }

    /// `|N_i^r|` indexed `[node][relation slot]`.
    fn relation_counts(&self) -> Vec<Vec<usize>> {
        let k = self.relation_set.relations().len();
        let mut counts = vec![vec![0; k]; self.node_count];
        for e in &self.edges {
            counts[e.dst][self.relation_set.slot(e.relation)] += 1;
        }
        counts
    }

    fn destinations(&self) -> Rc<Vec<usize>> {
        Rc::new(self.edges.iter().map(|e| e.dst).collect())
    }

    fn sources(&self) -> Rc<Vec<usize>> {
        Rc::new(self.edges.iter().map(|e| e.src).collect())
    }
}

/// A dialogue graph for one modality stream with its node features and,
/// once attention has run, its edge weights.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerGraph {
    pub stream: String,
    pub node_feats: Matrix,
    pub topology: Topology,
    pub weights: Option<Vec<f64>>,
}

impl SpeakerGraph {
    /// Plain-text edge list, one `src dst relation weight` line per edge.
    pub fn edge_list(&self) -> String {
        let mut out = String::new();
        for (k, e) in self.topology.edges.iter().enumerate() {
            let w = self.weights.as_ref().map_or(f64::NAN, |w| w[k]);
            let _ = writeln!(out, "{} {} {} {}", e.src, e.dst, e.relation.name(), w);
        }
        out
    }
}

pub fn build_graph(
    dialogue: &Dialogue,
    projected: &Matrix,
    window: usize,
    relation_set: RelationSet,
    stream: &str,
) -> Result<SpeakerGraph> {
    if projected.rows() != dialogue.len() {
        return Err(Error::shape(format!(
            "dialogue {} has {} utterances but {} feature rows",
            dialogue.dialogue_id,
            dialogue.len(),
            projected.rows()
        )));
    }
    Ok(SpeakerGraph {
        stream: stream.to_string(),
        node_feats: projected.clone(),
        topology: Topology::for_dialogue(dialogue, window, relation_set),
        weights: None,
    })
}

/// Attention scorer and convolution weights of one stream.
#[derive(Clone, Debug)]
pub struct GcnParams {
    /// `W₂`, `2·dim × dim`.
    pub attn_hidden: ParamId,
    /// `w₁`, `dim × 1`.
    pub attn_out: ParamId,
    /// One `dim × dim` matrix per relation of `relation_set`.
    pub relation: Vec<ParamId>,
    pub self_weight: ParamId,
    pub dim: usize,
    pub layers: usize,
    pub relation_set: RelationSet,
    pub self_term: SelfTerm,
}

impl GcnParams {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        dim: usize,
        layers: usize,
        relation_set: RelationSet,
        self_term: SelfTerm,
    ) -> Self {
        assert!(layers >= 1, "at least one convolution layer");
        let attn_hidden = store.register(
            format!("{name}.attn.hidden"),
            uniform_fan_in(rng, 2 * dim, 2 * dim, dim),
        );
        let attn_out = store.register(format!("{name}.attn.out"), uniform_fan_in(rng, dim, dim, 1));
        let relation = relation_set
            .relations()
            .iter()
            .map(|r| store.register(format!("{name}.rel.{}", r.name()), uniform_fan_in(rng, dim, dim, dim)))
            .collect();
        let self_weight = store.register(format!("{name}.self"), uniform_fan_in(rng, dim, dim, dim));
        Self {
            attn_hidden,
            attn_out,
            relation,
            self_weight,
            dim,
            layers,
            relation_set,
            self_term,
        }
    }
}

/// Edge weights `ω` as an `E × 1` column aligned with `topology.edges()`.
pub fn edge_attention_on_tape(
    tape: &mut Tape,
    p: &Bound,
    params: &GcnParams,
    topology: &Topology,
    feats: Var,
) -> Result<Var> {
    let (t, w) = tape.value(feats).shape();
    if t != topology.node_count || w != params.dim {
        return Err(Error::shape(format!(
            "graph of {} nodes at width {} got {t}x{w} features",
            topology.node_count, params.dim
        )));
    }
    let hidden = p.var(params.attn_hidden);
    let top = tape.gather_rows(hidden, Rc::new((0..params.dim).collect()));
    let bottom = tape.gather_rows(hidden, Rc::new((params.dim..2 * params.dim).collect()));
    let from_dst = tape.matmul(feats, top);
    let from_src = tape.matmul(feats, bottom);
    let a = tape.gather_rows(from_dst, topology.destinations());
    let b = tape.gather_rows(from_src, topology.sources());
    let h = tape.add(a, b);
    let h = tape.gelu(h);
    let scores = tape.matmul(h, p.var(params.attn_out));
    if let Some(k) = tape.value(scores).as_slice().iter().position(|s| !s.is_finite()) {
        let e = topology.edges[k];
        return Err(Error::Numeric(format!(
            "attention score for edge {} -> {} is not finite",
            e.src, e.dst
        )));
    }
    Ok(tape.group_softmax(scores, topology.destinations()))
}

/// Runs `params.layers` convolution layers from `feats`, returning the
/// final `T × dim` node states.
pub fn gcn_forward_on_tape(
    tape: &mut Tape,
    p: &Bound,
    params: &GcnParams,
    topology: &Topology,
    weights: Var,
    feats: Var,
) -> Result<Var> {
    let t = topology.node_count;
    if tape.value(weights).shape() != (topology.edges.len(), 1) {
        return Err(Error::shape("edge weights do not match the graph"));
    }
    if tape.value(feats).shape() != (t, params.dim) {
        return Err(Error::shape("node features do not match the graph"));
    }
    let counts = topology.relation_counts();
    let relations = params.relation_set.relations();
    let mut per_relation: Vec<Vec<ScatterEntry>> = vec![Vec::new(); relations.len()];
    for (k, e) in topology.edges.iter().enumerate() {
        let slot = params.relation_set.slot(e.relation);
        per_relation[slot].push(ScatterEntry {
            source: k,
            row: e.dst,
            col: e.src,
            coef: 1.0 / counts[e.dst][slot] as f64,
        });
    }
    let loops = topology.self_loops();
    let self_entries: Vec<ScatterEntry> = (0..t)
        .map(|i| {
            let multiplicity = match params.self_term {
                SelfTerm::OncePerRelation => counts[i].iter().filter(|&&c| c > 0).count(),
                SelfTerm::LiteralPerNeighbor => counts[i].iter().sum(),
            };
            ScatterEntry {
                source: loops[i],
                row: i,
                col: 0,
                coef: multiplicity as f64,
            }
        })
        .collect();

    let per_relation: Vec<(usize, Rc<Vec<ScatterEntry>>)> = per_relation
        .into_iter()
        .enumerate()
        .filter(|(_, entries)| !entries.is_empty())
        .map(|(slot, entries)| (slot, Rc::new(entries)))
        .collect();
    let self_coef = tape.scatter(weights, Rc::new(self_entries), t, 1);

    let mut psi = feats;
    for _ in 0..params.layers {
        let own = tape.matmul(psi, p.var(params.self_weight));
        let mut acc = tape.scale_rows(own, self_coef);
        for (slot, entries) in &per_relation {
            let msg = tape.matmul(psi, p.var(params.relation[*slot]));
            let agg = tape.sparse_aggregate(weights, msg, entries.clone(), t);
            acc = tape.add(acc, agg);
        }
        psi = tape.gelu(acc);
    }
    Ok(psi)
}

pub fn edge_attention(graph: &SpeakerGraph, store: &ParamStore, params: &GcnParams) -> Result<SpeakerGraph> {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let feats = tape.constant(graph.node_feats.clone());
    let w = edge_attention_on_tape(&mut tape, &p, params, &graph.topology, feats)?;
    Ok(SpeakerGraph {
        weights: Some(tape.value(w).as_slice().to_vec()),
        ..graph.clone()
    })
}

/// Convolution over a graph whose weights are already set.
pub fn gcn_forward(graph: &SpeakerGraph, store: &ParamStore, params: &GcnParams) -> Result<Matrix> {
    let weights = graph
        .weights
        .as_ref()
        .ok_or_else(|| Error::Argument("run edge attention before convolution".into()))?;
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let feats = tape.constant(graph.node_feats.clone());
    let w = tape.constant(Matrix::column_vector(weights));
    let out = gcn_forward_on_tape(&mut tape, &p, params, &graph.topology, w, feats)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gelu;
    use rand::SeedableRng;

    fn speakers(t: usize) -> Vec<String> {
        (0..t).map(|i| format!("P{}", (i * 7 / 3) % 2)).collect()
    }

    #[test]
    fn single_node_has_only_a_self_loop() {
        for w in [0, 1, 10] {
            let topo = Topology::build(&["A"], w, RelationSet::Full);
            assert_eq!(
                topo.edges(),
                &[Edge {
                    src: 0,
                    dst: 0,
                    relation: Relation::SelfLoop
                }]
            );
        }
    }

    #[test]
    fn short_dialogue_is_fully_connected() {
        let topo = Topology::build(&speakers(3), 10, RelationSet::Full);
        assert_eq!(topo.edges().len(), 9);
        let cross = topo.edges().iter().filter(|e| e.src != e.dst).count();
        assert_eq!(cross, 6);
    }

    #[test]
    fn window_limits_in_neighbors() {
        let topo = Topology::build(&speakers(25), 10, RelationSet::Full);
        let brute: Vec<usize> = (0..25).filter(|j: &usize| j.abs_diff(12) <= 10).collect();
        assert_eq!(topo.in_neighbors(12), brute);
        assert_eq!(brute.len(), 21);
        assert!(topo.edges().iter().all(|e| e.src.abs_diff(e.dst) <= 10));
    }

    #[test]
    fn relations_follow_speaker_and_direction() {
        let topo = Topology::build(&["A", "B", "A"], 10, RelationSet::Full);
        let rel = |s: usize, d: usize| topo.edges().iter().find(|e| e.src == s && e.dst == d).unwrap().relation;
        assert_eq!(rel(0, 2), Relation::SameSpeakerPast);
        assert_eq!(rel(2, 0), Relation::SameSpeakerFuture);
        assert_eq!(rel(0, 1), Relation::OtherSpeakerPast);
        assert_eq!(rel(1, 0), Relation::OtherSpeakerFuture);
        assert_eq!(rel(1, 1), Relation::SelfLoop);
        let single = Topology::build(&["A", "B", "A"], 10, RelationSet::Single);
        assert!(single.edges().iter().all(|e| e.relation == Relation::Any));
    }

    fn params(dim: usize, seed: u64) -> (ParamStore, GcnParams) {
        let mut store = ParamStore::new();
        let mut rng = Rng::seed_from_u64(seed);
        let p = GcnParams::new(
            &mut store,
            &mut rng,
            "g",
            dim,
            2,
            RelationSet::Full,
            SelfTerm::OncePerRelation,
        );
        (store, p)
    }

    #[test]
    fn zero_attention_weights_give_uniform_edges() {
        let (mut store, p) = params(3, 1);
        *store.get_mut(p.attn_hidden) = Matrix::zeros(6, 3);
        *store.get_mut(p.attn_out) = Matrix::zeros(3, 1);
        let topo = Topology::build(&speakers(6), 2, RelationSet::Full);
        let g = SpeakerGraph {
            stream: "t".into(),
            node_feats: Matrix::from_fn(6, 3, |i, j| (i + j) as f64),
            topology: topo.clone(),
            weights: None,
        };
        let g = edge_attention(&g, &store, &p).unwrap();
        let w = g.weights.unwrap();
        for (k, e) in topo.edges().iter().enumerate() {
            let deg = topo.in_neighbors(e.dst).len() as f64;
            assert!((w[k] - 1.0 / deg).abs() < 1e-15);
        }
    }

    #[test]
    fn lone_node_passes_gelu_of_its_input() {
        let (mut store, p) = params(2, 2);
        for &r in &p.relation {
            *store.get_mut(r) = Matrix::zeros(2, 2);
        }
        *store.get_mut(p.self_weight) = Matrix::identity(2);
        let topo = Topology::build(&["A"], 10, RelationSet::Full);
        let g = SpeakerGraph {
            stream: "t".into(),
            node_feats: Matrix::row_vector(&[0.7, -1.3]),
            topology: topo,
            weights: Some(vec![1.0]),
        };
        let single_layer = GcnParams { layers: 1, ..p };
        let out = gcn_forward(&g, &store, &single_layer).unwrap();
        assert!((out.get(0, 0) - gelu(0.7)).abs() < 1e-15);
        assert!((out.get(0, 1) - gelu(-1.3)).abs() < 1e-15);
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let (mut store, p) = params(3, 3);
        for &r in &p.relation {
            *store.get_mut(r) = Matrix::zeros(3, 3);
        }
        *store.get_mut(p.self_weight) = Matrix::zeros(3, 3);
        let topo = Topology::build(&speakers(5), 10, RelationSet::Full);
        let g = SpeakerGraph {
            stream: "t".into(),
            node_feats: Matrix::from_fn(5, 3, |i, j| (i * j) as f64 - 1.0),
            topology: topo,
            weights: None,
        };
        let g = edge_attention(&g, &store, &p).unwrap();
        let out = gcn_forward(&g, &store, &p).unwrap();
        assert!(out.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn edge_list_export_has_one_line_per_edge() {
        let topo = Topology::build(&["A", "B"], 1, RelationSet::Full);
        let g = SpeakerGraph {
            stream: "t".into(),
            node_feats: Matrix::zeros(2, 1),
            topology: topo,
            weights: Some(vec![0.5, 0.5, 0.25, 0.75]),
        };
        let text = g.edge_list();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], "0 0 self 0.5");
        assert_eq!(lines[1], "1 0 other_speaker_future 0.5");
    }

    #[test]
    fn feature_rows_must_match_dialogue_length() {
        let d = Dialogue {
            dialogue_id: "d".into(),
            utterances: vec![],
        };
        assert!(matches!(
            build_graph(&d, &Matrix::zeros(2, 2), 10, RelationSet::Full, "t"),
            Err(Error::Shape(_))
        ));
    }
}
