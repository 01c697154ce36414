//! Sequence-to-sequence trajectory recovery: tracklet augmentation, a
//! Transformer whose cross-attention is soft-masked by denoise scores, greedy
//! decoding and co-training with the denoiser.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};

use camtraj_nd::{clip_grad_norm, sigmoid, Adam, AdamConfig, ParamId, ParamStore, SeededRng, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::clusterer::{build_cluster_graph, SimilarityWeights};
use crate::denoiser::{self, xavier, DenoiserDims, DenoiserParams};
use crate::embeddings::{encode_seconds, NodeEmbeddingTable, Vocab};
use crate::error::{Error, Result};
use crate::roadnet::{angle_diff, bearing, geodesic_distance, NodeId, RoadNetwork};
use crate::synthgen::{Record, RecordId, Tracklet};

// ---------------------------------------------------------------------------
// Tracklet geometry

/// Upstream and downstream neighbors inferred from a tracklet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct UpDown {
    pub up: Option<NodeId>,
    pub down: Option<NodeId>,
}

impl UpDown {
    /// `[up?, n, down?]`
    pub fn expand(&self, n: NodeId) -> Vec<NodeId> {
        self.up.into_iter().chain(std::iter::once(n)).chain(self.down).collect()
    }
}

/// Matches the tracklet's entry and exit bearings against the bearings of
/// the links at `n`. A neighbor `m` is upstream when `bearing(m → n)` is
/// within `margin` of the entry bearing and downstream when `bearing(n → m)`
/// is within `margin` of the exit bearing; the closest match wins.
pub fn tracklet_to_updown(tk: &Tracklet, net: &RoadNetwork, n: NodeId, margin: f64) -> Result<UpDown> {
    if tk.points.len() < 2 {
        return Err(Error::DegenerateTracklet(format!("record {} has fewer than 2 points", tk.record_id)));
    }
    let pts: Vec<_> = tk.points.iter().map(|p| p.point()).collect();
    let degenerate = |_| Error::DegenerateTracklet(format!("record {} has coincident points", tk.record_id));
    let b_in = bearing(&pts[0], &pts[1]).map_err(degenerate)?;
    let k = pts.len();
    let b_out = bearing(&pts[k - 2], &pts[k - 1]).map_err(degenerate)?;
    let here = net.point(n)?;
    let mut best_up: Option<(f64, NodeId)> = None;
    let mut best_down: Option<(f64, NodeId)> = None;
    for m in net.neighbors(n)? {
        let there = net.point(m)?;
        let (Ok(into), Ok(out)) = (bearing(&there, &here), bearing(&here, &there)) else {
            continue;
        };
        let du = angle_diff(into, b_in);
        if du <= margin && best_up.is_none_or(|(d, _)| du < d) {
            best_up = Some((du, m));
        }
        let dd = angle_diff(out, b_out);
        if dd <= margin && best_down.is_none_or(|(d, _)| dd < d) {
            best_down = Some((dd, m));
        }
    }
    Ok(UpDown {
        up: best_up.map(|(_, m)| m),
        down: best_down.map(|(_, m)| m),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Record,
    TrackletUpstream,
    TrackletDownstream,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Token {
    pub node: NodeId,
    /// Seconds relative to the first record of the cluster.
    pub t: f64,
    /// Index of the originating record within the cluster.
    pub source: usize,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TokenSequence {
    pub tokens: Vec<Token>,
    /// Denoise score per token.
    pub scores: Vec<f32>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn nodes(&self) -> Vec<NodeId> {
        self.tokens.iter().map(|t| t.node).collect()
    }

    pub fn sources(&self) -> Vec<usize> {
        self.tokens.iter().map(|t| t.source).collect()
    }
}

/// Expands every record token that has a tracklet into `[up, self, down]`
/// in place; inserted tokens repeat the source token's score.
pub fn augment_with_tracklets(
    seq: &TokenSequence,
    tracklet_of: impl Fn(usize) -> Option<(Tracklet, f64)>,
    net: &RoadNetwork,
    margin: f64,
) -> Result<TokenSequence> {
    let mut out = TokenSequence::default();
    for (tok, &score) in seq.tokens.iter().zip(&seq.scores) {
        let updown = match (tok.provenance, tracklet_of(tok.source)) {
            (Provenance::Record, Some((tk, speed))) => match tracklet_to_updown(&tk, net, tok.node, margin) {
                Ok(ud) => Some((ud, speed)),
                Err(Error::DegenerateTracklet(msg)) => {
                    log::warn!("skipping tracklet: {msg}");
                    None
                }
                Err(e) => return Err(e),
            },
            _ => None,
        };
        let Some((ud, speed)) = updown else {
            out.tokens.push(*tok);
            out.scores.push(score);
            continue;
        };
        let here = net.point(tok.node)?;
        if let Some(up) = ud.up {
            let dt = geodesic_distance(&net.point(up)?, &here) / speed;
            out.tokens.push(Token {
                node: up,
                t: tok.t - dt,
                source: tok.source,
                provenance: Provenance::TrackletUpstream,
            });
            out.scores.push(score);
        }
        out.tokens.push(*tok);
        out.scores.push(score);
        if let Some(down) = ud.down {
            let dt = geodesic_distance(&here, &net.point(down)?) / speed;
            out.tokens.push(Token {
                node: down,
                t: tok.t + dt,
                source: tok.source,
                provenance: Provenance::TrackletDownstream,
            });
            out.scores.push(score);
        }
    }
    Ok(out)
}

/// `att ⊙ (1 ⊗ S)`, optionally renormalizing each row afterwards.
pub fn soft_masked_attention(att: &Tensor, scores: &[f32], renormalize: bool) -> Result<Tensor> {
    let (m, n) = (att.rows(), att.cols());
    if scores.len() != n {
        return Err(Error::LengthMismatch(format!("{n} attention columns, {} scores", scores.len())));
    }
    let mut data = att.data().to_vec();
    for row in data.chunks_mut(n.max(1)) {
        for (x, &s) in row.iter_mut().zip(scores) {
            *x *= s;
        }
        if renormalize {
            let sum: f32 = row.iter().sum::<f32>().max(f32::MIN_POSITIVE);
            row.iter_mut().for_each(|x| *x /= sum);
        }
    }
    Ok(Tensor::new(vec![m, n], data)?)
}

// ---------------------------------------------------------------------------
// Model definition

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    /// Maximum decode length `L`, including the end token.
    pub max_len: usize,
    pub max_input: usize,
    pub d_app: usize,
    pub gcn_hidden: usize,
    pub d_st: usize,
    pub use_denoiser: bool,
    pub use_tracklets: bool,
    pub renormalize_attention: bool,
    pub margin_deg: f64,
    /// Weight of the denoise loss in the co-training objective.
    pub lambda: f32,
    /// Dropout rate on embeddings and sub-layer outputs during training.
    pub dropout: f32,
    /// Keep the pretrained node-embedding table fixed during training.
    pub freeze_node_embed: bool,
    /// Initial diagonal of the appearance block of the bilinear scorer
    /// (0 keeps the plain random init).
    pub app_identity_gain: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            d_ff: 256,
            enc_layers: 2,
            dec_layers: 2,
            max_len: 64,
            max_input: 192,
            d_app: 64,
            gcn_hidden: 64,
            d_st: 64,
            use_denoiser: true,
            use_tracklets: true,
            renormalize_attention: false,
            margin_deg: 20.0,
            lambda: 1.0,
            dropout: 0.1,
            freeze_node_embed: true,
            app_identity_gain: 16.0,
        }
    }
}

impl ModelConfig {
    /// Named ablation variants: `full`, `w/o-tklet`, `w/o-de`, `w/o-de+tklet`.
    pub fn ablation(&self, name: &str) -> Result<Self> {
        let (de, tk) = match name {
            "full" => (true, true),
            "w/o-tklet" => (true, false),
            "w/o-de" => (false, true),
            "w/o-de+tklet" => (false, false),
            other => return Err(Error::Config(format!("unknown ablation `{other}`"))),
        };
        Ok(Self {
            use_denoiser: de,
            use_tracklets: tk,
            ..self.clone()
        })
    }

    fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.max_len < 2 || self.max_input == 0 {
            return Err(Error::Config("max_len must be ≥ 2 and max_input ≥ 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerNormIds {
    g: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct AttnIds {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    bo: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct FfIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct EncLayer {
    ln1: LayerNormIds,
    attn: AttnIds,
    ln2: LayerNormIds,
    ff: FfIds,
}

#[derive(Debug, Clone, Copy)]
struct DecLayer {
    ln1: LayerNormIds,
    self_attn: AttnIds,
    ln2: LayerNormIds,
    cross: AttnIds,
    ln3: LayerNormIds,
    ff: FfIds,
}

#[derive(Debug, Clone)]
struct ModelIds {
    node_embed: ParamId,
    enc: Vec<EncLayer>,
    enc_ln: LayerNormIds,
    dec: Vec<DecLayer>,
    dec_ln: LayerNormIds,
    out_b: ParamId,
    denoiser: Option<DenoiserParams>,
}

struct Registrar<'a> {
    store: &'a mut ParamStore,
    rng: SeededRng,
    init: bool,
}

impl Registrar<'_> {
    fn tensor(&mut self, name: &str, t: impl FnOnce(&mut SeededRng) -> Tensor) -> Result<ParamId> {
        if self.init {
            let t = t(&mut self.rng);
            Ok(self.store.insert(name, t, true)?)
        } else {
            Ok(self.store.id(name)?)
        }
    }

    fn ln(&mut self, prefix: &str, d: usize) -> Result<LayerNormIds> {
        Ok(LayerNormIds {
            g: self.tensor(&format!("{prefix}.g"), |_| Tensor::ones(1, d))?,
            b: self.tensor(&format!("{prefix}.b"), |_| Tensor::zeros(1, d))?,
        })
    }

    fn attn(&mut self, prefix: &str, d: usize) -> Result<AttnIds> {
        Ok(AttnIds {
            wq: self.tensor(&format!("{prefix}.wq"), |r| xavier(d, d, 1.0, r))?,
            wk: self.tensor(&format!("{prefix}.wk"), |r| xavier(d, d, 1.0, r))?,
            wv: self.tensor(&format!("{prefix}.wv"), |r| xavier(d, d, 1.0, r))?,
            wo: self.tensor(&format!("{prefix}.wo"), |r| xavier(d, d, 1.0, r))?,
            bo: self.tensor(&format!("{prefix}.bo"), |_| Tensor::zeros(1, d))?,
        })
    }

    fn ff(&mut self, prefix: &str, d: usize, h: usize) -> Result<FfIds> {
        Ok(FfIds {
            w1: self.tensor(&format!("{prefix}.w1"), |r| xavier(d, h, 1.0, r))?,
            b1: self.tensor(&format!("{prefix}.b1"), |_| Tensor::zeros(1, h))?,
            w2: self.tensor(&format!("{prefix}.w2"), |r| xavier(h, d, 1.0, r))?,
            b2: self.tensor(&format!("{prefix}.b2"), |_| Tensor::zeros(1, d))?,
        })
    }
}

/// Named parameters plus the configuration needed to rebuild the network.
#[derive(Debug, Clone)]
pub struct RecoveryModel {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub store: ParamStore,
    ids: ModelIds,
}

/// Tape-local handles shared by every forward pass on one tape.
struct Frame {
    embed: Var,
    classes: Var,
    /// Present only in training passes.
    dropout: Option<RefCell<SeededRng>>,
}

fn sinusoid(pos: usize, d: usize) -> Vec<f32> {
    (0..d)
        .map(|i| {
            let freq = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let x = pos as f64 * freq;
            (if i % 2 == 0 { x.sin() } else { x.cos() }) as f32
        })
        .collect()
}

fn causal_mask(p: usize) -> Tensor {
    let mut data = vec![0.0f32; p * p];
    for i in 0..p {
        for j in i + 1..p {
            data[i * p + j] = -1e9;
        }
    }
    Tensor::new(vec![p, p], data).expect("square")
}

/// Greedy decode output.
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub nodes: Vec<NodeId>,
    /// Raw class ids emitted, EOS included when reached.
    pub classes: Vec<usize>,
    pub truncated: bool,
}

impl RecoveryModel {
    /// Fresh model whose node embedding starts from `table`.
    pub fn new(config: ModelConfig, table: &NodeEmbeddingTable, seed: u64) -> Result<Self> {
        config.validate()?;
        if table.dim() != config.d_model {
            return Err(Error::Config(format!(
                "embedding width {} differs from d_model {}",
                table.dim(),
                config.d_model
            )));
        }
        let mut store = ParamStore::new();
        let ids = Self::layout(&config, &mut store, SeededRng::new(seed).split_named("model-init"), true, Some(table))?;
        if config.freeze_node_embed {
            store.set_trainable(ids.node_embed, false);
        }
        Ok(Self {
            config,
            vocab: table.vocab,
            store,
            ids,
        })
    }

    fn layout(
        cfg: &ModelConfig,
        store: &mut ParamStore,
        rng: SeededRng,
        init: bool,
        table: Option<&NodeEmbeddingTable>,
    ) -> Result<ModelIds> {
        let d = cfg.d_model;
        let node_embed = if init {
            let t = table.expect("initial table").table.clone();
            store.insert("node_embed", t, true)?
        } else {
            store.id("node_embed")?
        };
        let n_classes = if init {
            table.expect("initial table").vocab.n_classes()
        } else {
            store.tensor(node_embed).rows() - 2
        };
        let mut reg = Registrar { store, rng, init };
        let enc = (0..cfg.enc_layers)
            .map(|i| {
                let p = format!("encoder.{i}");
                Ok(EncLayer {
                    ln1: reg.ln(&format!("{p}.ln1"), d)?,
                    attn: reg.attn(&format!("{p}.attn"), d)?,
                    ln2: reg.ln(&format!("{p}.ln2"), d)?,
                    ff: reg.ff(&format!("{p}.ff"), d, cfg.d_ff)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let enc_ln = reg.ln("encoder.ln", d)?;
        let dec = (0..cfg.dec_layers)
            .map(|i| {
                let p = format!("decoder.{i}");
                Ok(DecLayer {
                    ln1: reg.ln(&format!("{p}.ln1"), d)?,
                    self_attn: reg.attn(&format!("{p}.self"), d)?,
                    ln2: reg.ln(&format!("{p}.ln2"), d)?,
                    cross: reg.attn(&format!("{p}.cross"), d)?,
                    ln3: reg.ln(&format!("{p}.ln3"), d)?,
                    ff: reg.ff(&format!("{p}.ff"), d, cfg.d_ff)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let dec_ln = reg.ln("decoder.ln", d)?;
        let out_b = reg.tensor("out.b", |_| Tensor::zeros(1, n_classes))?;
        let dims = DenoiserDims {
            d_in: d,
            hidden: cfg.gcn_hidden,
            d_st: cfg.d_st,
            d_app: cfg.d_app,
        };
        let denoiser = match (cfg.use_denoiser, init) {
            (false, _) => None,
            (true, true) => Some(DenoiserParams::register(reg.store, dims, cfg.app_identity_gain, &mut reg.rng)?),
            (true, false) => Some(DenoiserParams::lookup(reg.store)?),
        };
        Ok(ModelIds {
            node_embed,
            enc,
            enc_ln,
            dec,
            dec_ln,
            out_b,
            denoiser,
        })
    }

    pub fn denoiser_params(&self) -> Option<DenoiserParams> {
        self.ids.denoiser
    }

    pub fn node_embed_id(&self) -> ParamId {
        self.ids.node_embed
    }

    // -- checkpointing ----------------------------------------------------

    /// `{"meta", "model", "n_nodes", "params"}`.
    pub fn to_checkpoint(&self, meta: serde_json::Value) -> serde_json::Value {
        serde_json::json!({
            "meta": meta,
            "model": self.config,
            "n_nodes": self.vocab.n_nodes,
            "params": self.store.to_json(),
        })
    }

    pub fn from_checkpoint(value: &serde_json::Value) -> Result<Self> {
        let schema = |detail: String| Error::Schema {
            file: "checkpoint".into(),
            detail,
        };
        let config: ModelConfig = serde_json::from_value(value.get("model").cloned().ok_or_else(|| schema("missing `model`".into()))?)?;
        config.validate()?;
        let n_nodes = value
            .get("n_nodes")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| schema("missing `n_nodes`".into()))? as usize;
        let params = value.get("params").ok_or_else(|| schema("missing `params`".into()))?;
        // Build the expected layout with placeholder values, then load.
        let vocab = Vocab::new(n_nodes);
        let table = NodeEmbeddingTable {
            vocab,
            table: Tensor::zeros(vocab.size(), config.d_model),
        };
        let mut model = Self::new(config, &table, 0)?;
        model.store.load_json(params)?;
        Ok(model)
    }

    // -- forward pieces -----------------------------------------------------

    fn frame(&self, tape: &mut Tape) -> Result<Frame> {
        let embed = tape.param(&self.store, self.ids.node_embed);
        let classes = tape.embedding(embed, &self.vocab.class_rows())?;
        Ok(Frame {
            embed,
            classes,
            dropout: None,
        })
    }

    fn dropout(&self, tape: &mut Tape, frame: &Frame, x: Var) -> Result<Var> {
        let p = self.config.dropout;
        let Some(rng) = frame.dropout.as_ref().filter(|_| p > 0.0) else {
            return Ok(x);
        };
        let mut rng = rng.borrow_mut();
        let (r, c) = tape.shape(x);
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f32> = (0..r * c).map(|_| if rng.uniform_f32() < p { 0.0 } else { keep }).collect();
        let m = tape.constant(Tensor::new(vec![r, c], mask)?);
        Ok(tape.hadamard(x, m)?)
    }

    fn layer_norm(&self, tape: &mut Tape, ln: LayerNormIds, x: Var) -> Result<Var> {
        let g = tape.param(&self.store, ln.g);
        let b = tape.param(&self.store, ln.b);
        let y = tape.layer_norm_rows(x)?;
        let y = tape.mul_row(y, g)?;
        Ok(tape.add_row(y, b)?)
    }

    fn feed_forward(&self, tape: &mut Tape, ff: FfIds, x: Var) -> Result<Var> {
        let w1 = tape.param(&self.store, ff.w1);
        let b1 = tape.param(&self.store, ff.b1);
        let w2 = tape.param(&self.store, ff.w2);
        let b2 = tape.param(&self.store, ff.b2);
        let h = tape.matmul(x, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.relu(h);
        let o = tape.matmul(h, w2)?;
        Ok(tape.add_row(o, b2)?)
    }

    /// Multi-head attention. `col_scale` (a `1 × keys` row) multiplies every
    /// head's attention columns after the softmax.
    fn attention(
        &self,
        tape: &mut Tape,
        a: AttnIds,
        xq: Var,
        xkv: Var,
        mask: Option<&Tensor>,
        col_scale: Option<Var>,
    ) -> Result<Var> {
        let d = self.config.d_model;
        let heads = self.config.heads;
        let dh = d / heads;
        let wq = tape.param(&self.store, a.wq);
        let wk = tape.param(&self.store, a.wk);
        let wv = tape.param(&self.store, a.wv);
        let wo = tape.param(&self.store, a.wo);
        let bo = tape.param(&self.store, a.bo);
        let q = tape.matmul(xq, wq)?;
        let k = tape.matmul(xkv, wk)?;
        let v = tape.matmul(xkv, wv)?;
        let scale = 1.0 / (dh as f32).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice_cols(q, h * dh, (h + 1) * dh)?;
            let kh = tape.slice_cols(k, h * dh, (h + 1) * dh)?;
            let vh = tape.slice_cols(v, h * dh, (h + 1) * dh)?;
            let s = tape.matmul_nt(qh, kh)?;
            let mut s = tape.scale(s, scale);
            if let Some(m) = mask {
                s = tape.add_const(s, m)?;
            }
            let mut att = tape.softmax_rows(s)?;
            if let Some(sc) = col_scale {
                att = tape.mul_row(att, sc)?;
                if self.config.renormalize_attention {
                    att = tape.normalize_rows(att)?;
                }
            }
            outs.push(tape.matmul(att, vh)?);
        }
        let cat = tape.concat_cols(&outs)?;
        let o = tape.matmul(cat, wo)?;
        Ok(tape.add_row(o, bo)?)
    }

    /// Token embeddings `node row + time encoding`.
    fn embed_tokens(&self, tape: &mut Tape, frame: &Frame, nodes: &[NodeId], times: &[f64]) -> Result<Var> {
        let ids = nodes.iter().map(|&n| self.vocab.token(n)).collect::<Result<Vec<_>>>()?;
        let rows = tape.embedding(frame.embed, &ids)?;
        let d = self.config.d_model;
        let mut te = Vec::with_capacity(times.len() * d);
        for &t in times {
            te.extend(encode_seconds(t, d));
        }
        Ok(tape.add_const(rows, &Tensor::new(vec![times.len(), d], te)?)?)
    }

    /// Denoise logits for the cluster's records (`n × 1`), or `None` when the
    /// denoiser is disabled.
    fn denoise_logits(&self, tape: &mut Tape, frame: &Frame, input: &ClusterInput) -> Result<Option<Var>> {
        let Some(p) = self.ids.denoiser else {
            return Ok(None);
        };
        let x = self.embed_tokens(tape, frame, &input.rec_nodes, &input.rec_times)?;
        let adj = tape.constant(input.adj.clone());
        let app = tape.constant(input.rec_app.clone());
        let feats = denoiser::node_features(tape, &self.store, &p, adj, x, app)?;
        let anchor = match &input.anchor {
            Some(a) => {
                let ax = self.embed_tokens(tape, frame, &a.nodes, &a.times)?;
                let aadj = tape.constant(a.adj.clone());
                let aapp = tape.constant(a.app.clone());
                let af = denoiser::node_features(tape, &self.store, &p, aadj, ax, aapp)?;
                denoiser::readout(tape, af)?
            }
            None => tape.constant(Tensor::zeros(1, self.config.d_st + self.config.d_app)),
        };
        Ok(Some(denoiser::score_logits(tape, &self.store, &p, feats, anchor)?))
    }

    fn encode_on(&self, tape: &mut Tape, frame: &Frame, seq: &TokenSequence) -> Result<Var> {
        if seq.is_empty() {
            return Err(Error::Invalid("cannot encode an empty sequence".into()));
        }
        if seq.len() > self.config.max_input {
            return Err(Error::SequenceTooLong {
                len: seq.len(),
                max: self.config.max_input,
            });
        }
        let times: Vec<f64> = seq.tokens.iter().map(|t| t.t).collect();
        let x = self.embed_tokens(tape, frame, &seq.nodes(), &times)?;
        let mut x = self.dropout(tape, frame, x)?;
        for layer in &self.ids.enc {
            let h = self.layer_norm(tape, layer.ln1, x)?;
            let a = self.attention(tape, layer.attn, h, h, None, None)?;
            let a = self.dropout(tape, frame, a)?;
            x = tape.add(x, a)?;
            let h = self.layer_norm(tape, layer.ln2, x)?;
            let f = self.feed_forward(tape, layer.ff, h)?;
            let f = self.dropout(tape, frame, f)?;
            x = tape.add(x, f)?;
        }
        self.layer_norm(tape, self.ids.enc_ln, x)
    }

    /// Logits over the `|V| + 1` output classes for every prefix position.
    fn decode_on(&self, tape: &mut Tape, frame: &Frame, memory: Var, scores: Option<Var>, prefix: &[usize]) -> Result<Var> {
        let d = self.config.d_model;
        let p = prefix.len();
        let emb = tape.embedding(frame.embed, prefix)?;
        let pe: Vec<f32> = (0..p).flat_map(|i| sinusoid(i, d)).collect();
        let y = tape.add_const(emb, &Tensor::new(vec![p, d], pe)?)?;
        let mut y = self.dropout(tape, frame, y)?;
        let mask = causal_mask(p);
        for layer in &self.ids.dec {
            let h = self.layer_norm(tape, layer.ln1, y)?;
            let a = self.attention(tape, layer.self_attn, h, h, Some(&mask), None)?;
            let a = self.dropout(tape, frame, a)?;
            y = tape.add(y, a)?;
            let h = self.layer_norm(tape, layer.ln2, y)?;
            let c = self.attention(tape, layer.cross, h, memory, None, scores)?;
            let c = self.dropout(tape, frame, c)?;
            y = tape.add(y, c)?;
            let h = self.layer_norm(tape, layer.ln3, y)?;
            let f = self.feed_forward(tape, layer.ff, h)?;
            let f = self.dropout(tape, frame, f)?;
            y = tape.add(y, f)?;
        }
        let y = self.layer_norm(tape, self.ids.dec_ln, y)?;
        let logits = tape.matmul_nt(y, frame.classes)?;
        let b = tape.param(&self.store, self.ids.out_b);
        Ok(tape.add_row(logits, b)?)
    }

    // -- public inference API -------------------------------------------------

    /// Per-record denoise scores; all ones when the denoiser is disabled.
    pub fn denoise_scores(&self, input: &ClusterInput) -> Result<Vec<f32>> {
        let mut tape = Tape::new();
        let frame = self.frame(&mut tape)?;
        Ok(match self.denoise_logits(&mut tape, &frame, input)? {
            Some(z) => tape.value(z).data().iter().map(|&x| sigmoid(x)).collect(),
            None => vec![1.0; input.rec_nodes.len()],
        })
    }

    /// Memory matrix `tokens × d`.
    pub fn encode(&self, seq: &TokenSequence) -> Result<Tensor> {
        let mut tape = Tape::new();
        let frame = self.frame(&mut tape)?;
        let m = self.encode_on(&mut tape, &frame, seq)?;
        Ok(tape.value(m).clone())
    }

    /// Decoder logits (`prefix × classes`) for a prefix of vocabulary tokens.
    pub fn decode_logits(&self, memory: &Tensor, scores: Option<&[f32]>, prefix: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let frame = self.frame(&mut tape)?;
        let mem = tape.constant(memory.clone());
        let sc = scores.map(|s| tape.constant(Tensor::row(s.to_vec())));
        let logits = self.decode_on(&mut tape, &frame, mem, sc, prefix)?;
        Ok(tape.value(logits).clone())
    }

    /// Greedy decoding from BOS until EOS or `max_len` steps. With `scores`
    /// the cross-attention is soft-masked; without, it is left untouched.
    pub fn generate(&self, memory: &Tensor, scores: Option<&[f32]>) -> Result<Generation> {
        if let Some(s) = scores {
            if s.len() != memory.rows() {
                return Err(Error::LengthMismatch(format!("{} memory rows, {} scores", memory.rows(), s.len())));
            }
        }
        let mut prefix = vec![self.vocab.bos()];
        let mut classes = Vec::new();
        let eos = self.vocab.eos_class();
        for _ in 0..self.config.max_len {
            let mut tape = Tape::new();
            let frame = self.frame(&mut tape)?;
            let mem = tape.constant(memory.clone());
            let sc = scores.map(|s| tape.constant(Tensor::row(s.to_vec())));
            let logits = self.decode_on(&mut tape, &frame, mem, sc, &prefix)?;
            let last = tape.value(logits).row_slice(prefix.len() - 1);
            let mut best = 0;
            for (i, &v) in last.iter().enumerate() {
                if v > last[best] {
                    best = i;
                }
            }
            classes.push(best);
            if best == eos {
                return Ok(self.finish(classes, false));
            }
            prefix.push(best);
        }
        Ok(self.finish(classes, true))
    }

    fn finish(&self, classes: Vec<usize>, truncated: bool) -> Generation {
        let eos = self.vocab.eos_class();
        let mut nodes: Vec<NodeId> = Vec::new();
        for &c in classes.iter().filter(|&&c| c != eos) {
            let n = c as NodeId + 1;
            if nodes.last() != Some(&n) {
                nodes.push(n);
            }
        }
        Generation {
            nodes,
            classes,
            truncated,
        }
    }

    /// Full inference on a prepared cluster.
    pub fn recover(&self, input: &ClusterInput) -> Result<Recovered> {
        let scores = self.denoise_scores(input)?;
        let seq = input.sequence_with_scores(&scores);
        let memory = self.encode(&seq)?;
        let masked = self.ids.denoiser.is_some().then_some(seq.scores.as_slice());
        let g = self.generate(&memory, masked)?;
        Ok(Recovered {
            nodes: g.nodes,
            scores,
            truncated: g.truncated,
        })
    }

    /// Teacher-forced forward pass: `(logits, targets, denoise logits)`.
    fn forward_train(&self, tape: &mut Tape, frame: &Frame, s: &TrainSample) -> Result<(Var, Vec<usize>, Option<Var>)> {
        let den = self.denoise_logits(tape, frame, &s.input)?;
        let token_scores = match den {
            Some(z) => {
                let probs = tape.sigmoid(z);
                let per_tok = tape.embedding(probs, &s.input.tokens.sources())?;
                Some(tape.transpose(per_tok))
            }
            None => None,
        };
        let memory = self.encode_on(tape, frame, &s.input.tokens)?;
        let mut prefix = vec![self.vocab.bos()];
        let mut targets = Vec::with_capacity(s.target.len() + 1);
        for &n in &s.target {
            let tok = self.vocab.token(n)?;
            prefix.push(tok);
            targets.push(tok);
        }
        targets.push(self.vocab.eos_class());
        let logits = self.decode_on(tape, frame, memory, token_scores, &prefix)?;
        Ok((logits, targets, den))
    }
}

/// Output of [`RecoveryModel::recover`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recovered {
    pub nodes: Vec<NodeId>,
    pub scores: Vec<f32>,
    pub truncated: bool,
}

// ---------------------------------------------------------------------------
// Prepared inputs

/// Lookup tables shared by every cluster of one dataset.
pub struct Context<'a> {
    pub net: &'a RoadNetwork,
    pub records: HashMap<RecordId, &'a Record>,
    pub tracklets: HashMap<RecordId, &'a Tracklet>,
    pub weights: SimilarityWeights,
}

impl<'a> Context<'a> {
    pub fn new(net: &'a RoadNetwork, records: &'a [Record], tracklets: &'a [Tracklet], weights: SimilarityWeights) -> Self {
        Self {
            net,
            records: records.iter().map(|r| (r.record_id, r)).collect(),
            tracklets: tracklets.iter().map(|t| (t.record_id, t)).collect(),
            weights,
        }
    }

    pub fn record(&self, id: RecordId) -> Result<&'a Record> {
        self.records
            .get(&id)
            .copied()
            .ok_or_else(|| Error::Invalid(format!("unknown record {id}")))
    }

    /// Records sorted by `(t, id)`.
    pub fn chronological(&self, ids: &[RecordId]) -> Result<Vec<&'a Record>> {
        let mut recs = ids.iter().map(|&id| self.record(id)).collect::<Result<Vec<_>>>()?;
        recs.sort_by(|a, b| a.t.total_cmp(&b.t).then(a.record_id.cmp(&b.record_id)));
        Ok(recs)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphInput {
    pub nodes: Vec<NodeId>,
    pub times: Vec<f64>,
    pub app: Tensor,
    pub adj: Tensor,
}

/// Parameter-independent model input for one normal-threshold cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterInput {
    pub cluster_id: u32,
    /// Chronological record ids.
    pub record_ids: Vec<RecordId>,
    pub rec_nodes: Vec<NodeId>,
    pub rec_times: Vec<f64>,
    pub rec_app: Tensor,
    pub adj: Tensor,
    pub anchor: Option<GraphInput>,
    /// Encoder tokens, augmented when tracklets are enabled; scores are
    /// placeholders until [`ClusterInput::sequence_with_scores`].
    pub tokens: TokenSequence,
}

impl ClusterInput {
    /// Token sequence with per-record scores spread over the tokens.
    pub fn sequence_with_scores(&self, scores: &[f32]) -> TokenSequence {
        TokenSequence {
            tokens: self.tokens.tokens.clone(),
            scores: self.tokens.tokens.iter().map(|t| scores[t.source]).collect(),
        }
    }
}

fn graph_input(ctx: &Context<'_>, recs: &[&Record], t0: f64, cluster_id: u32) -> Result<GraphInput> {
    let ids: Vec<RecordId> = recs.iter().map(|r| r.record_id).collect();
    let g = build_cluster_graph(cluster_id, &ids, &ctx.records, &ctx.weights)?;
    let d_app = recs[0].app_feature.len();
    let app: Vec<f32> = recs.iter().flat_map(|r| r.app_feature.iter().copied()).collect();
    Ok(GraphInput {
        nodes: recs.iter().map(|r| r.node).collect(),
        times: recs.iter().map(|r| r.t - t0).collect(),
        app: Tensor::new(vec![recs.len(), d_app], app)?,
        adj: denoiser::normalized_adjacency(&g.weights, recs.len())?,
    })
}

/// Builds graphs and the (optionally augmented) token sequence for a cluster.
pub fn prepare_cluster(
    ctx: &Context<'_>,
    cfg: &ModelConfig,
    cluster_id: u32,
    record_ids: &[RecordId],
    anchor_ids: Option<&[RecordId]>,
) -> Result<ClusterInput> {
    let recs = ctx.chronological(record_ids)?;
    if recs.is_empty() {
        return Err(Error::Invalid(format!("cluster {cluster_id} is empty")));
    }
    let t0 = recs[0].t;
    let main = graph_input(ctx, &recs, t0, cluster_id)?;
    if main.app.cols() != cfg.d_app {
        return Err(Error::Config(format!(
            "records carry {}-d appearance features, model expects {}",
            main.app.cols(),
            cfg.d_app
        )));
    }
    let anchor = match anchor_ids {
        Some(ids) if !ids.is_empty() => Some(graph_input(ctx, &ctx.chronological(ids)?, t0, cluster_id)?),
        _ => None,
    };
    let base = TokenSequence {
        tokens: recs
            .iter()
            .enumerate()
            .map(|(i, r)| Token {
                node: r.node,
                t: r.t - t0,
                source: i,
                provenance: Provenance::Record,
            })
            .collect(),
        scores: vec![1.0; recs.len()],
    };
    let tokens = if cfg.use_tracklets {
        let tracklet_of = |i: usize| {
            ctx.tracklets.get(&recs[i].record_id).map(|tk| {
                let speed = tk.speed().unwrap_or(10.0);
                ((*tk).clone(), speed)
            })
        };
        augment_with_tracklets(&base, tracklet_of, ctx.net, cfg.margin_deg)?
    } else {
        base
    };
    if tokens.len() > cfg.max_input {
        return Err(Error::SequenceTooLong {
            len: tokens.len(),
            max: cfg.max_input,
        });
    }
    Ok(ClusterInput {
        cluster_id,
        record_ids: recs.iter().map(|r| r.record_id).collect(),
        rec_nodes: main.nodes,
        rec_times: main.times,
        rec_app: main.app,
        adj: main.adj,
        anchor,
        tokens,
    })
}

/// A prepared cluster with supervision.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub input: ClusterInput,
    /// `s*` per chronological record.
    pub labels: Vec<f32>,
    pub target: Vec<NodeId>,
}

// ---------------------------------------------------------------------------
// Training

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    /// Final learning rate as a fraction of `lr` (linear decay).
    pub lr_final_fraction: f32,
    pub warmup_steps: usize,
    pub clip_norm: f32,
    /// Decoupled weight decay per unit learning rate, applied to the
    /// generator only.
    pub weight_decay: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            lr: 1e-3,
            lr_final_fraction: 0.1,
            warmup_steps: 50,
            clip_norm: 1.0,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub epoch: usize,
    pub total: f64,
    pub generation: f64,
    pub denoise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub curve: Vec<LossPoint>,
    pub steps: u64,
}

struct BatchLoss {
    total: Var,
    generation: f32,
    denoise: f32,
}

impl RecoveryModel {
    fn batch_loss(&self, tape: &mut Tape, batch: &[&TrainSample], dropout: Option<SeededRng>) -> Result<BatchLoss> {
        let mut frame = self.frame(tape)?;
        frame.dropout = dropout.map(RefCell::new);
        let mut logits = Vec::with_capacity(batch.len());
        let mut targets = Vec::new();
        let mut den = Vec::new();
        let mut labels = Vec::new();
        for s in batch {
            let (l, t, d) = self.forward_train(tape, &frame, s)?;
            logits.push(l);
            targets.extend(t);
            if let Some(d) = d {
                den.push(d);
                labels.extend_from_slice(&s.labels);
            }
        }
        let all = tape.concat_rows(&logits)?;
        let gen = tape.cross_entropy(all, &targets, None)?;
        let generation = tape.value(gen).item();
        if den.is_empty() || self.config.lambda == 0.0 {
            return Ok(BatchLoss {
                total: gen,
                generation,
                denoise: 0.0,
            });
        }
        let z = tape.concat_rows(&den)?;
        let de = denoiser::denoise_loss(tape, z, &labels)?;
        let denoise = tape.value(de).item();
        let weighted = tape.scale(de, self.config.lambda);
        Ok(BatchLoss {
            total: tape.add(gen, weighted)?,
            generation,
            denoise,
        })
    }

    /// Loss on `samples` without updating parameters; batches are formed in
    /// input order.
    pub fn evaluate_loss(&self, samples: &[TrainSample], batch_size: usize) -> Result<LossPoint> {
        if samples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let (mut total, mut gen, mut de, mut n) = (0.0f64, 0.0f64, 0.0f64, 0usize);
        for chunk in samples.chunks(batch_size.max(1)) {
            let mut tape = Tape::new();
            let refs: Vec<&TrainSample> = chunk.iter().collect();
            let l = self.batch_loss(&mut tape, &refs, None)?;
            let w = chunk.len() as f64;
            total += f64::from(tape.value(l.total).item()) * w;
            gen += f64::from(l.generation) * w;
            de += f64::from(l.denoise) * w;
            n += chunk.len();
        }
        let n = n as f64;
        Ok(LossPoint {
            epoch: 0,
            total: total / n,
            generation: gen / n,
            denoise: de / n,
        })
    }

    /// Gradients of the batch loss with respect to every parameter.
    pub fn gradients(&self, batch: &[&TrainSample]) -> Result<(f32, BTreeMap<ParamId, Tensor>)> {
        let mut tape = Tape::new();
        let l = self.batch_loss(&mut tape, batch, None)?;
        let value = tape.value(l.total).item();
        Ok((value, tape.backward(l.total)?.into_params()))
    }

    /// Co-trains the generator and the denoiser with teacher forcing.
    /// Batches group samples of similar token length; batch order is
    /// shuffled per epoch from `seed`.
    pub fn train(&mut self, samples: &[TrainSample], cfg: &TrainConfig, seed: u64) -> Result<TrainReport> {
        if samples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.sort_by_key(|&i| (samples[i].input.tokens.len() + samples[i].target.len(), i));
        let batches: Vec<Vec<usize>> = order.chunks(cfg.batch_size.max(1)).map(<[usize]>::to_vec).collect();
        let total_steps = (cfg.epochs * batches.len()).max(1);
        let mut adam = Adam::new(AdamConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..AdamConfig::default()
        });
        if let Some(p) = self.ids.denoiser {
            adam.exempt_from_decay(p.ids());
        }
        let mut rng = SeededRng::new(seed).split_named("batches");
        let drop_rng = SeededRng::new(seed).split_named("dropout");
        let mut curve = Vec::with_capacity(cfg.epochs);
        let mut step = 0usize;
        for epoch in 0..cfg.epochs {
            let mut batch_order: Vec<usize> = (0..batches.len()).collect();
            batch_order.shuffle(&mut rng);
            let (mut tot, mut gen, mut de, mut n) = (0.0f64, 0.0f64, 0.0f64, 0usize);
            for bi in batch_order {
                let batch: Vec<&TrainSample> = batches[bi].iter().map(|&i| &samples[i]).collect();
                let mut tape = Tape::new();
                let l = self.batch_loss(&mut tape, &batch, Some(drop_rng.split(step as u64)))?;
                let w = batch.len() as f64;
                tot += f64::from(tape.value(l.total).item()) * w;
                gen += f64::from(l.generation) * w;
                de += f64::from(l.denoise) * w;
                n += batch.len();
                let mut grads = tape.backward(l.total)?.into_params();
                if cfg.clip_norm > 0.0 {
                    clip_grad_norm(&mut grads, cfg.clip_norm);
                }
                let progress = step as f32 / total_steps as f32;
                let decay = 1.0 - (1.0 - cfg.lr_final_fraction) * progress;
                let warm = if cfg.warmup_steps > 0 {
                    ((step + 1) as f32 / cfg.warmup_steps as f32).min(1.0)
                } else {
                    1.0
                };
                adam.step_with_lr(&mut self.store, &grads, cfg.lr * decay * warm);
                step += 1;
            }
            let n = n as f64;
            let point = LossPoint {
                epoch: epoch + 1,
                total: tot / n,
                generation: gen / n,
                denoise: de / n,
            };
            log::debug!(
                "epoch {}: loss {:.4} (gen {:.4}, de {:.4})",
                point.epoch,
                point.total,
                point.generation,
                point.denoise
            );
            curve.push(point);
        }
        Ok(TrainReport {
            curve,
            steps: adam.steps_taken(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::roadnet::tests_support::file;
    use crate::synthgen::TrackPoint;

    /// Plus-shaped intersection: center 1, north 2, east 3, south 4, west 5.
    fn cross() -> RoadNetwork {
        let d = 0.001;
        RoadNetwork::from_file(&file(
            &[(1, 0.0, 0.0), (2, d, 0.0), (3, 0.0, d), (4, -d, 0.0), (5, 0.0, -d)],
            &[(1, 2, None), (1, 3, None), (1, 4, None), (1, 5, None)],
        ))
        .unwrap()
    }

    fn track(points: &[(f64, f64)]) -> Tracklet {
        Tracklet {
            record_id: 1,
            points: points
                .iter()
                .enumerate()
                .map(|(i, &(lat, lon))| TrackPoint { lat, lon, t: i as f64 })
                .collect(),
        }
    }

    #[test]
    fn straight_and_turning_tracklets() {
        let net = cross();
        let s = 0.0002;
        let straight = track(&[(-2.0 * s, 0.0), (-s, 0.0), (0.0, 0.0), (s, 0.0), (2.0 * s, 0.0)]);
        assert_eq!(tracklet_to_updown(&straight, &net, 1, 20.0).unwrap().expand(1), vec![4, 1, 2]);
        let right = track(&[(-2.0 * s, 0.0), (-s, 0.0), (0.0, 0.0), (0.0, s), (0.0, 2.0 * s)]);
        assert_eq!(tracklet_to_updown(&right, &net, 1, 20.0).unwrap().expand(1), vec![4, 1, 3]);
        let diagonal = track(&[(-2.0 * s, 0.0), (-s, 0.0), (0.0, 0.0), (s, s), (2.0 * s, 2.0 * s)]);
        assert_eq!(tracklet_to_updown(&diagonal, &net, 1, 20.0).unwrap().expand(1), vec![4, 1]);
        let stuck = track(&[(0.0, 0.0), (0.0, 0.0)]);
        assert!(matches!(
            tracklet_to_updown(&stuck, &net, 1, 20.0),
            Err(Error::DegenerateTracklet(_))
        ));
    }

    fn seq(nodes: &[NodeId], scores: &[f32]) -> TokenSequence {
        TokenSequence {
            tokens: nodes
                .iter()
                .enumerate()
                .map(|(i, &node)| Token {
                    node,
                    t: i as f64 * 10.0,
                    source: i,
                    provenance: Provenance::Record,
                })
                .collect(),
            scores: scores.to_vec(),
        }
    }

    #[test]
    fn augmentation_without_tracklets_is_identity() {
        let net = cross();
        let s = seq(&[4, 1, 2], &[0.9, 0.2, 0.7]);
        assert_eq!(augment_with_tracklets(&s, |_| None, &net, 20.0).unwrap(), s);
    }

    #[test]
    fn augmentation_expands_and_repeats_scores() {
        let net = cross();
        let s = seq(&[1], &[0.3]);
        let p = 0.0002;
        let tk = track(&[(-2.0 * p, 0.0), (-p, 0.0), (0.0, 0.0), (p, 0.0), (2.0 * p, 0.0)]);
        let out = augment_with_tracklets(&s, |_| Some((tk.clone(), 10.0)), &net, 20.0).unwrap();
        assert_eq!(out.nodes(), vec![4, 1, 2]);
        assert_eq!(out.scores, vec![0.3; 3]);
        let prov: Vec<Provenance> = out.tokens.iter().map(|t| t.provenance).collect();
        assert_eq!(
            prov,
            vec![Provenance::TrackletUpstream, Provenance::Record, Provenance::TrackletDownstream]
        );
        assert!(out.tokens[0].t < out.tokens[1].t && out.tokens[1].t < out.tokens[2].t);
    }

    #[test]
    fn soft_mask_cases() {
        let att = Tensor::from_rows(&[vec![0.5, 0.5]]).unwrap();
        assert_eq!(soft_masked_attention(&att, &[1.0, 1.0], false).unwrap(), att);
        assert_eq!(soft_masked_attention(&att, &[1.0, 0.0], false).unwrap().data(), &[0.5, 0.0]);
        assert_eq!(soft_masked_attention(&att, &[1.0, 0.0], true).unwrap().data(), &[1.0, 0.0]);
        let att = Tensor::from_rows(&[vec![0.2, 0.3, 0.5], vec![0.6, 0.1, 0.3]]).unwrap();
        let s = [0.9, 0.4, 0.1];
        let got = soft_masked_attention(&att, &s, false).unwrap();
        for r in 0..2 {
            for c in 0..3 {
                assert_eq!(got.at(r, c), att.at(r, c) * s[c]);
            }
        }
        assert!(soft_masked_attention(&att, &[1.0], false).is_err());
    }

    fn tiny_model(use_denoiser: bool) -> RecoveryModel {
        let cfg = ModelConfig {
            d_model: 8,
            heads: 2,
            d_ff: 16,
            enc_layers: 1,
            dec_layers: 1,
            max_len: 6,
            d_app: 2,
            gcn_hidden: 4,
            d_st: 4,
            use_denoiser,
            ..ModelConfig::default()
        };
        let mut rng = SeededRng::new(5);
        let vocab = Vocab::new(5);
        let data = (0..vocab.size() * 8).map(|_| rng.uniform_f32() - 0.5).collect();
        let table = NodeEmbeddingTable {
            vocab,
            table: Tensor::new(vec![vocab.size(), 8], data).unwrap(),
        };
        RecoveryModel::new(cfg, &table, 7).unwrap()
    }

    #[test]
    fn untrained_generation_terminates_with_valid_ids() {
        let m = tiny_model(false);
        let memory = m.encode(&seq(&[1, 2, 3], &[1.0; 3])).unwrap();
        assert_eq!(memory.shape(), &[3, 8]);
        let g = m.generate(&memory, None).unwrap();
        assert!(g.classes.len() <= m.config.max_len);
        assert!(g.classes.iter().all(|&c| c < m.vocab.n_classes()));
        assert!(g.nodes.iter().all(|&n| (1..=5).contains(&n)));
        assert!(g.nodes.windows(2).all(|w| w[0] != w[1]));
    }

    #[test]
    fn unit_scores_match_unmasked_decoding_bitwise() {
        let m = tiny_model(true);
        let memory = m.encode(&seq(&[2, 3, 4, 5], &[1.0; 4])).unwrap();
        let plain = m.generate(&memory, None).unwrap();
        let ones = m.generate(&memory, Some(&[1.0; 4])).unwrap();
        assert_eq!(plain, ones);
    }

    #[test]
    fn early_eos_yields_empty_flagged_path() {
        let mut m = tiny_model(false);
        // Force EOS by a dominant output bias.
        let eos = m.vocab.eos_class();
        let out_b = m.store.id("out.b").unwrap();
        m.store.get_mut(out_b).tensor.data_mut()[eos] = 1e4;
        let memory = m.encode(&seq(&[1, 2], &[1.0; 2])).unwrap();
        let g = m.generate(&memory, None).unwrap();
        assert!(g.nodes.is_empty() && !g.truncated);
        assert_eq!(g.classes, vec![eos]);
        // Forbid EOS entirely: decoding stops at L with the flag set.
        m.store.get_mut(out_b).tensor.data_mut()[eos] = -1e4;
        let g = m.generate(&memory, None).unwrap();
        assert!(g.truncated);
        assert_eq!(g.classes.len(), m.config.max_len);
    }

    #[test]
    fn encoder_has_no_positional_signal_beyond_time() {
        let m = tiny_model(false);
        let mut a = seq(&[2, 4], &[1.0; 2]);
        a.tokens[1].t = 0.0;
        let mut b = a.clone();
        b.tokens.swap(0, 1);
        let ma = m.encode(&a).unwrap();
        let mb = m.encode(&b).unwrap();
        for (x, y) in ma.row_slice(0).iter().zip(mb.row_slice(1)) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let m = tiny_model(true);
        let ck = m.to_checkpoint(serde_json::json!({"seed": 1}));
        let text = serde_json::to_string(&ck).unwrap();
        let back = RecoveryModel::from_checkpoint(&serde_json::from_str(&text).unwrap()).unwrap();
        assert_eq!(back.store, m.store);
        let memory = m.encode(&seq(&[1, 3], &[1.0; 2])).unwrap();
        assert_eq!(back.encode(&seq(&[1, 3], &[1.0; 2])).unwrap(), memory);
    }

    #[test]
    fn ablation_names() {
        let base = ModelConfig::default();
        let c = base.ablation("w/o-de").unwrap();
        assert!(!c.use_denoiser && c.use_tracklets);
        assert!(base.ablation("nonsense").is_err());
    }
}
