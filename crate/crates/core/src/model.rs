//! Question-conditioned attention model and its nine named variants.
//!
//! Pipeline: conv stack → region features `X` (`n_I×M`); embedded tokens →
//! GRU → question vector `q`; per attention head, unary (and for structured
//! heads pairwise) potentials from low-rank bilinear pooling; glimpses turn
//! potentials into attention weights and weighted contexts; the classifier
//! pools each context with `q` and maps the concatenation to answer logits.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::crf::GridGraph;
use crate::error::{Error, Result};
use crate::inference::{lbp_on_tape, mean_field_on_tape, InferenceConfig, Schedule};
use crate::kv::KeyValues;
use crate::nn::{dropout, glorot_matrix, ConvLayer, Gru};
use crate::optim::AdamState;
use crate::rng::{seeded, Rng};
use crate::tensor::Tensor;

/// Floor on the total attention mass `S` before normalizing a structured context.
pub const MASS_FLOOR: f64 = 1e-8;

pub const ANSWER_NO: usize = 0;
pub const ANSWER_YES: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GlimpseKind {
    Softmax,
    Sigmoid,
    MeanField,
    Lbp,
}

impl GlimpseKind {
    pub fn is_structured(self) -> bool {
        matches!(self, GlimpseKind::MeanField | GlimpseKind::Lbp)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Sm,
    Sig,
    Mf,
    Lbp,
    SigG2,
    MfG2,
    LbpG2,
    MfSig,
    LbpSig,
}

impl Variant {
    pub const ALL: [Variant; 9] = [
        Variant::Sm,
        Variant::Sig,
        Variant::Mf,
        Variant::Lbp,
        Variant::SigG2,
        Variant::MfG2,
        Variant::LbpG2,
        Variant::MfSig,
        Variant::LbpSig,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Sm => "SM",
            Variant::Sig => "SIG",
            Variant::Mf => "MF",
            Variant::Lbp => "LBP",
            Variant::SigG2 => "SIG-G2",
            Variant::MfG2 => "MF-G2",
            Variant::LbpG2 => "LBP-G2",
            Variant::MfSig => "MF-SIG",
            Variant::LbpSig => "LBP-SIG",
        }
    }

    /// Parses a variant name with an optional `-T<n>` step suffix.
    pub fn parse_with_steps(s: &str) -> Result<(Variant, Option<usize>)> {
        let upper = s.trim().to_ascii_uppercase();
        let (base, steps) = match upper.rfind("-T") {
            Some(pos) if upper[pos + 2..].chars().all(|c| c.is_ascii_digit()) && pos + 2 < upper.len() => {
                (&upper[..pos], Some(upper[pos + 2..].parse().unwrap()))
            }
            _ => (upper.as_str(), None),
        };
        let v = Variant::ALL
            .into_iter()
            .find(|v| v.name() == base)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))?;
        Ok((v, steps))
    }

    /// Contexts emitted by each attention head. Heads own their potential parameters.
    pub fn heads(self) -> Vec<Vec<GlimpseKind>> {
        use GlimpseKind::*;
        match self {
            Variant::Sm => vec![vec![Softmax]],
            Variant::Sig => vec![vec![Sigmoid]],
            Variant::Mf => vec![vec![MeanField]],
            Variant::Lbp => vec![vec![Lbp]],
            Variant::SigG2 => vec![vec![Sigmoid], vec![Sigmoid]],
            Variant::MfG2 => vec![vec![MeanField], vec![MeanField]],
            Variant::LbpG2 => vec![vec![Lbp], vec![Lbp]],
            // structured glimpse and the sigmoid glimpse share one set of unary potentials
            Variant::MfSig => vec![vec![MeanField, Sigmoid]],
            Variant::LbpSig => vec![vec![Lbp, Sigmoid]],
        }
    }

    pub fn glimpse_count(self) -> usize {
        self.heads().iter().map(Vec::len).sum()
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(Variant::parse_with_steps(s)?.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Inference steps `T`.
    pub steps: usize,
    pub schedule: Schedule,
    pub damping: f64,
    pub n_i: usize,
    pub n_q: usize,
    pub n_c: usize,
    /// Word embedding width.
    pub n_e: usize,
    pub conv_channels: usize,
    /// Extra half-resolution pixels each region feature sees on every side.
    pub region_overlap: usize,
    /// Add a learned per-region embedding to the region features. Pairwise
    /// potentials share `V_y` across horizontal and vertical edges, so this is
    /// what lets them tell the two apart.
    pub position_embedding: bool,
    pub image_size: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub answers: usize,
    pub vocab: usize,
    pub dropout_q: f64,
    pub dropout_fc: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::MfG2,
            steps: 3,
            schedule: Schedule::Parallel,
            damping: 0.0,
            n_i: 50,
            n_q: 128,
            n_c: 128,
            n_e: 32,
            conv_channels: 16,
            region_overlap: 0,
            position_embedding: true,
            image_size: 30,
            grid_h: 3,
            grid_w: 3,
            answers: 2,
            vocab: crate::shapes::VOCAB_SIZE,
            dropout_q: 0.2,
            dropout_fc: 0.2,
        }
    }
}

impl ModelConfig {
    pub const KEYS: [&'static str; 18] = [
        "variant",
        "steps",
        "schedule",
        "damping",
        "n_i",
        "n_q",
        "n_c",
        "n_e",
        "conv_channels",
        "region_overlap",
        "position_embedding",
        "image_size",
        "grid_h",
        "grid_w",
        "answers",
        "vocab",
        "dropout_q",
        "dropout_fc",
    ];

    pub fn num_regions(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// Second conv layer stride, mapping the half-resolution map onto the grid.
    pub fn region_stride(&self) -> usize {
        self.image_size / 2 / self.grid_h
    }

    /// Second conv layer kernel: one cell plus `region_overlap` on each side.
    pub fn region_kernel(&self) -> usize {
        self.region_stride() + 2 * self.region_overlap
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.grid_h != self.grid_w {
            return bad(format!("grid must be square, got {}x{}", self.grid_h, self.grid_w));
        }
        if self.num_regions() < 2 {
            return bad("grid needs at least two regions".into());
        }
        if self.image_size % 2 != 0 || (self.image_size / 2) % self.grid_h != 0 {
            return bad(format!(
                "image size {} does not tile onto a {}x{} grid",
                self.image_size, self.grid_h, self.grid_w
            ));
        }
        if self.answers < 2 {
            return bad("need at least two answers".into());
        }
        for (name, v) in [
            ("n_i", self.n_i),
            ("n_q", self.n_q),
            ("n_c", self.n_c),
            ("n_e", self.n_e),
            ("conv_channels", self.conv_channels),
            ("vocab", self.vocab),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        for p in [self.dropout_q, self.dropout_fc] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("dropout {p} not in [0, 1)"));
            }
        }
        InferenceConfig {
            steps: self.steps,
            schedule: self.schedule,
            damping: self.damping,
        }
        .validate()
    }

    pub fn inference(&self) -> InferenceConfig {
        InferenceConfig {
            steps: self.steps,
            schedule: self.schedule,
            damping: self.damping,
        }
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("variant", self.variant);
        kv.set("steps", self.steps);
        kv.set(
            "schedule",
            match self.schedule {
                Schedule::Parallel => "parallel",
                Schedule::Sequential => "sequential",
            },
        );
        kv.set("damping", self.damping);
        kv.set("n_i", self.n_i);
        kv.set("n_q", self.n_q);
        kv.set("n_c", self.n_c);
        kv.set("n_e", self.n_e);
        kv.set("conv_channels", self.conv_channels);
        kv.set("region_overlap", self.region_overlap);
        kv.set("position_embedding", self.position_embedding);
        kv.set("image_size", self.image_size);
        kv.set("grid_h", self.grid_h);
        kv.set("grid_w", self.grid_w);
        kv.set("answers", self.answers);
        kv.set("vocab", self.vocab);
        kv.set("dropout_q", self.dropout_q);
        kv.set("dropout_fc", self.dropout_fc);
        kv
    }

    /// Reads model keys from `kv`, defaulting anything absent. A `-T<n>` suffix on
    /// the variant sets `steps` unless `steps` is given explicitly.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let d = ModelConfig::default();
        let (variant, suffix_steps) = match kv.get("variant") {
            Some(v) => Variant::parse_with_steps(v)?,
            None => (d.variant, None),
        };
        let schedule = match kv.get("schedule").unwrap_or("parallel") {
            "parallel" => Schedule::Parallel,
            "sequential" => Schedule::Sequential,
            other => return Err(Error::Config(format!("unknown schedule {other:?}"))),
        };
        let cfg = ModelConfig {
            variant,
            steps: kv.parse_or("steps", suffix_steps.unwrap_or(d.steps))?,
            schedule,
            damping: kv.parse_or("damping", d.damping)?,
            n_i: kv.parse_or("n_i", d.n_i)?,
            n_q: kv.parse_or("n_q", d.n_q)?,
            n_c: kv.parse_or("n_c", d.n_c)?,
            n_e: kv.parse_or("n_e", d.n_e)?,
            conv_channels: kv.parse_or("conv_channels", d.conv_channels)?,
            region_overlap: kv.parse_or("region_overlap", d.region_overlap)?,
            position_embedding: kv.parse_or("position_embedding", d.position_embedding)?,
            image_size: kv.parse_or("image_size", d.image_size)?,
            grid_h: kv.parse_or("grid_h", d.grid_h)?,
            grid_w: kv.parse_or("grid_w", d.grid_w)?,
            answers: kv.parse_or("answers", d.answers)?,
            vocab: kv.parse_or("vocab", d.vocab)?,
            dropout_q: kv.parse_or("dropout_q", d.dropout_q)?,
            dropout_fc: kv.parse_or("dropout_fc", d.dropout_fc)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvStack {
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
}

impl ConvStack {
    /// `relu(conv2(relu(conv1(image))))` as an `n_I×M` matrix, one column per region.
    pub fn features<'p>(&self, tape: &mut Tape<'p>, store: &'p ParamStore, image: Var) -> Result<Var> {
        let y = self.feature_map(tape, store, image)?;
        let s = tape.shape(y).to_vec();
        tape.reshape(y, &[s[0], s[1] * s[2]])
    }

    /// The `n_I×H×W` output map.
    pub fn feature_map<'p>(&self, tape: &mut Tape<'p>, store: &'p ParamStore, image: Var) -> Result<Var> {
        let h = self.conv1.forward(tape, store, image)?;
        let h = tape.relu(h);
        let y = self.conv2.forward(tape, store, h)?;
        Ok(tape.relu(y))
    }

    pub fn layers(&self) -> [ConvLayer; 2] {
        [self.conv1, self.conv2]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PairwiseParams {
    pub v_y: ParamId,
    pub v_q: ParamId,
    pub v: ParamId,
}

#[derive(Clone, Debug)]
pub struct HeadParams {
    pub u_x: ParamId,
    pub u_q: ParamId,
    pub u: ParamId,
    pub pairwise: Option<PairwiseParams>,
    pub emits: Vec<GlimpseKind>,
}

#[derive(Clone, Copy, Debug)]
pub struct ClassifierParams {
    pub w_c_hat: ParamId,
    pub w_q_hat: ParamId,
    pub tilde: Option<(ParamId, ParamId)>,
    pub w: ParamId,
}

/// Parameter layout for one configuration.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub embed: ParamId,
    pub gru: Gru,
    pub conv: ConvStack,
    /// `n_I×M` embedding added to the conv features.
    pub position: Option<ParamId>,
    pub heads: Vec<HeadParams>,
    pub classifier: ClassifierParams,
    graph: Arc<GridGraph>,
}

/// Tape handles produced by one glimpse.
#[derive(Clone, Debug)]
pub struct GlimpseVars {
    pub kind: GlimpseKind,
    /// Attention weights over regions: a distribution for SM/SIG, marginals `b_i(1)` for MF/LBP.
    pub map: Var,
    /// `ψ_i(z_i = 1)`.
    pub unary: Var,
    /// Full `M×2` beliefs after each step (`b^(0)..b^(T)` for MF, `[b]` for LBP).
    pub trajectory: Vec<Var>,
    pub context: Var,
    /// `S = Σ_i b_i(1)` for structured glimpses.
    pub mass: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub features: Var,
    pub question: Var,
    pub glimpses: Vec<GlimpseVars>,
    pub pooled: [Var; 2],
    pub logits: Var,
}

/// Plain-value snapshot of a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct GlimpseArtifacts {
    pub kind: GlimpseKind,
    pub map: Vec<f64>,
    pub unary: Vec<f64>,
    pub trajectory: Vec<Vec<f64>>,
    pub context: Vec<f64>,
    pub mass: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardArtifacts {
    pub glimpses: Vec<GlimpseArtifacts>,
    pub pooled: [Vec<f64>; 2],
    pub logits: Vec<f64>,
}

impl ForwardArtifacts {
    pub fn capture(tape: &Tape<'_>, pass: &ForwardPass) -> Self {
        let v = |x: Var| tape.value(x).data().to_vec();
        ForwardArtifacts {
            glimpses: pass
                .glimpses
                .iter()
                .map(|g| GlimpseArtifacts {
                    kind: g.kind,
                    map: v(g.map),
                    unary: v(g.unary),
                    trajectory: g
                        .trajectory
                        .iter()
                        .map(|&b| tape.value(b).data().chunks(2).map(|r| r[1]).collect())
                        .collect(),
                    context: v(g.context),
                    mass: g.mass,
                })
                .collect(),
            pooled: [v(pass.pooled[0]), v(pass.pooled[1])],
            logits: v(pass.logits),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Prediction {
    pub answer: usize,
    pub probabilities: Vec<f64>,
    pub artifacts: ForwardArtifacts,
}

/// Lowest index among the maxima.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// `tanh(P_x x) ⊙ tanh(P_y y)` for vectors `x`, `y`.
pub fn bilinear_pool(tape: &mut Tape<'_>, x: Var, y: Var, p_x: Var, p_y: Var) -> Result<Var> {
    let a = tape.matmul(p_x, x)?;
    let a = tape.tanh(a);
    let b = tape.matmul(p_y, y)?;
    let b = tape.tanh(b);
    tape.hadamard(a, b)
}

/// Column-wise bilinear pooling of a feature matrix `[d×N]` with one vector `y`: `n_c×N`.
pub fn bilinear_pool_columns(tape: &mut Tape<'_>, x: Var, y: Var, p_x: Var, p_y: Var) -> Result<Var> {
    let a = tape.matmul(p_x, x)?;
    let a = tape.tanh(a);
    let b = tape.matmul(p_y, y)?;
    let b = tape.tanh(b);
    tape.mul_col_broadcast(a, b)
}

pub struct UnaryOutput {
    /// `U g(x_i, q)` before the sigmoid.
    pub scores: Var,
    /// `ψ_i(z_i = 1)`.
    pub psi_one: Var,
    /// `M×2` rows `(1 - ψ_i(1), ψ_i(1))`.
    pub table: Var,
}

/// Per-region scores, `ψ_i(1) = σ(U g(x_i, q; U_x, U_q))` and the `M×2` table.
pub fn unary_potentials(tape: &mut Tape<'_>, x: Var, q: Var, u_x: Var, u_q: Var, u: Var) -> Result<UnaryOutput> {
    let g = bilinear_pool_columns(tape, x, q, u_x, u_q)?;
    let s = tape.matmul(u, g)?;
    let m = tape.shape(s)[1];
    let scores = tape.reshape(s, &[m])?;
    let psi_one = tape.sigmoid(scores);
    let table = tape.stack_complement(psi_one)?;
    Ok(UnaryOutput { scores, psi_one, table })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairwiseMode {
    /// `ln ψ_ij = tanh(v_{z_i z_j} g(y_ij, q))`.
    MeanFieldLog,
    /// `ψ_ij = exp(tanh(v_{z_i z_j} g(y_ij, q)))`.
    Lbp,
}

/// `|edges|×4` pairwise table over canonical edges, columns `z_i * 2 + z_j`.
pub fn pairwise_potentials(
    tape: &mut Tape<'_>,
    x: Var,
    q: Var,
    graph: &GridGraph,
    v_y: Var,
    v_q: Var,
    v: Var,
    mode: PairwiseMode,
) -> Result<Var> {
    let (is, js): (Vec<usize>, Vec<usize>) = graph.edges().iter().copied().unzip();
    let xi = tape.gather_cols(x, &is)?;
    let xj = tape.gather_cols(x, &js)?;
    let y = tape.concat(xi, xj)?;
    let g = bilinear_pool_columns(tape, y, q, v_y, v_q)?;
    let raw = tape.matmul(v, g)?;
    let log = tape.tanh(raw);
    let log = tape.transpose(log)?;
    Ok(match mode {
        PairwiseMode::MeanFieldLog => log,
        PairwiseMode::Lbp => tape.exp(log),
    })
}

/// Softmax over region scores; returns `(context, map)`.
pub fn softmax_attention(tape: &mut Tape<'_>, x: Var, scores: Var) -> Result<(Var, Var)> {
    let map = tape.softmax(scores);
    let c = tape.matmul(x, map)?;
    Ok((c, map))
}

/// `ψ_i(1) / Σ_j ψ_j(1)`; returns `(context, map)`.
pub fn sigmoid_attention(tape: &mut Tape<'_>, x: Var, psi_one: Var) -> Result<(Var, Var)> {
    let map = tape.normalize(psi_one)?;
    let c = tape.matmul(x, map)?;
    Ok((c, map))
}

/// `ĉ = (1/S) Σ_i b_i(1) x_i`; returns `(context, marginals b(1), S)`.
pub fn structured_context(tape: &mut Tape<'_>, x: Var, beliefs: Var) -> Result<(Var, Var, f64)> {
    let marg = tape.column(beliefs, 1)?;
    let s = tape.value(marg).sum();
    if s <= MASS_FLOOR {
        return Err(Error::DegenerateAttention(s));
    }
    let w = tape.normalize(marg)?;
    let c = tape.matmul(x, w)?;
    Ok((c, marg, s))
}

/// `ŝ = g(ĉ, q; Ŵ_c, Ŵ_q)`, `s̃ = g(c̃, q; W̃_c, W̃_q)`, logits `W [ŝ; s̃]`.
/// Without `tilde` the single pooled vector `ŝ` fills both slots and `c̃` is unused.
/// `fc_dropout` applies dropout to `[ŝ; s̃]` before `W`.
#[allow(clippy::too_many_arguments)]
pub fn classify(
    tape: &mut Tape<'_>,
    c_hat: Var,
    c_tilde: Var,
    q: Var,
    hat: (Var, Var),
    tilde: Option<(Var, Var)>,
    w: Var,
    fc_dropout: Option<(&mut Rng, f64)>,
) -> Result<(Var, [Var; 2])> {
    let s_hat = bilinear_pool(tape, c_hat, q, hat.0, hat.1)?;
    let s_tilde = match tilde {
        Some((wc, wq)) => bilinear_pool(tape, c_tilde, q, wc, wq)?,
        None => s_hat,
    };
    let joint = tape.concat(s_hat, s_tilde)?;
    let joint = match fc_dropout {
        Some((r, p)) => dropout(tape, joint, p, r, true)?,
        None => joint,
    };
    Ok((tape.matmul(w, joint)?, [s_hat, s_tilde]))
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(seed);
        let r = &mut rng;
        let c = &config;
        let mut p = ParamStore::new();
        let embed = p.insert("embed", glorot_matrix(c.n_e, c.vocab, r));
        let gru = Gru::register(&mut p, "gru", c.n_e, c.n_q, r);
        let (k2, s2) = (c.region_kernel(), c.region_stride());
        let conv = ConvStack {
            conv1: ConvLayer::register(&mut p, "conv1", 3, c.conv_channels, 4, 2, 1, r),
            conv2: ConvLayer::register(&mut p, "conv2", c.conv_channels, c.n_i, k2, s2, c.region_overlap, r),
        };
        let position = c
            .position_embedding
            .then(|| p.insert("position", glorot_matrix(c.n_i, c.num_regions(), r)));
        let heads = c
            .variant
            .heads()
            .into_iter()
            .enumerate()
            .map(|(h, emits)| {
                let pre = format!("head{h}");
                let u_x = p.insert(format!("{pre}.u_x"), glorot_matrix(c.n_c, c.n_i, r));
                let u_q = p.insert(format!("{pre}.u_q"), glorot_matrix(c.n_c, c.n_q, r));
                let u = p.insert(format!("{pre}.u"), glorot_matrix(1, c.n_c, r));
                let pairwise = emits.iter().any(|k| k.is_structured()).then(|| PairwiseParams {
                    v_y: p.insert(format!("{pre}.v_y"), glorot_matrix(c.n_c, 2 * c.n_i, r)),
                    v_q: p.insert(format!("{pre}.v_q"), glorot_matrix(c.n_c, c.n_q, r)),
                    v: p.insert(format!("{pre}.v"), glorot_matrix(4, c.n_c, r)),
                });
                HeadParams {
                    u_x,
                    u_q,
                    u,
                    pairwise,
                    emits,
                }
            })
            .collect();
        let w_c_hat = p.insert("cls.w_c_hat", glorot_matrix(c.n_c, c.n_i, r));
        let w_q_hat = p.insert("cls.w_q_hat", glorot_matrix(c.n_c, c.n_q, r));
        let tilde = (c.variant.glimpse_count() == 2).then(|| {
            (
                p.insert("cls.w_c_tilde", glorot_matrix(c.n_c, c.n_i, r)),
                p.insert("cls.w_q_tilde", glorot_matrix(c.n_c, c.n_q, r)),
            )
        });
        let w = p.insert("cls.w", glorot_matrix(c.answers, 2 * c.n_c, r));
        let graph = Arc::new(GridGraph::new(c.grid_h, c.grid_w)?);
        Ok(Model {
            config,
            params: p,
            embed,
            gru,
            conv,
            position,
            heads,
            classifier: ClassifierParams {
                w_c_hat,
                w_q_hat,
                tilde,
                w,
            },
            graph,
        })
    }

    pub fn graph(&self) -> &Arc<GridGraph> {
        &self.graph
    }

    pub fn question<'p>(&'p self, tape: &mut Tape<'p>, tokens: &[u16]) -> Result<Var> {
        let ids: Vec<usize> = tokens.iter().take_while(|&&t| t != 0).map(|&t| t as usize).collect();
        if ids.is_empty() {
            return Err(Error::Config("empty question".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&t| t >= self.config.vocab) {
            return Err(Error::Config(format!("token id {bad} outside vocabulary")));
        }
        let e = tape.param(&self.params, self.embed);
        let xs = ids
            .iter()
            .map(|&t| tape.column(e, t))
            .collect::<Result<Vec<_>>>()?;
        self.gru.encode(tape, &self.params, &xs)
    }

    /// Region features `X` (`n_I×M`): conv features plus the position embedding.
    pub fn features<'p>(&'p self, tape: &mut Tape<'p>, image: Var) -> Result<Var> {
        let x = self.conv.features(tape, &self.params, image)?;
        match self.position {
            Some(id) => {
                let pos = tape.param(&self.params, id);
                tape.add(x, pos)
            }
            None => Ok(x),
        }
    }

    /// One forward pass. Dropout is active iff `rng` is given.
    pub fn forward<'p>(
        &'p self,
        tape: &mut Tape<'p>,
        image: &Tensor,
        tokens: &[u16],
        mut rng: Option<&mut Rng>,
    ) -> Result<ForwardPass> {
        let c = &self.config;
        let s = c.image_size;
        if image.shape() != [3, s, s] {
            return Err(Error::shape("image", image.shape(), &[3, s, s]));
        }
        let img = tape.constant(image.clone());
        let x = self.features(tape, img)?;
        let q = self.question(tape, tokens)?;
        let q = match rng.as_deref_mut() {
            Some(r) => dropout(tape, q, c.dropout_q, r, true)?,
            None => q,
        };
        let mut glimpses = Vec::new();
        for head in &self.heads {
            glimpses.extend(self.run_head(tape, head, x, q)?);
        }
        let cls = &self.classifier;
        let p = &self.params;
        let hat = (tape.param(p, cls.w_c_hat), tape.param(p, cls.w_q_hat));
        let tilde = cls.tilde.map(|(a, b)| (tape.param(p, a), tape.param(p, b)));
        let w = tape.param(p, cls.w);
        let c_tilde = glimpses.get(1).map_or(glimpses[0].context, |g| g.context);
        let fc = rng.map(|r| (r, c.dropout_fc));
        let (logits, pooled) = classify(tape, glimpses[0].context, c_tilde, q, hat, tilde, w, fc)?;
        Ok(ForwardPass {
            features: x,
            question: q,
            glimpses,
            pooled,
            logits,
        })
    }

    fn run_head<'p>(&'p self, tape: &mut Tape<'p>, head: &HeadParams, x: Var, q: Var) -> Result<Vec<GlimpseVars>> {
        let p = &self.params;
        let (u_x, u_q, u) = (tape.param(p, head.u_x), tape.param(p, head.u_q), tape.param(p, head.u));
        let unary = unary_potentials(tape, x, q, u_x, u_q, u)?;
        let mut out = Vec::with_capacity(head.emits.len());
        for &kind in &head.emits {
            let g = match kind {
                GlimpseKind::Softmax => {
                    let (context, map) = softmax_attention(tape, x, unary.scores)?;
                    GlimpseVars {
                        kind,
                        map,
                        unary: unary.psi_one,
                        trajectory: vec![],
                        context,
                        mass: None,
                    }
                }
                GlimpseKind::Sigmoid => {
                    let (context, map) = sigmoid_attention(tape, x, unary.psi_one)?;
                    GlimpseVars {
                        kind,
                        map,
                        unary: unary.psi_one,
                        trajectory: vec![],
                        context,
                        mass: None,
                    }
                }
                GlimpseKind::MeanField | GlimpseKind::Lbp => {
                    let pw = head.pairwise.expect("structured head without pairwise parameters");
                    let (v_y, v_q, v) = (tape.param(p, pw.v_y), tape.param(p, pw.v_q), tape.param(p, pw.v));
                    let inf = self.config.inference();
                    let trajectory = if kind == GlimpseKind::MeanField {
                        let lp = pairwise_potentials(tape, x, q, &self.graph, v_y, v_q, v, PairwiseMode::MeanFieldLog)?;
                        mean_field_on_tape(tape, &self.graph, unary.table, lp, &inf)?
                    } else {
                        let pp = pairwise_potentials(tape, x, q, &self.graph, v_y, v_q, v, PairwiseMode::Lbp)?;
                        vec![lbp_on_tape(tape, &self.graph, unary.table, pp, &inf)?]
                    };
                    let (context, map, s) = structured_context(tape, x, *trajectory.last().unwrap())?;
                    GlimpseVars {
                        kind,
                        map,
                        unary: unary.psi_one,
                        trajectory,
                        context,
                        mass: Some(s),
                    }
                }
            };
            out.push(g);
        }
        Ok(out)
    }

    /// Sidecar config path for a checkpoint.
    pub fn config_path(checkpoint: &Path) -> PathBuf {
        checkpoint.with_extension("cfg")
    }

    /// Writes the checkpoint and its sidecar model config.
    pub fn save(&self, checkpoint: &Path, adam: Option<&AdamState>) -> Result<()> {
        crate::checkpoint::save(checkpoint, &self.params, adam)?;
        std::fs::write(Self::config_path(checkpoint), self.config.to_kv().to_text())?;
        Ok(())
    }

    /// Rebuilds a model from the checkpoint's sidecar config overlaid with `overrides`,
    /// then loads the stored parameters.
    pub fn load(checkpoint: &Path, overrides: &KeyValues) -> Result<Model> {
        let mut kv = match std::fs::read_to_string(Self::config_path(checkpoint)) {
            Ok(text) => KeyValues::parse(&text)?,
            Err(_) => KeyValues::new(),
        };
        kv.merge(overrides);
        let mut model = Model::new(ModelConfig::from_kv(&kv)?, 0)?;
        let records = crate::checkpoint::read_records(checkpoint)?;
        crate::checkpoint::load_into(&records, &mut model.params)?;
        Ok(model)
    }

    pub fn set_params(&mut self, values: &[Tensor]) {
        for (dst, src) in self.params.values_mut().iter_mut().zip(values) {
            *dst = src.clone();
        }
    }

    /// Evaluation-mode prediction.
    pub fn predict(&self, image: &Tensor, tokens: &[u16]) -> Result<Prediction> {
        let mut tape = Tape::new();
        let pass = self.forward(&mut tape, image, tokens, None)?;
        let artifacts = ForwardArtifacts::capture(&tape, &pass);
        let mut probabilities = artifacts.logits.clone();
        crate::autodiff::softmax_in_place(&mut probabilities);
        Ok(Prediction {
            answer: argmax(&artifacts.logits),
            probabilities,
            artifacts,
        })
    }

    /// Cross-entropy loss for one sample; adds its parameter gradients (scaled by
    /// `weight`) into `acc`. Returns `(loss, predicted answer)`.
    pub fn accumulate_gradients(
        &self,
        image: &Tensor,
        tokens: &[u16],
        answer: usize,
        rng: Option<&mut Rng>,
        weight: f64,
        acc: &mut [Tensor],
    ) -> Result<(f64, usize)> {
        let mut tape = Tape::new();
        let pass = self.forward(&mut tape, image, tokens, rng)?;
        let predicted = argmax(tape.value(pass.logits).data());
        let loss = tape.cross_entropy(pass.logits, answer)?;
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::Numerical(format!("loss {value}")));
        }
        let grads = tape.backward_with(loss, Tensor::scalar(weight));
        grads.accumulate_params(&tape, acc);
        Ok((value, predicted))
    }

    /// Loss in evaluation mode, for finite-difference checks.
    pub fn loss(&self, image: &Tensor, tokens: &[u16], answer: usize) -> Result<f64> {
        let mut tape = Tape::new();
        let pass = self.forward(&mut tape, image, tokens, None)?;
        let loss = tape.cross_entropy(pass.logits, answer)?;
        Ok(tape.value(loss).data()[0])
    }
}
