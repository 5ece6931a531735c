//! Neural-process model families: CNP, NP, CANP, ANP and the base networks
//! of BNP / BANP.
//!
//! All encoders consume a context as an `m x (d_x + d_y)` matrix of `[x, y]`
//! rows. Mean pooling sums rows in their stored order, so reordering the
//! context changes the result only through floating-point associativity.

use rand::Rng;

use crate::diffcore::{Linear, Mlp, MlpArch, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const SIGMA_FLOOR: f64 = 0.1;
pub const RHO_FLOOR: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Cnp,
    Np,
    Canp,
    Anp,
    Bnp,
    Banp,
}

impl ModelKind {
    pub const ALL: [ModelKind; 6] = [Self::Cnp, Self::Np, Self::Canp, Self::Anp, Self::Bnp, Self::Banp];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cnp" => Ok(Self::Cnp),
            "np" => Ok(Self::Np),
            "canp" => Ok(Self::Canp),
            "anp" => Ok(Self::Anp),
            "bnp" => Ok(Self::Bnp),
            "banp" => Ok(Self::Banp),
            other => Err(Error::Config(format!(
                "unknown model `{other}` (cnp|np|canp|anp|bnp|banp)"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Cnp => "cnp",
            Self::Np => "np",
            Self::Canp => "canp",
            Self::Anp => "anp",
            Self::Bnp => "bnp",
            Self::Banp => "banp",
        }
    }

    pub fn is_attentive(self) -> bool {
        matches!(self, Self::Canp | Self::Anp | Self::Banp)
    }

    pub fn is_latent(self) -> bool {
        matches!(self, Self::Np | Self::Anp)
    }

    pub fn is_bootstrap(self) -> bool {
        matches!(self, Self::Bnp | Self::Banp)
    }

    /// The deterministic model sharing this model's encoder/decoder layout.
    pub fn base(self) -> Self {
        match self {
            Self::Bnp => Self::Cnp,
            Self::Banp => Self::Canp,
            other => other,
        }
    }
}

/// Layer counts and widths.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ArchConfig {
    pub l_pre: usize,
    pub l_post: usize,
    pub l_dec: usize,
    pub l_v: usize,
    pub l_qk: usize,
    pub d_h: usize,
    pub d_z: usize,
    pub n_head: usize,
    pub d_x: usize,
    pub d_y: usize,
}

impl ArchConfig {
    /// 1D-regression settings, with the hidden (and latent) width set to `d_h`.
    pub fn regression_1d(kind: ModelKind, d_h: usize) -> Self {
        let attentive = kind.is_attentive();
        Self {
            l_pre: if attentive { 2 } else { 4 },
            l_post: 2,
            l_dec: 3,
            l_v: 2,
            l_qk: 2,
            d_h,
            d_z: d_h,
            n_head: if attentive { 8.min(d_h).max(1) } else { 1 },
            d_x: 1,
            d_y: 1,
        }
    }

    pub fn validate(&self, kind: ModelKind) -> Result<()> {
        let mut counts = vec![("l_pre", self.l_pre), ("l_post", self.l_post), ("l_dec", self.l_dec)];
        if kind.is_attentive() {
            counts.push(("l_v", self.l_v));
            counts.push(("l_qk", self.l_qk));
        }
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v < 2) {
            return Err(Error::Config(format!("{name} must be at least 2")));
        }
        if kind.is_bootstrap() && self.l_dec < 3 {
            return Err(Error::Config("bootstrap decoders need l_dec >= 3".into()));
        }
        if self.d_h == 0 || self.d_x == 0 || self.d_y == 0 || (kind.is_latent() && self.d_z == 0) {
            return Err(Error::Config("widths must be positive".into()));
        }
        if kind.is_attentive() && (self.n_head == 0 || self.d_h % self.n_head != 0) {
            return Err(Error::Config(format!(
                "d_h = {} not divisible by n_head = {}",
                self.d_h, self.n_head
            )));
        }
        Ok(())
    }
}

/// Scale-and-shift affine parameters of a layer norm.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Affine {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Affine {
    fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::filled(1, d, 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(1, d)),
        }
    }

    fn layer_norm(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let n = tape.layer_norm(x);
        let g = tape.param(self.gain);
        let b = tape.param(self.bias);
        let scaled = tape.mul_row(n, g)?;
        tape.add_row(scaled, b)
    }
}

/// Multi-head attention block with residual connections and two layer norms:
/// `H' = LN(Q' + softmax(Q'K'ᵀ/√d_out)V')`, `out = LN(H' + ReLU(W H'))`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mha {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub ln1: Affine,
    pub ln2: Affine,
    pub n_head: usize,
    pub d_out: usize,
}

impl Mha {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_q: usize,
        d_k: usize,
        d_v: usize,
        d_out: usize,
        n_head: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if n_head == 0 || d_out % n_head != 0 {
            return Err(Error::Config(format!("d_out {d_out} not divisible by {n_head} heads")));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), d_q, d_out, rng),
            k: Linear::new(store, &format!("{name}.k"), d_k, d_out, rng),
            v: Linear::new(store, &format!("{name}.v"), d_v, d_out, rng),
            out: Linear::new(store, &format!("{name}.out"), d_out, d_out, rng),
            ln1: Affine::new(store, &format!("{name}.ln1"), d_out),
            ln2: Affine::new(store, &format!("{name}.ln2"), d_out),
            n_head,
            d_out,
        })
    }

    /// Projected queries `Q'` and the concatenated head outputs `H`, before
    /// the residual connection.
    pub fn attend(&self, tape: &mut Tape<'_>, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
        let [nk, _] = tape.shape(k);
        let [nv, _] = tape.shape(v);
        if nk == 0 || nk != nv {
            return Err(Error::Contract(format!("attention over {nk} keys and {nv} values")));
        }
        let qp = self.q.forward(tape, q)?;
        let kp = self.k.forward(tape, k)?;
        let vp = self.v.forward(tape, v)?;
        let width = self.d_out / self.n_head;
        let inv_sqrt = 1.0 / (self.d_out as f64).sqrt();
        let mut heads = Vec::with_capacity(self.n_head);
        for h in 0..self.n_head {
            let qh = tape.slice_cols(qp, h * width, width)?;
            let kh = tape.slice_cols(kp, h * width, width)?;
            let vh = tape.slice_cols(vp, h * width, width)?;
            let logits = tape.matmul_ext(qh, kh, true)?;
            let logits = tape.scale(logits, inv_sqrt);
            let weights = tape.softmax_rows(logits);
            heads.push(tape.matmul(weights, vh)?);
        }
        let h = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)?
        };
        Ok((qp, h))
    }

    pub fn forward(&self, tape: &mut Tape<'_>, q: Var, k: Var, v: Var) -> Result<Var> {
        let (qp, h) = self.attend(tape, q, k, v)?;
        let res = tape.add(qp, h)?;
        let h1 = self.ln1.layer_norm(tape, res)?;
        let ff = self.out.forward(tape, h1)?;
        let ff = tape.relu(ff);
        let res2 = tape.add(h1, ff)?;
        self.ln2.layer_norm(tape, res2)
    }
}

pub fn multihead_attention(tape: &mut Tape<'_>, mha: &Mha, q: Var, k: Var, v: Var) -> Result<Var> {
    mha.forward(tape, q, k, v)
}

/// `post(mean(pre([x, y])))`, optionally over several stacked contexts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PooledPath {
    pub pre: Mlp,
    pub post: Mlp,
}

impl PooledPath {
    /// `xy` holds `k` contexts of `seg` rows each; returns `k` pooled rows.
    pub fn forward(&self, tape: &mut Tape<'_>, xy: Var, seg: usize) -> Result<Var> {
        let h = self.pre.forward(tape, xy)?;
        let pooled = tape.segment_mean_rows(h, seg)?;
        self.post.forward(tape, pooled)
    }
}

/// `post(mean(SA(ReLU(pre([x, y])))))` for a single context.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SelfAttnPath {
    pub pre: Mlp,
    pub sa: Mha,
    pub post: Mlp,
}

impl SelfAttnPath {
    pub fn forward(&self, tape: &mut Tape<'_>, xy: Var) -> Result<Var> {
        let h = self.pre.forward(tape, xy)?;
        let h = tape.relu(h);
        let h = self.sa.forward(tape, h, h, h)?;
        let pooled = tape.mean_rows(h)?;
        self.post.forward(tape, pooled)
    }
}

/// Cross-attention from target inputs to self-attended context values.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CrossPath {
    pub qk: Mlp,
    pub value: Mlp,
    pub sa: Mha,
    pub cross: Mha,
}

impl CrossPath {
    pub fn forward(&self, tape: &mut Tape<'_>, xc: Var, xy: Var, xt: Var) -> Result<Var> {
        let q = self.qk.forward(tape, xt)?;
        let k = self.qk.forward(tape, xc)?;
        let v = self.value.forward(tape, xy)?;
        let v = self.sa.forward(tape, v, v, v)?;
        self.cross.forward(tape, q, k, v)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DetEncoder {
    Pooled(Vec<PooledPath>),
    Attentive {
        cross: CrossPath,
        pooled: Option<SelfAttnPath>,
    },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LatentEncoder {
    Pooled(PooledPath),
    SelfAttn(SelfAttnPath),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Network {
    pub det: DetEncoder,
    pub latent: Option<LatentEncoder>,
    pub dec: Mlp,
    /// `Linear(2 d_h, d_h)` applied to bootstrap representations.
    pub adapt: Option<Linear>,
}

/// A context representation: one row shared by all targets, or one row per
/// target for attentive encoders.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Representation {
    pub var: Var,
    pub per_target: bool,
}

/// Latent Gaussian `q(z | ·) = N(η, ρ²)` as `1 x d_z` rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LatentStats {
    pub eta: Var,
    pub rho: Var,
}

/// Per-point Gaussian outputs as `rows x d_y` nodes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GaussVars {
    pub mu: Var,
    pub sigma: Var,
}

/// Plain-value Gaussian prediction for a set of points.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPrediction {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl GaussVars {
    pub fn values(&self, tape: &Tape<'_>) -> GaussianPrediction {
        GaussianPrediction {
            mu: tape.value(self.mu).data().to_vec(),
            sigma: tape.value(self.sigma).data().to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub kind: ModelKind,
    pub arch: ArchConfig,
    pub store: ParamStore,
    pub net: Network,
}

fn pooled_path<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    arch: &ArchConfig,
    d_out: usize,
    rng: &mut R,
) -> Result<PooledPath> {
    let d_in = arch.d_x + arch.d_y;
    Ok(PooledPath {
        pre: Mlp::new(
            store,
            &format!("{name}.pre"),
            MlpArch {
                layers: arch.l_pre,
                d_in,
                d_h: arch.d_h,
                d_out: arch.d_h,
            },
            rng,
        )?,
        post: Mlp::new(
            store,
            &format!("{name}.post"),
            MlpArch {
                layers: arch.l_post,
                d_in: arch.d_h,
                d_h: arch.d_h,
                d_out,
            },
            rng,
        )?,
    })
}

fn self_attn_path<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    arch: &ArchConfig,
    d_out: usize,
    rng: &mut R,
) -> Result<SelfAttnPath> {
    let d_in = arch.d_x + arch.d_y;
    let d_h = arch.d_h;
    Ok(SelfAttnPath {
        pre: Mlp::new(
            store,
            &format!("{name}.pre"),
            MlpArch {
                layers: arch.l_pre,
                d_in,
                d_h,
                d_out: d_h,
            },
            rng,
        )?,
        sa: Mha::new(store, &format!("{name}.sa"), d_h, d_h, d_h, d_h, arch.n_head, rng)?,
        post: Mlp::new(
            store,
            &format!("{name}.post"),
            MlpArch {
                layers: arch.l_post,
                d_in: d_h,
                d_h,
                d_out,
            },
            rng,
        )?,
    })
}

fn cross_path<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    arch: &ArchConfig,
    rng: &mut R,
) -> Result<CrossPath> {
    let d_h = arch.d_h;
    Ok(CrossPath {
        qk: Mlp::new(
            store,
            &format!("{name}.qk"),
            MlpArch {
                layers: arch.l_qk,
                d_in: arch.d_x,
                d_h,
                d_out: d_h,
            },
            rng,
        )?,
        value: Mlp::new(
            store,
            &format!("{name}.value"),
            MlpArch {
                layers: arch.l_v,
                d_in: arch.d_x + arch.d_y,
                d_h,
                d_out: d_h,
            },
            rng,
        )?,
        sa: Mha::new(store, &format!("{name}.sa"), d_h, d_h, d_h, d_h, arch.n_head, rng)?,
        cross: Mha::new(store, &format!("{name}.cross"), d_h, d_h, d_h, d_h, arch.n_head, rng)?,
    })
}

impl Model {
    /// Freshly initialised model; weights `U(±1/√fan_in)`, zero biases and a
    /// zero adaptation layer.
    pub fn new<R: Rng + ?Sized>(kind: ModelKind, arch: ArchConfig, rng: &mut R) -> Result<Self> {
        arch.validate(kind)?;
        let mut store = ParamStore::new();
        let d_h = arch.d_h;
        let det = match kind {
            ModelKind::Cnp | ModelKind::Bnp => DetEncoder::Pooled(vec![
                pooled_path(&mut store, "enc1", &arch, d_h, rng)?,
                pooled_path(&mut store, "enc2", &arch, d_h, rng)?,
            ]),
            ModelKind::Np => DetEncoder::Pooled(vec![pooled_path(&mut store, "denc", &arch, d_h, rng)?]),
            ModelKind::Canp | ModelKind::Banp => DetEncoder::Attentive {
                cross: cross_path(&mut store, "enc1", &arch, rng)?,
                pooled: Some(self_attn_path(&mut store, "enc2", &arch, d_h, rng)?),
            },
            ModelKind::Anp => DetEncoder::Attentive {
                cross: cross_path(&mut store, "denc", &arch, rng)?,
                pooled: None,
            },
        };
        let latent = match kind {
            ModelKind::Np => Some(LatentEncoder::Pooled(pooled_path(
                &mut store,
                "lenc",
                &arch,
                2 * arch.d_z,
                rng,
            )?)),
            ModelKind::Anp => Some(LatentEncoder::SelfAttn(self_attn_path(
                &mut store,
                "lenc",
                &arch,
                2 * arch.d_z,
                rng,
            )?)),
            _ => None,
        };
        let rep = Self::rep_width(kind, &arch);
        let dec = Mlp::new(
            &mut store,
            "dec",
            MlpArch {
                layers: arch.l_dec,
                d_in: rep + arch.d_x,
                d_h,
                d_out: 2 * arch.d_y,
            },
            rng,
        )?;
        let adapt = kind
            .is_bootstrap()
            .then(|| Linear::zeros(&mut store, "adapt", 2 * d_h, d_h));
        Ok(Self {
            kind,
            arch,
            store,
            net: Network {
                det,
                latent,
                dec,
                adapt,
            },
        })
    }

    /// Rebuilds the network layout and installs `store`, checking that every
    /// parameter name and shape matches.
    pub fn with_store(kind: ModelKind, arch: ArchConfig, store: ParamStore) -> Result<Self> {
        let mut rng = rand_chacha::ChaCha8Rng::from_seed_u64(0);
        let mut model = Self::new(kind, arch, &mut rng)?;
        if model.store.names() != store.names() {
            return Err(Error::Checkpoint(format!(
                "parameter layout does not match a {} model with this architecture",
                kind.as_str()
            )));
        }
        for id in model.store.ids() {
            if model.store.value(id).shape() != store.value(id).shape() {
                return Err(Error::Checkpoint(format!("shape mismatch for `{}`", store.name(id))));
            }
        }
        model.store = store;
        Ok(model)
    }

    /// Width of the deterministic representation fed to the decoder, plus the
    /// latent width for latent models.
    pub fn rep_width(kind: ModelKind, arch: &ArchConfig) -> usize {
        match kind {
            ModelKind::Cnp | ModelKind::Bnp | ModelKind::Canp | ModelKind::Banp => 2 * arch.d_h,
            ModelKind::Np | ModelKind::Anp => arch.d_h + arch.d_z,
        }
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// `[x, y]` rows.
    pub fn pairs(&self, tape: &mut Tape<'_>, x: Var, y: Var) -> Result<Var> {
        tape.concat_cols(&[x, y])
    }

    /// Deterministic context representation.
    ///
    /// For pooled encoders `x`/`y` may hold `k` stacked contexts of `seg` rows
    /// each, giving `k` representation rows. Attentive encoders need a single
    /// context (`seg` equal to the row count) and the target inputs `xt`.
    pub fn encode_det(
        &self,
        tape: &mut Tape<'_>,
        x: Var,
        y: Var,
        seg: usize,
        xt: Option<Var>,
    ) -> Result<Representation> {
        let [rows, _] = tape.shape(x);
        if rows == 0 || seg == 0 {
            return Err(Error::Contract("empty context".into()));
        }
        let xy = self.pairs(tape, x, y)?;
        match &self.net.det {
            DetEncoder::Pooled(paths) => {
                let mut outs = Vec::with_capacity(paths.len());
                for p in paths {
                    outs.push(p.forward(tape, xy, seg)?);
                }
                let var = if outs.len() == 1 {
                    outs[0]
                } else {
                    tape.concat_cols(&outs)?
                };
                Ok(Representation { var, per_target: false })
            }
            DetEncoder::Attentive { cross, pooled } => {
                if seg != rows {
                    return Err(Error::Contract("attentive encoders take one context at a time".into()));
                }
                let xt = xt.ok_or_else(|| Error::Contract("attentive encoders need target inputs".into()))?;
                let [nt, _] = tape.shape(xt);
                if nt == 0 {
                    return Err(Error::Contract("no target points".into()));
                }
                let phi1 = cross.forward(tape, x, xy, xt)?;
                let var = match pooled {
                    Some(p) => {
                        let phi2 = p.forward(tape, xy)?;
                        let phi2 = tape.repeat_rows(phi2, nt);
                        tape.concat_cols(&[phi1, phi2])?
                    }
                    None => phi1,
                };
                Ok(Representation { var, per_target: true })
            }
        }
    }

    /// `q(z | x, y)` with `ρ = 0.1 + 0.9·sigmoid(ρ')`.
    pub fn latent_encode(&self, tape: &mut Tape<'_>, x: Var, y: Var) -> Result<LatentStats> {
        let [rows, _] = tape.shape(x);
        if rows == 0 {
            return Err(Error::Contract("empty context".into()));
        }
        let xy = self.pairs(tape, x, y)?;
        let raw = match &self.net.latent {
            Some(LatentEncoder::Pooled(p)) => p.forward(tape, xy, rows)?,
            Some(LatentEncoder::SelfAttn(p)) => p.forward(tape, xy)?,
            None => return Err(Error::Contract(format!("{} has no latent path", self.kind.as_str()))),
        };
        let dz = self.arch.d_z;
        let eta = tape.slice_cols(raw, 0, dz)?;
        let rho_raw = tape.slice_cols(raw, dz, dz)?;
        Ok(LatentStats {
            eta,
            rho: squash_rho(tape, rho_raw),
        })
    }

    /// Gaussian output of the decoder for inputs `rep ⊕ xt`, where `rep` has
    /// either one row (broadcast to every target) or one row per target.
    pub fn decode(&self, tape: &mut Tape<'_>, rep: Var, xt: Var) -> Result<GaussVars> {
        let input = self.decoder_input(tape, rep, xt)?;
        let raw = self.net.dec.forward(tape, input)?;
        self.split_output(tape, raw)
    }

    pub(crate) fn decoder_input(&self, tape: &mut Tape<'_>, rep: Var, xt: Var) -> Result<Var> {
        let [nr, _] = tape.shape(rep);
        let [nt, _] = tape.shape(xt);
        let rep = if nr == nt {
            rep
        } else if nr == 1 {
            tape.repeat_rows(rep, nt)
        } else {
            return Err(Error::Shape(format!("{nr} representation rows for {nt} targets")));
        };
        tape.concat_cols(&[rep, xt])
    }

    /// Splits `[μ, σ']` and applies `σ = 0.1 + 0.9·softplus(σ')`.
    pub(crate) fn split_output(&self, tape: &mut Tape<'_>, raw: Var) -> Result<GaussVars> {
        let dy = self.arch.d_y;
        let mu = tape.slice_cols(raw, 0, dy)?;
        let s = tape.slice_cols(raw, dy, dy)?;
        Ok(GaussVars {
            mu,
            sigma: squash_sigma(tape, s),
        })
    }

    /// Base prediction of a deterministic model (CNP, CANP, or the base path
    /// of BNP / BANP) at `xt` given one context.
    pub fn predict_det(&self, tape: &mut Tape<'_>, xc: Var, yc: Var, xt: Var) -> Result<GaussVars> {
        if self.kind.is_latent() {
            return Err(Error::Contract(format!("{} needs a latent sample", self.kind.as_str())));
        }
        let [nc, _] = tape.shape(xc);
        let rep = self.encode_det(tape, xc, yc, nc, Some(xt))?;
        self.decode(tape, rep.var, xt)
    }

    /// Decodes `k` latent samples (rows of `z`) at every target; returns
    /// `k·nt` rows ordered component-major.
    pub fn predict_latent(&self, tape: &mut Tape<'_>, xc: Var, yc: Var, z: Var, xt: Var) -> Result<GaussVars> {
        let [nc, _] = tape.shape(xc);
        let [nt, _] = tape.shape(xt);
        let [k, _] = tape.shape(z);
        let rep = self.encode_det(tape, xc, yc, nc, Some(xt))?;
        let phi = if rep.per_target {
            tape.tile_rows(rep.var, k)
        } else {
            tape.repeat_rows(rep.var, k * nt)
        };
        let zr = tape.repeat_rows(z, nt);
        let xr = tape.tile_rows(xt, k);
        let input = tape.concat_cols(&[phi, zr, xr])?;
        let raw = self.net.dec.forward(tape, input)?;
        self.split_output(tape, raw)
    }
}

pub(crate) fn squash_sigma(tape: &mut Tape<'_>, raw: Var) -> Var {
    let s = tape.softplus(raw);
    let s = tape.scale(s, 1.0 - SIGMA_FLOOR);
    tape.add_scalar(s, SIGMA_FLOOR)
}

pub(crate) fn squash_rho(tape: &mut Tape<'_>, raw: Var) -> Var {
    let s = tape.sigmoid(raw);
    let s = tape.scale(s, 1.0 - RHO_FLOOR);
    tape.add_scalar(s, RHO_FLOOR)
}

/// Per-row Gaussian log-density `log N(y | μ, σ²)`, same shape as `y`.
pub fn gauss_log_pdf(tape: &mut Tape<'_>, y: Var, mu: Var, sigma: Var) -> Result<Var> {
    let d = tape.sub(y, mu)?;
    let z = tape.div(d, sigma)?;
    let z2 = tape.square(z);
    let quad = tape.scale(z2, -0.5);
    let ls = tape.log(sigma);
    let out = tape.sub(quad, ls)?;
    Ok(tape.add_scalar(out, -HALF_LN_2PI))
}

pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Scalar Gaussian log-density.
pub fn gauss_log_pdf_value(y: f64, mu: f64, sigma: f64) -> f64 {
    let z = (y - mu) / sigma;
    -0.5 * z * z - sigma.ln() - HALF_LN_2PI
}

/// Column tensor from a slice, placed on the tape as a constant.
pub fn column(tape: &mut Tape<'_>, values: &[f64]) -> Var {
    tape.constant(Tensor::column(values))
}

trait SeedU64 {
    fn from_seed_u64(seed: u64) -> Self;
}

impl SeedU64 for rand_chacha::ChaCha8Rng {
    fn from_seed_u64(seed: u64) -> Self {
        use rand::SeedableRng;
        rand_chacha::ChaCha8Rng::seed_from_u64(seed)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn tiny(kind: ModelKind) -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut arch = ArchConfig::regression_1d(kind, 8);
        arch.n_head = 2;
        Model::new(kind, arch, &mut rng).unwrap()
    }

    fn ctx(n: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let y = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        (x, y)
    }

    fn encode(model: &Model, x: &[f64], y: &[f64], xt: &[f64]) -> Tensor {
        let mut tape = Tape::inference(&model.store);
        let (xv, yv, tv) = (column(&mut tape, x), column(&mut tape, y), column(&mut tape, xt));
        let rep = model.encode_det(&mut tape, xv, yv, x.len(), Some(tv)).unwrap();
        tape.value(rep.var).clone()
    }

    fn assert_close(a: &Tensor, b: &Tensor, tol: f64) {
        assert_eq!(a.shape(), b.shape());
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= tol, "{x} vs {y}");
        }
    }

    #[test]
    fn parse_round_trip() {
        for k in ModelKind::ALL {
            assert_eq!(ModelKind::parse(k.as_str()).unwrap(), k);
        }
        assert!(ModelKind::parse("gp").is_err());
    }

    #[test]
    fn encoders_are_permutation_invariant() {
        let (x, y) = ctx(9, 1);
        let xt = [0.1, -0.5, 1.7];
        let perm = [4, 0, 8, 2, 7, 1, 3, 6, 5];
        let (px, py): (Vec<f64>, Vec<f64>) = perm.iter().map(|&i| (x[i], y[i])).unzip();
        for kind in ModelKind::ALL {
            let model = tiny(kind);
            let a = encode(&model, &x, &y, &xt);
            let b = encode(&model, &px, &py, &xt);
            assert_close(&a, &b, 1e-12);
        }
    }

    #[test]
    fn duplicated_context_gives_same_pooled_rep() {
        let (x, y) = ctx(5, 2);
        let x2: Vec<f64> = x.iter().chain(&x).copied().collect();
        let y2: Vec<f64> = y.iter().chain(&y).copied().collect();
        let model = tiny(ModelKind::Cnp);
        assert_close(
            &encode(&model, &x, &y, &[0.0]),
            &encode(&model, &x2, &y2, &[0.0]),
            1e-12,
        );
    }

    #[test]
    fn single_pair_rep_is_post_of_pre() {
        let model = tiny(ModelKind::Cnp);
        let rep = encode(&model, &[0.3], &[-0.2], &[0.0]);
        let DetEncoder::Pooled(paths) = &model.net.det else {
            unreachable!()
        };
        let mut tape = Tape::inference(&model.store);
        let xy = tape.constant(Tensor::row(&[0.3, -0.2]));
        let mut parts = vec![];
        for p in paths {
            let h = p.pre.forward(&mut tape, xy).unwrap();
            parts.push(p.post.forward(&mut tape, h).unwrap());
        }
        let cat = tape.concat_cols(&parts).unwrap();
        assert_eq!(tape.value(cat), &rep);
    }

    #[test]
    fn squashing_values() {
        let store = ParamStore::new();
        let mut tape = Tape::inference(&store);
        let raw = tape.constant(Tensor::row(&[0.0, -800.0, 5.0]));
        let s = squash_sigma(&mut tape, raw);
        let r = squash_rho(&mut tape, raw);
        let s = tape.value(s).data().to_vec();
        let r = tape.value(r).data().to_vec();
        assert!((s[0] - (0.1 + 0.9 * 2f64.ln())).abs() < 1e-15);
        assert!((s[0] - 0.72384).abs() < 1e-5);
        assert!((s[1] - 0.1).abs() < 1e-15);
        assert!((r[0] - 0.55).abs() < 1e-15);
        assert!((r[1] - 0.1).abs() < 1e-15);
        assert!(r[2] < 1.0);
    }

    #[test]
    fn single_key_attention_copies_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let mha = Mha::new(&mut store, "m", 3, 2, 4, 6, 2, &mut rng).unwrap();
        let mut tape = Tape::inference(&store);
        let q = tape.constant(Tensor::from_fn(5, 3, |r, c| (r as f64) * 0.3 - c as f64));
        let k = tape.constant(Tensor::row(&[0.2, -0.4]));
        let v = tape.constant(Tensor::row(&[1.0, 2.0, -1.0, 0.5]));
        let (_, h) = mha.attend(&mut tape, q, k, v).unwrap();
        let vp = mha.v.forward(&mut tape, v).unwrap();
        let vrow = tape.value(vp).data().to_vec();
        let h = tape.value(h);
        for r in 0..5 {
            for c in 0..6 {
                assert!((h.get(r, c) - vrow[c]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn attention_needs_keys() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let mha = Mha::new(&mut store, "m", 2, 2, 2, 4, 2, &mut rng).unwrap();
        let mut tape = Tape::inference(&store);
        let q = tape.constant(Tensor::zeros(1, 2));
        let e = tape.constant(Tensor::zeros(0, 2));
        assert!(mha.forward(&mut tape, q, e, e).is_err());
    }

    #[test]
    fn head_count_must_divide_width() {
        let arch = ArchConfig {
            n_head: 3,
            ..ArchConfig::regression_1d(ModelKind::Canp, 8)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(Model::new(ModelKind::Canp, arch, &mut rng).is_err());
        assert!(Model::new(ModelKind::Cnp, arch, &mut rng).is_ok());
    }

    #[test]
    fn with_store_rejects_other_layouts() {
        let cnp = tiny(ModelKind::Cnp);
        let np = tiny(ModelKind::Np);
        assert!(Model::with_store(ModelKind::Cnp, cnp.arch, cnp.store.clone()).is_ok());
        assert!(Model::with_store(ModelKind::Cnp, cnp.arch, np.store.clone()).is_err());
    }

    #[test]
    fn empty_context_is_rejected() {
        let model = tiny(ModelKind::Cnp);
        let mut tape = Tape::inference(&model.store);
        let e = tape.constant(Tensor::zeros(0, 1));
        assert!(model.encode_det(&mut tape, e, e, 1, None).is_err());
    }
}
