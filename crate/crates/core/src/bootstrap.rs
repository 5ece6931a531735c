//! Paired and residual bootstrap of contexts, the adaptation decoder and the
//! equal-weight ensemble predictive.
//!
//! One bootstrap draw consists of two `k x |c|` index maps: the paired map
//! picks which context pairs feed the `j`-th base encoding, the residual map
//! picks which standardized residual of component `j` is re-attached to each
//! context input. Both maps are sampled up front so that every evaluation
//! path (batched, per-component, value-level) consumes identical randomness.
//!
//! Rows of stacked per-component tensors are component-major: row `j·m + i`
//! holds point `i` of component `j`.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::npmodels::{column, gauss_log_pdf_value, GaussVars, Model, ModelKind};

pub const K_TRAIN: usize = 4;
pub const K_TEST: usize = 50;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct VariantFlags {
    pub naive_bootstrap: bool,
    pub skip_paired: bool,
    pub skip_adaptation: bool,
    pub skip_base_loss: bool,
}

impl VariantFlags {
    pub const NAMES: [&'static str; 5] = ["full", "naive", "no-paired", "no-adapt", "no-baseloss"];

    pub fn parse(s: &str) -> Result<Self> {
        let mut f = Self::default();
        match s {
            "full" => {}
            "naive" => f.naive_bootstrap = true,
            "no-paired" => f.skip_paired = true,
            "no-adapt" => f.skip_adaptation = true,
            "no-baseloss" => f.skip_base_loss = true,
            other => {
                return Err(Error::Config(format!(
                    "unknown variant `{other}` (full|naive|no-paired|no-adapt|no-baseloss)"
                )))
            }
        }
        Ok(f)
    }

    pub fn name(&self) -> String {
        if self.naive_bootstrap {
            return "naive".into();
        }
        let mut parts = vec![];
        if self.skip_paired {
            parts.push("no-paired");
        }
        if self.skip_adaptation {
            parts.push("no-adapt");
        }
        if self.skip_base_loss {
            parts.push("no-baseloss");
        }
        if parts.is_empty() {
            "full".into()
        } else {
            parts.join("+")
        }
    }

    pub fn is_full(&self) -> bool {
        *self == Self::default()
    }

    /// Checks the flags against the model they will drive. The naive variant
    /// runs on any deterministic model and excludes the other flags; the
    /// remaining flags need a bootstrap model.
    pub fn validate(&self, kind: ModelKind) -> Result<()> {
        if self.naive_bootstrap {
            if self.skip_paired || self.skip_adaptation || self.skip_base_loss {
                return Err(Error::Config(
                    "the naive variant cannot be combined with other flags".into(),
                ));
            }
            if kind.is_latent() {
                return Err(Error::Config(format!(
                    "the naive variant needs a deterministic model, not {}",
                    kind.as_str()
                )));
            }
            return Ok(());
        }
        if !self.is_full() && !kind.is_bootstrap() {
            return Err(Error::Config(format!(
                "variant `{}` applies to bnp/banp only",
                self.name()
            )));
        }
        Ok(())
    }
}

/// Paired and residual index maps for `k` components over a context of `c`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BootstrapDraws {
    pub paired: Vec<Vec<usize>>,
    pub residual: Vec<Vec<usize>>,
}

impl BootstrapDraws {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, c: usize, k: usize) -> Result<Self> {
        if c == 0 || k == 0 {
            return Err(Error::Contract(format!(
                "bootstrap needs |c| >= 1 and k >= 1 (got {c}, {k})"
            )));
        }
        let draw = |rng: &mut R| -> Vec<Vec<usize>> {
            (0..k)
                .map(|_| (0..c).map(|_| rng.random_range(0..c)).collect())
                .collect()
        };
        let paired = draw(rng);
        let residual = draw(rng);
        Ok(Self { paired, residual })
    }

    /// Identity maps: every component sees the original context and its own
    /// residuals in place.
    pub fn identity(c: usize, k: usize) -> Self {
        let id: Vec<usize> = (0..c).collect();
        Self {
            paired: vec![id.clone(); k],
            residual: vec![id; k],
        }
    }

    pub fn k(&self) -> usize {
        self.paired.len()
    }

    pub fn c(&self) -> usize {
        self.paired.first().map_or(0, Vec::len)
    }

    fn validate(&self, c: usize) -> Result<()> {
        let ok = self.k() > 0
            && self.residual.len() == self.k()
            && self
                .paired
                .iter()
                .chain(&self.residual)
                .all(|m| m.len() == c && m.iter().all(|&i| i < c));
        if ok {
            Ok(())
        } else {
            Err(Error::Contract(format!("bootstrap maps do not fit a context of {c}")))
        }
    }
}

/// `k` resampled contexts, each of `|c|` pairs drawn uniformly with
/// replacement.
pub fn paired_bootstrap<R: Rng + ?Sized>(
    rng: &mut R,
    xc: &[f64],
    yc: &[f64],
    k: usize,
) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    if xc.len() != yc.len() {
        return Err(Error::Shape(format!("{} inputs, {} outputs", xc.len(), yc.len())));
    }
    let c = xc.len();
    if c == 0 || k == 0 {
        return Err(Error::Contract(format!(
            "bootstrap needs |c| >= 1 and k >= 1 (got {c}, {k})"
        )));
    }
    Ok((0..k)
        .map(|_| {
            let idx: Vec<usize> = (0..c).map(|_| rng.random_range(0..c)).collect();
            (
                idx.iter().map(|&i| xc[i]).collect(),
                idx.iter().map(|&i| yc[i]).collect(),
            )
        })
        .collect())
}

/// Standardized residuals of the full context under each resampled context.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualSet {
    pub xc: Vec<f64>,
    pub eps: Vec<Vec<f64>>,
    pub mu: Vec<Vec<f64>>,
    pub sigma: Vec<Vec<f64>>,
}

impl ResidualSet {
    pub fn k(&self) -> usize {
        self.eps.len()
    }
}

/// Decodes the base model at every original context input, conditioned on
/// each resampled context, and standardizes the observed outputs.
pub fn compute_residuals(
    model: &Model,
    xc: &[f64],
    yc: &[f64],
    resampled: &[(Vec<f64>, Vec<f64>)],
) -> Result<ResidualSet> {
    if model.kind.is_latent() {
        return Err(Error::Contract("residuals need a deterministic base model".into()));
    }
    let mut set = ResidualSet {
        xc: xc.to_vec(),
        eps: vec![],
        mu: vec![],
        sigma: vec![],
    };
    for (bx, by) in resampled {
        let mut tape = Tape::inference(&model.store);
        let bx = column(&mut tape, bx);
        let by = column(&mut tape, by);
        let x = column(&mut tape, xc);
        let pred = model.predict_det(&mut tape, bx, by, x)?.values(&tape);
        let eps = yc
            .iter()
            .zip(&pred.mu)
            .zip(&pred.sigma)
            .map(|((y, m), s)| (y - m) / s)
            .collect();
        set.eps.push(eps);
        set.mu.push(pred.mu);
        set.sigma.push(pred.sigma);
    }
    Ok(set)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BootstrapContext {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub j: usize,
    pub map: Vec<usize>,
}

/// Resamples each component's residuals within that component and rebuilds
/// labels `ỹ_i = μ̂_i + σ̂_i ε̃_i` at the original inputs.
pub fn make_bootstrap_context<R: Rng + ?Sized>(rng: &mut R, residuals: &ResidualSet) -> Vec<BootstrapContext> {
    let c = residuals.xc.len();
    let maps: Vec<Vec<usize>> = (0..residuals.k())
        .map(|_| (0..c).map(|_| rng.random_range(0..c)).collect())
        .collect();
    reconstruct(residuals, &maps)
}

/// Bootstrap contexts for explicit residual maps.
pub fn reconstruct(residuals: &ResidualSet, maps: &[Vec<usize>]) -> Vec<BootstrapContext> {
    maps.iter()
        .enumerate()
        .map(|(j, map)| {
            let (mu, sigma, eps) = (&residuals.mu[j], &residuals.sigma[j], &residuals.eps[j]);
            BootstrapContext {
                x: residuals.xc.clone(),
                y: map
                    .iter()
                    .enumerate()
                    .map(|(i, &m)| mu[i] + sigma[i] * eps[m])
                    .collect(),
                j,
                map: map.clone(),
            }
        })
        .collect()
}

/// Tape nodes produced by one pass of the bootstrap pipeline.
#[derive(Clone, Copy, Debug)]
pub struct BnpOutput {
    /// `k·n_t` component-major rows.
    pub components: GaussVars,
    /// Base prediction from the full context, `n_t` rows.
    pub base: GaussVars,
    pub k: usize,
}

/// Options that do not change the model but how gradients flow.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PipelineOptions {
    pub flags: VariantFlags,
    /// Treat reconstructed labels as constants.
    pub detach: bool,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            flags: VariantFlags::default(),
            detach: true,
        }
    }
}

fn index_rows(start: usize, len: usize) -> Vec<usize> {
    (start..start + len).collect()
}

/// Reconstructed labels `ỹ` for every component, `k·|c|` rows.
fn reconstructed_labels(
    model: &Model,
    tape: &mut Tape<'_>,
    xc: Var,
    yc: Var,
    draws: &BootstrapDraws,
    skip_paired: bool,
) -> Result<Var> {
    let c = draws.c();
    let k = draws.k();
    let (mu, sigma, ys) = if skip_paired {
        let p = model.predict_det(tape, xc, yc, xc)?;
        (p.mu, p.sigma, yc)
    } else if model.kind.is_attentive() {
        let (mut mus, mut sigmas) = (Vec::with_capacity(k), Vec::with_capacity(k));
        for map in &draws.paired {
            let bx = tape.gather_rows(xc, map)?;
            let by = tape.gather_rows(yc, map)?;
            let p = model.predict_det(tape, bx, by, xc)?;
            mus.push(p.mu);
            sigmas.push(p.sigma);
        }
        let ys = tape.tile_rows(yc, k);
        (tape.concat_rows(&mus)?, tape.concat_rows(&sigmas)?, ys)
    } else {
        let idx: Vec<usize> = draws.paired.concat();
        let bx = tape.gather_rows(xc, &idx)?;
        let by = tape.gather_rows(yc, &idx)?;
        let rep = model.encode_det(tape, bx, by, c, None)?;
        let phi = tape.repeat_rows(rep.var, c);
        let xs = tape.tile_rows(xc, k);
        let p = model.decode(tape, phi, xs)?;
        let ys = tape.tile_rows(yc, k);
        (p.mu, p.sigma, ys)
    };
    let diff = tape.sub(ys, mu)?;
    let eps = tape.div(diff, sigma)?;
    let mut idx = Vec::with_capacity(k * c);
    for (j, map) in draws.residual.iter().enumerate() {
        let offset = if skip_paired { 0 } else { j * c };
        idx.extend(map.iter().map(|&m| offset + m));
    }
    let eps_t = tape.gather_rows(eps, &idx)?;
    let (mu, sigma) = if skip_paired {
        (tape.tile_rows(mu, k), tape.tile_rows(sigma, k))
    } else {
        (mu, sigma)
    };
    let scaled = tape.mul(sigma, eps_t)?;
    tape.add(mu, scaled)
}

/// Runs the bootstrap pipeline for one task and returns the `k` ensemble
/// components at `xt` together with the base prediction.
pub fn bnp_forward(
    model: &Model,
    tape: &mut Tape<'_>,
    xc: &[f64],
    yc: &[f64],
    xt: &[f64],
    draws: &BootstrapDraws,
    opts: PipelineOptions,
) -> Result<BnpOutput> {
    let flags = opts.flags;
    flags.validate(model.kind)?;
    if xc.len() != yc.len() {
        return Err(Error::Shape(format!("{} inputs, {} outputs", xc.len(), yc.len())));
    }
    if xt.is_empty() {
        return Err(Error::Contract("no target points".into()));
    }
    let c = xc.len();
    draws.validate(c)?;
    let k = draws.k();
    let nt = xt.len();
    let skip_paired = flags.skip_paired || flags.naive_bootstrap;
    let skip_adaptation = flags.skip_adaptation || flags.naive_bootstrap;

    let xc_v = column(tape, xc);
    let yc_v = column(tape, yc);
    let xt_v = column(tape, xt);
    let y_tilde = if opts.detach {
        let mut side = Tape::inference(tape.store());
        let sx = column(&mut side, xc);
        let sy = column(&mut side, yc);
        let yt = reconstructed_labels(model, &mut side, sx, sy, draws, skip_paired)?;
        tape.constant(side.value(yt).clone())
    } else {
        reconstructed_labels(model, tape, xc_v, yc_v, draws, skip_paired)?
    };

    // bootstrap representations, one row per component or per (component, target)
    let phi_t = if model.kind.is_attentive() {
        let mut reps = Vec::with_capacity(k);
        for j in 0..k {
            let yj = tape.gather_rows(y_tilde, &index_rows(j * c, c))?;
            reps.push(model.encode_det(tape, xc_v, yj, c, Some(xt_v))?.var);
        }
        tape.concat_rows(&reps)?
    } else {
        let xs = tape.tile_rows(xc_v, k);
        let rep = model.encode_det(tape, xs, y_tilde, c, None)?;
        tape.repeat_rows(rep.var, nt)
    };

    let rep = model.encode_det(tape, xc_v, yc_v, c, Some(xt_v))?;
    let input = model.decoder_input(tape, rep.var, xt_v)?;
    let dec = &model.net.dec;
    let h1 = dec.layers[0].forward(tape, input)?;
    let a1 = tape.relu(h1);
    let base_raw = dec.forward_from(tape, a1, 1)?;
    let base = model.split_output(tape, base_raw)?;

    let xs = tape.tile_rows(xt_v, k);
    let comp_raw = if skip_adaptation {
        let input = model.decoder_input(tape, phi_t, xs)?;
        dec.forward(tape, input)?
    } else {
        let adapt = model
            .net
            .adapt
            .as_ref()
            .ok_or_else(|| Error::Contract("model has no adaptation layer".into()))?;
        let h2 = adapt.forward(tape, phi_t)?;
        let h1s = tape.tile_rows(h1, k);
        let h = tape.add(h1s, h2)?;
        let h = tape.relu(h);
        dec.forward_from(tape, h, 1)?
    };
    let components = model.split_output(tape, comp_raw)?;
    Ok(BnpOutput { components, base, k })
}

/// Ensemble predictive at a set of points: `k` Gaussian components per point,
/// stored component-major.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsemblePrediction {
    pub k: usize,
    pub n: usize,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl EnsemblePrediction {
    pub fn new(k: usize, n: usize, mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if k == 0 || mu.len() != k * n || sigma.len() != k * n {
            return Err(Error::Shape(format!(
                "ensemble of {k} x {n} with {} means and {} scales",
                mu.len(),
                sigma.len()
            )));
        }
        Ok(Self { k, n, mu, sigma })
    }

    pub fn single(mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        let n = mu.len();
        Self::new(1, n, mu, sigma)
    }

    pub fn component(&self, j: usize) -> (&[f64], &[f64]) {
        let r = j * self.n..(j + 1) * self.n;
        (&self.mu[r.clone()], &self.sigma[r])
    }

    /// Points `[start, end)` of every component.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        let mut mu = Vec::with_capacity(self.k * (end - start));
        let mut sigma = Vec::with_capacity(mu.capacity());
        for j in 0..self.k {
            let (m, s) = self.component(j);
            mu.extend_from_slice(&m[start..end]);
            sigma.extend_from_slice(&s[start..end]);
        }
        Self {
            k: self.k,
            n: end - start,
            mu,
            sigma,
        }
    }

    /// Concatenates predictions over disjoint point sets with the same `k`.
    pub fn concat(parts: &[Self]) -> Result<Self> {
        let k = parts.first().map_or(1, |p| p.k);
        if parts.iter().any(|p| p.k != k) {
            return Err(Error::Shape("ensembles with different k".into()));
        }
        let n = parts.iter().map(|p| p.n).sum();
        let mut mu = Vec::with_capacity(k * n);
        let mut sigma = Vec::with_capacity(k * n);
        for j in 0..k {
            for p in parts {
                let (m, s) = p.component(j);
                mu.extend_from_slice(m);
                sigma.extend_from_slice(s);
            }
        }
        Self::new(k, n, mu, sigma)
    }

    /// Mixture mean and standard deviation at each point.
    pub fn moments(&self) -> (Vec<f64>, Vec<f64>) {
        let kf = self.k as f64;
        let mut mean = vec![0.0; self.n];
        let mut second = vec![0.0; self.n];
        for j in 0..self.k {
            let (m, s) = self.component(j);
            for i in 0..self.n {
                mean[i] += m[i] / kf;
                second[i] += (s[i] * s[i] + m[i] * m[i]) / kf;
            }
        }
        let sd = mean
            .iter()
            .zip(&second)
            .map(|(m, s2)| (s2 - m * m).max(0.0).sqrt())
            .collect();
        (mean, sd)
    }
}

/// `log (1/k) Σ_j N(y_i | μ_ij, σ_ij²)` per point.
pub fn ensemble_log_density(pred: &EnsemblePrediction, y: &[f64]) -> Result<Vec<f64>> {
    if y.len() != pred.n {
        return Err(Error::Shape(format!("{} outputs for {} points", y.len(), pred.n)));
    }
    let ln_k = (pred.k as f64).ln();
    let mut terms = vec![0.0; pred.k];
    Ok((0..pred.n)
        .map(|i| {
            for (j, t) in terms.iter_mut().enumerate() {
                let r = j * pred.n + i;
                *t = gauss_log_pdf_value(y[i], pred.mu[r], pred.sigma[r]);
            }
            crate::diffcore::tape::logsumexp(&terms) - ln_k
        })
        .collect())
}

/// Per-task randomness of a prediction, sampled once and reusable across
/// chunks of query points.
#[derive(Clone, Debug, PartialEq)]
pub enum Randomness {
    None,
    /// Standard-normal noise for `k` latent samples, `k x d_z`.
    Latent(Tensor),
    Bootstrap(BootstrapDraws),
}

impl Randomness {
    pub fn sample<R: Rng + ?Sized>(
        model: &Model,
        flags: VariantFlags,
        c: usize,
        k: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if k == 0 {
            return Err(Error::Contract("k must be at least 1".into()));
        }
        if model.kind.is_latent() {
            let dz = model.arch.d_z;
            let noise = Tensor::from_fn(k, dz, |_, _| rng.sample::<f64, _>(StandardNormal));
            Ok(Self::Latent(noise))
        } else if model.kind.is_bootstrap() || flags.naive_bootstrap {
            Ok(Self::Bootstrap(BootstrapDraws::sample(rng, c, k)?))
        } else {
            Ok(Self::None)
        }
    }
}

/// Ensemble prediction of any model at `xt` given one context.
pub fn predict_with(
    model: &Model,
    xc: &[f64],
    yc: &[f64],
    xt: &[f64],
    randomness: &Randomness,
    flags: VariantFlags,
) -> Result<EnsemblePrediction> {
    flags.validate(model.kind)?;
    let mut tape = Tape::inference(&model.store);
    let (k, out) = match randomness {
        Randomness::Bootstrap(draws) => {
            let opts = PipelineOptions { flags, detach: true };
            let out = bnp_forward(model, &mut tape, xc, yc, xt, draws, opts)?;
            (out.k, out.components)
        }
        Randomness::Latent(noise) => {
            let x = column(&mut tape, xc);
            let y = column(&mut tape, yc);
            let t = column(&mut tape, xt);
            let q = model.latent_encode(&mut tape, x, y)?;
            let z = latent_sample(&mut tape, q.eta, q.rho, noise.clone())?;
            (noise.rows(), model.predict_latent(&mut tape, x, y, z, t)?)
        }
        Randomness::None => {
            if model.kind.is_latent() || model.kind.is_bootstrap() {
                return Err(Error::Contract(format!(
                    "{} predictions need sampled randomness",
                    model.kind.as_str()
                )));
            }
            let x = column(&mut tape, xc);
            let y = column(&mut tape, yc);
            let t = column(&mut tape, xt);
            (1, model.predict_det(&mut tape, x, y, t)?)
        }
    };
    let v = out.values(&tape);
    EnsemblePrediction::new(k, xt.len(), v.mu, v.sigma)
}

/// Samples the task randomness and predicts in one call.
pub fn predict_ensemble<R: Rng + ?Sized>(
    model: &Model,
    xc: &[f64],
    yc: &[f64],
    xt: &[f64],
    k: usize,
    flags: VariantFlags,
    rng: &mut R,
) -> Result<EnsemblePrediction> {
    let r = Randomness::sample(model, flags, xc.len(), k, rng)?;
    predict_with(model, xc, yc, xt, &r, flags)
}

/// Reparameterized sample `z = η + ρ ⊙ ε` for each row of `noise`.
pub fn latent_sample(tape: &mut Tape<'_>, eta: Var, rho: Var, noise: Tensor) -> Result<Var> {
    let k = noise.rows();
    let e = tape.constant(noise);
    let rho = tape.repeat_rows(rho, k);
    let eta = tape.repeat_rows(eta, k);
    let scaled = tape.mul(rho, e)?;
    tape.add(eta, scaled)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::npmodels::ArchConfig;

    fn tiny(kind: ModelKind, seed: u64) -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut arch = ArchConfig::regression_1d(kind, 8);
        arch.n_head = 2;
        Model::new(kind, arch, &mut rng).unwrap()
    }

    fn data(n: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let y = x.iter().map(|v: &f64| v.sin() + 0.1 * rng.random::<f64>()).collect();
        (x, y)
    }

    fn randomize_adapt(model: &mut Model, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = model.net.adapt.unwrap();
        for id in [a.w, a.b] {
            for v in model.store.value_mut(id).data_mut() {
                *v = rng.random_range(-0.3..0.3);
            }
        }
    }

    #[test]
    fn variant_parsing_and_validation() {
        for name in VariantFlags::NAMES {
            let f = VariantFlags::parse(name).unwrap();
            assert_eq!(f.name(), name);
            assert!(f.validate(ModelKind::Bnp).is_ok());
        }
        assert!(VariantFlags::parse("no-paired")
            .unwrap()
            .validate(ModelKind::Np)
            .is_err());
        assert!(VariantFlags::parse("naive").unwrap().validate(ModelKind::Cnp).is_ok());
        assert!(VariantFlags::parse("naive").unwrap().validate(ModelKind::Np).is_err());
        let both = VariantFlags {
            naive_bootstrap: true,
            skip_paired: true,
            ..Default::default()
        };
        assert!(both.validate(ModelKind::Bnp).is_err());
        assert!(VariantFlags::parse("bagging").is_err());
    }

    #[test]
    fn single_pair_resamples_are_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (x, y) in paired_bootstrap(&mut rng, &[0.5], &[1.5], 6).unwrap() {
            assert_eq!((x, y), (vec![0.5], vec![1.5]));
        }
        assert!(paired_bootstrap(&mut rng, &[], &[], 3).is_err());
    }

    #[test]
    fn residual_arithmetic() {
        let set = ResidualSet {
            xc: vec![0.0],
            eps: vec![vec![(1.0 - 0.5) / 0.5]],
            mu: vec![vec![0.5]],
            sigma: vec![vec![0.5]],
        };
        assert_eq!(set.eps[0][0], 1.0);
        let ctx = reconstruct(&set, &[vec![0]]);
        assert_eq!(ctx[0].y, vec![1.0]);
    }

    #[test]
    fn zero_residuals_reconstruct_means() {
        let set = ResidualSet {
            xc: vec![0.0, 1.0, 2.0],
            eps: vec![vec![0.0; 3]],
            mu: vec![vec![0.1, 0.2, 0.3]],
            sigma: vec![vec![0.4, 0.5, 0.6]],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ctx = make_bootstrap_context(&mut rng, &set);
        assert_eq!(ctx[0].y, set.mu[0]);
        assert_eq!(ctx[0].x, set.xc);
    }

    #[test]
    fn identity_map_round_trips_labels() {
        let model = tiny(ModelKind::Bnp, 1);
        let (x, y) = data(7, 2);
        let set = compute_residuals(&model, &x, &y, &[(x.clone(), y.clone())]).unwrap();
        let ctx = reconstruct(&set, &[(0..7).collect()]);
        for (a, b) in ctx[0].y.iter().zip(&y) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pipeline_labels_match_value_level_functions() {
        for kind in [ModelKind::Bnp, ModelKind::Banp] {
            let model = tiny(kind, 3);
            let (x, y) = data(6, 4);
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let draws = BootstrapDraws::sample(&mut rng, 6, 3).unwrap();
            let resampled: Vec<_> = draws
                .paired
                .iter()
                .map(|m| (m.iter().map(|&i| x[i]).collect(), m.iter().map(|&i| y[i]).collect()))
                .collect();
            let set = compute_residuals(&model, &x, &y, &resampled).unwrap();
            let expected: Vec<f64> = reconstruct(&set, &draws.residual)
                .into_iter()
                .flat_map(|b| b.y)
                .collect();

            let mut tape = Tape::inference(&model.store);
            let xv = column(&mut tape, &x);
            let yv = column(&mut tape, &y);
            let yt = reconstructed_labels(&model, &mut tape, xv, yv, &draws, false).unwrap();
            for (a, b) in tape.value(yt).data().iter().zip(&expected) {
                assert!((a - b).abs() < 1e-12, "{kind:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn output_shape_is_k_by_targets() {
        for kind in [ModelKind::Bnp, ModelKind::Banp] {
            let model = tiny(kind, 5);
            let (x, y) = data(5, 6);
            let xt = [0.3, -1.0, 1.2];
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let p = predict_ensemble(&model, &x, &y, &xt, 7, VariantFlags::default(), &mut rng).unwrap();
            assert_eq!((p.k, p.n, p.mu.len()), (7, 3, 21));
            assert!(p.sigma.iter().all(|&s| s >= 0.1));
        }
    }

    #[test]
    fn zero_adaptation_reproduces_base_decoder() {
        // with A = 0 every component equals the base prediction
        let model = tiny(ModelKind::Bnp, 7);
        let (x, y) = data(5, 8);
        let xt = [0.0, 0.5];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let draws = BootstrapDraws::sample(&mut rng, 5, 3).unwrap();
        let mut tape = Tape::inference(&model.store);
        let out = bnp_forward(&model, &mut tape, &x, &y, &xt, &draws, PipelineOptions::default()).unwrap();
        let base = out.base.values(&tape);
        let comp = out.components.values(&tape);
        for j in 0..3 {
            for i in 0..2 {
                assert_eq!(comp.mu[j * 2 + i], base.mu[i]);
                assert_eq!(comp.sigma[j * 2 + i], base.sigma[i]);
            }
        }
    }

    #[test]
    fn exact_reconstruction_equals_single_path_decode() {
        // identity maps, zero residual noise: ỹ = y, so φ̃ = φ
        let mut model = tiny(ModelKind::Bnp, 11);
        randomize_adapt(&mut model, 3);
        let (x, y) = data(4, 12);
        let xt = [0.7, -0.2];
        let draws = BootstrapDraws::identity(4, 1);
        let opts = PipelineOptions {
            flags: VariantFlags::parse("no-paired").unwrap(),
            detach: true,
        };
        let mut tape = Tape::inference(&model.store);
        let out = bnp_forward(&model, &mut tape, &x, &y, &xt, &draws, opts).unwrap();
        let comp = out.components.values(&tape);

        let mut t2 = Tape::inference(&model.store);
        let xv = column(&mut t2, &x);
        let yv = column(&mut t2, &y);
        let tv = column(&mut t2, &xt);
        let phi = model.encode_det(&mut t2, xv, yv, 4, None).unwrap().var;
        let input = model.decoder_input(&mut t2, phi, tv).unwrap();
        let h1 = model.net.dec.layers[0].forward(&mut t2, input).unwrap();
        let h2 = model.net.adapt.unwrap().forward(&mut t2, phi).unwrap();
        let h2 = t2.repeat_rows(h2, 2);
        let h = t2.add(h1, h2).unwrap();
        let h = t2.relu(h);
        let raw = model.net.dec.forward_from(&mut t2, h, 1).unwrap();
        let expect = model.split_output(&mut t2, raw).unwrap().values(&t2);
        for i in 0..2 {
            assert!((comp.mu[i] - expect.mu[i]).abs() < 1e-10);
            assert!((comp.sigma[i] - expect.sigma[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn x_tilde_never_changes_across_seeds() {
        let model = tiny(ModelKind::Bnp, 13);
        let (x, y) = data(6, 14);
        let mut labels = vec![];
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sets = paired_bootstrap(&mut rng, &x, &y, 2).unwrap();
            let res = compute_residuals(&model, &x, &y, &sets).unwrap();
            let ctx = make_bootstrap_context(&mut rng, &res);
            for b in &ctx {
                assert_eq!(b.x, x);
                assert_eq!(b.y.len(), 6);
            }
            labels.push(ctx[0].y.clone());
        }
        assert_ne!(labels[0], labels[1]);
    }

    #[test]
    fn gaussian_log_density_reference_values() {
        let p = EnsemblePrediction::single(vec![0.0], vec![1.0]).unwrap();
        let v = ensemble_log_density(&p, &[0.0]).unwrap()[0];
        assert!((v + 0.918939).abs() < 1e-6);
        let p5 = EnsemblePrediction::new(5, 1, vec![0.3; 5], vec![0.7; 5]).unwrap();
        let p1 = EnsemblePrediction::single(vec![0.3], vec![0.7]).unwrap();
        let a = ensemble_log_density(&p5, &[1.1]).unwrap()[0];
        let b = ensemble_log_density(&p1, &[1.1]).unwrap()[0];
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn moments_of_two_components() {
        let p = EnsemblePrediction::new(2, 1, vec![-1.0, 1.0], vec![1.0, 1.0]).unwrap();
        let (m, s) = p.moments();
        assert_eq!(m[0], 0.0);
        assert!((s[0] - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn slice_and_concat_are_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mu: Vec<f64> = (0..12).map(|_| rng.random()).collect();
        let p = EnsemblePrediction::new(3, 4, mu, vec![0.5; 12]).unwrap();
        let parts = [p.slice(0, 1), p.slice(1, 4)];
        assert_eq!(EnsemblePrediction::concat(&parts).unwrap(), p);
    }
}
