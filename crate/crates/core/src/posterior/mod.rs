//! Joint log-posterior of the claim-frequency model.
//!
//! `log lambda_i = log alpha_i + g(alpha_i) + sum_k v^(k)_{x_ik} + u_{j[i]} + S_{t_i}`
//! with `g` a B-spline in `log alpha`, `u_j = gamma' z_j + eps_j`,
//! `eps = sigma_eps (sqrt(1 - phi) delta + sqrt(phi) eta)`, `eta` a proper
//! CAR field and `S` a Gaussian random walk with `S_0 = 0`.
//!
//! Sampling happens on an unconstrained vector: scales on the log scale,
//! `phi` and `rho` on the logit scale. Each scaled Gaussian block is sampled
//! either as is or in non-centred form (`xi = sigma_xi * xi_raw`), chosen by
//! [`Parameterization`]; by default only the increments are non-centred.

mod density;
mod inputs;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{logistic, logit, Scalar};
use crate::spatial::SpatialError;

pub use density::{log_likelihood, log_posterior, LogDensity, Posterior};
pub use inputs::{ModelInputs, ModelOptions};

#[derive(Debug, Error)]
pub enum PosteriorError {
    #[error("parameter vector has length {got}, layout expects {want}")]
    Dimension { got: usize, want: usize },
    #[error("block {block} has length {got}, expected {want}")]
    BlockLength { block: String, got: usize, want: usize },
    #[error("{name} = {value} is outside its support")]
    Support { name: String, value: f64 },
    #[error("rate overflow at record {record} (log rate {log_rate})")]
    Overflow { record: usize, log_rate: f64 },
    #[error("invalid model inputs: {0}")]
    Inputs(String),
    #[error(transparent)]
    Spatial(#[from] SpatialError),
}

pub type Result<T> = std::result::Result<T, PosteriorError>;

/// Block cardinalities.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Spline coefficients `L`.
    pub n_spline: usize,
    /// Levels of each categorical predictor (brand, category, ...).
    pub factor_levels: Vec<usize>,
    /// City covariates `M`.
    pub n_covariates: usize,
    /// Cities `J`.
    pub n_cities: usize,
    /// Years `T`; there are `T - 1` increments.
    pub n_years: usize,
}

impl ModelDims {
    pub fn n_factors(&self) -> usize {
        self.factor_levels.len()
    }

    pub fn n_increments(&self) -> usize {
        self.n_years.saturating_sub(1)
    }

    /// Total free parameters `d`.
    pub fn parameter_count(&self) -> usize {
        parameter_count(self)
    }
}

/// `L + sum n_k + M + 2J + (T - 1) + P + 5`, which is `... + 7` for `P = 2`.
pub fn parameter_count(dims: &ModelDims) -> usize {
    dims.n_spline
        + dims.factor_levels.iter().sum::<usize>()
        + dims.n_covariates
        + 2 * dims.n_cities
        + dims.n_increments()
        + dims.n_factors()
        + 5
}

/// Unconstrained-to-constrained map of a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    Identity,
    /// Multiplied by the scale stored in the block at this index.
    NonCentered {
        scale_block: usize,
    },
    Log,
    Logit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Spline,
    Factor(usize),
    Covariate,
    Iid,
    Spatial,
    Increment,
    SplineScale,
    FactorScale(usize),
    CityScale,
    IncrementScale,
    Mixing,
    Autocorrelation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub name: String,
    pub kind: BlockKind,
    pub offset: usize,
    pub len: usize,
    pub transform: Transform,
}

impl Block {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }

    /// Name of the sampled (unconstrained) coordinate block.
    pub fn unconstrained_name(&self) -> String {
        match self.transform {
            Transform::Identity => self.name.clone(),
            Transform::NonCentered { .. } => format!("{}_raw", self.name),
            Transform::Log => format!("log_{}", self.name),
            Transform::Logit => format!("logit_{}", self.name),
        }
    }
}

/// How a block with prior `N(0, sigma^2)` is sampled. Both forms give the
/// same posterior over constrained parameters; centred suits blocks the data
/// pins down, non-centred suits weakly identified ones.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockForm {
    #[default]
    Centered,
    NonCentered,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Parameterization {
    pub spline: BlockForm,
    pub factors: BlockForm,
    pub increments: BlockForm,
}

impl Default for Parameterization {
    fn default() -> Self {
        Self {
            spline: BlockForm::Centered,
            factors: BlockForm::Centered,
            increments: BlockForm::NonCentered,
        }
    }
}

impl Parameterization {
    pub fn uniform(form: BlockForm) -> Self {
        Self {
            spline: form,
            factors: form,
            increments: form,
        }
    }
}

fn block_transform(form: BlockForm, scale_block: usize) -> Transform {
    match form {
        BlockForm::Centered => Transform::Identity,
        BlockForm::NonCentered => Transform::NonCentered { scale_block },
    }
}

/// Offsets of every block in the flat parameter vector. Constrained and
/// unconstrained vectors share this layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub dims: ModelDims,
    pub blocks: Vec<Block>,
    pub dim: usize,
}

/// Positions of the blocks used in hot loops.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Slots {
    pub spline: usize,
    pub factors: usize,
    pub covariates: usize,
    pub delta: usize,
    pub eta: usize,
    pub xi: usize,
    pub sigma_g: usize,
    pub sigma_v: usize,
    pub sigma_eps: usize,
    pub sigma_xi: usize,
    pub phi: usize,
    pub rho: usize,
    pub noncentered_spline: bool,
    pub noncentered_factors: bool,
    pub noncentered_increments: bool,
}

impl Layout {
    /// Layout with the default parameterization.
    pub fn new(dims: &ModelDims) -> Self {
        Self::with_parameterization(dims, &Parameterization::default())
    }

    pub fn with_parameterization(dims: &ModelDims, form: &Parameterization) -> Self {
        let p = dims.n_factors();
        // the P + 5 vector blocks come first, then the scales
        let first_scale = 5 + p;
        let sigma_g_block = first_scale;
        let sigma_v_block = |k: usize| first_scale + 1 + k;
        let sigma_xi_block = first_scale + 2 + p;
        let mut blocks = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, kind: BlockKind, len: usize, transform: Transform| {
            blocks.push(Block {
                name,
                kind,
                offset,
                len,
                transform,
            });
            offset += len;
        };
        push(
            "c".into(),
            BlockKind::Spline,
            dims.n_spline,
            block_transform(form.spline, sigma_g_block),
        );
        for (k, &n) in dims.factor_levels.iter().enumerate() {
            push(
                format!("v{}", k + 1),
                BlockKind::Factor(k),
                n,
                block_transform(form.factors, sigma_v_block(k)),
            );
        }
        push(
            "gamma".into(),
            BlockKind::Covariate,
            dims.n_covariates,
            Transform::Identity,
        );
        push("delta".into(), BlockKind::Iid, dims.n_cities, Transform::Identity);
        push("eta".into(), BlockKind::Spatial, dims.n_cities, Transform::Identity);
        push(
            "xi".into(),
            BlockKind::Increment,
            dims.n_increments(),
            block_transform(form.increments, sigma_xi_block),
        );
        push("sigma_g".into(), BlockKind::SplineScale, 1, Transform::Log);
        for k in 0..p {
            push(
                format!("sigma_v{}", k + 1),
                BlockKind::FactorScale(k),
                1,
                Transform::Log,
            );
        }
        push("sigma_eps".into(), BlockKind::CityScale, 1, Transform::Log);
        push("sigma_xi".into(), BlockKind::IncrementScale, 1, Transform::Log);
        push("phi".into(), BlockKind::Mixing, 1, Transform::Logit);
        push("rho".into(), BlockKind::Autocorrelation, 1, Transform::Logit);
        debug_assert_eq!(blocks[sigma_xi_block].kind, BlockKind::IncrementScale);
        debug_assert_eq!(offset, parameter_count(dims));
        Self {
            dims: dims.clone(),
            blocks,
            dim: offset,
        }
    }

    pub fn block(&self, name: &str) -> Option<&Block> {
        self.blocks.iter().find(|b| b.name == name)
    }

    pub(crate) fn slots(&self) -> Slots {
        let p = self.dims.n_factors();
        let off = |i: usize| self.blocks[i].offset;
        Slots {
            spline: off(0),
            factors: off(1),
            covariates: off(1 + p),
            delta: off(2 + p),
            eta: off(3 + p),
            xi: off(4 + p),
            sigma_g: off(5 + p),
            sigma_v: off(6 + p),
            sigma_eps: off(6 + 2 * p),
            sigma_xi: off(7 + 2 * p),
            phi: off(8 + 2 * p),
            rho: off(9 + 2 * p),
            noncentered_spline: self.blocks[0].transform != Transform::Identity,
            noncentered_factors: p > 0 && self.blocks[1].transform != Transform::Identity,
            noncentered_increments: self.blocks[4 + p].transform != Transform::Identity,
        }
    }

    fn expand(&self, unconstrained: bool) -> Vec<String> {
        let mut out = Vec::with_capacity(self.dim);
        for b in &self.blocks {
            let name = if unconstrained {
                b.unconstrained_name()
            } else {
                b.name.clone()
            };
            if matches!(b.transform, Transform::Log | Transform::Logit) {
                out.push(name);
            } else {
                out.extend((0..b.len).map(|i| format!("{name}[{i}]")));
            }
        }
        out
    }

    /// Constrained coordinate names, e.g. `c[0]`, `sigma_g`, `rho`.
    pub fn names(&self) -> Vec<String> {
        self.expand(false)
    }

    /// Sampled coordinate names, e.g. `xi_raw[0]`, `log_sigma_g`.
    pub fn unconstrained_names(&self) -> Vec<String> {
        self.expand(true)
    }
}

/// Model parameters in constrained space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterBlock<T> {
    pub c: Vec<T>,
    /// One vector per categorical predictor.
    pub v: Vec<Vec<T>>,
    pub gamma: Vec<T>,
    pub delta: Vec<T>,
    pub eta: Vec<T>,
    pub xi: Vec<T>,
    pub sigma_g: T,
    pub sigma_v: Vec<T>,
    pub sigma_eps: T,
    pub sigma_xi: T,
    pub phi: T,
    pub rho: T,
}

impl<T: Scalar> ParameterBlock<T> {
    /// All effects zero, scales one, `phi = rho = 1/2`.
    pub fn neutral(dims: &ModelDims) -> Self {
        Self {
            c: vec![T::ZERO; dims.n_spline],
            v: dims.factor_levels.iter().map(|&n| vec![T::ZERO; n]).collect(),
            gamma: vec![T::ZERO; dims.n_covariates],
            delta: vec![T::ZERO; dims.n_cities],
            eta: vec![T::ZERO; dims.n_cities],
            xi: vec![T::ZERO; dims.n_increments()],
            sigma_g: T::ONE,
            sigma_v: vec![T::ONE; dims.n_factors()],
            sigma_eps: T::ONE,
            sigma_xi: T::ONE,
            phi: T::HALF,
            rho: T::HALF,
        }
    }

    pub fn check_dims(&self, dims: &ModelDims) -> Result<()> {
        let check = |block: &str, got: usize, want: usize| {
            if got == want {
                Ok(())
            } else {
                Err(PosteriorError::BlockLength {
                    block: block.into(),
                    got,
                    want,
                })
            }
        };
        check("c", self.c.len(), dims.n_spline)?;
        check("v", self.v.len(), dims.n_factors())?;
        for (k, (v, &n)) in self.v.iter().zip(&dims.factor_levels).enumerate() {
            check(&format!("v{}", k + 1), v.len(), n)?;
        }
        check("gamma", self.gamma.len(), dims.n_covariates)?;
        check("delta", self.delta.len(), dims.n_cities)?;
        check("eta", self.eta.len(), dims.n_cities)?;
        check("xi", self.xi.len(), dims.n_increments())?;
        check("sigma_v", self.sigma_v.len(), dims.n_factors())
    }

    /// City effect noise `eps = sigma_eps (sqrt(1 - phi) delta + sqrt(phi) eta)`.
    pub fn epsilon(&self) -> Vec<T> {
        let a = self.sigma_eps * (T::ONE - self.phi).sqrt();
        let b = self.sigma_eps * self.phi.sqrt();
        self.delta.iter().zip(&self.eta).map(|(&d, &e)| a * d + b * e).collect()
    }

    /// Random-walk levels `S_0 = 0, S_t = sum_{s < t} xi_s`.
    pub fn time_effect(&self) -> Vec<T> {
        let mut s = Vec::with_capacity(self.xi.len() + 1);
        let mut acc = T::ZERO;
        s.push(acc);
        for &x in &self.xi {
            acc += x;
            s.push(acc);
        }
        s
    }

    /// Concatenates the blocks in layout order.
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.c);
        for v in &self.v {
            out.extend_from_slice(v);
        }
        out.extend_from_slice(&self.gamma);
        out.extend_from_slice(&self.delta);
        out.extend_from_slice(&self.eta);
        out.extend_from_slice(&self.xi);
        out.push(self.sigma_g);
        out.extend_from_slice(&self.sigma_v);
        out.push(self.sigma_eps);
        out.push(self.sigma_xi);
        out.push(self.phi);
        out.push(self.rho);
        out
    }

    /// Inverse of [`flatten`](Self::flatten).
    pub fn from_flat(layout: &Layout, x: &[T]) -> Result<Self> {
        if x.len() != layout.dim {
            return Err(PosteriorError::Dimension {
                got: x.len(),
                want: layout.dim,
            });
        }
        let s = layout.slots();
        let dims = &layout.dims;
        let p = dims.n_factors();
        let mut v = Vec::with_capacity(p);
        let mut off = s.factors;
        for &n in &dims.factor_levels {
            v.push(x[off..off + n].to_vec());
            off += n;
        }
        Ok(Self {
            c: x[s.spline..s.spline + dims.n_spline].to_vec(),
            v,
            gamma: x[s.covariates..s.covariates + dims.n_covariates].to_vec(),
            delta: x[s.delta..s.delta + dims.n_cities].to_vec(),
            eta: x[s.eta..s.eta + dims.n_cities].to_vec(),
            xi: x[s.xi..s.xi + dims.n_increments()].to_vec(),
            sigma_g: x[s.sigma_g],
            sigma_v: x[s.sigma_v..s.sigma_v + p].to_vec(),
            sigma_eps: x[s.sigma_eps],
            sigma_xi: x[s.sigma_xi],
            phi: x[s.phi],
            rho: x[s.rho],
        })
    }

    pub fn cast<U: Scalar>(&self) -> ParameterBlock<U> {
        let c = |v: &[T]| v.iter().map(|x| U::lit(x.as_f64())).collect::<Vec<U>>();
        ParameterBlock {
            c: c(&self.c),
            v: self.v.iter().map(|v| c(v)).collect(),
            gamma: c(&self.gamma),
            delta: c(&self.delta),
            eta: c(&self.eta),
            xi: c(&self.xi),
            sigma_g: U::lit(self.sigma_g.as_f64()),
            sigma_v: c(&self.sigma_v),
            sigma_eps: U::lit(self.sigma_eps.as_f64()),
            sigma_xi: U::lit(self.sigma_xi.as_f64()),
            phi: U::lit(self.phi.as_f64()),
            rho: U::lit(self.rho.as_f64()),
        }
    }
}

fn support<T: Scalar>(name: &str, value: T, ok: bool) -> Result<()> {
    if ok && value.is_finite() {
        Ok(())
    } else {
        Err(PosteriorError::Support {
            name: name.into(),
            value: value.as_f64(),
        })
    }
}

/// Maps constrained parameters onto the sampler's coordinates.
pub fn to_unconstrained<T: Scalar>(layout: &Layout, p: &ParameterBlock<T>) -> Result<Vec<T>> {
    p.check_dims(&layout.dims)?;
    let positive = |name: &str, s: T| support(name, s, s > T::ZERO);
    let unit = |name: &str, s: T| support(name, s, s > T::ZERO && s < T::ONE);
    positive("sigma_g", p.sigma_g)?;
    for (k, &s) in p.sigma_v.iter().enumerate() {
        positive(&format!("sigma_v{}", k + 1), s)?;
    }
    positive("sigma_eps", p.sigma_eps)?;
    positive("sigma_xi", p.sigma_xi)?;
    unit("phi", p.phi)?;
    unit("rho", p.rho)?;

    let slots = layout.slots();
    let unit_scale = |s: T, noncentered: bool| if noncentered { s } else { T::ONE };
    let mut out = Vec::with_capacity(layout.dim);
    let sg = unit_scale(p.sigma_g, slots.noncentered_spline);
    out.extend(p.c.iter().map(|&c| c / sg));
    for (v, &s) in p.v.iter().zip(&p.sigma_v) {
        let s = unit_scale(s, slots.noncentered_factors);
        out.extend(v.iter().map(|&x| x / s));
    }
    out.extend_from_slice(&p.gamma);
    out.extend_from_slice(&p.delta);
    out.extend_from_slice(&p.eta);
    let sx = unit_scale(p.sigma_xi, slots.noncentered_increments);
    out.extend(p.xi.iter().map(|&x| x / sx));
    out.push(p.sigma_g.ln());
    out.extend(p.sigma_v.iter().map(|s| s.ln()));
    out.push(p.sigma_eps.ln());
    out.push(p.sigma_xi.ln());
    out.push(logit(p.phi));
    out.push(logit(p.rho));
    Ok(out)
}

/// Maps sampler coordinates back to model parameters.
pub fn to_constrained<T: Scalar>(layout: &Layout, x: &[T]) -> Result<ParameterBlock<T>> {
    let mut p = ParameterBlock::from_flat(layout, x)?;
    p.sigma_g = p.sigma_g.exp();
    for s in &mut p.sigma_v {
        *s = s.exp();
    }
    p.sigma_eps = p.sigma_eps.exp();
    p.sigma_xi = p.sigma_xi.exp();
    p.phi = logistic(p.phi);
    p.rho = logistic(p.rho);
    let slots = layout.slots();
    if slots.noncentered_spline {
        for c in &mut p.c {
            *c *= p.sigma_g;
        }
    }
    if slots.noncentered_factors {
        for (v, &s) in p.v.iter_mut().zip(&p.sigma_v) {
            for x in v {
                *x *= s;
            }
        }
    }
    if slots.noncentered_increments {
        for x in &mut p.xi {
            *x *= p.sigma_xi;
        }
    }
    Ok(p)
}

/// Log-Jacobian of [`to_constrained`] at unconstrained `x`, including the
/// scale factors of the non-centred blocks.
pub fn log_jacobian<T: Scalar>(layout: &Layout, x: &[T]) -> Result<T> {
    if x.len() != layout.dim {
        return Err(PosteriorError::Dimension {
            got: x.len(),
            want: layout.dim,
        });
    }
    let mut total = T::ZERO;
    for b in &layout.blocks {
        match b.transform {
            Transform::Identity => {}
            Transform::Log => total += x[b.offset],
            Transform::Logit => {
                let u = x[b.offset];
                // log p + log(1 - p) = -softplus(-u) - softplus(u)
                total -= crate::scalar::softplus(-u) + crate::scalar::softplus(u);
            }
            Transform::NonCentered { scale_block } => {
                total += T::from_count(b.len) * x[layout.blocks[scale_block].offset];
            }
        }
    }
    Ok(total)
}

/// Prior hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorSettings {
    /// HalfNormal scale shared by every `sigma`.
    pub scale_sd: f64,
    /// Normal sd of the covariate coefficients `gamma`.
    pub gamma_sd: f64,
    /// Beta parameters of `phi`.
    pub phi_beta: [f64; 2],
    /// Beta parameters of `rho`.
    pub rho_beta: [f64; 2],
}

impl Default for PriorSettings {
    fn default() -> Self {
        Self {
            scale_sd: 1.0,
            gamma_sd: 1.0,
            phi_beta: [1.0, 1.0],
            rho_beta: [2.0, 2.0],
        }
    }
}

impl PriorSettings {
    pub fn validate(&self) -> Result<()> {
        let ok = self.scale_sd > 0.0
            && self.gamma_sd > 0.0
            && self
                .phi_beta
                .iter()
                .chain(&self.rho_beta)
                .all(|&a| a > 0.0 && a.is_finite());
        if ok {
            Ok(())
        } else {
            Err(PosteriorError::Inputs(format!("invalid prior settings {self:?}")))
        }
    }
}

/// Everything needed to rebuild the posterior for prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDescription {
    pub layout: Layout,
    pub spline_degree: usize,
    pub spline_knots: Vec<f64>,
    pub year_floor: i32,
    pub priors: PriorSettings,
    pub parameter_count: usize,
    pub graph_hash: Option<String>,
    pub factor_names: Vec<String>,
    pub covariate_names: Vec<String>,
}
