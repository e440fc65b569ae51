//! The trainable multi-trait regressor.
//!
//! Topology: a shared dense trunk (`tanh`, dropout) feeds one head per
//! non-overall trait (dense `tanh` hidden layer with dropout, then a dense
//! sigmoid output). The overall head is a single dense sigmoid layer over the
//! trunk output concatenated with every other trait's hidden vector.
//!
//! Gradients are computed analytically; see [`gradients`].

mod checkpoint;
mod data;
mod optim;
mod train;

pub use checkpoint::{AdapterCheckpoint, ModelCheckpoint};
pub use data::{GroupRanges, TrainingData};
pub use optim::{AdamW, AdamWConfig};
pub use train::{train, EpochRecord, TrainConfig, TrainLog};

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng as _;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::adapt::LoraLayer;
use crate::corpus::OVERALL;
use crate::error::{Error, Result};
use crate::rng::{rng_from, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden: usize,
    pub head_hidden: usize,
    pub dropout: f64,
    /// Output traits; the first is always `overall`.
    pub traits: Vec<String>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dim: 0,
            hidden: 128,
            head_hidden: 32,
            dropout: 0.1,
            traits: vec![OVERALL.to_string()],
        }
    }
}

/// A dense layer `y = x·Wᵀ + b`, optionally carrying a low-rank adapter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub id: String,
    /// `out × in`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub frozen: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapter: Option<LoraLayer>,
}

#[derive(Debug, Clone)]
struct DenseCache {
    input: Array2<f64>,
    // Adapter path: dropped-out input, its mask, and A·x.
    lora_input: Option<Array2<f64>>,
    lora_mask: Option<Array2<f64>>,
    lora_hidden: Option<Array2<f64>>,
}

#[derive(Debug, Clone)]
struct DenseGrad {
    weight: Array2<f64>,
    bias: Array1<f64>,
    lora_a: Option<Array2<f64>>,
    lora_b: Option<Array2<f64>>,
}

impl Dense {
    fn init(id: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        Dense {
            id: id.to_string(),
            weight: Array2::from_shape_fn((fan_out, fan_in), |_| dist.sample(rng)),
            bias: Array1::zeros(fan_out),
            frozen: false,
            adapter: None,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    fn forward(&self, x: &Array2<f64>, drop: &mut DropoutMode<'_>) -> (Array2<f64>, DenseCache) {
        let mut z = x.dot(&self.weight.t());
        z += &self.bias;
        let mut cache = DenseCache {
            input: x.clone(),
            lora_input: None,
            lora_mask: None,
            lora_hidden: None,
        };
        if let Some(lora) = &self.adapter {
            let mask = drop.mask(x.nrows(), x.ncols(), lora.dropout);
            let xd = match &mask {
                Some(m) => x * m,
                None => x.clone(),
            };
            let u = xd.dot(&lora.a.t());
            let delta = u.dot(&lora.b.t()) * lora.scale();
            z += &delta;
            cache.lora_input = Some(xd);
            cache.lora_mask = mask;
            cache.lora_hidden = Some(u);
        }
        (z, cache)
    }

    fn backward(&self, cache: &DenseCache, dz: &Array2<f64>, need_input: bool) -> (DenseGrad, Option<Array2<f64>>) {
        let (weight, bias) = if self.frozen {
            (Array2::zeros(self.weight.raw_dim()), Array1::zeros(self.bias.len()))
        } else {
            (dz.t().dot(&cache.input), dz.sum_axis(Axis(0)))
        };
        let mut grad = DenseGrad {
            weight,
            bias,
            lora_a: None,
            lora_b: None,
        };
        let mut dx = need_input.then(|| dz.dot(&self.weight));
        if let (Some(lora), Some(xd), Some(u)) = (&self.adapter, &cache.lora_input, &cache.lora_hidden) {
            let s = lora.scale();
            grad.lora_b = Some(dz.t().dot(u) * s);
            let du = dz.dot(&lora.b) * s;
            grad.lora_a = Some(du.t().dot(xd));
            if let Some(dx) = dx.as_mut() {
                let mut back = du.dot(&lora.a);
                if let Some(m) = &cache.lora_mask {
                    back *= m;
                }
                *dx += &back;
            }
        }
        (grad, dx)
    }

    fn tensors(&self) -> Vec<(String, &[f64], bool)> {
        let trainable = !self.frozen;
        let mut out = vec![
            (format!("{}.weight", self.id), slice(&self.weight), trainable),
            (format!("{}.bias", self.id), self.bias.as_slice_memory_order().expect("contiguous"), trainable),
        ];
        if let Some(l) = &self.adapter {
            out.push((format!("{}.lora_a", self.id), slice(&l.a), true));
            out.push((format!("{}.lora_b", self.id), slice(&l.b), true));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<ParamMut<'_>> {
        let trainable = !self.frozen;
        let mut out = vec![
            ParamMut {
                values: self.weight.as_slice_mut().expect("row-major parameters"),
                trainable,
            },
            ParamMut {
                values: self.bias.as_slice_memory_order_mut().expect("contiguous"),
                trainable,
            },
        ];
        if let Some(l) = &mut self.adapter {
            out.push(ParamMut {
                values: l.a.as_slice_mut().expect("row-major parameters"),
                trainable: true,
            });
            out.push(ParamMut {
                values: l.b.as_slice_mut().expect("row-major parameters"),
                trainable: true,
            });
        }
        out
    }
}

fn slice(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("row-major parameters")
}

impl DenseGrad {
    /// Flattens in row-major order to match the parameter slices; matrix
    /// products may come back column-major.
    fn into_tensors(self, id: &str, out: &mut Vec<(String, Vec<f64>)>) {
        let flat = |a: Array2<f64>| a.iter().copied().collect::<Vec<f64>>();
        out.push((format!("{id}.weight"), flat(self.weight)));
        out.push((format!("{id}.bias"), self.bias.to_vec()));
        if let Some(a) = self.lora_a {
            out.push((format!("{id}.lora_a"), flat(a)));
        }
        if let Some(b) = self.lora_b {
            out.push((format!("{id}.lora_b"), flat(b)));
        }
    }
}

/// Mutable view of one parameter tensor, used by optimizers.
pub struct ParamMut<'a> {
    pub values: &'a mut [f64],
    pub trainable: bool,
}

/// Source of dropout masks for a forward pass.
pub enum DropoutMode<'a> {
    Off,
    /// One stream for the whole batch, drawn row-major.
    Shared(&'a mut Rng),
    /// One stream per row, so a row's masks do not depend on its batch.
    PerRow(&'a mut [Rng]),
}

impl DropoutMode<'_> {
    pub fn is_active(&self) -> bool {
        !matches!(self, DropoutMode::Off)
    }

    /// Inverted-dropout mask (`0` or `1/(1-rate)`), or `None` when inactive.
    fn mask(&mut self, rows: usize, cols: usize, rate: f64) -> Option<Array2<f64>> {
        if rate <= 0.0 {
            return None;
        }
        let keep = 1.0 / (1.0 - rate);
        let draw = |rng: &mut Rng| if rng.random::<f64>() < rate { 0.0 } else { keep };
        match self {
            DropoutMode::Off => None,
            DropoutMode::Shared(rng) => Some(Array2::from_shape_fn((rows, cols), |_| draw(rng))),
            DropoutMode::PerRow(rngs) => {
                assert_eq!(rngs.len(), rows, "one dropout stream per row");
                let mut m = Array2::zeros((rows, cols));
                for (mut row, rng) in m.rows_mut().into_iter().zip(rngs.iter_mut()) {
                    row.iter_mut().for_each(|v| *v = draw(rng));
                }
                Some(m)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraitHead {
    pub trait_name: String,
    pub hidden: Dense,
    pub output: Dense,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraitModel {
    pub config: ModelConfig,
    pub trunk: Dense,
    pub heads: Vec<TraitHead>,
    pub overall: Dense,
    /// Set once stage-1 training has run.
    #[serde(default)]
    pub trained: bool,
}

struct HeadCache {
    hidden: DenseCache,
    g: Array2<f64>,
    mask: Option<Array2<f64>>,
    output: DenseCache,
}

struct ForwardCache {
    trunk: DenseCache,
    h0: Array2<f64>,
    m0: Option<Array2<f64>>,
    heads: Vec<HeadCache>,
    overall: DenseCache,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn apply_mask(x: &Array2<f64>, mask: &Option<Array2<f64>>) -> Array2<f64> {
    match mask {
        Some(m) => x * m,
        None => x.clone(),
    }
}

impl TraitModel {
    /// Fresh model with fan-in scaled uniform weights drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        if config.traits.first().map(String::as_str) != Some(OVERALL) {
            return Err(Error::TraitMismatch(format!("first model trait must be `{OVERALL}`")));
        }
        let unique: BTreeSet<&String> = config.traits.iter().collect();
        if unique.len() != config.traits.len() {
            return Err(Error::TraitMismatch("duplicate model traits".into()));
        }
        if config.input_dim == 0 || config.hidden == 0 || config.head_hidden == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if !(0.0..1.0).contains(&config.dropout) {
            return Err(Error::Config(format!("dropout rate {} outside [0, 1)", config.dropout)));
        }
        let mut rng = rng_from(seed, "model/init", 0);
        let trunk = Dense::init("trunk", config.input_dim, config.hidden, &mut rng);
        let heads: Vec<TraitHead> = config.traits[1..]
            .iter()
            .map(|t| TraitHead {
                trait_name: t.clone(),
                hidden: Dense::init(&format!("head.{t}.hidden"), config.hidden, config.head_hidden, &mut rng),
                output: Dense::init(&format!("head.{t}.output"), config.head_hidden, 1, &mut rng),
            })
            .collect();
        let concat = config.hidden + heads.len() * config.head_hidden;
        let overall = Dense::init("overall.output", concat, 1, &mut rng);
        Ok(TraitModel {
            config,
            trunk,
            heads,
            overall,
            trained: false,
        })
    }

    pub fn traits(&self) -> &[String] {
        &self.config.traits
    }

    pub fn layers(&self) -> Vec<&Dense> {
        let mut v = vec![&self.trunk];
        for h in &self.heads {
            v.push(&h.hidden);
            v.push(&h.output);
        }
        v.push(&self.overall);
        v
    }

    pub fn layers_mut(&mut self) -> Vec<&mut Dense> {
        let mut v = vec![&mut self.trunk];
        for h in &mut self.heads {
            v.push(&mut h.hidden);
            v.push(&mut h.output);
        }
        v.push(&mut self.overall);
        v
    }

    pub fn layer_mut(&mut self, id: &str) -> Result<&mut Dense> {
        self.layers_mut()
            .into_iter()
            .find(|l| l.id == id)
            .ok_or_else(|| Error::UnknownLayer(id.to_string()))
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.layers_mut().into_iter().for_each(|l| l.frozen = frozen);
    }

    /// Named parameter tensors in canonical order.
    pub fn parameters(&self) -> Vec<(String, &[f64], bool)> {
        self.layers().into_iter().flat_map(Dense::tensors).collect()
    }

    /// Mutable parameter tensors in the order of [`TraitModel::parameters`].
    pub fn parameters_mut(&mut self) -> Vec<ParamMut<'_>> {
        self.layers_mut().into_iter().flat_map(Dense::tensors_mut).collect()
    }

    pub fn trainable_parameter_count(&self) -> usize {
        self.parameters().iter().filter(|p| p.2).map(|p| p.1.len()).sum()
    }

    /// Deterministic prediction (dropout off), one column per trait.
    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.forward(x, DropoutMode::Off)
    }

    /// Forward pass; outputs are sigmoid scores, one column per trait.
    pub fn forward(&self, x: ArrayView2<'_, f64>, mut drop: DropoutMode<'_>) -> Result<Array2<f64>> {
        Ok(self.forward_cached(x, &mut drop)?.0)
    }

    fn forward_cached(&self, x: ArrayView2<'_, f64>, drop: &mut DropoutMode<'_>) -> Result<(Array2<f64>, ForwardCache)> {
        if x.ncols() != self.config.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.config.input_dim,
                actual: x.ncols(),
            });
        }
        let n = x.nrows();
        let rate = self.config.dropout;
        let x = x.to_owned();
        let (z0, trunk) = self.trunk.forward(&x, drop);
        let h0 = z0.mapv(f64::tanh);
        let m0 = drop.mask(n, self.config.hidden, rate);
        let h0d = apply_mask(&h0, &m0);

        let mut outputs = Array2::zeros((n, self.config.traits.len()));
        let mut concat_parts = vec![h0d.clone()];
        let mut heads = Vec::with_capacity(self.heads.len());
        for (k, head) in self.heads.iter().enumerate() {
            let (z1, hidden) = head.hidden.forward(&h0d, drop);
            let g = z1.mapv(f64::tanh);
            let mask = drop.mask(n, self.config.head_hidden, rate);
            let gd = apply_mask(&g, &mask);
            let (zo, output) = head.output.forward(&gd, drop);
            outputs.column_mut(k + 1).assign(&zo.column(0).mapv(sigmoid));
            concat_parts.push(gd);
            heads.push(HeadCache { hidden, g, mask, output });
        }
        let views: Vec<_> = concat_parts.iter().map(|a| a.view()).collect();
        let concat = ndarray::concatenate(Axis(1), &views).expect("row counts agree");
        let (zo, overall) = self.overall.forward(&concat, drop);
        outputs.column_mut(0).assign(&zo.column(0).mapv(sigmoid));
        Ok((outputs, ForwardCache { trunk, h0, m0, heads, overall }))
    }

    fn backward(&self, cache: &ForwardCache, outputs: &Array2<f64>, d_out: &Array2<f64>) -> Gradients {
        let n = outputs.nrows();
        let sig_grad = |col: usize| -> Array2<f64> {
            let y = outputs.column(col);
            let d = d_out.column(col);
            Array2::from_shape_fn((n, 1), |(i, _)| d[i] * y[i] * (1.0 - y[i]))
        };
        let hidden = self.config.hidden;
        let hh = self.config.head_hidden;

        let (g_overall, dconcat) = self.overall.backward(&cache.overall, &sig_grad(0), true);
        let dconcat = dconcat.expect("input gradient requested");
        let mut dh0d = dconcat.slice(s![.., ..hidden]).to_owned();

        let mut head_grads = Vec::with_capacity(self.heads.len());
        for (k, (head, hc)) in self.heads.iter().zip(&cache.heads).enumerate() {
            let off = hidden + k * hh;
            let (g_out, dgd) = head.output.backward(&hc.output, &sig_grad(k + 1), true);
            let mut dgd = dgd.expect("input gradient requested");
            dgd += &dconcat.slice(s![.., off..off + hh]);
            let dg = apply_mask(&dgd, &hc.mask);
            let dz1 = dg * hc.g.mapv(|g| 1.0 - g * g);
            let (g_hidden, dh) = head.hidden.backward(&hc.hidden, &dz1, true);
            dh0d += &dh.expect("input gradient requested");
            head_grads.push((g_hidden, g_out));
        }
        let dh0 = apply_mask(&dh0d, &cache.m0);
        let dz0 = dh0 * cache.h0.mapv(|h| 1.0 - h * h);
        let (g_trunk, _) = self.trunk.backward(&cache.trunk, &dz0, false);

        let mut tensors = Vec::new();
        g_trunk.into_tensors(&self.trunk.id, &mut tensors);
        for (head, (gh, go)) in self.heads.iter().zip(head_grads) {
            gh.into_tensors(&head.hidden.id, &mut tensors);
            go.into_tensors(&head.output.id, &mut tensors);
        }
        g_overall.into_tensors(&self.overall.id, &mut tensors);
        Gradients { tensors }
    }
}

/// Parameter-shaped gradients in the canonical order of
/// [`TraitModel::parameters`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<(String, Vec<f64>)>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.tensors.iter().find(|t| t.0 == name).map(|t| t.1.as_slice())
    }

    pub fn is_zero(&self) -> bool {
        self.tensors.iter().all(|(_, v)| v.iter().all(|&x| x == 0.0))
    }

    pub fn norm(&self) -> f64 {
        self.tensors.iter().flat_map(|(_, v)| v).map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// Loss weights: `alpha_overall` for the overall trait and `alpha` for every
/// other trait. The combined loss is
/// `alpha_overall·L_overall + (1 − alpha_overall)·Σ alpha_t·L_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha_overall: f64,
    pub alpha: BTreeMap<String, f64>,
}

impl LossWeights {
    pub fn uniform(traits: &[String], alpha_overall: f64, alpha: f64) -> Self {
        LossWeights {
            alpha_overall,
            alpha: traits
                .iter()
                .filter(|t| t.as_str() != OVERALL)
                .map(|t| (t.clone(), alpha))
                .collect(),
        }
    }

    /// 0.7 on overall, 1.0 on every other trait.
    pub fn balance(traits: &[String]) -> Self {
        Self::uniform(traits, 0.7, 1.0)
    }

    /// 0.9 on overall, 0.1 on every other trait.
    pub fn overall_focus(traits: &[String]) -> Self {
        Self::uniform(traits, 0.9, 0.1)
    }

    /// 0.1 on overall, 1.0 on `target`, 0.1 on the remaining traits.
    pub fn trait_focus(traits: &[String], target: &str) -> Self {
        let mut w = Self::uniform(traits, 0.1, 0.1);
        if let Some(v) = w.alpha.get_mut(target) {
            *v = 1.0;
        }
        w
    }

    /// Per-output coefficients in model trait order.
    pub fn coefficients(&self, traits: &[String]) -> Result<Vec<f64>> {
        let others: BTreeSet<&str> = traits.iter().skip(1).map(String::as_str).collect();
        let given: BTreeSet<&str> = self.alpha.keys().map(String::as_str).collect();
        if traits.first().map(String::as_str) != Some(OVERALL) || others != given {
            return Err(Error::TraitMismatch(format!(
                "loss weights cover {given:?}, model traits are {traits:?}"
            )));
        }
        let rest = 1.0 - self.alpha_overall;
        Ok(std::iter::once(self.alpha_overall)
            .chain(traits[1..].iter().map(|t| rest * self.alpha[t]))
            .collect())
    }
}

/// Per-trait masked mean squared errors, in column order.
pub fn trait_mse(pred: &Array2<f64>, targets: &Array2<f64>, mask: &Array2<f64>) -> Result<Vec<f64>> {
    if pred.dim() != targets.dim() || pred.dim() != mask.dim() {
        return Err(Error::TraitMismatch(format!(
            "prediction shape {:?} vs target shape {:?}",
            pred.dim(),
            targets.dim()
        )));
    }
    Ok((0..pred.ncols())
        .map(|t| {
            let (mut sum, mut n) = (0.0, 0.0);
            for i in 0..pred.nrows() {
                let m = mask[[i, t]];
                sum += m * (pred[[i, t]] - targets[[i, t]]).powi(2);
                n += m;
            }
            if n > 0.0 {
                sum / n
            } else {
                0.0
            }
        })
        .collect())
}

/// Weighted multi-task loss over trait-wise mean squared errors.
pub fn loss_with_coefficients(pred: &Array2<f64>, targets: &Array2<f64>, mask: &Array2<f64>, coefs: &[f64]) -> Result<f64> {
    let mse = trait_mse(pred, targets, mask)?;
    if coefs.len() != mse.len() {
        return Err(Error::TraitMismatch(format!("{} coefficients for {} traits", coefs.len(), mse.len())));
    }
    Ok(mse.iter().zip(coefs).map(|(l, c)| l * c).sum())
}

pub fn loss(pred: &Array2<f64>, targets: &Array2<f64>, mask: &Array2<f64>, weights: &LossWeights, traits: &[String]) -> Result<f64> {
    if traits.len() != pred.ncols() {
        return Err(Error::TraitMismatch(format!("{} traits for {} columns", traits.len(), pred.ncols())));
    }
    loss_with_coefficients(pred, targets, mask, &weights.coefficients(traits)?)
}

fn loss_gradient(pred: &Array2<f64>, targets: &Array2<f64>, mask: &Array2<f64>, coefs: &[f64]) -> Array2<f64> {
    let counts: Vec<f64> = mask.sum_axis(Axis(0)).to_vec();
    Array2::from_shape_fn(pred.dim(), |(i, t)| {
        if counts[t] > 0.0 {
            coefs[t] * 2.0 * mask[[i, t]] * (pred[[i, t]] - targets[[i, t]]) / counts[t]
        } else {
            0.0
        }
    })
}

/// Loss value and gradients with the given dropout source.
pub fn loss_and_gradients_with(
    model: &TraitModel,
    x: ArrayView2<'_, f64>,
    targets: &Array2<f64>,
    mask: &Array2<f64>,
    coefs: &[f64],
    mut drop: DropoutMode<'_>,
) -> Result<(f64, Gradients)> {
    if x.nrows() == 0 {
        return Err(Error::EmptyInput("batch"));
    }
    let (pred, cache) = model.forward_cached(x, &mut drop)?;
    let value = loss_with_coefficients(&pred, targets, mask, coefs)?;
    let d_out = loss_gradient(&pred, targets, mask, coefs);
    Ok((value, model.backward(&cache, &pred, &d_out)))
}

/// Exact gradients of the weighted loss on a batch, with dropout off.
/// Frozen layers receive zero gradients.
pub fn gradients(model: &TraitModel, batch: &TrainingData, weights: &LossWeights) -> Result<Gradients> {
    let coefs = weights.coefficients(model.traits())?;
    let (_, g) = loss_and_gradients_with(model, batch.features.view(), &batch.targets, &batch.mask, &coefs, DropoutMode::Off)?;
    Ok(g)
}
