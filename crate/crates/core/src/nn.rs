//! Masked feedforward networks.
//!
//! One engine serves every architecture: a trunk of (possibly masked) layers,
//! optional dense taps that read trunk activations and feed a concatenated
//! feature layer, and an output head. A TSE-Net's trunk mirrors the PGM core;
//! a dense FNN has no taps and its head reads the trunk top directly.
//!
//! Masked-off weights are kept at exactly `+0.0`: after initialisation, after
//! every optimiser step and in every gradient.

use std::fmt::Debug;

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::SplitSpec;
use crate::error::{Error, Result};
use crate::expansion::PgmCore;
use crate::rng;

/// Scalar type of a network. `f32` for training, `f64` for gradient checks.
pub trait Real:
    Float
    + NumAssign
    + FromPrimitive
    + ToPrimitive
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + Send
    + Sync
    + Debug
    + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

fn r<F: Real>(x: f64) -> F {
    F::from_f64(x).expect("representable")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    fn apply<F: Real>(self, z: F) -> F {
        match self {
            Activation::Relu => z.max(F::zero()),
            Activation::Sigmoid => sigmoid(z),
            Activation::Identity => z,
        }
    }

    fn derivative<F: Real>(self, z: F) -> F {
        match self {
            Activation::Relu => {
                if z > F::zero() {
                    F::one()
                } else {
                    F::zero()
                }
            }
            Activation::Sigmoid => {
                let s = sigmoid(z);
                s * (F::one() - s)
            }
            Activation::Identity => F::one(),
        }
    }

    fn is_nonlinear(self) -> bool {
        self != Activation::Identity
    }
}

fn sigmoid<F: Real>(z: F) -> F {
    if z >= F::zero() {
        F::one() / (F::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (F::one() + e)
    }
}

/// `a = act((W ∘ mask) x + b)`, weights stored out × in.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedLayer<F> {
    pub weights: Array2<F>,
    /// `None` means dense.
    pub mask: Option<Array2<bool>>,
    pub bias: Array1<F>,
    pub activation: Activation,
}

impl<F: Real> MaskedLayer<F> {
    pub fn dense(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            weights: Array2::zeros((out_dim, in_dim)),
            mask: None,
            bias: Array1::zeros(out_dim),
            activation,
        }
    }

    /// `inputs[u]` lists the inputs unit `u` is wired to.
    pub fn sparse(in_dim: usize, inputs: &[Vec<usize>], activation: Activation) -> Result<Self> {
        let mut mask = Array2::from_elem((inputs.len(), in_dim), false);
        for (u, row) in inputs.iter().enumerate() {
            if row.is_empty() {
                return Err(Error::Validation(format!("unit {u} has no inputs")));
            }
            for &i in row {
                if i >= in_dim {
                    return Err(Error::Dimension(format!("unit {u} reads input {i} of {in_dim}")));
                }
                mask[[u, i]] = true;
            }
        }
        Ok(Self {
            weights: Array2::zeros((inputs.len(), in_dim)),
            mask: Some(mask),
            bias: Array1::zeros(inputs.len()),
            activation,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn is_on(&self, o: usize, i: usize) -> bool {
        self.mask.as_ref().is_none_or(|m| m[[o, i]])
    }

    /// Live weights.
    pub fn nnz(&self) -> usize {
        self.mask
            .as_ref()
            .map_or(self.weights.len(), |m| m.iter().filter(|&&b| b).count())
    }

    pub fn param_count(&self) -> usize {
        self.nnz() + self.out_dim()
    }

    /// Off-mask entries set to `+0.0` by assignment.
    pub fn enforce_mask(&mut self) {
        if let Some(m) = &self.mask {
            Zip::from(&mut self.weights).and(m).for_each(|w, &on| {
                if !on {
                    *w = F::zero();
                }
            });
        }
    }

    /// True when every off-mask weight is bitwise `+0.0`.
    pub fn mask_is_clean(&self) -> bool {
        self.mask.as_ref().is_none_or(|m| {
            Zip::from(&self.weights).and(m).fold(true, |ok, &w, &on| {
                ok && (on || w.to_f64().is_some_and(|v| v.to_bits() == 0))
            })
        })
    }

    /// Uniform ±sqrt(6 / (fan_in + fan_out)) per unit, using mask fan-in and
    /// the mean mask fan-out for sparse layers. Biases start at zero.
    fn init(&mut self, seed: u64, index: usize) {
        let mut g = rng::stream(seed, &[0x1417, index as u64]);
        let fan_out = self.nnz() as f64 / self.in_dim().max(1) as f64;
        for o in 0..self.out_dim() {
            let fan_in = (0..self.in_dim()).filter(|&i| self.is_on(o, i)).count() as f64;
            let limit = (6.0 / (fan_in + fan_out)).sqrt();
            for i in 0..self.in_dim() {
                let w: f64 = g.gen_range(-limit..limit);
                self.weights[[o, i]] = if self.is_on(o, i) { r(w) } else { F::zero() };
            }
        }
        self.bias.fill(F::zero());
    }

    pub fn cast<G: Real>(&self) -> MaskedLayer<G> {
        MaskedLayer {
            weights: self.weights.mapv(|w| r(w.to_f64().expect("finite"))),
            mask: self.mask.clone(),
            bias: self.bias.mapv(|b| r(b.to_f64().expect("finite"))),
            activation: self.activation,
        }
    }

    fn pre_activation(&self, x: ArrayView2<F>) -> Array2<F> {
        x.dot(&self.weights.t()) + &self.bias
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Head {
    /// One logit per class.
    SoftmaxCe,
    /// A single logit; two classes only.
    SigmoidBce,
}

impl Head {
    pub fn for_classes(n_classes: usize) -> Head {
        if n_classes == 2 {
            Head::SigmoidBce
        } else {
            Head::SoftmaxCe
        }
    }

    pub fn outputs(self, n_classes: usize) -> usize {
        match self {
            Head::SoftmaxCe => n_classes,
            Head::SigmoidBce => 1,
        }
    }
}

/// A dense feature group reading trunk activation `source` (0 = input).
#[derive(Debug, Clone, PartialEq)]
pub struct Tap<F> {
    pub source: usize,
    pub layer: MaskedLayer<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Net<F> {
    pub label: String,
    pub trunk: Vec<MaskedLayer<F>>,
    /// Empty: the head reads the trunk top.
    pub taps: Vec<Tap<F>>,
    pub output: MaskedLayer<F>,
    pub head: Head,
    pub n_classes: usize,
}

/// Where to read hidden activations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Site {
    /// Output of trunk layer `i` (0-based).
    Trunk(usize),
    Tap(usize),
    Logits,
}

impl std::str::FromStr for Site {
    type Err = Error;

    /// `trunk:I`, `tap:I` or `logits`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad site `{s}`; expected trunk:I, tap:I or logits"));
        if s == "logits" {
            return Ok(Site::Logits);
        }
        let (kind, idx) = s.split_once(':').ok_or_else(bad)?;
        let idx: usize = idx.parse().map_err(|_| bad())?;
        match kind {
            "trunk" => Ok(Site::Trunk(idx)),
            "tap" => Ok(Site::Tap(idx)),
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    Eval,
    Train { dropout: f64, seed: u64 },
}

/// Everything the backward pass needs.
#[derive(Debug, Clone)]
pub struct Forward<F> {
    /// `trunk_a[0]` is the input batch.
    trunk_a: Vec<Array2<F>>,
    trunk_z: Vec<Array2<F>>,
    trunk_drop: Vec<Option<Array2<F>>>,
    tap_a: Vec<Array2<F>>,
    tap_z: Vec<Array2<F>>,
    tap_drop: Vec<Option<Array2<F>>>,
    features: Array2<F>,
    pub logits: Array2<F>,
}

impl<F: Real> Forward<F> {
    pub fn site(&self, site: Site) -> ArrayView2<'_, F> {
        match site {
            Site::Trunk(i) => self.trunk_a[i + 1].view(),
            Site::Tap(t) => self.tap_a[t].view(),
            Site::Logits => self.logits.view(),
        }
    }

    /// Class probabilities, one row per case.
    pub fn probabilities(&self, head: Head) -> Array2<F> {
        match head {
            Head::SigmoidBce => {
                let mut p = Array2::zeros((self.logits.nrows(), 2));
                for (i, &z) in self.logits.column(0).iter().enumerate() {
                    let s = sigmoid(z);
                    p[[i, 0]] = F::one() - s;
                    p[[i, 1]] = s;
                }
                p
            }
            Head::SoftmaxCe => {
                let mut p = self.logits.clone();
                for mut row in p.rows_mut() {
                    let m = row.fold(F::neg_infinity(), |a, &b| a.max(b));
                    row.mapv_inplace(|z| (z - m).exp());
                    let total = row.sum();
                    row.mapv_inplace(|e| e / total);
                }
                p
            }
        }
    }
}

/// Gradients in [`Net::layers`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<F> {
    pub weights: Vec<Array2<F>>,
    pub bias: Vec<Array1<F>>,
}

fn dropout_mask<F: Real>(shape: (usize, usize), rate: f64, seed: u64, index: usize) -> Array2<F> {
    let mut g = rng::stream(seed, &[0xD409, index as u64]);
    let keep: F = r(1.0 / (1.0 - rate));
    Array2::from_shape_simple_fn(shape, || if g.gen_bool(1.0 - rate) { keep } else { F::zero() })
}

impl<F: Real> Net<F> {
    pub fn input_dim(&self) -> usize {
        self.trunk.first().map_or_else(
            || self.taps.first().map_or(self.output.in_dim(), |t| t.layer.in_dim()),
            MaskedLayer::in_dim,
        )
    }

    /// Trunk, then taps, then the output layer.
    pub fn layers(&self) -> Vec<&MaskedLayer<F>> {
        self.trunk
            .iter()
            .chain(self.taps.iter().map(|t| &t.layer))
            .chain(std::iter::once(&self.output))
            .collect()
    }

    pub fn layers_mut(&mut self) -> Vec<&mut MaskedLayer<F>> {
        self.trunk
            .iter_mut()
            .chain(self.taps.iter_mut().map(|t| &mut t.layer))
            .chain(std::iter::once(&mut self.output))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|l| l.param_count()).sum()
    }

    pub fn bias_count(&self) -> usize {
        self.layers().iter().map(|l| l.out_dim()).sum()
    }

    pub fn mask_is_clean(&self) -> bool {
        self.layers().iter().all(|l| l.mask_is_clean())
    }

    pub fn cast<G: Real>(&self) -> Net<G> {
        Net {
            label: self.label.clone(),
            trunk: self.trunk.iter().map(MaskedLayer::cast).collect(),
            taps: self
                .taps
                .iter()
                .map(|t| Tap {
                    source: t.source,
                    layer: t.layer.cast(),
                })
                .collect(),
            output: self.output.cast(),
            head: self.head,
            n_classes: self.n_classes,
        }
    }

    fn init(&mut self, seed: u64) {
        for (i, l) in self.layers_mut().into_iter().enumerate() {
            l.init(seed, i);
        }
    }

    /// Checks that every layer's input width matches what feeds it.
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::Validation(format!(
                "need at least 2 classes, got {}",
                self.n_classes
            )));
        }
        if self.head == Head::SigmoidBce && self.n_classes != 2 {
            return Err(Error::Validation("sigmoid head needs exactly 2 classes".into()));
        }
        let mut widths = vec![self.input_dim()];
        for (i, l) in self.trunk.iter().enumerate() {
            if l.in_dim() != widths[i] {
                return Err(Error::Dimension(format!(
                    "trunk layer {i} expects {} inputs, gets {}",
                    l.in_dim(),
                    widths[i]
                )));
            }
            widths.push(l.out_dim());
        }
        let mut feat = 0;
        for (t, tap) in self.taps.iter().enumerate() {
            let w = *widths
                .get(tap.source)
                .ok_or_else(|| Error::Dimension(format!("tap {t} reads missing trunk level {}", tap.source)))?;
            if tap.layer.in_dim() != w {
                return Err(Error::Dimension(format!(
                    "tap {t} expects {} inputs, gets {w}",
                    tap.layer.in_dim()
                )));
            }
            feat += tap.layer.out_dim();
        }
        if self.taps.is_empty() {
            feat = *widths.last().expect("input width");
        }
        if self.output.in_dim() != feat || self.output.out_dim() != self.head.outputs(self.n_classes) {
            return Err(Error::Dimension(
                "output layer does not match the feature layer or head".into(),
            ));
        }
        Ok(())
    }

    pub fn forward(&self, x: ArrayView2<F>, mode: Mode) -> Result<Forward<F>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "batch has {} columns, network expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        let mut index = 0;
        let mut run = |layer: &MaskedLayer<F>, input: ArrayView2<F>| {
            let z = layer.pre_activation(input);
            let mut a = z.mapv(|v| layer.activation.apply(v));
            let drop = match mode {
                Mode::Train { dropout, seed } if dropout > 0.0 && layer.activation.is_nonlinear() => {
                    let m = dropout_mask::<F>(a.dim(), dropout, seed, index);
                    a *= &m;
                    Some(m)
                }
                _ => None,
            };
            index += 1;
            (z, a, drop)
        };
        let mut trunk_a = vec![x.to_owned()];
        let (mut trunk_z, mut trunk_drop) = (Vec::new(), Vec::new());
        for l in &self.trunk {
            let (z, a, d) = run(l, trunk_a.last().expect("input").view());
            trunk_z.push(z);
            trunk_a.push(a);
            trunk_drop.push(d);
        }
        let (mut tap_a, mut tap_z, mut tap_drop) = (Vec::new(), Vec::new(), Vec::new());
        for t in &self.taps {
            let (z, a, d) = run(&t.layer, trunk_a[t.source].view());
            tap_z.push(z);
            tap_a.push(a);
            tap_drop.push(d);
        }
        let features = if self.taps.is_empty() {
            trunk_a.last().expect("input").clone()
        } else {
            let views: Vec<ArrayView2<F>> = tap_a.iter().map(|a| a.view()).collect();
            ndarray::concatenate(Axis(1), &views).map_err(|e| Error::Dimension(e.to_string()))?
        };
        let logits = self.output.pre_activation(features.view());
        Ok(Forward {
            trunk_a,
            trunk_z,
            trunk_drop,
            tap_a,
            tap_z,
            tap_drop,
            features,
            logits,
        })
    }

    /// Mean loss over the batch.
    pub fn loss(&self, fwd: &Forward<F>, labels: &[usize]) -> Result<f64> {
        Ok(self.loss_and_dlogits(fwd, labels)?.0)
    }

    fn loss_and_dlogits(&self, fwd: &Forward<F>, labels: &[usize]) -> Result<(f64, Array2<F>)> {
        let n = fwd.logits.nrows();
        if labels.len() != n || n == 0 {
            return Err(Error::Dimension(format!("{} labels for a batch of {n}", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= self.n_classes) {
            return Err(Error::Validation(format!(
                "label {bad} with {} classes",
                self.n_classes
            )));
        }
        let inv_n: F = r(1.0 / n as f64);
        let mut total = 0.0;
        let mut d = Array2::zeros(fwd.logits.dim());
        match self.head {
            Head::SigmoidBce => {
                for (i, &y) in labels.iter().enumerate() {
                    let z = fwd.logits[[i, 0]];
                    let t: F = r(y as f64);
                    let zf = z.to_f64().expect("finite");
                    total += zf.max(0.0) - zf * y as f64 + (-zf.abs()).exp().ln_1p();
                    d[[i, 0]] = (sigmoid(z) - t) * inv_n;
                }
            }
            Head::SoftmaxCe => {
                let p = fwd.probabilities(Head::SoftmaxCe);
                for (i, &y) in labels.iter().enumerate() {
                    let row = fwd.logits.row(i);
                    let m = row.fold(F::neg_infinity(), |a, &b| a.max(b));
                    let lse = m.to_f64().expect("finite")
                        + row
                            .iter()
                            .map(|&z| (z - m).to_f64().expect("finite").exp())
                            .sum::<f64>()
                            .ln();
                    total += lse - row[y].to_f64().expect("finite");
                    for k in 0..self.n_classes {
                        let onehot = if k == y { F::one() } else { F::zero() };
                        d[[i, k]] = (p[[i, k]] - onehot) * inv_n;
                    }
                }
            }
        }
        Ok((total / n as f64, d))
    }

    /// Mean loss and its exact gradient; off-mask weight gradients are zero.
    pub fn backward(&self, fwd: &Forward<F>, labels: &[usize]) -> Result<(f64, Grads<F>)> {
        let (loss, dlogits) = self.loss_and_dlogits(fwd, labels)?;
        let n_trunk = self.trunk.len();
        let n_layers = n_trunk + self.taps.len() + 1;
        let mut gw: Vec<Option<Array2<F>>> = vec![None; n_layers];
        let mut gb: Vec<Option<Array1<F>>> = vec![None; n_layers];

        gw[n_layers - 1] = Some(dlogits.t().dot(&fwd.features));
        gb[n_layers - 1] = Some(dlogits.sum_axis(Axis(0)));
        let dfeat = dlogits.dot(&self.output.weights);

        let mut d_trunk: Vec<Option<Array2<F>>> = vec![None; n_trunk + 1];
        let add = |slot: &mut Option<Array2<F>>, g: Array2<F>| match slot {
            Some(acc) => *acc += &g,
            None => *slot = Some(g),
        };
        if self.taps.is_empty() {
            d_trunk[n_trunk] = Some(dfeat);
        } else {
            let mut off = 0;
            for (t, tap) in self.taps.iter().enumerate() {
                let w = tap.layer.out_dim();
                let da = dfeat.slice(s![.., off..off + w]).to_owned();
                off += w;
                let (dw, db, din) = layer_backward(
                    &tap.layer,
                    &fwd.tap_z[t],
                    fwd.tap_drop[t].as_ref(),
                    &fwd.trunk_a[tap.source],
                    da,
                    tap.source > 0,
                );
                gw[n_trunk + t] = Some(dw);
                gb[n_trunk + t] = Some(db);
                if let Some(din) = din {
                    add(&mut d_trunk[tap.source], din);
                }
            }
        }
        for i in (0..n_trunk).rev() {
            let da = d_trunk[i + 1]
                .take()
                .unwrap_or_else(|| Array2::zeros(fwd.trunk_a[i + 1].dim()));
            let (dw, db, din) = layer_backward(
                &self.trunk[i],
                &fwd.trunk_z[i],
                fwd.trunk_drop[i].as_ref(),
                &fwd.trunk_a[i],
                da,
                i > 0,
            );
            gw[i] = Some(dw);
            gb[i] = Some(db);
            if let Some(din) = din {
                add(&mut d_trunk[i], din);
            }
        }
        Ok((
            loss,
            Grads {
                weights: gw.into_iter().map(|g| g.expect("every layer visited")).collect(),
                bias: gb.into_iter().map(|g| g.expect("every layer visited")).collect(),
            },
        ))
    }

    /// Eval-mode activations at `site` for the given rows, in row order.
    pub fn activations(&self, x: &Array2<F>, rows: &[usize], site: Site) -> Result<Array2<F>> {
        let mut parts = Vec::new();
        for chunk in rows.chunks(EVAL_BATCH) {
            let xb = x.select(Axis(0), chunk);
            parts.push(self.forward(xb.view(), Mode::Eval)?.site(site).to_owned());
        }
        let views: Vec<ArrayView2<F>> = parts.iter().map(|p| p.view()).collect();
        if views.is_empty() {
            return Err(Error::Validation("no rows to evaluate".into()));
        }
        ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Dimension(e.to_string()))
    }
}

const EVAL_BATCH: usize = 1024;

fn layer_backward<F: Real>(
    layer: &MaskedLayer<F>,
    z: &Array2<F>,
    drop: Option<&Array2<F>>,
    input: &Array2<F>,
    mut dz: Array2<F>,
    need_input: bool,
) -> (Array2<F>, Array1<F>, Option<Array2<F>>) {
    if let Some(m) = drop {
        dz *= m;
    }
    let act = layer.activation;
    Zip::from(&mut dz).and(z).for_each(|d, &zv| *d *= act.derivative(zv));
    let mut dw = dz.t().dot(input);
    if let Some(m) = &layer.mask {
        Zip::from(&mut dw).and(m).for_each(|g, &on| {
            if !on {
                *g = F::zero();
            }
        });
    }
    let db = dz.sum_axis(Axis(0));
    let din = need_input.then(|| dz.dot(&layer.weights));
    (dw, db, din)
}

/// Feature-layer widths of a TSE-Net.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureWidths {
    /// Dense group on the core's top layer.
    pub top: usize,
    /// Each skip group.
    pub skip: usize,
}

impl Default for FeatureWidths {
    fn default() -> Self {
        Self { top: 128, skip: 32 }
    }
}

fn tse_like<F: Real>(
    core: &PgmCore,
    widths: FeatureWidths,
    n_classes: usize,
    head: Head,
    skips: bool,
    seed: u64,
) -> Result<Net<F>> {
    core.validate()?;
    if widths.top == 0 || (skips && widths.skip == 0) {
        return Err(Error::Config("feature widths must be at least 1".into()));
    }
    let sizes = &core.layer_sizes;
    let depth = sizes.len();
    let mut trunk = Vec::with_capacity(depth - 1);
    for (l, ups) in core.adjacency.iter().enumerate() {
        let inputs: Vec<Vec<usize>> = ups.iter().map(|es| es.iter().map(|e| e.lower).collect()).collect();
        trunk.push(MaskedLayer::sparse(sizes[l], &inputs, Activation::Relu)?);
    }
    let mut taps = vec![Tap {
        source: depth - 1,
        layer: MaskedLayer::dense(sizes[depth - 1], widths.top, Activation::Relu),
    }];
    if skips {
        for (l, &size) in sizes.iter().enumerate().take(depth - 1) {
            taps.push(Tap {
                source: l,
                layer: MaskedLayer::dense(size, widths.skip, Activation::Relu),
            });
        }
    }
    let feat: usize = taps.iter().map(|t| t.layer.out_dim()).sum();
    let mut net = Net {
        label: if skips { "tse".into() } else { "backbone".into() },
        trunk,
        taps,
        output: MaskedLayer::dense(feat, head.outputs(n_classes), Activation::Identity),
        head,
        n_classes,
    };
    net.validate()?;
    net.init(seed);
    Ok(net)
}

/// Backbone (core mirror + top feature group) plus one skip group per
/// non-top core layer.
pub fn build_tse_net<F: Real>(
    core: &PgmCore,
    widths: FeatureWidths,
    n_classes: usize,
    head: Head,
    seed: u64,
) -> Result<Net<F>> {
    tse_like(core, widths, n_classes, head, true, seed)
}

/// TSE-Net without skip-paths.
pub fn build_backbone<F: Real>(
    core: &PgmCore,
    widths: FeatureWidths,
    n_classes: usize,
    head: Head,
    seed: u64,
) -> Result<Net<F>> {
    tse_like(core, widths, n_classes, head, false, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Shape {
    Rectangle,
    /// Width halves per layer (floor, at least 16).
    Conic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridPoint {
    pub units: usize,
    pub layers: usize,
    pub shape: Shape,
}

impl GridPoint {
    pub fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.layers);
        let mut u = self.units;
        for _ in 0..self.layers {
            w.push(u);
            if self.shape == Shape::Conic {
                u = (u / 2).max(16);
            }
        }
        w
    }

    pub fn label(&self) -> String {
        let shape = match self.shape {
            Shape::Rectangle => "rectangle",
            Shape::Conic => "conic",
        };
        format!("fnn-{}x{}-{shape}", self.units, self.layers)
    }
}

/// All distinct points; one-layer conic nets duplicate rectangles and are skipped.
pub fn fnn_grid(units: &[usize], max_layers: usize) -> Vec<GridPoint> {
    let mut out = Vec::new();
    for shape in [Shape::Rectangle, Shape::Conic] {
        for &u in units {
            for layers in 1..=max_layers {
                if shape == Shape::Conic && layers == 1 {
                    continue;
                }
                out.push(GridPoint {
                    units: u,
                    layers,
                    shape,
                });
            }
        }
    }
    out
}

/// Units {512, 1024, 2048} × layers 1..=4 × {rectangle, conic}.
pub fn standard_grid() -> Vec<GridPoint> {
    fnn_grid(&[512, 1024, 2048], 4)
}

pub fn build_fnn<F: Real>(point: GridPoint, in_dim: usize, n_classes: usize, head: Head, seed: u64) -> Result<Net<F>> {
    if point.units == 0 || !(1..=4).contains(&point.layers) || in_dim == 0 {
        return Err(Error::Config(format!(
            "invalid grid point {point:?} for {in_dim} inputs"
        )));
    }
    let mut trunk = Vec::new();
    let mut prev = in_dim;
    for w in point.widths() {
        trunk.push(MaskedLayer::dense(prev, w, Activation::Relu));
        prev = w;
    }
    let mut net = Net {
        label: point.label(),
        trunk,
        taps: Vec::new(),
        output: MaskedLayer::dense(prev, head.outputs(n_classes), Activation::Identity),
        head,
        n_classes,
    };
    net.validate()?;
    net.init(seed);
    Ok(net)
}

/// Keeps the `target - biases` largest-magnitude live weights over all layers;
/// equal magnitudes keep the lower flat index (layer order, then row-major).
pub fn magnitude_prune<F: Real>(net: &Net<F>, target: usize) -> Result<Net<F>> {
    let biases = net.bias_count();
    let current = net.param_count();
    if target < biases {
        return Err(Error::Validation(format!(
            "target {target} is below the {biases} biases"
        )));
    }
    if target > current {
        return Err(Error::Validation(format!(
            "target {target} exceeds the current {current} parameters"
        )));
    }
    let keep = target - biases;
    let mut live: Vec<(f64, usize)> = Vec::with_capacity(current - biases);
    let mut offset = 0;
    for l in net.layers() {
        for ((o, i), w) in l.weights.indexed_iter() {
            if l.is_on(o, i) {
                live.push((w.to_f64().expect("finite").abs(), offset + o * l.in_dim() + i));
            }
        }
        offset += l.weights.len();
    }
    let by_rank = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
    if keep < live.len() {
        live.select_nth_unstable_by(keep, by_rank);
        live.truncate(keep);
    }
    let mut flags: Vec<usize> = live.into_iter().map(|(_, f)| f).collect();
    flags.sort_unstable();
    let mut out = net.clone();
    out.label = format!("{}-pruned", net.label);
    let mut offset = 0;
    let mut cursor = 0;
    for l in out.layers_mut() {
        let (rows, cols) = l.weights.dim();
        let mut mask = Array2::from_elem((rows, cols), false);
        while cursor < flags.len() && flags[cursor] < offset + rows * cols {
            let f = flags[cursor] - offset;
            mask[[f / cols, f % cols]] = true;
            cursor += 1;
        }
        offset += rows * cols;
        l.mask = Some(mask);
        l.enforce_mask();
    }
    debug_assert_eq!(out.param_count(), target);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub dropout_rate: f64,
    pub seed: u64,
    /// `None` picks sigmoid for two classes, softmax otherwise.
    pub head: Option<Head>,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 64,
            epochs: 50,
            dropout_rate: 0.5,
            seed: 0,
            head: None,
            patience: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let rate_ok = |x: f64| x > 0.0 && x.is_finite();
        if !rate_ok(self.learning_rate) || !rate_ok(self.epsilon) {
            return Err(Error::Config("learning_rate and epsilon must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("beta1 and beta2 must be in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        Ok(())
    }

    pub fn head_for(&self, n_classes: usize) -> Head {
        self.head.unwrap_or_else(|| Head::for_classes(n_classes))
    }
}

/// First and second moments per layer, [`Net::layers`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    pub step: u64,
    pub m_w: Vec<Array2<F>>,
    pub v_w: Vec<Array2<F>>,
    pub m_b: Vec<Array1<F>>,
    pub v_b: Vec<Array1<F>>,
}

impl<F: Real> AdamState<F> {
    pub fn new(net: &Net<F>) -> Self {
        let layers = net.layers();
        Self {
            step: 0,
            m_w: layers.iter().map(|l| Array2::zeros(l.weights.dim())).collect(),
            v_w: layers.iter().map(|l| Array2::zeros(l.weights.dim())).collect(),
            m_b: layers.iter().map(|l| Array1::zeros(l.out_dim())).collect(),
            v_b: layers.iter().map(|l| Array1::zeros(l.out_dim())).collect(),
        }
    }
}

/// Bias-corrected Adam; masked weights are re-zeroed afterwards.
pub fn adam_step<F: Real>(
    net: &mut Net<F>,
    grads: &Grads<F>,
    state: &mut AdamState<F>,
    cfg: &TrainConfig,
) -> Result<()> {
    let layers = net.layers_mut();
    if grads.weights.len() != layers.len() || state.m_w.len() != layers.len() {
        return Err(Error::Dimension("optimizer state does not match the network".into()));
    }
    state.step += 1;
    let t = state.step as f64;
    let (b1, b2): (F, F) = (r(cfg.beta1), r(cfg.beta2));
    let c1: F = r(1.0 - cfg.beta1.powf(t));
    let c2: F = r(1.0 - cfg.beta2.powf(t));
    let (lr, eps): (F, F) = (r(cfg.learning_rate), r(cfg.epsilon));
    let update = |p: &mut F, g: F, m: &mut F, v: &mut F| {
        *m = b1 * *m + (F::one() - b1) * g;
        *v = b2 * *v + (F::one() - b2) * g * g;
        let mhat = *m / c1;
        let vhat = *v / c2;
        *p -= lr * mhat / (vhat.sqrt() + eps);
    };
    for (i, l) in layers.into_iter().enumerate() {
        if grads.weights[i].dim() != l.weights.dim() || grads.bias[i].len() != l.out_dim() {
            return Err(Error::Dimension(format!("gradient shape mismatch at layer {i}")));
        }
        Zip::from(&mut l.weights)
            .and(&grads.weights[i])
            .and(&mut state.m_w[i])
            .and(&mut state.v_w[i])
            .for_each(|p, &g, m, v| update(p, g, m, v));
        Zip::from(&mut l.bias)
            .and(&grads.bias[i])
            .and(&mut state.m_b[i])
            .and(&mut state.v_b[i])
            .for_each(|p, &g, m, v| update(p, g, m, v));
        l.enforce_mask();
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    /// Only for a sigmoid head.
    pub auc: Option<f64>,
    pub loss: f64,
    pub param_count: usize,
}

impl Metrics {
    pub fn binary_auc(&self) -> Result<f64> {
        self.auc
            .ok_or_else(|| Error::Validation("AUC needs a two-class sigmoid head".into()))
    }

    /// AUC when available, else accuracy. Higher is better.
    pub fn score(&self) -> f64 {
        self.auc.unwrap_or(self.accuracy)
    }
}

/// Mann–Whitney AUC; tied scores share their mean rank.
pub fn auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::Dimension("scores and labels differ in length".into()));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Validation("AUC needs both classes".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 averaged
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * idx[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

pub fn evaluate<F: Real>(net: &Net<F>, x: &Array2<F>, labels: &[usize], rows: &[usize]) -> Result<Metrics> {
    if rows.is_empty() {
        return Err(Error::Validation("cannot evaluate an empty split".into()));
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    let mut scores = Vec::with_capacity(rows.len());
    for chunk in rows.chunks(EVAL_BATCH) {
        let xb = x.select(Axis(0), chunk);
        let yb: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
        let fwd = net.forward(xb.view(), Mode::Eval)?;
        loss += net.loss(&fwd, &yb)? * chunk.len() as f64;
        for (i, &y) in yb.iter().enumerate() {
            let pred = match net.head {
                Head::SigmoidBce => {
                    let z = fwd.logits[[i, 0]].to_f64().expect("finite");
                    scores.push(z);
                    usize::from(z > 0.0)
                }
                Head::SoftmaxCe => argmax(fwd.logits.row(i).iter().copied()),
            };
            correct += usize::from(pred == y);
        }
    }
    let auc = match net.head {
        Head::SigmoidBce => {
            let pos: Vec<bool> = rows.iter().map(|&i| labels[i] == 1).collect();
            auc(&scores, &pos).ok()
        }
        Head::SoftmaxCe => None,
    };
    Ok(Metrics {
        accuracy: correct as f64 / rows.len() as f64,
        auc,
        loss: loss / rows.len() as f64,
        param_count: net.param_count(),
    })
}

/// First maximum.
fn argmax<F: Real>(it: impl Iterator<Item = F>) -> usize {
    let mut best = (0, F::neg_infinity());
    for (i, v) in it.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Training-split metrics before any update.
    pub initial: Metrics,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose weights were kept.
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

/// Resumable training state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<F> {
    pub net: Net<F>,
    pub adam: AdamState<F>,
    pub best: Net<F>,
    pub best_metrics: Option<Metrics>,
    pub stale: usize,
    pub report: TrainReport,
}

impl<F: Real> TrainState<F> {
    pub fn start(net: Net<F>, x: &Array2<F>, labels: &[usize], split: &SplitSpec) -> Result<Self> {
        let initial = evaluate(&net, x, labels, &split.train)?;
        Ok(Self {
            adam: AdamState::new(&net),
            best: net.clone(),
            net,
            best_metrics: None,
            stale: 0,
            report: TrainReport {
                initial,
                epochs: Vec::new(),
                best_epoch: None,
                stopped_early: false,
            },
        })
    }

    pub fn epochs_done(&self) -> usize {
        self.report.epochs.len()
    }

    pub fn finished(&self, cfg: &TrainConfig) -> bool {
        self.report.stopped_early || self.epochs_done() >= cfg.epochs
    }

    /// One pass over the shuffled training split, then validation.
    pub fn epoch(&mut self, x: &Array2<F>, labels: &[usize], split: &SplitSpec, cfg: &TrainConfig) -> Result<()> {
        let e = self.epochs_done();
        let mut order = split.train.clone();
        order.shuffle(&mut rng::stream(cfg.seed, &[0xE90C, e as u64]));
        let mut total = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let xb = x.select(Axis(0), chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let mode = Mode::Train {
                dropout: cfg.dropout_rate,
                seed: rng::derive(cfg.seed, &[e as u64, b as u64]),
            };
            let fwd = self.net.forward(xb.view(), mode)?;
            let (loss, g) = self.net.backward(&fwd, &yb)?;
            adam_step(&mut self.net, &g, &mut self.adam, cfg)?;
            total += loss * chunk.len() as f64;
        }
        let validation = evaluate(&self.net, x, labels, &split.validation)?;
        let better = self.best_metrics.is_none_or(|b| {
            validation.score() > b.score() || (validation.score() == b.score() && validation.loss < b.loss)
        });
        if better {
            self.best = self.net.clone();
            self.best_metrics = Some(validation);
            self.report.best_epoch = Some(e);
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        log::debug!(
            "{} epoch {e}: train loss {:.4}, validation score {:.4}",
            self.net.label,
            total / order.len() as f64,
            validation.score()
        );
        self.report.epochs.push(EpochRecord {
            epoch: e,
            train_loss: total / order.len() as f64,
            validation,
        });
        if self.stale >= cfg.patience {
            self.report.stopped_early = true;
        }
        Ok(())
    }
}

fn check_inputs<F: Real>(
    net: &Net<F>,
    x: &Array2<F>,
    labels: &[usize],
    split: &SplitSpec,
    cfg: &TrainConfig,
) -> Result<()> {
    cfg.validate()?;
    net.validate()?;
    if split.train.is_empty() || split.validation.is_empty() {
        return Err(Error::Validation(
            "training and validation splits must be non-empty".into(),
        ));
    }
    if labels.len() != x.nrows() {
        return Err(Error::Dimension(format!(
            "{} labels for {} rows",
            labels.len(),
            x.nrows()
        )));
    }
    let all = split.train.iter().chain(&split.validation).chain(&split.test);
    if all.clone().any(|&i| i >= x.nrows()) {
        return Err(Error::Dimension("split index out of range".into()));
    }
    Ok(())
}

/// Trains until the epoch budget or early stop and returns the
/// best-validation snapshot.
pub fn train<F: Real>(
    net: Net<F>,
    x: &Array2<F>,
    labels: &[usize],
    split: &SplitSpec,
    cfg: &TrainConfig,
) -> Result<(Net<F>, TrainReport)> {
    check_inputs(&net, x, labels, split, cfg)?;
    let mut state = TrainState::start(net, x, labels, split)?;
    resume(&mut state, x, labels, split, cfg, None)?;
    Ok((state.best, state.report))
}

/// Continues `state`, stopping after `max_epochs` more epochs when given.
pub fn resume<F: Real>(
    state: &mut TrainState<F>,
    x: &Array2<F>,
    labels: &[usize],
    split: &SplitSpec,
    cfg: &TrainConfig,
    max_epochs: Option<usize>,
) -> Result<()> {
    check_inputs(&state.net, x, labels, split, cfg)?;
    let mut ran = 0;
    while !state.finished(cfg) && max_epochs.is_none_or(|m| ran < m) {
        state.epoch(x, labels, split, cfg)?;
        ran += 1;
    }
    Ok(())
}
