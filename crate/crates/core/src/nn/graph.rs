//! A small layer graph with explicit reverse-mode differentiation.
//!
//! Models are trees of [`Layer`]s evaluated against a [`ParamStore`]. The
//! forward pass returns a [`Tape`] that holds whatever each layer needs for
//! its backward pass; pooling indices recorded by exporting max-pool layers
//! are handed back to the caller so a decoder can consume them.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::kernels::{self, BnTrainCache, BN_MOMENTUM};
use super::params::{he_normal, Grads, ParamStore};
use super::pool::{pool_backward, pool_with_indices, unpool_backward, unpool_with_indices, PoolingRecord};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// Batch norm uses batch statistics and reports running-stat updates.
    Train,
    /// Batch norm uses stored running statistics; nothing is mutated.
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Layer {
    /// Stride-1, same-padded square convolution with bias.
    Conv { name: String, cin: usize, cout: usize, kernel: usize },
    BatchNorm { name: String, channels: usize },
    Relu,
    /// `export` pools push their record to the caller instead of keeping it
    /// private to the tape.
    MaxPool { window: usize, export: bool },
    /// Consumes the record of encoder stage `stage`.
    MaxUnpool { stage: usize },
    Linear { name: String, fin: usize, fout: usize },
    Flatten,
    GlobalAvgPool,
    /// `body(x) + shortcut(x)`; an empty shortcut is the identity.
    Residual { body: Vec<Layer>, shortcut: Vec<Layer> },
    /// Runs every branch on the same input and concatenates channels.
    Concat { branches: Vec<Vec<Layer>> },
    /// Saturates to `[0, 1]`.
    Clamp01,
}

pub(crate) enum Cache {
    Conv { input: Tensor },
    BnTrain(BnTrainCache),
    BnEval { input: Tensor },
    Relu { output: Tensor },
    Pool { record: PoolingRecord },
    Unpool { record: PoolingRecord },
    Linear { input: Tensor },
    Reshape { shape: Vec<usize> },
    Gap { shape: Vec<usize> },
    Residual { body: Tape, shortcut: Tape },
    Concat { tapes: Vec<Tape>, widths: Vec<usize> },
    Clamp { input: Tensor },
}

/// Per-layer caches of one forward pass.
pub struct Tape {
    caches: Vec<Cache>,
}

/// Side outputs of a forward pass.
#[derive(Default)]
pub struct ForwardCtx<'a> {
    /// Records produced by exporting max-pool layers, in execution order.
    pub records_out: Vec<PoolingRecord>,
    /// Records consumed by unpool layers.
    pub records_in: &'a [PoolingRecord],
    /// `(name, batch mean, batch unbiased var)` from training-mode batch norm.
    pub stat_updates: Vec<(String, Vec<f64>, Vec<f64>)>,
}

impl<'a> ForwardCtx<'a> {
    pub fn with_records(records_in: &'a [PoolingRecord]) -> Self {
        Self {
            records_in,
            ..Self::default()
        }
    }
}

impl Layer {
    pub fn conv(name: impl Into<String>, cin: usize, cout: usize, kernel: usize) -> Self {
        Layer::Conv { name: name.into(), cin, cout, kernel }
    }

    pub fn bn(name: impl Into<String>, channels: usize) -> Self {
        Layer::BatchNorm { name: name.into(), channels }
    }

    pub fn linear(name: impl Into<String>, fin: usize, fout: usize) -> Self {
        Layer::Linear { name: name.into(), fin, fout }
    }

    /// Adds this layer's freshly initialised parameters to `store`.
    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        match self {
            Layer::Conv { name, cin, cout, kernel } => {
                let fan_in = cin * kernel * kernel;
                store.insert_param(
                    format!("{name}.weight"),
                    he_normal(&[*cout, *cin, *kernel, *kernel], fan_in, rng),
                );
                store.insert_param(format!("{name}.bias"), Tensor::zeros(&[*cout]));
            }
            Layer::BatchNorm { name, channels } => {
                store.insert_param(format!("{name}.gamma"), Tensor::full(&[*channels], 1.0));
                store.insert_param(format!("{name}.beta"), Tensor::zeros(&[*channels]));
                store.insert_buffer(format!("{name}.running_mean"), Tensor::zeros(&[*channels]));
                store.insert_buffer(format!("{name}.running_var"), Tensor::full(&[*channels], 1.0));
            }
            Layer::Linear { name, fin, fout } => {
                store.insert_param(format!("{name}.weight"), he_normal(&[*fout, *fin], *fin, rng));
                store.insert_param(format!("{name}.bias"), Tensor::zeros(&[*fout]));
            }
            Layer::Residual { body, shortcut } => {
                init_all(body, store, rng);
                init_all(shortcut, store, rng);
            }
            Layer::Concat { branches } => {
                for b in branches {
                    init_all(b, store, rng);
                }
            }
            _ => {}
        }
    }

    fn forward(
        &self,
        params: &ParamStore,
        x: Tensor,
        mode: Mode,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<(Tensor, Cache)> {
        Ok(match self {
            Layer::Conv { name, .. } => {
                let y = kernels::conv2d_forward(
                    &x,
                    params.param(&format!("{name}.weight"))?,
                    params.param(&format!("{name}.bias"))?,
                )?;
                (y, Cache::Conv { input: x })
            }
            Layer::BatchNorm { name, .. } => {
                let gamma = params.param(&format!("{name}.gamma"))?;
                let beta = params.param(&format!("{name}.beta"))?;
                match mode {
                    Mode::Train => {
                        let (y, cache, mean, var) = kernels::batchnorm_train_forward(&x, gamma, beta)?;
                        ctx.stat_updates.push((name.clone(), mean, var));
                        (y, Cache::BnTrain(cache))
                    }
                    Mode::Eval => {
                        let y = kernels::batchnorm_eval_forward(
                            &x,
                            gamma,
                            beta,
                            params.buffer(&format!("{name}.running_mean"))?,
                            params.buffer(&format!("{name}.running_var"))?,
                        )?;
                        (y, Cache::BnEval { input: x })
                    }
                }
            }
            Layer::Relu => {
                let y = x.map(|v| v.max(0.0));
                (y.clone(), Cache::Relu { output: y })
            }
            Layer::MaxPool { window, export } => {
                let (y, record) = pool_with_indices(&x, *window)?;
                if *export {
                    ctx.records_out.push(record.clone());
                }
                (y, Cache::Pool { record })
            }
            Layer::MaxUnpool { stage } => {
                let record = ctx.records_in.get(*stage).ok_or_else(|| {
                    Error::contract(format!("no pooling record for stage {stage}"))
                })?;
                let y = unpool_with_indices(&x, record)?;
                (y, Cache::Unpool { record: record.clone() })
            }
            Layer::Linear { name, .. } => {
                let y = kernels::linear_forward(
                    &x,
                    params.param(&format!("{name}.weight"))?,
                    params.param(&format!("{name}.bias"))?,
                )?;
                (y, Cache::Linear { input: x })
            }
            Layer::Flatten => {
                let shape = x.shape().to_vec();
                let n = x.count();
                let per = x.item_len();
                (x.reshape(&[n, per])?, Cache::Reshape { shape })
            }
            Layer::GlobalAvgPool => {
                let (n, c, h, w) = x.dims4()?;
                let hw = (h * w) as f64;
                let data: Vec<f64> = x
                    .data()
                    .chunks_exact(h * w)
                    .map(|p| p.iter().sum::<f64>() / hw)
                    .collect();
                (Tensor::new(vec![n, c], data)?, Cache::Gap { shape: x.shape().to_vec() })
            }
            Layer::Residual { body, shortcut } => {
                let (mut y, body_tape) = run(body, params, x.clone(), mode, ctx)?;
                let (s, short_tape) = run(shortcut, params, x, mode, ctx)?;
                y.add_assign(&s)?;
                (y, Cache::Residual { body: body_tape, shortcut: short_tape })
            }
            Layer::Concat { branches } => {
                let mut outs = Vec::with_capacity(branches.len());
                let mut tapes = Vec::with_capacity(branches.len());
                for b in branches {
                    let (o, t) = run(b, params, x.clone(), mode, ctx)?;
                    outs.push(o);
                    tapes.push(t);
                }
                let widths = outs
                    .iter()
                    .map(|o| o.dims4().map(|d| d.1))
                    .collect::<Result<Vec<_>>>()?;
                (concat_channels(&outs)?, Cache::Concat { tapes, widths })
            }
            Layer::Clamp01 => {
                let y = x.map(|v| v.clamp(0.0, 1.0));
                (y, Cache::Clamp { input: x })
            }
        })
    }

    fn backward(
        &self,
        params: &ParamStore,
        cache: Cache,
        dy: Tensor,
        grads: &mut Grads,
        want: &dyn Fn(&str) -> bool,
    ) -> Result<Tensor> {
        match (self, cache) {
            (Layer::Conv { name, .. }, Cache::Conv { input }) => {
                let (wn, bn) = (format!("{name}.weight"), format!("{name}.bias"));
                let weight = params.param(&wn)?;
                let mut dw = want(&wn).then(|| grad_slot(grads, &wn, weight));
                let mut db = want(&bn).then(|| grad_slot(grads, &bn, params.param(&bn).unwrap()));
                let dx = kernels::conv2d_backward(&input, weight, &dy, dw.as_mut(), db.as_mut())?;
                store_grad(grads, wn, dw);
                store_grad(grads, bn, db);
                Ok(dx)
            }
            (Layer::BatchNorm { name, .. }, Cache::BnTrain(cache)) => {
                let (gn, bn) = (format!("{name}.gamma"), format!("{name}.beta"));
                let gamma = params.param(&gn)?;
                let mut dg = want(&gn).then(|| grad_slot(grads, &gn, gamma));
                let mut db = want(&bn).then(|| grad_slot(grads, &bn, gamma));
                let dx = kernels::batchnorm_train_backward(&cache, gamma, &dy, dg.as_mut(), db.as_mut())?;
                store_grad(grads, gn, dg);
                store_grad(grads, bn, db);
                Ok(dx)
            }
            (Layer::BatchNorm { name, .. }, Cache::BnEval { input }) => {
                let (gn, bn) = (format!("{name}.gamma"), format!("{name}.beta"));
                let gamma = params.param(&gn)?;
                let mut dg = want(&gn).then(|| grad_slot(grads, &gn, gamma));
                let mut db = want(&bn).then(|| grad_slot(grads, &bn, gamma));
                let dx = kernels::batchnorm_eval_backward(
                    &input,
                    gamma,
                    params.buffer(&format!("{name}.running_mean"))?,
                    params.buffer(&format!("{name}.running_var"))?,
                    &dy,
                    dg.as_mut(),
                    db.as_mut(),
                )?;
                store_grad(grads, gn, dg);
                store_grad(grads, bn, db);
                Ok(dx)
            }
            (Layer::Relu, Cache::Relu { output }) => {
                let mut dx = dy;
                for (g, y) in dx.data_mut().iter_mut().zip(output.data()) {
                    if *y <= 0.0 {
                        *g = 0.0;
                    }
                }
                Ok(dx)
            }
            (Layer::MaxPool { .. }, Cache::Pool { record }) => pool_backward(&dy, &record),
            (Layer::MaxUnpool { .. }, Cache::Unpool { record }) => unpool_backward(&dy, &record),
            (Layer::Linear { name, .. }, Cache::Linear { input }) => {
                let (wn, bn) = (format!("{name}.weight"), format!("{name}.bias"));
                let weight = params.param(&wn)?;
                let mut dw = want(&wn).then(|| grad_slot(grads, &wn, weight));
                let mut db = want(&bn).then(|| grad_slot(grads, &bn, params.param(&bn).unwrap()));
                let dx = kernels::linear_backward(&input, weight, &dy, dw.as_mut(), db.as_mut())?;
                store_grad(grads, wn, dw);
                store_grad(grads, bn, db);
                Ok(dx)
            }
            (Layer::Flatten, Cache::Reshape { shape }) => dy.reshape(&shape),
            (Layer::GlobalAvgPool, Cache::Gap { shape }) => {
                let hw = shape[2] * shape[3];
                let inv = 1.0 / hw as f64;
                let mut dx = Tensor::zeros(&shape);
                for (plane, g) in dx.data_mut().chunks_exact_mut(hw).zip(dy.data()) {
                    plane.fill(g * inv);
                }
                Ok(dx)
            }
            (Layer::Residual { body, shortcut }, Cache::Residual { body: bt, shortcut: st }) => {
                let mut dx = back(body, params, bt, dy.clone(), grads, want)?;
                let ds = back(shortcut, params, st, dy, grads, want)?;
                dx.add_assign(&ds)?;
                Ok(dx)
            }
            (Layer::Concat { branches }, Cache::Concat { tapes, widths }) => {
                let parts = split_channels(&dy, &widths)?;
                let mut dx: Option<Tensor> = None;
                for ((b, t), g) in branches.iter().zip(tapes).zip(parts) {
                    let d = back(b, params, t, g, grads, want)?;
                    match dx.as_mut() {
                        Some(acc) => acc.add_assign(&d)?,
                        None => dx = Some(d),
                    }
                }
                dx.ok_or_else(|| Error::contract("concat with no branches"))
            }
            (Layer::Clamp01, Cache::Clamp { input }) => {
                let mut dx = dy;
                for (g, x) in dx.data_mut().iter_mut().zip(input.data()) {
                    if !(0.0..=1.0).contains(x) {
                        *g = 0.0;
                    }
                }
                Ok(dx)
            }
            _ => Err(Error::contract("tape does not match layer graph")),
        }
    }
}

fn grad_slot(grads: &mut Grads, name: &str, like: &Tensor) -> Tensor {
    grads
        .remove(name)
        .unwrap_or_else(|| Tensor::zeros(like.shape()))
}

fn store_grad(grads: &mut Grads, name: String, g: Option<Tensor>) {
    if let Some(g) = g {
        grads.insert(name, g);
    }
}

fn concat_channels(parts: &[Tensor]) -> Result<Tensor> {
    let (n, _, h, w) = parts[0].dims4()?;
    let hw = h * w;
    let widths: Vec<usize> = parts.iter().map(|p| p.shape()[1]).collect();
    let total: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(n * total * hw);
    for b in 0..n {
        for (p, &c) in parts.iter().zip(&widths) {
            if p.shape()[0] != n || p.shape()[2] != h || p.shape()[3] != w {
                return Err(Error::shape("concat branches disagree on batch or spatial dims"));
            }
            out.extend_from_slice(&p.data()[b * c * hw..(b + 1) * c * hw]);
        }
    }
    Tensor::new(vec![n, total, h, w], out)
}

fn split_channels(x: &Tensor, widths: &[usize]) -> Result<Vec<Tensor>> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let mut parts: Vec<Vec<f64>> = widths.iter().map(|wd| Vec::with_capacity(n * wd * hw)).collect();
    for img in x.data().chunks_exact(c * hw) {
        let mut off = 0;
        for (p, &wd) in parts.iter_mut().zip(widths) {
            p.extend_from_slice(&img[off * hw..(off + wd) * hw]);
            off += wd;
        }
    }
    parts
        .into_iter()
        .zip(widths)
        .map(|(d, &wd)| Tensor::new(vec![n, wd, h, w], d))
        .collect()
}

pub fn init_all<R: Rng>(layers: &[Layer], store: &mut ParamStore, rng: &mut R) {
    for l in layers {
        l.init(store, rng);
    }
}

/// Forward pass through a layer sequence.
pub fn run(
    layers: &[Layer],
    params: &ParamStore,
    mut x: Tensor,
    mode: Mode,
    ctx: &mut ForwardCtx<'_>,
) -> Result<(Tensor, Tape)> {
    let mut caches = Vec::with_capacity(layers.len());
    for l in layers {
        let (y, c) = l.forward(params, x, mode, ctx)?;
        caches.push(c);
        x = y;
    }
    Ok((x, Tape { caches }))
}

/// Backward pass. Parameter gradients are accumulated into `grads` only for
/// names accepted by `want`; the input gradient is always returned.
pub fn back(
    layers: &[Layer],
    params: &ParamStore,
    tape: Tape,
    mut dy: Tensor,
    grads: &mut Grads,
    want: &dyn Fn(&str) -> bool,
) -> Result<Tensor> {
    if tape.caches.len() != layers.len() {
        return Err(Error::contract("tape length differs from layer count"));
    }
    for (l, c) in layers.iter().zip(tape.caches).rev() {
        dy = l.backward(params, c, dy, grads, want)?;
    }
    Ok(dy)
}

/// Folds training-mode batch statistics into the running buffers.
pub fn apply_stat_updates(
    store: &mut ParamStore,
    updates: &[(String, Vec<f64>, Vec<f64>)],
) -> Result<()> {
    for (name, mean, var) in updates {
        let rm = store.buffer_mut(&format!("{name}.running_mean"))?;
        for (r, m) in rm.data_mut().iter_mut().zip(mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        let rv = store.buffer_mut(&format!("{name}.running_var"))?;
        for (r, v) in rv.data_mut().iter_mut().zip(var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
        }
    }
    Ok(())
}
