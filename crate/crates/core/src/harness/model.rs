//! Small sequential models built from convolutions, normalization layers,
//! ReLU, max pooling and a linear head.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::optim::sgd_step;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::norm::{Mode, NormConfig, NormLayer, UbnParams};
use crate::tensor::Tensor4;

/// One entry of a model's layer list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "type", deny_unknown_fields)]
pub enum LayerSpec {
    /// `kernel x kernel` convolution, stride 1, same padding, no bias.
    Conv {
        out: usize,
        kernel: usize,
    },
    /// Normalization layer configured by the run's `[norm]` table.
    Norm,
    Relu,
    /// 2x2 max pooling with stride 2.
    Pool,
    /// Fully connected layer on the flattened input, with bias.
    Linear {
        out: usize,
    },
}

/// `[Conv3x3(width) - Norm - ReLU - Pool2] x 3`, then a linear head.
pub fn tiny_conv_net(width: usize, classes: usize) -> Vec<LayerSpec> {
    let mut layers = Vec::new();
    for _ in 0..3 {
        layers.extend([
            LayerSpec::Conv {
                out: width,
                kernel: 3,
            },
            LayerSpec::Norm,
            LayerSpec::Relu,
            LayerSpec::Pool,
        ]);
    }
    layers.push(LayerSpec::Linear { out: classes });
    layers
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    in_c: usize,
    out_c: usize,
    k: usize,
    pub weight: Vec<f64>,
    pub grad: Vec<f64>,
    velocity: Vec<f64>,
    input: Option<Tensor4>,
}

impl Conv2d {
    /// He-normal initialization.
    fn new(in_c: usize, out_c: usize, k: usize, rng: &mut impl Rng) -> Self {
        let std = (2.0 / (in_c * k * k) as f64).sqrt();
        let n = out_c * in_c * k * k;
        let weight = (0..n)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self {
            in_c,
            out_c,
            k,
            weight,
            grad: vec![0.0; n],
            velocity: vec![0.0; n],
            input: None,
        }
    }

    fn forward(&self, x: &Tensor4) -> Result<Tensor4> {
        let [nb, nc, h, w] = x.dims();
        if nc != self.in_c {
            return Err(Error::Dimension(format!(
                "conv expects {} input channels, got {nc}",
                self.in_c
            )));
        }
        let (k, pad) = (self.k, self.k / 2);
        let mut out = Tensor4::zeros([nb, self.out_c, h, w]);
        for b in 0..nb {
            for o in 0..self.out_c {
                let dst = out.plane_mut(b, o);
                for i in 0..nc {
                    let src = x.plane(b, i);
                    let wbase = (o * nc + i) * k * k;
                    for ky in 0..k {
                        let (y0, y1) = valid_range(ky, pad, h);
                        for kx in 0..k {
                            let wv = self.weight[wbase + ky * k + kx];
                            let (x0, x1) = valid_range(kx, pad, w);
                            for y in y0..y1 {
                                let sy = y + ky - pad;
                                let drow = &mut dst[y * w + x0..y * w + x1];
                                let srow = &src[sy * w + x0 + kx - pad..sy * w + x1 + kx - pad];
                                for (d, s) in drow.iter_mut().zip(srow) {
                                    *d += wv * s;
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    fn backward(&mut self, upstream: &Tensor4) -> Result<Tensor4> {
        let x = self
            .input
            .take()
            .ok_or_else(|| Error::Contract("conv backward without a training forward".into()))?;
        let [nb, nc, h, w] = x.dims();
        let (k, pad) = (self.k, self.k / 2);
        self.grad.iter_mut().for_each(|g| *g = 0.0);
        let mut d_in = Tensor4::zeros(x.dims());
        for b in 0..nb {
            for o in 0..self.out_c {
                let up = upstream.plane(b, o);
                for i in 0..nc {
                    let src = x.plane(b, i);
                    let wbase = (o * nc + i) * k * k;
                    for ky in 0..k {
                        let (y0, y1) = valid_range(ky, pad, h);
                        for kx in 0..k {
                            let wi = wbase + ky * k + kx;
                            let wv = self.weight[wi];
                            let (x0, x1) = valid_range(kx, pad, w);
                            let mut acc = 0.0;
                            for y in y0..y1 {
                                let sy = y + ky - pad;
                                let urow = &up[y * w + x0..y * w + x1];
                                let s0 = sy * w + x0 + kx - pad;
                                let srow = &src[s0..s0 + (x1 - x0)];
                                acc += urow.iter().zip(srow).map(|(u, s)| u * s).sum::<f64>();
                                let drow = &mut d_in.plane_mut(b, i)[s0..s0 + (x1 - x0)];
                                for (d, u) in drow.iter_mut().zip(urow) {
                                    *d += wv * u;
                                }
                            }
                            self.grad[wi] += acc;
                        }
                    }
                }
            }
        }
        Ok(d_in)
    }
}

/// Output rows/cols `[lo, hi)` whose tap at offset `kpos` stays inside the input.
fn valid_range(kpos: usize, pad: usize, len: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kpos);
    let hi = (len + pad).saturating_sub(kpos).min(len);
    (lo, hi.max(lo))
}

#[derive(Debug, Clone)]
pub struct Linear {
    in_f: usize,
    out_f: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub grad_weight: Vec<f64>,
    pub grad_bias: Vec<f64>,
    velocity_weight: Vec<f64>,
    velocity_bias: Vec<f64>,
    input: Option<Tensor4>,
}

impl Linear {
    /// Normal weights with variance `1 / in_f`, zero bias.
    fn new(in_f: usize, out_f: usize, rng: &mut impl Rng) -> Self {
        let std = (1.0 / in_f as f64).sqrt();
        let weight = (0..in_f * out_f)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self {
            in_f,
            out_f,
            weight,
            bias: vec![0.0; out_f],
            grad_weight: vec![0.0; in_f * out_f],
            grad_bias: vec![0.0; out_f],
            velocity_weight: vec![0.0; in_f * out_f],
            velocity_bias: vec![0.0; out_f],
            input: None,
        }
    }

    fn forward(&self, x: &Tensor4) -> Result<Tensor4> {
        if x.sample_len() != self.in_f {
            return Err(Error::Dimension(format!(
                "linear expects {} features, got {}",
                self.in_f,
                x.sample_len()
            )));
        }
        let nb = x.batch();
        let mut out = Vec::with_capacity(nb * self.out_f);
        for b in 0..nb {
            let s = x.sample(b);
            for o in 0..self.out_f {
                let row = &self.weight[o * self.in_f..(o + 1) * self.in_f];
                out.push(self.bias[o] + row.iter().zip(s).map(|(w, v)| w * v).sum::<f64>());
            }
        }
        Tensor4::new([nb, self.out_f, 1, 1], out)
    }

    fn backward(&mut self, upstream: &Tensor4) -> Result<Tensor4> {
        let x = self
            .input
            .take()
            .ok_or_else(|| Error::Contract("linear backward without a training forward".into()))?;
        self.grad_weight.iter_mut().for_each(|g| *g = 0.0);
        self.grad_bias.iter_mut().for_each(|g| *g = 0.0);
        let mut d_in = Tensor4::zeros(x.dims());
        for b in 0..x.batch() {
            let s = x.sample(b);
            let up = upstream.sample(b);
            let d = &mut d_in.data_mut()[b * self.in_f..(b + 1) * self.in_f];
            for o in 0..self.out_f {
                let g = up[o];
                self.grad_bias[o] += g;
                let row = o * self.in_f..(o + 1) * self.in_f;
                for ((gw, w), (dv, v)) in self.grad_weight[row.clone()]
                    .iter_mut()
                    .zip(&self.weight[row])
                    .zip(d.iter_mut().zip(s))
                {
                    *gw += g * v;
                    *dv += g * w;
                }
            }
        }
        Ok(d_in)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Relu {
    input: Option<Tensor4>,
}

#[derive(Debug, Clone, Default)]
pub struct MaxPool2 {
    input_dims: Option<[usize; 4]>,
    /// Flat input index chosen for every output element.
    argmax: Vec<usize>,
}

impl MaxPool2 {
    fn forward(&self, x: &Tensor4) -> Result<(Tensor4, Vec<usize>)> {
        let [nb, nc, h, w] = x.dims();
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return Err(Error::Dimension(format!("cannot pool {h}x{w} by 2")));
        }
        let mut out = Tensor4::zeros([nb, nc, oh, ow]);
        let mut argmax = Vec::with_capacity(out.len());
        for b in 0..nb {
            for c in 0..nc {
                let base = x.index(b, c, 0, 0);
                let src = x.plane(b, c);
                let dst = out.plane_mut(b, c);
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut best = (2 * y) * w + 2 * xx;
                        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                            let i = (2 * y + dy) * w + 2 * xx + dx;
                            if src[i] > src[best] {
                                best = i;
                            }
                        }
                        dst[y * ow + xx] = src[best];
                        argmax.push(base + best);
                    }
                }
            }
        }
        Ok((out, argmax))
    }
}

/// A normalization layer with its optimizer state.
#[derive(Debug, Clone)]
pub struct NormBlock {
    pub layer: NormLayer,
    velocity: UbnParams,
}

#[derive(Debug, Clone)]
pub enum Layer {
    Conv(Conv2d),
    Norm(Box<NormBlock>),
    Relu(Relu),
    Pool(MaxPool2),
    Linear(Linear),
}

impl Layer {
    fn describe(&self) -> String {
        match self {
            Layer::Conv(c) => format!("conv{}x{}({}->{})", c.k, c.k, c.in_c, c.out_c),
            Layer::Norm(n) => format!("{}({})", n.layer.cfg.kind.name(), n.layer.channels()),
            Layer::Relu(_) => "relu".into(),
            Layer::Pool(_) => "maxpool2".into(),
            Layer::Linear(l) => format!("linear({}->{})", l.in_f, l.out_f),
        }
    }
}

/// A sequential network.
#[derive(Debug, Clone)]
pub struct Model {
    layers: Vec<Layer>,
    input_dims: [usize; 3],
    classes: usize,
}

impl Model {
    /// Builds `specs` for inputs of shape `input_dims`; the last layer must be
    /// linear with `classes` outputs.
    pub fn build(
        specs: &[LayerSpec],
        input_dims: [usize; 3],
        classes: usize,
        norm: &NormConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        match specs.last() {
            Some(LayerSpec::Linear { out }) if *out == classes => {}
            _ => {
                return Err(Error::config(
                    "model.layers",
                    format!("the last layer must be linear with {classes} outputs"),
                ))
            }
        }
        let [mut c, mut h, mut w] = input_dims;
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            let at = |msg: String| Error::config(format!("model.layers[{i}]"), msg);
            let layer = match *spec {
                LayerSpec::Conv { out, kernel } => {
                    if out == 0 || kernel % 2 == 0 {
                        return Err(at(format!(
                            "conv needs out >= 1 and odd kernel, got {out}, {kernel}"
                        )));
                    }
                    let conv = Conv2d::new(c, out, kernel, rng);
                    c = out;
                    Layer::Conv(conv)
                }
                LayerSpec::Norm => {
                    let layer = NormLayer::new(c, norm.clone())?;
                    Layer::Norm(Box::new(NormBlock {
                        layer,
                        velocity: UbnParams::zeros(c),
                    }))
                }
                LayerSpec::Relu => Layer::Relu(Relu::default()),
                LayerSpec::Pool => {
                    if h < 2 || w < 2 {
                        return Err(at(format!("cannot pool a {h}x{w} map")));
                    }
                    h /= 2;
                    w /= 2;
                    Layer::Pool(MaxPool2::default())
                }
                LayerSpec::Linear { out } => {
                    if out == 0 {
                        return Err(at("linear needs out >= 1".into()));
                    }
                    let lin = Linear::new(c * h * w, out, rng);
                    (c, h, w) = (out, 1, 1);
                    Layer::Linear(lin)
                }
            };
            layers.push(layer);
        }
        Ok(Self {
            layers,
            input_dims,
            classes,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn input_dims(&self) -> [usize; 3] {
        self.input_dims
    }

    /// Human-readable layer list.
    pub fn describe(&self) -> Vec<String> {
        self.layers.iter().map(Layer::describe).collect()
    }

    /// Normalization layers in order, with ids `norm0`, `norm1`, ...
    pub fn norm_layers(&self) -> Vec<(String, &NormLayer)> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Norm(n) => Some(&n.layer),
                _ => None,
            })
            .enumerate()
            .map(|(i, l)| (format!("norm{i}"), l))
            .collect()
    }

    fn check_input(&self, x: &Tensor4) -> Result<()> {
        let [_, c, h, w] = x.dims();
        if [c, h, w] != self.input_dims {
            return Err(Error::Dimension(format!(
                "model expects samples of {:?}, got {:?}",
                self.input_dims,
                [c, h, w]
            )));
        }
        Ok(())
    }

    /// Training forward; caches what backward needs and updates running
    /// statistics.
    pub fn forward_train(&mut self, x: &Tensor4) -> Result<Tensor4> {
        self.check_input(x)?;
        let mut h = x.clone();
        for layer in &mut self.layers {
            h = match layer {
                Layer::Conv(c) => {
                    let out = c.forward(&h)?;
                    c.input = Some(h);
                    out
                }
                Layer::Norm(n) => n.layer.forward(&h, Mode::Train)?,
                Layer::Relu(r) => {
                    let out = h.map(|v| v.max(0.0));
                    r.input = Some(h);
                    out
                }
                Layer::Pool(p) => {
                    let (out, argmax) = p.forward(&h)?;
                    p.input_dims = Some(h.dims());
                    p.argmax = argmax;
                    out
                }
                Layer::Linear(l) => {
                    let out = l.forward(&h)?;
                    l.input = Some(h);
                    out
                }
            };
        }
        Ok(h)
    }

    /// Backward from the logit gradient; fills every layer's gradients.
    pub fn backward(&mut self, d_logits: &Tensor4) -> Result<()> {
        let mut g = d_logits.clone();
        for layer in self.layers.iter_mut().rev() {
            g = match layer {
                Layer::Conv(c) => c.backward(&g)?,
                Layer::Norm(n) => n.layer.backward(&g)?,
                Layer::Relu(r) => {
                    let x = r.input.take().ok_or_else(|| {
                        Error::Contract("relu backward without a training forward".into())
                    })?;
                    let mut d = g;
                    d.data_mut().iter_mut().zip(x.data()).for_each(|(d, &v)| {
                        if v <= 0.0 {
                            *d = 0.0
                        }
                    });
                    d
                }
                Layer::Pool(p) => {
                    let dims = p.input_dims.take().ok_or_else(|| {
                        Error::Contract("pool backward without a training forward".into())
                    })?;
                    let mut d = Tensor4::zeros(dims);
                    for (&i, &v) in p.argmax.iter().zip(g.data()) {
                        d.data_mut()[i] += v;
                    }
                    d
                }
                Layer::Linear(l) => l.backward(&g)?,
            };
        }
        Ok(())
    }

    /// Inference with stored statistics. Returns the logits and the input of
    /// every normalization layer.
    pub fn infer_with_taps(
        &self,
        x: &Tensor4,
        allow_cold_start: bool,
    ) -> Result<(Tensor4, Vec<Tensor4>)> {
        self.check_input(x)?;
        let mut taps = Vec::new();
        let mut h = x.clone();
        for layer in &self.layers {
            h = match layer {
                Layer::Conv(c) => c.forward(&h)?,
                Layer::Norm(n) => {
                    let out = n.layer.infer(&h, allow_cold_start)?;
                    taps.push(h);
                    out
                }
                Layer::Relu(_) => h.map(|v| v.max(0.0)),
                Layer::Pool(p) => p.forward(&h)?.0,
                Layer::Linear(l) => l.forward(&h)?,
            };
        }
        Ok((h, taps))
    }

    pub fn infer(&self, x: &Tensor4) -> Result<Tensor4> {
        self.infer_with_taps(x, false).map(|(y, _)| y)
    }

    /// One SGD step on every parameter. Normalization parameters get weight
    /// decay only when `decay_norm_params` is set.
    pub fn sgd_step(
        &mut self,
        lr: f64,
        momentum: f64,
        weight_decay: f64,
        decay_norm_params: bool,
    ) -> Result<()> {
        for layer in &mut self.layers {
            match layer {
                Layer::Conv(c) => sgd_step(
                    &mut c.weight,
                    &c.grad,
                    &mut c.velocity,
                    lr,
                    momentum,
                    weight_decay,
                )?,
                Layer::Linear(l) => {
                    sgd_step(
                        &mut l.weight,
                        &l.grad_weight,
                        &mut l.velocity_weight,
                        lr,
                        momentum,
                        weight_decay,
                    )?;
                    sgd_step(
                        &mut l.bias,
                        &l.grad_bias,
                        &mut l.velocity_bias,
                        lr,
                        momentum,
                        weight_decay,
                    )?;
                }
                Layer::Norm(n) => {
                    let wd = if decay_norm_params { weight_decay } else { 0.0 };
                    for g in 0..UbnParams::GROUPS.len() {
                        sgd_step(
                            n.layer.params.group_mut(g),
                            n.layer.grads.group(g),
                            n.velocity.group_mut(g),
                            lr,
                            momentum,
                            wd,
                        )?;
                    }
                }
                Layer::Relu(_) | Layer::Pool(_) => {}
            }
        }
        Ok(())
    }

    /// Parameters, running statistics and optimizer velocities.
    pub fn save(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::default();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Conv(c) => {
                    ckpt.insert(format!("layers.{i}.conv.weight"), c.weight.clone());
                    ckpt.insert(
                        format!("layers.{i}.conv.weight_velocity"),
                        c.velocity.clone(),
                    );
                }
                Layer::Linear(l) => {
                    ckpt.insert(format!("layers.{i}.linear.weight"), l.weight.clone());
                    ckpt.insert(format!("layers.{i}.linear.bias"), l.bias.clone());
                    ckpt.insert(
                        format!("layers.{i}.linear.weight_velocity"),
                        l.velocity_weight.clone(),
                    );
                    ckpt.insert(
                        format!("layers.{i}.linear.bias_velocity"),
                        l.velocity_bias.clone(),
                    );
                }
                Layer::Norm(n) => {
                    let prefix = format!("layers.{i}.norm");
                    n.layer.save(&prefix, &mut ckpt);
                    for (g, name) in UbnParams::GROUPS.iter().enumerate() {
                        ckpt.insert(
                            format!("{prefix}.velocity.{name}"),
                            n.velocity.group(g).to_vec(),
                        );
                    }
                }
                Layer::Relu(_) | Layer::Pool(_) => {}
            }
        }
        ckpt
    }

    /// Restores everything [`Model::save`] wrote; shapes must match.
    pub fn load(&mut self, ckpt: &Checkpoint) -> Result<()> {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            match layer {
                Layer::Conv(c) => {
                    let n = c.weight.len();
                    c.weight
                        .copy_from_slice(ckpt.get_len(&format!("layers.{i}.conv.weight"), n)?);
                    c.velocity.copy_from_slice(
                        ckpt.get_len(&format!("layers.{i}.conv.weight_velocity"), n)?,
                    );
                }
                Layer::Linear(l) => {
                    let (nw, nb) = (l.weight.len(), l.bias.len());
                    l.weight
                        .copy_from_slice(ckpt.get_len(&format!("layers.{i}.linear.weight"), nw)?);
                    l.bias
                        .copy_from_slice(ckpt.get_len(&format!("layers.{i}.linear.bias"), nb)?);
                    l.velocity_weight.copy_from_slice(
                        ckpt.get_len(&format!("layers.{i}.linear.weight_velocity"), nw)?,
                    );
                    l.velocity_bias.copy_from_slice(
                        ckpt.get_len(&format!("layers.{i}.linear.bias_velocity"), nb)?,
                    );
                }
                Layer::Norm(n) => {
                    let prefix = format!("layers.{i}.norm");
                    n.layer.load(&prefix, ckpt)?;
                    for (g, name) in UbnParams::GROUPS.iter().enumerate() {
                        let len = n.velocity.group(g).len();
                        n.velocity.group_mut(g).copy_from_slice(
                            ckpt.get_len(&format!("{prefix}.velocity.{name}"), len)?,
                        );
                    }
                }
                Layer::Relu(_) | Layer::Pool(_) => {}
            }
        }
        Ok(())
    }
}
