//! End-to-end classifier: convolutional backbone → energy mask → global
//! average pooling → linear head.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::energy_mask::{self, EnergyDiagnostics, MaskLayerParams, Mode, DEFAULT_LAMBDA};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{self, FeatureShape, Tensor, TokenGeometry};

/// One `conv → relu → maxpool` block. `pool == 1` skips pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvLayerSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub pool: usize,
}

impl ConvLayerSpec {
    /// 3×3, stride 1, pad 1, followed by the given pooling window.
    pub fn same(out_channels: usize, pool: usize) -> Self {
        ConvLayerSpec { out_channels, kernel: 3, stride: 1, pad: 1, pool }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneConfig {
    pub input: FeatureShape,
    pub layers: Vec<ConvLayerSpec>,
}

impl BackboneConfig {
    /// `1×32×32` input, three blocks of 16, 32 and 64 channels each halving
    /// the resolution: a `64×4×4` feature map.
    pub fn desk_scale() -> Self {
        BackboneConfig {
            input: FeatureShape::new(1, 32, 32),
            layers: vec![ConvLayerSpec::same(16, 2), ConvLayerSpec::same(32, 2), ConvLayerSpec::same(64, 2)],
        }
    }

    /// Shape of the map handed to the mask layer.
    pub fn output_shape(&self) -> Result<FeatureShape> {
        let mut s = self.input;
        for (i, l) in self.layers.iter().enumerate() {
            if l.out_channels == 0 || l.kernel == 0 || l.stride == 0 || l.pool == 0 {
                return Err(Error::InvalidArgument(format!("backbone layer {i} has a zero extent")));
            }
            if l.kernel > s.h + 2 * l.pad || l.kernel > s.w + 2 * l.pad {
                return Err(Error::InvalidArgument(format!("backbone layer {i}: kernel larger than its input")));
            }
            let h = (s.h + 2 * l.pad - l.kernel) / l.stride + 1;
            let w = (s.w + 2 * l.pad - l.kernel) / l.stride + 1;
            if !h.is_multiple_of(l.pool) || !w.is_multiple_of(l.pool) {
                return Err(Error::InvalidArgument(format!(
                    "backbone layer {i}: {h}x{w} map not divisible by pool {}",
                    l.pool
                )));
            }
            s = FeatureShape::new(l.out_channels, h / l.pool, w / l.pool);
        }
        Ok(s)
    }
}

/// Which rows of the comparison the model realizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// No mask layer at all.
    Baseline,
    /// Unary energy only (`λ_pair` forced to 0).
    Unary,
    /// Unary and pairwise energies.
    Full,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Unary => "unary",
            Variant::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "baseline" => Some(Variant::Baseline),
            "unary" => Some(Variant::Unary),
            "full" => Some(Variant::Full),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub classes: usize,
    /// Mask patch size `d`.
    pub patch: usize,
    pub lambda_unary: f64,
    pub lambda_pair: f64,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::desk_scale(),
            classes: 4,
            patch: 1,
            lambda_unary: DEFAULT_LAMBDA,
            lambda_pair: DEFAULT_LAMBDA,
            variant: Variant::Full,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 classes, got {}", self.classes)));
        }
        if !(self.lambda_unary >= 0.0 && self.lambda_pair >= 0.0) {
            return Err(Error::InvalidArgument("energy weights must be non-negative".into()));
        }
        self.geometry().map(|_| ())
    }

    pub fn feature_shape(&self) -> Result<FeatureShape> {
        self.backbone.output_shape()
    }

    pub fn geometry(&self) -> Result<TokenGeometry> {
        TokenGeometry::new(self.feature_shape()?, self.patch)
    }

    /// `(λ_unary, λ_pair)` after the variant has been applied.
    pub fn effective_lambdas(&self) -> (f64, f64) {
        match self.variant {
            Variant::Baseline => (0.0, 0.0),
            Variant::Unary => (self.lambda_unary, 0.0),
            Variant::Full => (self.lambda_unary, self.lambda_pair),
        }
    }

    /// Input pixels spanned by one feature-map cell along each axis.
    pub fn feature_stride(&self) -> Result<(usize, usize)> {
        let f = self.feature_shape()?;
        let i = self.backbone.input;
        Ok((i.h / f.h, i.w / f.w))
    }

    /// Expected `(name, shape)` of every parameter, in canonical order.
    pub fn param_shapes(&self) -> Result<Vec<(String, Vec<usize>)>> {
        let mut out = Vec::new();
        let mut c_in = self.backbone.input.c;
        for (i, l) in self.backbone.layers.iter().enumerate() {
            out.push((format!("backbone.{i}.weight"), vec![l.out_channels, c_in, l.kernel, l.kernel]));
            out.push((format!("backbone.{i}.bias"), vec![l.out_channels]));
            c_in = l.out_channels;
        }
        let geom = self.geometry()?;
        out.push(("mask.w".into(), vec![geom.token_dim()]));
        out.push(("mask.b".into(), vec![1]));
        out.push(("head.weight".into(), vec![self.classes, geom.feature.c]));
        out.push(("head.bias".into(), vec![self.classes]));
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Backbone,
    Mask,
    Head,
}

impl ParamGroup {
    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Backbone => "backbone",
            ParamGroup::Mask => "mask",
            ParamGroup::Head => "head",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub backbone: Vec<ConvParams>,
    pub mask: MaskLayerParams,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

/// Mutable view of one parameter tensor.
#[derive(Debug)]
pub struct ParamSlot<'a> {
    pub name: String,
    pub group: ParamGroup,
    /// Receives decoupled weight decay.
    pub decay: bool,
    pub values: &'a mut [f64],
}

impl ModelParams {
    /// He-uniform convolutions, `U(±1/√C)` head, zero biases, and a
    /// near-neutral mask template.
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut backbone = Vec::with_capacity(config.backbone.layers.len());
        let mut c_in = config.backbone.input.c;
        for l in &config.backbone.layers {
            let fan_in = (c_in * l.kernel * l.kernel) as f64;
            let bound = libm::sqrt(6.0 / fan_in);
            let n = l.out_channels * c_in * l.kernel * l.kernel;
            let w = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
            backbone.push(ConvParams {
                weight: Tensor::new(&[l.out_channels, c_in, l.kernel, l.kernel], w)?,
                bias: Tensor::zeros(&[l.out_channels]),
            });
            c_in = l.out_channels;
        }
        let geom = config.geometry()?;
        let (lu, lp) = config.effective_lambdas();
        let mask = MaskLayerParams::init(geom.token_dim(), lu, lp, config.patch, rng)?;
        let c = geom.feature.c;
        let bound = 1.0 / libm::sqrt(c as f64);
        let hw = (0..config.classes * c).map(|_| rng.random_range(-bound..bound)).collect();
        Ok(ModelParams {
            backbone,
            mask,
            head_w: Tensor::new(&[config.classes, c], hw)?,
            head_b: Tensor::zeros(&[config.classes]),
        })
    }

    /// Every parameter in canonical order (see [`ModelConfig::param_shapes`]).
    pub fn slots_mut(&mut self) -> Vec<ParamSlot<'_>> {
        let mut out = Vec::new();
        for (i, cp) in self.backbone.iter_mut().enumerate() {
            out.push(ParamSlot {
                name: format!("backbone.{i}.weight"),
                group: ParamGroup::Backbone,
                decay: true,
                values: cp.weight.data_mut(),
            });
            out.push(ParamSlot {
                name: format!("backbone.{i}.bias"),
                group: ParamGroup::Backbone,
                decay: false,
                values: cp.bias.data_mut(),
            });
        }
        out.push(ParamSlot {
            name: "mask.w".into(),
            group: ParamGroup::Mask,
            decay: true,
            values: self.mask.w.data_mut(),
        });
        out.push(ParamSlot {
            name: "mask.b".into(),
            group: ParamGroup::Mask,
            decay: false,
            values: core::slice::from_mut(&mut self.mask.b),
        });
        out.push(ParamSlot {
            name: "head.weight".into(),
            group: ParamGroup::Head,
            decay: true,
            values: self.head_w.data_mut(),
        });
        out.push(ParamSlot {
            name: "head.bias".into(),
            group: ParamGroup::Head,
            decay: false,
            values: self.head_b.data_mut(),
        });
        out
    }

    /// `(name, shape, values)` in canonical order.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        for (i, cp) in self.backbone.iter().enumerate() {
            out.push((format!("backbone.{i}.weight"), cp.weight.shape().to_vec(), cp.weight.data()));
            out.push((format!("backbone.{i}.bias"), cp.bias.shape().to_vec(), cp.bias.data()));
        }
        out.push(("mask.w".into(), self.mask.w.shape().to_vec(), self.mask.w.data()));
        out.push(("mask.b".into(), vec![1], core::slice::from_ref(&self.mask.b)));
        out.push(("head.weight".into(), self.head_w.shape().to_vec(), self.head_w.data()));
        out.push(("head.bias".into(), self.head_b.shape().to_vec(), self.head_b.data()));
        out
    }

    /// Rebuilds parameters from tensors given in canonical order, checking
    /// each against the configuration.
    pub fn from_tensors(config: &ModelConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let expected = config.param_shapes()?;
        if tensors.len() != expected.len() {
            return Err(shape_err(
                "from_tensors",
                format!("expected {} tensors, got {}", expected.len(), tensors.len()),
            ));
        }
        for ((name, t), (ename, eshape)) in tensors.iter().zip(&expected) {
            if name != ename {
                return Err(shape_err("from_tensors", format!("expected entry {ename}, found {name}")));
            }
            if t.shape() != eshape.as_slice() {
                return Err(shape_err(
                    "from_tensors",
                    format!("entry {name} has shape {:?}, configuration needs {eshape:?}", t.shape()),
                ));
            }
        }
        let mut it = tensors.into_iter().map(|(_, t)| t);
        let mut backbone = Vec::with_capacity(config.backbone.layers.len());
        for _ in &config.backbone.layers {
            let weight = it.next().ok_or_else(missing)?;
            let bias = it.next().ok_or_else(missing)?;
            backbone.push(ConvParams { weight, bias });
        }
        let w = it.next().ok_or_else(missing)?;
        let b = it.next().ok_or_else(missing)?.item()?;
        let (lu, lp) = config.effective_lambdas();
        let mask = MaskLayerParams::new(w, b, lu, lp, config.patch)?;
        let head_w = it.next().ok_or_else(missing)?;
        let head_b = it.next().ok_or_else(missing)?;
        Ok(ModelParams { backbone, mask, head_w, head_b })
    }
}

impl ModelParams {
    /// Copies backbone and head from `source`, keeping this model's mask.
    /// Used to insert a fresh mask layer into a pretrained network.
    pub fn warm_start(&mut self, source: &ModelParams) -> Result<()> {
        let same = self.backbone.len() == source.backbone.len()
            && self
                .backbone
                .iter()
                .zip(&source.backbone)
                .all(|(a, b)| a.weight.shape() == b.weight.shape() && a.bias.shape() == b.bias.shape())
            && self.head_w.shape() == source.head_w.shape()
            && self.head_b.shape() == source.head_b.shape();
        if !same {
            return Err(shape_err("warm_start", "source network has a different architecture".into()));
        }
        self.backbone = source.backbone.clone();
        self.head_w = source.head_w.clone();
        self.head_b = source.head_b.clone();
        Ok(())
    }
}

fn missing() -> Error {
    shape_err("from_tensors", "parameter list ended early".into())
}

/// Feature map produced by the backbone.
pub fn backbone_forward(config: &ModelConfig, params: &ModelParams, x: &Tensor) -> Result<Tensor> {
    if x.shape() != config.backbone.input.dims() {
        return Err(shape_err(
            "predict",
            format!("input {:?}, model expects {:?}", x.shape(), config.backbone.input.dims()),
        ));
    }
    let mut h = x.clone();
    for (l, p) in config.backbone.layers.iter().zip(&params.backbone) {
        h = tensor::relu(&tensor::conv2d(&h, &p.weight, &p.bias, l.stride, l.pad)?)?;
        if l.pool > 1 {
            h = tensor::maxpool2d(&h, l.pool)?.0;
        }
    }
    Ok(h)
}

fn head(params: &ModelParams, pooled: &Tensor) -> Result<Tensor> {
    tensor::add(&tensor::matvec(&params.head_w, pooled)?, &params.head_b)
}

/// Logits and, unless the mask is bypassed, the layer's diagnostics.
pub fn predict(
    config: &ModelConfig,
    params: &ModelParams,
    x: &Tensor,
    mode: Mode,
) -> Result<(Tensor, Option<EnergyDiagnostics>)> {
    let features = backbone_forward(config, params, x)?;
    predict_from_features(config, params, &features, mode)
}

/// [`predict`] starting from an already computed feature map.
pub fn predict_from_features(
    config: &ModelConfig,
    params: &ModelParams,
    features: &Tensor,
    mode: Mode,
) -> Result<(Tensor, Option<EnergyDiagnostics>)> {
    let (masked, diag) = match config.variant {
        Variant::Baseline => (features.clone(), None),
        Variant::Unary | Variant::Full => {
            let (y, d) = energy_mask::forward(features, &params.mask, mode)?;
            (y, Some(d))
        }
    };
    let pooled = tensor::global_avg_pool(&masked)?;
    Ok((head(params, &pooled)?, diag))
}

/// Classifies with the listed tokens hard-zeroed and the soft gate bypassed.
/// The pooled vector is rescaled by `N/(N−k)`.
pub fn predict_with_deletion(
    config: &ModelConfig,
    params: &ModelParams,
    x: &Tensor,
    delete: &[usize],
) -> Result<Tensor> {
    let features = backbone_forward(config, params, x)?;
    logits_with_deletion(config, params, &features, delete)
}

/// [`predict_with_deletion`] starting from an already computed feature map.
pub fn logits_with_deletion(
    config: &ModelConfig,
    params: &ModelParams,
    features: &Tensor,
    delete: &[usize],
) -> Result<Tensor> {
    let geom = TokenGeometry::new(features.feature_shape()?, config.patch)?;
    let n = geom.tokens();
    let mut removed = vec![false; n];
    for &t in delete {
        if t >= n {
            return Err(Error::InvalidArgument(format!("token {t} out of range for {n} tokens")));
        }
        removed[t] = true;
    }
    let k = removed.iter().filter(|&&r| r).count();
    if k == n {
        return Err(Error::InvalidArgument("cannot delete every token".into()));
    }
    let mut map = features.clone();
    if k > 0 {
        let FeatureShape { c, h, w } = geom.feature;
        let d = geom.patch;
        let data = map.data_mut();
        for (t, _) in removed.iter().enumerate().filter(|(_, &r)| r) {
            let (gy, gx) = geom.cell(t);
            for ch in 0..c {
                for r in 0..d {
                    let start = (ch * h + gy * d + r) * w + gx * d;
                    data[start..start + d].fill(0.0);
                }
            }
        }
    }
    let pooled = tensor::global_avg_pool(&map)?;
    let pooled = if k > 0 { tensor::scale(&pooled, n as f64 / (n - k) as f64)? } else { pooled };
    head(params, &pooled)
}

/// Tape handles bound to one set of parameters.
#[derive(Debug, Clone)]
pub struct ParamVars {
    backbone: Vec<(Var, Var)>,
    mask_w: Var,
    mask_b: Var,
    head_w: Var,
    head_b: Var,
}

impl ParamVars {
    /// Puts every parameter on the tape; frozen groups become constants.
    pub fn bind(tape: &mut Tape, params: &ModelParams, frozen: impl Fn(ParamGroup) -> bool) -> Self {
        let mut put =
            |t: &Tensor, g: ParamGroup| if frozen(g) { tape.constant(t.clone()) } else { tape.leaf(t.clone()) };
        let backbone = params
            .backbone
            .iter()
            .map(|cp| (put(&cp.weight, ParamGroup::Backbone), put(&cp.bias, ParamGroup::Backbone)))
            .collect();
        let mask_w = put(&params.mask.w, ParamGroup::Mask);
        let mask_b = put(&Tensor::scalar(params.mask.b), ParamGroup::Mask);
        let head_w = put(&params.head_w, ParamGroup::Head);
        let head_b = put(&params.head_b, ParamGroup::Head);
        ParamVars { backbone, mask_w, mask_b, head_w, head_b }
    }

    /// Handles in canonical parameter order.
    pub fn in_order(&self) -> Vec<Var> {
        let mut out: Vec<Var> = self.backbone.iter().flat_map(|&(w, b)| [w, b]).collect();
        out.extend([self.mask_w, self.mask_b, self.head_w, self.head_b]);
        out
    }

    /// Gradients in canonical order; zeros where none was accumulated.
    pub fn gradients(&self, tape: &Tape) -> Vec<Vec<f64>> {
        self.in_order()
            .into_iter()
            .map(|v| match tape.grad(v) {
                Some(g) => g.data().to_vec(),
                None => vec![0.0; tape.value(v).len()],
            })
            .collect()
    }
}

/// Handles for one recorded prediction.
#[derive(Debug, Clone, Copy)]
pub struct RecordedPrediction {
    pub logits: Var,
    /// Expected-energy regularizer; `None` when the mask is bypassed.
    pub reg: Option<Var>,
    pub m: Option<Var>,
}

/// Records the backbone on the tape and returns its feature map.
pub fn record_backbone(tape: &mut Tape, config: &ModelConfig, vars: &ParamVars, x: Var) -> Result<Var> {
    let mut h = x;
    for (l, &(w, b)) in config.backbone.layers.iter().zip(&vars.backbone) {
        let c = tape.conv2d(h, w, b, l.stride, l.pad)?;
        h = tape.relu(c)?;
        if l.pool > 1 {
            h = tape.maxpool2d(h, l.pool)?;
        }
    }
    Ok(h)
}

/// Records mask, pooling and head on top of a feature-map node.
pub fn record_head(
    tape: &mut Tape,
    config: &ModelConfig,
    params: &ModelParams,
    vars: &ParamVars,
    features: Var,
    mode: Mode,
) -> Result<RecordedPrediction> {
    let (masked, reg, m) = match config.variant {
        Variant::Baseline => (features, None, None),
        Variant::Unary | Variant::Full => {
            let r = energy_mask::record(tape, features, vars.mask_w, vars.mask_b, &params.mask, mode)?;
            (r.output, Some(r.reg), Some(r.m))
        }
    };
    let pooled = tape.global_avg_pool(masked)?;
    let proj = tape.matvec(vars.head_w, pooled)?;
    let logits = tape.add(proj, vars.head_b)?;
    Ok(RecordedPrediction { logits, reg, m })
}
