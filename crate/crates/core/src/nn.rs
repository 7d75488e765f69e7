//! Layers, the two reference models and adapter attachment.
//!
//! Activations flow as `(batch, C, H, W)` through convolutions and
//! `(batch, features)` through linear layers, where `h = x · Wᵀ + b` with
//! `W` stored `n_out × n_in`.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::autograd::{Tape, VarId};
use crate::error::{invalid, Error, Result};
use crate::peft::{delta_on_tape, lift_on_tape, AdapterConfig, AttachedAdapter, LayerDims};
use crate::rng::Rng;
use crate::tensor::{DType, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    pub name: String,
    /// `n_out × n_in`.
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub frozen: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2dLayer {
    pub name: String,
    /// `(C_out, C_in, k, k)`.
    pub kernel: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub pad: usize,
    pub frozen: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(Conv2dLayer),
    Relu,
    Flatten,
    Linear(LinearLayer),
}

impl Layer {
    pub fn name(&self) -> Option<&str> {
        match self {
            Layer::Conv(c) => Some(&c.name),
            Layer::Linear(l) => Some(&l.name),
            _ => None,
        }
    }

    /// Adaptable weight of the layer, if any.
    pub fn weight(&self) -> Option<&Tensor> {
        match self {
            Layer::Conv(c) => Some(&c.kernel),
            Layer::Linear(l) => Some(&l.weight),
            _ => None,
        }
    }

    fn weight_suffix(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "kernel",
            _ => "W",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum ModelKind {
    Mlp,
    SmallCnn,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Mlp => "mlp",
            ModelKind::SmallCnn => "smallcnn",
        }
    }
}

/// Named, ordered layers with a fixed `(C, H, W)` input.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub kind: ModelKind,
    pub input_dims: [usize; 3],
    pub n_classes: usize,
    pub layers: Vec<Layer>,
}

/// One trainable or frozen tensor of a model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamInfo {
    pub name: String,
    pub dims: Vec<usize>,
    pub frozen: bool,
}

/// Which tensors enter the tape as parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    /// Every weight and bias.
    All,
    /// Adapter factors only; base weights and biases are frozen inputs.
    Adapters,
    /// Nothing (evaluation).
    None,
}

/// Name → tape handle of every parameter recorded by a forward pass.
pub type Bindings = BTreeMap<String, VarId>;

fn he_normal(dims: &[usize], fan_in: usize, dtype: DType, rng: &mut Rng) -> Result<Tensor> {
    Tensor::gaussian(dims, 0.0, libm::sqrt(2.0 / fan_in as f64), dtype, rng)
}

impl Model {
    /// `conv(1→8, k3, p1) / relu / conv(8→8, k3, p1) / relu / flatten /
    /// linear(8·H·W → n_classes)`.
    pub fn small_cnn(input_dims: [usize; 3], n_classes: usize, dtype: DType, rng: &mut Rng) -> Result<Self> {
        let [c, h, w] = input_dims;
        let width = 8;
        let conv1 = he_normal(&[width, c, 3, 3], c * 9, dtype, rng)?;
        let conv2 = he_normal(&[width, width, 3, 3], width * 9, dtype, rng)?;
        let feat = width * h * w;
        let fc = he_normal(&[n_classes, feat], feat, dtype, rng)?;
        let conv = |name: &str, kernel: Tensor| -> Result<Layer> {
            let c_out = kernel.dims()[0];
            Ok(Layer::Conv(Conv2dLayer {
                name: name.into(),
                kernel,
                bias: Some(Tensor::zeros(&[c_out], dtype)?),
                stride: 1,
                pad: 1,
                frozen: false,
            }))
        };
        let model = Self {
            kind: ModelKind::SmallCnn,
            input_dims,
            n_classes,
            layers: alloc::vec![
                conv("conv1", conv1)?,
                Layer::Relu,
                conv("conv2", conv2)?,
                Layer::Relu,
                Layer::Flatten,
                Layer::Linear(LinearLayer {
                    name: "linear1".into(),
                    weight: fc,
                    bias: Some(Tensor::zeros(&[n_classes], dtype)?),
                    frozen: false,
                }),
            ],
        };
        model.validate()?;
        Ok(model)
    }

    /// `flatten / linear(C·H·W → 32) / relu / linear(32 → n_classes)`.
    pub fn mlp(input_dims: [usize; 3], n_classes: usize, dtype: DType, rng: &mut Rng) -> Result<Self> {
        let feat: usize = input_dims.iter().product();
        let hidden = 32;
        let l1 = he_normal(&[hidden, feat], feat, dtype, rng)?;
        let l2 = he_normal(&[n_classes, hidden], hidden, dtype, rng)?;
        let model = Self {
            kind: ModelKind::Mlp,
            input_dims,
            n_classes,
            layers: alloc::vec![
                Layer::Flatten,
                Layer::Linear(LinearLayer {
                    name: "linear1".into(),
                    weight: l1,
                    bias: Some(Tensor::zeros(&[hidden], dtype)?),
                    frozen: false,
                }),
                Layer::Relu,
                Layer::Linear(LinearLayer {
                    name: "linear2".into(),
                    weight: l2,
                    bias: Some(Tensor::zeros(&[n_classes], dtype)?),
                    frozen: false,
                }),
            ],
        };
        model.validate()?;
        Ok(model)
    }

    pub fn build(kind: ModelKind, input_dims: [usize; 3], n_classes: usize, dtype: DType, rng: &mut Rng) -> Result<Self> {
        match kind {
            ModelKind::Mlp => Self::mlp(input_dims, n_classes, dtype, rng),
            ModelKind::SmallCnn => Self::small_cnn(input_dims, n_classes, dtype, rng),
        }
    }

    /// Checks that layer shapes chain from the input to `(batch, n_classes)`
    /// and that names are unique.
    pub fn validate(&self) -> Result<()> {
        let mut dims: Vec<usize> = self.input_dims.to_vec();
        let mut names: Vec<&str> = Vec::new();
        for layer in &self.layers {
            if let Some(name) = layer.name() {
                if names.contains(&name) {
                    return Err(invalid(format!("duplicate layer name {name}")));
                }
                names.push(name);
            }
            dims = match layer {
                Layer::Conv(c) => {
                    let [c_out, c_in, k, _] = *c.kernel.dims() else {
                        return Err(invalid("conv kernel must be rank 4"));
                    };
                    let [ch, h, w] = dims[..] else {
                        return Err(invalid(format!("{}: expects an image input", c.name)));
                    };
                    if ch != c_in {
                        return Err(invalid(format!("{}: expects {c_in} channels, got {ch}", c.name)));
                    }
                    let g = crate::tensor::ConvGeometry::new(&[1, ch, h, w], k, c.stride, c.pad)?;
                    alloc::vec![c_out, g.out_h, g.out_w]
                }
                Layer::Relu => dims,
                Layer::Flatten => alloc::vec![dims.iter().product()],
                Layer::Linear(l) => {
                    let [n_out, n_in] = *l.weight.dims() else {
                        return Err(invalid("linear weight must be a matrix"));
                    };
                    if dims != [n_in] {
                        return Err(invalid(format!("{}: expects {n_in} features, got {dims:?}", l.name)));
                    }
                    alloc::vec![n_out]
                }
            };
        }
        if dims != [self.n_classes] {
            return Err(invalid(format!("model output {dims:?} != [{}]", self.n_classes)));
        }
        Ok(())
    }

    /// Every weight and bias with its dotted name.
    pub fn registry(&self) -> Vec<ParamInfo> {
        let mut out = Vec::new();
        for layer in &self.layers {
            let (name, weight, bias, frozen) = match layer {
                Layer::Conv(c) => (&c.name, &c.kernel, &c.bias, c.frozen),
                Layer::Linear(l) => (&l.name, &l.weight, &l.bias, l.frozen),
                _ => continue,
            };
            out.push(ParamInfo {
                name: format!("{name}.{}", layer.weight_suffix()),
                dims: weight.dims().to_vec(),
                frozen,
            });
            if let Some(b) = bias {
                out.push(ParamInfo {
                    name: format!("{name}.bias"),
                    dims: b.dims().to_vec(),
                    frozen,
                });
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.registry().iter().map(|p| p.dims.iter().product::<usize>()).sum()
    }

    /// Name → tensor for every weight and bias.
    pub fn named_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for layer in &self.layers {
            let (name, weight, bias) = match layer {
                Layer::Conv(c) => (&c.name, &c.kernel, &c.bias),
                Layer::Linear(l) => (&l.name, &l.weight, &l.bias),
                _ => continue,
            };
            out.insert(format!("{name}.{}", layer.weight_suffix()), weight.clone());
            if let Some(b) = bias {
                out.insert(format!("{name}.bias"), b.clone());
            }
        }
        out
    }

    /// Replaces weights and biases by name. Every registered tensor must be
    /// present with its current shape.
    pub fn load_named_tensors(&mut self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        let fetch = |key: String, current: &Tensor| -> Result<Tensor> {
            let t = tensors.get(&key).ok_or_else(|| invalid(format!("missing tensor {key}")))?;
            if t.dims() != current.dims() {
                return Err(Error::ShapeMismatch {
                    op: "load_named_tensors",
                    left: current.dims().to_vec(),
                    right: t.dims().to_vec(),
                });
            }
            Ok(t.clone())
        };
        for layer in &mut self.layers {
            match layer {
                Layer::Conv(c) => {
                    c.kernel = fetch(format!("{}.kernel", c.name), &c.kernel)?;
                    if let Some(b) = &c.bias {
                        c.bias = Some(fetch(format!("{}.bias", c.name), b)?);
                    }
                }
                Layer::Linear(l) => {
                    l.weight = fetch(format!("{}.W", l.name), &l.weight)?;
                    if let Some(b) = &l.bias {
                        l.bias = Some(fetch(format!("{}.bias", l.name), b)?);
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn freeze_all_base(&mut self) {
        for layer in &mut self.layers {
            match layer {
                Layer::Conv(c) => c.frozen = true,
                Layer::Linear(l) => l.frozen = true,
                _ => {}
            }
        }
    }

    /// Records the forward pass of `batch` (`(N, C, H, W)`) and returns the
    /// logits together with the handles of every tape parameter.
    pub fn forward(
        &self,
        tape: &mut Tape,
        batch: &Tensor,
        adapters: Option<&AdapterSet>,
        trainable: Trainable,
    ) -> Result<(VarId, Bindings)> {
        let expected = [batch.dims().first().copied().unwrap_or(0), self.input_dims[0], self.input_dims[1], self.input_dims[2]];
        if batch.dims() != expected {
            return Err(Error::ShapeMismatch {
                op: "model_forward",
                left: expected.to_vec(),
                right: batch.dims().to_vec(),
            });
        }
        let n = expected[0];
        let mut bindings = Bindings::new();
        let mut leaf = |tape: &mut Tape, name: String, t: &Tensor, train: bool, bindings: &mut Bindings| {
            if train {
                let id = tape.param(t.clone());
                bindings.insert(name, id);
                id
            } else {
                tape.input(t.clone())
            }
        };
        let base_train = trainable == Trainable::All;
        let adapter_train = trainable == Trainable::Adapters;

        let mut x = tape.input(batch.clone());
        for layer in &self.layers {
            x = match layer {
                Layer::Relu => tape.relu(x)?,
                Layer::Flatten => {
                    let feat = tape.value(x).numel() / n;
                    tape.reshape(x, &[n, feat])?
                }
                Layer::Conv(c) => {
                    let kernel = self.layer_weight(tape, layer, &c.kernel, adapters, base_train, adapter_train, &mut bindings, &mut leaf)?;
                    let y = tape.conv2d(x, kernel, c.stride, c.pad)?;
                    match &c.bias {
                        Some(b) => {
                            let bias = leaf(tape, format!("{}.bias", c.name), b, base_train, &mut bindings);
                            tape.add_bias(y, bias)?
                        }
                        None => y,
                    }
                }
                Layer::Linear(l) => {
                    let w = self.layer_weight(tape, layer, &l.weight, adapters, base_train, adapter_train, &mut bindings, &mut leaf)?;
                    let wt = tape.transpose(w)?;
                    let y = tape.matmul(x, wt)?;
                    match &l.bias {
                        Some(b) => {
                            let bias = leaf(tape, format!("{}.bias", l.name), b, base_train, &mut bindings);
                            tape.add_bias(y, bias)?
                        }
                        None => y,
                    }
                }
            };
        }
        Ok((x, bindings))
    }

    #[allow(clippy::too_many_arguments)]
    fn layer_weight(
        &self,
        tape: &mut Tape,
        layer: &Layer,
        weight: &Tensor,
        adapters: Option<&AdapterSet>,
        base_train: bool,
        adapter_train: bool,
        bindings: &mut Bindings,
        leaf: &mut impl FnMut(&mut Tape, String, &Tensor, bool, &mut Bindings) -> VarId,
    ) -> Result<VarId> {
        let name = layer.name().expect("weighted layer");
        let adapter = adapters.and_then(|set| set.get(name));
        match adapter {
            None => Ok(leaf(tape, format!("{name}.{}", layer.weight_suffix()), weight, base_train, bindings)),
            Some(ad) if ad.is_merged() => Ok(tape.input(ad.base.clone())),
            Some(ad) => {
                let base = tape.input(ad.base.clone());
                let a = leaf(tape, format!("{name}.A"), &ad.factors.a, adapter_train, bindings);
                let b = leaf(tape, format!("{name}.B"), &ad.factors.b, adapter_train, bindings);
                let delta = delta_on_tape(tape, a, b, ad.factors.scaling(), Some(ad.base.dims()))?;
                lift_on_tape(tape, base, delta, ad.config.lift_mode)
            }
        }
    }

    /// Logits without gradients.
    pub fn logits(&self, batch: &Tensor, adapters: Option<&AdapterSet>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let (out, _) = self.forward(&mut tape, batch, adapters, Trainable::None)?;
        Ok(tape.value(out).clone())
    }
}

/// Shell-style wildcard match supporting `*` and `?`.
pub fn glob_match(pattern: &str, name: &str) -> bool {
    let p: Vec<char> = pattern.chars().collect();
    let s: Vec<char> = name.chars().collect();
    let (mut pi, mut si) = (0, 0);
    let mut star: Option<(usize, usize)> = None;
    while si < s.len() {
        if pi < p.len() && (p[pi] == '?' || p[pi] == s[si]) {
            pi += 1;
            si += 1;
        } else if pi < p.len() && p[pi] == '*' {
            star = Some((pi, si));
            pi += 1;
        } else if let Some((sp, ss)) = star {
            pi = sp + 1;
            si = ss + 1;
            star = Some((sp, ss + 1));
        } else {
            return false;
        }
    }
    p[pi..].iter().all(|&c| c == '*')
}

/// True if `name` matches any comma-separated glob in `selector`.
pub fn selector_matches(selector: &str, name: &str) -> bool {
    selector
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .any(|pat| glob_match(pat, name))
}

/// Adapters keyed by layer name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdapterSet {
    adapters: BTreeMap<String, AttachedAdapter>,
}

/// Result of attaching adapters to a model.
#[derive(Debug, Clone, PartialEq)]
pub struct AttachReport {
    pub layers: Vec<String>,
    /// `(layer, count)` of exactly-zero base entries that Lie lifts cannot move.
    pub zero_entries: Vec<(String, usize)>,
}

impl AdapterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, layer: impl Into<String>, adapter: AttachedAdapter) {
        self.adapters.insert(layer.into(), adapter);
    }

    pub fn get(&self, layer: &str) -> Option<&AttachedAdapter> {
        self.adapters.get(layer)
    }

    pub fn get_mut(&mut self, layer: &str) -> Option<&mut AttachedAdapter> {
        self.adapters.get_mut(layer)
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &AttachedAdapter)> {
        self.adapters.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut AttachedAdapter)> {
        self.adapters.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// `"<layer>.A"` / `"<layer>.B"` → factor tensors.
    pub fn factor_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, ad) in &self.adapters {
            out.insert(format!("{name}.A"), ad.factors.a.clone());
            out.insert(format!("{name}.B"), ad.factors.b.clone());
        }
        out
    }

    /// Writes updated factors back by `"<layer>.A"` / `"<layer>.B"` name.
    pub fn set_factor_tensors(&mut self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, ad) in &mut self.adapters {
            for (suffix, slot) in [("A", &mut ad.factors.a), ("B", &mut ad.factors.b)] {
                if let Some(t) = tensors.get(&format!("{name}.{suffix}")) {
                    if t.dims() != slot.dims() {
                        return Err(Error::ShapeMismatch {
                            op: "set_factor_tensors",
                            left: slot.dims().to_vec(),
                            right: t.dims().to_vec(),
                        });
                    }
                    *slot = t.clone();
                }
            }
        }
        Ok(())
    }

    pub fn trainable_params(&self) -> usize {
        self.adapters.values().map(AttachedAdapter::trainable_params).sum()
    }

    pub fn merge_all(&mut self) -> Result<()> {
        self.adapters.values_mut().try_for_each(AttachedAdapter::merge)
    }

    pub fn unmerge_all(&mut self) -> Result<()> {
        self.adapters.values_mut().try_for_each(AttachedAdapter::unmerge)
    }
}

/// Attaches fresh adapters to every layer whose name matches `config.target`.
/// The base weights are copied; the model itself is not modified.
pub fn attach_adapters(model: &Model, config: &AdapterConfig, rng: &mut Rng) -> Result<(AdapterSet, AttachReport)> {
    config.validate()?;
    let mut set = AdapterSet::new();
    let mut report = AttachReport {
        layers: Vec::new(),
        zero_entries: Vec::new(),
    };
    for layer in &model.layers {
        let (Some(name), Some(weight)) = (layer.name(), layer.weight()) else { continue };
        if !selector_matches(&config.target, name) {
            continue;
        }
        let adapter = AttachedAdapter::attach(weight.clone(), config, rng)?;
        let zeros = adapter.zero_base_entries();
        if zeros > 0 {
            report.zero_entries.push((name.into(), zeros));
        }
        report.layers.push(name.into());
        set.insert(name, adapter);
    }
    if set.is_empty() {
        return Err(invalid(format!("adapter target {:?} matches no layer", config.target)));
    }
    Ok((set, report))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BudgetRow {
    pub layer: String,
    pub dims: LayerDims,
    pub trainable: usize,
    /// Weights updated by a full fine-tune of this layer.
    pub full: usize,
}

impl BudgetRow {
    pub fn ratio(&self) -> f64 {
        self.trainable as f64 / self.full as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BudgetTable {
    pub rows: Vec<BudgetRow>,
    pub trainable_total: usize,
    /// Every weight and bias of the model.
    pub model_total: usize,
}

impl BudgetTable {
    /// Trainable adapter parameters over a full fine-tune of the model.
    pub fn ratio(&self) -> f64 {
        self.trainable_total as f64 / self.model_total as f64
    }
}

pub fn budget_table(model: &Model, adapters: &AdapterSet) -> BudgetTable {
    let rows: Vec<BudgetRow> = adapters
        .iter()
        .map(|(layer, ad)| BudgetRow {
            layer: layer.into(),
            dims: ad.layer_dims(),
            trainable: ad.trainable_params(),
            full: ad.layer_dims().weight_count(),
        })
        .collect();
    BudgetTable {
        trainable_total: rows.iter().map(|r| r.trainable).sum(),
        rows,
        model_total: model.param_count(),
    }
}
