//! Low-rank adapters and the rules that combine them with a frozen weight.
//!
//! A learned delta `ΔW = (alpha / r) · A · B` is applied to a base weight `W` in
//! one of three ways:
//!
//! | mode         | effective weight   |
//! |--------------|--------------------|
//! | `Additive`   | `W + ΔW`           |
//! | `LieExact`   | `W ⊙ exp(ΔW)`      |
//! | `LieTaylor`  | `W + W ⊙ ΔW`       |
//!
//! For convolution kernels `(C_out, C_in, k, k)` the factors span the
//! flattened `(C_out, C_in·k²)` matrix and the delta is reshaped back before
//! lifting. With `B = 0` all three modes return `W` bit for bit.

use alloc::string::String;
use alloc::vec::Vec;

use crate::autograd::{Tape, VarId};
use crate::error::{invalid, Error, Result};
use crate::liegroup::{check_membership, guarded_exp};
use crate::rng::Rng;
use crate::tensor::{conv2d, DType, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum LiftMode {
    Additive,
    LieExact,
    LieTaylor,
}

impl LiftMode {
    pub const ALL: [LiftMode; 3] = [LiftMode::Additive, LiftMode::LieTaylor, LiftMode::LieExact];

    pub fn as_str(self) -> &'static str {
        match self {
            LiftMode::Additive => "additive",
            LiftMode::LieExact => "lie_exact",
            LiftMode::LieTaylor => "lie_taylor",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s)
    }
}

impl core::fmt::Display for LiftMode {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.as_str())
    }
}

pub const DEFAULT_INIT_STDDEV: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct AdapterConfig {
    pub rank: usize,
    pub alpha: f64,
    pub lift_mode: LiftMode,
    #[cfg_attr(feature = "serde", serde(default = "default_init_stddev"))]
    pub init_stddev: f64,
    /// Comma-separated layer-name globs, e.g. `"conv*,linear*"`.
    #[cfg_attr(feature = "serde", serde(default = "default_target"))]
    pub target: String,
}

#[cfg(feature = "serde")]
fn default_init_stddev() -> f64 {
    DEFAULT_INIT_STDDEV
}

#[cfg(feature = "serde")]
fn default_target() -> String {
    "*".into()
}

impl AdapterConfig {
    pub fn new(rank: usize, alpha: f64, lift_mode: LiftMode) -> Self {
        Self {
            rank,
            alpha,
            lift_mode,
            init_stddev: DEFAULT_INIT_STDDEV,
            target: "*".into(),
        }
    }

    pub fn with_target(mut self, target: impl Into<String>) -> Self {
        self.target = target.into();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(invalid("adapter rank must be positive"));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(invalid("adapter alpha must be positive"));
        }
        if !(self.init_stddev > 0.0 && self.init_stddev.is_finite()) {
            return Err(invalid("adapter init_stddev must be positive"));
        }
        Ok(())
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// `A` (n×r) and `B` (r×m) with the `alpha / r` scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankFactors {
    pub a: Tensor,
    pub b: Tensor,
    pub alpha: f64,
    pub rank: usize,
}

impl LowRankFactors {
    pub fn new(a: Tensor, b: Tensor, alpha: f64) -> Result<Self> {
        let (&[n, r], &[r2, _]) = (a.dims(), b.dims()) else {
            return Err(invalid("factors must be matrices"));
        };
        if r != r2 {
            return Err(Error::ShapeMismatch {
                op: "low_rank_factors",
                left: a.dims().to_vec(),
                right: b.dims().to_vec(),
            });
        }
        let m = b.dims()[1];
        if r > n.min(m) {
            return Err(invalid("rank exceeds min(n, m)"));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(invalid("alpha must be positive"));
        }
        Ok(Self { a, b, alpha, rank: r })
    }

    pub fn n(&self) -> usize {
        self.a.dims()[0]
    }

    pub fn m(&self) -> usize {
        self.b.dims()[1]
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// Gaussian `A`, zero `B`.
pub fn init_factors(
    n: usize,
    m: usize,
    rank: usize,
    alpha: f64,
    init_stddev: f64,
    dtype: DType,
    rng: &mut Rng,
) -> Result<LowRankFactors> {
    if rank == 0 || rank > n.min(m) {
        return Err(invalid(alloc::format!("rank {rank} outside 1..={}", n.min(m))));
    }
    let a = Tensor::gaussian(&[n, rank], 0.0, init_stddev, dtype, rng)?;
    let b = Tensor::zeros(&[rank, m], dtype)?;
    LowRankFactors::new(a, b, alpha)
}

/// `(alpha / r) · A · B`.
pub fn delta_matrix(factors: &LowRankFactors) -> Result<Tensor> {
    factors.a.matmul(&factors.b)?.scale(factors.scaling())
}

/// The delta reshaped onto a `(C_out, C_in, k, k)` kernel.
pub fn delta_for_kernel(factors: &LowRankFactors, kernel_dims: &[usize]) -> Result<Tensor> {
    delta_matrix(factors)?.unflatten_kernel(kernel_dims)
}

/// Combines a base weight and a same-shape delta.
pub fn lift(base: &Tensor, delta: &Tensor, mode: LiftMode) -> Result<Tensor> {
    if base.dims() != delta.dims() {
        return Err(Error::ShapeMismatch {
            op: "lift",
            left: base.dims().to_vec(),
            right: delta.dims().to_vec(),
        });
    }
    match mode {
        LiftMode::Additive => base.add(delta),
        LiftMode::LieExact => base.hadamard(&guarded_exp(delta)?),
        LiftMode::LieTaylor => base.add(&base.hadamard(delta)?),
    }
}

/// Records `lift` on a tape. Gradients flow only through `delta`.
pub fn lift_on_tape(tape: &mut Tape, base: VarId, delta: VarId, mode: LiftMode) -> Result<VarId> {
    match mode {
        LiftMode::Additive => tape.add(base, delta),
        LiftMode::LieExact => {
            guarded_exp(tape.value(delta)).map(drop)?;
            let e = tape.exp(delta)?;
            tape.hadamard(base, e)
        }
        LiftMode::LieTaylor => {
            let scaled = tape.hadamard(base, delta)?;
            tape.add(base, scaled)
        }
    }
}

/// Records `(alpha / r) · A · B`, reshaped to `target_dims` when given.
pub fn delta_on_tape(
    tape: &mut Tape,
    a: VarId,
    b: VarId,
    scaling: f64,
    target_dims: Option<&[usize]>,
) -> Result<VarId> {
    let ab = tape.matmul(a, b)?;
    let delta = tape.scale(ab, scaling)?;
    match target_dims {
        Some(dims) if dims.len() == 4 => tape.reshape(delta, dims),
        _ => Ok(delta),
    }
}

/// Weight shape an adapter attaches to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerDims {
    /// Weight `n_out × n_in`.
    Linear { n_out: usize, n_in: usize },
    /// Kernel `(c_out, c_in, k, k)`.
    Kernel { c_out: usize, c_in: usize, k: usize },
}

impl LayerDims {
    pub fn from_weight(dims: &[usize]) -> Result<Self> {
        match *dims {
            [n_out, n_in] => Ok(LayerDims::Linear { n_out, n_in }),
            [c_out, c_in, kh, kw] if kh == kw => Ok(LayerDims::Kernel { c_out, c_in, k: kh }),
            _ => Err(Error::InvalidShape {
                dims: dims.to_vec(),
                reason: "adapters attach to matrices or square kernels",
            }),
        }
    }

    /// `(n, m)` of the factorized matrix.
    pub fn factor_dims(self) -> (usize, usize) {
        match self {
            LayerDims::Linear { n_out, n_in } => (n_out, n_in),
            LayerDims::Kernel { c_out, c_in, k } => (c_out, c_in * k * k),
        }
    }

    pub fn weight_count(self) -> usize {
        let (n, m) = self.factor_dims();
        n * m
    }
}

/// `r · (n + m)` for the factorized view of the layer.
pub fn trainable_param_count(dims: LayerDims, rank: usize) -> usize {
    let (n, m) = dims.factor_dims();
    rank * (n + m)
}

/// An adapter bound to one frozen weight.
#[derive(Debug, Clone, PartialEq)]
pub struct AttachedAdapter {
    pub base: Tensor,
    pub factors: LowRankFactors,
    pub config: AdapterConfig,
    merged: bool,
}

impl AttachedAdapter {
    /// Fresh adapter with Gaussian `A` and zero `B`.
    pub fn attach(base: Tensor, config: &AdapterConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (n, m) = LayerDims::from_weight(base.dims())?.factor_dims();
        let factors = init_factors(n, m, config.rank, config.alpha, config.init_stddev, base.dtype(), rng)?;
        Ok(Self {
            base,
            factors,
            config: config.clone(),
            merged: false,
        })
    }

    /// Adapter around previously trained factors.
    pub fn from_parts(base: Tensor, factors: LowRankFactors, config: AdapterConfig) -> Result<Self> {
        let (n, m) = LayerDims::from_weight(base.dims())?.factor_dims();
        if (factors.n(), factors.m()) != (n, m) {
            return Err(Error::ShapeMismatch {
                op: "attach",
                left: base.dims().to_vec(),
                right: alloc::vec![factors.n(), factors.m()],
            });
        }
        Ok(Self {
            base,
            factors,
            config,
            merged: false,
        })
    }

    pub fn is_merged(&self) -> bool {
        self.merged
    }

    pub fn layer_dims(&self) -> LayerDims {
        LayerDims::from_weight(self.base.dims()).expect("validated at attach")
    }

    pub fn trainable_params(&self) -> usize {
        trainable_param_count(self.layer_dims(), self.factors.rank)
    }

    /// Number of exactly-zero base entries; such entries cannot move under
    /// either Lie mode.
    pub fn zero_base_entries(&self) -> usize {
        self.base.data().iter().filter(|&&x| x == 0.0).count()
    }

    /// Whether the base passes the group membership test at `eps`.
    pub fn base_is_group_member(&self, eps: f64) -> bool {
        check_membership(&self.base, eps).is_member()
    }

    /// Delta in the base weight's shape.
    pub fn delta(&self) -> Result<Tensor> {
        delta_matrix(&self.factors)?.reshape(self.base.dims())
    }

    pub fn effective_weight(&self) -> Result<Tensor> {
        if self.merged {
            return Ok(self.base.clone());
        }
        lift(&self.base, &self.delta()?, self.config.lift_mode)
    }

    /// `h = W_eff · x (+ bias)` for `x` of shape `[m]` or `[m, batch]`.
    /// The unmerged additive path is evaluated low-rank first:
    /// `W x + s · A (B x)`.
    pub fn forward_linear(&self, x: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let LayerDims::Linear { n_out, n_in } = self.layer_dims() else {
            return Err(invalid("forward_linear on a convolution adapter"));
        };
        let cols = match *x.dims() {
            [m] if m == n_in => 1,
            [m, batch] if m == n_in => batch,
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "forward_linear",
                    left: alloc::vec![n_out, n_in],
                    right: x.dims().to_vec(),
                })
            }
        };
        let xm = x.reshape(&[n_in, cols])?;
        let h = if !self.merged && self.config.lift_mode == LiftMode::Additive {
            let low = self.factors.a.matmul(&self.factors.b.matmul(&xm)?)?;
            self.base.matmul(&xm)?.add(&low.scale(self.factors.scaling())?)?
        } else {
            self.effective_weight()?.matmul(&xm)?
        };
        let h = match bias {
            Some(b) => {
                let bm = b.reshape(&[n_out, 1])?;
                let tiled: Vec<f64> = bm.data().iter().flat_map(|&v| core::iter::repeat(v).take(cols)).collect();
                h.add(&Tensor::from_vec_dtype(&[n_out, cols], tiled, h.dtype())?)?
            }
            None => h,
        };
        if x.dims().len() == 1 {
            h.reshape(&[n_out])
        } else {
            Ok(h)
        }
    }

    pub fn forward_conv(&self, input: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        if !matches!(self.layer_dims(), LayerDims::Kernel { .. }) {
            return Err(invalid("forward_conv on a linear adapter"));
        }
        conv2d(input, &self.effective_weight()?, stride, pad)
    }

    /// Bakes the effective weight into `base`.
    pub fn merge(&mut self) -> Result<()> {
        if self.merged {
            return Err(Error::State("adapter is already merged".into()));
        }
        self.base = self.effective_weight()?;
        self.merged = true;
        Ok(())
    }

    /// Inverts [`merge`](Self::merge) with the mode's inverse map.
    pub fn unmerge(&mut self) -> Result<()> {
        if !self.merged {
            return Err(Error::State("adapter is not merged".into()));
        }
        let delta = self.delta()?;
        let restored = match self.config.lift_mode {
            LiftMode::Additive => self.base.sub(&delta)?,
            LiftMode::LieExact => self.base.hadamard(&guarded_exp(&delta.scale(-1.0)?)?)?,
            LiftMode::LieTaylor => {
                let eps = self.base.dtype().membership_eps();
                let factor = delta.map_values("unmerge", |d| 1.0 + d)?;
                if let Some(pos) = factor.data().iter().position(|f| f.abs() <= eps) {
                    return Err(Error::State(alloc::format!(
                        "not invertible in Taylor regime: |1 + delta| <= {eps} at {:?}",
                        factor.shape().unravel(pos)
                    )));
                }
                self.base.div(&factor)?
            }
        };
        self.base = restored;
        self.merged = false;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Op;

    fn t(dims: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(dims, data.to_vec()).unwrap()
    }

    fn rank1() -> LowRankFactors {
        LowRankFactors::new(t(&[2, 1], &[1.0, 0.0]), t(&[1, 2], &[0.0, 1.0]), 1.0).unwrap()
    }

    #[test]
    fn init_shapes_and_zero_delta() {
        let f = init_factors(8, 36, 2, 4.0, 0.02, DType::F64, &mut Rng::new(5)).unwrap();
        assert_eq!(f.a.dims(), &[8, 2]);
        assert_eq!(f.b.dims(), &[2, 36]);
        assert!(f.b.data().iter().all(|x| x.to_bits() == 0));
        assert!(delta_matrix(&f).unwrap().data().iter().all(|&x| x == 0.0));
        assert!(init_factors(4, 3, 4, 1.0, 0.02, DType::F64, &mut Rng::new(1)).is_err());
        assert!(init_factors(4, 3, 0, 1.0, 0.02, DType::F64, &mut Rng::new(1)).is_err());
    }

    #[test]
    fn delta_examples() {
        assert_eq!(delta_matrix(&rank1()).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
        let mut f = init_factors(4, 5, 2, 2.0, 0.5, DType::F64, &mut Rng::new(2)).unwrap();
        f.b = Tensor::gaussian(&[2, 5], 0.0, 1.0, DType::F64, &mut Rng::new(3)).unwrap();
        let d1 = delta_matrix(&f).unwrap();
        f.alpha = 4.0;
        let d2 = delta_matrix(&f).unwrap();
        assert!(d1.scale(2.0).unwrap().bit_eq(&d2));
    }

    #[test]
    fn kernel_delta() {
        let mut f = init_factors(8, 36, 2, 2.0, 0.1, DType::F64, &mut Rng::new(4)).unwrap();
        assert!(delta_for_kernel(&f, &[8, 4, 3, 3]).unwrap().data().iter().all(|&x| x == 0.0));
        f.b = Tensor::gaussian(&[2, 36], 0.0, 1.0, DType::F64, &mut Rng::new(6)).unwrap();
        let k = delta_for_kernel(&f, &[8, 4, 3, 3]).unwrap();
        assert!(k.flatten_kernel().unwrap().bit_eq(&delta_matrix(&f).unwrap()));
        assert!(delta_for_kernel(&f, &[8, 3, 3, 3]).is_err());
    }

    #[test]
    fn lift_examples() {
        let base = t(&[1], &[2.0]);
        let d = t(&[1], &[0.1]);
        assert_eq!(lift(&base, &d, LiftMode::Additive).unwrap().data(), &[2.1]);
        assert_eq!(lift(&base, &d, LiftMode::LieTaylor).unwrap().data(), &[2.2]);
        let e = lift(&base, &d, LiftMode::LieExact).unwrap().data()[0];
        assert!((e - 2.210_341_836_151_295_5).abs() < 1e-15);
        let neg = lift(&t(&[1], &[-3.0]), &d, LiftMode::LieTaylor).unwrap().data()[0];
        assert!((neg + 3.3).abs() < 1e-15);
        let zero = Tensor::zeros(&[3], DType::F64).unwrap();
        let w = t(&[3], &[0.5, -1.0, 2.0]);
        for mode in LiftMode::ALL {
            assert!(lift(&w, &zero, mode).unwrap().bit_eq(&w));
        }
        assert!(lift(&w, &t(&[1], &[0.0]), LiftMode::Additive).is_err());
        assert!(matches!(
            lift(&w, &t(&[3], &[0.0, 701.0, 0.0]), LiftMode::LieExact),
            Err(Error::ExpOverflow { .. })
        ));
    }

    #[test]
    fn tape_lift_exp_counts() {
        for (mode, expected) in [(LiftMode::Additive, 0), (LiftMode::LieTaylor, 0), (LiftMode::LieExact, 1)] {
            let mut tape = Tape::new();
            let w = tape.input(t(&[2], &[1.0, 2.0]));
            let d = tape.param(t(&[2], &[0.1, 0.2]));
            let out = lift_on_tape(&mut tape, w, d, mode).unwrap();
            let exps = tape.nodes().iter().filter(|n| matches!(n.op, Op::Exp(_))).count();
            assert_eq!(exps, expected, "{mode}");
            let direct = lift(&t(&[2], &[1.0, 2.0]), &t(&[2], &[0.1, 0.2]), mode).unwrap();
            assert!(tape.value(out).bit_eq(&direct));
        }
    }

    #[test]
    fn linear_forward_examples() {
        let w = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let cfg = AdapterConfig::new(1, 1.0, LiftMode::Additive);
        let ad = AttachedAdapter::from_parts(w.clone(), rank1(), cfg).unwrap();
        let h = ad.forward_linear(&t(&[2], &[1.0, 1.0]), None).unwrap();
        assert_eq!(h.data(), &[2.0, 1.0]);
        let hb = ad.forward_linear(&t(&[2], &[1.0, 1.0]), Some(&t(&[2], &[0.5, -1.0]))).unwrap();
        assert_eq!(hb.data(), &[2.5, 0.0]);

        for mode in LiftMode::ALL {
            let cfg = AdapterConfig::new(2, 4.0, mode);
            let base = Tensor::gaussian(&[3, 4], 0.0, 1.0, DType::F64, &mut Rng::new(8)).unwrap();
            let ad = AttachedAdapter::attach(base.clone(), &cfg, &mut Rng::new(9)).unwrap();
            let x = Tensor::gaussian(&[4, 5], 0.0, 1.0, DType::F64, &mut Rng::new(10)).unwrap();
            assert!(ad.forward_linear(&x, None).unwrap().bit_eq(&base.matmul(&x).unwrap()));
        }
    }

    #[test]
    fn low_rank_first_matches_materialized() {
        let base = Tensor::gaussian(&[6, 5], 0.0, 1.0, DType::F64, &mut Rng::new(11)).unwrap();
        let mut ad = AttachedAdapter::attach(base, &AdapterConfig::new(2, 4.0, LiftMode::Additive), &mut Rng::new(12)).unwrap();
        ad.factors.b = Tensor::gaussian(&[2, 5], 0.0, 1.0, DType::F64, &mut Rng::new(13)).unwrap();
        let x = Tensor::gaussian(&[5, 3], 0.0, 1.0, DType::F64, &mut Rng::new(14)).unwrap();
        let fast = ad.forward_linear(&x, None).unwrap();
        let slow = ad.effective_weight().unwrap().matmul(&x).unwrap();
        assert!(fast.max_abs_diff(&slow).unwrap() <= 1e-12);
    }

    #[test]
    fn merge_state_machine() {
        let base = Tensor::gaussian(&[2, 3, 3, 3], 0.0, 1.0, DType::F64, &mut Rng::new(15)).unwrap();
        let mut ad = AttachedAdapter::attach(base.clone(), &AdapterConfig::new(1, 1.0, LiftMode::LieTaylor), &mut Rng::new(16)).unwrap();
        assert!(ad.unmerge().is_err());
        ad.merge().unwrap();
        assert!(ad.is_merged());
        assert!(ad.merge().is_err());
        ad.unmerge().unwrap();
        assert!(ad.base.allclose(&base, 1e-12, 0.0).unwrap());
    }

    #[test]
    fn taylor_unmerge_rejects_singular_factor() {
        let base = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        // delta = A·B = [[-1, 0], [0, 0]] makes 1 + delta vanish at (0, 0).
        let factors = LowRankFactors::new(t(&[2, 1], &[-1.0, 0.0]), t(&[1, 2], &[1.0, 0.0]), 1.0).unwrap();
        let mut ad = AttachedAdapter::from_parts(base, factors, AdapterConfig::new(1, 1.0, LiftMode::LieTaylor)).unwrap();
        ad.merge().unwrap();
        assert!(matches!(ad.unmerge(), Err(Error::State(_))));
    }

    #[test]
    fn param_counts() {
        assert_eq!(trainable_param_count(LayerDims::Linear { n_out: 8, n_in: 6 }, 2), 28);
        let k = LayerDims::Kernel { c_out: 8, c_in: 4, k: 3 };
        assert_eq!(trainable_param_count(k, 2), 88);
        assert_eq!(k.weight_count(), 288);
        let ratio = 88.0 / 288.0;
        assert!((ratio - 0.3056f64).abs() < 5e-5);
    }

    #[test]
    fn zero_base_entries_cannot_move_under_lie_modes() {
        let base = t(&[2, 2], &[0.0, 1.0, 2.0, 3.0]);
        let d = t(&[2, 2], &[0.3, 0.3, 0.3, 0.3]);
        for mode in [LiftMode::LieExact, LiftMode::LieTaylor] {
            assert_eq!(lift(&base, &d, mode).unwrap().data()[0], 0.0);
        }
        let ad = AttachedAdapter::attach(base, &AdapterConfig::new(1, 1.0, LiftMode::LieExact), &mut Rng::new(1)).unwrap();
        assert_eq!(ad.zero_base_entries(), 1);
        assert!(!ad.base_is_group_member(1e-12));
    }

    #[test]
    fn mode_names_round_trip() {
        for mode in LiftMode::ALL {
            assert_eq!(LiftMode::parse(mode.as_str()), Some(mode));
        }
        assert_eq!(LiftMode::parse("dora"), None);
    }
}
