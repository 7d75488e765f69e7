//! The Abelian group of tensors with no zero entry under the Hadamard product.
//!
//! Identity is the all-ones tensor, inverses are elementwise reciprocals, and
//! the Lie algebra (any finite tensor of the same shape) maps into the group
//! through the elementwise exponential.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::{derive_seed, Rng};
use crate::tensor::{DType, Tensor};

/// Largest `|x|` accepted by [`exp_map`].
pub const EXP_GUARD: f64 = 700.0;

/// Outcome of a membership test.
#[derive(Debug, Clone, PartialEq)]
pub struct Membership {
    pub min_abs: f64,
    /// First entry with `|x| <= eps`, if any.
    pub offending: Option<(Vec<usize>, f64)>,
}

impl Membership {
    pub fn is_member(&self) -> bool {
        self.offending.is_none()
    }
}

pub fn check_membership(tensor: &Tensor, eps: f64) -> Membership {
    debug_assert!(eps > 0.0);
    let offending = tensor
        .data()
        .iter()
        .position(|x| x.abs() <= eps)
        .map(|pos| (tensor.shape().unravel(pos), tensor.data()[pos]));
    Membership {
        min_abs: tensor.data().iter().fold(f64::INFINITY, |m, x| m.min(x.abs())),
        offending,
    }
}

fn require_member(tensor: &Tensor, eps: f64) -> Result<()> {
    match check_membership(tensor, eps).offending {
        None => Ok(()),
        Some((index, value)) => Err(Error::NotAMember { index, value, eps }),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupElement {
    value: Tensor,
    eps: f64,
}

impl GroupElement {
    /// Wraps a tensor with the dtype's default membership floor.
    pub fn new(value: Tensor) -> Result<Self> {
        let eps = value.dtype().membership_eps();
        Self::with_eps(value, eps)
    }

    pub fn with_eps(value: Tensor, eps: f64) -> Result<Self> {
        if !(eps > 0.0) {
            return Err(crate::error::invalid("membership eps must be positive"));
        }
        require_member(&value, eps)?;
        Ok(Self { value, eps })
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn into_tensor(self) -> Tensor {
        self.value
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn identity(dims: &[usize], dtype: DType) -> Result<Self> {
        Self::new(Tensor::ones(dims, dtype)?)
    }

    /// Hadamard product; closure is re-checked on the result.
    pub fn mul(&self, other: &GroupElement) -> Result<Self> {
        let eps = self.eps.max(other.eps);
        Self::with_eps(self.value.hadamard(&other.value)?, eps)
    }

    pub fn inverse(&self) -> Result<Self> {
        Self::with_eps(self.value.reciprocal_eps(self.eps)?, self.eps)
    }

    /// Elementwise logarithm; defined for positive elements (the image of exp).
    pub fn log_map(&self) -> Result<AlgebraElement> {
        Ok(AlgebraElement(self.value.map_ln()?))
    }
}

/// Unconstrained tensor in the Lie algebra.
#[derive(Debug, Clone, PartialEq)]
pub struct AlgebraElement(pub Tensor);

impl AlgebraElement {
    pub fn value(&self) -> &Tensor {
        &self.0
    }
}

pub fn group_identity(dims: &[usize], dtype: DType) -> Result<GroupElement> {
    GroupElement::identity(dims, dtype)
}

pub fn group_mul(a: &GroupElement, b: &GroupElement) -> Result<GroupElement> {
    a.mul(b)
}

pub fn group_inverse(a: &GroupElement) -> Result<GroupElement> {
    a.inverse()
}

fn guard_exp(delta: &Tensor) -> Result<()> {
    if let Some(pos) = delta.data().iter().position(|x| x.abs() >= EXP_GUARD) {
        return Err(Error::ExpOverflow {
            index: delta.shape().unravel(pos),
            value: delta.data()[pos],
        });
    }
    Ok(())
}

/// Elementwise exponential into the group. The result carries the smallest
/// normal float as its membership floor: every guarded input maps strictly
/// above it.
pub fn exp_map(delta: &AlgebraElement) -> Result<GroupElement> {
    guard_exp(&delta.0)?;
    let floor = match delta.0.dtype() {
        DType::F64 => f64::MIN_POSITIVE,
        DType::F32 => f32::MIN_POSITIVE as f64,
    };
    GroupElement::with_eps(delta.0.map_exp()?, floor)
}

/// Elementwise exponential of a raw tensor with the overflow guard applied.
pub fn guarded_exp(delta: &Tensor) -> Result<Tensor> {
    guard_exp(delta)?;
    delta.map_exp()
}

/// First-order surrogate `1 + delta`. Not a group element: fails when an entry
/// of the result has magnitude at or below `eps`.
pub fn taylor_exp(delta: &AlgebraElement, eps: f64) -> Result<Tensor> {
    let out = delta.0.map_values("taylor_exp", |x| 1.0 + x)?;
    if let Some(pos) = out.data().iter().position(|x| x.abs() <= eps) {
        return Err(Error::LeftGroup {
            index: out.shape().unravel(pos),
            delta: delta.0.data()[pos],
            eps,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axiom {
    Closure,
    Associativity,
    Identity,
    Inverse,
}

impl Axiom {
    pub fn name(self) -> &'static str {
        match self {
            Axiom::Closure => "closure",
            Axiom::Associativity => "associativity",
            Axiom::Identity => "identity",
            Axiom::Inverse => "inverse",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AxiomResult {
    pub axiom: Axiom,
    pub passed: bool,
    /// Worst relative error seen over all trials (0 for closure).
    pub worst_error: f64,
    /// Identity only: every product with ones was bit-identical.
    pub bit_exact: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AxiomReport {
    pub trials: usize,
    pub tolerance: f64,
    pub results: Vec<AxiomResult>,
}

impl AxiomReport {
    pub fn all_passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn get(&self, axiom: Axiom) -> &AxiomResult {
        self.results.iter().find(|r| r.axiom == axiom).expect("all axioms are reported")
    }
}

fn random_member(dims: &[usize], dtype: DType, rng: &mut Rng) -> Result<GroupElement> {
    loop {
        let t = Tensor::gaussian(dims, 0.0, 1.0, dtype, rng)?;
        if check_membership(&t, dtype.membership_eps()).is_member() {
            return GroupElement::new(t);
        }
    }
}

/// Tests closure, associativity, identity and inverse on random members.
/// Trial `i` draws from seed `derive_seed(seed, i)`.
pub fn axiom_suite(dims: &[usize], dtype: DType, trials: usize, seed: u64, tol: f64) -> Result<AxiomReport> {
    if trials == 0 {
        return Err(crate::error::invalid("axiom_suite needs at least one trial"));
    }
    let ones = Tensor::ones(dims, dtype)?;
    let identity = GroupElement::identity(dims, dtype)?;
    let mut closure_ok = true;
    let mut assoc_worst: f64 = 0.0;
    let mut ident_worst: f64 = 0.0;
    let mut ident_bits = true;
    let mut inv_worst: f64 = 0.0;
    let mut inverse_ok = true;

    for trial in 0..trials {
        let mut rng = Rng::new(derive_seed(seed, trial as u64));
        let a = random_member(dims, dtype, &mut rng)?;
        let b = random_member(dims, dtype, &mut rng)?;
        let c = random_member(dims, dtype, &mut rng)?;

        let ab = match a.mul(&b) {
            Ok(ab) => ab,
            Err(_) => {
                closure_ok = false;
                continue;
            }
        };
        let left = ab.mul(&c);
        let right = b.mul(&c).and_then(|bc| a.mul(&bc));
        match (left, right) {
            (Ok(l), Ok(r)) => assoc_worst = assoc_worst.max(l.value.max_rel_diff(&r.value)?),
            _ => closure_ok = false,
        }

        let ai = a.mul(&identity)?;
        let ia = identity.mul(&a)?;
        ident_bits &= ai.value.bit_eq(&a.value) && ia.value.bit_eq(&a.value);
        ident_worst = ident_worst
            .max(ai.value.max_rel_diff(&a.value)?)
            .max(ia.value.max_rel_diff(&a.value)?);

        match a.inverse().and_then(|inv| a.mul(&inv)) {
            Ok(p) => inv_worst = inv_worst.max(p.value.max_rel_diff(&ones)?),
            Err(_) => inverse_ok = false,
        }
    }

    let results = alloc::vec![
        AxiomResult {
            axiom: Axiom::Closure,
            passed: closure_ok,
            worst_error: 0.0,
            bit_exact: None,
        },
        AxiomResult {
            axiom: Axiom::Associativity,
            passed: closure_ok && assoc_worst <= tol,
            worst_error: assoc_worst,
            bit_exact: None,
        },
        AxiomResult {
            axiom: Axiom::Identity,
            passed: ident_bits && ident_worst <= tol,
            worst_error: ident_worst,
            bit_exact: Some(ident_bits),
        },
        AxiomResult {
            axiom: Axiom::Inverse,
            passed: inverse_ok && inv_worst <= tol,
            worst_error: inv_worst,
            bit_exact: None,
        },
    ];
    Ok(AxiomReport {
        trials,
        tolerance: tol,
        results,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;
    use crate::rng::Rng;

    fn t(dims: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(dims, data.to_vec()).unwrap()
    }

    fn alg(dims: &[usize], data: &[f64]) -> AlgebraElement {
        AlgebraElement(t(dims, data))
    }

    #[test]
    fn membership() {
        assert!(check_membership(&Tensor::ones(&[3, 3], DType::F64).unwrap(), 1e-12).is_member());
        let m = check_membership(&t(&[2, 2], &[1.0, 2.0, 0.0, 3.0]), 1e-12);
        assert_eq!(m.offending, Some((vec![1, 0], 0.0)));
        assert!(GroupElement::new(t(&[2], &[1.0, 0.0])).is_err());

        for trial in 0..100 {
            let g = Tensor::gaussian(&[2, 3, 3, 3], 0.0, 0.02, DType::F64, &mut Rng::new(trial)).unwrap();
            assert!(check_membership(&g, 1e-30).is_member());
        }
    }

    #[test]
    fn group_operations() {
        let x = GroupElement::new(t(&[2], &[2.0, -4.0])).unwrap();
        let id = group_identity(&[2], DType::F64).unwrap();
        assert!(group_mul(&x, &id).unwrap().value().bit_eq(x.value()));
        assert_eq!(group_inverse(&x).unwrap().value().data(), &[0.5, -0.25]);
        let p = group_mul(&x, &group_inverse(&x).unwrap()).unwrap();
        assert!(p.value().allclose(id.value(), 1e-12, 0.0).unwrap());

        let tiny = GroupElement::new(t(&[1], &[1e-7])).unwrap();
        assert!(matches!(group_mul(&tiny, &tiny), Err(Error::NotAMember { .. })));
        let y = GroupElement::new(t(&[3], &[1.0, 2.0, 3.0])).unwrap();
        assert!(group_mul(&x, &y).is_err());
    }

    #[test]
    fn exponential_map() {
        let z = AlgebraElement(Tensor::zeros(&[2, 3], DType::F64).unwrap());
        assert!(exp_map(&z).unwrap().value().bit_eq(&Tensor::ones(&[2, 3], DType::F64).unwrap()));
        let e = exp_map(&alg(&[1], &[0.1])).unwrap().value().data()[0];
        assert!((e - 1.105_170_918_075_647_7).abs() < 1e-15);
        assert!(matches!(exp_map(&alg(&[2], &[1.0, 700.0])), Err(Error::ExpOverflow { .. })));
        assert!(exp_map(&alg(&[1], &[-800.0])).is_err());
    }

    #[test]
    fn taylor_surrogate() {
        let z = AlgebraElement(Tensor::zeros(&[4], DType::F64).unwrap());
        assert_eq!(taylor_exp(&z, 1e-12).unwrap().data(), &[1.0; 4]);
        let small = alg(&[1], &[0.01]);
        let approx = taylor_exp(&small, 1e-12).unwrap();
        assert_eq!(approx.data(), &[1.01]);
        let exact = exp_map(&small).unwrap();
        let gap = (exact.value().data()[0] - approx.data()[0]).abs();
        assert!((gap - 5.0167e-5).abs() <= 1e-9, "{gap}");
        match taylor_exp(&alg(&[2], &[0.5, -1.0]), 1e-12) {
            Err(Error::LeftGroup { index, .. }) => assert_eq!(index, vec![1]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn axioms_hold() {
        let report = axiom_suite(&[2, 3, 3, 3], DType::F64, 100, 42, 1e-12).unwrap();
        assert!(report.all_passed(), "{report:?}");
        assert_eq!(report.get(Axiom::Identity).bit_exact, Some(true));
        assert_eq!(report.get(Axiom::Identity).worst_error, 0.0);
        assert!(report.get(Axiom::Associativity).worst_error <= 4.0 * f64::EPSILON);
        assert!(axiom_suite(&[2], DType::F64, 0, 1, 1e-12).is_err());
    }

    proptest! {
        #[test]
        fn exp_is_a_homomorphism(seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let a = Tensor::gaussian(&[3, 4], 0.0, 1.0, DType::F64, &mut rng).unwrap();
            let b = Tensor::gaussian(&[3, 4], 0.0, 1.0, DType::F64, &mut rng).unwrap();
            let lhs = exp_map(&AlgebraElement(a.add(&b).unwrap())).unwrap();
            let rhs = exp_map(&AlgebraElement(a.clone())).unwrap()
                .mul(&exp_map(&AlgebraElement(b)).unwrap()).unwrap();
            prop_assert!(lhs.value().allclose(rhs.value(), 1e-12, 0.0).unwrap());
        }

        #[test]
        fn one_parameter_subgroup(seed in any::<u64>(), s in -2.0f64..2.0, u in -2.0f64..2.0) {
            let d = Tensor::gaussian(&[5], 0.0, 1.0, DType::F64, &mut Rng::new(seed)).unwrap();
            let e = |c: f64| exp_map(&AlgebraElement(d.scale(c).unwrap())).unwrap();
            let lhs = e(s).mul(&e(u)).unwrap();
            let rhs = exp_map(&AlgebraElement(d.scale(s + u).unwrap())).unwrap();
            prop_assert!(lhs.value().allclose(rhs.value(), 1e-12, 0.0).unwrap());
        }

        #[test]
        fn log_inverts_exp(seed in any::<u64>(), scale in 0.01f64..50.0) {
            let x = Tensor::gaussian(&[2, 2, 3, 3], 0.0, scale, DType::F64, &mut Rng::new(seed)).unwrap();
            let back = exp_map(&AlgebraElement(x.clone())).unwrap().log_map().unwrap();
            for (b, v) in back.value().data().iter().zip(x.data()) {
                prop_assert!((b - v).abs() <= 1e-12 * v.abs().max(1.0));
            }
        }

        #[test]
        fn exp_output_is_member_and_identity_is_exact(seed in any::<u64>()) {
            let w = Tensor::gaussian(&[4, 4], 0.0, 1.0, DType::F64, &mut Rng::new(seed)).unwrap();
            let d = Tensor::gaussian(&[4, 4], 0.0, 3.0, DType::F64, &mut Rng::new(seed ^ 1)).unwrap();
            let e = exp_map(&AlgebraElement(d)).unwrap();
            let floor = e.value().data().iter().fold(f64::INFINITY, |m, x| m.min(*x));
            prop_assert!(check_membership(e.value(), floor * 0.5).is_member());
            let z = exp_map(&AlgebraElement(w.zeros_like())).unwrap();
            prop_assert!(w.hadamard(z.value()).unwrap().bit_eq(&w));
        }
    }
}
