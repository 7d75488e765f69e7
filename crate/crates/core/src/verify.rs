//! Independent numerical oracles: central-difference gradients, a Jacobi SVD
//! for numerical rank, the first-order remainder probe and the rank-capacity
//! experiment.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::{softmax_xent, Tape};
use crate::error::{invalid, Error, Result};
use crate::liegroup::{exp_map, taylor_exp, AlgebraElement};
use crate::peft::{delta_on_tape, lift, lift_on_tape, LiftMode, LowRankFactors};
use crate::rng::{derive_seed, Rng};
use crate::tensor::{conv2d, DType, Tensor};

pub const DEFAULT_RANK_THRESHOLD: f64 = 1e-8;
pub const GRAD_TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative gradient error, so that coordinates
/// whose true gradient vanishes are judged by absolute error instead.
pub const GRAD_ERROR_FLOOR: f64 = 1e-6;

const JACOBI_MAX_SWEEPS: usize = 60;
const JACOBI_TOL: f64 = 1e-14;
const SVD_MAX_DIM: usize = 64;

/// Probe step for coordinate value `x`.
pub fn fd_step(x: f64) -> f64 {
    1e-5 * x.abs().max(1.0)
}

/// Central differences of `loss` at `theta` for the listed flat coordinates
/// (all of them when `coords` is `None`).
pub fn finite_diff_grad(
    loss: &mut dyn FnMut(&Tensor) -> Result<f64>,
    theta: &Tensor,
    coords: Option<&[usize]>,
) -> Result<Vec<f64>> {
    if theta.dtype() != DType::F64 {
        return Err(invalid("finite differences need F64 parameters"));
    }
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..theta.numel()).collect();
            &all
        }
    };
    let mut out = Vec::with_capacity(coords.len());
    for &i in coords {
        let x = *theta
            .data()
            .get(i)
            .ok_or_else(|| invalid(format!("coordinate {i} out of range")))?;
        let h = fd_step(x);
        let probe = |v: f64, loss: &mut dyn FnMut(&Tensor) -> Result<f64>| -> Result<f64> {
            let mut data = theta.data().to_vec();
            data[i] = v;
            let f = loss(&Tensor::from_vec(theta.dims(), data)?)?;
            if !f.is_finite() {
                return Err(Error::NonFinite { op: "finite_diff_grad", index: vec![i] });
            }
            Ok(f)
        };
        let up = probe(x + h, loss)?;
        let down = probe(x - h, loss)?;
        out.push((up - down) / ((x + h) - (x - h)));
    }
    Ok(out)
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_ERROR_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub name: String,
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn new(name: impl Into<String>, entries: Vec<GradCheckEntry>, tolerance: f64) -> Self {
        let max_rel_err = entries.iter().map(|e| e.rel_err).fold(0.0, f64::max);
        Self {
            name: name.into(),
            passed: !entries.is_empty() && max_rel_err <= tolerance,
            entries,
            max_rel_err,
            tolerance,
        }
    }
}

/// Singular values of a matrix of at most 64×64, descending, by one-sided
/// Jacobi rotations.
pub fn svd_small(matrix: &Tensor) -> Result<Vec<f64>> {
    let [rows, cols] = *matrix.dims() else {
        return Err(invalid("svd_small needs a matrix"));
    };
    if rows > SVD_MAX_DIM || cols > SVD_MAX_DIM {
        return Err(invalid(format!("svd_small supports at most {SVD_MAX_DIM}x{SVD_MAX_DIM}")));
    }
    // Orthogonalize the columns of the taller orientation.
    let (n, m, get): (usize, usize, &dyn Fn(usize, usize) -> f64) = if rows >= cols {
        (rows, cols, &|i, j| matrix.data()[i * cols + j])
    } else {
        (cols, rows, &|i, j| matrix.data()[j * cols + i])
    };
    let mut col: Vec<Vec<f64>> = (0..m).map(|j| (0..n).map(|i| get(i, j)).collect()).collect();
    let mut converged = false;
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..m {
            for q in p + 1..m {
                let alpha: f64 = col[p].iter().map(|x| x * x).sum();
                let beta: f64 = col[q].iter().map(|x| x * x).sum();
                let gamma: f64 = col[p].iter().zip(&col[q]).map(|(x, y)| x * y).sum();
                if alpha == 0.0 || beta == 0.0 || gamma.abs() <= JACOBI_TOL * libm::sqrt(alpha * beta) {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + libm::sqrt(1.0 + zeta * zeta));
                let c = 1.0 / libm::sqrt(1.0 + t * t);
                let s = c * t;
                let (left, right) = col.split_at_mut(q);
                for (x, y) in left[p].iter_mut().zip(right[0].iter_mut()) {
                    let (u, v) = (*x, *y);
                    *x = c * u - s * v;
                    *y = s * u + c * v;
                }
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NoConvergence { sweeps: JACOBI_MAX_SWEEPS });
    }
    let mut sigma: Vec<f64> = col.iter().map(|c| libm::sqrt(c.iter().map(|x| x * x).sum())).collect();
    sigma.sort_by(|a, b| b.total_cmp(a));
    Ok(sigma)
}

/// Count of singular values strictly above `rel_threshold · σ₁`.
pub fn numerical_rank(matrix: &Tensor, rel_threshold: f64) -> Result<usize> {
    Ok(rank_of(&svd_small(matrix)?, rel_threshold))
}

pub fn rank_of(sigma: &[f64], rel_threshold: f64) -> usize {
    match sigma.first() {
        Some(&top) if top > 0.0 => sigma.iter().filter(|&&s| s > rel_threshold * top).count(),
        _ => 0,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaylorProbe {
    pub scales: Vec<f64>,
    /// Frobenius norm of `exp(tΔ) − (1 + tΔ)` for each scale `t`.
    pub errors: Vec<f64>,
    /// Least-squares slope of `ln E` against `ln t`; `None` when any error is
    /// zero.
    pub slope: Option<f64>,
}

pub const PROBE_SCALES: [f64; 4] = [1.0, 0.5, 0.25, 0.125];

/// Remainder of the first-order surrogate along the ray `tΔ`.
pub fn taylor_decay(delta: &Tensor) -> Result<TaylorProbe> {
    let mut errors = Vec::with_capacity(PROBE_SCALES.len());
    for &t in &PROBE_SCALES {
        let d = AlgebraElement(delta.scale(t)?);
        let exact = exp_map(&d)?;
        let approx = taylor_exp(&d, 0.0)?;
        errors.push(exact.value().sub(&approx)?.frobenius_norm());
    }
    let slope = if errors.iter().all(|&e| e > 0.0) {
        let xs: Vec<f64> = PROBE_SCALES.iter().map(|&t| libm::log(t)).collect();
        let ys: Vec<f64> = errors.iter().map(|&e| libm::log(e)).collect();
        let k = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / k;
        let my = ys.iter().sum::<f64>() / k;
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
        Some(sxy / sxx)
    } else {
        None
    };
    Ok(TaylorProbe { scales: PROBE_SCALES.to_vec(), errors, slope })
}

/// Gaussian `Δ` of the given shape rescaled so `max|Δ| = base_scale`, probed
/// with [`taylor_decay`].
pub fn taylor_decay_probe(dims: &[usize], base_scale: f64, seed: u64) -> Result<TaylorProbe> {
    if !(0.0..=0.5).contains(&base_scale) {
        return Err(invalid("base_scale must lie in [0, 0.5]"));
    }
    let raw = Tensor::gaussian(dims, 0.0, 1.0, DType::F64, &mut Rng::new(seed))?;
    let peak = raw.max_abs();
    let delta = if peak > 0.0 { raw.scale(base_scale / peak)? } else { raw };
    taylor_decay(&delta)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankReport {
    pub n: usize,
    pub m: usize,
    pub rank: usize,
    pub trials: usize,
    pub threshold: f64,
    /// Singular values of `s·A·B` per trial.
    pub low_rank_sigma: Vec<Vec<f64>>,
    /// Singular values of `W ⊙ s·A·B` per trial.
    pub hadamard_sigma: Vec<Vec<f64>>,
    pub low_rank_ranks: Vec<usize>,
    pub hadamard_ranks: Vec<usize>,
    /// Trials where `rank(s·A·B) = r`.
    pub low_rank_hits: usize,
    /// Trials where `rank(W ⊙ s·A·B) = min(n, m)`.
    pub hadamard_hits: usize,
}

/// Draws Gaussian `W (n×m)`, `A (n×r)`, `B (r×m)` per trial from
/// `derive_seed(seed, trial)` and records both numerical ranks with `s = 1`.
pub fn rank_capacity_experiment(n: usize, m: usize, r: usize, trials: usize, seed: u64) -> Result<RankReport> {
    if r == 0 || r > n.min(m) || n.max(m) > SVD_MAX_DIM {
        return Err(invalid(format!("need 1 <= r <= min(n, m) <= {SVD_MAX_DIM}")));
    }
    let threshold = DEFAULT_RANK_THRESHOLD;
    let mut report = RankReport {
        n,
        m,
        rank: r,
        trials,
        threshold,
        low_rank_sigma: Vec::with_capacity(trials),
        hadamard_sigma: Vec::with_capacity(trials),
        low_rank_ranks: Vec::with_capacity(trials),
        hadamard_ranks: Vec::with_capacity(trials),
        low_rank_hits: 0,
        hadamard_hits: 0,
    };
    for trial in 0..trials {
        let mut rng = Rng::new(derive_seed(seed, trial as u64));
        let w = Tensor::gaussian(&[n, m], 0.0, 1.0, DType::F64, &mut rng)?;
        let a = Tensor::gaussian(&[n, r], 0.0, 1.0, DType::F64, &mut rng)?;
        let b = Tensor::gaussian(&[r, m], 0.0, 1.0, DType::F64, &mut rng)?;
        let ab = a.matmul(&b)?;
        let s_lr = svd_small(&ab)?;
        let s_h = svd_small(&w.hadamard(&ab)?)?;
        let (r_lr, r_h) = (rank_of(&s_lr, threshold), rank_of(&s_h, threshold));
        report.low_rank_hits += usize::from(r_lr == r);
        report.hadamard_hits += usize::from(r_h == n.min(m));
        report.low_rank_ranks.push(r_lr);
        report.hadamard_ranks.push(r_h);
        report.low_rank_sigma.push(s_lr);
        report.hadamard_sigma.push(s_h);
    }
    Ok(report)
}

/// Layer kind exercised by [`adapter_grad_check`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckLayer {
    /// Weight 16×12, input batch 5, 16 classes.
    Linear,
    /// Kernel (6, 4, 3, 3) with pad 1 on a (2, 4, 5, 5) input, followed by a
    /// frozen linear read-out to 3 classes.
    Conv,
}

impl CheckLayer {
    pub fn as_str(self) -> &'static str {
        match self {
            CheckLayer::Linear => "linear",
            CheckLayer::Conv => "conv",
        }
    }
}

struct Problem {
    layer: CheckLayer,
    mode: LiftMode,
    base: Tensor,
    input: Tensor,
    readout: Option<Tensor>,
    labels: Vec<usize>,
    scaling: f64,
}

impl Problem {
    fn new(layer: CheckLayer, mode: LiftMode, rng: &mut Rng) -> Result<(Self, Tensor, Tensor)> {
        let rank = 4;
        let g = |dims: &[usize], sd: f64, rng: &mut Rng| Tensor::gaussian(dims, 0.0, sd, DType::F64, rng);
        let (base, input, readout, labels, n, m) = match layer {
            CheckLayer::Linear => {
                let labels = (0..5).map(|i| (i * 7) % 16).collect();
                (g(&[16, 12], 0.5, rng)?, g(&[5, 12], 1.0, rng)?, None, labels, 16, 12)
            }
            CheckLayer::Conv => {
                let readout = g(&[3, 6 * 25], 0.2, rng)?;
                (g(&[6, 4, 3, 3], 0.5, rng)?, g(&[2, 4, 5, 5], 1.0, rng)?, Some(readout), vec![2, 0], 6, 36)
            }
        };
        let a = g(&[n, rank], 0.3, rng)?;
        let b = g(&[rank, m], 0.3, rng)?;
        Ok((Self { layer, mode, base, input, readout, labels, scaling: 1.0 }, a, b))
    }

    /// Loss from plain tensor operations, independent of the tape.
    fn loss(&self, a: &Tensor, b: &Tensor) -> Result<f64> {
        let delta = a.matmul(b)?.scale(self.scaling)?;
        let logits = match self.layer {
            CheckLayer::Linear => {
                let w = lift(&self.base, &delta, self.mode)?;
                self.input.matmul(&w.transpose()?)?
            }
            CheckLayer::Conv => {
                let k = lift(&self.base, &delta.unflatten_kernel(self.base.dims())?, self.mode)?;
                let y = conv2d(&self.input, &k, 1, 1)?;
                let feat = y.reshape(&[2, 6 * 25])?;
                feat.matmul(&self.readout.as_ref().expect("conv read-out").transpose()?)?
            }
        };
        Ok(softmax_xent(&logits, &self.labels)?.0)
    }

    /// Analytic gradients of `A` and `B` through the tape.
    fn tape_grads(&self, a: &Tensor, b: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let x = tape.input(self.input.clone());
        let base = tape.input(self.base.clone());
        let ia = tape.param(a.clone());
        let ib = tape.param(b.clone());
        let logits = match self.layer {
            CheckLayer::Linear => {
                let delta = delta_on_tape(&mut tape, ia, ib, self.scaling, None)?;
                let w = lift_on_tape(&mut tape, base, delta, self.mode)?;
                let wt = tape.transpose(w)?;
                tape.matmul(x, wt)?
            }
            CheckLayer::Conv => {
                let delta = delta_on_tape(&mut tape, ia, ib, self.scaling, Some(self.base.dims()))?;
                let k = lift_on_tape(&mut tape, base, delta, self.mode)?;
                let y = tape.conv2d(x, k, 1, 1)?;
                let feat = tape.reshape(y, &[2, 6 * 25])?;
                let r = tape.input(self.readout.clone().expect("conv read-out"));
                let rt = tape.transpose(r)?;
                tape.matmul(feat, rt)?
            }
        };
        let loss = tape.softmax_xent(logits, &self.labels)?;
        let grads = tape.backward(loss)?;
        Ok((grads[&ia].clone(), grads[&ib].clone()))
    }
}

/// End-to-end gradient check of one adapted layer through cross-entropy,
/// with non-zero `B` so both factors carry signal. Every coordinate of `A`
/// and `B` is probed.
pub fn adapter_grad_check(layer: CheckLayer, mode: LiftMode, seed: u64) -> Result<GradCheckReport> {
    let mut rng = Rng::new(seed);
    let (problem, a, b) = Problem::new(layer, mode, &mut rng)?;
    LowRankFactors::new(a.clone(), b.clone(), 4.0)?;
    let (ga, gb) = problem.tape_grads(&a, &b)?;
    let na = finite_diff_grad(&mut |t| problem.loss(t, &b), &a, None)?;
    let nb = finite_diff_grad(&mut |t| problem.loss(&a, t), &b, None)?;
    let mut entries = Vec::with_capacity(na.len() + nb.len());
    for (param, analytic, numeric) in [("A", &ga, &na), ("B", &gb, &nb)] {
        for (index, (&an, &nu)) in analytic.data().iter().zip(numeric).enumerate() {
            entries.push(GradCheckEntry {
                param: param.into(),
                index,
                analytic: an,
                numeric: nu,
                rel_err: relative_error(an, nu),
            });
        }
    }
    Ok(GradCheckReport::new(format!("{}+{}", layer.as_str(), mode.as_str()), entries, GRAD_TOLERANCE))
}

/// All six layer × lift-mode combinations.
pub fn adapter_grad_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut out = Vec::new();
    for (i, layer) in [CheckLayer::Linear, CheckLayer::Conv].into_iter().enumerate() {
        for (j, mode) in LiftMode::ALL.into_iter().enumerate() {
            out.push(adapter_grad_check(layer, mode, derive_seed(seed, (i * 3 + j) as u64))?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: &[usize], v: &[f64]) -> Tensor {
        Tensor::from_vec(dims, v.to_vec()).unwrap()
    }

    #[test]
    fn finite_difference_examples() {
        let g = finite_diff_grad(&mut |x| Ok(x.data()[0] * x.data()[0]), &t(&[1], &[3.0]), None).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-9);

        let w = t(&[2, 2], &[0.5, -1.5, 2.0, 3.0]);
        let mut f = |x: &Tensor| Ok(w.hadamard(&x.map_exp()?)?.sum());
        let g = finite_diff_grad(&mut f, &Tensor::zeros(&[2, 2], DType::F64).unwrap(), None).unwrap();
        for (a, b) in g.iter().zip(w.data()) {
            assert!((a - b).abs() < 1e-9);
        }

        let g = finite_diff_grad(&mut |_| Ok(4.2), &t(&[3], &[1.0, -7.0, 1e3]), Some(&[0, 2])).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
        assert!(finite_diff_grad(&mut |_| Ok(f64::NAN), &t(&[1], &[0.0]), None).is_err());
    }

    #[test]
    fn svd_examples() {
        assert_eq!(svd_small(&t(&[2, 2], &[3.0, 0.0, 0.0, 1.0])).unwrap(), vec![3.0, 1.0]);
        assert_eq!(svd_small(&t(&[2, 2], &[1.0, 0.0, 0.0, 3.0])).unwrap(), vec![3.0, 1.0]);

        let u = [0.6, 0.8, 0.0];
        let v = [0.0, 0.28, 0.96, 0.0];
        let outer: Vec<f64> = u.iter().flat_map(|a| v.iter().map(move |b| a * b)).collect();
        let s = svd_small(&t(&[3, 4], &outer)).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-12 && s[1..].iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn svd_preserves_frobenius_norm() {
        for (seed, dims) in [(1, [8, 8]), (2, [5, 9]), (3, [13, 4]), (4, [64, 64])] {
            let a = Tensor::gaussian(&dims, 0.0, 1.0, DType::F64, &mut Rng::new(seed)).unwrap();
            let s = svd_small(&a).unwrap();
            assert_eq!(s.len(), dims[0].min(dims[1]));
            assert!(s.windows(2).all(|w| w[0] >= w[1]) && s.iter().all(|&x| x >= 0.0));
            let fro2 = a.frobenius_norm().powi(2);
            let sum: f64 = s.iter().map(|x| x * x).sum();
            assert!((sum - fro2).abs() <= 1e-10 * fro2, "{dims:?}");
        }
        assert!(svd_small(&Tensor::zeros(&[65, 2], DType::F64).unwrap()).is_err());
    }

    #[test]
    fn gaussian_matrices_are_nonsingular() {
        for seed in 0..100 {
            let a = Tensor::gaussian(&[8, 8], 0.0, 1.0, DType::F64, &mut Rng::new(seed)).unwrap();
            assert_eq!(numerical_rank(&a, DEFAULT_RANK_THRESHOLD).unwrap(), 8, "seed {seed}");
        }
    }

    #[test]
    fn rank_examples() {
        assert_eq!(numerical_rank(&Tensor::zeros(&[4, 4], DType::F64).unwrap(), 1e-8).unwrap(), 0);
        let one = rank_capacity_experiment(1, 1, 1, 5, 3).unwrap();
        assert_eq!((one.low_rank_hits, one.hadamard_hits), (5, 5));
        let full = rank_capacity_experiment(6, 6, 6, 20, 4).unwrap();
        assert_eq!((full.low_rank_hits, full.hadamard_hits), (20, 20));
        assert!(rank_capacity_experiment(4, 4, 5, 1, 0).is_err());
    }

    #[test]
    fn rank_is_monotone_in_threshold() {
        let r = rank_capacity_experiment(8, 8, 3, 10, 11).unwrap();
        for s in r.low_rank_sigma.iter().chain(&r.hadamard_sigma) {
            let ranks: Vec<usize> = [1e-14, 1e-10, 1e-8, 1e-4, 0.1, 0.5].iter().map(|&th| rank_of(s, th)).collect();
            assert!(ranks.windows(2).all(|w| w[0] >= w[1]), "{ranks:?}");
        }
    }

    #[test]
    fn taylor_probe() {
        let p = taylor_decay_probe(&[4, 6], 0.1, 7).unwrap();
        let slope = p.slope.unwrap();
        assert!((1.9..=2.1).contains(&slope), "{slope}");
        let scalar = taylor_decay(&t(&[1], &[0.01])).unwrap();
        assert!((scalar.errors[0] - 5.0167e-5).abs() < 1e-9);
        assert!((scalar.errors[0] - (libm::exp(0.01) - 1.01)).abs() < 1e-18);
        let zero = taylor_decay(&Tensor::zeros(&[3], DType::F64).unwrap()).unwrap();
        assert!(zero.errors.iter().all(|&e| e == 0.0) && zero.slope.is_none());
    }

    #[test]
    fn adapter_gradients_match_differences() {
        for report in adapter_grad_suite(2024).unwrap() {
            assert!(report.entries.len() >= 100, "{}", report.name);
            assert!(report.passed, "{}: {}", report.name, report.max_rel_err);
        }
    }
}
