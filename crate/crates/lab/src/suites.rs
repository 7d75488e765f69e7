//! Verification suites run by `liera-lab verify`.

use std::path::{Path, PathBuf};

use liera_core::format::{tensor_from_bytes, tensor_to_bytes, Container, FormatError};
use liera_core::liegroup::{axiom_suite, exp_map, Axiom, AlgebraElement};
use liera_core::rng::{derive_seed, Rng};
use liera_core::verify::{adapter_grad_suite, rank_capacity_experiment, taylor_decay, taylor_decay_probe, GRAD_TOLERANCE};
use liera_core::{DType, Error, Tensor};

use crate::error::{LabError, LabResult};
use crate::report::{check_csv_schema, write_csv, RankTrialRow, VerifyRow, RANK_TRIALS_HEADER, VERIFY_HEADER};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, clap::ValueEnum)]
pub enum Suite {
    Group,
    Grad,
    Rank,
    Taylor,
    Format,
    All,
}

impl Suite {
    pub const EACH: [Suite; 5] = [Suite::Group, Suite::Grad, Suite::Rank, Suite::Taylor, Suite::Format];

    pub fn as_str(self) -> &'static str {
        match self {
            Suite::Group => "group",
            Suite::Grad => "grad",
            Suite::Rank => "rank",
            Suite::Taylor => "taylor",
            Suite::Format => "format",
            Suite::All => "all",
        }
    }
}

pub const GROUP_DIMS: [usize; 4] = [2, 3, 3, 3];
pub const GROUP_TRIALS: usize = 100;
pub const GROUP_TOL: f64 = 1e-12;
pub const RANK_TRIALS: usize = 100;
pub const MIN_GRAD_COORDS: usize = 100;
pub const SPOT_EXPECTED: f64 = 5.0167e-5;

pub fn group_rows(seed: u64) -> LabResult<Vec<VerifyRow>> {
    let report = axiom_suite(&GROUP_DIMS, DType::F64, GROUP_TRIALS, seed, GROUP_TOL)?;
    Ok(report
        .results
        .iter()
        .map(|r| {
            let (threshold, passed) = match r.axiom {
                Axiom::Identity => ("<=1e-12 rel; bit-exact", r.passed && r.bit_exact == Some(true)),
                Axiom::Closure => ("all products nonzero", r.passed),
                _ => ("<=1e-12 rel", r.passed),
            };
            VerifyRow::new("group", r.axiom.name(), r.worst_error, threshold, passed)
        })
        .collect())
}

pub fn grad_rows(seed: u64) -> LabResult<Vec<VerifyRow>> {
    Ok(adapter_grad_suite(seed)?
        .into_iter()
        .map(|r| {
            let passed = r.passed && r.entries.len() >= MIN_GRAD_COORDS;
            VerifyRow::new(
                "grad",
                format!("{} ({} coords)", r.name, r.entries.len()),
                r.max_rel_err,
                format!("<={GRAD_TOLERANCE:e}"),
                passed,
            )
        })
        .collect())
}

pub fn rank_rows(seed: u64) -> LabResult<(Vec<VerifyRow>, Vec<RankTrialRow>)> {
    let r = rank_capacity_experiment(8, 8, 2, RANK_TRIALS, seed)?;
    let rows = vec![
        VerifyRow::new("rank", "low_rank_equals_r", r.low_rank_hits as f64, format!("={RANK_TRIALS}"), r.low_rank_hits == RANK_TRIALS),
        VerifyRow::new("rank", "hadamard_full_rank", r.hadamard_hits as f64, ">=99", r.hadamard_hits >= 99),
    ];
    let trials = (0..r.trials)
        .map(|t| RankTrialRow {
            trial: t,
            low_rank_rank: r.low_rank_ranks[t],
            hadamard_rank: r.hadamard_ranks[t],
            low_rank_sigma_max: r.low_rank_sigma[t][0],
            hadamard_sigma_min: *r.hadamard_sigma[t].last().expect("non-empty spectrum"),
        })
        .collect();
    Ok((rows, trials))
}

/// Exponential-map identities and the first-order remainder.
pub fn taylor_rows(seed: u64) -> LabResult<Vec<VerifyRow>> {
    let mut rows = Vec::new();

    let zero = Tensor::zeros(&GROUP_DIMS, DType::F64)?;
    let e0 = exp_map(&AlgebraElement(zero))?;
    let exact = e0.value().bit_eq(&Tensor::ones(&GROUP_DIMS, DType::F64)?);
    rows.push(VerifyRow::new("taylor", "exp_zero_is_ones", f64::from(u8::from(!exact)), "bit-exact", exact));

    let mut worst: f64 = 0.0;
    for trial in 0..GROUP_TRIALS {
        let mut rng = Rng::new(derive_seed(seed, trial as u64));
        let a = Tensor::gaussian(&GROUP_DIMS, 0.0, 1.0, DType::F64, &mut rng)?;
        let b = Tensor::gaussian(&GROUP_DIMS, 0.0, 1.0, DType::F64, &mut rng)?;
        let lhs = exp_map(&AlgebraElement(a.add(&b)?))?;
        let rhs = exp_map(&AlgebraElement(a))?.mul(&exp_map(&AlgebraElement(b))?)?;
        worst = worst.max(lhs.value().max_rel_diff(rhs.value())?);
    }
    rows.push(VerifyRow::new("taylor", "one_parameter_subgroup", worst, "<=1e-12 rel", worst <= GROUP_TOL));

    let probe = taylor_decay_probe(&[8, 8], 0.1, seed)?;
    let slope = probe.slope.unwrap_or(f64::NAN);
    rows.push(VerifyRow::new("taylor", "remainder_slope", slope, "[1.9,2.1]", (1.9..=2.1).contains(&slope)));

    let spot = taylor_decay(&Tensor::from_vec(&[1], vec![0.01])?)?.errors[0];
    rows.push(VerifyRow::new(
        "taylor",
        "scalar_remainder_0.01",
        spot,
        "5.0167e-5 +- 1e-9",
        (spot - SPOT_EXPECTED).abs() <= 1e-9,
    ));
    Ok(rows)
}

fn format_kind(err: &Error) -> Option<&FormatError> {
    match err {
        Error::Format(f) => Some(f),
        _ => None,
    }
}

/// Binary round trips and corruption detection, then schema checks of every
/// CSV under `out_dir` and of the `extra` files.
pub fn format_rows(seed: u64, out_dir: &Path, extra: &[PathBuf]) -> LabResult<Vec<VerifyRow>> {
    let mut rows = Vec::new();
    let mut rng = Rng::new(seed);
    let mut all_exact = true;
    let mut container = Container::new();
    for (i, (dims, dtype)) in [(&[3usize, 4][..], DType::F64), (&[2, 1, 5, 5][..], DType::F32), (&[7][..], DType::F64)]
        .into_iter()
        .enumerate()
    {
        let t = Tensor::gaussian(dims, 0.0, 1.0, dtype, &mut rng)?;
        let back = tensor_from_bytes(&tensor_to_bytes(&t))?;
        all_exact &= back.bit_eq(&t) && back.dtype() == dtype;
        container.insert_tensor(format!("t{i}"), t).map_err(Error::from)?;
    }
    container.insert_json("meta.json", "{\"k\":1}").map_err(Error::from)?;
    let bytes = container.to_bytes();
    let back = Container::from_bytes(&bytes)?;
    all_exact &= back.to_bytes() == bytes;
    rows.push(VerifyRow::new("format", "lten_lckp_round_trip", f64::from(u8::from(!all_exact)), "bit-exact", all_exact));

    let truncated = Container::from_bytes(&bytes[..bytes.len() - 3]);
    let ok = matches!(truncated.as_ref().err().and_then(format_kind), Some(FormatError::Truncated));
    rows.push(VerifyRow::new("format", "truncated_detected", f64::from(u8::from(ok)), "truncated payload", ok));
    let mut bad = bytes.clone();
    bad[0] ^= 0xff;
    let ok = matches!(Container::from_bytes(&bad).as_ref().err().and_then(format_kind), Some(FormatError::BadMagic));
    rows.push(VerifyRow::new("format", "bad_magic_detected", f64::from(u8::from(ok)), "bad magic", ok));
    let mut bad = tensor_to_bytes(&Tensor::zeros(&[2], DType::F64)?);
    bad[4] = 9;
    let ok = matches!(
        tensor_from_bytes(&bad).as_ref().err().and_then(format_kind),
        Some(FormatError::UnsupportedVersion(9))
    );
    rows.push(VerifyRow::new("format", "bad_version_detected", f64::from(u8::from(ok)), "unsupported version", ok));

    let mut files: Vec<PathBuf> = match std::fs::read_dir(out_dir) {
        Ok(rd) => rd
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "csv") && p.file_name().is_some_and(|n| n != "format.csv"))
            .collect(),
        Err(_) => Vec::new(),
    };
    files.sort();
    files.extend(extra.iter().cloned());
    for f in files {
        let name = f.file_name().map_or_else(|| f.display().to_string(), |n| n.to_string_lossy().into_owned());
        let (passed, threshold) = match check_csv_schema(&f) {
            Ok(schema) => (true, format!("{schema} schema")),
            Err(e) => (false, e),
        };
        rows.push(VerifyRow::new("format", format!("schema:{name}"), f64::from(u8::from(!passed)), threshold, passed));
    }
    Ok(rows)
}

/// Outcome of one suite, written to `<out>/<suite>.csv`.
#[derive(Debug, Clone)]
pub struct SuiteOutcome {
    pub suite: Suite,
    pub rows: Vec<VerifyRow>,
}

impl SuiteOutcome {
    pub fn passed(&self) -> bool {
        !self.rows.is_empty() && self.rows.iter().all(|r| r.passed)
    }
}

/// Runs the requested suite (all five for `Suite::All`, format last so it
/// can check the others' output).
pub fn run_suites(suite: Suite, out_dir: &Path, seed: u64, extra: &[PathBuf]) -> LabResult<Vec<SuiteOutcome>> {
    std::fs::create_dir_all(out_dir).map_err(|e| LabError::io(out_dir, e))?;
    let list: Vec<Suite> = if suite == Suite::All { Suite::EACH.to_vec() } else { vec![suite] };
    let mut out = Vec::new();
    for s in list {
        let rows = match s {
            Suite::Group => group_rows(seed)?,
            Suite::Grad => grad_rows(seed)?,
            Suite::Rank => {
                let (rows, trials) = rank_rows(seed)?;
                write_csv(&out_dir.join("rank_trials.csv"), &trials, &RANK_TRIALS_HEADER)?;
                rows
            }
            Suite::Taylor => taylor_rows(seed)?,
            Suite::Format => format_rows(seed, out_dir, extra)?,
            Suite::All => unreachable!("expanded above"),
        };
        write_csv(&out_dir.join(format!("{}.csv", s.as_str())), &rows, &VERIFY_HEADER)?;
        out.push(SuiteOutcome { suite: s, rows });
    }
    Ok(out)
}
