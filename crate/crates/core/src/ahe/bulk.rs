//! Bulk homomorphic kernel: per-column weighted sums of a ciphertext vector.
//!
//! Given ciphertexts `c_1..c_r` (all at one exponent) and an `r x m` plaintext
//! coefficient matrix `K` of signed mantissas, computes
//! `out_j = sum_i K[i][j] * dec(c_i)` homomorphically, i.e.
//! `prod_i c_i^(K[i][j]) mod n^2` per column.
//!
//! Naively that is `r * m` modular exponentiations. Two cheaper strategies:
//!
//! * **Buckets** (dense, small coefficient magnitudes): per column, multiply
//!   each ciphertext into the bucket for its coefficient magnitude, then fold
//!   the buckets with a running suffix product so bucket `d` ends up raised
//!   to the power `d`. Cost per column is one multiply per row plus ~2 per
//!   bucket, independent of coefficient bit-width.
//! * **Row tables** (sparse, or wide coefficients): per row, build the
//!   square chain of `c_i` once and fold `c_i^|K[i][j]|` into a positive or
//!   negative accumulator per column, sharing the squarings across columns.
//!
//! Negative coefficients accumulate separately; each column then needs one
//! modular inversion, done for all columns at once with Montgomery batch
//! inversion. Both strategies compute the exact same ring element for the
//! same inputs — the product is independent of grouping and order — which is
//! what makes sharded execution bit-identical to serial execution.

use num_bigint::BigUint;
use num_traits::One;

use super::cipher::{Ciphertext, PowerTable};
use super::keys::{modinv, PublicKey};
use super::{AheError, MAX_EXPONENT};

/// Plaintext coefficients as signed fixed-point mantissas.
#[derive(Clone, Debug)]
pub enum CoeffMatrix {
    /// Row-major `rows x cols`.
    Dense { cols: usize, data: Vec<i64> },
    /// Per-row `(column, mantissa)` pairs, strictly increasing by column.
    Sparse {
        cols: usize,
        rows: Vec<Vec<(u32, i64)>>,
    },
}

impl CoeffMatrix {
    pub fn rows(&self) -> usize {
        match self {
            CoeffMatrix::Dense { cols, data } => {
                if *cols == 0 {
                    0
                } else {
                    data.len() / cols
                }
            }
            CoeffMatrix::Sparse { rows, .. } => rows.len(),
        }
    }

    pub fn cols(&self) -> usize {
        match self {
            CoeffMatrix::Dense { cols, .. } => *cols,
            CoeffMatrix::Sparse { cols, .. } => *cols,
        }
    }

    fn max_abs(&self) -> u64 {
        match self {
            CoeffMatrix::Dense { data, .. } => {
                data.iter().map(|k| k.unsigned_abs()).max().unwrap_or(0)
            }
            CoeffMatrix::Sparse { rows, .. } => rows
                .iter()
                .flat_map(|r| r.iter().map(|(_, k)| k.unsigned_abs()))
                .max()
                .unwrap_or(0),
        }
    }

    fn nonzeros(&self) -> usize {
        match self {
            CoeffMatrix::Dense { data, .. } => data.iter().filter(|k| **k != 0).count(),
            CoeffMatrix::Sparse { rows, .. } => rows.iter().map(|r| r.len()).sum(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KernelStrategy {
    Auto,
    Buckets,
    RowTables,
}

/// Largest coefficient magnitude the bucket strategy will allocate for.
const BUCKET_LIMIT: u64 = 1 << 16;

pub fn weighted_sums(
    pk: &PublicKey,
    cts: &[Ciphertext],
    coeffs: &CoeffMatrix,
    coeff_exponent: i32,
) -> Result<Vec<Ciphertext>, AheError> {
    weighted_sums_with(pk, cts, coeffs, coeff_exponent, KernelStrategy::Auto)
}

pub fn weighted_sums_with(
    pk: &PublicKey,
    cts: &[Ciphertext],
    coeffs: &CoeffMatrix,
    coeff_exponent: i32,
    strategy: KernelStrategy,
) -> Result<Vec<Ciphertext>, AheError> {
    let rows = coeffs.rows();
    let cols = coeffs.cols();
    if rows != cts.len() || rows == 0 {
        return Err(AheError::ShapeMismatch {
            rows,
            cols,
            expected: cts.len(),
        });
    }
    if !(0..=MAX_EXPONENT).contains(&coeff_exponent) {
        return Err(AheError::ExponentOutOfRange(coeff_exponent));
    }
    let ct_exponent = cts[0].exponent();
    for ct in cts {
        if ct.exponent() != ct_exponent {
            return Err(AheError::ExponentMismatch(ct_exponent, ct.exponent()));
        }
    }
    let out_exponent = ct_exponent
        .checked_add(coeff_exponent)
        .filter(|e| *e <= MAX_EXPONENT)
        .ok_or(AheError::ExponentOutOfRange(MAX_EXPONENT))?;

    let max_abs = coeffs.max_abs();
    if max_abs == 0 {
        return Ok(vec![pk.zero_ciphertext(out_exponent); cols]);
    }
    if max_abs >= 1 << 62 {
        return Err(AheError::ValueTooLarge);
    }

    let use_buckets = match strategy {
        KernelStrategy::Buckets => true,
        KernelStrategy::RowTables => false,
        KernelStrategy::Auto => match coeffs {
            // Buckets need column-order access, which the sparse layout
            // cannot serve; and they only beat row tables while the bucket
            // count stays comparable to the row count.
            CoeffMatrix::Sparse { .. } => false,
            CoeffMatrix::Dense { .. } => {
                let bits = u64::from(64 - max_abs.leading_zeros());
                let est_buckets = rows as u64 + 4 * max_abs;
                let est_tables =
                    rows as u64 * (bits + 1) + coeffs.nonzeros() as u64 * (bits / 2 + 1);
                max_abs <= BUCKET_LIMIT && est_buckets < est_tables
            }
        },
    };
    if use_buckets && max_abs > BUCKET_LIMIT {
        return Err(AheError::ValueTooLarge);
    }

    let (pos, neg) = if use_buckets {
        match coeffs {
            CoeffMatrix::Dense { cols, data } => {
                bucket_accumulate(pk, cts, *cols, data, max_abs as usize)
            }
            CoeffMatrix::Sparse { .. } => unreachable!("bucket strategy requires dense input"),
        }
    } else {
        row_table_accumulate(pk, cts, coeffs, max_abs)
    };

    combine_signed(pk, pos, neg, out_exponent)
}

/// Bucket strategy, one column at a time to keep only `2 * (max_abs + 1)`
/// live buckets.
fn bucket_accumulate(
    pk: &PublicKey,
    cts: &[Ciphertext],
    cols: usize,
    data: &[i64],
    max_abs: usize,
) -> (Vec<BigUint>, Vec<BigUint>) {
    let nn = pk.n_squared();
    let mut pos = Vec::with_capacity(cols);
    let mut neg = Vec::with_capacity(cols);
    let mut buckets_pos: Vec<Option<BigUint>> = vec![None; max_abs + 1];
    let mut buckets_neg: Vec<Option<BigUint>> = vec![None; max_abs + 1];
    for j in 0..cols {
        for b in buckets_pos.iter_mut() {
            *b = None;
        }
        for b in buckets_neg.iter_mut() {
            *b = None;
        }
        for (i, ct) in cts.iter().enumerate() {
            let k = data[i * cols + j];
            if k == 0 {
                continue;
            }
            let slot = if k > 0 {
                &mut buckets_pos[k as usize]
            } else {
                &mut buckets_neg[k.unsigned_abs() as usize]
            };
            match slot {
                Some(b) => *b = &*b * ct.value() % nn,
                None => *slot = Some(ct.value().clone()),
            }
        }
        pos.push(fold_buckets(&buckets_pos, nn));
        neg.push(fold_buckets(&buckets_neg, nn));
    }
    (pos, neg)
}

/// Folds weight-`d` buckets into `prod_d bucket[d]^d` via a running suffix
/// product.
fn fold_buckets(buckets: &[Option<BigUint>], nn: &BigUint) -> BigUint {
    let mut running = BigUint::one();
    let mut acc = BigUint::one();
    for b in buckets.iter().skip(1).rev() {
        if let Some(b) = b {
            running = &running * b % nn;
        }
        if !running.is_one() {
            acc = &acc * &running % nn;
        }
    }
    acc
}

/// Row-table strategy: per row, one square chain shared by every column.
fn row_table_accumulate(
    pk: &PublicKey,
    cts: &[Ciphertext],
    coeffs: &CoeffMatrix,
    max_abs: u64,
) -> (Vec<BigUint>, Vec<BigUint>) {
    let cols = coeffs.cols();
    let bits = 64 - max_abs.leading_zeros();
    let mut pos = vec![BigUint::one(); cols];
    let mut neg = vec![BigUint::one(); cols];
    let mut fold = |i: usize, entries: &mut dyn Iterator<Item = (usize, i64)>| {
        let table = PowerTable::new(pk, cts[i].value(), bits);
        for (j, k) in entries {
            if k == 0 {
                continue;
            }
            let acc = if k > 0 { &mut pos[j] } else { &mut neg[j] };
            table.mul_pow_into(acc, k.unsigned_abs());
        }
    };
    match coeffs {
        CoeffMatrix::Dense { cols, data } => {
            for i in 0..cts.len() {
                let row = &data[i * cols..(i + 1) * cols];
                fold(i, &mut row.iter().copied().enumerate());
            }
        }
        CoeffMatrix::Sparse { rows, .. } => {
            for (i, row) in rows.iter().enumerate() {
                fold(i, &mut row.iter().map(|(j, k)| (*j as usize, *k)));
            }
        }
    }
    (pos, neg)
}

/// `out_j = pos_j * neg_j^-1 mod n^2`, inverting all non-trivial negative
/// accumulators with one modular inversion (Montgomery batch inversion).
fn combine_signed(
    pk: &PublicKey,
    pos: Vec<BigUint>,
    mut neg: Vec<BigUint>,
    out_exponent: i32,
) -> Result<Vec<Ciphertext>, AheError> {
    let nn = pk.n_squared();
    let needs_inv: Vec<usize> = (0..neg.len()).filter(|&j| !neg[j].is_one()).collect();
    if !needs_inv.is_empty() {
        let mut prefix = Vec::with_capacity(needs_inv.len());
        let mut acc = BigUint::one();
        for &j in &needs_inv {
            acc = &acc * &neg[j] % nn;
            prefix.push(acc.clone());
        }
        let mut inv_acc = modinv(&acc, nn).ok_or(AheError::NotInvertible)?;
        for idx in (0..needs_inv.len()).rev() {
            let j = needs_inv[idx];
            let inv_j = if idx == 0 {
                inv_acc.clone()
            } else {
                &inv_acc * &prefix[idx - 1] % nn
            };
            inv_acc = &inv_acc * &neg[j] % nn;
            neg[j] = inv_j;
        }
    }
    Ok(pos
        .into_iter()
        .zip(neg)
        .map(|(p, n_inv)| {
            let value = if n_inv.is_one() { p } else { p * n_inv % nn };
            Ciphertext::from_parts(value, out_exponent)
        })
        .collect())
}
