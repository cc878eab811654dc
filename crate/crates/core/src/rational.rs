//! Exact decimal parsing, rounding, and fixed-point formatting for scores.
//!
//! Accuracies and gains are ratios of small integers, so all arithmetic stays
//! in `Ratio<i64>` and equality is exact. Rounding happens once, at the
//! emission boundary, with round-half-to-even: summary tables carry genuine
//! ties (e.g. 0.09/4 = 0.0225 at three decimals) and half-even is the rule
//! that reproduces the published reference tables.

use num_rational::Ratio;
use num_traits::{Signed, Zero};

pub type Rat = Ratio<i64>;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("invalid decimal literal {0:?}")]
pub struct DecimalParseError(pub String);

/// Parse a plain decimal literal ("0.71", "-0.08", "13") into an exact ratio.
pub fn parse_decimal(s: &str) -> Result<Rat, DecimalParseError> {
    let t = s.trim();
    let err = || DecimalParseError(s.to_string());
    let (sign, body) = match t.strip_prefix('-') {
        Some(rest) => (-1i64, rest),
        None => (1i64, t.strip_prefix('+').unwrap_or(t)),
    };
    if body.is_empty() {
        return Err(err());
    }
    let (int_part, frac_part) = match body.split_once('.') {
        Some((i, f)) => (i, f),
        None => (body, ""),
    };
    if int_part.is_empty() && frac_part.is_empty() {
        return Err(err());
    }
    if !int_part.bytes().all(|b| b.is_ascii_digit()) || !frac_part.bytes().all(|b| b.is_ascii_digit())
    {
        return Err(err());
    }
    if frac_part.len() > 15 {
        return Err(err());
    }
    let int_val: i64 = if int_part.is_empty() {
        0
    } else {
        int_part.parse().map_err(|_| err())?
    };
    let scale = 10i64.pow(frac_part.len() as u32);
    let frac_val: i64 = if frac_part.is_empty() {
        0
    } else {
        frac_part.parse().map_err(|_| err())?
    };
    let numer = int_val
        .checked_mul(scale)
        .and_then(|v| v.checked_add(frac_val))
        .ok_or_else(err)?;
    Ok(Ratio::new(sign * numer, scale))
}

/// Round to `dp` decimal places, ties to even.
pub fn round_half_even(x: Rat, dp: u32) -> Rat {
    let scale = 10i64.pow(dp);
    let y = x * Ratio::from_integer(scale);
    let n = *y.numer();
    let d = *y.denom(); // Ratio keeps denom > 0
    let q = n.div_euclid(d);
    let r = n.rem_euclid(d);
    let rounded = match (2 * r).cmp(&d) {
        std::cmp::Ordering::Less => q,
        std::cmp::Ordering::Greater => q + 1,
        std::cmp::Ordering::Equal => {
            if q % 2 == 0 {
                q
            } else {
                q + 1
            }
        }
    };
    Ratio::new(rounded, scale)
}

/// Format with exactly `dp` digits after the point, half-even rounded.
/// Negative zero never appears: a value that rounds to zero prints unsigned.
pub fn format_fixed(x: Rat, dp: u32) -> String {
    let r = round_half_even(x, dp);
    let scale = 10i64.pow(dp);
    let scaled = (r * Ratio::from_integer(scale)).to_integer();
    let sign = if scaled < 0 { "-" } else { "" };
    let digits = scaled.abs().to_string();
    if dp == 0 {
        return format!("{sign}{digits}");
    }
    let digits = if digits.len() <= dp as usize {
        format!("{:0>width$}", digits, width = dp as usize + 1)
    } else {
        digits
    };
    let split = digits.len() - dp as usize;
    format!("{sign}{}.{}", &digits[..split], &digits[split..])
}

/// Round to the nearest integer (half-even) and return it.
pub fn round_to_integer(x: Rat) -> i64 {
    round_half_even(x, 0).to_integer()
}

/// Mean of a non-empty slice, exact.
pub fn mean(values: &[Rat]) -> Option<Rat> {
    if values.is_empty() {
        return None;
    }
    let sum: Rat = values.iter().sum();
    Some(sum / Ratio::from_integer(values.len() as i64))
}

/// max(x, 0)
pub fn positive_part(x: Rat) -> Rat {
    if x.is_positive() {
        x
    } else {
        Rat::zero()
    }
}
