//! Number formatting shared by JSON reports and human-readable tables.

use serde::ser::SerializeSeq;
use serde::{Serialize, Serializer};
use serde_json::value::RawValue;

/// Value scaled by 10⁴ and rounded half away from zero.
///
/// The four-decimal stopping rule and the printed tables both go through
/// this function so they can never disagree.
pub fn round4(v: f64) -> i64 {
    (v * 1e4).round() as i64
}

/// Formats `v` with exactly four decimals using [`round4`].
pub fn fixed4(v: f64) -> String {
    let q = round4(v);
    let sign = if q < 0 { "-" } else { "" };
    let q = q.unsigned_abs();
    format!("{sign}{}.{:04}", q / 10_000, q % 10_000)
}

/// Positional decimal with 17 significant digits (enough to round-trip any f64).
pub fn sig17(v: f64) -> String {
    if v == 0.0 {
        return "0.0".to_string();
    }
    if !v.is_finite() {
        // JSON has no NaN or infinity.
        return "null".to_string();
    }
    let sci = format!("{:.16e}", v);
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-30..=30).contains(&exp) {
        return sci;
    }
    let (sign, mantissa) = match mantissa.strip_prefix('-') {
        Some(m) => ("-", m),
        None => ("", mantissa),
    };
    let digits: String = mantissa.chars().filter(|c| *c != '.').collect();
    let body = if exp < 0 {
        format!("0.{}{}", "0".repeat((-exp - 1) as usize), digits)
    } else if exp >= 16 {
        format!("{}{}.0", digits, "0".repeat((exp - 16) as usize))
    } else {
        let split = exp as usize + 1;
        format!("{}.{}", &digits[..split], &digits[split..])
    };
    format!("{sign}{body}")
}

fn raw<E: serde::ser::Error>(v: f64) -> Result<Box<RawValue>, E> {
    RawValue::from_string(sig17(v)).map_err(E::custom)
}

pub(crate) fn ser_f64<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    raw::<S::Error>(*v)?.serialize(s)
}

pub(crate) fn ser_vec<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
    let mut seq = s.serialize_seq(Some(v.len()))?;
    for &x in v {
        seq.serialize_element(&raw::<S::Error>(x)?)?;
    }
    seq.end()
}
