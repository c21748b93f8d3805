//! Byte-stable JSON: object keys sorted, floats written with 17 significant
//! digits in `%.17g` style.

use std::io;

use serde::Serialize;
use serde_json::ser::{Formatter, PrettyFormatter};

use crate::error::Result;

/// `%.17g` rendering of a finite float.
pub fn format_g17(v: f64) -> String {
    if v == 0.0 {
        return if v.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let sci = format!("{:.16e}", v);
    let (mant, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    let (sign, mant) = match mant.strip_prefix('-') {
        Some(m) => ("-", m),
        None => ("", mant),
    };
    let digits: String = mant.chars().filter(|c| *c != '.').collect();
    if (-4..17).contains(&exp) {
        let body = if exp >= 0 {
            let split = (exp + 1) as usize;
            format!("{}.{}", &digits[..split], &digits[split..])
        } else {
            format!("0.{}{}", "0".repeat((-exp - 1) as usize), digits)
        };
        let body = trim_fraction(&body);
        format!("{sign}{body}")
    } else {
        let full = format!("{}.{}", &digits[..1], &digits[1..]);
        let body = trim_fraction(&full);
        let esign = if exp < 0 { '-' } else { '+' };
        format!("{sign}{body}e{esign}{:02}", exp.abs())
    }
}

fn trim_fraction(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Pretty printer that renders floats through [`format_g17`].
struct G17<'a>(PrettyFormatter<'a>);

impl Formatter for G17<'_> {
    fn write_f64<W: ?Sized + io::Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        w.write_all(format_g17(value).as_bytes())
    }
    fn write_f32<W: ?Sized + io::Write>(&mut self, w: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(w, value as f64)
    }
    fn begin_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_array(w)
    }
    fn end_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array(w)
    }
    fn begin_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_array_value(w, first)
    }
    fn end_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array_value(w)
    }
    fn begin_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object(w)
    }
    fn end_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object(w)
    }
    fn begin_object_key<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_object_key(w, first)
    }
    fn begin_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object_value(w)
    }
    fn end_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object_value(w)
    }
}

/// Serialize with sorted keys and 17-digit floats, newline terminated.
pub fn to_string<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    // Going through `Value` sorts object keys (BTreeMap-backed map).
    let v = serde_json::to_value(value)?;
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, G17(PrettyFormatter::new()));
    v.serialize(&mut ser)?;
    out.push(b'\n');
    Ok(String::from_utf8(out).expect("serde_json emits UTF-8"))
}

/// Serde adapter writing a dense matrix as a list of rows.
pub mod matrix_rows {
    use nalgebra::DMatrix;
    use serde::{de::Error as _, Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows: Vec<Vec<f64>> = Vec::deserialize(d)?;
        from_rows(&rows).map_err(D::Error::custom)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>, String> {
        let r = rows.len();
        let c = rows.first().map(|v| v.len()).unwrap_or(0);
        if rows.iter().any(|v| v.len() != c) {
            return Err("ragged matrix rows".into());
        }
        Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
    }
}

/// Serde adapter for a list of matrices.
pub mod matrix_list {
    use nalgebra::DMatrix;
    use serde::{de::Error as _, Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(ms: &[DMatrix<f64>], s: S) -> Result<S::Ok, S::Error> {
        let all: Vec<Vec<Vec<f64>>> = ms
            .iter()
            .map(|m| (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect())
            .collect();
        all.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<DMatrix<f64>>, D::Error> {
        let all: Vec<Vec<Vec<f64>>> = Vec::deserialize(d)?;
        all.iter()
            .map(|rows| super::matrix_rows::from_rows(rows).map_err(D::Error::custom))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn g17_examples() {
        assert_eq!(format_g17(1.0), "1");
        assert_eq!(format_g17(19.14), "19.140000000000001");
        assert_eq!(format_g17(0.5), "0.5");
        assert_eq!(format_g17(-2.5e-7), "-2.4999999999999999e-07");
        assert_eq!(format_g17(1e20), "1e+20");
        assert_eq!(format_g17(1e-4), "0.0001");
        assert_eq!(format_g17(123456.0), "123456");
    }

    #[test]
    fn keys_are_sorted() {
        #[derive(Serialize)]
        struct S {
            zeta: f64,
            alpha: u32,
        }
        let s = to_string(&S { zeta: 0.1, alpha: 2 }).unwrap();
        assert!(s.find("alpha").unwrap() < s.find("zeta").unwrap());
        assert!(s.contains("0.10000000000000001"));
    }

    proptest! {
        #[test]
        fn g17_round_trips(v in proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL) {
            let s = format_g17(v);
            let back: f64 = s.parse().unwrap();
            prop_assert_eq!(back.to_bits(), v.to_bits());
            let j: f64 = serde_json::from_str(&s).unwrap();
            prop_assert_eq!(j.to_bits(), v.to_bits());
        }
    }
}
