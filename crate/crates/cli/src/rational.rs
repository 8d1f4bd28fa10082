//! Numbers given as `a/b` or decimals, e.g. `4/255` for an ε.

use std::fmt;
use std::str::FromStr;

use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Denominator used for canonical output.
const PIXEL_LEVELS: f64 = 255.0;

#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct Rational(pub f64);

impl Rational {
    pub fn value(self) -> f64 {
        self.0
    }

    /// `k` when the value is exactly `k/255`.
    fn pixel_levels(self) -> Option<i64> {
        let k = (self.0 * PIXEL_LEVELS).round();
        (k.abs() < 1e15 && k / PIXEL_LEVELS == self.0).then_some(k as i64)
    }
}

impl FromStr for Rational {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let s = s.trim();
        let parse = |t: &str| t.trim().parse::<f64>().map_err(|_| format!("'{s}' is not a number or a/b fraction"));
        let v = match s.split_once('/') {
            Some((a, b)) => {
                let (a, b) = (parse(a)?, parse(b)?);
                if b == 0.0 {
                    return Err(format!("'{s}' divides by zero"));
                }
                a / b
            }
            None => parse(s)?,
        };
        if !v.is_finite() {
            return Err(format!("'{s}' is not finite"));
        }
        Ok(Rational(v))
    }
}

impl fmt::Display for Rational {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.pixel_levels() {
            Some(k) => write!(f, "{k}/255"),
            None => write!(f, "{}", self.0),
        }
    }
}

impl Serialize for Rational {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self.pixel_levels() {
            Some(_) => s.serialize_str(&self.to_string()),
            None => s.serialize_f64(self.0),
        }
    }
}

impl<'de> Deserialize<'de> for Rational {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = Rational;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a number or an \"a/b\" string")
            }

            fn visit_f64<E: de::Error>(self, v: f64) -> Result<Rational, E> {
                Ok(Rational(v))
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Rational, E> {
                Ok(Rational(v as f64))
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Rational, E> {
                Ok(Rational(v as f64))
            }

            fn visit_str<E: de::Error>(self, v: &str) -> Result<Rational, E> {
                v.parse().map_err(E::custom)
            }
        }
        d.deserialize_any(V)
    }
}
