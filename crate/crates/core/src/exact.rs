//! Exact rational quantities used for points and minutes.
//!
//! Values are stored as reduced `i64` ratios. Serialized form is a JSON
//! string: a terminating decimal when the denominator allows it (`"7.5"`,
//! `"-2"`), otherwise a fraction (`"1/3"`). Deserialization also accepts
//! plain JSON numbers.

use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};
use std::str::FromStr;

use num_rational::Ratio;
use num_traits::{Signed, ToPrimitive, Zero};
use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Exact(Ratio<i64>);

/// Points awarded or deducted by a rubric item, or a total score.
pub type Points = Exact;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("invalid exact number {0:?}")]
pub struct ParseExactError(pub String);

impl Exact {
    pub const ZERO: Exact = Exact(Ratio::new_raw(0, 1));

    pub fn new(numer: i64, denom: i64) -> Self {
        Exact(Ratio::new(numer, denom))
    }

    pub fn from_int(value: i64) -> Self {
        Exact(Ratio::from_integer(value))
    }

    pub fn ratio(&self) -> Ratio<i64> {
        self.0
    }

    pub fn numer(&self) -> i64 {
        *self.0.numer()
    }

    pub fn denom(&self) -> i64 {
        *self.0.denom()
    }

    pub fn is_zero(&self) -> bool {
        self.0.is_zero()
    }

    pub fn is_negative(&self) -> bool {
        self.0.is_negative()
    }

    pub fn is_positive(&self) -> bool {
        self.0.is_positive()
    }

    pub fn to_f64(&self) -> f64 {
        self.0.to_f64().unwrap_or(f64::NAN)
    }

    /// `min(max(self, lo), hi)`: the lower bound is applied first.
    pub fn clamp_to(self, lo: Exact, hi: Exact) -> Exact {
        let floored = if self < lo { lo } else { self };
        if floored > hi {
            hi
        } else {
            floored
        }
    }

    /// Number of decimal places needed to print this value exactly, if any.
    fn decimal_places(&self) -> Option<u32> {
        let mut d = self.denom();
        let mut twos = 0u32;
        let mut fives = 0u32;
        while d % 2 == 0 {
            d /= 2;
            twos += 1;
        }
        while d % 5 == 0 {
            d /= 5;
            fives += 1;
        }
        (d == 1).then_some(twos.max(fives)).filter(|p| *p <= 12)
    }
}

impl fmt::Display for Exact {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.decimal_places() {
            Some(0) => write!(f, "{}", self.numer()),
            Some(places) => {
                let scale = 10i128.pow(places);
                let scaled = self.numer() as i128 * scale / self.denom() as i128;
                let sign = if scaled < 0 { "-" } else { "" };
                let abs = scaled.unsigned_abs();
                let int = abs / scale as u128;
                let frac = abs % scale as u128;
                let frac = format!("{:0width$}", frac, width = places as usize);
                write!(f, "{sign}{int}.{}", frac.trim_end_matches('0'))
            }
            None => write!(f, "{}/{}", self.numer(), self.denom()),
        }
    }
}

impl FromStr for Exact {
    type Err = ParseExactError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || ParseExactError(s.to_string());
        let t = s.trim();
        if let Some((n, d)) = t.split_once('/') {
            let n: i64 = n.trim().parse().map_err(|_| err())?;
            let d: i64 = d.trim().parse().map_err(|_| err())?;
            if d == 0 {
                return Err(err());
            }
            return Ok(Exact::new(n, d));
        }
        if let Some((int, frac)) = t.split_once('.') {
            if frac.is_empty() || frac.len() > 12 || !frac.bytes().all(|b| b.is_ascii_digit()) {
                return Err(err());
            }
            let negative = int.starts_with('-');
            let int_abs: i64 = int
                .trim_start_matches(['-', '+'])
                .parse()
                .or_else(|e| if int.trim_start_matches(['-', '+']).is_empty() { Ok(0) } else { Err(e) })
                .map_err(|_| err())?;
            let scale = 10i64.checked_pow(frac.len() as u32).ok_or_else(err)?;
            let frac_val: i64 = frac.parse().map_err(|_| err())?;
            let magnitude = int_abs.checked_mul(scale).and_then(|v| v.checked_add(frac_val)).ok_or_else(err)?;
            let numer = if negative { -magnitude } else { magnitude };
            return Ok(Exact::new(numer, scale));
        }
        t.parse::<i64>().map(Exact::from_int).map_err(|_| err())
    }
}

impl Serialize for Exact {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Exact {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct ExactVisitor;

        impl Visitor<'_> for ExactVisitor {
            type Value = Exact;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("an exact number as a string or JSON number")
            }

            fn visit_str<E: de::Error>(self, v: &str) -> Result<Exact, E> {
                v.parse().map_err(E::custom)
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Exact, E> {
                Ok(Exact::from_int(v))
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Exact, E> {
                i64::try_from(v).map(Exact::from_int).map_err(|_| E::custom("integer out of range"))
            }

            fn visit_f64<E: de::Error>(self, v: f64) -> Result<Exact, E> {
                if !v.is_finite() {
                    return Err(E::custom("non-finite number"));
                }
                format!("{v}").parse().map_err(E::custom)
            }
        }

        deserializer.deserialize_any(ExactVisitor)
    }
}

impl From<i64> for Exact {
    fn from(value: i64) -> Self {
        Exact::from_int(value)
    }
}

impl Add for Exact {
    type Output = Exact;
    fn add(self, rhs: Exact) -> Exact {
        Exact(self.0 + rhs.0)
    }
}

impl AddAssign for Exact {
    fn add_assign(&mut self, rhs: Exact) {
        self.0 += rhs.0;
    }
}

impl Sub for Exact {
    type Output = Exact;
    fn sub(self, rhs: Exact) -> Exact {
        Exact(self.0 - rhs.0)
    }
}

impl Mul for Exact {
    type Output = Exact;
    fn mul(self, rhs: Exact) -> Exact {
        Exact(self.0 * rhs.0)
    }
}

impl Div for Exact {
    type Output = Exact;
    fn div(self, rhs: Exact) -> Exact {
        Exact(self.0 / rhs.0)
    }
}

impl Neg for Exact {
    type Output = Exact;
    fn neg(self) -> Exact {
        Exact(-self.0)
    }
}

impl Sum for Exact {
    fn sum<I: Iterator<Item = Exact>>(iter: I) -> Exact {
        iter.fold(Exact::ZERO, |acc, x| acc + x)
    }
}

impl<'a> Sum<&'a Exact> for Exact {
    fn sum<I: Iterator<Item = &'a Exact>>(iter: I) -> Exact {
        iter.fold(Exact::ZERO, |acc, x| acc + *x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn display_forms() {
        assert_eq!(Exact::from_int(10).to_string(), "10");
        assert_eq!(Exact::new(15, 2).to_string(), "7.5");
        assert_eq!(Exact::new(-1, 4).to_string(), "-0.25");
        assert_eq!(Exact::new(1, 3).to_string(), "1/3");
        assert_eq!(Exact::new(-7, 100).to_string(), "-0.07");
    }

    #[test]
    fn parse_forms() {
        assert_eq!("2.5".parse::<Exact>().unwrap(), Exact::new(5, 2));
        assert_eq!("-0.5".parse::<Exact>().unwrap(), Exact::new(-1, 2));
        assert_eq!("-3".parse::<Exact>().unwrap(), Exact::from_int(-3));
        assert_eq!("2/6".parse::<Exact>().unwrap(), Exact::new(1, 3));
        assert!("1/0".parse::<Exact>().is_err());
        assert!("abc".parse::<Exact>().is_err());
        assert!("1.".parse::<Exact>().is_err());
    }

    #[test]
    fn json_numbers_accepted() {
        let v: Exact = serde_json::from_str("4").unwrap();
        assert_eq!(v, Exact::from_int(4));
        let v: Exact = serde_json::from_str("-2.25").unwrap();
        assert_eq!(v, Exact::new(-9, 4));
        assert_eq!(serde_json::to_string(&v).unwrap(), "\"-2.25\"");
    }

    #[test]
    fn clamp_applies_min_then_max() {
        let lo = Exact::from_int(0);
        let hi = Exact::from_int(10);
        assert_eq!(Exact::from_int(-2).clamp_to(lo, hi), lo);
        assert_eq!(Exact::from_int(12).clamp_to(lo, hi), hi);
        assert_eq!(Exact::from_int(5).clamp_to(lo, hi), Exact::from_int(5));
    }

    proptest! {
        #[test]
        fn string_round_trip(n in -100_000i64..100_000, d in 1i64..1000) {
            let x = Exact::new(n, d);
            let s = serde_json::to_string(&x).unwrap();
            let back: Exact = serde_json::from_str(&s).unwrap();
            prop_assert_eq!(back, x);
            prop_assert_eq!(serde_json::to_string(&back).unwrap(), s);
        }
    }
}
