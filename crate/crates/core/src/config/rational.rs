//! Exact binary rationals for expert-configuration arithmetic.
//!
//! Granularities, activation sparsities, and capacity factors are all
//! rationals with power-of-two denominators, so sums and products stay
//! exact. No floating point is used anywhere in this module.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{de, Deserialize, Deserializer, Serialize, Serializer};

use super::ConfigError;

/// A nonnegative rational with a power-of-two denominator, kept reduced.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Rational {
    num: u64,
    den: u64,
}

impl Rational {
    pub const ZERO: Rational = Rational { num: 0, den: 1 };
    pub const ONE: Rational = Rational { num: 1, den: 1 };

    pub fn new(num: u64, den: u64) -> Result<Self, ConfigError> {
        if den == 0 || !den.is_power_of_two() {
            return Err(ConfigError::BadDenominator { num, den });
        }
        Ok(Self::reduced(num, den))
    }

    pub fn from_int(n: u64) -> Self {
        Rational { num: n, den: 1 }
    }

    fn reduced(mut num: u64, mut den: u64) -> Self {
        if num == 0 {
            return Rational { num: 0, den: 1 };
        }
        while num % 2 == 0 && den % 2 == 0 {
            num /= 2;
            den /= 2;
        }
        Rational { num, den }
    }

    pub fn num(self) -> u64 {
        self.num
    }

    pub fn den(self) -> u64 {
        self.den
    }

    pub fn is_zero(self) -> bool {
        self.num == 0
    }

    pub fn is_one(self) -> bool {
        self.num == 1 && self.den == 1
    }

    pub fn add(self, other: Rational) -> Rational {
        // Power-of-two denominators: the lcm is just the larger one.
        let den = self.den.max(other.den);
        let a = self.num * (den / self.den);
        let b = other.num * (den / other.den);
        Rational::reduced(a + b, den)
    }

    /// `self - other`, or `None` when the result would be negative.
    pub fn checked_sub(self, other: Rational) -> Option<Rational> {
        let den = self.den.max(other.den);
        let a = self.num * (den / self.den);
        let b = other.num * (den / other.den);
        if a < b {
            return None;
        }
        Some(Rational::reduced(a - b, den))
    }

    pub fn mul(self, other: Rational) -> Rational {
        let num = u128::from(self.num) * u128::from(other.num);
        let den = u128::from(self.den) * u128::from(other.den);
        let mut r = Rational {
            num: 0,
            den: 1,
        };
        // Reduce in u128 first so the result fits back into u64.
        let (mut n, mut d) = (num, den);
        while n != 0 && n % 2 == 0 && d % 2 == 0 {
            n /= 2;
            d /= 2;
        }
        if n == 0 {
            return Rational::ZERO;
        }
        r.num = u64::try_from(n).expect("rational numerator overflow");
        r.den = u64::try_from(d).expect("rational denominator overflow");
        r
    }

    pub fn mul_int(self, k: u64) -> Rational {
        self.mul(Rational::from_int(k))
    }

    pub fn as_integer(self) -> Option<u64> {
        (self.den == 1).then_some(self.num)
    }

    /// `x * self`, exact when the product is an integer.
    pub fn scale_integer(self, x: u64) -> Option<u64> {
        let n = u128::from(self.num) * u128::from(x);
        let d = u128::from(self.den);
        (n % d == 0).then(|| u64::try_from(n / d).expect("scaled value overflow"))
    }

    /// `round(x * self)`, half away from zero.
    pub fn round_mul_int(self, x: u64) -> u64 {
        let n = u128::from(self.num) * u128::from(x);
        let d = u128::from(self.den);
        u64::try_from((n + d / 2) / d).expect("rounded value overflow")
    }

    /// `ceil(x * self)`.
    pub fn ceil_mul_int(self, x: u64) -> u64 {
        let n = u128::from(self.num) * u128::from(x);
        let d = u128::from(self.den);
        u64::try_from(n.div_ceil(d)).expect("ceil value overflow")
    }

    /// Reciprocal when it is an integer (numerator divides denominator).
    pub fn recip_integer(self) -> Option<u64> {
        if self.num == 0 || self.den % self.num != 0 {
            return None;
        }
        Some(self.den / self.num)
    }

    pub fn to_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl PartialOrd for Rational {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Rational {
    fn cmp(&self, other: &Self) -> Ordering {
        let a = u128::from(self.num) * u128::from(other.den);
        let b = u128::from(other.num) * u128::from(self.den);
        a.cmp(&b)
    }
}

impl fmt::Display for Rational {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

impl fmt::Debug for Rational {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self}")
    }
}

impl FromStr for Rational {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let parse_part = |p: &str| {
            p.trim()
                .parse::<u64>()
                .map_err(|_| ConfigError::BadRational(s.to_string()))
        };
        match s.split_once('/') {
            Some((n, d)) => Rational::new(parse_part(n)?, parse_part(d)?),
            None => Ok(Rational::from_int(parse_part(s)?)),
        }
    }
}

impl Serialize for Rational {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Rational {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(de::Error::custom)
    }
}

/// Expert granularity: the ratio of an expert FFN's intermediate dimension
/// to the dense FFN's intermediate dimension. Restricted to `(0, 1]` with a
/// power-of-two denominator of at most [`Granularity::MAX_DENOMINATOR`].
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Granularity(Rational);

impl Granularity {
    pub const MAX_DENOMINATOR: u64 = 64;
    pub const ONE: Granularity = Granularity(Rational::ONE);

    pub fn new(num: u64, den: u64) -> Result<Self, ConfigError> {
        Self::from_rational(Rational::new(num, den)?)
    }

    pub fn from_rational(r: Rational) -> Result<Self, ConfigError> {
        if r.is_zero() || r > Rational::ONE {
            return Err(ConfigError::GranularityRange(r.to_string()));
        }
        if r.den() > Self::MAX_DENOMINATOR {
            return Err(ConfigError::GranularityDenominator(r.to_string()));
        }
        Ok(Granularity(r))
    }

    /// `1/n` for the unit fractions used throughout the sweep grids.
    pub fn unit(den: u64) -> Result<Self, ConfigError> {
        Self::new(1, den)
    }

    pub fn rational(self) -> Rational {
        self.0
    }

    pub fn to_f64(self) -> f64 {
        self.0.to_f64()
    }

    /// The expert FFN intermediate dimension for a dense intermediate
    /// dimension of `dense_dim`, exact or an error.
    pub fn ffn_dim(self, dense_dim: u64) -> Result<u64, ConfigError> {
        match self.0.scale_integer(dense_dim) {
            Some(m) if m >= 1 => Ok(m),
            _ => Err(ConfigError::FractionalFfnDim {
                granularity: self.to_string(),
                dense_dim,
            }),
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Debug for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl FromStr for Granularity {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::from_rational(s.parse()?)
    }
}

impl Serialize for Granularity {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.0.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Granularity {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        Self::from_rational(Rational::deserialize(deserializer)?).map_err(de::Error::custom)
    }
}

/// Number of active experts that FLOP-matches granularity `g`: exactly `1/g`.
pub fn flop_matched_active_count(g: Granularity) -> Result<u64, ConfigError> {
    g.rational()
        .recip_integer()
        .ok_or(ConfigError::NonIntegerReciprocal(g.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reduces_and_displays() {
        let r = Rational::new(4, 8).unwrap();
        assert_eq!(r, Rational::new(1, 2).unwrap());
        assert_eq!(r.to_string(), "1/2");
        assert_eq!(Rational::from_int(3).to_string(), "3");
    }

    #[test]
    fn rejects_non_power_of_two_denominator() {
        assert!(Rational::new(1, 3).is_err());
        assert!(Rational::new(1, 0).is_err());
        assert!("1/3".parse::<Rational>().is_err());
    }

    #[test]
    fn exact_addition() {
        let a = Rational::new(1, 2).unwrap();
        let b = Rational::new(1, 4).unwrap();
        assert_eq!(a.add(b), Rational::new(3, 4).unwrap());
        // g_gen=1/2 plus 16 * 1/4 = 9/2
        let s = a.add(Rational::new(1, 4).unwrap().mul_int(16));
        assert_eq!(s, Rational::new(9, 2).unwrap());
    }

    #[test]
    fn recip_integer_cases() {
        assert_eq!(Rational::new(1, 2).unwrap().recip_integer(), Some(2));
        assert_eq!(Rational::new(1, 64).unwrap().recip_integer(), Some(64));
        assert_eq!(Rational::ONE.recip_integer(), Some(1));
        assert_eq!(Rational::new(3, 4).unwrap().recip_integer(), None);
    }

    #[test]
    fn flop_matched_counts() {
        assert_eq!(flop_matched_active_count(Granularity::ONE).unwrap(), 1);
        assert_eq!(
            flop_matched_active_count(Granularity::unit(2).unwrap()).unwrap(),
            2
        );
        assert_eq!(
            flop_matched_active_count(Granularity::unit(64).unwrap()).unwrap(),
            64
        );
        assert!(flop_matched_active_count(Granularity::new(3, 4).unwrap()).is_err());
    }

    #[test]
    fn granularity_bounds() {
        assert!(Granularity::new(0, 1).is_err());
        assert!(Granularity::new(3, 2).is_err());
        assert!(Granularity::new(1, 128).is_err());
        assert!(Granularity::new(1, 64).is_ok());
        assert!(Granularity::new(2, 128).is_ok()); // reduces to 1/64
    }

    #[test]
    fn ffn_dims_are_exact() {
        let g = Granularity::unit(4).unwrap();
        assert_eq!(g.ffn_dim(128).unwrap(), 32);
        assert!(g.ffn_dim(2).is_err()); // 2/4 is not an integer
    }

    #[test]
    fn rounding_and_budget_helpers() {
        let twenty = Rational::from_int(20);
        assert_eq!(twenty.round_mul_int(1_000_000_000), 20_000_000_000);
        assert_eq!(Rational::ZERO.round_mul_int(123), 0);
        let half = Rational::new(1, 2).unwrap();
        assert_eq!(half.round_mul_int(5), 3); // 2.5 rounds half up
        assert_eq!(half.ceil_mul_int(5), 3);
        assert_eq!(half.scale_integer(5), None);
        assert_eq!(half.scale_integer(6), Some(3));
    }

    #[test]
    fn ordering_is_exact() {
        let a = Rational::new(255, 64).unwrap();
        let b = Rational::from_int(4);
        assert!(a < b);
        assert!(Rational::new(256, 64).unwrap() == b);
    }

    #[test]
    fn serde_round_trip() {
        #[derive(serde::Serialize, serde::Deserialize)]
        struct Holder {
            g: Granularity,
            r: Rational,
        }
        let h = Holder {
            g: Granularity::unit(8).unwrap(),
            r: Rational::new(9, 2).unwrap(),
        };
        let text = toml::to_string(&h).unwrap();
        assert!(text.contains("\"1/8\""));
        let back: Holder = toml::from_str(&text).unwrap();
        assert_eq!(back.g, h.g);
        assert_eq!(back.r, h.r);
    }
}
