use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Integer code width in bits, restricted to 2..=8.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct BitWidth(u8);

impl BitWidth {
    pub const MIN: u8 = 2;
    pub const MAX: u8 = 8;
    pub const INT8: BitWidth = BitWidth(8);

    /// Every supported width, widest first.
    pub const ALL: [BitWidth; 7] = [
        BitWidth(8),
        BitWidth(7),
        BitWidth(6),
        BitWidth(5),
        BitWidth(4),
        BitWidth(3),
        BitWidth(2),
    ];

    pub fn new(bits: u8) -> Result<Self> {
        if (Self::MIN..=Self::MAX).contains(&bits) {
            Ok(BitWidth(bits))
        } else {
            Err(Error::InvalidBitWidth(bits as i64))
        }
    }

    #[inline]
    pub fn bits(self) -> u8 {
        self.0
    }

    /// Smallest code, `-2^(bits-1)`.
    #[inline]
    pub fn qmin(self) -> i32 {
        -(1i32 << (self.0 - 1))
    }

    /// Largest code, `2^(bits-1) - 1`.
    #[inline]
    pub fn qmax(self) -> i32 {
        (1i32 << (self.0 - 1)) - 1
    }

    /// Number of lattice steps between `qmin` and `qmax`.
    #[inline]
    pub fn steps(self) -> i32 {
        self.qmax() - self.qmin()
    }

    /// Parses a comma separated list such as `"8,7,6"`.
    pub fn parse_list(s: &str) -> Result<Vec<BitWidth>> {
        s.split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(|p| {
                p.parse::<i64>()
                    .map_err(|_| Error::InvalidBitWidth(-1))
                    .and_then(BitWidth::try_from)
            })
            .collect()
    }
}

impl TryFrom<u8> for BitWidth {
    type Error = Error;

    fn try_from(bits: u8) -> Result<Self> {
        BitWidth::new(bits)
    }
}

impl TryFrom<i64> for BitWidth {
    type Error = Error;

    fn try_from(bits: i64) -> Result<Self> {
        u8::try_from(bits)
            .map_err(|_| Error::InvalidBitWidth(bits))
            .and_then(BitWidth::new)
    }
}

impl From<BitWidth> for u8 {
    fn from(b: BitWidth) -> u8 {
        b.0
    }
}

impl fmt::Display for BitWidth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}
