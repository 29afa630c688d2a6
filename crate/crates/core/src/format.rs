//! Stored parameter word formats.
//!
//! Every parameter lives in memory as a 32-bit word. The format decides what
//! the bits mean, and therefore which bits are the high-impact ones when a
//! fault flips them: the exponent field for `float32`, the sign/integer bits
//! for `fixed32`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const WORD_BITS: u32 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NumericFormat {
    /// IEEE-754 binary32.
    Float32,
    /// Two's-complement fixed point with one sign bit.
    Fixed32 { int_bits: u32, frac_bits: u32 },
}

impl Default for NumericFormat {
    fn default() -> Self {
        NumericFormat::Float32
    }
}

impl NumericFormat {
    /// Checked `fixed32` constructor; `1 + int_bits + frac_bits` must be 32.
    pub fn fixed32(int_bits: u32, frac_bits: u32) -> Result<Self> {
        let fmt = NumericFormat::Fixed32 {
            int_bits,
            frac_bits,
        };
        fmt.validate()?;
        Ok(fmt)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            NumericFormat::Float32 => Ok(()),
            NumericFormat::Fixed32 {
                int_bits,
                frac_bits,
            } => {
                if 1 + int_bits + frac_bits == WORD_BITS {
                    Ok(())
                } else {
                    Err(Error::Config(format!(
                        "fixed32 needs 1 + int_bits + frac_bits == 32, got 1 + {int_bits} + {frac_bits}"
                    )))
                }
            }
        }
    }

    pub fn word_bits(&self) -> u32 {
        WORD_BITS
    }
}

/// Decodes a stored word. `f64` is wide enough to hold every `fixed32`
/// value exactly; compute code narrows to `f32` afterwards.
pub fn decode_word(word: u32, fmt: NumericFormat) -> f64 {
    match fmt {
        NumericFormat::Float32 => f32::from_bits(word) as f64,
        NumericFormat::Fixed32 { frac_bits, .. } => word as i32 as f64 / (1u64 << frac_bits) as f64,
    }
}

/// Decodes straight to the compute precision.
#[inline]
pub fn decode_word_f32(word: u32, fmt: NumericFormat) -> f32 {
    match fmt {
        NumericFormat::Float32 => f32::from_bits(word),
        _ => decode_word(word, fmt) as f32,
    }
}

/// Result of [`encode_word`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Encoded {
    pub word: u32,
    /// The value was outside the fixed-point range and was clamped.
    pub saturated: bool,
}

/// Encodes a value. `fixed32` truncates toward zero and saturates at the
/// range ends; NaN encodes as zero and counts as saturated.
pub fn encode_word(value: f64, fmt: NumericFormat) -> Encoded {
    match fmt {
        NumericFormat::Float32 => Encoded {
            word: (value as f32).to_bits(),
            saturated: false,
        },
        NumericFormat::Fixed32 { frac_bits, .. } => {
            let scaled = (value * (1u64 << frac_bits) as f64).trunc();
            let (raw, saturated) = if scaled.is_nan() {
                (0, true)
            } else if scaled > i32::MAX as f64 {
                (i32::MAX, true)
            } else if scaled < i32::MIN as f64 {
                (i32::MIN, true)
            } else {
                (scaled as i32, false)
            };
            if saturated {
                log::warn!("fixed32 encode saturated {value} to {raw:#010x}");
            }
            Encoded {
                word: raw as u32,
                saturated,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const Q15_16: NumericFormat = NumericFormat::Fixed32 {
        int_bits: 15,
        frac_bits: 16,
    };

    #[test]
    fn decode_examples() {
        assert_eq!(decode_word(0, NumericFormat::Float32), 0.0);
        assert_eq!(decode_word(0x3F80_0000, NumericFormat::Float32), 1.0);
        assert_eq!(decode_word(0x0001_0000, Q15_16), 1.0);
        assert_eq!(decode_word(0x8000_0000, Q15_16), -32768.0);
    }

    #[test]
    fn encode_examples() {
        assert_eq!(encode_word(1.0, NumericFormat::Float32).word, 0x3F80_0000);
        assert_eq!(encode_word(-1.0, Q15_16).word, 0xFFFF_0000);
        let e = encode_word(70000.0, Q15_16);
        assert_eq!(e, Encoded { word: 0x7FFF_FFFF, saturated: true });
        assert!(encode_word(-70000.0, Q15_16).saturated);
    }

    #[test]
    fn fixed_truncates_toward_zero() {
        let lsb = 1.0 / 65536.0;
        assert_eq!(encode_word(1.5 * lsb, Q15_16).word, 1);
        assert_eq!(encode_word(-1.5 * lsb, Q15_16).word, (-1i32) as u32);
    }

    #[test]
    fn validate_bit_budget() {
        assert!(NumericFormat::fixed32(15, 16).is_ok());
        assert!(NumericFormat::fixed32(16, 16).is_err());
    }

    #[test]
    fn serde_shape() {
        let s = serde_json::to_string(&Q15_16).unwrap();
        assert_eq!(s, r#"{"kind":"fixed32","int_bits":15,"frac_bits":16}"#);
        let s = serde_json::to_string(&NumericFormat::Float32).unwrap();
        assert_eq!(s, r#"{"kind":"float32"}"#);
    }

    proptest! {
        #[test]
        fn fixed_word_roundtrip(word in any::<u32>(), frac in 0u32..=31) {
            let fmt = NumericFormat::fixed32(31 - frac, frac).unwrap();
            let e = encode_word(decode_word(word, fmt), fmt);
            prop_assert_eq!(e.word, word);
            prop_assert!(!e.saturated);
        }

        #[test]
        fn float_word_roundtrip(word in any::<u32>()) {
            prop_assume!(!f32::from_bits(word).is_nan());
            let fmt = NumericFormat::Float32;
            prop_assert_eq!(encode_word(decode_word(word, fmt), fmt).word, word);
        }
    }
}
