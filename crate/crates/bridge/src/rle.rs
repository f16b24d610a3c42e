//! Lossless run-length encoding of row-major images as flat
//! `[value, count, value, count, ...]` arrays.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RleError {
    #[error("run array has odd length {0}")]
    OddLength(usize),
    #[error("run {0} has zero length")]
    EmptyRun(usize),
    #[error("value {0} does not fit a pixel")]
    ValueRange(u32),
    #[error("runs cover {got} pixels, expected {expected}")]
    LengthMismatch { got: usize, expected: usize },
}

pub fn encode(pixels: &[u16]) -> Vec<u32> {
    let mut out = Vec::new();
    let mut iter = pixels.iter().copied();
    let Some(mut value) = iter.next() else {
        return out;
    };
    let mut count = 1u32;
    for p in iter {
        if p == value && count < u32::MAX {
            count += 1;
        } else {
            out.extend([value as u32, count]);
            value = p;
            count = 1;
        }
    }
    out.extend([value as u32, count]);
    out
}

/// Decodes `runs` and checks they cover exactly `expected` pixels.
pub fn decode(runs: &[u32], expected: usize) -> Result<Vec<u16>, RleError> {
    if runs.len() % 2 != 0 {
        return Err(RleError::OddLength(runs.len()));
    }
    let mut out = Vec::with_capacity(expected);
    for (i, pair) in runs.chunks_exact(2).enumerate() {
        let value = u16::try_from(pair[0]).map_err(|_| RleError::ValueRange(pair[0]))?;
        let count = pair[1] as usize;
        if count == 0 {
            return Err(RleError::EmptyRun(i));
        }
        if out.len() + count > expected {
            return Err(RleError::LengthMismatch {
                got: out.len() + count,
                expected,
            });
        }
        out.extend(std::iter::repeat_n(value, count));
    }
    if out.len() != expected {
        return Err(RleError::LengthMismatch {
            got: out.len(),
            expected,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_image_has_no_runs() {
        assert!(encode(&[]).is_empty());
        assert_eq!(decode(&[], 0).unwrap(), Vec::<u16>::new());
    }

    #[test]
    fn runs_merge_equal_neighbours() {
        assert_eq!(encode(&[0, 0, 0, 3, 3, 0]), vec![0, 3, 3, 2, 0, 1]);
    }

    #[test]
    fn malformed_runs_are_rejected() {
        assert_eq!(decode(&[1], 1), Err(RleError::OddLength(1)));
        assert_eq!(decode(&[1, 0], 0), Err(RleError::EmptyRun(0)));
        assert_eq!(decode(&[70000, 1], 1), Err(RleError::ValueRange(70000)));
        assert!(matches!(decode(&[1, 2], 3), Err(RleError::LengthMismatch { .. })));
        assert!(matches!(decode(&[1, 4], 3), Err(RleError::LengthMismatch { .. })));
    }

    proptest! {
        #[test]
        fn round_trip_is_lossless(pixels in prop::collection::vec(0u16..4, 0..600)) {
            let runs = encode(&pixels);
            prop_assert_eq!(decode(&runs, pixels.len()).unwrap(), pixels);
        }

        #[test]
        fn runs_never_repeat_a_value(pixels in prop::collection::vec(0u16..3, 1..300)) {
            let runs = encode(&pixels);
            for w in runs.chunks_exact(2).collect::<Vec<_>>().windows(2) {
                prop_assert_ne!(w[0][0], w[1][0]);
            }
        }
    }
}
