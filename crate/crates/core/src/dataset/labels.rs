//! Movement-ratio labels with the ambiguous-movement band removed.

use super::{DatasetError, Result};

/// Lower (exclusive) and upper (inclusive) bounds of the discard band.
const BAND_LOW: f64 = -0.005;
const BAND_HIGH: f64 = 0.0055;

/// `(p_target − p_prev) / p_prev`.
pub fn movement_ratio(p_prev: f64, p_target: f64) -> Result<f64> {
    if !(p_prev > 0.0 && p_prev.is_finite()) {
        return Err(DatasetError::Contract(format!(
            "previous price must be positive, got {p_prev}"
        )));
    }
    Ok((p_target - p_prev) / p_prev)
}

/// `Some(1)` for a rise, `Some(0)` for a fall, `None` when the movement
/// ratio falls inside `(−0.5%, 0.55%]`.
pub fn stocknet_label(p_prev: f64, p_target: f64) -> Result<Option<u8>> {
    let r = movement_ratio(p_prev, p_target)?;
    Ok(label_from_ratio(r).inspect(|&up| {
        debug_assert_eq!(up, u8::from(p_target > p_prev));
    }))
}

pub(crate) fn label_from_ratio(r: f64) -> Option<u8> {
    if BAND_LOW < r && r <= BAND_HIGH {
        None
    } else {
        Some(u8::from(r > 0.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        assert_eq!(stocknet_label(100.0, 101.0).unwrap(), Some(1));
        assert_eq!(stocknet_label(100.0, 99.0).unwrap(), Some(0));
        assert_eq!(stocknet_label(100.0, 100.4).unwrap(), None);
        assert!(stocknet_label(0.0, 1.0).is_err());
        assert!(stocknet_label(-3.0, 1.0).is_err());
    }

    #[test]
    fn band_edges() {
        assert_eq!(label_from_ratio(-0.005), Some(0));
        assert_eq!(label_from_ratio(0.0055), None);
        assert_eq!(label_from_ratio(0.0), None);
        assert_eq!(label_from_ratio(0.00551), Some(1));
        assert_eq!(stocknet_label(100.0, 99.5).unwrap(), Some(0));
    }
}
