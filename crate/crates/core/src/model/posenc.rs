//! Fixed two-dimensional sine/cosine positional encodings.
//!
//! Half the channels encode the row index, half the column index; within
//! each half, sine/cosine pairs run over geometrically spaced frequencies.
//! The table depends only on the grid shape and channel count, so identical
//! configurations always produce identical encodings.

use ndarray::Array2;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("positional encoding needs channels divisible by 4, got {0}")]
pub struct PosencError(pub usize);

/// Builds the `(h * w, channels)` encoding table, rows in row-major grid
/// order. Entries are in `[-1, 1]`.
pub fn positional_encoding(
    h: usize,
    w: usize,
    channels: usize,
) -> Result<Array2<f64>, PosencError> {
    if !channels.is_multiple_of(4) || channels == 0 {
        return Err(PosencError(channels));
    }
    let quarter = channels / 4;
    let half = channels / 2;
    let mut table = Array2::zeros((h * w, channels));
    for y in 0..h {
        for x in 0..w {
            let row = y * w + x;
            for i in 0..quarter {
                let omega = 1.0 / 10000f64.powf(i as f64 / quarter as f64);
                table[[row, 2 * i]] = (y as f64 * omega).sin();
                table[[row, 2 * i + 1]] = (y as f64 * omega).cos();
                table[[row, half + 2 * i]] = (x as f64 * omega).sin();
                table[[row, half + 2 * i + 1]] = (x as f64 * omega).cos();
            }
        }
    }
    Ok(table)
}
