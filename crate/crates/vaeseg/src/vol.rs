//! Flip, crop, and pad helpers for raw row-major volume buffers.
//!
//! These run outside the autodiff graph (data pipeline, test-time flips,
//! label grids). Buffers are `[C, D, H, W]` with the channel axis first;
//! label grids pass `channels = 1`.

use crate::error::{Error, Result};

fn check_len<T>(data: &[T], channels: usize, dims: [usize; 3]) -> Result<()> {
    let want = channels * dims[0] * dims[1] * dims[2];
    if data.len() != want {
        return Err(Error::Shape(format!(
            "buffer holds {} elements, dims {channels}x{dims:?} need {want}",
            data.len()
        )));
    }
    Ok(())
}

/// Reverse the spatial axes selected by `axes` (D, H, W order).
pub fn flip<T: Copy>(
    data: &[T],
    channels: usize,
    dims: [usize; 3],
    axes: [bool; 3],
) -> Result<Vec<T>> {
    check_len(data, channels, dims)?;
    let [d, h, w] = dims;
    let mut out = Vec::with_capacity(data.len());
    for c in 0..channels {
        let base = c * d * h * w;
        for di in 0..d {
            let sd = if axes[0] { d - 1 - di } else { di };
            for hi in 0..h {
                let sh = if axes[1] { h - 1 - hi } else { hi };
                for wi in 0..w {
                    let sw = if axes[2] { w - 1 - wi } else { wi };
                    out.push(data[base + (sd * h + sh) * w + sw]);
                }
            }
        }
    }
    Ok(out)
}

/// Extract the block starting at `corner` with extents `size`.
pub fn crop<T: Copy>(
    data: &[T],
    channels: usize,
    dims: [usize; 3],
    corner: [usize; 3],
    size: [usize; 3],
) -> Result<Vec<T>> {
    check_len(data, channels, dims)?;
    for a in 0..3 {
        if corner[a] + size[a] > dims[a] {
            return Err(Error::Shape(format!(
                "crop corner {corner:?} + size {size:?} exceeds dims {dims:?}"
            )));
        }
    }
    let [d, h, w] = dims;
    let mut out = Vec::with_capacity(channels * size[0] * size[1] * size[2]);
    for c in 0..channels {
        let base = c * d * h * w;
        for di in corner[0]..corner[0] + size[0] {
            for hi in corner[1]..corner[1] + size[1] {
                let row = base + (di * h + hi) * w + corner[2];
                out.extend_from_slice(&data[row..row + size[2]]);
            }
        }
    }
    Ok(out)
}

/// Zero-pad each axis up to `target` extents, splitting the slack evenly
/// with the smaller half in front. Returns the padded buffer and the offset
/// of the original corner inside it. Axes already at or above target are
/// left alone.
pub fn pad_to<T: Copy + Default>(
    data: &[T],
    channels: usize,
    dims: [usize; 3],
    target: [usize; 3],
) -> Result<(Vec<T>, [usize; 3], [usize; 3])> {
    check_len(data, channels, dims)?;
    let mut out_dims = [0usize; 3];
    let mut offset = [0usize; 3];
    for a in 0..3 {
        out_dims[a] = dims[a].max(target[a]);
        offset[a] = (out_dims[a] - dims[a]) / 2;
    }
    let [d, h, w] = dims;
    let [od, oh, ow] = out_dims;
    let mut out = vec![T::default(); channels * od * oh * ow];
    for c in 0..channels {
        let src_base = c * d * h * w;
        let dst_base = c * od * oh * ow;
        for di in 0..d {
            for hi in 0..h {
                let src = src_base + (di * h + hi) * w;
                let dst = dst_base + ((di + offset[0]) * oh + hi + offset[1]) * ow + offset[2];
                out[dst..dst + w].copy_from_slice(&data[src..src + w]);
            }
        }
    }
    Ok((out, out_dims, offset))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn flip_reverses_selected_axis() {
        // 1x1x2x3 volume: flipping W reverses each row
        let data = vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0];
        let flipped = flip(&data, 1, [1, 2, 3], [false, false, true]).unwrap();
        assert_eq!(flipped, vec![3.0, 2.0, 1.0, 6.0, 5.0, 4.0]);
        let flipped_h = flip(&data, 1, [1, 2, 3], [false, true, false]).unwrap();
        assert_eq!(flipped_h, vec![4.0, 5.0, 6.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn flip_applies_per_channel() {
        let data = vec![1u8, 2, 3, 4];
        let flipped = flip(&data, 2, [1, 1, 2], [false, false, true]).unwrap();
        assert_eq!(flipped, vec![2, 1, 4, 3]);
    }

    #[test]
    fn crop_extracts_block() {
        // 1x2x2x2 volume numbered 0..8
        let data: Vec<f32> = (0..8).map(|v| v as f32).collect();
        let block = crop(&data, 1, [2, 2, 2], [1, 0, 1], [1, 2, 1]).unwrap();
        assert_eq!(block, vec![5.0, 7.0]);
        assert!(crop(&data, 1, [2, 2, 2], [1, 1, 1], [2, 1, 1]).is_err());
    }

    #[test]
    fn crop_full_extent_is_identity() {
        let data: Vec<f32> = (0..24).map(|v| v as f32).collect();
        let out = crop(&data, 2, [2, 2, 3], [0, 0, 0], [2, 2, 3]).unwrap();
        assert_eq!(out, data);
    }

    #[test]
    fn pad_centers_content() {
        let data = vec![7.0f32];
        let (padded, dims, offset) = pad_to(&data, 1, [1, 1, 1], [4, 3, 1]).unwrap();
        assert_eq!(dims, [4, 3, 1]);
        assert_eq!(offset, [1, 1, 0]);
        assert_eq!(padded.iter().filter(|&&v| v != 0.0).count(), 1);
        assert_eq!(padded[(1 * 3 + 1) * 1], 7.0);
    }

    #[test]
    fn pad_then_crop_roundtrips() {
        let data: Vec<u8> = (1..=12).collect();
        let (padded, dims, offset) = pad_to(&data, 1, [2, 2, 3], [4, 2, 5]).unwrap();
        let back = crop(&padded, 1, dims, offset, [2, 2, 3]).unwrap();
        assert_eq!(back, data);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn flip_is_an_involution(
            seed in 0u64..1000,
            d in 1usize..4,
            h in 1usize..4,
            w in 1usize..4,
            mask in 0u8..8,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let dims = [d, h, w];
            let data: Vec<f32> = (0..2 * d * h * w).map(|_| rng.gen()).collect();
            let axes = [mask & 1 != 0, mask & 2 != 0, mask & 4 != 0];
            let once = flip(&data, 2, dims, axes).unwrap();
            let twice = flip(&once, 2, dims, axes).unwrap();
            prop_assert_eq!(twice, data);
        }
    }
}
