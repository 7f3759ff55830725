use super::SerConfig;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Segments an utterance of `frames` frames yields: `⌈frames/len⌉`, at
/// least one, at most `max_segments`.
pub fn segment_count(frames: usize, config: &SerConfig) -> usize {
    frames
        .div_ceil(config.segment_frames)
        .clamp(1, config.max_segments)
}

/// Cuts a `3×T×N` delta stack into non-overlapping `3×L×N` segments, the
/// last zero-padded; segments beyond the configured maximum are dropped.
pub fn segment_utterance(stack: &Tensor, config: &SerConfig) -> Result<Vec<Tensor>> {
    let shape = stack.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::InvalidShape {
            op: "segment_utterance",
            msg: format!("expected 3×T×N stack, got {shape:?}"),
        });
    }
    let (t, n) = (shape[1], shape[2]);
    let len = config.segment_frames;
    let count = segment_count(t, config);
    let mut out = Vec::with_capacity(count);
    for s in 0..count {
        let mut data = vec![0.0; 3 * len * n];
        let start = s * len;
        let end = (start + len).min(t);
        for c in 0..3 {
            for (dst_row, src_row) in (start..end).enumerate() {
                let src = &stack.data()[(c * t + src_row) * n..(c * t + src_row + 1) * n];
                data[(c * len + dst_row) * n..(c * len + dst_row + 1) * n].copy_from_slice(src);
            }
        }
        out.push(Tensor::new(vec![3, len, n], data)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stack(frames: usize) -> Tensor {
        let n = 40;
        Tensor::new(
            vec![3, frames, n],
            (0..3 * frames * n).map(|i| 1.0 + (i % 97) as f64).collect(),
        )
        .unwrap()
    }

    #[test]
    fn nine_seconds_is_three_segments() {
        let segs = segment_utterance(&stack(720), &SerConfig::desk()).unwrap();
        assert_eq!(segs.len(), 3);
        assert!(segs.iter().all(|s| s.shape() == [3, 240, 40]));
        assert!(segs[2].data().iter().all(|&v| v != 0.0));
    }

    #[test]
    fn two_seconds_is_one_padded_segment() {
        let segs = segment_utterance(&stack(160), &SerConfig::desk()).unwrap();
        assert_eq!(segs.len(), 1);
        for c in 0..3 {
            for r in 0..240 {
                let row = &segs[0].data()[(c * 240 + r) * 40..(c * 240 + r + 1) * 40];
                if r < 160 {
                    assert!(row.iter().all(|&v| v != 0.0));
                } else {
                    assert!(row.iter().all(|&v| v == 0.0), "row {r}");
                }
            }
        }
    }

    #[test]
    fn exactly_three_seconds_needs_no_padding() {
        let segs = segment_utterance(&stack(240), &SerConfig::desk()).unwrap();
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0], stack(240));
    }

    #[test]
    fn long_utterances_are_truncated() {
        let cfg = SerConfig::desk();
        let segs = segment_utterance(&stack(240 * 10 + 5), &cfg).unwrap();
        assert_eq!(segs.len(), cfg.max_segments);
        assert_eq!(segment_count(1, &cfg), 1);
    }
}
