//! Random translation of frame stacks inside a padded canvas.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::{Frame, FrameStack};

#[derive(Debug, Error, PartialEq)]
pub enum AugmentError {
    #[error("input {input}x{input} does not fit in output {output}x{output}")]
    InputLarger { input: usize, output: usize },
    #[error("frame {height}x{width} does not match the {expected}x{expected} input size")]
    FrameSize {
        height: usize,
        width: usize,
        expected: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranslateSpec {
    pub input: usize,
    pub output: usize,
    pub pad: f32,
}

impl TranslateSpec {
    pub fn new(input: usize, output: usize) -> Result<Self, AugmentError> {
        let spec = Self {
            input,
            output,
            pad: 0.0,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn identity(size: usize) -> Self {
        Self {
            input: size,
            output: size,
            pad: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        if self.input > self.output {
            return Err(AugmentError::InputLarger {
                input: self.input,
                output: self.output,
            });
        }
        Ok(())
    }

    /// Number of distinct offsets per axis.
    pub fn positions(&self) -> usize {
        self.output - self.input + 1
    }

    pub fn center(&self) -> (usize, usize) {
        let c = (self.output - self.input) / 2;
        (c, c)
    }
}

/// Places every frame at `offset = (row, col)` inside a pad-filled canvas.
pub fn translate_at(
    frames: &[Arc<Frame>],
    spec: &TranslateSpec,
    offset: (usize, usize),
) -> Result<FrameStack, AugmentError> {
    spec.validate()?;
    assert!(
        offset.0 < spec.positions() && offset.1 < spec.positions(),
        "offset out of range"
    );
    frames
        .iter()
        .map(|f| {
            if f.height != spec.input || f.width != spec.input {
                return Err(AugmentError::FrameSize {
                    height: f.height,
                    width: f.width,
                    expected: spec.input,
                });
            }
            if spec.input == spec.output {
                return Ok(Arc::clone(f));
            }
            let mut out = Frame::filled(spec.output, spec.output, spec.pad);
            for r in 0..spec.input {
                let dst = (r + offset.0) * spec.output + offset.1;
                out.data[dst..dst + spec.input]
                    .copy_from_slice(&f.data[r * spec.input..(r + 1) * spec.input]);
            }
            Ok(Arc::new(out))
        })
        .collect()
}

/// One uniform offset shared by the whole stack.
pub fn random_translate<R: Rng + ?Sized>(
    frames: &[Arc<Frame>],
    spec: &TranslateSpec,
    rng: &mut R,
) -> Result<(FrameStack, (usize, usize)), AugmentError> {
    spec.validate()?;
    let n = spec.positions();
    let offset = (rng.gen_range(0..n), rng.gen_range(0..n));
    Ok((translate_at(frames, spec, offset)?, offset))
}

/// Deterministic placement used at evaluation time.
pub fn center_translate(
    frames: &[Arc<Frame>],
    spec: &TranslateSpec,
) -> Result<FrameStack, AugmentError> {
    translate_at(frames, spec, spec.center())
}

/// Crops an `size`-square window at `offset`.
pub fn crop(frame: &Frame, offset: (usize, usize), size: usize) -> Frame {
    let mut out = Frame::new(size, size);
    for r in 0..size {
        let src = (r + offset.0) * frame.width + offset.1;
        out.data[r * size..(r + 1) * size].copy_from_slice(&frame.data[src..src + size]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::passes_uniformity;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn noise_frame(size: usize, rng: &mut ChaCha8Rng) -> Arc<Frame> {
        let mut f = Frame::new(size, size);
        f.data
            .iter_mut()
            .for_each(|v| *v = rng.gen_range(0.01..1.0));
        Arc::new(f)
    }

    #[test]
    fn equal_sizes_place_at_origin() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = noise_frame(16, &mut rng);
        let (out, offset) = random_translate(
            std::slice::from_ref(&f),
            &TranslateSpec::identity(16),
            &mut rng,
        )
        .unwrap();
        assert_eq!(offset, (0, 0));
        assert_eq!(*out[0], *f);
    }

    #[test]
    fn content_is_preserved_and_canvas_is_padded() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = TranslateSpec {
            pad: 0.0,
            ..TranslateSpec::new(100, 108).unwrap()
        };
        let stack = vec![noise_frame(100, &mut rng), noise_frame(100, &mut rng)];
        for _ in 0..20 {
            let (out, (r0, c0)) = random_translate(&stack, &spec, &mut rng).unwrap();
            for (o, f) in out.iter().zip(&stack) {
                assert_eq!((o.height, o.width), (108, 108));
                assert_eq!(crop(o, (r0, c0), 100), **f);
                for r in 0..108 {
                    for c in 0..108 {
                        let inside = (r0..r0 + 100).contains(&r) && (c0..c0 + 100).contains(&c);
                        if !inside {
                            assert_eq!(o.get(r, c), 0.0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn offsets_are_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = TranslateSpec::new(100, 108).unwrap();
        let mut counts = vec![0usize; 81];
        for _ in 0..10_000 {
            let (_, (r, c)) = random_translate(&[], &spec, &mut rng).unwrap();
            counts[r * 9 + c] += 1;
        }
        assert!(passes_uniformity(&counts, 0.01));
    }

    #[test]
    fn oversized_input_is_rejected() {
        assert_eq!(
            TranslateSpec::new(10, 8),
            Err(AugmentError::InputLarger {
                input: 10,
                output: 8
            })
        );
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = noise_frame(12, &mut rng);
        let spec = TranslateSpec::new(16, 20).unwrap();
        assert!(matches!(
            random_translate(&[f], &spec, &mut rng),
            Err(AugmentError::FrameSize { .. })
        ));
    }

    #[test]
    fn center_placement_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = noise_frame(16, &mut rng);
        let spec = TranslateSpec::new(16, 20).unwrap();
        let a = center_translate(std::slice::from_ref(&f), &spec).unwrap();
        assert_eq!(crop(&a[0], (2, 2), 16), *f);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn crop_at_offset_returns_each_frame(input in 2usize..12, extra in 0usize..6, frames in 1usize..4, seed: u64) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let spec = TranslateSpec::new(input, input + extra).unwrap();
                let stack: Vec<_> = (0..frames).map(|_| noise_frame(input, &mut rng)).collect();
                let (out, offset) = random_translate(&stack, &spec, &mut rng).unwrap();
                prop_assert!(offset.0 <= extra && offset.1 <= extra);
                for (o, f) in out.iter().zip(&stack) {
                    prop_assert!(o.height >= input && o.width >= input);
                    prop_assert_eq!(&crop(o, offset, input), &**f);
                }
            }
        }
    }
}
