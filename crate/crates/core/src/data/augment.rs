//! Rotation and mirror augmentation shared by both dates and the label.

use ndarray::{Array, ArrayView, Axis, Dimension, RemoveAxis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::MultiTemporalPair;
use crate::error::{Error, Result};

/// Spatial transforms of a square patch; rotations are counter-clockwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    Identity,
    Rot90,
    Rot180,
    Rot270,
    FlipH,
    FlipV,
}

impl Transform {
    pub const ALL: [Transform; 6] =
        [Transform::Identity, Transform::Rot90, Transform::Rot180, Transform::Rot270, Transform::FlipH, Transform::FlipV];

    pub fn inverse(self) -> Self {
        match self {
            Transform::Rot90 => Transform::Rot270,
            Transform::Rot270 => Transform::Rot90,
            t => t,
        }
    }

    /// Apply to the two leading (row, column) axes of `a`.
    pub fn apply<D: Dimension + RemoveAxis>(self, a: ArrayView<'_, f32, D>) -> Array<f32, D> {
        apply_generic(self, a)
    }

    pub fn apply_u8<D: Dimension + RemoveAxis>(self, a: ArrayView<'_, u8, D>) -> Array<u8, D> {
        apply_generic(self, a)
    }
}

fn apply_generic<T: Clone, D: Dimension + RemoveAxis>(t: Transform, a: ArrayView<'_, T, D>) -> Array<T, D> {
    let mut v = a;
    match t {
        Transform::Identity => {}
        Transform::Rot90 => {
            v.swap_axes(0, 1);
            v.invert_axis(Axis(0));
        }
        Transform::Rot180 => {
            v.invert_axis(Axis(0));
            v.invert_axis(Axis(1));
        }
        Transform::Rot270 => {
            v.swap_axes(0, 1);
            v.invert_axis(Axis(1));
        }
        Transform::FlipH => v.invert_axis(Axis(1)),
        Transform::FlipV => v.invert_axis(Axis(0)),
    }
    v.as_standard_layout().into_owned()
}

/// Uniform draw of one transform from a seed.
pub fn draw(seed: u64) -> Transform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Transform::ALL[rng.random_range(0..Transform::ALL.len())]
}

pub fn apply_to_pair(pair: &MultiTemporalPair, t: Transform) -> Result<MultiTemporalPair> {
    let (h, w, _) = pair.dim();
    if h != w && matches!(t, Transform::Rot90 | Transform::Rot270) {
        return Err(Error::Shape(format!("cannot rotate a non-square {h}x{w} patch by 90 degrees")));
    }
    MultiTemporalPair::new(
        t.apply(pair.pre.view()),
        t.apply(pair.post.view()),
        pair.label.as_ref().map(|l| t.apply_u8(l.view())),
    )
}

/// Apply a seeded random transform to a square patch.
pub fn augment(pair: &MultiTemporalPair, seed: u64) -> Result<(MultiTemporalPair, Transform)> {
    let t = draw(seed);
    Ok((apply_to_pair(pair, t)?, t))
}
