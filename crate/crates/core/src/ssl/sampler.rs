//! Class-balanced patch cropping.

use rand::Rng;

use crate::volume::{LabelVolume, PatchSpec, Shape3};

/// Voxel indices of every class in a label field.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassIndex {
    shape: Shape3,
    per_class: Vec<Vec<u32>>,
}

impl ClassIndex {
    pub fn new(labels: &LabelVolume) -> Self {
        let mut per_class = vec![Vec::new(); labels.num_classes() as usize];
        for (i, &l) in labels.labels().iter().enumerate() {
            per_class[l as usize].push(i as u32);
        }
        Self {
            shape: labels.shape(),
            per_class,
        }
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn count(&self, class: u8) -> usize {
        self.per_class.get(class as usize).map_or(0, Vec::len)
    }
}

fn clamp_origin(center: i64, dim: usize, patch: usize) -> i64 {
    let hi = dim as i64 - patch as i64;
    if hi <= 0 {
        // patch wider than the axis: centre the volume inside the patch
        hi / 2
    } else {
        (center - patch as i64 / 2).clamp(0, hi)
    }
}

/// Uniform crop that stays inside the volume where it fits.
pub fn random_patch<R: Rng + ?Sized>(shape: Shape3, patch_size: Shape3, rng: &mut R) -> PatchSpec {
    let origin = std::array::from_fn(|a| {
        let hi = shape[a] as i64 - patch_size[a] as i64;
        if hi <= 0 {
            hi / 2
        } else {
            rng.random_range(0..=hi)
        }
    });
    PatchSpec {
        origin,
        size: patch_size,
    }
}

/// A patch centred on a uniformly chosen voxel of `target_class` (clamped to
/// the volume), or a uniform crop when the class is absent.
pub fn sample_patch_balanced<R: Rng + ?Sized>(
    index: &ClassIndex,
    target_class: u8,
    patch_size: Shape3,
    rng: &mut R,
) -> PatchSpec {
    let shape = index.shape;
    let Some(voxels) = index.per_class.get(target_class as usize).filter(|v| !v.is_empty()) else {
        return random_patch(shape, patch_size, rng);
    };
    let i = voxels[rng.random_range(0..voxels.len())] as usize;
    let c = [i / (shape[1] * shape[2]), (i / shape[2]) % shape[1], i % shape[2]];
    PatchSpec {
        origin: std::array::from_fn(|a| clamp_origin(c[a] as i64, shape[a], patch_size[a])),
        size: patch_size,
    }
}

/// Cycles the target over foreground classes `1..C`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundRobin {
    num_classes: u8,
    next: u8,
}

impl RoundRobin {
    pub fn new(num_classes: u8) -> Self {
        Self { num_classes, next: 1 }
    }

    pub fn next_class(&mut self) -> u8 {
        let c = self.next;
        self.next = if c + 1 >= self.num_classes { 1 } else { c + 1 };
        c
    }
}
