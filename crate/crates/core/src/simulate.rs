//! Synthetic anomaly generation on composition maps.
//!
//! Three strategies: pasting a random class under a Perlin-noise mask
//! (structural), erasing a component and filling it from its neighbourhood
//! (removal), and pasting a component from another image (inpaint). Each
//! sample carries the ground-truth anomaly mask its strategy defines.

use crate::compmap::CompositionMap;
use crate::error::Result;
use crate::perlin::perlin_mask;
use rand::prelude::*;
use rand_pcg::Pcg64Mcg;
use serde::{Deserialize, Serialize};

/// Components smaller than this are not eligible for removal/inpaint.
pub const MIN_COMPONENT_AREA: usize = 50;
/// Chebyshev radius of the neighbourhood ring around an erased component.
pub const RING_RADIUS: usize = 5;
const MAX_RETRIES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    PerlinPaste,
    ComponentInpaint,
    ComponentRemoval,
    None,
}

/// An augmented composition map with its ground-truth anomaly mask.
#[derive(Debug, Clone)]
pub struct SyntheticSample {
    pub augmented: CompositionMap,
    pub gt_mask: Vec<bool>,
    pub kind: AnomalyKind,
}

impl SyntheticSample {
    pub fn clean(source: &CompositionMap) -> Self {
        SyntheticSample {
            augmented: source.clone(),
            gt_mask: vec![false; source.len()],
            kind: AnomalyKind::None,
        }
    }

    pub fn gt_area(&self) -> usize {
        self.gt_mask.iter().filter(|v| **v).count()
    }

    /// Check the kind-specific gt_mask contract against the source map.
    pub fn check_invariants(&self, source: &CompositionMap) -> std::result::Result<(), String> {
        if self.augmented.num_classes != source.num_classes || self.augmented.len() != source.len() {
            return Err("augmented map shape or class count changed".into());
        }
        if self
            .augmented
            .classes
            .iter()
            .any(|&c| c as usize >= self.augmented.num_classes)
        {
            return Err("augmented map has out-of-range class values".into());
        }
        let changed: Vec<bool> = self
            .augmented
            .classes
            .iter()
            .zip(&source.classes)
            .map(|(a, b)| a != b)
            .collect();
        let n_changed = changed.iter().filter(|v| **v).count();
        match self.kind {
            AnomalyKind::None => {
                if n_changed != 0 {
                    return Err("kind=none but map changed".into());
                }
                if self.gt_area() != 0 {
                    return Err("kind=none but gt_mask non-empty".into());
                }
            }
            AnomalyKind::PerlinPaste => {
                if n_changed == 0 || self.gt_area() == 0 {
                    return Err("perlin_paste requires a visible change".into());
                }
                if self.gt_mask != changed {
                    return Err("perlin_paste gt_mask must equal the changed-pixel set".into());
                }
            }
            AnomalyKind::ComponentRemoval => {
                if n_changed == 0 || self.gt_area() == 0 {
                    return Err("component_removal requires a visible change".into());
                }
                // gt covers every changed pixel (the erased region).
                for (p, &c) in changed.iter().enumerate() {
                    if c && !self.gt_mask[p] {
                        return Err(format!("removal gt_mask misses changed pixel {p}"));
                    }
                }
            }
            AnomalyKind::ComponentInpaint => {
                if n_changed == 0 || self.gt_area() == 0 {
                    return Err("component_inpaint requires a visible change".into());
                }
                // The changed pixels all hold one class; gt is every pixel of
                // that class in the augmented map.
                let classes: Vec<u16> = changed
                    .iter()
                    .enumerate()
                    .filter(|(_, &c)| c)
                    .map(|(p, _)| self.augmented.classes[p])
                    .collect();
                let pasted = classes[0];
                if classes.iter().any(|&c| c != pasted) {
                    return Err("inpaint changed pixels carry multiple classes".into());
                }
                for (p, &cls) in self.augmented.classes.iter().enumerate() {
                    let want = cls == pasted;
                    if self.gt_mask[p] != want {
                        return Err(format!("inpaint gt_mask wrong at pixel {p}"));
                    }
                }
            }
        }
        Ok(())
    }
}

/// An 8-connected region of one non-background class.
#[derive(Debug, Clone)]
pub struct Component {
    pub mask: Vec<bool>,
    pub class_id: u16,
    pub area: usize,
}

/// 8-connected components per non-background class, `min_area` filtered.
pub fn connected_components(map: &CompositionMap, min_area: usize) -> Vec<Component> {
    let (h, w) = (map.height, map.width);
    let mut visited = vec![false; h * w];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if visited[start] || map.classes[start] == 0 {
            continue;
        }
        let class_id = map.classes[start];
        let mut mask = vec![false; h * w];
        let mut area = 0usize;
        visited[start] = true;
        stack.push(start);
        while let Some(p) = stack.pop() {
            mask[p] = true;
            area += 1;
            let (py, px) = (p / w, p % w);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dy == 0 && dx == 0 {
                        continue;
                    }
                    let ny = py as i64 + dy;
                    let nx = px as i64 + dx;
                    if ny < 0 || ny >= h as i64 || nx < 0 || nx >= w as i64 {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if !visited[q] && map.classes[q] == class_id {
                        visited[q] = true;
                        stack.push(q);
                    }
                }
            }
        }
        if area >= min_area {
            out.push(Component { mask, class_id, area });
        }
    }
    out
}

/// Paste a random class under a Perlin mask. Redraws with a derived seed when
/// the paste changes nothing, up to 10 attempts, then returns a clean sample.
pub fn simulate_structural(source: &CompositionMap, seed: u64) -> Result<SyntheticSample> {
    for attempt in 0..MAX_RETRIES as u64 {
        let attempt_seed = seed.wrapping_add(attempt.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let mut rng = Pcg64Mcg::seed_from_u64(attempt_seed);
        let target = rng.random_range(0..source.num_classes as u16);
        let mask = perlin_mask(source.height, source.width, attempt_seed ^ 0x7e12);
        let mut augmented = source.clone();
        let mut gt_mask = vec![false; source.len()];
        let mut changed = 0usize;
        for (p, &m) in mask.iter().enumerate() {
            if m && source.classes[p] != target {
                augmented.classes[p] = target;
                gt_mask[p] = true;
                changed += 1;
            }
        }
        if changed > 0 {
            return Ok(SyntheticSample {
                augmented,
                gt_mask,
                kind: AnomalyKind::PerlinPaste,
            });
        }
    }
    Ok(SyntheticSample::clean(source))
}

fn dilate_chebyshev(mask: &[bool], h: usize, w: usize, radius: usize) -> Vec<bool> {
    let mut cur = mask.to_vec();
    for _ in 0..radius {
        let mut next = cur.clone();
        for y in 0..h {
            for x in 0..w {
                if cur[y * w + x] {
                    continue;
                }
                'scan: for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let ny = y as i64 + dy;
                        let nx = x as i64 + dx;
                        if ny < 0 || ny >= h as i64 || nx < 0 || nx >= w as i64 {
                            continue;
                        }
                        if cur[ny as usize * w + nx as usize] {
                            next[y * w + x] = true;
                            break 'scan;
                        }
                    }
                }
            }
        }
        cur = next;
    }
    cur
}

/// Pixels of `class` in `map` 8-connected to any seed pixel.
fn grow_class_region(map: &CompositionMap, seeds: &[bool], class: u16) -> Vec<bool> {
    let (h, w) = (map.height, map.width);
    let mut region = vec![false; h * w];
    let mut stack: Vec<usize> = Vec::new();
    for (p, &s) in seeds.iter().enumerate() {
        if s && map.classes[p] == class {
            region[p] = true;
            stack.push(p);
        }
    }
    while let Some(p) = stack.pop() {
        let (py, px) = (p / w, p % w);
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let ny = py as i64 + dy;
                let nx = px as i64 + dx;
                if ny < 0 || ny >= h as i64 || nx < 0 || nx >= w as i64 {
                    continue;
                }
                let q = ny as usize * w + nx as usize;
                if !region[q] && map.classes[q] == class {
                    region[q] = true;
                    stack.push(q);
                }
            }
        }
    }
    region
}

/// Erase one component and fill it with a class sampled from its
/// neighbourhood ring; the ground truth covers the erased region plus the
/// fill-class pixels connected to it.
pub fn simulate_removal(source: &CompositionMap, seed: u64) -> Result<SyntheticSample> {
    let components = connected_components(source, MIN_COMPONENT_AREA);
    if components.is_empty() {
        return Ok(SyntheticSample::clean(source));
    }
    let mut rng = Pcg64Mcg::seed_from_u64(seed);
    let comp = &components[rng.random_range(0..components.len())];
    let (h, w) = (source.height, source.width);

    let dilated = dilate_chebyshev(&comp.mask, h, w, RING_RADIUS);
    let mut ring_hist = vec![0usize; source.num_classes];
    let mut ring_total = 0usize;
    for p in 0..h * w {
        if dilated[p] && !comp.mask[p] && source.classes[p] != comp.class_id {
            ring_hist[source.classes[p] as usize] += 1;
            ring_total += 1;
        }
    }
    if ring_total == 0 {
        // Component fills the frame (or is surrounded by its own class only).
        return Ok(SyntheticSample::clean(source));
    }
    // Fill class proportional to ring frequency; background allowed.
    let mut pick = rng.random_range(0..ring_total);
    let mut fill = 0u16;
    for (c, &count) in ring_hist.iter().enumerate() {
        if pick < count {
            fill = c as u16;
            break;
        }
        pick -= count;
    }

    let mut augmented = source.clone();
    for (p, &m) in comp.mask.iter().enumerate() {
        if m {
            augmented.classes[p] = fill;
        }
    }
    // Erased region, plus fill-class pixels of the augmented map connected
    // to it when the fill is a part class.
    let mut gt_mask = comp.mask.clone();
    if fill != 0 {
        let grown = grow_class_region(&augmented, &comp.mask, fill);
        for (g, v) in gt_mask.iter_mut().zip(&grown) {
            *g |= v;
        }
    }
    Ok(SyntheticSample {
        augmented,
        gt_mask,
        kind: AnomalyKind::ComponentRemoval,
    })
}

/// Paste a component from another image at its original coordinates; the
/// ground truth covers every pixel of the pasted class in the result.
pub fn simulate_inpaint(source: &CompositionMap, donor: &CompositionMap, seed: u64) -> Result<SyntheticSample> {
    let components = connected_components(donor, MIN_COMPONENT_AREA);
    if components.is_empty() {
        return Ok(SyntheticSample::clean(source));
    }
    for attempt in 0..MAX_RETRIES as u64 {
        let attempt_seed = seed.wrapping_add(attempt.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let mut rng = Pcg64Mcg::seed_from_u64(attempt_seed);
        let comp = &components[rng.random_range(0..components.len())];
        let mut augmented = source.clone();
        let mut changed = 0usize;
        for (p, &m) in comp.mask.iter().enumerate() {
            if m && augmented.classes[p] != comp.class_id {
                augmented.classes[p] = comp.class_id;
                changed += 1;
            }
        }
        if changed == 0 {
            continue;
        }
        let gt_mask: Vec<bool> = augmented.classes.iter().map(|&c| c == comp.class_id).collect();
        return Ok(SyntheticSample {
            augmented,
            gt_mask,
            kind: AnomalyKind::ComponentInpaint,
        });
    }
    Ok(SyntheticSample::clean(source))
}

/// Draw one training sample: clean with probability 0.5, otherwise one of
/// the three strategies uniformly. `donors` supplies source maps for
/// inpainting; the map at `skip_donor` (the sample's own index) is excluded.
pub fn sample_training_example(
    source: &CompositionMap,
    donors: &[CompositionMap],
    skip_donor: Option<usize>,
    seed: u64,
) -> Result<SyntheticSample> {
    let mut rng = Pcg64Mcg::seed_from_u64(seed);
    if rng.random_bool(0.5) {
        return Ok(SyntheticSample::clean(source));
    }
    let strategy = rng.random_range(0..3u32);
    let sub_seed = rng.random::<u64>();
    match strategy {
        0 => simulate_structural(source, sub_seed),
        1 => {
            let eligible: Vec<usize> = (0..donors.len())
                .filter(|i| Some(*i) != skip_donor)
                .collect();
            if eligible.is_empty() {
                return Ok(SyntheticSample::clean(source));
            }
            let donor = &donors[eligible[rng.random_range(0..eligible.len())]];
            simulate_inpaint(source, donor, sub_seed)
        }
        _ => simulate_removal(source, sub_seed),
    }
}
