use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::instruction::Instruction;
use crate::sim::library::ObjectSpec;

/// Square tabletop with its origin at one corner, rendered as a square pixel grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Workspace {
    pub side: f64,
    pub pixels: usize,
}

impl Default for Workspace {
    fn default() -> Self {
        Self { side: 0.8, pixels: 224 }
    }
}

impl Workspace {
    pub fn pixel_size(&self) -> f64 {
        self.side / self.pixels as f64
    }

    /// Diagonal length, the reward normaliser.
    pub fn dist_max(&self) -> f64 {
        self.side * std::f64::consts::SQRT_2
    }

    /// World coordinates of a pixel centre.
    pub fn pixel_center(&self, col: usize, row: usize) -> (f64, f64) {
        let s = self.pixel_size();
        ((col as f64 + 0.5) * s, (row as f64 + 0.5) * s)
    }

    /// World coordinates of a fractional pixel position.
    pub fn pixel_to_world(&self, col: f64, row: f64) -> (f64, f64) {
        let s = self.pixel_size();
        ((col + 0.5) * s, (row + 0.5) * s)
    }

    /// Pixel containing `(x, y)`, or `None` outside the grid.
    pub fn to_pixel(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let s = self.pixel_size();
        let (c, r) = ((x / s).floor(), (y / s).floor());
        let n = self.pixels as f64;
        (c >= 0.0 && r >= 0.0 && c < n && r < n).then_some((c as usize, r as usize))
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        (0.0..=self.side).contains(&x) && (0.0..=self.side).contains(&y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectInstance {
    pub uid: u32,
    pub spec: ObjectSpec,
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    /// Painter's order: higher layers are drawn over lower ones.
    pub layer: u32,
    /// Height of the surface the object rests on.
    pub base_z: f64,
}

impl ObjectInstance {
    pub fn top_z(&self) -> f64 {
        self.base_z + self.spec.height
    }

    pub fn position(&self) -> [f64; 3] {
        [self.x, self.y, self.top_z()]
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.x, y - self.y);
        let (s, c) = self.yaw.sin_cos();
        self.spec.footprint.contains_local(dx * c + dy * s, -dx * s + dy * c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// Objects spread over the table without overlap.
    Scattered,
    /// Objects dropped into a small area, overlapping and stacking.
    Clutter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub workspace: Workspace,
    pub objects: Vec<ObjectInstance>,
    pub targets: Vec<u32>,
    pub seed: u64,
}

impl Scene {
    pub fn empty(workspace: Workspace, seed: u64) -> Self {
        Self {
            workspace,
            objects: Vec::new(),
            targets: Vec::new(),
            seed,
        }
    }

    pub fn object(&self, uid: u32) -> Option<&ObjectInstance> {
        self.objects.iter().find(|o| o.uid == uid)
    }

    pub fn is_target(&self, uid: u32) -> bool {
        self.targets.contains(&uid)
    }

    pub fn remaining_targets(&self) -> usize {
        self.targets.iter().filter(|t| self.object(**t).is_some()).count()
    }

    pub fn remove(&mut self, uid: u32) -> Option<ObjectInstance> {
        let i = self.objects.iter().position(|o| o.uid == uid)?;
        Some(self.objects.remove(i))
    }

    /// Pairs `(upper, lower)` where `upper` covers part of `lower`.
    pub fn occlusion_edges(&self) -> Vec<(u32, u32)> {
        let grid = crate::sim::raster::footprint_masks(self);
        let mut edges = Vec::new();
        for (i, a) in self.objects.iter().enumerate() {
            for (j, b) in self.objects.iter().enumerate() {
                if a.layer > b.layer && grid[i].intersects(&grid[j]) {
                    edges.push((a.uid, b.uid));
                }
            }
        }
        edges
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlacementConfig {
    pub layout: Layout,
    pub max_retries: usize,
    /// Scattered centres keep `scattered_gap × (r_i + r_j)` apart (bounding radii).
    pub scattered_gap: f64,
    /// Cluttered centres keep `clutter_gap × (r_i + r_j)` apart, so footprints overlap.
    pub clutter_gap: f64,
    /// Clutter drop area per object, m². Centres fall inside the drop square.
    pub clutter_area_per_object: f64,
}

impl PlacementConfig {
    pub fn scattered() -> Self {
        Self {
            layout: Layout::Scattered,
            ..Self::clutter()
        }
    }

    pub fn clutter() -> Self {
        Self {
            layout: Layout::Clutter,
            max_retries: 2000,
            scattered_gap: 1.05,
            clutter_gap: 0.5,
            clutter_area_per_object: 0.01,
        }
    }
}

/// Picks target and distractor specs for an instruction. Targets carry the
/// instruction's concept, distractors do not.
pub fn choose_specs<R: Rng + ?Sized>(
    rng: &mut R,
    n_objects: usize,
    pool: &[&ObjectSpec],
    instruction: Option<&Instruction>,
) -> Result<(Vec<ObjectSpec>, usize)> {
    if pool.is_empty() {
        return Err(Error::Config("object pool is empty".into()));
    }
    let Some(ins) = instruction else {
        let specs = (0..n_objects).map(|_| (*pool.choose(rng).unwrap()).clone()).collect();
        return Ok((specs, 0));
    };
    if n_objects == 0 {
        return Ok((Vec::new(), 0));
    }
    let matching: Vec<&ObjectSpec> = pool.iter().copied().filter(|o| o.has_concept(&ins.concept)).collect();
    let others: Vec<&ObjectSpec> = pool.iter().copied().filter(|o| !o.has_concept(&ins.concept)).collect();
    if matching.is_empty() {
        return Err(Error::Placement(format!("no object in the pool matches `{}`", ins.keyword)));
    }
    let n_targets = if ins.kind.two_targets() { 2 } else { 1 }.min(n_objects);
    let mut specs = Vec::with_capacity(n_objects);
    let mut first: Option<&ObjectSpec> = None;
    for _ in 0..n_targets {
        // prefer a different model for the second target when one exists
        let cands: Vec<&ObjectSpec> = match first {
            Some(f) if matching.len() > 1 => matching.iter().copied().filter(|o| o.id != f.id).collect(),
            _ => matching.clone(),
        };
        let pick = *cands.choose(rng).unwrap();
        first.get_or_insert(pick);
        specs.push(pick.clone());
    }
    for _ in n_targets..n_objects {
        let src = if others.is_empty() { &matching } else { &others };
        specs.push((*src.choose(rng).unwrap()).clone());
    }
    Ok((specs, n_targets))
}

/// Places `specs` in the workspace. The first `n_targets` become targets.
pub fn place_objects<R: Rng + ?Sized>(
    rng: &mut R,
    specs: Vec<ObjectSpec>,
    n_targets: usize,
    workspace: Workspace,
    placement: &PlacementConfig,
    seed: u64,
) -> Result<Scene> {
    let mut scene = Scene::empty(workspace, seed);
    let n = specs.len();
    let (lo, hi) = match placement.layout {
        Layout::Scattered => (0.0, workspace.side),
        Layout::Clutter => {
            let half = 0.5 * (n.max(1) as f64 * placement.clutter_area_per_object).sqrt();
            let half = half.min(workspace.side / 2.0);
            let c0 = workspace.side / 2.0;
            let jitter = (workspace.side / 2.0 - half - 0.1).max(0.0);
            let cx = c0 + rng.random_range(-1.0..=1.0) * jitter;
            (cx - half, cx + half)
        }
    };
    let (ylo, yhi) = match placement.layout {
        Layout::Scattered => (lo, hi),
        Layout::Clutter => {
            let half = (hi - lo) / 2.0;
            let jitter = (workspace.side / 2.0 - half - 0.1).max(0.0);
            let cy = workspace.side / 2.0 + rng.random_range(-1.0..=1.0) * jitter;
            (cy - half, cy + half)
        }
    };
    let gap = match placement.layout {
        Layout::Scattered => placement.scattered_gap,
        Layout::Clutter => placement.clutter_gap,
    };
    // targets are placed at random positions in the drop order, not always first
    let mut order: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), rng);
    for (layer, &i) in order.iter().enumerate() {
        let spec = &specs[i];
        let r = spec.footprint.bounding_radius();
        let mut placed = None;
        for _ in 0..placement.max_retries {
            let (x0, x1) = (lo.max(r), hi.min(workspace.side - r));
            let (y0, y1) = (ylo.max(r), yhi.min(workspace.side - r));
            let x = if x1 > x0 { rng.random_range(x0..x1) } else { (x0 + x1) / 2.0 };
            let y = if y1 > y0 { rng.random_range(y0..y1) } else { (y0 + y1) / 2.0 };
            let yaw = rng.random_range(0.0..std::f64::consts::PI);
            let clear = scene.objects.iter().all(|o| {
                let d = ((o.x - x).powi(2) + (o.y - y).powi(2)).sqrt();
                d >= gap * (o.spec.footprint.bounding_radius() + r)
            });
            if clear {
                placed = Some((x, y, yaw));
                break;
            }
        }
        let (x, y, yaw) = placed.ok_or_else(|| {
            Error::Placement(format!(
                "could not place object {} of {n} (`{}`) after {} tries",
                layer + 1,
                spec.id,
                placement.max_retries
            ))
        })?;
        let mut inst = ObjectInstance {
            uid: i as u32,
            spec: spec.clone(),
            x,
            y,
            yaw,
            layer: layer as u32,
            base_z: 0.0,
        };
        inst.base_z = crate::sim::raster::support_height(&scene, &inst);
        scene.objects.push(inst);
    }
    scene.objects.sort_by_key(|o| o.uid);
    scene.targets = (0..n_targets as u32).collect();
    Ok(scene)
}

/// Samples a scene of `n_objects` from `pool` with targets matching `instruction`.
pub fn sample_scene<R: Rng + ?Sized>(
    rng: &mut R,
    n_objects: usize,
    pool: &[&ObjectSpec],
    workspace: Workspace,
    placement: &PlacementConfig,
    instruction: Option<&Instruction>,
    seed: u64,
) -> Result<Scene> {
    let (specs, n_targets) = choose_specs(rng, n_objects, pool, instruction)?;
    place_objects(rng, specs, n_targets, workspace, placement, seed)
}
