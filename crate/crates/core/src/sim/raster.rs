//! Top-down rasterisation and occlusion-aware box detection.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::sim::scene::{ObjectInstance, Scene, Workspace};

/// Sorted linear pixel indices covered by one footprint.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PixelMask {
    pub pixels: Vec<u32>,
}

impl PixelMask {
    pub fn of(obj: &ObjectInstance, ws: &Workspace) -> Self {
        let n = ws.pixels;
        let s = ws.pixel_size();
        let r = obj.spec.footprint.bounding_radius();
        let clamp = |v: f64| (v.max(0.0) as usize).min(n.saturating_sub(1));
        let (c0, c1) = (clamp(((obj.x - r) / s).floor()), clamp(((obj.x + r) / s).ceil()));
        let (r0, r1) = (clamp(((obj.y - r) / s).floor()), clamp(((obj.y + r) / s).ceil()));
        let mut pixels = Vec::new();
        for row in r0..=r1 {
            for col in c0..=c1 {
                let (x, y) = ws.pixel_center(col, row);
                if obj.contains(x, y) {
                    pixels.push((row * n + col) as u32);
                }
            }
        }
        Self { pixels }
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn intersects(&self, other: &PixelMask) -> bool {
        let (mut i, mut j) = (0, 0);
        while i < self.pixels.len() && j < other.pixels.len() {
            match self.pixels[i].cmp(&other.pixels[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => return true,
            }
        }
        false
    }
}

pub fn footprint_masks(scene: &Scene) -> Vec<PixelMask> {
    scene.objects.iter().map(|o| PixelMask::of(o, &scene.workspace)).collect()
}

/// Height of the highest object already in `scene` under `obj`'s footprint.
pub fn support_height(scene: &Scene, obj: &ObjectInstance) -> f64 {
    let mask = PixelMask::of(obj, &scene.workspace);
    scene
        .objects
        .iter()
        .filter(|o| o.layer < obj.layer && PixelMask::of(o, &scene.workspace).intersects(&mask))
        .map(ObjectInstance::top_z)
        .fold(0.0, f64::max)
}

const NONE: u32 = u32::MAX;

/// Per-pixel index (into `scene.objects`) of the topmost object.
#[derive(Debug, Clone)]
pub struct LabelMap {
    pub size: usize,
    owner: Vec<u32>,
    /// Footprint pixel count per object.
    pub footprint: Vec<usize>,
    /// Visible pixel count per object.
    pub visible: Vec<usize>,
}

impl LabelMap {
    pub fn render(scene: &Scene) -> Self {
        let n = scene.workspace.pixels;
        let mut owner = vec![NONE; n * n];
        let masks = footprint_masks(scene);
        let mut order: Vec<usize> = (0..scene.objects.len()).collect();
        order.sort_by_key(|&i| scene.objects[i].layer);
        for &i in &order {
            for &p in &masks[i].pixels {
                owner[p as usize] = i as u32;
            }
        }
        let mut visible = vec![0; scene.objects.len()];
        for &o in &owner {
            if o != NONE {
                visible[o as usize] += 1;
            }
        }
        Self {
            size: n,
            owner,
            footprint: masks.iter().map(PixelMask::len).collect(),
            visible,
        }
    }

    /// Index of the topmost object at a pixel.
    pub fn at(&self, col: usize, row: usize) -> Option<usize> {
        let o = self.owner[row * self.size + col];
        (o != NONE).then_some(o as usize)
    }

    /// Fraction of object `i`'s footprint hidden by higher objects.
    pub fn covered_fraction(&self, i: usize) -> f64 {
        if self.footprint[i] == 0 {
            return 1.0;
        }
        1.0 - self.visible[i] as f64 / self.footprint[i] as f64
    }

    /// Visible pixels of object `i` as `(col, row)`.
    pub fn visible_pixels(&self, i: usize) -> Vec<(usize, usize)> {
        self.owner
            .iter()
            .enumerate()
            .filter(|(_, &o)| o == i as u32)
            .map(|(p, _)| (p % self.size, p / self.size))
            .collect()
    }
}

/// Inclusive pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelRect {
    pub min_col: usize,
    pub min_row: usize,
    pub max_col: usize,
    pub max_row: usize,
}

impl PixelRect {
    pub fn width(&self) -> usize {
        self.max_col - self.min_col + 1
    }

    pub fn height(&self) -> usize {
        self.max_row - self.min_row + 1
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }
}

/// Detected region of one object's visible pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectBox {
    pub rect: PixelRect,
    pub center_3d: [f64; 3],
    /// Concept mixture of the crop; weights sum to one.
    pub descriptor: BTreeMap<String, f64>,
    /// Visible-pixel share of every object inside the rectangle.
    pub object_weights: Vec<(u32, f64)>,
    /// Object whose connected component produced the box.
    pub source: u32,
    /// Object with the largest share of the rectangle.
    pub dominant: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectionConfig {
    /// Boxes with fewer pixels of rectangle area are dropped.
    pub min_area: usize,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        Self { min_area: 15 * 15 }
    }
}

/// One box per 4-connected component of each object's visible pixels.
pub fn detect_boxes(scene: &Scene, map: &LabelMap, config: &DetectionConfig) -> Vec<ObjectBox> {
    let n = map.size;
    let mut seen = vec![false; n * n];
    let mut boxes = Vec::new();
    let mut stack = Vec::new();
    for start in 0..n * n {
        let Some(obj) = map.at(start % n, start / n) else { continue };
        if seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut rect = PixelRect {
            min_col: start % n,
            min_row: start / n,
            max_col: start % n,
            max_row: start / n,
        };
        while let Some(p) = stack.pop() {
            let (c, r) = (p % n, p / n);
            rect.min_col = rect.min_col.min(c);
            rect.max_col = rect.max_col.max(c);
            rect.min_row = rect.min_row.min(r);
            rect.max_row = rect.max_row.max(r);
            let mut visit = |q: usize| {
                if !seen[q] && map.owner[q] == obj as u32 {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if c > 0 {
                visit(p - 1);
            }
            if c + 1 < n {
                visit(p + 1);
            }
            if r > 0 {
                visit(p - n);
            }
            if r + 1 < n {
                visit(p + n);
            }
        }
        if rect.area() < config.min_area {
            continue;
        }
        boxes.push(describe_box(scene, map, rect, obj));
    }
    boxes
}

fn describe_box(scene: &Scene, map: &LabelMap, rect: PixelRect, source: usize) -> ObjectBox {
    let mut counts = vec![0usize; scene.objects.len()];
    for row in rect.min_row..=rect.max_row {
        for col in rect.min_col..=rect.max_col {
            if let Some(o) = map.at(col, row) {
                counts[o] += 1;
            }
        }
    }
    let total: usize = counts.iter().sum();
    let mut descriptor: BTreeMap<String, f64> = BTreeMap::new();
    let mut object_weights = Vec::new();
    let mut dominant = source;
    for (i, &c) in counts.iter().enumerate() {
        if c == 0 {
            continue;
        }
        let w = c as f64 / total as f64;
        object_weights.push((scene.objects[i].uid, w));
        for (concept, a) in scene.objects[i].spec.attributes() {
            *descriptor.entry(concept).or_insert(0.0) += w * a;
        }
        if c > counts[dominant] {
            dominant = i;
        }
    }
    let (x, y) = scene.workspace.pixel_to_world(
        (rect.min_col + rect.max_col) as f64 / 2.0,
        (rect.min_row + rect.max_row) as f64 / 2.0,
    );
    ObjectBox {
        rect,
        center_3d: [x, y, scene.objects[dominant].top_z()],
        descriptor,
        object_weights,
        source: scene.objects[source].uid,
        dominant: scene.objects[dominant].uid,
    }
}
