//! Geometric grasp proposer and the box-grasp association.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{positional_encoding, Graph, Mlp, Var};
use crate::sim::raster::{LabelMap, ObjectBox};
use crate::sim::scene::Scene;
use crate::Tensor;

/// Top-down grasp: closing direction `yaw` in `[0, π)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraspPose {
    pub position: [f64; 3],
    pub yaw: f64,
    pub width: f64,
    pub quality: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProposalConfig {
    pub k_max: usize,
    /// Half-range of the uniform position jitter, m.
    pub position_jitter: f64,
    /// Half-range of the uniform quality jitter.
    pub quality_jitter: f64,
    pub max_opening: f64,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self {
            k_max: 30,
            position_jitter: 0.01,
            quality_jitter: 0.05,
            max_opening: 0.085,
        }
    }
}

impl ProposalConfig {
    pub fn noiseless() -> Self {
        Self {
            position_jitter: 0.0,
            quality_jitter: 0.0,
            ..Self::default()
        }
    }
}

/// Quality of closing across `extent` metres: 1 up to 0.07, falling linearly
/// to 0.2 at the 0.085 opening limit, 0 beyond.
pub fn quality_from_extent(extent: f64) -> f64 {
    const FULL: f64 = 0.07;
    const LIMIT: f64 = 0.085;
    if extent <= FULL {
        1.0
    } else if extent <= LIMIT {
        1.0 - 0.8 * (extent - FULL) / (LIMIT - FULL)
    } else {
        0.0
    }
}

fn wrap_half_turn(a: f64) -> f64 {
    a.rem_euclid(std::f64::consts::PI)
}

/// Up to three candidates per visible object at its visible centroid: the
/// narrowest closing direction and two rotations of it by π/4 and π/2.
pub fn propose_grasps<R: Rng + ?Sized>(
    scene: &Scene,
    map: &LabelMap,
    config: &ProposalConfig,
    rng: &mut R,
) -> Vec<GraspPose> {
    use std::f64::consts::FRAC_PI_4;
    let ws = &scene.workspace;
    let mut out = Vec::new();
    for (i, obj) in scene.objects.iter().enumerate() {
        if map.visible[i] == 0 {
            continue;
        }
        let pixels = map.visible_pixels(i);
        let m = pixels.len() as f64;
        let cx = pixels.iter().map(|p| p.0 as f64).sum::<f64>() / m;
        let cy = pixels.iter().map(|p| p.1 as f64).sum::<f64>() / m;
        let &(pc, pr) = pixels
            .iter()
            .min_by(|a, b| {
                let da = (a.0 as f64 - cx).powi(2) + (a.1 as f64 - cy).powi(2);
                let db = (b.0 as f64 - cx).powi(2) + (b.1 as f64 - cy).powi(2);
                da.total_cmp(&db)
            })
            .expect("non-empty");
        let (x, y) = ws.pixel_center(pc, pr);
        let narrow = obj.spec.footprint.narrow_direction();
        for k in 0..3 {
            let rel = narrow + k as f64 * FRAC_PI_4;
            let extent = obj.spec.footprint.extent_along(rel);
            let mut quality = quality_from_extent(extent);
            let (mut gx, mut gy) = (x, y);
            if config.position_jitter > 0.0 {
                gx += rng.random_range(-config.position_jitter..=config.position_jitter);
                gy += rng.random_range(-config.position_jitter..=config.position_jitter);
            }
            if config.quality_jitter > 0.0 {
                quality += rng.random_range(-config.quality_jitter..=config.quality_jitter);
            }
            let edge = ws.side - 1e-9;
            out.push(GraspPose {
                position: [gx.clamp(0.0, edge), gy.clamp(0.0, edge), obj.top_z()],
                yaw: wrap_half_turn(obj.yaw + rel),
                width: (extent + 0.01).min(config.max_opening),
                quality: quality.clamp(0.0, 1.0),
            });
        }
    }
    // shuffle first so equal qualities do not keep object order
    out.shuffle(rng);
    out.sort_by(|a, b| b.quality.total_cmp(&a.quality));
    out.truncate(config.k_max);
    out
}

/// Policy input for one grasp: `PE(position) ++ [yaw, width, quality]`.
pub fn grasp_input(grasp: &GraspPose, bands: usize) -> Vec<f64> {
    let mut v = positional_encoding(grasp.position, bands);
    v.extend([grasp.yaw, grasp.width, grasp.quality]);
    v
}

pub fn grasp_input_width(bands: usize) -> usize {
    6 * bands + 3
}

/// Stacked grasp inputs, one row per grasp.
pub fn grasp_inputs(grasps: &[GraspPose], bands: usize) -> Tensor {
    let w = grasp_input_width(bands);
    let data = grasps.iter().flat_map(|g| grasp_input(g, bands)).collect();
    Tensor::from_vec(grasps.len(), w, data).expect("sized by construction")
}

/// Grasp features: the grasp MLP applied to each serialized pose.
pub fn grasp_feature_encode(g: &mut Graph<'_, f64>, mlp: &Mlp, grasps: &[GraspPose], bands: usize) -> Result<Var> {
    if grasps.is_empty() {
        return Err(Error::NoGrasps);
    }
    let x = g.constant(grasp_inputs(grasps, bands));
    mlp.forward(g, x)
}

/// `N × K` binary association: 1 where the box centre and grasp lie closer than `d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappingMatrix {
    pub boxes: usize,
    pub grasps: usize,
    pub threshold: f64,
    /// Row-major, one row per box.
    pub entries: Vec<u8>,
}

impl MappingMatrix {
    pub fn get(&self, i: usize, k: usize) -> bool {
        self.entries[i * self.grasps + k] == 1
    }

    /// Grasps mapped to box `i`.
    pub fn grasps_of(&self, i: usize) -> Vec<usize> {
        (0..self.grasps).filter(|&k| self.get(i, k)).collect()
    }
}

pub const DEFAULT_THRESHOLD: f64 = 0.05;

pub fn box_grasp_mapping(centers: &[[f64; 3]], positions: &[[f64; 3]], d: f64) -> Result<MappingMatrix> {
    if d <= 0.0 || !d.is_finite() {
        return Err(Error::Config(format!("mapping threshold must be positive, got {d}")));
    }
    let mut entries = Vec::with_capacity(centers.len() * positions.len());
    for c in centers {
        for p in positions {
            let dist2: f64 = c.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum();
            entries.push(u8::from(dist2 < d * d));
        }
    }
    Ok(MappingMatrix {
        boxes: centers.len(),
        grasps: positions.len(),
        threshold: d,
        entries,
    })
}

pub fn map_boxes_to_grasps(boxes: &[ObjectBox], grasps: &[GraspPose], d: f64) -> Result<MappingMatrix> {
    let c: Vec<[f64; 3]> = boxes.iter().map(|b| b.center_3d).collect();
    let p: Vec<[f64; 3]> = grasps.iter().map(|g| g.position).collect();
    box_grasp_mapping(&c, &p, d)
}

pub const PRIOR_FLOOR: f64 = 1e-6;

/// Box probabilities pushed through the mapping, floored at [`PRIOR_FLOOR`] and renormalized.
pub fn grounding_prior(box_probs: &[f64], mapping: &MappingMatrix) -> Result<Vec<f64>> {
    if mapping.grasps == 0 {
        return Err(Error::NoGrasps);
    }
    if box_probs.len() != mapping.boxes {
        return Err(Error::Shape {
            op: "grounding_prior",
            detail: format!("{} box probabilities for {} boxes", box_probs.len(), mapping.boxes),
        });
    }
    let mut raw = vec![PRIOR_FLOOR; mapping.grasps];
    for (i, p) in box_probs.iter().enumerate() {
        for (k, r) in raw.iter_mut().enumerate() {
            if mapping.get(i, k) {
                *r += p;
            }
        }
    }
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|r| r / total).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use crate::sim::library::ObjectLibrary;
    use crate::sim::scene::{ObjectInstance, Workspace};

    fn single(id: &str, yaw: f64) -> Scene {
        let mut s = Scene::empty(Workspace::default(), 0);
        s.objects.push(ObjectInstance {
            uid: 0,
            spec: ObjectLibrary::builtin().get(id).unwrap().clone(),
            x: 0.3,
            y: 0.5,
            yaw,
            layer: 0,
            base_z: 0.0,
        });
        s
    }

    #[test]
    fn quality_curve() {
        assert_eq!(quality_from_extent(0.05), 1.0);
        assert_eq!(quality_from_extent(0.07), 1.0);
        assert!((quality_from_extent(0.085) - 0.2).abs() < 1e-12);
        assert!((quality_from_extent(0.0775) - 0.6).abs() < 1e-12);
        assert_eq!(quality_from_extent(0.09), 0.0);
    }

    #[test]
    fn empty_scene_has_no_grasps() {
        let s = Scene::empty(Workspace::default(), 0);
        let map = LabelMap::render(&s);
        assert!(propose_grasps(&s, &map, &ProposalConfig::default(), &mut rng_from(0)).is_empty());
    }

    #[test]
    fn isolated_object_gets_good_grasp() {
        for (id, yaw) in [("banana_0", 0.3), ("apple_0", 1.0), ("block_0", 0.0)] {
            let s = single(id, yaw);
            let map = LabelMap::render(&s);
            let g = propose_grasps(&s, &map, &ProposalConfig::default(), &mut rng_from(2));
            assert_eq!(g.len(), 3);
            assert!(g[0].quality >= 0.8, "{id}: {g:?}");
            assert!(g.windows(2).all(|w| w[0].quality >= w[1].quality));
        }
        // elongated: the best grasp closes across the width
        let s = single("banana_0", 0.3);
        let g = propose_grasps(&s, &LabelMap::render(&s), &ProposalConfig::noiseless(), &mut rng_from(0));
        assert!((g[0].yaw - (0.3 + std::f64::consts::FRAC_PI_2)).abs() < 1e-12);
        assert!((g[0].position[0] - 0.3).abs() < 0.004);
    }

    #[test]
    fn proposals_are_deterministic() {
        let s = single("mug_0", 0.2);
        let map = LabelMap::render(&s);
        let a = propose_grasps(&s, &map, &ProposalConfig::default(), &mut rng_from(9));
        let b = propose_grasps(&s, &map, &ProposalConfig::default(), &mut rng_from(9));
        assert_eq!(a, b);
    }

    #[test]
    fn mapping_threshold_rule() {
        let c = [[0.1, 0.1, 0.05]];
        let m = box_grasp_mapping(&c, &[[0.1, 0.1, 0.05], [0.3, 0.1, 0.05], [0.1, 0.2, 0.05]], 0.05).unwrap();
        assert_eq!(m.entries, vec![1, 0, 0]);
        assert!(box_grasp_mapping(&c, &[], 0.0).is_err());
    }

    #[test]
    fn prior_cases() {
        let m = box_grasp_mapping(&[[0.0; 3]], &[[0.0; 3], [0.01, 0.0, 0.0], [0.0, 0.02, 0.0]], 0.05).unwrap();
        let p = grounding_prior(&[1.0], &m).unwrap();
        assert!(p.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));

        let m = box_grasp_mapping(&[[0.0; 3]], &[[0.0; 3], [0.5, 0.0, 0.0]], 0.05).unwrap();
        let p = grounding_prior(&[1.0], &m).unwrap();
        let total = 1.0 + 2.0 * PRIOR_FLOOR;
        assert!((p[1] - PRIOR_FLOOR / total).abs() < 1e-18);
        assert!((p[0] - (1.0 + PRIOR_FLOOR) / total).abs() < 1e-15);

        let empty = box_grasp_mapping(&[[0.0; 3]], &[], 0.05).unwrap();
        assert!(matches!(grounding_prior(&[1.0], &empty), Err(Error::NoGrasps)));
    }

    #[test]
    fn grasp_input_layout() {
        let g = GraspPose {
            position: [0.0, 0.0, 0.0],
            yaw: 0.5,
            width: 0.06,
            quality: 0.9,
        };
        let v = grasp_input(&g, 2);
        assert_eq!(v.len(), grasp_input_width(2));
        assert_eq!(&v[12..], &[0.5, 0.06, 0.9]);
        assert_eq!(&v[..4], &[0.0, 1.0, 0.0, 1.0]);
    }
}
