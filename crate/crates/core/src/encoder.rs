//! Frozen stand-in for an aligned vision-language model. Concepts live on a
//! seeded orthonormal basis; text and box crops are mixtures of concept
//! embeddings, boxes with optional alignment noise.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::{positional_encoding, softmax, Graph, Mlp, Var};
use crate::rng::{child_rng, fnv1a};
use crate::sim::library::{KeywordTable, ObjectLibrary};
use crate::sim::raster::ObjectBox;
use crate::sim::Instruction;
use crate::Tensor;

/// Weight of a label's own atom and of its shared general-label component.
const LABEL_OWN: f64 = 0.8;
const LABEL_GENERAL: f64 = 0.6;
/// Size of the template-dependent perturbation of text features.
pub const TEMPLATE_PERTURBATION: f64 = 0.05;
pub const DEFAULT_TEMPERATURE: f64 = 0.07;

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let d = dot(a, a).sqrt() * dot(b, b).sqrt();
    if d == 0.0 {
        0.0
    } else {
        dot(a, b) / d
    }
}

fn gaussian_unit<R: Rng + ?Sized>(rng: &mut R, width: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..width).map(|_| rng.sample(StandardNormal)).collect();
    normalize(&mut v);
    v
}

/// One atom per concept (orthonormal when the vocabulary fits the width) and
/// the embeddings built from them: a label mixes its own atom with the atoms
/// of its general labels, every other concept is its atom.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptBasis {
    pub version: u32,
    pub seed: u64,
    pub width: usize,
    pub atoms: BTreeMap<String, Vec<f64>>,
    pub embeddings: BTreeMap<String, Vec<f64>>,
}

impl ConceptBasis {
    /// `concepts` in generation order; `general_of` maps a label to its general labels.
    pub fn new(concepts: &[String], general_of: &BTreeMap<String, Vec<String>>, width: usize, seed: u64) -> Self {
        let mut rng = child_rng(seed, "concept-basis", width as u64);
        let orthogonal = concepts.len() <= width;
        let mut made: Vec<Vec<f64>> = Vec::with_capacity(concepts.len());
        for _ in concepts {
            let mut v = gaussian_unit(&mut rng, width);
            if orthogonal {
                // two passes of modified Gram-Schmidt
                for _ in 0..2 {
                    for u in &made {
                        let p = dot(&v, u);
                        v.iter_mut().zip(u).for_each(|(x, y)| *x -= p * y);
                    }
                    normalize(&mut v);
                }
            }
            made.push(v);
        }
        let atoms: BTreeMap<String, Vec<f64>> = concepts.iter().cloned().zip(made).collect();
        let mut embeddings = BTreeMap::new();
        for c in concepts {
            let own = &atoms[c];
            let generals: Vec<&Vec<f64>> = general_of
                .get(c)
                .map(|g| g.iter().filter_map(|n| atoms.get(n)).collect())
                .unwrap_or_default();
            let v = if generals.is_empty() {
                own.clone()
            } else {
                let share = LABEL_GENERAL / generals.len() as f64;
                let mut v: Vec<f64> = own.iter().map(|x| LABEL_OWN * x).collect();
                for g in generals {
                    v.iter_mut().zip(g).for_each(|(x, y)| *x += share * y);
                }
                normalize(&mut v);
                v
            };
            embeddings.insert(c.clone(), v);
        }
        Self {
            version: 1,
            seed,
            width,
            atoms,
            embeddings,
        }
    }

    /// Basis over every concept of `library` and `table`.
    pub fn from_vocabulary(library: &ObjectLibrary, table: &KeywordTable, width: usize, seed: u64) -> Self {
        let mut concepts = library.concept_names();
        let mut seen: BTreeSet<String> = concepts.iter().cloned().collect();
        for k in &table.keywords {
            if seen.insert(k.concept.clone()) {
                concepts.push(k.concept.clone());
            }
        }
        let mut general_of: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for o in &library.objects {
            let e = general_of.entry(o.label.clone()).or_default();
            for g in &o.general {
                if !e.contains(g) {
                    e.push(g.clone());
                }
            }
        }
        Self::new(&concepts, &general_of, width, seed)
    }

    pub fn embedding(&self, concept: &str) -> Option<&[f64]> {
        self.embeddings.get(concept).map(Vec::as_slice)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub width: usize,
    pub basis_seed: u64,
    /// Per-component standard deviation of the Gaussian noise added to box features.
    pub sigma_align: f64,
    pub temperature: f64,
    /// Map unknown keywords to the closest vocabulary entry instead of failing.
    pub nearest_fallback: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            width: 512,
            basis_seed: 7,
            sigma_align: 0.3,
            temperature: DEFAULT_TEMPERATURE,
            nearest_fallback: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AlignedEncoder {
    pub basis: ConceptBasis,
    pub table: KeywordTable,
    pub config: EncoderConfig,
}

impl AlignedEncoder {
    pub fn new(library: &ObjectLibrary, table: &KeywordTable, config: EncoderConfig) -> Self {
        Self {
            basis: ConceptBasis::from_vocabulary(library, table, config.width, config.basis_seed),
            table: table.clone(),
            config,
        }
    }

    pub fn width(&self) -> usize {
        self.config.width
    }

    /// Concept a keyword refers to, with the optional closest-spelling fallback.
    pub fn resolve_keyword(&self, keyword: &str) -> Result<String> {
        if let Some(e) = self.table.get(keyword) {
            return Ok(e.concept.clone());
        }
        if self.basis.embeddings.contains_key(keyword) {
            return Ok(keyword.to_string());
        }
        if !self.config.nearest_fallback {
            return Err(Error::UnknownKeyword(keyword.to_string()));
        }
        self.table
            .keywords
            .iter()
            .map(|k| (strsim::normalized_levenshtein(keyword, &k.keyword), k))
            .max_by(|a, b| a.0.total_cmp(&b.0))
            .map(|(_, k)| k.concept.clone())
            .ok_or_else(|| Error::UnknownKeyword(keyword.to_string()))
    }

    /// Keyword concept plus a small template-dependent perturbation, unit norm.
    pub fn encode_text(&self, instruction: &Instruction) -> Result<Vec<f64>> {
        let concept = self.resolve_keyword(&instruction.keyword)?;
        let base = self
            .basis
            .embedding(&concept)
            .ok_or_else(|| Error::UnknownKeyword(instruction.keyword.clone()))?;
        let mut rng = child_rng(self.basis.seed, "template", fnv1a(instruction.template.as_bytes()));
        let t = gaussian_unit(&mut rng, self.width());
        let mut v: Vec<f64> = base.iter().zip(&t).map(|(b, p)| b + TEMPLATE_PERTURBATION * p).collect();
        normalize(&mut v);
        Ok(v)
    }

    /// Attribute-weighted concept mixture plus `N(0, σ²)` noise per component, unit norm.
    pub fn encode_descriptor<R: Rng + ?Sized>(
        &self,
        descriptor: &BTreeMap<String, f64>,
        sigma: f64,
        rng: &mut R,
    ) -> Vec<f64> {
        let mut v = vec![0.0; self.width()];
        for (concept, w) in descriptor {
            if let Some(e) = self.basis.embedding(concept) {
                v.iter_mut().zip(e).for_each(|(x, y)| *x += w * y);
            }
        }
        // draw even at σ = 0 so streams line up across noise levels
        for x in v.iter_mut() {
            let n: f64 = rng.sample(StandardNormal);
            *x += sigma * n;
        }
        normalize(&mut v);
        v
    }

    /// Box feature with noise keyed by the observation's noise seed and the box
    /// itself, so it does not depend on box order.
    pub fn encode_box(&self, bx: &ObjectBox, noise_seed: u64, sigma: f64) -> Vec<f64> {
        let key = ((bx.source as u64) << 32) ^ ((bx.rect.min_col as u64) << 16) ^ bx.rect.min_row as u64;
        let mut rng = child_rng(noise_seed, "box-noise", key);
        self.encode_descriptor(&bx.descriptor, sigma, &mut rng)
    }

    /// `N × width` box features at the configured σ.
    pub fn encode_boxes(&self, boxes: &[ObjectBox], noise_seed: u64) -> Tensor {
        let w = self.width();
        let data = boxes
            .iter()
            .flat_map(|b| self.encode_box(b, noise_seed, self.config.sigma_align))
            .collect();
        Tensor::from_vec(boxes.len(), w, data).expect("sized by construction")
    }
}

/// Row `i` is `box_feats_i ⊙ lang`.
pub fn fuse_visual_language(box_feats: &Tensor, lang: &[f64]) -> Result<Tensor> {
    if box_feats.cols() != lang.len() {
        return shape_err(
            "fuse_visual_language",
            format!("box width {} vs language width {}", box_feats.cols(), lang.len()),
        );
    }
    let mut out = box_feats.clone();
    for r in 0..out.rows() {
        out.row_mut(r).iter_mut().zip(lang).for_each(|(x, l)| *x *= l);
    }
    Ok(out)
}

/// Stacked positional encodings of box centres.
pub fn center_encodings(centers: &[[f64; 3]], bands: usize) -> Tensor {
    let data = centers.iter().flat_map(|c| positional_encoding(*c, bands)).collect();
    Tensor::from_vec(centers.len(), 6 * bands, data).expect("sized by construction")
}

/// Position embedding of each box centre through the position MLP.
pub fn position_features(g: &mut Graph<'_, f64>, centers: &[[f64; 3]], pos_mlp: &Mlp, bands: usize) -> Result<Var> {
    let pe = g.constant(center_encodings(centers, bands));
    pos_mlp.forward(g, pe)
}

/// `key_i = box_feat_i + pos_mlp(PE(center_i))`.
pub fn fuse_visual_position(
    g: &mut Graph<'_, f64>,
    box_feats: Var,
    centers: &[[f64; 3]],
    pos_mlp: &Mlp,
    bands: usize,
) -> Result<Var> {
    let pos = position_features(g, centers, pos_mlp, bands)?;
    g.add(box_feats, pos)
}

/// Softmax over cosine similarity divided by `temperature`.
pub fn ground_probabilities(box_feats: &Tensor, lang: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if box_feats.rows() == 0 {
        return Err(Error::NoBoxes);
    }
    let logits: Vec<f64> = (0..box_feats.rows())
        .map(|r| cosine(box_feats.row(r), lang) / temperature)
        .collect();
    softmax(&logits)
}
