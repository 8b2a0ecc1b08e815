//! Object models and the instruction keyword vocabulary.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const DEFAULT_OBJECTS: &str = include_str!("../../data/objects.json");
const DEFAULT_KEYWORDS: &str = include_str!("../../data/keywords.json");

/// Top-down footprint in metres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Footprint {
    Circle { diameter: f64 },
    Square { side: f64 },
    /// Long axis along the instance yaw.
    Elongated { length: f64, width: f64 },
}

impl Footprint {
    /// Radius of the smallest enclosing circle.
    pub fn bounding_radius(&self) -> f64 {
        match *self {
            Footprint::Circle { diameter } => diameter / 2.0,
            Footprint::Square { side } => side * std::f64::consts::FRAC_1_SQRT_2,
            Footprint::Elongated { length, width } => 0.5 * (length * length + width * width).sqrt(),
        }
    }

    /// Whether the local-frame point `(u, v)` lies inside.
    pub fn contains_local(&self, u: f64, v: f64) -> bool {
        match *self {
            Footprint::Circle { diameter } => u * u + v * v <= diameter * diameter / 4.0,
            Footprint::Square { side } => u.abs() <= side / 2.0 && v.abs() <= side / 2.0,
            Footprint::Elongated { length, width } => u.abs() <= length / 2.0 && v.abs() <= width / 2.0,
        }
    }

    /// Extent of the footprint along a closing direction `rel` radians from the object's local x-axis.
    pub fn extent_along(&self, rel: f64) -> f64 {
        let (c, s) = (rel.cos().abs(), rel.sin().abs());
        match *self {
            Footprint::Circle { diameter } => diameter,
            Footprint::Square { side } => side * (c + s),
            Footprint::Elongated { length, width } => length * c + width * s,
        }
    }

    /// Closing direction (object frame) giving the narrowest extent.
    pub fn narrow_direction(&self) -> f64 {
        match self {
            Footprint::Elongated { .. } => std::f64::consts::FRAC_PI_2,
            _ => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Unseen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub id: String,
    pub label: String,
    pub general: Vec<String>,
    pub functions: Vec<String>,
    pub color: String,
    pub shape: String,
    pub footprint: Footprint,
    pub height: f64,
    pub split: Split,
}

impl ObjectSpec {
    /// Every concept the object exhibits.
    pub fn concepts(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.label.as_str())
            .chain(self.general.iter().map(String::as_str))
            .chain(self.functions.iter().map(String::as_str))
            .chain([self.color.as_str(), self.shape.as_str()])
    }

    pub fn has_concept(&self, concept: &str) -> bool {
        self.concepts().any(|c| c == concept)
    }

    /// Visual attribute mixture of the object on its own: label 0.5, colour 0.2,
    /// shape 0.15, functions 0.15 shared (folded into the label when absent).
    pub fn attributes(&self) -> Vec<(String, f64)> {
        let fn_mass = if self.functions.is_empty() { 0.0 } else { 0.15 };
        let mut out = vec![
            (self.label.clone(), 0.65 - fn_mass),
            (self.color.clone(), 0.2),
            (self.shape.clone(), 0.15),
        ];
        for f in &self.functions {
            out.push((f.clone(), fn_mass / self.functions.len() as f64));
        }
        out
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObjectLibrary {
    pub version: u32,
    pub objects: Vec<ObjectSpec>,
}

impl ObjectLibrary {
    pub fn builtin() -> Self {
        serde_json::from_str(DEFAULT_OBJECTS).expect("embedded object library parses")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let lib: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if lib.objects.is_empty() {
            return Err(Error::Config(format!("object library {} is empty", path.display())));
        }
        Ok(lib)
    }

    pub fn split(&self, split: Split) -> Vec<&ObjectSpec> {
        self.objects.iter().filter(|o| o.split == split).collect()
    }

    pub fn get(&self, id: &str) -> Option<&ObjectSpec> {
        self.objects.iter().find(|o| o.id == id)
    }

    /// Distinct concept names, labels first, in first-appearance order.
    pub fn concept_names(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        let mut push = |c: &str| {
            if seen.insert(c.to_string()) {
                out.push(c.to_string());
            }
        };
        for o in &self.objects {
            push(&o.label);
        }
        for o in &self.objects {
            for c in o.concepts() {
                push(c);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeywordKind {
    Label,
    GeneralLabel,
    ShapeOrColor,
    Function,
}

impl KeywordKind {
    pub const ALL: [KeywordKind; 4] = [
        KeywordKind::Label,
        KeywordKind::GeneralLabel,
        KeywordKind::ShapeOrColor,
        KeywordKind::Function,
    ];

    /// Kinds whose episodes place two targets.
    pub fn two_targets(self) -> bool {
        matches!(self, KeywordKind::GeneralLabel | KeywordKind::Function)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeywordEntry {
    pub keyword: String,
    pub kind: KeywordKind,
    pub concept: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KeywordTable {
    pub version: u32,
    pub templates: Vec<String>,
    pub unseen_templates: Vec<String>,
    pub keywords: Vec<KeywordEntry>,
}

impl KeywordTable {
    pub fn builtin() -> Self {
        serde_json::from_str(DEFAULT_KEYWORDS).expect("embedded keyword table parses")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let t: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Ok(t)
    }

    pub fn of_kind(&self, kind: KeywordKind) -> Vec<&KeywordEntry> {
        self.keywords.iter().filter(|k| k.kind == kind).collect()
    }

    pub fn get(&self, keyword: &str) -> Option<&KeywordEntry> {
        self.keywords.iter().find(|k| k.keyword == keyword)
    }

    /// Checks that every kind is populated, every template has a slot and every
    /// keyword matches at least one object of `library`.
    pub fn validate(&self, library: &ObjectLibrary) -> Result<()> {
        for kind in KeywordKind::ALL {
            if self.of_kind(kind).is_empty() {
                return Err(Error::Config(format!("keyword table has no {kind:?} keywords")));
            }
        }
        if self.templates.is_empty() {
            return Err(Error::Config("keyword table has no templates".into()));
        }
        if let Some(t) = self
            .templates
            .iter()
            .chain(&self.unseen_templates)
            .find(|t| !t.contains("{keyword}"))
        {
            return Err(Error::Config(format!("template `{t}` lacks a {{keyword}} slot")));
        }
        for k in &self.keywords {
            if !library.objects.iter().any(|o| o.has_concept(&k.concept)) {
                return Err(Error::Config(format!("keyword `{}` matches no object", k.keyword)));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_data_is_consistent() {
        let lib = ObjectLibrary::builtin();
        let table = KeywordTable::builtin();
        table.validate(&lib).unwrap();
        assert!(lib.split(Split::Train).len() >= 66);
        assert!(!lib.split(Split::Unseen).is_empty());
        assert_eq!(table.keywords.len(), 36);
        assert_eq!(table.templates.len(), 5);
        let train_ids: BTreeSet<_> = lib.split(Split::Train).iter().map(|o| o.id.clone()).collect();
        assert!(lib.split(Split::Unseen).iter().all(|o| !train_ids.contains(&o.id)));
        // every concrete label reaches at least one keyword
        for o in &lib.objects {
            assert!(table.keywords.iter().any(|k| o.has_concept(&k.concept)), "{}", o.id);
        }
    }

    #[test]
    fn attributes_sum_to_one() {
        for o in &ObjectLibrary::builtin().objects {
            let s: f64 = o.attributes().iter().map(|a| a.1).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn footprint_extents() {
        let e = Footprint::Elongated { length: 0.16, width: 0.04 };
        assert!((e.extent_along(e.narrow_direction()) - 0.04).abs() < 1e-12);
        assert!((e.extent_along(0.0) - 0.16).abs() < 1e-12);
        let s = Footprint::Square { side: 0.06 };
        assert!((s.extent_along(std::f64::consts::FRAC_PI_4) - 0.06 * 2f64.sqrt()).abs() < 1e-12);
    }
}
