use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::library::{KeywordEntry, KeywordKind, KeywordTable, ObjectSpec};

/// Sampling probabilities of (label, general label, shape-or-colour, function).
pub const KIND_PROBABILITIES: [f64; 4] = [0.4, 0.2, 0.2, 0.2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateSet {
    Training,
    Unseen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instruction {
    pub template_set: TemplateSet,
    pub template_id: usize,
    pub template: String,
    pub keyword: String,
    pub kind: KeywordKind,
    /// Concept the keyword refers to.
    pub concept: String,
}

impl Instruction {
    pub fn new(template_set: TemplateSet, template_id: usize, template: &str, entry: &KeywordEntry) -> Self {
        Self {
            template_set,
            template_id,
            template: template.to_string(),
            keyword: entry.keyword.clone(),
            kind: entry.kind,
            concept: entry.concept.clone(),
        }
    }

    pub fn text(&self) -> String {
        self.template.replace("{keyword}", &self.keyword)
    }
}

fn sample_kind<R: Rng + ?Sized>(rng: &mut R) -> KeywordKind {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (kind, p) in KeywordKind::ALL.iter().zip(KIND_PROBABILITIES) {
        acc += p;
        if u < acc {
            return *kind;
        }
    }
    KeywordKind::Function
}

/// Samples a template uniformly from `set`, a keyword kind with
/// [`KIND_PROBABILITIES`] and a keyword uniformly within the kind. With a
/// `pool`, only keywords matching some pool object are eligible; kinds with no
/// eligible keyword are redrawn.
pub fn sample_instruction<R: Rng + ?Sized>(
    rng: &mut R,
    table: &KeywordTable,
    set: TemplateSet,
    pool: Option<&[&ObjectSpec]>,
) -> Result<Instruction> {
    let templates = match set {
        TemplateSet::Training => &table.templates,
        TemplateSet::Unseen => &table.unseen_templates,
    };
    if templates.is_empty() {
        return Err(Error::Config(format!("no {set:?} templates")));
    }
    let template_id = rng.random_range(0..templates.len());
    let eligible = |k: &&KeywordEntry| pool.is_none_or(|p| p.iter().any(|o| o.has_concept(&k.concept)));
    if !table.keywords.iter().any(|k| eligible(&k)) {
        return Err(Error::Config("no keyword matches the object pool".into()));
    }
    loop {
        let kind = sample_kind(rng);
        let cands: Vec<&KeywordEntry> = table.of_kind(kind).into_iter().filter(eligible).collect();
        if let Some(entry) = cands.choose(rng) {
            return Ok(Instruction::new(set, template_id, &templates[template_id], entry));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    #[test]
    fn kind_frequencies_match() {
        let table = KeywordTable::builtin();
        let mut rng = rng_from(11);
        let mut counts = [0usize; 4];
        let n = 10_000;
        for _ in 0..n {
            let ins = sample_instruction(&mut rng, &table, TemplateSet::Training, None).unwrap();
            let i = KeywordKind::ALL.iter().position(|k| *k == ins.kind).unwrap();
            counts[i] += 1;
            assert!(table.templates.contains(&ins.template));
            assert_eq!(ins.text(), ins.template.replace("{keyword}", &ins.keyword));
            assert_eq!(table.get(&ins.keyword).unwrap().kind, ins.kind);
        }
        for (c, p) in counts.iter().zip(KIND_PROBABILITIES) {
            assert!((*c as f64 / n as f64 - p).abs() < 0.02, "{counts:?}");
        }
    }

    #[test]
    fn seeded_sampling_is_reproducible() {
        let table = KeywordTable::builtin();
        let a = sample_instruction(&mut rng_from(5), &table, TemplateSet::Training, None).unwrap();
        let b = sample_instruction(&mut rng_from(5), &table, TemplateSet::Training, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rendered_text() {
        let table = KeywordTable::builtin();
        let ins = Instruction::new(TemplateSet::Training, 0, &table.templates[0], table.get("banana").unwrap());
        assert_eq!(ins.text(), "Give me the banana");
    }
}
