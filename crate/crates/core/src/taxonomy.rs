//! The label universe: thing/stuff scene classes, part classes, and the
//! scene-class → allowed-parts map, with a versioned plain-text config format.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Scene- and part-level void sentinel. Real ids start at 1.
pub const VOID: u16 = 0;

const TAXONOMY_MAGIC: &str = "pps-taxonomy";
const TAXONOMY_VERSION: u32 = 1;

/// Unvalidated taxonomy fields as parsed from a config file.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TaxonomyBuilder {
    pub thing_classes: Vec<u16>,
    pub stuff_classes: Vec<u16>,
    pub part_classes: Vec<u16>,
    pub parts_of: Vec<(u16, Vec<u16>)>,
}

/// Validated label universe. Immutable after construction; cheap to share.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Taxonomy {
    thing_classes: Vec<u16>,
    stuff_classes: Vec<u16>,
    part_classes: Vec<u16>,
    parts_of: BTreeMap<u16, BTreeSet<u16>>,
    with_parts: BTreeSet<u16>,
}

impl TaxonomyBuilder {
    pub fn validate(self) -> Result<Taxonomy> {
        let cfg = Error::Config;
        let things: BTreeSet<u16> = self.thing_classes.iter().copied().collect();
        let stuff: BTreeSet<u16> = self.stuff_classes.iter().copied().collect();
        let parts: BTreeSet<u16> = self.part_classes.iter().copied().collect();
        if things.len() != self.thing_classes.len()
            || stuff.len() != self.stuff_classes.len()
            || parts.len() != self.part_classes.len()
        {
            return Err(cfg("duplicate ids within a class list".into()));
        }
        if let Some(&c) = things.intersection(&stuff).next() {
            return Err(cfg(format!(
                "overlapping ids: class {c} is both thing and stuff"
            )));
        }
        for &c in things.iter().chain(&stuff) {
            if c == VOID {
                return Err(cfg("void id 0 cannot be a scene class".into()));
            }
        }
        if parts.contains(&VOID) {
            return Err(cfg("void id 0 cannot be a part class".into()));
        }
        if things.is_empty() && stuff.is_empty() && parts.is_empty() {
            return Err(cfg("taxonomy has no classes at all".into()));
        }
        let mut parts_of: BTreeMap<u16, BTreeSet<u16>> = BTreeMap::new();
        for (scene, plist) in &self.parts_of {
            if !things.contains(scene) && !stuff.contains(scene) {
                return Err(cfg(format!("unknown scene class {scene} in parts_of")));
            }
            let entry = parts_of.entry(*scene).or_default();
            for p in plist {
                if !parts.contains(p) {
                    return Err(cfg(format!(
                        "parts_of[{scene}] references unknown part {p}"
                    )));
                }
                entry.insert(*p);
            }
        }
        parts_of.retain(|_, v| !v.is_empty());
        let used: BTreeSet<u16> = parts_of.values().flatten().copied().collect();
        if let Some(&p) = parts.difference(&used).next() {
            return Err(cfg(format!("part id {p} is never used by any scene class")));
        }
        let with_parts = parts_of.keys().copied().collect();
        Ok(Taxonomy {
            thing_classes: self.thing_classes,
            stuff_classes: self.stuff_classes,
            part_classes: self.part_classes,
            parts_of,
            with_parts,
        })
    }
}

impl Taxonomy {
    pub fn thing_classes(&self) -> &[u16] {
        &self.thing_classes
    }

    pub fn stuff_classes(&self) -> &[u16] {
        &self.stuff_classes
    }

    pub fn part_classes(&self) -> &[u16] {
        &self.part_classes
    }

    pub fn n_things(&self) -> usize {
        self.thing_classes.len()
    }

    pub fn n_stuff(&self) -> usize {
        self.stuff_classes.len()
    }

    pub fn n_parts(&self) -> usize {
        self.part_classes.len()
    }

    pub fn is_thing(&self, c: u16) -> bool {
        self.thing_classes.contains(&c)
    }

    pub fn is_stuff(&self, c: u16) -> bool {
        self.stuff_classes.contains(&c)
    }

    pub fn is_scene_class(&self, c: u16) -> bool {
        self.is_thing(c) || self.is_stuff(c)
    }

    /// Scene classes with a nonempty allowed-part set.
    pub fn has_parts(&self, c: u16) -> bool {
        self.with_parts.contains(&c)
    }

    pub fn classes_with_parts(&self) -> &BTreeSet<u16> {
        &self.with_parts
    }

    /// Allowed parts for a scene class (empty set if it has none).
    pub fn parts_of(&self, c: u16) -> BTreeSet<u16> {
        self.parts_of.get(&c).cloned().unwrap_or_default()
    }

    pub fn part_allowed(&self, scene: u16, part: u16) -> bool {
        self.parts_of
            .get(&scene)
            .map(|s| s.contains(&part))
            .unwrap_or(false)
    }

    /// Index of a thing class id within the ordered list.
    pub fn thing_index(&self, c: u16) -> Option<usize> {
        self.thing_classes.iter().position(|&x| x == c)
    }

    pub fn stuff_index(&self, c: u16) -> Option<usize> {
        self.stuff_classes.iter().position(|&x| x == c)
    }

    pub fn part_index(&self, p: u16) -> Option<usize> {
        self.part_classes.iter().position(|&x| x == p)
    }

    /// All scene class ids, things first then stuff.
    pub fn scene_classes(&self) -> impl Iterator<Item = u16> + '_ {
        self.thing_classes
            .iter()
            .chain(self.stuff_classes.iter())
            .copied()
    }

    /// Re-running validation on an already-validated taxonomy is the identity.
    pub fn to_builder(&self) -> TaxonomyBuilder {
        TaxonomyBuilder {
            thing_classes: self.thing_classes.clone(),
            stuff_classes: self.stuff_classes.clone(),
            part_classes: self.part_classes.clone(),
            parts_of: self
                .parts_of
                .iter()
                .map(|(k, v)| (*k, v.iter().copied().collect()))
                .collect(),
        }
    }

    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{TAXONOMY_MAGIC} v{TAXONOMY_VERSION}");
        let join = |ids: &[u16]| {
            ids.iter()
                .map(|i| i.to_string())
                .collect::<Vec<_>>()
                .join(" ")
        };
        let _ = writeln!(s, "things {}", join(&self.thing_classes));
        let _ = writeln!(s, "stuff {}", join(&self.stuff_classes));
        let _ = writeln!(s, "parts {}", join(&self.part_classes));
        for (scene, parts) in &self.parts_of {
            let ids: Vec<u16> = parts.iter().copied().collect();
            let _ = writeln!(s, "parts_of {scene} : {}", join(&ids));
        }
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_config_string())?;
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Taxonomy> {
        let mut builder = TaxonomyBuilder::default();
        let mut lines = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'));
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("empty taxonomy file".into()))?;
        let expected = format!("{TAXONOMY_MAGIC} v{TAXONOMY_VERSION}");
        if header != expected {
            return Err(Error::Format(format!(
                "bad taxonomy header {header:?}, expected {expected:?}"
            )));
        }
        let parse_ids = |toks: &[&str]| -> Result<Vec<u16>> {
            toks.iter()
                .map(|t| {
                    t.parse::<u16>()
                        .map_err(|_| Error::Format(format!("bad id {t:?} in taxonomy")))
                })
                .collect()
        };
        for line in lines {
            let toks: Vec<&str> = line.split_whitespace().collect();
            match toks[0] {
                "things" => builder.thing_classes = parse_ids(&toks[1..])?,
                "stuff" => builder.stuff_classes = parse_ids(&toks[1..])?,
                "parts" => builder.part_classes = parse_ids(&toks[1..])?,
                "parts_of" => {
                    if toks.len() < 4 || toks[2] != ":" {
                        return Err(Error::Format(format!(
                            "malformed parts_of line {line:?} (expected `parts_of <class> : <ids>`)"
                        )));
                    }
                    let scene = parse_ids(&toks[1..2])?[0];
                    builder.parts_of.push((scene, parse_ids(&toks[3..])?));
                }
                other => {
                    return Err(Error::Format(format!("unknown taxonomy key {other:?}")));
                }
            }
        }
        builder.validate()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Taxonomy> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| {
            Error::Config(format!(
                "cannot read taxonomy {}: {e}",
                path.as_ref().display()
            ))
        })?;
        Self::parse(&text)
    }
}

/// The two-thing / two-stuff / five-part desk taxonomy used by the default
/// generator templates (vehicle: body+wheel, person: head+torso+legs).
pub fn desk_taxonomy() -> Taxonomy {
    TaxonomyBuilder {
        thing_classes: vec![1, 2],
        stuff_classes: vec![3, 4],
        part_classes: vec![10, 11, 12, 13, 14],
        parts_of: vec![(1, vec![10, 11]), (2, vec![12, 13, 14])],
    }
    .validate()
    .expect("desk taxonomy is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_taxonomy_partitions_classes() {
        let tax = TaxonomyBuilder {
            thing_classes: vec![1, 2],
            stuff_classes: vec![3],
            part_classes: vec![10, 11],
            parts_of: vec![(1, vec![10, 11])],
        }
        .validate()
        .unwrap();
        assert!(tax.has_parts(1));
        assert!(!tax.has_parts(2));
        assert!(!tax.has_parts(3));
        assert_eq!(tax.classes_with_parts().len(), 1);
        assert!(tax.part_allowed(1, 10));
        assert!(!tax.part_allowed(2, 10));
    }

    #[test]
    fn overlapping_ids_rejected() {
        let err = TaxonomyBuilder {
            thing_classes: vec![1],
            stuff_classes: vec![1],
            part_classes: vec![],
            parts_of: vec![],
        }
        .validate()
        .unwrap_err();
        assert!(err.to_string().contains("overlapping ids"));
    }

    #[test]
    fn unknown_scene_class_rejected() {
        let err = TaxonomyBuilder {
            thing_classes: vec![1],
            stuff_classes: vec![2],
            part_classes: vec![10],
            parts_of: vec![(5, vec![10])],
        }
        .validate()
        .unwrap_err();
        assert!(err.to_string().contains("unknown scene class"));
    }

    #[test]
    fn unused_part_rejected() {
        let err = TaxonomyBuilder {
            thing_classes: vec![1],
            stuff_classes: vec![],
            part_classes: vec![10, 11],
            parts_of: vec![(1, vec![10])],
        }
        .validate()
        .unwrap_err();
        assert!(err.to_string().contains("never used"));
    }

    #[test]
    fn validation_is_idempotent() {
        let tax = desk_taxonomy();
        let again = tax.to_builder().validate().unwrap();
        assert_eq!(tax, again);
    }

    #[test]
    fn config_round_trip() {
        let tax = desk_taxonomy();
        let text = tax.to_config_string();
        let parsed = Taxonomy::parse(&text).unwrap();
        assert_eq!(tax, parsed);
    }

    #[test]
    fn bad_header_rejected() {
        assert!(Taxonomy::parse("nonsense v1\nthings 1").is_err());
    }
}
