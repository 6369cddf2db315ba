//! Composition space: the cartesian product of attribute and object
//! vocabularies, split bookkeeping, and the JSON manifest format.
//!
//! A composition pairs one attribute with one object ("blue cube"). Ids are
//! assigned row-major: `composition = attribute * |O| + object`, which makes
//! the (attribute, object) <-> composition mapping a bijection.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type AttributeId = usize;
pub type ObjectId = usize;
pub type CompositionId = usize;

/// Immutable attribute and object vocabularies.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompositionSpace {
    attributes: Vec<String>,
    objects: Vec<String>,
}

fn check_name(kind: &str, name: &str) -> Result<()> {
    if name.is_empty() {
        return Err(Error::Validation(format!("empty {kind} name")));
    }
    if name.chars().any(|c| c.is_whitespace()) {
        return Err(Error::Validation(format!(
            "{kind} name {name:?} contains whitespace; names must be single words"
        )));
    }
    Ok(())
}

impl CompositionSpace {
    /// Builds a space from attribute and object name lists.
    ///
    /// Names must be non-empty single words and globally unique: a word that
    /// is both an attribute and an object would make prompt text ambiguous.
    pub fn new<S: AsRef<str>>(attributes: &[S], objects: &[S]) -> Result<Self> {
        if attributes.is_empty() {
            return Err(Error::Validation("attribute list is empty".into()));
        }
        if objects.is_empty() {
            return Err(Error::Validation("object list is empty".into()));
        }
        let mut seen = BTreeSet::new();
        for name in attributes.iter().map(|s| s.as_ref()) {
            check_name("attribute", name)?;
            if !seen.insert(name.to_string()) {
                return Err(Error::Validation(format!("duplicate name {name:?}")));
            }
        }
        for name in objects.iter().map(|s| s.as_ref()) {
            check_name("object", name)?;
            if !seen.insert(name.to_string()) {
                return Err(Error::Validation(format!("duplicate name {name:?}")));
            }
        }
        Ok(Self {
            attributes: attributes.iter().map(|s| s.as_ref().to_string()).collect(),
            objects: objects.iter().map(|s| s.as_ref().to_string()).collect(),
        })
    }

    /// The six-color, three-shape space used throughout the examples.
    pub fn color_shape_default() -> Self {
        Self::new(
            &["blue", "red", "green", "purple", "brown", "yellow"],
            &["cube", "sphere", "cylinder"],
        )
        .expect("default space is valid")
    }

    pub fn num_attributes(&self) -> usize {
        self.attributes.len()
    }

    pub fn num_objects(&self) -> usize {
        self.objects.len()
    }

    pub fn num_compositions(&self) -> usize {
        self.attributes.len() * self.objects.len()
    }

    pub fn attributes(&self) -> &[String] {
        &self.attributes
    }

    pub fn objects(&self) -> &[String] {
        &self.objects
    }

    /// Maps an (attribute, object) pair to its composition id.
    pub fn composition_id(&self, attribute: AttributeId, object: ObjectId) -> Result<CompositionId> {
        if attribute >= self.attributes.len() {
            return Err(Error::OutOfBounds(format!(
                "attribute id {attribute} >= |A| = {}",
                self.attributes.len()
            )));
        }
        if object >= self.objects.len() {
            return Err(Error::OutOfBounds(format!(
                "object id {object} >= |O| = {}",
                self.objects.len()
            )));
        }
        Ok(attribute * self.objects.len() + object)
    }

    /// Inverse of [`Self::composition_id`].
    pub fn decompose(&self, composition: CompositionId) -> Result<(AttributeId, ObjectId)> {
        if composition >= self.num_compositions() {
            return Err(Error::OutOfBounds(format!(
                "composition id {composition} >= |C| = {}",
                self.num_compositions()
            )));
        }
        Ok((composition / self.objects.len(), composition % self.objects.len()))
    }

    /// Human-readable name, `"<attribute> <object>"`.
    pub fn composition_name(&self, composition: CompositionId) -> Result<String> {
        let (a, o) = self.decompose(composition)?;
        Ok(format!("{} {}", self.attributes[a], self.objects[o]))
    }

    /// Parses `"<attribute> <object>"` back into a composition id.
    pub fn parse_composition(&self, name: &str) -> Result<CompositionId> {
        let mut parts = name.split_whitespace();
        let (Some(attr), Some(obj), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::Validation(format!(
                "composition name {name:?} must be exactly \"<attribute> <object>\""
            )));
        };
        let a = self.attribute_id(attr)?;
        let o = self.object_id(obj)?;
        self.composition_id(a, o)
    }

    pub fn attribute_id(&self, name: &str) -> Result<AttributeId> {
        self.attributes
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Validation(format!("unknown attribute {name:?}")))
    }

    pub fn object_id(&self, name: &str) -> Result<ObjectId> {
        self.objects
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Validation(format!("unknown object {name:?}")))
    }

    /// All composition ids in ascending order.
    pub fn all_compositions(&self) -> Vec<CompositionId> {
        (0..self.num_compositions()).collect()
    }
}

/// Which bucket a composition falls into for reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitRole {
    /// In the pretraining set `C_p`.
    Pretrain,
    /// In the increment set `C_i` added after confusion mining.
    Increment,
    /// Never trained on: `C - (C_p ∪ C_i)`.
    Unseen,
}

/// Disjoint pretrain / increment composition sets over a space.
///
/// The seen set is `C_p ∪ C_i`; everything else is unseen.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSpec {
    pretrain: BTreeSet<CompositionId>,
    increment: BTreeSet<CompositionId>,
    num_compositions: usize,
}

impl SplitSpec {
    /// Validates and builds a split.
    ///
    /// Requirements: ids in bounds, the two sets disjoint, the pretrain set
    /// non-empty, and every attribute and object covered by at least one
    /// pretrain composition (a primitive outside `C_p` would never receive a
    /// gradient).
    pub fn new(
        space: &CompositionSpace,
        pretrain: &[CompositionId],
        increment: &[CompositionId],
    ) -> Result<Self> {
        if pretrain.is_empty() {
            return Err(Error::Validation("pretrain split is empty".into()));
        }
        let mut p = BTreeSet::new();
        for &c in pretrain {
            space.decompose(c)?;
            if !p.insert(c) {
                return Err(Error::Validation(format!(
                    "duplicate pretrain composition {c}"
                )));
            }
        }
        let mut i = BTreeSet::new();
        for &c in increment {
            space.decompose(c)?;
            if p.contains(&c) {
                return Err(Error::Validation(format!(
                    "composition {c} is in both pretrain and increment sets"
                )));
            }
            if !i.insert(c) {
                return Err(Error::Validation(format!(
                    "duplicate increment composition {c}"
                )));
            }
        }
        let mut attr_covered = vec![false; space.num_attributes()];
        let mut obj_covered = vec![false; space.num_objects()];
        for &c in &p {
            let (a, o) = space.decompose(c)?;
            attr_covered[a] = true;
            obj_covered[o] = true;
        }
        if let Some(a) = attr_covered.iter().position(|&v| !v) {
            return Err(Error::Validation(format!(
                "attribute {:?} appears in no pretrain composition",
                space.attributes()[a]
            )));
        }
        if let Some(o) = obj_covered.iter().position(|&v| !v) {
            return Err(Error::Validation(format!(
                "object {:?} appears in no pretrain composition",
                space.objects()[o]
            )));
        }
        Ok(Self {
            pretrain: p,
            increment: i,
            num_compositions: space.num_compositions(),
        })
    }

    /// The six-composition pretrain split paired with
    /// [`CompositionSpace::color_shape_default`]: one cube, sphere and
    /// cylinder pair per color family, leaving twelve compositions unseen.
    pub fn color_shape_default(space: &CompositionSpace) -> Result<Self> {
        let names = [
            "red cube",
            "blue cube",
            "green sphere",
            "purple sphere",
            "brown cylinder",
            "yellow cylinder",
        ];
        let ids: Vec<CompositionId> = names
            .iter()
            .map(|n| space.parse_composition(n))
            .collect::<Result<_>>()?;
        Self::new(space, &ids, &[])
    }

    /// Returns a copy with the increment set replaced.
    pub fn with_increment(
        &self,
        space: &CompositionSpace,
        increment: &[CompositionId],
    ) -> Result<Self> {
        let pretrain: Vec<CompositionId> = self.pretrain.iter().copied().collect();
        Self::new(space, &pretrain, increment)
    }

    pub fn pretrain(&self) -> impl Iterator<Item = CompositionId> + '_ {
        self.pretrain.iter().copied()
    }

    pub fn increment(&self) -> impl Iterator<Item = CompositionId> + '_ {
        self.increment.iter().copied()
    }

    pub fn seen(&self) -> Vec<CompositionId> {
        self.pretrain.union(&self.increment).copied().collect()
    }

    pub fn unseen(&self) -> Vec<CompositionId> {
        (0..self.num_compositions)
            .filter(|c| !self.pretrain.contains(c) && !self.increment.contains(c))
            .collect()
    }

    pub fn role(&self, composition: CompositionId) -> SplitRole {
        if self.pretrain.contains(&composition) {
            SplitRole::Pretrain
        } else if self.increment.contains(&composition) {
            SplitRole::Increment
        } else {
            SplitRole::Unseen
        }
    }

    pub fn is_seen(&self, composition: CompositionId) -> bool {
        self.role(composition) != SplitRole::Unseen
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq, Default)]
struct ManifestSplits {
    #[serde(default)]
    pretrain: Vec<String>,
    #[serde(default)]
    increment: Vec<String>,
}

/// On-disk description of a space and its split, with compositions written
/// as `"<attribute> <object>"` names.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct Manifest {
    attributes: Vec<String>,
    objects: Vec<String>,
    splits: ManifestSplits,
}

impl Manifest {
    pub fn new(space: &CompositionSpace, split: &SplitSpec) -> Result<Self> {
        Ok(Self {
            attributes: space.attributes().to_vec(),
            objects: space.objects().to_vec(),
            splits: ManifestSplits {
                pretrain: split
                    .pretrain()
                    .map(|c| space.composition_name(c))
                    .collect::<Result<_>>()?,
                increment: split
                    .increment()
                    .map(|c| space.composition_name(c))
                    .collect::<Result<_>>()?,
            },
        })
    }

    /// The default color/shape manifest with the six-composition pretrain
    /// split.
    pub fn color_shape_default() -> Self {
        let space = CompositionSpace::color_shape_default();
        let split = SplitSpec::color_shape_default(&space).expect("default split is valid");
        Self::new(&space, &split).expect("default manifest is valid")
    }

    /// Validates the manifest and materializes the space and split.
    pub fn resolve(&self) -> Result<(CompositionSpace, SplitSpec)> {
        let space = CompositionSpace::new(&self.attributes, &self.objects)?;
        let pretrain: Vec<CompositionId> = self
            .splits
            .pretrain
            .iter()
            .map(|n| space.parse_composition(n))
            .collect::<Result<_>>()?;
        let increment: Vec<CompositionId> = self
            .splits
            .increment
            .iter()
            .map(|n| space.parse_composition(n))
            .collect::<Result<_>>()?;
        let split = SplitSpec::new(&space, &pretrain, &increment)?;
        Ok((space, split))
    }

    pub fn attribute_names(&self) -> &[String] {
        &self.attributes
    }

    pub fn object_names(&self) -> &[String] {
        &self.objects
    }

    pub fn pretrain_names(&self) -> &[String] {
        &self.splits.pretrain
    }

    pub fn increment_names(&self) -> &[String] {
        &self.splits.increment
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read manifest {}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}
