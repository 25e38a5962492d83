//! Compositional label space: attribute and object vocabularies, their full
//! product, and the seen/unseen split bookkeeping every evaluation regime is
//! defined against.
//!
//! Compositions are `(attribute, object)` index pairs. Wherever a set of
//! compositions is enumerated it is in attribute-major order: `(0,0), (0,1),
//! ..., (1,0), ...`. Ties and argmaxes elsewhere in the crate rely on this
//! order being stable.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{MmptError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Composition {
    pub attr: usize,
    pub obj: usize,
}

impl Composition {
    pub fn new(attr: usize, obj: usize) -> Self {
        Composition { attr, obj }
    }
}

/// Which candidate set predictions are ranked over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputRegime {
    /// Seen compositions only.
    Supervised,
    /// Declared unseen compositions only (validation and test splits).
    Zsl,
    /// Seen plus declared unseen.
    Generalized,
    /// The full attribute x object product, including pairs never declared
    /// in any split.
    OpenWorld,
}

/// Evaluation split selector: which unseen set counts as "unseen-labeled".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSplit {
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompositionSpace {
    attributes: Vec<String>,
    objects: Vec<String>,
    seen: Vec<Composition>,
    unseen_val: Vec<Composition>,
    unseen_test: Vec<Composition>,
    /// Flat `attr * n_objects + obj` membership mask over the full product.
    seen_mask: Vec<bool>,
    splits_assigned: bool,
}

fn find_duplicate(labels: &[String]) -> Option<&String> {
    let mut seen = BTreeSet::new();
    labels.iter().find(|l| !seen.insert(l.as_str()))
}

impl CompositionSpace {
    /// Builds the full product space over two non-empty, duplicate-free
    /// vocabularies. Splits start unassigned.
    pub fn build(attributes: Vec<String>, objects: Vec<String>) -> Result<Self> {
        if attributes.is_empty() {
            return Err(MmptError::invalid("attribute vocabulary is empty"));
        }
        if objects.is_empty() {
            return Err(MmptError::invalid("object vocabulary is empty"));
        }
        if let Some(d) = find_duplicate(&attributes) {
            return Err(MmptError::invalid(format!("duplicate attribute label: {d:?}")));
        }
        if let Some(d) = find_duplicate(&objects) {
            return Err(MmptError::invalid(format!("duplicate object label: {d:?}")));
        }
        let mask = vec![false; attributes.len() * objects.len()];
        Ok(CompositionSpace {
            attributes,
            objects,
            seen: Vec::new(),
            unseen_val: Vec::new(),
            unseen_test: Vec::new(),
            seen_mask: mask,
            splits_assigned: false,
        })
    }

    pub fn n_attributes(&self) -> usize {
        self.attributes.len()
    }

    pub fn n_objects(&self) -> usize {
        self.objects.len()
    }

    /// Size of the full product space.
    pub fn n_compositions(&self) -> usize {
        self.attributes.len() * self.objects.len()
    }

    pub fn attributes(&self) -> &[String] {
        &self.attributes
    }

    pub fn objects(&self) -> &[String] {
        &self.objects
    }

    pub fn attribute_index(&self, name: &str) -> Option<usize> {
        self.attributes.iter().position(|a| a == name)
    }

    pub fn object_index(&self, name: &str) -> Option<usize> {
        self.objects.iter().position(|o| o == name)
    }

    #[inline]
    pub fn flat_index(&self, c: Composition) -> usize {
        c.attr * self.objects.len() + c.obj
    }

    pub fn contains(&self, c: Composition) -> bool {
        c.attr < self.attributes.len() && c.obj < self.objects.len()
    }

    pub fn splits_assigned(&self) -> bool {
        self.splits_assigned
    }

    pub fn seen(&self) -> &[Composition] {
        &self.seen
    }

    pub fn unseen_val(&self) -> &[Composition] {
        &self.unseen_val
    }

    pub fn unseen_test(&self) -> &[Composition] {
        &self.unseen_test
    }

    pub fn unseen(&self, split: EvalSplit) -> &[Composition] {
        match split {
            EvalSplit::Val => &self.unseen_val,
            EvalSplit::Test => &self.unseen_test,
        }
    }

    #[inline]
    pub fn is_seen(&self, c: Composition) -> bool {
        self.seen_mask[self.flat_index(c)]
    }

    pub fn seen_mask(&self) -> &[bool] {
        &self.seen_mask
    }

    /// Assigns the three split sets. They must be pairwise disjoint, inside
    /// the vocabulary, and the seen set must be non-empty.
    pub fn assign_splits(
        &mut self,
        seen: Vec<Composition>,
        unseen_val: Vec<Composition>,
        unseen_test: Vec<Composition>,
    ) -> Result<()> {
        if seen.is_empty() {
            return Err(MmptError::invalid("seen split is empty"));
        }
        for (split, pairs) in
            [("seen", &seen), ("unseen_val", &unseen_val), ("unseen_test", &unseen_test)]
        {
            for &c in pairs {
                if !self.contains(c) {
                    return Err(MmptError::invalid(format!(
                        "{split} pair ({}, {}) is outside the {}x{} vocabulary",
                        c.attr,
                        c.obj,
                        self.attributes.len(),
                        self.objects.len()
                    )));
                }
            }
            let mut dedup = BTreeSet::new();
            if let Some(&d) = pairs.iter().find(|&&c| !dedup.insert(c)) {
                return Err(MmptError::invalid(format!(
                    "{split} split repeats pair {}",
                    self.describe(d)
                )));
            }
        }
        let mut overlaps = Vec::new();
        let val_set: BTreeSet<_> = unseen_val.iter().collect();
        let test_set: BTreeSet<_> = unseen_test.iter().collect();
        for c in &seen {
            if val_set.contains(c) || test_set.contains(c) {
                overlaps.push(*c);
            }
        }
        for c in &unseen_val {
            if test_set.contains(c) {
                overlaps.push(*c);
            }
        }
        if !overlaps.is_empty() {
            let listed: Vec<String> = overlaps.iter().map(|&c| self.describe(c)).collect();
            return Err(MmptError::invalid(format!(
                "splits overlap on pairs: {}",
                listed.join(", ")
            )));
        }

        let sort_major = |mut v: Vec<Composition>| {
            v.sort();
            v
        };
        self.seen = sort_major(seen);
        self.unseen_val = sort_major(unseen_val);
        self.unseen_test = sort_major(unseen_test);
        self.seen_mask = vec![false; self.n_compositions()];
        for i in 0..self.seen.len() {
            let idx = self.flat_index(self.seen[i]);
            self.seen_mask[idx] = true;
        }
        self.splits_assigned = true;
        Ok(())
    }

    /// Draws disjoint unseen-val/unseen-test sets of the requested sizes
    /// uniformly from the grid, keeping every attribute and every object
    /// represented in the remaining seen set so all primitives stay
    /// learnable. Deterministic in `seed`.
    pub fn assign_random_splits(
        &mut self,
        n_unseen_val: usize,
        n_unseen_test: usize,
        seed: u64,
    ) -> Result<()> {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let total = self.n_compositions();
        let held_out = n_unseen_val + n_unseen_test;
        if held_out >= total {
            return Err(MmptError::invalid(format!(
                "cannot hold out {held_out} of {total} compositions"
            )));
        }
        let mut cells: Vec<Composition> = self.enumerate_all();
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        cells.shuffle(&mut rng);

        let mut row_left = vec![0usize; self.attributes.len()];
        let mut col_left = vec![0usize; self.objects.len()];
        for c in &cells {
            row_left[c.attr] += 1;
            col_left[c.obj] += 1;
        }
        let mut unseen = Vec::with_capacity(held_out);
        let mut seen = Vec::with_capacity(total - held_out);
        for c in cells {
            // Hold a cell out only while its row and column keep another
            // candidate, so the seen set covers every primitive.
            if unseen.len() < held_out && row_left[c.attr] > 1 && col_left[c.obj] > 1 {
                unseen.push(c);
                row_left[c.attr] -= 1;
                col_left[c.obj] -= 1;
            } else {
                seen.push(c);
            }
        }
        if unseen.len() < held_out {
            return Err(MmptError::invalid(format!(
                "only {} of {held_out} hold-out pairs possible with full primitive coverage",
                unseen.len()
            )));
        }
        let unseen_test = unseen.split_off(n_unseen_val);
        self.assign_splits(seen, unseen, unseen_test)
    }

    pub fn describe(&self, c: Composition) -> String {
        format!("({}, {})", self.attributes[c.attr], self.objects[c.obj])
    }

    /// Every composition in the full product, attribute-major.
    pub fn enumerate_all(&self) -> Vec<Composition> {
        let mut out = Vec::with_capacity(self.n_compositions());
        for a in 0..self.attributes.len() {
            for o in 0..self.objects.len() {
                out.push(Composition::new(a, o));
            }
        }
        out
    }

    /// Candidate compositions for a regime, attribute-major, each exactly
    /// once. Split-dependent regimes require assigned splits.
    pub fn output_space(&self, regime: OutputRegime) -> Result<Vec<Composition>> {
        if regime != OutputRegime::OpenWorld && !self.splits_assigned {
            return Err(MmptError::protocol(format!(
                "output space for {regime:?} requested before splits were assigned"
            )));
        }
        let out = match regime {
            OutputRegime::Supervised => self.seen.clone(),
            OutputRegime::Zsl => {
                let mut u: Vec<Composition> =
                    self.unseen_val.iter().chain(&self.unseen_test).copied().collect();
                u.sort();
                u
            }
            OutputRegime::Generalized => {
                let mut g: Vec<Composition> = self
                    .seen
                    .iter()
                    .chain(&self.unseen_val)
                    .chain(&self.unseen_test)
                    .copied()
                    .collect();
                g.sort();
                g
            }
            OutputRegime::OpenWorld => self.enumerate_all(),
        };
        Ok(out)
    }

    // ── Space file format ────────────────────────────────────────────────

    pub fn to_file(&self, path: &Path) -> Result<()> {
        let file = SpaceFile {
            attributes: self.attributes.clone(),
            objects: self.objects.clone(),
            seen: self.pairs_to_names(&self.seen),
            unseen_val: self.pairs_to_names(&self.unseen_val),
            unseen_test: self.pairs_to_names(&self.unseen_test),
        };
        std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)?;
        let file: SpaceFile = serde_json::from_str(&raw)?;
        let mut space = CompositionSpace::build(file.attributes, file.objects)?;
        let seen = space.pairs_from_names(&file.seen, "seen")?;
        let val = space.pairs_from_names(&file.unseen_val, "unseen_val")?;
        let test = space.pairs_from_names(&file.unseen_test, "unseen_test")?;
        if !seen.is_empty() || !val.is_empty() || !test.is_empty() {
            space.assign_splits(seen, val, test)?;
        }
        Ok(space)
    }

    fn pairs_to_names(&self, pairs: &[Composition]) -> Vec<(String, String)> {
        pairs
            .iter()
            .map(|&c| (self.attributes[c.attr].clone(), self.objects[c.obj].clone()))
            .collect()
    }

    fn pairs_from_names(
        &self,
        pairs: &[(String, String)],
        split: &str,
    ) -> Result<Vec<Composition>> {
        pairs
            .iter()
            .map(|(a, o)| {
                let attr = self.attribute_index(a).ok_or_else(|| {
                    MmptError::invalid(format!("{split} pair references unknown attribute {a:?}"))
                })?;
                let obj = self.object_index(o).ok_or_else(|| {
                    MmptError::invalid(format!("{split} pair references unknown object {o:?}"))
                })?;
                Ok(Composition::new(attr, obj))
            })
            .collect()
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpaceFile {
    attributes: Vec<String>,
    objects: Vec<String>,
    #[serde(default)]
    seen: Vec<(String, String)>,
    #[serde(default)]
    unseen_val: Vec<(String, String)>,
    #[serde(default)]
    unseen_test: Vec<(String, String)>,
}

/// Convenience constructor for synthetic vocabularies `attr0..attrN`,
/// `obj0..objM`.
pub fn numbered_space(n_attrs: usize, n_objs: usize) -> Result<CompositionSpace> {
    CompositionSpace::build(
        (0..n_attrs).map(|i| format!("attr{i}")).collect(),
        (0..n_objs).map(|i| format!("obj{i}")).collect(),
    )
}
