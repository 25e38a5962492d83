//! Synthetic compositional datasets: deterministic generation from a
//! [`RenderSpec`] plus a split [`CompositionSpace`], and a flat on-disk
//! format (JSON manifest + raw little-endian f32 pixels + CSV labels).

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{MmptError, Result};
use crate::render::{render, RenderSpec, CHANNELS};
use crate::space::{Composition, CompositionSpace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

impl SplitTag {
    pub fn name(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Val => "val",
            SplitTag::Test => "test",
        }
    }

    fn salt(self) -> u64 {
        match self {
            SplitTag::Train => 0x7261696e,
            SplitTag::Val => 0x76616c5f,
            SplitTag::Test => 0x74657374,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub sample_id: String,
    pub pixels: Vec<f32>,
    pub label: Composition,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub split: SplitTag,
    pub height: usize,
    pub width: usize,
    pub samples: Vec<ImageSample>,
    /// Content hash of the render spec the samples were drawn from.
    pub spec_hash: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn pixels_per_sample(&self) -> usize {
        self.height * self.width * CHANNELS
    }

    /// Hash over every pixel and label, used to prove different runs saw
    /// identical data.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for s in &self.samples {
            hasher.update(s.sample_id.as_bytes());
            hasher.update((s.label.attr as u64).to_le_bytes());
            hasher.update((s.label.obj as u64).to_le_bytes());
            for &p in &s.pixels {
                hasher.update(p.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }
}

/// The three datasets one generation pass produces.
#[derive(Debug, Clone)]
pub struct SplitDatasets {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn sample_seed(dataset_seed: u64, split: SplitTag, c: Composition, k: usize) -> u64 {
    let pair_key = ((c.attr as u64) << 40) | ((c.obj as u64) << 20) | k as u64;
    mix64(mix64(dataset_seed ^ split.salt()) ^ mix64(pair_key))
}

fn generate_split(
    spec: &RenderSpec,
    split: SplitTag,
    pairs: &[Composition],
    per_pair: usize,
    seed: u64,
) -> Result<Dataset> {
    let jobs: Vec<(Composition, usize)> =
        pairs.iter().flat_map(|&c| (0..per_pair).map(move |k| (c, k))).collect();
    let samples: Vec<ImageSample> = jobs
        .par_iter()
        .map(|&(c, k)| {
            let pixels = render(spec, c.attr, c.obj, sample_seed(seed, split, c, k))?;
            Ok(ImageSample {
                sample_id: format!("{}-{:03}-{:03}-{:04}", split.name(), c.attr, c.obj, k),
                pixels,
                label: c,
            })
        })
        .collect::<Result<_>>()?;
    debug_assert!(samples.windows(2).all(|w| w[0].sample_id < w[1].sample_id));
    Ok(Dataset {
        split,
        height: spec.height,
        width: spec.width,
        samples,
        spec_hash: spec.content_hash(),
    })
}

/// Renders train/val/test datasets for a split space.
///
/// Train draws `n_per_seen_train` samples per seen pair; val and test draw
/// `n_per_pair_eval` per pair over seen plus the respective unseen split.
/// Output order is sample_id order (attribute-major pairs, then index), so
/// generation is schedule-independent.
pub fn make_dataset(
    space: &CompositionSpace,
    spec: &RenderSpec,
    n_per_seen_train: usize,
    n_per_pair_eval: usize,
    seed: u64,
) -> Result<SplitDatasets> {
    if !space.splits_assigned() || space.seen().is_empty() {
        return Err(MmptError::invalid("dataset generation requires a non-empty seen split"));
    }
    spec.validate()?;
    if spec.attributes.len() != space.n_attributes() || spec.objects.len() != space.n_objects() {
        return Err(MmptError::invalid(format!(
            "render spec covers {}x{} labels but the space is {}x{}",
            spec.attributes.len(),
            spec.objects.len(),
            space.n_attributes(),
            space.n_objects()
        )));
    }

    let eval_pairs = |unseen: &[Composition]| {
        let mut p: Vec<Composition> = space.seen().iter().chain(unseen).copied().collect();
        p.sort();
        p
    };
    let train = generate_split(spec, SplitTag::Train, space.seen(), n_per_seen_train, seed)?;
    let val =
        generate_split(spec, SplitTag::Val, &eval_pairs(space.unseen_val()), n_per_pair_eval, seed)?;
    let test = generate_split(
        spec,
        SplitTag::Test,
        &eval_pairs(space.unseen_test()),
        n_per_pair_eval,
        seed,
    )?;
    Ok(SplitDatasets { train, val, test })
}

/// Default desk-scale space: 8 attributes x 10 objects with 56 seen, 12
/// unseen-val, and 12 unseen-test pairs. The seen split always covers every
/// attribute and every object so unseen generalization is well-posed.
pub fn default_desk_space(seed: u64) -> CompositionSpace {
    let mut space = crate::space::numbered_space(8, 10).expect("static vocabulary");
    let mut pairs = space.enumerate_all();
    let mut rng = ChaCha12Rng::seed_from_u64(mix64(seed ^ 0x6465736b));
    pairs.shuffle(&mut rng);

    let mut seen = Vec::new();
    let mut rest = Vec::new();
    let mut attr_covered = vec![false; space.n_attributes()];
    let mut obj_covered = vec![false; space.n_objects()];
    for c in pairs {
        if !attr_covered[c.attr] || !obj_covered[c.obj] {
            attr_covered[c.attr] = true;
            obj_covered[c.obj] = true;
            seen.push(c);
        } else {
            rest.push(c);
        }
    }
    while seen.len() < 56 {
        seen.push(rest.remove(0));
    }
    let unseen_val = rest[..12].to_vec();
    let unseen_test = rest[12..24].to_vec();
    space.assign_splits(seen, unseen_val, unseen_test).expect("construction is disjoint");
    space
}

// ── On-disk format ──────────────────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetManifest {
    format_version: u32,
    split: SplitTag,
    count: usize,
    height: usize,
    width: usize,
    channels: usize,
    spec_hash: String,
    space_file: String,
    samples_file: String,
    labels_file: String,
}

const FORMAT_VERSION: u32 = 1;

/// Writes `manifest.json`, `samples.f32`, `labels.csv`, and `space.json`
/// into `dir`.
pub fn export_dataset(dataset: &Dataset, space: &CompositionSpace, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        split: dataset.split,
        count: dataset.len(),
        height: dataset.height,
        width: dataset.width,
        channels: CHANNELS,
        spec_hash: dataset.spec_hash.clone(),
        space_file: "space.json".into(),
        samples_file: "samples.f32".into(),
        labels_file: "labels.csv".into(),
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    space.to_file(&dir.join("space.json"))?;

    let mut raw = std::fs::File::create(dir.join("samples.f32"))?;
    let mut buf = Vec::with_capacity(dataset.pixels_per_sample() * 4);
    for s in &dataset.samples {
        buf.clear();
        for &p in &s.pixels {
            buf.extend_from_slice(&p.to_le_bytes());
        }
        raw.write_all(&buf)?;
    }

    let mut labels = csv::Writer::from_path(dir.join("labels.csv"))?;
    labels.write_record(["sample_id", "attribute", "object"])?;
    for s in &dataset.samples {
        labels.write_record([
            s.sample_id.as_str(),
            &space.attributes()[s.label.attr],
            &space.objects()[s.label.obj],
        ])?;
    }
    labels.flush()?;
    Ok(())
}

/// Reads a dataset directory back, validating counts and payload size.
pub fn import_dataset(dir: &Path) -> Result<(Dataset, CompositionSpace)> {
    let manifest: DatasetManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(MmptError::corrupt(format!(
            "unsupported dataset format_version {}",
            manifest.format_version
        )));
    }
    if manifest.channels != CHANNELS {
        return Err(MmptError::corrupt(format!(
            "field channels: expected {CHANNELS}, found {}",
            manifest.channels
        )));
    }
    let space = CompositionSpace::from_file(&dir.join(&manifest.space_file))?;

    let mut labels = Vec::new();
    let mut reader = csv::Reader::from_path(dir.join(&manifest.labels_file))?;
    for row in reader.records() {
        let row = row?;
        if row.len() != 3 {
            return Err(MmptError::corrupt(format!(
                "labels row has {} fields, expected 3",
                row.len()
            )));
        }
        let attr = space.attribute_index(&row[1]).ok_or_else(|| {
            MmptError::corrupt(format!("labels reference unknown attribute {:?}", &row[1]))
        })?;
        let obj = space.object_index(&row[2]).ok_or_else(|| {
            MmptError::corrupt(format!("labels reference unknown object {:?}", &row[2]))
        })?;
        labels.push((row[0].to_string(), Composition::new(attr, obj)));
    }
    if labels.len() != manifest.count {
        return Err(MmptError::corrupt(format!(
            "field count: manifest says {}, labels.csv has {}",
            manifest.count,
            labels.len()
        )));
    }

    let raw = std::fs::read(dir.join(&manifest.samples_file))?;
    let per_sample = manifest.height * manifest.width * CHANNELS;
    let expected_bytes = manifest.count * per_sample * 4;
    if raw.len() != expected_bytes {
        return Err(MmptError::corrupt(format!(
            "samples.f32 is {} bytes, expected {} ({} samples x {} floats)",
            raw.len(),
            expected_bytes,
            manifest.count,
            per_sample
        )));
    }

    let samples = labels
        .into_iter()
        .enumerate()
        .map(|(i, (sample_id, label))| {
            let start = i * per_sample * 4;
            let pixels = raw[start..start + per_sample * 4]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4-byte chunk")))
                .collect();
            ImageSample { sample_id, pixels, label }
        })
        .collect();

    Ok((
        Dataset {
            split: manifest.split,
            height: manifest.height,
            width: manifest.width,
            samples,
            spec_hash: manifest.spec_hash,
        },
        space,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::default_render_spec;
    use std::collections::BTreeSet;

    fn desk() -> (CompositionSpace, RenderSpec) {
        let space = default_desk_space(9);
        let spec = default_render_spec(space.n_attributes(), space.n_objects(), 32, 32);
        (space, spec)
    }

    #[test]
    fn desk_space_has_expected_split_sizes_and_coverage() {
        let space = default_desk_space(1);
        assert_eq!(space.n_compositions(), 80);
        assert_eq!(space.seen().len(), 56);
        assert_eq!(space.unseen_val().len(), 12);
        assert_eq!(space.unseen_test().len(), 12);
        let seen_attrs: BTreeSet<_> = space.seen().iter().map(|c| c.attr).collect();
        let seen_objs: BTreeSet<_> = space.seen().iter().map(|c| c.obj).collect();
        assert_eq!(seen_attrs.len(), 8);
        assert_eq!(seen_objs.len(), 10);
    }

    #[test]
    fn train_split_counts_and_purity() {
        let (space, spec) = desk();
        let data = make_dataset(&space, &spec, 8, 2, 5).unwrap();
        assert_eq!(data.train.len(), 56 * 8);
        assert!(data.train.samples.iter().all(|s| space.is_seen(s.label)));
        assert_eq!(data.val.len(), (56 + 12) * 2);
        assert_eq!(data.test.len(), (56 + 12) * 2);
    }

    #[test]
    fn generation_is_reproducible() {
        let (space, spec) = desk();
        let a = make_dataset(&space, &spec, 2, 1, 77).unwrap();
        let b = make_dataset(&space, &spec, 2, 1, 77).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.val, b.val);
        assert_eq!(a.test, b.test);
        let c = make_dataset(&space, &spec, 2, 1, 78).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn sample_ids_are_disjoint_across_splits() {
        let (space, spec) = desk();
        let data = make_dataset(&space, &spec, 1, 1, 3).unwrap();
        let mut ids = BTreeSet::new();
        for ds in [&data.train, &data.val, &data.test] {
            for s in &ds.samples {
                assert!(ids.insert(s.sample_id.clone()), "duplicate id {}", s.sample_id);
            }
        }
    }

    #[test]
    fn unassigned_space_is_rejected() {
        let space = crate::space::numbered_space(2, 2).unwrap();
        let spec = default_render_spec(2, 2, 16, 16);
        assert!(make_dataset(&space, &spec, 1, 1, 0).is_err());
    }

    #[test]
    fn mismatched_spec_is_rejected() {
        let space = default_desk_space(0);
        let spec = default_render_spec(3, 3, 16, 16);
        let err = make_dataset(&space, &spec, 1, 1, 0).unwrap_err();
        assert!(err.to_string().contains("3x3"));
    }

    #[test]
    fn export_import_round_trips_exactly() {
        let (space, spec) = desk();
        let data = make_dataset(&space, &spec, 1, 1, 13).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export_dataset(&data.val, &space, dir.path()).unwrap();
        let (loaded, loaded_space) = import_dataset(dir.path()).unwrap();
        assert_eq!(loaded, data.val);
        assert_eq!(loaded_space, space);
    }

    #[test]
    fn truncated_payload_is_detected() {
        let (space, spec) = desk();
        let data = make_dataset(&space, &spec, 1, 1, 13).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export_dataset(&data.test, &space, dir.path()).unwrap();
        let path = dir.path().join("samples.f32");
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        let err = import_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("bytes"), "message was: {err}");
    }

    #[test]
    fn count_mismatch_names_the_field() {
        let (space, spec) = desk();
        let data = make_dataset(&space, &spec, 1, 1, 13).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export_dataset(&data.test, &space, dir.path()).unwrap();
        let path = dir.path().join("manifest.json");
        let manifest = std::fs::read_to_string(&path).unwrap();
        let wrong = manifest.replace(
            &format!("\"count\": {}", data.test.len()),
            &format!("\"count\": {}", data.test.len() + 1),
        );
        assert_ne!(manifest, wrong, "manifest edit must take effect");
        std::fs::write(&path, wrong).unwrap();
        let err = import_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("count"), "message was: {err}");
    }

    #[test]
    fn dataset_content_hash_is_stable_and_sensitive() {
        let (space, spec) = desk();
        let a = make_dataset(&space, &spec, 1, 1, 2).unwrap();
        let b = make_dataset(&space, &spec, 1, 1, 2).unwrap();
        assert_eq!(a.train.content_hash(), b.train.content_hash());
        let c = make_dataset(&space, &spec, 1, 1, 4).unwrap();
        assert_ne!(a.train.content_hash(), c.train.content_hash());
    }
}
