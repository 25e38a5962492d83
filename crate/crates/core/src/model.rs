//! The full three-branch model: a vision encoder over prompt-augmented
//! patches and two text encoders (attribute and object), tied together by
//! shared prompts and scored by temperature-scaled cosine similarity.
//!
//! Scoring for a batch of `n` images against `C` classes of one branch:
//!
//! ```text
//! rho[i][k] = softmax_k( cos(omega(Y[k]), nu(z[i])) / tau )
//! ```
//!
//! with `omega`/`nu` pure linear maps into a joint space (no bias — scoring
//! must be invariant to positive rescaling of `z`) and cosine computed on
//! L2-normalized rows with a 1e-12 norm guard.

use rand_chacha::ChaCha12Rng;
use std::sync::Arc;

use crate::config::{MmptConfig, PromptCoverage};
use crate::encoder::{
    bind_layer, bind_patch_embed, init_layer, init_patch_embed, patch_embed, patch_index_map,
    LayerVars, PatchEmbedVars,
};
use crate::error::{MmptError, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::prompt::{
    apply_visual_prompt, bind_prompts, bind_text_tokens, build_text_input, center_placement,
    init_prompt_bank, init_text_tokens, random_placement, run_branch, run_text_branch, Modality,
    PromptVars, TextTokenVars,
};
use crate::render::CHANNELS;
use crate::scalar::Scalar;
use crate::space::CompositionSpace;
use crate::tensor::Tensor;

// ── Model ────────────────────────────────────────────────────────────────────

pub struct MmptModel<S: Scalar> {
    cfg: MmptConfig,
    n_attrs: usize,
    n_objs: usize,
    store: ParamStore<S>,
    patch_idx: Arc<Vec<usize>>,
}

/// Train mode draws one prompt location per image from the rng; eval mode
/// pins the prompt to the image center so outputs are deterministic.
pub enum ForwardMode<'a> {
    Train { rng: &'a mut ChaCha12Rng },
    Eval,
}

/// One forward pass over a batch, kept alive so callers can read values or
/// run a backward pass through the returned graph.
pub struct BatchForward<S: Scalar> {
    pub graph: Graph<S>,
    /// `[n, d_v]` final vision readouts.
    pub z: Var,
    /// `[|A|, d_l]` and `[|O|, d_l]` final text readouts.
    pub y_a: Var,
    pub y_o: Var,
    /// `[n, |A|]` and `[n, |O|]` row-stochastic probability tables.
    pub rho_a: Var,
    pub rho_o: Var,
}

impl<S: Scalar> MmptModel<S> {
    pub fn new(cfg: MmptConfig, n_attrs: usize, n_objs: usize) -> Result<Self> {
        cfg.validate()?;
        if n_attrs == 0 || n_objs == 0 {
            return Err(MmptError::invalid("model needs at least one attribute and one object"));
        }
        let mut store = ParamStore::new();
        let seed = cfg.seed;
        init_patch_embed(&mut store, seed, cfg.patch_dim(), cfg.d_v, cfg.n_patches());
        store.init_normal(seed, "vision.cls", 1, cfg.d_v, 0.02);
        for i in 0..cfg.layers_vision {
            init_layer(&mut store, seed, &format!("vision.layer{i:02}"), cfg.d_v);
        }
        for i in 0..cfg.layers_attr {
            init_layer(&mut store, seed, &format!("attr.layer{i:02}"), cfg.d_l);
        }
        for i in 0..cfg.layers_obj {
            init_layer(&mut store, seed, &format!("obj.layer{i:02}"), cfg.d_l);
        }
        init_text_tokens(&mut store, &cfg, Modality::Attribute, n_attrs);
        init_text_tokens(&mut store, &cfg, Modality::Object, n_objs);
        if cfg.enable_shared_prompts {
            init_prompt_bank(&mut store, &cfg);
        }
        if cfg.enable_visual_prompt {
            store.init_normal(
                seed,
                "phi",
                cfg.prompt_patch_size,
                cfg.prompt_patch_size * CHANNELS,
                1.0,
            );
        }
        store.init_uniform(seed, "score.omega", cfg.d_l, cfg.d_joint, 0.05);
        store.init_uniform(seed, "score.nu", cfg.d_v, cfg.d_joint, 0.05);
        let patch_idx = patch_index_map(cfg.image_size, cfg.patch_size);
        Ok(Self { cfg, n_attrs, n_objs, store, patch_idx })
    }

    /// Builds a model sized for a composition space's label sets.
    pub fn for_space(cfg: MmptConfig, space: &CompositionSpace) -> Result<Self> {
        Self::new(cfg, space.attributes().len(), space.objects().len())
    }

    pub fn cfg(&self) -> &MmptConfig {
        &self.cfg
    }

    pub fn n_attrs(&self) -> usize {
        self.n_attrs
    }

    pub fn n_objs(&self) -> usize {
        self.n_objs
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.store
    }

    /// Flips the two ablation flags without touching stored tensors.
    /// Disabled components are skipped at forward time even if their
    /// parameters exist.
    pub fn set_flags(&mut self, visual_prompt: bool, shared_prompts: bool) {
        self.cfg.enable_visual_prompt = visual_prompt;
        self.cfg.enable_shared_prompts = shared_prompts;
    }

    /// Converts raw pixels (as produced by the renderer) into the model's
    /// scalar type, validating the length.
    pub fn image_from_pixels(&self, pixels: &[f32]) -> Result<Tensor<S>> {
        let want = self.cfg.pixel_count();
        if pixels.len() != want {
            return Err(MmptError::shape(format!(
                "image has {} values, model expects {want}",
                pixels.len()
            )));
        }
        Ok(Tensor::from_vec(
            1,
            want,
            pixels.iter().map(|&p| S::of_f64(p as f64)).collect(),
        ))
    }

    fn bind_all(&self, g: &mut Graph<S>) -> Bound {
        let cfg = &self.cfg;
        let heads_v = cfg.heads_vision;
        let heads_t = cfg.heads_text;
        Bound {
            patch: bind_patch_embed(&self.store, g),
            cls: self.store.bind(g, "vision.cls"),
            vision_layers: (0..cfg.layers_vision)
                .map(|i| bind_layer(&self.store, g, &format!("vision.layer{i:02}"), heads_v))
                .collect(),
            attr_layers: (0..cfg.layers_attr)
                .map(|i| bind_layer(&self.store, g, &format!("attr.layer{i:02}"), heads_t))
                .collect(),
            obj_layers: (0..cfg.layers_obj)
                .map(|i| bind_layer(&self.store, g, &format!("obj.layer{i:02}"), heads_t))
                .collect(),
            attr_tokens: bind_text_tokens(&self.store, g, cfg, Modality::Attribute),
            obj_tokens: bind_text_tokens(&self.store, g, cfg, Modality::Object),
            prompts: cfg.enable_shared_prompts.then(|| bind_prompts(&self.store, g, cfg)),
            phi: cfg.enable_visual_prompt.then(|| self.store.bind(g, "phi")),
            omega: self.store.bind(g, "score.omega"),
            nu: self.store.bind(g, "score.nu"),
        }
    }

    fn vision_forward(
        &self,
        g: &mut Graph<S>,
        bound: &Bound,
        image: &Tensor<S>,
        placement: (usize, usize),
    ) -> Result<Var> {
        let cfg = &self.cfg;
        let mut img = g.input(image.clone());
        if let Some(phi) = bound.phi {
            let tile_all = cfg.visual_prompt_coverage == PromptCoverage::AllPatches;
            img = apply_visual_prompt(
                g,
                img,
                phi,
                cfg.image_size,
                cfg.prompt_patch_size,
                placement,
                tile_all,
            )?;
        }
        let tokens = patch_embed(g, img, bound.patch, &self.patch_idx)?;
        let prompts = bound.prompts.as_ref().map(|p| (p, Modality::Vision));
        run_branch(g, &bound.vision_layers, prompts, cfg.prompt_depth, tokens, bound.cls)
    }

    fn text_forward(&self, g: &mut Graph<S>, bound: &Bound, branch: Modality) -> Result<Var> {
        let cfg = &self.cfg;
        let (layers, tokens, n_classes) = match branch {
            Modality::Attribute => (&bound.attr_layers, &bound.attr_tokens, self.n_attrs),
            Modality::Object => (&bound.obj_layers, &bound.obj_tokens, self.n_objs),
            Modality::Vision => {
                return Err(MmptError::invalid("vision is not a text branch"));
            }
        };
        let prompts = bound.prompts.as_ref().map(|p| (p, branch));
        let mut readouts = Vec::with_capacity(n_classes);
        for class_idx in 0..n_classes {
            let (body, readout) = build_text_input(g, tokens, class_idx)?;
            readouts.push(run_text_branch(g, layers, prompts, cfg.prompt_depth, body, readout)?);
        }
        Ok(g.concat_rows(&readouts))
    }

    fn score_rows(&self, g: &mut Graph<S>, z: Var, y: Var, bound: &Bound) -> Var {
        let projected_y = g.matmul(y, bound.omega);
        let projected_z = g.matmul(z, bound.nu);
        let ny = g.l2_normalize_rows(projected_y, 1e-12);
        let nz = g.l2_normalize_rows(projected_z, 1e-12);
        let yt = g.transpose(ny);
        let cos = g.matmul(nz, yt);
        let logits = g.scale(cos, 1.0 / self.cfg.tau);
        g.softmax_rows(logits)
    }

    /// One graph holding the whole batch: n vision forwards, one text forward
    /// per branch (readouts shared across the batch), and both score tables.
    pub fn forward_batch(
        &self,
        images: &[Tensor<S>],
        mode: ForwardMode<'_>,
    ) -> Result<BatchForward<S>> {
        if images.is_empty() {
            return Err(MmptError::invalid("forward_batch needs at least one image"));
        }
        let cfg = &self.cfg;
        let placements: Vec<(usize, usize)> = match mode {
            ForwardMode::Eval => {
                vec![center_placement(cfg.image_size, cfg.prompt_patch_size); images.len()]
            }
            ForwardMode::Train { rng } => (0..images.len())
                .map(|_| random_placement(cfg.image_size, cfg.prompt_patch_size, rng))
                .collect(),
        };
        let mut g = Graph::new();
        let bound = self.bind_all(&mut g);
        let mut zs = Vec::with_capacity(images.len());
        for (image, &placement) in images.iter().zip(&placements) {
            zs.push(self.vision_forward(&mut g, &bound, image, placement)?);
        }
        let z = g.concat_rows(&zs);
        let y_a = self.text_forward(&mut g, &bound, Modality::Attribute)?;
        let y_o = self.text_forward(&mut g, &bound, Modality::Object)?;
        let rho_a = self.score_rows(&mut g, z, y_a, &bound);
        let rho_o = self.score_rows(&mut g, z, y_o, &bound);
        Ok(BatchForward { graph: g, z, y_a, y_o, rho_a, rho_o })
    }
}

struct Bound {
    patch: PatchEmbedVars,
    cls: Var,
    vision_layers: Vec<LayerVars>,
    attr_layers: Vec<LayerVars>,
    obj_layers: Vec<LayerVars>,
    attr_tokens: TextTokenVars,
    obj_tokens: TextTokenVars,
    prompts: Option<PromptVars>,
    phi: Option<Var>,
    omega: Var,
    nu: Var,
}

// ── Score tables ─────────────────────────────────────────────────────────────

/// A batch of per-sample class probabilities plus everything needed to
/// evaluate them: label vocabularies, the seen-pair mask, and true labels.
/// This is the interchange contract with the metrics engine — external
/// producers can hand in the same shape.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreTable {
    pub attributes: Vec<String>,
    pub objects: Vec<String>,
    /// Compositions available at training time, attribute-major sorted.
    pub seen_pairs: Vec<(String, String)>,
    pub sample_ids: Vec<String>,
    pub true_attrs: Vec<String>,
    pub true_objs: Vec<String>,
    /// `n x |A|` and `n x |O|` probability rows.
    pub rho_a: Vec<Vec<f64>>,
    pub rho_o: Vec<Vec<f64>>,
}

pub const ROW_SUM_TOLERANCE: f64 = 1e-6;

impl ScoreTable {
    pub fn n_samples(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn attr_index(&self, name: &str) -> Option<usize> {
        self.attributes.iter().position(|a| a == name)
    }

    pub fn obj_index(&self, name: &str) -> Option<usize> {
        self.objects.iter().position(|o| o == name)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.sample_ids.len();
        for (what, len) in [
            ("true_attrs", self.true_attrs.len()),
            ("true_objs", self.true_objs.len()),
            ("rho_a", self.rho_a.len()),
            ("rho_o", self.rho_o.len()),
        ] {
            if len != n {
                return Err(MmptError::invalid(format!(
                    "score table has {n} sample ids but {len} {what} entries"
                )));
            }
        }
        for (rows, width, what) in
            [(&self.rho_a, self.attributes.len(), "attribute"),
             (&self.rho_o, self.objects.len(), "object")]
        {
            for (i, row) in rows.iter().enumerate() {
                if row.len() != width {
                    return Err(MmptError::shape(format!(
                        "{what} row {i} has {} entries, expected {width}",
                        row.len()
                    )));
                }
                let mut sum = 0.0;
                for &p in row {
                    if !p.is_finite() || p <= 0.0 || p >= 1.0 {
                        return Err(MmptError::invalid(format!(
                            "{what} row {i} holds probability {p}, outside (0, 1)"
                        )));
                    }
                    sum += p;
                }
                if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                    return Err(MmptError::invalid(format!(
                        "{what} row {i} sums to {sum}, not 1"
                    )));
                }
            }
        }
        for (i, (a, o)) in self.true_attrs.iter().zip(&self.true_objs).enumerate() {
            if self.attr_index(a).is_none() || self.obj_index(o).is_none() {
                return Err(MmptError::invalid(format!(
                    "sample {i} labeled ({a}, {o}) which is outside the table vocabulary"
                )));
            }
        }
        for (a, o) in &self.seen_pairs {
            if self.attr_index(a).is_none() || self.obj_index(o).is_none() {
                return Err(MmptError::invalid(format!(
                    "seen pair ({a}, {o}) is outside the table vocabulary"
                )));
            }
        }
        Ok(())
    }

    /// Assembles a table from one forward pass.
    pub fn from_forward<S: Scalar>(
        space: &CompositionSpace,
        sample_ids: &[String],
        labels: &[crate::space::Composition],
        rho_a: &Tensor<S>,
        rho_o: &Tensor<S>,
    ) -> Result<Self> {
        let n = sample_ids.len();
        if labels.len() != n || rho_a.rows() != n || rho_o.rows() != n {
            return Err(MmptError::invalid(format!(
                "mismatched forward outputs: {n} ids, {} labels, {} / {} score rows",
                labels.len(),
                rho_a.rows(),
                rho_o.rows()
            )));
        }
        let table = ScoreTable {
            attributes: space.attributes().to_vec(),
            objects: space.objects().to_vec(),
            seen_pairs: space
                .seen()
                .iter()
                .map(|c| (space.attributes()[c.attr].clone(), space.objects()[c.obj].clone()))
                .collect(),
            sample_ids: sample_ids.to_vec(),
            true_attrs: labels.iter().map(|c| space.attributes()[c.attr].clone()).collect(),
            true_objs: labels.iter().map(|c| space.objects()[c.obj].clone()).collect(),
            rho_a: (0..n)
                .map(|r| rho_a.row(r).iter().map(|&v| v.as_f64()).collect())
                .collect(),
            rho_o: (0..n)
                .map(|r| rho_o.row(r).iter().map(|&v| v.as_f64()).collect())
                .collect(),
        };
        table.validate()?;
        Ok(table)
    }

    /// Appends another table over the same vocabulary (chunked evaluation).
    pub fn extend(&mut self, other: ScoreTable) -> Result<()> {
        if self.attributes != other.attributes
            || self.objects != other.objects
            || self.seen_pairs != other.seen_pairs
        {
            return Err(MmptError::invalid("cannot merge score tables over different spaces"));
        }
        self.sample_ids.extend(other.sample_ids);
        self.true_attrs.extend(other.true_attrs);
        self.true_objs.extend(other.true_objs);
        self.rho_a.extend(other.rho_a);
        self.rho_o.extend(other.rho_o);
        Ok(())
    }

    // ── File formats ────────────────────────────────────────────────────

    pub fn to_json_file(&self, path: &std::path::Path) -> Result<()> {
        self.validate()?;
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn from_json_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let table: ScoreTable = serde_json::from_str(&text)?;
        table.validate()?;
        Ok(table)
    }

    /// CSV form: `sample_id, true_attribute, true_object, a:<name>.., o:<name>..`
    /// — per-sample probabilities only. The seen-pair mask is not representable
    /// in this layout, so reading CSV requires the composition space.
    pub fn to_csv_file(&self, path: &std::path::Path) -> Result<()> {
        self.validate()?;
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec![
            "sample_id".to_string(),
            "true_attribute".to_string(),
            "true_object".to_string(),
        ];
        header.extend(self.attributes.iter().map(|a| format!("a:{a}")));
        header.extend(self.objects.iter().map(|o| format!("o:{o}")));
        w.write_record(&header)?;
        for i in 0..self.n_samples() {
            let mut rec = vec![
                self.sample_ids[i].clone(),
                self.true_attrs[i].clone(),
                self.true_objs[i].clone(),
            ];
            rec.extend(self.rho_a[i].iter().map(|p| format!("{p:.17e}")));
            rec.extend(self.rho_o[i].iter().map(|p| format!("{p:.17e}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn from_csv_file(path: &std::path::Path, space: &CompositionSpace) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let header = r.headers()?.clone();
        let expected_cols = 3 + space.attributes().len() + space.objects().len();
        if header.len() != expected_cols {
            return Err(MmptError::invalid(format!(
                "score CSV has {} columns, the space implies {expected_cols}",
                header.len()
            )));
        }
        for (k, attr) in space.attributes().iter().enumerate() {
            let got = &header[3 + k];
            if got != format!("a:{attr}").as_str() {
                return Err(MmptError::invalid(format!(
                    "column {} is '{got}', expected 'a:{attr}'",
                    3 + k
                )));
            }
        }
        for (k, obj) in space.objects().iter().enumerate() {
            let col = 3 + space.attributes().len() + k;
            let got = &header[col];
            if got != format!("o:{obj}").as_str() {
                return Err(MmptError::invalid(format!(
                    "column {col} is '{got}', expected 'o:{obj}'"
                )));
            }
        }
        let mut table = ScoreTable {
            attributes: space.attributes().to_vec(),
            objects: space.objects().to_vec(),
            seen_pairs: space
                .seen()
                .iter()
                .map(|c| (space.attributes()[c.attr].clone(), space.objects()[c.obj].clone()))
                .collect(),
            sample_ids: Vec::new(),
            true_attrs: Vec::new(),
            true_objs: Vec::new(),
            rho_a: Vec::new(),
            rho_o: Vec::new(),
        };
        for rec in r.records() {
            let rec = rec?;
            table.sample_ids.push(rec[0].to_string());
            table.true_attrs.push(rec[1].to_string());
            table.true_objs.push(rec[2].to_string());
            let parse = |s: &str| -> Result<f64> {
                s.parse::<f64>().map_err(|_| {
                    MmptError::corrupt(format!("unparseable probability '{s}' in score CSV"))
                })
            };
            let mut arow = Vec::with_capacity(space.attributes().len());
            for k in 0..space.attributes().len() {
                arow.push(parse(&rec[3 + k])?);
            }
            let mut orow = Vec::with_capacity(space.objects().len());
            for k in 0..space.objects().len() {
                orow.push(parse(&rec[3 + space.attributes().len() + k])?);
            }
            table.rho_a.push(arow);
            table.rho_o.push(orow);
        }
        table.validate()?;
        Ok(table)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::numbered_space;
    use rand::{Rng, SeedableRng};

    fn toy_model(seed: u64) -> MmptModel<f64> {
        let mut cfg = MmptConfig::grad_check_toy();
        cfg.seed = seed;
        MmptModel::new(cfg, 3, 4).unwrap()
    }

    fn rand_images<S: Scalar>(model: &MmptModel<S>, n: usize, seed: u64) -> Vec<Tensor<S>> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let pix: Vec<f32> =
                    (0..model.cfg().pixel_count()).map(|_| rng.gen_range(0.0..1.0)).collect();
                model.image_from_pixels(&pix).unwrap()
            })
            .collect()
    }

    #[test]
    fn forward_shapes_and_row_sums() {
        let model = toy_model(1);
        let images = rand_images(&model, 2, 9);
        let fwd = model.forward_batch(&images, ForwardMode::Eval).unwrap();
        let rho_a = fwd.graph.value(fwd.rho_a);
        let rho_o = fwd.graph.value(fwd.rho_o);
        assert_eq!(rho_a.shape(), (2, 3));
        assert_eq!(rho_o.shape(), (2, 4));
        assert_eq!(fwd.graph.value(fwd.z).shape(), (2, model.cfg().d_v));
        for t in [rho_a, rho_o] {
            for r in 0..t.rows() {
                let sum: f64 = t.row(r).iter().sum();
                assert!((sum - 1.0).abs() < 1e-6, "row sum {sum}");
                assert!(t.row(r).iter().all(|&p| p > 0.0));
            }
        }
    }

    #[test]
    fn batch_of_one_matches_batched_rows_bitwise() {
        let model = toy_model(2);
        let images = rand_images(&model, 3, 10);
        let full = model.forward_batch(&images, ForwardMode::Eval).unwrap();
        for (i, img) in images.iter().enumerate() {
            let single = model.forward_batch(&[img.clone()], ForwardMode::Eval).unwrap();
            assert_eq!(
                single.graph.value(single.rho_a).row(0),
                full.graph.value(full.rho_a).row(i)
            );
            assert_eq!(
                single.graph.value(single.rho_o).row(0),
                full.graph.value(full.rho_o).row(i)
            );
        }
    }

    #[test]
    fn permuting_the_batch_permutes_rows() {
        let model = toy_model(3);
        let images = rand_images(&model, 4, 11);
        let fwd = model.forward_batch(&images, ForwardMode::Eval).unwrap();
        let perm = [2usize, 0, 3, 1];
        let shuffled: Vec<Tensor<f64>> = perm.iter().map(|&i| images[i].clone()).collect();
        let fwd2 = model.forward_batch(&shuffled, ForwardMode::Eval).unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            assert_eq!(
                fwd2.graph.value(fwd2.rho_a).row(dst),
                fwd.graph.value(fwd.rho_a).row(src)
            );
        }
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let model = toy_model(4);
        let images = rand_images(&model, 2, 12);
        let a = model.forward_batch(&images, ForwardMode::Eval).unwrap();
        let b = model.forward_batch(&images, ForwardMode::Eval).unwrap();
        assert_eq!(a.graph.value(a.rho_a).data(), b.graph.value(b.rho_a).data());
        assert_eq!(a.graph.value(a.z).data(), b.graph.value(b.z).data());
    }

    #[test]
    fn prompt_free_vision_equals_plain_vit_oracle() {
        // Flags off: the vision branch must match patch embedding plus a
        // plain layer stack run directly against the same parameter store.
        let mut cfg = MmptConfig::grad_check_toy();
        cfg.enable_visual_prompt = false;
        cfg.enable_shared_prompts = false;
        let model: MmptModel<f64> = MmptModel::new(cfg.clone(), 3, 4).unwrap();
        let images = rand_images(&model, 2, 13);
        let fwd = model.forward_batch(&images, ForwardMode::Eval).unwrap();

        for (i, image) in images.iter().enumerate() {
            let mut g = Graph::new();
            let pe = bind_patch_embed(model.params(), &mut g);
            let img = g.input(image.clone());
            let idx = patch_index_map(cfg.image_size, cfg.patch_size);
            let patches = patch_embed(&mut g, img, pe, &idx).unwrap();
            let cls = model.params().bind(&mut g, "vision.cls");
            let mut seq = g.concat_rows(&[patches, cls]);
            for l in 0..cfg.layers_vision {
                let layer =
                    bind_layer(model.params(), &mut g, &format!("vision.layer{l:02}"), cfg.heads_vision);
                seq = crate::encoder::transformer_layer(&mut g, &layer, seq).unwrap();
            }
            let n = g.rows(seq);
            let z = g.slice_rows(seq, n - 1, 1);
            assert_eq!(g.value(z).row(0), fwd.graph.value(fwd.z).row(i));
        }
    }

    #[test]
    fn score_matches_softmax_of_cosines_oracle() {
        let model = toy_model(5);
        let images = rand_images(&model, 2, 14);
        let fwd = model.forward_batch(&images, ForwardMode::Eval).unwrap();
        let g = &fwd.graph;
        let z = g.value(fwd.z);
        let y = g.value(fwd.y_a);
        let omega = model.params().get("score.omega");
        let nu = model.params().get("score.nu");
        let dj = model.cfg().d_joint;
        let project = |row: &[f64], w: &Tensor<f64>| -> Vec<f64> {
            (0..dj)
                .map(|j| row.iter().enumerate().map(|(i, &v)| v * w.at(i, j)).sum())
                .collect()
        };
        for i in 0..2 {
            let pz = project(z.row(i), nu);
            let nz: f64 = pz.iter().map(|v| v * v).sum::<f64>().sqrt();
            let mut logits = Vec::new();
            for k in 0..3 {
                let py = project(y.row(k), omega);
                let ny: f64 = py.iter().map(|v| v * v).sum::<f64>().sqrt();
                let dot: f64 = pz.iter().zip(&py).map(|(a, b)| a * b).sum();
                logits.push(dot / ((nz + 1e-12) * (ny + 1e-12)) / model.cfg().tau);
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let zsum: f64 = exps.iter().sum();
            for k in 0..3 {
                let expect = exps[k] / zsum;
                let got = g.value(fwd.rho_a).at(i, k);
                assert!((got - expect).abs() < 1e-12, "({i},{k}): {got} vs {expect}");
            }
        }
    }

    #[test]
    fn identical_class_rows_give_uniform_probabilities() {
        let mut model = toy_model(6);
        let base = model.params().get("attr.class_table").row(0).to_vec();
        for r in 1..3 {
            model
                .params_mut()
                .get_mut("attr.class_table")
                .row_mut(r)
                .copy_from_slice(&base);
        }
        let images = rand_images(&model, 1, 15);
        let fwd = model.forward_batch(&images, ForwardMode::Eval).unwrap();
        for &p in fwd.graph.value(fwd.rho_a).row(0) {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn duplicated_class_row_duplicates_its_output_row() {
        let mut model = toy_model(7);
        let base = model.params().get("obj.class_table").row(1).to_vec();
        model.params_mut().get_mut("obj.class_table").row_mut(3).copy_from_slice(&base);
        let images = rand_images(&model, 1, 16);
        let fwd = model.forward_batch(&images, ForwardMode::Eval).unwrap();
        let y = fwd.graph.value(fwd.y_o);
        assert_eq!(y.row(1), y.row(3));
    }

    #[test]
    fn opposite_cosines_saturate_at_low_temperature() {
        // Hand-built two-class case with identity projections: cosines +1 and
        // -1 at tau = 0.01 give a logit gap of 200.
        let mut g: Graph<f64> = Graph::new();
        let z = g.input(Tensor::from_vec(1, 2, vec![1.0, 0.0]));
        let y = g.input(Tensor::from_vec(2, 2, vec![1.0, 0.0, -1.0, 0.0]));
        let eye = Tensor::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let omega = g.input(eye.clone());
        let nu = g.input(eye);
        let py = g.matmul(y, omega);
        let pz = g.matmul(z, nu);
        let ny = g.l2_normalize_rows(py, 1e-12);
        let nz = g.l2_normalize_rows(pz, 1e-12);
        let yt = g.transpose(ny);
        let cos = g.matmul(nz, yt);
        let logits = g.scale(cos, 1.0 / 0.01);
        let rho = g.softmax_rows(logits);
        let p = g.value(rho);
        assert!(p.at(0, 0) >= 1.0 - 1e-8, "got {}", p.at(0, 0));
        assert!(p.at(0, 1) > 0.0, "probabilities must stay positive");
    }

    #[test]
    fn lower_temperature_sharpens_rows() {
        let mut cfg = MmptConfig::grad_check_toy();
        cfg.tau = 0.05;
        let model_a: MmptModel<f64> = MmptModel::new(cfg.clone(), 3, 4).unwrap();
        cfg.tau = 0.01;
        let model_b: MmptModel<f64> = MmptModel::new(cfg, 3, 4).unwrap();
        let images = rand_images(&model_a, 1, 17);
        let fa = model_a.forward_batch(&images, ForwardMode::Eval).unwrap();
        let fb = model_b.forward_batch(&images, ForwardMode::Eval).unwrap();
        let max_a = fa.graph.value(fa.rho_a).row(0).iter().cloned().fold(0.0, f64::max);
        let max_b = fb.graph.value(fb.rho_a).row(0).iter().cloned().fold(0.0, f64::max);
        assert!(max_b > max_a, "tau 0.01 max {max_b} <= tau 0.05 max {max_a}");
    }

    #[test]
    fn scaling_the_vision_readout_leaves_scores_unchanged() {
        // Pure-linear projections make scoring invariant to positive rescaling
        // of z; verified through the raw scoring path.
        let model = toy_model(8);
        let mut g: Graph<f64> = Graph::new();
        let mut rng = ChaCha12Rng::seed_from_u64(18);
        let zt = Tensor::from_vec(
            1,
            model.cfg().d_v,
            (0..model.cfg().d_v).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );
        let yt = Tensor::from_vec(
            3,
            model.cfg().d_l,
            (0..3 * model.cfg().d_l).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );
        let mut scaled = zt.clone();
        for v in scaled.data_mut() {
            *v *= 2.5;
        }
        let omega = model.params().bind(&mut g, "score.omega");
        let nu = model.params().bind(&mut g, "score.nu");
        let run = |g: &mut Graph<f64>, z_in: Tensor<f64>| -> Vec<f64> {
            let z = g.input(z_in);
            let y = g.input(yt.clone());
            let py = g.matmul(y, omega);
            let pz = g.matmul(z, nu);
            let nyr = g.l2_normalize_rows(py, 1e-12);
            let nzr = g.l2_normalize_rows(pz, 1e-12);
            let ytr = g.transpose(nyr);
            let cos = g.matmul(nzr, ytr);
            let logits = g.scale(cos, 1.0 / model.cfg().tau);
            let rho = g.softmax_rows(logits);
            g.value(rho).row(0).to_vec()
        };
        let a = run(&mut g, zt);
        let b = run(&mut g, scaled);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn full_model_with_zeroed_extras_matches_text_only_variant() {
        // Same seed: shared tensors are identical by name-keyed init. Zero phi,
        // disable both prompt paths, and the full model must reproduce the
        // text-only forward bitwise.
        let cfg_full = MmptConfig::grad_check_toy();
        let mut full: MmptModel<f64> = MmptModel::new(cfg_full.clone(), 3, 4).unwrap();
        let mut cfg_text = cfg_full;
        cfg_text.enable_visual_prompt = false;
        cfg_text.enable_shared_prompts = false;
        let text_only: MmptModel<f64> = MmptModel::new(cfg_text, 3, 4).unwrap();

        for v in full.params_mut().get_mut("phi").data_mut() {
            *v = 0.0;
        }
        full.set_flags(true, false); // visual prompt on but zeroed; shared off
        let images = rand_images(&text_only, 4, 19);
        let f1 = full.forward_batch(&images, ForwardMode::Eval).unwrap();
        let f2 = text_only.forward_batch(&images, ForwardMode::Eval).unwrap();
        assert_eq!(f1.graph.value(f1.rho_a).data(), f2.graph.value(f2.rho_a).data());
        assert_eq!(f1.graph.value(f1.rho_o).data(), f2.graph.value(f2.rho_o).data());
        assert_eq!(f1.graph.value(f1.z).data(), f2.graph.value(f2.z).data());
    }

    #[test]
    fn score_table_round_trips_through_json_and_csv() {
        use crate::space::Composition;
        let mut space = numbered_space(2, 2).unwrap();
        space
            .assign_splits(
                vec![Composition::new(0, 0), Composition::new(0, 1), Composition::new(1, 0)],
                vec![],
                vec![Composition::new(1, 1)],
            )
            .unwrap();
        let table = ScoreTable {
            attributes: space.attributes().to_vec(),
            objects: space.objects().to_vec(),
            seen_pairs: vec![
                ("attr0".into(), "obj0".into()),
                ("attr0".into(), "obj1".into()),
                ("attr1".into(), "obj0".into()),
            ],
            sample_ids: vec!["s0".into(), "s1".into()],
            true_attrs: vec!["attr0".into(), "attr1".into()],
            true_objs: vec!["obj1".into(), "obj1".into()],
            rho_a: vec![vec![0.25, 0.75], vec![0.6, 0.4]],
            rho_o: vec![vec![0.1, 0.9], vec![0.5, 0.5]],
        };
        table.validate().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let jpath = dir.path().join("table.json");
        table.to_json_file(&jpath).unwrap();
        let back = ScoreTable::from_json_file(&jpath).unwrap();
        assert_eq!(back.rho_a, table.rho_a);
        assert_eq!(back.seen_pairs, table.seen_pairs);

        let cpath = dir.path().join("table.csv");
        table.to_csv_file(&cpath).unwrap();
        let back2 = ScoreTable::from_csv_file(&cpath, &space).unwrap();
        assert_eq!(back2.sample_ids, table.sample_ids);
        for (a, b) in back2.rho_a.iter().flatten().zip(table.rho_a.iter().flatten()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn score_table_rejects_bad_rows() {
        let mut table = ScoreTable {
            attributes: vec!["a".into()],
            objects: vec!["o".into(), "p".into()],
            seen_pairs: vec![],
            sample_ids: vec!["s".into()],
            true_attrs: vec!["a".into()],
            true_objs: vec!["o".into()],
            rho_a: vec![vec![0.9999999]],
            rho_o: vec![vec![0.5, 0.5]],
        };
        assert!(table.validate().is_ok());
        table.rho_o[0][0] = 0.9; // sum 1.4
        let err = table.validate().unwrap_err().to_string();
        assert!(err.contains("sums to"), "{err}");
        table.rho_o[0] = vec![1.0, 0.0]; // boundary values excluded
        assert!(table.validate().is_err());
    }

    #[test]
    fn forward_rejects_empty_batch_and_bad_pixels() {
        let model = toy_model(20);
        assert!(model.forward_batch(&[], ForwardMode::Eval).is_err());
        assert!(model.image_from_pixels(&[0.0_f32; 7]).is_err());
    }
}
