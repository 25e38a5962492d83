//! Prompt machinery: the pixel-space patch prompt, the per-layer shared
//! prompt bank with its per-modality projectors, and the token flow that
//! injects prompts into front layers and carries them through tail layers.
//!
//! Token order is always prompt-first, readout-last:
//!
//! ```text
//! front layer i (i < depth):  [fresh_prompt_i, body, readout] -> layer -> drop prompt rows
//! tail layer  j (j >= depth): [carried,        body, readout] -> layer -> keep prompt rows
//! ```
//!
//! where `carried` starts as the projection of the *last* fresh prompt.
//! Front layers therefore consume `L_p` extra slots and emit none; tail
//! layers conserve the token count.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use std::sync::Arc;

use crate::config::MmptConfig;
use crate::encoder::{transformer_layer, LayerVars};
use crate::error::{MmptError, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::render::CHANNELS;
use crate::scalar::Scalar;

// ── Visual patch prompt ──────────────────────────────────────────────────────

/// Where the pixel prompt lands: a per-image random location during training,
/// a fixed top-left coordinate (the image center by default) during eval.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhiPlacement {
    RandomPerImage,
    Fixed { y: usize, x: usize },
}

/// Top-left coordinate of the centered prompt patch.
pub fn center_placement(image_size: usize, patch: usize) -> (usize, usize) {
    ((image_size - patch) / 2, (image_size - patch) / 2)
}

/// Draws a uniform top-left coordinate for one image.
pub fn random_placement(image_size: usize, patch: usize, rng: &mut ChaCha12Rng) -> (usize, usize) {
    let span = image_size - patch + 1;
    (rng.gen_range(0..span), rng.gen_range(0..span))
}

/// Resolves a placement to a concrete coordinate and validates bounds.
pub fn resolve_placement(
    placement: PhiPlacement,
    image_size: usize,
    patch: usize,
    rng: Option<&mut ChaCha12Rng>,
) -> Result<(usize, usize)> {
    if patch > image_size {
        return Err(MmptError::invalid(format!(
            "prompt patch {patch} exceeds image size {image_size}"
        )));
    }
    match placement {
        PhiPlacement::RandomPerImage => {
            let rng = rng.ok_or_else(|| {
                MmptError::protocol("random prompt placement requires an rng (training mode)")
            })?;
            Ok(random_placement(image_size, patch, rng))
        }
        PhiPlacement::Fixed { y, x } => {
            if y + patch > image_size || x + patch > image_size {
                return Err(MmptError::invalid(format!(
                    "prompt placement ({y},{x}) puts a {patch}-pixel patch outside a \
                     {image_size}-pixel image"
                )));
            }
            Ok((y, x))
        }
    }
}

/// Scatter indices that drop each value of a `[p, p*C]` prompt tensor onto a
/// flattened `(y, x, c)` image at top-left `(top, left)`.
pub fn phi_scatter_indices(
    image_size: usize,
    patch: usize,
    top: usize,
    left: usize,
) -> Arc<Vec<usize>> {
    let mut idx = Vec::with_capacity(patch * patch * CHANNELS);
    for py in 0..patch {
        for px in 0..patch {
            for c in 0..CHANNELS {
                idx.push(((top + py) * image_size + (left + px)) * CHANNELS + c);
            }
        }
    }
    Arc::new(idx)
}

/// Adds the prompt to one patch region (or to every patch when `tile_all`).
/// Pixels are not re-clamped; values may leave [0,1].
pub fn apply_visual_prompt<S: Scalar>(
    g: &mut Graph<S>,
    image: Var,
    phi: Var,
    image_size: usize,
    patch: usize,
    placement: (usize, usize),
    tile_all: bool,
) -> Result<Var> {
    let pixels = image_size * image_size * CHANNELS;
    if g.value(image).len() != pixels {
        return Err(MmptError::shape(format!(
            "image has {} values, expected {}",
            g.value(image).len(),
            pixels
        )));
    }
    if g.value(phi).len() != patch * patch * CHANNELS {
        return Err(MmptError::shape(format!(
            "prompt tensor has {} values, expected {}x{}x{}",
            g.value(phi).len(),
            patch,
            patch,
            CHANNELS
        )));
    }
    let spread = if tile_all {
        if image_size % patch != 0 {
            return Err(MmptError::invalid(
                "tiled prompt coverage requires the patch to divide the image size",
            ));
        }
        let side = image_size / patch;
        let mut idx = Vec::with_capacity(side * side * patch * patch * CHANNELS);
        let mut tiles = Vec::with_capacity(side * side);
        for ty in 0..side {
            for tx in 0..side {
                idx.extend(
                    phi_scatter_indices(image_size, patch, ty * patch, tx * patch).iter(),
                );
                tiles.push(phi);
            }
        }
        let repeated = g.concat_rows(&tiles);
        g.scatter_add(repeated, Arc::new(idx), 1, pixels)
    } else {
        let (top, left) = placement;
        if top + patch > image_size || left + patch > image_size {
            return Err(MmptError::invalid(format!(
                "prompt placement ({top},{left}) out of bounds for image size {image_size}"
            )));
        }
        let idx = phi_scatter_indices(image_size, patch, top, left);
        g.scatter_add(phi, idx, 1, pixels)
    };
    Ok(g.add(image, spread))
}

// ── Shared prompt bank and projectors ────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Vision,
    Attribute,
    Object,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::Vision => "vision",
            Modality::Attribute => "attr",
            Modality::Object => "obj",
        }
    }
}

fn slab_name(layer: usize) -> String {
    format!("shared.t.l{layer:02}")
}

fn projector_name(modality: Modality, per_layer: bool, layer: usize) -> String {
    if per_layer {
        format!("proj.{}.l{layer:02}", modality.name())
    } else {
        format!("proj.{}", modality.name())
    }
}

/// Registers the bank (`depth` slabs of `L_p x d_s`, independently seeded) and
/// one projector per modality — or one per (modality, layer) when configured.
pub fn init_prompt_bank<S: Scalar>(store: &mut ParamStore<S>, cfg: &MmptConfig) {
    for i in 0..cfg.prompt_depth {
        store.init_normal(cfg.seed, &slab_name(i), cfg.prompt_len, cfg.d_s, 1.0);
    }
    let widths = [
        (Modality::Vision, cfg.d_v),
        (Modality::Attribute, cfg.d_l),
        (Modality::Object, cfg.d_l),
    ];
    let layers: &[usize] = if cfg.per_layer_projectors {
        &[] // placeholder, handled below
    } else {
        &[0]
    };
    for (modality, width) in widths {
        let layer_ids: Vec<usize> = if cfg.per_layer_projectors {
            (0..cfg.prompt_depth).collect()
        } else {
            layers.to_vec()
        };
        for layer in layer_ids {
            let name = projector_name(modality, cfg.per_layer_projectors, layer);
            store.init_uniform(cfg.seed, &format!("{name}.weight"), cfg.d_s, width, 0.05);
            store.init_const(&format!("{name}.bias"), 1, width, 0.0);
        }
    }
}

/// Bank plus projectors bound into a graph.
pub struct PromptVars {
    pub slabs: Vec<Var>,
    vision_proj: Vec<(Var, Var)>,
    attr_proj: Vec<(Var, Var)>,
    obj_proj: Vec<(Var, Var)>,
    per_layer: bool,
}

pub fn bind_prompts<S: Scalar>(
    store: &ParamStore<S>,
    g: &mut Graph<S>,
    cfg: &MmptConfig,
) -> PromptVars {
    let slabs = (0..cfg.prompt_depth).map(|i| store.bind(g, &slab_name(i))).collect();
    let mut bind_proj = |modality: Modality| -> Vec<(Var, Var)> {
        let layer_ids: Vec<usize> =
            if cfg.per_layer_projectors { (0..cfg.prompt_depth).collect() } else { vec![0] };
        layer_ids
            .into_iter()
            .map(|layer| {
                let name = projector_name(modality, cfg.per_layer_projectors, layer);
                (
                    store.bind(g, &format!("{name}.weight")),
                    store.bind(g, &format!("{name}.bias")),
                )
            })
            .collect()
    };
    PromptVars {
        slabs,
        vision_proj: bind_proj(Modality::Vision),
        attr_proj: bind_proj(Modality::Attribute),
        obj_proj: bind_proj(Modality::Object),
        per_layer: cfg.per_layer_projectors,
    }
}

/// Projects slab `layer_idx` (0-based, < depth) into the requested branch
/// width: one linear map applied to each of the L_p tokens.
pub fn project_shared<S: Scalar>(
    g: &mut Graph<S>,
    prompts: &PromptVars,
    layer_idx: usize,
    modality: Modality,
) -> Result<Var> {
    if layer_idx >= prompts.slabs.len() {
        return Err(MmptError::invalid(format!(
            "no shared prompt at layer {layer_idx}: bank holds {} layers",
            prompts.slabs.len()
        )));
    }
    let table = match modality {
        Modality::Vision => &prompts.vision_proj,
        Modality::Attribute => &prompts.attr_proj,
        Modality::Object => &prompts.obj_proj,
    };
    let (w, b) = if prompts.per_layer { table[layer_idx] } else { table[0] };
    let lifted = g.matmul(prompts.slabs[layer_idx], w);
    Ok(g.add_row(lifted, b))
}

// ── Layer steps ──────────────────────────────────────────────────────────────

/// Runs one front layer on `[prompt, body, readout]` and discards the prompt
/// outputs (they are re-injected fresh at the next front layer). Passing
/// `None` as the prompt degenerates to a plain layer on `[body, readout]`.
pub fn front_layer_step<S: Scalar>(
    g: &mut Graph<S>,
    layer: &LayerVars,
    projected_prompt: Option<Var>,
    body: Var,
    readout: Var,
) -> Result<(Var, Var)> {
    let n_body = g.rows(body);
    let seq = match projected_prompt {
        Some(p) => {
            if g.cols(p) != layer.dim {
                return Err(MmptError::shape(format!(
                    "projected prompt width {} does not match branch width {}",
                    g.cols(p),
                    layer.dim
                )));
            }
            g.concat_rows(&[p, body, readout])
        }
        None => g.concat_rows(&[body, readout]),
    };
    let out = transformer_layer(g, layer, seq)?;
    let skip = projected_prompt.map_or(0, |p| g.rows(p));
    let body_out = g.slice_rows(out, skip, n_body);
    let readout_out = g.slice_rows(out, skip + n_body, 1);
    Ok((body_out, readout_out))
}

/// Runs one tail layer on `[carried, body, readout]` and keeps the updated
/// prompt rows as the carry for the next layer.
pub fn tail_layer_step<S: Scalar>(
    g: &mut Graph<S>,
    layer: &LayerVars,
    carried: Var,
    body: Var,
    readout: Var,
) -> Result<(Var, Var, Var)> {
    if g.cols(carried) != layer.dim {
        return Err(MmptError::shape(format!(
            "carried prompt width {} does not match branch width {}",
            g.cols(carried),
            layer.dim
        )));
    }
    let n_carr = g.rows(carried);
    let n_body = g.rows(body);
    let seq = g.concat_rows(&[carried, body, readout]);
    let out = transformer_layer(g, layer, seq)?;
    let carried_out = g.slice_rows(out, 0, n_carr);
    let body_out = g.slice_rows(out, n_carr, n_body);
    let readout_out = g.slice_rows(out, n_carr + n_body, 1);
    Ok((carried_out, body_out, readout_out))
}

/// Runs a whole branch: `depth` front layers with fresh prompts, then tail
/// layers carrying the last projection. With prompts disabled every layer is
/// a plain `[body, readout]` block.
pub fn run_branch<S: Scalar>(
    g: &mut Graph<S>,
    layers: &[LayerVars],
    prompts: Option<(&PromptVars, Modality)>,
    depth: usize,
    mut body: Var,
    mut readout: Var,
) -> Result<Var> {
    let active_depth = match prompts {
        Some((bank, _)) => depth.min(bank.slabs.len()),
        None => 0,
    };
    let mut carried: Option<Var> = None;
    for (i, layer) in layers.iter().enumerate() {
        if i < active_depth {
            let (bank, modality) = prompts.expect("active front layer implies a bank");
            let fresh = project_shared(g, bank, i, modality)?;
            let (b, r) = front_layer_step(g, layer, Some(fresh), body, readout)?;
            body = b;
            readout = r;
            if i + 1 == active_depth && active_depth < layers.len() {
                carried = Some(project_shared(g, bank, active_depth - 1, modality)?);
            }
        } else if let Some(c) = carried {
            let (c2, b, r) = tail_layer_step(g, layer, c, body, readout)?;
            carried = Some(c2);
            body = b;
            readout = r;
        } else {
            let (b, r) = front_layer_step(g, layer, None, body, readout)?;
            body = b;
            readout = r;
        }
    }
    Ok(readout)
}

// ── Text input assembly ──────────────────────────────────────────────────────

/// Registers one text branch's token tensors: trainable context tokens, a
/// frozen template block, and the per-class embedding table.
pub fn init_text_tokens<S: Scalar>(
    store: &mut ParamStore<S>,
    cfg: &MmptConfig,
    branch: Modality,
    n_classes: usize,
) {
    let prefix = branch.name();
    if cfg.ctx_tokens > 0 {
        store.init_normal(cfg.seed, &format!("{prefix}.ctx"), cfg.ctx_tokens, cfg.d_l, 1.0);
    }
    if cfg.fixed_tokens > 0 {
        let name = format!("{prefix}.fixed");
        store.init_normal(cfg.seed, &name, cfg.fixed_tokens, cfg.d_l, 1.0);
        store.freeze_intrinsic(&name);
    }
    store.init_normal(cfg.seed, &format!("{prefix}.class_table"), n_classes, cfg.d_l, 0.02);
}

#[derive(Debug, Clone, Copy)]
pub struct TextTokenVars {
    pub ctx: Option<Var>,
    pub fixed: Option<Var>,
    pub class_table: Var,
}

pub fn bind_text_tokens<S: Scalar>(
    store: &ParamStore<S>,
    g: &mut Graph<S>,
    cfg: &MmptConfig,
    branch: Modality,
) -> TextTokenVars {
    let prefix = branch.name();
    TextTokenVars {
        ctx: (cfg.ctx_tokens > 0).then(|| store.bind(g, &format!("{prefix}.ctx"))),
        fixed: (cfg.fixed_tokens > 0).then(|| store.bind(g, &format!("{prefix}.fixed"))),
        class_table: store.bind(g, &format!("{prefix}.class_table")),
    }
}

/// Body = `[ctx tokens, frozen template tokens]`; readout = the class row.
/// With no ctx and no template tokens the sequence is the readout alone.
pub fn build_text_input<S: Scalar>(
    g: &mut Graph<S>,
    tokens: &TextTokenVars,
    class_idx: usize,
) -> Result<(Option<Var>, Var)> {
    let n_classes = g.rows(tokens.class_table);
    if class_idx >= n_classes {
        return Err(MmptError::invalid(format!(
            "class index {class_idx} out of range for a {n_classes}-class table"
        )));
    }
    let readout = g.slice_rows(tokens.class_table, class_idx, 1);
    let body = match (tokens.ctx, tokens.fixed) {
        (Some(c), Some(f)) => Some(g.concat_rows(&[c, f])),
        (Some(c), None) => Some(c),
        (None, Some(f)) => Some(f),
        (None, None) => None,
    };
    Ok((body, readout))
}

/// Variant of [`run_branch`] for sequences whose body may be empty.
pub fn run_text_branch<S: Scalar>(
    g: &mut Graph<S>,
    layers: &[LayerVars],
    prompts: Option<(&PromptVars, Modality)>,
    depth: usize,
    body: Option<Var>,
    readout: Var,
) -> Result<Var> {
    match body {
        Some(b) => run_branch(g, layers, prompts, depth, b, readout),
        None => {
            // No body tokens: splice the readout through directly.
            let mut r = readout;
            let active = prompts.map_or(0, |(bank, _)| depth.min(bank.slabs.len()));
            let mut carried: Option<Var> = None;
            for (i, layer) in layers.iter().enumerate() {
                if i < active {
                    let (bank, modality) = prompts.expect("active layer implies bank");
                    let fresh = project_shared(g, bank, i, modality)?;
                    let seq = g.concat_rows(&[fresh, r]);
                    let out = transformer_layer(g, layer, seq)?;
                    let skip = g.rows(fresh);
                    r = g.slice_rows(out, skip, 1);
                    if i + 1 == active && active < layers.len() {
                        carried = Some(project_shared(g, bank, active - 1, modality)?);
                    }
                } else if let Some(c) = carried {
                    let n_c = g.rows(c);
                    let seq = g.concat_rows(&[c, r]);
                    let out = transformer_layer(g, layer, seq)?;
                    carried = Some(g.slice_rows(out, 0, n_c));
                    r = g.slice_rows(out, n_c, 1);
                } else {
                    r = transformer_layer(g, layer, r)?;
                }
            }
            Ok(r)
        }
    }
}
