//! The denoising network: patch image encoder, Fourier view encoder,
//! multiview fuser and the map decoder with cross-attention.

use ndarray::{s, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::autograd::{Graph, Var};
use super::config::ModelConfig;
use super::params::Parameters;
use super::tensor::Real;
use crate::diffusion::{Denoiser, MapPair};
use crate::posemap::{RayMap, TranslationMap};
use crate::{Error, Result};

/// One image plus its (optional) pose maps and normalized crop box.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewInput {
    /// `image_size x image_size x 3`, row-major HWC, values in [0, 1].
    pub image: Vec<f32>,
    /// Pose maps of the view; `None` for the query.
    pub pose_maps: Option<(RayMap, TranslationMap)>,
    /// Crop box `(x, y, w, h)` divided by the canvas size.
    pub bbox_norm: [f64; 4],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbeddingKind {
    Query,
    Template,
    Fused,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Embedding<F> {
    pub tokens: Array2<F>,
    pub kind: EmbeddingKind,
}

/// Encoded conditioning, reused across all denoising steps.
#[derive(Clone, Debug)]
pub struct Conditioning<F> {
    /// Query tokens (image patches, then map cells).
    pub query: Array2<F>,
    /// Fused template tokens, one block of `view_tokens()` rows per template.
    pub memory: Array2<F>,
    pub templates: usize,
}

/// Graph handles of a [`Conditioning`].
#[derive(Clone, Copy, Debug)]
pub struct CondVars {
    pub query: Var,
    pub memory: Var,
    pub templates: usize,
}

/// `(x, sin(2πB 2^k x), cos(2πB 2^k x))` for `k < d`, per scalar.
pub fn fourier_encode(x: &[f64], b: f64, d: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len() * (2 * d + 1));
    for &v in x {
        out.push(v);
        for k in 0..d {
            let a = 2.0 * std::f64::consts::PI * b * (1u64 << k) as f64 * v;
            out.push(a.sin());
            out.push(a.cos());
        }
    }
    out
}

/// Standard sinusoidal encoding of a scalar position.
pub fn sinusoid(pos: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let f = 1.0 / 10_000f64.powf(i as f64 / half as f64);
        out.push((pos * f).sin());
        out.push((pos * f).cos());
    }
    out.resize(dim, 0.0);
    out
}

fn grid_encoding(side: usize, pixel_pitch: f64, dim: usize) -> Array2<f64> {
    let mut a = Array2::zeros((side * side, dim));
    for i in 0..side {
        for j in 0..side {
            let y = sinusoid((i as f64 + 0.5) * pixel_pitch, dim / 2);
            let x = sinusoid((j as f64 + 0.5) * pixel_pitch, dim / 2);
            let mut row = a.row_mut(i * side + j);
            for (k, v) in y.into_iter().chain(x).enumerate() {
                row[k] = v;
            }
        }
    }
    a
}

fn cast<F: Real>(a: &Array2<f64>) -> Array2<F> {
    a.mapv(F::c)
}

#[derive(Clone, Debug)]
struct Consts<F> {
    pos_image: Array2<F>,
    pos_cell: Array2<F>,
    view_index: Array2<F>,
}

/// Names of parameters that start at zero.
fn zero_init(name: &str) -> bool {
    name.starts_with("head.")
        || name.ends_with(".ada.w")
        || name.ends_with(".ada.b")
        || name.ends_with(".mod")
}

/// The full denoising network.
#[derive(Clone, Debug)]
pub struct PoseNet<F: Real> {
    cfg: ModelConfig,
    params: Parameters<F>,
    consts: Consts<F>,
}

fn layout(cfg: &ModelConfig) -> Vec<(String, (usize, usize))> {
    let d = cfg.embed_dim;
    let h = d * cfg.mlp_ratio;
    let mut v: Vec<(String, (usize, usize))> = Vec::new();
    let mut lin = |name: &str, i: usize, o: usize| {
        v.push((format!("{name}.w"), (i, o)));
        v.push((format!("{name}.b"), (1, o)));
    };
    lin("img.patch", cfg.patch_dim(), d);
    lin("img.fc1", d, h);
    lin("img.fc2", h, d);
    lin("view.proj", cfg.view_feature_dim(), d);
    for i in 0..cfg.fuser_blocks {
        lin(&format!("fuse.{i}.qkv"), d, 3 * d);
        lin(&format!("fuse.{i}.out"), d, d);
        lin(&format!("fuse.{i}.fc1"), d, h);
        lin(&format!("fuse.{i}.fc2"), h, d);
    }
    lin("time.fc1", d, d);
    lin("time.fc2", d, d);
    lin("dec.in", 6, d);
    for i in 0..cfg.decoder_blocks {
        lin(&format!("dec.{i}.ada"), d, 6 * d);
        lin(&format!("dec.{i}.qkv"), d, 3 * d);
        lin(&format!("dec.{i}.out"), d, d);
        lin(&format!("dec.{i}.xq"), d, d);
        lin(&format!("dec.{i}.xkv"), d, 2 * d);
        lin(&format!("dec.{i}.xout"), d, d);
        lin(&format!("dec.{i}.fc1"), d, h);
        lin(&format!("dec.{i}.fc2"), h, d);
    }
    lin("dec.final.ada", d, 2 * d);
    lin("head.rays", d, 3);
    lin("head.trans", d, 3);
    v.push(("tok.type".into(), (2, d)));
    for i in 0..cfg.fuser_blocks {
        v.push((format!("fuse.{i}.mod"), (4, d)));
    }
    v
}

fn init_params<F: Real>(cfg: &ModelConfig, seed: u64) -> Result<Parameters<F>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = Parameters::new();
    for (name, (r, c)) in layout(cfg) {
        let a = if zero_init(&name) || name.ends_with(".b") {
            Array2::zeros((r, c))
        } else {
            let std = if name == "tok.type" { 0.5 } else { 1.0 / (r as f64).sqrt() };
            let n = Normal::new(0.0, std).expect("finite std");
            Array2::from_shape_simple_fn((r, c), || F::c(n.sample(&mut rng)))
        };
        p.insert(&name, a)?;
    }
    Ok(p)
}

/// Groups of rows for a grouped attention call.
#[derive(Clone, Copy)]
struct Groups {
    q: usize,
    k: usize,
}

impl<F: Real> PoseNet<F> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let params = init_params(&cfg, seed)?;
        Self::from_parts(cfg, params)
    }

    /// Wraps existing parameters after checking names and shapes.
    pub fn from_parts(cfg: ModelConfig, params: Parameters<F>) -> Result<Self> {
        cfg.validate()?;
        let want = layout(&cfg);
        if want.len() != params.len() {
            return Err(Error::Contract(format!(
                "config needs {} parameters, store has {}",
                want.len(),
                params.len()
            )));
        }
        for (name, shape) in &want {
            match params.get(name) {
                Some(a) if a.dim() == *shape => {}
                Some(a) => {
                    return Err(Error::Contract(format!(
                        "parameter {name}: shape {:?}, expected {shape:?}",
                        a.dim()
                    )))
                }
                None => return Err(Error::Contract(format!("missing parameter {name}"))),
            }
        }
        let d = cfg.embed_dim;
        let g = cfg.image_size / cfg.patch_size;
        let pitch_cell = cfg.image_size as f64 / cfg.map_side as f64;
        let mut view_index = Array2::zeros((cfg.templates, d));
        for v in 0..cfg.templates {
            for (k, x) in sinusoid((v + 1) as f64, d).into_iter().enumerate() {
                view_index[[v, k]] = x;
            }
        }
        let consts = Consts {
            pos_image: cast(&grid_encoding(g, cfg.patch_size as f64, d)),
            pos_cell: cast(&grid_encoding(cfg.map_side, pitch_cell, d)),
            view_index: cast(&view_index),
        };
        Ok(PoseNet { cfg, params, consts })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &Parameters<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Parameters<F> {
        &mut self.params
    }

    pub fn into_params(self) -> Parameters<F> {
        self.params
    }

    /// Same weights in another precision.
    pub fn cast<G: Real>(&self) -> PoseNet<G> {
        PoseNet::from_parts(self.cfg.clone(), self.params.cast()).expect("layout unchanged")
    }

    /// Non-overlapping patches flattened row-major (dy, dx, channel).
    pub fn patchify(&self, image: &[f32]) -> Result<Array2<F>> {
        let (s, ps) = (self.cfg.image_size, self.cfg.patch_size);
        if image.len() != s * s * 3 {
            return Err(Error::Contract(format!(
                "image has {} values, expected {s}x{s}x3",
                image.len()
            )));
        }
        let g = s / ps;
        let mut out = Array2::zeros((g * g, self.cfg.patch_dim()));
        for pr in 0..g {
            for pc in 0..g {
                let mut row = out.row_mut(pr * g + pc);
                let mut k = 0;
                for dy in 0..ps {
                    for dx in 0..ps {
                        let base = ((pr * ps + dy) * s + pc * ps + dx) * 3;
                        for ch in 0..3 {
                            row[k] = F::c(image[base + ch] as f64);
                            k += 1;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Per-cell view features (`p² x D_V`). Pose channels are exactly zero
    /// for views without pose maps and when pose conditioning is off.
    pub fn view_features(&self, view: &ViewInput) -> Result<Array2<F>> {
        let c = &self.cfg;
        let p = c.map_side;
        let d = c.fourier_bands;
        let pose = if c.condition_template_pose { view.pose_maps.as_ref() } else { None };
        if let Some((r, t)) = pose {
            if r.side() != p || t.side() != p {
                return Err(Error::Contract(format!(
                    "pose maps of side {}/{}, expected {p}",
                    r.side(),
                    t.side()
                )));
            }
        }
        let [bx, by, bw, bh] = view.bbox_norm;
        let n_pose = c.k_rot + c.k_trans;
        let n_scalar = n_pose + c.k_coord;
        let mut out = Array2::zeros((p * p, c.view_feature_dim()));
        for i in 0..p {
            for j in 0..p {
                let cell = i * p + j;
                let mut sc = vec![0.0; n_scalar];
                if let Some((r, t)) = pose {
                    for (k, v) in sc.iter_mut().take(c.k_rot).enumerate() {
                        *v = r.cells()[cell][k];
                    }
                    for k in 0..c.k_trans {
                        sc[c.k_rot + k] = t.cells()[cell][k];
                    }
                }
                let coord = [
                    bx + (j as f64 + 0.5) / p as f64 * bw,
                    by + (i as f64 + 0.5) / p as f64 * bh,
                    bw,
                ];
                sc[n_pose..].copy_from_slice(&coord[..c.k_coord]);
                let mut row = out.row_mut(cell);
                // identity slots: the first d raw scalars
                for k in 0..d.min(n_scalar) {
                    if pose.is_some() || k >= n_pose {
                        row[k] = F::c(sc[k]);
                    }
                }
                let enc = fourier_encode(&sc, c.frequency_base, d);
                for (s_idx, chunk) in enc.chunks_exact(2 * d + 1).enumerate() {
                    if pose.is_none() && s_idx < n_pose {
                        continue;
                    }
                    let at = d + s_idx * 2 * d;
                    for (k, v) in chunk[1..].iter().enumerate() {
                        row[at + k] = F::c(*v);
                    }
                }
            }
        }
        Ok(out)
    }

    fn lin(&self, g: &mut Graph<F>, x: Var, name: &str) -> Result<Var> {
        let w = g.param(&format!("{name}.w"))?;
        let b = g.param(&format!("{name}.b"))?;
        g.linear(x, w, Some(b))
    }

    fn mlp(&self, g: &mut Graph<F>, x: Var, prefix: &str) -> Result<Var> {
        let h = self.lin(g, x, &format!("{prefix}.fc1"))?;
        let h = g.gelu(h);
        self.lin(g, h, &format!("{prefix}.fc2"))
    }

    fn self_attention(&self, g: &mut Graph<F>, x: Var, prefix: &str, groups: usize) -> Result<Var> {
        let d = self.cfg.embed_dim;
        let qkv = self.lin(g, x, &format!("{prefix}.qkv"))?;
        let q = g.slice_cols(qkv, 0, d)?;
        let k = g.slice_cols(qkv, d, 2 * d)?;
        let v = g.slice_cols(qkv, 2 * d, 3 * d)?;
        let a = g.attention(q, k, v, self.cfg.heads, groups, groups)?;
        self.lin(g, a, &format!("{prefix}.out"))
    }

    fn cross_attention(&self, g: &mut Graph<F>, x: Var, mem: Var, prefix: &str, groups: Groups) -> Result<Var> {
        let d = self.cfg.embed_dim;
        let h = g.layer_norm(x);
        let q = self.lin(g, h, &format!("{prefix}.xq"))?;
        let m = g.layer_norm(mem);
        let kv = self.lin(g, m, &format!("{prefix}.xkv"))?;
        let k = g.slice_cols(kv, 0, d)?;
        let v = g.slice_cols(kv, d, 2 * d)?;
        let a = g.attention(q, k, v, self.cfg.heads, groups.q, groups.k)?;
        self.lin(g, a, &format!("{prefix}.xout"))
    }

    /// Patch tokens before the residual mixing MLP.
    pub fn patch_tokens_g(&self, g: &mut Graph<F>, image: &[f32]) -> Result<Var> {
        let patches = g.constant(self.patchify(image)?);
        self.lin(g, patches, "img.patch")
    }

    pub fn encode_image_g(&self, g: &mut Graph<F>, image: &[f32]) -> Result<Var> {
        let x = self.patch_tokens_g(g, image)?;
        let m = self.mlp(g, x, "img")?;
        g.add(x, m)
    }

    pub fn encode_view_g(&self, g: &mut Graph<F>, view: &ViewInput) -> Result<Var> {
        let f = g.constant(self.view_features(view)?);
        self.lin(g, f, "view.proj")
    }

    /// Image and view tokens of one view with patch-position and type
    /// encodings, plus the view-index encoding for template `index`.
    pub fn assemble_g(&self, g: &mut Graph<F>, image: Var, view: Var, index: Option<usize>) -> Result<Var> {
        let (ni, nv) = (self.cfg.image_tokens(), self.cfg.map_cells());
        if g.shape(image).0 != ni || g.shape(view).0 != nv {
            return Err(Error::Contract(format!(
                "view has {}+{} tokens, expected {ni}+{nv}",
                g.shape(image).0,
                g.shape(view).0
            )));
        }
        let mut extra = Array2::zeros((ni + nv, self.cfg.embed_dim));
        extra.slice_mut(s![..ni, ..]).assign(&self.consts.pos_image);
        extra.slice_mut(s![ni.., ..]).assign(&self.consts.pos_cell);
        if let (Some(v), true) = (index, self.cfg.view_index_encoding) {
            if v >= self.cfg.templates {
                return Err(Error::Contract(format!("template index {v} >= {}", self.cfg.templates)));
            }
            extra += &self.consts.view_index.slice(s![v..v + 1, ..]);
        }
        let x = g.concat_rows(&[image, view])?;
        let ty = g.param("tok.type")?;
        let kinds: Vec<usize> = (0..ni + nv).map(|r| usize::from(r >= ni)).collect();
        let ty = g.gather_rows(ty, &kinds)?;
        let x = g.add(x, ty)?;
        let e = g.constant(extra);
        g.add(x, e)
    }

    /// Runs the fuser blocks over `groups` stacked, independent sequences.
    pub fn fuse_g(&self, g: &mut Graph<F>, tokens: Var, groups: usize) -> Result<Var> {
        let mut x = tokens;
        for i in 0..self.cfg.fuser_blocks {
            let p = format!("fuse.{i}");
            let m = g.param(&format!("{p}.mod"))?;
            let rows: Vec<Var> = (0..4).map(|r| g.slice_rows(m, r, r + 1)).collect::<Result<_>>()?;
            let h = g.layer_norm(x);
            let h = g.modulate(h, rows[0], rows[1])?;
            let a = self.self_attention(g, h, &p, groups)?;
            x = g.add(x, a)?;
            let h = g.layer_norm(x);
            let h = g.modulate(h, rows[2], rows[3])?;
            let m = self.mlp(g, h, &p)?;
            x = g.add(x, m)?;
            g.check_finite(x, &format!("fuser block {i}"))?;
        }
        Ok(x)
    }

    fn view_g(&self, g: &mut Graph<F>, view: &ViewInput, index: Option<usize>) -> Result<Var> {
        let img = self.encode_image_g(g, &view.image)?;
        let v = self.encode_view_g(g, view)?;
        self.assemble_g(g, img, v, index)
    }

    /// Encodes the query and fuses the templates.
    pub fn condition_g(&self, g: &mut Graph<F>, query: &ViewInput, templates: &[ViewInput]) -> Result<CondVars> {
        if templates.is_empty() || templates.len() > self.cfg.templates {
            return Err(Error::Contract(format!(
                "{} templates, expected 1..={}",
                templates.len(),
                self.cfg.templates
            )));
        }
        let q_view = ViewInput {
            pose_maps: None,
            ..query.clone()
        };
        let q = self.view_g(g, &q_view, None)?;
        let views: Vec<Var> = templates
            .iter()
            .enumerate()
            .map(|(i, t)| self.view_g(g, t, Some(i)))
            .collect::<Result<_>>()?;
        let all = g.concat_rows(&views)?;
        let groups = if self.cfg.single_view { templates.len() } else { 1 };
        let memory = self.fuse_g(g, all, groups)?;
        Ok(CondVars {
            query: q,
            memory,
            templates: templates.len(),
        })
    }

    /// Clean-map predictions for `noisy` (`N p² x 6`: rays then
    /// translation) at timestep `t`. Returns the ray and translation rows.
    pub fn denoise_g(&self, g: &mut Graph<F>, cond: &CondVars, noisy: Array2<F>, t: usize) -> Result<(Var, Var)> {
        let c = &self.cfg;
        let n = cond.templates;
        let (cells, lv) = (c.map_cells(), c.view_tokens());
        let lq = g.shape(cond.query).0;
        if noisy.dim() != (n * cells, 6) {
            return Err(Error::Contract(format!(
                "noisy maps {:?}, expected ({}, 6)",
                noisy.dim(),
                n * cells
            )));
        }
        if t == 0 {
            return Err(Error::Contract("timestep must be at least 1".into()));
        }
        let temb = g.constant(cast(&Array2::from_shape_vec((1, c.embed_dim), sinusoid(t as f64, c.embed_dim)).expect("dim")));
        let temb = self.lin(g, temb, "time.fc1")?;
        let temb = g.silu(temb);
        let temb = self.lin(g, temb, "time.fc2")?;
        let cond_act = g.silu(temb);

        let x_in = g.constant(noisy);
        let mut maps = self.lin(g, x_in, "dec.in")?;
        let mut pos = Array2::zeros((n * cells, c.embed_dim));
        for j in 0..n {
            pos.slice_mut(s![j * cells..(j + 1) * cells, ..]).assign(&self.consts.pos_cell);
        }
        let pos = g.constant(pos);
        maps = g.add(maps, pos)?;
        let view_rows: Vec<usize> = (0..n)
            .flat_map(|j| (0..cells).map(move |k| j * lv + c.image_tokens() + k))
            .collect();
        let vt = g.gather_rows(cond.memory, &view_rows)?;
        maps = g.add(maps, vt)?;

        let seq_len = cells + lq;
        let joined = g.concat_rows(&[maps, cond.query])?;
        let idx: Vec<usize> = (0..n)
            .flat_map(|j| (0..cells).map(move |k| j * cells + k).chain((0..lq).map(move |k| n * cells + k)))
            .collect();
        let mut x = g.gather_rows(joined, &idx)?;
        let cross = Groups {
            q: n,
            k: if c.single_view { n } else { 1 },
        };
        let d = c.embed_dim;
        for i in 0..c.decoder_blocks {
            let p = format!("dec.{i}");
            let ada = self.lin(g, cond_act, &format!("{p}.ada"))?;
            let part: Vec<Var> = (0..6).map(|k| g.slice_cols(ada, k * d, (k + 1) * d)).collect::<Result<_>>()?;
            let h = g.layer_norm(x);
            let h = g.modulate(h, part[0], part[1])?;
            let a = self.self_attention(g, h, &p, n)?;
            let a = g.gate_row(a, part[2])?;
            x = g.add(x, a)?;
            let xa = self.cross_attention(g, x, cond.memory, &p, cross)?;
            x = g.add(x, xa)?;
            let h = g.layer_norm(x);
            let h = g.modulate(h, part[3], part[4])?;
            let m = self.mlp(g, h, &p)?;
            let m = g.gate_row(m, part[5])?;
            x = g.add(x, m)?;
            g.check_finite(x, &format!("decoder block {i}"))?;
        }
        let map_rows: Vec<usize> = (0..n).flat_map(|j| (0..cells).map(move |k| j * seq_len + k)).collect();
        let m = g.gather_rows(x, &map_rows)?;
        let ada = self.lin(g, cond_act, "dec.final.ada")?;
        let shift = g.slice_cols(ada, 0, d)?;
        let scale = g.slice_cols(ada, d, 2 * d)?;
        let h = g.layer_norm(m);
        let h = g.modulate(h, shift, scale)?;
        let rays = self.lin(g, h, "head.rays")?;
        let trans = self.lin(g, h, "head.trans")?;
        g.check_finite(rays, "ray head")?;
        g.check_finite(trans, "translation head")?;
        Ok((rays, trans))
    }

    pub fn encode_image(&self, image: &[f32]) -> Result<Embedding<F>> {
        let mut g = Graph::inference(&self.params);
        let v = self.encode_image_g(&mut g, image)?;
        Ok(Embedding {
            tokens: g.value(v).clone(),
            kind: EmbeddingKind::Template,
        })
    }

    pub fn encode_view(&self, view: &ViewInput) -> Result<Embedding<F>> {
        let mut g = Graph::inference(&self.params);
        let v = self.encode_view_g(&mut g, view)?;
        let kind = if view.pose_maps.is_some() {
            EmbeddingKind::Template
        } else {
            EmbeddingKind::Query
        };
        Ok(Embedding {
            tokens: g.value(v).clone(),
            kind,
        })
    }

    /// Fuses `(image, view)` embedding pairs given in template order.
    pub fn fuse_multiview(&self, per_view: &[(Embedding<F>, Embedding<F>)]) -> Result<Embedding<F>> {
        if per_view.is_empty() {
            return Err(Error::Contract("no views to fuse".into()));
        }
        let mut g = Graph::inference(&self.params);
        let mut blocks = Vec::new();
        for (i, (im, vw)) in per_view.iter().enumerate() {
            let a = g.constant(im.tokens.clone());
            let b = g.constant(vw.tokens.clone());
            blocks.push(self.assemble_g(&mut g, a, b, Some(i))?);
        }
        let all = g.concat_rows(&blocks)?;
        let groups = if self.cfg.single_view { per_view.len() } else { 1 };
        let out = self.fuse_g(&mut g, all, groups)?;
        Ok(Embedding {
            tokens: g.value(out).clone(),
            kind: EmbeddingKind::Fused,
        })
    }

    pub fn condition(&self, query: &ViewInput, templates: &[ViewInput]) -> Result<Conditioning<F>> {
        let mut g = Graph::inference(&self.params);
        let c = self.condition_g(&mut g, query, templates)?;
        Ok(Conditioning {
            query: g.value(c.query).clone(),
            memory: g.value(c.memory).clone(),
            templates: c.templates,
        })
    }

    /// Packs map pairs into the `N p² x 6` decoder input.
    pub fn pack_maps(&self, maps: &[MapPair]) -> Result<Array2<F>> {
        let cells = self.cfg.map_cells();
        let mut out = Array2::zeros((maps.len() * cells, 6));
        for (j, m) in maps.iter().enumerate() {
            if m.rays.len() != cells * 3 || m.trans.len() != cells * 3 {
                return Err(Error::Contract(format!(
                    "map pair with {}/{} values, expected {}",
                    m.rays.len(),
                    m.trans.len(),
                    cells * 3
                )));
            }
            for k in 0..cells {
                for ch in 0..3 {
                    out[[j * cells + k, ch]] = F::c(m.rays[k * 3 + ch]);
                    out[[j * cells + k, 3 + ch]] = F::c(m.trans[k * 3 + ch]);
                }
            }
        }
        Ok(out)
    }
}

impl<F: Real> Denoiser for PoseNet<F> {
    type Cond = Conditioning<F>;

    fn denoise(&self, noisy: &[MapPair], t: usize, cond: &Conditioning<F>) -> Result<Vec<MapPair>> {
        if noisy.len() != cond.templates {
            return Err(Error::Contract(format!(
                "{} noisy hypotheses for {} templates",
                noisy.len(),
                cond.templates
            )));
        }
        let mut g = Graph::inference(&self.params);
        let cv = CondVars {
            query: g.constant(cond.query.clone()),
            memory: g.constant(cond.memory.clone()),
            templates: cond.templates,
        };
        let x = self.pack_maps(noisy)?;
        let (r, tr) = self.denoise_g(&mut g, &cv, x, t)?;
        let cells = self.cfg.map_cells();
        let (rv, tv) = (g.value(r), g.value(tr));
        Ok((0..noisy.len())
            .map(|j| {
                let rows = s![j * cells..(j + 1) * cells, ..];
                MapPair {
                    rays: rv.slice(rows).iter().map(|v| v.f64()).collect(),
                    trans: tv.slice(rows).iter().map(|v| v.f64()).collect(),
                }
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Rotation;
    use crate::posemap::{canonical_rays, encode_rotation, CellMap};
    use nalgebra::Vector3;
    use rand::Rng;

    fn random_image(rng: &mut ChaCha8Rng, s: usize) -> Vec<f32> {
        (0..s * s * 3).map(|_| rng.random::<f32>()).collect()
    }

    pub(crate) fn random_view(rng: &mut ChaCha8Rng, cfg: &ModelConfig, posed: bool) -> ViewInput {
        let grid = canonical_rays(cfg.map_side, cfg.grid_half_extent).unwrap();
        let pose_maps = posed.then(|| {
            let r = encode_rotation(&Rotation::random(rng), &grid);
            let cells = (0..cfg.map_cells())
                .map(|_| Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(1.0..8.0)))
                .collect();
            (r, CellMap::new(cfg.map_side, cells).unwrap())
        });
        ViewInput {
            image: random_image(rng, cfg.image_size),
            pose_maps,
            bbox_norm: [rng.random_range(0.0..0.3), rng.random_range(0.0..0.3), 0.6, 0.6],
        }
    }

    #[test]
    fn fourier_examples() {
        let z = fourier_encode(&[0.0], 0.25, 3);
        assert_eq!(z, vec![0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let q = fourier_encode(&[0.25], 1.0, 1);
        assert_eq!(q[0], 0.25);
        assert!((q[1] - 1.0).abs() < 1e-15 && q[2].abs() < 1e-15);
        let b = 0.25;
        let a = fourier_encode(&[0.3], b, 1);
        let c = fourier_encode(&[0.3 + 1.0 / b], b, 1);
        assert!((a[1] - c[1]).abs() < 1e-12 && (a[2] - c[2]).abs() < 1e-12);
        assert!(a[0] != c[0]);
    }

    #[test]
    fn view_features_layout_and_pose_switch() {
        let cfg = ModelConfig::default();
        let net = PoseNet::<f64>::new(ModelConfig { embed_dim: 16, fuser_blocks: 0, decoder_blocks: 0, ..cfg.clone() }, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = random_view(&mut rng, &cfg, true);
        let f = net.view_features(&v).unwrap();
        assert_eq!(f.dim(), (64, 152));
        let enc = net.encode_view(&v).unwrap();
        assert_eq!(enc.tokens.dim(), (64, 16));

        let zero = ViewInput {
            pose_maps: Some((CellMap::filled(8, Vector3::zeros()), CellMap::filled(8, Vector3::zeros()))),
            bbox_norm: [0.0; 4],
            ..v.clone()
        };
        let f0 = net.view_features(&zero).unwrap();
        let d = cfg.fourier_bands;
        for row in f0.rows() {
            for s_idx in 0..9 {
                for k in 0..d {
                    assert_eq!(row[d + s_idx * 2 * d + 2 * k], 0.0);
                }
            }
        }

        let off = PoseNet::<f64>::from_parts(
            ModelConfig { condition_template_pose: false, ..net.config().clone() },
            net.params().clone(),
        )
        .unwrap();
        let f_off = off.view_features(&v).unwrap();
        let n_pose = cfg.k_rot + cfg.k_trans;
        for row in f_off.rows() {
            for k in 0..d.min(n_pose) {
                assert_eq!(row[k], 0.0);
            }
            for k in d..d + n_pose * 2 * d {
                assert_eq!(row[k], 0.0);
            }
            assert!(row.iter().any(|x| *x != 0.0));
        }
        let bad = ViewInput {
            pose_maps: Some((CellMap::filled(4, Vector3::zeros()), CellMap::filled(4, Vector3::zeros()))),
            ..v
        };
        assert!(matches!(net.view_features(&bad), Err(Error::Contract(_))));
    }

    #[test]
    fn image_encoder_shapes_and_patch_locality() {
        let cfg = ModelConfig { embed_dim: 16, fuser_blocks: 0, decoder_blocks: 0, ..ModelConfig::default() };
        let net = PoseNet::<f64>::new(cfg, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = random_image(&mut rng, 32);
        let e = net.encode_image(&img).unwrap();
        assert_eq!(e.tokens.dim(), (64, 16));
        assert_eq!(net.encode_image(&img).unwrap(), e);
        assert!(net.encode_image(&img[..100]).is_err());

        // swap patches (0,0) and (2,5)
        let mut swapped = img.clone();
        for dy in 0..4 {
            for dx in 0..4 {
                for ch in 0..3 {
                    let a = ((dy) * 32 + dx) * 3 + ch;
                    let b = ((2 * 4 + dy) * 32 + 5 * 4 + dx) * 3 + ch;
                    swapped.swap(a, b);
                }
            }
        }
        let tokens = |im: &[f32]| {
            let mut g = Graph::inference(net.params());
            let v = net.patch_tokens_g(&mut g, im).unwrap();
            g.value(v).clone()
        };
        let (t0, t1) = (tokens(&img), tokens(&swapped));
        let (a, b) = (0, 2 * 8 + 5);
        assert_eq!(t0.row(a), t1.row(b));
        assert_eq!(t0.row(b), t1.row(a));
        assert_eq!(t0.row(7), t1.row(7));
    }

    #[test]
    fn fuser_identity_and_equivariance() {
        let cfg = ModelConfig { embed_dim: 16, heads: 2, fuser_blocks: 0, decoder_blocks: 1, map_side: 4, ..ModelConfig::default() };
        let net = PoseNet::<f64>::new(cfg.clone(), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = random_view(&mut rng, &cfg, true);
        let pair = (net.encode_image(&v.image).unwrap(), net.encode_view(&v).unwrap());
        let fused = net.fuse_multiview(std::slice::from_ref(&pair)).unwrap();
        let mut g = Graph::inference(net.params());
        let a = g.constant(pair.0.tokens.clone());
        let b = g.constant(pair.1.tokens.clone());
        let x = net.assemble_g(&mut g, a, b, Some(0)).unwrap();
        assert_eq!(&fused.tokens, g.value(x));
        assert_eq!(fused.kind, EmbeddingKind::Fused);
        assert!(net.fuse_multiview(&[]).is_err());

        let cfg2 = ModelConfig { fuser_blocks: 2, view_index_encoding: false, ..cfg };
        let mut net2 = PoseNet::<f64>::new(cfg2, 6).unwrap();
        for i in 0..net2.params().len() {
            if net2.params().name(i).ends_with(".mod") {
                let m = net2.params_mut().value_mut(i);
                m.mapv_inplace(|_| rng.random_range(-0.3..0.3));
            }
        }
        let views: Vec<_> = (0..3).map(|_| random_view(&mut rng, net2.config(), true)).collect();
        let pairs: Vec<_> = views
            .iter()
            .map(|v| (net2.encode_image(&v.image).unwrap(), net2.encode_view(v).unwrap()))
            .collect();
        let f = net2.fuse_multiview(&pairs).unwrap();
        let perm = [2, 0, 1];
        let permuted: Vec<_> = perm.iter().map(|&i| pairs[i].clone()).collect();
        let fp = net2.fuse_multiview(&permuted).unwrap();
        let lv = net2.config().view_tokens();
        for (slot, &src) in perm.iter().enumerate() {
            let a = fp.tokens.slice(s![slot * lv..(slot + 1) * lv, ..]);
            let b = f.tokens.slice(s![src * lv..(src + 1) * lv, ..]);
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() < 1e-10);
            }
        }
        for seed in 0..100 {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let vs: Vec<_> = (0..2).map(|_| random_view(&mut r, net2.config(), true)).collect();
            let ps: Vec<_> = vs.iter().map(|v| (net2.encode_image(&v.image).unwrap(), net2.encode_view(v).unwrap())).collect();
            assert!(net2.fuse_multiview(&ps).unwrap().tokens.iter().all(|x| x.is_finite()));
        }
    }

    #[test]
    fn zero_heads_predict_zero_with_correct_shapes() {
        let cfg = ModelConfig::tiny();
        let net = PoseNet::<f64>::new(cfg.clone(), 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let q = random_view(&mut rng, &cfg, false);
        let ts: Vec<_> = (0..2).map(|_| random_view(&mut rng, &cfg, true)).collect();
        let cond = net.condition(&q, &ts).unwrap();
        let noisy: Vec<MapPair> = (0..2)
            .map(|_| MapPair {
                rays: (0..48).map(|_| rng.random_range(-2.0..2.0)).collect(),
                trans: (0..48).map(|_| rng.random_range(-2.0..2.0)).collect(),
            })
            .collect();
        let out = net.denoise(&noisy, 5, &cond).unwrap();
        assert_eq!(out.len(), 2);
        for m in &out {
            assert_eq!(m.rays.len(), 48);
            assert!(m.rays.iter().chain(&m.trans).all(|v| *v == 0.0));
        }
        assert!(net.denoise(&noisy[..1], 5, &cond).is_err());
    }

    #[test]
    fn single_view_ignores_other_templates() {
        let cfg = ModelConfig { single_view: true, ..ModelConfig::tiny() };
        let mut net = PoseNet::<f64>::new(cfg.clone(), 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for i in 0..net.params().len() {
            let m = net.params_mut().value_mut(i);
            m.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        }
        let q = random_view(&mut rng, &cfg, false);
        let t0 = random_view(&mut rng, &cfg, true);
        let t1 = random_view(&mut rng, &cfg, true);
        let t1b = random_view(&mut rng, &cfg, true);
        let noisy = vec![
            MapPair { rays: vec![0.1; 48], trans: vec![0.2; 48] },
            MapPair { rays: vec![0.3; 48], trans: vec![0.4; 48] },
        ];
        let a = net.denoise(&noisy, 3, &net.condition(&q, &[t0.clone(), t1]).unwrap()).unwrap();
        let b = net.denoise(&noisy, 3, &net.condition(&q, &[t0, t1b]).unwrap()).unwrap();
        assert_eq!(a[0], b[0]);
        assert_ne!(a[1], b[1]);
    }

    #[test]
    fn layout_mismatch_is_rejected() {
        let net = PoseNet::<f64>::new(ModelConfig::tiny(), 0).unwrap();
        let other = ModelConfig { decoder_blocks: 2, ..ModelConfig::tiny() };
        assert!(PoseNet::<f64>::from_parts(other, net.params().clone()).is_err());
    }
}
