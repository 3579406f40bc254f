//! A small query-based set-prediction detector: patch embedding, a pre-norm
//! transformer encoder/decoder with plain multi-head attention, and class /
//! box heads over a fixed set of learned object queries.

mod checkpoint;

pub use checkpoint::{load_params, params_from_bytes, params_to_bytes, save_params, CheckpointError};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::geometry::BBox;
use crate::tensor::{softmax, ParamSet, ParamVars, Tape, Tensor, TensorError, Var};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid detector config: {0}")]
    Config(String),
    #[error("image is {got_w}x{got_h}, model expects {want}x{want}")]
    ImageSize { got_w: usize, got_h: usize, want: usize },
    #[error("non-finite activations in {0}")]
    NonFinite(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub num_queries: usize,
    pub num_classes: usize,
    /// Hidden width of the feed-forward blocks.
    pub ffn_dim: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            embed_dim: 64,
            heads: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            num_queries: 12,
            num_classes: 3,
            ffn_dim: 128,
        }
    }
}

/// Objects per scene never exceed this, so it bounds the query count from below.
pub const MAX_OBJECTS_PER_IMAGE: usize = 4;

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.image_size == 0 || self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return fail(format!("image_size {} not divisible by patch_size {}", self.image_size, self.patch_size));
        }
        if self.heads == 0 || self.embed_dim == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return fail(format!("embed_dim {} not divisible by heads {}", self.embed_dim, self.heads));
        }
        if !self.embed_dim.is_multiple_of(4) {
            return fail(format!("embed_dim {} must be a multiple of 4 for 2-D positional encoding", self.embed_dim));
        }
        if self.num_queries < MAX_OBJECTS_PER_IMAGE {
            return fail(format!("num_queries {} below max objects per image {MAX_OBJECTS_PER_IMAGE}", self.num_queries));
        }
        if self.num_classes == 0 || self.ffn_dim == 0 {
            return fail("num_classes and ffn_dim must be positive".into());
        }
        Ok(())
    }

    pub fn num_logits(&self) -> usize {
        self.num_classes + 1
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    /// Name and shape of every parameter tensor, in storage order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f) = (self.embed_dim, self.ffn_dim);
        let mut out: Vec<(String, Vec<usize>)> = vec![
            ("patch_embed.weight".into(), vec![self.patch_dim(), d]),
            ("patch_embed.bias".into(), vec![d]),
        ];
        let norm = |out: &mut Vec<(String, Vec<usize>)>, p: &str| {
            out.push((format!("{p}.gamma"), vec![d]));
            out.push((format!("{p}.beta"), vec![d]));
        };
        let attn = |out: &mut Vec<(String, Vec<usize>)>, p: &str| {
            for m in ["q", "k", "v", "o"] {
                out.push((format!("{p}.w{m}"), vec![d, d]));
                out.push((format!("{p}.b{m}"), vec![d]));
            }
        };
        let ffn = |out: &mut Vec<(String, Vec<usize>)>, p: &str| {
            out.push((format!("{p}.w1"), vec![d, f]));
            out.push((format!("{p}.b1"), vec![f]));
            out.push((format!("{p}.w2"), vec![f, d]));
            out.push((format!("{p}.b2"), vec![d]));
        };
        for l in 0..self.encoder_layers {
            norm(&mut out, &format!("encoder.{l}.norm1"));
            attn(&mut out, &format!("encoder.{l}.self_attn"));
            norm(&mut out, &format!("encoder.{l}.norm2"));
            ffn(&mut out, &format!("encoder.{l}.ffn"));
        }
        norm(&mut out, "encoder.norm");
        out.push(("query.content".into(), vec![self.num_queries, d]));
        out.push(("query.pos".into(), vec![self.num_queries, d]));
        for l in 0..self.decoder_layers {
            norm(&mut out, &format!("decoder.{l}.norm1"));
            attn(&mut out, &format!("decoder.{l}.self_attn"));
            norm(&mut out, &format!("decoder.{l}.norm2"));
            attn(&mut out, &format!("decoder.{l}.cross_attn"));
            norm(&mut out, &format!("decoder.{l}.norm3"));
            ffn(&mut out, &format!("decoder.{l}.ffn"));
        }
        norm(&mut out, "decoder.norm");
        out.push(("class_head.weight".into(), vec![d, self.num_logits()]));
        out.push(("class_head.bias".into(), vec![self.num_logits()]));
        out.push(("box_head.w1".into(), vec![d, d]));
        out.push(("box_head.b1".into(), vec![d]));
        out.push(("box_head.w2".into(), vec![d, 4]));
        out.push(("box_head.b2".into(), vec![4]));
        out
    }
}

/// Deterministic initialization: linear weights uniform in ±1/√fan_in, biases
/// zero, norm scales one, query embeddings standard normal / √dim.
pub fn init_model(cfg: &DetectorConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    let inv_sqrt_d = 1.0 / (cfg.embed_dim as f64).sqrt();
    for (name, shape) in cfg.param_shapes() {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = if name.starts_with("query.") {
            (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * inv_sqrt_d
                })
                .collect()
        } else if name.ends_with(".gamma") {
            vec![1.0; n]
        } else if shape.len() == 2 {
            let bound = 1.0 / (shape[0] as f64).sqrt();
            (0..n).map(|_| rng.random_range(-bound..bound)).collect()
        } else {
            vec![0.0; n]
        };
        params.insert(name, Tensor::new(shape, data)?);
    }
    Ok(params)
}

/// Checks that `params` has exactly the layout `cfg` produces.
pub fn check_params(cfg: &DetectorConfig, params: &ParamSet) -> Result<()> {
    let want = cfg.param_shapes();
    if want.len() != params.len() {
        return Err(ModelError::Config(format!(
            "checkpoint has {} tensors, config needs {}",
            params.len(),
            want.len()
        )));
    }
    for ((wn, ws), (gn, gt)) in want.iter().zip(params.iter()) {
        if wn != gn || ws.as_slice() != gt.shape() {
            return Err(ModelError::Config(format!(
                "checkpoint tensor {gn} {:?} does not match expected {wn} {ws:?}",
                gt.shape()
            )));
        }
    }
    Ok(())
}

/// Fixed sinusoidal encoding of the patch grid: the first half of the channels
/// encode the row, the second half the column.
pub fn positional_encoding(cfg: &DetectorConfig) -> Tensor {
    let (g, d) = (cfg.grid(), cfg.embed_dim);
    let half = d / 2;
    let mut data = vec![0.0; g * g * d];
    for r in 0..g {
        for c in 0..g {
            let row = &mut data[(r * g + c) * d..(r * g + c + 1) * d];
            for (offset, pos) in [(0, r), (half, c)] {
                for i in 0..half / 2 {
                    let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / half as f64);
                    row[offset + 2 * i] = (pos as f64 * freq).sin();
                    row[offset + 2 * i + 1] = (pos as f64 * freq).cos();
                }
            }
        }
    }
    Tensor::new(vec![g * g, d], data).expect("shape is consistent")
}

/// Splits an image into row-major patch vectors, one token per row.
pub fn patchify(cfg: &DetectorConfig, image: &Image) -> Result<Tensor> {
    if image.width != cfg.image_size || image.height != cfg.image_size {
        return Err(ModelError::ImageSize {
            got_w: image.width,
            got_h: image.height,
            want: cfg.image_size,
        });
    }
    let (g, p, w) = (cfg.grid(), cfg.patch_size, image.width);
    let mut data = Vec::with_capacity(g * g * cfg.patch_dim());
    for gy in 0..g {
        for gx in 0..g {
            for dy in 0..p {
                let start = ((gy * p + dy) * w + gx * p) * 3;
                data.extend_from_slice(&image.data[start..start + p * 3]);
            }
        }
    }
    Ok(Tensor::new(vec![g * g, cfg.patch_dim()], data)?)
}

/// Student-side outputs on a tape: `N×(C+1)` logits and `N×4` boxes in (0,1).
#[derive(Debug, Clone, Copy)]
pub struct PredVars<'t> {
    pub logits: Var<'t>,
    pub boxes: Var<'t>,
}

/// Plain-valued outputs for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub logits: Vec<Vec<f64>>,
    pub boxes: Vec<BBox>,
}

impl PredVars<'_> {
    pub fn values(&self) -> Predictions {
        let (l, b) = (self.logits.value(), self.boxes.value());
        let n = l.dims2().0;
        Predictions {
            logits: (0..n).map(|i| l.row(i).to_vec()).collect(),
            boxes: (0..n).map(|i| BBox::from_slice(b.row(i))).collect(),
        }
    }
}

struct Layers<'a, 't> {
    vars: &'a ParamVars<'t>,
    heads: usize,
}

impl<'t> Layers<'_, 't> {
    fn p(&self, name: &str) -> Result<Var<'t>> {
        Ok(self.vars.get(name)?)
    }

    fn linear(&self, x: Var<'t>, w: &str, b: &str) -> Result<Var<'t>> {
        Ok(x.matmul(self.p(w)?)?.add_row(self.p(b)?)?)
    }

    fn norm(&self, x: Var<'t>, prefix: &str) -> Result<Var<'t>> {
        Ok(x.layer_norm(self.p(&format!("{prefix}.gamma"))?, self.p(&format!("{prefix}.beta"))?)?)
    }

    fn attention(&self, q_in: Var<'t>, k_in: Var<'t>, v_in: Var<'t>, prefix: &str) -> Result<Var<'t>> {
        let q = self.linear(q_in, &format!("{prefix}.wq"), &format!("{prefix}.bq"))?;
        let k = self.linear(k_in, &format!("{prefix}.wk"), &format!("{prefix}.bk"))?;
        let v = self.linear(v_in, &format!("{prefix}.wv"), &format!("{prefix}.bv"))?;
        let d = q.shape()[1];
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = q.slice_cols(lo, hi)?;
            let kh = k.slice_cols(lo, hi)?;
            let vh = v.slice_cols(lo, hi)?;
            let att = qh.matmul(kh.transpose()?)?.scale(scale).softmax_rows();
            outs.push(att.matmul(vh)?);
        }
        let merged = if outs.len() == 1 { outs[0] } else { Var::concat_cols(&outs)? };
        self.linear(merged, &format!("{prefix}.wo"), &format!("{prefix}.bo"))
    }

    fn ffn(&self, x: Var<'t>, prefix: &str) -> Result<Var<'t>> {
        let h = self.linear(x, &format!("{prefix}.w1"), &format!("{prefix}.b1"))?.relu();
        self.linear(h, &format!("{prefix}.w2"), &format!("{prefix}.b2"))
    }
}

fn finite<'t>(v: Var<'t>, layer: &str) -> Result<Var<'t>> {
    if v.all_finite() {
        Ok(v)
    } else {
        Err(ModelError::NonFinite(layer.to_string()))
    }
}

/// Runs the detector on one image. Registering `vars` as constants gives a
/// gradient-free pass.
pub fn forward<'t>(tape: &'t Tape, vars: &ParamVars<'t>, cfg: &DetectorConfig, image: &Image) -> Result<PredVars<'t>> {
    let m = Layers { vars, heads: cfg.heads };
    let tokens = tape.leaf(patchify(cfg, image)?, false);
    let pos = tape.leaf(positional_encoding(cfg), false);

    let mut h = m.linear(tokens, "patch_embed.weight", "patch_embed.bias")?.add(pos)?;
    h = finite(h, "patch_embed")?;
    for l in 0..cfg.encoder_layers {
        let p = format!("encoder.{l}");
        let x = m.norm(h, &format!("{p}.norm1"))?;
        h = h.add(m.attention(x, x, x, &format!("{p}.self_attn"))?)?;
        let x = m.norm(h, &format!("{p}.norm2"))?;
        h = finite(h.add(m.ffn(x, &format!("{p}.ffn"))?)?, &p)?;
    }
    let memory = m.norm(h, "encoder.norm")?;
    let memory_keys = memory.add(pos)?;

    let qpos = m.p("query.pos")?;
    let mut t = m.p("query.content")?;
    for l in 0..cfg.decoder_layers {
        let p = format!("decoder.{l}");
        let x = m.norm(t, &format!("{p}.norm1"))?;
        let xq = x.add(qpos)?;
        t = t.add(m.attention(xq, xq, x, &format!("{p}.self_attn"))?)?;
        let x = m.norm(t, &format!("{p}.norm2"))?;
        t = t.add(m.attention(x.add(qpos)?, memory_keys, memory, &format!("{p}.cross_attn"))?)?;
        let x = m.norm(t, &format!("{p}.norm3"))?;
        t = finite(t.add(m.ffn(x, &format!("{p}.ffn"))?)?, &p)?;
    }
    let out = m.norm(t, "decoder.norm")?;

    let logits = finite(m.linear(out, "class_head.weight", "class_head.bias")?, "class_head")?;
    let hidden = m.linear(out, "box_head.w1", "box_head.b1")?.relu();
    let boxes = finite(m.linear(hidden, "box_head.w2", "box_head.b2")?.sigmoid(), "box_head")?;
    Ok(PredVars { logits, boxes })
}

/// Gradient-free forward pass returning plain values.
pub fn infer(params: &ParamSet, cfg: &DetectorConfig, image: &Image) -> Result<Predictions> {
    let tape = Tape::new();
    let vars = params.register(&tape, false);
    Ok(forward(&tape, &vars, cfg, image)?.values())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub query: usize,
    /// Real class in `1..=C`.
    pub class: usize,
    pub score: f64,
    pub bbox: BBox,
}

/// One detection per query: the best real class and its probability, sorted
/// by descending score (ties by query index). Nothing is suppressed.
pub fn detections_from(preds: &Predictions) -> Vec<Detection> {
    let mut dets: Vec<Detection> = preds
        .logits
        .iter()
        .zip(&preds.boxes)
        .enumerate()
        .map(|(query, (l, b))| {
            let p = softmax(l);
            let real = &p[..p.len() - 1];
            let best = crate::losses::argmax(real);
            Detection {
                query,
                class: best + 1,
                score: real[best],
                bbox: *b,
            }
        })
        .collect();
    dets.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.query.cmp(&b.query)));
    dets
}

pub fn predict(params: &ParamSet, cfg: &DetectorConfig, image: &Image) -> Result<Vec<Detection>> {
    Ok(detections_from(&infer(params, cfg, image)?))
}
