//! A small pre-norm decoder-only transformer with the hook surface the
//! training and analysis code needs.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LiftError, Result};
use crate::tensors::{hash_named, layer_norm, normal, row_mask, softmax_last};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyLmConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_positions: usize,
    pub vocab: usize,
    pub seed: u64,
    #[serde(default = "default_dtype")]
    pub dtype: String,
    /// Token embedding init scale. The head is tied, so this also bounds how
    /// peaked next-token distributions can get behind the final norm.
    #[serde(default = "default_emb_std")]
    pub emb_std: f64,
}

fn default_emb_std() -> f64 {
    0.3
}

fn default_dtype() -> String {
    "f32".into()
}

impl ToyLmConfig {
    pub fn new(vocab: usize, seed: u64) -> Self {
        Self {
            layers: 4,
            d_model: 64,
            heads: 4,
            ffn: 256,
            max_positions: 2048,
            vocab,
            seed,
            dtype: default_dtype(),
            emb_std: default_emb_std(),
        }
    }

    pub fn with_dtype(mut self, dtype: DType) -> Self {
        self.dtype = if dtype == DType::F64 { "f64" } else { "f32" }.into();
        self
    }

    pub fn dtype(&self) -> DType {
        if self.dtype == "f64" {
            DType::F64
        } else {
            DType::F32
        }
    }

    fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(LiftError::DimMismatch(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }
}

/// A named linear projection that adapters may attach to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Projection {
    pub name: String,
    pub d_in: usize,
    pub d_out: usize,
}

/// Additive update to a named projection's output, e.g. a low-rank adapter.
pub trait ProjectionHook {
    fn delta(&self, name: &str, x: &Tensor) -> Result<Option<Tensor>>;
}

/// Replace rows of the residual stream entering block `layer` with cached
/// rows from another run. Layer 0 is the embedding output.
#[derive(Debug, Clone)]
pub struct HiddenPatch {
    pub layer: usize,
    pub positions: Vec<usize>,
    /// Full (L, d_model) tensor; only `positions` rows are used.
    pub source: Tensor,
}

#[derive(Default)]
pub struct ForwardOptions<'a> {
    pub inject: Option<&'a dyn Fn(&Tensor) -> Result<Tensor>>,
    pub hook: Option<&'a dyn ProjectionHook>,
    pub capture_hidden: bool,
    pub capture_attention: bool,
    pub patch: Option<&'a HiddenPatch>,
}

pub struct ForwardOutput {
    /// Token embeddings after the inject hook, (L, d_model).
    pub embeddings: Tensor,
    /// Output of each block, (L, d_model) each, when captured.
    pub hidden: Vec<Tensor>,
    /// Residual stream entering each block (after any patch), when captured.
    pub block_inputs: Vec<Tensor>,
    /// Attention probabilities per layer, (heads, L, L) each, when captured.
    pub attention: Vec<Tensor>,
    /// Final-norm hidden states feeding the LM head, (L, d_model).
    pub final_hidden: Tensor,
    /// (L, vocab).
    pub logits: Tensor,
}

/// The model surface used by training, evaluation and analysis.
pub trait LanguageModel {
    fn d_model(&self) -> usize;
    fn n_layers(&self) -> usize;
    fn vocab_size(&self) -> usize;
    fn dtype(&self) -> DType;
    fn projections(&self) -> Vec<Projection>;
    fn forward(&self, ids: &[u32], opts: &ForwardOptions) -> Result<ForwardOutput>;
    /// Content hash of the frozen base weights.
    fn weights_hash(&self) -> Result<String>;
}

pub struct ToyLm {
    cfg: ToyLmConfig,
    params: BTreeMap<String, Tensor>,
}

const LN_EPS: f64 = 1e-5;

impl ToyLm {
    pub fn new(cfg: ToyLmConfig) -> Result<Self> {
        cfg.validate()?;
        let dt = cfg.dtype();
        let dev = Device::Cpu;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.d_model;
        let mut params = BTreeMap::new();
        params.insert(
            "tok_emb".into(),
            normal(&mut rng, &[cfg.vocab, d], cfg.emb_std, dt)?,
        );
        params.insert(
            "pos_emb".into(),
            normal(&mut rng, &[cfg.max_positions, d], 0.02, dt)?,
        );
        for i in 0..cfg.layers {
            for ln in ["ln1", "ln2"] {
                params.insert(
                    format!("layers.{i}.{ln}.weight"),
                    Tensor::ones(d, dt, &dev)?,
                );
                params.insert(format!("layers.{i}.{ln}.bias"), Tensor::zeros(d, dt, &dev)?);
            }
            for p in toy_projections(&cfg, i) {
                params.insert(
                    format!("{}.weight", p.name),
                    normal(&mut rng, &[p.d_out, p.d_in], 0.02, dt)?,
                );
                params.insert(
                    format!("{}.bias", p.name),
                    Tensor::zeros(p.d_out, dt, &dev)?,
                );
            }
        }
        params.insert("ln_f.weight".into(), Tensor::ones(d, dt, &dev)?);
        params.insert("ln_f.bias".into(), Tensor::zeros(d, dt, &dev)?);
        Ok(Self { cfg, params })
    }

    pub fn config(&self) -> &ToyLmConfig {
        &self.cfg
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| LiftError::io(dir, e))?;
        crate::corpus::write_json(&dir.join("toylm.json"), &self.cfg)?;
        let map: std::collections::HashMap<&str, Tensor> = self
            .params
            .iter()
            .map(|(k, v)| (k.as_str(), v.clone()))
            .collect();
        candle_core::safetensors::save(&map, dir.join("toylm.safetensors"))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cfg: ToyLmConfig = crate::corpus::read_json(&dir.join("toylm.json"))?;
        cfg.validate()?;
        let params = candle_core::safetensors::load(dir.join("toylm.safetensors"), &Device::Cpu)?
            .into_iter()
            .collect();
        Ok(Self { cfg, params })
    }

    fn p(&self, name: &str) -> &Tensor {
        &self.params[name]
    }

    fn linear(&self, name: &str, x: &Tensor, hook: Option<&dyn ProjectionHook>) -> Result<Tensor> {
        let w = self.p(&format!("{name}.weight"));
        let b = self.p(&format!("{name}.bias"));
        let mut y = x.matmul(&w.t()?)?.broadcast_add(b)?;
        if let Some(h) = hook {
            if let Some(delta) = h.delta(name, x)? {
                y = (y + delta)?;
            }
        }
        Ok(y)
    }

    fn causal_mask(&self, l: usize) -> Result<Tensor> {
        let mut v = vec![0f64; l * l];
        for i in 0..l {
            for j in i + 1..l {
                v[i * l + j] = -1e9;
            }
        }
        Ok(Tensor::from_vec(v, (l, l), &Device::Cpu)?.to_dtype(self.cfg.dtype())?)
    }
}

fn toy_projections(cfg: &ToyLmConfig, layer: usize) -> Vec<Projection> {
    let d = cfg.d_model;
    let mut out: Vec<Projection> = ["q_proj", "k_proj", "v_proj", "o_proj"]
        .iter()
        .map(|n| Projection {
            name: format!("layers.{layer}.attn.{n}"),
            d_in: d,
            d_out: d,
        })
        .collect();
    out.push(Projection {
        name: format!("layers.{layer}.mlp.up_proj"),
        d_in: d,
        d_out: cfg.ffn,
    });
    out.push(Projection {
        name: format!("layers.{layer}.mlp.down_proj"),
        d_in: cfg.ffn,
        d_out: d,
    });
    out
}

impl LanguageModel for ToyLm {
    fn d_model(&self) -> usize {
        self.cfg.d_model
    }

    fn n_layers(&self) -> usize {
        self.cfg.layers
    }

    fn vocab_size(&self) -> usize {
        self.cfg.vocab
    }

    fn dtype(&self) -> DType {
        self.cfg.dtype()
    }

    fn projections(&self) -> Vec<Projection> {
        (0..self.cfg.layers)
            .flat_map(|i| toy_projections(&self.cfg, i))
            .collect()
    }

    fn forward(&self, ids: &[u32], opts: &ForwardOptions) -> Result<ForwardOutput> {
        let l = ids.len();
        if l > self.cfg.max_positions {
            return Err(LiftError::LengthOverflow {
                len: l,
                max: self.cfg.max_positions,
            });
        }
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= self.cfg.vocab) {
            return Err(LiftError::VocabOverflow {
                id: bad,
                vocab: self.cfg.vocab,
            });
        }
        if let Some(p) = opts.patch {
            if p.layer >= self.cfg.layers {
                return Err(LiftError::LayerOutOfRange {
                    layer: p.layer,
                    layers: self.cfg.layers,
                });
            }
        }
        let dev = Device::Cpu;
        let (d, h) = (self.cfg.d_model, self.cfg.heads);
        let hd = d / h;
        let ids_t = Tensor::from_vec(ids.to_vec(), l, &dev)?;
        let mut x = self.p("tok_emb").index_select(&ids_t, 0)?;
        if let Some(inject) = opts.inject {
            x = inject(&x)?;
            if x.dims() != [l, d] {
                return Err(LiftError::DimMismatch(format!(
                    "inject hook returned {:?}, expected [{l}, {d}]",
                    x.dims()
                )));
            }
        }
        let embeddings = x.clone();
        x = x.broadcast_add(&self.p("pos_emb").narrow(0, 0, l)?)?;
        let mask = self.causal_mask(l)?;
        let scale = 1.0 / (hd as f64).sqrt();
        let hook = opts.hook;
        let mut hidden = Vec::new();
        let mut block_inputs = Vec::new();
        let mut attention = Vec::new();

        for i in 0..self.cfg.layers {
            if let Some(p) = opts.patch.filter(|p| p.layer == i) {
                if p.source.dims() != [l, d] {
                    return Err(LiftError::DimMismatch(format!(
                        "patch source {:?}, expected [{l}, {d}]",
                        p.source.dims()
                    )));
                }
                let m = row_mask(l, &p.positions, x.dtype())?.broadcast_as((l, d))?;
                let keep = m.affine(-1.0, 1.0)?;
                x = ((p.source.detach() * &m)? + (x * keep)?)?;
            }
            if opts.capture_hidden {
                block_inputs.push(x.clone());
            }
            let pre = format!("layers.{i}");
            let a_in = layer_norm(
                &x,
                self.p(&format!("{pre}.ln1.weight")),
                self.p(&format!("{pre}.ln1.bias")),
                LN_EPS,
            )?;
            let split = |t: Tensor| -> Result<Tensor> {
                Ok(t.reshape((l, h, hd))?.transpose(0, 1)?.contiguous()?)
            };
            let q = split(self.linear(&format!("{pre}.attn.q_proj"), &a_in, hook)?)?;
            let k = split(self.linear(&format!("{pre}.attn.k_proj"), &a_in, hook)?)?;
            let v = split(self.linear(&format!("{pre}.attn.v_proj"), &a_in, hook)?)?;
            let scores =
                (q.matmul(&k.transpose(1, 2)?.contiguous()?)? * scale)?.broadcast_add(&mask)?;
            let probs = softmax_last(&scores)?;
            let ctx = probs
                .matmul(&v)?
                .transpose(0, 1)?
                .contiguous()?
                .reshape((l, d))?;
            if opts.capture_attention {
                attention.push(probs.detach());
            }
            x = (x + self.linear(&format!("{pre}.attn.o_proj"), &ctx, hook)?)?;
            let m_in = layer_norm(
                &x,
                self.p(&format!("{pre}.ln2.weight")),
                self.p(&format!("{pre}.ln2.bias")),
                LN_EPS,
            )?;
            let up = self
                .linear(&format!("{pre}.mlp.up_proj"), &m_in, hook)?
                .gelu()?;
            x = (x + self.linear(&format!("{pre}.mlp.down_proj"), &up, hook)?)?;
            if opts.capture_hidden {
                hidden.push(x.clone());
            }
        }
        let final_hidden = layer_norm(&x, self.p("ln_f.weight"), self.p("ln_f.bias"), LN_EPS)?;
        let logits = final_hidden.matmul(&self.p("tok_emb").t()?)?;
        Ok(ForwardOutput {
            embeddings,
            hidden,
            block_inputs,
            attention,
            final_hidden,
            logits,
        })
    }

    fn weights_hash(&self) -> Result<String> {
        hash_named(self.params.iter().map(|(k, v)| (k.as_str(), v)))
    }
}

/// Mean over the last dim of attention heads: (heads, L, L) → (L, L).
pub fn head_average(attn: &Tensor) -> Result<Tensor> {
    Ok(attn.mean(0)?)
}

/// Argmax of the logits row at `pos`.
pub fn argmax_at(logits: &Tensor, pos: usize) -> Result<u32> {
    Ok(logits.get(pos)?.argmax(D::Minus1)?.to_scalar::<u32>()?)
}
