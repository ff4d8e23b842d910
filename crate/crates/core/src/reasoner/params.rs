use ndarray::Array2;

use super::config::{Aggregation, ArchitectureConfig, Backbone};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, normal_matrix, rng_from};

/// Slot indices of one pre-norm transformer layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSlots {
    pub ln1: (usize, usize),
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ln2: (usize, usize),
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockSlots {
    pub layers: Vec<LayerSlots>,
    /// Absent for the identity backbone.
    pub final_ln: Option<(usize, usize)>,
}

/// Where each named tensor lives inside `ModelParameters::tensors`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSlots {
    pub item_embedding: usize,
    pub position_embedding: usize,
    pub pre: BlockSlots,
    pub core: BlockSlots,
    pub recur_ln: (usize, usize),
    pub merge: Option<(usize, usize)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

struct LayoutBuilder {
    specs: Vec<(String, (usize, usize), Init)>,
}

impl LayoutBuilder {
    fn push(&mut self, name: String, shape: (usize, usize), init: Init) -> usize {
        self.specs.push((name, shape, init));
        self.specs.len() - 1
    }

    fn norm(&mut self, prefix: &str, d: usize) -> (usize, usize) {
        let g = self.push(format!("{prefix}.gain"), (1, d), Init::Ones);
        let b = self.push(format!("{prefix}.bias"), (1, d), Init::Zeros);
        (g, b)
    }

    fn block(&mut self, prefix: &str, backbone: Backbone, layers: usize, cfg: &ArchitectureConfig) -> BlockSlots {
        if backbone == Backbone::Identity {
            return BlockSlots { layers: Vec::new(), final_ln: None };
        }
        let (d, f) = (cfg.embed_dim, cfg.ffn_dim);
        let layers = (0..layers)
            .map(|l| {
                let p = format!("{prefix}.{l}");
                let ln1 = self.norm(&format!("{p}.ln1"), d);
                let wq = self.push(format!("{p}.attn.wq"), (d, d), Init::Normal);
                let bq = self.push(format!("{p}.attn.bq"), (1, d), Init::Zeros);
                let wk = self.push(format!("{p}.attn.wk"), (d, d), Init::Normal);
                let bk = self.push(format!("{p}.attn.bk"), (1, d), Init::Zeros);
                let wv = self.push(format!("{p}.attn.wv"), (d, d), Init::Normal);
                let bv = self.push(format!("{p}.attn.bv"), (1, d), Init::Zeros);
                let wo = self.push(format!("{p}.attn.wo"), (d, d), Init::Normal);
                let bo = self.push(format!("{p}.attn.bo"), (1, d), Init::Zeros);
                let ln2 = self.norm(&format!("{p}.ln2"), d);
                let w1 = self.push(format!("{p}.ffn.w1"), (d, f), Init::Normal);
                let b1 = self.push(format!("{p}.ffn.b1"), (1, f), Init::Zeros);
                let w2 = self.push(format!("{p}.ffn.w2"), (f, d), Init::Normal);
                let b2 = self.push(format!("{p}.ffn.b2"), (1, d), Init::Zeros);
                LayerSlots { ln1, wq, bq, wk, bk, wv, bv, wo, bo, ln2, w1, b1, w2, b2 }
            })
            .collect();
        let final_ln = Some(self.norm(&format!("{prefix}.final_ln"), d));
        BlockSlots { layers, final_ln }
    }
}

fn layout(cfg: &ArchitectureConfig, num_items: usize) -> (Vec<(String, (usize, usize), Init)>, ParamSlots) {
    let d = cfg.embed_dim;
    let mut b = LayoutBuilder { specs: Vec::new() };
    let item_embedding = b.push("item_embedding".into(), (num_items, d), Init::Normal);
    let position_embedding = b.push("position_embedding".into(), (cfg.max_len, d), Init::Normal);
    let pre = b.block("pre", cfg.pre_backbone, cfg.pre_layers, cfg);
    let core = b.block("core", cfg.core_backbone, cfg.core_layers, cfg);
    let merge = match cfg.aggregation {
        Aggregation::Add => None,
        Aggregation::Concat => Some((
            b.push("merge.w".into(), (2 * d, d), Init::Normal),
            b.push("merge.b".into(), (1, d), Init::Zeros),
        )),
    };
    let recur_ln = b.norm("recur_ln", d);
    let slots = ParamSlots { item_embedding, position_embedding, pre, core, recur_ln, merge };
    (b.specs, slots)
}

/// All trainable tensors of a model, addressed by stable names.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    pub config: ArchitectureConfig,
    pub num_items: usize,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    slots: ParamSlots,
}

impl ModelParameters {
    /// Normal(0, init_std) weights, unit norm gains, zero biases.
    pub fn init(config: &ArchitectureConfig, num_items: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if num_items == 0 {
            return Err(Error::Config("catalog must contain at least one item".into()));
        }
        let (specs, slots) = layout(config, num_items);
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        for (i, (name, (r, c), init)) in specs.into_iter().enumerate() {
            let t = match init {
                Init::Zeros => Array2::zeros((r, c)),
                Init::Ones => Array2::ones((r, c)),
                Init::Normal => normal_matrix(r, c, config.init_std, &mut rng_from(derive_seed(seed, &[i as u64]))),
            };
            names.push(name);
            tensors.push(t);
        }
        Ok(Self { config: config.clone(), num_items, names, tensors, slots })
    }

    /// Tensor names and shapes for an architecture, in layout order.
    pub fn shapes(config: &ArchitectureConfig, num_items: usize) -> Vec<(String, (usize, usize))> {
        layout(config, num_items).0.into_iter().map(|(n, s, _)| (n, s)).collect()
    }

    /// Rebuilds parameters from named tensors, checking every name and shape.
    pub fn from_named(config: &ArchitectureConfig, num_items: usize, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let (specs, slots) = layout(config, num_items);
        if specs.len() != named.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors for this architecture, found {}",
                specs.len(),
                named.len()
            )));
        }
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        for ((name, shape, _), (got_name, t)) in specs.into_iter().zip(named) {
            if name != got_name {
                return Err(Error::Checkpoint(format!("expected tensor `{name}`, found `{got_name}`")));
            }
            if t.dim() != shape {
                return Err(Error::ShapeMismatch {
                    expected: format!("{name} {shape:?}"),
                    found: format!("{:?}", t.dim()),
                });
            }
            names.push(name);
            tensors.push(t);
        }
        Ok(Self { config: config.clone(), num_items, names, tensors, slots })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn slots(&self) -> &ParamSlots {
        &self.slots
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.tensors[i])
    }

    pub fn item_embeddings(&self) -> &Tensor {
        &self.tensors[self.slots.item_embedding]
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Named tensors in storage order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|x| x.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique_and_shapes_follow_config() {
        let cfg = ArchitectureConfig { embed_dim: 8, ffn_dim: 16, aggregation: Aggregation::Concat, ..Default::default() };
        let p = ModelParameters::init(&cfg, 30, 1).unwrap();
        let mut names = p.names().to_vec();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), p.names().len());
        assert_eq!(p.get("item_embedding").unwrap().dim(), (30, 8));
        assert_eq!(p.get("merge.w").unwrap().dim(), (16, 8));
        assert_eq!(p.get("core.0.ffn.w1").unwrap().dim(), (8, 16));
        assert_eq!(p.get("recur_ln.gain").unwrap(), &Array2::<f64>::ones((1, 8)));
    }

    #[test]
    fn identity_backbones_have_no_block_tensors() {
        let cfg = ArchitectureConfig {
            embed_dim: 4,
            pre_backbone: Backbone::Identity,
            core_backbone: Backbone::Identity,
            ..Default::default()
        };
        let p = ModelParameters::init(&cfg, 5, 0).unwrap();
        assert_eq!(p.names(), ["item_embedding", "position_embedding", "recur_ln.gain", "recur_ln.bias"]);
    }

    #[test]
    fn from_named_rejects_other_architecture() {
        let cfg = ArchitectureConfig { embed_dim: 8, ffn_dim: 16, ..Default::default() };
        let p = ModelParameters::init(&cfg, 10, 3).unwrap();
        let named: Vec<_> = p.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        assert_eq!(ModelParameters::from_named(&cfg, 10, named.clone()).unwrap(), p);
        assert!(ModelParameters::from_named(&cfg, 11, named.clone()).is_err());
        let wider = ArchitectureConfig { ffn_dim: 32, ..cfg };
        assert!(ModelParameters::from_named(&wider, 10, named).is_err());
    }

    #[test]
    fn init_is_seeded() {
        let cfg = ArchitectureConfig { embed_dim: 8, ffn_dim: 8, ..Default::default() };
        let a = ModelParameters::init(&cfg, 10, 7).unwrap();
        let b = ModelParameters::init(&cfg, 10, 7).unwrap();
        let c = ModelParameters::init(&cfg, 10, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
