//! Named, grouped views over every model tensor, and trainability masks.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::block::BlockParams;
use crate::error::{Error, Result};
use crate::kernels::LinearParams;
use crate::model::ModelParams;
use crate::tensor::Tensor;

/// Functional role of a parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Embedding,
    Norm,
    Attention,
    Router,
    Expert,
    Adapter,
    Head,
}

impl ParamGroup {
    pub fn is_adapter(self) -> bool {
        self == ParamGroup::Adapter
    }
}

pub type Named<'a> = (String, ParamGroup, &'a Tensor);
pub type NamedMut<'a> = (String, ParamGroup, &'a mut Tensor);

macro_rules! walkers {
    ($linear:ident, $block:ident, $model:ident, $item:ident, $iter:ident $(, $m:tt)?) => {
        fn $linear<'a>(out: &mut Vec<$item<'a>>, name: String, g: ParamGroup, p: &'a $($m)? LinearParams) {
            let LinearParams { weight, bias } = p;
            out.push((format!("{name}.weight"), g, weight));
            if let Some(b) = bias {
                out.push((format!("{name}.bias"), g, b));
            }
        }

        fn $block<'a>(out: &mut Vec<$item<'a>>, pre: &str, b: &'a $($m)? BlockParams) {
            use ParamGroup::*;
            let BlockParams {
                norm_x1,
                norm_x2,
                norm_y1,
                attn,
                attn_adapters,
                mlp_adapters,
                router,
                experts,
            } = b;
            out.push((format!("{pre}.norm_x1.gain"), Norm, & $($m)? norm_x1.gain));
            out.push((format!("{pre}.norm_x2.gain"), Norm, & $($m)? norm_x2.gain));
            out.push((format!("{pre}.norm_y1.gain"), Norm, & $($m)? norm_y1.gain));
            $linear(out, format!("{pre}.attn.wq"), Attention, & $($m)? attn.wq);
            $linear(out, format!("{pre}.attn.wk"), Attention, & $($m)? attn.wk);
            $linear(out, format!("{pre}.attn.wv"), Attention, & $($m)? attn.wv);
            $linear(out, format!("{pre}.attn.wo"), Attention, & $($m)? attn.wo);
            $linear(out, format!("{pre}.attn_adapters.up_q"), Adapter, & $($m)? attn_adapters.up_q);
            $linear(out, format!("{pre}.attn_adapters.up_kv"), Adapter, & $($m)? attn_adapters.up_kv);
            $linear(out, format!("{pre}.attn_adapters.down"), Adapter, & $($m)? attn_adapters.down);
            $linear(out, format!("{pre}.mlp_adapters.up"), Adapter, & $($m)? mlp_adapters.up);
            $linear(out, format!("{pre}.mlp_adapters.down"), Adapter, & $($m)? mlp_adapters.down);
            out.push((format!("{pre}.router.gate_weight"), Router, & $($m)? router.gate_weight));
            for (e, ex) in experts.experts.$iter().enumerate() {
                $linear(out, format!("{pre}.experts.{e}.fc1"), Expert, & $($m)? ex.fc1);
                $linear(out, format!("{pre}.experts.{e}.fc2"), Expert, & $($m)? ex.fc2);
            }
        }

        fn $model<'a>(p: &'a $($m)? ModelParams) -> Vec<$item<'a>> {
            let ModelParams {
                token_embedding,
                position_embedding,
                blocks,
                final_norm,
                lm_head,
            } = p;
            let mut out = Vec::new();
            out.push(("token_embedding".to_string(), ParamGroup::Embedding, token_embedding));
            out.push(("position_embedding".to_string(), ParamGroup::Embedding, position_embedding));
            for (l, b) in blocks.$iter().enumerate() {
                $block(&mut out, &format!("blocks.{l}"), b);
            }
            out.push(("final_norm.gain".to_string(), ParamGroup::Norm, & $($m)? final_norm.gain));
            $linear(&mut out, "lm_head".to_string(), ParamGroup::Head, lm_head);
            out
        }
    };
}

walkers!(linear_ref, block_ref, model_ref, Named, iter);
walkers!(linear_mut, block_mut, model_mut, NamedMut, iter_mut, mut);

/// Every parameter tensor in a fixed order.
pub fn named_tensors(p: &ModelParams) -> Vec<Named<'_>> {
    model_ref(p)
}

pub fn named_tensors_mut(p: &mut ModelParams) -> Vec<NamedMut<'_>> {
    model_mut(p)
}

/// Per-parameter trainable flags, total over a model's parameter names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainableMask {
    flags: BTreeMap<String, bool>,
}

impl TrainableMask {
    /// Flag each parameter by its group.
    pub fn from_groups(p: &ModelParams, trainable: impl Fn(ParamGroup) -> bool) -> Self {
        let flags = named_tensors(p)
            .into_iter()
            .map(|(name, g, _)| (name, trainable(g)))
            .collect();
        Self { flags }
    }

    pub fn is_trainable(&self, name: &str) -> Result<bool> {
        self.flags
            .get(name)
            .copied()
            .ok_or_else(|| Error::MaskIncomplete(name.to_string()))
    }

    /// Check the mask names exactly the parameters of `p`.
    pub fn validate(&self, p: &ModelParams) -> Result<()> {
        let named = named_tensors(p);
        for (name, _, _) in &named {
            self.is_trainable(name)?;
        }
        if named.len() != self.flags.len() {
            return Err(Error::config("trainable_mask", "names parameters the model does not have"));
        }
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, bool)> {
        self.flags.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn trainable_count(&self) -> usize {
        self.flags.values().filter(|v| **v).count()
    }

    /// Zero every gradient whose parameter is frozen.
    pub fn apply(&self, grads: &mut ModelParams) -> Result<()> {
        for (name, _, t) in named_tensors_mut(grads) {
            if !self.is_trainable(&name)? {
                *t = t.zeros_like();
            }
        }
        Ok(())
    }
}

/// FNV-1a over the bit patterns of every tensor in groups accepted by `filter`.
pub fn fingerprint(p: &ModelParams, filter: impl Fn(ParamGroup) -> bool) -> u64 {
    let mut h = crate::checkpoint::Fnv64::new();
    for (name, g, t) in named_tensors(p) {
        if !filter(g) {
            continue;
        }
        h.update(name.as_bytes());
        for v in t.data() {
            h.update(&v.to_bits().to_le_bytes());
        }
    }
    h.finish()
}
