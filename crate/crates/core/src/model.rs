//! A frozen base LM composed with adapters, conditioning and label heads.

use std::collections::{BTreeMap, HashMap};

use candle_core::{Tensor, Var};
use rand_chacha::ChaCha8Rng;

use crate::adapters::AdapterSet;
use crate::conditioning::{temporal_features, Conditioning, TemporalFeatures};
use crate::corpus::NULL_LABEL;
use crate::error::Result;
use crate::objectives::{self, Heads, LossTerms, LossWeights};
use crate::tensors::hash_named;
use crate::tokenspace::EncodedExample;
use crate::toylm::{ForwardOptions, ForwardOutput, HiddenPatch, LanguageModel, ToyLm};

pub struct LiftModel<M: LanguageModel = ToyLm> {
    pub base: M,
    pub adapters: Option<AdapterSet>,
    pub conditioning: Option<Conditioning>,
    pub heads: Heads,
}

#[derive(Default)]
pub struct RunOptions<'a> {
    /// Dropout RNG; `Some` enables training-mode adapter dropout.
    pub dropout_rng: Option<ChaCha8Rng>,
    /// Use the example's label stamps; when false every stamp is NULL.
    pub stamps: bool,
    pub capture_hidden: bool,
    pub capture_attention: bool,
    pub patch: Option<&'a HiddenPatch>,
}

pub struct RunOutput {
    pub out: ForwardOutput,
    pub dropout_rng: Option<ChaCha8Rng>,
}

impl<M: LanguageModel> LiftModel<M> {
    pub fn features(&self, enc: &EncodedExample, stamps: bool) -> Option<TemporalFeatures> {
        self.conditioning.as_ref().map(|c| {
            let mut f = temporal_features(enc, c.config());
            if !stamps {
                f.label.iter_mut().for_each(|z| *z = NULL_LABEL);
            }
            f
        })
    }

    pub fn run(&self, enc: &EncodedExample, opts: RunOptions) -> Result<RunOutput> {
        let feats = self.features(enc, opts.stamps);
        self.run_ids(&enc.input_ids, feats.as_ref(), opts)
    }

    pub fn run_ids(
        &self,
        ids: &[u32],
        feats: Option<&TemporalFeatures>,
        opts: RunOptions,
    ) -> Result<RunOutput> {
        let inject = |x: &Tensor| -> Result<Tensor> {
            match (&self.conditioning, feats) {
                (Some(c), Some(f)) => c.inject(x, f),
                _ => Ok(x.clone()),
            }
        };
        let hook = self.adapters.as_ref().map(|a| a.hook(opts.dropout_rng));
        let fo = ForwardOptions {
            inject: Some(&inject),
            hook: hook
                .as_ref()
                .map(|h| h as &dyn crate::toylm::ProjectionHook),
            capture_hidden: opts.capture_hidden,
            capture_attention: opts.capture_attention,
            patch: opts.patch,
        };
        let out = self.base.forward(ids, &fo)?;
        let dropout_rng = hook.and_then(|h| h.into_rng());
        Ok(RunOutput { out, dropout_rng })
    }

    /// Forward an encoded training example and compute the four loss terms.
    pub fn loss_terms(
        &self,
        enc: &EncodedExample,
        w: &LossWeights,
        dropout_rng: Option<ChaCha8Rng>,
    ) -> Result<(LossTerms, RunOutput)> {
        let run = self.run(
            enc,
            RunOptions {
                dropout_rng,
                stamps: true,
                ..Default::default()
            },
        )?;
        let out = &run.out;
        let ids = &enc.input_ids;
        let ce = objectives::prompt_ce(&out.logits, ids, &enc.prompt_ce_mask)?;
        let ce_empty = enc.prompt_ce_mask.iter().skip(1).all(|m| !m);
        let focal_lm = objectives::focal_lm(&out.logits, ids, &enc.output_mask, w.gamma)?;
        let cw = w.class_weights.as_deref();
        let focal_cls = objectives::focal_cls(
            &out.final_hidden,
            &enc.output_mask,
            &self.heads.global,
            enc.global_label_id,
            w.gamma,
            cw,
        )?;
        let hist = objectives::hist_cls(
            &out.final_hidden,
            &enc.hist_mask,
            self.heads.history_head(),
            enc.global_label_id,
            w.gamma,
        )?;
        let hist_skipped = hist.is_none();
        let hist_cls = match hist {
            Some(t) => t,
            None => Tensor::zeros((), out.logits.dtype(), out.logits.device())?,
        };
        Ok((
            LossTerms {
                ce,
                focal_lm,
                focal_cls,
                hist_cls,
                hist_skipped,
                ce_empty,
            },
            run,
        ))
    }

    /// All trainable variables by checkpoint name.
    pub fn trainable_vars(&self) -> BTreeMap<String, Var> {
        let mut m = BTreeMap::new();
        if let Some(a) = &self.adapters {
            for (n, v) in a.named_vars() {
                m.insert(n, v.clone());
            }
        }
        if let Some(c) = &self.conditioning {
            for (n, v) in c.vars() {
                m.insert(n.clone(), v.clone());
            }
        }
        for (n, v) in self.heads.named_vars() {
            m.insert(n, v.clone());
        }
        m
    }

    /// Gradient masks for frozen adapter rank slices.
    pub fn grad_masks(&self) -> Result<BTreeMap<String, Tensor>> {
        let mut m = BTreeMap::new();
        if let Some(a) = &self.adapters {
            for (n, _) in a.named_vars() {
                if let Some(mask) = a.grad_mask(&n)? {
                    m.insert(n, mask);
                }
            }
        }
        Ok(m)
    }

    pub fn trainable_tensors(&self) -> HashMap<String, Tensor> {
        self.trainable_vars()
            .into_iter()
            .map(|(n, v)| (n, v.as_tensor().clone()))
            .collect()
    }

    pub fn trainable_hash(&self) -> Result<String> {
        let vars = self.trainable_vars();
        hash_named(vars.iter().map(|(n, v)| (n.as_str(), v.as_tensor())))
    }

    /// Overwrite conditioning and head parameters from saved tensors.
    pub fn load_non_adapter(&self, map: &HashMap<String, Tensor>) -> Result<()> {
        if let Some(c) = &self.conditioning {
            c.load_tensors(map)?;
        }
        for (n, v) in self.heads.named_vars() {
            if let Some(t) = map.get(&n) {
                v.set(&t.to_dtype(v.dtype())?)?;
            }
        }
        Ok(())
    }
}
