//! The joint relevance–preference model with variant-specific wiring.

use crate::backbones::{
    BackboneConfig, PreferenceCache, PreferenceModel, RelevanceCache, RelevanceModel,
};
use crate::encoding::{EncodeCache, Encoder, FeatureSpec, SessionExample};
use crate::error::{Error, Result};
use crate::metrics::StagePredictions;
use crate::numerics::{
    derive_seed, kinks, rng_from_seed, sigmoid, HasParams, MlpCache, ParamBlock, Tensor,
};
use crate::reconstruction::{
    area_probabilities, clamp_prob, correction_factor, fixed_fusion_grad, global_fusion_grad,
    global_fusion_raw, low_rank_edit, low_rank_edit_backward, retract, LocalCorrector,
    PreferenceDecoder, Projection, PROB_CEIL, PROB_FLOOR,
};

use super::{bce_grad, bce_loss, Adam, TrainConfig, Variant};

/// How the preference representation is edited.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EditKind {
    /// `Oᵀ(O e_p − O e_r)` with `O` kept row-orthonormal.
    Orthogonal,
    /// `W₂ᵀ(W₁ e_p − W₁ e_r)` with free `W₁`, `W₂`.
    Free,
}

#[derive(Clone, Debug)]
enum EditMaps {
    Orthogonal(Projection),
    Free { w1: ParamBlock, w2: ParamBlock },
}

impl EditMaps {
    fn enc(&self) -> &Tensor {
        match self {
            EditMaps::Orthogonal(o) => &o.matrix.value,
            EditMaps::Free { w1, .. } => &w1.value,
        }
    }

    fn dec(&self) -> &Tensor {
        match self {
            EditMaps::Orthogonal(o) => &o.matrix.value,
            EditMaps::Free { w2, .. } => &w2.value,
        }
    }
}

#[derive(Clone, Debug)]
struct EditModule {
    maps: EditMaps,
    decoder: PreferenceDecoder,
}

/// Trainable joint model. Parameter blocks exist only for the components
/// the variant actually wires in.
#[derive(Clone, Debug)]
pub struct JointModel {
    pub variant: Variant,
    pub delta: f64,
    pub encoder: Encoder,
    pub relevance: RelevanceModel,
    pub preference: PreferenceModel,
    edit: Option<EditModule>,
    alpha: Option<ParamBlock>,
    beta: Option<ParamBlock>,
    corrector: Option<LocalCorrector>,
    retractions: u64,
}

/// Per-example outputs of a forward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PredictionSet {
    /// Trained behavior prediction.
    pub output: Vec<f64>,
    /// Relevance effect `r̂`.
    pub relevance: Vec<f64>,
    /// Preference probability fed to fusion (`p̂_c` when editing, else `p̂`).
    pub preference: Vec<f64>,
    pub stages: StagePredictions,
}

struct Forward {
    enc: EncodeCache,
    rel: RelevanceCache,
    pref: PreferenceCache,
    r: Vec<f64>,
    p: Vec<f64>,
    edit: Option<EditForward>,
    /// `y_f = r^δ p` before clamping.
    fixed: Vec<f64>,
    global: Option<Vec<f64>>,
    local: Option<LocalForward>,
    /// Pre-clamp output.
    raw_out: Vec<f64>,
}

struct EditForward {
    diff: Tensor,
    z: Tensor,
    e_pc: Tensor,
}

struct LocalForward {
    cache: MlpCache,
    factor: Vec<f64>,
    base: Vec<f64>,
}

fn in_clamp(x: f64) -> bool {
    (PROB_FLOOR..=PROB_CEIL).contains(&x)
}

impl JointModel {
    pub fn new(spec: FeatureSpec, backbone: &BackboneConfig, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        backbone.validate()?;
        let spec = spec.with_dim(backbone.embedding_dim);
        let seed = cfg.seed;
        let dim = backbone.embedding_dim;
        let hidden = backbone.hidden();
        let encoder = Encoder::new(spec, seed)?;
        let relevance = RelevanceModel::new(backbone.relevance, backbone, dim, seed)?;
        let preference = PreferenceModel::new(backbone.preference, backbone, dim, seed)?;
        // components draw from their own streams so that variants share initial values
        let edit = match cfg.variant.edit() {
            None => None,
            Some(kind) => {
                let mut rng = rng_from_seed(derive_seed(seed, 30));
                let o = Projection::random(cfg.rank, hidden, &mut rng)?;
                let decoder = PreferenceDecoder::glorot(hidden, &mut rng);
                let maps = match kind {
                    EditKind::Orthogonal => EditMaps::Orthogonal(o),
                    EditKind::Free => EditMaps::Free {
                        w1: ParamBlock::new("edit.w1", o.matrix.value.clone()),
                        w2: ParamBlock::new("edit.w2", o.matrix.value),
                    },
                };
                Some(EditModule { maps, decoder })
            }
        };
        let (alpha, beta) = if cfg.variant.uses_global() {
            (
                Some(ParamBlock::new(
                    "fusion.alpha",
                    Tensor::vector(cfg.alpha_init.to_vec())?,
                )),
                Some(ParamBlock::new(
                    "fusion.beta",
                    Tensor::vector(cfg.beta_init.to_vec())?,
                )),
            )
        } else {
            (None, None)
        };
        let corrector = cfg
            .variant
            .uses_local()
            .then(|| LocalCorrector::new(dim, &mut rng_from_seed(derive_seed(seed, 40))));
        Ok(JointModel {
            variant: cfg.variant,
            delta: cfg.delta,
            encoder,
            relevance,
            preference,
            edit,
            alpha,
            beta,
            corrector,
            retractions: 0,
        })
    }

    /// Number of retractions applied to the orthogonal projection so far.
    pub fn retractions(&self) -> u64 {
        self.retractions
    }

    /// The orthogonal projection `O`, or `W₁` for the unconstrained edit.
    pub fn edit_encoder(&self) -> Option<&Tensor> {
        self.edit.as_ref().map(|e| e.maps.enc())
    }

    pub fn alpha(&self) -> Option<[f64; 2]> {
        self.alpha
            .as_ref()
            .map(|a| [a.value.data()[0], a.value.data()[1]])
    }

    pub fn beta(&self) -> Option<[f64; 2]> {
        self.beta
            .as_ref()
            .map(|b| [b.value.data()[0], b.value.data()[1]])
    }

    pub fn set_alpha_beta(&mut self, alpha: [f64; 2], beta: [f64; 2]) {
        if let Some(a) = self.alpha.as_mut() {
            a.value.data_mut().copy_from_slice(&alpha);
        }
        if let Some(b) = self.beta.as_mut() {
            b.value.data_mut().copy_from_slice(&beta);
        }
    }

    pub fn corrector_mut(&mut self) -> Option<&mut LocalCorrector> {
        self.corrector.as_mut()
    }

    fn forward(&self, examples: &[&SessionExample]) -> Result<Forward> {
        let (batch, enc) = self.encoder.encode_batch(examples)?;
        let (rel_out, rel) = self.relevance.forward(&batch)?;
        let (pref_out, pref) = self.preference.forward(&batch)?;
        let r = rel_out.effect;
        let (p, edit) = match &self.edit {
            None => (pref_out.effect, None),
            Some(module) => {
                let mut diff = pref_out.hidden;
                diff.add_scaled(&rel_out.hidden, -1.0);
                let (e_pc, z) = low_rank_edit(&diff, module.maps.enc(), module.maps.dec())?;
                let p = (0..e_pc.rows())
                    .map(|i| sigmoid(module.decoder.logit(e_pc.row(i))))
                    .collect();
                (p, Some(EditForward { diff, z, e_pc }))
            }
        };
        let fixed: Vec<f64> = p
            .iter()
            .zip(&r)
            .map(|(&p, &r)| r.powf(self.delta) * p)
            .collect();
        let global = match (&self.alpha, &self.beta) {
            (Some(_), Some(_)) => {
                let (a, b) = (self.alpha().expect("alpha"), self.beta().expect("beta"));
                Some(
                    p.iter()
                        .zip(&r)
                        .map(|(&p, &r)| {
                            global_fusion_raw(&area_probabilities(p, r), r, self.delta, a, b)
                        })
                        .collect::<Result<Vec<f64>>>()?,
                )
            }
            _ => None,
        };
        let local = match &self.corrector {
            None => None,
            Some(c) => {
                let base = global.clone().unwrap_or_else(|| fixed.clone());
                let (logits, cache) = c.forward(&batch.u, &batch.v, &batch.q)?;
                let factor = logits.iter().map(|&l| correction_factor(l)).collect();
                Some(LocalForward {
                    cache,
                    factor,
                    base,
                })
            }
        };
        let raw_out = match (&local, &global) {
            (Some(l), _) => l.base.iter().zip(&l.factor).map(|(b, f)| b * f).collect(),
            (None, Some(g)) => g.clone(),
            (None, None) => fixed.clone(),
        };
        if raw_out.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("joint model output"));
        }
        kinks::observe(raw_out.iter().map(|&y| in_clamp(y)));
        Ok(Forward {
            enc,
            rel,
            pref,
            r,
            p,
            edit,
            fixed,
            global,
            local,
            raw_out,
        })
    }

    /// Predictions for `examples`, evaluated in chunks of `batch_size`.
    pub fn predict(
        &self,
        examples: &[&SessionExample],
        batch_size: usize,
    ) -> Result<PredictionSet> {
        let mut out = PredictionSet::default();
        let (mut fixed, mut global, mut local) = (Vec::new(), Vec::new(), Vec::new());
        for chunk in examples.chunks(batch_size.max(1)) {
            let f = self.forward(chunk)?;
            out.output.extend(f.raw_out.iter().map(|&y| clamp_prob(y)));
            out.relevance.extend_from_slice(&f.r);
            out.preference.extend_from_slice(&f.p);
            fixed.extend(f.fixed.iter().map(|&y| clamp_prob(y)));
            if let Some(g) = &f.global {
                global.extend(g.iter().map(|&y| clamp_prob(y)));
            }
            if let Some(l) = &f.local {
                local.extend(l.base.iter().zip(&l.factor).map(|(b, c)| clamp_prob(b * c)));
            }
        }
        out.stages = StagePredictions {
            fixed: Some(fixed),
            global: self.alpha.is_some().then_some(global),
            local: self.corrector.is_some().then_some(local),
        };
        Ok(out)
    }

    /// Mean BCE over `examples` without touching gradients.
    pub fn loss(&self, examples: &[&SessionExample]) -> Result<f64> {
        let f = self.forward(examples)?;
        Ok(mean_bce(&f.raw_out, examples))
    }

    /// Zeroes gradients, runs forward and backward on `examples`, and
    /// returns the mean BCE loss.
    pub fn loss_and_grad(&mut self, examples: &[&SessionExample]) -> Result<f64> {
        self.zero_grads();
        let f = self.forward(examples)?;
        let loss = mean_bce(&f.raw_out, examples);
        let n = examples.len() as f64;
        let d_out: Vec<f64> = f
            .raw_out
            .iter()
            .zip(examples)
            .map(|(&y, ex)| {
                if in_clamp(y) {
                    bce_grad(y, ex.label) / n
                } else {
                    0.0
                }
            })
            .collect();
        self.backward(&f, &d_out);
        Ok(loss)
    }

    fn backward(&mut self, f: &Forward, d_out: &[f64]) {
        let b = d_out.len();
        let d = self.encoder.dim();
        let mut dq = Tensor::zeros(&[b, d]);
        let mut dv = Tensor::zeros(&[b, d]);
        let mut du = Tensor::zeros(&[b, d]);

        // local stage: y = base · F
        let d_base: Vec<f64> = match (&f.local, self.corrector.as_mut()) {
            (Some(l), Some(c)) => {
                let d_logit: Vec<f64> = (0..b)
                    .map(|i| d_out[i] * l.base[i] * l.factor[i] * (1.0 - 0.5 * l.factor[i]))
                    .collect();
                let [gu, gv, gq] = c.backward(&l.cache, &d_logit);
                du.add_scaled(&gu, 1.0);
                dv.add_scaled(&gv, 1.0);
                dq.add_scaled(&gq, 1.0);
                (0..b).map(|i| d_out[i] * l.factor[i]).collect()
            }
            _ => d_out.to_vec(),
        };

        // fusion stage into (dp, dr)
        let mut dp = vec![0.0; b];
        let mut dr = vec![0.0; b];
        if let (Some(alpha), Some(beta)) = (self.alpha.as_mut(), self.beta.as_mut()) {
            let a = [alpha.value.data()[0], alpha.value.data()[1]];
            let bt = [beta.value.data()[0], beta.value.data()[1]];
            for i in 0..b {
                let g = global_fusion_grad(f.p[i], f.r[i], self.delta, a, bt);
                dp[i] = d_base[i] * g.d_p;
                dr[i] = d_base[i] * g.d_r;
                for k in 0..2 {
                    alpha.grad.data_mut()[k] += d_base[i] * g.d_alpha[k];
                    beta.grad.data_mut()[k] += d_base[i] * g.d_beta[k];
                }
            }
        } else {
            for i in 0..b {
                let (gp, gr) = fixed_fusion_grad(f.p[i], f.r[i], self.delta);
                dp[i] = d_base[i] * gp;
                dr[i] = d_base[i] * gr;
            }
        }

        // preference path
        let zeros = vec![0.0; b];
        let (d_p_effect, d_e_p, d_e_r) = match (&mut self.edit, &f.edit) {
            (Some(module), Some(e)) => {
                let h = e.e_pc.cols();
                let mut d_e_pc = Tensor::zeros(&[b, h]);
                let w = module.decoder.weight.value.data().to_vec();
                for i in 0..b {
                    let d_logit = dp[i] * f.p[i] * (1.0 - f.p[i]);
                    module.decoder.bias.grad.data_mut()[0] += d_logit;
                    for (gw, x) in module
                        .decoder
                        .weight
                        .grad
                        .data_mut()
                        .iter_mut()
                        .zip(e.e_pc.row(i))
                    {
                        *gw += d_logit * x;
                    }
                    for (g, wk) in d_e_pc.row_mut(i).iter_mut().zip(&w) {
                        *g = d_logit * wk;
                    }
                }
                let grads = low_rank_edit_backward(
                    &e.diff,
                    &e.z,
                    module.maps.enc(),
                    module.maps.dec(),
                    &d_e_pc,
                );
                match &mut module.maps {
                    EditMaps::Orthogonal(o) => {
                        o.matrix.grad.add_scaled(&grads.d_enc, 1.0);
                        o.matrix.grad.add_scaled(&grads.d_dec, 1.0);
                    }
                    EditMaps::Free { w1, w2 } => {
                        w1.grad.add_scaled(&grads.d_enc, 1.0);
                        w2.grad.add_scaled(&grads.d_dec, 1.0);
                    }
                }
                let d_e_r = grads.d_diff.map(|g| -g);
                (zeros.clone(), Some(grads.d_diff), Some(d_e_r))
            }
            _ => (dp, None, None),
        };
        let gp = self
            .preference
            .backward(&f.pref, &d_p_effect, d_e_p.as_ref());
        let gr = self.relevance.backward(&f.rel, &dr, d_e_r.as_ref());
        for (acc, parts) in [
            (&mut dq, [&gp.dq, &gr.dq]),
            (&mut dv, [&gp.dv, &gr.dv]),
            (&mut du, [&gp.du, &gr.du]),
        ] {
            for g in parts {
                acc.add_scaled(g, 1.0);
            }
        }
        self.encoder.backward(&f.enc, &dq, &dv, &du);
    }

    /// One optimizer update followed, for the orthogonal edit, by a retraction.
    pub fn apply_update(&mut self, adam: &mut Adam) -> Result<()> {
        adam.step(&mut self.params_mut());
        if let Some(EditModule {
            maps: EditMaps::Orthogonal(o),
            ..
        }) = self.edit.as_mut()
        {
            o.matrix.value = retract(&o.matrix.value)?;
            self.retractions += 1;
        }
        Ok(())
    }

    /// Minibatch step: gradients, update, retraction. Returns the batch loss.
    pub fn train_step(&mut self, examples: &[&SessionExample], adam: &mut Adam) -> Result<f64> {
        let loss = self.loss_and_grad(examples)?;
        self.apply_update(adam)?;
        Ok(loss)
    }
}

fn mean_bce(out: &[f64], examples: &[&SessionExample]) -> f64 {
    out.iter()
        .zip(examples)
        .map(|(&y, ex)| bce_loss(y, ex.label))
        .sum::<f64>()
        / examples.len() as f64
}

impl HasParams for JointModel {
    fn params(&self) -> Vec<&ParamBlock> {
        let mut p = self.encoder.params();
        p.extend(self.relevance.params());
        p.extend(self.preference.params());
        if let Some(e) = &self.edit {
            match &e.maps {
                EditMaps::Orthogonal(o) => p.push(&o.matrix),
                EditMaps::Free { w1, w2 } => p.extend([w1, w2]),
            }
            p.extend([&e.decoder.weight, &e.decoder.bias]);
        }
        p.extend(self.alpha.iter().chain(&self.beta));
        if let Some(c) = &self.corrector {
            p.extend(c.mlp.params());
        }
        p
    }

    fn params_mut(&mut self) -> Vec<&mut ParamBlock> {
        let mut p = self.encoder.params_mut();
        p.extend(self.relevance.params_mut());
        p.extend(self.preference.params_mut());
        if let Some(e) = &mut self.edit {
            match &mut e.maps {
                EditMaps::Orthogonal(o) => p.push(&mut o.matrix),
                EditMaps::Free { w1, w2 } => p.extend([w1, w2]),
            }
            p.extend([&mut e.decoder.weight, &mut e.decoder.bias]);
        }
        p.extend(self.alpha.iter_mut().chain(self.beta.iter_mut()));
        if let Some(c) = &mut self.corrector {
            p.extend(c.mlp.params_mut());
        }
        p
    }
}
