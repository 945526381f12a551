//! The full swapper: parameter groups, the forward pipeline, one training
//! step with its Adam updates, and the per-group gradient check.

use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::extractors::{ExtractorBinding, ExtractorParams, FeaturePyramid};
use crate::fftm::{correspondence, to_tokens, transform_multiscale, AttentionParams};
use crate::fgm::{DiscriminatorParams, GeneratorParams};
use crate::gradcheck::{finite_diff_check, FdOptions};
use crate::graph::{BackwardFault, Graph, NodeId};
use crate::losses::{
    adversarial_losses, broadcast_mask, contextual_loss, feature_loss, perceptual_loss, total_loss_node,
    LossComponents, LossReport,
};
use crate::optim::AdamState;
use crate::params::{Binding, ParamStore};
use crate::synth::{SwapPair, SynthSample};
use crate::tensor::Tensor;

/// Seed of the frozen pyramid; fixed so feature-space metrics are comparable
/// across runs.
pub const PYRAMID_SEED: u64 = 0x70_7972_616d_6964;

/// Trainable groups in checkpoint and report order.
pub const TRAINABLE_GROUPS: [&str; 5] = [
    "image_extractor",
    "semantic_extractor",
    "attention",
    "generator",
    "discriminator",
];

#[derive(Clone, Debug, PartialEq)]
pub struct FaceTransformer {
    pub config: Config,
    pub extractors: ExtractorParams,
    pub attention: AttentionParams,
    pub generator: GeneratorParams,
    pub discriminator: DiscriminatorParams,
    /// Adam state per trainable group, in [`TRAINABLE_GROUPS`] order.
    pub adam: Vec<AdamState>,
    /// Completed training steps.
    pub step: u64,
}

/// Graph bindings of every group.
pub struct Bindings {
    pub ext: ExtractorBinding,
    pub attn: Binding,
    pub gen: Binding,
    pub disc: Binding,
}

/// Nodes of one forward pass.
pub struct Forward {
    pub swap: NodeId,
    pub q: NodeId,
    pub q_s: NodeId,
    pub correspondence: NodeId,
    pub transferred: FeaturePyramid,
}

/// Scalar loss nodes of one sample.
pub struct SampleLosses {
    pub l_f: NodeId,
    pub l_adv_g: NodeId,
    pub l_adv_d: NodeId,
    pub l_perc: NodeId,
    pub l_context: NodeId,
    pub total: NodeId,
}

/// Worst finite-difference error of one parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupCheck {
    pub group: String,
    pub max_rel_err: f64,
    pub threshold: f64,
    pub worst_param: String,
    pub entries_checked: usize,
}

impl GroupCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.threshold
    }
}

fn masked(img: &Tensor, mask: &Tensor, invert: bool) -> Tensor {
    let m = broadcast_mask(mask, img.shape()[0]);
    Tensor::from_fn(img.shape(), |i| {
        let k = if invert { 1.0 - m.data()[i] } else { m.data()[i] };
        img.data()[i] * k
    })
}

/// Batch indices of step `step` (0-based), a pure function of `(seed, step)`.
pub fn batch_indices(seed: u64, step: u64, num_pairs: usize, batch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(crate::synth::pair_seed(seed ^ 0x5eed_ba7c, step));
    (0..batch).map(|_| rng.gen_range(0..num_pairs)).collect()
}

impl FaceTransformer {
    pub fn new(config: Config) -> Result<Self> {
        config.validate()?;
        let geo = &config.geometry;
        let mut prng = ChaCha8Rng::seed_from_u64(PYRAMID_SEED);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let extractors = ExtractorParams::new(geo.channels, geo.d, geo.sem_classes, &mut prng, &mut rng);
        let attention = AttentionParams::new(geo.d, geo.heads, &mut rng)?;
        let generator = GeneratorParams::new(geo, &mut rng);
        let discriminator = DiscriminatorParams::new(&geo.disc_widths, &mut rng);
        let mut m = Self {
            config,
            extractors,
            attention,
            generator,
            discriminator,
            adam: Vec::new(),
            step: 0,
        };
        m.adam = m.trainable().iter().map(|s| AdamState::for_store(s)).collect();
        Ok(m)
    }

    /// Every group including the frozen pyramid.
    pub fn groups(&self) -> [&ParamStore; 6] {
        [
            &self.extractors.pyramid.store,
            &self.extractors.image.store,
            &self.extractors.semantic.store,
            &self.attention.store,
            &self.generator.store,
            &self.discriminator.store,
        ]
    }

    pub fn groups_mut(&mut self) -> [&mut ParamStore; 6] {
        [
            &mut self.extractors.pyramid.store,
            &mut self.extractors.image.store,
            &mut self.extractors.semantic.store,
            &mut self.attention.store,
            &mut self.generator.store,
            &mut self.discriminator.store,
        ]
    }

    pub fn trainable(&self) -> [&ParamStore; 5] {
        let [_, a, b, c, d, e] = self.groups();
        [a, b, c, d, e]
    }

    fn trainable_mut(&mut self) -> [&mut ParamStore; 5] {
        let [_, a, b, c, d, e] = self.groups_mut();
        [a, b, c, d, e]
    }

    pub fn bind(&self, g: &mut Graph, track: bool) -> Result<Bindings> {
        Ok(Bindings {
            ext: self.extractors.bind(g, track)?,
            attn: g.bind(&self.attention.store, track)?,
            gen: g.bind(&self.generator.store, track)?,
            disc: g.bind(&self.discriminator.store, track)?,
        })
    }

    /// Swaps the identity of `source` onto `target`.
    pub fn forward(&self, g: &mut Graph, b: &Bindings, source: &SynthSample, target: &SynthSample) -> Result<Forward> {
        let ext = &self.extractors;
        let src_face = g.constant(masked(&source.image, &source.mask, false))?;
        let tgt_face = g.constant(masked(&target.image, &target.mask, false))?;
        let tgt_bg = g.constant(masked(&target.image, &target.mask, true))?;
        let sem = g.constant(target.semantic.clone())?;

        let v = ext.pyramid_extract(g, &b.ext, src_face)?;
        let bg = ext.pyramid_extract(g, &b.ext, tgt_bg)?;
        let k = ext.image_features(g, &b.ext, src_face)?;
        let q = ext.image_features(g, &b.ext, tgt_face)?;
        let s = ext.semantic_features(g, &b.ext, sem)?;

        let qt = to_tokens(g, q)?;
        let kt = to_tokens(g, k)?;
        let q_m = self.attention.refine(g, &b.attn, qt, kt)?;
        let k_m = self.attention.refine(g, &b.attn, kt, qt)?;
        let c = correspondence(g, q_m, k_m)?;
        let transferred = transform_multiscale(g, c, &v)?;
        let swap = self.generator.generate(g, &b.gen, s, &transferred, &bg)?;
        Ok(Forward {
            swap,
            q,
            q_s: s,
            correspondence: c.0,
            transferred,
        })
    }

    /// Every objective term of one sample. `total` is the generator objective.
    pub fn losses(
        &self,
        g: &mut Graph,
        b: &Bindings,
        fwd: &Forward,
        pair_src: &SynthSample,
        pair_tgt: &SynthSample,
    ) -> Result<SampleLosses> {
        let l_f = feature_loss(g, fwd.q, fwd.q_s)?;
        let real = g.constant(pair_tgt.image.clone())?;
        let d_real = self.discriminator.discriminate(g, &b.disc, real)?;
        let d_fake = self.discriminator.discriminate(g, &b.disc, fwd.swap)?;
        let (l_adv_g, _) = adversarial_losses(g, d_real, d_fake)?;
        // The discriminator term sees a detached fake so its backward pass
        // stops at the generator output.
        let fake = g.detach(fwd.swap)?;
        let d_fake_det = self.discriminator.discriminate(g, &b.disc, fake)?;
        let (_, l_adv_d) = adversarial_losses(g, d_real, d_fake_det)?;
        let pyr = &self.extractors.pyramid;
        let l_perc = perceptual_loss(g, pyr, &b.ext.pyramid, fwd.swap, real)?;
        let src = g.constant(pair_src.image.clone())?;
        let l_context = contextual_loss(
            g,
            pyr,
            &b.ext.pyramid,
            fwd.swap,
            src,
            &pair_tgt.mask,
            &pair_src.mask,
            &self.config.contextual,
        )?;
        let total = total_loss_node(g, [l_f, l_adv_g, l_perc, l_context], &self.config.weights)?;
        Ok(SampleLosses {
            l_f,
            l_adv_g,
            l_adv_d,
            l_perc,
            l_context,
            total,
        })
    }

    /// Runs the swap without gradient tracking.
    pub fn swap(&self, source: &SynthSample, target: &SynthSample) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false)?;
        let f = self.forward(&mut g, &b, source, target)?;
        Ok(g.value(f.swap).clone())
    }

    /// One alternating update on `batch`. Discriminator and generator
    /// gradients come from the same forward passes at the current
    /// parameters; the discriminator is stepped first, then every generator
    /// group. On error no parameter changes.
    pub fn train_step(&mut self, batch: &[&SwapPair]) -> Result<LossReport> {
        if batch.is_empty() {
            return Err(Error::Usage("empty batch".into()));
        }
        for s in self.trainable_mut() {
            s.zero_grad();
        }
        let inv = 1.0 / batch.len() as f64;
        let mut sums = [0.0; 5];
        for pair in batch {
            let mut g = Graph::new();
            let b = self.bind(&mut g, true)?;
            let fwd = self.forward(&mut g, &b, &pair.source, &pair.target)?;
            let l = self.losses(&mut g, &b, &fwd, &pair.source, &pair.target)?;
            for (acc, id) in sums
                .iter_mut()
                .zip([l.l_f, l.l_adv_g, l.l_adv_d, l.l_perc, l.l_context])
            {
                *acc += g.item(id);
            }
            let gen_loss = g.scale(l.total, inv)?;
            let disc_loss = g.scale(l.l_adv_d, inv)?;
            let gg = g.backward(gen_loss)?;
            let gd = g.backward(disc_loss)?;
            self.extractors.image.store.accumulate(&b.ext.image, &gg)?;
            self.extractors.semantic.store.accumulate(&b.ext.semantic, &gg)?;
            self.attention.store.accumulate(&b.attn, &gg)?;
            self.generator.store.accumulate(&b.gen, &gg)?;
            self.discriminator.store.accumulate(&b.disc, &gd)?;
        }
        let comps = LossComponents {
            l_f: sums[0] * inv,
            l_adv_g: sums[1] * inv,
            l_perc: sums[3] * inv,
            l_context: sums[4] * inv,
        };
        let report = LossReport::new(comps, sums[2] * inv, &self.config.weights)?;

        let adam = self.config.optimizer;
        let mut states = core::mem::take(&mut self.adam);
        let order = [4usize, 0, 1, 2, 3];
        let result = (|| {
            let stores = self.trainable_mut();
            let mut stores: Vec<Option<&mut ParamStore>> = stores.into_iter().map(Some).collect();
            for i in order {
                let s = stores[i].take().expect("each group once");
                adam.step(s, &mut states[i])?;
            }
            Ok::<_, Error>(())
        })();
        self.adam = states;
        result?;
        for s in self.trainable_mut() {
            s.zero_grad();
        }
        self.step += 1;
        Ok(report)
    }

    /// Evaluates every loss term on one pair without updating anything.
    pub fn evaluate_losses(&self, pair: &SwapPair) -> Result<LossReport> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false)?;
        let fwd = self.forward(&mut g, &b, &pair.source, &pair.target)?;
        let l = self.losses(&mut g, &b, &fwd, &pair.source, &pair.target)?;
        let c = LossComponents {
            l_f: g.item(l.l_f),
            l_adv_g: g.item(l.l_adv_g),
            l_perc: g.item(l.l_perc),
            l_context: g.item(l.l_context),
        };
        LossReport::new(c, g.item(l.l_adv_d), &self.config.weights)
    }

    /// Finite-difference check of the generator objective against every
    /// trainable group, one report per group in [`TRAINABLE_GROUPS`] order.
    /// The discriminator group sits on the adversarial path and uses
    /// `adversarial_tol`.
    pub fn gradcheck(
        &self,
        pair: &SwapPair,
        tol: f64,
        adversarial_tol: f64,
        max_entries: Option<usize>,
        fault: Option<BackwardFault>,
    ) -> Result<Vec<GroupCheck>> {
        let mut out = Vec::with_capacity(TRAINABLE_GROUPS.len());
        for (gi, name) in TRAINABLE_GROUPS.iter().enumerate() {
            let store = self.trainable()[gi];
            let params: Vec<(String, Tensor)> = store
                .names()
                .iter()
                .zip(store.tensors())
                .map(|(n, t)| (n.clone(), t.clone().with_requires_grad(false)))
                .collect();
            let f = |g: &mut Graph, ids: &[NodeId]| -> Result<NodeId> {
                let mut b = self.bind(g, false)?;
                let nodes = Binding::from_nodes(ids.to_vec());
                match gi {
                    0 => b.ext.image = nodes,
                    1 => b.ext.semantic = nodes,
                    2 => b.attn = nodes,
                    3 => b.gen = nodes,
                    _ => b.disc = nodes,
                }
                let fwd = self.forward(g, &b, &pair.source, &pair.target)?;
                Ok(self.losses(g, &b, &fwd, &pair.source, &pair.target)?.total)
            };
            let threshold = if *name == "discriminator" { adversarial_tol } else { tol };
            let opts = FdOptions {
                tol: threshold,
                max_entries,
                fault,
                ..FdOptions::default()
            };
            let rep = finite_diff_check(f, &params, &opts)?;
            let worst = rep
                .params
                .iter()
                .fold(None::<&crate::gradcheck::ParamReport>, |w, p| match w {
                    Some(w) if w.max_rel_err >= p.max_rel_err => Some(w),
                    _ => Some(p),
                });
            out.push(GroupCheck {
                group: String::from(*name),
                max_rel_err: rep.worst(),
                threshold,
                worst_param: worst.map(|p| p.name.clone()).unwrap_or_default(),
                entries_checked: rep.params.iter().map(|p| p.entries_checked).sum(),
            });
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::{decode, encode};
    use crate::synth::sample_pair_sized;

    fn micro_pairs(n: u64) -> Vec<SwapPair> {
        (0..n).map(|i| sample_pair_sized(i, 8).unwrap()).collect()
    }

    #[test]
    fn gradcheck_lists_each_group_once_and_passes() {
        let m = FaceTransformer::new(Config::micro()).unwrap();
        let p = sample_pair_sized(3, 8).unwrap();
        let rep = m.gradcheck(&p, 1e-4, 1e-3, Some(40), None).unwrap();
        let names: Vec<&str> = rep.iter().map(|r| r.group.as_str()).collect();
        assert_eq!(names, TRAINABLE_GROUPS);
        assert!(rep.iter().all(GroupCheck::passed), "{rep:?}");
    }

    #[test]
    fn mutated_backward_rules_are_caught() {
        let m = FaceTransformer::new(Config::micro()).unwrap();
        let p = sample_pair_sized(3, 8).unwrap();
        for fault in [BackwardFault::MatMul, BackwardFault::Conv2d, BackwardFault::SoftmaxRows] {
            let rep = m.gradcheck(&p, 1e-4, 1e-3, Some(40), Some(fault)).unwrap();
            assert!(rep.iter().any(|r| !r.passed()), "{fault:?} went unnoticed");
        }
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let pairs = micro_pairs(6);
        let run = |m: &mut FaceTransformer, from: u64, to: u64| -> Vec<LossReport> {
            (from..to)
                .map(|s| {
                    let idx = batch_indices(7, s, pairs.len(), 2);
                    let b: Vec<&SwapPair> = idx.iter().map(|&i| &pairs[i]).collect();
                    m.train_step(&b).unwrap()
                })
                .collect()
        };
        let mut cfg = Config::micro();
        cfg.batch_size = 2;
        let mut a = FaceTransformer::new(cfg.clone()).unwrap();
        let mut b = FaceTransformer::new(cfg).unwrap();
        let ra = run(&mut a, 0, 6);
        let mut rb = run(&mut b, 0, 3);
        let mut resumed = decode(&encode(&b), None, false).unwrap();
        rb.extend(run(&mut resumed, 3, 6));
        assert_eq!(ra, rb);
        assert_eq!(encode(&a), encode(&resumed));
        assert_eq!(a.step, 6);
    }

    #[test]
    fn report_total_matches_weighted_components() {
        let mut m = FaceTransformer::new(Config::micro()).unwrap();
        let pairs = micro_pairs(2);
        let r = m.train_step(&[&pairs[0], &pairs[1]]).unwrap();
        let w = m.config.weights;
        let again = w.lambda1 * r.l_f + w.lambda2 * r.l_adv_g + w.lambda3 * r.l_perc + w.lambda4 * r.l_context;
        assert!((again - r.total).abs() < 1e-12);
    }

    #[test]
    fn divergence_surfaces_as_an_error_without_touching_parameters() {
        let mut cfg = Config::micro();
        cfg.optimizer.lr = 1e150;
        let mut m = FaceTransformer::new(cfg).unwrap();
        let pairs = micro_pairs(1);
        let mut err = None;
        for _ in 0..5 {
            let before = m.clone();
            match m.train_step(&[&pairs[0]]) {
                Ok(_) => {}
                Err(e) => {
                    assert_eq!(m, before);
                    err = Some(e);
                    break;
                }
            }
        }
        assert!(
            matches!(err, Some(Error::NonFinite { .. } | Error::NonFiniteLoss { .. })),
            "{err:?}"
        );
    }

    #[test]
    fn swap_output_is_bounded_and_deterministic() {
        let m = FaceTransformer::new(Config::micro()).unwrap();
        let p = sample_pair_sized(4, 8).unwrap();
        let a = m.swap(&p.source, &p.target).unwrap();
        assert_eq!(a.shape(), &[3, 8, 8]);
        assert!(a.data().iter().all(|v| v.abs() <= 1.0));
        assert_eq!(a, m.swap(&p.source, &p.target).unwrap());
    }
}
