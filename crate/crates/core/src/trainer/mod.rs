//! Single-stage training with all four losses, evaluation and ablation runs.

mod ablation;
mod config;
mod eval;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

pub use ablation::{run_ablation, AblationGrid, AblationRow, AblationTable, RowResult, PRESETS};
pub use config::{SupervisionSource, TrainConfig, CONFIG_KEYS};
pub use eval::{evaluate, predict, ConfusionMatrix, EvalReport};

use crate::data::{splitmix64, Scene};
use crate::error::{Error, Result};
use crate::feat_loss::{
    build_relations, feature_distance_loss, feature_reg_loss, select_pseudo_labels,
};
use crate::grid::{LabelMask, PairWindow};
use crate::kernels::{FeatMap, GridImage};
use crate::model::{backward, forward, ParamGrads, ParamSet};
use crate::seg_loss::{dfr_loss_with, partial_ce, LossResult, ProbMap};

/// Class index treated as background when splitting positive relations.
pub const BACKGROUND_CLASS: u8 = 0;

/// Values of the individual loss terms and their weighted sum.
///
/// A term that is disabled, or weighted by zero, is not evaluated and reads 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossTerms {
    pub pce: f64,
    pub dfr: f64,
    pub fd: f64,
    pub fr: f64,
    pub total: f64,
}

impl LossTerms {
    fn accumulate(&mut self, other: &LossTerms, scale: f64) {
        self.pce += scale * other.pce;
        self.dfr += scale * other.dfr;
        self.fd += scale * other.fd;
        self.fr += scale * other.fr;
        self.total += scale * other.total;
    }
}

/// The combined loss of one scene with gradients on logits and features.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneObjective {
    pub terms: LossTerms,
    pub grad_logits: Vec<f64>,
    pub grad_feat: Vec<f64>,
    pub annotated: usize,
    /// Fraction of pixels carrying a pseudo-label (0 when the feature head is idle).
    pub pseudo_coverage: f64,
}

fn non_finite(term: &'static str, detail: String) -> Error {
    Error::NonFinite {
        term,
        iteration: 0,
        scene: String::new(),
        detail,
    }
}

fn check(term: &'static str, r: &LossResult) -> Result<()> {
    if !r.value.is_finite() {
        return Err(non_finite(term, format!("value {}", r.value)));
    }
    if let Some(k) = r.grad.iter().position(|g| !g.is_finite()) {
        return Err(non_finite(term, format!("gradient entry {k} is {}", r.grad[k])));
    }
    Ok(())
}

/// Labels supervising the feature head for the configured source.
pub fn feature_supervision(
    probs: &ProbMap,
    scribbles: &LabelMask,
    config: &TrainConfig,
) -> Result<LabelMask> {
    match config.supervision_source {
        SupervisionSource::GroundtruthScribbles => Ok(scribbles.clone()),
        SupervisionSource::Pseudo => Ok(select_pseudo_labels(probs, config.gamma).labels),
        SupervisionSource::Both => {
            if scribbles.shape() != probs.shape() {
                return Err(Error::mismatch(probs.shape(), scribbles.shape()));
            }
            let mut labels = select_pseudo_labels(probs, config.gamma).labels;
            for (i, &s) in scribbles.labels().iter().enumerate() {
                if s != crate::grid::IGNORE {
                    labels.set(i, s);
                }
            }
            Ok(labels)
        }
    }
}

/// Evaluates the weighted objective on one scene given the network outputs.
///
/// Feature-head labels are derived from `probs` and act as constants.
pub fn scene_objective(
    probs: &ProbMap,
    feat: &FeatMap,
    image: &GridImage,
    scribbles: &LabelMask,
    config: &TrainConfig,
) -> Result<SceneObjective> {
    let shape = probs.shape();
    let window = PairWindow::new(shape, config.r)?;
    let kernel = config.kernel_params();

    let pce = partial_ce(probs, scribbles)?;
    check("partial cross-entropy", &pce)?;
    let mut terms = LossTerms {
        pce: pce.value,
        ..Default::default()
    };
    let mut grad_logits = pce.grad;
    let mut grad_feat = vec![0.0; feat.data().len()];
    let mut pseudo_coverage = 0.0;

    if config.enable_dfr && config.lambda1 > 0.0 {
        let dfr = dfr_loss_with(probs, image, feat, &window, &kernel, config.kernel_terms())?;
        check("dynamic feature regularized", &dfr)?;
        terms.dfr = dfr.value;
        for (g, d) in grad_logits.iter_mut().zip(&dfr.grad) {
            *g += config.lambda1 * d;
        }
    }

    if config.feature_head_active() {
        let labels = feature_supervision(probs, scribbles, config)?;
        pseudo_coverage = labels.annotated_count() as f64 / shape.len() as f64;
        let relations = build_relations(&labels, &window, BACKGROUND_CLASS)?;
        if config.enable_fd {
            let fd = feature_distance_loss(feat, &relations)?;
            check("feature distance", &fd)?;
            terms.fd = fd.value;
            for (g, d) in grad_feat.iter_mut().zip(&fd.grad) {
                *g += config.lambda2 * d;
            }
        }
        if config.enable_fr {
            let fr = feature_reg_loss(feat, image, &relations, &kernel)?;
            check("feature regularized", &fr)?;
            terms.fr = fr.value;
            for (g, d) in grad_feat.iter_mut().zip(&fr.grad) {
                *g += config.lambda2 * d;
            }
        }
    }

    terms.total = terms.pce + config.lambda1 * terms.dfr + config.lambda2 * (terms.fd + terms.fr);
    Ok(SceneObjective {
        terms,
        grad_logits,
        grad_feat,
        annotated: scribbles.annotated_count(),
        pseudo_coverage,
    })
}

/// Mean objective over `scenes` and its gradient with respect to every parameter.
pub fn batch_gradient(
    scenes: &[&Scene],
    params: &ParamSet,
    config: &TrainConfig,
) -> Result<(BatchStats, ParamGrads)> {
    if scenes.is_empty() {
        return Err(Error::InvalidParam("empty batch".into()));
    }
    let parts: Vec<(SceneObjective, ParamGrads)> = scenes
        .par_iter()
        .map(|s| {
            let run = || -> Result<_> {
                let out = forward(&s.image, params)?;
                let obj = scene_objective(&out.probs, &out.feat, &s.image, &s.scribbles, config)?;
                let grads = backward(&obj.grad_logits, &obj.grad_feat, &out.cache, params)?;
                Ok((obj, grads))
            };
            run().map_err(|e| match e {
                Error::NonFinite { term, detail, .. } => Error::NonFinite {
                    term,
                    iteration: 0,
                    scene: s.id.clone(),
                    detail,
                },
                other => other,
            })
        })
        .collect::<Result<_>>()?;

    // reduce in batch order so results do not depend on scheduling
    let scale = 1.0 / scenes.len() as f64;
    let mut grads = params.zero_grads();
    let mut stats = BatchStats::default();
    for (obj, g) in &parts {
        grads.add_scaled(g, scale);
        stats.terms.accumulate(&obj.terms, scale);
        stats.annotated += obj.annotated;
        stats.pseudo_coverage += scale * obj.pseudo_coverage;
    }
    Ok((stats, grads))
}

/// Batch-averaged loss terms plus bookkeeping.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BatchStats {
    pub terms: LossTerms,
    /// Annotated pixels summed over the batch.
    pub annotated: usize,
    pub pseudo_coverage: f64,
}

/// One line of the JSON-lines metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub iteration: usize,
    pub pce: f64,
    pub dfr: f64,
    pub fd: f64,
    pub fr: f64,
    pub total: f64,
    pub annotated: usize,
    pub pseudo_coverage: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_miou: Option<f64>,
}

impl MetricsRecord {
    pub fn new(iteration: usize, stats: &BatchStats) -> Self {
        MetricsRecord {
            iteration,
            pce: stats.terms.pce,
            dfr: stats.terms.dfr,
            fd: stats.terms.fd,
            fr: stats.terms.fr,
            total: stats.terms.total,
            annotated: stats.annotated,
            pseudo_coverage: stats.pseudo_coverage,
            val_miou: None,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }
}

/// Heavy-ball SGD: `v <- mu * v + g`, `theta <- theta - lr * v`.
#[derive(Clone, Debug)]
pub struct MomentumSgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Option<ParamGrads>,
}

impl MomentumSgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        MomentumSgd {
            lr,
            momentum,
            velocity: None,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamGrads) {
        let v = self.velocity.get_or_insert_with(|| params.zero_grads());
        v.trunk_w *= self.momentum;
        v.trunk_b *= self.momentum;
        v.seg_w *= self.momentum;
        v.seg_b *= self.momentum;
        v.feat_w *= self.momentum;
        v.feat_b *= self.momentum;
        v.add_scaled(grads, 1.0);
        params.trunk_w.scaled_add(-self.lr, &v.trunk_w);
        params.trunk_b.scaled_add(-self.lr, &v.trunk_b);
        params.seg_w.scaled_add(-self.lr, &v.seg_w);
        params.seg_b.scaled_add(-self.lr, &v.seg_b);
        params.feat_w.scaled_add(-self.lr, &v.feat_w);
        params.feat_b.scaled_add(-self.lr, &v.feat_b);
        params.bump_version();
    }
}

/// Computes the batch objective and applies one optimizer update.
pub fn train_step(
    batch: &[&Scene],
    params: &mut ParamSet,
    optimizer: &mut MomentumSgd,
    config: &TrainConfig,
    iteration: usize,
) -> Result<MetricsRecord> {
    let (stats, grads) = batch_gradient(batch, params, config).map_err(|e| match e {
        Error::NonFinite {
            term,
            scene,
            detail,
            ..
        } => Error::NonFinite {
            term,
            iteration,
            scene,
            detail,
        },
        other => other,
    })?;
    optimizer.step(params, &grads);
    Ok(MetricsRecord::new(iteration, &stats))
}

/// Draws scene indices epoch by epoch, reshuffling between epochs.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(scenes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0xba7c_4e5));
        let mut order: Vec<usize> = (0..scenes).collect();
        order.shuffle(&mut rng);
        BatchSampler {
            order,
            cursor: 0,
            rng,
        }
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let size = size.min(self.order.len());
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

/// Parameters, optimizer state and batch order for one training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub params: ParamSet,
    optimizer: MomentumSgd,
    iteration: usize,
}

/// Outcome of [`Trainer::fit`].
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub iterations: usize,
    pub last: Option<MetricsRecord>,
    pub final_eval: Option<EvalReport>,
}

impl Trainer {
    pub fn new(config: TrainConfig, classes: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = ParamSet::init(config.model_dims(classes), &mut rng)?;
        Ok(Trainer {
            optimizer: MomentumSgd::new(config.lr, config.momentum),
            config,
            params,
            iteration: 0,
        })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Runs `config.iterations` updates on `train`, evaluating on `val` every
    /// `eval_every` iterations and at the end. Every record is passed to `sink`.
    pub fn fit(
        &mut self,
        train: &[Scene],
        val: &[Scene],
        mut sink: impl FnMut(&MetricsRecord) -> Result<()>,
    ) -> Result<TrainSummary> {
        if train.is_empty() {
            return Err(Error::InvalidParam("training needs at least one scene".into()));
        }
        let mut sampler = BatchSampler::new(train.len(), self.config.seed);
        let mut last = None;
        let mut final_eval = None;
        for _ in 0..self.config.iterations {
            let idx = sampler.next_batch(self.config.batch_size);
            let batch: Vec<&Scene> = idx.iter().map(|&k| &train[k]).collect();
            self.iteration += 1;
            let mut record = train_step(
                &batch,
                &mut self.params,
                &mut self.optimizer,
                &self.config,
                self.iteration,
            )?;
            let done = self.iteration == self.config.iterations;
            let periodic = self.config.eval_every > 0 && self.iteration % self.config.eval_every == 0;
            if !val.is_empty() && (done || periodic) {
                let report = evaluate(&self.params, val)?;
                record.val_miou = Some(report.miou);
                if done {
                    final_eval = Some(report);
                }
            }
            sink(&record)?;
            last = Some(record);
        }
        Ok(TrainSummary {
            iterations: self.iteration,
            last,
            final_eval,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::BenchmarkSpec;
    use crate::grid::GridShape;

    fn tiny_bench() -> crate::data::Benchmark {
        BenchmarkSpec::new(4, 2, GridShape { h: 16, w: 16 }, 3, false, 9)
            .generate()
            .unwrap()
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            iterations: 5,
            batch_size: 2,
            r: 2,
            hidden: 8,
            feat_dim: 4,
            ..Default::default()
        }
    }

    #[test]
    fn zero_weights_match_cross_entropy_only() {
        let bench = tiny_bench();
        let batch: Vec<&Scene> = bench.train.iter().take(2).collect();
        let base = Trainer::new(small_config(), 3).unwrap().params;
        let zero = TrainConfig {
            lambda1: 0.0,
            lambda2: 0.0,
            ..small_config()
        };
        let off = TrainConfig {
            enable_dfr: false,
            enable_fd: false,
            enable_fr: false,
            ..small_config()
        };
        let (sa, ga) = batch_gradient(&batch, &base, &zero).unwrap();
        let (sb, gb) = batch_gradient(&batch, &base, &off).unwrap();
        assert_eq!(ga, gb);
        assert_eq!(sa.terms.total, sb.terms.total);
        assert_eq!(sb.terms.total, sb.terms.pce);
    }

    #[test]
    fn total_is_weighted_sum_of_terms() {
        let bench = tiny_bench();
        let cfg = TrainConfig {
            gamma: 0.3,
            ..small_config()
        };
        let params = Trainer::new(cfg.clone(), 3).unwrap().params;
        let s = &bench.train[0];
        let out = forward(&s.image, &params).unwrap();
        let obj = scene_objective(&out.probs, &out.feat, &s.image, &s.scribbles, &cfg).unwrap();
        let t = obj.terms;
        assert!(t.dfr > 0.0 && t.fd > 0.0);
        let expect = t.pce + cfg.lambda1 * t.dfr + cfg.lambda2 * (t.fd + t.fr);
        assert!((t.total - expect).abs() <= 1e-12 * expect.abs().max(1.0));
        assert_eq!(t.pce, partial_ce(&out.probs, &s.scribbles).unwrap().value);
    }

    #[test]
    fn both_source_overrides_with_scribbles() {
        let bench = tiny_bench();
        let s = &bench.train[0];
        let cfg = TrainConfig {
            supervision_source: SupervisionSource::Both,
            gamma: 0.01,
            ..small_config()
        };
        let params = Trainer::new(cfg.clone(), 3).unwrap().params;
        let out = forward(&s.image, &params).unwrap();
        let labels = feature_supervision(&out.probs, &s.scribbles, &cfg).unwrap();
        for i in 0..labels.shape().len() {
            if s.scribbles.is_labeled(i) {
                assert_eq!(labels.get(i), s.scribbles.get(i));
            } else {
                assert!(labels.is_labeled(i));
            }
        }
    }

    #[test]
    fn training_is_deterministic_and_monotone_in_iteration() {
        let bench = tiny_bench();
        let run = || {
            let mut t = Trainer::new(small_config(), 3).unwrap();
            let mut recs = Vec::new();
            t.fit(&bench.train, &bench.val, |r| {
                recs.push(r.to_json());
                Ok(())
            })
            .unwrap();
            (t.params, recs)
        };
        let (pa, ra) = run();
        let (pb, rb) = run();
        assert_eq!(pa, pb);
        assert_eq!(ra, rb);
        assert_eq!(ra.len(), 5);
        assert!(ra.last().unwrap().contains("val_miou"));
        assert!(ra[0].starts_with("{\"iteration\":1,"));
    }

    #[test]
    fn sampler_covers_each_scene_once_per_epoch() {
        let mut s = BatchSampler::new(7, 3);
        let mut seen: Vec<usize> = (0..7).flat_map(|_| s.next_batch(1)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn non_finite_loss_names_the_term() {
        let bench = tiny_bench();
        let mut params = Trainer::new(small_config(), 3).unwrap().params;
        params.seg_b[0] = f64::NAN;
        let mut opt = MomentumSgd::new(0.1, 0.9);
        let batch: Vec<&Scene> = bench.train.iter().take(1).collect();
        let err = train_step(&batch, &mut params, &mut opt, &small_config(), 7);
        match err {
            Err(Error::NonFinite {
                term, iteration, scene, ..
            }) => {
                assert_eq!(term, "forward pass");
                assert_eq!(iteration, 7);
                assert_eq!(scene, bench.train[0].id);
            }
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn momentum_matches_hand_update() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dims = crate::model::ModelDims {
            patch: 1,
            hidden: 2,
            classes: 2,
            feat_dim: 1,
        };
        let mut p = ParamSet::init(dims, &mut rng).unwrap();
        let start = p.seg_b[0];
        let mut g = p.zero_grads();
        g.seg_b[0] = 1.0;
        let mut opt = MomentumSgd::new(0.5, 0.9);
        opt.step(&mut p, &g);
        opt.step(&mut p, &g);
        // v1 = 1, v2 = 1.9
        assert!((p.seg_b[0] - (start - 0.5 * 2.9)).abs() < 1e-15);
        assert_eq!(p.version(), 2);
    }
}
