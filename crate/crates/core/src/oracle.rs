//! Independent reference implementations and a finite-difference checker.
//!
//! Nothing in this module calls into the loss, kernel or pair code it checks:
//! the brute-force versions below work on raw slices with plain nested loops
//! over every pixel pair, so a shared bug cannot hide on both sides.

use std::collections::BTreeSet;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::data::BenchmarkSpec;
use crate::feat_loss::{build_relations, feature_distance_loss, feature_reg_loss, select_pseudo_labels};
use crate::grid::{enumerate_pairs, GridShape, LabelMask, Pair, PairWindow, IGNORE};
use crate::kernels::{kernel_full, kernel_shallow, FeatMap, GridImage, KernelParams, KernelTerms};
use crate::model::{backward, forward, ModelDims, ParamSet};
use crate::seg_loss::{dfr_loss_with, partial_ce, ProbMap};
use crate::trainer::{scene_objective, SupervisionSource, TrainConfig, Trainer};

/// Largest side accepted by [`brute_losses`].
pub const ORACLE_MAX_SIDE: usize = 8;
/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// All ordered pairs `(i, j)`, `i != j`, within Chebyshev distance `r`, found by testing every pair.
pub fn brute_pairs(shape: GridShape, r: usize) -> BTreeSet<Pair> {
    let n = shape.h * shape.w;
    let mut out = BTreeSet::new();
    for i in 0..n {
        for j in 0..n {
            let (xi, yi) = (i % shape.w, i / shape.w);
            let (xj, yj) = (j % shape.w, j / shape.w);
            if i != j && xi.abs_diff(xj) <= r && yi.abs_diff(yj) <= r {
                out.insert((i, j));
            }
        }
    }
    out
}

/// A self-contained loss evaluation problem in raw, pixel-major arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub h: usize,
    pub w: usize,
    pub classes: usize,
    pub dim: usize,
    pub r: usize,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub rgb: Vec<f64>,
    pub feat: Vec<f64>,
    /// Annotations for the cross-entropy term.
    pub scribbles: Vec<u8>,
    /// Labels defining the feature-head pair relations.
    pub relation_labels: Vec<u8>,
    pub sigma: [f64; 3],
    pub color_term: bool,
    pub feature_term: bool,
}

/// The four loss values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValues {
    pub pce: f64,
    pub dfr: f64,
    pub fd: f64,
    pub fr: f64,
}

impl Instance {
    /// Random instance with sides up to `max_side`, `2..=max_classes` classes,
    /// feature dimension up to `max_dim` and radius up to `max_r`.
    pub fn random<R: Rng>(
        rng: &mut R,
        max_side: usize,
        max_classes: usize,
        max_dim: usize,
        max_r: usize,
    ) -> Self {
        let h = rng.gen_range(1..=max_side);
        let w = rng.gen_range(1..=max_side);
        let n = h * w;
        let classes = rng.gen_range(2..=max_classes.max(2));
        let dim = rng.gen_range(1..=max_dim.max(1));
        let r = rng.gen_range(1..=max_r.max(1));
        let logits: Vec<f64> = (0..n * classes).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mut probs = logits.clone();
        for row in probs.chunks_exact_mut(classes) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|v| (v - m).exp()).sum();
            for v in row.iter_mut() {
                *v = (*v - m).exp() / s;
            }
        }
        let rgb = (0..3 * n).map(|_| rng.gen::<f64>()).collect();
        let feat = separated_features(rng, n, dim);
        let mut label = |p: f64| -> Vec<u8> {
            (0..n)
                .map(|_| {
                    if rng.gen_bool(p) {
                        rng.gen_range(0..classes as u8)
                    } else {
                        IGNORE
                    }
                })
                .collect()
        };
        let mut scribbles = label(0.4);
        if scribbles.iter().all(|&l| l == IGNORE) {
            scribbles[0] = 0;
        }
        let relation_labels = label(0.7);
        Instance {
            h,
            w,
            classes,
            dim,
            r,
            logits,
            probs,
            rgb,
            feat,
            scribbles,
            relation_labels,
            sigma: [
                rng.gen_range(0.5..8.0),
                rng.gen_range(0.1..1.0),
                rng.gen_range(0.5..6.0),
            ],
            color_term: rng.gen_bool(0.8),
            feature_term: rng.gen_bool(0.8),
        }
    }

    pub fn shape(&self) -> GridShape {
        GridShape {
            h: self.h,
            w: self.w,
        }
    }

    pub fn kernel_params(&self) -> KernelParams {
        KernelParams {
            sigma1: self.sigma[0],
            sigma2: self.sigma[1],
            sigma3: self.sigma[2],
        }
    }

    pub fn kernel_terms(&self) -> KernelTerms {
        KernelTerms {
            color: self.color_term,
            feature: self.feature_term,
        }
    }

    pub fn prob_map(&self) -> Result<ProbMap> {
        ProbMap::from_logits(self.shape(), self.classes, &self.logits)
    }

    pub fn feat_map(&self) -> Result<FeatMap> {
        FeatMap::new(self.shape(), self.dim, self.feat.clone())
    }

    pub fn image(&self) -> Result<GridImage> {
        GridImage::new(self.shape(), self.rgb.clone())
    }

    pub fn scribble_mask(&self) -> Result<LabelMask> {
        LabelMask::new(self.shape(), self.scribbles.clone())
    }

    pub fn relation_mask(&self) -> Result<LabelMask> {
        LabelMask::new(self.shape(), self.relation_labels.clone())
    }

    /// The four losses computed by the production modules.
    pub fn module_losses(&self) -> Result<LossValues> {
        let probs = self.prob_map()?;
        let feat = self.feat_map()?;
        let image = self.image()?;
        let window = PairWindow::new(self.shape(), self.r)?;
        let params = self.kernel_params();
        let relations = build_relations(&self.relation_mask()?, &window, 0)?;
        Ok(LossValues {
            pce: partial_ce(&probs, &self.scribble_mask()?)?.value,
            dfr: dfr_loss_with(&probs, &image, &feat, &window, &params, self.kernel_terms())?.value,
            fd: feature_distance_loss(&feat, &relations)?.value,
            fr: feature_reg_loss(&feat, &image, &relations, &params)?.value,
        })
    }
}

/// Features in `[0.05, 2)` where, in every coordinate, all pixels hold distinct
/// jittered ranks at least `0.97 / n` apart. Finite-difference probes then never
/// cross a kink of `|a - b|`, and no pair is so close that `log(1 - D)` curves
/// too sharply for central differences.
fn separated_features<R: Rng>(rng: &mut R, n: usize, dim: usize) -> Vec<f64> {
    let step = 1.95 / n as f64;
    let mut f = vec![0.0; n * dim];
    let mut ranks: Vec<usize> = (0..n).collect();
    for k in 0..dim {
        ranks.shuffle(rng);
        for (i, &rank) in ranks.iter().enumerate() {
            f[i * dim + k] = 0.05 + step * (rank as f64 + rng.gen_range(0.25..0.75));
        }
    }
    f
}

/// Direct evaluation of all four losses with nested loops over ordered pixel pairs.
pub fn brute_losses(inst: &Instance) -> Result<LossValues> {
    let (h, w, c, d) = (inst.h, inst.w, inst.classes, inst.dim);
    if h > ORACLE_MAX_SIDE || w > ORACLE_MAX_SIDE {
        return Err(Error::SizeGuard {
            h,
            w,
            limit: ORACLE_MAX_SIDE,
        });
    }
    let n = h * w;
    let eps = 1e-8;
    let near = |i: usize, j: usize| {
        i != j && (i % w).abs_diff(j % w) <= inst.r && (i / w).abs_diff(j / w) <= inst.r
    };
    let sq = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum() };
    let pos = |i: usize| [(i % w) as f64, (i / w) as f64];
    let rgb = |i: usize| &inst.rgb[3 * i..3 * i + 3];
    let feat = |i: usize| &inst.feat[d * i..d * i + d];
    let prob = |i: usize| &inst.probs[c * i..c * i + c];
    let [s1, s2, s3] = inst.sigma;

    let mut annotated = 0.0;
    let mut pce = 0.0;
    for i in 0..n {
        let l = inst.scribbles[i];
        if l != IGNORE {
            annotated += 1.0;
            pce -= prob(i)[l as usize].max(eps).ln();
        }
    }
    let pce = pce / annotated;

    let mut dfr = 0.0;
    for i in 0..n {
        for j in 0..n {
            if !near(i, j) {
                continue;
            }
            let mut e = sq(&pos(i), &pos(j)) / (2.0 * s1 * s1);
            if inst.color_term {
                e += sq(rgb(i), rgb(j)) / (2.0 * s2 * s2);
            }
            if inst.feature_term {
                e += sq(feat(i), feat(j)) / (2.0 * s3 * s3);
            }
            let agree: f64 = (0..c).map(|k| prob(i)[k] * prob(j)[k]).sum();
            dfr += (-e).exp() * (1.0 - agree);
        }
    }
    let dfr = dfr / n as f64;

    let m = &inst.relation_labels;
    let (mut bg, mut fg, mut neg) = ((0.0, 0.0), (0.0, 0.0), (0.0, 0.0));
    let mut fr = 0.0;
    for i in 0..n {
        for j in 0..n {
            if !near(i, j) || m[i] == IGNORE || m[j] == IGNORE {
                continue;
            }
            let l1: f64 = feat(i).iter().zip(feat(j)).map(|(a, b)| (a - b).abs()).sum();
            let sim = (-l1 / d as f64).exp().clamp(eps, 1.0 - eps);
            if m[i] != m[j] {
                neg.0 += (1.0 - sim).ln();
                neg.1 += 1.0;
            } else if m[i] == 0 {
                bg.0 += sim.ln();
                bg.1 += 1.0;
            } else {
                fg.0 += sim.ln();
                fg.1 += 1.0;
            }
            let kf = (-sq(&pos(i), &pos(j)) / (2.0 * s1 * s1) - sq(rgb(i), rgb(j)) / (2.0 * s2 * s2)).exp();
            fr += kf * l1 / d as f64;
        }
    }
    let mean = |(sum, count): (f64, f64)| if count > 0.0 { sum / count } else { 0.0 };
    let fd = -mean(bg) - mean(fg) - 2.0 * mean(neg);

    Ok(LossValues {
        pce,
        dfr,
        fd,
        fr: fr / n as f64,
    })
}

/// Largest `|analytic - numeric| / max(1, |numeric|)` over all coordinates, using
/// central differences of `f` at `x` with the given step.
pub fn fd_check(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    x: &[f64],
    analytic: &[f64],
    step: f64,
) -> Result<f64> {
    if analytic.len() != x.len() {
        return Err(Error::mismatch(x.len(), analytic.len()));
    }
    let mut probe = x.to_vec();
    let mut worst: f64 = 0.0;
    for k in 0..x.len() {
        probe[k] = x[k] + step;
        let up = f(&probe)?;
        probe[k] = x[k] - step;
        let down = f(&probe)?;
        probe[k] = x[k];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFiniteProbe { coordinate: k });
        }
        let numeric = (up - down) / (2.0 * step);
        worst = worst.max((analytic[k] - numeric).abs() / numeric.abs().max(1.0));
    }
    Ok(worst)
}

/// Outcome of one verification check.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    /// Worst observed error (0 for exact checks that passed).
    pub error: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn within(name: &str, error: f64, tolerance: f64, detail: String) -> Self {
        Check {
            name: name.to_string(),
            error,
            tolerance,
            passed: error <= tolerance,
            detail,
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}: error {:.3e} (tolerance {:.0e}) {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.error,
            self.tolerance,
            self.detail
        )
    }
}

/// Instances per random check.
#[derive(Clone, Copy, Debug)]
pub struct SuiteOptions {
    pub loss_instances: usize,
    pub gradient_instances: usize,
    pub network_instances: usize,
    pub seed: u64,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            loss_instances: 200,
            gradient_instances: 40,
            network_instances: 6,
            seed: 0,
        }
    }
}

/// Exact agreement of the production pair enumeration with [`brute_pairs`]
/// on every shape up to 6x6 and radius up to 3.
pub fn check_pairs() -> Result<Check> {
    let mut mismatches = 0;
    let mut shapes = 0;
    for h in 1..=6 {
        for w in 1..=6 {
            for r in 1..=3 {
                let shape = GridShape::new(h, w)?;
                let fast = enumerate_pairs(shape, r)?;
                let set: BTreeSet<Pair> = fast.iter().copied().collect();
                if set.len() != fast.len() || set != brute_pairs(shape, r) {
                    mismatches += 1;
                }
                shapes += 1;
            }
        }
    }
    Ok(Check {
        name: "pair enumeration".into(),
        error: mismatches as f64,
        tolerance: 0.0,
        passed: mismatches == 0,
        detail: format!("{shapes} shape/radius combinations"),
    })
}

/// Production loss values against [`brute_losses`] on random instances.
pub fn check_loss_values(opts: &SuiteOptions) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut worst: f64 = 0.0;
    for _ in 0..opts.loss_instances {
        let inst = Instance::random(&mut rng, 6, 4, 8, 3);
        let a = inst.module_losses()?;
        let b = brute_losses(&inst)?;
        for (x, y) in [(a.pce, b.pce), (a.dfr, b.dfr), (a.fd, b.fd), (a.fr, b.fr)] {
            worst = worst.max((x - y).abs() / y.abs().max(1.0));
        }
    }
    Ok(Check::within(
        "loss values vs brute force",
        worst,
        1e-12,
        format!("{} instances", opts.loss_instances),
    ))
}

/// Analytic gradients of each loss against central differences.
pub fn check_loss_gradients(opts: &SuiteOptions) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37);
    let mut worst = [0.0f64; 4];
    for _ in 0..opts.gradient_instances {
        let inst = Instance::random(&mut rng, 5, 4, 6, 3);
        let shape = inst.shape();
        let image = inst.image()?;
        let feat = inst.feat_map()?;
        let scribbles = inst.scribble_mask()?;
        let window = PairWindow::new(shape, inst.r)?;
        let params = inst.kernel_params();
        let terms = inst.kernel_terms();
        let relations = build_relations(&inst.relation_mask()?, &window, 0)?;
        let probs = inst.prob_map()?;
        let c = inst.classes;
        let d = inst.dim;

        let g = partial_ce(&probs, &scribbles)?.grad;
        worst[0] = worst[0].max(fd_check(
            |z| partial_ce(&ProbMap::from_logits(shape, c, z)?, &scribbles).map(|r| r.value),
            &inst.logits,
            &g,
            FD_STEP,
        )?);
        let g = dfr_loss_with(&probs, &image, &feat, &window, &params, terms)?.grad;
        worst[1] = worst[1].max(fd_check(
            |z| {
                dfr_loss_with(&ProbMap::from_logits(shape, c, z)?, &image, &feat, &window, &params, terms)
                    .map(|r| r.value)
            },
            &inst.logits,
            &g,
            FD_STEP,
        )?);
        let g = feature_distance_loss(&feat, &relations)?.grad;
        worst[2] = worst[2].max(fd_check(
            |f| feature_distance_loss(&FeatMap::new(shape, d, f.to_vec())?, &relations).map(|r| r.value),
            &inst.feat,
            &g,
            FD_STEP,
        )?);
        let g = feature_reg_loss(&feat, &image, &relations, &params)?.grad;
        worst[3] = worst[3].max(fd_check(
            |f| {
                feature_reg_loss(&FeatMap::new(shape, d, f.to_vec())?, &image, &relations, &params)
                    .map(|r| r.value)
            },
            &inst.feat,
            &g,
            FD_STEP,
        )?);
    }
    let detail = format!("{} instances", opts.gradient_instances);
    Ok(vec![
        Check::within("partial cross-entropy gradient (logits)", worst[0], 1e-5, detail.clone()),
        Check::within("regularized loss gradient (logits)", worst[1], 1e-5, detail.clone()),
        Check::within("feature distance gradient (features)", worst[2], 1e-5, detail.clone()),
        Check::within("feature regularized gradient (features)", worst[3], 1e-5, detail),
    ])
}

struct TinyScene {
    image: GridImage,
    scribbles: LabelMask,
}

fn tiny_scene(rng: &mut ChaCha8Rng, classes: usize) -> Result<TinyScene> {
    let shape = GridShape::new(5, 6)?;
    let rgb = (0..3 * shape.len()).map(|_| rng.gen::<f64>()).collect();
    let labels = (0..shape.len())
        .map(|i| if i % 3 == 0 { (i % classes) as u8 } else { IGNORE })
        .collect();
    Ok(TinyScene {
        image: GridImage::new(shape, rgb)?,
        scribbles: LabelMask::new(shape, labels)?,
    })
}

fn network_loss(scene: &TinyScene, params: &ParamSet, config: &TrainConfig) -> Result<f64> {
    let out = forward(&scene.image, params)?;
    Ok(scene_objective(&out.probs, &out.feat, &scene.image, &scene.scribbles, config)?
        .terms
        .total)
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        r: 2,
        sigma3: 0.7,
        lambda1: 0.5,
        lambda2: 0.3,
        // scribble relations keep the objective smooth in the parameters;
        // pseudo-labels would jump wherever a probability crosses the threshold
        supervision_source: SupervisionSource::GroundtruthScribbles,
        // features in the kernel are held constant by design, which finite
        // differences of the total would not respect
        feature_in_kernel: false,
        ..Default::default()
    }
}

/// End-to-end parameter gradients of the combined objective on a tiny network.
pub fn check_network_gradient(opts: &SuiteOptions) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x51ab);
    let dims = ModelDims {
        patch: 3,
        hidden: 6,
        classes: 3,
        feat_dim: 3,
    };
    let config = tiny_config();
    let mut worst: f64 = 0.0;
    for _ in 0..opts.network_instances {
        let scene = tiny_scene(&mut rng, dims.classes)?;
        let params = ParamSet::init(dims, &mut rng)?;
        let out = forward(&scene.image, &params)?;
        let obj = scene_objective(&out.probs, &out.feat, &scene.image, &scene.scribbles, &config)?;
        let grads = backward(&obj.grad_logits, &obj.grad_feat, &out.cache, &params)?;
        let mut probe = params.clone();
        worst = worst.max(fd_check(
            |theta| {
                probe.set_flat(theta)?;
                network_loss(&scene, &probe, &config)
            },
            &params.to_flat(),
            &grads.to_flat(),
            FD_STEP,
        )?);
    }
    Ok(Check::within(
        "end-to-end parameter gradient",
        worst,
        1e-4,
        format!("{} networks", opts.network_instances),
    ))
}

/// The regularized loss must not send gradient into the features shaping its kernel.
///
/// With the feature-head losses disabled, the feature head receives exactly zero
/// gradient even though the loss value demonstrably depends on the features.
pub fn check_stop_gradient(opts: &SuiteOptions) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5709);
    let dims = ModelDims {
        patch: 3,
        hidden: 6,
        classes: 3,
        feat_dim: 3,
    };
    let config = TrainConfig {
        enable_fd: false,
        enable_fr: false,
        feature_in_kernel: true,
        ..tiny_config()
    };
    let mut leaked: f64 = 0.0;
    let mut sensitivity: f64 = 0.0;
    for _ in 0..opts.network_instances {
        let scene = tiny_scene(&mut rng, dims.classes)?;
        let params = ParamSet::init(dims, &mut rng)?;
        let out = forward(&scene.image, &params)?;
        let obj = scene_objective(&out.probs, &out.feat, &scene.image, &scene.scribbles, &config)?;
        leaked = leaked.max(obj.grad_feat.iter().fold(0.0, |m, g| m.max(g.abs())));
        let grads = backward(&obj.grad_logits, &obj.grad_feat, &out.cache, &params)?;
        let (fw, fb) = grads.feature_head();
        leaked = leaked.max(fw.iter().chain(fb.iter()).fold(0.0, |m, g| m.max(g.abs())));

        // the kernel does read the features: moving them moves the loss
        let window = PairWindow::new(scene.image.shape(), config.r)?;
        let kernel = config.kernel_params();
        let value = |f: &[f64]| -> Result<f64> {
            let feat = FeatMap::new(scene.image.shape(), dims.feat_dim, f.to_vec())?;
            Ok(dfr_loss_with(&out.probs, &scene.image, &feat, &window, &kernel, KernelTerms::FULL)?.value)
        };
        let shifted: Vec<f64> = out.feat.data().iter().enumerate().map(|(k, v)| v + 0.1 * (k % 2) as f64).collect();
        sensitivity = sensitivity.max((value(&shifted)? - value(out.feat.data())?).abs());
    }
    let passed = leaked == 0.0 && sensitivity > 0.0;
    Ok(Check {
        name: "stop-gradient through kernel features".into(),
        error: leaked,
        tolerance: 0.0,
        passed,
        detail: format!("loss moves by {sensitivity:.3e} when features move"),
    })
}

fn count_check(name: &str, violations: usize, detail: String) -> Check {
    Check {
        name: name.into(),
        error: violations as f64,
        tolerance: 0.0,
        passed: violations == 0,
        detail,
    }
}

/// Structural properties on random instances: kernel symmetry, range and
/// factorization, threshold monotonicity, relation symmetry, shift invariance
/// of the feature losses, and empty relation sets.
pub fn check_invariants(opts: &SuiteOptions) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x1a7);
    let mut kernel = 0;
    let mut gamma = 0;
    let mut relation = 0;
    let mut shift = 0;
    let mut empty = 0;
    for _ in 0..opts.loss_instances {
        let inst = Instance::random(&mut rng, 6, 4, 8, 3);
        let shape = inst.shape();
        let n = shape.len();
        let image = inst.image()?;
        let feat = inst.feat_map()?;
        let params = inst.kernel_params();
        for i in 0..n {
            for j in 0..n {
                let k = kernel_full(i, j, &image, &feat, &params);
                let f2: f64 = feat.pixel(i).iter().zip(feat.pixel(j)).map(|(a, b)| (a - b) * (a - b)).sum();
                let factored = kernel_shallow(i, j, &image, &params) * (-f2 / (2.0 * params.sigma3 * params.sigma3)).exp();
                let bad = k != kernel_full(j, i, &image, &feat, &params)
                    || !(k > 0.0 && k <= 1.0)
                    || (i == j && k != 1.0)
                    || (k - factored).abs() > 1e-14;
                kernel += bad as usize;
            }
        }

        let probs = inst.prob_map()?;
        let lo = rng.gen_range(0.05..0.95);
        let hi = rng.gen_range(lo..1.0);
        let loose = select_pseudo_labels(&probs, lo).labels;
        let strict = select_pseudo_labels(&probs, hi).labels;
        gamma += loose
            .labels()
            .iter()
            .zip(strict.labels())
            .filter(|(a, b)| **b != IGNORE && a != b)
            .count();

        let window = PairWindow::new(shape, inst.r)?;
        let rel = build_relations(&inst.relation_mask()?, &window, 0)?;
        for i in 0..n {
            for j in 0..n {
                relation += (rel.label(i, j) != rel.label(j, i)) as usize;
            }
        }

        let c = rng.gen_range(0.0..3.0);
        let moved = FeatMap::new(shape, inst.dim, inst.feat.iter().map(|v| v + c).collect())?;
        let fr = |f: &FeatMap| feature_reg_loss(f, &image, &rel, &params).map(|r| r.value);
        let fd = |f: &FeatMap| feature_distance_loss(f, &rel).map(|r| r.value);
        if (fr(&feat)? - fr(&moved)?).abs() > 1e-10 || (fd(&feat)? - fd(&moved)?).abs() > 1e-10 {
            shift += 1;
        }

        let none = build_relations(&LabelMask::filled(shape, IGNORE), &window, 0)?;
        let a = feature_distance_loss(&feat, &none)?;
        let b = feature_reg_loss(&feat, &image, &none, &params)?;
        if a.value != 0.0 || b.value != 0.0 || a.grad.iter().chain(&b.grad).any(|g| *g != 0.0) {
            empty += 1;
        }
    }
    let detail = format!("{} instances", opts.loss_instances);
    Ok(vec![
        count_check("kernel symmetry, range and factorization", kernel, detail.clone()),
        count_check("pseudo-label threshold monotonicity", gamma, detail.clone()),
        count_check("pair relation symmetry", relation, detail.clone()),
        count_check("feature loss shift invariance", shift, detail.clone()),
        count_check("empty relation sets", empty, detail),
        check_determinism()?,
    ])
}

/// Two training runs under the same seed end with bit-identical parameters.
pub fn check_determinism() -> Result<Check> {
    let bench = BenchmarkSpec::new(4, 2, GridShape { h: 16, w: 16 }, 3, false, 11).generate()?;
    let config = TrainConfig {
        iterations: 4,
        batch_size: 2,
        r: 2,
        hidden: 8,
        feat_dim: 4,
        gamma: 0.4,
        seed: 3,
        ..Default::default()
    };
    let run = || -> Result<Vec<u64>> {
        let mut t = Trainer::new(config.clone(), bench.classes)?;
        t.fit(&bench.train, &bench.val, |_| Ok(()))?;
        Ok(t.params.to_flat().iter().map(|v| v.to_bits()).collect())
    };
    let (a, b) = (run()?, run()?);
    let differing = a.iter().zip(&b).filter(|(x, y)| x != y).count();
    Ok(count_check("determinism under a fixed seed", differing, format!("{} parameters", a.len())))
}

/// Every check above, in a fixed order.
pub fn verification_suite(opts: &SuiteOptions) -> Result<Vec<Check>> {
    let mut out = vec![check_pairs()?, check_loss_values(opts)?];
    out.extend(check_loss_gradients(opts)?);
    out.push(check_network_gradient(opts)?);
    out.push(check_stop_gradient(opts)?);
    out.extend(check_invariants(opts)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn brute_pairs_small_cases() {
        assert!(brute_pairs(GridShape::new(1, 1).unwrap(), 3).is_empty());
        assert_eq!(brute_pairs(GridShape::new(2, 2).unwrap(), 1).len(), 12);
    }

    #[test]
    fn fd_check_quadratic() {
        let err = fd_check(|x| Ok(x[0] * x[0] + x[1] * x[1]), &[1.0, 2.0], &[2.0, 4.0], FD_STEP).unwrap();
        assert!(err < 1e-8);
        let bad = fd_check(|x| Ok(x[0] * x[0]), &[1.0], &[3.0], FD_STEP).unwrap();
        assert!((bad - 0.5).abs() < 1e-6);
    }

    #[test]
    fn fd_check_reports_non_finite_coordinate() {
        let err = fd_check(|x| Ok(if x[1] > 0.5 { f64::NAN } else { 0.0 }), &[0.0, 0.5], &[0.0, 0.0], 0.1);
        assert!(matches!(err, Err(Error::NonFiniteProbe { coordinate: 1 })));
    }

    #[test]
    fn size_guard() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut inst = Instance::random(&mut rng, 2, 2, 2, 1);
        inst.h = 9;
        assert!(matches!(brute_losses(&inst), Err(Error::SizeGuard { .. })));
    }

    #[test]
    fn one_hot_probs_give_zero_regularizer() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut inst = Instance::random(&mut rng, 4, 3, 3, 2);
        for row in inst.probs.chunks_exact_mut(inst.classes) {
            row.fill(0.0);
            row[1] = 1.0;
        }
        assert_eq!(brute_losses(&inst).unwrap().dfr, 0.0);
    }

    #[test]
    fn constant_features_give_zero_feature_regularizer() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut inst = Instance::random(&mut rng, 4, 3, 3, 2);
        inst.feat.fill(0.7);
        assert_eq!(brute_losses(&inst).unwrap().fr, 0.0);
    }

    #[test]
    fn small_suite_passes() {
        let opts = SuiteOptions {
            loss_instances: 20,
            gradient_instances: 4,
            network_instances: 1,
            seed: 1,
        };
        for check in verification_suite(&opts).unwrap() {
            assert!(check.passed, "{check}");
        }
    }
}
