//! Federated learning with an honest-but-curious server.
//!
//! Each round, every worker samples a batch from its shard, computes the
//! batch gradient at the current parameters, and shares it. The server
//! aggregates the bundles weighted by shard size and takes one SGD step —
//! and, when an attack template is configured, also runs a reconstruction
//! against every received bundle. The attack is passive: it reads the
//! logged bundle and the pre-update parameters, and nothing about the
//! training trajectory may change when it is enabled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{self, MatchReport};
use crate::models::{batch_gradient, softmax_stable, Arch, GradientBundle, ModelParams};
use crate::recon::{reconstruct, Prior, ReconJob, ReconResult, Regularizer};
use crate::tensor::Tensor;

/// Reconstruction hyperparameters applied to every worker bundle. The
/// per-run seed is varied per (round, worker) so parallel attacks do not
/// share initial guesses.
#[derive(Clone, Debug)]
pub struct AttackConfig {
    pub prior: Prior,
    pub iterations: usize,
    pub learning_rate: f64,
    pub regularizer: Regularizer,
    pub lambda0: f64,
    pub decay_interval: usize,
    pub decay_factor: f64,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            prior: Prior::Uniform01,
            iterations: 5000,
            learning_rate: 0.05,
            regularizer: Regularizer::None,
            lambda0: 0.0,
            decay_interval: 200,
            decay_factor: 0.9,
            seed: 0,
        }
    }
}

/// One simulated deployment.
#[derive(Clone, Debug)]
pub struct FlConfig {
    pub arch: Arch,
    /// Worker count; must match the number of shards handed to [`run`].
    pub workers: usize,
    pub rounds: usize,
    pub batch: usize,
    /// Server step size η.
    pub learning_rate: f64,
    /// Seeds parameter init and every batch draw.
    pub seed: u64,
    pub attack: Option<AttackConfig>,
}

/// What the attacker got out of one bundle.
#[derive(Clone, Debug)]
pub struct AttackRecord {
    pub recon: ReconResult,
    /// Reconstruction matched against the worker's true batch.
    pub matching: MatchReport,
}

/// Attack outcome per worker per round; a failure is recorded, never fatal.
#[derive(Clone, Debug)]
pub enum AttackOutcome {
    Recovered(Box<AttackRecord>),
    Failed(String),
}

/// Everything observable about one round.
#[derive(Clone, Debug)]
pub struct RoundLog {
    pub round: usize,
    /// Sampled shard indices, per worker.
    pub batches: Vec<Vec<usize>>,
    /// Shared gradients v_j, per worker.
    pub bundles: Vec<GradientBundle>,
    /// Parameters after the aggregation step (w at round+1).
    pub params_after: ModelParams,
    /// Present only when the attack was enabled.
    pub attacks: Vec<Option<AttackOutcome>>,
}

/// How worker steps within a round are executed. Both schedulers must
/// produce identical logs; the parallel one exists to show that holds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Scheduler {
    #[default]
    Sequential,
    Threads,
}

fn validate(cfg: &FlConfig, shards: &[Dataset]) -> Result<()> {
    cfg.arch.validate()?;
    if cfg.workers == 0 {
        return Err(Error::invalid("FlConfig", "need at least one worker"));
    }
    if cfg.workers != shards.len() {
        return Err(Error::Contract(format!(
            "config declares {} workers but {} shards were provided",
            cfg.workers,
            shards.len()
        )));
    }
    if cfg.rounds == 0 {
        return Err(Error::invalid("FlConfig", "need at least one round"));
    }
    if cfg.batch == 0 {
        return Err(Error::invalid("FlConfig", "batch must be at least 1"));
    }
    if !(cfg.learning_rate > 0.0 && cfg.learning_rate.is_finite()) {
        return Err(Error::invalid("FlConfig", "learning rate must be positive"));
    }
    for (j, shard) in shards.iter().enumerate() {
        shard.validate()?;
        if shard.is_empty() {
            return Err(Error::Contract(format!("worker {j} has an empty shard")));
        }
        if shard.len() < cfg.batch {
            return Err(Error::Contract(format!(
                "worker {j} holds {} instances, fewer than batch {}",
                shard.len(),
                cfg.batch
            )));
        }
        if shard.classes != cfg.arch.classes() {
            return Err(Error::Contract(format!(
                "worker {j} shard has {} classes, model expects {}",
                shard.classes,
                cfg.arch.classes()
            )));
        }
        let numel: usize = shard
            .image_shape()
            .map(|s| s.iter().product())
            .unwrap_or(0);
        if numel != cfg.arch.input_numel() {
            return Err(Error::Contract(format!(
                "worker {j} images have {numel} pixels, model expects {}",
                cfg.arch.input_numel()
            )));
        }
    }
    Ok(())
}

/// Batch sampled by worker `j` in round `t`: B distinct indices, drawn from
/// a dedicated PRNG stream so the schedule is independent of everything
/// else that consumes randomness.
fn sample_batch(cfg: &FlConfig, shard_len: usize, t: usize, j: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // Stream 0 is the default; sampling streams start at 1.
    rng.set_stream(1 + (t * cfg.workers + j) as u64);
    rand::seq::index::sample(&mut rng, shard_len, cfg.batch).into_vec()
}

/// One worker's contribution: the batch gradient at the current parameters.
pub fn local_step(
    arch: &Arch,
    params: &ModelParams,
    shard: &Dataset,
    indices: &[usize],
) -> Result<GradientBundle> {
    if shard.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let batch = shard.subset(indices)?;
    batch_gradient(arch, params, &batch.images, &batch.labels)
}

/// Server step: w − η·Σ_j (m_j/m)·v_j, summed in worker-index order.
pub fn aggregate(
    params: &ModelParams,
    bundles: &[GradientBundle],
    shard_sizes: &[usize],
    learning_rate: f64,
) -> Result<ModelParams> {
    if bundles.is_empty() || bundles.len() != shard_sizes.len() {
        return Err(Error::Contract(format!(
            "{} bundles against {} shard sizes",
            bundles.len(),
            shard_sizes.len()
        )));
    }
    let m: usize = shard_sizes.iter().sum();
    if m == 0 {
        return Err(Error::Contract("total data size is zero".into()));
    }
    let mut total: Option<GradientBundle> = None;
    for (bundle, &m_j) in bundles.iter().zip(shard_sizes) {
        let weighted = bundle.scaled(m_j as f64 / m as f64);
        total = Some(match total {
            None => weighted,
            Some(t) => t.add(&weighted)?,
        });
    }
    let total = total.expect("bundles nonempty");

    let mut next = params.clone();
    for (l, layer) in next.layers.iter_mut().enumerate() {
        layer.weight = layer.weight.sub(&total.grads[2 * l].scale(learning_rate))?;
        layer.bias = layer.bias.sub(&total.grads[2 * l + 1].scale(learning_rate))?;
    }
    Ok(next)
}

/// Mean cross-entropy of the model over the union of all shards — the
/// quantity federated SGD is descending.
pub fn global_loss(arch: &Arch, params: &ModelParams, shards: &[Dataset]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for shard in shards {
        for (img, &label) in shard.images.iter().zip(&shard.labels) {
            let logits = match arch {
                Arch::Mlp(cfg) => {
                    let flat = img.reshape(&[img.numel()])?;
                    crate::models::mlp_forward(cfg, params, &flat)?
                }
                Arch::Cnn(cfg) => crate::models::cnn_forward(cfg, params, img)?,
            };
            let p = softmax_stable(&logits);
            total -= p.data()[label].max(f64::MIN_POSITIVE).ln();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyBatch);
    }
    Ok(total / count as f64)
}

fn attack_bundle(
    cfg: &FlConfig,
    attack: &AttackConfig,
    params: &ModelParams,
    bundle: &GradientBundle,
    truth: &Dataset,
    t: usize,
    j: usize,
) -> AttackOutcome {
    let mut job = ReconJob::new(bundle.clone(), params.clone(), cfg.arch.clone(), cfg.batch);
    job.prior = attack.prior;
    job.iterations = attack.iterations;
    job.learning_rate = attack.learning_rate;
    job.regularizer = attack.regularizer;
    job.lambda0 = attack.lambda0;
    job.decay_interval = attack.decay_interval;
    job.decay_factor = attack.decay_factor;
    job.seed = attack.seed.wrapping_add((t * cfg.workers + j) as u64);

    let truth_shaped: Result<Vec<Tensor>> = truth
        .images
        .iter()
        .map(|img| match &cfg.arch {
            Arch::Mlp(_) => img.reshape(&[img.numel()]),
            Arch::Cnn(_) => Ok(img.clone()),
        })
        .collect();
    let truth_shaped = match truth_shaped {
        Ok(v) => v,
        Err(e) => return AttackOutcome::Failed(e.to_string()),
    };
    job.ground_truth = Some(truth_shaped.clone());

    match reconstruct(&job) {
        Ok(recon) => match metrics::match_batch(&recon.x_hat, &truth_shaped) {
            Ok(matching) => AttackOutcome::Recovered(Box::new(AttackRecord { recon, matching })),
            Err(e) => AttackOutcome::Failed(e.to_string()),
        },
        Err(e) => AttackOutcome::Failed(e.to_string()),
    }
}

/// Runs the simulation with the default sequential scheduler.
pub fn run(cfg: &FlConfig, shards: &[Dataset]) -> Result<Vec<RoundLog>> {
    run_with(cfg, shards, Scheduler::Sequential)
}

/// Runs the simulation under an explicit scheduler. Results are identical
/// across schedulers: worker outputs are collected by index before any
/// aggregation happens.
pub fn run_with(cfg: &FlConfig, shards: &[Dataset], scheduler: Scheduler) -> Result<Vec<RoundLog>> {
    validate(cfg, shards)?;
    let mut params = ModelParams::init(&cfg.arch, cfg.seed)?;
    let shard_sizes: Vec<usize> = shards.iter().map(|s| s.len()).collect();
    let mut logs = Vec::with_capacity(cfg.rounds);

    for t in 0..cfg.rounds {
        let batches: Vec<Vec<usize>> = (0..cfg.workers)
            .map(|j| sample_batch(cfg, shards[j].len(), t, j))
            .collect();

        let bundles: Vec<GradientBundle> = match scheduler {
            Scheduler::Sequential => (0..cfg.workers)
                .map(|j| local_step(&cfg.arch, &params, &shards[j], &batches[j]))
                .collect::<Result<_>>()?,
            Scheduler::Threads => std::thread::scope(|scope| {
                let handles: Vec<_> = (0..cfg.workers)
                    .map(|j| {
                        let params = &params;
                        let arch = &cfg.arch;
                        let shard = &shards[j];
                        let batch = &batches[j];
                        scope.spawn(move || local_step(arch, params, shard, batch))
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("worker thread panicked"))
                    .collect::<Result<_>>()
            })?,
        };

        // The attacker sees exactly what the server sees: bundles and the
        // parameters they were computed at.
        let attacks: Vec<Option<AttackOutcome>> = match &cfg.attack {
            None => vec![None; cfg.workers],
            Some(attack) => (0..cfg.workers)
                .map(|j| {
                    let truth = shards[j].subset(&batches[j])?;
                    Ok(Some(attack_bundle(
                        cfg, attack, &params, &bundles[j], &truth, t, j,
                    )))
                })
                .collect::<Result<_>>()?,
        };

        params = aggregate(&params, &bundles, &shard_sizes, cfg.learning_rate)?;
        logs.push(RoundLog {
            round: t,
            batches,
            bundles,
            params_after: params.clone(),
            attacks,
        });
    }
    Ok(logs)
}

// ---------------------------------------------------------------------------
// Partitioners
// ---------------------------------------------------------------------------

/// Splits a dataset into `p` contiguous shards, sizes as even as the
/// division allows (earlier shards take the remainder).
pub fn partition_contiguous(ds: &Dataset, p: usize) -> Result<Vec<Dataset>> {
    if p == 0 {
        return Err(Error::invalid("partition", "need at least one shard"));
    }
    if p > ds.len() {
        return Err(Error::Contract(format!(
            "cannot split {} instances across {p} workers",
            ds.len()
        )));
    }
    let base = ds.len() / p;
    let extra = ds.len() % p;
    let mut shards = Vec::with_capacity(p);
    let mut start = 0;
    for j in 0..p {
        let size = base + usize::from(j < extra);
        let indices: Vec<usize> = (start..start + size).collect();
        shards.push(ds.subset(&indices)?);
        start += size;
    }
    Ok(shards)
}

/// Label-skewed split: instances are ordered by label before the contiguous
/// cut, so each worker sees only a slice of the class spectrum.
pub fn partition_label_skew(ds: &Dataset, p: usize) -> Result<Vec<Dataset>> {
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.sort_by_key(|&i| (ds.labels[i], i));
    let sorted = ds.subset(&order)?;
    partition_contiguous(&sorted, p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, SynthKind};
    use crate::models::MlpConfig;

    fn mlp(sizes: &[usize]) -> Arch {
        Arch::Mlp(MlpConfig::new(sizes.to_vec()).unwrap())
    }

    fn small_setting() -> (FlConfig, Vec<Dataset>) {
        let ds = synth_dataset(SynthKind::Blobs, 12, 1, 4, 3, 21).unwrap();
        let shards = partition_contiguous(&ds, 2).unwrap();
        let cfg = FlConfig {
            arch: mlp(&[16, 5, 3]),
            workers: 2,
            rounds: 3,
            batch: 2,
            learning_rate: 0.5,
            seed: 7,
            attack: None,
        };
        (cfg, shards)
    }

    #[test]
    fn single_worker_single_instance_bundle_is_the_plain_gradient() {
        let ds = synth_dataset(SynthKind::Gaussian, 1, 1, 3, 2, 22).unwrap();
        let arch = mlp(&[9, 4, 2]);
        let params = ModelParams::init(&arch, 1).unwrap();
        let bundle = local_step(&arch, &params, &ds, &[0]).unwrap();
        let direct = batch_gradient(&arch, &params, &ds.images, &ds.labels).unwrap();
        assert_eq!(bundle.max_abs_diff(&direct).unwrap(), 0.0);
    }

    #[test]
    fn identical_shards_and_batches_give_identical_bundles() {
        let ds = synth_dataset(SynthKind::Stripes, 4, 1, 4, 2, 23).unwrap();
        let arch = mlp(&[16, 3, 2]);
        let params = ModelParams::init(&arch, 2).unwrap();
        let a = local_step(&arch, &params, &ds, &[1, 3]).unwrap();
        let b = local_step(&arch, &params, &ds, &[1, 3]).unwrap();
        assert_eq!(a.max_abs_diff(&b).unwrap(), 0.0);
    }

    #[test]
    fn replaying_logged_batches_reproduces_the_bundle() {
        let (cfg, shards) = small_setting();
        let logs = run(&cfg, &shards).unwrap();
        // Recompute round 1, worker 1 out of band from the logged indices
        // and the logged previous parameters.
        let params_before = logs[0].params_after.clone();
        let replay = local_step(&cfg.arch, &params_before, &shards[1], &logs[1].batches[1]).unwrap();
        assert_eq!(replay.max_abs_diff(&logs[1].bundles[1]).unwrap(), 0.0);
    }

    #[test]
    fn single_worker_aggregation_is_one_sgd_step() {
        let arch = mlp(&[4, 3, 2]);
        let params = ModelParams::init(&arch, 3).unwrap();
        let mut bundle = GradientBundle::zeros_like(&params, 1);
        bundle.grads[0] = Tensor::filled(params.layers[0].weight.shape(), 2.0);
        let next = aggregate(&params, &[bundle.clone()], &[5], 0.1).unwrap();
        let expected = params.layers[0].weight.sub(&bundle.grads[0].scale(0.1)).unwrap();
        assert_eq!(next.layers[0].weight.data(), expected.data());
        // Untouched tensors unchanged.
        assert_eq!(next.layers[1].weight.data(), params.layers[1].weight.data());
    }

    #[test]
    fn unequal_shards_weight_the_average() {
        let arch = mlp(&[3, 2, 2]);
        let params = ModelParams::init(&arch, 4).unwrap();
        let mut a = GradientBundle::zeros_like(&params, 1);
        let mut b = GradientBundle::zeros_like(&params, 1);
        a.grads[1] = Tensor::new(vec![2], vec![1.0, 0.0]).unwrap();
        b.grads[1] = Tensor::new(vec![2], vec![0.0, 1.0]).unwrap();
        // m = (1, 3): update must be 0.25·a + 0.75·b, scaled by η.
        let next = aggregate(&params, &[a, b], &[1, 3], 2.0).unwrap();
        let got = params.layers[0].bias.sub(&next.layers[0].bias).unwrap();
        assert!((got.data()[0] - 2.0 * 0.25).abs() < 1e-15);
        assert!((got.data()[1] - 2.0 * 0.75).abs() < 1e-15);
    }

    #[test]
    fn aggregation_is_linear_in_each_bundle() {
        let arch = mlp(&[3, 2, 2]);
        let params = ModelParams::init(&arch, 5).unwrap();
        let mut v = GradientBundle::zeros_like(&params, 1);
        v.grads[0] = Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 0.0, 3.0, 1.0]).unwrap();
        let zero = GradientBundle::zeros_like(&params, 1);
        let delta = |bundle: &GradientBundle| -> Tensor {
            let next = aggregate(&params, &[bundle.clone(), zero.clone()], &[1, 1], 1.0).unwrap();
            params.layers[0].weight.sub(&next.layers[0].weight).unwrap()
        };
        let d1 = delta(&v);
        let d2 = delta(&v.scaled(3.0));
        for (x, y) in d1.data().iter().zip(d2.data()) {
            assert!((3.0 * x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn runs_are_deterministic_and_schedulers_agree() {
        let (cfg, shards) = small_setting();
        let a = run(&cfg, &shards).unwrap();
        let b = run(&cfg, &shards).unwrap();
        let c = run_with(&cfg, &shards, Scheduler::Threads).unwrap();
        for (x, y) in a.iter().zip(b.iter()).chain(a.iter().zip(c.iter())) {
            assert_eq!(x.batches, y.batches);
            for (bx, by) in x.bundles.iter().zip(&y.bundles) {
                assert_eq!(bx.max_abs_diff(by).unwrap(), 0.0);
            }
            for (lx, ly) in x.params_after.layers.iter().zip(&y.params_after.layers) {
                assert_eq!(lx.weight.data(), ly.weight.data());
                assert_eq!(lx.bias.data(), ly.bias.data());
            }
        }
    }

    #[test]
    fn attack_never_perturbs_training() {
        let (mut cfg, shards) = small_setting();
        cfg.batch = 1;
        let off = run(&cfg, &shards).unwrap();
        cfg.attack = Some(AttackConfig::default());
        let on = run(&cfg, &shards).unwrap();
        for (x, y) in off.iter().zip(&on) {
            assert_eq!(x.batches, y.batches);
            for (lx, ly) in x.params_after.layers.iter().zip(&y.params_after.layers) {
                assert_eq!(lx.weight.data(), ly.weight.data());
                assert_eq!(lx.bias.data(), ly.bias.data());
            }
        }
        assert!(off.iter().all(|l| l.attacks.iter().all(Option::is_none)));
        assert!(on.iter().all(|l| l.attacks.iter().all(Option::is_some)));
    }

    #[test]
    fn single_instance_batches_are_recovered_exactly_each_round() {
        let (mut cfg, shards) = small_setting();
        cfg.batch = 1;
        cfg.attack = Some(AttackConfig::default());
        let logs = run(&cfg, &shards).unwrap();
        for log in &logs {
            for outcome in log.attacks.iter().flatten() {
                match outcome {
                    AttackOutcome::Recovered(rec) => {
                        assert!(rec.matching.mean_l1 < 1e-8, "L1 {}", rec.matching.mean_l1);
                    }
                    AttackOutcome::Failed(msg) => panic!("attack failed: {msg}"),
                }
            }
        }
    }

    #[test]
    fn training_descends_on_a_separable_task() {
        let ds = synth_dataset(SynthKind::Blobs, 40, 1, 6, 2, 24).unwrap();
        let shards = partition_contiguous(&ds, 2).unwrap();
        let cfg = FlConfig {
            arch: mlp(&[36, 8, 2]),
            workers: 2,
            rounds: 20,
            batch: 4,
            learning_rate: 1.0,
            seed: 9,
            attack: None,
        };
        let params0 = ModelParams::init(&cfg.arch, cfg.seed).unwrap();
        let before = global_loss(&cfg.arch, &params0, &shards).unwrap();
        let logs = run(&cfg, &shards).unwrap();
        let after = global_loss(&cfg.arch, &logs.last().unwrap().params_after, &shards).unwrap();
        assert!(
            after < before,
            "loss did not improve: {before} -> {after}"
        );
    }

    #[test]
    fn contiguous_partition_covers_everything_once() {
        let ds = synth_dataset(SynthKind::Gaussian, 11, 1, 3, 2, 25).unwrap();
        let shards = partition_contiguous(&ds, 3).unwrap();
        assert_eq!(shards.iter().map(Dataset::len).collect::<Vec<_>>(), vec![4, 4, 3]);
        let total: usize = shards.iter().map(Dataset::len).sum();
        assert_eq!(total, ds.len());
        // First shard is the head of the original set.
        assert_eq!(shards[0].images[0].data(), ds.images[0].data());
    }

    #[test]
    fn label_skew_slices_the_class_spectrum() {
        // Interleaved labels 0,1,2,0,1,2,… with exactly ten per class, so
        // the expected slicing is unambiguous.
        let mut ds = synth_dataset(SynthKind::Blobs, 30, 1, 4, 3, 26).unwrap();
        ds.labels = (0..30).map(|i| i % 3).collect();
        let shards = partition_label_skew(&ds, 3).unwrap();
        for (j, shard) in shards.iter().enumerate() {
            assert_eq!(shard.len(), 10);
            assert!(
                shard.labels.iter().all(|&l| l == j),
                "shard {j} should hold only class {j}, got {:?}",
                shard.labels
            );
        }
        // Each shard still has ranges that never interleave by construction;
        // contrast with the contiguous split, which mixes classes.
        let plain = partition_contiguous(&ds, 3).unwrap();
        assert!(plain[0].labels.iter().collect::<std::collections::BTreeSet<_>>().len() == 3);
    }

    #[test]
    fn config_shard_mismatches_are_rejected() {
        let (mut cfg, shards) = small_setting();
        cfg.workers = 3;
        assert!(run(&cfg, &shards).is_err());
        cfg.workers = 2;
        cfg.batch = 100;
        assert!(run(&cfg, &shards).is_err());
    }
}
