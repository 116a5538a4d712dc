//! Minibatch SGD with momentum, periodic refitting of multipartite scorers,
//! per-epoch evaluation and an end-to-end finite-difference gradient check.

use std::time::Instant;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{Mode, Network, Scorer};
use crate::numdiff::max_relative_error;
use crate::projection::{fit_projection, project, FitConfig};
use crate::ranking::{fit_ranking, DEFAULT_BINS};
use crate::tensor::{ActivationStack, LabeledMatrix, Matrix};

/// When multipartite scorers are refit from the current network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Refresh {
    /// Before every epoch.
    PerEpoch,
    /// Before the first epoch and then after every `k` batches.
    EveryKBatches(usize),
    /// Only before the first epoch; frozen afterwards.
    Once,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Learning rate is multiplied by 0.1 from epoch `ceil(lr_drop_at · epochs)` on.
    pub lr_drop_at: f64,
    pub seed: u64,
    pub pool_refresh: Refresh,
    /// Maximum activation rows used to refit one scorer.
    pub score_sample_cap: usize,
    /// Training images forwarded to collect those rows.
    pub score_sample_images: usize,
    pub bins: usize,
    pub fit: FitConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 50,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_drop_at: 2.0 / 3.0,
            seed: 0,
            pool_refresh: Refresh::PerEpoch,
            score_sample_cap: 100_000,
            score_sample_images: 1000,
            bins: DEFAULT_BINS,
            fit: FitConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            ));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            ));
        }
        if !(self.lr_drop_at > 0.0) {
            return bad(format!(
                "lr_drop_at must be positive, got {}",
                self.lr_drop_at
            ));
        }
        if self.score_sample_cap == 0 || self.score_sample_images == 0 || self.bins == 0 {
            return bad("score_sample_cap, score_sample_images and bins must be positive".into());
        }
        if let Refresh::EveryKBatches(0) = self.pool_refresh {
            return bad("refresh interval must be positive".into());
        }
        self.fit.validate()
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let drop = (self.lr_drop_at * self.epochs as f64).ceil() as usize;
        if epoch >= drop {
            self.learning_rate * 0.1
        } else {
            self.learning_rate
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_err_pct: f64,
    pub test_loss: f64,
    pub test_err_pct: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochMetrics>,
    /// Final scorer of every multipartite pool layer, keyed by layer index.
    pub scorers: Vec<(usize, Scorer)>,
    pub refreshes: usize,
    pub warnings: Vec<String>,
    /// Set when training stopped on a non-finite loss; `epochs` then holds
    /// the completed epochs only.
    pub aborted: Option<Error>,
}

/// Mean loss and error percentage in test mode.
pub fn evaluate(net: &Network, data: &Dataset, batch_size: usize) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::InvalidConfig(
            "cannot evaluate on an empty dataset".into(),
        ));
    }
    let mut loss = 0.0;
    let mut wrong = 0usize;
    for start in (0..data.len()).step_by(batch_size.max(1)) {
        let idx: Vec<usize> = (start..(start + batch_size).min(data.len())).collect();
        let images = data.images.select_frames(&idx);
        let labels = &data.labels[start..start + idx.len()];
        let pass = net.forward(&images, Some(labels), Mode::Test)?;
        loss += pass.loss.unwrap_or(f64::NAN) * idx.len() as f64;
        wrong += pass
            .predictions(net.classes)
            .iter()
            .zip(labels)
            .filter(|(p, y)| p != y)
            .count();
    }
    Ok((
        loss / data.len() as f64,
        100.0 * wrong as f64 / data.len() as f64,
    ))
}

/// Result of one refit pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RefitOutcome {
    pub updated: Vec<usize>,
    pub warnings: Vec<String>,
}

/// Activation rows at the input of pool layer `layer` for `sample`, each
/// labeled with its image's label, subsampled uniformly to at most `cap`.
pub fn collect_layer_rows(
    net: &Network,
    sample: &Dataset,
    layer: usize,
    cap: usize,
    seed: u64,
) -> Result<LabeledMatrix> {
    const CHUNK: usize = 100;
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut d = 0;
    let mut chosen: Option<Vec<usize>> = None;
    let mut next = 0;
    let mut offset = 0;
    for start in (0..sample.len()).step_by(CHUNK) {
        let idx: Vec<usize> = (start..(start + CHUNK).min(sample.len())).collect();
        let acts = net.activations_before(&sample.images.select_frames(&idx), layer, Mode::Test)?;
        let per_image = acts.h() * acts.w();
        d = acts.d();
        if chosen.is_none() {
            let total = sample.len() * per_image;
            let mut pick: Vec<usize> = if total > cap {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rand::seq::index::sample(&mut rng, total, cap).into_vec()
            } else {
                (0..total).collect()
            };
            pick.sort_unstable();
            chosen = Some(pick);
        }
        let pick = chosen.as_ref().expect("set above");
        let end = offset + acts.n() * per_image;
        while next < pick.len() && pick[next] < end {
            let r = pick[next] - offset;
            rows.extend_from_slice(&acts.data()[r * d..(r + 1) * d]);
            labels.push(sample.labels[start + r / per_image]);
            next += 1;
        }
        offset = end;
    }
    let n = labels.len();
    LabeledMatrix::new(Matrix::new(n, d, rows)?, labels)
}

/// Refits the projection and ranking model of every multipartite pool layer,
/// in network order, from the activations `sample` produces. A layer whose
/// fit fails keeps its previous scorer and contributes a warning.
pub fn refit_pool_scorers(
    net: &mut Network,
    sample: &Dataset,
    cap: usize,
    bins: usize,
    fit: &FitConfig,
    seed: u64,
) -> Result<RefitOutcome> {
    let mut outcome = RefitOutcome::default();
    for layer in net.multipartite_layers() {
        match fit_scorer(net, sample, layer, cap, bins, fit, seed ^ layer as u64) {
            Ok(scorer) => {
                net.set_scorer(layer, scorer)?;
                outcome.updated.push(layer);
            }
            Err(e) => {
                let msg = format!(
                    "scorer refit for layer {layer} failed ({e}); keeping the previous one"
                );
                warn!("{msg}");
                outcome.warnings.push(msg);
            }
        }
    }
    Ok(outcome)
}

fn fit_scorer(
    net: &Network,
    sample: &Dataset,
    layer: usize,
    cap: usize,
    bins: usize,
    fit: &FitConfig,
    seed: u64,
) -> Result<Scorer> {
    let data = collect_layer_rows(net, sample, layer, cap, seed)?;
    let mut counts = vec![0usize; net.classes];
    for &l in &data.labels {
        counts[l] += 1;
    }
    if let Some(missing) = counts.iter().position(|&c| c == 0) {
        return Err(Error::DegenerateLabels(format!(
            "class {missing} absent from the scorer sample"
        )));
    }
    let projection = fit_projection(&data, fit)?;
    let projected = project(&data.matrix, &projection)?;
    let ranking = fit_ranking(&projected, &data.labels, bins)?;
    Ok(Scorer {
        projection,
        ranking,
    })
}

fn scorer_sample(train: &Dataset, count: usize, seed: u64) -> Dataset {
    if count >= train.len() {
        return train.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, train.len(), count).into_vec();
    idx.sort_unstable();
    train.select(&idx)
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut x =
        seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    x ^= x >> 31;
    x.wrapping_mul(0xBF58_476D_1CE4_E5B9)
}

/// Trains `net` in place and evaluates it after every epoch.
///
/// A non-finite loss stops training; the report then carries the error in
/// [`TrainReport::aborted`].
pub fn train(
    net: &mut Network,
    train_set: &Dataset,
    test_set: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() || test_set.is_empty() {
        return Err(Error::InvalidConfig(
            "training and test sets must be non-empty".into(),
        ));
    }
    let mut report = TrainReport {
        epochs: Vec::with_capacity(cfg.epochs),
        scorers: Vec::new(),
        refreshes: 0,
        warnings: Vec::new(),
        aborted: None,
    };
    let has_scorers = !net.multipartite_layers().is_empty();
    let mut velocity: Vec<Vec<f64>> = net.params().iter().map(|p| vec![0.0; p.len()]).collect();
    let refresh =
        |net: &mut Network, report: &mut TrainReport, epoch: usize, batch: usize| -> Result<()> {
            let sample = scorer_sample(
                train_set,
                cfg.score_sample_images,
                mix(cfg.seed, 1 + epoch as u64, batch as u64),
            );
            let out = refit_pool_scorers(
                net,
                &sample,
                cfg.score_sample_cap,
                cfg.bins,
                &cfg.fit,
                mix(cfg.seed, epoch as u64, 7),
            )?;
            report.refreshes += 1;
            report.warnings.extend(out.warnings);
            Ok(())
        };
    let mut batches_seen = 0usize;
    'epochs: for epoch in 0..cfg.epochs {
        let started = Instant::now();
        if has_scorers && (epoch == 0 || cfg.pool_refresh == Refresh::PerEpoch) {
            refresh(net, &mut report, epoch, 0)?;
        }
        let lr = cfg.learning_rate_at(epoch);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(
            cfg.seed,
            epoch as u64,
            0,
        )));
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            if let (true, Refresh::EveryKBatches(k)) = (has_scorers, cfg.pool_refresh) {
                if batches_seen > 0 && batches_seen % k == 0 {
                    refresh(net, &mut report, epoch, b)?;
                }
            }
            let images = train_set.images.select_frames(idx);
            let labels: Vec<usize> = idx.iter().map(|&i| train_set.labels[i]).collect();
            let mode = Mode::Train {
                seed: mix(cfg.seed, epoch as u64, b as u64 + 1),
            };
            let pass = match net.forward(&images, Some(&labels), mode) {
                Ok(p) => p,
                Err(Error::NonFinite(_)) => {
                    report.aborted = Some(Error::Diverged {
                        epoch,
                        batch: b,
                        loss: f64::NAN,
                    });
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            let loss = pass.loss.unwrap_or(f64::NAN);
            let grads = net.backward(&pass, &labels, cfg.weight_decay)?;
            if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
                report.aborted = Some(Error::Diverged {
                    epoch,
                    batch: b,
                    loss,
                });
                break 'epochs;
            }
            for ((p, v), g) in net.params_mut().into_iter().zip(&mut velocity).zip(&grads) {
                for ((pw, vw), gw) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                    *vw = cfg.momentum * *vw - lr * gw;
                    *pw += *vw;
                }
            }
            batches_seen += 1;
        }
        let eval = evaluate(net, train_set, cfg.batch_size.max(100))
            .and_then(|tr| evaluate(net, test_set, cfg.batch_size.max(100)).map(|te| (tr, te)));
        let ((train_loss, train_err_pct), (test_loss, test_err_pct)) = match eval {
            Ok(v) => v,
            Err(Error::NonFinite(_)) => {
                report.aborted = Some(Error::Diverged {
                    epoch,
                    batch: usize::MAX,
                    loss: f64::NAN,
                });
                break;
            }
            Err(e) => return Err(e),
        };
        let m = EpochMetrics {
            epoch: epoch + 1,
            train_loss,
            train_err_pct,
            test_loss,
            test_err_pct,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {}: train loss {:.4} err {:.2}% | test loss {:.4} err {:.2}% | {:.1}s",
            m.epoch,
            m.train_loss,
            m.train_err_pct,
            m.test_loss,
            m.test_err_pct,
            m.seconds
        );
        report.epochs.push(m);
    }
    report.scorers = net
        .multipartite_layers()
        .into_iter()
        .filter_map(|l| net.scorer(l).cloned().map(|s| (l, s)))
        .collect();
    Ok(report)
}

/// Largest relative error between the analytic parameter gradient of the
/// loss (test mode, plus weight decay) and central differences.
pub fn network_gradient_error(
    net: &Network,
    images: &ActivationStack,
    labels: &[usize],
    weight_decay: f64,
    step: f64,
) -> Result<f64> {
    let pass = net.forward(images, Some(labels), Mode::Test)?;
    let analytic = net.backward(&pass, labels, weight_decay)?;
    let mut probe = net.clone();
    let mut worst = 0.0f64;
    for (pi, grad) in analytic.iter().enumerate() {
        let mut numeric = Vec::with_capacity(grad.len());
        for j in 0..grad.len() {
            let orig = probe.params()[pi][j];
            let mut at = |v: f64| -> Result<f64> {
                probe.params_mut()[pi][j] = v;
                let loss = probe
                    .forward(images, Some(labels), Mode::Test)?
                    .loss
                    .unwrap_or(f64::NAN);
                Ok(loss + probe.weight_decay_loss(weight_decay))
            };
            let plus = at(orig + step)?;
            let minus = at(orig - step)?;
            at(orig)?;
            numeric.push((plus - minus) / (2.0 * step));
        }
        worst = worst.max(max_relative_error(grad, &numeric, 1e-6));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_blobs;
    use crate::nn::{Init, LayerSpec};
    use crate::pooling::{PoolSpec, Strategy};

    fn blob_net(strategy: Strategy, seed: u64) -> Network {
        let specs = [
            LayerSpec::Conv {
                kernel: (3, 3),
                out_channels: 4,
            },
            LayerSpec::Relu,
            LayerSpec::Pool(PoolSpec::square(2, strategy)),
            LayerSpec::Fc { out_units: 2 },
            LayerSpec::SoftmaxLoss,
        ];
        Network::new((8, 8, 1), 2, &specs, Init::Gaussian(0.1), seed).unwrap()
    }

    fn quick_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 1,
            batch_size: 8,
            learning_rate: 0.05,
            score_sample_images: 64,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn one_epoch_beats_random_baseline() {
        let data = synthetic_blobs(64, 8, 8, 2, 3).unwrap();
        let mut net = blob_net(Strategy::Max, 1);
        let (_, before) = evaluate(&net, &data, 64).unwrap();
        let report = train(&mut net, &data, &data, &quick_cfg()).unwrap();
        assert_eq!(report.epochs.len(), 1);
        assert!(
            report.epochs[0].train_err_pct < before,
            "{} vs {before}",
            report.epochs[0].train_err_pct
        );
    }

    #[test]
    fn same_seed_same_metrics() {
        let data = synthetic_blobs(48, 8, 8, 2, 4).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            ..quick_cfg()
        };
        let run = || {
            let mut net = blob_net(Strategy::Multipartite, 2);
            let r = train(&mut net, &data, &data, &cfg).unwrap();
            r.epochs
                .iter()
                .map(|m| (m.train_loss, m.test_loss, m.test_err_pct))
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn refit_is_deterministic_and_shaped() {
        let data = synthetic_blobs(40, 8, 8, 2, 5).unwrap();
        let mut a = blob_net(Strategy::Multipartite, 3);
        let mut b = a.clone();
        let cfg = FitConfig::default();
        refit_pool_scorers(&mut a, &data, 500, 64, &cfg, 9).unwrap();
        refit_pool_scorers(&mut b, &data, 500, 64, &cfg, 9).unwrap();
        let s = a.scorer(2).unwrap();
        assert_eq!(Some(s), b.scorer(2));
        assert_eq!(s.projection.a.shape(), (4, 2));
        assert_eq!(s.ranking.columns.len(), 2);
    }

    #[test]
    fn missing_class_keeps_previous_scorer() {
        let data = synthetic_blobs(40, 8, 8, 2, 5).unwrap();
        let mut net = blob_net(Strategy::Multipartite, 3);
        refit_pool_scorers(&mut net, &data, 500, 64, &FitConfig::default(), 1).unwrap();
        let before = net.scorer(2).cloned();
        let only_zero: Vec<usize> = (0..data.len()).filter(|&i| data.labels[i] == 0).collect();
        let out = refit_pool_scorers(
            &mut net,
            &data.select(&only_zero),
            500,
            64,
            &FitConfig::default(),
            1,
        )
        .unwrap();
        assert!(out.updated.is_empty());
        assert_eq!(out.warnings.len(), 1);
        assert_eq!(net.scorer(2).cloned(), before);
    }

    #[test]
    fn row_cap_is_respected() {
        let data = synthetic_blobs(20, 8, 8, 2, 6).unwrap();
        let net = blob_net(Strategy::Multipartite, 3);
        let rows = collect_layer_rows(&net, &data, 2, 333, 0).unwrap();
        assert_eq!(rows.matrix.shape(), (333, 4));
        let all = collect_layer_rows(&net, &data, 2, 1_000_000, 0).unwrap();
        assert_eq!(all.matrix.rows(), 20 * 36);
        // row r of the uncapped matrix belongs to image r / 36
        assert!(all
            .labels
            .iter()
            .enumerate()
            .all(|(r, &l)| l == data.labels[r / 36]));
    }

    #[test]
    fn lr_schedule() {
        let cfg = TrainConfig {
            epochs: 6,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.learning_rate_at(3), 0.01);
        assert!((cfg.learning_rate_at(4) - 0.001).abs() < 1e-18);
    }

    #[test]
    fn divergence_is_reported() {
        let data = synthetic_blobs(32, 8, 8, 2, 7).unwrap();
        let mut net = blob_net(Strategy::Max, 4);
        let cfg = TrainConfig {
            learning_rate: 1e200,
            epochs: 2,
            ..quick_cfg()
        };
        let report = train(&mut net, &data, &data, &cfg).unwrap();
        assert!(matches!(report.aborted, Some(Error::Diverged { .. })));
        assert!(report.epochs.len() < 2);
    }

    fn tiny_net(strategy: Strategy) -> Network {
        let specs = [
            LayerSpec::Conv {
                kernel: (3, 3),
                out_channels: 2,
            },
            LayerSpec::Pool(PoolSpec::square(2, strategy)),
            LayerSpec::Fc { out_units: 10 },
            LayerSpec::SoftmaxLoss,
        ];
        Network::new((8, 8, 1), 10, &specs, Init::Gaussian(0.5), 11).unwrap()
    }

    #[test]
    fn tiny_net_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        use rand::Rng;
        let images = ActivationStack::from_fn(10, 8, 8, 1, |_, _, _, _| rng.gen_range(-1.0..1.0));
        let labels: Vec<usize> = (0..10).collect();
        for strategy in Strategy::ALL {
            let mut net = tiny_net(strategy);
            if strategy == Strategy::Multipartite {
                let ds = Dataset {
                    images: images.clone(),
                    labels: labels.clone(),
                    class_count: 10,
                    name: "t".into(),
                };
                let out = refit_pool_scorers(&mut net, &ds, 10_000, 64, &FitConfig::default(), 0)
                    .unwrap();
                assert_eq!(out.updated, vec![1]);
            }
            let err = network_gradient_error(&net, &images, &labels, 0.01, 1e-5).unwrap();
            assert!(err < 1e-3, "{strategy}: {err}");
        }
    }
}
