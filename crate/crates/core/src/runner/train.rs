//! Training loop: seeded shuffling, view generation, the optional
//! attribution pass and mixing step, the configured objective and Adam with a
//! per-epoch cosine schedule.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, RngState};
use super::config::{AttributionRefresh, Augmentation, Objective, RunConfig};
use super::optim::{cosine_lr, Adam};
use crate::attribution::{attribution_maps, AttributionMap};
use crate::augment::{cutmix, cutout, gradmix, mixup, standard_views, Mixed, ViewBatch};
use crate::autodiff::{Graph, NodeId};
use crate::data::ImageDataset;
use crate::encoder::{Encoder, Mode};
use crate::error::{Error, Result};
use crate::losses::{ce_and_ce_ssl_loss, contra_loss, mixing_objective, ContrastiveBatch, LossTerms};
use crate::tensor::Tensor;

/// Loss components of one optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct BatchLog {
    pub epoch: usize,
    pub batch: usize,
    pub lr: f64,
    pub total: f64,
    pub supcon: Option<f64>,
    pub simclr: Option<f64>,
    pub mix: Option<f64>,
    pub ce: Option<f64>,
    /// Mask side ratio drawn for this batch (gradmix only).
    pub gamma: Option<f64>,
    /// Weight of the mixed-batch term.
    pub mix_weight: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Mean total loss over the epoch's batches.
    pub mean_loss: f64,
    pub batches: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub batches: Vec<BatchLog>,
}

impl TrainLog {
    pub fn epoch_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.mean_loss).collect()
    }
}

/// Result of a completed run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
}

/// Mutable state of one training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    config: RunConfig,
    encoder: Encoder<f32>,
    rng: ChaCha8Rng,
    epoch: usize,
    step: u64,
    adam: Adam,
}

fn rows(n: usize) -> Vec<usize> {
    (0..n).collect()
}

fn value(g: &Graph<f32>, id: Option<NodeId>) -> Option<f64> {
    id.map(|n| f64::from(g.value(n).item()))
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let encoder = Encoder::new(config.encoder_config(), config.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Trainer { config, encoder, rng, epoch: 0, step: 0, adam: Adam::default() })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        ckpt.config.validate()?;
        let rng = ckpt.rng.restore()?;
        Ok(Trainer {
            config: ckpt.config,
            encoder: ckpt.encoder,
            rng,
            epoch: ckpt.epoch,
            step: ckpt.step,
            adam: Adam::default(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            epoch: self.epoch,
            step: self.step,
            rng: RngState::capture(&self.rng),
            encoder: self.encoder.clone(),
        }
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn encoder(&self) -> &Encoder<f32> {
        &self.encoder
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Learning rate of the current epoch.
    pub fn lr(&self) -> f64 {
        let total = self.config.epochs.saturating_sub(1).max(1);
        cosine_lr(self.epoch.min(total), total, self.config.lr_max, self.config.lr_min)
    }

    /// Train until `until` epochs are complete (capped at the configured
    /// count). Checkpoints go to `dir` at the configured interval.
    pub fn run(&mut self, data: &ImageDataset, until: usize, dir: Option<&Path>, log: &mut TrainLog) -> Result<()> {
        let until = until.min(self.config.epochs);
        while self.epoch < until {
            self.run_epoch(data, log)?;
            let every = self.config.checkpoint_every;
            if let Some(dir) = dir {
                if every > 0 && self.epoch.is_multiple_of(every) {
                    self.checkpoint().save(&dir.join(format!("epoch-{:04}.ckpt", self.epoch)))?;
                }
            }
        }
        Ok(())
    }

    /// One pass over `data` in a seeded order. Batches with fewer than two
    /// samples are skipped.
    pub fn run_epoch(&mut self, data: &ImageDataset, log: &mut TrainLog) -> Result<()> {
        let enc = self.encoder.config();
        if data.images.shape()[1..] != [enc.input_channels, enc.input_resolution, enc.input_resolution] {
            return Err(Error::shape(
                "train",
                format!("dataset images {:?} do not fit the encoder", data.images.shape()),
            ));
        }
        let lr = self.lr();
        let epoch_maps = match (self.config.augmentation, self.config.attribution_refresh) {
            (Augmentation::Gradmix, AttributionRefresh::PerEpoch) => Some(self.dataset_maps(data)?),
            _ => None,
        };
        let mut order = rows(data.len());
        order.shuffle(&mut self.rng);
        let mut totals = Vec::new();
        for (b, idx) in order.chunks(self.config.batch_size).filter(|c| c.len() >= 2).enumerate() {
            let images = data.images.select_rows(idx);
            let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            let views = standard_views(&images, &mut self.rng, &self.config.views)?;
            let maps = epoch_maps.as_ref().map(|m| m.select_rows(idx));
            let entry = self.step_batch(&views, &labels, maps.as_ref(), lr, b)?;
            totals.push(entry.total);
            log.batches.push(entry);
        }
        let mean_loss = totals.iter().sum::<f64>() / totals.len().max(1) as f64;
        log.epochs.push(EpochLog { epoch: self.epoch, lr, mean_loss, batches: totals.len() });
        self.epoch += 1;
        Ok(())
    }

    /// Attribution maps at input resolution for the clean views, rows
    /// `0..N` of `[view_a; view_b]`. Runs on a throwaway graph with frozen
    /// batch-norm statistics; its gradients never reach the parameters.
    pub fn attribution_pass(&self, stacked: &Tensor, labels2: &[usize]) -> Result<AttributionMap> {
        let cfg = &self.config;
        let mut g = Graph::new();
        let out = self.encoder.forward_frozen(&mut g, stacked, Mode::TrainFrozenStats)?;
        let batch = ContrastiveBatch::new(out.embeddings, Some(labels2), cfg.temperature);
        let terms = contra_loss(&mut g, &batch, &cfg.weights(), cfg.denominator)?;
        g.backward(terms.total.expect("contra_loss sets total"))?;
        let taps = g.tap_gradients(&cfg.encoder.tap_names)?;
        let maps = attribution_maps(&taps, &cfg.encoder.tap_names, cfg.cam_method, cfg.encoder.input_resolution)?;
        let n = stacked.shape()[0] / 2;
        AttributionMap::new(maps.values.select_rows(&rows(n)), maps.source_layers)
    }

    /// The contrastive (or CE) objective on a fixed seeded view batch of up
    /// to `batch-size` samples, batch statistics frozen. Parameters are not
    /// touched; used to track progress free of augmentation noise.
    pub fn fixed_batch_loss(&self, data: &ImageDataset, seed: u64) -> Result<f64> {
        let cfg = &self.config;
        let idx = rows(data.len().min(cfg.batch_size));
        let images = data.images.select_rows(&idx);
        let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
        let labels2: Vec<usize> = labels.iter().chain(&labels).copied().collect();
        let views = standard_views(&images, &mut ChaCha8Rng::seed_from_u64(seed), &cfg.views)?;
        let mut g = Graph::new();
        let out = self.encoder.forward_frozen(&mut g, &views.stacked(), Mode::TrainFrozenStats)?;
        let terms = match out.logits {
            Some(logits) if cfg.objective.uses_classifier() => {
                let ssl = ContrastiveBatch::new(out.embeddings, None, cfg.temperature);
                let ssl = (cfg.objective == Objective::CeSsl).then_some(&ssl);
                ce_and_ce_ssl_loss(&mut g, logits, &labels2, ssl, &cfg.weights())?
            }
            _ => {
                let b = ContrastiveBatch::new(out.embeddings, Some(&labels2), cfg.temperature);
                contra_loss(&mut g, &b, &cfg.weights(), cfg.denominator)?
            }
        };
        Ok(f64::from(g.value(terms.total.expect("total")).item()))
    }

    /// Per-epoch maps for every training image, computed on the originals.
    fn dataset_maps(&self, data: &ImageDataset) -> Result<Tensor> {
        let mut parts = Vec::new();
        for idx in rows(data.len()).chunks(self.config.batch_size) {
            let x = data.images.select_rows(idx);
            let labels: Vec<usize> = idx.iter().chain(idx).map(|&i| data.labels[i]).collect();
            let stacked = Tensor::concat_rows(&[&x, &x])?;
            parts.push(self.attribution_pass(&stacked, &labels)?.values);
        }
        Tensor::concat_rows(&parts.iter().collect::<Vec<_>>())
    }

    fn draw_gamma(&mut self) -> f64 {
        let (lo, hi) = self.config.gamma_range;
        if lo == hi {
            lo
        } else {
            self.rng.random_range(lo..=hi)
        }
    }

    /// The mixed images for one batch and the drawn γ (gradmix only).
    pub fn mix_batch(
        &mut self,
        views: &ViewBatch,
        labels: &[usize],
        epoch_maps: Option<&Tensor>,
    ) -> Result<(Mixed, Option<f64>)> {
        let cfg = self.config.clone();
        Ok(match cfg.augmentation {
            Augmentation::Gradmix => {
                let gamma = self.draw_gamma();
                let mixed = match epoch_maps {
                    Some(m) => {
                        let maps = AttributionMap::new(m.clone(), cfg.encoder.tap_names.clone())?;
                        gradmix(&views.originals, &maps, gamma, &mut self.rng)?
                    }
                    None => {
                        let labels2: Vec<usize> = labels.iter().chain(labels).copied().collect();
                        let maps = self.attribution_pass(&views.stacked(), &labels2)?;
                        gradmix(&views.view_a, &maps, gamma, &mut self.rng)?
                    }
                };
                (mixed, Some(gamma))
            }
            Augmentation::Mixup => (mixup(&views.view_a, cfg.mix_alpha, &mut self.rng)?, None),
            Augmentation::Cutmix => (cutmix(&views.view_a, cfg.mix_alpha, &mut self.rng)?, None),
            Augmentation::Cutout => (cutout(&views.view_a, cfg.cutout_size, &mut self.rng)?, None),
            Augmentation::None => return Err(Error::invalid("no mixing augmentation configured")),
        })
    }

    fn step_batch(
        &mut self,
        views: &ViewBatch,
        labels: &[usize],
        epoch_maps: Option<&Tensor>,
        lr: f64,
        batch: usize,
    ) -> Result<BatchLog> {
        let cfg = self.config.clone();
        let n = labels.len();
        let labels2: Vec<usize> = labels.iter().chain(labels).copied().collect();
        let weights = cfg.weights();
        let mut g = Graph::new();
        let (mut gamma, mut mix_weight) = (None, None);
        let terms: LossTerms = match cfg.objective {
            Objective::Ce => {
                let out = self.encoder.forward(&mut g, &views.view_a, Mode::Train)?;
                let logits = out.logits.expect("ce objective builds a classifier head");
                ce_and_ce_ssl_loss(&mut g, logits, labels, None, &weights)?
            }
            Objective::CeSsl => {
                let out = self.encoder.forward(&mut g, &views.stacked(), Mode::Train)?;
                let logits = out.logits.expect("ce objective builds a classifier head");
                let ssl = ContrastiveBatch::new(out.embeddings, None, cfg.temperature);
                ce_and_ce_ssl_loss(&mut g, logits, &labels2, Some(&ssl), &weights)?
            }
            Objective::SupCon | Objective::SupConSsl | Objective::SslOnly => {
                let out = self.encoder.forward(&mut g, &views.stacked(), Mode::Train)?;
                let b = ContrastiveBatch::new(out.embeddings, Some(&labels2), cfg.temperature);
                contra_loss(&mut g, &b, &weights, cfg.denominator)?
            }
            Objective::SupConSslMix => {
                let (mixed, gm) = self.mix_batch(views, labels, epoch_maps)?;
                gamma = gm;
                mix_weight = Some(mixed.loss_weight);
                let input = Tensor::concat_rows(&[&views.view_a, &views.view_b, &mixed.images])?;
                let out = self.encoder.forward(&mut g, &input, Mode::Train)?;
                let clean = g.gather_rows(out.embeddings, rows(2 * n))?;
                let m = g.gather_rows(out.embeddings, (2 * n..3 * n).collect())?;
                let partner = g.gather_rows(out.embeddings, (n..2 * n).collect())?;
                let mixed_pairs = g.concat_rows(&[m, partner])?;
                let clean = ContrastiveBatch::new(clean, Some(&labels2), cfg.temperature);
                let mixed_b = ContrastiveBatch::new(mixed_pairs, None, cfg.temperature);
                mixing_objective(&mut g, &clean, &mixed_b, mixed.loss_weight, &weights, cfg.denominator)?
            }
        };
        let total_id = terms.total.expect("objectives set total");
        let entry = BatchLog {
            epoch: self.epoch,
            batch,
            lr,
            total: f64::from(g.value(total_id).item()),
            supcon: value(&g, terms.supcon),
            simclr: value(&g, terms.simclr),
            mix: value(&g, terms.mix),
            ce: value(&g, terms.ce),
            gamma,
            mix_weight,
        };
        if !entry.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch: self.epoch,
                batch,
                components: format!(
                    "total={} supcon={:?} simclr={:?} mix={:?} ce={:?} gamma={:?}",
                    entry.total, entry.supcon, entry.simclr, entry.mix, entry.ce, entry.gamma
                ),
            });
        }
        g.backward(total_id)?;
        let params = self.encoder.params_mut();
        params.zero_grads();
        params.accumulate(&g)?;
        self.step += 1;
        self.adam.step(params, lr, self.step)?;
        Ok(entry)
    }
}

/// Train from scratch for the configured number of epochs.
pub fn train(config: &RunConfig, data: &ImageDataset, checkpoint_dir: Option<&Path>) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config.clone())?;
    let mut log = TrainLog::default();
    trainer.run(data, config.epochs, checkpoint_dir, &mut log)?;
    Ok(TrainOutcome { checkpoint: trainer.checkpoint(), log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runner::config::load_split;

    /// res 16, two stages: small enough for debug-speed unit tests.
    pub(crate) fn small(objective: Objective, augmentation: Augmentation) -> RunConfig {
        let mut c = RunConfig { objective, augmentation, epochs: 3, batch_size: 16, ..RunConfig::default() };
        c.encoder.input_resolution = 16;
        c.encoder.stage_widths = vec![8, 16];
        c.encoder.embedding_dim = 16;
        c.encoder.tap_names = vec!["conv4_2".into(), "conv5_2".into()];
        c.cutout_size = 4;
        c.data = crate::runner::config::DataSource::Synthetic {
            classes: 3,
            train_per_class: 12,
            test_per_class: 6,
            seed: 1,
        };
        c
    }

    fn params_bytes(e: &Encoder<f32>) -> Vec<u32> {
        e.params().iter().flat_map(|p| p.value.data().iter().map(|v| v.to_bits())).collect()
    }

    #[test]
    fn every_objective_and_augmentation_runs() {
        let combos = [
            (Objective::Ce, Augmentation::None),
            (Objective::CeSsl, Augmentation::None),
            (Objective::SupCon, Augmentation::None),
            (Objective::SupConSsl, Augmentation::None),
            (Objective::SslOnly, Augmentation::None),
            (Objective::SupConSslMix, Augmentation::Gradmix),
            (Objective::SupConSslMix, Augmentation::Mixup),
            (Objective::SupConSslMix, Augmentation::Cutmix),
            (Objective::SupConSslMix, Augmentation::Cutout),
        ];
        for (o, a) in combos {
            let mut cfg = small(o, a);
            cfg.epochs = 1;
            let split = load_split(&cfg, None).unwrap();
            let out = train(&cfg, &split.train_known, None).unwrap();
            assert_eq!(out.log.epochs.len(), 1);
            assert!(out.log.batches.iter().all(|b| b.total.is_finite()), "{o} {a:?}");
            assert_ne!(
                params_bytes(&out.checkpoint.encoder),
                params_bytes(&Encoder::new(cfg.encoder_config(), 0).unwrap())
            );
        }
    }

    #[test]
    fn gradmix_logs_gamma_in_range() {
        let mut cfg = small(Objective::SupConSslMix, Augmentation::Gradmix);
        cfg.epochs = 2;
        let split = load_split(&cfg, None).unwrap();
        let out = train(&cfg, &split.train_known, None).unwrap();
        assert!(!out.log.batches.is_empty());
        for b in &out.log.batches {
            let g = b.gamma.unwrap();
            assert!((0.1..=0.5).contains(&g));
            assert_eq!(b.mix_weight, Some(g * g));
        }
        cfg.attribution_refresh = AttributionRefresh::PerEpoch;
        let out = train(&cfg, &split.train_known, None).unwrap();
        assert!(out.log.batches.iter().all(|b| b.gamma.is_some() && b.total.is_finite()));
    }

    #[test]
    fn resume_is_bit_exact_and_runs_are_deterministic() {
        let cfg = small(Objective::SupConSslMix, Augmentation::Gradmix);
        let split = load_split(&cfg, None).unwrap();
        let full = train(&cfg, &split.train_known, None).unwrap();
        let again = train(&cfg, &split.train_known, None).unwrap();
        assert_eq!(full.checkpoint.to_bytes().unwrap(), again.checkpoint.to_bytes().unwrap());
        assert_eq!(full.log, again.log);

        let mut first = Trainer::new(cfg.clone()).unwrap();
        let mut log = TrainLog::default();
        first.run(&split.train_known, 1, None, &mut log).unwrap();
        let bytes = first.checkpoint().to_bytes().unwrap();
        let mut resumed = Trainer::from_checkpoint(Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        resumed.run(&split.train_known, cfg.epochs, None, &mut log).unwrap();
        assert_eq!(resumed.checkpoint().to_bytes().unwrap(), full.checkpoint.to_bytes().unwrap());
        assert_eq!(log, full.log);
    }

    #[test]
    fn attribution_pass_leaves_state_untouched() {
        let cfg = small(Objective::SupConSslMix, Augmentation::Gradmix);
        let split = load_split(&cfg, None).unwrap();
        let mut t = Trainer::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = split.train_known.images.select_rows(&[0, 1, 2, 3]);
        let views = standard_views(&x, &mut rng, &t.config.views).unwrap();
        let before = t.encoder.clone();
        let maps = t.attribution_pass(&views.stacked(), &[0, 0, 1, 1, 0, 0, 1, 1]).unwrap();
        assert_eq!(maps.values.shape(), &[4, 16, 16]);
        let _ = t.mix_batch(&views, &[0, 0, 1, 1], None).unwrap();
        assert_eq!(t.encoder.params(), before.params());
        assert_eq!(t.encoder.batch_norms(), before.batch_norms());
    }

    #[test]
    fn ssl_only_loss_decreases() {
        let mut cfg = small(Objective::SslOnly, Augmentation::None);
        cfg.epochs = 5;
        let split = load_split(&cfg, None).unwrap();
        let mut t = Trainer::new(cfg).unwrap();
        let mut log = TrainLog::default();
        let mut losses = vec![t.fixed_batch_loss(&split.train_known, 99).unwrap()];
        for e in 1..=5 {
            t.run(&split.train_known, e, None, &mut log).unwrap();
            losses.push(t.fixed_batch_loss(&split.train_known, 99).unwrap());
        }
        let drops = losses.windows(2).filter(|w| w[1] < w[0]).count();
        assert!(drops >= 4, "{losses:?}");
    }

    #[test]
    fn checkpoints_are_written_at_the_interval() {
        let mut cfg = small(Objective::SupCon, Augmentation::None);
        cfg.epochs = 2;
        cfg.checkpoint_every = 1;
        let split = load_split(&cfg, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out = train(&cfg, &split.train_known, Some(dir.path())).unwrap();
        let last = Checkpoint::load(&dir.path().join("epoch-0002.ckpt")).unwrap();
        assert_eq!(last.to_bytes().unwrap(), out.checkpoint.to_bytes().unwrap());
        assert!(dir.path().join("epoch-0001.ckpt").exists());
    }
}
