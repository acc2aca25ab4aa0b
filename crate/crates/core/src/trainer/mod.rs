//! Training loop, checkpoints, evaluation and channel simulation.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eval;

pub use checkpoint::{
    checkpoint_bytes, checkpoint_from_bytes, load_checkpoint, load_checkpoint_for, save_checkpoint, Checkpoint,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::{TrainConfig, KEYS};
pub use data::{load_corpus, Batch, Corpus};
pub use eval::{
    channel_outcomes, code_image, evaluate, quality, simulate, CodedImage, EvalRow, Outcome, SimRow, EVAL_HEADER,
    SIM_HEADER,
};

use crate::diff::{AdamState, Graph, Var};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossReport, LossTerms, LossWeights, Reconstructions, SsimConfig};
use crate::networks::{CodecModel, QuantMode};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Builds the full objective for a `[B,H,W,3]` batch on `g`.
pub fn objective<T: Scalar>(
    model: &CodecModel<T>,
    g: &mut Graph<T>,
    x: Var,
    sigma: f64,
    mode: QuantMode,
    w: &LossWeights,
    ssim: &SsimConfig,
) -> Result<LossTerms> {
    let f = model.forward(g, x, T::of(sigma), mode)?;
    let rec = Reconstructions { side_a: f.side_a, side_b: f.side_b, central: f.central };
    total_loss(g, f.rates, x, rec, &model.store, w, ssim)
}

pub struct Trainer<T> {
    pub model: CodecModel<T>,
    pub adam: AdamState<T>,
    pub cfg: TrainConfig,
    ssim: SsimConfig,
}

impl<T: Scalar> Trainer<T> {
    /// Fresh model and optimizer, both seeded from the config.
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = CodecModel::new(cfg.net.clone(), cfg.seed)?;
        let adam = AdamState::new(&model.store, cfg.learning_rate);
        let ssim = cfg.ssim()?;
        Ok(Trainer { model, adam, cfg, ssim })
    }

    /// Continues from a checkpoint; a checkpoint without optimizer state
    /// starts a fresh optimizer on its weights.
    pub fn resume(cfg: TrainConfig, ckpt: Checkpoint<T>) -> Result<Self> {
        cfg.validate()?;
        if ckpt.model.cfg != cfg.net {
            return Err(Error::Config(format!(
                "checkpoint network {:?} does not match the configured {:?}",
                ckpt.model.cfg, cfg.net
            )));
        }
        let adam = ckpt.adam.unwrap_or_else(|| AdamState::new(&ckpt.model.store, cfg.learning_rate));
        let ssim = cfg.ssim()?;
        Ok(Trainer { model: ckpt.model, adam, cfg, ssim })
    }

    /// Number of completed optimizer steps.
    pub fn step(&self) -> u64 {
        self.adam.step
    }

    pub fn sigma(&self) -> f64 {
        self.cfg.sigma.at(self.adam.step)
    }

    /// Loss terms of a batch at the current weights, without updating them.
    pub fn measure(&self, batch: &Tensor<T>) -> Result<LossReport> {
        let mut g = Graph::new();
        let x = g.input(batch.clone());
        let terms =
            objective(&self.model, &mut g, x, self.sigma(), QuantMode::StraightThrough, &self.cfg.loss, &self.ssim)?;
        Ok(terms.report(&g))
    }

    /// One optimizer step. A non-finite loss term aborts before any weight
    /// changes.
    pub fn train_step(&mut self, batch: &Tensor<T>) -> Result<LossReport> {
        let mut g = Graph::new();
        let x = g.input(batch.clone());
        let terms =
            objective(&self.model, &mut g, x, self.sigma(), QuantMode::StraightThrough, &self.cfg.loss, &self.ssim)?;
        let report = terms.report(&g);
        if let Some(term) = report.non_finite_term() {
            return Err(Error::NonFinite(format!("loss term `{term}` at step {}", self.adam.step)));
        }
        g.backward(terms.total).store_into(&mut self.model.store);
        self.adam.step(&mut self.model.store)?;
        Ok(report)
    }

    /// Trains until `cfg.steps` steps are done. Batch `s` depends only on the
    /// seed and `s`, so an interrupted run resumed from a checkpoint follows
    /// the same trajectory.
    pub fn run<F>(&mut self, corpus: &Corpus, mut on_step: F) -> Result<Vec<LossReport>>
    where
        F: FnMut(u64, &LossReport),
    {
        let mut reports = Vec::new();
        while self.adam.step < self.cfg.steps {
            let s = self.adam.step;
            let batch = corpus.batch_at::<T>(s, self.cfg.batch, self.cfg.seed)?;
            let r = self.train_step(&batch.images)?;
            let every = self.cfg.log_every;
            if every > 0 && (s.is_multiple_of(every) || s + 1 == self.cfg.steps) {
                log::info!(
                    "step {s}: total {:.5} rate {:.4}/{:.4} d1 {:.5} d2 {:.5} dd {:.5}",
                    r.total,
                    r.rate_a,
                    r.rate_b,
                    r.d1,
                    r.d2,
                    r.dd
                );
            }
            on_step(s, &r);
            reports.push(r);
        }
        Ok(reports)
    }

    pub fn checkpoint_bytes(&self) -> Result<Vec<u8>> {
        checkpoint_bytes(&self.model, Some(&self.adam))
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        save_checkpoint(path, &self.model, Some(&self.adam))
    }
}
