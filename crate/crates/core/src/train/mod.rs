//! Post-filter training: item preparation, the optimisation loop,
//! checkpoints and the step log.

pub mod loss;
pub mod schedule;

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{AecError, Result};
use crate::kv::KvMap;
use crate::net::{init_params, net_forward, ComplexMap, Graph, NetConfig, NetInput, SubbandFrontend};
use crate::pipeline::{linear_stage, PipelineConfig};
use crate::simulate::{LabeledMixture, DEFAULT_VAD_THRESHOLD_DB};
use crate::tensor::{
    load_checkpoint, restore_store, save_checkpoint, store_entries, Adam, BatchNormMode,
    CheckpointEntry, ParamStore, Tape, Tensor,
};

pub use loss::{
    ideal_mask, loss_asym, loss_echo_weighted, loss_mask, loss_total, loss_vad, LossConfig,
    LossParts, LossVars,
};
pub use schedule::{noam_lr, LrSchedule};

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const LOG_FILE: &str = "train_log.jsonl";
/// Network config written next to the checkpoint.
pub const NET_CONFIG_FILE: &str = "net.txt";

/// One training example with everything the losses need.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub id: String,
    pub input: NetInput<f32>,
    /// Near-end speech spectrum.
    pub target: ComplexMap<f32>,
    pub ideal_mask: Tensor<f32>,
    pub echo_active: Vec<u8>,
    pub speech_active: Vec<u8>,
}

/// Runs the linear stage on a mixture and converts everything to network
/// spectra and frame labels.
pub fn prepare_item(
    id: &str,
    m: &LabeledMixture,
    pipeline: &PipelineConfig,
    frontend: &SubbandFrontend,
) -> Result<TrainItem> {
    let lin = linear_stage(pipeline, &m.d, &m.x)?;
    let sd = frontend.analyze(&m.d)?;
    let se = frontend.analyze(&lin.e)?;
    let sx = frontend.analyze(&lin.x_aligned)?;
    let ss = frontend.analyze(&m.s)?;
    let input = NetInput::from_spectra(&sd, &se, &sx)?;
    let target = ComplexMap::from_spectra(&ss);
    let ideal = ideal_mask(&input.d, &target)?;
    Ok(TrainItem {
        id: id.to_string(),
        input,
        target,
        ideal_mask: ideal,
        echo_active: frontend.frame_labels(&m.echo, DEFAULT_VAD_THRESHOLD_DB),
        speech_active: frontend.frame_labels(&m.s, DEFAULT_VAD_THRESHOLD_DB),
    })
}

/// Prepares items in parallel, preserving order.
pub fn prepare_items(
    mixtures: &[(String, LabeledMixture)],
    pipeline: &PipelineConfig,
) -> Result<Vec<TrainItem>> {
    let fe = SubbandFrontend::default();
    mixtures
        .par_iter()
        .map(|(id, m)| prepare_item(id, m, pipeline, &fe))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: u64,
    pub seed: u64,
    pub schedule: LrSchedule,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            seed: 0,
            schedule: LrSchedule::default(),
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let d = Self::default();
        Ok(Self {
            epochs: kv.get_or("train.epochs", d.epochs)?,
            seed: kv.get_or("train.seed", d.seed)?,
            schedule: LrSchedule::from_kv(kv)?,
            loss: LossConfig::from_kv(kv)?,
        })
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("train.epochs", self.epochs);
        kv.set("train.seed", self.seed);
        kv.merge(&self.schedule.to_kv());
        kv.merge(&self.loss.to_kv());
        kv
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub total: f64,
    pub echo_weighted: f64,
    pub asym: f64,
    pub mask: f64,
    pub vad: f64,
}

/// Forward pass and losses for one item on a fresh tape.
pub fn item_losses(
    tape: &mut Tape<f32>,
    store: &mut ParamStore<f32>,
    net: &NetConfig,
    loss: &LossConfig,
    item: &TrainItem,
    mode: BatchNormMode,
) -> Result<(LossVars, crate::tensor::Var)> {
    let mut g = Graph {
        tape,
        store,
        mode,
        init: None,
    };
    let v = net_forward(&mut g, net, &item.input)?;
    let est = (v.enhanced_re, v.enhanced_im);
    let parts = LossVars {
        echo_weighted: loss_echo_weighted(tape, est, &item.target, &item.echo_active, loss)?,
        asym: loss_asym(tape, est, &item.target, loss)?,
        mask: loss_mask(tape, v.zom.mask, &item.ideal_mask)?,
        vad: loss_vad(tape, v.vad, &item.speech_active)?,
    };
    let total = loss_total(tape, &parts, loss)?;
    Ok((parts, total))
}

/// Optimiser state plus the network parameters.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub net: NetConfig,
    pub config: TrainConfig,
    pub store: ParamStore<f32>,
    pub adam: Adam<f32>,
    /// Updates applied so far.
    pub step: u64,
    /// Completed epochs.
    pub epoch: u64,
}

impl Trainer {
    pub fn new(net: NetConfig, config: TrainConfig) -> Result<Self> {
        config.loss.validate()?;
        config.schedule.lr(1)?;
        let store = init_params(&net, config.seed)?;
        let adam = Adam::new(&store);
        Ok(Self {
            net,
            config,
            store,
            adam,
            step: 0,
            epoch: 0,
        })
    }

    /// One Adam update on `item`; returns the losses before the update.
    pub fn train_step(&mut self, item: &TrainItem) -> Result<StepRecord> {
        let lr = self.config.schedule.lr(self.step + 1)?;
        let mut tape = Tape::new();
        let (parts, total) = item_losses(
            &mut tape,
            &mut self.store,
            &self.net,
            &self.config.loss,
            item,
            BatchNormMode::Train,
        )?;
        let p = parts.values(&tape);
        let total_v = tape.value(total).data[0] as f64;
        if !total_v.is_finite() {
            return Err(AecError::NonFinite("training loss"));
        }
        let grads = tape.backward(total)?;
        grads.accumulate(&mut self.store);
        self.adam.step(&mut self.store, lr)?;
        self.step += 1;
        Ok(StepRecord {
            step: self.step,
            lr,
            total: total_v,
            echo_weighted: p.echo_weighted,
            asym: p.asym,
            mask: p.mask,
            vad: p.vad,
        })
    }

    /// Item order of `epoch` (0-based), a pure function of seed and epoch.
    pub fn epoch_order(&self, epoch: u64, n: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order
    }

    /// Runs the next epoch, reporting each step to `log`.
    pub fn run_epoch(&mut self, items: &[TrainItem], mut log: impl FnMut(&StepRecord) -> Result<()>) -> Result<()> {
        if items.is_empty() {
            return Err(AecError::EmptyDataset);
        }
        for i in self.epoch_order(self.epoch, items.len()) {
            let rec = self.train_step(&items[i])?;
            log(&rec)?;
        }
        self.epoch += 1;
        Ok(())
    }

    /// Mean losses over `items` with batch norm in evaluation mode; no
    /// update.
    pub fn evaluate(&self, items: &[TrainItem]) -> Result<LossParts> {
        let mut store = self.store.clone();
        let mut acc = LossParts::default();
        for item in items {
            let mut tape = Tape::new();
            let (parts, _) = item_losses(&mut tape, &mut store, &self.net, &self.config.loss, item, BatchNormMode::Eval)?;
            let p = parts.values(&tape);
            acc.echo_weighted += p.echo_weighted;
            acc.asym += p.asym;
            acc.mask += p.mask;
            acc.vad += p.vad;
        }
        let n = items.len().max(1) as f64;
        Ok(LossParts {
            echo_weighted: acc.echo_weighted / n,
            asym: acc.asym / n,
            mask: acc.mask / n,
            vad: acc.vad / n,
        })
    }

    pub fn checkpoint_entries(&self) -> Vec<CheckpointEntry> {
        let mut out = store_entries(&self.store);
        let counters = [("train/step", self.step), ("train/epoch", self.epoch)];
        for (name, v) in counters {
            out.push(CheckpointEntry {
                name: name.into(),
                tensor: Tensor::scalar(v as f32),
            });
        }
        out.extend(
            self.adam
                .state(&self.store)
                .into_iter()
                .map(|(name, tensor)| CheckpointEntry { name, tensor }),
        );
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.checkpoint_entries())
    }

    /// Rebuilds a trainer from a checkpoint written by [`Trainer::save`].
    pub fn resume(net: NetConfig, config: TrainConfig, path: &Path) -> Result<Self> {
        let entries = load_checkpoint(path)?;
        let mut t = Self::new(net, config)?;
        restore_store(&mut t.store, &entries)?;
        let lookup = |name: &str| entries.iter().find(|e| e.name == name).map(|e| e.tensor.clone());
        let counter = |name: &str| {
            lookup(name)
                .map(|t| t.data[0] as u64)
                .ok_or_else(|| AecError::Parse(format!("checkpoint lacks {name}")))
        };
        t.step = counter("train/step")?;
        t.epoch = counter("train/epoch")?;
        t.adam.load_state(&t.store, lookup)?;
        Ok(t)
    }
}

/// Outcome of [`train`].
#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub records: Vec<StepRecord>,
    pub checkpoint: Option<PathBuf>,
    pub trainer: Trainer,
}

/// Trains until `config.epochs` epochs are complete. With `out_dir`, the
/// log is appended to `train_log.jsonl` and the checkpoint rewritten after
/// every epoch; an existing checkpoint there is resumed.
pub fn train(
    items: &[TrainItem],
    net: &NetConfig,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainSummary> {
    if items.is_empty() {
        return Err(AecError::EmptyDataset);
    }
    net.validate()?;
    let ckpt = out_dir.map(|d| d.join(CHECKPOINT_FILE));
    let mut trainer = match &ckpt {
        Some(p) if p.is_file() => Trainer::resume(net.clone(), config.clone(), p)?,
        _ => Trainer::new(net.clone(), config.clone())?,
    };
    let mut log_file = match out_dir {
        Some(d) => {
            std::fs::create_dir_all(d).map_err(|e| AecError::io(d, e))?;
            let p = d.join(NET_CONFIG_FILE);
            std::fs::write(&p, net.to_kv().to_text()).map_err(|e| AecError::io(&p, e))?;
            let p = d.join(LOG_FILE);
            let f = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&p)
                .map_err(|e| AecError::io(&p, e))?;
            Some((p, std::io::BufWriter::new(f)))
        }
        None => None,
    };
    let mut records = Vec::new();
    while trainer.epoch < config.epochs {
        trainer.run_epoch(items, |rec| {
            records.push(*rec);
            if let Some((p, w)) = log_file.as_mut() {
                let line = serde_json::to_string(rec).expect("record serialises");
                writeln!(w, "{line}").map_err(|e| AecError::io(p.as_path(), e))?;
            }
            Ok(())
        })?;
        if let Some((p, w)) = log_file.as_mut() {
            w.flush().map_err(|e| AecError::io(p.as_path(), e))?;
        }
        if let Some(p) = &ckpt {
            trainer.save(p)?;
        }
    }
    Ok(TrainSummary {
        records,
        checkpoint: ckpt,
        trainer,
    })
}
