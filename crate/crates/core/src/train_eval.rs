//! Loss, optimizer, metrics, checkpoints, training, evaluation and the
//! ablation grids.

use std::path::Path;
use std::time::Instant;

use crate::backbone::{ModelConfig, Network};
use crate::config::{model_text, train_text, RunConfig};
use crate::data_io::{epoch_order, make_batch, Dataset, LoadedSplit, Split, Standardization};
use crate::error::{Error, Result};
use crate::nn::{fnv1a, ParamStore};
use crate::tape::{Mode, Tape, Var};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Seeds the per-epoch shuffle.
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            epochs: 10,
            batch_size: 32,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config(format!("train.lr = {} (must be > 0)", self.lr)));
        }
        if self.epochs < 1 {
            return Err(Error::config("train.epochs must be >= 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::config("train.batch_size must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("adam betas must lie in [0, 1)"));
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::config("train.eps must be > 0"));
        }
        Ok(())
    }
}

/// Mean over the batch of `-log softmax(logits)[label]`.
pub fn cross_entropy<T: Element>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, labels)
}

/// Row-wise argmax; ties go to the smallest index.
pub fn argmax_rows<T: Element>(logits: &Tensor<T>) -> Result<Vec<usize>> {
    if logits.ndim() != 2 {
        return Err(Error::shape(format!(
            "logits must be N×K, got {:?}",
            logits.shape()
        )));
    }
    let k = logits.shape()[1];
    Ok(logits
        .data()
        .chunks(k.max(1))
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}

fn correct<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> Result<usize> {
    let pred = argmax_rows(logits)?;
    if pred.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} logit rows for {} labels",
            pred.len(),
            labels.len()
        )));
    }
    Ok(pred.iter().zip(labels).filter(|(p, l)| p == l).count())
}

pub fn top1_accuracy<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::shape("top1_accuracy needs at least one row"));
    }
    Ok(correct(logits, labels)? as f64 / labels.len() as f64)
}

/// Adam with bias correction; moments kept in f32 alongside the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig, store: &ParamStore) -> Self {
        let zeros = || {
            store
                .params()
                .iter()
                .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
                .collect()
        };
        Adam {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update of every parameter in `store` from `grads` (store order).
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != self.m.len() || grads.len() != store.params().len() {
            return Err(Error::shape(format!(
                "{} gradients for {} parameters",
                grads.len(),
                store.params().len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, g) in grads.iter().enumerate() {
            let p = &store.params()[i].1;
            if g.shape() != p.shape() {
                return Err(Error::shape(format!(
                    "gradient {:?} for parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let n = p.numel();
            let mut pn = Vec::with_capacity(n);
            let mut mn = Vec::with_capacity(n);
            let mut vn = Vec::with_capacity(n);
            for j in 0..n {
                let gj = g.data()[j] as f64;
                let m = self.beta1 * self.m[i].data()[j] as f64 + (1.0 - self.beta1) * gj;
                let v = self.beta2 * self.v[i].data()[j] as f64 + (1.0 - self.beta2) * gj * gj;
                let upd = self.lr * (m / bc1) / ((v / bc2).sqrt() + self.eps);
                pn.push((p.data()[j] as f64 - upd) as f32);
                mn.push(m as f32);
                vn.push(v as f32);
            }
            let shape = p.shape().to_vec();
            self.m[i] = Tensor::new(shape.clone(), mn)?;
            self.v[i] = Tensor::new(shape.clone(), vn)?;
            store.set_index(i, Tensor::new(shape, pn)?)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub split: Split,
    /// Mean per-sample cross-entropy.
    pub loss: f64,
    pub top1_accuracy: f64,
}

pub const METRICS_HEADER: [&str; 4] = ["epoch", "split", "loss", "top1_accuracy"];

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{}",
            self.epoch, self.split, self.loss, self.top1_accuracy
        )
    }
}

pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut s = METRICS_HEADER.join(",");
    s.push('\n');
    for r in records {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

const MAGIC: &[u8; 4] = b"RKCP";
const VERSION: u32 = 1;

/// Parameters, optimizer moments, running statistics, standardization
/// constants and the model/train configuration of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub params: Vec<(String, Tensor)>,
    pub optimizer_step: u64,
    /// `adam.m.<param>` then `adam.v.<param>`, each in parameter order.
    pub optimizer: Vec<(String, Tensor)>,
    /// `<norm>.running_mean`, `<norm>.running_var`, `data.mean`, `data.std`.
    pub state: Vec<(String, Tensor)>,
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) -> Result<()> {
    let len =
        u16::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("tensor name too long: {name}")))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(t.ndim() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

fn put_section(out: &mut Vec<u8>, tensors: &[(String, Tensor)]) -> Result<()> {
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        put_tensor(out, name, t)?;
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated at byte {} (need {n} more)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let len = self.u16()? as usize;
        let name = std::str::from_utf8(self.take(len)?)
            .map_err(|_| Error::Checkpoint(format!("non-UTF-8 tensor name at byte {}", self.pos)))?
            .to_string();
        let ndim = self.u8()? as usize;
        let dims = (0..ndim)
            .map(|_| self.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let raw = self.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::Checkpoint("tensor too large".into()))?,
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(dims, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        Ok((name, t))
    }

    fn section(&mut self) -> Result<Vec<(String, Tensor)>> {
        let count = self.u32()? as usize;
        (0..count).map(|_| self.tensor()).collect()
    }
}

impl Checkpoint {
    pub fn capture(
        net: &Network,
        adam: &Adam,
        standardization: &Standardization,
        train: &TrainConfig,
    ) -> Self {
        let names: Vec<&String> = net.store.params().iter().map(|(n, _)| n).collect();
        let mut optimizer = Vec::with_capacity(2 * names.len());
        for (n, m) in names.iter().zip(&adam.m) {
            optimizer.push((format!("adam.m.{n}"), m.clone()));
        }
        for (n, v) in names.iter().zip(&adam.v) {
            optimizer.push((format!("adam.v.{n}"), v.clone()));
        }
        let mut state = Vec::new();
        for (name, stats) in net.store.buffers() {
            let c = stats.mean.len();
            state.push((
                format!("{name}.running_mean"),
                Tensor::from_parts(vec![c], stats.mean.clone()),
            ));
            state.push((
                format!("{name}.running_var"),
                Tensor::from_parts(vec![c], stats.var.clone()),
            ));
        }
        state.push((
            "data.mean".into(),
            Tensor::from_parts(vec![3], standardization.mean.to_vec()),
        ));
        state.push((
            "data.std".into(),
            Tensor::from_parts(vec![3], standardization.std.to_vec()),
        ));
        Checkpoint {
            model: net.config.clone(),
            train: train.clone(),
            params: net.store.params().to_vec(),
            optimizer_step: adam.step,
            optimizer,
            state,
        }
    }

    fn trailer(&self) -> String {
        let mut s = model_text(&self.model);
        s.push_str(&train_text(&self.train));
        s.push_str(&format!("optimizer.step={}\n", self.optimizer_step));
        s
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_section(&mut out, &self.params)?;
        put_section(&mut out, &self.optimizer)?;
        put_section(&mut out, &self.state)?;
        let text = self.trailer();
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).ok() != Some(&MAGIC[..]) {
            return Err(Error::Checkpoint("bad magic (expected RKCP)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let params = r.section()?;
        let optimizer = r.section()?;
        let state = r.section()?;
        let len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("config trailer is not UTF-8".into()))?;
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        let mut cfg = RunConfig::default();
        let mut step = None;
        for line in text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("bad config line {line:?}")))?;
            if k == "optimizer.step" {
                step = Some(
                    v.parse()
                        .map_err(|_| Error::Checkpoint(format!("bad step {v:?}")))?,
                );
            } else if k.starts_with("model.") || k.starts_with("train.") {
                cfg.set(k, v).map_err(|e| Error::Checkpoint(e.to_string()))?;
            } else {
                return Err(Error::Checkpoint(format!("unexpected config key {k:?}")));
            }
        }
        Ok(Checkpoint {
            model: cfg.model,
            train: cfg.train,
            params,
            optimizer_step: step.ok_or_else(|| Error::Checkpoint("missing optimizer.step".into()))?,
            optimizer,
            state,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    fn state_tensor(&self, name: &str) -> Result<&Tensor> {
        self.state
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Checkpoint(format!("missing state tensor {name}")))
    }

    pub fn standardization(&self) -> Result<Standardization> {
        let get = |name: &str| -> Result<[f32; 3]> {
            self.state_tensor(name)?
                .data()
                .try_into()
                .map_err(|_| Error::Checkpoint(format!("{name} must hold 3 values")))
        };
        Ok(Standardization {
            mean: get("data.mean")?,
            std: get("data.std")?,
        })
    }

    /// Copies parameters and running statistics into `net`, which must have
    /// been built from the same model configuration.
    pub fn restore(&self, net: &mut Network) -> Result<()> {
        if self.model != net.config {
            return Err(Error::Checkpoint(format!(
                "checkpoint model config {} does not match network config {}",
                self.model.id(),
                net.config.id()
            )));
        }
        if self.params.len() != net.store.params().len() {
            return Err(Error::Checkpoint(format!(
                "{} parameters in checkpoint, network has {}",
                self.params.len(),
                net.store.params().len()
            )));
        }
        for (i, (name, t)) in self.params.iter().enumerate() {
            let (want, cur) = &net.store.params()[i];
            if want != name || cur.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {i}: checkpoint has {name} {:?}, network has {want} {:?}",
                    t.shape(),
                    cur.shape()
                )));
            }
        }
        for (i, (_, t)) in self.params.iter().enumerate() {
            net.store.set_index(i, t.clone())?;
        }
        let mut stats = Vec::new();
        for (name, s) in net.store.buffers() {
            let mean = self.state_tensor(&format!("{name}.running_mean"))?;
            let var = self.state_tensor(&format!("{name}.running_var"))?;
            if mean.numel() != s.mean.len() || var.numel() != s.var.len() {
                return Err(Error::Checkpoint(format!(
                    "running statistics of {name} have the wrong size"
                )));
            }
            stats.push((mean.to_vec(), var.to_vec()));
        }
        for ((_, s), (mean, var)) in net.store.buffers_mut().iter_mut().zip(stats) {
            s.mean = mean;
            s.var = var;
        }
        Ok(())
    }

    /// Optimizer state for resuming from this checkpoint.
    pub fn adam(&self) -> Result<Adam> {
        let n = self.params.len();
        if self.optimizer.len() != 2 * n {
            return Err(Error::Checkpoint(format!(
                "{} optimizer tensors for {n} parameters",
                self.optimizer.len()
            )));
        }
        let take =
            |range: std::ops::Range<usize>| self.optimizer[range].iter().map(|(_, t)| t.clone()).collect();
        Ok(Adam {
            lr: self.train.lr,
            beta1: self.train.beta1,
            beta2: self.train.beta2,
            eps: self.train.eps,
            step: self.optimizer_step,
            m: take(0..n),
            v: take(n..2 * n),
        })
    }
}

/// Batches of an epoch in sample order; a trailing single-sample batch is
/// folded into the previous batch so batch statistics stay defined.
pub fn train_batches(len: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let order = epoch_order(Split::Train, len, seed, epoch);
    let mut chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if chunks.len() > 1 && chunks.last().is_some_and(|c| c.len() == 1) {
        let last = chunks.pop().unwrap();
        chunks.last_mut().unwrap().extend(last);
    }
    chunks
}

/// Eval-mode loss and accuracy over `split` in index order.
pub fn evaluate_split(
    net: &mut Network,
    split: &LoadedSplit,
    standardization: &Standardization,
    batch_size: usize,
    epoch: usize,
) -> Result<MetricsRecord> {
    if split.is_empty() {
        return Err(Error::Dataset("cannot evaluate an empty split".into()));
    }
    let order: Vec<usize> = (0..split.len()).collect();
    let mut loss_sum = 0.0;
    let mut hits = 0;
    for chunk in order.chunks(batch_size.max(1)) {
        let batch = make_batch(split, chunk, standardization)?;
        let mut tape: Tape = Tape::new();
        let x = tape.constant(batch.images);
        let out = net.forward(&mut tape, x, Mode::Eval)?;
        let loss = tape.cross_entropy(out.logits, &batch.labels)?;
        loss_sum += tape.value(loss).item()? as f64 * chunk.len() as f64;
        hits += correct(tape.value(out.logits), &batch.labels)?;
    }
    Ok(MetricsRecord {
        epoch,
        split: split.index.split,
        loss: loss_sum / split.len() as f64,
        top1_accuracy: hits as f64 / split.len() as f64,
    })
}

/// Restores `ckpt` into `net` and evaluates `split` with the checkpoint's
/// standardization constants.
pub fn evaluate(net: &mut Network, ckpt: &Checkpoint, split: &LoadedSplit) -> Result<MetricsRecord> {
    ckpt.restore(net)?;
    let std = ckpt.standardization()?;
    evaluate_split(net, split, &std, ckpt.train.batch_size, ckpt.train.epochs)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricsRecord>,
}

/// Trains `net` in place. Each epoch appends a train record (running
/// train-mode loss and accuracy over the epoch's batches) and a test record
/// (eval mode).
pub fn train(net: &mut Network, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.num_classes() != net.config.num_classes {
        return Err(Error::config(format!(
            "dataset has {} classes, model.num_classes = {}",
            data.num_classes(),
            net.config.num_classes
        )));
    }
    if data.train.is_empty() {
        return Err(Error::Dataset("train split is empty".into()));
    }
    let std = data.standardization;
    let mut adam = Adam::new(cfg, &net.store);
    let mut metrics = Vec::with_capacity(2 * cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut loss_sum = 0.0;
        let mut hits = 0;
        for (b, chunk) in train_batches(data.train.len(), cfg.batch_size, cfg.seed, epoch)
            .iter()
            .enumerate()
        {
            let batch = make_batch(&data.train, chunk, &std)?;
            let mut tape: Tape = Tape::new();
            let x = tape.constant(batch.images);
            let out = net.forward(&mut tape, x, Mode::Train)?;
            let loss = tape.cross_entropy(out.logits, &batch.labels)?;
            let lv = tape.value(loss).item()?;
            if !lv.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            loss_sum += lv as f64 * chunk.len() as f64;
            hits += correct(tape.value(out.logits), &batch.labels)?;
            tape.backward(loss)?;
            let grads: Vec<Tensor> = out.params.iter().map(|&p| tape.grad(p)).collect();
            adam.update(&mut net.store, &grads)?;
        }
        let n = data.train.len() as f64;
        metrics.push(MetricsRecord {
            epoch,
            split: Split::Train,
            loss: loss_sum / n,
            top1_accuracy: hits as f64 / n,
        });
        let test = evaluate_split(net, &data.test, &std, cfg.batch_size, epoch)?;
        log::info!(
            "epoch {epoch}: train loss {:.4} acc {:.4}, test loss {:.4} acc {:.4}",
            loss_sum / n,
            hits as f64 / n,
            test.loss,
            test.top1_accuracy
        );
        metrics.push(test);
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint::capture(net, &adam, &std, cfg),
        metrics,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridEntry {
    pub id: String,
    pub config: ModelConfig,
}

impl GridEntry {
    pub fn new(config: ModelConfig) -> Self {
        GridEntry {
            id: config.id(),
            config,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// The baseline on the initial and on the augmented dataset.
    Table1,
    /// Kernel-modification levels 0–4 without attention.
    Table2,
    /// 0/1/2 attention blocks, with and without the internal residual.
    Table3,
    /// Every legal (bot_blocks, irc, kernel_mod) combination.
    Full,
}

pub const PRESETS: [&str; 4] = ["table1", "table2", "table3", "full"];

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table1" => Ok(Preset::Table1),
            "table2" => Ok(Preset::Table2),
            "table3" => Ok(Preset::Table3),
            "full" => Ok(Preset::Full),
            other => Err(Error::config(format!(
                "unknown preset {other:?} (valid: {})",
                PRESETS.join(", ")
            ))),
        }
    }
}

impl Preset {
    /// Grid rows derived from `base`; seeds and sizes come from `base`.
    pub fn grid(self, base: &ModelConfig) -> Vec<GridEntry> {
        let with = |bot: usize, irc: bool, km: u8| {
            GridEntry::new(ModelConfig {
                bot_blocks: bot,
                irc,
                kernel_mod: km,
                ..base.clone()
            })
        };
        match self {
            Preset::Table1 => vec![with(0, false, 0)],
            Preset::Table2 => (0..=4).map(|km| with(0, false, km)).collect(),
            Preset::Table3 => vec![
                with(0, false, 0),
                with(1, false, 0),
                with(1, true, 0),
                with(2, false, 0),
                with(2, true, 0),
            ],
            Preset::Full => {
                let mut rows = Vec::new();
                for bot in 0..=2 {
                    for irc in [false, true] {
                        if irc && bot == 0 {
                            continue;
                        }
                        rows.extend((0..=4).map(|km| with(bot, irc, km)));
                    }
                }
                rows
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub config_id: String,
    pub bot_blocks: usize,
    pub irc: bool,
    pub kernel_mod: u8,
    /// Final test accuracy, or the error that stopped the row.
    pub test_accuracy: std::result::Result<f64, String>,
    pub param_count: usize,
    pub wall_seconds: f64,
}

/// Seeds and data order each ablation row was trained with.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunManifestRow {
    pub config_id: String,
    pub model_seed: u64,
    pub train_seed: u64,
    pub data_order_hash: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub manifest: Vec<RunManifestRow>,
}

pub const ABLATION_HEADER: [&str; 7] = [
    "config_id",
    "bot_blocks",
    "irc",
    "kernel_mod",
    "test_accuracy",
    "param_count",
    "wall_seconds",
];

impl AblationReport {
    /// Ablation CSV. With `record_time = false` the wall-time column is 0 so
    /// the file depends only on inputs and seeds.
    pub fn to_csv(&self, record_time: bool) -> String {
        let mut s = ABLATION_HEADER.join(",");
        s.push('\n');
        for r in &self.rows {
            let acc = match &r.test_accuracy {
                Ok(a) => a.to_string(),
                Err(e) => format!("\"error: {}\"", e.replace('"', "'")),
            };
            let secs = if record_time {
                format!("{:.3}", r.wall_seconds)
            } else {
                "0".into()
            };
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.config_id, r.bot_blocks, r.irc, r.kernel_mod, acc, r.param_count, secs
            ));
        }
        s
    }

    pub fn manifest_csv(&self) -> String {
        let mut s = String::from("config_id,model_seed,train_seed,data_order_hash\n");
        for m in &self.manifest {
            s.push_str(&format!(
                "{},{},{},{:016x}\n",
                m.config_id, m.model_seed, m.train_seed, m.data_order_hash
            ));
        }
        s
    }

    pub fn extend(&mut self, other: AblationReport) {
        self.rows.extend(other.rows);
        self.manifest.extend(other.manifest);
    }
}

/// Hash of every epoch's training batch order.
pub fn data_order_hash(len: usize, cfg: &TrainConfig) -> u64 {
    let mut bytes = Vec::new();
    for epoch in 1..=cfg.epochs {
        for chunk in train_batches(len, cfg.batch_size, cfg.seed, epoch) {
            for i in chunk {
                bytes.extend_from_slice(&(i as u32).to_le_bytes());
            }
            bytes.push(0xff);
        }
    }
    fnv1a(&bytes)
}

/// Trains every grid entry from scratch with the same data and train
/// configuration. A failing row is recorded and the grid continues.
pub fn run_ablation(grid: &[GridEntry], data: &Dataset, cfg: &TrainConfig) -> Result<AblationReport> {
    cfg.validate()?;
    let order_hash = data_order_hash(data.train.len(), cfg);
    let mut report = AblationReport::default();
    for entry in grid {
        let c = &entry.config;
        let start = Instant::now();
        let mut param_count = 0;
        let result = Network::build(c).and_then(|mut net| {
            param_count = net.param_count();
            let out = train(&mut net, data, cfg)?;
            Ok(out
                .metrics
                .iter()
                .rev()
                .find(|m| m.split == Split::Test)
                .map(|m| m.top1_accuracy)
                .unwrap_or(f64::NAN))
        });
        if let Err(e) = &result {
            log::warn!("ablation row {} failed: {e}", entry.id);
        }
        report.rows.push(AblationRow {
            config_id: entry.id.clone(),
            bot_blocks: c.bot_blocks,
            irc: c.irc,
            kernel_mod: c.kernel_mod,
            test_accuracy: result.map_err(|e| e.to_string()),
            param_count,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
        report.manifest.push(RunManifestRow {
            config_id: entry.id.clone(),
            model_seed: c.seed,
            train_seed: cfg.seed,
            data_order_hash: order_hash,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn singleton_tail_is_merged() {
        let b = train_batches(9, 4, 0, 1);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 5]);
        let b = train_batches(10, 4, 0, 1);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
    }

    #[test]
    fn presets_parse() {
        assert_eq!("table3".parse::<Preset>().unwrap(), Preset::Table3);
        let err = "table9".parse::<Preset>().unwrap_err().to_string();
        assert!(err.contains("table1, table2, table3, full"));
        assert_eq!(Preset::Full.grid(&ModelConfig::default()).len(), 25);
    }
}
