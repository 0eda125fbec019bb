//! Training loops for the from-scratch, finetune and memory-transfer modes.
//!
//! A [`Trainer`] owns the target model, its Adam state and a ChaCha8 stream
//! that drives both initialization and minibatch sampling, so a run is a pure
//! function of its configuration, dataset and sources. The checkpoint it
//! writes carries the best-on-validation weights under their plain names and
//! the latest weights under `last/`, together with everything needed to
//! resume bit-exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::cells::GateStats;
use crate::checkpoint::{Checkpoint, RngState};
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::metrics::{EvalAccumulator, EvalReport};
use crate::network::{run_source_models, check_source_geometry, CellKind, Feedback, NetworkConfig, Predictor};
use crate::optim::{adam_step, AdamState, DEFAULT_LR};
use crate::tensor::Tensor;
use crate::transfer::{check_beta, objective, LossReport, DEFAULT_BETA};

const LAST: &str = "last/";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Scratch,
    Finetune,
    Transfer,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Scratch => "scratch",
            Mode::Finetune => "finetune",
            Mode::Transfer => "transfer",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "scratch" => Ok(Mode::Scratch),
            "finetune" => Ok(Mode::Finetune),
            "transfer" => Ok(Mode::Transfer),
            _ => Err(Error::Usage(format!("unknown mode {s:?} (expected scratch, finetune or transfer)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub lr: f64,
    pub batch_size: usize,
    pub max_iters: usize,
    pub beta: f64,
    pub seed: u64,
    pub val_every: usize,
    /// Validations without improvement before stopping.
    pub patience: usize,
    /// Caps the number of validation clips scored.
    pub val_limit: Option<usize>,
    /// Fraction of the training split to sample from.
    pub subset_fraction: f64,
    /// How sources consume frames when filling the memory bank.
    pub bank_feedback: Feedback,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Scratch,
            lr: DEFAULT_LR,
            batch_size: 8,
            max_iters: 5000,
            beta: DEFAULT_BETA,
            seed: 0,
            val_every: 250,
            patience: 5,
            val_limit: None,
            subset_fraction: 1.0,
            bank_feedback: Feedback::ClosedLoop,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_beta(self.beta)?;
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.max_iters == 0 || self.val_every == 0 || self.patience == 0 {
            return Err(Error::config("batch size, iterations, validation cadence and patience must be positive"));
        }
        if !(self.subset_fraction > 0.0 && self.subset_fraction <= 1.0) {
            return Err(Error::config(format!(
                "subset fraction must lie in (0, 1], got {}",
                self.subset_fraction
            )));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        vec![
            ("mode".into(), self.mode.as_str().into()),
            ("lr".into(), self.lr.to_string()),
            ("batch_size".into(), self.batch_size.to_string()),
            ("max_iters".into(), self.max_iters.to_string()),
            ("beta".into(), self.beta.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("val_every".into(), self.val_every.to_string()),
            ("patience".into(), self.patience.to_string()),
            ("val_limit".into(), self.val_limit.map_or("all".into(), |v| v.to_string())),
            ("subset_fraction".into(), self.subset_fraction.to_string()),
            ("bank_feedback".into(), self.bank_feedback.as_str().into()),
        ]
    }

    pub fn from_kv(kv: &[(String, String)]) -> Result<Self> {
        let get = |k: &str| {
            crate::codec::kv_get(kv, k).ok_or_else(|| Error::format(format!("missing training key {k:?}")))
        };
        fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::format(format!("bad value {v:?} for {k:?}")))
        }
        let val_limit = match get("val_limit")? {
            "all" => None,
            v => Some(num("val_limit", v)?),
        };
        Ok(TrainConfig {
            mode: Mode::parse(get("mode")?)?,
            lr: num("lr", get("lr")?)?,
            batch_size: num("batch_size", get("batch_size")?)?,
            max_iters: num("max_iters", get("max_iters")?)?,
            beta: num("beta", get("beta")?)?,
            seed: num("seed", get("seed")?)?,
            val_every: num("val_every", get("val_every")?)?,
            patience: num("patience", get("patience")?)?,
            val_limit,
            subset_fraction: num("subset_fraction", get("subset_fraction")?)?,
            bank_feedback: Feedback::parse(get("bank_feedback")?)?,
        })
    }
}

fn prefixed(prefix: &str, kv: Vec<(String, String)>) -> impl Iterator<Item = (String, String)> + '_ {
    kv.into_iter().map(move |(k, v)| (format!("{prefix}{k}"), v))
}

fn strip(prefix: &str, kv: &[(String, String)]) -> Vec<(String, String)> {
    kv.iter()
        .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
        .collect()
}

/// The best-on-validation model stored in a checkpoint.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<Predictor> {
    let cfg = NetworkConfig::from_kv(&strip("net.", &ckpt.config))?;
    let named: Vec<(String, Tensor)> = ckpt
        .tensors
        .iter()
        .filter(|(n, _)| !n.starts_with(LAST))
        .cloned()
        .collect();
    Predictor::from_named(cfg, &named)
}

pub fn train_config_from_checkpoint(ckpt: &Checkpoint) -> Result<TrainConfig> {
    TrainConfig::from_kv(&strip("train.", &ckpt.config))
}

/// Checkpoint holding only a model, e.g. one built outside a training run.
pub fn model_checkpoint(model: &Predictor) -> Checkpoint {
    Checkpoint {
        config: prefixed("net.", model.config.to_kv()).collect(),
        tensors: model.named_tensors(),
        optimizer: None,
        rng: None,
    }
}

/// Metrics plus transfer-gate statistics of one evaluation pass.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: EvalReport,
    pub gates: GateStats,
}

/// Scores closed-loop predictions of the prediction horizon of `clips`
/// (`[N, T, P, H, W]`) in consecutive batches.
pub fn evaluate(model: &Predictor, clips: &Tensor, batch_size: usize, csi_threshold: Option<f64>) -> Result<Evaluation> {
    let cfg = &model.config;
    let s = clips.shape();
    if s.len() != 5 || s[1] != cfg.seq_len() || s[2..] != [cfg.frame_channels, cfg.frame_height, cfg.frame_width] {
        return Err(Error::shape(
            "evaluation clips vs model",
            s,
            &[s.first().copied().unwrap_or(0), cfg.seq_len(), cfg.frame_channels, cfg.frame_height, cfg.frame_width],
        ));
    }
    let (n, t) = (s[0], s[1]);
    let per: usize = s[2..].iter().product();
    let horizon = cfg.predict_len;
    let mut acc = EvalAccumulator::new(horizon, (cfg.frame_height, cfg.frame_width), csi_threshold);
    let mut gates = GateStats::new(cfg.num_layers, cfg.num_sources);
    let bs = batch_size.max(1);
    for start in (0..n).step_by(bs) {
        let end = (start + bs).min(n);
        let m = end - start;
        let frames = Tensor::new(&[m, t, s[2], s[3], s[4]], clips.data()[start * t * per..end * t * per].to_vec())?;
        let pred = model.predict(&frames)?;
        // Prediction p is frame p + 1; the horizon starts at frame input_len.
        let mut p_data = Vec::with_capacity(m * horizon * per);
        let mut x_data = Vec::with_capacity(m * horizon * per);
        for b in 0..m {
            let p_off = (b * (t - 1) + cfg.input_len - 1) * per;
            p_data.extend_from_slice(&pred.frames.data()[p_off..p_off + horizon * per]);
            let x_off = (b * t + cfg.input_len) * per;
            x_data.extend_from_slice(&frames.data()[x_off..x_off + horizon * per]);
        }
        let shape = [m, horizon, s[2], s[3], s[4]];
        acc.add(&Tensor::new(&shape, p_data)?, &Tensor::new(&shape, x_data)?)?;
        gates.merge(&pred.gates);
    }
    Ok(Evaluation {
        report: acc.finish()?,
        gates,
    })
}

#[derive(Clone, Debug, PartialEq)]
struct Best {
    val_mse: f64,
    iter: usize,
    tensors: Vec<(String, Tensor)>,
}

/// One training run in progress.
pub struct Trainer<'a> {
    pub config: TrainConfig,
    data: &'a Dataset,
    sources: &'a [Predictor],
    source_prints: Vec<String>,
    model: Predictor,
    adam: AdamState,
    rng: ChaCha8Rng,
    iter: usize,
    best: Option<Best>,
    stale: usize,
    stopped: bool,
    log: Vec<String>,
}

fn check_dataset(net: &NetworkConfig, data: &Dataset) -> Result<()> {
    let [p, h, w] = data.frame_shape();
    if [p, h, w] != [net.frame_channels, net.frame_height, net.frame_width]
        || data.input_len != net.input_len
        || data.predict_len != net.predict_len
    {
        return Err(Error::config(format!(
            "dataset clips are {}+{} frames of {p}x{h}x{w}, network expects {}+{} frames of {}x{}x{}",
            data.input_len,
            data.predict_len,
            net.input_len,
            net.predict_len,
            net.frame_channels,
            net.frame_height,
            net.frame_width
        )));
    }
    Ok(())
}

/// Network settings shaped to a dataset: frame geometry and horizons come from
/// the data, the rest from `arch`.
pub fn network_for(arch: &NetworkConfig, data: &Dataset) -> NetworkConfig {
    let [p, h, w] = data.frame_shape();
    NetworkConfig {
        frame_channels: p,
        frame_height: h,
        frame_width: w,
        input_len: data.input_len,
        predict_len: data.predict_len,
        ..arch.clone()
    }
}

impl<'a> Trainer<'a> {
    /// Starts a run. The number of sources and the cell kind are set by the
    /// mode: transfer uses one bank slot per source, the others none.
    pub fn new(config: TrainConfig, mut net: NetworkConfig, data: &'a Dataset, sources: &'a [Predictor]) -> Result<Self> {
        config.validate()?;
        match config.mode {
            Mode::Scratch if !sources.is_empty() => {
                return Err(Error::Usage("scratch mode takes no sources".into()));
            }
            Mode::Finetune if sources.len() != 1 => {
                return Err(Error::Usage(format!("finetune needs exactly one source, got {}", sources.len())));
            }
            Mode::Transfer if sources.is_empty() => {
                return Err(Error::Usage("transfer mode needs at least one source".into()));
            }
            _ => {}
        }
        if config.mode != Mode::Scratch {
            net.kind = CellKind::Tmu;
        }
        net.num_sources = if config.mode == Mode::Transfer { sources.len() } else { 0 };
        check_dataset(&net, data)?;
        for s in sources {
            check_source_geometry(&net, &s.config)?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut model = Predictor::new(net, &mut rng)?;
        if config.mode == Mode::Finetune {
            for (name, t) in sources[0].named_tensors() {
                model.store.set(&name, t)?;
            }
        }
        let adam = AdamState::new(&model.store, config.lr);
        Ok(Trainer {
            source_prints: sources.iter().map(|s| s.store.fingerprint()).collect(),
            config,
            data,
            sources,
            model,
            adam,
            rng,
            iter: 0,
            best: None,
            stale: 0,
            stopped: false,
            log: Vec::new(),
        })
    }

    /// Continues a run from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(ckpt: &Checkpoint, data: &'a Dataset, sources: &'a [Predictor]) -> Result<Self> {
        let config = train_config_from_checkpoint(ckpt)?;
        let net = NetworkConfig::from_kv(&strip("net.", &ckpt.config))?;
        let mut t = Trainer::new(config, net.clone(), data, sources)?;
        for (i, print) in t.source_prints.iter().enumerate() {
            let want = ckpt.require(&format!("source{i}.fingerprint"))?;
            if want != print {
                return Err(Error::Usage(format!("source {i} differs from the one this run started with")));
            }
        }
        t.model = Predictor::from_named(net, &ckpt.tensors_with_prefix(LAST))?;
        t.adam = ckpt
            .optimizer
            .clone()
            .ok_or_else(|| Error::format("checkpoint has no optimizer state to resume from"))?;
        t.rng = ckpt
            .rng
            .ok_or_else(|| Error::format("checkpoint has no RNG state to resume from"))?
            .restore();
        let num = |k: &str| -> Result<usize> {
            ckpt.require(k)?
                .parse()
                .map_err(|_| Error::format(format!("bad value for {k:?}")))
        };
        t.iter = num("progress.iter")?;
        t.stale = num("progress.stale")?;
        t.stopped = ckpt.require("progress.stopped")? == "true";
        if ckpt.require("progress.best_iter")? != "none" {
            let val_mse = ckpt
                .require("progress.best_val_mse")?
                .parse()
                .map_err(|_| Error::format("bad best validation MSE"))?;
            t.best = Some(Best {
                val_mse,
                iter: num("progress.best_iter")?,
                tensors: ckpt
                    .tensors
                    .iter()
                    .filter(|(n, _)| !n.starts_with(LAST))
                    .cloned()
                    .collect(),
            });
        }
        Ok(t)
    }

    pub fn model(&self) -> &Predictor {
        &self.model
    }

    pub fn iteration(&self) -> usize {
        self.iter
    }

    pub fn is_done(&self) -> bool {
        self.stopped || self.iter >= self.config.max_iters
    }

    /// Metric log records produced so far by this process.
    pub fn log(&self) -> &[String] {
        &self.log
    }

    pub fn best_val_mse(&self) -> Option<f64> {
        self.best.as_ref().map(|b| b.val_mse)
    }

    fn train_pool(&self) -> usize {
        let n = self.data.len(Split::Train);
        ((n as f64 * self.config.subset_fraction).ceil() as usize).clamp(1, n)
    }

    /// One optimizer step, followed by validation when due.
    pub fn step(&mut self) -> Result<LossReport> {
        if self.is_done() {
            return Err(Error::Usage("training has already finished".into()));
        }
        self.iter += 1;
        let pool = self.train_pool();
        let idx: Vec<usize> = (0..self.config.batch_size).map(|_| self.rng.gen_range(0..pool)).collect();
        let batch = self.data.batch(Split::Train, &idx)?;
        let bank = match self.config.mode {
            Mode::Transfer => Some(run_source_models(&batch.frames, self.sources, self.config.bank_feedback)?),
            _ => None,
        };
        let mut tape = Tape::new();
        let out = self.model.forward(&mut tape, &batch.frames, bank.as_ref(), Feedback::ClosedLoop)?;
        let (loss, report) = objective(&mut tape, &out, &batch.frames, self.config.beta)?;
        if !report.total.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at iteration {}: {}",
                self.iter,
                report.to_kv()
            )));
        }
        let grads = tape.backward(loss)?;
        if let Some((id, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient for {} at iteration {}: {}",
                self.model.store.name(*id),
                self.iter,
                report.to_kv()
            )));
        }
        adam_step(&mut self.model.store, &grads, &mut self.adam)?;
        self.log.push(format!("iter={} {}", self.iter, report.to_kv()));
        if self.iter % self.config.val_every == 0 || self.iter == self.config.max_iters {
            self.validate()?;
        }
        Ok(report)
    }

    fn validate(&mut self) -> Result<()> {
        let val = self.data.split(Split::Val);
        let n = self.config.val_limit.map_or(val.shape()[0], |l| l.clamp(1, val.shape()[0]));
        let per: usize = val.shape()[1..].iter().product();
        let mut shape = val.shape().to_vec();
        shape[0] = n;
        let clips = Tensor::new(&shape, val.data()[..n * per].to_vec())?;
        let mse = evaluate(&self.model, &clips, self.config.batch_size, None)?.report.mse;
        if !mse.is_finite() {
            return Err(Error::Numeric(format!("non-finite validation MSE at iteration {}", self.iter)));
        }
        let improved = self.best.as_ref().map_or(true, |b| mse < b.val_mse);
        if improved {
            self.best = Some(Best {
                val_mse: mse,
                iter: self.iter,
                tensors: self.model.named_tensors(),
            });
            self.stale = 0;
        } else {
            self.stale += 1;
            if self.stale >= self.config.patience {
                self.stopped = true;
            }
        }
        self.log.push(format!(
            "iter={} val_mse={} best_val_mse={} stale={}",
            self.iter,
            mse,
            self.best.as_ref().map_or(mse, |b| b.val_mse),
            self.stale
        ));
        if self.stopped {
            self.log.push(format!("iter={} early_stop=true", self.iter));
        }
        Ok(())
    }

    /// Runs until the iteration budget is spent or validation stops improving.
    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.config.max_iters)
    }

    /// Runs up to iteration `iter` (inclusive) unless training ends earlier.
    pub fn run_until(&mut self, iter: usize) -> Result<()> {
        while !self.is_done() && self.iter < iter {
            self.step()?;
        }
        Ok(())
    }

    /// Confirms that no source changed during the run.
    pub fn verify_sources(&self) -> Result<()> {
        for (i, (s, print)) in self.sources.iter().zip(&self.source_prints).enumerate() {
            if &s.store.fingerprint() != print {
                return Err(Error::Numeric(format!("source {i} was modified during training")));
            }
        }
        Ok(())
    }

    /// The best model so far; the current one if no validation has run.
    pub fn best_model(&self) -> Result<Predictor> {
        match &self.best {
            Some(b) => Predictor::from_named(self.model.config.clone(), &b.tensors),
            None => Ok(self.model.clone()),
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut config: Vec<(String, String)> = vec![("format".into(), "tmu-train".into())];
        config.extend(prefixed("net.", self.model.config.to_kv()));
        config.extend(prefixed("train.", self.config.to_kv()));
        config.push(("dataset.generator".into(), self.data.generator.clone()));
        config.push(("dataset.seed".into(), self.data.seed.to_string()));
        for (i, p) in self.source_prints.iter().enumerate() {
            config.push((format!("source{i}.fingerprint"), p.clone()));
        }
        config.push(("progress.iter".into(), self.iter.to_string()));
        config.push(("progress.stale".into(), self.stale.to_string()));
        config.push(("progress.stopped".into(), self.stopped.to_string()));
        match &self.best {
            Some(b) => {
                config.push(("progress.best_iter".into(), b.iter.to_string()));
                config.push(("progress.best_val_mse".into(), b.val_mse.to_string()));
            }
            None => config.push(("progress.best_iter".into(), "none".into())),
        }
        let best = self
            .best
            .as_ref()
            .map_or_else(|| self.model.named_tensors(), |b| b.tensors.clone());
        let mut tensors = best;
        tensors.extend(self.model.named_tensors().into_iter().map(|(n, t)| (format!("{LAST}{n}"), t)));
        Checkpoint {
            config,
            tensors,
            optimizer: Some(self.adam.clone()),
            rng: Some(RngState::capture(&self.rng)),
        }
    }
}

/// Experiment scale presets.
#[derive(Clone, Debug, PartialEq)]
pub struct Profile {
    pub name: &'static str,
    pub frame_size: usize,
    pub train_count: usize,
    pub source_iters: usize,
    pub target_iters: usize,
    pub input_len: usize,
    pub predict_len: usize,
    pub network: NetworkConfig,
    pub batch_size: usize,
}

impl Profile {
    pub fn desk() -> Self {
        Profile {
            name: "desk",
            frame_size: 32,
            train_count: 2000,
            source_iters: 3000,
            target_iters: 5000,
            input_len: 10,
            predict_len: 10,
            network: NetworkConfig {
                num_layers: 2,
                channels: 32,
                filter_size: 5,
                subscale_factor: 4,
                ..NetworkConfig::default()
            },
            batch_size: 8,
        }
    }

    pub fn tiny() -> Self {
        Profile {
            name: "tiny",
            frame_size: 16,
            train_count: 500,
            source_iters: 1500,
            target_iters: 1500,
            input_len: 5,
            predict_len: 5,
            network: NetworkConfig {
                num_layers: 2,
                channels: 16,
                filter_size: 3,
                subscale_factor: 4,
                input_len: 5,
                predict_len: 5,
                frame_height: 16,
                frame_width: 16,
                ..NetworkConfig::default()
            },
            batch_size: 8,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{GlyphConfig, SplitSizes};

    fn tiny_data(glyphs: usize, count: usize, seed: u64) -> Dataset {
        let mut g = GlyphConfig::new(glyphs, 16);
        g.input_len = 3;
        g.predict_len = 3;
        Dataset::generate(&g, seed, SplitSizes::from_train(count)).unwrap()
    }

    fn arch() -> NetworkConfig {
        NetworkConfig {
            num_layers: 1,
            channels: 4,
            filter_size: 3,
            subscale_factor: 4,
            ..NetworkConfig::default()
        }
    }

    fn cfg(mode: Mode, iters: usize) -> TrainConfig {
        TrainConfig {
            mode,
            max_iters: iters,
            batch_size: 2,
            val_every: 5,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    fn pretrained(data: &Dataset, seed: u64) -> Predictor {
        let mut net = network_for(&arch(), data);
        net.kind = CellKind::ConvLstm;
        let mut c = cfg(Mode::Scratch, 5);
        c.seed = seed;
        let mut t = Trainer::new(c, net, data, &[]).unwrap();
        t.run().unwrap();
        t.best_model().unwrap()
    }

    #[test]
    fn scratch_log_has_only_prediction_term() {
        let data = tiny_data(1, 6, 1);
        let mut t = Trainer::new(cfg(Mode::Scratch, 3), network_for(&arch(), &data), &data, &[]).unwrap();
        t.run().unwrap();
        let line = &t.log()[0];
        assert!(line.starts_with("iter=1 pred_loss="), "{line}");
        assert!(!line.contains("distill"));
        assert_eq!(t.iteration(), 3);
        assert!(t.log().iter().any(|l| l.contains("val_mse=")));
    }

    #[test]
    fn identical_runs_are_bitwise_identical() {
        let data = tiny_data(1, 6, 1);
        let src = [pretrained(&data, 7)];
        let run = || {
            let mut t = Trainer::new(cfg(Mode::Transfer, 4), network_for(&arch(), &data), &data, &src).unwrap();
            t.run().unwrap();
            (t.log().to_vec(), t.checkpoint().to_bytes().unwrap())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn resume_reproduces_the_loss_curve() {
        let data = tiny_data(2, 6, 2);
        let src = [pretrained(&data, 8), pretrained(&data, 9)];
        let mut full = Trainer::new(cfg(Mode::Transfer, 12), network_for(&arch(), &data), &data, &src).unwrap();
        full.run().unwrap();

        let mut first = Trainer::new(cfg(Mode::Transfer, 12), network_for(&arch(), &data), &data, &src).unwrap();
        first.run_until(7).unwrap();
        let bytes = first.checkpoint().to_bytes().unwrap();
        let ckpt = Checkpoint::read(&mut bytes.as_slice()).unwrap();
        let mut second = Trainer::resume(&ckpt, &data, &src).unwrap();
        second.run().unwrap();

        let stitched: Vec<String> = first.log().iter().chain(second.log()).cloned().collect();
        assert_eq!(stitched, full.log());
        assert_eq!(second.checkpoint(), full.checkpoint());
    }

    #[test]
    fn finetune_starts_from_source_weights() {
        let data = tiny_data(1, 6, 1);
        let src = [pretrained(&data, 4)];
        let t = Trainer::new(cfg(Mode::Finetune, 2), network_for(&arch(), &data), &data, &src).unwrap();
        assert_eq!(t.model().config.num_sources, 0);
        assert_eq!(t.model().named_tensors(), src[0].named_tensors());
    }

    #[test]
    fn mode_source_counts_are_enforced() {
        let data = tiny_data(1, 6, 1);
        let src = [pretrained(&data, 4), pretrained(&data, 5)];
        let net = network_for(&arch(), &data);
        assert!(Trainer::new(cfg(Mode::Transfer, 2), net.clone(), &data, &[]).is_err());
        assert!(Trainer::new(cfg(Mode::Finetune, 2), net.clone(), &data, &src).is_err());
        assert!(Trainer::new(cfg(Mode::Scratch, 2), net.clone(), &data, &src[..1]).is_err());
        let mut bad = cfg(Mode::Scratch, 2);
        bad.beta = -1.0;
        assert!(matches!(Trainer::new(bad, net, &data, &[]), Err(Error::Config(_))));
    }

    #[test]
    fn geometry_mismatch_is_reported() {
        let data = tiny_data(1, 6, 1);
        let mut net = network_for(&arch(), &data);
        net.frame_height = 32;
        net.frame_width = 32;
        assert!(matches!(Trainer::new(cfg(Mode::Scratch, 2), net, &data, &[]), Err(Error::Config(_))));
    }

    #[test]
    fn zero_beta_leaves_distillers_trained_only_through_gates() {
        let data = tiny_data(1, 6, 1);
        let src = [pretrained(&data, 4)];
        let mut c = cfg(Mode::Transfer, 1);
        c.beta = 0.0;
        let t = Trainer::new(c, network_for(&arch(), &data), &data, &src).unwrap();
        let model = t.model();
        let batch = data.batch(Split::Train, &[0, 1]).unwrap();
        let bank = run_source_models(&batch.frames, &src, Feedback::ClosedLoop).unwrap();
        let grads_for = |beta: f64, through_memory: bool| {
            let mut m = model.clone();
            if !through_memory {
                // Closing every transfer gate cuts the fusion path.
                let b = m.store.id("layer0.gate0.b").unwrap();
                m.store.get_mut(b).data_mut().iter_mut().for_each(|v| *v = -1e3);
            }
            let mut tape = Tape::new();
            let out = m.forward(&mut tape, &batch.frames, Some(&bank), Feedback::ClosedLoop).unwrap();
            let (loss, _) = objective(&mut tape, &out, &batch.frames, beta).unwrap();
            let g = tape.backward(loss).unwrap();
            g[&m.store.id("layer0.distill0.w").unwrap()].max_abs()
        };
        assert!(grads_for(0.0, true) > 0.0);
        // With the gate shut and beta = 0 no path reaches the distiller.
        assert_eq!(grads_for(0.0, false), 0.0);
        assert!(grads_for(0.1, false) > 0.0);
    }

    #[test]
    fn evaluation_is_repeatable_and_populated() {
        let data = tiny_data(1, 6, 1);
        let src = pretrained(&data, 4);
        let a = evaluate(&src, &data.test, 2, Some(0.5)).unwrap();
        let b = evaluate(&src, &data.test, 3, Some(0.5)).unwrap();
        assert_eq!(a.report.mse_per_frame.len(), 3);
        assert!(a.report.mse.is_finite() && a.report.ssim.is_some());
        assert!((a.report.mse - b.report.mse).abs() < 1e-9 * a.report.mse.max(1.0));
        assert_eq!(a.report, evaluate(&src, &data.test, 2, Some(0.5)).unwrap().report);
    }

    #[test]
    fn checkpoint_restores_best_model() {
        let data = tiny_data(1, 6, 1);
        let mut t = Trainer::new(cfg(Mode::Scratch, 10), network_for(&arch(), &data), &data, &[]).unwrap();
        t.run().unwrap();
        let ckpt = t.checkpoint();
        assert_eq!(model_from_checkpoint(&ckpt).unwrap(), t.best_model().unwrap());
        let plain = model_checkpoint(&t.best_model().unwrap());
        assert_eq!(model_from_checkpoint(&plain).unwrap(), t.best_model().unwrap());
    }

    #[test]
    fn train_config_roundtrip() {
        let mut c = cfg(Mode::Transfer, 9);
        c.val_limit = Some(4);
        c.bank_feedback = Feedback::TeacherForced;
        assert_eq!(TrainConfig::from_kv(&c.to_kv()).unwrap(), c);
    }
}
