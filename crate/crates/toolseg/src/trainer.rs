//! Adversarial training loop for the image/annotation translation pair.
//!
//! One step updates both generators from the adversarial, cycle and edge
//! terms, then both discriminators against a replay buffer of past generator
//! outputs. Everything that evolves during training (network parameters,
//! optimizer moments, replay buffers, rng streams) round-trips through the
//! checkpoint container so an interrupted run resumes bit-for-bit.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container;
use crate::losses::{
    cycle_consistency_loss, discriminator_loss, edge_consistency_loss,
    generator_adversarial_loss, scalar, LossTerms, LossWeights,
};
use crate::networks::{DiscriminatorSpec, GeneratorSpec, NetworkHandle, Role};
use crate::optim::{Adam, AdamParams};
use crate::synthdata::{DatasetManifest, UnpairedSampler};
use crate::{Error, Result};

pub const LOG_HEADER: &str = "epoch,step,adv_GA,adv_GI,d_A,d_I,cyc,edge,lr";
pub const LOG_FILE: &str = "train_log.csv";
pub const LATEST_CKPT: &str = "latest";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    pub base_lr: f64,
    /// epochs at the full rate before the linear decay starts
    pub n_fixed_epochs: usize,
    /// epochs over which the rate decays linearly (never reaching zero)
    pub n_decay_epochs: usize,
    pub buffer_capacity: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub gen_base_width: usize,
    pub gen_res_blocks: usize,
    pub disc_base_width: usize,
    pub disc_layers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 2e-4,
            n_fixed_epochs: 20,
            n_decay_epochs: 20,
            buffer_capacity: 50,
            seed: 0,
            weights: LossWeights::default(),
            gen_base_width: 64,
            gen_res_blocks: 9,
            disc_base_width: 64,
            disc_layers: 3,
        }
    }
}

impl TrainConfig {
    pub fn total_epochs(&self) -> usize {
        self.n_fixed_epochs + self.n_decay_epochs
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(Error::InvalidConfig("base_lr must be positive".into()));
        }
        if self.total_epochs() == 0 {
            return Err(Error::InvalidConfig("zero epochs".into()));
        }
        if self.buffer_capacity == 0 {
            return Err(Error::InvalidConfig("buffer capacity must be positive".into()));
        }
        for (name, v) in [
            ("gen_base_width", self.gen_base_width),
            ("gen_res_blocks", self.gen_res_blocks),
            ("disc_base_width", self.disc_base_width),
            ("disc_layers", self.disc_layers),
        ] {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    fn gen_spec(&self, role: Role) -> GeneratorSpec {
        let (cin, cout) = match role {
            Role::GenA => (3, 1),
            _ => (1, 3),
        };
        GeneratorSpec {
            in_channels: cin,
            out_channels: cout,
            base_width: self.gen_base_width,
            n_residual_blocks: self.gen_res_blocks,
        }
    }

    fn disc_spec(&self, role: Role) -> DiscriminatorSpec {
        DiscriminatorSpec {
            in_channels: if role == Role::DiscA { 1 } else { 3 },
            base_width: self.disc_base_width,
            n_layers: self.disc_layers,
        }
    }
}

/// Learning rate for a zero-based epoch index: constant for the first
/// `n_fixed_epochs`, then linear decay ending one decay step above zero.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> Result<f64> {
    if epoch >= cfg.total_epochs() {
        return Err(Error::EpochOutOfRange {
            epoch,
            total: cfg.total_epochs(),
        });
    }
    if epoch < cfg.n_fixed_epochs {
        return Ok(cfg.base_lr);
    }
    let done = (epoch - cfg.n_fixed_epochs + 1) as f64;
    Ok(cfg.base_lr * (1.0 - done / (cfg.n_decay_epochs + 1) as f64))
}

/// Pool of past generator outputs. Until full, every output is stored and
/// also returned to the caller. Once full, half the queries return the fresh
/// output and half return a stored one, with the fresh output taking the
/// evicted slot.
struct ReplayBuffer {
    capacity: usize,
    items: Vec<Tensor>,
}

impl ReplayBuffer {
    fn new(capacity: usize) -> Self {
        Self {
            capacity,
            items: Vec::with_capacity(capacity),
        }
    }

    fn query(&mut self, fresh: Tensor, rng: &mut ChaCha8Rng) -> Tensor {
        if self.items.len() < self.capacity {
            self.items.push(fresh.clone());
            return fresh;
        }
        if rng.random_bool(0.5) {
            fresh
        } else {
            let slot = rng.random_range(0..self.items.len());
            std::mem::replace(&mut self.items[slot], fresh)
        }
    }
}

pub struct TrainState {
    pub cfg: TrainConfig,
    pub g_a: NetworkHandle,
    pub g_i: NetworkHandle,
    pub d_a: NetworkHandle,
    pub d_i: NetworkHandle,
    /// completed epochs
    pub epoch: usize,
    opt_g: Adam,
    opt_d: Adam,
    gen_vars: Vec<(String, candle_core::Var)>,
    disc_vars: Vec<(String, candle_core::Var)>,
    buf_a: ReplayBuffer,
    buf_i: ReplayBuffer,
    rng: ChaCha8Rng,
    sampler_rng: Option<ChaCha8Rng>,
}

fn prefixed_vars(nets: &[(&str, &NetworkHandle)]) -> Vec<(String, candle_core::Var)> {
    nets.iter()
        .flat_map(|(p, n)| {
            n.vars()
                .iter()
                .map(move |(name, v)| (format!("{p}{name}"), v.clone()))
        })
        .collect()
}

impl TrainState {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut seeder = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut next = || seeder.random::<u64>();
        let g_a = NetworkHandle::build_generator(Role::GenA, cfg.gen_spec(Role::GenA), next())?;
        let g_i = NetworkHandle::build_generator(Role::GenI, cfg.gen_spec(Role::GenI), next())?;
        let d_a =
            NetworkHandle::build_discriminator(Role::DiscA, cfg.disc_spec(Role::DiscA), next())?;
        let d_i =
            NetworkHandle::build_discriminator(Role::DiscI, cfg.disc_spec(Role::DiscI), next())?;
        let rng = ChaCha8Rng::seed_from_u64(next());
        let gen_vars = prefixed_vars(&[("g_a.", &g_a), ("g_i.", &g_i)]);
        let disc_vars = prefixed_vars(&[("d_a.", &d_a), ("d_i.", &d_i)]);
        let opt_g = Adam::new(AdamParams::default(), &gen_vars)?;
        let opt_d = Adam::new(AdamParams::default(), &disc_vars)?;
        let buffer_capacity = cfg.buffer_capacity;
        Ok(Self {
            cfg,
            g_a,
            g_i,
            d_a,
            d_i,
            epoch: 0,
            opt_g,
            opt_d,
            gen_vars,
            disc_vars,
            buf_a: ReplayBuffer::new(buffer_capacity),
            buf_i: ReplayBuffer::new(buffer_capacity),
            rng,
            sampler_rng: None,
        })
    }

    /// The seed the unpaired sampler must be created with; drawn from the
    /// same seeder stream as the network seeds.
    pub fn sampler_seed(cfg: &TrainConfig) -> u64 {
        let mut seeder = ChaCha8Rng::seed_from_u64(cfg.seed);
        for _ in 0..5 {
            seeder.random::<u64>();
        }
        seeder.random()
    }

    /// One optimization step on an unpaired (image, annotation) draw.
    pub fn train_step(
        &mut self,
        image: &Tensor,
        annotation: &Tensor,
        lr: f64,
        step: usize,
    ) -> Result<LossTerms> {
        let mode = self.cfg.weights.adv_mode;

        let fake_ann = self.g_a.forward(image)?;
        let fake_img = self.g_i.forward(annotation)?;
        let rec_img = self.g_i.forward(&fake_ann)?;
        let rec_ann = self.g_a.forward(&fake_img)?;

        let adv_a = generator_adversarial_loss(&self.d_a.forward(&fake_ann)?, mode)?;
        let adv_i = generator_adversarial_loss(&self.d_i.forward(&fake_img)?, mode)?;
        let cyc = (cycle_consistency_loss(image, &rec_img)?
            + cycle_consistency_loss(annotation, &rec_ann)?)?;
        // with μ = 0 the edge term is out of the objective entirely and its
        // logged value is zero
        let edge = if self.cfg.weights.mu_edge == 0.0 {
            None
        } else {
            Some(edge_consistency_loss(&fake_ann, image)?)
        };

        let mut gen_loss = ((&adv_a + &adv_i)? + (&cyc * self.cfg.weights.lambda_cycle)?)?;
        if let Some(edge) = &edge {
            gen_loss = (gen_loss + (edge * self.cfg.weights.mu_edge)?)?;
        }
        let grads = gen_loss.backward()?;
        self.opt_g.step(lr, &self.gen_vars, &grads)?;

        let pool_ann = self.buf_a.query(fake_ann.detach(), &mut self.rng);
        let pool_img = self.buf_i.query(fake_img.detach(), &mut self.rng);
        let d_a_loss = discriminator_loss(
            &self.d_a.forward(annotation)?,
            &self.d_a.forward(&pool_ann)?,
            mode,
        )?;
        let d_i_loss =
            discriminator_loss(&self.d_i.forward(image)?, &self.d_i.forward(&pool_img)?, mode)?;
        let disc_loss = (&d_a_loss + &d_i_loss)?;
        let grads = disc_loss.backward()?;
        self.opt_d.step(lr, &self.disc_vars, &grads)?;

        let terms = LossTerms {
            adv_g_a: scalar(&adv_a)?,
            adv_g_i: scalar(&adv_i)?,
            disc_a: scalar(&d_a_loss)?,
            disc_i: scalar(&d_i_loss)?,
            cycle: scalar(&cyc)?,
            edge: edge.as_ref().map(scalar).transpose()?.unwrap_or(0.0),
        };
        for (term, value) in [
            ("adv_GA", terms.adv_g_a),
            ("adv_GI", terms.adv_g_i),
            ("d_A", terms.disc_a),
            ("d_I", terms.disc_i),
            ("cyc", terms.cycle),
            ("edge", terms.edge),
        ] {
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    term,
                    epoch: self.epoch,
                    step,
                });
            }
        }
        Ok(terms)
    }

    /// The sampler rng stored alongside this state, when it was loaded from
    /// a checkpoint.
    pub fn stored_sampler_rng(&self) -> Option<&ChaCha8Rng> {
        self.sampler_rng.as_ref()
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>, sampler_rng: &ChaCha8Rng) -> Result<()> {
        let mut tensors = Vec::new();
        tensors.extend(self.g_a.named_tensors("g_a."));
        tensors.extend(self.g_i.named_tensors("g_i."));
        tensors.extend(self.d_a.named_tensors("d_a."));
        tensors.extend(self.d_i.named_tensors("d_i."));
        tensors.extend(self.opt_g.named_tensors("opt_g."));
        tensors.extend(self.opt_d.named_tensors("opt_d."));
        for (prefix, buf) in [("buf_a.", &self.buf_a), ("buf_i.", &self.buf_i)] {
            for (i, t) in buf.items.iter().enumerate() {
                tensors.push((format!("{prefix}{i:03}"), t.clone()));
            }
        }
        let meta = serde_json::json!({
            "config": self.cfg,
            "epoch": self.epoch,
            "opt_g_step": self.opt_g.step_count(),
            "opt_d_step": self.opt_d.step_count(),
            "rng": self.rng,
            "sampler_rng": sampler_rng,
            "buf_a_len": self.buf_a.items.len(),
            "buf_i_len": self.buf_i.items.len(),
        });
        container::save(path, "train", meta, &tensors)
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        let c = container::load(path)?;
        if c.kind != "train" {
            return Err(Error::CorruptCheckpoint(format!(
                "expected a training checkpoint, found kind `{}`",
                c.kind
            )));
        }
        let meta = &c.meta;
        let cfg: TrainConfig = serde_json::from_value(meta["config"].clone())?;
        cfg.validate()?;
        let epoch: usize = serde_json::from_value(meta["epoch"].clone())?;
        let rng: ChaCha8Rng = serde_json::from_value(meta["rng"].clone())?;
        let sampler_rng: ChaCha8Rng = serde_json::from_value(meta["sampler_rng"].clone())?;

        let g_a = NetworkHandle::from_prefixed(
            Role::GenA,
            cfg.gen_spec(Role::GenA).into(),
            &c.tensors,
            "g_a.",
        )?;
        let g_i = NetworkHandle::from_prefixed(
            Role::GenI,
            cfg.gen_spec(Role::GenI).into(),
            &c.tensors,
            "g_i.",
        )?;
        let d_a = NetworkHandle::from_prefixed(
            Role::DiscA,
            cfg.disc_spec(Role::DiscA).into(),
            &c.tensors,
            "d_a.",
        )?;
        let d_i = NetworkHandle::from_prefixed(
            Role::DiscI,
            cfg.disc_spec(Role::DiscI).into(),
            &c.tensors,
            "d_i.",
        )?;
        let gen_vars = prefixed_vars(&[("g_a.", &g_a), ("g_i.", &g_i)]);
        let disc_vars = prefixed_vars(&[("d_a.", &d_a), ("d_i.", &d_i)]);
        let opt_g = Adam::from_stored(
            AdamParams::default(),
            serde_json::from_value(meta["opt_g_step"].clone())?,
            &gen_vars,
            &c.tensors,
            "opt_g.",
        )?;
        let opt_d = Adam::from_stored(
            AdamParams::default(),
            serde_json::from_value(meta["opt_d_step"].clone())?,
            &disc_vars,
            &c.tensors,
            "opt_d.",
        )?;
        let load_buf = |prefix: &str, len_key: &str| -> Result<ReplayBuffer> {
            let len: usize = serde_json::from_value(meta[len_key].clone())?;
            let mut buf = ReplayBuffer::new(cfg.buffer_capacity);
            for i in 0..len {
                let key = format!("{prefix}{i:03}");
                let t = c.tensors.get(&key).ok_or_else(|| {
                    Error::CorruptCheckpoint(format!("missing buffer slot `{key}`"))
                })?;
                buf.items.push(t.clone());
            }
            Ok(buf)
        };
        let buf_a = load_buf("buf_a.", "buf_a_len")?;
        let buf_i = load_buf("buf_i.", "buf_i_len")?;
        Ok(Self {
            cfg,
            g_a,
            g_i,
            d_a,
            d_i,
            epoch,
            opt_g,
            opt_d,
            gen_vars,
            disc_vars,
            buf_a,
            buf_i,
            rng,
            sampler_rng: Some(sampler_rng),
        })
    }
}

#[derive(Debug, Clone)]
pub struct EpochStats {
    /// one-based epoch just completed
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    /// loss terms averaged over the epoch
    pub mean: LossTerms,
}

fn checkpoint_name(epoch: usize) -> String {
    format!("ckpt_epoch_{epoch:03}")
}

/// Runs (or resumes) training against a dataset, writing a per-step CSV log
/// and one checkpoint per epoch plus a `latest` copy into `out_dir`.
/// `on_epoch` is called after each completed epoch.
pub fn train(
    cfg: &TrainConfig,
    manifest: &DatasetManifest,
    out_dir: &Path,
    resume: bool,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainState> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let latest: PathBuf = out_dir.join(LATEST_CKPT);

    let mut sampler = UnpairedSampler::new(manifest, TrainState::sampler_seed(cfg))?;
    let mut state = if resume && latest.exists() {
        let state = TrainState::load_checkpoint(&latest)?;
        if state.cfg != *cfg {
            return Err(Error::InvalidConfig(
                "resume config differs from the checkpointed run".into(),
            ));
        }
        let rng = state
            .sampler_rng
            .clone()
            .expect("train checkpoints always carry the sampler rng");
        sampler.restore_at_epoch_boundary(rng);
        state
    } else {
        TrainState::new(cfg.clone())?
    };

    let log_path = out_dir.join(LOG_FILE);
    let mut log = if state.epoch > 0 && log_path.exists() {
        fs::OpenOptions::new()
            .append(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?
    } else {
        let mut f = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
        writeln!(f, "{LOG_HEADER}").map_err(|e| Error::io(&log_path, e))?;
        f
    };

    let steps_per_epoch = sampler.epoch_len();
    while state.epoch < cfg.total_epochs() {
        let lr = lr_at_epoch(cfg, state.epoch)?;
        let mut sum = LossTerms::default();
        for step in 0..steps_per_epoch {
            let (_, _, image, annotation) = sampler.next_pair();
            let image = image.tensor().clone();
            let annotation = annotation.tensor().clone();
            let terms = state.train_step(&image, &annotation, lr, step)?;
            writeln!(
                log,
                "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6e}",
                state.epoch + 1,
                step,
                terms.adv_g_a,
                terms.adv_g_i,
                terms.disc_a,
                terms.disc_i,
                terms.cycle,
                terms.edge,
                lr
            )
            .map_err(|e| Error::io(&log_path, e))?;
            sum.adv_g_a += terms.adv_g_a;
            sum.adv_g_i += terms.adv_g_i;
            sum.disc_a += terms.disc_a;
            sum.disc_i += terms.disc_i;
            sum.cycle += terms.cycle;
            sum.edge += terms.edge;
        }
        state.epoch += 1;

        let ckpt = out_dir.join(checkpoint_name(state.epoch));
        state.save_checkpoint(&ckpt, sampler.rng_state())?;
        state.save_checkpoint(&latest, sampler.rng_state())?;

        let n = steps_per_epoch as f64;
        on_epoch(&EpochStats {
            epoch: state.epoch,
            lr,
            steps: steps_per_epoch,
            mean: LossTerms {
                adv_g_a: sum.adv_g_a / n,
                adv_g_i: sum.adv_g_i / n,
                disc_a: sum.disc_a / n,
                disc_i: sum.disc_i / n,
                cycle: sum.cycle / n,
                edge: sum.edge / n,
            },
        });
    }
    Ok(state)
}
