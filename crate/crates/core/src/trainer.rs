//! Joint training of the degradation model and the SR restorer.
//!
//! Each step synthesizes LR images from HR crops with sampled kernels and
//! noise, updates the LR discriminator, updates the degradation generators
//! adversarially, and finally fits the SR model on the detached synthetic
//! pairs. The SR update runs in its own graph, so its loss never reaches the
//! degradation model.

use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::sync::Arc;

use pdm_autograd::{Adam, AdamConfig, Graph, Tensor, Var};
use serde::Serialize;

use crate::adversarial::{lsgan_term, total_degradation_loss, Discriminator, DiscriminatorConfig, LossLog, LossReport};
use crate::config::Config;
use crate::data::{Batch, UnpairedDataset};
use crate::degrade::{blur_decimate, ScaleFactor};
use crate::error::{PdmError, Result};
use crate::kernel_gen::{draw_latent_batch, KernelGenConfig, KernelNet};
use crate::noise_gen::{noise_energy_var, NoiseGenConfig, NoiseNet};
use crate::rng::{substream, Consumer};
use crate::sr::{sr_pixel_loss_var, SrConfig, SrNet};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub total_steps: u64,
    pub lr: f64,
    pub lr_halving_interval: u64,
    pub lr_floor: f64,
    pub batch: usize,
    pub lambda: f64,
    pub seed: u64,
    pub adam: AdamConfig,
    pub scale: usize,
    pub sr_enabled: bool,
    pub sr_adversarial: bool,
    pub sr_adv_weight: f64,
    pub checkpoint_interval: u64,
    pub log_interval: u64,
    pub kernel: KernelGenConfig,
    pub noise: NoiseGenConfig,
    pub disc: DiscriminatorConfig,
    pub sr: SrConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::from_config(&Config::default())
    }
}

impl TrainConfig {
    pub fn from_config(c: &Config) -> Self {
        Self {
            total_steps: c.total_steps,
            lr: c.lr,
            lr_halving_interval: c.lr_halving_interval,
            lr_floor: c.lr_floor,
            batch: c.batch,
            lambda: c.lambda,
            seed: c.seed,
            adam: AdamConfig {
                beta1: c.adam_beta1,
                beta2: c.adam_beta2,
                eps: c.adam_eps,
            },
            scale: c.scale,
            sr_enabled: c.sr_enabled,
            sr_adversarial: c.sr_adversarial,
            sr_adv_weight: c.sr_adv_weight,
            checkpoint_interval: c.checkpoint_interval,
            log_interval: c.log_interval,
            kernel: KernelGenConfig {
                latent_channels: c.kernel_fk,
                kernel_size: c.kernel_size,
                spatial_mode: c.kernel_spatial,
                conditioning: c.kernel_conditioning,
                receptive: c.kernel_receptive,
                latent_source: c.kernel_latent,
                hidden_width: c.kernel_width,
                image_channels: 3,
                init_sigma: c.kernel_init_sigma,
            },
            noise: NoiseGenConfig {
                latent_channels: c.noise_fn,
                conditioning: c.noise_conditioning,
                mixing: c.noise_mixing,
                enabled: c.noise_enabled,
                latent_source: c.noise_latent,
                hidden_width: c.noise_width,
                image_channels: 3,
            },
            disc: DiscriminatorConfig {
                input_channels: 3,
                base_width: c.disc_base_width,
                num_stages: c.disc_num_stages,
                normalization: c.disc_norm,
            },
            sr: SrConfig {
                arch: c.sr_arch,
                scale: c.scale,
                num_blocks: c.sr_num_blocks,
                width: c.sr_width,
                bicubic_skip: c.sr_bicubic_skip,
                channels: 3,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(PdmError::Config("total_steps must be >= 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(PdmError::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.lambda >= 0.0) {
            return Err(PdmError::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.batch == 0 {
            return Err(PdmError::Config("batch must be >= 1".into()));
        }
        if self.lr_halving_interval == 0 {
            return Err(PdmError::Config("lr_halving_interval must be >= 1".into()));
        }
        if self.sr.scale != self.scale {
            return Err(PdmError::Config(format!(
                "SR scale {} differs from degradation scale {}",
                self.sr.scale, self.scale
            )));
        }
        ScaleFactor::new(self.scale)?;
        self.kernel.validate()?;
        self.noise.validate()?;
        self.disc.validate()?;
        self.sr.validate()
    }
}

/// `base · 0.5^⌊step / interval⌋`, clamped below at `min(base, floor)`, so a
/// zero base stays zero.
pub fn lr_schedule(step: u64, base_lr: f64, interval: u64, floor: f64) -> f64 {
    let halvings = (step / interval.max(1)).min(i32::MAX as u64) as i32;
    (base_lr * 0.5f64.powi(halvings)).max(base_lr.min(floor))
}

/// Outputs of one synthesis pass.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthesizedPair {
    pub x_ref: Tensor,
    pub y_ref: Tensor,
    pub y_clean_ref: Tensor,
    /// Kernel field `(N, k², h, w)`.
    pub k: Tensor,
    pub n: Tensor,
}

struct SynthVars {
    y: Var,
    y_clean: Var,
    k: Var,
    n: Var,
}

/// Parameters, optimizer moments and step counter of a joint run.
#[derive(Clone, Debug, PartialEq)]
pub struct PdmState {
    pub cfg: TrainConfig,
    pub kernel_net: KernelNet,
    pub noise_net: NoiseNet,
    pub disc: Discriminator,
    pub sr_net: Option<SrNet>,
    pub hr_disc: Option<Discriminator>,
    pub opt_kernel: Adam,
    pub opt_noise: Adam,
    pub opt_disc: Adam,
    pub opt_sr: Option<Adam>,
    pub opt_hr_disc: Option<Adam>,
    /// Completed steps.
    pub step: u64,
}

impl PdmState {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        let seed = cfg.seed;
        let kernel_net = KernelNet::new(cfg.kernel.clone(), &mut substream(seed, 0, Consumer::InitKernelNet))?;
        let noise_net = NoiseNet::new(cfg.noise.clone(), &mut substream(seed, 0, Consumer::InitNoiseNet))?;
        let disc = Discriminator::new(cfg.disc.clone(), &mut substream(seed, 0, Consumer::InitDiscriminator))?;
        let sr_net = if cfg.sr_enabled {
            Some(SrNet::new(cfg.sr.clone(), &mut substream(seed, 0, Consumer::InitSrNet))?)
        } else {
            None
        };
        let hr_disc = if cfg.sr_enabled && cfg.sr_adversarial {
            Some(Discriminator::new(
                cfg.disc.clone(),
                &mut substream(seed, 0, Consumer::InitHrDiscriminator),
            )?)
        } else {
            None
        };
        let a = cfg.adam;
        Ok(Self {
            opt_kernel: Adam::new(kernel_net.params(), a),
            opt_noise: Adam::new(noise_net.params(), a),
            opt_disc: Adam::new(disc.params(), a),
            opt_sr: sr_net.as_ref().map(|n| Adam::new(n.params(), a)),
            opt_hr_disc: hr_disc.as_ref().map(|d| Adam::new(d.params(), a)),
            kernel_net,
            noise_net,
            disc,
            sr_net,
            hr_disc,
            step: 0,
            cfg,
        })
    }

    fn scale(&self) -> Result<ScaleFactor> {
        ScaleFactor::new(self.cfg.scale)
    }

    /// Builds `y = decimate(x ⊗ k, s) + n` in `g` with the generators bound
    /// through `pk` / `pn`. Latents come from the `step` substreams.
    fn synthesize_vars(
        &self,
        g: &mut Graph,
        pk: &pdm_autograd::BoundParams,
        pn: &pdm_autograd::BoundParams,
        x: Var,
        step: u64,
    ) -> Result<SynthVars> {
        let (n, _, h, w) = g.value(x).dims4();
        let seed = self.cfg.seed;
        let kc = &self.cfg.kernel;
        let zk = if kc.conditioning.uses_latent() {
            let shape = kc.latent_shape(h, w);
            let mut rng = substream(seed, step, Consumer::KernelLatent);
            Some(g.constant(draw_latent_batch(n, shape, kc.latent_source, &mut rng)?))
        } else {
            None
        };
        let image = kc.conditioning.uses_image().then_some(x);
        let k = self.kernel_net.forward(g, pk, zk, image)?;
        let y_clean = blur_decimate(g, x, k, kc.kernel_size, self.scale()?)?;
        let (_, _, lh, lw) = g.value(y_clean).dims4();
        let nc = &self.cfg.noise;
        let zn = if nc.enabled && nc.conditioning.uses_latent() {
            let mut rng = substream(seed, step, Consumer::NoiseLatent);
            Some(g.constant(draw_latent_batch(
                n,
                (nc.latent_channels, lh, lw),
                nc.latent_source,
                &mut rng,
            )?))
        } else {
            None
        };
        let clean_in = (!nc.enabled || nc.conditioning.uses_image() || zn.is_none()).then_some(y_clean);
        let noise = self.noise_net.forward(g, pn, zn, clean_in)?;
        let y = g.add(y_clean, noise);
        Ok(SynthVars { y, y_clean, k, n: noise })
    }

    /// Synthesizes LR counterparts of an HR batch with the current
    /// generators, using the latent streams of `step`.
    pub fn synthesize_pair(&self, x_ref: &Tensor, step: u64) -> Result<SynthesizedPair> {
        let mut g = Graph::new();
        let pk = self.kernel_net.params().bind_frozen(&mut g);
        let pn = self.noise_net.params().bind_frozen(&mut g);
        let x = g.constant(x_ref.clone());
        let v = self.synthesize_vars(&mut g, &pk, &pn, x, step)?;
        Ok(SynthesizedPair {
            x_ref: x_ref.clone(),
            y_ref: g.value(v.y).clone(),
            y_clean_ref: g.value(v.y_clean).clone(),
            k: g.value(v.k).clone(),
            n: g.value(v.n).clone(),
        })
    }

    /// One joint update on an HR batch and an unpaired LR batch.
    pub fn train_step(&mut self, hr: &Tensor, lr_batch: &Tensor) -> Result<LossReport> {
        let step = self.step;
        let lr = lr_schedule(step, self.cfg.lr, self.cfg.lr_halving_interval, self.cfg.lr_floor);

        // Synthesis graph; reused for the generator update after the
        // discriminator has moved.
        let mut g = Graph::new();
        let pk = self.kernel_net.params().bind(&mut g);
        let pn = self.noise_net.params().bind(&mut g);
        let x = g.constant(hr.clone());
        let sv = self.synthesize_vars(&mut g, &pk, &pn, x, step)?;
        let y_val = g.value(sv.y).clone();
        if g.value(sv.y).shape() != lr_batch.shape() {
            return Err(PdmError::Shape(format!(
                "synthetic LR batch {:?} does not match real LR batch {:?}",
                g.value(sv.y).shape(),
                lr_batch.shape()
            )));
        }

        // (a) discriminator: real LR against detached synthetic LR.
        let l_adv_d = {
            let mut gd = Graph::new();
            let pd = self.disc.params().bind(&mut gd);
            let real = gd.constant(lr_batch.clone());
            let fake = gd.constant(y_val.clone());
            let sr = self.disc.forward(&mut gd, &pd, real);
            let sf = self.disc.forward(&mut gd, &pd, fake);
            let lr_term = lsgan_term(&mut gd, sr, 1.0);
            let lf_term = lsgan_term(&mut gd, sf, 0.0);
            let loss = gd.add(lr_term, lf_term);
            let value = gd.value(loss).data()[0];
            check_finite("l_adv_d", value, hr, lr_batch, &y_val)?;
            let mut grads = gd.backward(loss);
            let grads = pd.grads(&gd, &mut grads);
            self.opt_disc.update(self.disc.params_mut(), &grads, lr);
            value
        };

        // (b) degradation generators against the updated, frozen discriminator.
        let (l_adv_g, l_reg) = {
            let pd = self.disc.params().bind_frozen(&mut g);
            let scores = self.disc.forward(&mut g, &pd, sv.y);
            let adv = lsgan_term(&mut g, scores, 1.0);
            let reg = noise_energy_var(&mut g, sv.n);
            let weighted = g.scale(reg, self.cfg.lambda);
            let total = g.add(adv, weighted);
            let adv_v = g.value(adv).data()[0];
            let reg_v = g.value(reg).data()[0];
            check_finite("l_total", g.value(total).data()[0], hr, lr_batch, &y_val)?;
            let mut grads = g.backward(total);
            let gk = pk.grads(&g, &mut grads);
            let gn = pn.grads(&g, &mut grads);
            self.opt_kernel.update(self.kernel_net.params_mut(), &gk, lr);
            if self.cfg.noise.enabled {
                self.opt_noise.update(self.noise_net.params_mut(), &gn, lr);
            }
            (adv_v, reg_v)
        };

        // (c) SR on the detached synthetic pair.
        let sr_pixel_loss = match self.sr_net.as_mut() {
            None => None,
            Some(sr_net) => {
                let mut gs = Graph::new();
                let ps = sr_net.params().bind(&mut gs);
                let y_in = gs.constant(y_val.clone());
                let pred = sr_net.forward(&mut gs, &ps, y_in)?;
                let target = gs.constant(hr.clone());
                let pixel = sr_pixel_loss_var(&mut gs, pred, target);
                let pixel_v = gs.value(pixel).data()[0];
                let mut loss = pixel;
                if let (Some(hd), Some(opt_hd)) = (self.hr_disc.as_mut(), self.opt_hr_disc.as_mut()) {
                    let pred_val = gs.value(pred).clone();
                    let mut gh = Graph::new();
                    let ph = hd.params().bind(&mut gh);
                    let real = gh.constant(hr.clone());
                    let fake = gh.constant(pred_val);
                    let sr_ = hd.forward(&mut gh, &ph, real);
                    let sf = hd.forward(&mut gh, &ph, fake);
                    let a = lsgan_term(&mut gh, sr_, 1.0);
                    let b = lsgan_term(&mut gh, sf, 0.0);
                    let ld = gh.add(a, b);
                    let mut grads = gh.backward(ld);
                    let grads = ph.grads(&gh, &mut grads);
                    opt_hd.update(hd.params_mut(), &grads, lr);

                    let phf = hd.params().bind_frozen(&mut gs);
                    let scores = hd.forward(&mut gs, &phf, pred);
                    let adv = lsgan_term(&mut gs, scores, 1.0);
                    let adv = gs.scale(adv, self.cfg.sr_adv_weight);
                    loss = gs.add(pixel, adv);
                }
                check_finite("sr_pixel_loss", gs.value(loss).data()[0], hr, lr_batch, &y_val)?;
                let mut grads = gs.backward(loss);
                let grads = ps.grads(&gs, &mut grads);
                self.opt_sr
                    .as_mut()
                    .expect("optimizer exists with SR model")
                    .update(sr_net.params_mut(), &grads, lr);
                Some(pixel_v)
            }
        };

        self.step += 1;
        let report = LossReport {
            step: self.step,
            l_adv_g,
            l_adv_d,
            l_reg,
            l_total: total_degradation_loss(l_adv_g, l_reg, self.cfg.lambda),
            sr_pixel_loss,
        };
        if !report.is_finite() {
            return Err(non_finite("loss report", hr, lr_batch, &y_val));
        }
        Ok(report)
    }
}

fn stats(t: &Tensor) -> String {
    let d = t.data();
    let finite = d.iter().filter(|v| v.is_finite()).count();
    let min = d.iter().copied().fold(f64::INFINITY, f64::min);
    let max = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    format!(
        "shape {:?} min {min:.4} max {max:.4} mean {:.4} finite {finite}/{}",
        t.shape(),
        t.mean(),
        d.len()
    )
}

fn non_finite(what: &str, hr: &Tensor, lr: &Tensor, y: &Tensor) -> PdmError {
    PdmError::NonFinite(format!(
        "{what} is not finite; HR batch: {}; LR batch: {}; synthetic LR: {}",
        stats(hr),
        stats(lr),
        stats(y)
    ))
}

fn check_finite(what: &str, v: f64, hr: &Tensor, lr: &Tensor, y: &Tensor) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(non_finite(&format!("{what} ({v})"), hr, lr, y))
    }
}

/// Paths written by a run.
#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub last: Option<LossReport>,
    pub loss_log: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub config_snapshot: PathBuf,
}

pub const LOSS_LOG_NAME: &str = "losses.csv";
pub const CONFIG_SNAPSHOT_NAME: &str = "config.resolved.txt";

pub fn checkpoint_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join("checkpoints").join(format!("step_{step:08}.ckpt"))
}

/// Runs `state` until `config.total_steps`, logging every step to
/// `losses.csv` and checkpointing every `checkpoint_interval` steps and at
/// the end.
pub fn train(config: &Config, mut state: PdmState, dataset: Arc<UnpairedDataset>, out_dir: &Path) -> Result<(PdmState, TrainSummary)> {
    state.cfg.validate()?;
    if dataset.config().scale != state.cfg.scale {
        return Err(PdmError::Config(format!(
            "dataset scale {} differs from training scale {}",
            dataset.config().scale,
            state.cfg.scale
        )));
    }
    std::fs::create_dir_all(out_dir.join("checkpoints")).map_err(|e| PdmError::io(out_dir, e))?;
    let snapshot = out_dir.join(CONFIG_SNAPSHOT_NAME);
    config.write_snapshot(&snapshot)?;
    let log_path = out_dir.join(LOSS_LOG_NAME);
    let mut log = LossLog::open(&log_path)?;
    let total = state.cfg.total_steps;
    let (batch, seed) = (state.cfg.batch, state.cfg.seed);
    let mut checkpoints = Vec::new();
    let mut last = None;

    let batches: Box<dyn Iterator<Item = Result<Batch>>> = if config.prefetch {
        // Batches depend only on (seed, step), so prefetching keeps runs
        // reproducible.
        let (tx, rx) = mpsc::sync_channel(2);
        let ds = dataset.clone();
        let start = state.step;
        std::thread::spawn(move || {
            for step in start..total {
                if tx.send(ds.sample_batch(batch, seed, step)).is_err() {
                    break;
                }
            }
        });
        Box::new(rx.into_iter())
    } else {
        let ds = dataset.clone();
        Box::new((state.step..total).map(move |step| ds.sample_batch(batch, seed, step)))
    };

    for b in batches {
        let b = b?;
        let report = state.train_step(&b.hr, &b.lr)?;
        log.append(&report)?;
        if state.cfg.log_interval > 0 && (report.step % state.cfg.log_interval == 0 || report.step == total) {
            log::info!(
                "step {}/{}: l_adv_g {:.4} l_adv_d {:.4} l_reg {:.3e} sr {:?}",
                report.step,
                total,
                report.l_adv_g,
                report.l_adv_d,
                report.l_reg,
                report.sr_pixel_loss
            );
            log.flush()?;
        }
        let at_interval = state.cfg.checkpoint_interval > 0 && report.step % state.cfg.checkpoint_interval == 0;
        if at_interval || report.step == total {
            let path = checkpoint_path(out_dir, report.step);
            crate::checkpoint::save_checkpoint(&path, config, &state)?;
            checkpoints.push(path);
        }
        last = Some(report);
    }
    log.flush()?;
    Ok((
        state,
        TrainSummary {
            steps: total,
            last,
            loss_log: log_path,
            checkpoints,
            config_snapshot: snapshot,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        assert_eq!(lr_schedule(0, 2e-4, 5000, 1e-7), 2e-4);
        assert_eq!(lr_schedule(4999, 2e-4, 5000, 1e-7), 2e-4);
        assert_eq!(lr_schedule(5000, 2e-4, 5000, 1e-7), 1e-4);
        assert_eq!(lr_schedule(200_000, 2e-4, 5000, 1e-7), 1e-7);
        assert_eq!(lr_schedule(10, 0.0, 5000, 1e-7), 0.0);
    }

    #[test]
    fn validation() {
        let mut c = TrainConfig::default();
        c.validate().unwrap();
        c.lr = 0.0;
        assert!(c.validate().is_err());
        c.lr = 1e-4;
        c.total_steps = 0;
        assert!(c.validate().is_err());
    }
}
