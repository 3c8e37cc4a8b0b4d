//! Single-file checkpoints: magic, JSON header, raw little-endian `f64` data.
//!
//! The header carries the resolved config text, the step counter and an
//! index of every named array (network parameters and Adam moments). Random
//! state needs no storage: all draws are keyed by `(seed, step, consumer)`.

use std::io::{Read, Write};
use std::path::Path;

use pdm_autograd::{Adam, ParamSet, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{PdmError, Result};
use crate::trainer::{PdmState, TrainConfig};

const MAGIC: &[u8; 8] = b"PDMCKPT1";

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: String,
    step: u64,
    seed: u64,
    optimizer_steps: Vec<(String, u64)>,
    tensors: Vec<Entry>,
}

struct Writer<'a> {
    entries: Vec<Entry>,
    data: Vec<&'a Tensor>,
}

impl<'a> Writer<'a> {
    fn params(&mut self, prefix: &str, p: &'a ParamSet) {
        for (name, t) in p.names().iter().zip(p.values()) {
            self.push(format!("{prefix}/{name}"), t);
        }
    }

    fn adam(&mut self, prefix: &str, p: &ParamSet, a: &'a Adam) {
        for ((name, m), v) in p.names().iter().zip(&a.m).zip(&a.v) {
            self.push(format!("{prefix}.m/{name}"), m);
            self.push(format!("{prefix}.v/{name}"), v);
        }
    }

    fn push(&mut self, name: String, t: &'a Tensor) {
        self.entries.push(Entry {
            name,
            shape: t.shape().to_vec(),
        });
        self.data.push(t);
    }
}

/// Saves the full training state together with the config that built it.
pub fn save_checkpoint(path: &Path, config: &Config, state: &PdmState) -> Result<()> {
    let mut w = Writer {
        entries: Vec::new(),
        data: Vec::new(),
    };
    let mut opt_steps = Vec::new();
    let nets: Vec<(&str, &ParamSet, &Adam)> = [
        Some(("kernel", state.kernel_net.params(), &state.opt_kernel)),
        Some(("noise", state.noise_net.params(), &state.opt_noise)),
        Some(("disc", state.disc.params(), &state.opt_disc)),
        state
            .sr_net
            .as_ref()
            .zip(state.opt_sr.as_ref())
            .map(|(n, o)| ("sr", n.params(), o)),
        state
            .hr_disc
            .as_ref()
            .zip(state.opt_hr_disc.as_ref())
            .map(|(d, o)| ("hr_disc", d.params(), o)),
    ]
    .into_iter()
    .flatten()
    .collect();
    for (name, p, a) in &nets {
        w.params(name, p);
        w.adam(&format!("opt.{name}"), p, a);
        opt_steps.push((name.to_string(), a.step));
    }
    let header = Header {
        config: config.to_text(),
        step: state.step,
        seed: state.cfg.seed,
        optimizer_steps: opt_steps,
        tensors: w.entries,
    };
    let json = serde_json::to_vec(&header).map_err(|e| PdmError::format(path, e.to_string()))?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| PdmError::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    let mut out = std::io::BufWriter::new(std::fs::File::create(&tmp).map_err(|e| PdmError::io(&tmp, e))?);
    let io = |e| PdmError::io(&tmp, e);
    out.write_all(MAGIC).map_err(io)?;
    out.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
    out.write_all(&json).map_err(io)?;
    for t in w.data {
        for v in t.data() {
            out.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    out.flush().map_err(io)?;
    drop(out);
    std::fs::rename(&tmp, path).map_err(|e| PdmError::io(path, e))
}

fn fill_params(path: &Path, prefix: &str, p: &mut ParamSet, table: &mut std::collections::HashMap<String, Tensor>) -> Result<()> {
    for i in 0..p.len() {
        let key = format!("{prefix}/{}", p.names()[i]);
        let t = take(path, table, &key, p.get(i).shape())?;
        *p.get_mut(i) = t;
    }
    Ok(())
}

fn fill_adam(
    path: &Path,
    prefix: &str,
    p: &ParamSet,
    a: &mut Adam,
    table: &mut std::collections::HashMap<String, Tensor>,
    steps: &[(String, u64)],
    net: &str,
) -> Result<()> {
    for (i, name) in p.names().iter().enumerate() {
        a.m[i] = take(path, table, &format!("{prefix}.m/{name}"), p.get(i).shape())?;
        a.v[i] = take(path, table, &format!("{prefix}.v/{name}"), p.get(i).shape())?;
    }
    a.step = steps
        .iter()
        .find(|(n, _)| n == net)
        .map(|(_, s)| *s)
        .ok_or_else(|| PdmError::format(path, format!("missing optimizer step for {net}")))?;
    Ok(())
}

fn take(
    path: &Path,
    table: &mut std::collections::HashMap<String, Tensor>,
    key: &str,
    shape: &[usize],
) -> Result<Tensor> {
    let t = table
        .remove(key)
        .ok_or_else(|| PdmError::format(path, format!("missing array {key}")))?;
    if t.shape() != shape {
        return Err(PdmError::format(
            path,
            format!("array {key} has shape {:?}, expected {shape:?}", t.shape()),
        ));
    }
    Ok(t)
}

/// Restores the config and training state saved by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<(Config, PdmState)> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path).map_err(|e| PdmError::io(path, e))?);
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic).map_err(|e| PdmError::io(path, e))?;
    if &magic != MAGIC {
        return Err(PdmError::format(path, "not a checkpoint (bad magic)"));
    }
    let mut len = [0u8; 8];
    file.read_exact(&mut len).map_err(|e| PdmError::io(path, e))?;
    let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
    file.read_exact(&mut json).map_err(|e| PdmError::io(path, e))?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| PdmError::format(path, e.to_string()))?;
    let mut table = std::collections::HashMap::new();
    for e in &header.tensors {
        let count: usize = e.shape.iter().product();
        let mut bytes = vec![0u8; count * 8];
        file.read_exact(&mut bytes)
            .map_err(|err| PdmError::format(path, format!("truncated at {}: {err}", e.name)))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(&e.shape, data).map_err(|err| PdmError::format(path, err.to_string()))?;
        table.insert(e.name.clone(), t);
    }

    let mut config = Config::default();
    config.apply_text(&header.config, &format!("{} (config)", path.display()))?;
    let mut state = PdmState::new(TrainConfig::from_config(&config))?;
    let steps = &header.optimizer_steps;
    fill_params(path, "kernel", state.kernel_net.params_mut(), &mut table)?;
    fill_adam(path, "opt.kernel", state.kernel_net.params(), &mut state.opt_kernel, &mut table, steps, "kernel")?;
    fill_params(path, "noise", state.noise_net.params_mut(), &mut table)?;
    fill_adam(path, "opt.noise", state.noise_net.params(), &mut state.opt_noise, &mut table, steps, "noise")?;
    fill_params(path, "disc", state.disc.params_mut(), &mut table)?;
    fill_adam(path, "opt.disc", state.disc.params(), &mut state.opt_disc, &mut table, steps, "disc")?;
    if let (Some(n), Some(o)) = (state.sr_net.as_mut(), state.opt_sr.as_mut()) {
        fill_params(path, "sr", n.params_mut(), &mut table)?;
        fill_adam(path, "opt.sr", n.params(), o, &mut table, steps, "sr")?;
    }
    if let (Some(d), Some(o)) = (state.hr_disc.as_mut(), state.opt_hr_disc.as_mut()) {
        fill_params(path, "hr_disc", d.params_mut(), &mut table)?;
        fill_adam(path, "opt.hr_disc", d.params(), o, &mut table, steps, "hr_disc")?;
    }
    if let Some(extra) = table.keys().next() {
        return Err(PdmError::format(path, format!("unexpected array {extra}")));
    }
    state.step = header.step;
    Ok((config, state))
}
