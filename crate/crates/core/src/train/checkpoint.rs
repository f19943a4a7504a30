//! Checkpoint container I/O and checkpoint averaging.
//!
//! One self-describing binary container serves checkpoints and Fisher
//! files: a text header of `key = value` lines terminated by a blank line,
//! then per-tensor records of (name, shape, raw little-endian f64 data).

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{check_params, ModelConfig, ModelParams};
use crate::tensor::Tensor;

use super::AdamState;

const MAGIC: &str = "doclm-container v1";

/// Model parameters plus everything needed to resume or combine runs.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub optimizer: Option<AdamState>,
    /// Micro-batch iterations consumed.
    pub iteration: usize,
    /// Parameter updates applied.
    pub updates: usize,
}

fn config_header(config: &ModelConfig, out: &mut String) {
    use std::fmt::Write;
    writeln!(out, "mode = {}", config.mode).unwrap();
    writeln!(out, "d_model = {}", config.d_model).unwrap();
    writeln!(out, "n_heads = {}", config.n_heads).unwrap();
    writeln!(out, "n_layers = {}", config.n_layers).unwrap();
    writeln!(out, "d_ff = {}", config.d_ff).unwrap();
    writeln!(out, "vocab_size = {}", config.vocab_size).unwrap();
    writeln!(out, "l_max = {}", config.l_max).unwrap();
    writeln!(out, "dropout = {}", config.dropout).unwrap();
}

fn parse_header(lines: &[&str]) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, line) in lines.iter().enumerate() {
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: i + 2,
            message: format!("expected `key = value`, found {line:?}"),
        })?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn header_get<'a>(map: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str> {
    map.get(key)
        .map(|s| s.as_str())
        .ok_or_else(|| Error::validation(format!("container header missing key {key}")))
}

fn header_config(map: &BTreeMap<String, String>) -> Result<ModelConfig> {
    let num = |key: &str| -> Result<usize> {
        header_get(map, key)?
            .parse()
            .map_err(|_| Error::validation(format!("container header: bad value for {key}")))
    };
    let config = ModelConfig {
        mode: header_get(map, "mode")?.parse()?,
        d_model: num("d_model")?,
        n_heads: num("n_heads")?,
        n_layers: num("n_layers")?,
        d_ff: num("d_ff")?,
        vocab_size: num("vocab_size")?,
        l_max: num("l_max")?,
        dropout: header_get(map, "dropout")?
            .parse()
            .map_err(|_| Error::validation("container header: bad value for dropout"))?,
    };
    config.validate()?;
    Ok(config)
}

fn push_tensor(buf: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &x in data {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::validation("container truncated"));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let name_len = self.u32()? as usize;
        let name = std::str::from_utf8(self.take(name_len)?)
            .map_err(|_| Error::validation("container: tensor name is not UTF-8"))?
            .to_string();
        let ndim = self.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = self.take(numel * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((name, Tensor::from_vec(shape, data)?))
    }
}

fn write_container(
    path: &Path,
    kind: &str,
    config: &ModelConfig,
    extra_header: &[(&str, String)],
    tensors: &[(String, &[usize], &[f64])],
) -> Result<()> {
    let mut header = String::new();
    header.push_str(MAGIC);
    header.push('\n');
    header.push_str(&format!("kind = {kind}\n"));
    config_header(config, &mut header);
    for (k, v) in extra_header {
        header.push_str(&format!("{k} = {v}\n"));
    }
    header.push_str(&format!("tensor_count = {}\n\n", tensors.len()));

    let mut buf = header.into_bytes();
    for (name, shape, data) in tensors {
        push_tensor(&mut buf, name, shape, data);
    }
    crate::write_atomic(path, &buf)
}

struct Container {
    header: BTreeMap<String, String>,
    tensors: Vec<(String, Tensor)>,
}

fn read_container(path: &Path, expected_kind: &str) -> Result<Container> {
    let bytes = std::fs::read(path)?;
    let header_end = bytes
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| Error::validation("container: missing header terminator"))?;
    let header_text = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| Error::Encoding { line: 1 })?;
    let mut lines = header_text.lines();
    let magic = lines.next().unwrap_or("");
    if magic != MAGIC {
        return Err(Error::validation(format!(
            "{}: not a doclm container (bad magic {magic:?})",
            path.display()
        )));
    }
    let header = parse_header(&lines.collect::<Vec<_>>())?;
    let kind = header_get(&header, "kind")?;
    if kind != expected_kind {
        return Err(Error::validation(format!(
            "{}: container kind is {kind}, expected {expected_kind}",
            path.display()
        )));
    }
    let count: usize = header_get(&header, "tensor_count")?
        .parse()
        .map_err(|_| Error::validation("container header: bad tensor_count"))?;
    let mut reader = Reader {
        bytes: &bytes,
        pos: header_end + 2,
    };
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        tensors.push(reader.tensor()?);
    }
    if reader.pos != bytes.len() {
        return Err(Error::validation("container: trailing bytes after tensors"));
    }
    Ok(Container { header, tensors })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut extra = vec![
        ("iteration", ckpt.iteration.to_string()),
        ("updates", ckpt.updates.to_string()),
    ];
    let mut tensors: Vec<(String, &[usize], &[f64])> = ckpt
        .params
        .iter()
        .map(|(name, t)| (name.to_string(), t.shape(), t.data()))
        .collect();
    if let Some(opt) = &ckpt.optimizer {
        extra.push(("adam_step", opt.step.to_string()));
        for (name, data) in &opt.m {
            let shape = ckpt.params.get(name).map(|t| t.shape()).unwrap_or(&[]);
            tensors.push((format!("opt.m.{name}"), shape, data));
        }
        for (name, data) in &opt.v {
            let shape = ckpt.params.get(name).map(|t| t.shape()).unwrap_or(&[]);
            tensors.push((format!("opt.v.{name}"), shape, data));
        }
    }
    write_container(path, "checkpoint", &ckpt.config, &extra, &tensors)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let container = read_container(path, "checkpoint")?;
    let config = header_config(&container.header)?;
    let parse_count = |key: &str| -> Result<usize> {
        header_get(&container.header, key)?
            .parse()
            .map_err(|_| Error::validation(format!("container header: bad value for {key}")))
    };
    let iteration = parse_count("iteration")?;
    let updates = parse_count("updates")?;

    let mut params = ModelParams::new();
    let mut m = BTreeMap::new();
    let mut v = BTreeMap::new();
    for (name, tensor) in container.tensors {
        if let Some(rest) = name.strip_prefix("opt.m.") {
            m.insert(rest.to_string(), tensor.data().to_vec());
        } else if let Some(rest) = name.strip_prefix("opt.v.") {
            v.insert(rest.to_string(), tensor.data().to_vec());
        } else {
            params.insert(name, tensor);
        }
    }
    check_params(&config, &params)?;
    let optimizer = if container.header.contains_key("adam_step") {
        Some(AdamState {
            m,
            v,
            step: parse_count("adam_step")?,
        })
    } else {
        None
    };
    Ok(Checkpoint {
        config,
        params,
        optimizer,
        iteration,
        updates,
    })
}

/// Fisher files reuse the checkpoint container with `kind = fisher`.
pub fn save_fisher(path: &Path, config: &ModelConfig, fisher: &ModelParams) -> Result<()> {
    let tensors: Vec<(String, &[usize], &[f64])> = fisher
        .iter()
        .map(|(name, t)| (name.to_string(), t.shape(), t.data()))
        .collect();
    write_container(path, "fisher", config, &[], &tensors)
}

pub fn load_fisher(path: &Path) -> Result<(ModelConfig, ModelParams)> {
    let container = read_container(path, "fisher")?;
    let config = header_config(&container.header)?;
    let mut fisher = ModelParams::new();
    for (name, tensor) in container.tensors {
        fisher.insert(name, tensor);
    }
    check_params(&config, &fisher)?;
    Ok((config, fisher))
}

fn config_diff(a: &ModelConfig, b: &ModelConfig) -> Vec<&'static str> {
    let mut diff = Vec::new();
    if a.mode != b.mode {
        diff.push("mode");
    }
    if a.d_model != b.d_model {
        diff.push("d_model");
    }
    if a.n_heads != b.n_heads {
        diff.push("n_heads");
    }
    if a.n_layers != b.n_layers {
        diff.push("n_layers");
    }
    if a.d_ff != b.d_ff {
        diff.push("d_ff");
    }
    if a.vocab_size != b.vocab_size {
        diff.push("vocab_size");
    }
    if a.l_max != b.l_max {
        diff.push("l_max");
    }
    if a.dropout != b.dropout {
        diff.push("dropout");
    }
    diff
}

/// Uniform arithmetic mean of each named tensor across checkpoints.
///
/// Per element, the addends are sorted before summation, so the result is
/// exactly permutation-invariant; averaging identical checkpoints
/// reproduces them bit-exactly.
pub fn average_checkpoints(checkpoints: &[Checkpoint]) -> Result<ModelParams> {
    let first = checkpoints
        .first()
        .ok_or_else(|| Error::validation("average_checkpoints: no checkpoints given"))?;
    for (i, ckpt) in checkpoints.iter().enumerate().skip(1) {
        let diff = config_diff(&first.config, &ckpt.config);
        if !diff.is_empty() {
            return Err(Error::validation(format!(
                "average_checkpoints: checkpoint {i} config differs in: {}",
                diff.join(", ")
            )));
        }
        if !first.params.same_names(&ckpt.params) {
            return Err(Error::validation(format!(
                "average_checkpoints: checkpoint {i} has a different parameter name set"
            )));
        }
    }

    let k = checkpoints.len();
    let mut out = ModelParams::new();
    let mut values = vec![0.0f64; k];
    for (name, tensor) in first.params.iter() {
        let mut data = vec![0.0; tensor.numel()];
        for (j, slot) in data.iter_mut().enumerate() {
            for (c, ckpt) in checkpoints.iter().enumerate() {
                values[c] = ckpt.params.get(name).expect("name-checked").data()[j];
            }
            values.sort_by(f64::total_cmp);
            *slot = if values[0] == values[k - 1] {
                values[0]
            } else {
                values.iter().sum::<f64>() / k as f64
            };
        }
        out.insert(name.to_string(), Tensor::from_vec(tensor.shape().to_vec(), data)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, Mode};

    fn config() -> ModelConfig {
        ModelConfig {
            mode: Mode::IntraInter,
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            d_ff: 16,
            vocab_size: 10,
            l_max: 32,
            dropout: 0.1,
        }
    }

    fn checkpoint(seed: u64) -> Checkpoint {
        let config = config();
        let params = init_params(&config, seed).unwrap();
        let optimizer = Some(AdamState::new(&params));
        Checkpoint {
            config,
            params,
            optimizer,
            iteration: 12,
            updates: 3,
        }
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ckpt = checkpoint(5);
        save_checkpoint(&path, &ckpt).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded, ckpt);
    }

    #[test]
    fn mismatched_name_set_fails_to_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut ckpt = checkpoint(5);
        // claim a different architecture in the header
        ckpt.config.n_layers = 2;
        save_checkpoint(&path, &ckpt).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn fisher_container_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fisher.bin");
        let config = config();
        let fisher = init_params(&config, 9).unwrap();
        save_fisher(&path, &config, &fisher).unwrap();
        let (config2, fisher2) = load_fisher(&path).unwrap();
        assert_eq!(config2, config);
        assert_eq!(fisher2, fisher);
        // a fisher file is not accepted as a checkpoint
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn averaging_identical_checkpoints_is_idempotent() {
        let ckpt = checkpoint(7);
        let avg = average_checkpoints(&[ckpt.clone(), ckpt.clone(), ckpt.clone()]).unwrap();
        assert_eq!(avg, ckpt.params);
    }

    #[test]
    fn averaging_two_values() {
        let mut a = checkpoint(1);
        let mut b = checkpoint(2);
        a.params.get_mut("out.b").unwrap().data_mut()[0] = 1.0;
        b.params.get_mut("out.b").unwrap().data_mut()[0] = 3.0;
        let avg = average_checkpoints(&[a, b]).unwrap();
        assert_eq!(avg.get("out.b").unwrap().data()[0], 2.0);
    }

    #[test]
    fn averaging_matches_elementwise_oracle() {
        let ckpts = [checkpoint(1), checkpoint(2), checkpoint(3)];
        let avg = average_checkpoints(&ckpts).unwrap();
        for (name, tensor) in avg.iter() {
            for j in 0..tensor.numel() {
                let mut vals: Vec<f64> = ckpts
                    .iter()
                    .map(|c| c.params.get(name).unwrap().data()[j])
                    .collect();
                vals.sort_by(f64::total_cmp);
                let expect = vals.iter().sum::<f64>() / 3.0;
                assert!((tensor.data()[j] - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn averaging_is_permutation_invariant() {
        let ckpts = [checkpoint(1), checkpoint(2), checkpoint(3)];
        let a = average_checkpoints(&ckpts).unwrap();
        let b = average_checkpoints(&[ckpts[2].clone(), ckpts[0].clone(), ckpts[1].clone()])
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn config_mismatch_lists_differing_fields() {
        let a = checkpoint(1);
        let mut b = checkpoint(2);
        b.config.d_ff = 32;
        b.config.dropout = 0.2;
        // keep params consistent with the altered config irrelevant here:
        // the config check fires before the name check
        let err = average_checkpoints(&[a, b]).unwrap_err().to_string();
        assert!(err.contains("d_ff") && err.contains("dropout"), "{err}");
    }

    #[test]
    fn empty_list_is_rejected() {
        assert!(average_checkpoints(&[]).is_err());
    }
}
