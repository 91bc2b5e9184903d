//! Binary checkpoints: weights, batch-norm statistics, Adam state, epoch
//! counter, loss trace and the config that produced them.
//!
//! Layout (little endian): the magic `SGSEG1`, a `u32` length and the UTF-8
//! config text, a `u32` record count, then per record a `u32` name length,
//! the name, a dtype tag byte (0 = f64, 1 = u64), a `u32` rank, `rank`
//! `u64` extents and the raw values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use sgseg_tensor::{RunningStats, Tensor};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{LossParts, Phase};
use crate::train::{EpochRecord, Trainer};

pub const MAGIC: &[u8; 6] = b"SGSEG1";

#[derive(Clone, Debug, PartialEq)]
pub enum Values {
    F64(Vec<f64>),
    U64(Vec<u64>),
}

impl Values {
    fn len(&self) -> usize {
        match self {
            Values::F64(v) => v.len(),
            Values::U64(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Values,
}

impl Record {
    fn f64(name: impl Into<String>, shape: &[usize], v: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            values: Values::F64(v),
        }
    }

    fn u64(name: impl Into<String>, v: Vec<u64>) -> Self {
        Self {
            name: name.into(),
            shape: vec![v.len()],
            values: Values::U64(v),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub records: Vec<Record>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn phase_tag(p: Phase) -> u64 {
    match p {
        Phase::Spnn => 0,
        Phase::Segmentation => 1,
        Phase::Joint => 2,
    }
}

fn tag_phase(t: u64) -> Result<Phase> {
    match t {
        0 => Ok(Phase::Spnn),
        1 => Ok(Phase::Segmentation),
        2 => Ok(Phase::Joint),
        _ => Err(bad(format!("unknown phase tag {t}"))),
    }
}

impl Checkpoint {
    pub fn from_trainer(t: &Trainer) -> Self {
        let mut records = Vec::new();
        for p in t.store.params() {
            records.push(Record::f64(format!("param/{}", p.name), p.value.shape(), p.value.data().to_vec()));
        }
        for b in t.store.bn_states() {
            let c = b.stats.mean.len();
            records.push(Record::f64(format!("bn_mean/{}", b.name), &[c], b.stats.mean.clone()));
            records.push(Record::f64(format!("bn_var/{}", b.name), &[c], b.stats.var.clone()));
        }
        for (i, p) in t.store.params().iter().enumerate() {
            records.push(Record::f64(format!("adam_m/{}", p.name), p.value.shape(), t.adam.m[i].data().to_vec()));
            records.push(Record::f64(format!("adam_v/{}", p.name), p.value.shape(), t.adam.v[i].data().to_vec()));
        }
        records.push(Record::u64("adam_steps", t.adam.steps.to_vec()));
        records.push(Record::u64("epoch", vec![t.epoch as u64]));
        let n = t.trace.len();
        records.push(Record::u64("trace_epoch", t.trace.iter().map(|r| r.epoch as u64).collect()));
        records.push(Record::u64("trace_phase", t.trace.iter().map(|r| phase_tag(r.phase)).collect()));
        records.push(Record::f64(
            "trace_loss",
            &[n, LossParts::FIELDS.len()],
            t.trace.iter().flat_map(|r| r.mean.values()).collect(),
        ));
        Self {
            config: t.config.emit(),
            records,
        }
    }

    fn find(&self, name: &str) -> Result<&Record> {
        self.records
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| bad(format!("missing record `{name}`")))
    }

    fn f64s(&self, name: &str, shape: &[usize]) -> Result<Vec<f64>> {
        let r = self.find(name)?;
        match &r.values {
            Values::F64(v) if r.shape == shape => Ok(v.clone()),
            Values::F64(_) => Err(bad(format!("`{name}` has shape {:?}, expected {shape:?}", r.shape))),
            Values::U64(_) => Err(bad(format!("`{name}` should hold f64 values"))),
        }
    }

    fn u64s(&self, name: &str) -> Result<Vec<u64>> {
        match &self.find(name)?.values {
            Values::U64(v) => Ok(v.clone()),
            Values::F64(_) => Err(bad(format!("`{name}` should hold u64 values"))),
        }
    }

    /// Rebuilds the trainer the checkpoint was taken from.
    pub fn to_trainer(&self) -> Result<Trainer> {
        let config = TrainConfig::parse_silent(&self.config)?;
        let mut t = Trainer::new(config)?;
        for i in 0..t.store.len() {
            let (name, shape) = {
                let p = &t.store.params()[i];
                (p.name.clone(), p.value.shape().to_vec())
            };
            let value = self.f64s(&format!("param/{name}"), &shape)?;
            t.store.params_mut()[i].value = Tensor::new(&shape, value)?;
            t.adam.m[i] = Tensor::new(&shape, self.f64s(&format!("adam_m/{name}"), &shape)?)?;
            t.adam.v[i] = Tensor::new(&shape, self.f64s(&format!("adam_v/{name}"), &shape)?)?;
        }
        for b in t.store.bn_states_mut() {
            let c = b.stats.mean.len();
            b.stats = RunningStats {
                mean: self.f64s(&format!("bn_mean/{}", b.name), &[c])?,
                var: self.f64s(&format!("bn_var/{}", b.name), &[c])?,
            };
        }
        let steps = self.u64s("adam_steps")?;
        t.adam.steps = steps
            .try_into()
            .map_err(|_| bad("`adam_steps` must hold 3 counters"))?;
        t.epoch = *self.u64s("epoch")?.first().ok_or_else(|| bad("empty `epoch`"))? as usize;
        let epochs = self.u64s("trace_epoch")?;
        let phases = self.u64s("trace_phase")?;
        let f = LossParts::FIELDS.len();
        let losses = self.f64s("trace_loss", &[epochs.len(), f])?;
        if phases.len() != epochs.len() {
            return Err(bad("trace records disagree in length"));
        }
        for (i, (&e, &p)) in epochs.iter().zip(&phases).enumerate() {
            let v = &losses[i * f..(i + 1) * f];
            t.trace.push(EpochRecord {
                epoch: e as usize,
                phase: tag_phase(p)?,
                mean: LossParts {
                    total: v[0],
                    spnn: v[1],
                    clustering: v[2],
                    smoothness: v[3],
                    recon: v[4],
                    edge: v[5],
                    tv: v[6],
                    cnn: v[7],
                    mi: v[8],
                    cnn_recon: v[9],
                },
            });
        }
        Ok(t)
    }

    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.config.len() as u32).to_le_bytes())?;
        w.write_all(self.config.as_bytes())?;
        w.write_all(&(self.records.len() as u32).to_le_bytes())?;
        for r in &self.records {
            if r.shape.iter().product::<usize>() != r.values.len() {
                return Err(bad(format!("`{}` has inconsistent extents", r.name)));
            }
            w.write_all(&(r.name.len() as u32).to_le_bytes())?;
            w.write_all(r.name.as_bytes())?;
            w.write_all(&[match r.values {
                Values::F64(_) => 0,
                Values::U64(_) => 1,
            }])?;
            w.write_all(&(r.shape.len() as u32).to_le_bytes())?;
            for &e in &r.shape {
                w.write_all(&(e as u64).to_le_bytes())?;
            }
            match &r.values {
                Values::F64(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
                Values::U64(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
            }
        }
        Ok(())
    }

    pub fn read(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let config_len = read_u32(r)? as usize;
        let config = String::from_utf8(read_bytes(r, config_len)?)
            .map_err(|_| bad("config block is not UTF-8"))?;
        let n = read_u32(r)?;
        let mut records = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let name_len = read_u32(r)? as usize;
            let name = String::from_utf8(read_bytes(r, name_len)?).map_err(|_| bad("record name is not UTF-8"))?;
            let tag = read_bytes(r, 1)?[0];
            let rank = read_u32(r)?;
            let shape = (0..rank)
                .map(|_| read_u64(r).map(|e| e as usize))
                .collect::<Result<Vec<_>>>()?;
            let count: usize = shape.iter().product();
            let raw = read_bytes(r, count * 8)?;
            let words = raw.chunks_exact(8).map(|c| <[u8; 8]>::try_from(c).unwrap());
            let values = match tag {
                0 => Values::F64(words.map(f64::from_le_bytes).collect()),
                1 => Values::U64(words.map(u64::from_le_bytes).collect()),
                t => return Err(bad(format!("`{name}` has unknown dtype tag {t}"))),
            };
            records.push(Record { name, shape, values });
        }
        Ok(Self { config, records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
        Self::read(&mut BufReader::new(f))
    }
}

fn read_bytes(r: &mut impl Read, n: usize) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    r.take(n as u64).read_to_end(&mut buf)?;
    if buf.len() != n {
        return Err(bad("truncated checkpoint"));
    }
    Ok(buf)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| bad("truncated checkpoint"))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| bad("truncated checkpoint"))?;
    Ok(u64::from_le_bytes(b))
}
