//! Single-file binary checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic        8 bytes  "GVITCKPT"
//! version      u32
//! config       u32 length + UTF-8 `key = value` text
//! epoch        u64      completed epochs
//! global_step  u64      completed regular steps
//! 2 sections   "encoder" then "classifier", each:
//!   name       u32 length + UTF-8
//!   opt_step   u64      AdamW step counter
//!   count      u32
//!   count × { name (u32 length + UTF-8), ndim u32, dims u64 × ndim,
//!             value f64 × n, adam m f64 × n, adam v f64 × n }
//! ```
//!
//! Random draws during training are a pure function of the run seed and the
//! epoch/step counters, so these fields are the complete RNG state.

use std::path::Path;

use gvit_core::models::ParamSet;
use gvit_core::training::{Models, OptimizerState, Trainer};
use gvit_core::Tensor;

use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 8] = b"GVITCKPT";
pub const VERSION: u32 = 1;

const SECTIONS: [&str; 2] = ["encoder", "classifier"];

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }

    fn floats(&mut self, xs: &[f64]) {
        for x in xs {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }

    fn section(&mut self, name: &str, params: &ParamSet, opt: &OptimizerState) {
        self.str(name);
        self.u64(opt.step);
        self.u32(params.len() as u32);
        for (i, p) in params.iter().enumerate() {
            self.str(&p.name);
            self.u32(p.value.ndim() as u32);
            for &d in p.value.shape() {
                self.u64(d as u64);
            }
            self.floats(p.value.data());
            self.floats(opt.m[i].data());
            self.floats(opt.v[i].data());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(CliError::format(self.path, format!("truncated at byte {}", self.pos)));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| CliError::format(self.path, "string is not UTF-8"))
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| CliError::format(self.path, "tensor too large"))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn section(&mut self, expected: &str, template: &ParamSet) -> Result<(ParamSet, OptimizerState)> {
        let name = self.str()?;
        if name != expected {
            return Err(CliError::format(self.path, format!("expected section {expected}, found {name}")));
        }
        let step = self.u64()?;
        let count = self.u32()? as usize;
        let mut params = ParamSet::new();
        let (mut m, mut v) = (Vec::with_capacity(count), Vec::with_capacity(count));
        for _ in 0..count {
            let pname = self.str()?;
            if params.index_of(&pname).is_some() {
                return Err(CliError::format(self.path, format!("parameter {pname} appears twice")));
            }
            let ndim = self.u32()? as usize;
            let shape = (0..ndim).map(|_| Ok(self.u64()? as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let tensor = |data| Tensor::new(shape.clone(), data).map_err(CliError::from);
            let value = tensor(self.floats(n)?)?;
            m.push(tensor(self.floats(n)?)?);
            v.push(tensor(self.floats(n)?)?);
            params.add(pname, value, false);
        }
        let mut loaded = template.clone();
        loaded
            .load_from(&params)
            .map_err(|e| CliError::format(self.path, format!("{expected}: {e}")))?;
        // Moments follow the file order; put them in the model's order.
        let order: Vec<usize> = loaded
            .iter()
            .map(|p| params.index_of(&p.name).expect("checked by load_from"))
            .collect();
        let state = OptimizerState {
            m: order.iter().map(|&i| m[i].clone()).collect(),
            v: order.iter().map(|&i| v[i].clone()).collect(),
            step,
        };
        Ok((loaded, state))
    }
}

pub fn to_bytes(config: &RunConfig, trainer: &Trainer) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.str(&config.to_text());
    w.u64(trainer.epoch as u64);
    w.u64(trainer.global_step);
    let m = &trainer.models;
    w.section(SECTIONS[0], &m.encoder.params, &trainer.encoder_opt);
    w.section(SECTIONS[1], &m.classifier.params, &trainer.classifier_opt);
    w.0
}

pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<(RunConfig, Trainer)> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(CliError::format(path, "not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CliError::format(path, format!("unsupported checkpoint version {version}")));
    }
    let config = RunConfig::parse(&r.str()?)?;
    let epoch = r.u64()? as usize;
    let global_step = r.u64()?;
    let mut models = Models::new(config.model, config.train.seed)?;
    models.render_mode = config.render_mode;
    let (enc, enc_opt) = r.section(SECTIONS[0], &models.encoder.params)?;
    let (cls, cls_opt) = r.section(SECTIONS[1], &models.classifier.params)?;
    if r.pos != bytes.len() {
        return Err(CliError::format(path, "trailing bytes after checkpoint"));
    }
    models.encoder.params = enc;
    models.classifier.params = cls;
    let mut trainer = Trainer::from_parts(config.train.clone(), models);
    trainer.encoder_opt = enc_opt;
    trainer.classifier_opt = cls_opt;
    trainer.epoch = epoch;
    trainer.global_step = global_step;
    Ok((config, trainer))
}

pub fn save(path: &Path, config: &RunConfig, trainer: &Trainer) -> Result<()> {
    std::fs::write(path, to_bytes(config, trainer)).map_err(|e| CliError::io(path, e))
}

pub fn load(path: &Path) -> Result<(RunConfig, Trainer)> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (RunConfig, Trainer) {
        let cfg = RunConfig::parse(
            "k = 4\nnum_classes = 3\nimage_size = 16\nencoder_width = 16\nencoder_heads = 2\nencoder_depth = 1\n\
             classifier_width = 16\nclassifier_heads = 2\nclassifier_depth = 1\nseed = 3",
        )
        .unwrap();
        let mut t = Trainer::new(cfg.model, cfg.train.clone()).unwrap();
        t.epoch = 2;
        t.global_step = 17;
        t.encoder_opt.step = 17;
        t.encoder_opt.m[0].data_mut()[0] = 0.125;
        (cfg, t)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (cfg, t) = small();
        let bytes = to_bytes(&cfg, &t);
        let (cfg2, t2) = from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(t2.models.encoder.params, t.models.encoder.params);
        assert_eq!(t2.models.classifier.params, t.models.classifier.params);
        assert_eq!(t2.encoder_opt, t.encoder_opt);
        assert_eq!(t2.classifier_opt, t.classifier_opt);
        assert_eq!((t2.epoch, t2.global_step), (2, 17));
        assert_eq!(to_bytes(&cfg2, &t2), bytes);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let (cfg, t) = small();
        let bytes = to_bytes(&cfg, &t);
        let p = Path::new("mem");
        assert!(from_bytes(&bytes[..bytes.len() - 3], p).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(from_bytes(&bad, p).is_err());
        let mut long = bytes.clone();
        long.push(0);
        let err = from_bytes(&long, p).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
