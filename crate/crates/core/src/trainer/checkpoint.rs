//! Binary checkpoint container.
//!
//! Layout: magic `STRD`, `u32` version, `u32` section count, then sections of
//! (`u32` name length, name, `u64` payload length, payload), then a SHA-256
//! of everything before it. Integers and floats are little-endian.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{AdamW, TrainConfig, Trainer};
use crate::error::{Error, Result};
use crate::kv::{KvConfig, KvMap};
use crate::pipeline::{Pipeline, PipelineConfig};

const MAGIC: &[u8; 4] = b"STRD";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Default)]
struct Buf(Vec<u8>);

impl Buf {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u128(&mut self, v: u128) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn f64s(&mut self, xs: &[f64]) {
        self.u64(xs.len() as u64);
        for x in xs {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Self { bytes, pos: 0, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Integrity(format!("section {} is truncated", self.what)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().expect("16 bytes")))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Integrity("length overflows usize".into()))
    }
    fn str(&mut self) -> Result<&'a str> {
        let n = self.u32()? as usize;
        std::str::from_utf8(self.take(n)?).map_err(|_| Error::Integrity(format!("non-UTF-8 text in {}", self.what)))
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.usize()?;
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Integrity("length overflow".into()))?,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Integrity(format!("trailing bytes in section {}", self.what)));
        }
        Ok(())
    }
}

fn encode(trainer: &Trainer) -> Vec<u8> {
    let p = &trainer.pipeline;
    let mut sections: Vec<(&str, Buf)> = Vec::new();

    let mut b = Buf::default();
    let tokens = p.vocab().to_strings();
    b.u32(tokens.len() as u32);
    tokens.iter().for_each(|t| b.str(t));
    sections.push(("vocab", b));

    let mut kv = KvMap::new();
    p.config().write(&mut kv);
    trainer.config.write(&mut kv);
    let mut b = Buf::default();
    b.str(&kv.render());
    sections.push(("config", b));

    let mut b = Buf::default();
    let params = p.named_params();
    b.u32(params.len() as u32);
    for (name, t) in params {
        b.str(name);
        b.u8(t.requires_grad() as u8);
        b.u32(t.shape().len() as u32);
        t.shape().iter().for_each(|&d| b.u64(d as u64));
        b.f64s(t.data());
    }
    sections.push(("params", b));

    let o = &trainer.optim;
    let mut b = Buf::default();
    b.u64(o.t);
    b.u32(o.m.len() as u32);
    for (m, v) in o.m.iter().zip(&o.v) {
        b.f64s(m);
        b.f64s(v);
    }
    sections.push(("optimizer", b));

    let mut b = Buf::default();
    b.u64(trainer.step);
    b.u64(trainer.cursor as u64);
    b.u64(trainer.order.len() as u64);
    trainer.order.iter().for_each(|&i| b.u64(i as u64));
    sections.push(("progress", b));

    let mut b = Buf::default();
    b.0.extend_from_slice(&trainer.rng.get_seed());
    b.u64(trainer.rng.get_stream());
    b.u128(trainer.rng.get_word_pos());
    sections.push(("rng", b));

    let mut out = Buf::default();
    out.0.extend_from_slice(MAGIC);
    out.u32(CHECKPOINT_VERSION);
    out.u32(sections.len() as u32);
    for (name, payload) in sections {
        out.str(name);
        out.u64(payload.0.len() as u64);
        out.0.extend_from_slice(&payload.0);
    }
    let digest = Sha256::digest(&out.0);
    out.0.extend_from_slice(&digest);
    out.0
}

impl Trainer {
    /// Writes the full training state atomically (temp file, then rename).
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = encode(self);
        let dir = path
            .parent()
            .filter(|d| !d.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        tmp.write_all(&bytes)?;
        tmp.as_file().sync_all()?;
        tmp.persist(path).map_err(|e| Error::Io(e.error))?;
        Ok(())
    }
}

fn sections(bytes: &[u8]) -> Result<Vec<(&str, &[u8])>> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Incompatible("missing checkpoint magic header".into()));
    }
    if bytes.len() < 12 {
        return Err(Error::Integrity("file shorter than its header".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Incompatible(format!(
            "checkpoint version {version}, this build reads version {CHECKPOINT_VERSION}"
        )));
    }
    if bytes.len() < 12 + DIGEST_LEN {
        return Err(Error::Integrity("file too short for its checksum".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Integrity(
            "checksum mismatch (truncated or corrupted file)".into(),
        ));
    }
    let mut c = Cursor::new(&body[8..], "header");
    let n = c.u32()?;
    let mut out = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let name = c.str()?;
        let len = c.usize()?;
        out.push((name, c.take(len)?));
    }
    c.finish()?;
    Ok(out)
}

fn section<'a>(all: &[(&'a str, &'a [u8])], name: &'static str) -> Result<Cursor<'a>> {
    all.iter()
        .find(|(n, _)| *n == name)
        .map(|(_, b)| Cursor::new(b, name))
        .ok_or_else(|| Error::Integrity(format!("missing section {name}")))
}

/// Reads a checkpoint written by [`Trainer::save`]. Nothing is returned
/// unless every check passes.
pub fn load_checkpoint(path: &Path) -> Result<Trainer> {
    let bytes = std::fs::read(path)?;
    let all = sections(&bytes)?;

    let mut c = section(&all, "config")?;
    let kv = KvMap::parse(c.str()?)?;
    c.finish()?;
    let mut pcfg = PipelineConfig::default();
    let mut tcfg = TrainConfig::default();
    for (k, v) in kv.iter() {
        if !pcfg.apply(k, v)? && !tcfg.apply(k, v)? {
            return Err(Error::Incompatible(format!("unknown config key {k}")));
        }
    }
    let mut pipeline = Pipeline::new(pcfg, 0)?;

    let mut c = section(&all, "vocab")?;
    let n = c.u32()?;
    let tokens = (0..n)
        .map(|_| c.str().map(str::to_string))
        .collect::<Result<Vec<_>>>()?;
    c.finish()?;
    if tokens != pipeline.vocab().to_strings() {
        return Err(Error::Incompatible(
            "stored vocabulary differs from the configured one".into(),
        ));
    }

    let mut c = section(&all, "params")?;
    let n = c.u32()? as usize;
    if n != pipeline.named_params().len() {
        return Err(Error::Incompatible(format!(
            "checkpoint has {n} tensors, model has {}",
            pipeline.named_params().len()
        )));
    }
    for _ in 0..n {
        let name = c.str()?.to_string();
        let flag = c.u8()? != 0;
        let rank = c.u32()? as usize;
        let shape = (0..rank).map(|_| c.usize()).collect::<Result<Vec<_>>>()?;
        let data = c.f64s()?;
        pipeline.load_param(&name, &shape, data)?;
        let expected = pipeline
            .named_params()
            .into_iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| t.requires_grad());
        if expected != Some(flag) {
            return Err(Error::Incompatible(format!("trainable flag of {name} differs")));
        }
    }
    c.finish()?;

    let mut trainer = Trainer::new(pipeline, tcfg)?;

    let mut c = section(&all, "optimizer")?;
    let t = c.u64()?;
    let n = c.u32()? as usize;
    let mut m = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    for _ in 0..n {
        m.push(c.f64s()?);
        v.push(c.f64s()?);
    }
    c.finish()?;
    let sizes: Vec<usize> = trainer.optim.m.iter().map(Vec::len).collect();
    if m.iter().map(Vec::len).collect::<Vec<_>>() != sizes || v.iter().map(Vec::len).collect::<Vec<_>>() != sizes {
        return Err(Error::Incompatible(
            "optimizer moments do not match the parameter set".into(),
        ));
    }
    trainer.optim = AdamW {
        m,
        v,
        t,
        ..trainer.optim
    };

    let mut c = section(&all, "progress")?;
    trainer.step = c.u64()?;
    trainer.cursor = c.usize()?;
    let n = c.usize()?;
    trainer.order = (0..n).map(|_| c.usize()).collect::<Result<_>>()?;
    c.finish()?;
    if trainer.cursor > trainer.order.len() {
        return Err(Error::Integrity("data cursor past the end of the order".into()));
    }

    let mut c = section(&all, "rng")?;
    let seed: [u8; 32] = c.take(32)?.try_into().expect("32 bytes");
    let stream = c.u64()?;
    let word_pos = c.u128()?;
    c.finish()?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    trainer.rng = rng;

    Ok(trainer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, MixtureSpec};
    use crate::trainer::tests::tiny_setup;

    fn cfg(steps: u64) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn round_trip_is_forecast_exact() {
        let (p, data) = tiny_setup(7);
        let mut t = Trainer::new(p, cfg(3)).unwrap();
        t.run(&data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        t.save(&path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.pipeline(), t.pipeline());
        let spec = MixtureSpec {
            context_len: 16,
            horizon: 4,
            ..MixtureSpec::default()
        };
        for w in generate_dataset(&spec, 10, 77).unwrap() {
            let a = t.pipeline().forecast(&w.context()).unwrap();
            let b = back.pipeline().forecast(&w.context()).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (p, data) = tiny_setup(7);
        let mut full = Trainer::new(p.clone(), cfg(10)).unwrap();
        let whole = full.run(&data).unwrap();

        let mut first = Trainer::new(p, cfg(4)).unwrap();
        first.run(&data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        first.save(&path).unwrap();
        let mut resumed = load_checkpoint(&path).unwrap();
        resumed.set_steps(10);
        let rest = resumed.run(&data).unwrap();
        let bits = |h: &[crate::trainer::StepStats]| h.iter().map(|s| s.loss_total.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&whole[4..]), bits(&rest));
        assert_eq!(resumed.pipeline(), full.pipeline());
    }

    #[test]
    fn version_truncation_and_corruption_are_rejected() {
        let (p, _) = tiny_setup(1);
        let t = Trainer::new(p, cfg(0)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        t.save(&path).unwrap();
        let good = std::fs::read(&path).unwrap();

        let mut wrong = good.clone();
        wrong[4] = 9;
        std::fs::write(&path, &wrong).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Incompatible(_))));

        std::fs::write(&path, &good[..good.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Integrity(_))));

        let mut flipped = good.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 1;
        std::fs::write(&path, &flipped).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Integrity(_))));

        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Incompatible(_))));
    }
}
