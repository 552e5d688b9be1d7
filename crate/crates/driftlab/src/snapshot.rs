//! Versioned text snapshots for models, importance maps and prototype
//! memories.
//!
//! One format serves all three: a magic line, a `kind` line, small
//! key/value headers, then ordered `tensor <name> <rank> <dims...>`
//! records each followed by one line of space-separated values. Floats
//! are printed with Rust's shortest round-trip formatting, so
//! write-then-read restores bit-identical values and two writes of the
//! same state are byte-identical.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::embedding::EmbeddingModel;
use crate::error::{Error, Result};
use crate::net::{Activation, MlpNet};
use crate::params::ParamSet;
use crate::regularizer::{Estimator, ImportanceMap};
use crate::tensor::{Real, Tensor};
use crate::translation::{ProtoEntry, PrototypeMemory};

const MAGIC: &str = "driftlab snapshot v1";

fn fmt_values<T: Real>(t: &Tensor<T>) -> String {
    let mut s = String::new();
    for (i, v) in t.data().iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        s.push_str(&format!("{v}"));
    }
    s
}

fn write_tensor<T: Real, W: Write>(w: &mut W, name: &str, t: &Tensor<T>) -> Result<()> {
    write!(w, "tensor {name} {}", t.shape().len())?;
    for d in t.shape() {
        write!(w, " {d}")?;
    }
    writeln!(w)?;
    writeln!(w, "{}", fmt_values(t))?;
    Ok(())
}

struct LineReader<R: BufRead> {
    inner: R,
    line_no: usize,
}

impl<R: BufRead> LineReader<R> {
    fn new(inner: R) -> Self {
        LineReader { inner, line_no: 0 }
    }

    fn next_line(&mut self) -> Result<String> {
        let mut buf = String::new();
        let n = self.inner.read_line(&mut buf)?;
        self.line_no += 1;
        if n == 0 {
            return Err(Error::Snapshot(format!(
                "unexpected end of file at line {}",
                self.line_no
            )));
        }
        Ok(buf.trim_end_matches(['\n', '\r']).to_string())
    }

    fn expect(&mut self, want: &str) -> Result<()> {
        let got = self.next_line()?;
        if got != want {
            return Err(Error::Snapshot(format!(
                "line {}: expected `{want}`, found `{got}`",
                self.line_no
            )));
        }
        Ok(())
    }

    /// Reads `key value` and returns the value.
    fn keyed(&mut self, key: &str) -> Result<String> {
        let got = self.next_line()?;
        match got.strip_prefix(key).and_then(|r| r.strip_prefix(' ')) {
            Some(v) if !v.is_empty() => Ok(v.to_string()),
            _ => Err(Error::Snapshot(format!(
                "line {}: expected `{key} <value>`, found `{got}`",
                self.line_no
            ))),
        }
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Snapshot(format!("line {}: {}", self.line_no, msg.into()))
    }
}

fn parse_values<T: Real>(line: &str, expect: usize, where_: &str) -> Result<Vec<T>> {
    let mut out = Vec::with_capacity(expect);
    for tok in line.split_whitespace() {
        let v: f64 = tok
            .parse()
            .map_err(|_| Error::Snapshot(format!("{where_}: bad float `{tok}`")))?;
        out.push(T::from_f64(v));
    }
    if out.len() != expect {
        return Err(Error::Snapshot(format!(
            "{where_}: expected {expect} values, found {}",
            out.len()
        )));
    }
    Ok(out)
}

fn read_tensor<T: Real, R: BufRead>(r: &mut LineReader<R>) -> Result<(String, Tensor<T>)> {
    let header = r.next_line()?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some("tensor") {
        return Err(r.err(format!("expected a tensor record, found `{header}`")));
    }
    let name = parts
        .next()
        .ok_or_else(|| r.err("tensor record missing a name"))?
        .to_string();
    let rank: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| r.err("tensor record missing a rank"))?;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| r.err("tensor record missing a dimension"))?;
        shape.push(d);
    }
    if parts.next().is_some() {
        return Err(r.err("trailing fields on tensor record"));
    }
    let count: usize = shape.iter().product();
    let values = r.next_line()?;
    let data = parse_values::<T>(&values, count, &format!("tensor {name}"))?;
    Ok((name, Tensor::from_vec(&shape, data)?))
}

fn open_header<R: BufRead>(r: &mut LineReader<R>, kind: &str, dtype: &str) -> Result<()> {
    r.expect(MAGIC)?;
    let got_kind = r.keyed("kind")?;
    if got_kind != kind {
        return Err(r.err(format!("snapshot holds `{got_kind}`, expected `{kind}`")));
    }
    let got_dtype = r.keyed("dtype")?;
    if got_dtype != dtype {
        return Err(r.err(format!(
            "snapshot stores dtype {got_dtype}, requested {dtype}"
        )));
    }
    Ok(())
}

fn activation_name(a: Activation) -> &'static str {
    match a {
        Activation::Relu => "relu",
        Activation::Tanh => "tanh",
        Activation::Identity => "identity",
    }
}

fn parse_activation(s: &str) -> Result<Activation> {
    match s {
        "relu" => Ok(Activation::Relu),
        "tanh" => Ok(Activation::Tanh),
        "identity" => Ok(Activation::Identity),
        other => Err(Error::Snapshot(format!("unknown activation `{other}`"))),
    }
}

pub fn write_model<T: Real, W: Write>(w: &mut W, model: &EmbeddingModel<T>) -> Result<()> {
    writeln!(w, "{MAGIC}")?;
    writeln!(w, "kind model")?;
    writeln!(w, "dtype {}", T::DTYPE.name())?;
    writeln!(w, "activation {}", activation_name(model.net().activation()))?;
    writeln!(w, "normalize {}", model.normalize_output())?;
    writeln!(w, "tensors {}", model.params().len())?;
    for (name, t) in model.params().iter() {
        write_tensor(w, name, t)?;
    }
    writeln!(w, "end")?;
    Ok(())
}

pub fn read_model<T: Real, R: Read>(r: R) -> Result<EmbeddingModel<T>> {
    let mut r = LineReader::new(BufReader::new(r));
    open_header(&mut r, "model", T::DTYPE.name())?;
    let activation = parse_activation(&r.keyed("activation")?)?;
    let normalize = match r.keyed("normalize")?.as_str() {
        "true" => true,
        "false" => false,
        other => return Err(r.err(format!("bad normalize flag `{other}`"))),
    };
    let count: usize = r
        .keyed("tensors")?
        .parse()
        .map_err(|_| r.err("bad tensor count"))?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let (name, t) = read_tensor::<T, _>(&mut r)?;
        params.add(name, t)?;
    }
    r.expect("end")?;
    let net = MlpNet::from_params(activation, params)?;
    Ok(EmbeddingModel::from_net(net, normalize))
}

pub fn write_importance<T: Real, W: Write>(w: &mut W, map: &ImportanceMap<T>) -> Result<()> {
    writeln!(w, "{MAGIC}")?;
    writeln!(w, "kind importance")?;
    writeln!(w, "dtype {}", T::DTYPE.name())?;
    let tag = match map.estimator() {
        Estimator::Fisher => "fisher",
        Estimator::Mas => "mas",
    };
    writeln!(w, "estimator {tag}")?;
    writeln!(w, "tensors {}", map.weights().len())?;
    for (name, t) in map.weights().iter() {
        write_tensor(w, name, t)?;
    }
    writeln!(w, "end")?;
    Ok(())
}

pub fn read_importance<T: Real, R: Read>(r: R) -> Result<ImportanceMap<T>> {
    let mut r = LineReader::new(BufReader::new(r));
    open_header(&mut r, "importance", T::DTYPE.name())?;
    let estimator = match r.keyed("estimator")?.as_str() {
        "fisher" => Estimator::Fisher,
        "mas" => Estimator::Mas,
        other => return Err(r.err(format!("unknown estimator `{other}`"))),
    };
    let count: usize = r
        .keyed("tensors")?
        .parse()
        .map_err(|_| r.err("bad tensor count"))?;
    let mut weights = ParamSet::new();
    for _ in 0..count {
        let (name, t) = read_tensor::<T, _>(&mut r)?;
        weights.add(name, t)?;
    }
    r.expect("end")?;
    ImportanceMap::new(estimator, weights)
}

pub fn write_prototypes<T: Real, W: Write>(w: &mut W, memory: &PrototypeMemory<T>) -> Result<()> {
    writeln!(w, "{MAGIC}")?;
    writeln!(w, "kind prototypes")?;
    writeln!(w, "dtype {}", T::DTYPE.name())?;
    writeln!(w, "entries {}", memory.len())?;
    for (class, entry) in memory.iter() {
        writeln!(w, "proto {class} {}", entry.origin_task)?;
        write_tensor(w, "value", &entry.value)?;
        write_tensor(w, "raw", &entry.raw)?;
    }
    write!(w, "log")?;
    for c in memory.insertion_log() {
        write!(w, " {c}")?;
    }
    writeln!(w)?;
    writeln!(w, "end")?;
    Ok(())
}

pub fn read_prototypes<T: Real, R: Read>(r: R) -> Result<PrototypeMemory<T>> {
    let mut r = LineReader::new(BufReader::new(r));
    open_header(&mut r, "prototypes", T::DTYPE.name())?;
    let count: usize = r
        .keyed("entries")?
        .parse()
        .map_err(|_| r.err("bad entry count"))?;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let head = r.next_line()?;
        let mut parts = head.split_whitespace();
        if parts.next() != Some("proto") {
            return Err(r.err(format!("expected a proto record, found `{head}`")));
        }
        let class: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| r.err("proto record missing a class id"))?;
        let origin: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| r.err("proto record missing an origin task"))?;
        let (vname, value) = read_tensor::<T, _>(&mut r)?;
        let (rname, raw) = read_tensor::<T, _>(&mut r)?;
        if vname != "value" || rname != "raw" {
            return Err(r.err("proto record tensors must be `value` then `raw`"));
        }
        entries.push((
            class,
            ProtoEntry {
                value,
                raw,
                origin_task: origin,
            },
        ));
    }
    let log_line = r.next_line()?;
    let log: Vec<usize> = match log_line.strip_prefix("log") {
        Some(rest) => rest
            .split_whitespace()
            .map(|s| {
                s.parse()
                    .map_err(|_| Error::Snapshot(format!("bad log entry `{s}`")))
            })
            .collect::<Result<_>>()?,
        None => return Err(r.err("missing insertion log")),
    };
    r.expect("end")?;
    PrototypeMemory::restore(entries, log)
}

pub fn save_model<T: Real>(path: &Path, model: &EmbeddingModel<T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_model(&mut w, model)
}

pub fn load_model<T: Real>(path: &Path) -> Result<EmbeddingModel<T>> {
    read_model(File::open(path)?)
}

pub fn save_importance<T: Real>(path: &Path, map: &ImportanceMap<T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_importance(&mut w, map)
}

pub fn load_importance<T: Real>(path: &Path) -> Result<ImportanceMap<T>> {
    read_importance(File::open(path)?)
}

pub fn save_prototypes<T: Real>(path: &Path, memory: &PrototypeMemory<T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_prototypes(&mut w, memory)
}

pub fn load_prototypes<T: Real>(path: &Path) -> Result<PrototypeMemory<T>> {
    read_prototypes(File::open(path)?)
}
