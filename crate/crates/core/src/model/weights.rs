//! Versioned text weights file for a backbone, its adapters, and the
//! prototype store.
//!
//! ```text
//! dpta-weights 1
//! backbone <blocks> <frozen 0|1>
//! block <in> <out>
//! <in lines of out values>           weight, row-major
//! <1 line of out values>             bias
//! adapters <count>
//! adapter <task_id> <blocks>
//! ablock <block index> <h> <r>
//! <h lines of r values>              down-projection
//! <r lines of h values>              up-projection
//! prototypes <classes> <h>
//! class <id> <task_id>
//! <h values>                         raw prototype
//! <h values>                         augmented prototype
//! end
//! ```
//!
//! Values are whitespace-separated decimals in Rust's shortest round-trip
//! exponent form, so a write-then-read cycle is bit-exact. Adapters are
//! always stored frozen.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Adapter, AdapterBlock, AdapterRegistry, Backbone, Block};
use crate::numerics::Matrix;
use crate::prototypes::DualPrototypeStore;

pub const WEIGHTS_VERSION: u32 = 1;
const MAGIC: &str = "dpta-weights";

/// Everything a trained run needs to make predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub backbone: Backbone,
    pub adapters: AdapterRegistry,
    pub store: DualPrototypeStore,
}

fn push_row(out: &mut String, row: &[f64]) {
    let mut first = true;
    for v in row {
        if !first {
            out.push(' ');
        }
        first = false;
        write!(out, "{v:e}").unwrap();
    }
    out.push('\n');
}

fn push_matrix(out: &mut String, m: &Matrix) {
    for row in m.iter_rows() {
        push_row(out, row);
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> String {
    let mut out = format!("{MAGIC} {WEIGHTS_VERSION}\n");
    let b = &ck.backbone;
    writeln!(out, "backbone {} {}", b.num_blocks(), u8::from(b.is_frozen())).unwrap();
    for block in b.blocks() {
        writeln!(out, "block {} {}", block.in_dim(), block.out_dim()).unwrap();
        push_matrix(&mut out, &block.weight);
        push_row(&mut out, &block.bias);
    }
    writeln!(out, "adapters {}", ck.adapters.len()).unwrap();
    for a in ck.adapters.iter() {
        writeln!(out, "adapter {} {}", a.task_id(), a.blocks().len()).unwrap();
        for ab in a.blocks() {
            writeln!(out, "ablock {} {} {}", ab.block, ab.down.rows(), ab.down.cols()).unwrap();
            push_matrix(&mut out, &ab.down);
            push_matrix(&mut out, &ab.up);
        }
    }
    let h = ck.store.raw().values().next().map_or(0, Vec::len);
    writeln!(out, "prototypes {} {h}", ck.store.len()).unwrap();
    for (c, raw) in ck.store.raw() {
        writeln!(out, "class {c} {}", ck.store.task_of()[c]).unwrap();
        push_row(&mut out, raw);
        push_row(&mut out, &ck.store.aug()[c]);
    }
    out.push_str("end\n");
    out
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    line: usize,
}

impl<'a> Lines<'a> {
    fn next_line(&mut self) -> Result<&'a str> {
        loop {
            let (i, l) = self.inner.next().ok_or(Error::Parse {
                line: self.line + 1,
                msg: "unexpected end of file".into(),
            })?;
            self.line = i + 1;
            if !l.trim().is_empty() {
                return Ok(l);
            }
        }
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse { line: self.line, msg: msg.into() }
    }

    /// A tagged header line `tag n1 n2 ...` with exactly `arity` integers.
    fn header(&mut self, tag: &str, arity: usize) -> Result<Vec<usize>> {
        let l = self.next_line()?;
        let mut toks = l.split_whitespace();
        if toks.next() != Some(tag) {
            return Err(self.err(format!("expected `{tag}`")));
        }
        let nums = toks
            .map(|t| t.parse::<usize>().map_err(|_| self.err(format!("bad integer {t:?}"))))
            .collect::<Result<Vec<_>>>()?;
        if nums.len() != arity {
            return Err(self.err(format!("`{tag}` takes {arity} integers")));
        }
        Ok(nums)
    }

    fn row(&mut self, len: usize) -> Result<Vec<f64>> {
        let l = self.next_line()?;
        let vals = l
            .split_whitespace()
            .map(|t| match t.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(self.err(format!("bad value {t:?}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        if vals.len() != len {
            return Err(self.err(format!("expected {len} values, found {}", vals.len())));
        }
        Ok(vals)
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            data.extend(self.row(cols)?);
        }
        Matrix::from_vec(rows, cols, data)
    }
}

pub fn decode_checkpoint(text: &str) -> Result<Checkpoint> {
    let mut p = Lines { inner: text.lines().enumerate(), line: 0 };
    let first = p.next_line()?;
    let mut toks = first.split_whitespace();
    if toks.next() != Some(MAGIC) {
        return Err(p.err("not a weights file"));
    }
    match toks.next().and_then(|v| v.parse::<u32>().ok()) {
        Some(WEIGHTS_VERSION) => {}
        other => return Err(p.err(format!("unsupported version {other:?}"))),
    }

    let hdr = p.header("backbone", 2)?;
    let mut blocks = Vec::with_capacity(hdr[0]);
    for _ in 0..hdr[0] {
        let d = p.header("block", 2)?;
        let weight = p.matrix(d[0], d[1])?;
        let bias = p.row(d[1])?;
        blocks.push(Block { weight, bias });
    }
    let backbone = Backbone::from_blocks(blocks, hdr[1] == 1)?;

    let count = p.header("adapters", 1)?[0];
    let mut adapters = AdapterRegistry::new();
    for _ in 0..count {
        let a = p.header("adapter", 2)?;
        let mut ablocks = Vec::with_capacity(a[1]);
        for _ in 0..a[1] {
            let b = p.header("ablock", 3)?;
            let down = p.matrix(b[1], b[2])?;
            let up = p.matrix(b[2], b[1])?;
            ablocks.push(AdapterBlock { block: b[0], down, up });
        }
        let adapter = Adapter::from_blocks(a[0], ablocks, true)?;
        adapter.check_fits(&backbone)?;
        adapters.insert(adapter)?;
    }

    let ph = p.header("prototypes", 2)?;
    let (mut raw, mut aug, mut task_of) = (BTreeMap::new(), BTreeMap::new(), BTreeMap::new());
    for _ in 0..ph[0] {
        let c = p.header("class", 2)?;
        raw.insert(c[0], p.row(ph[1])?);
        aug.insert(c[0], p.row(ph[1])?);
        task_of.insert(c[0], c[1]);
    }
    if p.next_line()?.trim() != "end" {
        return Err(p.err("expected `end`"));
    }
    let store = DualPrototypeStore::from_parts(raw, aug, task_of)?;
    Ok(Checkpoint { backbone, adapters, store })
}

pub fn save_checkpoint(path: impl AsRef<Path>, ck: &Checkpoint) -> Result<()> {
    std::fs::write(path, encode_checkpoint(ck))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode_checkpoint(&std::fs::read_to_string(path)?)
}
