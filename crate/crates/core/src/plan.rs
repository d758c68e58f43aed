//! Disk cost of block-wise attention transfer with stored hidden states.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockPlan {
    pub tokens: u64,
    pub dim: u64,
    pub layers: u64,
    pub block: u64,
    pub precision_bytes: u64,
    pub blocks: u64,
    pub layers_per_block: u64,
    /// `p·T·d·(L/k)`: one stored activation tensor per block.
    pub disk_bytes: u128,
    /// `p·T·d·(L/k − 1)`: only the tensors passed between blocks.
    pub boundary_bytes: u128,
}

pub const DEFAULT_PRECISION_BYTES: u64 = 2;

const NOTE: &str = "disk_bytes stores one activation tensor per block; boundary_bytes counts only the tensors between blocks, which is 0 for joint training";

/// Storage plan for `layers` split into blocks of `block`.
pub fn plan_blockwise_storage(tokens: u64, dim: u64, layers: u64, block: u64, precision_bytes: u64) -> Result<BlockPlan> {
    if tokens == 0 || dim == 0 || layers == 0 || precision_bytes == 0 {
        return Err(Error::InvalidConfig("tokens, dim, layers and precision must be positive".into()));
    }
    if block == 0 || layers % block != 0 {
        return Err(Error::IndivisibleBlocks {
            layers: layers as usize,
            block: block as usize,
        });
    }
    let blocks = layers / block;
    let per_block = (precision_bytes as u128)
        .checked_mul(tokens as u128)
        .and_then(|v| v.checked_mul(dim as u128))
        .ok_or(Error::Overflow("storage plan"))?;
    let disk_bytes = per_block.checked_mul(blocks as u128).ok_or(Error::Overflow("storage plan"))?;
    Ok(BlockPlan {
        tokens,
        dim,
        layers,
        block,
        precision_bytes,
        blocks,
        layers_per_block: block,
        disk_bytes,
        boundary_bytes: disk_bytes - per_block,
    })
}

/// Decimal units, one digit after the point: `206.4 TB`.
pub fn human_bytes(bytes: u128) -> String {
    const UNITS: [&str; 7] = ["B", "KB", "MB", "GB", "TB", "PB", "EB"];
    let mut unit = 0;
    let mut scale = 1u128;
    while unit + 1 < UNITS.len() && bytes >= scale * 1000 {
        scale *= 1000;
        unit += 1;
    }
    if unit == 0 {
        return format!("{bytes} B");
    }
    // round half up at one decimal in exact integer arithmetic
    let tenths = (bytes * 10 + scale / 2) / scale;
    format!("{}.{} {}", tenths / 10, tenths % 10, UNITS[unit])
}

impl BlockPlan {
    /// `key=value` lines; [`BlockPlan::parse_report`] reads them back.
    pub fn report(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: &dyn std::fmt::Display| writeln!(s, "{k}={v}").expect("write to string");
        kv("tokens", &self.tokens);
        kv("dim", &self.dim);
        kv("layers", &self.layers);
        kv("block", &self.block);
        kv("precision_bytes", &self.precision_bytes);
        kv("blocks", &self.blocks);
        kv("layers_per_block", &self.layers_per_block);
        kv("disk_bytes", &self.disk_bytes);
        kv("disk_human", &human_bytes(self.disk_bytes));
        kv("boundary_bytes", &self.boundary_bytes);
        kv("boundary_human", &human_bytes(self.boundary_bytes));
        kv("note", &NOTE);
        s
    }

    /// Rebuilds a plan from its report, checking the derived fields.
    pub fn parse_report(text: &str) -> Result<Self> {
        let fields: HashMap<&str, &str> = text
            .lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.trim(), v.trim()))
            .collect();
        let get = |k: &str| -> Result<u128> {
            fields
                .get(k)
                .ok_or_else(|| Error::BadConfig(format!("plan report lacks {k}")))?
                .parse()
                .map_err(|_| Error::BadConfig(format!("plan report field {k} is not an integer")))
        };
        let small = |k: &str| -> Result<u64> {
            u64::try_from(get(k)?).map_err(|_| Error::BadConfig(format!("plan report field {k} is too large")))
        };
        let plan = plan_blockwise_storage(
            small("tokens")?,
            small("dim")?,
            small("layers")?,
            small("block")?,
            small("precision_bytes")?,
        )?;
        if get("disk_bytes")? != plan.disk_bytes || get("boundary_bytes")? != plan.boundary_bytes {
            return Err(Error::BadConfig("plan report totals disagree with its inputs".into()));
        }
        Ok(plan)
    }
}
