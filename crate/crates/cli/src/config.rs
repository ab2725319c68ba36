//! `key=value` configuration file.
//!
//! Blank lines and lines starting with `#` are ignored. Sizes accept the
//! suffixes `K`, `M`, `G` (powers of two, optional trailing `iB` or `B`).

use std::path::Path;

use slicefs::client::DEFAULT_REGION_SIZE;
use slicefs::{Error, FsConfig, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub region_size: u64,
    pub replication: u8,
    pub gc_high: f64,
    pub gc_low: f64,
    pub backing_files: usize,
    pub coord: Option<String>,
    pub meta: Option<String>,
    /// Storage servers in an embedded cluster.
    pub servers: usize,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            region_size: DEFAULT_REGION_SIZE,
            replication: 2,
            gc_high: 0.4,
            gc_low: 0.2,
            backing_files: 8,
            coord: None,
            meta: None,
            servers: 4,
        }
    }
}

pub fn parse_size(s: &str) -> Result<u64> {
    let t = s.trim();
    let t = t.strip_suffix("iB").or_else(|| t.strip_suffix('B')).unwrap_or(t);
    let (num, shift) = match t.chars().last() {
        Some('K' | 'k') => (&t[..t.len() - 1], 10),
        Some('M' | 'm') => (&t[..t.len() - 1], 20),
        Some('G' | 'g') => (&t[..t.len() - 1], 30),
        _ => (t, 0),
    };
    let n: u64 = num.trim().parse().map_err(|_| Error::invalid(format!("bad size {s:?}")))?;
    n.checked_mul(1 << shift).ok_or_else(|| Error::invalid(format!("size {s:?} overflows")))
}

impl Config {
    pub fn parse(text: &str) -> Result<Config> {
        let mut c = Config::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("line {}: expected key=value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            let bad = |what: &str| Error::invalid(format!("line {}: bad {what} {v:?}", n + 1));
            match k {
                "region_size" => c.region_size = parse_size(v)?,
                "replication" => c.replication = v.parse().map_err(|_| bad("replication"))?,
                "gc_high" => c.gc_high = v.parse().map_err(|_| bad("gc_high"))?,
                "gc_low" => c.gc_low = v.parse().map_err(|_| bad("gc_low"))?,
                "backing_files" => c.backing_files = v.parse().map_err(|_| bad("backing_files"))?,
                "coord" => c.coord = Some(v.to_string()),
                "meta" => c.meta = Some(v.to_string()),
                "servers" => c.servers = v.parse().map_err(|_| bad("servers"))?,
                _ => return Err(Error::invalid(format!("line {}: unknown key {k:?}", n + 1))),
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Config> {
        Config::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.region_size == 0 {
            return Err(Error::invalid("region_size must be positive"));
        }
        if self.replication == 0 {
            return Err(Error::invalid("replication must be positive"));
        }
        if !(0.0..=1.0).contains(&self.gc_low) || !(0.0..=1.0).contains(&self.gc_high) || self.gc_low > self.gc_high {
            return Err(Error::invalid("need 0 <= gc_low <= gc_high <= 1"));
        }
        if self.backing_files == 0 || self.servers == 0 {
            return Err(Error::invalid("backing_files and servers must be positive"));
        }
        Ok(())
    }

    pub fn fs(&self) -> FsConfig {
        FsConfig { region_size: self.region_size, replication: self.replication }
    }
}
