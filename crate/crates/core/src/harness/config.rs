//! Flat `key = value` run configuration.
//!
//! ```text
//! # comments and blank lines are ignored
//! mode = cycles            # verify | cycles | stats | bench | trace
//! extent = 1, 1, 1
//! origin = 0, 0, 0
//! cells = 32, 32, 32
//! workers = 4              # verify accepts a list: 1, 2, 4, 8, 16
//! parcels_per_cell = 20
//! cycles = 10
//! configs = 1000           # verify only
//! seed = 42
//! schedule = sequential    # sequential | reverse | shuffled:N | parallel
//! tie_break = lower-gid    # lower-gid | lower-rank | higher-gid
//! checking = false
//! input = pop.pcls         # replay a snapshot instead of sampling
//! report = out/report.json
//! csv = out/cycles.csv
//! ```

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::domain::Domain;
use crate::engine::EngineOptions;
use crate::error::{Error, Result};
use crate::resolve::DualTieBreak;
use crate::runtime::Schedule;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Verify,
    #[default]
    Cycles,
    Stats,
    Bench,
    Trace,
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s {
            "verify" => Mode::Verify,
            "cycles" => Mode::Cycles,
            "stats" => Mode::Stats,
            "bench" => Mode::Bench,
            "trace" => Mode::Trace,
            _ => return Err(format!("unknown mode {s:?}")),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub mode: Mode,
    pub extent: [f64; 3],
    pub origin: [f64; 3],
    pub cells: [usize; 3],
    pub workers: Vec<usize>,
    pub parcels_per_cell: usize,
    pub cycles: usize,
    pub configs: usize,
    pub seed: u64,
    pub schedule: Schedule,
    pub tie_break: DualTieBreak,
    pub checking: bool,
    pub input: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub csv: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Cycles,
            extent: [1.0; 3],
            origin: [0.0; 3],
            cells: [32; 3],
            workers: vec![1],
            parcels_per_cell: 20,
            cycles: 1,
            configs: 0,
            seed: 0,
            schedule: Schedule::Sequential,
            tie_break: DualTieBreak::LowerGid,
            checking: false,
            input: None,
            report: None,
            csv: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|x| parse(key, x.trim())).collect()
}

fn parse_triple<T: FromStr + Copy>(key: &str, v: &str) -> Result<[T; 3]> {
    let xs: Vec<T> = parse_list(key, v)?;
    match xs[..] {
        [a] => Ok([a; 3]),
        [a, b, c] => Ok([a, b, c]),
        _ => Err(Error::Config(format!("{key}: expected 1 or 3 values"))),
    }
}

impl RunConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "mode" => self.mode = v.parse().map_err(Error::Config)?,
            "extent" => self.extent = parse_triple(key, v)?,
            "origin" => self.origin = parse_triple(key, v)?,
            "cells" => self.cells = parse_triple(key, v)?,
            "workers" => self.workers = parse_list(key, v)?,
            "parcels_per_cell" => self.parcels_per_cell = parse(key, v)?,
            "cycles" => self.cycles = parse(key, v)?,
            "configs" => self.configs = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "schedule" => self.schedule = v.parse().map_err(Error::Config)?,
            "tie_break" => self.tie_break = v.parse().map_err(Error::Config)?,
            "checking" => self.checking = parse(key, v)?,
            "input" => self.input = Some(v.into()),
            "report" => self.report = Some(v.into()),
            "csv" => self.csv = Some(v.into()),
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            c.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cycles == 0 {
            return Err(Error::Config("cycles must be >= 1".into()));
        }
        if self.workers.is_empty() || self.workers.contains(&0) {
            return Err(Error::Config("worker counts must be >= 1".into()));
        }
        if self.parcels_per_cell == 0 {
            return Err(Error::Config("parcels_per_cell must be >= 1".into()));
        }
        self.domain()?;
        Ok(())
    }

    pub fn domain(&self) -> Result<Domain> {
        Domain::new(self.extent, self.origin, self.cells).map_err(|e| Error::Config(e.to_string()))
    }

    /// The worker count used outside verification.
    pub fn primary_workers(&self) -> usize {
        self.workers[0]
    }

    pub fn engine_options(&self) -> EngineOptions {
        EngineOptions {
            schedule: self.schedule,
            checking: self.checking,
            tie_break: self.tie_break,
            trace: self.mode == Mode::Trace,
        }
    }
}
