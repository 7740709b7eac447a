//! JSON-lines dataset dumps. Floats are written in shortest round-trip form
//! and parsed with exact rounding, so a dump reloads bit-for-bit.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tasks::{ChainSample, CotInstance, LatentTask, ShiftSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSplit {
    Train,
    TestId,
    TestOod,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub task_id: usize,
    pub theta: LatentTask,
    pub zeta_list: Vec<f64>,
    pub chains: Vec<ChainSample>,
    pub prompt: Vec<f64>,
    pub split: DataSplit,
    pub shift_spec: Option<ShiftSpec>,
}

impl DatasetRecord {
    pub fn from_instance(task_id: usize, inst: &CotInstance, split: DataSplit, shift_spec: Option<ShiftSpec>) -> Self {
        let mut chains = inst.demos.clone();
        chains.push(inst.test.clone());
        DatasetRecord {
            task_id,
            theta: inst.theta.clone(),
            zeta_list: inst.zetas(),
            chains,
            prompt: inst.prompt().scalars,
            split,
            shift_spec,
        }
    }

    pub fn instance(&self) -> CotInstance {
        let (test, demos) = self.chains.split_last().expect("record holds the test chain");
        CotInstance { theta: self.theta.clone(), demos: demos.to_vec(), test: test.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanCalcRecord {
    pub interval: u32,
    pub split: DataSplit,
    pub x: [f64; 4],
    pub y0: f64,
    pub y1: f64,
}

pub fn write_jsonl<T: Serialize, W: Write>(records: &[T], mut w: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>, R: BufRead>(r: R) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
