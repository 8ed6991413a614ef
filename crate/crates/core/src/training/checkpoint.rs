//! Checkpoint files: a `key = value` text header ended by `end_header`,
//! followed by the parameters as little-endian `f64`.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::heads::{AvgDriftHead, ConsistencyHead, DenoiserHead, VelocityHead};
use crate::numcore::{Activation, MlpArch, NetParams};
use crate::schedule::{Schedule, ScheduleKind};

use super::trainer::Stage;

const MAGIC: &str = "flowmap-checkpoint v1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub schedule: Schedule,
    pub sigma_data: f64,
    pub seed: u64,
    pub step: usize,
    pub params: NetParams,
}

fn fmt_list(v: &[usize]) -> String {
    v.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(",")
}

impl Checkpoint {
    pub fn header(&self) -> Vec<(String, String)> {
        let a = &self.params.arch;
        vec![
            ("stage".into(), self.stage.name().into()),
            ("arch.input_dim".into(), a.input_dim.to_string()),
            ("arch.time_inputs".into(), a.time_inputs.to_string()),
            ("arch.hidden".into(), fmt_list(&a.hidden_widths)),
            ("arch.output_dim".into(), a.output_dim.to_string()),
            ("arch.activation".into(), a.activation.name().into()),
            ("schedule.kind".into(), self.schedule.kind.name().into()),
            ("schedule.t_min".into(), self.schedule.t_min.to_string()),
            ("schedule.t_max".into(), self.schedule.t_max.to_string()),
            ("schedule.rho".into(), self.schedule.rho.to_string()),
            ("sigma_data".into(), self.sigma_data.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("step".into(), self.step.to_string()),
            ("param_count".into(), self.params.len().to_string()),
        ]
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{MAGIC}")?;
        for (k, v) in self.header() {
            writeln!(w, "{k} = {v}")?;
        }
        writeln!(w, "end_header")?;
        let mut block = Vec::with_capacity(8 * self.params.len());
        for v in &self.params.values {
            block.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&block)?;
        w.flush()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to memory");
        out
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut line = String::new();
        let next_line = |r: &mut BufReader<R>, line: &mut String| -> Result<()> {
            line.clear();
            let n = r.read_line(line).map_err(|e| Error::Format(e.to_string()))?;
            if n == 0 {
                return Err(Error::Format("checkpoint header ended early".into()));
            }
            Ok(())
        };
        next_line(&mut r, &mut line)?;
        if line.trim_end() != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let mut map = BTreeMap::new();
        loop {
            next_line(&mut r, &mut line)?;
            let l = line.trim_end();
            if l == "end_header" {
                break;
            }
            let (k, v) = l
                .split_once(" = ")
                .ok_or_else(|| Error::Format(format!("bad header line `{l}`")))?;
            map.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| map.get(k).ok_or_else(|| Error::Format(format!("header lacks `{k}`")));
        fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Format(format!("bad value for `{k}`: `{v}`")))
        }
        let hidden = get("arch.hidden")?
            .split(',')
            .map(|w| num::<usize>("arch.hidden", w))
            .collect::<Result<Vec<_>>>()?;
        let arch = MlpArch::new(
            num("arch.input_dim", get("arch.input_dim")?)?,
            num("arch.time_inputs", get("arch.time_inputs")?)?,
            hidden,
            num("arch.output_dim", get("arch.output_dim")?)?,
            Activation::parse(get("arch.activation")?)?,
        )?;
        let schedule = Schedule::new(
            ScheduleKind::parse(get("schedule.kind")?)?,
            num("schedule.t_min", get("schedule.t_min")?)?,
            num("schedule.t_max", get("schedule.t_max")?)?,
            num("schedule.rho", get("schedule.rho")?)?,
        )?;
        let count: usize = num("param_count", get("param_count")?)?;
        if count != arch.param_count() {
            return Err(Error::Format(format!(
                "param_count {count} does not match architecture ({})",
                arch.param_count()
            )));
        }
        let mut block = Vec::new();
        r.read_to_end(&mut block).map_err(|e| Error::Format(e.to_string()))?;
        if block.len() != 8 * count {
            return Err(Error::Format(format!(
                "parameter block has {} bytes, expected {}",
                block.len(),
                8 * count
            )));
        }
        let values = block
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Ok(Self {
            stage: Stage::parse(get("stage")?)?,
            schedule,
            sigma_data: num("sigma_data", get("sigma_data")?)?,
            seed: num("seed", get("seed")?)?,
            step: num("step", get("step")?)?,
            params: NetParams::new(arch, values)?,
        })
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        Self::read_from(f)
    }

    pub fn denoiser(&self) -> Result<DenoiserHead> {
        DenoiserHead::new(self.params.clone(), self.schedule, self.sigma_data)
    }

    pub fn consistency(&self) -> Result<ConsistencyHead> {
        ConsistencyHead::new(self.params.clone(), self.schedule, self.sigma_data)
    }

    pub fn velocity(&self) -> Result<VelocityHead> {
        VelocityHead::new(self.params.clone(), self.schedule)
    }

    pub fn avgdrift(&self) -> Result<AvgDriftHead> {
        AvgDriftHead::new(self.params.clone(), self.schedule)
    }
}
