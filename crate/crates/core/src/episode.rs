//! Episode logs: one record per 5-minute control step.
//!
//! CSV form uses the header `t_min,cgm,insulin_rate,bolus,carbs,announced,day`
//! with a JSON sidecar holding the patient description, true meals and per-step flags.
//! The compact binary form stores the same content as container columns.

use std::fs;
use std::path::{Path, PathBuf};

use glyrl_nn::container::{Container, Record, TensorData};
use serde::{Deserialize, Serialize};

use crate::{CoreError, Result};

pub const STEP_MINUTES: u32 = 5;
pub const STEPS_PER_DAY: usize = 288;
pub const MINUTES_PER_DAY: u32 = 1440;
pub const CSV_HEADER: &str = "t_min,cgm,insulin_rate,bolus,carbs,announced,day";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Minutes since the episode start (episodes start at midnight).
    pub t_min: u32,
    pub cgm: f64,
    /// Delivered rate over the step, U/h.
    pub insulin_rate: f64,
    /// Bolus delivered at the start of the step, U.
    pub bolus: f64,
    /// Carbohydrates announced to the controller at this step, g.
    pub carbs: f64,
    pub announced: bool,
    pub day: u32,
}

impl StepRecord {
    /// Total insulin of the step expressed as a rate over 5 minutes, U/h.
    pub fn total_rate(&self) -> f64 {
        self.insulin_rate + self.bolus * (60.0 / STEP_MINUTES as f64)
    }

    /// Units delivered during the step.
    pub fn units(&self) -> f64 {
        self.insulin_rate * STEP_MINUTES as f64 / 60.0 + self.bolus
    }

    pub fn minute_of_day(&self) -> u32 {
        self.t_min % MINUTES_PER_DAY
    }
}

/// Per-step bookkeeping that is not part of the CSV columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StepFlags {
    pub closed_loop: bool,
    pub action_clamped: bool,
    pub bolus_clamped: bool,
    pub manual_modified: bool,
    pub manual_bolus: bool,
    pub hypo_risk: bool,
    pub safety_override: bool,
}

impl StepFlags {
    fn to_bits(self) -> u8 {
        u8::from(self.closed_loop)
            | u8::from(self.action_clamped) << 1
            | u8::from(self.bolus_clamped) << 2
            | u8::from(self.manual_modified) << 3
            | u8::from(self.manual_bolus) << 4
            | u8::from(self.hypo_risk) << 5
            | u8::from(self.safety_override) << 6
    }

    fn from_bits(b: u8) -> Self {
        Self {
            closed_loop: b & 1 != 0,
            action_clamped: b & 2 != 0,
            bolus_clamped: b & 4 != 0,
            manual_modified: b & 8 != 0,
            manual_bolus: b & 16 != 0,
            hypo_risk: b & 32 != 0,
            safety_override: b & 64 != 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MealEvent {
    pub t_min: u32,
    pub carbs: f64,
    pub announced: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMeta {
    pub patient_id: u32,
    pub weight: f64,
    /// Patient's nominal total daily dose, used before 24 h of history exist.
    pub nominal_tdd: f64,
    /// Free-form patient description (the simulator stores its parameter set here).
    #[serde(default)]
    pub patient: serde_json::Value,
    #[serde(default)]
    pub meals: Vec<MealEvent>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLog {
    pub meta: EpisodeMeta,
    pub records: Vec<StepRecord>,
    pub flags: Vec<StepFlags>,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    meta: EpisodeMeta,
    /// Flag bitfields, one per record.
    flags: Vec<u8>,
}

impl EpisodeLog {
    pub fn new(meta: EpisodeMeta) -> Self {
        Self {
            meta,
            records: Vec::new(),
            flags: Vec::new(),
        }
    }

    pub fn push(&mut self, record: StepRecord, flags: StepFlags) {
        self.records.push(record);
        self.flags.push(flags);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn cgm(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.cgm).collect()
    }

    pub fn days(&self) -> Vec<u32> {
        let mut d: Vec<u32> = self.records.iter().map(|r| r.day).collect();
        d.dedup();
        d
    }

    /// CGM readings of each day, in order.
    pub fn cgm_by_day(&self) -> Vec<(u32, Vec<f64>)> {
        let mut out: Vec<(u32, Vec<f64>)> = Vec::new();
        for r in &self.records {
            match out.last_mut() {
                Some((d, v)) if *d == r.day => v.push(r.cgm),
                _ => out.push((r.day, vec![r.cgm])),
            }
        }
        out
    }

    /// Fraction of steps per day that ran in closed loop.
    pub fn closed_loop_coverage(&self) -> Vec<(u32, f64)> {
        let mut out: Vec<(u32, usize, usize)> = Vec::new();
        for (r, f) in self.records.iter().zip(&self.flags) {
            match out.last_mut() {
                Some((d, n, k)) if *d == r.day => {
                    *n += 1;
                    *k += usize::from(f.closed_loop);
                }
                _ => out.push((r.day, 1, usize::from(f.closed_loop))),
            }
        }
        out.into_iter().map(|(d, n, k)| (d, k as f64 / n as f64)).collect()
    }

    /// Records with `from <= index < to`, keeping metadata.
    pub fn slice(&self, from: usize, to: usize) -> EpisodeLog {
        EpisodeLog {
            meta: self.meta.clone(),
            records: self.records[from..to].to_vec(),
            flags: self.flags[from..to].to_vec(),
        }
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        w.write_record(CSV_HEADER.split(','))?;
        for r in &self.records {
            w.write_record([
                r.t_min.to_string(),
                fmt_f64(r.cgm),
                fmt_f64(r.insulin_rate),
                fmt_f64(r.bolus),
                fmt_f64(r.carbs),
                u8::from(r.announced).to_string(),
                r.day.to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| CoreError::Format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| CoreError::Format(e.to_string()))
    }

    pub fn sidecar_json(&self) -> Result<String> {
        let side = Sidecar {
            meta: self.meta.clone(),
            flags: self.flags.iter().map(|f| f.to_bits()).collect(),
        };
        Ok(serde_json::to_string_pretty(&side)?)
    }

    /// Parse the CSV columns. Without a sidecar every step is taken as closed loop.
    pub fn from_csv_str(csv_text: &str, sidecar: Option<&str>) -> Result<Self> {
        let mut rd = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(csv_text.as_bytes());
        let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
        if header.join(",") != CSV_HEADER {
            return Err(CoreError::Format(format!(
                "unexpected CSV header `{}`, expected `{CSV_HEADER}`",
                header.join(",")
            )));
        }
        let mut records = Vec::new();
        for (line, row) in rd.records().enumerate() {
            let row = row?;
            let field = |i: usize| -> Result<&str> {
                row.get(i)
                    .ok_or_else(|| CoreError::Format(format!("row {}: missing column {i}", line + 2)))
            };
            let num = |i: usize| -> Result<f64> {
                field(i)?
                    .parse::<f64>()
                    .map_err(|e| CoreError::Format(format!("row {}: {e}", line + 2)))
            };
            let int = |i: usize| -> Result<u32> {
                field(i)?
                    .parse::<u32>()
                    .map_err(|e| CoreError::Format(format!("row {}: {e}", line + 2)))
            };
            records.push(StepRecord {
                t_min: int(0)?,
                cgm: num(1)?,
                insulin_rate: num(2)?,
                bolus: num(3)?,
                carbs: num(4)?,
                announced: int(5)? != 0,
                day: int(6)?,
            });
        }
        let (meta, flags) = match sidecar {
            Some(text) => {
                let side: Sidecar = serde_json::from_str(text)?;
                if side.flags.len() != records.len() {
                    return Err(CoreError::Format(format!(
                        "sidecar has {} flag entries for {} records",
                        side.flags.len(),
                        records.len()
                    )));
                }
                (side.meta, side.flags.into_iter().map(StepFlags::from_bits).collect())
            }
            None => (
                EpisodeMeta {
                    patient_id: 0,
                    weight: 77.0,
                    nominal_tdd: 44.0,
                    patient: serde_json::Value::Null,
                    meals: Vec::new(),
                },
                vec![
                    StepFlags {
                        closed_loop: true,
                        ..StepFlags::default()
                    };
                    records.len()
                ],
            ),
        };
        Ok(Self { meta, records, flags })
    }

    /// Write `<path>` (CSV) and `<path>.json` (sidecar).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_csv_string()?.as_bytes())?;
        write_file(&sidecar_path(path), self.sidecar_json()?.as_bytes())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = read_file(path)?;
        let side = sidecar_path(path);
        let side_text = if side.exists() { Some(read_file(&side)?) } else { None };
        Self::from_csv_str(&text, side_text.as_deref())
    }

    pub fn to_container(&self) -> Result<Container> {
        let side = Sidecar {
            meta: self.meta.clone(),
            flags: Vec::new(),
        };
        let mut c = Container::new(serde_json::to_string(&side)?);
        let n = self.records.len();
        let col = |f: fn(&StepRecord) -> f64| -> Vec<f64> { self.records.iter().map(f).collect() };
        c.push(Record::new("t_min", vec![n], TensorData::U32(self.records.iter().map(|r| r.t_min).collect())));
        c.push(Record::new("cgm", vec![n], TensorData::F64(col(|r| r.cgm))));
        c.push(Record::new("insulin_rate", vec![n], TensorData::F64(col(|r| r.insulin_rate))));
        c.push(Record::new("bolus", vec![n], TensorData::F64(col(|r| r.bolus))));
        c.push(Record::new("carbs", vec![n], TensorData::F64(col(|r| r.carbs))));
        c.push(Record::new(
            "announced",
            vec![n],
            TensorData::U8(self.records.iter().map(|r| u8::from(r.announced)).collect()),
        ));
        c.push(Record::new("day", vec![n], TensorData::U32(self.records.iter().map(|r| r.day).collect())));
        c.push(Record::new(
            "flags",
            vec![n],
            TensorData::U8(self.flags.iter().map(|f| f.to_bits()).collect()),
        ));
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let side: Sidecar = serde_json::from_str(&c.manifest)?;
        let t = c.get("t_min")?.as_u32()?;
        let cgm = c.get("cgm")?.as_f64()?;
        let rate = c.get("insulin_rate")?.as_f64()?;
        let bolus = c.get("bolus")?.as_f64()?;
        let carbs = c.get("carbs")?.as_f64()?;
        let ann = c.get("announced")?.as_u8()?;
        let day = c.get("day")?.as_u32()?;
        let flags = c.get("flags")?.as_u8()?;
        let n = t.len();
        if [cgm.len(), rate.len(), bolus.len(), carbs.len(), ann.len(), day.len(), flags.len()]
            .iter()
            .any(|l| *l != n)
        {
            return Err(CoreError::Format("episode columns have different lengths".into()));
        }
        let records = (0..n)
            .map(|i| StepRecord {
                t_min: t[i],
                cgm: cgm[i],
                insulin_rate: rate[i],
                bolus: bolus[i],
                carbs: carbs[i],
                announced: ann[i] != 0,
                day: day[i],
            })
            .collect();
        Ok(Self {
            meta: side.meta,
            records,
            flags: flags.iter().map(|b| StepFlags::from_bits(*b)).collect(),
        })
    }
}

/// Shortest representation that parses back to the same `f64`.
fn fmt_f64(x: f64) -> String {
    format!("{x}")
}

pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    let mut s = csv_path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    glyrl_nn::container::write_atomic(path, bytes).map_err(CoreError::from)
}

pub(crate) fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| CoreError::Io {
        path: path.display().to_string(),
        source,
    })
}
