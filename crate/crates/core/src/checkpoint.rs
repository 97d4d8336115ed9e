//! `ESCK` checkpoint files: named tensors as 32-bit floats plus JSON run metadata.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "ESCK"  version:u16  count:u32
//! count × { name_len:u16  name:utf-8  rank:u8  dims:u32[rank] }
//! payload: f32 values of every entry in manifest order
//! checksum:u64   FNV-1a of the payload bytes
//! meta_len:u32  meta: JSON
//! ```
//!
//! Besides model parameters, a checkpoint written mid-stage holds the teacher
//! (`teacher.` prefix), the teacher center (`state.center`) and the AdamW
//! moments (`optim.m.` / `optim.v.` prefixes), so training resumes exactly.

use std::fs;
use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::{Moments, OptimizerState};
use crate::peft::{AdapterLayout, TrainabilityMask};
use crate::pipeline::{adapter_label, RunState, Stage, StageConfig};
use crate::rng::{RngState, SeededRng};
use crate::ssl::TeacherState;
use crate::tensor::{ParamStore, Tensor};
use crate::vit::ViTConfig;

pub const MAGIC: &[u8; 4] = b"ESCK";
pub const VERSION: u16 = 1;

const TEACHER_PREFIX: &str = "teacher.";
const CENTER_NAME: &str = "state.center";
const M_PREFIX: &str = "optim.m.";
const V_PREFIX: &str = "optim.v.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub config: StageConfig,
    pub mask: TrainabilityMask,
    pub epoch: usize,
    pub optimizer_step: u64,
    pub data_rng: RngState,
    pub aug_rng: RngState,
    pub has_teacher: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub vit: ViTConfig,
    pub layout: AdapterLayout,
    /// The last stage that produced these weights, if known.
    pub trained: Option<StageTag>,
    pub run: Option<RunMeta>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageTag {
    pub stage: Stage,
    pub adapter: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: ParamStore,
    pub meta: CheckpointMeta,
}

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(fmt_err(format!(
                "truncated checkpoint: {field} at offset {} needs {n} bytes, {} remain",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, field: &str) -> Result<u8> {
        Ok(self.take(1, field)?[0])
    }

    fn u16(&mut self, field: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, field)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().expect("8 bytes")))
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

impl Checkpoint {
    /// A finished model: parameters only, no resumable run.
    pub fn from_model(model: &Model) -> Self {
        Checkpoint {
            tensors: model.params.clone(),
            meta: CheckpointMeta { vit: model.config, layout: model.layout.clone(), trained: None, run: None },
        }
    }

    /// Everything needed to continue `state` exactly.
    pub fn from_run(state: &RunState) -> Result<Self> {
        let mut tensors = state.model.params.clone();
        if let Some(t) = &state.teacher {
            for (name, v) in t.params.iter() {
                tensors.insert(format!("{TEACHER_PREFIX}{name}"), v.clone());
            }
            tensors.insert(CENTER_NAME, Tensor::vector(t.center.clone()));
        }
        for (name, mo) in &state.optimizer.moments {
            tensors.insert(format!("{M_PREFIX}{name}"), Tensor::vector(mo.m.clone()));
            tensors.insert(format!("{V_PREFIX}{name}"), Tensor::vector(mo.v.clone()));
        }
        let run = RunMeta {
            config: state.config.clone(),
            mask: state.mask.clone(),
            epoch: state.epoch,
            optimizer_step: state.optimizer.step,
            data_rng: state.data_rng.state(),
            aug_rng: state.aug_rng.state(),
            has_teacher: state.teacher.is_some(),
        };
        Ok(Checkpoint {
            tensors,
            meta: CheckpointMeta {
                vit: state.model.config,
                layout: state.model.layout.clone(),
                trained: Some(StageTag { stage: state.config.stage, adapter: adapter_label(&state.config) }),
                run: Some(run),
            },
        })
    }

    pub fn with_stage(mut self, tag: StageTag) -> Self {
        self.meta.trained = Some(tag);
        self
    }

    fn model_params(&self) -> ParamStore {
        let mut p = ParamStore::new();
        for (name, t) in self.tensors.iter() {
            if !(name.starts_with(TEACHER_PREFIX) || name.starts_with("optim.") || name.starts_with("state.")) {
                p.insert(name, t.clone());
            }
        }
        p
    }

    /// The model stored in the checkpoint, including any heads.
    pub fn model(&self) -> Result<Model> {
        Model::from_parts(self.meta.vit, self.meta.layout.clone(), self.model_params())
    }

    /// Rebuilds a resumable run.
    pub fn run_state(&self) -> Result<RunState> {
        let run = self.meta.run.as_ref().ok_or_else(|| Error::Contract("checkpoint holds no resumable run".into()))?;
        let model = self.model()?;
        let teacher = if run.has_teacher {
            let mut params = ParamStore::new();
            for (name, t) in self.tensors.iter() {
                if let Some(rest) = name.strip_prefix(TEACHER_PREFIX) {
                    params.insert(rest, t.clone());
                }
            }
            let center = self.tensors.require(CENTER_NAME)?.data().to_vec();
            Some(TeacherState { params, center, config: run.config.ssl })
        } else {
            None
        };
        let mut moments = IndexMap::new();
        for (name, t) in self.tensors.iter() {
            if let Some(rest) = name.strip_prefix(M_PREFIX) {
                let v = self.tensors.require(&format!("{V_PREFIX}{rest}"))?;
                moments.insert(rest.to_string(), Moments { m: t.data().to_vec(), v: v.data().to_vec() });
            }
        }
        let optimizer = OptimizerState {
            config: run.config.optimizer,
            schedule: run.config.schedule(),
            step: run.optimizer_step,
            moments,
        };
        Ok(RunState {
            config: run.config.clone(),
            model,
            teacher,
            optimizer,
            mask: run.mask.clone(),
            epoch: run.epoch,
            data_rng: SeededRng::restore(run.data_rng),
            aug_rng: SeededRng::restore(run.aug_rng),
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in self.tensors.iter() {
            let bytes = name.as_bytes();
            let len = u16::try_from(bytes.len()).map_err(|_| fmt_err(format!("tensor name `{name}` too long")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(bytes);
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
        }
        let start = out.len();
        for (_, t) in self.tensors.iter() {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let checksum = fnv1a(&out[start..]);
        out.extend_from_slice(&checksum.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta).map_err(|e| fmt_err(format!("metadata: {e}")))?;
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(fmt_err(format!("bad magic at offset 0: expected \"ESCK\", found {magic:?}")));
        }
        let version = r.u16("version")?;
        if version != VERSION {
            return Err(fmt_err(format!("unsupported checkpoint version {version} at offset 4 (expected {VERSION})")));
        }
        let count = r.u32("count")? as usize;
        let mut manifest = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u16("name length")? as usize;
            let at = r.pos;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| fmt_err(format!("tensor name at offset {at} is not UTF-8")))?
                .to_string();
            let rank = r.u8("rank")? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32("dims")? as usize);
            }
            manifest.push((name, dims));
        }
        let start = r.pos;
        let mut tensors = ParamStore::new();
        for (name, dims) in manifest {
            let n: usize = dims.iter().product();
            let raw = r.take(4 * n, "payload")?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
            let t = Tensor::new(dims, data).map_err(|e| fmt_err(format!("tensor `{name}`: {e}")))?;
            tensors.insert(name, t);
        }
        let payload = &bytes[start..r.pos];
        let stored = r.u64("checksum")?;
        let actual = fnv1a(payload);
        if stored != actual {
            return Err(fmt_err(format!("checksum mismatch: stored {stored:#018x}, payload hashes to {actual:#018x}")));
        }
        let meta_len = r.u32("metadata length")? as usize;
        let meta_bytes = r.take(meta_len, "metadata")?;
        if r.pos != bytes.len() {
            return Err(fmt_err(format!("{} trailing bytes after metadata", bytes.len() - r.pos)));
        }
        let meta = serde_json::from_slice(meta_bytes).map_err(|e| fmt_err(format!("metadata: {e}")))?;
        Ok(Checkpoint { tensors, meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
