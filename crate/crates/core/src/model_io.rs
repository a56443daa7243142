//! Versioned JSON model files.
//!
//! Floats are written in shortest round-trip form, so a save/load cycle
//! reproduces every parameter bit for bit and equal models give equal bytes.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::baselines::{CdlModel, SmpModel};
use crate::dictionary::Dictionary;
use crate::error::{Error, Result};
use crate::lstm::{LstmAeParams, GATE_ORDER};
use crate::signal::Scaler;
use crate::trainer::{DtdlModel, HyperParams, TrainStatus, TrainingLogEntry};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LstmRecord {
    pub m: usize,
    pub omega: usize,
    pub gate_order: Vec<String>,
    pub w: Vec<f64>,
    pub u: Vec<f64>,
    pub b: Vec<f64>,
    pub readout_v: Vec<f64>,
    pub readout_c: f64,
}

/// Column-major `rows x cols` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixRecord {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl MatrixRecord {
    pub fn of(m: &DMatrix<f64>) -> Self {
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            data: m.as_slice().to_vec(),
        }
    }

    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        if self.rows * self.cols != self.data.len() {
            return Err(Error::Model(format!(
                "{}x{} matrix with {} entries",
                self.rows,
                self.cols,
                self.data.len()
            )));
        }
        Ok(DMatrix::from_column_slice(self.rows, self.cols, &self.data))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DictionaryRecord {
    pub d: usize,
    pub per_device_atoms: Vec<usize>,
    /// Column-major `d x N`.
    pub atoms: Vec<f64>,
}

impl DictionaryRecord {
    pub fn of(dict: &Dictionary) -> Self {
        Self {
            d: dict.d(),
            per_device_atoms: dict.per_device_atoms().to_vec(),
            atoms: dict.atoms().as_slice().to_vec(),
        }
    }

    pub fn to_dictionary(&self) -> Result<Dictionary> {
        let n: usize = self.per_device_atoms.iter().sum();
        let atoms = MatrixRecord {
            rows: self.d,
            cols: n,
            data: self.atoms.clone(),
        }
        .to_matrix()?;
        Dictionary::new(atoms, self.per_device_atoms.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DtdlRecord {
    pub version: u32,
    pub hyper: HyperParams,
    pub scaler: Scaler,
    pub lstm: LstmRecord,
    pub dictionary: DictionaryRecord,
    pub cell_dictionary: MatrixRecord,
    pub device_names: Vec<String>,
    pub status: TrainStatus,
    pub training_log: Vec<TrainingLogEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CdlRecord {
    pub version: u32,
    pub scaler: Scaler,
    pub lambda1: f64,
    pub dictionary: DictionaryRecord,
    pub device_names: Vec<String>,
    pub training_error: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmpRecord {
    pub version: u32,
    #[serde(flatten)]
    pub model: SmpModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelFile {
    Dtdl(DtdlRecord),
    Cdl(CdlRecord),
    Smp(SmpRecord),
}

impl ModelFile {
    pub fn kind(&self) -> &'static str {
        match self {
            ModelFile::Dtdl(_) => "dtdl",
            ModelFile::Cdl(_) => "cdl",
            ModelFile::Smp(_) => "smp",
        }
    }

    fn version(&self) -> u32 {
        match self {
            ModelFile::Dtdl(r) => r.version,
            ModelFile::Cdl(r) => r.version,
            ModelFile::Smp(r) => r.version,
        }
    }
}

impl From<&DtdlModel> for ModelFile {
    fn from(model: &DtdlModel) -> Self {
        let p = &model.lstm;
        ModelFile::Dtdl(DtdlRecord {
            version: FORMAT_VERSION,
            hyper: model.hyper.clone(),
            scaler: model.scaler,
            lstm: LstmRecord {
                m: p.m,
                omega: model.omega(),
                gate_order: GATE_ORDER.iter().map(|g| g.to_string()).collect(),
                w: p.w.clone(),
                u: p.u.clone(),
                b: p.b.clone(),
                readout_v: p.readout_v.clone(),
                readout_c: p.readout_c,
            },
            dictionary: DictionaryRecord::of(&model.dictionary),
            cell_dictionary: MatrixRecord::of(&model.cell_dictionary),
            device_names: model.device_names.clone(),
            status: model.status,
            training_log: model.training_log.clone(),
        })
    }
}

impl From<&CdlModel> for ModelFile {
    fn from(model: &CdlModel) -> Self {
        ModelFile::Cdl(CdlRecord {
            version: FORMAT_VERSION,
            scaler: model.scaler,
            lambda1: model.lambda1,
            dictionary: DictionaryRecord::of(&model.dictionary),
            device_names: model.device_names.clone(),
            training_error: model.training_error.clone(),
        })
    }
}

impl From<&SmpModel> for ModelFile {
    fn from(model: &SmpModel) -> Self {
        ModelFile::Smp(SmpRecord {
            version: FORMAT_VERSION,
            model: model.clone(),
        })
    }
}

impl TryFrom<DtdlRecord> for DtdlModel {
    type Error = Error;

    fn try_from(r: DtdlRecord) -> Result<Self> {
        let order: Vec<&str> = r.lstm.gate_order.iter().map(String::as_str).collect();
        if order != GATE_ORDER {
            return Err(Error::Model(format!("unsupported gate order {order:?}")));
        }
        if r.lstm.omega != r.hyper.omega || r.lstm.m != r.hyper.m {
            return Err(Error::Model("LSTM dimensions disagree with the hyperparameters".into()));
        }
        let mut flat = r.lstm.w;
        flat.extend(r.lstm.u);
        flat.extend(r.lstm.b);
        flat.extend(r.lstm.readout_v);
        flat.push(r.lstm.readout_c);
        let lstm = LstmAeParams::unflatten(r.lstm.m, &flat)?;
        let dictionary = r.dictionary.to_dictionary()?;
        let cell_dictionary = r.cell_dictionary.to_matrix()?;
        if dictionary.d() != lstm.m || cell_dictionary.shape() != dictionary.atoms().shape() {
            return Err(Error::Model("dictionary shapes disagree with the LSTM".into()));
        }
        if r.device_names.len() != dictionary.devices() {
            return Err(Error::Model("device names do not match the dictionary blocks".into()));
        }
        Ok(DtdlModel {
            lstm,
            dictionary,
            cell_dictionary,
            scaler: r.scaler,
            hyper: r.hyper,
            device_names: r.device_names,
            training_log: r.training_log,
            status: r.status,
        })
    }
}

impl TryFrom<CdlRecord> for CdlModel {
    type Error = Error;

    fn try_from(r: CdlRecord) -> Result<Self> {
        let dictionary = r.dictionary.to_dictionary()?;
        if r.device_names.len() != dictionary.devices() {
            return Err(Error::Model("device names do not match the dictionary blocks".into()));
        }
        Ok(CdlModel {
            dictionary,
            scaler: r.scaler,
            lambda1: r.lambda1,
            device_names: r.device_names,
            training_error: r.training_error,
        })
    }
}

pub fn to_json(file: &ModelFile) -> Result<String> {
    let mut s = serde_json::to_string_pretty(file)?;
    s.push('\n');
    Ok(s)
}

pub fn from_json(text: &str) -> Result<ModelFile> {
    let value: serde_json::Value = serde_json::from_str(text)?;
    match value.get("version").and_then(|v| v.as_u64()) {
        Some(v) if v == u64::from(FORMAT_VERSION) => {}
        Some(v) => return Err(Error::Model(format!("unsupported format version {v}"))),
        None => return Err(Error::Model("missing format version".into())),
    }
    let file: ModelFile = serde_json::from_value(value)?;
    debug_assert_eq!(file.version(), FORMAT_VERSION);
    Ok(file)
}

pub fn save(file: &ModelFile, path: &Path) -> Result<()> {
    fs::write(path, to_json(file)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ModelFile> {
    from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

pub fn load_dtdl(path: &Path) -> Result<DtdlModel> {
    match load(path)? {
        ModelFile::Dtdl(r) => r.try_into(),
        other => Err(Error::Model(format!("expected a dtdl model, found {}", other.kind()))),
    }
}
