//! On-disk households: channel CSVs, a manifest and optional truth flags.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dtdl::signal::{self, LoadedHouse, Manifest, ManifestDevice, RawChannel, SyntheticHousehold};
use dtdl::WindowedDataset;
use serde::{Deserialize, Serialize};

pub const MANIFEST: &str = "manifest.json";
pub const TRUTH: &str = "truth.json";

/// Per-sample activity written next to a synthetic manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthFile {
    pub device_names: Vec<String>,
    /// `[i][t]`
    pub active: Vec<Vec<bool>>,
}

pub struct House {
    pub device_names: Vec<String>,
    /// 1 Hz device signals cut to a common length.
    pub devices: Vec<Vec<f64>>,
    /// 1 Hz mains signal.
    pub mains: Vec<f64>,
    pub truth: Option<TruthFile>,
}

impl House {
    pub fn windowed(&self, omega: usize) -> dtdl::Result<WindowedDataset> {
        let ds = signal::make_windows(&self.devices, omega)?.with_device_names(self.device_names.clone())?;
        Ok(match &self.truth {
            Some(t) => {
                let k = ds.windows();
                let mut flags = signal::window_truth(&t.active, omega);
                flags.truncate(k);
                ds.with_truth(flags)?
            }
            None => ds,
        })
    }
}

pub fn manifest_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join(MANIFEST)
    } else {
        data.to_path_buf()
    }
}

/// Median sample spacing, in seconds.
fn spacing(channel: &RawChannel) -> f64 {
    let mut d: Vec<f64> = channel.samples.windows(2).map(|w| w[1].0 - w[0].0).collect();
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    d[d.len() / 2]
}

fn to_1hz(channel: &RawChannel) -> Result<Vec<f64>> {
    let dt = spacing(channel);
    if (dt - 1.0).abs() < 1e-9 {
        return Ok(channel.powers());
    }
    Ok(signal::resample_to_1hz(channel, 1.0 / dt)?.powers())
}

pub fn load(data: &Path) -> Result<House> {
    let path = manifest_path(data);
    if !path.is_file() {
        bail!("dataset manifest {} not found", path.display());
    }
    let house: LoadedHouse = signal::load_house_csv(&path)?;
    let mains = to_1hz(house.mains())?;
    let mut devices = house.devices().iter().map(to_1hz).collect::<Result<Vec<_>>>()?;
    let t = devices.iter().map(Vec::len).min().unwrap_or(0);
    for d in &mut devices {
        d.truncate(t);
    }
    let truth_path = path.with_file_name(TRUTH);
    let truth = if truth_path.is_file() {
        let text = fs::read_to_string(&truth_path)?;
        let truth: TruthFile =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", truth_path.display()))?;
        if truth.device_names != house.device_names || truth.active.iter().any(|a| a.len() < t) {
            bail!("{} does not match the manifest channels", truth_path.display());
        }
        Some(truth)
    } else {
        None
    };
    Ok(House {
        device_names: house.device_names,
        devices,
        mains,
        truth,
    })
}

/// Writes `mains.csv`, one CSV per device, the manifest and the truth file.
pub fn write_synthetic(dir: &Path, house_id: &str, hh: &SyntheticHousehold) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    signal::write_channel_csv(&dir.join("mains.csv"), &signal::channel_from_powers(0, &hh.aggregate())?)?;
    let mut devices = Vec::with_capacity(hh.device_names.len());
    for (i, (name, powers)) in hh.device_names.iter().zip(&hh.signals).enumerate() {
        let file = PathBuf::from(format!("{name}.csv"));
        signal::write_channel_csv(&dir.join(&file), &signal::channel_from_powers(i + 1, powers)?)?;
        devices.push(ManifestDevice {
            name: name.clone(),
            path: file,
        });
    }
    let manifest = Manifest {
        house_id: house_id.to_string(),
        mains: PathBuf::from("mains.csv"),
        devices,
    };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
    let truth = TruthFile {
        device_names: hh.device_names.clone(),
        active: hh.active.clone(),
    };
    fs::write(dir.join(TRUTH), serde_json::to_string(&truth)? + "\n")?;
    Ok(())
}
