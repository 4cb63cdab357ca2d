//! TOML configuration for pretraining: model and schedule sections, every
//! field optional over the built-in defaults.

use std::path::Path;

use serde::Deserialize;

use ovc_core::entropy::prior::PriorKind;
use ovc_core::entropy::{Fusion, GroupingKind};
use ovc_core::error::{CodecError, Result};
use ovc_core::frameio::FrameSource;
use ovc_core::hierpe::WeightPolicy;
use ovc_core::model::CodecConfig;
use ovc_core::overfit::{DistortionKind, PretrainConfig};
use ovc_core::tensor::Tensor;

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    #[serde(default)]
    model: ModelSection,
    #[serde(default)]
    pretrain: PretrainSection,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct ModelSection {
    levels: Option<usize>,
    c_lat: Option<usize>,
    enc_width: Option<usize>,
    ent_hidden: Option<usize>,
    branches: Option<usize>,
    patch: Option<usize>,
    grid_scale: Option<f64>,
    scaled_grids: Option<bool>,
    /// "modulation" or "concat".
    fusion: Option<String>,
    /// "uneven" or "even".
    grouping: Option<String>,
    token_mixer: Option<bool>,
    reparam_overfit: Option<bool>,
    /// "log_even" or "uniform".
    weight_policy: Option<String>,
    /// "learned" or "laplace".
    prior: Option<String>,
    adaptive_qglob: Option<bool>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct PretrainSection {
    steps: Option<usize>,
    clip_h: Option<usize>,
    clip_w: Option<usize>,
    clips: Option<usize>,
    clip_frames: Option<usize>,
    gop_frames: Option<usize>,
    lambda: Option<f32>,
    lr: Option<f32>,
    mask_frac: Option<f32>,
    rate_steps_per_level: Option<usize>,
    /// "mse" or "ms_ssim".
    distortion: Option<String>,
    seed: Option<u64>,
    log_every: Option<usize>,
    calibrate_prior: Option<bool>,
    flow_warmup_steps: Option<usize>,
}

fn bad(field: &str, value: &str) -> CodecError {
    CodecError::Param(format!("config: bad {field} value {value:?}"))
}

pub fn load(path: Option<&Path>) -> Result<(CodecConfig, PretrainConfig)> {
    let file: FileConfig = match path {
        None => FileConfig::default(),
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            toml::from_str(&text).map_err(|e| CodecError::Param(format!("config: {e}")))?
        }
    };

    let mut cfg = CodecConfig::default();
    let m = &file.model;
    if let Some(v) = m.levels {
        cfg.levels = v;
    }
    if let Some(v) = m.c_lat {
        cfg.c_lat = v;
    }
    if let Some(v) = m.enc_width {
        cfg.enc_width = v;
    }
    if let Some(v) = m.ent_hidden {
        cfg.ent_hidden = v;
    }
    if let Some(v) = m.branches {
        cfg.branches = v;
    }
    if let Some(v) = m.patch {
        cfg.patch = v;
    }
    if let Some(v) = m.grid_scale {
        cfg.grid_scale = v;
    }
    if let Some(v) = m.scaled_grids {
        cfg.scaled_grids = v;
    }
    if let Some(v) = &m.fusion {
        cfg.fusion = match v.as_str() {
            "modulation" => Fusion::Modulation,
            "concat" => Fusion::Concat,
            other => return Err(bad("fusion", other)),
        };
    }
    if let Some(v) = &m.grouping {
        cfg.grouping = match v.as_str() {
            "uneven" => GroupingKind::Uneven,
            "even" => GroupingKind::Even,
            other => return Err(bad("grouping", other)),
        };
    }
    if let Some(v) = m.token_mixer {
        cfg.token_mixer = v;
    }
    if let Some(v) = m.reparam_overfit {
        cfg.reparam_overfit = v;
    }
    if let Some(v) = &m.weight_policy {
        cfg.weight_policy = match v.as_str() {
            "log_even" => WeightPolicy::LogEven,
            "uniform" => WeightPolicy::Uniform,
            other => return Err(bad("weight_policy", other)),
        };
    }
    if let Some(v) = &m.prior {
        cfg.prior_kind = match v.as_str() {
            "learned" => PriorKind::Learned,
            "laplace" => PriorKind::Laplace,
            other => return Err(bad("prior", other)),
        };
    }
    if let Some(v) = m.adaptive_qglob {
        cfg.qglob.adaptive = v;
    }

    let mut pt = PretrainConfig::default();
    let p = &file.pretrain;
    if let Some(v) = p.steps {
        pt.steps = v;
    }
    if let Some(v) = p.clip_h {
        pt.clip_h = v;
    }
    if let Some(v) = p.clip_w {
        pt.clip_w = v;
    }
    if let Some(v) = p.clips {
        pt.clips = v;
    }
    if let Some(v) = p.clip_frames {
        pt.clip_frames = v;
    }
    if let Some(v) = p.gop_frames {
        pt.gop_frames = v;
    }
    if let Some(v) = p.lambda {
        pt.lambda = v;
    }
    if let Some(v) = p.lr {
        pt.lr = v;
    }
    if let Some(v) = p.mask_frac {
        pt.mask_frac = v;
    }
    if let Some(v) = p.rate_steps_per_level {
        pt.rate_steps_per_level = v;
    }
    if let Some(v) = &p.distortion {
        pt.distortion = match v.as_str() {
            "mse" => DistortionKind::Mse,
            "ms_ssim" => DistortionKind::MsSsim,
            other => return Err(bad("distortion", other)),
        };
    }
    if let Some(v) = p.seed {
        pt.seed = v;
    }
    if let Some(v) = p.log_every {
        pt.log_every = v;
    }
    if let Some(v) = p.calibrate_prior {
        pt.calibrate_prior = v;
    }
    if let Some(v) = p.flow_warmup_steps {
        pt.flow_warmup_steps = v;
    }
    Ok((cfg, pt))
}

/// Load a corpus directory: every subdirectory (PPM frames) or .rgb file
/// becomes one clip.
pub fn load_corpus(dir: &Path) -> Result<Vec<Vec<Tensor>>> {
    let mut clips = Vec::new();
    let mut entries: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    for path in entries {
        if path.is_dir() || path.extension().map(|e| e == "rgb").unwrap_or(false) {
            clips.push(FrameSource::detect(&path)?.load()?);
        }
    }
    if clips.is_empty() {
        return Err(CodecError::Param(format!(
            "corpus {} holds no clips",
            dir.display()
        )));
    }
    Ok(clips)
}
