//! Line-oriented model configuration files and raw image input.
//!
//! ```text
//! # comments and blank lines are ignored
//! in_channels = 3
//! expansion_ratio = 3
//! reduction = 4
//! num_classes = 1000
//! fusion_mode = split_attention
//! active_branches = 1,2,3
//! drop_path_rate = 0.1
//!
//! [stage]
//! patch_size = 7
//! hidden_size = 192
//! num_blocks = 4
//! ```
//!
//! Every key is required; unknown or repeated keys are errors.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{FusionMode, ModelConfig, StageConfig};
use crate::tensor::Tensor;

const TOP_KEYS: [&str; 7] = [
    "in_channels",
    "expansion_ratio",
    "reduction",
    "num_classes",
    "fusion_mode",
    "active_branches",
    "drop_path_rate",
];
const STAGE_KEYS: [&str; 3] = ["patch_size", "hidden_size", "num_blocks"];

pub fn to_config_string(cfg: &ModelConfig) -> String {
    let mut s = String::new();
    let branches: Vec<String> = cfg.active_branches.iter().map(|b| b.to_string()).collect();
    writeln!(s, "in_channels = {}", cfg.in_channels).unwrap();
    writeln!(s, "expansion_ratio = {}", cfg.expansion_ratio).unwrap();
    writeln!(s, "reduction = {}", cfg.reduction).unwrap();
    writeln!(s, "num_classes = {}", cfg.num_classes).unwrap();
    writeln!(s, "fusion_mode = {}", cfg.fusion_mode.as_str()).unwrap();
    writeln!(s, "active_branches = {}", branches.join(",")).unwrap();
    writeln!(s, "drop_path_rate = {}", cfg.drop_path_rate).unwrap();
    for st in &cfg.stages {
        writeln!(s).unwrap();
        writeln!(s, "[stage]").unwrap();
        writeln!(s, "patch_size = {}", st.patch_size).unwrap();
        writeln!(s, "hidden_size = {}", st.hidden_size).unwrap();
        writeln!(s, "num_blocks = {}", st.num_blocks).unwrap();
    }
    s
}

type Section = Vec<(String, String, usize)>;

fn take<V: FromStr>(section: &Section, key: &str, what: &str) -> Result<V> {
    let (_, raw, line) = section
        .iter()
        .find(|(k, _, _)| k == key)
        .ok_or_else(|| Error::config(format!("{what} is missing key {key:?}")))?;
    raw.parse()
        .map_err(|_| Error::config(format!("line {line}: cannot parse {key} = {raw:?}")))
}

pub fn parse_config(text: &str) -> Result<ModelConfig> {
    let mut top: Section = Vec::new();
    let mut stages: Vec<Section> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with('[') {
            if line != "[stage]" {
                return Err(Error::config(format!("line {lineno}: unknown section {line}")));
            }
            stages.push(Vec::new());
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {lineno}: expected `key = value`")))?;
        let (key, value) = (key.trim().to_owned(), value.trim().to_owned());
        let (section, allowed) = match stages.last_mut() {
            Some(s) => (s, &STAGE_KEYS[..]),
            None => (&mut top, &TOP_KEYS[..]),
        };
        if !allowed.contains(&key.as_str()) {
            return Err(Error::config(format!("line {lineno}: unknown key {key:?}")));
        }
        if section.iter().any(|(k, _, _)| *k == key) {
            return Err(Error::config(format!("line {lineno}: repeated key {key:?}")));
        }
        section.push((key, value, lineno));
    }

    let branches_raw: String = take(&top, "active_branches", "configuration")?;
    let active_branches = branches_raw
        .split(',')
        .map(|b| {
            b.trim()
                .parse::<usize>()
                .map_err(|_| Error::config(format!("bad branch id {b:?} in active_branches")))
        })
        .collect::<Result<Vec<_>>>()?;
    let fusion: String = take(&top, "fusion_mode", "configuration")?;
    let cfg = ModelConfig {
        in_channels: take(&top, "in_channels", "configuration")?,
        expansion_ratio: take(&top, "expansion_ratio", "configuration")?,
        reduction: take(&top, "reduction", "configuration")?,
        num_classes: take(&top, "num_classes", "configuration")?,
        fusion_mode: fusion.parse::<FusionMode>()?,
        active_branches,
        drop_path_rate: take(&top, "drop_path_rate", "configuration")?,
        stages: stages
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let what = format!("stage {i}");
                Ok(StageConfig {
                    patch_size: take(s, "patch_size", &what)?,
                    hidden_size: take(s, "hidden_size", &what)?,
                    num_blocks: take(s, "num_blocks", &what)?,
                })
            })
            .collect::<Result<Vec<_>>>()?,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: impl AsRef<Path>) -> Result<ModelConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

/// Reads a raw image: height, width, channels as `u32` LE, then `f32` LE
/// pixels in planar order (channel, row, column). Returns a
/// `(1, width, height, channels)` map.
pub fn read_raw_image(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_raw_image(&bytes)
}

pub fn decode_raw_image(bytes: &[u8]) -> Result<Tensor<f32>> {
    if bytes.len() < 12 {
        return Err(Error::Format {
            offset: 0,
            message: format!("image header needs 12 bytes, found {}", bytes.len()),
        });
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i * 4..i * 4 + 4].try_into().unwrap()) as usize;
    let (h, w, c) = (word(0), word(1), word(2));
    let n = h * w * c;
    if bytes.len() - 12 != n * 4 {
        return Err(Error::Format {
            offset: 12,
            message: format!(
                "{h}x{w}x{c} image needs {} pixel bytes, found {}",
                n * 4,
                bytes.len() - 12
            ),
        });
    }
    let px = |i: usize| f32::from_le_bytes(bytes[12 + 4 * i..16 + 4 * i].try_into().unwrap());
    let mut data = vec![0.0f32; n];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                data[(x * h + y) * c + ch] = px((ch * h + y) * w + x);
            }
        }
    }
    Tensor::new([1, w, h, c], data)
}

/// Inverse of [`decode_raw_image`] for a single-image map.
pub fn encode_raw_image(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let (b, w, h, c) = image.feature_dims()?;
    if b != 1 {
        return Err(Error::shape(format!("raw images hold one sample, got a batch of {b}")));
    }
    let mut out = Vec::with_capacity(12 + image.len() * 4);
    for v in [h, w, c] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out.extend_from_slice(&image.at(&[0, x, y, ch]).to_le_bytes());
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Preset;

    #[test]
    fn presets_round_trip_through_text() {
        for p in Preset::ALL {
            let cfg = p.config();
            assert_eq!(parse_config(&to_config_string(&cfg)).unwrap(), cfg);
        }
        let mut ablation = Preset::Small7.config();
        ablation.fusion_mode = FusionMode::SumPooling;
        ablation.active_branches = vec![1, 3];
        assert_eq!(parse_config(&to_config_string(&ablation)).unwrap(), ablation);
    }

    #[test]
    fn unknown_missing_and_repeated_keys_fail() {
        let good = to_config_string(&Preset::Tiny.config());
        let unknown = good.replace("reduction = 4", "reduction = 4\ncolour = blue");
        assert!(parse_config(&unknown).unwrap_err().to_string().contains("colour"));
        let missing = good.replace("num_blocks = 1\n", "");
        assert!(parse_config(&missing).is_err());
        let repeated = good.replace("reduction = 4", "reduction = 4\nreduction = 2");
        assert!(parse_config(&repeated).is_err());
        let section = good.replace("[stage]", "[stages]");
        assert!(parse_config(&section).is_err());
    }

    #[test]
    fn raw_image_is_planar() {
        // 1 row, 2 columns, 2 channels: planes [1, 2] and [3, 4].
        let mut bytes = Vec::new();
        for v in [1u32, 2, 2] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        for v in [1.0f32, 2.0, 3.0, 4.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let img = decode_raw_image(&bytes).unwrap();
        assert_eq!(img.dims(), &[1, 2, 1, 2]);
        assert_eq!(img.data(), &[1.0, 3.0, 2.0, 4.0]);
        assert_eq!(encode_raw_image(&img).unwrap(), bytes);
        assert!(decode_raw_image(&bytes[..bytes.len() - 1]).is_err());
    }
}
