//! Self-describing checkpoint container.
//!
//! Layout:
//!
//! ```text
//! UFEMA-CKPT\n
//! version=<u32>\n
//! header_bytes=<n>\n
//! <n bytes of JSON: kind, metadata, tensor directory>
//! <payload: little-endian f32 values, tensors back to back>
//! <32-byte SHA-256 of everything above>
//! ```
//!
//! Tensors are grouped (`fusion`, `encoder.model`, `encoder.ema`, ...) and
//! each carries its name, shape and trainable flag, so any reader can map
//! the payload without knowing the network code.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::ema::EmaState;
use crate::encoder::{AamConfig, AamHead, EncoderConfig, SpeakerEncoder};
use crate::enhancement::{
    Enhancer, EnhancerKind, EnhancerRegistry, MaskNet, MaskNetConfig, SpectralSubtraction,
};
use crate::error::{Error, Result};
use crate::fusion::{UNet, UNetConfig};
use crate::nn::{Adam, ParamStore};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "UFEMA-CKPT";
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    group: String,
    name: String,
    shape: Vec<usize>,
    trainable: bool,
    offset: usize,
    len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: Value,
    tensors: Vec<TensorEntry>,
}

/// Untyped checkpoint contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: Value,
    pub groups: Vec<(String, ParamStore<f32>)>,
}

impl Container {
    pub fn new(kind: &str, meta: Value) -> Self {
        Self {
            kind: kind.to_string(),
            meta,
            groups: Vec::new(),
        }
    }

    pub fn with_group(mut self, name: &str, store: &ParamStore<f32>) -> Self {
        self.groups.push((name.to_string(), store.clone()));
        self
    }

    pub fn group(&self, name: &str) -> Result<&ParamStore<f32>> {
        self.groups
            .iter()
            .find(|(g, _)| g == name)
            .map(|(_, s)| s)
            .ok_or_else(|| Error::Format(format!("missing tensor group `{name}`")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors = Vec::new();
        let mut payload = Vec::new();
        let mut offset = 0;
        for (group, store) in &self.groups {
            for p in store.entries() {
                tensors.push(TensorEntry {
                    group: group.clone(),
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    trainable: p.trainable,
                    offset,
                    len: p.data.len(),
                });
                for v in &p.data {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
                offset += p.data.len();
            }
        }
        let header = serde_json::to_vec(&Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors,
        })
        .expect("header serializes");
        let mut out = format!(
            "{MAGIC}\nversion={FORMAT_VERSION}\nheader_bytes={}\n",
            header.len()
        )
        .into_bytes();
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < DIGEST_LEN {
            return Err(Error::Checksum);
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checksum);
        }
        let mut rest = body;
        let mut line = || -> Result<&str> {
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| Error::Format("truncated preamble".into()))?;
            let s = std::str::from_utf8(&rest[..end])
                .map_err(|_| Error::Format("preamble is not UTF-8".into()))?;
            rest = &rest[end + 1..];
            Ok(s)
        };
        if line()? != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let version: u32 = line()?
            .strip_prefix("version=")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Format("bad version line".into()))?;
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let header_len: usize = line()?
            .strip_prefix("header_bytes=")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Format("bad header length line".into()))?;
        if rest.len() < header_len {
            return Err(Error::Format("header extends past end of file".into()));
        }
        let header: Header = serde_json::from_slice(&rest[..header_len])?;
        let payload = &rest[header_len..];
        let total: usize = header.tensors.iter().map(|t| t.len).sum();
        if payload.len() != total * 4 {
            return Err(Error::Format(format!(
                "payload holds {} bytes, directory needs {}",
                payload.len(),
                total * 4
            )));
        }
        let mut groups: Vec<(String, ParamStore<f32>)> = Vec::new();
        for t in header.tensors {
            if t.shape.iter().product::<usize>() != t.len || t.offset + t.len > total {
                return Err(Error::Format(format!(
                    "tensor `{}` has inconsistent extent",
                    t.name
                )));
            }
            let data = payload[t.offset * 4..(t.offset + t.len) * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if groups.last().map(|(g, _)| g != &t.group).unwrap_or(true) {
                groups.push((t.group.clone(), ParamStore::new()));
            }
            groups
                .last_mut()
                .unwrap()
                .1
                .push(t.name, &t.shape, data, t.trainable);
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            groups,
        })
    }

    /// Writes through a temporary file so a crash never leaves a partial
    /// checkpoint under the final name.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_bytes(&std::fs::read(path)?)
    }

    fn expect_kind(self, kind: &str) -> Result<Self> {
        if self.kind != kind {
            return Err(Error::Format(format!(
                "expected a `{kind}` checkpoint, found `{}`",
                self.kind
            )));
        }
        Ok(self)
    }
}

fn meta_field<T: serde::de::DeserializeOwned>(meta: &Value, key: &str) -> Result<T> {
    let v = meta
        .get(key)
        .ok_or_else(|| Error::Format(format!("missing metadata `{key}`")))?;
    Ok(serde_json::from_value(v.clone())?)
}

fn adam_meta(opt: &Adam<f32>) -> Value {
    json!({"lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps, "step": opt.step})
}

fn moments(template: &ParamStore<f32>, data: &[Vec<f32>]) -> ParamStore<f32> {
    let mut s = template.clone();
    for (e, d) in s.entries_mut().iter_mut().zip(data) {
        e.data.clone_from(d);
    }
    s
}

fn with_adam(c: Container, prefix: &str, opt: &Adam<f32>, layout: &ParamStore<f32>) -> Container {
    c.with_group(&format!("{prefix}.adam_m"), &moments(layout, &opt.m))
        .with_group(&format!("{prefix}.adam_v"), &moments(layout, &opt.v))
}

fn read_adam(
    c: &Container,
    prefix: &str,
    meta: &Value,
    layout: &ParamStore<f32>,
) -> Result<Adam<f32>> {
    let m = c.group(&format!("{prefix}.adam_m"))?;
    let v = c.group(&format!("{prefix}.adam_v"))?;
    if !m.same_layout(layout) || !v.same_layout(layout) {
        return Err(Error::Format(format!(
            "optimizer state `{prefix}` does not match its parameters"
        )));
    }
    let take = |s: &ParamStore<f32>| s.entries().iter().map(|e| e.data.clone()).collect();
    Ok(Adam {
        lr: meta_field(meta, "lr")?,
        beta1: meta_field(meta, "beta1")?,
        beta2: meta_field(meta, "beta2")?,
        eps: meta_field(meta, "eps")?,
        step: meta_field(meta, "step")?,
        m: take(m),
        v: take(v),
    })
}

fn checked_copy(dst: &mut ParamStore<f32>, src: &ParamStore<f32>, what: &str) -> Result<()> {
    if !dst.same_layout(src) {
        return Err(Error::Format(format!(
            "{what} parameters do not match the stored architecture"
        )));
    }
    dst.copy_from(src)
}

pub fn enhancer_container(e: &Enhancer) -> Container {
    Container::new(
        "enhancer",
        json!({"name": e.name(), "domain": e.domain(), "hyperparameters": e.hyperparameters()}),
    )
    .with_group("params", &e.params())
}

pub fn save_enhancer(e: &Enhancer, path: impl AsRef<Path>) -> Result<()> {
    enhancer_container(e).save(path)
}

pub fn load_enhancer(path: impl AsRef<Path>) -> Result<Enhancer> {
    let c = Container::load(path)?.expect_kind("enhancer")?;
    let name: String = meta_field(&c.meta, "name")?;
    let hyper = c
        .meta
        .get("hyperparameters")
        .cloned()
        .ok_or_else(|| Error::Format("missing enhancer hyperparameters".into()))?;
    let kind = match name.as_str() {
        "spectral_subtraction" => {
            EnhancerKind::SpectralSubtraction(serde_json::from_value::<SpectralSubtraction>(hyper)?)
        }
        "mask_net" => {
            let mut net = MaskNet::new(serde_json::from_value::<MaskNetConfig>(hyper)?);
            let stored = c.group("params")?;
            if !net.params().same_layout(stored) {
                return Err(Error::Format(
                    "mask_net parameters do not match its hyperparameters".into(),
                ));
            }
            net.load_params(stored)?;
            EnhancerKind::MaskNet(Box::new(net))
        }
        other => return Err(Error::Format(format!("unknown enhancer `{other}`"))),
    };
    Ok(Enhancer::from_parts(&name, kind))
}

/// Optimizer position of an interrupted pretraining run.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainProgress {
    pub encoder_opt: Adam<f32>,
    pub head_opt: Adam<f32>,
    pub step: u64,
}

/// Pretrained speaker encoder with its classifier.
#[derive(Debug, Clone)]
pub struct EncoderCheckpoint {
    pub encoder: SpeakerEncoder,
    pub params: ParamStore<f32>,
    pub head: AamHead,
    pub head_params: ParamStore<f32>,
    pub progress: Option<PretrainProgress>,
}

impl EncoderCheckpoint {
    pub fn to_container(&self) -> Container {
        let mut meta = json!({
            "encoder": self.encoder.config(),
            "aam": self.head.config,
            "classes": self.head.classes,
        });
        if let Some(p) = &self.progress {
            meta["progress"] = json!({
                "step": p.step,
                "encoder_opt": adam_meta(&p.encoder_opt),
                "head_opt": adam_meta(&p.head_opt),
            });
        }
        let mut c = Container::new("encoder", meta)
            .with_group("encoder", &self.params)
            .with_group("aam", &self.head_params);
        if let Some(p) = &self.progress {
            c = with_adam(c, "encoder", &p.encoder_opt, &self.params);
            c = with_adam(c, "aam", &p.head_opt, &self.head_params);
        }
        c
    }

    pub fn from_container(c: Container) -> Result<Self> {
        let c = c.expect_kind("encoder")?;
        let cfg: EncoderConfig = meta_field(&c.meta, "encoder")?;
        let aam: AamConfig = meta_field(&c.meta, "aam")?;
        let classes: usize = meta_field(&c.meta, "classes")?;
        let (encoder, mut params) = SpeakerEncoder::new::<f32>(&cfg, 0)?;
        checked_copy(&mut params, c.group("encoder")?, "encoder")?;
        let (head, mut head_params) = AamHead::new::<f32>(classes, cfg.embedding_dim, aam, 0)?;
        checked_copy(&mut head_params, c.group("aam")?, "AAM head")?;
        let progress = match c.meta.get("progress") {
            None => None,
            Some(p) => Some(PretrainProgress {
                step: meta_field(p, "step")?,
                encoder_opt: read_adam(&c, "encoder", &p["encoder_opt"], &params)?,
                head_opt: read_adam(&c, "aam", &p["head_opt"], &head_params)?,
            }),
        };
        Ok(Self {
            encoder,
            params,
            head,
            head_params,
            progress,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(Container::load(path)?)
    }
}

/// Fusion network on its own, loadable without the encoder.
pub fn fusion_container(
    config: &UNetConfig,
    params: &ParamStore<f32>,
    init_seed: u64,
) -> Container {
    Container::new("fusion", json!({"unet": config, "init_seed": init_seed}))
        .with_group("fusion", params)
}

pub fn load_fusion(path: impl AsRef<Path>) -> Result<crate::fusion::Fusion> {
    let c = Container::load(path)?;
    let c = if c.kind == "joint" {
        c
    } else {
        c.expect_kind("fusion")?
    };
    let cfg: UNetConfig = meta_field(&c.meta, "unet")?;
    let init_seed: u64 = meta_field(&c.meta, "init_seed")?;
    let (net, mut params) = UNet::new::<f32>(&cfg, init_seed)?;
    checked_copy(&mut params, c.group("fusion")?, "fusion")?;
    Ok(crate::fusion::Fusion {
        net,
        params,
        init_seed,
    })
}

/// Complete joint-training state: enough to evaluate or resume exactly.
#[derive(Debug, Clone)]
pub struct JointCheckpoint {
    pub config: ExperimentConfig,
    pub fusion_net: UNet,
    pub fusion: ParamStore<f32>,
    pub fusion_init_seed: u64,
    pub fusion_opt: Adam<f32>,
    pub encoder: SpeakerEncoder,
    pub ema: EmaState<f32>,
    pub encoder_opt: Adam<f32>,
    pub head: AamHead,
    pub head_params: ParamStore<f32>,
    pub head_opt: Adam<f32>,
    pub enhancer_hashes: Vec<(String, String)>,
    /// optimizer steps taken; all per-step randomness derives from it
    pub step: u64,
}

impl JointCheckpoint {
    pub fn to_container(&self) -> Container {
        let meta = json!({
            "format_version": FORMAT_VERSION,
            "config_toml": self.config.to_toml_string(),
            "unet": self.fusion_net.config(),
            "init_seed": self.fusion_init_seed,
            "encoder": self.encoder.config(),
            "aam": self.head.config,
            "classes": self.head.classes,
            "ema": {"alpha": self.ema.alpha, "step": self.ema.step},
            "enhancers": self.enhancer_hashes,
            "rng": {"seed": self.config.seed, "step": self.step},
            "fusion_opt": adam_meta(&self.fusion_opt),
            "encoder_opt": adam_meta(&self.encoder_opt),
            "aam_opt": adam_meta(&self.head_opt),
        });
        let c = Container::new("joint", meta)
            .with_group("fusion", &self.fusion)
            .with_group("encoder.model", &self.ema.theta_model)
            .with_group("encoder.ema", &self.ema.theta_ema)
            .with_group("aam", &self.head_params);
        let c = with_adam(c, "fusion", &self.fusion_opt, &self.fusion);
        let c = with_adam(c, "encoder", &self.encoder_opt, &self.ema.theta_model);
        with_adam(c, "aam", &self.head_opt, &self.head_params)
    }

    pub fn from_container(c: Container) -> Result<Self> {
        let c = c.expect_kind("joint")?;
        let m = &c.meta;
        let config = ExperimentConfig::from_toml_str(&meta_field::<String>(m, "config_toml")?)?;
        let unet: UNetConfig = meta_field(m, "unet")?;
        let init_seed: u64 = meta_field(m, "init_seed")?;
        let (fusion_net, mut fusion) = UNet::new::<f32>(&unet, init_seed)?;
        checked_copy(&mut fusion, c.group("fusion")?, "fusion")?;
        let enc_cfg: EncoderConfig = meta_field(m, "encoder")?;
        let (encoder, mut model) = SpeakerEncoder::new::<f32>(&enc_cfg, 0)?;
        let mut shadow = model.clone();
        checked_copy(&mut model, c.group("encoder.model")?, "encoder")?;
        checked_copy(&mut shadow, c.group("encoder.ema")?, "EMA encoder")?;
        let ema = EmaState {
            theta_model: model,
            theta_ema: shadow,
            alpha: meta_field(&m["ema"], "alpha")?,
            step: meta_field(&m["ema"], "step")?,
        };
        let (head, mut head_params) = AamHead::new::<f32>(
            meta_field(m, "classes")?,
            enc_cfg.embedding_dim,
            meta_field(m, "aam")?,
            0,
        )?;
        checked_copy(&mut head_params, c.group("aam")?, "AAM head")?;
        Ok(Self {
            fusion_opt: read_adam(&c, "fusion", &m["fusion_opt"], &fusion)?,
            encoder_opt: read_adam(&c, "encoder", &m["encoder_opt"], &ema.theta_model)?,
            head_opt: read_adam(&c, "aam", &m["aam_opt"], &head_params)?,
            enhancer_hashes: meta_field(m, "enhancers")?,
            step: meta_field(&m["rng"], "step")?,
            config,
            fusion_net,
            fusion,
            fusion_init_seed: init_seed,
            encoder,
            ema,
            head,
            head_params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(Container::load(path)?)
    }

    /// Every stored enhancer hash must match the registry entry of that name.
    pub fn verify_enhancers(&self, registry: &EnhancerRegistry) -> Result<()> {
        for (name, hash) in &self.enhancer_hashes {
            match registry.get(name) {
                Some(e) if &e.hash() == hash => {}
                _ => return Err(Error::EnhancerMismatch { name: name.clone() }),
            }
        }
        Ok(())
    }
}
