use std::collections::BTreeMap;
use std::path::Path;

use super::{stream_rng, Stream};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::lidf::Stage1Model;
use crate::nn::{checkpoint, Module, Tensor};
use crate::refine::RefineModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BundleKind {
    Stage1,
    Refined,
}
text_enum!(BundleKind { Stage1 => "stage1", Refined => "refined" });

/// Models of both stages together with the configuration that built them.
///
/// On disk the checkpoint metadata holds `bundle = <kind>` on its first line
/// followed by the full reference configuration.
#[derive(Clone, Debug)]
pub struct Bundle {
    pub config: Config,
    pub stage1: Stage1Model,
    pub refine: Option<RefineModel>,
}

impl Bundle {
    /// Freshly initialized stage-1 model.
    pub fn init(config: Config) -> Self {
        let stage1 = Stage1Model::new(config.model.clone(), &mut stream_rng(config.seed, Stream::Stage1Init, 0));
        Self {
            config,
            stage1,
            refine: None,
        }
    }

    pub fn init_refine(config: &Config) -> RefineModel {
        RefineModel::new(config.model.clone(), &mut stream_rng(config.seed, Stream::RefineInit, 0))
    }

    pub fn kind(&self) -> BundleKind {
        if self.refine.is_some() {
            BundleKind::Refined
        } else {
            BundleKind::Stage1
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let meta = format!("bundle = {}\n{}", self.kind(), self.config.reference());
        let mut tensors: Vec<(&str, &Tensor)> = self.stage1.params().into_iter().map(|p| (p.name(), p.value())).collect();
        if let Some(r) = &self.refine {
            tensors.extend(r.params().into_iter().map(|p| (p.name(), p.value())));
        }
        checkpoint::encode_with_meta(&meta, tensors)
    }

    pub fn decode(buf: &[u8], path: &Path) -> Result<Self> {
        let (meta, tensors) = checkpoint::decode_with_meta(buf, path)?;
        let format = |msg: String| Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            msg,
        };
        let (head, body) = meta.split_once('\n').unwrap_or((meta.as_str(), ""));
        let kind: BundleKind = head
            .strip_prefix("bundle = ")
            .ok_or_else(|| format(format!("checkpoint metadata starts with {head:?}, not a bundle kind")))?
            .parse()
            .map_err(|e| format(format!("{e}")))?;
        let config = Config::parse(body).map_err(|e| format(format!("embedded configuration: {e}")))?;

        let mut bundle = Self::init(config);
        if kind == BundleKind::Refined {
            bundle.refine = Some(Self::init_refine(&bundle.config));
        }
        let mut table: BTreeMap<String, Tensor> = tensors.into_iter().collect();
        let mut restore = |m: &mut dyn Module| -> Result<()> {
            for p in m.params_mut() {
                let t = table
                    .remove(p.name())
                    .ok_or_else(|| format(format!("checkpoint lacks tensor {}", p.name())))?;
                if t.shape() != p.value().shape() {
                    return Err(format(format!(
                        "tensor {} has shape {:?}, the model expects {:?}",
                        p.name(),
                        t.shape(),
                        p.value().shape()
                    )));
                }
                *p.value_mut() = t;
            }
            Ok(())
        };
        restore(&mut bundle.stage1)?;
        if let Some(r) = bundle.refine.as_mut() {
            restore(r)?;
        }
        if let Some(name) = table.keys().next() {
            return Err(format(format!("checkpoint has unexpected tensor {name}")));
        }
        Ok(bundle)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&buf, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::PosEnc;

    fn small_config() -> Config {
        let mut c = Config::default();
        c.model.grid_n = 4;
        c.model.hidden = 8;
        c.model.c_v = 8;
        c.model.pe = PosEnc::new(2, true);
        c.seed = 3;
        c
    }

    #[test]
    fn round_trip_restores_every_parameter() {
        let cfg = small_config();
        let mut b = Bundle::init(cfg.clone());
        b.refine = Some(Bundle::init_refine(&cfg));
        b.stage1.f_pos.layers[0].bias.value_mut().data_mut()[0] = 1.25;
        let back = Bundle::decode(&b.encode(), Path::new("mem")).unwrap();
        assert_eq!(back.kind(), BundleKind::Refined);
        assert_eq!(back.config, cfg);
        let all = |x: &Bundle| -> Vec<Vec<u32>> {
            let mut v: Vec<Vec<u32>> = x.stage1.params().iter().map(|p| p.value().data().iter().map(|f| f.to_bits()).collect()).collect();
            v.extend(x.refine.as_ref().unwrap().params().iter().map(|p| p.value().data().iter().map(|f| f.to_bits()).collect()));
            v
        };
        assert_eq!(all(&back), all(&b));
    }

    #[test]
    fn initialization_depends_only_on_the_seed() {
        let a = Bundle::init(small_config()).encode();
        let b = Bundle::init(small_config()).encode();
        assert_eq!(a, b);
        let mut other = small_config();
        other.seed = 4;
        assert_ne!(a, Bundle::init(other).encode());
    }

    #[test]
    fn stage1_bundle_rejects_foreign_tensors() {
        let cfg = small_config();
        let b = Bundle::init(cfg.clone());
        let meta = format!("bundle = stage1\n{}", cfg.reference());
        let extra = Tensor::scalar(1.0);
        let mut tensors: Vec<(&str, &Tensor)> = b.stage1.params().into_iter().map(|p| (p.name(), p.value())).collect();
        tensors.push(("stray", &extra));
        let buf = checkpoint::encode_with_meta(&meta, tensors);
        let err = Bundle::decode(&buf, Path::new("x.ckpt")).unwrap_err().to_string();
        assert!(err.contains("stray"), "{err}");
    }

    #[test]
    fn architecture_mismatch_is_a_format_error() {
        let cfg = small_config();
        let b = Bundle::init(cfg.clone());
        let mut wider = cfg;
        wider.model.hidden = 16;
        let meta = format!("bundle = stage1\n{}", wider.reference());
        let tensors: Vec<(&str, &Tensor)> = b.stage1.params().into_iter().map(|p| (p.name(), p.value())).collect();
        let buf = checkpoint::encode_with_meta(&meta, tensors);
        assert!(matches!(Bundle::decode(&buf, Path::new("x")), Err(Error::Format { .. })));
    }
}
