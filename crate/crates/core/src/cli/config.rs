use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::distill::LossConfig;
use crate::etp::{IpsConfig, IpsSchedule, SubnetSpace, DESK_W_FEAT};
use crate::microdet::{gen_dataset, Dataset, LrSchedule, TrainConfig, RESOLUTIONS};
use crate::netgraph::{decode_arch, encode_arch, ArchSpec};
use crate::search::SearchConfig;
use crate::{Error, Result};

/// One JSON document drives every command. `seed` and `dataset.n_scenes`
/// are required; everything else has a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds initialisation, training order, pool sampling and the search.
    pub seed: u64,
    pub dataset: DatasetConfig,
    #[serde(default = "SubnetSpace::desk")]
    pub space: SubnetSpace,
    #[serde(default)]
    pub ips: IpsRunConfig,
    #[serde(default)]
    pub base: BaseConfig,
    /// Its `seed` field is replaced by the top-level seed.
    #[serde(default)]
    pub search: SearchConfig,
    #[serde(default)]
    pub ablate: AblateConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// Training scenes.
    pub n_scenes: usize,
    #[serde(default = "default_val_scenes")]
    pub val_scenes: usize,
    #[serde(default = "default_resolutions")]
    pub resolutions: Vec<usize>,
    #[serde(default = "default_train_seed")]
    pub train_seed: u64,
    #[serde(default = "default_val_seed")]
    pub val_seed: u64,
}

fn default_val_scenes() -> usize {
    200
}

fn default_resolutions() -> Vec<usize> {
    RESOLUTIONS.to_vec()
}

fn default_train_seed() -> u64 {
    1000
}

fn default_val_seed() -> u64 {
    999_999
}

impl DatasetConfig {
    pub fn train(&self) -> Dataset {
        gen_dataset(self.train_seed, self.n_scenes, &self.resolutions)
    }

    pub fn val(&self) -> Dataset {
        gen_dataset(self.val_seed, self.val_scenes, &self.resolutions)
    }
}

/// Pool training. `phases` overrides the three-phase schedule built from
/// `epochs` and `lrs`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IpsRunConfig {
    pub epochs: [usize; 3],
    pub lrs: [f64; 3],
    pub phases: Option<IpsSchedule>,
    pub batch_size: usize,
    pub scenes_per_epoch: Option<usize>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub grad_clip: Option<f64>,
    pub loss: LossConfig,
}

impl Default for IpsRunConfig {
    fn default() -> Self {
        let d = IpsConfig::default();
        Self {
            epochs: [12, 6, 6],
            lrs: [0.01, 0.004, 0.004],
            phases: None,
            batch_size: d.batch_size,
            scenes_per_epoch: d.scenes_per_epoch,
            momentum: d.momentum,
            weight_decay: d.weight_decay,
            grad_clip: d.grad_clip,
            loss: d.loss,
        }
    }
}

/// The base student, trained from scratch without distillation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaseConfig {
    /// Architecture encoding.
    pub arch: String,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub scenes_per_epoch: Option<usize>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lambda_bn: f64,
}

impl Default for BaseConfig {
    fn default() -> Self {
        Self {
            arch: encode_arch(&ArchSpec::desk_base()),
            epochs: 12,
            lr: 0.01,
            batch_size: 4,
            scenes_per_epoch: None,
            momentum: 0.9,
            weight_decay: 1e-4,
            lambda_bn: LossConfig::default().lambda_bn,
        }
    }
}

/// Ablation studies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    /// Seeds of the repeated runs (kd-matrix, prune-sweep).
    pub seeds: Vec<u64>,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub scenes_per_epoch: Option<usize>,
    pub loss: LossConfig,
    /// Resolution the learning curves and sweeps are evaluated at.
    pub eval_resolution: usize,
    /// Teachers drawn per iteration in dkd-vs-ckd are picked from this many
    /// pool subnets.
    pub dkd_panel: usize,
    pub prune_fractions: Vec<f64>,
    /// Fine-tuning epochs after each prune.
    pub prune_finetune_epochs: usize,
    /// Student architecture encodings; empty means the base architecture.
    pub kd_students: Vec<String>,
    /// Pool subnets used as teachers; empty means the maximal subnet.
    pub kd_teachers: Vec<crate::etp::SubnetChoice>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            epochs: 6,
            lr: 0.01,
            batch_size: 4,
            scenes_per_epoch: None,
            loss: LossConfig { w_feat: DESK_W_FEAT, ..LossConfig::default() },
            eval_resolution: crate::microdet::R_BASE,
            dkd_panel: 8,
            prune_fractions: vec![0.0, 0.1, 0.2, 0.3],
            prune_finetune_epochs: 1,
            kd_students: Vec::new(),
            kd_teachers: Vec::new(),
        }
    }
}

impl RunConfig {
    /// Parses `text`, reporting the failing field path.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let mut cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            if path == "." {
                Error::input(format!("config: {}", e.inner()))
            } else {
                Error::input(format!("config field `{path}`: {}", e.inner()))
            }
        })?;
        cfg.search.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let bytes = std::fs::read(path).map_err(|e| Error::input(format!("cannot read config {}: {e}", path.display())))?;
        let text = String::from_utf8(bytes).map_err(|_| Error::input(format!("config {} is not UTF-8", path.display())))?;
        Ok((Self::from_json(&text)?, sha256_hex(text.as_bytes())))
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
            self.search.seed = s;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        if d.n_scenes == 0 || d.val_scenes == 0 {
            return Err(Error::input("config field `dataset`: n_scenes and val_scenes must be >= 1"));
        }
        if d.resolutions.is_empty() {
            return Err(Error::input("config field `dataset.resolutions`: empty"));
        }
        self.space.validate().map_err(|e| Error::input(format!("config field `space`: {e}")))?;
        for r in self.space.resolutions.iter().chain(&self.search.resolutions) {
            if !d.resolutions.contains(r) {
                return Err(Error::input(format!("resolution {r} is not rendered by `dataset.resolutions` {:?}", d.resolutions)));
            }
        }
        self.ips_schedule().validate().map_err(|e| Error::input(format!("config field `ips`: {e}")))?;
        self.base_arch()?;
        self.search.validate().map_err(|e| Error::input(format!("config field `search`: {e}")))?;
        let a = &self.ablate;
        if a.seeds.is_empty() || a.epochs == 0 || a.batch_size == 0 || a.dkd_panel == 0 {
            return Err(Error::input("config field `ablate`: seeds, epochs, batch_size and dkd_panel must be non-empty / >= 1"));
        }
        if !d.resolutions.contains(&a.eval_resolution) {
            return Err(Error::input(format!("config field `ablate.eval_resolution`: {} is not rendered", a.eval_resolution)));
        }
        a.loss.validate().map_err(|e| Error::input(format!("config field `ablate.loss`: {e}")))?;
        Ok(())
    }

    pub fn ips_schedule(&self) -> IpsSchedule {
        match &self.ips.phases {
            Some(s) => s.clone(),
            None => IpsSchedule::three_phase(&self.space, self.ips.lrs, self.ips.epochs),
        }
    }

    pub fn ips_config(&self) -> IpsConfig {
        let i = &self.ips;
        IpsConfig {
            batch_size: i.batch_size,
            scenes_per_epoch: i.scenes_per_epoch,
            momentum: i.momentum,
            weight_decay: i.weight_decay,
            grad_clip: i.grad_clip,
            loss: i.loss.clone(),
            seed: self.seed,
        }
    }

    pub fn base_arch(&self) -> Result<ArchSpec> {
        decode_arch(&self.base.arch).map_err(|e| Error::input(format!("config field `base.arch`: {e}")))
    }

    /// Training of the base student.
    pub fn base_train_config(&self) -> TrainConfig {
        let b = &self.base;
        TrainConfig {
            epochs: b.epochs,
            batch_size: b.batch_size,
            scenes_per_epoch: b.scenes_per_epoch,
            lr: LrSchedule::Cosine { lr0: b.lr },
            momentum: b.momentum,
            weight_decay: b.weight_decay,
            resolutions: self.dataset.resolutions.clone(),
            loss: LossConfig { lambda_bn: b.lambda_bn, ..LossConfig::default() }.without_kd(),
            seed: self.seed,
            shuffle: true,
        }
    }

    /// Training used by the ablations.
    pub fn ablate_train_config(&self, seed: u64, distill: bool) -> TrainConfig {
        let a = &self.ablate;
        TrainConfig {
            epochs: a.epochs,
            batch_size: a.batch_size,
            scenes_per_epoch: a.scenes_per_epoch,
            lr: LrSchedule::Cosine { lr0: a.lr },
            momentum: 0.9,
            weight_decay: 1e-4,
            resolutions: self.dataset.resolutions.clone(),
            loss: if distill { a.loss.clone() } else { a.loss.without_kd() },
            seed,
            shuffle: true,
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
