use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Denoiser, CHECKPOINT_FILE};
use crate::diffusion::{sample, DiffusionSchedule, SampleOptions, ScheduleKind};
use crate::error::{Error, Result};
use crate::lora::{Adapted, AdapterSet};
use crate::motion::{FeatureStats, MotionSequence};
use crate::tensor::rng;

pub const STATS_FILE: &str = "stats.json";
pub const DIFFUSION_FILE: &str = "diffusion.json";

/// Clips generated per sampling batch.
const CHUNK: usize = 32;

#[derive(Serialize, Deserialize)]
struct DiffusionMeta {
    schedule: ScheduleKind,
    steps: usize,
}

/// A trained denoiser together with the normalization it was trained under.
#[derive(Clone, Debug)]
pub struct BaseModel {
    pub denoiser: Denoiser,
    pub stats: FeatureStats,
    pub schedule: ScheduleKind,
}

impl BaseModel {
    /// The schedule used for sampling: the model's own step count.
    pub fn sampling_schedule(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::new(self.denoiser.config().base_steps, self.schedule)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.denoiser.save(dir)?;
        self.stats.save(&dir.join(STATS_FILE))?;
        let meta = DiffusionMeta {
            schedule: self.schedule,
            steps: self.denoiser.config().base_steps,
        };
        std::fs::write(dir.join(DIFFUSION_FILE), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        if !dir.join(CHECKPOINT_FILE).is_file() {
            return Err(Error::MissingArtifact(format!("no base model in {}", dir.display())));
        }
        let denoiser = Denoiser::load(dir)?;
        let stats = FeatureStats::load(&dir.join(STATS_FILE))?;
        if stats.dim() != denoiser.config().feature_dim {
            return Err(Error::shape("base_model", &[stats.dim()], &[denoiser.config().feature_dim]));
        }
        let meta: DiffusionMeta = serde_json::from_str(&std::fs::read_to_string(dir.join(DIFFUSION_FILE))?)?;
        if meta.steps != denoiser.config().base_steps {
            return Err(Error::format(
                dir.join(DIFFUSION_FILE),
                "step count disagrees with the denoiser config",
            ));
        }
        Ok(BaseModel {
            denoiser,
            stats,
            schedule: meta.schedule,
        })
    }

    /// Tokenizes `prompts` (style tokens resolved through `adapters`) and
    /// samples one clip per prompt.
    pub fn generate(&self, adapters: Option<&AdapterSet>, prompts: &[String], opts: &SampleOptions) -> Result<Vec<MotionSequence>> {
        let vocab = self.denoiser.vocab();
        let ids = prompts
            .iter()
            .map(|p| match adapters {
                Some(a) => vocab.tokenize(p, &a.style_lookup()),
                None => vocab.tokenize_plain(p),
            })
            .collect::<Result<Vec<_>>>()?;
        let sched = self.sampling_schedule()?;
        let mut out = Vec::with_capacity(ids.len());
        for (i, chunk) in ids.chunks(CHUNK).enumerate() {
            let o = SampleOptions {
                seed: rng::derive(opts.seed, &format!("chunk{i}")),
                ..*opts
            };
            let clips = match adapters {
                Some(a) => sample(
                    &Adapted {
                        model: &self.denoiser,
                        adapters: a,
                    },
                    chunk,
                    &self.stats,
                    &sched,
                    &o,
                )?,
                None => sample(&self.denoiser, chunk, &self.stats, &sched, &o)?,
            };
            out.extend(clips);
        }
        Ok(out)
    }
}

/// `"{base} in <a> style"`, or `"{base} in <a> style and in <b> style"` for
/// several styles.
pub fn styled_prompt<S: AsRef<str>>(base: &str, styles: &[S]) -> String {
    let mut p = base.trim().to_string();
    for (i, s) in styles.iter().enumerate() {
        if i > 0 {
            p.push_str(" and");
        }
        p.push_str(&format!(" in <{}> style", s.as_ref()));
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DenoiserConfig, Vocab};

    #[test]
    fn prompts() {
        assert_eq!(styled_prompt::<&str>("a person is walking", &[]), "a person is walking");
        assert_eq!(
            styled_prompt("a person is walking", &["bounce"]),
            "a person is walking in <bounce> style"
        );
        assert_eq!(
            styled_prompt("a person is walking", &["bounce", "lean"]),
            "a person is walking in <bounce> style and in <lean> style"
        );
    }

    #[test]
    fn save_load_generate() {
        let cfg = DenoiserConfig {
            feature_dim: 59,
            d_model: 16,
            layers: 1,
            heads: 2,
            ffn: 32,
            base_steps: 10,
        };
        let base = BaseModel {
            denoiser: Denoiser::new(cfg, Vocab::toy(), 0).unwrap(),
            stats: FeatureStats::identity(59),
            schedule: ScheduleKind::Linear,
        };
        let dir = tempfile::tempdir().unwrap();
        base.save(dir.path()).unwrap();
        let back = BaseModel::load(dir.path()).unwrap();
        assert_eq!(back.schedule, ScheduleKind::Linear);
        let opts = SampleOptions {
            frames: 8,
            guidance: 2.5,
            seed: 3,
        };
        let p = vec!["a person is walking forward".to_string(); 2];
        let a = base.generate(None, &p, &opts).unwrap();
        let b = back.generate(None, &p, &opts).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].frames(), 8);
        assert!(matches!(BaseModel::load(&dir.path().join("nope")), Err(Error::MissingArtifact(_))));
        assert!(matches!(
            base.generate(None, &["a person is dancing".into()], &opts),
            Err(Error::UnknownToken(_))
        ));
    }
}
