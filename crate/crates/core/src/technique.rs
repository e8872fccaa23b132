//! Technique configuration and dispatch.

use serde::{Deserialize, Serialize};

use crate::channel::{CallRole, ChannelRef};
use crate::diversity;
use crate::error::{Error, Result};
use crate::fec;
use crate::rateless::{self, FountainParams};
use crate::record::{RunContext, RunRecord, Trace};
use crate::retransmit::{self, HarqCcParams, HarqIrParams, TurboParams};
use crate::routing::{self, McsProfile};

/// The generator channels plus the judge. Role channels are looked up by
/// name; `"judge"` names the judge channel.
#[derive(Clone)]
pub struct ChannelPool {
    pub channels: Vec<ChannelRef>,
    pub judge: ChannelRef,
}

impl ChannelPool {
    pub fn new(channels: Vec<ChannelRef>, judge: ChannelRef) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::validation("channel pool needs at least one channel"));
        }
        Ok(Self { channels, judge })
    }

    pub fn find(&self, name: &str) -> Option<ChannelRef> {
        if name == "judge" {
            return Some(self.judge.clone());
        }
        self.channels
            .iter()
            .find(|c| c.config().display_name() == name || c.config().model_id == name)
            .cloned()
            .or_else(|| {
                let j = self.judge.config();
                (j.display_name() == name || j.model_id == name).then(|| self.judge.clone())
            })
    }

    fn resolve(&self, name: Option<&str>, default: &ChannelRef) -> Result<ChannelRef> {
        match name {
            None => Ok(default.clone()),
            Some(n) => self
                .find(n)
                .ok_or_else(|| Error::validation(format!("unknown channel {n:?}"))),
        }
    }

    pub fn first(&self) -> &ChannelRef {
        &self.channels[0]
    }

    /// The same pool with the named channel moved to the front, when present.
    pub fn preferring(&self, name: Option<&str>) -> ChannelPool {
        let mut channels = self.channels.clone();
        if let Some(n) = name {
            if let Some(pos) = channels
                .iter()
                .position(|c| c.config().display_name() == n || c.config().model_id == n)
            {
                let c = channels.remove(pos);
                channels.insert(0, c);
            }
        }
        ChannelPool {
            channels,
            judge: self.judge.clone(),
        }
    }
}

fn default_n() -> usize {
    5
}

fn default_rate() -> f64 {
    0.75
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "technique", rename_all = "snake_case")]
pub enum TechniqueConfig {
    Baseline {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        generator: Option<String>,
    },
    DiversitySc,
    DiversityMrc {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        synthesizer: Option<String>,
    },
    DiversityEgc {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        synthesizer: Option<String>,
    },
    DiversityScN {
        #[serde(default = "default_n")]
        n: usize,
    },
    DiversityMrcDiscreteN {
        #[serde(default = "default_n")]
        n: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        voter: Option<String>,
    },
    DiversityMrcDiscreteNSoft {
        #[serde(default = "default_n")]
        n: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        voter: Option<String>,
    },
    SoftMrc {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        synthesizer: Option<String>,
    },
    HarqCc {
        #[serde(flatten)]
        params: HarqCcParams,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        synthesizer: Option<String>,
    },
    HarqIr {
        #[serde(flatten)]
        params: HarqIrParams,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        critic: Option<String>,
    },
    Turbo {
        #[serde(flatten)]
        params: TurboParams,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        critic: Option<String>,
    },
    Fountain {
        #[serde(flatten)]
        params: FountainParams,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        synthesizer: Option<String>,
    },
    SoftFountain {
        #[serde(flatten)]
        params: FountainParams,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        synthesizer: Option<String>,
    },
    Fec {
        #[serde(default = "default_rate")]
        rate: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        decoder: Option<String>,
    },
    Acm {
        profiles: Vec<McsProfile>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        probe: Option<String>,
    },
}

impl TechniqueConfig {
    pub fn baseline() -> Self {
        TechniqueConfig::Baseline { generator: None }
    }

    /// The technique's canonical identifier.
    pub fn id(&self) -> &'static str {
        match self {
            TechniqueConfig::Baseline { .. } => "baseline",
            TechniqueConfig::DiversitySc => "diversity_sc",
            TechniqueConfig::DiversityMrc { .. } => "diversity_mrc",
            TechniqueConfig::DiversityEgc { .. } => "diversity_egc",
            TechniqueConfig::DiversityScN { .. } => "diversity_sc_n",
            TechniqueConfig::DiversityMrcDiscreteN { .. } => "diversity_mrc_discrete_n",
            TechniqueConfig::DiversityMrcDiscreteNSoft { .. } => "diversity_mrc_discrete_n_soft",
            TechniqueConfig::SoftMrc { .. } => "soft_mrc",
            TechniqueConfig::HarqCc { .. } => "harq_cc",
            TechniqueConfig::HarqIr { .. } => "harq_ir",
            TechniqueConfig::Turbo { .. } => "turbo",
            TechniqueConfig::Fountain { .. } => "fountain",
            TechniqueConfig::SoftFountain { .. } => "soft_fountain",
            TechniqueConfig::Fec { .. } => "fec",
            TechniqueConfig::Acm { .. } => "acm",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            TechniqueConfig::DiversityScN { n } if *n == 0 => {
                Err(Error::validation("diversity_sc_n needs n >= 1"))
            }
            TechniqueConfig::DiversityMrcDiscreteN { n, .. }
            | TechniqueConfig::DiversityMrcDiscreteNSoft { n, .. }
                if *n < 2 =>
            {
                Err(Error::validation("discrete MRC-N needs n >= 2"))
            }
            TechniqueConfig::HarqCc { params, .. } if params.max_rounds == 0 => {
                Err(Error::validation("harq_cc needs max_rounds >= 1"))
            }
            TechniqueConfig::HarqIr { params, .. } if params.max_rounds == 0 => {
                Err(Error::validation("harq_ir needs max_rounds >= 1"))
            }
            TechniqueConfig::Turbo { params, .. } if params.max_iterations == 0 => {
                Err(Error::validation("turbo needs max_iterations >= 1"))
            }
            TechniqueConfig::Fountain { params, .. }
            | TechniqueConfig::SoftFountain { params, .. } => params.validate(),
            TechniqueConfig::Fec { rate, .. } => fec::parity_plan(*rate).map(|_| ()),
            TechniqueConfig::Acm { profiles, .. } => routing::validate_profiles(profiles),
            _ => Ok(()),
        }
    }

    pub fn run(&self, pool: &ChannelPool, ctx: &RunContext<'_>) -> Result<RunRecord> {
        let first = pool.first();
        let judge = &pool.judge;
        let channels = &pool.channels;
        match self {
            TechniqueConfig::Baseline { generator } => {
                run_baseline(&pool.resolve(generator.as_deref(), first)?, ctx)
            }
            TechniqueConfig::DiversitySc => diversity::run_sc(channels, ctx),
            TechniqueConfig::DiversityMrc { synthesizer } => {
                diversity::run_mrc(channels, &pool.resolve(synthesizer.as_deref(), judge)?, ctx)
            }
            TechniqueConfig::DiversityEgc { synthesizer } => {
                diversity::run_egc(channels, &pool.resolve(synthesizer.as_deref(), judge)?, ctx)
            }
            TechniqueConfig::DiversityScN { n } => diversity::run_sc_n(channels, *n, ctx),
            TechniqueConfig::DiversityMrcDiscreteN { n, voter } => diversity::run_mrc_discrete_n(
                channels,
                *n,
                &pool.resolve(voter.as_deref(), first)?,
                ctx,
            ),
            TechniqueConfig::DiversityMrcDiscreteNSoft { n, voter } => {
                diversity::run_mrc_discrete_n_soft(
                    channels,
                    *n,
                    &pool.resolve(voter.as_deref(), first)?,
                    ctx,
                )
            }
            TechniqueConfig::SoftMrc { synthesizer } => diversity::run_soft_mrc(
                channels,
                &pool.resolve(synthesizer.as_deref(), judge)?,
                ctx,
            ),
            TechniqueConfig::HarqCc {
                params,
                synthesizer,
            } => retransmit::run_harq_cc(
                first,
                &pool.resolve(synthesizer.as_deref(), first)?,
                params,
                ctx,
            ),
            TechniqueConfig::HarqIr { params, critic } => retransmit::run_harq_ir(
                first,
                &pool.resolve(critic.as_deref(), first)?,
                params,
                ctx,
            ),
            TechniqueConfig::Turbo { params, critic } => {
                retransmit::run_turbo(first, &pool.resolve(critic.as_deref(), first)?, params, ctx)
            }
            TechniqueConfig::Fountain {
                params,
                synthesizer,
            } => rateless::run_fountain(
                channels,
                &pool.resolve(synthesizer.as_deref(), judge)?,
                params,
                ctx,
            ),
            TechniqueConfig::SoftFountain {
                params,
                synthesizer,
            } => rateless::run_soft_fountain(
                channels,
                &pool.resolve(synthesizer.as_deref(), judge)?,
                params,
                ctx,
            ),
            TechniqueConfig::Fec { rate, decoder } => {
                fec::run_fec(first, &pool.resolve(decoder.as_deref(), first)?, *rate, ctx)
            }
            TechniqueConfig::Acm { profiles, probe } => {
                routing::run_acm(pool, &pool.resolve(probe.as_deref(), first)?, profiles, ctx)
            }
        }
    }
}

/// A technique under a user-facing name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TechniqueSpec {
    #[serde(default)]
    pub name: String,
    #[serde(flatten)]
    pub config: TechniqueConfig,
}

impl TechniqueSpec {
    pub fn new(config: TechniqueConfig) -> Self {
        Self {
            name: config.id().to_string(),
            config,
        }
    }

    pub fn named(name: impl Into<String>, config: TechniqueConfig) -> Self {
        Self {
            name: name.into(),
            config,
        }
    }

    pub fn name(&self) -> &str {
        if self.name.is_empty() {
            self.config.id()
        } else {
            &self.name
        }
    }

    pub fn run(&self, pool: &ChannelPool, ctx: &RunContext<'_>) -> Result<RunRecord> {
        let mut record = self.config.run(pool, ctx)?;
        record.technique = self.name().to_string();
        Ok(record)
    }
}

/// One uncoded call plus one judge call.
pub fn run_baseline(channel: &ChannelRef, ctx: &RunContext<'_>) -> Result<RunRecord> {
    let mut trace = Trace::new();
    let out = ctx.call(
        channel,
        ctx.task.prompt.clone(),
        CallRole::Generate,
        None,
        ctx.nonce(),
    )?;
    let q = trace.judged(ctx.score(&out.text, ctx.nonce())?);
    let text = out.text.clone();
    trace.individual(out, Some(q));
    trace.history.push(q);
    Ok(trace.finish(ctx, "baseline", text, q, 1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_with_defaults() {
        let t: TechniqueSpec = serde_json::from_str(r#"{"technique":"turbo","tau":0.8}"#).unwrap();
        match &t.config {
            TechniqueConfig::Turbo { params, critic } => {
                assert_eq!(params.tau, 0.8);
                assert_eq!(params.max_iterations, 5);
                assert!(critic.is_none());
            }
            other => panic!("parsed as {other:?}"),
        }
        assert_eq!(t.name(), "turbo");
        let back: TechniqueSpec =
            serde_json::from_str(&serde_json::to_string(&t).unwrap()).unwrap();
        assert_eq!(back.config, t.config);
        let b: TechniqueSpec =
            serde_json::from_str(r#"{"name":"b","technique":"baseline"}"#).unwrap();
        assert_eq!(b.config, TechniqueConfig::baseline());
        let f: TechniqueSpec =
            serde_json::from_str(r#"{"technique":"fountain","n_max":4}"#).unwrap();
        assert!(
            matches!(f.config, TechniqueConfig::Fountain { ref params, .. } if params.n_max == 4 && params.n_min == 2)
        );
    }

    #[test]
    fn validation_catches_bad_parameters() {
        assert!(TechniqueConfig::Fec {
            rate: 0.6,
            decoder: None
        }
        .validate()
        .is_err());
        assert!(TechniqueConfig::DiversityMrcDiscreteN { n: 1, voter: None }
            .validate()
            .is_err());
        assert!(TechniqueConfig::DiversityScN { n: 1 }.validate().is_ok());
    }
}
