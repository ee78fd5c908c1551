//! End-to-end runs: split, k-shot sampling, mixture fit, particle transport,
//! prompt synthesis, training and evaluation, repeated over seeds.
//!
//! Each stage is also exposed on its own. Given the same top-level seed a
//! stage derives the same random stream whether it runs inside
//! [`run_pipeline_seed`] or alone, so chaining the stage functions (or the
//! CLI subcommands built on them) reproduces the pipeline exactly.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::embedding_store::{
    kshot_sample, kshot_with_rest, stratified_split, EmbeddingSet, SynthConfig,
};
use crate::error::{Error, Result};
use crate::gmm::{fit_gmm, EmConfig, GmmFit};
use crate::prompt_synthesis::{synthesize_prompts, PromptPack, TypePromptInit, WordEmbeddingTable};
use crate::seed::{
    derive_seed, STAGE_GMM, STAGE_KSHOT, STAGE_PROMPTS, STAGE_SPLIT, STAGE_SVGD, STAGE_TRAIN,
    STAGE_VAL,
};
use crate::svgd::{svgd_run, ParticleSet, SvgdConfig, TraceRow};
use crate::trainer_eval::{evaluate_f1, mean_std, train, Metrics, TrainConfig, TrainedPromptModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct Ablation {
    /// Single-component target instead of the mixture.
    pub gaussian: bool,
    /// Drop the type prompts from the scorer.
    pub del_tpw: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub k: usize,
    pub seeds: Vec<u64>,
    /// Mixture component count; defaults to the number of relations.
    pub components: Option<usize>,
    pub ablation: Ablation,
    pub type_init: TypePromptInit,
    pub em: EmConfig,
    pub svgd: SvgdConfig,
    pub train: TrainConfig,
    /// Data generated when no embedding file is given.
    pub synth: SynthConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            k: 16,
            seeds: vec![1, 2, 3, 4, 5],
            components: None,
            ablation: Ablation::default(),
            type_init: TypePromptInit::Latent,
            em: EmConfig::default(),
            svgd: SvgdConfig::default(),
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("at least one seed is required".into()));
        }
        if self.components == Some(0) {
            return Err(Error::InvalidConfig("components must be positive".into()));
        }
        self.em.validate()?;
        self.svgd.validate()?;
        self.train.validate()?;
        self.synth.validate()
    }

    pub fn n_components(&self, n_relations: usize) -> usize {
        if self.ablation.gaussian {
            1
        } else {
            self.components.unwrap_or(n_relations)
        }
    }

    pub fn effective_type_init(&self) -> TypePromptInit {
        if self.ablation.del_tpw {
            TypePromptInit::Absent
        } else {
            self.type_init
        }
    }
}

/// Train, validation and test splits for one seed.
pub struct Splits {
    pub train: EmbeddingSet,
    pub val: EmbeddingSet,
    pub test: EmbeddingSet,
}

/// Holds out `eval_split` of every class for testing, then draws a k-shot
/// training set and a disjoint k-shot validation set from the remainder.
pub fn stage_kshot(full: &EmbeddingSet, k: usize, eval_split: f64, seed: u64) -> Result<Splits> {
    let (pool, test) = stratified_split(full, eval_split, derive_seed(seed, STAGE_SPLIT))?;
    let (train, rest) = kshot_with_rest(&pool, k, derive_seed(seed, STAGE_KSHOT));
    let val = kshot_sample(&rest, k, derive_seed(seed, STAGE_VAL));
    Ok(Splits { train, val, test })
}

pub fn stage_fit_gmm(
    train: &EmbeddingSet,
    n_components: usize,
    em: &EmConfig,
    seed: u64,
) -> Result<GmmFit> {
    let config = EmConfig {
        seed: derive_seed(seed, STAGE_GMM),
        ..em.clone()
    };
    fit_gmm(train, n_components, &config)
}

/// Transports the training embeddings and returns them, rounded to f32, as
/// an embedding set carrying the training labels.
pub fn stage_svgd(
    train: &EmbeddingSet,
    target: &GmmFit,
    svgd: &SvgdConfig,
    seed: u64,
) -> Result<(EmbeddingSet, Vec<TraceRow>)> {
    let config = SvgdConfig {
        seed: derive_seed(seed, STAGE_SVGD),
        ..svgd.clone()
    };
    let init = ParticleSet::new(train.vectors().clone())?;
    let run = svgd_run(&init, &target.params, &config, None)?;
    let particles = train.with_vectors(run.particles.into_particles())?;
    Ok((particles, run.trace))
}

pub fn stage_prompts(
    train: &EmbeddingSet,
    particles: &EmbeddingSet,
    table: &WordEmbeddingTable,
    type_init: TypePromptInit,
    seed: u64,
) -> Result<PromptPack> {
    synthesize_prompts(
        train.relation_names(),
        train.token_stream(),
        table,
        particles.vectors().view(),
        type_init,
        derive_seed(seed, STAGE_PROMPTS),
    )
}

pub fn stage_train(
    splits_train: &EmbeddingSet,
    val: &EmbeddingSet,
    pack: &PromptPack,
    particles: &EmbeddingSet,
    config: &TrainConfig,
    seed: u64,
) -> Result<TrainedPromptModel> {
    let config = TrainConfig {
        seed: derive_seed(seed, STAGE_TRAIN),
        ..config.clone()
    };
    train(
        splits_train,
        val,
        pack,
        &config,
        Some(particles.vectors().view()),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub kshot_ms: f64,
    pub fit_gmm_ms: f64,
    pub svgd_ms: f64,
    pub synth_prompts_ms: f64,
    pub train_ms: f64,
    pub eval_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub metrics: Metrics,
    pub best_epoch: usize,
    pub train_rows: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timings: Option<StageTimings>,
}

/// Intermediate products of one seeded run.
pub struct SeedArtifacts {
    pub splits: Splits,
    pub gmm: GmmFit,
    pub particles: EmbeddingSet,
    pub pack: PromptPack,
    pub model: TrainedPromptModel,
    pub result: SeedResult,
}

fn elapsed_ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

pub fn run_pipeline_seed(
    full: &EmbeddingSet,
    config: &PipelineConfig,
    table: &WordEmbeddingTable,
    seed: u64,
) -> Result<SeedArtifacts> {
    let t = Instant::now();
    let splits = stage_kshot(full, config.k, config.train.eval_split, seed)
        .map_err(|e| e.in_stage("kshot"))?;
    if splits.train.is_empty() || splits.val.is_empty() || splits.test.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "empty split (train {}, val {}, test {})",
            splits.train.len(),
            splits.val.len(),
            splits.test.len()
        ))
        .in_stage("kshot"));
    }
    let kshot_ms = elapsed_ms(t);

    let t = Instant::now();
    let n_components = config.n_components(full.n_relations());
    let gmm = stage_fit_gmm(&splits.train, n_components, &config.em, seed)
        .map_err(|e| e.in_stage("fit-gmm"))?;
    let fit_gmm_ms = elapsed_ms(t);

    let t = Instant::now();
    let (particles, _) =
        stage_svgd(&splits.train, &gmm, &config.svgd, seed).map_err(|e| e.in_stage("svgd"))?;
    let svgd_ms = elapsed_ms(t);

    let t = Instant::now();
    let pack = stage_prompts(
        &splits.train,
        &particles,
        table,
        config.effective_type_init(),
        seed,
    )
    .map_err(|e| e.in_stage("synth-prompts"))?;
    let synth_prompts_ms = elapsed_ms(t);

    let t = Instant::now();
    let model = stage_train(
        &splits.train,
        &splits.val,
        &pack,
        &particles,
        &config.train,
        seed,
    )
    .map_err(|e| e.in_stage("train"))?;
    let train_ms = elapsed_ms(t);

    let t = Instant::now();
    let metrics = evaluate_f1(&model, &splits.test, config.train.null_label)
        .map_err(|e| e.in_stage("eval"))?;
    let eval_ms = elapsed_ms(t);

    let result = SeedResult {
        seed,
        metrics,
        best_epoch: model.best_epoch,
        train_rows: splits.train.len(),
        timings: Some(StageTimings {
            kshot_ms,
            fit_gmm_ms,
            svgd_ms,
            synth_prompts_ms,
            train_ms,
            eval_ms,
        }),
    };
    Ok(SeedArtifacts {
        splits,
        gmm,
        particles,
        pack,
        model,
        result,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolResult {
    pub k: usize,
    pub n_components: usize,
    pub ablation: Ablation,
    pub type_init: TypePromptInit,
    pub seeds: Vec<u64>,
    pub mean_micro_f1: f64,
    /// Population standard deviation across seeds.
    pub std_micro_f1: f64,
    pub mean_macro_f1: f64,
    pub std_macro_f1: f64,
    pub per_seed: Vec<SeedResult>,
}

/// Runs every seed and aggregates F1. Wall-clock timings are kept only when
/// `keep_timings` is set, so the default result is a pure function of its
/// inputs.
pub fn run_seeded_protocol(
    full: &EmbeddingSet,
    config: &PipelineConfig,
    table: &WordEmbeddingTable,
    keep_timings: bool,
) -> Result<ProtocolResult> {
    config.validate()?;
    let mut per_seed = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        let mut result = run_pipeline_seed(full, config, table, seed)?.result;
        if !keep_timings {
            result.timings = None;
        }
        log::info!(
            "seed {seed}: micro-F1 {:.4} (best epoch {})",
            result.metrics.micro_f1,
            result.best_epoch
        );
        per_seed.push(result);
    }
    let micro: Vec<f64> = per_seed.iter().map(|r| r.metrics.micro_f1).collect();
    let macro_: Vec<f64> = per_seed.iter().map(|r| r.metrics.macro_f1).collect();
    let (mean_micro_f1, std_micro_f1) = mean_std(&micro);
    let (mean_macro_f1, std_macro_f1) = mean_std(&macro_);
    Ok(ProtocolResult {
        k: config.k,
        n_components: config.n_components(full.n_relations()),
        ablation: config.ablation,
        type_init: config.effective_type_init(),
        seeds: config.seeds.clone(),
        mean_micro_f1,
        std_micro_f1,
        mean_macro_f1,
        std_macro_f1,
        per_seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding_store::{generate_synthetic_set, SynthConfig};

    fn small_config() -> PipelineConfig {
        PipelineConfig {
            k: 4,
            seeds: vec![3, 8],
            svgd: SvgdConfig {
                n_iters: 40,
                ..SvgdConfig::default()
            },
            train: TrainConfig {
                epochs: 10,
                ..TrainConfig::default()
            },
            ..PipelineConfig::default()
        }
    }

    fn data() -> EmbeddingSet {
        generate_synthetic_set(&SynthConfig {
            n_classes: 4,
            per_class: 30,
            dim: 5,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn splits_are_disjoint_and_sized() {
        let s = stage_kshot(&data(), 4, 0.3, 1).unwrap();
        assert_eq!(s.train.len(), 16);
        assert_eq!(s.val.len(), 16);
        assert_eq!(s.test.len(), 36);
    }

    #[test]
    fn single_seed_has_zero_std() {
        let config = PipelineConfig {
            seeds: vec![5],
            ..small_config()
        };
        let r =
            run_seeded_protocol(&data(), &config, &WordEmbeddingTable::hashed(5), false).unwrap();
        assert_eq!(r.std_micro_f1, 0.0);
        assert!(r.per_seed[0].timings.is_none());
    }

    #[test]
    fn protocol_is_deterministic() {
        let table = WordEmbeddingTable::hashed(5);
        let a = run_seeded_protocol(&data(), &small_config(), &table, false).unwrap();
        let b = run_seeded_protocol(&data(), &small_config(), &table, false).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn ablations_rewire_stages() {
        let table = WordEmbeddingTable::hashed(5);
        let mut config = small_config();
        config.ablation = Ablation {
            gaussian: true,
            del_tpw: true,
        };
        let art = run_pipeline_seed(&data(), &config, &table, 2).unwrap();
        assert_eq!(art.gmm.params.n_components(), 1);
        assert!(art.pack.type_prompts.is_none());
        assert!(art.model.scorer.type_prompts.is_none());
    }

    #[test]
    fn stage_errors_name_the_stage() {
        let config = PipelineConfig {
            components: Some(50),
            ..small_config()
        };
        let err = run_pipeline_seed(&data(), &config, &WordEmbeddingTable::hashed(5), 1)
            .err()
            .unwrap();
        assert!(matches!(
            err,
            Error::Stage {
                stage: "fit-gmm",
                ..
            }
        ));
    }
}
