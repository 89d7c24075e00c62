use comicfuse::classifier::TrainConfig;
use comicfuse::evaluation::MetricReport;
use comicfuse::io::{load_document, load_name_map, load_roster};
use comicfuse::pipeline::{self, read_trace, write_trace, PipelineConfig, PipelineInputs, PipelineTrace};
use comicfuse::relationship::{RescoreConfig, RescoreMode};
use comicfuse::speaker::{
    LevelModel, OracleConfig, PromptOptions, RemoteBackend, RemoteConfig, ScriptedOracle, SpeakerBackend, TemplateSet,
    TranscriptMode,
};
use serde_json::json;

use crate::args::{BackendKind, OracleLevels, RescoreModeArg, RunArgs};
use crate::common::{emit_report, load_corpus, require_out, resolve_paths};
use crate::config::effective;
use crate::error::{CliError, CliResult};
use crate::eval::{check_iou, emit_zero_shot, zero_shot};

pub const DEFAULT_TOKEN_ENV: &str = "COMICFUSE_API_TOKEN";

pub fn pipeline_config(args: &RunArgs) -> PipelineConfig {
    let d = PipelineConfig::default();
    let p = d.prompt;
    let t = d.train;
    let seed = args.seed.unwrap_or(d.seed);
    PipelineConfig {
        iterations: args.iters.unwrap_or(d.iterations),
        rescore: RescoreConfig {
            lambda: args.lambda.unwrap_or(d.rescore.lambda),
            mode: match args.rescore_mode {
                Some(RescoreModeArg::Literal) => RescoreMode::Literal,
                Some(RescoreModeArg::Intent) => RescoreMode::Intent,
                None => d.rescore.mode,
            },
        },
        rescore_reset: args.rescore_reset.unwrap_or(d.rescore_reset),
        min_level: args.min_level.unwrap_or(d.min_level),
        min_prob: args.min_prob.unwrap_or(d.min_prob),
        prompt: PromptOptions {
            ctx: args.ctx.unwrap_or(p.ctx),
            cand: args.cand.unwrap_or(p.cand),
            prob: args.prob.unwrap_or(p.prob),
            chunk_size: args.chunk_size.unwrap_or(p.chunk_size),
        },
        roster_filter_pct: args.roster_filter_pct.unwrap_or(d.roster_filter_pct),
        train: TrainConfig {
            epochs: args.epochs.unwrap_or(t.epochs),
            learning_rate: args.learning_rate.unwrap_or(t.learning_rate),
            l2: args.l2.unwrap_or(t.l2),
            val_fraction: args.val_fraction.unwrap_or(t.val_fraction),
            ensemble_size: args.ensemble_size.unwrap_or(t.ensemble_size),
            seed: t.seed,
        },
        seed,
    }
}

fn oracle_config(args: &RunArgs) -> OracleConfig {
    OracleConfig {
        error_rate: args.oracle_error.unwrap_or(0.0),
        candidate_adopt_prob: args.oracle_adopt.unwrap_or(0.0),
        seed: args.oracle_seed.unwrap_or(0),
        level_model: match args.oracle_levels {
            Some(OracleLevels::Uniform) => LevelModel::Uniform,
            _ => LevelModel::Informative,
        },
    }
}

fn remote_config(args: &RunArgs) -> RemoteConfig {
    let d = RemoteConfig::default();
    let env = args.token_env.as_deref().unwrap_or(DEFAULT_TOKEN_ENV);
    RemoteConfig {
        endpoint: args.endpoint.clone().unwrap_or(d.endpoint),
        auth_token: std::env::var(env).ok().filter(|t| !t.is_empty()),
        model: args.model.clone().unwrap_or(d.model),
        retry_budget: args.retry_budget.unwrap_or(d.retry_budget),
        timeout_secs: args.timeout.unwrap_or(d.timeout_secs),
    }
}

/// Flag combinations that must hold before any file is read.
fn check_flags(args: &RunArgs) -> CliResult<()> {
    let backend = args.backend.unwrap_or(BackendKind::Oracle);
    if backend == BackendKind::Remote {
        match (&args.record, &args.replay) {
            (Some(_), Some(_)) => return Err(CliError::usage("--record and --replay are exclusive")),
            (None, None) => return Err(CliError::usage("--backend remote needs --record or --replay")),
            _ => {}
        }
    }
    if args.zero_shot.unwrap_or(false) && (args.name_map.is_none() || args.gt_document.is_none()) {
        return Err(CliError::usage("--zero-shot needs --name-map and --gt-document"));
    }
    for (flag, v) in [
        ("--oracle-error", args.oracle_error),
        ("--oracle-adopt", args.oracle_adopt),
    ] {
        if v.is_some_and(|v| !(0.0..=1.0).contains(&v)) {
            return Err(CliError::usage(format!("{flag} outside [0, 1]")));
        }
    }
    Ok(())
}

pub fn cmd_run(args: &RunArgs) -> CliResult<()> {
    check_flags(args)?;
    let out = require_out(&args.out)?;
    let paths = resolve_paths(&args.corpus_args())?;
    let config = pipeline_config(args);
    config.validate()?;
    let iou = check_iou(args.iou)?;
    let zero = args.zero_shot.unwrap_or(false);

    let corpus = load_corpus(&paths)?;
    let roster = match &args.roster {
        Some(p) => Some(load_roster(p)?),
        None => None,
    };
    let templates = match &args.templates {
        Some(dir) => TemplateSet::from_dir(dir)?,
        None => TemplateSet::english(),
    };
    let zero_inputs = if zero {
        let truth = load_document(args.gt_document.as_ref().expect("checked"))?;
        let map = load_name_map(args.name_map.as_ref().expect("checked"))?;
        Some((truth, map))
    } else {
        None
    };
    let previous = match &args.resume {
        Some(dir) => Some(read_trace(dir)?),
        None => None,
    };

    let backend_kind = args.backend.unwrap_or(BackendKind::Oracle);
    let (mut backend, backend_meta): (Box<dyn SpeakerBackend>, serde_json::Value) = match backend_kind {
        BackendKind::Oracle => {
            let cfg = oracle_config(args);
            let oracle = ScriptedOracle::new(cfg, &corpus.document).map_err(|e| CliError::input(e.to_string()))?;
            (Box::new(oracle), json!({"kind": "oracle", "oracle": cfg}))
        }
        BackendKind::Remote => {
            let cfg = remote_config(args);
            let (mode, transcript) = match (&args.record, &args.replay) {
                (Some(p), _) => (TranscriptMode::Record(p.clone()), json!({"record": p})),
                (_, Some(p)) => (TranscriptMode::Replay(p.clone()), json!({"replay": p})),
                _ => unreachable!("checked in check_flags"),
            };
            let meta = json!({
                "kind": "remote",
                "endpoint": cfg.endpoint,
                "model": cfg.model,
                "retry_budget": cfg.retry_budget,
                "timeout_secs": cfg.timeout_secs,
                "transcript": transcript,
            });
            (Box::new(RemoteBackend::new(cfg, mode)?), meta)
        }
    };

    let inputs = PipelineInputs {
        document: &corpus.document,
        scores: &corpus.scores,
        features: &corpus.features,
        roster: roster.as_ref(),
        gt_pairs: corpus.gt_pairs.as_deref(),
        templates: &templates,
    };
    let result = match previous {
        Some(trace) => pipeline::resume(&inputs, trace, config.iterations, backend.as_mut()),
        None => pipeline::run(&inputs, &config, backend.as_mut()),
    };
    let describe = |mut trace: PipelineTrace| -> CliResult<PipelineTrace> {
        // The output location is left out so that reruns elsewhere produce identical traces.
        let mut cli = effective(args)?;
        if let Some(m) = cli.as_object_mut() {
            m.remove("out");
        }
        trace.meta.backend = json!({
            "backend": backend_meta,
            "relation": paths.relation,
            "cli": cli,
        });
        Ok(trace)
    };
    let trace_dir = out.join("trace");
    let trace = match result {
        Ok(t) => describe(t)?,
        Err(abort) => {
            let abort = *abort;
            let trace = describe(abort.trace)?;
            write_trace(&trace, &trace_dir)?;
            eprintln!("partial trace written to {}", trace_dir.display());
            return Err(abort.error.into());
        }
    };
    write_trace(&trace, &trace_dir)?;

    if let Some((truth, map)) = zero_inputs {
        let (report, summary) = zero_shot(&trace, &corpus.document, &truth, &map, iou)?;
        return emit_zero_shot(&out, &report, &summary);
    }
    let mut report = MetricReport::new(false);
    report.push_title(
        trace.meta.title.clone(),
        trace.iterations.iter().map(|i| i.metrics.clone()).collect(),
    );
    emit_report(&out, &report)
}
