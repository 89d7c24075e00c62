use comicfuse::io::{save_document, save_features, save_gt_pairs};
use comicfuse::seed;
use comicfuse::synthgen::{difficulty_report, generate, SynthConfig};

use crate::args::GenArgs;
use crate::common::{require_out, write_json};
use crate::error::{CliError, CliResult};

pub fn synth_config(args: &GenArgs) -> SynthConfig {
    let d = SynthConfig::default();
    SynthConfig {
        title: d.title,
        num_pages: args.num_pages.unwrap_or(d.num_pages),
        chars_per_page: args.chars_per_page.unwrap_or(d.chars_per_page),
        texts_per_page: args.texts_per_page.unwrap_or(d.texts_per_page),
        roster_size: args.roster_size.unwrap_or(d.roster_size),
        name_mention_prob: args.name_mention_prob.unwrap_or(d.name_mention_prob),
        nearest_speaker_prob: args.nearest_speaker_prob.unwrap_or(d.nearest_speaker_prob),
        feature_dim: args.feature_dim.unwrap_or(d.feature_dim),
        cluster_sep: args.cluster_sep.unwrap_or(d.cluster_sep),
        seed: args.seed.unwrap_or(d.seed),
    }
}

pub fn cmd_gen(args: &GenArgs) -> CliResult<()> {
    let out = require_out(&args.out)?;
    let base = synth_config(args);
    base.validate().map_err(|e| CliError::usage(e.to_string()))?;
    let titles = args.titles.unwrap_or(1);
    if titles == 0 {
        return Err(CliError::usage("--titles must be at least 1"));
    }
    for i in 0..titles {
        let title = format!("synth-{i:02}");
        let cfg = SynthConfig {
            title: title.clone(),
            seed: seed::derive(base.seed, &[i as u64]),
            ..base.clone()
        };
        let corpus = generate(&cfg).map_err(|e| CliError::usage(e.to_string()))?;
        let dir = out.join(&title);
        save_document(&corpus.document, dir.join("document.json"))?;
        save_gt_pairs(&corpus.gt_pairs, dir.join("gt_pairs.jsonl"))?;
        save_features(&corpus.features, dir.join("features.jsonl"))?;
        let report = difficulty_report(&corpus);
        write_json(&dir.join("difficulty.json"), &report)?;
        println!(
            "{title}: {} texts, distance relationship {:.3}, mention rate {:.3}",
            corpus.document.texts.len(),
            report.distance_relationship.value(),
            report.mention_rate
        );
    }
    Ok(())
}
